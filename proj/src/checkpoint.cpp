#include "esr/checkpoint.hpp"

#include <fstream>
#include <istream>
#include <ostream>
#include <sstream>

#include "esr/error.hpp"

namespace esr::ckpt {

namespace {

constexpr const char* kMagic = "BMC1";

}  // namespace

template <typename T>
void write_checkpoint(std::ostream& out, const KvConfig& header, const NamedTensors<T>& tensors) {
  out << kMagic << '\n';
  KvConfig h = header;
  h.set("dtype", std::string(nd::to_string(nd::dtype_of<T>())));
  for (const auto& [key, value] : h.values()) out << key << '=' << value << '\n';
  out << '\n';
  nd::write_u32(out, static_cast<std::uint32_t>(tensors.size()));
  for (const auto& [name, tensor] : tensors) {
    nd::write_u32(out, static_cast<std::uint32_t>(name.size()));
    out.write(name.data(), static_cast<std::streamsize>(name.size()));
    nd::write_tensor(out, *tensor);
  }
  if (!out) throw IoError("checkpoint: write failed");
}

template <typename T>
RawCheckpoint<T> read_checkpoint(std::istream& in) {
  std::string line;
  if (!std::getline(in, line) || line != kMagic) throw IoError("checkpoint: missing BMC1 magic");
  std::string header_text;
  while (true) {
    if (!std::getline(in, line)) throw IoError("checkpoint: truncated header");
    if (line.empty()) break;
    header_text += line + '\n';
  }
  RawCheckpoint<T> ck;
  try {
    ck.header = KvConfig::parse(header_text);
  } catch (const ParseError& e) {
    throw IoError(std::string("checkpoint: bad header: ") + e.what());
  }
  const nd::DType stored = nd::parse_dtype(ck.header.get_string("dtype"));
  const std::uint32_t count = nd::read_u32(in);
  for (std::uint32_t i = 0; i < count; ++i) {
    const std::uint32_t len = nd::read_u32(in);
    if (len > 4096) throw IoError("checkpoint: implausible tensor name length");
    std::string name(len, '\0');
    in.read(name.data(), len);
    if (!in) throw IoError("checkpoint: truncated tensor name");
    ck.tensors.emplace_back(std::move(name), nd::read_tensor<T>(in, stored));
  }
  return ck;
}

template <typename T>
void save_model(const std::string& path, const model::ModelState<T>& state, const KvConfig& extra_header,
                const NamedTensors<T>& extra_tensors) {
  KvConfig header = state.config.to_kv();
  for (const auto& [key, value] : extra_header.values()) header.set(key, value);
  header.set("iteration", std::to_string(state.iteration));

  NamedTensors<T> tensors;
  model::visit_parameters(state, [&](const std::string& name, const nd::Parameter<T>& p) {
    tensors.emplace_back(name, &p.value);
  });
  tensors.insert(tensors.end(), extra_tensors.begin(), extra_tensors.end());

  std::ostringstream buf(std::ios::binary);
  write_checkpoint(buf, header, tensors);
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw IoError("cannot open '" + path + "' for writing");
  const std::string bytes = buf.str();
  f.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!f) throw IoError("write to '" + path + "' failed");
}

template <typename T>
LoadedModel<T> load_model(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot open checkpoint '" + path + "'");
  RawCheckpoint<T> raw = read_checkpoint<T>(f);

  LoadedModel<T> out;
  out.header = raw.header;
  try {
    out.state = model::init_model<T>(model::ModelConfig::from_kv(raw.header));
    out.state.iteration = raw.header.get_int("iteration", 0);
  } catch (const std::exception& e) {
    throw IoError("checkpoint '" + path + "': bad config: " + e.what());
  }

  std::map<std::string, nd::Tensor<T>> by_name;
  for (auto& [name, t] : raw.tensors) by_name[name] = std::move(t);
  model::visit_parameters(out.state, [&](const std::string& name, nd::Parameter<T>& p) {
    auto it = by_name.find(name);
    if (it == by_name.end()) throw IoError("checkpoint '" + path + "': missing tensor " + name);
    if (it->second.shape() != p.value.shape()) {
      throw IoError("checkpoint '" + path + "': tensor " + name + " has shape " + nd::to_string(it->second.shape()) +
                    ", expected " + nd::to_string(p.value.shape()));
    }
    p = nd::Parameter<T>(std::move(it->second));
    by_name.erase(it);
  });
  out.extras = std::move(by_name);
  return out;
}

#define ESR_INSTANTIATE_CKPT(T)                                                                   \
  template void write_checkpoint<T>(std::ostream&, const KvConfig&, const NamedTensors<T>&);      \
  template RawCheckpoint<T> read_checkpoint<T>(std::istream&);                                    \
  template void save_model<T>(const std::string&, const model::ModelState<T>&, const KvConfig&,   \
                              const NamedTensors<T>&);                                            \
  template LoadedModel<T> load_model<T>(const std::string&);

ESR_INSTANTIATE_CKPT(float)
ESR_INSTANTIATE_CKPT(double)

}  // namespace esr::ckpt
