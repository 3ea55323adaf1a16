#pragma once

#include <iosfwd>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include "esr/kv_config.hpp"
#include "esr/model.hpp"
#include "esr/tensor_io.hpp"

// Checkpoint layout:
//   "BMC1\n"
//   key=value header lines (model config, dtype, iteration, extras)
//   "\n"
//   u32 tensor count, then per tensor: u32 name length, name bytes, tensor dump
// Model parameters come first in declaration order; optimizer state and
// other extras follow under their own names.
namespace esr::ckpt {

template <typename T>
using NamedTensors = std::vector<std::pair<std::string, const nd::Tensor<T>*>>;

template <typename T>
void write_checkpoint(std::ostream& out, const KvConfig& header, const NamedTensors<T>& tensors);

template <typename T>
struct RawCheckpoint {
  KvConfig header;
  std::vector<std::pair<std::string, nd::Tensor<T>>> tensors;
};

/// Reads any checkpoint; tensors are converted to T from the stored dtype.
template <typename T>
RawCheckpoint<T> read_checkpoint(std::istream& in);

template <typename T>
struct LoadedModel {
  model::ModelState<T> state;
  KvConfig header;
  std::map<std::string, nd::Tensor<T>> extras;  // tensors that are not model parameters
};

template <typename T>
void save_model(const std::string& path, const model::ModelState<T>& state, const KvConfig& extra_header = {},
                const NamedTensors<T>& extra_tensors = {});

/// Rebuilds the model from the stored config and fills every parameter;
/// missing or mis-shaped parameters raise IoError.
template <typename T>
LoadedModel<T> load_model(const std::string& path);

}  // namespace esr::ckpt
