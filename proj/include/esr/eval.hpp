#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "esr/events.hpp"
#include "esr/model.hpp"
#include "esr/train.hpp"

namespace esr::eval {

using events::PolarFrame;

/// sqrt of the mean squared difference over every frame, channel and pixel.
double rmse(const std::vector<PolarFrame>& a, const std::vector<PolarFrame>& b);
double rmse(const PolarFrame& a, const PolarFrame& b);

/// Bicubic upscaling of both count maps by `scale`, negatives clamped to 0.
PolarFrame bicubic_upsample_frame(const PolarFrame& frame, std::uint32_t scale);

struct MethodResult {
  std::string method;
  double rmse = 0.0;  // mean of per-sequence RMSE
  std::size_t params = 0;
  std::uint64_t flops = 0;  // per forward step at the LR resolution
  std::vector<double> per_sequence;
};

struct EvalReport {
  std::vector<MethodResult> methods;

  const MethodResult& at(const std::string& method) const;
  /// `method,rmse,params,flops`
  std::string to_csv() const;
  std::string to_table() const;
};

/// Scores the model and the bicubic baseline on the same LR inputs.
template <typename T>
EvalReport evaluate(const model::ModelState<T>& state, const std::vector<train::Sample>& dataset);

/// Binary PPM: white background, blue for positive and red for negative
/// counts, purple where both are equal and non-zero. Intensity is
/// 255 * min(1, count / frame max).
std::string render_ppm(const PolarFrame& frame);
void render_frame(const PolarFrame& frame, const std::string& path);

}  // namespace esr::eval
