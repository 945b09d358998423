#pragma once

// Car-following domain types, model input construction, the kinematic
// spacing rollout, and the masked MSE training loss.

#include <algorithm>
#include <cmath>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "json.hpp"
#include "transfollower/ops.hpp"
#include "transfollower/tensor.hpp"
#include "transfollower/transformer.hpp"

namespace transfollower {

// Instantaneous car-following state. rel_speed is lv - fv: positive when the
// gap is opening.
struct CFState {
  double spacing = 0.0;   // m, > 0
  double fv_speed = 0.0;  // m/s, >= 0
  double rel_speed = 0.0; // m/s
};

// One car-following episode: aligned 10 Hz series for the following vehicle
// speed, lead vehicle speed, and bumper-to-bumper spacing.
struct CFEvent {
  std::string id;
  double dt = 0.1;
  std::vector<double> fv_speed;
  std::vector<double> lv_speed;
  std::vector<double> spacing;
  std::string source = "synthetic";  // "synthetic" | "ingested"

  std::size_t length() const { return fv_speed.size(); }
  double rel_speed(std::size_t t) const { return lv_speed[t] - fv_speed[t]; }
};

constexpr int kEventSchemaVersion = 1;
constexpr std::size_t kTrimmedLength = 150;  // 15 s at 10 Hz

inline void to_json(nlohmann::json& j, const CFEvent& e) {
  j = {{"schema_version", kEventSchemaVersion}, {"id", e.id},     {"dt", e.dt},
       {"source", e.source},                    {"fv_speed", e.fv_speed},
       {"lv_speed", e.lv_speed},                {"spacing", e.spacing}};
}

inline void from_json(const nlohmann::json& j, CFEvent& e) {
  if (j.value("schema_version", 1) != kEventSchemaVersion)
    throw std::runtime_error("unsupported event schema_version");
  e.id = j.at("id").get<std::string>();
  e.dt = j.at("dt").get<double>();
  e.source = j.at("source").get<std::string>();
  e.fv_speed = j.at("fv_speed").get<std::vector<double>>();
  e.lv_speed = j.at("lv_speed").get<std::vector<double>>();
  e.spacing = j.at("spacing").get<std::vector<double>>();
}

// Checks the CFEvent invariants; throws with the offending detail.
// The trapezoid-consistency check applies to synthetic events only (ingested
// radar series are not integrated quantities).
inline void validate_event(const CFEvent& e) {
  const std::size_t n = e.length();
  if (e.lv_speed.size() != n || e.spacing.size() != n)
    throw std::invalid_argument("event " + e.id + ": series lengths differ");
  if (n == 0) throw std::invalid_argument("event " + e.id + ": empty series");
  for (std::size_t t = 0; t < n; ++t) {
    if (!(e.spacing[t] > 0.0))
      throw std::invalid_argument("event " + e.id + ": non-positive spacing at step " +
                                  std::to_string(t));
    if (e.fv_speed[t] < 0.0 || e.lv_speed[t] < 0.0)
      throw std::invalid_argument("event " + e.id + ": negative speed at step " +
                                  std::to_string(t));
  }
  if (e.source == "synthetic") {
    for (std::size_t t = 0; t + 1 < n; ++t) {
      const double expected =
          e.spacing[t] + 0.5 * (e.rel_speed(t) + e.rel_speed(t + 1)) * e.dt;
      if (std::abs(e.spacing[t + 1] - expected) > 1e-6)
        throw std::invalid_argument("event " + e.id +
                                    ": spacing inconsistent with speeds at step " +
                                    std::to_string(t));
    }
  }
}

inline void require_trimmed(const CFEvent& e, const ModelConfig& cfg) {
  const std::size_t need = cfg.history_steps + cfg.horizon_steps;
  if (e.length() != need)
    throw std::invalid_argument("event " + e.id + ": expected " + std::to_string(need) +
                                " samples, got " + std::to_string(e.length()));
}

// Encoder input: rows t = 0..H-1 of [spacing, fv speed, relative speed].
inline Tensor build_encoder_input(const CFEvent& e, const ModelConfig& cfg) {
  require_trimmed(e, cfg);
  const std::size_t h = cfg.history_steps;
  Tensor x(Shape{h, 3});
  for (std::size_t t = 0; t < h; ++t) {
    x(t, 0) = e.spacing[t];
    x(t, 1) = e.fv_speed[t];
    x(t, 2) = e.rel_speed(t);
  }
  return x;
}

// Decoder input covering event steps [t-D, t+T) with t = end of history:
// column 0 is the lead-vehicle speed over the whole window, column 1 is the
// observed follower speed over the initial token followed by the token mean
// as the placeholder for the future.
inline Tensor build_decoder_input(const CFEvent& e, const ModelConfig& cfg) {
  require_trimmed(e, cfg);
  const std::size_t d = cfg.token_steps, t0 = cfg.decoder_offset();
  const std::size_t len = cfg.decoder_len();
  double token_mean = 0.0;
  for (std::size_t i = 0; i < d; ++i) token_mean += e.fv_speed[t0 + i];
  token_mean /= static_cast<double>(d);

  Tensor x(Shape{len, 2});
  for (std::size_t i = 0; i < len; ++i) {
    x(i, 0) = e.lv_speed[t0 + i];
    x(i, 1) = i < d ? e.fv_speed[t0 + i] : token_mean;
  }
  return x;
}

// Trapezoidal integration of relative speed: S(t+1) = S(t) + (dV(t)+dV(t+1))/2 * dt.
// Returns a series aligned with the inputs; element 0 equals s0. Spacing is
// not clamped: a non-positive value signals a predicted crash and is reported
// as such by callers, never hidden.
inline std::vector<double> rollout_spacing(double s0, std::span<const double> lv_speed,
                                           std::span<const double> fv_speed, double dt) {
  if (lv_speed.size() != fv_speed.size())
    throw std::invalid_argument("rollout_spacing: speed series lengths differ");
  std::vector<double> out(lv_speed.size());
  if (out.empty()) return out;
  out[0] = s0;
  double prev_dv = lv_speed[0] - fv_speed[0];
  for (std::size_t t = 1; t < out.size(); ++t) {
    const double dv = lv_speed[t] - fv_speed[t];
    out[t] = out[t - 1] + 0.5 * (prev_dv + dv) * dt;
    prev_dv = dv;
  }
  return out;
}

namespace detail {

inline Tensor flatten_prediction(const Tensor& pred, const ModelConfig& cfg) {
  const std::size_t len = cfg.decoder_len();
  if (pred.size() != len)
    throw std::invalid_argument("prediction must have " + std::to_string(len) +
                                " entries, got shape " + shape_str(pred.shape()));
  return pred.ndim() == 1 ? pred : reshape(pred, Shape{len});
}

}  // namespace detail

// Differentiable spacing rollout for the loss: predicted spacing over the T
// future steps, seeded at the last observed spacing, with the relative speed
// at the seed step taken from the observation (the first D prediction entries
// are never used, matching the loss mask). The cumulative trapezoid is linear
// in the prediction, so the hand-written adjoint below is exact.
inline Tensor predicted_future_spacing(const Tensor& pred, const CFEvent& e,
                                       const ModelConfig& cfg) {
  require_trimmed(e, cfg);
  Tensor p = detail::flatten_prediction(pred, cfg);
  const std::size_t t0 = cfg.history_steps - 1;  // last observed step
  const std::size_t d = cfg.token_steps, horizon = cfg.horizon_steps;
  const double dt = cfg.dt;

  Tensor out(Shape{horizon});
  double s = e.spacing[t0];
  double prev_dv = e.rel_speed(t0);
  for (std::size_t j = 0; j < horizon; ++j) {
    const std::size_t step = t0 + 1 + j;
    const double dv = e.lv_speed[step] - p(d + j);
    s += 0.5 * (prev_dv + dv) * dt;
    out(j) = s;
    prev_dv = dv;
  }
  if (detail::should_record({&p})) {
    Tape::current()->record(out, {p}, [p, d, horizon, dt](const auto& dout, const auto& adj_of) {
      auto& dp = adj_of(p);
      double suffix = 0.0;
      for (std::size_t m = horizon; m-- > 0;) {
        suffix += dout[m];
        dp[d + m] += dt * (0.5 * dout[m] - suffix);
      }
    });
  }
  return out;
}

// Masked training loss: speed MSE over the T future steps plus spacing MSE
// over the same steps (predicted spacing from the rollout above), summed with
// equal weights. The first D prediction entries do not enter at all.
inline Tensor cf_loss(const Tensor& pred, const CFEvent& e, const ModelConfig& cfg) {
  require_trimmed(e, cfg);
  Tensor p = detail::flatten_prediction(pred, cfg);
  const std::size_t h = cfg.history_steps, horizon = cfg.horizon_steps;

  Tensor future = slice_rows(p, cfg.token_steps, cfg.decoder_len());
  Tensor obs_speed(Shape{horizon},
                   std::vector<double>(e.fv_speed.begin() + h, e.fv_speed.end()));
  Tensor dv = sub(future, obs_speed);
  Tensor speed_mse = mean_all(mul(dv, dv));

  Tensor pred_spacing = predicted_future_spacing(p, e, cfg);
  Tensor obs_spacing(Shape{horizon},
                     std::vector<double>(e.spacing.begin() + h, e.spacing.end()));
  Tensor ds = sub(pred_spacing, obs_spacing);
  Tensor spacing_mse = mean_all(mul(ds, ds));

  return add(speed_mse, spacing_mse);
}

// Prediction quality of one event, computed on the reported trajectory:
// speeds clamped at zero (reporting convention; the differentiable loss never
// clamps) and spacing from the same Eq.-8 rollout as the loss.
struct PredictionResult {
  std::vector<double> fv_speed;  // T future steps
  std::vector<double> spacing;   // T future steps
  double speed_mse = 0.0;
  double spacing_mse = 0.0;
  double combined_mse = 0.0;  // always speed_mse + spacing_mse
  bool crash = false;
};

inline PredictionResult make_prediction_result(std::span<const double> full_pred,
                                               const CFEvent& e, const ModelConfig& cfg) {
  require_trimmed(e, cfg);
  if (full_pred.size() != cfg.decoder_len())
    throw std::invalid_argument("prediction length mismatch");
  const std::size_t h = cfg.history_steps, d = cfg.token_steps;
  const std::size_t horizon = cfg.horizon_steps;
  const std::size_t t0 = h - 1;

  PredictionResult r;
  r.fv_speed.resize(horizon);
  for (std::size_t j = 0; j < horizon; ++j)
    r.fv_speed[j] = std::max(0.0, full_pred[d + j]);

  r.spacing.resize(horizon);
  double s = e.spacing[t0];
  double prev_dv = e.rel_speed(t0);
  for (std::size_t j = 0; j < horizon; ++j) {
    const std::size_t step = t0 + 1 + j;
    const double dv = e.lv_speed[step] - r.fv_speed[j];
    s += 0.5 * (prev_dv + dv) * cfg.dt;
    r.spacing[j] = s;
    prev_dv = dv;
    if (s <= 0.0) r.crash = true;
  }

  for (std::size_t j = 0; j < horizon; ++j) {
    const double ev = r.fv_speed[j] - e.fv_speed[h + j];
    const double es = r.spacing[j] - e.spacing[h + j];
    r.speed_mse += ev * ev;
    r.spacing_mse += es * es;
  }
  r.speed_mse /= static_cast<double>(horizon);
  r.spacing_mse /= static_cast<double>(horizon);
  r.combined_mse = r.speed_mse + r.spacing_mse;
  return r;
}

}  // namespace transfollower
