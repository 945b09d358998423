#pragma once

// Common surface shared by the neural sequence models (TransFollower, the
// feedforward baseline, the LSTM baseline): a forward pass over the encoder /
// decoder input tensors, named-parameter traversal, and checkpoint glue.

#include <cmath>
#include <functional>
#include <memory>
#include <string>
#include <vector>

#include "json.hpp"
#include "transfollower/checkpoint.hpp"
#include "transfollower/ops.hpp"
#include "transfollower/rng.hpp"
#include "transfollower/tensor.hpp"

namespace transfollower {

enum class AttentionKind { encoder_self, decoder_self, cross };

inline const char* to_string(AttentionKind k) {
  switch (k) {
    case AttentionKind::encoder_self: return "encoder_self";
    case AttentionKind::decoder_self: return "decoder_self";
    case AttentionKind::cross: return "cross";
  }
  return "?";
}

// One (layer, head) attention weight matrix captured during a forward pass,
// with the event time-step indices labelling the query/key axes.
struct AttentionRecord {
  AttentionKind kind;
  std::size_t layer = 0;
  std::size_t head = 0;
  Tensor weights;  // q_len x k_len, detached from the graph
  std::vector<std::size_t> query_steps;
  std::vector<std::size_t> key_steps;
};

inline bool is_row_stochastic(const Tensor& m, double tol = 1e-9) {
  for (std::size_t i = 0; i < m.rows(); ++i) {
    double sum = 0.0;
    for (std::size_t j = 0; j < m.cols(); ++j) {
      const double w = m(i, j);
      if (w < 0.0 || w > 1.0) return false;
      sum += w;
    }
    if (std::abs(sum - 1.0) > tol) return false;
  }
  return true;
}

struct ForwardResult {
  Tensor pred;  // [dec_len x 1] raw speed in m/s
  std::vector<AttentionRecord> attention;
};

using ParamVisitor = std::function<void(const std::string&, Tensor&)>;

class SequenceModel {
public:
  virtual ~SequenceModel() = default;

  // `training` enables dropout (requires rng); `capture_attention` fills
  // ForwardResult::attention for models that have attention.
  virtual ForwardResult forward(const Tensor& enc_raw, const Tensor& dec_raw,
                                bool training = false, Rng* rng = nullptr,
                                bool capture_attention = false) = 0;

  virtual void visit_params(const ParamVisitor& fn) = 0;
  virtual std::string kind() const = 0;
  virtual nlohmann::json config_json() const = 0;

  std::size_t param_count() {
    std::size_t n = 0;
    visit_params([&](const std::string&, Tensor& t) { n += t.size(); });
    return n;
  }

  Checkpoint to_checkpoint() {
    Checkpoint ck;
    ck.kind = kind();
    ck.config = config_json();
    visit_params([&](const std::string& name, Tensor& t) {
      ck.params.emplace_back(name, t.detached());
    });
    return ck;
  }

  void load_params(const Checkpoint& ck) {
    visit_params([&](const std::string& name, Tensor& t) {
      const Tensor* src = ck.find(name);
      if (src == nullptr)
        throw std::runtime_error("checkpoint is missing parameter " + name);
      if (src->shape() != t.shape())
        throw std::runtime_error("checkpoint shape mismatch for " + name);
      t.values() = src->values();
    });
  }
};

// Linear map y = x W + b with W in [fan_in x fan_out]. Weights start
// uniform(-1/sqrt(fan_in), +1/sqrt(fan_in)), biases at zero.
struct Linear {
  Tensor w, b;

  void init(std::size_t fan_in, std::size_t fan_out, Rng& rng) {
    w = Tensor(Shape{fan_in, fan_out});
    const double bound = 1.0 / std::sqrt(static_cast<double>(fan_in));
    for (auto& v : w.values()) v = rng.uniform(-bound, bound);
    w.set_requires_grad(true);
    b = Tensor(Shape{fan_out});
    b.set_requires_grad(true);
  }

  Tensor forward(const Tensor& x) const { return add_row_bias(matmul(x, w), b); }

  void visit(const std::string& prefix, const ParamVisitor& fn) {
    fn(prefix + ".w", w);
    fn(prefix + ".b", b);
  }
};

// Bias-free weight matrix with the same initialization rule.
inline Tensor init_weight(std::size_t fan_in, std::size_t fan_out, Rng& rng) {
  Tensor w(Shape{fan_in, fan_out});
  const double bound = 1.0 / std::sqrt(static_cast<double>(fan_in));
  for (auto& v : w.values()) v = rng.uniform(-bound, bound);
  w.set_requires_grad(true);
  return w;
}

}  // namespace transfollower
