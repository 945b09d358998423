#pragma once

// TransFollower: transformer encoder-decoder for car-following trajectory
// prediction. Input projections plus a learnable positional lookup table,
// a self-attention encoder stack over the driving history, and a single
// decoder layer with unmasked self-attention and cross-attention over the
// encoder output, followed by a linear speed head.

#include <cstdint>
#include <memory>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "json.hpp"
#include "transfollower/model.hpp"

namespace transfollower {

struct ModelConfig {
  std::size_t d_model = 256;
  std::size_t n_heads = 8;
  std::size_t encoder_layers = 2;
  std::size_t decoder_layers = 1;
  std::size_t ff_dim = 1024;
  double dropout = 0.1;
  std::size_t pos_table_size = 150;
  std::size_t enc_input_dim = 3;   // [spacing, fv speed, relative speed]
  std::size_t dec_input_dim = 2;   // [lv speed, fv token/placeholder]
  std::size_t history_steps = 40;  // encoder sequence length (4 s at 10 Hz)
  std::size_t token_steps = 10;    // decoder initial token length D
  std::size_t horizon_steps = 110; // prediction horizon T
  double dt = 0.1;

  std::size_t head_dim() const { return d_model / n_heads; }
  std::size_t decoder_len() const { return token_steps + horizon_steps; }
  // Event time step of the first decoder position (t - D with t = history end).
  std::size_t decoder_offset() const { return history_steps - token_steps; }

  void validate() const {
    if (d_model == 0 || n_heads == 0 || d_model % n_heads != 0)
      throw std::invalid_argument("ModelConfig: d_model must be a positive multiple of n_heads");
    if (decoder_len() > pos_table_size || history_steps > pos_table_size)
      throw std::invalid_argument("ModelConfig: sequence lengths exceed positional table size");
    if (history_steps < token_steps)
      throw std::invalid_argument("ModelConfig: token_steps cannot exceed history_steps");
    if (dropout < 0.0 || dropout >= 1.0)
      throw std::invalid_argument("ModelConfig: dropout must be in [0, 1)");
    if (dt <= 0.0) throw std::invalid_argument("ModelConfig: dt must be positive");
  }
};

inline void to_json(nlohmann::json& j, const ModelConfig& c) {
  j = {{"d_model", c.d_model},
       {"n_heads", c.n_heads},
       {"encoder_layers", c.encoder_layers},
       {"decoder_layers", c.decoder_layers},
       {"ff_dim", c.ff_dim},
       {"dropout", c.dropout},
       {"pos_table_size", c.pos_table_size},
       {"enc_input_dim", c.enc_input_dim},
       {"dec_input_dim", c.dec_input_dim},
       {"history_steps", c.history_steps},
       {"token_steps", c.token_steps},
       {"horizon_steps", c.horizon_steps},
       {"dt", c.dt}};
}

inline void from_json(const nlohmann::json& j, ModelConfig& c) {
  c.d_model = j.value("d_model", c.d_model);
  c.n_heads = j.value("n_heads", c.n_heads);
  c.encoder_layers = j.value("encoder_layers", c.encoder_layers);
  c.decoder_layers = j.value("decoder_layers", c.decoder_layers);
  c.ff_dim = j.value("ff_dim", c.ff_dim);
  c.dropout = j.value("dropout", c.dropout);
  c.pos_table_size = j.value("pos_table_size", c.pos_table_size);
  c.enc_input_dim = j.value("enc_input_dim", c.enc_input_dim);
  c.dec_input_dim = j.value("dec_input_dim", c.dec_input_dim);
  c.history_steps = j.value("history_steps", c.history_steps);
  c.token_steps = j.value("token_steps", c.token_steps);
  c.horizon_steps = j.value("horizon_steps", c.horizon_steps);
  c.dt = j.value("dt", c.dt);
}

namespace detail {

constexpr double kLayerNormEps = 1e-5;

struct LayerNormParams {
  Tensor gamma, beta;
  void init() {
    gamma = Tensor::scalar(1.0);
    gamma.set_requires_grad(true);
    beta = Tensor::scalar(0.0);
    beta.set_requires_grad(true);
  }
  Tensor apply(const Tensor& x) const {
    return layer_norm(x, gamma, beta, kLayerNormEps);
  }
  void visit(const std::string& prefix, const ParamVisitor& fn) {
    fn(prefix + ".gamma", gamma);
    fn(prefix + ".beta", beta);
  }
};

// Per-head projections W_q, W_k, W_v in [d x k] and the output map W_c in
// [k x d]; head outputs are summed, not concatenated.
struct MultiHeadAttention {
  struct Head {
    Tensor wq, wk, wv, wc;
  };
  std::vector<Head> heads;
  std::size_t key_dim = 0;

  void init(std::size_t d, std::size_t n_heads, Rng& rng) {
    key_dim = d / n_heads;
    heads.resize(n_heads);
    for (auto& h : heads) {
      h.wq = init_weight(d, key_dim, rng);
      h.wk = init_weight(d, key_dim, rng);
      h.wv = init_weight(d, key_dim, rng);
      h.wc = init_weight(key_dim, d, rng);
    }
  }

  Tensor forward(const Tensor& q_src, const Tensor& kv_src,
                 std::vector<AttentionRecord>* sink, AttentionKind kind,
                 std::size_t layer, const std::vector<std::size_t>& q_steps,
                 const std::vector<std::size_t>& k_steps) const {
    const double inv_sqrt_k = 1.0 / std::sqrt(static_cast<double>(key_dim));
    Tensor out;
    for (std::size_t h = 0; h < heads.size(); ++h) {
      const auto& hp = heads[h];
      Tensor q = matmul(q_src, hp.wq);
      Tensor k = matmul(kv_src, hp.wk);
      Tensor v = matmul(kv_src, hp.wv);
      Tensor alpha = softmax_rows(scale(matmul(q, transpose(k)), inv_sqrt_k));
      if (sink != nullptr)
        sink->push_back({kind, layer, h, alpha.detached(), q_steps, k_steps});
      Tensor contrib = matmul(matmul(alpha, v), hp.wc);
      out = h == 0 ? contrib : add(out, contrib);
    }
    return out;
  }

  void visit(const std::string& prefix, const ParamVisitor& fn) {
    for (std::size_t h = 0; h < heads.size(); ++h) {
      const std::string p = prefix + ".head" + std::to_string(h);
      fn(p + ".wq", heads[h].wq);
      fn(p + ".wk", heads[h].wk);
      fn(p + ".wv", heads[h].wv);
      fn(p + ".wc", heads[h].wc);
    }
  }
};

// Post-norm block: residual add, then layer norm, after each sub-layer.
// Dropout sits on the sub-layer output, inside the residual.
struct EncoderLayer {
  MultiHeadAttention attn;
  LayerNormParams ln1, ln2;
  Tensor w1, w2;  // feedforward d -> m -> d, no biases

  void init(const ModelConfig& cfg, Rng& rng) {
    attn.init(cfg.d_model, cfg.n_heads, rng);
    ln1.init();
    w1 = init_weight(cfg.d_model, cfg.ff_dim, rng);
    w2 = init_weight(cfg.ff_dim, cfg.d_model, rng);
    ln2.init();
  }

  Tensor forward(const Tensor& x, double p, bool training, Rng* rng,
                 std::vector<AttentionRecord>* sink, std::size_t layer,
                 const std::vector<std::size_t>& steps) const {
    Tensor a = attn.forward(x, x, sink, AttentionKind::encoder_self, layer, steps, steps);
    if (training) a = dropout(a, p, *rng, true);
    Tensor u = ln1.apply(add(x, a));
    Tensor f = matmul(relu(matmul(u, w1)), w2);
    if (training) f = dropout(f, p, *rng, true);
    return ln2.apply(add(u, f));
  }

  void visit(const std::string& prefix, const ParamVisitor& fn) {
    attn.visit(prefix + ".attn", fn);
    ln1.visit(prefix + ".ln1", fn);
    fn(prefix + ".ffn.w1", w1);
    fn(prefix + ".ffn.w2", w2);
    ln2.visit(prefix + ".ln2", fn);
  }
};

// Decoder block: unmasked self-attention, cross-attention with queries from
// the decoder and keys/values from the encoder output, then the feedforward;
// residual + norm after each sub-layer.
struct DecoderLayer {
  MultiHeadAttention self_attn, cross_attn;
  LayerNormParams ln1, ln2, ln3;
  Tensor w1, w2;

  void init(const ModelConfig& cfg, Rng& rng) {
    self_attn.init(cfg.d_model, cfg.n_heads, rng);
    ln1.init();
    cross_attn.init(cfg.d_model, cfg.n_heads, rng);
    ln2.init();
    w1 = init_weight(cfg.d_model, cfg.ff_dim, rng);
    w2 = init_weight(cfg.ff_dim, cfg.d_model, rng);
    ln3.init();
  }

  Tensor forward(const Tensor& x, const Tensor& enc_hidden, double p, bool training,
                 Rng* rng, std::vector<AttentionRecord>* sink, std::size_t layer,
                 const std::vector<std::size_t>& dec_steps,
                 const std::vector<std::size_t>& enc_steps) const {
    Tensor a = self_attn.forward(x, x, sink, AttentionKind::decoder_self, layer,
                                 dec_steps, dec_steps);
    if (training) a = dropout(a, p, *rng, true);
    Tensor u = ln1.apply(add(x, a));
    Tensor c = cross_attn.forward(u, enc_hidden, sink, AttentionKind::cross, layer,
                                  dec_steps, enc_steps);
    if (training) c = dropout(c, p, *rng, true);
    Tensor w = ln2.apply(add(u, c));
    Tensor f = matmul(relu(matmul(w, w1)), w2);
    if (training) f = dropout(f, p, *rng, true);
    return ln3.apply(add(w, f));
  }

  void visit(const std::string& prefix, const ParamVisitor& fn) {
    self_attn.visit(prefix + ".self_attn", fn);
    ln1.visit(prefix + ".ln1", fn);
    cross_attn.visit(prefix + ".cross_attn", fn);
    ln2.visit(prefix + ".ln2", fn);
    fn(prefix + ".ffn.w1", w1);
    fn(prefix + ".ffn.w2", w2);
    ln3.visit(prefix + ".ln3", fn);
  }
};

}  // namespace detail

class TransFollowerModel final : public SequenceModel {
public:
  struct EncoderState {
    Tensor hidden;  // [history_steps x d_model]
    std::vector<AttentionRecord> records;
  };

  explicit TransFollowerModel(ModelConfig cfg, std::uint64_t init_seed = 0)
      : cfg_(std::move(cfg)) {
    cfg_.validate();
    Rng rng = Rng::derive(init_seed, 0x7f01);
    enc_proj_.init(cfg_.enc_input_dim, cfg_.d_model, rng);
    dec_proj_.init(cfg_.dec_input_dim, cfg_.d_model, rng);
    enc_pos_ = init_weight(cfg_.pos_table_size, cfg_.d_model, rng);
    dec_pos_ = init_weight(cfg_.pos_table_size, cfg_.d_model, rng);
    enc_layers_.resize(cfg_.encoder_layers);
    for (auto& l : enc_layers_) l.init(cfg_, rng);
    dec_layers_.resize(cfg_.decoder_layers);
    for (auto& l : dec_layers_) l.init(cfg_, rng);
    head_.init(cfg_.d_model, 1, rng);
  }

  const ModelConfig& config() const { return cfg_; }

  // Linear projection of each raw row plus the positional embedding for its
  // position; separate tables for the encoder and decoder sides.
  Tensor embed_inputs(const Tensor& raw, const std::vector<std::size_t>& positions,
                      bool decoder_side) const {
    const auto& proj = decoder_side ? dec_proj_ : enc_proj_;
    const auto& table = decoder_side ? dec_pos_ : enc_pos_;
    if (raw.ndim() != 2 || raw.cols() != proj.w.rows())
      throw std::invalid_argument("embed_inputs: raw input shape " +
                                  detail::shape_str(raw.shape()) + " does not match " +
                                  std::string(decoder_side ? "decoder" : "encoder") +
                                  " input dimension");
    if (positions.size() != raw.rows())
      throw std::invalid_argument("embed_inputs: one position per input row required");
    return add(proj.forward(raw), embedding_rows(table, positions));
  }

  EncoderState encode(const Tensor& enc_raw, bool training = false, Rng* rng = nullptr,
                      bool capture_attention = false) const {
    if (enc_raw.ndim() != 2 || enc_raw.rows() != cfg_.history_steps ||
        enc_raw.cols() != cfg_.enc_input_dim)
      throw std::invalid_argument("encode: expected [" +
                                  std::to_string(cfg_.history_steps) + "x" +
                                  std::to_string(cfg_.enc_input_dim) + "] input, got " +
                                  detail::shape_str(enc_raw.shape()));
    require_rng(training, rng);
    std::vector<std::size_t> steps(cfg_.history_steps);
    for (std::size_t i = 0; i < steps.size(); ++i) steps[i] = i;

    EncoderState state;
    Tensor x = embed_inputs(enc_raw, steps, /*decoder_side=*/false);
    auto* sink = capture_attention ? &state.records : nullptr;
    for (std::size_t l = 0; l < enc_layers_.size(); ++l)
      x = enc_layers_[l].forward(x, cfg_.dropout, training, rng, sink, l, steps);
    state.hidden = x;
    return state;
  }

  std::pair<Tensor, std::vector<AttentionRecord>> decode(
      const Tensor& dec_raw, const EncoderState& enc, bool training = false,
      Rng* rng = nullptr, bool capture_attention = false) const {
    if (dec_raw.ndim() != 2 || dec_raw.rows() != cfg_.decoder_len() ||
        dec_raw.cols() != cfg_.dec_input_dim)
      throw std::invalid_argument("decode: expected [" +
                                  std::to_string(cfg_.decoder_len()) + "x" +
                                  std::to_string(cfg_.dec_input_dim) + "] input, got " +
                                  detail::shape_str(dec_raw.shape()));
    if (!enc.hidden.defined() || enc.hidden.ndim() != 2 ||
        enc.hidden.rows() != cfg_.history_steps || enc.hidden.cols() != cfg_.d_model)
      throw std::invalid_argument("decode: encoder state does not match this model");
    require_rng(training, rng);

    std::vector<std::size_t> dec_positions(cfg_.decoder_len());
    std::vector<std::size_t> dec_steps(cfg_.decoder_len());
    for (std::size_t i = 0; i < dec_positions.size(); ++i) {
      dec_positions[i] = i;  // decoder positions are relative to its own start
      dec_steps[i] = cfg_.decoder_offset() + i;
    }
    std::vector<std::size_t> enc_steps(cfg_.history_steps);
    for (std::size_t i = 0; i < enc_steps.size(); ++i) enc_steps[i] = i;

    std::vector<AttentionRecord> records;
    auto* sink = capture_attention ? &records : nullptr;
    Tensor x = embed_inputs(dec_raw, dec_positions, /*decoder_side=*/true);
    for (std::size_t l = 0; l < dec_layers_.size(); ++l)
      x = dec_layers_[l].forward(x, enc.hidden, cfg_.dropout, training, rng, sink, l,
                                 dec_steps, enc_steps);
    return {head_.forward(x), std::move(records)};
  }

  ForwardResult forward(const Tensor& enc_raw, const Tensor& dec_raw,
                        bool training = false, Rng* rng = nullptr,
                        bool capture_attention = false) override {
    EncoderState enc = encode(enc_raw, training, rng, capture_attention);
    auto [pred, dec_records] = decode(dec_raw, enc, training, rng, capture_attention);
    ForwardResult res;
    res.pred = std::move(pred);
    res.attention = std::move(enc.records);
    res.attention.insert(res.attention.end(),
                         std::make_move_iterator(dec_records.begin()),
                         std::make_move_iterator(dec_records.end()));
    return res;
  }

  void visit_params(const ParamVisitor& fn) override {
    enc_proj_.visit("enc_proj", fn);
    dec_proj_.visit("dec_proj", fn);
    fn("enc_pos", enc_pos_);
    fn("dec_pos", dec_pos_);
    for (std::size_t l = 0; l < enc_layers_.size(); ++l)
      enc_layers_[l].visit("encoder." + std::to_string(l), fn);
    for (std::size_t l = 0; l < dec_layers_.size(); ++l)
      dec_layers_[l].visit("decoder." + std::to_string(l), fn);
    head_.visit("speed_head", fn);
  }

  std::string kind() const override { return "transfollower"; }
  nlohmann::json config_json() const override { return cfg_; }

private:
  static void require_rng(bool training, Rng* rng) {
    if (training && rng == nullptr)
      throw std::logic_error("training-mode forward requires an Rng for dropout");
  }

  ModelConfig cfg_;
  Linear enc_proj_, dec_proj_;
  Tensor enc_pos_, dec_pos_;
  std::vector<detail::EncoderLayer> enc_layers_;
  std::vector<detail::DecoderLayer> dec_layers_;
  Linear head_;
};

}  // namespace transfollower
