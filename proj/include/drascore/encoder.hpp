#pragma once

#include <cmath>
#include <string>
#include <vector>

#include "drascore/affine.hpp"
#include "drascore/common.hpp"
#include "drascore/params.hpp"
#include "drascore/rng.hpp"
#include "drascore/tensor.hpp"

#include <json.hpp>

namespace drascore {

// How the anatomical location enters the encoder. loc_cond_conv is the
// production path; the others exist for the conditioning comparison runner.
enum class Conditioning { kLocCondConv, kNone, kConcat, kHyperNet };

inline Conditioning conditioning_from_string(const std::string& s) {
  if (s == "loc_cond_conv") return Conditioning::kLocCondConv;
  if (s == "none") return Conditioning::kNone;
  if (s == "concat") return Conditioning::kConcat;
  if (s == "hypernet") return Conditioning::kHyperNet;
  fail("unknown conditioning variant: ", s);
}

inline std::string conditioning_to_string(Conditioning c) {
  switch (c) {
    case Conditioning::kLocCondConv: return "loc_cond_conv";
    case Conditioning::kNone: return "none";
    case Conditioning::kConcat: return "concat";
    case Conditioning::kHyperNet: return "hypernet";
  }
  return "loc_cond_conv";
}

struct EncoderConfig {
  std::vector<int> channels{1, 8, 16, 32, 32};  // input channel first
  std::vector<int> strides{1, 2, 1, 2};
  int experts{4};      // N kernels per Loc-CondConv layer
  int embed_dim{16};   // E, projection output
  std::int64_t patch_size{16};
  Conditioning conditioning{Conditioning::kLocCondConv};
  int hyper_hidden{8};

  int repr_dim() const { return channels.back(); }  // R
  int blocks() const { return static_cast<int>(strides.size()); }

  void validate() const {
    require(channels.size() == strides.size() + 1,
            "encoder config: channels must have one more entry than strides");
    require(experts >= 1, "encoder config: need at least one expert kernel");
    require(embed_dim >= 1 && repr_dim() >= 1, "encoder config: bad dimensions");
  }

  nlohmann::json to_json() const {
    return {{"channels", channels},       {"strides", strides},
            {"experts", experts},         {"embed_dim", embed_dim},
            {"patch_size", patch_size},   {"hyper_hidden", hyper_hidden},
            {"conditioning", conditioning_to_string(conditioning)}};
  }

  static EncoderConfig from_json(const nlohmann::json& j) {
    EncoderConfig c;
    c.channels = j.at("channels").get<std::vector<int>>();
    c.strides = j.at("strides").get<std::vector<int>>();
    c.experts = j.at("experts").get<int>();
    c.embed_dim = j.at("embed_dim").get<int>();
    c.patch_size = j.at("patch_size").get<std::int64_t>();
    c.hyper_hidden = j.at("hyper_hidden").get<int>();
    c.conditioning = conditioning_from_string(j.at("conditioning").get<std::string>());
    c.validate();
    return c;
  }
};

// sigmoid routing weights for one layer: alpha = sigmoid(p_norm * W_r)
template <typename T>
TensorPtr<T> routing(Tape<T>* tape, const Vec3& p_norm, const TensorPtr<T>& w_r) {
  require(w_r->rank() == 2 && w_r->dim(0) == 3, "routing: W_r must be [3,N], got ",
          shape_str(w_r->shape));
  for (int i = 0; i < 3; ++i)
    if (p_norm[i] < -1.0 || p_norm[i] > 1.0)
      log_debug("routing: coordinate axis ", i, " = ", p_norm[i], " outside [-1,1]");
  auto p = make_tensor<T>(Shape{1, 3});
  for (int i = 0; i < 3; ++i) p->data[i] = static_cast<T>(p_norm[i]);
  return sigmoid(tape, matmul(tape, p, w_r));
}

// Conditionally parameterized convolution: the kernel and bias applied to x
// are the alpha-weighted sums of the expert kernels, with alpha produced by
// the routing function (or forced via `alpha_override`, the test hook).
template <typename T>
TensorPtr<T> loc_cond_conv(Tape<T>* tape, const TensorPtr<T>& x, const Vec3& p_norm,
                           const std::vector<TensorPtr<T>>& expert_kernels,
                           const std::vector<TensorPtr<T>>& expert_biases,
                           const TensorPtr<T>& w_r, std::int64_t stride,
                           std::int64_t zero_pad,
                           const std::vector<double>* alpha_override = nullptr) {
  require(expert_kernels.size() == expert_biases.size() && !expert_kernels.empty(),
          "loc_cond_conv: expert kernel/bias lists must match and be non-empty");
  TensorPtr<T> alpha;
  if (alpha_override) {
    require(alpha_override->size() == expert_kernels.size(),
            "loc_cond_conv: alpha override size mismatch");
    alpha = make_tensor<T>(Shape{1, static_cast<std::int64_t>(expert_kernels.size())});
    for (std::size_t n = 0; n < alpha_override->size(); ++n)
      alpha->data[n] = static_cast<T>((*alpha_override)[n]);
  } else {
    alpha = routing(tape, p_norm, w_r);
  }
  auto kernel = mix_experts(tape, alpha, expert_kernels);
  auto bias = mix_experts(tape, alpha, expert_biases);
  return conv3d(tape, x, kernel, bias, stride, zero_pad);
}

template <typename T>
struct EncoderOutput {
  TensorPtr<T> rep;      // [B,R]
  TensorPtr<T> prepool;  // [B,C,d',d',d']
};

// Location-conditioned patch encoder: a stack of Loc-CondConv + BN + ELU
// blocks ending in global average pooling, plus the 2-layer MLP projection
// head used during contrastive training.
template <typename T>
class Encoder {
 public:
  explicit Encoder(EncoderConfig cfg) : cfg_(std::move(cfg)) { cfg_.validate(); }

  const EncoderConfig& config() const { return cfg_; }

  void init_params(ParamStore<T>& store, Rng& rng) const {
    const int nb = cfg_.blocks();
    for (int b = 0; b < nb; ++b) {
      const int ci = cfg_.channels[b], co = cfg_.channels[b + 1];
      const double std_w = std::sqrt(2.0 / (ci * 27.0));
      const int experts = expert_count();
      for (int n = 0; n < experts; ++n) {
        auto w = store.add(block_name(b) + ".w" + std::to_string(n),
                           {co, ci, 3, 3, 3}, true);
        for (auto& v : w->data) v = static_cast<T>(rng.normal(0.0, std_w));
        store.add(block_name(b) + ".bias" + std::to_string(n), {co}, false);
      }
      if (cfg_.conditioning == Conditioning::kLocCondConv) {
        // zero init: training starts at the uniform alpha = 0.5 mixture
        store.add(block_name(b) + ".wr", {3, cfg_.experts}, true);
      }
      if (cfg_.conditioning == Conditioning::kHyperNet) {
        auto h1 = store.add(block_name(b) + ".hyper.w1", {3, cfg_.hyper_hidden}, true);
        for (auto& v : h1->data) v = static_cast<T>(rng.normal(0.0, 0.5));
        store.add(block_name(b) + ".hyper.b1", {cfg_.hyper_hidden}, false);
        auto h2 = store.add(block_name(b) + ".hyper.w2",
                            {cfg_.hyper_hidden, co * ci * 27}, true);
        for (auto& v : h2->data) v = static_cast<T>(rng.normal(0.0, 0.01));
        auto hb = store.add(block_name(b) + ".hyper.b2", {co * ci * 27}, false);
        for (auto& v : hb->data) v = static_cast<T>(rng.normal(0.0, std_w));
        auto h2b = store.add(block_name(b) + ".hyper.w2b", {cfg_.hyper_hidden, co}, true);
        for (auto& v : h2b->data) v = static_cast<T>(rng.normal(0.0, 0.01));
        store.add(block_name(b) + ".hyper.b2b", {co}, false);
      }
      auto gamma = store.add(block_name(b) + ".bn.gamma", {co}, false);
      std::fill(gamma->data.begin(), gamma->data.end(), T(1));
      store.add(block_name(b) + ".bn.beta", {co}, false);
      store.add_buffer(block_name(b) + ".bn.rm", {co});
      auto rv = store.add_buffer(block_name(b) + ".bn.rv", {co});
      std::fill(rv->data.begin(), rv->data.end(), T(1));
    }
    const int R = cfg_.repr_dim();
    if (cfg_.conditioning == Conditioning::kConcat) {
      auto w = store.add("fuse.w", {R + 3, R}, true);
      for (auto& v : w->data) v = static_cast<T>(rng.normal(0.0, std::sqrt(2.0 / (R + 3))));
      store.add("fuse.b", {R}, false);
    }
    auto w1 = store.add("head.w1", {R, R}, true);
    for (auto& v : w1->data) v = static_cast<T>(rng.normal(0.0, std::sqrt(2.0 / R)));
    store.add("head.b1", {R}, false);
    auto w2 = store.add("head.w2", {R, cfg_.embed_dim}, true);
    for (auto& v : w2->data) v = static_cast<T>(rng.normal(0.0, std::sqrt(2.0 / R)));
    store.add("head.b2", {cfg_.embed_dim}, false);
  }

  // Forward through the block stack. `alpha_override` (test hook) replaces the
  // routing output of every layer. Throws on non-finite activations, naming
  // the block.
  EncoderOutput<T> forward(Tape<T>* tape, const TensorPtr<T>& x, const Vec3& p_norm,
                           const ParamStore<T>& store, bool train, bool update_running,
                           const std::vector<double>* alpha_override = nullptr) const {
    require(x->rank() == 5, "encoder: input must be [B,1,d,d,d], got ",
            shape_str(x->shape));
    require(x->dim(1) == cfg_.channels[0], "encoder: input has ", x->dim(1),
            " channels, expected ", cfg_.channels[0]);
    TensorPtr<T> h = x;
    for (int b = 0; b < cfg_.blocks(); ++b) {
      if (cfg_.conditioning == Conditioning::kLocCondConv) {
        const std::string base = block_name(b);
        std::vector<TensorPtr<T>> kernels, biases;
        for (int n = 0; n < cfg_.experts; ++n) {
          kernels.push_back(store.get(base + ".w" + std::to_string(n)));
          biases.push_back(store.get(base + ".bias" + std::to_string(n)));
        }
        h = loc_cond_conv(tape, h, p_norm, kernels, biases, store.get(base + ".wr"),
                          cfg_.strides[b], 1, alpha_override);
      } else {
        auto [kernel, bias] = layer_kernel(tape, b, p_norm, store, alpha_override);
        h = conv3d(tape, h, kernel, bias, cfg_.strides[b], 1);
      }
      auto rm = store.buffer(block_name(b) + ".bn.rm");
      auto rv = store.buffer(block_name(b) + ".bn.rv");
      h = batchnorm3d(tape, h, store.get(block_name(b) + ".bn.gamma"),
                      store.get(block_name(b) + ".bn.beta"), rm, rv, train,
                      update_running);
      h = elu(tape, h);
      if (!h->all_finite()) fail("encoder: non-finite activation in block ", b);
    }
    EncoderOutput<T> out;
    out.prepool = h;
    out.rep = global_avg_pool(tape, h);
    if (cfg_.conditioning == Conditioning::kConcat) {
      auto p = make_tensor<T>(Shape{out.rep->dim(0), 3});
      for (std::int64_t r = 0; r < out.rep->dim(0); ++r)
        for (int i = 0; i < 3; ++i) p->data[r * 3 + i] = static_cast<T>(p_norm[i]);
      auto fused = concat_cols(tape, {out.rep, p});
      out.rep = elu(tape, add(tape, matmul(tape, fused, store.get("fuse.w")),
                              store.get("fuse.b")));
    }
    return out;
  }

  // 2-layer MLP with ReLU, then L2 normalization onto the unit sphere.
  // Rows whose pre-normalization magnitude is degenerate are tallied for QA.
  TensorPtr<T> project(Tape<T>* tape, const TensorPtr<T>& rep, const ParamStore<T>& store,
                       std::int64_t* degenerate_rows = nullptr) const {
    auto h = relu(tape, add(tape, matmul(tape, rep, store.get("head.w1")),
                            store.get("head.b1")));
    auto e = add(tape, matmul(tape, h, store.get("head.w2")), store.get("head.b2"));
    if (degenerate_rows) {
      const std::int64_t B = e->dim(0), E = e->dim(1);
      for (std::int64_t r = 0; r < B; ++r) {
        double s = 0.0;
        for (std::int64_t c = 0; c < E; ++c)
          s += static_cast<double>(e->data[r * E + c]) * e->data[r * E + c];
        if (std::sqrt(s) < 1e-6) ++(*degenerate_rows);
      }
    }
    return l2_normalize(tape, e, 1);
  }

 private:
  static std::string block_name(int b) { return "enc.b" + std::to_string(b); }

  int expert_count() const {
    switch (cfg_.conditioning) {
      case Conditioning::kLocCondConv: return cfg_.experts;
      case Conditioning::kHyperNet: return 0;
      default: return 1;  // single static kernel
    }
  }

  std::pair<TensorPtr<T>, TensorPtr<T>> layer_kernel(
      Tape<T>* tape, int b, const Vec3& p_norm, const ParamStore<T>& store,
      const std::vector<double>*) const {
    const std::string base = block_name(b);
    switch (cfg_.conditioning) {
      case Conditioning::kHyperNet: {
        auto p = make_tensor<T>(Shape{1, 3});
        for (int i = 0; i < 3; ++i) p->data[i] = static_cast<T>(p_norm[i]);
        auto hid = tanh_op(tape, add(tape, matmul(tape, p, store.get(base + ".hyper.w1")),
                                     store.get(base + ".hyper.b1")));
        auto kflat = add(tape, matmul(tape, hid, store.get(base + ".hyper.w2")),
                         store.get(base + ".hyper.b2"));
        const int ci = cfg_.channels[b], co = cfg_.channels[b + 1];
        auto kernel = reshape(tape, kflat, {co, ci, 3, 3, 3});
        auto bflat = add(tape, matmul(tape, hid, store.get(base + ".hyper.w2b")),
                         store.get(base + ".hyper.b2b"));
        return {kernel, reshape(tape, bflat, {co})};
      }
      default:
        return {store.get(base + ".w0"), store.get(base + ".bias0")};
    }
  }

  EncoderConfig cfg_;
};

// theta_k = m * theta_k + (1 - m) * theta_q for every trainable parameter;
// BN running statistics are copied from the query store.
template <typename T>
void momentum_update(const ParamStore<T>& query, ParamStore<T>& key, double m) {
  require(m >= 0.0 && m <= 1.0, "momentum_update: m = ", m, " outside [0,1]");
  query.check_same_structure(key);
  for (const auto& name : query.names()) {
    const auto q = query.get(name);
    auto k = key.get(name);
    for (std::int64_t i = 0; i < q->numel(); ++i)
      k->data[i] = static_cast<T>(m * k->data[i] + (1.0 - m) * q->data[i]);
  }
  for (const auto& name : query.buffer_names())
    key.buffer(name)->data = query.buffer(name)->data;
}

}  // namespace drascore
