#include <catch2/catch_amalgamated.hpp>

#include <cmath>

#include "drascore/encoder.hpp"
#include "drascore/gradcheck.hpp"

using namespace drascore;

namespace {

template <typename T>
TensorPtr<T> random_tensor(Shape shape, Rng& rng, double spread = 1.0,
                           bool requires_grad = false) {
  auto t = make_tensor<T>(std::move(shape), requires_grad);
  for (auto& v : t->data) v = static_cast<T>(rng.normal(0.0, spread));
  return t;
}

EncoderConfig micro_config() {
  EncoderConfig cfg;
  cfg.channels = {1, 4, 4};
  cfg.strides = {1, 2};
  cfg.experts = 2;
  cfg.embed_dim = 8;
  cfg.patch_size = 8;
  return cfg;
}

}  // namespace

TEST_CASE("routing with zero weights is the uniform 0.5 mixture") {
  auto wr = make_tensor<double>({3, 4});
  auto alpha = routing<double>(nullptr, {0.3, -0.7, 0.2}, wr);
  REQUIRE(alpha->shape == Shape{1, 4});
  for (auto v : alpha->data) REQUIRE(v == 0.5);
}

TEST_CASE("routing saturates and cancels as the sigmoid dictates") {
  auto wr = make_tensor<double>({3, 2});
  wr->data[0 * 2 + 0] = 500.0;
  wr->data[1 * 2 + 0] = -500.0;
  wr->data[2 * 2 + 0] = 0.0;
  wr->data[0 * 2 + 1] = 2.0;
  wr->data[1 * 2 + 1] = 2.0;
  wr->data[2 * 2 + 1] = 2.0;
  auto alpha = routing<double>(nullptr, {0.5, -0.5, 0.0}, wr);
  REQUIRE(alpha->data[0] > 1.0 - 1e-12);
  REQUIRE(alpha->data[1] == 0.5);
}

TEST_CASE("single-expert loc_cond_conv with zero routing halves the static conv") {
  Rng rng(3);
  auto x = random_tensor<double>({1, 2, 6, 6, 6}, rng);
  auto w = random_tensor<double>({3, 2, 3, 3, 3}, rng, 0.4);
  auto b = random_tensor<double>({3}, rng, 0.2);
  auto wr = make_tensor<double>({3, 1});
  auto y = loc_cond_conv<double>(nullptr, x, {0.2, 0.1, -0.3}, {w}, {b}, wr, 1, 1);

  auto half_w = make_tensor<double>(w->shape);
  auto half_b = make_tensor<double>(b->shape);
  for (std::int64_t i = 0; i < w->numel(); ++i) half_w->data[i] = 0.5 * w->data[i];
  for (std::int64_t i = 0; i < b->numel(); ++i) half_b->data[i] = 0.5 * b->data[i];
  auto expect = conv3d<double>(nullptr, x, half_w, half_b, 1, 1);
  REQUIRE(y->data == expect->data);
}

TEST_CASE("one-hot alpha override reduces to the selected expert") {
  Rng rng(5);
  auto x = random_tensor<double>({1, 2, 6, 6, 6}, rng);
  std::vector<TensorPtr<double>> ws, bs;
  for (int n = 0; n < 3; ++n) {
    ws.push_back(random_tensor<double>({4, 2, 3, 3, 3}, rng, 0.4));
    bs.push_back(random_tensor<double>({4}, rng, 0.2));
  }
  auto wr = random_tensor<double>({3, 3}, rng);
  std::vector<double> onehot{0.0, 1.0, 0.0};
  auto y = loc_cond_conv<double>(nullptr, x, {0.1, 0.2, 0.3}, ws, bs, wr, 1, 1, &onehot);
  auto expect = conv3d<double>(nullptr, x, ws[1], bs[1], 1, 1);
  REQUIRE(y->data == expect->data);
}

TEST_CASE("mixture-then-convolve equals convolve-then-mix to 1e-10") {
  Rng rng(7);
  for (int n_experts : {1, 2, 4}) {
    auto x = random_tensor<double>({2, 2, 6, 6, 6}, rng);
    std::vector<TensorPtr<double>> ws, bs;
    for (int n = 0; n < n_experts; ++n) {
      ws.push_back(random_tensor<double>({3, 2, 3, 3, 3}, rng, 0.5));
      bs.push_back(random_tensor<double>({3}, rng, 0.2));
    }
    auto wr = random_tensor<double>({3, n_experts}, rng);
    const Vec3 p{0.4, -0.2, 0.7};
    auto lhs = loc_cond_conv<double>(nullptr, x, p, ws, bs, wr, 1, 1);

    auto alpha = routing<double>(nullptr, p, wr);
    auto rhs = make_tensor<double>(lhs->shape);
    for (int n = 0; n < n_experts; ++n) {
      auto zero_bias = make_tensor<double>({3});
      auto yn = conv3d<double>(nullptr, x, ws[n], zero_bias, 1, 1);
      const double a = alpha->data[n];
      for (std::int64_t i = 0; i < rhs->numel(); ++i) rhs->data[i] += a * yn->data[i];
    }
    const std::int64_t ovol = lhs->numel() / (lhs->dim(0) * lhs->dim(1));
    for (std::int64_t b = 0; b < lhs->dim(0); ++b)
      for (std::int64_t co = 0; co < lhs->dim(1); ++co) {
        double mixed_bias = 0.0;
        for (int n = 0; n < n_experts; ++n) mixed_bias += alpha->data[n] * bs[n]->data[co];
        for (std::int64_t i = 0; i < ovol; ++i)
          rhs->data[(b * lhs->dim(1) + co) * ovol + i] += mixed_bias;
      }
    double max_diff = 0.0;
    for (std::int64_t i = 0; i < lhs->numel(); ++i)
      max_diff = std::max(max_diff, std::fabs(lhs->data[i] - rhs->data[i]));
    INFO("N = " << n_experts);
    REQUIRE(max_diff < 1e-10);
  }
}

TEST_CASE("encoder forward is deterministic with the documented output shape") {
  EncoderConfig cfg;  // default production architecture
  Encoder<float> enc(cfg);
  ParamStore<float> store;
  Rng rng(11);
  enc.init_params(store, rng);

  auto x = make_tensor<float>({1, 1, 16, 16, 16});  // constant zero patch
  const Vec3 p{0.1, -0.2, 0.4};
  auto out1 = enc.forward(nullptr, x, p, store, false, false);
  auto out2 = enc.forward(nullptr, x, p, store, false, false);
  REQUIRE(out1.rep->shape == Shape{1, 32});
  REQUIRE(out1.rep->data == out2.rep->data);
  REQUIRE(out1.rep->all_finite());
  REQUIRE(out1.prepool->shape == Shape{1, 32, 4, 4, 4});

  Rng rng2(12);
  auto noise = random_tensor<float>({3, 1, 16, 16, 16}, rng2, 0.3);
  auto out3 = enc.forward(nullptr, noise, p, store, false, false);
  REQUIRE(out3.rep->shape == Shape{3, 32});
}

TEST_CASE("distinct locations give distinct representations once routing is nonzero") {
  EncoderConfig cfg = micro_config();
  Encoder<float> enc(cfg);
  ParamStore<float> store;
  Rng rng(13);
  enc.init_params(store, rng);
  Rng rng2(14);
  auto x = random_tensor<float>({1, 1, 8, 8, 8}, rng2, 0.3);

  auto a = enc.forward(nullptr, x, {-0.5, -0.5, -0.5}, store, false, false);
  auto b = enc.forward(nullptr, x, {0.5, 0.5, 0.5}, store, false, false);
  REQUIRE(a.rep->data == b.rep->data);  // zero routing: locations inert

  for (int blk = 0; blk < 2; ++blk) {
    auto wr = store.get("enc.b" + std::to_string(blk) + ".wr");
    for (auto& v : wr->data) v = 0.8f;
  }
  auto c = enc.forward(nullptr, x, {-0.5, -0.5, -0.5}, store, false, false);
  auto d = enc.forward(nullptr, x, {0.5, 0.5, 0.5}, store, false, false);
  float max_abs = 0.0f;
  for (std::int64_t i = 0; i < c.rep->numel(); ++i)
    max_abs = std::max(max_abs, std::fabs(c.rep->data[i] - d.rep->data[i]));
  REQUIRE(max_abs > 0.0f);
}

TEST_CASE("projection head emits unit vectors and flags degenerate inputs") {
  EncoderConfig cfg = micro_config();
  Encoder<double> enc(cfg);
  ParamStore<double> store;
  Rng rng(17);
  enc.init_params(store, rng);

  Rng rng2(18);
  auto rep = random_tensor<double>({5, 4}, rng2);
  std::int64_t degenerate = 0;
  auto emb = enc.project(nullptr, rep, store, &degenerate);
  REQUIRE(degenerate == 0);
  for (std::int64_t r = 0; r < 5; ++r) {
    double n = 0.0;
    for (std::int64_t c = 0; c < emb->dim(1); ++c)
      n += emb->data[r * emb->dim(1) + c] * emb->data[r * emb->dim(1) + c];
    REQUIRE_THAT(std::sqrt(n), Catch::Matchers::WithinAbs(1.0, 1e-6));
  }

  for (const char* name : {"head.w1", "head.b1", "head.w2", "head.b2"}) {
    auto t = store.get(name);
    std::fill(t->data.begin(), t->data.end(), 0.0);
  }
  auto zero_emb = enc.project(nullptr, rep, store, &degenerate);
  REQUIRE(degenerate == 5);
  REQUIRE(zero_emb->all_finite());
  for (auto v : zero_emb->data) REQUIRE(v == 0.0);
}

TEST_CASE("projection head gradient matches finite differences") {
  EncoderConfig cfg = micro_config();
  Encoder<double> enc(cfg);
  ParamStore<double> store;
  Rng rng(19);
  enc.init_params(store, rng);
  Rng rng2(20);
  auto rep = random_tensor<double>({2, 4}, rng2, 1.0, true);
  rep->name = "rep";
  auto target = l2_normalize<double>(nullptr, random_tensor<double>({2, 8}, rng2), 1);
  std::vector<TensorPtr<double>> inputs{rep, store.get("head.w1"), store.get("head.b1"),
                                        store.get("head.w2"), store.get("head.b2")};
  auto rep_check = grad_check<double>(
      [&](Tape<double>& tape) {
        auto emb = enc.project(&tape, rep, store);
        return mean_all(&tape, rowwise_dot(&tape, emb, target));
      },
      inputs, 3e-4, 40, 5);
  INFO("max_rel_err " << rep_check.max_rel_err << " worst " << rep_check.worst_tensor
                      << "[" << rep_check.worst_index << "] analytic "
                      << rep_check.worst_analytic << " numeric "
                      << rep_check.worst_numeric);
  REQUIRE(rep_check.ok(1e-4));
}

TEST_CASE("momentum update closed forms and properties") {
  EncoderConfig cfg = micro_config();
  Encoder<float> enc(cfg);
  Rng rng(23);
  ParamStore<float> q;
  enc.init_params(q, rng);

  SECTION("m = 0 copies the query exactly") {
    auto k = q.clone();
    Rng r2(29);
    ParamStore<float> q2;
    enc.init_params(q2, r2);
    momentum_update(q2, k, 0.0);
    for (const auto& name : q2.names()) REQUIRE(k.get(name)->data == q2.get(name)->data);
  }
  SECTION("m = 1 leaves the key unchanged") {
    auto k = q.clone();
    const auto before = k.get("head.w1")->data;
    Rng r2(31);
    ParamStore<float> q2;
    enc.init_params(q2, r2);
    momentum_update(q2, k, 1.0);
    REQUIRE(k.get("head.w1")->data == before);
  }
  SECTION("m = 0.999 on a 0/1 pair gives 0.001 elementwise") {
    auto k = q.clone();
    auto qs = q.clone();
    for (const auto& name : k.names()) {
      std::fill(k.get(name)->data.begin(), k.get(name)->data.end(), 0.0f);
      std::fill(qs.get(name)->data.begin(), qs.get(name)->data.end(), 1.0f);
    }
    momentum_update(qs, k, 0.999);
    for (const auto& name : k.names())
      for (auto v : k.get(name)->data)
        REQUIRE_THAT(v, Catch::Matchers::WithinAbs(0.001, 1e-7));
  }
  SECTION("update is a convex combination with bounded drift") {
    auto k = q.clone();
    Rng r2(37);
    ParamStore<float> q2;
    enc.init_params(q2, r2);
    const double m = 0.9;
    const auto kv = k.get("enc.b0.w0")->data;
    const auto qv = q2.get("enc.b0.w0")->data;
    momentum_update(q2, k, m);
    for (std::size_t i = 0; i < kv.size(); ++i) {
      const float lo = std::min(kv[i], qv[i]), hi = std::max(kv[i], qv[i]);
      const float nv = k.get("enc.b0.w0")->data[i];
      REQUIRE(nv >= lo - 1e-6f);
      REQUIRE(nv <= hi + 1e-6f);
      REQUIRE(std::fabs(nv - kv[i]) <= (1.0 - m) * std::fabs(qv[i] - kv[i]) + 1e-6);
    }
  }
  SECTION("structural mismatch is rejected") {
    auto k = q.clone();
    ParamStore<float> other;
    Encoder<float> enc2(EncoderConfig{});
    Rng r2(41);
    enc2.init_params(other, r2);
    REQUIRE_THROWS_WITH(momentum_update(other, k, 0.5),
                        Catch::Matchers::ContainsSubstring("structural mismatch"));
  }
}

TEST_CASE("key BN running stats are copied from the query on update") {
  EncoderConfig cfg = micro_config();
  Encoder<float> enc(cfg);
  Rng rng(43);
  ParamStore<float> q;
  enc.init_params(q, rng);
  auto k = q.clone();

  Rng rng2(44);
  auto x = random_tensor<float>({4, 1, 8, 8, 8}, rng2, 0.3);
  enc.forward(nullptr, x, {0, 0, 0}, q, true, true);  // mutates q running stats
  REQUIRE(q.buffer("enc.b0.bn.rm")->data != k.buffer("enc.b0.bn.rm")->data);
  momentum_update(q, k, 0.999);
  REQUIRE(q.buffer("enc.b0.bn.rm")->data == k.buffer("enc.b0.bn.rm")->data);
  REQUIRE(q.buffer("enc.b1.bn.rv")->data == k.buffer("enc.b1.bn.rv")->data);
}
