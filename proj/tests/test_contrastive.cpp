#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <set>

#include "drascore/contrastive.hpp"
#include "drascore/encoder.hpp"
#include "drascore/gradcheck.hpp"
#include "drascore/phantom.hpp"

using namespace drascore;

namespace {

// unit vector along coordinate axis `axis`
template <typename T>
TensorPtr<T> basis(std::int64_t dim, std::int64_t axis, Shape shape) {
  auto t = make_tensor<T>(shape);
  // fill rows (or slices) with e_axis
  const std::int64_t rows = t->numel() / dim;
  for (std::int64_t r = 0; r < rows; ++r) t->data[r * dim + axis] = T(1);
  return t;
}

template <typename T>
TensorPtr<T> random_unit_rows(Shape shape, Rng& rng) {
  auto t = make_tensor<T>(shape);
  for (auto& v : t->data) v = static_cast<T>(rng.normal());
  const std::int64_t dim = t->shape.back();
  const std::int64_t rows = t->numel() / dim;
  for (std::int64_t r = 0; r < rows; ++r) {
    double n = 0.0;
    for (std::int64_t c = 0; c < dim; ++c)
      n += static_cast<double>(t->data[r * dim + c]) * t->data[r * dim + c];
    n = std::sqrt(std::max(n, 1e-12));
    for (std::int64_t c = 0; c < dim; ++c)
      t->data[r * dim + c] = static_cast<T>(t->data[r * dim + c] / n);
  }
  return t;
}

// independent scalar oracle over raw logits
double infonce_from_logits(const std::vector<double>& pos,
                           const std::vector<double>& neg) {
  double m = pos[0];
  for (double v : pos) m = std::max(m, v);
  for (double v : neg) m = std::max(m, v);
  double pos_sum = 0.0, all_sum = 0.0;
  for (double v : pos) pos_sum += std::exp(v - m);
  all_sum = pos_sum;
  for (double v : neg) all_sum += std::exp(v - m);
  return std::log(all_sum) - std::log(pos_sum);
}

AugmentationConfig identity_aug() {
  AugmentationConfig cfg;
  cfg.rotation_deg = 0.0;
  cfg.translation_voxels = 0.0;
  cfg.scale_min = cfg.scale_max = 1.0;
  cfg.noise_sigma = 0.0;
  cfg.gamma_min = cfg.gamma_max = 1.0;
  return cfg;
}

}  // namespace

std::vector<float> fixture_patch() {
  static std::vector<float> patch = [] {
    const Volume atlas = generate_atlas({32, 32, 32}, 1.0, 3);
    std::vector<float> p(16 * 16 * 16);
    std::size_t i = 0;
    for (std::int64_t z = 8; z < 24; ++z)
      for (std::int64_t y = 8; y < 24; ++y)
        for (std::int64_t x = 8; x < 24; ++x, ++i) p[i] = atlas.at(z, y, x);
    return p;
  }();
  return patch;
}

TEST_CASE("augmentation identity, determinism and deviation") {
  const auto patch = fixture_patch();

  SECTION("identity config returns the patch unchanged") {
    const auto out = augment(patch, 16, 1234, identity_aug());
    REQUIRE(out == patch);
  }
  SECTION("same seed twice gives identical output") {
    AugmentationConfig cfg;
    const auto a = augment(patch, 16, 777, cfg);
    const auto b = augment(patch, 16, 777, cfg);
    REQUIRE(a == b);
    const auto c = augment(patch, 16, 778, cfg);
    REQUIRE(a != c);
  }
  SECTION("default ranges perturb the patch and stay in [-1,1]") {
    AugmentationConfig cfg;
    const auto out = augment(patch, 16, 42, cfg);
    double mad = 0.0;
    for (std::size_t i = 0; i < out.size(); ++i) {
      mad += std::fabs(static_cast<double>(out[i]) - patch[i]);
      REQUIRE(out[i] >= -1.0f);
      REQUIRE(out[i] <= 1.0f);
    }
    REQUIRE(mad / out.size() > 0.0);
  }
}

TEST_CASE("local loss closed forms") {
  const std::int64_t E = 8;
  SECTION("uniform logits give ln(1+K)") {
    for (int K : {1, 16, 64}) {
      auto q = basis<double>(E, 0, {1, E});
      auto kp = basis<double>(E, 0, {1, E});
      auto negs = basis<double>(E, 0, {1, K, E});
      auto loss = local_loss<double>(nullptr, q, kp, negs, 0.2);
      REQUIRE_THAT(loss->data[0],
                   Catch::Matchers::WithinAbs(std::log(1.0 + K), 1e-9));
    }
  }
  SECTION("zero negatives give zero loss") {
    auto q = basis<double>(E, 0, {1, E});
    auto kp = basis<double>(E, 0, {1, E});
    auto negs = make_tensor<double>({1, 0, E});
    auto loss = local_loss<double>(nullptr, q, kp, negs, 0.2);
    REQUIRE(loss->data[0] == 0.0);
  }
  SECTION("one orthogonal negative at tau 0.2") {
    auto q = basis<double>(E, 0, {1, E});
    auto kp = basis<double>(E, 0, {1, E});
    auto negs = basis<double>(E, 1, {1, 1, E});
    auto loss = local_loss<double>(nullptr, q, kp, negs, 0.2);
    // ln(1 + e^{(0-1)/0.2}), frozen from the direct-formula oracle
    REQUIRE_THAT(loss->data[0],
                 Catch::Matchers::WithinAbs(0.006715348489117967, 1e-12));
  }
  SECTION("dimension mismatch is rejected") {
    auto q = basis<double>(E, 0, {1, E});
    auto kp = basis<double>(4, 0, {1, 4});
    auto negs = basis<double>(E, 0, {1, 2, E});
    REQUIRE_THROWS_WITH(local_loss<double>(nullptr, q, kp, negs, 0.2),
                        Catch::Matchers::ContainsSubstring("[B,E]"));
  }
}

TEST_CASE("neighbor loss closed forms") {
  const std::int64_t E = 8;
  SECTION("single neighbor equals the local loss to 1e-12") {
    Rng rng(5);
    auto r1 = random_unit_rows<double>({3, E}, rng);
    auto kp = random_unit_rows<double>({3, E}, rng);
    auto negs = random_unit_rows<double>({3, 5, E}, rng);
    auto nl = neighbor_loss<double>(nullptr, {r1}, kp, negs, 0.2);
    auto ll = local_loss<double>(nullptr, r1, kp, negs, 0.2);
    REQUIRE_THAT(nl->data[0], Catch::Matchers::WithinAbs(ll->data[0], 1e-12));
  }
  SECTION("uniform logits give ln(1+K) for any neighbor count") {
    for (int l : {1, 2, 3}) {
      const int K = 4;
      std::vector<TensorPtr<double>> rs;
      for (int i = 0; i < l; ++i) rs.push_back(basis<double>(E, 0, {1, E}));
      auto kp = basis<double>(E, 0, {1, E});
      auto negs = basis<double>(E, 0, {1, K, E});
      auto loss = neighbor_loss<double>(nullptr, rs, kp, negs, 0.2);
      REQUIRE_THAT(loss->data[0],
                   Catch::Matchers::WithinAbs(std::log(1.0 + K), 1e-9));
    }
  }
  SECTION("two neighbors, orthogonal second and negative, tau 0.2") {
    auto r1 = basis<double>(E, 0, {1, E});
    auto r2 = basis<double>(E, 1, {1, E});
    auto kp = basis<double>(E, 0, {1, E});
    auto negs = basis<double>(E, 2, {1, 1, E});
    auto loss = neighbor_loss<double>(nullptr, {r1, r2}, kp, negs, 0.2);
    // -ln[(e^5 + 1)/(e^5 + 3)], frozen from the direct-formula oracle
    REQUIRE_THAT(loss->data[0],
                 Catch::Matchers::WithinAbs(0.013296904870508917, 1e-12));
  }
  SECTION("zero neighbors are rejected") {
    auto kp = basis<double>(E, 0, {1, E});
    auto negs = basis<double>(E, 0, {1, 1, E});
    REQUIRE_THROWS_WITH(neighbor_loss<double>(nullptr, {}, kp, negs, 0.2),
                        Catch::Matchers::ContainsSubstring("zero neighbors"));
  }
}

TEST_CASE("combined loss is the unweighted sum") {
  auto a = scalar_tensor<double>(0.0);
  auto b = scalar_tensor<double>(0.0);
  REQUIRE(combined_loss<double>(nullptr, a, b)->data[0] == 0.0);
  auto c = scalar_tensor<double>(std::log(65.0));
  REQUIRE_THAT(combined_loss<double>(nullptr, c, c)->data[0],
               Catch::Matchers::WithinAbs(2.0 * std::log(65.0), 1e-12));

  // uniform-logit batch: combined equals two independent oracle evaluations
  const std::int64_t E = 8;
  const int K = 16;
  auto q = basis<double>(E, 0, {2, E});
  auto kp = basis<double>(E, 0, {2, E});
  auto negs = basis<double>(E, 0, {2, K, E});
  auto ll = local_loss<double>(nullptr, q, kp, negs, 0.2);
  auto nl = neighbor_loss<double>(nullptr, {q, q}, kp, negs, 0.2);
  auto total = combined_loss<double>(nullptr, ll, nl);
  const double oracle_ll = infonce_from_logits({5.0}, std::vector<double>(K, 5.0));
  const double oracle_nl =
      infonce_from_logits({5.0, 5.0}, std::vector<double>(2 * K, 5.0));
  REQUIRE_THAT(total->data[0],
               Catch::Matchers::WithinAbs(oracle_ll + oracle_nl, 1e-10));
  REQUIRE_THAT(oracle_ll + oracle_nl,
               Catch::Matchers::WithinAbs(2.0 * std::log(1.0 + K), 1e-10));
}

TEST_CASE("losses match the logit oracle and are shift-stable") {
  Rng rng(11);
  const std::int64_t E = 16;
  const int K = 7;
  auto q = random_unit_rows<double>({1, E}, rng);
  auto kp = random_unit_rows<double>({1, E}, rng);
  auto negs = random_unit_rows<double>({1, K, E}, rng);
  const double tau = 0.2;
  auto loss = local_loss<double>(nullptr, q, kp, negs, tau);

  std::vector<double> pos{0.0}, neg(K, 0.0);
  for (std::int64_t e = 0; e < E; ++e) pos[0] += q->data[e] * kp->data[e];
  pos[0] /= tau;
  for (int k = 0; k < K; ++k) {
    for (std::int64_t e = 0; e < E; ++e) neg[k] += negs->data[k * E + e] * q->data[e];
    neg[k] /= tau;
  }
  REQUIRE_THAT(loss->data[0],
               Catch::Matchers::WithinAbs(infonce_from_logits(pos, neg), 1e-10));

  // constant logit shifts cancel
  const double base = infonce_from_logits(pos, neg);
  for (double c : {10.0, -40.0, 1000.0}) {
    std::vector<double> pos_s = pos, neg_s = neg;
    for (auto& v : pos_s) v += c;
    for (auto& v : neg_s) v += c;
    REQUIRE_THAT(infonce_from_logits(pos_s, neg_s),
                 Catch::Matchers::WithinAbs(base, 1e-10));
  }
  REQUIRE(loss->data[0] >= 0.0);
}

TEST_CASE("one projected gradient step on q decreases the local loss") {
  Rng rng(13);
  const std::int64_t E = 16;
  auto q = random_unit_rows<double>({1, E}, rng);
  q->requires_grad = true;
  q->name = "q";
  auto kp = random_unit_rows<double>({1, E}, rng);
  auto negs = random_unit_rows<double>({1, 8, E}, rng);

  Tape<double> tape;
  auto loss = local_loss(&tape, q, kp, negs, 0.2);
  const double before = loss->data[0];
  tape.backward(loss);

  // gradient pushes q toward k+ while the positive softmax weight is below 1
  double gdotk = 0.0;
  for (std::int64_t e = 0; e < E; ++e) gdotk += q->grad[e] * kp->data[e];
  REQUIRE(gdotk < 0.0);

  auto q2 = make_tensor<double>({1, E});
  double n = 0.0;
  for (std::int64_t e = 0; e < E; ++e) {
    q2->data[e] = q->data[e] - 1e-3 * q->grad[e];
    n += q2->data[e] * q2->data[e];
  }
  n = std::sqrt(n);
  for (auto& v : q2->data) v /= n;
  auto loss2 = local_loss<double>(nullptr, q2, kp, negs, 0.2);
  REQUIRE(loss2->data[0] < before);
}

TEST_CASE("memory bank FIFO, isolation and exhaustive sampling") {
  MemoryBank bank(3, 4, 2);

  auto unit = [](float x, float y) {
    std::vector<float> v{x, y};
    const float n = std::sqrt(x * x + y * y);
    v[0] /= n;
    v[1] /= n;
    return v;
  };

  SECTION("capacity 4 with 5 enqueues keeps vectors 2-5 in FIFO order") {
    for (int i = 1; i <= 5; ++i) {
      auto v = unit(static_cast<float>(i), 1.0f);
      bank.enqueue(0, v.data(), i, i);
    }
    REQUIRE(bank.fill_count(0) == 4);
    auto draw = bank.sample(0, 4, 9);
    std::set<int> got(draw.subjects.begin(), draw.subjects.end());
    REQUIRE(got == std::set<int>{2, 3, 4, 5});
    REQUIRE(bank.cursor(0) == 1);  // slot 0 was overwritten by the fifth enqueue
  }
  SECTION("enqueue at one landmark leaves other queues bit-identical") {
    auto v = unit(1.0f, 0.0f);
    bank.enqueue(1, v.data(), 0, 0);
    const auto before = bank.slots();
    auto w = unit(0.0f, 1.0f);
    bank.enqueue(0, w.data(), 1, 1);
    for (int j : {1, 2})
      for (int s = 0; s < 4; ++s)
        for (int e = 0; e < 2; ++e) {
          const std::size_t idx = (static_cast<std::size_t>(j) * 4 + s) * 2 + e;
          REQUIRE(bank.slots()[idx] == before[idx]);
        }
  }
  SECTION("exhaustive draw returns every stored vector once") {
    for (int i = 0; i < 3; ++i) {
      auto v = unit(1.0f, static_cast<float>(i));
      bank.enqueue(2, v.data(), i, i);
    }
    auto draw = bank.sample(2, 3, 123);
    std::set<int> got(draw.subjects.begin(), draw.subjects.end());
    REQUIRE(got == std::set<int>{0, 1, 2});
  }
  SECTION("empty queue sampling is an error") {
    REQUIRE_THROWS_WITH(bank.sample(0, 1, 5),
                        Catch::Matchers::ContainsSubstring("warm-fill"));
  }
  SECTION("non-unit embeddings are rejected") {
    std::vector<float> bad{3.0f, 4.0f};
    REQUIRE_THROWS_WITH(bank.enqueue(0, bad.data(), 0, 0),
                        Catch::Matchers::ContainsSubstring("unit-norm"));
  }
  SECTION("same-subject slots are excluded on request") {
    for (int i = 0; i < 4; ++i) {
      auto v = unit(1.0f, static_cast<float>(i));
      bank.enqueue(0, v.data(), i % 2, i);
    }
    auto draw = bank.sample(0, 2, 77, /*exclude_subject=*/0);
    for (int s : draw.subjects) REQUIRE(s == 1);
  }
  SECTION("sampling is deterministic in the seed") {
    for (int i = 0; i < 4; ++i) {
      auto v = unit(1.0f, static_cast<float>(i));
      bank.enqueue(0, v.data(), i, i);
    }
    auto a = bank.sample(0, 2, 31);
    auto b = bank.sample(0, 2, 31);
    REQUIRE(a.vectors == b.vectors);
    REQUIRE(a.subjects == b.subjects);
  }
}

TEST_CASE("full encoder plus head plus local loss passes the gradient check") {
  EncoderConfig cfg;
  cfg.channels = {1, 4, 4};
  cfg.strides = {1, 2};
  cfg.experts = 2;
  cfg.embed_dim = 8;
  cfg.patch_size = 8;
  Encoder<double> enc(cfg);
  ParamStore<double> store;
  Rng rng(17);
  enc.init_params(store, rng);
  // move routing off its zero init so location gradients are live
  for (int b = 0; b < 2; ++b) {
    auto wr = store.get("enc.b" + std::to_string(b) + ".wr");
    for (auto& v : wr->data) v = rng.normal(0.0, 0.3);
  }

  Rng rng2(18);
  auto x = make_tensor<double>({2, 1, 8, 8, 8}, true);
  for (auto& v : x->data) v = rng2.normal(0.0, 0.3);
  x->name = "patch_batch";
  auto kp = random_unit_rows<double>({2, 8}, rng2);
  auto negs = random_unit_rows<double>({2, 6, 8}, rng2);
  const Vec3 p{0.25, -0.5, 0.75};

  // conv biases feed train-mode BN, whose mean subtraction cancels any
  // per-channel constant: their gradient is identically zero. Assert that
  // exactly, and run the finite-difference sweep over the live parameters.
  {
    store.zero_grads();
    x->ensure_grad();
    x->zero_grad();
    Tape<double> tape;
    auto out = enc.forward(&tape, x, p, store, true, false);
    auto emb = enc.project(&tape, out.rep, store);
    auto loss = local_loss(&tape, emb, kp, negs, 0.2);
    tape.backward(loss);
    for (const auto& name : store.names())
      if (name.find(".bias") != std::string::npos)
        for (double g : store.get(name)->grad) REQUIRE(std::fabs(g) < 1e-12);
  }

  std::vector<TensorPtr<double>> inputs{x};
  for (const auto& name : store.names())
    if (name.find(".bias") == std::string::npos) inputs.push_back(store.get(name));

  auto rep = grad_check<double>(
      [&](Tape<double>& tape) {
        auto out = enc.forward(&tape, x, p, store, true, false);
        auto emb = enc.project(&tape, out.rep, store);
        return local_loss(&tape, emb, kp, negs, 0.2);
      },
      inputs, 3e-4, 6, 21);
  INFO("max_rel_err " << rep.max_rel_err << " worst " << rep.worst_tensor << "["
                      << rep.worst_index << "] analytic " << rep.worst_analytic
                      << " numeric " << rep.worst_numeric);
  REQUIRE(rep.ok(1e-4));
}
