#pragma once

#include <functional>
#include <ostream>
#include <string>
#include <vector>

#include "drascore/contrastive.hpp"
#include "drascore/encoder.hpp"
#include "drascore/gradcheck.hpp"
#include "drascore/rng.hpp"

namespace drascore {

struct GradSuiteResult {
  double max_rel_err{0.0};
  std::string worst_case;
  std::int64_t coords_checked{0};
  bool nonfinite{false};

  bool pass(double tol = 1e-4) const { return !nonfinite && max_rel_err < tol; }
};

// Finite-difference sweep over every registered op on random fixtures plus
// the full production encoder + head + local loss composite, repeated over
// `seeds` seeds at 64-bit precision.
inline GradSuiteResult run_gradient_suite(int seeds, std::ostream* log = nullptr) {
  GradSuiteResult suite;
  auto fold_in = [&](const GradCheckReport& rep, const std::string& name) {
    suite.coords_checked += rep.coords_checked;
    if (rep.nonfinite_encountered) suite.nonfinite = true;
    if (rep.max_rel_err > suite.max_rel_err) {
      suite.max_rel_err = rep.max_rel_err;
      suite.worst_case = name;
    }
  };

  using D = double;
  auto rand_t = [](Shape shape, Rng& rng, const char* name, double spread = 1.0) {
    auto t = make_tensor<D>(std::move(shape), true);
    for (auto& v : t->data) v = rng.normal(0.0, spread);
    t->name = name;
    return t;
  };

  for (int seed = 1; seed <= seeds; ++seed) {
    Rng rng(mix_seed(static_cast<std::uint64_t>(seed), 0x6Dull));
    auto a = rand_t({3, 4}, rng, "a");
    auto b = rand_t({3, 4}, rng, "b");
    auto row = rand_t({4}, rng, "row");
    auto m1 = rand_t({3, 4}, rng, "m1");
    auto m2 = rand_t({4, 5}, rng, "m2");
    auto bm = rand_t({3, 5, 4}, rng, "bm");
    auto alpha = rand_t({3}, rng, "alpha");
    auto e1 = rand_t({2, 3}, rng, "e1");
    auto e2 = rand_t({2, 3}, rng, "e2");
    auto e3 = rand_t({2, 3}, rng, "e3");
    auto relu_in = rand_t({3, 4}, rng, "relu_in");
    for (auto& v : relu_in->data) v += (v >= 0 ? 0.05 : -0.05);
    auto cx = rand_t({2, 2, 5, 5, 5}, rng, "cx", 0.5);
    auto ck = rand_t({3, 2, 3, 3, 3}, rng, "ck", 0.3);
    auto cb = rand_t({3}, rng, "cb", 0.1);
    auto x5 = rand_t({3, 2, 3, 3, 3}, rng, "x5");
    auto gamma = rand_t({2}, rng, "gamma");
    auto beta = rand_t({2}, rng, "beta");
    auto rm = make_tensor<D>({2});
    auto rv = tensor_from<D>({2}, {1.0, 1.0});
    auto wfix = rand_t({3, 2, 3, 3, 3}, rng, "wfix");
    wfix->requires_grad = false;

    struct Case {
      const char* name;
      std::function<TensorPtr<D>(Tape<D>&)> f;
      std::vector<TensorPtr<D>> inputs;
    };
    const std::vector<Case> cases = {
        {"add", [&](Tape<D>& t) { return sum_all(&t, add(&t, a, b)); }, {a, b}},
        {"add_broadcast",
         [&](Tape<D>& t) { return sum_all(&t, elu(&t, add(&t, a, row))); }, {a, row}},
        {"sub", [&](Tape<D>& t) { return sum_all(&t, sigmoid(&t, sub(&t, a, b))); },
         {a, b}},
        {"mul", [&](Tape<D>& t) { return mean_all(&t, mul(&t, a, b)); }, {a, b}},
        {"scale", [&](Tape<D>& t) { return sum_all(&t, scale(&t, mul(&t, a, a), 0.37)); },
         {a}},
        {"reshape",
         [&](Tape<D>& t) {
           return sum_all(&t, mul(&t, reshape(&t, a, {4, 3}), reshape(&t, b, {4, 3})));
         },
         {a, b}},
        {"relu", [&](Tape<D>& t) { return sum_all(&t, relu(&t, relu_in)); }, {relu_in}},
        {"elu", [&](Tape<D>& t) { return sum_all(&t, elu(&t, a)); }, {a}},
        {"sigmoid", [&](Tape<D>& t) { return sum_all(&t, sigmoid(&t, a)); }, {a}},
        {"tanh", [&](Tape<D>& t) { return sum_all(&t, tanh_op(&t, a)); }, {a}},
        {"matmul", [&](Tape<D>& t) { return mean_all(&t, matmul(&t, m1, m2)); },
         {m1, m2}},
        {"rowwise_dot", [&](Tape<D>& t) { return sum_all(&t, rowwise_dot(&t, a, b)); },
         {a, b}},
        {"batched_matvec",
         [&](Tape<D>& t) { return mean_all(&t, batched_matvec(&t, bm, a)); }, {bm, a}},
        {"mix_experts",
         [&](Tape<D>& t) {
           return sum_all(&t, mix_experts(&t, sigmoid(&t, alpha), {e1, e2, e3}));
         },
         {alpha, e1, e2, e3}},
        {"concat",
         [&](Tape<D>& t) { return mean_all(&t, elu(&t, concat_cols(&t, {a, b, m1}))); },
         {a, b, m1}},
        {"l2_normalize",
         [&](Tape<D>& t) { return sum_all(&t, mul(&t, l2_normalize(&t, a, 1), b)); },
         {a, b}},
        {"log_sum_exp", [&](Tape<D>& t) { return sum_all(&t, log_sum_exp(&t, a)); },
         {a}},
        {"conv3d",
         [&](Tape<D>& t) { return sum_all(&t, conv3d(&t, cx, ck, cb, 1, 1)); },
         {cx, ck, cb}},
        {"conv3d_strided",
         [&](Tape<D>& t) { return mean_all(&t, elu(&t, conv3d(&t, cx, ck, cb, 2, 1))); },
         {cx, ck, cb}},
        {"global_avg_pool",
         [&](Tape<D>& t) { return mean_all(&t, elu(&t, global_avg_pool(&t, x5))); },
         {x5}},
        {"batchnorm_train",
         [&](Tape<D>& t) {
           auto y = batchnorm3d(&t, x5, gamma, beta, rm, rv, true, false);
           return mean_all(&t, mul(&t, elu(&t, y), wfix));
         },
         {x5, gamma, beta}},
        {"batchnorm_eval",
         [&](Tape<D>& t) {
           return mean_all(&t, batchnorm3d(&t, x5, gamma, beta, rm, rv, false, false));
         },
         {x5, gamma, beta}},
    };
    for (const auto& c : cases) {
      const auto rep = grad_check<D>(c.f, c.inputs, 1e-5, 48, seed * 977 + 13);
      fold_in(rep, std::string(c.name) + "/seed" + std::to_string(seed));
    }

    // full production architecture + projection head + local loss
    EncoderConfig ecfg;  // defaults
    Encoder<D> enc(ecfg);
    ParamStore<D> store;
    enc.init_params(store, rng);
    for (int blk = 0; blk < ecfg.blocks(); ++blk) {
      auto wr = store.get("enc.b" + std::to_string(blk) + ".wr");
      for (auto& v : wr->data) v = rng.normal(0.0, 0.3);
    }
    auto x = make_tensor<D>({2, 1, 16, 16, 16}, true);
    for (auto& v : x->data) v = rng.normal(0.0, 0.3);
    x->name = "patch_batch";
    auto kp = make_tensor<D>({2, ecfg.embed_dim});
    auto negs = make_tensor<D>({2, 4, ecfg.embed_dim});
    for (auto& v : kp->data) v = rng.normal();
    for (auto& v : negs->data) v = rng.normal();
    kp = l2_normalize<D>(nullptr, kp, 1);
    {
      auto flat = reshape<D>(nullptr, negs, {8, ecfg.embed_dim});
      flat = l2_normalize<D>(nullptr, flat, 1);
      negs = reshape<D>(nullptr, flat, {2, 4, ecfg.embed_dim});
    }
    const Vec3 p{0.25, -0.5, 0.75};
    std::vector<TensorPtr<D>> inputs{x};
    // conv biases feed BN mean-subtraction: identically zero gradient by
    // construction, excluded from the sweep
    for (const auto& name : store.names())
      if (name.find(".bias") == std::string::npos) inputs.push_back(store.get(name));
    const auto rep = grad_check<D>(
        [&](Tape<D>& tape) {
          auto out = enc.forward(&tape, x, p, store, true, false);
          auto emb = enc.project(&tape, out.rep, store);
          return local_loss(&tape, emb, kp, negs, 0.2);
        },
        inputs, 3e-4, 2, seed * 131 + 7);
    fold_in(rep, "encoder_composite/seed" + std::to_string(seed));
    if (log)
      (*log) << "seed " << seed << ": running max rel err " << suite.max_rel_err
             << " (" << suite.worst_case << ")\n";
  }
  return suite;
}

}  // namespace drascore
