#pragma once

// Finite-difference gradient suite in double precision: every differentiable
// primitive, a residual unit, the losses, and optionally a full TS-CNN + SBFL
// composition with beta frozen.

#include <cmath>
#include <functional>
#include <random>
#include <string>
#include <vector>

#include "tscnn/loss.hpp"
#include "tscnn/model.hpp"

namespace tscnn {

struct GradCheckResult {
  std::string op;
  double max_abs_error = 0;
  std::size_t trials = 0;
  double tolerance = 0;
  bool pass() const { return max_abs_error <= tolerance; }
};

struct GradCheckOptions {
  std::size_t trials = 20;
  double h = 1e-4;
  double tolerance = 1e-5;
  double full_tolerance = 1e-4;
  // Deep relu stacks put some pre-activations within 1e-4 of the kink, where
  // a wider stencil straddles it. 1e-5 keeps roundoff near 1e-9.
  double full_h = 1e-5;
  std::uint64_t seed = 2024;
};

using DTensor = Tensor<double>;
using OpFn = std::function<DTensor(const std::vector<DTensor>&)>;
using InputGen = std::function<std::vector<DTensor>(Rng&)>;

namespace gradcheck_detail {

inline DTensor random_tensor(Shape shape, Rng& rng, double lo = -1, double hi = 1) {
  std::uniform_real_distribution<double> u(lo, hi);
  DTensor t(std::move(shape));
  for (auto& v : t.data()) v = u(rng);
  return t;
}

/// Values bounded away from zero, so relu's kink is never within h.
inline DTensor off_kink_tensor(Shape shape, Rng& rng) {
  std::uniform_real_distribution<double> mag(0.05, 1.0);
  std::bernoulli_distribution sign(0.5);
  DTensor t(std::move(shape));
  for (auto& v : t.data()) v = sign(rng) ? mag(rng) : -mag(rng);
  return t;
}

inline DTensor binary_tensor(Shape shape, Rng& rng) {
  std::bernoulli_distribution b(0.3);
  DTensor t(std::move(shape));
  for (auto& v : t.data()) v = b(rng) ? 1.0 : 0.0;
  return t;
}

/// Max |analytic - numeric| over all inputs for the scalar <f(inputs), w>
/// with a random fixed projection w.
inline double check_once(const OpFn& f, const std::vector<DTensor>& raw, Rng& rng, double h) {
  std::vector<DTensor> inputs;
  for (const auto& r : raw) inputs.push_back(r.detach().set_requires_grad(true));
  DTensor out = f(inputs);
  const DTensor w = random_tensor(out.shape(), rng);
  backward(sum(mul(out, w)));

  double worst = 0;
  for (std::size_t i = 0; i < inputs.size(); ++i) {
    auto scalar_fn = [&](const DTensor& probe) {
      std::vector<DTensor> args;
      for (std::size_t j = 0; j < raw.size(); ++j) args.push_back(j == i ? probe : raw[j]);
      return sum(mul(f(args), w)).item();
    };
    const DTensor numeric = finite_diff_grad(scalar_fn, raw[i], h);
    const auto analytic = inputs[i].grad();
    for (std::size_t k = 0; k < numeric.size(); ++k) worst = std::max(worst, std::abs(analytic[k] - numeric[k]));
  }
  return worst;
}

}  // namespace gradcheck_detail

inline GradCheckResult check_op(const std::string& name, const OpFn& f, const InputGen& gen,
                                const GradCheckOptions& opt, Rng& rng) {
  GradCheckResult r{name, 0, opt.trials, opt.tolerance};
  for (std::size_t t = 0; t < opt.trials; ++t) {
    r.max_abs_error = std::max(r.max_abs_error, gradcheck_detail::check_once(f, gen(rng), rng, opt.h));
  }
  return r;
}

/// The op-level suite.
inline std::vector<GradCheckResult> run_op_gradchecks(const GradCheckOptions& opt = {}) {
  using namespace gradcheck_detail;
  Rng rng(opt.seed);
  auto two = [](Shape s) {
    return [s](Rng& g) { return std::vector<DTensor>{random_tensor(s, g), random_tensor(s, g)}; };
  };
  auto one = [](Shape s, double lo = -1, double hi = 1) {
    return [s, lo, hi](Rng& g) { return std::vector<DTensor>{random_tensor(s, g, lo, hi)}; };
  };

  std::vector<GradCheckResult> out;
  auto run = [&](const std::string& name, OpFn f, InputGen gen) { out.push_back(check_op(name, f, gen, opt, rng)); };

  run("add", [](auto& a) { return add(a[0], a[1]); }, two({2, 3}));
  run("sub", [](auto& a) { return sub(a[0], a[1]); }, two({2, 3}));
  run("mul", [](auto& a) { return mul(a[0], a[1]); }, two({2, 3}));
  run("add_scalar", [](auto& a) { return add_scalar(a[0], 0.7); }, one({2, 3}));
  run("mul_scalar", [](auto& a) { return mul_scalar(a[0], -1.3); }, one({2, 3}));
  run("rsub_scalar", [](auto& a) { return rsub_scalar(1.0, a[0]); }, one({2, 3}));
  run("neg", [](auto& a) { return neg(a[0]); }, one({2, 3}));
  run("pow", [](auto& a) { return pow_scalar(a[0], 2.0); }, one({2, 3}, 0.2, 1.5));
  run("pow_fractional", [](auto& a) { return pow_scalar(a[0], 1.5); }, one({2, 3}, 0.2, 1.5));
  {
    // log has a steep third derivative near 0.05; a smaller step keeps the stencil's truncation error below 1e-6.
    GradCheckOptions fine = opt;
    fine.h = std::min(opt.h, 1e-5);
    out.push_back(check_op("log_shift", [](auto& a) { return log_shift(a[0], 1e-7); }, one({2, 3}, 0.05, 1.0), fine, rng));
  }
  run("relu", [](auto& a) { return relu(a[0]); }, [](Rng& g) { return std::vector<DTensor>{off_kink_tensor({2, 3}, g)}; });
  run("sigmoid", [](auto& a) { return sigmoid(a[0]); }, one({2, 3}, -3, 3));
  run("sum", [](auto& a) { return sum(a[0]); }, one({2, 3, 4}));
  run("mean", [](auto& a) { return mean(a[0]); }, one({2, 3, 4}));
  run("sum_axes", [](auto& a) { return sum(a[0], {1}); }, one({2, 3, 4}));
  run("mean_axes", [](auto& a) { return mean(a[0], {0, 2}); }, one({2, 3, 4}));
  run("reshape", [](auto& a) { return reshape(a[0], {3, 2}); }, one({2, 3}));
  run("concat", [](auto& a) { return concat<double>({a[0], a[1]}, 1); },
      [](Rng& g) { return std::vector<DTensor>{random_tensor({1, 2, 3, 3}, g), random_tensor({1, 3, 3, 3}, g)}; });
  run("slice", [](auto& a) { return slice(a[0], 1, 1, 2); }, one({2, 4, 3}));
  run("fanout", [](auto& a) { return add(mul(a[0], sigmoid(a[0])), a[0]); }, one({2, 3}, -2, 2));

  auto conv_inputs = [](Shape x, Shape w, std::size_t co) {
    return [x, w, co](Rng& g) {
      return std::vector<DTensor>{random_tensor(x, g), random_tensor(w, g), random_tensor({co}, g)};
    };
  };
  run("conv2d_s1p1", [](auto& a) { return conv2d(a[0], a[1], a[2], 1, 1); }, conv_inputs({2, 2, 5, 5}, {3, 2, 3, 3}, 3));
  run("conv2d_s2p1", [](auto& a) { return conv2d(a[0], a[1], a[2], 2, 1); }, conv_inputs({1, 2, 6, 6}, {2, 2, 3, 3}, 2));
  run("conv2d_1x1", [](auto& a) { return conv2d(a[0], a[1], a[2], 2, 0); }, conv_inputs({2, 3, 4, 4}, {2, 3, 1, 1}, 2));
  run("conv_transpose2d_k2s2", [](auto& a) { return conv_transpose2d(a[0], a[1], a[2], 2, 0); },
      conv_inputs({2, 3, 3, 3}, {3, 2, 2, 2}, 2));
  run("conv_transpose2d_k3s2p1", [](auto& a) { return conv_transpose2d(a[0], a[1], a[2], 2, 1); },
      conv_inputs({1, 2, 3, 3}, {2, 2, 3, 3}, 2));

  auto bn_inputs = [](Rng& g) {
    return std::vector<DTensor>{random_tensor({3, 2, 3, 3}, g, -2, 2), random_tensor({2}, g, 0.5, 1.5),
                                random_tensor({2}, g)};
  };
  run("batch_norm2d_train",
      [](auto& a) {
        BatchNormState<double> st(2);
        return batch_norm2d(a[0], a[1], a[2], st, Mode::Train);
      },
      bn_inputs);
  run("batch_norm2d_eval",
      [](auto& a) {
        BatchNormState<double> st(DTensor({2}, std::vector<double>{0.3, -0.2}), DTensor({2}, std::vector<double>{1.7, 0.6}));
        return batch_norm2d(a[0], a[1], a[2], st, Mode::Eval);
      },
      bn_inputs);

  {
    ParamStore<double> store;
    Rng init(opt.seed + 1);
    const ResidualUnitConfig cfg{2, 4, 2};
    register_residual_unit(store, "unit", cfg, init);
    run("residual_unit",
        [&store, cfg](auto& a) { return residual_unit(a[0], cfg, store, "unit", Mode::Train); },
        [](Rng& g) { return std::vector<DTensor>{random_tensor({2, 2, 6, 6}, g)}; });
  }

  FocalConfig fc;
  auto loss_inputs = [](Rng& g) {
    return std::vector<DTensor>{random_tensor({2, 1, 3, 3}, g, 0.05, 0.95)};
  };
  Rng label_rng(opt.seed + 2);
  const DTensor labels = binary_tensor({2, 1, 3, 3}, label_rng);
  run("focal_loss", [&](auto& a) { return focal_loss(labels, a[0], fc); }, loss_inputs);
  run("sbfl_frozen_beta", [&](auto& a) { return sbfl_with_beta(labels, a[0], fc, 0.73); }, loss_inputs);
  return out;
}

/// TS-CNN (CC=2, 16x16 patches) + SBFL with beta frozen at its forward value;
/// compares every parameter gradient entry (sampled for large tensors) and the
/// gradient with respect to the centre slice.
inline std::vector<GradCheckResult> run_full_gradcheck(const GradCheckOptions& opt = {},
                                                       std::size_t samples_per_tensor = 24) {
  using namespace gradcheck_detail;
  Rng rng(opt.seed + 10);
  ModelConfig cfg;
  cfg.base_channels = 2;
  cfg.num_scales = 4;
  cfg.input_size = 16;
  Model<double> model = build_tscnn<double>(cfg, opt.seed + 11);
  // Small random nonzero biases so no relu input sits exactly on the kink.
  for (auto& [name, p] : model.params().params())
    if (name.ends_with(".bias") || name.ends_with(".beta"))
      for (auto& v : p.data()) v = std::uniform_real_distribution<double>(-0.1, 0.1)(rng);

  TripletBatch<double> batch{random_tensor({2, 1, 16, 16}, rng, 0, 1), random_tensor({2, 1, 16, 16}, rng, 0, 1),
                             random_tensor({2, 1, 16, 16}, rng, 0, 1), binary_tensor({2, 1, 16, 16}, rng)};
  FocalConfig fc;
  double beta = 0;
  {
    NoGradGuard ng;
    ParamStore<double> scratch = model.params().clone();
    Model<double> probe(model.arch(), std::move(scratch));
    beta = sbfl(batch.target, forward(probe, batch, Mode::Train), fc).second.beta;
  }

  // Train-mode BN only writes running stats, which train-mode outputs ignore.
  auto loss_value = [&]() { return sbfl_with_beta(batch.target, forward(model, batch, Mode::Train), fc, beta); };

  model.params().zero_grad();
  batch.cur.set_requires_grad(true);
  backward(loss_value());

  GradCheckResult params{"tscnn_sbfl_params", 0, 0, opt.full_tolerance};
  GradCheckResult input{"tscnn_sbfl_input", 0, 0, opt.full_tolerance};
  NoGradGuard ng;
  auto numeric_at = [&](double& slot) {
    const double saved = slot;
    slot = saved + opt.full_h;
    const double up = loss_value().item();
    slot = saved - opt.full_h;
    const double down = loss_value().item();
    slot = saved;
    return (up - down) / (2 * opt.full_h);
  };
  for (auto& [name, p] : model.params().params()) {
    const std::size_t n = p.size();
    std::vector<std::size_t> idx(n);
    for (std::size_t i = 0; i < n; ++i) idx[i] = i;
    std::shuffle(idx.begin(), idx.end(), rng);
    idx.resize(std::min(n, samples_per_tensor));
    for (auto i : idx) {
      const double analytic = p.grad()[i];
      params.max_abs_error = std::max(params.max_abs_error, std::abs(analytic - numeric_at(p.data()[i])));
      ++params.trials;
    }
  }
  std::vector<std::size_t> idx(batch.cur.size());
  for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = i;
  std::shuffle(idx.begin(), idx.end(), rng);
  idx.resize(std::min<std::size_t>(idx.size(), 64));
  for (auto i : idx) {
    const double analytic = batch.cur.grad()[i];
    input.max_abs_error = std::max(input.max_abs_error, std::abs(analytic - numeric_at(batch.cur.data()[i])));
    ++input.trials;
  }
  return {params, input};
}

inline std::string format_gradcheck_table(const std::vector<GradCheckResult>& results) {
  std::string s = "op                          max_abs_error  tolerance  trials  status\n";
  for (const auto& r : results) {
    char line[160];
    std::snprintf(line, sizeof line, "%-26s  %13.3e  %9.1e  %6zu  %s\n", r.op.c_str(), r.max_abs_error, r.tolerance,
                  r.trials, r.pass() ? "ok" : "FAIL");
    s += line;
  }
  return s;
}

}  // namespace tscnn
