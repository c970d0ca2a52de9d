#pragma once

// Central finite-difference checks of reverse-mode gradients in 64-bit.
//
// Each probe reduces an op's output to r = sum(out * R) with a fixed random R,
// back-propagates once, and compares every (or a sampled subset of) input
// entries against (r(x + eps) - r(x - eps)) / (2 eps). The reported error for a
// tensor is max|analytic - numeric| / max(max|numeric|, max|analytic|, floor);
// the floor keeps gradients that vanish identically (e.g. a bias feeding a
// softmax) from turning rounding noise into a relative error of 1.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <functional>
#include <random>
#include <string>
#include <vector>

#include "attnmvs/dataset.hpp"

namespace attnmvs {

struct GradcheckResult {
  std::string op;
  double max_rel_error = 0;
  std::size_t entries = 0;
  double seconds = 0;
  std::string worst_input;
};

struct GradcheckOptions {
  double eps = 1e-6;
  std::size_t samples_per_tensor = 0;  // 0 = every entry
  double floor = 1e-3;
  std::uint64_t seed = 7;
};

using GradFn = std::function<Tensor<double>(const std::vector<Tensor<double>>&)>;

inline GradcheckResult gradcheck(const std::string& name, const GradFn& fn, const std::vector<Tensor<double>>& inputs,
                                 const std::vector<std::string>& input_names, const GradcheckOptions& opt = {}) {
  const auto start = std::chrono::steady_clock::now();
  std::mt19937_64 rng(opt.seed);
  std::normal_distribution<double> normal(0.0, 1.0);

  Tensor<double> weights;
  auto readout = [&](const Tensor<double>& out) {
    if (!weights.defined()) {
      std::vector<double> w(out.numel());
      for (auto& v : w) v = out.numel() == 1 ? 1.0 : normal(rng);
      weights = Tensor<double>(out.shape(), std::move(w));
    }
    return sum(mul(out, weights));
  };

  for (auto in : inputs) {
    in.set_requires_grad(true);
    in.zero_grad();
  }
  {
    Tape<double> tape;
    TapeScope<double> scope(tape);
    const auto r = readout(fn(inputs));
    tape.backward(r);
  }

  GradcheckResult result;
  result.op = name;
  NoGradScope<double> no_grad;
  for (std::size_t t = 0; t < inputs.size(); ++t) {
    Tensor<double> x = inputs[t];
    const std::vector<double> analytic(x.grad().begin(), x.grad().end());
    std::vector<std::size_t> idx(x.numel());
    for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = i;
    if (opt.samples_per_tensor && idx.size() > opt.samples_per_tensor) {
      std::shuffle(idx.begin(), idx.end(), rng);
      idx.resize(opt.samples_per_tensor);
    }
    double max_diff = 0, scale_ref = opt.floor;
    for (std::size_t i : idx) {
      auto values = x.mutable_values();
      const double saved = values[i];
      values[i] = saved + opt.eps;
      const double up = readout(fn(inputs)).item();
      values[i] = saved - opt.eps;
      const double down = readout(fn(inputs)).item();
      values[i] = saved;
      const double numeric = (up - down) / (2 * opt.eps);
      max_diff = std::max(max_diff, std::abs(numeric - analytic[i]));
      scale_ref = std::max({scale_ref, std::abs(numeric), std::abs(analytic[i])});
      ++result.entries;
    }
    const double rel = max_diff / scale_ref;
    if (rel >= result.max_rel_error) {
      result.max_rel_error = rel;
      result.worst_input = t < input_names.size() ? input_names[t] : std::to_string(t);
    }
  }
  result.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  return result;
}

namespace detail {

inline Tensor<double> random_tensor(Shape shape, std::mt19937_64& rng, double lo = -1.0, double hi = 1.0) {
  std::uniform_real_distribution<double> dist(lo, hi);
  std::vector<double> v(static_cast<std::size_t>(shape_numel(shape)));
  for (auto& x : v) x = dist(rng);
  return Tensor<double>::parameter(std::move(shape), std::move(v));
}

/// Two-view rig looking at depths around 5 with a sideways baseline.
inline std::vector<Camera> probe_cameras(std::int64_t size, int views = 2) {
  SynthConfig cfg;
  cfg.height = cfg.width = size;
  cfg.views = views;
  cfg.depth_min = 4.0;
  cfg.depth_max = 8.0;
  cfg.arc_step_deg = 6.0;
  std::vector<Camera> cams;
  const double f = static_cast<double>(size);
  for (int v = 0; v < views; ++v) {
    const int k = (v + 1) / 2;
    const double angle = (v % 2 ? 1.0 : -1.0) * k * cfg.arc_step_deg;
    const Mat3 to_world = rotation_y(angle);
    const Vec3 look_at(0, 0, 6.0);
    Camera c;
    c.K << f, 0, 0.5 * (f - 1), 0, f, 0.5 * (f - 1), 0, 0, 1;
    c.R = to_world.transpose();
    c.t = -c.R * (look_at - to_world * Vec3(0, 0, 6.0));
    c.depth_min = cfg.depth_min;
    c.depth_max = cfg.depth_max;
    cams.push_back(c);
  }
  return cams;
}

struct Probe {
  std::string name;
  std::function<GradcheckResult(const GradcheckOptions&)> run;
};

inline std::vector<Probe> gradcheck_probes() {
  std::vector<Probe> probes;
  auto add = [&](std::string name, std::function<GradcheckResult(const GradcheckOptions&)> fn) {
    probes.push_back({std::move(name), std::move(fn)});
  };

  add("conv2d", [](const GradcheckOptions& o) {
    std::mt19937_64 rng(o.seed);
    auto x = random_tensor({3, 6, 7}, rng), w = random_tensor({4, 3, 3, 3}, rng), b = random_tensor({4}, rng);
    return gradcheck("conv2d", [](const auto& in) { return conv2d(in[0], in[1], in[2]); }, {x, w, b}, {"x", "w", "b"}, o);
  });
  add("conv3d", [](const GradcheckOptions& o) {
    std::mt19937_64 rng(o.seed + 1);
    auto x = random_tensor({2, 5, 6, 7}, rng), w = random_tensor({3, 2, 3, 3, 3}, rng), b = random_tensor({3}, rng);
    auto r1 = gradcheck("conv3d", [](const auto& in) { return conv3d(in[0], in[1], in[2], 1); }, {x, w, b},
                        {"x", "w", "b"}, o);
    auto r2 = gradcheck("conv3d", [](const auto& in) { return conv3d(in[0], in[1], in[2], 2); }, {x, w, b},
                        {"x", "w", "b"}, o);
    r1.entries += r2.entries;
    r1.seconds += r2.seconds;
    if (r2.max_rel_error > r1.max_rel_error) {
      r1.max_rel_error = r2.max_rel_error;
      r1.worst_input = r2.worst_input + " (stride 2)";
    }
    return r1;
  });
  add("leaky_relu", [](const GradcheckOptions& o) {
    std::mt19937_64 rng(o.seed + 2);
    auto x = random_tensor({4, 5, 5}, rng);
    return gradcheck("leaky_relu", [](const auto& in) { return leaky_relu(in[0], 0.1); }, {x}, {"x"}, o);
  });
  add("softmax", [](const GradcheckOptions& o) {
    std::mt19937_64 rng(o.seed + 3);
    auto x = random_tensor({6, 4, 5}, rng, -3, 3);
    return gradcheck("softmax", [](const auto& in) { return softmax_axis(in[0], 0); }, {x}, {"x"}, o);
  });
  add("grid_sample", [](const GradcheckOptions& o) {
    std::mt19937_64 rng(o.seed + 4);
    auto x = random_tensor({3, 6, 7}, rng);
    // Fractional parts kept away from integer lattice lines where bilinear weights kink.
    std::uniform_int_distribution<int> cell_u(0, 5), cell_v(0, 4);
    std::uniform_real_distribution<double> frac(0.1, 0.9);
    std::vector<double> c;
    for (int i = 0; i < 5 * 4; ++i) {
      c.push_back(cell_u(rng) + frac(rng));
      c.push_back(cell_v(rng) + frac(rng));
    }
    auto coords = Tensor<double>::parameter({5, 4, 2}, c);
    return gradcheck("grid_sample", [](const auto& in) { return grid_sample_bilinear(in[0], in[1]); }, {x, coords},
                     {"x", "coords"}, o);
  });
  add("upsample", [](const GradcheckOptions& o) {
    std::mt19937_64 rng(o.seed + 5);
    auto x = random_tensor({2, 4, 5}, rng);
    return gradcheck("upsample", [](const auto& in) { return upsample_bilinear_x2(in[0]); }, {x}, {"x"}, o);
  });
  add("self_attention", [](const GradcheckOptions& o) {
    std::mt19937_64 rng(o.seed + 6);
    auto w = SelfAttentionWeights<double>::init(4, 4, 2, 3, rng);
    // Embeddings scaled up so their gradient path is exercised at a visible magnitude.
    for (auto* t : {&w.rel_row, &w.rel_col})
      for (auto& v : t->mutable_values()) v *= 20.0;
    auto x = random_tensor({4, 5, 6}, rng);
    return gradcheck(
        "self_attention",
        [w](const auto& in) {
          SelfAttentionWeights<double> local = w;
          local.wq = in[1];
          local.wk = in[2];
          local.wv = in[3];
          local.rel_row = in[4];
          local.rel_col = in[5];
          return self_attention_2d(in[0], local);
        },
        {x, w.wq, w.wk, w.wv, w.rel_row, w.rel_col}, {"x", "wq", "wk", "wv", "rel_row", "rel_col"}, o);
  });
  add("group_correlation", [](const GradcheckOptions& o) {
    std::mt19937_64 rng(o.seed + 7);
    auto a = random_tensor({8, 4, 5}, rng), b = random_tensor({8, 4, 5}, rng);
    return gradcheck("group_correlation", [](const auto& in) { return groupwise_correlation(in[0], in[1], 4); },
                     {a, b}, {"f_ref", "f_warp"}, o);
  });
  add("cost_volume", [](const GradcheckOptions& o) {
    std::mt19937_64 rng(o.seed + 8);
    const auto cams = probe_cameras(8, 3);
    auto f0 = random_tensor({4, 8, 8}, rng), f1 = random_tensor({4, 8, 8}, rng), f2 = random_tensor({4, 8, 8}, rng);
    auto depth = random_tensor({3, 8, 8}, rng, 4.5, 7.5);
    return gradcheck(
        "cost_volume",
        [cams](const auto& in) {
          const auto global = build_cost_volume<double>({in[0], in[1], in[2]}, cams,
                                                        Hypotheses<double>::global(sample_depth_planes(4, 8, 4)), 2);
          const auto local = build_cost_volume<double>({in[0], in[1], in[2]}, cams,
                                                       Hypotheses<double>::pixelwise(in[3], 0), 2);
          return concat0<double>({reshape(global.values, {2 * 4 * 64}), reshape(local.values, {2 * 3 * 64})});
        },
        {f0, f1, f2, depth}, {"f_ref", "f_src1", "f_src2", "depth"}, o);
  });
  add("regularizer", [](const GradcheckOptions& o) {
    std::mt19937_64 rng(o.seed + 9);
    auto w = Regularizer3DWeights<double>::init(2, rng);
    auto cost = random_tensor({2, 8, 8, 8}, rng);
    GradcheckOptions local = o;
    if (!local.samples_per_tensor) local.samples_per_tensor = 16;
    ParameterList<double> params;
    w.collect(params, "reg");
    std::vector<Tensor<double>> inputs{cost};
    std::vector<std::string> names{"cost"};
    for (const auto& p : params) {
      inputs.push_back(p.tensor);
      names.push_back(p.name);
    }
    return gradcheck(
        "regularizer",
        [w](const auto& in) {
          Regularizer3DWeights<double> local = w;
          Conv3dLayer<double>* layers[] = {&local.stem, &local.down1, &local.down2, &local.down3,
                                           &local.up3,  &local.up2,   &local.up1,   &local.head};
          for (std::size_t k = 0; k < 8; ++k) {
            layers[k]->weight = in[1 + 2 * k];
            layers[k]->bias = in[2 + 2 * k];
          }
          return regularize(in[0], local);
        },
        inputs, names, local);
  });
  add("regress_depth", [](const GradcheckOptions& o) {
    std::mt19937_64 rng(o.seed + 10);
    auto logits = random_tensor({5, 4, 4}, rng, -2, 2), hyp = random_tensor({5, 4, 4}, rng, 4, 8);
    return gradcheck(
        "regress_depth",
        [](const auto& in) {
          const auto p = softmax_axis(in[0], 0);
          return concat0<double>({regress_depth(p, Hypotheses<double>::pixelwise(in[1], 0)),
                                  regress_depth(p, Hypotheses<double>::global(sample_depth_planes(4, 8, 5)))});
        },
        {logits, hyp}, {"logits", "hypotheses"}, o);
  });
  add("residual", [](const GradcheckOptions& o) {
    std::mt19937_64 rng(o.seed + 11);
    const auto cams = probe_cameras(8, 3);
    auto depth = random_tensor({8, 8}, rng, 4.5, 7.5), logits = random_tensor({5, 8, 8}, rng, -2, 2);
    return gradcheck(
        "residual",
        [cams](const auto& in) {
          const std::vector<Camera> srcs(cams.begin() + 1, cams.end());
          const auto hyp = build_residual_hypotheses(in[0], cams[0], srcs, 4, 0);
          return refine_depth(softmax_axis(in[1], 0), hyp, in[0]);
        },
        {depth, logits}, {"depth_up", "logits"}, o);
  });
  add("loss", [](const GradcheckOptions& o) {
    std::mt19937_64 rng(o.seed + 12);
    auto d1 = random_tensor({4, 4}, rng, 4, 8), d0 = random_tensor({8, 8}, rng, 4, 8);
    std::vector<DepthMap<double>> gts{DepthMap<double>::all_valid(random_tensor({4, 4}, rng, 4, 8).detach()),
                                      DepthMap<double>::all_valid(random_tensor({8, 8}, rng, 4, 8).detach())};
    gts[1].valid[3] = 0;
    return gradcheck(
        "loss", [gts](const auto& in) { return pyramid_loss<double>({in[0], in[1]}, gts); }, {d1, d0},
        {"estimate_l1", "estimate_l0"}, o);
  });
  add("end_to_end", [](const GradcheckOptions& o) {
    // 16x16, two views, L=1, M_coarse=8, M_fine=4; the output is the pyramid loss itself.
    SynthConfig sc;
    sc.height = sc.width = 16;
    sc.views = 2;
    sc.arc_step_deg = 6.0;
    sc.geometry = SceneGeometry::Steps;
    const auto scene = generate_synthetic_scene<double>(o.seed, sc);
    const auto sample = sample_from_scene(scene, 0, 2, 1);
    NetworkConfig net;
    net.levels = 1;
    net.m_coarse = 8;
    net.m_fine = 4;
    net.groups = 4;
    const auto weights = NetworkWeights<double>::init(net, o.seed);
    const auto params = weights.parameters();
    // Zero-initialized biases put every unit whose receptive field is all zeros
    // (e.g. cost-volume cells warped off-image) exactly on a leaky-ReLU kink;
    // move to a generic point so the derivative is well defined.
    std::mt19937_64 rng(o.seed + 13);
    std::uniform_real_distribution<double> offset(-0.05, 0.05);
    for (const auto& p : params)
      if (p.tensor.rank() == 1)
        for (auto& v : Tensor<double>(p.tensor).mutable_values()) v += offset(rng);
    std::vector<Tensor<double>> inputs;
    std::vector<std::string> names;
    for (const auto& p : params) {
      inputs.push_back(p.tensor);
      names.push_back(p.name);
    }
    GradcheckOptions local = o;
    if (!local.samples_per_tensor) local.samples_per_tensor = 4;
    return gradcheck(
        "end_to_end",
        [weights, sample, net](const auto&) {
          // The weights object shares storage with `inputs`, so perturbations are seen here.
          const auto levels = infer_depth_pyramid(sample.images, sample.cams, weights, net);
          std::vector<Tensor<double>> est;
          for (const auto& l : levels) est.push_back(l.depth);
          return pyramid_loss(est, sample.gt_coarse_to_fine());
        },
        inputs, names, local);
  });
  return probes;
}

}  // namespace detail

inline std::vector<std::string> gradcheck_op_names() {
  std::vector<std::string> names;
  for (const auto& p : detail::gradcheck_probes()) names.push_back(p.name);
  return names;
}

/// Runs the named probe ("all" runs every probe).
inline std::vector<GradcheckResult> run_gradcheck(const std::string& op, const GradcheckOptions& opt = {}) {
  std::vector<GradcheckResult> out;
  for (const auto& p : detail::gradcheck_probes())
    if (op == "all" || op == p.name) out.push_back(p.run(opt));
  if (out.empty()) throw InvalidArgument("unknown gradcheck op '" + op + "'");
  return out;
}

}  // namespace attnmvs
