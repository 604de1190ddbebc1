#include "gradreg/gradcheck.hpp"

#include "gradreg/losses.hpp"
#include "gradreg/network.hpp"
#include "gradreg/ops.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

namespace gradreg {

template <typename S>
ArrayX<S> fd_gradient(const std::function<S()>& eval, Tensor<S>& leaf, S step) {
  ArrayX<S> g(leaf.size());
  for (long i = 0; i < leaf.size(); ++i) {
    S saved = leaf.data()[i];
    leaf.data()[i] = saved + step;
    S fp = eval();
    leaf.data()[i] = saved - step;
    S fm = eval();
    leaf.data()[i] = saved;
    g(i) = (fp - fm) / (S(2) * step);
  }
  return g;
}

template ArrayX<float> fd_gradient(const std::function<float()>&, Tensor<float>&, float);
template ArrayX<double> fd_gradient(const std::function<double()>&, Tensor<double>&, double);

namespace {

template <typename S>
struct Tolerances {
  S step;
  double rtol, atol;
};

template <typename S>
struct Instance {
  // Leaves to differentiate against; the forward closure reads them in place.
  std::vector<Tensor<S>> inputs;
  std::function<Tensor<S>(const std::vector<Tensor<S>>&)> forward;
  // Optional extra validation of analytic gradients; returns "" when fine.
  std::function<std::string(const std::vector<ArrayX<S>>&)> extra;
  // Cap on FD probes per leaf (0 = every element).
  int fd_subset = 0;
};

template <typename S>
struct CheckSpec {
  std::string name;
  std::function<Instance<S>(std::mt19937_64&)> make;
  int seeds = 0;  // 0 = take GradCheckOptions::seeds_per_op
  // Overrides for coarse composite checks (0 = defaults).
  double rtol = 0, atol = 0;
  S step = S(0);
};

template <typename S>
ArrayX<S> random_array(long n, std::mt19937_64& rng, double lo, double hi) {
  std::uniform_real_distribution<double> dist(lo, hi);
  ArrayX<S> a(n);
  for (long i = 0; i < n; ++i) a(i) = static_cast<S>(dist(rng));
  return a;
}

template <typename S>
Tensor<S> random_tensor(Shape shape, std::mt19937_64& rng, double lo = -1.0, double hi = 1.0) {
  long n = numel(shape);
  return Tensor<S>(std::move(shape), random_array<S>(n, rng, lo, hi));
}

// Random values bounded away from the ReLU kink at zero.
template <typename S>
Tensor<S> random_offzero(Shape shape, std::mt19937_64& rng) {
  Tensor<S> t = random_tensor<S>(std::move(shape), rng, 0.1, 1.0);
  for (long i = 0; i < t.size(); ++i)
    if (rng() & 1) t.data()[i] = -t.data()[i];
  return t;
}

// Coordinates with fractional part in [0.1, 0.9] so FD steps stay within one
// interpolation cell.
template <typename S>
Tensor<S> random_coords(int D, int H, int W, std::mt19937_64& rng) {
  Tensor<S> t(Shape{3, D, H, W});
  std::array<int, 3> ext{D, H, W};
  long n = static_cast<long>(D) * H * W;
  std::uniform_real_distribution<double> frac(0.1, 0.9);
  for (int a = 0; a < 3; ++a) {
    std::uniform_int_distribution<int> cell(0, std::max(ext[a] - 2, 0));
    for (long v = 0; v < n; ++v) t.data()[a * n + v] = static_cast<S>(cell(rng) + frac(rng));
  }
  return t;
}

// Fixed random projection onto a scalar: mean(x * r) keeps |f| near 1.
template <typename S>
std::function<Tensor<S>(const Tensor<S>&)> projector(const Shape& shape, std::mt19937_64& rng) {
  Tensor<S> r = random_tensor<S>(shape, rng, 0.5, 1.5);
  return [r](const Tensor<S>& x) { return mean(mul(x, r)); };
}

template <typename S>
GradCheckCase run_case(const CheckSpec<S>& spec, const GradCheckOptions& opts,
                       const Tolerances<S>& tol) {
  GradCheckCase result;
  result.op = spec.name;
  result.precision = sizeof(S) == 4 ? "f32" : "f64";
  int n_seeds = spec.seeds > 0 ? spec.seeds : opts.seeds_per_op;
  result.seeds = n_seeds;
  result.pass = true;
  double rtol = spec.rtol > 0 ? spec.rtol : tol.rtol;
  double atol = spec.atol > 0 ? spec.atol : tol.atol;
  S step = spec.step > S(0) ? spec.step : tol.step;

  for (int s = 0; s < n_seeds && result.pass; ++s) {
    std::mt19937_64 rng(opts.seed * 7919 + s * 104729 + std::hash<std::string>{}(spec.name));
    Instance<S> inst = spec.make(rng);

    // analytic pass
    Tape<S> tape;
    std::vector<Tensor<S>> tracked = inst.inputs;
    for (Tensor<S>& t : tracked) tape.watch(t);
    Tensor<S> root = inst.forward(tracked);
    if (root.size() != 1) throw std::logic_error("gradcheck: functional must be scalar");
    tape.backward(root);
    std::vector<ArrayX<S>> analytic;
    for (Tensor<S>& t : tracked) analytic.push_back(tape.grad(t));
    if (!opts.corrupt_op.empty() && opts.corrupt_op == spec.name)
      for (ArrayX<S>& g : analytic) g += S(0.01);

    if (inst.extra) {
      std::string err = inst.extra(analytic);
      if (!err.empty()) {
        result.pass = false;
        result.detail = "seed " + std::to_string(s) + ": " + err;
        break;
      }
    }

    // finite differences against the same functional, untracked
    auto eval = [&]() { return inst.forward(inst.inputs).value(); };
    for (size_t li = 0; li < inst.inputs.size() && result.pass; ++li) {
      Tensor<S>& leaf = inst.inputs[li];
      std::vector<long> idx(leaf.size());
      for (long i = 0; i < leaf.size(); ++i) idx[i] = i;
      if (inst.fd_subset > 0 && leaf.size() > inst.fd_subset) {
        std::shuffle(idx.begin(), idx.end(), rng);
        idx.resize(inst.fd_subset);
      }
      for (long i : idx) {
        S saved = leaf.data()[i];
        leaf.data()[i] = saved + step;
        double fp = static_cast<double>(eval());
        leaf.data()[i] = saved - step;
        double fm = static_cast<double>(eval());
        leaf.data()[i] = saved;
        double fd = (fp - fm) / (2.0 * static_cast<double>(step));
        double an = static_cast<double>(analytic[li](i));
        double abs_err = std::abs(an - fd);
        double rel_err = abs_err / std::max(1e-12, std::max(std::abs(an), std::abs(fd)));
        result.max_abs_err = std::max(result.max_abs_err, abs_err);
        if (abs_err > atol + rtol * std::max(std::abs(an), std::abs(fd))) {
          result.pass = false;
          result.max_rel_err = std::max(result.max_rel_err, rel_err);
          std::ostringstream os;
          os << "seed " << s << " leaf " << li << " elem " << i << ": analytic " << an
             << " vs fd " << fd;
          result.detail = os.str();
          break;
        }
        if (abs_err > atol) result.max_rel_err = std::max(result.max_rel_err, rel_err);
      }
    }
  }
  return result;
}

// ---- case registry ---------------------------------------------------------

template <typename S>
std::vector<CheckSpec<S>> build_specs() {
  std::vector<CheckSpec<S>> specs;

  specs.push_back({"conv3d", [](std::mt19937_64& rng) {
    Instance<S> in;
    in.inputs = {random_tensor<S>({2, 4, 4, 4}, rng), random_tensor<S>({3, 2, 3, 3, 3}, rng),
                 random_tensor<S>({3}, rng)};
    auto proj = projector<S>({3, 4, 4, 4}, rng);
    in.forward = [proj](const std::vector<Tensor<S>>& t) {
      return proj(conv3d(t[0], t[1], t[2], 1, 1));
    };
    return in;
  }});

  specs.push_back({"conv3d_stride2", [](std::mt19937_64& rng) {
    Instance<S> in;
    in.inputs = {random_tensor<S>({2, 4, 4, 4}, rng), random_tensor<S>({3, 2, 2, 2, 2}, rng),
                 random_tensor<S>({3}, rng)};
    auto proj = projector<S>({3, 2, 2, 2}, rng);
    in.forward = [proj](const std::vector<Tensor<S>>& t) {
      return proj(conv3d(t[0], t[1], t[2], 2, 0));
    };
    return in;
  }});

  specs.push_back({"leaky_relu", [](std::mt19937_64& rng) {
    Instance<S> in;
    in.inputs = {random_offzero<S>({2, 3, 3, 3}, rng)};
    auto proj = projector<S>({2, 3, 3, 3}, rng);
    in.forward = [proj](const std::vector<Tensor<S>>& t) {
      return proj(leaky_relu(t[0], S(0.2)));
    };
    return in;
  }});

  specs.push_back({"instance_norm", [](std::mt19937_64& rng) {
    Instance<S> in;
    in.inputs = {random_tensor<S>({2, 3, 3, 3}, rng)};
    auto proj = projector<S>({2, 3, 3, 3}, rng);
    in.forward = [proj](const std::vector<Tensor<S>>& t) {
      return proj(instance_norm(t[0], S(1e-5)));
    };
    return in;
  }});

  specs.push_back({"cumsum_exclusive", [](std::mt19937_64& rng) {
    Instance<S> in;
    in.inputs = {random_tensor<S>({2, 3, 4, 5}, rng)};
    int axis = static_cast<int>(rng() % 4);
    auto proj = projector<S>({2, 3, 4, 5}, rng);
    in.forward = [proj, axis](const std::vector<Tensor<S>>& t) {
      return proj(cumsum_exclusive(t[0], axis));
    };
    return in;
  }});

  specs.push_back({"trilinear_sample", [](std::mt19937_64& rng) {
    Instance<S> in;
    in.inputs = {random_tensor<S>({1, 4, 4, 4}, rng), random_coords<S>(3, 3, 3, rng)};
    auto proj = projector<S>({1, 3, 3, 3}, rng);
    in.forward = [proj](const std::vector<Tensor<S>>& t) {
      return proj(trilinear_sample(t[0], t[1]));
    };
    return in;
  }});

  specs.push_back({"upsample_nearest2x", [](std::mt19937_64& rng) {
    Instance<S> in;
    in.inputs = {random_tensor<S>({2, 2, 2, 2}, rng)};
    auto proj = projector<S>({2, 4, 4, 4}, rng);
    in.forward = [proj](const std::vector<Tensor<S>>& t) {
      return proj(upsample_nearest2x(t[0]));
    };
    return in;
  }});

  specs.push_back({"elementwise", [](std::mt19937_64& rng) {
    Instance<S> in;
    in.inputs = {random_tensor<S>({2, 3, 3, 3}, rng, 0.2, 1.2),
                 random_tensor<S>({2, 3, 3, 3}, rng, 0.2, 1.2)};
    auto proj = projector<S>({2, 3, 3, 3}, rng);
    in.forward = [proj](const std::vector<Tensor<S>>& t) {
      Tensor<S> y = sigmoid(mul(t[0], t[0]));
      y = add(y, sqrt(divide(t[1], scalar_add(square(t[0]), S(1)))));
      y = sub(scalar_mul(y, S(0.5)), neg(t[1]));
      return proj(y);
    };
    return in;
  }});

  specs.push_back({"slice_concat", [](std::mt19937_64& rng) {
    Instance<S> in;
    in.inputs = {random_tensor<S>({3, 2, 2, 2}, rng)};
    auto proj = projector<S>({2, 2, 2, 2}, rng);
    in.forward = [proj](const std::vector<Tensor<S>>& t) {
      Tensor<S> a = slice_channel(t[0], 0);
      Tensor<S> b = slice_channel(t[0], 2);
      return proj(concat_channels<S>({mul(a, b), sub(a, b)}));
    };
    return in;
  }});

  specs.push_back({"mse", [](std::mt19937_64& rng) {
    Instance<S> in;
    in.inputs = {random_tensor<S>({1, 3, 3, 3}, rng), random_tensor<S>({1, 3, 3, 3}, rng)};
    in.forward = [](const std::vector<Tensor<S>>& t) { return mse(t[0], t[1]); };
    return in;
  }});

  specs.push_back({"ncc", [](std::mt19937_64& rng) {
    Instance<S> in;
    in.inputs = {random_tensor<S>({1, 3, 3, 3}, rng), random_tensor<S>({1, 3, 3, 3}, rng)};
    in.forward = [](const std::vector<Tensor<S>>& t) { return ncc(t[0], t[1]); };
    return in;
  }});

  specs.push_back({"soft_dice", [](std::mt19937_64& rng) {
    Instance<S> in;
    in.inputs = {random_tensor<S>({3, 3, 3, 3}, rng, 0.05, 0.95),
                 random_tensor<S>({3, 3, 3, 3}, rng, 0.05, 0.95)};
    in.forward = [](const std::vector<Tensor<S>>& t) { return soft_dice(t[0], t[1]); };
    return in;
  }});

  specs.push_back({"partial_dice", [](std::mt19937_64& rng) {
    Instance<S> in;
    in.inputs = {random_tensor<S>({3, 3, 3, 3}, rng, 0.05, 0.95),
                 random_tensor<S>({3, 3, 3, 3}, rng, 0.05, 0.95)};
    std::vector<uint8_t> avail{1, 1, 0};  // class 2 masked out
    in.forward = [avail](const std::vector<Tensor<S>>& t) {
      return partial_dice(t[0], t[1], avail);
    };
    // the masked class must receive exactly zero gradient
    in.extra = [](const std::vector<ArrayX<S>>& grads) -> std::string {
      long per = grads[0].size() / 3;
      if ((grads[0].segment(2 * per, per) != S(0)).any())
        return "masked class received nonzero prediction gradient";
      return "";
    };
    return in;
  }});

  specs.push_back({"smoothness", [](std::mt19937_64& rng) {
    Instance<S> in;
    in.inputs = {random_tensor<S>({3, 3, 3, 3}, rng, 0.2, 1.8)};
    in.forward = [](const std::vector<Tensor<S>>& t) {
      return smoothness(GradientField<S>{t[0]});
    };
    return in;
  }});

  // total_loss runs the activate -> integrate -> warp chain; affine-ramp
  // volumes keep trilinear interpolation kink-free so central differences
  // are valid everywhere, and raw offsets near -1 keep phi interior.
  specs.push_back({"total_loss", [](std::mt19937_64& rng) {
    Instance<S> in;
    auto ramp = [&rng](int C, int E, double lo, double hi) {
      // slope bound keeps ramps strictly inside (lo,hi): exactly affine data
      double bound = 0.9 * (hi - lo) / (2.0 * 3.0 * (E - 1));
      std::uniform_real_distribution<double> coef(-bound, bound);
      Tensor<S> t(Shape{C, E, E, E});
      for (int c = 0; c < C; ++c) {
        double az = coef(rng), ay = coef(rng), ax = coef(rng);
        double base = 0.5 * (lo + hi);
        long v = 0;
        for (int z = 0; z < E; ++z)
          for (int y = 0; y < E; ++y)
            for (int x = 0; x < E; ++x, ++v)
              t.data()[static_cast<long>(c) * E * E * E + v] =
                  static_cast<S>(base + az * z + ay * y + ax * x);
      }
      return t;
    };
    RegistrationSample<S> s;
    s.moving = ramp(1, 4, 0.1, 0.9);
    s.fixed = ramp(1, 4, 0.1, 0.9);
    s.moving_onehot = ramp(2, 4, 0.2, 0.8);
    s.fixed_onehot = ramp(2, 4, 0.2, 0.8);
    s.available = {1, 1};
    in.inputs = {random_tensor<S>({3, 4, 4, 4}, rng, -1.2, -0.8),
                 random_tensor<S>({3, 2, 2, 2}, rng, -1.2, -0.8),
                 random_tensor<S>({3, 4, 4, 4}, rng, -1.2, -0.8),
                 random_tensor<S>({3, 2, 2, 2}, rng, -1.2, -0.8)};
    LossWeights<S> w;
    w.gamma = S(0.1);
    w.ds_weights = {S(1), S(0.5)};
    in.forward = [s, w](const std::vector<Tensor<S>>& t) {
      return total_loss<S>(s, {t[0], t[1]}, {t[2], t[3]}, w, Similarity::MSE).total;
    };
    return in;
  }});

  specs.push_back({"random_chain", [](std::mt19937_64& rng) {
    Instance<S> in;
    in.inputs = {random_offzero<S>({2, 2, 2, 2}, rng), random_tensor<S>({2, 2, 2, 2}, rng, 0.2, 1.0)};
    std::vector<int> picks;
    for (int i = 0; i < 5; ++i) picks.push_back(static_cast<int>(rng() % 6));
    auto proj = projector<S>({2, 2, 2, 2}, rng);
    in.forward = [picks, proj](const std::vector<Tensor<S>>& t) {
      Tensor<S> x = t[0];
      for (int op : picks) {
        switch (op) {
          case 0: x = add(x, t[1]); break;
          case 1: x = mul(x, t[1]); break;
          case 2: x = sigmoid(x); break;
          case 3: x = scalar_mul(x, S(0.7)); break;
          case 4: x = sub(x, scalar_mul(t[1], S(0.3))); break;
          default: x = square(x); break;
        }
      }
      return proj(x);
    };
    return in;
  }});

  return specs;
}

// End-to-end: d(total loss)/d(weights) on a toy config, FD over a random
// subset of each parameter tensor. The warp makes the loss only piecewise
// smooth in the weights, so the float run carries an FD-noise floor and the
// double run uses a small step; head biases start away from the identity so
// the field stays off the interpolation lattice.
template <typename S>
CheckSpec<S> network_spec() {
  CheckSpec<S> spec;
  spec.name = "network_e2e";
  spec.seeds = 3;
  spec.rtol = 1e-2;
  if (sizeof(S) == 4) {
    spec.atol = 3e-2;
  } else {
    spec.atol = 1e-5;
    spec.step = S(1e-7);
  }
  spec.make = [](std::mt19937_64& rng) {
    Instance<S> in;
    NetConfig<S> cfg;
    cfg.channels = {4, 8};
    cfg.in_channels = 1;
    cfg.sup_levels = 2;
    Parameters<S> params = RegNet<S>::init_parameters(cfg, rng());
    // smooth blob images keep interpolation slope jumps small
    auto blob = [&rng](int E) {
      std::uniform_real_distribution<double> cdist(E * 0.3, E * 0.7);
      double cz = cdist(rng), cy = cdist(rng), cx = cdist(rng);
      Tensor<S> t(Shape{1, E, E, E});
      long v = 0;
      for (int z = 0; z < E; ++z)
        for (int y = 0; y < E; ++y)
          for (int x = 0; x < E; ++x, ++v) {
            double r2 = ((z - cz) * (z - cz) + (y - cy) * (y - cy) + (x - cx) * (x - cx)) /
                        (0.12 * E * E);
            t.data()[v] = static_cast<S>(std::exp(-r2));
          }
      return t;
    };
    RegistrationSample<S> s;
    s.moving = blob(8);
    s.fixed = blob(8);
    std::vector<uint8_t> labels(512);
    auto threshold_labels = [&](const Tensor<S>& img) {
      for (long v = 0; v < 512; ++v) labels[v] = img.data()[v] > S(0.5) ? 1 : 0;
    };
    threshold_labels(s.moving);
    s.moving_onehot = one_hot<S>(labels, 8, 8, 8, 2);
    threshold_labels(s.fixed);
    s.fixed_onehot = one_hot<S>(labels, 8, 8, 8, 2);
    s.available = {1, 1};
    // start away from the zero-init fixed point so head gradients are live;
    // positive head biases push phi off the identity lattice
    std::vector<std::string> names;
    for (int i = 0; i < params.count(); ++i) {
      bool head_bias = params.name(i).rfind("head", 0) == 0 &&
                       params.name(i).find(".bias") != std::string::npos;
      double lo = head_bias ? 0.25 : -0.05, hi = head_bias ? 0.75 : 0.05;
      params.tensor(i).array() += random_array<S>(params.tensor(i).size(), rng, lo, hi);
      in.inputs.push_back(params.tensor(i));
      names.push_back(params.name(i));
    }
    LossWeights<S> w;
    w.gamma = S(0.1);
    w.ds_weights = {S(1), S(0.5)};
    in.forward = [cfg, names, s, w](const std::vector<Tensor<S>>& t) {
      Parameters<S> p;
      for (size_t i = 0; i < names.size(); ++i) p.add(names[i], t[i]);
      RegNet<S> net(cfg);
      auto [raw_mf, raw_fm] = net.symmetric_forward(p, s.moving, s.fixed);
      return total_loss<S>(s, raw_mf, raw_fm, w, Similarity::MSE).total;
    };
    in.fd_subset = 6;
    return in;
  };
  return spec;
}

template <typename S>
void run_precision(const GradCheckOptions& opts, const Tolerances<S>& tol,
                   std::vector<GradCheckCase>& out, bool include_e2e) {
  for (const CheckSpec<S>& spec : build_specs<S>()) out.push_back(run_case(spec, opts, tol));
  if (include_e2e) out.push_back(run_case(network_spec<S>(), opts, tol));
}

}  // namespace

std::vector<GradCheckCase> run_gradcheck_suite(const GradCheckOptions& opts) {
  std::vector<GradCheckCase> cases;
  GradCheckOptions o = opts;
  if (o.seeds_per_op < 1) o.seeds_per_op = 1;
  Tolerances<double> tol_d{1e-5, 1e-6, 1e-9};
  Tolerances<float> tol_f{1e-3f, 1e-3, 2e-3};
  run_precision<double>(o, tol_d, cases, /*include_e2e=*/true);
  run_precision<float>(o, tol_f, cases, /*include_e2e=*/true);
  return cases;
}

bool all_passed(const std::vector<GradCheckCase>& cases) {
  for (const GradCheckCase& c : cases)
    if (!c.pass) return false;
  return true;
}

std::string gradcheck_report(const std::vector<GradCheckCase>& cases) {
  std::ostringstream os;
  for (const GradCheckCase& c : cases) {
    os << "gradcheck op=" << c.op << " precision=" << c.precision
       << " status=" << (c.pass ? "pass" : "FAIL") << " seeds=" << c.seeds
       << " max_abs_err=" << c.max_abs_err << " max_rel_err=" << c.max_rel_err;
    if (!c.detail.empty()) os << " detail=\"" << c.detail << '"';
    os << '\n';
  }
  return os.str();
}

}  // namespace gradreg
