#include "gradreg/trainer.hpp"

#include <chrono>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <ostream>
#include <sstream>

namespace fs = std::filesystem;

namespace gradreg {

void TrainConfig::validate() const {
  net.validate();
  weights.validate();
  if (!(lr > 0.f)) throw std::invalid_argument("train: learning rate must be positive");
  if (batch < 1) throw std::invalid_argument("train: batch must be >= 1");
  if (epochs < 1 && steps < 1) throw std::invalid_argument("train: epochs or steps required");
  if (patch < 0) throw std::invalid_argument("train: patch must be >= 0");
  if (patch > 0 && patch % net.divisor() != 0)
    throw std::invalid_argument("train: patch " + std::to_string(patch) +
                                " not divisible by " + std::to_string(net.divisor()));
  if (holdout < 0.f || holdout >= 1.f)
    throw std::invalid_argument("train: holdout fraction must be in [0,1)");
  if (static_cast<int>(weights.ds_weights.size()) != net.sup_levels)
    throw std::invalid_argument("train: " + std::to_string(weights.ds_weights.size()) +
                                " supervision weights for " + std::to_string(net.sup_levels) +
                                " heads");
}

std::string TrainConfig::to_string() const {
  std::ostringstream os;
  os << net.to_string() << " lr=" << lr << " batch=" << batch << " epochs=" << epochs
     << " steps=" << steps << " patch=" << patch << " sim=" << similarity_name(similarity)
     << " alpha=" << weights.alpha << " beta=" << weights.beta << " gamma=" << weights.gamma
     << " ds_weights=";
  for (size_t i = 0; i < weights.ds_weights.size(); ++i)
    os << (i ? "," : "") << weights.ds_weights[i];
  os << " augment=" << (augment ? 1 : 0) << " seed=" << seed << " holdout=" << holdout
     << " train_on_all=" << (train_on_all ? 1 : 0);
  if (!pretrain_path.empty()) os << " pretrain=" << pretrain_path;
  return os.str();
}

RegistrationSample<float> make_sample(const PairSample& pair) {
  if (pair.moving.data.shape() != pair.fixed.data.shape())
    throw std::invalid_argument("sample: moving/fixed shape mismatch");
  if (pair.moving_seg.num_classes != pair.fixed_seg.num_classes)
    throw std::invalid_argument("sample: label class count mismatch");
  int D = pair.moving.depth(), H = pair.moving.height(), W = pair.moving.width();
  int K = pair.moving_seg.num_classes;
  RegistrationSample<float> s;
  s.moving = pair.moving.data.detached();
  s.fixed = pair.fixed.data.detached();
  s.moving_onehot = one_hot<float>(pair.moving_seg.labels, D, H, W, K);
  s.fixed_onehot = one_hot<float>(pair.fixed_seg.labels, D, H, W, K);
  s.available.resize(K);
  for (int k = 0; k < K; ++k)
    s.available[k] = pair.moving_seg.available[k] && pair.fixed_seg.available[k];
  return s;
}

namespace {

bool divisible(const Volume& v, int div) {
  return v.depth() % div == 0 && v.height() % div == 0 && v.width() % div == 0;
}

// Window origins covering [0, extent) with the given stride; the last window
// is clamped so coverage is complete.
std::vector<int> window_origins(int extent, int patch, int stride) {
  std::vector<int> o;
  if (patch >= extent) {
    o.push_back(0);
    return o;
  }
  for (int p = 0;; p += stride) {
    if (p + patch >= extent) {
      o.push_back(extent - patch);
      break;
    }
    o.push_back(p);
  }
  return o;
}

}  // namespace

std::pair<Tensor<float>, Tensor<float>> predict_raw(const RegNet<float>& net,
                                                    const Parameters<float>& params,
                                                    const Volume& moving, const Volume& fixed,
                                                    int patch) {
  if (moving.data.shape() != fixed.data.shape())
    throw std::invalid_argument("register: shape mismatch " + shape_str(moving.data.shape()) +
                                " vs " + shape_str(fixed.data.shape()));
  int div = net.config().divisor();
  int D = moving.depth(), H = moving.height(), W = moving.width();

  if (patch == 0 || (patch >= std::max({D, H, W}) && divisible(moving, div))) {
    if (!divisible(moving, div))
      throw std::invalid_argument("register: extents not divisible by " + std::to_string(div) +
                                  "; use sliding-window inference (patch > 0)");
    auto [raw_mf, raw_fm] = net.symmetric_forward(params, moving.data.detached(),
                                                  fixed.data.detached());
    return {raw_mf[0], raw_fm[0]};
  }

  if (patch % div != 0)
    throw std::invalid_argument("register: patch not divisible by " + std::to_string(div));
  if (patch > D || patch > H || patch > W)
    throw std::invalid_argument("register: patch larger than volume");

  int stride = std::max(patch / 2, 1);
  std::vector<int> oz = window_origins(D, patch, stride);
  std::vector<int> oy = window_origins(H, patch, stride);
  std::vector<int> ox = window_origins(W, patch, stride);

  long n = static_cast<long>(D) * H * W;
  Tensor<float> acc_mf(Shape{3, D, H, W}), acc_fm(Shape{3, D, H, W});
  Tensor<float> count(Shape{1, D, H, W});

  auto crop = [&](const Tensor<float>& t, int z0, int y0, int x0) {
    Tensor<float> out(Shape{t.dim(0), patch, patch, patch});
    for (int c = 0; c < t.dim(0); ++c)
      for (int z = 0; z < patch; ++z)
        for (int y = 0; y < patch; ++y) {
          const float* src = t.data() +
              ((static_cast<long>(c) * D + z0 + z) * H + y0 + y) * W + x0;
          float* dst = out.data() + ((static_cast<long>(c) * patch + z) * patch + y) * patch;
          std::copy(src, src + patch, dst);
        }
    return out;
  };

  for (int z0 : oz)
    for (int y0 : oy)
      for (int x0 : ox) {
        Tensor<float> mw = crop(moving.data, z0, y0, x0);
        Tensor<float> fw = crop(fixed.data, z0, y0, x0);
        auto [raw_mf, raw_fm] = net.symmetric_forward(params, mw, fw);
        for (int c = 0; c < 3; ++c)
          for (int z = 0; z < patch; ++z)
            for (int y = 0; y < patch; ++y) {
              const float* smf = raw_mf[0].data() +
                  ((static_cast<long>(c) * patch + z) * patch + y) * patch;
              const float* sfm = raw_fm[0].data() +
                  ((static_cast<long>(c) * patch + z) * patch + y) * patch;
              long base = ((static_cast<long>(c) * D + z0 + z) * H + y0 + y) * W + x0;
              for (int x = 0; x < patch; ++x) {
                acc_mf.data()[base + x] += smf[x];
                acc_fm.data()[base + x] += sfm[x];
              }
            }
        for (int z = 0; z < patch; ++z)
          for (int y = 0; y < patch; ++y) {
            long base = ((static_cast<long>(z0 + z)) * H + y0 + y) * W + x0;
            for (int x = 0; x < patch; ++x) count.data()[base + x] += 1.f;
          }
      }

  for (int c = 0; c < 3; ++c)
    for (long v = 0; v < n; ++v) {
      acc_mf.data()[c * n + v] /= count.data()[v];
      acc_fm.data()[c * n + v] /= count.data()[v];
    }
  return {acc_mf, acc_fm};
}

RegistrationResult register_pair(const RegNet<float>& net, const Parameters<float>& params,
                                 const Volume& moving, const Volume& fixed, int patch) {
  auto [raw_mf, raw_fm] = predict_raw(net, params, moving, fixed, patch);
  RegistrationResult r;
  r.phi_mf = integrate(activate_increments(raw_mf));
  r.phi_fm = integrate(activate_increments(raw_fm));
  r.moving_warped.spacing = moving.spacing;
  r.moving_warped.modality = moving.modality;
  r.moving_warped.data = trilinear_sample(moving.data.detached(), r.phi_mf.phi);
  r.fixed_warped.spacing = fixed.spacing;
  r.fixed_warped.modality = fixed.modality;
  r.fixed_warped.data = trilinear_sample(fixed.data.detached(), r.phi_fm.phi);
  return r;
}

double eval_mean_dice(const RegNet<float>& net, const Parameters<float>& params,
                      const std::vector<PairSample>& cases, int patch) {
  std::vector<double> scores;
  for (const PairSample& pair : cases) {
    auto [raw_mf, raw_fm] = predict_raw(net, params, pair.moving, pair.fixed, patch);
    DeformationField<float> phi = integrate(activate_increments(raw_mf));
    const LabelMap& ms = pair.moving_seg;
    LabelMap warped = ms;
    warped.labels = warp_nearest(ms.labels, ms.dims[0], ms.dims[1], ms.dims[2], phi);
    for (int k = 1; k < ms.num_classes; ++k) {
      if (!ms.available[k] || !pair.fixed_seg.available[k]) continue;
      scores.push_back(dice(warped, pair.fixed_seg, k));
    }
  }
  if (scores.empty()) return 0.0;
  double acc = 0.0;
  for (double s : scores) acc += s;
  return acc / static_cast<double>(scores.size());
}

double eval_loss(const RegNet<float>& net, const Parameters<float>& params,
                 const std::vector<PairSample>& cases, const LossWeights<float>& w,
                 Similarity sim) {
  double acc = 0.0;
  for (const PairSample& pair : cases) {
    RegistrationSample<float> s = make_sample(pair);
    auto [raw_mf, raw_fm] = net.symmetric_forward(params, s.moving, s.fixed);
    acc += static_cast<double>(total_loss<float>(s, raw_mf, raw_fm, w, sim).total.value());
  }
  return cases.empty() ? 0.0 : acc / static_cast<double>(cases.size());
}

TrainResult train(const TrainConfig& cfg, const std::string& manifest_path,
                  const std::string& out_dir, std::ostream& log) {
  cfg.validate();
  log << "config " << cfg.to_string() << '\n';

  std::vector<ManifestEntry> manifest = load_manifest(manifest_path);
  if (manifest.empty()) throw std::invalid_argument("train: manifest is empty: " + manifest_path);

  std::vector<PairSample> cases;
  cases.reserve(manifest.size());
  for (const ManifestEntry& e : manifest) cases.push_back(load_pair(e));

  int n_hold = static_cast<int>(std::floor(cfg.holdout * static_cast<double>(cases.size())));
  n_hold = std::min<int>(n_hold, static_cast<int>(cases.size()) - 1);
  std::vector<PairSample> eval_cases(cases.end() - n_hold, cases.end());
  std::vector<PairSample> train_cases;
  if (cfg.train_on_all || n_hold == 0)
    train_cases = cases;
  else
    train_cases.assign(cases.begin(), cases.end() - n_hold);
  const std::vector<PairSample>& eval_split = eval_cases.empty() ? train_cases : eval_cases;

  int div = cfg.net.divisor();
  for (const PairSample& p : train_cases) {
    int m = std::min({p.moving.depth(), p.moving.height(), p.moving.width()});
    if (cfg.patch > m)
      throw std::invalid_argument("train: patch " + std::to_string(cfg.patch) +
                                  " larger than volume extent " + std::to_string(m));
    if (cfg.patch == 0 && !divisible(p.moving, div))
      throw std::invalid_argument("train: extents not divisible by " + std::to_string(div) +
                                  "; set a patch size");
  }

  RegNet<float> net(cfg.net);
  Parameters<float> params = RegNet<float>::init_parameters(cfg.net, cfg.seed);
  if (!cfg.pretrain_path.empty()) {
    Checkpoint ck = load_checkpoint(cfg.pretrain_path);
    RestoreReport rep = restore_into(params, ck.params);
    log << rep.to_string() << '\n';
  }

  Adam<float> opt(AdamConfig<float>{cfg.lr});
  long steps_total = cfg.steps > 0
                         ? cfg.steps
                         : static_cast<long>(cfg.epochs) * static_cast<long>(train_cases.size());
  long steps_per_epoch = static_cast<long>(train_cases.size());

  fs::create_directories(out_dir);
  std::mt19937_64 rng(cfg.seed);
  uint64_t aug_stream = cfg.seed ^ 0x5bf03635ULL;

  auto t0 = std::chrono::steady_clock::now();
  double last_total = 0.0;
  for (long step = 1; step <= steps_total; ++step) {
    Tape<float> tape;
    params.watch_all(tape);
    Tensor<float> batch_loss = Tensor<float>::scalar(0.f);
    double total_v = 0.0, sim_v = 0.0, sup_v = 0.0, smo_v = 0.0;
    for (int b = 0; b < cfg.batch; ++b) {
      const PairSample& chosen = train_cases[rng() % train_cases.size()];
      PairSample pair = chosen;
      if (cfg.augment) pair = augment_pair(pair, splitmix64(aug_stream));
      if (cfg.patch > 0 && (pair.moving.depth() != cfg.patch || pair.moving.height() != cfg.patch ||
                            pair.moving.width() != cfg.patch))
        pair = extract_patch(pair, cfg.patch, std::nullopt, rng);
      RegistrationSample<float> s = make_sample(pair);
      auto [raw_mf, raw_fm] = net.symmetric_forward(params, s.moving, s.fixed);
      LossBreakdown<float> loss = total_loss<float>(s, raw_mf, raw_fm, cfg.weights,
                                                    cfg.similarity);
      batch_loss = add(batch_loss, scalar_mul(loss.total, 1.f / static_cast<float>(cfg.batch)));
      total_v += loss.total.value() / cfg.batch;
      for (const LossTerm& t : loss.terms) {
        sim_v += t.sim / cfg.batch;
        sup_v += t.sup / cfg.batch;
        smo_v += t.smo / cfg.batch;
      }
    }
    if (!std::isfinite(total_v))
      throw std::runtime_error("train: non-finite loss at step " + std::to_string(step));
    tape.backward(batch_loss);
    opt.step(params, tape);
    last_total = total_v;

    auto ms = std::chrono::duration_cast<std::chrono::milliseconds>(
                  std::chrono::steady_clock::now() - t0)
                  .count();
    log << "step=" << step << " total=" << total_v << " sim=" << sim_v << " sup=" << sup_v
        << " smo=" << smo_v << " lr=" << cfg.lr << " ms=" << ms << '\n';

    if (cfg.eval_every > 0 && (step % cfg.eval_every == 0 || step == steps_total)) {
      double md = eval_mean_dice(net, params, eval_split, cfg.patch);
      double vl = eval_loss(net, params, eval_split, cfg.weights, cfg.similarity);
      log << "eval step=" << step << " mean_dice=" << md << " val_loss=" << vl << '\n';
    }
    if (cfg.checkpoint_every > 0 && steps_per_epoch > 0 && step % steps_per_epoch == 0) {
      long epoch = step / steps_per_epoch;
      if (epoch % cfg.checkpoint_every == 0) {
        char buf[48];
        std::snprintf(buf, sizeof(buf), "ckpt_epoch%04ld.grck", epoch);
        save_checkpoint((fs::path(out_dir) / buf).string(), cfg.net, params, step);
      }
    }
  }

  TrainResult result;
  result.steps = steps_total;
  result.final_loss = last_total;
  result.checkpoint_path = (fs::path(out_dir) / "checkpoint.grck").string();
  save_checkpoint(result.checkpoint_path, cfg.net, params, steps_total);
  log << "checkpoint path=" << result.checkpoint_path << " steps=" << steps_total << '\n';
  return result;
}

}  // namespace gradreg
