// gradreg: synthetic data generation, training, registration, evaluation and
// gradient verification behind one binary. Machine-readable records go to
// stdout, human summaries to stderr. Exit codes: 0 success, 1 verification
// failure, 2 usage/input error.

#include "gradreg/gradcheck.hpp"
#include "gradreg/trainer.hpp"

#include <CLI11.hpp>

#include <filesystem>
#include <fstream>
#include <iostream>

#ifdef _OPENMP
#include <omp.h>
#endif

namespace fs = std::filesystem;
using namespace gradreg;

namespace {

// duplicates training records to stdout and the log file
class TeeStream : public std::ostream {
  class Buf : public std::streambuf {
   public:
    Buf(std::streambuf* a, std::streambuf* b) : a_(a), b_(b) {}

   protected:
    int overflow(int c) override {
      if (c == EOF) return !EOF;
      int ra = a_->sputc(static_cast<char>(c));
      int rb = b_->sputc(static_cast<char>(c));
      return ra == EOF || rb == EOF ? EOF : c;
    }
    int sync() override { return a_->pubsync() == 0 && b_->pubsync() == 0 ? 0 : -1; }

   private:
    std::streambuf *a_, *b_;
  };

 public:
  TeeStream(std::ostream& a, std::ostream& b) : std::ostream(&buf_), buf_(a.rdbuf(), b.rdbuf()) {}

 private:
  Buf buf_;
};

void write_pgm(const std::string& path, const std::vector<float>& img, int H, int W) {
  float lo = img[0], hi = img[0];
  for (float v : img) {
    lo = std::min(lo, v);
    hi = std::max(hi, v);
  }
  float scale = hi > lo ? 255.f / (hi - lo) : 0.f;
  std::ofstream os(path, std::ios::binary);
  if (!os) throw std::runtime_error("slices: cannot write " + path);
  os << "P5\n" << W << ' ' << H << "\n255\n";
  for (float v : img) os.put(static_cast<char>(std::lround((v - lo) * scale)));
}

std::vector<float> mid_axial_slice(const Tensor<float>& vol) {
  int H = vol.dim(2), W = vol.dim(3);
  int z = vol.dim(1) / 2;
  std::vector<float> img(static_cast<size_t>(H) * W);
  for (int y = 0; y < H; ++y)
    for (int x = 0; x < W; ++x)
      img[static_cast<size_t>(y) * W + x] =
          vol.data()[(static_cast<long>(0) * vol.dim(1) + z) * H * W + static_cast<long>(y) * W + x];
  return img;
}

// moving, fixed, deformed and the warped line pattern, mid axial slice
void write_slice_panels(const std::string& dir, const std::string& prefix, const Volume& moving,
                        const Volume& fixed, const Volume& warped,
                        const DeformationField<float>& phi) {
  write_pgm((fs::path(dir) / (prefix + "moving.pgm")).string(), mid_axial_slice(moving.data),
            moving.height(), moving.width());
  write_pgm((fs::path(dir) / (prefix + "fixed.pgm")).string(), mid_axial_slice(fixed.data),
            fixed.height(), fixed.width());
  write_pgm((fs::path(dir) / (prefix + "deformed.pgm")).string(), mid_axial_slice(warped.data),
            warped.height(), warped.width());
  int D = moving.depth(), H = moving.height(), W = moving.width();
  Tensor<float> pattern(Shape{1, D, H, W});
  const int step = std::max(2, W / 8);
  long v = 0;
  for (int z = 0; z < D; ++z)
    for (int y = 0; y < H; ++y)
      for (int x = 0; x < W; ++x, ++v)
        pattern.data()[v] = (y % step == 0 || x % step == 0) ? 1.f : 0.f;
  Tensor<float> grid = trilinear_sample(pattern, phi.phi);
  write_pgm((fs::path(dir) / (prefix + "grid.pgm")).string(), mid_axial_slice(grid), H, W);
}

struct GenArgs {
  std::string out;
  int n = 8;
  int size = 32;
  SynthSpec spec;
};

int run_gen(const GenArgs& a) {
  SynthSpec spec = a.spec;
  spec.shape = {a.size, a.size, a.size};
  spec.validate();
  std::cout << "config gen out=" << a.out << " n=" << a.n << " size=" << a.size
            << " blobs=" << spec.num_blobs << " labels=" << spec.num_labels
            << " amplitude=" << spec.amplitude << " smooth=" << spec.smooth_width
            << " noise=" << spec.noise << " seed=" << spec.seed << '\n';
  std::vector<ManifestEntry> entries = gen_dataset(spec, a.n, a.out);
  std::cout << "gen cases=" << entries.size() << " manifest="
            << (fs::path(a.out) / "manifest.txt").string() << '\n';
  std::cerr << "wrote " << entries.size() << " case(s) under " << a.out << '\n';
  return 0;
}

struct TrainArgs {
  std::string manifest, out;
  TrainConfig cfg;
  std::vector<float> ds_weights;  // empty = derived from sup_levels
};

int run_train(TrainArgs& a) {
  if (a.ds_weights.empty()) {
    a.cfg.weights.ds_weights.clear();
    float w = 1.f;
    for (int l = 0; l < a.cfg.net.sup_levels; ++l, w *= 0.5f)
      a.cfg.weights.ds_weights.push_back(w);
  } else {
    a.cfg.weights.ds_weights = a.ds_weights;
  }
  fs::create_directories(a.out);
  std::ofstream file_log((fs::path(a.out) / "train_log.txt").string());
  TeeStream log(std::cout, file_log);
  TrainResult r = train(a.cfg, a.manifest, a.out, log);
  std::cerr << "trained " << r.steps << " step(s), final loss " << r.final_loss << ", checkpoint "
            << r.checkpoint_path << '\n';
  return 0;
}

struct RegisterArgs {
  std::string ckpt, moving, fixed, moving_seg, fixed_seg, manifest, out;
  int patch = 0;
  bool slices = false;
};

void register_one(const RegNet<float>& net, const Parameters<float>& params,
                  const std::string& prefix, const Volume& moving, const Volume& fixed,
                  const LabelMap* mseg, const LabelMap* fseg, const RegisterArgs& a) {
  RegistrationResult r = register_pair(net, params, moving, fixed, a.patch);
  fs::path out(a.out);
  save_field(r.phi_mf, moving.spacing, (out / (prefix + "phi_mf.gvol")).string());
  save_field(r.phi_fm, fixed.spacing, (out / (prefix + "phi_fm.gvol")).string());
  save_volume(r.moving_warped, (out / (prefix + "moving_warped.gvol")).string());
  save_volume(r.fixed_warped, (out / (prefix + "fixed_warped.gvol")).string());
  if (mseg) {
    LabelMap warped = *mseg;
    warped.labels = warp_nearest(mseg->labels, mseg->dims[0], mseg->dims[1], mseg->dims[2],
                                 r.phi_mf);
    save_labels(warped, (out / (prefix + "moving_seg_warped.gvol")).string());
  }
  if (fseg) {
    LabelMap warped = *fseg;
    warped.labels = warp_nearest(fseg->labels, fseg->dims[0], fseg->dims[1], fseg->dims[2],
                                 r.phi_fm);
    save_labels(warped, (out / (prefix + "fixed_seg_warped.gvol")).string());
  }
  if (a.slices) write_slice_panels(a.out, prefix, moving, fixed, r.moving_warped, r.phi_mf);
  std::cout << "registered prefix=" << (prefix.empty() ? "-" : prefix) << " out=" << a.out << '\n';
}

int run_register(const RegisterArgs& a) {
  if (a.manifest.empty() && (a.moving.empty() || a.fixed.empty()))
    throw CLI::ValidationError("register", "need --manifest or both --moving and --fixed");
  Checkpoint ck = load_checkpoint(a.ckpt);
  RegNet<float> net(ck.config);
  std::cout << "config register ckpt=" << a.ckpt << " " << ck.config.to_string()
            << " step=" << ck.step << " patch=" << a.patch << '\n';
  fs::create_directories(a.out);
  if (!a.manifest.empty()) {
    std::vector<ManifestEntry> entries = load_manifest(a.manifest);
    for (const ManifestEntry& e : entries) {
      PairSample pair = load_pair(e);
      register_one(net, ck.params, e.id + "_", pair.moving, pair.fixed, &pair.moving_seg,
                   &pair.fixed_seg, a);
    }
  } else {
    Volume moving = load_volume(a.moving);
    Volume fixed = load_volume(a.fixed);
    std::optional<LabelMap> mseg, fseg;
    if (!a.moving_seg.empty()) mseg = load_labels(a.moving_seg);
    if (!a.fixed_seg.empty()) fseg = load_labels(a.fixed_seg);
    register_one(net, ck.params, "", moving, fixed, mseg ? &*mseg : nullptr,
                 fseg ? &*fseg : nullptr, a);
  }
  return 0;
}

struct EvaluateArgs {
  std::string manifest, pred_dir, ckpt;
  int patch = 0;
};

int run_evaluate(const EvaluateArgs& a) {
  if (a.pred_dir.empty() && a.ckpt.empty())
    throw CLI::ValidationError("evaluate", "need --pred-dir or --ckpt");
  std::vector<ManifestEntry> entries = load_manifest(a.manifest);
  if (entries.empty()) throw std::invalid_argument("evaluate: manifest is empty");
  std::cout << "config evaluate manifest=" << a.manifest << " pred_dir=" << a.pred_dir
            << " ckpt=" << a.ckpt << '\n';

  std::optional<Checkpoint> ck;
  std::optional<RegNet<float>> net;
  if (!a.ckpt.empty()) {
    ck = load_checkpoint(a.ckpt);
    net.emplace(ck->config);
  }

  std::vector<std::string> missing;
  std::vector<CaseReport> rows;
  for (const ManifestEntry& e : entries) {
    LabelMap mseg = load_labels(e.moving_seg);
    LabelMap fseg = load_labels(e.fixed_seg);
    DeformationField<float> phi{Tensor<float>()};
    if (!a.pred_dir.empty()) {
      fs::path p = fs::path(a.pred_dir) / (e.id + "_phi_mf.gvol");
      if (!fs::exists(p)) {
        missing.push_back(p.string());
        continue;
      }
      phi = load_field(p.string());
    } else {
      Volume moving = load_volume(e.moving);
      Volume fixed = load_volume(e.fixed);
      auto [raw_mf, raw_fm] = predict_raw(*net, ck->params, moving, fixed, a.patch);
      phi = integrate(activate_increments(raw_mf));
    }
    rows.push_back(evaluate_case(e.id, mseg, fseg, phi));
  }
  if (!missing.empty()) {
    std::ostringstream os;
    os << "evaluate: missing predicted fields:";
    for (const std::string& m : missing) os << ' ' << m;
    throw std::invalid_argument(os.str());
  }

  EvalSummary s = summarize(rows);
  std::cout << report_table(rows);
  std::cout << summary_lines(s);
  std::cerr << "cases " << s.cases << ", labels " << s.scored_labels << '\n'
            << "            Dice   Dice30  Hd95    StdJ\n";
  char buf[128];
  std::snprintf(buf, sizeof(buf), "registered  %-6.3f %-6.3f %-7.3f %-6.4f\n", s.mean_dice,
                s.dice30, s.mean_hd95, s.mean_stdj);
  std::cerr << buf;
  std::snprintf(buf, sizeof(buf), "unregistered %-6.3f %-6.3f\n", s.baseline_mean_dice,
                s.baseline_dice30);
  std::cerr << buf;
  return 0;
}

struct GradcheckArgs {
  GradCheckOptions opts;
};

int run_gradcheck(const GradcheckArgs& a) {
  std::cout << "config gradcheck seed=" << a.opts.seed << " seeds_per_op=" << a.opts.seeds_per_op
            << '\n';
  std::vector<GradCheckCase> cases = run_gradcheck_suite(a.opts);
  std::cout << gradcheck_report(cases);
  if (!all_passed(cases)) {
    std::cerr << "gradient check FAILED:";
    for (const GradCheckCase& c : cases)
      if (!c.pass) std::cerr << ' ' << c.op << '(' << c.precision << ')';
    std::cerr << '\n';
    return 1;
  }
  std::cerr << "all gradient checks passed (" << cases.size() << " op/precision cases)\n";
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"symmetric deformable 3D registration via spatial gradient fields"};
  app.require_subcommand(1);
  std::string workdir;
  app.add_option("--workdir", workdir, "directory all relative paths resolve against");
  int threads = 0;
  app.add_option("--threads", threads, "worker threads (0 = hardware default)");

  GenArgs gen_args;
  CLI::App* gen = app.add_subcommand("gen", "generate a synthetic dataset");
  gen->set_config("--config");
  gen->allow_config_extras(CLI::config_extras_mode::error);
  gen->add_option("--out", gen_args.out, "output directory")->required();
  gen->add_option("--n", gen_args.n, "number of pairs");
  gen->add_option("--size", gen_args.size, "cubic extent");
  gen->add_option("--blobs", gen_args.spec.num_blobs, "blob structures per volume");
  gen->add_option("--labels", gen_args.spec.num_labels, "foreground label count");
  gen->add_option("--amplitude", gen_args.spec.amplitude, "deformation amplitude in [0,1)");
  gen->add_option("--smooth", gen_args.spec.smooth_width, "increment smoothing radius");
  gen->add_option("--noise", gen_args.spec.noise, "intensity noise on the moving image");
  gen->add_option("--seed", gen_args.spec.seed, "master seed");

  TrainArgs train_args;
  CLI::App* tr = app.add_subcommand("train", "train a registration model");
  tr->set_config("--config");
  tr->allow_config_extras(CLI::config_extras_mode::error);
  tr->add_option("--manifest", train_args.manifest, "dataset manifest")->required();
  tr->add_option("--out", train_args.out, "output directory")->required();
  tr->add_option("--channels", train_args.cfg.net.channels, "encoder channels per block");
  tr->add_option("--sup-levels", train_args.cfg.net.sup_levels, "deep supervision heads");
  tr->add_option("--leaky", train_args.cfg.net.leaky_slope, "LeakyReLU slope");
  tr->add_option("--lr", train_args.cfg.lr, "Adam learning rate");
  tr->add_option("--batch", train_args.cfg.batch, "pairs per step");
  tr->add_option("--epochs", train_args.cfg.epochs, "passes over the manifest");
  tr->add_option("--steps", train_args.cfg.steps, "total steps (overrides --epochs)");
  tr->add_option("--patch", train_args.cfg.patch, "training patch size (0 = whole volume)");
  std::string sim = "mse";
  tr->add_option("--sim", sim, "similarity: mse|ncc");
  tr->add_option("--alpha", train_args.cfg.weights.alpha, "similarity weight");
  tr->add_option("--beta", train_args.cfg.weights.beta, "dice weight");
  tr->add_option("--gamma", train_args.cfg.weights.gamma, "smoothness weight");
  tr->add_option("--ds-weights", train_args.ds_weights, "per-level supervision weights");
  tr->add_flag("--augment", train_args.cfg.augment, "random flip/rotation/translation");
  tr->add_option("--seed", train_args.cfg.seed, "training seed");
  tr->add_option("--ckpt-every", train_args.cfg.checkpoint_every, "checkpoint every K epochs");
  tr->add_option("--eval-every", train_args.cfg.eval_every, "evaluate every K steps");
  tr->add_option("--holdout", train_args.cfg.holdout, "held-out case fraction");
  tr->add_flag("--train-on-all", train_args.cfg.train_on_all,
               "train on training and held-out cases");
  tr->add_option("--pretrain", train_args.cfg.pretrain_path, "checkpoint to fine-tune from");

  RegisterArgs reg_args;
  CLI::App* reg = app.add_subcommand("register", "register volume pairs");
  reg->set_config("--config");
  reg->allow_config_extras(CLI::config_extras_mode::error);
  reg->add_option("--ckpt", reg_args.ckpt, "model checkpoint")->required();
  reg->add_option("--moving", reg_args.moving, "moving volume");
  reg->add_option("--fixed", reg_args.fixed, "fixed volume");
  reg->add_option("--moving-seg", reg_args.moving_seg, "moving labels (warped as well)");
  reg->add_option("--fixed-seg", reg_args.fixed_seg, "fixed labels (warped as well)");
  reg->add_option("--manifest", reg_args.manifest, "register every manifest case");
  reg->add_option("--out", reg_args.out, "output directory")->required();
  reg->add_option("--patch", reg_args.patch, "sliding window size (0 = whole volume)");
  reg->add_flag("--slices", reg_args.slices, "write mid-slice PGM panels");

  EvaluateArgs eval_args;
  CLI::App* ev = app.add_subcommand("evaluate", "score predicted registrations");
  ev->set_config("--config");
  ev->allow_config_extras(CLI::config_extras_mode::error);
  ev->add_option("--manifest", eval_args.manifest, "dataset manifest")->required();
  ev->add_option("--pred-dir", eval_args.pred_dir, "directory with <id>_phi_mf.gvol fields");
  ev->add_option("--ckpt", eval_args.ckpt, "run inference with this checkpoint instead");
  ev->add_option("--patch", eval_args.patch, "sliding window size for --ckpt inference");

  GradcheckArgs gc_args;
  CLI::App* gc = app.add_subcommand("gradcheck", "finite-difference gradient verification");
  gc->add_option("--seed", gc_args.opts.seed, "base seed");
  gc->add_option("--seeds-per-op", gc_args.opts.seeds_per_op, "random draws per op");
  gc->add_option("--corrupt-op", gc_args.opts.corrupt_op, "perturb this op's gradients")
      ->group("");  // test hook, hidden from help

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    int code = app.exit(e);
    return code == 0 ? 0 : 2;
  }

  try {
#ifdef _OPENMP
    if (threads > 0) omp_set_num_threads(threads);
#endif
    if (!workdir.empty()) fs::current_path(workdir);
    if (gen->parsed()) return run_gen(gen_args);
    if (tr->parsed()) {
      train_args.cfg.similarity = similarity_from(sim);
      return run_train(train_args);
    }
    if (reg->parsed()) return run_register(reg_args);
    if (ev->parsed()) return run_evaluate(eval_args);
    if (gc->parsed()) return run_gradcheck(gc_args);
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 2;
  }
  return 2;
}
