#include "gradreg/synth.hpp"

#include <cmath>
#include <filesystem>
#include <fstream>
#include <random>
#include <sstream>

namespace fs = std::filesystem;

namespace gradreg {

uint64_t splitmix64(uint64_t& state) {
  uint64_t z = (state += 0x9e3779b97f4a7c15ULL);
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

namespace {

// Separable box filter with replicated borders, repeated 3x (~Gaussian).
void box_smooth(std::vector<float>& v, int D, int H, int W, int radius, int passes = 3) {
  std::vector<float> tmp(v.size());
  auto pass_axis = [&](int axis) {
    int ext[3] = {D, H, W};
    long stride[3] = {static_cast<long>(H) * W, W, 1};
    int n = ext[axis];
    long s = stride[axis];
    float inv = 1.f / static_cast<float>(2 * radius + 1);
    long outer_a = axis == 0 ? 1 : 0, outer_b = axis == 2 ? 1 : 2;
    for (int i = 0; i < ext[outer_a]; ++i)
      for (int j = 0; j < ext[outer_b]; ++j) {
        long base = i * stride[outer_a] + j * stride[outer_b];
        for (int p = 0; p < n; ++p) {
          float acc = 0.f;
          for (int q = -radius; q <= radius; ++q) {
            int pq = std::clamp(p + q, 0, n - 1);
            acc += v[base + pq * s];
          }
          tmp[base + p * s] = acc * inv;
        }
      }
    std::swap(v, tmp);
  };
  for (int p = 0; p < passes; ++p) {
    pass_axis(0);
    pass_axis(1);
    pass_axis(2);
  }
}

}  // namespace

std::pair<GradientField<float>, DeformationField<float>> gen_field(const SynthSpec& spec,
                                                                   uint64_t seed) {
  spec.validate();
  int D = spec.shape[0], H = spec.shape[1], W = spec.shape[2];
  long n = static_cast<long>(D) * H * W;
  Tensor<float> g(Shape{3, D, H, W});
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<float> uni(-1.f, 1.f);
  float amp = static_cast<float>(spec.amplitude);
  for (int a = 0; a < 3; ++a) {
    std::vector<float> noise(n);
    for (float& x : noise) x = uni(rng);
    box_smooth(noise, D, H, W, spec.smooth_width);
    float peak = 1e-12f;
    for (float x : noise) peak = std::max(peak, std::abs(x));
    float bias = uni(rng);  // per-axis global stretch/compression
    for (long v = 0; v < n; ++v) {
      float mix = 0.5f * bias + 0.5f * (noise[v] / peak);
      g.data()[a * n + v] = std::clamp(1.f + amp * mix, 1.f - amp, 1.f + amp);
    }
  }
  GradientField<float> gf{std::move(g)};
  DeformationField<float> phi = integrate(gf);
  return {std::move(gf), std::move(phi)};
}

namespace {

struct Blob {
  float cz, cy, cx;
  float rz, ry, rx;
  float intensity;
  uint8_t label;
};

// Crisp blob volume: smooth compact bumps (1 - rho^2)^2 with half-max
// thresholded segmentations, placed with margins so structures survive
// warping and stay clear of the borders.
void make_blobs(const SynthSpec& spec, std::mt19937_64& rng, Tensor<float>& img,
                std::vector<uint8_t>& seg) {
  int D = spec.shape[0], H = spec.shape[1], W = spec.shape[2];
  long n = static_cast<long>(D) * H * W;
  img = Tensor<float>(Shape{1, D, H, W});
  seg.assign(n, 0);
  std::uniform_real_distribution<float> udist(0.f, 1.f);
  float min_ext = static_cast<float>(std::min({D, H, W}));

  std::vector<Blob> blobs;
  for (int i = 0; i < spec.num_blobs; ++i) {
    Blob b;
    b.label = static_cast<uint8_t>(1 + i % spec.num_labels);
    b.intensity = 0.75f + 0.25f * udist(rng);
    float r_base = (0.12f + 0.08f * udist(rng)) * min_ext;
    bool placed = false;
    for (int attempt = 0; attempt < 60 && !placed; ++attempt) {
      b.rz = r_base * (0.8f + 0.4f * udist(rng));
      b.ry = r_base * (0.8f + 0.4f * udist(rng));
      b.rx = r_base * (0.8f + 0.4f * udist(rng));
      float margin = std::max({b.rz, b.ry, b.rx}) + 3.f;
      auto draw_c = [&](int e) {
        float lo = margin, hi = static_cast<float>(e - 1) - margin;
        if (hi <= lo) return 0.5f * static_cast<float>(e - 1);
        return lo + (hi - lo) * udist(rng);
      };
      b.cz = draw_c(D);
      b.cy = draw_c(H);
      b.cx = draw_c(W);
      placed = true;
      for (const Blob& o : blobs) {
        float dz = (b.cz - o.cz), dy = (b.cy - o.cy), dx = (b.cx - o.cx);
        float dist = std::sqrt(dz * dz + dy * dy + dx * dx);
        float need = 0.85f * (std::max({b.rz, b.ry, b.rx}) + std::max({o.rz, o.ry, o.rx}));
        if (dist < need) {
          placed = false;
          break;
        }
      }
      if (!placed && attempt >= 40) r_base *= 0.9f;  // shrink when space is tight
    }
    blobs.push_back(b);
  }

  float* ip = img.data();
  long v = 0;
  for (int z = 0; z < D; ++z)
    for (int y = 0; y < H; ++y)
      for (int x = 0; x < W; ++x, ++v) {
        float best = 0.f;
        uint8_t best_label = 0;
        for (const Blob& b : blobs) {
          float pz = (z - b.cz) / b.rz, py = (y - b.cy) / b.ry, px = (x - b.cx) / b.rx;
          float rho2 = pz * pz + py * py + px * px;
          if (rho2 >= 1.f) continue;
          float prof = (1.f - rho2) * (1.f - rho2);
          float val = b.intensity * prof;
          if (val > best) {
            best = val;
            // half-max of the profile
            best_label = prof >= 0.5f ? b.label : uint8_t(0);
          }
        }
        ip[v] = best;
        seg[v] = best_label;
      }
}

}  // namespace

SynthCase gen_pair(const SynthSpec& spec, uint64_t seed) {
  spec.validate();
  int D = spec.shape[0], H = spec.shape[1], W = spec.shape[2];
  long n = static_cast<long>(D) * H * W;
  uint64_t stream = seed;
  uint64_t blob_seed = splitmix64(stream);
  uint64_t field_seed = splitmix64(stream);
  uint64_t noise_seed = splitmix64(stream);

  SynthCase c;
  std::mt19937_64 blob_rng(blob_seed);
  Tensor<float> base;
  std::vector<uint8_t> base_seg;
  make_blobs(spec, blob_rng, base, base_seg);

  auto [g_gt, phi_gt] = gen_field(spec, field_seed);

  c.moving.data = base;
  c.moving.modality = Modality::SYNTH;
  c.fixed.data = trilinear_sample(base, phi_gt.phi);
  c.fixed.modality = Modality::SYNTH;

  c.moving_seg.dims = {D, H, W};
  c.moving_seg.num_classes = spec.num_labels + 1;
  c.moving_seg.available.assign(spec.num_labels + 1, 1);
  c.moving_seg.labels = base_seg;
  c.fixed_seg = c.moving_seg;
  c.fixed_seg.labels = warp_nearest(base_seg, D, H, W, phi_gt);

  if (spec.noise > 0.0) {
    std::mt19937_64 noise_rng(noise_seed);
    std::normal_distribution<float> gauss(0.f, static_cast<float>(spec.noise));
    for (long v = 0; v < n; ++v) c.moving.data.data()[v] += gauss(noise_rng);
  }
  c.phi_gt = std::move(phi_gt);
  return c;
}

std::vector<ManifestEntry> gen_dataset(const SynthSpec& spec, int n, const std::string& out_dir) {
  spec.validate();
  if (n < 0) throw std::invalid_argument("gen_dataset: n must be >= 0");
  fs::create_directories(out_dir);
  std::vector<ManifestEntry> entries;
  uint64_t stream = spec.seed;
  for (int i = 0; i < n; ++i) {
    uint64_t case_seed = splitmix64(stream);
    SynthCase c = gen_pair(spec, case_seed);
    char idbuf[16];
    std::snprintf(idbuf, sizeof(idbuf), "case%03d", i);
    ManifestEntry e;
    e.id = idbuf;
    e.moving = e.id + "_moving.gvol";
    e.fixed = e.id + "_fixed.gvol";
    e.moving_seg = e.id + "_moving_seg.gvol";
    e.fixed_seg = e.id + "_fixed_seg.gvol";
    e.field = e.id + "_field.gvol";
    save_volume(c.moving, (fs::path(out_dir) / e.moving).string());
    save_volume(c.fixed, (fs::path(out_dir) / e.fixed).string());
    save_labels(c.moving_seg, (fs::path(out_dir) / e.moving_seg).string());
    save_labels(c.fixed_seg, (fs::path(out_dir) / e.fixed_seg).string());
    save_field(c.phi_gt, c.moving.spacing, (fs::path(out_dir) / e.field).string());
    entries.push_back(std::move(e));
  }
  save_manifest(entries, (fs::path(out_dir) / "manifest.txt").string());
  return entries;
}

void save_manifest(const std::vector<ManifestEntry>& entries, const std::string& path) {
  std::ofstream os(path);
  if (!os) throw std::runtime_error("manifest: cannot write " + path);
  os << "gvol-manifest 1\n";
  for (const ManifestEntry& e : entries)
    os << "case " << e.id << ' ' << e.moving << ' ' << e.fixed << ' ' << e.moving_seg << ' '
       << e.fixed_seg << ' ' << e.field << '\n';
}

std::vector<ManifestEntry> load_manifest(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw std::runtime_error("manifest: cannot read " + path);
  std::string line;
  if (!std::getline(is, line) || line != "gvol-manifest 1")
    throw std::runtime_error("manifest: missing 'gvol-manifest 1' magic in " + path);
  fs::path dir = fs::path(path).parent_path();
  std::vector<ManifestEntry> entries;
  while (std::getline(is, line)) {
    if (line.empty()) continue;
    std::istringstream ls(line);
    std::string key;
    ls >> key;
    if (key != "case")
      throw std::runtime_error("manifest: unknown record '" + key + "' in " + path);
    ManifestEntry e;
    if (!(ls >> e.id >> e.moving >> e.fixed >> e.moving_seg >> e.fixed_seg >> e.field))
      throw std::runtime_error("manifest: malformed case record in " + path);
    auto resolve = [&](std::string& p) { p = (dir / p).string(); };
    resolve(e.moving);
    resolve(e.fixed);
    resolve(e.moving_seg);
    resolve(e.fixed_seg);
    resolve(e.field);
    entries.push_back(std::move(e));
  }
  return entries;
}

PairSample load_pair(const ManifestEntry& e) {
  PairSample p;
  p.moving = load_volume(e.moving);
  p.fixed = load_volume(e.fixed);
  p.moving_seg = load_labels(e.moving_seg);
  p.fixed_seg = load_labels(e.fixed_seg);
  return p;
}

}  // namespace gradreg
