#include "gradreg/volume.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <sstream>

namespace gradreg {

std::string modality_name(Modality m) {
  switch (m) {
    case Modality::CT: return "CT";
    case Modality::MRI: return "MRI";
    default: return "SYNTH";
  }
}

Modality modality_from(const std::string& name) {
  if (name == "CT") return Modality::CT;
  if (name == "MRI") return Modality::MRI;
  if (name == "SYNTH") return Modality::SYNTH;
  throw std::runtime_error("gvol: malformed header: unknown modality '" + name + "'");
}

void Volume::validate() const {
  if (data.order() != 4) throw std::invalid_argument("volume: data must be [C,D,H,W]");
  if (channels() < 1) throw std::invalid_argument("volume: needs at least one channel");
  for (float s : spacing)
    if (!(s > 0.f)) throw std::invalid_argument("volume: spacing must be positive");
}

void LabelMap::validate() const {
  if (size() != static_cast<long>(labels.size()))
    throw std::invalid_argument("labelmap: grid size mismatch");
  if (num_classes < 1) throw std::invalid_argument("labelmap: num_classes must be >= 1");
  if (static_cast<int>(available.size()) != num_classes)
    throw std::invalid_argument("labelmap: availability mask length mismatch");
  if (!available[0]) throw std::invalid_argument("labelmap: background must be available");
  for (uint8_t l : labels)
    if (l >= num_classes)
      throw std::runtime_error("labelmap: label validation: voxel value " + std::to_string(l) +
                               " >= num_classes " + std::to_string(num_classes));
}

namespace {

constexpr const char* kMagic = "gvol 1";

struct Header {
  Shape shape;
  std::array<float, 3> spacing{1.f, 1.f, 1.f};
  std::string dtype;
  std::optional<Modality> modality;
  std::optional<int> num_classes;
  std::vector<uint8_t> available;
  bool is_field = false;
};

void write_header(std::ostream& os, const Header& h) {
  os << kMagic << '\n';
  os << "shape";
  for (int e : h.shape) os << ' ' << e;
  os << '\n';
  os << "spacing " << h.spacing[0] << ' ' << h.spacing[1] << ' ' << h.spacing[2] << '\n';
  os << "dtype " << h.dtype << '\n';
  if (h.modality) os << "modality " << modality_name(*h.modality) << '\n';
  if (h.num_classes) {
    os << "num_classes " << *h.num_classes << '\n';
    os << "available";
    for (uint8_t a : h.available) os << ' ' << int(a);
    os << '\n';
  }
  if (h.is_field) os << "field phi\n";
  os << '\n';
}

Header read_header(std::istream& is, const std::string& path) {
  auto fail = [&](const std::string& why) -> std::runtime_error {
    return std::runtime_error("gvol: malformed header: " + why + " (" + path + ")");
  };
  std::string line;
  if (!std::getline(is, line) || line != kMagic) throw fail("missing 'gvol 1' magic");
  Header h;
  bool saw_shape = false, saw_dtype = false;
  while (std::getline(is, line)) {
    if (line.empty()) break;
    std::istringstream ls(line);
    std::string key;
    ls >> key;
    if (key == "shape") {
      int e;
      while (ls >> e) h.shape.push_back(e);
      if (h.shape.empty()) throw fail("empty shape");
      saw_shape = true;
    } else if (key == "spacing") {
      if (!(ls >> h.spacing[0] >> h.spacing[1] >> h.spacing[2])) throw fail("bad spacing");
    } else if (key == "dtype") {
      ls >> h.dtype;
      if (h.dtype != "f32" && h.dtype != "u8") throw fail("unknown dtype '" + h.dtype + "'");
      saw_dtype = true;
    } else if (key == "modality") {
      std::string m;
      ls >> m;
      h.modality = modality_from(m);
    } else if (key == "num_classes") {
      int k;
      if (!(ls >> k)) throw fail("bad num_classes");
      h.num_classes = k;
    } else if (key == "available") {
      int a;
      while (ls >> a) h.available.push_back(static_cast<uint8_t>(a != 0));
    } else if (key == "field") {
      std::string f;
      ls >> f;
      if (f != "phi") throw fail("unknown field kind '" + f + "'");
      h.is_field = true;
    } else {
      throw fail("unknown key '" + key + "'");
    }
  }
  if (!saw_shape || !saw_dtype) throw fail("missing shape or dtype");
  return h;
}

template <typename T>
void write_buffer(std::ostream& os, const T* data, long count) {
  os.write(reinterpret_cast<const char*>(data), count * sizeof(T));
}

template <typename T>
void read_buffer(std::istream& is, T* data, long count, const std::string& path) {
  is.read(reinterpret_cast<char*>(data), count * sizeof(T));
  if (is.gcount() != static_cast<std::streamsize>(count * sizeof(T)))
    throw std::runtime_error("gvol: truncated buffer: expected " +
                             std::to_string(count * sizeof(T)) + " bytes, got " +
                             std::to_string(is.gcount()) + " (" + path + ")");
  char extra;
  if (is.read(&extra, 1))
    throw std::runtime_error("gvol: buffer size mismatch: trailing bytes after " +
                             std::to_string(count * sizeof(T)) + " (" + path + ")");
}

std::ofstream open_out(const std::string& path) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw std::runtime_error("gvol: cannot write " + path);
  return os;
}

std::ifstream open_in(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("gvol: cannot read " + path);
  return is;
}

}  // namespace

void save_volume(const Volume& v, const std::string& path) {
  v.validate();
  Header h;
  h.shape = v.data.shape();
  h.spacing = v.spacing;
  h.dtype = "f32";
  h.modality = v.modality;
  std::ofstream os = open_out(path);
  write_header(os, h);
  write_buffer(os, v.data.data(), v.data.size());
}

void save_labels(const LabelMap& m, const std::string& path) {
  m.validate();
  Header h;
  h.shape = {m.dims[0], m.dims[1], m.dims[2]};
  h.spacing = m.spacing;
  h.dtype = "u8";
  h.num_classes = m.num_classes;
  h.available = m.available;
  std::ofstream os = open_out(path);
  write_header(os, h);
  write_buffer(os, m.labels.data(), m.size());
}

void save_field(const DeformationField<float>& phi, const std::array<float, 3>& spacing,
                const std::string& path) {
  Header h;
  h.shape = phi.phi.shape();
  h.spacing = spacing;
  h.dtype = "f32";
  h.is_field = true;
  std::ofstream os = open_out(path);
  write_header(os, h);
  write_buffer(os, phi.phi.data(), phi.phi.size());
}

GvolKind peek_gvol_kind(const std::string& path) {
  std::ifstream is = open_in(path);
  Header h = read_header(is, path);
  if (h.is_field) return GvolKind::Field;
  return h.dtype == "u8" ? GvolKind::Labels : GvolKind::Image;
}

Volume load_volume(const std::string& path) {
  std::ifstream is = open_in(path);
  Header h = read_header(is, path);
  if (h.dtype != "f32")
    throw std::runtime_error("gvol: " + path + " is not an image volume");
  if (h.shape.size() != 4)
    throw std::runtime_error("gvol: malformed header: image shape must be [C,D,H,W] (" + path + ")");
  Volume v;
  v.data = Tensor<float>(h.shape);
  v.spacing = h.spacing;
  v.modality = h.modality.value_or(Modality::SYNTH);
  read_buffer(is, v.data.data(), v.data.size(), path);
  v.validate();
  return v;
}

LabelMap load_labels(const std::string& path) {
  std::ifstream is = open_in(path);
  Header h = read_header(is, path);
  if (h.dtype != "u8") throw std::runtime_error("gvol: " + path + " is not a label map");
  if (h.shape.size() != 3)
    throw std::runtime_error("gvol: malformed header: label shape must be [D,H,W] (" + path + ")");
  LabelMap m;
  m.dims = {h.shape[0], h.shape[1], h.shape[2]};
  m.spacing = h.spacing;
  if (!h.num_classes)
    throw std::runtime_error("gvol: malformed header: labels need num_classes (" + path + ")");
  m.num_classes = *h.num_classes;
  m.available = h.available.empty() ? std::vector<uint8_t>(m.num_classes, 1) : h.available;
  m.labels.resize(m.size());
  read_buffer(is, m.labels.data(), m.size(), path);
  m.validate();
  return m;
}

DeformationField<float> load_field(const std::string& path) {
  std::ifstream is = open_in(path);
  Header h = read_header(is, path);
  if (!h.is_field || h.dtype != "f32")
    throw std::runtime_error("gvol: " + path + " is not a deformation field");
  if (h.shape.size() != 4 || h.shape[0] != 3)
    throw std::runtime_error("gvol: malformed header: field shape must be [3,D,H,W] (" + path + ")");
  Tensor<float> phi(h.shape);
  read_buffer(is, phi.data(), phi.size(), path);
  return DeformationField<float>{std::move(phi)};
}

Volume normalize_ct(const Volume& v, const std::array<CtWindow, 3>& windows) {
  v.validate();
  if (v.channels() != 1) throw std::invalid_argument("normalize_ct: expected single channel");
  for (const CtWindow& w : windows)
    if (!(w.low < w.high)) throw std::invalid_argument("normalize_ct: window low >= high");
  long n = v.data.size();
  Volume out;
  out.spacing = v.spacing;
  out.modality = v.modality;
  out.data = Tensor<float>(Shape{3, v.depth(), v.height(), v.width()});
  for (int c = 0; c < 3; ++c) {
    float lo = windows[c].low, hi = windows[c].high;
    out.data.array().segment(c * n, n) =
        (v.data.array().min(hi).max(lo) - lo) / (hi - lo);
  }
  return out;
}

Volume normalize_mri(const Volume& v) {
  v.validate();
  if (v.channels() != 1) throw std::invalid_argument("normalize_mri: expected single channel");
  Volume out;
  out.spacing = v.spacing;
  out.modality = v.modality;
  float m = v.data.array().mean();
  float sd = std::sqrt((v.data.array() - m).square().mean());
  if (sd == 0.f) {
    out.data = Tensor<float>::full(v.data.shape(), 0.5f);
    return out;
  }
  ArrayX<float> z = ((v.data.array() - m) / sd).min(5.f).max(-5.f);
  float lo = z.minCoeff(), hi = z.maxCoeff();
  if (hi == lo) {
    out.data = Tensor<float>::full(v.data.shape(), 0.5f);
    return out;
  }
  out.data = Tensor<float>(v.data.shape(), (z - lo) / (hi - lo));
  return out;
}

namespace {

// target voxel (d,h,w) <- source voxel map, shared by crop and augment.
template <typename Fn>
Volume remap_volume(const Volume& v, int Do, int Ho, int Wo, Fn&& src_of) {
  Volume out;
  out.spacing = v.spacing;
  out.modality = v.modality;
  int C = v.channels(), D = v.depth(), H = v.height(), W = v.width();
  out.data = Tensor<float>(Shape{C, Do, Ho, Wo});
  const float* sp = v.data.data();
  float* op = out.data.data();
  for (int d = 0; d < Do; ++d)
    for (int h = 0; h < Ho; ++h)
      for (int w = 0; w < Wo; ++w) {
        auto [sd, sh, sw] = src_of(d, h, w);
        sd = std::clamp(sd, 0, D - 1);
        sh = std::clamp(sh, 0, H - 1);
        sw = std::clamp(sw, 0, W - 1);
        for (int c = 0; c < C; ++c)
          op[((static_cast<long>(c) * Do + d) * Ho + h) * Wo + w] =
              sp[((static_cast<long>(c) * D + sd) * H + sh) * W + sw];
      }
  return out;
}

template <typename Fn>
LabelMap remap_labels(const LabelMap& m, int Do, int Ho, int Wo, Fn&& src_of) {
  LabelMap out;
  out.dims = {Do, Ho, Wo};
  out.num_classes = m.num_classes;
  out.available = m.available;
  out.spacing = m.spacing;
  out.labels.resize(out.size());
  int D = m.dims[0], H = m.dims[1], W = m.dims[2];
  for (int d = 0; d < Do; ++d)
    for (int h = 0; h < Ho; ++h)
      for (int w = 0; w < Wo; ++w) {
        auto [sd, sh, sw] = src_of(d, h, w);
        sd = std::clamp(sd, 0, D - 1);
        sh = std::clamp(sh, 0, H - 1);
        sw = std::clamp(sw, 0, W - 1);
        out.labels[(static_cast<long>(d) * Ho + h) * Wo + w] =
            m.labels[(static_cast<long>(sd) * H + sh) * W + sw];
      }
  return out;
}

}  // namespace

PairSample extract_patch(const PairSample& pair, int patch,
                         std::optional<std::array<int, 3>> origin, std::mt19937_64& rng) {
  if (patch < 1) throw std::invalid_argument("extract_patch: patch must be positive");
  int D = pair.moving.depth(), H = pair.moving.height(), W = pair.moving.width();
  std::array<int, 3> o;
  if (origin) {
    o = *origin;
  } else {
    auto draw = [&](int extent) {
      int span = extent - patch;
      if (span <= 0) return 0;
      return static_cast<int>(rng() % static_cast<uint64_t>(span + 1));
    };
    o = {draw(D), draw(H), draw(W)};
  }
  auto src = [&](int d, int h, int w) {
    return std::tuple<int, int, int>{o[0] + d, o[1] + h, o[2] + w};
  };
  PairSample out;
  out.moving = remap_volume(pair.moving, patch, patch, patch, src);
  out.fixed = remap_volume(pair.fixed, patch, patch, patch, src);
  out.moving_seg = remap_labels(pair.moving_seg, patch, patch, patch, src);
  out.fixed_seg = remap_labels(pair.fixed_seg, patch, patch, patch, src);
  return out;
}

AugmentTransform random_augment(const std::array<int, 3>& ext, uint64_t seed) {
  std::mt19937_64 rng(seed);
  AugmentTransform t;
  for (int a = 0; a < 3; ++a) t.flip[a] = (rng() & 1) != 0;
  t.rot_axis = static_cast<int>(rng() % 3);
  t.rot_quarters = static_cast<int>(rng() % 4);
  int a1 = (t.rot_axis + 1) % 3, a2 = (t.rot_axis + 2) % 3;
  // odd quarter turns only keep the grid shape for matching extents
  if (ext[a1] != ext[a2] && (t.rot_quarters % 2) == 1)
    t.rot_quarters = 2 * static_cast<int>(rng() % 2);
  for (int a = 0; a < 3; ++a) t.shift[a] = static_cast<int>(rng() % 5) - 2;
  return t;
}

PairSample apply_augment(const PairSample& pair, const AugmentTransform& t) {
  int D = pair.moving.depth(), H = pair.moving.height(), W = pair.moving.width();
  std::array<int, 3> ext{D, H, W};
  int a1 = (t.rot_axis + 1) % 3, a2 = (t.rot_axis + 2) % 3;
  if (ext[a1] != ext[a2] && (t.rot_quarters % 2) == 1)
    throw std::invalid_argument("apply_augment: odd quarter turn on unequal extents");

  // forward transform = rotate, then flip, then shift; the lookup inverts it.
  auto src_of = [&](int d, int h, int w) {
    int c[3] = {d, h, w};
    for (int a = 0; a < 3; ++a) {
      c[a] -= t.shift[a];
      if (t.flip[a]) c[a] = ext[a] - 1 - c[a];
    }
    int u = c[a1], v = c[a2];
    switch (t.rot_quarters & 3) {
      case 1:
        c[a1] = v;
        c[a2] = ext[a2] - 1 - u;
        break;
      case 2:
        c[a1] = ext[a1] - 1 - u;
        c[a2] = ext[a2] - 1 - v;
        break;
      case 3:
        c[a1] = ext[a1] - 1 - v;
        c[a2] = u;
        break;
      default:
        break;
    }
    return std::tuple<int, int, int>{c[0], c[1], c[2]};
  };

  PairSample out;
  out.moving = remap_volume(pair.moving, D, H, W, src_of);
  out.fixed = remap_volume(pair.fixed, D, H, W, src_of);
  out.moving_seg = remap_labels(pair.moving_seg, D, H, W, src_of);
  out.fixed_seg = remap_labels(pair.fixed_seg, D, H, W, src_of);
  return out;
}

PairSample augment_pair(const PairSample& pair, uint64_t seed) {
  std::array<int, 3> ext{pair.moving.depth(), pair.moving.height(), pair.moving.width()};
  return apply_augment(pair, random_augment(ext, seed));
}

}  // namespace gradreg
