#include "gradreg/network.hpp"

#include <cmath>
#include <fstream>
#include <random>
#include <sstream>

namespace gradreg {

template <typename S>
std::string NetConfig<S>::to_string() const {
  std::ostringstream os;
  os << "channels=";
  for (size_t i = 0; i < channels.size(); ++i) os << (i ? "," : "") << channels[i];
  os << " in_channels=" << in_channels << " sup_levels=" << sup_levels
     << " leaky_slope=" << static_cast<double>(leaky_slope);
  return os.str();
}

NetConfig<float> net_config_from_string(const std::string& line) {
  NetConfig<float> cfg;
  cfg.channels.clear();
  std::istringstream is(line);
  std::string kv;
  while (is >> kv) {
    auto eq = kv.find('=');
    if (eq == std::string::npos)
      throw std::runtime_error("checkpoint: bad config entry '" + kv + "'");
    std::string key = kv.substr(0, eq), val = kv.substr(eq + 1);
    if (key == "channels") {
      std::istringstream cs(val);
      std::string tok;
      while (std::getline(cs, tok, ',')) cfg.channels.push_back(std::stoi(tok));
    } else if (key == "in_channels") {
      cfg.in_channels = std::stoi(val);
    } else if (key == "sup_levels") {
      cfg.sup_levels = std::stoi(val);
    } else if (key == "leaky_slope") {
      cfg.leaky_slope = std::stof(val);
    } else {
      throw std::runtime_error("checkpoint: unknown config key '" + key + "'");
    }
  }
  cfg.validate();
  return cfg;
}

template <typename S>
void Parameters<S>::add(const std::string& name, Tensor<S> t) {
  if (index_.count(name)) throw std::invalid_argument("parameters: duplicate name " + name);
  index_[name] = static_cast<int>(names_.size());
  names_.push_back(name);
  tensors_.push_back(std::move(t));
}

template <typename S>
Tensor<S>& Parameters<S>::at(const std::string& name) {
  auto it = index_.find(name);
  if (it == index_.end()) throw std::invalid_argument("parameters: no tensor named " + name);
  return tensors_[it->second];
}

template <typename S>
const Tensor<S>& Parameters<S>::at(const std::string& name) const {
  auto it = index_.find(name);
  if (it == index_.end()) throw std::invalid_argument("parameters: no tensor named " + name);
  return tensors_[it->second];
}

template <typename S>
long Parameters<S>::total_scalars() const {
  long n = 0;
  for (const Tensor<S>& t : tensors_) n += t.size();
  return n;
}

template <typename S>
void Parameters<S>::watch_all(Tape<S>& tape) {
  for (Tensor<S>& t : tensors_) tape.watch(t);
}

template <typename S>
bool Parameters<S>::all_finite() const {
  for (const Tensor<S>& t : tensors_)
    if (!t.all_finite()) return false;
  return true;
}

template class Parameters<float>;
template class Parameters<double>;

namespace {

template <typename S>
Tensor<S> uniform_tensor(Shape shape, S bound, std::mt19937_64& rng) {
  Tensor<S> t(std::move(shape));
  std::uniform_real_distribution<double> dist(-static_cast<double>(bound),
                                              static_cast<double>(bound));
  for (long i = 0; i < t.size(); ++i) t.data()[i] = static_cast<S>(dist(rng));
  return t;
}

template <typename S>
void add_conv(Parameters<S>& p, const std::string& name, int cout, int cin, int k,
              std::mt19937_64& rng, bool zero_init = false) {
  Shape wshape{cout, cin, k, k, k};
  if (zero_init) {
    p.add(name + ".weight", Tensor<S>(wshape));
  } else {
    S bound = static_cast<S>(std::sqrt(3.0 / (static_cast<double>(cin) * k * k * k)));
    p.add(name + ".weight", uniform_tensor<S>(wshape, bound, rng));
  }
  p.add(name + ".bias", Tensor<S>(Shape{cout}));
}

}  // namespace

template <typename S>
RegNet<S>::RegNet(NetConfig<S> cfg) : cfg_(std::move(cfg)) {
  cfg_.validate();
}

template <typename S>
Parameters<S> RegNet<S>::init_parameters(const NetConfig<S>& cfg, uint64_t seed) {
  cfg.validate();
  std::mt19937_64 rng(seed);
  Parameters<S> p;
  int prev = cfg.in_channels;
  for (int l = 0; l < cfg.blocks(); ++l) {
    int ch = cfg.channels[l];
    add_conv(p, "enc" + std::to_string(l + 1) + ".conv", ch, prev, 3, rng);
    add_conv(p, "enc" + std::to_string(l + 1) + ".down", ch, ch, 2, rng);
    prev = ch;
  }
  for (int l = cfg.blocks() - 1; l >= 1; --l)
    add_conv(p, "dec" + std::to_string(l) + ".conv", cfg.channels[l - 1], cfg.channels[l], 3, rng);
  add_conv(p, "final.conv", cfg.channels[0], cfg.channels[0], 3, rng);
  for (int l = 0; l < cfg.sup_levels; ++l) {
    int in_ch = l == 0 ? cfg.channels[0] : cfg.channels[l - 1];
    add_conv(p, "head" + std::to_string(l) + ".conv", 3, in_ch, 3, rng, /*zero_init=*/true);
  }
  return p;
}

template <typename S>
std::vector<Tensor<S>> RegNet<S>::encode(const Parameters<S>& p, const Tensor<S>& vol) const {
  if (vol.order() != 4 || vol.dim(0) != cfg_.in_channels)
    throw std::invalid_argument("encode: expected [" + std::to_string(cfg_.in_channels) +
                                ",D,H,W], got " + shape_str(vol.shape()));
  int div = cfg_.divisor();
  for (int a = 1; a < 4; ++a)
    if (vol.dim(a) % div != 0)
      throw std::invalid_argument("encode: extents " + shape_str(vol.shape()) +
                                  " not divisible by " + std::to_string(div));
  std::vector<Tensor<S>> pyr;
  Tensor<S> x = vol;
  for (int l = 0; l < cfg_.blocks(); ++l) {
    std::string base = "enc" + std::to_string(l + 1);
    x = instance_norm(x, S(1e-5));
    x = leaky_relu(x, cfg_.leaky_slope);
    x = conv3d(x, p.at(base + ".conv.weight"), p.at(base + ".conv.bias"), 1, 1);
    x = conv3d(x, p.at(base + ".down.weight"), p.at(base + ".down.bias"), 2, 0);
    pyr.push_back(x);
  }
  return pyr;
}

template <typename S>
std::vector<Tensor<S>> RegNet<S>::merge(const std::vector<Tensor<S>>& eM,
                                        const std::vector<Tensor<S>>& eF) const {
  if (eM.size() != eF.size()) throw std::invalid_argument("merge: pyramid depth mismatch");
  std::vector<Tensor<S>> m;
  m.reserve(eM.size());
  for (size_t l = 0; l < eM.size(); ++l) m.push_back(sub(eM[l], eF[l]));
  return m;
}

template <typename S>
std::vector<Tensor<S>> RegNet<S>::decode(const Parameters<S>& p,
                                         const std::vector<Tensor<S>>& m) const {
  if (static_cast<int>(m.size()) != cfg_.blocks())
    throw std::invalid_argument("decode: expected " + std::to_string(cfg_.blocks()) +
                                " pyramid levels");
  int L = cfg_.blocks();
  // d[l] = decoder feature at 1/2^l resolution; d[L] is the merged bottleneck.
  std::vector<Tensor<S>> d(L + 1);
  d[L] = m[L - 1];
  for (int l = L - 1; l >= 1; --l) {
    std::string base = "dec" + std::to_string(l);
    Tensor<S> u = upsample_nearest2x(d[l + 1]);
    Tensor<S> c = conv3d(u, p.at(base + ".conv.weight"), p.at(base + ".conv.bias"), 1, 1);
    Tensor<S> s = add(c, m[l - 1]);
    d[l] = leaky_relu(instance_norm(s, S(1e-5)), cfg_.leaky_slope);
  }
  Tensor<S> u0 = upsample_nearest2x(d[1]);
  Tensor<S> c0 = conv3d(u0, p.at("final.conv.weight"), p.at("final.conv.bias"), 1, 1);
  d[0] = leaky_relu(instance_norm(c0, S(1e-5)), cfg_.leaky_slope);

  std::vector<Tensor<S>> raws;
  for (int l = 0; l < cfg_.sup_levels; ++l) {
    std::string base = "head" + std::to_string(l);
    raws.push_back(conv3d(d[l], p.at(base + ".conv.weight"), p.at(base + ".conv.bias"), 1, 1));
  }
  return raws;
}

template <typename S>
std::pair<std::vector<Tensor<S>>, std::vector<Tensor<S>>> RegNet<S>::symmetric_forward(
    const Parameters<S>& p, const Tensor<S>& M, const Tensor<S>& F) const {
  if (M.shape() != F.shape())
    throw std::invalid_argument("symmetric_forward: shape mismatch " + shape_str(M.shape()) +
                                " vs " + shape_str(F.shape()));
  std::vector<Tensor<S>> eM = encode(p, M);
  std::vector<Tensor<S>> eF = encode(p, F);
  std::vector<Tensor<S>> m = merge(eM, eF);
  std::vector<Tensor<S>> neg_m;
  neg_m.reserve(m.size());
  for (const Tensor<S>& t : m) neg_m.push_back(neg(t));
  return {decode(p, m), decode(p, neg_m)};
}

template class RegNet<float>;
template class RegNet<double>;

// --- checkpoints ------------------------------------------------------------

namespace {
constexpr const char* kCkptMagic = "grckpt 1";
}

void save_checkpoint(const std::string& path, const NetConfig<float>& cfg,
                     const Parameters<float>& params, long step) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw std::runtime_error("checkpoint: cannot write " + path);
  os << kCkptMagic << '\n';
  os << "config " << cfg.to_string() << '\n';
  os << "step " << step << '\n';
  os << "params " << params.count() << '\n';
  for (int i = 0; i < params.count(); ++i) {
    os << params.name(i);
    for (int e : params.tensor(i).shape()) os << ' ' << e;
    os << '\n';
  }
  os << '\n';
  for (int i = 0; i < params.count(); ++i) {
    const Tensor<float>& t = params.tensor(i);
    os.write(reinterpret_cast<const char*>(t.data()), t.size() * sizeof(float));
  }
}

Checkpoint load_checkpoint(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("checkpoint: cannot read " + path);
  std::string line;
  if (!std::getline(is, line) || line != kCkptMagic)
    throw std::runtime_error("checkpoint: missing 'grckpt 1' magic in " + path);
  Checkpoint ck;
  int n_params = -1;
  while (std::getline(is, line)) {
    if (line.empty()) break;
    std::istringstream ls(line);
    std::string key;
    ls >> key;
    if (key == "config") {
      std::string rest;
      std::getline(ls, rest);
      ck.config = net_config_from_string(rest);
    } else if (key == "step") {
      ls >> ck.step;
    } else if (key == "params") {
      ls >> n_params;
      std::vector<std::pair<std::string, Shape>> table;
      for (int i = 0; i < n_params; ++i) {
        if (!std::getline(is, line))
          throw std::runtime_error("checkpoint: truncated name table in " + path);
        std::istringstream ts(line);
        std::string name;
        ts >> name;
        Shape shape;
        int e;
        while (ts >> e) shape.push_back(e);
        table.emplace_back(name, shape);
      }
      // blank separator then buffers
      if (!std::getline(is, line) || !line.empty())
        throw std::runtime_error("checkpoint: missing blank line before buffers in " + path);
      for (auto& [name, shape] : table) {
        Tensor<float> t(shape);
        is.read(reinterpret_cast<char*>(t.data()), t.size() * sizeof(float));
        if (is.gcount() != static_cast<std::streamsize>(t.size() * sizeof(float)))
          throw std::runtime_error("checkpoint: truncated buffer for " + name + " in " + path);
        ck.params.add(name, std::move(t));
      }
      return ck;
    } else {
      throw std::runtime_error("checkpoint: unknown header key '" + key + "' in " + path);
    }
  }
  throw std::runtime_error("checkpoint: missing params table in " + path);
}

std::string RestoreReport::to_string() const {
  std::ostringstream os;
  os << "restore matched=" << matched.size();
  auto list = [&](const char* tag, const std::vector<std::string>& v) {
    if (v.empty()) return;
    os << ' ' << tag << '=';
    for (size_t i = 0; i < v.size(); ++i) os << (i ? "," : "") << v[i];
  };
  list("missing", missing);
  list("unexpected", unexpected);
  list("shape_mismatch", shape_mismatch);
  return os.str();
}

RestoreReport restore_into(Parameters<float>& dst, const Parameters<float>& src) {
  RestoreReport rep;
  for (int i = 0; i < dst.count(); ++i) {
    const std::string& name = dst.name(i);
    if (!src.has(name)) {
      rep.missing.push_back(name);
      continue;
    }
    const Tensor<float>& s = src.at(name);
    Tensor<float>& d = dst.tensor(i);
    if (s.shape() != d.shape()) {
      rep.shape_mismatch.push_back(name);
      continue;
    }
    d.array() = s.array();
    rep.matched.push_back(name);
  }
  for (int i = 0; i < src.count(); ++i)
    if (!dst.has(src.name(i))) rep.unexpected.push_back(src.name(i));
  return rep;
}

template struct NetConfig<float>;
template struct NetConfig<double>;

}  // namespace gradreg
