#pragma once

// Training loop building blocks: L1 objective, Adam, single-step driver,
// bit-exact checkpoints (parameters, optimizer moments, RNG stream position)
// and overlap-averaged tiled inference for volumes larger than one patch.

#include <cstdio>
#include <cstring>
#include <fstream>
#include <sstream>

#include "model.hpp"
#include "unet.hpp"

namespace sunet {

// ---- objective -------------------------------------------------------------

template <class T>
double l1_loss(const Tensor5<T>& y, const Tensor5<T>& t) {
  require(y.shape() == t.shape(), "l1: shape mismatch " + y.shape().str() + " vs " + t.shape().str());
  double acc = 0;
  for (int64_t i = 0; i < y.size(); ++i) acc += std::abs(double(y.data()[i]) - double(t.data()[i]));
  return acc / double(y.size());
}

// Subgradient of mean |y - t| (zero at exact ties).
template <class T>
double l1_loss_grad(const Tensor5<T>& y, const Tensor5<T>& t, Tensor5<T>& gy) {
  require(y.shape() == t.shape(), "l1: shape mismatch");
  gy.resize(y.shape());
  double acc = 0;
  const double inv = 1.0 / double(y.size());
  for (int64_t i = 0; i < y.size(); ++i) {
    const double d = double(y.data()[i]) - double(t.data()[i]);
    acc += std::abs(d);
    gy.data()[i] = T(d > 0 ? inv : d < 0 ? -inv : 0.0);
  }
  return acc * inv;
}

// ---- optimizer -------------------------------------------------------------

struct AdamConfig {
  double lr = 1e-4, beta1 = 0.9, beta2 = 0.999, eps = 1e-8;
};

template <class T>
struct Adam {
  AdamConfig cfg;
  std::vector<T> m, v;
  int64_t t = 0;

  void step(std::vector<T>& params, const std::vector<T>& grads) {
    if (m.empty()) {
      m.assign(params.size(), T(0));
      v.assign(params.size(), T(0));
    }
    ++t;
    const double b1 = cfg.beta1, b2 = cfg.beta2;
    const double c1 = 1.0 - std::pow(b1, double(t)), c2 = 1.0 - std::pow(b2, double(t));
    for (size_t i = 0; i < params.size(); ++i) {
      const double gi = double(grads[i]);
      const double mi = b1 * double(m[i]) + (1 - b1) * gi;
      const double vi = b2 * double(v[i]) + (1 - b2) * gi * gi;
      m[i] = T(mi);
      v[i] = T(vi);
      params[i] -= T(cfg.lr * (mi / c1) / (std::sqrt(vi / c2) + cfg.eps));
    }
  }
};

// ---- one optimization step --------------------------------------------------

template <class T>
struct Trainer {
  Graph<T>& g;
  Adam<T> opt;
  std::mt19937 rng;
  int epoch = 0;
  int64_t step = 0;
  Exec<T> exec;

  Trainer(Graph<T>& graph, AdamConfig ocfg, uint64_t seed) : g(graph), rng(uint32_t(seed)) {
    opt.cfg = ocfg;
  }

  // Forward, L1, backward, Adam.  Returns the batch loss.
  double train_step(const Tensor5<T>& x, const Tensor5<T>& tgt) {
    auto& y = forward(g, x, exec, true);
    exec.grad.assign(g.nodes.size(), Tensor5<T>());
    exec.pgrad.assign(g.params.size(), T(0));
    const double loss = l1_loss_grad(y, tgt, exec.grad[size_t(g.output)]);
    if (!std::isfinite(loss))
      throw numeric_error("non-finite training loss at step " + std::to_string(step + 1));
    backward(g, exec);
    opt.step(g.params, exec.pgrad);
    ++step;
    return loss;
  }

  double eval_loss(const Tensor5<T>& x, const Tensor5<T>& tgt) {
    Tensor5<T> y;
    forward_streaming(g, x, exec, y);
    return l1_loss(y, tgt);
  }
};

// ---- step log ---------------------------------------------------------------

// CSV sink for per-step and per-epoch losses: epoch,step,split,l1
class MetricsCsv {
 public:
  MetricsCsv() = default;
  explicit MetricsCsv(const std::string& path) : out_(path) {
    if (!out_) throw data_error("cannot open metrics log " + path);
    out_ << "epoch,step,split,l1\n";
  }
  void row(int epoch, int64_t step, const std::string& split, double l1) {
    if (!out_.is_open()) return;
    char buf[64];
    std::snprintf(buf, sizeof buf, "%.10g", l1);
    out_ << epoch << ',' << step << ',' << split << ',' << buf << '\n';
    out_.flush();
  }

 private:
  std::ofstream out_;
};

// ---- checkpoints -------------------------------------------------------------

namespace detail {

template <class P>
void put(std::ostream& o, const P& v) {
  o.write(reinterpret_cast<const char*>(&v), sizeof v);
}
template <class P>
void get(std::istream& i, P& v) {
  i.read(reinterpret_cast<char*>(&v), sizeof v);
  if (!i) throw data_error("checkpoint: truncated stream");
}
template <class T>
void put_vec(std::ostream& o, const std::vector<T>& v) {
  put(o, uint64_t(v.size()));
  o.write(reinterpret_cast<const char*>(v.data()), std::streamsize(v.size() * sizeof(T)));
}
template <class T>
void get_vec(std::istream& i, std::vector<T>& v) {
  uint64_t n = 0;
  get(i, n);
  v.resize(size_t(n));
  i.read(reinterpret_cast<char*>(v.data()), std::streamsize(n * sizeof(T)));
  if (!i) throw data_error("checkpoint: truncated payload");
}
inline void put_str(std::ostream& o, const std::string& s) {
  put(o, uint64_t(s.size()));
  o.write(s.data(), std::streamsize(s.size()));
}
inline std::string get_str(std::istream& i) {
  uint64_t n = 0;
  get(i, n);
  std::string s(size_t(n), '\0');
  i.read(s.data(), std::streamsize(n));
  if (!i) throw data_error("checkpoint: truncated string");
  return s;
}

}  // namespace detail

inline constexpr char kCkptMagic[8] = {'S', 'U', 'N', 'C', 'K', 'P', 'T', '\1'};
inline constexpr char kNetCkptMagic[8] = {'S', 'U', 'N', 'C', 'K', 'P', 'T', '\2'};

namespace detail {

template <class T>
void put_body(std::ostream& o, const ModelConfig& mc, const Graph<T>& g, const Trainer<T>& tr) {
  put(o, uint32_t(sizeof(T)));
  put(o, int32_t(mc.levels));
  put(o, int32_t(mc.base_filters));
  put(o, int32_t(mc.in_channels));
  put(o, int32_t(mc.out_channels));
  put(o, uint8_t(mc.global_residual));
  put(o, mc.leaky_slope);
  put(o, mc.init_seed);
  put_vec(o, g.params);
  put_vec(o, g.state);
  put_vec(o, tr.opt.m);
  put_vec(o, tr.opt.v);
  put(o, tr.opt.t);
  put(o, tr.opt.cfg.lr);
  put(o, tr.opt.cfg.beta1);
  put(o, tr.opt.cfg.beta2);
  put(o, tr.opt.cfg.eps);
  std::ostringstream rs;
  rs << tr.rng;
  put_str(o, rs.str());
  put(o, int32_t(tr.epoch));
  put(o, tr.step);
}

// Reads everything past the magic; the caller builds the graph and adopts the
// parameter/state vectors afterwards.
template <class T>
ModelConfig get_body(std::istream& i, std::vector<T>& params, std::vector<T>& state,
                     Trainer<T>* tr) {
  uint32_t esize = 0;
  get(i, esize);
  if (esize != sizeof(T))
    throw data_error("checkpoint dtype width " + std::to_string(esize) + " != built width " +
                     std::to_string(sizeof(T)));
  ModelConfig mc;
  int32_t v32 = 0;
  uint8_t v8 = 0;
  get(i, v32);
  mc.levels = v32;
  get(i, v32);
  mc.base_filters = v32;
  get(i, v32);
  mc.in_channels = v32;
  get(i, v32);
  mc.out_channels = v32;
  get(i, v8);
  mc.global_residual = v8 != 0;
  get(i, mc.leaky_slope);
  get(i, mc.init_seed);
  std::vector<T> m, v;
  get_vec(i, params);
  get_vec(i, state);
  get_vec(i, m);
  get_vec(i, v);
  int64_t t = 0;
  AdamConfig ac;
  get(i, t);
  get(i, ac.lr);
  get(i, ac.beta1);
  get(i, ac.beta2);
  get(i, ac.eps);
  const std::string rngs = get_str(i);
  int32_t epoch = 0;
  int64_t step = 0;
  get(i, epoch);
  get(i, step);
  if (tr) {
    tr->opt.m = std::move(m);
    tr->opt.v = std::move(v);
    tr->opt.t = t;
    tr->opt.cfg = ac;
    std::istringstream rs(rngs);
    rs >> tr->rng;
    tr->epoch = epoch;
    tr->step = step;
  }
  return mc;
}

template <class T>
void adopt_params(Graph<T>& g, std::vector<T>&& params, std::vector<T>&& state) {
  if (int64_t(params.size()) != g.param_count())
    throw data_error("checkpoint parameter count mismatch");
  g.params = std::move(params);
  g.state = std::move(state);
}

}  // namespace detail

template <class T>
void save_checkpoint(const std::string& path, const ModelConfig& mc, const Graph<T>& g,
                     const Trainer<T>& tr) {
  std::ofstream o(path, std::ios::binary);
  if (!o) throw data_error("cannot write checkpoint " + path);
  o.write(kCkptMagic, 8);
  detail::put_body(o, mc, g, tr);
  if (!o) throw data_error("checkpoint write failed " + path);
}

template <class T>
ModelConfig load_checkpoint(const std::string& path, Graph<T>* g, Trainer<T>* tr) {
  std::ifstream i(path, std::ios::binary);
  if (!i) throw data_error("cannot read checkpoint " + path);
  char magic[8];
  i.read(magic, 8);
  if (!i || std::memcmp(magic, kCkptMagic, 8) != 0)
    throw data_error("not a checkpoint file: " + path);
  std::vector<T> params, state;
  const ModelConfig mc = detail::get_body(i, params, state, tr);
  if (g) {
    *g = build_shuffleunet<T>(mc);
    detail::adopt_params(*g, std::move(params), std::move(state));
  }
  return mc;
}

// Architecture-tagged variant: same payload prefixed with the architecture
// name, so one file format serves both the primary network and the baseline.
// The ModelConfig carries the shared structural fields for either builder.
template <class T>
void save_net_checkpoint(const std::string& path, const std::string& arch, const ModelConfig& mc,
                         const Graph<T>& g, const Trainer<T>& tr) {
  std::ofstream o(path, std::ios::binary);
  if (!o) throw data_error("cannot write checkpoint " + path);
  o.write(kNetCkptMagic, 8);
  detail::put_str(o, arch);
  detail::put_body(o, mc, g, tr);
  if (!o) throw data_error("checkpoint write failed " + path);
}

template <class T>
Graph<T> build_net(const std::string& arch, const ModelConfig& mc) {
  if (arch == "shuffleunet") return build_shuffleunet<T>(mc);
  if (arch == "unet") {
    UnetConfig uc;
    uc.levels = mc.levels;
    uc.base_filters = mc.base_filters;
    uc.in_channels = mc.in_channels;
    uc.out_channels = mc.out_channels;
    uc.init_seed = mc.init_seed;
    return build_unet<T>(uc);
  }
  throw data_error("unknown architecture '" + arch + "' (expected shuffleunet or unet)");
}

template <class T>
std::string load_net_checkpoint(const std::string& path, ModelConfig* out_mc, Graph<T>* g,
                                Trainer<T>* tr) {
  std::ifstream i(path, std::ios::binary);
  if (!i) throw data_error("cannot read checkpoint " + path);
  char magic[8];
  i.read(magic, 8);
  if (!i || std::memcmp(magic, kNetCkptMagic, 8) != 0)
    throw data_error("not a checkpoint file: " + path);
  const std::string arch = detail::get_str(i);
  std::vector<T> params, state;
  const ModelConfig mc = detail::get_body(i, params, state, tr);
  if (out_mc) *out_mc = mc;
  if (g) {
    *g = build_net<T>(arch, mc);
    detail::adopt_params(*g, std::move(params), std::move(state));
  }
  return arch;
}

// ---- tiled inference ---------------------------------------------------------

// Applies the network to an (1,1,H,W,D) volume by sliding patch windows with
// the given overlap; overlapping predictions are averaged.  Windows are
// clamped so the final row/column/slab stays flush with the volume border.
template <class T>
Tensor5<T> infer_tiled(Graph<T>& g, const Tensor5<T>& vol, int ph, int pw, int pd, int oh, int ow,
                       int od) {
  const Shape5 s = vol.shape();
  require(s.n == 1 && s.c == 1, "infer_tiled expects a (1,1,H,W,D) volume");
  ph = int(std::min<int64_t>(ph, s.H));
  pw = int(std::min<int64_t>(pw, s.W));
  pd = int(std::min<int64_t>(pd, s.D));
  require(oh < ph && ow < pw && od < pd, "overlap must be smaller than the patch");
  Tensor5<T> sum(1, 1, s.H, s.W, s.D), wgt(1, 1, s.H, s.W, s.D);
  Exec<T> e;
  auto starts = [](int64_t extent, int patch, int overlap) {
    std::vector<int64_t> v;
    const int64_t stride = patch - overlap;
    for (int64_t o = 0;; o += stride) {
      if (o + patch >= extent) {
        v.push_back(extent - patch);
        break;
      }
      v.push_back(o);
    }
    return v;
  };
  const auto hs = starts(s.H, ph, oh), ws = starts(s.W, pw, ow), ds = starts(s.D, pd, od);
  Tensor5<T> patch(1, 1, ph, pw, pd), out;
  for (int64_t h0 : hs)
    for (int64_t w0 : ws)
      for (int64_t d0 : ds) {
        for (int64_t h = 0; h < ph; ++h)
          for (int64_t w = 0; w < pw; ++w)
            std::copy(vol.data() + ((h0 + h) * s.W + (w0 + w)) * s.D + d0,
                      vol.data() + ((h0 + h) * s.W + (w0 + w)) * s.D + d0 + pd,
                      patch.data() + (h * pw + w) * pd);
        forward_streaming(g, patch, e, out);
        for (int64_t h = 0; h < ph; ++h)
          for (int64_t w = 0; w < pw; ++w) {
            T* sp = sum.data() + ((h0 + h) * s.W + (w0 + w)) * s.D + d0;
            T* wp = wgt.data() + ((h0 + h) * s.W + (w0 + w)) * s.D + d0;
            const T* op = out.data() + (h * pw + w) * pd;
            for (int64_t d = 0; d < pd; ++d) {
              sp[d] += op[d];
              wp[d] += T(1);
            }
          }
      }
  for (int64_t i = 0; i < sum.size(); ++i) sum.data()[i] /= wgt.data()[i];
  return sum;
}

}  // namespace sunet
