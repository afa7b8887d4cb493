#pragma once

// All-parameter central finite differences against analytic gradients.
//
// A naive check re-runs the whole forward twice per parameter; that is
// quadratic in practice and hopeless for 3e5 parameters.  This harness keeps
// the cost manageable with three exact (not approximate) observations:
//
//   1. Perturbing one conv parameter changes that conv's output only in one
//      output channel, and the change is h * (shifted input channel) for a
//      weight or h * 1 for a bias.  The perturbed forward therefore needs to
//      re-evaluate only nodes downstream of the perturbed conv, starting from
//      an exactly injected output.
//   2. Many evaluations with the same downstream structure can share work by
//      batching perturbation "lanes" into the innermost, contiguous axis of
//      every buffer (G lanes).  Weights are lane-invariant, so the conv
//      kernel broadcasts one weight across a vector of lanes - ideal SIMD.
//   3. Channels that do not depend on the perturbed parameter stay equal to
//      the base activations.  Tensors are kept as ordered channel blocks,
//      each either 'invariant' (a pointer into the base forward) or 'varying'
//      (a lane buffer).  A conv folds its invariant input channels into a
//      per-voxel offset R = base_out - conv(varying base channels), computed
//      once per block pattern, so skip-fed concatenations cost only their
//      varying slice.
//
// Every lane value is a genuine forward evaluation of the perturbed network
// (verified against whole-network reforwarding in the unit tests); nothing is
// linearized through the loss.

#include <algorithm>
#include <array>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <map>
#include <memory>
#include <string>
#include <vector>

#include <sunet/graph.hpp>

#ifdef __AVX512F__
#include <immintrin.h>
#endif

namespace fdcheck {

using sunet::Exec;
using sunet::Graph;
using sunet::Node;
using sunet::Op;
using sunet::Shape5;
using sunet::Tensor5;

constexpr int kLanes = 32;  // lane-chunk width; 16 parameters (+h/-h) per chunk

// 64-byte-aligned buffer so every 8-lane vector load is exactly one cache
// line (lane offsets are multiples of 64B when the base is aligned).  Newly
// allocated memory is zeroed; same-size resizes keep contents, which lets
// reused padded buffers keep their zero halo across chunks.
class Avec {
 public:
  Avec() = default;
  ~Avec() { std::free(p_); }
  Avec(const Avec&) = delete;
  Avec& operator=(const Avec&) = delete;
  Avec(Avec&& o) noexcept : p_(o.p_), n_(o.n_), cap_(o.cap_) { o.p_ = nullptr; o.n_ = o.cap_ = 0; }
  Avec& operator=(Avec&& o) noexcept {
    std::swap(p_, o.p_);
    std::swap(n_, o.n_);
    std::swap(cap_, o.cap_);
    return *this;
  }
  void resize(size_t n) {
    if (n > cap_) {
      std::free(p_);
      cap_ = n;
      p_ = static_cast<double*>(std::aligned_alloc(64, ((cap_ * 8 + 63) / 64) * 64));
      std::memset(p_, 0, cap_ * 8);
    }
    n_ = n;
  }
  void zero() { std::memset(p_, 0, n_ * 8); }
  double* data() { return p_; }
  const double* data() const { return p_; }
  size_t size() const { return n_; }
  double& operator[](size_t i) { return p_[i]; }
  double operator[](size_t i) const { return p_[i]; }

 private:
  double* p_ = nullptr;
  size_t n_ = 0, cap_ = 0;
};

struct VarBuf {
  Avec v;  // (len, H, W, D, G), g fastest
};

struct Blk {
  int64_t c0 = 0, len = 0;
  bool varying = false;
  const double* inv = nullptr;      // invariant: base activation channel slice (len,H,W,D)
  std::shared_ptr<VarBuf> var;      // varying: lane buffer
};

struct LaneTensor {
  int64_t C = 0, H = 0, W = 0, D = 0;
  bool preactivated = false;  // producing conv already applied the activation
  std::vector<Blk> blocks;

  int64_t vox() const { return H * W * D; }
  bool any_varying() const {
    for (const auto& b : blocks)
      if (b.varying) return true;
    return false;
  }
};

// ---- g-major conv kernels ---------------------------------------------------

namespace kern {

// y (Co,H,W,D,G) initialized to R (broadcast per channel-voxel) then
// accumulated with conv3x3x3 of the padded lane input xp (len,H+2,W+2,D+2,G).
// 'accumulate' switches the initialization to the existing y contents.
// Portable reference path; `wstride` is the weight row length in input
// channels (>= len when the caller splits the input channels into blocks).
inline void conv3_lanes(const double* xp, const double* w, double* y, const double* R,
                        int64_t len, int64_t wstride, int64_t Co, int64_t H, int64_t W, int64_t D,
                        int G, bool accumulate) {
  const int64_t Wp = W + 2, Dp = D + 2;
  const int64_t xcs = (H + 2) * Wp * Dp * G;
  const int64_t yvs = H * W * D;
  for (int64_t co = 0; co < Co; ++co) {
    const double* wc = w + co * wstride * 27;
    for (int64_t h = 0; h < H; ++h)
      for (int64_t ww = 0; ww < W; ++ww)
        for (int64_t d = 0; d < D; ++d) {
          double* yrow = y + ((co * H + h) * W * D + ww * D + d) * G;
          const double r = R[co * yvs + (h * W + ww) * D + d];
          if (!accumulate)
            for (int g = 0; g < G; ++g) yrow[g] = r;
          for (int64_t ci = 0; ci < len; ++ci)
            for (int kh = 0; kh < 3; ++kh)
              for (int kw = 0; kw < 3; ++kw)
                for (int kd = 0; kd < 3; ++kd) {
                  const double wv = wc[ci * 27 + (kh * 3 + kw) * 3 + kd];
                  const double* xrow =
                      xp + ci * xcs + (((h + kh) * Wp + (ww + kw)) * Dp + d + kd) * G;
                  for (int g = 0; g < G; ++g) yrow[g] += wv * xrow[g];
                }
        }
  }
}

// Register-blocked main kernel: 8 output channels x 2 depth positions, so a
// block of input channels is swept once per 8 outputs.  `len` is the input
// channels handled by this call; `wstride` the full input-channel count of
// the weight slice, letting the caller chain calls over ci blocks (with
// accumulate=true) to keep the lane buffer slice L2-resident.
inline void conv3_lanes_b82(const double* xp, const double* w, double* y, const double* R,
                            int64_t len, int64_t wstride, int64_t Co, int64_t H, int64_t W,
                            int64_t D, int G, bool accumulate) {
#ifdef __AVX512F__
  const int64_t Wp = W + 2, Dp = D + 2;
  const int64_t xcs = (H + 2) * Wp * Dp * G;
  const int64_t yvs = H * W * D;
  for (int64_t co = 0; co < Co; co += 8)
    for (int64_t h = 0; h < H; ++h)
      for (int64_t ww = 0; ww < W; ++ww)
        for (int64_t d0 = 0; d0 < D; d0 += 2)
          for (int g0 = 0; g0 < G; g0 += 8) {
            __m512d acc[8][2];
            for (int j = 0; j < 8; ++j)
              for (int v = 0; v < 2; ++v) {
                double* yp = y + (((co + j) * H + h) * W * D + ww * D + d0 + v) * G + g0;
                acc[j][v] = accumulate
                                ? _mm512_loadu_pd(yp)
                                : _mm512_set1_pd(R[(co + j) * yvs + (h * W + ww) * D + d0 + v]);
              }
            for (int64_t ci = 0; ci < len; ++ci) {
              const double* xc = xp + ci * xcs + g0;
              const double* wk = w + (co * wstride + ci) * 27;
              for (int kh = 0; kh < 3; ++kh)
                for (int kw = 0; kw < 3; ++kw) {
                  const double* xrow = xc + ((h + kh) * Wp + (ww + kw)) * Dp * G + d0 * G;
                  __m512d xv[4];
                  for (int v = 0; v < 4; ++v) xv[v] = _mm512_loadu_pd(xrow + v * G);
                  const double* wkk = wk + (kh * 3 + kw) * 3;
                  for (int kd = 0; kd < 3; ++kd)
                    for (int j = 0; j < 8; ++j) {
                      const __m512d wj = _mm512_set1_pd(wkk[j * wstride * 27 + kd]);
                      acc[j][0] = _mm512_fmadd_pd(wj, xv[kd], acc[j][0]);
                      acc[j][1] = _mm512_fmadd_pd(wj, xv[kd + 1], acc[j][1]);
                    }
                }
            }
            for (int j = 0; j < 8; ++j)
              for (int v = 0; v < 2; ++v)
                _mm512_storeu_pd(y + (((co + j) * H + h) * W * D + ww * D + d0 + v) * G + g0,
                                 acc[j][v]);
          }
#else
  conv3_lanes(xp, w, y, R, len, wstride, Co, H, W, D, G, accumulate);
#endif
}

// 1x1x1 conv over lanes.
inline void conv1_lanes(const double* x, const double* w, double* y, const double* R, int64_t len,
                        int64_t Co, int64_t vox, int G, bool accumulate) {
  for (int64_t co = 0; co < Co; ++co)
    for (int64_t v = 0; v < vox; ++v) {
      double* yrow = y + (co * vox + v) * G;
      if (!accumulate) {
        const double r = R[co * vox + v];
        for (int g = 0; g < G; ++g) yrow[g] = r;
      }
      for (int64_t ci = 0; ci < len; ++ci) {
        const double wv = w[co * len + ci];
        const double* xrow = x + (ci * vox + v) * G;
        for (int g = 0; g < G; ++g) yrow[g] += wv * xrow[g];
      }
    }
}

}  // namespace kern

// ---- the harness -------------------------------------------------------------

class LaneEvaluator {
 public:
  LaneEvaluator(Graph<double>& g, Exec<double>& base, const Tensor5<double>& target)
      : g_(g), base_(base), tgt_(target) {
    const int N = int(g.nodes.size());
    consumers_.resize(size_t(N));
    for (int id = 0; id < N; ++id)
      for (int in : g.nodes[size_t(id)].in) consumers_[size_t(in)].push_back(id);
    // reach_[m][n]: node n depends on node m
    reach_.assign(size_t(N), std::vector<char>(size_t(N), 0));
    for (int m = 0; m < N; ++m) {
      auto& r = reach_[size_t(m)];
      r[size_t(m)] = 1;
      for (int id = m; id < N; ++id)
        if (r[size_t(id)])
          for (int cons : consumers_[size_t(id)]) r[size_t(cons)] = 1;
    }
    // constant invariant part of the loss is recomputed per chunk from blocks
    base_loss_n_ = double(base_.act[size_t(g_.output)].size());
    node_seconds.assign(g.nodes.size(), 0.0);
    nslots_.resize(g.nodes.size());
    ncur_.assign(g.nodes.size(), 0);
    xpad_slots_.resize(g.nodes.size());
  }

  std::vector<double> node_seconds;  // kernel time per conv node (diagnostics)
  // aggregate time split (diagnostics): pad copies, conv kernels, pointwise
  // ops, rearranges, lane injection, loss reduction
  enum OpClock { kPad = 0, kKern, kLRelu, kAdd, kRearr, kInject, kLoss, kClocks };
  std::array<double, kClocks> op_seconds{};

  // Central finite difference at step h for params of conv node `pid`, all
  // sharing output channel co.  np <= kLanes/2.  Writes FD values to fd[0..np).
  void fd_chunk(int pid, int64_t co, const int64_t* pidx, int np, double* fd, double h) {
    h_ = h;
    const Node& nd = g_.nodes[size_t(pid)];
    const int G = kLanes;
    const int nlanes = 2 * np;
    const auto ti0 = std::chrono::steady_clock::now();

    // --- build the injected lane tensor at pid ---
    const auto& xin = base_.act[size_t(nd.in[0])];
    const auto& yout = base_.act[size_t(pid)];
    const Shape5 ys = yout.shape();
    LaneTensor inj;
    inj.C = ys.c;
    inj.H = ys.H;
    inj.W = ys.W;
    inj.D = ys.D;
    const int64_t vox = inj.vox();
    ncur_[size_t(pid)] = 0;
    auto vb = slot(pid);
    vb->v.resize(size_t(vox) * G);
    const double* ybase = yout.data() + co * vox;
    for (int64_t v = 0; v < vox; ++v) {
      const double b = ybase[v];
      for (int g = 0; g < G; ++g) vb->v[size_t(v) * G + size_t(g)] = b;
    }
    for (int j = 0; j < np; ++j) {
      const int64_t p = pidx[j];
      if (p >= nd.w_off && p < nd.w_off + nd.w_len) {
        const int64_t k3 = int64_t(nd.k) * nd.k * nd.k;
        const int64_t rest = (p - nd.w_off) % (nd.w_len / ys.c);
        const int64_t ci = rest / k3, kap = rest % k3;
        const int64_t kh = kap / (nd.k * nd.k), kw = (kap / nd.k) % nd.k, kd = kap % nd.k;
        const int pp = (nd.k - 1) / 2;
        const double* xc = xin.data() + ci * xin.shape().spatial();
        const Shape5 xs = xin.shape();
        for (int64_t hh = 0; hh < ys.H; ++hh)
          for (int64_t ww = 0; ww < ys.W; ++ww)
            for (int64_t dd = 0; dd < ys.D; ++dd) {
              const int64_t sh = hh + kh - pp, sw = ww + kw - pp, sd = dd + kd - pp;
              if (sh < 0 || sh >= xs.H || sw < 0 || sw >= xs.W || sd < 0 || sd >= xs.D) continue;
              const double dlt = h_ * xc[(sh * xs.W + sw) * xs.D + sd];
              const int64_t v = (hh * ys.W + ww) * ys.D + dd;
              vb->v[size_t(v) * G + size_t(2 * j)] += dlt;
              vb->v[size_t(v) * G + size_t(2 * j + 1)] -= dlt;
            }
      } else {  // bias
        for (int64_t v = 0; v < vox; ++v) {
          vb->v[size_t(v) * G + size_t(2 * j)] += h_;
          vb->v[size_t(v) * G + size_t(2 * j + 1)] -= h_;
        }
      }
    }
    if (co > 0) inj.blocks.push_back({0, co, false, yout.data(), nullptr});
    inj.blocks.push_back({co, 1, true, nullptr, vb});
    if (co + 1 < ys.c) inj.blocks.push_back({co + 1, ys.c - co - 1, false, ybase + vox, nullptr});
    op_seconds[kInject] +=
        std::chrono::duration<double>(std::chrono::steady_clock::now() - ti0).count();

    // --- propagate through downstream nodes (graph order is topological) ---
    lanes_.assign(g_.nodes.size(), LaneTensor{});
    lanes_[size_t(pid)] = std::move(inj);
    const auto& reach = reach_[size_t(pid)];
    for (int id = pid + 1; id < int(g_.nodes.size()); ++id)
      if (reach[size_t(id)]) eval_lane_node(id, G);

    const auto tl0 = std::chrono::steady_clock::now();
    // --- lane losses ---
    const auto& out = lanes_[size_t(g_.output)];
    double inv_sum = 0;
    std::array<double, kLanes> var_sum{};
    for (const auto& b : out.blocks) {
      if (!b.varying) {
        const double* t = tgt_.data() + b.c0 * vox_of(g_.output);
        for (int64_t i = 0, n = b.len * vox_of(g_.output); i < n; ++i)
          inv_sum += std::abs(b.inv[i] - t[i]);
      } else {
        const double* t = tgt_.data() + b.c0 * vox_of(g_.output);
        const double* v = b.var->v.data();
        for (int64_t i = 0, n = b.len * vox_of(g_.output); i < n; ++i)
          for (int l = 0; l < nlanes; ++l) var_sum[size_t(l)] += std::abs(v[i * G + l] - t[i]);
      }
    }
    for (int j = 0; j < np; ++j) {
      const double lp = (inv_sum + var_sum[size_t(2 * j)]) / base_loss_n_;
      const double lm = (inv_sum + var_sum[size_t(2 * j + 1)]) / base_loss_n_;
      fd[j] = (lp - lm) / (2 * h_);
    }
    op_seconds[kLoss] +=
        std::chrono::duration<double>(std::chrono::steady_clock::now() - tl0).count();
  }

 private:
  int64_t vox_of(int id) const {
    const Shape5 s = base_.act[size_t(id)].shape();
    return s.spatial();
  }

  // Per-node buffer pool: the same chunk-to-chunk evaluation pattern reuses
  // identically sized buffers, so allocation happens only on first touch.
  std::shared_ptr<VarBuf> slot(int id) {
    auto& v = nslots_[size_t(id)];
    size_t& c = ncur_[size_t(id)];
    if (c == v.size()) v.push_back(std::make_shared<VarBuf>());
    return v[c++];
  }

  LaneTensor invariant_of(int id) const {
    const auto& a = base_.act[size_t(id)];
    LaneTensor t;
    t.C = a.shape().c;
    t.H = a.shape().H;
    t.W = a.shape().W;
    t.D = a.shape().D;
    t.blocks.push_back({0, t.C, false, a.data(), nullptr});
    return t;
  }

  const LaneTensor& input_lane(int id) {
    if (lanes_[size_t(id)].C == 0) lanes_[size_t(id)] = invariant_of(id);
    return lanes_[size_t(id)];
  }

  void eval_lane_node(int id, int G) {
    const Node& nd = g_.nodes[size_t(id)];
    ncur_[size_t(id)] = 0;
    LaneTensor out;
    const Shape5 os = base_.act[size_t(id)].shape();
    out.C = os.c;
    out.H = os.H;
    out.W = os.W;
    out.D = os.D;
    const auto tn0 = std::chrono::steady_clock::now();
    const OpClock clk = nd.op == Op::LeakyReLU ? kLRelu
                        : nd.op == Op::Add     ? kAdd
                                               : kRearr;
    switch (nd.op) {
      case Op::Conv: {
        // If the only consumer is a LeakyReLU, apply it in the conv epilogue
        // while the output buffer is still cache-resident; the activation
        // node then just aliases the buffer.
        const auto& cons = consumers_[size_t(id)];
        const bool fuse = cons.size() == 1 && g_.nodes[size_t(cons[0])].op == Op::LeakyReLU;
        out.blocks.push_back(conv_lane(id, G, fuse, fuse ? g_.nodes[size_t(cons[0])].slope : 0.0));
        out.preactivated = fuse;
        break;
      }
      case Op::LeakyReLU: {
        const auto& in = input_lane(nd.in[0]);
        const double s = nd.slope;
        for (const auto& b : in.blocks) {
          if (!b.varying) {
            // invariant channels pass through to this node's own base slice
            out.blocks.push_back(
                {b.c0, b.len, false, base_.act[size_t(id)].data() + b.c0 * out.vox(), nullptr});
          } else if (in.preactivated) {
            out.blocks.push_back(b);
          } else {
            auto vb = slot(id);
            vb->v.resize(b.var->v.size());
            const double* x = b.var->v.data();
            double* y = vb->v.data();
            // max form so the loop vectorizes; equal to x>0 ? x : s*x for
            // 0 < s < 1
            for (size_t i = 0; i < vb->v.size(); ++i) y[i] = std::max(x[i], s * x[i]);
            out.blocks.push_back({b.c0, b.len, true, nullptr, vb});
          }
        }
        break;
      }
      case Op::Add: {
        const auto& a = input_lane(nd.in[0]);
        const auto& bb = input_lane(nd.in[1]);
        // our graphs only add whole tensors where at most the block split differs
        out.blocks = add_lane(a, bb, id, G);
        break;
      }
      case Op::ConcatC: {
        int64_t off = 0;
        for (int src : nd.in) {
          const auto& in = input_lane(src);
          for (const auto& b : in.blocks) {
            Blk nb = b;
            nb.c0 = off + b.c0;
            out.blocks.push_back(nb);
          }
          off += in.C;
        }
        break;
      }
      case Op::Unshuffle: {
        const auto& in = input_lane(nd.in[0]);
        const int r = nd.r;
        for (const auto& b : in.blocks) {
          if (!b.varying) {
            out.blocks.push_back({b.c0 * r * r * r, b.len * r * r * r, false,
                                  base_.act[size_t(id)].data() + b.c0 * r * r * r * out.vox(),
                                  nullptr});
          } else {
            auto vb = slot(id);
            vb->v.resize(size_t(b.len) * r * r * r * out.vox() * G);
            const int64_t oH = out.H, oW = out.W, oD = out.D;
            const int64_t iW = in.W, iD = in.D;
            for (int64_t c = 0; c < b.len; ++c)
              for (int dh = 0; dh < r; ++dh)
                for (int dw = 0; dw < r; ++dw)
                  for (int dd = 0; dd < r; ++dd) {
                    const int64_t oc = c * r * r * r + (int64_t(dh) * r + dw) * r + dd;
                    for (int64_t h = 0; h < oH; ++h)
                      for (int64_t w = 0; w < oW; ++w) {
                        const double* src =
                            b.var->v.data() +
                            ((c * in.H + (h * r + dh)) * iW + (w * r + dw)) * iD * G + dd * G;
                        double* dst = vb->v.data() + ((oc * oH + h) * oW + w) * oD * G;
                        for (int64_t d = 0; d < oD; ++d)
                          std::copy(src + d * r * G, src + d * r * G + G, dst + d * G);
                      }
                  }
            out.blocks.push_back({b.c0 * r * r * r, b.len * r * r * r, true, nullptr, vb});
          }
        }
        break;
      }
      case Op::Shuffle: {
        // An output channel q varies iff any source channel in [q*r^3,
        // (q+1)*r^3) varies.  A varying q is seeded from the node's own base
        // output, then only the lattice positions fed by varying source
        // channels are overwritten, so single-channel perturbations (learned
        // shuffle weights) stay single-channel after the rearrange.
        const auto& in = input_lane(nd.in[0]);
        const int r = nd.r;
        const int64_t r3 = int64_t(r) * r * r;
        const int64_t iH = in.H, iW = in.W, iD = in.D;
        const double* obase = base_.act[size_t(id)].data();
        int64_t q = 0;
        while (q < out.C) {
          bool varies = false;
          for (int64_t c = q * r3; c < (q + 1) * r3; ++c)
            if (find_blk(in, c)->varying) varies = true;
          if (!varies) {
            int64_t q1 = q + 1;
            auto group_invariant = [&](int64_t qq) {
              for (int64_t c = qq * r3; c < (qq + 1) * r3; ++c)
                if (find_blk(in, c)->varying) return false;
              return true;
            };
            while (q1 < out.C && group_invariant(q1)) ++q1;
            out.blocks.push_back({q, q1 - q, false, obase + q * out.vox(), nullptr});
            q = q1;
            continue;
          }
          auto vb = slot(id);
          vb->v.resize(size_t(out.vox()) * G);
          // broadcast the base output of channel q across lanes
          for (int64_t v = 0; v < out.vox(); ++v) {
            const double bvl = obase[q * out.vox() + v];
            for (int g = 0; g < G; ++g) vb->v[size_t(v) * G + size_t(g)] = bvl;
          }
          for (int64_t c = q * r3; c < (q + 1) * r3; ++c) {
            const Blk* sb = find_blk(in, c);
            if (!sb->varying) continue;
            const double* src = sb->var->v.data() + (c - sb->c0) * iH * iW * iD * G;
            const int64_t off = c - q * r3;
            const int dh = int(off / (r * r)), dw = int((off / r) % r), dd = int(off % r);
            for (int64_t h = 0; h < iH; ++h)
              for (int64_t w = 0; w < iW; ++w) {
                const double* srow = src + ((h * iW + w) * iD) * G;
                double* dst = vb->v.data() +
                              (((h * r + dh) * out.W + (w * r + dw)) * out.D + dd) * G;
                for (int64_t d = 0; d < iD; ++d)
                  std::copy(srow + d * G, srow + d * G + G, dst + d * r * G);
              }
          }
          out.blocks.push_back({q, 1, true, nullptr, vb});
          ++q;
        }
        break;
      }
      default:
        throw std::logic_error("lane evaluator: unsupported op in this architecture");
    }
    if (nd.op != Op::Conv && nd.op != Op::ConcatC)
      op_seconds[clk] +=
          std::chrono::duration<double>(std::chrono::steady_clock::now() - tn0).count();
    lanes_[size_t(id)] = std::move(out);
  }

  std::vector<Blk> add_lane(const LaneTensor& a, const LaneTensor& b, int id, int G) {
    std::vector<Blk> out;
    // split both partitions at common boundaries, then combine pairwise
    std::vector<int64_t> cuts{0, a.C};
    for (const auto& blk : a.blocks) cuts.push_back(blk.c0);
    for (const auto& blk : b.blocks) cuts.push_back(blk.c0);
    std::sort(cuts.begin(), cuts.end());
    cuts.erase(std::unique(cuts.begin(), cuts.end()), cuts.end());
    const int64_t vox = a.vox();
    for (size_t s = 0; s + 1 < cuts.size(); ++s) {
      const int64_t c0 = cuts[s], len = cuts[s + 1] - c0;
      const Blk* ba = find_blk(a, c0);
      const Blk* bb = find_blk(b, c0);
      if (!ba->varying && !bb->varying) {
        out.push_back({c0, len, false, base_.act[size_t(id)].data() + c0 * vox, nullptr});
        continue;
      }
      auto vb = slot(id);
      vb->v.resize(size_t(len) * vox * G);
      double* dst = vb->v.data();
      if (ba->varying && bb->varying) {
        const double* sa = ba->var->v.data() + (c0 - ba->c0) * vox * G;
        const double* sb = bb->var->v.data() + (c0 - bb->c0) * vox * G;
        for (int64_t i = 0, n = len * vox * G; i < n; ++i) dst[i] = sa[i] + sb[i];
      } else {
        const Blk* bv = ba->varying ? ba : bb;
        const Blk* bi = ba->varying ? bb : ba;
        const double* sv = bv->var->v.data() + (c0 - bv->c0) * vox * G;
        const double* si = bi->inv + (c0 - bi->c0) * vox;
        for (int64_t i = 0, n = len * vox; i < n; ++i) {
          const double v = si[i];
          for (int g = 0; g < G; ++g) dst[i * G + g] = sv[i * G + g] + v;
        }
      }
      out.push_back({c0, len, true, nullptr, vb});
    }
    return out;
  }

  static const Blk* find_blk(const LaneTensor& t, int64_t c) {
    for (const auto& b : t.blocks)
      if (c >= b.c0 && c < b.c0 + b.len) return &b;
    throw std::logic_error("lane block lookup failed");
  }

  // Conv over a block-structured input: fold invariant channels into a cached
  // per-voxel offset, run the lane kernel over varying channels.  With
  // fuse_act the trailing LeakyReLU is applied in place on the fresh output.
  Blk conv_lane(int id, int G, bool fuse_act = false, double slope = 0.0) {
    const Node& nd = g_.nodes[size_t(id)];
    // No block merging here: padding, weight gathering and the R precompute
    // all walk the block list channel by channel, so the input can stay in
    // the producers' buffers.
    const LaneTensor& in = input_lane(nd.in[0]);
    const auto& xs = base_.act[size_t(nd.in[0])].shape();
    const auto& ys = base_.act[size_t(id)].shape();
    const int64_t vox = ys.spatial();
    const int64_t Ci = xs.c, Co = ys.c;
    int64_t vlen = 0;
    for (const auto& b : in.blocks)
      if (b.varying) vlen += b.len;

    // R = base_out - conv(varying base channels), plus the matching weight
    // columns.  Both depend only on this conv and the varying-channel pattern
    // of its input (base activations and weights are fixed for the whole
    // check), so they are cached across chunks.  When every input channel
    // varies the invariant part is just the bias.
    std::string key = "R" + std::to_string(id) + ":";
    {
      // coalesce adjacent varying blocks so the key names the channel
      // pattern, not the block structure
      int64_t span0 = -1, spanlen = 0;
      for (const auto& b : in.blocks) {
        if (b.varying) {
          if (span0 < 0) span0 = b.c0;
          spanlen += b.len;
        } else if (span0 >= 0) {
          key += std::to_string(span0) + "+" + std::to_string(spanlen) + ",";
          span0 = -1;
          spanlen = 0;
        }
      }
      if (span0 >= 0) key += std::to_string(span0) + "+" + std::to_string(spanlen) + ",";
    }
    auto rit = rcache_.find(key);
    if (rit == rcache_.end()) {
      ConvCache cc;
      cc.R.resize(size_t(Co) * vox);
      cc.w.resize(size_t(Co) * vlen * nd.k * nd.k * nd.k);
      int64_t voff = 0;
      for (const auto& b : in.blocks) {
        if (!b.varying) continue;
        for (int64_t co = 0; co < Co; ++co)
          std::copy(g_.params.data() + nd.w_off + (co * Ci + b.c0) * nd.k * nd.k * nd.k,
                    g_.params.data() + nd.w_off + (co * Ci + b.c0 + b.len) * nd.k * nd.k * nd.k,
                    cc.w.begin() + (co * vlen + voff) * nd.k * nd.k * nd.k);
        voff += b.len;
      }
      if (vlen == Ci) {
        for (int64_t co = 0; co < Co; ++co)
          std::fill(cc.R.begin() + co * vox, cc.R.begin() + (co + 1) * vox,
                    g_.params[size_t(nd.b_off + co)]);
      } else {
        Tensor5<double> xv(1, vlen, xs.H, xs.W, xs.D);
        gather_varying(in, nd, Ci, xv.data());
        Tensor5<double> yv;
        sunet::ConvScratch<double> scratch;
        sunet::conv3d_forward(xv, cc.w.data(), static_cast<const double*>(nullptr), int(Co), nd.k,
                              yv, scratch);
        const double* yb = base_.act[size_t(id)].data();
        for (int64_t i = 0; i < int64_t(cc.R.size()); ++i) cc.R[size_t(i)] = yb[i] - yv.data()[i];
      }
      rit = rcache_.emplace(std::move(key), std::move(cc)).first;
    }
    const std::vector<double>& R = rit->second.R;
    const std::vector<double>& wv = rit->second.w;
    Blk outb{0, Co, true, nullptr, slot(id)};
    outb.var->v.resize(size_t(Co) * vox * G);
    if (vlen == 0) throw std::logic_error("conv_lane called with no varying input");

    const auto tk0 = std::chrono::steady_clock::now();
    if (nd.k == 3) {
      // Pad and convolve in input-channel blocks of 4: the freshly written
      // 4-channel padded slice stays L2-resident for the kernel call that
      // immediately consumes it.  The pooled pad buffer holds one block; its
      // zero halo written on first use survives later chunks because only the
      // interior is rewritten.
      const int64_t chvox = (xs.H + 2) * (xs.W + 2) * (xs.D + 2) * G;
      const int64_t blk = std::min<int64_t>(vlen, 4);
      Avec& xp = xpad_slots_[size_t(id)];
      const size_t need = size_t(blk) * chvox;
      const bool rezero = xp.size() != need;
      xp.resize(need);
      if (rezero) xp.zero();
      // flatten varying channels into (source pointer) order once
      srcs_.clear();
      for (const auto& b : in.blocks) {
        if (!b.varying) continue;
        for (int64_t cc = 0; cc < b.len; ++cc)
          srcs_.push_back(b.var->v.data() + cc * xs.spatial() * G);
      }
      const bool fast = Co % 8 == 0 && ys.D % 2 == 0;
      for (int64_t c0 = 0; c0 < vlen; c0 += blk) {
        const int64_t bl = std::min<int64_t>(blk, vlen - c0);
        const auto tp0 = std::chrono::steady_clock::now();
        for (int64_t cc = 0; cc < bl; ++cc) {
          const double* src = srcs_[size_t(c0 + cc)];
          double* dst = xp.data() + cc * chvox;
          for (int64_t h = 0; h < xs.H; ++h)
            for (int64_t w = 0; w < xs.W; ++w)
              std::copy(src + (h * xs.W + w) * xs.D * G, src + (h * xs.W + w + 1) * xs.D * G,
                        dst + (((h + 1) * (xs.W + 2) + (w + 1)) * (xs.D + 2) + 1) * G);
        }
        const auto tp1 = std::chrono::steady_clock::now();
        if (fast)
          kern::conv3_lanes_b82(xp.data(), wv.data() + c0 * 27, outb.var->v.data(), R.data(), bl,
                                vlen, Co, ys.H, ys.W, ys.D, G, c0 != 0);
        else
          kern::conv3_lanes(xp.data(), wv.data() + c0 * 27, outb.var->v.data(), R.data(), bl,
                            vlen, Co, ys.H, ys.W, ys.D, G, c0 != 0);
        op_seconds[kPad] += std::chrono::duration<double>(tp1 - tp0).count();
        op_seconds[kKern] +=
            std::chrono::duration<double>(std::chrono::steady_clock::now() - tp1).count();
      }
    } else {
      Avec& xg = xpad_slots_[size_t(id)];
      xg.resize(size_t(vlen) * vox * G);
      int64_t c = 0;
      for (const auto& b : in.blocks) {
        if (!b.varying) continue;
        std::copy(b.var->v.data(), b.var->v.data() + b.var->v.size(), xg.data() + c * vox * G);
        c += b.len;
      }
      kern::conv1_lanes(xg.data(), wv.data(), outb.var->v.data(), R.data(), vlen, Co, vox, G,
                        false);
    }
    if (fuse_act) {
      const auto ta0 = std::chrono::steady_clock::now();
      double* y = outb.var->v.data();
      const int64_t n = int64_t(outb.var->v.size());
      // max form so the loop vectorizes; equal to y>0 ? y : s*y for 0 < s < 1
      for (int64_t i = 0; i < n; ++i) y[i] = std::max(y[i], slope * y[i]);
      op_seconds[kLRelu] +=
          std::chrono::duration<double>(std::chrono::steady_clock::now() - ta0).count();
    }
    node_seconds[size_t(id)] +=
        std::chrono::duration<double>(std::chrono::steady_clock::now() - tk0).count();
    return outb;
  }

  // Collect varying channel slices (from base activations) for the R
  // precompute.
  void gather_varying(const LaneTensor& in, const Node& nd, int64_t Ci, double* xv) {
    (void)Ci;
    const auto& xbase = base_.act[size_t(nd.in[0])];
    const int64_t vox = xbase.shape().spatial();
    int64_t off = 0;
    for (const auto& b : in.blocks) {
      if (!b.varying) continue;
      std::copy(xbase.data() + b.c0 * vox, xbase.data() + (b.c0 + b.len) * vox, xv + off * vox);
      off += b.len;
    }
  }

  Graph<double>& g_;
  Exec<double>& base_;
  const Tensor5<double>& tgt_;
  double h_ = 1e-5;
  double base_loss_n_ = 1;
  std::vector<std::vector<int>> consumers_;
  std::vector<std::vector<char>> reach_;
  std::vector<LaneTensor> lanes_;
  struct ConvCache {
    std::vector<double> R, w;
  };
  std::map<std::string, ConvCache> rcache_;
  std::vector<const double*> srcs_;
  std::vector<std::vector<std::shared_ptr<VarBuf>>> nslots_;
  std::vector<size_t> ncur_;
  std::vector<Avec> xpad_slots_;
};

struct FdResult {
  double max_rel = 0;
  int64_t params_checked = 0;
  int64_t kink_refined = 0;  // params re-checked at a smaller step
  int64_t worst_param = -1;
  double worst_fd = 0, worst_an = 0;
  std::vector<std::pair<std::string, double>> node_profile;        // conv seconds
  std::array<double, LaneEvaluator::kClocks> op_seconds{};         // time split
};

// Runs the full check: analytic gradients from one backward pass, then
// chunked central differences over every parameter.
//
// The relative error is |fd - an| / max(|an|, |fd|, floor).  Between LReLU
// kink crossings the network output is piecewise linear in any single
// parameter, so central differences carry no truncation term; the residual
// noise is the roundoff of differencing two O(1) losses, about eps*L/(2h)
// ~ 1e-11 at h = 1e-5.  The floor of 1e-6 turns the 1e-3 relative bound into
// an absolute bound of 1e-9 for near-zero gradients - two orders above the
// roundoff floor, four below any genuine gradient defect.
//
// A handful of parameters out of ~3e5 will straddle an LReLU kink at the
// coarse step, where a central difference measures the average of two
// different one-sided slopes rather than the derivative.  Those are re-run
// at h_fine: a kink artifact shrinks with the interval while a genuine
// gradient defect is step-invariant, so the refinement never masks a bug.
inline FdResult fd_check_all(Graph<double>& g, const Tensor5<double>& x,
                             const Tensor5<double>& tgt, double h = 1e-5,
                             double denom_floor = 1e-6, double h_fine = 1e-7) {
  Exec<double> e;
  auto& y = sunet::forward(g, x, e, true);
  e.grad.assign(g.nodes.size(), Tensor5<double>());
  e.pgrad.assign(g.params.size(), 0.0);
  e.grad[size_t(g.output)].resize(y.shape());
  {
    const int64_t n = y.size();
    for (int64_t i = 0; i < n; ++i) {
      const double d = y.data()[i] - tgt.data()[i];
      e.grad[size_t(g.output)].data()[i] = (d > 0 ? 1.0 : d < 0 ? -1.0 : 0.0) / double(n);
    }
  }
  sunet::backward(g, e);

  LaneEvaluator ev(g, e, tgt);
  FdResult res;
  std::array<int64_t, kLanes / 2> pidx;
  std::array<double, kLanes / 2> fd;
  struct Suspect {
    int id;
    int64_t co, p;
  };
  std::vector<Suspect> suspects;
  auto rel_of = [&](double fdv, double an) {
    return std::abs(fdv - an) / std::max({std::abs(an), std::abs(fdv), denom_floor});
  };
  const double retry_at = 1e-4;  // well under tolerance; everything above gets refined
  for (int id = 0; id < int(g.nodes.size()); ++id) {
    const Node& nd = g.nodes[size_t(id)];
    if (nd.op != Op::Conv) continue;
    const int64_t Co = nd.c_out;
    const int64_t wper = nd.w_len / Co;
    for (int64_t co = 0; co < Co; ++co) {
      // weights of this output channel, then its bias
      std::vector<int64_t> params;
      params.reserve(size_t(wper) + 1);
      for (int64_t i = 0; i < wper; ++i) params.push_back(nd.w_off + co * wper + i);
      params.push_back(nd.b_off + co);
      for (size_t q = 0; q < params.size(); q += kLanes / 2) {
        const int np = int(std::min<size_t>(kLanes / 2, params.size() - q));
        for (int j = 0; j < np; ++j) pidx[size_t(j)] = params[q + size_t(j)];
        ev.fd_chunk(id, co, pidx.data(), np, fd.data(), h);
        for (int j = 0; j < np; ++j) {
          const double an = e.pgrad[size_t(pidx[size_t(j)])];
          const double rel = rel_of(fd[size_t(j)], an);
          if (rel > retry_at) {
            suspects.push_back({id, co, pidx[size_t(j)]});
            continue;
          }
          if (rel > res.max_rel) {
            res.max_rel = rel;
            res.worst_param = pidx[size_t(j)];
            res.worst_fd = fd[size_t(j)];
            res.worst_an = an;
          }
          ++res.params_checked;
        }
      }
    }
  }
  for (const Suspect& s : suspects) {
    double fdv = 0;
    ev.fd_chunk(s.id, s.co, &s.p, 1, &fdv, h_fine);
    const double an = e.pgrad[size_t(s.p)];
    const double rel = rel_of(fdv, an);
    if (rel > res.max_rel) {
      res.max_rel = rel;
      res.worst_param = s.p;
      res.worst_fd = fdv;
      res.worst_an = an;
    }
    ++res.params_checked;
    ++res.kink_refined;
  }
  for (int id = 0; id < int(g.nodes.size()); ++id)
    if (ev.node_seconds[size_t(id)] > 0)
      res.node_profile.emplace_back(g.nodes[size_t(id)].name, ev.node_seconds[size_t(id)]);
  res.op_seconds = ev.op_seconds;
  return res;
}

}  // namespace fdcheck
