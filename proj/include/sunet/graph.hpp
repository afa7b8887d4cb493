#pragma once

// Static computation graph: a flat list of nodes evaluated in build order,
// walked in reverse for gradients.  Parameters live in one flat vector so
// optimizers and checkpoints can treat them uniformly.
//
// Two forward modes:
//   * forward()            keeps every activation (training / gradient work),
//   * forward_streaming()  evaluates one batch item at a time and releases
//     activations as their last consumer finishes - this is what makes
//     full-resolution inference fit in memory.

#include <cstdint>
#include <string>
#include <vector>

#include "conv.hpp"
#include "core.hpp"
#include "shuffle.hpp"

namespace sunet {

enum class Op {
  Input,
  Conv,        // k in {1,3}, stride 1, same-size
  LeakyReLU,
  ReLU,
  Add,
  ConcatC,     // channel concatenation
  Unshuffle,   // pixel_unshuffle(r)
  Shuffle,     // pixel_shuffle(r)
  MaxPool2,    // 2x2x2, stride 2
  BatchNorm,
};

struct Node {
  Op op{};
  std::vector<int> in;   // producer node ids
  std::string name;
  int c_out = 0;         // channels this node emits
  int k = 0;             // conv kernel size
  int r = 2;             // shuffle factor
  double slope = 0.01;   // leaky slope
  // flat parameter slots (conv: weights+bias; batchnorm: gamma+beta)
  int64_t w_off = -1, w_len = 0, b_off = -1, b_len = 0;
  // batchnorm running stats live in Graph::state at this offset (mean, var)
  int64_t s_off = -1;
};

template <class T>
struct Graph {
  std::vector<Node> nodes;
  std::vector<T> params;
  std::vector<T> state;      // batchnorm running statistics
  int output = -1;
  double bn_eps = 1e-5, bn_momentum = 0.1;

  int add_input(int c, std::string name = "input") {
    Node n;
    n.op = Op::Input;
    n.c_out = c;
    n.name = std::move(name);
    nodes.push_back(std::move(n));
    return int(nodes.size()) - 1;
  }

  int add_conv(int in, int co, int k, std::string name) {
    Node n;
    n.op = Op::Conv;
    n.in = {in};
    n.c_out = co;
    n.k = k;
    n.name = std::move(name);
    const int64_t ci = nodes[size_t(in)].c_out;
    n.w_off = int64_t(params.size());
    n.w_len = int64_t(co) * ci * k * k * k;
    params.resize(params.size() + size_t(n.w_len));
    n.b_off = int64_t(params.size());
    n.b_len = co;
    params.resize(params.size() + size_t(co));
    nodes.push_back(std::move(n));
    return int(nodes.size()) - 1;
  }

  int add_lrelu(int in, double slope, std::string name) {
    Node n;
    n.op = Op::LeakyReLU;
    n.in = {in};
    n.c_out = nodes[size_t(in)].c_out;
    n.slope = slope;
    n.name = std::move(name);
    nodes.push_back(std::move(n));
    return int(nodes.size()) - 1;
  }

  int add_relu(int in, std::string name) {
    Node n;
    n.op = Op::ReLU;
    n.in = {in};
    n.c_out = nodes[size_t(in)].c_out;
    n.name = std::move(name);
    nodes.push_back(std::move(n));
    return int(nodes.size()) - 1;
  }

  int add_add(int a, int b, std::string name) {
    require(nodes[size_t(a)].c_out == nodes[size_t(b)].c_out, "add: channel mismatch at " + name);
    Node n;
    n.op = Op::Add;
    n.in = {a, b};
    n.c_out = nodes[size_t(a)].c_out;
    n.name = std::move(name);
    nodes.push_back(std::move(n));
    return int(nodes.size()) - 1;
  }

  int add_concat(std::vector<int> ins, std::string name) {
    Node n;
    n.op = Op::ConcatC;
    n.in = std::move(ins);
    n.c_out = 0;
    for (int i : n.in) n.c_out += nodes[size_t(i)].c_out;
    n.name = std::move(name);
    nodes.push_back(std::move(n));
    return int(nodes.size()) - 1;
  }

  int add_unshuffle(int in, int r, std::string name) {
    Node n;
    n.op = Op::Unshuffle;
    n.in = {in};
    n.r = r;
    n.c_out = nodes[size_t(in)].c_out * r * r * r;
    n.name = std::move(name);
    nodes.push_back(std::move(n));
    return int(nodes.size()) - 1;
  }

  int add_shuffle(int in, int r, std::string name) {
    const int r3 = r * r * r;
    require(nodes[size_t(in)].c_out % r3 == 0, "shuffle: channels not divisible at " + name);
    Node n;
    n.op = Op::Shuffle;
    n.in = {in};
    n.r = r;
    n.c_out = nodes[size_t(in)].c_out / r3;
    n.name = std::move(name);
    nodes.push_back(std::move(n));
    return int(nodes.size()) - 1;
  }

  int add_maxpool2(int in, std::string name) {
    Node n;
    n.op = Op::MaxPool2;
    n.in = {in};
    n.c_out = nodes[size_t(in)].c_out;
    n.name = std::move(name);
    nodes.push_back(std::move(n));
    return int(nodes.size()) - 1;
  }

  int add_batchnorm(int in, std::string name) {
    Node n;
    n.op = Op::BatchNorm;
    n.in = {in};
    n.c_out = nodes[size_t(in)].c_out;
    n.name = std::move(name);
    const int c = n.c_out;
    n.w_off = int64_t(params.size());   // gamma
    n.w_len = c;
    params.resize(params.size() + size_t(c), T(1));
    n.b_off = int64_t(params.size());   // beta
    n.b_len = c;
    params.resize(params.size() + size_t(c), T(0));
    n.s_off = int64_t(state.size());    // running mean, then running var
    state.resize(state.size() + size_t(2 * c), T(0));
    for (int i = 0; i < c; ++i) state[size_t(n.s_off) + size_t(c) + size_t(i)] = T(1);
    nodes.push_back(std::move(n));
    return int(nodes.size()) - 1;
  }

  const Node* find(const std::string& name) const {
    for (const auto& n : nodes)
      if (n.name == name) return &n;
    return nullptr;
  }

  int64_t param_count() const { return int64_t(params.size()); }
};

template <class T>
struct Exec {
  std::vector<Tensor5<T>> act;              // node outputs
  std::vector<Tensor5<T>> grad;             // gradients w.r.t. node outputs
  std::vector<T> pgrad;                     // flat parameter gradients
  std::vector<std::vector<int32_t>> argmax; // maxpool routing
  std::vector<std::vector<T>> bn_stat;      // per-node saved (mean, invstd) in train mode
  std::vector<Shape5> shapes;               // recorded even when streaming
  ConvScratch<T> scratch;
  bool training = false;
};

namespace detail {

template <class T>
void eval_node(const Graph<T>& g, Graph<T>* gmut, int id, const std::vector<Tensor5<T>>& act,
               Tensor5<T>& out, Exec<T>& e) {
  const Node& nd = g.nodes[size_t(id)];
  const auto& in0 = act[size_t(nd.in.empty() ? 0 : nd.in[0])];
  switch (nd.op) {
    case Op::Input:
      break;
    case Op::Conv:
      conv3d_forward(in0, g.params.data() + nd.w_off, g.params.data() + nd.b_off, nd.c_out, nd.k,
                     out, e.scratch);
      break;
    case Op::LeakyReLU: {
      out.resize(in0.shape());
      const T s = T(nd.slope);
      const T* x = in0.data();
      T* y = out.data();
      for (int64_t i = 0, n = in0.size(); i < n; ++i) y[i] = x[i] > T(0) ? x[i] : s * x[i];
      break;
    }
    case Op::ReLU: {
      out.resize(in0.shape());
      const T* x = in0.data();
      T* y = out.data();
      for (int64_t i = 0, n = in0.size(); i < n; ++i) y[i] = x[i] > T(0) ? x[i] : T(0);
      break;
    }
    case Op::Add: {
      const auto& b = act[size_t(nd.in[1])];
      require(in0.shape() == b.shape(), "add: shape mismatch at " + nd.name);
      out.resize(in0.shape());
      const T* xa = in0.data();
      const T* xb = b.data();
      T* y = out.data();
      for (int64_t i = 0, n = in0.size(); i < n; ++i) y[i] = xa[i] + xb[i];
      break;
    }
    case Op::ConcatC: {
      Shape5 s = in0.shape();
      s.c = nd.c_out;
      out.resize(s);
      int64_t off = 0;
      for (int src : nd.in) {
        const auto& t = act[size_t(src)];
        require(t.shape().H == s.H && t.shape().W == s.W && t.shape().D == s.D && t.shape().n == s.n,
                "concat: spatial/batch mismatch at " + nd.name);
        for (int64_t n = 0; n < s.n; ++n)
          std::copy(t.data() + n * t.shape().c * s.spatial(),
                    t.data() + (n + 1) * t.shape().c * s.spatial(),
                    out.data() + (n * s.c + off) * s.spatial());
        off += t.shape().c;
      }
      break;
    }
    case Op::Unshuffle:
      out = pixel_unshuffle(in0, nd.r);
      break;
    case Op::Shuffle:
      out = pixel_shuffle(in0, nd.r);
      break;
    case Op::MaxPool2: {
      const Shape5 s = in0.shape();
      require(s.H % 2 == 0 && s.W % 2 == 0 && s.D % 2 == 0,
              "maxpool: odd spatial dims at " + nd.name + " " + s.str());
      out.resize({s.n, s.c, s.H / 2, s.W / 2, s.D / 2});
      auto& amax = e.argmax[size_t(id)];
      if (e.training) amax.assign(size_t(out.size()), 0);
      const T* x = in0.data();
      T* y = out.data();
      int64_t o = 0;
      for (int64_t n = 0; n < s.n; ++n)
        for (int64_t c = 0; c < s.c; ++c) {
          const T* xc = x + (n * s.c + c) * s.spatial();
          for (int64_t h = 0; h < s.H; h += 2)
            for (int64_t w = 0; w < s.W; w += 2)
              for (int64_t d = 0; d < s.D; d += 2, ++o) {
                T best = xc[(h * s.W + w) * s.D + d];
                int32_t bi = int32_t((h * s.W + w) * s.D + d);
                for (int dh = 0; dh < 2; ++dh)
                  for (int dw = 0; dw < 2; ++dw)
                    for (int dd = 0; dd < 2; ++dd) {
                      const int64_t i = ((h + dh) * s.W + (w + dw)) * s.D + (d + dd);
                      if (xc[i] > best) {
                        best = xc[i];
                        bi = int32_t(i);
                      }
                    }
                y[o] = best;
                if (e.training) amax[size_t(o)] = bi;
              }
        }
      break;
    }
    case Op::BatchNorm: {
      const Shape5 s = in0.shape();
      out.resize(s);
      const int64_t C = s.c, NV = s.n * s.spatial();
      const T* gamma = g.params.data() + nd.w_off;
      const T* beta = g.params.data() + nd.b_off;
      const T* x = in0.data();
      T* y = out.data();
      if (e.training) {
        auto& st = e.bn_stat[size_t(id)];
        st.assign(size_t(2 * C), T(0));
        for (int64_t c = 0; c < C; ++c) {
          double mean = 0, var = 0;
          for (int64_t n = 0; n < s.n; ++n) {
            const T* xc = x + (n * C + c) * s.spatial();
            for (int64_t v = 0; v < s.spatial(); ++v) mean += double(xc[v]);
          }
          mean /= double(NV);
          for (int64_t n = 0; n < s.n; ++n) {
            const T* xc = x + (n * C + c) * s.spatial();
            for (int64_t v = 0; v < s.spatial(); ++v) {
              const double dv = double(xc[v]) - mean;
              var += dv * dv;
            }
          }
          var /= double(NV);
          const double invstd = 1.0 / std::sqrt(var + g.bn_eps);
          st[size_t(c)] = T(mean);
          st[size_t(C + c)] = T(invstd);
          if (gmut) {
            T* rm = gmut->state.data() + nd.s_off;
            T* rv = rm + C;
            const double unbias = NV > 1 ? double(NV) / double(NV - 1) : 1.0;
            rm[c] = T((1 - g.bn_momentum) * double(rm[c]) + g.bn_momentum * mean);
            rv[c] = T((1 - g.bn_momentum) * double(rv[c]) + g.bn_momentum * var * unbias);
          }
          for (int64_t n = 0; n < s.n; ++n) {
            const T* xc = x + (n * C + c) * s.spatial();
            T* yc = y + (n * C + c) * s.spatial();
            for (int64_t v = 0; v < s.spatial(); ++v)
              yc[v] = T((double(xc[v]) - mean) * invstd * double(gamma[c]) + double(beta[c]));
          }
        }
      } else {
        const T* rm = g.state.data() + nd.s_off;
        const T* rv = rm + C;
        for (int64_t c = 0; c < C; ++c) {
          const double invstd = 1.0 / std::sqrt(double(rv[c]) + g.bn_eps);
          for (int64_t n = 0; n < s.n; ++n) {
            const T* xc = x + (n * C + c) * s.spatial();
            T* yc = y + (n * C + c) * s.spatial();
            for (int64_t v = 0; v < s.spatial(); ++v)
              yc[v] = T((double(xc[v]) - double(rm[c])) * invstd * double(gamma[c]) + double(beta[c]));
          }
        }
      }
      break;
    }
  }
}

}  // namespace detail

// Full forward keeping all activations.  When `training` is true batchnorm
// running statistics in `g` are updated.
template <class T>
Tensor5<T>& forward(Graph<T>& g, const Tensor5<T>& x, Exec<T>& e, bool training) {
  const int N = int(g.nodes.size());
  e.training = training;
  e.act.resize(size_t(N));
  e.argmax.resize(size_t(N));
  e.bn_stat.resize(size_t(N));
  e.shapes.assign(size_t(N), {});
  require(g.nodes[0].op == Op::Input, "graph: node 0 must be the input");
  require(x.shape().c == g.nodes[0].c_out,
          "graph: input channels " + std::to_string(x.shape().c) + " != " +
              std::to_string(g.nodes[0].c_out));
  e.act[0] = x;
  e.shapes[0] = x.shape();
  for (int id = 1; id < N; ++id) {
    detail::eval_node(g, training ? &g : nullptr, id, e.act, e.act[size_t(id)], e);
    e.shapes[size_t(id)] = e.act[size_t(id)].shape();
  }
  return e.act[size_t(g.output)];
}

// Memory-lean forward: one batch item at a time, activations freed once their
// last consumer has run.  Batchnorm uses running statistics (inference mode).
template <class T>
void forward_streaming(Graph<T>& g, const Tensor5<T>& x, Exec<T>& e, Tensor5<T>& y) {
  const int N = int(g.nodes.size());
  e.training = false;
  e.act.resize(size_t(N));
  e.argmax.resize(size_t(N));
  e.bn_stat.resize(size_t(N));
  e.shapes.assign(size_t(N), {});
  std::vector<int> uses(size_t(N), 0);
  for (const auto& nd : g.nodes)
    for (int i : nd.in) ++uses[size_t(i)];
  ++uses[size_t(g.output)];
  const Shape5 xs = x.shape();
  require(xs.c == g.nodes[0].c_out, "graph: input channel mismatch");
  for (int64_t n = 0; n < xs.n; ++n) {
    std::vector<int> left = uses;
    Tensor5<T> xi(1, xs.c, xs.H, xs.W, xs.D);
    std::copy(x.data() + n * xi.size(), x.data() + (n + 1) * xi.size(), xi.data());
    e.act[0] = std::move(xi);
    for (int id = 1; id < N; ++id) {
      detail::eval_node(g, static_cast<Graph<T>*>(nullptr), id, e.act, e.act[size_t(id)], e);
      e.shapes[size_t(id)] = e.act[size_t(id)].shape();
      e.shapes[size_t(id)].n = xs.n;
      for (int i : g.nodes[size_t(id)].in)
        if (--left[size_t(i)] == 0) e.act[size_t(i)] = Tensor5<T>();
    }
    auto& out = e.act[size_t(g.output)];
    if (n == 0) y.resize({xs.n, out.shape().c, out.shape().H, out.shape().W, out.shape().D});
    std::copy(out.data(), out.data() + out.size(), y.data() + n * out.size());
    e.act[size_t(g.output)] = Tensor5<T>();
  }
  e.shapes[0] = xs;
}

// Reverse pass.  `e` must hold activations from a forward(training=true) call
// and `e.grad[g.output]` the loss gradient; fills e.pgrad (accumulating).
template <class T>
void backward(const Graph<T>& g, Exec<T>& e) {
  const int N = int(g.nodes.size());
  e.grad.resize(size_t(N));
  e.pgrad.resize(g.params.size(), T(0));
  for (int id = 0; id < N; ++id)
    if (id != g.output && e.act[size_t(id)].size() > 0)
      e.grad[size_t(id)].resize(e.act[size_t(id)].shape());  // resize zero-fills
  Tensor5<T> tmp;
  for (int id = N - 1; id >= 1; --id) {
    const Node& nd = g.nodes[size_t(id)];
    Tensor5<T>& gy = e.grad[size_t(id)];
    if (gy.size() == 0) continue;
    switch (nd.op) {
      case Op::Input:
        break;
      case Op::Conv: {
        const auto& xin = e.act[size_t(nd.in[0])];
        conv3d_backward_weights(xin, gy, nd.k, e.pgrad.data() + nd.w_off,
                                e.pgrad.data() + nd.b_off, e.scratch);
        conv3d_backward_data(gy, g.params.data() + nd.w_off, int(xin.shape().c), nd.k, tmp,
                             e.scratch);
        T* gx = e.grad[size_t(nd.in[0])].data();
        const T* t = tmp.data();
        for (int64_t i = 0, n = tmp.size(); i < n; ++i) gx[i] += t[i];
        break;
      }
      case Op::LeakyReLU: {
        const auto& xin = e.act[size_t(nd.in[0])];
        T* gx = e.grad[size_t(nd.in[0])].data();
        const T* x = xin.data();
        const T* gyp = gy.data();
        const T s = T(nd.slope);
        for (int64_t i = 0, n = xin.size(); i < n; ++i)
          gx[i] += x[i] > T(0) ? gyp[i] : s * gyp[i];
        break;
      }
      case Op::ReLU: {
        const auto& xin = e.act[size_t(nd.in[0])];
        T* gx = e.grad[size_t(nd.in[0])].data();
        const T* x = xin.data();
        const T* gyp = gy.data();
        for (int64_t i = 0, n = xin.size(); i < n; ++i) gx[i] += x[i] > T(0) ? gyp[i] : T(0);
        break;
      }
      case Op::Add:
        for (int pi = 0; pi < 2; ++pi) {
          T* gx = e.grad[size_t(nd.in[size_t(pi)])].data();
          const T* gyp = gy.data();
          for (int64_t i = 0, n = gy.size(); i < n; ++i) gx[i] += gyp[i];
        }
        break;
      case Op::ConcatC: {
        const Shape5 s = gy.shape();
        int64_t off = 0;
        for (int src : nd.in) {
          auto& gx = e.grad[size_t(src)];
          const int64_t cs = gx.shape().c;
          for (int64_t n = 0; n < s.n; ++n) {
            const T* gp = gy.data() + (n * s.c + off) * s.spatial();
            T* xp = gx.data() + n * cs * s.spatial();
            for (int64_t i = 0, m = cs * s.spatial(); i < m; ++i) xp[i] += gp[i];
          }
          off += cs;
        }
        break;
      }
      case Op::Unshuffle: {
        auto back = pixel_shuffle(gy, nd.r);
        T* gx = e.grad[size_t(nd.in[0])].data();
        const T* t = back.data();
        for (int64_t i = 0, n = back.size(); i < n; ++i) gx[i] += t[i];
        break;
      }
      case Op::Shuffle: {
        auto back = pixel_unshuffle(gy, nd.r);
        T* gx = e.grad[size_t(nd.in[0])].data();
        const T* t = back.data();
        for (int64_t i = 0, n = back.size(); i < n; ++i) gx[i] += t[i];
        break;
      }
      case Op::MaxPool2: {
        const auto& amax = e.argmax[size_t(id)];
        const Shape5 s = e.act[size_t(nd.in[0])].shape();
        T* gx = e.grad[size_t(nd.in[0])].data();
        const T* gyp = gy.data();
        int64_t o = 0;
        for (int64_t n = 0; n < s.n; ++n)
          for (int64_t c = 0; c < s.c; ++c) {
            T* gxc = gx + (n * s.c + c) * s.spatial();
            const int64_t blk = gy.shape().spatial();
            for (int64_t v = 0; v < blk; ++v, ++o) gxc[amax[size_t(o)]] += gyp[o];
          }
        break;
      }
      case Op::BatchNorm: {
        const auto& xin = e.act[size_t(nd.in[0])];
        const Shape5 s = xin.shape();
        const int64_t C = s.c, NV = s.n * s.spatial();
        const auto& st = e.bn_stat[size_t(id)];
        const T* gamma = g.params.data() + nd.w_off;
        T* ggamma = e.pgrad.data() + nd.w_off;
        T* gbeta = e.pgrad.data() + nd.b_off;
        T* gx = e.grad[size_t(nd.in[0])].data();
        const T* x = xin.data();
        const T* gyp = gy.data();
        for (int64_t c = 0; c < C; ++c) {
          const double mean = double(st[size_t(c)]), invstd = double(st[size_t(C + c)]);
          double sg = 0, sgx = 0;
          for (int64_t n = 0; n < s.n; ++n) {
            const int64_t base = (n * C + c) * s.spatial();
            for (int64_t v = 0; v < s.spatial(); ++v) {
              const double xh = (double(x[base + v]) - mean) * invstd;
              sg += double(gyp[base + v]);
              sgx += double(gyp[base + v]) * xh;
            }
          }
          ggamma[c] += T(sgx);
          gbeta[c] += T(sg);
          const double k1 = sg / double(NV), k2 = sgx / double(NV);
          for (int64_t n = 0; n < s.n; ++n) {
            const int64_t base = (n * C + c) * s.spatial();
            for (int64_t v = 0; v < s.spatial(); ++v) {
              const double xh = (double(x[base + v]) - mean) * invstd;
              gx[base + v] +=
                  T(double(gamma[c]) * invstd * (double(gyp[base + v]) - k1 - xh * k2));
            }
          }
        }
        break;
      }
    }
  }
}

}  // namespace sunet
