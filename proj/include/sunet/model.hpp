#pragma once

// ShuffleUNet assembly.
//
// Contraction level l (filters F_l = base_filters * 2^(l-1)):
//   double conv      : conv(C_in -> F_l), conv(F_l -> F_l), leaky after each
//   conv decomposition: four independent conv(F_l -> F_l) branches a1..a4
//   learned unshuffle : conv(F_l -> F_l) then pixel_unshuffle(2)  -> 8*F_l channels
// The branches a1..a3 skip straight to the matching expansion block; a4 both
// feeds the unshuffle and skips as the extra concatenation input.
//
// Latent: conv(8*F_L -> 2*F_L), conv(2*F_L -> 2*F_L).
//
// Expansion level l (from deepest to shallowest, input z with C channels):
//   learned shuffle   : conv(C -> C) then pixel_shuffle(2) -> C/8 channels
//   conv decomposition: four conv(C/8 -> F_l) branches b1..b4
//   merge             : c_i = b_i + a_i, concat(c1..c4, a4) -> 5*F_l channels
//   double conv       : conv(5*F_l -> F_l), conv(F_l -> F_l)
// Final 1x1x1 conv(F_1 -> out_channels), linear; optional global residual.

#include <array>
#include <cmath>
#include <random>

#include "graph.hpp"

namespace sunet {

struct ModelConfig {
  int levels = 4;
  int base_filters = 64;
  int in_channels = 1;
  int out_channels = 1;
  bool global_residual = false;
  double leaky_slope = 0.01;
  uint64_t init_seed = 1234;

  int filters(int level) const { return base_filters << (level - 1); }  // F_l, level 1-based
  int latent_filters() const { return 2 * filters(levels); }

  void validate() const {
    if (levels < 1 || levels > 6) throw data_error("model: levels must be in [1,6]");
    if (base_filters < 4 || base_filters % 4 != 0)
      throw data_error("model: base_filters must be a positive multiple of 4");
    if (in_channels < 1 || out_channels < 1) throw data_error("model: channels must be >= 1");
  }
};

// Builds the graph; parameters are allocated but uninitialized (see
// init_kaiming).  Node names: c{l}.dc{1,2}, c{l}.cd{1..4}, c{l}.lu, lat.dc{1,2},
// e{l}.ls, e{l}.cd{1..4}, e{l}.dc{1,2}, out.
template <class T>
Graph<T> build_shuffleunet(const ModelConfig& cfg) {
  cfg.validate();
  Graph<T> g;
  const int x = g.add_input(cfg.in_channels);
  std::vector<std::array<int, 4>> skips(size_t(cfg.levels));  // post-activation a1..a4 per level

  auto conv_act = [&](int in, int co, const std::string& name) {
    const int c = g.add_conv(in, co, 3, name);
    return g.add_lrelu(c, cfg.leaky_slope, name + ".act");
  };

  int cur = x;
  for (int l = 1; l <= cfg.levels; ++l) {
    const std::string p = "c" + std::to_string(l) + ".";
    const int F = cfg.filters(l);
    cur = conv_act(cur, F, p + "dc1");
    cur = conv_act(cur, F, p + "dc2");
    for (int i = 0; i < 4; ++i)
      skips[size_t(l - 1)][size_t(i)] = conv_act(cur, F, p + "cd" + std::to_string(i + 1));
    const int lu = conv_act(skips[size_t(l - 1)][3], F, p + "lu");
    cur = g.add_unshuffle(lu, 2, p + "lu.rearrange");
  }

  cur = conv_act(cur, cfg.latent_filters(), "lat.dc1");
  cur = conv_act(cur, cfg.latent_filters(), "lat.dc2");

  for (int l = cfg.levels; l >= 1; --l) {
    const std::string p = "e" + std::to_string(l) + ".";
    const int F = cfg.filters(l);
    const int ls = conv_act(cur, g.nodes[size_t(cur)].c_out, p + "ls");
    const int up = g.add_shuffle(ls, 2, p + "ls.rearrange");
    std::vector<int> cat;
    for (int i = 0; i < 4; ++i) {
      const int b = conv_act(up, F, p + "cd" + std::to_string(i + 1));
      cat.push_back(g.add_add(b, skips[size_t(l - 1)][size_t(i)],
                              p + "merge" + std::to_string(i + 1)));
    }
    cat.push_back(skips[size_t(l - 1)][3]);
    const int cc = g.add_concat(cat, p + "concat");
    cur = conv_act(cc, F, p + "dc1");
    cur = conv_act(cur, F, p + "dc2");
  }

  int out = g.add_conv(cur, cfg.out_channels, 1, "out");
  if (cfg.global_residual) out = g.add_add(out, x, "residual");
  g.output = out;
  return g;
}

// Kaiming-Normal fan-in initialization matched to the leaky slope; biases and
// batchnorm offsets keep their zero/one defaults.
template <class T>
void init_kaiming(Graph<T>& g, double slope, uint64_t seed) {
  std::mt19937 rng(uint32_t(seed ^ (seed >> 32)));
  for (const auto& nd : g.nodes) {
    if (nd.op != Op::Conv) continue;
    const int64_t fan_in = nd.w_len / nd.c_out;
    const double std = std::sqrt(2.0 / ((1.0 + slope * slope) * double(fan_in)));
    std::normal_distribution<double> N(0.0, std);
    for (int64_t i = 0; i < nd.w_len; ++i) g.params[size_t(nd.w_off + i)] = T(N(rng));
    for (int64_t i = 0; i < nd.b_len; ++i) g.params[size_t(nd.b_off + i)] = T(0);
  }
}

template <class T>
Graph<T> make_shuffleunet(const ModelConfig& cfg) {
  Graph<T> g = build_shuffleunet<T>(cfg);
  init_kaiming(g, cfg.leaky_slope, cfg.init_seed);
  return g;
}

}  // namespace sunet
