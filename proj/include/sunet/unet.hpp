#pragma once

// Reference encoder-decoder baseline: a plain 3-D UNet with
// conv + batchnorm + ReLU double blocks, max-pool halving on the way down
// and sub-pixel upsampling on the way up.  The up step (1x1x1 conv to 8C
// followed by a shuffle) is arithmetically a kernel-2 stride-2 transposed
// convolution: input voxels never overlap in that kernel, so each of the
// eight sub-voxel offsets is just its own linear map of the coarse feature.
//
// Node names: d{l}.cv1/.cv2 (+ .bn/.act), d{l}.pool, bot.cv1/.cv2,
// u{l}.up, u{l}.cv1/.cv2, out.

#include "graph.hpp"
#include "model.hpp"

namespace sunet {

struct UnetConfig {
  int levels = 4;
  int base_filters = 64;
  int in_channels = 1;
  int out_channels = 1;
  uint64_t init_seed = 1234;

  int filters(int level) const { return base_filters << (level - 1); }

  void validate() const {
    if (levels < 1 || levels > 6) throw data_error("unet: levels must be in [1,6]");
    if (base_filters < 1) throw data_error("unet: base_filters must be positive");
    if (in_channels < 1 || out_channels < 1) throw data_error("unet: channels must be >= 1");
  }
};

template <class T>
Graph<T> build_unet(const UnetConfig& cfg) {
  cfg.validate();
  Graph<T> g;
  const int x = g.add_input(cfg.in_channels);

  auto block = [&g](int in, int co, const std::string& name) {
    const int c = g.add_conv(in, co, 3, name);
    const int b = g.add_batchnorm(c, name + ".bn");
    return g.add_relu(b, name + ".act");
  };

  int cur = x;
  std::vector<int> skips;
  for (int l = 1; l <= cfg.levels; ++l) {
    const std::string p = "d" + std::to_string(l) + ".";
    cur = block(cur, cfg.filters(l), p + "cv1");
    cur = block(cur, cfg.filters(l), p + "cv2");
    skips.push_back(cur);
    cur = g.add_maxpool2(cur, p + "pool");
  }

  cur = block(cur, 2 * cfg.filters(cfg.levels), "bot.cv1");
  cur = block(cur, 2 * cfg.filters(cfg.levels), "bot.cv2");

  for (int l = cfg.levels; l >= 1; --l) {
    const std::string p = "u" + std::to_string(l) + ".";
    const int F = cfg.filters(l);
    const int up = g.add_conv(cur, 8 * F, 1, p + "up");
    const int hi = g.add_shuffle(up, 2, p + "up.px");
    cur = g.add_concat({hi, skips[size_t(l - 1)]}, p + "cat");
    cur = block(cur, F, p + "cv1");
    cur = block(cur, F, p + "cv2");
  }

  g.output = g.add_conv(cur, cfg.out_channels, 1, "out");
  return g;
}

template <class T>
Graph<T> make_unet(const UnetConfig& cfg) {
  Graph<T> g = build_unet<T>(cfg);
  init_kaiming(g, 0.0, cfg.init_seed);  // ReLU gain
  return g;
}

}  // namespace sunet
