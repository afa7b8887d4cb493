#include <catch2/catch_amalgamated.hpp>

#include <random>

#include <sunet/model.hpp>

using namespace sunet;

namespace {

ModelConfig tiny_config() {
  ModelConfig c;
  c.levels = 2;
  c.base_filters = 8;
  c.init_seed = 99;
  return c;
}

template <class T>
void fill_random(Tensor5<T>& t, uint32_t seed, double lo = -1, double hi = 1) {
  std::mt19937 rng(seed);
  std::uniform_real_distribution<double> U(lo, hi);
  for (auto& v : t.storage()) v = T(U(rng));
}

// Mean absolute error and its gradient; local to the tests on purpose so the
// graph checks do not depend on the training module.
template <class T>
T l1_and_grad(const Tensor5<T>& y, const Tensor5<T>& t, Tensor5<T>& gy) {
  gy.resize(y.shape());
  double acc = 0;
  const double inv = 1.0 / double(y.size());
  for (int64_t i = 0; i < y.size(); ++i) {
    const double d = double(y.data()[i]) - double(t.data()[i]);
    acc += std::abs(d);
    gy.data()[i] = T((d > 0 ? 1.0 : d < 0 ? -1.0 : 0.0) * inv);
  }
  return T(acc * inv);
}

int64_t expected_params(const ModelConfig& c) {
  auto conv = [](int64_t ci, int64_t co, int64_t k) { return co * ci * k * k * k + co; };
  int64_t total = 0;
  int64_t cin = c.in_channels;
  for (int l = 1; l <= c.levels; ++l) {
    const int64_t F = c.filters(l);
    total += conv(cin, F, 3) + conv(F, F, 3);      // double conv
    total += 4 * conv(F, F, 3);                    // decomposition
    total += conv(F, F, 3);                        // learned unshuffle
    cin = 8 * F;
  }
  const int64_t FL = c.latent_filters();
  total += conv(cin, FL, 3) + conv(FL, FL, 3);
  int64_t cur = FL;
  for (int l = c.levels; l >= 1; --l) {
    const int64_t F = c.filters(l);
    total += conv(cur, cur, 3);                    // learned shuffle
    total += 4 * conv(cur / 8, F, 3);              // decomposition
    total += conv(5 * F, F, 3) + conv(F, F, 3);    // double conv
    cur = F;
  }
  total += conv(cur, c.out_channels, 1);
  return total;
}

}  // namespace

TEST_CASE("default config obeys the documented channel schedule") {
  ModelConfig cfg;  // levels=4, base_filters=64
  auto g = build_shuffleunet<float>(cfg);

  const int F[5] = {0, 64, 128, 256, 512};
  for (int l = 1; l <= 4; ++l) {
    const std::string c = "c" + std::to_string(l) + ".";
    REQUIRE(g.find(c + "dc1")->c_out == F[l]);
    REQUIRE(g.find(c + "dc2")->c_out == F[l]);
    for (int i = 1; i <= 4; ++i) REQUIRE(g.find(c + "cd" + std::to_string(i))->c_out == F[l]);
    REQUIRE(g.find(c + "lu")->c_out == F[l]);
    REQUIRE(g.find(c + "lu.rearrange")->c_out == 8 * F[l]);
  }
  REQUIRE(g.find("lat.dc1")->c_out == 1024);
  REQUIRE(g.find("lat.dc2")->c_out == 1024);
  for (int l = 4; l >= 1; --l) {
    const std::string e = "e" + std::to_string(l) + ".";
    const int up_in = l == 4 ? 1024 : 2 * F[l];
    REQUIRE(g.find(e + "ls")->c_out == up_in);
    REQUIRE(g.find(e + "ls.rearrange")->c_out == up_in / 8);
    for (int i = 1; i <= 4; ++i) REQUIRE(g.find(e + "cd" + std::to_string(i))->c_out == F[l]);
    REQUIRE(g.find(e + "concat")->c_out == 5 * F[l]);
    REQUIRE(g.find(e + "dc1")->c_out == F[l]);
    REQUIRE(g.find(e + "dc2")->c_out == F[l]);
  }
  REQUIRE(g.find("out")->c_out == 1);
  REQUIRE(g.param_count() == expected_params(cfg));
}

TEST_CASE("tiny config parameter count matches the closed-form tally") {
  auto cfg = tiny_config();
  auto g = build_shuffleunet<double>(cfg);
  REQUIRE(g.param_count() == expected_params(cfg));
  REQUIRE(g.param_count() == 313417);
}

TEST_CASE("tiny forward keeps spatial size and is deterministic in the seed") {
  auto cfg = tiny_config();
  auto g1 = make_shuffleunet<float>(cfg);
  auto g2 = make_shuffleunet<float>(cfg);
  REQUIRE(g1.params == g2.params);

  Tensor5<float> x(2, 1, 8, 8, 8);
  fill_random(x, 5);
  Exec<float> e1, e2;
  auto& y1 = forward(g1, x, e1, false);
  auto& y2 = forward(g2, x, e2, false);
  REQUIRE(y1.shape() == Shape5{2, 1, 8, 8, 8});
  REQUIRE(std::equal(y1.data(), y1.data() + y1.size(), y2.data()));
}

TEST_CASE("batch items are processed independently and permutation permutes outputs") {
  auto g = make_shuffleunet<float>(tiny_config());
  Tensor5<float> x(3, 1, 8, 8, 8);
  fill_random(x, 17);
  Exec<float> e;
  auto y = forward(g, x, e, false);  // copy
  const int64_t bs = y.size() / 3;

  Tensor5<float> xp(3, 1, 8, 8, 8);  // batch order 2,0,1
  const int64_t xbs = x.size() / 3;
  for (int i = 0; i < 3; ++i) {
    const int src = (i + 2) % 3;
    std::copy(x.data() + src * xbs, x.data() + (src + 1) * xbs, xp.data() + i * xbs);
  }
  Exec<float> ep;
  auto& yp = forward(g, xp, ep, false);
  for (int i = 0; i < 3; ++i) {
    const int src = (i + 2) % 3;
    REQUIRE(std::equal(yp.data() + i * bs, yp.data() + (i + 1) * bs, y.data() + src * bs));
  }
}

TEST_CASE("streaming forward equals the all-at-once forward") {
  auto g = make_shuffleunet<float>(tiny_config());
  Tensor5<float> x(2, 1, 8, 8, 8);
  fill_random(x, 23);
  Exec<float> ea, eb;
  auto& ya = forward(g, x, ea, false);
  Tensor5<float> yb;
  forward_streaming(g, x, eb, yb);
  REQUIRE(yb.shape() == ya.shape());
  REQUIRE(std::equal(ya.data(), ya.data() + ya.size(), yb.data()));
  // activations other than the input copy should have been released
  int64_t live = 0;
  for (const auto& a : eb.act) live += a.size();
  REQUIRE(live == 0);
}

TEST_CASE("every parameter receives a gradient after one backward pass") {
  auto g = make_shuffleunet<double>(tiny_config());
  Tensor5<double> x(1, 1, 8, 8, 8), tgt(1, 1, 8, 8, 8);
  fill_random(x, 31);
  fill_random(tgt, 37);
  Exec<double> e;
  auto& y = forward(g, x, e, true);
  e.grad.resize(g.nodes.size());
  l1_and_grad(y, tgt, e.grad[size_t(g.output)]);
  backward(g, e);
  for (const auto& nd : g.nodes) {
    if (nd.op != Op::Conv) continue;
    double mag = 0;
    for (int64_t i = 0; i < nd.w_len; ++i) mag += std::abs(e.pgrad[size_t(nd.w_off + i)]);
    INFO(nd.name);
    REQUIRE(mag > 0);
  }
}

TEST_CASE("learned wrapper gradients match finite differences (<=100 parameters)") {
  // conv(1->1, 3^3) + unshuffle and conv(8->8...) kept at 28 params: the
  // learnable pixel-unshuffle wrapper in isolation.
  Graph<double> g;
  const int x = g.add_input(1);
  const int c = g.add_conv(x, 1, 3, "w.conv");
  const int a = g.add_lrelu(c, 0.01, "w.act");
  g.output = g.add_unshuffle(a, 2, "w.rearrange");
  REQUIRE(g.param_count() == 28);
  init_kaiming(g, 0.01, 7);

  Tensor5<double> in(1, 1, 4, 4, 4), tgt(1, 8, 2, 2, 2);
  fill_random(in, 41);
  fill_random(tgt, 43);

  Exec<double> e;
  auto& y = forward(g, in, e, true);
  e.grad.resize(g.nodes.size());
  l1_and_grad(y, tgt, e.grad[size_t(g.output)]);
  backward(g, e);

  const double h = 1e-4;
  for (size_t p = 0; p < g.params.size(); ++p) {
    const double keep = g.params[p];
    Exec<double> ef;
    Tensor5<double> gy;
    g.params[p] = keep + h;
    const double lp = l1_and_grad(forward(g, in, ef, false), tgt, gy);
    g.params[p] = keep - h;
    const double lm = l1_and_grad(forward(g, in, ef, false), tgt, gy);
    g.params[p] = keep;
    const double fd = (lp - lm) / (2 * h);
    const double an = e.pgrad[p];
    const double rel = std::abs(fd - an) / std::max({std::abs(an), std::abs(fd), 1e-8});
    REQUIRE(rel < 1e-3);
  }
}

TEST_CASE("the same check passes for the learned shuffle wrapper") {
  Graph<double> g;
  const int x = g.add_input(8);
  const int c = g.add_conv(x, 8, 1, "s.conv");  // 1x1x1 keeps the count at 72
  const int a = g.add_lrelu(c, 0.01, "s.act");
  g.output = g.add_shuffle(a, 2, "s.rearrange");
  REQUIRE(g.param_count() == 72);
  init_kaiming(g, 0.01, 11);

  Tensor5<double> in(1, 8, 2, 2, 2), tgt(1, 1, 4, 4, 4);
  fill_random(in, 47);
  fill_random(tgt, 53);
  Exec<double> e;
  auto& y = forward(g, in, e, true);
  e.grad.resize(g.nodes.size());
  l1_and_grad(y, tgt, e.grad[size_t(g.output)]);
  backward(g, e);
  const double h = 1e-4;
  for (size_t p = 0; p < g.params.size(); ++p) {
    const double keep = g.params[p];
    Exec<double> ef;
    Tensor5<double> gy;
    g.params[p] = keep + h;
    const double lp = l1_and_grad(forward(g, in, ef, false), tgt, gy);
    g.params[p] = keep - h;
    const double lm = l1_and_grad(forward(g, in, ef, false), tgt, gy);
    g.params[p] = keep;
    const double fd = (lp - lm) / (2 * h);
    const double rel = std::abs(fd - e.pgrad[p]) / std::max({std::abs(e.pgrad[p]), std::abs(fd), 1e-8});
    REQUIRE(rel < 1e-3);
  }
}

TEST_CASE("optional global residual adds the input to the output") {
  auto cfg = tiny_config();
  Tensor5<float> x(1, 1, 8, 8, 8);
  fill_random(x, 61);

  auto base = build_shuffleunet<float>(cfg);
  cfg.global_residual = true;
  auto res = build_shuffleunet<float>(cfg);
  REQUIRE(base.param_count() == res.param_count());
  init_kaiming(base, cfg.leaky_slope, 5);
  res.params = base.params;

  Exec<float> ea, eb;
  auto& yb = forward(base, x, ea, false);
  auto& yr = forward(res, x, eb, false);
  for (int64_t i = 0; i < yb.size(); ++i)
    REQUIRE(yr.data()[i] == Catch::Approx(yb.data()[i] + x.data()[i]).margin(1e-6));
}

TEST_CASE("config validation rejects malformed settings") {
  ModelConfig c;
  c.levels = 0;
  REQUIRE_THROWS_AS(c.validate(), data_error);
  c = ModelConfig{};
  c.base_filters = 6;
  REQUIRE_THROWS_AS(c.validate(), data_error);
  c = ModelConfig{};
  c.in_channels = 0;
  REQUIRE_THROWS_AS(c.validate(), data_error);
}
