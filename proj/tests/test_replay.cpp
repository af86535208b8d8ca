#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <deque>
#include <map>
#include <sstream>

#include "oracles.hpp"
#include "sharc/replay.hpp"

using namespace sharc;

namespace {

using oracle::gaussian;

BufferSlot slot(std::size_t task, std::size_t source, std::size_t label = 0) {
  SparseFeatureMap m;
  m.full_dims = {1, 1, 2};
  m.kept_channels = {1};
  m.kept_data = Tensor3({1, 1, 1}, static_cast<double>(source));
  m.label = label;
  m.task = task;
  return BufferSlot{m, label, source};
}

}  // namespace

TEST_CASE("buffer last-m eviction and per-task isolation") {
  EpisodicBuffer buf(4, 2);
  CHECK(buf.slots_per_task() == 2);
  buf.insert(1, slot(1, 100));
  for (std::size_t s : {1, 2, 3}) buf.insert(0, slot(0, s));
  REQUIRE(buf.items(0).size() == 2);
  CHECK(buf.items(0)[0].source == 2);
  CHECK(buf.items(0)[1].source == 3);
  REQUIRE(buf.items(1).size() == 1);
  CHECK(buf.items(1)[0].source == 100);
  CHECK_THROWS(buf.insert(1, slot(0, 5)));
  CHECK_THROWS(buf.insert(2, slot(2, 5)));

  EpisodicBuffer five(200, 5);
  CHECK(five.slots_per_task() == 40);
}

TEST_CASE("buffer fuzz against a shadow queue model") {
  RngStream rng(1);
  for (int trial = 0; trial < 200; ++trial) {
    const std::size_t tasks = 1 + rng.below(6);
    const std::size_t budget = rng.below(40);
    EpisodicBuffer buf(budget, tasks);
    std::vector<std::deque<std::size_t>> shadow(tasks);
    const std::size_t m = budget / tasks;
    for (std::size_t op = 0; op < 300; ++op) {
      const std::size_t t = rng.below(tasks);
      buf.insert(t, slot(t, op));
      shadow[t].push_back(op);
      if (shadow[t].size() > m) shadow[t].pop_front();
      CHECK(buf.size() <= budget);
    }
    for (std::size_t t = 0; t < tasks; ++t) {
      REQUIRE(buf.items(t).size() == shadow[t].size());
      for (std::size_t i = 0; i < shadow[t].size(); ++i) CHECK(buf.items(t)[i].source == shadow[t][i]);
    }
  }
}

TEST_CASE("byte-budget buffer admits more items at higher masking") {
  EpisodicBuffer buf(2 * 200, 2, BudgetUnit::bytes);
  for (std::size_t i = 0; i < 10; ++i) buf.insert(0, slot(0, i));
  // each slot is 8 + 4 + 24 = 36 bytes, so 200 bytes hold 5 of them
  CHECK(buf.items(0).size() == 5);
  CHECK(buf.task_bytes(0) <= 200);
  CHECK(buf.bytes_used() == 5 * 36);
}

TEST_CASE("buffer sampling") {
  EpisodicBuffer buf(8, 2);
  for (std::size_t s = 0; s < 4; ++s) buf.insert(0, slot(0, s));
  RngStream a(3), b(3);
  const auto p = buf.sample(0, 4, a);
  std::vector<std::size_t> seen;
  for (const auto& it : p) seen.push_back(it.source);
  std::sort(seen.begin(), seen.end());
  CHECK(seen == std::vector<std::size_t>{0, 1, 2, 3});
  const auto q = buf.sample(0, 4, b);
  for (std::size_t i = 0; i < 4; ++i) CHECK(p[i] == q[i]);
  CHECK_THROWS(buf.sample(1, 1, a));
  CHECK(buf.sample(std::nullopt, 9, a).size() == 9);

  RngStream r(4);
  std::map<std::size_t, int> freq;
  const int n = 10000;
  for (int i = 0; i < n; ++i) freq[buf.sample(0, 1, r)[0].source]++;
  const double sigma = std::sqrt(n * 0.25 * 0.75);
  for (std::size_t s = 0; s < 4; ++s) CHECK(std::abs(freq[s] - n * 0.25) <= 3 * sigma);
}

TEST_CASE("buffer snapshot round trip") {
  EpisodicBuffer buf(6, 3);
  for (std::size_t t = 0; t < 3; ++t)
    for (std::size_t s = 0; s < 3; ++s) buf.insert(t, slot(t, 10 * t + s, t));
  std::stringstream io;
  buf.save(io);
  const auto back = EpisodicBuffer::load(io, 6, BudgetUnit::slots);
  for (std::size_t t = 0; t < 3; ++t) {
    REQUIRE(back.items(t).size() == buf.items(t).size());
    for (std::size_t i = 0; i < buf.items(t).size(); ++i) CHECK(back.items(t)[i] == buf.items(t)[i]);
  }
}

TEST_CASE("agem projection examples and properties") {
  CHECK(agem_project(Vec{1, 0}, Vec{0, 1}) == Vec{1, 0});
  const Vec p = agem_project(Vec{1, -1}, Vec{0, 1});
  CHECK(std::abs(p[0] - 1.0) < 1e-15);
  CHECK(std::abs(p[1]) < 1e-15);

  RngStream rng(5);
  int active = 0;
  for (int trial = 0; trial < 1000; ++trial) {
    const Vec g = gaussian(50, rng), r = gaussian(50, rng);
    const Vec out = agem_project(g, r);
    if (dot(g, r) >= 0) {
      CHECK(out == g);
    } else {
      ++active;
      CHECK(std::abs(dot(out, r)) <= 1e-9);
      CHECK(norm(out) <= norm(g));
    }
  }
  CHECK(active > 100);
}

TEST_CASE("gem examples") {
  const Vec g{1, 2, 3};
  CHECK(gem_project(g, std::vector<Vec>{{1, 0, 0}, {0, 1, 1}}) == g);
  CHECK_THROWS(gem_project(g, std::vector<Vec>{}));
  CHECK_THROWS(gem_project(g, std::vector<Vec>{{1, 0}}));

  RngStream rng(6);
  for (int trial = 0; trial < 200; ++trial) {
    const Vec x = gaussian(6, rng), r = gaussian(6, rng);
    const Vec a = agem_project(x, r), b = gem_project(x, std::vector<Vec>{r});
    for (std::size_t i = 0; i < 6; ++i) CHECK(std::abs(a[i] - b[i]) <= 1e-8);
  }
}

TEST_CASE("gem matches the active-set oracle on random small instances") {
  RngStream rng(7);
  for (int trial = 0; trial < 500; ++trial) {
    const std::size_t d = 1 + rng.below(4);
    const std::size_t m = 1 + rng.below(3);
    const Vec g = gaussian(d, rng);
    std::vector<Vec> refs;
    for (std::size_t k = 0; k < m; ++k) refs.push_back(gaussian(d, rng));
    const double eps = trial % 4 == 0 ? 0.1 * rng.uniform() : 0.0;
    GemOptions opts;
    opts.eps = eps;
    const Vec z = gem_project(g, refs, opts);
    const Vec o = oracle::active_set_projection(g, refs, eps);
    REQUIRE(!o.empty());
    Vec diff = z;
    axpy(-1.0, o, diff);
    CHECK(norm(diff) <= 1e-6);
    for (const auto& r : refs) CHECK(dot(r, z) >= -eps - 1e-6);
  }
}

TEST_CASE("gem reports non-convergence with the worst violation") {
  // More constraints than the exhaustive fallback covers, one sweep allowed.
  RngStream rng(1);
  std::vector<Vec> refs;
  for (int k = 0; k < 16; ++k) refs.push_back(gaussian(3, rng));
  const Vec g = gaussian(3, rng);
  GemOptions opts;
  opts.max_iters = 1;
  opts.tolerance = 0.0;
  CHECK_THROWS_WITH(gem_project(g, refs, opts), doctest::Contains("worst constraint violation"));
  const Vec z = gem_project(g, refs);
  for (const auto& r : refs) CHECK(dot(r, z) >= -1e-6);
}

TEST_CASE("gem handles rank-deficient active sets") {
  // Two nearly opposite references pin the projection to the origin.
  const Vec g{-1.2863422316064155, -2.0391361486789825};
  const std::vector<Vec> refs{{-0.8196487970797226, 1.2722345275663023},
                              {0.55526772718045014, -0.8593857853170227},
                              {-0.67536362994060195, -0.24277045715818676}};
  const Vec z = gem_project(g, refs);
  CHECK(norm(z) <= 1e-6);
  RngStream rng(8);
  for (int trial = 0; trial < 20000; ++trial) {
    const std::size_t d = 1 + rng.below(3);
    std::vector<Vec> many;
    for (std::size_t k = 0; k < d + 1 + rng.below(3); ++k) many.push_back(gaussian(d, rng));
    const Vec x = gaussian(d, rng);
    const Vec p = gem_project(x, many);
    Vec diff = p;
    axpy(-1.0, oracle::active_set_projection(x, many, 0.0), diff);
    CHECK(norm(diff) <= 1e-6);
  }
}

TEST_CASE("strategy steps") {
  RngStream rng(8);
  const Dims3 d{1, 2, 3};
  Head base(HeadSpec{6, 5, 4, Activation::relu}, rng);
  std::vector<FeatureMap> maps;
  for (int i = 0; i < 8; ++i) {
    FeatureMap a(d);
    for (auto& v : a.flat()) v = rng.normal();
    maps.push_back(a);
  }
  std::vector<TrainItem> batch{{&maps[0], 2, ClassRange{2, 2}}, {&maps[1], 3, ClassRange{2, 2}}};
  std::vector<TrainItem> past{{&maps[2], 0, ClassRange{0, 2}}, {&maps[3], 1, ClassRange{0, 2}},
                              {&maps[4], 0, ClassRange{0, 2}}};

  SUBCASE("no past tasks reduces to sgd") {
    ReplayContext empty;
    Head ref = base;
    sgd_step(ref, loss_and_grad(ref, batch).grad, 0.1);
    for (auto s : {Strategy::sgd, Strategy::joint, Strategy::er, Strategy::gem, Strategy::agem}) {
      Head h = base;
      RngStream r(1);
      strategy_step(s, h, batch, empty, 0.1, r);
      CHECK(h.params() == ref.params());
    }
  }

  SUBCASE("er with the batch as replay equals sgd") {
    ReplayContext ctx;
    ctx.per_task = {batch};
    ctx.replay_batch = 2;
    Head h = base;
    RngStream r(2);
    const auto info = strategy_step(Strategy::er, h, batch, ctx, 0.1, r);
    const auto g = loss_and_grad(base, batch).grad;
    for (std::size_t i = 0; i < g.size(); ++i) CHECK(std::abs(info.direction[i] - g[i]) < 1e-15);
  }

  SUBCASE("agem direction never opposes the replay gradient") {
    ReplayContext ctx;
    ctx.per_task = {past};
    ctx.replay_batch = 2;
    Head h = base;
    RngStream r(3);
    for (int step = 0; step < 100; ++step) {
      const auto info = strategy_step(Strategy::agem, h, batch, ctx, 0.5, r);
      CHECK(dot(info.direction, info.reference) >= -1e-9);
    }
  }

  SUBCASE("gem direction satisfies every past-task constraint") {
    ReplayContext ctx;
    ctx.per_task = {past, {{&maps[5], 1, ClassRange{0, 2}}}};
    Head h = base;
    RngStream r(4);
    for (int step = 0; step < 50; ++step) {
      std::vector<Vec> refs;
      for (const auto& t : ctx.per_task) refs.push_back(loss_and_grad(h, t).grad);
      const auto info = strategy_step(Strategy::gem, h, batch, ctx, 0.5, r);
      for (const auto& g : refs) CHECK(dot(info.direction, g) >= -1e-6);
    }
  }

  SUBCASE("joint uses the union with the raw past data") {
    ReplayContext ctx;
    ctx.joint = past;
    Head h = base;
    RngStream r(5);
    const auto info = strategy_step(Strategy::joint, h, batch, ctx, 0.1, r);
    std::vector<TrainItem> all = batch;
    all.insert(all.end(), past.begin(), past.end());
    CHECK(info.direction == loss_and_grad(base, all).grad);
  }

  SUBCASE("replay strategies require past data") {
    ReplayContext ctx;
    ctx.per_task = {{}};
    for (auto s : {Strategy::er, Strategy::gem, Strategy::agem}) {
      Head h = base;
      RngStream r(6);
      CHECK_THROWS(strategy_step(s, h, batch, ctx, 0.1, r));
    }
  }

  CHECK(parse_strategy("a-gem") == Strategy::agem);
  CHECK(to_string(Strategy::gem) == "gem");
  CHECK_THROWS(parse_strategy("ewc"));
}
