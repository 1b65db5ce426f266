#include <doctest.h>

#include <cmath>
#include <random>

#include "fixtures.hpp"
#include "gisp/baselines.hpp"
#include "gisp/error.hpp"

using namespace gisp;

namespace {

CalibrationSet random_calibration(std::mt19937_64& rng, int n, std::size_t len) {
  CalibrationSet c;
  for (int i = 0; i < n; ++i) c.sequences.push_back(fixtures::random_tokens(rng, len));
  return c;
}

}  // namespace

TEST_CASE("activation statistics") {
  std::mt19937_64 rng(1);
  const auto c = fixtures::tiny_config(3);
  const auto w = fixtures::noisy_weights(c, 41);

  SUBCASE("shapes and non-negativity") {
    const auto st = collect_activation_stats(w, c, random_calibration(rng, 3, 7));
    REQUIRE(st.layers.size() == 3);
    CHECK(st.tokens == 21);
    for (const auto& l : st.layers) {
      CHECK(l.attn_in.size() == 8);
      CHECK(l.heads_out.size() == 8);
      CHECK(l.mlp_in.size() == 8);
      CHECK(l.mlp_hidden.size() == 6);
      for (double x : l.mlp_hidden) CHECK(x >= 0.0);
    }
  }
  SUBCASE("first-layer norms match a hand computation") {
    // attn_in of layer 0 is rms_norm(tok_emb[t] + pos_emb[pos]) * gain.
    CalibrationSet one;
    one.sequences = {{65, 66}};
    const auto st = collect_activation_stats(w, c, one);
    std::vector<double> want(8, 0.0);
    for (int pos = 0; pos < 2; ++pos) {
      const int t = one.sequences[0][pos];
      double ms = 0.0;
      std::vector<double> x(8);
      for (int j = 0; j < 8; ++j) {
        x[j] = w.tok_emb.at(t, j) + w.pos_emb.at(pos, j);
        ms += x[j] * x[j] / 8;
      }
      for (int j = 0; j < 8; ++j) {
        const double v = x[j] / std::sqrt(ms + 1e-6) * w.layers[0].attn_norm[j];
        want[j] += v * v;
      }
    }
    for (int j = 0; j < 8; ++j) CHECK(st.layers[0].attn_in[j] == doctest::Approx(std::sqrt(want[j])).epsilon(1e-12));
  }
  SUBCASE("duplicating the calibration scales norms by sqrt 2") {
    auto cal = random_calibration(rng, 2, 9);
    const auto a = collect_activation_stats(w, c, cal);
    auto twice = cal;
    twice.sequences.insert(twice.sequences.end(), cal.sequences.begin(), cal.sequences.end());
    const auto b = collect_activation_stats(w, c, twice);
    for (std::size_t l = 0; l < 3; ++l)
      for (std::size_t j = 0; j < 6; ++j)
        CHECK(b.layers[l].mlp_hidden[j] == doctest::Approx(std::sqrt(2.0) * a.layers[l].mlp_hidden[j]).epsilon(1e-12));
  }
  SUBCASE("capture oracle against the forward graph taps") {
    auto cal = random_calibration(rng, 3, 6);
    const auto st = collect_activation_stats(w, c, cal, 2);
    std::vector<ScoredSequence> batch;
    for (const auto& s : cal.sequences) batch.push_back({s, 1, 1.0});
    auto fg = build_forward(w, c, MaskState(c), batch);
    fg.graph.evaluate(fg.bindings);
    const auto& h = fg.graph.value(fg.taps[2].heads_out);
    for (std::size_t j = 0; j < h.cols(); ++j) {
      double s = 0.0;
      for (std::size_t r = 0; r < h.rows(); ++r) s += h.at(r, j) * h.at(r, j);
      CHECK(st.layers[2].heads_out[j] == doctest::Approx(std::sqrt(s)).epsilon(1e-12));
    }
  }
  SUBCASE("errors") {
    CHECK_THROWS_AS(collect_activation_stats(w, c, CalibrationSet{}), UsageError);
    CalibrationSet m;
    m.kind = CalibrationKind::Margin;
    CHECK_THROWS_AS(collect_activation_stats(w, c, m), UsageError);
  }
}

TEST_CASE("wanda_sp is local and uniform") {
  std::mt19937_64 rng(2);
  ModelConfig c = fixtures::tiny_config(5);
  c.n_heads = 4;
  c.d_head = 2;
  c.d_ff = 10;
  const auto w = fixtures::noisy_weights(c, 42);
  const auto st = collect_activation_stats(w, c, random_calibration(rng, 2, 8));
  const std::set<int> prot{0, 4};

  CHECK(wanda_sp(w, c, st, 0.0, prot).all_kept());
  for (double rho : {0.1, 0.25, 0.4, 0.5, 0.7}) {
    const auto m = wanda_sp(w, c, st, rho, prot);
    for (int l = 0; l < c.n_layers; ++l) {
      if (prot.contains(l)) {
        CHECK(m.heads_kept(l) == 4);
        CHECK(m.channels_kept(l) == 10);
        continue;
      }
      CHECK(std::abs(m.heads_kept(l) / 4.0 - (1 - rho)) <= 1.0 / 4 + 1e-12);
      CHECK(std::abs(m.channels_kept(l) / 10.0 - (1 - rho)) <= 1.0 / 10 + 1e-12);
    }
    CHECK_NOTHROW(compact(w, c, m));
  }
  CHECK_THROWS_AS(wanda_sp(w, c, st, 0.9, prot), ConstraintError);
  CHECK_THROWS_AS(wanda_sp(w, c, st, 1.0, prot), UsageError);
}

TEST_CASE("wanda_sp hand oracle on a two-head layer") {
  ModelConfig c = fixtures::tiny_config(1);
  c.d_model = 2;
  c.d_head = 1;
  c.d_ff = 2;
  auto w = init_weights(c);
  auto& L = w.layers[0];
  L.wq = Tensor::matrix({{1, 0}, {0, 1}});
  L.wk = Tensor::matrix({{0, 0}, {0, 0}});
  L.wv = Tensor::matrix({{0, 0}, {0, 0}});
  L.wo = Tensor::matrix({{1, 1}, {0, 0}});
  L.w_gate = Tensor::matrix({{1, 1}, {2, 2}});
  L.w_up = Tensor::matrix({{0, 0}, {0, 0}});
  L.w_down = Tensor::matrix({{0, 0}, {0, 0}});
  ActivationStats st;
  // head 0: |1|*5 + |1|*1 = 6 ; head 1: |1|*1 + |1|*2 = 3
  // channel 0: (|1|+|1|)*1 = 2 ; channel 1: (|2|+|2|)*1 = 4
  st.layers.push_back({{5, 1}, {1, 2}, {1, 1}, {0, 0}});
  const auto scores = wanda_scores(w, c, st);
  CHECK(scores == std::vector<double>{6, 3, 2, 4});
  const auto m = wanda_sp(w, c, st, 0.5, {});
  CHECK_FALSE(m.kept({0, StructureKind::AttnHead, 1}));
  CHECK(m.kept({0, StructureKind::AttnHead, 0}));
  CHECK_FALSE(m.kept({0, StructureKind::MlpChannel, 0}));
}

TEST_CASE("wanda_sp never runs a backward pass") {
  std::mt19937_64 rng(3);
  const auto c = fixtures::tiny_config(3);
  const auto w = fixtures::noisy_weights(c, 43);
  const auto before = ad::Graph::backward_invocations();
  const auto st = collect_activation_stats(w, c, random_calibration(rng, 2, 8));
  wanda_sp(w, c, st, 0.5, {0});
  CHECK(ad::Graph::backward_invocations() == before);
}

TEST_CASE("global magnitude pruning") {
  const auto c = fixtures::tiny_config(4);
  const std::set<int> prot{0, 3};
  SUBCASE("equal weights fall back to the structure order") {
    auto w = init_weights(c);
    w.for_each([](const std::string&, Tensor& t) {
      for (auto& x : t.storage()) x = 1.0;
    });
    // Channels (24 params) score below heads (128), so they go first in id order.
    const auto m = magnitude_global(w, c, 0.1, prot, BudgetMode::StructureFraction);
    const auto removed = m.removed();
    REQUIRE(removed.size() == 2);
    CHECK(removed[0] == StructureId{1, StructureKind::MlpChannel, 0});
    CHECK(removed[1] == StructureId{1, StructureKind::MlpChannel, 1});
  }
  SUBCASE("scale invariance") {
    const auto w = fixtures::noisy_weights(c, 44);
    auto w2 = w;
    w2.for_each([](const std::string&, Tensor& t) {
      for (auto& x : t.storage()) x *= 2.0;
    });
    for (double rho : {0.2, 0.5}) CHECK(magnitude_global(w, c, rho, prot) == magnitude_global(w2, c, rho, prot));
  }
  SUBCASE("sort oracle") {
    ModelConfig t = fixtures::tiny_config(2);
    t.d_ff = 8;  // 2 layers x (2 heads + 8 channels) = 20 structures
    const auto w = fixtures::noisy_weights(t, 45);
    const auto scores = magnitude_scores(w, t);
    const auto ids = enumerate_structures(t);
    REQUIRE(ids.size() == 20);
    std::vector<std::size_t> order(20);
    for (std::size_t i = 0; i < 20; ++i) order[i] = i;
    std::sort(order.begin(), order.end(), [&](auto a, auto b) {
      return scores[a] != scores[b] ? scores[a] < scores[b] : ids[a] < ids[b];
    });
    MaskState want(t);
    double cum = 0.0;
    const double target = 0.3 * prunable_budget(t, {}, BudgetMode::StructureFraction);
    for (auto i : order) {
      if (cum >= target) break;
      if (want.would_violate_floor(ids[i])) continue;
      want.remove(ids[i]);
      cum += 1.0;
    }
    CHECK(magnitude_global(w, t, 0.3, {}, BudgetMode::StructureFraction) == want);
  }
}
