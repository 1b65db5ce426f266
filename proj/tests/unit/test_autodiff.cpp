#include <doctest.h>

#include <cmath>
#include <functional>
#include <random>

#include "gisp/autodiff.hpp"
#include "gisp/error.hpp"

using gisp::Shape;
using gisp::Tensor;
namespace ad = gisp::ad;

namespace {

Tensor random_tensor(Shape shape, std::mt19937_64& rng, double scale = 1.0) {
  Tensor t(std::move(shape));
  std::normal_distribution<double> n(0.0, scale);
  for (auto& x : t.storage()) x = n(rng);
  return t;
}

// Reduces a node to a scalar through a random projection so every output
// element carries a distinct upstream gradient.
ad::NodeId project(ad::Graph& g, ad::NodeId x, std::mt19937_64& rng) {
  auto c = g.constant(random_tensor(g.shape(x), rng));
  return g.sum(g.multiply(x, c));
}

double worst_fd(ad::Graph& g, ad::NodeId loss, const ad::Bindings& b = {}) {
  g.evaluate(b);
  double worst = 0.0;
  for (const auto& name : g.parameter_names())
    worst = std::max(worst, ad::finite_difference_check(g, loss, name, 1e-5).max_elementwise);
  return worst;
}

}  // namespace

TEST_CASE("tensor construction and shape checks") {
  Tensor t({2, 3}, 1.5);
  CHECK(t.size() == 6);
  CHECK(t.rows() == 2);
  CHECK(t.cols() == 3);
  CHECK(Tensor::scalar(4.0).item() == 4.0);
  CHECK_THROWS_AS(Tensor({2, 2}, std::vector<double>{1, 2, 3}), gisp::ShapeError);
  CHECK_THROWS_AS(t.item(), gisp::UsageError);
  auto m = Tensor::matrix({{1, 2}, {3, 4}});
  CHECK(m.at(1, 0) == 3);
  CHECK(m.all_finite());
  m[0] = std::nan("");
  CHECK_FALSE(m.all_finite());
}

TEST_CASE("matmul forward matches hand product in all transpose modes") {
  const auto a = Tensor::matrix({{1, 2}, {3, 4}});
  const auto b = Tensor::matrix({{5, 6}, {7, 8}});
  struct Case {
    bool ta, tb;
    Tensor want;
  };
  const Case cases[] = {
      {false, false, Tensor::matrix({{19, 22}, {43, 50}})},
      {true, false, Tensor::matrix({{26, 30}, {38, 44}})},
      {false, true, Tensor::matrix({{17, 23}, {39, 53}})},
      {true, true, Tensor::matrix({{23, 31}, {34, 46}})},
  };
  for (const auto& c : cases) {
    ad::Graph g;
    auto out = g.matmul(g.constant(a), g.constant(b), c.ta, c.tb);
    g.evaluate({});
    CHECK(g.value(out) == c.want);
  }
}

TEST_CASE("every op's gradient matches central differences") {
  std::mt19937_64 rng(11);
  using Builder = std::function<ad::NodeId(ad::Graph&, std::mt19937_64&)>;
  const std::vector<std::pair<const char*, Builder>> ops = {
      {"matmul", [](ad::Graph& g, auto& r) {
         return g.matmul(g.parameter("a", random_tensor({3, 4}, r)), g.parameter("b", random_tensor({4, 2}, r)));
       }},
      {"matmul_ta", [](ad::Graph& g, auto& r) {
         return g.matmul(g.parameter("a", random_tensor({4, 3}, r)), g.parameter("b", random_tensor({4, 2}, r)), true);
       }},
      {"matmul_tb", [](ad::Graph& g, auto& r) {
         return g.matmul(g.parameter("a", random_tensor({3, 4}, r)), g.parameter("b", random_tensor({2, 4}, r)), false,
                         true);
       }},
      {"matmul_tab", [](ad::Graph& g, auto& r) {
         return g.matmul(g.parameter("a", random_tensor({4, 3}, r)), g.parameter("b", random_tensor({2, 4}, r)), true,
                         true);
       }},
      {"add", [](ad::Graph& g, auto& r) {
         return g.add(g.parameter("a", random_tensor({3, 2}, r)), g.parameter("b", random_tensor({3, 2}, r)));
       }},
      {"add_row", [](ad::Graph& g, auto& r) {
         return g.add_row(g.parameter("a", random_tensor({3, 2}, r)), g.parameter("b", random_tensor({2}, r)));
       }},
      {"multiply", [](ad::Graph& g, auto& r) {
         return g.multiply(g.parameter("a", random_tensor({3, 2}, r)), g.parameter("b", random_tensor({3, 2}, r)));
       }},
      {"scale", [](ad::Graph& g, auto& r) { return g.scale(g.parameter("a", random_tensor({3, 2}, r)), -2.5); }},
      {"rms_norm", [](ad::Graph& g, auto& r) {
         return g.rms_norm(g.parameter("x", random_tensor({3, 5}, r)), g.parameter("gain", random_tensor({5}, r)));
       }},
      {"softmax", [](ad::Graph& g, auto& r) { return g.softmax(g.parameter("x", random_tensor({3, 4}, r))); }},
      {"silu", [](ad::Graph& g, auto& r) { return g.silu(g.parameter("x", random_tensor({3, 4}, r))); }},
      {"gate", [](ad::Graph& g, auto& r) {
         return g.gate(g.parameter("a", random_tensor({3, 4}, r)), g.parameter("b", random_tensor({3, 4}, r)));
       }},
      {"causal_mask+softmax",
       [](ad::Graph& g, auto& r) { return g.softmax(g.causal_mask(g.parameter("x", random_tensor({4, 4}, r)))); }},
      {"transpose", [](ad::Graph& g, auto& r) { return g.transpose(g.parameter("x", random_tensor({3, 4}, r))); }},
      {"slice", [](ad::Graph& g, auto& r) { return g.slice(g.parameter("x", random_tensor({4, 5}, r)), 1, 2, 2, 3); }},
      {"concat_cols", [](ad::Graph& g, auto& r) {
         return g.concat_cols({g.parameter("a", random_tensor({3, 2}, r)), g.parameter("b", random_tensor({3, 3}, r))});
       }},
      {"concat_rows", [](ad::Graph& g, auto& r) {
         return g.concat_rows({g.parameter("a", random_tensor({2, 3}, r)), g.parameter("b", random_tensor({1, 3}, r))});
       }},
      {"gather_rows",
       [](ad::Graph& g, auto& r) { return g.gather_rows(g.parameter("x", random_tensor({4, 3}, r)), {3, 1}); }},
      {"gather_cols",
       [](ad::Graph& g, auto& r) { return g.gather_cols(g.parameter("x", random_tensor({3, 4}, r)), {0, 2}); }},
      {"embedding", [](ad::Graph& g, auto& r) {
         auto ids = g.constant(Tensor({4}, std::vector<double>{2, 0, 2, 1}));
         return g.embedding(g.parameter("table", random_tensor({5, 3}, r)), ids);
       }},
  };
  for (const auto& [name, build] : ops) {
    CAPTURE(name);
    ad::Graph g;
    auto out = build(g, rng);
    auto loss = project(g, out, rng);
    CHECK(worst_fd(g, loss) < 1e-6);
  }
}

TEST_CASE("cross entropy matches a hand computation and its gradient") {
  ad::Graph g;
  auto logits = g.parameter("z", Tensor::matrix({{1.0, 2.0, 0.5}, {0.0, 0.0, 0.0}, {3.0, -1.0, 2.0}}));
  auto targets = g.constant(Tensor({3}, std::vector<double>{1, -1, 0}));
  auto weights = g.constant(Tensor({3}, std::vector<double>{0.5, 9.0, 2.0}));
  auto loss = g.cross_entropy(logits, targets, weights);
  const double l0 = std::log(std::exp(1.0) + std::exp(2.0) + std::exp(0.5)) - 2.0;
  const double l2 = std::log(std::exp(3.0) + std::exp(-1.0) + std::exp(2.0)) - 3.0;
  CHECK(g.evaluate({}).item() == doctest::Approx(0.5 * l0 + 2.0 * l2).epsilon(1e-14));
  CHECK(ad::finite_difference_check(g, loss, "z", 1e-5).max_elementwise < 1e-7);
  const auto grads = g.backward(loss);
  for (std::size_t c = 0; c < 3; ++c) CHECK(grads.at("z").at(1, c) == 0.0);  // ignored row

  ad::Graph h;
  auto z = h.parameter("z", Tensor::matrix({{1.0, 2.0, 0.5}, {3.0, -1.0, 2.0}}));
  auto mean = h.cross_entropy_mean(z, h.constant(Tensor({2}, std::vector<double>{1, 0})));
  CHECK(h.evaluate({}).item() == doctest::Approx((l0 + l2) / 2).epsilon(1e-14));
  CHECK(ad::finite_difference_check(h, mean, "z", 1e-5).max_elementwise < 1e-7);
}

TEST_CASE("a composed graph with inputs differentiates correctly") {
  std::mt19937_64 rng(5);
  ad::Graph g;
  auto x = g.input("x", {4, 6});
  auto w = g.parameter("w", random_tensor({3, 6}, rng, 0.5));
  auto gain = g.parameter("gain", random_tensor({6}, rng));
  auto h = g.matmul(g.rms_norm(x, gain), w, false, true);
  auto s = g.softmax(g.causal_mask(g.matmul(h, h, false, true)));
  auto loss = project(g, g.matmul(s, h), rng);
  ad::Bindings b{{"x", random_tensor({4, 6}, rng)}};
  CHECK(worst_fd(g, loss, b) < 1e-6);
}

TEST_CASE("causal mask gives exactly zero attention above the diagonal") {
  ad::Graph g;
  auto p = g.softmax(g.causal_mask(g.constant(Tensor::matrix({{1, 50, 3}, {2, 2, 900}, {0, 0, 0}}))));
  g.evaluate({});
  const auto& v = g.value(p);
  CHECK(v.at(0, 1) == 0.0);
  CHECK(v.at(0, 2) == 0.0);
  CHECK(v.at(1, 2) == 0.0);
  CHECK(v.at(0, 0) == 1.0);
  CHECK(v.at(2, 0) == doctest::Approx(1.0 / 3));
}

TEST_CASE("graph errors") {
  SUBCASE("shape mismatch at build time") {
    ad::Graph g;
    auto a = g.constant(Tensor({2, 3}));
    auto b = g.constant(Tensor({2, 3}));
    CHECK_THROWS_AS(g.matmul(a, b), gisp::ShapeError);
    CHECK_THROWS_AS(g.add(a, g.constant(Tensor({3, 2}))), gisp::ShapeError);
  }
  SUBCASE("missing and mis-shaped bindings") {
    ad::Graph g;
    auto x = g.input("x", {2});
    g.sum(x);
    CHECK_THROWS_AS(g.evaluate({}), gisp::UsageError);
    CHECK_THROWS_AS(g.evaluate({{"x", Tensor({3})}}), gisp::ShapeError);
  }
  SUBCASE("backward before evaluate and on non-scalars") {
    ad::Graph g;
    auto p = g.parameter("p", Tensor({2}, 1.0));
    auto s = g.sum(p);
    CHECK_THROWS_AS(g.backward(s), gisp::UsageError);
    g.evaluate({});
    CHECK_THROWS_AS(g.backward(p), gisp::UsageError);
  }
  SUBCASE("non-finite values name the node") {
    ad::Graph g;
    auto p = g.parameter("p", Tensor({2}, 1.0));
    g.sum(g.scale(p, std::numeric_limits<double>::infinity()));
    try {
      g.evaluate({});
      FAIL("expected NumericError");
    } catch (const gisp::NumericError& e) {
      CHECK(std::string(e.what()).find("scale") != std::string::npos);
    }
  }
  SUBCASE("finite difference epsilon must be positive") {
    ad::Graph g;
    auto s = g.sum(g.parameter("p", Tensor({2}, 1.0)));
    g.evaluate({});
    CHECK_THROWS_AS(ad::finite_difference_check(g, s, "p", 0.0), gisp::UsageError);
  }
}

TEST_CASE("unreachable parameters get zero gradients and backward is counted") {
  ad::Graph g;
  auto a = g.parameter("a", Tensor({2}, 3.0));
  g.parameter("unused", Tensor({3}, 1.0));
  auto s = g.sum(g.multiply(a, a));
  g.evaluate({});
  const auto before = ad::Graph::backward_invocations();
  const auto grads = g.backward(s);
  CHECK(ad::Graph::backward_invocations() == before + 1);
  CHECK(grads.at("a") == Tensor({2}, 6.0));
  CHECK(grads.at("unused") == Tensor({3}, 0.0));
}

TEST_CASE("evaluation is deterministic") {
  std::mt19937_64 rng(2);
  ad::Graph g;
  auto p = g.parameter("p", random_tensor({5, 5}, rng));
  auto l = g.sum(g.softmax(g.matmul(p, p)));
  const double v1 = g.evaluate({}).item();
  const auto g1 = g.backward(l);
  const double v2 = g.evaluate({}).item();
  CHECK(v1 == v2);
  CHECK(g.backward(l) == g1);
}

TEST_CASE("finite-difference report on a quadratic") {
  // L = sum(p^2 * c): exact gradient 2*p*c, central differences are exact up to rounding.
  ad::Graph g;
  Tensor p({3, 40});
  Tensor c({3, 40});
  for (std::size_t i = 0; i < p.size(); ++i) {
    p[i] = 0.1 * static_cast<double>(i % 7) - 0.3;
    c[i] = 1.0 + static_cast<double>(i % 5);
  }
  const auto pn = g.parameter("p", p);
  const auto loss = g.sum(g.multiply(g.multiply(pn, pn), g.constant(c)));
  g.evaluate({});
  const auto all = ad::finite_difference_check(g, loss, "p", 1e-4, 1000);
  CHECK(all.coordinates == 120);
  CHECK(all.normwise < 1e-9);
  const auto some = ad::finite_difference_check(g, loss, "p", 1e-4);
  CHECK(some.coordinates == 64);
  CHECK(g.parameter_value("p") == p);
}
