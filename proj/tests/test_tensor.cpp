#include <cmath>
#include <random>

#include "doctest.h"
#include "dsc/tensor.hpp"
#include "testutil.hpp"

using dsc::AttentionMask;
using dsc::GradientTable;
using dsc::Graph;
using dsc::Tensor;
using testutil::fd_gradient;
using testutil::max_rel_err;
using testutil::random_matrix;

TEST_CASE("matmul identity and hand-checked product") {
  std::mt19937_64 rng(11);
  Tensor m = random_matrix(rng, 3, 3);
  std::vector<double> eye = {1, 0, 0, 0, 1, 0, 0, 0, 1};
  Graph g;
  Tensor prod = g.matmul(Tensor::matrix(3, 3, eye), m);
  CHECK(dsc::bitwise_equal(prod.values(), m.values()));

  Tensor a = Tensor::from_rows({{1, 2}, {3, 4}});
  Tensor b = Tensor::from_rows({{0}, {1}});
  Tensor c = g.matmul(a, b);
  CHECK(c.at(0, 0) == doctest::Approx(2.0));
  CHECK(c.at(1, 0) == doctest::Approx(4.0));
}

TEST_CASE("matmul rejects mismatched inner dimensions with both shapes named") {
  Graph g;
  Tensor a = Tensor::zeros({4, 5});
  Tensor b = Tensor::zeros({3, 2});
  CHECK_THROWS_WITH_AS(g.matmul(a, b),
                       "matmul: inner dimensions disagree: 4x5 vs 3x2",
                       std::invalid_argument);
}

TEST_CASE("matmul backward matches finite differences") {
  std::mt19937_64 rng(42);
  Tensor a = random_matrix(rng, 4, 5, true);
  Tensor b = random_matrix(rng, 5, 2, true);
  Tensor mixer = random_matrix(rng, 2, 3);

  const auto loss_fn = [&]() {
    Graph g;
    return g.sum(g.matmul(g.matmul(a, b), mixer)).value();
  };
  Graph g;
  Tensor loss = g.sum(g.matmul(g.matmul(a, b), mixer));
  g.backward(loss);

  CHECK(max_rel_err(a.grad(), fd_gradient(loss_fn, a), 1e-9) < 1e-6);
  CHECK(max_rel_err(b.grad(), fd_gradient(loss_fn, b), 1e-9) < 1e-6);
}

TEST_CASE("softmax_rows uniform, closed form, and row sums") {
  Graph g;
  Tensor equal = Tensor::from_rows({{2.5, 2.5, 2.5, 2.5}});
  Tensor u = g.softmax_rows(equal);
  for (std::size_t j = 0; j < 4; ++j) CHECK(u.at(0, j) == doctest::Approx(0.25).epsilon(1e-12));

  Tensor x = Tensor::from_rows({{0.0, std::log(3.0)}});
  Tensor y = g.softmax_rows(x);
  CHECK(y.at(0, 0) == doctest::Approx(0.25).epsilon(1e-12));
  CHECK(y.at(0, 1) == doctest::Approx(0.75).epsilon(1e-12));

  std::mt19937_64 rng(7);
  for (int iter = 0; iter < 20; ++iter) {
    Tensor r = random_matrix(rng, 3, 6, false, 4.0);
    Tensor s = g.softmax_rows(r);
    for (std::size_t i = 0; i < 3; ++i) {
      double row_sum = 0.0;
      for (std::size_t j = 0; j < 6; ++j) {
        CHECK(s.at(i, j) >= 0.0);
        row_sum += s.at(i, j);
      }
      CHECK(std::abs(row_sum - 1.0) < 1e-12);
    }
  }
}

TEST_CASE("softmax_rows is invariant to per-row constant shifts") {
  std::mt19937_64 rng(13);
  Graph g;
  for (double c : {-100.0, -3.2, 0.5, 42.0}) {
    Tensor x = random_matrix(rng, 2, 5);
    std::vector<double> shifted(x.values().begin(), x.values().end());
    for (double& v : shifted) v += c;
    Tensor a = g.softmax_rows(x);
    Tensor b = g.softmax_rows(Tensor::matrix(2, 5, std::move(shifted)));
    CHECK(dsc::max_abs_diff(a.values(), b.values()) < 1e-12);
  }
}

TEST_CASE("concat_rows ordering, single part, and split gradient") {
  std::mt19937_64 rng(3);
  Graph g;
  Tensor a = random_matrix(rng, 2, 4, true);
  Tensor b = random_matrix(rng, 3, 4, true);

  Tensor single = g.concat_rows({a});
  CHECK(dsc::bitwise_equal(single.values(), a.values()));

  Tensor cat = g.concat_rows({a, b});
  CHECK(cat.rows() == 5);
  CHECK(cat.cols() == 4);
  CHECK(cat.at(0, 0) == a.at(0, 0));
  CHECK(cat.at(2, 1) == b.at(0, 1));

  Tensor loss = g.sum(cat);
  g.backward(loss);
  for (double v : a.grad()) CHECK(v == 1.0);
  for (double v : b.grad()) CHECK(v == 1.0);

  Tensor ragged = Tensor::zeros({2, 3});
  CHECK_THROWS_AS(g.concat_rows({a, ragged}), std::invalid_argument);
}

TEST_CASE("scaled_dot_attention single key and zero-query cases") {
  std::mt19937_64 rng(5);
  Graph g;

  Tensor q = random_matrix(rng, 4, 3);
  Tensor k1 = random_matrix(rng, 1, 3);
  Tensor v1 = random_matrix(rng, 1, 3);
  Tensor out1 = g.scaled_dot_attention(q, k1, v1);
  for (std::size_t i = 0; i < 4; ++i)
    for (std::size_t j = 0; j < 3; ++j) CHECK(out1.at(i, j) == doctest::Approx(v1.at(0, j)));

  Tensor q0 = Tensor::zeros({2, 3});
  Tensor k = random_matrix(rng, 5, 3);
  Tensor v = random_matrix(rng, 5, 3);
  Tensor out = g.scaled_dot_attention(q0, k, v);
  for (std::size_t j = 0; j < 3; ++j) {
    double mean = 0.0;
    for (std::size_t r = 0; r < 5; ++r) mean += v.at(r, j);
    mean /= 5.0;
    CHECK(out.at(0, j) == doctest::Approx(mean).epsilon(1e-12));
  }
}

TEST_CASE("scaled_dot_attention gradients match finite differences") {
  std::mt19937_64 rng(2024);
  Tensor q = random_matrix(rng, 3, 2, true);
  Tensor k = random_matrix(rng, 3, 2, true);
  Tensor v = random_matrix(rng, 3, 2, true);
  Tensor mixer = random_matrix(rng, 2, 2);

  const auto loss_fn = [&]() {
    Graph g;
    return g.sum(g.matmul(g.scaled_dot_attention(q, k, v), mixer)).value();
  };
  Graph g;
  Tensor loss = g.sum(g.matmul(g.scaled_dot_attention(q, k, v), mixer));
  g.backward(loss);

  CHECK(max_rel_err(q.grad(), fd_gradient(loss_fn, q), 1e-9) < 1e-6);
  CHECK(max_rel_err(k.grad(), fd_gradient(loss_fn, k), 1e-9) < 1e-6);
  CHECK(max_rel_err(v.grad(), fd_gradient(loss_fn, v), 1e-9) < 1e-6);
}

TEST_CASE("masked attention zeroes masked weights exactly and rejects full masks") {
  std::mt19937_64 rng(77);
  Graph g;
  Tensor q = random_matrix(rng, 3, 4);
  Tensor k = random_matrix(rng, 5, 4);
  Tensor v = random_matrix(rng, 5, 4);
  AttentionMask mask(3, 5, true);
  mask.set(0, 1, false);
  mask.set(0, 3, false);
  mask.set(2, 0, false);

  Tensor weights;
  g.scaled_dot_attention(q, k, v, &mask, &weights);
  CHECK(weights.at(0, 1) == 0.0);
  CHECK(weights.at(0, 3) == 0.0);
  CHECK(weights.at(2, 0) == 0.0);
  for (std::size_t i = 0; i < 3; ++i) {
    double row = 0.0;
    for (std::size_t j = 0; j < 5; ++j) row += weights.at(i, j);
    CHECK(std::abs(row - 1.0) < 1e-12);
  }

  AttentionMask full(3, 5, true);
  for (std::size_t j = 0; j < 5; ++j) full.set(1, j, false);
  CHECK_THROWS_AS(g.scaled_dot_attention(q, k, v, &full), std::invalid_argument);
}

TEST_CASE("cross_entropy closed-form values and validation") {
  Graph g;
  Tensor onehot = Tensor::from_rows({{0, 1, 0, 0}, {0, 0, 0, 1}});
  std::vector<int> targets = {1, 3};
  CHECK(g.cross_entropy(onehot, targets).value() == doctest::Approx(0.0));

  Tensor uniform = Tensor::full({3, 4}, 0.25);
  std::vector<int> t2 = {0, 2, 3};
  CHECK(g.cross_entropy(uniform, t2).value() ==
        doctest::Approx(std::log(4.0)).epsilon(1e-12));

  std::vector<int> bad = {0, 7, 1};
  CHECK_THROWS_AS(g.cross_entropy(uniform, bad), std::invalid_argument);

  Tensor not_probs = Tensor::full({1, 4}, 0.3);
  std::vector<int> t3 = {0};
  CHECK_THROWS_AS(g.cross_entropy(not_probs, t3), std::invalid_argument);
}

TEST_CASE("cross_entropy matches direct -mean log p recomputation") {
  std::mt19937_64 rng(99);
  for (int iter = 0; iter < 10; ++iter) {
    Graph g;
    Tensor logits = random_matrix(rng, 4, 6, false, 2.0);
    Tensor probs = g.softmax_rows(logits);
    std::uniform_int_distribution<int> pick(0, 5);
    std::vector<int> targets(4);
    for (auto& t : targets) t = pick(rng);

    double expected = 0.0;
    for (std::size_t i = 0; i < 4; ++i) {
      expected -= std::log(probs.at(i, static_cast<std::size_t>(targets[i])));
    }
    expected /= 4.0;
    CHECK(g.cross_entropy(probs, targets).value() == doctest::Approx(expected).epsilon(1e-12));
  }
}

TEST_CASE("backward fills sum gradients and resets between calls") {
  Graph g;
  Tensor w = Tensor::matrix(2, 2, {1.0, 2.0, 3.0, 4.0}, true);
  Tensor loss = g.sum(w);
  g.backward(loss);
  for (double v : w.grad()) CHECK(v == 1.0);

  // second call overwrites rather than accumulates
  g.backward(loss);
  for (double v : w.grad()) CHECK(v == 1.0);
}

TEST_CASE("backward of sum(W x) matches finite differences") {
  std::mt19937_64 rng(17);
  Tensor w = random_matrix(rng, 3, 4, true);
  Tensor x = random_matrix(rng, 4, 2, true);
  const auto loss_fn = [&]() {
    Graph g;
    return g.sum(g.matmul(w, x)).value();
  };
  Graph g;
  g.backward(g.sum(g.matmul(w, x)));
  CHECK(max_rel_err(w.grad(), fd_gradient(loss_fn, w), 1e-9) < 1e-6);
  CHECK(max_rel_err(x.grad(), fd_gradient(loss_fn, x), 1e-9) < 1e-6);
}

TEST_CASE("tensor off the loss path gets a zero gradient") {
  Graph g;
  Tensor w = Tensor::matrix(2, 2, {1, 1, 1, 1}, true);
  Tensor unused = Tensor::matrix(2, 2, {5, 5, 5, 5}, true);
  Tensor detour = g.scale(unused, 2.0);  // recorded but not feeding the loss
  (void)detour;
  g.backward(g.sum(w));
  for (double v : unused.grad()) CHECK(v == 0.0);
}

TEST_CASE("backward rejects non-scalar and foreign losses") {
  Graph g;
  Tensor w = Tensor::matrix(2, 2, {1, 2, 3, 4}, true);
  Tensor doubled = g.scale(w, 2.0);
  CHECK_THROWS_AS(g.backward(doubled), std::invalid_argument);

  Graph other;
  Tensor loss = other.sum(w);
  CHECK_THROWS_AS(g.backward(loss), std::invalid_argument);
}

TEST_CASE("shared input accumulates gradient from both consumers") {
  // diamond: loss = sum(W A) + sum(W B); dL/dW = (A 1)^T-ish via both paths
  std::mt19937_64 rng(31);
  Tensor w = random_matrix(rng, 2, 3, true);
  Tensor a = random_matrix(rng, 3, 2);
  Tensor b = random_matrix(rng, 3, 2);
  const auto loss_fn = [&]() {
    Graph g;
    return g.add(g.sum(g.matmul(w, a)), g.sum(g.matmul(w, b))).value();
  };
  Graph g;
  g.backward(g.add(g.sum(g.matmul(w, a)), g.sum(g.matmul(w, b))));
  CHECK(max_rel_err(w.grad(), fd_gradient(loss_fn, w), 1e-9) < 1e-6);
}

TEST_CASE("finite differences agree with autodiff across random shapes for every op") {
  std::mt19937_64 rng(1234);
  std::uniform_int_distribution<std::size_t> dim(1, 5);
  int checked = 0;
  for (int iter = 0; iter < 24; ++iter) {
    const std::size_t m = dim(rng), n = dim(rng), k = dim(rng);
    Tensor x = random_matrix(rng, m, n, true);
    Tensor y = random_matrix(rng, m, n, true);
    Tensor z = random_matrix(rng, n, k, true);
    Tensor bias = random_matrix(rng, 1, n, true);
    Tensor gain = random_matrix(rng, 1, n, true, 0.5);
    Tensor mixer = random_matrix(rng, n, 2);
    Tensor mixer_k = random_matrix(rng, k, 2);
    Tensor mixer_m = random_matrix(rng, m, 2);
    std::uniform_int_distribution<int> pick(0, static_cast<int>(n) - 1);
    std::vector<int> targets(m);
    for (auto& t : targets) t = pick(rng);
    AttentionMask mask(m, m, true);
    if (m > 1) mask.set(0, m - 1, false);

    struct Case {
      const char* name;
      std::function<Tensor(Graph&)> build;
    };
    const Case cases[] = {
        {"matmul", [&](Graph& g) { return g.matmul(g.matmul(x, z), mixer_k); }},
        {"transpose", [&](Graph& g) { return g.matmul(g.transpose(x), mixer_m); }},
        {"add", [&](Graph& g) { return g.matmul(g.add(x, y), mixer); }},
        {"add_rowwise", [&](Graph& g) { return g.matmul(g.add_rowwise(x, bias), mixer); }},
        {"scale", [&](Graph& g) { return g.matmul(g.scale(x, -1.7), mixer); }},
        {"concat_rows", [&](Graph& g) { return g.matmul(g.concat_rows({x, y}), mixer); }},
        {"concat_cols", [&](Graph& g) {
           return g.matmul(g.transpose(g.concat_cols({x, y})), mixer_m);
         }},
        {"slice_cols", [&](Graph& g) {
           return g.matmul(g.transpose(g.slice_cols(x, 0, n)), mixer_m);
         }},
        {"gather_rows", [&](Graph& g) {
           return g.matmul(g.gather_rows(x, {0, m - 1, 0}), mixer);
         }},
        {"softmax_rows", [&](Graph& g) { return g.matmul(g.softmax_rows(x), mixer); }},
        {"masked_softmax", [&](Graph& g) {
           return g.matmul(g.masked_softmax_rows(g.matmul(x, g.transpose(y)), mask), mixer_m);
         }},
        {"gelu", [&](Graph& g) { return g.matmul(g.gelu(x), mixer); }},
        {"layer_norm", [&](Graph& g) {
           return g.matmul(g.layer_norm(x, gain, bias), mixer);
         }},
        {"cross_entropy", [&](Graph& g) {
           return g.scale(g.cross_entropy(g.softmax_rows(x), targets), 1.0);
         }},
    };

    for (const auto& c : cases) {
      const auto loss_fn = [&]() {
        Graph g;
        Tensor out = c.build(g);
        return (out.is_scalar() ? out : g.sum(out)).value();
      };
      Graph g;
      Tensor out = c.build(g);
      Tensor loss = out.is_scalar() ? out : g.sum(out);
      GradientTable table = g.gradients(loss);
      for (Tensor* input : {&x, &y, &z, &bias, &gain}) {
        const auto* found = table.find(input->node());
        if (!found) continue;  // op does not consume this input
        // Floor the denominator above the ~1e-9 absolute noise of central
        // differences so near-zero coordinates do not read as disagreement.
        const double err = max_rel_err(table.of(*input), fd_gradient(loss_fn, *input), 1e-4);
        INFO("op = " << std::string(c.name) << " iter = " << iter);
        CHECK(err < 1e-5);
      }
      ++checked;
    }
    if (checked >= 20 * 14) break;
  }
  CHECK(checked >= 20);
}

TEST_CASE("graph entries stay topologically ordered") {
  std::mt19937_64 rng(55);
  Graph g;
  Tensor a = random_matrix(rng, 3, 3, true);
  Tensor b = random_matrix(rng, 3, 3, true);
  Tensor c = g.matmul(g.add(a, b), g.transpose(a));
  Tensor loss = g.sum(g.softmax_rows(c));
  (void)loss;

  std::vector<std::uint64_t> produced;
  for (const auto& e : g.entries()) {
    for (std::uint64_t in : e.input_ids) {
      CHECK(in < e.output_id);
      // inputs are leaves or outputs of earlier entries
      bool is_earlier_output = false;
      for (std::uint64_t p : produced) is_earlier_output |= (p == in);
      const bool is_leaf = in == a.node_id() || in == b.node_id();
      CHECK((is_earlier_output || is_leaf));
    }
    produced.push_back(e.output_id);
  }
}

TEST_CASE("replaying a graph is bit-deterministic") {
  const auto run = [](std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    Tensor x = random_matrix(rng, 4, 6, true);
    Tensor w = random_matrix(rng, 6, 6, true);
    Graph g;
    Tensor probs = g.softmax_rows(g.gelu(g.matmul(x, w)));
    std::vector<int> targets = {1, 2, 3, 4};
    Tensor loss = g.cross_entropy(probs, targets);
    g.backward(loss);
    std::vector<double> out(probs.values().begin(), probs.values().end());
    auto gw = w.grad();
    out.insert(out.end(), gw.begin(), gw.end());
    out.push_back(loss.value());
    return out;
  };
  const auto r1 = run(2718);
  const auto r2 = run(2718);
  CHECK(dsc::bitwise_equal(r1, r2));
}

TEST_CASE("tensor invariants: shape arithmetic and grad shape") {
  CHECK_THROWS_AS(Tensor::matrix(2, 3, {1.0, 2.0}), std::invalid_argument);
  CHECK_THROWS_AS(Tensor::zeros({2, 0}), std::invalid_argument);
  CHECK_THROWS_AS(Tensor::zeros({2, 2, 2, 2}), std::invalid_argument);

  std::mt19937_64 rng(8);
  Tensor w = random_matrix(rng, 3, 2, true);
  Graph g;
  g.backward(g.sum(g.gelu(w)));
  CHECK(w.grad().size() == w.numel());
}
