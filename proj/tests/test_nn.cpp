#include <copyattack/nn.hpp>

#include <doctest.h>

#include <cmath>

using namespace copyattack;

namespace {

double tanh_ref(double v) { return std::tanh(v); }

}  // namespace

TEST_CASE("mlp forward: zero weights give zero logits") {
  const int sizes[] = {4, 6, 3};
  const auto net = Mlp<double>::zeros(sizes);
  const VectorXd out = net.forward(VectorXd::Constant(4, 0.7));
  CHECK(out.size() == 3);
  CHECK(out.isZero(0.0));
}

TEST_CASE("mlp forward: single identity layer passes the input through") {
  const int sizes[] = {3, 3};
  auto net = Mlp<double>::zeros(sizes);
  net.weights[0].setIdentity();
  const VectorXd in = (VectorXd(3) << 0.5, -2.0, 7.25).finished();
  CHECK(net.forward(in) == in);
}

TEST_CASE("mlp forward matches straight-line arithmetic") {
  Rng rng(11);
  const int sizes[] = {2, 3, 2};
  const auto net = Mlp<double>::gaussian(sizes, 0.5, rng);
  const VectorXd in = (VectorXd(2) << 0.3, -1.1).finished();
  const auto& W1 = net.weights[0];
  const auto& b1 = net.biases[0];
  const auto& W2 = net.weights[1];
  const auto& b2 = net.biases[1];
  double h[3];
  for (int i = 0; i < 3; ++i) h[i] = tanh_ref(W1(i, 0) * 0.3 + W1(i, 1) * -1.1 + b1[i]);
  const VectorXd out = net.forward(in);
  for (int o = 0; o < 2; ++o) {
    const double want = W2(o, 0) * h[0] + W2(o, 1) * h[1] + W2(o, 2) * h[2] + b2[o];
    CHECK(out[o] == doctest::Approx(want).epsilon(1e-12));
  }
}

TEST_CASE("mlp forward rejects a wrong input size") {
  const int sizes[] = {4, 2};
  const auto net = Mlp<double>::zeros(sizes);
  CHECK_THROWS_AS(net.forward(VectorXd::Zero(3)), ConfigError);
}

TEST_CASE("mlp backward matches finite differences of a linear read-out") {
  Rng rng(5);
  const int sizes[] = {3, 4, 2};
  auto net = Mlp<double>::gaussian(sizes, 0.8, rng);
  const VectorXd in = (VectorXd(3) << 0.2, -0.4, 0.9).finished();
  const VectorXd w = (VectorXd(2) << 1.5, -0.5).finished();  // loss = w · logits
  Mlp<double>::Cache cache;
  net.forward(in, &cache);
  auto grad = net.zeros_like();
  const VectorXd din = net.backward(cache, w, grad);

  const double h = 1e-6;
  for (Eigen::Index k = 0; k < net.weights[0].size(); ++k) {
    auto probe = net;
    probe.weights[0].data()[k] += h;
    const double up = w.dot(probe.forward(in));
    probe.weights[0].data()[k] -= 2 * h;
    const double down = w.dot(probe.forward(in));
    CHECK(grad.weights[0].data()[k] == doctest::Approx((up - down) / (2 * h)).epsilon(1e-6));
  }
  for (Eigen::Index i = 0; i < 3; ++i) {
    VectorXd a = in, b = in;
    a[i] += h;
    b[i] -= h;
    CHECK(din[i] == doctest::Approx((w.dot(net.forward(a)) - w.dot(net.forward(b))) / (2 * h)).epsilon(1e-6));
  }
}

TEST_CASE("masked softmax") {
  SUBCASE("uniform over four zero logits") {
    const VectorXd p = masked_softmax(VectorXd::Zero(4));
    for (int i = 0; i < 4; ++i) CHECK(p[i] == doctest::Approx(0.25));
  }
  SUBCASE("single eligible entry takes all the mass") {
    const EligibilityMask m{0, 0, 1, 0};
    const VectorXd p = masked_softmax((VectorXd(4) << 3, 9, -1, 4).finished(), m);
    CHECK(p[2] == 1.0);
    CHECK(p[0] == 0.0);
    CHECK(p[1] == 0.0);
    CHECK(p[3] == 0.0);
  }
  SUBCASE("analytic two-way softmax") {
    const VectorXd p = masked_softmax((VectorXd(2) << 1, 2).finished());
    const double e = std::exp(1.0);
    CHECK(p[0] == doctest::Approx(1 / (1 + e)).epsilon(1e-12));
    CHECK(p[0] == doctest::Approx(0.26894).epsilon(1e-5));
    CHECK(p[1] == doctest::Approx(0.73106).epsilon(1e-5));
  }
  SUBCASE("large logits stay finite") {
    const VectorXd p = masked_softmax((VectorXd(3) << 1000, 999, -1000).finished());
    CHECK(p.allFinite());
    CHECK(p.sum() == doctest::Approx(1.0));
  }
  SUBCASE("everything masked is an error") {
    const EligibilityMask m{0, 0};
    CHECK_THROWS_AS(masked_softmax(VectorXd::Zero(2), m), ConfigError);
  }
  SUBCASE("mask length must match") {
    const EligibilityMask m{1};
    CHECK_THROWS_AS(masked_softmax(VectorXd::Zero(2), m), ConfigError);
  }
}

TEST_CASE("rnn encode") {
  SUBCASE("empty sequence gives the zero state") {
    Rng rng(1);
    const auto rnn = ElmanRnn<double>::gaussian(3, 5, 0.3, rng);
    const VectorXd x = rnn.encode(MatrixXd(3, 0));
    CHECK(x.size() == 5);
    CHECK(x.isZero(0.0));
  }
  SUBCASE("one step with zero weights is tanh(bias)") {
    auto rnn = ElmanRnn<double>::zeros(2, 3);
    rnn.bias << 0.1, -0.7, 2.0;
    const VectorXd x = rnn.encode(MatrixXd::Constant(2, 1, 4.0));
    for (int i = 0; i < 3; ++i) CHECK(x[i] == doctest::Approx(std::tanh(rnn.bias[i])).epsilon(1e-15));
  }
  SUBCASE("three steps match a hand-unrolled recurrence") {
    Rng rng(2);
    const auto rnn = ElmanRnn<double>::gaussian(2, 2, 0.7, rng);
    MatrixXd in(2, 3);
    in << 0.5, -1.0, 0.25, 1.5, 0.0, -0.75;
    double h[2] = {0, 0};
    for (int t = 0; t < 3; ++t) {
      double next[2];
      for (int i = 0; i < 2; ++i) {
        next[i] = std::tanh(rnn.input_weights(i, 0) * in(0, t) + rnn.input_weights(i, 1) * in(1, t) +
                            rnn.recurrent_weights(i, 0) * h[0] + rnn.recurrent_weights(i, 1) * h[1] +
                            rnn.bias[i]);
      }
      h[0] = next[0];
      h[1] = next[1];
    }
    const VectorXd x = rnn.encode(in);
    CHECK(x[0] == doctest::Approx(h[0]).epsilon(1e-12));
    CHECK(x[1] == doctest::Approx(h[1]).epsilon(1e-12));
  }
  SUBCASE("dimension mismatch") {
    const auto rnn = ElmanRnn<double>::zeros(2, 2);
    CHECK_THROWS_AS(rnn.encode(MatrixXd::Zero(3, 1)), ConfigError);
  }
}

TEST_CASE("rnn backward through time matches finite differences") {
  Rng rng(9);
  auto rnn = ElmanRnn<double>::gaussian(3, 4, 0.6, rng);
  MatrixXd in = MatrixXd::NullaryExpr(3, 4, [&] { return standard_normal(rng); });
  // loss = Σ_t c_t · h_t with c_0 ignored (h_0 is constant)
  MatrixXd c = MatrixXd::NullaryExpr(4, 5, [&] { return standard_normal(rng); });
  auto loss = [&](const ElmanRnn<double>& r) { return (r.states(in).array() * c.array()).sum(); };
  auto grad = rnn.zeros_like();
  rnn.backward(in, rnn.states(in), c, grad);

  std::vector<double> analytic;
  grad.for_each_block([&](const double* d, Eigen::Index n) { analytic.insert(analytic.end(), d, d + n); });
  std::size_t k = 0;
  const double h = 1e-6;
  rnn.for_each_block([&](double* d, Eigen::Index n) {
    for (Eigen::Index i = 0; i < n; ++i, ++k) {
      const double saved = d[i];
      d[i] = saved + h;
      const double up = loss(rnn);
      d[i] = saved - h;
      const double down = loss(rnn);
      d[i] = saved;
      CHECK(analytic[k] == doctest::Approx((up - down) / (2 * h)).epsilon(1e-6));
    }
  });
}

TEST_CASE("categorical sampling never returns zero-probability entries") {
  Rng rng(3);
  const VectorXd p = (VectorXd(4) << 0.0, 0.5, 0.0, 0.5).finished();
  for (int i = 0; i < 2000; ++i) {
    const auto k = sample_categorical(p, rng);
    CHECK((k == 1 || k == 3));
  }
}
