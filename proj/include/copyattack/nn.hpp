#pragma once

// Small dense networks with explicit forward/backward passes: tanh MLPs, an Elman RNN
// and a masked softmax. Everything is templated on the scalar type.

#include <copyattack/common.hpp>
#include <copyattack/random.hpp>

#include <cmath>
#include <cstdint>
#include <limits>
#include <span>
#include <string>
#include <vector>

namespace copyattack {

/// Per-entry eligibility; an empty mask means every entry is eligible.
using EligibilityMask = std::vector<std::uint8_t>;

/// Fully connected net: tanh on hidden layers, identity on the output (logits).
template <typename Scalar>
struct Mlp {
  std::vector<Matrix<Scalar>> weights;  // layer l maps sizes[l] -> sizes[l+1]
  std::vector<Vector<Scalar>> biases;

  static Mlp zeros(std::span<const int> sizes) {
    if (sizes.size() < 2) throw ConfigError("mlp needs at least input and output sizes");
    Mlp net;
    for (std::size_t l = 0; l + 1 < sizes.size(); ++l) {
      if (sizes[l] <= 0 || sizes[l + 1] <= 0) throw ConfigError("mlp layer sizes must be positive");
      net.weights.push_back(Matrix<Scalar>::Zero(sizes[l + 1], sizes[l]));
      net.biases.push_back(Vector<Scalar>::Zero(sizes[l + 1]));
    }
    return net;
  }

  static Mlp gaussian(std::span<const int> sizes, double stddev, Rng& rng) {
    Mlp net = zeros(sizes);
    net.for_each_block([&](Scalar* d, Eigen::Index n) {
      for (Eigen::Index k = 0; k < n; ++k) d[k] = static_cast<Scalar>(stddev * standard_normal(rng));
    });
    return net;
  }

  int input_size() const { return static_cast<int>(weights.front().cols()); }
  int output_size() const { return static_cast<int>(weights.back().rows()); }
  std::size_t layers() const { return weights.size(); }

  /// Activations of every layer, input first and logits last.
  struct Cache {
    std::vector<Vector<Scalar>> activations;
  };

  Vector<Scalar> forward(const Vector<Scalar>& input, Cache* cache = nullptr) const {
    if (input.size() != input_size()) {
      throw ConfigError("mlp input has size " + std::to_string(input.size()) + ", expected " +
                        std::to_string(input_size()));
    }
    Vector<Scalar> a = input;
    if (cache) cache->activations.assign(1, a);
    for (std::size_t l = 0; l < weights.size(); ++l) {
      Vector<Scalar> z = weights[l] * a + biases[l];
      if (l + 1 < weights.size()) z = z.array().tanh().matrix();
      a = std::move(z);
      if (cache) cache->activations.push_back(a);
    }
    return a;
  }

  /// Accumulates parameter gradients of a scalar loss into `grad` (same shapes) given
  /// dLoss/dlogits, and returns dLoss/dinput.
  Vector<Scalar> backward(const Cache& cache, const Vector<Scalar>& grad_logits, Mlp& grad) const {
    Vector<Scalar> delta = grad_logits;
    for (std::size_t l = weights.size(); l-- > 0;) {
      const Vector<Scalar>& in = cache.activations[l];
      grad.weights[l].noalias() += delta * in.transpose();
      grad.biases[l] += delta;
      Vector<Scalar> up = weights[l].transpose() * delta;
      if (l > 0) up = up.cwiseProduct((Scalar(1) - in.array().square()).matrix());
      delta = std::move(up);
    }
    return delta;
  }

  Mlp zeros_like() const {
    Mlp z;
    for (std::size_t l = 0; l < weights.size(); ++l) {
      z.weights.push_back(Matrix<Scalar>::Zero(weights[l].rows(), weights[l].cols()));
      z.biases.push_back(Vector<Scalar>::Zero(biases[l].size()));
    }
    return z;
  }

  /// Calls f(Scalar* data, Eigen::Index size) for each parameter block in a fixed order.
  template <typename F>
  void for_each_block(F&& f) {
    for (std::size_t l = 0; l < weights.size(); ++l) {
      f(weights[l].data(), weights[l].size());
      f(biases[l].data(), biases[l].size());
    }
  }
  template <typename F>
  void for_each_block(F&& f) const {
    for (std::size_t l = 0; l < weights.size(); ++l) {
      f(weights[l].data(), weights[l].size());
      f(biases[l].data(), biases[l].size());
    }
  }

  bool all_finite() const {
    bool ok = true;
    for_each_block([&](const Scalar* d, Eigen::Index n) {
      for (Eigen::Index k = 0; k < n; ++k) ok = ok && std::isfinite(static_cast<double>(d[k]));
    });
    return ok;
  }
};

/// h_t = tanh(W_in x_t + W_rec h_{t-1} + b), h_0 = 0.
template <typename Scalar>
struct ElmanRnn {
  Matrix<Scalar> input_weights;      // h × e
  Matrix<Scalar> recurrent_weights;  // h × h
  Vector<Scalar> bias;               // h

  static ElmanRnn zeros(int input_dim, int hidden_dim) {
    if (input_dim <= 0 || hidden_dim <= 0) throw ConfigError("rnn sizes must be positive");
    return {Matrix<Scalar>::Zero(hidden_dim, input_dim),
            Matrix<Scalar>::Zero(hidden_dim, hidden_dim), Vector<Scalar>::Zero(hidden_dim)};
  }

  static ElmanRnn gaussian(int input_dim, int hidden_dim, double stddev, Rng& rng) {
    ElmanRnn rnn = zeros(input_dim, hidden_dim);
    rnn.for_each_block([&](Scalar* d, Eigen::Index n) {
      for (Eigen::Index k = 0; k < n; ++k) d[k] = static_cast<Scalar>(stddev * standard_normal(rng));
    });
    return rnn;
  }

  int input_size() const { return static_cast<int>(input_weights.cols()); }
  int hidden_size() const { return static_cast<int>(input_weights.rows()); }

  /// Hidden states h_0..h_T as columns (h_0 = 0) for inputs given as columns of `inputs`.
  Matrix<Scalar> states(const Matrix<Scalar>& inputs) const {
    if (inputs.cols() > 0 && inputs.rows() != input_size()) {
      throw ConfigError("rnn input has dimension " + std::to_string(inputs.rows()) +
                        ", expected " + std::to_string(input_size()));
    }
    Matrix<Scalar> h = Matrix<Scalar>::Zero(hidden_size(), inputs.cols() + 1);
    for (Eigen::Index t = 0; t < inputs.cols(); ++t) {
      h.col(t + 1) =
          (input_weights * inputs.col(t) + recurrent_weights * h.col(t) + bias).array().tanh();
    }
    return h;
  }

  /// Final hidden state; the zero vector for an empty sequence.
  Vector<Scalar> encode(const Matrix<Scalar>& inputs) const {
    return states(inputs).col(inputs.cols());
  }

  /// Backpropagation through time. `grad_states` holds dLoss/dh_t for every t (column
  /// layout of `states`); parameter gradients are accumulated into `grad`.
  void backward(const Matrix<Scalar>& inputs, const Matrix<Scalar>& hidden,
                const Matrix<Scalar>& grad_states, ElmanRnn& grad) const {
    Vector<Scalar> carry = Vector<Scalar>::Zero(hidden_size());
    for (Eigen::Index t = inputs.cols(); t >= 1; --t) {
      const Vector<Scalar> dh = grad_states.col(t) + carry;
      const Vector<Scalar> dz =
          dh.cwiseProduct((Scalar(1) - hidden.col(t).array().square()).matrix());
      grad.input_weights.noalias() += dz * inputs.col(t - 1).transpose();
      grad.recurrent_weights.noalias() += dz * hidden.col(t - 1).transpose();
      grad.bias += dz;
      carry = recurrent_weights.transpose() * dz;
    }
  }

  ElmanRnn zeros_like() const { return zeros(input_size(), hidden_size()); }

  template <typename F>
  void for_each_block(F&& f) {
    f(input_weights.data(), input_weights.size());
    f(recurrent_weights.data(), recurrent_weights.size());
    f(bias.data(), bias.size());
  }
  template <typename F>
  void for_each_block(F&& f) const {
    f(input_weights.data(), input_weights.size());
    f(recurrent_weights.data(), recurrent_weights.size());
    f(bias.data(), bias.size());
  }
};

namespace detail {
inline void check_mask(Eigen::Index n, std::span<const std::uint8_t> mask) {
  if (!mask.empty() && static_cast<Eigen::Index>(mask.size()) != n) {
    throw ConfigError("mask length does not match logits");
  }
}
inline bool eligible(std::span<const std::uint8_t> mask, Eigen::Index i) {
  return mask.empty() || mask[static_cast<std::size_t>(i)] != 0;
}
}  // namespace detail

/// log-sum-exp over eligible entries (max-subtracted). Throws when none is eligible.
template <typename Derived>
typename Derived::Scalar masked_logsumexp(const Eigen::MatrixBase<Derived>& logits,
                                          std::span<const std::uint8_t> mask) {
  using Scalar = typename Derived::Scalar;
  detail::check_mask(logits.size(), mask);
  Scalar top = -std::numeric_limits<Scalar>::infinity();
  for (Eigen::Index i = 0; i < logits.size(); ++i) {
    if (detail::eligible(mask, i)) top = std::max(top, logits[i]);
  }
  if (top == -std::numeric_limits<Scalar>::infinity()) {
    throw ConfigError("masked softmax: every entry is masked");
  }
  Scalar sum = 0;
  for (Eigen::Index i = 0; i < logits.size(); ++i) {
    if (detail::eligible(mask, i)) sum += std::exp(logits[i] - top);
  }
  return top + std::log(sum);
}

/// Softmax restricted to eligible entries; masked entries are exactly zero.
template <typename Derived>
Vector<typename Derived::Scalar> masked_softmax(const Eigen::MatrixBase<Derived>& logits,
                                                std::span<const std::uint8_t> mask = {}) {
  using Scalar = typename Derived::Scalar;
  const Scalar lse = masked_logsumexp(logits, mask);
  Vector<Scalar> p = Vector<Scalar>::Zero(logits.size());
  for (Eigen::Index i = 0; i < logits.size(); ++i) {
    if (detail::eligible(mask, i)) p[i] = std::exp(logits[i] - lse);
  }
  return p;
}

/// Inverse-CDF draw from a probability vector.
template <typename Derived>
Eigen::Index sample_categorical(const Eigen::MatrixBase<Derived>& probabilities, Rng& rng) {
  double u = uniform01(rng);
  Eigen::Index last = -1;
  for (Eigen::Index i = 0; i < probabilities.size(); ++i) {
    if (probabilities[i] <= 0) continue;
    last = i;
    if (u < probabilities[i]) return i;
    u -= probabilities[i];
  }
  return last;
}

}  // namespace copyattack
