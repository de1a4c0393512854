#pragma once

#include <functional>
#include <memory>
#include <string>
#include <utility>
#include <vector>

#include "utts/common.hpp"

namespace utts::grad {

class Tensor;
using TensorPtr = std::shared_ptr<Tensor>;

// Double-precision value node. Gradient storage is allocated on first use.
// Shapes are 1-D or 2-D for activations; conv weights use {out, in, k}.
class Tensor {
 public:
  std::vector<int> shape;
  std::vector<double> v;
  std::vector<double> g;
  bool trainable{false};

  size_t numel() const { return v.size(); }
  int rows() const { return shape.empty() ? 0 : shape[0]; }
  int cols() const { return shape.size() < 2 ? 1 : shape[1]; }

  void ensure_grad() {
    if (g.size() != v.size()) g.assign(v.size(), 0.0);
  }
  void zero_grad() {
    if (!g.empty()) g.assign(g.size(), 0.0);
  }

  static TensorPtr make(std::vector<int> shape, double fill = 0.0);
  static TensorPtr from(std::vector<int> shape, std::vector<double> values);
  static TensorPtr scalar(double value);
  static TensorPtr randn(std::vector<int> shape, double stddev, Rng& rng);
  static TensorPtr from_matrix(const RowMatrix& m);
  RowMatrix to_matrix() const;
};

// Records backward closures during a forward pass; backward() replays them
// in reverse. Each training step owns its own tape, so two models in one
// process never share state.
class Tape {
 public:
  void push(std::function<void()> back) { ops_.push_back(std::move(back)); }
  // Seeds d(loss)/d(loss) = seed and propagates. Gradients accumulate, so
  // several backward calls on one tape compose additively.
  void backward(const TensorPtr& loss, double seed = 1.0);
  void clear() { ops_.clear(); }
  size_t size() const { return ops_.size(); }

 private:
  std::vector<std::function<void()>> ops_;
};

// --- differentiable operations ------------------------------------------
// All ops validate shapes at call time and throw NumericsError if a forward
// pass produces a non-finite value.

TensorPtr linear(Tape& t, const TensorPtr& x, const TensorPtr& w, const TensorPtr& b = nullptr);
// x: T x Cin, w: {Cout, Cin, K}. Output rows: T + pad_l + pad_r - K + 1.
TensorPtr conv1d(Tape& t, const TensorPtr& x, const TensorPtr& w, const TensorPtr& b, int pad_left,
                 int pad_right);
TensorPtr relu(Tape& t, const TensorPtr& x);
TensorPtr leaky_relu(Tape& t, const TensorPtr& x, double slope = 0.01);
TensorPtr sigmoid(Tape& t, const TensorPtr& x);
TensorPtr tanh_op(Tape& t, const TensorPtr& x);
TensorPtr softplus(Tape& t, const TensorPtr& x);
TensorPtr abs_op(Tape& t, const TensorPtr& x);
TensorPtr softmax_rows(Tape& t, const TensorPtr& x);
TensorPtr log_softmax_rows(Tape& t, const TensorPtr& x);
TensorPtr mean_all(Tape& t, const TensorPtr& x);
TensorPtr sum_all(Tape& t, const TensorPtr& x);
TensorPtr add(Tape& t, const TensorPtr& a, const TensorPtr& b);
TensorPtr sub(Tape& t, const TensorPtr& a, const TensorPtr& b);
TensorPtr mul(Tape& t, const TensorPtr& a, const TensorPtr& b);
TensorPtr scale(Tape& t, const TensorPtr& x, double c);
TensorPtr add_scalar(Tape& t, const TensorPtr& x, double c);
// Adds a length-M row vector to every row of an N x M matrix (bias add).
TensorPtr add_rowvec(Tape& t, const TensorPtr& x, const TensorPtr& row);
TensorPtr embedding(Tape& t, const TensorPtr& table, const std::vector<int>& ids);
TensorPtr transpose(Tape& t, const TensorPtr& x);
TensorPtr concat_cols(Tape& t, const TensorPtr& a, const TensorPtr& b);
TensorPtr stack_rows(Tape& t, const std::vector<TensorPtr>& rows);
TensorPtr reshape(Tape& t, const TensorPtr& x, std::vector<int> shape);

struct GruParams {
  TensorPtr wz, uz, bz;  // update gate
  TensorPtr wr, ur, br;  // reset gate
  TensorPtr wn, un, bn;  // candidate
};

// One GRU step: h' = (1-z) o n + z o h. x: 1 x D, h: 1 x H.
TensorPtr gru_cell(Tape& t, const TensorPtr& x, const TensorPtr& h, const GruParams& p);

// --- parameters, optimizer, checking --------------------------------------

class ParameterSet {
 public:
  TensorPtr add(const std::string& name, TensorPtr t, bool trainable = true);
  TensorPtr get(const std::string& name) const;
  bool has(const std::string& name) const;
  const std::vector<std::pair<std::string, TensorPtr>>& items() const { return items_; }
  void zero_grads();
  size_t total_params() const;

  // Checkpoint: versioned magic, text index (name, shape, offset, count),
  // then raw little-endian doubles.
  void save(const std::string& path) const;
  void load(const std::string& path);

 private:
  std::vector<std::pair<std::string, TensorPtr>> items_;
};

struct AdamConfig {
  double lr{1e-3};
  double beta1{0.9};
  double beta2{0.999};
  double eps{1e-8};
};

class Adam {
 public:
  explicit Adam(AdamConfig cfg) : cfg_(cfg) {}
  // Standard update with bias correction; zeroes gradients afterwards.
  // Tensors with trainable == false are skipped.
  void step(ParameterSet& params);
  int64_t steps_taken() const { return t_; }

 private:
  AdamConfig cfg_;
  int64_t t_{0};
  std::vector<std::vector<double>> m_, v_;
  bool initialized_{false};
};

// Central-difference gradient check of a scalar-valued tensor function.
// Returns the max relative error over coordinates of x.
double grad_check(const std::function<TensorPtr(Tape&, const TensorPtr&)>& f, const TensorPtr& x,
                  double h = 1e-5);

}  // namespace utts::grad
