#include "utts/grad.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <sstream>

namespace utts::grad {

namespace {

void check_finite(const Tensor& t, const char* op) {
  for (double x : t.v) {
    if (!std::isfinite(x)) throw NumericsError(std::string(op) + ": non-finite value in output");
  }
}

size_t shape_numel(const std::vector<int>& shape) {
  size_t n = 1;
  for (int d : shape) {
    require(d > 0, "tensor dimensions must be positive");
    n *= static_cast<size_t>(d);
  }
  return n;
}

void same_shape(const TensorPtr& a, const TensorPtr& b, const char* op) {
  require(a->shape == b->shape, std::string(op) + ": shape mismatch");
}

}  // namespace

TensorPtr Tensor::make(std::vector<int> shape, double fill) {
  auto t = std::make_shared<Tensor>();
  size_t n = shape_numel(shape);
  t->shape = std::move(shape);
  t->v.assign(n, fill);
  return t;
}

TensorPtr Tensor::from(std::vector<int> shape, std::vector<double> values) {
  require(shape_numel(shape) == values.size(), "Tensor::from: value count does not match shape");
  auto t = std::make_shared<Tensor>();
  t->shape = std::move(shape);
  t->v = std::move(values);
  return t;
}

TensorPtr Tensor::scalar(double value) { return from({1}, {value}); }

TensorPtr Tensor::randn(std::vector<int> shape, double stddev, Rng& rng) {
  auto t = make(std::move(shape));
  for (auto& x : t->v) x = stddev * rng.normal();
  return t;
}

TensorPtr Tensor::from_matrix(const RowMatrix& m) {
  auto t = std::make_shared<Tensor>();
  t->shape = {m.rows, m.cols};
  t->v = m.data;
  return t;
}

RowMatrix Tensor::to_matrix() const {
  RowMatrix m(rows(), cols());
  m.data = v;
  return m;
}

void Tape::backward(const TensorPtr& loss, double seed) {
  require(loss->numel() == 1, "backward: loss must be scalar");
  loss->ensure_grad();
  loss->g[0] += seed;
  for (auto it = ops_.rbegin(); it != ops_.rend(); ++it) (*it)();
}

// --- ops -------------------------------------------------------------------

TensorPtr linear(Tape& t, const TensorPtr& x, const TensorPtr& w, const TensorPtr& b) {
  require(x->shape.size() == 2 && w->shape.size() == 2, "linear: expects 2-D tensors");
  const int n = x->shape[0], d = x->shape[1], m = w->shape[1];
  require(w->shape[0] == d, "linear: inner dimensions differ");
  if (b) require(b->shape == std::vector<int>({1, m}), "linear: bias must be 1 x M");

  auto out = Tensor::make({n, m});
  for (int i = 0; i < n; ++i) {
    const double* xi = &x->v[static_cast<size_t>(i) * d];
    double* oi = &out->v[static_cast<size_t>(i) * m];
    if (b) std::memcpy(oi, b->v.data(), sizeof(double) * m);
    for (int k = 0; k < d; ++k) {
      const double xv = xi[k];
      if (xv == 0.0) continue;
      const double* wk = &w->v[static_cast<size_t>(k) * m];
      for (int j = 0; j < m; ++j) oi[j] += xv * wk[j];
    }
  }
  check_finite(*out, "linear");
  t.push([x, w, b, out, n, d, m] {
    if (out->g.empty()) return;
    x->ensure_grad();
    w->ensure_grad();
    if (b) b->ensure_grad();
    for (int i = 0; i < n; ++i) {
      const double* go = &out->g[static_cast<size_t>(i) * m];
      const double* xi = &x->v[static_cast<size_t>(i) * d];
      double* gx = &x->g[static_cast<size_t>(i) * d];
      for (int k = 0; k < d; ++k) {
        const double* wk = &w->v[static_cast<size_t>(k) * m];
        double* gwk = &w->g[static_cast<size_t>(k) * m];
        double acc = 0.0;
        const double xv = xi[k];
        for (int j = 0; j < m; ++j) {
          acc += go[j] * wk[j];
          gwk[j] += go[j] * xv;
        }
        gx[k] += acc;
      }
      if (b) {
        for (int j = 0; j < m; ++j) b->g[j] += go[j];
      }
    }
  });
  return out;
}

TensorPtr conv1d(Tape& t, const TensorPtr& x, const TensorPtr& w, const TensorPtr& b, int pad_left,
                 int pad_right) {
  require(x->shape.size() == 2, "conv1d: input must be T x Cin");
  require(w->shape.size() == 3, "conv1d: weight must be {Cout, Cin, K}");
  require(pad_left >= 0 && pad_right >= 0, "conv1d: negative padding");
  const int T = x->shape[0], cin = x->shape[1];
  const int cout = w->shape[0], k = w->shape[2];
  require(w->shape[1] == cin, "conv1d: channel mismatch");
  const int t_out = T + pad_left + pad_right - k + 1;
  require(t_out >= 1, "conv1d: output would be empty");
  if (b) require(b->shape == std::vector<int>({1, cout}), "conv1d: bias must be 1 x Cout");

  auto out = Tensor::make({t_out, cout});
  for (int ti = 0; ti < t_out; ++ti) {
    double* oi = &out->v[static_cast<size_t>(ti) * cout];
    if (b) std::memcpy(oi, b->v.data(), sizeof(double) * cout);
    for (int kk = 0; kk < k; ++kk) {
      const int xi = ti + kk - pad_left;
      if (xi < 0 || xi >= T) continue;
      const double* xr = &x->v[static_cast<size_t>(xi) * cin];
      for (int c = 0; c < cin; ++c) {
        const double xv = xr[c];
        if (xv == 0.0) continue;
        const double* wo = &w->v[(static_cast<size_t>(c)) * k + kk];
        // weight layout {Cout, Cin, K}: stride over Cout is Cin*K
        for (int o = 0; o < cout; ++o) oi[o] += xv * wo[static_cast<size_t>(o) * cin * k];
      }
    }
  }
  check_finite(*out, "conv1d");
  t.push([x, w, b, out, T, cin, cout, k, t_out, pad_left] {
    if (out->g.empty()) return;
    x->ensure_grad();
    w->ensure_grad();
    if (b) b->ensure_grad();
    for (int ti = 0; ti < t_out; ++ti) {
      const double* go = &out->g[static_cast<size_t>(ti) * cout];
      for (int kk = 0; kk < k; ++kk) {
        const int xi = ti + kk - pad_left;
        if (xi < 0 || xi >= T) continue;
        const double* xr = &x->v[static_cast<size_t>(xi) * cin];
        double* gx = &x->g[static_cast<size_t>(xi) * cin];
        for (int c = 0; c < cin; ++c) {
          const size_t wbase = static_cast<size_t>(c) * k + kk;
          double accx = 0.0;
          const double xv = xr[c];
          for (int o = 0; o < cout; ++o) {
            const size_t wi = wbase + static_cast<size_t>(o) * cin * k;
            accx += go[o] * w->v[wi];
            w->g[wi] += go[o] * xv;
          }
          gx[c] += accx;
        }
      }
      if (b) {
        for (int o = 0; o < cout; ++o) b->g[o] += go[o];
      }
    }
  });
  return out;
}

namespace {

template <typename Fwd, typename Bwd>
TensorPtr unary_op(Tape& t, const TensorPtr& x, const char* name, Fwd fwd, Bwd dfr) {
  auto out = Tensor::make(x->shape);
  for (size_t i = 0; i < x->v.size(); ++i) out->v[i] = fwd(x->v[i]);
  check_finite(*out, name);
  t.push([x, out, dfr] {
    if (out->g.empty()) return;
    x->ensure_grad();
    for (size_t i = 0; i < x->v.size(); ++i) x->g[i] += out->g[i] * dfr(x->v[i], out->v[i]);
  });
  return out;
}

}  // namespace

TensorPtr relu(Tape& t, const TensorPtr& x) {
  return unary_op(
      t, x, "relu", [](double v) { return v > 0.0 ? v : 0.0; },
      [](double v, double) { return v > 0.0 ? 1.0 : 0.0; });
}

TensorPtr leaky_relu(Tape& t, const TensorPtr& x, double slope) {
  return unary_op(
      t, x, "leaky_relu", [slope](double v) { return v > 0.0 ? v : slope * v; },
      [slope](double v, double) { return v > 0.0 ? 1.0 : slope; });
}

TensorPtr sigmoid(Tape& t, const TensorPtr& x) {
  return unary_op(
      t, x, "sigmoid",
      [](double v) { return v >= 0.0 ? 1.0 / (1.0 + std::exp(-v)) : std::exp(v) / (1.0 + std::exp(v)); },
      [](double, double y) { return y * (1.0 - y); });
}

TensorPtr tanh_op(Tape& t, const TensorPtr& x) {
  return unary_op(
      t, x, "tanh", [](double v) { return std::tanh(v); },
      [](double, double y) { return 1.0 - y * y; });
}

TensorPtr softplus(Tape& t, const TensorPtr& x) {
  return unary_op(
      t, x, "softplus", [](double v) { return std::max(v, 0.0) + std::log1p(std::exp(-std::fabs(v))); },
      [](double v, double) {
        return v >= 0.0 ? 1.0 / (1.0 + std::exp(-v)) : std::exp(v) / (1.0 + std::exp(v));
      });
}

TensorPtr abs_op(Tape& t, const TensorPtr& x) {
  return unary_op(
      t, x, "abs", [](double v) { return std::fabs(v); },
      [](double v, double) { return v > 0.0 ? 1.0 : (v < 0.0 ? -1.0 : 0.0); });
}

TensorPtr softmax_rows(Tape& t, const TensorPtr& x) {
  require(x->shape.size() == 2, "softmax_rows: expects 2-D");
  const int n = x->shape[0], m = x->shape[1];
  auto out = Tensor::make(x->shape);
  for (int i = 0; i < n; ++i) {
    const double* xi = &x->v[static_cast<size_t>(i) * m];
    double* oi = &out->v[static_cast<size_t>(i) * m];
    double mx = xi[0];
    for (int j = 1; j < m; ++j) mx = std::max(mx, xi[j]);
    double s = 0.0;
    for (int j = 0; j < m; ++j) {
      oi[j] = std::exp(xi[j] - mx);
      s += oi[j];
    }
    for (int j = 0; j < m; ++j) oi[j] /= s;
  }
  check_finite(*out, "softmax_rows");
  t.push([x, out, n, m] {
    if (out->g.empty()) return;
    x->ensure_grad();
    for (int i = 0; i < n; ++i) {
      const double* y = &out->v[static_cast<size_t>(i) * m];
      const double* gy = &out->g[static_cast<size_t>(i) * m];
      double dot = 0.0;
      for (int j = 0; j < m; ++j) dot += gy[j] * y[j];
      double* gx = &x->g[static_cast<size_t>(i) * m];
      for (int j = 0; j < m; ++j) gx[j] += y[j] * (gy[j] - dot);
    }
  });
  return out;
}

TensorPtr log_softmax_rows(Tape& t, const TensorPtr& x) {
  require(x->shape.size() == 2, "log_softmax_rows: expects 2-D");
  const int n = x->shape[0], m = x->shape[1];
  auto out = Tensor::make(x->shape);
  for (int i = 0; i < n; ++i) {
    const double* xi = &x->v[static_cast<size_t>(i) * m];
    double* oi = &out->v[static_cast<size_t>(i) * m];
    double mx = xi[0];
    for (int j = 1; j < m; ++j) mx = std::max(mx, xi[j]);
    double s = 0.0;
    for (int j = 0; j < m; ++j) s += std::exp(xi[j] - mx);
    const double lse = mx + std::log(s);
    for (int j = 0; j < m; ++j) oi[j] = xi[j] - lse;
  }
  check_finite(*out, "log_softmax_rows");
  t.push([x, out, n, m] {
    if (out->g.empty()) return;
    x->ensure_grad();
    for (int i = 0; i < n; ++i) {
      const double* y = &out->v[static_cast<size_t>(i) * m];
      const double* gy = &out->g[static_cast<size_t>(i) * m];
      double gsum = 0.0;
      for (int j = 0; j < m; ++j) gsum += gy[j];
      double* gx = &x->g[static_cast<size_t>(i) * m];
      for (int j = 0; j < m; ++j) gx[j] += gy[j] - std::exp(y[j]) * gsum;
    }
  });
  return out;
}

TensorPtr mean_all(Tape& t, const TensorPtr& x) {
  const double n = static_cast<double>(x->numel());
  double s = 0.0;
  for (double v : x->v) s += v;
  auto out = Tensor::scalar(s / n);
  check_finite(*out, "mean");
  t.push([x, out, n] {
    if (out->g.empty()) return;
    x->ensure_grad();
    const double go = out->g[0] / n;
    for (auto& gi : x->g) gi += go;
  });
  return out;
}

TensorPtr sum_all(Tape& t, const TensorPtr& x) {
  double s = 0.0;
  for (double v : x->v) s += v;
  auto out = Tensor::scalar(s);
  check_finite(*out, "sum");
  t.push([x, out] {
    if (out->g.empty()) return;
    x->ensure_grad();
    const double go = out->g[0];
    for (auto& gi : x->g) gi += go;
  });
  return out;
}

TensorPtr add(Tape& t, const TensorPtr& a, const TensorPtr& b) {
  same_shape(a, b, "add");
  auto out = Tensor::make(a->shape);
  for (size_t i = 0; i < a->v.size(); ++i) out->v[i] = a->v[i] + b->v[i];
  check_finite(*out, "add");
  t.push([a, b, out] {
    if (out->g.empty()) return;
    a->ensure_grad();
    b->ensure_grad();
    for (size_t i = 0; i < out->g.size(); ++i) {
      a->g[i] += out->g[i];
      b->g[i] += out->g[i];
    }
  });
  return out;
}

TensorPtr sub(Tape& t, const TensorPtr& a, const TensorPtr& b) {
  same_shape(a, b, "sub");
  auto out = Tensor::make(a->shape);
  for (size_t i = 0; i < a->v.size(); ++i) out->v[i] = a->v[i] - b->v[i];
  check_finite(*out, "sub");
  t.push([a, b, out] {
    if (out->g.empty()) return;
    a->ensure_grad();
    b->ensure_grad();
    for (size_t i = 0; i < out->g.size(); ++i) {
      a->g[i] += out->g[i];
      b->g[i] -= out->g[i];
    }
  });
  return out;
}

TensorPtr mul(Tape& t, const TensorPtr& a, const TensorPtr& b) {
  same_shape(a, b, "mul");
  auto out = Tensor::make(a->shape);
  for (size_t i = 0; i < a->v.size(); ++i) out->v[i] = a->v[i] * b->v[i];
  check_finite(*out, "mul");
  t.push([a, b, out] {
    if (out->g.empty()) return;
    a->ensure_grad();
    b->ensure_grad();
    for (size_t i = 0; i < out->g.size(); ++i) {
      a->g[i] += out->g[i] * b->v[i];
      b->g[i] += out->g[i] * a->v[i];
    }
  });
  return out;
}

TensorPtr scale(Tape& t, const TensorPtr& x, double c) {
  auto out = Tensor::make(x->shape);
  for (size_t i = 0; i < x->v.size(); ++i) out->v[i] = c * x->v[i];
  check_finite(*out, "scale");
  t.push([x, out, c] {
    if (out->g.empty()) return;
    x->ensure_grad();
    for (size_t i = 0; i < out->g.size(); ++i) x->g[i] += c * out->g[i];
  });
  return out;
}

TensorPtr add_scalar(Tape& t, const TensorPtr& x, double c) {
  auto out = Tensor::make(x->shape);
  for (size_t i = 0; i < x->v.size(); ++i) out->v[i] = x->v[i] + c;
  check_finite(*out, "add_scalar");
  t.push([x, out] {
    if (out->g.empty()) return;
    x->ensure_grad();
    for (size_t i = 0; i < out->g.size(); ++i) x->g[i] += out->g[i];
  });
  return out;
}

TensorPtr add_rowvec(Tape& t, const TensorPtr& x, const TensorPtr& row) {
  require(x->shape.size() == 2, "add_rowvec: x must be 2-D");
  const int n = x->shape[0], m = x->shape[1];
  require(static_cast<int>(row->numel()) == m, "add_rowvec: row length mismatch");
  auto out = Tensor::make(x->shape);
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < m; ++j)
      out->v[static_cast<size_t>(i) * m + j] = x->v[static_cast<size_t>(i) * m + j] + row->v[j];
  check_finite(*out, "add_rowvec");
  t.push([x, row, out, n, m] {
    if (out->g.empty()) return;
    x->ensure_grad();
    row->ensure_grad();
    for (int i = 0; i < n; ++i) {
      const double* go = &out->g[static_cast<size_t>(i) * m];
      double* gx = &x->g[static_cast<size_t>(i) * m];
      for (int j = 0; j < m; ++j) {
        gx[j] += go[j];
        row->g[j] += go[j];
      }
    }
  });
  return out;
}

TensorPtr embedding(Tape& t, const TensorPtr& table, const std::vector<int>& ids) {
  require(table->shape.size() == 2, "embedding: table must be V x D");
  require(!ids.empty(), "embedding: empty id sequence");
  const int v = table->shape[0], d = table->shape[1];
  for (int id : ids) require(id >= 0 && id < v, "embedding: id out of range");
  auto out = Tensor::make({static_cast<int>(ids.size()), d});
  for (size_t i = 0; i < ids.size(); ++i)
    std::memcpy(&out->v[i * d], &table->v[static_cast<size_t>(ids[i]) * d], sizeof(double) * d);
  check_finite(*out, "embedding");
  t.push([table, out, ids, d] {
    if (out->g.empty()) return;
    table->ensure_grad();
    for (size_t i = 0; i < ids.size(); ++i) {
      const double* go = &out->g[i * d];
      double* gt = &table->g[static_cast<size_t>(ids[i]) * d];
      for (int j = 0; j < d; ++j) gt[j] += go[j];
    }
  });
  return out;
}

TensorPtr transpose(Tape& t, const TensorPtr& x) {
  require(x->shape.size() == 2, "transpose: expects 2-D");
  const int n = x->shape[0], m = x->shape[1];
  auto out = Tensor::make({m, n});
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < m; ++j) out->v[static_cast<size_t>(j) * n + i] = x->v[static_cast<size_t>(i) * m + j];
  t.push([x, out, n, m] {
    if (out->g.empty()) return;
    x->ensure_grad();
    for (int i = 0; i < n; ++i)
      for (int j = 0; j < m; ++j)
        x->g[static_cast<size_t>(i) * m + j] += out->g[static_cast<size_t>(j) * n + i];
  });
  return out;
}

TensorPtr concat_cols(Tape& t, const TensorPtr& a, const TensorPtr& b) {
  require(a->shape.size() == 2 && b->shape.size() == 2, "concat_cols: expects 2-D");
  require(a->shape[0] == b->shape[0], "concat_cols: row count mismatch");
  const int n = a->shape[0], ma = a->shape[1], mb = b->shape[1];
  auto out = Tensor::make({n, ma + mb});
  for (int i = 0; i < n; ++i) {
    std::memcpy(&out->v[static_cast<size_t>(i) * (ma + mb)], &a->v[static_cast<size_t>(i) * ma],
                sizeof(double) * ma);
    std::memcpy(&out->v[static_cast<size_t>(i) * (ma + mb) + ma], &b->v[static_cast<size_t>(i) * mb],
                sizeof(double) * mb);
  }
  t.push([a, b, out, n, ma, mb] {
    if (out->g.empty()) return;
    a->ensure_grad();
    b->ensure_grad();
    for (int i = 0; i < n; ++i) {
      const double* go = &out->g[static_cast<size_t>(i) * (ma + mb)];
      double* ga = &a->g[static_cast<size_t>(i) * ma];
      double* gb = &b->g[static_cast<size_t>(i) * mb];
      for (int j = 0; j < ma; ++j) ga[j] += go[j];
      for (int j = 0; j < mb; ++j) gb[j] += go[ma + j];
    }
  });
  return out;
}

TensorPtr stack_rows(Tape& t, const std::vector<TensorPtr>& rows) {
  require(!rows.empty(), "stack_rows: empty input");
  const int m = static_cast<int>(rows[0]->numel());
  for (const auto& r : rows) require(static_cast<int>(r->numel()) == m, "stack_rows: ragged rows");
  auto out = Tensor::make({static_cast<int>(rows.size()), m});
  for (size_t i = 0; i < rows.size(); ++i)
    std::memcpy(&out->v[i * m], rows[i]->v.data(), sizeof(double) * m);
  t.push([rows, out, m] {
    if (out->g.empty()) return;
    for (size_t i = 0; i < rows.size(); ++i) {
      rows[i]->ensure_grad();
      const double* go = &out->g[i * m];
      for (int j = 0; j < m; ++j) rows[i]->g[j] += go[j];
    }
  });
  return out;
}

TensorPtr reshape(Tape& t, const TensorPtr& x, std::vector<int> shape) {
  require(shape_numel(shape) == x->numel(), "reshape: element count mismatch");
  auto out = std::make_shared<Tensor>();
  out->shape = std::move(shape);
  out->v = x->v;
  t.push([x, out] {
    if (out->g.empty()) return;
    x->ensure_grad();
    for (size_t i = 0; i < out->g.size(); ++i) x->g[i] += out->g[i];
  });
  return out;
}

TensorPtr gru_cell(Tape& t, const TensorPtr& x, const TensorPtr& h, const GruParams& p) {
  require(x->shape.size() == 2 && x->shape[0] == 1, "gru_cell: x must be 1 x D");
  require(h->shape.size() == 2 && h->shape[0] == 1, "gru_cell: h must be 1 x H");
  auto z = sigmoid(t, add(t, add(t, linear(t, x, p.wz), linear(t, h, p.uz)), p.bz));
  auto r = sigmoid(t, add(t, add(t, linear(t, x, p.wr), linear(t, h, p.ur)), p.br));
  auto n = tanh_op(t, add(t, add(t, linear(t, x, p.wn), mul(t, r, linear(t, h, p.un))), p.bn));
  // (1 - z) o n + z o h
  return add(t, sub(t, n, mul(t, z, n)), mul(t, z, h));
}

// --- parameter set -----------------------------------------------------------

TensorPtr ParameterSet::add(const std::string& name, TensorPtr t, bool trainable) {
  require(!has(name), "ParameterSet: duplicate name " + name);
  t->trainable = trainable;
  items_.emplace_back(name, t);
  return items_.back().second;
}

TensorPtr ParameterSet::get(const std::string& name) const {
  for (const auto& [n, t] : items_)
    if (n == name) return t;
  throw std::invalid_argument("ParameterSet: no parameter named " + name);
}

bool ParameterSet::has(const std::string& name) const {
  for (const auto& [n, t] : items_)
    if (n == name) return true;
  return false;
}

void ParameterSet::zero_grads() {
  for (auto& [n, t] : items_) t->zero_grad();
}

size_t ParameterSet::total_params() const {
  size_t n = 0;
  for (const auto& [name, t] : items_) n += t->numel();
  return n;
}

namespace {

constexpr const char* kCkptMagic = "UTTS-CKPT-V1";

void write_le_doubles(std::ofstream& out, const std::vector<double>& v) {
  for (double d : v) {
    uint64_t bits;
    std::memcpy(&bits, &d, sizeof bits);
    unsigned char b[8];
    for (int i = 0; i < 8; ++i) b[i] = static_cast<unsigned char>((bits >> (8 * i)) & 0xff);
    out.write(reinterpret_cast<const char*>(b), 8);
  }
}

void read_le_doubles(std::ifstream& in, std::vector<double>& v) {
  for (auto& d : v) {
    unsigned char b[8];
    in.read(reinterpret_cast<char*>(b), 8);
    uint64_t bits = 0;
    for (int i = 0; i < 8; ++i) bits |= static_cast<uint64_t>(b[i]) << (8 * i);
    std::memcpy(&d, &bits, sizeof d);
  }
}

}  // namespace

void ParameterSet::save(const std::string& path) const {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("cannot write checkpoint: " + path);
  out << kCkptMagic << "\n" << items_.size() << "\n";
  size_t offset = 0;
  for (const auto& [name, t] : items_) {
    std::string dims;
    for (size_t i = 0; i < t->shape.size(); ++i) {
      if (i) dims += ",";
      dims += std::to_string(t->shape[i]);
    }
    out << name << "\t" << dims << "\t" << offset << "\t" << t->numel() << "\n";
    offset += t->numel();
  }
  out << "---\n";
  for (const auto& [name, t] : items_) write_le_doubles(out, t->v);
  if (!out) throw std::runtime_error("short write: " + path);
}

void ParameterSet::load(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open checkpoint: " + path);
  std::string magic;
  std::getline(in, magic);
  if (magic != kCkptMagic) throw std::runtime_error("bad checkpoint magic in " + path);
  size_t count = 0;
  in >> count;
  in.ignore();
  struct Entry {
    std::string name;
    std::vector<int> shape;
    size_t numel;
  };
  std::vector<Entry> entries;
  for (size_t i = 0; i < count; ++i) {
    std::string line;
    std::getline(in, line);
    auto fields = split_on(line, '\t');
    if (fields.size() != 4) throw std::runtime_error("bad checkpoint index line in " + path);
    Entry e;
    e.name = fields[0];
    for (const auto& d : split_on(fields[1], ',')) e.shape.push_back(std::stoi(d));
    e.numel = static_cast<size_t>(std::stoull(fields[3]));
    entries.push_back(std::move(e));
  }
  std::string sep;
  std::getline(in, sep);
  if (sep != "---") throw std::runtime_error("bad checkpoint separator in " + path);

  const bool create = items_.empty();
  for (const auto& e : entries) {
    std::vector<double> vals(e.numel);
    read_le_doubles(in, vals);
    if (!in) throw std::runtime_error("truncated checkpoint: " + path);
    if (create) {
      add(e.name, Tensor::from(e.shape, std::move(vals)));
    } else {
      auto t = get(e.name);
      if (t->shape != e.shape) throw std::runtime_error("checkpoint shape mismatch for " + e.name);
      t->v = std::move(vals);
    }
  }
}

// --- Adam --------------------------------------------------------------------

void Adam::step(ParameterSet& params) {
  const auto& items = params.items();
  if (!initialized_) {
    m_.resize(items.size());
    v_.resize(items.size());
    for (size_t i = 0; i < items.size(); ++i) {
      m_[i].assign(items[i].second->numel(), 0.0);
      v_[i].assign(items[i].second->numel(), 0.0);
    }
    initialized_ = true;
  }
  require(m_.size() == items.size(), "Adam: parameter set changed between steps");
  ++t_;
  const double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(t_));
  const double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t_));
  for (size_t i = 0; i < items.size(); ++i) {
    auto& t = *items[i].second;
    if (!t.trainable) continue;
    if (t.g.size() != t.v.size())
      throw std::invalid_argument("Adam: missing gradient for " + items[i].first);
    for (size_t j = 0; j < t.v.size(); ++j) {
      const double g = t.g[j];
      m_[i][j] = cfg_.beta1 * m_[i][j] + (1.0 - cfg_.beta1) * g;
      v_[i][j] = cfg_.beta2 * v_[i][j] + (1.0 - cfg_.beta2) * g * g;
      const double mhat = m_[i][j] / bc1;
      const double vhat = v_[i][j] / bc2;
      t.v[j] -= cfg_.lr * mhat / (std::sqrt(vhat) + cfg_.eps);
    }
    t.zero_grad();
  }
}

// --- gradient checking ---------------------------------------------------------

double grad_check(const std::function<TensorPtr(Tape&, const TensorPtr&)>& f, const TensorPtr& x,
                  double h) {
  Tape tape;
  auto y = f(tape, x);
  require(y->numel() == 1, "grad_check: function must be scalar-valued");
  x->zero_grad();
  tape.backward(y);
  x->ensure_grad();
  std::vector<double> analytic = x->g;

  double max_rel = 0.0;
  for (size_t i = 0; i < x->v.size(); ++i) {
    const double orig = x->v[i];
    x->v[i] = orig + h;
    Tape t1;
    const double fp = f(t1, x)->v[0];
    x->v[i] = orig - h;
    Tape t2;
    const double fm = f(t2, x)->v[0];
    x->v[i] = orig;
    const double numeric = (fp - fm) / (2.0 * h);
    const double denom = std::max(1.0, std::fabs(analytic[i]) + std::fabs(numeric));
    max_rel = std::max(max_rel, std::fabs(analytic[i] - numeric) / denom);
  }
  return max_rel;
}

}  // namespace utts::grad
