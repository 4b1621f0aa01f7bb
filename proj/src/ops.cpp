#include "puda/ops.hpp"

#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <string>

namespace puda::ad {

namespace {

using RowMat =
    Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using ConstMap = Eigen::Map<const RowMat>;
using MutMap = Eigen::Map<RowMat>;

double g_bn_skew = 0.0;

ConstMap as_matrix(const Tensor& t) {
  return ConstMap(t.data(), static_cast<Eigen::Index>(t.rows()),
                  static_cast<Eigen::Index>(t.cols()));
}

MutMap as_matrix(Tensor& t) {
  return MutMap(t.data(), static_cast<Eigen::Index>(t.rows()),
                static_cast<Eigen::Index>(t.cols()));
}

Tape& tape_of(std::initializer_list<Var> vars) {
  Tape* t = nullptr;
  for (const auto& v : vars) {
    if (!v.valid()) throw ContractError("op received an unbound Var");
    if (t && v.tape() != t) throw ContractError("op mixes Vars from two tapes");
    t = v.tape();
  }
  return *t;
}

void add_into(Tensor& dst, const Tensor& src) {
  for (std::size_t i = 0; i < dst.size(); ++i) dst[i] += src[i];
}

void require_same_shape(const char* op, const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape()) {
    throw DimensionError(std::string(op) + ": shapes " + shape_str(a.shape()) +
                         " and " + shape_str(b.shape()) + " differ");
  }
}

}  // namespace

namespace {
thread_local std::vector<std::uint64_t>* g_branches = nullptr;

void note_signs(const Tensor& pre) {
  if (!branch::recording()) return;
  std::vector<std::size_t> signs(pre.size());
  for (std::size_t i = 0; i < signs.size(); ++i) signs[i] = pre[i] > 0.0;
  branch::note(signs);
}
}  // namespace

namespace branch {
Recorder::Recorder() : prev_(g_branches) { g_branches = &trace_; }
Recorder::~Recorder() { g_branches = prev_; }
bool recording() { return g_branches != nullptr; }
void note(std::span<const std::size_t> choices) {
  if (!g_branches) return;
  std::uint64_t h = 14695981039346656037ull;
  for (auto c : choices) {
    h ^= c;
    h *= 1099511628211ull;
  }
  g_branches->push_back(h);
}
}  // namespace branch

namespace fault {
void set_batchnorm_backward_skew(double value) { g_bn_skew = value; }
double batchnorm_backward_skew() { return g_bn_skew; }
}  // namespace fault

Var linear(Var x, Var w, Var bias) {
  Tape& tape = tape_of({x, w, bias});
  const Tensor& xv = x.value();
  const Tensor& wv = w.value();
  const Tensor& bv = bias.value();
  if (xv.rank() < 1 || wv.rank() != 2 || bv.rank() != 1 ||
      xv.cols() != wv.dim(0) || bv.dim(0) != wv.dim(1)) {
    throw DimensionError("linear: x " + shape_str(xv.shape()) + ", w " +
                         shape_str(wv.shape()) + ", bias " +
                         shape_str(bv.shape()) + " do not conform");
  }
  Shape out_shape = xv.shape();
  out_shape.back() = wv.dim(1);
  Tensor out(out_shape);
  {
    auto o = as_matrix(out);
    o.noalias() = as_matrix(xv) * as_matrix(wv);
    o.rowwise() += Eigen::Map<const Eigen::RowVectorXd>(
        bv.data(), static_cast<Eigen::Index>(bv.size()));
  }
  const auto xi = x.id(), wi = w.id(), bi = bias.id();
  return tape.record(
      "linear", std::move(out), {xi, wi, bi}, [xi, wi, bi](Tape& t, std::size_t self) {
        const auto dy = as_matrix(t.upstream(self));
        if (t.requires_grad(xi)) {
          as_matrix(t.grad_buffer(xi)).noalias() +=
              dy * as_matrix(t.value(wi)).transpose();
        }
        if (t.requires_grad(wi)) {
          as_matrix(t.grad_buffer(wi)).noalias() +=
              as_matrix(t.value(xi)).transpose() * dy;
        }
        if (t.requires_grad(bi)) {
          auto& db = t.grad_buffer(bi);
          Eigen::Map<Eigen::RowVectorXd>(db.data(),
                                         static_cast<Eigen::Index>(db.size())) +=
              dy.colwise().sum();
        }
      });
}

Var relu(Var x) {
  Tape& tape = tape_of({x});
  Tensor out = x.value();
  note_signs(out);
  for (auto& v : out.values()) v = v > 0.0 ? v : 0.0;
  const auto xi = x.id();
  return tape.record("relu", std::move(out), {xi}, [xi](Tape& t, std::size_t self) {
    const auto& dy = t.upstream(self);
    const auto& xv = t.value(xi);
    auto& dx = t.grad_buffer(xi);
    for (std::size_t i = 0; i < dx.size(); ++i) {
      if (xv[i] > 0.0) dx[i] += dy[i];
    }
  });
}

namespace {

Var batchnorm_impl(Var x, Var gamma, Var beta, BatchNormState& state, Mode mode,
                   bool with_relu) {
  Tape& tape = tape_of({x, gamma, beta});
  const Tensor& xv = x.value();
  const std::size_t c = xv.cols();
  const std::size_t rows = xv.rows();
  if (gamma.value().shape() != Shape{c} || beta.value().shape() != Shape{c} ||
      state.running_mean.shape() != Shape{c}) {
    throw DimensionError("batchnorm: x " + shape_str(xv.shape()) + ", gamma " +
                         shape_str(gamma.value().shape()) + ", beta " +
                         shape_str(beta.value().shape()) + " do not conform");
  }
  if (mode != Mode::eval && rows < 2) {
    throw DegenerateBatchError("batchnorm in train mode needs at least 2 rows, got " +
                               std::to_string(rows));
  }

  std::vector<double> mean(c, 0.0), inv_std(c, 0.0);
  const double* xp = xv.data();
  if (mode != Mode::eval) {
    std::vector<double> var(c, 0.0);
    double* m = mean.data();
    double* v = var.data();
    for (std::size_t r = 0; r < rows; ++r) {
      const double* row = xp + r * c;
      for (std::size_t j = 0; j < c; ++j) m[j] += row[j];
    }
    for (auto& mj : mean) mj /= static_cast<double>(rows);
    for (std::size_t r = 0; r < rows; ++r) {
      const double* row = xp + r * c;
      for (std::size_t j = 0; j < c; ++j) {
        const double d = row[j] - m[j];
        v[j] += d * d;
      }
    }
    for (std::size_t j = 0; j < c; ++j) {
      const double biased = var[j] / static_cast<double>(rows);
      inv_std[j] = 1.0 / std::sqrt(biased + state.eps);
      if (mode != Mode::train) continue;
      const double unbiased = var[j] / static_cast<double>(rows - 1);
      state.running_mean[j] =
          (1.0 - state.momentum) * state.running_mean[j] + state.momentum * mean[j];
      state.running_var[j] =
          (1.0 - state.momentum) * state.running_var[j] + state.momentum * unbiased;
    }
  } else {
    for (std::size_t j = 0; j < c; ++j) {
      mean[j] = state.running_mean[j];
      inv_std[j] = 1.0 / std::sqrt(state.running_var[j] + state.eps);
    }
  }

  // out = scale * x + shift per channel
  std::vector<double> scale_c(c), shift_c(c);
  for (std::size_t j = 0; j < c; ++j) {
    scale_c[j] = gamma.value()[j] * inv_std[j];
    shift_c[j] = beta.value()[j] - mean[j] * scale_c[j];
  }
  Tensor out(xv.shape());
  double* op = out.data();
  for (std::size_t r = 0; r < rows; ++r) {
    const double* row = xp + r * c;
    double* orow = op + r * c;
    for (std::size_t j = 0; j < c; ++j) orow[j] = scale_c[j] * row[j] + shift_c[j];
  }
  if (with_relu) {
    note_signs(out);
    for (auto& v : out.values()) v = v > 0.0 ? v : 0.0;
  }

  const auto xi = x.id(), gi = gamma.id(), bi = beta.id();
  const bool train = mode != Mode::eval;
  // The fused form keeps only its output; the ReLU mask is out > 0.
  return tape.record(
      with_relu ? "batchnorm_relu" : "batchnorm", std::move(out), {xi, gi, bi},
      [xi, gi, bi, train, with_relu, mean = std::move(mean), inv_std = std::move(inv_std)](
          Tape& t, std::size_t self) {
        const auto& up = t.upstream(self);
        const auto& xv = t.value(xi);
        const auto& g = t.value(gi);
        const std::size_t c = xv.cols();
        const std::size_t rows = xv.rows();
        const double* xp = xv.data();
        const double* dyp = up.data();
        std::vector<double> masked;
        if (with_relu) {
          const double* yp = t.value(self).data();
          masked.resize(up.size());
          for (std::size_t i = 0; i < masked.size(); ++i) masked[i] = yp[i] > 0.0 ? dyp[i] : 0.0;
          dyp = masked.data();
        }
        std::vector<double> sum_dy(c, 0.0), sum_dy_xhat(c, 0.0);
        for (std::size_t r = 0; r < rows; ++r) {
          const double* row = xp + r * c;
          const double* drow = dyp + r * c;
          for (std::size_t j = 0; j < c; ++j) {
            const double xhat = (row[j] - mean[j]) * inv_std[j];
            sum_dy[j] += drow[j];
            sum_dy_xhat[j] += drow[j] * xhat;
          }
        }
        if (t.requires_grad(gi)) {
          auto& dg = t.grad_buffer(gi);
          for (std::size_t j = 0; j < c; ++j) dg[j] += sum_dy_xhat[j];
        }
        if (t.requires_grad(bi)) {
          auto& db = t.grad_buffer(bi);
          for (std::size_t j = 0; j < c; ++j) db[j] += sum_dy[j];
        }
        if (!t.requires_grad(xi)) return;
        double* dx = t.grad_buffer(xi).data();
        const double skew = 1.0 + g_bn_skew;
        std::vector<double> k(c), a(c), b(c);
        if (!train) {
          for (std::size_t j = 0; j < c; ++j) k[j] = skew * g[j] * inv_std[j];
          for (std::size_t r = 0; r < rows; ++r) {
            const double* drow = dyp + r * c;
            double* dxrow = dx + r * c;
            for (std::size_t j = 0; j < c; ++j) dxrow[j] += k[j] * drow[j];
          }
          return;
        }
        // dx = k * (dy - sum_dy / n - xhat * sum_dy_xhat / n), expanded so
        // the inner loop is a fused multiply-add per element.
        const double inv_n = 1.0 / static_cast<double>(rows);
        for (std::size_t j = 0; j < c; ++j) {
          k[j] = skew * g[j] * inv_std[j];
          const double s = sum_dy_xhat[j] * inv_n * inv_std[j];
          a[j] = -k[j] * s;
          b[j] = -k[j] * (sum_dy[j] * inv_n - mean[j] * s);
        }
        for (std::size_t r = 0; r < rows; ++r) {
          const double* row = xp + r * c;
          const double* drow = dyp + r * c;
          double* dxrow = dx + r * c;
          for (std::size_t j = 0; j < c; ++j) {
            dxrow[j] += k[j] * drow[j] + a[j] * row[j] + b[j];
          }
        }
      });
}

}  // namespace

Var batchnorm(Var x, Var gamma, Var beta, BatchNormState& state, Mode mode) {
  return batchnorm_impl(x, gamma, beta, state, mode, false);
}

Var batchnorm_relu(Var x, Var gamma, Var beta, BatchNormState& state, Mode mode) {
  return batchnorm_impl(x, gamma, beta, state, mode, true);
}

PoolResult maxpool_segments(Var x, std::span<const std::size_t> offsets) {
  Tape& tape = tape_of({x});
  const Tensor& xv = x.value();
  if (offsets.size() < 2 || offsets.front() != 0 || offsets.back() != xv.rows()) {
    throw DimensionError("maxpool: segment offsets do not cover " +
                         std::to_string(xv.rows()) + " rows");
  }
  const std::size_t segs = offsets.size() - 1;
  const std::size_t c = xv.cols();
  Tensor out(Shape{segs, c});
  std::vector<std::size_t> argmax(segs * c);
  for (std::size_t s = 0; s < segs; ++s) {
    const std::size_t lo = offsets[s], hi = offsets[s + 1];
    if (hi <= lo) throw EmptyCloudError("maxpool over a segment with no points");
    for (std::size_t j = 0; j < c; ++j) {
      out.at(s, j) = xv.at(lo, j);
      argmax[s * c + j] = lo;
    }
    for (std::size_t r = lo + 1; r < hi; ++r) {
      for (std::size_t j = 0; j < c; ++j) {
        if (xv.at(r, j) > out.at(s, j)) {
          out.at(s, j) = xv.at(r, j);
          argmax[s * c + j] = r;
        }
      }
    }
  }
  branch::note(argmax);
  const auto xi = x.id();
  Var v = tape.record("maxpool", std::move(out), {xi},
                      [xi, argmax](Tape& t, std::size_t self) {
                        const auto& dy = t.upstream(self);
                        auto& dx = t.grad_buffer(xi);
                        const std::size_t c = dy.cols();
                        for (std::size_t k = 0; k < argmax.size(); ++k) {
                          dx.at(argmax[k], k % c) += dy[k];
                        }
                      });
  return {v, std::move(argmax)};
}

PoolResult maxpool_points(Var x) {
  const Tensor& xv = x.value();
  if (xv.rank() != 3) {
    throw DimensionError("maxpool_points expects [b,n,c], got " + shape_str(xv.shape()));
  }
  if (xv.dim(1) == 0) throw EmptyCloudError("maxpool_points over an empty cloud");
  // The pooled node may reallocate the tape, so xv is not used after it.
  const std::size_t b = xv.dim(0), n = xv.dim(1), c = xv.dim(2);
  std::vector<std::size_t> offsets(b + 1);
  for (std::size_t i = 0; i <= b; ++i) offsets[i] = i * n;
  auto res = maxpool_segments(x, offsets);
  for (std::size_t k = 0; k < res.argmax.size(); ++k) res.argmax[k] -= (k / c) * n;
  return res;
}

Var softmax_cross_entropy(Var logits, std::span<const int> labels) {
  Tape& tape = tape_of({logits});
  const Tensor& lv = logits.value();
  if (lv.rank() != 2 || lv.dim(0) != labels.size() || labels.empty()) {
    throw DimensionError("cross entropy: logits " + shape_str(lv.shape()) + " vs " +
                         std::to_string(labels.size()) + " labels");
  }
  const std::size_t b = lv.dim(0), classes = lv.dim(1);
  Tensor probs(lv.shape());
  double loss = 0.0;
  for (std::size_t i = 0; i < b; ++i) {
    const int y = labels[i];
    if (y < 0 || static_cast<std::size_t>(y) >= classes) {
      throw LabelError("label " + std::to_string(y) + " outside [0," +
                       std::to_string(classes) + ")");
    }
    double mx = lv.at(i, 0);
    for (std::size_t j = 1; j < classes; ++j) mx = std::max(mx, lv.at(i, j));
    double z = 0.0;
    for (std::size_t j = 0; j < classes; ++j) z += std::exp(lv.at(i, j) - mx);
    const double lse = mx + std::log(z);
    for (std::size_t j = 0; j < classes; ++j) probs.at(i, j) = std::exp(lv.at(i, j) - lse);
    loss += lse - lv.at(i, static_cast<std::size_t>(y));
  }
  loss /= static_cast<double>(b);
  const auto li = logits.id();
  std::vector<int> ys(labels.begin(), labels.end());
  return tape.record("cross_entropy", Tensor::scalar(loss), {li},
                     [li, probs = std::move(probs), ys = std::move(ys)](
                         Tape& t, std::size_t self) {
                       const double up = t.upstream(self).item();
                       auto& dl = t.grad_buffer(li);
                       const std::size_t b = probs.dim(0);
                       const double s = up / static_cast<double>(b);
                       for (std::size_t i = 0; i < b; ++i) {
                         for (std::size_t j = 0; j < probs.dim(1); ++j) {
                           const double onehot =
                               static_cast<int>(j) == ys[i] ? 1.0 : 0.0;
                           dl.at(i, j) += s * (probs.at(i, j) - onehot);
                         }
                       }
                     });
}

Var concat(Var a, Var b) {
  Tape& tape = tape_of({a, b});
  const Tensor& av = a.value();
  const Tensor& bv = b.value();
  Shape la(av.shape().begin(), av.shape().end() - (av.rank() ? 1 : 0));
  Shape lb(bv.shape().begin(), bv.shape().end() - (bv.rank() ? 1 : 0));
  if (av.rank() == 0 || la != lb) {
    throw DimensionError("concat: shapes " + shape_str(av.shape()) + " and " +
                         shape_str(bv.shape()) + " differ outside the last axis");
  }
  const std::size_t ca = av.cols(), cb = bv.cols(), rows = av.rows();
  Shape os = av.shape();
  os.back() = ca + cb;
  Tensor out(os);
  for (std::size_t r = 0; r < rows; ++r) {
    std::copy_n(av.data() + r * ca, ca, out.data() + r * (ca + cb));
    std::copy_n(bv.data() + r * cb, cb, out.data() + r * (ca + cb) + ca);
  }
  const auto ai = a.id(), bi = b.id();
  return tape.record("concat", std::move(out), {ai, bi},
                     [ai, bi, ca, cb, rows](Tape& t, std::size_t self) {
                       const auto& dy = t.upstream(self);
                       if (t.requires_grad(ai)) {
                         auto& da = t.grad_buffer(ai);
                         for (std::size_t r = 0; r < rows; ++r)
                           for (std::size_t j = 0; j < ca; ++j)
                             da[r * ca + j] += dy[r * (ca + cb) + j];
                       }
                       if (t.requires_grad(bi)) {
                         auto& db = t.grad_buffer(bi);
                         for (std::size_t r = 0; r < rows; ++r)
                           for (std::size_t j = 0; j < cb; ++j)
                             db[r * cb + j] += dy[r * (ca + cb) + ca + j];
                       }
                     });
}

Var reduce_sum(Var x) {
  Tape& tape = tape_of({x});
  double s = 0.0;
  for (double v : x.value().values()) s += v;
  const auto xi = x.id();
  return tape.record("reduce_sum", Tensor::scalar(s), {xi}, [xi](Tape& t, std::size_t self) {
    const double up = t.upstream(self).item();
    for (auto& g : t.grad_buffer(xi).values()) g += up;
  });
}

Var reduce_mean(Var x) {
  const std::size_t n = x.value().size();
  if (n == 0) throw DimensionError("reduce_mean of an empty tensor");
  return scale(reduce_sum(x), 1.0 / static_cast<double>(n));
}

Var scale_add(Var d, Var x, double alpha) {
  Tape& tape = tape_of({d, x});
  require_same_shape("scale_add", d.value(), x.value());
  Tensor out = x.value();
  const auto& dv = d.value();
  if (alpha != 0.0) {
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = alpha * dv[i] + out[i];
  }
  const auto di = d.id(), xi = x.id();
  return tape.record("scale_add", std::move(out), {di, xi},
                     [di, xi, alpha](Tape& t, std::size_t self) {
                       const auto& dy = t.upstream(self);
                       if (t.requires_grad(di)) {
                         auto& dd = t.grad_buffer(di);
                         for (std::size_t i = 0; i < dd.size(); ++i) dd[i] += alpha * dy[i];
                       }
                       if (t.requires_grad(xi)) add_into(t.grad_buffer(xi), dy);
                     });
}

Var masked_scale_add(Var d, Var x, std::span<const std::uint8_t> mask, double alpha) {
  Tape& tape = tape_of({d, x});
  require_same_shape("masked_scale_add", d.value(), x.value());
  const auto& xv = x.value();
  const auto& dv = d.value();
  if (mask.size() != xv.rows()) {
    throw DimensionError("masked_scale_add: mask length " + std::to_string(mask.size()) +
                         " vs " + std::to_string(xv.rows()) + " rows");
  }
  const std::size_t c = xv.cols();
  Tensor out = xv;
  for (std::size_t r = 0; r < mask.size() && alpha != 0.0; ++r) {
    if (!mask[r]) continue;
    for (std::size_t j = 0; j < c; ++j) out.at(r, j) = xv.at(r, j) + alpha * dv.at(r, j);
  }
  const auto di = d.id(), xi = x.id();
  std::vector<std::uint8_t> m(mask.begin(), mask.end());
  return tape.record("masked_scale_add", std::move(out), {di, xi},
                     [di, xi, alpha, m = std::move(m)](Tape& t, std::size_t self) {
                       const auto& dy = t.upstream(self);
                       if (t.requires_grad(di)) {
                         auto& dd = t.grad_buffer(di);
                         const std::size_t c = dd.cols();
                         for (std::size_t r = 0; r < m.size(); ++r) {
                           if (!m[r]) continue;
                           for (std::size_t j = 0; j < c; ++j)
                             dd.at(r, j) += alpha * dy.at(r, j);
                         }
                       }
                       if (t.requires_grad(xi)) add_into(t.grad_buffer(xi), dy);
                     });
}

Var add(Var a, Var b) { return scale_add(a, b, 1.0); }

Var sub(Var a, Var b) { return scale_add(b, a, -1.0); }

Var scale(Var x, double c) {
  Tape& tape = tape_of({x});
  Tensor out = x.value();
  for (auto& v : out.values()) v *= c;
  const auto xi = x.id();
  return tape.record("scale", std::move(out), {xi}, [xi, c](Tape& t, std::size_t self) {
    const auto& dy = t.upstream(self);
    auto& dx = t.grad_buffer(xi);
    for (std::size_t i = 0; i < dx.size(); ++i) dx[i] += c * dy[i];
  });
}

Var add_n(std::span<const Var> xs) {
  if (xs.empty()) throw ContractError("add_n of nothing");
  Var acc = xs[0];
  for (std::size_t i = 1; i < xs.size(); ++i) acc = add(acc, xs[i]);
  return acc;
}

Var gather_rows(Var x, std::vector<std::size_t> rows) {
  Tape& tape = tape_of({x});
  const auto& xv = x.value();
  const std::size_t c = xv.cols();
  Tensor out(Shape{rows.size(), c});
  for (std::size_t i = 0; i < rows.size(); ++i) {
    if (rows[i] >= xv.rows()) throw RangeError("gather_rows: row index out of range");
    std::copy_n(xv.data() + rows[i] * c, c, out.data() + i * c);
  }
  const auto xi = x.id();
  return tape.record("gather_rows", std::move(out), {xi},
                     [xi, rows = std::move(rows)](Tape& t, std::size_t self) {
                       const auto& dy = t.upstream(self);
                       auto& dx = t.grad_buffer(xi);
                       const std::size_t c = dx.cols();
                       for (std::size_t i = 0; i < rows.size(); ++i)
                         for (std::size_t j = 0; j < c; ++j)
                           dx[rows[i] * c + j] += dy[i * c + j];
                     });
}

Var concat_rows(std::span<const Var> xs) {
  if (xs.empty()) throw ContractError("concat_rows of nothing");
  Tape& tape = tape_of({xs[0]});
  const std::size_t c = xs[0].value().cols();
  std::size_t total = 0;
  std::vector<std::size_t> ids;
  for (const auto& x : xs) {
    if (x.tape() != &tape) throw ContractError("op mixes Vars from two tapes");
    if (x.value().cols() != c || x.value().rank() != 2) {
      throw DimensionError("concat_rows: " + shape_str(x.value().shape()) +
                           " does not have " + std::to_string(c) + " columns");
    }
    total += x.value().rows();
    ids.push_back(x.id());
  }
  Tensor out(Shape{total, c});
  std::size_t at = 0;
  for (const auto& x : xs) {
    std::copy_n(x.value().data(), x.value().size(), out.data() + at);
    at += x.value().size();
  }
  auto inputs = ids;
  return tape.record("concat_rows", std::move(out), std::move(inputs),
                     [ids = std::move(ids)](Tape& t, std::size_t self) {
                       const auto& dy = t.upstream(self);
                       std::size_t at = 0;
                       for (auto id : ids) {
                         const std::size_t n = t.value(id).size();
                         if (t.requires_grad(id)) {
                           auto& dx = t.grad_buffer(id);
                           for (std::size_t i = 0; i < n; ++i) dx[i] += dy[at + i];
                         }
                         at += n;
                       }
                     });
}

Var slice_rows(Var x, std::size_t begin, std::size_t end) {
  Tape& tape = tape_of({x});
  const auto& xv = x.value();
  if (begin > end || end > xv.rows()) {
    throw RangeError("slice_rows [" + std::to_string(begin) + "," + std::to_string(end) +
                     ") of " + std::to_string(xv.rows()) + " rows");
  }
  const std::size_t c = xv.cols();
  Tensor out(Shape{end - begin, c},
             std::vector<double>(xv.data() + begin * c, xv.data() + end * c));
  const auto xi = x.id();
  return tape.record("slice_rows", std::move(out), {xi},
                     [xi, begin, c](Tape& t, std::size_t self) {
                       const auto& dy = t.upstream(self);
                       auto& dx = t.grad_buffer(xi);
                       for (std::size_t i = 0; i < dy.size(); ++i) dx[begin * c + i] += dy[i];
                     });
}

Var reshape(Var x, Shape shape) {
  Tape& tape = tape_of({x});
  Tensor out = x.value().reshaped(std::move(shape));
  const auto xi = x.id();
  return tape.record("reshape", std::move(out), {xi}, [xi](Tape& t, std::size_t self) {
    add_into(t.grad_buffer(xi), t.upstream(self));
  });
}

}  // namespace puda::ad
