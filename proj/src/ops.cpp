#include "mvh/ops.hpp"

#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <limits>
#include <string>

namespace mvh {
namespace {

using RMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MatMap = Eigen::Map<RMat>;
using ConstMatMap = Eigen::Map<const RMat>;

bool is_suffix(const Shape& s, const Shape& full) {
  if (s.size() > full.size()) return false;
  return std::equal(s.rbegin(), s.rend(), full.rbegin());
}

Shape broadcast_shape(const char* op, const Shape& a, const Shape& b) {
  if (a == b) return a;
  if (shape_size(b) == 1) return a;
  if (shape_size(a) == 1) return b;
  if (is_suffix(b, a)) return a;
  if (is_suffix(a, b)) return b;
  throw ContractError(std::string(op) + ": shapes " + shape_str(a) + " and " + shape_str(b) +
                      " do not broadcast");
}

// Visits (out index, index into a, index into b) for suffix/scalar broadcasting
// without a division per element.
template <class Fn>
void broadcast_each(std::size_t n, std::size_t na, std::size_t nb, Fn fn) {
  if (na == n && nb == n) {
    for (std::size_t i = 0; i < n; ++i) fn(i, i, i);
  } else if (na == n) {
    for (std::size_t o = 0; o < n; o += nb)
      for (std::size_t k = 0; k < nb; ++k) fn(o + k, o + k, k);
  } else if (nb == n) {
    for (std::size_t o = 0; o < n; o += na)
      for (std::size_t k = 0; k < na; ++k) fn(o + k, k, o + k);
  } else {
    for (std::size_t i = 0; i < n; ++i) fn(i, i % na, i % nb);
  }
}

// f(x, y) -> z; d(x, y, z) -> {dz/dx, dz/dy}
template <class F, class D>
Var binary(const char* name, Var a, Var b, F f, D d) {
  Tape& t = *a.tape;
  const Array& A = a.value();
  const Array& B = b.value();
  Shape out_shape = broadcast_shape(name, A.shape(), B.shape());
  Array out(out_shape);
  const std::size_t na = A.size(), nb = B.size();
  broadcast_each(out.size(), na, nb, [&](std::size_t i, std::size_t x, std::size_t y) { out[i] = f(A[x], B[y]); });
  const std::size_t ia = a.id, ib = b.id;
  return t.record(std::move(out), {a, b}, [ia, ib, d](Tape& tp, std::size_t self) {
    const Array& A = tp.value(ia);
    const Array& B = tp.value(ib);
    const Array& Z = tp.value(self);
    const Array& G = tp.grad(self);
    const bool ga_on = tp.requires_grad(ia), gb_on = tp.requires_grad(ib);
    Array* GA = ga_on ? &tp.grad(ia) : nullptr;
    Array* GB = gb_on ? &tp.grad(ib) : nullptr;
    const std::size_t na = A.size(), nb = B.size();
    broadcast_each(G.size(), na, nb, [&](std::size_t i, std::size_t x, std::size_t y) {
      auto [dx, dy] = d(A[x], B[y], Z[i]);
      if (GA) (*GA)[x] += G[i] * dx;
      if (GB) (*GB)[y] += G[i] * dy;
    });
  });
}

// f(x) -> y; d(x, y) -> dy/dx
template <class F, class D>
Var unary(Var a, F f, D d) {
  const Array& A = a.value();
  Array out(A.shape());
  for (std::size_t i = 0; i < A.size(); ++i) out[i] = f(A[i]);
  const std::size_t ia = a.id;
  return a.tape->record(std::move(out), {a}, [ia, d](Tape& tp, std::size_t self) {
    const Array& A = tp.value(ia);
    const Array& Y = tp.value(self);
    const Array& G = tp.grad(self);
    Array& GA = tp.grad(ia);
    for (std::size_t i = 0; i < G.size(); ++i) GA[i] += G[i] * d(A[i], Y[i]);
  });
}

std::size_t norm_axis(int axis, std::size_t rank, const char* op) {
  const int r = static_cast<int>(rank);
  const int k = axis < 0 ? r + axis : axis;
  if (k < 0 || k >= r) throw ContractError(std::string(op) + ": axis out of range");
  return static_cast<std::size_t>(k);
}

struct AxisSplit {
  std::size_t outer = 1, n = 1, inner = 1;
};

AxisSplit split_at(const Shape& s, std::size_t axis) {
  AxisSplit r;
  for (std::size_t i = 0; i < axis; ++i) r.outer *= s[i];
  r.n = s[axis];
  for (std::size_t i = axis + 1; i < s.size(); ++i) r.inner *= s[i];
  return r;
}

Shape drop_axis(const Shape& s, std::size_t axis) {
  Shape out;
  for (std::size_t i = 0; i < s.size(); ++i)
    if (i != axis) out.push_back(s[i]);
  if (out.empty()) out.push_back(1);
  return out;
}

}  // namespace

Var add(Var a, Var b) {
  return binary("add", a, b, [](double x, double y) { return x + y; },
                [](double, double, double) { return std::pair{1.0, 1.0}; });
}

Var sub(Var a, Var b) {
  return binary("sub", a, b, [](double x, double y) { return x - y; },
                [](double, double, double) { return std::pair{1.0, -1.0}; });
}

Var mul(Var a, Var b) {
  return binary("mul", a, b, [](double x, double y) { return x * y; },
                [](double x, double y, double) { return std::pair{y, x}; });
}

Var div(Var a, Var b) {
  return binary("div", a, b, [](double x, double y) { return x / y; },
                [](double, double y, double z) { return std::pair{1.0 / y, -z / y}; });
}

Var add_scalar(Var a, double s) {
  return unary(a, [s](double x) { return x + s; }, [](double, double) { return 1.0; });
}

Var scale(Var a, double s) {
  return unary(a, [s](double x) { return x * s; }, [s](double, double) { return s; });
}

Var neg(Var a) { return scale(a, -1.0); }

Var exp(Var a) {
  return unary(a, [](double x) { return std::exp(x); }, [](double, double y) { return y; });
}

Var log(Var a) {
  return unary(a, [](double x) { return std::log(x); }, [](double x, double) { return 1.0 / x; });
}

Var tanh(Var a) {
  return unary(a, [](double x) { return std::tanh(x); }, [](double, double y) { return 1.0 - y * y; });
}

Var relu(Var a) {
  return unary(a, [](double x) { return x > 0.0 ? x : 0.0; },
               [](double x, double) { return x > 0.0 ? 1.0 : 0.0; });
}

Var sin(Var a) {
  return unary(a, [](double x) { return std::sin(x); }, [](double x, double) { return std::cos(x); });
}

Var cos(Var a) {
  return unary(a, [](double x) { return std::cos(x); }, [](double x, double) { return -std::sin(x); });
}

Var sqrt(Var a) {
  return unary(a, [](double x) { return std::sqrt(x); }, [](double, double y) { return 0.5 / y; });
}

Var square(Var a) {
  return unary(a, [](double x) { return x * x; }, [](double x, double) { return 2.0 * x; });
}

Var clamp(Var a, double lo, double hi) {
  return unary(a, [lo, hi](double x) { return std::clamp(x, lo, hi); },
               [lo, hi](double x, double) { return (x >= lo && x <= hi) ? 1.0 : 0.0; });
}

Var softmax(Var a) {
  const Array& A = a.value();
  Array out(A.shape());
  const std::size_t n = A.cols(), rows = A.rows();
  for (std::size_t r = 0; r < rows; ++r) {
    const double* x = A.data() + r * n;
    double* y = out.data() + r * n;
    double mx = *std::max_element(x, x + n);
    double s = 0.0;
    for (std::size_t j = 0; j < n; ++j) s += (y[j] = std::exp(x[j] - mx));
    for (std::size_t j = 0; j < n; ++j) y[j] /= s;
  }
  const std::size_t ia = a.id;
  return a.tape->record(std::move(out), {a}, [ia, n, rows](Tape& tp, std::size_t self) {
    const Array& Y = tp.value(self);
    const Array& G = tp.grad(self);
    Array& GA = tp.grad(ia);
    for (std::size_t r = 0; r < rows; ++r) {
      const double* y = Y.data() + r * n;
      const double* g = G.data() + r * n;
      double dot = 0.0;
      for (std::size_t j = 0; j < n; ++j) dot += g[j] * y[j];
      for (std::size_t j = 0; j < n; ++j) GA[r * n + j] += y[j] * (g[j] - dot);
    }
  });
}

Var matmul(Var a, Var b) {
  const Array& A = a.value();
  const Array& B = b.value();
  const auto fail = [&]() {
    throw ContractError("matmul: incompatible shapes " + shape_str(A.shape()) + " and " + shape_str(B.shape()));
  };
  const std::size_t ia = a.id, ib = b.id;
  if (A.rank() < 2) fail();

  if (B.rank() == 2) {
    const std::size_t m = A.cols(), n = A.rows(), p = B.cols();
    if (B.dim(0) != m) fail();
    Shape os = A.shape();
    os.back() = p;
    Array out(os);
    MatMap(out.data(), n, p).noalias() = ConstMatMap(A.data(), n, m) * ConstMatMap(B.data(), m, p);
    return a.tape->record(std::move(out), {a, b}, [ia, ib, n, m, p](Tape& tp, std::size_t self) {
      ConstMatMap G(tp.grad(self).data(), n, p);
      if (tp.requires_grad(ia))
        MatMap(tp.grad(ia).data(), n, m).noalias() += G * ConstMatMap(tp.value(ib).data(), m, p).transpose();
      if (tp.requires_grad(ib))
        MatMap(tp.grad(ib).data(), m, p).noalias() += ConstMatMap(tp.value(ia).data(), n, m).transpose() * G;
    });
  }

  if (B.rank() != 3) fail();
  const std::size_t batch = B.dim(0), m = B.dim(1), p = B.dim(2);
  const bool shared_a = A.rank() == 2;
  if (!shared_a && (A.rank() != 3 || A.dim(0) != batch)) fail();
  const std::size_t n = A.dim(-2);
  if (A.dim(-1) != m) fail();
  Array out(Shape{batch, n, p});
  for (std::size_t k = 0; k < batch; ++k) {
    const double* ap = A.data() + (shared_a ? 0 : k * n * m);
    MatMap(out.data() + k * n * p, n, p).noalias() =
        ConstMatMap(ap, n, m) * ConstMatMap(B.data() + k * m * p, m, p);
  }
  return a.tape->record(std::move(out), {a, b}, [ia, ib, batch, n, m, p, shared_a](Tape& tp, std::size_t self) {
    const Array& G = tp.grad(self);
    const Array& A = tp.value(ia);
    const Array& B = tp.value(ib);
    for (std::size_t k = 0; k < batch; ++k) {
      ConstMatMap Gk(G.data() + k * n * p, n, p);
      const std::size_t aoff = shared_a ? 0 : k * n * m;
      if (tp.requires_grad(ia))
        MatMap(tp.grad(ia).data() + aoff, n, m).noalias() +=
            Gk * ConstMatMap(B.data() + k * m * p, m, p).transpose();
      if (tp.requires_grad(ib))
        MatMap(tp.grad(ib).data() + k * m * p, m, p).noalias() +=
            ConstMatMap(A.data() + aoff, n, m).transpose() * Gk;
    }
  });
}

Var reshape(Var a, Shape shape) {
  Array out = a.value().reshaped(std::move(shape));
  const std::size_t ia = a.id;
  return a.tape->record(std::move(out), {a}, [ia](Tape& tp, std::size_t self) {
    const Array& G = tp.grad(self);
    Array& GA = tp.grad(ia);
    for (std::size_t i = 0; i < G.size(); ++i) GA[i] += G[i];
  });
}

namespace {

// For each output linear index, the matching input linear index.
std::vector<std::size_t> permute_map(const Shape& in, const std::vector<std::size_t>& perm, Shape& out_shape) {
  const std::size_t r = in.size();
  if (perm.size() != r) throw ContractError("permute: perm rank does not match " + shape_str(in));
  std::vector<std::size_t> in_stride(r, 1);
  for (std::size_t i = r - 1; i-- > 0;) in_stride[i] = in_stride[i + 1] * in[i + 1];
  out_shape.assign(r, 0);
  std::vector<bool> seen(r, false);
  for (std::size_t i = 0; i < r; ++i) {
    if (perm[i] >= r || seen[perm[i]]) throw ContractError("permute: invalid permutation");
    seen[perm[i]] = true;
    out_shape[i] = in[perm[i]];
  }
  const std::size_t total = shape_size(in);
  std::vector<std::size_t> map(total);
  std::vector<std::size_t> idx(r, 0);
  for (std::size_t o = 0; o < total; ++o) {
    std::size_t src = 0;
    for (std::size_t i = 0; i < r; ++i) src += idx[i] * in_stride[perm[i]];
    map[o] = src;
    for (std::size_t i = r; i-- > 0;) {
      if (++idx[i] < out_shape[i]) break;
      idx[i] = 0;
    }
  }
  return map;
}

}  // namespace

Var permute(Var a, const std::vector<std::size_t>& perm) {
  const Array& A = a.value();
  Shape os;
  auto map = permute_map(A.shape(), perm, os);
  Array out(os);
  for (std::size_t o = 0; o < map.size(); ++o) out[o] = A[map[o]];
  const std::size_t ia = a.id;
  return a.tape->record(std::move(out), {a}, [ia, map = std::move(map)](Tape& tp, std::size_t self) {
    const Array& G = tp.grad(self);
    Array& GA = tp.grad(ia);
    for (std::size_t o = 0; o < map.size(); ++o) GA[map[o]] += G[o];
  });
}

Var transpose(Var a) {
  const std::size_t r = a.value().rank();
  if (r < 2) throw ContractError("transpose needs rank >= 2, got " + shape_str(a.shape()));
  std::vector<std::size_t> perm(r);
  for (std::size_t i = 0; i < r; ++i) perm[i] = i;
  std::swap(perm[r - 1], perm[r - 2]);
  return permute(a, perm);
}

Var gather_rows(Var a, const std::vector<std::size_t>& index) {
  const Array& A = a.value();
  const std::size_t n = A.dim(0);
  const std::size_t row = A.size() / n;
  Shape os = A.shape();
  os[0] = index.size();
  if (index.empty()) throw ContractError("gather_rows: empty index");
  Array out(os);
  for (std::size_t i = 0; i < index.size(); ++i) {
    if (index[i] >= n) throw ContractError("gather_rows: index out of range for " + shape_str(A.shape()));
    std::copy_n(A.data() + index[i] * row, row, out.data() + i * row);
  }
  const std::size_t ia = a.id;
  return a.tape->record(std::move(out), {a}, [ia, index, row](Tape& tp, std::size_t self) {
    const Array& G = tp.grad(self);
    Array& GA = tp.grad(ia);
    for (std::size_t i = 0; i < index.size(); ++i)
      for (std::size_t j = 0; j < row; ++j) GA[index[i] * row + j] += G[i * row + j];
  });
}

Var concat(const std::vector<Var>& parts, int axis) {
  if (parts.empty()) throw ContractError("concat: no inputs");
  const Shape& s0 = parts[0].shape();
  const std::size_t ax = norm_axis(axis, s0.size(), "concat");
  Shape os = s0;
  os[ax] = 0;
  std::vector<std::size_t> chunk(parts.size());
  for (std::size_t p = 0; p < parts.size(); ++p) {
    const Shape& s = parts[p].shape();
    if (s.size() != s0.size()) throw ContractError("concat: rank mismatch " + shape_str(s0) + " vs " + shape_str(s));
    for (std::size_t i = 0; i < s.size(); ++i)
      if (i != ax && s[i] != s0[i])
        throw ContractError("concat: shape mismatch " + shape_str(s0) + " vs " + shape_str(s));
    os[ax] += s[ax];
    chunk[p] = split_at(s, ax).n * split_at(s, ax).inner;
  }
  const std::size_t outer = split_at(s0, ax).outer;
  Array out(os);
  std::size_t row = 0;
  for (auto c : chunk) row += c;
  std::size_t off = 0;
  for (std::size_t p = 0; p < parts.size(); ++p) {
    const Array& P = parts[p].value();
    for (std::size_t o = 0; o < outer; ++o) std::copy_n(P.data() + o * chunk[p], chunk[p], out.data() + o * row + off);
    off += chunk[p];
  }
  std::vector<std::size_t> ids;
  for (const auto& p : parts) ids.push_back(p.id);
  return parts[0].tape->record(std::move(out), parts, [ids, chunk, outer, row](Tape& tp, std::size_t self) {
    const Array& G = tp.grad(self);
    std::size_t off = 0;
    for (std::size_t p = 0; p < ids.size(); ++p) {
      if (tp.requires_grad(ids[p])) {
        Array& GP = tp.grad(ids[p]);
        for (std::size_t o = 0; o < outer; ++o)
          for (std::size_t j = 0; j < chunk[p]; ++j) GP[o * chunk[p] + j] += G[o * row + off + j];
      }
      off += chunk[p];
    }
  });
}

Var slice(Var a, int axis, std::size_t begin, std::size_t end) {
  const Array& A = a.value();
  const std::size_t ax = norm_axis(axis, A.rank(), "slice");
  if (begin >= end || end > A.shape()[ax])
    throw ContractError("slice: range [" + std::to_string(begin) + ", " + std::to_string(end) + ") invalid for " +
                        shape_str(A.shape()));
  const AxisSplit sp = split_at(A.shape(), ax);
  Shape os = A.shape();
  os[ax] = end - begin;
  Array out(os);
  const std::size_t len = (end - begin) * sp.inner;
  for (std::size_t o = 0; o < sp.outer; ++o)
    std::copy_n(A.data() + (o * sp.n + begin) * sp.inner, len, out.data() + o * len);
  const std::size_t ia = a.id;
  return a.tape->record(std::move(out), {a}, [ia, sp, begin, len](Tape& tp, std::size_t self) {
    const Array& G = tp.grad(self);
    Array& GA = tp.grad(ia);
    for (std::size_t o = 0; o < sp.outer; ++o)
      for (std::size_t j = 0; j < len; ++j) GA[(o * sp.n + begin) * sp.inner + j] += G[o * len + j];
  });
}

Var repeat_last(Var a, std::size_t n) {
  const Array& A = a.value();
  Shape os = A.shape();
  os.push_back(n);
  Array out(os);
  for (std::size_t i = 0; i < A.size(); ++i)
    for (std::size_t j = 0; j < n; ++j) out[i * n + j] = A[i];
  const std::size_t ia = a.id;
  return a.tape->record(std::move(out), {a}, [ia, n](Tape& tp, std::size_t self) {
    const Array& G = tp.grad(self);
    Array& GA = tp.grad(ia);
    for (std::size_t i = 0; i < GA.size(); ++i)
      for (std::size_t j = 0; j < n; ++j) GA[i] += G[i * n + j];
  });
}

Var sum(Var a) {
  const Array& A = a.value();
  double s = 0.0;
  for (double v : A.values()) s += v;
  const std::size_t ia = a.id;
  return a.tape->record(Array::scalar(s), {a}, [ia](Tape& tp, std::size_t self) {
    const double g = tp.grad(self)[0];
    Array& GA = tp.grad(ia);
    for (std::size_t i = 0; i < GA.size(); ++i) GA[i] += g;
  });
}

Var mean(Var a) { return scale(sum(a), 1.0 / static_cast<double>(a.size())); }

Var sum_axis(Var a, int axis) {
  const Array& A = a.value();
  const std::size_t ax = norm_axis(axis, A.rank(), "sum_axis");
  const AxisSplit sp = split_at(A.shape(), ax);
  Array out(drop_axis(A.shape(), ax));
  for (std::size_t o = 0; o < sp.outer; ++o)
    for (std::size_t j = 0; j < sp.n; ++j)
      for (std::size_t i = 0; i < sp.inner; ++i) out[o * sp.inner + i] += A[(o * sp.n + j) * sp.inner + i];
  const std::size_t ia = a.id;
  return a.tape->record(std::move(out), {a}, [ia, sp](Tape& tp, std::size_t self) {
    const Array& G = tp.grad(self);
    Array& GA = tp.grad(ia);
    for (std::size_t o = 0; o < sp.outer; ++o)
      for (std::size_t j = 0; j < sp.n; ++j)
        for (std::size_t i = 0; i < sp.inner; ++i) GA[(o * sp.n + j) * sp.inner + i] += G[o * sp.inner + i];
  });
}

Var mean_axis(Var a, int axis) {
  const std::size_t ax = norm_axis(axis, a.value().rank(), "mean_axis");
  return scale(sum_axis(a, axis), 1.0 / static_cast<double>(a.shape()[ax]));
}

Var max_axis(Var a, int axis) {
  const Array& A = a.value();
  const std::size_t ax = norm_axis(axis, A.rank(), "max_axis");
  const AxisSplit sp = split_at(A.shape(), ax);
  Array out(drop_axis(A.shape(), ax), -std::numeric_limits<double>::infinity());
  std::vector<std::size_t> arg(sp.outer * sp.inner, 0);
  for (std::size_t o = 0; o < sp.outer; ++o)
    for (std::size_t j = 0; j < sp.n; ++j)
      for (std::size_t i = 0; i < sp.inner; ++i) {
        const std::size_t src = (o * sp.n + j) * sp.inner + i;
        const std::size_t dst = o * sp.inner + i;
        if (A[src] > out[dst]) {
          out[dst] = A[src];
          arg[dst] = src;
        }
      }
  const std::size_t ia = a.id;
  return a.tape->record(std::move(out), {a}, [ia, arg = std::move(arg)](Tape& tp, std::size_t self) {
    const Array& G = tp.grad(self);
    Array& GA = tp.grad(ia);
    for (std::size_t i = 0; i < arg.size(); ++i) GA[arg[i]] += G[i];
  });
}

Var layer_norm(Var x, Var gamma, Var beta, double eps) {
  const Array& X = x.value();
  const std::size_t n = X.cols(), rows = X.rows();
  if (gamma.size() != n || beta.size() != n)
    throw ContractError("layer_norm: gamma/beta " + shape_str(gamma.shape()) + " vs input " + shape_str(X.shape()));
  const Array& Gm = gamma.value();
  const Array& Bt = beta.value();
  Array out(X.shape());
  Array xhat(X.shape());
  std::vector<double> inv_std(rows);
  for (std::size_t r = 0; r < rows; ++r) {
    const double* xr = X.data() + r * n;
    double mu = 0.0;
    for (std::size_t j = 0; j < n; ++j) mu += xr[j];
    mu /= static_cast<double>(n);
    double var = 0.0;
    for (std::size_t j = 0; j < n; ++j) var += (xr[j] - mu) * (xr[j] - mu);
    var /= static_cast<double>(n);
    inv_std[r] = 1.0 / std::sqrt(var + eps);
    for (std::size_t j = 0; j < n; ++j) {
      xhat[r * n + j] = (xr[j] - mu) * inv_std[r];
      out[r * n + j] = Gm[j] * xhat[r * n + j] + Bt[j];
    }
  }
  const std::size_t ix = x.id, ig = gamma.id, ib = beta.id;
  return x.tape->record(std::move(out), {x, gamma, beta},
                        [ix, ig, ib, n, rows, xhat = std::move(xhat), inv_std = std::move(inv_std)](
                            Tape& tp, std::size_t self) {
                          const Array& G = tp.grad(self);
                          const Array& Gm = tp.value(ig);
                          if (tp.requires_grad(ig) || tp.requires_grad(ib)) {
                            Array* GG = tp.requires_grad(ig) ? &tp.grad(ig) : nullptr;
                            Array* GB = tp.requires_grad(ib) ? &tp.grad(ib) : nullptr;
                            for (std::size_t r = 0; r < rows; ++r)
                              for (std::size_t j = 0; j < n; ++j) {
                                if (GG) (*GG)[j] += G[r * n + j] * xhat[r * n + j];
                                if (GB) (*GB)[j] += G[r * n + j];
                              }
                          }
                          if (!tp.requires_grad(ix)) return;
                          Array& GX = tp.grad(ix);
                          const double inv_n = 1.0 / static_cast<double>(n);
                          for (std::size_t r = 0; r < rows; ++r) {
                            double m1 = 0.0, m2 = 0.0;
                            for (std::size_t j = 0; j < n; ++j) {
                              const double dxh = G[r * n + j] * Gm[j];
                              m1 += dxh;
                              m2 += dxh * xhat[r * n + j];
                            }
                            m1 *= inv_n;
                            m2 *= inv_n;
                            for (std::size_t j = 0; j < n; ++j) {
                              const double dxh = G[r * n + j] * Gm[j];
                              GX[r * n + j] += inv_std[r] * (dxh - m1 - xhat[r * n + j] * m2);
                            }
                          }
                        });
}

}  // namespace mvh
