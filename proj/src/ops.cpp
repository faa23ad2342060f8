#include "kd/ops.hpp"

#include <algorithm>
#include <cmath>

namespace kd {

void check_finite(const Tensor& t, const char* what) {
  if (!t.all_finite())
    throw InvalidArgument(std::string(what) + " contains non-finite values");
}

namespace {

void require(bool cond, const char* msg) {
  if (!cond) throw InvalidArgument(msg);
}

void require_same_shape(const Var& a, const Var& b, const char* op) {
  if (a.shape() != b.shape())
    throw InvalidArgument(std::string(op) + ": shape mismatch " +
                          shape_str(a.shape()) + " vs " + shape_str(b.shape()));
}

}  // namespace

Var add(const Var& a, const Var& b) {
  require_same_shape(a, b, "add");
  Tensor out = a.value();
  out.add_(b.value());
  return Var::op(std::move(out), {a, b}, [](Var::Node& n) {
    n.parents[0].accumulate_grad(n.grad);
    n.parents[1].accumulate_grad(n.grad);
  });
}

Var sub(const Var& a, const Var& b) {
  require_same_shape(a, b, "sub");
  Tensor out = a.value();
  const auto& bv = b.value();
  for (std::int64_t i = 0; i < out.numel(); ++i) out[i] -= bv[i];
  return Var::op(std::move(out), {a, b}, [](Var::Node& n) {
    n.parents[0].accumulate_grad(n.grad);
    Tensor gneg = n.grad;
    gneg.scale_(-1.0);
    n.parents[1].accumulate_grad(gneg);
  });
}

Var mul(const Var& a, const Var& b) {
  require_same_shape(a, b, "mul");
  Tensor out = a.value();
  const auto& bv = b.value();
  for (std::int64_t i = 0; i < out.numel(); ++i) out[i] *= bv[i];
  return Var::op(std::move(out), {a, b}, [](Var::Node& n) {
    const auto& av = n.parents[0].value();
    const auto& bv2 = n.parents[1].value();
    if (n.parents[0].requires_grad()) {
      Tensor ga = n.grad;
      for (std::int64_t i = 0; i < ga.numel(); ++i) ga[i] *= bv2[i];
      n.parents[0].accumulate_grad(ga);
    }
    if (n.parents[1].requires_grad()) {
      Tensor gb = n.grad;
      for (std::int64_t i = 0; i < gb.numel(); ++i) gb[i] *= av[i];
      n.parents[1].accumulate_grad(gb);
    }
  });
}

Var divide(const Var& a, const Var& b) {
  require_same_shape(a, b, "divide");
  Tensor out = a.value();
  const auto& bv = b.value();
  for (std::int64_t i = 0; i < out.numel(); ++i) out[i] /= bv[i];
  return Var::op(std::move(out), {a, b}, [](Var::Node& n) {
    const auto& av = n.parents[0].value();
    const auto& bv2 = n.parents[1].value();
    if (n.parents[0].requires_grad()) {
      Tensor ga = n.grad;
      for (std::int64_t i = 0; i < ga.numel(); ++i) ga[i] /= bv2[i];
      n.parents[0].accumulate_grad(ga);
    }
    if (n.parents[1].requires_grad()) {
      Tensor gb = n.grad;
      for (std::int64_t i = 0; i < gb.numel(); ++i)
        gb[i] *= -av[i] / (bv2[i] * bv2[i]);
      n.parents[1].accumulate_grad(gb);
    }
  });
}

Var add_scalar(const Var& a, double c) {
  Tensor out = a.value();
  for (std::int64_t i = 0; i < out.numel(); ++i) out[i] += c;
  return Var::op(std::move(out), {a}, [](Var::Node& n) {
    n.parents[0].accumulate_grad(n.grad);
  });
}

Var mul_scalar(const Var& a, double c) {
  Tensor out = a.value();
  out.scale_(c);
  return Var::op(std::move(out), {a}, [c](Var::Node& n) {
    Tensor g = n.grad;
    g.scale_(c);
    n.parents[0].accumulate_grad(g);
  });
}

Var neg(const Var& a) { return mul_scalar(a, -1.0); }

Var vexp(const Var& a) {
  Tensor out = a.value();
  for (std::int64_t i = 0; i < out.numel(); ++i) out[i] = std::exp(out[i]);
  return Var::op(std::move(out), {a}, [](Var::Node& n) {
    Tensor g = n.grad;
    for (std::int64_t i = 0; i < g.numel(); ++i) g[i] *= n.value[i];
    n.parents[0].accumulate_grad(g);
  });
}

Var vlog(const Var& a) {
  Tensor out = a.value();
  for (std::int64_t i = 0; i < out.numel(); ++i) out[i] = std::log(out[i]);
  return Var::op(std::move(out), {a}, [](Var::Node& n) {
    const auto& av = n.parents[0].value();
    Tensor g = n.grad;
    for (std::int64_t i = 0; i < g.numel(); ++i) g[i] /= av[i];
    n.parents[0].accumulate_grad(g);
  });
}

Var vsqrt(const Var& a) {
  Tensor out = a.value();
  for (std::int64_t i = 0; i < out.numel(); ++i) out[i] = std::sqrt(out[i]);
  return Var::op(std::move(out), {a}, [](Var::Node& n) {
    Tensor g = n.grad;
    for (std::int64_t i = 0; i < g.numel(); ++i) g[i] *= 0.5 / n.value[i];
    n.parents[0].accumulate_grad(g);
  });
}

Var relu(const Var& a) {
  Tensor out = a.value();
  for (std::int64_t i = 0; i < out.numel(); ++i) out[i] = std::max(out[i], 0.0);
  return Var::op(std::move(out), {a}, [](Var::Node& n) {
    const auto& av = n.parents[0].value();
    Tensor g = n.grad;
    for (std::int64_t i = 0; i < g.numel(); ++i)
      if (av[i] <= 0.0) g[i] = 0.0;
    n.parents[0].accumulate_grad(g);
  });
}

Var reciprocal(const Var& a) {
  Tensor out = a.value();
  for (std::int64_t i = 0; i < out.numel(); ++i) out[i] = 1.0 / out[i];
  return Var::op(std::move(out), {a}, [](Var::Node& n) {
    const auto& av = n.parents[0].value();
    Tensor g = n.grad;
    for (std::int64_t i = 0; i < g.numel(); ++i) g[i] *= -1.0 / (av[i] * av[i]);
    n.parents[0].accumulate_grad(g);
  });
}

Var scale_by(const Var& a, const Var& scalar) {
  require(scalar.value().numel() == 1, "scale_by: scalar operand must have numel 1");
  double s = scalar.value()[0];
  Tensor out = a.value();
  out.scale_(s);
  return Var::op(std::move(out), {a, scalar}, [s](Var::Node& n) {
    if (n.parents[0].requires_grad()) {
      Tensor ga = n.grad;
      ga.scale_(s);
      n.parents[0].accumulate_grad(ga);
    }
    if (n.parents[1].requires_grad()) {
      const auto& av = n.parents[0].value();
      double gs = 0.0;
      for (std::int64_t i = 0; i < av.numel(); ++i) gs += n.grad[i] * av[i];
      Tensor t = n.parents[1].value();
      t.fill(gs);
      n.parents[1].accumulate_grad(t);
    }
  });
}

Var sum(const Var& a) {
  double s = 0.0;
  for (std::int64_t i = 0; i < a.value().numel(); ++i) s += a.value()[i];
  return Var::op(Tensor::scalar(s), {a}, [](Var::Node& n) {
    Tensor g = Tensor::full(n.parents[0].shape(), n.grad[0]);
    n.parents[0].accumulate_grad(g);
  });
}

Var mean(const Var& a) {
  std::int64_t cnt = a.value().numel();
  require(cnt > 0, "mean of empty tensor");
  return mul_scalar(sum(a), 1.0 / static_cast<double>(cnt));
}

Var reshape(const Var& a, std::vector<std::int64_t> shape) {
  Tensor out = a.value().reshaped(shape);
  return Var::op(std::move(out), {a}, [](Var::Node& n) {
    n.parents[0].accumulate_grad(n.grad.reshaped(n.parents[0].shape()));
  });
}

Var transpose(const Var& a) {
  require(a.value().ndim() == 2, "transpose expects a 2-D tensor");
  std::int64_t r = a.value().dim(0), c = a.value().dim(1);
  Tensor out({c, r});
  for (std::int64_t i = 0; i < r; ++i)
    for (std::int64_t j = 0; j < c; ++j) out(j, i) = a.value()(i, j);
  return Var::op(std::move(out), {a}, [r, c](Var::Node& n) {
    Tensor g({r, c});
    for (std::int64_t i = 0; i < r; ++i)
      for (std::int64_t j = 0; j < c; ++j) g(i, j) = n.grad(j, i);
    n.parents[0].accumulate_grad(g);
  });
}

namespace {

// C(m,n) += A(m,k) * B(k,n), optionally transposing either input.
void gemm_acc(Tensor& c, const Tensor& a, bool ta, const Tensor& b, bool tb) {
  std::int64_t m = c.dim(0), n = c.dim(1);
  std::int64_t kk = ta ? a.dim(0) : a.dim(1);
  for (std::int64_t i = 0; i < m; ++i) {
    for (std::int64_t k = 0; k < kk; ++k) {
      double av = ta ? a(k, i) : a(i, k);
      if (av == 0.0) continue;
      const double* brow = tb ? nullptr : &b.data()[k * n];
      double* crow = &c.data()[i * n];
      if (!tb) {
        for (std::int64_t j = 0; j < n; ++j) crow[j] += av * brow[j];
      } else {
        for (std::int64_t j = 0; j < n; ++j) crow[j] += av * b(j, k);
      }
    }
  }
}

}  // namespace

Var matmul(const Var& a, const Var& b) {
  require(a.value().ndim() == 2 && b.value().ndim() == 2, "matmul expects 2-D tensors");
  require(a.value().dim(1) == b.value().dim(0), "matmul inner dimension mismatch");
  std::int64_t m = a.value().dim(0), n = b.value().dim(1);
  Tensor out({m, n});
  gemm_acc(out, a.value(), false, b.value(), false);
  return Var::op(std::move(out), {a, b}, [](Var::Node& n2) {
    const auto& av = n2.parents[0].value();
    const auto& bv = n2.parents[1].value();
    if (n2.parents[0].requires_grad()) {
      Tensor ga({av.dim(0), av.dim(1)});
      gemm_acc(ga, n2.grad, false, bv, true);
      n2.parents[0].accumulate_grad(ga);
    }
    if (n2.parents[1].requires_grad()) {
      Tensor gb({bv.dim(0), bv.dim(1)});
      gemm_acc(gb, av, true, n2.grad, false);
      n2.parents[1].accumulate_grad(gb);
    }
  });
}

Var add_rowvec(const Var& a, const Var& v) {
  require(a.value().ndim() == 2 && v.value().ndim() == 1, "add_rowvec expects (B,C) and (C)");
  require(a.value().dim(1) == v.value().dim(0), "add_rowvec width mismatch");
  std::int64_t rows = a.value().dim(0), cols = a.value().dim(1);
  Tensor out = a.value();
  for (std::int64_t i = 0; i < rows; ++i)
    for (std::int64_t j = 0; j < cols; ++j) out(i, j) += v.value()[j];
  return Var::op(std::move(out), {a, v}, [rows, cols](Var::Node& n) {
    if (n.parents[0].requires_grad()) n.parents[0].accumulate_grad(n.grad);
    if (n.parents[1].requires_grad()) {
      Tensor gv({cols});
      for (std::int64_t i = 0; i < rows; ++i)
        for (std::int64_t j = 0; j < cols; ++j) gv[j] += n.grad(i, j);
      n.parents[1].accumulate_grad(gv);
    }
  });
}

Var linear(const Var& x, const Var& weight, const Var& bias) {
  require(x.value().ndim() == 2 && weight.value().ndim() == 2, "linear expects 2-D x and weight");
  require(x.value().dim(1) == weight.value().dim(1), "linear input width mismatch");
  Var y = matmul(x, transpose(weight));
  if (bias.defined()) y = add_rowvec(y, bias);
  return y;
}

Var log_softmax_rows(const Var& a) {
  require(a.value().ndim() == 2, "log_softmax_rows expects (B,C)");
  std::int64_t rows = a.value().dim(0), cols = a.value().dim(1);
  Tensor out = a.value();
  for (std::int64_t i = 0; i < rows; ++i) {
    double mx = -1e300;
    for (std::int64_t j = 0; j < cols; ++j) mx = std::max(mx, out(i, j));
    double z = 0.0;
    for (std::int64_t j = 0; j < cols; ++j) z += std::exp(out(i, j) - mx);
    double lz = mx + std::log(z);
    for (std::int64_t j = 0; j < cols; ++j) out(i, j) -= lz;
  }
  return Var::op(std::move(out), {a}, [rows, cols](Var::Node& n) {
    // dx = g - softmax(x) * rowsum(g)
    Tensor g = n.grad;
    for (std::int64_t i = 0; i < rows; ++i) {
      double gs = 0.0;
      for (std::int64_t j = 0; j < cols; ++j) gs += n.grad(i, j);
      for (std::int64_t j = 0; j < cols; ++j)
        g(i, j) -= std::exp(n.value(i, j)) * gs;
    }
    n.parents[0].accumulate_grad(g);
  });
}

Var pick_rows(const Var& a, const std::vector<int>& idx) {
  require(a.value().ndim() == 2, "pick_rows expects (B,C)");
  std::int64_t rows = a.value().dim(0), cols = a.value().dim(1);
  require(static_cast<std::int64_t>(idx.size()) == rows, "pick_rows index count mismatch");
  Tensor out({rows});
  for (std::int64_t i = 0; i < rows; ++i) {
    require(idx[i] >= 0 && idx[i] < cols, "pick_rows index out of range");
    out[i] = a.value()(i, idx[i]);
  }
  std::vector<int> idx_copy = idx;
  return Var::op(std::move(out), {a}, [rows, cols, idx_copy](Var::Node& n) {
    Tensor g({rows, cols});
    for (std::int64_t i = 0; i < rows; ++i) g(i, idx_copy[i]) = n.grad[i];
    n.parents[0].accumulate_grad(g);
  });
}

Var huber(const Var& a, const Var& b, double delta) {
  require_same_shape(a, b, "huber");
  require(delta > 0.0, "huber delta must be positive");
  Tensor out = a.value();
  const auto& bv = b.value();
  for (std::int64_t i = 0; i < out.numel(); ++i) {
    double e = out[i] - bv[i];
    double ae = std::abs(e);
    out[i] = ae <= delta ? 0.5 * e * e : delta * (ae - 0.5 * delta);
  }
  return Var::op(std::move(out), {a, b}, [delta](Var::Node& n) {
    const auto& av = n.parents[0].value();
    const auto& bv2 = n.parents[1].value();
    Tensor ga = n.grad;
    for (std::int64_t i = 0; i < ga.numel(); ++i) {
      double e = av[i] - bv2[i];
      ga[i] *= std::clamp(e, -delta, delta);
    }
    if (n.parents[0].requires_grad()) n.parents[0].accumulate_grad(ga);
    if (n.parents[1].requires_grad()) {
      ga.scale_(-1.0);
      n.parents[1].accumulate_grad(ga);
    }
  });
}

Var fill_diagonal(const Var& a, double value) {
  require(a.value().ndim() == 2 && a.value().dim(0) == a.value().dim(1),
          "fill_diagonal expects a square matrix");
  std::int64_t nn = a.value().dim(0);
  Tensor out = a.value();
  for (std::int64_t i = 0; i < nn; ++i) out(i, i) = value;
  return Var::op(std::move(out), {a}, [nn](Var::Node& n) {
    Tensor g = n.grad;
    for (std::int64_t i = 0; i < nn; ++i) g(i, i) = 0.0;
    n.parents[0].accumulate_grad(g);
  });
}

Var rows_l2_normalize(const Var& a, double eps) {
  require(a.value().ndim() == 2, "rows_l2_normalize expects (B,D)");
  std::int64_t rows = a.value().dim(0), cols = a.value().dim(1);
  Tensor out = a.value();
  std::vector<double> norms(static_cast<std::size_t>(rows));
  for (std::int64_t i = 0; i < rows; ++i) {
    double s = 0.0;
    for (std::int64_t j = 0; j < cols; ++j) s += out(i, j) * out(i, j);
    double nv = std::sqrt(s);
    norms[static_cast<std::size_t>(i)] = nv;
    double inv = nv > eps ? 1.0 / nv : 0.0;
    for (std::int64_t j = 0; j < cols; ++j) out(i, j) *= inv;
  }
  return Var::op(std::move(out), {a}, [rows, cols, eps, norms](Var::Node& n) {
    Tensor g({rows, cols});
    for (std::int64_t i = 0; i < rows; ++i) {
      double nv = norms[static_cast<std::size_t>(i)];
      if (nv <= eps) continue;  // zero rows give zero gradient
      double gy = 0.0;
      for (std::int64_t j = 0; j < cols; ++j) gy += n.grad(i, j) * n.value(i, j);
      for (std::int64_t j = 0; j < cols; ++j)
        g(i, j) = (n.grad(i, j) - n.value(i, j) * gy) / nv;
    }
    n.parents[0].accumulate_grad(g);
  });
}

Var row_norms(const Var& a, double eps) {
  require(a.value().ndim() == 2, "row_norms expects (B,M)");
  std::int64_t rows = a.value().dim(0), cols = a.value().dim(1);
  Tensor out({rows});
  for (std::int64_t i = 0; i < rows; ++i) {
    double s = 0.0;
    for (std::int64_t j = 0; j < cols; ++j) {
      double v = a.value()(i, j);
      s += v * v;
    }
    out[i] = std::sqrt(s);
  }
  return Var::op(std::move(out), {a}, [rows, cols, eps](Var::Node& n) {
    const auto& av = n.parents[0].value();
    Tensor g({rows, cols});
    for (std::int64_t i = 0; i < rows; ++i) {
      double nv = n.value[i];
      if (nv <= eps) continue;
      double w = n.grad[i] / nv;
      for (std::int64_t j = 0; j < cols; ++j) g(i, j) = w * av(i, j);
    }
    n.parents[0].accumulate_grad(g);
  });
}

Var pairwise_distances(const Var& embeddings) {
  require(embeddings.value().ndim() == 2, "pairwise_distances expects (B,D)");
  std::int64_t b = embeddings.value().dim(0), d = embeddings.value().dim(1);
  const auto& e = embeddings.value();
  Tensor out({b, b});
  for (std::int64_t i = 0; i < b; ++i) {
    for (std::int64_t j = i + 1; j < b; ++j) {
      double s = 0.0;
      for (std::int64_t k = 0; k < d; ++k) {
        double diff = e(i, k) - e(j, k);
        s += diff * diff;
      }
      double dist = std::sqrt(s);
      out(i, j) = dist;
      out(j, i) = dist;
    }
  }
  return Var::op(std::move(out), {embeddings}, [b, d](Var::Node& n) {
    const auto& ev = n.parents[0].value();
    Tensor g({b, d});
    for (std::int64_t i = 0; i < b; ++i) {
      for (std::int64_t j = 0; j < b; ++j) {
        if (i == j) continue;
        double dist = n.value(i, j);
        if (dist <= 0.0) continue;  // coincident points: zero subgradient
        double w = n.grad(i, j) / dist;
        if (w == 0.0) continue;
        for (std::int64_t k = 0; k < d; ++k) {
          double diff = ev(i, k) - ev(j, k);
          g(i, k) += w * diff;
          g(j, k) -= w * diff;
        }
      }
    }
    n.parents[0].accumulate_grad(g);
  });
}

Var gram(const Var& features) {
  require(features.value().ndim() == 4, "gram expects (B,K,H,W)");
  const auto& f = features.value();
  std::int64_t b = f.dim(0), k = f.dim(1), hw = f.dim(2) * f.dim(3);
  Tensor out({b, k, k});
  for (std::int64_t n = 0; n < b; ++n) {
    const double* base = &f.data()[n * k * hw];
    for (std::int64_t i = 0; i < k; ++i) {
      for (std::int64_t j = i; j < k; ++j) {
        const double* fi = base + i * hw;
        const double* fj = base + j * hw;
        double s = 0.0;
        for (std::int64_t p = 0; p < hw; ++p) s += fi[p] * fj[p];
        out(n, i, j) = s;
        out(n, j, i) = s;
      }
    }
  }
  return Var::op(std::move(out), {features}, [b, k, hw](Var::Node& nd) {
    // dF = (G + G^T) F per instance
    const auto& f2 = nd.parents[0].value();
    Tensor g(nd.parents[0].shape());
    for (std::int64_t n = 0; n < b; ++n) {
      const double* fbase = &f2.data()[n * k * hw];
      double* gbase = &g.data()[n * k * hw];
      for (std::int64_t i = 0; i < k; ++i) {
        for (std::int64_t j = 0; j < k; ++j) {
          double w = nd.grad(n, i, j) + nd.grad(n, j, i);
          if (w == 0.0) continue;
          const double* fj = fbase + j * hw;
          double* gi = gbase + i * hw;
          for (std::int64_t p = 0; p < hw; ++p) gi[p] += w * fj[p];
        }
      }
    }
    nd.parents[0].accumulate_grad(g);
  });
}

Var conv2d(const Var& x, const Var& w, const Var& bias, const Conv2dSpec& spec) {
  require(x.value().ndim() == 4, "conv2d input must be (B,C,H,W)");
  require(w.value().ndim() == 4, "conv2d weight must be (Cout,Cin/groups,kh,kw)");
  require(spec.stride >= 1 && spec.padding >= 0 && spec.groups >= 1, "conv2d bad spec");
  const auto& xv = x.value();
  const auto& wv = w.value();
  std::int64_t B = xv.dim(0), Cin = xv.dim(1), H = xv.dim(2), W = xv.dim(3);
  std::int64_t Cout = wv.dim(0), Cg = wv.dim(1), kh = wv.dim(2), kw = wv.dim(3);
  std::int64_t g = spec.groups;
  require(Cin % g == 0 && Cout % g == 0, "conv2d channels not divisible by groups");
  require(Cg == Cin / g, "conv2d weight channel count mismatch");
  if (bias.defined()) {
    require(bias.value().ndim() == 1 && bias.value().dim(0) == Cout,
            "conv2d bias must be (Cout)");
  }
  std::int64_t s = spec.stride, p = spec.padding;
  std::int64_t Ho = (H + 2 * p - kh) / s + 1;
  std::int64_t Wo = (W + 2 * p - kw) / s + 1;
  require(Ho >= 1 && Wo >= 1, "conv2d output would be empty");

  Tensor out({B, Cout, Ho, Wo});
  std::int64_t cout_per_g = Cout / g;
  for (std::int64_t n = 0; n < B; ++n) {
    for (std::int64_t co = 0; co < Cout; ++co) {
      std::int64_t grp = co / cout_per_g;
      double bv = bias.defined() ? bias.value()[co] : 0.0;
      for (std::int64_t oh = 0; oh < Ho; ++oh) {
        for (std::int64_t ow = 0; ow < Wo; ++ow) {
          double acc = bv;
          for (std::int64_t cg = 0; cg < Cg; ++cg) {
            std::int64_t ci = grp * Cg + cg;
            for (std::int64_t r = 0; r < kh; ++r) {
              std::int64_t ih = oh * s - p + r;
              if (ih < 0 || ih >= H) continue;
              for (std::int64_t c = 0; c < kw; ++c) {
                std::int64_t iw = ow * s - p + c;
                if (iw < 0 || iw >= W) continue;
                acc += xv(n, ci, ih, iw) * wv(co, cg, r, c);
              }
            }
          }
          out(n, co, oh, ow) = acc;
        }
      }
    }
  }

  std::vector<Var> parents = bias.defined() ? std::vector<Var>{x, w, bias}
                                            : std::vector<Var>{x, w};
  Conv2dSpec sp = spec;
  return Var::op(std::move(out), std::move(parents), [sp, B, Cin, H, W, Cout, Cg, kh, kw,
                                                      Ho, Wo](Var::Node& nd) {
    const auto& xv2 = nd.parents[0].value();
    const auto& wv2 = nd.parents[1].value();
    std::int64_t s2 = sp.stride, p2 = sp.padding;
    std::int64_t cout_per_g = Cout / sp.groups;
    bool need_x = nd.parents[0].requires_grad();
    bool need_w = nd.parents[1].requires_grad();
    bool need_b = nd.parents.size() > 2 && nd.parents[2].requires_grad();
    Tensor gx = need_x ? Tensor({B, Cin, H, W}) : Tensor();
    Tensor gw = need_w ? Tensor({Cout, Cg, kh, kw}) : Tensor();
    Tensor gb = need_b ? Tensor({Cout}) : Tensor();
    for (std::int64_t n = 0; n < B; ++n) {
      for (std::int64_t co = 0; co < Cout; ++co) {
        std::int64_t grp = co / cout_per_g;
        for (std::int64_t oh = 0; oh < Ho; ++oh) {
          for (std::int64_t ow = 0; ow < Wo; ++ow) {
            double go = nd.grad(n, co, oh, ow);
            if (go == 0.0) continue;
            if (need_b) gb[co] += go;
            for (std::int64_t cg = 0; cg < Cg; ++cg) {
              std::int64_t ci = grp * Cg + cg;
              for (std::int64_t r = 0; r < kh; ++r) {
                std::int64_t ih = oh * s2 - p2 + r;
                if (ih < 0 || ih >= H) continue;
                for (std::int64_t c = 0; c < kw; ++c) {
                  std::int64_t iw = ow * s2 - p2 + c;
                  if (iw < 0 || iw >= W) continue;
                  if (need_x) gx(n, ci, ih, iw) += go * wv2(co, cg, r, c);
                  if (need_w) gw(co, cg, r, c) += go * xv2(n, ci, ih, iw);
                }
              }
            }
          }
        }
      }
    }
    if (need_x) nd.parents[0].accumulate_grad(gx);
    if (need_w) nd.parents[1].accumulate_grad(gw);
    if (need_b) nd.parents[2].accumulate_grad(gb);
  });
}

Var max_pool2d(const Var& x, int kernel, int stride, int padding) {
  require(x.value().ndim() == 4, "max_pool2d input must be (B,C,H,W)");
  const auto& xv = x.value();
  std::int64_t B = xv.dim(0), C = xv.dim(1), H = xv.dim(2), W = xv.dim(3);
  std::int64_t Ho = (H + 2 * padding - kernel) / stride + 1;
  std::int64_t Wo = (W + 2 * padding - kernel) / stride + 1;
  require(Ho >= 1 && Wo >= 1, "max_pool2d output would be empty");
  Tensor out({B, C, Ho, Wo});
  std::vector<std::int64_t> argmax(static_cast<std::size_t>(B * C * Ho * Wo), -1);
  std::int64_t idx = 0;
  for (std::int64_t n = 0; n < B; ++n)
    for (std::int64_t c = 0; c < C; ++c)
      for (std::int64_t oh = 0; oh < Ho; ++oh)
        for (std::int64_t ow = 0; ow < Wo; ++ow, ++idx) {
          double best = -1e300;
          std::int64_t besti = -1;
          for (int r = 0; r < kernel; ++r) {
            std::int64_t ih = oh * stride - padding + r;
            if (ih < 0 || ih >= H) continue;
            for (int cc = 0; cc < kernel; ++cc) {
              std::int64_t iw = ow * stride - padding + cc;
              if (iw < 0 || iw >= W) continue;
              double v = xv(n, c, ih, iw);
              if (v > best) {
                best = v;
                besti = ((n * C + c) * H + ih) * W + iw;
              }
            }
          }
          out[idx] = besti >= 0 ? best : 0.0;
          argmax[static_cast<std::size_t>(idx)] = besti;
        }
  return Var::op(std::move(out), {x}, [argmax](Var::Node& nd) {
    Tensor g(nd.parents[0].shape());
    for (std::int64_t i = 0; i < nd.grad.numel(); ++i) {
      std::int64_t src = argmax[static_cast<std::size_t>(i)];
      if (src >= 0) g[src] += nd.grad[i];
    }
    nd.parents[0].accumulate_grad(g);
  });
}

namespace {

struct LerpWeights {
  std::int64_t lo, hi;
  double wlo, whi;
};

// Half-pixel-center source coordinates, clamped to the valid range.
LerpWeights lerp_axis(std::int64_t out_i, std::int64_t out_n, std::int64_t in_n) {
  double src = (static_cast<double>(out_i) + 0.5) * static_cast<double>(in_n) /
                   static_cast<double>(out_n) -
               0.5;
  src = std::max(0.0, std::min(src, static_cast<double>(in_n - 1)));
  std::int64_t lo = static_cast<std::int64_t>(std::floor(src));
  std::int64_t hi = std::min(lo + 1, in_n - 1);
  double frac = src - static_cast<double>(lo);
  return {lo, hi, 1.0 - frac, frac};
}

}  // namespace

Var bilinear_resize(const Var& x, std::int64_t out_h, std::int64_t out_w) {
  require(x.value().ndim() == 4, "bilinear_resize input must be (B,C,H,W)");
  require(out_h >= 1 && out_w >= 1, "bilinear_resize target must be positive");
  const auto& xv = x.value();
  std::int64_t B = xv.dim(0), C = xv.dim(1), H = xv.dim(2), W = xv.dim(3);
  if (out_h == H && out_w == W) {
    Tensor out = xv;
    return Var::op(std::move(out), {x},
                   [](Var::Node& nd) { nd.parents[0].accumulate_grad(nd.grad); });
  }
  std::vector<LerpWeights> rows(static_cast<std::size_t>(out_h));
  std::vector<LerpWeights> cols(static_cast<std::size_t>(out_w));
  for (std::int64_t i = 0; i < out_h; ++i) rows[static_cast<std::size_t>(i)] = lerp_axis(i, out_h, H);
  for (std::int64_t j = 0; j < out_w; ++j) cols[static_cast<std::size_t>(j)] = lerp_axis(j, out_w, W);
  Tensor out({B, C, out_h, out_w});
  for (std::int64_t n = 0; n < B; ++n)
    for (std::int64_t c = 0; c < C; ++c)
      for (std::int64_t i = 0; i < out_h; ++i) {
        const auto& rw = rows[static_cast<std::size_t>(i)];
        for (std::int64_t j = 0; j < out_w; ++j) {
          const auto& cw = cols[static_cast<std::size_t>(j)];
          out(n, c, i, j) = rw.wlo * (cw.wlo * xv(n, c, rw.lo, cw.lo) + cw.whi * xv(n, c, rw.lo, cw.hi)) +
                            rw.whi * (cw.wlo * xv(n, c, rw.hi, cw.lo) + cw.whi * xv(n, c, rw.hi, cw.hi));
        }
      }
  return Var::op(std::move(out), {x}, [B, C, out_h, out_w, rows, cols](Var::Node& nd) {
    Tensor g(nd.parents[0].shape());
    for (std::int64_t n = 0; n < B; ++n)
      for (std::int64_t c = 0; c < C; ++c)
        for (std::int64_t i = 0; i < out_h; ++i) {
          const auto& rw = rows[static_cast<std::size_t>(i)];
          for (std::int64_t j = 0; j < out_w; ++j) {
            const auto& cw = cols[static_cast<std::size_t>(j)];
            double go = nd.grad(n, c, i, j);
            if (go == 0.0) continue;
            g(n, c, rw.lo, cw.lo) += go * rw.wlo * cw.wlo;
            g(n, c, rw.lo, cw.hi) += go * rw.wlo * cw.whi;
            g(n, c, rw.hi, cw.lo) += go * rw.whi * cw.wlo;
            g(n, c, rw.hi, cw.hi) += go * rw.whi * cw.whi;
          }
        }
    nd.parents[0].accumulate_grad(g);
  });
}

Var instance_norm(const Var& x, const Var& gamma, const Var& beta, double eps) {
  require(x.value().ndim() == 4, "instance_norm input must be (B,C,H,W)");
  const auto& xv = x.value();
  std::int64_t B = xv.dim(0), C = xv.dim(1), m = xv.dim(2) * xv.dim(3);
  require(gamma.value().ndim() == 1 && gamma.value().dim(0) == C, "instance_norm gamma must be (C)");
  require(beta.value().ndim() == 1 && beta.value().dim(0) == C, "instance_norm beta must be (C)");
  Tensor out(x.shape());
  Tensor xhat(x.shape());
  std::vector<double> inv_std(static_cast<std::size_t>(B * C));
  for (std::int64_t n = 0; n < B; ++n) {
    for (std::int64_t c = 0; c < C; ++c) {
      const double* px = &xv.data()[(n * C + c) * m];
      double mu = 0.0;
      for (std::int64_t i = 0; i < m; ++i) mu += px[i];
      mu /= static_cast<double>(m);
      double var = 0.0;
      for (std::int64_t i = 0; i < m; ++i) {
        double d = px[i] - mu;
        var += d * d;
      }
      var /= static_cast<double>(m);
      double istd = 1.0 / std::sqrt(var + eps);
      inv_std[static_cast<std::size_t>(n * C + c)] = istd;
      double gc = gamma.value()[c], bc = beta.value()[c];
      double* ph = &xhat.data()[(n * C + c) * m];
      double* po = &out.data()[(n * C + c) * m];
      for (std::int64_t i = 0; i < m; ++i) {
        ph[i] = (px[i] - mu) * istd;
        po[i] = gc * ph[i] + bc;
      }
    }
  }
  return Var::op(std::move(out), {x, gamma, beta},
                 [B, C, m, xhat, inv_std](Var::Node& nd) {
    bool need_x = nd.parents[0].requires_grad();
    bool need_g = nd.parents[1].requires_grad();
    bool need_b = nd.parents[2].requires_grad();
    Tensor gx = need_x ? Tensor(nd.parents[0].shape()) : Tensor();
    Tensor gg = need_g ? Tensor({C}) : Tensor();
    Tensor gb = need_b ? Tensor({C}) : Tensor();
    for (std::int64_t n = 0; n < B; ++n) {
      for (std::int64_t c = 0; c < C; ++c) {
        const double* ph = &xhat.data()[(n * C + c) * m];
        const double* pg = &nd.grad.data()[(n * C + c) * m];
        double sum_g = 0.0, sum_gx = 0.0;
        for (std::int64_t i = 0; i < m; ++i) {
          sum_g += pg[i];
          sum_gx += pg[i] * ph[i];
        }
        if (need_b) gb[c] += sum_g;
        if (need_g) gg[c] += sum_gx;
        if (need_x) {
          double gc = nd.parents[1].value()[c];
          double istd = inv_std[static_cast<std::size_t>(n * C + c)];
          double mg = sum_g / static_cast<double>(m);
          double mgx = sum_gx / static_cast<double>(m);
          double* px = &gx.data()[(n * C + c) * m];
          for (std::int64_t i = 0; i < m; ++i)
            px[i] = gc * istd * (pg[i] - mg - ph[i] * mgx);
        }
      }
    }
    if (need_x) nd.parents[0].accumulate_grad(gx);
    if (need_g) nd.parents[1].accumulate_grad(gg);
    if (need_b) nd.parents[2].accumulate_grad(gb);
  });
}

Var global_avg_pool(const Var& x) {
  require(x.value().ndim() == 4, "global_avg_pool input must be (B,C,H,W)");
  const auto& xv = x.value();
  std::int64_t B = xv.dim(0), C = xv.dim(1), m = xv.dim(2) * xv.dim(3);
  Tensor out({B, C});
  for (std::int64_t n = 0; n < B; ++n)
    for (std::int64_t c = 0; c < C; ++c) {
      const double* p = &xv.data()[(n * C + c) * m];
      double s = 0.0;
      for (std::int64_t i = 0; i < m; ++i) s += p[i];
      out(n, c) = s / static_cast<double>(m);
    }
  return Var::op(std::move(out), {x}, [B, C, m](Var::Node& nd) {
    Tensor g(nd.parents[0].shape());
    for (std::int64_t n = 0; n < B; ++n)
      for (std::int64_t c = 0; c < C; ++c) {
        double go = nd.grad(n, c) / static_cast<double>(m);
        double* p = &g.data()[(n * C + c) * m];
        for (std::int64_t i = 0; i < m; ++i) p[i] = go;
      }
    nd.parents[0].accumulate_grad(g);
  });
}

AnglePotentials angle_potentials_op(const Var& embeddings, double eps) {
  require(embeddings.value().ndim() == 2, "angle_potentials expects (B,D)");
  std::int64_t b = embeddings.value().dim(0), d = embeddings.value().dim(1);
  const auto& e = embeddings.value();
  Tensor out({b, b, b});
  Tensor mask({b, b, b});
  for (std::int64_t i = 0; i < b; ++i) {
    for (std::int64_t j = 0; j < b; ++j) {
      if (j == i) continue;
      for (std::int64_t k = 0; k < b; ++k) {
        if (k == i || k == j) continue;
        double nu = 0.0, nv = 0.0, dot = 0.0;
        for (std::int64_t t = 0; t < d; ++t) {
          double u = e(i, t) - e(j, t);
          double v = e(k, t) - e(j, t);
          nu += u * u;
          nv += v * v;
          dot += u * v;
        }
        nu = std::sqrt(nu);
        nv = std::sqrt(nv);
        if (nu <= eps || nv <= eps) continue;  // coincident pair: masked out
        out(i, j, k) = dot / (nu * nv);
        mask(i, j, k) = 1.0;
      }
    }
  }
  Tensor mask_copy = mask;
  Var values = Var::op(std::move(out), {embeddings}, [b, d, mask_copy](Var::Node& nd) {
    const auto& ev = nd.parents[0].value();
    Tensor g({b, d});
    std::vector<double> u(static_cast<std::size_t>(d)), v(static_cast<std::size_t>(d));
    for (std::int64_t i = 0; i < b; ++i) {
      for (std::int64_t j = 0; j < b; ++j) {
        if (j == i) continue;
        for (std::int64_t k = 0; k < b; ++k) {
          if (k == i || k == j) continue;
          if (mask_copy(i, j, k) == 0.0) continue;
          double go = nd.grad(i, j, k);
          if (go == 0.0) continue;
          double nu = 0.0, nv = 0.0;
          for (std::int64_t t = 0; t < d; ++t) {
            u[static_cast<std::size_t>(t)] = ev(i, t) - ev(j, t);
            v[static_cast<std::size_t>(t)] = ev(k, t) - ev(j, t);
            nu += u[static_cast<std::size_t>(t)] * u[static_cast<std::size_t>(t)];
            nv += v[static_cast<std::size_t>(t)] * v[static_cast<std::size_t>(t)];
          }
          nu = std::sqrt(nu);
          nv = std::sqrt(nv);
          double c = nd.value(i, j, k);
          for (std::int64_t t = 0; t < d; ++t) {
            double uh = u[static_cast<std::size_t>(t)] / nu;
            double vh = v[static_cast<std::size_t>(t)] / nv;
            double du = (vh - c * uh) / nu;
            double dv = (uh - c * vh) / nv;
            g(i, t) += go * du;
            g(k, t) += go * dv;
            g(j, t) -= go * (du + dv);
          }
        }
      }
    }
    nd.parents[0].accumulate_grad(g);
  });
  return {values, mask};
}

}  // namespace kd
