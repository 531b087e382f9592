#include "supermoe/ops.hpp"

#include <algorithm>
#include <cmath>
#include <initializer_list>

namespace supermoe {

using detail::AdjointMap;
using detail::adjoint_of;
using detail::NodePtr;

namespace {

Tape* tape_of(std::initializer_list<const Tensor*> inputs) {
  Tape* t = nullptr;
  for (const Tensor* x : inputs) {
    if (!x->defined()) continue;
    Tape* xt = x->node()->tape;
    if (!xt) continue;
    if (t && t != xt) throw ContractError("operation mixes tensors from different tapes");
    t = xt;
  }
  return t;
}

bool any_requires(std::initializer_list<const Tensor*> inputs) {
  for (const Tensor* x : inputs)
    if (x->defined() && x->requires_grad()) return true;
  return false;
}

// Shared op epilogue: float32 rounding, tape propagation, recording.
Tensor finish(Shape shape, std::vector<double> values, std::initializer_list<const Tensor*> inputs,
              Tape::BackwardFn backward) {
  Tape* tape = tape_of(inputs);
  if (tape) tape->apply_precision(values);
  Tensor out = Tensor::constant(std::move(shape), std::move(values));
  if (tape) {
    out.node()->tape = tape;
    if (grad_enabled() && any_requires(inputs)) {
      out.node()->requires_grad = true;
      tape->record(out.node(), std::move(backward));
    }
  }
  return out;
}

void require_rank(const Tensor& x, int rank, const char* op) {
  if (x.rank() != rank)
    throw ShapeError(std::string(op) + " requires rank-" + std::to_string(rank) + ", got " +
                     shape_to_string(x.shape()));
}

void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  if (a.shape() != b.shape())
    throw ShapeError(std::string(op) + " requires equal shapes, got " + shape_to_string(a.shape()) +
                     " and " + shape_to_string(b.shape()));
}

}  // namespace

Tensor matmul(const Tensor& a, const Tensor& b) {
  require_rank(a, 2, "matmul");
  require_rank(b, 2, "matmul");
  if (a.dim(1) != b.dim(0))
    throw ShapeError("matmul inner dimensions disagree: " + shape_to_string(a.shape()) + " x " +
                     shape_to_string(b.shape()));
  const std::int64_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
  const auto& av = a.values();
  const auto& bv = b.values();
  std::vector<double> out(static_cast<std::size_t>(m * n), 0.0);
  for (std::int64_t i = 0; i < m; ++i) {
    double* orow = out.data() + i * n;
    const double* arow = av.data() + i * k;
    for (std::int64_t p = 0; p < k; ++p) {
      const double aip = arow[p];
      if (aip == 0.0) continue;
      const double* brow = bv.data() + p * n;
      for (std::int64_t j = 0; j < n; ++j) orow[j] += aip * brow[j];
    }
  }
  auto an = a.node();
  auto bn = b.node();
  return finish({m, n}, std::move(out), {&a, &b}, [an, bn, m, k, n](const std::vector<double>& g, AdjointMap& adj) {
    if (an->requires_grad) {
      auto& ga = adjoint_of(adj, an.get());
      // dA = G B^T
      for (std::int64_t i = 0; i < m; ++i)
        for (std::int64_t p = 0; p < k; ++p) {
          double acc = 0.0;
          const double* grow = g.data() + i * n;
          const double* brow = bn->values.data() + p * n;
          for (std::int64_t j = 0; j < n; ++j) acc += grow[j] * brow[j];
          ga[static_cast<std::size_t>(i * k + p)] += acc;
        }
    }
    if (bn->requires_grad) {
      auto& gb = adjoint_of(adj, bn.get());
      // dB = A^T G
      for (std::int64_t i = 0; i < m; ++i) {
        const double* arow = an->values.data() + i * k;
        const double* grow = g.data() + i * n;
        for (std::int64_t p = 0; p < k; ++p) {
          const double aip = arow[p];
          if (aip == 0.0) continue;
          double* brow = gb.data() + p * n;
          for (std::int64_t j = 0; j < n; ++j) brow[j] += aip * grow[j];
        }
      }
    }
  });
}

Tensor transpose(const Tensor& x) {
  require_rank(x, 2, "transpose");
  const std::int64_t r = x.dim(0), c = x.dim(1);
  const auto& xv = x.values();
  std::vector<double> out(xv.size());
  for (std::int64_t i = 0; i < r; ++i)
    for (std::int64_t j = 0; j < c; ++j) out[static_cast<std::size_t>(j * r + i)] = xv[static_cast<std::size_t>(i * c + j)];
  auto xn = x.node();
  return finish({c, r}, std::move(out), {&x}, [xn, r, c](const std::vector<double>& g, AdjointMap& adj) {
    if (!xn->requires_grad) return;
    auto& gx = adjoint_of(adj, xn.get());
    for (std::int64_t j = 0; j < c; ++j)
      for (std::int64_t i = 0; i < r; ++i) gx[static_cast<std::size_t>(i * c + j)] += g[static_cast<std::size_t>(j * r + i)];
  });
}

Tensor add(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "add");
  const auto& av = a.values();
  const auto& bv = b.values();
  std::vector<double> out(av.size());
  for (std::size_t i = 0; i < av.size(); ++i) out[i] = av[i] + bv[i];
  auto an = a.node();
  auto bn = b.node();
  return finish(a.shape(), std::move(out), {&a, &b}, [an, bn](const std::vector<double>& g, AdjointMap& adj) {
    if (an->requires_grad) {
      auto& ga = adjoint_of(adj, an.get());
      for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
    }
    if (bn->requires_grad) {
      auto& gb = adjoint_of(adj, bn.get());
      for (std::size_t i = 0; i < g.size(); ++i) gb[i] += g[i];
    }
  });
}

Tensor sub(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "sub");
  const auto& av = a.values();
  const auto& bv = b.values();
  std::vector<double> out(av.size());
  for (std::size_t i = 0; i < av.size(); ++i) out[i] = av[i] - bv[i];
  auto an = a.node();
  auto bn = b.node();
  return finish(a.shape(), std::move(out), {&a, &b}, [an, bn](const std::vector<double>& g, AdjointMap& adj) {
    if (an->requires_grad) {
      auto& ga = adjoint_of(adj, an.get());
      for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
    }
    if (bn->requires_grad) {
      auto& gb = adjoint_of(adj, bn.get());
      for (std::size_t i = 0; i < g.size(); ++i) gb[i] -= g[i];
    }
  });
}

Tensor mul(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "mul");
  const auto& av = a.values();
  const auto& bv = b.values();
  std::vector<double> out(av.size());
  for (std::size_t i = 0; i < av.size(); ++i) out[i] = av[i] * bv[i];
  auto an = a.node();
  auto bn = b.node();
  return finish(a.shape(), std::move(out), {&a, &b}, [an, bn](const std::vector<double>& g, AdjointMap& adj) {
    if (an->requires_grad) {
      auto& ga = adjoint_of(adj, an.get());
      for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * bn->values[i];
    }
    if (bn->requires_grad) {
      auto& gb = adjoint_of(adj, bn.get());
      for (std::size_t i = 0; i < g.size(); ++i) gb[i] += g[i] * an->values[i];
    }
  });
}

Tensor affine(const Tensor& x, double scale, double shift) {
  const auto& xv = x.values();
  std::vector<double> out(xv.size());
  for (std::size_t i = 0; i < xv.size(); ++i) out[i] = scale * xv[i] + shift;
  auto xn = x.node();
  return finish(x.shape(), std::move(out), {&x}, [xn, scale](const std::vector<double>& g, AdjointMap& adj) {
    if (!xn->requires_grad) return;
    auto& gx = adjoint_of(adj, xn.get());
    for (std::size_t i = 0; i < g.size(); ++i) gx[i] += scale * g[i];
  });
}

Tensor add_broadcast_scalar(const Tensor& x, const Tensor& s) {
  if (s.numel() != 1) throw ShapeError("add_broadcast_scalar needs a scalar, got " + shape_to_string(s.shape()));
  const double sv = s.values()[0];
  const auto& xv = x.values();
  std::vector<double> out(xv.size());
  for (std::size_t i = 0; i < xv.size(); ++i) out[i] = xv[i] + sv;
  auto xn = x.node();
  auto sn = s.node();
  return finish(x.shape(), std::move(out), {&x, &s}, [xn, sn](const std::vector<double>& g, AdjointMap& adj) {
    if (xn->requires_grad) {
      auto& gx = adjoint_of(adj, xn.get());
      for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i];
    }
    if (sn->requires_grad) {
      auto& gs = adjoint_of(adj, sn.get());
      double acc = 0.0;
      for (double v : g) acc += v;
      gs[0] += acc;
    }
  });
}

Tensor mul_col(const Tensor& x, const Tensor& col) {
  require_rank(x, 2, "mul_col");
  const std::int64_t r = x.dim(0), c = x.dim(1);
  if (col.numel() != r)
    throw ShapeError("mul_col column length " + shape_to_string(col.shape()) + " does not match rows of " +
                     shape_to_string(x.shape()));
  const auto& xv = x.values();
  const auto& cv = col.values();
  std::vector<double> out(xv.size());
  for (std::int64_t i = 0; i < r; ++i)
    for (std::int64_t j = 0; j < c; ++j) out[static_cast<std::size_t>(i * c + j)] = xv[static_cast<std::size_t>(i * c + j)] * cv[static_cast<std::size_t>(i)];
  auto xn = x.node();
  auto cn = col.node();
  return finish(x.shape(), std::move(out), {&x, &col}, [xn, cn, r, c](const std::vector<double>& g, AdjointMap& adj) {
    if (xn->requires_grad) {
      auto& gx = adjoint_of(adj, xn.get());
      for (std::int64_t i = 0; i < r; ++i)
        for (std::int64_t j = 0; j < c; ++j) gx[static_cast<std::size_t>(i * c + j)] += g[static_cast<std::size_t>(i * c + j)] * cn->values[static_cast<std::size_t>(i)];
    }
    if (cn->requires_grad) {
      auto& gc = adjoint_of(adj, cn.get());
      for (std::int64_t i = 0; i < r; ++i) {
        double acc = 0.0;
        for (std::int64_t j = 0; j < c; ++j) acc += g[static_cast<std::size_t>(i * c + j)] * xn->values[static_cast<std::size_t>(i * c + j)];
        gc[static_cast<std::size_t>(i)] += acc;
      }
    }
  });
}

Tensor relu(const Tensor& x) {
  const auto& xv = x.values();
  if (auto* probe = KinkProbe::current()) {
    for (double v : xv) probe->min_relu = std::min(probe->min_relu, std::abs(v));
  }
  std::vector<double> out(xv.size());
  for (std::size_t i = 0; i < xv.size(); ++i) out[i] = xv[i] > 0.0 ? xv[i] : 0.0;
  auto xn = x.node();
  return finish(x.shape(), std::move(out), {&x}, [xn](const std::vector<double>& g, AdjointMap& adj) {
    if (!xn->requires_grad) return;
    auto& gx = adjoint_of(adj, xn.get());
    for (std::size_t i = 0; i < g.size(); ++i)
      if (xn->values[i] > 0.0) gx[i] += g[i];
  });
}

Tensor softmax(const Tensor& x, int axis) {
  const int rank = x.rank();
  if (axis < 0) axis += rank;
  if (axis < 0 || axis >= rank) throw ShapeError("softmax axis out of range for " + shape_to_string(x.shape()));
  const auto& xv = x.values();
  for (double v : xv)
    if (std::isnan(v)) throw NumericError("softmax input contains NaN");
  const std::int64_t len = x.dim(axis);
  std::int64_t inner = 1, outer = 1;
  for (int i = axis + 1; i < rank; ++i) inner *= x.dim(i);
  for (int i = 0; i < axis; ++i) outer *= x.dim(i);

  std::vector<double> out(xv.size());
  for (std::int64_t o = 0; o < outer; ++o) {
    for (std::int64_t in = 0; in < inner; ++in) {
      const std::int64_t base = o * len * inner + in;
      double mx = -1e300;
      for (std::int64_t k = 0; k < len; ++k) mx = std::max(mx, xv[static_cast<std::size_t>(base + k * inner)]);
      double denom = 0.0;
      for (std::int64_t k = 0; k < len; ++k) {
        double e = std::exp(xv[static_cast<std::size_t>(base + k * inner)] - mx);
        out[static_cast<std::size_t>(base + k * inner)] = e;
        denom += e;
      }
      for (std::int64_t k = 0; k < len; ++k) out[static_cast<std::size_t>(base + k * inner)] /= denom;
    }
  }
  auto xn = x.node();
  Tape* tape = tape_of({&x});
  if (tape) tape->apply_precision(out);
  Tensor result = Tensor::constant(x.shape(), std::move(out));
  if (tape) {
    result.node()->tape = tape;
    if (grad_enabled() && xn->requires_grad) {
      result.node()->requires_grad = true;
      auto on = result.node();
      tape->record(on, [xn, on, outer, inner, len](const std::vector<double>& g, AdjointMap& adj) {
        if (!xn->requires_grad) return;
        auto& gx = adjoint_of(adj, xn.get());
        const auto& y = on->values;
        for (std::int64_t o = 0; o < outer; ++o)
          for (std::int64_t in = 0; in < inner; ++in) {
            const std::int64_t base = o * len * inner + in;
            double s = 0.0;
            for (std::int64_t k = 0; k < len; ++k) {
              const auto ix = static_cast<std::size_t>(base + k * inner);
              s += g[ix] * y[ix];
            }
            for (std::int64_t k = 0; k < len; ++k) {
              const auto ix = static_cast<std::size_t>(base + k * inner);
              gx[ix] += y[ix] * (g[ix] - s);
            }
          }
      });
    }
  }
  return result;
}

Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias, double eps) {
  if (!(eps > 0.0)) throw ContractError("layer_norm requires eps > 0");
  if (x.rank() < 1) throw ShapeError("layer_norm requires rank >= 1");
  const std::int64_t c = x.dim(x.rank() - 1);
  if (gain.numel() != c || bias.numel() != c)
    throw ShapeError("layer_norm gain/bias must have " + std::to_string(c) + " elements, got " +
                     shape_to_string(gain.shape()) + " and " + shape_to_string(bias.shape()));
  const std::int64_t rows = x.numel() / c;
  const auto& xv = x.values();
  const auto& gv = gain.values();
  const auto& bv = bias.values();
  std::vector<double> out(xv.size());
  for (std::int64_t i = 0; i < rows; ++i) {
    const double* row = xv.data() + i * c;
    double mean = 0.0;
    for (std::int64_t j = 0; j < c; ++j) mean += row[j];
    mean /= static_cast<double>(c);
    double var = 0.0;
    for (std::int64_t j = 0; j < c; ++j) {
      const double d = row[j] - mean;
      var += d * d;
    }
    var /= static_cast<double>(c);
    const double inv_std = 1.0 / std::sqrt(var + eps);
    double* orow = out.data() + i * c;
    for (std::int64_t j = 0; j < c; ++j) orow[j] = gv[static_cast<std::size_t>(j)] * (row[j] - mean) * inv_std + bv[static_cast<std::size_t>(j)];
  }
  auto xn = x.node();
  auto gn = gain.node();
  auto bn = bias.node();
  return finish(x.shape(), std::move(out), {&x, &gain, &bias}, [xn, gn, bn, rows, c, eps](const std::vector<double>& g, AdjointMap& adj) {
    for (std::int64_t i = 0; i < rows; ++i) {
      const double* row = xn->values.data() + i * c;
      double mean = 0.0;
      for (std::int64_t j = 0; j < c; ++j) mean += row[j];
      mean /= static_cast<double>(c);
      double var = 0.0;
      for (std::int64_t j = 0; j < c; ++j) {
        const double d = row[j] - mean;
        var += d * d;
      }
      var /= static_cast<double>(c);
      const double inv_std = 1.0 / std::sqrt(var + eps);
      const double* grow = g.data() + i * c;

      if (gn->requires_grad || bn->requires_grad) {
        for (std::int64_t j = 0; j < c; ++j) {
          const double xhat = (row[j] - mean) * inv_std;
          if (gn->requires_grad) adjoint_of(adj, gn.get())[static_cast<std::size_t>(j)] += grow[j] * xhat;
          if (bn->requires_grad) adjoint_of(adj, bn.get())[static_cast<std::size_t>(j)] += grow[j];
        }
      }
      if (xn->requires_grad) {
        auto& gx = adjoint_of(adj, xn.get());
        // dxhat = g * gain; dx = inv_std * (dxhat - mean(dxhat) - xhat * mean(dxhat*xhat))
        double mean_dxhat = 0.0, mean_dxhat_xhat = 0.0;
        for (std::int64_t j = 0; j < c; ++j) {
          const double xhat = (row[j] - mean) * inv_std;
          const double dxh = grow[j] * gn->values[static_cast<std::size_t>(j)];
          mean_dxhat += dxh;
          mean_dxhat_xhat += dxh * xhat;
        }
        mean_dxhat /= static_cast<double>(c);
        mean_dxhat_xhat /= static_cast<double>(c);
        for (std::int64_t j = 0; j < c; ++j) {
          const double xhat = (row[j] - mean) * inv_std;
          const double dxh = grow[j] * gn->values[static_cast<std::size_t>(j)];
          gx[static_cast<std::size_t>(i * c + j)] += inv_std * (dxh - mean_dxhat - xhat * mean_dxhat_xhat);
        }
      }
    }
  });
}

Tensor concat(const std::vector<Tensor>& parts, int axis) {
  if (parts.empty()) throw ContractError("concat of zero tensors");
  const int rank = parts[0].rank();
  if (axis < 0) axis += rank;
  if (axis < 0 || axis >= rank) throw ShapeError("concat axis out of range");
  Shape out_shape = parts[0].shape();
  std::int64_t total_axis = 0;
  for (const auto& t : parts) {
    if (t.rank() != rank) throw ShapeError("concat rank mismatch");
    for (int i = 0; i < rank; ++i)
      if (i != axis && t.dim(i) != out_shape[static_cast<std::size_t>(i)])
        throw ShapeError("concat shape mismatch: " + shape_to_string(t.shape()) + " vs " +
                         shape_to_string(parts[0].shape()));
    total_axis += t.dim(axis);
  }
  out_shape[static_cast<std::size_t>(axis)] = total_axis;

  std::int64_t inner = 1, outer = 1;
  for (int i = axis + 1; i < rank; ++i) inner *= out_shape[static_cast<std::size_t>(i)];
  for (int i = 0; i < axis; ++i) outer *= out_shape[static_cast<std::size_t>(i)];

  std::vector<double> out(static_cast<std::size_t>(outer * total_axis * inner));
  std::int64_t offset = 0;
  for (const auto& t : parts) {
    const std::int64_t a = t.dim(axis);
    const auto& tv = t.values();
    for (std::int64_t o = 0; o < outer; ++o)
      for (std::int64_t k = 0; k < a; ++k)
        std::copy_n(tv.data() + (o * a + k) * inner, inner, out.data() + ((o * total_axis) + offset + k) * inner);
    offset += a;
  }

  std::vector<NodePtr> nodes;
  std::vector<std::int64_t> axis_sizes;
  nodes.reserve(parts.size());
  for (const auto& t : parts) {
    nodes.push_back(t.node());
    axis_sizes.push_back(t.dim(axis));
  }
  std::vector<const Tensor*> ptrs;
  ptrs.reserve(parts.size());
  for (const auto& t : parts) ptrs.push_back(&t);

  Tape* tape = nullptr;
  for (auto* p : ptrs) {
    Tape* pt = p->node()->tape;
    if (!pt) continue;
    if (tape && tape != pt) throw ContractError("operation mixes tensors from different tapes");
    tape = pt;
  }
  if (tape) tape->apply_precision(out);
  Tensor result = Tensor::constant(out_shape, std::move(out));
  bool needs_grad = false;
  for (auto* p : ptrs) needs_grad = needs_grad || p->requires_grad();
  if (tape) {
    result.node()->tape = tape;
    if (grad_enabled() && needs_grad) {
      result.node()->requires_grad = true;
      tape->record(result.node(), [nodes, axis_sizes, outer, inner, total_axis](const std::vector<double>& g, AdjointMap& adj) {
        std::int64_t off = 0;
        for (std::size_t t = 0; t < nodes.size(); ++t) {
          const std::int64_t a = axis_sizes[t];
          if (nodes[t]->requires_grad) {
            auto& gt = adjoint_of(adj, nodes[t].get());
            for (std::int64_t o = 0; o < outer; ++o)
              for (std::int64_t k = 0; k < a; ++k) {
                const double* src = g.data() + ((o * total_axis) + off + k) * inner;
                double* dst = gt.data() + (o * a + k) * inner;
                for (std::int64_t i = 0; i < inner; ++i) dst[i] += src[i];
              }
          }
          off += a;
        }
      });
    }
  }
  return result;
}

Tensor reshape(const Tensor& x, Shape new_shape) {
  if (shape_numel(new_shape) != x.numel())
    throw ShapeError("reshape from " + shape_to_string(x.shape()) + " to " + shape_to_string(new_shape) +
                     " changes element count");
  auto xn = x.node();
  return finish(std::move(new_shape), x.values(), {&x}, [xn](const std::vector<double>& g, AdjointMap& adj) {
    if (!xn->requires_grad) return;
    auto& gx = adjoint_of(adj, xn.get());
    for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i];
  });
}

Tensor slice_rows(const Tensor& x, std::int64_t start, std::int64_t count) {
  require_rank(x, 2, "slice_rows");
  if (start < 0 || count <= 0 || start + count > x.dim(0))
    throw ShapeError("slice_rows [" + std::to_string(start) + ", " + std::to_string(start + count) +
                     ") out of range for " + shape_to_string(x.shape()));
  const std::int64_t c = x.dim(1);
  std::vector<double> out(static_cast<std::size_t>(count * c));
  std::copy_n(x.values().data() + start * c, count * c, out.data());
  auto xn = x.node();
  return finish({count, c}, std::move(out), {&x}, [xn, start, c](const std::vector<double>& g, AdjointMap& adj) {
    if (!xn->requires_grad) return;
    auto& gx = adjoint_of(adj, xn.get());
    for (std::size_t i = 0; i < g.size(); ++i) gx[static_cast<std::size_t>(start * c) + i] += g[i];
  });
}

Tensor embedding_lookup(const Tensor& table, const std::vector<std::int64_t>& ids, const std::string& context) {
  require_rank(table, 2, "embedding_lookup");
  const std::int64_t v = table.dim(0), d = table.dim(1);
  for (std::int64_t id : ids)
    if (id < 0 || id >= v) throw VocabError(context, id, v);
  const std::int64_t n = static_cast<std::int64_t>(ids.size());
  if (n == 0) throw ContractError("embedding_lookup with empty id list");
  std::vector<double> out(static_cast<std::size_t>(n * d));
  for (std::int64_t i = 0; i < n; ++i) std::copy_n(table.values().data() + ids[static_cast<std::size_t>(i)] * d, d, out.data() + i * d);
  auto tn = table.node();
  auto ids_copy = ids;
  return finish({n, d}, std::move(out), {&table}, [tn, ids_copy, d](const std::vector<double>& g, AdjointMap& adj) {
    if (!tn->requires_grad) return;
    auto& gt = adjoint_of(adj, tn.get());
    // Scatter-add in batch order: repeated ids accumulate deterministically.
    for (std::size_t i = 0; i < ids_copy.size(); ++i) {
      double* dst = gt.data() + ids_copy[i] * d;
      const double* src = g.data() + static_cast<std::int64_t>(i) * d;
      for (std::int64_t j = 0; j < d; ++j) dst[j] += src[j];
    }
  });
}

Tensor gather_rows(const Tensor& x, const std::vector<std::int64_t>& indices) {
  require_rank(x, 2, "gather_rows");
  const std::int64_t r = x.dim(0), c = x.dim(1);
  for (std::int64_t i : indices)
    if (i < 0 || i >= r) throw ShapeError("gather_rows index " + std::to_string(i) + " out of range for " + shape_to_string(x.shape()));
  const std::int64_t n = static_cast<std::int64_t>(indices.size());
  if (n == 0) throw ContractError("gather_rows with empty index list");
  std::vector<double> out(static_cast<std::size_t>(n * c));
  for (std::int64_t i = 0; i < n; ++i) std::copy_n(x.values().data() + indices[static_cast<std::size_t>(i)] * c, c, out.data() + i * c);
  auto xn = x.node();
  auto idx = indices;
  return finish({n, c}, std::move(out), {&x}, [xn, idx, c](const std::vector<double>& g, AdjointMap& adj) {
    if (!xn->requires_grad) return;
    auto& gx = adjoint_of(adj, xn.get());
    for (std::size_t i = 0; i < idx.size(); ++i) {
      double* dst = gx.data() + idx[i] * c;
      const double* src = g.data() + static_cast<std::int64_t>(i) * c;
      for (std::int64_t j = 0; j < c; ++j) dst[j] += src[j];
    }
  });
}

Tensor scatter_rows(const Tensor& x, const std::vector<std::int64_t>& indices, std::int64_t num_rows) {
  require_rank(x, 2, "scatter_rows");
  const std::int64_t n = x.dim(0), c = x.dim(1);
  if (static_cast<std::int64_t>(indices.size()) != n)
    throw ShapeError("scatter_rows needs one index per row of " + shape_to_string(x.shape()));
  std::vector<char> seen(static_cast<std::size_t>(num_rows), 0);
  for (std::int64_t i : indices) {
    if (i < 0 || i >= num_rows) throw ShapeError("scatter_rows index " + std::to_string(i) + " out of range");
    if (seen[static_cast<std::size_t>(i)]) throw ContractError("scatter_rows with duplicate index " + std::to_string(i));
    seen[static_cast<std::size_t>(i)] = 1;
  }
  std::vector<double> out(static_cast<std::size_t>(num_rows * c), 0.0);
  for (std::int64_t i = 0; i < n; ++i) std::copy_n(x.values().data() + i * c, c, out.data() + indices[static_cast<std::size_t>(i)] * c);
  auto xn = x.node();
  auto idx = indices;
  return finish({num_rows, c}, std::move(out), {&x}, [xn, idx, c](const std::vector<double>& g, AdjointMap& adj) {
    if (!xn->requires_grad) return;
    auto& gx = adjoint_of(adj, xn.get());
    for (std::size_t i = 0; i < idx.size(); ++i) {
      const double* src = g.data() + idx[i] * c;
      double* dst = gx.data() + static_cast<std::int64_t>(i) * c;
      for (std::int64_t j = 0; j < c; ++j) dst[j] += src[j];
    }
  });
}

Tensor select_col_per_row(const Tensor& x, const std::vector<std::int64_t>& idx) {
  require_rank(x, 2, "select_col_per_row");
  const std::int64_t r = x.dim(0), c = x.dim(1);
  if (static_cast<std::int64_t>(idx.size()) != r)
    throw ShapeError("select_col_per_row needs one index per row of " + shape_to_string(x.shape()));
  std::vector<double> out(static_cast<std::size_t>(r));
  for (std::int64_t i = 0; i < r; ++i) {
    const std::int64_t j = idx[static_cast<std::size_t>(i)];
    if (j < 0 || j >= c) throw ShapeError("select_col_per_row index " + std::to_string(j) + " out of range");
    out[static_cast<std::size_t>(i)] = x.values()[static_cast<std::size_t>(i * c + j)];
  }
  auto xn = x.node();
  auto ids = idx;
  return finish({r, 1}, std::move(out), {&x}, [xn, ids, c](const std::vector<double>& g, AdjointMap& adj) {
    if (!xn->requires_grad) return;
    auto& gx = adjoint_of(adj, xn.get());
    for (std::size_t i = 0; i < ids.size(); ++i) gx[static_cast<std::size_t>(static_cast<std::int64_t>(i) * c + ids[i])] += g[i];
  });
}

Tensor max_pool_over_time(const Tensor& x, std::int64_t n_valid) {
  require_rank(x, 2, "max_pool_over_time");
  const std::int64_t n = x.dim(0), d = x.dim(1);
  if (n_valid < 1 || n_valid > n)
    throw ContractError("max_pool_over_time over " + std::to_string(n_valid) + " rows of " + shape_to_string(x.shape()));
  const auto& xv = x.values();
  std::vector<double> out(static_cast<std::size_t>(d));
  std::vector<std::int64_t> arg(static_cast<std::size_t>(d), 0);
  auto* probe = KinkProbe::current();
  for (std::int64_t j = 0; j < d; ++j) {
    double best = xv[static_cast<std::size_t>(j)];
    double second = -1e300;
    std::int64_t bi = 0;
    for (std::int64_t i = 1; i < n_valid; ++i) {
      const double v = xv[static_cast<std::size_t>(i * d + j)];
      if (v > best) {
        second = best;
        best = v;
        bi = i;
      } else if (v > second) {
        second = v;
      }
    }
    out[static_cast<std::size_t>(j)] = best;
    arg[static_cast<std::size_t>(j)] = bi;
    if (probe && n_valid > 1) probe->min_pool_gap = std::min(probe->min_pool_gap, best - second);
  }
  auto xn = x.node();
  return finish({d}, std::move(out), {&x}, [xn, arg, d](const std::vector<double>& g, AdjointMap& adj) {
    if (!xn->requires_grad) return;
    auto& gx = adjoint_of(adj, xn.get());
    for (std::int64_t j = 0; j < d; ++j) gx[static_cast<std::size_t>(arg[static_cast<std::size_t>(j)] * d + j)] += g[static_cast<std::size_t>(j)];
  });
}

Tensor sum_all(const Tensor& x) {
  double acc = 0.0;
  for (double v : x.values()) acc += v;
  auto xn = x.node();
  return finish({1}, {acc}, {&x}, [xn](const std::vector<double>& g, AdjointMap& adj) {
    if (!xn->requires_grad) return;
    auto& gx = adjoint_of(adj, xn.get());
    for (auto& v : gx) v += g[0];
  });
}

Tensor mean_all(const Tensor& x) {
  const double inv = 1.0 / static_cast<double>(x.numel());
  double acc = 0.0;
  for (double v : x.values()) acc += v;
  auto xn = x.node();
  return finish({1}, {acc * inv}, {&x}, [xn, inv](const std::vector<double>& g, AdjointMap& adj) {
    if (!xn->requires_grad) return;
    auto& gx = adjoint_of(adj, xn.get());
    for (auto& v : gx) v += g[0] * inv;
  });
}

Tensor mean_over_rows(const Tensor& x) {
  require_rank(x, 2, "mean_over_rows");
  const std::int64_t r = x.dim(0), c = x.dim(1);
  const double inv = 1.0 / static_cast<double>(r);
  std::vector<double> out(static_cast<std::size_t>(c), 0.0);
  for (std::int64_t i = 0; i < r; ++i)
    for (std::int64_t j = 0; j < c; ++j) out[static_cast<std::size_t>(j)] += x.values()[static_cast<std::size_t>(i * c + j)];
  for (auto& v : out) v *= inv;
  auto xn = x.node();
  return finish({c}, std::move(out), {&x}, [xn, r, c, inv](const std::vector<double>& g, AdjointMap& adj) {
    if (!xn->requires_grad) return;
    auto& gx = adjoint_of(adj, xn.get());
    for (std::int64_t i = 0; i < r; ++i)
      for (std::int64_t j = 0; j < c; ++j) gx[static_cast<std::size_t>(i * c + j)] += g[static_cast<std::size_t>(j)] * inv;
  });
}

Tensor cross_entropy_mean(const Tensor& logits, const std::vector<std::int64_t>& targets) {
  require_rank(logits, 2, "cross_entropy_mean");
  const std::int64_t p = logits.dim(0), v = logits.dim(1);
  if (static_cast<std::int64_t>(targets.size()) != p)
    throw ShapeError("cross_entropy_mean needs one target per row of " + shape_to_string(logits.shape()));
  for (std::int64_t t : targets)
    if (t < 0 || t >= v) throw ContractError("cross_entropy target " + std::to_string(t) + " out of range");
  const auto& zv = logits.values();
  double loss = 0.0;
  for (std::int64_t i = 0; i < p; ++i) {
    const double* row = zv.data() + i * v;
    double mx = row[0];
    for (std::int64_t j = 1; j < v; ++j) mx = std::max(mx, row[j]);
    double denom = 0.0;
    for (std::int64_t j = 0; j < v; ++j) denom += std::exp(row[j] - mx);
    loss += (std::log(denom) + mx) - row[targets[static_cast<std::size_t>(i)]];
  }
  loss /= static_cast<double>(p);
  auto zn = logits.node();
  auto tg = targets;
  return finish({1}, {loss}, {&logits}, [zn, tg, p, v](const std::vector<double>& g, AdjointMap& adj) {
    if (!zn->requires_grad) return;
    auto& gz = adjoint_of(adj, zn.get());
    const double scale = g[0] / static_cast<double>(p);
    for (std::int64_t i = 0; i < p; ++i) {
      const double* row = zn->values.data() + i * v;
      double mx = row[0];
      for (std::int64_t j = 1; j < v; ++j) mx = std::max(mx, row[j]);
      double denom = 0.0;
      for (std::int64_t j = 0; j < v; ++j) denom += std::exp(row[j] - mx);
      for (std::int64_t j = 0; j < v; ++j) {
        double soft = std::exp(row[j] - mx) / denom;
        gz[static_cast<std::size_t>(i * v + j)] += scale * (soft - (j == tg[static_cast<std::size_t>(i)] ? 1.0 : 0.0));
      }
    }
  });
}

Tensor bce_with_logits(const Tensor& scores, const Tensor& labels) {
  if (scores.numel() != labels.numel())
    throw ShapeError("bce_with_logits size mismatch: " + shape_to_string(scores.shape()) + " vs " +
                     shape_to_string(labels.shape()));
  const auto& zv = scores.values();
  const auto& yv = labels.values();
  std::vector<double> out(zv.size());
  for (std::size_t i = 0; i < zv.size(); ++i) {
    const double z = zv[i], y = yv[i];
    out[i] = std::max(z, 0.0) - z * y + std::log1p(std::exp(-std::abs(z)));
  }
  auto zn = scores.node();
  auto yn = labels.node();
  return finish(scores.shape(), std::move(out), {&scores}, [zn, yn](const std::vector<double>& g, AdjointMap& adj) {
    if (!zn->requires_grad) return;
    auto& gz = adjoint_of(adj, zn.get());
    for (std::size_t i = 0; i < g.size(); ++i) {
      const double z = zn->values[i];
      const double sig = 1.0 / (1.0 + std::exp(-z));
      gz[i] += g[i] * (sig - yn->values[i]);
    }
  });
}

Tensor weighted_mean(const Tensor& x, const std::vector<double>& weights) {
  if (x.numel() != static_cast<std::int64_t>(weights.size()))
    throw ShapeError("weighted_mean needs one weight per element of " + shape_to_string(x.shape()));
  double wsum = 0.0;
  for (double w : weights) wsum += w;
  if (!(wsum > 0.0)) throw ContractError("weighted_mean with non-positive weight sum");
  double acc = 0.0;
  for (std::size_t i = 0; i < weights.size(); ++i) acc += weights[i] * x.values()[i];
  auto xn = x.node();
  auto w = weights;
  return finish({1}, {acc / wsum}, {&x}, [xn, w, wsum](const std::vector<double>& g, AdjointMap& adj) {
    if (!xn->requires_grad) return;
    auto& gx = adjoint_of(adj, xn.get());
    for (std::size_t i = 0; i < w.size(); ++i) gx[i] += g[0] * w[i] / wsum;
  });
}

Tensor stack_scalars(const std::vector<Tensor>& xs) {
  if (xs.empty()) throw ContractError("stack_scalars of zero tensors");
  std::vector<double> out;
  out.reserve(xs.size());
  std::vector<NodePtr> nodes;
  nodes.reserve(xs.size());
  Tape* tape = nullptr;
  bool needs_grad = false;
  for (const auto& t : xs) {
    if (t.numel() != 1) throw ShapeError("stack_scalars needs scalars, got " + shape_to_string(t.shape()));
    out.push_back(t.values()[0]);
    nodes.push_back(t.node());
    needs_grad = needs_grad || t.requires_grad();
    Tape* tt = t.node()->tape;
    if (tt) {
      if (tape && tape != tt) throw ContractError("operation mixes tensors from different tapes");
      tape = tt;
    }
  }
  if (tape) tape->apply_precision(out);
  Tensor result = Tensor::constant({static_cast<std::int64_t>(xs.size())}, std::move(out));
  if (tape) {
    result.node()->tape = tape;
    if (grad_enabled() && needs_grad) {
      result.node()->requires_grad = true;
      tape->record(result.node(), [nodes](const std::vector<double>& g, AdjointMap& adj) {
        for (std::size_t i = 0; i < nodes.size(); ++i) {
          if (!nodes[i]->requires_grad) continue;
          adjoint_of(adj, nodes[i].get())[0] += g[i];
        }
      });
    }
  }
  return result;
}

Tensor dot(const Tensor& a, const Tensor& b) {
  if (a.numel() != b.numel())
    throw ShapeError("dot size mismatch: " + shape_to_string(a.shape()) + " vs " + shape_to_string(b.shape()));
  double acc = 0.0;
  for (std::int64_t i = 0; i < a.numel(); ++i) acc += a.values()[static_cast<std::size_t>(i)] * b.values()[static_cast<std::size_t>(i)];
  auto an = a.node();
  auto bn = b.node();
  return finish({1}, {acc}, {&a, &b}, [an, bn](const std::vector<double>& g, AdjointMap& adj) {
    if (an->requires_grad) {
      auto& ga = adjoint_of(adj, an.get());
      for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += g[0] * bn->values[i];
    }
    if (bn->requires_grad) {
      auto& gb = adjoint_of(adj, bn.get());
      for (std::size_t i = 0; i < gb.size(); ++i) gb[i] += g[0] * an->values[i];
    }
  });
}

std::vector<std::int64_t> argmax_rows(const Tensor& x) {
  require_rank(x, 2, "argmax_rows");
  const std::int64_t r = x.dim(0), c = x.dim(1);
  std::vector<std::int64_t> out(static_cast<std::size_t>(r));
  auto* probe = KinkProbe::current();
  for (std::int64_t i = 0; i < r; ++i) {
    const double* row = x.values().data() + i * c;
    std::int64_t best = 0;
    double bv = row[0], second = -1e300;
    for (std::int64_t j = 1; j < c; ++j) {
      if (row[j] > bv) {
        second = bv;
        bv = row[j];
        best = j;
      } else if (row[j] > second) {
        second = row[j];
      }
    }
    out[static_cast<std::size_t>(i)] = best;
    if (probe && c > 1) probe->min_gate_gap = std::min(probe->min_gate_gap, bv - second);
  }
  return out;
}

}  // namespace supermoe
