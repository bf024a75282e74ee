#include "mtlab/ops.h"

#include <algorithm>
#include <cmath>
#include <limits>
#include <utility>

#include <fmt/format.h>

namespace mtlab {
namespace {

using detail::Node;

// c[m x n] += a[m x k] * b[k x n]. Each output row depends only on the
// matching row of a, so results are independent of m.
void gemm_nn(const double* __restrict a, const double* __restrict b, double* __restrict c,
             std::size_t m, std::size_t k, std::size_t n) {
  for (std::size_t i = 0; i < m; ++i) {
    double* ci = c + i * n;
    const double* ai = a + i * k;
    for (std::size_t p = 0; p < k; ++p) {
      const double aip = ai[p];
      const double* bp = b + p * n;
      for (std::size_t j = 0; j < n; ++j) ci[j] += aip * bp[j];
    }
  }
}

// c[k x n] += a[m x k]^T * b[m x n].
void gemm_tn(const double* __restrict a, const double* __restrict b, double* __restrict c,
             std::size_t m, std::size_t k, std::size_t n) {
  for (std::size_t i = 0; i < m; ++i) {
    const double* ai = a + i * k;
    const double* bi = b + i * n;
    for (std::size_t p = 0; p < k; ++p) {
      const double aip = ai[p];
      double* cp = c + p * n;
      for (std::size_t j = 0; j < n; ++j) cp[j] += aip * bi[j];
    }
  }
}

std::vector<double> transposed(std::span<const double> a, std::size_t rows, std::size_t cols) {
  std::vector<double> t(a.size());
  for (std::size_t i = 0; i < rows; ++i)
    for (std::size_t j = 0; j < cols; ++j) t[j * rows + i] = a[i * cols + j];
  return t;
}

void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  if (a.shape() != b.shape()) {
    throw Error(fmt::format("{}: shape mismatch {} vs {}", op, shape_string(a.shape()),
                            shape_string(b.shape())));
  }
}

void require_matrix(const Tensor& a, const char* op) {
  if (a.rank() != 2) throw Error(fmt::format("{}: expected a matrix, got {}", op, shape_string(a.shape())));
}

Node& parent(Node& out, std::size_t i) { return *out.parents[i]; }

constexpr double kGeluC = 0.7978845608028654;  // sqrt(2/pi)
constexpr double kGeluA = 0.044715;

}  // namespace

Tensor matmul(const Tensor& a, const Tensor& b) {
  require_matrix(a, "matmul");
  require_matrix(b, "matmul");
  const std::size_t m = a.rows(), k = a.cols(), n = b.cols();
  if (b.rows() != k) {
    throw Error(fmt::format("matmul: inner dimensions disagree for {} and {}", shape_string(a.shape()),
                            shape_string(b.shape())));
  }
  std::vector<double> out(m * n, 0.0);
  gemm_nn(a.data().data(), b.data().data(), out.data(), m, k, n);
  return Tensor::from_op({m, n}, std::move(out), {a, b}, "matmul", [m, k, n](Node& o) {
    Node& pa = parent(o, 0);
    Node& pb = parent(o, 1);
    if (pa.requires_grad) {
      const std::vector<double> bt = transposed(pb.data, k, n);
      gemm_nn(o.grad.data(), bt.data(), pa.grad_buffer().data(), m, n, k);
    }
    if (pb.requires_grad) gemm_tn(pa.data.data(), o.grad.data(), pb.grad_buffer().data(), m, k, n);
  });
}

Tensor transpose(const Tensor& a) {
  require_matrix(a, "transpose");
  const std::size_t r = a.rows(), c = a.cols();
  return Tensor::from_op({c, r}, transposed(a.data(), r, c), {a}, "transpose", [r, c](Node& o) {
    Node& pa = parent(o, 0);
    std::vector<double>& g = pa.grad_buffer();
    for (std::size_t i = 0; i < r; ++i)
      for (std::size_t j = 0; j < c; ++j) g[i * c + j] += o.grad[j * r + i];
  });
}

Tensor add(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "add");
  std::vector<double> out(a.numel());
  auto da = a.data(), db = b.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = da[i] + db[i];
  return Tensor::from_op(a.shape(), std::move(out), {a, b}, "add", [](Node& o) {
    for (std::size_t p = 0; p < 2; ++p) {
      Node& in = parent(o, p);
      if (!in.requires_grad) continue;
      std::vector<double>& g = in.grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += o.grad[i];
    }
  });
}

Tensor mul(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "mul");
  std::vector<double> out(a.numel());
  auto da = a.data(), db = b.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = da[i] * db[i];
  return Tensor::from_op(a.shape(), std::move(out), {a, b}, "mul", [](Node& o) {
    Node& pa = parent(o, 0);
    Node& pb = parent(o, 1);
    if (pa.requires_grad) {
      std::vector<double>& g = pa.grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += o.grad[i] * pb.data[i];
    }
    if (pb.requires_grad) {
      std::vector<double>& g = pb.grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += o.grad[i] * pa.data[i];
    }
  });
}

Tensor add_bias(const Tensor& x, const Tensor& bias) {
  if (bias.rank() != 1 || bias.dim(0) != x.shape().back()) {
    throw Error(fmt::format("add_bias: bias {} does not match last dimension of {}",
                            shape_string(bias.shape()), shape_string(x.shape())));
  }
  const std::size_t d = bias.dim(0);
  const std::size_t rows = x.numel() / d;
  std::vector<double> out(x.data().begin(), x.data().end());
  auto db = bias.data();
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t j = 0; j < d; ++j) out[r * d + j] += db[j];
  return Tensor::from_op(x.shape(), std::move(out), {x, bias}, "add_bias", [rows, d](Node& o) {
    Node& px = parent(o, 0);
    Node& pb = parent(o, 1);
    if (px.requires_grad) {
      std::vector<double>& g = px.grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += o.grad[i];
    }
    if (pb.requires_grad) {
      std::vector<double>& g = pb.grad_buffer();
      for (std::size_t r = 0; r < rows; ++r)
        for (std::size_t j = 0; j < d; ++j) g[j] += o.grad[r * d + j];
    }
  });
}

Tensor scale(const Tensor& x, double factor) {
  std::vector<double> out(x.data().begin(), x.data().end());
  for (double& v : out) v *= factor;
  return Tensor::from_op(x.shape(), std::move(out), {x}, "scale", [factor](Node& o) {
    std::vector<double>& g = parent(o, 0).grad_buffer();
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += o.grad[i] * factor;
  });
}

Tensor gelu(const Tensor& x) {
  std::vector<double> out(x.numel());
  auto dx = x.data();
  for (std::size_t i = 0; i < out.size(); ++i) {
    const double v = dx[i];
    out[i] = 0.5 * v * (1.0 + std::tanh(kGeluC * (v + kGeluA * v * v * v)));
  }
  return Tensor::from_op(x.shape(), std::move(out), {x}, "gelu", [](Node& o) {
    Node& px = parent(o, 0);
    std::vector<double>& g = px.grad_buffer();
    for (std::size_t i = 0; i < g.size(); ++i) {
      const double v = px.data[i];
      const double t = std::tanh(kGeluC * (v + kGeluA * v * v * v));
      const double du = kGeluC * (1.0 + 3.0 * kGeluA * v * v);
      g[i] += o.grad[i] * (0.5 * (1.0 + t) + 0.5 * v * (1.0 - t * t) * du);
    }
  });
}

Tensor softmax(const Tensor& x, std::size_t axis) {
  const Shape& shape = x.shape();
  if (axis >= shape.size()) {
    throw Error(fmt::format("softmax: axis {} invalid for shape {}", axis, shape_string(shape)));
  }
  std::size_t outer = 1, inner = 1;
  for (std::size_t i = 0; i < axis; ++i) outer *= shape[i];
  for (std::size_t i = axis + 1; i < shape.size(); ++i) inner *= shape[i];
  const std::size_t len = shape[axis];

  std::vector<double> out(x.numel());
  auto dx = x.data();
  for (std::size_t o = 0; o < outer; ++o) {
    for (std::size_t in = 0; in < inner; ++in) {
      const std::size_t base = o * len * inner + in;
      double mx = -std::numeric_limits<double>::infinity();
      for (std::size_t a = 0; a < len; ++a) mx = std::max(mx, dx[base + a * inner]);
      double total = 0.0;
      for (std::size_t a = 0; a < len; ++a) {
        const double e = std::exp(dx[base + a * inner] - mx);
        out[base + a * inner] = e;
        total += e;
      }
      for (std::size_t a = 0; a < len; ++a) out[base + a * inner] /= total;
    }
  }
  return Tensor::from_op(shape, std::move(out), {x}, "softmax", [outer, inner, len](Node& o) {
    std::vector<double>& g = parent(o, 0).grad_buffer();
    for (std::size_t ou = 0; ou < outer; ++ou) {
      for (std::size_t in = 0; in < inner; ++in) {
        const std::size_t base = ou * len * inner + in;
        double dot = 0.0;
        for (std::size_t a = 0; a < len; ++a) dot += o.grad[base + a * inner] * o.data[base + a * inner];
        for (std::size_t a = 0; a < len; ++a) {
          const std::size_t idx = base + a * inner;
          g[idx] += o.data[idx] * (o.grad[idx] - dot);
        }
      }
    }
  });
}

Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias, double eps) {
  const std::size_t d = x.shape().back();
  if (gain.rank() != 1 || gain.dim(0) != d || bias.rank() != 1 || bias.dim(0) != d) {
    throw Error(fmt::format("layer_norm: gain {} / bias {} must match last dimension of {}",
                            shape_string(gain.shape()), shape_string(bias.shape()),
                            shape_string(x.shape())));
  }
  if (!(eps > 0.0)) throw Error("layer_norm: eps must be positive");
  const std::size_t rows = x.numel() / d;
  std::vector<double> out(x.numel());
  std::vector<double> xhat(x.numel());
  std::vector<double> inv_std(rows);
  auto dx = x.data(), dg = gain.data(), db = bias.data();
  for (std::size_t r = 0; r < rows; ++r) {
    const double* row = dx.data() + r * d;
    double mean = 0.0;
    for (std::size_t j = 0; j < d; ++j) mean += row[j];
    mean /= static_cast<double>(d);
    double var = 0.0;
    for (std::size_t j = 0; j < d; ++j) var += (row[j] - mean) * (row[j] - mean);
    var /= static_cast<double>(d);
    const double inv = 1.0 / std::sqrt(var + eps);
    inv_std[r] = inv;
    for (std::size_t j = 0; j < d; ++j) {
      const double h = (row[j] - mean) * inv;
      xhat[r * d + j] = h;
      out[r * d + j] = h * dg[j] + db[j];
    }
  }
  return Tensor::from_op(
      x.shape(), std::move(out), {x, gain, bias}, "layer_norm",
      [rows, d, xhat = std::move(xhat), inv_std = std::move(inv_std)](Node& o) {
        Node& px = parent(o, 0);
        Node& pg = parent(o, 1);
        Node& pb = parent(o, 2);
        if (pg.requires_grad) {
          std::vector<double>& g = pg.grad_buffer();
          for (std::size_t r = 0; r < rows; ++r)
            for (std::size_t j = 0; j < d; ++j) g[j] += o.grad[r * d + j] * xhat[r * d + j];
        }
        if (pb.requires_grad) {
          std::vector<double>& g = pb.grad_buffer();
          for (std::size_t r = 0; r < rows; ++r)
            for (std::size_t j = 0; j < d; ++j) g[j] += o.grad[r * d + j];
        }
        if (px.requires_grad) {
          std::vector<double>& g = px.grad_buffer();
          const double inv_d = 1.0 / static_cast<double>(d);
          for (std::size_t r = 0; r < rows; ++r) {
            double mean_dh = 0.0, mean_dh_h = 0.0;
            for (std::size_t j = 0; j < d; ++j) {
              const double dh = o.grad[r * d + j] * pg.data[j];
              mean_dh += dh;
              mean_dh_h += dh * xhat[r * d + j];
            }
            mean_dh *= inv_d;
            mean_dh_h *= inv_d;
            for (std::size_t j = 0; j < d; ++j) {
              const double dh = o.grad[r * d + j] * pg.data[j];
              g[r * d + j] += inv_std[r] * (dh - mean_dh - xhat[r * d + j] * mean_dh_h);
            }
          }
        }
      });
}

Tensor cross_entropy(const Tensor& logits, std::span<const TokenId> targets, TokenId ignore_id) {
  require_matrix(logits, "cross_entropy");
  const std::size_t n = logits.rows(), vocab = logits.cols();
  if (targets.size() != n) {
    throw Error(fmt::format("cross_entropy: {} targets for {} logit rows", targets.size(), n));
  }
  auto dl = logits.data();
  std::vector<double> probs(n * vocab, 0.0);
  std::vector<TokenId> kept(targets.begin(), targets.end());
  double total = 0.0;
  std::size_t count = 0;
  for (std::size_t i = 0; i < n; ++i) {
    const TokenId t = targets[i];
    if (t == ignore_id) continue;
    if (t < 0 || static_cast<std::size_t>(t) >= vocab) {
      throw Error(fmt::format("cross_entropy: target {} at row {} outside vocabulary of {}", t, i, vocab));
    }
    const double* row = dl.data() + i * vocab;
    const double mx = *std::max_element(row, row + vocab);
    double z = 0.0;
    for (std::size_t j = 0; j < vocab; ++j) z += std::exp(row[j] - mx);
    const double lse = mx + std::log(z);
    total += lse - row[t];
    for (std::size_t j = 0; j < vocab; ++j) probs[i * vocab + j] = std::exp(row[j] - lse);
    ++count;
  }
  if (count == 0) throw Error("cross_entropy: every position is ignored");
  const double inv_count = 1.0 / static_cast<double>(count);
  return Tensor::from_op(
      {1}, {total * inv_count}, {logits}, "cross_entropy",
      [n, vocab, ignore_id, inv_count, probs = std::move(probs), kept = std::move(kept)](Node& o) {
        std::vector<double>& g = parent(o, 0).grad_buffer();
        const double up = o.grad[0] * inv_count;
        for (std::size_t i = 0; i < n; ++i) {
          if (kept[i] == ignore_id) continue;
          for (std::size_t j = 0; j < vocab; ++j) g[i * vocab + j] += up * probs[i * vocab + j];
          g[i * vocab + static_cast<std::size_t>(kept[i])] -= up;
        }
      });
}

Tensor sum(const Tensor& x) {
  double total = 0.0;
  for (double v : x.data()) total += v;
  return Tensor::from_op({1}, {total}, {x}, "sum", [](Node& o) {
    std::vector<double>& g = parent(o, 0).grad_buffer();
    for (double& v : g) v += o.grad[0];
  });
}

Tensor embedding(const Tensor& table, std::span<const TokenId> ids) {
  require_matrix(table, "embedding");
  const std::size_t vocab = table.rows(), d = table.cols();
  if (ids.empty()) throw Error("embedding: empty id sequence");
  std::vector<double> out(ids.size() * d);
  auto dt = table.data();
  for (std::size_t r = 0; r < ids.size(); ++r) {
    if (ids[r] < 0 || static_cast<std::size_t>(ids[r]) >= vocab) {
      throw Error(fmt::format("embedding: id {} outside table of {} rows", ids[r], vocab));
    }
    std::copy_n(dt.data() + static_cast<std::size_t>(ids[r]) * d, d, out.data() + r * d);
  }
  return Tensor::from_op({ids.size(), d}, std::move(out), {table}, "embedding",
                         [d, ids = std::vector<TokenId>(ids.begin(), ids.end())](Node& o) {
                           std::vector<double>& g = parent(o, 0).grad_buffer();
                           for (std::size_t r = 0; r < ids.size(); ++r) {
                             double* dst = g.data() + static_cast<std::size_t>(ids[r]) * d;
                             for (std::size_t j = 0; j < d; ++j) dst[j] += o.grad[r * d + j];
                           }
                         });
}

Tensor dropout(const Tensor& x, double rate, std::mt19937_64& rng) {
  if (rate < 0.0 || rate >= 1.0) throw Error(fmt::format("dropout: rate {} outside [0, 1)", rate));
  if (rate == 0.0) return x;
  std::bernoulli_distribution keep(1.0 - rate);
  const double factor = 1.0 / (1.0 - rate);
  std::vector<double> mask(x.numel());
  for (double& m : mask) m = keep(rng) ? factor : 0.0;
  std::vector<double> out(x.numel());
  auto dx = x.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = dx[i] * mask[i];
  return Tensor::from_op(x.shape(), std::move(out), {x}, "dropout", [mask = std::move(mask)](Node& o) {
    std::vector<double>& g = parent(o, 0).grad_buffer();
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += o.grad[i] * mask[i];
  });
}

std::vector<double> log_softmax_row(std::span<const double> row) {
  const double mx = *std::max_element(row.begin(), row.end());
  double z = 0.0;
  for (double v : row) z += std::exp(v - mx);
  const double lse = mx + std::log(z);
  std::vector<double> out(row.size());
  for (std::size_t j = 0; j < row.size(); ++j) out[j] = row[j] - lse;
  return out;
}

AttentionMask::AttentionMask(std::size_t batch, std::size_t q_len, std::size_t k_len, bool fill)
    : batch_(batch), q_len_(q_len), k_len_(k_len), bits_(batch * q_len * k_len, fill ? 1 : 0) {}

AttentionMask AttentionMask::padded(std::span<const std::size_t> key_lengths, std::size_t q_len,
                                    std::size_t k_len, bool causal) {
  AttentionMask mask(key_lengths.size(), q_len, k_len, false);
  for (std::size_t b = 0; b < key_lengths.size(); ++b)
    for (std::size_t i = 0; i < q_len; ++i)
      for (std::size_t j = 0; j < std::min(key_lengths[b], k_len); ++j)
        if (!causal || j <= i) mask.set(b, i, j, true);
  return mask;
}

Tensor multi_head_attention(const Tensor& q, const Tensor& k, const Tensor& v, std::size_t heads,
                            const AttentionMask& mask) {
  require_matrix(q, "attention");
  require_matrix(k, "attention");
  require_matrix(v, "attention");
  const std::size_t batch = mask.batch(), tq = mask.q_len(), tk = mask.k_len();
  if (q.rows() != batch * tq || k.rows() != batch * tk || v.rows() != batch * tk) {
    throw Error(fmt::format("attention: q {} / k {} / v {} do not fit mask {}x{}x{}",
                            shape_string(q.shape()), shape_string(k.shape()), shape_string(v.shape()),
                            batch, tq, tk));
  }
  if (q.cols() != k.cols()) {
    throw Error(fmt::format("attention: query width {} != key width {}", q.cols(), k.cols()));
  }
  if (heads == 0 || q.cols() % heads != 0 || v.cols() % heads != 0) {
    throw Error(fmt::format("attention: widths {} / {} not divisible by {} heads", q.cols(), v.cols(), heads));
  }
  const std::size_t dq = q.cols(), dv = v.cols();
  const std::size_t dkh = dq / heads, dvh = dv / heads;
  const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(dkh));

  auto Q = q.data(), K = k.data(), V = v.data();
  std::vector<double> out(batch * tq * dv, 0.0);
  std::vector<double> probs(batch * heads * tq * tk, 0.0);
  std::vector<double> scores(tk);
  for (std::size_t b = 0; b < batch; ++b) {
    for (std::size_t h = 0; h < heads; ++h) {
      for (std::size_t i = 0; i < tq; ++i) {
        const double* qi = Q.data() + (b * tq + i) * dq + h * dkh;
        double mx = -std::numeric_limits<double>::infinity();
        bool any = false;
        for (std::size_t j = 0; j < tk; ++j) {
          if (!mask.allowed(b, i, j)) continue;
          const double* kj = K.data() + (b * tk + j) * dq + h * dkh;
          double s = 0.0;
          for (std::size_t c = 0; c < dkh; ++c) s += qi[c] * kj[c];
          s *= inv_sqrt;
          scores[j] = s;
          mx = std::max(mx, s);
          any = true;
        }
        if (!any) throw Error(fmt::format("attention: query {} of batch item {} has no visible key", i, b));
        double* p = probs.data() + ((b * heads + h) * tq + i) * tk;
        double total = 0.0;
        for (std::size_t j = 0; j < tk; ++j) {
          if (!mask.allowed(b, i, j)) continue;
          p[j] = std::exp(scores[j] - mx);
          total += p[j];
        }
        double* oi = out.data() + (b * tq + i) * dv + h * dvh;
        for (std::size_t j = 0; j < tk; ++j) {
          if (!mask.allowed(b, i, j)) continue;
          p[j] /= total;
          const double* vj = V.data() + (b * tk + j) * dv + h * dvh;
          for (std::size_t c = 0; c < dvh; ++c) oi[c] += p[j] * vj[c];
        }
      }
    }
  }

  return Tensor::from_op(
      {batch * tq, dv}, std::move(out), {q, k, v}, "attention",
      [=, probs = std::move(probs)](Node& o) {
        Node& pq = parent(o, 0);
        Node& pk = parent(o, 1);
        Node& pv = parent(o, 2);
        std::vector<double> scratch_q, scratch_k, scratch_v;
        std::vector<double>& gq = pq.requires_grad ? pq.grad_buffer() : scratch_q;
        std::vector<double>& gk = pk.requires_grad ? pk.grad_buffer() : scratch_k;
        std::vector<double>& gv = pv.requires_grad ? pv.grad_buffer() : scratch_v;
        if (!pq.requires_grad) gq.assign(pq.data.size(), 0.0);
        if (!pk.requires_grad) gk.assign(pk.data.size(), 0.0);
        if (!pv.requires_grad) gv.assign(pv.data.size(), 0.0);
        std::vector<double> dp(tk);
        for (std::size_t b = 0; b < batch; ++b) {
          for (std::size_t h = 0; h < heads; ++h) {
            for (std::size_t i = 0; i < tq; ++i) {
              const double* p = probs.data() + ((b * heads + h) * tq + i) * tk;
              const double* doi = o.grad.data() + (b * tq + i) * dv + h * dvh;
              double weighted = 0.0;
              for (std::size_t j = 0; j < tk; ++j) {
                if (!mask.allowed(b, i, j)) continue;
                const double* vj = pv.data.data() + (b * tk + j) * dv + h * dvh;
                double* gvj = gv.data() + (b * tk + j) * dv + h * dvh;
                double s = 0.0;
                for (std::size_t c = 0; c < dvh; ++c) {
                  s += doi[c] * vj[c];
                  gvj[c] += p[j] * doi[c];
                }
                dp[j] = s;
                weighted += p[j] * s;
              }
              const double* qi = pq.data.data() + (b * tq + i) * dq + h * dkh;
              double* gqi = gq.data() + (b * tq + i) * dq + h * dkh;
              for (std::size_t j = 0; j < tk; ++j) {
                if (!mask.allowed(b, i, j)) continue;
                const double ds = p[j] * (dp[j] - weighted) * inv_sqrt;
                const double* kj = pk.data.data() + (b * tk + j) * dq + h * dkh;
                double* gkj = gk.data() + (b * tk + j) * dq + h * dkh;
                for (std::size_t c = 0; c < dkh; ++c) {
                  gqi[c] += ds * kj[c];
                  gkj[c] += ds * qi[c];
                }
              }
            }
          }
        }
      });
}

Tensor attention(const Tensor& q, const Tensor& k, const Tensor& v, const AttentionMask& mask) {
  if (mask.batch() != 1) throw Error("attention: single-problem form takes a batch-1 mask");
  return multi_head_attention(q, k, v, 1, mask);
}

}  // namespace mtlab
