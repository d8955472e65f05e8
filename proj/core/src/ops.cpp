#include "attnwave/ops.hpp"

#include <cmath>
#include <stdexcept>

namespace attnwave {

namespace {

void require(bool ok, const std::string& msg) {
  if (!ok) throw std::invalid_argument(msg);
}

void require_2d(const Tensor& t, const char* op) {
  require(t.rank() == 2, std::string(op) + ": expected 2-D tensor, got " + shape_str(t.shape()));
}

bool wants_graph(std::initializer_list<const Tensor*> inputs) {
  if (!grad_enabled()) return false;
  for (const Tensor* t : inputs)
    if (t->requires_grad()) return true;
  return false;
}

// Marks `out` as differentiable and wires the node. Inputs that require grad
// get their grad buffers allocated here so backward lambdas may capture them.
void attach(Tensor& out, std::vector<Tensor> inputs, std::function<void()> fn) {
  out.set_requires_grad(true);
  auto node = std::make_shared<GraphNode>();
  for (auto& in : inputs)
    if (in.node) node->parents.push_back(in.node);
  node->backward = std::move(fn);
  out.node = node;
}

constexpr double kGeluC = 0.7978845608028654;  // sqrt(2/pi)
constexpr double kGeluA = 0.044715;

}  // namespace

Tensor matmul(const Tensor& a, const Tensor& b) {
  require_2d(a, "matmul");
  require_2d(b, "matmul");
  require(a.cols() == b.rows(), "matmul: inner extents disagree: lhs " + shape_str(a.shape()) +
                                    ", rhs " + shape_str(b.shape()));
  const int64_t m = a.rows(), k = a.cols(), n = b.cols();
  Tensor out({m, n});
  const double* pa = a.data();
  const double* pb = b.data();
  double* po = out.data();
  for (int64_t i = 0; i < m; ++i) {
    for (int64_t p = 0; p < k; ++p) {
      const double av = pa[i * k + p];
      if (av == 0.0) continue;
      const double* brow = pb + p * n;
      double* orow = po + i * n;
      for (int64_t j = 0; j < n; ++j) orow[j] += av * brow[j];
    }
  }
  if (wants_graph({&a, &b})) {
    Tensor ac = a, bc = b;
    if (ac.requires_grad()) ac.ensure_grad();
    if (bc.requires_grad()) bc.ensure_grad();
    attach(out, {ac, bc}, [ac, bc, out, m, k, n]() mutable {
      const double* g = out.grad();
      if (ac.requires_grad()) {
        double* ga = ac.grad();
        const double* pb2 = bc.data();
        for (int64_t i = 0; i < m; ++i)
          for (int64_t p = 0; p < k; ++p) {
            const double* brow = pb2 + p * n;
            const double* grow = g + i * n;
            double acc = 0.0;
            for (int64_t j = 0; j < n; ++j) acc += grow[j] * brow[j];
            ga[i * k + p] += acc;
          }
      }
      if (bc.requires_grad()) {
        double* gb = bc.grad();
        const double* pa2 = ac.data();
        for (int64_t i = 0; i < m; ++i) {
          const double* grow = g + i * n;
          for (int64_t p = 0; p < k; ++p) {
            const double av = pa2[i * k + p];
            if (av == 0.0) continue;
            double* gbrow = gb + p * n;
            for (int64_t j = 0; j < n; ++j) gbrow[j] += av * grow[j];
          }
        }
      }
    });
  }
  return out;
}

Tensor transpose(const Tensor& a) {
  require_2d(a, "transpose");
  const int64_t m = a.rows(), n = a.cols();
  Tensor out({n, m});
  for (int64_t i = 0; i < m; ++i)
    for (int64_t j = 0; j < n; ++j) out.at(j, i) = a.at(i, j);
  if (wants_graph({&a})) {
    Tensor ac = a;
    ac.ensure_grad();
    attach(out, {ac}, [ac, out, m, n]() mutable {
      const double* g = out.grad();
      double* ga = ac.grad();
      for (int64_t j = 0; j < n; ++j)
        for (int64_t i = 0; i < m; ++i) ga[i * n + j] += g[j * m + i];
    });
  }
  return out;
}

Tensor add(const Tensor& a, const Tensor& b) {
  require(a.shape() == b.shape(),
          "add: shapes differ: " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  const int64_t n = a.numel();
  Tensor out(a.shape());
  const double* pa = a.data();
  const double* pb = b.data();
  double* po = out.data();
  for (int64_t i = 0; i < n; ++i) po[i] = pa[i] + pb[i];
  if (wants_graph({&a, &b})) {
    Tensor ac = a, bc = b;
    if (ac.requires_grad()) ac.ensure_grad();
    if (bc.requires_grad()) bc.ensure_grad();
    attach(out, {ac, bc}, [ac, bc, out, n]() mutable {
      const double* g = out.grad();
      if (ac.requires_grad()) {
        double* ga = ac.grad();
        for (int64_t i = 0; i < n; ++i) ga[i] += g[i];
      }
      if (bc.requires_grad()) {
        double* gb = bc.grad();
        for (int64_t i = 0; i < n; ++i) gb[i] += g[i];
      }
    });
  }
  return out;
}

Tensor mul(const Tensor& a, const Tensor& b) {
  require(a.shape() == b.shape(),
          "mul: shapes differ: " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  const int64_t n = a.numel();
  Tensor out(a.shape());
  const double* pa = a.data();
  const double* pb = b.data();
  double* po = out.data();
  for (int64_t i = 0; i < n; ++i) po[i] = pa[i] * pb[i];
  if (wants_graph({&a, &b})) {
    Tensor ac = a, bc = b;
    if (ac.requires_grad()) ac.ensure_grad();
    if (bc.requires_grad()) bc.ensure_grad();
    attach(out, {ac, bc}, [ac, bc, out, n]() mutable {
      const double* g = out.grad();
      if (ac.requires_grad()) {
        double* ga = ac.grad();
        const double* pb2 = bc.data();
        for (int64_t i = 0; i < n; ++i) ga[i] += g[i] * pb2[i];
      }
      if (bc.requires_grad()) {
        double* gb = bc.grad();
        const double* pa2 = ac.data();
        for (int64_t i = 0; i < n; ++i) gb[i] += g[i] * pa2[i];
      }
    });
  }
  return out;
}

Tensor scale(const Tensor& a, double c) {
  const int64_t n = a.numel();
  Tensor out(a.shape());
  const double* pa = a.data();
  double* po = out.data();
  for (int64_t i = 0; i < n; ++i) po[i] = pa[i] * c;
  if (wants_graph({&a})) {
    Tensor ac = a;
    ac.ensure_grad();
    attach(out, {ac}, [ac, out, n, c]() mutable {
      const double* g = out.grad();
      double* ga = ac.grad();
      for (int64_t i = 0; i < n; ++i) ga[i] += g[i] * c;
    });
  }
  return out;
}

Tensor scale_columns(const Tensor& x, std::span<const int64_t> dims, double factor) {
  require_2d(x, "scale_columns");
  const int64_t n = x.rows(), d = x.cols();
  for (int64_t dim : dims)
    require(dim >= 0 && dim < d,
            "scale_columns: dim " + std::to_string(dim) + " out of range for " + shape_str(x.shape()));
  Tensor out = x.clone_values();
  for (int64_t r = 0; r < n; ++r) {
    double* row = out.row_ptr(r);
    for (int64_t dim : dims) row[dim] *= factor;
  }
  if (wants_graph({&x})) {
    Tensor xc = x;
    xc.ensure_grad();
    std::vector<int64_t> dv(dims.begin(), dims.end());
    attach(out, {xc}, [xc, out, n, d, dv, factor]() mutable {
      const double* g = out.grad();
      double* gx = xc.grad();
      std::vector<double> colf(static_cast<size_t>(d), 1.0);
      for (int64_t dim : dv) colf[static_cast<size_t>(dim)] *= factor;
      for (int64_t r = 0; r < n; ++r)
        for (int64_t c = 0; c < d; ++c) gx[r * d + c] += g[r * d + c] * colf[static_cast<size_t>(c)];
    });
  }
  return out;
}

Tensor gelu(const Tensor& x) {
  const int64_t n = x.numel();
  Tensor out(x.shape());
  const double* px = x.data();
  double* po = out.data();
  for (int64_t i = 0; i < n; ++i) {
    const double v = px[i];
    po[i] = 0.5 * v * (1.0 + std::tanh(kGeluC * (v + kGeluA * v * v * v)));
  }
  if (wants_graph({&x})) {
    Tensor xc = x;
    xc.ensure_grad();
    attach(out, {xc}, [xc, out, n]() mutable {
      const double* g = out.grad();
      const double* px2 = xc.data();
      double* gx = xc.grad();
      for (int64_t i = 0; i < n; ++i) {
        const double v = px2[i];
        const double t = std::tanh(kGeluC * (v + kGeluA * v * v * v));
        const double dt = (1.0 - t * t) * kGeluC * (1.0 + 3.0 * kGeluA * v * v);
        gx[i] += g[i] * (0.5 * (1.0 + t) + 0.5 * v * dt);
      }
    });
  }
  return out;
}

Tensor rms_norm(const Tensor& x, const Tensor& weight, double eps) {
  require_2d(x, "rms_norm");
  require(weight.rank() == 1 && weight.dim(0) == x.cols(),
          "rms_norm: weight " + shape_str(weight.shape()) + " does not match " + shape_str(x.shape()));
  const int64_t n = x.rows(), d = x.cols();
  Tensor out({n, d});
  const double* pw = weight.data();
  for (int64_t r = 0; r < n; ++r) {
    const double* row = x.row_ptr(r);
    double ms = 0.0;
    for (int64_t c = 0; c < d; ++c) ms += row[c] * row[c];
    const double inv = 1.0 / std::sqrt(ms / static_cast<double>(d) + eps);
    double* orow = out.row_ptr(r);
    for (int64_t c = 0; c < d; ++c) orow[c] = row[c] * inv * pw[c];
  }
  if (wants_graph({&x, &weight})) {
    Tensor xc = x, wc = weight;
    if (xc.requires_grad()) xc.ensure_grad();
    if (wc.requires_grad()) wc.ensure_grad();
    attach(out, {xc, wc}, [xc, wc, out, n, d, eps]() mutable {
      const double* g = out.grad();
      const double* pw2 = wc.data();
      for (int64_t r = 0; r < n; ++r) {
        const double* row = xc.data() + r * d;
        const double* grow = g + r * d;
        double ms = 0.0;
        for (int64_t c = 0; c < d; ++c) ms += row[c] * row[c];
        const double rms = std::sqrt(ms / static_cast<double>(d) + eps);
        const double inv = 1.0 / rms;
        if (xc.requires_grad()) {
          double dot = 0.0;  // sum_i g_i w_i x_i
          for (int64_t c = 0; c < d; ++c) dot += grow[c] * pw2[c] * row[c];
          double* gx = xc.grad() + r * d;
          const double inv3 = inv * inv * inv / static_cast<double>(d);
          for (int64_t c = 0; c < d; ++c)
            gx[c] += grow[c] * pw2[c] * inv - row[c] * inv3 * dot;
        }
        if (wc.requires_grad()) {
          double* gw = wc.grad();
          for (int64_t c = 0; c < d; ++c) gw[c] += grow[c] * row[c] * inv;
        }
      }
    });
  }
  return out;
}

Tensor softmax_last_axis(const Tensor& x) {
  require(x.rank() >= 1, "softmax_last_axis: rank-0 tensor");
  const int64_t n = x.numel();
  const double* px = x.data();
  for (int64_t i = 0; i < n; ++i)
    require(std::isfinite(px[i]), "softmax_last_axis: non-finite input at flat index " + std::to_string(i));
  const int64_t d = x.dim(x.rank() - 1);
  require(d > 0, "softmax_last_axis: empty last axis");
  const int64_t slices = n / d;
  Tensor out(x.shape());
  double* po = out.data();
  for (int64_t s = 0; s < slices; ++s) {
    const double* row = px + s * d;
    double* orow = po + s * d;
    double mx = row[0];
    for (int64_t c = 1; c < d; ++c) mx = std::max(mx, row[c]);
    double sum = 0.0;
    for (int64_t c = 0; c < d; ++c) {
      orow[c] = std::exp(row[c] - mx);
      sum += orow[c];
    }
    const double inv = 1.0 / sum;
    for (int64_t c = 0; c < d; ++c) orow[c] *= inv;
  }
  if (wants_graph({&x})) {
    Tensor xc = x;
    xc.ensure_grad();
    attach(out, {xc}, [xc, out, slices, d]() mutable {
      const double* g = out.grad();
      const double* p = out.data();
      double* gx = xc.grad();
      for (int64_t s = 0; s < slices; ++s) {
        const double* prow = p + s * d;
        const double* grow = g + s * d;
        double dot = 0.0;
        for (int64_t c = 0; c < d; ++c) dot += prow[c] * grow[c];
        double* gxrow = gx + s * d;
        for (int64_t c = 0; c < d; ++c) gxrow[c] += prow[c] * (grow[c] - dot);
      }
    });
  }
  return out;
}

Tensor causal_softmax(const Tensor& scores) {
  require_2d(scores, "causal_softmax");
  require(scores.rows() == scores.cols(),
          "causal_softmax: expected square matrix, got " + shape_str(scores.shape()));
  const int64_t n = scores.rows();
  Tensor out({n, n});
  for (int64_t q = 0; q < n; ++q) {
    const double* row = scores.row_ptr(q);
    double* orow = out.row_ptr(q);
    double mx = row[0];
    for (int64_t k = 1; k <= q; ++k) mx = std::max(mx, row[k]);
    double sum = 0.0;
    for (int64_t k = 0; k <= q; ++k) {
      orow[k] = std::exp(row[k] - mx);
      sum += orow[k];
    }
    const double inv = 1.0 / sum;
    for (int64_t k = 0; k <= q; ++k) orow[k] *= inv;
    // entries with key > query stay exactly 0
  }
  if (wants_graph({&scores})) {
    Tensor sc = scores;
    sc.ensure_grad();
    attach(out, {sc}, [sc, out, n]() mutable {
      const double* g = out.grad();
      const double* p = out.data();
      double* gx = sc.grad();
      for (int64_t q = 0; q < n; ++q) {
        const double* prow = p + q * n;
        const double* grow = g + q * n;
        double dot = 0.0;
        for (int64_t k = 0; k <= q; ++k) dot += prow[k] * grow[k];
        double* gxrow = gx + q * n;
        for (int64_t k = 0; k <= q; ++k) gxrow[k] += prow[k] * (grow[k] - dot);
      }
    });
  }
  return out;
}

Tensor embedding_lookup(const Tensor& table, std::span<const int32_t> ids) {
  require_2d(table, "embedding_lookup");
  const int64_t v = table.rows(), d = table.cols();
  const int64_t n = static_cast<int64_t>(ids.size());
  for (int32_t id : ids)
    require(id >= 0 && id < v, "embedding_lookup: id " + std::to_string(id) +
                                   " out of range for table " + shape_str(table.shape()));
  Tensor out({n, d});
  for (int64_t r = 0; r < n; ++r) {
    const double* src = table.row_ptr(ids[static_cast<size_t>(r)]);
    double* dst = out.row_ptr(r);
    for (int64_t c = 0; c < d; ++c) dst[c] = src[c];
  }
  if (wants_graph({&table})) {
    Tensor tc = table;
    tc.ensure_grad();
    std::vector<int32_t> idv(ids.begin(), ids.end());
    attach(out, {tc}, [tc, out, idv, d]() mutable {
      const double* g = out.grad();
      double* gt = tc.grad();
      for (size_t r = 0; r < idv.size(); ++r) {
        double* dst = gt + static_cast<int64_t>(idv[r]) * d;
        const double* src = g + static_cast<int64_t>(r) * d;
        for (int64_t c = 0; c < d; ++c) dst[c] += src[c];
      }
    });
  }
  return out;
}

Tensor slice_cols(const Tensor& x, int64_t begin, int64_t end) {
  require_2d(x, "slice_cols");
  require(begin >= 0 && begin < end && end <= x.cols(),
          "slice_cols: [" + std::to_string(begin) + ", " + std::to_string(end) +
              ") invalid for " + shape_str(x.shape()));
  const int64_t n = x.rows(), d = x.cols(), w = end - begin;
  Tensor out({n, w});
  for (int64_t r = 0; r < n; ++r) {
    const double* src = x.row_ptr(r) + begin;
    double* dst = out.row_ptr(r);
    for (int64_t c = 0; c < w; ++c) dst[c] = src[c];
  }
  if (wants_graph({&x})) {
    Tensor xc = x;
    xc.ensure_grad();
    attach(out, {xc}, [xc, out, n, d, w, begin]() mutable {
      const double* g = out.grad();
      double* gx = xc.grad();
      for (int64_t r = 0; r < n; ++r)
        for (int64_t c = 0; c < w; ++c) gx[r * d + begin + c] += g[r * w + c];
    });
  }
  return out;
}

Tensor concat_cols(const std::vector<Tensor>& xs) {
  require(!xs.empty(), "concat_cols: empty input list");
  const int64_t n = xs[0].rows();
  int64_t total = 0;
  for (const Tensor& t : xs) {
    require_2d(t, "concat_cols");
    require(t.rows() == n, "concat_cols: row counts differ: " + shape_str(xs[0].shape()) +
                               " vs " + shape_str(t.shape()));
    total += t.cols();
  }
  Tensor out({n, total});
  int64_t off = 0;
  for (const Tensor& t : xs) {
    const int64_t w = t.cols();
    for (int64_t r = 0; r < n; ++r) {
      const double* src = t.row_ptr(r);
      double* dst = out.row_ptr(r) + off;
      for (int64_t c = 0; c < w; ++c) dst[c] = src[c];
    }
    off += w;
  }
  bool need = false;
  for (const Tensor& t : xs)
    if (grad_enabled() && t.requires_grad()) need = true;
  if (need) {
    std::vector<Tensor> copies = xs;
    for (Tensor& t : copies)
      if (t.requires_grad()) t.ensure_grad();
    attach(out, copies, [copies, out, n, total]() mutable {
      const double* g = out.grad();
      int64_t off2 = 0;
      for (Tensor& t : copies) {
        const int64_t w = t.cols();
        if (t.requires_grad()) {
          double* gt = t.grad();
          for (int64_t r = 0; r < n; ++r)
            for (int64_t c = 0; c < w; ++c) gt[r * w + c] += g[r * total + off2 + c];
        }
        off2 += w;
      }
    });
  }
  return out;
}

Tensor rope_rows(const Tensor& x, std::span<const int64_t> positions, double base) {
  require_2d(x, "rope_rows");
  const int64_t n = x.rows(), d = x.cols();
  require(d % 2 == 0, "rope_rows: head dimension must be even, got " + shape_str(x.shape()));
  require(static_cast<int64_t>(positions.size()) == n,
          "rope_rows: " + std::to_string(positions.size()) + " positions for " + shape_str(x.shape()));
  const int64_t half = d / 2;
  std::vector<double> freq(static_cast<size_t>(half));
  for (int64_t j = 0; j < half; ++j)
    freq[static_cast<size_t>(j)] = std::pow(base, -2.0 * static_cast<double>(j) / static_cast<double>(d));
  Tensor out({n, d});
  for (int64_t r = 0; r < n; ++r) {
    const double* src = x.row_ptr(r);
    double* dst = out.row_ptr(r);
    const double pos = static_cast<double>(positions[static_cast<size_t>(r)]);
    for (int64_t j = 0; j < half; ++j) {
      const double ang = pos * freq[static_cast<size_t>(j)];
      const double c = std::cos(ang), s = std::sin(ang);
      const double a = src[2 * j], b = src[2 * j + 1];
      dst[2 * j] = a * c - b * s;
      dst[2 * j + 1] = a * s + b * c;
    }
  }
  if (wants_graph({&x})) {
    Tensor xc = x;
    xc.ensure_grad();
    std::vector<int64_t> pv(positions.begin(), positions.end());
    attach(out, {xc}, [xc, out, n, d, half, freq, pv]() mutable {
      const double* g = out.grad();
      double* gx = xc.grad();
      for (int64_t r = 0; r < n; ++r) {
        const double pos = static_cast<double>(pv[static_cast<size_t>(r)]);
        for (int64_t j = 0; j < half; ++j) {
          const double ang = pos * freq[static_cast<size_t>(j)];
          const double c = std::cos(ang), s = std::sin(ang);
          const double ga = g[r * d + 2 * j], gb = g[r * d + 2 * j + 1];
          gx[r * d + 2 * j] += ga * c + gb * s;  // inverse rotation
          gx[r * d + 2 * j + 1] += -ga * s + gb * c;
        }
      }
    });
  }
  return out;
}

Tensor sum_all(const Tensor& x) {
  const int64_t n = x.numel();
  const double* px = x.data();
  double s = 0.0;
  for (int64_t i = 0; i < n; ++i) s += px[i];
  Tensor out({}, {s});
  if (wants_graph({&x})) {
    Tensor xc = x;
    xc.ensure_grad();
    attach(out, {xc}, [xc, out, n]() mutable {
      const double g = out.grad()[0];
      double* gx = xc.grad();
      for (int64_t i = 0; i < n; ++i) gx[i] += g;
    });
  }
  return out;
}

Tensor cross_entropy(const Tensor& logits, std::span<const int32_t> targets,
                     std::span<const uint8_t> mask) {
  require_2d(logits, "cross_entropy");
  const int64_t n = logits.rows(), v = logits.cols();
  require(static_cast<int64_t>(targets.size()) == n && static_cast<int64_t>(mask.size()) == n,
          "cross_entropy: targets/mask length does not match logits " + shape_str(logits.shape()));
  int64_t m = 0;
  for (int64_t r = 0; r < n; ++r) {
    if (!mask[static_cast<size_t>(r)]) continue;
    ++m;
    const int32_t t = targets[static_cast<size_t>(r)];
    require(t >= 0 && t < v, "cross_entropy: target " + std::to_string(t) + " out of range");
  }
  require(m > 0, "cross_entropy: mask selects no rows");
  double loss = 0.0;
  for (int64_t r = 0; r < n; ++r) {
    if (!mask[static_cast<size_t>(r)]) continue;
    const double* row = logits.row_ptr(r);
    double mx = row[0];
    for (int64_t c = 1; c < v; ++c) mx = std::max(mx, row[c]);
    double sum = 0.0;
    for (int64_t c = 0; c < v; ++c) sum += std::exp(row[c] - mx);
    loss += mx + std::log(sum) - row[targets[static_cast<size_t>(r)]];
  }
  Tensor out({}, {loss / static_cast<double>(m)});
  if (wants_graph({&logits})) {
    Tensor lc = logits;
    lc.ensure_grad();
    std::vector<int32_t> tv(targets.begin(), targets.end());
    std::vector<uint8_t> mv(mask.begin(), mask.end());
    attach(out, {lc}, [lc, out, tv, mv, n, v, m]() mutable {
      const double g = out.grad()[0] / static_cast<double>(m);
      double* gl = lc.grad();
      for (int64_t r = 0; r < n; ++r) {
        if (!mv[static_cast<size_t>(r)]) continue;
        const double* row = lc.data() + r * v;
        double mx = row[0];
        for (int64_t c = 1; c < v; ++c) mx = std::max(mx, row[c]);
        double sum = 0.0;
        for (int64_t c = 0; c < v; ++c) sum += std::exp(row[c] - mx);
        const double inv = 1.0 / sum;
        double* grow = gl + r * v;
        for (int64_t c = 0; c < v; ++c) grow[c] += g * std::exp(row[c] - mx) * inv;
        grow[tv[static_cast<size_t>(r)]] -= g;
      }
    });
  }
  return out;
}

}  // namespace attnwave
