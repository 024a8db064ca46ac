#include "dacvlm/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <sstream>
#include <unordered_set>

#if defined(__AVX2__)
#include <immintrin.h>
#endif

namespace dacvlm {

namespace {

thread_local bool g_grad_enabled = true;
thread_local bool g_count_macs = false;
thread_local std::uint64_t g_mac_count = 0;

inline void count_macs(std::uint64_t n) {
    if (g_count_macs) g_mac_count += n;
}

// k-ordered dot product. The accumulation order is a pure function of k,
// never of the enclosing matrix dimensions.
inline double dot_k(const double* a, const double* b, std::int64_t k) {
#if defined(__AVX2__)
    __m256d acc0 = _mm256_setzero_pd();
    __m256d acc1 = _mm256_setzero_pd();
    __m256d acc2 = _mm256_setzero_pd();
    __m256d acc3 = _mm256_setzero_pd();
    std::int64_t i = 0;
    for (; i + 16 <= k; i += 16) {
        acc0 = _mm256_fmadd_pd(_mm256_loadu_pd(a + i), _mm256_loadu_pd(b + i), acc0);
        acc1 = _mm256_fmadd_pd(_mm256_loadu_pd(a + i + 4), _mm256_loadu_pd(b + i + 4), acc1);
        acc2 = _mm256_fmadd_pd(_mm256_loadu_pd(a + i + 8), _mm256_loadu_pd(b + i + 8), acc2);
        acc3 = _mm256_fmadd_pd(_mm256_loadu_pd(a + i + 12), _mm256_loadu_pd(b + i + 12), acc3);
    }
    for (; i + 4 <= k; i += 4) {
        acc0 = _mm256_fmadd_pd(_mm256_loadu_pd(a + i), _mm256_loadu_pd(b + i), acc0);
    }
    __m256d acc = _mm256_add_pd(_mm256_add_pd(acc0, acc1), _mm256_add_pd(acc2, acc3));
    alignas(32) double lanes[4];
    _mm256_store_pd(lanes, acc);
    double s = (lanes[0] + lanes[1]) + (lanes[2] + lanes[3]);
    for (; i < k; ++i) s += a[i] * b[i];
    return s;
#else
    double s0 = 0.0, s1 = 0.0, s2 = 0.0, s3 = 0.0;
    std::int64_t i = 0;
    for (; i + 4 <= k; i += 4) {
        s0 += a[i] * b[i];
        s1 += a[i + 1] * b[i + 1];
        s2 += a[i + 2] * b[i + 2];
        s3 += a[i + 3] * b[i + 3];
    }
    double s = (s0 + s1) + (s2 + s3);
    for (; i < k; ++i) s += a[i] * b[i];
    return s;
#endif
}

bool any_requires_grad(const std::vector<TensorPtr>& parents) {
    for (const auto& p : parents) {
        if (p && p->requires_grad) return true;
    }
    return false;
}

// Wires up a freshly computed tensor as a graph node when grad mode is on.
void attach(const TensorPtr& out, std::vector<TensorPtr> parents,
            std::function<void(Tensor&)> fn) {
    if (!g_grad_enabled || !any_requires_grad(parents)) return;
    out->requires_grad = true;
    out->parents = std::move(parents);
    out->backward_fn = std::move(fn);
}

void check_finite(const Tensor& t, const char* op) {
    for (double v : t.data) {
        if (!std::isfinite(v)) {
            throw NumericError(std::string(op) + ": non-finite input value");
        }
    }
}

std::vector<double> transposed(const double* src, std::int64_t rows, std::int64_t cols) {
    std::vector<double> out(static_cast<std::size_t>(rows * cols));
    for (std::int64_t r = 0; r < rows; ++r) {
        for (std::int64_t c = 0; c < cols; ++c) {
            out[static_cast<std::size_t>(c * rows + r)] = src[r * cols + c];
        }
    }
    return out;
}

}  // namespace

std::int64_t shape_numel(const std::vector<std::int64_t>& shape) {
    std::int64_t n = 1;
    for (auto e : shape) n *= e;
    return n;
}

std::string shape_str(const std::vector<std::int64_t>& shape) {
    std::ostringstream os;
    os << "[";
    for (std::size_t i = 0; i < shape.size(); ++i) {
        if (i) os << "x";
        os << shape[i];
    }
    os << "]";
    return os.str();
}

std::int64_t Tensor::size() const { return shape_numel(shape); }

double Tensor::item() const {
    if (!is_scalar()) {
        throw UsageError("item() requires a scalar tensor, got " + shape_str(shape));
    }
    return data[0];
}

void Tensor::ensure_grad() {
    if (grad.empty()) grad.assign(data.size(), 0.0);
}

void Tensor::zero_grad() {
    std::fill(grad.begin(), grad.end(), 0.0);
}

TensorPtr Tensor::create(std::vector<std::int64_t> shape, bool requires_grad) {
    auto t = std::make_shared<Tensor>();
    t->data.assign(static_cast<std::size_t>(shape_numel(shape)), 0.0);
    t->shape = std::move(shape);
    t->requires_grad = requires_grad;
    return t;
}

TensorPtr Tensor::from_data(std::vector<std::int64_t> shape, std::vector<double> data,
                            bool requires_grad) {
    if (shape_numel(shape) != static_cast<std::int64_t>(data.size())) {
        throw DimensionError("from_data: shape " + shape_str(shape) + " does not match " +
                             std::to_string(data.size()) + " values");
    }
    auto t = std::make_shared<Tensor>();
    t->shape = std::move(shape);
    t->data = std::move(data);
    t->requires_grad = requires_grad;
    return t;
}

TensorPtr Tensor::zeros(std::vector<std::int64_t> shape, bool requires_grad) {
    return create(std::move(shape), requires_grad);
}

TensorPtr Tensor::full(std::vector<std::int64_t> shape, double value, bool requires_grad) {
    auto t = create(std::move(shape), requires_grad);
    std::fill(t->data.begin(), t->data.end(), value);
    return t;
}

TensorPtr Tensor::randn(std::vector<std::int64_t> shape, Rng& rng, double stddev,
                        bool requires_grad) {
    auto t = create(std::move(shape), requires_grad);
    for (auto& v : t->data) v = rng.normal() * stddev;
    return t;
}

bool grad_enabled() { return g_grad_enabled; }

NoGradGuard::NoGradGuard() : prev_(g_grad_enabled) { g_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { g_grad_enabled = prev_; }

void mac_counter_reset() { g_mac_count = 0; }
void mac_counter_enable(bool on) { g_count_macs = on; }
std::uint64_t mac_counter_value() { return g_mac_count; }

void gemm_nt(double* c, const double* a, const double* b, std::int64_t m, std::int64_t n,
             std::int64_t k, bool accumulate) {
    count_macs(static_cast<std::uint64_t>(m) * static_cast<std::uint64_t>(n) *
               static_cast<std::uint64_t>(k));
    for (std::int64_t i = 0; i < m; ++i) {
        const double* arow = a + i * k;
        double* crow = c + i * n;
        for (std::int64_t j = 0; j < n; ++j) {
            const double v = dot_k(arow, b + j * k, k);
            if (accumulate) {
                crow[j] += v;
            } else {
                crow[j] = v;
            }
        }
    }
}

// --- matmul ----------------------------------------------------------------

namespace {

TensorPtr matmul_impl(const TensorPtr& a, const TensorPtr& b, bool b_transposed) {
    if (a->shape.size() != 2 || b->shape.size() != 2) {
        throw DimensionError("matmul: expected rank-2 tensors, got " + shape_str(a->shape) +
                             " and " + shape_str(b->shape));
    }
    const std::int64_t m = a->shape[0];
    const std::int64_t k = a->shape[1];
    const std::int64_t bk = b_transposed ? b->shape[1] : b->shape[0];
    const std::int64_t n = b_transposed ? b->shape[0] : b->shape[1];
    if (k != bk) {
        throw DimensionError("matmul: inner dimensions disagree, " + shape_str(a->shape) +
                             " vs " + shape_str(b->shape));
    }
    auto out = Tensor::create({m, n});
    if (b_transposed) {
        gemm_nt(out->data.data(), a->data.data(), b->data.data(), m, n, k, false);
    } else {
        std::vector<double> bt = transposed(b->data.data(), k, n);
        gemm_nt(out->data.data(), a->data.data(), bt.data(), m, n, k, false);
    }
    attach(out, {a, b}, [m, n, k, b_transposed](Tensor& self) {
        const auto& a_t = self.parents[0];
        const auto& b_t = self.parents[1];
        const double* dc = self.grad.data();
        if (a_t->requires_grad) {
            a_t->ensure_grad();
            if (b_transposed) {
                // dA = dC * B, with B stored as [n x k].
                std::vector<double> bt = transposed(b_t->data.data(), n, k);
                gemm_nt(a_t->grad.data(), dc, bt.data(), m, k, n, true);
            } else {
                // dA = dC * B^T, with B stored as [k x n]: rows of B are contiguous.
                gemm_nt(a_t->grad.data(), dc, b_t->data.data(), m, k, n, true);
            }
        }
        if (b_t->requires_grad) {
            b_t->ensure_grad();
            std::vector<double> at = transposed(a_t->data.data(), m, k);  // [k x m]
            std::vector<double> dct = transposed(dc, m, n);               // [n x m]
            if (b_transposed) {
                // dB = dC^T * A, shape [n x k].
                gemm_nt(b_t->grad.data(), dct.data(), at.data(), n, k, m, true);
            } else {
                // dB = A^T * dC, shape [k x n].
                gemm_nt(b_t->grad.data(), at.data(), dct.data(), k, n, m, true);
            }
        }
    });
    return out;
}

}  // namespace

TensorPtr matmul(const TensorPtr& a, const TensorPtr& b) { return matmul_impl(a, b, false); }
TensorPtr matmul_nt(const TensorPtr& a, const TensorPtr& b) { return matmul_impl(a, b, true); }

// --- elementwise -----------------------------------------------------------

TensorPtr add(const TensorPtr& a, const TensorPtr& b) {
    if (a->shape != b->shape) {
        throw DimensionError("add: shape mismatch " + shape_str(a->shape) + " vs " +
                             shape_str(b->shape));
    }
    auto out = Tensor::create(a->shape);
    for (std::size_t i = 0; i < out->data.size(); ++i) {
        out->data[i] = a->data[i] + b->data[i];
    }
    attach(out, {a, b}, [](Tensor& self) {
        for (const auto& p : self.parents) {
            if (!p->requires_grad) continue;
            p->ensure_grad();
            for (std::size_t i = 0; i < p->grad.size(); ++i) p->grad[i] += self.grad[i];
        }
    });
    return out;
}

TensorPtr scale(const TensorPtr& a, double s) {
    auto out = Tensor::create(a->shape);
    for (std::size_t i = 0; i < out->data.size(); ++i) out->data[i] = a->data[i] * s;
    attach(out, {a}, [s](Tensor& self) {
        auto& p = self.parents[0];
        p->ensure_grad();
        for (std::size_t i = 0; i < p->grad.size(); ++i) p->grad[i] += self.grad[i] * s;
    });
    return out;
}

TensorPtr gelu(const TensorPtr& x) {
    constexpr double inv_sqrt2 = 0.70710678118654752440;
    constexpr double inv_sqrt2pi = 0.39894228040143267794;
    auto out = Tensor::create(x->shape);
    for (std::size_t i = 0; i < out->data.size(); ++i) {
        const double v = x->data[i];
        out->data[i] = v * 0.5 * (1.0 + std::erf(v * inv_sqrt2));
    }
    attach(out, {x}, [inv_sqrt2, inv_sqrt2pi](Tensor& self) {
        auto& p = self.parents[0];
        p->ensure_grad();
        for (std::size_t i = 0; i < p->grad.size(); ++i) {
            const double v = p->data[i];
            const double cdf = 0.5 * (1.0 + std::erf(v * inv_sqrt2));
            const double pdf = inv_sqrt2pi * std::exp(-0.5 * v * v);
            p->grad[i] += self.grad[i] * (cdf + v * pdf);
        }
    });
    return out;
}

// --- softmax / layer norm ---------------------------------------------------

TensorPtr softmax_lastdim(const TensorPtr& x) {
    if (x->shape.empty() || x->shape.back() < 1) {
        throw DimensionError("softmax_lastdim: last extent must be >= 1, got " +
                             shape_str(x->shape));
    }
    check_finite(*x, "softmax_lastdim");
    const std::int64_t d = x->shape.back();
    const std::int64_t rows = x->size() / d;
    auto out = Tensor::create(x->shape);
    for (std::int64_t r = 0; r < rows; ++r) {
        const double* in = x->data.data() + r * d;
        double* o = out->data.data() + r * d;
        double mx = in[0];
        for (std::int64_t j = 1; j < d; ++j) mx = std::max(mx, in[j]);
        double s = 0.0;
        for (std::int64_t j = 0; j < d; ++j) {
            o[j] = std::exp(in[j] - mx);
            s += o[j];
        }
        const double inv = 1.0 / s;
        for (std::int64_t j = 0; j < d; ++j) o[j] *= inv;
    }
    attach(out, {x}, [d, rows](Tensor& self) {
        auto& p = self.parents[0];
        p->ensure_grad();
        for (std::int64_t r = 0; r < rows; ++r) {
            const double* y = self.data.data() + r * d;
            const double* dy = self.grad.data() + r * d;
            double* dx = p->grad.data() + r * d;
            double dotv = 0.0;
            for (std::int64_t j = 0; j < d; ++j) dotv += y[j] * dy[j];
            for (std::int64_t j = 0; j < d; ++j) dx[j] += y[j] * (dy[j] - dotv);
        }
    });
    return out;
}

TensorPtr layer_norm(const TensorPtr& x, const TensorPtr& gain, const TensorPtr& bias,
                     double eps) {
    if (x->shape.empty() || x->shape.back() == 0) {
        throw DimensionError("layer_norm: empty last axis in " + shape_str(x->shape));
    }
    if (eps <= 0.0) {
        throw ConfigError("layer_norm: eps must be positive");
    }
    const std::int64_t d = x->shape.back();
    if (gain->size() != d || bias->size() != d) {
        throw DimensionError("layer_norm: gain/bias length must equal " + std::to_string(d));
    }
    const std::int64_t rows = x->size() / d;
    auto out = Tensor::create(x->shape);
    // Saved per row for backward: 1/sqrt(var+eps).
    auto inv_std = std::make_shared<std::vector<double>>(static_cast<std::size_t>(rows));
    auto means = std::make_shared<std::vector<double>>(static_cast<std::size_t>(rows));
    for (std::int64_t r = 0; r < rows; ++r) {
        const double* in = x->data.data() + r * d;
        double* o = out->data.data() + r * d;
        double mu = 0.0;
        for (std::int64_t j = 0; j < d; ++j) mu += in[j];
        mu /= static_cast<double>(d);
        double var = 0.0;
        for (std::int64_t j = 0; j < d; ++j) {
            const double c = in[j] - mu;
            var += c * c;
        }
        var /= static_cast<double>(d);
        const double inv = 1.0 / std::sqrt(var + eps);
        (*inv_std)[static_cast<std::size_t>(r)] = inv;
        (*means)[static_cast<std::size_t>(r)] = mu;
        for (std::int64_t j = 0; j < d; ++j) {
            o[j] = (in[j] - mu) * inv * gain->data[static_cast<std::size_t>(j)] +
                   bias->data[static_cast<std::size_t>(j)];
        }
    }
    attach(out, {x, gain, bias}, [d, rows, inv_std, means](Tensor& self) {
        auto& xp = self.parents[0];
        auto& gp = self.parents[1];
        auto& bp = self.parents[2];
        if (gp->requires_grad) gp->ensure_grad();
        if (bp->requires_grad) bp->ensure_grad();
        if (xp->requires_grad) xp->ensure_grad();
        const double dd = static_cast<double>(d);
        std::vector<double> xhat(static_cast<std::size_t>(d));
        std::vector<double> dxh(static_cast<std::size_t>(d));
        for (std::int64_t r = 0; r < rows; ++r) {
            const double* in = xp->data.data() + r * d;
            const double* dy = self.grad.data() + r * d;
            const double inv = (*inv_std)[static_cast<std::size_t>(r)];
            const double mu = (*means)[static_cast<std::size_t>(r)];
            for (std::int64_t j = 0; j < d; ++j) {
                xhat[static_cast<std::size_t>(j)] = (in[j] - mu) * inv;
            }
            if (gp->requires_grad || bp->requires_grad) {
                for (std::int64_t j = 0; j < d; ++j) {
                    if (gp->requires_grad) {
                        gp->grad[static_cast<std::size_t>(j)] +=
                            dy[j] * xhat[static_cast<std::size_t>(j)];
                    }
                    if (bp->requires_grad) bp->grad[static_cast<std::size_t>(j)] += dy[j];
                }
            }
            if (xp->requires_grad) {
                double sum_dxh = 0.0, sum_dxh_xhat = 0.0;
                for (std::int64_t j = 0; j < d; ++j) {
                    dxh[static_cast<std::size_t>(j)] =
                        dy[j] * gp->data[static_cast<std::size_t>(j)];
                    sum_dxh += dxh[static_cast<std::size_t>(j)];
                    sum_dxh_xhat +=
                        dxh[static_cast<std::size_t>(j)] * xhat[static_cast<std::size_t>(j)];
                }
                double* dx = xp->grad.data() + r * d;
                for (std::int64_t j = 0; j < d; ++j) {
                    dx[j] += inv * (dxh[static_cast<std::size_t>(j)] - sum_dxh / dd -
                                    xhat[static_cast<std::size_t>(j)] * sum_dxh_xhat / dd);
                }
            }
        }
    });
    return out;
}

// --- conv2d -----------------------------------------------------------------

TensorPtr conv2d(const TensorPtr& x, const TensorPtr& kernel, std::int64_t stride) {
    if (x->shape.size() != 3 || kernel->shape.size() != 4) {
        throw DimensionError("conv2d: expected input [C,H,W] and kernel [O,C,k,k], got " +
                             shape_str(x->shape) + " and " + shape_str(kernel->shape));
    }
    const std::int64_t c_in = x->shape[0], h = x->shape[1], w = x->shape[2];
    const std::int64_t c_out = kernel->shape[0], kc = kernel->shape[1], kh = kernel->shape[2],
                       kw = kernel->shape[3];
    if (kc != c_in || kh != kw) {
        throw DimensionError("conv2d: kernel " + shape_str(kernel->shape) +
                             " incompatible with input " + shape_str(x->shape));
    }
    const std::int64_t k = kh;
    if (h < k || w < k || (h - k) % stride != 0 || (w - k) % stride != 0) {
        throw DimensionError("conv2d: dims " + shape_str(x->shape) + " not divisible for k=" +
                             std::to_string(k) + " stride=" + std::to_string(stride));
    }
    const std::int64_t ho = (h - k) / stride + 1;
    const std::int64_t wo = (w - k) / stride + 1;
    auto out = Tensor::create({c_out, ho, wo});
    count_macs(static_cast<std::uint64_t>(c_out * ho * wo * c_in * k * k));
    for (std::int64_t oc = 0; oc < c_out; ++oc) {
        for (std::int64_t oy = 0; oy < ho; ++oy) {
            for (std::int64_t ox = 0; ox < wo; ++ox) {
                double acc = 0.0;
                const std::int64_t iy0 = oy * stride, ix0 = ox * stride;
                for (std::int64_t ic = 0; ic < c_in; ++ic) {
                    const double* xp = x->data.data() + (ic * h + iy0) * w + ix0;
                    const double* kp = kernel->data.data() + ((oc * c_in + ic) * k) * k;
                    for (std::int64_t ky = 0; ky < k; ++ky) {
                        acc += dot_k(xp + ky * w, kp + ky * k, k);
                    }
                }
                out->data[static_cast<std::size_t>((oc * ho + oy) * wo + ox)] = acc;
            }
        }
    }
    attach(out, {x, kernel}, [c_in, h, w, c_out, k, stride, ho, wo](Tensor& self) {
        auto& xp = self.parents[0];
        auto& kp = self.parents[1];
        if (xp->requires_grad) xp->ensure_grad();
        if (kp->requires_grad) kp->ensure_grad();
        for (std::int64_t oc = 0; oc < c_out; ++oc) {
            for (std::int64_t oy = 0; oy < ho; ++oy) {
                for (std::int64_t ox = 0; ox < wo; ++ox) {
                    const double g =
                        self.grad[static_cast<std::size_t>((oc * ho + oy) * wo + ox)];
                    if (g == 0.0) continue;
                    const std::int64_t iy0 = oy * stride, ix0 = ox * stride;
                    for (std::int64_t ic = 0; ic < c_in; ++ic) {
                        const double* xrow = xp->data.data() + (ic * h + iy0) * w + ix0;
                        const double* krow = kp->data.data() + ((oc * c_in + ic) * k) * k;
                        double* dxrow =
                            xp->requires_grad ? xp->grad.data() + (ic * h + iy0) * w + ix0
                                              : nullptr;
                        double* dkrow = kp->requires_grad
                                            ? kp->grad.data() + ((oc * c_in + ic) * k) * k
                                            : nullptr;
                        for (std::int64_t ky = 0; ky < k; ++ky) {
                            for (std::int64_t kx = 0; kx < k; ++kx) {
                                if (dkrow) dkrow[ky * k + kx] += g * xrow[ky * w + kx];
                                if (dxrow) dxrow[ky * w + kx] += g * krow[ky * k + kx];
                            }
                        }
                    }
                }
            }
        }
    });
    return out;
}

// --- cross entropy -----------------------------------------------------------

TensorPtr cross_entropy(const TensorPtr& logits, const std::vector<std::int64_t>& targets,
                        const std::vector<std::uint8_t>& loss_mask) {
    if (logits->shape.size() != 2) {
        throw DimensionError("cross_entropy: expected [n,V] logits, got " +
                             shape_str(logits->shape));
    }
    const std::int64_t n = logits->shape[0];
    const std::int64_t v = logits->shape[1];
    if (static_cast<std::int64_t>(targets.size()) != n ||
        static_cast<std::int64_t>(loss_mask.size()) != n) {
        throw DimensionError("cross_entropy: targets/mask length must equal n=" +
                             std::to_string(n));
    }
    std::int64_t active = 0;
    for (std::int64_t i = 0; i < n; ++i) {
        if (!loss_mask[static_cast<std::size_t>(i)]) continue;
        ++active;
        const std::int64_t t = targets[static_cast<std::size_t>(i)];
        if (t < 0 || t >= v) {
            throw DimensionError("cross_entropy: target " + std::to_string(t) +
                                 " out of vocabulary (V=" + std::to_string(v) + ")");
        }
    }
    if (active == 0) {
        throw NumericError("cross_entropy: degenerate batch, all positions masked");
    }
    auto out = Tensor::create({1});
    // Softmax probabilities saved for backward.
    auto probs = std::make_shared<std::vector<double>>(logits->data.size());
    double total = 0.0;
    for (std::int64_t i = 0; i < n; ++i) {
        const double* row = logits->data.data() + i * v;
        double* prow = probs->data() + i * v;
        double mx = row[0];
        for (std::int64_t j = 1; j < v; ++j) mx = std::max(mx, row[j]);
        double s = 0.0;
        for (std::int64_t j = 0; j < v; ++j) {
            prow[j] = std::exp(row[j] - mx);
            s += prow[j];
        }
        const double inv = 1.0 / s;
        for (std::int64_t j = 0; j < v; ++j) prow[j] *= inv;
        if (loss_mask[static_cast<std::size_t>(i)]) {
            const std::int64_t t = targets[static_cast<std::size_t>(i)];
            total += std::log(s) + mx - row[t];
        }
    }
    out->data[0] = total / static_cast<double>(active);
    attach(out, {logits}, [n, v, targets, loss_mask, probs, active](Tensor& self) {
        auto& p = self.parents[0];
        p->ensure_grad();
        const double g = self.grad[0] / static_cast<double>(active);
        for (std::int64_t i = 0; i < n; ++i) {
            if (!loss_mask[static_cast<std::size_t>(i)]) continue;
            const double* prow = probs->data() + i * v;
            double* drow = p->grad.data() + i * v;
            const std::int64_t t = targets[static_cast<std::size_t>(i)];
            for (std::int64_t j = 0; j < v; ++j) drow[j] += g * prow[j];
            drow[t] -= g;
        }
    });
    return out;
}

TensorPtr sum(const TensorPtr& x) {
    auto out = Tensor::create({1});
    double s = 0.0;
    for (double v : x->data) s += v;
    out->data[0] = s;
    attach(out, {x}, [](Tensor& self) {
        auto& p = self.parents[0];
        p->ensure_grad();
        for (auto& g : p->grad) g += self.grad[0];
    });
    return out;
}

// --- structural ops -----------------------------------------------------------

TensorPtr row_gather(const TensorPtr& x, const std::vector<std::int64_t>& rows) {
    if (x->shape.size() != 2) {
        throw DimensionError("row_gather: expected rank-2 tensor, got " + shape_str(x->shape));
    }
    const std::int64_t d = x->shape[1];
    const std::int64_t m = static_cast<std::int64_t>(rows.size());
    auto out = Tensor::create({m, d});
    for (std::int64_t i = 0; i < m; ++i) {
        const std::int64_t r = rows[static_cast<std::size_t>(i)];
        if (r < 0 || r >= x->shape[0]) {
            throw DimensionError("row_gather: row index " + std::to_string(r) + " out of range");
        }
        std::memcpy(out->data.data() + i * d, x->data.data() + r * d,
                    static_cast<std::size_t>(d) * sizeof(double));
    }
    attach(out, {x}, [rows, d](Tensor& self) {
        auto& p = self.parents[0];
        p->ensure_grad();
        for (std::size_t i = 0; i < rows.size(); ++i) {
            const double* g = self.grad.data() + static_cast<std::int64_t>(i) * d;
            double* dst = p->grad.data() + rows[i] * d;
            for (std::int64_t j = 0; j < d; ++j) dst[j] += g[j];
        }
    });
    return out;
}

TensorPtr row_scatter_merge(const std::vector<TensorPtr>& groups,
                            const std::vector<std::vector<std::int64_t>>& rows,
                            std::int64_t n_rows) {
    if (groups.size() != rows.size()) {
        throw DimensionError("row_scatter_merge: group/index count mismatch");
    }
    if (groups.empty()) {
        throw DimensionError("row_scatter_merge: no groups");
    }
    const std::int64_t d = groups[0]->shape[1];
    auto out = Tensor::create({n_rows, d});
    std::vector<std::uint8_t> seen(static_cast<std::size_t>(n_rows), 0);
    for (std::size_t g = 0; g < groups.size(); ++g) {
        const auto& t = groups[g];
        if (t->shape.size() != 2 || t->shape[1] != d ||
            t->shape[0] != static_cast<std::int64_t>(rows[g].size())) {
            throw DimensionError("row_scatter_merge: group " + std::to_string(g) +
                                 " shape mismatch " + shape_str(t->shape));
        }
        for (std::size_t i = 0; i < rows[g].size(); ++i) {
            const std::int64_t r = rows[g][i];
            if (r < 0 || r >= n_rows || seen[static_cast<std::size_t>(r)]) {
                throw DimensionError("row_scatter_merge: indices must cover each row once");
            }
            seen[static_cast<std::size_t>(r)] = 1;
            std::memcpy(out->data.data() + r * d,
                        t->data.data() + static_cast<std::int64_t>(i) * d,
                        static_cast<std::size_t>(d) * sizeof(double));
        }
    }
    for (auto s : seen) {
        if (!s) throw DimensionError("row_scatter_merge: indices do not partition all rows");
    }
    std::vector<TensorPtr> parents(groups.begin(), groups.end());
    attach(out, parents, [rows, d](Tensor& self) {
        for (std::size_t g = 0; g < self.parents.size(); ++g) {
            auto& p = self.parents[g];
            if (!p->requires_grad) continue;
            p->ensure_grad();
            for (std::size_t i = 0; i < rows[g].size(); ++i) {
                const double* src = self.grad.data() + rows[g][i] * d;
                double* dst = p->grad.data() + static_cast<std::int64_t>(i) * d;
                for (std::int64_t j = 0; j < d; ++j) dst[j] += src[j];
            }
        }
    });
    return out;
}

TensorPtr col_slice(const TensorPtr& x, std::int64_t start, std::int64_t len) {
    if (x->shape.size() != 2 || start < 0 || start + len > x->shape[1]) {
        throw DimensionError("col_slice: range [" + std::to_string(start) + "," +
                             std::to_string(start + len) + ") invalid for " +
                             shape_str(x->shape));
    }
    const std::int64_t n = x->shape[0], d = x->shape[1];
    auto out = Tensor::create({n, len});
    for (std::int64_t i = 0; i < n; ++i) {
        std::memcpy(out->data.data() + i * len, x->data.data() + i * d + start,
                    static_cast<std::size_t>(len) * sizeof(double));
    }
    attach(out, {x}, [start, len, n, d](Tensor& self) {
        auto& p = self.parents[0];
        p->ensure_grad();
        for (std::int64_t i = 0; i < n; ++i) {
            const double* g = self.grad.data() + i * len;
            double* dst = p->grad.data() + i * d + start;
            for (std::int64_t j = 0; j < len; ++j) dst[j] += g[j];
        }
    });
    return out;
}

TensorPtr col_concat(const std::vector<TensorPtr>& parts) {
    if (parts.empty()) throw DimensionError("col_concat: no parts");
    const std::int64_t n = parts[0]->shape[0];
    std::int64_t d = 0;
    for (const auto& p : parts) {
        if (p->shape.size() != 2 || p->shape[0] != n) {
            throw DimensionError("col_concat: all parts need " + std::to_string(n) + " rows");
        }
        d += p->shape[1];
    }
    auto out = Tensor::create({n, d});
    std::int64_t off = 0;
    for (const auto& p : parts) {
        const std::int64_t w = p->shape[1];
        for (std::int64_t i = 0; i < n; ++i) {
            std::memcpy(out->data.data() + i * d + off, p->data.data() + i * w,
                        static_cast<std::size_t>(w) * sizeof(double));
        }
        off += w;
    }
    std::vector<TensorPtr> parents(parts.begin(), parts.end());
    attach(out, parents, [n, d](Tensor& self) {
        std::int64_t off = 0;
        for (auto& p : self.parents) {
            const std::int64_t w = p->shape[1];
            if (p->requires_grad) {
                p->ensure_grad();
                for (std::int64_t i = 0; i < n; ++i) {
                    const double* g = self.grad.data() + i * d + off;
                    double* dst = p->grad.data() + i * w;
                    for (std::int64_t j = 0; j < w; ++j) dst[j] += g[j];
                }
            }
            off += w;
        }
    });
    return out;
}

TensorPtr concat_rows(const std::vector<TensorPtr>& parts) {
    if (parts.empty()) throw DimensionError("concat_rows: no parts");
    std::int64_t d = -1;
    std::int64_t n = 0;
    for (const auto& p : parts) {
        std::int64_t pd;
        std::int64_t pn;
        if (p->shape.size() == 1) {
            pn = 1;
            pd = p->shape[0];
        } else if (p->shape.size() == 2) {
            pn = p->shape[0];
            pd = p->shape[1];
        } else {
            throw DimensionError("concat_rows: rank must be 1 or 2, got " + shape_str(p->shape));
        }
        if (d == -1) d = pd;
        if (pd != d) {
            throw DimensionError("concat_rows: width mismatch " + shape_str(p->shape));
        }
        n += pn;
    }
    auto out = Tensor::create({n, d});
    std::int64_t row = 0;
    for (const auto& p : parts) {
        std::memcpy(out->data.data() + row * d, p->data.data(),
                    p->data.size() * sizeof(double));
        row += p->size() / d;
    }
    std::vector<TensorPtr> parents(parts.begin(), parts.end());
    attach(out, parents, [d](Tensor& self) {
        std::int64_t row = 0;
        for (auto& p : self.parents) {
            const std::int64_t pn = p->size() / d;
            if (p->requires_grad) {
                p->ensure_grad();
                const double* g = self.grad.data() + row * d;
                for (std::size_t j = 0; j < p->grad.size(); ++j) p->grad[j] += g[j];
            }
            row += pn;
        }
    });
    return out;
}

TensorPtr embedding_rows(const TensorPtr& table, const std::vector<std::int64_t>& ids) {
    if (table->shape.size() != 2) {
        throw DimensionError("embedding_rows: table must be rank-2");
    }
    const std::int64_t v = table->shape[0], d = table->shape[1];
    const std::int64_t n = static_cast<std::int64_t>(ids.size());
    auto out = Tensor::create({n, d});
    for (std::int64_t i = 0; i < n; ++i) {
        const std::int64_t id = ids[static_cast<std::size_t>(i)];
        if (id < 0 || id >= v) {
            throw DimensionError("embedding_rows: token id " + std::to_string(id) +
                                 " out of vocabulary (V=" + std::to_string(v) + ")");
        }
        std::memcpy(out->data.data() + i * d, table->data.data() + id * d,
                    static_cast<std::size_t>(d) * sizeof(double));
    }
    attach(out, {table}, [ids, d](Tensor& self) {
        auto& p = self.parents[0];
        p->ensure_grad();
        for (std::size_t i = 0; i < ids.size(); ++i) {
            const double* g = self.grad.data() + static_cast<std::int64_t>(i) * d;
            double* dst = p->grad.data() + ids[i] * d;
            for (std::int64_t j = 0; j < d; ++j) dst[j] += g[j];
        }
    });
    return out;
}

TensorPtr chw_to_hwc(const TensorPtr& x) {
    if (x->shape.size() != 3) {
        throw DimensionError("chw_to_hwc: expected [C,H,W], got " + shape_str(x->shape));
    }
    const std::int64_t c = x->shape[0], h = x->shape[1], w = x->shape[2];
    auto out = Tensor::create({h * w, c});
    for (std::int64_t ch = 0; ch < c; ++ch) {
        for (std::int64_t i = 0; i < h * w; ++i) {
            out->data[static_cast<std::size_t>(i * c + ch)] =
                x->data[static_cast<std::size_t>(ch * h * w + i)];
        }
    }
    attach(out, {x}, [c, h, w](Tensor& self) {
        auto& p = self.parents[0];
        p->ensure_grad();
        for (std::int64_t ch = 0; ch < c; ++ch) {
            for (std::int64_t i = 0; i < h * w; ++i) {
                p->grad[static_cast<std::size_t>(ch * h * w + i)] +=
                    self.grad[static_cast<std::size_t>(i * c + ch)];
            }
        }
    });
    return out;
}

TensorPtr rope(const TensorPtr& x, std::int64_t start_pos) {
    if (x->shape.size() != 2 || x->shape[1] % 2 != 0) {
        throw DimensionError("rope: expected [n, even], got " + shape_str(x->shape));
    }
    const std::int64_t n = x->shape[0], d = x->shape[1];
    const std::int64_t pairs = d / 2;
    auto out = Tensor::create(x->shape);
    // cos/sin per (row, pair), saved for backward.
    auto cs = std::make_shared<std::vector<double>>(static_cast<std::size_t>(n * pairs * 2));
    for (std::int64_t r = 0; r < n; ++r) {
        const double pos = static_cast<double>(start_pos + r);
        const double* in = x->data.data() + r * d;
        double* o = out->data.data() + r * d;
        for (std::int64_t i = 0; i < pairs; ++i) {
            const double freq =
                std::pow(10000.0, -2.0 * static_cast<double>(i) / static_cast<double>(d));
            const double ang = pos * freq;
            const double c = std::cos(ang), s = std::sin(ang);
            (*cs)[static_cast<std::size_t>((r * pairs + i) * 2)] = c;
            (*cs)[static_cast<std::size_t>((r * pairs + i) * 2 + 1)] = s;
            const double a = in[2 * i], b = in[2 * i + 1];
            o[2 * i] = a * c - b * s;
            o[2 * i + 1] = a * s + b * c;
        }
    }
    attach(out, {x}, [n, d, pairs, cs](Tensor& self) {
        auto& p = self.parents[0];
        p->ensure_grad();
        for (std::int64_t r = 0; r < n; ++r) {
            const double* dy = self.grad.data() + r * d;
            double* dx = p->grad.data() + r * d;
            for (std::int64_t i = 0; i < pairs; ++i) {
                const double c = (*cs)[static_cast<std::size_t>((r * pairs + i) * 2)];
                const double s = (*cs)[static_cast<std::size_t>((r * pairs + i) * 2 + 1)];
                dx[2 * i] += dy[2 * i] * c + dy[2 * i + 1] * s;
                dx[2 * i + 1] += -dy[2 * i] * s + dy[2 * i + 1] * c;
            }
        }
    });
    return out;
}

TensorPtr causal_mask_add(const TensorPtr& scores) {
    if (scores->shape.size() != 2 || scores->shape[0] != scores->shape[1]) {
        throw DimensionError("causal_mask_add: expected square [n,n], got " +
                             shape_str(scores->shape));
    }
    const std::int64_t n = scores->shape[0];
    auto out = Tensor::create(scores->shape);
    for (std::int64_t i = 0; i < n; ++i) {
        for (std::int64_t j = 0; j < n; ++j) {
            const double v = scores->data[static_cast<std::size_t>(i * n + j)];
            out->data[static_cast<std::size_t>(i * n + j)] = (j > i) ? v - 1e30 : v;
        }
    }
    attach(out, {scores}, [](Tensor& self) {
        auto& p = self.parents[0];
        p->ensure_grad();
        for (std::size_t i = 0; i < p->grad.size(); ++i) p->grad[i] += self.grad[i];
    });
    return out;
}

TensorPtr causal_attn_mix(const TensorPtr& attn, const TensorPtr& v,
                          std::int64_t row_offset) {
    if (attn->shape.size() != 2 || v->shape.size() != 2) {
        throw DimensionError("causal_attn_mix: expected rank-2 inputs");
    }
    const std::int64_t m = attn->shape[0], len = attn->shape[1];
    const std::int64_t dk = v->shape[1];
    if (v->shape[0] != len || row_offset < 0 || row_offset + m > len) {
        throw DimensionError("causal_attn_mix: attn " + shape_str(attn->shape) +
                             " incompatible with v " + shape_str(v->shape));
    }
    // Column-contiguous view of v for k-ordered dots over the sequence axis.
    std::vector<double> vt = transposed(v->data.data(), len, dk);
    auto out = Tensor::create({m, dk});
    for (std::int64_t i = 0; i < m; ++i) {
        const std::int64_t k = row_offset + i + 1;
        count_macs(static_cast<std::uint64_t>(k * dk));
        const double* arow = attn->data.data() + i * len;
        double* orow = out->data.data() + i * dk;
        for (std::int64_t c = 0; c < dk; ++c) {
            orow[c] = dot_k(arow, vt.data() + c * len, k);
        }
    }
    attach(out, {attn, v}, [m, len, dk, row_offset](Tensor& self) {
        auto& ap = self.parents[0];
        auto& vp = self.parents[1];
        if (ap->requires_grad) ap->ensure_grad();
        if (vp->requires_grad) vp->ensure_grad();
        for (std::int64_t i = 0; i < m; ++i) {
            const std::int64_t k = row_offset + i + 1;
            const double* dout = self.grad.data() + i * dk;
            for (std::int64_t j = 0; j < k; ++j) {
                const double* vrow = vp->data.data() + j * dk;
                if (ap->requires_grad) {
                    double s = 0.0;
                    for (std::int64_t c = 0; c < dk; ++c) s += dout[c] * vrow[c];
                    ap->grad[static_cast<std::size_t>(i * len + j)] += s;
                }
                if (vp->requires_grad) {
                    const double a = ap->data[static_cast<std::size_t>(i * len + j)];
                    double* dv = vp->grad.data() + j * dk;
                    for (std::int64_t c = 0; c < dk; ++c) dv[c] += a * dout[c];
                }
            }
        }
    });
    return out;
}

// --- backward ----------------------------------------------------------------

void backward(const TensorPtr& loss) {
    if (!loss->is_scalar()) {
        throw UsageError("backward: root must be scalar, got " + shape_str(loss->shape));
    }
    // Postorder DFS gives a topological order (parents before node).
    std::vector<Tensor*> order;
    std::unordered_set<Tensor*> visited;
    std::vector<std::pair<TensorPtr, std::size_t>> stack;
    stack.emplace_back(loss, 0);
    visited.insert(loss.get());
    while (!stack.empty()) {
        auto& [node, idx] = stack.back();
        if (idx < node->parents.size()) {
            TensorPtr next = node->parents[idx++];
            if (next->requires_grad && !visited.count(next.get())) {
                visited.insert(next.get());
                stack.emplace_back(std::move(next), 0);
            }
        } else {
            order.push_back(node.get());
            stack.pop_back();
        }
    }
    loss->ensure_grad();
    loss->grad[0] = 1.0;
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
        Tensor* node = *it;
        if (node->backward_fn) {
            node->ensure_grad();
            node->backward_fn(*node);
        }
    }
}

}  // namespace dacvlm
