#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <string>
#include <vector>

#include "dacvlm/errors.hpp"
#include "dacvlm/rng.hpp"

namespace dacvlm {

struct Tensor;
using TensorPtr = std::shared_ptr<Tensor>;

// Dense row-major f64 tensor that doubles as a node in a dynamically
// built reverse-mode graph. Values are immutable once produced by an op;
// only the optimizer writes into parameter tensors, between steps.
struct Tensor : std::enable_shared_from_this<Tensor> {
    std::vector<std::int64_t> shape;
    std::vector<double> data;
    bool requires_grad = false;
    std::vector<double> grad;  // empty until first accumulation

    // Graph edges; empty for leaves. backward_fn pushes this node's grad
    // into its parents' accumulators.
    std::vector<TensorPtr> parents;
    std::function<void(Tensor&)> backward_fn;

    std::int64_t size() const;
    bool is_scalar() const { return size() == 1; }
    double item() const;

    // Zero-allocates grad on first use; accumulators always start at zero.
    void ensure_grad();
    void zero_grad();

    static TensorPtr create(std::vector<std::int64_t> shape, bool requires_grad = false);
    static TensorPtr from_data(std::vector<std::int64_t> shape, std::vector<double> data,
                               bool requires_grad = false);
    static TensorPtr zeros(std::vector<std::int64_t> shape, bool requires_grad = false);
    static TensorPtr full(std::vector<std::int64_t> shape, double value,
                          bool requires_grad = false);
    static TensorPtr randn(std::vector<std::int64_t> shape, Rng& rng, double stddev,
                           bool requires_grad = false);
};

std::int64_t shape_numel(const std::vector<std::int64_t>& shape);
std::string shape_str(const std::vector<std::int64_t>& shape);

// Grad mode: ops record graph edges only while enabled (default on).
bool grad_enabled();
struct NoGradGuard {
    NoGradGuard();
    ~NoGradGuard();
    NoGradGuard(const NoGradGuard&) = delete;
    NoGradGuard& operator=(const NoGradGuard&) = delete;

  private:
    bool prev_;
};

// Multiply-accumulate instrumentation for FLOP cross-checks.
void mac_counter_reset();
void mac_counter_enable(bool on);
std::uint64_t mac_counter_value();

// Raw kernel: C[m x n] (+)= A[m x k] * B[n x k]^T. Every output element is
// a single k-ordered dot product, so results are identical for any row
// subset of A — routing and KV-cache paths rely on this.
void gemm_nt(double* c, const double* a, const double* b, std::int64_t m, std::int64_t n,
             std::int64_t k, bool accumulate);

// --- primitives -----------------------------------------------------------

TensorPtr matmul(const TensorPtr& a, const TensorPtr& b);     // [m,k] x [k,n]
TensorPtr matmul_nt(const TensorPtr& a, const TensorPtr& b);  // [m,k] x [n,k]^T
TensorPtr add(const TensorPtr& a, const TensorPtr& b);        // same shape
TensorPtr scale(const TensorPtr& a, double s);
TensorPtr gelu(const TensorPtr& x);  // exact erf form, x * Phi(x)
TensorPtr softmax_lastdim(const TensorPtr& x);
TensorPtr layer_norm(const TensorPtr& x, const TensorPtr& gain, const TensorPtr& bias,
                     double eps);
TensorPtr conv2d(const TensorPtr& x, const TensorPtr& kernel, std::int64_t stride);
TensorPtr cross_entropy(const TensorPtr& logits, const std::vector<std::int64_t>& targets,
                        const std::vector<std::uint8_t>& loss_mask);
TensorPtr sum(const TensorPtr& x);

// Structural ops (linear, used by routing / heads / sequence assembly).
TensorPtr row_gather(const TensorPtr& x, const std::vector<std::int64_t>& rows);
TensorPtr row_scatter_merge(const std::vector<TensorPtr>& groups,
                            const std::vector<std::vector<std::int64_t>>& rows,
                            std::int64_t n_rows);
TensorPtr col_slice(const TensorPtr& x, std::int64_t start, std::int64_t len);
TensorPtr col_concat(const std::vector<TensorPtr>& parts);
TensorPtr concat_rows(const std::vector<TensorPtr>& parts);
TensorPtr embedding_rows(const TensorPtr& table, const std::vector<std::int64_t>& ids);
TensorPtr chw_to_hwc(const TensorPtr& x);  // [C,H,W] -> [H*W, C]

// Rotary position encoding over even/odd pairs of the last axis; row r of
// x gets position start_pos + r.
TensorPtr rope(const TensorPtr& x, std::int64_t start_pos);

// Adds -1e30 to score entries with column > row (decoder-only mask).
TensorPtr causal_mask_add(const TensorPtr& scores);

// out[i] = sum_{j <= row_offset + i} attn[i,j] * v[j]. Row i accumulates over
// exactly row_offset+i+1 terms, so a cached single-row decode (row_offset =
// len-1) reproduces the full-sequence forward bitwise.
TensorPtr causal_attn_mix(const TensorPtr& attn, const TensorPtr& v,
                          std::int64_t row_offset);

// Reverse-mode sweep from a scalar root; visits each node once in reverse
// topological order. Leaf grads accumulate across fan-out.
void backward(const TensorPtr& loss);

}  // namespace dacvlm
