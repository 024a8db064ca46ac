#pragma once

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "dacvlm/patch_embed.hpp"
#include "dacvlm/tensor.hpp"

namespace dacvlm {

// Architecture zoo: which block components are duplicated per modality.
//   dense   - everything shared
//   rep     - shared weights plus additive trainable deltas on the FFN pair
//   moe_ffn - FFN duplicated per modality, rest shared
//   ln_only - both layer norms duplicated, rest shared
//   dac     - attention projections, both norms, and FFN all duplicated
enum class VariantKind { dense, rep, moe_ffn, ln_only, dac };

VariantKind variant_from_string(const std::string& name);
std::string variant_to_string(VariantKind kind);

struct RoutePlan {
    std::vector<std::int64_t> idx[2];  // indexed by Modality; partitions 0..n-1
};

RoutePlan route(const std::vector<Modality>& ids);

// Per-layer parameter bundle. Branch slots are indexed by Modality; variants
// that share a component alias the same tensor in both slots.
struct BlockParams {
    VariantKind kind = VariantKind::dense;
    std::int64_t d = 0;
    std::int64_t d_ff = 0;
    std::int64_t n_heads = 0;
    double ln_eps = 1e-5;

    TensorPtr wq[2], wk[2], wv[2], wo[2];              // [d, d]
    TensorPtr ln1_gain[2], ln1_bias[2];                // [d]
    TensorPtr ln2_gain[2], ln2_bias[2];                // [d]
    TensorPtr ffn_w1[2];                               // [d, d_ff]
    TensorPtr ffn_w2[2];                               // [d_ff, d]
    TensorPtr ffn_w1_delta, ffn_w2_delta;              // rep only, zero-init

    std::int64_t head_dim() const { return d / n_heads; }

    // Unique tensors with stable suffix names ("attn.wq.v", "ffn.w1", ...).
    std::vector<std::pair<std::string, TensorPtr>> named_tensors() const;

    // Effective FFN weights for one branch (applies the rep delta in-graph).
    TensorPtr ffn_w1_eff(Modality u) const;
    TensorPtr ffn_w2_eff(Modality u) const;
};

// Randomly initialized block; shared components alias, rep deltas are zero.
BlockParams build_variant(VariantKind kind, std::int64_t d, std::int64_t d_ff,
                          std::int64_t n_heads, std::uint64_t seed);

// Total scalar parameters across the unique tensors of one block.
std::int64_t param_count(const BlockParams& p);

// Multiply-accumulates executed per token for one block at sequence length n:
// QKV/O projections, attention scores and value mixing, and the FFN pair.
// rep is counted with deltas merged into the base weights.
std::uint64_t active_flops_per_token(VariantKind kind, std::int64_t d, std::int64_t d_ff,
                                     std::int64_t n, std::int64_t n_heads);

// Post-rope keys and values of one layer, rows appended in position order.
struct LayerKVCache {
    std::vector<double> k;  // len * d
    std::vector<double> v;  // len * d
    std::int64_t len = 0;
    std::int64_t d = 0;
};

// Joint causal self-attention with per-position branch projections (Eq.-2
// style: one attention map across modalities, branch-specific Q/K/V/O).
TensorPtr attention_forward(const TensorPtr& x, const std::vector<Modality>& ids,
                            const BlockParams& p, LayerKVCache* capture = nullptr);

// Pre-norm residual block: h = x + ATTN(LN1(x)); out = h + FFN(LN2(h)).
TensorPtr block_forward(const TensorPtr& x, const std::vector<Modality>& ids,
                        const BlockParams& p, LayerKVCache* capture = nullptr);

// Single-token decode step against a populated cache; appends to it.
// Bitwise-equivalent to the corresponding row of the full forward.
TensorPtr block_decode_row(const TensorPtr& x_row, Modality u, std::int64_t pos,
                           const BlockParams& p, LayerKVCache& cache);

}  // namespace dacvlm
