#include "dacvlm/block.hpp"

#include <cmath>
#include <cstring>
#include <unordered_set>

namespace dacvlm {

VariantKind variant_from_string(const std::string& name) {
    if (name == "dense") return VariantKind::dense;
    if (name == "rep") return VariantKind::rep;
    if (name == "moe_ffn") return VariantKind::moe_ffn;
    if (name == "ln_only") return VariantKind::ln_only;
    if (name == "dac") return VariantKind::dac;
    throw ConfigError("unknown variant '" + name + "'");
}

std::string variant_to_string(VariantKind kind) {
    switch (kind) {
        case VariantKind::dense: return "dense";
        case VariantKind::rep: return "rep";
        case VariantKind::moe_ffn: return "moe_ffn";
        case VariantKind::ln_only: return "ln_only";
        case VariantKind::dac: return "dac";
    }
    throw ConfigError("invalid variant kind");
}

RoutePlan route(const std::vector<Modality>& ids) {
    RoutePlan plan;
    for (std::size_t i = 0; i < ids.size(); ++i) {
        plan.idx[static_cast<int>(ids[i])].push_back(static_cast<std::int64_t>(i));
    }
    return plan;
}

TensorPtr BlockParams::ffn_w1_eff(Modality u) const {
    if (kind == VariantKind::rep && u == Modality::vision) {
        return add(ffn_w1[0], ffn_w1_delta);
    }
    return ffn_w1[static_cast<int>(u)];
}

TensorPtr BlockParams::ffn_w2_eff(Modality u) const {
    if (kind == VariantKind::rep && u == Modality::vision) {
        return add(ffn_w2[0], ffn_w2_delta);
    }
    return ffn_w2[static_cast<int>(u)];
}

std::vector<std::pair<std::string, TensorPtr>> BlockParams::named_tensors() const {
    std::vector<std::pair<std::string, TensorPtr>> out;
    std::unordered_set<const Tensor*> seen;
    auto emit = [&](const std::string& base, const TensorPtr t[2]) {
        if (t[0] == t[1]) {
            out.emplace_back(base, t[0]);
        } else {
            out.emplace_back(base + ".v", t[0]);
            out.emplace_back(base + ".t", t[1]);
        }
    };
    emit("attn.wq", wq);
    emit("attn.wk", wk);
    emit("attn.wv", wv);
    emit("attn.wo", wo);
    emit("ln1.gain", ln1_gain);
    emit("ln1.bias", ln1_bias);
    emit("ln2.gain", ln2_gain);
    emit("ln2.bias", ln2_bias);
    emit("ffn.w1", ffn_w1);
    emit("ffn.w2", ffn_w2);
    if (ffn_w1_delta) out.emplace_back("ffn.w1.delta", ffn_w1_delta);
    if (ffn_w2_delta) out.emplace_back("ffn.w2.delta", ffn_w2_delta);
    return out;
}

BlockParams build_variant(VariantKind kind, std::int64_t d, std::int64_t d_ff,
                          std::int64_t n_heads, std::uint64_t seed) {
    if (d <= 0 || d_ff <= 0 || n_heads <= 0 || d % n_heads != 0) {
        throw ConfigError("build_variant: need d > 0 divisible by n_heads, got d=" +
                          std::to_string(d) + " n_heads=" + std::to_string(n_heads));
    }
    if ((d / n_heads) % 2 != 0) {
        throw ConfigError("build_variant: head dim must be even for rotary embedding");
    }
    Rng rng(seed);
    BlockParams p;
    p.kind = kind;
    p.d = d;
    p.d_ff = d_ff;
    p.n_heads = n_heads;

    const double w_std = 0.02;
    auto mat = [&](std::int64_t r, std::int64_t c) { return Tensor::randn({r, c}, rng, w_std, true); };
    auto gain = [&]() { return Tensor::full({d}, 1.0, true); };
    auto bias = [&]() { return Tensor::zeros({d}, true); };

    const bool split_attn = kind == VariantKind::dac;
    const bool split_ln = kind == VariantKind::dac || kind == VariantKind::ln_only;
    const bool split_ffn = kind == VariantKind::dac || kind == VariantKind::moe_ffn;

    auto fill = [&](TensorPtr t[2], auto make, bool split) {
        t[0] = make();
        t[1] = split ? make() : t[0];
    };
    fill(p.wq, [&] { return mat(d, d); }, split_attn);
    fill(p.wk, [&] { return mat(d, d); }, split_attn);
    fill(p.wv, [&] { return mat(d, d); }, split_attn);
    fill(p.wo, [&] { return mat(d, d); }, split_attn);
    fill(p.ln1_gain, gain, split_ln);
    fill(p.ln1_bias, bias, split_ln);
    fill(p.ln2_gain, gain, split_ln);
    fill(p.ln2_bias, bias, split_ln);
    fill(p.ffn_w1, [&] { return mat(d, d_ff); }, split_ffn);
    fill(p.ffn_w2, [&] { return mat(d_ff, d); }, split_ffn);
    if (kind == VariantKind::rep) {
        p.ffn_w1_delta = Tensor::zeros({d, d_ff}, true);
        p.ffn_w2_delta = Tensor::zeros({d_ff, d}, true);
    }
    return p;
}

std::int64_t param_count(const BlockParams& p) {
    std::int64_t total = 0;
    for (const auto& [name, t] : p.named_tensors()) total += t->size();
    return total;
}

std::uint64_t active_flops_per_token(VariantKind kind, std::int64_t d, std::int64_t d_ff,
                                     std::int64_t n, std::int64_t n_heads) {
    (void)kind;     // routing never changes the executed MACs per token
    (void)n_heads;  // heads partition d; the product is unchanged
    const std::uint64_t proj = 4ULL * d * d;
    const std::uint64_t attn = 2ULL * n * d;
    const std::uint64_t ffn = 2ULL * d * d_ff;
    return proj + attn + ffn;
}

namespace {

// Applies fn per modality branch on gathered rows and scatters results back.
template <typename Fn>
TensorPtr routed_apply(const TensorPtr& x, const RoutePlan& plan, std::int64_t n, Fn&& fn) {
    std::vector<TensorPtr> groups;
    std::vector<std::vector<std::int64_t>> rows;
    for (int u = 0; u < 2; ++u) {
        if (plan.idx[u].empty()) continue;
        groups.push_back(fn(row_gather(x, plan.idx[u]), static_cast<Modality>(u)));
        rows.push_back(plan.idx[u]);
    }
    return row_scatter_merge(groups, rows, n);
}

}  // namespace

TensorPtr attention_forward(const TensorPtr& x, const std::vector<Modality>& ids,
                            const BlockParams& p, LayerKVCache* capture) {
    const std::int64_t n = x->shape[0];
    if (static_cast<std::int64_t>(ids.size()) != n) {
        throw DimensionError("attention_forward: ids length " + std::to_string(ids.size()) +
                             " != sequence length " + std::to_string(n));
    }
    const auto plan = route(ids);
    auto project = [&](const TensorPtr w[2]) {
        return routed_apply(x, plan, n,
                            [&](const TensorPtr& rows, Modality u) {
                                return matmul(rows, w[static_cast<int>(u)]);
                            });
    };
    auto q = project(p.wq);
    auto k = project(p.wk);
    auto v = project(p.wv);

    const std::int64_t dk = p.head_dim();
    const double inv_sqrt_dk = 1.0 / std::sqrt(static_cast<double>(dk));
    std::vector<TensorPtr> head_outs, k_roped_heads;
    head_outs.reserve(static_cast<std::size_t>(p.n_heads));
    for (std::int64_t h = 0; h < p.n_heads; ++h) {
        auto qh = rope(col_slice(q, h * dk, dk), 0);
        auto kh = rope(col_slice(k, h * dk, dk), 0);
        auto vh = col_slice(v, h * dk, dk);
        auto scores = scale(matmul_nt(qh, kh), inv_sqrt_dk);
        auto attn = softmax_lastdim(causal_mask_add(scores));
        head_outs.push_back(causal_attn_mix(attn, vh, 0));
        if (capture) k_roped_heads.push_back(kh);
    }
    auto mixed = col_concat(head_outs);
    if (capture) {
        auto k_roped = col_concat(k_roped_heads);
        capture->d = p.d;
        capture->len = n;
        capture->k = k_roped->data;
        capture->v = v->data;
    }
    return routed_apply(mixed, plan, n, [&](const TensorPtr& rows, Modality u) {
        return matmul(rows, p.wo[static_cast<int>(u)]);
    });
}

TensorPtr block_forward(const TensorPtr& x, const std::vector<Modality>& ids,
                        const BlockParams& p, LayerKVCache* capture) {
    const std::int64_t n = x->shape[0];
    const auto plan = route(ids);
    auto normed1 = routed_apply(x, plan, n, [&](const TensorPtr& rows, Modality u) {
        const int ui = static_cast<int>(u);
        return layer_norm(rows, p.ln1_gain[ui], p.ln1_bias[ui], p.ln_eps);
    });
    auto h = add(x, attention_forward(normed1, ids, p, capture));
    auto normed2 = routed_apply(h, plan, n, [&](const TensorPtr& rows, Modality u) {
        const int ui = static_cast<int>(u);
        return layer_norm(rows, p.ln2_gain[ui], p.ln2_bias[ui], p.ln_eps);
    });
    auto ffn_out = routed_apply(normed2, plan, n, [&](const TensorPtr& rows, Modality u) {
        return matmul(gelu(matmul(rows, p.ffn_w1_eff(u))), p.ffn_w2_eff(u));
    });
    return add(h, ffn_out);
}

TensorPtr block_decode_row(const TensorPtr& x_row, Modality u, std::int64_t pos,
                           const BlockParams& p, LayerKVCache& cache) {
    const int ui = static_cast<int>(u);
    auto n1 = layer_norm(x_row, p.ln1_gain[ui], p.ln1_bias[ui], p.ln_eps);
    auto q = matmul(n1, p.wq[ui]);
    auto k = matmul(n1, p.wk[ui]);
    auto v = matmul(n1, p.wv[ui]);

    const std::int64_t dk = p.head_dim();
    const double inv_sqrt_dk = 1.0 / std::sqrt(static_cast<double>(dk));
    std::vector<TensorPtr> q_heads, k_heads;
    for (std::int64_t h = 0; h < p.n_heads; ++h) {
        q_heads.push_back(rope(col_slice(q, h * dk, dk), pos));
        k_heads.push_back(rope(col_slice(k, h * dk, dk), pos));
    }
    auto k_roped = col_concat(k_heads);
    cache.d = p.d;
    cache.k.insert(cache.k.end(), k_roped->data.begin(), k_roped->data.end());
    cache.v.insert(cache.v.end(), v->data.begin(), v->data.end());
    cache.len += 1;

    const std::int64_t len = cache.len;
    std::vector<TensorPtr> head_outs;
    for (std::int64_t h = 0; h < p.n_heads; ++h) {
        auto kh = Tensor::create({len, dk});
        auto vh = Tensor::create({len, dk});
        for (std::int64_t j = 0; j < len; ++j) {
            std::memcpy(kh->data.data() + j * dk, cache.k.data() + j * p.d + h * dk,
                        static_cast<std::size_t>(dk) * sizeof(double));
            std::memcpy(vh->data.data() + j * dk, cache.v.data() + j * p.d + h * dk,
                        static_cast<std::size_t>(dk) * sizeof(double));
        }
        auto scores = scale(matmul_nt(q_heads[static_cast<std::size_t>(h)], kh), inv_sqrt_dk);
        auto attn = softmax_lastdim(scores);
        head_outs.push_back(causal_attn_mix(attn, vh, len - 1));
    }
    auto mixed = col_concat(head_outs);
    auto h_res = add(x_row, matmul(mixed, p.wo[ui]));
    auto n2 = layer_norm(h_res, p.ln2_gain[ui], p.ln2_bias[ui], p.ln_eps);
    auto ffn_out = matmul(gelu(matmul(n2, p.ffn_w1_eff(u))), p.ffn_w2_eff(u));
    return add(h_res, ffn_out);
}

}  // namespace dacvlm
