#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "dacvlm/model.hpp"
#include "dacvlm/synth.hpp"
#include "dacvlm/training.hpp"

namespace dacvlm {

enum class DriftGrouping { layer_type, layer_index };

DriftGrouping drift_grouping_from_string(const std::string& s);
std::string drift_grouping_to_string(DriftGrouping g);

struct DriftRow {
    std::string group;        // attention|norm|ffn|embedding, or layer index
    double mean_abs = 0.0;    // per-scalar mean of |after - before|
    std::int64_t count = 0;   // scalars in the group
};

struct DriftReport {
    DriftGrouping grouping = DriftGrouping::layer_type;
    std::string before_id, after_id;
    std::vector<DriftRow> rows;  // groups partition all compared scalars

    const DriftRow& row(const std::string& group) const;
    // CSV with a documented header; JSONL mirror carries identical fields.
    void write_csv(const std::string& path) const;
    void write_jsonl(const std::string& path) const;
};

// Mean |after - before| per group. Tensors match by exact name; when a
// sparse model is compared against a dense base, its text branch matches
// by dropping a trailing ".t" and vision-only tensors are excluded.
DriftReport weight_drift(const Model& before, const Model& after, DriftGrouping grouping);

struct KindScore {
    std::int64_t n = 0;
    std::int64_t correct = 0;
    double accuracy() const { return n ? static_cast<double>(correct) / n : 0.0; }
};

struct EvalReport {
    std::map<std::string, KindScore> by_kind;  // exact-match over decoded answers
    double text_ppl = -1.0;                    // < 0: no text_only samples evaluated
    std::int64_t total = 0;

    void write_csv(const std::string& path) const;
    void write_jsonl(const std::string& path) const;
};

// Greedy-decodes each image-bearing sample's prompt and scores exact string
// match against the target; text_only samples contribute perplexity.
EvalReport eval_model(const Model& model, const Corpus& corpus,
                      const std::vector<std::string>& kinds = {});

struct VariantRun {
    std::string variant;
    std::vector<StepMetrics> curve;
    EvalReport eval;
    DriftReport drift_by_type;
};

struct ComparisonReport {
    std::vector<VariantRun> runs;

    // One CSV/JSONL row per (variant, metric).
    void write_csv(const std::string& path) const;
    void write_jsonl(const std::string& path) const;
};

// Same base weights, data, steps, and seed for every variant.
ComparisonReport compare_variants(const Model& base, const std::vector<VariantKind>& variants,
                                  const StageConfig& stage, const Corpus& train,
                                  const Corpus& eval_corpus, std::uint64_t seed);

// Stack-level multiply count for one forward token, for parity checks
// against the per-block closed form.
std::int64_t model_active_flops_per_token(const ModelConfig& cfg, std::int64_t seq_len);

}  // namespace dacvlm
