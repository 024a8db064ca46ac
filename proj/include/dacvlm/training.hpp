#pragma once

#include <cstdint>
#include <string>
#include <unordered_set>
#include <vector>

#include "dacvlm/model.hpp"
#include "dacvlm/synth.hpp"

namespace dacvlm {

// One stage of the four-stage schedule. The image-token cap ramps linearly
// from image_tokens_start to image_tokens_end across the stage.
struct StageConfig {
    std::string stage = "1";  // 1 | 2.1 | 2.2 | 3
    std::vector<std::string> trainable_groups;
    double peak_lr = 2e-4;
    double warmup_ratio = 0.03;
    std::int64_t batch = 16;
    std::int64_t steps = 500;
    double mix_synth = 8.0;  // x : synthesized multimodal
    double mix_text = 1.0;   // y : language-only
    double mix_web = 1.0;    // z : web-style
    std::int64_t image_tokens_start = 625;
    std::int64_t image_tokens_end = 625;

    void validate() const;
    std::string to_json_string() const;
    static StageConfig from_json_string(const std::string& s);

    // Schedule defaults: trainable groups, peak LR {2e-4, 1e-4, 2e-5, 1e-5},
    // image-token caps 625 / 625->2500 / 2500 / 2500.
    static StageConfig defaults_for(const std::string& stage);
    static std::vector<StageConfig> pipeline_defaults();
};

// Trainable-group set; everything outside it is frozen for the stage.
struct FreezeMask {
    std::unordered_set<std::string> trainable;

    bool is_trainable_group(const std::string& group) const {
        return trainable.count(group) > 0;
    }
    bool is_trainable_param(const std::string& param_name) const {
        return is_trainable_group(Model::group_of(param_name));
    }
};

FreezeMask freeze_mask_for(const std::string& stage);

// Linear warmup 0 -> peak over warmup_ratio * total, then cosine peak -> 0.
double lr_at(std::int64_t step, std::int64_t total_steps, const StageConfig& cfg);

std::int64_t image_token_cap_at(const StageConfig& cfg, std::int64_t step);

// Seeded interleaving of up to three sources with empirical proportions
// converging to mix_synth : mix_text : mix_web. Each source cycles through
// a seeded shuffle.
class MixStream {
  public:
    MixStream(std::vector<std::vector<const Sample*>> sources, std::vector<double> ratios,
              std::uint64_t seed);

    const Sample& next();
    std::size_t last_source() const { return last_source_; }

  private:
    std::vector<std::vector<const Sample*>> sources_;
    std::vector<double> cumulative_;
    std::vector<std::size_t> cursor_;
    Rng rng_;
    std::size_t last_source_ = 0;
};

// Adaptive-moment optimizer (decoupled weight decay form); moments are
// created per parameter and live for one stage.
class AdamW {
  public:
    explicit AdamW(double beta1 = 0.9, double beta2 = 0.999, double eps = 1e-8,
                   double weight_decay = 0.0);

    // Updates each tensor in place from its .grad; grads must already carry
    // any batch scaling. lr == 0 leaves parameters bitwise unchanged.
    void step(const std::vector<TensorPtr>& params, double lr);

  private:
    double beta1_, beta2_, eps_, weight_decay_;
    std::int64_t t_ = 0;
    std::vector<std::vector<double>> m_, v_;
};

// Clips in-place to global norm <= max_norm; returns the pre-clip norm.
double clip_grad_norm(const std::vector<TensorPtr>& params, double max_norm);

struct StepMetrics {
    std::int64_t step = 0;
    std::string stage;
    double loss = 0.0;
    double lr = 0.0;
    double grad_norm = 0.0;
    double heldout_ppl = -1.0;  // < 0: probe not run this step

    std::string to_json_line() const;
};

// Teacher-forced example: interleaved sequence plus shifted next-token
// targets (position i predicts position i+1; loss only on answer text).
struct Example {
    TokenSequence seq;
    std::vector<std::int64_t> targets;
    std::vector<std::uint8_t> loss_mask;
};

// Prompt tokens are context-only; target tokens and the closing EOS carry
// the loss. image_token_cap shrinks the render canvas when needed.
Example build_example(const Sample& sample, const Model& model,
                      std::int64_t image_token_cap);

TensorPtr example_loss(const Model& model, const Example& ex);

// exp(mean next-token NLL) over [BOS, sentence, EOS] sequences.
double text_perplexity(const Model& model, const std::vector<std::string>& sentences);

struct RunStageOptions {
    std::uint64_t seed = 0;
    std::int64_t ppl_probe_every = 100;  // 0 disables the probe
    std::vector<std::string> heldout_text;
    std::string metrics_path;         // optional JSONL sink
    std::string last_good_ckpt_path;  // written before a NaN abort
};

// Mutates model in place; returns one metrics row per step. Frozen groups
// are bitwise invariant. NaN loss aborts with the step index after saving
// the last good checkpoint.
std::vector<StepMetrics> run_stage(Model& model, const StageConfig& cfg,
                                   const Corpus& corpus, const RunStageOptions& opt);

struct PipelineResult {
    Model model;
    std::vector<StepMetrics> metrics;             // all stages concatenated
    std::vector<std::string> checkpoint_paths;    // one per stage if out_dir set
};

// Stages run in order; each consumes the previous stage's weights. out_dir
// (optional) receives checkpoints/stage_<id>.ckpt and metrics/train.jsonl.
PipelineResult run_pipeline(const Model& base, VariantKind variant,
                            const std::vector<StageConfig>& stages, const Corpus& corpus,
                            const std::vector<std::string>& heldout_text,
                            std::uint64_t seed, const std::string& out_dir = "");

// Text-only pretraining of the dense backbone; records held-out perplexity
// in the provenance. Zero steps returns the seeded initialization.
Model pretrain_base_lm(const ModelConfig& cfg, const std::vector<std::string>& corpus,
                       std::int64_t steps, std::int64_t batch, double peak_lr,
                       std::uint64_t seed, std::vector<StepMetrics>* log = nullptr);

}  // namespace dacvlm
