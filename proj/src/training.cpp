#include "dacvlm/training.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <json.hpp>

#include "dacvlm/tokenizer.hpp"

namespace dacvlm {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

constexpr double kPi = 3.14159265358979323846;

bool known_stage(const std::string& s) {
    return s == "0" || s == "1" || s == "2.1" || s == "2.2" || s == "3";
}

const std::vector<std::string> kAllGroups = {"patch_embed", "vision_layers", "text_layers",
                                             "word_embed"};

}  // namespace

void StageConfig::validate() const {
    if (!known_stage(stage)) {
        throw ConfigError("stage config: unknown stage id '" + stage + "'");
    }
    if (warmup_ratio <= 0.0 || warmup_ratio >= 1.0) {
        throw ConfigError("stage config: warmup_ratio must be in (0,1)");
    }
    if (peak_lr <= 0.0) throw ConfigError("stage config: peak_lr must be positive");
    if (batch <= 0) throw ConfigError("stage config: batch must be positive");
    if (steps < 0) throw ConfigError("stage config: steps must be non-negative");
    if (mix_synth < 0.0 || mix_text < 0.0 || mix_web < 0.0) {
        throw ConfigError("stage config: mix ratios must be non-negative");
    }
    if (mix_synth + mix_text + mix_web <= 0.0) {
        throw ConfigError("stage config: mix ratios must not all be zero");
    }
    if (image_tokens_start <= 0 || image_tokens_end <= 0) {
        throw ConfigError("stage config: image token caps must be positive");
    }
    for (const auto& g : trainable_groups) {
        if (std::find(kAllGroups.begin(), kAllGroups.end(), g) == kAllGroups.end()) {
            throw ConfigError("stage config: unknown parameter group '" + g + "'");
        }
    }
    if (stage != "0") {
        // trainable_groups empty means "use the schedule default"; a custom
        // set must be non-empty only when explicitly overriding.
        FreezeMask def = freeze_mask_for(stage);
        (void)def;
    } else if (trainable_groups.empty()) {
        throw ConfigError("stage config: stage 0 requires explicit trainable_groups");
    }
}

std::string StageConfig::to_json_string() const {
    json j;
    j["stage"] = stage;
    j["trainable_groups"] = trainable_groups;
    j["peak_lr"] = peak_lr;
    j["warmup_ratio"] = warmup_ratio;
    j["batch"] = batch;
    j["steps"] = steps;
    j["mix"] = {mix_synth, mix_text, mix_web};
    j["image_tokens_start"] = image_tokens_start;
    j["image_tokens_end"] = image_tokens_end;
    return j.dump();
}

StageConfig StageConfig::from_json_string(const std::string& s) {
    json j;
    try {
        j = json::parse(s);
    } catch (const json::exception& e) {
        throw ConfigError(std::string("stage config: invalid JSON: ") + e.what());
    }
    if (!j.contains("stage")) throw ConfigError("stage config: missing field 'stage'");
    StageConfig cfg = defaults_for(j.at("stage").get<std::string>());
    static const std::vector<std::string> kKeys = {
        "stage", "trainable_groups", "peak_lr", "warmup_ratio", "batch",
        "steps", "mix", "image_tokens_start", "image_tokens_end"};
    for (auto it = j.begin(); it != j.end(); ++it) {
        if (std::find(kKeys.begin(), kKeys.end(), it.key()) == kKeys.end()) {
            throw ConfigError("stage config: unknown field '" + it.key() + "'");
        }
    }
    try {
        if (j.contains("trainable_groups")) {
            cfg.trainable_groups = j.at("trainable_groups").get<std::vector<std::string>>();
        }
        if (j.contains("peak_lr")) cfg.peak_lr = j.at("peak_lr").get<double>();
        if (j.contains("warmup_ratio")) cfg.warmup_ratio = j.at("warmup_ratio").get<double>();
        if (j.contains("batch")) cfg.batch = j.at("batch").get<std::int64_t>();
        if (j.contains("steps")) cfg.steps = j.at("steps").get<std::int64_t>();
        if (j.contains("mix")) {
            const auto mix = j.at("mix").get<std::vector<double>>();
            if (mix.size() != 3) throw ConfigError("stage config: field 'mix' needs 3 ratios");
            cfg.mix_synth = mix[0];
            cfg.mix_text = mix[1];
            cfg.mix_web = mix[2];
        }
        if (j.contains("image_tokens_start")) {
            cfg.image_tokens_start = j.at("image_tokens_start").get<std::int64_t>();
        }
        if (j.contains("image_tokens_end")) {
            cfg.image_tokens_end = j.at("image_tokens_end").get<std::int64_t>();
        }
    } catch (const json::exception& e) {
        throw ConfigError(std::string("stage config: bad field type: ") + e.what());
    }
    cfg.validate();
    return cfg;
}

StageConfig StageConfig::defaults_for(const std::string& stage) {
    if (!known_stage(stage) || stage == "0") {
        throw ConfigError("stage config: unknown stage id '" + stage + "'");
    }
    StageConfig cfg;
    cfg.stage = stage;
    if (stage == "1") {
        cfg.peak_lr = 2e-4;
        cfg.steps = 500;
        cfg.image_tokens_start = cfg.image_tokens_end = 625;
        cfg.mix_synth = 8.0;
        cfg.mix_text = 1.0;
        cfg.mix_web = 1.0;
    } else if (stage == "2.1") {
        cfg.peak_lr = 1e-4;
        cfg.steps = 2000;
        cfg.image_tokens_start = 625;
        cfg.image_tokens_end = 2500;
        cfg.mix_synth = 8.0;
        cfg.mix_text = 1.0;
        cfg.mix_web = 1.0;
    } else if (stage == "2.2") {
        cfg.peak_lr = 2e-5;
        cfg.steps = 1000;
        cfg.image_tokens_start = cfg.image_tokens_end = 2500;
        cfg.mix_synth = 8.0;
        cfg.mix_text = 1.0;
        cfg.mix_web = 1.0;
    } else {  // "3"
        cfg.peak_lr = 1e-5;
        cfg.steps = 1000;
        cfg.image_tokens_start = cfg.image_tokens_end = 2500;
        cfg.mix_synth = 9.0;
        cfg.mix_text = 1.0;
        cfg.mix_web = 0.0;
    }
    return cfg;
}

std::vector<StageConfig> StageConfig::pipeline_defaults() {
    return {defaults_for("1"), defaults_for("2.1"), defaults_for("2.2"), defaults_for("3")};
}

FreezeMask freeze_mask_for(const std::string& stage) {
    FreezeMask m;
    if (stage == "1") {
        m.trainable = {"patch_embed"};
    } else if (stage == "2.1") {
        m.trainable = {"patch_embed", "vision_layers"};
    } else if (stage == "2.2" || stage == "3") {
        m.trainable = {kAllGroups.begin(), kAllGroups.end()};
    } else {
        throw ConfigError("freeze_mask_for: unknown stage id '" + stage + "'");
    }
    return m;
}

double lr_at(std::int64_t step, std::int64_t total_steps, const StageConfig& cfg) {
    if (step < 0 || step > total_steps) {
        throw UsageError("lr_at: step " + std::to_string(step) + " outside [0, " +
                         std::to_string(total_steps) + "]");
    }
    if (total_steps == 0) return 0.0;
    const double warm = cfg.warmup_ratio * static_cast<double>(total_steps);
    const double s = static_cast<double>(step);
    if (s < warm) return cfg.peak_lr * s / warm;
    const double t = (s - warm) / (static_cast<double>(total_steps) - warm);
    return cfg.peak_lr * 0.5 * (1.0 + std::cos(kPi * t));
}

std::int64_t image_token_cap_at(const StageConfig& cfg, std::int64_t step) {
    if (cfg.steps <= 1 || cfg.image_tokens_start == cfg.image_tokens_end) {
        return cfg.image_tokens_end;
    }
    const std::int64_t s = std::clamp<std::int64_t>(step, 0, cfg.steps - 1);
    const double frac = static_cast<double>(s) / static_cast<double>(cfg.steps - 1);
    return cfg.image_tokens_start +
           static_cast<std::int64_t>(std::llround(
               frac * static_cast<double>(cfg.image_tokens_end - cfg.image_tokens_start)));
}

MixStream::MixStream(std::vector<std::vector<const Sample*>> sources,
                     std::vector<double> ratios, std::uint64_t seed)
    : sources_(std::move(sources)), rng_(seed) {
    if (sources_.size() != ratios.size()) {
        throw ConfigError("mix_stream: one ratio per source required");
    }
    double total = 0.0;
    for (std::size_t i = 0; i < ratios.size(); ++i) {
        if (ratios[i] < 0.0) throw ConfigError("mix_stream: ratios must be non-negative");
        if (ratios[i] > 0.0 && sources_[i].empty()) {
            throw ConfigError("mix_stream: source " + std::to_string(i) +
                              " is empty but has nonzero ratio");
        }
        total += ratios[i];
    }
    if (total <= 0.0) throw ConfigError("mix_stream: ratios must not all be zero");
    double acc = 0.0;
    for (double r : ratios) {
        acc += r / total;
        cumulative_.push_back(acc);
    }
    cumulative_.back() = 1.0;
    cursor_.assign(sources_.size(), 0);
    // Each source cycles through its own seeded shuffle.
    for (std::size_t i = 0; i < sources_.size(); ++i) {
        Rng r = rng_.fork(1000 + i);
        auto& src = sources_[i];
        for (std::size_t k = src.size(); k > 1; --k) {
            std::swap(src[k - 1], src[r.uniform_int(k)]);
        }
    }
}

const Sample& MixStream::next() {
    const double u = rng_.uniform();
    std::size_t s = 0;
    while (s + 1 < cumulative_.size() && u >= cumulative_[s]) ++s;
    // Skip zero-ratio (possibly empty) sources the draw cannot select.
    while (sources_[s].empty()) ++s;
    last_source_ = s;
    const Sample& out = *sources_[s][cursor_[s]];
    if (++cursor_[s] == sources_[s].size()) {
        cursor_[s] = 0;
        Rng r = rng_.fork(rng_.next_u64());
        auto& src = sources_[s];
        for (std::size_t k = src.size(); k > 1; --k) {
            std::swap(src[k - 1], src[r.uniform_int(k)]);
        }
    }
    return out;
}

AdamW::AdamW(double beta1, double beta2, double eps, double weight_decay)
    : beta1_(beta1), beta2_(beta2), eps_(eps), weight_decay_(weight_decay) {}

void AdamW::step(const std::vector<TensorPtr>& params, double lr) {
    if (m_.empty()) {
        m_.resize(params.size());
        v_.resize(params.size());
        for (std::size_t i = 0; i < params.size(); ++i) {
            m_[i].assign(params[i]->data.size(), 0.0);
            v_[i].assign(params[i]->data.size(), 0.0);
        }
    }
    if (m_.size() != params.size()) {
        throw UsageError("optimizer: parameter set changed between steps");
    }
    ++t_;
    const double bc1 = 1.0 - std::pow(beta1_, static_cast<double>(t_));
    const double bc2 = 1.0 - std::pow(beta2_, static_cast<double>(t_));
    for (std::size_t i = 0; i < params.size(); ++i) {
        Tensor& p = *params[i];
        const bool has_grad = !p.grad.empty();
        for (std::size_t k = 0; k < p.data.size(); ++k) {
            const double g = has_grad ? p.grad[k] : 0.0;
            m_[i][k] = beta1_ * m_[i][k] + (1.0 - beta1_) * g;
            v_[i][k] = beta2_ * v_[i][k] + (1.0 - beta2_) * g * g;
            const double mhat = m_[i][k] / bc1;
            const double vhat = v_[i][k] / bc2;
            if (lr != 0.0) {
                p.data[k] -= lr * (mhat / (std::sqrt(vhat) + eps_) + weight_decay_ * p.data[k]);
            }
        }
    }
}

double clip_grad_norm(const std::vector<TensorPtr>& params, double max_norm) {
    double sq = 0.0;
    for (const auto& p : params) {
        for (double g : p->grad) sq += g * g;
    }
    const double norm = std::sqrt(sq);
    if (norm > max_norm && norm > 0.0) {
        const double scale = max_norm / norm;
        for (const auto& p : params) {
            for (double& g : p->grad) g *= scale;
        }
    }
    return norm;
}

std::string StepMetrics::to_json_line() const {
    json j;
    j["step"] = step;
    j["stage"] = stage;
    j["loss"] = loss;
    j["lr"] = lr;
    j["grad_norm"] = grad_norm;
    if (heldout_ppl >= 0.0) j["heldout_ppl"] = heldout_ppl;
    return j.dump();
}

namespace {

// Largest square grid g with 1 + g*g + g tokens within the cap.
std::int64_t canvas_for_cap(std::int64_t canvas, std::int64_t cap) {
    std::int64_t g = canvas / 32;
    while (g > 1 && 1 + g * g + g > cap) --g;
    return g * 32;
}

struct TextLayout {
    std::vector<std::int64_t> ids;
    std::vector<std::uint8_t> carries_loss;  // per text token
};

TextLayout text_layout(const Sample& s) {
    const auto& tok = Tokenizer::instance();
    TextLayout out;
    out.ids.push_back(Tokenizer::bos_id);
    out.carries_loss.push_back(0);
    for (std::int64_t id : tok.encode(s.prompt)) {
        out.ids.push_back(id);
        out.carries_loss.push_back(0);
    }
    for (std::int64_t id : tok.encode(s.target)) {
        out.ids.push_back(id);
        out.carries_loss.push_back(1);
    }
    out.ids.push_back(Tokenizer::eos_id);
    out.carries_loss.push_back(1);
    return out;
}

}  // namespace

Example build_example(const Sample& sample, const Model& model,
                      std::int64_t image_token_cap) {
    Example ex;
    const TextLayout text = text_layout(sample);
    if (sample.kind == SampleKind::text_only) {
        ex.seq = concat_multimodal(TokenSequence{}, text.ids, model.config.context,
                                   &text.carries_loss);
    } else {
        std::int64_t canvas_h = sample.canvas_h;
        std::int64_t canvas_w = sample.canvas_w;
        if (canvas_h == canvas_w) {
            canvas_h = canvas_w = canvas_for_cap(canvas_h, image_token_cap);
        }
        const ImageInput img = render(sample.scene, canvas_h, canvas_w);
        ex.seq = concat_multimodal(embed_image(img, model.patch), text.ids,
                                   model.config.context, &text.carries_loss);
    }
    const std::int64_t n = ex.seq.length();
    ex.targets.assign(static_cast<std::size_t>(n), 0);
    ex.loss_mask.assign(static_cast<std::size_t>(n), 0);
    for (std::int64_t i = 0; i + 1 < n; ++i) {
        const auto& nxt = ex.seq.entries[static_cast<std::size_t>(i + 1)];
        if (nxt.tag == Modality::text && !nxt.loss_masked) {
            ex.targets[static_cast<std::size_t>(i)] = nxt.text_id;
            ex.loss_mask[static_cast<std::size_t>(i)] = 1;
        }
    }
    return ex;
}

TensorPtr example_loss(const Model& model, const Example& ex) {
    auto logits = model.forward(ex.seq);
    return cross_entropy(logits, ex.targets, ex.loss_mask);
}

double text_perplexity(const Model& model, const std::vector<std::string>& sentences) {
    if (sentences.empty()) throw UsageError("text_perplexity: empty sentence set");
    NoGradGuard ng;
    double total_nll = 0.0;
    std::int64_t total_count = 0;
    for (const auto& s : sentences) {
        Sample sample;
        sample.kind = SampleKind::text_only;
        sample.target = s;
        const Example ex = build_example(sample, model, 1);
        std::int64_t active = 0;
        for (auto m : ex.loss_mask) active += m;
        total_nll += example_loss(model, ex)->item() * static_cast<double>(active);
        total_count += active;
    }
    return std::exp(total_nll / static_cast<double>(total_count));
}

namespace {

std::vector<std::vector<const Sample*>> stage_sources(const Corpus& corpus,
                                                      const std::string& stage) {
    std::vector<const Sample*> synth, text, web;
    for (const auto& s : corpus.samples) {
        switch (s.kind) {
            case SampleKind::text_only:
                text.push_back(&s);
                break;
            case SampleKind::web:
                web.push_back(&s);
                break;
            case SampleKind::caption:
                if (stage == "1" || stage == "2.1" || stage == "2.2") synth.push_back(&s);
                break;
            case SampleKind::qa:
                if (stage == "2.2" || stage == "3") synth.push_back(&s);
                break;
            case SampleKind::instruction:
                // Stage 3 consolidates on the bare-question format only.
                if (stage == "2.2") synth.push_back(&s);
                break;
        }
    }
    return {std::move(synth), std::move(text), std::move(web)};
}

}  // namespace

std::vector<StepMetrics> run_stage(Model& model, const StageConfig& cfg, const Corpus& corpus,
                                   const RunStageOptions& opt) {
    cfg.validate();
    FreezeMask mask;
    if (!cfg.trainable_groups.empty()) {
        mask.trainable = {cfg.trainable_groups.begin(), cfg.trainable_groups.end()};
    } else {
        mask = freeze_mask_for(cfg.stage);
    }

    const auto named = model.named_params();
    std::vector<TensorPtr> all_params, trainable;
    for (const auto& [name, t] : named) {
        all_params.push_back(t);
        if (mask.is_trainable_param(name)) trainable.push_back(t);
    }
    if (trainable.empty()) throw ConfigError("run_stage: no trainable parameters");

    MixStream stream(stage_sources(corpus, cfg.stage),
                     {cfg.mix_synth, cfg.mix_text, cfg.mix_web},
                     Rng(opt.seed).fork(17).next_u64());
    AdamW adam;
    std::ofstream metrics_out;
    if (!opt.metrics_path.empty()) {
        metrics_out.open(opt.metrics_path, std::ios::app);
        if (!metrics_out) throw IoError("run_stage: cannot open " + opt.metrics_path);
    }

    std::vector<StepMetrics> log;
    for (std::int64_t step = 0; step < cfg.steps; ++step) {
        for (const auto& p : all_params) p->zero_grad();
        const std::int64_t cap = image_token_cap_at(cfg, step);
        double loss_sum = 0.0;
        for (std::int64_t b = 0; b < cfg.batch; ++b) {
            const Sample& s = stream.next();
            const Example ex = build_example(s, model, cap);
            auto loss = example_loss(model, ex);
            const double lv = loss->item();
            if (!std::isfinite(lv)) {
                if (!opt.last_good_ckpt_path.empty()) {
                    save_checkpoint(model, opt.last_good_ckpt_path);
                }
                throw TrainingError("non-finite loss", step);
            }
            loss_sum += lv;
            backward(scale(loss, 1.0 / static_cast<double>(cfg.batch)));
        }
        const double grad_norm = clip_grad_norm(trainable, 1.0);
        const double lr = lr_at(step, cfg.steps, cfg);
        adam.step(trainable, lr);

        StepMetrics m;
        m.step = step;
        m.stage = cfg.stage;
        m.loss = loss_sum / static_cast<double>(cfg.batch);
        m.lr = lr;
        m.grad_norm = grad_norm;
        const bool probe = opt.ppl_probe_every > 0 && !opt.heldout_text.empty() &&
                           (step % opt.ppl_probe_every == opt.ppl_probe_every - 1 ||
                            step == cfg.steps - 1);
        if (probe) m.heldout_ppl = text_perplexity(model, opt.heldout_text);
        if (metrics_out.is_open()) metrics_out << m.to_json_line() << "\n";
        log.push_back(std::move(m));
    }
    model.provenance.stage = cfg.stage;
    model.provenance.step = cfg.steps;
    model.provenance.seed = opt.seed;
    return log;
}

PipelineResult run_pipeline(const Model& base, VariantKind variant,
                            const std::vector<StageConfig>& stages, const Corpus& corpus,
                            const std::vector<std::string>& heldout_text, std::uint64_t seed,
                            const std::string& out_dir) {
    PipelineResult result{init_vlm_from_base(base, variant), {}, {}};
    std::string metrics_path;
    if (!out_dir.empty()) {
        std::error_code ec;
        fs::create_directories(fs::path(out_dir) / "checkpoints", ec);
        fs::create_directories(fs::path(out_dir) / "metrics", ec);
        if (ec) throw IoError("run_pipeline: cannot create " + out_dir);
        metrics_path = (fs::path(out_dir) / "metrics" / "train.jsonl").string();
        std::ofstream(metrics_path, std::ios::trunc);
    }
    Rng seeds(seed);
    for (const auto& cfg : stages) {
        RunStageOptions opt;
        opt.seed = seeds.fork(std::hash<std::string>{}(cfg.stage)).next_u64();
        opt.heldout_text = heldout_text;
        opt.metrics_path = metrics_path;
        if (!out_dir.empty()) {
            opt.last_good_ckpt_path =
                (fs::path(out_dir) / "checkpoints" / ("last_good_stage_" + cfg.stage + ".ckpt"))
                    .string();
        }
        auto stage_log = run_stage(result.model, cfg, corpus, opt);
        result.metrics.insert(result.metrics.end(), stage_log.begin(), stage_log.end());
        if (!out_dir.empty()) {
            const std::string path =
                (fs::path(out_dir) / "checkpoints" / ("stage_" + cfg.stage + ".ckpt")).string();
            save_checkpoint(result.model, path);
            result.checkpoint_paths.push_back(path);
        }
    }
    return result;
}

Model pretrain_base_lm(const ModelConfig& cfg, const std::vector<std::string>& corpus,
                       std::int64_t steps, std::int64_t batch, double peak_lr,
                       std::uint64_t seed, std::vector<StepMetrics>* log) {
    if (cfg.variant != VariantKind::dense) {
        throw ConfigError("pretrain_base_lm: base LM must be the dense variant");
    }
    if (corpus.empty()) throw ConfigError("pretrain_base_lm: empty text corpus");
    Model model = Model::init(cfg, seed);

    // Every tenth sentence is held out for the perplexity record.
    Corpus train;
    std::vector<std::string> heldout;
    for (std::size_t i = 0; i < corpus.size(); ++i) {
        if (i % 10 == 9) {
            heldout.push_back(corpus[i]);
        } else {
            Sample s;
            s.kind = SampleKind::text_only;
            s.target = corpus[i];
            train.samples.push_back(std::move(s));
        }
    }
    if (train.samples.empty() || heldout.empty()) {
        Sample s;
        s.kind = SampleKind::text_only;
        s.target = corpus[0];
        if (train.samples.empty()) train.samples.push_back(s);
        if (heldout.empty()) heldout.push_back(corpus[0]);
    }

    StageConfig stage;
    stage.stage = "0";
    stage.trainable_groups = kAllGroups;
    stage.peak_lr = peak_lr;
    stage.batch = batch;
    stage.steps = steps;
    stage.mix_synth = 0.0;
    stage.mix_text = 1.0;
    stage.mix_web = 0.0;

    RunStageOptions opt;
    opt.seed = seed;
    opt.heldout_text = heldout;
    auto stage_log = run_stage(model, stage, train, opt);
    if (log) *log = stage_log;

    model.provenance.stage = "pretrain";
    model.provenance.step = steps;
    model.provenance.seed = seed;
    model.provenance.heldout_ppl = text_perplexity(model, heldout);
    return model;
}

}  // namespace dacvlm
