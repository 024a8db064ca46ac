#include "dacvlm/analysis.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <json.hpp>
#include <map>
#include <sstream>

#include "dacvlm/tokenizer.hpp"

namespace dacvlm {

using nlohmann::json;

DriftGrouping drift_grouping_from_string(const std::string& s) {
    if (s == "layer_type") return DriftGrouping::layer_type;
    if (s == "layer_index") return DriftGrouping::layer_index;
    throw ConfigError("unknown drift grouping '" + s + "'");
}

std::string drift_grouping_to_string(DriftGrouping g) {
    return g == DriftGrouping::layer_type ? "layer_type" : "layer_index";
}

namespace {

std::string layer_type_of(const std::string& name) {
    if (name.find(".attn.") != std::string::npos) return "attention";
    if (name.find(".ln1.") != std::string::npos || name.find(".ln2.") != std::string::npos ||
        name.rfind("final_ln.", 0) == 0) {
        return "norm";
    }
    if (name.find(".ffn.") != std::string::npos) return "ffn";
    return "embedding";  // patch_embed.*, word_embed
}

std::string layer_index_of(const std::string& name) {
    if (name.rfind("layers.", 0) == 0) {
        const std::size_t dot = name.find('.', 7);
        return name.substr(7, dot - 7);
    }
    return "non_layer";
}

bool ends_with(const std::string& s, const std::string& suffix) {
    return s.size() >= suffix.size() &&
           s.compare(s.size() - suffix.size(), suffix.size(), suffix) == 0;
}

}  // namespace

const DriftRow& DriftReport::row(const std::string& group) const {
    for (const auto& r : rows) {
        if (r.group == group) return r;
    }
    throw UsageError("drift report: no group '" + group + "'");
}

void DriftReport::write_csv(const std::string& path) const {
    std::ofstream out(path);
    if (!out) throw IoError("drift report: cannot open " + path);
    out << "# mean_abs_delta is the per-scalar mean of |after - before| within the group\n";
    out << "grouping,group,mean_abs_delta,param_count\n";
    for (const auto& r : rows) {
        out << drift_grouping_to_string(grouping) << "," << r.group << ","
            << std::scientific << r.mean_abs << "," << r.count << "\n";
    }
    if (!out) throw IoError("drift report: short write to " + path);
}

void DriftReport::write_jsonl(const std::string& path) const {
    std::ofstream out(path);
    if (!out) throw IoError("drift report: cannot open " + path);
    for (const auto& r : rows) {
        json j;
        j["grouping"] = drift_grouping_to_string(grouping);
        j["group"] = r.group;
        j["mean_abs_delta"] = r.mean_abs;
        j["param_count"] = r.count;
        out << j.dump() << "\n";
    }
}

DriftReport weight_drift(const Model& before, const Model& after, DriftGrouping grouping) {
    const auto before_named = before.named_params();
    const auto after_named = after.named_params();
    std::map<std::string, TensorPtr> before_map;
    for (const auto& [name, t] : before_named) before_map[name] = t;

    // (name used for grouping, before tensor, after tensor)
    std::vector<std::tuple<std::string, TensorPtr, TensorPtr>> pairs;
    std::vector<std::string> offenders;
    const bool cross_variant = before.config.variant != after.config.variant;
    for (const auto& [name, t] : after_named) {
        auto it = before_map.find(name);
        std::string key = name;
        if (it == before_map.end() && cross_variant && ends_with(name, ".t")) {
            key = name.substr(0, name.size() - 2);
            it = before_map.find(key);
        }
        if (it == before_map.end()) {
            if (cross_variant && (ends_with(name, ".v") || ends_with(name, ".delta"))) {
                continue;  // vision-only tensor, no base counterpart
            }
            offenders.push_back(name + " (missing in before)");
            continue;
        }
        if (it->second->shape != t->shape) {
            offenders.push_back(name + " (shape " + shape_str(it->second->shape) + " vs " +
                                shape_str(t->shape) + ")");
            continue;
        }
        pairs.emplace_back(key, it->second, t);
    }
    if (!offenders.empty()) {
        std::string msg = "weight_drift: tensor mismatch:";
        for (const auto& o : offenders) msg += " " + o;
        throw ConfigError(msg);
    }

    std::map<std::string, std::pair<double, std::int64_t>> acc;  // group -> (sum, count)
    for (const auto& [name, b, a] : pairs) {
        const std::string group = grouping == DriftGrouping::layer_type
                                      ? layer_type_of(name)
                                      : layer_index_of(name);
        auto& slot = acc[group];
        for (std::size_t i = 0; i < a->data.size(); ++i) {
            slot.first += std::fabs(a->data[i] - b->data[i]);
        }
        slot.second += static_cast<std::int64_t>(a->data.size());
    }

    DriftReport report;
    report.grouping = grouping;
    report.before_id = before.provenance.stage;
    report.after_id = after.provenance.stage;
    for (const auto& [group, sc] : acc) {
        report.rows.push_back({group, sc.first / static_cast<double>(sc.second), sc.second});
    }
    return report;
}

void EvalReport::write_csv(const std::string& path) const {
    std::ofstream out(path);
    if (!out) throw IoError("eval report: cannot open " + path);
    out << "kind,n,correct,accuracy\n";
    for (const auto& [kind, score] : by_kind) {
        out << kind << "," << score.n << "," << score.correct << "," << score.accuracy()
            << "\n";
    }
    if (text_ppl >= 0.0) out << "text_ppl,,," << text_ppl << "\n";
}

void EvalReport::write_jsonl(const std::string& path) const {
    std::ofstream out(path);
    if (!out) throw IoError("eval report: cannot open " + path);
    for (const auto& [kind, score] : by_kind) {
        json j;
        j["kind"] = kind;
        j["n"] = score.n;
        j["correct"] = score.correct;
        j["accuracy"] = score.accuracy();
        out << j.dump() << "\n";
    }
    if (text_ppl >= 0.0) {
        json j;
        j["kind"] = "text_ppl";
        j["value"] = text_ppl;
        out << j.dump() << "\n";
    }
}

std::string decode_answer(const Model& model, const Sample& sample, std::int64_t max_new) {
    const auto& tok = Tokenizer::instance();
    std::vector<std::int64_t> prefix;
    prefix.push_back(Tokenizer::bos_id);
    for (std::int64_t id : tok.encode(sample.prompt)) prefix.push_back(id);

    TokenSequence img_seq;
    if (sample.kind != SampleKind::text_only) {
        img_seq = embed_image(render(sample.scene, sample.canvas_h, sample.canvas_w),
                              model.patch);
    }
    const TokenSequence seq =
        concat_multimodal(img_seq, prefix, model.config.context, nullptr);
    const auto ids = model.generate(seq, max_new);
    return tok.decode(ids);
}

EvalReport eval_model(const Model& model, const Corpus& corpus,
                      const std::vector<std::string>& kinds) {
    if (corpus.samples.empty()) throw UsageError("eval_model: empty corpus");
    EvalReport report;
    std::vector<std::string> text_sentences;
    for (const auto& s : corpus.samples) {
        const std::string kind = sample_kind_to_string(s.kind);
        if (!kinds.empty() && std::find(kinds.begin(), kinds.end(), kind) == kinds.end()) {
            continue;
        }
        ++report.total;
        if (s.kind == SampleKind::text_only) {
            text_sentences.push_back(s.target);
            continue;
        }
        const std::int64_t budget =
            static_cast<std::int64_t>(Tokenizer::instance().encode(s.target).size()) + 8;
        auto& score = report.by_kind[kind];
        ++score.n;
        if (decode_answer(model, s, budget) == s.target) ++score.correct;
    }
    if (!text_sentences.empty()) {
        report.text_ppl = text_perplexity(model, text_sentences);
        report.by_kind["text_only"].n = static_cast<std::int64_t>(text_sentences.size());
    }
    return report;
}

void ComparisonReport::write_csv(const std::string& path) const {
    std::ofstream out(path);
    if (!out) throw IoError("comparison report: cannot open " + path);
    out << "variant,metric,value\n";
    for (const auto& run : runs) {
        if (!run.curve.empty()) {
            out << run.variant << ",final_loss," << run.curve.back().loss << "\n";
        }
        for (const auto& [kind, score] : run.eval.by_kind) {
            out << run.variant << ",accuracy_" << kind << "," << score.accuracy() << "\n";
        }
        if (run.eval.text_ppl >= 0.0) {
            out << run.variant << ",text_ppl," << run.eval.text_ppl << "\n";
        }
        for (const auto& r : run.drift_by_type.rows) {
            out << run.variant << ",drift_" << r.group << "," << std::scientific
                << r.mean_abs << "\n";
        }
    }
}

void ComparisonReport::write_jsonl(const std::string& path) const {
    std::ofstream out(path);
    if (!out) throw IoError("comparison report: cannot open " + path);
    for (const auto& run : runs) {
        json j;
        j["variant"] = run.variant;
        json curve = json::array();
        for (const auto& m : run.curve) curve.push_back({{"step", m.step}, {"loss", m.loss}});
        j["curve"] = curve;
        json eval;
        for (const auto& [kind, score] : run.eval.by_kind) {
            eval[kind] = {{"n", score.n}, {"correct", score.correct},
                          {"accuracy", score.accuracy()}};
        }
        if (run.eval.text_ppl >= 0.0) eval["text_ppl"] = run.eval.text_ppl;
        j["eval"] = eval;
        json drift;
        for (const auto& r : run.drift_by_type.rows) drift[r.group] = r.mean_abs;
        j["drift_by_type"] = drift;
        out << j.dump() << "\n";
    }
}

namespace {

Model deep_copy(const Model& m) {
    Model c = Model::init(m.config, m.provenance.seed);
    c.provenance = m.provenance;
    const auto src = m.named_params();
    const auto dst = c.named_params();
    for (std::size_t i = 0; i < src.size(); ++i) dst[i].second->data = src[i].second->data;
    return c;
}

}  // namespace

ComparisonReport compare_variants(const Model& base, const std::vector<VariantKind>& variants,
                                  const StageConfig& stage, const Corpus& train,
                                  const Corpus& eval_corpus, std::uint64_t seed) {
    if (base.config.variant != VariantKind::dense) {
        throw ConfigError("compare_variants: base must be the dense variant");
    }
    ComparisonReport report;
    for (VariantKind v : variants) {
        VariantRun run;
        run.variant = variant_to_string(v);
        Model model = init_vlm_from_base(base, v);
        const Model start = deep_copy(model);
        RunStageOptions opt;
        opt.seed = seed;  // identical seed for every variant
        run.curve = run_stage(model, stage, train, opt);
        run.eval = eval_model(model, eval_corpus);
        run.drift_by_type = weight_drift(start, model, DriftGrouping::layer_type);
        report.runs.push_back(std::move(run));
    }
    return report;
}

std::int64_t model_active_flops_per_token(const ModelConfig& cfg, std::int64_t seq_len) {
    return cfg.layers * static_cast<std::int64_t>(active_flops_per_token(
                            cfg.variant, cfg.d, cfg.d_ff, seq_len, cfg.n_heads));
}

}  // namespace dacvlm
