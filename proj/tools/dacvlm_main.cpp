// Command-line entry point: data generation, staged training, evaluation,
// and drift/comparison reports, each emitting a run manifest for replay.

#include <CLI11.hpp>
#include <chrono>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <json.hpp>
#include <sstream>

#include "dacvlm/analysis.hpp"
#include "dacvlm/model.hpp"
#include "dacvlm/synth.hpp"
#include "dacvlm/training.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace dacvlm;

namespace {

int max_threads() {
    // Internal kernels are single-threaded for bitwise determinism; the env
    // var is honored as an upper bound on any future worker pools.
    const char* env = std::getenv("DAC_VLM_THREADS");
    if (!env) return 1;
    const int n = std::atoi(env);
    return n > 0 ? n : 1;
}

std::uint64_t fnv1a_file(const std::string& path, std::uint64_t h) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot hash input " + path);
    char buf[65536];
    while (in.read(buf, sizeof(buf)) || in.gcount() > 0) {
        for (std::streamsize i = 0; i < in.gcount(); ++i) {
            h ^= static_cast<unsigned char>(buf[i]);
            h *= 0x100000001B3ULL;
        }
    }
    return h;
}

void write_run_manifest(const std::string& out_dir, const std::string& command,
                        const json& config, std::uint64_t seed,
                        const std::vector<std::string>& inputs,
                        const std::vector<std::string>& outputs) {
    std::uint64_t h = 0xCBF29CE484222325ULL;
    for (const auto& p : inputs) h = fnv1a_file(p, h);
    json j;
    j["command"] = command;
    j["config"] = config;
    j["seed"] = seed;
    j["input_content_hash"] = h;
    j["inputs"] = inputs;
    j["outputs"] = outputs;
    j["threads"] = max_threads();
    j["timestamp"] = static_cast<std::int64_t>(
        std::chrono::duration_cast<std::chrono::seconds>(
            std::chrono::system_clock::now().time_since_epoch())
            .count());
    std::ofstream out(fs::path(out_dir) / "run_manifest.json");
    if (!out) throw IoError("cannot write run manifest under " + out_dir);
    out << j.dump(2) << "\n";
}

void ensure_layout(const std::string& out_dir) {
    std::error_code ec;
    fs::create_directories(fs::path(out_dir) / "checkpoints", ec);
    fs::create_directories(fs::path(out_dir) / "metrics", ec);
    fs::create_directories(fs::path(out_dir) / "reports", ec);
    if (ec) throw IoError("cannot create output layout under " + out_dir);
}

std::vector<std::string> heldout_sentences(std::uint64_t seed, int n) {
    std::vector<std::string> out;
    out.reserve(static_cast<std::size_t>(n));
    for (int i = 0; i < n; ++i) {
        out.push_back(text_only_sentence(seed * 1000003ULL + static_cast<std::uint64_t>(i)));
    }
    return out;
}

std::string read_file(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot open " + path);
    std::ostringstream os;
    os << in.rdbuf();
    return os.str();
}

int cmd_datagen(const CorpusOptions& opt, const std::string& out_dir) {
    fs::create_directories(out_dir);
    const Corpus corpus = generate_corpus(opt);
    write_corpus(corpus, out_dir);
    json cfg;
    cfg["n"] = opt.n;
    cfg["canvas"] = opt.canvas;
    cfg["max_objects"] = opt.max_objects;
    cfg["kind"] = opt.kind;
    write_run_manifest(out_dir, "datagen", cfg, opt.seed, {},
                       {(fs::path(out_dir) / "corpus.jsonl").string()});
    std::cout << "wrote " << corpus.samples.size() << " samples to " << out_dir << "\n";
    return 0;
}

int cmd_pretrain(const ModelConfig& mc, std::int64_t steps, std::int64_t batch, double lr,
                 int sentences, std::uint64_t seed, const std::string& out_dir) {
    ensure_layout(out_dir);
    std::vector<std::string> corpus;
    for (int i = 0; i < sentences; ++i) {
        corpus.push_back(text_only_sentence(seed * 7919ULL + static_cast<std::uint64_t>(i)));
    }
    std::vector<StepMetrics> log;
    Model model = pretrain_base_lm(mc, corpus, steps, batch, lr, seed, &log);
    const std::string ckpt = (fs::path(out_dir) / "checkpoints" / "base.ckpt").string();
    save_checkpoint(model, ckpt);
    std::ofstream metrics(fs::path(out_dir) / "metrics" / "pretrain.jsonl");
    for (const auto& m : log) metrics << m.to_json_line() << "\n";
    write_run_manifest(out_dir, "pretrain", json::parse(mc.to_json_string()), seed, {},
                       {ckpt});
    std::cout << "base LM saved to " << ckpt
              << " heldout_ppl=" << model.provenance.heldout_ppl << "\n";
    return 0;
}

int cmd_train(const std::string& base_ckpt, const std::string& corpus_dir,
              const std::string& stage_arg, const std::string& config_path,
              const std::string& variant_name, std::uint64_t seed,
              const std::string& out_dir) {
    ensure_layout(out_dir);
    const Model base = load_checkpoint(base_ckpt, VariantKind::dense);
    const Corpus corpus = read_corpus(corpus_dir);
    const VariantKind variant = variant_from_string(variant_name);
    const auto heldout = heldout_sentences(seed + 424242, 32);

    std::vector<std::string> outputs;
    json cfg_json = json::array();
    if (stage_arg == "all") {
        std::vector<StageConfig> stages;
        if (!config_path.empty()) {
            json arr = json::parse(read_file(config_path));
            if (!arr.is_array()) throw ConfigError("pipeline config must be a JSON array");
            for (const auto& item : arr) {
                stages.push_back(StageConfig::from_json_string(item.dump()));
            }
        } else {
            stages = StageConfig::pipeline_defaults();
        }
        for (const auto& s : stages) cfg_json.push_back(json::parse(s.to_json_string()));
        PipelineResult result =
            run_pipeline(base, variant, stages, corpus, heldout, seed, out_dir);
        outputs = result.checkpoint_paths;
        std::cout << "pipeline complete: " << outputs.size() << " checkpoints under "
                  << out_dir << "\n";
    } else {
        StageConfig cfg = config_path.empty()
                              ? StageConfig::defaults_for(stage_arg)
                              : StageConfig::from_json_string(read_file(config_path));
        cfg.stage = stage_arg;
        cfg.validate();
        cfg_json.push_back(json::parse(cfg.to_json_string()));
        Model model = init_vlm_from_base(base, variant);
        RunStageOptions opt;
        opt.seed = seed;
        opt.heldout_text = heldout;
        opt.metrics_path = (fs::path(out_dir) / "metrics" / "train.jsonl").string();
        opt.last_good_ckpt_path =
            (fs::path(out_dir) / "checkpoints" / "last_good.ckpt").string();
        std::ofstream(opt.metrics_path, std::ios::trunc);
        try {
            run_stage(model, cfg, corpus, opt);
        } catch (const TrainingError& e) {
            std::cerr << "training aborted: " << e.what()
                      << "; last good checkpoint: " << opt.last_good_ckpt_path << "\n";
            throw;
        }
        const std::string ckpt =
            (fs::path(out_dir) / "checkpoints" / ("stage_" + stage_arg + ".ckpt")).string();
        save_checkpoint(model, ckpt);
        outputs.push_back(ckpt);
        std::cout << "stage " << stage_arg << " checkpoint: " << ckpt << "\n";
    }
    std::vector<std::string> inputs = {base_ckpt,
                                       (fs::path(corpus_dir) / "corpus.jsonl").string()};
    if (!config_path.empty()) inputs.push_back(config_path);
    write_run_manifest(out_dir, "train", cfg_json, seed, inputs, outputs);
    return 0;
}

int cmd_eval(const std::string& ckpt, const std::string& corpus_dir,
             const std::string& kinds_csv, const std::string& out_dir) {
    ensure_layout(out_dir);
    const Model model = load_checkpoint(ckpt);
    const Corpus corpus = read_corpus(corpus_dir);
    std::vector<std::string> kinds;
    if (!kinds_csv.empty()) {
        std::istringstream is(kinds_csv);
        std::string item;
        while (std::getline(is, item, ',')) kinds.push_back(item);
    }
    const EvalReport report = eval_model(model, corpus, kinds);
    const std::string csv = (fs::path(out_dir) / "reports" / "eval.csv").string();
    const std::string jsonl = (fs::path(out_dir) / "reports" / "eval.jsonl").string();
    report.write_csv(csv);
    report.write_jsonl(jsonl);
    json cfg;
    cfg["kinds"] = kinds;
    write_run_manifest(out_dir, "eval", cfg, 0,
                       {ckpt, (fs::path(corpus_dir) / "corpus.jsonl").string()}, {csv, jsonl});
    for (const auto& [kind, score] : report.by_kind) {
        std::cout << kind << " accuracy " << score.accuracy() << " (" << score.correct << "/"
                  << score.n << ")\n";
    }
    if (report.text_ppl >= 0.0) std::cout << "text ppl " << report.text_ppl << "\n";
    return 0;
}

int cmd_drift(const std::string& before, const std::string& after,
              const std::string& grouping, const std::string& out_dir) {
    ensure_layout(out_dir);
    const Model a = load_checkpoint(before);
    const Model b = load_checkpoint(after);
    const DriftReport report = weight_drift(a, b, drift_grouping_from_string(grouping));
    const std::string csv = (fs::path(out_dir) / "reports" / "drift.csv").string();
    const std::string jsonl = (fs::path(out_dir) / "reports" / "drift.jsonl").string();
    report.write_csv(csv);
    report.write_jsonl(jsonl);
    json cfg;
    cfg["grouping"] = grouping;
    write_run_manifest(out_dir, "drift", cfg, 0, {before, after}, {csv, jsonl});
    for (const auto& r : report.rows) {
        std::cout << r.group << " " << r.mean_abs << "\n";
    }
    return 0;
}

int cmd_compare(const std::string& base_ckpt, const std::string& corpus_dir,
                const std::string& variants_csv, const std::string& stage_id,
                std::int64_t steps, std::uint64_t seed, const std::string& out_dir) {
    ensure_layout(out_dir);
    const Model base = load_checkpoint(base_ckpt, VariantKind::dense);
    const Corpus corpus = read_corpus(corpus_dir);
    std::vector<VariantKind> variants;
    std::istringstream is(variants_csv);
    std::string item;
    while (std::getline(is, item, ',')) variants.push_back(variant_from_string(item));
    if (variants.empty()) throw ConfigError("compare: --variants list is empty");
    StageConfig cfg = StageConfig::defaults_for(stage_id);
    if (steps > 0) cfg.steps = steps;
    const ComparisonReport report =
        compare_variants(base, variants, cfg, corpus, corpus, seed);
    const std::string csv = (fs::path(out_dir) / "reports" / "compare.csv").string();
    const std::string jsonl = (fs::path(out_dir) / "reports" / "compare.jsonl").string();
    report.write_csv(csv);
    report.write_jsonl(jsonl);
    json j;
    j["variants"] = variants_csv;
    j["stage"] = json::parse(cfg.to_json_string());
    write_run_manifest(out_dir, "compare", j, seed,
                       {base_ckpt, (fs::path(corpus_dir) / "corpus.jsonl").string()},
                       {csv, jsonl});
    std::cout << "comparison over " << report.runs.size() << " variants written to " << csv
              << "\n";
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Modality-decoupled decoder-only vision-language model toolkit"};
    app.require_subcommand(1);

    // datagen
    CorpusOptions dg;
    std::string dg_out;
    auto* datagen = app.add_subcommand("datagen", "generate a synthetic corpus");
    datagen->add_option("--n", dg.n, "number of samples");
    datagen->add_option("--seed", dg.seed, "corpus seed");
    datagen->add_option("--canvas", dg.canvas, "square canvas edge (multiple of 32)");
    datagen->add_option("--max-objects", dg.max_objects, "objects per scene cap");
    datagen->add_option("--kind", dg.kind, "all|caption|qa|instruction|text_only|web");
    datagen->add_option("--out", dg_out, "output directory")->required();

    // pretrain
    ModelConfig pt_cfg;
    std::int64_t pt_steps = 300, pt_batch = 16;
    double pt_lr = 1e-3;
    int pt_sentences = 512;
    std::uint64_t pt_seed = 0;
    std::string pt_out;
    auto* pretrain = app.add_subcommand("pretrain", "pretrain the dense text backbone");
    pretrain->add_option("--steps", pt_steps, "optimizer steps");
    pretrain->add_option("--batch", pt_batch, "batch size");
    pretrain->add_option("--lr", pt_lr, "peak learning rate");
    pretrain->add_option("--sentences", pt_sentences, "generated training sentences");
    pretrain->add_option("--seed", pt_seed, "run seed");
    pretrain->add_option("--layers", pt_cfg.layers, "transformer layers");
    pretrain->add_option("--dim", pt_cfg.d, "model width");
    pretrain->add_option("--out", pt_out, "output directory")->required();

    // train
    std::string tr_base, tr_corpus, tr_stage = "all", tr_config, tr_variant = "dac", tr_out;
    std::uint64_t tr_seed = 0;
    auto* train = app.add_subcommand("train", "run one stage or the full pipeline");
    train->add_option("--base-ckpt", tr_base, "dense base checkpoint")->required();
    train->add_option("--corpus", tr_corpus, "corpus directory")->required();
    train->add_option("--stage", tr_stage, "1|2.1|2.2|3|all");
    train->add_option("--config", tr_config, "stage config JSON (array for --stage all)");
    train->add_option("--variant", tr_variant, "dense|rep|moe_ffn|ln_only|dac");
    train->add_option("--seed", tr_seed, "run seed");
    train->add_option("--out", tr_out, "output directory")->required();

    // eval
    std::string ev_ckpt, ev_corpus, ev_kinds, ev_out;
    auto* eval_cmd = app.add_subcommand("eval", "exact-match evaluation + text perplexity");
    eval_cmd->add_option("--ckpt", ev_ckpt, "model checkpoint")->required();
    eval_cmd->add_option("--corpus", ev_corpus, "corpus directory")->required();
    eval_cmd->add_option("--kinds", ev_kinds, "comma-separated sample kinds");
    eval_cmd->add_option("--out", ev_out, "output directory")->required();

    // drift
    std::string dr_before, dr_after, dr_grouping = "layer_type", dr_out;
    auto* drift = app.add_subcommand("drift", "weight-drift report between checkpoints");
    drift->add_option("--before", dr_before, "earlier checkpoint")->required();
    drift->add_option("--after", dr_after, "later checkpoint")->required();
    drift->add_option("--grouping", dr_grouping, "layer_type|layer_index");
    drift->add_option("--out", dr_out, "output directory")->required();

    // compare
    std::string cp_base, cp_corpus, cp_variants = "dense,moe_ffn,dac", cp_stage = "2.1",
                cp_out;
    std::int64_t cp_steps = 0;
    std::uint64_t cp_seed = 0;
    auto* compare = app.add_subcommand("compare", "train variants side by side");
    compare->add_option("--base-ckpt", cp_base, "dense base checkpoint")->required();
    compare->add_option("--corpus", cp_corpus, "corpus directory")->required();
    compare->add_option("--variants", cp_variants, "comma-separated variant list");
    compare->add_option("--stage", cp_stage, "stage schedule to borrow");
    compare->add_option("--steps", cp_steps, "override step count (0 = default)");
    compare->add_option("--seed", cp_seed, "shared run seed");
    compare->add_option("--out", cp_out, "output directory")->required();

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int rc = app.exit(e);
        return rc == 0 ? 0 : 2;
    }

    try {
        if (datagen->parsed()) return cmd_datagen(dg, dg_out);
        if (pretrain->parsed()) {
            return cmd_pretrain(pt_cfg, pt_steps, pt_batch, pt_lr, pt_sentences, pt_seed,
                                pt_out);
        }
        if (train->parsed()) {
            return cmd_train(tr_base, tr_corpus, tr_stage, tr_config, tr_variant, tr_seed,
                             tr_out);
        }
        if (eval_cmd->parsed()) return cmd_eval(ev_ckpt, ev_corpus, ev_kinds, ev_out);
        if (drift->parsed()) return cmd_drift(dr_before, dr_after, dr_grouping, dr_out);
        if (compare->parsed()) {
            return cmd_compare(cp_base, cp_corpus, cp_variants, cp_stage, cp_steps, cp_seed,
                               cp_out);
        }
    } catch (const UsageError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 2;
    } catch (const ConfigError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 2;
    } catch (const TrainingError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 3;
    } catch (const NumericError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 3;
    } catch (const IoError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 4;
    }
    return 2;
}
