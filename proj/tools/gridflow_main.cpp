#include <CLI11.hpp>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>

#include "gridflow/imageio.hpp"
#include "gridflow/runconfig.hpp"

namespace fs = std::filesystem;
using namespace gridflow;

namespace {

struct SharedArgs {
    std::string config_path;
    int64_t seed = -1;
    std::string out;
    int flow_steps = 0;
};

void add_shared(CLI::App* cmd, SharedArgs& args) {
    cmd->add_option("--config", args.config_path, "JSON run configuration");
    cmd->add_option("--seed", args.seed, "Override the config seed");
    cmd->add_option("--out", args.out, "Override the output directory");
    cmd->add_option("--flow-steps", args.flow_steps, "Override Euler sampler steps");
}

RunConfig resolve_config(const SharedArgs& args) {
    RunConfig cfg = args.config_path.empty() ? RunConfig() : RunConfig::load(args.config_path);
    if (args.seed >= 0) cfg.seed = static_cast<uint64_t>(args.seed);
    if (!args.out.empty()) cfg.out = args.out;
    else if (const char* root = std::getenv("GRIDFLOW_OUT"))
        cfg.out = std::string(root) + "/" + cfg.out;
    if (args.flow_steps > 0) cfg.sampler.steps = args.flow_steps;
    return cfg;
}

void progress(const std::string& msg) { std::cerr << "[gridflow] " << msg << '\n'; }

struct LoadedCheckpoint {
    ModelParams params;
    CodecParams codec;
};

LoadedCheckpoint load_ckpt(const std::string& dir) {
    CheckpointRecord rec = load_checkpoint(dir);
    return {std::move(rec.params), std::move(rec.codec)};
}

int cmd_datagen(const RunConfig& cfg) {
    const RuleTable& rules = cfg.rules();
    Tokenizer tok = Tokenizer::build(rules);
    std::string dir = cfg.out + "/data";
    fs::create_directories(dir);
    write_artifact_meta(cfg, dir);
    Corpora corpora = build_corpora(cfg, cfg.seed, tok, rules, progress);
    write_jsonl(corpora.stage1, dir + "/stage1.jsonl");
    write_jsonl(corpora.single_turn, dir + "/single_turn.jsonl");
    write_jsonl(corpora.refine, dir + "/refine.jsonl");
    progress("stage1=" + std::to_string(corpora.stage1.samples.size()) +
             " single_turn=" + std::to_string(corpora.single_turn.samples.size()) +
             " refine=" + std::to_string(corpora.refine.samples.size()) +
             " (retention " + std::to_string(corpora.refine.manifest.retention_rate) + ")");
    return 0;
}

int cmd_train(const RunConfig& cfg) {
    const RuleTable& rules = cfg.rules();
    Tokenizer tok = Tokenizer::build(rules);
    std::string data_dir = cfg.out + "/data";
    Corpora corpora;
    if (fs::exists(data_dir + "/stage1.jsonl")) {
        progress("loading datasets from " + data_dir);
        corpora.stage1 = read_jsonl(data_dir + "/stage1.jsonl");
        corpora.single_turn = read_jsonl(data_dir + "/single_turn.jsonl");
        corpora.refine = read_jsonl(data_dir + "/refine.jsonl");
    } else {
        progress("no datasets on disk; generating");
        corpora = build_corpora(cfg, cfg.seed, tok, rules, progress);
    }
    CodecParams codec = fit_experiment_codec(corpora, cfg.seed, cfg.grid);
    TrainedPipeline tp = train_pipeline(cfg, cfg.seed, corpora, codec, tok, progress);

    std::string ckpt_root = cfg.out + "/ckpt";
    write_artifact_meta(cfg, ckpt_root);
    save_checkpoint({tp.base, codec, cfg.to_json(), 0, rules.version, {}}, ckpt_root + "/base");
    save_checkpoint({tp.s1.params, codec, cfg.to_json(), cfg.stage1.total_iters, rules.version,
                     tp.s1.metrics},
                    ckpt_root + "/stage1");
    for (const auto& [step, snap] : tp.s1.snapshots)
        save_checkpoint({snap, codec, cfg.to_json(), step, rules.version, {}},
                        ckpt_root + "/stage1_step" + std::to_string(step));
    save_checkpoint({tp.s2.params, codec, cfg.to_json(),
                     cfg.stage1.total_iters + cfg.stage2.total_iters, rules.version,
                     tp.s2.metrics},
                    ckpt_root + "/final");
    progress("checkpoints in " + ckpt_root);
    return 0;
}

int cmd_infer(const RunConfig& cfg, const std::string& ckpt_dir, const std::string& prompt,
              const std::string& mode_str, const std::string& source_path, bool png) {
    const RuleTable& rules = cfg.rules();
    Tokenizer tok = Tokenizer::build(rules);
    auto [params, codec] = load_ckpt(ckpt_dir);
    InferenceMode mode = mode_from_name(mode_str);
    InterleaveConfig icfg{cfg.sampler, cfg.max_text_len};

    std::vector<int> context = tok.encode(Tokenizer::split(prompt), /*strict=*/false);
    Rollout rollout;
    if (!source_path.empty()) {
        std::ifstream f(source_path);
        if (!f) throw IoError("cannot read source grid " + source_path);
        nlohmann::json j;
        f >> j;
        rollout = edit(params, codec, grid_from_json(j), context, mode, icfg, cfg.seed);
    } else {
        rollout = run(params, codec, context, mode, icfg, cfg.seed);
    }

    std::string dir = cfg.out + "/infer";
    fs::create_directories(dir);
    write_artifact_meta(cfg, dir);
    {
        std::ofstream f(dir + "/rollout.json", std::ios::binary);
        f << rollout.to_json().dump(2) << '\n';
    }
    auto emit = [&](const GridImage& img, const std::string& name) {
        std::ofstream f(dir + "/" + name + ".txt", std::ios::binary);
        f << ascii_grid(img);
        if (png) write_grid_png(img, dir + "/" + name + ".png");
    };
    if (rollout.has_t1) std::cerr << "T1: " << tok.decode_to_string(rollout.t1) << "\n";
    if (rollout.i1) emit(*rollout.i1, "i1");
    if (rollout.has_t2) std::cerr << "T2: " << tok.decode_to_string(rollout.t2) << "\n";
    if (rollout.i2) emit(*rollout.i2, "i2");
    std::cerr << ascii_grid(rollout.final_image());
    progress("artifacts in " + dir);
    return 0;
}

int cmd_eval(const RunConfig& cfg, const std::string& ckpt_dir, const std::string& suite_name,
             const std::string& mode_str) {
    const RuleTable& rules = cfg.rules();
    Tokenizer tok = Tokenizer::build(rules);
    auto [params, codec] = load_ckpt(ckpt_dir);
    EvalOptions opts;
    opts.interleave = InterleaveConfig{cfg.sampler, cfg.max_text_len};
    opts.threads = cfg.threads;
    opts.checkpoint_id = ckpt_dir;
    opts.config_hash = cfg.config_hash();
    InferenceMode mode = mode_from_name(mode_str);

    std::string dir = cfg.out + "/eval";
    fs::create_directories(dir);
    write_artifact_meta(cfg, dir);

    EvalReport report;
    if (suite_name == "knowledge") {
        EvalSuite suite = make_knowledge_suite(cfg.eval_per_category, cfg.eval_seed, rules, cfg.grid);
        report = eval_t2i(params, codec, tok, suite, mode, rules, opts);
    } else if (suite_name == "compositional") {
        EvalSuite suite = make_compositional_suite(cfg.eval_per_kind, cfg.eval_seed, cfg.grid);
        report = eval_compositional(params, codec, tok, suite, rules, opts, mode);
    } else if (suite_name == "edit") {
        EvalSuite suite = make_edit_suite(cfg.eval_edit_count, cfg.eval_seed, rules, cfg.grid);
        report = eval_edit(params, codec, tok, suite, mode, rules, opts);
    } else {
        throw ConfigError("unknown suite '" + suite_name + "' (knowledge|compositional|edit)");
    }
    report.write_csv(dir + "/report_" + suite_name + "_" + mode_str + ".csv");
    std::cout << report.to_text();
    return 0;
}

int cmd_ablate(const RunConfig& cfg, bool plot) {
    const RuleTable& rules = cfg.rules();
    Tokenizer tok = Tokenizer::build(rules);
    std::string dir = cfg.out + "/ablate";
    fs::create_directories(dir);
    write_artifact_meta(cfg, dir);

    EvalSuite suite = make_knowledge_suite(cfg.eval_per_category, cfg.eval_seed, rules, cfg.grid);
    EvalSuite edit_suite = make_edit_suite(cfg.eval_edit_count, cfg.eval_seed, rules, cfg.grid);

    for (uint64_t seed : cfg.ablate_seeds) {
        progress("ablation seed " + std::to_string(seed));
        Corpora corpora = build_corpora(cfg, seed, tok, rules, progress);
        check_seed_disjoint(corpora.stage1.manifest, suite);
        check_seed_disjoint(corpora.single_turn.manifest, suite);
        check_seed_disjoint(corpora.refine.manifest, edit_suite);
        CodecParams codec = fit_experiment_codec(corpora, seed, cfg.grid);
        TrainedPipeline tp = train_pipeline(cfg, seed, corpora, codec, tok, progress);

        EvalOptions opts;
        opts.interleave = InterleaveConfig{cfg.sampler, cfg.max_text_len};
        opts.threads = cfg.threads;
        opts.config_hash = cfg.config_hash();
        opts.checkpoint_id = "seed" + std::to_string(seed);

        auto rows = run_ablation(tp.base, tp.s2.params, codec, tok, suite, rules, opts);
        std::string table = ablation_table(rows);
        std::cout << "seed " << seed << "\n" << table;
        std::ofstream f(dir + "/ablation_seed" + std::to_string(seed) + ".tsv", std::ios::binary);
        f << table;
        for (const auto& row : rows)
            row.report.write_csv(dir + "/ablation_seed" + std::to_string(seed) + "_" + row.name +
                                 ".csv");

        TrainConfig s2 = cfg.stage2;
        s2.seed = mix_seed(seed, 0x52);
        auto corr = correlation_study(tp.s1.snapshots, {&corpora.single_turn, &corpora.refine,
                                                        &tp.replay},
                                      s2, codec, tok, suite, edit_suite, rules, opts);
        std::ofstream cf(dir + "/correlation_seed" + std::to_string(seed) + ".csv",
                         std::ios::binary);
        cf.precision(17);
        cf << "stage1_step,edit_score,refine_gain\n";
        for (const auto& p : corr.points)
            cf << p.stage1_step << ',' << p.edit_score << ',' << p.refine_gain << '\n';
        cf << "spearman," << corr.spearman << ",\n";
        std::cout << "spearman(edit_score, refine_gain) = " << corr.spearman << "\n";

        if (plot) {
            std::vector<SeriesPoint> pts;
            for (const auto& p : corr.points)
                pts.push_back({p.edit_score, p.refine_gain});
            write_scatter_svg(dir + "/correlation_seed" + std::to_string(seed) + ".svg", pts,
                              "edit score", "refine gain", "editing vs refinement gain");
            std::vector<SeriesPoint> steps;
            for (const auto& p : corr.points)
                steps.push_back({static_cast<double>(p.stage1_step), p.edit_score});
            write_line_svg(dir + "/edit_vs_checkpoint_seed" + std::to_string(seed) + ".svg",
                           steps, "stage-1 step", "edit score", "edit score vs checkpoint");
        }
    }
    return 0;
}

int cmd_pipeline(const RunConfig& cfg) {
    const RuleTable& rules = cfg.rules();
    Tokenizer tok = Tokenizer::build(rules);
    std::string dir = cfg.out + "/pipeline";
    fs::create_directories(dir);
    write_artifact_meta(cfg, dir);
    std::ofstream audit_file(dir + "/audit.log", std::ios::binary);
    AuditSink audit = [&audit_file](const std::string& line) { audit_file << line << '\n'; };
    Dataset ds = build_refinement(cfg.refine_count, cfg.corruptor, cfg.seed, tok, rules, cfg.grid,
                                  cfg.threads, audit);
    write_jsonl(ds, dir + "/refine.jsonl");
    progress("emitted " + std::to_string(ds.samples.size()) + " of " +
             std::to_string(cfg.refine_count) + " (retention " +
             std::to_string(ds.manifest.retention_rate) + ")");
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"gridflow: interleaved reasoning and flow-matching synthesis on a toy grid world"};
    app.require_subcommand(1);

    SharedArgs shared;
    std::string ckpt_dir, prompt, mode_str = "reason_refine", suite = "knowledge", source_path;
    bool plot = false, png = false;

    auto* datagen = app.add_subcommand("datagen", "Build the training corpora");
    add_shared(datagen, shared);

    auto* train = app.add_subcommand("train", "Run the two-stage recipe");
    add_shared(train, shared);

    auto* infer = app.add_subcommand("infer", "Generate or edit one image");
    add_shared(infer, shared);
    infer->add_option("--ckpt", ckpt_dir, "Checkpoint directory")->required();
    infer->add_option("--prompt", prompt, "Instruction text")->required();
    infer->add_option("--mode", mode_str, "direct|reason|reason_refine");
    infer->add_option("--source", source_path, "Source grid JSON (switches to editing)");
    infer->add_flag("--png", png, "Also write PNG rasters");

    auto* eval = app.add_subcommand("eval", "Score a checkpoint on a held-out suite");
    add_shared(eval, shared);
    eval->add_option("--ckpt", ckpt_dir, "Checkpoint directory")->required();
    eval->add_option("--suite", suite, "knowledge|compositional|edit");
    eval->add_option("--mode", mode_str, "direct|reason|reason_refine");

    auto* ablate = app.add_subcommand("ablate", "Four-row ablation plus correlation study");
    add_shared(ablate, shared);
    ablate->add_flag("--plot", plot, "Emit SVG charts");

    auto* pipeline = app.add_subcommand("pipeline", "Run the agent refinement pipeline");
    add_shared(pipeline, shared);

    CLI11_PARSE(app, argc, argv);

    try {
        RunConfig cfg = resolve_config(shared);
        if (datagen->parsed()) return cmd_datagen(cfg);
        if (train->parsed()) return cmd_train(cfg);
        if (infer->parsed()) return cmd_infer(cfg, ckpt_dir, prompt, mode_str, source_path, png);
        if (eval->parsed()) return cmd_eval(cfg, ckpt_dir, suite, mode_str);
        if (ablate->parsed()) return cmd_ablate(cfg, plot);
        if (pipeline->parsed()) return cmd_pipeline(cfg);
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << '\n';
        return 1;
    }
    return 0;
}
