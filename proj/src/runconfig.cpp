#include "gridflow/runconfig.hpp"

#include <filesystem>
#include <fstream>
#include <set>

#include "gridflow/error.hpp"

namespace gridflow {

using nlohmann::json;

namespace {

// Strict object reader: every key must be consumed.
class StrictObj {
public:
    StrictObj(const json& j, std::string where) : j_(j), where_(std::move(where)) {
        if (!j_.is_object()) throw ConfigError(where_ + ": expected an object");
    }
    ~StrictObj() = default;

    bool has(const std::string& key) {
        return j_.contains(key);
    }
    const json& at(const std::string& key) {
        consumed_.insert(key);
        return j_.at(key);
    }
    template <typename T>
    T get(const std::string& key, T fallback) {
        if (!j_.contains(key)) return fallback;
        consumed_.insert(key);
        return j_.at(key).get<T>();
    }
    void finish() {
        for (auto it = j_.begin(); it != j_.end(); ++it)
            if (!consumed_.count(it.key()))
                throw ConfigError(where_ + ": unknown key '" + it.key() + "'");
    }

private:
    const json& j_;
    std::string where_;
    std::set<std::string> consumed_;
};

TrainConfig default_stage1() {
    TrainConfig c;
    c.stage = 1;
    c.total_iters = 900;
    c.warmup_iters = 90;
    c.lr_max = 4e-3;
    c.lr_min = 4e-4;
    c.pack_len = 384;
    return c;
}

TrainConfig default_stage2() {
    TrainConfig c;
    c.stage = 2;
    c.total_iters = 450;
    c.warmup_iters = 45;
    c.lr_max = 2e-3;
    c.lr_min = 2e-4;
    c.pack_len = 384;
    return c;
}

TrainConfig parse_train(const json& j, int stage, TrainConfig base, const std::string& where) {
    StrictObj o(j, where);
    base.stage = stage;
    base.total_iters = o.get("iters", base.total_iters);
    base.warmup_iters = o.get("warmup", base.warmup_iters);
    base.lr_max = o.get("lr_max", base.lr_max);
    base.lr_min = o.get("lr_min", base.lr_min);
    base.pack_len = o.get("pack_len", base.pack_len);
    base.grad_clip = o.get("grad_clip", base.grad_clip);
    base.debug_mask_check = o.get("debug_mask_check", base.debug_mask_check);
    base.log_every = o.get("log_every", base.log_every);
    o.finish();
    return base;
}

}  // namespace

RunConfig::RunConfig() : stage1(default_stage1()), stage2(default_stage2()) {
    model.image_slots = 12;  // one slot per grid row
    model.max_pos = 224;
}

RunConfig RunConfig::from_json(const json& j) {
    RunConfig cfg;
    StrictObj o(j, "config");
    cfg.seed = o.get<uint64_t>("seed", cfg.seed);
    cfg.out = o.get<std::string>("out", cfg.out);
    cfg.rules_path = o.get<std::string>("rules", cfg.rules_path);
    cfg.threads = o.get("threads", cfg.threads);
    if (o.has("grid")) {
        StrictObj g(o.at("grid"), "config.grid");
        cfg.grid.h = g.get("h", cfg.grid.h);
        cfg.grid.w = g.get("w", cfg.grid.w);
        g.finish();
    }
    if (o.has("model")) {
        StrictObj m(o.at("model"), "config.model");
        cfg.model.d_model = m.get("d_model", cfg.model.d_model);
        cfg.model.layers = m.get("layers", cfg.model.layers);
        cfg.model.heads = m.get("heads", cfg.model.heads);
        cfg.model.ffn_hidden = m.get("ffn_hidden", cfg.model.ffn_hidden);
        cfg.model.latent_hidden = m.get("latent_hidden", cfg.model.latent_hidden);
        cfg.model.image_slots = m.get("image_slots", cfg.model.image_slots);
        cfg.model.max_pos = m.get("max_pos", cfg.model.max_pos);
        cfg.model.r_cap = m.get("r_cap", cfg.model.r_cap);
        m.finish();
    }
    if (o.has("flow")) {
        StrictObj f(o.at("flow"), "config.flow");
        cfg.sampler.steps = f.get("steps", cfg.sampler.steps);
        f.finish();
    }
    cfg.max_text_len = o.get("max_text_len", cfg.max_text_len);
    if (o.has("datagen")) {
        StrictObj d(o.at("datagen"), "config.datagen");
        if (d.has("stage1")) cfg.stage1_counts = d.at("stage1").get<std::map<std::string, int>>();
        if (d.has("single_turn"))
            cfg.single_turn_counts = d.at("single_turn").get<std::map<std::string, int>>();
        cfg.refine_count = d.get("refine", cfg.refine_count);
        cfg.corruptor.min_corruptions = d.get("corrupt_min", cfg.corruptor.min_corruptions);
        cfg.corruptor.max_corruptions = d.get("corrupt_max", cfg.corruptor.max_corruptions);
        cfg.corruptor.allow_clutter = d.get("allow_clutter", cfg.corruptor.allow_clutter);
        cfg.corruptor.wipe_prob = d.get("wipe_prob", cfg.corruptor.wipe_prob);
        cfg.corruptor.benign_clutter_prob =
            d.get("benign_clutter", cfg.corruptor.benign_clutter_prob);
        d.finish();
    }
    if (o.has("train")) {
        StrictObj t(o.at("train"), "config.train");
        double lt = t.get("lambda_text", 2.0);
        double li = t.get("lambda_img", 1.0);
        if (t.has("stage1")) cfg.stage1 = parse_train(t.at("stage1"), 1, cfg.stage1, "config.train.stage1");
        if (t.has("stage2")) cfg.stage2 = parse_train(t.at("stage2"), 2, cfg.stage2, "config.train.stage2");
        cfg.stage1.lambda_text = lt;
        cfg.stage1.lambda_img = li;
        cfg.stage2.lambda_text = lt;
        cfg.stage2.lambda_img = li;
        cfg.stage2_replay = t.get("replay", cfg.stage2_replay);
        t.finish();
    }
    if (o.has("eval")) {
        StrictObj e(o.at("eval"), "config.eval");
        cfg.eval_per_category = e.get("per_category", cfg.eval_per_category);
        cfg.eval_per_kind = e.get("per_kind", cfg.eval_per_kind);
        cfg.eval_edit_count = e.get("edit_count", cfg.eval_edit_count);
        cfg.eval_seed = e.get<uint64_t>("seed", cfg.eval_seed);
        e.finish();
    }
    if (o.has("ablate")) {
        StrictObj a(o.at("ablate"), "config.ablate");
        if (a.has("seeds")) cfg.ablate_seeds = a.at("seeds").get<std::vector<uint64_t>>();
        if (a.has("checkpoint_fracs"))
            cfg.checkpoint_fracs = a.at("checkpoint_fracs").get<std::vector<double>>();
        a.finish();
    }
    o.finish();
    return cfg;
}

RunConfig RunConfig::load(const std::string& path) {
    std::ifstream f(path);
    if (!f) throw IoError("cannot read config " + path);
    json j;
    try {
        f >> j;
    } catch (const std::exception& e) {
        throw ConfigError("config " + path + ": " + e.what());
    }
    return from_json(j);
}

json RunConfig::to_json() const {
    json j;
    j["seed"] = seed;
    j["out"] = out;
    j["rules"] = rules_path;
    j["threads"] = threads;
    j["grid"] = {{"h", grid.h}, {"w", grid.w}};
    j["model"] = {{"d_model", model.d_model},         {"layers", model.layers},
                  {"heads", model.heads},             {"ffn_hidden", model.ffn_hidden},
                  {"latent_hidden", model.latent_hidden}, {"max_pos", model.max_pos},
                  {"r_cap", model.r_cap},             {"image_slots", model.image_slots}};
    j["flow"] = {{"steps", sampler.steps}};
    j["max_text_len"] = max_text_len;
    j["datagen"] = {{"stage1", stage1_counts},
                    {"single_turn", single_turn_counts},
                    {"refine", refine_count},
                    {"corrupt_min", corruptor.min_corruptions},
                    {"corrupt_max", corruptor.max_corruptions},
                    {"allow_clutter", corruptor.allow_clutter},
                    {"wipe_prob", corruptor.wipe_prob},
                    {"benign_clutter", corruptor.benign_clutter_prob}};
    auto train_json = [](const TrainConfig& t) {
        return json{{"iters", t.total_iters}, {"warmup", t.warmup_iters}, {"lr_max", t.lr_max},
                    {"lr_min", t.lr_min},     {"pack_len", t.pack_len},   {"grad_clip", t.grad_clip},
                    {"debug_mask_check", t.debug_mask_check}, {"log_every", t.log_every}};
    };
    j["train"] = {{"lambda_text", stage1.lambda_text},
                  {"lambda_img", stage1.lambda_img},
                  {"stage1", train_json(stage1)},
                  {"stage2", train_json(stage2)},
                  {"replay", stage2_replay}};
    j["eval"] = {{"per_category", eval_per_category},
                 {"per_kind", eval_per_kind},
                 {"edit_count", eval_edit_count},
                 {"seed", eval_seed}};
    j["ablate"] = {{"seeds", ablate_seeds}, {"checkpoint_fracs", checkpoint_fracs}};
    return j;
}

uint64_t RunConfig::config_hash() const { return fnv1a64_str(to_json().dump()); }

const RuleTable& RunConfig::rules() const {
    if (rules_path.empty()) return RuleTable::builtin();
    static std::map<std::string, RuleTable> cache;
    auto it = cache.find(rules_path);
    if (it == cache.end()) it = cache.emplace(rules_path, RuleTable::load(rules_path)).first;
    return it->second;
}

ModelConfig RunConfig::model_config(const Tokenizer& tok) const {
    ModelConfig m = model;
    m.vocab = tok.vocab_size();
    m.latent_dim = compact_codec_dim(grid);
    m.validate();
    return m;
}

void write_artifact_meta(const RunConfig& cfg, const std::string& dir) {
    std::filesystem::create_directories(dir);
    json j;
    j["config"] = cfg.to_json();
    j["config_hash"] = cfg.config_hash();
    j["seed"] = cfg.seed;
    std::ofstream f(dir + "/resolved_config.json", std::ios::binary);
    if (!f) throw IoError("cannot write " + dir + "/resolved_config.json");
    f << j.dump(2) << '\n';
}

Corpora build_corpora(const RunConfig& cfg, uint64_t seed, const Tokenizer& tok,
                      const RuleTable& rules, const ProgressSink& progress) {
    Corpora c;
    if (progress) progress("building stage-1 corpus");
    c.stage1 = build_stage1(cfg.stage1_counts, seed, tok, rules, cfg.grid);
    if (progress) progress("building single-turn corpus");
    c.single_turn = build_single_turn(cfg.single_turn_counts, seed, tok, rules, cfg.grid);
    if (progress) progress("building refinement corpus");
    c.refine = build_refinement(cfg.refine_count, cfg.corruptor, seed, tok, rules, cfg.grid,
                                cfg.threads);
    return c;
}

CodecParams fit_experiment_codec(const Corpora& corpora, uint64_t seed, GridConfig grid) {
    std::vector<GridImage> grids;
    auto collect = [&grids](const Dataset& ds) {
        for (const auto& s : ds.samples)
            for (const auto& seg : s.segments)
                if (seg.kind == PosKind::image) grids.push_back(seg.grid);
    };
    collect(corpora.stage1);
    collect(corpora.single_turn);
    collect(corpora.refine);
    Rng rng(mix_seed(seed, 0xC0DEC));
    for (int i = 0; i < 256; ++i)
        grids.push_back(render(random_scene(static_cast<int>(rng.uniform_int(0, 10)), rng, grid)));
    return fit_codec(grids, compact_codec_dim(grid));
}

ModelParams make_model(const RunConfig& cfg, const Tokenizer& tok, uint64_t seed) {
    ModelParams params(cfg.model_config(tok));
    Rng rng(mix_seed(seed, 0x10D31));
    params.init(rng);
    return params;
}

Dataset replay_slice(const Dataset& stage1, int count, uint64_t seed) {
    Dataset out;
    out.manifest = stage1.manifest;
    out.manifest.counts.clear();
    std::vector<int> order(stage1.samples.size());
    for (size_t i = 0; i < order.size(); ++i) order[i] = static_cast<int>(i);
    Rng rng(mix_seed(seed, 0x5EED));
    rng.shuffle(order);
    int n = std::min<int>(count, static_cast<int>(order.size()));
    for (int i = 0; i < n; ++i) {
        out.samples.push_back(stage1.samples[static_cast<size_t>(order[static_cast<size_t>(i)])]);
        out.manifest.counts[out.samples.back().category] += 1;
    }
    return out;
}

TrainedPipeline train_pipeline(const RunConfig& cfg, uint64_t seed, const Corpora& corpora,
                               const CodecParams& codec, const Tokenizer& tok,
                               const ProgressSink& progress) {
    ModelParams base = make_model(cfg, tok, seed);

    TrainConfig s1 = cfg.stage1;
    s1.seed = mix_seed(seed, 0x51);
    s1.snapshot_steps.clear();
    for (double frac : cfg.checkpoint_fracs)
        s1.snapshot_steps.push_back(
            std::max(1, static_cast<int>(frac * static_cast<double>(s1.total_iters))));
    if (progress) progress("stage 1: " + std::to_string(s1.total_iters) + " iters");
    TrainOutput out1 = train_stage1(base, corpora.stage1, codec, s1);

    Dataset replay = replay_slice(corpora.stage1, cfg.stage2_replay, seed);
    TrainConfig s2 = cfg.stage2;
    s2.seed = mix_seed(seed, 0x52);
    if (progress) progress("stage 2: " + std::to_string(s2.total_iters) + " iters");
    TrainOutput out2 =
        train_stage2(out1.params, {&corpora.single_turn, &corpora.refine, &replay}, codec, s2);
    return TrainedPipeline{std::move(base), std::move(out1), std::move(out2), std::move(replay)};
}

}  // namespace gridflow
