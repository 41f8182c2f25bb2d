#pragma once

#include <functional>
#include <string>

#include "gridflow/harness.hpp"

namespace gridflow {

// Resolved run configuration for the CLI and experiment drivers. Parsed
// strictly: unknown keys are rejected.
struct RunConfig {
    uint64_t seed = 1;
    std::string out = "runs/default";
    std::string rules_path;  // empty -> builtin table
    int threads = 2;
    GridConfig grid;

    ModelConfig model;  // vocab and latent_dim are derived at runtime; one
                        // image spans model.image_slots row-slots
    SamplerConfig sampler{8, 0};
    int max_text_len = 72;

    std::map<std::string, int> stage1_counts = {
        {"cultural", 60},  {"natural_science", 60}, {"spatial", 60}, {"temporal", 60},
        {"logical", 60},   {"compositional", 180},  {"edit", 160},
    };
    std::map<std::string, int> single_turn_counts = {
        {"cultural", 80},  {"natural_science", 80}, {"spatial", 80},
        {"temporal", 80},  {"logical", 80},
    };
    int refine_count = 200;
    CorruptorConfig corruptor{1, 2, false};

    TrainConfig stage1;
    TrainConfig stage2;
    int stage2_replay = 80;  // stage-1 samples replayed during stage 2

    int eval_per_category = 8;
    int eval_per_kind = 4;
    int eval_edit_count = 24;
    uint64_t eval_seed = 7777;

    std::vector<uint64_t> ablate_seeds = {1, 2, 3};
    std::vector<double> checkpoint_fracs = {0.25, 0.5, 0.75, 1.0};

    RunConfig();

    static RunConfig from_json(const nlohmann::json& j);
    static RunConfig load(const std::string& path);
    nlohmann::json to_json() const;
    uint64_t config_hash() const;

    const RuleTable& rules() const;  // loads rules_path or returns builtin

    ModelConfig model_config(const Tokenizer& tok) const;
};

// Writes resolved_config.json (with hash and seed) into an artifact directory.
void write_artifact_meta(const RunConfig& cfg, const std::string& dir);

struct Corpora {
    Dataset stage1;
    Dataset single_turn;
    Dataset refine;
};

using ProgressSink = std::function<void(const std::string&)>;

Corpora build_corpora(const RunConfig& cfg, uint64_t seed, const Tokenizer& tok,
                      const RuleTable& rules, const ProgressSink& progress = nullptr);

// Codec fit over every grid in the corpora plus seeded random scenes.
CodecParams fit_experiment_codec(const Corpora& corpora, uint64_t seed, GridConfig grid);

ModelParams make_model(const RunConfig& cfg, const Tokenizer& tok, uint64_t seed);

// Stage-2 dataset list: single-turn + refinement + a stage-1 replay slice
// (keeps direct-mode synthesis alive through joint training).
Dataset replay_slice(const Dataset& stage1, int count, uint64_t seed);

struct TrainedPipeline {
    ModelParams base;                                  // initialization
    TrainOutput s1;                                    // snapshots per checkpoint_fracs
    TrainOutput s2;                                    // final interleaved model
    Dataset replay;                                    // slice used during stage 2
};

TrainedPipeline train_pipeline(const RunConfig& cfg, uint64_t seed, const Corpora& corpora,
                               const CodecParams& codec, const Tokenizer& tok,
                               const ProgressSink& progress = nullptr);

}  // namespace gridflow
