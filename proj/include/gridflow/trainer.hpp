#pragma once

#include <functional>
#include <map>
#include <string>
#include <vector>

#include "gridflow/corpus.hpp"

namespace gridflow {

struct TrainConfig {
    int stage = 1;
    int total_iters = 2000;
    int warmup_iters = 200;
    double lr_max = 3e-3;
    double lr_min = 3e-4;
    double lambda_text = 2.0;  // lambda weights for the combined objective
    double lambda_img = 1.0;
    int pack_len = 512;
    uint64_t seed = 1;
    double adam_beta1 = 0.9;  // optimizer hyperparameters are not pinned by the
    double adam_beta2 = 0.999;  // recipe; conventional defaults, recorded in config
    double adam_eps = 1e-8;
    double grad_clip = 0.0;  // global-norm clip; 0 disables
    bool debug_mask_check = false;
    int log_every = 50;
    std::vector<int> snapshot_steps;  // capture parameter copies at these steps

    void validate() const;
};

// Linear warmup 0 -> lr_max over warmup_iters, then cosine to lr_min at
// total_iters.
double lr_at(int step, const TrainConfig& cfg);

// Greedy first-fit packing of sample lengths into packs of at most pack_len.
// Samples are never split; a sample longer than pack_len is a hard error.
std::vector<std::vector<int>> pack_indices(const std::vector<int>& lengths, int pack_len);

// Layout for one pack: each sample gets its own segment, so attention never
// crosses samples. Noisy-slot randomness comes from noise_rng.
SequenceLayout build_pack(const std::vector<const CorpusSample*>& samples,
                          const CodecParams& codec, const ModelConfig& cfg, Rng& noise_rng);

struct AdamState {
    std::vector<double> m, v;
    int64_t t = 0;
};

// One Adam update. Parameters whose partition is in `frozen` stay bit-identical.
void adam_step(ModelParams& params, const std::vector<double>& grads, AdamState& state,
               double lr, const TrainConfig& cfg, bool freeze_und);

struct MetricRow {
    int step = 0;
    double lr = 0.0;
    double l_text = 0.0;
    double l_img = 0.0;
    double total = 0.0;
};

struct TrainOutput {
    ModelParams params;
    std::vector<MetricRow> metrics;
    std::vector<std::pair<int, ModelParams>> snapshots;
};

// Stage 1: generation-only training; the understanding partition is frozen
// and stays bit-identical. The dataset must carry no supervised text.
TrainOutput train_stage1(const ModelParams& init, const Dataset& data, const CodecParams& codec,
                         const TrainConfig& cfg);

// Stage 2: joint training over the interleaved corpora; all partitions update.
TrainOutput train_stage2(const ModelParams& init, const std::vector<const Dataset*>& datasets,
                         const CodecParams& codec, const TrainConfig& cfg);

// Replaces every unsupervised-span target (text targets and draft velocity
// targets) with random values and checks that loss and gradients are
// bit-identical. Throws on violation.
void verify_masking(const ModelParams& params, const SequenceLayout& layout, double lambda_text,
                    double lambda_img, Rng& rng);

struct CheckpointRecord {
    ModelParams params;
    CodecParams codec;
    nlohmann::json config;
    int step = 0;
    int rule_version = 1;
    std::vector<MetricRow> metrics;
};

void save_checkpoint(const CheckpointRecord& record, const std::string& dir);
CheckpointRecord load_checkpoint(const std::string& dir);

void write_metrics_csv(const std::vector<MetricRow>& rows, const std::string& path);

}  // namespace gridflow
