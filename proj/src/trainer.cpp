#include "gridflow/trainer.hpp"

#include <cmath>
#include <cstring>
#include <filesystem>
#include <fstream>

#include "gridflow/error.hpp"

namespace gridflow {

namespace fs = std::filesystem;

void TrainConfig::validate() const {
    if (stage != 1 && stage != 2) throw ConfigError("train: stage must be 1 or 2");
    if (total_iters < 0) throw ConfigError("train: total_iters must be >= 0");
    if (warmup_iters < 0 || warmup_iters > total_iters)
        throw ConfigError("train: warmup_iters must lie in [0, total_iters]");
    if (lr_min > lr_max) throw ConfigError("train: lr_min must be <= lr_max");
    if (lambda_text < 0 || lambda_img < 0) throw ConfigError("train: lambdas must be >= 0");
    if (pack_len < 2) throw ConfigError("train: pack_len too small");
}

double lr_at(int step, const TrainConfig& cfg) {
    if (step < 0) throw InputError("lr_at: negative step");
    if (cfg.warmup_iters > 0 && step < cfg.warmup_iters)
        return cfg.lr_max * static_cast<double>(step) / static_cast<double>(cfg.warmup_iters);
    if (step >= cfg.total_iters) return cfg.lr_min;
    double span = static_cast<double>(cfg.total_iters - cfg.warmup_iters);
    double progress = span <= 0 ? 1.0 : static_cast<double>(step - cfg.warmup_iters) / span;
    return cfg.lr_min +
           0.5 * (cfg.lr_max - cfg.lr_min) * (1.0 + std::cos(3.14159265358979323846 * progress));
}

std::vector<std::vector<int>> pack_indices(const std::vector<int>& lengths, int pack_len) {
    std::vector<std::vector<int>> packs;
    std::vector<int> loads;
    for (size_t i = 0; i < lengths.size(); ++i) {
        int len = lengths[i];
        if (len > pack_len)
            throw Error("pack_sequences: sample of length " + std::to_string(len) +
                        " exceeds pack_len " + std::to_string(pack_len));
        bool placed = false;
        for (size_t p = 0; p < packs.size(); ++p) {
            if (loads[p] + len <= pack_len) {
                packs[p].push_back(static_cast<int>(i));
                loads[p] += len;
                placed = true;
                break;
            }
        }
        if (!placed) {
            packs.push_back({static_cast<int>(i)});
            loads.push_back(len);
        }
    }
    return packs;
}

SequenceLayout build_pack(const std::vector<const CorpusSample*>& samples,
                          const CodecParams& codec, const ModelConfig& cfg, Rng& noise_rng) {
    SequenceLayout layout;
    int segment = 0;
    for (const CorpusSample* s : samples)
        append_sample_to_layout(layout, *s, codec, cfg, noise_rng, segment++);
    return layout;
}

void adam_step(ModelParams& params, const std::vector<double>& grads, AdamState& state,
               double lr, const TrainConfig& cfg, bool freeze_und) {
    if (grads.size() != params.size()) throw InputError("adam: gradient size mismatch");
    if (state.m.empty()) {
        state.m.assign(params.size(), 0.0);
        state.v.assign(params.size(), 0.0);
    }
    double clip_scale = 1.0;
    if (cfg.grad_clip > 0.0) {
        double norm2 = 0.0;
        for (double gv : grads) norm2 += gv * gv;
        double norm = std::sqrt(norm2);
        if (norm > cfg.grad_clip) clip_scale = cfg.grad_clip / norm;
    }
    ++state.t;
    double bc1 = 1.0 - std::pow(cfg.adam_beta1, static_cast<double>(state.t));
    double bc2 = 1.0 - std::pow(cfg.adam_beta2, static_cast<double>(state.t));
    auto& w = params.flat();
    for (size_t i = 0; i < w.size(); ++i) {
        if (freeze_und && params.partition_of(i) == Partition::und) continue;
        double gi = grads[i] * clip_scale;
        state.m[i] = cfg.adam_beta1 * state.m[i] + (1.0 - cfg.adam_beta1) * gi;
        state.v[i] = cfg.adam_beta2 * state.v[i] + (1.0 - cfg.adam_beta2) * gi * gi;
        double mhat = state.m[i] / bc1;
        double vhat = state.v[i] / bc2;
        w[i] -= lr * mhat / (std::sqrt(vhat) + cfg.adam_eps);
    }
}

void verify_masking(const ModelParams& params, const SequenceLayout& layout, double lambda_text,
                    double lambda_img, Rng& rng) {
    std::vector<double> g0, g1;
    LossBreakdown a = loss_and_grad(params, layout, lambda_text, lambda_img, g0);
    SequenceLayout scrambled = layout;
    for (auto& p : scrambled.positions) {
        if (p.role != PosRole::unsupervised && p.role != PosRole::context) continue;
        if (p.kind == PosKind::text) {
            p.target = static_cast<int>(rng.uniform_int(0, params.config().vocab - 1));
        } else {
            p.u_target = rng.normal_vec(static_cast<size_t>(params.config().latent_dim));
        }
    }
    LossBreakdown b = loss_and_grad(params, scrambled, lambda_text, lambda_img, g1);
    if (std::memcmp(&a.total, &b.total, sizeof(double)) != 0 ||
        std::memcmp(g0.data(), g1.data(), g0.size() * sizeof(double)) != 0)
        throw Error("masking violated: unsupervised targets leaked into loss or gradients");
}

namespace {

TrainOutput train_loop(const ModelParams& init, std::vector<const CorpusSample*> samples,
                       const CodecParams& codec, const TrainConfig& cfg) {
    cfg.validate();
    TrainOutput out{init, {}, {}};
    if (samples.empty()) {
        if (cfg.total_iters > 0) throw InputError("train: empty dataset");
        return out;
    }

    Rng order_rng(mix_seed(cfg.seed, 0xA11CE));
    order_rng.shuffle(samples);

    std::vector<int> lengths;
    lengths.reserve(samples.size());
    for (const auto* s : samples) lengths.push_back(s->length(init.config().image_slots));
    auto packs = pack_indices(lengths, cfg.pack_len);

    AdamState adam;
    std::vector<double> grads;
    Rng mask_rng(mix_seed(cfg.seed, 0x3A5C));
    const bool freeze_und = cfg.stage == 1;

    for (int step = 0; step < cfg.total_iters; ++step) {
        const auto& pack = packs[static_cast<size_t>(step) % packs.size()];
        std::vector<const CorpusSample*> pack_samples;
        pack_samples.reserve(pack.size());
        for (int idx : pack) pack_samples.push_back(samples[static_cast<size_t>(idx)]);
        Rng noise_rng(mix_seed(cfg.seed, 0xB0B0 + static_cast<uint64_t>(step)));
        SequenceLayout layout = build_pack(pack_samples, codec, init.config(), noise_rng);

        LossBreakdown lb =
            loss_and_grad(out.params, layout, cfg.lambda_text, cfg.lambda_img, grads);
        if (cfg.debug_mask_check && step % 25 == 0)
            verify_masking(out.params, layout, cfg.lambda_text, cfg.lambda_img, mask_rng);

        double lr = lr_at(step, cfg);
        adam_step(out.params, grads, adam, lr, cfg, freeze_und);

        if (step % std::max(1, cfg.log_every) == 0 || step + 1 == cfg.total_iters)
            out.metrics.push_back({step, lr, lb.text, lb.image, lb.total});
        for (int snap : cfg.snapshot_steps)
            if (snap == step + 1) out.snapshots.push_back({step + 1, out.params});
    }
    return out;
}

}  // namespace

TrainOutput train_stage1(const ModelParams& init, const Dataset& data, const CodecParams& codec,
                         const TrainConfig& cfg) {
    if (cfg.stage != 1) throw ConfigError("train_stage1: config stage must be 1");
    std::vector<const CorpusSample*> samples;
    for (const auto& s : data.samples) {
        if (s.type != SampleType::stage1 && s.type != SampleType::stage1_edit)
            throw InputError("train_stage1: dataset contains reasoning samples");
        for (const auto& seg : s.segments)
            if (seg.kind == PosKind::text && seg.role == PosRole::supervised)
                throw InputError("train_stage1: dataset has supervised text");
        samples.push_back(&s);
    }
    return train_loop(init, std::move(samples), codec, cfg);
}

TrainOutput train_stage2(const ModelParams& init, const std::vector<const Dataset*>& datasets,
                         const CodecParams& codec, const TrainConfig& cfg) {
    if (cfg.stage != 2) throw ConfigError("train_stage2: config stage must be 2");
    std::vector<const CorpusSample*> samples;
    for (const Dataset* ds : datasets)
        for (const auto& s : ds->samples) samples.push_back(&s);
    return train_loop(init, std::move(samples), codec, cfg);
}

// ---------------------------------------------------------------------------
// Checkpoints

void write_metrics_csv(const std::vector<MetricRow>& rows, const std::string& path) {
    std::ofstream f(path, std::ios::binary);
    if (!f) throw IoError("cannot write " + path);
    f << "step,lr,l_text,l_img,total\n";
    f.precision(17);
    for (const auto& r : rows)
        f << r.step << ',' << r.lr << ',' << r.l_text << ',' << r.l_img << ',' << r.total << '\n';
}

void save_checkpoint(const CheckpointRecord& record, const std::string& dir) {
    fs::create_directories(dir);
    {
        std::ofstream f(dir + "/params.bin", std::ios::binary);
        if (!f) throw IoError("cannot write " + dir + "/params.bin");
        record.params.save(f);
    }
    {
        std::ofstream f(dir + "/codec.bin", std::ios::binary);
        if (!f) throw IoError("cannot write " + dir + "/codec.bin");
        record.codec.save(f);
    }
    {
        nlohmann::json meta;
        meta["config"] = record.config;
        meta["step"] = record.step;
        meta["rule_version"] = record.rule_version;
        std::ofstream f(dir + "/meta.json", std::ios::binary);
        if (!f) throw IoError("cannot write " + dir + "/meta.json");
        f << meta.dump(2) << '\n';
    }
    write_metrics_csv(record.metrics, dir + "/metrics.csv");
}

CheckpointRecord load_checkpoint(const std::string& dir) {
    std::ifstream pf(dir + "/params.bin", std::ios::binary);
    if (!pf) throw IoError("cannot read " + dir + "/params.bin");
    std::ifstream cf(dir + "/codec.bin", std::ios::binary);
    if (!cf) throw IoError("cannot read " + dir + "/codec.bin");
    std::ifstream mf(dir + "/meta.json", std::ios::binary);
    if (!mf) throw IoError("cannot read " + dir + "/meta.json");
    nlohmann::json meta;
    mf >> meta;
    CheckpointRecord rec{ModelParams::load(pf), CodecParams::load(cf), meta.at("config"),
                         meta.at("step").get<int>(), meta.at("rule_version").get<int>(), {}};
    return rec;
}

}  // namespace gridflow
