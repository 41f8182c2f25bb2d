#pragma once

#include <map>
#include <string>
#include <vector>

#include "gridflow/agents.hpp"
#include "gridflow/model.hpp"
#include "gridflow/text.hpp"

namespace gridflow {

// Seed-stream bases; instruction sampling for sample i of a corpus uses
// Rng(mix_seed(seed, base + i)). Evaluation suites draw from kEvalStream and
// up, so train/eval disjointness is checkable from manifests.
inline constexpr uint64_t kStage1Stream = 1'000'000;
inline constexpr uint64_t kSingleTurnStream = 2'000'000;
inline constexpr uint64_t kRefineStream = 3'000'000;
inline constexpr uint64_t kEvalStream = 1'000'000'000;

enum class SampleType : uint8_t { stage1, stage1_edit, single_turn, refine };
const std::string& sample_type_name(SampleType t);
SampleType sample_type_from_name(const std::string& name);

struct Segment {
    PosKind kind = PosKind::text;
    PosRole role = PosRole::context;
    std::vector<int> tokens;
    GridImage grid;
};

struct CorpusSample {
    SampleType type = SampleType::stage1;
    std::string category;
    int id = 0;
    std::vector<Segment> segments;
    std::vector<EditDirective> directives;  // refine samples only
    JudgeVerdict verdict;                   // refine samples only

    nlohmann::json to_json() const;
    static CorpusSample from_json(const nlohmann::json& j);
    // Structural mask check: segment kinds/roles must match the sample type.
    void validate() const;
    int length(int image_slots = 1) const;  // layout positions this sample occupies
};

struct DatasetManifest {
    std::string schema_version = "1";
    int rule_version = 1;
    uint64_t seed = 0;
    uint64_t stream_lo = 0;
    uint64_t stream_hi = 0;  // exclusive
    int grid_h = 12;
    int grid_w = 12;
    std::map<std::string, int> counts;
    int rejects = 0;
    double retention_rate = 1.0;

    nlohmann::json to_json() const;
    static DatasetManifest from_json(const nlohmann::json& j);
};

struct Dataset {
    std::vector<CorpusSample> samples;
    DatasetManifest manifest;
    std::vector<std::string> reject_log;
};

// Stage-1 corpus: reasoning-free synthesis pairs. Keys: the five knowledge
// category names (sampled as fully explicit instructions), "compositional",
// and "edit".
Dataset build_stage1(const std::map<std::string, int>& counts, uint64_t seed,
                     const Tokenizer& tok, const RuleTable& rules, GridConfig grid = {});

// Single-turn knowledge corpus: (C, T, I) with the derivation supervised.
// Every sample has at least one hidden constraint, passes the oracle filter
// and serializes each hidden constraint inside T. Rejections are logged.
Dataset build_single_turn(const std::map<std::string, int>& counts, uint64_t seed,
                          const Tokenizer& tok, const RuleTable& rules, GridConfig grid = {});

// Interleaved refinement corpus via the scripted agent pipeline; only
// retain=true samples are emitted, retention rate lands in the manifest.
Dataset build_refinement(int count, const CorruptorConfig& corruptor, uint64_t seed,
                         const Tokenizer& tok, const RuleTable& rules, GridConfig grid = {},
                         int threads = 1, const AuditSink& audit = nullptr);

// One sample per line, schema-versioned; manifest sidecar at
// `<path>.manifest.json`. Reject log (if any) at `<path>.rejects.log`.
void write_jsonl(const Dataset& ds, const std::string& path);
Dataset read_jsonl(const std::string& path);

// Training layout for one sample. Supervised images become noisy slots with
// velocity targets drawn through `noise_rng`; context/unsupervised images
// enter as clean slots (t = 1). Latents are recomputed from grids here, so
// the files stay codec-independent.
SequenceLayout sample_layout(const CorpusSample& sample, const CodecParams& codec,
                             const ModelConfig& cfg, Rng& noise_rng, int segment = 0);
void append_sample_to_layout(SequenceLayout& layout, const CorpusSample& sample,
                             const CodecParams& codec, const ModelConfig& cfg, Rng& noise_rng,
                             int segment);

}  // namespace gridflow
