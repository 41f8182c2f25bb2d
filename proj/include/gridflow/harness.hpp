#pragma once

#include <map>
#include <string>
#include <vector>

#include "gridflow/corpus.hpp"
#include "gridflow/interleave.hpp"
#include "gridflow/trainer.hpp"

namespace gridflow {

enum class SuiteKind { knowledge, compositional, edit };

// Held-out prompts, generated from an evaluation seed stream disjoint from
// every training stream.
struct EvalSuite {
    std::string name;
    SuiteKind kind = SuiteKind::knowledge;
    std::vector<InstructionSpec> specs;        // knowledge / compositional
    std::vector<std::string> categories;       // per-spec category label
    std::vector<EditTask> edits;               // edit suites
    uint64_t seed = 0;
    uint64_t stream_lo = 0, stream_hi = 0;

    size_t size() const { return kind == SuiteKind::edit ? edits.size() : specs.size(); }
};

EvalSuite make_knowledge_suite(int per_category, uint64_t seed, const RuleTable& rules,
                               GridConfig grid = {});
EvalSuite make_compositional_suite(int per_kind, uint64_t seed, GridConfig grid = {});
EvalSuite make_edit_suite(int count, uint64_t seed, const RuleTable& rules, GridConfig grid = {},
                          SampleMode mode = SampleMode::explicit_only);

// Throws unless the suite's seed stream cannot collide with the dataset's.
void check_seed_disjoint(const DatasetManifest& manifest, const EvalSuite& suite);

struct EvalReport {
    std::string suite;
    std::string mode;
    std::string checkpoint_id;
    uint64_t config_hash = 0;
    std::map<std::string, double> per_category;  // mean score per category
    std::map<std::string, int> counts;
    double overall = 0.0;       // unweighted mean of per-category means
    double preservation = -1.0; // edit suites: unrelated-cells-unchanged fraction

    std::string to_text() const;
    void write_csv(const std::string& path) const;
};

struct EvalOptions {
    InterleaveConfig interleave;
    int threads = 2;
    std::string checkpoint_id;
    uint64_t config_hash = 0;
};

// Rollout-and-score over a knowledge suite. Scores are oracle constraint
// fractions; deterministic given seeds.
EvalReport eval_t2i(const ModelParams& params, const CodecParams& codec, const Tokenizer& tok,
                    const EvalSuite& suite, InferenceMode mode, const RuleTable& rules,
                    const EvalOptions& opts = {});

// Pass/fail per prompt across the six compositional families.
EvalReport eval_compositional(const ModelParams& params, const CodecParams& codec,
                              const Tokenizer& tok, const EvalSuite& suite,
                              const RuleTable& rules, const EvalOptions& opts = {},
                              InferenceMode mode = InferenceMode::reason);

// Edit-goal satisfaction plus the preservation metric (fraction of cells
// outside the touched set left byte-identical to the source).
EvalReport eval_edit(const ModelParams& params, const CodecParams& codec, const Tokenizer& tok,
                     const EvalSuite& suite, InferenceMode mode, const RuleTable& rules,
                     const EvalOptions& opts = {});

// Monte-Carlo oracle base rate of random grids against a suite.
double random_baseline(const EvalSuite& suite, int num_grids, uint64_t seed,
                       const RuleTable& rules, GridConfig grid = {});

struct AblationRow {
    std::string name;
    EvalReport report;
};

// The four-row ladder: base (untrained, direct), two-stage (trained, direct),
// + reasoning, + refinement. Emits the table; asserts nothing.
std::vector<AblationRow> run_ablation(const ModelParams& base, const ModelParams& trained,
                                      const CodecParams& codec, const Tokenizer& tok,
                                      const EvalSuite& suite, const RuleTable& rules,
                                      const EvalOptions& opts = {});
std::string ablation_table(const std::vector<AblationRow>& rows);

struct CorrelationPoint {
    int stage1_step = 0;
    double edit_score = 0.0;
    double refine_gain = 0.0;  // overall(reason_refine) - overall(reason)
};

struct CorrelationResult {
    std::vector<CorrelationPoint> points;
    double spearman = 0.0;
};

// Applies an identical stage-2 recipe to each stage-1 checkpoint, then pairs
// the edit-suite score with the refinement gain on the knowledge suite.
CorrelationResult correlation_study(const std::vector<std::pair<int, ModelParams>>& stage1_ckpts,
                                    const std::vector<const Dataset*>& stage2_data,
                                    const TrainConfig& stage2_cfg, const CodecParams& codec,
                                    const Tokenizer& tok, const EvalSuite& t2i_suite,
                                    const EvalSuite& edit_suite, const RuleTable& rules,
                                    const EvalOptions& opts = {});

// Rank correlation with average ranks for ties; 0 when either side is constant.
double spearman_rank_correlation(const std::vector<std::pair<double, double>>& xy);

}  // namespace gridflow
