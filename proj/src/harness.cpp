#include "gridflow/harness.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <fstream>
#include <mutex>
#include <sstream>
#include <thread>

#include "gridflow/error.hpp"

namespace gridflow {

namespace {

constexpr uint64_t kKnowledgeStream = kEvalStream;
constexpr uint64_t kCompositionalStream = kEvalStream + 1'000'000;
constexpr uint64_t kEditStream = kEvalStream + 2'000'000;

void parallel_for(size_t n, int threads, const std::function<void(size_t)>& fn) {
    if (threads <= 1 || n < 2) {
        for (size_t i = 0; i < n; ++i) fn(i);
        return;
    }
    std::atomic<size_t> next{0};
    std::exception_ptr err;
    std::mutex err_mu;
    std::vector<std::thread> pool;
    for (int t = 0; t < threads; ++t) {
        pool.emplace_back([&]() {
            for (;;) {
                size_t i = next.fetch_add(1);
                if (i >= n) return;
                try {
                    fn(i);
                } catch (...) {
                    std::lock_guard<std::mutex> lock(err_mu);
                    if (!err) err = std::current_exception();
                    return;
                }
            }
        });
    }
    for (auto& th : pool) th.join();
    if (err) std::rethrow_exception(err);
}

uint64_t prompt_seed(const EvalSuite& suite, size_t index) {
    return mix_seed(suite.seed, 0xE7A1'0000 + index);
}

EvalReport aggregate(const std::string& suite_name, const std::string& mode,
                     const std::vector<std::string>& cats, const std::vector<double>& scores,
                     const EvalOptions& opts) {
    EvalReport r;
    r.suite = suite_name;
    r.mode = mode;
    r.checkpoint_id = opts.checkpoint_id;
    r.config_hash = opts.config_hash;
    std::map<std::string, double> sums;
    for (size_t i = 0; i < scores.size(); ++i) {
        sums[cats[i]] += scores[i];
        r.counts[cats[i]] += 1;
    }
    double total = 0.0;
    for (const auto& [cat, sum] : sums) {
        double mean = sum / r.counts[cat];
        r.per_category[cat] = mean;
        total += mean;
    }
    r.overall = r.per_category.empty() ? 0.0 : total / static_cast<double>(r.per_category.size());
    return r;
}

}  // namespace

EvalSuite make_knowledge_suite(int per_category, uint64_t seed, const RuleTable& rules,
                               GridConfig grid) {
    EvalSuite s;
    s.name = "knowledge";
    s.kind = SuiteKind::knowledge;
    s.seed = seed;
    s.stream_lo = kKnowledgeStream;
    uint64_t stream = kKnowledgeStream;
    for (int c = 0; c < kNumCategories; ++c) {
        for (int i = 0; i < per_category; ++i) {
            Rng rng(mix_seed(seed, stream++));
            auto cat = static_cast<KnowledgeCategory>(c);
            s.specs.push_back(sample_instruction(cat, rng, rules, grid));
            s.categories.push_back(category_name(cat));
        }
    }
    s.stream_hi = stream;
    return s;
}

EvalSuite make_compositional_suite(int per_kind, uint64_t seed, GridConfig grid) {
    EvalSuite s;
    s.name = "compositional";
    s.kind = SuiteKind::compositional;
    s.seed = seed;
    s.stream_lo = kCompositionalStream;
    uint64_t stream = kCompositionalStream;
    for (int k = 0; k < kNumCompositionalKinds; ++k) {
        for (int i = 0; i < per_kind; ++i) {
            Rng rng(mix_seed(seed, stream++));
            auto kind = static_cast<CompositionalKind>(k);
            s.specs.push_back(sample_compositional(kind, rng, grid));
            s.categories.push_back(compositional_name(kind));
        }
    }
    s.stream_hi = stream;
    return s;
}

EvalSuite make_edit_suite(int count, uint64_t seed, const RuleTable& rules, GridConfig grid,
                          SampleMode mode) {
    EvalSuite s;
    s.name = "edit";
    s.kind = SuiteKind::edit;
    s.seed = seed;
    s.stream_lo = kEditStream;
    uint64_t stream = kEditStream;
    for (int i = 0; i < count; ++i) {
        Rng rng(mix_seed(seed, stream++));
        s.edits.push_back(sample_edit_task(rng, rules, grid, mode));
        s.categories.push_back("edit");
    }
    s.stream_hi = stream;
    return s;
}

void check_seed_disjoint(const DatasetManifest& manifest, const EvalSuite& suite) {
    if (manifest.seed != suite.seed) return;  // different master seeds, different streams
    bool overlap = manifest.stream_lo < suite.stream_hi && suite.stream_lo < manifest.stream_hi;
    if (overlap)
        throw ConfigError("evaluation suite seed stream [" + std::to_string(suite.stream_lo) +
                          "," + std::to_string(suite.stream_hi) +
                          ") overlaps the training stream [" + std::to_string(manifest.stream_lo) +
                          "," + std::to_string(manifest.stream_hi) + ")");
}

std::string EvalReport::to_text() const {
    std::ostringstream os;
    os << "suite=" << suite << " mode=" << mode;
    if (!checkpoint_id.empty()) os << " checkpoint=" << checkpoint_id;
    os << '\n';
    for (const auto& [cat, mean] : per_category) {
        os << "  " << cat << ": " << mean << " (n=" << counts.at(cat) << ")\n";
    }
    os << "  overall: " << overall << '\n';
    if (preservation >= 0.0) os << "  preservation: " << preservation << '\n';
    return os.str();
}

void EvalReport::write_csv(const std::string& path) const {
    std::ofstream f(path, std::ios::binary);
    if (!f) throw IoError("cannot write " + path);
    f.precision(17);
    f << "suite,mode,checkpoint,config_hash,category,mean,count\n";
    int total = 0;
    for (const auto& [cat, n] : counts) total += n;
    for (const auto& [cat, mean] : per_category)
        f << suite << ',' << mode << ',' << checkpoint_id << ',' << config_hash << ',' << cat
          << ',' << mean << ',' << counts.at(cat) << '\n';
    f << suite << ',' << mode << ',' << checkpoint_id << ',' << config_hash << ",overall,"
      << overall << ',' << total << '\n';
    if (preservation >= 0.0)
        f << suite << ',' << mode << ',' << checkpoint_id << ',' << config_hash
          << ",preservation," << preservation << ",0\n";
}

EvalReport eval_t2i(const ModelParams& params, const CodecParams& codec, const Tokenizer& tok,
                    const EvalSuite& suite, InferenceMode mode, const RuleTable& rules,
                    const EvalOptions& opts) {
    if (suite.kind == SuiteKind::edit) throw InputError("eval_t2i wants a t2i suite");
    std::vector<double> scores(suite.specs.size(), 0.0);
    parallel_for(suite.specs.size(), opts.threads, [&](size_t i) {
        const auto& spec = suite.specs[i];
        Rollout r = run(params, codec, tok.encode(spec.text_words), mode, opts.interleave,
                        prompt_seed(suite, i));
        ConstraintSet cs = compile_constraints(spec, rules);
        scores[i] = oracle_score(r.final_image(), cs, rules);
    });
    return aggregate(suite.name, mode_name(mode), suite.categories, scores, opts);
}

EvalReport eval_compositional(const ModelParams& params, const CodecParams& codec,
                              const Tokenizer& tok, const EvalSuite& suite,
                              const RuleTable& rules, const EvalOptions& opts,
                              InferenceMode mode) {
    if (suite.kind != SuiteKind::compositional)
        throw InputError("eval_compositional wants a compositional suite");
    std::vector<double> scores(suite.specs.size(), 0.0);
    parallel_for(suite.specs.size(), opts.threads, [&](size_t i) {
        const auto& spec = suite.specs[i];
        Rollout r = run(params, codec, tok.encode(spec.text_words), mode, opts.interleave,
                        prompt_seed(suite, i));
        ConstraintSet cs = compile_constraints(spec, rules);
        scores[i] = oracle_score(r.final_image(), cs, rules) == 1.0 ? 1.0 : 0.0;
    });
    return aggregate(suite.name, mode_name(mode), suite.categories, scores, opts);
}

EvalReport eval_edit(const ModelParams& params, const CodecParams& codec, const Tokenizer& tok,
                     const EvalSuite& suite, InferenceMode mode, const RuleTable& rules,
                     const EvalOptions& opts) {
    if (suite.kind != SuiteKind::edit) throw InputError("eval_edit wants an edit suite");
    std::vector<double> scores(suite.edits.size(), 0.0);
    std::vector<double> preserved(suite.edits.size(), 0.0);
    parallel_for(suite.edits.size(), opts.threads, [&](size_t i) {
        const auto& task = suite.edits[i];
        GridImage source = render(task.source);
        Rollout r = edit(params, codec, source, tok.encode(task.text_words), mode,
                         opts.interleave, prompt_seed(suite, i));
        const GridImage& out = r.final_image();
        scores[i] = oracle_score(out, task.goal, rules);
        int same = 0, total = 0;
        for (int row = 0; row < source.h(); ++row)
            for (int col = 0; col < source.w(); ++col) {
                bool touched = false;
                for (const auto& c : task.touched)
                    if (c.row == row && c.col == col) touched = true;
                if (touched) continue;
                ++total;
                if (out.at(row, col) == source.at(row, col)) ++same;
            }
        preserved[i] = total == 0 ? 1.0 : static_cast<double>(same) / total;
    });
    EvalReport r = aggregate(suite.name, mode_name(mode), suite.categories, scores, opts);
    double p = 0.0;
    for (double v : preserved) p += v;
    r.preservation = preserved.empty() ? 1.0 : p / static_cast<double>(preserved.size());
    return r;
}

double random_baseline(const EvalSuite& suite, int num_grids, uint64_t seed,
                       const RuleTable& rules, GridConfig grid) {
    Rng rng(seed);
    std::vector<GridImage> grids;
    grids.reserve(static_cast<size_t>(num_grids));
    for (int i = 0; i < num_grids; ++i)
        grids.push_back(render(random_scene(static_cast<int>(rng.uniform_int(0, 8)), rng, grid)));
    std::vector<double> scores(suite.specs.size(), 0.0);
    for (size_t i = 0; i < suite.specs.size(); ++i) {
        ConstraintSet cs = compile_constraints(suite.specs[i], rules);
        double acc = 0.0;
        for (const auto& g : grids) acc += oracle_score(g, cs, rules);
        scores[i] = acc / static_cast<double>(grids.size());
    }
    EvalOptions opts;
    return aggregate(suite.name, "random", suite.categories, scores, opts).overall;
}

std::vector<AblationRow> run_ablation(const ModelParams& base, const ModelParams& trained,
                                      const CodecParams& codec, const Tokenizer& tok,
                                      const EvalSuite& suite, const RuleTable& rules,
                                      const EvalOptions& opts) {
    std::vector<AblationRow> rows;
    rows.push_back({"base", eval_t2i(base, codec, tok, suite, InferenceMode::direct, rules, opts)});
    rows.push_back(
        {"two_stage", eval_t2i(trained, codec, tok, suite, InferenceMode::direct, rules, opts)});
    rows.push_back(
        {"reasoning", eval_t2i(trained, codec, tok, suite, InferenceMode::reason, rules, opts)});
    rows.push_back({"refinement", eval_t2i(trained, codec, tok, suite,
                                           InferenceMode::reason_refine, rules, opts)});
    return rows;
}

std::string ablation_table(const std::vector<AblationRow>& rows) {
    std::ostringstream os;
    os << "method";
    if (!rows.empty())
        for (const auto& [cat, mean] : rows[0].report.per_category) os << '\t' << cat;
    os << "\toverall\n";
    for (const auto& row : rows) {
        os << row.name;
        for (const auto& [cat, mean] : row.report.per_category) os << '\t' << mean;
        os << '\t' << row.report.overall << '\n';
    }
    return os.str();
}

CorrelationResult correlation_study(const std::vector<std::pair<int, ModelParams>>& stage1_ckpts,
                                    const std::vector<const Dataset*>& stage2_data,
                                    const TrainConfig& stage2_cfg, const CodecParams& codec,
                                    const Tokenizer& tok, const EvalSuite& t2i_suite,
                                    const EvalSuite& edit_suite, const RuleTable& rules,
                                    const EvalOptions& opts) {
    if (stage1_ckpts.size() < 2)
        throw InputError("correlation_study wants at least two stage-1 checkpoints");
    CorrelationResult res;
    for (const auto& [step, ckpt] : stage1_ckpts) {
        TrainOutput out = train_stage2(ckpt, stage2_data, codec, stage2_cfg);
        CorrelationPoint p;
        p.stage1_step = step;
        p.edit_score =
            eval_edit(out.params, codec, tok, edit_suite, InferenceMode::reason, rules, opts)
                .overall;
        double reason =
            eval_t2i(out.params, codec, tok, t2i_suite, InferenceMode::reason, rules, opts)
                .overall;
        double refine = eval_t2i(out.params, codec, tok, t2i_suite, InferenceMode::reason_refine,
                                 rules, opts)
                            .overall;
        p.refine_gain = refine - reason;
        res.points.push_back(p);
    }
    std::vector<std::pair<double, double>> xy;
    for (const auto& p : res.points) xy.push_back({p.edit_score, p.refine_gain});
    res.spearman = spearman_rank_correlation(xy);
    return res;
}

double spearman_rank_correlation(const std::vector<std::pair<double, double>>& xy) {
    const size_t n = xy.size();
    if (n < 2) return 0.0;
    auto ranks = [&](bool second) {
        std::vector<double> vals(n);
        for (size_t i = 0; i < n; ++i) vals[i] = second ? xy[i].second : xy[i].first;
        std::vector<size_t> order(n);
        for (size_t i = 0; i < n; ++i) order[i] = i;
        std::stable_sort(order.begin(), order.end(),
                         [&](size_t a, size_t b) { return vals[a] < vals[b]; });
        std::vector<double> rank(n, 0.0);
        size_t i = 0;
        while (i < n) {
            size_t j = i;
            while (j + 1 < n && vals[order[j + 1]] == vals[order[i]]) ++j;
            double avg = (static_cast<double>(i) + static_cast<double>(j)) / 2.0 + 1.0;
            for (size_t k = i; k <= j; ++k) rank[order[k]] = avg;
            i = j + 1;
        }
        return rank;
    };
    auto rx = ranks(false);
    auto ry = ranks(true);
    double mx = 0, my = 0;
    for (size_t i = 0; i < n; ++i) {
        mx += rx[i];
        my += ry[i];
    }
    mx /= static_cast<double>(n);
    my /= static_cast<double>(n);
    double num = 0, dx = 0, dy = 0;
    for (size_t i = 0; i < n; ++i) {
        num += (rx[i] - mx) * (ry[i] - my);
        dx += (rx[i] - mx) * (rx[i] - mx);
        dy += (ry[i] - my) * (ry[i] - my);
    }
    if (dx == 0.0 || dy == 0.0) return 0.0;
    return num / std::sqrt(dx * dy);
}

}  // namespace gridflow
