#include <doctest.h>

#include <cmath>

#include "gridflow/harness.hpp"

using namespace gridflow;

namespace {
const RuleTable& rules() { return RuleTable::builtin(); }
const Tokenizer& tok() {
    static Tokenizer t = Tokenizer::build(rules());
    return t;
}

struct Fixture {
    CodecParams codec;
    ModelParams params;

    Fixture() : codec(fit()), params(make()) {}

    CodecParams fit() {
        Rng rng(2);
        std::vector<GridImage> grids;
        for (int i = 0; i < 80; ++i)
            grids.push_back(render(random_scene(static_cast<int>(rng.uniform_int(0, 8)), rng)));
        return fit_codec(grids, compact_codec_dim(GridConfig{}));
    }
    ModelParams make() {
        ModelConfig cfg;
        cfg.vocab = tok().vocab_size();
        cfg.d_model = 32;
        cfg.layers = 2;
        cfg.heads = 4;
        cfg.ffn_hidden = 48;
        cfg.latent_dim = compact_codec_dim(GridConfig{});
        cfg.image_slots = 12;
        cfg.latent_hidden = 160;
        cfg.max_pos = 224;
        ModelParams p(cfg);
        Rng rng(10);
        p.init(rng);
        return p;
    }
    EvalOptions opts() {
        EvalOptions o;
        o.interleave = InterleaveConfig{SamplerConfig{2, 0}, 20};
        o.threads = 2;
        return o;
    }
};
}  // namespace

TEST_CASE("suites are seed-stream disjoint from training corpora") {
    EvalSuite suite = make_knowledge_suite(2, 42, rules());
    DatasetManifest manifest;
    manifest.seed = 42;
    manifest.stream_lo = kStage1Stream;
    manifest.stream_hi = kStage1Stream + 500;
    check_seed_disjoint(manifest, suite);  // disjoint: no throw

    DatasetManifest clash;
    clash.seed = 42;
    clash.stream_lo = suite.stream_lo;
    clash.stream_hi = suite.stream_lo + 1;
    CHECK_THROWS_AS(check_seed_disjoint(clash, suite), ConfigError);

    clash.seed = 43;  // different master seed: different streams entirely
    check_seed_disjoint(clash, suite);
}

TEST_CASE("suite construction is deterministic and category-balanced") {
    EvalSuite a = make_knowledge_suite(3, 7, rules());
    EvalSuite b = make_knowledge_suite(3, 7, rules());
    REQUIRE(a.specs.size() == static_cast<size_t>(3 * kNumCategories));
    for (size_t i = 0; i < a.specs.size(); ++i) {
        CHECK(a.specs[i].text_words == b.specs[i].text_words);
        CHECK(a.categories[i] == b.categories[i]);
    }
    EvalSuite comp = make_compositional_suite(2, 7);
    CHECK(comp.specs.size() == static_cast<size_t>(2 * kNumCompositionalKinds));
    EvalSuite ed = make_edit_suite(5, 7, rules());
    CHECK(ed.edits.size() == 5);
}

TEST_CASE("reports aggregate as unweighted means of category means") {
    Fixture fx;
    EvalSuite suite = make_knowledge_suite(2, 99, rules());
    EvalReport r = eval_t2i(fx.params, fx.codec, tok(), suite, InferenceMode::direct, rules(),
                            fx.opts());
    CHECK(r.per_category.size() == static_cast<size_t>(kNumCategories));
    double mean = 0.0;
    for (const auto& [cat, v] : r.per_category) {
        CHECK(v >= 0.0);
        CHECK(v <= 1.0);
        mean += v;
    }
    CHECK(r.overall == doctest::Approx(mean / kNumCategories));
    // Determinism under a fixed seed.
    EvalReport r2 = eval_t2i(fx.params, fx.codec, tok(), suite, InferenceMode::direct, rules(),
                             fx.opts());
    CHECK(r.overall == r2.overall);
    CHECK(r.per_category == r2.per_category);
}

TEST_CASE("untrained params score near the random-grid base rate") {
    Fixture fx;
    EvalSuite suite = make_knowledge_suite(4, 3, rules());
    EvalReport r =
        eval_t2i(fx.params, fx.codec, tok(), suite, InferenceMode::direct, rules(), fx.opts());
    double base = random_baseline(suite, 1000, 17, rules());
    CHECK(std::abs(r.overall - base) <= 0.05);
}

TEST_CASE("compositional eval scores pass/fail per prompt") {
    Fixture fx;
    EvalSuite suite = make_compositional_suite(2, 5);
    EvalReport r = eval_compositional(fx.params, fx.codec, tok(), suite, rules(), fx.opts());
    CHECK(r.per_category.size() == static_cast<size_t>(kNumCompositionalKinds));
    for (const auto& [cat, v] : r.per_category) {
        CHECK(v >= 0.0);
        CHECK(v <= 1.0);
    }
}

TEST_CASE("edit eval reports goal score and preservation separately") {
    Fixture fx;
    EvalSuite suite = make_edit_suite(6, 5, rules());
    EvalReport r =
        eval_edit(fx.params, fx.codec, tok(), suite, InferenceMode::reason, rules(), fx.opts());
    CHECK(r.preservation >= 0.0);
    CHECK(r.preservation <= 1.0);
    CHECK(r.overall >= 0.0);
    CHECK(r.overall <= 1.0);
}

TEST_CASE("preservation is exactly 1.0 when output matches source outside touched cells") {
    // Construct the metric's edge case by hand: identical output.
    EvalSuite suite = make_edit_suite(1, 9, rules());
    const EditTask& task = suite.edits[0];
    GridImage source = render(task.source);
    int same = 0, total = 0;
    for (int r = 0; r < source.h(); ++r)
        for (int c = 0; c < source.w(); ++c) {
            bool touched = false;
            for (const auto& cell : task.touched)
                if (cell.row == r && cell.col == c) touched = true;
            if (touched) continue;
            ++total;
            ++same;
        }
    CHECK(same == total);
}

TEST_CASE("ablation emits four rows in ladder order") {
    Fixture fx;
    EvalSuite suite = make_knowledge_suite(1, 31, rules());
    auto rows = run_ablation(fx.params, fx.params, fx.codec, tok(), suite, rules(), fx.opts());
    REQUIRE(rows.size() == 4);
    CHECK(rows[0].name == "base");
    CHECK(rows[1].name == "two_stage");
    CHECK(rows[2].name == "reasoning");
    CHECK(rows[3].name == "refinement");
    std::string table = ablation_table(rows);
    CHECK(table.find("base") != std::string::npos);
    CHECK(table.find("overall") != std::string::npos);
}

TEST_CASE("spearman rank correlation") {
    CHECK(spearman_rank_correlation({{1, 1}, {2, 2}, {3, 3}}) == doctest::Approx(1.0));
    CHECK(spearman_rank_correlation({{1, 3}, {2, 2}, {3, 1}}) == doctest::Approx(-1.0));
    // Monotone but nonlinear is still a perfect rank match.
    CHECK(spearman_rank_correlation({{1, 1}, {2, 10}, {3, 1000}}) == doctest::Approx(1.0));
    // Constant side: defined as zero.
    CHECK(spearman_rank_correlation({{1, 5}, {2, 5}, {3, 5}}) == doctest::Approx(0.0));
    // Ties get average ranks.
    double r = spearman_rank_correlation({{1, 1}, {2, 1}, {3, 2}});
    CHECK(r > 0.0);
    CHECK(r < 1.0);
    CHECK(spearman_rank_correlation({{1, 1}}) == 0.0);
}

TEST_CASE("scores stay in [0,1] across suites and modes") {
    Fixture fx;
    EvalSuite suite = make_knowledge_suite(1, 13, rules());
    for (auto mode : {InferenceMode::direct, InferenceMode::reason, InferenceMode::reason_refine}) {
        EvalReport r = eval_t2i(fx.params, fx.codec, tok(), suite, mode, rules(), fx.opts());
        CHECK(r.overall >= 0.0);
        CHECK(r.overall <= 1.0);
    }
}
