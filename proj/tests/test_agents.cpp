#include <doctest.h>

#include <set>

#include "gridflow/agents.hpp"
#include "support/independent_oracle.hpp"

using namespace gridflow;
namespace ts = gridflow::testsupport;

namespace {
const RuleTable& rules() { return RuleTable::builtin(); }

InstructionSpec any_spec(uint64_t seed) {
    Rng rng(seed);
    auto cat = static_cast<KnowledgeCategory>(seed % kNumCategories);
    return sample_instruction(cat, rng, rules());
}
}  // namespace

TEST_CASE("corruption count zero reproduces the ground truth") {
    ScriptedCorruptor backend(rules(), CorruptorConfig{0, 0, false});
    auto spec = any_spec(3);
    Rng rng(9);
    Draft d = generate_draft(backend, spec, rng);
    auto cs = compile_constraints(spec, rules());
    CHECK(oracle_score(d.image, cs, rules()) == 1.0);
    CHECK(d.image == render(canonical_scene(spec, rules())));
}

TEST_CASE("corruptor hits the requested number of distinct constraints") {
    // Four independent presence constraints; two corruptions leave score 0.5.
    InstructionSpec spec;
    spec.category = KnowledgeCategory::spatial;
    spec.text_words = {"a", "red", "star", "and", "a", "blue", "circle", "and", "a", "green",
                       "square", "and", "a", "white", "diamond"};
    spec.constraints = {Constraint::present(Selector{Color::red, Shape::star}),
                        Constraint::present(Selector{Color::blue, Shape::circle}),
                        Constraint::present(Selector{Color::green, Shape::square}),
                        Constraint::present(Selector{Color::white, Shape::diamond})};
    spec.hidden = {false, false, false, false};
    spec.scene_seed = 77;

    ScriptedCorruptor backend(rules(), CorruptorConfig{2, 2, false});
    Rng rng(4);
    Draft d = generate_draft(backend, spec, rng);
    CHECK(oracle_score(d.image, compile_constraints(spec, rules()), rules()) ==
          doctest::Approx(0.5));
}

TEST_CASE("scripted drafts carry the ground-truth derivation") {
    ScriptedCorruptor backend(rules(), CorruptorConfig{1, 1, false});
    auto spec = any_spec(11);
    Rng rng(2);
    Draft d = generate_draft(backend, spec, rng);
    auto cs = compile_constraints(spec, rules());
    for (size_t i = 0; i < cs.size(); ++i) {
        if (!spec.hidden[i]) continue;
        auto ser = cs[i].serialize_words(rules());
        bool found = std::search(d.reasoning_words.begin(), d.reasoning_words.end(), ser.begin(),
                                 ser.end()) != d.reasoning_words.end();
        CHECK(found);
    }
}

TEST_CASE("perfect image verifies to an empty directive list") {
    auto spec = any_spec(21);
    GridImage img = render(canonical_scene(spec, rules()));
    CHECK(verify(img, spec, rules()).empty());
}

TEST_CASE("missing entity yields one object-presence add directive naming it") {
    InstructionSpec spec;
    spec.category = KnowledgeCategory::spatial;
    spec.text_words = {"a", "red", "star"};
    spec.constraints = {Constraint::present(Selector{Color::red, Shape::star}),
                        Constraint::present(Selector{Color::blue, Shape::circle})};
    spec.hidden = {false, false};
    spec.scene_seed = 5;
    Scene canon = canonical_scene(spec, rules());

    Scene broken = canon;
    for (size_t i = 0; i < broken.entities.size(); ++i)
        if (broken.entities[i].desc() == EntityDesc{Color::red, Shape::star}) {
            broken.entities.erase(broken.entities.begin() + static_cast<long>(i));
            break;
        }
    auto ds = verify(render(broken), spec, rules());
    REQUIRE(ds.size() == 1);
    CHECK(ds[0].dimension == Dimension::object_presence);
    CHECK(ds[0].action == EditAction::add);
    CHECK(ds[0].entity == EntityDesc{Color::red, Shape::star});
}

TEST_CASE("violated relation yields a move directive that repairs it") {
    auto spec = any_spec(2);  // spatial
    REQUIRE(spec.category == KnowledgeCategory::spatial);
    ScriptedCorruptor backend(rules(), CorruptorConfig{1, 1, false});
    Rng rng(8);
    Draft d = generate_draft(backend, spec, rng);
    auto cs = compile_constraints(spec, rules());
    REQUIRE(oracle_score(d.image, cs, rules()) < 1.0);
    auto ds = verify(d.image, spec, rules());
    REQUIRE(!ds.empty());
    GridImage fixed = refine_teacher(d.image, ds);
    CHECK(oracle_score(fixed, cs, rules()) == 1.0);
}

TEST_CASE("refine teacher applies directives exactly and rejects dangling ones") {
    Scene s;
    s.entities = {Entity{Shape::star, Color::red, 2, 2}};
    GridImage img = render(s);

    SUBCASE("empty list is the identity") { CHECK(refine_teacher(img, {}) == img); }

    SUBCASE("add places the named entity and leaves the rest untouched") {
        EditDirective d;
        d.action = EditAction::add;
        d.entity = EntityDesc{Color::blue, Shape::circle};
        d.cell = {4, 5};
        GridImage out = refine_teacher(img, {d});
        CHECK(GridImage::desc_of_code(out.at(4, 5)) == EntityDesc{Color::blue, Shape::circle});
        int diff = 0;
        for (int r = 0; r < out.h(); ++r)
            for (int c = 0; c < out.w(); ++c)
                if (out.at(r, c) != img.at(r, c)) ++diff;
        CHECK(diff == 1);
    }

    SUBCASE("dangling targets raise directive errors") {
        EditDirective d;
        d.action = EditAction::remove;
        d.entity = EntityDesc{Color::red, Shape::star};
        d.cell = {7, 7};
        CHECK_THROWS_AS(refine_teacher(img, {d}), DirectiveError);

        EditDirective m;
        m.action = EditAction::move;
        m.entity = EntityDesc{Color::red, Shape::star};
        m.from = {0, 0};
        m.cell = {1, 1};
        CHECK_THROWS_AS(refine_teacher(img, {m}), DirectiveError);
    }

    SUBCASE("conflicting add raises") {
        EditDirective d;
        d.action = EditAction::add;
        d.entity = EntityDesc{Color::blue, Shape::circle};
        d.cell = {2, 2};  // occupied by a different entity
        CHECK_THROWS_AS(refine_teacher(img, {d}), DirectiveError);
    }

    SUBCASE("re-applying an identical add is a no-op") {
        EditDirective d;
        d.action = EditAction::add;
        d.entity = EntityDesc{Color::red, Shape::star};
        d.cell = {2, 2};
        CHECK(refine_teacher(img, {d}) == img);
    }
}

TEST_CASE("judge retains strict improvements with full faithfulness only") {
    auto spec = any_spec(14);
    auto cs = compile_constraints(spec, rules());
    GridImage good = render(canonical_scene(spec, rules()));

    ScriptedCorruptor backend(rules(), CorruptorConfig{1, 2, false});
    Rng rng(3);
    Draft d = generate_draft(backend, spec, rng);
    auto ds = verify(d.image, spec, rules());
    GridImage refined = refine_teacher(d.image, ds);

    SUBCASE("improvement with all directives applied retains") {
        JudgeVerdict v = judge(d.image, refined, spec, ds, rules());
        CHECK(v.retain);
        CHECK(v.refined_score > v.initial_score);
        CHECK(v.directive_faithfulness == 1.0);
    }

    SUBCASE("ties are dropped") {
        JudgeVerdict v = judge(good, good, spec, {}, rules());
        CHECK(!v.retain);
        CHECK(v.refined_score == v.initial_score);
    }

    SUBCASE("an unapplied directive blocks retention even if the image improved") {
        std::vector<EditDirective> extra = ds;
        EditDirective phantom;
        phantom.action = EditAction::add;
        phantom.entity = EntityDesc{Color::purple, Shape::diamond};
        // A cell the refinement certainly left empty.
        phantom.cell = {11, 11};
        for (int c = 11; c >= 0; --c)
            if (refined.at(11, c) == GridImage::kEmpty) {
                phantom.cell = {11, c};
                break;
            }
        extra.push_back(phantom);
        JudgeVerdict v = judge(d.image, refined, spec, extra, rules());
        CHECK(v.refined_score > v.initial_score);
        CHECK(v.directive_faithfulness < 1.0);
        CHECK(!v.retain);
    }
}

TEST_CASE("pipeline closure: corrupted drafts always repair to oracle 1.0") {
    ScriptedCorruptor backend(rules(), CorruptorConfig{1, 3, true});
    std::vector<InstructionSpec> specs;
    for (uint64_t i = 0; i < 60; ++i) specs.push_back(any_spec(i));
    auto items = run_pipeline(backend, specs, rules(), 99, nullptr, 2);
    REQUIRE(items.size() == specs.size());
    for (const auto& item : items) {
        auto cs = compile_constraints(item.spec, rules());
        if (item.verdict.initial_score == 1.0) continue;  // nothing was corrupted
        CHECK(item.verdict.retain);
        CHECK(item.verdict.refined_score == 1.0);
        CHECK(item.verdict.directive_faithfulness == 1.0);
        // Independent re-check of judge soundness.
        CHECK(ts::independent_score(item.refined, cs, rules()) >
              ts::independent_score(item.draft.image, cs, rules()));
        CHECK(ts::independent_score(item.refined, cs, rules()) == 1.0);
    }
}

TEST_CASE("verifier completeness: one directive per violated constraint plus failed proxies") {
    ScriptedCorruptor backend(rules(), CorruptorConfig{1, 3, false});
    for (uint64_t i = 0; i < 40; ++i) {
        auto spec = any_spec(1000 + i);
        Rng rng(i);
        Draft d = generate_draft(backend, spec, rng);
        auto cs = compile_constraints(spec, rules());
        int violated = 0;
        for (const auto& c : cs)
            if (!check_constraint(d.image, c, rules())) ++violated;
        int proxies = scene_from_grid(d.image).entities.empty() && violated > 0 ? 1 : 0;
        auto ds = verify(d.image, spec, rules());
        CHECK(static_cast<int>(ds.size()) == violated + proxies);
    }
}

TEST_CASE("directive application never breaks an unmentioned satisfied constraint") {
    ScriptedCorruptor backend(rules(), CorruptorConfig{1, 2, false});
    for (uint64_t i = 0; i < 40; ++i) {
        auto spec = any_spec(2000 + i);
        Rng rng(i);
        Draft draft = generate_draft(backend, spec, rng);
        auto cs = compile_constraints(spec, rules());
        auto ds = verify(draft.image, spec, rules());
        GridImage refined = refine_teacher(draft.image, ds);
        for (const auto& c : cs)
            if (check_constraint(draft.image, c, rules()))
                CHECK(check_constraint(refined, c, rules()));
    }
}

TEST_CASE("clutter corruption exercises the style dimension end to end") {
    ScriptedCorruptor backend(rules(), CorruptorConfig{1, 1, true});
    bool saw_style = false;
    for (uint64_t i = 0; i < 200 && !saw_style; ++i) {
        auto spec = any_spec(3000 + i);
        Rng rng(i);
        Draft d = generate_draft(backend, spec, rng);
        for (const auto& dir : verify(d.image, spec, rules()))
            if (dir.dimension == Dimension::style_consistency) saw_style = true;
    }
    CHECK(saw_style);
}

TEST_CASE("aesthetic proxy fires on an empty draft") {
    auto spec = any_spec(10);
    GridImage blank(12, 12);
    auto ds = verify(blank, spec, rules());
    bool saw = false;
    for (const auto& d : ds)
        if (d.dimension == Dimension::aesthetic_quality) saw = true;
    CHECK(saw);
}

TEST_CASE("remote adapter: schema round trip through the loopback double") {
    auto spec = any_spec(4);
    LoopbackTransport transport(rules());
    RemoteAgentClient client(transport, RemotePolicy{1000, 2, 0});

    auto gen_resp = client.call(RemoteAgentClient::make_request("generator", spec, {}));
    REQUIRE(gen_resp.at("ok").get<bool>());
    GridImage draft = grid_from_json(gen_resp.at("images").at(0));

    auto ver_resp = client.call(RemoteAgentClient::make_request("verifier", spec, {draft}));
    std::vector<EditDirective> ds;
    for (const auto& dj : ver_resp.at("directives")) ds.push_back(EditDirective::from_json(dj));

    auto ref_resp = client.call(RemoteAgentClient::make_request("refiner", spec, {draft}, ds));
    GridImage refined = grid_from_json(ref_resp.at("images").at(0));

    auto judge_resp =
        client.call(RemoteAgentClient::make_request("judge", spec, {draft, refined}, ds));
    JudgeVerdict v = JudgeVerdict::from_json(judge_resp.at("verdict"));
    CHECK(v.refined_score == 1.0);

    // Structured parse failures are rejected: bad version.
    auto req = RemoteAgentClient::make_request("verifier", spec, {draft});
    req["version"] = "99";
    CHECK_THROWS_AS(client.call(req), PipelineError);
}

TEST_CASE("remote client retries per policy and then fails with a role tag") {
    auto spec = any_spec(6);
    SUBCASE("transient failures are retried away") {
        LoopbackTransport transport(rules(), /*fail_first=*/2);
        RemoteAgentClient client(transport, RemotePolicy{1000, 2, 0});
        auto resp = client.call(RemoteAgentClient::make_request("generator", spec, {}));
        CHECK(resp.at("ok").get<bool>());
    }
    SUBCASE("persistent failures surface as pipeline errors") {
        LoopbackTransport transport(rules(), /*fail_first=*/10);
        RemoteAgentClient client(transport, RemotePolicy{1000, 2, 0});
        try {
            client.call(RemoteAgentClient::make_request("generator", spec, {}));
            FAIL("expected failure");
        } catch (const PipelineError& e) {
            CHECK(e.role() == "generator");
        }
    }
}

TEST_CASE("pipeline audit log has one line per stage per sample, in order") {
    ScriptedCorruptor backend(rules(), CorruptorConfig{1, 2, false});
    std::vector<InstructionSpec> specs = {any_spec(1), any_spec(2), any_spec(3)};
    std::vector<std::string> lines;
    run_pipeline(backend, specs, rules(), 5, [&](const std::string& l) { lines.push_back(l); }, 2);
    REQUIRE(lines.size() == specs.size() * 4);
    for (size_t i = 0; i < specs.size(); ++i) {
        std::string tag = "sample=" + std::to_string(i);
        CHECK(lines[i * 4 + 0].find(tag + " stage=generate") == 0);
        CHECK(lines[i * 4 + 1].find(tag + " stage=verify") == 0);
        CHECK(lines[i * 4 + 2].find(tag + " stage=refine") == 0);
        CHECK(lines[i * 4 + 3].find(tag + " stage=judge") == 0);
    }
}

TEST_CASE("pipeline is deterministic and thread-count independent") {
    ScriptedCorruptor backend(rules(), CorruptorConfig{1, 3, true});
    std::vector<InstructionSpec> specs;
    for (uint64_t i = 0; i < 12; ++i) specs.push_back(any_spec(500 + i));
    auto a = run_pipeline(backend, specs, rules(), 31, nullptr, 1);
    auto b = run_pipeline(backend, specs, rules(), 31, nullptr, 2);
    REQUIRE(a.size() == b.size());
    for (size_t i = 0; i < a.size(); ++i) {
        CHECK(a[i].draft.image == b[i].draft.image);
        CHECK(a[i].refined == b[i].refined);
        CHECK(a[i].directives == b[i].directives);
        CHECK(a[i].verdict.retain == b[i].verdict.retain);
    }
}
