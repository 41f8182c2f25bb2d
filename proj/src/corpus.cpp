#include "gridflow/corpus.hpp"

#include <algorithm>
#include <fstream>
#include <sstream>

#include "gridflow/error.hpp"
#include "gridflow/flow.hpp"

namespace gridflow {

using nlohmann::json;

const std::string& sample_type_name(SampleType t) {
    static const std::vector<std::string> names = {"stage1", "stage1_edit", "single_turn",
                                                   "refine"};
    return names[static_cast<size_t>(t)];
}

SampleType sample_type_from_name(const std::string& name) {
    for (int i = 0; i < 4; ++i)
        if (sample_type_name(static_cast<SampleType>(i)) == name)
            return static_cast<SampleType>(i);
    throw InputError("unknown sample type '" + name + "'");
}

namespace {

const char* role_name(PosRole r) {
    switch (r) {
        case PosRole::context: return "context";
        case PosRole::supervised: return "supervised";
        case PosRole::unsupervised: return "unsupervised";
    }
    throw InputError("bad role");
}

PosRole role_from_name(const std::string& s) {
    if (s == "context") return PosRole::context;
    if (s == "supervised") return PosRole::supervised;
    if (s == "unsupervised") return PosRole::unsupervised;
    throw InputError("unknown role '" + s + "'");
}

}  // namespace

json CorpusSample::to_json() const {
    json j;
    j["v"] = "1";
    j["type"] = sample_type_name(type);
    j["category"] = category;
    j["id"] = id;
    j["segments"] = json::array();
    for (const auto& s : segments) {
        json sj;
        sj["kind"] = s.kind == PosKind::text ? "text" : "image";
        sj["role"] = role_name(s.role);
        if (s.kind == PosKind::text) sj["tokens"] = s.tokens;
        else sj["grid"] = grid_to_json(s.grid);
        j["segments"].push_back(std::move(sj));
    }
    if (type == SampleType::refine) {
        j["directives"] = json::array();
        for (const auto& d : directives) j["directives"].push_back(d.to_json());
        j["verdict"] = verdict.to_json();
    }
    return j;
}

CorpusSample CorpusSample::from_json(const json& j) {
    if (j.at("v").get<std::string>() != "1")
        throw IoError("corpus sample: unsupported schema version '" +
                      j.at("v").get<std::string>() + "'");
    CorpusSample s;
    s.type = sample_type_from_name(j.at("type").get<std::string>());
    s.category = j.at("category").get<std::string>();
    s.id = j.at("id").get<int>();
    for (const auto& sj : j.at("segments")) {
        Segment seg;
        seg.kind = sj.at("kind").get<std::string>() == "text" ? PosKind::text : PosKind::image;
        seg.role = role_from_name(sj.at("role").get<std::string>());
        if (seg.kind == PosKind::text) seg.tokens = sj.at("tokens").get<std::vector<int>>();
        else seg.grid = grid_from_json(sj.at("grid"));
        s.segments.push_back(std::move(seg));
    }
    if (s.type == SampleType::refine) {
        for (const auto& dj : j.at("directives"))
            s.directives.push_back(EditDirective::from_json(dj));
        s.verdict = JudgeVerdict::from_json(j.at("verdict"));
    }
    s.validate();
    return s;
}

void CorpusSample::validate() const {
    auto expect = [&](std::initializer_list<std::pair<PosKind, PosRole>> shape) {
        if (segments.size() != shape.size())
            throw InputError("sample " + sample_type_name(type) + ": wrong segment count");
        size_t i = 0;
        for (const auto& [kind, role] : shape) {
            if (segments[i].kind != kind || segments[i].role != role)
                throw InputError("sample " + sample_type_name(type) + ": segment " +
                                 std::to_string(i) + " has wrong kind/role labels");
            ++i;
        }
    };
    switch (type) {
        case SampleType::stage1:
            expect({{PosKind::text, PosRole::context}, {PosKind::image, PosRole::supervised}});
            break;
        case SampleType::stage1_edit:
            expect({{PosKind::image, PosRole::context},
                    {PosKind::text, PosRole::context},
                    {PosKind::image, PosRole::supervised}});
            break;
        case SampleType::single_turn:
            expect({{PosKind::text, PosRole::context},
                    {PosKind::text, PosRole::supervised},
                    {PosKind::image, PosRole::supervised}});
            break;
        case SampleType::refine:
            expect({{PosKind::text, PosRole::context},
                    {PosKind::text, PosRole::unsupervised},
                    {PosKind::image, PosRole::unsupervised},
                    {PosKind::text, PosRole::supervised},
                    {PosKind::image, PosRole::supervised}});
            if (!verdict.retain) throw InputError("refine sample without retained verdict");
            break;
    }
}

int CorpusSample::length(int image_slots) const {
    int n = 0;
    for (const auto& s : segments)
        n += s.kind == PosKind::text ? static_cast<int>(s.tokens.size()) + 1 : image_slots;
    return n;
}

json DatasetManifest::to_json() const {
    json j;
    j["schema_version"] = schema_version;
    j["rule_version"] = rule_version;
    j["seed"] = seed;
    j["stream_lo"] = stream_lo;
    j["stream_hi"] = stream_hi;
    j["grid_h"] = grid_h;
    j["grid_w"] = grid_w;
    j["counts"] = counts;
    j["rejects"] = rejects;
    j["retention_rate"] = retention_rate;
    return j;
}

DatasetManifest DatasetManifest::from_json(const json& j) {
    DatasetManifest m;
    m.schema_version = j.at("schema_version").get<std::string>();
    if (m.schema_version != "1")
        throw IoError("manifest: unsupported schema version '" + m.schema_version + "'");
    m.rule_version = j.at("rule_version").get<int>();
    m.seed = j.at("seed").get<uint64_t>();
    m.stream_lo = j.at("stream_lo").get<uint64_t>();
    m.stream_hi = j.at("stream_hi").get<uint64_t>();
    m.grid_h = j.at("grid_h").get<int>();
    m.grid_w = j.at("grid_w").get<int>();
    m.counts = j.at("counts").get<std::map<std::string, int>>();
    m.rejects = j.at("rejects").get<int>();
    m.retention_rate = j.at("retention_rate").get<double>();
    return m;
}

// ---------------------------------------------------------------------------
// Builders

namespace {

std::vector<std::string> stage1_keys() {
    std::vector<std::string> keys;
    for (int i = 0; i < kNumCategories; ++i)
        keys.push_back(category_name(static_cast<KnowledgeCategory>(i)));
    keys.push_back("compositional");
    keys.push_back("edit");
    return keys;
}

}  // namespace

Dataset build_stage1(const std::map<std::string, int>& counts, uint64_t seed,
                     const Tokenizer& tok, const RuleTable& rules, GridConfig grid) {
    auto valid = stage1_keys();
    for (const auto& [key, n] : counts) {
        if (std::find(valid.begin(), valid.end(), key) == valid.end())
            throw ConfigError("stage1 counts: unknown key '" + key + "'");
        if (n < 0) throw ConfigError("stage1 counts: negative count");
    }
    Dataset ds;
    ds.manifest.seed = seed;
    ds.manifest.stream_lo = kStage1Stream;
    ds.manifest.rule_version = rules.version;
    ds.manifest.grid_h = grid.h;
    ds.manifest.grid_w = grid.w;

    uint64_t stream = kStage1Stream;
    int id = 0;
    for (const auto& key : valid) {
        auto it = counts.find(key);
        if (it == counts.end()) continue;
        for (int i = 0; i < it->second; ++i) {
            Rng rng(mix_seed(seed, stream++));
            CorpusSample s;
            s.id = id++;
            s.category = key;
            if (key == "edit") {
                EditTask task = sample_edit_task(rng, rules, grid, SampleMode::explicit_only);
                s.type = SampleType::stage1_edit;
                s.segments.resize(3);
                s.segments[0] = {PosKind::image, PosRole::context, {}, render(task.source)};
                s.segments[1] = {PosKind::text, PosRole::context, tok.encode(task.text_words), {}};
                s.segments[2] = {PosKind::image, PosRole::supervised, {}, render(task.target)};
                if (oracle_score(render(task.target), task.goal, rules) != 1.0) {
                    ds.reject_log.push_back("id=" + std::to_string(s.id) + " reason=oracle");
                    ++ds.manifest.rejects;
                    --id;
                    continue;
                }
            } else {
                InstructionSpec spec =
                    key == "compositional"
                        ? sample_compositional(static_cast<CompositionalKind>(
                                                   i % kNumCompositionalKinds),
                                               rng, grid)
                        : sample_instruction(category_from_name(key), rng, rules, grid,
                                             SampleMode::explicit_only);
                ConstraintSet cs = compile_constraints(spec, rules);
                GridImage img = render(canonical_scene(spec, rules));
                if (oracle_score(img, cs, rules) != 1.0) {
                    ds.reject_log.push_back("id=" + std::to_string(s.id) + " reason=oracle");
                    ++ds.manifest.rejects;
                    --id;
                    continue;
                }
                s.type = SampleType::stage1;
                s.segments.resize(2);
                s.segments[0] = {PosKind::text, PosRole::context, tok.encode(spec.text_words), {}};
                s.segments[1] = {PosKind::image, PosRole::supervised, {}, img};
            }
            ds.manifest.counts[key] += 1;
            ds.samples.push_back(std::move(s));
        }
    }
    ds.manifest.stream_hi = stream;
    return ds;
}

namespace {

// True when `needle` appears as a contiguous run inside `hay`.
bool contains_run(const std::vector<std::string>& hay, const std::vector<std::string>& needle) {
    if (needle.empty()) return true;
    return std::search(hay.begin(), hay.end(), needle.begin(), needle.end()) != hay.end();
}

}  // namespace

Dataset build_single_turn(const std::map<std::string, int>& counts, uint64_t seed,
                          const Tokenizer& tok, const RuleTable& rules, GridConfig grid) {
    Dataset ds;
    ds.manifest.seed = seed;
    ds.manifest.stream_lo = kSingleTurnStream;
    ds.manifest.rule_version = rules.version;
    ds.manifest.grid_h = grid.h;
    ds.manifest.grid_w = grid.w;

    uint64_t stream = kSingleTurnStream;
    int id = 0;
    for (const auto& [key, n] : counts) {
        KnowledgeCategory cat = category_from_name(key);
        for (int i = 0; i < n;) {
            Rng rng(mix_seed(seed, stream++));
            InstructionSpec spec = sample_instruction(cat, rng, rules, grid);
            ConstraintSet cs = compile_constraints(spec, rules);
            auto reject = [&](const std::string& why) {
                ds.reject_log.push_back("id=" + std::to_string(id) + " category=" + key +
                                        " reason=" + why);
                ++ds.manifest.rejects;
            };
            // Multi-dimensional filter: oracle pass, hidden derivation present,
            // no hidden constraint leaked into the instruction text.
            if (!spec.has_hidden()) {
                reject("no_hidden_constraint");
                continue;
            }
            std::vector<std::string> reasoning = derivation_words(spec, rules);
            bool complete = true, leaked = false;
            for (size_t ci = 0; ci < cs.size(); ++ci) {
                if (!spec.hidden[ci]) continue;
                auto ser = cs[ci].serialize_words(rules);
                if (!contains_run(reasoning, ser)) complete = false;
                if (contains_run(spec.text_words, ser)) leaked = true;
            }
            if (!complete) {
                reject("reasoning_incomplete");
                continue;
            }
            if (leaked) {
                reject("hidden_leaked_into_text");
                continue;
            }
            GridImage img = render(canonical_scene(spec, rules));
            if (oracle_score(img, cs, rules) != 1.0) {
                reject("oracle");
                continue;
            }
            CorpusSample s;
            s.type = SampleType::single_turn;
            s.category = key;
            s.id = id++;
            s.segments.resize(3);
            s.segments[0] = {PosKind::text, PosRole::context, tok.encode(spec.text_words), {}};
            s.segments[1] = {PosKind::text, PosRole::supervised, tok.encode(reasoning), {}};
            s.segments[2] = {PosKind::image, PosRole::supervised, {}, img};
            ds.manifest.counts[key] += 1;
            ds.samples.push_back(std::move(s));
            ++i;
        }
    }
    ds.manifest.stream_hi = stream;
    return ds;
}

Dataset build_refinement(int count, const CorruptorConfig& corruptor, uint64_t seed,
                         const Tokenizer& tok, const RuleTable& rules, GridConfig grid,
                         int threads, const AuditSink& audit) {
    Dataset ds;
    ds.manifest.seed = seed;
    ds.manifest.stream_lo = kRefineStream;
    ds.manifest.rule_version = rules.version;
    ds.manifest.grid_h = grid.h;
    ds.manifest.grid_w = grid.w;

    std::vector<InstructionSpec> specs;
    uint64_t stream = kRefineStream;
    for (int i = 0; i < count; ++i) {
        Rng rng(mix_seed(seed, stream++));
        auto cat = static_cast<KnowledgeCategory>(i % kNumCategories);
        specs.push_back(sample_instruction(cat, rng, rules, grid));
    }
    ds.manifest.stream_hi = stream;

    ScriptedCorruptor backend(rules, corruptor);
    auto items = run_pipeline(backend, specs, rules, mix_seed(seed, 0xC0DE), audit, threads);

    int id = 0;
    for (const auto& item : items) {
        if (!item.verdict.retain) {
            ds.reject_log.push_back("id=" + std::to_string(item.id) +
                                    " reason=judge_not_retained");
            ++ds.manifest.rejects;
            continue;
        }
        CorpusSample s;
        s.type = SampleType::refine;
        s.category = category_name(item.spec.category);
        s.id = id++;
        s.segments.resize(5);
        s.segments[0] = {PosKind::text, PosRole::context, tok.encode(item.spec.text_words), {}};
        s.segments[1] = {PosKind::text, PosRole::unsupervised,
                         tok.encode(item.draft.reasoning_words), {}};
        s.segments[2] = {PosKind::image, PosRole::unsupervised, {}, item.draft.image};
        s.segments[3] = {PosKind::text, PosRole::supervised,
                         tok.encode(reflection_words(item.directives)), {}};
        s.segments[4] = {PosKind::image, PosRole::supervised, {}, item.refined};
        s.directives = item.directives;
        s.verdict = item.verdict;
        ds.manifest.counts[s.category] += 1;
        ds.samples.push_back(std::move(s));
    }
    ds.manifest.retention_rate =
        count == 0 ? 1.0 : static_cast<double>(ds.samples.size()) / static_cast<double>(count);
    return ds;
}

// ---------------------------------------------------------------------------
// Persistence

void write_jsonl(const Dataset& ds, const std::string& path) {
    {
        std::ofstream f(path, std::ios::binary);
        if (!f) throw IoError("cannot write " + path);
        for (const auto& s : ds.samples) f << s.to_json().dump() << '\n';
    }
    {
        std::ofstream f(path + ".manifest.json", std::ios::binary);
        if (!f) throw IoError("cannot write manifest for " + path);
        f << ds.manifest.to_json().dump(2) << '\n';
    }
    if (!ds.reject_log.empty()) {
        std::ofstream f(path + ".rejects.log", std::ios::binary);
        for (const auto& line : ds.reject_log) f << line << '\n';
    }
}

Dataset read_jsonl(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw IoError("cannot read " + path);
    Dataset ds;
    std::string line;
    while (std::getline(f, line)) {
        if (line.empty()) continue;
        ds.samples.push_back(CorpusSample::from_json(json::parse(line)));
    }
    std::ifstream mf(path + ".manifest.json", std::ios::binary);
    if (mf) {
        json mj;
        mf >> mj;
        ds.manifest = DatasetManifest::from_json(mj);
        int total = 0;
        for (const auto& [key, n] : ds.manifest.counts) total += n;
        if (total != static_cast<int>(ds.samples.size()))
            throw IoError("manifest counts disagree with file contents for " + path);
    }
    return ds;
}

// ---------------------------------------------------------------------------
// Layout building

void append_sample_to_layout(SequenceLayout& layout, const CorpusSample& sample,
                             const CodecParams& codec, const ModelConfig& cfg, Rng& noise_rng,
                             int segment) {
    sample.validate();
    int image_id = 0;
    for (const auto& p : layout.positions) image_id = std::max(image_id, p.image_id + 1);
    for (const auto& seg : sample.segments) {
        if (seg.kind == PosKind::text) {
            append_text_block(layout, segment, seg.tokens, seg.role);
            continue;
        }
        LatentVec z1 = encode(codec, seg.grid);
        if (seg.role == PosRole::supervised) {
            FlowPoint fp = make_flow_point(z1, noise_rng);
            append_image_block(layout, segment, fp.z_t, fp.t, true, seg.role, fp.u_star,
                               image_id++, cfg.image_slots);
        } else {
            // Clean conditioning slots; the attached target is never read by
            // the loss (drafts are unsupervised) but keeps the field populated.
            append_image_block(layout, segment, z1, 1.0, false, seg.role, LatentVec(),
                               image_id++, cfg.image_slots);
        }
    }
}

SequenceLayout sample_layout(const CorpusSample& sample, const CodecParams& codec,
                             const ModelConfig& cfg, Rng& noise_rng, int segment) {
    SequenceLayout layout;
    append_sample_to_layout(layout, sample, codec, cfg, noise_rng, segment);
    return layout;
}

}  // namespace gridflow
