#pragma once

#include <functional>
#include <memory>
#include <string>
#include <vector>

#include <json.hpp>

#include "gridflow/world.hpp"

namespace gridflow {

// The five verifier feedback dimensions.
enum class Dimension : uint8_t {
    object_presence,
    attribute_accuracy,
    style_consistency,
    realism,
    aesthetic_quality,
};
const std::string& dimension_name(Dimension d);
Dimension dimension_from_name(const std::string& name);

enum class EditAction : uint8_t { add, remove, change_attribute, move };
const std::string& action_name(EditAction a);
EditAction action_from_name(const std::string& name);

// Structured, actionable verifier feedback. `cell` is the directive's target
// cell (destination for move). `from` is the source cell for move.
struct EditDirective {
    Dimension dimension = Dimension::object_presence;
    EditAction action = EditAction::add;
    EntityDesc entity{Color::red, Shape::circle};
    Cell cell{};
    Cell from{};
    AttrKind attr = AttrKind::color;
    int value = 0;
    std::string rationale;

    bool operator==(const EditDirective&) const = default;

    // Is this directive verifiably applied in the image?
    bool applied(const GridImage& img) const;

    nlohmann::json to_json() const;
    static EditDirective from_json(const nlohmann::json& j);

    // Canonical reflection sentence, tokenizer-ready.
    std::vector<std::string> reflection_sentence() const;
};

// Full reflection text for a directive list ("checking the draft . ... done .").
std::vector<std::string> reflection_words(const std::vector<EditDirective>& directives);

struct JudgeVerdict {
    bool retain = false;
    double initial_score = 0.0;
    double refined_score = 0.0;
    double directive_faithfulness = 0.0;

    nlohmann::json to_json() const;
    static JudgeVerdict from_json(const nlohmann::json& j);
};

struct Draft {
    std::vector<std::string> reasoning_words;  // T1
    GridImage image;                           // I1
};

// Initial-generator role. Implemented by the scripted corruptor here and by
// the trained model via the interleave engine.
class DraftBackend {
public:
    virtual ~DraftBackend() = default;
    virtual Draft generate(const InstructionSpec& spec, Rng& rng) = 0;
    virtual std::string name() const = 0;
};

struct CorruptorConfig {
    int min_corruptions = 1;
    int max_corruptions = 2;
    // When set, occasionally injects an off-palette clutter entity (fails the
    // style proxy) on top of the constraint violations.
    bool allow_clutter = false;
    // Probability of wiping the draft empty instead: every constraint is
    // violated and the refinement has to rebuild the scene from scratch.
    double wipe_prob = 0.0;
    // Probability of adding 1-2 benign in-palette entities that violate
    // nothing. The verifier leaves them alone, so the refined target carries
    // them over from the draft; refinement training then has to read the
    // draft instead of re-deriving everything from the instruction.
    double benign_clutter_prob = 0.0;
};

// Emits the ground-truth reasoning and a corrupted canonical image with a
// controlled number of injected constraint violations.
class ScriptedCorruptor : public DraftBackend {
public:
    ScriptedCorruptor(const RuleTable& rules, CorruptorConfig cfg = {})
        : rules_(rules), cfg_(cfg) {}

    Draft generate(const InstructionSpec& spec, Rng& rng) override;
    std::string name() const override { return "scripted_corruptor"; }

private:
    const RuleTable& rules_;
    CorruptorConfig cfg_;
};

// The canonical scene every oracle role agrees on for a spec.
Scene canonical_scene(const InstructionSpec& spec, const RuleTable& rules);

// Ground-truth reasoning text: the derivation of every hidden constraint.
std::vector<std::string> derivation_words(const InstructionSpec& spec, const RuleTable& rules);

Draft generate_draft(DraftBackend& backend, const InstructionSpec& spec, Rng& rng);

// Oracle verifier: one directive per violated constraint plus one per failed
// proxy. Proxies: style (every entity's color drawn from the canonical
// palette, one failure per off-palette entity), realism (no overlapping
// entities; unrepresentable in a grid raster, so it never fires), aesthetic
// (at least one entity present). Empty list iff the oracle score is 1.0 and
// all proxies pass.
std::vector<EditDirective> verify(const GridImage& img, const InstructionSpec& spec,
                                  const RuleTable& rules);

// Applies directives in order on the scene reconstruction of the image.
// Identical re-applications are no-ops; genuinely conflicting or dangling
// directives raise DirectiveError.
GridImage refine_teacher(const GridImage& img, const std::vector<EditDirective>& directives);

// Comparative evaluation; retains only strict improvements with every
// directive verifiably applied. Ties are dropped.
JudgeVerdict judge(const GridImage& initial, const GridImage& refined,
                   const InstructionSpec& spec, const std::vector<EditDirective>& directives,
                   const RuleTable& rules);

// ---------------------------------------------------------------------------
// Remote-agent adapter: wire schema plus a loopback test double. Real API
// clients are out of scope; the schema and retry policy are the contract.

struct RemotePolicy {
    int timeout_ms = 5000;
    int max_retries = 2;
    int backoff_ms = 50;
};

class RemoteTransport {
public:
    virtual ~RemoteTransport() = default;
    // Sends one request JSON, returns the response JSON. May throw.
    virtual nlohmann::json send(const nlohmann::json& request) = 0;
};

// In-process double that serves the four roles from the local oracles.
// `fail_first` makes the first N sends fail, for retry-policy tests.
class LoopbackTransport : public RemoteTransport {
public:
    explicit LoopbackTransport(const RuleTable& rules, int fail_first = 0)
        : rules_(rules), fail_remaining_(fail_first) {}
    nlohmann::json send(const nlohmann::json& request) override;

private:
    const RuleTable& rules_;
    int fail_remaining_;
};

class RemoteAgentClient {
public:
    RemoteAgentClient(RemoteTransport& transport, RemotePolicy policy = {})
        : transport_(transport), policy_(policy) {}

    // Retries per policy; throws PipelineError with the role tag after the
    // final attempt fails. Responses that do not parse are rejected.
    nlohmann::json call(const nlohmann::json& request);

    static nlohmann::json make_request(const std::string& role, const InstructionSpec& spec,
                                       const std::vector<GridImage>& images,
                                       const std::vector<EditDirective>& directives = {});

private:
    RemoteTransport& transport_;
    RemotePolicy policy_;
};

nlohmann::json grid_to_json(const GridImage& img);
GridImage grid_from_json(const nlohmann::json& j);
nlohmann::json spec_to_json(const InstructionSpec& spec);
InstructionSpec spec_from_json(const nlohmann::json& j);

// ---------------------------------------------------------------------------
// Pipeline driver

struct PipelineItem {
    int id = 0;
    InstructionSpec spec;
    Draft draft;
    std::vector<EditDirective> directives;
    GridImage refined;
    JudgeVerdict verdict;
};

using AuditSink = std::function<void(const std::string& line)>;

// Runs generate -> verify -> refine -> judge for every spec. Samples run
// concurrently up to `threads`; results and audit lines come back in input
// order. Per-sample randomness is derived from `seed` and the sample id, so
// resumption or reordering cannot change outputs.
std::vector<PipelineItem> run_pipeline(DraftBackend& backend,
                                       const std::vector<InstructionSpec>& specs,
                                       const RuleTable& rules, uint64_t seed,
                                       const AuditSink& audit = nullptr, int threads = 1);

}  // namespace gridflow
