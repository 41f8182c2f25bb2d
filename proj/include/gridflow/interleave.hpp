#pragma once

#include <optional>
#include <string>
#include <vector>

#include "gridflow/agents.hpp"
#include "gridflow/flow.hpp"
#include "gridflow/text.hpp"

namespace gridflow {

enum class InferenceMode { direct, reason, reason_refine };
const std::string& mode_name(InferenceMode m);
InferenceMode mode_from_name(const std::string& name);

// One inference trajectory: reason -> generate -> reflect -> refine with k=1.
// direct: only I1 (empty T1). reason: (T1, I1). reason_refine: (T1, I1, T2, I2).
struct Rollout {
    InferenceMode mode = InferenceMode::direct;
    std::vector<int> context_tokens;
    bool has_t1 = false, has_t2 = false;  // segment presence (tokens may be empty)
    std::vector<int> t1, t2;
    std::optional<GridImage> i1, i2;
    std::optional<GridImage> source;  // edit tasks carry the input image
    uint64_t seed = 0;
    int flow_steps = 0;

    const GridImage& final_image() const;
    void check_shape() const;  // mode/shape invariants
    nlohmann::json to_json() const;
};

struct InterleaveConfig {
    SamplerConfig sampler;
    int max_text_len = 72;  // greedy-decode budget per segment
};

// Text-to-image rollout. Greedy decoding for text segments; each image is
// Euler-sampled conditioned on everything earlier in the sequence.
// Deterministic given (params, prompt, cfg, seed).
Rollout run(const ModelParams& params, const CodecParams& codec,
            const std::vector<int>& context_tokens, InferenceMode mode,
            const InterleaveConfig& cfg, uint64_t seed);

// Editing rollout: the source image enters the context as a clean
// conditioning slot, then the contract matches run().
Rollout edit(const ModelParams& params, const CodecParams& codec, const GridImage& source,
             const std::vector<int>& context_tokens, InferenceMode mode,
             const InterleaveConfig& cfg, uint64_t seed);

// Model-backed initial generator for the agent pipeline.
class ModelBackend : public DraftBackend {
public:
    ModelBackend(const ModelParams& params, const CodecParams& codec, const Tokenizer& tok,
                 InterleaveConfig cfg)
        : params_(params), codec_(codec), tok_(tok), cfg_(cfg) {}

    Draft generate(const InstructionSpec& spec, Rng& rng) override;
    std::string name() const override { return "model"; }

private:
    const ModelParams& params_;
    const CodecParams& codec_;
    const Tokenizer& tok_;
    InterleaveConfig cfg_;
};

}  // namespace gridflow
