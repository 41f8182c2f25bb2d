#include "gridflow/interleave.hpp"

#include <algorithm>

#include "gridflow/error.hpp"

namespace gridflow {

const std::string& mode_name(InferenceMode m) {
    static const std::vector<std::string> names = {"direct", "reason", "reason_refine"};
    return names[static_cast<size_t>(m)];
}

InferenceMode mode_from_name(const std::string& name) {
    for (int i = 0; i < 3; ++i)
        if (mode_name(static_cast<InferenceMode>(i)) == name)
            return static_cast<InferenceMode>(i);
    throw InputError("unknown inference mode '" + name + "'");
}

const GridImage& Rollout::final_image() const {
    if (i2) return *i2;
    if (i1) return *i1;
    throw Error("rollout has no image");
}

void Rollout::check_shape() const {
    switch (mode) {
        case InferenceMode::direct:
            if (has_t1 || has_t2 || !i1 || i2)
                throw Error("direct rollout must hold exactly one image and no text");
            break;
        case InferenceMode::reason:
            if (!has_t1 || !i1 || has_t2 || i2)
                throw Error("reason rollout must hold (T1, I1)");
            break;
        case InferenceMode::reason_refine:
            if (!has_t1 || !i1 || !has_t2 || !i2)
                throw Error("reason_refine rollout must hold (T1, I1, T2, I2)");
            break;
    }
}

nlohmann::json Rollout::to_json() const {
    nlohmann::json j;
    j["v"] = "1";
    j["type"] = "rollout";
    j["mode"] = mode_name(mode);
    j["seed"] = seed;
    j["flow_steps"] = flow_steps;
    // Mask-free variant of the corpus segment schema.
    j["segments"] = nlohmann::json::array();
    if (source)
        j["segments"].push_back({{"kind", "image"}, {"grid", grid_to_json(*source)}});
    j["segments"].push_back({{"kind", "text"}, {"tokens", context_tokens}});
    if (has_t1) j["segments"].push_back({{"kind", "text"}, {"tokens", t1}});
    if (i1) j["segments"].push_back({{"kind", "image"}, {"grid", grid_to_json(*i1)}});
    if (has_t2) j["segments"].push_back({{"kind", "text"}, {"tokens", t2}});
    if (i2) j["segments"].push_back({{"kind", "image"}, {"grid", grid_to_json(*i2)}});
    return j;
}

namespace {

constexpr int kEot = Tokenizer::kEot;

// Greedy (temperature-0) decode of one text segment. Appends the consumed
// positions to the layout and returns the emitted tokens (without <eot>).
// Ties break toward the lowest token id. `reserve` positions stay available
// for later slots; running out of budget ends the segment.
std::vector<int> decode_text_segment(const ModelParams& params, SequenceLayout& layout,
                                     int max_len, int reserve) {
    std::vector<int> tokens;
    if (next_seg_pos(layout, 0) + reserve + 1 > params.config().max_pos)
        throw InputError("context overflow: no room to decode a text segment");
    int input = kEot;
    for (int step = 0; step < max_len; ++step) {
        if (next_seg_pos(layout, 0) + reserve + 1 > params.config().max_pos) break;
        append_text_position(layout, 0, input);
        ForwardResult out = forward(params, layout);
        const double* row = out.logits_row(out.logit_rows() - 1);
        int best = 0;
        for (int v = 1; v < params.config().vocab; ++v)
            if (row[v] > row[best]) best = v;
        if (best == kEot) return tokens;
        tokens.push_back(best);
        input = best;
    }
    return tokens;  // budget exhausted; treat as segment end
}

// Euler-samples one image at the end of the layout, decodes it, then freezes
// the slots as clean conditioning (t = 1) for everything after it. The
// conditioning latent is the decoded image re-encoded, so later positions see
// exactly the committed image rather than the raw sampler output.
GridImage sample_image(const ModelParams& params, const CodecParams& codec,
                       SequenceLayout& layout, int image_id, const SamplerConfig& sampler,
                       Rng& rng, const std::string& stage_tag) {
    if (next_seg_pos(layout, 0) + params.config().image_slots > params.config().max_pos)
        throw InputError("context overflow before image slots");
    VelocityField field = model_velocity_field(params, layout, image_id, 0);
    LatentVec z;
    try {
        z = euler_sample(field, params.config().latent_dim, sampler, rng);
    } catch (const SamplerDivergence& e) {
        throw SamplerDivergence(e.step(), stage_tag);
    }
    GridImage img = decode(codec, z);
    append_image_block(layout, 0, encode(codec, img), 1.0, false, PosRole::unsupervised,
                       LatentVec(), image_id, params.config().image_slots);
    return img;
}

Rollout run_impl(const ModelParams& params, const CodecParams& codec,
                 const GridImage* source, const std::vector<int>& context_tokens,
                 InferenceMode mode, const InterleaveConfig& cfg, uint64_t seed) {
    cfg.sampler.validate();
    Rollout r;
    r.mode = mode;
    r.context_tokens = context_tokens;
    r.seed = seed;
    r.flow_steps = cfg.sampler.steps;

    SequenceLayout layout;
    if (source) {
        r.source = *source;
        append_image_block(layout, 0, encode(codec, *source), 1.0, false, PosRole::context,
                           LatentVec(), 0, params.config().image_slots);
    }
    append_text_block(layout, 0, context_tokens, PosRole::context);
    if (next_seg_pos(layout, 0) + params.config().image_slots + 1 > params.config().max_pos)
        throw InputError("context overflow: prompt exceeds the position budget");

    Rng rng(seed);
    int image_id = source ? 1 : 0;

    if (mode != InferenceMode::direct) {
        int slots = params.config().image_slots;
        int reserve = mode == InferenceMode::reason_refine ? 2 * slots + 1 : slots;
        r.t1 = decode_text_segment(params, layout, cfg.max_text_len, reserve);
        r.has_t1 = true;
    }
    r.i1 = sample_image(params, codec, layout, image_id++, cfg.sampler, rng, "initial image");

    if (mode == InferenceMode::reason_refine) {
        r.t2 = decode_text_segment(params, layout, cfg.max_text_len, params.config().image_slots);
        r.has_t2 = true;
        r.i2 = sample_image(params, codec, layout, image_id++, cfg.sampler, rng, "refined image");
    }
    r.check_shape();
    return r;
}

}  // namespace

Rollout run(const ModelParams& params, const CodecParams& codec,
            const std::vector<int>& context_tokens, InferenceMode mode,
            const InterleaveConfig& cfg, uint64_t seed) {
    return run_impl(params, codec, nullptr, context_tokens, mode, cfg, seed);
}

Rollout edit(const ModelParams& params, const CodecParams& codec, const GridImage& source,
             const std::vector<int>& context_tokens, InferenceMode mode,
             const InterleaveConfig& cfg, uint64_t seed) {
    return run_impl(params, codec, &source, context_tokens, mode, cfg, seed);
}

Draft ModelBackend::generate(const InstructionSpec& spec, Rng& rng) {
    Rollout r = run(params_, codec_, tok_.encode(spec.text_words), InferenceMode::reason, cfg_,
                    rng.next_u64());
    Draft d;
    d.reasoning_words = tok_.decode(r.t1);
    d.image = *r.i1;
    return d;
}

}  // namespace gridflow
