#pragma once

#include <functional>

#include "gridflow/codec.hpp"
#include "gridflow/model.hpp"
#include "gridflow/rng.hpp"

namespace gridflow {

// One rectified-flow training point on the straight path between a noise
// endpoint z0 and a data endpoint z1.
struct FlowPoint {
    LatentVec z0;
    LatentVec z1;
    double t = 0.0;
    LatentVec z_t;     // (1-t) z0 + t z1
    LatentVec u_star;  // z1 - z0
};

struct SamplerConfig {
    int steps = 16;
    uint64_t seed = 0;

    void validate() const;
};

// Draws z0 ~ N(0, I) then t ~ U(0, 1) from rng and builds the path point.
FlowPoint make_flow_point(const LatentVec& z1, Rng& rng);

// Velocity field u(z, t) used by the Euler integrator.
using VelocityField = std::function<LatentVec(const LatentVec& z, double t)>;

// Explicit Euler from a given start: z <- z + (1/steps) u(z, t) at the left
// endpoints t = 0, 1/steps, ..., (steps-1)/steps. Throws SamplerDivergence
// (with the step index) if z leaves the finite range.
LatentVec euler_integrate(const VelocityField& field, LatentVec z, int steps);

// Start from z ~ N(0, I) drawn from rng, then integrate.
LatentVec euler_sample(const VelocityField& field, int dim, const SamplerConfig& cfg, Rng& rng);

// Velocity field backed by the model: the prefix layout gets one noisy slot
// appended and the model's velocity output at that slot is the field value.
VelocityField model_velocity_field(const ModelParams& params, const SequenceLayout& prefix,
                                   int image_id, int seg_pos, int segment = 0);

}  // namespace gridflow
