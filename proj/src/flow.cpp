#include "gridflow/flow.hpp"

#include <cmath>

#include "gridflow/error.hpp"

namespace gridflow {

void SamplerConfig::validate() const {
    if (steps < 1) throw ConfigError("sampler: steps must be >= 1");
}

FlowPoint make_flow_point(const LatentVec& z1, Rng& rng) {
    for (double v : z1)
        if (!std::isfinite(v)) throw InputError("make_flow_point: non-finite data latent");
    FlowPoint fp;
    fp.z1 = z1;
    fp.z0 = rng.normal_vec(z1.size());
    fp.t = rng.uniform();
    fp.z_t.resize(z1.size());
    fp.u_star.resize(z1.size());
    for (size_t i = 0; i < z1.size(); ++i) {
        fp.z_t[i] = (1.0 - fp.t) * fp.z0[i] + fp.t * fp.z1[i];
        fp.u_star[i] = fp.z1[i] - fp.z0[i];
    }
    return fp;
}

LatentVec euler_integrate(const VelocityField& field, LatentVec z, int steps) {
    if (steps < 1) throw ConfigError("euler: steps must be >= 1");
    const double dt = 1.0 / static_cast<double>(steps);
    for (int s = 0; s < steps; ++s) {
        double t = static_cast<double>(s) * dt;
        LatentVec u = field(z, t);
        if (u.size() != z.size()) throw InputError("euler: field dimension mismatch");
        for (size_t i = 0; i < z.size(); ++i) {
            z[i] += dt * u[i];
            if (!std::isfinite(z[i])) throw SamplerDivergence(s, "non-finite latent");
        }
    }
    return z;
}

LatentVec euler_sample(const VelocityField& field, int dim, const SamplerConfig& cfg, Rng& rng) {
    cfg.validate();
    return euler_integrate(field, rng.normal_vec(static_cast<size_t>(dim)), cfg.steps);
}

VelocityField model_velocity_field(const ModelParams& params, const SequenceLayout& prefix,
                                   int image_id, int seg_pos, int segment) {
    (void)seg_pos;
    return [&params, prefix, image_id, segment](const LatentVec& z, double t) {
        const ModelConfig& cfg = params.config();
        SequenceLayout layout = prefix;
        append_image_block(layout, segment, z, t, true, PosRole::unsupervised, LatentVec(),
                           image_id, cfg.image_slots);
        ForwardResult out = forward(params, layout);
        const int sd = cfg.slot_dim();
        LatentVec u(static_cast<size_t>(cfg.latent_dim));
        size_t first_row = out.image_pos.size() - static_cast<size_t>(cfg.image_slots);
        for (int s = 0; s < cfg.image_slots; ++s) {
            const double* row = out.u.data() + (first_row + static_cast<size_t>(s)) * sd;
            std::copy(row, row + sd, u.begin() + static_cast<long>(s) * sd);
        }
        return u;
    };
}

}  // namespace gridflow
