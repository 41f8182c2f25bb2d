#include <doctest.h>

#include <cmath>

#include "gridflow/flow.hpp"

using namespace gridflow;

TEST_CASE("flow point invariants hold to machine precision on 1000 triples") {
    Rng rng(42);
    for (int trial = 0; trial < 1000; ++trial) {
        LatentVec z1 = rng.normal_vec(16);
        FlowPoint fp = make_flow_point(z1, rng);
        REQUIRE(fp.z_t.size() == z1.size());
        for (size_t i = 0; i < z1.size(); ++i) {
            double zt = (1.0 - fp.t) * fp.z0[i] + fp.t * fp.z1[i];
            CHECK(fp.z_t[i] == zt);
            CHECK(fp.u_star[i] == fp.z1[i] - fp.z0[i]);
        }
        CHECK(fp.t >= 0.0);
        CHECK(fp.t < 1.0);
    }
}

TEST_CASE("degenerate endpoints: z0 == z1 gives zero velocity") {
    // Force z0 == z1 by construction.
    LatentVec z1(8, 0.7);
    FlowPoint fp;
    fp.z0 = z1;
    fp.z1 = z1;
    fp.t = 0.3;
    fp.z_t.resize(8);
    fp.u_star.resize(8);
    for (size_t i = 0; i < 8; ++i) {
        fp.z_t[i] = (1.0 - fp.t) * fp.z0[i] + fp.t * fp.z1[i];
        fp.u_star[i] = fp.z1[i] - fp.z0[i];
        CHECK(fp.u_star[i] == 0.0);
        CHECK(fp.z_t[i] == z1[i]);
    }
}

TEST_CASE("noise endpoint is standard normal (Monte-Carlo, 5% tolerance)") {
    Rng rng(7);
    double sum = 0.0, sumsq = 0.0;
    const int n = 10000;
    LatentVec z1(4, 0.0);
    int count = 0;
    for (int i = 0; i < n / 4; ++i) {
        FlowPoint fp = make_flow_point(z1, rng);
        for (double v : fp.z0) {
            sum += v;
            sumsq += v * v;
            ++count;
        }
    }
    double mean = sum / count;
    double var = sumsq / count - mean * mean;
    CHECK(std::abs(mean) < 0.05);
    CHECK(std::abs(var - 1.0) < 0.05);
}

TEST_CASE("euler is exact on constant fields for any step count") {
    LatentVec c = {0.5, -2.0, 3.25};
    VelocityField field = [&](const LatentVec&, double) { return c; };
    LatentVec z0 = {1.0, 1.0, 1.0};
    for (int steps : {1, 2, 7, 16, 64}) {
        LatentVec z = euler_integrate(field, z0, steps);
        for (size_t i = 0; i < z.size(); ++i)
            CHECK(z[i] == doctest::Approx(z0[i] + c[i]).epsilon(1e-12));
    }
}

TEST_CASE("euler recovers the data endpoint on the true rectified field") {
    // For straight paths the target velocity is constant: u = z1 - z0.
    LatentVec z0 = {0.2, -1.0, 4.0, 0.0};
    LatentVec z1 = {1.2, 2.0, -3.0, 0.5};
    VelocityField field = [&](const LatentVec&, double) {
        LatentVec u(z0.size());
        for (size_t i = 0; i < u.size(); ++i) u[i] = z1[i] - z0[i];
        return u;
    };
    LatentVec z = euler_integrate(field, z0, 16);
    for (size_t i = 0; i < z.size(); ++i) CHECK(z[i] == doctest::Approx(z1[i]).epsilon(1e-12));
}

TEST_CASE("sampler determinism under a fixed seed") {
    VelocityField field = [](const LatentVec& z, double t) {
        LatentVec u(z.size());
        for (size_t i = 0; i < z.size(); ++i) u[i] = -z[i] + t;
        return u;
    };
    SamplerConfig cfg{16, 0};
    Rng a(123), b(123);
    CHECK(euler_sample(field, 12, cfg, a) == euler_sample(field, 12, cfg, b));
}

TEST_CASE("divergence raises a sampler error carrying the step index") {
    VelocityField field = [](const LatentVec& z, double t) {
        LatentVec u(z.size(), t >= 0.5 ? std::numeric_limits<double>::quiet_NaN() : 0.0);
        return u;
    };
    Rng rng(5);
    try {
        euler_sample(field, 4, SamplerConfig{8, 0}, rng);
        FAIL("expected divergence");
    } catch (const SamplerDivergence& e) {
        CHECK(e.step() == 4);  // t = 0.5 at step 4 of 8
    }
}

TEST_CASE("step count config is validated") {
    SamplerConfig bad{0, 0};
    CHECK_THROWS_AS(bad.validate(), ConfigError);
    VelocityField field = [](const LatentVec& z, double) { return z; };
    CHECK_THROWS_AS(euler_integrate(field, LatentVec(3, 0.0), 0), ConfigError);
}
