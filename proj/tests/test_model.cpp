#include <doctest.h>

#include <cmath>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "gridflow/flow.hpp"
#include "gridflow/model.hpp"

using namespace gridflow;

namespace {

ModelConfig tiny_config() {
    ModelConfig cfg;
    cfg.vocab = 32;
    cfg.d_model = 16;
    cfg.layers = 2;
    cfg.heads = 2;
    cfg.ffn_hidden = 24;
    cfg.latent_dim = 10;
    cfg.latent_hidden = 20;
    cfg.max_pos = 24;
    return cfg;
}

// A mixed layout exercising every role: context text, supervised text,
// an unsupervised clean image, and a supervised noisy image.
SequenceLayout mixed_layout(const ModelConfig& cfg, uint64_t seed) {
    Rng rng(seed);
    SequenceLayout L;
    auto tokens = [&](int n) {
        std::vector<int> out;
        for (int i = 0; i < n; ++i)
            out.push_back(static_cast<int>(rng.uniform_int(4, cfg.vocab - 1)));
        return out;
    };
    append_text_block(L, 0, tokens(4), PosRole::context);
    append_text_block(L, 0, tokens(3), PosRole::unsupervised);
    append_image_slot(L, 0, rng.normal_vec(static_cast<size_t>(cfg.latent_dim)), 1.0, false,
                      PosRole::unsupervised, rng.normal_vec(static_cast<size_t>(cfg.latent_dim)),
                      0);
    append_text_block(L, 0, tokens(3), PosRole::supervised);
    FlowPoint fp = make_flow_point(rng.normal_vec(static_cast<size_t>(cfg.latent_dim)), rng);
    append_image_slot(L, 0, fp.z_t, fp.t, true, PosRole::supervised, fp.u_star, 1);
    return L;
}

ModelParams tiny_model(uint64_t seed) {
    ModelParams params(tiny_config());
    Rng rng(seed);
    params.init(rng);
    // Heads start at zero; nudge them so the loss surface is generic.
    Rng hr(seed + 1);
    for (const char* name : {"head_t_w", "head_v_w2"}) {
        const ParamView& v = params.view(name);
        double* p = params.data(v);
        for (size_t i = 0; i < v.count(); ++i) p[i] = 0.05 * hr.normal();
    }
    return params;
}

}  // namespace

TEST_CASE("uniform logits from zero-initialized heads; text loss is ln V") {
    ModelConfig cfg = tiny_config();
    ModelParams params(cfg);  // all zeros: logits are exactly the zero bias
    SequenceLayout L;
    append_text_block(L, 0, {5, 6, 7}, PosRole::supervised);
    ForwardResult out = forward(params, L);
    for (int r = 0; r < out.logit_rows(); ++r) {
        const double* row = out.logits_row(r);
        for (int vIdx = 1; vIdx < cfg.vocab; ++vIdx) CHECK(row[vIdx] == row[0]);
    }
    TextLossResult tl = text_loss(out, L);
    CHECK(tl.has_supervised);
    CHECK(std::abs(tl.value - std::log(static_cast<double>(cfg.vocab))) < 1e-9);
}

TEST_CASE("no supervised text positions returns zero with the flag down") {
    ModelParams params = tiny_model(3);
    SequenceLayout L;
    append_text_block(L, 0, {5, 6, 7}, PosRole::context);
    ForwardResult out = forward(params, L);
    TextLossResult tl = text_loss(out, L);
    CHECK(!tl.has_supervised);
    CHECK(tl.value == 0.0);
}

TEST_CASE("one-hot correct logits drive the loss to zero") {
    ModelConfig cfg = tiny_config();
    ModelParams params(cfg);
    SequenceLayout L;
    append_text_block(L, 0, {5, 6}, PosRole::supervised);
    ForwardResult out = forward(params, L);
    // Overwrite logits with a sharp peak at each target.
    for (size_t r = 0; r < out.text_pos.size(); ++r) {
        const Position& p = L.positions[static_cast<size_t>(out.text_pos[r])];
        double* row = out.logits.data() + r * static_cast<size_t>(cfg.vocab);
        for (int v = 0; v < cfg.vocab; ++v) row[v] = v == p.target ? 60.0 : 0.0;
    }
    CHECK(text_loss(out, L).value < 1e-9);
}

TEST_CASE("masking: targets at unsupervised and context positions never matter") {
    ModelParams params = tiny_model(11);
    SequenceLayout L = mixed_layout(params.config(), 5);
    ForwardResult out = forward(params, L);
    double base_text = text_loss(out, L).value;
    double base_img = image_loss(out, L);

    SequenceLayout scrambled = L;
    Rng rng(99);
    for (auto& p : scrambled.positions) {
        if (p.role == PosRole::supervised) continue;
        if (p.kind == PosKind::text)
            p.target = static_cast<int>(rng.uniform_int(0, params.config().vocab - 1));
        else
            p.u_target = rng.normal_vec(static_cast<size_t>(params.config().latent_dim));
    }
    ForwardResult out2 = forward(params, scrambled);
    CHECK(text_loss(out2, scrambled).value == base_text);  // bit-identical
    CHECK(image_loss(out2, scrambled) == base_img);
}

TEST_CASE("image loss conventions: zero at the target, one at unit offset") {
    ModelConfig cfg = tiny_config();
    SequenceLayout L;
    Rng rng(7);
    FlowPoint fp = make_flow_point(rng.normal_vec(static_cast<size_t>(cfg.latent_dim)), rng);
    append_image_slot(L, 0, fp.z_t, fp.t, true, PosRole::supervised, fp.u_star, 0);

    std::vector<int> image_pos = {0};
    std::vector<double> u_star(fp.u_star);
    CHECK(image_loss(u_star, u_star, L, image_pos) == 0.0);

    std::vector<double> offset(u_star);
    for (auto& v : offset) v += 1.0;
    CHECK(image_loss(offset, u_star, L, image_pos) == doctest::Approx(1.0));
}

TEST_CASE("total loss is exactly the weighted sum") {
    CHECK(total_loss(1.0, 2.0, 2.0, 1.0) == 4.0);
    CHECK(total_loss(0.0, 0.37, 5.0, 3.0) == 3.0 * 0.37);
    CHECK(total_loss(0.25, 0.0, 2.0, 1.0) == 0.5);
    // The recipe default weights.
    CHECK(total_loss(1.0, 1.0, 2.0, 1.0) == 3.0);
}

TEST_CASE("causality: perturbing a later position never changes earlier outputs") {
    ModelParams params = tiny_model(21);
    SequenceLayout L = mixed_layout(params.config(), 9);
    ForwardResult base = forward(params, L);

    SequenceLayout mut = L;
    Position& last = mut.positions.back();
    REQUIRE(last.kind == PosKind::image);
    for (auto& v : last.z) v += 0.7;
    ForwardResult out = forward(params, mut);

    // All text positions precede the final image slot here.
    REQUIRE(base.logits.size() == out.logits.size());
    for (size_t i = 0; i < base.logits.size(); ++i) CHECK(base.logits[i] == out.logits[i]);
    // The earlier (clean) image slot's velocity is also untouched.
    for (int j = 0; j < params.config().latent_dim; ++j)
        CHECK(base.u_row(0)[j] == out.u_row(0)[j]);
}

TEST_CASE("expert routing: zeroing gen parameters leaves text-only logits unchanged") {
    ModelParams params = tiny_model(31);
    SequenceLayout L;
    append_text_block(L, 0, {4, 9, 12, 20}, PosRole::supervised);
    ForwardResult before = forward(params, L);

    ModelParams zeroed = params;
    for (const auto& v : zeroed.views()) {
        if (v.partition != Partition::gen) continue;
        double* p = zeroed.data(v);
        std::fill(p, p + v.count(), 0.0);
    }
    ForwardResult after = forward(zeroed, L);
    for (size_t i = 0; i < before.logits.size(); ++i) CHECK(before.logits[i] == after.logits[i]);
}

TEST_CASE("partition is disjoint and exhaustive; heads carry the right labels") {
    ModelParams params(tiny_config());
    PartitionSizes sizes = param_partition(params);
    CHECK(sizes.total() == params.size());
    CHECK(params.view("head_t_w").partition == Partition::und);
    CHECK(params.view("head_v_w2").partition == Partition::gen);
    CHECK(params.view("img_in_w").partition == Partition::gen);
    CHECK(params.view("time_w").partition == Partition::gen);
    CHECK(params.view("tok_emb").partition == Partition::shared);
    CHECK(sizes.und > 0);
    CHECK(sizes.gen > 0);
    CHECK(sizes.shared > 0);
}

TEST_CASE("layout validation rejects broken inputs") {
    ModelConfig cfg = tiny_config();
    ModelParams params(cfg);

    SequenceLayout empty;
    CHECK_THROWS_AS(forward(params, empty), InputError);

    SequenceLayout bad_role;
    append_text_block(bad_role, 0, {5}, PosRole::context);
    bad_role.positions[0].role = static_cast<PosRole>(7);
    CHECK_THROWS_AS(forward(params, bad_role), InputError);

    SequenceLayout bad_latent;
    append_image_slot(bad_latent, 0, LatentVec(3, 0.0), 0.5, true, PosRole::context, {}, 0);
    CHECK_THROWS_AS(forward(params, bad_latent), InputError);

    SequenceLayout sup_needs_target;
    append_image_slot(sup_needs_target, 0, LatentVec(static_cast<size_t>(cfg.latent_dim), 0.0),
                      0.5, true, PosRole::supervised, {}, 0);
    CHECK_THROWS_AS(forward(params, sup_needs_target), InputError);
}

TEST_CASE("analytic gradients match central finite differences") {
    ModelParams params = tiny_model(101);
    SequenceLayout L = mixed_layout(params.config(), 55);
    const double lt = 2.0, li = 1.0;

    std::vector<double> grads;
    loss_and_grad(params, L, lt, li, grads);
    REQUIRE(params.size() < 50000);

    Rng pick(7);
    int checked = 0;
    double worst = 0.0;
    while (checked < 250) {
        size_t i = static_cast<size_t>(pick.uniform_int(0, static_cast<int64_t>(params.size()) - 1));
        double h = 1e-5;
        ModelParams probe = params;
        probe.flat()[i] += h;
        double up = loss_only(probe, L, lt, li).total;
        probe.flat()[i] = params.flat()[i] - h;
        double down = loss_only(probe, L, lt, li).total;
        double fd = (up - down) / (2.0 * h);
        double rel = std::abs(fd - grads[i]) / std::max({std::abs(fd), std::abs(grads[i]), 1e-6});
        worst = std::max(worst, rel);
        ++checked;
    }
    CHECK(worst < 1e-4);
}

TEST_CASE("forward regression snapshot stays frozen") {
    ModelParams params = tiny_model(2024);
    SequenceLayout L = mixed_layout(params.config(), 17);
    ForwardResult out = forward(params, L);

    std::ostringstream dump;
    dump << std::hexfloat;
    for (double v : out.logits) dump << v << '\n';
    for (double v : out.u) dump << v << '\n';

    std::string golden_path = std::string(GRIDFLOW_TEST_DIR) + "/golden/forward_snapshot.txt";
    if (!std::filesystem::exists(golden_path)) {
        std::filesystem::create_directories(std::string(GRIDFLOW_TEST_DIR) + "/golden");
        std::ofstream f(golden_path, std::ios::binary);
        f << dump.str();
        MESSAGE("golden snapshot written; rerun to verify");
        return;
    }
    std::ifstream f(golden_path, std::ios::binary);
    std::stringstream have;
    have << f.rdbuf();
    CHECK(have.str() == dump.str());
}

TEST_CASE("model params save/load reproduces forward outputs bit-identically") {
    ModelParams params = tiny_model(77);
    SequenceLayout L = mixed_layout(params.config(), 23);
    ForwardResult before = forward(params, L);

    std::stringstream ss;
    params.save(ss);
    ModelParams loaded = ModelParams::load(ss);
    ForwardResult after = forward(loaded, L);
    CHECK(before.logits == after.logits);
    CHECK(before.u == after.u);
}
