#include <doctest.h>

#include <sstream>

#include "gridflow/codec.hpp"

using namespace gridflow;

namespace {

std::vector<GridImage> sample_grids(int n, uint64_t seed) {
    Rng rng(seed);
    std::vector<GridImage> out;
    for (int i = 0; i < n; ++i)
        out.push_back(render(random_scene(static_cast<int>(rng.uniform_int(0, 12)), rng)));
    return out;
}

}  // namespace

TEST_CASE("round-trip identity on the fitting corpus and on fresh grids") {
    auto corpus = sample_grids(120, 1);
    CodecParams p = fit_codec(corpus, compact_codec_dim(GridConfig{}));
    for (const auto& g : corpus) CHECK(decode(p, encode(p, g)) == g);

    auto fresh = sample_grids(1000, 2);
    int exact = 0;
    for (const auto& g : fresh)
        if (decode(p, encode(p, g)) == g) ++exact;
    CHECK(exact == 1000);
}

TEST_CASE("single repeated grid is a fixed point") {
    Rng rng(5);
    GridImage g = render(random_scene(4, rng));
    std::vector<GridImage> corpus(8, g);
    CodecParams p = fit_codec(corpus, compact_codec_dim(GridConfig{}));
    LatentVec z1 = encode(p, g);
    LatentVec z2 = encode(p, g);
    CHECK(z1 == z2);  // bit-identical determinism
    CHECK(decode(p, z1) == g);
}

TEST_CASE("full feature dimension is an exact bijection") {
    auto corpus = sample_grids(24, 7);
    int full = 12 * 12 * GridImage::code_count();
    CodecParams p = fit_codec(corpus, full);
    CHECK(p.identity);
    for (const auto& g : sample_grids(100, 8)) CHECK(decode(p, encode(p, g)) == g);
}

TEST_CASE("dimension above the feature dimension is a configuration error") {
    auto corpus = sample_grids(4, 3);
    CHECK_THROWS_AS(fit_codec(corpus, 12 * 12 * GridImage::code_count() + 1), ConfigError);
    CHECK_THROWS_AS(fit_codec(corpus, 32), ConfigError);  // no exact form at D=32
    CHECK_THROWS_AS(fit_codec({}, 2016), InputError);
}

TEST_CASE("fit is deterministic given the corpus") {
    auto corpus = sample_grids(60, 11);
    CodecParams a = fit_codec(corpus, compact_codec_dim(GridConfig{}));
    CodecParams b = fit_codec(corpus, compact_codec_dim(GridConfig{}));
    CHECK(a == b);
}

TEST_CASE("decode of the zero vector reproduces the corpus channel means") {
    // The zero latent decodes each cell from its mean channel activations:
    // occupied iff the corpus occupancy rate reaches 0.5, then the modal color
    // and shape. Computed independently here and frozen as the regression
    // expectation; for sampled corpora every cell is mostly empty.
    auto corpus = sample_grids(200, 13);
    CodecParams p = fit_codec(corpus, compact_codec_dim(GridConfig{}));
    GridImage expect(12, 12);
    for (int cell = 0; cell < 144; ++cell) {
        double occupancy = 0.0;
        for (const auto& g : corpus)
            if (g.cells()[static_cast<size_t>(cell)] != GridImage::kEmpty) occupancy += 1.0;
        occupancy /= static_cast<double>(corpus.size());
        REQUIRE(occupancy < 0.5);
    }
    CHECK(decode(p, LatentVec(static_cast<size_t>(compact_codec_dim(GridConfig{})), 0.0)) ==
          expect);
}

TEST_CASE("decode rejects non-finite latents; encode normalizes to zero mean unit scale") {
    auto corpus = sample_grids(150, 17);
    CodecParams p = fit_codec(corpus, compact_codec_dim(GridConfig{}));
    LatentVec bad(144, 0.0);
    bad[3] = std::numeric_limits<double>::infinity();
    CHECK_THROWS_AS(decode(p, bad), InputError);

    // Per-dimension corpus statistics of the encoded vectors.
    std::vector<double> mean(144, 0.0), var(144, 0.0);
    for (const auto& g : corpus) {
        LatentVec z = encode(p, g);
        for (int j = 0; j < 144; ++j) mean[static_cast<size_t>(j)] += z[static_cast<size_t>(j)];
    }
    for (auto& m : mean) m /= static_cast<double>(corpus.size());
    for (const auto& g : corpus) {
        LatentVec z = encode(p, g);
        for (int j = 0; j < 144; ++j) {
            double d = z[static_cast<size_t>(j)] - mean[static_cast<size_t>(j)];
            var[static_cast<size_t>(j)] += d * d;
        }
    }
    for (int j = 0; j < 144; ++j) {
        CHECK(std::abs(mean[static_cast<size_t>(j)]) < 1e-9);
        double v = var[static_cast<size_t>(j)] / static_cast<double>(corpus.size());
        // Unit variance wherever the stored scale sits above its floor; floored
        // dimensions (rare cells) come out below unit by construction.
        if (p.scale[static_cast<size_t>(j)] > 4.0) CHECK(v == doctest::Approx(1.0).epsilon(1e-6));
        else CHECK(v <= 1.0 + 1e-9);
    }
}

TEST_CASE("encode is affine: disjoint scenes add") {
    auto corpus = sample_grids(100, 19);
    CodecParams p = fit_codec(corpus, compact_codec_dim(GridConfig{}));

    Rng rng(23);
    for (int trial = 0; trial < 20; ++trial) {
        Scene a = random_scene(3, rng);
        Scene b;
        b.grid_h = a.grid_h;
        b.grid_w = a.grid_w;
        // Place b's entities on cells disjoint from a's.
        Rng brng(1000 + static_cast<uint64_t>(trial));
        while (b.entities.size() < 3) {
            Scene cand = random_scene(1, brng);
            Cell cell = cand.entities[0].cell();
            if (a.occupied(cell) || b.occupied(cell)) continue;
            b.entities.push_back(cand.entities[0]);
        }
        Scene ab = a;
        ab.entities.insert(ab.entities.end(), b.entities.begin(), b.entities.end());

        LatentVec za = encode(p, render(a));
        LatentVec zb = encode(p, render(b));
        LatentVec z0 = encode(p, GridImage(12, 12));
        LatentVec zab = encode(p, render(ab));
        for (int j = 0; j < 144; ++j) {
            double lhs = za[static_cast<size_t>(j)] + zb[static_cast<size_t>(j)] -
                         z0[static_cast<size_t>(j)];
            CHECK(lhs == doctest::Approx(zab[static_cast<size_t>(j)]).epsilon(1e-9));
        }
    }
}

TEST_CASE("codec params survive a save/load round trip bit-identically") {
    auto corpus = sample_grids(50, 29);
    CodecParams p = fit_codec(corpus, compact_codec_dim(GridConfig{}));
    std::stringstream ss;
    p.save(ss);
    CodecParams q = CodecParams::load(ss);
    CHECK(p == q);
}
