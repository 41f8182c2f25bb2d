#include "gridflow/codec.hpp"

#include <algorithm>
#include <cmath>
#include <istream>
#include <ostream>

#include "gridflow/error.hpp"

namespace gridflow {

namespace {

// Floor on the per-channel scale. Channel activations are 0/1 indicators, so
// rare channels would otherwise blow up encoded magnitudes; 0.25 keeps every
// occupied-cell target within a few noise standard deviations.
constexpr double kScaleFloor = 0.25;

std::vector<double> channel_vector(const GridImage& img) {
    const int cells = img.h() * img.w();
    std::vector<double> x(static_cast<size_t>(cells) * kCodecChannels, 0.0);
    for (int i = 0; i < cells; ++i) {
        auto d = GridImage::desc_of_code(img.cells()[static_cast<size_t>(i)]);
        if (!d) continue;
        double* c = x.data() + static_cast<size_t>(i) * kCodecChannels;
        c[0] = 1.0;                                        // occupied
        c[1 + static_cast<int>(d->color)] = 1.0;           // color one-hot
        c[1 + kNumColors + static_cast<int>(d->shape)] = 1.0;  // shape one-hot
    }
    return x;
}

}  // namespace

CodecParams fit_codec(const std::vector<GridImage>& corpus, int dim) {
    if (corpus.empty()) throw InputError("fit_codec: empty corpus");
    const int h = corpus[0].h(), w = corpus[0].w();
    for (const auto& g : corpus)
        if (g.h() != h || g.w() != w) throw InputError("fit_codec: mixed grid sizes");

    const int cells = h * w;
    const int feat = cells * GridImage::code_count();
    const int compact = compact_codec_dim(GridConfig{h, w});
    if (dim > feat) throw ConfigError("codec dimension " + std::to_string(dim) +
                                      " exceeds feature dimension " + std::to_string(feat));

    CodecParams p;
    p.grid_h = h;
    p.grid_w = w;
    p.dim = dim;

    if (dim == feat) {
        p.identity = true;
        p.mean.assign(static_cast<size_t>(feat), 0.0);
        for (const auto& g : corpus)
            for (int i = 0; i < cells; ++i)
                p.mean[static_cast<size_t>(i * GridImage::code_count() + g.cells()[static_cast<size_t>(i)])] += 1.0;
        for (auto& m : p.mean) m /= static_cast<double>(corpus.size());
        return p;
    }
    if (dim != compact)
        throw ConfigError("codec dimension " + std::to_string(dim) +
                          " unsupported; exact round-trip needs D = " + std::to_string(compact) +
                          " (occupancy + color + shape channels per cell) or D = " +
                          std::to_string(feat) + " (identity)");

    // Per-channel mean and deviation over the corpus. The component basis is
    // axis-aligned (loading +1 per channel): channels are near-uncorrelated
    // indicator features, where a dense principal-component rotation is
    // arbitrary within the degenerate subspaces while destroying the per-cell
    // structure the downstream model has to learn.
    p.mean.assign(static_cast<size_t>(compact), 0.0);
    p.scale.assign(static_cast<size_t>(compact), 1.0);
    for (const auto& g : corpus) {
        auto x = channel_vector(g);
        for (int i = 0; i < compact; ++i) p.mean[static_cast<size_t>(i)] += x[static_cast<size_t>(i)];
    }
    for (auto& m : p.mean) m /= static_cast<double>(corpus.size());
    std::vector<double> var(static_cast<size_t>(compact), 0.0);
    for (const auto& g : corpus) {
        auto x = channel_vector(g);
        for (int i = 0; i < compact; ++i) {
            double d = x[static_cast<size_t>(i)] - p.mean[static_cast<size_t>(i)];
            var[static_cast<size_t>(i)] += d * d;
        }
    }
    for (int i = 0; i < compact; ++i) {
        double sd = std::sqrt(var[static_cast<size_t>(i)] / static_cast<double>(corpus.size()));
        p.scale[static_cast<size_t>(i)] = std::max(sd, kScaleFloor);
    }
    return p;
}

LatentVec encode(const CodecParams& p, const GridImage& img) {
    if (img.h() != p.grid_h || img.w() != p.grid_w)
        throw InputError("encode: grid size mismatch");
    if (p.identity) {
        LatentVec z(static_cast<size_t>(p.feature_dim()), 0.0);
        const int codes = GridImage::code_count();
        for (size_t i = 0; i < img.cells().size(); ++i)
            z[i * static_cast<size_t>(codes) + static_cast<size_t>(img.cells()[i])] = 1.0;
        for (size_t i = 0; i < z.size(); ++i) z[i] -= p.mean[i];
        return z;
    }
    auto x = channel_vector(img);
    LatentVec z(static_cast<size_t>(p.dim), 0.0);
    for (int i = 0; i < p.dim; ++i)
        z[static_cast<size_t>(i)] =
            (x[static_cast<size_t>(i)] - p.mean[static_cast<size_t>(i)]) / p.scale[static_cast<size_t>(i)];
    return z;
}

GridImage decode(const CodecParams& p, const LatentVec& z) {
    for (double v : z)
        if (!std::isfinite(v)) throw InputError("decode: non-finite latent");
    GridImage img(p.grid_h, p.grid_w);
    if (p.identity) {
        if (static_cast<int>(z.size()) != p.feature_dim())
            throw InputError("decode: latent dimension mismatch");
        const int codes = GridImage::code_count();
        for (int cell = 0; cell < p.grid_h * p.grid_w; ++cell) {
            int best = 0;
            double best_v = -1e300;
            for (int c = 0; c < codes; ++c) {
                double v = z[static_cast<size_t>(cell * codes + c)] +
                           p.mean[static_cast<size_t>(cell * codes + c)];
                if (v > best_v) {
                    best_v = v;
                    best = c;
                }
            }
            img.cells()[static_cast<size_t>(cell)] = best;
        }
        return img;
    }
    if (static_cast<int>(z.size()) != p.dim) throw InputError("decode: latent dimension mismatch");
    // Per-cell quantization onto the code alphabet: threshold the occupancy
    // channel, then argmax the color and shape channel groups (the argmax of a
    // linear score per code).
    for (int cell = 0; cell < p.grid_h * p.grid_w; ++cell) {
        const size_t base = static_cast<size_t>(cell) * kCodecChannels;
        auto raw = [&](size_t off) {
            return p.mean[base + off] + p.scale[base + off] * z[base + off];
        };
        if (raw(0) < 0.5) {
            img.cells()[static_cast<size_t>(cell)] = GridImage::kEmpty;
            continue;
        }
        int color = 0;
        double best_c = -1e300;
        for (int c = 0; c < kNumColors; ++c)
            if (raw(1 + static_cast<size_t>(c)) > best_c) {
                best_c = raw(1 + static_cast<size_t>(c));
                color = c;
            }
        int shape = 0;
        double best_s = -1e300;
        for (int sdx = 0; sdx < kNumShapes; ++sdx)
            if (raw(1 + kNumColors + static_cast<size_t>(sdx)) > best_s) {
                best_s = raw(1 + kNumColors + static_cast<size_t>(sdx));
                shape = sdx;
            }
        img.cells()[static_cast<size_t>(cell)] =
            GridImage::code_of(static_cast<Color>(color), static_cast<Shape>(shape));
    }
    return img;
}

namespace {

void write_vec(std::ostream& os, const std::vector<double>& v) {
    uint64_t n = v.size();
    os.write(reinterpret_cast<const char*>(&n), sizeof(n));
    os.write(reinterpret_cast<const char*>(v.data()), static_cast<std::streamsize>(n * sizeof(double)));
}

std::vector<double> read_vec(std::istream& is) {
    uint64_t n = 0;
    is.read(reinterpret_cast<char*>(&n), sizeof(n));
    std::vector<double> v(n);
    is.read(reinterpret_cast<char*>(v.data()), static_cast<std::streamsize>(n * sizeof(double)));
    if (!is) throw IoError("codec params truncated");
    return v;
}

}  // namespace

void CodecParams::save(std::ostream& os) const {
    int32_t header[4] = {grid_h, grid_w, dim, identity ? 1 : 0};
    os.write(reinterpret_cast<const char*>(header), sizeof(header));
    write_vec(os, mean);
    write_vec(os, rot);
    write_vec(os, scale);
}

CodecParams CodecParams::load(std::istream& is) {
    int32_t header[4];
    is.read(reinterpret_cast<char*>(header), sizeof(header));
    if (!is) throw IoError("codec params truncated");
    CodecParams p;
    p.grid_h = header[0];
    p.grid_w = header[1];
    p.dim = header[2];
    p.identity = header[3] != 0;
    p.mean = read_vec(is);
    p.rot = read_vec(is);
    p.scale = read_vec(is);
    return p;
}

}  // namespace gridflow
