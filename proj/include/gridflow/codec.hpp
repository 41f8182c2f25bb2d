#pragma once

#include <iosfwd>
#include <vector>

#include "gridflow/world.hpp"

namespace gridflow {

using LatentVec = std::vector<double>;

// Number of latent channels per grid cell: occupancy, one-hot color,
// one-hot shape.
inline constexpr int kCodecChannels = 1 + kNumColors + kNumShapes;
inline int compact_codec_dim(GridConfig grid) { return grid.h * grid.w * kCodecChannels; }

// Fixed linear codec between grid images and latent vectors.
//
// The compact form (D = H*W*kCodecChannels) expands each cell into occupancy,
// color and shape indicator channels and normalizes each channel by its
// corpus mean and scale (component loading +1 per channel). Decoding inverts
// the affine map and quantizes per cell: threshold occupancy, argmax the
// color and shape groups; equivalently the argmax of a linear score over the
// 41-code alphabet. The identity form (D = F, the flat one-hot feature
// dimension) is a centered one-hot passthrough.
//
// Either way decode(encode(g)) == g for every valid grid, not just corpus
// members: the affine map is invertible per dimension and quantization
// absorbs float noise.
struct CodecParams {
    int grid_h = 12;
    int grid_w = 12;
    int dim = 2016;        // latent dimension D
    bool identity = false; // D == F passthrough form

    std::vector<double> mean;   // per input dimension (cells, or one-hot features)
    std::vector<double> rot;    // reserved (identity basis); kept for file layout
    std::vector<double> scale;  // per latent dimension

    int feature_dim() const { return grid_h * grid_w * GridImage::code_count(); }

    void save(std::ostream& os) const;
    static CodecParams load(std::istream& is);
    bool operator==(const CodecParams&) const = default;
};

// Principal-component fit (sign convention: first nonzero loading positive).
// Supported D: grid_h*grid_w (compact) and the full one-hot feature dimension
// (identity). D greater than the feature dimension is a configuration error.
CodecParams fit_codec(const std::vector<GridImage>& corpus, int dim);

LatentVec encode(const CodecParams& params, const GridImage& img);
GridImage decode(const CodecParams& params, const LatentVec& z);

}  // namespace gridflow
