#pragma once

#include <cstdint>
#include <iosfwd>
#include <string>
#include <vector>

#include "gridflow/codec.hpp"
#include "gridflow/rng.hpp"

namespace gridflow {

// Which branch a parameter belongs to. Text routing uses `und`, image-latent
// routing uses `gen`; embeddings and attention are shared.
enum class Partition : uint8_t { und, gen, shared };
const std::string& partition_name(Partition p);

struct ModelConfig {
    int vocab = 64;
    int d_model = 48;
    int layers = 3;
    int heads = 4;
    int ffn_hidden = 96;
    int latent_dim = 144;    // D
    int latent_hidden = 256; // velocity head hidden width
    int image_slots = 1;     // spatial slots per image; slot_dim = latent_dim / image_slots
    int max_pos = 160;       // within-segment position budget
    int time_features = 8;
    double r_cap = 8.0;      // cap on the 1/(1-t) factor in the velocity head

    int head_dim() const { return d_model / heads; }
    int slot_dim() const { return latent_dim / image_slots; }
    void validate() const;
    bool operator==(const ModelConfig&) const = default;
};

enum class PosKind : uint8_t { text, image };
enum class PosRole : uint8_t { context, supervised, unsupervised };

// One element of the mixed sequence. Text positions carry an input token and
// a target token (next-token teacher forcing); image positions carry a latent
// z at flow time t. A noisy slot is a generation target producing a trainable
// velocity; a clean slot (t = 1) conditions later positions on a finished
// image.
struct Position {
    PosKind kind = PosKind::text;
    PosRole role = PosRole::context;
    int token = -1;
    int target = -1;
    LatentVec z;         // this slot's latent slice
    double t = 1.0;
    bool noisy = false;
    LatentVec u_target;  // this slot's velocity-target slice
    int image_id = -1;
    int slot = 0;        // slot index within the image
    int segment = 0;
    int seg_pos = 0;
};

struct SequenceLayout {
    std::vector<Position> positions;

    int size() const { return static_cast<int>(positions.size()); }
    void validate(const ModelConfig& cfg) const;
    // Causal over the mixed sequence, blocked across segments, full
    // self-attention among the slots of one image.
    bool attends(int i, int j) const;
};

struct ParamView {
    std::string name;
    Partition partition;
    size_t offset;
    int rows;
    int cols;
    size_t count() const { return static_cast<size_t>(rows) * static_cast<size_t>(cols); }
};

class ModelParams {
public:
    explicit ModelParams(ModelConfig cfg);

    void init(Rng& rng);  // random init; heads start at zero (uniform logits)

    const ModelConfig& config() const { return cfg_; }
    std::vector<double>& flat() { return flat_; }
    const std::vector<double>& flat() const { return flat_; }
    size_t size() const { return flat_.size(); }

    const std::vector<ParamView>& views() const { return views_; }
    const ParamView& view(const std::string& name) const;
    double* data(const ParamView& v) { return flat_.data() + v.offset; }
    const double* data(const ParamView& v) const { return flat_.data() + v.offset; }
    double* data(const std::string& name) { return flat_.data() + view(name).offset; }
    const double* data(const std::string& name) const { return flat_.data() + view(name).offset; }

    Partition partition_of(size_t flat_index) const { return partition_map_[flat_index]; }

    void save(std::ostream& os) const;
    static ModelParams load(std::istream& is);

private:
    void register_view(const std::string& name, Partition p, int rows, int cols);

    ModelConfig cfg_;
    std::vector<double> flat_;
    std::vector<ParamView> views_;
    std::vector<Partition> partition_map_;
};

// Disjoint, exhaustive split of the parameter vector by label.
struct PartitionSizes {
    size_t und = 0;
    size_t gen = 0;
    size_t shared = 0;
    size_t total() const { return und + gen + shared; }
};
PartitionSizes param_partition(const ModelParams& params);

struct ForwardResult {
    std::vector<int> text_pos;   // layout indices of text positions
    std::vector<double> logits;  // num_text x vocab
    std::vector<int> image_pos;  // layout indices of image positions
    std::vector<double> u;       // num_images x D, the velocity field output
    std::vector<double> f;       // num_images x D, predicted data latent

    int logit_rows() const { return static_cast<int>(text_pos.size()); }
    const double* logits_row(int r) const;
    const double* u_row(int r) const;
};

struct TextLossResult {
    double value = 0.0;
    bool has_supervised = false;
    int count = 0;
};

struct LossBreakdown {
    double text = 0.0;
    double image = 0.0;
    double total = 0.0;
    bool has_text = false;
    bool has_image = false;
};

ForwardResult forward(const ModelParams& params, const SequenceLayout& layout);

// Mean NLL over supervised text positions; context and unsupervised positions
// contribute exactly zero.
TextLossResult text_loss(const ForwardResult& out, const SequenceLayout& layout);

// Mean over supervised noisy images of the per-dimension mean squared
// velocity error. Draft (unsupervised) images contribute exactly zero.
double image_loss(const std::vector<double>& u_pred, const std::vector<double>& u_star,
                  const SequenceLayout& layout, const std::vector<int>& image_pos);
double image_loss(const ForwardResult& out, const SequenceLayout& layout);

inline double total_loss(double l_text, double l_img, double lambda_text, double lambda_img) {
    return lambda_text * l_text + lambda_img * l_img;
}

// Forward + reverse pass for lambda_text*L_text + lambda_img*L_img.
// `grads` is resized and overwritten.
LossBreakdown loss_and_grad(const ModelParams& params, const SequenceLayout& layout,
                            double lambda_text, double lambda_img, std::vector<double>& grads);

LossBreakdown loss_only(const ModelParams& params, const SequenceLayout& layout,
                        double lambda_text, double lambda_img);

// ---------------------------------------------------------------------------
// Layout grammar shared by training and inference.
//
// Text flows through a sample as one token stream with teacher-forced inputs:
// the first text position of a segment takes <bos> (nothing before it) or
// <eot> (a previous text block ended), every later position takes the
// previous token, and each block closes with a terminator position whose
// target is <eot>. Image slots sit between blocks without consuming the
// stream.

// Appends tokens plus the terminator position; role applies to the whole block.
void append_text_block(SequenceLayout& layout, int segment, const std::vector<int>& tokens,
                       PosRole role);
// Appends a single text position (greedy-decode step).
void append_text_position(SequenceLayout& layout, int segment, int input_token,
                          PosRole role = PosRole::context);
// Appends one image slot.
void append_image_slot(SequenceLayout& layout, int segment, const LatentVec& z, double t,
                       bool noisy, PosRole role, const LatentVec& u_target, int image_id,
                       int slot = 0);
// Appends a whole image as `slots` consecutive positions, slicing the full
// latent (and target) row-major across them.
void append_image_block(SequenceLayout& layout, int segment, const LatentVec& z, double t,
                        bool noisy, PosRole role, const LatentVec& u_target, int image_id,
                        int slots);

int next_seg_pos(const SequenceLayout& layout, int segment);

}  // namespace gridflow
