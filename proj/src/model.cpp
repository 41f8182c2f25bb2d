#include "gridflow/model.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <cstring>
#include <istream>
#include <ostream>

#include "gridflow/error.hpp"

namespace gridflow {

namespace {

constexpr double kLnEps = 1e-5;
constexpr double kPi = 3.14159265358979323846;

std::string blk(int l, const std::string& suffix) {
    return "blk" + std::to_string(l) + "." + suffix;
}

// y[i,o] = sum_j x[i,j] * W[o,j] + b[o]; W stored row-major (out x in).
void linear_fwd(const double* x, int n, int in, const double* W, const double* b, int out,
                double* y) {
    for (int i = 0; i < n; ++i) {
        const double* xi = x + static_cast<size_t>(i) * in;
        double* yi = y + static_cast<size_t>(i) * out;
        for (int o = 0; o < out; ++o) {
            const double* wo = W + static_cast<size_t>(o) * in;
            double acc = b ? b[o] : 0.0;
            for (int j = 0; j < in; ++j) acc += xi[j] * wo[j];
            yi[o] = acc;
        }
    }
}

// Accumulates dx, dW, db for the layer above.
void linear_bwd(const double* x, const double* dy, int n, int in, int out, const double* W,
                double* dx, double* dW, double* db) {
    for (int i = 0; i < n; ++i) {
        const double* xi = x + static_cast<size_t>(i) * in;
        const double* dyi = dy + static_cast<size_t>(i) * out;
        double* dxi = dx ? dx + static_cast<size_t>(i) * in : nullptr;
        for (int o = 0; o < out; ++o) {
            double g = dyi[o];
            if (g == 0.0) continue;
            const double* wo = W + static_cast<size_t>(o) * in;
            double* dwo = dW + static_cast<size_t>(o) * in;
            if (db) db[o] += g;
            for (int j = 0; j < in; ++j) {
                dwo[j] += g * xi[j];
                if (dxi) dxi[j] += g * wo[j];
            }
        }
    }
}

// LayerNorm with gain/bias. Saves xhat and inv stddev for the backward pass.
void ln_fwd(const double* x, int n, int d, const double* g, const double* b, double* y,
            double* xhat, double* inv) {
    for (int i = 0; i < n; ++i) {
        const double* xi = x + static_cast<size_t>(i) * d;
        double mu = 0.0;
        for (int j = 0; j < d; ++j) mu += xi[j];
        mu /= d;
        double var = 0.0;
        for (int j = 0; j < d; ++j) {
            double c = xi[j] - mu;
            var += c * c;
        }
        var /= d;
        double iv = 1.0 / std::sqrt(var + kLnEps);
        inv[i] = iv;
        double* xh = xhat + static_cast<size_t>(i) * d;
        double* yi = y + static_cast<size_t>(i) * d;
        for (int j = 0; j < d; ++j) {
            xh[j] = (xi[j] - mu) * iv;
            yi[j] = xh[j] * g[j] + b[j];
        }
    }
}

// Single-row layernorm backward. Accumulates into dx, dg, db.
void ln_bwd_row(const double* dout, const double* xhat, double inv, int d, const double* g,
                double* dx, double* dg, double* db) {
    double mean_dxhat = 0.0, mean_dxhat_xhat = 0.0;
    for (int j = 0; j < d; ++j) {
        double dxh = dout[j] * g[j];
        mean_dxhat += dxh;
        mean_dxhat_xhat += dxh * xhat[j];
        dg[j] += dout[j] * xhat[j];
        db[j] += dout[j];
    }
    mean_dxhat /= d;
    mean_dxhat_xhat /= d;
    for (int j = 0; j < d; ++j) {
        double dxh = dout[j] * g[j];
        dx[j] += inv * (dxh - mean_dxhat - xhat[j] * mean_dxhat_xhat);
    }
}

void time_features(double t, int count, double* out) {
    for (int k = 0; k < count / 2; ++k) {
        double f = kPi * t * static_cast<double>(1 << k);
        out[2 * k] = std::sin(f);
        out[2 * k + 1] = std::cos(f);
    }
}

double rate_factor(double t, double r_cap) {
    double rem = 1.0 - t;
    if (rem <= 1.0 / r_cap) return r_cap;
    return 1.0 / rem;
}

struct LayerTrace {
    std::vector<double> x_in, ln1_y, ln1_xhat, ln1_inv;
    std::vector<double> q, k, v, att, ctx;
    std::vector<double> x_mid, ln2_y, ln2_xhat, ln2_inv;
    std::vector<double> ffn_pre;
};

struct Trace {
    std::vector<double> x0;
    std::vector<LayerTrace> layers;
    std::vector<double> x_final;
    std::vector<double> lnf_y, lnf_xhat, lnf_inv;
    std::vector<double> vh_pre;  // num_images x latent_hidden
    std::vector<double> phi;     // num_images x time_features
    std::vector<char> allowed;   // n x n attention mask
};

}  // namespace

const std::string& partition_name(Partition p) {
    static const std::vector<std::string> names = {"und", "gen", "shared"};
    return names[static_cast<size_t>(p)];
}

void ModelConfig::validate() const {
    if (vocab < 5) throw ConfigError("model: vocab too small");
    if (d_model <= 0 || heads <= 0 || d_model % heads != 0)
        throw ConfigError("model: d_model must be a positive multiple of heads");
    if (layers <= 0 || ffn_hidden <= 0 || latent_dim <= 0 || latent_hidden <= 0)
        throw ConfigError("model: dimensions must be positive");
    if (image_slots <= 0 || latent_dim % image_slots != 0)
        throw ConfigError("model: image_slots must divide latent_dim");
    if (max_pos <= 1) throw ConfigError("model: max_pos too small");
    if (time_features <= 0 || time_features % 2 != 0)
        throw ConfigError("model: time_features must be positive and even");
    if (r_cap < 1.0) throw ConfigError("model: r_cap must be >= 1");
}

bool SequenceLayout::attends(int i, int j) const {
    const Position& a = positions[static_cast<size_t>(i)];
    const Position& b = positions[static_cast<size_t>(j)];
    if (a.segment != b.segment) return false;
    if (j <= i) return true;
    return a.image_id >= 0 && a.image_id == b.image_id;
}

void SequenceLayout::validate(const ModelConfig& cfg) const {
    if (positions.empty()) throw InputError("layout: empty");
    std::vector<std::pair<int, double>> image_t;
    for (const auto& p : positions) {
        int role = static_cast<int>(p.role);
        if (role < 0 || role > 2) throw InputError("layout: position with unknown role label");
        if (p.seg_pos < 0 || p.seg_pos >= cfg.max_pos)
            throw InputError("layout: segment position exceeds budget");
        if (p.kind == PosKind::text) {
            if (p.token < 0 || p.token >= cfg.vocab) throw InputError("layout: token out of range");
            if (p.role == PosRole::supervised && (p.target < 0 || p.target >= cfg.vocab))
                throw InputError("layout: supervised text needs a target");
        } else {
            if (static_cast<int>(p.z.size()) != cfg.slot_dim())
                throw InputError("layout: image slot latent has wrong dimension");
            for (double v : p.z)
                if (!std::isfinite(v)) throw InputError("layout: non-finite image latent");
            if (p.t < 0.0 || p.t > 1.0) throw InputError("layout: flow time out of [0,1]");
            if (p.slot < 0 || p.slot >= cfg.image_slots)
                throw InputError("layout: slot index out of range");
            if (p.role == PosRole::supervised && !p.noisy)
                throw InputError("layout: supervised image must be a noisy slot");
            if (p.role == PosRole::supervised &&
                static_cast<int>(p.u_target.size()) != cfg.slot_dim())
                throw InputError("layout: supervised image slot needs a velocity target");
            if (p.image_id >= 0) {
                bool found = false;
                for (auto& [id, t] : image_t)
                    if (id == p.image_id) {
                        if (t != p.t) throw InputError("layout: image slots disagree on t");
                        found = true;
                    }
                if (!found) image_t.push_back({p.image_id, p.t});
            }
        }
    }
}

ModelParams::ModelParams(ModelConfig cfg) : cfg_(cfg) {
    cfg_.validate();
    register_view("tok_emb", Partition::shared, cfg_.vocab, cfg_.d_model);
    register_view("pos_emb", Partition::shared, cfg_.max_pos, cfg_.d_model);
    register_view("img_in_w", Partition::gen, cfg_.d_model, cfg_.slot_dim());
    register_view("img_in_b", Partition::gen, cfg_.d_model, 1);
    register_view("time_w", Partition::gen, cfg_.d_model, cfg_.time_features);
    register_view("slot_emb", Partition::gen, cfg_.image_slots, cfg_.d_model);
    for (int l = 0; l < cfg_.layers; ++l) {
        register_view(blk(l, "ln1_g"), Partition::shared, cfg_.d_model, 1);
        register_view(blk(l, "ln1_b"), Partition::shared, cfg_.d_model, 1);
        for (const char* nm : {"wq", "wk", "wv", "wo"})
            register_view(blk(l, nm), Partition::shared, cfg_.d_model, cfg_.d_model);
        for (const char* nm : {"bq", "bk", "bv", "bo"})
            register_view(blk(l, nm), Partition::shared, cfg_.d_model, 1);
        for (auto part : {Partition::und, Partition::gen}) {
            std::string pfx = partition_name(part) + ".";
            register_view(blk(l, pfx + "ln2_g"), part, cfg_.d_model, 1);
            register_view(blk(l, pfx + "ln2_b"), part, cfg_.d_model, 1);
            register_view(blk(l, pfx + "w1"), part, cfg_.ffn_hidden, cfg_.d_model);
            register_view(blk(l, pfx + "b1"), part, cfg_.ffn_hidden, 1);
            register_view(blk(l, pfx + "w2"), part, cfg_.d_model, cfg_.ffn_hidden);
            register_view(blk(l, pfx + "b2"), part, cfg_.d_model, 1);
        }
    }
    register_view("lnf_und_g", Partition::und, cfg_.d_model, 1);
    register_view("lnf_und_b", Partition::und, cfg_.d_model, 1);
    register_view("lnf_gen_g", Partition::gen, cfg_.d_model, 1);
    register_view("lnf_gen_b", Partition::gen, cfg_.d_model, 1);
    register_view("head_t_w", Partition::und, cfg_.vocab, cfg_.d_model);
    register_view("head_t_b", Partition::und, cfg_.vocab, 1);
    register_view("head_v_w1", Partition::gen, cfg_.latent_hidden, cfg_.d_model);
    register_view("head_v_b1", Partition::gen, cfg_.latent_hidden, 1);
    register_view("head_v_w2", Partition::gen, cfg_.slot_dim(), cfg_.latent_hidden);
    register_view("head_v_b2", Partition::gen, cfg_.slot_dim(), 1);
}

void ModelParams::register_view(const std::string& name, Partition p, int rows, int cols) {
    ParamView v{name, p, flat_.size(), rows, cols};
    views_.push_back(v);
    flat_.resize(flat_.size() + v.count(), 0.0);
    partition_map_.resize(flat_.size(), p);
}

const ParamView& ModelParams::view(const std::string& name) const {
    for (const auto& v : views_)
        if (v.name == name) return v;
    throw InputError("unknown parameter view '" + name + "'");
}

void ModelParams::init(Rng& rng) {
    std::fill(flat_.begin(), flat_.end(), 0.0);
    double resid_scale = 1.0 / std::sqrt(2.0 * cfg_.layers);
    for (const auto& v : views_) {
        double* p = data(v);
        bool is_ln_gain = v.name.ends_with("ln1_g") || v.name.ends_with("ln2_g") ||
                          v.name.ends_with("lnf_und_g") || v.name.ends_with("lnf_gen_g");
        if (is_ln_gain) {
            std::fill(p, p + v.count(), 1.0);
            continue;
        }
        if (v.cols == 1) continue;  // biases stay zero
        if (v.name == "head_t_w" || v.name == "head_v_w2") continue;  // heads start flat
        double sigma = 0.5 / std::sqrt(static_cast<double>(v.cols));
        if (v.name.find("wo") != std::string::npos || v.name.find(".w2") != std::string::npos)
            sigma *= resid_scale;
        for (size_t i = 0; i < v.count(); ++i) p[i] = sigma * rng.normal();
    }
}

PartitionSizes param_partition(const ModelParams& params) {
    PartitionSizes s;
    for (const auto& v : params.views()) {
        if (v.partition == Partition::und) s.und += v.count();
        else if (v.partition == Partition::gen) s.gen += v.count();
        else s.shared += v.count();
    }
    return s;
}

const double* ForwardResult::logits_row(int r) const {
    size_t vocabsz = text_pos.empty() ? 0 : logits.size() / text_pos.size();
    return logits.data() + static_cast<size_t>(r) * vocabsz;
}

const double* ForwardResult::u_row(int r) const {
    size_t d = image_pos.empty() ? 0 : u.size() / image_pos.size();
    return u.data() + static_cast<size_t>(r) * d;
}

namespace {

void forward_impl(const ModelParams& params, const SequenceLayout& layout, ForwardResult& out,
                  Trace* trace) {
    const ModelConfig& cfg = params.config();
    layout.validate(cfg);
    const int n = layout.size();
    const int d = cfg.d_model;
    const int dh = cfg.head_dim();
    const double att_scale = 1.0 / std::sqrt(static_cast<double>(dh));

    Trace local;
    Trace& tr = trace ? *trace : local;

    tr.allowed.assign(static_cast<size_t>(n) * n, 0);
    for (int i = 0; i < n; ++i)
        for (int j = 0; j < n; ++j)
            tr.allowed[static_cast<size_t>(i) * n + j] = layout.attends(i, j) ? 1 : 0;

    out.text_pos.clear();
    out.image_pos.clear();
    for (int i = 0; i < n; ++i) {
        if (layout.positions[static_cast<size_t>(i)].kind == PosKind::text)
            out.text_pos.push_back(i);
        else
            out.image_pos.push_back(i);
    }
    const int n_img = static_cast<int>(out.image_pos.size());

    // Embeddings.
    tr.x0.assign(static_cast<size_t>(n) * d, 0.0);
    tr.phi.assign(static_cast<size_t>(n_img) * cfg.time_features, 0.0);
    const double* tok_emb = params.data("tok_emb");
    const double* pos_emb = params.data("pos_emb");
    const double* img_in_w = params.data("img_in_w");
    const double* img_in_b = params.data("img_in_b");
    const double* time_w = params.data("time_w");
    const double* slot_emb = params.data("slot_emb");
    int img_row = 0;
    for (int i = 0; i < n; ++i) {
        const Position& p = layout.positions[static_cast<size_t>(i)];
        double* xi = tr.x0.data() + static_cast<size_t>(i) * d;
        if (p.kind == PosKind::text) {
            const double* e = tok_emb + static_cast<size_t>(p.token) * d;
            for (int j = 0; j < d; ++j) xi[j] = e[j];
        } else {
            double* phi = tr.phi.data() + static_cast<size_t>(img_row) * cfg.time_features;
            time_features(p.t, cfg.time_features, phi);
            const double* se = slot_emb + static_cast<size_t>(p.slot) * d;
            const int sd = cfg.slot_dim();
            for (int j = 0; j < d; ++j) {
                double acc = img_in_b[j] + se[j];
                const double* wrow = img_in_w + static_cast<size_t>(j) * sd;
                for (int k = 0; k < sd; ++k) acc += wrow[k] * p.z[static_cast<size_t>(k)];
                const double* trow = time_w + static_cast<size_t>(j) * cfg.time_features;
                for (int k = 0; k < cfg.time_features; ++k) acc += trow[k] * phi[k];
                xi[j] = acc;
            }
            ++img_row;
        }
        const double* pe = pos_emb + static_cast<size_t>(p.seg_pos) * d;
        for (int j = 0; j < d; ++j) xi[j] += pe[j];
    }

    tr.layers.resize(static_cast<size_t>(cfg.layers));
    std::vector<double> x = tr.x0;

    for (int l = 0; l < cfg.layers; ++l) {
        LayerTrace& lt = tr.layers[static_cast<size_t>(l)];
        lt.x_in = x;
        lt.ln1_y.resize(static_cast<size_t>(n) * d);
        lt.ln1_xhat.resize(static_cast<size_t>(n) * d);
        lt.ln1_inv.resize(static_cast<size_t>(n));
        ln_fwd(lt.x_in.data(), n, d, params.data(blk(l, "ln1_g")), params.data(blk(l, "ln1_b")),
               lt.ln1_y.data(), lt.ln1_xhat.data(), lt.ln1_inv.data());

        lt.q.resize(static_cast<size_t>(n) * d);
        lt.k.resize(static_cast<size_t>(n) * d);
        lt.v.resize(static_cast<size_t>(n) * d);
        linear_fwd(lt.ln1_y.data(), n, d, params.data(blk(l, "wq")), params.data(blk(l, "bq")), d,
                   lt.q.data());
        linear_fwd(lt.ln1_y.data(), n, d, params.data(blk(l, "wk")), params.data(blk(l, "bk")), d,
                   lt.k.data());
        linear_fwd(lt.ln1_y.data(), n, d, params.data(blk(l, "wv")), params.data(blk(l, "bv")), d,
                   lt.v.data());

        lt.att.assign(static_cast<size_t>(cfg.heads) * n * n, 0.0);
        lt.ctx.assign(static_cast<size_t>(n) * d, 0.0);
        for (int h = 0; h < cfg.heads; ++h) {
            double* att_h = lt.att.data() + static_cast<size_t>(h) * n * n;
            for (int i = 0; i < n; ++i) {
                const double* qi = lt.q.data() + static_cast<size_t>(i) * d + h * dh;
                double* row = att_h + static_cast<size_t>(i) * n;
                double maxs = -1e300;
                for (int j = 0; j < n; ++j) {
                    if (!tr.allowed[static_cast<size_t>(i) * n + j]) continue;
                    const double* kj = lt.k.data() + static_cast<size_t>(j) * d + h * dh;
                    double s = 0.0;
                    for (int m = 0; m < dh; ++m) s += qi[m] * kj[m];
                    s *= att_scale;
                    row[j] = s;
                    if (s > maxs) maxs = s;
                }
                double denom = 0.0;
                for (int j = 0; j < n; ++j) {
                    if (!tr.allowed[static_cast<size_t>(i) * n + j]) continue;
                    row[j] = std::exp(row[j] - maxs);
                    denom += row[j];
                }
                double* ctx_i = lt.ctx.data() + static_cast<size_t>(i) * d + h * dh;
                for (int j = 0; j < n; ++j) {
                    if (!tr.allowed[static_cast<size_t>(i) * n + j]) {
                        row[j] = 0.0;
                        continue;
                    }
                    row[j] /= denom;
                    const double* vj = lt.v.data() + static_cast<size_t>(j) * d + h * dh;
                    for (int m = 0; m < dh; ++m) ctx_i[m] += row[j] * vj[m];
                }
            }
        }

        lt.x_mid.resize(static_cast<size_t>(n) * d);
        linear_fwd(lt.ctx.data(), n, d, params.data(blk(l, "wo")), params.data(blk(l, "bo")), d,
                   lt.x_mid.data());
        for (size_t i = 0; i < lt.x_mid.size(); ++i) lt.x_mid[i] += lt.x_in[i];

        // Expert-routed FFN.
        lt.ln2_y.resize(static_cast<size_t>(n) * d);
        lt.ln2_xhat.resize(static_cast<size_t>(n) * d);
        lt.ln2_inv.resize(static_cast<size_t>(n));
        lt.ffn_pre.resize(static_cast<size_t>(n) * cfg.ffn_hidden);
        x.assign(static_cast<size_t>(n) * d, 0.0);
        for (int i = 0; i < n; ++i) {
            const Position& p = layout.positions[static_cast<size_t>(i)];
            std::string pfx = (p.kind == PosKind::text) ? "und." : "gen.";
            ln_fwd(lt.x_mid.data() + static_cast<size_t>(i) * d, 1, d,
                   params.data(blk(l, pfx + "ln2_g")), params.data(blk(l, pfx + "ln2_b")),
                   lt.ln2_y.data() + static_cast<size_t>(i) * d,
                   lt.ln2_xhat.data() + static_cast<size_t>(i) * d, lt.ln2_inv.data() + i);
            double* pre = lt.ffn_pre.data() + static_cast<size_t>(i) * cfg.ffn_hidden;
            linear_fwd(lt.ln2_y.data() + static_cast<size_t>(i) * d, 1, d,
                       params.data(blk(l, pfx + "w1")), params.data(blk(l, pfx + "b1")),
                       cfg.ffn_hidden, pre);
            std::vector<double> post(static_cast<size_t>(cfg.ffn_hidden));
            for (int j = 0; j < cfg.ffn_hidden; ++j) post[static_cast<size_t>(j)] = pre[j] > 0 ? pre[j] : 0.0;
            double* xo = x.data() + static_cast<size_t>(i) * d;
            linear_fwd(post.data(), 1, cfg.ffn_hidden, params.data(blk(l, pfx + "w2")),
                       params.data(blk(l, pfx + "b2")), d, xo);
            const double* xm = lt.x_mid.data() + static_cast<size_t>(i) * d;
            for (int j = 0; j < d; ++j) xo[j] += xm[j];
        }
    }

    tr.x_final = x;

    // Final per-branch layernorm and heads.
    tr.lnf_y.resize(static_cast<size_t>(n) * d);
    tr.lnf_xhat.resize(static_cast<size_t>(n) * d);
    tr.lnf_inv.resize(static_cast<size_t>(n));
    for (int i = 0; i < n; ++i) {
        const Position& p = layout.positions[static_cast<size_t>(i)];
        const char* g = p.kind == PosKind::text ? "lnf_und_g" : "lnf_gen_g";
        const char* b = p.kind == PosKind::text ? "lnf_und_b" : "lnf_gen_b";
        ln_fwd(tr.x_final.data() + static_cast<size_t>(i) * d, 1, d, params.data(g), params.data(b),
               tr.lnf_y.data() + static_cast<size_t>(i) * d,
               tr.lnf_xhat.data() + static_cast<size_t>(i) * d, tr.lnf_inv.data() + i);
    }

    const int n_text = static_cast<int>(out.text_pos.size());
    out.logits.assign(static_cast<size_t>(n_text) * cfg.vocab, 0.0);
    for (int r = 0; r < n_text; ++r) {
        int i = out.text_pos[static_cast<size_t>(r)];
        linear_fwd(tr.lnf_y.data() + static_cast<size_t>(i) * d, 1, d, params.data("head_t_w"),
                   params.data("head_t_b"), cfg.vocab,
                   out.logits.data() + static_cast<size_t>(r) * cfg.vocab);
    }

    const int sd = cfg.slot_dim();
    out.u.assign(static_cast<size_t>(n_img) * sd, 0.0);
    out.f.assign(static_cast<size_t>(n_img) * sd, 0.0);
    tr.vh_pre.assign(static_cast<size_t>(n_img) * cfg.latent_hidden, 0.0);
    for (int r = 0; r < n_img; ++r) {
        int i = out.image_pos[static_cast<size_t>(r)];
        const Position& p = layout.positions[static_cast<size_t>(i)];
        double* pre = tr.vh_pre.data() + static_cast<size_t>(r) * cfg.latent_hidden;
        linear_fwd(tr.lnf_y.data() + static_cast<size_t>(i) * d, 1, d, params.data("head_v_w1"),
                   params.data("head_v_b1"), cfg.latent_hidden, pre);
        std::vector<double> post(static_cast<size_t>(cfg.latent_hidden));
        for (int j = 0; j < cfg.latent_hidden; ++j)
            post[static_cast<size_t>(j)] = pre[j] > 0 ? pre[j] : 0.0;
        double* fr = out.f.data() + static_cast<size_t>(r) * sd;
        linear_fwd(post.data(), 1, cfg.latent_hidden, params.data("head_v_w2"),
                   params.data("head_v_b2"), sd, fr);
        double rate = rate_factor(p.t, cfg.r_cap);
        double* ur = out.u.data() + static_cast<size_t>(r) * sd;
        for (int j = 0; j < sd; ++j)
            ur[j] = rate * (fr[j] - p.z[static_cast<size_t>(j)]);
    }
}

}  // namespace

ForwardResult forward(const ModelParams& params, const SequenceLayout& layout) {
    ForwardResult out;
    forward_impl(params, layout, out, nullptr);
    return out;
}

TextLossResult text_loss(const ForwardResult& out, const SequenceLayout& layout) {
    TextLossResult res;
    if (out.text_pos.empty()) return res;
    const size_t vocab = out.logits.size() / out.text_pos.size();
    double sum = 0.0;
    int count = 0;
    for (size_t r = 0; r < out.text_pos.size(); ++r) {
        const Position& p = layout.positions[static_cast<size_t>(out.text_pos[r])];
        if (p.role != PosRole::supervised) continue;
        const double* row = out.logits.data() + r * vocab;
        double maxv = row[0];
        for (size_t j = 1; j < vocab; ++j) maxv = std::max(maxv, row[j]);
        double denom = 0.0;
        for (size_t j = 0; j < vocab; ++j) denom += std::exp(row[j] - maxv);
        sum += std::log(denom) + maxv - row[static_cast<size_t>(p.target)];
        ++count;
    }
    if (count == 0) return res;
    res.value = sum / count;
    res.has_supervised = true;
    res.count = count;
    return res;
}

double image_loss(const std::vector<double>& u_pred, const std::vector<double>& u_star,
                  const SequenceLayout& layout, const std::vector<int>& image_pos) {
    if (image_pos.empty()) return 0.0;
    const size_t dim = u_pred.size() / image_pos.size();  // slot width
    if (u_star.size() != u_pred.size()) throw InputError("image_loss: size mismatch");
    // Mean over supervised images of the per-image mean squared error over all
    // of that image's latent dimensions (slots concatenate to one image).
    std::map<int, std::pair<double, int>> per_image;  // id -> (sum sq, dims)
    for (size_t r = 0; r < image_pos.size(); ++r) {
        const Position& p = layout.positions[static_cast<size_t>(image_pos[r])];
        if (p.role != PosRole::supervised || !p.noisy) continue;
        auto& acc = per_image[p.image_id];
        for (size_t j = 0; j < dim; ++j) {
            double dlt = u_pred[r * dim + j] - u_star[r * dim + j];
            acc.first += dlt * dlt;
        }
        acc.second += static_cast<int>(dim);
    }
    if (per_image.empty()) return 0.0;
    double sum = 0.0;
    for (const auto& [id, acc] : per_image) sum += acc.first / acc.second;
    return sum / static_cast<double>(per_image.size());
}

double image_loss(const ForwardResult& out, const SequenceLayout& layout) {
    if (out.image_pos.empty()) return 0.0;
    const size_t dim = out.u.size() / out.image_pos.size();
    std::vector<double> u_star(out.u.size(), 0.0);
    for (size_t r = 0; r < out.image_pos.size(); ++r) {
        const Position& p = layout.positions[static_cast<size_t>(out.image_pos[r])];
        if (p.role == PosRole::supervised && p.noisy)
            std::copy(p.u_target.begin(), p.u_target.end(), u_star.begin() + r * dim);
    }
    return image_loss(out.u, u_star, layout, out.image_pos);
}

LossBreakdown loss_only(const ModelParams& params, const SequenceLayout& layout,
                        double lambda_text, double lambda_img) {
    ForwardResult out = forward(params, layout);
    auto tl = text_loss(out, layout);
    double il = image_loss(out, layout);
    LossBreakdown lb;
    lb.text = tl.value;
    lb.image = il;
    lb.has_text = tl.has_supervised;
    for (int idx : out.image_pos) {
        const Position& p = layout.positions[static_cast<size_t>(idx)];
        if (p.role == PosRole::supervised && p.noisy) lb.has_image = true;
    }
    lb.total = total_loss(lb.text, lb.image, lambda_text, lambda_img);
    return lb;
}

LossBreakdown loss_and_grad(const ModelParams& params, const SequenceLayout& layout,
                            double lambda_text, double lambda_img, std::vector<double>& grads) {
    const ModelConfig& cfg = params.config();
    const int n = layout.size();
    const int d = cfg.d_model;
    const int dh = cfg.head_dim();
    const double att_scale = 1.0 / std::sqrt(static_cast<double>(dh));

    ForwardResult out;
    Trace tr;
    forward_impl(params, layout, out, &tr);

    grads.assign(params.size(), 0.0);
    auto g = [&](const std::string& name) { return grads.data() + params.view(name).offset; };

    LossBreakdown lb;
    auto tl = text_loss(out, layout);
    lb.text = tl.value;
    lb.has_text = tl.has_supervised;
    lb.image = image_loss(out, layout);
    std::map<int, int> sup_image_dims;  // image_id -> total latent dims
    for (int idx : out.image_pos) {
        const Position& p = layout.positions[static_cast<size_t>(idx)];
        if (p.role == PosRole::supervised && p.noisy)
            sup_image_dims[p.image_id] += static_cast<int>(p.z.size());
    }
    int n_sup_img = static_cast<int>(sup_image_dims.size());
    lb.has_image = n_sup_img > 0;
    lb.total = total_loss(lb.text, lb.image, lambda_text, lambda_img);

    // dL/dx at the trunk output.
    std::vector<double> dx(static_cast<size_t>(n) * d, 0.0);

    // Text head backward.
    if (tl.count > 0) {
        const double coef = lambda_text / static_cast<double>(tl.count);
        std::vector<double> dlogits(static_cast<size_t>(cfg.vocab));
        for (size_t r = 0; r < out.text_pos.size(); ++r) {
            int i = out.text_pos[r];
            const Position& p = layout.positions[static_cast<size_t>(i)];
            if (p.role != PosRole::supervised) continue;
            const double* row = out.logits.data() + r * static_cast<size_t>(cfg.vocab);
            double maxv = row[0];
            for (int j = 1; j < cfg.vocab; ++j) maxv = std::max(maxv, row[j]);
            double denom = 0.0;
            for (int j = 0; j < cfg.vocab; ++j) denom += std::exp(row[j] - maxv);
            for (int j = 0; j < cfg.vocab; ++j) {
                double soft = std::exp(row[j] - maxv) / denom;
                dlogits[static_cast<size_t>(j)] = coef * (soft - (j == p.target ? 1.0 : 0.0));
            }
            std::vector<double> dy(static_cast<size_t>(d), 0.0);
            linear_bwd(tr.lnf_y.data() + static_cast<size_t>(i) * d, dlogits.data(), 1, d,
                       cfg.vocab, params.data("head_t_w"), dy.data(), g("head_t_w"),
                       g("head_t_b"));
            ln_bwd_row(dy.data(), tr.lnf_xhat.data() + static_cast<size_t>(i) * d, tr.lnf_inv[static_cast<size_t>(i)],
                       d, params.data("lnf_und_g"), dx.data() + static_cast<size_t>(i) * d,
                       g("lnf_und_g"), g("lnf_und_b"));
        }
    }

    // Velocity head backward.
    if (n_sup_img > 0) {
        const int sd = cfg.slot_dim();
        for (size_t r = 0; r < out.image_pos.size(); ++r) {
            int i = out.image_pos[r];
            const Position& p = layout.positions[static_cast<size_t>(i)];
            if (p.role != PosRole::supervised || !p.noisy) continue;
            const double coef = lambda_img / static_cast<double>(n_sup_img) * 2.0 /
                                static_cast<double>(sup_image_dims.at(p.image_id));
            double rate = rate_factor(p.t, cfg.r_cap);
            std::vector<double> df(static_cast<size_t>(sd));
            const double* ur = out.u.data() + r * static_cast<size_t>(sd);
            for (int j = 0; j < sd; ++j)
                df[static_cast<size_t>(j)] =
                    coef * (ur[j] - p.u_target[static_cast<size_t>(j)]) * rate;
            // Through the two-layer head.
            const double* pre = tr.vh_pre.data() + r * static_cast<size_t>(cfg.latent_hidden);
            std::vector<double> post(static_cast<size_t>(cfg.latent_hidden));
            for (int j = 0; j < cfg.latent_hidden; ++j)
                post[static_cast<size_t>(j)] = pre[j] > 0 ? pre[j] : 0.0;
            std::vector<double> dpost(static_cast<size_t>(cfg.latent_hidden), 0.0);
            linear_bwd(post.data(), df.data(), 1, cfg.latent_hidden, sd,
                       params.data("head_v_w2"), dpost.data(), g("head_v_w2"), g("head_v_b2"));
            for (int j = 0; j < cfg.latent_hidden; ++j)
                if (pre[j] <= 0) dpost[static_cast<size_t>(j)] = 0.0;
            std::vector<double> dy(static_cast<size_t>(d), 0.0);
            linear_bwd(tr.lnf_y.data() + static_cast<size_t>(i) * d, dpost.data(), 1, d,
                       cfg.latent_hidden, params.data("head_v_w1"), dy.data(), g("head_v_w1"),
                       g("head_v_b1"));
            ln_bwd_row(dy.data(), tr.lnf_xhat.data() + static_cast<size_t>(i) * d,
                       tr.lnf_inv[static_cast<size_t>(i)], d, params.data("lnf_gen_g"),
                       dx.data() + static_cast<size_t>(i) * d, g("lnf_gen_g"), g("lnf_gen_b"));
        }
    }

    // Blocks in reverse.
    for (int l = cfg.layers - 1; l >= 0; --l) {
        const LayerTrace& lt = tr.layers[static_cast<size_t>(l)];

        // FFN (expert-routed). x_out = x_mid + W2 relu(W1 ln2(x_mid)).
        std::vector<double> dx_mid = dx;  // residual branch
        for (int i = 0; i < n; ++i) {
            const Position& p = layout.positions[static_cast<size_t>(i)];
            std::string pfx = (p.kind == PosKind::text) ? "und." : "gen.";
            const double* pre = lt.ffn_pre.data() + static_cast<size_t>(i) * cfg.ffn_hidden;
            std::vector<double> post(static_cast<size_t>(cfg.ffn_hidden));
            for (int j = 0; j < cfg.ffn_hidden; ++j)
                post[static_cast<size_t>(j)] = pre[j] > 0 ? pre[j] : 0.0;
            std::vector<double> dpost(static_cast<size_t>(cfg.ffn_hidden), 0.0);
            linear_bwd(post.data(), dx.data() + static_cast<size_t>(i) * d, 1, cfg.ffn_hidden, d,
                       params.data(blk(l, pfx + "w2")), dpost.data(), g(blk(l, pfx + "w2")),
                       g(blk(l, pfx + "b2")));
            for (int j = 0; j < cfg.ffn_hidden; ++j)
                if (pre[j] <= 0) dpost[static_cast<size_t>(j)] = 0.0;
            std::vector<double> dy(static_cast<size_t>(d), 0.0);
            linear_bwd(lt.ln2_y.data() + static_cast<size_t>(i) * d, dpost.data(), 1, d,
                       cfg.ffn_hidden, params.data(blk(l, pfx + "w1")), dy.data(),
                       g(blk(l, pfx + "w1")), g(blk(l, pfx + "b1")));
            ln_bwd_row(dy.data(), lt.ln2_xhat.data() + static_cast<size_t>(i) * d,
                       lt.ln2_inv[static_cast<size_t>(i)], d, params.data(blk(l, pfx + "ln2_g")),
                       dx_mid.data() + static_cast<size_t>(i) * d, g(blk(l, pfx + "ln2_g")),
                       g(blk(l, pfx + "ln2_b")));
        }

        // Attention. x_mid = x_in + Wo ctx.
        std::vector<double> dctx(static_cast<size_t>(n) * d, 0.0);
        linear_bwd(lt.ctx.data(), dx_mid.data(), n, d, d, params.data(blk(l, "wo")), dctx.data(),
                   g(blk(l, "wo")), g(blk(l, "bo")));

        std::vector<double> dq(static_cast<size_t>(n) * d, 0.0);
        std::vector<double> dk(static_cast<size_t>(n) * d, 0.0);
        std::vector<double> dv(static_cast<size_t>(n) * d, 0.0);
        std::vector<double> datt_row(static_cast<size_t>(n), 0.0);
        for (int h = 0; h < cfg.heads; ++h) {
            const double* att_h = lt.att.data() + static_cast<size_t>(h) * n * n;
            for (int i = 0; i < n; ++i) {
                const double* dctx_i = dctx.data() + static_cast<size_t>(i) * d + h * dh;
                const double* row = att_h + static_cast<size_t>(i) * n;
                double rowsum = 0.0;
                for (int j = 0; j < n; ++j) {
                    if (!tr.allowed[static_cast<size_t>(i) * n + j]) {
                        datt_row[static_cast<size_t>(j)] = 0.0;
                        continue;
                    }
                    const double* vj = lt.v.data() + static_cast<size_t>(j) * d + h * dh;
                    double acc = 0.0;
                    for (int m = 0; m < dh; ++m) acc += dctx_i[m] * vj[m];
                    datt_row[static_cast<size_t>(j)] = acc;
                    rowsum += row[j] * acc;
                    double* dvj = dv.data() + static_cast<size_t>(j) * d + h * dh;
                    for (int m = 0; m < dh; ++m) dvj[m] += row[j] * dctx_i[m];
                }
                const double* qi = lt.q.data() + static_cast<size_t>(i) * d + h * dh;
                double* dqi = dq.data() + static_cast<size_t>(i) * d + h * dh;
                for (int j = 0; j < n; ++j) {
                    if (!tr.allowed[static_cast<size_t>(i) * n + j]) continue;
                    double dscore = row[j] * (datt_row[static_cast<size_t>(j)] - rowsum) * att_scale;
                    if (dscore == 0.0) continue;
                    const double* kj = lt.k.data() + static_cast<size_t>(j) * d + h * dh;
                    double* dkj = dk.data() + static_cast<size_t>(j) * d + h * dh;
                    for (int m = 0; m < dh; ++m) {
                        dqi[m] += dscore * kj[m];
                        dkj[m] += dscore * qi[m];
                    }
                }
            }
        }

        std::vector<double> dln1(static_cast<size_t>(n) * d, 0.0);
        linear_bwd(lt.ln1_y.data(), dq.data(), n, d, d, params.data(blk(l, "wq")), dln1.data(),
                   g(blk(l, "wq")), g(blk(l, "bq")));
        linear_bwd(lt.ln1_y.data(), dk.data(), n, d, d, params.data(blk(l, "wk")), dln1.data(),
                   g(blk(l, "wk")), g(blk(l, "bk")));
        linear_bwd(lt.ln1_y.data(), dv.data(), n, d, d, params.data(blk(l, "wv")), dln1.data(),
                   g(blk(l, "wv")), g(blk(l, "bv")));

        // dx_in = dx_mid (residual) + ln1 backward of dln1.
        for (int i = 0; i < n; ++i)
            ln_bwd_row(dln1.data() + static_cast<size_t>(i) * d,
                       lt.ln1_xhat.data() + static_cast<size_t>(i) * d,
                       lt.ln1_inv[static_cast<size_t>(i)], d, params.data(blk(l, "ln1_g")),
                       dx_mid.data() + static_cast<size_t>(i) * d, g(blk(l, "ln1_g")),
                       g(blk(l, "ln1_b")));
        dx = std::move(dx_mid);
    }

    // Embedding backward.
    double* g_tok = g("tok_emb");
    double* g_pos = g("pos_emb");
    double* g_imgw = g("img_in_w");
    double* g_imgb = g("img_in_b");
    double* g_time = g("time_w");
    double* g_slot = g("slot_emb");
    const int sdim = cfg.slot_dim();
    int img_row = 0;
    for (int i = 0; i < n; ++i) {
        const Position& p = layout.positions[static_cast<size_t>(i)];
        const double* dxi = dx.data() + static_cast<size_t>(i) * d;
        if (p.kind == PosKind::text) {
            double* row = g_tok + static_cast<size_t>(p.token) * d;
            for (int j = 0; j < d; ++j) row[j] += dxi[j];
        } else {
            const double* phi = tr.phi.data() + static_cast<size_t>(img_row) * cfg.time_features;
            double* srow = g_slot + static_cast<size_t>(p.slot) * d;
            for (int j = 0; j < d; ++j) {
                double gj = dxi[j];
                if (gj != 0.0) {
                    double* wrow = g_imgw + static_cast<size_t>(j) * sdim;
                    for (int k = 0; k < sdim; ++k) wrow[k] += gj * p.z[static_cast<size_t>(k)];
                    double* trow = g_time + static_cast<size_t>(j) * cfg.time_features;
                    for (int k = 0; k < cfg.time_features; ++k) trow[k] += gj * phi[k];
                    g_imgb[j] += gj;
                    srow[j] += gj;
                }
            }
            ++img_row;
        }
        double* prow = g_pos + static_cast<size_t>(p.seg_pos) * d;
        for (int j = 0; j < d; ++j) prow[j] += dxi[j];
    }

    return lb;
}

int next_seg_pos(const SequenceLayout& layout, int segment) {
    int n = 0;
    for (const auto& p : layout.positions)
        if (p.segment == segment) ++n;
    return n;
}

namespace {

constexpr int kBosToken = 1;  // Tokenizer::kBos
constexpr int kEotToken = 2;  // Tokenizer::kEot

int last_text_target(const SequenceLayout& layout, int segment) {
    for (auto it = layout.positions.rbegin(); it != layout.positions.rend(); ++it)
        if (it->segment == segment && it->kind == PosKind::text) return kEotToken;
    return kBosToken;
}

}  // namespace

void append_text_block(SequenceLayout& layout, int segment, const std::vector<int>& tokens,
                       PosRole role) {
    int prev = last_text_target(layout, segment);
    int seg_pos = next_seg_pos(layout, segment);
    for (size_t i = 0; i <= tokens.size(); ++i) {
        Position p;
        p.kind = PosKind::text;
        p.role = role;
        p.token = prev;
        p.target = i < tokens.size() ? tokens[i] : kEotToken;
        p.segment = segment;
        p.seg_pos = seg_pos++;
        if (i < tokens.size()) prev = tokens[i];
        layout.positions.push_back(std::move(p));
    }
}

void append_text_position(SequenceLayout& layout, int segment, int input_token, PosRole role) {
    Position p;
    p.kind = PosKind::text;
    p.role = role;
    p.token = input_token;
    p.target = -1;
    p.segment = segment;
    p.seg_pos = next_seg_pos(layout, segment);
    layout.positions.push_back(std::move(p));
}

void append_image_slot(SequenceLayout& layout, int segment, const LatentVec& z, double t,
                       bool noisy, PosRole role, const LatentVec& u_target, int image_id,
                       int slot) {
    Position p;
    p.kind = PosKind::image;
    p.role = role;
    p.z = z;
    p.t = t;
    p.noisy = noisy;
    p.u_target = u_target;
    p.image_id = image_id;
    p.slot = slot;
    p.segment = segment;
    p.seg_pos = next_seg_pos(layout, segment);
    layout.positions.push_back(std::move(p));
}

void append_image_block(SequenceLayout& layout, int segment, const LatentVec& z, double t,
                        bool noisy, PosRole role, const LatentVec& u_target, int image_id,
                        int slots) {
    if (slots <= 0 || z.size() % static_cast<size_t>(slots) != 0)
        throw InputError("append_image_block: slots must divide the latent dimension");
    const size_t sd = z.size() / static_cast<size_t>(slots);
    for (int s = 0; s < slots; ++s) {
        LatentVec zs(z.begin() + static_cast<long>(s * sd), z.begin() + static_cast<long>((s + 1) * sd));
        LatentVec us;
        if (!u_target.empty()) {
            if (u_target.size() != z.size())
                throw InputError("append_image_block: target dimension mismatch");
            us.assign(u_target.begin() + static_cast<long>(s * sd),
                      u_target.begin() + static_cast<long>((s + 1) * sd));
        }
        append_image_slot(layout, segment, zs, t, noisy, role, us, image_id, s);
    }
}

void ModelParams::save(std::ostream& os) const {
    int32_t ints[10] = {cfg_.vocab,      cfg_.d_model,     cfg_.layers,
                        cfg_.heads,      cfg_.ffn_hidden,  cfg_.latent_dim,
                        cfg_.latent_hidden, cfg_.max_pos,  cfg_.time_features,
                        cfg_.image_slots};
    os.write(reinterpret_cast<const char*>(ints), sizeof(ints));
    os.write(reinterpret_cast<const char*>(&cfg_.r_cap), sizeof(double));
    uint64_t count = flat_.size();
    os.write(reinterpret_cast<const char*>(&count), sizeof(count));
    os.write(reinterpret_cast<const char*>(flat_.data()),
             static_cast<std::streamsize>(count * sizeof(double)));
}

ModelParams ModelParams::load(std::istream& is) {
    int32_t ints[10];
    is.read(reinterpret_cast<char*>(ints), sizeof(ints));
    ModelConfig cfg;
    cfg.vocab = ints[0];
    cfg.d_model = ints[1];
    cfg.layers = ints[2];
    cfg.heads = ints[3];
    cfg.ffn_hidden = ints[4];
    cfg.latent_dim = ints[5];
    cfg.latent_hidden = ints[6];
    cfg.max_pos = ints[7];
    cfg.time_features = ints[8];
    cfg.image_slots = ints[9];
    is.read(reinterpret_cast<char*>(&cfg.r_cap), sizeof(double));
    uint64_t count = 0;
    is.read(reinterpret_cast<char*>(&count), sizeof(count));
    ModelParams p(cfg);
    if (count != p.size()) throw IoError("model params: size mismatch");
    is.read(reinterpret_cast<char*>(p.flat_.data()),
            static_cast<std::streamsize>(count * sizeof(double)));
    if (!is) throw IoError("model params truncated");
    return p;
}

}  // namespace gridflow
