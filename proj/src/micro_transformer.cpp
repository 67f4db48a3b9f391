#include "crane/micro_transformer.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>

#include "json.hpp"

#include "crane/errors.hpp"
#include "crane/parallel.hpp"
#include "crane/rng.hpp"

namespace crane {

using nlohmann::json;
using Eigen::MatrixXd;
using Eigen::VectorXd;

namespace {
constexpr double kNormEps = 1e-6;
}

void MicroConfig::validate() const {
    if (vocab < 2) throw ValidationError("micro config: vocab must be >= 2");
    if (d_model < 1 || n_layers < 1 || n_heads < 1 || ffn_mult < 1)
        throw ValidationError("micro config: sizes must be positive");
    if (d_model % n_heads != 0)
        throw ValidationError("micro config: d_model must be divisible by n_heads");
    if (moe_experts < 0) throw ValidationError("micro config: moe_experts must be >= 0");
    if (moe_experts == 1) throw ValidationError("micro config: moe needs at least 2 experts (0 = dense)");
    if (!mixer_families.empty() && mixer_families.size() != static_cast<size_t>(n_layers))
        throw ValidationError("micro config: mixer_families length must equal n_layers");
    for (MixerFamily f : mixer_families)
        if (f == MixerFamily::none)
            throw ValidationError("micro config: every layer needs a real mixer family");
}

MicroConfig MicroConfig::from_json_text(const std::string& text) {
    json j;
    try {
        j = json::parse(text);
    } catch (const json::exception& e) {
        throw ValidationError(std::string("bad micro config JSON: ") + e.what());
    }
    MicroConfig c;
    try {
        c.vocab = j.value("vocab", c.vocab);
        c.d_model = j.value("d_model", c.d_model);
        c.n_layers = j.value("n_layers", c.n_layers);
        c.n_heads = j.value("n_heads", c.n_heads);
        c.ffn_mult = j.value("ffn_mult", c.ffn_mult);
        c.moe_experts = j.value("moe_experts", c.moe_experts);
        c.seed = j.value("seed", c.seed);
        for (const auto& f : j.value("mixer_families", json::array()))
            c.mixer_families.push_back(family_from_name(f.get<std::string>()));
    } catch (const json::exception& e) {
        throw ValidationError(std::string("bad micro config JSON: ") + e.what());
    }
    c.validate();
    return c;
}

MicroConfig MicroConfig::load(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot open micro config " + path.string());
    return from_json_text(std::string(std::istreambuf_iterator<char>(in), {}));
}

std::string MicroConfig::to_json_text() const {
    json j;
    j["vocab"] = vocab;
    j["d_model"] = d_model;
    j["n_layers"] = n_layers;
    j["n_heads"] = n_heads;
    j["ffn_mult"] = ffn_mult;
    j["moe_experts"] = moe_experts;
    j["seed"] = seed;
    json fams = json::array();
    for (MixerFamily f : mixer_families) fams.push_back(family_name(f));
    j["mixer_families"] = fams;
    return j.dump(2);
}

void MicroConfig::save(const std::filesystem::path& path) const {
    std::ofstream out(path, std::ios::trunc);
    if (!out) throw IoError("cannot create " + path.string());
    out << to_json_text() << "\n";
}

ModelSchema schema_for(const MicroConfig& config) {
    config.validate();
    ModelSchema s = ModelSchema::preset(config.moe() ? "micro-moe" : "micro-dense");
    s.name = "micro-config";
    if (!config.mixer_families.empty()) s.family_cycle = config.mixer_families;
    return s;
}

// ---- parameter plumbing ----

namespace {

struct LayerP {
    VectorXd attn_norm, mlp_norm;
    MatrixXd wq, wk, wv, wo;         // [out, in]
    MatrixXd gate, up, down;         // dense FFN
    MatrixXd router;                 // [experts, d]
    std::vector<MatrixXd> eg, eu, ed;
};

struct ModelP {
    MatrixXd embed, lm_head;  // [vocab, d]
    VectorXd final_norm;
    std::vector<LayerP> layers;
};

std::string layer_prefix(int l) { return "layers." + std::to_string(l) + "."; }

const Tensor& need(const TensorMap& params, const std::string& name) {
    auto it = params.find(name);
    if (it == params.end()) throw ValidationError("missing parameter tensor \"" + name + "\"");
    return it->second;
}

MatrixXd as_matrix(const Tensor& t, size_t rows, size_t cols, const std::string& name) {
    if (t.shape != std::vector<size_t>{rows, cols})
        throw ValidationError("tensor \"" + name + "\" has unexpected shape");
    const auto vals = load_f64(t);
    MatrixXd m(rows, cols);
    for (size_t r = 0; r < rows; ++r)
        for (size_t c = 0; c < cols; ++c) m(r, c) = vals[r * cols + c];
    return m;
}

VectorXd as_vector(const Tensor& t, size_t n, const std::string& name) {
    if (t.shape != std::vector<size_t>{n})
        throw ValidationError("tensor \"" + name + "\" has unexpected shape");
    const auto vals = load_f64(t);
    return Eigen::Map<const VectorXd>(vals.data(), static_cast<Eigen::Index>(n));
}

ModelP load_model(const TensorMap& params, const MicroConfig& cfg) {
    const size_t d = static_cast<size_t>(cfg.d_model);
    const size_t f = static_cast<size_t>(cfg.ffn_dim());
    const size_t v = static_cast<size_t>(cfg.vocab);
    ModelP m;
    m.embed = as_matrix(need(params, "embed.weight"), v, d, "embed.weight");
    m.lm_head = as_matrix(need(params, "lm_head.weight"), v, d, "lm_head.weight");
    m.final_norm = as_vector(need(params, "final_norm.weight"), d, "final_norm.weight");
    m.layers.resize(static_cast<size_t>(cfg.n_layers));
    for (int l = 0; l < cfg.n_layers; ++l) {
        const std::string p = layer_prefix(l);
        LayerP& lp = m.layers[static_cast<size_t>(l)];
        lp.attn_norm = as_vector(need(params, p + "attn_norm.weight"), d, p + "attn_norm.weight");
        lp.mlp_norm = as_vector(need(params, p + "mlp_norm.weight"), d, p + "mlp_norm.weight");
        lp.wq = as_matrix(need(params, p + "q_proj.weight"), d, d, p + "q_proj.weight");
        lp.wk = as_matrix(need(params, p + "k_proj.weight"), d, d, p + "k_proj.weight");
        lp.wv = as_matrix(need(params, p + "v_proj.weight"), d, d, p + "v_proj.weight");
        lp.wo = as_matrix(need(params, p + "o_proj.weight"), d, d, p + "o_proj.weight");
        if (cfg.moe()) {
            lp.router = as_matrix(need(params, p + "router.weight"),
                                  static_cast<size_t>(cfg.moe_experts), d, p + "router.weight");
            for (int e = 0; e < cfg.moe_experts; ++e) {
                const std::string ep = p + "experts." + std::to_string(e) + ".";
                lp.eg.push_back(as_matrix(need(params, ep + "gate.weight"), f, d, ep + "gate.weight"));
                lp.eu.push_back(as_matrix(need(params, ep + "up.weight"), f, d, ep + "up.weight"));
                lp.ed.push_back(as_matrix(need(params, ep + "down.weight"), d, f, ep + "down.weight"));
            }
        } else {
            lp.gate = as_matrix(need(params, p + "ffn.gate.weight"), f, d, p + "ffn.gate.weight");
            lp.up = as_matrix(need(params, p + "ffn.up.weight"), f, d, p + "ffn.up.weight");
            lp.down = as_matrix(need(params, p + "ffn.down.weight"), d, f, p + "ffn.down.weight");
        }
    }
    return m;
}

ModelP zeros_like(const ModelP& m) {
    ModelP z;
    z.embed = MatrixXd::Zero(m.embed.rows(), m.embed.cols());
    z.lm_head = MatrixXd::Zero(m.lm_head.rows(), m.lm_head.cols());
    z.final_norm = VectorXd::Zero(m.final_norm.size());
    z.layers.resize(m.layers.size());
    for (size_t l = 0; l < m.layers.size(); ++l) {
        const LayerP& s = m.layers[l];
        LayerP& d = z.layers[l];
        d.attn_norm = VectorXd::Zero(s.attn_norm.size());
        d.mlp_norm = VectorXd::Zero(s.mlp_norm.size());
        d.wq = MatrixXd::Zero(s.wq.rows(), s.wq.cols());
        d.wk = MatrixXd::Zero(s.wk.rows(), s.wk.cols());
        d.wv = MatrixXd::Zero(s.wv.rows(), s.wv.cols());
        d.wo = MatrixXd::Zero(s.wo.rows(), s.wo.cols());
        if (s.router.size() > 0) d.router = MatrixXd::Zero(s.router.rows(), s.router.cols());
        if (s.gate.size() > 0) {
            d.gate = MatrixXd::Zero(s.gate.rows(), s.gate.cols());
            d.up = MatrixXd::Zero(s.up.rows(), s.up.cols());
            d.down = MatrixXd::Zero(s.down.rows(), s.down.cols());
        }
        for (const auto& e : s.eg) d.eg.push_back(MatrixXd::Zero(e.rows(), e.cols()));
        for (const auto& e : s.eu) d.eu.push_back(MatrixXd::Zero(e.rows(), e.cols()));
        for (const auto& e : s.ed) d.ed.push_back(MatrixXd::Zero(e.rows(), e.cols()));
    }
    return z;
}

void add_into(ModelP& acc, const ModelP& g) {
    acc.embed += g.embed;
    acc.lm_head += g.lm_head;
    acc.final_norm += g.final_norm;
    for (size_t l = 0; l < acc.layers.size(); ++l) {
        LayerP& a = acc.layers[l];
        const LayerP& b = g.layers[l];
        a.attn_norm += b.attn_norm;
        a.mlp_norm += b.mlp_norm;
        a.wq += b.wq;
        a.wk += b.wk;
        a.wv += b.wv;
        a.wo += b.wo;
        if (a.router.size() > 0) a.router += b.router;
        if (a.gate.size() > 0) {
            a.gate += b.gate;
            a.up += b.up;
            a.down += b.down;
        }
        for (size_t e = 0; e < a.eg.size(); ++e) {
            a.eg[e] += b.eg[e];
            a.eu[e] += b.eu[e];
            a.ed[e] += b.ed[e];
        }
    }
}

Tensor tensor_from_matrix(const MatrixXd& m) {
    std::vector<double> vals(static_cast<size_t>(m.rows() * m.cols()));
    for (Eigen::Index r = 0; r < m.rows(); ++r)
        for (Eigen::Index c = 0; c < m.cols(); ++c)
            vals[static_cast<size_t>(r * m.cols() + c)] = m(r, c);
    return Tensor::from_f64(Dtype::F64,
                            {static_cast<size_t>(m.rows()), static_cast<size_t>(m.cols())}, vals);
}

Tensor tensor_from_vector(const VectorXd& v) {
    std::vector<double> vals(v.data(), v.data() + v.size());
    return Tensor::from_f64(Dtype::F64, {static_cast<size_t>(v.size())}, vals);
}

TensorMap model_to_map(const ModelP& m, const MicroConfig& cfg) {
    TensorMap out;
    out.emplace("embed.weight", tensor_from_matrix(m.embed));
    out.emplace("lm_head.weight", tensor_from_matrix(m.lm_head));
    out.emplace("final_norm.weight", tensor_from_vector(m.final_norm));
    for (int l = 0; l < cfg.n_layers; ++l) {
        const std::string p = layer_prefix(l);
        const LayerP& lp = m.layers[static_cast<size_t>(l)];
        out.emplace(p + "attn_norm.weight", tensor_from_vector(lp.attn_norm));
        out.emplace(p + "mlp_norm.weight", tensor_from_vector(lp.mlp_norm));
        out.emplace(p + "q_proj.weight", tensor_from_matrix(lp.wq));
        out.emplace(p + "k_proj.weight", tensor_from_matrix(lp.wk));
        out.emplace(p + "v_proj.weight", tensor_from_matrix(lp.wv));
        out.emplace(p + "o_proj.weight", tensor_from_matrix(lp.wo));
        if (cfg.moe()) {
            out.emplace(p + "router.weight", tensor_from_matrix(lp.router));
            for (int e = 0; e < cfg.moe_experts; ++e) {
                const std::string ep = p + "experts." + std::to_string(e) + ".";
                out.emplace(ep + "gate.weight", tensor_from_matrix(lp.eg[static_cast<size_t>(e)]));
                out.emplace(ep + "up.weight", tensor_from_matrix(lp.eu[static_cast<size_t>(e)]));
                out.emplace(ep + "down.weight", tensor_from_matrix(lp.ed[static_cast<size_t>(e)]));
            }
        } else {
            out.emplace(p + "ffn.gate.weight", tensor_from_matrix(lp.gate));
            out.emplace(p + "ffn.up.weight", tensor_from_matrix(lp.up));
            out.emplace(p + "ffn.down.weight", tensor_from_matrix(lp.down));
        }
    }
    return out;
}

// ---- forward with tape ----

double stable_sigmoid(double x) {
    if (x >= 0) return 1.0 / (1.0 + std::exp(-x));
    const double e = std::exp(x);
    return e / (1.0 + e);
}

// y_i = w_i * x_i / rms(x), rms = sqrt(mean(x^2) + eps). Row-wise over S x d.
MatrixXd rms_norm(const MatrixXd& x, const VectorXd& w) {
    MatrixXd y(x.rows(), x.cols());
    const double d = static_cast<double>(x.cols());
    for (Eigen::Index t = 0; t < x.rows(); ++t) {
        const double r = std::sqrt(x.row(t).squaredNorm() / d + kNormEps);
        y.row(t) = (x.row(t) / r).cwiseProduct(w.transpose());
    }
    return y;
}

// Given dY, the stored input X and weights w: returns dX, accumulates dw.
MatrixXd rms_norm_backward(const MatrixXd& dy, const MatrixXd& x, const VectorXd& w, VectorXd& dw) {
    MatrixXd dx(x.rows(), x.cols());
    const double d = static_cast<double>(x.cols());
    for (Eigen::Index t = 0; t < x.rows(); ++t) {
        const double r = std::sqrt(x.row(t).squaredNorm() / d + kNormEps);
        const Eigen::RowVectorXd g = dy.row(t).cwiseProduct(w.transpose());
        const double dot = g.dot(x.row(t));
        dx.row(t) = g / r - x.row(t) * (dot / (d * r * r * r));
        dw += (dy.row(t).cwiseProduct(x.row(t)) / r).transpose();
    }
    return dx;
}

struct LayerTape {
    MatrixXd h_in;    // residual entering the attention norm
    MatrixXd xa;      // normed attention input (S x d)
    MatrixXd q, k, v;
    std::vector<MatrixXd> probs;                // full attention, per head: S x S
    std::vector<std::vector<MatrixXd>> states;  // linear attention, per head per t: hd x hd
    MatrixXd ctx;     // mixer output, o_proj input
    MatrixXd h_mid;   // residual entering the MLP norm
    MatrixXd xm;      // normed MLP input
    MatrixXd gpre, upre, inner;  // S x f (per-position selected expert when MoE)
    MatrixXd moe_z;              // S x d unscaled expert down output
    MatrixXd router_probs;       // S x experts
    std::vector<int> sel;
};

struct Tape {
    std::vector<LayerTape> layers;
    MatrixXd h_final;  // residual entering the final norm
    MatrixXd xf;       // normed final hidden
    MatrixXd logits;
};

void mixer_forward(const MicroConfig& cfg, int layer, const LayerP& lp, LayerTape& t) {
    const Eigen::Index S = t.xa.rows();
    const int H = cfg.n_heads;
    const int hd = cfg.head_dim();
    t.q = t.xa * lp.wq.transpose();
    t.k = t.xa * lp.wk.transpose();
    t.v = t.xa * lp.wv.transpose();
    t.ctx = MatrixXd::Zero(S, cfg.d_model);

    if (cfg.family(layer) == MixerFamily::full_attention) {
        const double scale = 1.0 / std::sqrt(static_cast<double>(hd));
        t.probs.resize(static_cast<size_t>(H));
        for (int h = 0; h < H; ++h) {
            const auto Q = t.q.middleCols(h * hd, hd);
            const auto K = t.k.middleCols(h * hd, hd);
            const auto V = t.v.middleCols(h * hd, hd);
            MatrixXd& A = t.probs[static_cast<size_t>(h)];
            A = MatrixXd::Zero(S, S);
            for (Eigen::Index i = 0; i < S; ++i) {
                double mx = -std::numeric_limits<double>::infinity();
                for (Eigen::Index u = 0; u <= i; ++u) {
                    A(i, u) = Q.row(i).dot(K.row(u)) * scale;
                    mx = std::max(mx, A(i, u));
                }
                double z = 0;
                for (Eigen::Index u = 0; u <= i; ++u) {
                    A(i, u) = std::exp(A(i, u) - mx);
                    z += A(i, u);
                }
                for (Eigen::Index u = 0; u <= i; ++u) A(i, u) /= z;
            }
            t.ctx.middleCols(h * hd, hd) = A * V;
        }
    } else {
        // Ungated linear attention: S_t = S_{t-1} + k_t v_t^T, out_t = q_t S_t / (t+1).
        t.states.resize(static_cast<size_t>(H));
        for (int h = 0; h < H; ++h) {
            const auto Q = t.q.middleCols(h * hd, hd);
            const auto K = t.k.middleCols(h * hd, hd);
            const auto V = t.v.middleCols(h * hd, hd);
            MatrixXd state = MatrixXd::Zero(hd, hd);
            auto& snaps = t.states[static_cast<size_t>(h)];
            snaps.reserve(static_cast<size_t>(S));
            for (Eigen::Index i = 0; i < S; ++i) {
                state.noalias() += K.row(i).transpose() * V.row(i);
                snaps.push_back(state);
                t.ctx.block(i, h * hd, 1, hd) = Q.row(i) * state / static_cast<double>(i + 1);
            }
        }
    }
}

void mixer_backward(const MicroConfig& cfg, int layer, const LayerP& lp, const LayerTape& t,
                    const MatrixXd& dctx, LayerP& g, MatrixXd& dxa) {
    const Eigen::Index S = t.xa.rows();
    const int H = cfg.n_heads;
    const int hd = cfg.head_dim();
    MatrixXd dq = MatrixXd::Zero(S, cfg.d_model);
    MatrixXd dk = MatrixXd::Zero(S, cfg.d_model);
    MatrixXd dv = MatrixXd::Zero(S, cfg.d_model);

    if (cfg.family(layer) == MixerFamily::full_attention) {
        const double scale = 1.0 / std::sqrt(static_cast<double>(hd));
        for (int h = 0; h < H; ++h) {
            const auto Q = t.q.middleCols(h * hd, hd);
            const auto K = t.k.middleCols(h * hd, hd);
            const auto V = t.v.middleCols(h * hd, hd);
            const MatrixXd& A = t.probs[static_cast<size_t>(h)];
            const auto dC = dctx.middleCols(h * hd, hd);
            const MatrixXd dA = dC * V.transpose();          // S x S (upper part unused)
            dv.middleCols(h * hd, hd) += A.transpose() * dC;
            MatrixXd dS = MatrixXd::Zero(S, S);
            for (Eigen::Index i = 0; i < S; ++i) {
                double acc = 0;
                for (Eigen::Index u = 0; u <= i; ++u) acc += A(i, u) * dA(i, u);
                for (Eigen::Index u = 0; u <= i; ++u) dS(i, u) = A(i, u) * (dA(i, u) - acc);
            }
            dq.middleCols(h * hd, hd) += dS * K * scale;
            dk.middleCols(h * hd, hd) += dS.transpose() * Q * scale;
        }
    } else {
        for (int h = 0; h < H; ++h) {
            const auto Q = t.q.middleCols(h * hd, hd);
            const auto K = t.k.middleCols(h * hd, hd);
            const auto V = t.v.middleCols(h * hd, hd);
            const auto& snaps = t.states[static_cast<size_t>(h)];
            MatrixXd dstate = MatrixXd::Zero(hd, hd);
            for (Eigen::Index i = S - 1; i >= 0; --i) {
                const double inv = 1.0 / static_cast<double>(i + 1);
                const Eigen::RowVectorXd dout = dctx.block(i, h * hd, 1, hd) * inv;
                dq.block(i, h * hd, 1, hd) += dout * snaps[static_cast<size_t>(i)].transpose();
                dstate.noalias() += Q.row(i).transpose() * dout;
                dk.block(i, h * hd, 1, hd) += V.row(i) * dstate.transpose();
                dv.block(i, h * hd, 1, hd) += K.row(i) * dstate;
            }
        }
    }

    g.wq.noalias() += dq.transpose() * t.xa;
    g.wk.noalias() += dk.transpose() * t.xa;
    g.wv.noalias() += dv.transpose() * t.xa;
    dxa.noalias() += dq * lp.wq + dk * lp.wk + dv * lp.wv;
}

Tape forward_tape(const ModelP& m, const MicroConfig& cfg, const std::vector<int>& tokens) {
    const Eigen::Index S = static_cast<Eigen::Index>(tokens.size());
    if (S == 0) throw ValidationError("empty token sequence");
    for (int tok : tokens)
        if (tok < 0 || tok >= cfg.vocab)
            throw ValidationError("token " + std::to_string(tok) + " outside vocab");

    Tape tape;
    MatrixXd h(S, cfg.d_model);
    for (Eigen::Index i = 0; i < S; ++i) h.row(i) = m.embed.row(tokens[static_cast<size_t>(i)]);

    tape.layers.resize(static_cast<size_t>(cfg.n_layers));
    for (int l = 0; l < cfg.n_layers; ++l) {
        LayerTape& t = tape.layers[static_cast<size_t>(l)];
        const LayerP& lp = m.layers[static_cast<size_t>(l)];

        t.h_in = h;
        t.xa = rms_norm(h, lp.attn_norm);
        mixer_forward(cfg, l, lp, t);
        h += t.ctx * lp.wo.transpose();

        t.h_mid = h;
        t.xm = rms_norm(h, lp.mlp_norm);
        const int f = cfg.ffn_dim();
        if (cfg.moe()) {
            const MatrixXd rl = t.xm * lp.router.transpose();  // S x E
            t.router_probs.resize(S, cfg.moe_experts);
            t.sel.resize(static_cast<size_t>(S));
            t.gpre.resize(S, f);
            t.upre.resize(S, f);
            t.inner.resize(S, f);
            t.moe_z.resize(S, cfg.d_model);
            for (Eigen::Index i = 0; i < S; ++i) {
                const double mx = rl.row(i).maxCoeff();
                double z = 0;
                for (int e = 0; e < cfg.moe_experts; ++e) {
                    t.router_probs(i, e) = std::exp(rl(i, e) - mx);
                    z += t.router_probs(i, e);
                }
                t.router_probs.row(i) /= z;
                int best = 0;  // argmax, first index wins ties
                for (int e = 1; e < cfg.moe_experts; ++e)
                    if (rl(i, e) > rl(i, best)) best = e;
                t.sel[static_cast<size_t>(i)] = best;

                const LayerP& ep = lp;  // expert weights live on the layer
                t.gpre.row(i) = t.xm.row(i) * ep.eg[static_cast<size_t>(best)].transpose();
                t.upre.row(i) = t.xm.row(i) * ep.eu[static_cast<size_t>(best)].transpose();
                for (int j = 0; j < f; ++j)
                    t.inner(i, j) = t.gpre(i, j) * stable_sigmoid(t.gpre(i, j)) * t.upre(i, j);
                t.moe_z.row(i) = t.inner.row(i) * ep.ed[static_cast<size_t>(best)].transpose();
                h.row(i) += t.router_probs(i, best) * t.moe_z.row(i);
            }
        } else {
            t.gpre = t.xm * lp.gate.transpose();
            t.upre = t.xm * lp.up.transpose();
            t.inner.resize(S, f);
            for (Eigen::Index i = 0; i < S; ++i)
                for (int j = 0; j < f; ++j)
                    t.inner(i, j) = t.gpre(i, j) * stable_sigmoid(t.gpre(i, j)) * t.upre(i, j);
            h += t.inner * lp.down.transpose();
        }
    }

    tape.h_final = h;
    tape.xf = rms_norm(h, m.final_norm);
    tape.logits = tape.xf * m.lm_head.transpose();
    return tape;
}

// Gradient of `sum over masked positions s of log p(tokens[s] | prefix)`
// w.r.t. all parameters, added into g. Returns the summed log-probability.
double backward_sum_logp(const ModelP& m, const MicroConfig& cfg, const std::vector<int>& tokens,
                         const std::vector<uint8_t>& mask, const Tape& tape, ModelP& g) {
    const Eigen::Index S = tape.logits.rows();
    MatrixXd dlogits = MatrixXd::Zero(S, cfg.vocab);
    double sum_logp = 0;
    for (size_t s = 0; s < tokens.size(); ++s) {
        if (!mask[s]) continue;
        const Eigen::Index row = static_cast<Eigen::Index>(s) - 1;  // predict tokens[s] from the prefix
        const double mx = tape.logits.row(row).maxCoeff();
        double z = 0;
        for (int vth = 0; vth < cfg.vocab; ++vth) z += std::exp(tape.logits(row, vth) - mx);
        const double lse = mx + std::log(z);
        sum_logp += tape.logits(row, tokens[s]) - lse;
        for (int vth = 0; vth < cfg.vocab; ++vth)
            dlogits(row, vth) -= std::exp(tape.logits(row, vth) - lse);
        dlogits(row, tokens[s]) += 1.0;
    }

    g.lm_head.noalias() += dlogits.transpose() * tape.xf;
    MatrixXd dh = rms_norm_backward(dlogits * m.lm_head, tape.h_final, m.final_norm, g.final_norm);

    for (int l = cfg.n_layers - 1; l >= 0; --l) {
        const LayerTape& t = tape.layers[static_cast<size_t>(l)];
        const LayerP& lp = m.layers[static_cast<size_t>(l)];
        LayerP& gl = g.layers[static_cast<size_t>(l)];
        const int f = cfg.ffn_dim();

        // FFN block: h = h_mid + ffn(xm)
        MatrixXd dxm = MatrixXd::Zero(S, cfg.d_model);
        if (cfg.moe()) {
            MatrixXd drl = MatrixXd::Zero(S, cfg.moe_experts);
            for (Eigen::Index i = 0; i < S; ++i) {
                const int e = t.sel[static_cast<size_t>(i)];
                const auto& eg = lp.eg[static_cast<size_t>(e)];
                const auto& eu = lp.eu[static_cast<size_t>(e)];
                const auto& ed = lp.ed[static_cast<size_t>(e)];
                const double pe = t.router_probs(i, e);

                const Eigen::RowVectorXd dy = dh.row(i);
                const double dprob = dy.dot(t.moe_z.row(i));
                const Eigen::RowVectorXd dz = pe * dy;
                g.layers[static_cast<size_t>(l)].ed[static_cast<size_t>(e)].noalias() +=
                    dz.transpose() * t.inner.row(i);
                Eigen::RowVectorXd dinner = dz * ed;
                Eigen::RowVectorXd dgpre(f), dupre(f);
                for (int j = 0; j < f; ++j) {
                    const double sg = stable_sigmoid(t.gpre(i, j));
                    const double silu_d = sg * (1.0 + t.gpre(i, j) * (1.0 - sg));
                    dupre(j) = dinner(j) * t.gpre(i, j) * sg;
                    dgpre(j) = dinner(j) * t.upre(i, j) * silu_d;
                }
                gl.eg[static_cast<size_t>(e)].noalias() += dgpre.transpose() * t.xm.row(i);
                gl.eu[static_cast<size_t>(e)].noalias() += dupre.transpose() * t.xm.row(i);
                dxm.row(i) += dgpre * eg + dupre * eu;

                // Router: only p_{e*} enters the output.
                for (int j = 0; j < cfg.moe_experts; ++j)
                    drl(i, j) = dprob * pe * ((j == e ? 1.0 : 0.0) - t.router_probs(i, j));
            }
            gl.router.noalias() += drl.transpose() * t.xm;
            dxm.noalias() += drl * lp.router;
        } else {
            const MatrixXd dinner = dh * lp.down;
            gl.down.noalias() += dh.transpose() * t.inner;
            MatrixXd dgpre(S, f), dupre(S, f);
            for (Eigen::Index i = 0; i < S; ++i)
                for (int j = 0; j < f; ++j) {
                    const double sg = stable_sigmoid(t.gpre(i, j));
                    const double silu_d = sg * (1.0 + t.gpre(i, j) * (1.0 - sg));
                    dupre(i, j) = dinner(i, j) * t.gpre(i, j) * sg;
                    dgpre(i, j) = dinner(i, j) * t.upre(i, j) * silu_d;
                }
            gl.gate.noalias() += dgpre.transpose() * t.xm;
            gl.up.noalias() += dupre.transpose() * t.xm;
            dxm.noalias() += dgpre * lp.gate + dupre * lp.up;
        }
        dh += rms_norm_backward(dxm, t.h_mid, lp.mlp_norm, gl.mlp_norm);

        // Attention block: h_mid = h_in + ctx * Wo^T
        const MatrixXd dctx = dh * lp.wo;
        gl.wo.noalias() += dh.transpose() * t.ctx;
        MatrixXd dxa = MatrixXd::Zero(S, cfg.d_model);
        mixer_backward(cfg, l, lp, t, dctx, gl, dxa);
        dh += rms_norm_backward(dxa, t.h_in, lp.attn_norm, gl.attn_norm);
    }

    for (size_t i = 0; i < tokens.size(); ++i)
        g.embed.row(tokens[i]) += dh.row(static_cast<Eigen::Index>(i));
    return sum_logp;
}

void validate_example_for_loss(const CalibrationExample& ex) {
    if (ex.mask.size() != ex.tokens.size())
        throw ValidationError("mask length does not match token length");
    size_t ones = 0;
    for (uint8_t m : ex.mask) ones += m;
    if (ones == 0) throw ValidationError("example has an all-zero mask");
    if (ex.mask[0])
        throw ValidationError("masked target at position 0 has no preceding context");
}

}  // namespace

TensorMap init_params(const MicroConfig& config) {
    config.validate();
    const size_t d = static_cast<size_t>(config.d_model);
    const size_t f = static_cast<size_t>(config.ffn_dim());
    const size_t v = static_cast<size_t>(config.vocab);

    auto normal_tensor = [&](const std::string& name, std::vector<size_t> shape, size_t fan_in) {
        SplitMix64 rng(config.seed ^ fnv1a64(name));
        size_t n = 1;
        for (size_t e : shape) n *= e;
        const double scale = 1.0 / std::sqrt(static_cast<double>(fan_in));
        std::vector<double> vals(n);
        for (auto& x : vals) x = rng.next_normal() * scale;
        return Tensor::from_f64(Dtype::F64, std::move(shape), vals);
    };
    auto ones_tensor = [&](size_t n) {
        return Tensor::from_f64(Dtype::F64, {n}, std::vector<double>(n, 1.0));
    };

    TensorMap params;
    params.emplace("embed.weight", normal_tensor("embed.weight", {v, d}, d));
    params.emplace("lm_head.weight", normal_tensor("lm_head.weight", {v, d}, d));
    params.emplace("final_norm.weight", ones_tensor(d));
    for (int l = 0; l < config.n_layers; ++l) {
        const std::string p = layer_prefix(l);
        params.emplace(p + "attn_norm.weight", ones_tensor(d));
        params.emplace(p + "mlp_norm.weight", ones_tensor(d));
        for (const char* w : {"q_proj.weight", "k_proj.weight", "v_proj.weight", "o_proj.weight"})
            params.emplace(p + w, normal_tensor(p + w, {d, d}, d));
        if (config.moe()) {
            params.emplace(p + "router.weight",
                           normal_tensor(p + "router.weight", {static_cast<size_t>(config.moe_experts), d}, d));
            for (int e = 0; e < config.moe_experts; ++e) {
                const std::string ep = p + "experts." + std::to_string(e) + ".";
                params.emplace(ep + "gate.weight", normal_tensor(ep + "gate.weight", {f, d}, d));
                params.emplace(ep + "up.weight", normal_tensor(ep + "up.weight", {f, d}, d));
                params.emplace(ep + "down.weight", normal_tensor(ep + "down.weight", {d, f}, f));
            }
        } else {
            params.emplace(p + "ffn.gate.weight", normal_tensor(p + "ffn.gate.weight", {f, d}, d));
            params.emplace(p + "ffn.up.weight", normal_tensor(p + "ffn.up.weight", {f, d}, d));
            params.emplace(p + "ffn.down.weight", normal_tensor(p + "ffn.down.weight", {d, f}, f));
        }
    }
    return params;
}

ForwardTrace forward(const TensorMap& params, const MicroConfig& config,
                     const std::vector<int>& tokens,
                     const std::map<std::string, std::vector<int>>& capture) {
    config.validate();
    const ModelP m = load_model(params, config);
    const Tape tape = forward_tape(m, config, tokens);

    ForwardTrace trace;
    trace.logits = tape.logits;
    const int S = static_cast<int>(tokens.size());

    for (const auto& [space, positions_in] : capture) {
        std::vector<int> positions = positions_in;
        std::sort(positions.begin(), positions.end());
        positions.erase(std::unique(positions.begin(), positions.end()), positions.end());
        for (int p : positions)
            if (p < 0 || p >= S)
                throw ValidationError("capture position " + std::to_string(p) + " out of range");

        // Resolve the space id to its source rows.
        const MatrixXd* src = nullptr;
        int expert_filter = -1;
        int layer = -1;
        if (space == "lm_head_in") {
            src = &tape.xf;
        } else if (space.rfind("layers.", 0) == 0) {
            const size_t dot = space.find('.', 7);
            if (dot != std::string::npos) {
                layer = std::stoi(space.substr(7, dot - 7));
                if (layer < 0 || layer >= config.n_layers)
                    throw ValidationError("activation space \"" + space + "\" names a missing layer");
                const std::string rest = space.substr(dot + 1);
                const LayerTape& t = tape.layers[static_cast<size_t>(layer)];
                if (rest == "attn_in") src = &t.xa;
                else if (rest == "o_in") src = &t.ctx;
                else if (rest == "mlp_in") src = &t.xm;
                else if (rest == "mlp_inner" && !config.moe()) src = &t.inner;
                else if (rest.rfind("experts.", 0) == 0 && config.moe()) {
                    const size_t dot2 = rest.find('.', 8);
                    if (dot2 != std::string::npos && rest.substr(dot2 + 1) == "down_in") {
                        expert_filter = std::stoi(rest.substr(8, dot2 - 8));
                        if (expert_filter < 0 || expert_filter >= config.moe_experts)
                            throw ValidationError("activation space \"" + space + "\" names a missing expert");
                        src = &t.inner;
                    }
                }
            }
        }
        if (src == nullptr) throw ValidationError("unknown activation space \"" + space + "\"");

        auto& rows = trace.captured[space];
        for (int p : positions) {
            if (expert_filter >= 0 &&
                tape.layers[static_cast<size_t>(layer)].sel[static_cast<size_t>(p)] != expert_filter)
                continue;  // position routed elsewhere; this expert saw no input here
            CapturedVector cv;
            cv.position = p;
            cv.values.resize(static_cast<size_t>(src->cols()));
            for (Eigen::Index c = 0; c < src->cols(); ++c)
                cv.values[static_cast<size_t>(c)] = (*src)(p, c);
            rows.push_back(std::move(cv));
        }
    }
    return trace;
}

double masked_nll(const TensorMap& params, const MicroConfig& config,
                  const CalibrationExample& example) {
    config.validate();
    validate_example_for_loss(example);
    const ModelP m = load_model(params, config);
    const Tape tape = forward_tape(m, config, example.tokens);

    double sum = 0;
    size_t count = 0;
    for (size_t s = 0; s < example.tokens.size(); ++s) {
        if (!example.mask[s]) continue;
        const Eigen::Index row = static_cast<Eigen::Index>(s) - 1;
        const double mx = tape.logits.row(row).maxCoeff();
        double z = 0;
        for (int vth = 0; vth < config.vocab; ++vth) z += std::exp(tape.logits(row, vth) - mx);
        sum += tape.logits(row, example.tokens[s]) - (mx + std::log(z));
        ++count;
    }
    return -sum / static_cast<double>(count);
}

double dataset_nll(const TensorMap& params, const MicroConfig& config,
                   const std::vector<CalibrationExample>& dataset) {
    config.validate();
    if (dataset.empty()) throw ValidationError("empty calibration dataset");
    const ModelP m = load_model(params, config);

    double sum = 0;
    size_t total = 0;
    for (const auto& ex : dataset) {
        validate_example_for_loss(ex);
        const Tape tape = forward_tape(m, config, ex.tokens);
        for (size_t s = 0; s < ex.tokens.size(); ++s) {
            if (!ex.mask[s]) continue;
            const Eigen::Index row = static_cast<Eigen::Index>(s) - 1;
            const double mx = tape.logits.row(row).maxCoeff();
            double z = 0;
            for (int vth = 0; vth < config.vocab; ++vth) z += std::exp(tape.logits(row, vth) - mx);
            sum += tape.logits(row, ex.tokens[s]) - (mx + std::log(z));
            ++total;
        }
    }
    return -sum / static_cast<double>(total);
}

GradientSet gradients(const TensorMap& params, const MicroConfig& config,
                      const std::vector<CalibrationExample>& dataset, int threads) {
    config.validate();
    if (dataset.empty()) throw ValidationError("empty calibration dataset");
    const ModelP m = load_model(params, config);

    size_t total_masked = 0;
    for (const auto& ex : dataset) {
        validate_example_for_loss(ex);
        for (uint8_t b : ex.mask) total_masked += b;
    }

    // Per-example gradients land in slots; the reduction below is sequential
    // in dataset order so thread count cannot change a single bit.
    std::vector<ModelP> slots(dataset.size());
    parallel_for(dataset.size(), threads, [&](size_t i) {
        ModelP g = zeros_like(m);
        const Tape tape = forward_tape(m, config, dataset[i].tokens);
        backward_sum_logp(m, config, dataset[i].tokens, dataset[i].mask, tape, g);
        slots[i] = std::move(g);
    });

    ModelP acc = zeros_like(m);
    for (const auto& g : slots) add_into(acc, g);

    // L = -(1/M) * sum of masked log-probabilities.
    const double scale = -1.0 / static_cast<double>(total_masked);
    acc.embed *= scale;
    acc.lm_head *= scale;
    acc.final_norm *= scale;
    for (auto& l : acc.layers) {
        l.attn_norm *= scale;
        l.mlp_norm *= scale;
        l.wq *= scale;
        l.wk *= scale;
        l.wv *= scale;
        l.wo *= scale;
        if (l.router.size() > 0) l.router *= scale;
        if (l.gate.size() > 0) {
            l.gate *= scale;
            l.up *= scale;
            l.down *= scale;
        }
        for (auto& e : l.eg) e *= scale;
        for (auto& e : l.eu) e *= scale;
        for (auto& e : l.ed) e *= scale;
    }

    GradientSet out;
    out.tensors = model_to_map(acc, config);
    return out;
}

}  // namespace crane
