#pragma once

// Gated message passing over a HyperbolicGraph, optimized per edit to produce
// the rank-1 update vectors (u, v) and reset to its initial parameters after.
//
// Node inputs are log-mapped ball features. Per round, an edge s -> o sends
//     msg = W_msg [h_s ; e_r]   scaled by   att * gate(r) * degree_norm(o)
// with att = sigmoid(a . [h_o ; h_s ; e_r]); states update as
//     h_o <- tanh(sum msg + W_self h_o + b).
// Readout: u = U h_subject, v = V [log r ; h_object].

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <ostream>
#include <random>
#include <string>
#include <vector>

#include "json.hpp"

#include "hype/autodiff.hpp"
#include "hype/errors.hpp"
#include "hype/hyperbolic.hpp"
#include "hype/kg_builder.hpp"
#include "hype/request.hpp"
#include "hype/tensor.hpp"

namespace hype {

struct GnnConfig {
    std::size_t hidden_dim = 64;
    std::size_t rounds = 2;
    /// Readout heads start at this multiple of a Glorot draw; 0 gives zero heads.
    double head_init_scale = 0.01;
    std::uint64_t seed = 7;
};

struct GnnOptConfig {
    std::size_t steps = 30;
    double lr = 0.5;
    double weight_decay = 0.1;
    double dropout_attn = 0.2;
    double dropout_feat = 0.3;
    double early_stop_loss = 3e-2;
    std::uint64_t dropout_seed = 0;

    void validate() const {
        if (!(lr > 0.0) || !std::isfinite(lr)) throw ConfigError("gnn: lr must be positive");
        if (!(weight_decay >= 0.0)) throw ConfigError("gnn: weight_decay must be >= 0");
        if (!(dropout_attn >= 0.0 && dropout_attn < 1.0) || !(dropout_feat >= 0.0 && dropout_feat < 1.0))
            throw ConfigError("gnn: dropout rates must lie in [0, 1)");
    }
};

class GnnParams {
public:
    // fixed tensors first, then four per round, then the heads
    enum Slot : std::size_t { in_weight = 0, in_bias = 1, self_edge = 2, head_u = 3, head_v = 4, first_round = 5 };
    enum RoundSlot : std::size_t { msg = 0, att = 1, self = 2, bias = 3 };

    GnnParams(const GnnConfig& cfg, std::size_t feature_dim, std::size_t m, std::size_t n)
        : cfg_(cfg), feature_dim_(feature_dim), m_(m), n_(n) {
        if (cfg.hidden_dim == 0 || cfg.rounds == 0) throw ConfigError("gnn: hidden_dim and rounds must be >= 1");
        if (feature_dim == 0 || m == 0 || n == 0) throw ConfigError("gnn: feature and model dimensions must be >= 1");
        const std::size_t H = cfg.hidden_dim, d = feature_dim;
        std::mt19937_64 rng(cfg.seed);
        std::normal_distribution<double> normal(0.0, 1.0);
        auto glorot = [&](std::size_t r, std::size_t c, double gain) {
            Matrix w(r, c);
            const double sd = gain * std::sqrt(2.0 / static_cast<double>(r + c));
            for (auto& x : w.data) x = sd * normal(rng);
            return w;
        };
        add("in_weight", glorot(H, d, 1.0));
        add("in_bias", Matrix(1, H));
        add("self_edge", Matrix(1, d));
        add("head_u", glorot(m, H, cfg.head_init_scale));
        add("head_v", glorot(n, d + H, cfg.head_init_scale));
        for (std::size_t l = 0; l < cfg.rounds; ++l) {
            const std::string p = "round" + std::to_string(l) + ".";
            add(p + "msg", glorot(H, H + d, 1.0));
            add(p + "att", glorot(2 * H + d, 1, 1.0));
            add(p + "self", glorot(H, H, 1.0));
            add(p + "bias", Matrix(1, H));
        }
        initial_ = tensors_;
    }

    const GnnConfig& config() const noexcept { return cfg_; }
    std::size_t feature_dim() const noexcept { return feature_dim_; }
    std::size_t m() const noexcept { return m_; }
    std::size_t n() const noexcept { return n_; }

    std::size_t size() const noexcept { return tensors_.size(); }
    const std::string& name(std::size_t i) const { return names_.at(i); }
    const Matrix& tensor(std::size_t i) const { return tensors_.at(i); }
    Matrix& tensor(std::size_t i) { return tensors_.at(i); }
    std::vector<Matrix>& tensors() noexcept { return tensors_; }
    const std::vector<Matrix>& tensors() const noexcept { return tensors_; }
    static std::size_t round_slot(std::size_t round, RoundSlot s) { return first_round + 4 * round + s; }

    std::size_t parameter_count() const {
        std::size_t k = 0;
        for (const auto& t : tensors_) k += t.size();
        return k;
    }

    /// The frozen copy taken at construction.
    const std::vector<Matrix>& initial_snapshot() const noexcept { return initial_; }
    void reset() { tensors_ = initial_; }
    bool at_snapshot() const { return tensors_ == initial_; }

private:
    void add(std::string name, Matrix m) {
        names_.push_back(std::move(name));
        tensors_.push_back(std::move(m));
    }

    GnnConfig cfg_;
    std::size_t feature_dim_, m_, n_;
    std::vector<std::string> names_;
    std::vector<Matrix> tensors_;
    std::vector<Matrix> initial_;
};

/// Resets the parameters when leaving scope, whichever way that happens.
class ResetGuard {
public:
    explicit ResetGuard(GnnParams& p) : p_(p) {}
    ~ResetGuard() { p_.reset(); }
    ResetGuard(const ResetGuard&) = delete;
    ResetGuard& operator=(const ResetGuard&) = delete;

private:
    GnnParams& p_;
};

// ------------------------------------------------------------------ graph views

/// A node subset of a graph with the edges needed to compute its states.
/// Ids refer back to the full graph so results do not depend on the view.
struct GraphView {
    std::vector<std::size_t> nodes;  // global node ids, ascending
    std::vector<std::size_t> edges;  // global edge ids, ascending
    std::vector<std::size_t> local;  // global node id -> local index (npos if absent)

    static constexpr std::size_t npos = std::numeric_limits<std::size_t>::max();
    std::size_t local_of(std::size_t global) const {
        const std::size_t l = global < local.size() ? local[global] : npos;
        if (l == npos) throw KeyError("node " + std::to_string(global) + " outside the view");
        return l;
    }
};

inline GraphView full_view(const HyperbolicGraph& g) {
    GraphView v;
    v.nodes.resize(g.nodes.size());
    v.local.resize(g.nodes.size());
    for (std::size_t i = 0; i < g.nodes.size(); ++i) v.nodes[i] = v.local[i] = i;
    v.edges.resize(g.edges.size());
    for (std::size_t i = 0; i < g.edges.size(); ++i) v.edges[i] = i;
    return v;
}

/// Nodes within `rounds` incoming hops of the targets. The target states
/// computed on this view equal those of the full graph bitwise.
inline GraphView receptive_view(const HyperbolicGraph& g, const std::vector<std::size_t>& targets, std::size_t rounds) {
    std::vector<char> in(g.nodes.size(), 0);
    for (std::size_t t : targets) in.at(t) = 1;
    for (std::size_t r = 0; r < rounds; ++r) {
        std::vector<char> next = in;
        for (const auto& e : g.edges)
            if (in[e.target]) next[e.source] = 1;
        in = std::move(next);
    }
    GraphView v;
    v.local.assign(g.nodes.size(), GraphView::npos);
    for (std::size_t i = 0; i < g.nodes.size(); ++i)
        if (in[i]) {
            v.local[i] = v.nodes.size();
            v.nodes.push_back(i);
        }
    for (std::size_t i = 0; i < g.edges.size(); ++i)
        if (in[g.edges[i].source] && in[g.edges[i].target]) v.edges.push_back(i);
    return v;
}

// ------------------------------------------------------------------ dropout

inline std::uint64_t splitmix64(std::uint64_t x) {
    x += 0x9e3779b97f4a7c15ULL;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
    return x ^ (x >> 31);
}

/// Counter-based dropout: the keep decision depends only on its coordinates,
/// never on how many draws came before it.
struct Dropout {
    double attn = 0.0;
    double feat = 0.0;
    std::uint64_t seed = 0;
    std::uint64_t step = 0;
    bool active = false;

    double factor(std::uint64_t kind, std::uint64_t round, std::uint64_t id, std::uint64_t feature, double p) const {
        if (!active || p <= 0.0) return 1.0;
        std::uint64_t h = splitmix64(seed);
        for (std::uint64_t x : {step, kind, round, id, feature}) h = splitmix64(h ^ x);
        const double u = static_cast<double>(h >> 11) * 0x1.0p-53;
        return u < p ? 0.0 : 1.0 / (1.0 - p);
    }
};

// ------------------------------------------------------------------ forward

struct GnnVars {
    std::vector<ad::Var> p;  // one per parameter tensor, same order
};

inline GnnVars bind_params(ad::Tape& t, const GnnParams& params, bool requires_grad = true) {
    GnnVars v;
    for (const auto& m : params.tensors()) v.p.push_back(t.leaf(m, requires_grad));
    return v;
}

/// Tangent-space relation table; the self-loop row is the learnable embedding.
inline ad::Var relation_table(ad::Tape& t, const HyperbolicGraph& g, const GnnVars& v) {
    const std::size_t types = g.relations.size();
    const std::size_t d = g.feature_dim();
    Matrix fixed(types, d);
    for (std::size_t r = 0; r + 1 < types; ++r) {
        const Vector tan = g.relations[r].hyperbolic.to_tangent();
        std::copy(tan.begin(), tan.end(), fixed.row(r).begin());
    }
    const ad::Var base = t.constant(std::move(fixed));
    return ad::add(t, base, ad::scatter_add_rows(t, v.p[GnnParams::self_edge], {types - 1}, types));
}

/// Node states (view-local rows) after all rounds.
inline ad::Var gnn_forward(ad::Tape& t, const HyperbolicGraph& g, const GraphView& view, const GnnParams& params,
                           const GnnVars& v, const Dropout& drop = {}) {
    if (view.nodes.empty()) throw InvalidArgument("gnn forward: empty graph");
    const std::size_t d = g.feature_dim();
    if (d != params.feature_dim()) throw ConfigError("gnn forward: graph feature dim does not match params");
    const std::size_t N = view.nodes.size(), E = view.edges.size(), H = params.config().hidden_dim;

    Matrix x(N, d);
    for (std::size_t i = 0; i < N; ++i) {
        const Vector tan = g.nodes[view.nodes[i]].feature.to_tangent();
        std::copy(tan.begin(), tan.end(), x.row(i).begin());
    }
    std::vector<std::size_t> src(E), dst(E), rel(E);
    Matrix coef(E, 1);
    for (std::size_t k = 0; k < E; ++k) {
        const GraphEdge& e = g.edges[view.edges[k]];
        src[k] = view.local_of(e.source);
        dst[k] = view.local_of(e.target);
        rel[k] = e.relation_type;
        coef.data[k] = g.gate(e.relation_type) * g.nodes[e.target].degree_norm;
    }
    const ad::Var coef_v = t.constant(std::move(coef));
    const ad::Var rel_table = relation_table(t, g, v);
    const ad::Var edge_feat = ad::gather_rows(t, rel_table, rel);

    ad::Var h = ad::tanh(t, ad::add_row_bias(t, ad::matmul_nt(t, t.constant(std::move(x)), v.p[GnnParams::in_weight]),
                                             v.p[GnnParams::in_bias]));
    for (std::size_t l = 0; l < params.config().rounds; ++l) {
        if (drop.active && drop.feat > 0.0) {
            Matrix mask(N, H);
            for (std::size_t i = 0; i < N; ++i)
                for (std::size_t j = 0; j < H; ++j) mask(i, j) = drop.factor(1, l, view.nodes[i], j, drop.feat);
            h = ad::mul(t, h, t.constant(std::move(mask)));
        }
        const ad::Var hs = ad::gather_rows(t, h, src);
        const ad::Var hd = ad::gather_rows(t, h, dst);
        const ad::Var src_in = ad::concat_cols(t, hs, edge_feat);
        const ad::Var msg = ad::matmul_nt(t, src_in, v.p[GnnParams::round_slot(l, GnnParams::msg)]);
        ad::Var att = ad::sigmoid(t, ad::matmul(t, ad::concat_cols(t, hd, src_in), v.p[GnnParams::round_slot(l, GnnParams::att)]));
        if (drop.active && drop.attn > 0.0) {
            Matrix mask(E, 1);
            for (std::size_t k = 0; k < E; ++k) mask.data[k] = drop.factor(2, l, view.edges[k], 0, drop.attn);
            att = ad::mul(t, att, t.constant(std::move(mask)));
        }
        const ad::Var weighted = ad::row_scale(t, msg, ad::mul(t, att, coef_v));
        const ad::Var agg = ad::scatter_add_rows(t, weighted, dst, N);
        const ad::Var self = ad::matmul_nt(t, h, v.p[GnnParams::round_slot(l, GnnParams::self)]);
        h = ad::tanh(t, ad::add_row_bias(t, ad::add(t, agg, self), v.p[GnnParams::round_slot(l, GnnParams::bias)]));
    }
    return h;
}

/// Node states of the whole graph, evaluation mode.
inline Matrix node_states(const HyperbolicGraph& g, const GnnParams& params) {
    ad::Tape t;
    const GnnVars v = bind_params(t, params, false);
    return t.value(gnn_forward(t, g, full_view(g), params, v));
}

// ------------------------------------------------------------------ readout

/// The graph coordinates one edit reads from.
struct EditAnchor {
    std::size_t subject = 0;
    std::size_t object = 0;  // the node of target_new
    std::size_t relation = 0;

    static EditAnchor from_request(const HyperbolicGraph& g, const EditRequest& r) {
        return {g.node(r.subject), g.node(r.target_new.str), g.relation_type(r.relation)};
    }
};

struct UV {
    ad::Var u;  // 1×m
    ad::Var v;  // 1×n
};

inline UV readout_uv(ad::Tape& t, const HyperbolicGraph& g, const GraphView& view, ad::Var states, const EditAnchor& a,
                     const GnnVars& v) {
    const ad::Var hs = ad::gather_rows(t, states, {view.local_of(a.subject)});
    const ad::Var ho = ad::gather_rows(t, states, {view.local_of(a.object)});
    const Vector rt = g.relations.at(a.relation).hyperbolic.to_tangent();
    const ad::Var rv = t.constant(Matrix::row_vector(rt));
    return {ad::matmul_nt(t, hs, v.p[GnnParams::head_u]),
            ad::matmul_nt(t, ad::concat_cols(t, rv, ho), v.p[GnnParams::head_v])};
}

/// Plain (u, v) values from the current parameters, evaluation mode.
inline std::pair<Vector, Vector> readout_uv(const HyperbolicGraph& g, const EditAnchor& a, const GnnParams& params) {
    ad::Tape t;
    const GnnVars v = bind_params(t, params, false);
    const GraphView view = receptive_view(g, {a.subject, a.object}, params.config().rounds);
    const ad::Var states = gnn_forward(t, g, view, params, v);
    const UV uv = readout_uv(t, g, view, states, a, v);
    return {t.value(uv.u).data, t.value(uv.v).data};
}

// ------------------------------------------------------------------ optimization

/// Scalar loss of an edit as a function of the readout vectors.
using EditObjective = std::function<ad::Var(ad::Tape&, ad::Var u, ad::Var v)>;

struct StepRecord {
    std::size_t step = 0;
    double loss = 0.0;
    double grad_norm = 0.0;
};

inline nlohmann::json step_to_json(const StepRecord& r) {
    return {{"step", r.step}, {"loss", r.loss}, {"grad_norm", r.grad_norm}};
}

inline void write_training_log(std::ostream& out, const std::vector<StepRecord>& log) {
    for (const auto& r : log) out << step_to_json(r).dump() << '\n';
}

struct OptimizeResult {
    Vector u;
    Vector v;
    std::vector<StepRecord> log;
    bool early_stopped = false;
};

/// Gradient descent with weight decay on the GNN parameters. Each step
/// records its loss; the loop stops before updating once the loss is below
/// the early-stop threshold. Parameters are left trained: the caller resets.
inline OptimizeResult optimize_for_edit(const HyperbolicGraph& g, const EditAnchor& anchor, GnnParams& params,
                                        const GnnOptConfig& opt, const EditObjective& objective) {
    opt.validate();
    const GraphView view = receptive_view(g, {anchor.subject, anchor.object}, params.config().rounds);
    OptimizeResult res;
    for (std::size_t step = 0; step < opt.steps; ++step) {
        ad::Tape t;
        const GnnVars v = bind_params(t, params);
        const Dropout drop{opt.dropout_attn, opt.dropout_feat, opt.dropout_seed, step, true};
        const ad::Var states = gnn_forward(t, g, view, params, v, drop);
        const UV uv = readout_uv(t, g, view, states, anchor, v);
        const ad::Var loss = objective(t, uv.u, uv.v);
        const double L = t.value(loss).data.at(0);
        if (!std::isfinite(L)) throw OptimizationDiverged(step);
        t.backward(loss);
        double gn2 = 0.0;
        std::vector<Matrix> grads;
        grads.reserve(params.size());
        for (std::size_t i = 0; i < params.size(); ++i) {
            grads.push_back(t.grad(v.p[i]));
            gn2 += squared_norm(grads.back().data);
        }
        if (!std::isfinite(gn2)) throw OptimizationDiverged(step);
        res.log.push_back({step, L, std::sqrt(gn2)});
        if (L < opt.early_stop_loss) {
            res.early_stopped = true;
            break;
        }
        for (std::size_t i = 0; i < params.size(); ++i) {
            auto& p = params.tensor(i).data;
            const auto& gr = grads[i].data;
            for (std::size_t k = 0; k < p.size(); ++k) p[k] -= opt.lr * (gr[k] + opt.weight_decay * p[k]);
        }
    }
    std::tie(res.u, res.v) = readout_uv(g, anchor, params);
    return res;
}

/// Loss and full gradient of an objective w.r.t. the GNN parameters, without dropout.
inline double objective_and_grad(const HyperbolicGraph& g, const EditAnchor& anchor, const GnnParams& params,
                                 const EditObjective& objective, std::vector<Matrix>* grads) {
    ad::Tape t;
    const GnnVars v = bind_params(t, params, grads != nullptr);
    const GraphView view = receptive_view(g, {anchor.subject, anchor.object}, params.config().rounds);
    const ad::Var states = gnn_forward(t, g, view, params, v);
    const UV uv = readout_uv(t, g, view, states, anchor, v);
    const ad::Var loss = objective(t, uv.u, uv.v);
    if (grads) {
        t.backward(loss);
        grads->clear();
        for (std::size_t i = 0; i < params.size(); ++i) grads->push_back(t.grad(v.p[i]));
    }
    return t.value(loss).data.at(0);
}

/// Max relative error between analytic gradients and central differences
/// (step 1e-5) over `probe_count` random parameter entries. `groups`, if
/// non-empty, restricts probing to those parameter tensors. The relative
/// error is |a - f| / max(|a|, |f|, floor).
inline double grad_check(const HyperbolicGraph& g, const EditAnchor& anchor, GnnParams& params,
                         const EditObjective& objective, std::size_t probe_count, std::uint64_t seed = 1,
                         const std::vector<std::size_t>& groups = {}, double floor = 1e-8) {
    if (probe_count == 0) throw InvalidArgument("grad_check: probe_count must be >= 1");
    std::vector<Matrix> grads;
    objective_and_grad(g, anchor, params, objective, &grads);
    std::vector<std::size_t> pool = groups;
    if (pool.empty())
        for (std::size_t i = 0; i < params.size(); ++i) pool.push_back(i);
    std::mt19937_64 rng(seed);
    const double h = 1e-5;
    double worst = 0.0;
    for (std::size_t p = 0; p < probe_count; ++p) {
        const std::size_t ti = pool[std::uniform_int_distribution<std::size_t>(0, pool.size() - 1)(rng)];
        Matrix& tensor = params.tensor(ti);
        const std::size_t k = std::uniform_int_distribution<std::size_t>(0, tensor.size() - 1)(rng);
        const double orig = tensor.data[k];
        tensor.data[k] = orig + h;
        const double up = objective_and_grad(g, anchor, params, objective, nullptr);
        tensor.data[k] = orig - h;
        const double down = objective_and_grad(g, anchor, params, objective, nullptr);
        tensor.data[k] = orig;
        const double fd = (up - down) / (2.0 * h);
        const double a = grads[ti].data[k];
        worst = std::max(worst, std::abs(a - fd) / std::max({std::abs(a), std::abs(fd), floor}));
    }
    return worst;
}

}  // namespace hype
