#pragma once

// One edit: the loss on the toy model, a soft per-row gradient mask, the
// rank-1 update gamma * (u v^T) (.) mask, row-wise Möbius addition with
// projection, and the do-while loop that drives it with a resettable GNN.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <functional>
#include <limits>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "json.hpp"

#include "hype/autodiff.hpp"
#include "hype/errors.hpp"
#include "hype/gnn.hpp"
#include "hype/hyperbolic.hpp"
#include "hype/kg_builder.hpp"
#include "hype/request.hpp"
#include "hype/tensor.hpp"
#include "hype/toy_model.hpp"

namespace hype {

enum class UpdateRule { mobius, euclidean };
enum class UpdateLayout { row_wise, flat };

inline const char* to_string(UpdateRule r) { return r == UpdateRule::mobius ? "mobius" : "euclidean"; }
inline const char* to_string(UpdateLayout l) { return l == UpdateLayout::row_wise ? "row_wise" : "flat"; }

struct GammaMode {
    bool automatic = true;
    double value = 1.0;  // used when not automatic
    double cap = 10.0;   // upper bound in automatic mode

    static GammaMode fixed(double x) { return {false, x, 10.0}; }
    static GammaMode autoscale(double cap = 10.0) { return {true, 1.0, cap}; }
};

struct EditConfig {
    Curvature curvature{1.0};
    double tau_g = 1e-3;
    GammaMode gamma;
    double kl_factor = 0.06875;
    GnnOptConfig gnn;
    std::size_t max_cycles = 10;
    UpdateRule rule = UpdateRule::mobius;
    UpdateLayout layout = UpdateLayout::row_wise;
    /// The target activation aims at this fraction of the early-stop loss.
    double target_nll_fraction = 0.5;

    double early_stop_loss() const { return gnn.early_stop_loss; }

    void validate() const {
        if (!(kl_factor >= 0.0 && kl_factor <= 1.0)) throw ConfigError("kl_factor must lie in [0, 1]");
        if (!std::isfinite(tau_g)) throw ConfigError("tau_g must be finite");
        if (max_cycles == 0) throw ConfigError("max_cycles must be >= 1");
        if (!(gamma.cap > 0.0)) throw ConfigError("gamma cap must be positive");
        if (!gamma.automatic && !std::isfinite(gamma.value)) throw ConfigError("fixed gamma must be finite");
        if (!(target_nll_fraction > 0.0 && target_nll_fraction <= 1.0))
            throw ConfigError("target_nll_fraction must lie in (0, 1]");
        gnn.validate();
    }
};

struct UpdatePlan {
    Vector u;
    Vector v;
    double gamma = 0.0;
    Vector grad_means;
    Vector mask;
    Matrix delta;
};

// ------------------------------------------------------------------ edit loss

/// Everything the edit loss needs that does not change during an edit:
/// prompt keys, targets, the fixed decoder and the reference distributions.
class EditProblem {
public:
    EditProblem(const ToyModel& model, const EditRequest& request, double kl_factor, const ModelState& original)
        : kl_factor_(kl_factor), decoder_(model.decoder()) {
        request.validate();
        const std::size_t target = model.vocab().index(request.target_new.str);
        rewrite_keys_ = key_matrix(model, request.rewrite_prompts);
        targets_.assign(request.rewrite_prompts.size(), target);
        if (kl_factor > 0.0 && !request.neighborhood_prompts.empty()) {
            neighbor_keys_ = key_matrix(model, request.neighborhood_prompts);
            ToyModel ref = model;
            ref.restore(original);
            reference_ = Matrix(request.neighborhood_prompts.size(), model.vocab().size());
            for (std::size_t i = 0; i < request.neighborhood_prompts.size(); ++i) {
                const Vector p = ref.forward(request.neighborhood_prompts[i]);
                std::copy(p.begin(), p.end(), reference_.row(i).begin());
            }
        }
    }

    /// Loss of the model with edited-layer weights `w` (any tape variable).
    ad::Var loss(ad::Tape& t, ad::Var w) const {
        const ad::Var d = t.constant(decoder_);
        const ad::Var z = ad::matmul_nt(t, ad::matmul_nt(t, t.constant(rewrite_keys_), w), d);
        ad::Var l = ad::softmax_cross_entropy(t, z, targets_);
        if (has_kl()) {
            const ad::Var zn = ad::matmul_nt(t, ad::matmul_nt(t, t.constant(neighbor_keys_), w), d);
            l = ad::add(t, l, ad::scale(t, ad::kl_from_reference(t, reference_, zn), kl_factor_));
        }
        return l;
    }

    std::pair<double, Matrix> value_and_grad(const Matrix& w) const {
        ad::Tape t;
        const ad::Var wv = t.leaf(w);
        const ad::Var l = loss(t, wv);
        t.backward(l);
        return {t.value(l).data[0], t.grad(wv)};
    }

    double value(const Matrix& w) const {
        ad::Tape t;
        return t.value(loss(t, t.constant(w))).data[0];
    }

    const Matrix& rewrite_keys() const noexcept { return rewrite_keys_; }
    bool has_kl() const noexcept { return neighbor_keys_.rows > 0; }

private:
    double kl_factor_;
    Matrix decoder_;
    Matrix rewrite_keys_;
    std::vector<std::size_t> targets_;
    Matrix neighbor_keys_;
    Matrix reference_;
};

/// Mean NLL of target_new over rewrite prompts plus kl_factor times the mean
/// KL(original || current) over neighborhood prompts, and its gradient with
/// respect to the edited layer. Without `original`, the model is its own reference.
inline std::pair<double, Matrix> edit_loss(const ToyModel& model, const EditRequest& request, double kl_factor,
                                           const ModelState* original = nullptr) {
    const EditProblem p(model, request, kl_factor, original ? *original : model.snapshot());
    return p.value_and_grad(model.weights());
}

// ------------------------------------------------------------------ mask and delta

/// g_i = mean_j |grad_ij|, mask_i = sigmoid(g_i - tau_g).
inline std::pair<Vector, Vector> gradient_mask(const Matrix& grad, double tau_g) {
    if (!all_finite(grad.data)) throw InvalidArgument("gradient_mask: non-finite gradient");
    if (grad.cols == 0) throw InvalidArgument("gradient_mask: empty gradient rows");
    Vector g(grad.rows), mask(grad.rows);
    for (std::size_t i = 0; i < grad.rows; ++i) {
        double s = 0.0;
        for (double x : grad.row(i)) s += std::abs(x);
        g[i] = s / static_cast<double>(grad.cols);
        mask[i] = sigmoid(g[i] - tau_g);
    }
    return {g, mask};
}

/// delta_ij = gamma * u_i * v_j * mask_i
inline Matrix assemble_delta(const Vector& u, const Vector& v, double gamma, const Vector& mask) {
    if (mask.size() != u.size()) throw InvalidArgument("assemble_delta: mask length must equal |u|");
    Matrix d(u.size(), v.size());
    for (std::size_t i = 0; i < u.size(); ++i) {
        const double s = gamma * u[i] * mask[i];
        for (std::size_t j = 0; j < v.size(); ++j) d(i, j) = s * v[j];
    }
    return d;
}

/// proj(w (+) delta), row by row or on the flattened matrix. With the
/// Euclidean rule the sum is plain vector addition; projection is kept.
inline Matrix apply_update(const Matrix& weights, const Matrix& delta, const Curvature& c,
                           UpdateRule rule = UpdateRule::mobius, UpdateLayout layout = UpdateLayout::row_wise) {
    if (!weights.same_shape(delta)) throw InvalidArgument("apply_update: weights and delta differ in shape");
    auto combine = [&](std::span<const double> w, std::span<const double> d) {
        if (rule == UpdateRule::euclidean) {
            if (!all_finite(d)) throw InvalidArgument("apply_update: non-finite delta");
            Vector s(w.begin(), w.end());
            for (std::size_t j = 0; j < s.size(); ++j) s[j] += d[j];
            return project_to_ball(std::span<const double>(s), c);
        }
        const Vector s = mobius_add(w, d, c);
        return project_to_ball(std::span<const double>(s), c);
    };
    if (layout == UpdateLayout::flat) {
        if (!satisfies_ball_invariant(weights.data, c))
            throw DomainError("apply_update: flattened weights are not inside the ball");
        Matrix out(weights.rows, weights.cols);
        if (std::all_of(delta.data.begin(), delta.data.end(), [](double x) { return x == 0.0; })) return weights;
        out.data = combine(weights.data, delta.data);
        return out;
    }
    Matrix out = weights;
    for (std::size_t r = 0; r < weights.rows; ++r) {
        const auto d = delta.row(r);
        if (std::all_of(d.begin(), d.end(), [](double x) { return x == 0.0; })) continue;
        if (!satisfies_ball_invariant(weights.row(r), c))
            throw DomainError("apply_update: row " + std::to_string(r) + " is not inside the ball");
        try {
            const Vector p = combine(weights.row(r), d);
            std::copy(p.begin(), p.end(), out.row(r).begin());
        } catch (const NumericInstability& e) {
            throw NumericInstability(std::string(e.what()) + " at row " + std::to_string(r), r);
        }
    }
    return out;
}

// ------------------------------------------------------------------ gamma

/// Hidden activation that gives `token` an NLL of at most `target_nll`,
/// reached by gradient descent from `h`. Returns `h` itself if it already does.
inline Vector target_activation(const ToyModel& model, const Vector& h, std::size_t token, double target_nll,
                                std::size_t max_iters = 5000) {
    const Matrix& D = model.decoder();
    double L = 0.0;
    for (std::size_t t = 0; t < D.rows; ++t) L = std::max(L, squared_norm(D.row(t)));
    if (!(L > 0.0)) throw DegenerateKey("target_activation: zero decoder");
    const double step = 1.0 / L;
    Vector x = h;
    for (std::size_t it = 0; it < max_iters; ++it) {
        const Vector z = matvec(D, x);
        const Vector p = ToyModel::softmax(z);
        if (ToyModel::log_sum_exp(z) - z[token] <= target_nll) return x;
        // grad = D^T (p - e_token)
        for (std::size_t t = 0; t < D.rows; ++t) {
            const double w = (p[t] - (t == token ? 1.0 : 0.0)) * step;
            if (w == 0.0) continue;
            const auto row = D.row(t);
            for (std::size_t j = 0; j < x.size(); ++j) x[j] -= w * row[j];
        }
    }
    return x;
}

/// ||r|| / (||u|| |v.k|), capped.
inline double auto_gamma(double residual_norm, const Vector& u, const Vector& v, std::span<const double> key, double cap) {
    const double den = norm(u) * std::abs(dot(v, key));
    if (!(den >= 1e-12)) throw DegenerateKey("gamma: |(u v^T) k| vanishes for the rewrite key");
    return std::min(cap, residual_norm / den);
}

/// Residual between the target and current activation on the first rewrite prompt.
struct Residual {
    Vector key;
    Vector current;
    Vector target;
    double norm = 0.0;
};

inline Residual rewrite_residual(const ToyModel& model, const EditRequest& request, double target_nll) {
    Residual r;
    r.key = model.key(request.rewrite_prompts.at(0));
    r.current = model.hidden(r.key);
    r.target = target_activation(model, r.current, model.vocab().index(request.target_new.str), target_nll);
    Vector diff = r.target;
    for (std::size_t i = 0; i < diff.size(); ++i) diff[i] -= r.current[i];
    r.norm = norm(diff);
    return r;
}

inline double compute_gamma(const GammaMode& mode, const ToyModel& model, const EditRequest& request, const Vector& u,
                            const Vector& v, double target_nll) {
    if (!mode.automatic) return mode.value;
    const Residual r = rewrite_residual(model, request, target_nll);
    return auto_gamma(r.norm, u, v, r.key, mode.cap);
}

namespace detail {

/// Differentiable auto gamma: min(cap, R / (||u|| |v.k|)).
inline ad::Var gamma_var(ad::Tape& t, ad::Var u, ad::Var v, const Vector& key, double residual_norm, double cap) {
    const Matrix& U = t.value(u);
    const Matrix& V = t.value(v);
    const double nu = hype::norm(U.data);
    const double s = hype::dot(V.data, key);
    const double den = nu * std::abs(s);
    if (!(den >= 1e-12)) throw DegenerateKey("gamma: |(u v^T) k| vanishes for the rewrite key");
    const double g = residual_norm / den;
    const bool capped = g > cap;
    return t.push(Matrix::scalar(capped ? cap : g), {u, v}, [u, v, key, g, nu, s, capped](ad::Tape& tp, const Matrix& grad) {
        if (capped) return;
        const double go = grad.data[0];
        if (tp.requires_grad(u)) {
            Matrix& gu = tp.grad_buffer(u);
            const Matrix& U = tp.value(u);
            for (std::size_t i = 0; i < U.size(); ++i) gu.data[i] -= go * g * U.data[i] / (nu * nu);
        }
        if (tp.requires_grad(v)) {
            Matrix& gv = tp.grad_buffer(v);
            for (std::size_t j = 0; j < key.size(); ++j) gv.data[j] -= go * g * key[j] / s;
        }
    });
}

}  // namespace detail

/// Edit loss after applying the update built from (u, v): what the GNN minimizes.
inline EditObjective make_objective(const EditProblem& problem, const Matrix& weights, const Vector& mask,
                                    const EditConfig& cfg, const Residual* residual) {
    return [&problem, &weights, mask, &cfg, residual](ad::Tape& t, ad::Var u, ad::Var v) {
        const ad::Var uv = ad::outer(t, u, v);
        const ad::Var masked = ad::row_scale(t, uv, t.constant(Matrix::column_vector(mask)));
        const ad::Var gamma = cfg.gamma.automatic
                                  ? detail::gamma_var(t, u, v, residual->key, residual->norm, cfg.gamma.cap)
                                  : t.constant(Matrix::scalar(cfg.gamma.value));
        ad::Var delta = ad::scale_by(t, masked, gamma);
        ad::Var w = t.constant(weights);
        const std::size_t rows = weights.rows, cols = weights.cols;
        if (cfg.layout == UpdateLayout::flat) {
            w = ad::reshape(t, w, 1, rows * cols);
            delta = ad::reshape(t, delta, 1, rows * cols);
        }
        ad::Var sum = cfg.rule == UpdateRule::mobius ? ad::mobius_add_rows(t, w, delta, cfg.curvature) : ad::add(t, w, delta);
        ad::Var updated = ad::project_rows(t, sum, cfg.curvature);
        if (cfg.layout == UpdateLayout::flat) updated = ad::reshape(t, updated, rows, cols);
        return problem.loss(t, updated);
    };
}

// ------------------------------------------------------------------ the loop

enum class EditStage { mask, gamma_target, optimize, gamma, assemble, apply, evaluate };

inline const char* to_string(EditStage s) {
    switch (s) {
        case EditStage::mask: return "mask";
        case EditStage::gamma_target: return "gamma_target";
        case EditStage::optimize: return "optimize";
        case EditStage::gamma: return "gamma";
        case EditStage::assemble: return "assemble";
        case EditStage::apply: return "apply";
        case EditStage::evaluate: return "evaluate";
    }
    return "?";
}

/// Called on entry to every stage; tests use it to inject faults.
using StageHook = std::function<void(EditStage, std::size_t cycle)>;

struct EditOutcome {
    long case_id = 0;
    std::size_t cycles = 0;
    double initial_loss = 0.0;
    double final_loss = 0.0;
    double delta_frobenius = 0.0;  // ||W_after - W_before||_F
    double mask_min = 0.0, mask_mean = 0.0, mask_max = 0.0;
    double gamma = 0.0;
    bool converged = false;
    std::vector<UpdatePlan> plans;
    std::vector<std::vector<StepRecord>> training_logs;
};

inline nlohmann::json outcome_to_json(const EditOutcome& o) {
    return {{"case_id", o.case_id},
            {"cycles", o.cycles},
            {"final_loss", o.final_loss},
            {"delta_frobenius", o.delta_frobenius},
            {"mask_summary", {{"min", o.mask_min}, {"mean", o.mask_mean}, {"max", o.mask_max}}},
            {"gamma", o.gamma}};
}

/// Runs the do-while edit loop on `model`. The GNN is reset after every cycle
/// and on every exit path; on error the model is also restored.
inline EditOutcome run_edit(ToyModel& model, const HyperbolicGraph& graph, const EditRequest& request, GnnParams& params,
                            const EditConfig& cfg, const StageHook& hook = {}) {
    ResetGuard guard(params);
    cfg.validate();
    request.validate();
    if (params.m() != model.rows() || params.n() != model.key_dim())
        throw ConfigError("run_edit: GNN readout dims do not match the model");
    const ModelState original = model.snapshot();
    auto stage = [&](EditStage s, std::size_t cycle) {
        if (hook) hook(s, cycle);
    };
    try {
        const EditProblem problem(model, request, cfg.kl_factor, original);
        const EditAnchor anchor = EditAnchor::from_request(graph, request);
        const double target_nll = cfg.target_nll_fraction * cfg.early_stop_loss();

        EditOutcome out;
        out.case_id = request.case_id;
        out.initial_loss = problem.value(model.weights());
        double loss = out.initial_loss;
        do {
            const std::size_t cycle = out.cycles++;
            UpdatePlan plan;

            stage(EditStage::mask, cycle);
            const Matrix grad = problem.value_and_grad(model.weights()).second;
            std::tie(plan.grad_means, plan.mask) = gradient_mask(grad, cfg.tau_g);

            stage(EditStage::gamma_target, cycle);
            std::optional<Residual> residual;
            if (cfg.gamma.automatic) residual = rewrite_residual(model, request, target_nll);

            stage(EditStage::optimize, cycle);
            GnnOptConfig gopt = cfg.gnn;
            gopt.dropout_seed = splitmix64(cfg.gnn.dropout_seed ^ static_cast<std::uint64_t>(request.case_id)) + cycle;
            const Matrix weights = model.weights();
            OptimizeResult opt;
            if (residual && residual->norm == 0.0) {
                // already at the target: nothing to learn, gamma is zero
                std::tie(opt.u, opt.v) = readout_uv(graph, anchor, params);
            } else {
                const EditObjective objective =
                    make_objective(problem, weights, plan.mask, cfg, residual ? &*residual : nullptr);
                opt = optimize_for_edit(graph, anchor, params, gopt, objective);
            }
            plan.u = opt.u;
            plan.v = opt.v;

            stage(EditStage::gamma, cycle);
            if (!cfg.gamma.automatic)
                plan.gamma = cfg.gamma.value;
            else if (residual->norm == 0.0)
                plan.gamma = 0.0;
            else
                plan.gamma = auto_gamma(residual->norm, plan.u, plan.v, residual->key, cfg.gamma.cap);

            stage(EditStage::assemble, cycle);
            plan.delta = assemble_delta(plan.u, plan.v, plan.gamma, plan.mask);

            stage(EditStage::apply, cycle);
            model.set_weights(apply_update(weights, plan.delta, cfg.curvature, cfg.rule, cfg.layout));
            params.reset();

            stage(EditStage::evaluate, cycle);
            loss = problem.value(model.weights());
            if (!std::isfinite(loss)) throw NumericInstability("run_edit: non-finite loss after cycle " + std::to_string(cycle));

            out.training_logs.push_back(std::move(opt.log));
            out.plans.push_back(std::move(plan));
        } while (!(loss < cfg.early_stop_loss()) && out.cycles < cfg.max_cycles);

        out.final_loss = loss;
        out.converged = loss < cfg.early_stop_loss();
        Matrix diff = model.weights();
        for (std::size_t i = 0; i < diff.size(); ++i) diff.data[i] -= original.weights.data[i];
        out.delta_frobenius = frobenius_norm(diff);
        const UpdatePlan& last = out.plans.back();
        out.gamma = last.gamma;
        out.mask_min = *std::min_element(last.mask.begin(), last.mask.end());
        out.mask_max = *std::max_element(last.mask.begin(), last.mask.end());
        double s = 0.0;
        for (double x : last.mask) s += x;
        out.mask_mean = s / static_cast<double>(last.mask.size());
        return out;
    } catch (...) {
        model.restore(original);
        throw;
    }
}

}  // namespace hype
