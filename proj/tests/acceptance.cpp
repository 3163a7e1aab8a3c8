// Acceptance suite: one PASS/FAIL line per criterion with the measured value,
// the tolerance it was held to, and the runtime. Exit status is the number of
// failing criteria (capped at 1 for ctest).

#include <chrono>
#include <cstdio>
#include <functional>
#include <iostream>
#include <random>
#include <sstream>
#include <string>

#include "oracle_edit.hpp"
#include "support.hpp"

using namespace hype;

namespace {

struct Verdict {
    bool pass = false;
    std::string detail;
};

std::string fmt(const char* f, double x) {
    char buf[64];
    std::snprintf(buf, sizeof buf, f, x);
    return buf;
}

Vector negate(Vector v) {
    for (auto& x : v) x = -x;
    return v;
}

// ------------------------------------------------------------------ 1

Verdict gyrovector_laws() {
    std::mt19937_64 rng(101);
    std::uniform_real_distribution<double> frac(0.0, 0.99);
    double worst = 0.0;
    bool closed = true;
    for (double c : {0.5, 1.0, 2.0}) {
        const Curvature cv(c);
        for (int t = 0; t < 10000; ++t) {
            const std::size_t d = 1 + t % 16;
            const Vector w = test::random_interior(rng, d, cv, frac(rng));
            const Vector x = test::random_interior(rng, d, cv, frac(rng));
            const Vector zero(d, 0.0);
            const Vector s = mobius_add(w, x, cv);
            closed = closed && norm(s) < cv.radius();
            worst = std::max(worst, test::max_abs_diff(mobius_add(zero, x, cv), x));
            worst = std::max(worst, test::max_abs_diff(mobius_add(w, zero, cv), w));
            worst = std::max(worst, test::max_abs_diff(mobius_add(w, negate(w), cv), zero));
            worst = std::max(worst, test::max_abs_diff(mobius_add(negate(w), s, cv), x));
            const test::RVec ref = test::oracle_mobius(test::widen(w), test::widen(x), test::Real(c));
            for (std::size_t i = 0; i < d; ++i) worst = std::max(worst, std::abs(s[i] - static_cast<double>(ref[i])));
        }
    }
    return {closed && worst <= 1e-9,
            "3x10^4 pairs, max violation " + fmt("%.3g", worst) + " (tol 1e-9), closure " + (closed ? "held" : "VIOLATED")};
}

// ------------------------------------------------------------------ 2

Verdict exp_map_and_projection() {
    std::mt19937_64 rng(102);
    std::uniform_real_distribution<double> tiny(1e-8, 1e-4), big(0.01, 50.0), frac(0.0, 0.99);
    double first_order = 0.0, round_trip = 0.0;
    bool idempotent = true, bounded = true;
    for (double c : {0.5, 1.0, 2.0}) {
        const Curvature cv(c);
        for (int t = 0; t < 3000; ++t) {
            const std::size_t d = 1 + t % 16;
            const Vector v = test::random_interior(rng, d, Curvature(1.0), tiny(rng));
            const double nv = norm(v);
            Vector diff = exp_map_origin(v, cv);
            for (std::size_t i = 0; i < d; ++i) diff[i] -= v[i];
            first_order = std::max(first_order, norm(diff) / (c * nv * nv * nv));

            const Vector out = test::random_interior(rng, d, Curvature(1.0), big(rng));
            const Vector p = project_to_ball(out, cv);
            idempotent = idempotent && project_to_ball(p, cv) == p;
            bounded = bounded && norm(p) <= (1.0 - kBallMargin) * cv.radius() * (1.0 + 1e-15);

            const Vector x = test::random_interior(rng, d, cv, frac(rng));
            round_trip = std::max(round_trip, test::max_abs_diff(exp_map_origin(log_map_origin(x, cv), cv), x));
            const Vector y = test::random_interior(rng, d, Curvature(1.0), frac(rng) * 3.0);
            round_trip = std::max(round_trip, test::max_abs_diff(log_map_origin(exp_map_origin(y, cv), cv), y));
        }
    }
    const bool ok = first_order <= 1.0 && idempotent && bounded && round_trip <= 1e-9;
    return {ok, "first-order ratio " + fmt("%.3g", first_order) + " (<= 1), projection " +
                    (idempotent && bounded ? "idempotent and bounded" : "FAILED") + ", round trip " +
                    fmt("%.3g", round_trip) + " (tol 1e-9)"};
}

// ------------------------------------------------------------------ 3

double rel_err(double a, double b) {
    const double scale = std::max(std::abs(a), std::abs(b));
    return scale == 0.0 ? 0.0 : std::abs(a - b) / scale;
}

Verdict gradient_fidelity() {
    const auto& f = test::bench();
    const EditConfig cfg = f.cfg.edit_config();
    const test::Quad h = 1e-5;
    std::mt19937_64 rng(103);
    double worst = 0.0;
    std::size_t probes = 0;

    // GNN parameters, 12 probes on each of four requests
    for (std::size_t q = 0; q < 4; ++q) {
        const EditRequest& r = f.data.requests[q * 11];
        const test::FirstCycle fc(f.model, f.graph, r, cfg);
        GnnParams p = test::fresh_params(f);
        std::vector<Matrix> grads;
        objective_and_grad(f.graph, fc.anchor, p, fc.objective, &grads);
        auto wide = test::widen_params<test::Quad>(p);
        for (int k = 0; k < 12; ++k, ++probes) {
            const std::size_t ti = std::uniform_int_distribution<std::size_t>(0, p.size() - 1)(rng);
            const std::size_t i = std::uniform_int_distribution<std::size_t>(0, p.tensor(ti).size() - 1)(rng);
            const test::Quad x0 = wide[ti].data[i];
            wide[ti].data[i] = x0 + h;
            const test::Quad up = test::oracle_objective(f.model, f.graph, r, cfg, fc.mask, fc.residual, wide, f.cfg.gnn.rounds);
            wide[ti].data[i] = x0 - h;
            const test::Quad down =
                test::oracle_objective(f.model, f.graph, r, cfg, fc.mask, fc.residual, wide, f.cfg.gnn.rounds);
            wide[ti].data[i] = x0;
            worst = std::max(worst, rel_err(grads[ti].data[i], static_cast<double>((up - down) / (2 * h))));
        }
    }

    // edited-layer weights, away from the KL reference
    const EditRequest& r = f.data.requests[7];
    ToyModel m = f.model;
    Matrix w = m.weights();
    for (std::size_t i = 0; i < w.size(); i += 5) w.data[i] *= 0.98;
    m.set_weights(w);
    const ModelState original = f.model.snapshot();
    const Matrix grad = edit_loss(m, r, cfg.kl_factor, &original).second;
    test::TMat<test::Quad> wq(m.weights());
    for (int k = 0; k < 16; ++k, ++probes) {
        const std::size_t i = std::uniform_int_distribution<std::size_t>(0, grad.size() - 1)(rng);
        const test::Quad x0 = wq.data[i];
        wq.data[i] = x0 + h;
        const test::Quad up = test::oracle_problem_loss(f.model, r, cfg.kl_factor, wq);
        wq.data[i] = x0 - h;
        const test::Quad down = test::oracle_problem_loss(f.model, r, cfg.kl_factor, wq);
        wq.data[i] = x0;
        worst = std::max(worst, rel_err(grad.data[i], static_cast<double>((up - down) / (2 * h))));
    }
    return {worst <= 1e-4, std::to_string(probes) + " probes vs quad-precision central differences, max relative error " +
                               fmt("%.3g", worst) + " (tol 1e-4)"};
}

// ------------------------------------------------------------------ 4

Verdict reset_invariant() {
    const auto& f = test::bench();
    const EditConfig base = f.cfg.edit_config();
    GnnParams p = test::fresh_params(f);
    const GnnParams pristine = test::fresh_params(f);
    std::size_t runs = 0, bad = 0;
    auto check = [&] {
        ++runs;
        bad += p.tensors() == pristine.tensors() ? 0 : 1;
    };
    for (std::size_t i = 0; i < 5; ++i) {
        ToyModel m = f.model;
        run_edit(m, f.graph, f.data.requests[i], p, base);
        check();
    }
    for (EditStage s : {EditStage::mask, EditStage::gamma_target, EditStage::optimize, EditStage::gamma, EditStage::assemble,
                        EditStage::apply, EditStage::evaluate}) {
        ToyModel m = f.model;
        auto hook = [&](EditStage st, std::size_t) {
            if (st == s) throw NumericInstability("injected");
        };
        try {
            run_edit(m, f.graph, f.data.requests[0], p, base, hook);
        } catch (const NumericInstability&) {
        }
        check();
        bad += m == f.model ? 0 : 1;
    }

    const test::FirstCycle first(f.model, f.graph, f.data.requests[0], base);
    const test::FirstCycle second(f.model, f.graph, f.data.requests[1], base);
    GnnParams shared = test::fresh_params(f);
    optimize_for_edit(f.graph, first.anchor, shared, base.gnn, first.objective);
    shared.reset();
    const auto after = optimize_for_edit(f.graph, second.anchor, shared, base.gnn, second.objective);
    GnnParams alone = test::fresh_params(f);
    const auto solo = optimize_for_edit(f.graph, second.anchor, alone, base.gnn, second.objective);
    const double d = std::max(test::max_abs_diff(after.u, solo.u), test::max_abs_diff(after.v, solo.v));
    return {bad == 0 && d <= 1e-12, std::to_string(runs) + " runs (7 with injected faults), " + std::to_string(bad) +
                                         " left params or model changed; second-edit (u, v) difference " + fmt("%.3g", d) +
                                         " (tol 1e-12)"};
}

// ------------------------------------------------------------------ 5

Verdict mask_behavior() {
    bool ok = true;
    Matrix g(1, 3, 0.25);
    ok = ok && gradient_mask(g, 0.25).second[0] == 0.5;
    double prev = -1.0;
    bool monotone = true;
    for (double s = 0.0; s <= 2.0; s += 0.01) {
        const double m = gradient_mask(Matrix(1, 3, s), 0.25).second[0];
        monotone = monotone && m > prev;
        prev = m;
    }
    ok = ok && monotone;
    const bool zero = assemble_delta({0.7, -1.5}, {2.0, 3.0, -4.0}, 3.0, {0.0, 0.0}) == Matrix(2, 3, 0.0);
    Matrix want(2, 2);
    want.data = {1.5, 0.5, 1.5, 0.5};
    const bool worked = assemble_delta({1.0, 2.0}, {3.0, 1.0}, 0.5, {1.0, 0.5}) == want;
    ok = ok && zero && worked;
    return {ok, std::string("sigma(0)=0.5 exact, ") + (monotone ? "strictly monotone" : "NOT monotone") +
                    ", zero mask gives zero delta: " + (zero ? "yes" : "no") + ", 2x2 example exact: " + (worked ? "yes" : "no")};
}

// ------------------------------------------------------------------ 6

Verdict manifold_preservation() {
    const auto& f = test::bench();
    BenchmarkSpec spec = f.cfg.benchmark;
    spec.requests = 200;
    const auto requests = generate_requests(f.data.triples, spec, true);
    RunConfig cfg = f.cfg;
    cfg.protocol = Protocol::sequential;
    const EditBatch batch = edit_batch(f.model, f.graph, requests, cfg);
    std::size_t instabilities = 0, failures = 0, outside = 0;
    for (const auto& c : batch.cases)
        if (!c.ok) {
            ++failures;
            instabilities += c.error.find("instab") != std::string::npos ? 1 : 0;
        }
    const ToyModel& m = batch.final_model;
    for (std::size_t i = 0; i < m.rows(); ++i) outside += satisfies_ball_invariant(m.weights().row(i), m.curvature()) ? 0 : 1;
    return {requests.size() == 200 && outside == 0 && instabilities == 0,
            std::to_string(requests.size()) + " sequential edits, " + std::to_string(outside) + " rows outside the ball, " +
                std::to_string(instabilities) + " numeric-instability errors (" + std::to_string(failures) +
                " failed cases in total)"};
}

// ------------------------------------------------------------------ 7

MetricsReport mobius_seed1_report;

Verdict desk_benchmark() {
    double mob_hop = 0.0, euc_hop = 0.0;
    double eff = 0.0, control = 0.0;
    std::ostringstream per_seed;
    for (std::uint64_t seed = 1; seed <= 5; ++seed) {
        const auto& f = test::bench(1.0, 0.5, seed);
        const auto mob = run_pipeline(f.cfg, f.data, f.model, f.graph);
        RunConfig ecfg = f.cfg;
        ecfg.update_rule = UpdateRule::euclidean;
        const auto euc = run_pipeline(ecfg, f.data, f.model, f.graph);
        const double a = mob.report.hops.at(2).percent(), b = euc.report.hops.at(2).percent();
        mob_hop += a / 5.0;
        euc_hop += b / 5.0;
        per_seed << " s" << seed << " " << fmt("%.1f", a) << "/" << fmt("%.1f", b);
        if (seed == 1) {
            eff = mob.report.eff.percent();
            control = mob.report.control ? mob.report.control->percent() : 0.0;
            mobius_seed1_report = mob.report;
        }
    }
    const bool ok = eff >= 95.0 && control >= 90.0 && mob_hop > euc_hop;
    return {ok, "Eff " + fmt("%.2f", eff) + "% (>= 95), control specificity " + fmt("%.2f", control) +
                    "% (>= 90), 2-hop Mobius " + fmt("%.2f", mob_hop) + "% vs Euclidean " + fmt("%.2f", euc_hop) +
                    "% (strictly greater) [per seed Mobius/Euclidean:" + per_seed.str() + "]"};
}

// ------------------------------------------------------------------ 8

Verdict figure_sweeps() {
    const auto& f = test::bench();
    RunConfig cfg = f.cfg;
    cfg.sweep.axis = "curvature";
    cfg.sweep.values = {0.5, 1.0, 2.0};
    const auto cr = run_sweep(cfg, f.data);
    cfg.sweep.axis = "tau";
    cfg.sweep.values = {0.2, 0.5, 0.8};
    const auto tr = run_sweep(cfg, f.data);
    const bool c_ok = cr[1].eds >= cr[0].eds && cr[1].eds >= cr[2].eds;
    const bool t_ok = tr[1].eds >= tr[0].eds && tr[1].eds >= tr[2].eds;
    bool statuses = true;
    for (const auto& r : cr) statuses = statuses && r.status == "ok";
    for (const auto& r : tr) statuses = statuses && r.status == "ok";
    return {c_ok && t_ok && statuses, "EDS at c=0.5/1/2: " + fmt("%.3f", cr[0].eds) + "/" + fmt("%.3f", cr[1].eds) + "/" +
                                          fmt("%.3f", cr[2].eds) + "; at tau=0.2/0.5/0.8: " + fmt("%.3f", tr[0].eds) +
                                          "/" + fmt("%.3f", tr[1].eds) + "/" + fmt("%.3f", tr[2].eds)};
}

// ------------------------------------------------------------------ 9

Verdict metric_exactness() {
    bool ok = true;
    double worst = 0.0;
    for (double x : {0.01, 1.0, 42.0, 79.47, 100.0}) worst = std::max(worst, std::abs(eds(x, x, x).value - x));
    ok = ok && worst <= 1e-12;
    const double e75 = eds(100.0, 100.0, 50.0).value;
    ok = ok && std::abs(e75 - 75.0) <= 1e-12;
    const double row = eds(99.43, 98.35, 79.47).value;
    const double oracle = static_cast<double>(test::Real(3) / (1 / test::Real("99.43") + 1 / test::Real("98.35") +
                                                               1 / test::Real("79.47")));
    ok = ok && std::abs(row - 91.44) <= 0.01 && std::abs(row - oracle) <= 1e-12;
    const auto j = report_to_json(aggregate({}), {}, 1);
    const bool flagged = j["EDS_reference"]["reported_EDS"] == 92.42 && j["EDS"] != 92.42;
    ok = ok && flagged;
    return {ok, "eds(x,x,x) error " + fmt("%.3g", worst) + ", eds(100,100,50)=" + fmt("%.12g", e75) + ", published row -> " +
                    fmt("%.4f", row) + " (91.44 +- 0.01), 92.42 " + (flagged ? "flagged in report" : "NOT flagged")};
}

// ------------------------------------------------------------------ 10

Verdict wire_format() {
    const auto& cases = mobius_seed1_report.cases;
    std::size_t bad = 0;
    for (const auto& c : cases) {
        try {
            const auto text = listing_to_json(c.listing).dump();
            const auto j = nlohmann::json::parse(text);
            validate_listing(j);
            if (!(listing_from_json(j) == c.listing)) ++bad;
            if (listing_to_json(listing_from_json(nlohmann::ordered_json::parse(text))).dump() != text) ++bad;
        } catch (const Error&) {
            ++bad;
        }
    }
    return {!cases.empty() && bad == 0,
            std::to_string(cases.size()) + " benchmark cases, " + std::to_string(bad) + " failed schema or round trip"};
}

}  // namespace

int main() {
    struct Criterion {
        int id;
        const char* name;
        double budget_s;
        std::function<Verdict()> run;
    };
    const Criterion all[] = {
        {1, "gyrovector laws", 5.0, gyrovector_laws},
        {2, "exp map and projection", 2.0, exp_map_and_projection},
        {3, "gradient fidelity", 30.0, gradient_fidelity},
        {4, "reset invariant", 0.0, reset_invariant},
        {5, "mask behavior", 0.0, mask_behavior},
        {6, "manifold preservation", 0.0, manifold_preservation},
        {7, "desk-scale edit benchmark", 300.0, desk_benchmark},
        {8, "curvature and tau sweeps", 900.0, figure_sweeps},
        {9, "metric formula exactness", 0.0, metric_exactness},
        {10, "wire-format conformance", 0.0, wire_format},
    };
    int failed = 0;
    for (const auto& c : all) {
        const auto t0 = std::chrono::steady_clock::now();
        Verdict v;
        try {
            v = c.run();
        } catch (const std::exception& e) {
            v = {false, std::string("threw: ") + e.what()};
        }
        const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
        const bool in_time = c.budget_s == 0.0 || secs < c.budget_s;
        const bool pass = v.pass && in_time;
        failed += pass ? 0 : 1;
        std::string timing = fmt("%.2f s", secs);
        if (c.budget_s > 0.0) timing += fmt(", budget %.0f s", c.budget_s);
        if (!in_time) timing += ", OVER BUDGET";
        std::cout << (pass ? "[PASS] " : "[FAIL] ") << c.id << ". " << c.name << ": " << v.detail << " (" << timing << ")"
                  << std::endl;
    }
    std::cout << (10 - failed) << "/10 criteria passed" << std::endl;
    return failed == 0 ? 0 : 1;
}
