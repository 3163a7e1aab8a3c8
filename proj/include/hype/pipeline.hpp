#pragma once

// Batch pipeline behind the command-line tool: data loading, model fitting,
// edit batches, evaluation and sweeps, plus the files each step writes.

#include <chrono>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include "json.hpp"

#include "hype/benchmark.hpp"
#include "hype/config.hpp"
#include "hype/edit_engine.hpp"
#include "hype/errors.hpp"
#include "hype/gnn.hpp"
#include "hype/kg_builder.hpp"
#include "hype/metrics.hpp"
#include "hype/request.hpp"
#include "hype/toy_model.hpp"

namespace hype {

// ------------------------------------------------------------------ exit codes

enum ExitCode : int { kExitOk = 0, kExitSchema = 1, kExitInput = 2, kExitNumeric = 3 };

/// Maps the active exception to a process exit code. Call inside a catch block.
inline int exit_code_for_current_exception() {
    try {
        throw;
    } catch (const SchemaError&) {
        return kExitSchema;
    } catch (const IoError&) {
        return kExitInput;
    } catch (const ParseError&) {
        return kExitInput;
    } catch (const ConfigError&) {
        return kExitInput;
    } catch (const KeyError&) {
        return kExitInput;
    } catch (const VocabularyError&) {
        return kExitInput;
    } catch (const InvalidArgument&) {
        return kExitInput;
    } catch (...) {
        return kExitNumeric;
    }
}

// ------------------------------------------------------------------ threads

inline constexpr const char* kSingleThreadEnv = "HYPE_SINGLE_THREAD";

inline bool single_threaded() {
    const char* v = std::getenv(kSingleThreadEnv);
    return v && *v && std::string(v) != "0";
}

/// Runs fn(i) for i in [0, n). Workers take interleaved indices; results must
/// be written to per-index slots so the merged output does not depend on timing.
template <typename F>
void parallel_for(std::size_t n, F fn) {
    const std::size_t hw = std::max(1u, std::thread::hardware_concurrency());
    const std::size_t workers = single_threaded() ? 1 : std::min(hw, n);
    if (workers <= 1) {
        for (std::size_t i = 0; i < n; ++i) fn(i);
        return;
    }
    std::vector<std::exception_ptr> errors(workers);
    std::vector<std::thread> pool;
    for (std::size_t w = 0; w < workers; ++w)
        pool.emplace_back([&, w] {
            try {
                for (std::size_t i = w; i < n; i += workers) fn(i);
            } catch (...) {
                errors[w] = std::current_exception();
            }
        });
    for (auto& t : pool) t.join();
    for (auto& e : errors)
        if (e) std::rethrow_exception(e);
}

// ------------------------------------------------------------------ files

inline std::string read_file(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open " + path.string());
    std::ostringstream os;
    os << in.rdbuf();
    return os.str();
}

inline std::vector<Triple> read_triples_file(const std::filesystem::path& path) {
    std::istringstream in(read_file(path));
    return ingest_triples(in, path.extension() == ".jsonl" ? TripleFormat::jsonl : TripleFormat::tsv);
}

inline std::vector<EditRequest> read_requests_file(const std::filesystem::path& path) {
    std::istringstream in(read_file(path));
    return read_requests(in);
}

inline std::vector<HopChain> read_chains_file(const std::filesystem::path& path) {
    std::istringstream in(read_file(path));
    return read_chains(in);
}

inline std::string triples_tsv(const std::vector<Triple>& triples) {
    std::string s;
    for (const auto& t : triples) s += t.subject + '\t' + t.relation + '\t' + t.object + '\n';
    return s;
}

template <typename T, typename ToJson>
std::string jsonl(const std::vector<T>& items, ToJson to_json) {
    std::string s;
    for (const auto& x : items) s += to_json(x).dump() + '\n';
    return s;
}

inline std::string pretty(const nlohmann::ordered_json& j) { return j.dump(2) + '\n'; }

inline void ensure_dir(const std::filesystem::path& dir) {
    std::error_code ec;
    std::filesystem::create_directories(dir, ec);
    if (ec) throw IoError("cannot create " + dir.string() + ": " + ec.message());
}

// ------------------------------------------------------------------ stages

struct Dataset {
    std::vector<Triple> triples;
    std::vector<EditRequest> requests;
    std::vector<HopChain> chains;
};

inline Dataset benchmark_dataset(const BenchmarkSpec& spec) {
    Benchmark b = generate_benchmark(spec);
    return {std::move(b.triples), std::move(b.requests), std::move(b.chains)};
}

inline HyperbolicGraph build_graph_for(const RunConfig& cfg, const std::vector<Triple>& triples) {
    const Curvature c(cfg.curvature);
    return build_graph(triples, seed_embeddings(triples, cfg.graph.embedding_dim, cfg.seed, c), cfg.graph_options());
}

/// Fresh model at the configured curvature, fitted to `triples`.
inline ToyModel fit_model(const RunConfig& cfg, const std::vector<Triple>& triples, FitReport* report = nullptr) {
    ToyModel model = ToyModel::create(vocab_from_triples(triples), cfg.model.shape, cfg.model.init_seed, Curvature(cfg.curvature));
    const FitReport r = fit(model, triples, cfg.model.fit);
    if (report) *report = r;
    return model;
}

/// The update a case applied, enough to replay it bit-for-bit.
struct CaseEdit {
    long case_id = 0;
    bool ok = true;
    std::string error;
    double seconds = 0.0;
    std::vector<UpdatePlan> plans;
    std::optional<EditOutcome> outcome;
};

struct EditBatch {
    Protocol protocol = Protocol::independent;
    std::vector<CaseEdit> cases;
    /// Accumulated model under the sequential protocol, the untouched base otherwise.
    ToyModel final_model;
};

/// Re-applies recorded cycles to `model`.
inline void replay(ToyModel& model, const std::vector<UpdatePlan>& plans, const EditConfig& cfg) {
    for (const auto& p : plans)
        model.set_weights(apply_update(model.weights(), assemble_delta(p.u, p.v, p.gamma, p.mask), cfg.curvature, cfg.rule,
                                       cfg.layout));
}

/// Runs every request. A hype::Error inside one case is recorded and the batch
/// continues; the GNN is reset by run_edit on every path.
inline EditBatch edit_batch(const ToyModel& base, const HyperbolicGraph& graph, const std::vector<EditRequest>& requests,
                            const RunConfig& cfg, std::ostream* log = nullptr) {
    const EditConfig ec = cfg.edit_config();
    GnnParams params(cfg.gnn_config(), graph.feature_dim(), base.rows(), base.key_dim());
    EditBatch batch;
    batch.protocol = cfg.protocol;
    ToyModel model = base;
    const ModelState start = base.snapshot();
    for (const auto& r : requests) {
        if (cfg.protocol == Protocol::independent) model.restore(start);
        CaseEdit ce;
        ce.case_id = r.case_id;
        const auto t0 = std::chrono::steady_clock::now();
        try {
            EditOutcome o = run_edit(model, graph, r, params, ec);
            ce.plans = o.plans;
            ce.outcome = std::move(o);
        } catch (const Error& e) {
            ce.ok = false;
            ce.error = e.what();
        }
        ce.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
        if (log) {
            *log << "case " << r.case_id << ": ";
            if (ce.ok)
                *log << "cycles " << ce.outcome->cycles << " loss " << ce.outcome->final_loss;
            else
                *log << "error: " << ce.error;
            *log << " (" << ce.seconds << " s)\n";
        }
        batch.cases.push_back(std::move(ce));
    }
    batch.final_model = cfg.protocol == Protocol::independent ? base : model;
    return batch;
}

inline nlohmann::ordered_json case_edit_to_json(const CaseEdit& c) {
    nlohmann::ordered_json j;
    j["case_id"] = c.case_id;
    j["status"] = c.ok ? "ok" : "error";
    if (!c.ok) j["error"] = c.error;
    j["time"] = c.seconds;
    nlohmann::ordered_json plans = nlohmann::ordered_json::array();
    for (const auto& p : c.plans) plans.push_back({{"gamma", p.gamma}, {"u", p.u}, {"v", p.v}, {"mask", p.mask}});
    j["plans"] = plans;
    return j;
}

inline CaseEdit case_edit_from_json(const nlohmann::json& j) {
    CaseEdit c;
    c.case_id = j.at("case_id").get<long>();
    c.ok = j.at("status").get<std::string>() == "ok";
    c.error = j.value("error", "");
    c.seconds = j.at("time").get<double>();
    for (const auto& p : j.at("plans")) {
        UpdatePlan u;
        u.gamma = p.at("gamma").get<double>();
        u.u = p.at("u").get<Vector>();
        u.v = p.at("v").get<Vector>();
        u.mask = p.at("mask").get<Vector>();
        c.plans.push_back(std::move(u));
    }
    return c;
}

inline std::vector<CaseEdit> read_updates_file(const std::filesystem::path& path) {
    std::istringstream in(read_file(path));
    return read_jsonl<CaseEdit>(in, case_edit_from_json);
}

/// Scores a batch. Under the independent protocol each case is scored on the
/// original model plus that case's own update, and hop and control rates are
/// pooled over cases; under the sequential protocol everything is scored on
/// `edited`.
inline MetricsReport evaluate_batch(const ToyModel& original, const ToyModel& edited, const std::vector<CaseEdit>& edits,
                                    const Dataset& data, const RunConfig& cfg) {
    std::map<long, const CaseEdit*> by_id;
    for (const auto& e : edits) by_id[e.case_id] = &e;
    const std::vector<Triple> controls = data.triples.empty() ? std::vector<Triple>{} : control_facts(data.triples, data.requests);
    const std::size_t n = data.requests.size();
    std::vector<CaseRecord> records(n);
    std::map<std::size_t, Rate> hops;

    if (cfg.protocol == Protocol::sequential) {
        parallel_for(n, [&](std::size_t i) {
            const auto it = by_id.find(data.requests[i].case_id);
            records[i] = evaluate_case(edited, data.requests[i], it == by_id.end() ? 0.0 : it->second->seconds);
        });
        for (std::size_t h = 2; h <= cfg.benchmark.max_hops; ++h) hops[h] = multi_hop_efficacy(edited, data.chains, h);
        std::optional<Rate> control;
        if (!controls.empty()) control = control_specificity(edited, original, controls);
        return aggregate(std::move(records), std::move(hops), control);
    }

    const EditConfig ec = cfg.edit_config();
    std::vector<std::map<std::size_t, std::pair<std::size_t, std::size_t>>> hop_counts(n);  // hops -> (ok, total)
    std::vector<double> control_rates(n, 0.0);
    parallel_for(n, [&](std::size_t i) {
        const EditRequest& r = data.requests[i];
        const auto it = by_id.find(r.case_id);
        if (it == by_id.end()) throw InvalidArgument("no recorded update for case " + std::to_string(r.case_id));
        ToyModel state = original;
        replay(state, it->second->plans, ec);
        records[i] = evaluate_case(state, r, it->second->seconds);
        for (const auto& ch : data.chains) {
            if (ch.case_id != r.case_id) continue;
            auto& slot = hop_counts[i][ch.hops()];
            slot.first += chain_success(state, ch) ? 1 : 0;
            ++slot.second;
        }
        if (!controls.empty()) control_rates[i] = control_specificity(state, original, controls).value;
    });
    for (std::size_t h = 2; h <= cfg.benchmark.max_hops; ++h) {
        std::size_t ok = 0, total = 0;
        for (const auto& m : hop_counts) {
            const auto it = m.find(h);
            if (it == m.end()) continue;
            ok += it->second.first;
            total += it->second.second;
        }
        hops[h] = Rate{total ? static_cast<double>(ok) / static_cast<double>(total) : 0.0, total, 0};
    }
    std::optional<Rate> control;
    if (!controls.empty() && n > 0) {
        double s = 0.0;
        for (double x : control_rates) s += x;
        control = Rate{s / static_cast<double>(n), n, 0};
    }
    return aggregate(std::move(records), std::move(hops), control);
}

struct PipelineResult {
    EditBatch batch;
    MetricsReport report;
};

/// Edit then evaluate, all in memory.
inline PipelineResult run_pipeline(const RunConfig& cfg, const Dataset& data, const ToyModel& fitted,
                                   const HyperbolicGraph& graph, std::ostream* log = nullptr) {
    PipelineResult out;
    out.batch = edit_batch(fitted, graph, data.requests, cfg, log);
    out.report = evaluate_batch(fitted, out.batch.final_model, out.batch.cases, data, cfg);
    return out;
}

struct SweepRow {
    double value = 0.0;
    std::string status = "ok";
    double eff = 0.0, gen = 0.0, spec = 0.0, eds = 0.0;
};

/// Full pipeline per value with the shared seed. Curvature values refit the
/// model, since the edited layer lives in the ball of that curvature.
inline std::vector<SweepRow> run_sweep(const RunConfig& cfg, const Dataset& data, std::ostream* log = nullptr) {
    std::vector<SweepRow> rows;
    std::optional<ToyModel> shared;
    for (double value : cfg.sweep.values) {
        SweepRow row;
        row.value = value;
        try {
            RunConfig c = cfg;
            if (cfg.sweep.axis == "curvature")
                c.curvature = value;
            else
                c.tau = value;
            c.validate();
            ToyModel model;
            if (cfg.sweep.axis == "curvature") {
                model = fit_model(c, data.triples);
            } else {
                if (!shared) shared = fit_model(c, data.triples);
                model = *shared;
            }
            const auto result = run_pipeline(c, data, model, build_graph_for(c, data.triples));
            row.eff = result.report.eff.percent();
            row.gen = result.report.gen.percent();
            row.spec = result.report.spec.percent();
            row.eds = result.report.eds.value;
        } catch (const Error& e) {
            row.status = std::string("error: ") + e.what();
        }
        if (log) *log << cfg.sweep.axis << " " << value << ": EDS " << row.eds << " (" << row.status << ")\n";
        rows.push_back(std::move(row));
    }
    return rows;
}

inline std::string sweep_csv(const std::string& axis, const std::vector<SweepRow>& rows) {
    std::ostringstream os;
    os.precision(17);
    os << axis << ",status,Eff,Gen,Spec,EDS\n";
    for (const auto& r : rows) {
        std::string status = r.status;
        for (auto& ch : status)
            if (ch == ',' || ch == '\n') ch = ' ';
        os << r.value << ',' << status << ',' << r.eff << ',' << r.gen << ',' << r.spec << ',' << r.eds << '\n';
    }
    return os.str();
}

// ------------------------------------------------------------------ commands

namespace detail {

inline std::filesystem::path path_or(const RunConfig& cfg, const std::string& configured, const char* fallback) {
    return configured.empty() ? cfg.out_dir() / fallback : cfg.resolve(configured);
}

inline std::filesystem::path required_path(const RunConfig& cfg, const std::string& configured, const char* key) {
    if (configured.empty()) throw ConfigError(std::string("paths.") + key + " is required for this command");
    return cfg.resolve(configured);
}

inline Dataset load_dataset(const RunConfig& cfg, bool need_requests) {
    Dataset d;
    d.triples = read_triples_file(required_path(cfg, cfg.paths.triples, "triples"));
    if (need_requests) d.requests = read_requests_file(required_path(cfg, cfg.paths.requests, "requests"));
    if (!cfg.paths.chains.empty()) d.chains = read_chains_file(cfg.resolve(cfg.paths.chains));
    return d;
}

inline HyperbolicGraph load_or_build_graph(const RunConfig& cfg, const std::vector<Triple>& triples) {
    if (cfg.paths.graph.empty()) return build_graph_for(cfg, triples);
    try {
        return graph_from_json(nlohmann::json::parse(read_file(cfg.resolve(cfg.paths.graph))));
    } catch (const nlohmann::json::exception& e) {
        throw ConfigError(std::string("graph file: ") + e.what());
    }
}

}  // namespace detail

/// Writes triples.tsv, requests.jsonl and chains.jsonl for the configured benchmark.
inline int cmd_generate_benchmark(const RunConfig& cfg) {
    const Dataset d = benchmark_dataset(cfg.benchmark);
    const auto dir = cfg.out_dir();
    ensure_dir(dir);
    write_file_atomic(dir / "triples.tsv", triples_tsv(d.triples));
    write_file_atomic(dir / "requests.jsonl", jsonl(d.requests, request_to_json));
    write_file_atomic(dir / "chains.jsonl", jsonl(d.chains, chain_to_json));
    return kExitOk;
}

inline int cmd_build_graph(const RunConfig& cfg, std::ostream& out) {
    const auto triples = read_triples_file(detail::required_path(cfg, cfg.paths.triples, "triples"));
    const HyperbolicGraph g = build_graph_for(cfg, triples);
    const auto dir = cfg.out_dir();
    ensure_dir(dir);
    write_file_atomic(dir / "graph.json", graph_to_json(g).dump() + '\n');
    nlohmann::ordered_json summary;
    summary["summary"] = graph_summary(g);
    summary["config"] = config_to_json(cfg);
    summary["seed"] = cfg.seed;
    write_file_atomic(dir / "graph_summary.json", pretty(summary));
    out << graph_summary(g).dump() << '\n';
    return kExitOk;
}

inline int cmd_fit(const RunConfig& cfg, std::ostream& out) {
    const auto triples = read_triples_file(detail::required_path(cfg, cfg.paths.triples, "triples"));
    FitReport r;
    const ToyModel model = fit_model(cfg, triples, &r);
    const auto dir = cfg.out_dir();
    ensure_dir(dir);
    const auto path = detail::path_or(cfg, cfg.paths.model, "model.json");
    save_checkpoint(model, path);
    nlohmann::ordered_json j;
    j["residual"] = r.residual;
    j["mean_nll"] = r.mean_nll;
    j["train_accuracy"] = r.train_accuracy;
    j["config"] = config_to_json(cfg);
    j["seed"] = cfg.seed;
    write_file_atomic(dir / "fit_report.json", pretty(j));
    out << "fit: accuracy " << r.train_accuracy << ", mean nll " << r.mean_nll << " -> " << path.string() << '\n';
    return kExitOk;
}

inline int cmd_edit(const RunConfig& cfg, std::ostream& log) {
    const Dataset d = detail::load_dataset(cfg, true);
    const ToyModel model = load_checkpoint(detail::path_or(cfg, cfg.paths.model, "model.json"));
    const HyperbolicGraph g = detail::load_or_build_graph(cfg, d.triples);
    const EditBatch batch = edit_batch(model, g, d.requests, cfg, &log);

    const auto dir = cfg.out_dir();
    ensure_dir(dir);
    std::string outcomes, updates, failures, training;
    std::size_t ok = 0, converged = 0;
    for (const auto& c : batch.cases) {
        updates += case_edit_to_json(c).dump() + '\n';
        if (!c.ok) {
            failures += nlohmann::ordered_json{{"case_id", c.case_id}, {"error", c.error}}.dump() + '\n';
            continue;
        }
        ++ok;
        converged += c.outcome->converged ? 1 : 0;
        outcomes += outcome_to_json(*c.outcome).dump() + '\n';
        for (std::size_t cyc = 0; cyc < c.outcome->training_logs.size(); ++cyc)
            for (const auto& s : c.outcome->training_logs[cyc]) {
                nlohmann::ordered_json j;
                j["case_id"] = c.case_id;
                j["cycle"] = cyc;
                j["step"] = s.step;
                j["loss"] = s.loss;
                j["grad_norm"] = s.grad_norm;
                training += j.dump() + '\n';
            }
    }
    write_file_atomic(dir / "outcomes.jsonl", outcomes);
    write_file_atomic(detail::path_or(cfg, cfg.paths.updates, "updates.jsonl"), updates);
    write_file_atomic(dir / "edit_errors.jsonl", failures);
    write_file_atomic(dir / "training_log.jsonl", training);
    save_checkpoint(batch.final_model, detail::path_or(cfg, cfg.paths.edited_model, "edited_model.json"));
    nlohmann::ordered_json summary;
    summary["cases"] = batch.cases.size();
    summary["succeeded"] = ok;
    summary["failed"] = batch.cases.size() - ok;
    summary["converged"] = converged;
    summary["protocol"] = to_string(cfg.protocol);
    summary["config"] = config_to_json(cfg);
    summary["seed"] = cfg.seed;
    write_file_atomic(dir / "edit_summary.json", pretty(summary));
    return kExitOk;
}

/// Writes cases.jsonl (one listing per case), metrics.json and metrics.csv.
/// Every listing is validated before anything is written.
inline int cmd_evaluate(const RunConfig& cfg, std::ostream& out) {
    const Dataset d = detail::load_dataset(cfg, true);
    const ToyModel original = load_checkpoint(detail::path_or(cfg, cfg.paths.model, "model.json"));
    const ToyModel edited = load_checkpoint(detail::path_or(cfg, cfg.paths.edited_model, "edited_model.json"));
    std::vector<CaseEdit> edits;
    const auto updates_path = detail::path_or(cfg, cfg.paths.updates, "updates.jsonl");
    if (cfg.protocol == Protocol::independent || std::filesystem::exists(updates_path)) edits = read_updates_file(updates_path);
    const MetricsReport report = evaluate_batch(original, edited, edits, d, cfg);

    std::string cases;
    for (const auto& c : report.cases) {
        const auto j = listing_to_json(c.listing);
        validate_listing(nlohmann::json::parse(j.dump()));
        cases += j.dump() + '\n';
    }
    const auto dir = cfg.out_dir();
    ensure_dir(dir);
    write_file_atomic(dir / "cases.jsonl", cases);
    const auto agg = report_to_json(report, config_to_json(cfg), cfg.seed);
    write_file_atomic(dir / "metrics.json", pretty(agg));
    write_file_atomic(dir / "metrics.csv", report_csv(report));
    out << "Eff " << report.eff.percent() << "  Gen " << report.gen.percent() << "  Spec " << report.spec.percent()
        << "  Port " << report.port.percent() << "  EDS " << report.eds.value << '\n';
    return kExitOk;
}

inline int cmd_sweep(const RunConfig& cfg, std::ostream& log) {
    const Dataset d = detail::load_dataset(cfg, true);
    const auto rows = run_sweep(cfg, d, &log);
    const auto dir = cfg.out_dir();
    ensure_dir(dir);
    const std::string name = "sweep_" + cfg.sweep.axis;
    write_file_atomic(dir / (name + ".csv"), sweep_csv(cfg.sweep.axis, rows));
    nlohmann::ordered_json j;
    j["axis"] = cfg.sweep.axis;
    nlohmann::ordered_json arr = nlohmann::ordered_json::array();
    for (const auto& r : rows)
        arr.push_back({{"value", r.value}, {"status", r.status}, {"Eff", r.eff}, {"Gen", r.gen}, {"Spec", r.spec}, {"EDS", r.eds}});
    j["rows"] = arr;
    j["config"] = config_to_json(cfg);
    j["seed"] = cfg.seed;
    write_file_atomic(dir / (name + ".json"), pretty(j));
    return kExitOk;
}

}  // namespace hype
