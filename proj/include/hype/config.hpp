#pragma once

// File-backed run configuration. Every key has a default; unknown keys are
// rejected at every nesting level. The resolved configuration is written back
// into every report.
//
// Defaults follow the CounterFact column of the published hyperparameter
// table. Where it gives a range the midpoint is used (GNN steps 25-35 -> 30,
// KL factor 0.0625-0.075 -> 0.06875, feature dropout 0.2-0.4 -> 0.3); where
// it gives two values the first is used (weight decay 0.1, early stop 3e-2).

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <set>
#include <string>
#include <vector>

#include "json.hpp"

#include "hype/benchmark.hpp"
#include "hype/edit_engine.hpp"
#include "hype/errors.hpp"
#include "hype/gnn.hpp"
#include "hype/kg_builder.hpp"
#include "hype/toy_model.hpp"

namespace hype {

enum class Protocol {
    independent,  // every edit starts from the original model and is scored right after
    sequential,   // edits accumulate; scoring happens on the final model
};

inline const char* to_string(Protocol p) { return p == Protocol::independent ? "independent" : "sequential"; }

struct ModelConfig {
    ToyModelShape shape;
    std::uint64_t init_seed = 42;
    FitOptions fit;
};

struct GraphConfig {
    std::size_t embedding_dim = 16;
    NormRule norm_rule = NormRule::inverse_degree;
    bool hard_prune = false;
};

struct SweepConfig {
    std::string axis = "curvature";
    std::vector<double> values{0.5, 1.0, 2.0};
};

struct PathsConfig {
    std::string triples;
    std::string requests;
    std::string chains;
    std::string graph;
    std::string model;
    std::string edited_model;
    std::string updates;
    std::string out_dir = "out";
};

struct RunConfig {
    double curvature = 1.0;
    double tau = 0.5;
    double tau_g = 1e-3;
    GnnConfig gnn;
    GnnOptConfig gnn_opt;
    double kl_factor = 0.06875;
    std::string gamma_mode = "auto";  // auto | fixed
    double gamma_value = 1.0;
    double gamma_cap = 10.0;
    std::size_t max_cycles = 10;
    double target_nll_fraction = 0.5;
    UpdateRule update_rule = UpdateRule::mobius;
    UpdateLayout update_layout = UpdateLayout::row_wise;
    Protocol protocol = Protocol::independent;
    std::uint64_t seed = 1;
    ModelConfig model;
    GraphConfig graph;
    BenchmarkSpec benchmark;
    SweepConfig sweep;
    PathsConfig paths;

    /// Directory that relative paths are resolved against.
    std::filesystem::path base_dir = ".";

    std::filesystem::path resolve(const std::string& p) const {
        if (p.empty()) return {};
        const std::filesystem::path q(p);
        return q.is_absolute() ? q : base_dir / q;
    }
    std::filesystem::path out_dir() const { return resolve(paths.out_dir); }

    EditConfig edit_config() const {
        EditConfig e;
        e.curvature = Curvature(curvature);
        e.tau_g = tau_g;
        e.gamma = gamma_mode == "auto" ? GammaMode::autoscale(gamma_cap) : GammaMode::fixed(gamma_value);
        e.kl_factor = kl_factor;
        e.gnn = gnn_opt;
        e.gnn.dropout_seed = seed;
        e.max_cycles = max_cycles;
        e.rule = update_rule;
        e.layout = update_layout;
        e.target_nll_fraction = target_nll_fraction;
        return e;
    }

    GnnConfig gnn_config() const {
        GnnConfig g = gnn;
        g.seed = seed;
        return g;
    }

    GraphOptions graph_options() const {
        GraphOptions o;
        o.curvature = Curvature(curvature);
        o.tau = tau;
        o.norm_rule = graph.norm_rule;
        o.hard_prune = graph.hard_prune;
        return o;
    }

    void validate() const {
        if (!(curvature > 0.0) || !std::isfinite(curvature)) throw ConfigError("curvature must be finite and > 0");
        if (!std::isfinite(tau)) throw ConfigError("tau must be finite");
        if (gamma_mode != "auto" && gamma_mode != "fixed") throw ConfigError("gamma_mode must be 'auto' or 'fixed'");
        if (gnn.hidden_dim == 0 || gnn.rounds == 0) throw ConfigError("gnn.hidden_dim and gnn.rounds must be >= 1");
        if (graph.embedding_dim < 2) throw ConfigError("graph.embedding_dim must be >= 2");
        if (sweep.axis != "curvature" && sweep.axis != "tau") throw ConfigError("sweep.axis must be 'curvature' or 'tau'");
        if (sweep.values.empty()) throw ConfigError("sweep.values must not be empty");
        edit_config().validate();
    }
};

namespace detail {

/// Reads fields from one JSON object and remembers which keys were consumed.
class ConfigReader {
public:
    ConfigReader(const nlohmann::json& j, std::string where) : j_(j), where_(std::move(where)) {
        if (!j_.is_object()) throw ConfigError(where_ + " must be an object");
    }

    template <typename T>
    void get(const char* key, T& out) {
        seen_.insert(key);
        if (!j_.contains(key)) return;
        try {
            out = j_.at(key).get<T>();
        } catch (const nlohmann::json::exception&) {
            throw ConfigError(name(key) + " has the wrong type");
        }
    }

    template <typename F>
    void object(const char* key, F read) {
        seen_.insert(key);
        if (!j_.contains(key)) return;
        ConfigReader sub(j_.at(key), name(key));
        read(sub);
        sub.finish();
    }

    void finish() const {
        for (auto it = j_.begin(); it != j_.end(); ++it)
            if (!seen_.count(it.key())) throw ConfigError("unknown config key '" + name(it.key().c_str()) + "'");
    }

private:
    std::string name(const char* key) const { return where_.empty() ? key : where_ + "." + key; }

    const nlohmann::json& j_;
    std::string where_;
    std::set<std::string> seen_;
};

inline UpdateRule update_rule_from_string(const std::string& s) {
    if (s == "mobius") return UpdateRule::mobius;
    if (s == "euclidean") return UpdateRule::euclidean;
    throw ConfigError("unknown update_rule '" + s + "'");
}
inline UpdateLayout update_layout_from_string(const std::string& s) {
    if (s == "row_wise") return UpdateLayout::row_wise;
    if (s == "flat") return UpdateLayout::flat;
    throw ConfigError("unknown update_layout '" + s + "'");
}
inline Protocol protocol_from_string(const std::string& s) {
    if (s == "independent") return Protocol::independent;
    if (s == "sequential") return Protocol::sequential;
    throw ConfigError("unknown protocol '" + s + "'");
}

}  // namespace detail

inline RunConfig config_from_json(const nlohmann::json& j) {
    RunConfig c;
    detail::ConfigReader r(j, "");
    std::string rule = to_string(c.update_rule), layout = to_string(c.update_layout), protocol = to_string(c.protocol);
    r.get("curvature", c.curvature);
    r.get("tau", c.tau);
    r.get("tau_g", c.tau_g);
    r.object("gnn", [&](detail::ConfigReader& g) {
        g.get("steps", c.gnn_opt.steps);
        g.get("lr", c.gnn_opt.lr);
        g.get("weight_decay", c.gnn_opt.weight_decay);
        g.get("dropout_attn", c.gnn_opt.dropout_attn);
        g.get("dropout_feat", c.gnn_opt.dropout_feat);
        g.get("hidden_dim", c.gnn.hidden_dim);
        g.get("rounds", c.gnn.rounds);
        g.get("head_init_scale", c.gnn.head_init_scale);
    });
    r.get("kl_factor", c.kl_factor);
    r.get("early_stop_loss", c.gnn_opt.early_stop_loss);
    r.get("gamma_mode", c.gamma_mode);
    r.get("gamma_value", c.gamma_value);
    r.get("gamma_cap", c.gamma_cap);
    r.get("max_cycles", c.max_cycles);
    r.get("target_nll_fraction", c.target_nll_fraction);
    r.get("update_rule", rule);
    r.get("update_layout", layout);
    r.get("protocol", protocol);
    r.get("seed", c.seed);
    r.object("model", [&](detail::ConfigReader& m) {
        m.get("rows", c.model.shape.rows);
        m.get("key_dim", c.model.shape.key_dim);
        m.get("embed_dim", c.model.shape.embed_dim);
        m.get("key_gain", c.model.shape.key_gain);
        m.get("relation_weight", c.model.shape.relation_weight);
        m.get("init_seed", c.model.init_seed);
        m.get("ridge", c.model.fit.ridge);
        m.get("temperature", c.model.fit.temperature);
        m.get("row_norm_fraction", c.model.fit.row_norm_fraction);
    });
    std::string norm_rule = to_string(c.graph.norm_rule);
    r.object("graph", [&](detail::ConfigReader& g) {
        g.get("embedding_dim", c.graph.embedding_dim);
        g.get("norm_rule", norm_rule);
        g.get("hard_prune", c.graph.hard_prune);
    });
    r.object("benchmark", [&](detail::ConfigReader& b) {
        b.get("clusters", c.benchmark.clusters);
        b.get("entities_per_cluster", c.benchmark.entities_per_cluster);
        b.get("hubs_per_cluster", c.benchmark.hubs_per_cluster);
        b.get("relations", c.benchmark.relations);
        b.get("facts_per_entity", c.benchmark.facts_per_entity);
        b.get("requests", c.benchmark.requests);
        b.get("control_clusters", c.benchmark.control_clusters);
        b.get("max_neighbors", c.benchmark.max_neighbors);
        b.get("max_hops", c.benchmark.max_hops);
        b.get("seed", c.benchmark.seed);
    });
    r.object("sweep", [&](detail::ConfigReader& s) {
        s.get("axis", c.sweep.axis);
        s.get("values", c.sweep.values);
    });
    r.object("paths", [&](detail::ConfigReader& p) {
        p.get("triples", c.paths.triples);
        p.get("requests", c.paths.requests);
        p.get("chains", c.paths.chains);
        p.get("graph", c.paths.graph);
        p.get("model", c.paths.model);
        p.get("edited_model", c.paths.edited_model);
        p.get("updates", c.paths.updates);
        p.get("out_dir", c.paths.out_dir);
    });
    r.finish();
    c.update_rule = detail::update_rule_from_string(rule);
    c.update_layout = detail::update_layout_from_string(layout);
    c.protocol = detail::protocol_from_string(protocol);
    c.graph.norm_rule = norm_rule_from_string(norm_rule);
    c.validate();
    return c;
}

/// The fully resolved configuration, keys in a fixed order.
inline nlohmann::ordered_json config_to_json(const RunConfig& c) {
    nlohmann::ordered_json j;
    j["curvature"] = c.curvature;
    j["tau"] = c.tau;
    j["tau_g"] = c.tau_g;
    j["gnn"] = {{"steps", c.gnn_opt.steps},
                {"lr", c.gnn_opt.lr},
                {"weight_decay", c.gnn_opt.weight_decay},
                {"dropout_attn", c.gnn_opt.dropout_attn},
                {"dropout_feat", c.gnn_opt.dropout_feat},
                {"hidden_dim", c.gnn.hidden_dim},
                {"rounds", c.gnn.rounds},
                {"head_init_scale", c.gnn.head_init_scale}};
    j["kl_factor"] = c.kl_factor;
    j["early_stop_loss"] = c.gnn_opt.early_stop_loss;
    j["gamma_mode"] = c.gamma_mode;
    j["gamma_value"] = c.gamma_value;
    j["gamma_cap"] = c.gamma_cap;
    j["max_cycles"] = c.max_cycles;
    j["target_nll_fraction"] = c.target_nll_fraction;
    j["update_rule"] = to_string(c.update_rule);
    j["update_layout"] = to_string(c.update_layout);
    j["protocol"] = to_string(c.protocol);
    j["seed"] = c.seed;
    j["model"] = {{"rows", c.model.shape.rows},
                  {"key_dim", c.model.shape.key_dim},
                  {"embed_dim", c.model.shape.embed_dim},
                  {"key_gain", c.model.shape.key_gain},
                  {"relation_weight", c.model.shape.relation_weight},
                  {"init_seed", c.model.init_seed},
                  {"ridge", c.model.fit.ridge},
                  {"temperature", c.model.fit.temperature},
                  {"row_norm_fraction", c.model.fit.row_norm_fraction}};
    j["graph"] = {{"embedding_dim", c.graph.embedding_dim},
                  {"norm_rule", to_string(c.graph.norm_rule)},
                  {"hard_prune", c.graph.hard_prune}};
    j["benchmark"] = {{"clusters", c.benchmark.clusters},
                      {"entities_per_cluster", c.benchmark.entities_per_cluster},
                      {"hubs_per_cluster", c.benchmark.hubs_per_cluster},
                      {"relations", c.benchmark.relations},
                      {"facts_per_entity", c.benchmark.facts_per_entity},
                      {"requests", c.benchmark.requests},
                      {"control_clusters", c.benchmark.control_clusters},
                      {"max_neighbors", c.benchmark.max_neighbors},
                      {"max_hops", c.benchmark.max_hops},
                      {"seed", c.benchmark.seed}};
    j["sweep"] = {{"axis", c.sweep.axis}, {"values", c.sweep.values}};
    j["paths"] = {{"triples", c.paths.triples},
                  {"requests", c.paths.requests},
                  {"chains", c.paths.chains},
                  {"graph", c.paths.graph},
                  {"model", c.paths.model},
                  {"edited_model", c.paths.edited_model},
                  {"updates", c.paths.updates},
                  {"out_dir", c.paths.out_dir}};
    return j;
}

/// Loads a config file; relative paths inside it resolve against its directory.
inline RunConfig load_config(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open config " + path.string());
    nlohmann::json j;
    try {
        j = nlohmann::json::parse(in);
    } catch (const nlohmann::json::parse_error& e) {
        throw ConfigError(std::string("config: ") + e.what());
    }
    RunConfig c = config_from_json(j);
    c.base_dir = path.has_parent_path() ? path.parent_path() : std::filesystem::path(".");
    return c;
}

}  // namespace hype
