#pragma once

// Knowledge-graph construction: triples -> seeded Euclidean embeddings ->
// Poincaré-ball node/edge features, degree normalizers, relation gates.

#include <algorithm>
#include <array>
#include <cstdint>
#include <istream>
#include <optional>
#include <random>
#include <sstream>
#include <string>
#include <unordered_map>
#include <vector>

#include "json.hpp"

#include "hype/errors.hpp"
#include "hype/hyperbolic.hpp"
#include "hype/tensor.hpp"

namespace hype {

struct Triple {
    std::string subject;
    std::string relation;
    std::string object;

    bool operator==(const Triple&) const = default;
};

enum class TripleFormat { tsv, jsonl };

/// Parses one triple per line. Blank lines are skipped; anything else that does
/// not yield three non-empty fields raises ParseError with the 1-based line.
inline std::vector<Triple> ingest_triples(std::istream& in, TripleFormat format) {
    std::vector<Triple> out;
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        if (!line.empty() && line.back() == '\r') line.pop_back();
        if (line.find_first_not_of(" \t") == std::string::npos) continue;
        Triple t;
        if (format == TripleFormat::tsv) {
            std::vector<std::string> cols;
            std::size_t start = 0;
            while (true) {
                const auto tab = line.find('\t', start);
                cols.push_back(line.substr(start, tab == std::string::npos ? std::string::npos : tab - start));
                if (tab == std::string::npos) break;
                start = tab + 1;
            }
            if (cols.size() != 3)
                throw ParseError(lineno, "expected 3 tab-separated columns, found " + std::to_string(cols.size()));
            t = Triple{cols[0], cols[1], cols[2]};
        } else {
            nlohmann::json j;
            try {
                j = nlohmann::json::parse(line);
            } catch (const nlohmann::json::parse_error& e) {
                throw ParseError(lineno, std::string("invalid JSON: ") + e.what());
            }
            if (!j.is_object()) throw ParseError(lineno, "expected a JSON object");
            for (const char* key : {"subject", "relation", "object"})
                if (!j.contains(key) || !j[key].is_string()) throw ParseError(lineno, std::string("missing string field '") + key + "'");
            t = Triple{j["subject"].get<std::string>(), j["relation"].get<std::string>(), j["object"].get<std::string>()};
        }
        if (t.subject.empty() || t.relation.empty() || t.object.empty()) throw ParseError(lineno, "empty field");
        out.push_back(std::move(t));
    }
    return out;
}

/// Insertion-ordered string -> vector table.
struct EmbeddingTable {
    std::vector<std::string> keys;
    std::vector<Vector> vectors;
    std::unordered_map<std::string, std::size_t> index;

    void insert(const std::string& key, Vector v) {
        index.emplace(key, keys.size());
        keys.push_back(key);
        vectors.push_back(std::move(v));
    }
    bool contains(const std::string& key) const { return index.count(key) != 0; }
    const Vector& at(const std::string& key) const {
        const auto it = index.find(key);
        if (it == index.end()) throw KeyError(key);
        return vectors[it->second];
    }
    std::size_t size() const noexcept { return keys.size(); }
    bool operator==(const EmbeddingTable& o) const { return keys == o.keys && vectors == o.vectors; }
};

struct SeedEmbeddings {
    EmbeddingTable entities;
    EmbeddingTable relations;
};

/// Entities in first-appearance order (subject before object), then relations.
inline std::vector<std::string> unique_entities(const std::vector<Triple>& triples) {
    std::vector<std::string> out;
    std::unordered_map<std::string, bool> seen;
    for (const auto& t : triples)
        for (const auto* e : {&t.subject, &t.object})
            if (seen.emplace(*e, true).second) out.push_back(*e);
    return out;
}

inline std::vector<std::string> unique_relations(const std::vector<Triple>& triples) {
    std::vector<std::string> out;
    std::unordered_map<std::string, bool> seen;
    for (const auto& t : triples)
        if (seen.emplace(t.relation, true).second) out.push_back(t.relation);
    return out;
}

/// Deterministic Gaussian seeds. Entries are N(0, s^2) with s = 0.5 / (sqrt(c) sqrt(dim)),
/// so the expected squared norm is 0.25 / c.
inline SeedEmbeddings seed_embeddings(const std::vector<Triple>& triples, std::size_t dim, std::uint64_t seed,
                                      const Curvature& c = Curvature(1.0)) {
    if (dim < 2) throw InvalidArgument("seed_embeddings: dim must be >= 2");
    std::mt19937_64 rng(seed);
    std::normal_distribution<double> normal(0.0, 0.5 / (c.sqrt_c() * std::sqrt(static_cast<double>(dim))));
    SeedEmbeddings out;
    auto draw = [&] {
        Vector v(dim);
        for (auto& x : v) x = normal(rng);
        return v;
    };
    for (const auto& e : unique_entities(triples)) out.entities.insert(e, draw());
    for (const auto& r : unique_relations(triples)) out.relations.insert(r, draw());
    return out;
}

enum class NormRule { inverse_degree, inverse_sqrt_degree };

inline const char* to_string(NormRule r) {
    return r == NormRule::inverse_degree ? "inverse_degree" : "inverse_sqrt_degree";
}
inline NormRule norm_rule_from_string(const std::string& s) {
    if (s == "inverse_degree") return NormRule::inverse_degree;
    if (s == "inverse_sqrt_degree") return NormRule::inverse_sqrt_degree;
    throw ConfigError("unknown norm_rule '" + s + "'");
}

struct GraphOptions {
    Curvature curvature{1.0};
    double tau = 0.5;
    NormRule norm_rule = NormRule::inverse_degree;
    /// Drop non-self-loop edges whose relation gate is below 0.5.
    bool hard_prune = false;
};

struct GraphNode {
    std::string entity;
    BallPoint feature;
    std::size_t in_degree = 0;  // including the self-loop
    double degree_norm = 1.0;
};

struct GraphEdge {
    std::size_t source = 0;
    std::size_t target = 0;
    std::size_t relation_type = 0;
    bool self_loop = false;
};

struct RelationEntry {
    std::string relation;
    Vector euclidean;
    BallPoint hyperbolic;
    double gate = 0.5;
};

struct HyperbolicGraph {
    GraphOptions options;
    std::vector<GraphNode> nodes;
    /// Types 0..m-1 are the triple relations; type m is the reserved self-loop type.
    std::vector<RelationEntry> relations;
    std::vector<GraphEdge> edges;
    std::unordered_map<std::string, std::size_t> node_index;
    std::unordered_map<std::string, std::size_t> relation_index;

    std::size_t self_loop_type() const noexcept { return relations.size() - 1; }
    std::size_t relation_count() const noexcept { return relations.size() - 1; }
    const Curvature& curvature() const noexcept { return options.curvature; }
    std::size_t feature_dim() const { return nodes.empty() ? 0 : nodes.front().feature.dim(); }

    std::size_t node(const std::string& entity) const {
        const auto it = node_index.find(entity);
        if (it == node_index.end()) throw KeyError(entity);
        return it->second;
    }
    std::size_t relation_type(const std::string& relation) const {
        const auto it = relation_index.find(relation);
        if (it == relation_index.end()) throw KeyError(relation);
        return it->second;
    }
    const BallPoint& edge_feature(const GraphEdge& e) const { return relations[e.relation_type].hyperbolic; }
    double gate(std::size_t relation_type) const { return relations.at(relation_type).gate; }
};

inline double degree_normalizer(std::size_t in_degree, NormRule rule) {
    const double d = static_cast<double>(in_degree);
    return rule == NormRule::inverse_degree ? 1.0 / d : 1.0 / std::sqrt(d);
}

/// Recomputes in-degrees and normalizers from the current edge list.
inline void recompute_degrees(HyperbolicGraph& g) {
    for (auto& n : g.nodes) n.in_degree = 0;
    for (const auto& e : g.edges) ++g.nodes[e.target].in_degree;
    for (auto& n : g.nodes) n.degree_norm = degree_normalizer(std::max<std::size_t>(n.in_degree, 1), g.options.norm_rule);
}

inline HyperbolicGraph build_graph(const std::vector<Triple>& triples, const SeedEmbeddings& seeds,
                                   const GraphOptions& options) {
    HyperbolicGraph g;
    g.options = options;
    const Curvature& c = options.curvature;

    for (const auto& entity : unique_entities(triples)) {
        const Vector& euc = seeds.entities.at(entity);
        g.node_index.emplace(entity, g.nodes.size());
        g.nodes.push_back(GraphNode{entity, BallPoint::from_tangent(euc, c), 0, 1.0});
    }
    std::size_t dim = 0;
    for (const auto& relation : unique_relations(triples)) {
        const Vector& euc = seeds.relations.at(relation);
        dim = euc.size();
        RelationEntry r{relation, euc, BallPoint::from_tangent(euc, c), 0.0};
        r.gate = persistence_gate(r.hyperbolic.coords(), options.tau);
        g.relation_index.emplace(relation, g.relations.size());
        g.relations.push_back(std::move(r));
    }
    if (dim == 0 && !g.nodes.empty()) dim = g.nodes.front().feature.dim();
    // reserved self-loop type: edge embedding starts at the origin
    {
        RelationEntry self{"<self>", Vector(dim, 0.0), BallPoint::origin(dim, c), 0.0};
        self.gate = persistence_gate(self.hyperbolic.coords(), options.tau);
        g.relations.push_back(std::move(self));
    }

    for (const auto& t : triples) {
        const std::size_t rt = g.relation_type(t.relation);
        if (options.hard_prune && g.relations[rt].gate < 0.5) continue;
        g.edges.push_back(GraphEdge{g.node(t.subject), g.node(t.object), rt, false});
    }
    for (std::size_t i = 0; i < g.nodes.size(); ++i) g.edges.push_back(GraphEdge{i, i, g.self_loop_type(), true});
    recompute_degrees(g);
    return g;
}

// ------------------------------------------------------------------ diagnostics

inline nlohmann::json graph_options_json(const GraphOptions& o) {
    return {{"curvature", o.curvature.value()},
            {"tau", o.tau},
            {"norm_rule", to_string(o.norm_rule)},
            {"hard_prune", o.hard_prune}};
}

inline nlohmann::json graph_summary(const HyperbolicGraph& g) {
    std::array<int, 10> hist{};
    for (std::size_t r = 0; r < g.relation_count(); ++r) {
        const auto bin = std::min<std::size_t>(9, static_cast<std::size_t>(g.relations[r].gate * 10.0));
        ++hist[bin];
    }
    std::size_t triple_edges = 0;
    for (const auto& e : g.edges) triple_edges += e.self_loop ? 0 : 1;
    return {{"nodes", g.nodes.size()},
            {"edges", g.edges.size()},
            {"triple_edges", triple_edges},
            {"self_loops", g.edges.size() - triple_edges},
            {"relation_types", g.relations.size()},
            {"gate_histogram", hist}};
}

/// Full dump: nodes, relations with gates, edges, config echo. Keys are sorted.
inline nlohmann::json graph_to_json(const HyperbolicGraph& g) {
    nlohmann::json nodes = nlohmann::json::array();
    for (const auto& n : g.nodes)
        nodes.push_back({{"entity", n.entity},
                         {"feature", n.feature.coords()},
                         {"in_degree", n.in_degree},
                         {"degree_norm", n.degree_norm}});
    nlohmann::json rels = nlohmann::json::array();
    for (std::size_t i = 0; i < g.relations.size(); ++i) {
        const auto& r = g.relations[i];
        rels.push_back({{"type", i},
                        {"relation", r.relation},
                        {"euclidean", r.euclidean},
                        {"hyperbolic", r.hyperbolic.coords()},
                        {"gate", r.gate}});
    }
    nlohmann::json edges = nlohmann::json::array();
    for (const auto& e : g.edges)
        edges.push_back({{"source", e.source}, {"target", e.target}, {"relation_type", e.relation_type}, {"self_loop", e.self_loop}});
    nlohmann::json gates = nlohmann::json::array();
    for (const auto& r : g.relations) gates.push_back(r.gate);
    return {{"config", graph_options_json(g.options)},
            {"nodes", std::move(nodes)},
            {"relations", std::move(rels)},
            {"edges", std::move(edges)},
            {"gates", std::move(gates)},
            {"summary", graph_summary(g)}};
}

inline HyperbolicGraph graph_from_json(const nlohmann::json& j) {
    HyperbolicGraph g;
    const auto& cfg = j.at("config");
    g.options.curvature = Curvature(cfg.at("curvature").get<double>());
    g.options.tau = cfg.at("tau").get<double>();
    g.options.norm_rule = norm_rule_from_string(cfg.at("norm_rule").get<std::string>());
    g.options.hard_prune = cfg.at("hard_prune").get<bool>();
    const Curvature& c = g.options.curvature;
    for (const auto& n : j.at("nodes")) {
        GraphNode node{n.at("entity").get<std::string>(), BallPoint::checked(n.at("feature").get<Vector>(), c),
                       n.at("in_degree").get<std::size_t>(), n.at("degree_norm").get<double>()};
        g.node_index.emplace(node.entity, g.nodes.size());
        g.nodes.push_back(std::move(node));
    }
    for (const auto& r : j.at("relations")) {
        RelationEntry e{r.at("relation").get<std::string>(), r.at("euclidean").get<Vector>(),
                        BallPoint::checked(r.at("hyperbolic").get<Vector>(), c), r.at("gate").get<double>()};
        g.relation_index.emplace(e.relation, g.relations.size());
        g.relations.push_back(std::move(e));
    }
    g.relation_index.erase("<self>");
    for (const auto& e : j.at("edges"))
        g.edges.push_back(GraphEdge{e.at("source").get<std::size_t>(), e.at("target").get<std::size_t>(),
                                    e.at("relation_type").get<std::size_t>(), e.at("self_loop").get<bool>()});
    return g;
}

/// Connected components of the undirected triple graph (self-loops ignored).
inline std::vector<std::size_t> connected_components(const HyperbolicGraph& g) {
    std::vector<std::size_t> parent(g.nodes.size());
    for (std::size_t i = 0; i < parent.size(); ++i) parent[i] = i;
    auto find = [&](std::size_t x) {
        while (parent[x] != x) x = parent[x] = parent[parent[x]];
        return x;
    };
    for (const auto& e : g.edges)
        if (!e.self_loop) parent[find(e.source)] = find(e.target);
    std::vector<std::size_t> comp(g.nodes.size());
    for (std::size_t i = 0; i < comp.size(); ++i) comp[i] = find(i);
    return comp;
}

}  // namespace hype
