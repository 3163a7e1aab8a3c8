#pragma once

// Synthetic clustered knowledge base used for the desk-scale experiments.
//
// Entities are split into clusters of equal size. In every cluster the first
// few entities are hubs; each relation prefers two hubs as objects, so leaves
// share (relation, object) pairs and every request has neighborhood prompts.
// Hubs point at other hubs, which gives every entity outgoing facts and
// makes multi-hop chains available by construction. No fact crosses a
// cluster, so clusters without edits form a graph-disconnected control set.

#include <algorithm>
#include <array>
#include <cstdint>
#include <map>
#include <random>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "hype/errors.hpp"
#include "hype/kg_builder.hpp"
#include "hype/request.hpp"

namespace hype {

struct BenchmarkSpec {
    std::size_t clusters = 8;
    std::size_t entities_per_cluster = 25;
    std::size_t hubs_per_cluster = 5;
    std::size_t relations = 8;
    std::size_t facts_per_entity = 2;
    std::size_t requests = 50;
    /// Clusters reserved as untouched controls (the last ones).
    std::size_t control_clusters = 2;
    std::size_t max_neighbors = 2;
    std::size_t max_hops = 4;
    std::uint64_t seed = 42;
};

struct Benchmark {
    std::vector<Triple> triples;
    std::vector<EditRequest> requests;
    std::vector<HopChain> chains;
};

inline std::string bench_entity(std::size_t cluster, std::size_t i) {
    std::ostringstream os;
    os << "ent" << cluster << "_" << (i < 10 ? "0" : "") << i;
    return os.str();
}

inline std::string bench_relation(std::size_t r) { return "P" + std::to_string(r + 1); }

/// Applies edits in order to a (subject, relation) -> object table.
inline std::map<std::pair<std::string, std::string>, std::string> fact_table(const std::vector<Triple>& triples,
                                                                             const std::vector<EditRequest>& edits = {}) {
    std::map<std::pair<std::string, std::string>, std::string> t;
    for (const auto& f : triples) t[{f.subject, f.relation}] = f.object;
    for (const auto& e : edits) t[{e.subject, e.relation}] = e.target_new.str;
    return t;
}

inline std::vector<Triple> generate_triples(const BenchmarkSpec& spec) {
    if (spec.hubs_per_cluster < 3 || spec.entities_per_cluster <= spec.hubs_per_cluster)
        throw InvalidArgument("benchmark: need at least 3 hubs and some leaves per cluster");
    if (spec.relations < spec.facts_per_entity) throw InvalidArgument("benchmark: not enough relations");
    std::mt19937_64 rng(spec.seed);
    std::vector<std::size_t> rel_ids(spec.relations);
    for (std::size_t r = 0; r < spec.relations; ++r) rel_ids[r] = r;

    std::vector<Triple> out;
    for (std::size_t c = 0; c < spec.clusters; ++c) {
        // two preferred hub objects per relation
        std::vector<std::array<std::size_t, 2>> preferred(spec.relations);
        for (auto& p : preferred) {
            std::vector<std::size_t> hubs(spec.hubs_per_cluster);
            for (std::size_t h = 0; h < hubs.size(); ++h) hubs[h] = h;
            std::shuffle(hubs.begin(), hubs.end(), rng);
            p = {hubs[0], hubs[1]};
        }
        for (std::size_t i = 0; i < spec.entities_per_cluster; ++i) {
            std::shuffle(rel_ids.begin(), rel_ids.end(), rng);
            const bool hub = i < spec.hubs_per_cluster;
            for (std::size_t f = 0; f < spec.facts_per_entity; ++f) {
                const std::size_t r = rel_ids[f];
                std::size_t obj;
                if (hub) {
                    std::uniform_int_distribution<std::size_t> pick(0, spec.hubs_per_cluster - 2);
                    obj = pick(rng);
                    if (obj >= i) ++obj;
                } else {
                    obj = preferred[r][std::uniform_int_distribution<int>(0, 1)(rng)];
                }
                out.push_back({bench_entity(c, i), bench_relation(r), bench_entity(c, obj)});
            }
        }
    }
    return out;
}

inline std::size_t cluster_of(const std::string& entity) {
    const auto us = entity.find('_');
    return static_cast<std::size_t>(std::stoul(entity.substr(3, us - 3)));
}

/// Builds `spec.requests` counterfactual rewrites over leaf facts of the
/// non-control clusters. Each subject is edited once and never appears as
/// another request's neighbor. With `allow_reuse` the subject constraints are
/// dropped and the candidate list is cycled, which supports long edit streams.
inline std::vector<EditRequest> generate_requests(const std::vector<Triple>& triples, const BenchmarkSpec& spec,
                                                  bool allow_reuse = false) {
    std::mt19937_64 rng(spec.seed + 1);
    const std::size_t editable_clusters = spec.clusters - std::min(spec.control_clusters, spec.clusters);
    auto is_hub = [&](const std::string& e) {
        return std::stoul(e.substr(e.find('_') + 1)) < spec.hubs_per_cluster;
    };
    std::vector<std::size_t> candidates;
    for (std::size_t i = 0; i < triples.size(); ++i)
        if (!is_hub(triples[i].subject) && cluster_of(triples[i].subject) < editable_clusters) candidates.push_back(i);
    std::shuffle(candidates.begin(), candidates.end(), rng);

    std::set<std::string> subjects, reserved;
    std::vector<EditRequest> out;
    for (std::size_t pass = 0; out.size() < spec.requests; ++pass) {
        if (pass > 0 && !allow_reuse) break;
        const std::size_t before = out.size();
        for (std::size_t ci : candidates) {
            if (out.size() >= spec.requests) break;
            const Triple& f = triples[ci];
            if (!allow_reuse && (subjects.count(f.subject) || reserved.count(f.subject))) continue;
            std::vector<Prompt> neighbors;
            for (const auto& g : triples) {
                if (g.subject == f.subject || g.relation != f.relation || g.object != f.object) continue;
                if (!allow_reuse && subjects.count(g.subject)) continue;
                if (neighbors.size() < spec.max_neighbors) neighbors.push_back({g.subject, g.relation});
            }
            if (neighbors.empty()) continue;
            // counterfactual object: another hub of the same cluster
            const std::size_t c = cluster_of(f.subject);
            std::vector<std::string> options;
            for (std::size_t h = 0; h < spec.hubs_per_cluster; ++h)
                if (bench_entity(c, h) != f.object) options.push_back(bench_entity(c, h));
            const std::string target_new = options[std::uniform_int_distribution<std::size_t>(0, options.size() - 1)(rng)];

            EditRequest r;
            r.case_id = static_cast<long>(out.size());
            r.subject = f.subject;
            r.relation = f.relation;
            r.prompt_template = "{} " + f.relation;
            r.target_new = {target_new, ""};
            r.target_true = {f.object, ""};
            r.rewrite_prompts = {{f.subject, f.relation}};
            r.paraphrase_prompts = {{f.subject, f.relation + "~para1"}, {f.subject, f.relation + "~para2"}};
            r.portability_prompts = {{f.subject, f.relation + "~port"}};
            r.neighborhood_prompts = neighbors;
            subjects.insert(f.subject);
            for (const auto& n : neighbors) reserved.insert(n.subject);
            out.push_back(std::move(r));
        }
        if (out.size() == before) break;
    }
    if (out.size() < spec.requests)
        throw InvalidArgument("benchmark: only " + std::to_string(out.size()) + " requests could be generated");
    return out;
}

/// Fills external ids from a vocabulary built over the same triples.
inline void assign_external_ids(std::vector<EditRequest>& requests, const Vocab& vocab) {
    for (auto& r : requests) {
        r.target_new.id = vocab.at(r.target_new.str).external_id;
        r.target_true.id = vocab.at(r.target_true.str).external_id;
    }
}

/// For every request: chains of 2..max_hops hops that start with the edited
/// fact and continue through the (post-edit) fact table.
inline std::vector<HopChain> generate_chains(const std::vector<Triple>& triples, const std::vector<EditRequest>& requests,
                                             const BenchmarkSpec& spec) {
    const auto table = fact_table(triples, requests);
    std::map<std::string, std::vector<std::string>> outgoing;  // subject -> relations in file order
    for (const auto& f : triples) outgoing[f.subject].push_back(f.relation);
    std::vector<HopChain> out;
    for (const auto& r : requests) {
        for (std::size_t hops = 2; hops <= spec.max_hops; ++hops) {
            HopChain ch{r.case_id, r.subject, {r.relation}, ""};
            std::string cur = table.at({r.subject, r.relation});
            bool ok = true;
            while (ch.relations.size() < hops) {
                const auto it = outgoing.find(cur);
                if (it == outgoing.end() || it->second.empty()) {
                    ok = false;
                    break;
                }
                const std::string rel = it->second[(ch.relations.size() + static_cast<std::size_t>(r.case_id)) % it->second.size()];
                ch.relations.push_back(rel);
                cur = table.at({cur, rel});
            }
            if (!ok) continue;
            ch.answer = cur;
            out.push_back(std::move(ch));
        }
    }
    return out;
}

inline Benchmark generate_benchmark(const BenchmarkSpec& spec = {}) {
    Benchmark b;
    b.triples = generate_triples(spec);
    b.requests = generate_requests(b.triples, spec);
    assign_external_ids(b.requests, vocab_from_triples(b.triples));
    b.chains = generate_chains(b.triples, b.requests, spec);
    return b;
}

}  // namespace hype
