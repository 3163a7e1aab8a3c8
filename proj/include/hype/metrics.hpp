#pragma once

// Edit-quality metrics. Every comparison is made on negative log-likelihoods
// and is strict: a tie counts as a failure for both edit and retain checks.
// Rates are fractions in [0, 1]; per-case rates are averaged over the case's
// prompts first and then over cases.

#include <algorithm>
#include <cmath>
#include <map>
#include <numeric>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "json.hpp"

#include "hype/benchmark.hpp"
#include "hype/errors.hpp"
#include "hype/request.hpp"
#include "hype/toy_model.hpp"

namespace hype {

struct NllPair {
    double target_new = 0.0;
    double target_true = 0.0;
    bool operator==(const NllPair&) const = default;
};

inline bool edit_success(const NllPair& p) { return p.target_new < p.target_true; }
inline bool retain_success(const NllPair& p) { return p.target_true < p.target_new; }

inline std::vector<NllPair> nll_pairs(const ToyModel& model, const std::vector<Prompt>& prompts, std::size_t new_token,
                                      std::size_t true_token) {
    std::vector<NllPair> out;
    out.reserve(prompts.size());
    for (const auto& p : prompts) out.push_back({model.nll(p, new_token), model.nll(p, true_token)});
    return out;
}

/// Fraction of pairs passing `ok`, or nothing for an empty set.
template <typename Pred>
std::optional<double> pair_rate(const std::vector<NllPair>& pairs, Pred ok) {
    if (pairs.empty()) return std::nullopt;
    std::size_t k = 0;
    for (const auto& p : pairs) k += ok(p) ? 1 : 0;
    return static_cast<double>(k) / static_cast<double>(pairs.size());
}

// ------------------------------------------------------------ listing format

/// One per-case report in the wire format shared with the published listings.
struct CaseListing {
    long case_id = 0;
    std::vector<long> grouped_case_ids;
    long num_edits = 1;
    std::string prompt;
    std::string relation_id;
    TargetToken target_new;
    TargetToken target_true;
    std::string subject;
    double time = 0.0;
    std::vector<NllPair> rewrite;
    std::vector<NllPair> paraphrase;
    std::vector<NllPair> neighborhood;

    bool operator==(const CaseListing&) const = default;
};

namespace detail {

inline nlohmann::ordered_json pairs_json(const std::vector<NllPair>& ps) {
    nlohmann::ordered_json a = nlohmann::ordered_json::array();
    for (const auto& p : ps) a.push_back({{"target_new", p.target_new}, {"target_true", p.target_true}});
    return a;
}

template <typename Json>
void require_keys(const Json& j, std::initializer_list<const char*> keys, long case_id, const std::string& where) {
    if (!j.is_object()) throw SchemaError(case_id, where + " must be an object");
    std::set<std::string> want(keys.begin(), keys.end());
    for (const auto& k : want)
        if (!j.contains(k)) throw SchemaError(case_id, where + " is missing '" + k + "'");
    for (auto it = j.begin(); it != j.end(); ++it)
        if (!want.count(it.key())) throw SchemaError(case_id, where + " has unexpected key '" + it.key() + "'");
}

template <typename Json>
void require_probs(const Json& a, long case_id, const std::string& where, bool non_empty) {
    if (!a.is_array()) throw SchemaError(case_id, where + " must be an array");
    if (non_empty && a.empty()) throw SchemaError(case_id, where + " must not be empty");
    for (std::size_t i = 0; i < a.size(); ++i) {
        const std::string w = where + "[" + std::to_string(i) + "]";
        require_keys(a[i], {"target_new", "target_true"}, case_id, w);
        for (const char* k : {"target_new", "target_true"}) {
            const auto& x = a[i][k];
            if (!x.is_number()) throw SchemaError(case_id, w + "." + k + " must be a number");
            const double v = x.template get<double>();
            if (!std::isfinite(v) || v < 0.0) throw SchemaError(case_id, w + "." + k + " must be a finite nll >= 0");
        }
    }
}

template <typename Json>
void require_string(const Json& j, const char* key, long case_id, const std::string& where) {
    if (!j[key].is_string()) throw SchemaError(case_id, where + "." + key + " must be a string");
}

template <typename Json>
void require_target(const Json& j, long case_id, const std::string& where) {
    require_keys(j, {"str", "id"}, case_id, where);
    require_string(j, "str", case_id, where);
    require_string(j, "id", case_id, where);
}

template <typename Json>
std::vector<NllPair> pairs_from(const Json& a) {
    std::vector<NllPair> out;
    for (const auto& p : a) out.push_back({p["target_new"].template get<double>(), p["target_true"].template get<double>()});
    return out;
}

}  // namespace detail

/// Throws SchemaError naming the case when `j` does not have exactly the
/// listing fields, nesting and numeric types.
template <typename Json>
void validate_listing(const Json& j) {
    long id = -1;
    if (j.is_object() && j.contains("case_id") && j["case_id"].is_number_integer()) id = j["case_id"].template get<long>();
    detail::require_keys(j, {"case_id", "grouped_case_ids", "num_edits", "requested_rewrite", "time", "post"}, id, "report");
    if (!j["case_id"].is_number_integer()) throw SchemaError(id, "case_id must be an integer");
    const auto& g = j["grouped_case_ids"];
    if (!g.is_array() || g.empty()) throw SchemaError(id, "grouped_case_ids must be a non-empty array");
    bool self = false;
    for (const auto& x : g) {
        if (!x.is_number_integer()) throw SchemaError(id, "grouped_case_ids must hold integers");
        self = self || x.template get<long>() == id;
    }
    if (!self) throw SchemaError(id, "grouped_case_ids does not contain case_id");
    if (!j["num_edits"].is_number_integer() || j["num_edits"].template get<long>() < 1)
        throw SchemaError(id, "num_edits must be a positive integer");
    if (!j["time"].is_number() || !(j["time"].template get<double>() >= 0.0))
        throw SchemaError(id, "time must be a non-negative number");

    const auto& rw = j["requested_rewrite"];
    detail::require_keys(rw, {"prompt", "relation_id", "target_new", "target_true", "subject"}, id, "requested_rewrite");
    for (const char* k : {"prompt", "relation_id", "subject"}) detail::require_string(rw, k, id, "requested_rewrite");
    detail::require_target(rw["target_new"], id, "requested_rewrite.target_new");
    detail::require_target(rw["target_true"], id, "requested_rewrite.target_true");

    const auto& post = j["post"];
    detail::require_keys(post, {"rewrite_prompts_probs", "paraphrase_prompts_probs", "neighborhood_prompts_probs"}, id,
                         "post");
    detail::require_probs(post["rewrite_prompts_probs"], id, "post.rewrite_prompts_probs", true);
    detail::require_probs(post["paraphrase_prompts_probs"], id, "post.paraphrase_prompts_probs", false);
    detail::require_probs(post["neighborhood_prompts_probs"], id, "post.neighborhood_prompts_probs", false);
}

inline nlohmann::ordered_json listing_to_json(const CaseListing& c) {
    nlohmann::ordered_json j;
    j["case_id"] = c.case_id;
    j["grouped_case_ids"] = c.grouped_case_ids;
    j["num_edits"] = c.num_edits;
    j["requested_rewrite"] = {{"prompt", c.prompt},
                              {"relation_id", c.relation_id},
                              {"target_new", {{"str", c.target_new.str}, {"id", c.target_new.id}}},
                              {"target_true", {{"str", c.target_true.str}, {"id", c.target_true.id}}},
                              {"subject", c.subject}};
    j["time"] = c.time;
    j["post"] = {{"rewrite_prompts_probs", detail::pairs_json(c.rewrite)},
                 {"paraphrase_prompts_probs", detail::pairs_json(c.paraphrase)},
                 {"neighborhood_prompts_probs", detail::pairs_json(c.neighborhood)}};
    return j;
}

template <typename Json>
CaseListing listing_from_json(const Json& j) {
    validate_listing(j);
    CaseListing c;
    c.case_id = j["case_id"].template get<long>();
    c.grouped_case_ids = j["grouped_case_ids"].template get<std::vector<long>>();
    c.num_edits = j["num_edits"].template get<long>();
    const auto& rw = j["requested_rewrite"];
    c.prompt = rw["prompt"].template get<std::string>();
    c.relation_id = rw["relation_id"].template get<std::string>();
    c.target_new = {rw["target_new"]["str"].template get<std::string>(), rw["target_new"]["id"].template get<std::string>()};
    c.target_true = {rw["target_true"]["str"].template get<std::string>(),
                     rw["target_true"]["id"].template get<std::string>()};
    c.subject = rw["subject"].template get<std::string>();
    c.time = j["time"].template get<double>();
    c.rewrite = detail::pairs_from(j["post"]["rewrite_prompts_probs"]);
    c.paraphrase = detail::pairs_from(j["post"]["paraphrase_prompts_probs"]);
    c.neighborhood = detail::pairs_from(j["post"]["neighborhood_prompts_probs"]);
    return c;
}

// ------------------------------------------------------------- per case

struct CaseRecord {
    CaseListing listing;
    std::vector<NllPair> portability;

    long case_id() const { return listing.case_id; }
    std::optional<double> eff() const { return pair_rate(listing.rewrite, edit_success); }
    std::optional<double> gen() const { return pair_rate(listing.paraphrase, edit_success); }
    std::optional<double> spec() const { return pair_rate(listing.neighborhood, retain_success); }
    std::optional<double> port() const { return pair_rate(portability, edit_success); }
};

/// Scores one request on the current model state.
inline CaseRecord evaluate_case(const ToyModel& model, const EditRequest& request, double seconds = 0.0) {
    request.validate();
    const std::size_t tn = model.vocab().index(request.target_new.str);
    const std::size_t tt = model.vocab().index(request.target_true.str);
    CaseRecord r;
    CaseListing& l = r.listing;
    l.case_id = request.case_id;
    l.grouped_case_ids = {request.case_id};
    l.num_edits = 1;
    l.prompt = request.prompt_template;
    l.relation_id = request.relation;
    l.target_new = request.target_new;
    l.target_true = request.target_true;
    l.subject = request.subject;
    l.time = seconds;
    l.rewrite = nll_pairs(model, request.rewrite_prompts, tn, tt);
    l.paraphrase = nll_pairs(model, request.paraphrase_prompts, tn, tt);
    l.neighborhood = nll_pairs(model, request.neighborhood_prompts, tn, tt);
    r.portability = nll_pairs(model, request.portability_prompts, tn, tt);
    return r;
}

// ------------------------------------------------------------- rates

/// Mean of per-case rates over the cases that had prompts of this kind.
struct Rate {
    double value = 0.0;
    std::size_t cases = 0;     // denominator
    std::size_t excluded = 0;  // cases with an empty prompt set

    double percent() const { return 100.0 * value; }
};

template <typename Get>
Rate mean_rate(const std::vector<CaseRecord>& records, Get get) {
    Rate r;
    double s = 0.0;
    for (const auto& c : records) {
        if (const auto x = get(c)) {
            s += *x;
            ++r.cases;
        } else {
            ++r.excluded;
        }
    }
    r.value = r.cases ? s / static_cast<double>(r.cases) : 0.0;
    return r;
}

inline std::vector<CaseRecord> evaluate_cases(const ToyModel& model, const std::vector<EditRequest>& requests) {
    std::vector<CaseRecord> out;
    out.reserve(requests.size());
    for (const auto& r : requests) out.push_back(evaluate_case(model, r));
    return out;
}

inline Rate efficacy(const ToyModel& model, const std::vector<EditRequest>& requests) {
    return mean_rate(evaluate_cases(model, requests), [](const CaseRecord& c) { return c.eff(); });
}
inline Rate generalization(const ToyModel& model, const std::vector<EditRequest>& requests) {
    return mean_rate(evaluate_cases(model, requests), [](const CaseRecord& c) { return c.gen(); });
}
inline Rate specificity(const ToyModel& model, const std::vector<EditRequest>& requests) {
    return mean_rate(evaluate_cases(model, requests), [](const CaseRecord& c) { return c.spec(); });
}
inline Rate portability(const ToyModel& model, const std::vector<EditRequest>& requests) {
    return mean_rate(evaluate_cases(model, requests), [](const CaseRecord& c) { return c.port(); });
}

struct EdsResult {
    double value = 0.0;
    bool degenerate = false;  // some input was 0, so the harmonic mean is undefined
};

/// Harmonic mean of three percentages.
inline EdsResult eds(double eff, double gen, double spec) {
    for (double x : {eff, gen, spec})
        if (!(x >= 0.0 && x <= 100.0)) throw InvalidArgument("eds: inputs must be percentages in [0, 100]");
    if (eff == 0.0 || gen == 0.0 || spec == 0.0) return {0.0, true};
    return {3.0 / (1.0 / eff + 1.0 / gen + 1.0 / spec), false};
}

/// Published aggregate row whose EDS does not equal the harmonic mean of its
/// own Eff/Gen/Spec. Reports carry it so the gap stays visible.
struct EdsReferenceRow {
    double eff = 99.43;
    double gen = 98.35;
    double spec = 79.47;
    double reported_eds = 92.42;
};

inline nlohmann::ordered_json eds_reference_note() {
    const EdsReferenceRow row;
    const double hm = eds(row.eff, row.gen, row.spec).value;
    return {{"inputs", {{"Eff", row.eff}, {"Gen", row.gen}, {"Spec", row.spec}}},
            {"reported_EDS", row.reported_eds},
            {"harmonic_mean", hm},
            {"difference", row.reported_eds - hm},
            {"note",
             "reported EDS is not the harmonic mean of its Eff/Gen/Spec; EDS here is the harmonic mean of the "
             "aggregate rates and EDS_per_case is the mean of per-case harmonic means"}};
}

// ------------------------------------------------------------- multi-hop

/// Follows the chain with top-1 predictions. A prediction that is not an
/// entity ends the chain as a failure.
inline bool chain_success(const ToyModel& model, const HopChain& chain) {
    if (chain.relations.empty()) throw InvalidArgument("chain " + std::to_string(chain.case_id) + " has no hops");
    const Vocab& vocab = model.vocab();
    if (!vocab.contains(chain.start)) throw KeyError(chain.start);
    if (!vocab.contains(chain.answer)) throw KeyError(chain.answer);
    std::string cur = chain.start;
    for (const auto& rel : chain.relations) {
        if (!vocab.contains(rel)) throw KeyError(rel);
        const Token& t = vocab.at(model.top1({cur, rel}));
        if (t.kind != TokenKind::entity) return false;
        cur = t.text;
    }
    return cur == chain.answer;
}

/// Success rate over the chains with exactly `hops` hops. Each chain is its
/// own case.
inline Rate multi_hop_efficacy(const ToyModel& model, const std::vector<HopChain>& chains, std::size_t hops) {
    Rate r;
    std::size_t ok = 0;
    for (const auto& c : chains) {
        if (c.hops() != hops) continue;
        ++r.cases;
        ok += chain_success(model, c) ? 1 : 0;
    }
    r.value = r.cases ? static_cast<double>(ok) / static_cast<double>(r.cases) : 0.0;
    return r;
}

// ------------------------------------------------------------- controls

/// Facts in connected components (of the undirected triple graph) that
/// contain no subject or target of any request.
inline std::vector<Triple> control_facts(const std::vector<Triple>& triples, const std::vector<EditRequest>& requests) {
    const auto names = unique_entities(triples);
    std::unordered_map<std::string, std::size_t> id;
    for (std::size_t i = 0; i < names.size(); ++i) id.emplace(names[i], i);
    std::vector<std::size_t> parent(names.size());
    std::iota(parent.begin(), parent.end(), std::size_t{0});
    auto find = [&](std::size_t x) {
        while (parent[x] != x) x = parent[x] = parent[parent[x]];
        return x;
    };
    for (const auto& t : triples) parent[find(id.at(t.subject))] = find(id.at(t.object));
    std::set<std::size_t> touched;
    for (const auto& r : requests)
        for (const auto* e : {&r.subject, &r.target_new.str, &r.target_true.str}) {
            const auto it = id.find(*e);
            if (it != id.end()) touched.insert(find(it->second));
        }
    std::vector<Triple> out;
    for (const auto& t : triples)
        if (!touched.count(find(id.at(t.subject)))) out.push_back(t);
    return out;
}

/// Fraction of `facts` whose top-1 prediction is the same in both models.
inline Rate control_specificity(const ToyModel& edited, const ToyModel& original, const std::vector<Triple>& facts) {
    Rate r;
    std::size_t same = 0;
    for (const auto& f : facts) {
        const Prompt p{f.subject, f.relation};
        same += edited.top1(p) == original.top1(p) ? 1 : 0;
    }
    r.cases = facts.empty() ? 0 : 1;
    r.value = facts.empty() ? 0.0 : static_cast<double>(same) / static_cast<double>(facts.size());
    return r;
}

// ------------------------------------------------------------- aggregate

struct MetricsReport {
    std::vector<CaseRecord> cases;
    Rate eff, gen, spec, port;
    EdsResult eds;
    std::optional<double> eds_per_case;  // mean of per-case EDS, in percent
    std::map<std::size_t, Rate> hops;
    std::optional<Rate> control;
    std::vector<std::string> flags;
};

/// `hops` and `control` are computed by the caller, since under isolated
/// edits they are averages over per-case model states.
inline MetricsReport aggregate(std::vector<CaseRecord> cases, std::map<std::size_t, Rate> hops = {},
                               std::optional<Rate> control = std::nullopt) {
    std::sort(cases.begin(), cases.end(), [](const CaseRecord& a, const CaseRecord& b) { return a.case_id() < b.case_id(); });
    MetricsReport m;
    m.eff = mean_rate(cases, [](const CaseRecord& c) { return c.eff(); });
    m.gen = mean_rate(cases, [](const CaseRecord& c) { return c.gen(); });
    m.spec = mean_rate(cases, [](const CaseRecord& c) { return c.spec(); });
    m.port = mean_rate(cases, [](const CaseRecord& c) { return c.port(); });
    m.eds = eds(m.eff.percent(), m.gen.percent(), m.spec.percent());
    if (m.eds.degenerate) m.flags.push_back("EDS: an input rate is 0, EDS reported as 0");

    double s = 0.0;
    std::size_t n = 0;
    for (const auto& c : cases) {
        const auto e = c.eff(), g = c.gen(), sp = c.spec();
        const auto id = std::to_string(c.case_id());
        if (!g) m.flags.push_back("case " + id + ": empty paraphrase set, excluded from Gen");
        if (!sp) m.flags.push_back("case " + id + ": empty neighborhood set, excluded from Spec");
        if (!c.port()) m.flags.push_back("case " + id + ": empty portability set, excluded from Port");
        if (e && g && sp) {
            s += eds(100.0 * *e, 100.0 * *g, 100.0 * *sp).value;
            ++n;
        }
    }
    if (n) m.eds_per_case = s / static_cast<double>(n);
    m.cases = std::move(cases);
    m.hops = std::move(hops);
    m.control = control;
    return m;
}

namespace detail {
inline nlohmann::ordered_json rate_count(const Rate& r) { return {{"cases", r.cases}, {"excluded", r.excluded}}; }
inline nlohmann::ordered_json opt_percent(const std::optional<double>& x) {
    return x ? nlohmann::ordered_json(100.0 * *x) : nlohmann::ordered_json(nullptr);
}
}  // namespace detail

/// Aggregate report. Percentages throughout; per-case rows follow the totals.
inline nlohmann::ordered_json report_to_json(const MetricsReport& m, const nlohmann::ordered_json& config, std::uint64_t seed) {
    nlohmann::ordered_json j;
    j["Eff"] = m.eff.percent();
    j["Gen"] = m.gen.percent();
    j["Spec"] = m.spec.percent();
    j["Port"] = m.port.percent();
    j["EDS"] = m.eds.value;
    j["EDS_per_case"] = m.eds_per_case ? nlohmann::ordered_json(*m.eds_per_case) : nlohmann::ordered_json(nullptr);
    nlohmann::ordered_json hops = nlohmann::ordered_json::object();
    for (const auto& [h, r] : m.hops) hops[std::to_string(h)] = r.percent();
    j["hops"] = hops;
    j["control_specificity"] = m.control ? nlohmann::ordered_json(m.control->percent()) : nlohmann::ordered_json(nullptr);
    nlohmann::ordered_json counts;
    counts["Eff"] = detail::rate_count(m.eff);
    counts["Gen"] = detail::rate_count(m.gen);
    counts["Spec"] = detail::rate_count(m.spec);
    counts["Port"] = detail::rate_count(m.port);
    nlohmann::ordered_json hop_counts = nlohmann::ordered_json::object();
    for (const auto& [h, r] : m.hops) hop_counts[std::to_string(h)] = r.cases;
    counts["hops"] = hop_counts;
    j["counts"] = counts;
    j["EDS_degenerate"] = m.eds.degenerate;
    j["EDS_reference"] = eds_reference_note();
    j["flags"] = m.flags;
    nlohmann::ordered_json rows = nlohmann::ordered_json::array();
    for (const auto& c : m.cases)
        rows.push_back({{"case_id", c.case_id()},
                        {"eff", detail::opt_percent(c.eff())},
                        {"gen", detail::opt_percent(c.gen())},
                        {"spec", detail::opt_percent(c.spec())},
                        {"port", detail::opt_percent(c.port())}});
    j["cases"] = rows;
    j["config"] = config;
    j["seed"] = seed;
    return j;
}

/// One row per case and one aggregate row; empty cells mark excluded sets.
inline std::string report_csv(const MetricsReport& m) {
    std::ostringstream os;
    os.precision(17);
    auto cell = [&](const std::optional<double>& x) {
        if (x) os << 100.0 * *x;
    };
    os << "scope,case_id,eff,gen,spec,port,eds\n";
    for (const auto& c : m.cases) {
        os << "case," << c.case_id() << ',';
        cell(c.eff());
        os << ',';
        cell(c.gen());
        os << ',';
        cell(c.spec());
        os << ',';
        cell(c.port());
        os << ',';
        if (c.eff() && c.gen() && c.spec()) os << eds(100.0 * *c.eff(), 100.0 * *c.gen(), 100.0 * *c.spec()).value;
        os << '\n';
    }
    os << "aggregate,," << m.eff.percent() << ',' << m.gen.percent() << ',' << m.spec.percent() << ','
       << m.port.percent() << ',' << m.eds.value << '\n';
    return os.str();
}

}  // namespace hype
