#pragma once

// Edit requests and multi-hop chains, with their JSONL wire forms.

#include <istream>
#include <string>
#include <vector>

#include "json.hpp"

#include "hype/errors.hpp"
#include "hype/toy_model.hpp"

namespace hype {

struct TargetToken {
    std::string str;
    std::string id;
    bool operator==(const TargetToken&) const = default;
};

struct EditRequest {
    long case_id = 0;
    std::string subject;
    std::string relation;
    std::string prompt_template = "{}";
    TargetToken target_new;
    TargetToken target_true;
    std::vector<Prompt> rewrite_prompts;
    std::vector<Prompt> paraphrase_prompts;
    std::vector<Prompt> neighborhood_prompts;
    std::vector<Prompt> portability_prompts;

    bool operator==(const EditRequest&) const = default;

    void validate() const {
        if (rewrite_prompts.empty()) throw InvalidArgument("case " + std::to_string(case_id) + ": no rewrite prompt");
        if (target_new.str == target_true.str)
            throw InvalidArgument("case " + std::to_string(case_id) + ": target_new equals target_true");
    }
};

/// A query chain: start at `start`, follow `relations` in order, expect `answer`.
struct HopChain {
    long case_id = 0;
    std::string start;
    std::vector<std::string> relations;
    std::string answer;

    std::size_t hops() const noexcept { return relations.size(); }
    bool operator==(const HopChain&) const = default;
};

inline nlohmann::json prompts_to_json(const std::vector<Prompt>& ps) {
    nlohmann::json a = nlohmann::json::array();
    for (const auto& p : ps) a.push_back({{"subject", p.subject}, {"relation", p.relation}});
    return a;
}

inline std::vector<Prompt> prompts_from_json(const nlohmann::json& a) {
    std::vector<Prompt> out;
    for (const auto& p : a) out.push_back({p.at("subject").get<std::string>(), p.at("relation").get<std::string>()});
    return out;
}

inline nlohmann::json requested_rewrite_json(const EditRequest& r) {
    return {{"prompt", r.prompt_template},
            {"relation_id", r.relation},
            {"target_new", {{"str", r.target_new.str}, {"id", r.target_new.id}}},
            {"target_true", {{"str", r.target_true.str}, {"id", r.target_true.id}}},
            {"subject", r.subject}};
}

inline nlohmann::json request_to_json(const EditRequest& r) {
    return {{"case_id", r.case_id},
            {"requested_rewrite", requested_rewrite_json(r)},
            {"rewrite_prompts", prompts_to_json(r.rewrite_prompts)},
            {"paraphrase_prompts", prompts_to_json(r.paraphrase_prompts)},
            {"neighborhood_prompts", prompts_to_json(r.neighborhood_prompts)},
            {"portability_prompts", prompts_to_json(r.portability_prompts)}};
}

inline EditRequest request_from_json(const nlohmann::json& j) {
    EditRequest r;
    r.case_id = j.at("case_id").get<long>();
    const auto& rw = j.at("requested_rewrite");
    r.prompt_template = rw.at("prompt").get<std::string>();
    r.relation = rw.at("relation_id").get<std::string>();
    r.subject = rw.at("subject").get<std::string>();
    r.target_new = {rw.at("target_new").at("str").get<std::string>(), rw.at("target_new").at("id").get<std::string>()};
    r.target_true = {rw.at("target_true").at("str").get<std::string>(), rw.at("target_true").at("id").get<std::string>()};
    r.rewrite_prompts = prompts_from_json(j.at("rewrite_prompts"));
    r.paraphrase_prompts = prompts_from_json(j.value("paraphrase_prompts", nlohmann::json::array()));
    r.neighborhood_prompts = prompts_from_json(j.value("neighborhood_prompts", nlohmann::json::array()));
    r.portability_prompts = prompts_from_json(j.value("portability_prompts", nlohmann::json::array()));
    r.validate();
    return r;
}

inline nlohmann::json chain_to_json(const HopChain& c) {
    return {{"case_id", c.case_id}, {"start", c.start}, {"relations", c.relations}, {"answer", c.answer}, {"hops", c.hops()}};
}

inline HopChain chain_from_json(const nlohmann::json& j) {
    return {j.at("case_id").get<long>(), j.at("start").get<std::string>(),
            j.at("relations").get<std::vector<std::string>>(), j.at("answer").get<std::string>()};
}

template <typename T, typename Parse>
std::vector<T> read_jsonl(std::istream& in, Parse parse) {
    std::vector<T> out;
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
        try {
            out.push_back(parse(nlohmann::json::parse(line)));
        } catch (const nlohmann::json::exception& e) {
            throw ParseError(lineno, e.what());
        } catch (const InvalidArgument& e) {
            throw ParseError(lineno, e.what());
        }
    }
    return out;
}

inline std::vector<EditRequest> read_requests(std::istream& in) { return read_jsonl<EditRequest>(in, request_from_json); }
inline std::vector<HopChain> read_chains(std::istream& in) { return read_jsonl<HopChain>(in, chain_from_json); }

}  // namespace hype
