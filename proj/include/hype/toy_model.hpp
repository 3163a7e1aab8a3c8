#pragma once

// A small editable associative model standing in for a language model.
//
//   key    k = tanh(M [e_subject ; e_relation])        (fixed encoder, R^n)
//   hidden h = W k                                      (edited layer, m rows on the ball)
//   probs  p = softmax(D h)                             (decoder, fixed after fit)
//
// Relations may have alias tokens whose embeddings are noisy copies of the
// base relation embedding; they serve as paraphrased prompt forms.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <random>
#include <string>
#include <unordered_map>
#include <vector>

#include <Eigen/Dense>

#include "json.hpp"

#include "hype/autodiff.hpp"
#include "hype/errors.hpp"
#include "hype/hyperbolic.hpp"
#include "hype/kg_builder.hpp"
#include "hype/tensor.hpp"

namespace hype {

enum class TokenKind { entity, relation, alias };

struct Token {
    std::string text;
    std::string external_id;
    TokenKind kind = TokenKind::entity;
    std::string alias_of;  // base relation for aliases
    double alias_noise = 0.0;

    bool operator==(const Token&) const = default;
};

class Vocab {
public:
    std::size_t add(Token t) {
        if (index_.count(t.text)) throw InvalidArgument("duplicate vocabulary token '" + t.text + "'");
        index_.emplace(t.text, tokens_.size());
        tokens_.push_back(std::move(t));
        return tokens_.size() - 1;
    }
    std::size_t index(const std::string& text) const {
        const auto it = index_.find(text);
        if (it == index_.end()) throw VocabularyError(text);
        return it->second;
    }
    bool contains(const std::string& text) const { return index_.count(text) != 0; }
    const Token& at(std::size_t i) const { return tokens_.at(i); }
    const Token& at(const std::string& text) const { return tokens_[index(text)]; }
    std::size_t size() const noexcept { return tokens_.size(); }
    bool empty() const noexcept { return tokens_.empty(); }
    const std::vector<Token>& tokens() const noexcept { return tokens_; }

    bool operator==(const Vocab& o) const { return tokens_ == o.tokens_; }

private:
    std::vector<Token> tokens_;
    std::unordered_map<std::string, std::size_t> index_;
};

struct AliasSpec {
    std::string suffix;
    double noise;
};

/// Paraphrase-style aliases attached to every relation in the benchmark vocabularies.
inline std::vector<AliasSpec> default_aliases() {
    return {{"~para1", 0.2}, {"~para2", 0.35}, {"~port", 0.7}};
}

/// Entities (first-appearance order), then relations, then relation aliases.
inline Vocab vocab_from_triples(const std::vector<Triple>& triples, const std::vector<AliasSpec>& aliases = default_aliases()) {
    Vocab v;
    const auto entities = unique_entities(triples);
    for (std::size_t i = 0; i < entities.size(); ++i)
        v.add(Token{entities[i], "Q" + std::to_string(1000 + i), TokenKind::entity, {}, 0.0});
    for (const auto& r : unique_relations(triples)) v.add(Token{r, r, TokenKind::relation, {}, 0.0});
    for (const auto& r : unique_relations(triples))
        for (const auto& a : aliases) v.add(Token{r + a.suffix, r, TokenKind::alias, r, a.noise});
    return v;
}

struct Prompt {
    std::string subject;
    std::string relation;

    bool operator==(const Prompt&) const = default;
};

struct ToyModelShape {
    std::size_t rows = 64;       // m: output features of the edited layer
    std::size_t key_dim = 512;   // n: key dimension
    std::size_t embed_dim = 16;  // token embedding width
    double key_gain = 3.0;       // scale of the fixed mixing matrix
    double relation_weight = 0.5; // relation share of the encoder input
};

/// Mutable state of a model: the edited layer and the decoder.
struct ModelState {
    Matrix weights;
    Matrix decoder;
    bool operator==(const ModelState&) const = default;
};

class ToyModel {
public:
    ToyModel() = default;

    /// Deterministic initialization; edited-layer rows start at norm <= 0.5 / sqrt(c).
    static ToyModel create(Vocab vocab, const ToyModelShape& shape, std::uint64_t seed, const Curvature& c = Curvature(1.0)) {
        if (shape.rows < 2 || shape.key_dim < 2) throw InvalidArgument("toy model: m and n must be >= 2");
        if (vocab.empty()) throw InvalidArgument("toy model: empty vocabulary");
        ToyModel model;
        model.vocab_ = std::move(vocab);
        model.shape_ = shape;
        model.seed_ = seed;
        model.curvature_ = c;
        std::mt19937_64 rng(seed);
        std::normal_distribution<double> normal(0.0, 1.0);
        std::uniform_real_distribution<double> unit(0.0, 1.0);
        const std::size_t V = model.vocab_.size();
        const std::size_t e = shape.embed_dim;

        model.embeddings_ = Matrix(V, e);
        for (std::size_t t = 0; t < V; ++t)
            for (std::size_t j = 0; j < e; ++j) model.embeddings_(t, j) = normal(rng) / std::sqrt(static_cast<double>(e));
        for (std::size_t t = 0; t < V; ++t) {
            const Token& tok = model.vocab_.at(t);
            if (tok.kind != TokenKind::alias) continue;
            const auto base = model.embeddings_.row(model.vocab_.index(tok.alias_of));
            Vector noise(e);
            for (auto& x : noise) x = normal(rng);
            const double scale = tok.alias_noise * norm(base) / std::max(norm(noise), 1e-300);
            for (std::size_t j = 0; j < e; ++j) model.embeddings_(t, j) = base[j] + scale * noise[j];
        }

        model.mixing_ = Matrix(shape.key_dim, 2 * e);
        const double mix_sd = shape.key_gain / std::sqrt(static_cast<double>(2 * e));
        for (auto& x : model.mixing_.data) x = normal(rng) * mix_sd;

        model.state_.weights = Matrix(shape.rows, shape.key_dim);
        for (std::size_t r = 0; r < shape.rows; ++r) {
            Vector dir(shape.key_dim);
            for (auto& x : dir) x = normal(rng);
            const double target = 0.5 * c.radius() * unit(rng);
            const double n = norm(dir);
            for (std::size_t j = 0; j < shape.key_dim; ++j) model.state_.weights(r, j) = dir[j] * target / n;
        }

        model.state_.decoder = Matrix(V, shape.rows);
        const double dec_sd = 1.0 / std::sqrt(static_cast<double>(shape.rows));
        for (auto& x : model.state_.decoder.data) x = normal(rng) * dec_sd;
        return model;
    }

    const Vocab& vocab() const noexcept { return vocab_; }
    const ToyModelShape& shape() const noexcept { return shape_; }
    std::uint64_t seed() const noexcept { return seed_; }
    const Curvature& curvature() const noexcept { return curvature_; }
    std::size_t rows() const noexcept { return shape_.rows; }
    std::size_t key_dim() const noexcept { return shape_.key_dim; }

    const Matrix& weights() const noexcept { return state_.weights; }
    const Matrix& decoder() const noexcept { return state_.decoder; }
    const Matrix& embeddings() const noexcept { return embeddings_; }
    const Matrix& mixing() const noexcept { return mixing_; }

    /// Replaces the edited layer; every row must satisfy the ball invariant.
    void set_weights(Matrix w) {
        if (!w.same_shape(state_.weights)) throw ConfigError("set_weights: shape mismatch");
        for (std::size_t r = 0; r < w.rows; ++r)
            if (!satisfies_ball_invariant(w.row(r), curvature_))
                throw DomainError("set_weights: row " + std::to_string(r) + " leaves the ball interior");
        state_.weights = std::move(w);
    }
    void set_decoder(Matrix d) {
        if (!d.same_shape(state_.decoder)) throw ConfigError("set_decoder: shape mismatch");
        state_.decoder = std::move(d);
    }

    Vector key(const Prompt& p) const {
        const auto s = embeddings_.row(vocab_.index(p.subject));
        const auto r = embeddings_.row(vocab_.index(p.relation));
        Vector x(s.begin(), s.end());
        for (double v : r) x.push_back(shape_.relation_weight * v);
        Vector k = matvec(mixing_, x);
        for (auto& v : k) v = std::tanh(v);
        return k;
    }

    Vector hidden(const Vector& key) const { return matvec(state_.weights, key); }
    Vector logits_from_hidden(const Vector& h) const { return matvec(state_.decoder, h); }
    Vector logits(const Prompt& p) const { return logits_from_hidden(hidden(key(p))); }

    /// softmax over the whole vocabulary
    Vector forward(const Prompt& p) const { return softmax(logits(p)); }

    double nll(const Prompt& p, const std::string& token) const { return nll(p, vocab_.index(token)); }
    double nll(const Prompt& p, std::size_t token) const {
        const Vector z = logits(p);
        return log_sum_exp(z) - z.at(token);
    }

    std::size_t top1(const Prompt& p) const {
        const Vector z = logits(p);
        return static_cast<std::size_t>(std::max_element(z.begin(), z.end()) - z.begin());
    }

    ModelState snapshot() const { return state_; }
    void restore(const ModelState& s) {
        if (!s.weights.same_shape(state_.weights) || !s.decoder.same_shape(state_.decoder))
            throw ConfigError("restore: state shape does not match the model");
        state_ = s;
    }

    static double log_sum_exp(std::span<const double> z) {
        const double mx = *std::max_element(z.begin(), z.end());
        double s = 0.0;
        for (double x : z) s += std::exp(x - mx);
        return mx + std::log(s);
    }
    static Vector softmax(const Vector& z) {
        const double lse = log_sum_exp(z);
        Vector p(z.size());
        for (std::size_t i = 0; i < z.size(); ++i) p[i] = std::exp(z[i] - lse);
        return p;
    }

    bool operator==(const ToyModel& o) const {
        return vocab_ == o.vocab_ && shape_.rows == o.shape_.rows && shape_.key_dim == o.shape_.key_dim &&
               shape_.embed_dim == o.shape_.embed_dim && shape_.key_gain == o.shape_.key_gain &&
               shape_.relation_weight == o.shape_.relation_weight && seed_ == o.seed_ &&
               curvature_ == o.curvature_ && embeddings_ == o.embeddings_ && mixing_ == o.mixing_ && state_ == o.state_;
    }

    // checkpoint IO needs raw access
    friend nlohmann::json model_to_json(const ToyModel&);
    friend ToyModel model_from_json(const nlohmann::json&);

private:
    Vocab vocab_;
    ToyModelShape shape_;
    std::uint64_t seed_ = 0;
    Curvature curvature_;
    Matrix embeddings_;
    Matrix mixing_;
    ModelState state_;
};

/// Stacked keys for a list of prompts (P×n).
inline Matrix key_matrix(const ToyModel& model, const std::vector<Prompt>& prompts) {
    Matrix k(prompts.size(), model.key_dim());
    for (std::size_t i = 0; i < prompts.size(); ++i) {
        const Vector v = model.key(prompts[i]);
        std::copy(v.begin(), v.end(), k.row(i).begin());
    }
    return k;
}

/// Central differences of `loss` with respect to every edited-layer coordinate.
inline Matrix finite_diff_grad(const ToyModel& model, const std::function<double(const ToyModel&)>& loss, double step) {
    if (!(step > 0.0)) throw InvalidArgument("finite_diff_grad: step must be > 0");
    ToyModel probe = model;
    const ModelState base = model.snapshot();
    Matrix grad(model.rows(), model.key_dim());
    for (std::size_t i = 0; i < grad.size(); ++i) {
        ModelState s = base;
        s.weights.data[i] = base.weights.data[i] + step;
        probe.restore(s);
        const double up = loss(probe);
        s.weights.data[i] = base.weights.data[i] - step;
        probe.restore(s);
        const double down = loss(probe);
        grad.data[i] = (up - down) / (2.0 * step);
    }
    return grad;
}

// ------------------------------------------------------------------ supervised fit

// The fit is closed form. Each object token gets a random unit decoder row;
// the edited layer is the ridge solution mapping every fact's key onto the
// decoder row of its object. Rows are then shrunk to a fraction of the ball
// radius (the decoder absorbs the scale), which leaves headroom for edits.

struct FitOptions {
    double ridge = 1e-3;            // relative to the mean squared key norm
    double temperature = 15.0;      // logit scale of a perfectly fitted fact
    double row_norm_fraction = 0.5; // largest row norm after the fit, as a fraction of the radius
};

struct FitReport {
    double residual = 0.0;  // ||K W^T - H*||_F / ||H*||_F before rescaling
    double mean_nll = 0.0;
    double train_accuracy = 0.0;
};

inline double top1_accuracy(const ToyModel& model, const std::vector<Triple>& facts) {
    if (facts.empty()) return 0.0;
    std::size_t ok = 0;
    for (const auto& f : facts)
        if (model.top1({f.subject, f.relation}) == model.vocab().index(f.object)) ++ok;
    return static_cast<double>(ok) / static_cast<double>(facts.size());
}

inline FitReport fit(ToyModel& model, const std::vector<Triple>& facts, const FitOptions& opt = {}) {
    if (facts.empty()) throw InvalidArgument("fit: no facts");
    if (!(opt.ridge > 0.0) || !(opt.temperature > 0.0) || !(opt.row_norm_fraction > 0.0 && opt.row_norm_fraction < 1.0))
        throw InvalidArgument("fit: ridge and temperature must be positive, row_norm_fraction in (0, 1)");
    std::vector<Prompt> prompts;
    std::vector<std::size_t> targets;
    for (const auto& f : facts) {
        prompts.push_back({f.subject, f.relation});
        targets.push_back(model.vocab().index(f.object));
    }
    const Matrix keys = key_matrix(model, prompts);
    const std::size_t N = keys.rows, n = keys.cols, m = model.rows(), V = model.vocab().size();

    ModelState state = model.snapshot();
    // unit decoder rows, drawn from a stream separate from initialization
    std::mt19937_64 rng(model.seed() ^ 0x9e3779b97f4a7c15ULL);
    std::normal_distribution<double> normal(0.0, 1.0);
    Matrix dec(V, m);
    for (std::size_t t = 0; t < V; ++t) {
        auto row = dec.row(t);
        for (auto& x : row) x = normal(rng);
        const double r = norm(row);
        for (auto& x : row) x /= r;
    }

    using EMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
    const Eigen::Map<const EMat> K(keys.data.data(), N, n);
    EMat H(N, m);
    for (std::size_t i = 0; i < N; ++i)
        for (std::size_t j = 0; j < m; ++j) H(i, j) = dec(targets[i], j);
    // dual form: W^T = K^T (K K^T + lambda I)^-1 H
    EMat gram = K * K.transpose();
    const double lambda = opt.ridge * gram.trace() / static_cast<double>(N);
    gram.diagonal().array() += lambda;
    const EMat alpha = gram.ldlt().solve(H);
    const EMat Wt = K.transpose() * alpha;  // n x m

    FitReport report;
    report.residual = (K * Wt - H).norm() / H.norm();

    Matrix w(m, n);
    for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j) w(i, j) = Wt(j, i);
    double largest = 0.0;
    for (std::size_t i = 0; i < m; ++i) largest = std::max(largest, norm(w.row(i)));
    if (!(largest > 0.0)) throw NumericInstability("fit: degenerate solution");
    const double s = opt.row_norm_fraction * model.curvature().radius() / largest;
    for (auto& x : w.data) x *= s;
    for (auto& x : dec.data) x *= opt.temperature / s;
    state.weights = std::move(w);
    state.decoder = std::move(dec);
    model.restore(state);

    double nll_sum = 0.0;
    for (std::size_t i = 0; i < N; ++i) nll_sum += model.nll(prompts[i], targets[i]);
    report.mean_nll = nll_sum / static_cast<double>(N);
    report.train_accuracy = top1_accuracy(model, facts);
    return report;
}

// ------------------------------------------------------------------ checkpoint

inline constexpr int kCheckpointVersion = 1;

inline nlohmann::json matrix_to_json(const Matrix& m) {
    return {{"rows", m.rows}, {"cols", m.cols}, {"data", m.data}};
}
inline Matrix matrix_from_json(const nlohmann::json& j) {
    Matrix m(j.at("rows").get<std::size_t>(), j.at("cols").get<std::size_t>());
    m.data = j.at("data").get<std::vector<double>>();
    if (m.data.size() != m.rows * m.cols) throw ConfigError("checkpoint: tensor size does not match its shape");
    return m;
}

inline nlohmann::json model_to_json(const ToyModel& model) {
    nlohmann::json vocab = nlohmann::json::array();
    for (const auto& t : model.vocab_.tokens()) {
        const char* kind = t.kind == TokenKind::entity ? "entity" : t.kind == TokenKind::relation ? "relation" : "alias";
        vocab.push_back({{"text", t.text}, {"id", t.external_id}, {"kind", kind}, {"alias_of", t.alias_of}, {"alias_noise", t.alias_noise}});
    }
    return {{"format", "hype-toy-model"},
            {"version", kCheckpointVersion},
            {"config",
             {{"rows", model.shape_.rows},
              {"key_dim", model.shape_.key_dim},
              {"embed_dim", model.shape_.embed_dim},
              {"key_gain", model.shape_.key_gain},
              {"relation_weight", model.shape_.relation_weight},
              {"curvature", model.curvature_.value()},
              {"seed", model.seed_}}},
            {"vocab", std::move(vocab)},
            {"embeddings", matrix_to_json(model.embeddings_)},
            {"mixing", matrix_to_json(model.mixing_)},
            {"weights", matrix_to_json(model.state_.weights)},
            {"decoder", matrix_to_json(model.state_.decoder)}};
}

inline ToyModel model_from_json(const nlohmann::json& j) {
    if (j.value("format", "") != "hype-toy-model") throw ConfigError("checkpoint: unrecognized format");
    if (j.value("version", 0) != kCheckpointVersion)
        throw ConfigError("checkpoint: unsupported version " + std::to_string(j.value("version", 0)));
    ToyModel model;
    const auto& cfg = j.at("config");
    model.shape_.rows = cfg.at("rows").get<std::size_t>();
    model.shape_.key_dim = cfg.at("key_dim").get<std::size_t>();
    model.shape_.embed_dim = cfg.at("embed_dim").get<std::size_t>();
    model.shape_.key_gain = cfg.at("key_gain").get<double>();
    model.shape_.relation_weight = cfg.at("relation_weight").get<double>();
    model.curvature_ = Curvature(cfg.at("curvature").get<double>());
    model.seed_ = cfg.at("seed").get<std::uint64_t>();
    for (const auto& t : j.at("vocab")) {
        const auto kind = t.at("kind").get<std::string>();
        model.vocab_.add(Token{t.at("text").get<std::string>(), t.at("id").get<std::string>(),
                               kind == "entity" ? TokenKind::entity : kind == "relation" ? TokenKind::relation : TokenKind::alias,
                               t.at("alias_of").get<std::string>(), t.at("alias_noise").get<double>()});
    }
    model.embeddings_ = matrix_from_json(j.at("embeddings"));
    model.mixing_ = matrix_from_json(j.at("mixing"));
    model.state_.weights = matrix_from_json(j.at("weights"));
    model.state_.decoder = matrix_from_json(j.at("decoder"));
    const std::size_t V = model.vocab_.size();
    if (model.embeddings_.rows != V || model.state_.decoder.rows != V || model.state_.weights.rows != model.shape_.rows ||
        model.state_.weights.cols != model.shape_.key_dim || model.state_.decoder.cols != model.shape_.rows ||
        model.mixing_.rows != model.shape_.key_dim || model.mixing_.cols != 2 * model.shape_.embed_dim ||
        model.embeddings_.cols != model.shape_.embed_dim)
        throw ConfigError("checkpoint: tensor shapes disagree with config");
    return model;
}

/// Writes to a sibling temporary file and renames it into place.
inline void write_file_atomic(const std::filesystem::path& path, const std::string& contents) {
    auto tmp = path;
    tmp += ".tmp";
    {
        std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
        if (!out) throw IoError("cannot open " + tmp.string() + " for writing");
        out << contents;
        out.flush();
        if (!out) throw IoError("write failed for " + tmp.string());
    }
    std::error_code ec;
    std::filesystem::rename(tmp, path, ec);
    if (ec) throw IoError("cannot rename " + tmp.string() + " to " + path.string() + ": " + ec.message());
}

inline void save_checkpoint(const ToyModel& model, const std::filesystem::path& path) {
    write_file_atomic(path, model_to_json(model).dump() + "\n");
}

inline ToyModel load_checkpoint(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open checkpoint " + path.string());
    nlohmann::json j;
    try {
        j = nlohmann::json::parse(in);
    } catch (const nlohmann::json::parse_error& e) {
        throw ConfigError(std::string("checkpoint: ") + e.what());
    }
    return model_from_json(j);
}

}  // namespace hype
