#include <gtest/gtest.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>

#include <sys/wait.h>
#include <unistd.h>

#include "hype/pipeline.hpp"
#include "support.hpp"

using namespace hype;
namespace fs = std::filesystem;

namespace {

class TempDir {
public:
    explicit TempDir(const std::string& tag)
        : path_(fs::temp_directory_path() / ("hype_pipe_" + std::to_string(::getpid()) + "_" + tag)) {
        fs::remove_all(path_);
        fs::create_directories(path_);
    }
    ~TempDir() { fs::remove_all(path_); }
    const fs::path& path() const { return path_; }

private:
    fs::path path_;
};

int run_cli(const std::string& args) {
    const std::string cmd = std::string(HYPE_CLI_PATH) + " " + args + " >/dev/null 2>&1";
    const int status = std::system(cmd.c_str());
    return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

void write(const fs::path& p, const std::string& text) { std::ofstream(p, std::ios::binary) << text; }

// A three-request benchmark config; every artifact lands next to the config file.
std::string small_config(const std::string& extra = "") {
    return R"({"benchmark": {"requests": 3}, "paths": {"triples": "triples.tsv", "requests": "requests.jsonl",
              "chains": "chains.jsonl", "model": "model.json", "out_dir": "."})" +
           extra + "}";
}

Dataset subset(const Dataset& d, std::size_t n) {
    Dataset s = d;
    s.requests.resize(n);
    std::vector<HopChain> chains;
    for (const auto& c : d.chains)
        for (const auto& r : s.requests)
            if (c.case_id == r.case_id) chains.push_back(c);
    s.chains = chains;
    return s;
}

}  // namespace

TEST(Cli, ExitCodes) {
    TempDir t("codes");
    EXPECT_EQ(run_cli("--help"), 0);
    EXPECT_EQ(run_cli(""), kExitInput);
    EXPECT_EQ(run_cli("fit --config " + (t.path() / "missing.json").string()), kExitInput);
    write(t.path() / "bad.json", R"({"unknown_key": 1})");
    EXPECT_EQ(run_cli("fit --config " + (t.path() / "bad.json").string()), kExitInput);
    write(t.path() / "nofile.json", R"({"paths": {"triples": "absent.tsv"}})");
    EXPECT_EQ(run_cli("fit --config " + (t.path() / "nofile.json").string()), kExitInput);
    write(t.path() / "broken.tsv", "a\tb\n");
    write(t.path() / "parse.json", R"({"paths": {"triples": "broken.tsv"}})");
    EXPECT_EQ(run_cli("build-graph --config " + (t.path() / "parse.json").string()), kExitInput);
}

TEST(Cli, EndToEndOnSmallBenchmark) {
    TempDir t("e2e");
    const fs::path cfg = t.path() / "run.json";
    write(cfg, small_config());
    const std::string c = "--config " + cfg.string();
    ASSERT_EQ(run_cli("generate-benchmark " + c), 0);
    ASSERT_EQ(run_cli("build-graph " + c), 0);
    const std::string graph1 = read_file(t.path() / "graph.json");
    ASSERT_EQ(run_cli("build-graph " + c), 0);
    EXPECT_EQ(read_file(t.path() / "graph.json"), graph1);

    ASSERT_EQ(run_cli("fit " + c), 0);
    ASSERT_EQ(run_cli("edit " + c), 0);
    ASSERT_EQ(run_cli("evaluate " + c), 0);
    const std::string metrics1 = read_file(t.path() / "metrics.json");
    ASSERT_EQ(run_cli("evaluate " + c), 0);
    EXPECT_EQ(read_file(t.path() / "metrics.json"), metrics1);

    std::istringstream cases(read_file(t.path() / "cases.jsonl"));
    std::size_t n = 0;
    for (std::string line; std::getline(cases, line); ++n) EXPECT_NO_THROW(validate_listing(nlohmann::json::parse(line)));
    EXPECT_EQ(n, 3u);

    const auto m = nlohmann::json::parse(metrics1);
    const double e = eds(m["Eff"].get<double>(), m["Gen"].get<double>(), m["Spec"].get<double>()).value;
    EXPECT_NEAR(m["EDS"].get<double>(), e, 1e-9);
    EXPECT_EQ(m["config"]["benchmark"]["requests"], 3);
    EXPECT_EQ(m["seed"], 1);
    EXPECT_EQ(m["EDS_reference"]["reported_EDS"], 92.42);

    // the sequential protocol reads the same updates and the accumulated checkpoint
    write(cfg, small_config(R"(, "protocol": "sequential")"));
    ASSERT_EQ(run_cli("edit " + c), 0);
    ASSERT_EQ(run_cli("evaluate " + c), 0);

    ASSERT_EQ(run_cli("sweep " + c + " --axis tau --values 0.5"), 0);
    const std::string csv = read_file(t.path() / "sweep_tau.csv");
    EXPECT_EQ(std::count(csv.begin(), csv.end(), '\n'), 2);
    EXPECT_NE(csv.find("0.5,ok,"), std::string::npos);
}

TEST(Cli, EmptyRequestsLeaveCheckpointUnchanged) {
    TempDir t("empty");
    const fs::path cfg = t.path() / "run.json";
    write(cfg, small_config());
    const std::string c = "--config " + cfg.string();
    ASSERT_EQ(run_cli("generate-benchmark " + c), 0);
    ASSERT_EQ(run_cli("fit " + c), 0);
    write(t.path() / "requests.jsonl", "");
    ASSERT_EQ(run_cli("edit " + c), 0);
    EXPECT_EQ(read_file(t.path() / "edited_model.json"), read_file(t.path() / "model.json"));
    EXPECT_EQ(read_file(t.path() / "updates.jsonl"), "");
}

TEST(Cli, SchemaViolationExitsWithOne) {
    TempDir t("schema");
    const fs::path cfg = t.path() / "run.json";
    write(cfg, small_config());
    const std::string c = "--config " + cfg.string();
    ASSERT_EQ(run_cli("generate-benchmark " + c), 0);
    ASSERT_EQ(run_cli("fit " + c), 0);
    ASSERT_EQ(run_cli("edit " + c), 0);
    // a negative recorded time cannot be written as a valid listing
    std::istringstream in(read_file(t.path() / "updates.jsonl"));
    std::string out;
    for (std::string line; std::getline(in, line);) {
        auto j = nlohmann::ordered_json::parse(line);
        j["time"] = -1.0;
        out += j.dump() + '\n';
    }
    write(t.path() / "updates.jsonl", out);
    EXPECT_EQ(run_cli("evaluate " + c), kExitSchema);
    EXPECT_FALSE(fs::exists(t.path() / "cases.jsonl"));
}

TEST(Pipeline, ReplayMatchesInMemoryEdit) {
    const auto& f = test::bench();
    const Dataset d = subset(f.data, 4);
    const EditBatch batch = edit_batch(f.model, f.graph, d.requests, f.cfg);
    ASSERT_EQ(batch.cases.size(), 4u);
    EXPECT_TRUE(batch.final_model == f.model);
    for (std::size_t i = 0; i < 4; ++i) {
        ASSERT_TRUE(batch.cases[i].ok) << batch.cases[i].error;
        ToyModel direct = f.model;
        GnnParams p = test::fresh_params(f);
        run_edit(direct, f.graph, d.requests[i], p, f.cfg.edit_config());
        ToyModel replayed = f.model;
        const CaseEdit back = case_edit_from_json(nlohmann::json::parse(case_edit_to_json(batch.cases[i]).dump()));
        replay(replayed, back.plans, f.cfg.edit_config());
        EXPECT_TRUE(replayed == direct) << "case " << i;
    }
}

TEST(Pipeline, SequentialAccumulatesInOrder) {
    const auto& f = test::bench();
    RunConfig cfg = f.cfg;
    cfg.protocol = Protocol::sequential;
    const Dataset d = subset(f.data, 3);
    const EditBatch batch = edit_batch(f.model, f.graph, d.requests, cfg);
    ToyModel replayed = f.model;
    for (const auto& c : batch.cases) replay(replayed, c.plans, cfg.edit_config());
    EXPECT_TRUE(replayed == batch.final_model);
    EXPECT_FALSE(batch.final_model == f.model);
    const MetricsReport m = evaluate_batch(f.model, batch.final_model, batch.cases, d, cfg);
    EXPECT_EQ(m.cases.size(), 3u);
}

TEST(Pipeline, FailedCaseIsRecordedAndBatchContinues) {
    const auto& f = test::bench();
    std::vector<EditRequest> reqs{f.data.requests[0], f.data.requests[1]};
    reqs[0].target_new.str = "not-an-entity";
    const EditBatch batch = edit_batch(f.model, f.graph, reqs, f.cfg);
    EXPECT_FALSE(batch.cases[0].ok);
    EXPECT_NE(batch.cases[0].error.find("not-an-entity"), std::string::npos);
    EXPECT_TRUE(batch.cases[1].ok);
}

TEST(Pipeline, EvaluateIsDeterministicAndConsistent) {
    const auto& f = test::bench();
    const Dataset d = subset(f.data, 5);
    const auto a = run_pipeline(f.cfg, d, f.model, f.graph);
    const auto b = run_pipeline(f.cfg, d, f.model, f.graph);
    auto strip = [](nlohmann::ordered_json j) { return j.dump(); };
    EXPECT_EQ(strip(report_to_json(a.report, config_to_json(f.cfg), 1)), strip(report_to_json(b.report, config_to_json(f.cfg), 1)));
    EXPECT_NEAR(a.report.eds.value, eds(a.report.eff.percent(), a.report.gen.percent(), a.report.spec.percent()).value, 1e-9);
    ASSERT_TRUE(a.report.control.has_value());
    EXPECT_GE(a.report.control->value, 0.0);
    EXPECT_LE(a.report.control->value, 1.0);
}

TEST(Pipeline, ThreadCountDoesNotChangeResults) {
    const auto& f = test::bench();
    const Dataset d = subset(f.data, 4);
    const EditBatch batch = edit_batch(f.model, f.graph, d.requests, f.cfg);
    const auto threaded = report_to_json(evaluate_batch(f.model, f.model, batch.cases, d, f.cfg), {}, 1).dump();
    ::setenv(kSingleThreadEnv, "1", 1);
    const auto single = report_to_json(evaluate_batch(f.model, f.model, batch.cases, d, f.cfg), {}, 1).dump();
    ::unsetenv(kSingleThreadEnv);
    EXPECT_EQ(threaded, single);
}

TEST(Pipeline, SweepSingleValue) {
    const auto& f = test::bench();
    RunConfig cfg = f.cfg;
    cfg.sweep.axis = "tau";
    cfg.sweep.values = {0.5};
    const auto rows = run_sweep(cfg, subset(f.data, 3));
    ASSERT_EQ(rows.size(), 1u);
    EXPECT_EQ(rows[0].status, "ok");
    EXPECT_NEAR(rows[0].eds, eds(rows[0].eff, rows[0].gen, rows[0].spec).value, 1e-9);
    cfg.sweep.values = {-1.0};
    cfg.sweep.axis = "curvature";
    EXPECT_NE(run_sweep(cfg, subset(f.data, 1))[0].status.find("error"), std::string::npos);
}

TEST(ShippedData, MatchesTheGenerator) {
    const fs::path dir = fs::path(HYPE_DATA_DIR) / "benchmark";
    const RunConfig cfg = load_config(dir / "config.json");
    const Dataset d = benchmark_dataset(cfg.benchmark);
    EXPECT_EQ(read_file(dir / "triples.tsv"), triples_tsv(d.triples));
    EXPECT_EQ(read_file(dir / "requests.jsonl"), jsonl(d.requests, request_to_json));
    EXPECT_EQ(read_file(dir / "chains.jsonl"), jsonl(d.chains, chain_to_json));
    EXPECT_EQ(read_requests_file(dir / "requests.jsonl"), d.requests);
}
