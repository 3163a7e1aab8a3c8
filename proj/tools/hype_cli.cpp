// hype: batch driver for graph building, fitting, editing, evaluation and sweeps.
//
//   hype <command> --config run.json [--seed N] [--out DIR]
//
// Exit codes: 0 ok, 1 report schema violation, 2 input or IO error,
// 3 numeric or internal error.

#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include "CLI11.hpp"

#include "hype/config.hpp"
#include "hype/pipeline.hpp"

int main(int argc, char** argv) {
    CLI::App app{"hyperbolic model editing toolkit"};
    app.require_subcommand(1);

    std::string config_path;
    std::optional<std::uint64_t> seed;
    std::string out_dir;
    std::string axis;
    std::vector<double> values;

    auto add_common = [&](CLI::App* cmd, bool config_required) {
        auto* opt = cmd->add_option("--config", config_path, "run configuration (JSON)")->check(CLI::ExistingFile);
        if (config_required) opt->required();
        cmd->add_option("--seed", seed, "overrides the configured seed");
        cmd->add_option("--out", out_dir, "output directory, overrides paths.out_dir");
    };

    auto* gen = app.add_subcommand("generate-benchmark", "write the synthetic triples, requests and chains");
    add_common(gen, false);
    auto* graph = app.add_subcommand("build-graph", "build the hyperbolic graph and its summary");
    add_common(graph, true);
    auto* fit = app.add_subcommand("fit", "fit the toy model to the triples");
    add_common(fit, true);
    auto* edit = app.add_subcommand("edit", "apply every request, write the edited checkpoint and outcomes");
    add_common(edit, true);
    auto* eval = app.add_subcommand("evaluate", "score an edit batch and write listing, aggregate and CSV reports");
    add_common(eval, true);
    auto* sweep = app.add_subcommand("sweep", "run edit and evaluate over curvature or tau values");
    add_common(sweep, true);
    sweep->add_option("--axis", axis, "curvature or tau")->check(CLI::IsMember({"curvature", "tau"}));
    sweep->add_option("--values", values, "values to sweep");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int rc = app.exit(e);
        return rc == 0 ? 0 : hype::kExitInput;
    }

    try {
        hype::RunConfig cfg = config_path.empty() ? hype::RunConfig{} : hype::load_config(config_path);
        if (seed) cfg.seed = *seed;
        if (!out_dir.empty()) cfg.paths.out_dir = std::filesystem::absolute(out_dir).string();
        if (!axis.empty()) cfg.sweep.axis = axis;
        if (!values.empty()) cfg.sweep.values = values;
        cfg.validate();

        if (gen->parsed()) return hype::cmd_generate_benchmark(cfg);
        if (graph->parsed()) return hype::cmd_build_graph(cfg, std::cout);
        if (fit->parsed()) return hype::cmd_fit(cfg, std::cout);
        if (edit->parsed()) return hype::cmd_edit(cfg, std::cerr);
        if (eval->parsed()) return hype::cmd_evaluate(cfg, std::cout);
        if (sweep->parsed()) return hype::cmd_sweep(cfg, std::cerr);
    } catch (const std::exception& e) {
        std::cerr << "hype: " << e.what() << '\n';
        return hype::exit_code_for_current_exception();
    }
    return hype::kExitOk;
}
