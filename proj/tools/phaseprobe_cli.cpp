// phaseprobe: runs pipeline stages from a JSON run configuration.

#include <cstdlib>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <fmt/format.h>

#include "phaseprobe/io.hpp"
#include "phaseprobe/pipeline.hpp"
#include "phaseprobe/synthetic.hpp"

namespace {

struct Overrides {
    std::string config;
    std::optional<std::uint64_t> seed;
    std::optional<unsigned> threads;
    std::optional<std::string> out_dir;
    std::optional<std::size_t> n_items;
    std::optional<double> alpha;
    std::optional<std::size_t> bootstrap_n;
    std::optional<std::string> lexicon;
    std::optional<std::string> conllu;
    std::optional<std::string> subject_mode;
    std::optional<std::string> cov_type;
    std::optional<std::string> reference;
    std::vector<std::string> require;
};

void add_run_options(CLI::App* app, Overrides& o) {
    app->add_option("--config", o.config, "Run configuration (JSON)")->check(CLI::ExistingFile);
    app->add_option("--seed", o.seed, "Master seed");
    app->add_option("--threads", o.threads, "Worker threads")->check(CLI::PositiveNumber);
    app->add_option("--out-dir", o.out_dir, "Run directory");
    app->add_option("--n-items", o.n_items, "Items to sample");
    app->add_option("--alpha", o.alpha, "FDR level");
    app->add_option("--bootstrap-n", o.bootstrap_n, "Bootstrap resamples");
    app->add_option("--lexicon", o.lexicon, "Lexicon JSON");
    app->add_option("--conllu", o.conllu, "CoNLL-U parses of the stimuli");
    app->add_option("--subject-mode", o.subject_mode, "disjoint or shared")->check(CLI::IsMember({"disjoint", "shared"}));
    app->add_option("--cov-type", o.cov_type, "CR1 or CR0")->check(CLI::IsMember({"CR1", "CR0"}));
    app->add_option("--reference", o.reference, "t or normal")->check(CLI::IsMember({"t", "normal"}));
    app->add_option("--require", o.require, "Verdicts that must pass: gradient, asymmetry, patch");
}

phaseprobe::RunConfig build_config(const Overrides& o) {
    nlohmann::json j = nlohmann::json::object();
    std::filesystem::path base;
    if (!o.config.empty()) {
        j = nlohmann::json::parse(phaseprobe::read_text_file(o.config));
        base = std::filesystem::path(o.config).parent_path();
    }
    // Flags win over the file; flag paths are relative to the working directory.
    const auto cwd = std::filesystem::current_path();
    if (o.seed) j["seed"] = *o.seed;
    if (o.threads) j["threads"] = *o.threads;
    if (o.out_dir) j["out_dir"] = (cwd / *o.out_dir).string();
    if (o.n_items) j["n_items"] = *o.n_items;
    if (o.alpha) j["alpha"] = *o.alpha;
    if (o.bootstrap_n) j["bootstrap_n"] = *o.bootstrap_n;
    if (o.lexicon) j["lexicon"] = (cwd / *o.lexicon).string();
    if (o.conllu) j["conllu"] = (cwd / *o.conllu).string();
    if (o.subject_mode) j["subject_mode"] = *o.subject_mode;
    if (o.cov_type) j["cov_type"] = *o.cov_type;
    if (o.reference) j["reference"] = *o.reference;
    if (!o.require.empty()) j["require_verdicts"] = o.require;
    return phaseprobe::RunConfig::from_json(j, base);
}

void print(const phaseprobe::StageResult& r) {
    std::cout << fmt::format("[{}]{}\n", phaseprobe::to_string(r.stage), r.skipped ? " skipped, inputs unchanged" : "");
    for (const auto& line : r.log) std::cout << "  " << line << "\n";
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"phaseprobe: structural-probing laboratory"};
    app.require_subcommand(1);
    Overrides o;
    std::vector<std::string> run_stages;
    for (auto stage : phaseprobe::kStages) {
        auto* sub = app.add_subcommand(std::string(phaseprobe::to_string(stage)), fmt::format("Run the {} stage", phaseprobe::to_string(stage)));
        add_run_options(sub, o);
    }
    auto* run = app.add_subcommand("run", "Run several stages in order (default: all)");
    add_run_options(run, o);
    run->add_option("--stages", run_stages, "Stages to run");

    std::string fixture_dir;
    phaseprobe::FixtureOptions fixture;
    auto* fix = app.add_subcommand("fixture", "Write a synthetic fixture run (stores, parses, config.json)");
    fix->add_option("dir", fixture_dir, "Output directory")->required();
    fix->add_option("--n-items", fixture.n_items, "Items");
    fix->add_option("--layers", fixture.layers, "Layers");
    fix->add_option("--seed", fixture.seed, "Seed");

    CLI11_PARSE(app, argc, argv);

    try {
        if (fix->parsed()) {
            phaseprobe::write_synthetic_fixture(fixture_dir, fixture);
            std::cout << "fixture written to " << fixture_dir << "; run: phaseprobe run --config " << fixture_dir
                      << "/config.json\n";
            return 0;
        }
        const auto config = build_config(o);
        std::vector<phaseprobe::Stage> stages;
        if (run->parsed()) {
            if (run_stages.empty()) stages.assign(phaseprobe::kStages.begin(), phaseprobe::kStages.end());
            for (const auto& s : run_stages) stages.push_back(phaseprobe::parse_stage(s));
        } else {
            stages.push_back(phaseprobe::parse_stage(app.get_subcommands().front()->get_name()));
        }
        std::vector<phaseprobe::StageResult> results;
        for (auto s : stages) {
            results.push_back(phaseprobe::run_stage(s, config));
            print(results.back());
        }
        return phaseprobe::exit_status(results);
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 2;
    }
}
