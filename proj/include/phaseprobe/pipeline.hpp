#pragma once

// Stage orchestration for a run directory:
//
//   stimuli      → stimuli.jsonl
//   verify       → verdicts.jsonl, verification.log
//   train        → probes/<model>/probe_<layer>.{json,f32}, probes/<model>/quality.json
//   effects      → effects.csv, effects.json
//   report       → report/{profiles_<model>.csv, forest.csv, robustness.csv, verdict.json}
//   patch-plan   → patch/<model>/plan_<site>.json
//   patch-score  → report/patch_forest.csv, report/patch_verdict.json
//
// Every stage records the checksums of what it read and wrote in
// .stamps/<stage>.json and is skipped when nothing changed.

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "phaseprobe/common.hpp"
#include "phaseprobe/effects.hpp"
#include "phaseprobe/patchlab.hpp"
#include "phaseprobe/probe.hpp"
#include "phaseprobe/stimgen.hpp"

namespace phaseprobe {

class PipelineError : public Error {
public:
    using Error::Error;
};

/// An input the stage needs does not exist yet.
class MissingArtifact : public PipelineError {
public:
    using PipelineError::PipelineError;
};

enum class Stage { stimuli, verify, train, effects, report, patch_plan, patch_score };

inline constexpr std::array<Stage, 7> kStages = {Stage::stimuli, Stage::verify,     Stage::train,      Stage::effects,
                                                 Stage::report,  Stage::patch_plan, Stage::patch_score};

std::string_view to_string(Stage s);
Stage parse_stage(std::string_view s);

struct ModelConfig {
    std::string id;
    std::filesystem::path store;         ///< activations of the stimuli
    std::filesystem::path train_store;   ///< probe-training corpus activations
    std::filesystem::path train_conllu;  ///< its parses, matched by sent_id
    std::optional<std::filesystem::path> dev_store, dev_conllu;
    std::map<PatchSite, std::filesystem::path> patched_stores;
};

struct RunConfig {
    std::optional<std::filesystem::path> lexicon;
    SubjectMode subject_mode = SubjectMode::disjoint;
    std::size_t n_items = 1000;
    std::uint64_t seed = 0;
    ProbeConfig probe;
    bool probe_seed_explicit = false;  ///< otherwise the probe seed follows `seed`
    double alpha = 0.05;
    std::size_t bootstrap_n = 1000;
    unsigned threads = 1;
    std::filesystem::path out_dir = "phaseprobe-run";
    CovarianceType covariance = CovarianceType::CR1;
    ReferenceDistribution reference = ReferenceDistribution::t;
    std::optional<std::filesystem::path> conllu;  ///< parses of stimuli.jsonl
    std::vector<ModelConfig> models;
    /// Any of "gradient", "asymmetry", "patch".
    std::vector<std::string> require_verdicts;

    /// Relative paths resolve against `base_dir`.
    static RunConfig from_json(const nlohmann::json& j, const std::filesystem::path& base_dir = {});
    static RunConfig load(const std::filesystem::path& path);
    nlohmann::json to_json() const;
    void validate() const;

    void set_seed(std::uint64_t s);
    ProbeConfig effective_probe() const;
};

struct StageResult {
    Stage stage = Stage::stimuli;
    bool skipped = false;  ///< inputs and outputs unchanged since the last run
    std::vector<std::filesystem::path> outputs;
    std::vector<std::string> log;
    /// Set when the stage evaluates a requested verdict.
    std::optional<bool> verdict_pass;
};

StageResult run_stage(Stage stage, const RunConfig& config);

/// Runs `stages` in order, stopping at the first error.
std::vector<StageResult> run_stages(std::span<const Stage> stages, const RunConfig& config);

/// 0 when every requested verdict evaluated in `results` passed (or none was
/// requested), 1 otherwise.
int exit_status(std::span<const StageResult> results);

}  // namespace phaseprobe
