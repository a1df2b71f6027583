#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "phaseprobe/activation_store.hpp"
#include "phaseprobe/common.hpp"
#include "phaseprobe/effects.hpp"
#include "phaseprobe/probe.hpp"
#include "phaseprobe/stimgen.hpp"
#include "phaseprobe/udtree.hpp"

namespace phaseprobe {

class PatchError : public Error {
public:
    using Error::Error;
};

enum class PatchSite { embedded_subject_first_subword, wh_first_subword };

std::string_view to_string(PatchSite s);
PatchSite parse_patch_site(std::string_view s);

struct PatchEntry {
    std::int64_t item_id = 0;
    std::string source_key;
    std::string target_key;
    std::uint32_t target_token = 0;  ///< subword index overwritten in the target run
    std::uint32_t source_token = 0;  ///< subword index copied from the source run

    friend bool operator==(const PatchEntry&, const PatchEntry&) = default;
};

struct PatchPlan {
    std::string model;
    std::uint32_t layer = 0;
    Condition source_condition = Condition::infinitival;
    Condition target_condition = Condition::bare;
    PatchSite site = PatchSite::embedded_subject_first_subword;
    std::vector<PatchEntry> entries;
    std::vector<std::string> dropped;  ///< one reason per dropped item

    nlohmann::json to_json() const;
    static PatchPlan from_json(const nlohmann::json& j);

    friend bool operator==(const PatchPlan&, const PatchPlan&) = default;
};

/// One entry per item passing both pairs' invariance checks, in stimulus
/// order. Token indices are the first subword of the site's word, read from
/// the alignment of `store`.
PatchPlan make_patch_plan(std::string model, std::span<const Stimulus> stimuli, const VerdictTable& verdicts,
                          const ActivationStore& store, std::uint32_t L_star, PatchSite site);

inline constexpr double kControlThreshold = 0.05;

struct PatchResult {
    std::string model;
    PatchSite site = PatchSite::embedded_subject_first_subword;
    Pair pair = Pair::wh_esubj;
    double delta_beta = 0;
    BootstrapResult boot;
    std::size_t n_items = 0;
    std::optional<bool> control_pass;  ///< wh site only

    nlohmann::json to_json() const;
    static PatchResult from_json(const nlohmann::json& j);
};

struct PatchScoreOptions {
    std::size_t n_resamples = 1000;
    std::uint64_t seed = 0;
    unsigned threads = 1;
};

/// Throws PatchError unless rows of every planned target stimulus agree
/// bit-for-bit between the two stores at all layers below the plan's layer.
void check_unpatched_layers(const PatchPlan& plan, const ActivationStore& patched, const ActivationStore& target);

/// Δβ = mean over planned items of d_patched − d_target for `pair`, measured
/// at the plan's layer with `probe`; item-level percentile bootstrap CI.
PatchResult compute_delta_beta(const PatchPlan& plan, const ActivationStore& patched, const ActivationStore& target,
                               const ProbeMatrix& probe, Pair pair, std::span<const Stimulus> stimuli,
                               const PatchScoreOptions& options = {});

std::uint64_t patch_seed(std::uint64_t base_seed, std::string_view model, PatchSite site, Pair pair);

struct PatchVerdict {
    std::string model;
    bool pass = false;
    std::string reason;

    nlohmann::json to_json() const;
};

/// pass ⇔ embedded-subject site Δβ(wh_esubj) > 0 with CI excluding zero and
/// the wh-site control |Δβ(wh_esubj)| ≤ 0.05.
PatchVerdict patch_verdict(std::span<const PatchResult> results);

inline constexpr std::string_view kPatchForestCsvHeader =
    "model,site,pair,delta_beta,beta_boot,ci_low,ci_high,n_items,control_pass";

std::string patch_forest_csv(std::span<const PatchResult> results);

}  // namespace phaseprobe
