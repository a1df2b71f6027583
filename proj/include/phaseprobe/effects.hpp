#pragma once

// Condition effects per (model, layer, pair):
//
//   d_ik = β0 + β_fin·1[c_ik = finite] + β_inf·1[c_ik = infinitival] + ε_ik
//
// with item-clustered sandwich covariance, Benjamini-Hochberg q-values over
// all (layer × pair × contrast) tests of a model, and an item-level cluster
// bootstrap on the raw mean difference.

#include <array>
#include <cstdint>
#include <map>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Core>
#include <nlohmann/json.hpp>

#include "phaseprobe/activation_store.hpp"
#include "phaseprobe/common.hpp"
#include "phaseprobe/probe.hpp"
#include "phaseprobe/stimgen.hpp"
#include "phaseprobe/udtree.hpp"

namespace phaseprobe {

class EffectsError : public Error {
public:
    using Error::Error;
};

struct DistanceRow {
    std::int64_t item_id = 0;
    Condition condition = Condition::bare;
    Pair pair = Pair::wh_esubj;
    std::uint32_t layer = 0;
    double distance = 0;
};

enum class CovarianceType { CR0, CR1 };
enum class ReferenceDistribution { t, normal };

struct OlsOptions {
    CovarianceType covariance = CovarianceType::CR1;
    ReferenceDistribution reference = ReferenceDistribution::t;
};

/// Treatment-coded design: columns (intercept, 1[finite], 1[infinitival]).
struct IndicatorDesign {
    Eigen::MatrixXd x;
    Eigen::VectorXd y;
    std::vector<std::int64_t> clusters;  ///< item id per row
};

IndicatorDesign build_design(std::span<const DistanceRow> rows);

struct OlsFit {
    Eigen::Vector3d beta = Eigen::Vector3d::Zero();  ///< (β0, β_fin, β_inf)
    Eigen::Matrix3d covariance = Eigen::Matrix3d::Zero();
    Eigen::VectorXd residuals;
    double se_fin = 0, se_inf = 0;
    double p_fin = 1, p_inf = 1;
    double df = 0;  ///< G − 1 under the t reference
    std::size_t n_items = 0;
    std::size_t n_rows = 0;

    double beta0() const { return beta(0); }
    double beta_fin() const { return beta(1); }
    double beta_inf() const { return beta(2); }
};

/// Throws EffectsError when a condition is missing (singular design) or all
/// rows come from one item.
OlsFit fit_condition_ols(std::span<const DistanceRow> rows, const OlsOptions& options = {});

/// Two-sided p-value for t = beta/se. A zero SE gives p = 1 for β = 0 and 0
/// otherwise.
double two_sided_p(double beta, double se, double df, ReferenceDistribution reference);

struct FdrResult {
    std::vector<double> q;
    std::vector<bool> rejected;
};

/// Benjamini-Hochberg step-up adjusted q-values, in input order.
FdrResult bh_fdr(std::span<const double> p_values, double alpha = 0.05);

struct BootstrapResult {
    double mean = 0;  ///< mean of the bootstrap replicates
    double ci_low = 0;
    double ci_high = 0;
    std::size_t n_resamples = 0;
};

/// Item indices (in [0, n_items)) drawn for resample `b`. The stream depends
/// only on (master_seed, b), never on scheduling.
std::vector<std::uint32_t> resample_indices(std::uint64_t master_seed, std::uint64_t b, std::size_t n_items);

/// Linear-interpolation percentile (Hyndman-Fan type 7) of sorted values.
double percentile_sorted(std::span<const double> sorted, double q);

/// Percentile bootstrap of mean(target) − mean(bare), resampling whole items
/// with replacement. Items are ordered by id before drawing.
BootstrapResult cluster_bootstrap(std::span<const DistanceRow> rows, Contrast contrast, std::size_t n_resamples,
                                  std::uint64_t master_seed, unsigned threads = 1);

/// Percentile bootstrap of the mean of per-item values.
BootstrapResult mean_bootstrap(std::span<const double> values, std::size_t n_resamples, std::uint64_t master_seed,
                               unsigned threads = 1);

/// Master seed for one (model, pair, contrast) bootstrap family.
std::uint64_t bootstrap_seed(std::uint64_t base_seed, std::string_view model, Pair pair, Contrast contrast);

struct EffectEstimate {
    std::uint32_t layer = 0;
    Pair pair = Pair::wh_esubj;
    double beta0 = 0, beta_fin = 0, beta_inf = 0;
    double se_fin = 0, se_inf = 0;
    double p_fin = 1, p_inf = 1;
    double q_fin = 1, q_inf = 1;
    BootstrapResult boot_fin, boot_inf;
    std::size_t n_items = 0;
    std::size_t n_rows = 0;
};

/// One row of the flat effects table.
struct EffectRow {
    std::string model;
    std::uint32_t layer = 0;
    Pair pair = Pair::wh_esubj;
    Contrast contrast = Contrast::fin;
    double beta_ols = 0, se = 0, p = 1, q = 1;
    double beta_boot = 0, ci_low = 0, ci_high = 0;
    std::size_t n_items = 0, n_rows = 0;
};

struct EffectsOptions {
    double alpha = 0.05;
    std::size_t n_resamples = 1000;
    std::uint64_t seed = 0;
    OlsOptions ols;
    unsigned threads = 1;
};

/// Everything assemble_estimates needs for one model.
struct ModelRun {
    std::string model_id;
    const ActivationStore* store = nullptr;
    std::map<std::uint32_t, ProbeMatrix> probes;  ///< by layer
    std::span<const Stimulus> stimuli;
    const VerdictTable* verdicts = nullptr;
};

/// Probe distances for the pair's tagged words of every item that passes the
/// pair's invariance verdict.
std::vector<DistanceRow> distance_rows(const ModelRun& run, std::uint32_t layer, Pair pair);

/// Per (layer, pair) estimates, sorted by layer then pair. FDR runs over all
/// 4·L tests of the model.
std::vector<EffectEstimate> assemble_estimates(const ModelRun& run, const EffectsOptions& options);

std::vector<EffectRow> flatten_estimates(const std::string& model, std::span<const EffectEstimate> estimates);

inline constexpr std::string_view kEffectsCsvHeader =
    "model,layer,pair,contrast,beta_ols,se,p,q,beta_boot,ci_low,ci_high,n_items,n_rows";

std::string write_effects_csv(std::span<const EffectRow> rows);
nlohmann::json effects_to_json(std::span<const EffectRow> rows);
std::vector<EffectRow> effects_from_json(const nlohmann::json& j);

}  // namespace phaseprobe
