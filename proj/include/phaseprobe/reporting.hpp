#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "phaseprobe/common.hpp"
#include "phaseprobe/effects.hpp"

namespace phaseprobe {

class ReportError : public Error {
public:
    using Error::Error;
};

enum class Direction { positive, negative };

/// Predicted sign of each (pair, contrast) effect. Only esubj_evb β_fin is
/// predicted negative.
Direction predicted_direction(Pair pair, Contrast contrast);

struct LayerPoint {
    std::uint32_t layer = 0;
    double beta_ols = 0;
    double beta_boot = 0;
    double ci_low = 0;
    double ci_high = 0;
    double q = 1;
    bool significant = false;  ///< q ≤ α and β_ols in the predicted direction
};

struct LayerProfile {
    std::string model;
    Pair pair = Pair::wh_esubj;
    Contrast contrast = Contrast::fin;
    std::vector<LayerPoint> layers;  ///< indexed by layer, contiguous from 0
};

/// Groups effect rows into per (model, pair, contrast) profiles, in first-seen
/// model order. Throws ReportError when a profile's layers are not 0..L−1.
std::vector<LayerProfile> build_profiles(std::span<const EffectRow> rows, double alpha);

/// argmax over layers; ties go to the lowest layer.
std::uint32_t canonical_layer(std::span<const double> beta_fin);

/// Index of the predicted-direction extremum (max, or min for negative
/// direction); ties go to the lowest layer.
std::uint32_t peak_layer(std::span<const double> betas, Direction direction);

double median(std::vector<double> values);

struct ModelSummary {
    std::string model;
    std::uint32_t layer_count = 0;
    std::uint32_t L_star = 0;
    std::uint32_t fin_peak_layer = 0, inf_peak_layer = 0;
    double beta_fin_peak = 0, beta_inf_peak = 0;
    double beta_fin_canon = 0, beta_inf_canon = 0;
    double ratio_canon = 0;  ///< NaN when β_inf at L* is 0
    double median_fin = 0, median_inf = 0;
    double pct_sig_fin = 0, pct_sig_inf = 0;
    bool gradient_pass_peak = false;
    bool gradient_pass_canon = false;
    /// Bootstrap means with percentile CIs at L* (the headline table values).
    BootstrapResult boot_fin_canon, boot_inf_canon;
    std::uint32_t esubj_evb_fin_peak_layer = 0, esubj_evb_inf_peak_layer = 0;
    double esubj_evb_fin_peak = 0, esubj_evb_inf_peak = 0;
    bool esubj_evb_sign_asymmetry = false;

    nlohmann::json to_json() const;
};

/// Summary from the four profiles of one model. Throws ReportError when a
/// profile is missing or the profiles disagree on the layer count.
ModelSummary summarize_model(std::span<const LayerProfile> profiles);

std::vector<ModelSummary> summarize_all(std::span<const LayerProfile> profiles);

inline constexpr std::string_view kProfileCsvHeader =
    "model,pair,contrast,layer,beta_ols,beta_boot,ci_low,ci_high,q,significant";
inline constexpr std::string_view kForestCsvHeader =
    "model,pair,contrast,selection,layer,beta_boot,ci_low,ci_high,peak_layer,peak_beta_boot,peak_ci_low,peak_ci_high";
inline constexpr std::string_view kRobustnessCsvHeader =
    "model,L_star,fin_peak,fin_at_L_star,fin_median,fin_pct_sig,inf_peak,inf_at_L_star,inf_median,inf_pct_sig";

std::string profile_csv(std::span<const LayerProfile> profiles);
/// One row per (model, pair, contrast). wh_esubj rows sit at L*, esubj_evb
/// rows at the predicted-direction peak; the peak columns always give the
/// per-contrast peak.
std::string forest_csv(std::span<const ModelSummary> summaries, std::span<const LayerProfile> profiles);
std::string robustness_csv(std::span<const ModelSummary> summaries);
nlohmann::json run_verdict(std::span<const ModelSummary> summaries, double alpha);

/// Writes profiles_<model>.csv, forest.csv, robustness.csv and verdict.json
/// into `out_dir`.
void emit_reports(std::span<const ModelSummary> summaries, std::span<const LayerProfile> profiles, double alpha,
                  const std::filesystem::path& out_dir);

/// File-system safe form of a model id.
std::string sanitize_model_id(std::string_view model);

}  // namespace phaseprobe
