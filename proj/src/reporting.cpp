#include "phaseprobe/reporting.hpp"

#include <algorithm>
#include <cmath>
#include <map>

#include "phaseprobe/io.hpp"

namespace phaseprobe {
namespace {

nlohmann::json number_or_null(double v) { return std::isfinite(v) ? nlohmann::json(v) : nlohmann::json(nullptr); }

const LayerProfile* find_profile(std::span<const LayerProfile> profiles, Pair pair, Contrast contrast) {
    for (const auto& p : profiles)
        if (p.pair == pair && p.contrast == contrast) return &p;
    return nullptr;
}

std::vector<double> betas(const LayerProfile& p) {
    std::vector<double> out;
    out.reserve(p.layers.size());
    for (const auto& l : p.layers) out.push_back(l.beta_ols);
    return out;
}

double fraction_significant(const LayerProfile& p) {
    if (p.layers.empty()) return 0.0;
    const auto n = std::count_if(p.layers.begin(), p.layers.end(), [](const LayerPoint& l) { return l.significant; });
    return static_cast<double>(n) / static_cast<double>(p.layers.size());
}

BootstrapResult boot_at(const LayerProfile& p, std::uint32_t layer) {
    const auto& l = p.layers.at(layer);
    return {l.beta_boot, l.ci_low, l.ci_high, 0};
}

}  // namespace

Direction predicted_direction(Pair pair, Contrast contrast) {
    return pair == Pair::esubj_evb && contrast == Contrast::fin ? Direction::negative : Direction::positive;
}

std::vector<LayerProfile> build_profiles(std::span<const EffectRow> rows, double alpha) {
    std::vector<std::string> models;
    std::map<std::tuple<std::string, Pair, Contrast>, std::map<std::uint32_t, LayerPoint>> grouped;
    for (const auto& r : rows) {
        if (std::find(models.begin(), models.end(), r.model) == models.end()) models.push_back(r.model);
        const bool right_sign = predicted_direction(r.pair, r.contrast) == Direction::positive ? r.beta_ols > 0
                                                                                               : r.beta_ols < 0;
        LayerPoint point{r.layer, r.beta_ols, r.beta_boot, r.ci_low, r.ci_high, r.q, r.q <= alpha && right_sign};
        auto& layers = grouped[{r.model, r.pair, r.contrast}];
        if (!layers.emplace(r.layer, point).second)
            throw ReportError("duplicate estimate for " + r.model + " layer " + std::to_string(r.layer) + " " +
                              std::string(to_string(r.pair)) + "/" + std::string(to_string(r.contrast)));
    }
    std::vector<LayerProfile> out;
    for (const auto& model : models) {
        for (Pair pair : kPairs) {
            for (Contrast contrast : kContrasts) {
                const auto it = grouped.find({model, pair, contrast});
                if (it == grouped.end()) continue;
                LayerProfile profile{model, pair, contrast, {}};
                std::uint32_t expected = 0;
                for (const auto& [layer, point] : it->second) {
                    if (layer != expected)
                        throw ReportError("model " + model + " " + std::string(to_string(pair)) + "/" +
                                          std::string(to_string(contrast)) + ": layer " + std::to_string(expected) +
                                          " is missing");
                    profile.layers.push_back(point);
                    ++expected;
                }
                out.push_back(std::move(profile));
            }
        }
    }
    return out;
}

std::uint32_t canonical_layer(std::span<const double> beta_fin) { return peak_layer(beta_fin, Direction::positive); }

std::uint32_t peak_layer(std::span<const double> values, Direction direction) {
    if (values.empty()) throw ReportError("peak of an empty profile");
    std::size_t best = 0;
    for (std::size_t i = 1; i < values.size(); ++i) {
        const bool better = direction == Direction::positive ? values[i] > values[best] : values[i] < values[best];
        if (better) best = i;
    }
    return static_cast<std::uint32_t>(best);
}

double median(std::vector<double> values) {
    if (values.empty()) throw ReportError("median of an empty profile");
    std::sort(values.begin(), values.end());
    const auto n = values.size();
    return n % 2 == 1 ? values[n / 2] : 0.5 * (values[n / 2 - 1] + values[n / 2]);
}

ModelSummary summarize_model(std::span<const LayerProfile> profiles) {
    if (profiles.empty()) throw ReportError("summarize_model: no profiles");
    const auto& model = profiles.front().model;
    std::array<const LayerProfile*, 4> p{};
    std::size_t k = 0;
    for (Pair pair : kPairs)
        for (Contrast c : kContrasts) {
            p[k] = find_profile(profiles, pair, c);
            if (p[k] == nullptr)
                throw ReportError("model " + model + ": missing " + std::string(to_string(pair)) + "/" +
                                  std::string(to_string(c)) + " estimates");
            if (p[k]->layers.size() != profiles.front().layers.size() || p[k]->layers.empty())
                throw ReportError("model " + model + ": missing layers in " + std::string(to_string(pair)) + "/" +
                                  std::string(to_string(c)));
            ++k;
        }
    const auto& wh_fin = *p[0];
    const auto& wh_inf = *p[1];
    const auto& ee_fin = *p[2];
    const auto& ee_inf = *p[3];

    ModelSummary s;
    s.model = model;
    s.layer_count = static_cast<std::uint32_t>(wh_fin.layers.size());
    const auto fin = betas(wh_fin);
    const auto inf = betas(wh_inf);
    s.L_star = canonical_layer(fin);
    s.fin_peak_layer = peak_layer(fin, Direction::positive);
    s.inf_peak_layer = peak_layer(inf, Direction::positive);
    s.beta_fin_peak = fin[s.fin_peak_layer];
    s.beta_inf_peak = inf[s.inf_peak_layer];
    s.beta_fin_canon = fin[s.L_star];
    s.beta_inf_canon = inf[s.L_star];
    s.ratio_canon = s.beta_inf_canon != 0 ? s.beta_fin_canon / s.beta_inf_canon : std::nan("");
    s.median_fin = median(fin);
    s.median_inf = median(inf);
    s.pct_sig_fin = fraction_significant(wh_fin);
    s.pct_sig_inf = fraction_significant(wh_inf);
    s.gradient_pass_peak = s.beta_fin_peak > s.beta_inf_peak && s.beta_inf_peak > 0;
    s.gradient_pass_canon = s.beta_fin_canon > s.beta_inf_canon && s.beta_inf_canon > 0;
    s.boot_fin_canon = boot_at(wh_fin, s.L_star);
    s.boot_inf_canon = boot_at(wh_inf, s.L_star);

    const auto efin = betas(ee_fin);
    const auto einf = betas(ee_inf);
    s.esubj_evb_fin_peak_layer = peak_layer(efin, predicted_direction(Pair::esubj_evb, Contrast::fin));
    s.esubj_evb_inf_peak_layer = peak_layer(einf, predicted_direction(Pair::esubj_evb, Contrast::inf));
    s.esubj_evb_fin_peak = efin[s.esubj_evb_fin_peak_layer];
    s.esubj_evb_inf_peak = einf[s.esubj_evb_inf_peak_layer];
    s.esubj_evb_sign_asymmetry = s.esubj_evb_fin_peak < 0 && s.esubj_evb_inf_peak > 0;
    return s;
}

std::vector<ModelSummary> summarize_all(std::span<const LayerProfile> profiles) {
    std::vector<ModelSummary> out;
    std::size_t start = 0;
    while (start < profiles.size()) {
        std::size_t end = start;
        while (end < profiles.size() && profiles[end].model == profiles[start].model) ++end;
        out.push_back(summarize_model(profiles.subspan(start, end - start)));
        start = end;
    }
    return out;
}

nlohmann::json ModelSummary::to_json() const {
    auto boot = [](const BootstrapResult& b) {
        return nlohmann::json{{"beta_boot", b.mean}, {"ci_low", b.ci_low}, {"ci_high", b.ci_high}};
    };
    return {{"model", model},
            {"layer_count", layer_count},
            {"L_star", L_star},
            {"fin_peak_layer", fin_peak_layer},
            {"inf_peak_layer", inf_peak_layer},
            {"beta_fin_peak", beta_fin_peak},
            {"beta_inf_peak", beta_inf_peak},
            {"beta_fin_canon", beta_fin_canon},
            {"beta_inf_canon", beta_inf_canon},
            {"ratio_canon", number_or_null(ratio_canon)},
            {"median_fin", median_fin},
            {"median_inf", median_inf},
            {"pct_sig_fin", pct_sig_fin},
            {"pct_sig_inf", pct_sig_inf},
            {"gradient_pass_peak", gradient_pass_peak},
            {"gradient_pass_canon", gradient_pass_canon},
            {"fin_canon_bootstrap", boot(boot_fin_canon)},
            {"inf_canon_bootstrap", boot(boot_inf_canon)},
            {"esubj_evb_fin_peak_layer", esubj_evb_fin_peak_layer},
            {"esubj_evb_inf_peak_layer", esubj_evb_inf_peak_layer},
            {"esubj_evb_fin_peak", esubj_evb_fin_peak},
            {"esubj_evb_inf_peak", esubj_evb_inf_peak},
            {"esubj_evb_sign_asymmetry", esubj_evb_sign_asymmetry}};
}

std::string profile_csv(std::span<const LayerProfile> profiles) {
    std::string out(kProfileCsvHeader);
    out += '\n';
    for (const auto& p : profiles)
        for (const auto& l : p.layers)
            out += p.model + ',' + std::string(to_string(p.pair)) + ',' + std::string(to_string(p.contrast)) + ',' +
                   std::to_string(l.layer) + ',' + format_double(l.beta_ols) + ',' + format_double(l.beta_boot) + ',' +
                   format_double(l.ci_low) + ',' + format_double(l.ci_high) + ',' + format_double(l.q) + ',' +
                   (l.significant ? "true" : "false") + '\n';
    return out;
}

std::string forest_csv(std::span<const ModelSummary> summaries, std::span<const LayerProfile> profiles) {
    std::string out(kForestCsvHeader);
    out += '\n';
    for (const auto& s : summaries) {
        for (Pair pair : kPairs) {
            for (Contrast c : kContrasts) {
                const LayerProfile* p = nullptr;
                for (const auto& candidate : profiles)
                    if (candidate.model == s.model && candidate.pair == pair && candidate.contrast == c) p = &candidate;
                if (p == nullptr) throw ReportError("forest: missing profile for " + s.model);
                const auto peak = peak_layer(betas(*p), predicted_direction(pair, c));
                const bool canonical = pair == Pair::wh_esubj;
                const auto layer = canonical ? s.L_star : peak;
                const auto& at = p->layers.at(layer);
                const auto& pk = p->layers.at(peak);
                out += s.model + ',' + std::string(to_string(pair)) + ',' + std::string(to_string(c)) + ',' +
                       (canonical ? "canonical" : "peak") + ',' + std::to_string(layer) + ',' +
                       format_double(at.beta_boot) + ',' + format_double(at.ci_low) + ',' + format_double(at.ci_high) +
                       ',' + std::to_string(peak) + ',' + format_double(pk.beta_boot) + ',' + format_double(pk.ci_low) +
                       ',' + format_double(pk.ci_high) + '\n';
            }
        }
    }
    return out;
}

std::string robustness_csv(std::span<const ModelSummary> summaries) {
    std::string out(kRobustnessCsvHeader);
    out += '\n';
    for (const auto& s : summaries)
        out += s.model + ',' + std::to_string(s.L_star) + ',' + format_double(s.beta_fin_peak) + ',' +
               format_double(s.beta_fin_canon) + ',' + format_double(s.median_fin) + ',' + format_double(s.pct_sig_fin) +
               ',' + format_double(s.beta_inf_peak) + ',' + format_double(s.beta_inf_canon) + ',' +
               format_double(s.median_inf) + ',' + format_double(s.pct_sig_inf) + '\n';
    return out;
}

nlohmann::json run_verdict(std::span<const ModelSummary> summaries, double alpha) {
    nlohmann::json models = nlohmann::json::array();
    bool all_gradient = !summaries.empty();
    bool all_asymmetry = !summaries.empty();
    for (const auto& s : summaries) {
        models.push_back(s.to_json());
        all_gradient = all_gradient && s.gradient_pass_canon;
        all_asymmetry = all_asymmetry && s.esubj_evb_sign_asymmetry;
    }
    return {{"alpha", alpha},
            {"models", models},
            {"all_gradient_pass_canon", all_gradient},
            {"all_esubj_evb_sign_asymmetry", all_asymmetry}};
}

std::string sanitize_model_id(std::string_view model) {
    std::string out(model);
    for (auto& c : out)
        if (!(std::isalnum(static_cast<unsigned char>(c)) || c == '-' || c == '_' || c == '.')) c = '_';
    return out;
}

void emit_reports(std::span<const ModelSummary> summaries, std::span<const LayerProfile> profiles, double alpha,
                  const std::filesystem::path& out_dir) {
    std::error_code ec;
    std::filesystem::create_directories(out_dir, ec);
    if (ec) throw ReportError("cannot create report directory " + out_dir.string() + ": " + ec.message());
    try {
        std::size_t start = 0;
        while (start < profiles.size()) {
            std::size_t end = start;
            while (end < profiles.size() && profiles[end].model == profiles[start].model) ++end;
            write_file_atomic(out_dir / ("profiles_" + sanitize_model_id(profiles[start].model) + ".csv"),
                              profile_csv(profiles.subspan(start, end - start)));
            start = end;
        }
        write_file_atomic(out_dir / "forest.csv", forest_csv(summaries, profiles));
        write_file_atomic(out_dir / "robustness.csv", robustness_csv(summaries));
        write_file_atomic(out_dir / "verdict.json", run_verdict(summaries, alpha).dump(2) + "\n");
    } catch (const IoError& e) {
        throw ReportError(e.what());
    }
}

}  // namespace phaseprobe
