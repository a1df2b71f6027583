#include "phaseprobe/effects.hpp"

#include <boost/math/distributions/normal.hpp>
#include <boost/math/distributions/students_t.hpp>

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <numeric>
#include <set>

#include "phaseprobe/io.hpp"
#include "phaseprobe/parallel.hpp"
#include "phaseprobe/rng.hpp"

namespace phaseprobe {

IndicatorDesign build_design(std::span<const DistanceRow> rows) {
    IndicatorDesign design;
    const auto n = static_cast<Eigen::Index>(rows.size());
    design.x = Eigen::MatrixXd::Zero(n, 3);
    design.y.resize(n);
    design.clusters.reserve(rows.size());
    for (Eigen::Index i = 0; i < n; ++i) {
        const auto& r = rows[static_cast<std::size_t>(i)];
        if (!std::isfinite(r.distance))
            throw EffectsError("non-finite distance for item " + std::to_string(r.item_id));
        design.x(i, 0) = 1.0;
        design.x(i, 1) = r.condition == Condition::finite ? 1.0 : 0.0;
        design.x(i, 2) = r.condition == Condition::infinitival ? 1.0 : 0.0;
        design.y(i) = r.distance;
        design.clusters.push_back(r.item_id);
    }
    return design;
}

double two_sided_p(double beta, double se, double df, ReferenceDistribution reference) {
    if (!(se > 0)) return beta == 0 ? 1.0 : 0.0;
    const double t = std::abs(beta / se);
    if (reference == ReferenceDistribution::normal) {
        const boost::math::normal dist;
        return std::min(1.0, 2.0 * boost::math::cdf(boost::math::complement(dist, t)));
    }
    const boost::math::students_t dist(df);
    return std::min(1.0, 2.0 * boost::math::cdf(boost::math::complement(dist, t)));
}

OlsFit fit_condition_ols(std::span<const DistanceRow> rows, const OlsOptions& options) {
    std::array<std::size_t, 3> per_condition{};
    std::set<std::int64_t> items;
    for (const auto& r : rows) {
        ++per_condition[static_cast<std::size_t>(r.condition)];
        items.insert(r.item_id);
        if (r.pair != rows.front().pair || r.layer != rows.front().layer)
            throw EffectsError("fit_condition_ols: rows mix layers or pairs");
    }
    for (Condition c : kConditions)
        if (per_condition[static_cast<std::size_t>(c)] == 0)
            throw EffectsError("fit_condition_ols: singular design, no rows for condition " +
                               std::string(to_string(c)));
    if (items.size() < 2)
        throw EffectsError("fit_condition_ols: cluster-robust errors need at least 2 items, got " +
                           std::to_string(items.size()));

    const auto design = build_design(rows);
    const auto& x = design.x;
    const Eigen::Matrix3d xtx = x.transpose() * x;
    const Eigen::LDLT<Eigen::Matrix3d> ldlt(xtx);
    if (ldlt.info() != Eigen::Success || !ldlt.isPositive())
        throw EffectsError("fit_condition_ols: singular design matrix");
    const Eigen::Matrix3d bread = ldlt.solve(Eigen::Matrix3d::Identity());

    OlsFit fit;
    fit.n_rows = rows.size();
    fit.n_items = items.size();
    fit.beta = bread * (x.transpose() * design.y);
    fit.residuals = design.y - x * fit.beta;

    std::map<std::int64_t, Eigen::Vector3d> scores;
    for (Eigen::Index i = 0; i < x.rows(); ++i) {
        auto [it, inserted] = scores.try_emplace(design.clusters[static_cast<std::size_t>(i)], Eigen::Vector3d::Zero());
        it->second += x.row(i).transpose() * fit.residuals(i);
    }
    Eigen::Matrix3d meat = Eigen::Matrix3d::Zero();
    for (const auto& [id, s] : scores) meat += s * s.transpose();

    const double g = static_cast<double>(fit.n_items);
    const double n = static_cast<double>(fit.n_rows);
    constexpr double k = 3.0;
    double scale = 1.0;
    if (options.covariance == CovarianceType::CR1) scale = g / (g - 1.0) * (n - 1.0) / (n - k);
    fit.covariance = scale * bread * meat * bread;
    fit.df = g - 1.0;
    fit.se_fin = std::sqrt(std::max(0.0, fit.covariance(1, 1)));
    fit.se_inf = std::sqrt(std::max(0.0, fit.covariance(2, 2)));
    fit.p_fin = two_sided_p(fit.beta(1), fit.se_fin, fit.df, options.reference);
    fit.p_inf = two_sided_p(fit.beta(2), fit.se_inf, fit.df, options.reference);
    return fit;
}

FdrResult bh_fdr(std::span<const double> p_values, double alpha) {
    const std::size_t m = p_values.size();
    FdrResult out;
    out.q.assign(m, 1.0);
    out.rejected.assign(m, false);
    if (m == 0) return out;
    for (double p : p_values)
        if (!(p >= 0.0 && p <= 1.0)) throw EffectsError("bh_fdr: p-value " + format_double(p) + " outside [0, 1]");

    std::vector<std::size_t> order(m);
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return p_values[a] < p_values[b]; });
    double running = 1.0;
    for (std::size_t rank = m; rank >= 1; --rank) {
        const std::size_t idx = order[rank - 1];
        running = std::min(running, p_values[idx] * static_cast<double>(m) / static_cast<double>(rank));
        out.q[idx] = std::min(1.0, running);
    }
    for (std::size_t i = 0; i < m; ++i) out.rejected[i] = out.q[i] <= alpha;
    return out;
}

std::vector<std::uint32_t> resample_indices(std::uint64_t master_seed, std::uint64_t b, std::size_t n_items) {
    SplitMix64 rng(derive_seed(master_seed, b));
    std::vector<std::uint32_t> out(n_items);
    for (auto& i : out) i = static_cast<std::uint32_t>(rng.below(n_items));
    return out;
}

double percentile_sorted(std::span<const double> sorted, double q) {
    if (sorted.empty()) throw EffectsError("percentile of an empty sample");
    const double h = q * static_cast<double>(sorted.size() - 1);
    const auto lo = static_cast<std::size_t>(std::floor(h));
    const auto hi = std::min(lo + 1, sorted.size() - 1);
    const double frac = h - static_cast<double>(lo);
    // Equal neighbours return exactly, so degenerate samples give exact CIs.
    if (sorted[lo] == sorted[hi]) return sorted[lo];
    return sorted[lo] + frac * (sorted[hi] - sorted[lo]);
}

namespace {

BootstrapResult summarize_replicates(std::vector<double> reps) {
    BootstrapResult out;
    out.n_resamples = reps.size();
    if (reps.empty()) return out;
    // Sum in resample order so the mean does not depend on the sort.
    out.mean = std::accumulate(reps.begin(), reps.end(), 0.0) / static_cast<double>(reps.size());
    if (std::all_of(reps.begin(), reps.end(), [&](double r) { return r == reps.front(); })) out.mean = reps.front();
    std::sort(reps.begin(), reps.end());
    out.ci_low = percentile_sorted(reps, 0.025);
    out.ci_high = percentile_sorted(reps, 0.975);
    return out;
}

}  // namespace

BootstrapResult cluster_bootstrap(std::span<const DistanceRow> rows, Contrast contrast, std::size_t n_resamples,
                                  std::uint64_t master_seed, unsigned threads) {
    const Condition target = target_condition(contrast);
    // Per item: (sum, count) for bare and target rows.
    struct Cell {
        double bare_sum = 0, target_sum = 0;
        std::size_t bare_n = 0, target_n = 0;
    };
    std::map<std::int64_t, Cell> cells;
    for (const auto& r : rows) {
        auto& c = cells[r.item_id];
        if (r.condition == Condition::bare) {
            c.bare_sum += r.distance;
            ++c.bare_n;
        } else if (r.condition == target) {
            c.target_sum += r.distance;
            ++c.target_n;
        }
    }
    if (cells.size() < 2) throw EffectsError("cluster_bootstrap needs at least 2 items, got " + std::to_string(cells.size()));
    std::vector<Cell> items;
    items.reserve(cells.size());
    for (const auto& [id, c] : cells) {
        if (c.bare_n == 0 || c.target_n == 0)
            throw EffectsError("cluster_bootstrap: item " + std::to_string(id) + " lacks a bare or " +
                               std::string(to_string(target)) + " row");
        items.push_back(c);
    }

    std::vector<double> reps(n_resamples);
    parallel_for(n_resamples, threads, [&](std::size_t b) {
        double bs = 0, ts = 0;
        std::size_t bn = 0, tn = 0;
        for (auto i : resample_indices(master_seed, b, items.size())) {
            bs += items[i].bare_sum;
            bn += items[i].bare_n;
            ts += items[i].target_sum;
            tn += items[i].target_n;
        }
        reps[b] = ts / static_cast<double>(tn) - bs / static_cast<double>(bn);
    });
    return summarize_replicates(std::move(reps));
}

BootstrapResult mean_bootstrap(std::span<const double> values, std::size_t n_resamples, std::uint64_t master_seed,
                               unsigned threads) {
    if (values.empty()) throw EffectsError("mean_bootstrap of an empty sample");
    // Constant samples: every replicate is the value itself, without summation error.
    if (std::all_of(values.begin(), values.end(), [&](double v) { return v == values.front(); }))
        return {values.front(), values.front(), values.front(), n_resamples};
    std::vector<double> reps(n_resamples);
    parallel_for(n_resamples, threads, [&](std::size_t b) {
        double s = 0;
        for (auto i : resample_indices(master_seed, b, values.size())) s += values[i];
        reps[b] = s / static_cast<double>(values.size());
    });
    return summarize_replicates(std::move(reps));
}

std::uint64_t bootstrap_seed(std::uint64_t base_seed, std::string_view model, Pair pair, Contrast contrast) {
    const std::uint64_t family = static_cast<std::uint64_t>(pair) * 2 + static_cast<std::uint64_t>(contrast);
    return derive_seed(base_seed ^ stable_hash(model), family);
}

std::vector<DistanceRow> distance_rows(const ModelRun& run, std::uint32_t layer, Pair pair) {
    if (run.store == nullptr || run.verdicts == nullptr) throw EffectsError("distance_rows: incomplete model run");
    const auto probe_it = run.probes.find(layer);
    if (probe_it == run.probes.end()) throw EffectsError("no probe for layer " + std::to_string(layer));
    const auto& probe = probe_it->second;
    if (probe.dim() != run.store->d())
        throw EffectsError("probe for layer " + std::to_string(layer) + " has d=" + std::to_string(probe.dim()) +
                           " but the store has d=" + std::to_string(run.store->d()));

    const auto roles = pair_roles(pair);
    std::vector<DistanceRow> rows;
    for (const auto& s : run.stimuli) {
        if (!run.verdicts->passes(s.item_id, pair)) continue;
        const auto idx = run.store->index_of(to_string(s.key()));
        const auto u = run.store->word(layer, idx, s.positions[roles[0]]);
        const auto v = run.store->word(layer, idx, s.positions[roles[1]]);
        rows.push_back({s.item_id, s.condition, pair, layer, probe_distance_raw(probe, u, v)});
    }
    return rows;
}

std::vector<EffectEstimate> assemble_estimates(const ModelRun& run, const EffectsOptions& options) {
    if (run.store == nullptr) throw EffectsError("assemble_estimates: no activation store for " + run.model_id);
    std::vector<std::uint32_t> missing_store, missing_probe;
    for (const auto& [layer, probe] : run.probes)
        if (layer >= run.store->layer_count()) missing_store.push_back(layer);
    for (std::uint32_t l = 0; l < run.store->layer_count(); ++l)
        if (run.probes.count(l) == 0) missing_probe.push_back(l);
    auto list = [](const std::vector<std::uint32_t>& v) {
        std::string s;
        for (auto l : v) s += (s.empty() ? "" : ", ") + std::to_string(l);
        return s;
    };
    if (!missing_store.empty())
        throw EffectsError("model " + run.model_id + ": activation store lacks layers [" + list(missing_store) + "]");
    if (!missing_probe.empty())
        throw EffectsError("model " + run.model_id + ": no trained probe for layers [" + list(missing_probe) + "]");

    const auto layers = run.store->layer_count();
    std::vector<EffectEstimate> out(static_cast<std::size_t>(layers) * 2);
    parallel_for(out.size(), options.threads, [&](std::size_t cell) {
        const auto layer = static_cast<std::uint32_t>(cell / 2);
        const Pair pair = kPairs[cell % 2];
        const auto rows = distance_rows(run, layer, pair);
        auto& e = out[cell];
        e.layer = layer;
        e.pair = pair;
        try {
            const auto fit = fit_condition_ols(rows, options.ols);
            e.beta0 = fit.beta0();
            e.beta_fin = fit.beta_fin();
            e.beta_inf = fit.beta_inf();
            e.se_fin = fit.se_fin;
            e.se_inf = fit.se_inf;
            e.p_fin = fit.p_fin;
            e.p_inf = fit.p_inf;
            e.n_items = fit.n_items;
            e.n_rows = fit.n_rows;
        } catch (const EffectsError& err) {
            throw EffectsError("model " + run.model_id + ", layer " + std::to_string(layer) + ", " +
                               std::string(to_string(pair)) + ": " + err.what());
        }
        // Bootstrap resamples run serially here; cells already run in parallel.
        e.boot_fin = cluster_bootstrap(rows, Contrast::fin, options.n_resamples,
                                       bootstrap_seed(options.seed, run.model_id, pair, Contrast::fin));
        e.boot_inf = cluster_bootstrap(rows, Contrast::inf, options.n_resamples,
                                       bootstrap_seed(options.seed, run.model_id, pair, Contrast::inf));
    });

    std::vector<double> p;
    p.reserve(out.size() * 2);
    for (const auto& e : out) {
        p.push_back(e.p_fin);
        p.push_back(e.p_inf);
    }
    const auto fdr = bh_fdr(p, options.alpha);
    for (std::size_t i = 0; i < out.size(); ++i) {
        out[i].q_fin = fdr.q[2 * i];
        out[i].q_inf = fdr.q[2 * i + 1];
    }
    return out;
}

std::vector<EffectRow> flatten_estimates(const std::string& model, std::span<const EffectEstimate> estimates) {
    std::vector<EffectRow> rows;
    for (const auto& e : estimates) {
        for (Contrast c : kContrasts) {
            const bool fin = c == Contrast::fin;
            const auto& boot = fin ? e.boot_fin : e.boot_inf;
            rows.push_back({model, e.layer, e.pair, c, fin ? e.beta_fin : e.beta_inf, fin ? e.se_fin : e.se_inf,
                            fin ? e.p_fin : e.p_inf, fin ? e.q_fin : e.q_inf, boot.mean, boot.ci_low, boot.ci_high,
                            e.n_items, e.n_rows});
        }
    }
    return rows;
}

std::string write_effects_csv(std::span<const EffectRow> rows) {
    std::string out(kEffectsCsvHeader);
    out += '\n';
    for (const auto& r : rows) {
        out += r.model + ',' + std::to_string(r.layer) + ',' + std::string(to_string(r.pair)) + ',' +
               std::string(to_string(r.contrast)) + ',' + format_double(r.beta_ols) + ',' + format_double(r.se) + ',' +
               format_double(r.p) + ',' + format_double(r.q) + ',' + format_double(r.beta_boot) + ',' +
               format_double(r.ci_low) + ',' + format_double(r.ci_high) + ',' + std::to_string(r.n_items) + ',' +
               std::to_string(r.n_rows) + '\n';
    }
    return out;
}

nlohmann::json effects_to_json(std::span<const EffectRow> rows) {
    nlohmann::json arr = nlohmann::json::array();
    for (const auto& r : rows)
        arr.push_back({{"model", r.model},
                       {"layer", r.layer},
                       {"pair", std::string(to_string(r.pair))},
                       {"contrast", std::string(to_string(r.contrast))},
                       {"beta_ols", r.beta_ols},
                       {"se", r.se},
                       {"p", r.p},
                       {"q", r.q},
                       {"beta_boot", r.beta_boot},
                       {"ci_low", r.ci_low},
                       {"ci_high", r.ci_high},
                       {"n_items", r.n_items},
                       {"n_rows", r.n_rows}});
    return {{"estimates", arr}};
}

std::vector<EffectRow> effects_from_json(const nlohmann::json& j) {
    std::vector<EffectRow> rows;
    try {
        for (const auto& e : j.at("estimates")) {
            EffectRow r;
            r.model = e.at("model").get<std::string>();
            r.layer = e.at("layer").get<std::uint32_t>();
            r.pair = parse_pair(e.at("pair").get<std::string>());
            r.contrast = parse_contrast(e.at("contrast").get<std::string>());
            r.beta_ols = e.at("beta_ols").get<double>();
            r.se = e.at("se").get<double>();
            r.p = e.at("p").get<double>();
            r.q = e.at("q").get<double>();
            r.beta_boot = e.at("beta_boot").get<double>();
            r.ci_low = e.at("ci_low").get<double>();
            r.ci_high = e.at("ci_high").get<double>();
            r.n_items = e.at("n_items").get<std::size_t>();
            r.n_rows = e.at("n_rows").get<std::size_t>();
            rows.push_back(std::move(r));
        }
    } catch (const nlohmann::json::exception& e) {
        throw EffectsError(std::string("malformed effects table: ") + e.what());
    }
    return rows;
}

}  // namespace phaseprobe
