#include "phaseprobe/patchlab.hpp"

#include <cmath>
#include <cstring>
#include <map>

#include "phaseprobe/io.hpp"
#include "phaseprobe/rng.hpp"

namespace phaseprobe {
namespace {

Role site_role(PatchSite site) {
    return site == PatchSite::wh_first_subword ? Role::wh : Role::embedded_subject;
}

}  // namespace

std::string_view to_string(PatchSite s) {
    return s == PatchSite::wh_first_subword ? "wh_first_subword" : "embedded_subject_first_subword";
}

PatchSite parse_patch_site(std::string_view s) {
    if (s == "embedded_subject_first_subword" || s == "embedded_subject") return PatchSite::embedded_subject_first_subword;
    if (s == "wh_first_subword" || s == "wh") return PatchSite::wh_first_subword;
    throw PatchError("unknown patch site '" + std::string(s) + "'");
}

nlohmann::json PatchPlan::to_json() const {
    nlohmann::json items = nlohmann::json::array();
    for (const auto& e : entries)
        items.push_back({{"item_id", e.item_id},
                         {"source_key", e.source_key},
                         {"target_key", e.target_key},
                         {"target_token", e.target_token},
                         {"source_token", e.source_token}});
    return {{"model", model},
            {"layer", layer},
            {"source_condition", to_string(source_condition)},
            {"target_condition", to_string(target_condition)},
            {"patch_site", to_string(site)},
            {"entries", items},
            {"dropped", dropped}};
}

PatchPlan PatchPlan::from_json(const nlohmann::json& j) {
    try {
        PatchPlan p;
        p.model = j.at("model").get<std::string>();
        p.layer = j.at("layer").get<std::uint32_t>();
        p.source_condition = parse_condition(j.at("source_condition").get<std::string>());
        p.target_condition = parse_condition(j.at("target_condition").get<std::string>());
        p.site = parse_patch_site(j.at("patch_site").get<std::string>());
        for (const auto& e : j.at("entries"))
            p.entries.push_back({e.at("item_id").get<std::int64_t>(), e.at("source_key").get<std::string>(),
                                 e.at("target_key").get<std::string>(), e.at("target_token").get<std::uint32_t>(),
                                 e.at("source_token").get<std::uint32_t>()});
        if (j.contains("dropped")) p.dropped = j.at("dropped").get<std::vector<std::string>>();
        return p;
    } catch (const nlohmann::json::exception& e) {
        throw PatchError(std::string("malformed patch plan: ") + e.what());
    }
}

PatchPlan make_patch_plan(std::string model, std::span<const Stimulus> stimuli, const VerdictTable& verdicts,
                          const ActivationStore& store, std::uint32_t L_star, PatchSite site) {
    if (L_star >= store.layer_count())
        throw PatchError("patch layer " + std::to_string(L_star) + " outside the store's " +
                         std::to_string(store.layer_count()) + " layers");
    PatchPlan plan;
    plan.model = std::move(model);
    plan.layer = L_star;
    plan.site = site;

    std::vector<std::int64_t> order;
    std::map<std::int64_t, std::map<Condition, const Stimulus*>> by_item;
    for (const auto& s : stimuli) {
        if (by_item.find(s.item_id) == by_item.end()) order.push_back(s.item_id);
        by_item[s.item_id][s.condition] = &s;
    }
    const auto role = site_role(site);
    for (auto id : order) {
        const auto item = std::to_string(id);
        std::string failed;
        for (Pair pair : kPairs)
            if (!verdicts.passes(id, pair)) failed += (failed.empty() ? "" : ", ") + std::string(to_string(pair));
        if (!failed.empty()) {
            plan.dropped.push_back("item " + item + ": fails invariance for " + failed);
            continue;
        }
        const auto& conds = by_item[id];
        const auto src = conds.find(plan.source_condition);
        const auto tgt = conds.find(plan.target_condition);
        if (src == conds.end() || tgt == conds.end()) {
            plan.dropped.push_back("item " + item + ": missing " +
                                   std::string(to_string(src == conds.end() ? plan.source_condition
                                                                            : plan.target_condition)) +
                                   " stimulus");
            continue;
        }
        auto token_of = [&](const Stimulus& s, std::string& why) -> std::optional<std::uint32_t> {
            const auto key = to_string(s.key());
            const auto idx = store.find(key);
            if (!idx) {
                why = "no alignment for " + key;
                return std::nullopt;
            }
            const auto& alignment = store.entry(*idx).alignment;
            const auto w = s.positions[role];
            if (w >= alignment.size() || alignment[w].subword_count == 0) {
                why = "word " + std::to_string(w) + " of " + key + " is unaligned";
                return std::nullopt;
            }
            return alignment[w].first_subword;
        };
        std::string why;
        const auto source_token = token_of(*src->second, why);
        const auto target_token = source_token ? token_of(*tgt->second, why) : std::nullopt;
        if (!source_token || !target_token) {
            plan.dropped.push_back("item " + item + ": " + why);
            continue;
        }
        plan.entries.push_back(
            {id, to_string(src->second->key()), to_string(tgt->second->key()), *target_token, *source_token});
    }
    return plan;
}

void check_unpatched_layers(const PatchPlan& plan, const ActivationStore& patched, const ActivationStore& target) {
    if (patched.d() != target.d() || patched.layer_count() != target.layer_count())
        throw PatchError("patched store shape (d=" + std::to_string(patched.d()) + ", layers=" +
                         std::to_string(patched.layer_count()) + ") differs from target store (d=" +
                         std::to_string(target.d()) + ", layers=" + std::to_string(target.layer_count()) + ")");
    for (const auto& e : plan.entries) {
        const auto pi = patched.find(e.target_key);
        const auto ti = target.find(e.target_key);
        if (!pi || !ti)
            throw PatchError("item " + std::to_string(e.item_id) + " (" + e.target_key + ") present in " +
                             (pi ? "the patched" : ti ? "the target" : "neither") + " store only");
        if (patched.entry(*pi).alignment != target.entry(*ti).alignment)
            throw PatchError("alignment of " + e.target_key + " differs between patched and target stores");
        for (std::uint32_t layer = 0; layer < plan.layer; ++layer) {
            const auto a = patched.words(layer, *pi);
            const auto b = target.words(layer, *ti);
            if (std::memcmp(a.data(), b.data(), sizeof(float) * static_cast<std::size_t>(a.size())) != 0)
                throw PatchError("layer " + std::to_string(layer) + " of " + e.target_key +
                                 " differs from the target run below the patch layer " + std::to_string(plan.layer));
        }
    }
    for (const auto& entry : patched.entries()) {
        if (target.find(entry.key)) continue;
        throw PatchError("stimulus " + entry.key + " present in the patched store only");
    }
}

std::uint64_t patch_seed(std::uint64_t base_seed, std::string_view model, PatchSite site, Pair pair) {
    return derive_seed(base_seed ^ stable_hash(model),
                       1000 + static_cast<std::uint64_t>(site) * 2 + static_cast<std::uint64_t>(pair));
}

PatchResult compute_delta_beta(const PatchPlan& plan, const ActivationStore& patched, const ActivationStore& target,
                               const ProbeMatrix& probe, Pair pair, std::span<const Stimulus> stimuli,
                               const PatchScoreOptions& options) {
    if (probe.layer != plan.layer)
        throw PatchError("probe layer " + std::to_string(probe.layer) + " does not match patch layer " +
                         std::to_string(plan.layer));
    if (probe.dim() != target.d())
        throw PatchError("probe has d=" + std::to_string(probe.dim()) + " but the store has d=" +
                         std::to_string(target.d()));
    if (plan.entries.empty()) throw PatchError("patch plan for " + plan.model + " has no entries");
    check_unpatched_layers(plan, patched, target);

    std::map<std::string, const Stimulus*, std::less<>> by_key;
    for (const auto& s : stimuli) by_key[to_string(s.key())] = &s;
    const auto roles = pair_roles(pair);

    std::vector<double> diffs(plan.entries.size());
    for (std::size_t k = 0; k < plan.entries.size(); ++k) {
        const auto& e = plan.entries[k];
        const auto it = by_key.find(e.target_key);
        if (it == by_key.end()) throw PatchError("no stimulus record for " + e.target_key);
        const auto& s = *it->second;
        const auto pi = patched.index_of(e.target_key);
        const auto ti = target.index_of(e.target_key);
        const auto dp = probe_distance_raw(probe, patched.word(plan.layer, pi, s.positions[roles[0]]),
                                           patched.word(plan.layer, pi, s.positions[roles[1]]));
        const auto dt = probe_distance_raw(probe, target.word(plan.layer, ti, s.positions[roles[0]]),
                                           target.word(plan.layer, ti, s.positions[roles[1]]));
        diffs[k] = dp - dt;
    }

    PatchResult r;
    r.model = plan.model;
    r.site = plan.site;
    r.pair = pair;
    double sum = 0;
    for (double v : diffs) sum += v;
    r.delta_beta = sum / static_cast<double>(diffs.size());
    r.boot = mean_bootstrap(diffs, options.n_resamples, patch_seed(options.seed, plan.model, plan.site, pair),
                            options.threads);
    r.n_items = diffs.size();
    if (plan.site == PatchSite::wh_first_subword) r.control_pass = std::abs(r.delta_beta) <= kControlThreshold;
    return r;
}

nlohmann::json PatchResult::to_json() const {
    return {{"model", model},
            {"site", to_string(site)},
            {"pair", to_string(pair)},
            {"delta_beta", delta_beta},
            {"beta_boot", boot.mean},
            {"ci_low", boot.ci_low},
            {"ci_high", boot.ci_high},
            {"n_resamples", boot.n_resamples},
            {"n_items", n_items},
            {"control_pass", control_pass ? nlohmann::json(*control_pass) : nlohmann::json(nullptr)}};
}

PatchResult PatchResult::from_json(const nlohmann::json& j) {
    try {
        PatchResult r;
        r.model = j.at("model").get<std::string>();
        r.site = parse_patch_site(j.at("site").get<std::string>());
        r.pair = parse_pair(j.at("pair").get<std::string>());
        r.delta_beta = j.at("delta_beta").get<double>();
        r.boot = {j.at("beta_boot").get<double>(), j.at("ci_low").get<double>(), j.at("ci_high").get<double>(),
                  j.value("n_resamples", std::size_t{0})};
        r.n_items = j.at("n_items").get<std::size_t>();
        if (j.contains("control_pass") && !j.at("control_pass").is_null()) r.control_pass = j.at("control_pass").get<bool>();
        return r;
    } catch (const nlohmann::json::exception& e) {
        throw PatchError(std::string("malformed patch result: ") + e.what());
    }
}

nlohmann::json PatchVerdict::to_json() const { return {{"model", model}, {"pass", pass}, {"reason", reason}}; }

PatchVerdict patch_verdict(std::span<const PatchResult> results) {
    PatchVerdict v;
    const PatchResult* esubj = nullptr;
    const PatchResult* control = nullptr;
    for (const auto& r : results) {
        if (v.model.empty()) v.model = r.model;
        if (r.pair != Pair::wh_esubj) continue;
        (r.site == PatchSite::wh_first_subword ? control : esubj) = &r;
    }
    if (esubj == nullptr || control == nullptr) {
        v.reason = esubj == nullptr ? "no embedded-subject site result" : "no wh-site control result";
        return v;
    }
    const auto fmt = [](double x) { return format_double(x); };
    if (!(esubj->delta_beta > 0)) {
        v.reason = "embedded-subject delta_beta " + fmt(esubj->delta_beta) + " is not positive";
    } else if (!(esubj->boot.ci_low > 0)) {
        v.reason = "embedded-subject CI [" + fmt(esubj->boot.ci_low) + ", " + fmt(esubj->boot.ci_high) +
                   "] includes zero";
    } else if (!(std::abs(control->delta_beta) <= kControlThreshold)) {
        v.reason = "wh-site control |delta_beta| = " + fmt(std::abs(control->delta_beta)) + " exceeds " +
                   fmt(kControlThreshold);
    } else {
        v.pass = true;
        v.reason = "ok";
    }
    return v;
}

std::string patch_forest_csv(std::span<const PatchResult> results) {
    std::string out(kPatchForestCsvHeader);
    out += '\n';
    for (const auto& r : results)
        out += r.model + ',' + std::string(to_string(r.site)) + ',' + std::string(to_string(r.pair)) + ',' +
               format_double(r.delta_beta) + ',' + format_double(r.boot.mean) + ',' + format_double(r.boot.ci_low) +
               ',' + format_double(r.boot.ci_high) + ',' + std::to_string(r.n_items) + ',' +
               (r.control_pass ? (*r.control_pass ? "true" : "false") : "") + '\n';
    return out;
}

}  // namespace phaseprobe
