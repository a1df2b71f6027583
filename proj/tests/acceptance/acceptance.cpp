// Acceptance suite: one PASS/FAIL line per criterion, nonzero exit on any FAIL.

#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <functional>
#include <set>
#include <string>
#include <vector>

#include <fmt/core.h>

#include "oracles.hpp"
#include "phaseprobe/effects.hpp"
#include "phaseprobe/io.hpp"
#include "phaseprobe/patchlab.hpp"
#include "phaseprobe/pipeline.hpp"
#include "phaseprobe/probe.hpp"
#include "phaseprobe/reporting.hpp"
#include "phaseprobe/stimgen.hpp"
#include "phaseprobe/synthetic.hpp"
#include "phaseprobe/udtree.hpp"

namespace fs = std::filesystem;
using namespace phaseprobe;

namespace {

struct Outcome {
    bool pass = true;
    std::vector<std::string> failures;
    std::string summary;

    void require(bool ok, const std::string& what) {
        if (!ok) {
            pass = false;
            if (failures.size() < 5) failures.push_back(what);
        }
    }
};

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) { return std::chrono::duration<double>(Clock::now() - t0).count(); }

bool close(double a, double b, double tol) { return std::abs(a - b) <= tol * std::max(1.0, std::abs(b)); }

fs::path scratch(const std::string& name) {
    const auto dir = fs::temp_directory_path() / "phaseprobe-acceptance" / name;
    fs::remove_all(dir);
    fs::create_directories(dir);
    return dir;
}

int code(Condition c) { return c == Condition::bare ? 0 : c == Condition::finite ? 1 : 2; }

struct Dataset {
    std::vector<DistanceRow> rows;
    std::vector<oracle::Obs> obs;
};

/// Random-intercept data with heteroscedastic noise; `ragged` drops some
/// infinitival rows so clusters have unequal sizes.
Dataset clustered(std::size_t items, double fin, double inf, SplitMix64& rng, bool ragged) {
    Dataset d;
    for (std::size_t i = 0; i < items; ++i) {
        const double u = rng.normal();
        const double scale = 0.2 + rng.uniform();
        for (Condition c : kConditions) {
            if (ragged && c == Condition::infinitival && i % 4 == 1) continue;
            const double mean = c == Condition::finite ? fin : c == Condition::infinitival ? inf : 0.0;
            const double y = 2 + mean + u + scale * rng.normal();
            const auto id = static_cast<std::int64_t>(i * 13 + 5);
            d.rows.push_back({id, c, Pair::wh_esubj, 0, y});
            d.obs.push_back({id, code(c), y});
        }
    }
    return d;
}

ProbeMatrix identity_probe(std::uint32_t d, std::uint32_t layer) {
    ProbeMatrix p;
    p.layer = layer;
    p.projection = Eigen::MatrixXd::Identity(d, d);
    p.stats.layer = layer;
    p.stats.mean = Eigen::VectorXd::Zero(d);
    p.stats.std = Eigen::VectorXd::Ones(d);
    return p;
}

VerdictTable all_pass(std::span<const Stimulus> stimuli) {
    std::vector<InvarianceVerdict> v;
    for (const auto& s : stimuli) {
        if (s.condition != Condition::bare) continue;
        for (Pair p : {Pair::wh_esubj, Pair::esubj_evb}) {
            InvarianceVerdict x;
            x.item_id = s.item_id;
            x.pair = p;
            x.pass = true;
            v.push_back(x);
        }
    }
    return VerdictTable(v);
}

// ---------------------------------------------------------------------------

Outcome statistics_oracle() {
    Outcome o;
    SplitMix64 rng(2024);
    double slowest = 0;
    for (int t = 0; t < 100; ++t) {
        const auto d = clustered(4 + rng.below(120), rng.uniform(-1, 1), rng.uniform(-1, 1), rng, t % 2 == 1);
        const auto t0 = Clock::now();
        const auto fit = fit_condition_ols(d.rows);
        slowest = std::max(slowest, seconds_since(t0));
        const auto ref = oracle::loop_sandwich(d.obs, true);
        for (int i = 0; i < 3; ++i) {
            o.require(close(fit.beta(i), ref.beta[i], 1e-8), fmt::format("dataset {}: beta[{}]", t, i));
            for (int j = 0; j < 3; ++j)
                o.require(close(fit.covariance(i, j), ref.cov[i][j], 1e-8), fmt::format("dataset {}: V[{},{}]", t, i, j));
        }
    }
    o.require(slowest <= 1.0, fmt::format("slowest OLS fit {:.3f}s", slowest));

    std::size_t bh_checked = 0;
    for (int t = 0; t < 1000; ++t) {
        std::vector<double> p(1 + rng.below(60));
        for (auto& x : p) x = rng.below(4) == 0 ? rng.uniform() * 0.01 : rng.uniform();
        if (t % 10 == 0 && p.size() > 2) p[1] = p[0];  // ties
        const auto res = bh_fdr(p, 0.05);
        const auto q = oracle::brute_bh(p);
        const auto rej = oracle::brute_bh_reject(p, 0.05);
        for (std::size_t i = 0; i < p.size(); ++i) {
            o.require(close(res.q[i], q[i], 1e-12), fmt::format("BH vector {}: q[{}]", t, i));
            o.require(res.rejected[i] == rej[i], fmt::format("BH vector {}: rejection {}", t, i));
        }
        ++bh_checked;
    }

    for (int t = 0; t < 30; ++t) {
        const auto d = clustered(5 + rng.below(60), 0.3, -0.2, rng, false);
        for (Contrast c : kContrasts) {
            const auto seed = rng();
            const auto b = cluster_bootstrap(d.rows, c, 500, seed);
            const auto [lo, hi] = oracle::shared_stream_bootstrap(d.obs, c == Contrast::fin ? 1 : 2, 500, seed);
            o.require(b.ci_low == lo && b.ci_high == hi, fmt::format("bootstrap dataset {} endpoints", t));
        }
    }
    o.summary = fmt::format("100 OLS/CR1 datasets (slowest {:.4f}s), {} BH vectors, 60 bootstrap families",
                            slowest, bh_checked);
    return o;
}

Outcome coverage_simulation() {
    Outcome o;
    const auto t0 = Clock::now();
    const double truth = 0.4;
    int covered = 0;
    SplitMix64 rng(77);
    for (int sim = 0; sim < 200; ++sim) {
        const auto d = clustered(40, truth, 0.1, rng, false);
        const auto b = cluster_bootstrap(d.rows, Contrast::fin, 1000, rng());
        covered += b.ci_low <= truth && truth <= b.ci_high;
    }
    const double secs = seconds_since(t0);
    o.require(covered >= 180, fmt::format("coverage {}/200", covered));
    o.require(secs < 120, fmt::format("runtime {:.1f}s", secs));
    o.summary = fmt::format("95% CI covered the true difference in {}/200 simulations ({:.1f}s)", covered, secs);
    return o;
}

Outcome probe_recovery() {
    Outcome o;
    const auto t0 = Clock::now();
    const TreeEmbedder emb(32, 16, 31);
    const auto train = tree_metric_sentences(random_trees(500, 5, 17, 101), emb, 0.0, 1);
    const auto held = tree_metric_sentences(random_trees(100, 5, 17, 202), emb, 0.0, 2);
    ProbeConfig cfg;
    cfg.rank = 16;
    cfg.learning_rate = 0.01;
    cfg.batch_size = 16;
    cfg.max_epochs = 60;
    cfg.seed = 5;
    const auto probe = train_probe(train, cfg);
    const auto q = eval_probe(probe, held);
    const double secs = seconds_since(t0);
    o.require(q.distance_spearman >= 0.95, fmt::format("held-out Spearman {:.4f}", q.distance_spearman));
    o.require(q.uuas >= 0.90, fmt::format("held-out UUAS {:.4f}", q.uuas));
    o.require(secs < 600, fmt::format("training took {:.1f}s", secs));

    // MST against exhaustive spanning-tree search.
    SplitMix64 rng(9);
    std::size_t cases = 0;
    for (std::uint32_t n = 2; n <= 7; ++n) {
        for (int t = 0; t < 40; ++t) {
            const auto tree = random_tree(n, rng);
            const auto gold = gold_distance_matrix(tree);
            Eigen::MatrixXd pred(n, n);
            std::vector<std::vector<double>> nested(n, std::vector<double>(n));
            const bool ties = t % 4 == 0;
            for (std::uint32_t i = 0; i < n; ++i)
                for (std::uint32_t j = i; j < n; ++j)
                    pred(i, j) = pred(j, i) =
                        i == j ? 0 : (ties ? static_cast<double>(1 + rng.below(3)) : rng.uniform(0, 4));
            for (std::uint32_t i = 0; i < n; ++i)
                for (std::uint32_t j = 0; j < n; ++j) nested[i][j] = pred(i, j);
            std::set<std::pair<int, int>> gold_set;
            for (auto [a, b] : gold_edges(gold)) gold_set.emplace(std::min<int>(a, b), std::max<int>(a, b));
            const auto [best, hits] = oracle::exhaustive_mst_gold_hits(nested, gold_set);
            double weight = 0;
            for (auto [a, b] : minimum_spanning_tree(pred)) weight += pred(a, b);
            o.require(close(weight, best, 1e-12), fmt::format("n={} case {}: MST weight", n, t));
            const auto h = static_cast<int>(uuas_hits(pred, gold));
            o.require(hits.count(h) == 1, fmt::format("n={} case {}: UUAS hits {}", n, t, h));
            if (!ties) o.require(hits.size() == 1, fmt::format("n={} case {}: unique MST", n, t));
            ++cases;
        }
    }
    o.summary = fmt::format("Spearman {:.4f}, UUAS {:.4f} after {} epochs in {:.1f}s; {} exhaustive MST cases for n<=7",
                            q.distance_spearman, q.uuas, probe.training_log.size(), secs, cases);
    return o;
}

Outcome planted_effects() {
    Outcome o;
    const auto t0 = Clock::now();
    const auto dir = scratch("planted");
    FixtureOptions opts;
    opts.model_id = "planted";
    write_synthetic_fixture(dir, opts);
    auto config = RunConfig::load(dir / "config.json");
    config.require_verdicts = {"gradient", "asymmetry"};
    const std::vector<Stage> stages = {Stage::stimuli, Stage::verify, Stage::train, Stage::effects, Stage::report};
    run_stages(stages, config);

    const auto rows = effects_from_json(nlohmann::json::parse(read_text_file(config.out_dir / "effects.json")));
    std::size_t planted_layers = 0;
    for (std::uint32_t l = 0; l < opts.layers; ++l) {
        const double shape = std::max(0.0, 1.0 - 0.4 * std::abs(static_cast<double>(l) - opts.peak_layer));
        if (shape <= 0) continue;
        ++planted_layers;
        bool found = false;
        for (const auto& r : rows) {
            if (r.layer != l || r.pair != Pair::wh_esubj || r.contrast != Contrast::fin) continue;
            found = true;
            o.require(r.beta_ols > 0 && r.q < 0.05,
                      fmt::format("layer {}: beta_fin {:.3f}, q {:.2g}", l, r.beta_ols, r.q));
        }
        o.require(found, fmt::format("layer {}: no wh-esubj finite row", l));
    }

    const auto verdict = nlohmann::json::parse(read_text_file(config.out_dir / "report" / "verdict.json"));
    const auto& m = verdict.at("models").at(0);
    const bool gradient = m.at("gradient_pass_canon").get<bool>();
    const bool asym = m.at("esubj_evb_sign_asymmetry").get<bool>();
    const double fin_peak = m.at("esubj_evb_fin_peak").get<double>();
    const double inf_peak = m.at("esubj_evb_inf_peak").get<double>();
    o.require(gradient, "gradient_pass_canon false");
    o.require(asym && fin_peak < 0 && inf_peak > 0,
              fmt::format("esubj-evb peaks fin {:.3f}, inf {:.3f}", fin_peak, inf_peak));
    const double secs = seconds_since(t0);
    o.require(secs < 60, fmt::format("runtime {:.1f}s", secs));
    o.summary = fmt::format("{} planted layers significant, L*={}, esubj-evb peaks {:.3f}/{:.3f} ({:.1f}s)",
                            planted_layers, m.at("L_star").get<int>(), fin_peak, inf_peak, secs);
    return o;
}

Outcome ud_invariance() {
    Outcome o;
    const fs::path fixtures = PHASEPROBE_FIXTURE_DIR;
    const auto parses = parse_conllu(read_text_file(fixtures / "example.conllu"));
    const auto lex = Lexicon::unconstrained({"she"}, {{"him", "he"}}, {"see"}, {"expect"}, {"think"}, {{"eat", "ate"}});
    const auto triple = realize_stimuli(sample_items(lex, 1, 0)[0]);
    const std::vector<Stimulus> stimuli(triple.begin(), triple.end());

    const auto report = verify_all(stimuli, parses);
    o.require(report.verdicts.size() == 2, "expected two verdicts");
    for (const auto& v : report.verdicts) {
        const std::uint32_t want = v.pair == Pair::wh_esubj ? 3 : 1;
        o.require(v.pass, fmt::format("{} fails on the example parses", to_string(v.pair)));
        for (Condition c : kConditions)
            o.require(v.distances.count(c) && v.distances.at(c) == want,
                      fmt::format("{} {} distance", to_string(v.pair), to_string(c)));
    }

    // Shortened wh path in the infinitival parse: only that pair is excluded.
    auto altered = parses;
    for (auto& p : altered)
        if (p.stimulus_key() && p.stimulus_key()->condition == Condition::infinitival)
            p = parse_conllu(read_text_file(fixtures / "example_inf_short.conllu")).at(0);
    const auto split = verify_all(stimuli, altered);
    const VerdictTable table(split.verdicts);
    o.require(!table.passes(0, Pair::wh_esubj), "altered item still passes wh-esubj");
    o.require(table.passes(0, Pair::esubj_evb), "altered item lost esubj-evb");

    SyntheticModelSpec spec;
    spec.d = 12;
    spec.r = 8;
    spec.layers = 1;
    const auto store = make_stimulus_store(spec, stimuli);
    ModelRun run;
    run.model_id = spec.model_id;
    run.store = &store;
    run.probes.emplace(0, identity_probe(spec.d, 0));
    run.stimuli = stimuli;
    run.verdicts = &table;
    const auto wh = distance_rows(run, 0, Pair::wh_esubj);
    const auto ee = distance_rows(run, 0, Pair::esubj_evb);
    o.require(wh.empty(), fmt::format("{} wh-esubj rows for an excluded item", wh.size()));
    o.require(ee.size() == 3, fmt::format("{} esubj-evb rows, expected 3", ee.size()));
    o.summary = "example parses give (3,3,3) and (1,1,1); failing one pair keeps the item in the other";
    return o;
}

Outcome stimulus_counts() {
    Outcome o;
    const auto lex = Lexicon::default_lexicon();
    const auto set = enumerate_candidates(lex);
    const auto brute = oracle::count_items(oracle::lexicon_lists(lex.to_json(), false));
    o.require(set.size() == 109760, fmt::format("{} candidates", set.size()));
    o.require(set.size() == brute, fmt::format("brute-force count {}", brute));

    const auto a = generate_stimuli(lex, 1000, 42);
    o.require(a.size() == 3000, fmt::format("{} stimuli", a.size()));
    const auto text_a = write_stimuli_jsonl(a);
    const auto text_b = write_stimuli_jsonl(generate_stimuli(lex, 1000, 42));
    o.require(text_a == text_b, "same seed gave different JSONL");
    o.require(text_a != write_stimuli_jsonl(generate_stimuli(lex, 1000, 43)), "different seeds gave the same JSONL");

    // The pipeline stage writes the same bytes from two independent run directories.
    RunConfig c1, c2;
    c1.out_dir = scratch("stimuli-a");
    c2.out_dir = scratch("stimuli-b");
    c1.set_seed(42);
    c2.set_seed(42);
    run_stage(Stage::stimuli, c1);
    run_stage(Stage::stimuli, c2);
    const auto f1 = read_text_file(c1.out_dir / "stimuli.jsonl");
    const auto f2 = read_text_file(c2.out_dir / "stimuli.jsonl");
    o.require(f1 == f2, "stimuli stage output differs between runs");
    o.require(std::count(f1.begin(), f1.end(), '\n') == 3000, "stimuli stage line count");
    o.summary = fmt::format("{} candidates (brute force {}), 3000 stimuli, byte-identical JSONL", set.size(), brute);
    return o;
}

Outcome patch_scoring() {
    Outcome o;
    const auto stimuli = generate_stimuli(Lexicon::default_lexicon(), 10, 3);
    SyntheticModelSpec spec;
    spec.d = 12;
    spec.r = 8;
    spec.layers = 3;
    spec.seed = 8;
    const auto store = make_stimulus_store(spec, stimuli);
    const auto verdicts = all_pass(stimuli);
    const auto probe = identity_probe(spec.d, 1);
    const auto plan = make_patch_plan(spec.model_id, stimuli, verdicts, store, 1, PatchSite::embedded_subject_first_subword);
    o.require(plan.entries.size() == 10, fmt::format("{} plan entries", plan.entries.size()));

    const auto noop = compute_delta_beta(plan, store, store, probe, Pair::wh_esubj, stimuli, {1000, 1, 1});
    o.require(noop.delta_beta == 0 && noop.boot.ci_low == 0 && noop.boot.ci_high == 0,
              fmt::format("no-op gave {} [{}, {}]", noop.delta_beta, noop.boot.ci_low, noop.boot.ci_high));

    // Two items, constant offset on the embedded subject: closed form per item.
    const std::vector<Stimulus> two(stimuli.begin(), stimuli.begin() + 6);
    auto two_plan = make_patch_plan(spec.model_id, two, verdicts, store, 1, PatchSite::embedded_subject_first_subword);
    auto patched = store;
    Eigen::VectorXf c(spec.d);
    for (Eigen::Index k = 0; k < c.size(); ++k) c(k) = 0.05f * static_cast<float>(k % 5) - 0.1f;
    for (const auto& e : two_plan.entries) add_word_offset(patched, e.target_key, e.target_token, 1, c);
    double expected = 0;
    for (const auto& e : two_plan.entries) {
        const auto i = store.index_of(e.target_key);
        const Eigen::VectorXd wh = store.word(1, i, 0);
        const Eigen::VectorXd es = store.word(1, i, 4);
        const Eigen::VectorXd shifted = (es.cast<float>() + c).cast<double>();
        double before = 0, after = 0;
        for (Eigen::Index k = 0; k < wh.size(); ++k) {
            before += (wh(k) - es(k)) * (wh(k) - es(k));
            after += (wh(k) - shifted(k)) * (wh(k) - shifted(k));
        }
        expected += (after - before) / 2.0;
    }
    const auto r = compute_delta_beta(two_plan, patched, store, probe, Pair::wh_esubj, two, {1000, 2, 1});
    o.require(two_plan.entries.size() == 2, "two-item plan");
    o.require(std::abs(r.delta_beta - expected) <= 1e-10,
              fmt::format("two-point Δβ {:.12f} vs {:.12f}", r.delta_beta, expected));

    auto result = [](PatchSite site, double delta, double lo, double hi) {
        PatchResult x;
        x.model = "m";
        x.site = site;
        x.delta_beta = delta;
        x.boot = {delta, lo, hi, 1000};
        x.n_items = 10;
        if (site == PatchSite::wh_first_subword) x.control_pass = std::abs(delta) <= kControlThreshold;
        return x;
    };
    const auto es_ok = result(PatchSite::embedded_subject_first_subword, 0.4, 0.1, 0.7);
    const auto es_zero = result(PatchSite::embedded_subject_first_subword, 0.4, -0.05, 0.7);
    const auto ctl_ok = result(PatchSite::wh_first_subword, 0.01, -0.02, 0.04);
    const auto ctl_bad = result(PatchSite::wh_first_subword, 0.06, 0.03, 0.09);
    o.require(patch_verdict(std::vector{es_ok, ctl_ok}).pass, "pass shape");
    o.require(!patch_verdict(std::vector{es_zero, ctl_ok}).pass, "CI-includes-zero shape");
    o.require(!patch_verdict(std::vector{es_ok, ctl_bad}).pass, "control 0.06 shape");
    o.summary = fmt::format("no-op exact zero, two-point Δβ={:.6f} matches closed form, three verdict shapes",
                            r.delta_beta);
    return o;
}

}  // namespace

int main() {
    const std::vector<std::pair<std::string, std::function<Outcome()>>> criteria = {
        {"statistics-oracle", statistics_oracle},
        {"coverage-simulation", coverage_simulation},
        {"probe-recovery", probe_recovery},
        {"planted-effect-end-to-end", planted_effects},
        {"ud-invariance", ud_invariance},
        {"stimulus-determinism-and-counts", stimulus_counts},
        {"patch-scoring", patch_scoring},
    };
    int failed = 0;
    for (const auto& [name, run] : criteria) {
        Outcome o;
        try {
            o = run();
        } catch (const std::exception& e) {
            o.pass = false;
            o.failures.push_back(std::string("exception: ") + e.what());
        }
        if (o.pass) {
            fmt::print("PASS {}: {}\n", name, o.summary);
        } else {
            ++failed;
            std::string why;
            for (const auto& f : o.failures) why += (why.empty() ? "" : "; ") + f;
            fmt::print("FAIL {}: {}\n", name, why);
        }
        std::fflush(stdout);
    }
    fmt::print("{} of {} criteria passed\n", criteria.size() - failed, criteria.size());
    return failed == 0 ? 0 : 1;
}
