#include "phaseprobe/pipeline.hpp"

#include <algorithm>
#include <set>

#include <fmt/format.h>

#include "phaseprobe/activation_store.hpp"
#include "phaseprobe/io.hpp"
#include "phaseprobe/parallel.hpp"
#include "phaseprobe/reporting.hpp"
#include "phaseprobe/udtree.hpp"

namespace phaseprobe {
namespace fs = std::filesystem;
using nlohmann::json;

namespace {

const fs::path kStimuliFile = "stimuli.jsonl";
const fs::path kVerdictsFile = "verdicts.jsonl";
const fs::path kVerifyLog = "verification.log";
const fs::path kEffectsCsv = "effects.csv";
const fs::path kEffectsJson = "effects.json";
const fs::path kReportDir = "report";
const fs::path kVerdictJson = "verdict.json";
const fs::path kPatchVerdictJson = "patch_verdict.json";
const fs::path kPatchForestCsv = "patch_forest.csv";

std::string crc_hex(std::uint32_t c) { return fmt::format("{:08x}", c); }

std::string file_crc(const fs::path& p) { return crc_hex(crc32(read_binary_file(p))); }

fs::path probe_dir(const RunConfig& c, const std::string& model) {
    return c.out_dir / "probes" / sanitize_model_id(model);
}

fs::path plan_path(const RunConfig& c, const std::string& model, PatchSite site) {
    return c.out_dir / "patch" / sanitize_model_id(model) / ("plan_" + std::string(to_string(site)) + ".json");
}

void require_file(const fs::path& p, std::string_view what, std::string_view producer) {
    if (fs::exists(p)) return;
    throw MissingArtifact(fmt::format("{} not found at {}; {}", what, p.string(), producer));
}

std::string from_stage(Stage s) { return fmt::format("run the `{}` stage first", to_string(s)); }

void require_store(const fs::path& dir, std::string_view what) {
    require_file(dir / "manifest.json", what, "produce it with the extractor's `dump` step");
}

/// Checksums of everything a stage reads plus the settings it depends on.
class Fingerprint {
public:
    void file(const std::string& name, const fs::path& p) { inputs_[name] = file_crc(p); }
    void store(const std::string& name, const fs::path& dir) { inputs_[name] = file_crc(dir / "manifest.json"); }
    void setting(const std::string& name, json value) { inputs_["setting:" + name] = std::move(value); }
    const json& inputs() const { return inputs_; }

private:
    json inputs_ = json::object();
};

fs::path stamp_path(const RunConfig& c, Stage s) { return c.out_dir / ".stamps" / (std::string(to_string(s)) + ".json"); }

/// Outputs recorded by a stamp that is still current, if any.
std::optional<std::vector<fs::path>> current_outputs(const RunConfig& c, Stage s, const Fingerprint& fp) {
    const auto path = stamp_path(c, s);
    if (!fs::exists(path)) return std::nullopt;
    json stamp;
    try {
        stamp = json::parse(read_text_file(path));
    } catch (const json::exception&) {
        return std::nullopt;
    }
    if (stamp.value("inputs", json()) != fp.inputs()) return std::nullopt;
    std::vector<fs::path> outputs;
    const auto recorded = stamp.value("outputs", json::object());
    for (const auto& [rel, crc] : recorded.items()) {
        const auto p = c.out_dir / rel;
        if (!fs::exists(p) || file_crc(p) != crc.get<std::string>()) return std::nullopt;
        outputs.push_back(p);
    }
    return outputs;
}

void write_stamp(const RunConfig& c, Stage s, const Fingerprint& fp, const std::vector<fs::path>& outputs) {
    json out = json::object();
    for (const auto& p : outputs) out[fs::relative(p, c.out_dir).generic_string()] = file_crc(p);
    write_file_atomic(stamp_path(c, s), json{{"stage", to_string(s)}, {"inputs", fp.inputs()}, {"outputs", out}}.dump(2) + "\n");
}

Lexicon load_lexicon(const RunConfig& c) {
    return c.lexicon ? Lexicon::load(*c.lexicon) : Lexicon::default_lexicon(c.subject_mode);
}

std::vector<Stimulus> load_stimuli(const RunConfig& c) {
    const auto p = c.out_dir / kStimuliFile;
    require_file(p, "stimulus file", from_stage(Stage::stimuli));
    return read_stimuli_jsonl(read_text_file(p));
}

std::vector<InvarianceVerdict> load_verdicts(const RunConfig& c) {
    const auto p = c.out_dir / kVerdictsFile;
    require_file(p, "invariance verdicts", from_stage(Stage::verify));
    return read_verdicts_jsonl(read_text_file(p));
}

std::vector<ProbeSentence> corpus_sentences(const ActivationStore& store, std::span<const ParsedSentence> parses,
                                            std::uint32_t layer, const fs::path& conllu) {
    std::vector<ProbeSentence> out;
    out.reserve(parses.size());
    for (const auto& p : parses) {
        std::string key = p.sent_id();
        if (p.stimulus_key()) key = to_string(*p.stimulus_key());
        if (key.empty()) throw PipelineError(conllu.string() + ": sentence without sent_id or stimulus_key");
        const auto idx = store.find(key);
        if (!idx)
            throw PipelineError(fmt::format("{}: sentence '{}' has no activations in the training store", conllu.string(), key));
        if (store.entry(*idx).word_count() != p.size())
            throw PipelineError(fmt::format("sentence '{}': {} words in the parse, {} in the store", key, p.size(),
                                            store.entry(*idx).word_count()));
        out.push_back({store.words(layer, *idx).cast<double>(), gold_distance_matrix(p)});
    }
    return out;
}

std::vector<ParsedSentence> load_parses(const fs::path& p, std::string_view what) {
    require_file(p, what, "produce it with the extractor's `parse` step");
    return parse_conllu(read_text_file(p));
}

bool requested(const RunConfig& c, std::string_view v) {
    return std::find(c.require_verdicts.begin(), c.require_verdicts.end(), v) != c.require_verdicts.end();
}

// -- stages ------------------------------------------------------------------

template <typename Body>
StageResult staged(Stage stage, const RunConfig& c, const Fingerprint& fp, Body&& body) {
    StageResult r;
    r.stage = stage;
    if (auto outputs = current_outputs(c, stage, fp)) {
        r.skipped = true;
        r.outputs = std::move(*outputs);
        r.log.push_back("up to date");
        return r;
    }
    body(r);
    write_stamp(c, stage, fp, r.outputs);
    return r;
}

StageResult stage_stimuli(const RunConfig& c) {
    const auto lexicon = load_lexicon(c);
    Fingerprint fp;
    fp.setting("lexicon", lexicon.to_json());
    fp.setting("n_items", c.n_items);
    fp.setting("seed", c.seed);
    return staged(Stage::stimuli, c, fp, [&](StageResult& r) {
        const auto candidates = enumerate_candidates(lexicon);
        const auto stimuli = generate_stimuli(lexicon, c.n_items, c.seed);
        const auto out = c.out_dir / kStimuliFile;
        write_file_atomic(out, write_stimuli_jsonl(stimuli));
        r.outputs.push_back(out);
        r.log.push_back(fmt::format("{} candidate items, sampled {} items, {} stimuli", candidates.size(), c.n_items,
                                    stimuli.size()));
    });
}

StageResult stage_verify(const RunConfig& c) {
    const auto stimuli_path = c.out_dir / kStimuliFile;
    require_file(stimuli_path, "stimulus file", from_stage(Stage::stimuli));
    if (!c.conllu)
        throw MissingArtifact("no stimulus parses configured (config key `conllu`); parse " + stimuli_path.string() +
                              " with the extractor's `parse` step");
    require_file(*c.conllu, "stimulus parses", "produce them with the extractor's `parse` step");
    Fingerprint fp;
    fp.file("stimuli", stimuli_path);
    fp.file("conllu", *c.conllu);
    return staged(Stage::verify, c, fp, [&](StageResult& r) {
        const auto stimuli = load_stimuli(c);
        const auto parses = parse_conllu(read_text_file(*c.conllu));
        const auto report = verify_all(stimuli, parses);
        std::map<Pair, std::size_t> passed;
        for (const auto& v : report.verdicts)
            if (v.pass) ++passed[v.pair];
        const auto items = report.verdicts.size() / 2;
        std::string log;
        for (const auto& line : report.log) log += line + "\n";
        const auto summary = fmt::format("{} items; wh_esubj pass {}; esubj_evb pass {}", items, passed[Pair::wh_esubj],
                                         passed[Pair::esubj_evb]);
        log += summary + "\n";
        write_file_atomic(c.out_dir / kVerdictsFile, write_verdicts_jsonl(report.verdicts));
        write_file_atomic(c.out_dir / kVerifyLog, log);
        r.outputs = {c.out_dir / kVerdictsFile, c.out_dir / kVerifyLog};
        r.log.push_back(summary);
    });
}

StageResult stage_train(const RunConfig& c) {
    if (c.models.empty()) throw PipelineError("train: no models configured");
    const auto probe_config = c.effective_probe();
    Fingerprint fp;
    fp.setting("probe", probe_config.to_json());
    for (const auto& m : c.models) {
        require_store(m.train_store, "training activations for " + m.id);
        require_file(m.train_conllu, "training parses for " + m.id, "produce them with the extractor's `parse` step");
        fp.store(m.id + ":train_store", m.train_store);
        fp.file(m.id + ":train_conllu", m.train_conllu);
        if (m.dev_store.has_value() != m.dev_conllu.has_value())
            throw PipelineError("model " + m.id + ": dev_store and dev_conllu go together");
        if (m.dev_store) {
            require_store(*m.dev_store, "dev activations for " + m.id);
            require_file(*m.dev_conllu, "dev parses for " + m.id, "produce them with the extractor's `parse` step");
            fp.store(m.id + ":dev_store", *m.dev_store);
            fp.file(m.id + ":dev_conllu", *m.dev_conllu);
        }
    }
    return staged(Stage::train, c, fp, [&](StageResult& r) {
        for (const auto& m : c.models) {
            const auto store = read_store(m.train_store);
            const auto parses = load_parses(m.train_conllu, "training parses");
            std::optional<ActivationStore> dev_store;
            std::vector<ParsedSentence> dev_parses;
            if (m.dev_store) {
                dev_store = read_store(*m.dev_store);
                dev_parses = load_parses(*m.dev_conllu, "dev parses");
                if (dev_store->d() != store.d() || dev_store->layer_count() != store.layer_count())
                    throw PipelineError("model " + m.id + ": dev store shape differs from the training store");
            }
            const auto layers = store.layer_count();
            std::vector<ProbeMatrix> probes(layers);
            std::vector<ProbeQuality> quality(layers);
            parallel_for(layers, c.threads, [&](std::size_t l) {
                const auto layer = static_cast<std::uint32_t>(l);
                const auto train = corpus_sentences(store, parses, layer, m.train_conllu);
                std::vector<ProbeSentence> dev;
                if (dev_store) dev = corpus_sentences(*dev_store, dev_parses, layer, *m.dev_conllu);
                probes[l] = train_probe(train, probe_config, layer, dev);
                quality[l] = eval_probe(probes[l], dev_store ? std::span<const ProbeSentence>(dev) : train);
            });
            const auto dir = probe_dir(c, m.id);
            json q = json::array();
            for (std::uint32_t l = 0; l < layers; ++l) {
                save_probe(probes[l], dir);
                r.outputs.push_back(dir / fmt::format("probe_{}.json", l));
                r.outputs.push_back(dir / fmt::format("probe_{}.f32", l));
                q.push_back(quality[l].to_json());
            }
            const json doc{{"model", m.id}, {"split", dev_store ? "dev" : "train"}, {"layers", q}};
            write_file_atomic(dir / "quality.json", doc.dump(2) + "\n");
            r.outputs.push_back(dir / "quality.json");
            r.log.push_back(fmt::format("{}: trained {} probes on {} sentences", m.id, layers, parses.size()));
        }
    });
}

std::map<std::uint32_t, ProbeMatrix> load_probes(const RunConfig& c, const ModelConfig& m, std::uint32_t layers) {
    const auto dir = probe_dir(c, m.id);
    std::map<std::uint32_t, ProbeMatrix> out;
    for (std::uint32_t l = 0; l < layers; ++l) {
        require_file(dir / fmt::format("probe_{}.json", l), "probe for " + m.id + " layer " + std::to_string(l),
                     from_stage(Stage::train));
        out.emplace(l, load_probe(dir, l));
    }
    return out;
}

void fingerprint_probes(Fingerprint& fp, const RunConfig& c, const ModelConfig& m) {
    const auto dir = probe_dir(c, m.id);
    require_file(dir / "quality.json", "probes for " + m.id, from_stage(Stage::train));
    const auto manifest = read_store_manifest(m.store);
    const auto layers = manifest.at("layer_count").get<std::uint32_t>();
    for (std::uint32_t l = 0; l < layers; ++l) {
        for (const auto* ext : {".json", ".f32"}) {
            const auto p = dir / fmt::format("probe_{}{}", l, ext);
            require_file(p, "probe for " + m.id + " layer " + std::to_string(l), from_stage(Stage::train));
            fp.file(m.id + ":" + p.filename().string(), p);
        }
    }
}

StageResult stage_effects(const RunConfig& c) {
    if (c.models.empty()) throw PipelineError("effects: no models configured");
    Fingerprint fp;
    fp.file("stimuli", c.out_dir / kStimuliFile);
    require_file(c.out_dir / kVerdictsFile, "invariance verdicts", from_stage(Stage::verify));
    fp.file("verdicts", c.out_dir / kVerdictsFile);
    for (const auto& m : c.models) {
        require_store(m.store, "stimulus activations for " + m.id);
        fp.store(m.id + ":store", m.store);
        fingerprint_probes(fp, c, m);
    }
    fp.setting("alpha", c.alpha);
    fp.setting("bootstrap_n", c.bootstrap_n);
    fp.setting("seed", c.seed);
    fp.setting("cov_type", c.covariance == CovarianceType::CR1 ? "CR1" : "CR0");
    fp.setting("reference", c.reference == ReferenceDistribution::t ? "t" : "normal");
    return staged(Stage::effects, c, fp, [&](StageResult& r) {
        const auto stimuli = load_stimuli(c);
        const auto verdict_list = load_verdicts(c);
        const VerdictTable verdicts(verdict_list);
        std::vector<EffectRow> rows;
        for (const auto& m : c.models) {
            const auto store = read_store(m.store);
            ModelRun run{m.id, &store, load_probes(c, m, store.layer_count()), stimuli, &verdicts};
            EffectsOptions options{c.alpha, c.bootstrap_n, c.seed, {c.covariance, c.reference}, c.threads};
            const auto estimates = assemble_estimates(run, options);
            auto flat = flatten_estimates(m.id, estimates);
            rows.insert(rows.end(), flat.begin(), flat.end());
            r.log.push_back(fmt::format("{}: {} layers, {} estimates", m.id, store.layer_count(), flat.size()));
        }
        write_file_atomic(c.out_dir / kEffectsCsv, write_effects_csv(rows));
        write_file_atomic(c.out_dir / kEffectsJson, effects_to_json(rows).dump(2) + "\n");
        r.outputs = {c.out_dir / kEffectsCsv, c.out_dir / kEffectsJson};
    });
}

json read_json(const fs::path& p) {
    try {
        return json::parse(read_text_file(p));
    } catch (const json::exception& e) {
        throw PipelineError(p.string() + ": " + e.what());
    }
}

StageResult stage_report(const RunConfig& c) {
    const auto effects_path = c.out_dir / kEffectsJson;
    require_file(effects_path, "effect estimates", from_stage(Stage::effects));
    Fingerprint fp;
    fp.file("effects", effects_path);
    fp.setting("alpha", c.alpha);
    auto result = staged(Stage::report, c, fp, [&](StageResult& r) {
        const auto rows = effects_from_json(read_json(effects_path));
        const auto profiles = build_profiles(rows, c.alpha);
        const auto summaries = summarize_all(profiles);
        const auto dir = c.out_dir / kReportDir;
        emit_reports(summaries, profiles, c.alpha, dir);
        std::set<std::string> seen;
        for (const auto& p : profiles)
            if (seen.insert(p.model).second) r.outputs.push_back(dir / ("profiles_" + sanitize_model_id(p.model) + ".csv"));
        for (const auto* f : {"forest.csv", "robustness.csv", "verdict.json"}) r.outputs.push_back(dir / f);
        for (const auto& s : summaries)
            r.log.push_back(fmt::format("{}: L*={} beta_fin={} beta_inf={} gradient_pass_canon={} sign_asymmetry={}",
                                        s.model, s.L_star, format_double(s.beta_fin_canon),
                                        format_double(s.beta_inf_canon), s.gradient_pass_canon,
                                        s.esubj_evb_sign_asymmetry));
    });
    const auto verdict = read_json(c.out_dir / kReportDir / kVerdictJson);
    std::optional<bool> pass;
    auto fold = [&](std::string_view name, const char* key) {
        if (!requested(c, name)) return;
        const bool ok = verdict.at(key).get<bool>();
        pass = pass.value_or(true) && ok;
        result.log.push_back(fmt::format("verdict {}: {}", name, ok ? "pass" : "fail"));
    };
    fold("gradient", "all_gradient_pass_canon");
    fold("asymmetry", "all_esubj_evb_sign_asymmetry");
    result.verdict_pass = pass;
    return result;
}

std::map<std::string, std::uint32_t> canonical_layers(const RunConfig& c) {
    const auto path = c.out_dir / kReportDir / kVerdictJson;
    require_file(path, "run verdict with canonical layers", from_stage(Stage::report));
    std::map<std::string, std::uint32_t> out;
    const auto verdict = read_json(path);
    for (const auto& m : verdict.at("models")) out[m.at("model").get<std::string>()] = m.at("L_star").get<std::uint32_t>();
    return out;
}

StageResult stage_patch_plan(const RunConfig& c) {
    if (c.models.empty()) throw PipelineError("patch-plan: no models configured");
    Fingerprint fp;
    fp.file("stimuli", c.out_dir / kStimuliFile);
    require_file(c.out_dir / kVerdictsFile, "invariance verdicts", from_stage(Stage::verify));
    fp.file("verdicts", c.out_dir / kVerdictsFile);
    require_file(c.out_dir / kReportDir / kVerdictJson, "run verdict with canonical layers", from_stage(Stage::report));
    fp.file("verdict", c.out_dir / kReportDir / kVerdictJson);
    for (const auto& m : c.models) {
        require_store(m.store, "stimulus activations for " + m.id);
        fp.store(m.id + ":store", m.store);
    }
    return staged(Stage::patch_plan, c, fp, [&](StageResult& r) {
        const auto stimuli = load_stimuli(c);
        const auto verdict_list = load_verdicts(c);
        const VerdictTable verdicts(verdict_list);
        const auto layers = canonical_layers(c);
        for (const auto& m : c.models) {
            const auto it = layers.find(m.id);
            if (it == layers.end())
                throw PipelineError("model " + m.id + " has no canonical layer in the run verdict; " +
                                    from_stage(Stage::report));
            const auto store = read_store(m.store);
            for (PatchSite site : {PatchSite::embedded_subject_first_subword, PatchSite::wh_first_subword}) {
                const auto plan = make_patch_plan(m.id, stimuli, verdicts, store, it->second, site);
                const auto path = plan_path(c, m.id, site);
                write_file_atomic(path, plan.to_json().dump(2) + "\n");
                r.outputs.push_back(path);
                r.log.push_back(fmt::format("{} {}: layer {}, {} entries, {} dropped", m.id, to_string(site),
                                            plan.layer, plan.entries.size(), plan.dropped.size()));
            }
        }
    });
}

StageResult stage_patch_score(const RunConfig& c) {
    if (c.models.empty()) throw PipelineError("patch-score: no models configured");
    Fingerprint fp;
    fp.file("stimuli", c.out_dir / kStimuliFile);
    fp.setting("bootstrap_n", c.bootstrap_n);
    fp.setting("seed", c.seed);
    for (const auto& m : c.models) {
        require_store(m.store, "stimulus activations for " + m.id);
        fp.store(m.id + ":store", m.store);
        for (PatchSite site : {PatchSite::embedded_subject_first_subword, PatchSite::wh_first_subword}) {
            const auto plan = plan_path(c, m.id, site);
            require_file(plan, "patch plan", from_stage(Stage::patch_plan));
            fp.file(m.id + ":plan:" + std::string(to_string(site)), plan);
            const auto it = m.patched_stores.find(site);
            if (it == m.patched_stores.end())
                throw MissingArtifact(fmt::format("model {}: no patched store configured for site {}; run the "
                                                  "extractor's `patch` step on {}",
                                                  m.id, to_string(site), plan.string()));
            require_store(it->second, "patched activations for " + m.id);
            fp.store(m.id + ":patched:" + std::string(to_string(site)), it->second);
        }
        fingerprint_probes(fp, c, m);
    }
    auto result = staged(Stage::patch_score, c, fp, [&](StageResult& r) {
        const auto stimuli = load_stimuli(c);
        std::vector<PatchResult> all;
        json models = json::array();
        bool all_pass = true;
        for (const auto& m : c.models) {
            const auto target = read_store(m.store);
            std::vector<PatchResult> results;
            for (PatchSite site : {PatchSite::embedded_subject_first_subword, PatchSite::wh_first_subword}) {
                const auto plan = PatchPlan::from_json(read_json(plan_path(c, m.id, site)));
                const auto patched = read_store(m.patched_stores.at(site));
                const auto probe = load_probe(probe_dir(c, m.id), plan.layer);
                for (Pair pair : kPairs)
                    results.push_back(compute_delta_beta(plan, patched, target, probe, pair, stimuli,
                                                         {c.bootstrap_n, c.seed, c.threads}));
            }
            const auto v = patch_verdict(results);
            all_pass = all_pass && v.pass;
            json entry = v.to_json();
            entry["results"] = json::array();
            for (const auto& res : results) entry["results"].push_back(res.to_json());
            models.push_back(entry);
            all.insert(all.end(), results.begin(), results.end());
            r.log.push_back(fmt::format("{}: patch verdict {} ({})", m.id, v.pass ? "pass" : "fail", v.reason));
        }
        const auto dir = c.out_dir / kReportDir;
        write_file_atomic(dir / kPatchForestCsv, patch_forest_csv(all));
        write_file_atomic(dir / kPatchVerdictJson,
                          json{{"models", models}, {"all_pass", all_pass && !c.models.empty()}}.dump(2) + "\n");
        r.outputs = {dir / kPatchForestCsv, dir / kPatchVerdictJson};
    });
    if (requested(c, "patch")) {
        const bool ok = read_json(c.out_dir / kReportDir / kPatchVerdictJson).at("all_pass").get<bool>();
        result.verdict_pass = ok;
        result.log.push_back(fmt::format("verdict patch: {}", ok ? "pass" : "fail"));
    }
    return result;
}

fs::path resolve(const fs::path& base, const std::string& p) {
    const fs::path path(p);
    return path.is_absolute() || base.empty() ? path : base / path;
}

}  // namespace

std::string_view to_string(Stage s) {
    switch (s) {
        case Stage::stimuli: return "stimuli";
        case Stage::verify: return "verify";
        case Stage::train: return "train";
        case Stage::effects: return "effects";
        case Stage::report: return "report";
        case Stage::patch_plan: return "patch-plan";
        case Stage::patch_score: return "patch-score";
    }
    return "?";
}

Stage parse_stage(std::string_view s) {
    for (Stage st : kStages)
        if (to_string(st) == s) return st;
    throw PipelineError("unknown stage '" + std::string(s) + "'");
}

RunConfig RunConfig::from_json(const json& j, const fs::path& base_dir) {
    static const std::set<std::string> known = {
        "lexicon", "subject_mode", "n_items", "seed", "probe", "alpha", "bootstrap_n", "threads", "out_dir",
        "cov_type", "reference", "conllu", "models", "require_verdicts"};
    static const std::set<std::string> model_keys = {"id", "store", "train_store", "train_conllu",
                                                     "dev_store", "dev_conllu", "patched_stores"};
    if (!j.is_object()) throw PipelineError("run config must be a JSON object");
    for (const auto& [k, v] : j.items())
        if (!known.count(k)) throw PipelineError("unknown run config key '" + k + "'");
    RunConfig c;
    try {
        if (j.contains("lexicon") && !j.at("lexicon").is_null())
            c.lexicon = resolve(base_dir, j.at("lexicon").get<std::string>());
        if (j.contains("subject_mode")) {
            const auto mode = j.at("subject_mode").get<std::string>();
            if (mode == "disjoint") c.subject_mode = SubjectMode::disjoint;
            else if (mode == "shared") c.subject_mode = SubjectMode::shared;
            else throw PipelineError("subject_mode must be 'disjoint' or 'shared'");
        }
        c.n_items = j.value("n_items", c.n_items);
        c.seed = j.value("seed", c.seed);
        if (j.contains("probe")) {
            c.probe = ProbeConfig::from_json(j.at("probe"));
            c.probe_seed_explicit = j.at("probe").contains("seed");
        }
        c.alpha = j.value("alpha", c.alpha);
        c.bootstrap_n = j.value("bootstrap_n", c.bootstrap_n);
        c.threads = j.value("threads", c.threads);
        if (j.contains("out_dir")) c.out_dir = resolve(base_dir, j.at("out_dir").get<std::string>());
        else c.out_dir = resolve(base_dir, c.out_dir.string());
        if (j.contains("cov_type")) {
            const auto v = j.at("cov_type").get<std::string>();
            if (v == "CR1") c.covariance = CovarianceType::CR1;
            else if (v == "CR0") c.covariance = CovarianceType::CR0;
            else throw PipelineError("cov_type must be 'CR1' or 'CR0'");
        }
        if (j.contains("reference")) {
            const auto v = j.at("reference").get<std::string>();
            if (v == "t") c.reference = ReferenceDistribution::t;
            else if (v == "normal") c.reference = ReferenceDistribution::normal;
            else throw PipelineError("reference must be 't' or 'normal'");
        }
        if (j.contains("conllu") && !j.at("conllu").is_null())
            c.conllu = resolve(base_dir, j.at("conllu").get<std::string>());
        for (const auto& mj : j.value("models", json::array())) {
            for (const auto& [k, v] : mj.items())
                if (!model_keys.count(k)) throw PipelineError("unknown model config key '" + k + "'");
            ModelConfig m;
            m.id = mj.at("id").get<std::string>();
            m.store = resolve(base_dir, mj.at("store").get<std::string>());
            m.train_store = resolve(base_dir, mj.at("train_store").get<std::string>());
            m.train_conllu = resolve(base_dir, mj.at("train_conllu").get<std::string>());
            if (mj.contains("dev_store")) m.dev_store = resolve(base_dir, mj.at("dev_store").get<std::string>());
            if (mj.contains("dev_conllu")) m.dev_conllu = resolve(base_dir, mj.at("dev_conllu").get<std::string>());
            const auto patched = mj.value("patched_stores", json::object());
            for (const auto& [site, dir] : patched.items())
                m.patched_stores[parse_patch_site(site)] = resolve(base_dir, dir.get<std::string>());
            c.models.push_back(std::move(m));
        }
        c.require_verdicts = j.value("require_verdicts", c.require_verdicts);
    } catch (const json::exception& e) {
        throw PipelineError(std::string("malformed run config: ") + e.what());
    }
    c.validate();
    return c;
}

RunConfig RunConfig::load(const fs::path& path) {
    json j;
    try {
        j = json::parse(read_text_file(path));
    } catch (const json::exception& e) {
        throw PipelineError(path.string() + ": " + e.what());
    }
    return from_json(j, path.parent_path());
}

json RunConfig::to_json() const {
    json models = json::array();
    for (const auto& m : this->models) {
        json mj{{"id", m.id}, {"store", m.store.string()}, {"train_store", m.train_store.string()},
                {"train_conllu", m.train_conllu.string()}};
        if (m.dev_store) mj["dev_store"] = m.dev_store->string();
        if (m.dev_conllu) mj["dev_conllu"] = m.dev_conllu->string();
        json patched = json::object();
        for (const auto& [site, dir] : m.patched_stores) patched[std::string(phaseprobe::to_string(site))] = dir.string();
        if (!patched.empty()) mj["patched_stores"] = patched;
        models.push_back(mj);
    }
    return {{"lexicon", lexicon ? json(lexicon->string()) : json(nullptr)},
            {"subject_mode", subject_mode == SubjectMode::disjoint ? "disjoint" : "shared"},
            {"n_items", n_items},
            {"seed", seed},
            {"probe", effective_probe().to_json()},
            {"alpha", alpha},
            {"bootstrap_n", bootstrap_n},
            {"threads", threads},
            {"out_dir", out_dir.string()},
            {"cov_type", covariance == CovarianceType::CR1 ? "CR1" : "CR0"},
            {"reference", reference == ReferenceDistribution::t ? "t" : "normal"},
            {"conllu", conllu ? json(conllu->string()) : json(nullptr)},
            {"models", models},
            {"require_verdicts", require_verdicts}};
}

void RunConfig::validate() const {
    if (!(alpha > 0 && alpha < 1)) throw PipelineError("alpha must lie in (0, 1)");
    if (bootstrap_n == 0) throw PipelineError("bootstrap_n must be positive");
    if (threads == 0) throw PipelineError("threads must be positive");
    for (const auto& v : require_verdicts)
        if (v != "gradient" && v != "asymmetry" && v != "patch")
            throw PipelineError("unknown verdict '" + v + "' (expected gradient, asymmetry or patch)");
    std::set<std::string> ids;
    for (const auto& m : models)
        if (!ids.insert(sanitize_model_id(m.id)).second) throw PipelineError("duplicate model id '" + m.id + "'");
}

void RunConfig::set_seed(std::uint64_t s) { seed = s; }

ProbeConfig RunConfig::effective_probe() const {
    auto p = probe;
    if (!probe_seed_explicit) p.seed = seed;
    return p;
}

StageResult run_stage(Stage stage, const RunConfig& config) {
    config.validate();
    try {
        switch (stage) {
            case Stage::stimuli: return stage_stimuli(config);
            case Stage::verify: return stage_verify(config);
            case Stage::train: return stage_train(config);
            case Stage::effects: return stage_effects(config);
            case Stage::report: return stage_report(config);
            case Stage::patch_plan: return stage_patch_plan(config);
            case Stage::patch_score: return stage_patch_score(config);
        }
    } catch (const PipelineError&) {
        throw;
    } catch (const Error& e) {
        throw PipelineError(fmt::format("{}: {}", to_string(stage), e.what()));
    }
    throw PipelineError("unreachable stage");
}

std::vector<StageResult> run_stages(std::span<const Stage> stages, const RunConfig& config) {
    std::vector<StageResult> out;
    for (Stage s : stages) out.push_back(run_stage(s, config));
    return out;
}

int exit_status(std::span<const StageResult> results) {
    for (const auto& r : results)
        if (r.verdict_pass && !*r.verdict_pass) return 1;
    return 0;
}

}  // namespace phaseprobe
