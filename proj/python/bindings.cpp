// Python module _phaseprobe. Structured results cross the boundary as JSON
// text; the package wrapper decodes them.

#include <pybind11/eigen.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>
#include <pybind11/stl/filesystem.h>

#include "phaseprobe/activation_store.hpp"
#include "phaseprobe/effects.hpp"
#include "phaseprobe/io.hpp"
#include "phaseprobe/pipeline.hpp"
#include "phaseprobe/stimgen.hpp"
#include "phaseprobe/synthetic.hpp"
#include "phaseprobe/udtree.hpp"

namespace py = pybind11;
using namespace phaseprobe;

namespace {

Lexicon lexicon_from(const std::optional<std::string>& lexicon_json, const std::string& mode) {
    if (mode != "shared" && mode != "disjoint") throw py::value_error("subject_mode must be 'disjoint' or 'shared'");
    if (lexicon_json) return Lexicon::from_json(nlohmann::json::parse(*lexicon_json));
    return Lexicon::default_lexicon(mode == "shared" ? SubjectMode::shared : SubjectMode::disjoint);
}

std::vector<DistanceRow> rows_from(const std::vector<std::int64_t>& items, const std::vector<std::string>& conditions,
                                   const std::vector<double>& y) {
    if (items.size() != conditions.size() || items.size() != y.size())
        throw py::value_error("items, conditions and distances must have equal length");
    std::vector<DistanceRow> rows(items.size());
    for (std::size_t i = 0; i < items.size(); ++i) {
        rows[i].item_id = items[i];
        rows[i].condition = parse_condition(conditions[i]);
        rows[i].distance = y[i];
    }
    return rows;
}

std::string stage_result_json(const StageResult& r) {
    nlohmann::json j = {{"stage", to_string(r.stage)}, {"skipped", r.skipped}, {"log", r.log}};
    j["outputs"] = nlohmann::json::array();
    for (const auto& p : r.outputs) j["outputs"].push_back(p.string());
    j["verdict_pass"] = r.verdict_pass ? nlohmann::json(*r.verdict_pass) : nlohmann::json(nullptr);
    return j.dump();
}

}  // namespace

PYBIND11_MODULE(_phaseprobe, m) {
    m.doc() = "Structural-probing laboratory core";

    py::register_exception<Error>(m, "PhaseprobeError");

    m.def("default_lexicon", [](const std::string& mode) { return lexicon_from(std::nullopt, mode).to_json().dump(); },
          py::arg("subject_mode") = "disjoint");

    m.def("candidate_count",
          [](std::optional<std::string> lexicon, const std::string& mode) {
              return enumerate_candidates(lexicon_from(lexicon, mode)).size();
          },
          py::arg("lexicon") = py::none(), py::arg("subject_mode") = "disjoint");

    m.def("generate_stimuli_jsonl",
          [](std::size_t n_items, std::uint64_t seed, std::optional<std::string> lexicon, const std::string& mode) {
              return write_stimuli_jsonl(generate_stimuli(lexicon_from(lexicon, mode), n_items, seed));
          },
          py::arg("n_items"), py::arg("seed") = 0, py::arg("lexicon") = py::none(),
          py::arg("subject_mode") = "disjoint");

    m.def("verify_jsonl",
          [](const std::string& stimuli_jsonl, const std::string& conllu) {
              const auto stimuli = read_stimuli_jsonl(stimuli_jsonl);
              const auto parses = parse_conllu(conllu);
              return write_verdicts_jsonl(verify_all(stimuli, parses).verdicts);
          },
          py::arg("stimuli_jsonl"), py::arg("conllu"), "Invariance verdicts as JSONL.");

    m.def("tree_distances",
          [](const std::string& conllu) {
              std::vector<Eigen::MatrixXd> out;
              for (const auto& s : parse_conllu(conllu)) out.push_back(gold_distance_matrix(s));
              return out;
          },
          py::arg("conllu"));

    m.def("fit_condition_ols",
          [](const std::vector<std::int64_t>& items, const std::vector<std::string>& conditions,
             const std::vector<double>& y, const std::string& cov_type) {
              OlsOptions opt;
              opt.covariance = cov_type == "CR0" ? CovarianceType::CR0 : CovarianceType::CR1;
              const auto fit = fit_condition_ols(rows_from(items, conditions, y), opt);
              return py::dict(py::arg("beta") = fit.beta, py::arg("covariance") = fit.covariance,
                              py::arg("se_fin") = fit.se_fin, py::arg("se_inf") = fit.se_inf,
                              py::arg("p_fin") = fit.p_fin, py::arg("p_inf") = fit.p_inf, py::arg("df") = fit.df);
          },
          py::arg("items"), py::arg("conditions"), py::arg("distances"), py::arg("cov_type") = "CR1");

    m.def("bh_fdr",
          [](const std::vector<double>& p, double alpha) {
              auto r = bh_fdr(p, alpha);
              return py::make_tuple(r.q, std::vector<bool>(r.rejected.begin(), r.rejected.end()));
          },
          py::arg("p_values"), py::arg("alpha") = 0.05);

    m.def("cluster_bootstrap",
          [](const std::vector<std::int64_t>& items, const std::vector<std::string>& conditions,
             const std::vector<double>& y, const std::string& contrast, std::size_t n_resamples,
             std::uint64_t seed) {
              const auto rows = rows_from(items, conditions, y);
              const auto b = cluster_bootstrap(rows, parse_contrast(contrast), n_resamples, seed);
              return py::make_tuple(b.mean, b.ci_low, b.ci_high);
          },
          py::arg("items"), py::arg("conditions"), py::arg("distances"), py::arg("contrast") = "fin",
          py::arg("n_resamples") = 1000, py::arg("seed") = 0);

    m.def("read_store_layer",
          [](const std::filesystem::path& dir, std::uint32_t layer) {
              const auto store = read_store(dir);
              if (layer >= store.layer_count()) throw py::index_error("layer out of range");
              std::vector<std::string> keys;
              for (const auto& e : store.entries()) keys.push_back(e.key);
              const auto data = store.layer_data(layer);
              Eigen::MatrixXf rows = Eigen::Map<const RowMatrixXf>(data.data(), static_cast<Eigen::Index>(store.total_rows()),
                                                                  store.d());
              return py::make_tuple(keys, rows);
          },
          py::arg("store_dir"), py::arg("layer"));

    m.def("write_fixture",
          [](const std::filesystem::path& dir, std::size_t n_items, std::uint32_t layers, std::uint64_t seed) {
              FixtureOptions opts;
              opts.n_items = n_items;
              opts.layers = layers;
              opts.seed = seed;
              return write_synthetic_fixture(dir, opts).dump();
          },
          py::arg("dir"), py::arg("n_items") = 60, py::arg("layers") = 4, py::arg("seed") = 7);

    m.def("run_stages",
          [](const std::filesystem::path& config, const std::vector<std::string>& stages) {
              const auto c = RunConfig::load(config);
              c.validate();
              std::vector<Stage> list;
              for (const auto& s : stages) list.push_back(parse_stage(s));
              if (list.empty()) list.assign(kStages.begin(), kStages.end());
              std::vector<std::string> out;
              for (const auto& r : run_stages(list, c)) out.push_back(stage_result_json(r));
              return out;
          },
          py::arg("config"), py::arg("stages") = std::vector<std::string>{});
}
