#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <utility>
#include <vector>

#include <Eigen/Core>
#include <nlohmann/json.hpp>

#include "phaseprobe/activation_store.hpp"
#include "phaseprobe/common.hpp"

namespace phaseprobe {

class ProbeError : public Error {
public:
    using Error::Error;
};

struct ProbeConfig {
    std::uint32_t rank = 64;
    double learning_rate = 1e-3;
    std::uint32_t batch_size = 256;  ///< sentences per Adam step
    std::uint32_t max_epochs = 100;
    double decay_factor = 0.1;
    std::uint32_t patience = 1;
    std::uint32_t max_resets = 4;
    /// An epoch counts as an improvement only if the dev loss drops by more
    /// than this fraction of the best loss so far.
    double min_relative_improvement = 1e-4;
    /// Held-out fraction when no dev set is supplied.
    double dev_fraction = 0.05;
    std::uint64_t seed = 0;

    void validate(std::uint32_t d) const;
    nlohmann::json to_json() const;
    static ProbeConfig from_json(const nlohmann::json& j);
};

struct EpochLog {
    std::uint32_t epoch = 0;
    double train_loss = 0;
    double dev_loss = 0;
    double best_dev_loss = 0;
    double learning_rate = 0;
};

/// Trained structural probe for one layer. `projection` is r × d and acts on
/// vectors standardized with `stats`.
struct ProbeMatrix {
    std::uint32_t layer = 0;
    Eigen::MatrixXd projection;
    CorpusStats stats;
    ProbeConfig config;
    std::vector<EpochLog> training_log;
    std::uint32_t resets_used = 0;
    bool stopped_early = false;

    std::uint32_t rank() const { return static_cast<std::uint32_t>(projection.rows()); }
    std::uint32_t dim() const { return static_cast<std::uint32_t>(projection.cols()); }
};

/// One training/evaluation sentence: raw (unstandardized) word vectors and
/// the gold tree-distance matrix.
struct ProbeSentence {
    Eigen::MatrixXd words;  ///< n × d
    Eigen::MatrixXd gold;   ///< n × n
};

/// ‖B(u − v)‖² for already-standardized u, v.
double probe_distance(const Eigen::Ref<const Eigen::MatrixXd>& projection, const Eigen::Ref<const Eigen::VectorXd>& u,
                      const Eigen::Ref<const Eigen::VectorXd>& v);
double probe_distance(const ProbeMatrix& probe, const Eigen::Ref<const Eigen::VectorXd>& u,
                      const Eigen::Ref<const Eigen::VectorXd>& v);
/// Standardizes raw u, v with the probe's corpus stats, then measures.
double probe_distance_raw(const ProbeMatrix& probe, const Eigen::Ref<const Eigen::VectorXd>& u,
                          const Eigen::Ref<const Eigen::VectorXd>& v);

/// n × n predicted distances for standardized word rows.
Eigen::MatrixXd predicted_distances(const Eigen::Ref<const Eigen::MatrixXd>& projection,
                                    const Eigen::Ref<const Eigen::MatrixXd>& standardized_words);

/// Mean absolute error over the n(n−1)/2 unordered word pairs.
double sentence_l1_loss(const Eigen::Ref<const Eigen::MatrixXd>& projection,
                        const Eigen::Ref<const Eigen::MatrixXd>& standardized_words,
                        const Eigen::Ref<const Eigen::MatrixXd>& gold);

/// Mean of sentence losses and its gradient with respect to the projection.
std::pair<double, Eigen::MatrixXd> batch_l1_loss_and_gradient(
    const Eigen::Ref<const Eigen::MatrixXd>& projection, std::span<const Eigen::MatrixXd> standardized_words,
    std::span<const Eigen::MatrixXd> gold);

/// Fits the standardizer on the training words, then trains B with Adam on
/// batched L1 loss. Without `dev`, a seeded `dev_fraction` split of `train`
/// is held out. Returns the projection from the best dev epoch.
ProbeMatrix train_probe(std::span<const ProbeSentence> train, const ProbeConfig& config, std::uint32_t layer = 0,
                        std::span<const ProbeSentence> dev = {});

struct ProbeQuality {
    std::uint32_t layer = 0;
    double distance_spearman = 0;
    double uuas = 0;
    std::size_t sentences_evaluated = 0;
    std::size_t sentences_skipped = 0;          ///< fewer than 2 words
    std::size_t spearman_sentences = 0;         ///< entered the Spearman average
    std::size_t spearman_excluded = 0;          ///< too short or degenerate ranks

    nlohmann::json to_json() const;
};

struct EvalOptions {
    std::size_t min_spearman_words = 5;
};

/// Spearman correlation between predicted and gold distances over the
/// unordered pairs of one sentence (average ranks for ties). NaN when either
/// side has no variance.
double sentence_spearman(const Eigen::Ref<const Eigen::MatrixXd>& predicted, const Eigen::Ref<const Eigen::MatrixXd>& gold);

/// Minimum spanning tree of a symmetric distance matrix (Kruskal). Ties are
/// broken by the lexicographic edge index (i, j), i < j.
std::vector<std::pair<std::uint32_t, std::uint32_t>> minimum_spanning_tree(const Eigen::Ref<const Eigen::MatrixXd>& distances);

/// Gold edges (i < j, 0-based) read off a gold distance matrix.
std::vector<std::pair<std::uint32_t, std::uint32_t>> gold_edges(const Eigen::Ref<const Eigen::MatrixXd>& gold);

/// Number of gold edges recovered by the MST of `predicted`.
std::size_t uuas_hits(const Eigen::Ref<const Eigen::MatrixXd>& predicted, const Eigen::Ref<const Eigen::MatrixXd>& gold);

ProbeQuality eval_probe(const ProbeMatrix& probe, std::span<const ProbeSentence> sentences,
                        const EvalOptions& options = {});

/// Writes probe_<layer>.json (header) and probe_<layer>.f32 (B, then mean,
/// then std; little-endian float32) into `dir`. Values are rounded to float32.
void save_probe(const ProbeMatrix& probe, const std::filesystem::path& dir);
ProbeMatrix load_probe(const std::filesystem::path& dir, std::uint32_t layer);

}  // namespace phaseprobe
