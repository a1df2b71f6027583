#pragma once

// Synthetic activations with a known structure, for fixtures and acceptance
// checks. Words of a tree get latent coordinates whose squared distances are
// the tree distances: every edge is assigned its own orthonormal latent
// direction. The latent space (dimension r) is rotated into d dimensions and
// the orthogonal complement carries nuisance noise.

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Core>

#include "phaseprobe/activation_store.hpp"
#include "phaseprobe/probe.hpp"
#include "phaseprobe/rng.hpp"
#include "phaseprobe/stimgen.hpp"
#include "phaseprobe/udtree.hpp"

namespace phaseprobe {

/// Random rotation of an r-dimensional latent space into R^d.
class TreeEmbedder {
public:
    TreeEmbedder(std::uint32_t d, std::uint32_t r, std::uint64_t seed);

    std::uint32_t d() const { return d_; }
    std::uint32_t r() const { return r_; }
    const Eigen::MatrixXd& latent_basis() const { return latent_; }          ///< d × r, orthonormal columns
    const Eigen::MatrixXd& complement_basis() const { return complement_; }  ///< d × (d − r)

    /// n × r latent coordinates with ‖x_i − x_j‖² = tree distance. Edges draw
    /// distinct latent directions (with random sign); requires n − 1 ≤ r.
    /// `used`, when given, receives the direction index of each token's edge
    /// to its head (−1 for the root).
    Eigen::MatrixXd latent(const ParsedSentence& tree, SplitMix64& rng, std::vector<int>* used = nullptr) const;

    /// n × d vectors: latent rotated into R^d plus N(0, noise²) along the
    /// complement.
    Eigen::MatrixXd embed(const Eigen::Ref<const Eigen::MatrixXd>& latent, double noise, SplitMix64& rng) const;

private:
    std::uint32_t d_, r_;
    Eigen::MatrixXd latent_;
    Eigen::MatrixXd complement_;
};

/// Uniformly random labelled tree on n tokens (Prüfer decoding), rooted at a
/// random token. Forms are "w1".."wn", relations "dep" and "root".
ParsedSentence random_tree(std::uint32_t n, SplitMix64& rng, std::string sent_id = {});

std::vector<ParsedSentence> random_trees(std::size_t count, std::uint32_t min_n, std::uint32_t max_n,
                                         std::uint64_t seed);

/// Tree-metric probe sentences (gold from `trees`), embedded with `embedder`.
std::vector<ProbeSentence> tree_metric_sentences(std::span<const ParsedSentence> trees, const TreeEmbedder& embedder,
                                                 double noise, std::uint64_t seed);

/// UD parse of a stimulus following the template arcs: the matrix verb heads
/// the wh-word (obj), "did" (aux), the matrix subject (nsubj), the embedded
/// verb (xcomp, or ccomp when finite) and "?" (punct); the embedded verb
/// heads its subject (nsubj) and, when infinitival, "to" (mark).
ParsedSentence template_parse(const Stimulus& stimulus);

/// Planted effects per layer, as offsets in squared latent distance relative
/// to bare. Empty vectors mean no effect.
struct PlantedEffects {
    std::vector<double> wh_esubj_fin, wh_esubj_inf;    ///< ≥ 0
    std::vector<double> esubj_evb_fin, esubj_evb_inf;  ///< > −1
};

struct SyntheticModelSpec {
    std::string model_id = "synthetic";
    std::uint32_t d = 32;
    std::uint32_t r = 16;
    std::uint32_t layers = 6;
    double noise = 0.5;    ///< complement noise sd
    double jitter = 0.05;  ///< per-word latent noise sd
    std::uint64_t seed = 0;
    PlantedEffects planted;
};

/// Store over the stimuli with the template trees' metric plus planted
/// effects. Every word is a single subword.
ActivationStore make_stimulus_store(const SyntheticModelSpec& spec, std::span<const Stimulus> stimuli);

/// Store over probe-training trees, keyed by sent_id, plus the matching
/// probe sentences are recoverable via the same trees.
ActivationStore make_tree_store(const SyntheticModelSpec& spec, std::span<const ParsedSentence> trees,
                                std::uint64_t stream = 1);

/// Adds `offset` to one word's row at every layer ≥ `from_layer`.
void add_word_offset(ActivationStore& store, std::string_view key, std::uint32_t word, std::uint32_t from_layer,
                     const Eigen::Ref<const Eigen::VectorXf>& offset);

}  // namespace phaseprobe

namespace phaseprobe {

struct FixtureOptions {
    std::string model_id = "synthetic";
    std::size_t n_items = 60;
    std::uint32_t layers = 4;
    std::uint32_t d = 24;
    std::uint32_t r = 12;
    std::size_t train_sentences = 240;
    std::size_t dev_sentences = 40;
    std::uint64_t seed = 7;
    /// Layer whose planted finite effect peaks; patches are applied there.
    std::uint32_t peak_layer = 2;
};

/// Writes a complete synthetic run under `dir`: stimulus parses
/// (stimuli.conllu), training and dev corpora with parses, the stimulus
/// store, two patched stores and config.json. Returns the config.
nlohmann::json write_synthetic_fixture(const std::filesystem::path& dir, const FixtureOptions& options = {});

}  // namespace phaseprobe
