#pragma once

// On-disk activation store.
//
//   <dir>/manifest.json    model id, d, layer count, dtype, endianness,
//                          per-stimulus row offsets, per-file CRC32
//   <dir>/alignment.jsonl  one record per stimulus: key, token_count, words
//                          as [first_subword, subword_count] spans
//   <dir>/layer_<k>.f32    little-endian float32, row-major
//                          [total_word_rows × d], stimuli in manifest order
//
// Layer 0 is the embedding layer.

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Core>
#include <nlohmann/json.hpp>

#include "phaseprobe/common.hpp"

namespace phaseprobe {

class StoreError : public Error {
public:
    using Error::Error;
};

using RowMatrixXf = Eigen::Matrix<float, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using RowMatrixXd = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

inline constexpr std::string_view kStorePipelineVersion = "phaseprobe-store/1";

struct SubwordSpan {
    std::uint32_t first_subword = 0;
    std::uint32_t subword_count = 0;
    friend bool operator==(const SubwordSpan&, const SubwordSpan&) = default;
};

/// Word → subword spans for one stimulus.
using AlignmentEntry = std::vector<SubwordSpan>;

/// Throws StoreError unless spans are nonempty, ordered, non-overlapping and
/// inside [0, token_count).
void validate_alignment(const AlignmentEntry& alignment, std::size_t token_count, std::string_view key = {});

/// Mean of each word's subword rows. `token_vectors` is tokens × d.
Eigen::MatrixXd pool_words(const Eigen::Ref<const Eigen::MatrixXd>& token_vectors, const AlignmentEntry& alignment);

/// Per-layer word vectors of one stimulus.
struct LayerActivations {
    std::string model_id;
    std::uint32_t layer = 0;
    std::string stimulus_key;
    Eigen::MatrixXd vectors;  ///< words × d
};

struct CorpusStats {
    static constexpr double kStdFloor = 1e-8;

    std::uint32_t layer = 0;
    Eigen::VectorXd mean;
    Eigen::VectorXd std;
    std::vector<std::uint32_t> clamped;  ///< dimensions whose std hit the floor

    nlohmann::json to_json() const;  ///< metadata only (layer, d, clamped)
};

/// Population mean/std per dimension over the rows of `training` (N × d, N ≥ 2).
CorpusStats fit_standardizer(const Eigen::Ref<const Eigen::MatrixXd>& training, std::uint32_t layer = 0);
Eigen::VectorXd apply_standardizer(const CorpusStats& stats, const Eigen::Ref<const Eigen::VectorXd>& x);
Eigen::MatrixXd apply_standardizer_rows(const CorpusStats& stats, const Eigen::Ref<const Eigen::MatrixXd>& rows);

struct StoreEntry {
    std::string key;
    std::uint32_t token_count = 0;
    AlignmentEntry alignment;
    std::uint64_t row_offset = 0;

    std::uint32_t word_count() const { return static_cast<std::uint32_t>(alignment.size()); }
};

/// In-memory store. Vectors are kept as float32 exactly as they sit on disk,
/// so write → read is bit-identical.
class ActivationStore {
public:
    ActivationStore(std::string model_id, std::uint32_t d, std::uint32_t layer_count);

    /// Appends one stimulus. `layers[k]` holds the word vectors (words × d)
    /// for layer k; every layer must be present.
    void add(std::string key, AlignmentEntry alignment, std::uint32_t token_count,
             std::span<const RowMatrixXf> layers);
    void add(std::string key, AlignmentEntry alignment, std::uint32_t token_count,
             std::span<const Eigen::MatrixXd> layers);

    const std::string& model_id() const { return model_id_; }
    std::uint32_t d() const { return d_; }
    std::uint32_t layer_count() const { return layer_count_; }
    std::size_t size() const { return entries_.size(); }
    std::uint64_t total_rows() const { return total_rows_; }

    const std::vector<StoreEntry>& entries() const { return entries_; }
    const StoreEntry& entry(std::size_t i) const { return entries_.at(i); }
    std::optional<std::size_t> find(std::string_view key) const;
    std::size_t index_of(std::string_view key) const;  ///< throws StoreError when absent

    /// Word vectors of entry `i` at `layer`, viewed in place.
    Eigen::Map<const RowMatrixXf> words(std::uint32_t layer, std::size_t i) const;
    /// Single word vector promoted to double.
    Eigen::VectorXd word(std::uint32_t layer, std::size_t i, std::uint32_t w) const;
    LayerActivations activations(std::uint32_t layer, std::size_t i) const;

    /// Raw layer tensor (total_rows × d, row-major).
    std::span<const float> layer_data(std::uint32_t layer) const;
    std::span<float> layer_data(std::uint32_t layer);

    /// Free-form metadata carried in the manifest (producer, framework, ...).
    nlohmann::json& metadata() { return metadata_; }
    const nlohmann::json& metadata() const { return metadata_; }
    const std::string& pipeline_version() const { return pipeline_version_; }
    void set_pipeline_version(std::string v) { pipeline_version_ = std::move(v); }

    friend bool operator==(const ActivationStore& a, const ActivationStore& b);

private:
    friend ActivationStore read_store(const std::filesystem::path& dir);

    std::string model_id_;
    std::uint32_t d_;
    std::uint32_t layer_count_;
    std::string pipeline_version_{kStorePipelineVersion};
    nlohmann::json metadata_ = nlohmann::json::object();
    std::vector<StoreEntry> entries_;
    std::map<std::string, std::size_t, std::less<>> index_;
    std::vector<std::vector<float>> layers_;
    std::uint64_t total_rows_ = 0;
};

/// Writes the store directory. Holds `<dir>/.lock` for the duration; a second
/// concurrent writer fails with StoreError.
void write_store(const ActivationStore& store, const std::filesystem::path& dir);

/// Reads and validates a store directory. Checksum, size or dimension
/// mismatches raise StoreError naming the offending file.
ActivationStore read_store(const std::filesystem::path& dir);

/// Reads only the manifest (no tensor I/O).
nlohmann::json read_store_manifest(const std::filesystem::path& dir);

}  // namespace phaseprobe
