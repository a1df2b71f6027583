#include "phaseprobe/activation_store.hpp"

#include <fcntl.h>
#include <unistd.h>

#include <cmath>
#include <cstring>

#include "phaseprobe/io.hpp"

namespace phaseprobe {
namespace {

constexpr std::string_view kManifest = "manifest.json";
constexpr std::string_view kAlignment = "alignment.jsonl";

std::string layer_file(std::uint32_t k) { return "layer_" + std::to_string(k) + ".f32"; }

class StoreLock {
public:
    explicit StoreLock(std::filesystem::path path) : path_(std::move(path)) {
        fd_ = ::open(path_.c_str(), O_CREAT | O_EXCL | O_WRONLY, 0644);
        if (fd_ < 0)
            throw StoreError("store " + path_.parent_path().string() + " is locked by another writer (" +
                             path_.string() + " exists)");
    }
    StoreLock(const StoreLock&) = delete;
    StoreLock& operator=(const StoreLock&) = delete;
    ~StoreLock() {
        ::close(fd_);
        std::error_code ec;
        std::filesystem::remove(path_, ec);
    }

private:
    std::filesystem::path path_;
    int fd_ = -1;
};

template <typename T>
T require(const nlohmann::json& j, const char* field, const std::string& where) {
    try {
        return j.at(field).get<T>();
    } catch (const nlohmann::json::exception& e) {
        throw StoreError(where + ": field '" + field + "': " + e.what());
    }
}

}  // namespace

void validate_alignment(const AlignmentEntry& alignment, std::size_t token_count, std::string_view key) {
    const std::string where = key.empty() ? std::string("alignment") : "alignment of " + std::string(key);
    std::uint64_t next_free = 0;
    for (std::size_t w = 0; w < alignment.size(); ++w) {
        const auto& span = alignment[w];
        if (span.subword_count == 0)
            throw StoreError(where + ": word " + std::to_string(w) + " has an empty subword span");
        if (span.first_subword < next_free)
            throw StoreError(where + ": word " + std::to_string(w) + " overlaps or precedes the previous span");
        const std::uint64_t end = std::uint64_t{span.first_subword} + span.subword_count;
        if (end > token_count)
            throw StoreError(where + ": word " + std::to_string(w) + " span [" + std::to_string(span.first_subword) +
                             ", " + std::to_string(end) + ") exceeds " + std::to_string(token_count) + " tokens");
        next_free = end;
    }
}

Eigen::MatrixXd pool_words(const Eigen::Ref<const Eigen::MatrixXd>& token_vectors, const AlignmentEntry& alignment) {
    validate_alignment(alignment, static_cast<std::size_t>(token_vectors.rows()));
    Eigen::MatrixXd out(static_cast<Eigen::Index>(alignment.size()), token_vectors.cols());
    for (std::size_t w = 0; w < alignment.size(); ++w) {
        const auto& span = alignment[w];
        out.row(static_cast<Eigen::Index>(w)) =
            token_vectors.middleRows(span.first_subword, span.subword_count).colwise().sum() /
            static_cast<double>(span.subword_count);
    }
    return out;
}

nlohmann::json CorpusStats::to_json() const {
    return {{"layer", layer}, {"d", mean.size()}, {"std_floor", kStdFloor}, {"clamped_dims", clamped}};
}

CorpusStats fit_standardizer(const Eigen::Ref<const Eigen::MatrixXd>& training, std::uint32_t layer) {
    const auto n = training.rows();
    if (n < 2) throw StoreError("fit_standardizer needs at least 2 training vectors, got " + std::to_string(n));
    if (!training.allFinite()) throw StoreError("fit_standardizer: training vectors contain non-finite entries");
    CorpusStats stats;
    stats.layer = layer;
    stats.mean = training.colwise().mean().transpose();
    stats.std.resize(training.cols());
    for (Eigen::Index j = 0; j < training.cols(); ++j) {
        const auto col = training.col(j);
        // A constant column gets its exact value as mean so it maps to 0.
        if (col.maxCoeff() == col.minCoeff()) stats.mean(j) = col(0);
        const double var = (col.array() - stats.mean(j)).square().sum() / static_cast<double>(n);
        double sd = std::sqrt(var);
        if (!(sd >= CorpusStats::kStdFloor)) {
            sd = CorpusStats::kStdFloor;
            stats.clamped.push_back(static_cast<std::uint32_t>(j));
        }
        stats.std(j) = sd;
    }
    return stats;
}

Eigen::VectorXd apply_standardizer(const CorpusStats& stats, const Eigen::Ref<const Eigen::VectorXd>& x) {
    if (x.size() != stats.mean.size())
        throw StoreError("apply_standardizer: vector has dimension " + std::to_string(x.size()) + ", stats have " +
                         std::to_string(stats.mean.size()));
    return ((x - stats.mean).array() / stats.std.array()).matrix();
}

Eigen::MatrixXd apply_standardizer_rows(const CorpusStats& stats, const Eigen::Ref<const Eigen::MatrixXd>& rows) {
    if (rows.cols() != stats.mean.size())
        throw StoreError("apply_standardizer: rows have dimension " + std::to_string(rows.cols()) + ", stats have " +
                         std::to_string(stats.mean.size()));
    return ((rows.rowwise() - stats.mean.transpose()).array().rowwise() / stats.std.transpose().array()).matrix();
}

ActivationStore::ActivationStore(std::string model_id, std::uint32_t d, std::uint32_t layer_count)
    : model_id_(std::move(model_id)), d_(d), layer_count_(layer_count), layers_(layer_count) {
    if (d_ == 0) throw StoreError("activation store dimension d must be positive");
}

void ActivationStore::add(std::string key, AlignmentEntry alignment, std::uint32_t token_count,
                          std::span<const RowMatrixXf> layers) {
    if (index_.count(key) != 0) throw StoreError("duplicate stimulus key '" + key + "'");
    if (layers.size() != layer_count_)
        throw StoreError("stimulus '" + key + "': got " + std::to_string(layers.size()) + " layers, store has " +
                         std::to_string(layer_count_));
    validate_alignment(alignment, token_count, key);
    const auto words = static_cast<Eigen::Index>(alignment.size());
    for (std::uint32_t k = 0; k < layer_count_; ++k) {
        const auto& m = layers[k];
        if (m.rows() != words || m.cols() != static_cast<Eigen::Index>(d_))
            throw StoreError("stimulus '" + key + "' layer " + std::to_string(k) + ": expected " +
                             std::to_string(words) + "×" + std::to_string(d_) + ", got " + std::to_string(m.rows()) +
                             "×" + std::to_string(m.cols()));
        if (!m.allFinite())
            throw StoreError("stimulus '" + key + "' layer " + std::to_string(k) + ": non-finite activation");
    }
    for (std::uint32_t k = 0; k < layer_count_; ++k)
        layers_[k].insert(layers_[k].end(), layers[k].data(), layers[k].data() + layers[k].size());
    StoreEntry e{key, token_count, std::move(alignment), total_rows_};
    total_rows_ += static_cast<std::uint64_t>(words);
    index_.emplace(key, entries_.size());
    entries_.push_back(std::move(e));
}

void ActivationStore::add(std::string key, AlignmentEntry alignment, std::uint32_t token_count,
                          std::span<const Eigen::MatrixXd> layers) {
    std::vector<RowMatrixXf> converted;
    converted.reserve(layers.size());
    for (const auto& m : layers) converted.emplace_back(m.cast<float>());
    add(std::move(key), std::move(alignment), token_count, std::span<const RowMatrixXf>(converted));
}

std::optional<std::size_t> ActivationStore::find(std::string_view key) const {
    const auto it = index_.find(key);
    if (it == index_.end()) return std::nullopt;
    return it->second;
}

std::size_t ActivationStore::index_of(std::string_view key) const {
    if (auto i = find(key)) return *i;
    throw StoreError("store for model '" + model_id_ + "' has no stimulus '" + std::string(key) + "'");
}

Eigen::Map<const RowMatrixXf> ActivationStore::words(std::uint32_t layer, std::size_t i) const {
    if (layer >= layer_count_)
        throw StoreError("layer " + std::to_string(layer) + " out of range (store has " +
                         std::to_string(layer_count_) + ")");
    const auto& e = entries_.at(i);
    return {layers_[layer].data() + e.row_offset * d_, static_cast<Eigen::Index>(e.word_count()),
            static_cast<Eigen::Index>(d_)};
}

Eigen::VectorXd ActivationStore::word(std::uint32_t layer, std::size_t i, std::uint32_t w) const {
    const auto m = words(layer, i);
    if (w >= m.rows())
        throw StoreError("word " + std::to_string(w) + " out of range for '" + entries_.at(i).key + "' (" +
                         std::to_string(m.rows()) + " words)");
    return m.row(w).transpose().cast<double>();
}

LayerActivations ActivationStore::activations(std::uint32_t layer, std::size_t i) const {
    return {model_id_, layer, entries_.at(i).key, words(layer, i).cast<double>()};
}

std::span<const float> ActivationStore::layer_data(std::uint32_t layer) const { return layers_.at(layer); }
std::span<float> ActivationStore::layer_data(std::uint32_t layer) { return layers_.at(layer); }

bool operator==(const ActivationStore& a, const ActivationStore& b) {
    if (a.model_id_ != b.model_id_ || a.d_ != b.d_ || a.layer_count_ != b.layer_count_ ||
        a.entries_.size() != b.entries_.size() || a.metadata_ != b.metadata_ ||
        a.pipeline_version_ != b.pipeline_version_)
        return false;
    for (std::size_t i = 0; i < a.entries_.size(); ++i) {
        const auto& x = a.entries_[i];
        const auto& y = b.entries_[i];
        if (x.key != y.key || x.token_count != y.token_count || x.alignment != y.alignment ||
            x.row_offset != y.row_offset)
            return false;
    }
    for (std::uint32_t k = 0; k < a.layer_count_; ++k) {
        const auto& x = a.layers_[k];
        const auto& y = b.layers_[k];
        if (x.size() != y.size()) return false;
        // Bitwise, so NaN payloads and signed zeros count.
        if (!x.empty() && std::memcmp(x.data(), y.data(), x.size() * sizeof(float)) != 0) return false;
    }
    return true;
}

void write_store(const ActivationStore& store, const std::filesystem::path& dir) {
    std::error_code ec;
    std::filesystem::create_directories(dir, ec);
    if (ec) throw StoreError("cannot create store directory " + dir.string() + ": " + ec.message());
    StoreLock lock(dir / ".lock");

    nlohmann::json manifest;
    manifest["format"] = "phaseprobe-activation-store";
    manifest["format_version"] = 1;
    manifest["model_id"] = store.model_id();
    manifest["d"] = store.d();
    manifest["layer_count"] = store.layer_count();
    manifest["dtype"] = "float32";
    manifest["endianness"] = "little";
    manifest["stimulus_count"] = store.size();
    manifest["total_rows"] = store.total_rows();
    manifest["pipeline_version"] = store.pipeline_version();
    manifest["metadata"] = store.metadata();

    nlohmann::json stimuli = nlohmann::json::array();
    std::string alignment;
    for (const auto& e : store.entries()) {
        stimuli.push_back({{"key", e.key}, {"row_offset", e.row_offset}, {"word_count", e.word_count()}});
        nlohmann::json words = nlohmann::json::array();
        for (const auto& s : e.alignment) words.push_back({s.first_subword, s.subword_count});
        alignment += nlohmann::json{{"key", e.key}, {"token_count", e.token_count}, {"words", words}}.dump() + "\n";
    }
    manifest["stimuli"] = std::move(stimuli);
    write_file_atomic(dir / kAlignment, alignment);
    manifest["alignment"] = {{"file", kAlignment}, {"crc32", crc32(alignment)}};

    nlohmann::json layers = nlohmann::json::array();
    for (std::uint32_t k = 0; k < store.layer_count(); ++k) {
        const auto bytes = floats_to_le_bytes(store.layer_data(k));
        write_file_atomic(dir / layer_file(k), bytes);
        layers.push_back({{"layer", k},
                          {"file", layer_file(k)},
                          {"rows", store.total_rows()},
                          {"byte_length", bytes.size()},
                          {"crc32", crc32(bytes)}});
    }
    manifest["layers"] = std::move(layers);
    // Manifest last: a store without one is incomplete.
    write_file_atomic(dir / kManifest, manifest.dump(2) + "\n");
}

nlohmann::json read_store_manifest(const std::filesystem::path& dir) {
    const auto path = dir / kManifest;
    if (!std::filesystem::exists(path)) throw StoreError("missing " + path.string());
    try {
        return nlohmann::json::parse(read_text_file(path));
    } catch (const nlohmann::json::parse_error& e) {
        throw StoreError(path.string() + ": " + e.what());
    }
}

ActivationStore read_store(const std::filesystem::path& dir) {
    const auto manifest = read_store_manifest(dir);
    const std::string where = (dir / kManifest).string();

    const auto dtype = require<std::string>(manifest, "dtype", where);
    if (dtype != "float32") throw StoreError(where + ": unsupported dtype '" + dtype + "'");
    const auto endianness = require<std::string>(manifest, "endianness", where);
    if (endianness != "little") throw StoreError(where + ": unsupported endianness '" + endianness + "'");

    ActivationStore store(require<std::string>(manifest, "model_id", where), require<std::uint32_t>(manifest, "d", where),
                          require<std::uint32_t>(manifest, "layer_count", where));
    store.pipeline_version_ = manifest.value("pipeline_version", std::string());
    store.metadata_ = manifest.value("metadata", nlohmann::json::object());
    const auto d = store.d();

    // Alignment.
    const auto& align_info = manifest.at("alignment");
    const auto align_path = dir / require<std::string>(align_info, "file", where);
    if (!std::filesystem::exists(align_path)) throw StoreError("missing " + align_path.string());
    const auto align_text = read_text_file(align_path);
    if (crc32(align_text) != require<std::uint32_t>(align_info, "crc32", where))
        throw StoreError("checksum mismatch in " + align_path.string());

    const auto stimuli = manifest.at("stimuli");
    const auto stimulus_count = require<std::uint64_t>(manifest, "stimulus_count", where);
    if (stimuli.size() != stimulus_count)
        throw StoreError(where + ": stimulus_count " + std::to_string(stimulus_count) + " but " +
                         std::to_string(stimuli.size()) + " stimulus records");

    std::vector<nlohmann::json> align_records;
    {
        std::size_t start = 0;
        while (start < align_text.size()) {
            auto end = align_text.find('\n', start);
            if (end == std::string::npos) end = align_text.size();
            const auto line = std::string_view(align_text).substr(start, end - start);
            start = end + 1;
            if (line.empty()) continue;
            try {
                align_records.push_back(nlohmann::json::parse(line));
            } catch (const nlohmann::json::parse_error& e) {
                throw StoreError(align_path.string() + ": " + e.what());
            }
        }
    }
    if (align_records.size() != stimuli.size())
        throw StoreError(align_path.string() + ": " + std::to_string(align_records.size()) + " records, manifest lists " +
                         std::to_string(stimuli.size()) + " stimuli");

    std::uint64_t rows = 0;
    for (std::size_t i = 0; i < stimuli.size(); ++i) {
        const auto& s = stimuli[i];
        const auto& a = align_records[i];
        StoreEntry e;
        e.key = require<std::string>(s, "key", where);
        e.row_offset = require<std::uint64_t>(s, "row_offset", where);
        const auto word_count = require<std::uint32_t>(s, "word_count", where);
        if (require<std::string>(a, "key", align_path.string()) != e.key)
            throw StoreError(align_path.string() + ": record " + std::to_string(i) + " is for '" +
                             a.at("key").get<std::string>() + "', manifest expects '" + e.key + "'");
        e.token_count = require<std::uint32_t>(a, "token_count", align_path.string());
        for (const auto& w : a.at("words")) e.alignment.push_back({w.at(0).get<std::uint32_t>(), w.at(1).get<std::uint32_t>()});
        if (e.word_count() != word_count)
            throw StoreError(where + ": '" + e.key + "' has word_count " + std::to_string(word_count) + " but " +
                             std::to_string(e.word_count()) + " aligned words");
        if (e.row_offset != rows)
            throw StoreError(where + ": '" + e.key + "' row_offset " + std::to_string(e.row_offset) + ", expected " +
                             std::to_string(rows));
        validate_alignment(e.alignment, e.token_count, e.key);
        rows += word_count;
        if (store.index_.count(e.key) != 0) throw StoreError(where + ": duplicate key '" + e.key + "'");
        store.index_.emplace(e.key, store.entries_.size());
        store.entries_.push_back(std::move(e));
    }
    store.total_rows_ = rows;
    if (manifest.contains("total_rows") && manifest.at("total_rows").get<std::uint64_t>() != rows)
        throw StoreError(where + ": total_rows disagrees with the stimulus list");

    const auto layers = manifest.at("layers");
    if (layers.size() != store.layer_count())
        throw StoreError(where + ": layer_count " + std::to_string(store.layer_count()) + " but " +
                         std::to_string(layers.size()) + " layer records");
    for (std::uint32_t k = 0; k < store.layer_count(); ++k) {
        const auto& info = layers[k];
        if (require<std::uint32_t>(info, "layer", where) != k)
            throw StoreError(where + ": layer records out of order at position " + std::to_string(k));
        const auto path = dir / require<std::string>(info, "file", where);
        if (!std::filesystem::exists(path)) throw StoreError("missing layer file " + path.string());
        const auto bytes = read_binary_file(path);
        if (crc32(bytes) != require<std::uint32_t>(info, "crc32", where))
            throw StoreError("checksum mismatch in " + path.string() + " (" + std::to_string(bytes.size()) +
                             " bytes read, " + std::to_string(info.value("byte_length", 0ull)) + " expected)");
        const std::uint64_t expected = rows * d * sizeof(float);
        if (bytes.size() != expected || require<std::uint64_t>(info, "rows", where) != rows)
            throw StoreError("dimension mismatch in " + path.string() + ": " + std::to_string(bytes.size()) +
                             " bytes, manifest implies " + std::to_string(rows) + "×" + std::to_string(d) +
                             " float32 = " + std::to_string(expected));
        store.layers_[k] = floats_from_le_bytes(bytes);
        for (float v : store.layers_[k])
            if (!std::isfinite(v)) throw StoreError("non-finite activation in " + path.string());
    }
    return store;
}

}  // namespace phaseprobe
