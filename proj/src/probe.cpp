#include "phaseprobe/probe.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "phaseprobe/io.hpp"
#include "phaseprobe/rng.hpp"

namespace phaseprobe {
namespace {

Eigen::MatrixXd round_to_float(const Eigen::MatrixXd& m) { return m.cast<float>().cast<double>(); }

std::vector<double> average_ranks(const std::vector<double>& values) {
    std::vector<std::size_t> order(values.size());
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return values[a] < values[b]; });
    std::vector<double> ranks(values.size());
    std::size_t i = 0;
    while (i < order.size()) {
        std::size_t j = i;
        while (j + 1 < order.size() && values[order[j + 1]] == values[order[i]]) ++j;
        const double r = 0.5 * static_cast<double>(i + j) + 1.0;
        for (std::size_t k = i; k <= j; ++k) ranks[order[k]] = r;
        i = j + 1;
    }
    return ranks;
}

double mean_sentence_loss(const Eigen::MatrixXd& projection, const std::vector<Eigen::MatrixXd>& words,
                          const std::vector<Eigen::MatrixXd>& gold) {
    if (words.empty()) return 0.0;
    double total = 0;
    for (std::size_t s = 0; s < words.size(); ++s) total += sentence_l1_loss(projection, words[s], gold[s]);
    return total / static_cast<double>(words.size());
}

}  // namespace

void ProbeConfig::validate(std::uint32_t d) const {
    if (rank < 1) throw ProbeError("probe rank must be ≥ 1");
    if (rank > d) throw ProbeError("probe rank " + std::to_string(rank) + " exceeds dimension " + std::to_string(d));
    if (!(learning_rate > 0) || !(decay_factor > 0) || batch_size == 0 || !(dev_fraction > 0 && dev_fraction < 1) ||
        !(min_relative_improvement >= 0))
        throw ProbeError("probe config: rates, factors and batch size must be positive");
}

nlohmann::json ProbeConfig::to_json() const {
    return {{"rank", rank},
            {"learning_rate", learning_rate},
            {"batch_size", batch_size},
            {"max_epochs", max_epochs},
            {"decay_factor", decay_factor},
            {"patience", patience},
            {"max_resets", max_resets},
            {"min_relative_improvement", min_relative_improvement},
            {"dev_fraction", dev_fraction},
            {"seed", seed},
            {"optimizer", "adam"},
            {"weight_decay", 0.0},
            {"gradient_clipping", nullptr}};
}

ProbeConfig ProbeConfig::from_json(const nlohmann::json& j) {
    ProbeConfig c;
    try {
        c.rank = j.value("rank", c.rank);
        c.learning_rate = j.value("learning_rate", c.learning_rate);
        c.batch_size = j.value("batch_size", c.batch_size);
        c.max_epochs = j.value("max_epochs", c.max_epochs);
        c.decay_factor = j.value("decay_factor", c.decay_factor);
        c.patience = j.value("patience", c.patience);
        c.max_resets = j.value("max_resets", c.max_resets);
        c.min_relative_improvement = j.value("min_relative_improvement", c.min_relative_improvement);
        c.dev_fraction = j.value("dev_fraction", c.dev_fraction);
        c.seed = j.value("seed", c.seed);
    } catch (const nlohmann::json::exception& e) {
        throw ProbeError(std::string("malformed probe config: ") + e.what());
    }
    return c;
}

double probe_distance(const Eigen::Ref<const Eigen::MatrixXd>& projection, const Eigen::Ref<const Eigen::VectorXd>& u,
                      const Eigen::Ref<const Eigen::VectorXd>& v) {
    if (u.size() != projection.cols() || v.size() != projection.cols())
        throw ProbeError("probe_distance: vectors of dimension " + std::to_string(u.size()) + "/" +
                         std::to_string(v.size()) + " against a probe of dimension " +
                         std::to_string(projection.cols()));
    return (projection * (u - v)).squaredNorm();
}

double probe_distance(const ProbeMatrix& probe, const Eigen::Ref<const Eigen::VectorXd>& u,
                      const Eigen::Ref<const Eigen::VectorXd>& v) {
    return probe_distance(probe.projection, u, v);
}

double probe_distance_raw(const ProbeMatrix& probe, const Eigen::Ref<const Eigen::VectorXd>& u,
                          const Eigen::Ref<const Eigen::VectorXd>& v) {
    return probe_distance(probe.projection, apply_standardizer(probe.stats, u), apply_standardizer(probe.stats, v));
}

Eigen::MatrixXd predicted_distances(const Eigen::Ref<const Eigen::MatrixXd>& projection,
                                    const Eigen::Ref<const Eigen::MatrixXd>& standardized_words) {
    if (standardized_words.cols() != projection.cols())
        throw ProbeError("predicted_distances: words have dimension " + std::to_string(standardized_words.cols()) +
                         ", probe expects " + std::to_string(projection.cols()));
    const Eigen::MatrixXd p = standardized_words * projection.transpose();  // n × r
    const Eigen::VectorXd sq = p.rowwise().squaredNorm();
    Eigen::MatrixXd out = (-2.0 * p * p.transpose()).colwise() + sq;
    out.rowwise() += sq.transpose();
    // Exact zeros on the diagonal, and no negative round-off.
    out = out.cwiseMax(0.0);
    out.diagonal().setZero();
    return out;
}

double sentence_l1_loss(const Eigen::Ref<const Eigen::MatrixXd>& projection,
                        const Eigen::Ref<const Eigen::MatrixXd>& standardized_words,
                        const Eigen::Ref<const Eigen::MatrixXd>& gold) {
    const auto n = standardized_words.rows();
    if (n < 2) return 0.0;
    const Eigen::MatrixXd p = standardized_words * projection.transpose();
    double total = 0;
    for (Eigen::Index i = 0; i < n; ++i)
        for (Eigen::Index j = i + 1; j < n; ++j) total += std::abs((p.row(i) - p.row(j)).squaredNorm() - gold(i, j));
    return total / (0.5 * static_cast<double>(n) * static_cast<double>(n - 1));
}

std::pair<double, Eigen::MatrixXd> batch_l1_loss_and_gradient(const Eigen::Ref<const Eigen::MatrixXd>& projection,
                                                              std::span<const Eigen::MatrixXd> standardized_words,
                                                              std::span<const Eigen::MatrixXd> gold) {
    Eigen::MatrixXd grad = Eigen::MatrixXd::Zero(projection.rows(), projection.cols());
    double loss = 0;
    const auto batch = static_cast<double>(standardized_words.size());
    if (standardized_words.empty()) return {0.0, grad};

    for (std::size_t s = 0; s < standardized_words.size(); ++s) {
        const auto& x = standardized_words[s];
        const auto n = x.rows();
        if (n < 2) continue;
        const double pairs = 0.5 * static_cast<double>(n) * static_cast<double>(n - 1);
        const Eigen::MatrixXd p = x * projection.transpose();  // n × r
        // Weighted graph Laplacian of the loss signs: Σ_{u<v} w (p_u − p_v)(x_u − x_v)ᵀ = pᵀ L x.
        Eigen::MatrixXd lap = Eigen::MatrixXd::Zero(n, n);
        double sentence_loss = 0;
        for (Eigen::Index i = 0; i < n; ++i) {
            for (Eigen::Index j = i + 1; j < n; ++j) {
                const double residual = (p.row(i) - p.row(j)).squaredNorm() - gold[s](i, j);
                sentence_loss += std::abs(residual);
                const double w = (residual > 0 ? 1.0 : (residual < 0 ? -1.0 : 0.0)) / pairs;
                lap(i, j) -= w;
                lap(j, i) -= w;
                lap(i, i) += w;
                lap(j, j) += w;
            }
        }
        loss += sentence_loss / pairs;
        grad.noalias() += 2.0 * p.transpose() * lap * x;
    }
    return {loss / batch, grad / batch};
}

ProbeMatrix train_probe(std::span<const ProbeSentence> train_in, const ProbeConfig& config, std::uint32_t layer,
                        std::span<const ProbeSentence> dev_in) {
    std::vector<const ProbeSentence*> usable;
    for (const auto& s : train_in) {
        if (s.words.rows() != s.gold.rows() || s.gold.rows() != s.gold.cols())
            throw ProbeError("train_probe: sentence with " + std::to_string(s.words.rows()) + " words has a " +
                             std::to_string(s.gold.rows()) + "×" + std::to_string(s.gold.cols()) + " gold matrix");
        if (s.words.rows() >= 2) usable.push_back(&s);
    }
    if (usable.empty()) throw ProbeError("train_probe: need at least one training sentence with ≥ 2 words");
    const auto d = static_cast<std::uint32_t>(usable.front()->words.cols());
    for (const auto* s : usable)
        if (s->words.cols() != d) throw ProbeError("train_probe: sentences disagree on the vector dimension");
    config.validate(d);

    SplitMix64 rng(derive_seed(config.seed, layer));

    // Seeded dev split when none is supplied.
    std::vector<const ProbeSentence*> train = usable;
    std::vector<const ProbeSentence*> dev;
    if (!dev_in.empty()) {
        for (const auto& s : dev_in)
            if (s.words.rows() >= 2) dev.push_back(&s);
    } else if (train.size() >= 2) {
        shuffle(train.begin(), train.end(), rng);
        const auto n_dev = std::clamp<std::size_t>(
            static_cast<std::size_t>(std::llround(config.dev_fraction * static_cast<double>(train.size()))), 1,
            train.size() - 1);
        dev.assign(train.end() - static_cast<std::ptrdiff_t>(n_dev), train.end());
        train.resize(train.size() - n_dev);
    }
    if (dev.empty()) dev = train;

    std::size_t total_words = 0;
    for (const auto* s : train) total_words += static_cast<std::size_t>(s->words.rows());
    Eigen::MatrixXd stacked(static_cast<Eigen::Index>(total_words), d);
    {
        Eigen::Index row = 0;
        for (const auto* s : train) {
            stacked.middleRows(row, s->words.rows()) = s->words;
            row += s->words.rows();
        }
    }
    ProbeMatrix probe;
    probe.layer = layer;
    probe.config = config;
    probe.stats = fit_standardizer(stacked, layer);
    probe.stats.mean = round_to_float(probe.stats.mean);
    probe.stats.std = round_to_float(probe.stats.std);

    std::vector<Eigen::MatrixXd> train_x, train_gold, dev_x, dev_gold;
    for (const auto* s : train) {
        train_x.push_back(apply_standardizer_rows(probe.stats, s->words));
        train_gold.push_back(s->gold);
    }
    for (const auto* s : dev) {
        dev_x.push_back(apply_standardizer_rows(probe.stats, s->words));
        dev_gold.push_back(s->gold);
    }

    const double bound = 1.0 / std::sqrt(static_cast<double>(d));
    Eigen::MatrixXd b(config.rank, d);
    for (Eigen::Index i = 0; i < b.rows(); ++i)
        for (Eigen::Index j = 0; j < b.cols(); ++j) b(i, j) = rng.uniform(-bound, bound);

    constexpr double kBeta1 = 0.9, kBeta2 = 0.999, kEps = 1e-8;
    Eigen::MatrixXd m = Eigen::MatrixXd::Zero(b.rows(), b.cols());
    Eigen::MatrixXd v = Eigen::MatrixXd::Zero(b.rows(), b.cols());
    std::uint64_t step = 0;
    double lr = config.learning_rate;

    Eigen::MatrixXd best_b = b;
    double best_dev = mean_sentence_loss(b, dev_x, dev_gold);
    std::uint32_t bad_epochs = 0;

    std::vector<std::size_t> order(train_x.size());
    std::iota(order.begin(), order.end(), 0);
    std::vector<Eigen::MatrixXd> batch_x, batch_gold;

    for (std::uint32_t epoch = 0; epoch < config.max_epochs; ++epoch) {
        shuffle(order.begin(), order.end(), rng);
        double epoch_loss = 0;
        for (std::size_t start = 0; start < order.size(); start += config.batch_size) {
            const std::size_t end = std::min(order.size(), start + config.batch_size);
            batch_x.clear();
            batch_gold.clear();
            for (std::size_t k = start; k < end; ++k) {
                batch_x.push_back(train_x[order[k]]);
                batch_gold.push_back(train_gold[order[k]]);
            }
            auto [loss, grad] = batch_l1_loss_and_gradient(b, batch_x, batch_gold);
            if (!std::isfinite(loss) || !grad.allFinite())
                throw ProbeError("train_probe(layer " + std::to_string(layer) + "): non-finite loss at epoch " +
                                 std::to_string(epoch) + ", batch starting at sentence " + std::to_string(start) +
                                 " (lr " + format_double(lr) + ")");
            epoch_loss += loss * static_cast<double>(end - start);
            ++step;
            m = kBeta1 * m + (1 - kBeta1) * grad;
            v = kBeta2 * v + (1 - kBeta2) * grad.cwiseAbs2();
            const double c1 = 1 - std::pow(kBeta1, static_cast<double>(step));
            const double c2 = 1 - std::pow(kBeta2, static_cast<double>(step));
            b.array() -= lr * (m.array() / c1) / ((v.array() / c2).sqrt() + kEps);
        }
        epoch_loss /= static_cast<double>(order.size());

        const double dev_loss = mean_sentence_loss(b, dev_x, dev_gold);
        if (!std::isfinite(dev_loss))
            throw ProbeError("train_probe(layer " + std::to_string(layer) + "): non-finite dev loss at epoch " +
                             std::to_string(epoch));
        if (dev_loss < best_dev * (1 - config.min_relative_improvement)) {
            best_dev = dev_loss;
            best_b = b;
            bad_epochs = 0;
        } else {
            ++bad_epochs;
        }
        probe.training_log.push_back({epoch, epoch_loss, dev_loss, best_dev, lr});

        if (bad_epochs >= config.patience && bad_epochs > 0) {
            if (probe.resets_used >= config.max_resets) {
                probe.stopped_early = true;
                break;
            }
            lr *= config.decay_factor;
            ++probe.resets_used;
            bad_epochs = 0;
        }
    }

    probe.projection = round_to_float(best_b);
    return probe;
}

nlohmann::json ProbeQuality::to_json() const {
    return {{"layer", layer},
            {"distance_spearman", distance_spearman},
            {"uuas", uuas},
            {"sentences_evaluated", sentences_evaluated},
            {"sentences_skipped", sentences_skipped},
            {"spearman_sentences", spearman_sentences},
            {"spearman_excluded", spearman_excluded}};
}

double sentence_spearman(const Eigen::Ref<const Eigen::MatrixXd>& predicted, const Eigen::Ref<const Eigen::MatrixXd>& gold) {
    const auto n = predicted.rows();
    std::vector<double> a, b;
    for (Eigen::Index i = 0; i < n; ++i)
        for (Eigen::Index j = i + 1; j < n; ++j) {
            a.push_back(predicted(i, j));
            b.push_back(gold(i, j));
        }
    if (a.size() < 2) return std::nan("");
    const auto ra = average_ranks(a);
    const auto rb = average_ranks(b);
    const double ma = std::accumulate(ra.begin(), ra.end(), 0.0) / static_cast<double>(ra.size());
    const double mb = std::accumulate(rb.begin(), rb.end(), 0.0) / static_cast<double>(rb.size());
    double sab = 0, saa = 0, sbb = 0;
    for (std::size_t k = 0; k < ra.size(); ++k) {
        sab += (ra[k] - ma) * (rb[k] - mb);
        saa += (ra[k] - ma) * (ra[k] - ma);
        sbb += (rb[k] - mb) * (rb[k] - mb);
    }
    if (saa == 0 || sbb == 0) return std::nan("");
    return std::clamp(sab / std::sqrt(saa * sbb), -1.0, 1.0);
}

std::vector<std::pair<std::uint32_t, std::uint32_t>> minimum_spanning_tree(const Eigen::Ref<const Eigen::MatrixXd>& distances) {
    const auto n = static_cast<std::uint32_t>(distances.rows());
    struct Edge {
        double w;
        std::uint32_t i, j;
    };
    std::vector<Edge> edges;
    edges.reserve(static_cast<std::size_t>(n) * (n > 0 ? n - 1 : 0) / 2);
    for (std::uint32_t i = 0; i < n; ++i)
        for (std::uint32_t j = i + 1; j < n; ++j) edges.push_back({distances(i, j), i, j});
    std::sort(edges.begin(), edges.end(), [](const Edge& a, const Edge& b) {
        if (a.w != b.w) return a.w < b.w;
        if (a.i != b.i) return a.i < b.i;
        return a.j < b.j;
    });
    std::vector<std::uint32_t> parent(n);
    std::iota(parent.begin(), parent.end(), 0u);
    auto find = [&](std::uint32_t x) {
        while (parent[x] != x) x = parent[x] = parent[parent[x]];
        return x;
    };
    std::vector<std::pair<std::uint32_t, std::uint32_t>> tree;
    for (const auto& e : edges) {
        const auto a = find(e.i);
        const auto c = find(e.j);
        if (a == c) continue;
        parent[a] = c;
        tree.emplace_back(e.i, e.j);
        if (tree.size() + 1 == n) break;
    }
    return tree;
}

std::vector<std::pair<std::uint32_t, std::uint32_t>> gold_edges(const Eigen::Ref<const Eigen::MatrixXd>& gold) {
    std::vector<std::pair<std::uint32_t, std::uint32_t>> out;
    for (Eigen::Index i = 0; i < gold.rows(); ++i)
        for (Eigen::Index j = i + 1; j < gold.cols(); ++j)
            if (gold(i, j) == 1.0) out.emplace_back(static_cast<std::uint32_t>(i), static_cast<std::uint32_t>(j));
    return out;
}

std::size_t uuas_hits(const Eigen::Ref<const Eigen::MatrixXd>& predicted, const Eigen::Ref<const Eigen::MatrixXd>& gold) {
    std::size_t hits = 0;
    for (const auto& [i, j] : minimum_spanning_tree(predicted))
        if (gold(i, j) == 1.0) ++hits;
    return hits;
}

ProbeQuality eval_probe(const ProbeMatrix& probe, std::span<const ProbeSentence> sentences, const EvalOptions& options) {
    ProbeQuality q;
    q.layer = probe.layer;
    double spearman_sum = 0;
    std::size_t hits = 0, total_edges = 0;
    for (const auto& s : sentences) {
        const auto n = static_cast<std::size_t>(s.words.rows());
        if (n < 2) {
            ++q.sentences_skipped;
            continue;
        }
        ++q.sentences_evaluated;
        const auto pred = predicted_distances(probe.projection, apply_standardizer_rows(probe.stats, s.words));
        hits += uuas_hits(pred, s.gold);
        total_edges += n - 1;
        if (n < options.min_spearman_words) {
            ++q.spearman_excluded;
            continue;
        }
        const double rho = sentence_spearman(pred, s.gold);
        if (std::isnan(rho)) {
            ++q.spearman_excluded;
            continue;
        }
        spearman_sum += rho;
        ++q.spearman_sentences;
    }
    q.uuas = total_edges ? static_cast<double>(hits) / static_cast<double>(total_edges) : 0.0;
    q.distance_spearman = q.spearman_sentences ? spearman_sum / static_cast<double>(q.spearman_sentences) : 0.0;
    return q;
}

void save_probe(const ProbeMatrix& probe, const std::filesystem::path& dir) {
    const auto r = probe.rank();
    const auto d = probe.dim();
    std::vector<float> values;
    values.reserve(static_cast<std::size_t>(r) * d + 2 * d);
    for (std::uint32_t i = 0; i < r; ++i)
        for (std::uint32_t j = 0; j < d; ++j) values.push_back(static_cast<float>(probe.projection(i, j)));
    for (std::uint32_t j = 0; j < d; ++j) values.push_back(static_cast<float>(probe.stats.mean(j)));
    for (std::uint32_t j = 0; j < d; ++j) values.push_back(static_cast<float>(probe.stats.std(j)));
    const auto bytes = floats_to_le_bytes(values);
    const auto stem = "probe_" + std::to_string(probe.layer);

    nlohmann::json log = nlohmann::json::array();
    for (const auto& e : probe.training_log)
        log.push_back({{"epoch", e.epoch},
                       {"train_loss", e.train_loss},
                       {"dev_loss", e.dev_loss},
                       {"best_dev_loss", e.best_dev_loss},
                       {"learning_rate", e.learning_rate}});
    nlohmann::json header{{"format", "phaseprobe-probe"},
                          {"format_version", 1},
                          {"layer", probe.layer},
                          {"r", r},
                          {"d", d},
                          {"dtype", "float32"},
                          {"endianness", "little"},
                          {"layout", "projection[r][d], mean[d], std[d]"},
                          {"file", stem + ".f32"},
                          {"byte_length", bytes.size()},
                          {"crc32", crc32(bytes)},
                          {"config", probe.config.to_json()},
                          {"corpus_stats", probe.stats.to_json()},
                          {"resets_used", probe.resets_used},
                          {"stopped_early", probe.stopped_early},
                          {"final_train_loss", log.empty() ? nlohmann::json(nullptr) : log.back()["train_loss"]},
                          {"final_dev_loss", log.empty() ? nlohmann::json(nullptr) : log.back()["dev_loss"]},
                          {"training_log", log}};
    write_file_atomic(dir / (stem + ".f32"), bytes);
    write_file_atomic(dir / (stem + ".json"), header.dump(2) + "\n");
}

ProbeMatrix load_probe(const std::filesystem::path& dir, std::uint32_t layer) {
    const auto stem = "probe_" + std::to_string(layer);
    const auto header_path = dir / (stem + ".json");
    if (!std::filesystem::exists(header_path)) throw ProbeError("missing probe header " + header_path.string());
    nlohmann::json header;
    try {
        header = nlohmann::json::parse(read_text_file(header_path));
    } catch (const nlohmann::json::parse_error& e) {
        throw ProbeError(header_path.string() + ": " + e.what());
    }
    ProbeMatrix probe;
    std::uint32_t r = 0, d = 0;
    std::uint32_t expected_crc = 0;
    std::string file;
    try {
        probe.layer = header.at("layer").get<std::uint32_t>();
        r = header.at("r").get<std::uint32_t>();
        d = header.at("d").get<std::uint32_t>();
        expected_crc = header.at("crc32").get<std::uint32_t>();
        file = header.at("file").get<std::string>();
        probe.config = ProbeConfig::from_json(header.at("config"));
        probe.resets_used = header.value("resets_used", 0u);
        probe.stopped_early = header.value("stopped_early", false);
        for (const auto& e : header.value("training_log", nlohmann::json::array()))
            probe.training_log.push_back({e.at("epoch").get<std::uint32_t>(), e.at("train_loss").get<double>(),
                                          e.at("dev_loss").get<double>(), e.at("best_dev_loss").get<double>(),
                                          e.at("learning_rate").get<double>()});
        for (const auto& c : header.at("corpus_stats").at("clamped_dims"))
            probe.stats.clamped.push_back(c.get<std::uint32_t>());
    } catch (const nlohmann::json::exception& e) {
        throw ProbeError(header_path.string() + ": " + e.what());
    }
    if (probe.layer != layer)
        throw ProbeError(header_path.string() + ": header is for layer " + std::to_string(probe.layer));
    const auto bytes = read_binary_file(dir / file);
    if (crc32(bytes) != expected_crc) throw ProbeError("checksum mismatch in " + (dir / file).string());
    const std::size_t expected = (static_cast<std::size_t>(r) * d + 2 * d) * sizeof(float);
    if (bytes.size() != expected)
        throw ProbeError("dimension mismatch in " + (dir / file).string() + ": " + std::to_string(bytes.size()) +
                         " bytes, header implies " + std::to_string(expected));
    const auto values = floats_from_le_bytes(bytes);
    probe.projection.resize(r, d);
    std::size_t k = 0;
    for (std::uint32_t i = 0; i < r; ++i)
        for (std::uint32_t j = 0; j < d; ++j) probe.projection(i, j) = values[k++];
    probe.stats.layer = layer;
    probe.stats.mean.resize(d);
    probe.stats.std.resize(d);
    for (std::uint32_t j = 0; j < d; ++j) probe.stats.mean(j) = values[k++];
    for (std::uint32_t j = 0; j < d; ++j) probe.stats.std(j) = values[k++];
    if (!probe.projection.allFinite()) throw ProbeError(header_path.string() + ": non-finite projection entries");
    return probe;
}

}  // namespace phaseprobe
