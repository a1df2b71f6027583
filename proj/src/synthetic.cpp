#include "phaseprobe/synthetic.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "phaseprobe/io.hpp"

#include <Eigen/QR>

namespace phaseprobe {
namespace {

Eigen::MatrixXd gaussian(Eigen::Index rows, Eigen::Index cols, SplitMix64& rng) {
    Eigen::MatrixXd m(rows, cols);
    for (Eigen::Index i = 0; i < rows; ++i)
        for (Eigen::Index j = 0; j < cols; ++j) m(i, j) = rng.normal();
    return m;
}

double planted(const std::vector<double>& v, std::uint32_t layer) { return layer < v.size() ? v[layer] : 0.0; }

}  // namespace

TreeEmbedder::TreeEmbedder(std::uint32_t d, std::uint32_t r, std::uint64_t seed) : d_(d), r_(r) {
    if (r == 0 || r > d) throw Error("TreeEmbedder: need 0 < r <= d");
    SplitMix64 rng(seed);
    const Eigen::HouseholderQR<Eigen::MatrixXd> qr(gaussian(d, d, rng));
    const Eigen::MatrixXd q = qr.householderQ() * Eigen::MatrixXd::Identity(d, d);
    latent_ = q.leftCols(r);
    complement_ = q.rightCols(d - r);
}

Eigen::MatrixXd TreeEmbedder::latent(const ParsedSentence& tree, SplitMix64& rng, std::vector<int>* used) const {
    const auto n = static_cast<std::uint32_t>(tree.size());
    if (n == 0) return Eigen::MatrixXd(0, r_);
    if (n - 1 > r_) throw Error("tree with " + std::to_string(n) + " tokens needs more than r=" + std::to_string(r_) +
                                " latent directions");
    std::vector<int> dirs(r_);
    std::iota(dirs.begin(), dirs.end(), 0);
    shuffle(dirs.begin(), dirs.end(), rng);

    Eigen::MatrixXd x = Eigen::MatrixXd::Zero(n, r_);
    std::vector<int> edge_dir(n, -1);
    std::vector<double> sign(n, 1.0);
    std::size_t next = 0;
    for (std::uint32_t i = 1; i <= n; ++i) {
        if (tree.token(i).head == 0) continue;
        edge_dir[i - 1] = dirs[next++];
        sign[i - 1] = rng.below(2) == 0 ? 1.0 : -1.0;
    }
    // Position of a token = sum of its edge directions up to the root.
    for (std::uint32_t i = 1; i <= n; ++i) {
        for (std::uint32_t t = i; tree.token(t).head != 0; t = tree.token(t).head)
            x(i - 1, edge_dir[t - 1]) += sign[t - 1];
    }
    if (used) *used = edge_dir;
    return x;
}

Eigen::MatrixXd TreeEmbedder::embed(const Eigen::Ref<const Eigen::MatrixXd>& latent, double noise,
                                    SplitMix64& rng) const {
    Eigen::MatrixXd out = latent * latent_.transpose();
    if (noise > 0 && complement_.cols() > 0)
        out += noise * gaussian(latent.rows(), complement_.cols(), rng) * complement_.transpose();
    return out;
}

ParsedSentence random_tree(std::uint32_t n, SplitMix64& rng, std::string sent_id) {
    if (n == 0) throw Error("random_tree: empty tree");
    std::vector<std::uint32_t> parent(n + 1, 0);
    if (n == 2) {
        parent[2] = 1;
    } else if (n > 2) {
        std::vector<std::uint32_t> pruefer(n - 2);
        for (auto& v : pruefer) v = static_cast<std::uint32_t>(rng.below(n)) + 1;
        std::vector<std::uint32_t> degree(n + 1, 1);
        for (auto v : pruefer) ++degree[v];
        std::vector<std::array<std::uint32_t, 2>> edges;
        for (auto v : pruefer) {
            std::uint32_t leaf = 1;
            while (degree[leaf] != 1) ++leaf;
            edges.push_back({leaf, v});
            --degree[leaf];
            --degree[v];
        }
        std::uint32_t a = 0, b = 0;
        for (std::uint32_t v = 1; v <= n; ++v)
            if (degree[v] == 1) (a == 0 ? a : b) = v;
        edges.push_back({a, b});
        // Orient away from a random root.
        std::vector<std::vector<std::uint32_t>> adj(n + 1);
        for (auto [u, v] : edges) {
            adj[u].push_back(v);
            adj[v].push_back(u);
        }
        const auto root = static_cast<std::uint32_t>(rng.below(n)) + 1;
        std::vector<bool> seen(n + 1, false);
        std::vector<std::uint32_t> stack{root};
        seen[root] = true;
        while (!stack.empty()) {
            const auto u = stack.back();
            stack.pop_back();
            for (auto v : adj[u])
                if (!seen[v]) {
                    seen[v] = true;
                    parent[v] = u;
                    stack.push_back(v);
                }
        }
    }
    std::vector<ConlluToken> tokens;
    for (std::uint32_t i = 1; i <= n; ++i)
        tokens.push_back({i, "w" + std::to_string(i), parent[i], parent[i] == 0 ? "root" : "dep"});
    auto name = sent_id;
    return ParsedSentence(std::move(tokens), std::nullopt, std::move(sent_id), std::move(name));
}

std::vector<ParsedSentence> random_trees(std::size_t count, std::uint32_t min_n, std::uint32_t max_n,
                                         std::uint64_t seed) {
    if (min_n == 0 || min_n > max_n) throw Error("random_trees: need 0 < min_n <= max_n");
    SplitMix64 rng(seed);
    std::vector<ParsedSentence> out;
    out.reserve(count);
    for (std::size_t k = 0; k < count; ++k) {
        const auto n = min_n + static_cast<std::uint32_t>(rng.below(max_n - min_n + 1));
        out.push_back(random_tree(n, rng, "tree-" + std::to_string(k)));
    }
    return out;
}

std::vector<ProbeSentence> tree_metric_sentences(std::span<const ParsedSentence> trees, const TreeEmbedder& embedder,
                                                 double noise, std::uint64_t seed) {
    SplitMix64 rng(seed);
    std::vector<ProbeSentence> out;
    out.reserve(trees.size());
    for (const auto& t : trees) {
        const auto x = embedder.latent(t, rng);
        out.push_back({embedder.embed(x, noise, rng), gold_distance_matrix(t)});
    }
    return out;
}

ParsedSentence template_parse(const Stimulus& s) {
    // Word indices (1-based): 1 What, 2 did, 3 subject, 4 matrix verb.
    const auto n = static_cast<std::uint32_t>(s.tokens.size());
    const auto esubj = s.positions[Role::embedded_subject] + 1;
    const auto evb = s.positions[Role::embedded_verb] + 1;
    const auto wh = s.positions[Role::wh] + 1;
    std::vector<ConlluToken> tokens;
    for (std::uint32_t i = 1; i <= n; ++i) {
        ConlluToken t{i, s.tokens[i - 1], 4, "dep"};
        if (i == 4) {
            t.head = 0;
            t.deprel = "root";
        } else if (i == wh) {
            t.deprel = "obj";
        } else if (i == 2) {
            t.deprel = "aux";
        } else if (i == 3) {
            t.deprel = "nsubj";
        } else if (i == evb) {
            t.deprel = s.condition == Condition::finite ? "ccomp" : "xcomp";
        } else if (i == esubj) {
            t.head = evb;
            t.deprel = "nsubj";
        } else if (i == n) {
            t.deprel = "punct";
        } else {
            t.head = evb;
            t.deprel = "mark";
        }
        tokens.push_back(std::move(t));
    }
    const auto key = s.key();
    return ParsedSentence(std::move(tokens), key, to_string(key), to_string(key));
}

ActivationStore make_stimulus_store(const SyntheticModelSpec& spec, std::span<const Stimulus> stimuli) {
    ActivationStore store(spec.model_id, spec.d, spec.layers);
    store.metadata() = {{"producer", "phaseprobe synthetic"}, {"seed", spec.seed}};
    std::vector<TreeEmbedder> embedders;
    for (std::uint32_t l = 0; l < spec.layers; ++l)
        embedders.emplace_back(spec.d, spec.r, derive_seed(spec.seed, l));

    for (std::size_t k = 0; k < stimuli.size(); ++k) {
        const auto& s = stimuli[k];
        const auto tree = template_parse(s);
        const auto n = static_cast<std::uint32_t>(tree.size());
        const auto wh = s.positions[Role::wh];
        const auto esubj = s.positions[Role::embedded_subject];
        const auto evb = s.positions[Role::embedded_verb];
        SplitMix64 rng(derive_seed(spec.seed ^ stable_hash(to_string(s.key())), 0));
        std::vector<Eigen::MatrixXd> layers;
        for (std::uint32_t l = 0; l < spec.layers; ++l) {
            std::vector<int> dirs;
            Eigen::MatrixXd x = embedders[l].latent(tree, rng, &dirs);
            double wh_offset = 0, evb_offset = 0;
            if (s.condition == Condition::finite) {
                wh_offset = planted(spec.planted.wh_esubj_fin, l);
                evb_offset = planted(spec.planted.esubj_evb_fin, l);
            } else if (s.condition == Condition::infinitival) {
                wh_offset = planted(spec.planted.wh_esubj_inf, l);
                evb_offset = planted(spec.planted.esubj_evb_inf, l);
            }
            if (wh_offset != 0) {
                // Push the wh-word along a direction no edge of this tree uses.
                std::vector<bool> taken(spec.r, false);
                for (int dir : dirs)
                    if (dir >= 0) taken[dir] = true;
                std::vector<std::uint32_t> free;
                for (std::uint32_t j = 0; j < spec.r; ++j)
                    if (!taken[j]) free.push_back(j);
                if (free.empty()) throw Error("no free latent direction for the planted wh offset");
                x(wh, free[rng.below(free.size())]) += std::sqrt(wh_offset);
            }
            if (evb_offset != 0) {
                // Slide the embedded verb along its subject's edge: the
                // subject-verb squared distance becomes 1 + offset.
                if (evb_offset <= -1) throw Error("esubj_evb offset must exceed -1");
                const Eigen::RowVectorXd edge = x.row(esubj) - x.row(evb);
                x.row(evb) = x.row(esubj) - std::sqrt(1.0 + evb_offset) * edge;
            }
            if (spec.jitter > 0)
                for (Eigen::Index i = 0; i < x.rows(); ++i)
                    for (Eigen::Index j = 0; j < x.cols(); ++j) x(i, j) += spec.jitter * rng.normal();
            layers.push_back(embedders[l].embed(x, spec.noise, rng));
        }
        AlignmentEntry alignment;
        for (std::uint32_t w = 0; w < n; ++w) alignment.push_back({w, 1});
        store.add(to_string(s.key()), std::move(alignment), n, layers);
    }
    return store;
}

ActivationStore make_tree_store(const SyntheticModelSpec& spec, std::span<const ParsedSentence> trees,
                                std::uint64_t stream) {
    ActivationStore store(spec.model_id, spec.d, spec.layers);
    store.metadata() = {{"producer", "phaseprobe synthetic"}, {"seed", spec.seed}, {"stream", stream}};
    std::vector<TreeEmbedder> embedders;
    for (std::uint32_t l = 0; l < spec.layers; ++l)
        embedders.emplace_back(spec.d, spec.r, derive_seed(spec.seed, l));
    SplitMix64 rng(derive_seed(spec.seed, 1000 + stream));
    for (const auto& t : trees) {
        std::vector<Eigen::MatrixXd> layers;
        for (std::uint32_t l = 0; l < spec.layers; ++l) {
            Eigen::MatrixXd x = embedders[l].latent(t, rng);
            if (spec.jitter > 0)
                for (Eigen::Index i = 0; i < x.rows(); ++i)
                    for (Eigen::Index j = 0; j < x.cols(); ++j) x(i, j) += spec.jitter * rng.normal();
            layers.push_back(embedders[l].embed(x, spec.noise, rng));
        }
        const auto n = static_cast<std::uint32_t>(t.size());
        AlignmentEntry alignment;
        for (std::uint32_t w = 0; w < n; ++w) alignment.push_back({w, 1});
        store.add(t.sent_id(), std::move(alignment), n, layers);
    }
    return store;
}

void add_word_offset(ActivationStore& store, std::string_view key, std::uint32_t word, std::uint32_t from_layer,
                     const Eigen::Ref<const Eigen::VectorXf>& offset) {
    if (offset.size() != store.d()) throw Error("add_word_offset: offset has the wrong dimension");
    const auto idx = store.index_of(key);
    const auto& e = store.entry(idx);
    if (word >= e.word_count()) throw Error("add_word_offset: word index out of range");
    const auto row = e.row_offset + word;
    for (std::uint32_t l = from_layer; l < store.layer_count(); ++l) {
        auto data = store.layer_data(l);
        for (std::uint32_t c = 0; c < store.d(); ++c) data[row * store.d() + c] += offset[c];
    }
}

}  // namespace phaseprobe

namespace phaseprobe {

nlohmann::json write_synthetic_fixture(const std::filesystem::path& dir, const FixtureOptions& o) {
    namespace fs = std::filesystem;
    if (o.peak_layer >= o.layers) throw Error("fixture peak layer outside the layer range");
    const auto stimuli = generate_stimuli(Lexicon::default_lexicon(), o.n_items, o.seed);

    std::vector<ParsedSentence> parses;
    for (const auto& s : stimuli) parses.push_back(template_parse(s));
    write_file_atomic(dir / "stimuli.conllu", write_conllu(parses));

    SyntheticModelSpec spec;
    spec.model_id = o.model_id;
    spec.d = o.d;
    spec.r = o.r;
    spec.layers = o.layers;
    spec.seed = o.seed;
    for (std::uint32_t l = 0; l < o.layers; ++l) {
        const double dist = std::abs(static_cast<double>(l) - static_cast<double>(o.peak_layer));
        const double shape = std::max(0.0, 1.0 - 0.4 * dist);
        spec.planted.wh_esubj_fin.push_back(1.5 * shape);
        spec.planted.wh_esubj_inf.push_back(0.6 * shape);
        spec.planted.esubj_evb_fin.push_back(-0.4 * shape);
        spec.planted.esubj_evb_inf.push_back(0.4 * shape);
    }
    const auto model_dir = fs::path("stores") / o.model_id;
    auto target = make_stimulus_store(spec, stimuli);
    write_store(target, dir / model_dir / "stimuli");

    const auto train = random_trees(o.train_sentences, 4, std::min<std::uint32_t>(12, o.r + 1), derive_seed(o.seed, 1));
    const auto dev_raw = random_trees(o.dev_sentences, 4, std::min<std::uint32_t>(12, o.r + 1), derive_seed(o.seed, 2));
    std::vector<ParsedSentence> dev;
    for (const auto& t : dev_raw) {
        auto tokens = t.tokens();
        const auto id = "dev-" + t.sent_id();
        dev.emplace_back(std::move(tokens), std::nullopt, id, id);
    }
    write_file_atomic(dir / "train.conllu", write_conllu(train));
    write_file_atomic(dir / "dev.conllu", write_conllu(dev));
    write_store(make_tree_store(spec, train, 1), dir / model_dir / "train");
    write_store(make_tree_store(spec, dev, 2), dir / model_dir / "dev");

    // Patched runs: the bare stimuli get a perturbed embedded subject (or a
    // barely perturbed wh-word) from the peak layer on.
    auto patch = [&](Role role, double scale, const char* name) {
        auto patched = target;
        for (const auto& s : stimuli) {
            if (s.condition != Condition::bare) continue;
            const auto key = to_string(s.key());
            const auto idx = patched.index_of(key);
            const auto& other = role == Role::wh ? s.positions[Role::embedded_subject] : s.positions[Role::wh];
            Eigen::VectorXf offset = (patched.word(o.peak_layer, idx, s.positions[role]) -
                                      patched.word(o.peak_layer, idx, other)).cast<float>() * static_cast<float>(scale);
            add_word_offset(patched, key, s.positions[role], o.peak_layer, offset);
        }
        write_store(patched, dir / model_dir / name);
        return (model_dir / name).generic_string();
    };
    const auto patched_esubj = patch(Role::embedded_subject, 0.3, "patched_esubj");
    const auto patched_wh = patch(Role::wh, 0.002, "patched_wh");

    ProbeConfig probe;
    probe.rank = o.r;
    probe.learning_rate = 0.01;
    probe.batch_size = 16;
    probe.max_epochs = 40;
    auto probe_json = probe.to_json();
    probe_json.erase("seed");
    const nlohmann::json config{
        {"n_items", o.n_items},
        {"seed", o.seed},
        {"out_dir", "run"},
        {"conllu", "stimuli.conllu"},
        {"bootstrap_n", 500},
        {"probe", probe_json},
        {"models",
         {{{"id", o.model_id},
           {"store", (model_dir / "stimuli").generic_string()},
           {"train_store", (model_dir / "train").generic_string()},
           {"train_conllu", "train.conllu"},
           {"dev_store", (model_dir / "dev").generic_string()},
           {"dev_conllu", "dev.conllu"},
           {"patched_stores",
            {{"embedded_subject_first_subword", patched_esubj}, {"wh_first_subword", patched_wh}}}}}},
        {"require_verdicts", {"gradient", "asymmetry", "patch"}}};
    write_file_atomic(dir / "config.json", config.dump(2) + "\n");
    return config;
}

}  // namespace phaseprobe
