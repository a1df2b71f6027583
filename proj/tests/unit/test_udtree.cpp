#include <doctest.h>

#include "helpers.hpp"
#include "oracles.hpp"
#include "phaseprobe/synthetic.hpp"
#include "phaseprobe/udtree.hpp"

using namespace phaseprobe;

namespace {

std::vector<ParsedSentence> load(const std::string& name) {
    return parse_conllu(read_text_file(testing::fixture(name)));
}

std::vector<std::pair<int, int>> edge_list(const ParsedSentence& s) {
    std::vector<std::pair<int, int>> out;
    for (const auto& t : s.tokens())
        if (t.head != 0) out.emplace_back(static_cast<int>(t.index) - 1, static_cast<int>(t.head) - 1);
    return out;
}

std::string row(int id, const std::string& form, int head) {
    return std::to_string(id) + "\t" + form + "\t_\t_\t_\t_\t" + std::to_string(head) + "\tdep\t_\t_\n";
}

std::array<Stimulus, 3> example_stimuli() { return realize_stimuli(sample_items(testing::example_lexicon(), 1, 0)[0]); }

}  // namespace

TEST_SUITE("udtree") {

TEST_CASE("example parses load with their stimulus keys") {
    const auto parses = load("example.conllu");
    REQUIRE(parses.size() == 3);
    CHECK(parses[0].stimulus_key()->condition == Condition::bare);
    CHECK(parses[1].size() == 8);
    CHECK(parses[2].token(6).deprel == "ccomp");
    const auto words = load("example_bare_words.conllu");
    REQUIRE(words.size() == 1);
    CHECK(words[0].size() == 6);
}

TEST_CASE("example distances: wh-esubj 3, esubj-evb 1, against a BFS oracle") {
    const auto parses = load("example.conllu");
    const auto stimuli = example_stimuli();
    for (std::size_t k = 0; k < 3; ++k) {
        const auto& s = stimuli[k];
        const auto& p = parses[k];
        const auto wh = s.positions[Role::wh] + 1;
        const auto es = s.positions[Role::embedded_subject] + 1;
        const auto ev = s.positions[Role::embedded_verb] + 1;
        CHECK(tree_distance(p, wh, es) == 3);
        CHECK(tree_distance(p, es, ev) == 1);
        const auto bfs = oracle::bfs_distances(static_cast<int>(p.size()), edge_list(p));
        const auto gold = gold_distance_matrix(p);
        for (std::uint32_t i = 1; i <= p.size(); ++i)
            for (std::uint32_t j = 1; j <= p.size(); ++j) {
                CHECK(tree_distance(p, i, j) == static_cast<std::uint32_t>(bfs[i - 1][j - 1]));
                CHECK(gold(i - 1, j - 1) == bfs[i - 1][j - 1]);
            }
    }
}

TEST_CASE("tree distance is a metric on random trees") {
    SplitMix64 rng(5);
    for (int t = 0; t < 30; ++t) {
        const auto tree = random_tree(2 + static_cast<std::uint32_t>(rng.below(12)), rng);
        const auto bfs = oracle::bfs_distances(static_cast<int>(tree.size()), edge_list(tree));
        const auto n = static_cast<std::uint32_t>(tree.size());
        for (std::uint32_t i = 1; i <= n; ++i) {
            CHECK(tree_distance(tree, i, i) == 0);
            for (std::uint32_t j = 1; j <= n; ++j) {
                CHECK(tree_distance(tree, i, j) == tree_distance(tree, j, i));
                CHECK(tree_distance(tree, i, j) == static_cast<std::uint32_t>(bfs[i - 1][j - 1]));
                for (std::uint32_t k = 1; k <= n; ++k)
                    CHECK(tree_distance(tree, i, k) <= tree_distance(tree, i, j) + tree_distance(tree, j, k));
            }
        }
    }
}

TEST_CASE("single-token sentence") {
    const auto s = parse_conllu(row(1, "Hi", 0));
    REQUIRE(s.size() == 1);
    CHECK(tree_distance(s[0], 1, 1) == 0);
    CHECK_THROWS_AS(tree_distance(s[0], 1, 2), ConlluError);
}

TEST_CASE("malformed documents are rejected with a located message") {
    auto message = [](const std::string& text) {
        try {
            parse_conllu(text);
        } catch (const ConlluError& e) {
            return std::string(e.what());
        }
        return std::string();
    };
    CHECK(message(read_text_file(testing::fixture("cycle.conllu"))).find("cycle") != std::string::npos);
    CHECK(message(row(1, "a", 0) + row(2, "b", 0)).find("root") != std::string::npos);
    CHECK(message(row(1, "a", 2) + row(2, "b", 1)).find("cycle") != std::string::npos);
    CHECK(message(row(1, "a", 0) + row(2, "b", 7)).find("head") != std::string::npos);
    CHECK(message("1-2\tdon't\t_\t_\t_\t_\t_\t_\t_\t_\n" + row(1, "do", 0)).find("multiword") != std::string::npos);
    CHECK(message(row(1, "a", 0) + "1.1\tb\t_\t_\t_\t_\t_\t_\t_\t_\n").find("empty node") != std::string::npos);
    CHECK(message("1\ta\t_\t0\troot\n").find("10 tab-separated") != std::string::npos);
    CHECK(message(row(1, "a", 0) + row(3, "b", 1)).find("1..") != std::string::npos);
    CHECK(message(row(1, "a", 1)).find("itself") != std::string::npos);
    CHECK(message(row(1, "a", 0) + "\n" + row(1, "a", 0) + row(2, "b", 0)).find("line") != std::string::npos);
}

TEST_CASE("CoNLL-U round trip") {
    const auto parses = load("example.conllu");
    const auto text = write_conllu(parses);
    const auto back = parse_conllu(text);
    REQUIRE(back.size() == parses.size());
    for (std::size_t k = 0; k < back.size(); ++k) {
        CHECK(back[k].stimulus_key() == parses[k].stimulus_key());
        CHECK(back[k].sent_id() == parses[k].sent_id());
        for (std::uint32_t i = 1; i <= back[k].size(); ++i) {
            CHECK(back[k].token(i).form == parses[k].token(i).form);
            CHECK(back[k].token(i).head == parses[k].token(i).head);
            CHECK(back[k].token(i).deprel == parses[k].token(i).deprel);
        }
    }
}

TEST_CASE("template parses reproduce the example trees") {
    const auto parses = load("example.conllu");
    const auto stimuli = example_stimuli();
    for (std::size_t k = 0; k < 3; ++k) {
        const auto t = template_parse(stimuli[k]);
        REQUIRE(t.size() == parses[k].size());
        for (std::uint32_t i = 1; i <= t.size(); ++i) {
            CHECK(t.token(i).head == parses[k].token(i).head);
            CHECK(t.token(i).deprel == parses[k].token(i).deprel);
        }
    }
}

TEST_CASE("invariance on the example triple passes both pairs") {
    const auto parses = load("example.conllu");
    const auto stimuli = example_stimuli();
    std::vector<ParsedStimulus> triple;
    for (std::size_t k = 0; k < 3; ++k) triple.push_back({&parses[k], &stimuli[k]});
    const auto v = verify_invariance(triple);
    CHECK(v[0].pair == Pair::wh_esubj);
    CHECK(v[0].pass);
    CHECK(v[1].pass);
    for (Condition c : kConditions) {
        CHECK(v[0].distances.at(c) == 3);
        CHECK(v[1].distances.at(c) == 1);
    }
}

TEST_CASE("a shortened wh path fails only that pair") {
    auto parses = load("example.conllu");
    parses[1] = load("example_inf_short.conllu")[0];
    const auto stimuli = example_stimuli();
    std::vector<Stimulus> all(stimuli.begin(), stimuli.end());
    const auto report = verify_all(all, parses);
    REQUIRE(report.verdicts.size() == 2);
    CHECK_FALSE(report.verdicts[0].pass);
    CHECK(report.verdicts[0].distances.at(Condition::infinitival) == 2);
    CHECK(report.verdicts[1].pass);
    const VerdictTable table(report.verdicts);
    CHECK_FALSE(table.passes(0, Pair::wh_esubj));
    CHECK(table.passes(0, Pair::esubj_evb));
    CHECK_FALSE(table.passes(99, Pair::esubj_evb));
}

TEST_CASE("missing or misaligned parses fail both pairs with a reason") {
    auto parses = load("example.conllu");
    const auto stimuli = example_stimuli();
    std::vector<Stimulus> all(stimuli.begin(), stimuli.end());
    parses.pop_back();
    auto report = verify_all(all, parses);
    CHECK_FALSE(report.verdicts[0].pass);
    CHECK_FALSE(report.verdicts[1].pass);
    CHECK_FALSE(report.verdicts[0].reason.empty());
    CHECK_FALSE(report.log.empty());

    CHECK(check_alignment(stimuli[0], load("example_bare_words.conllu")[0]).has_value());
    CHECK_FALSE(check_alignment(stimuli[0], load("example.conllu")[0]).has_value());
}

TEST_CASE("verify_invariance input errors") {
    const auto parses = load("example.conllu");
    const auto stimuli = example_stimuli();
    std::vector<ParsedStimulus> two{{&parses[0], &stimuli[0]}, {&parses[1], &stimuli[1]}};
    CHECK_THROWS_AS(verify_invariance(two), ConlluError);
    std::vector<ParsedStimulus> swapped{{&parses[1], &stimuli[0]}, {&parses[0], &stimuli[1]}, {&parses[2], &stimuli[2]}};
    CHECK_THROWS_AS(verify_invariance(swapped), ConlluError);
}

TEST_CASE("verdict JSONL round trip") {
    InvarianceVerdict v{12, Pair::esubj_evb, {{Condition::bare, 1}, {Condition::finite, 2}, {Condition::infinitival, 1}}, false, ""};
    InvarianceVerdict w{13, Pair::wh_esubj, {}, false, "no parse for 13/bare"};
    const std::vector<InvarianceVerdict> vs{v, w};
    const auto back = read_verdicts_jsonl(write_verdicts_jsonl(vs));
    REQUIRE(back.size() == 2);
    CHECK(back[0].item_id == 12);
    CHECK(back[0].distances == v.distances);
    CHECK(back[1].reason == w.reason);
}

}
