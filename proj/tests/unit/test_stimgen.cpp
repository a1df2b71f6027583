#include <doctest.h>

#include <algorithm>
#include <map>
#include <set>

#include "helpers.hpp"
#include "oracles.hpp"
#include "phaseprobe/stimgen.hpp"

using namespace phaseprobe;

namespace {

Lexicon tiny(std::vector<std::string> matrix, std::vector<EmbeddedSubject> embedded) {
    return Lexicon::unconstrained(std::move(matrix), std::move(embedded), {"see"}, {"expect"}, {"think"},
                                  {{"eat", "ate"}});
}

}  // namespace

TEST_SUITE("stimgen") {

TEST_CASE("example item realizes the three reference sentences") {
    const auto items = sample_items(testing::example_lexicon(), 1, 0);
    REQUIRE(items.size() == 1);
    const auto s = realize_stimuli(items[0]);
    CHECK(s[0].condition == Condition::bare);
    CHECK(s[0].text() == "What did she see him eat?");
    CHECK(s[1].text() == "What did she expect him to eat?");
    CHECK(s[2].text() == "What did she think he ate?");
}

TEST_CASE("position tags follow the templates") {
    const auto s = realize_stimuli(sample_items(testing::example_lexicon(), 1, 0)[0]);
    CHECK(s[0].positions[Role::wh] == 0);
    CHECK(s[0].positions[Role::embedded_subject] == 4);
    CHECK(s[0].positions[Role::embedded_verb] == 5);
    CHECK(s[1].positions[Role::embedded_verb] == s[1].positions[Role::embedded_subject] + 2);
    CHECK(s[1].tokens[s[1].positions[Role::embedded_verb] - 1] == "to");
    CHECK(s[2].positions[Role::embedded_subject] == 4);
    CHECK(s[2].positions[Role::embedded_verb] == 5);
    for (const auto& st : s) {
        CHECK(st.tokens[st.positions[Role::wh]] == "What");
        CHECK(st.tokens.back() == "?");
    }
}

TEST_CASE("default lexicon count matches nested-loop enumeration") {
    const auto lex = Lexicon::default_lexicon();
    const auto set = enumerate_candidates(lex);
    CHECK(set.size() == 109760);
    CHECK(set.size() == oracle::count_items(oracle::lexicon_lists(lex.to_json(), false)));
    CHECK(static_cast<std::size_t>(std::distance(set.begin(), set.end())) == set.size());
}

TEST_CASE("shared subject mode excludes matrix subjects equal to the embedded pronoun") {
    const auto lex = Lexicon::default_lexicon(SubjectMode::shared);
    const auto set = enumerate_candidates(lex);
    CHECK(set.size() == oracle::count_items(oracle::lexicon_lists(lex.to_json(), true)));
    CHECK(set.size() == 94080);
    CHECK(set.size() < set.product_size());
}

TEST_CASE("a matrix subject equal to the embedded forms excludes everything") {
    CHECK(enumerate_candidates(tiny({"he"}, {{"him", "he"}})).size() == 0);
    CHECK(enumerate_candidates(tiny({"him"}, {{"him", "he"}})).size() == 0);
    CHECK(enumerate_candidates(tiny({"she"}, {{"him", "he"}})).size() == 1);
}

TEST_CASE("every enumerated item satisfies the constraints and keeps its id") {
    const auto lex = Lexicon::unconstrained({"he", "she", "you"}, {{"him", "he"}, {"her", "she"}}, {"see", "make"},
                                            {"expect", "make"}, {"think"}, {{"eat", "ate"}, {"buy", "bought"}});
    const auto set = enumerate_candidates(lex);
    std::size_t brute = 0;
    for (const auto& ms : lex.matrix_subjects())
        for (const auto& es : lex.embedded_subjects())
            for (const auto& bv : lex.bare_verbs())
                for (const auto& iv : lex.infinitival_verbs())
                    for (const auto& br : lex.bridge_verbs())
                        for (std::size_t k = 0; k < lex.embedded_verbs().size(); ++k)
                            if (ms != es.accusative && ms != es.nominative && bv != iv && bv != br && iv != br) ++brute;
    CHECK(set.size() == brute);
    std::set<std::int64_t> ids;
    for (const auto& item : set) {
        CHECK(item_is_valid(item));
        CHECK(set.decode(static_cast<std::uint64_t>(item.item_id)) == item);
        ids.insert(item.item_id);
    }
    CHECK(ids.size() == set.size());
}

TEST_CASE("sampling edge cases") {
    const auto lex = Lexicon::default_lexicon();
    CHECK(sample_items(lex, 0, 5).empty());
    CHECK_THROWS_AS(sample_items(tiny({"she"}, {{"him", "he"}}), 2, 0), LexiconError);

    // Exactly 5 candidates: sampling all of them returns the candidate set.
    const auto five = Lexicon::unconstrained({"she"}, {{"him", "he"}}, {"see"}, {"expect"}, {"think"},
                                             {{"eat", "ate"}, {"buy", "bought"}, {"sell", "sold"}, {"take", "took"},
                                              {"hide", "hid"}});
    const auto set = enumerate_candidates(five);
    REQUIRE(set.size() == 5);
    auto sampled = sample_items(five, 5, 42);
    std::vector<Item> all(set.begin(), set.end());
    auto by_id = [](const Item& a, const Item& b) { return a.item_id < b.item_id; };
    std::sort(sampled.begin(), sampled.end(), by_id);
    CHECK(sampled == all);
}

TEST_CASE("sampling is deterministic and seed dependent") {
    const auto lex = Lexicon::default_lexicon();
    const auto a = sample_items(lex, 1000, 11);
    CHECK(a == sample_items(lex, 1000, 11));
    std::set<std::int64_t> ids;
    for (const auto& i : a) ids.insert(i.item_id);
    CHECK(ids.size() == 1000);
    bool any_differ = false;
    for (std::uint64_t s = 0; s < 5; ++s) any_differ = any_differ || sample_items(lex, 50, s) != sample_items(lex, 50, s + 100);
    CHECK(any_differ);
}

TEST_CASE("sampling one item is close to uniform over candidates") {
    const auto lex = Lexicon::unconstrained({"she"}, {{"him", "he"}}, {"see"}, {"expect"}, {"think"},
                                            {{"eat", "ate"}, {"buy", "bought"}, {"sell", "sold"}, {"take", "took"}});
    std::map<std::int64_t, int> counts;
    const int draws = 4000;
    for (int s = 0; s < draws; ++s) ++counts[sample_items(lex, 1, static_cast<std::uint64_t>(s))[0].item_id];
    REQUIRE(counts.size() == 4);
    double chi2 = 0;
    for (const auto& [id, c] : counts) chi2 += (c - draws / 4.0) * (c - draws / 4.0) / (draws / 4.0);
    CHECK(chi2 < 16.27);  // 0.999 quantile of chi-square with 3 df
}

TEST_CASE("realized stimuli carry the right case and tense") {
    const auto lex = Lexicon::default_lexicon();
    for (const auto& item : sample_items(lex, 200, 3)) {
        const auto s = realize_stimuli(item);
        std::multiset<Condition> conds;
        for (const auto& st : s) conds.insert(st.condition);
        CHECK(conds == std::multiset<Condition>{Condition::bare, Condition::infinitival, Condition::finite});
        for (const auto& st : s) {
            const auto& subj = st.tokens[st.positions[Role::embedded_subject]];
            const auto& verb = st.tokens[st.positions[Role::embedded_verb]];
            if (st.condition == Condition::finite) {
                CHECK(subj == item.embedded_subject.nominative);
                CHECK(verb == item.embedded_verb.past);
                CHECK(st.tokens[3] == item.bridge_verb);
            } else {
                CHECK(subj == item.embedded_subject.accusative);
                CHECK(verb == item.embedded_verb.base);
                CHECK(st.tokens[3] == (st.condition == Condition::bare ? item.bare_verb : item.infinitival_verb));
            }
            CHECK(st.tokens[2] == item.matrix_subject);
        }
    }
}

TEST_CASE("1000 items give 3000 stimuli and byte-identical JSONL") {
    const auto lex = Lexicon::default_lexicon();
    const auto a = write_stimuli_jsonl(generate_stimuli(lex, 1000, 2024));
    const auto b = write_stimuli_jsonl(generate_stimuli(lex, 1000, 2024));
    CHECK(a == b);
    CHECK(std::count(a.begin(), a.end(), '\n') == 3000);
    const auto back = read_stimuli_jsonl(a);
    CHECK(back == generate_stimuli(lex, 1000, 2024));
}

TEST_CASE("lexicon validation") {
    CHECK_THROWS_AS(Lexicon({"you"}, {{"him", "he"}}, {"see"}, {"expect"}, {"think"}, {{"eat", "ate"}}), LexiconError);
    CHECK_THROWS_AS(Lexicon::unconstrained({"you"}, {{"him", "him"}}, {"see"}, {"expect"}, {"think"}, {{"eat", "ate"}}),
                    LexiconError);
    CHECK_THROWS_AS(Lexicon::unconstrained({""}, {{"him", "he"}}, {"see"}, {"expect"}, {"think"}, {{"eat", "ate"}}),
                    LexiconError);
    CHECK_THROWS_AS(Lexicon::unconstrained({"some one"}, {{"him", "he"}}, {"see"}, {"expect"}, {"think"}, {{"eat", "ate"}}),
                    LexiconError);
    CHECK_THROWS_AS(Lexicon::unconstrained({"you"}, {}, {"see"}, {"expect"}, {"think"}, {{"eat", "ate"}}), LexiconError);
}

TEST_CASE("lexicon JSON round trip") {
    const auto lex = Lexicon::default_lexicon();
    const auto back = Lexicon::from_json(lex.to_json());
    CHECK(back.to_json() == lex.to_json());
    auto j = lex.to_json();
    j["bare_verbs"].push_back("hear");
    CHECK_THROWS_AS(Lexicon::from_json(j), LexiconError);
}

TEST_CASE("stimulus JSON keeps positions and text") {
    const auto s = realize_stimuli(sample_items(testing::example_lexicon(), 1, 0)[0])[1];
    const auto j = stimulus_to_json(s);
    CHECK(j.at("text") == "What did she expect him to eat?");
    CHECK(j.at("positions").at("embedded_verb") == 6);
    CHECK(stimulus_from_json(j) == s);
    CHECK_THROWS(read_stimuli_jsonl("{\"item_id\": 1}\n"));
}

}
