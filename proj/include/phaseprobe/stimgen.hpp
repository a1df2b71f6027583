#pragma once

// Three-condition wh-movement stimuli from a combinatorial lexicon.
//
//   bare         What did SUBJ V_bare   OBJ_acc    V_base ?
//   infinitival  What did SUBJ V_inf    OBJ_acc to V_base ?
//   finite       What did SUBJ V_bridge OBJ_nom    V_past ?

#include <cstdint>
#include <filesystem>
#include <iterator>
#include <string>
#include <string_view>
#include <vector>

#include <nlohmann/json.hpp>

#include "phaseprobe/common.hpp"

namespace phaseprobe {

class LexiconError : public Error {
public:
    using Error::Error;
};

struct EmbeddedSubject {
    std::string accusative;
    std::string nominative;
    friend bool operator==(const EmbeddedSubject&, const EmbeddedSubject&) = default;
};

struct EmbeddedVerb {
    std::string base;
    std::string past;
    friend bool operator==(const EmbeddedVerb&, const EmbeddedVerb&) = default;
};

/// How matrix subjects relate to the embedded-subject list.
enum class SubjectMode {
    disjoint,  ///< matrix subjects come from their own list
    shared,    ///< matrix subjects are the nominative forms of the embedded list
};

/// Slot sizes of the default lexicon.
struct LexiconSizes {
    std::size_t matrix_subjects = 7;
    std::size_t embedded_subjects = 7;
    std::size_t bare_verbs = 4;
    std::size_t infinitival_verbs = 4;
    std::size_t bridge_verbs = 7;
    std::size_t embedded_verbs = 20;
};

/// Validated word lists. Construction enforces the slot sizes
/// (7/7/4/4/7/20), single-token nonempty entries and distinct case forms.
class Lexicon {
public:
    /// Throws LexiconError when any invariant fails. `sizes` is relaxed only
    /// for test lexicons; the default enforces the standard slot counts.
    Lexicon(std::vector<std::string> matrix_subjects, std::vector<EmbeddedSubject> embedded_subjects,
            std::vector<std::string> bare_verbs, std::vector<std::string> infinitival_verbs,
            std::vector<std::string> bridge_verbs, std::vector<EmbeddedVerb> embedded_verbs,
            SubjectMode mode = SubjectMode::disjoint, const LexiconSizes& sizes = LexiconSizes{});

    /// Builds a lexicon with arbitrary slot sizes (each ≥ 1); used for small
    /// fixtures.
    static Lexicon unconstrained(std::vector<std::string> matrix_subjects,
                                 std::vector<EmbeddedSubject> embedded_subjects,
                                 std::vector<std::string> bare_verbs,
                                 std::vector<std::string> infinitival_verbs,
                                 std::vector<std::string> bridge_verbs,
                                 std::vector<EmbeddedVerb> embedded_verbs,
                                 SubjectMode mode = SubjectMode::disjoint);

    static Lexicon default_lexicon(SubjectMode mode = SubjectMode::disjoint);
    static Lexicon from_json(const nlohmann::json& j);
    static Lexicon load(const std::filesystem::path& path);
    nlohmann::json to_json() const;

    const std::vector<std::string>& matrix_subjects() const { return matrix_subjects_; }
    const std::vector<EmbeddedSubject>& embedded_subjects() const { return embedded_subjects_; }
    const std::vector<std::string>& bare_verbs() const { return bare_verbs_; }
    const std::vector<std::string>& infinitival_verbs() const { return infinitival_verbs_; }
    const std::vector<std::string>& bridge_verbs() const { return bridge_verbs_; }
    const std::vector<EmbeddedVerb>& embedded_verbs() const { return embedded_verbs_; }
    SubjectMode mode() const { return mode_; }

private:
    Lexicon() = default;
    void validate(const LexiconSizes* sizes) const;

    std::vector<std::string> matrix_subjects_;
    std::vector<EmbeddedSubject> embedded_subjects_;
    std::vector<std::string> bare_verbs_;
    std::vector<std::string> infinitival_verbs_;
    std::vector<std::string> bridge_verbs_;
    std::vector<EmbeddedVerb> embedded_verbs_;
    SubjectMode mode_ = SubjectMode::disjoint;
};

struct Item {
    std::int64_t item_id = 0;
    std::string matrix_subject;
    EmbeddedSubject embedded_subject;
    std::string bare_verb;
    std::string infinitival_verb;
    std::string bridge_verb;
    EmbeddedVerb embedded_verb;

    friend bool operator==(const Item&, const Item&) = default;
};

/// True when the item satisfies the distinctness constraints.
bool item_is_valid(const Item& item);

struct Stimulus {
    std::int64_t item_id = 0;
    Condition condition = Condition::bare;
    std::vector<std::string> tokens;  ///< words plus the final "?"
    Positions positions;

    StimulusKey key() const { return {item_id, condition}; }
    /// Surface string: tokens joined by spaces, with "?" attached.
    std::string text() const;

    friend bool operator==(const Stimulus&, const Stimulus&) = default;
};

/// All lexicon combinations that satisfy the item constraints, in a fixed
/// mixed-radix order. Item ids are the raw combination index, so an item keeps
/// its id across samples drawn from the same lexicon.
class CandidateSet {
public:
    explicit CandidateSet(const Lexicon& lexicon);

    std::size_t size() const { return valid_.size(); }
    /// Full product size before constraints.
    std::uint64_t product_size() const { return product_; }
    Item at(std::size_t k) const;
    Item decode(std::uint64_t combination) const;
    const std::vector<std::uint64_t>& combinations() const { return valid_; }

    class iterator {
    public:
        using iterator_category = std::forward_iterator_tag;
        using value_type = Item;
        using difference_type = std::ptrdiff_t;
        using pointer = void;
        using reference = Item;

        iterator() = default;
        iterator(const CandidateSet* set, std::size_t k) : set_(set), k_(k) {}
        Item operator*() const { return set_->at(k_); }
        iterator& operator++() { ++k_; return *this; }
        iterator operator++(int) { auto t = *this; ++k_; return t; }
        friend bool operator==(const iterator& a, const iterator& b) { return a.k_ == b.k_; }

    private:
        const CandidateSet* set_ = nullptr;
        std::size_t k_ = 0;
    };

    iterator begin() const { return {this, 0}; }
    iterator end() const { return {this, valid_.size()}; }

private:
    Lexicon lexicon_;
    std::uint64_t product_ = 0;
    std::vector<std::uint64_t> valid_;
};

CandidateSet enumerate_candidates(const Lexicon& lexicon);

/// Uniform sample without replacement: seeded shuffle of the candidate index
/// space, first n taken. Throws LexiconError when n exceeds the candidate count.
std::vector<Item> sample_items(const Lexicon& lexicon, std::size_t n, std::uint64_t seed);

/// One stimulus per condition, in bare/infinitival/finite order.
std::array<Stimulus, 3> realize_stimuli(const Item& item);

/// sample_items followed by realize_stimuli, flattened.
std::vector<Stimulus> generate_stimuli(const Lexicon& lexicon, std::size_t n, std::uint64_t seed);

nlohmann::json stimulus_to_json(const Stimulus& s);
Stimulus stimulus_from_json(const nlohmann::json& j);

std::string write_stimuli_jsonl(const std::vector<Stimulus>& stimuli);
std::vector<Stimulus> read_stimuli_jsonl(std::string_view text);

}  // namespace phaseprobe
