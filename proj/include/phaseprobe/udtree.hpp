#pragma once

#include <array>
#include <cstdint>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include <Eigen/Core>
#include <nlohmann/json.hpp>

#include "phaseprobe/common.hpp"
#include "phaseprobe/stimgen.hpp"

namespace phaseprobe {

class ConlluError : public Error {
public:
    using Error::Error;
};

struct ConlluToken {
    std::uint32_t index = 0;  ///< 1-based
    std::string form;
    std::uint32_t head = 0;   ///< 0 = root
    std::string deprel;
};

/// A dependency tree. Construction validates treeness, so every instance is a
/// single-rooted, acyclic head graph.
class ParsedSentence {
public:
    /// `name` is used in error messages only.
    ParsedSentence(std::vector<ConlluToken> tokens, std::optional<StimulusKey> key = std::nullopt,
                   std::string sent_id = {}, std::string name = {});

    std::size_t size() const { return tokens_.size(); }
    const std::vector<ConlluToken>& tokens() const { return tokens_; }
    const ConlluToken& token(std::uint32_t index) const;  ///< 1-based
    const std::optional<StimulusKey>& stimulus_key() const { return key_; }
    const std::string& sent_id() const { return sent_id_; }

    /// Undirected edges (child, head), one per non-root token, 1-based.
    std::vector<std::array<std::uint32_t, 2>> edges() const;

private:
    std::vector<ConlluToken> tokens_;
    std::optional<StimulusKey> key_;
    std::string sent_id_;
    std::vector<std::uint32_t> depth_;  // edges to root, per token
};

/// Parses a CoNLL-U document. Sentences are separated by blank lines;
/// `# stimulus_key = <item_id>/<condition>` and `# sent_id = ...` comments are
/// picked up. Multiword-token ranges and empty nodes are rejected.
std::vector<ParsedSentence> parse_conllu(std::string_view text);

std::string write_conllu(std::span<const ParsedSentence> sentences);

/// Length of the undirected path between 1-based token indices i and j.
std::uint32_t tree_distance(const ParsedSentence& sentence, std::uint32_t i, std::uint32_t j);

/// n×n matrix of pairwise tree distances (row/column k ↔ token k+1).
Eigen::MatrixXd gold_distance_matrix(const ParsedSentence& sentence);

/// Checks that every stimulus word sits at CoNLL-U index word+1 with the same
/// form. Returns the mismatch reason, or nullopt when aligned.
std::optional<std::string> check_alignment(const Stimulus& stimulus, const ParsedSentence& parse);

struct InvarianceVerdict {
    std::int64_t item_id = 0;
    Pair pair = Pair::wh_esubj;
    std::map<Condition, std::uint32_t> distances;
    bool pass = false;
    std::string reason;  ///< set when the item could not be measured
};

struct ParsedStimulus {
    const ParsedSentence* parse = nullptr;
    const Stimulus* stimulus = nullptr;
};

/// One verdict per pair for a single item. Each pair passes iff its tree
/// distance is identical in all three conditions. Throws ConlluError when a
/// condition is missing or the inputs disagree on the item id.
std::array<InvarianceVerdict, 2> verify_invariance(std::span<const ParsedStimulus> triple);

nlohmann::json verdict_to_json(const InvarianceVerdict& v);
InvarianceVerdict verdict_from_json(const nlohmann::json& j);
std::string write_verdicts_jsonl(std::span<const InvarianceVerdict> verdicts);
std::vector<InvarianceVerdict> read_verdicts_jsonl(std::string_view text);

/// Verdict lookup: pass flag per (item, pair). Items absent from the table are
/// treated as failing.
class VerdictTable {
public:
    VerdictTable() = default;
    explicit VerdictTable(std::span<const InvarianceVerdict> verdicts);
    bool passes(std::int64_t item_id, Pair pair) const;
    std::size_t size() const { return pass_.size(); }

private:
    std::map<std::pair<std::int64_t, Pair>, bool> pass_;
};

/// Summary of a verification run over many items.
struct VerificationReport {
    std::vector<InvarianceVerdict> verdicts;
    std::vector<std::string> log;  ///< exclusion reasons
};

/// Joins stimuli with parses by stimulus key and verifies every item. Items
/// whose parses are missing or misaligned get failing verdicts with a reason.
VerificationReport verify_all(std::span<const Stimulus> stimuli, std::span<const ParsedSentence> parses);

}  // namespace phaseprobe
