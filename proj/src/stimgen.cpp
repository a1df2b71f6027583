#include "phaseprobe/stimgen.hpp"

#include <algorithm>
#include <set>
#include <sstream>

#include "phaseprobe/io.hpp"
#include "phaseprobe/rng.hpp"

namespace phaseprobe {
namespace {

bool is_single_token(const std::string& w) {
    if (w.empty() || w == "?") return false;
    return std::none_of(w.begin(), w.end(), [](unsigned char c) { return std::isspace(c) != 0; });
}

void check_words(const std::vector<std::string>& words, std::string_view slot, std::size_t expected,
                 bool check_size) {
    if (check_size && words.size() != expected)
        throw LexiconError(std::string(slot) + ": expected " + std::to_string(expected) + " entries, got " +
                           std::to_string(words.size()));
    if (words.empty()) throw LexiconError(std::string(slot) + ": list is empty");
    for (const auto& w : words)
        if (!is_single_token(w))
            throw LexiconError(std::string(slot) + ": entry '" + w + "' is not a nonempty single token");
}

std::vector<std::string> nominatives(const std::vector<EmbeddedSubject>& subjects) {
    std::vector<std::string> out;
    out.reserve(subjects.size());
    for (const auto& s : subjects) out.push_back(s.nominative);
    return out;
}

}  // namespace

Lexicon::Lexicon(std::vector<std::string> matrix_subjects, std::vector<EmbeddedSubject> embedded_subjects,
                 std::vector<std::string> bare_verbs, std::vector<std::string> infinitival_verbs,
                 std::vector<std::string> bridge_verbs, std::vector<EmbeddedVerb> embedded_verbs,
                 SubjectMode mode, const LexiconSizes& sizes)
    : matrix_subjects_(std::move(matrix_subjects)),
      embedded_subjects_(std::move(embedded_subjects)),
      bare_verbs_(std::move(bare_verbs)),
      infinitival_verbs_(std::move(infinitival_verbs)),
      bridge_verbs_(std::move(bridge_verbs)),
      embedded_verbs_(std::move(embedded_verbs)),
      mode_(mode) {
    if (mode_ == SubjectMode::shared) matrix_subjects_ = nominatives(embedded_subjects_);
    validate(&sizes);
}

Lexicon Lexicon::unconstrained(std::vector<std::string> matrix_subjects,
                               std::vector<EmbeddedSubject> embedded_subjects,
                               std::vector<std::string> bare_verbs, std::vector<std::string> infinitival_verbs,
                               std::vector<std::string> bridge_verbs, std::vector<EmbeddedVerb> embedded_verbs,
                               SubjectMode mode) {
    Lexicon lex;
    lex.matrix_subjects_ = std::move(matrix_subjects);
    lex.embedded_subjects_ = std::move(embedded_subjects);
    lex.bare_verbs_ = std::move(bare_verbs);
    lex.infinitival_verbs_ = std::move(infinitival_verbs);
    lex.bridge_verbs_ = std::move(bridge_verbs);
    lex.embedded_verbs_ = std::move(embedded_verbs);
    lex.mode_ = mode;
    if (mode == SubjectMode::shared) lex.matrix_subjects_ = nominatives(lex.embedded_subjects_);
    lex.validate(nullptr);
    return lex;
}

void Lexicon::validate(const LexiconSizes* sizes) const {
    const bool strict = sizes != nullptr;
    const LexiconSizes s = strict ? *sizes : LexiconSizes{};
    check_words(matrix_subjects_, "matrix_subjects", s.matrix_subjects, strict);
    check_words(bare_verbs_, "bare_verbs", s.bare_verbs, strict);
    check_words(infinitival_verbs_, "infinitival_verbs", s.infinitival_verbs, strict);
    check_words(bridge_verbs_, "bridge_verbs", s.bridge_verbs, strict);

    if (strict && embedded_subjects_.size() != s.embedded_subjects)
        throw LexiconError("embedded_subjects: expected " + std::to_string(s.embedded_subjects) + " entries, got " +
                           std::to_string(embedded_subjects_.size()));
    if (embedded_subjects_.empty()) throw LexiconError("embedded_subjects: list is empty");
    for (const auto& e : embedded_subjects_) {
        if (!is_single_token(e.accusative) || !is_single_token(e.nominative))
            throw LexiconError("embedded_subjects: entry (" + e.accusative + ", " + e.nominative +
                               ") is not a pair of single tokens");
        if (e.accusative == e.nominative)
            throw LexiconError("embedded_subjects: accusative and nominative forms of '" + e.accusative +
                               "' must differ");
    }

    if (strict && embedded_verbs_.size() != s.embedded_verbs)
        throw LexiconError("embedded_verbs: expected " + std::to_string(s.embedded_verbs) + " entries, got " +
                           std::to_string(embedded_verbs_.size()));
    if (embedded_verbs_.empty()) throw LexiconError("embedded_verbs: list is empty");
    for (const auto& v : embedded_verbs_)
        if (!is_single_token(v.base) || !is_single_token(v.past))
            throw LexiconError("embedded_verbs: entry (" + v.base + ", " + v.past +
                               ") is not a pair of single tokens");
}

Lexicon Lexicon::default_lexicon(SubjectMode mode) {
    return Lexicon(
        {"you", "someone", "somebody", "everyone", "everybody", "nobody", "anyone"},
        {{"him", "he"}, {"her", "she"}, {"them", "they"}, {"us", "we"}, {"me", "I"}, {"thee", "thou"},
         {"whom", "who"}},
        {"see", "watch", "make", "let"}, {"expect", "want", "allow", "need"},
        {"think", "believe", "claim", "say", "know", "suppose", "report"},
        {{"eat", "ate"},     {"drink", "drank"}, {"buy", "bought"},  {"sell", "sold"},    {"take", "took"},
         {"bring", "brought"}, {"find", "found"}, {"break", "broke"}, {"build", "built"},  {"cook", "cooked"},
         {"write", "wrote"}, {"steal", "stole"}, {"fix", "fixed"},   {"draw", "drew"},    {"hide", "hid"},
         {"carry", "carried"}, {"throw", "threw"}, {"send", "sent"}, {"keep", "kept"},    {"choose", "chose"}},
        mode);
}

Lexicon Lexicon::from_json(const nlohmann::json& j) {
    try {
        const SubjectMode mode =
            j.value("mode", std::string("disjoint")) == "shared" ? SubjectMode::shared : SubjectMode::disjoint;
        std::vector<EmbeddedSubject> es;
        for (const auto& p : j.at("embedded_subjects")) es.push_back({p.at(0).get<std::string>(), p.at(1).get<std::string>()});
        std::vector<EmbeddedVerb> ev;
        for (const auto& p : j.at("embedded_verbs")) ev.push_back({p.at(0).get<std::string>(), p.at(1).get<std::string>()});
        std::vector<std::string> ms;
        if (mode == SubjectMode::disjoint) ms = j.at("matrix_subjects").get<std::vector<std::string>>();
        return Lexicon(std::move(ms), std::move(es), j.at("bare_verbs").get<std::vector<std::string>>(),
                       j.at("infinitival_verbs").get<std::vector<std::string>>(),
                       j.at("bridge_verbs").get<std::vector<std::string>>(), std::move(ev), mode);
    } catch (const nlohmann::json::exception& e) {
        throw LexiconError(std::string("malformed lexicon JSON: ") + e.what());
    }
}

Lexicon Lexicon::load(const std::filesystem::path& path) {
    nlohmann::json j;
    try {
        j = nlohmann::json::parse(read_text_file(path));
    } catch (const nlohmann::json::parse_error& e) {
        throw LexiconError(path.string() + ": " + e.what());
    }
    return from_json(j);
}

nlohmann::json Lexicon::to_json() const {
    nlohmann::json j;
    j["mode"] = mode_ == SubjectMode::shared ? "shared" : "disjoint";
    if (mode_ == SubjectMode::disjoint) j["matrix_subjects"] = matrix_subjects_;
    j["embedded_subjects"] = nlohmann::json::array();
    for (const auto& e : embedded_subjects_) j["embedded_subjects"].push_back({e.accusative, e.nominative});
    j["bare_verbs"] = bare_verbs_;
    j["infinitival_verbs"] = infinitival_verbs_;
    j["bridge_verbs"] = bridge_verbs_;
    j["embedded_verbs"] = nlohmann::json::array();
    for (const auto& v : embedded_verbs_) j["embedded_verbs"].push_back({v.base, v.past});
    return j;
}

bool item_is_valid(const Item& item) {
    if (item.matrix_subject == item.embedded_subject.accusative ||
        item.matrix_subject == item.embedded_subject.nominative)
        return false;
    return item.bare_verb != item.infinitival_verb && item.bare_verb != item.bridge_verb &&
           item.infinitival_verb != item.bridge_verb;
}

std::string Stimulus::text() const {
    std::string out;
    for (std::size_t i = 0; i < tokens.size(); ++i) {
        if (i > 0 && tokens[i] != "?") out += ' ';
        out += tokens[i];
    }
    return out;
}

CandidateSet::CandidateSet(const Lexicon& lexicon) : lexicon_(lexicon) {
    product_ = static_cast<std::uint64_t>(lexicon.matrix_subjects().size()) * lexicon.embedded_subjects().size() *
               lexicon.bare_verbs().size() * lexicon.infinitival_verbs().size() * lexicon.bridge_verbs().size() *
               lexicon.embedded_verbs().size();
    for (std::uint64_t c = 0; c < product_; ++c)
        if (item_is_valid(decode(c))) valid_.push_back(c);
}

Item CandidateSet::decode(std::uint64_t combination) const {
    const Lexicon& lx = lexicon_;
    std::uint64_t c = combination;
    auto take = [&c](std::size_t radix) {
        const auto digit = static_cast<std::size_t>(c % radix);
        c /= radix;
        return digit;
    };
    // Least significant slot first; mirrors the nesting matrix_subject → embedded_verb.
    const std::size_t ev = take(lx.embedded_verbs().size());
    const std::size_t br = take(lx.bridge_verbs().size());
    const std::size_t iv = take(lx.infinitival_verbs().size());
    const std::size_t bv = take(lx.bare_verbs().size());
    const std::size_t es = take(lx.embedded_subjects().size());
    const std::size_t ms = take(lx.matrix_subjects().size());

    Item item;
    item.item_id = static_cast<std::int64_t>(combination);
    item.matrix_subject = lx.matrix_subjects()[ms];
    item.embedded_subject = lx.embedded_subjects()[es];
    item.bare_verb = lx.bare_verbs()[bv];
    item.infinitival_verb = lx.infinitival_verbs()[iv];
    item.bridge_verb = lx.bridge_verbs()[br];
    item.embedded_verb = lx.embedded_verbs()[ev];
    return item;
}

Item CandidateSet::at(std::size_t k) const { return decode(valid_.at(k)); }

CandidateSet enumerate_candidates(const Lexicon& lexicon) { return CandidateSet(lexicon); }

std::vector<Item> sample_items(const Lexicon& lexicon, std::size_t n, std::uint64_t seed) {
    const CandidateSet candidates(lexicon);
    if (n > candidates.size())
        throw LexiconError("requested " + std::to_string(n) + " items but the lexicon only admits " +
                           std::to_string(candidates.size()) + " candidates");
    std::vector<std::uint64_t> order = candidates.combinations();
    SplitMix64 rng(seed);
    shuffle(order.begin(), order.end(), rng);
    std::vector<Item> out;
    out.reserve(n);
    for (std::size_t k = 0; k < n; ++k) out.push_back(candidates.decode(order[k]));
    return out;
}

std::array<Stimulus, 3> realize_stimuli(const Item& item) {
    const auto& subj = item.matrix_subject;
    std::array<Stimulus, 3> out;

    out[0].tokens = {"What", "did", subj, item.bare_verb, item.embedded_subject.accusative,
                     item.embedded_verb.base, "?"};
    out[0].positions[Role::embedded_subject] = 4;
    out[0].positions[Role::embedded_verb] = 5;

    out[1].tokens = {"What", "did", subj, item.infinitival_verb, item.embedded_subject.accusative, "to",
                     item.embedded_verb.base, "?"};
    out[1].positions[Role::embedded_subject] = 4;
    out[1].positions[Role::embedded_verb] = 6;

    out[2].tokens = {"What", "did", subj, item.bridge_verb, item.embedded_subject.nominative,
                     item.embedded_verb.past, "?"};
    out[2].positions[Role::embedded_subject] = 4;
    out[2].positions[Role::embedded_verb] = 5;

    for (std::size_t k = 0; k < 3; ++k) {
        out[k].item_id = item.item_id;
        out[k].condition = kConditions[k];
        out[k].positions[Role::wh] = 0;
    }
    return out;
}

std::vector<Stimulus> generate_stimuli(const Lexicon& lexicon, std::size_t n, std::uint64_t seed) {
    std::vector<Stimulus> out;
    out.reserve(3 * n);
    for (const Item& item : sample_items(lexicon, n, seed))
        for (auto& s : realize_stimuli(item)) out.push_back(std::move(s));
    return out;
}

nlohmann::json stimulus_to_json(const Stimulus& s) {
    nlohmann::json positions;
    for (Role r : kRoles) positions[std::string(to_string(r))] = s.positions[r];
    return {{"item_id", s.item_id},
            {"condition", std::string(to_string(s.condition))},
            {"text", s.text()},
            {"positions", positions}};
}

Stimulus stimulus_from_json(const nlohmann::json& j) {
    Stimulus s;
    try {
        s.item_id = j.at("item_id").get<std::int64_t>();
        s.condition = parse_condition(j.at("condition").get<std::string>());
        std::string text = j.at("text").get<std::string>();
        if (!text.empty() && text.back() == '?') {
            text.pop_back();
            std::istringstream in(text);
            for (std::string w; in >> w;) s.tokens.push_back(w);
            s.tokens.emplace_back("?");
        } else {
            std::istringstream in(text);
            for (std::string w; in >> w;) s.tokens.push_back(w);
        }
        for (Role r : kRoles) s.positions[r] = j.at("positions").at(std::string(to_string(r))).get<std::uint32_t>();
    } catch (const nlohmann::json::exception& e) {
        throw LexiconError(std::string("malformed stimulus record: ") + e.what());
    }
    for (Role r : kRoles)
        if (s.positions[r] >= s.tokens.size())
            throw LexiconError("stimulus " + to_string(s.key()) + ": position of " + std::string(to_string(r)) +
                               " is out of range");
    return s;
}

std::string write_stimuli_jsonl(const std::vector<Stimulus>& stimuli) {
    std::string out;
    for (const auto& s : stimuli) {
        out += stimulus_to_json(s).dump();
        out += '\n';
    }
    return out;
}

std::vector<Stimulus> read_stimuli_jsonl(std::string_view text) {
    std::vector<Stimulus> out;
    std::size_t line_no = 0;
    std::size_t start = 0;
    while (start < text.size()) {
        auto end = text.find('\n', start);
        if (end == std::string_view::npos) end = text.size();
        ++line_no;
        const auto line = text.substr(start, end - start);
        start = end + 1;
        if (line.find_first_not_of(" \t\r") == std::string_view::npos) continue;
        try {
            out.push_back(stimulus_from_json(nlohmann::json::parse(line)));
        } catch (const nlohmann::json::parse_error& e) {
            throw LexiconError("stimulus JSONL line " + std::to_string(line_no) + ": " + e.what());
        }
    }
    return out;
}

}  // namespace phaseprobe
