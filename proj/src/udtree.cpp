#include "phaseprobe/udtree.hpp"

#include <algorithm>
#include <charconv>
#include <deque>
#include <set>

namespace phaseprobe {
namespace {

std::vector<std::string_view> split(std::string_view s, char sep) {
    std::vector<std::string_view> out;
    std::size_t start = 0;
    while (true) {
        const auto pos = s.find(sep, start);
        if (pos == std::string_view::npos) {
            out.push_back(s.substr(start));
            return out;
        }
        out.push_back(s.substr(start, pos - start));
        start = pos + 1;
    }
}

std::string_view trim(std::string_view s) {
    const auto b = s.find_first_not_of(" \t\r");
    if (b == std::string_view::npos) return {};
    const auto e = s.find_last_not_of(" \t\r");
    return s.substr(b, e - b + 1);
}

std::optional<std::uint32_t> parse_u32(std::string_view s) {
    std::uint32_t v = 0;
    auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
    if (ec != std::errc() || ptr != s.data() + s.size()) return std::nullopt;
    return v;
}

}  // namespace

ParsedSentence::ParsedSentence(std::vector<ConlluToken> tokens, std::optional<StimulusKey> key,
                               std::string sent_id, std::string name)
    : tokens_(std::move(tokens)), key_(key), sent_id_(std::move(sent_id)) {
    if (name.empty()) name = key_ ? to_string(*key_) : (sent_id_.empty() ? std::string("<unnamed>") : sent_id_);
    const auto where = "sentence " + name + ": ";
    const auto n = static_cast<std::uint32_t>(tokens_.size());
    if (n == 0) throw ConlluError(where + "no tokens");

    for (std::uint32_t k = 0; k < n; ++k) {
        const auto& t = tokens_[k];
        if (t.index != k + 1)
            throw ConlluError(where + "token ids must run 1.." + std::to_string(n) + " in order (found " +
                              std::to_string(t.index) + " at position " + std::to_string(k + 1) + ")");
        if (t.head > n)
            throw ConlluError(where + "head " + std::to_string(t.head) + " of token " + std::to_string(t.index) +
                              " is out of range [0, " + std::to_string(n) + "]");
        if (t.head == t.index) throw ConlluError(where + "head cycle: token " + std::to_string(t.index) + " heads itself");
    }

    // Walking up from any token must reach the root within n steps.
    depth_.assign(n, 0);
    for (std::uint32_t k = 0; k < n; ++k) {
        std::uint32_t cur = k + 1;
        std::uint32_t steps = 0;
        while (tokens_[cur - 1].head != 0) {
            cur = tokens_[cur - 1].head;
            if (++steps > n) {
                throw ConlluError(where + "head cycle through token " + std::to_string(cur));
            }
        }
        depth_[k] = steps;
    }

    const auto roots = std::count_if(tokens_.begin(), tokens_.end(), [](const ConlluToken& t) { return t.head == 0; });
    if (roots != 1) throw ConlluError(where + "expected exactly one root, found " + std::to_string(roots));
}

const ConlluToken& ParsedSentence::token(std::uint32_t index) const {
    if (index == 0 || index > tokens_.size())
        throw ConlluError("token index " + std::to_string(index) + " out of range [1, " +
                          std::to_string(tokens_.size()) + "]");
    return tokens_[index - 1];
}

std::vector<std::array<std::uint32_t, 2>> ParsedSentence::edges() const {
    std::vector<std::array<std::uint32_t, 2>> out;
    for (const auto& t : tokens_)
        if (t.head != 0) out.push_back({t.index, t.head});
    return out;
}

std::vector<ParsedSentence> parse_conllu(std::string_view text) {
    std::vector<ParsedSentence> out;
    std::vector<ConlluToken> tokens;
    std::optional<StimulusKey> key;
    std::string sent_id;
    std::size_t first_line = 0;

    auto flush = [&]() {
        if (tokens.empty()) {
            key.reset();
            sent_id.clear();
            first_line = 0;
            return;
        }
        std::string name = key ? to_string(*key) : (!sent_id.empty() ? sent_id : "#" + std::to_string(out.size() + 1));
        name += " (line " + std::to_string(first_line) + ")";
        out.emplace_back(std::move(tokens), key, std::move(sent_id), std::move(name));
        tokens.clear();
        key.reset();
        sent_id.clear();
        first_line = 0;
    };

    std::size_t line_no = 0;
    for (auto raw : split(text, '\n')) {
        ++line_no;
        if (!raw.empty() && raw.back() == '\r') raw.remove_suffix(1);
        if (trim(raw).empty()) {
            flush();
            continue;
        }
        if (first_line == 0) first_line = line_no;
        if (raw[0] == '#') {
            const auto body = trim(raw.substr(1));
            const auto eq = body.find('=');
            if (eq == std::string_view::npos) continue;
            const auto name = trim(body.substr(0, eq));
            const auto value = trim(body.substr(eq + 1));
            if (name == "stimulus_key") {
                try {
                    key = parse_stimulus_key(value);
                } catch (const Error& e) {
                    throw ConlluError("line " + std::to_string(line_no) + ": " + e.what());
                }
            } else if (name == "sent_id") {
                sent_id = std::string(value);
            }
            continue;
        }
        const auto cols = split(raw, '\t');
        const auto where = "line " + std::to_string(line_no) + ": ";
        if (cols.size() != 10)
            throw ConlluError(where + "expected 10 tab-separated columns, got " + std::to_string(cols.size()));
        if (cols[0].find('-') != std::string_view::npos)
            throw ConlluError(where + "multiword token range '" + std::string(cols[0]) + "' is not supported");
        if (cols[0].find('.') != std::string_view::npos)
            throw ConlluError(where + "empty node '" + std::string(cols[0]) + "' is not supported");
        const auto id = parse_u32(cols[0]);
        if (!id) throw ConlluError(where + "malformed token id '" + std::string(cols[0]) + "'");
        const auto head = parse_u32(cols[6]);
        if (!head) throw ConlluError(where + "malformed head '" + std::string(cols[6]) + "'");
        tokens.push_back({*id, std::string(cols[1]), *head, std::string(cols[7])});
    }
    flush();
    return out;
}

std::string write_conllu(std::span<const ParsedSentence> sentences) {
    std::string out;
    for (const auto& s : sentences) {
        if (!s.sent_id().empty()) out += "# sent_id = " + s.sent_id() + "\n";
        if (s.stimulus_key()) out += "# stimulus_key = " + to_string(*s.stimulus_key()) + "\n";
        for (const auto& t : s.tokens()) {
            out += std::to_string(t.index) + '\t' + t.form + "\t_\t_\t_\t_\t" + std::to_string(t.head) + '\t' +
                   (t.deprel.empty() ? "_" : t.deprel) + "\t_\t_\n";
        }
        out += '\n';
    }
    return out;
}

std::uint32_t tree_distance(const ParsedSentence& sentence, std::uint32_t i, std::uint32_t j) {
    const auto n = sentence.size();
    if (i == 0 || i > n || j == 0 || j > n)
        throw ConlluError("tree_distance: index (" + std::to_string(i) + ", " + std::to_string(j) +
                          ") out of range [1, " + std::to_string(n) + "]");
    // Depth of each endpoint by walking to the root; lift the deeper one.
    auto depth = [&](std::uint32_t k) {
        std::uint32_t d = 0;
        while (sentence.token(k).head != 0) {
            k = sentence.token(k).head;
            ++d;
        }
        return d;
    };
    std::uint32_t di = depth(i);
    std::uint32_t dj = depth(j);
    std::uint32_t dist = 0;
    while (di > dj) {
        i = sentence.token(i).head;
        --di;
        ++dist;
    }
    while (dj > di) {
        j = sentence.token(j).head;
        --dj;
        ++dist;
    }
    while (i != j) {
        i = sentence.token(i).head;
        j = sentence.token(j).head;
        dist += 2;
    }
    return dist;
}

Eigen::MatrixXd gold_distance_matrix(const ParsedSentence& sentence) {
    const auto n = sentence.size();
    std::vector<std::vector<std::uint32_t>> adj(n);
    for (const auto& [child, head] : sentence.edges()) {
        adj[child - 1].push_back(head - 1);
        adj[head - 1].push_back(child - 1);
    }
    Eigen::MatrixXd out = Eigen::MatrixXd::Zero(static_cast<Eigen::Index>(n), static_cast<Eigen::Index>(n));
    std::vector<int> dist(n);
    std::deque<std::size_t> queue;
    for (std::size_t s = 0; s < n; ++s) {
        std::fill(dist.begin(), dist.end(), -1);
        dist[s] = 0;
        queue.assign(1, s);
        while (!queue.empty()) {
            const auto u = queue.front();
            queue.pop_front();
            for (auto v : adj[u]) {
                if (dist[v] < 0) {
                    dist[v] = dist[u] + 1;
                    queue.push_back(v);
                }
            }
        }
        for (std::size_t t = 0; t < n; ++t)
            out(static_cast<Eigen::Index>(s), static_cast<Eigen::Index>(t)) = dist[t];
    }
    return out;
}

std::optional<std::string> check_alignment(const Stimulus& stimulus, const ParsedSentence& parse) {
    const auto key = to_string(stimulus.key());
    for (std::size_t w = 0; w < stimulus.tokens.size(); ++w) {
        const auto conllu_index = static_cast<std::uint32_t>(w + 1);
        if (conllu_index > parse.size())
            return key + ": parse has " + std::to_string(parse.size()) + " tokens, stimulus word " +
                   std::to_string(w) + " ('" + stimulus.tokens[w] + "') has no counterpart";
        const auto& form = parse.token(conllu_index).form;
        if (form != stimulus.tokens[w])
            return key + ": word " + std::to_string(w) + " is '" + stimulus.tokens[w] + "' but CoNLL-U token " +
                   std::to_string(conllu_index) + " is '" + form + "'";
    }
    if (parse.size() != stimulus.tokens.size())
        return key + ": parse has " + std::to_string(parse.size()) + " tokens, stimulus has " +
               std::to_string(stimulus.tokens.size());
    return std::nullopt;
}

std::array<InvarianceVerdict, 2> verify_invariance(std::span<const ParsedStimulus> triple) {
    std::array<const ParsedStimulus*, 3> by_condition{};
    std::optional<std::int64_t> item;
    for (const auto& ps : triple) {
        if (ps.parse == nullptr || ps.stimulus == nullptr) throw ConlluError("verify_invariance: null input");
        if (item && *item != ps.stimulus->item_id)
            throw ConlluError("verify_invariance: inputs mix items " + std::to_string(*item) + " and " +
                              std::to_string(ps.stimulus->item_id));
        item = ps.stimulus->item_id;
        if (ps.parse->stimulus_key() && *ps.parse->stimulus_key() != ps.stimulus->key())
            throw ConlluError("verify_invariance: parse " + to_string(*ps.parse->stimulus_key()) +
                              " paired with stimulus " + to_string(ps.stimulus->key()));
        by_condition[static_cast<std::size_t>(ps.stimulus->condition)] = &ps;
    }
    for (Condition c : kConditions)
        if (by_condition[static_cast<std::size_t>(c)] == nullptr)
            throw ConlluError("verify_invariance: item " + (item ? std::to_string(*item) : std::string("?")) +
                              " is missing the " + std::string(to_string(c)) + " condition");

    std::array<InvarianceVerdict, 2> out;
    for (std::size_t p = 0; p < 2; ++p) {
        auto& v = out[p];
        v.item_id = *item;
        v.pair = kPairs[p];
        const auto roles = pair_roles(v.pair);
        for (Condition c : kConditions) {
            const auto& ps = *by_condition[static_cast<std::size_t>(c)];
            const auto a = ps.stimulus->positions[roles[0]] + 1;
            const auto b = ps.stimulus->positions[roles[1]] + 1;
            v.distances[c] = tree_distance(*ps.parse, a, b);
        }
        const auto first = v.distances.begin()->second;
        v.pass = std::all_of(v.distances.begin(), v.distances.end(), [first](const auto& kv) { return kv.second == first; });
    }
    return out;
}

nlohmann::json verdict_to_json(const InvarianceVerdict& v) {
    nlohmann::json distances = nlohmann::json::object();
    for (const auto& [c, d] : v.distances) distances[std::string(to_string(c))] = d;
    nlohmann::json j{{"item_id", v.item_id},
                     {"pair", std::string(to_string(v.pair))},
                     {"distances", distances},
                     {"pass", v.pass}};
    if (!v.reason.empty()) j["reason"] = v.reason;
    return j;
}

InvarianceVerdict verdict_from_json(const nlohmann::json& j) {
    InvarianceVerdict v;
    try {
        v.item_id = j.at("item_id").get<std::int64_t>();
        v.pair = parse_pair(j.at("pair").get<std::string>());
        for (const auto& [c, d] : j.at("distances").items()) v.distances[parse_condition(c)] = d.get<std::uint32_t>();
        v.pass = j.at("pass").get<bool>();
        v.reason = j.value("reason", std::string());
    } catch (const nlohmann::json::exception& e) {
        throw ConlluError(std::string("malformed verdict record: ") + e.what());
    }
    return v;
}

std::string write_verdicts_jsonl(std::span<const InvarianceVerdict> verdicts) {
    std::string out;
    for (const auto& v : verdicts) out += verdict_to_json(v).dump() + "\n";
    return out;
}

std::vector<InvarianceVerdict> read_verdicts_jsonl(std::string_view text) {
    std::vector<InvarianceVerdict> out;
    for (auto line : split(text, '\n')) {
        if (trim(line).empty()) continue;
        try {
            out.push_back(verdict_from_json(nlohmann::json::parse(line)));
        } catch (const nlohmann::json::parse_error& e) {
            throw ConlluError(std::string("verdict JSONL: ") + e.what());
        }
    }
    return out;
}

VerdictTable::VerdictTable(std::span<const InvarianceVerdict> verdicts) {
    for (const auto& v : verdicts) pass_[{v.item_id, v.pair}] = v.pass;
}

bool VerdictTable::passes(std::int64_t item_id, Pair pair) const {
    const auto it = pass_.find({item_id, pair});
    return it != pass_.end() && it->second;
}

VerificationReport verify_all(std::span<const Stimulus> stimuli, std::span<const ParsedSentence> parses) {
    std::map<StimulusKey, const ParsedSentence*> parse_by_key;
    for (const auto& p : parses)
        if (p.stimulus_key()) parse_by_key[*p.stimulus_key()] = &p;

    std::map<std::int64_t, std::array<const Stimulus*, 3>> items;
    std::vector<std::int64_t> order;
    for (const auto& s : stimuli) {
        auto [it, inserted] = items.try_emplace(s.item_id);
        if (inserted) order.push_back(s.item_id);
        it->second[static_cast<std::size_t>(s.condition)] = &s;
    }

    VerificationReport report;
    auto fail_item = [&](std::int64_t id, const std::string& reason) {
        report.log.push_back("item " + std::to_string(id) + " excluded: " + reason);
        for (Pair p : kPairs) {
            InvarianceVerdict v;
            v.item_id = id;
            v.pair = p;
            v.pass = false;
            v.reason = reason;
            report.verdicts.push_back(std::move(v));
        }
    };

    for (const auto id : order) {
        const auto& stims = items.at(id);
        std::vector<ParsedStimulus> triple;
        std::string problem;
        for (Condition c : kConditions) {
            const Stimulus* s = stims[static_cast<std::size_t>(c)];
            if (s == nullptr) {
                problem = "stimulus for condition " + std::string(to_string(c)) + " missing";
                break;
            }
            const auto it = parse_by_key.find(s->key());
            if (it == parse_by_key.end()) {
                problem = "no parse for " + to_string(s->key());
                break;
            }
            if (auto reason = check_alignment(*s, *it->second)) {
                problem = "misaligned parse: " + *reason;
                break;
            }
            triple.push_back({it->second, s});
        }
        if (!problem.empty()) {
            fail_item(id, problem);
            continue;
        }
        for (auto& v : verify_invariance(triple)) {
            if (!v.pass) {
                std::string d;
                for (const auto& [c, dist] : v.distances)
                    d += (d.empty() ? "" : ", ") + std::string(to_string(c)) + "=" + std::to_string(dist);
                report.log.push_back("item " + std::to_string(id) + " fails " + std::string(to_string(v.pair)) +
                                     " invariance (" + d + ")");
            }
            report.verdicts.push_back(std::move(v));
        }
    }
    return report;
}

}  // namespace phaseprobe
