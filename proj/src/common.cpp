#include "phaseprobe/common.hpp"

#include <charconv>

namespace phaseprobe {

std::string_view to_string(Condition c) {
    switch (c) {
    case Condition::bare: return "bare";
    case Condition::infinitival: return "infinitival";
    case Condition::finite: return "finite";
    }
    return "?";
}

Condition parse_condition(std::string_view s) {
    for (Condition c : kConditions)
        if (to_string(c) == s) return c;
    throw Error("unknown condition '" + std::string(s) + "'");
}

std::string_view to_string(Pair p) {
    return p == Pair::wh_esubj ? "wh_esubj" : "esubj_evb";
}

Pair parse_pair(std::string_view s) {
    for (Pair p : kPairs)
        if (to_string(p) == s) return p;
    throw Error("unknown pair '" + std::string(s) + "'");
}

std::string_view to_string(Contrast c) {
    return c == Contrast::fin ? "fin" : "inf";
}

Contrast parse_contrast(std::string_view s) {
    for (Contrast c : kContrasts)
        if (to_string(c) == s) return c;
    throw Error("unknown contrast '" + std::string(s) + "'");
}

Condition target_condition(Contrast c) {
    return c == Contrast::fin ? Condition::finite : Condition::infinitival;
}

std::string_view to_string(Role r) {
    switch (r) {
    case Role::wh: return "wh";
    case Role::embedded_subject: return "embedded_subject";
    case Role::embedded_verb: return "embedded_verb";
    }
    return "?";
}

Role parse_role(std::string_view s) {
    for (Role r : kRoles)
        if (to_string(r) == s) return r;
    throw Error("unknown role '" + std::string(s) + "'");
}

std::array<Role, 2> pair_roles(Pair p) {
    if (p == Pair::wh_esubj) return {Role::wh, Role::embedded_subject};
    return {Role::embedded_subject, Role::embedded_verb};
}

std::string to_string(const StimulusKey& key) {
    return std::to_string(key.item_id) + "/" + std::string(to_string(key.condition));
}

StimulusKey parse_stimulus_key(std::string_view s) {
    const auto slash = s.find('/');
    if (slash == std::string_view::npos)
        throw Error("malformed stimulus key '" + std::string(s) + "' (expected <item_id>/<condition>)");
    StimulusKey key;
    const auto id = s.substr(0, slash);
    auto [ptr, ec] = std::from_chars(id.data(), id.data() + id.size(), key.item_id);
    if (ec != std::errc() || ptr != id.data() + id.size())
        throw Error("malformed item id in stimulus key '" + std::string(s) + "'");
    key.condition = parse_condition(s.substr(slash + 1));
    return key;
}

}  // namespace phaseprobe
