#pragma once

#include <array>
#include <cstdint>
#include <stdexcept>
#include <string>
#include <string_view>

namespace phaseprobe {

/// Base class for every error raised by the library. Each module derives its
/// own type so callers can tell a malformed CoNLL-U file from a corrupt store.
class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

enum class Condition : std::uint8_t { bare = 0, infinitival = 1, finite = 2 };

inline constexpr std::array<Condition, 3> kConditions{Condition::bare, Condition::infinitival,
                                                      Condition::finite};

std::string_view to_string(Condition c);
Condition parse_condition(std::string_view s);

/// The two probed word pairs.
enum class Pair : std::uint8_t { wh_esubj = 0, esubj_evb = 1 };

inline constexpr std::array<Pair, 2> kPairs{Pair::wh_esubj, Pair::esubj_evb};

std::string_view to_string(Pair p);
Pair parse_pair(std::string_view s);

/// Treatment contrasts against the bare reference condition.
enum class Contrast : std::uint8_t { fin = 0, inf = 1 };

inline constexpr std::array<Contrast, 2> kContrasts{Contrast::fin, Contrast::inf};

std::string_view to_string(Contrast c);
Contrast parse_contrast(std::string_view s);
Condition target_condition(Contrast c);

/// Tagged word roles within a stimulus.
enum class Role : std::uint8_t { wh = 0, embedded_subject = 1, embedded_verb = 2 };

inline constexpr std::array<Role, 3> kRoles{Role::wh, Role::embedded_subject, Role::embedded_verb};

std::string_view to_string(Role r);
Role parse_role(std::string_view s);

/// Roles joined by a probe pair, in (first, second) order.
std::array<Role, 2> pair_roles(Pair p);

/// Identifies one realized stimulus: "<item_id>/<condition>".
struct StimulusKey {
    std::int64_t item_id = 0;
    Condition condition = Condition::bare;

    friend bool operator==(const StimulusKey&, const StimulusKey&) = default;
    friend auto operator<=>(const StimulusKey&, const StimulusKey&) = default;
};

std::string to_string(const StimulusKey& key);
StimulusKey parse_stimulus_key(std::string_view s);

/// Word positions (0-based) of the three tagged roles.
struct Positions {
    std::array<std::uint32_t, 3> index{};

    std::uint32_t operator[](Role r) const { return index[static_cast<std::size_t>(r)]; }
    std::uint32_t& operator[](Role r) { return index[static_cast<std::size_t>(r)]; }

    friend bool operator==(const Positions&, const Positions&) = default;
};

}  // namespace phaseprobe
