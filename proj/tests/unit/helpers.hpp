#pragma once

#include <filesystem>
#include <string>

#include "phaseprobe/io.hpp"
#include "phaseprobe/rng.hpp"
#include "phaseprobe/stimgen.hpp"

namespace testing {

inline std::filesystem::path fixture(const std::string& name) {
    return std::filesystem::path(PHASEPROBE_FIXTURE_DIR) / name;
}

/// Fresh scratch directory under the system temp dir.
inline std::filesystem::path scratch(const std::string& name) {
    static const auto stamp = std::to_string(phaseprobe::SplitMix64(
        static_cast<std::uint64_t>(std::filesystem::file_time_type::clock::now().time_since_epoch().count()))());
    const auto dir = std::filesystem::temp_directory_path() / ("phaseprobe-test-" + stamp) / name;
    std::filesystem::remove_all(dir);
    std::filesystem::create_directories(dir);
    return dir;
}

/// Single-item lexicon: she / him,he / see / expect / think / eat,ate.
inline phaseprobe::Lexicon example_lexicon() {
    return phaseprobe::Lexicon::unconstrained({"she"}, {{"him", "he"}}, {"see"}, {"expect"}, {"think"},
                                              {{"eat", "ate"}});
}

}  // namespace testing
