#include <doctest.h>

#include <cmath>
#include <numeric>

#include "helpers.hpp"
#include "phaseprobe/io.hpp"
#include "phaseprobe/rng.hpp"

using namespace phaseprobe;

TEST_SUITE("rng-io") {

TEST_CASE("SplitMix64 reference outputs") {
    SplitMix64 rng(0);
    CHECK(rng() == 0xe220a8397b1dcdafULL);
    CHECK(rng() == 0x6e789e6aa1b965f4ULL);
}

TEST_CASE("bounded draws stay in range and cover it") {
    SplitMix64 rng(3);
    std::vector<int> counts(7, 0);
    for (int i = 0; i < 7000; ++i) ++counts[rng.below(7)];
    for (int c : counts) CHECK(c > 850);
    CHECK(rng.below(0) == 0);
    CHECK(rng.below(1) == 0);
    for (int i = 0; i < 1000; ++i) {
        const double u = rng.uniform();
        CHECK(u >= 0.0);
        CHECK(u < 1.0);
    }
}

TEST_CASE("normal draws have unit moments") {
    SplitMix64 rng(4);
    double s = 0, ss = 0;
    const int n = 200000;
    for (int i = 0; i < n; ++i) {
        const double x = rng.normal();
        s += x;
        ss += x * x;
    }
    CHECK(std::abs(s / n) < 0.01);
    CHECK(std::abs(ss / n - 1) < 0.02);
}

TEST_CASE("derived seeds and hashes are stable") {
    CHECK(derive_seed(1, 2) == derive_seed(1, 2));
    CHECK(derive_seed(1, 2) != derive_seed(1, 3));
    CHECK(derive_seed(1, 2) != derive_seed(2, 2));
    CHECK(stable_hash("") == 0xcbf29ce484222325ULL);
    CHECK(stable_hash("a") == 0xaf63dc4c8601ec8cULL);
}

TEST_CASE("shuffle is a seeded permutation") {
    std::vector<int> a(50), b;
    std::iota(a.begin(), a.end(), 0);
    b = a;
    SplitMix64 r1(5), r2(5);
    shuffle(a.begin(), a.end(), r1);
    shuffle(b.begin(), b.end(), r2);
    CHECK(a == b);
    auto sorted = a;
    std::sort(sorted.begin(), sorted.end());
    for (int i = 0; i < 50; ++i) CHECK(sorted[i] == i);
}

TEST_CASE("crc32 check value") {
    CHECK(crc32(std::string_view("123456789")) == 0xcbf43926u);
    CHECK(crc32(std::string_view("")) == 0u);
}

TEST_CASE("little-endian float encoding") {
    const std::vector<float> v = {1.0f, -2.5f, 0.0f};
    const auto bytes = floats_to_le_bytes(v);
    REQUIRE(bytes.size() == 12);
    CHECK(bytes[3] == std::byte{0x3f});
    CHECK(bytes[2] == std::byte{0x80});
    CHECK(floats_from_le_bytes(bytes) == v);
    CHECK_THROWS_AS(floats_from_le_bytes(std::span(bytes).first(5)), IoError);
}

TEST_CASE("atomic writes and missing files") {
    const auto dir = testing::scratch("io");
    write_file_atomic(dir / "a.txt", std::string_view("one"));
    write_file_atomic(dir / "a.txt", std::string_view("two"));
    CHECK(read_text_file(dir / "a.txt") == "two");
    CHECK_FALSE(std::filesystem::exists(dir / "a.txt.tmp"));
    CHECK_THROWS_AS(read_text_file(dir / "absent"), IoError);
}

TEST_CASE("doubles format to round-trippable text") {
    for (double x : {0.1, 1.0 / 3.0, -2.5e-300, 123456789.0}) CHECK(std::stod(format_double(x)) == x);
    CHECK(format_double(std::nan("")) == "nan");
}

}
