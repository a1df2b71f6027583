#include <doctest.h>

#include <fstream>

#include "helpers.hpp"
#include "phaseprobe/activation_store.hpp"
#include "phaseprobe/io.hpp"

using namespace phaseprobe;

namespace {

ActivationStore small_store(std::uint64_t seed = 1) {
    SplitMix64 rng(seed);
    ActivationStore store("toy", 3, 2);
    for (int s = 0; s < 4; ++s) {
        const std::uint32_t words = 2 + static_cast<std::uint32_t>(s % 3);
        std::vector<RowMatrixXf> layers;
        for (int l = 0; l < 2; ++l) {
            RowMatrixXf m(words, 3);
            for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = static_cast<float>(rng.normal());
            layers.push_back(m);
        }
        AlignmentEntry a;
        for (std::uint32_t w = 0; w < words; ++w) a.push_back({w, 1});
        store.add(std::to_string(s) + "/bare", a, words, layers);
    }
    store.metadata()["producer"] = "unit test";
    return store;
}

void flip_byte(const std::filesystem::path& p, std::size_t offset) {
    std::fstream f(p, std::ios::in | std::ios::out | std::ios::binary);
    f.seekg(static_cast<std::streamoff>(offset));
    char c = 0;
    f.read(&c, 1);
    c ^= 0x40;
    f.seekp(static_cast<std::streamoff>(offset));
    f.write(&c, 1);
}

std::string error_of(const std::filesystem::path& dir) {
    try {
        read_store(dir);
    } catch (const StoreError& e) {
        return e.what();
    }
    return {};
}

}  // namespace

TEST_SUITE("activation-store") {

TEST_CASE("write then read is bit-identical") {
    const auto dir = testing::scratch("store-roundtrip");
    const auto store = small_store();
    write_store(store, dir);
    const auto back = read_store(dir);
    CHECK(back == store);
    CHECK(back.metadata()["producer"] == "unit test");
    const auto manifest = read_store_manifest(dir);
    CHECK(manifest.at("dtype") == "float32");
    CHECK(manifest.at("endianness") == "little");
    CHECK(manifest.at("stimulus_count") == 4);
    CHECK(manifest.at("pipeline_version") == std::string(kStorePipelineVersion));
    CHECK_FALSE(std::filesystem::exists(dir / ".lock"));
}

TEST_CASE("little-endian float encoding") {
    const std::vector<float> v{1.0f, -2.5f};
    const auto bytes = floats_to_le_bytes(v);
    REQUIRE(bytes.size() == 8);
    CHECK(bytes[3] == std::byte{0x3f});
    CHECK(bytes[2] == std::byte{0x80});
    CHECK(floats_from_le_bytes(bytes) == v);
}

TEST_CASE("corruption is detected and names the file") {
    const auto dir = testing::scratch("store-corrupt");
    write_store(small_store(), dir);
    flip_byte(dir / "layer_1.f32", 5);
    const auto msg = error_of(dir);
    CHECK(msg.find("checksum mismatch") != std::string::npos);
    CHECK(msg.find("layer_1.f32") != std::string::npos);
}

TEST_CASE("dimension mismatch is reported") {
    const auto dir = testing::scratch("store-dim");
    write_store(small_store(), dir);
    auto manifest = nlohmann::json::parse(read_text_file(dir / "manifest.json"));
    manifest["d"] = 4;
    write_file_atomic(dir / "manifest.json", manifest.dump());
    const auto msg = error_of(dir);
    CHECK(msg.find("dimension mismatch") != std::string::npos);
    CHECK(msg.find("layer_0.f32") != std::string::npos);
}

TEST_CASE("a concurrent writer is refused") {
    const auto dir = testing::scratch("store-lock");
    std::ofstream(dir / ".lock") << "held";
    CHECK_THROWS_AS(write_store(small_store(), dir), StoreError);
    std::filesystem::remove(dir / ".lock");
    CHECK_NOTHROW(write_store(small_store(), dir));
}

TEST_CASE("store construction checks") {
    ActivationStore store("toy", 2, 1);
    std::vector<RowMatrixXf> ok{RowMatrixXf::Ones(2, 2)};
    store.add("a", {{0, 1}, {1, 2}}, 3, ok);
    CHECK_THROWS_AS(store.add("a", {{0, 1}, {1, 2}}, 3, ok), StoreError);
    std::vector<RowMatrixXf> wrong{RowMatrixXf::Ones(2, 3)};
    CHECK_THROWS_AS(store.add("b", {{0, 1}, {1, 1}}, 2, wrong), StoreError);
    std::vector<RowMatrixXf> two{RowMatrixXf::Ones(2, 2), RowMatrixXf::Ones(2, 2)};
    CHECK_THROWS_AS(store.add("c", {{0, 1}, {1, 1}}, 2, two), StoreError);
    RowMatrixXf bad = RowMatrixXf::Ones(2, 2);
    bad(0, 0) = std::nanf("");
    std::vector<RowMatrixXf> nan{bad};
    CHECK_THROWS_AS(store.add("d", {{0, 1}, {1, 1}}, 2, nan), StoreError);
    CHECK_THROWS_AS(store.index_of("zzz"), StoreError);
    CHECK(store.word(0, 0, 1) == Eigen::VectorXd::Ones(2));
}

TEST_CASE("alignment validation") {
    CHECK_NOTHROW(validate_alignment({{1, 2}, {3, 1}}, 5));
    CHECK_THROWS_AS(validate_alignment({{0, 0}}, 3), StoreError);
    CHECK_THROWS_AS(validate_alignment({{0, 2}, {1, 1}}, 3), StoreError);
    CHECK_THROWS_AS(validate_alignment({{0, 1}, {2, 2}}, 3), StoreError);
}

TEST_CASE("pooling averages each word's subwords") {
    SplitMix64 rng(3);
    Eigen::MatrixXd tokens(7, 4);
    for (Eigen::Index i = 0; i < tokens.size(); ++i) tokens.data()[i] = rng.normal();
    const AlignmentEntry a{{0, 1}, {1, 3}, {5, 2}};
    const auto pooled = pool_words(tokens, a);
    REQUIRE(pooled.rows() == 3);
    for (std::size_t w = 0; w < a.size(); ++w)
        for (Eigen::Index c = 0; c < 4; ++c) {
            double s = 0;
            for (std::uint32_t t = a[w].first_subword; t < a[w].first_subword + a[w].subword_count; ++t) s += tokens(t, c);
            CHECK(pooled(static_cast<Eigen::Index>(w), c) == doctest::Approx(s / a[w].subword_count).epsilon(1e-14));
        }
    // Single-subword words come through unchanged.
    CHECK(pooled.row(0) == tokens.row(0));
}

TEST_CASE("standardizer statistics") {
    SplitMix64 rng(9);
    Eigen::MatrixXd x(50, 3);
    for (Eigen::Index i = 0; i < 50; ++i) {
        x(i, 0) = 5 + 2 * rng.normal();
        x(i, 1) = 0.25;
        x(i, 2) = -3 + rng.normal();
    }
    const auto stats = fit_standardizer(x, 4);
    CHECK(stats.layer == 4);
    REQUIRE(stats.clamped == std::vector<std::uint32_t>{1});
    CHECK(stats.std(1) == CorpusStats::kStdFloor);
    const auto z = apply_standardizer_rows(stats, x);
    for (Eigen::Index c : {0, 2}) {
        CHECK(z.col(c).mean() == doctest::Approx(0).epsilon(1e-12));
        const double var = (z.col(c).array() - z.col(c).mean()).square().mean();
        CHECK(var == doctest::Approx(1).epsilon(1e-12));
    }
    CHECK(z.col(1).isZero(0));
    CHECK_THROWS_AS(fit_standardizer(x.topRows(1)), StoreError);
    CHECK_THROWS_AS(apply_standardizer(stats, Eigen::VectorXd::Zero(2)), StoreError);
}

}
