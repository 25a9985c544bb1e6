#include <doctest.h>

#include <bit>
#include <cstdint>
#include <filesystem>
#include <string_view>
#include <vector>

#include "dcco/encoder.hpp"
#include "dcco/rng.hpp"
#include "dcco/serialize.hpp"
#include "dcco/stats.hpp"

using namespace dcco;

namespace {

bool bitwise_equal(const Tensor& a, const Tensor& b) {
    if (a.shape() != b.shape()) return false;
    auto va = a.values();
    auto vb = b.values();
    for (std::size_t i = 0; i < va.size(); ++i) {
        if (std::bit_cast<std::uint64_t>(va[i]) != std::bit_cast<std::uint64_t>(vb[i])) {
            return false;
        }
    }
    return true;
}

std::vector<std::uint8_t> to_bytes(std::string_view s) {
    return {s.begin(), s.end()};
}

Tensor random_batch(Rng& rng, Eigen::Index n, Eigen::Index d) {
    Matrix m(n, d);
    for (Eigen::Index i = 0; i < n; ++i)
        for (Eigen::Index j = 0; j < d; ++j) m(i, j) = rng.normal();
    return Tensor::from_matrix(std::move(m));
}

}  // namespace

TEST_CASE("byte writer produces little-endian layouts") {
    ByteWriter w;
    w.u8(0xAB);
    w.u32(0x01020304u);
    w.u64(0x1122334455667788ull);
    w.f64(1.0);

    const std::vector<std::uint8_t> expected = {
        0xAB,
        0x04, 0x03, 0x02, 0x01,
        0x88, 0x77, 0x66, 0x55, 0x44, 0x33, 0x22, 0x11,
        // 1.0 is 0x3FF0000000000000
        0x00, 0x00, 0x00, 0x00, 0x00, 0x00, 0xF0, 0x3F,
    };
    CHECK(w.buffer() == expected);
}

TEST_CASE("byte reader round-trips and bounds-checks") {
    ByteWriter w;
    w.u8(7);
    w.u32(123456789u);
    w.u64(0xDEADBEEFCAFEF00Dull);
    w.f64(-2.5);
    w.str("layer.weight");
    const auto buf = w.take();

    ByteReader r(buf);
    CHECK(r.u8() == 7);
    CHECK(r.u32() == 123456789u);
    CHECK(r.u64() == 0xDEADBEEFCAFEF00Dull);
    CHECK(r.f64() == -2.5);
    CHECK(r.str() == "layer.weight");
    CHECK(r.done());
    CHECK_NOTHROW(r.expect_done("buffer"));

    SUBCASE("reading past the end names the offset") {
        ByteReader short_r(std::span(buf.data(), 3));
        short_r.u8();
        try {
            short_r.u32();
            FAIL("expected ParseError");
        } catch (const ParseError& e) {
            const std::string msg = e.what();
            CHECK(msg.find("offset 1") != std::string::npos);
            CHECK(msg.find("need 4") != std::string::npos);
        }
    }
    SUBCASE("trailing bytes are rejected when completeness is asserted") {
        ByteReader partial(buf);
        partial.u8();
        CHECK_THROWS_AS(partial.expect_done("buffer"), ParseError);
    }
    SUBCASE("string length prefix is bounds-checked") {
        ByteWriter bad;
        bad.u32(1000);  // claims 1000 bytes, provides none
        ByteReader br(bad.buffer());
        CHECK_THROWS_AS(br.str(), ParseError);
    }
}

TEST_CASE("non-finite doubles survive the wire bitwise") {
    ByteWriter w;
    const double nan = std::numeric_limits<double>::quiet_NaN();
    const double inf = std::numeric_limits<double>::infinity();
    w.f64(nan);
    w.f64(inf);
    w.f64(-0.0);
    ByteReader r(w.buffer());
    CHECK(std::bit_cast<std::uint64_t>(r.f64()) == std::bit_cast<std::uint64_t>(nan));
    CHECK(std::bit_cast<std::uint64_t>(r.f64()) == std::bit_cast<std::uint64_t>(inf));
    CHECK(std::bit_cast<std::uint64_t>(r.f64()) == std::bit_cast<std::uint64_t>(-0.0));
}

TEST_CASE("statistics payload matches the documented byte layout") {
    // One sample with f = [2], g = [3]: means 2, 4, 3, 9 and cross 6.
    const auto stats =
        local_stats_values(Tensor({1, 1}, {2.0}), Tensor({1, 1}, {3.0}));
    const auto encoded = encode_stats(stats);

    const std::vector<std::uint8_t> expected = {
        0x01,                    // version
        0x01, 0x00, 0x00, 0x00,  // d = 1
        0x01, 0x00, 0x00, 0x00, 0x00, 0x00, 0x00, 0x00,  // count = 1
        0x00, 0x00, 0x00, 0x00, 0x00, 0x00, 0x00, 0x40,  // 2.0
        0x00, 0x00, 0x00, 0x00, 0x00, 0x00, 0x10, 0x40,  // 4.0
        0x00, 0x00, 0x00, 0x00, 0x00, 0x00, 0x08, 0x40,  // 3.0
        0x00, 0x00, 0x00, 0x00, 0x00, 0x00, 0x22, 0x40,  // 9.0
        0x00, 0x00, 0x00, 0x00, 0x00, 0x00, 0x18, 0x40,  // 6.0
    };
    CHECK(encoded == expected);
}

TEST_CASE("statistics payload round-trips bitwise") {
    Rng rng(2024);
    for (Eigen::Index d : {1, 3, 8}) {
        const auto f = random_batch(rng, 5, d);
        const auto g = random_batch(rng, 5, d);
        const auto stats = local_stats_values(f, g);
        const auto decoded = decode_stats(encode_stats(stats));
        CAPTURE(d);
        CHECK(decoded.count == stats.count);
        CHECK(bitwise_equal(decoded.mean_f, stats.mean_f));
        CHECK(bitwise_equal(decoded.mean_f2, stats.mean_f2));
        CHECK(bitwise_equal(decoded.mean_g, stats.mean_g));
        CHECK(bitwise_equal(decoded.mean_g2, stats.mean_g2));
        CHECK(bitwise_equal(decoded.cross, stats.cross));
    }
}

TEST_CASE("statistics decoding rejects malformed payloads") {
    const auto stats =
        local_stats_values(Tensor({2, 2}, {1, 2, 3, 4}), Tensor({2, 2}, {5, 6, 7, 8}));
    auto good = encode_stats(stats);

    SUBCASE("unknown version") {
        auto bad = good;
        bad[0] = 9;
        CHECK_THROWS_AS(decode_stats(bad), ParseError);
    }
    SUBCASE("zero dimension") {
        ByteWriter w;
        w.u8(1);
        w.u32(0);
        w.u64(1);
        CHECK_THROWS_AS(decode_stats(w.buffer()), ParseError);
    }
    SUBCASE("truncated array") {
        auto bad = good;
        bad.resize(bad.size() - 3);
        CHECK_THROWS_AS(decode_stats(bad), ParseError);
    }
    SUBCASE("trailing garbage") {
        auto bad = good;
        bad.push_back(0);
        CHECK_THROWS_AS(decode_stats(bad), ParseError);
    }
    SUBCASE("zero count fails validation") {
        ByteWriter w;
        w.u8(1);
        w.u32(1);
        w.u64(0);  // count 0 is never produced by a real client
        for (int i = 0; i < 5; ++i) w.f64(1.0);
        CHECK_THROWS_AS(decode_stats(w.buffer()), Error);
    }
}

TEST_CASE("parameter bundles round-trip full models bitwise") {
    EncoderConfig cfg;
    cfg.input_dim = 6;
    cfg.hidden_dims = {8};
    cfg.embed_dim = 8;
    cfg.projection_dims = {8, 4};
    cfg.groups = 2;
    const auto params = init_params(cfg, 31);

    const auto encoded = encode_named_tensors(params);
    const auto decoded = decode_named_tensors(encoded);

    REQUIRE(decoded.size() == params.size());
    for (const auto& [name, tensor] : params) {
        CAPTURE(name);
        REQUIRE(decoded.count(name) == 1);
        CHECK(decoded.at(name).shape() == tensor.shape());
        CHECK(bitwise_equal(decoded.at(name), tensor));
    }

    SUBCASE("encoding is insertion-order independent") {
        NamedTensors forward, backward;
        for (const auto& [name, tensor] : params) forward.emplace(name, tensor);
        for (auto it = params.rbegin(); it != params.rend(); ++it) {
            backward.emplace(it->first, it->second);
        }
        CHECK(encode_named_tensors(forward) == encode_named_tensors(backward));
    }
}

TEST_CASE("parameter bundles carry every tensor rank") {
    NamedTensors tensors;
    tensors.emplace("scalar", Tensor::scalar(3.5));
    tensors.emplace("row", Tensor({4}, {1, 2, 3, 4}));
    tensors.emplace("block", Tensor({2, 3}, {1, 2, 3, 4, 5, 6}));
    const auto decoded = decode_named_tensors(encode_named_tensors(tensors));
    CHECK(decoded.at("scalar").rank() == 0);
    CHECK(decoded.at("scalar").scalar_value() == 3.5);
    CHECK(decoded.at("row").rank() == 1);
    CHECK(decoded.at("row").shape() == std::vector<Eigen::Index>{4});
    CHECK(decoded.at("block").rank() == 2);
    CHECK(bitwise_equal(decoded.at("block"), tensors.at("block")));
}

TEST_CASE("parameter bundle decoding rejects malformed input") {
    SUBCASE("wrong magic") {
        CHECK_THROWS_AS(decode_named_tensors(to_bytes("NOPE....")), ParseError);
    }
    SUBCASE("unsupported version") {
        ByteWriter w;
        w.bytes(to_bytes("DPAR"));
        w.u8(99);
        w.u32(0);
        CHECK_THROWS_AS(decode_named_tensors(w.buffer()), ParseError);
    }
    SUBCASE("duplicate record name") {
        ByteWriter w;
        w.bytes(to_bytes("DPAR"));
        w.u8(1);
        w.u32(2);
        for (int i = 0; i < 2; ++i) {
            w.str("twin");
            w.u8(0);  // rank 0
            w.f64(1.0);
        }
        CHECK_THROWS_AS(decode_named_tensors(w.buffer()), ParseError);
    }
    SUBCASE("rank above two") {
        ByteWriter w;
        w.bytes(to_bytes("DPAR"));
        w.u8(1);
        w.u32(1);
        w.str("cube");
        w.u8(3);
        CHECK_THROWS_AS(decode_named_tensors(w.buffer()), ParseError);
    }
    SUBCASE("zero-sized dimension") {
        ByteWriter w;
        w.bytes(to_bytes("DPAR"));
        w.u8(1);
        w.u32(1);
        w.str("empty");
        w.u8(1);
        w.u64(0);
        CHECK_THROWS_AS(decode_named_tensors(w.buffer()), ParseError);
    }
    SUBCASE("empty name") {
        ByteWriter w;
        w.bytes(to_bytes("DPAR"));
        w.u8(1);
        w.u32(1);
        w.str("");
        w.u8(0);
        w.f64(0.0);
        CHECK_THROWS_AS(decode_named_tensors(w.buffer()), ParseError);
    }
}

TEST_CASE("matrix files round-trip with and without labels") {
    Rng rng(77);
    Matrix values(5, 3);
    for (Eigen::Index i = 0; i < values.size(); ++i) values.data()[i] = rng.normal();

    SUBCASE("with labels") {
        MatrixFile m{values, std::vector<std::uint32_t>{0, 1, 2, 1, 0}};
        const auto decoded = decode_matrix(encode_matrix(m));
        CHECK(decoded.values.rows() == 5);
        CHECK(decoded.values.cols() == 3);
        CHECK((decoded.values - values).cwiseAbs().maxCoeff() == 0.0);
        REQUIRE(decoded.labels.has_value());
        CHECK(*decoded.labels == *m.labels);
    }
    SUBCASE("without labels") {
        MatrixFile m{values, std::nullopt};
        const auto encoded = encode_matrix(m);
        // magic, version, rows, cols, flag, then exactly rows*cols doubles
        CHECK(encoded.size() == 4 + 1 + 8 + 8 + 1 + 5 * 3 * 8);
        CHECK(encoded[0] == 'D');
        CHECK(encoded[1] == 'M');
        CHECK(encoded[2] == 'A');
        CHECK(encoded[3] == 'T');
        const auto decoded = decode_matrix(encoded);
        CHECK_FALSE(decoded.labels.has_value());
        CHECK((decoded.values - values).cwiseAbs().maxCoeff() == 0.0);
    }
    SUBCASE("label count mismatch is rejected at encode time") {
        MatrixFile m{values, std::vector<std::uint32_t>{1, 2}};
        CHECK_THROWS_AS(encode_matrix(m), InvalidConfig);
    }
    SUBCASE("oversized shape claim is rejected before allocation") {
        ByteWriter w;
        w.bytes(to_bytes("DMAT"));
        w.u8(1);
        w.u64(1ull << 40);
        w.u64(1ull << 40);
        w.u8(0);
        CHECK_THROWS_AS(decode_matrix(w.buffer()), ParseError);
    }
    SUBCASE("bad label flag") {
        ByteWriter w;
        w.bytes(to_bytes("DMAT"));
        w.u8(1);
        w.u64(1);
        w.u64(1);
        w.u8(2);
        w.f64(0.0);
        CHECK_THROWS_AS(decode_matrix(w.buffer()), ParseError);
    }
}

TEST_CASE("atomic file writes round-trip and leave no temp files") {
    namespace fs = std::filesystem;
    const fs::path dir = fs::temp_directory_path() / "dcco_serialize_test";
    fs::create_directories(dir);
    const fs::path target = dir / "bundle.bin";

    NamedTensors tensors;
    tensors.emplace("w", Tensor({2, 2}, {1.5, -2.5, 3.25, 0.0}));
    const auto encoded = encode_named_tensors(tensors);

    write_file_atomic(target, encoded);
    CHECK(read_file(target) == encoded);
    CHECK_FALSE(fs::exists(target.string() + ".tmp"));

    // overwrite in place
    tensors.emplace("b", Tensor({2}, {0.5, 0.25}));
    const auto encoded2 = encode_named_tensors(tensors);
    write_file_atomic(target, encoded2);
    CHECK(read_file(target) == encoded2);

    CHECK_THROWS_AS(read_file(dir / "missing.bin"), IoError);
    fs::remove_all(dir);
}

TEST_CASE("digest matches published FNV-1a vectors") {
    CHECK(fnv1a64({}) == 0xcbf29ce484222325ull);
    CHECK(fnv1a64(to_bytes("a")) == 0xaf63dc4c8601ec8cull);
    CHECK(fnv1a64(to_bytes("foobar")) == 0x85944171f73967e8ull);
}

TEST_CASE("digests are stable and sensitive") {
    const auto f = Tensor({2, 2}, {1, 2, 3, 4});
    const auto g = Tensor({2, 2}, {5, 6, 7, 8});
    const auto stats = local_stats_values(f, g);
    CHECK(digest_stats(stats) == digest_stats(stats));

    auto perturbed = stats;
    auto vals = perturbed.cross.values_mut();
    vals[0] += 1e-12;
    CHECK(digest_stats(perturbed) != digest_stats(stats));

    NamedTensors a;
    a.emplace("w", f);
    NamedTensors b;
    b.emplace("w", g);
    CHECK(digest_named_tensors(a) == digest_named_tensors(a));
    CHECK(digest_named_tensors(a) != digest_named_tensors(b));
}
