#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "dcco/errors.hpp"
#include "dcco/stats.hpp"
#include "dcco/tensor.hpp"

namespace dcco {

// Everything on the wire and on disk is little-endian, independent of host
// byte order. Floats travel as the IEEE-754 bit pattern of the double, so
// encode/decode round-trips are bitwise exact (NaN payloads included).

/// Append-only byte buffer with little-endian primitive writers.
class ByteWriter {
public:
    void u8(std::uint8_t v);
    void u32(std::uint32_t v);
    void u64(std::uint64_t v);
    void f64(double v);
    void bytes(std::span<const std::uint8_t> data);
    void str(std::string_view s);  // u32 length prefix + raw bytes

    const std::vector<std::uint8_t>& buffer() const { return buf_; }
    std::vector<std::uint8_t> take() { return std::move(buf_); }
    std::size_t size() const { return buf_.size(); }

private:
    std::vector<std::uint8_t> buf_;
};

/// Bounds-checked reader over a byte span. Every read names its offset on
/// failure so truncated payloads produce actionable ParseErrors.
class ByteReader {
public:
    explicit ByteReader(std::span<const std::uint8_t> data) : data_(data) {}

    std::uint8_t u8();
    std::uint32_t u32();
    std::uint64_t u64();
    double f64();
    std::vector<std::uint8_t> bytes(std::size_t n);
    std::string str();  // u32 length prefix + raw bytes

    std::size_t offset() const { return pos_; }
    std::size_t remaining() const { return data_.size() - pos_; }
    bool done() const { return pos_ == data_.size(); }

    /// Throws ParseError unless the whole span has been consumed.
    void expect_done(std::string_view what) const;

private:
    void need(std::size_t n) const;

    std::span<const std::uint8_t> data_;
    std::size_t pos_ = 0;
};

// --- statistics payload ---------------------------------------------------
//
// Layout (version 1): version u8, d u32, count u64, then mean_f, mean_f2,
// mean_g, mean_g2 (d doubles each) and cross (d*d doubles, row-major).
// This is the exact payload of the protocol's statistics frames.

std::vector<std::uint8_t> encode_stats(const EncodingStats& stats);
EncodingStats decode_stats(std::span<const std::uint8_t> data);

// --- parameter / delta bundles --------------------------------------------
//
// Flat container of (name, shape, float64 payload) records:
//   magic "DPAR", version u8, record count u32, then per record
//   name (u32 length + bytes), rank u8, dims (rank u64s), payload doubles.
// Records are written in map order (sorted by name), so equal parameter
// maps always serialize to identical bytes.

using NamedTensors = std::map<std::string, Tensor>;

std::vector<std::uint8_t> encode_named_tensors(const NamedTensors& tensors);
NamedTensors decode_named_tensors(std::span<const std::uint8_t> data);

// --- matrix files -----------------------------------------------------------
//
// Binary matrix file ("DMAT", version 1): magic, version u8, rows u64,
// cols u64, label flag u8, float64 row-major payload, then rows u32 labels
// when the flag is set.

struct MatrixFile {
    Matrix values;
    std::optional<std::vector<std::uint32_t>> labels;
};

std::vector<std::uint8_t> encode_matrix(const MatrixFile& m);
MatrixFile decode_matrix(std::span<const std::uint8_t> data);

// --- file helpers -----------------------------------------------------------

std::vector<std::uint8_t> read_file(const std::filesystem::path& path);

/// Writes via a sibling temp file + rename so readers never observe a
/// half-written file (checkpoints depend on this).
void write_file_atomic(const std::filesystem::path& path,
                       std::span<const std::uint8_t> data);

// --- digests ---------------------------------------------------------------

/// FNV-1a over raw bytes; used for determinism checks and round traces.
std::uint64_t fnv1a64(std::span<const std::uint8_t> data);

std::uint64_t digest_stats(const EncodingStats& stats);
std::uint64_t digest_named_tensors(const NamedTensors& tensors);

}  // namespace dcco
