#include "dcco/serialize.hpp"

#include <bit>
#include <cstdio>
#include <cstring>
#include <utility>

namespace dcco {

namespace {

constexpr std::uint8_t kStatsVersion = 1;

constexpr char kParamsMagic[4] = {'D', 'P', 'A', 'R'};
constexpr std::uint8_t kParamsVersion = 1;

constexpr char kMatrixMagic[4] = {'D', 'M', 'A', 'T'};
constexpr std::uint8_t kMatrixVersion = 1;

std::string at_offset(std::string_view what, std::size_t offset) {
    return std::string(what) + " at offset " + std::to_string(offset);
}

}  // namespace

// --- ByteWriter -------------------------------------------------------------

void ByteWriter::u8(std::uint8_t v) { buf_.push_back(v); }

void ByteWriter::u32(std::uint32_t v) {
    for (int i = 0; i < 4; ++i) buf_.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
}

void ByteWriter::u64(std::uint64_t v) {
    for (int i = 0; i < 8; ++i) buf_.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
}

void ByteWriter::f64(double v) { u64(std::bit_cast<std::uint64_t>(v)); }

void ByteWriter::bytes(std::span<const std::uint8_t> data) {
    buf_.insert(buf_.end(), data.begin(), data.end());
}

void ByteWriter::str(std::string_view s) {
    u32(static_cast<std::uint32_t>(s.size()));
    buf_.insert(buf_.end(), s.begin(), s.end());
}

// --- ByteReader -------------------------------------------------------------

void ByteReader::need(std::size_t n) const {
    if (data_.size() - pos_ < n) {
        throw ParseError("truncated payload at offset " + std::to_string(pos_) +
                         ": need " + std::to_string(n) + " bytes, have " +
                         std::to_string(data_.size() - pos_));
    }
}

std::uint8_t ByteReader::u8() {
    need(1);
    return data_[pos_++];
}

std::uint32_t ByteReader::u32() {
    need(4);
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(data_[pos_ + i]) << (8 * i);
    pos_ += 4;
    return v;
}

std::uint64_t ByteReader::u64() {
    need(8);
    std::uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(data_[pos_ + i]) << (8 * i);
    pos_ += 8;
    return v;
}

double ByteReader::f64() { return std::bit_cast<double>(u64()); }

std::vector<std::uint8_t> ByteReader::bytes(std::size_t n) {
    need(n);
    std::vector<std::uint8_t> out(data_.begin() + static_cast<std::ptrdiff_t>(pos_),
                                  data_.begin() + static_cast<std::ptrdiff_t>(pos_ + n));
    pos_ += n;
    return out;
}

std::string ByteReader::str() {
    const std::uint32_t len = u32();
    need(len);
    std::string out(reinterpret_cast<const char*>(data_.data() + pos_), len);
    pos_ += len;
    return out;
}

void ByteReader::expect_done(std::string_view what) const {
    if (pos_ != data_.size()) {
        throw ParseError(std::string(what) + ": " + std::to_string(data_.size() - pos_) +
                         " trailing bytes " + at_offset("", pos_));
    }
}

// --- statistics payload -----------------------------------------------------

namespace {

void write_row(ByteWriter& w, const Tensor& t) {
    for (double v : t.values()) w.f64(v);
}

Tensor read_matrix(ByteReader& r, Eigen::Index rows, Eigen::Index cols) {
    Matrix m(rows, cols);
    double* out = m.data();  // row-major, matches wire order
    for (Eigen::Index i = 0; i < rows * cols; ++i) out[i] = r.f64();
    return Tensor::from_matrix(std::move(m));
}

}  // namespace

std::vector<std::uint8_t> encode_stats(const EncodingStats& stats) {
    stats.validate();
    const auto d = static_cast<std::uint32_t>(stats.dim());
    ByteWriter w;
    w.u8(kStatsVersion);
    w.u32(d);
    w.u64(stats.count);
    write_row(w, stats.mean_f);
    write_row(w, stats.mean_f2);
    write_row(w, stats.mean_g);
    write_row(w, stats.mean_g2);
    write_row(w, stats.cross);
    return w.take();
}

EncodingStats decode_stats(std::span<const std::uint8_t> data) {
    ByteReader r(data);
    const std::uint8_t version = r.u8();
    if (version != kStatsVersion) {
        throw ParseError("unsupported statistics payload version " + std::to_string(version) +
                         " (expected " + std::to_string(kStatsVersion) + ")");
    }
    const std::uint32_t d = r.u32();
    if (d == 0) throw ParseError("statistics payload has dimension 0");
    const std::uint64_t count = r.u64();

    EncodingStats stats;
    stats.count = count;
    const auto dim = static_cast<Eigen::Index>(d);
    stats.mean_f = read_matrix(r, 1, dim);
    stats.mean_f2 = read_matrix(r, 1, dim);
    stats.mean_g = read_matrix(r, 1, dim);
    stats.mean_g2 = read_matrix(r, 1, dim);
    stats.cross = read_matrix(r, dim, dim);
    r.expect_done("statistics payload");
    stats.validate();
    return stats;
}

// --- parameter / delta bundles ----------------------------------------------

std::vector<std::uint8_t> encode_named_tensors(const NamedTensors& tensors) {
    ByteWriter w;
    w.bytes(std::span(reinterpret_cast<const std::uint8_t*>(kParamsMagic), 4));
    w.u8(kParamsVersion);
    w.u32(static_cast<std::uint32_t>(tensors.size()));
    for (const auto& [name, tensor] : tensors) {
        w.str(name);
        const auto& shape = tensor.shape();
        w.u8(static_cast<std::uint8_t>(shape.size()));
        for (Eigen::Index dim : shape) w.u64(static_cast<std::uint64_t>(dim));
        write_row(w, tensor);
    }
    return w.take();
}

NamedTensors decode_named_tensors(std::span<const std::uint8_t> data) {
    ByteReader r(data);
    const auto magic = r.bytes(4);
    if (std::memcmp(magic.data(), kParamsMagic, 4) != 0) {
        throw ParseError("bad parameter bundle magic (expected \"DPAR\")");
    }
    const std::uint8_t version = r.u8();
    if (version != kParamsVersion) {
        throw ParseError("unsupported parameter bundle version " + std::to_string(version));
    }
    const std::uint32_t n_records = r.u32();

    NamedTensors out;
    for (std::uint32_t i = 0; i < n_records; ++i) {
        std::string name = r.str();
        if (name.empty()) throw ParseError(at_offset("empty tensor name", r.offset()));
        if (out.count(name) > 0) throw ParseError("duplicate tensor name \"" + name + "\"");
        const std::uint8_t rank = r.u8();
        if (rank > 2) {
            throw ParseError("tensor \"" + name + "\" has unsupported rank " +
                             std::to_string(rank));
        }
        std::vector<Eigen::Index> shape;
        for (std::uint8_t k = 0; k < rank; ++k) {
            const std::uint64_t dim = r.u64();
            if (dim == 0 || dim > (1ull << 32)) {
                throw ParseError("tensor \"" + name + "\" has invalid dimension " +
                                 std::to_string(dim));
            }
            shape.push_back(static_cast<Eigen::Index>(dim));
        }
        Eigen::Index rows = 1, cols = 1;
        if (rank == 1) cols = shape[0];
        if (rank == 2) { rows = shape[0]; cols = shape[1]; }
        Matrix m = read_matrix(r, rows, cols).mat();
        out.emplace(std::move(name), Tensor::from_matrix(std::move(m), shape));
    }
    r.expect_done("parameter bundle");
    return out;
}

// --- matrix files -------------------------------------------------------------

std::vector<std::uint8_t> encode_matrix(const MatrixFile& m) {
    if (m.labels && static_cast<Eigen::Index>(m.labels->size()) != m.values.rows()) {
        throw InvalidConfig("label count " + std::to_string(m.labels->size()) +
                            " does not match row count " + std::to_string(m.values.rows()));
    }
    ByteWriter w;
    w.bytes(std::span(reinterpret_cast<const std::uint8_t*>(kMatrixMagic), 4));
    w.u8(kMatrixVersion);
    w.u64(static_cast<std::uint64_t>(m.values.rows()));
    w.u64(static_cast<std::uint64_t>(m.values.cols()));
    w.u8(m.labels ? 1 : 0);
    const double* p = m.values.data();  // row-major
    for (Eigen::Index i = 0; i < m.values.size(); ++i) w.f64(p[i]);
    if (m.labels) {
        for (std::uint32_t label : *m.labels) w.u32(label);
    }
    return w.take();
}

MatrixFile decode_matrix(std::span<const std::uint8_t> data) {
    ByteReader r(data);
    const auto magic = r.bytes(4);
    if (std::memcmp(magic.data(), kMatrixMagic, 4) != 0) {
        throw ParseError("bad matrix file magic (expected \"DMAT\")");
    }
    const std::uint8_t version = r.u8();
    if (version != kMatrixVersion) {
        throw ParseError("unsupported matrix file version " + std::to_string(version));
    }
    const std::uint64_t rows = r.u64();
    const std::uint64_t cols = r.u64();
    if (rows == 0 || cols == 0) throw ParseError("matrix file has empty shape");
    if (rows > (1ull << 31) || cols > (1ull << 31) ||
        rows * cols > r.remaining() / 8 + 1) {
        throw ParseError("matrix file shape " + std::to_string(rows) + "x" +
                         std::to_string(cols) + " exceeds payload size");
    }
    const std::uint8_t label_flag = r.u8();
    if (label_flag > 1) {
        throw ParseError("matrix file label flag must be 0 or 1, got " +
                         std::to_string(label_flag));
    }

    MatrixFile out;
    out.values = read_matrix(r, static_cast<Eigen::Index>(rows),
                             static_cast<Eigen::Index>(cols)).mat();
    if (label_flag == 1) {
        std::vector<std::uint32_t> labels(rows);
        for (auto& label : labels) label = r.u32();
        out.labels = std::move(labels);
    }
    r.expect_done("matrix file");
    return out;
}

// --- file helpers -------------------------------------------------------------

std::vector<std::uint8_t> read_file(const std::filesystem::path& path) {
    std::FILE* f = std::fopen(path.c_str(), "rb");
    if (!f) throw IoError("cannot open " + path.string() + " for reading");
    std::fseek(f, 0, SEEK_END);
    const long size = std::ftell(f);
    std::fseek(f, 0, SEEK_SET);
    std::vector<std::uint8_t> data(size > 0 ? static_cast<std::size_t>(size) : 0);
    const std::size_t got = data.empty() ? 0 : std::fread(data.data(), 1, data.size(), f);
    std::fclose(f);
    if (got != data.size()) throw IoError("short read from " + path.string());
    return data;
}

void write_file_atomic(const std::filesystem::path& path,
                       std::span<const std::uint8_t> data) {
    const std::filesystem::path tmp = path.string() + ".tmp";
    std::FILE* f = std::fopen(tmp.c_str(), "wb");
    if (!f) throw IoError("cannot open " + tmp.string() + " for writing");
    const std::size_t wrote = data.empty() ? 0 : std::fwrite(data.data(), 1, data.size(), f);
    const bool flushed = std::fflush(f) == 0;
    std::fclose(f);
    if (wrote != data.size() || !flushed) {
        std::filesystem::remove(tmp);
        throw IoError("short write to " + tmp.string());
    }
    std::error_code ec;
    std::filesystem::rename(tmp, path, ec);
    if (ec) {
        std::filesystem::remove(tmp);
        throw IoError("cannot rename " + tmp.string() + " to " + path.string() + ": " +
                      ec.message());
    }
}

// --- digests -------------------------------------------------------------------

std::uint64_t fnv1a64(std::span<const std::uint8_t> data) {
    std::uint64_t hash = 0xcbf29ce484222325ull;
    for (std::uint8_t byte : data) {
        hash ^= byte;
        hash *= 0x100000001b3ull;
    }
    return hash;
}

std::uint64_t digest_stats(const EncodingStats& stats) {
    return fnv1a64(encode_stats(stats));
}

std::uint64_t digest_named_tensors(const NamedTensors& tensors) {
    return fnv1a64(encode_named_tensors(tensors));
}

}  // namespace dcco
