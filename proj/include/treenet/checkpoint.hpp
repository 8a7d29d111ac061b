#pragma once

#include <algorithm>
#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <iterator>
#include <map>
#include <string>
#include <vector>

#include "treenet/module.hpp"

// Binary layout, little-endian throughout:
//
//   "TRNW"              4 bytes magic
//   u32 version         currently 1
//   u32 count           number of tensor records
//   count x record, sorted by name (bytewise):
//     u32 name_len, name_len bytes of UTF-8
//     u8  dtype         0 = f32, 1 = f64
//     u8  rank          0..4
//     rank x u64 dims
//     prod(dims) values, IEEE-754, 4 or 8 bytes each
namespace treenet {

inline constexpr char kCheckpointMagic[4] = {'T', 'R', 'N', 'W'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

struct TensorRecord {
    std::string name;
    DType dtype = DType::f32;
    Shape shape;
    std::vector<double> values;  // widened copy; narrowed again on write

    bool operator==(const TensorRecord&) const = default;
};

namespace detail {

class ByteWriter {
public:
    void u8(std::uint8_t v) { buf_.push_back(v); }
    void u32(std::uint32_t v) {
        for (int i = 0; i < 4; ++i) buf_.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
    }
    void u64(std::uint64_t v) {
        for (int i = 0; i < 8; ++i) buf_.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
    }
    void bytes(const void* p, std::size_t n) {
        auto* b = static_cast<const std::uint8_t*>(p);
        buf_.insert(buf_.end(), b, b + n);
    }
    std::vector<std::uint8_t> take() { return std::move(buf_); }

private:
    std::vector<std::uint8_t> buf_;
};

class ByteReader {
public:
    explicit ByteReader(std::span<const std::uint8_t> data) : data_(data) {}
    std::uint8_t u8() { return need(1)[0]; }
    std::uint32_t u32() {
        auto p = need(4);
        std::uint32_t v = 0;
        for (int i = 0; i < 4; ++i) v |= std::uint32_t(p[i]) << (8 * i);
        return v;
    }
    std::uint64_t u64() {
        auto p = need(8);
        std::uint64_t v = 0;
        for (int i = 0; i < 8; ++i) v |= std::uint64_t(p[i]) << (8 * i);
        return v;
    }
    std::span<const std::uint8_t> need(std::size_t n) {
        if (pos_ + n > data_.size()) throw Error("checkpoint: truncated at byte " + std::to_string(pos_));
        auto s = data_.subspan(pos_, n);
        pos_ += n;
        return s;
    }
    bool done() const { return pos_ == data_.size(); }
    std::size_t remaining() const { return data_.size() - pos_; }

private:
    std::span<const std::uint8_t> data_;
    std::size_t pos_ = 0;
};

}  // namespace detail

inline std::vector<std::uint8_t> encode_checkpoint(std::vector<TensorRecord> records) {
    std::sort(records.begin(), records.end(), [](const auto& a, const auto& b) { return a.name < b.name; });
    for (std::size_t i = 1; i < records.size(); ++i)
        if (records[i].name == records[i - 1].name) throw Error("checkpoint: duplicate tensor '" + records[i].name + "'");
    detail::ByteWriter w;
    w.bytes(kCheckpointMagic, 4);
    w.u32(kCheckpointVersion);
    w.u32(static_cast<std::uint32_t>(records.size()));
    for (const auto& r : records) {
        if (numel(r.shape) != static_cast<std::int64_t>(r.values.size()))
            throw Error("checkpoint: record '" + r.name + "' has inconsistent shape");
        w.u32(static_cast<std::uint32_t>(r.name.size()));
        w.bytes(r.name.data(), r.name.size());
        w.u8(static_cast<std::uint8_t>(r.dtype));
        w.u8(static_cast<std::uint8_t>(r.shape.size()));
        for (auto d : r.shape) w.u64(static_cast<std::uint64_t>(d));
        for (double v : r.values) {
            if (r.dtype == DType::f32)
                w.u32(std::bit_cast<std::uint32_t>(static_cast<float>(v)));
            else
                w.u64(std::bit_cast<std::uint64_t>(v));
        }
    }
    return w.take();
}

inline std::vector<TensorRecord> decode_checkpoint(std::span<const std::uint8_t> bytes) {
    detail::ByteReader r(bytes);
    auto magic = r.need(4);
    if (!std::equal(magic.begin(), magic.end(), kCheckpointMagic)) throw Error("checkpoint: bad magic");
    const auto version = r.u32();
    if (version != kCheckpointVersion) throw Error("checkpoint: unsupported version " + std::to_string(version));
    const auto count = r.u32();
    std::vector<TensorRecord> out;
    for (std::uint32_t i = 0; i < count; ++i) {
        TensorRecord rec;
        const auto len = r.u32();
        auto name = r.need(len);
        rec.name.assign(name.begin(), name.end());
        const auto code = r.u8();
        if (code > 1) throw Error("checkpoint: unknown dtype code " + std::to_string(code) + " for '" + rec.name + "'");
        rec.dtype = static_cast<DType>(code);
        const auto rank = r.u8();
        if (rank > 4) throw Error("checkpoint: rank " + std::to_string(rank) + " for '" + rec.name + "'");
        const std::size_t width = rec.dtype == DType::f32 ? 4 : 8;
        std::uint64_t n = 1;
        for (int d = 0; d < rank; ++d) {
            const auto dim = r.u64();
            if (dim > r.remaining() || (dim && n > r.remaining() / dim))
                throw Error("checkpoint: dims of '" + rec.name + "' exceed the file size");
            n *= dim;
            rec.shape.push_back(static_cast<std::int64_t>(dim));
        }
        if (n > r.remaining() / width) throw Error("checkpoint: truncated data for '" + rec.name + "'");
        rec.values.reserve(n);
        for (std::uint64_t j = 0; j < n; ++j)
            rec.values.push_back(rec.dtype == DType::f32 ? static_cast<double>(std::bit_cast<float>(r.u32()))
                                                         : std::bit_cast<double>(r.u64()));
        if (!out.empty() && !(out.back().name < rec.name))
            throw Error("checkpoint: records not in strict name order at '" + rec.name + "'");
        out.push_back(std::move(rec));
    }
    if (!r.done()) throw Error("checkpoint: trailing bytes after last record");
    return out;
}

template <Scalar T>
std::vector<TensorRecord> snapshot(Module<T>& model) {
    std::vector<TensorRecord> out;
    for (auto& nt : model.named_tensors()) {
        TensorRecord r;
        r.name = nt.name;
        r.dtype = dtype_of<T>;
        r.shape = nt.tensor.shape();
        r.values.assign(nt.tensor.data().begin(), nt.tensor.data().end());
        out.push_back(std::move(r));
    }
    return out;
}

/// Copies records into the model's tensors. Every model tensor must be present
/// with identical dims, and no record may be left over.
template <Scalar T>
void restore(Module<T>& model, const std::vector<TensorRecord>& records) {
    std::map<std::string, const TensorRecord*> by_name;
    for (const auto& r : records) by_name[r.name] = &r;
    auto tensors = model.named_tensors();
    for (auto& nt : tensors) {
        auto it = by_name.find(nt.name);
        if (it == by_name.end()) throw Error("checkpoint: missing tensor '" + nt.name + "'");
        if (it->second->shape != nt.tensor.shape())
            throw ShapeError("checkpoint: tensor '" + nt.name + "' has dims " + to_string(it->second->shape) +
                             ", model expects " + to_string(nt.tensor.shape()));
    }
    if (by_name.size() != tensors.size()) {
        std::map<std::string, int> known;
        for (auto& nt : tensors) known[nt.name] = 1;
        for (const auto& r : records)
            if (!known.contains(r.name)) throw Error("checkpoint: unexpected tensor '" + r.name + "'");
    }
    for (auto& nt : tensors) {
        const auto& vals = by_name.at(nt.name)->values;
        auto dst = nt.tensor.data();
        for (std::size_t i = 0; i < dst.size(); ++i) dst[i] = static_cast<T>(vals[i]);
    }
}

inline void write_file(const std::string& path, std::span<const std::uint8_t> bytes) {
    std::ofstream f(path, std::ios::binary | std::ios::trunc);
    if (!f) throw Error("cannot open '" + path + "' for writing");
    f.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    if (!f) throw Error("write to '" + path + "' failed");
}

inline std::vector<std::uint8_t> read_file(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw Error("cannot open '" + path + "'");
    return {std::istreambuf_iterator<char>(f), std::istreambuf_iterator<char>()};
}

template <Scalar T>
void save_checkpoint(Module<T>& model, const std::string& path) {
    write_file(path, encode_checkpoint(snapshot(model)));
}

template <Scalar T>
void load_checkpoint(Module<T>& model, const std::string& path) {
    auto bytes = read_file(path);
    restore(model, decode_checkpoint(bytes));
}

}  // namespace treenet
