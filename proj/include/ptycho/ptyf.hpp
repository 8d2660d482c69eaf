#pragma once

// PTYF binary array format, little-endian, no padding or compression:
//   magic "PTYF" | version u16 = 1 | dtype u8 | ndim u8 | ndim x u64 dims | payload
// dtype: 0 = f32 real, 1 = f64 real, 2 = f32 complex interleaved, 3 = f64 complex interleaved.
// Checkpoints are a sequence of named records in one file:
//   name length u16 | UTF-8 name | inline PTYF blob

#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <string>
#include <utility>
#include <variant>
#include <vector>

#include "ptycho/field.hpp"

namespace ptycho {

enum class PtyfDtype : std::uint8_t { f32_real = 0, f64_real = 1, f32_complex = 2, f64_complex = 3 };

struct NdArray {
    std::vector<std::uint64_t> dims;
    std::vector<double> data;  // stored as f64 real

    std::uint64_t count() const {
        std::uint64_t n = 1;
        for (auto d : dims) n *= d;
        return n;
    }
};

namespace detail {

class ByteReader {
  public:
    explicit ByteReader(std::istream& in) : in_(in) {}

    std::uint64_t offset() const { return offset_; }

    void raw(void* dst, size_t n, const char* what) {
        in_.read(static_cast<char*>(dst), std::streamsize(n));
        if (size_t(in_.gcount()) != n)
            throw FormatError(std::string("truncated while reading ") + what + " (wanted " +
                                  std::to_string(n) + " bytes, got " + std::to_string(in_.gcount()) + ")",
                              offset_);
        offset_ += n;
    }

    template <typename T>
    T scalar(const char* what) {
        T v;
        raw(&v, sizeof(T), what);
        return v;
    }

  private:
    std::istream& in_;
    std::uint64_t offset_ = 0;
};

template <typename T>
void put(std::ostream& out, T v) {
    out.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

inline void write_header(std::ostream& out, PtyfDtype dtype, const std::vector<std::uint64_t>& dims) {
    out.write("PTYF", 4);
    put<std::uint16_t>(out, 1);
    put<std::uint8_t>(out, static_cast<std::uint8_t>(dtype));
    put<std::uint8_t>(out, static_cast<std::uint8_t>(dims.size()));
    for (auto d : dims) put<std::uint64_t>(out, d);
}

struct Header {
    PtyfDtype dtype;
    std::vector<std::uint64_t> dims;
    std::uint64_t count;
};

inline Header read_header(ByteReader& r) {
    const std::uint64_t magic_at = r.offset();
    char magic[4];
    r.raw(magic, 4, "magic");
    if (std::memcmp(magic, "PTYF", 4) != 0)
        throw FormatError("bad magic '" + std::string(magic, 4) + "', expected 'PTYF'", magic_at);
    const std::uint64_t version_at = r.offset();
    const auto version = r.scalar<std::uint16_t>("version");
    if (version != 1)
        throw FormatError("unsupported version " + std::to_string(version), version_at);
    const std::uint64_t dtype_at = r.offset();
    const auto dtype = r.scalar<std::uint8_t>("dtype");
    if (dtype > 3) throw FormatError("unknown dtype code " + std::to_string(dtype), dtype_at);
    const auto ndim = r.scalar<std::uint8_t>("ndim");
    Header h;
    h.dtype = static_cast<PtyfDtype>(dtype);
    h.dims.resize(ndim);
    h.count = ndim ? 1 : 0;
    for (int i = 0; i < ndim; ++i) {
        h.dims[i] = r.scalar<std::uint64_t>("dimension");
        h.count *= h.dims[i];
    }
    return h;
}

inline void expect_2d(const Header& h, const char* what, std::uint64_t offset) {
    if (h.dims.size() != 2)
        throw FormatError(std::string(what) + " expects 2 dimensions, file has " + std::to_string(h.dims.size()),
                          offset);
}

}  // namespace detail

inline void write_field(std::ostream& out, const RealField& f, bool as_f32 = false) {
    detail::write_header(out, as_f32 ? PtyfDtype::f32_real : PtyfDtype::f64_real,
                         {std::uint64_t(f.height), std::uint64_t(f.width)});
    if (as_f32) {
        for (double v : f.data) detail::put<float>(out, static_cast<float>(v));
    } else {
        out.write(reinterpret_cast<const char*>(f.data.data()), std::streamsize(f.data.size() * sizeof(double)));
    }
}

inline void write_field(std::ostream& out, const ComplexField& f, bool as_f32 = false) {
    detail::write_header(out, as_f32 ? PtyfDtype::f32_complex : PtyfDtype::f64_complex,
                         {std::uint64_t(f.height), std::uint64_t(f.width)});
    if (as_f32) {
        for (const cplx& v : f.data) {
            detail::put<float>(out, static_cast<float>(v.real()));
            detail::put<float>(out, static_cast<float>(v.imag()));
        }
    } else {
        out.write(reinterpret_cast<const char*>(f.data.data()), std::streamsize(f.data.size() * sizeof(cplx)));
    }
}

using FieldVariant = std::variant<RealField, ComplexField>;

inline FieldVariant read_field(std::istream& in) {
    detail::ByteReader r(in);
    const detail::Header h = detail::read_header(r);
    detail::expect_2d(h, "read_field", r.offset());
    const int height = int(h.dims[0]);
    const int width = int(h.dims[1]);
    switch (h.dtype) {
        case PtyfDtype::f32_real: {
            RealField f(height, width);
            std::vector<float> tmp(h.count);
            r.raw(tmp.data(), tmp.size() * sizeof(float), "f32 payload");
            for (size_t i = 0; i < tmp.size(); ++i) f.data[i] = tmp[i];
            return f;
        }
        case PtyfDtype::f64_real: {
            RealField f(height, width);
            r.raw(f.data.data(), f.data.size() * sizeof(double), "f64 payload");
            return f;
        }
        case PtyfDtype::f32_complex: {
            ComplexField f(height, width);
            std::vector<float> tmp(h.count * 2);
            r.raw(tmp.data(), tmp.size() * sizeof(float), "f32 complex payload");
            for (size_t i = 0; i < f.data.size(); ++i) f.data[i] = cplx(tmp[2 * i], tmp[2 * i + 1]);
            return f;
        }
        case PtyfDtype::f64_complex: {
            ComplexField f(height, width);
            r.raw(f.data.data(), f.data.size() * sizeof(cplx), "f64 complex payload");
            return f;
        }
    }
    throw FormatError("unreachable dtype", r.offset());
}

inline void write_field(const std::string& path, const RealField& f, bool as_f32 = false) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw IoError("cannot open '" + path + "' for writing");
    write_field(out, f, as_f32);
    if (!out) throw IoError("short write to '" + path + "'");
}

inline void write_field(const std::string& path, const ComplexField& f, bool as_f32 = false) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw IoError("cannot open '" + path + "' for writing");
    write_field(out, f, as_f32);
    if (!out) throw IoError("short write to '" + path + "'");
}

inline FieldVariant read_field(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open '" + path + "' for reading");
    return read_field(in);
}

inline RealField read_real_field(const std::string& path) {
    FieldVariant v = read_field(path);
    if (!std::holds_alternative<RealField>(v))
        throw FormatError("'" + path + "' holds a complex field, expected real", 6);
    return std::get<RealField>(std::move(v));
}

inline ComplexField read_complex_field(const std::string& path) {
    FieldVariant v = read_field(path);
    if (!std::holds_alternative<ComplexField>(v))
        throw FormatError("'" + path + "' holds a real field, expected complex", 6);
    return std::get<ComplexField>(std::move(v));
}

// ---- named-tensor container (parameter checkpoints) ----

using NamedTensors = std::vector<std::pair<std::string, NdArray>>;

inline void write_named_tensors(const std::string& path, const NamedTensors& tensors) {
    const std::string tmp = path + ".tmp";
    {
        std::ofstream out(tmp, std::ios::binary);
        if (!out) throw IoError("cannot open '" + tmp + "' for writing");
        for (const auto& [name, arr] : tensors) {
            if (name.size() > 0xFFFF) throw IoError("tensor name too long: " + name);
            detail::put<std::uint16_t>(out, std::uint16_t(name.size()));
            out.write(name.data(), std::streamsize(name.size()));
            detail::write_header(out, PtyfDtype::f64_real, arr.dims);
            out.write(reinterpret_cast<const char*>(arr.data.data()),
                      std::streamsize(arr.data.size() * sizeof(double)));
        }
        if (!out) throw IoError("short write to '" + tmp + "'");
    }
    std::filesystem::rename(tmp, path);
}

inline NamedTensors read_named_tensors(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open '" + path + "' for reading");
    NamedTensors out;
    detail::ByteReader r(in);
    while (in.peek() != std::char_traits<char>::eof()) {
        const auto name_len = r.scalar<std::uint16_t>("name length");
        std::string name(name_len, '\0');
        r.raw(name.data(), name_len, "name");
        const detail::Header h = detail::read_header(r);
        if (h.dtype != PtyfDtype::f64_real)
            throw FormatError("checkpoint tensors must be f64 real, '" + name + "' is dtype " +
                                  std::to_string(int(h.dtype)),
                              r.offset());
        NdArray arr;
        arr.dims = h.dims;
        arr.data.resize(h.count);
        r.raw(arr.data.data(), arr.data.size() * sizeof(double), "tensor payload");
        out.emplace_back(std::move(name), std::move(arr));
    }
    return out;
}

}  // namespace ptycho
