#pragma once

// File formats: raw byte helpers, gzip inflation (zlib), a small named-array
// container used for checkpoints and dataset exports, PGM images, and a
// minimal PNG reader for 8-bit grayscale ingestion.

#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>
#include <string>
#include <vector>

#include <zlib.h>

#include "counterfax/common.hpp"

namespace counterfax {

namespace fs = std::filesystem;

inline std::vector<uint8_t> read_file_bytes(const fs::path& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw FormatError("cannot open file: " + path.string());
    f.seekg(0, std::ios::end);
    size_t len = size_t(f.tellg());
    f.seekg(0);
    std::vector<uint8_t> bytes(len);
    f.read(reinterpret_cast<char*>(bytes.data()), std::streamsize(len));
    if (!f) throw FormatError("short read: " + path.string());
    return bytes;
}

inline void write_file_bytes(const fs::path& path, const void* data, size_t len) {
    if (path.has_parent_path()) fs::create_directories(path.parent_path());
    std::ofstream f(path, std::ios::binary | std::ios::trunc);
    if (!f) throw FormatError("cannot write file: " + path.string());
    f.write(static_cast<const char*>(data), std::streamsize(len));
    if (!f) throw FormatError("short write: " + path.string());
}

inline void write_file_text(const fs::path& path, const std::string& text) {
    write_file_bytes(path, text.data(), text.size());
}

/// Write-then-rename, so readers never observe a half-written file.
inline void write_file_text_atomic(const fs::path& path, const std::string& text) {
    fs::path tmp = path;
    tmp += ".tmp";
    write_file_bytes(tmp, text.data(), text.size());
    fs::rename(tmp, path);
}

inline std::string read_file_text(const fs::path& path) {
    auto b = read_file_bytes(path);
    return std::string(b.begin(), b.end());
}

inline bool is_gzip(const std::vector<uint8_t>& bytes) {
    return bytes.size() >= 2 && bytes[0] == 0x1f && bytes[1] == 0x8b;
}

inline std::vector<uint8_t> gzip_deflate(const std::vector<uint8_t>& in) {
    z_stream zs{};
    if (deflateInit2(&zs, Z_DEFAULT_COMPRESSION, Z_DEFLATED, 15 + 16, 8, Z_DEFAULT_STRATEGY) != Z_OK)
        throw FormatError("zlib: deflateInit failed");
    std::vector<uint8_t> out;
    std::vector<uint8_t> buf(1 << 16);
    zs.next_in = const_cast<Bytef*>(in.data());
    zs.avail_in = uInt(in.size());
    int ret = Z_OK;
    do {
        zs.next_out = buf.data();
        zs.avail_out = uInt(buf.size());
        ret = deflate(&zs, Z_FINISH);
        out.insert(out.end(), buf.data(), buf.data() + (buf.size() - zs.avail_out));
    } while (ret == Z_OK);
    deflateEnd(&zs);
    if (ret != Z_STREAM_END) throw FormatError("zlib: deflate failed");
    return out;
}

inline std::vector<uint8_t> gzip_inflate(const std::vector<uint8_t>& in) {
    z_stream zs{};
    if (inflateInit2(&zs, 15 + 32) != Z_OK)  // accept zlib or gzip headers
        throw FormatError("zlib: inflateInit failed");
    std::vector<uint8_t> out;
    out.reserve(in.size() * 4);
    std::vector<uint8_t> buf(1 << 16);
    zs.next_in = const_cast<Bytef*>(in.data());
    zs.avail_in = uInt(in.size());
    int ret = Z_OK;
    while (ret != Z_STREAM_END) {
        zs.next_out = buf.data();
        zs.avail_out = uInt(buf.size());
        ret = inflate(&zs, Z_NO_FLUSH);
        if (ret != Z_OK && ret != Z_STREAM_END) {
            inflateEnd(&zs);
            throw FormatError("zlib: corrupt compressed stream");
        }
        out.insert(out.end(), buf.data(), buf.data() + (buf.size() - zs.avail_out));
    }
    inflateEnd(&zs);
    return out;
}

// ---------------------------------------------------------------------------
// Named-array container. One file holds any number of named numeric arrays;
// checkpoints and dataset exports both use it.
// ---------------------------------------------------------------------------

enum class ArrayDType : uint8_t { f32 = 0, f64 = 1, u8 = 2, i64 = 3 };

struct NamedArray {
    ArrayDType dtype = ArrayDType::f32;
    std::vector<int64_t> dims;
    std::vector<uint8_t> bytes;

    int64_t numel() const {
        int64_t n = 1;
        for (auto d : dims) n *= d;
        return n;
    }

    static size_t dtype_size(ArrayDType t) {
        switch (t) {
            case ArrayDType::f32: return 4;
            case ArrayDType::f64: return 8;
            case ArrayDType::u8: return 1;
            case ArrayDType::i64: return 8;
        }
        return 0;
    }

    template <typename T>
    static NamedArray from_vector(const std::vector<T>& v, std::vector<int64_t> dims);

    template <typename T>
    std::vector<T> to_vector() const;
};

template <>
inline NamedArray NamedArray::from_vector<float>(const std::vector<float>& v,
                                                 std::vector<int64_t> dims) {
    NamedArray a;
    a.dtype = ArrayDType::f32;
    a.dims = std::move(dims);
    a.bytes.resize(v.size() * 4);
    std::memcpy(a.bytes.data(), v.data(), a.bytes.size());
    return a;
}

template <>
inline NamedArray NamedArray::from_vector<double>(const std::vector<double>& v,
                                                  std::vector<int64_t> dims) {
    NamedArray a;
    a.dtype = ArrayDType::f64;
    a.dims = std::move(dims);
    a.bytes.resize(v.size() * 8);
    std::memcpy(a.bytes.data(), v.data(), a.bytes.size());
    return a;
}

template <>
inline NamedArray NamedArray::from_vector<uint8_t>(const std::vector<uint8_t>& v,
                                                   std::vector<int64_t> dims) {
    NamedArray a;
    a.dtype = ArrayDType::u8;
    a.dims = std::move(dims);
    a.bytes = v;
    return a;
}

template <>
inline NamedArray NamedArray::from_vector<int64_t>(const std::vector<int64_t>& v,
                                                   std::vector<int64_t> dims) {
    NamedArray a;
    a.dtype = ArrayDType::i64;
    a.dims = std::move(dims);
    a.bytes.resize(v.size() * 8);
    std::memcpy(a.bytes.data(), v.data(), a.bytes.size());
    return a;
}

template <typename T>
std::vector<T> NamedArray::to_vector() const {
    if (dtype_size(dtype) != sizeof(T)) throw FormatError("array container: dtype size mismatch");
    std::vector<T> v(bytes.size() / sizeof(T));
    std::memcpy(v.data(), bytes.data(), bytes.size());
    return v;
}

class ArrayContainer {
public:
    // Insertion order is preserved; it defines the serialized order.
    void put(const std::string& name, NamedArray a) {
        if (index_.count(name)) throw FormatError("array container: duplicate name " + name);
        index_[name] = order_.size();
        order_.push_back({name, std::move(a)});
    }

    bool has(const std::string& name) const { return index_.count(name) > 0; }

    const NamedArray& get(const std::string& name) const {
        auto it = index_.find(name);
        if (it == index_.end()) throw FormatError("array container: missing array " + name);
        return order_[it->second].second;
    }

    const std::vector<std::pair<std::string, NamedArray>>& entries() const { return order_; }

    void save(const fs::path& path) const {
        std::vector<uint8_t> out;
        auto put_raw = [&](const void* p, size_t n) {
            const auto* b = static_cast<const uint8_t*>(p);
            out.insert(out.end(), b, b + n);
        };
        const char magic[8] = {'C', 'F', 'A', 'X', 'A', 'R', 'R', '1'};
        put_raw(magic, 8);
        uint32_t n = uint32_t(order_.size());
        put_raw(&n, 4);
        for (const auto& [name, a] : order_) {
            uint16_t len = uint16_t(name.size());
            put_raw(&len, 2);
            put_raw(name.data(), name.size());
            uint8_t dt = uint8_t(a.dtype);
            put_raw(&dt, 1);
            uint8_t nd = uint8_t(a.dims.size());
            put_raw(&nd, 1);
            for (int64_t d : a.dims) put_raw(&d, 8);
            put_raw(a.bytes.data(), a.bytes.size());
        }
        write_file_bytes(path, out.data(), out.size());
    }

    static ArrayContainer load(const fs::path& path) {
        auto bytes = read_file_bytes(path);
        size_t pos = 0;
        auto take = [&](void* p, size_t n) {
            if (pos + n > bytes.size()) throw FormatError("array container: truncated file");
            std::memcpy(p, bytes.data() + pos, n);
            pos += n;
        };
        char magic[8];
        take(magic, 8);
        if (std::memcmp(magic, "CFAXARR1", 8) != 0)
            throw FormatError("array container: bad magic in " + path.string());
        uint32_t n = 0;
        take(&n, 4);
        ArrayContainer c;
        for (uint32_t i = 0; i < n; ++i) {
            uint16_t len = 0;
            take(&len, 2);
            std::string name(len, '\0');
            take(name.data(), len);
            uint8_t dt = 0, nd = 0;
            take(&dt, 1);
            take(&nd, 1);
            NamedArray a;
            a.dtype = ArrayDType(dt);
            a.dims.resize(nd);
            for (auto& d : a.dims) take(&d, 8);
            size_t nbytes = size_t(a.numel()) * NamedArray::dtype_size(a.dtype);
            a.bytes.resize(nbytes);
            take(a.bytes.data(), nbytes);
            c.put(name, std::move(a));
        }
        return c;
    }

    uint64_t content_hash() const {
        uint64_t h = 0xcbf29ce484222325ull;
        for (const auto& [name, a] : order_) {
            h = fnv1a64(name, h);
            h = fnv1a64(a.bytes.data(), a.bytes.size(), h);
        }
        return h;
    }

private:
    std::vector<std::pair<std::string, NamedArray>> order_;
    std::map<std::string, size_t> index_;
};

// ---------------------------------------------------------------------------
// PGM (P5) and a minimal PNG reader
// ---------------------------------------------------------------------------

struct GrayImage8 {
    int height = 0, width = 0;
    std::vector<uint8_t> pixels;  // row-major
};

inline void write_pgm(const fs::path& path, const GrayImage8& img) {
    std::string header = "P5\n" + std::to_string(img.width) + " " + std::to_string(img.height) +
                         "\n255\n";
    std::vector<uint8_t> out(header.begin(), header.end());
    out.insert(out.end(), img.pixels.begin(), img.pixels.end());
    write_file_bytes(path, out.data(), out.size());
}

inline GrayImage8 read_pgm(const fs::path& path) {
    auto bytes = read_file_bytes(path);
    size_t pos = 0;
    auto token = [&]() -> std::string {
        while (pos < bytes.size()) {
            if (std::isspace(bytes[pos])) {
                ++pos;
            } else if (bytes[pos] == '#') {
                while (pos < bytes.size() && bytes[pos] != '\n') ++pos;
            } else {
                break;
            }
        }
        size_t start = pos;
        while (pos < bytes.size() && !std::isspace(bytes[pos])) ++pos;
        return std::string(bytes.begin() + std::ptrdiff_t(start), bytes.begin() + std::ptrdiff_t(pos));
    };
    if (token() != "P5") throw FormatError("not a P5 PGM file: " + path.string());
    GrayImage8 img;
    img.width = std::stoi(token());
    img.height = std::stoi(token());
    int maxval = std::stoi(token());
    if (maxval != 255) throw FormatError("PGM maxval must be 255: " + path.string());
    ++pos;  // single whitespace after header
    size_t need = size_t(img.width) * size_t(img.height);
    if (bytes.size() - pos < need) throw FormatError("PGM payload truncated: " + path.string());
    img.pixels.assign(bytes.begin() + std::ptrdiff_t(pos),
                      bytes.begin() + std::ptrdiff_t(pos + need));
    return img;
}

/// 8-bit non-interlaced PNG: grayscale directly, color reduced to luma.
inline GrayImage8 read_png(const fs::path& path) {
    auto bytes = read_file_bytes(path);
    static const uint8_t sig[8] = {137, 80, 78, 71, 13, 10, 26, 10};
    if (bytes.size() < 8 || std::memcmp(bytes.data(), sig, 8) != 0)
        throw FormatError("not a PNG file: " + path.string());

    auto be32 = [&](size_t p) {
        return (uint32_t(bytes[p]) << 24) | (uint32_t(bytes[p + 1]) << 16) |
               (uint32_t(bytes[p + 2]) << 8) | uint32_t(bytes[p + 3]);
    };

    uint32_t width = 0, height = 0;
    int bit_depth = 0, color_type = 0, interlace = 0;
    std::vector<uint8_t> idat;
    size_t pos = 8;
    while (pos + 8 <= bytes.size()) {
        uint32_t len = be32(pos);
        std::string type(bytes.begin() + std::ptrdiff_t(pos + 4),
                         bytes.begin() + std::ptrdiff_t(pos + 8));
        size_t data = pos + 8;
        if (data + len > bytes.size()) throw FormatError("PNG chunk truncated: " + path.string());
        if (type == "IHDR") {
            width = be32(data);
            height = be32(data + 4);
            bit_depth = bytes[data + 8];
            color_type = bytes[data + 9];
            interlace = bytes[data + 12];
        } else if (type == "IDAT") {
            idat.insert(idat.end(), bytes.begin() + std::ptrdiff_t(data),
                        bytes.begin() + std::ptrdiff_t(data + len));
        } else if (type == "IEND") {
            break;
        }
        pos = data + len + 4;  // skip CRC
    }
    if (width == 0 || height == 0) throw FormatError("PNG missing IHDR: " + path.string());
    if (bit_depth != 8) throw FormatError("PNG reader supports 8-bit depth only: " + path.string());
    if (interlace != 0) throw FormatError("PNG reader supports non-interlaced only: " + path.string());
    int channels;
    switch (color_type) {
        case 0: channels = 1; break;
        case 2: channels = 3; break;
        case 4: channels = 2; break;
        case 6: channels = 4; break;
        default: throw FormatError("PNG unsupported color type: " + path.string());
    }

    auto raw = gzip_inflate(idat);
    size_t stride = size_t(width) * size_t(channels);
    if (raw.size() < (stride + 1) * height) throw FormatError("PNG payload truncated: " + path.string());

    // Undo per-scanline filters.
    std::vector<uint8_t> img(stride * height);
    int bpp = channels;
    for (uint32_t y = 0; y < height; ++y) {
        uint8_t filter = raw[(stride + 1) * y];
        const uint8_t* src = raw.data() + (stride + 1) * y + 1;
        uint8_t* dst = img.data() + stride * y;
        const uint8_t* up = y > 0 ? img.data() + stride * (y - 1) : nullptr;
        for (size_t x = 0; x < stride; ++x) {
            int a = x >= size_t(bpp) ? dst[x - size_t(bpp)] : 0;
            int b = up ? up[x] : 0;
            int c = (up && x >= size_t(bpp)) ? up[x - size_t(bpp)] : 0;
            int v = src[x];
            switch (filter) {
                case 0: break;
                case 1: v += a; break;
                case 2: v += b; break;
                case 3: v += (a + b) / 2; break;
                case 4: {
                    int p = a + b - c;
                    int pa = std::abs(p - a), pb = std::abs(p - b), pc = std::abs(p - c);
                    v += (pa <= pb && pa <= pc) ? a : (pb <= pc ? b : c);
                    break;
                }
                default: throw FormatError("PNG bad filter type: " + path.string());
            }
            dst[x] = uint8_t(v & 0xff);
        }
    }

    GrayImage8 out;
    out.width = int(width);
    out.height = int(height);
    out.pixels.resize(size_t(width) * height);
    for (size_t i = 0; i < out.pixels.size(); ++i) {
        const uint8_t* px = img.data() + i * size_t(channels);
        if (channels == 1 || channels == 2) {
            out.pixels[i] = px[0];
        } else {
            out.pixels[i] = uint8_t((77 * px[0] + 150 * px[1] + 29 * px[2] + 128) >> 8);
        }
    }
    return out;
}

}  // namespace counterfax
