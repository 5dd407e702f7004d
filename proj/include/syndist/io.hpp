#pragma once

#include <png.h>

#include <algorithm>
#include <array>
#include <bit>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "grid.hpp"
#include "layers.hpp"

namespace syndist {

namespace fs = std::filesystem;

// ---------------------------------------------------------- atomic write

/// Write `bytes` to `path` through a sibling temporary file and a rename, so
/// readers never observe a partial file.
inline void write_file_atomic(const fs::path& path, const std::string& bytes) {
    if (path.has_parent_path()) fs::create_directories(path.parent_path());
    fs::path tmp = path;
    tmp += ".tmp";
    {
        std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
        if (!out) throw Error(ErrorKind::Io, "cannot open " + tmp.string() + " for writing");
        out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
        if (!out) throw Error(ErrorKind::Io, "short write to " + tmp.string());
    }
    std::error_code ec;
    fs::rename(tmp, path, ec);
    if (ec) throw Error(ErrorKind::Io, "rename to " + path.string() + " failed: " + ec.message());
}

inline std::string read_file(const fs::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw Error(ErrorKind::Io, "cannot open " + path.string());
    std::ostringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

// ------------------------------------------------------------------- PNG

namespace detail {

struct PngBuffer {
    std::string bytes;
    static void write(png_structp png, png_bytep data, png_size_t len) {
        auto* self = static_cast<PngBuffer*>(png_get_io_ptr(png));
        self->bytes.append(reinterpret_cast<const char*>(data), len);
    }
    static void flush(png_structp) {}
};

struct PngReader {
    const std::string* bytes;
    std::size_t pos = 0;
    static void read(png_structp png, png_bytep out, png_size_t len) {
        auto* self = static_cast<PngReader*>(png_get_io_ptr(png));
        if (self->pos + len > self->bytes->size()) png_error(png, "truncated PNG");
        std::memcpy(out, self->bytes->data() + self->pos, len);
        self->pos += len;
    }
};

[[noreturn]] inline void png_fail(png_structp, png_const_charp msg) { throw Error(ErrorKind::Io, std::string("png: ") + msg); }
inline void png_warn(png_structp, png_const_charp) {}

inline std::uint8_t to_byte(double v) {
    return static_cast<std::uint8_t>(std::lround(std::clamp(v, 0.0, 1.0) * 255.0));
}

}  // namespace detail

/// 8-bit PNG encoding of an image with 1 (gray) or 3 (RGB) channels.
inline std::string encode_png(const Image& img) {
    if (img.channels() != 1 && img.channels() != 3) {
        throw Error(ErrorKind::InvalidArgument, "png: images must have 1 or 3 channels");
    }
    png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, detail::png_fail, detail::png_warn);
    png_infop info = png_create_info_struct(png);
    detail::PngBuffer buf;
    std::vector<std::uint8_t> row(static_cast<std::size_t>(img.width()) * img.channels());
    try {
        png_set_write_fn(png, &buf, detail::PngBuffer::write, detail::PngBuffer::flush);
        png_set_IHDR(png, info, img.width(), img.height(), 8,
                     img.channels() == 1 ? PNG_COLOR_TYPE_GRAY : PNG_COLOR_TYPE_RGB, PNG_INTERLACE_NONE,
                     PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
        png_write_info(png, info);
        for (int y = 0; y < img.height(); ++y) {
            for (int x = 0; x < img.width(); ++x)
                for (int c = 0; c < img.channels(); ++c) row[x * img.channels() + c] = detail::to_byte(img(y, x, c));
            png_write_row(png, row.data());
        }
        png_write_end(png, nullptr);
    } catch (...) {
        png_destroy_write_struct(&png, &info);
        throw;
    }
    png_destroy_write_struct(&png, &info);
    return buf.bytes;
}

inline Image decode_png(const std::string& bytes) {
    if (bytes.size() < 8 || png_sig_cmp(reinterpret_cast<png_const_bytep>(bytes.data()), 0, 8) != 0) {
        throw Error(ErrorKind::Io, "png: bad signature");
    }
    png_structp png = png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr, detail::png_fail, detail::png_warn);
    png_infop info = png_create_info_struct(png);
    detail::PngReader reader{&bytes};
    Image out;
    try {
        png_set_read_fn(png, &reader, detail::PngReader::read);
        png_read_info(png, info);
        png_set_strip_16(png);
        png_set_strip_alpha(png);
        png_set_packing(png);
        png_set_expand(png);
        png_read_update_info(png, info);
        const int w = static_cast<int>(png_get_image_width(png, info));
        const int h = static_cast<int>(png_get_image_height(png, info));
        const int color = png_get_color_type(png, info);
        const int ch = (color == PNG_COLOR_TYPE_GRAY) ? 1 : 3;
        const std::size_t rowbytes = png_get_rowbytes(png, info);
        std::vector<std::uint8_t> row(rowbytes);
        out = Image(h, w, ch);
        for (int y = 0; y < h; ++y) {
            png_read_row(png, row.data(), nullptr);
            for (int x = 0; x < w; ++x)
                for (int c = 0; c < ch; ++c) out(y, x, c) = row[x * ch + c] / 255.0;
        }
    } catch (...) {
        png_destroy_read_struct(&png, &info, nullptr);
        throw;
    }
    png_destroy_read_struct(&png, &info, nullptr);
    return out;
}

inline void write_png(const fs::path& path, const Image& img) { write_file_atomic(path, encode_png(img)); }
inline Image read_png(const fs::path& path) { return decode_png(read_file(path)); }

// ------------------------------------------------------------------- PFM

namespace detail {
inline void put_f32_le(std::string& out, float v) {
    auto bits = std::bit_cast<std::uint32_t>(v);
    for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((bits >> (8 * i)) & 0xFF));
}
inline float get_f32(const unsigned char* p, bool little) {
    std::uint32_t bits = 0;
    for (int i = 0; i < 4; ++i) bits |= static_cast<std::uint32_t>(p[little ? i : 3 - i]) << (8 * i);
    return std::bit_cast<float>(bits);
}
}  // namespace detail

/// Portable float map: "Pf" (1 channel) or "PF" (3 channels), little-endian
/// (negative scale), rows stored bottom to top.
template <typename GridT>
std::string encode_pfm(const GridT& g) {
    if (g.channels() != 1 && g.channels() != 3) throw Error(ErrorKind::InvalidArgument, "pfm: 1 or 3 channels");
    std::string out = (g.channels() == 1 ? "Pf\n" : "PF\n") + std::to_string(g.width()) + " " +
                      std::to_string(g.height()) + "\n-1.0\n";
    for (int y = g.height() - 1; y >= 0; --y)
        for (int x = 0; x < g.width(); ++x)
            for (int c = 0; c < g.channels(); ++c) detail::put_f32_le(out, static_cast<float>(g(y, x, c)));
    return out;
}

template <typename GridT = DistanceMap>
GridT decode_pfm(const std::string& bytes) {
    std::istringstream in(bytes);
    std::string magic;
    int w = 0, h = 0;
    double scale = 0.0;
    in >> magic >> w >> h >> scale;
    if ((magic != "Pf" && magic != "PF") || w <= 0 || h <= 0 || scale == 0.0 || !in) {
        throw Error(ErrorKind::Io, "pfm: malformed header");
    }
    in.get();  // single whitespace byte after the scale
    const int ch = magic == "PF" ? 3 : 1;
    const auto offset = static_cast<std::size_t>(in.tellg());
    const std::size_t need = static_cast<std::size_t>(w) * h * ch * 4;
    if (bytes.size() < offset + need) throw Error(ErrorKind::Io, "pfm: truncated data");
    const auto* p = reinterpret_cast<const unsigned char*>(bytes.data() + offset);
    GridT out(h, w, ch);
    const bool little = scale < 0.0;
    for (int y = h - 1; y >= 0; --y)
        for (int x = 0; x < w; ++x)
            for (int c = 0; c < ch; ++c, p += 4) out(y, x, c) = detail::get_f32(p, little);
    return out;
}

template <typename GridT>
void write_pfm(const fs::path& path, const GridT& g) {
    write_file_atomic(path, encode_pfm(g));
}

template <typename GridT = DistanceMap>
GridT read_pfm(const fs::path& path) {
    return decode_pfm<GridT>(read_file(path));
}

// -------------------------------------------------------- parameter blobs

/// Flat parameter file: 8-byte little-endian header length, a JSON header
/// {"tensors": [{"name", "shape"}...], "meta": {...}}, then the tensors as
/// consecutive little-endian float32 arrays in header order.
struct ParamBlob {
    struct Tensor {
        std::string name;
        std::vector<std::size_t> shape;
        std::vector<double> values;
    };
    std::vector<Tensor> tensors;
    nlohmann::json meta = nlohmann::json::object();

    const Tensor& get(const std::string& name) const {
        for (const auto& t : tensors)
            if (t.name == name) return t;
        throw Error(ErrorKind::InvalidArgument, "param blob: missing tensor '" + name + "'");
    }
};

inline std::string encode_blob(const ParamBlob& blob) {
    nlohmann::json header;
    header["tensors"] = nlohmann::json::array();
    for (const auto& t : blob.tensors) {
        std::size_t n = 1;
        for (auto d : t.shape) n *= d;
        if (n != t.values.size()) throw Error(ErrorKind::InvalidArgument, "param blob: shape/data mismatch in " + t.name);
        header["tensors"].push_back({{"name", t.name}, {"shape", t.shape}});
    }
    header["meta"] = blob.meta;
    const std::string h = header.dump();
    std::string out;
    const auto len = static_cast<std::uint64_t>(h.size());
    for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((len >> (8 * i)) & 0xFF));
    out += h;
    for (const auto& t : blob.tensors)
        for (double v : t.values) detail::put_f32_le(out, static_cast<float>(v));
    return out;
}

inline ParamBlob decode_blob(const std::string& bytes) {
    if (bytes.size() < 8) throw Error(ErrorKind::Io, "param blob: truncated header length");
    std::uint64_t len = 0;
    for (int i = 0; i < 8; ++i) len |= static_cast<std::uint64_t>(static_cast<unsigned char>(bytes[i])) << (8 * i);
    if (bytes.size() < 8 + len) throw Error(ErrorKind::Io, "param blob: truncated header");
    nlohmann::json header;
    try {
        header = nlohmann::json::parse(bytes.substr(8, len));
    } catch (const nlohmann::json::exception& e) {
        throw Error(ErrorKind::Io, std::string("param blob: bad header: ") + e.what());
    }
    ParamBlob blob;
    blob.meta = header.value("meta", nlohmann::json::object());
    std::size_t pos = 8 + len;
    for (const auto& t : header.at("tensors")) {
        ParamBlob::Tensor tensor{t.at("name").get<std::string>(), t.at("shape").get<std::vector<std::size_t>>(), {}};
        std::size_t n = 1;
        for (auto d : tensor.shape) n *= d;
        if (bytes.size() < pos + 4 * n) throw Error(ErrorKind::Io, "param blob: truncated data for " + tensor.name);
        const auto* p = reinterpret_cast<const unsigned char*>(bytes.data() + pos);
        tensor.values.resize(n);
        for (std::size_t i = 0; i < n; ++i) tensor.values[i] = detail::get_f32(p + 4 * i, true);
        pos += 4 * n;
        blob.tensors.push_back(std::move(tensor));
    }
    return blob;
}

namespace detail {
inline ParamBlob::Tensor matrix_tensor(const std::string& name, const Eigen::MatrixXd& m) {
    ParamBlob::Tensor t{name, {static_cast<std::size_t>(m.rows()), static_cast<std::size_t>(m.cols())}, {}};
    for (int r = 0; r < m.rows(); ++r)
        for (int c = 0; c < m.cols(); ++c) t.values.push_back(m(r, c));
    return t;
}
inline Eigen::MatrixXd tensor_matrix(const ParamBlob::Tensor& t) {
    if (t.shape.size() != 2) throw Error(ErrorKind::InvalidArgument, "param blob: " + t.name + " must be 2-D");
    Eigen::MatrixXd m(t.shape[0], t.shape[1]);
    for (std::size_t r = 0; r < t.shape[0]; ++r)
        for (std::size_t c = 0; c < t.shape[1]; ++c) m(r, c) = t.values[r * t.shape[1] + c];
    return m;
}
}  // namespace detail

inline ParamBlob to_blob(const AttentionParams& p) {
    ParamBlob b;
    b.meta = {{"kind", "attention"}, {"k", p.k}};
    b.tensors = {detail::matrix_tensor("w_query", p.w_query), detail::matrix_tensor("w_key", p.w_key),
                 detail::matrix_tensor("w_value", p.w_value), detail::matrix_tensor("row_embed", p.row_embed),
                 detail::matrix_tensor("col_embed", p.col_embed)};
    return b;
}

inline AttentionParams attention_from_blob(const ParamBlob& b) {
    if (b.meta.value("kind", "") != "attention") throw Error(ErrorKind::InvalidArgument, "param blob: not attention");
    AttentionParams p;
    p.k = b.meta.at("k").get<int>();
    p.w_query = detail::tensor_matrix(b.get("w_query"));
    p.w_key = detail::tensor_matrix(b.get("w_key"));
    p.w_value = detail::tensor_matrix(b.get("w_value"));
    p.row_embed = detail::tensor_matrix(b.get("row_embed"));
    p.col_embed = detail::tensor_matrix(b.get("col_embed"));
    p.validate();
    return p;
}

inline ParamBlob to_blob(const PacParams& p) {
    ParamBlob b;
    b.meta = {{"kind", "pac"}, {"k", p.k}, {"d_in", p.d_in}, {"d_out", p.d_out}};
    b.tensors = {{"weights",
                  {static_cast<std::size_t>(p.k), static_cast<std::size_t>(p.k), static_cast<std::size_t>(p.d_out),
                   static_cast<std::size_t>(p.d_in)},
                  p.weights},
                 {"bias", {static_cast<std::size_t>(p.d_out)}, p.bias},
                 {"sigma", {static_cast<std::size_t>(p.d_out)}, p.sigma}};
    return b;
}

inline PacParams pac_from_blob(const ParamBlob& b) {
    if (b.meta.value("kind", "") != "pac") throw Error(ErrorKind::InvalidArgument, "param blob: not pac");
    PacParams p;
    p.k = b.meta.at("k").get<int>();
    p.d_in = b.meta.at("d_in").get<int>();
    p.d_out = b.meta.at("d_out").get<int>();
    p.weights = b.get("weights").values;
    p.bias = b.get("bias").values;
    p.sigma = b.get("sigma").values;
    p.validate();
    return p;
}

inline void write_blob(const fs::path& path, const ParamBlob& b) { write_file_atomic(path, encode_blob(b)); }
inline ParamBlob read_blob(const fs::path& path) { return decode_blob(read_file(path)); }

// ------------------------------------------------------- visualization

/// Piecewise-linear blue-to-yellow ramp for scalar maps scaled to [lo, hi].
template <typename Tag>
Image colorize(const Grid<double, Tag>& m, double lo, double hi) {
    static constexpr std::array<std::array<double, 3>, 5> stops{{
        {0.05, 0.03, 0.33}, {0.23, 0.32, 0.55}, {0.13, 0.57, 0.55}, {0.37, 0.79, 0.38}, {0.99, 0.91, 0.14}}};
    Image out(m.height(), m.width(), 3);
    const double span = hi > lo ? hi - lo : 1.0;
    for (int y = 0; y < m.height(); ++y)
        for (int x = 0; x < m.width(); ++x) {
            const double t = std::clamp((m(y, x) - lo) / span, 0.0, 1.0) * (stops.size() - 1);
            const auto i = std::min(static_cast<std::size_t>(t), stops.size() - 2);
            const double f = t - i;
            for (int c = 0; c < 3; ++c) out(y, x, c) = (1 - f) * stops[i][c] + f * stops[i + 1][c];
        }
    return out;
}

/// Grayscale image tinted red where `mask` is zero.
inline Image overlay_mask(const Image& img, const Mask& mask) {
    Image out(img.height(), img.width(), 3);
    for (int y = 0; y < img.height(); ++y)
        for (int x = 0; x < img.width(); ++x) {
            double g = 0.0;
            for (int c = 0; c < img.channels(); ++c) g += img(y, x, c);
            g /= img.channels();
            if (mask(y, x)) {
                for (int c = 0; c < 3; ++c) out(y, x, c) = g;
            } else {
                out(y, x, 0) = 0.5 + 0.5 * g;
                out(y, x, 1) = 0.3 * g;
                out(y, x, 2) = 0.3 * g;
            }
        }
    return out;
}

/// Panels stacked vertically with a 2-pixel gap (all converted to RGB).
inline Image stack_panels(const std::vector<Image>& panels) {
    if (panels.empty()) throw Error(ErrorKind::InvalidArgument, "stack_panels: nothing to stack");
    int w = 0, h = 0;
    for (const auto& p : panels) {
        w = std::max(w, p.width());
        h += p.height() + 2;
    }
    Image out(h - 2, w, 3, 1.0);
    int y0 = 0;
    for (const auto& p : panels) {
        for (int y = 0; y < p.height(); ++y)
            for (int x = 0; x < p.width(); ++x)
                for (int c = 0; c < 3; ++c) out(y0 + y, x, c) = p(y, x, p.channels() == 3 ? c : 0);
        y0 += p.height() + 2;
    }
    return out;
}

}  // namespace syndist
