#pragma once

// Plumbing: the .vten tensor file format, synthetic test scenes, binary PPM
// frame export/import, and a flat key = value config reader.

#include <cmath>
#include <cstdint>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "apla/tensor.hpp"

namespace apla {

// ---------------------------------------------------------------- .vten ----
// Layout: "VTEN" magic, u16 version, u16 rank, u32 extent per axis, then
// row-major little-endian f32 payload. Always stored as 32-bit floats.

constexpr uint16_t vten_version = 1;

namespace detail {
inline void put_u16(std::ostream& os, uint16_t v) {
    unsigned char b[2] = {(unsigned char)(v & 0xff), (unsigned char)(v >> 8)};
    os.write(reinterpret_cast<const char*>(b), 2);
}
inline void put_u32(std::ostream& os, uint32_t v) {
    unsigned char b[4] = {(unsigned char)(v & 0xff), (unsigned char)((v >> 8) & 0xff),
                          (unsigned char)((v >> 16) & 0xff), (unsigned char)(v >> 24)};
    os.write(reinterpret_cast<const char*>(b), 4);
}
inline uint16_t get_u16(std::istream& is) {
    unsigned char b[2];
    is.read(reinterpret_cast<char*>(b), 2);
    return uint16_t(b[0] | (uint16_t(b[1]) << 8));
}
inline uint32_t get_u32(std::istream& is) {
    unsigned char b[4];
    is.read(reinterpret_cast<char*>(b), 4);
    return uint32_t(b[0]) | (uint32_t(b[1]) << 8) | (uint32_t(b[2]) << 16) |
           (uint32_t(b[3]) << 24);
}
inline void put_f32(std::ostream& os, float v) {
    uint32_t bits;
    static_assert(sizeof(bits) == sizeof(v));
    std::memcpy(&bits, &v, 4);
    put_u32(os, bits);
}
inline float get_f32(std::istream& is) {
    uint32_t bits = get_u32(is);
    float v;
    std::memcpy(&v, &bits, 4);
    return v;
}
}  // namespace detail

template <typename S>
void write_vten(std::ostream& os, const Tensor<S>& t) {
    os.write("VTEN", 4);
    detail::put_u16(os, vten_version);
    detail::put_u16(os, uint16_t(t.rank()));
    for (int64_t a = 0; a < t.rank(); ++a) detail::put_u32(os, uint32_t(t.extent(a)));
    for (int64_t i = 0; i < t.numel(); ++i) detail::put_f32(os, float(t[i]));
    if (!os) throw FormatError("short write while saving tensor");
}

template <typename S>
void write_vten(const std::string& path, const Tensor<S>& t) {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw FormatError("cannot open for writing: " + path);
    write_vten(os, t);
    if (!os) throw FormatError("write failed: " + path);
}

template <typename S>
Tensor<S> read_vten(std::istream& is, const std::string& context = "<stream>") {
    char magic[4] = {};
    is.read(magic, 4);
    if (!is || std::string(magic, 4) != "VTEN")
        throw FormatError("bad tensor file magic in " + context);
    uint16_t version = detail::get_u16(is);
    if (version != vten_version)
        throw FormatError("unsupported tensor file version " + std::to_string(version) + " in " +
                          context);
    uint16_t rank = detail::get_u16(is);
    if (!is || rank > 8) throw FormatError("implausible tensor rank in " + context);
    Shape shape;
    int64_t n = 1;
    for (uint16_t a = 0; a < rank; ++a) {
        uint32_t e = detail::get_u32(is);
        shape.push_back(int64_t(e));
        n *= int64_t(e);
    }
    if (!is) throw FormatError("truncated tensor header in " + context);
    Tensor<S> t(shape);
    for (int64_t i = 0; i < n; ++i) t[i] = S(detail::get_f32(is));
    if (!is) throw FormatError("truncated tensor payload in " + context);
    return t;
}

template <typename S>
Tensor<S> read_vten(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw FormatError("cannot open for reading: " + path);
    return read_vten<S>(is, path);
}

// ------------------------------------------------------- synthetic scenes ----
// Single-channel videos in [0, 1]. moving_square translates toroidally so
// frame f is exactly frame 0 shifted f times; bouncing_ball reflects at the
// borders so the object stays in frame; static repeats frame 0.

enum class SceneKind { moving_square, bouncing_ball, static_scene };

inline SceneKind scene_kind_from(const std::string& name) {
    if (name == "moving_square") return SceneKind::moving_square;
    if (name == "bouncing_ball") return SceneKind::bouncing_ball;
    if (name == "static") return SceneKind::static_scene;
    throw ConfigError("unknown scene kind: " + name);
}

struct SceneSpec {
    SceneKind kind = SceneKind::moving_square;
    int64_t frames = 8;
    int64_t height = 32;
    int64_t width = 32;
    int64_t size = 8;  // object edge length / ball diameter
    int64_t vel_y = 0;
    int64_t vel_x = 1;
    uint64_t seed = 1;
};

template <typename S>
Tensor<S> gen_video(const SceneSpec& spec) {
    if (spec.frames < 1 || spec.height < 1 || spec.width < 1 || spec.size < 1)
        throw ConfigError("scene dimensions must be positive");
    if (spec.size > spec.height || spec.size > spec.width)
        throw ConfigError("scene object does not fit the frame");

    Rng rng(spec.seed);
    int64_t F = spec.frames, H = spec.height, W = spec.width;
    Tensor<S> vid(Shape{F, 1, H, W}, S(0));
    auto px = [&](int64_t f, int64_t y, int64_t x) -> S& { return vid[(f * H + y) * W + x]; };
    double bright = 0.7 + 0.3 * rng.uniform();
    double backdrop = 0.1 * rng.uniform();
    for (int64_t i = 0; i < vid.numel(); ++i) vid[i] = S(backdrop);

    if (spec.kind == SceneKind::moving_square || spec.kind == SceneKind::static_scene) {
        int64_t y0 = rng.uniform_int(0, H - spec.size);
        int64_t x0 = rng.uniform_int(0, W - spec.size);
        for (int64_t f = 0; f < F; ++f) {
            int64_t shift_y = spec.kind == SceneKind::static_scene ? 0 : f * spec.vel_y;
            int64_t shift_x = spec.kind == SceneKind::static_scene ? 0 : f * spec.vel_x;
            for (int64_t dy = 0; dy < spec.size; ++dy)
                for (int64_t dx = 0; dx < spec.size; ++dx) {
                    int64_t y = ((y0 + dy + shift_y) % H + H) % H;
                    int64_t x = ((x0 + dx + shift_x) % W + W) % W;
                    px(f, y, x) = S(bright);
                }
        }
        return vid;
    }

    // Bouncing ball: reflect the center's velocity so the disk never leaves
    // the frame. Radius r, center constrained to [r, H-1-r] x [r, W-1-r].
    int64_t r = spec.size / 2;
    if (2 * r + 1 > spec.height || 2 * r + 1 > spec.width)
        throw ConfigError("scene object does not fit the frame");
    int64_t cy = rng.uniform_int(r, H - 1 - r);
    int64_t cx = rng.uniform_int(r, W - 1 - r);
    int64_t vy = spec.vel_y, vx = spec.vel_x;
    for (int64_t f = 0; f < F; ++f) {
        for (int64_t y = cy - r; y <= cy + r; ++y)
            for (int64_t x = cx - r; x <= cx + r; ++x)
                if ((y - cy) * (y - cy) + (x - cx) * (x - cx) <= r * r) px(f, y, x) = S(bright);
        int64_t ny = cy + vy, nx = cx + vx;
        if (ny < r || ny > H - 1 - r) {
            vy = -vy;
            ny = cy + vy;
        }
        if (nx < r || nx > W - 1 - r) {
            vx = -vx;
            nx = cx + vx;
        }
        cy = std::min(std::max(ny, r), H - 1 - r);
        cx = std::min(std::max(nx, r), W - 1 - r);
    }
    return vid;
}

// ------------------------------------------------------------------ PPM ----

// video: (F, c, H, W) with c = 1 (replicated to gray RGB) or 3; values must
// lie in [0, 1]. Writes dir/frame_0000.ppm ... one binary P6 file per frame.
template <typename S>
std::vector<std::string> export_frames(const Tensor<S>& video, const std::string& dir) {
    if (video.rank() != 4)
        throw DimError("export expects a (F, c, H, W) video, got " + shape_str(video.shape()));
    int64_t F = video.extent(0), c = video.extent(1), H = video.extent(2), W = video.extent(3);
    if (c != 1 && c != 3) throw ConfigError("PPM export needs 1 or 3 channels");
    for (int64_t i = 0; i < video.numel(); ++i)
        if (double(video[i]) < 0.0 || double(video[i]) > 1.0)
            throw ContractError("PPM export values must lie in [0, 1]");

    std::vector<std::string> paths;
    for (int64_t f = 0; f < F; ++f) {
        char name[32];
        std::snprintf(name, sizeof name, "frame_%04lld.ppm", (long long)f);
        std::string path = dir + "/" + name;
        std::ofstream os(path, std::ios::binary);
        if (!os) throw FormatError("cannot open for writing: " + path);
        os << "P6\n" << W << " " << H << "\n255\n";
        for (int64_t y = 0; y < H; ++y)
            for (int64_t x = 0; x < W; ++x)
                for (int64_t ch = 0; ch < 3; ++ch) {
                    int64_t src = c == 1 ? 0 : ch;
                    double v = double(video[((f * c + src) * H + y) * W + x]);
                    int q = int(std::lround(v * 255.0));
                    os.put(char((unsigned char)(q < 0 ? 0 : (q > 255 ? 255 : q))));
                }
        if (!os) throw FormatError("write failed: " + path);
        paths.push_back(path);
    }
    return paths;
}

// Reads one binary P6 file back as (3, H, W) in [0, 1].
template <typename S>
Tensor<S> import_ppm(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw FormatError("cannot open for reading: " + path);
    std::string magic;
    is >> magic;
    if (magic != "P6") throw FormatError("not a binary PPM file: " + path);
    auto next_int = [&]() {
        // Skip whitespace and '#' comment lines between header fields.
        for (;;) {
            int ch = is.peek();
            if (ch == std::char_traits<char>::eof()) {
                break;
            } else if (ch == '#') {
                std::string junk;
                std::getline(is, junk);
            } else if (std::isspace(ch)) {
                is.get();
            } else {
                break;
            }
        }
        int64_t v = -1;
        is >> v;
        if (!is || v <= 0) throw FormatError("bad PPM header in " + path);
        return v;
    };
    int64_t W = next_int(), H = next_int(), maxval = next_int();
    if (maxval != 255) throw FormatError("unsupported PPM max value in " + path);
    is.get();  // single whitespace byte after the header
    Tensor<S> out(Shape{3, H, W});
    std::vector<char> row(size_t(W * 3));
    for (int64_t y = 0; y < H; ++y) {
        is.read(row.data(), std::streamsize(row.size()));
        if (!is) throw FormatError("truncated PPM payload in " + path);
        for (int64_t x = 0; x < W; ++x)
            for (int64_t ch = 0; ch < 3; ++ch)
                out[(ch * H + y) * W + x] =
                    S(double((unsigned char)row[size_t(x * 3 + ch)]) / 255.0);
    }
    return out;
}

// ----------------------------------------------------------------- config ----
// Flat `key = value` lines; '#' starts a comment; blank lines ignored.

using ConfigMap = std::map<std::string, std::string>;

inline std::string trim(const std::string& s) {
    size_t a = s.find_first_not_of(" \t\r");
    if (a == std::string::npos) return "";
    size_t b = s.find_last_not_of(" \t\r");
    return s.substr(a, b - a + 1);
}

inline ConfigMap parse_config(std::istream& is) {
    ConfigMap m;
    std::string line;
    int64_t lineno = 0;
    while (std::getline(is, line)) {
        ++lineno;
        size_t hash = line.find('#');
        if (hash != std::string::npos) line = line.substr(0, hash);
        line = trim(line);
        if (line.empty()) continue;
        size_t eq = line.find('=');
        if (eq == std::string::npos)
            throw FormatError("config line " + std::to_string(lineno) + " lacks '=': " + line);
        std::string key = trim(line.substr(0, eq));
        std::string val = trim(line.substr(eq + 1));
        if (key.empty()) throw FormatError("config line " + std::to_string(lineno) + ": empty key");
        m[key] = val;
    }
    return m;
}

inline ConfigMap parse_config_file(const std::string& path) {
    std::ifstream is(path);
    if (!is) throw FormatError("cannot open config: " + path);
    return parse_config(is);
}

inline int64_t config_i64(const ConfigMap& m, const std::string& key, int64_t fallback) {
    auto it = m.find(key);
    if (it == m.end()) return fallback;
    try {
        size_t used = 0;
        int64_t v = std::stoll(it->second, &used);
        if (used != it->second.size()) throw std::invalid_argument(key);
        return v;
    } catch (const std::exception&) {
        throw FormatError("config key '" + key + "' is not an integer: " + it->second);
    }
}

inline double config_f64(const ConfigMap& m, const std::string& key, double fallback) {
    auto it = m.find(key);
    if (it == m.end()) return fallback;
    try {
        size_t used = 0;
        double v = std::stod(it->second, &used);
        if (used != it->second.size()) throw std::invalid_argument(key);
        return v;
    } catch (const std::exception&) {
        throw FormatError("config key '" + key + "' is not a number: " + it->second);
    }
}

inline std::string config_str(const ConfigMap& m, const std::string& key,
                              const std::string& fallback) {
    auto it = m.find(key);
    return it == m.end() ? fallback : it->second;
}

inline bool config_bool(const ConfigMap& m, const std::string& key, bool fallback) {
    auto it = m.find(key);
    if (it == m.end()) return fallback;
    if (it->second == "true" || it->second == "1") return true;
    if (it->second == "false" || it->second == "0") return false;
    throw FormatError("config key '" + key + "' is not a boolean: " + it->second);
}

}  // namespace apla
