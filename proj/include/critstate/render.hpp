#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>
#include <png.h>

namespace critstate {

inline constexpr int kFrameSize = 256;

struct Rgb {
    std::uint8_t r = 0, g = 0, b = 0;
};

inline Rgb rgb_from_json(const nlohmann::json& j) {
    return {j.at(0).get<std::uint8_t>(), j.at(1).get<std::uint8_t>(), j.at(2).get<std::uint8_t>()};
}

class Image {
public:
    Image(int width, int height, Rgb fill = {}) : w_(width), h_(height), px_(3 * width * height) {
        clear(fill);
    }

    int width() const noexcept { return w_; }
    int height() const noexcept { return h_; }

    void clear(Rgb c) {
        for (std::size_t i = 0; i < px_.size(); i += 3) {
            px_[i] = c.r;
            px_[i + 1] = c.g;
            px_[i + 2] = c.b;
        }
    }

    void set(int x, int y, Rgb c) {
        if (x < 0 || y < 0 || x >= w_ || y >= h_) return;
        const std::size_t i = 3 * (static_cast<std::size_t>(y) * w_ + x);
        px_[i] = c.r;
        px_[i + 1] = c.g;
        px_[i + 2] = c.b;
    }

    Rgb at(int x, int y) const {
        const std::size_t i = 3 * (static_cast<std::size_t>(y) * w_ + x);
        return {px_[i], px_[i + 1], px_[i + 2]};
    }

    const std::vector<std::uint8_t>& pixels() const noexcept { return px_; }

private:
    int w_, h_;
    std::vector<std::uint8_t> px_;
};

/// PNG encoding through libpng's simplified API. Output is deterministic.
inline std::vector<std::uint8_t> encode_png(const Image& img) {
    png_image image{};
    image.version = PNG_IMAGE_VERSION;
    image.width = static_cast<png_uint_32>(img.width());
    image.height = static_cast<png_uint_32>(img.height());
    image.format = PNG_FORMAT_RGB;
    png_alloc_size_t size = 0;
    if (!png_image_write_to_memory(&image, nullptr, &size, 0, img.pixels().data(), 0, nullptr))
        throw std::runtime_error(std::string("png sizing failed: ") + image.message);
    std::vector<std::uint8_t> out(size);
    if (!png_image_write_to_memory(&image, out.data(), &size, 0, img.pixels().data(), 0, nullptr))
        throw std::runtime_error(std::string("png encoding failed: ") + image.message);
    out.resize(size);
    return out;
}

inline void write_file(const std::string& path, const std::vector<std::uint8_t>& bytes) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw std::runtime_error("cannot write " + path);
    out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
}

/// Top-down orthographic rasterizer for scene descriptions.
///
/// A scene is {"view": {"x0","y0","x1","y1"}, "background": [r,g,b],
/// "entities": [...]}. World +y maps to image up. Entity kinds:
///   rect   {x, y, heading, length, width, color}  heading 0 points along +y,
///          positive heading turns toward +x
///   circle {x, y, radius, color}
///   line   {x0, y0, x1, y1, color}
inline Image rasterize(const nlohmann::json& scene, int size = kFrameSize) {
    const auto& view = scene.at("view");
    const double x0 = view.at("x0"), y0 = view.at("y0"), x1 = view.at("x1"), y1 = view.at("y1");
    Image img(size, size, scene.contains("background") ? rgb_from_json(scene["background"]) : Rgb{0, 0, 0});
    const double sx = size / (x1 - x0), sy = size / (y1 - y0);
    auto to_px = [&](double wx, double wy) {
        return std::array<double, 2>{(wx - x0) * sx, (y1 - wy) * sy};
    };
    auto to_world = [&](int px, int py) {
        return std::array<double, 2>{x0 + (px + 0.5) / sx, y1 - (py + 0.5) / sy};
    };

    for (const auto& e : scene.at("entities")) {
        const std::string kind = e.at("kind");
        const Rgb color = rgb_from_json(e.at("color"));
        if (kind == "rect") {
            const double cx = e.at("x"), cy = e.at("y"), h = e.value("heading", 0.0);
            const double hl = 0.5 * e.at("length").get<double>(), hw = 0.5 * e.at("width").get<double>();
            const double fx = std::sin(h), fy = std::cos(h);  // forward axis
            const double rx = fy, ry = -fx;                    // right axis
            const double ext = std::abs(hl * fx) + std::abs(hw * rx);
            const double eyt = std::abs(hl * fy) + std::abs(hw * ry);
            const auto lo = to_px(cx - ext, cy + eyt);
            const auto hi = to_px(cx + ext, cy - eyt);
            for (int py = std::max(0, static_cast<int>(lo[1])); py <= std::min(size - 1, static_cast<int>(hi[1])); ++py)
                for (int px = std::max(0, static_cast<int>(lo[0])); px <= std::min(size - 1, static_cast<int>(hi[0])); ++px) {
                    const auto w = to_world(px, py);
                    const double dx = w[0] - cx, dy = w[1] - cy;
                    if (std::abs(dx * fx + dy * fy) <= hl && std::abs(dx * rx + dy * ry) <= hw) img.set(px, py, color);
                }
        } else if (kind == "circle") {
            const double cx = e.at("x"), cy = e.at("y"), r = e.at("radius");
            const auto lo = to_px(cx - r, cy + r);
            const auto hi = to_px(cx + r, cy - r);
            for (int py = std::max(0, static_cast<int>(lo[1])); py <= std::min(size - 1, static_cast<int>(hi[1])); ++py)
                for (int px = std::max(0, static_cast<int>(lo[0])); px <= std::min(size - 1, static_cast<int>(hi[0])); ++px) {
                    const auto w = to_world(px, py);
                    if ((w[0] - cx) * (w[0] - cx) + (w[1] - cy) * (w[1] - cy) <= r * r) img.set(px, py, color);
                }
        } else if (kind == "line") {
            const auto a = to_px(e.at("x0"), e.at("y0"));
            const auto b = to_px(e.at("x1"), e.at("y1"));
            const int n = static_cast<int>(std::max(std::abs(b[0] - a[0]), std::abs(b[1] - a[1]))) + 1;
            for (int i = 0; i <= n; ++i) {
                const double t = static_cast<double>(i) / n;
                img.set(static_cast<int>(a[0] + t * (b[0] - a[0])), static_cast<int>(a[1] + t * (b[1] - a[1])), color);
            }
        } else {
            throw std::invalid_argument("rasterize: unknown entity kind " + kind);
        }
    }
    return img;
}

inline std::vector<std::uint8_t> render_png(const nlohmann::json& scene) { return encode_png(rasterize(scene)); }

}  // namespace critstate
