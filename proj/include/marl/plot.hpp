#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <limits>
#include <vector>

#include "marl/io.hpp"

// Minimal raster plotting for diagnostics: polylines and scatter points on
// a white RGB canvas with a plain frame. No text rendering.

namespace marl::plot {

using Color = std::array<std::uint8_t, 3>;

inline constexpr Color kBlack{0, 0, 0};
inline constexpr Color kGray{200, 200, 200};

inline Color palette(std::size_t i) {
    static constexpr std::array<Color, 8> colors{{{31, 119, 180},
                                                  {255, 127, 14},
                                                  {44, 160, 44},
                                                  {214, 39, 40},
                                                  {148, 103, 189},
                                                  {140, 86, 75},
                                                  {227, 119, 194},
                                                  {127, 127, 127}}};
    return colors[i % colors.size()];
}

class Canvas {
public:
    Canvas(int width, int height) : w_(width), h_(height), px_(static_cast<std::size_t>(width) * height * 3, 255) {}

    int width() const { return w_; }
    int height() const { return h_; }

    void set(int x, int y, Color c) {
        if (x < 0 || y < 0 || x >= w_ || y >= h_) return;
        auto* p = px_.data() + (static_cast<std::size_t>(y) * w_ + x) * 3;
        p[0] = c[0];
        p[1] = c[1];
        p[2] = c[2];
    }

    void line(int x0, int y0, int x1, int y1, Color c) {
        const int dx = std::abs(x1 - x0), sx = x0 < x1 ? 1 : -1;
        const int dy = -std::abs(y1 - y0), sy = y0 < y1 ? 1 : -1;
        int err = dx + dy;
        while (true) {
            set(x0, y0, c);
            if (x0 == x1 && y0 == y1) break;
            const int e2 = 2 * err;
            if (e2 >= dy) {
                err += dy;
                x0 += sx;
            }
            if (e2 <= dx) {
                err += dx;
                y0 += sy;
            }
        }
    }

    void dot(int x, int y, int radius, Color c) {
        for (int dy = -radius; dy <= radius; ++dy) {
            for (int dx = -radius; dx <= radius; ++dx) {
                if (dx * dx + dy * dy <= radius * radius) set(x + dx, y + dy, c);
            }
        }
    }

    /// Blit a grayscale tile with values in [0, 1].
    void tile(int x0, int y0, int side, const std::vector<float>& gray) {
        for (int r = 0; r < side; ++r) {
            for (int c = 0; c < side; ++c) {
                const auto v = static_cast<std::uint8_t>(
                    std::lround(std::clamp(gray[static_cast<std::size_t>(r) * side + c], 0.0f, 1.0f) * 255.0f));
                set(x0 + c, y0 + r, {v, v, v});
            }
        }
    }

    void save(const std::filesystem::path& path) const { io::write_png(path, w_, h_, 3, px_); }

private:
    int w_;
    int h_;
    std::vector<std::uint8_t> px_;
};

/// Maps data coordinates into a framed plotting area.
struct Axes {
    double x_min = 0, x_max = 1, y_min = 0, y_max = 1;
    int left = 40, right = 20, top = 20, bottom = 40;

    static Axes fit(const std::vector<double>& xs, const std::vector<double>& ys) {
        Axes a;
        if (!xs.empty()) {
            a.x_min = *std::min_element(xs.begin(), xs.end());
            a.x_max = *std::max_element(xs.begin(), xs.end());
        }
        if (!ys.empty()) {
            a.y_min = *std::min_element(ys.begin(), ys.end());
            a.y_max = *std::max_element(ys.begin(), ys.end());
        }
        if (a.x_max <= a.x_min) a.x_max = a.x_min + 1;
        if (a.y_max <= a.y_min) a.y_max = a.y_min + 1;
        const double px = 0.05 * (a.x_max - a.x_min), py = 0.05 * (a.y_max - a.y_min);
        a.x_min -= px;
        a.x_max += px;
        a.y_min -= py;
        a.y_max += py;
        return a;
    }

    int to_x(const Canvas& c, double x) const {
        return left + static_cast<int>(std::lround((x - x_min) / (x_max - x_min) * (c.width() - left - right)));
    }
    int to_y(const Canvas& c, double y) const {
        return c.height() - bottom - static_cast<int>(std::lround((y - y_min) / (y_max - y_min) * (c.height() - top - bottom)));
    }

    void frame(Canvas& c) const {
        const int x0 = left, x1 = c.width() - right, y0 = top, y1 = c.height() - bottom;
        c.line(x0, y1, x1, y1, kBlack);
        c.line(x0, y0, x0, y1, kBlack);
    }
};

struct Series {
    std::vector<double> x;
    std::vector<double> y;
    Color color = palette(0);
};

inline void line_chart(const std::filesystem::path& path, const std::vector<Series>& series, int width = 640,
                       int height = 400) {
    std::vector<double> xs, ys;
    for (const auto& s : series) {
        xs.insert(xs.end(), s.x.begin(), s.x.end());
        ys.insert(ys.end(), s.y.begin(), s.y.end());
    }
    Canvas canvas(width, height);
    const auto axes = Axes::fit(xs, ys);
    axes.frame(canvas);
    for (const auto& s : series) {
        for (std::size_t i = 0; i < s.x.size(); ++i) {
            const int x = axes.to_x(canvas, s.x[i]), y = axes.to_y(canvas, s.y[i]);
            if (i > 0) canvas.line(axes.to_x(canvas, s.x[i - 1]), axes.to_y(canvas, s.y[i - 1]), x, y, s.color);
            canvas.dot(x, y, 3, s.color);
        }
    }
    canvas.save(path);
}

inline void scatter(const std::filesystem::path& path, const std::vector<double>& x, const std::vector<double>& y,
                    const std::vector<int>& group, int width = 640, int height = 640) {
    Canvas canvas(width, height);
    const auto axes = Axes::fit(x, y);
    axes.frame(canvas);
    for (std::size_t i = 0; i < x.size(); ++i) {
        canvas.dot(axes.to_x(canvas, x[i]), axes.to_y(canvas, y[i]), 2, palette(static_cast<std::size_t>(group[i])));
    }
    canvas.save(path);
}

} // namespace marl::plot
