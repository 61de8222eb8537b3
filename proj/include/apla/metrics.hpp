#pragma once

// Evaluation metrics: Horn-Schunck optical flow, a frame-consistency index
// built on it (deviation of each pixel's flow from its 3x3 neighborhood
// mean), PSNR, and a training-log ratio-trajectory reader.

#include <cmath>
#include <cstdint>
#include <istream>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "apla/tensor.hpp"

namespace apla {

// Flow between one adjacent frame pair; u is horizontal, v vertical.
struct FlowField {
    int64_t h = 0, w = 0;
    std::vector<double> u, v;

    double& at_u(int64_t y, int64_t x) { return u[size_t(y * w + x)]; }
    double& at_v(int64_t y, int64_t x) { return v[size_t(y * w + x)]; }
    double at_u(int64_t y, int64_t x) const { return u[size_t(y * w + x)]; }
    double at_v(int64_t y, int64_t x) const { return v[size_t(y * w + x)]; }
};

namespace detail {
inline double clamped(const std::vector<double>& img, int64_t h, int64_t w, int64_t y, int64_t x) {
    y = y < 0 ? 0 : (y >= h ? h - 1 : y);
    x = x < 0 ? 0 : (x >= w ? w - 1 : x);
    return img[size_t(y * w + x)];
}
}  // namespace detail

constexpr int hs_iterations = 100;
constexpr double hs_smoothness = 0.5;

// Horn-Schunck flow on two grayscale frames, fixed iteration count and
// smoothness weight; deterministic (no data-dependent iteration).
template <typename S>
FlowField optical_flow(const Tensor<S>& frame_a, const Tensor<S>& frame_b) {
    if (frame_a.shape() != frame_b.shape() || frame_a.rank() != 2)
        throw DimError("optical_flow expects two equal (H, W) frames, got " +
                       shape_str(frame_a.shape()) + " and " + shape_str(frame_b.shape()));
    int64_t h = frame_a.extent(0), w = frame_a.extent(1);
    std::vector<double> i1(size_t(h * w)), i2(size_t(h * w));
    for (int64_t i = 0; i < h * w; ++i) {
        i1[size_t(i)] = double(frame_a[i]);
        i2[size_t(i)] = double(frame_b[i]);
    }

    // Forward 2x2-cube derivative estimates averaged over both frames,
    // replicating the border row/column.
    std::vector<double> ix(size_t(h * w)), iy(size_t(h * w)), it(size_t(h * w));
    using detail::clamped;
    for (int64_t y = 0; y < h; ++y)
        for (int64_t x = 0; x < w; ++x) {
            auto a = [&](int64_t dy, int64_t dx) { return clamped(i1, h, w, y + dy, x + dx); };
            auto b = [&](int64_t dy, int64_t dx) { return clamped(i2, h, w, y + dy, x + dx); };
            size_t i = size_t(y * w + x);
            ix[i] = 0.25 * (a(0, 1) - a(0, 0) + a(1, 1) - a(1, 0) + b(0, 1) - b(0, 0) +
                            b(1, 1) - b(1, 0));
            iy[i] = 0.25 * (a(1, 0) - a(0, 0) + a(1, 1) - a(0, 1) + b(1, 0) - b(0, 0) +
                            b(1, 1) - b(0, 1));
            it[i] = 0.25 * (b(0, 0) - a(0, 0) + b(0, 1) - a(0, 1) + b(1, 0) - a(1, 0) +
                            b(1, 1) - a(1, 1));
        }

    FlowField f;
    f.h = h;
    f.w = w;
    f.u.assign(size_t(h * w), 0.0);
    f.v.assign(size_t(h * w), 0.0);
    std::vector<double> ub(size_t(h * w)), vb(size_t(h * w));
    for (int iter = 0; iter < hs_iterations; ++iter) {
        // Weighted neighborhood average: 1/6 for the 4-neighbors, 1/12 for
        // the diagonals, replicated at the borders.
        for (int64_t y = 0; y < h; ++y)
            for (int64_t x = 0; x < w; ++x) {
                auto cu = [&](int64_t dy, int64_t dx) {
                    return clamped(f.u, h, w, y + dy, x + dx);
                };
                auto cv = [&](int64_t dy, int64_t dx) {
                    return clamped(f.v, h, w, y + dy, x + dx);
                };
                size_t i = size_t(y * w + x);
                ub[i] = (cu(-1, 0) + cu(1, 0) + cu(0, -1) + cu(0, 1)) / 6.0 +
                        (cu(-1, -1) + cu(-1, 1) + cu(1, -1) + cu(1, 1)) / 12.0;
                vb[i] = (cv(-1, 0) + cv(1, 0) + cv(0, -1) + cv(0, 1)) / 6.0 +
                        (cv(-1, -1) + cv(-1, 1) + cv(1, -1) + cv(1, 1)) / 12.0;
            }
        for (int64_t i = 0; i < h * w; ++i) {
            size_t k = size_t(i);
            double denom = hs_smoothness + ix[k] * ix[k] + iy[k] * iy[k];
            double t = (ix[k] * ub[k] + iy[k] * vb[k] + it[k]) / denom;
            f.u[k] = ub[k] - ix[k] * t;
            f.v[k] = vb[k] - iy[k] * t;
        }
    }
    for (double x : f.u)
        if (!std::isfinite(x)) throw NumericError("optical_flow produced non-finite u");
    for (double x : f.v)
        if (!std::isfinite(x)) throw NumericError("optical_flow produced non-finite v");
    return f;
}

// Channel-mean grayscale view of frame `f` of a (F, c, H, W) video.
template <typename S>
Tensor<S> grayscale_frame(const Tensor<S>& video, int64_t f) {
    if (video.rank() != 4)
        throw DimError("expected a (F, c, H, W) video, got " + shape_str(video.shape()));
    int64_t c = video.extent(1), h = video.extent(2), w = video.extent(3);
    Tensor<S> out(Shape{h, w});
    for (int64_t y = 0; y < h; ++y)
        for (int64_t x = 0; x < w; ++x) {
            double acc = 0;
            for (int64_t ch = 0; ch < c; ++ch)
                acc += double(video[((f * c + ch) * h + y) * w + x]);
            out[y * w + x] = S(acc / double(c));
        }
    return out;
}

// Mean deviation of each pixel's flow vector from the mean flow over its
// 3x3 neighborhood (center included, clipped at the borders), averaged over
// pixels and adjacent frame pairs. Zero for static video, near zero for
// uniform translation, large for temporally incoherent motion.
template <typename S>
double fci(const Tensor<S>& video) {
    if (video.rank() != 4)
        throw DimError("fci expects a (F, c, H, W) video, got " + shape_str(video.shape()));
    int64_t F = video.extent(0);
    if (F < 2) throw ContractError("fci needs at least two frames, got " + std::to_string(F));
    int64_t h = video.extent(2), w = video.extent(3);

    double total = 0;
    for (int64_t f = 0; f + 1 < F; ++f) {
        FlowField fl = optical_flow(grayscale_frame(video, f), grayscale_frame(video, f + 1));
        double pair_sum = 0;
        for (int64_t y = 0; y < h; ++y)
            for (int64_t x = 0; x < w; ++x) {
                double mu = 0, mv = 0;
                int n = 0;
                for (int64_t dy = -1; dy <= 1; ++dy)
                    for (int64_t dx = -1; dx <= 1; ++dx) {
                        int64_t yy = y + dy, xx = x + dx;
                        if (yy < 0 || yy >= h || xx < 0 || xx >= w) continue;
                        mu += fl.at_u(yy, xx);
                        mv += fl.at_v(yy, xx);
                        ++n;
                    }
                mu /= double(n);
                mv /= double(n);
                double du = fl.at_u(y, x) - mu, dv = fl.at_v(y, x) - mv;
                pair_sum += std::sqrt(du * du + dv * dv);
            }
        total += pair_sum / double(h * w);
    }
    return total / double(F - 1);
}

// 10*log10(1/MSE) over all elements, capped at 100 dB once MSE < 1e-10.
// Inputs must live in [0, 1].
template <typename S>
double psnr(const Tensor<S>& a, const Tensor<S>& b) {
    if (a.shape() != b.shape())
        throw DimError("psnr shape mismatch: " + shape_str(a.shape()) + " vs " +
                       shape_str(b.shape()));
    if (a.numel() == 0) throw ContractError("psnr of empty tensors");
    double mse = 0;
    for (int64_t i = 0; i < a.numel(); ++i) {
        double av = double(a[i]), bv = double(b[i]);
        if (av < 0.0 || av > 1.0 || bv < 0.0 || bv > 1.0)
            throw ContractError("psnr inputs must lie in [0, 1]");
        mse += (av - bv) * (av - bv);
    }
    mse /= double(a.numel());
    if (mse < 1e-10) return 100.0;
    return -10.0 * std::log10(mse);
}

// One (step, ratio) point per training step, read back from the CSV log.
inline std::vector<std::pair<int64_t, double>> ratio_trajectory(std::istream& log) {
    std::string line;
    if (!std::getline(log, line)) throw FormatError("training log is empty");
    std::vector<std::string> cols;
    {
        std::stringstream header(line);
        std::string cell;
        while (std::getline(header, cell, ',')) cols.push_back(cell);
    }
    int64_t step_col = -1, ratio_col = -1;
    for (size_t i = 0; i < cols.size(); ++i) {
        if (cols[i] == "step") step_col = int64_t(i);
        if (cols[i] == "norm_ratio") ratio_col = int64_t(i);
    }
    if (step_col < 0 || ratio_col < 0)
        throw FormatError("training log lacks step/norm_ratio columns: " + line);

    std::vector<std::pair<int64_t, double>> out;
    int64_t lineno = 1;
    while (std::getline(log, line)) {
        ++lineno;
        if (line.empty()) continue;
        std::stringstream row(line);
        std::string cell;
        std::vector<std::string> cells;
        while (std::getline(row, cell, ',')) cells.push_back(cell);
        if (int64_t(cells.size()) <= std::max(step_col, ratio_col))
            throw FormatError("training log row " + std::to_string(lineno) + " is too short");
        try {
            out.emplace_back(std::stoll(cells[size_t(step_col)]),
                             std::stod(cells[size_t(ratio_col)]));
        } catch (const std::exception&) {
            throw FormatError("training log row " + std::to_string(lineno) + " is not numeric");
        }
    }
    return out;
}

}  // namespace apla
