#pragma once

// Reverse-mode autodiff tape. Nodes are appended in topological order by
// eager construction; backward walks the node list once in reverse. Every
// forward output is checked for NaN/Inf. No implicit broadcasting: the only
// shape-bending ops are the explicit ones (scale/add_scalar, the bias adds,
// and mul_frames).

#include <array>
#include <cstring>
#include <functional>
#include <memory>
#include <vector>

#include "apla/tensor.hpp"

namespace apla {

// Handle into a Graph's node list. Only meaningful for the graph that made it.
struct Var {
    int32_t id = -1;
    bool valid() const { return id >= 0; }
};

template <typename S>
class Graph {
public:
    Graph() = default;
    Graph(const Graph&) = delete;
    Graph& operator=(const Graph&) = delete;

    size_t size() const { return nodes_.size(); }
    bool backward_done() const { return backward_done_; }

    const Tensor<S>& value(Var v) const { return node(v).value; }
    const Shape& shape(Var v) const { return node(v).value.shape(); }

    void reset() {
        nodes_.clear();
        backward_done_ = false;
    }

    // ---- node creation ----------------------------------------------------

    // Leaf bound to a parameter tensor; backward accumulates into param.grad.
    Var leaf(Tensor<S>& param) {
        Node n;
        n.value = param;
        n.op = "leaf";
        n.track = param.requires_grad;
        n.param = n.track ? &param : nullptr;
        nodes_.push_back(std::move(n));
        return Var{int32_t(nodes_.size() - 1)};
    }

    Var constant(Tensor<S> value) {
        Node n;
        n.value = std::move(value);
        n.op = "const";
        n.track = false;
        nodes_.push_back(std::move(n));
        return Var{int32_t(nodes_.size() - 1)};
    }

    Var constant_scalar(S v) { return constant(Tensor<S>::scalar(v)); }

    // ---- elementwise ------------------------------------------------------

    Var add(Var a, Var b) {
        same_shape("add", a, b);
        Tensor<S> out = node(a).value;
        const Tensor<S>& bv = node(b).value;
        for (int64_t i = 0; i < out.numel(); ++i) out[i] += bv[i];
        return emit(std::move(out), {a.id, b.id}, "add", [](Graph& g, int32_t self) {
            auto& n = g.nodes_[self];
            g.push_adjoint(n.inputs[0], n.adj.data(), n.adj.size());
            g.push_adjoint(n.inputs[1], n.adj.data(), n.adj.size());
        });
    }

    Var sub(Var a, Var b) {
        same_shape("sub", a, b);
        Tensor<S> out = node(a).value;
        const Tensor<S>& bv = node(b).value;
        for (int64_t i = 0; i < out.numel(); ++i) out[i] -= bv[i];
        return emit(std::move(out), {a.id, b.id}, "sub", [](Graph& g, int32_t self) {
            auto& n = g.nodes_[self];
            g.push_adjoint(n.inputs[0], n.adj.data(), n.adj.size());
            if (g.tracked(n.inputs[1])) {
                auto& dst = g.adjoint(n.inputs[1]);
                for (size_t i = 0; i < n.adj.size(); ++i) dst[i] -= n.adj[i];
            }
        });
    }

    Var mul(Var a, Var b) {
        same_shape("mul", a, b);
        Tensor<S> out = node(a).value;
        const Tensor<S>& bv = node(b).value;
        for (int64_t i = 0; i < out.numel(); ++i) out[i] *= bv[i];
        return emit(std::move(out), {a.id, b.id}, "mul", [](Graph& g, int32_t self) {
            auto& n = g.nodes_[self];
            const Tensor<S>& av = g.nodes_[n.inputs[0]].value;
            const Tensor<S>& bv2 = g.nodes_[n.inputs[1]].value;
            if (g.tracked(n.inputs[0])) {
                auto& dst = g.adjoint(n.inputs[0]);
                for (size_t i = 0; i < n.adj.size(); ++i) dst[i] += n.adj[i] * bv2[int64_t(i)];
            }
            if (g.tracked(n.inputs[1])) {
                auto& dst = g.adjoint(n.inputs[1]);
                for (size_t i = 0; i < n.adj.size(); ++i) dst[i] += n.adj[i] * av[int64_t(i)];
            }
        });
    }

    Var scale(Var a, S c) {
        Tensor<S> out = node(a).value;
        for (int64_t i = 0; i < out.numel(); ++i) out[i] *= c;
        return emit(std::move(out), {a.id}, "scale", [c](Graph& g, int32_t self) {
            auto& n = g.nodes_[self];
            if (!g.tracked(n.inputs[0])) return;
            auto& dst = g.adjoint(n.inputs[0]);
            for (size_t i = 0; i < n.adj.size(); ++i) dst[i] += n.adj[i] * c;
        });
    }

    Var add_scalar(Var a, S c) {
        Tensor<S> out = node(a).value;
        for (int64_t i = 0; i < out.numel(); ++i) out[i] += c;
        return emit(std::move(out), {a.id}, "add_scalar", [](Graph& g, int32_t self) {
            auto& n = g.nodes_[self];
            g.push_adjoint(n.inputs[0], n.adj.data(), n.adj.size());
        });
    }

    Var gelu(Var a) {
        const Tensor<S>& x = node(a).value;
        Tensor<S> out(x.shape());
        for (int64_t i = 0; i < x.numel(); ++i) {
            double v = double(x[i]);
            out[i] = S(0.5 * v * (1.0 + std::erf(v * 0.70710678118654752440)));
        }
        return emit(std::move(out), {a.id}, "gelu", [](Graph& g, int32_t self) {
            auto& n = g.nodes_[self];
            if (!g.tracked(n.inputs[0])) return;
            const Tensor<S>& xv = g.nodes_[n.inputs[0]].value;
            auto& dst = g.adjoint(n.inputs[0]);
            for (size_t i = 0; i < n.adj.size(); ++i) {
                double v = double(xv[int64_t(i)]);
                double cdf = 0.5 * (1.0 + std::erf(v * 0.70710678118654752440));
                double pdf = std::exp(-0.5 * v * v) * 0.39894228040143267794;  // 1/sqrt(2*pi)
                dst[i] += n.adj[i] * S(cdf + v * pdf);
            }
        });
    }

    Var softplus(Var a) {
        const Tensor<S>& x = node(a).value;
        Tensor<S> out(x.shape());
        for (int64_t i = 0; i < x.numel(); ++i) {
            double v = double(x[i]);
            out[i] = S(std::max(v, 0.0) + std::log1p(std::exp(-std::abs(v))));
        }
        return emit(std::move(out), {a.id}, "softplus", [](Graph& g, int32_t self) {
            auto& n = g.nodes_[self];
            if (!g.tracked(n.inputs[0])) return;
            const Tensor<S>& xv = g.nodes_[n.inputs[0]].value;
            auto& dst = g.adjoint(n.inputs[0]);
            for (size_t i = 0; i < n.adj.size(); ++i) {
                double v = double(xv[int64_t(i)]);
                double sig = v >= 0 ? 1.0 / (1.0 + std::exp(-v)) : std::exp(v) / (1.0 + std::exp(v));
                dst[i] += n.adj[i] * S(sig);
            }
        });
    }

    // |x| with subgradient 0 at x == 0.
    Var abs(Var a) {
        const Tensor<S>& x = node(a).value;
        Tensor<S> out(x.shape());
        for (int64_t i = 0; i < x.numel(); ++i) out[i] = std::abs(x[i]);
        return emit(std::move(out), {a.id}, "abs", [](Graph& g, int32_t self) {
            auto& n = g.nodes_[self];
            if (!g.tracked(n.inputs[0])) return;
            const Tensor<S>& xv = g.nodes_[n.inputs[0]].value;
            auto& dst = g.adjoint(n.inputs[0]);
            for (size_t i = 0; i < n.adj.size(); ++i) {
                S v = xv[int64_t(i)];
                S sgn = v > S(0) ? S(1) : (v < S(0) ? S(-1) : S(0));
                dst[i] += n.adj[i] * sgn;
            }
        });
    }

    // ---- reductions ---------------------------------------------------------

    Var sum(Var a) {
        const Tensor<S>& x = node(a).value;
        S s = 0;
        for (int64_t i = 0; i < x.numel(); ++i) s += x[i];
        return emit(Tensor<S>::scalar(s), {a.id}, "sum", [](Graph& g, int32_t self) {
            auto& n = g.nodes_[self];
            if (!g.tracked(n.inputs[0])) return;
            auto& dst = g.adjoint(n.inputs[0]);
            S gv = n.adj[0];
            for (auto& d : dst) d += gv;
        });
    }

    Var mean(Var a) {
        const Tensor<S>& x = node(a).value;
        S s = 0;
        for (int64_t i = 0; i < x.numel(); ++i) s += x[i];
        int64_t cnt = x.numel();
        return emit(Tensor<S>::scalar(s / S(cnt)), {a.id}, "mean", [cnt](Graph& g, int32_t self) {
            auto& n = g.nodes_[self];
            if (!g.tracked(n.inputs[0])) return;
            auto& dst = g.adjoint(n.inputs[0]);
            S gv = n.adj[0] / S(cnt);
            for (auto& d : dst) d += gv;
        });
    }

    // N x M -> N, mean over each row.
    Var mean_rows(Var a) {
        const Tensor<S>& x = node(a).value;
        require(x.rank() == 2, "mean_rows expects a 2-D input, got " + shape_str(x.shape()));
        int64_t rows = x.extent(0), cols = x.extent(1);
        Tensor<S> out(Shape{rows});
        for (int64_t r = 0; r < rows; ++r) {
            S s = 0;
            for (int64_t c = 0; c < cols; ++c) s += x[r * cols + c];
            out[r] = s / S(cols);
        }
        return emit(std::move(out), {a.id}, "mean_rows", [rows, cols](Graph& g, int32_t self) {
            auto& n = g.nodes_[self];
            if (!g.tracked(n.inputs[0])) return;
            auto& dst = g.adjoint(n.inputs[0]);
            for (int64_t r = 0; r < rows; ++r) {
                S gv = n.adj[size_t(r)] / S(cols);
                for (int64_t c = 0; c < cols; ++c) dst[size_t(r * cols + c)] += gv;
            }
        });
    }

    // ---- linear algebra -----------------------------------------------------

    Var matmul(Var a, Var b) {
        const Tensor<S>& av = node(a).value;
        const Tensor<S>& bv = node(b).value;
        require(av.rank() == 2 && bv.rank() == 2,
                "matmul expects 2-D inputs, got " + shape_str(av.shape()) + " and " +
                    shape_str(bv.shape()));
        require(av.extent(1) == bv.extent(0),
                "matmul inner extents differ: " + shape_str(av.shape()) + " vs " +
                    shape_str(bv.shape()));
        int64_t m = av.extent(0), k = av.extent(1), n2 = bv.extent(1);
        Tensor<S> out(Shape{m, n2});
        for (int64_t i = 0; i < m; ++i)
            for (int64_t kk = 0; kk < k; ++kk) {
                S aik = av[i * k + kk];
                if (aik == S(0)) continue;
                const S* brow = bv.data() + kk * n2;
                S* orow = out.data() + i * n2;
                for (int64_t j = 0; j < n2; ++j) orow[j] += aik * brow[j];
            }
        return emit(std::move(out), {a.id, b.id}, "matmul", [m, k, n2](Graph& g, int32_t self) {
            auto& node_ = g.nodes_[self];
            const Tensor<S>& av2 = g.nodes_[node_.inputs[0]].value;
            const Tensor<S>& bv2 = g.nodes_[node_.inputs[1]].value;
            const S* gptr = node_.adj.data();
            if (g.tracked(node_.inputs[0])) {  // dA = G B^T
                auto& da = g.adjoint(node_.inputs[0]);
                for (int64_t i = 0; i < m; ++i)
                    for (int64_t j = 0; j < n2; ++j) {
                        S gij = gptr[i * n2 + j];
                        if (gij == S(0)) continue;
                        for (int64_t kk = 0; kk < k; ++kk)
                            da[size_t(i * k + kk)] += gij * bv2[kk * n2 + j];
                    }
            }
            if (g.tracked(node_.inputs[1])) {  // dB = A^T G
                auto& db = g.adjoint(node_.inputs[1]);
                for (int64_t i = 0; i < m; ++i)
                    for (int64_t kk = 0; kk < k; ++kk) {
                        S aik = av2[i * k + kk];
                        if (aik == S(0)) continue;
                        const S* grow = gptr + i * n2;
                        for (int64_t j = 0; j < n2; ++j) db[size_t(kk * n2 + j)] += aik * grow[j];
                    }
            }
        });
    }

    Var transpose(Var a) {
        const Tensor<S>& x = node(a).value;
        require(x.rank() == 2, "transpose expects a 2-D input, got " + shape_str(x.shape()));
        int64_t r = x.extent(0), c = x.extent(1);
        Tensor<S> out(Shape{c, r});
        for (int64_t i = 0; i < r; ++i)
            for (int64_t j = 0; j < c; ++j) out[j * r + i] = x[i * c + j];
        return emit(std::move(out), {a.id}, "transpose", [r, c](Graph& g, int32_t self) {
            auto& n = g.nodes_[self];
            if (!g.tracked(n.inputs[0])) return;
            auto& dst = g.adjoint(n.inputs[0]);
            for (int64_t i = 0; i < r; ++i)
                for (int64_t j = 0; j < c; ++j) dst[size_t(i * c + j)] += n.adj[size_t(j * r + i)];
        });
    }

    // ---- structure ----------------------------------------------------------

    Var reshape(Var a, Shape new_shape) {
        Tensor<S> out = node(a).value.reshaped(std::move(new_shape));
        return emit(std::move(out), {a.id}, "reshape", [](Graph& g, int32_t self) {
            auto& n = g.nodes_[self];
            g.push_adjoint(n.inputs[0], n.adj.data(), n.adj.size());
        });
    }

    // out[i] = x[map[i]]; map entries must be valid indices into x.
    Var gather(Var a, std::vector<int64_t> map, Shape out_shape) {
        const Tensor<S>& x = node(a).value;
        require(int64_t(map.size()) == apla::numel(out_shape),
                "gather map length does not match output shape " + shape_str(out_shape));
        Tensor<S> out(out_shape);
        for (size_t i = 0; i < map.size(); ++i) {
            require(map[i] >= 0 && map[i] < x.numel(), "gather index out of range");
            out[int64_t(i)] = x[map[i]];
        }
        auto m = std::make_shared<std::vector<int64_t>>(std::move(map));
        return emit(std::move(out), {a.id}, "gather", [m](Graph& g, int32_t self) {
            auto& n = g.nodes_[self];
            if (!g.tracked(n.inputs[0])) return;
            auto& dst = g.adjoint(n.inputs[0]);
            for (size_t i = 0; i < n.adj.size(); ++i) dst[size_t((*m)[i])] += n.adj[i];
        });
    }

    Var slice_rows(Var a, int64_t r0, int64_t nrows) {
        const Tensor<S>& x = node(a).value;
        require(x.rank() == 2, "slice_rows expects a 2-D input, got " + shape_str(x.shape()));
        int64_t rows = x.extent(0), cols = x.extent(1);
        require(r0 >= 0 && nrows >= 1 && r0 + nrows <= rows,
                "slice_rows range [" + std::to_string(r0) + ", " + std::to_string(r0 + nrows) +
                    ") out of " + std::to_string(rows) + " rows");
        Tensor<S> out(Shape{nrows, cols});
        std::memcpy(out.data(), x.data() + r0 * cols, sizeof(S) * size_t(nrows * cols));
        return emit(std::move(out), {a.id}, "slice_rows", [r0, cols](Graph& g, int32_t self) {
            auto& n = g.nodes_[self];
            if (!g.tracked(n.inputs[0])) return;
            auto& dst = g.adjoint(n.inputs[0]);
            for (size_t i = 0; i < n.adj.size(); ++i) dst[size_t(r0 * cols) + i] += n.adj[i];
        });
    }

    Var concat_rows(const std::vector<Var>& parts) {
        require(!parts.empty(), "concat_rows needs at least one input");
        int64_t cols = node(parts[0]).value.extent(1);
        int64_t rows = 0;
        std::vector<int32_t> ids;
        for (Var p : parts) {
            const Tensor<S>& v = node(p).value;
            require(v.rank() == 2 && v.extent(1) == cols,
                    "concat_rows column mismatch at " + shape_str(v.shape()));
            rows += v.extent(0);
            ids.push_back(p.id);
        }
        Tensor<S> out(Shape{rows, cols});
        int64_t off = 0;
        for (Var p : parts) {
            const Tensor<S>& v = node(p).value;
            std::memcpy(out.data() + off, v.data(), sizeof(S) * size_t(v.numel()));
            off += v.numel();
        }
        return emit(std::move(out), std::move(ids), "concat_rows", [](Graph& g, int32_t self) {
            auto& n = g.nodes_[self];
            size_t off2 = 0;
            for (int32_t in : n.inputs) {
                size_t len = size_t(g.nodes_[in].value.numel());
                g.push_adjoint(in, n.adj.data() + off2, len);
                off2 += len;
            }
        });
    }

    Var slice_cols(Var a, int64_t c0, int64_t ncols) {
        const Tensor<S>& x = node(a).value;
        require(x.rank() == 2, "slice_cols expects a 2-D input, got " + shape_str(x.shape()));
        int64_t rows = x.extent(0), cols = x.extent(1);
        require(c0 >= 0 && ncols >= 1 && c0 + ncols <= cols,
                "slice_cols range [" + std::to_string(c0) + ", " + std::to_string(c0 + ncols) +
                    ") out of " + std::to_string(cols) + " columns");
        Tensor<S> out(Shape{rows, ncols});
        for (int64_t r = 0; r < rows; ++r)
            std::memcpy(out.data() + r * ncols, x.data() + r * cols + c0, sizeof(S) * size_t(ncols));
        return emit(std::move(out), {a.id}, "slice_cols",
                    [c0, ncols, cols, rows](Graph& g, int32_t self) {
                        auto& n = g.nodes_[self];
                        if (!g.tracked(n.inputs[0])) return;
                        auto& dst = g.adjoint(n.inputs[0]);
                        for (int64_t r = 0; r < rows; ++r)
                            for (int64_t c = 0; c < ncols; ++c)
                                dst[size_t(r * cols + c0 + c)] += n.adj[size_t(r * ncols + c)];
                    });
    }

    Var concat_cols(const std::vector<Var>& parts) {
        require(!parts.empty(), "concat_cols needs at least one input");
        int64_t rows = node(parts[0]).value.extent(0);
        int64_t cols = 0;
        std::vector<int32_t> ids;
        std::vector<int64_t> widths;
        for (Var p : parts) {
            const Tensor<S>& v = node(p).value;
            require(v.rank() == 2 && v.extent(0) == rows,
                    "concat_cols row mismatch at " + shape_str(v.shape()));
            widths.push_back(v.extent(1));
            cols += v.extent(1);
            ids.push_back(p.id);
        }
        Tensor<S> out(Shape{rows, cols});
        int64_t coff = 0;
        for (size_t pi = 0; pi < parts.size(); ++pi) {
            const Tensor<S>& v = node(parts[pi]).value;
            for (int64_t r = 0; r < rows; ++r)
                std::memcpy(out.data() + r * cols + coff, v.data() + r * widths[pi],
                            sizeof(S) * size_t(widths[pi]));
            coff += widths[pi];
        }
        auto w = std::make_shared<std::vector<int64_t>>(std::move(widths));
        return emit(std::move(out), std::move(ids), "concat_cols",
                    [w, rows, cols](Graph& g, int32_t self) {
                        auto& n = g.nodes_[self];
                        int64_t coff2 = 0;
                        for (size_t pi = 0; pi < n.inputs.size(); ++pi) {
                            int64_t width = (*w)[pi];
                            if (g.tracked(n.inputs[pi])) {
                                auto& dst = g.adjoint(n.inputs[pi]);
                                for (int64_t r = 0; r < rows; ++r)
                                    for (int64_t c = 0; c < width; ++c)
                                        dst[size_t(r * width + c)] +=
                                            n.adj[size_t(r * cols + coff2 + c)];
                            }
                            coff2 += width;
                        }
                    });
    }

    // ---- normalization and attention pieces ----------------------------------

    // Rows (last axis) sum to 1; stabilized by row-max subtraction.
    Var softmax_rows(Var a) {
        const Tensor<S>& x = node(a).value;
        require(x.rank() >= 1 && x.extent(x.rank() - 1) >= 1,
                "softmax_rows needs a non-empty last axis");
        int64_t cols = x.extent(x.rank() - 1);
        int64_t rows = x.numel() / cols;
        Tensor<S> out(x.shape());
        for (int64_t r = 0; r < rows; ++r) {
            const S* xi = x.data() + r * cols;
            S* yi = out.data() + r * cols;
            S mx = xi[0];
            for (int64_t c = 1; c < cols; ++c) mx = std::max(mx, xi[c]);
            S denom = 0;
            for (int64_t c = 0; c < cols; ++c) {
                yi[c] = std::exp(xi[c] - mx);
                denom += yi[c];
            }
            for (int64_t c = 0; c < cols; ++c) yi[c] /= denom;
        }
        return emit(std::move(out), {a.id}, "softmax_rows", [rows, cols](Graph& g, int32_t self) {
            auto& n = g.nodes_[self];
            if (!g.tracked(n.inputs[0])) return;
            auto& dst = g.adjoint(n.inputs[0]);
            const Tensor<S>& y = n.value;
            for (int64_t r = 0; r < rows; ++r) {
                const S* yi = y.data() + r * cols;
                const S* gi = n.adj.data() + r * cols;
                S dot = 0;
                for (int64_t c = 0; c < cols; ++c) dot += gi[c] * yi[c];
                for (int64_t c = 0; c < cols; ++c)
                    dst[size_t(r * cols + c)] += yi[c] * (gi[c] - dot);
            }
        });
    }

    // Per-row (last axis) standardization followed by affine gain/bias.
    Var layer_norm(Var a, Var gain, Var bias, S eps) {
        const Tensor<S>& x = node(a).value;
        const Tensor<S>& gv = node(gain).value;
        const Tensor<S>& bv = node(bias).value;
        require(x.rank() >= 1, "layer_norm needs rank >= 1");
        int64_t cols = x.extent(x.rank() - 1);
        require(cols >= 1, "layer_norm zero-length axis");
        require(gv.numel() == cols && bv.numel() == cols,
                "layer_norm gain/bias must match last axis " + std::to_string(cols));
        int64_t rows = x.numel() / cols;
        Tensor<S> out(x.shape());
        Tensor<S> xhat(x.shape());
        std::vector<S> inv_sigma(static_cast<size_t>(rows), S(0));
        for (int64_t r = 0; r < rows; ++r) {
            const S* xi = x.data() + r * cols;
            S mu = 0;
            for (int64_t c = 0; c < cols; ++c) mu += xi[c];
            mu /= S(cols);
            S var = 0;
            for (int64_t c = 0; c < cols; ++c) var += (xi[c] - mu) * (xi[c] - mu);
            var /= S(cols);
            S is = S(1) / std::sqrt(var + eps);
            inv_sigma[size_t(r)] = is;
            for (int64_t c = 0; c < cols; ++c) {
                xhat[r * cols + c] = (xi[c] - mu) * is;
                out[r * cols + c] = gv[c] * xhat[r * cols + c] + bv[c];
            }
        }
        auto xh = std::make_shared<Tensor<S>>(std::move(xhat));
        auto isv = std::make_shared<std::vector<S>>(std::move(inv_sigma));
        return emit(std::move(out), {a.id, gain.id, bias.id}, "layer_norm",
                    [xh, isv, rows, cols](Graph& g, int32_t self) {
                        auto& n = g.nodes_[self];
                        const Tensor<S>& gv2 = g.nodes_[n.inputs[1]].value;
                        if (g.tracked(n.inputs[2])) {
                            auto& db = g.adjoint(n.inputs[2]);
                            for (int64_t r = 0; r < rows; ++r)
                                for (int64_t c = 0; c < cols; ++c)
                                    db[size_t(c)] += n.adj[size_t(r * cols + c)];
                        }
                        if (g.tracked(n.inputs[1])) {
                            auto& dg = g.adjoint(n.inputs[1]);
                            for (int64_t r = 0; r < rows; ++r)
                                for (int64_t c = 0; c < cols; ++c)
                                    dg[size_t(c)] += n.adj[size_t(r * cols + c)] *
                                                     (*xh)[r * cols + c];
                        }
                        if (g.tracked(n.inputs[0])) {
                            auto& dx = g.adjoint(n.inputs[0]);
                            for (int64_t r = 0; r < rows; ++r) {
                                S mean_h = 0, mean_hx = 0;
                                for (int64_t c = 0; c < cols; ++c) {
                                    S h = n.adj[size_t(r * cols + c)] * gv2[c];
                                    mean_h += h;
                                    mean_hx += h * (*xh)[r * cols + c];
                                }
                                mean_h /= S(cols);
                                mean_hx /= S(cols);
                                S is = (*isv)[size_t(r)];
                                for (int64_t c = 0; c < cols; ++c) {
                                    S h = n.adj[size_t(r * cols + c)] * gv2[c];
                                    dx[size_t(r * cols + c)] +=
                                        is * (h - mean_h - (*xh)[r * cols + c] * mean_hx);
                                }
                            }
                        }
                    });
    }

    // x: N x d plus a length-d bias added to every row.
    Var add_bias_rows(Var a, Var b) {
        const Tensor<S>& x = node(a).value;
        const Tensor<S>& bv = node(b).value;
        require(x.rank() == 2, "add_bias_rows expects a 2-D input");
        int64_t rows = x.extent(0), cols = x.extent(1);
        require(bv.numel() == cols, "add_bias_rows bias length " + std::to_string(bv.numel()) +
                                        " != " + std::to_string(cols));
        Tensor<S> out = x;
        for (int64_t r = 0; r < rows; ++r)
            for (int64_t c = 0; c < cols; ++c) out[r * cols + c] += bv[c];
        return emit(std::move(out), {a.id, b.id}, "add_bias_rows",
                    [rows, cols](Graph& g, int32_t self) {
                        auto& n = g.nodes_[self];
                        g.push_adjoint(n.inputs[0], n.adj.data(), n.adj.size());
                        if (g.tracked(n.inputs[1])) {
                            auto& db = g.adjoint(n.inputs[1]);
                            for (int64_t r = 0; r < rows; ++r)
                                for (int64_t c = 0; c < cols; ++c)
                                    db[size_t(c)] += n.adj[size_t(r * cols + c)];
                        }
                    });
    }

    // x: (B, C, ...) plus a length-C bias added across all trailing positions.
    Var add_channel_bias(Var a, Var b) {
        const Tensor<S>& x = node(a).value;
        const Tensor<S>& bv = node(b).value;
        require(x.rank() >= 2, "add_channel_bias expects rank >= 2");
        int64_t batch = x.extent(0), ch = x.extent(1);
        require(bv.numel() == ch, "add_channel_bias bias length " + std::to_string(bv.numel()) +
                                      " != channels " + std::to_string(ch));
        int64_t inner = x.numel() / (batch * ch);
        Tensor<S> out = x;
        for (int64_t bb = 0; bb < batch; ++bb)
            for (int64_t c = 0; c < ch; ++c) {
                S* p = out.data() + (bb * ch + c) * inner;
                for (int64_t i = 0; i < inner; ++i) p[i] += bv[c];
            }
        return emit(std::move(out), {a.id, b.id}, "add_channel_bias",
                    [batch, ch, inner](Graph& g, int32_t self) {
                        auto& n = g.nodes_[self];
                        g.push_adjoint(n.inputs[0], n.adj.data(), n.adj.size());
                        if (g.tracked(n.inputs[1])) {
                            auto& db = g.adjoint(n.inputs[1]);
                            for (int64_t bb = 0; bb < batch; ++bb)
                                for (int64_t c = 0; c < ch; ++c) {
                                    const S* p = n.adj.data() + size_t((bb * ch + c) * inner);
                                    S s = 0;
                                    for (int64_t i = 0; i < inner; ++i) s += p[i];
                                    db[size_t(c)] += s;
                                }
                        }
                    });
    }

    // The one documented per-frame broadcast: patch (F, N, d) * frame (F, d),
    // frame token f multiplied across that frame's N patch tokens.
    Var mul_frames(Var patch, Var frame) {
        const Tensor<S>& p = node(patch).value;
        const Tensor<S>& f = node(frame).value;
        require(p.rank() == 3, "mul_frames patch tokens must be (F, N, d)");
        require(f.rank() == 2, "mul_frames frame tokens must be (F, d)");
        require(p.extent(0) == f.extent(0),
                "mul_frames frame counts differ: " + shape_str(p.shape()) + " vs " +
                    shape_str(f.shape()));
        require(p.extent(2) == f.extent(1),
                "mul_frames widths differ: " + shape_str(p.shape()) + " vs " +
                    shape_str(f.shape()));
        int64_t F = p.extent(0), N = p.extent(1), d = p.extent(2);
        Tensor<S> out(p.shape());
        for (int64_t ff = 0; ff < F; ++ff)
            for (int64_t nn = 0; nn < N; ++nn)
                for (int64_t k = 0; k < d; ++k)
                    out[(ff * N + nn) * d + k] = p[(ff * N + nn) * d + k] * f[ff * d + k];
        return emit(std::move(out), {patch.id, frame.id}, "mul_frames",
                    [F, N, d](Graph& g, int32_t self) {
                        auto& n = g.nodes_[self];
                        const Tensor<S>& pv = g.nodes_[n.inputs[0]].value;
                        const Tensor<S>& fv = g.nodes_[n.inputs[1]].value;
                        if (g.tracked(n.inputs[0])) {
                            auto& dp = g.adjoint(n.inputs[0]);
                            for (int64_t ff = 0; ff < F; ++ff)
                                for (int64_t nn = 0; nn < N; ++nn)
                                    for (int64_t k = 0; k < d; ++k)
                                        dp[size_t((ff * N + nn) * d + k)] +=
                                            n.adj[size_t((ff * N + nn) * d + k)] * fv[ff * d + k];
                        }
                        if (g.tracked(n.inputs[1])) {
                            auto& df = g.adjoint(n.inputs[1]);
                            for (int64_t ff = 0; ff < F; ++ff)
                                for (int64_t nn = 0; nn < N; ++nn)
                                    for (int64_t k = 0; k < d; ++k)
                                        df[size_t(ff * d + k)] +=
                                            n.adj[size_t((ff * N + nn) * d + k)] *
                                            pv[(ff * N + nn) * d + k];
                        }
                    });
    }

    // ---- convolutions ---------------------------------------------------------

    // x: (B, C, F, H, W), kernel: (O, C, kf, kh, kw), cross-correlation.
    Var conv3d(Var a, Var kernel, std::array<int, 3> stride, std::array<int, 3> pad) {
        const Tensor<S>& x = node(a).value;
        const Tensor<S>& k = node(kernel).value;
        require(x.rank() == 5, "conv3d input must be (B, C, F, H, W), got " + shape_str(x.shape()));
        require(k.rank() == 5, "conv3d kernel must be (O, C, kf, kh, kw), got " + shape_str(k.shape()));
        require(k.extent(1) == x.extent(1),
                "conv3d kernel channels " + std::to_string(k.extent(1)) + " != input channels " +
                    std::to_string(x.extent(1)));
        for (int i = 0; i < 3; ++i) {
            require(stride[i] >= 1 && pad[i] >= 0, "conv3d invalid stride/pad");
            require(k.extent(size_t(2 + i)) <= x.extent(size_t(2 + i)) + 2 * pad[i],
                    "conv3d kernel larger than padded input on axis " + std::to_string(i));
        }
        int64_t B = x.extent(0), C = x.extent(1);
        std::array<int64_t, 3> in = {x.extent(2), x.extent(3), x.extent(4)};
        std::array<int64_t, 3> kd = {k.extent(2), k.extent(3), k.extent(4)};
        int64_t O = k.extent(0);
        std::array<int64_t, 3> od;
        for (int i = 0; i < 3; ++i) od[size_t(i)] = (in[size_t(i)] + 2 * pad[size_t(i)] - kd[size_t(i)]) / stride[size_t(i)] + 1;
        Tensor<S> out(Shape{B, O, od[0], od[1], od[2]});
        conv3d_forward(x, k, out, B, C, O, in, kd, od, stride, pad);
        return emit(std::move(out), {a.id, kernel.id}, "conv3d",
                    [B, C, O, in, kd, od, stride, pad](Graph& g, int32_t self) {
                        auto& n = g.nodes_[self];
                        const Tensor<S>& xv = g.nodes_[n.inputs[0]].value;
                        const Tensor<S>& kv = g.nodes_[n.inputs[1]].value;
                        bool want_x = g.tracked(n.inputs[0]);
                        bool want_k = g.tracked(n.inputs[1]);
                        if (!want_x && !want_k) return;
                        S* dx = want_x ? g.adjoint(n.inputs[0]).data() : nullptr;
                        S* dk = want_k ? g.adjoint(n.inputs[1]).data() : nullptr;
                        for (int64_t b = 0; b < B; ++b)
                            for (int64_t o = 0; o < O; ++o)
                                for (int64_t f = 0; f < od[0]; ++f)
                                    for (int64_t h = 0; h < od[1]; ++h)
                                        for (int64_t w = 0; w < od[2]; ++w) {
                                            S gv = n.adj[size_t(
                                                (((b * O + o) * od[0] + f) * od[1] + h) * od[2] + w)];
                                            if (gv == S(0)) continue;
                                            for (int64_t c = 0; c < C; ++c)
                                                for (int64_t df = 0; df < kd[0]; ++df) {
                                                    int64_t fi = f * stride[0] - pad[0] + df;
                                                    if (fi < 0 || fi >= in[0]) continue;
                                                    for (int64_t dh = 0; dh < kd[1]; ++dh) {
                                                        int64_t hi = h * stride[1] - pad[1] + dh;
                                                        if (hi < 0 || hi >= in[1]) continue;
                                                        for (int64_t dw = 0; dw < kd[2]; ++dw) {
                                                            int64_t wi = w * stride[2] - pad[2] + dw;
                                                            if (wi < 0 || wi >= in[2]) continue;
                                                            size_t xi = size_t(
                                                                (((b * C + c) * in[0] + fi) * in[1] + hi) * in[2] + wi);
                                                            size_t ki = size_t(
                                                                (((o * C + c) * kd[0] + df) * kd[1] + dh) * kd[2] + dw);
                                                            if (dx) dx[xi] += gv * kv[int64_t(ki)];
                                                            if (dk) dk[ki] += gv * xv[int64_t(xi)];
                                                        }
                                                    }
                                                }
                                        }
                    });
    }

    // x: (B, C, F, H, W), kernel: (C, O, kf, kh, kw); output extent per axis is
    // (in-1)*stride - 2*pad + k.
    Var conv_transpose3d(Var a, Var kernel, std::array<int, 3> stride, std::array<int, 3> pad) {
        const Tensor<S>& x = node(a).value;
        const Tensor<S>& k = node(kernel).value;
        require(x.rank() == 5, "conv_transpose3d input must be (B, C, F, H, W)");
        require(k.rank() == 5, "conv_transpose3d kernel must be (C, O, kf, kh, kw)");
        require(k.extent(0) == x.extent(1),
                "conv_transpose3d kernel in-channels " + std::to_string(k.extent(0)) +
                    " != input channels " + std::to_string(x.extent(1)));
        int64_t B = x.extent(0), C = x.extent(1), O = k.extent(1);
        std::array<int64_t, 3> in = {x.extent(2), x.extent(3), x.extent(4)};
        std::array<int64_t, 3> kd = {k.extent(2), k.extent(3), k.extent(4)};
        std::array<int64_t, 3> od;
        for (int i = 0; i < 3; ++i) {
            require(stride[i] >= 1 && pad[i] >= 0, "conv_transpose3d invalid stride/pad");
            od[size_t(i)] = (in[size_t(i)] - 1) * stride[size_t(i)] - 2 * pad[size_t(i)] + kd[size_t(i)];
            require(od[size_t(i)] >= 1, "conv_transpose3d empty output on axis " + std::to_string(i));
        }
        Tensor<S> out(Shape{B, O, od[0], od[1], od[2]});
        for (int64_t b = 0; b < B; ++b)
            for (int64_t c = 0; c < C; ++c)
                for (int64_t f = 0; f < in[0]; ++f)
                    for (int64_t h = 0; h < in[1]; ++h)
                        for (int64_t w = 0; w < in[2]; ++w) {
                            S xv = x[(((b * C + c) * in[0] + f) * in[1] + h) * in[2] + w];
                            if (xv == S(0)) continue;
                            for (int64_t o = 0; o < O; ++o)
                                for (int64_t df = 0; df < kd[0]; ++df) {
                                    int64_t fo = f * stride[0] - pad[0] + df;
                                    if (fo < 0 || fo >= od[0]) continue;
                                    for (int64_t dh = 0; dh < kd[1]; ++dh) {
                                        int64_t ho = h * stride[1] - pad[1] + dh;
                                        if (ho < 0 || ho >= od[1]) continue;
                                        for (int64_t dw = 0; dw < kd[2]; ++dw) {
                                            int64_t wo = w * stride[2] - pad[2] + dw;
                                            if (wo < 0 || wo >= od[2]) continue;
                                            out[(((b * O + o) * od[0] + fo) * od[1] + ho) * od[2] + wo] +=
                                                xv * k[(((c * O + o) * kd[0] + df) * kd[1] + dh) * kd[2] + dw];
                                        }
                                    }
                                }
                        }
        return emit(std::move(out), {a.id, kernel.id}, "conv_transpose3d",
                    [B, C, O, in, kd, od, stride, pad](Graph& g, int32_t self) {
                        auto& n = g.nodes_[self];
                        const Tensor<S>& xv = g.nodes_[n.inputs[0]].value;
                        const Tensor<S>& kv = g.nodes_[n.inputs[1]].value;
                        bool want_x = g.tracked(n.inputs[0]);
                        bool want_k = g.tracked(n.inputs[1]);
                        if (!want_x && !want_k) return;
                        S* dx = want_x ? g.adjoint(n.inputs[0]).data() : nullptr;
                        S* dk = want_k ? g.adjoint(n.inputs[1]).data() : nullptr;
                        for (int64_t b = 0; b < B; ++b)
                            for (int64_t c = 0; c < C; ++c)
                                for (int64_t f = 0; f < in[0]; ++f)
                                    for (int64_t h = 0; h < in[1]; ++h)
                                        for (int64_t w = 0; w < in[2]; ++w) {
                                            size_t xi = size_t(
                                                (((b * C + c) * in[0] + f) * in[1] + h) * in[2] + w);
                                            S acc = 0;
                                            for (int64_t o = 0; o < O; ++o)
                                                for (int64_t df = 0; df < kd[0]; ++df) {
                                                    int64_t fo = f * stride[0] - pad[0] + df;
                                                    if (fo < 0 || fo >= od[0]) continue;
                                                    for (int64_t dh = 0; dh < kd[1]; ++dh) {
                                                        int64_t ho = h * stride[1] - pad[1] + dh;
                                                        if (ho < 0 || ho >= od[1]) continue;
                                                        for (int64_t dw = 0; dw < kd[2]; ++dw) {
                                                            int64_t wo = w * stride[2] - pad[2] + dw;
                                                            if (wo < 0 || wo >= od[2]) continue;
                                                            size_t oi = size_t(
                                                                (((b * O + o) * od[0] + fo) * od[1] + ho) * od[2] + wo);
                                                            size_t ki = size_t(
                                                                (((c * O + o) * kd[0] + df) * kd[1] + dh) * kd[2] + dw);
                                                            S gv = n.adj[oi];
                                                            acc += gv * kv[int64_t(ki)];
                                                            if (dk) dk[ki] += gv * xv[int64_t(xi)];
                                                        }
                                                    }
                                                }
                                            if (dx) dx[xi] += acc;
                                        }
                    });
    }

    // x: (B, C, H, W), kernel: (O, C); per-pixel linear map across channels.
    Var conv1x1(Var a, Var kernel) {
        const Tensor<S>& x = node(a).value;
        const Tensor<S>& k = node(kernel).value;
        require(x.rank() == 4, "conv1x1 input must be (B, C, H, W), got " + shape_str(x.shape()));
        require(k.rank() == 2, "conv1x1 kernel must be (O, C), got " + shape_str(k.shape()));
        require(k.extent(1) == x.extent(1),
                "conv1x1 channel mismatch: kernel " + shape_str(k.shape()) + " input " +
                    shape_str(x.shape()));
        int64_t B = x.extent(0), C = x.extent(1), H = x.extent(2), W = x.extent(3);
        int64_t O = k.extent(0), hw = H * W;
        Tensor<S> out(Shape{B, O, H, W});
        for (int64_t b = 0; b < B; ++b)
            for (int64_t o = 0; o < O; ++o)
                for (int64_t c = 0; c < C; ++c) {
                    S kv = k[o * C + c];
                    if (kv == S(0)) continue;
                    const S* xp = x.data() + (b * C + c) * hw;
                    S* op = out.data() + (b * O + o) * hw;
                    for (int64_t i = 0; i < hw; ++i) op[i] += kv * xp[i];
                }
        return emit(std::move(out), {a.id, kernel.id}, "conv1x1",
                    [B, C, O, hw](Graph& g, int32_t self) {
                        auto& n = g.nodes_[self];
                        const Tensor<S>& xv = g.nodes_[n.inputs[0]].value;
                        const Tensor<S>& kv = g.nodes_[n.inputs[1]].value;
                        if (g.tracked(n.inputs[0])) {
                            auto& dx = g.adjoint(n.inputs[0]);
                            for (int64_t b = 0; b < B; ++b)
                                for (int64_t o = 0; o < O; ++o)
                                    for (int64_t c = 0; c < C; ++c) {
                                        S kk = kv[o * C + c];
                                        if (kk == S(0)) continue;
                                        const S* gp = n.adj.data() + size_t((b * O + o) * hw);
                                        S* dp = dx.data() + size_t((b * C + c) * hw);
                                        for (int64_t i = 0; i < hw; ++i) dp[i] += kk * gp[i];
                                    }
                        }
                        if (g.tracked(n.inputs[1])) {
                            auto& dk = g.adjoint(n.inputs[1]);
                            for (int64_t b = 0; b < B; ++b)
                                for (int64_t o = 0; o < O; ++o)
                                    for (int64_t c = 0; c < C; ++c) {
                                        const S* gp = n.adj.data() + size_t((b * O + o) * hw);
                                        const S* xp = xv.data() + (b * C + c) * hw;
                                        S s = 0;
                                        for (int64_t i = 0; i < hw; ++i) s += gp[i] * xp[i];
                                        dk[size_t(o * C + c)] += s;
                                    }
                        }
                    });
    }

    // ---- backward ------------------------------------------------------------

    // Populates grad on every requires_grad leaf reachable from loss.
    void backward(Var loss) {
        if (!loss.valid() || size_t(loss.id) >= nodes_.size())
            throw ContractError("backward: invalid loss var");
        if (node(loss).value.numel() != 1)
            throw ContractError("backward: loss must be scalar, got " +
                                shape_str(node(loss).value.shape()));
        if (backward_done_)
            throw StateError("backward called twice without a new forward pass");
        backward_done_ = true;
        adjoint(loss.id)[0] = S(1);
        for (int32_t i = loss.id; i >= 0; --i) {
            Node& n = nodes_[size_t(i)];
            if (!n.track || n.adj.empty()) continue;
            if (n.param) {
                n.param->ensure_grad();
                for (size_t j = 0; j < n.adj.size(); ++j) n.param->grad[j] += n.adj[j];
            } else if (n.bw) {
                n.bw(*this, i);
            }
        }
    }

private:
    struct Node {
        Tensor<S> value;
        std::vector<int32_t> inputs;
        std::function<void(Graph&, int32_t)> bw;
        Tensor<S>* param = nullptr;
        std::vector<S> adj;
        const char* op = "";
        bool track = false;
    };

    const Node& node(Var v) const { return nodes_.at(size_t(v.id)); }
    Node& node(Var v) { return nodes_.at(size_t(v.id)); }
    bool tracked(int32_t id) const { return nodes_[size_t(id)].track; }

    std::vector<S>& adjoint(int32_t id) {
        Node& n = nodes_[size_t(id)];
        if (n.adj.empty()) n.adj.assign(size_t(n.value.numel()), S(0));
        return n.adj;
    }

    void push_adjoint(int32_t id, const S* src, size_t len) {
        if (!tracked(id)) return;
        auto& dst = adjoint(id);
        for (size_t i = 0; i < len; ++i) dst[i] += src[i];
    }

    void same_shape(const char* op, Var a, Var b) const {
        if (node(a).value.shape() != node(b).value.shape())
            throw DimError(std::string(op) + ": shapes differ, " + shape_str(node(a).value.shape()) +
                           " vs " + shape_str(node(b).value.shape()));
    }

    Var emit(Tensor<S> out, std::vector<int32_t> inputs, const char* op,
             std::function<void(Graph&, int32_t)> bw) {
        if (!out.all_finite())
            throw NumericError(std::string("non-finite value produced by op '") + op + "'");
        Node n;
        n.value = std::move(out);
        n.inputs = std::move(inputs);
        n.op = op;
        for (int32_t in : n.inputs)
            if (tracked(in)) n.track = true;
        if (n.track) n.bw = std::move(bw);
        nodes_.push_back(std::move(n));
        return Var{int32_t(nodes_.size() - 1)};
    }

    static void conv3d_forward(const Tensor<S>& x, const Tensor<S>& k, Tensor<S>& out, int64_t B,
                               int64_t C, int64_t O, std::array<int64_t, 3> in,
                               std::array<int64_t, 3> kd, std::array<int64_t, 3> od,
                               std::array<int, 3> stride, std::array<int, 3> pad) {
        for (int64_t b = 0; b < B; ++b)
            for (int64_t o = 0; o < O; ++o)
                for (int64_t f = 0; f < od[0]; ++f)
                    for (int64_t h = 0; h < od[1]; ++h)
                        for (int64_t w = 0; w < od[2]; ++w) {
                            S acc = 0;
                            for (int64_t c = 0; c < C; ++c)
                                for (int64_t df = 0; df < kd[0]; ++df) {
                                    int64_t fi = f * stride[0] - pad[0] + df;
                                    if (fi < 0 || fi >= in[0]) continue;
                                    for (int64_t dh = 0; dh < kd[1]; ++dh) {
                                        int64_t hi = h * stride[1] - pad[1] + dh;
                                        if (hi < 0 || hi >= in[1]) continue;
                                        for (int64_t dw = 0; dw < kd[2]; ++dw) {
                                            int64_t wi = w * stride[2] - pad[2] + dw;
                                            if (wi < 0 || wi >= in[2]) continue;
                                            acc += x[(((b * C + c) * in[0] + fi) * in[1] + hi) * in[2] + wi] *
                                                   k[(((o * C + c) * kd[0] + df) * kd[1] + dh) * kd[2] + dw];
                                        }
                                    }
                                }
                            out[(((b * O + o) * od[0] + f) * od[1] + h) * od[2] + w] = acc;
                        }
    }

    std::vector<Node> nodes_;
    bool backward_done_ = false;
};

}  // namespace apla
