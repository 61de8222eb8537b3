#pragma once

// Sinusoidal step embedding shared by the denoiser and the transformer:
// interleaved sin/cos over geometrically spaced frequencies. Deterministic in
// (t, dim), no parameters; distinct for every t in any practical step range.

#include "apla/tensor.hpp"

namespace apla {

template <typename S>
Tensor<S> sinusoidal_embedding(int64_t t, int64_t dim) {
    if (dim < 2 || dim % 2 != 0) throw ConfigError("embedding width must be even and >= 2");
    Tensor<S> e(Shape{dim});
    int64_t half = dim / 2;
    for (int64_t i = 0; i < half; ++i) {
        double freq = std::exp(-std::log(10000.0) * double(i) / double(half));
        e[2 * i] = S(std::sin(double(t) * freq));
        e[2 * i + 1] = S(std::cos(double(t) * freq));
    }
    return e;
}

}  // namespace apla
