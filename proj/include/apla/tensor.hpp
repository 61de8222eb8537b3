#pragma once

// Dense row-major tensor, error taxonomy and deterministic RNG used by the
// whole library. Scalar type S is double in test mode and float in run mode.

#include <cmath>
#include <cstdint>
#include <numeric>
#include <random>
#include <sstream>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

namespace apla {

struct Error : std::runtime_error {
    using std::runtime_error::runtime_error;
};
// Shape/extent violations (matmul inner extents, conv kernel too large, ...).
struct DimError : Error {
    using Error::Error;
};
// Caller broke an operation precondition (out-of-range step, bad prompt id).
struct ContractError : Error {
    using Error::Error;
};
// Object is in the wrong state for the call (double backward).
struct StateError : Error {
    using Error::Error;
};
// Invalid configuration values.
struct ConfigError : Error {
    using Error::Error;
};
// Malformed file contents.
struct FormatError : Error {
    using Error::Error;
};
// NaN/Inf detected; numerical failure.
struct NumericError : Error {
    using Error::Error;
};

using Shape = std::vector<int64_t>;

inline int64_t numel(const Shape& shape) {
    int64_t n = 1;
    for (int64_t e : shape) n *= e;
    return n;
}

inline std::string shape_str(const Shape& shape) {
    std::string s = "[";
    for (size_t i = 0; i < shape.size(); ++i) {
        if (i) s += "x";
        s += std::to_string(shape[i]);
    }
    return s + "]";
}

inline void require(bool ok, const std::string& msg) {
    if (!ok) throw DimError(msg);
}

template <typename S>
class Tensor {
public:
    Tensor() = default;
    explicit Tensor(Shape shape, S fill = S(0))
        : shape_(std::move(shape)), data_(static_cast<size_t>(apla::numel(shape_)), fill) {
        check_extents();
    }
    Tensor(Shape shape, std::vector<S> data) : shape_(std::move(shape)), data_(std::move(data)) {
        check_extents();
        if (static_cast<int64_t>(data_.size()) != apla::numel(shape_))
            throw DimError("tensor data length " + std::to_string(data_.size()) +
                           " does not match shape " + shape_str(shape_));
    }
    static Tensor scalar(S v) { return Tensor(Shape{1}, std::vector<S>{v}); }

    const Shape& shape() const { return shape_; }
    int64_t extent(size_t axis) const { return shape_.at(axis); }
    size_t rank() const { return shape_.size(); }
    int64_t numel() const { return static_cast<int64_t>(data_.size()); }

    S* data() { return data_.data(); }
    const S* data() const { return data_.data(); }
    S& operator[](int64_t i) { return data_[static_cast<size_t>(i)]; }
    const S& operator[](int64_t i) const { return data_[static_cast<size_t>(i)]; }
    std::vector<S>& buffer() { return data_; }
    const std::vector<S>& buffer() const { return data_; }

    // Gradient buffer, lazily allocated to match data.
    bool requires_grad = false;
    std::vector<S> grad;

    void ensure_grad() {
        if (grad.size() != data_.size()) grad.assign(data_.size(), S(0));
    }
    void zero_grad() { grad.assign(data_.size(), S(0)); }

    Tensor reshaped(Shape new_shape) const {
        if (apla::numel(new_shape) != numel())
            throw DimError("reshape " + shape_str(shape_) + " -> " + shape_str(new_shape) +
                           " changes element count");
        Tensor out = *this;
        out.shape_ = std::move(new_shape);
        return out;
    }

    void fill(S v) { data_.assign(data_.size(), v); }

    bool all_finite() const {
        for (S v : data_)
            if (!std::isfinite(static_cast<double>(v))) return false;
        return true;
    }

private:
    void check_extents() const {
        for (int64_t e : shape_)
            if (e <= 0) throw DimError("non-positive extent in shape " + shape_str(shape_));
    }

    Shape shape_;
    std::vector<S> data_;
};

// Deterministic RNG. Box-Muller without the cached second branch so the whole
// state lives in the engine and serializes cleanly into checkpoints.
class Rng {
public:
    explicit Rng(uint64_t seed = 0) : eng_(seed) {}

    double uniform() {  // [0, 1)
        return static_cast<double>(eng_() >> 11) * 0x1.0p-53;
    }
    double normal() {
        double u1 = 1.0 - uniform();  // (0, 1]
        double u2 = uniform();
        return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * 3.14159265358979323846 * u2);
    }
    int64_t uniform_int(int64_t lo, int64_t hi) {  // inclusive bounds
        if (lo > hi) throw ContractError("uniform_int: empty range");
        uint64_t span = static_cast<uint64_t>(hi - lo) + 1;
        return lo + static_cast<int64_t>(eng_() % span);
    }

    std::string save_state() const {
        std::ostringstream os;
        os << eng_;
        return os.str();
    }
    void load_state(const std::string& s) {
        std::istringstream is(s);
        is >> eng_;
        if (!is) throw FormatError("bad rng state string");
    }

private:
    std::mt19937_64 eng_;
};

// Named views over a model's trainable tensors; the names key checkpoints.
template <typename S>
using NamedParams = std::vector<std::pair<std::string, Tensor<S>*>>;

template <typename S>
int64_t total_numel(const NamedParams<S>& params) {
    int64_t n = 0;
    for (auto& [name, t] : params) n += t->numel();
    return n;
}

template <typename S>
void fill_normal(Tensor<S>& t, Rng& rng, double scale = 1.0) {
    for (int64_t i = 0; i < t.numel(); ++i) t[i] = static_cast<S>(rng.normal() * scale);
}

template <typename S>
void fill_uniform(Tensor<S>& t, Rng& rng, double lo = 0.0, double hi = 1.0) {
    for (int64_t i = 0; i < t.numel(); ++i)
        t[i] = static_cast<S>(lo + (hi - lo) * rng.uniform());
}

template <typename S>
double l2_norm(const Tensor<S>& t) {
    double s = 0;
    for (int64_t i = 0; i < t.numel(); ++i) s += double(t[i]) * double(t[i]);
    return std::sqrt(s);
}

template <typename S>
double max_abs_diff(const Tensor<S>& a, const Tensor<S>& b) {
    if (a.shape() != b.shape())
        throw DimError("max_abs_diff shapes differ: " + shape_str(a.shape()) + " vs " +
                       shape_str(b.shape()));
    double m = 0;
    for (int64_t i = 0; i < a.numel(); ++i)
        m = std::max(m, std::abs(double(a[i]) - double(b[i])));
    return m;
}

}  // namespace apla
