#pragma once

#include <cstdint>
#include <initializer_list>
#include <numeric>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace viplan {

using Shape = std::vector<int>;

inline long long shape_numel(const Shape& s) {
    long long n = 1;
    for (int d : s) {
        if (d <= 0) throw std::invalid_argument("array: non-positive dimension in shape");
        n *= d;
    }
    return n;
}

inline std::string shape_str(const Shape& s) {
    std::ostringstream os;
    os << '[';
    for (size_t i = 0; i < s.size(); ++i) os << (i ? "," : "") << s[i];
    os << ']';
    return os.str();
}

inline std::vector<long long> row_major_strides(const Shape& s) {
    std::vector<long long> st(s.size(), 1);
    for (int i = static_cast<int>(s.size()) - 2; i >= 0; --i) st[i] = st[i + 1] * s[i + 1];
    return st;
}

/// Dense row-major array of doubles. The one value type everything else
/// (autodiff tape, rasters, checkpoints) is built from.
struct Array {
    Shape shape;
    std::vector<double> data;

    Array() = default;
    explicit Array(Shape s, double fill = 0.0)
        : shape(std::move(s)), data(static_cast<size_t>(shape_numel(shape)), fill) {}
    Array(Shape s, std::vector<double> d) : shape(std::move(s)), data(std::move(d)) {
        if (static_cast<long long>(data.size()) != shape_numel(shape))
            throw std::invalid_argument("array: data length does not match shape " + shape_str(shape));
    }

    static Array scalar(double v) { return Array{Shape{1}, std::vector<double>{v}}; }

    int ndim() const { return static_cast<int>(shape.size()); }
    long long size() const { return static_cast<long long>(data.size()); }

    double& operator[](long long i) { return data[static_cast<size_t>(i)]; }
    double operator[](long long i) const { return data[static_cast<size_t>(i)]; }

    double& at(std::initializer_list<int> idx) { return data[static_cast<size_t>(offset(idx))]; }
    double at(std::initializer_list<int> idx) const { return data[static_cast<size_t>(offset(idx))]; }

    long long offset(std::initializer_list<int> idx) const {
        if (static_cast<int>(idx.size()) != ndim())
            throw std::invalid_argument("array: index rank mismatch for shape " + shape_str(shape));
        long long off = 0, stride = 1;
        auto it = idx.end();
        for (int d = ndim() - 1; d >= 0; --d) {
            int i = *(--it);
            if (i < 0 || i >= shape[d]) throw std::out_of_range("array: index out of range");
            off += stride * i;
            stride *= shape[d];
        }
        return off;
    }
};

inline bool same_shape(const Shape& a, const Shape& b) { return a == b; }

/// FNV-1a over raw bytes; used for dataset/run determinism checks.
inline uint64_t fnv1a(const void* p, size_t n, uint64_t h = 1469598103934665603ull) {
    const auto* b = static_cast<const unsigned char*>(p);
    for (size_t i = 0; i < n; ++i) {
        h ^= b[i];
        h *= 1099511628211ull;
    }
    return h;
}

inline uint64_t fnv1a(const std::string& s, uint64_t h = 1469598103934665603ull) {
    return fnv1a(s.data(), s.size(), h);
}

}  // namespace viplan
