#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <functional>
#include <stdexcept>
#include <string>
#include <vector>

#include "viplan/array.hpp"

// Reverse-mode autodiff over dense double arrays. Dynamic tape: every
// builder computes its output eagerly and records what backward needs.
// Broadcasting is deliberately narrow: equal rank, each axis equal or 1;
// anything else requires an explicit reshape.

namespace viplan::ad {

enum class OpKind : uint8_t {
    Leaf,
    Add, Sub, Mul, Div,
    Neg, Exp, Log, Tanh, Sigmoid, Sin, Cos, Abs, Relu, WrapAngle,
    PowC, AddC, MulC, MaxC, MinC,
    SumAll, MeanAll, SumAxis, MaxAxis, LogSumExp, Softmax,
    Reshape, Concat, Slice, Transpose2D,
    MatMul, Conv2D,
    ShiftGather, ShiftScatter,
    BilinearRead,
};

inline const char* op_name(OpKind k) {
    switch (k) {
        case OpKind::Leaf: return "leaf";
        case OpKind::Add: return "add";
        case OpKind::Sub: return "sub";
        case OpKind::Mul: return "mul";
        case OpKind::Div: return "div";
        case OpKind::Neg: return "neg";
        case OpKind::Exp: return "exp";
        case OpKind::Log: return "log";
        case OpKind::Tanh: return "tanh";
        case OpKind::Sigmoid: return "sigmoid";
        case OpKind::Sin: return "sin";
        case OpKind::Cos: return "cos";
        case OpKind::Abs: return "abs";
        case OpKind::Relu: return "relu";
        case OpKind::WrapAngle: return "wrap_angle";
        case OpKind::PowC: return "pow_const";
        case OpKind::AddC: return "add_const";
        case OpKind::MulC: return "mul_const";
        case OpKind::MaxC: return "max_const";
        case OpKind::MinC: return "min_const";
        case OpKind::SumAll: return "sum";
        case OpKind::MeanAll: return "mean";
        case OpKind::SumAxis: return "sum_axis";
        case OpKind::MaxAxis: return "max_axis";
        case OpKind::LogSumExp: return "log_sum_exp";
        case OpKind::Softmax: return "softmax";
        case OpKind::Reshape: return "reshape";
        case OpKind::Concat: return "concat";
        case OpKind::Slice: return "slice";
        case OpKind::Transpose2D: return "transpose2d";
        case OpKind::MatMul: return "matmul";
        case OpKind::Conv2D: return "conv2d";
        case OpKind::ShiftGather: return "shift_gather";
        case OpKind::ShiftScatter: return "shift_scatter";
        case OpKind::BilinearRead: return "bilinear_read";
    }
    return "?";
}

enum class Pad : uint8_t { Same, Valid };

class Tape;

/// Handle into a Tape node.
struct Value {
    Tape* tape = nullptr;
    int id = -1;
    bool valid() const { return tape != nullptr && id >= 0; }
};

struct Node {
    OpKind kind = OpKind::Leaf;
    int in0 = -1, in1 = -1, in2 = -1;
    std::vector<int> extra_in;        // concat operands
    Array out;
    std::vector<double> grad;         // sized during backward
    bool requires_grad = false;
    double c0 = 0.0, c1 = 0.0;        // op constants
    int i0 = 0, i1 = 0;               // axis / shifts / pad mode
    std::vector<int> v0, v1;          // slice offsets / sizes
};

class Tape {
  public:
    // ----- construction -----

    Value leaf(const Array& a, bool requires_grad = false) {
        Node n;
        n.kind = OpKind::Leaf;
        n.out = a;
        n.requires_grad = requires_grad;
        return push(std::move(n));
    }

    Value constant(const Array& a) { return leaf(a, false); }
    Value scalar(double v) { return leaf(Array::scalar(v), false); }

    // ----- elementwise binary (broadcast: equal rank, axes equal or 1) -----

    Value add(Value a, Value b) { return binary(OpKind::Add, a, b); }
    Value sub(Value a, Value b) { return binary(OpKind::Sub, a, b); }
    Value mul(Value a, Value b) { return binary(OpKind::Mul, a, b); }
    Value div(Value a, Value b) { return binary(OpKind::Div, a, b); }

    // ----- elementwise unary -----

    Value neg(Value x) { return unary(OpKind::Neg, x, [](double v) { return -v; }); }
    Value exp(Value x) { return unary(OpKind::Exp, x, [](double v) { return std::exp(v); }); }
    Value log(Value x) { return unary(OpKind::Log, x, [](double v) { return std::log(v); }); }
    Value tanh(Value x) { return unary(OpKind::Tanh, x, [](double v) { return std::tanh(v); }); }
    Value sigmoid(Value x) {
        return unary(OpKind::Sigmoid, x, [](double v) {
            if (v >= 0) return 1.0 / (1.0 + std::exp(-v));
            double e = std::exp(v);
            return e / (1.0 + e);
        });
    }
    Value sin(Value x) { return unary(OpKind::Sin, x, [](double v) { return std::sin(v); }); }
    Value cos(Value x) { return unary(OpKind::Cos, x, [](double v) { return std::cos(v); }); }
    Value abs(Value x) { return unary(OpKind::Abs, x, [](double v) { return std::fabs(v); }); }
    Value relu(Value x) { return unary(OpKind::Relu, x, [](double v) { return v > 0 ? v : 0.0; }); }

    /// Wrap angles to (-pi, pi]. Gradient is 1 almost everywhere.
    Value wrap_angle(Value x) {
        return unary(OpKind::WrapAngle, x, [](double v) {
            constexpr double two_pi = 6.283185307179586476925286766559;
            return v - two_pi * std::ceil((v - 3.1415926535897932384626433832795) / two_pi);
        });
    }

    Value pow_const(Value x, double p) {
        return unary(OpKind::PowC, x, [p](double v) { return std::pow(v, p); }, p);
    }
    Value add_const(Value x, double c) {
        return unary(OpKind::AddC, x, [c](double v) { return v + c; }, c);
    }
    Value mul_const(Value x, double c) {
        return unary(OpKind::MulC, x, [c](double v) { return v * c; }, c);
    }
    Value max_const(Value x, double c) {
        return unary(OpKind::MaxC, x, [c](double v) { return v > c ? v : c; }, c);
    }
    Value min_const(Value x, double c) {
        return unary(OpKind::MinC, x, [c](double v) { return v < c ? v : c; }, c);
    }
    Value square(Value x) { return pow_const(x, 2.0); }

    // ----- reductions -----

    Value sum(Value x) {
        const Node& nx = at(x);
        double acc = 0.0;
        for (double v : nx.out.data) acc += v;
        Node n = make(OpKind::SumAll, x);
        n.out = Array::scalar(acc);
        return push(std::move(n));
    }

    Value mean(Value x) {
        const Node& nx = at(x);
        double acc = 0.0;
        for (double v : nx.out.data) acc += v;
        Node n = make(OpKind::MeanAll, x);
        n.out = Array::scalar(acc / static_cast<double>(nx.out.size()));
        return push(std::move(n));
    }

    Value sum_axis(Value x, int axis) {
        ReduceDims rd = reduce_dims(x, axis, "sum_axis");
        Node n = make(OpKind::SumAxis, x);
        n.i0 = axis;
        n.out = Array(rd.out_shape);
        const Node& nx = at(x);
        for (long long o = 0; o < rd.outer; ++o)
            for (long long i = 0; i < rd.inner; ++i) {
                double acc = 0.0;
                for (long long k = 0; k < rd.n; ++k)
                    acc += nx.out.data[(o * rd.n + k) * rd.inner + i];
                n.out.data[o * rd.inner + i] = acc;
            }
        return push(std::move(n));
    }

    Value mean_axis(Value x, int axis) {
        int n = at(x).out.shape[static_cast<size_t>(check_axis(x, axis, "mean_axis"))];
        return mul_const(sum_axis(x, axis), 1.0 / n);
    }

    Value max_axis(Value x, int axis) {
        ReduceDims rd = reduce_dims(x, axis, "max_axis");
        Node n = make(OpKind::MaxAxis, x);
        n.i0 = axis;
        n.out = Array(rd.out_shape);
        const Node& nx = at(x);
        for (long long o = 0; o < rd.outer; ++o)
            for (long long i = 0; i < rd.inner; ++i) {
                double best = nx.out.data[(o * rd.n) * rd.inner + i];
                for (long long k = 1; k < rd.n; ++k)
                    best = std::max(best, nx.out.data[(o * rd.n + k) * rd.inner + i]);
                n.out.data[o * rd.inner + i] = best;
            }
        return push(std::move(n));
    }

    /// log(sum(exp(x))) along one axis, max-subtracted for overflow safety.
    Value log_sum_exp(Value x, int axis) {
        ReduceDims rd = reduce_dims(x, axis, "log_sum_exp");
        Node n = make(OpKind::LogSumExp, x);
        n.i0 = axis;
        n.out = Array(rd.out_shape);
        const Node& nx = at(x);
        for (long long o = 0; o < rd.outer; ++o)
            for (long long i = 0; i < rd.inner; ++i) {
                double m = nx.out.data[(o * rd.n) * rd.inner + i];
                for (long long k = 1; k < rd.n; ++k)
                    m = std::max(m, nx.out.data[(o * rd.n + k) * rd.inner + i]);
                double acc = 0.0;
                for (long long k = 0; k < rd.n; ++k)
                    acc += std::exp(nx.out.data[(o * rd.n + k) * rd.inner + i] - m);
                n.out.data[o * rd.inner + i] = m + std::log(acc);
            }
        return push(std::move(n));
    }

    Value softmax(Value x, int axis) {
        ReduceDims rd = reduce_dims(x, axis, "softmax");
        Node n = make(OpKind::Softmax, x);
        n.i0 = axis;
        n.out = Array(at(x).out.shape);
        const Node& nx = at(x);
        for (long long o = 0; o < rd.outer; ++o)
            for (long long i = 0; i < rd.inner; ++i) {
                double m = nx.out.data[(o * rd.n) * rd.inner + i];
                for (long long k = 1; k < rd.n; ++k)
                    m = std::max(m, nx.out.data[(o * rd.n + k) * rd.inner + i]);
                double acc = 0.0;
                for (long long k = 0; k < rd.n; ++k)
                    acc += std::exp(nx.out.data[(o * rd.n + k) * rd.inner + i] - m);
                for (long long k = 0; k < rd.n; ++k) {
                    long long idx = (o * rd.n + k) * rd.inner + i;
                    n.out.data[idx] = std::exp(nx.out.data[idx] - m) / acc;
                }
            }
        return push(std::move(n));
    }

    // ----- shaping -----

    Value reshape(Value x, Shape s) {
        const Node& nx = at(x);
        if (shape_numel(s) != nx.out.size())
            fail("reshape", "cannot reshape " + shape_str(nx.out.shape) + " to " + shape_str(s));
        Node n = make(OpKind::Reshape, x);
        n.out = Array(std::move(s), nx.out.data);
        return push(std::move(n));
    }

    Value concat(const std::vector<Value>& parts, int axis) {
        if (parts.empty()) fail("concat", "no operands");
        Shape base = at(parts[0]).out.shape;
        if (axis < 0 || axis >= static_cast<int>(base.size())) fail("concat", "bad axis");
        int total = 0;
        for (Value p : parts) {
            const Shape& s = at(p).out.shape;
            if (s.size() != base.size()) fail("concat", "rank mismatch");
            for (size_t d = 0; d < s.size(); ++d)
                if (static_cast<int>(d) != axis && s[d] != base[d])
                    fail("concat", "shape mismatch " + shape_str(s) + " vs " + shape_str(base));
            total += s[static_cast<size_t>(axis)];
        }
        Shape out_shape = base;
        out_shape[static_cast<size_t>(axis)] = total;
        Node n;
        n.kind = OpKind::Concat;
        n.i0 = axis;
        n.out = Array(out_shape);
        long long outer = 1, inner = 1;
        for (int d = 0; d < axis; ++d) outer *= base[static_cast<size_t>(d)];
        for (size_t d = static_cast<size_t>(axis) + 1; d < base.size(); ++d) inner *= base[d];
        long long pos = 0;
        for (Value p : parts) {
            const Node& np = at(p);
            n.extra_in.push_back(p.id);
            n.requires_grad = n.requires_grad || np.requires_grad;
            long long na = np.out.shape[static_cast<size_t>(axis)];
            for (long long o = 0; o < outer; ++o)
                std::copy_n(np.out.data.data() + o * na * inner, na * inner,
                            n.out.data.data() + (o * total + pos) * inner);
            pos += na;
        }
        return push(std::move(n));
    }

    Value slice(Value x, const std::vector<int>& offsets, const std::vector<int>& sizes) {
        const Node& nx = at(x);
        const Shape& s = nx.out.shape;
        if (offsets.size() != s.size() || sizes.size() != s.size())
            fail("slice", "rank mismatch for shape " + shape_str(s));
        for (size_t d = 0; d < s.size(); ++d)
            if (offsets[d] < 0 || sizes[d] <= 0 || offsets[d] + sizes[d] > s[d])
                fail("slice", "range out of bounds on axis " + std::to_string(d));
        Node n = make(OpKind::Slice, x);
        n.v0 = offsets;
        n.v1 = sizes;
        n.out = Array(Shape(sizes.begin(), sizes.end()));
        auto src_strides = row_major_strides(s);
        copy_region(nx.out.data.data(), src_strides, offsets, n.out.data.data(), sizes);
        return push(std::move(n));
    }

    Value transpose2d(Value x) {
        const Node& nx = at(x);
        if (nx.out.ndim() != 2) fail("transpose2d", "needs a 2-d input");
        int r = nx.out.shape[0], c = nx.out.shape[1];
        Node n = make(OpKind::Transpose2D, x);
        n.out = Array(Shape{c, r});
        for (int i = 0; i < r; ++i)
            for (int j = 0; j < c; ++j) n.out.data[static_cast<size_t>(j) * r + i] = nx.out.data[static_cast<size_t>(i) * c + j];
        return push(std::move(n));
    }

    // ----- linear algebra / convolution -----

    Value matmul(Value a, Value b) {
        const Node& na = at(a);
        const Node& nb = at(b);
        if (na.out.ndim() != 2 || nb.out.ndim() != 2 || na.out.shape[1] != nb.out.shape[0])
            fail("matmul", "incompatible shapes " + shape_str(na.out.shape) + " x " + shape_str(nb.out.shape));
        int m = na.out.shape[0], k = na.out.shape[1], p = nb.out.shape[1];
        Node n = make2(OpKind::MatMul, a, b);
        n.out = Array(Shape{m, p});
        matmul_kernel(na.out.data.data(), nb.out.data.data(), n.out.data.data(), m, k, p, false, false);
        return push(std::move(n));
    }

    /// 2-D convolution (cross-correlation), stride 1.
    /// input [Cin,H,W], weight [Cout,Cin,kh,kw] with odd kernels for Same.
    Value conv2d(Value input, Value weight, Pad pad) {
        const Node& ni = at(input);
        const Node& nw = at(weight);
        if (ni.out.ndim() != 3 || nw.out.ndim() != 4)
            fail("conv2d", "expects input [C,H,W], weight [Co,Ci,kh,kw]");
        int ci = ni.out.shape[0], h = ni.out.shape[1], w = ni.out.shape[2];
        int co = nw.out.shape[0], wci = nw.out.shape[1], kh = nw.out.shape[2], kw = nw.out.shape[3];
        if (wci != ci) fail("conv2d", "channel mismatch " + shape_str(ni.out.shape) + " vs " + shape_str(nw.out.shape));
        if (pad == Pad::Same && (kh % 2 == 0 || kw % 2 == 0)) fail("conv2d", "same padding needs odd kernels");
        int ph = pad == Pad::Same ? (kh - 1) / 2 : 0;
        int pw = pad == Pad::Same ? (kw - 1) / 2 : 0;
        int oh = h + 2 * ph - kh + 1, ow = w + 2 * pw - kw + 1;
        if (oh <= 0 || ow <= 0) fail("conv2d", "kernel larger than input");
        Node n = make2(OpKind::Conv2D, input, weight);
        n.i0 = pad == Pad::Same ? 0 : 1;
        n.out = Array(Shape{co, oh, ow});
        const double* in = ni.out.data.data();
        const double* wt = nw.out.data.data();
        double* out = n.out.data.data();
        for (int oc = 0; oc < co; ++oc)
            for (int oy = 0; oy < oh; ++oy)
                for (int ox = 0; ox < ow; ++ox) {
                    double acc = 0.0;
                    for (int ic = 0; ic < ci; ++ic)
                        for (int ky = 0; ky < kh; ++ky) {
                            int iy = oy + ky - ph;
                            if (iy < 0 || iy >= h) continue;
                            const double* irow = in + (static_cast<long long>(ic) * h + iy) * w;
                            const double* wrow = wt + ((static_cast<long long>(oc) * ci + ic) * kh + ky) * kw;
                            for (int kx = 0; kx < kw; ++kx) {
                                int ix = ox + kx - pw;
                                if (ix < 0 || ix >= w) continue;
                                acc += irow[ix] * wrow[kx];
                            }
                        }
                    out[(static_cast<long long>(oc) * oh + oy) * ow + ox] = acc;
                }
        return push(std::move(n));
    }

    // ----- grid shifts (the 9-action transition kernel) -----

    /// out(r,c) = in(r+dr, c+dc) when the source is in bounds, else in(r,c).
    /// Off-grid moves read the cell itself, i.e. boundary self-transitions.
    Value shift_gather(Value x, int dr, int dc) {
        const Node& nx = at(x);
        if (nx.out.ndim() != 2) fail("shift_gather", "needs a 2-d input");
        int h = nx.out.shape[0], w = nx.out.shape[1];
        Node n = make(OpKind::ShiftGather, x);
        n.i0 = dr;
        n.i1 = dc;
        n.out = Array(Shape{h, w});
        for (int r = 0; r < h; ++r)
            for (int c = 0; c < w; ++c) {
                int sr = r + dr, sc = c + dc;
                bool in = sr >= 0 && sr < h && sc >= 0 && sc < w;
                n.out.data[static_cast<size_t>(r) * w + c] =
                    in ? nx.out.data[static_cast<size_t>(sr) * w + sc] : nx.out.data[static_cast<size_t>(r) * w + c];
            }
        return push(std::move(n));
    }

    /// out(r+dr, c+dc) += in(r,c) when the target is in bounds, else out(r,c) += in(r,c).
    /// Adjoint of shift_gather with the same offsets; pushes SVF mass forward.
    Value shift_scatter(Value x, int dr, int dc) {
        const Node& nx = at(x);
        if (nx.out.ndim() != 2) fail("shift_scatter", "needs a 2-d input");
        int h = nx.out.shape[0], w = nx.out.shape[1];
        Node n = make(OpKind::ShiftScatter, x);
        n.i0 = dr;
        n.i1 = dc;
        n.out = Array(Shape{h, w});
        for (int r = 0; r < h; ++r)
            for (int c = 0; c < w; ++c) {
                int tr = r + dr, tc = c + dc;
                bool in = tr >= 0 && tr < h && tc >= 0 && tc < w;
                size_t dst = in ? static_cast<size_t>(tr) * w + tc : static_cast<size_t>(r) * w + c;
                n.out.data[dst] += nx.out.data[static_cast<size_t>(r) * w + c];
            }
        return push(std::move(n));
    }

    // ----- interpolation -----

    /// Bilinear sample of a 2-d map at fractional (row, col) scalars.
    /// Coordinates are clamped to the map; clamped reads get zero
    /// coordinate gradient. Differentiable in map and coordinates.
    Value bilinear_read(Value map, Value row, Value col) {
        const Node& nm = at(map);
        if (nm.out.ndim() != 2) fail("bilinear_read", "map must be 2-d");
        if (at(row).out.size() != 1 || at(col).out.size() != 1) fail("bilinear_read", "coordinates must be scalars");
        int h = nm.out.shape[0], w = nm.out.shape[1];
        if (h < 2 || w < 2) fail("bilinear_read", "map must be at least 2x2");
        double r = at(row).out.data[0], c = at(col).out.data[0];
        double rc = std::clamp(r, 0.0, static_cast<double>(h - 1));
        double cc = std::clamp(c, 0.0, static_cast<double>(w - 1));
        int r0 = std::min(static_cast<int>(std::floor(rc)), h - 2);
        int c0 = std::min(static_cast<int>(std::floor(cc)), w - 2);
        double fr = rc - r0, fc = cc - c0;
        const double* m = nm.out.data.data();
        double m00 = m[static_cast<size_t>(r0) * w + c0], m01 = m[static_cast<size_t>(r0) * w + c0 + 1];
        double m10 = m[static_cast<size_t>(r0 + 1) * w + c0], m11 = m[static_cast<size_t>(r0 + 1) * w + c0 + 1];
        Node n;
        n.kind = OpKind::BilinearRead;
        n.in0 = map.id;
        n.in1 = row.id;
        n.in2 = col.id;
        n.requires_grad = nm.requires_grad || at(row).requires_grad || at(col).requires_grad;
        n.out = Array::scalar((1 - fr) * ((1 - fc) * m00 + fc * m01) + fr * ((1 - fc) * m10 + fc * m11));
        return push(std::move(n));
    }

    // ----- access -----

    const Array& val(Value v) const { return at(v).out; }
    double item(Value v) const {
        const Array& a = at(v).out;
        if (a.size() != 1) throw std::runtime_error("autodiff: item() on non-scalar " + shape_str(a.shape));
        return a.data[0];
    }
    /// Gradient of the last backward() loss w.r.t. this node (zeros if off-path).
    Array grad(Value v) const {
        const Node& n = at(v);
        if (n.grad.empty()) return Array(n.out.shape, 0.0);
        return Array(n.out.shape, n.grad);
    }

    size_t size() const { return nodes_.size(); }
    void clear() { nodes_.clear(); }

    // ----- backward -----

    void backward(Value loss) {
        const Node& ln = at(loss);
        if (ln.out.size() != 1)
            throw std::runtime_error("autodiff: backward needs a scalar loss, got " + shape_str(ln.out.shape));
        for (Node& n : nodes_) {
            n.grad.assign(n.out.data.size(), 0.0);
        }
        nodes_[static_cast<size_t>(loss.id)].grad[0] = 1.0;
        for (int id = loss.id; id >= 0; --id) {
            Node& n = nodes_[static_cast<size_t>(id)];
            if (!n.requires_grad || n.kind == OpKind::Leaf) continue;
            backward_node(n);
        }
    }

  private:
    std::vector<Node> nodes_;

    const Node& at(Value v) const {
        if (!v.valid() || v.tape != this || v.id >= static_cast<int>(nodes_.size()))
            throw std::runtime_error("autodiff: value handle does not belong to this tape");
        return nodes_[static_cast<size_t>(v.id)];
    }
    Node& node(int id) { return nodes_[static_cast<size_t>(id)]; }

    [[noreturn]] void fail(const char* op, const std::string& what) const {
        throw std::runtime_error("autodiff: " + std::string(op) + " (node " + std::to_string(nodes_.size()) + "): " + what);
    }

    Node make(OpKind k, Value x) {
        Node n;
        n.kind = k;
        n.in0 = x.id;
        n.requires_grad = at(x).requires_grad;
        return n;
    }
    Node make2(OpKind k, Value a, Value b) {
        Node n;
        n.kind = k;
        n.in0 = a.id;
        n.in1 = b.id;
        n.requires_grad = at(a).requires_grad || at(b).requires_grad;
        return n;
    }

    Value push(Node n) {
        check_finite(n);
        nodes_.push_back(std::move(n));
        return Value{this, static_cast<int>(nodes_.size()) - 1};
    }

    void check_finite(const Node& n) const {
        for (double v : n.out.data)
            if (!std::isfinite(v))
                throw std::runtime_error("autodiff: non-finite output at node " +
                                         std::to_string(nodes_.size()) + " (" + op_name(n.kind) + ")");
    }

    template <typename F>
    Value unary(OpKind k, Value x, F f, double c = 0.0) {
        Node n = make(k, x);
        n.c0 = c;
        const Node& nx = at(x);
        n.out = Array(nx.out.shape);
        for (size_t i = 0; i < nx.out.data.size(); ++i) n.out.data[i] = f(nx.out.data[i]);
        return push(std::move(n));
    }

    // Broadcast plan: output shape plus per-input "axis is broadcast" masks.
    struct BcPlan {
        Shape out_shape;
        std::vector<long long> strides_a, strides_b, out_strides;
        bool trivial = false;  // identical shapes
    };

    BcPlan broadcast_plan(const char* op, const Shape& a, const Shape& b) const {
        BcPlan p;
        if (a == b) {
            p.out_shape = a;
            p.trivial = true;
            return p;
        }
        if (a.size() == 1 && a[0] == 1) {  // scalar lhs
            p.out_shape = b;
        } else if (b.size() == 1 && b[0] == 1) {  // scalar rhs
            p.out_shape = a;
        } else if (a.size() == b.size()) {
            p.out_shape.resize(a.size());
            for (size_t d = 0; d < a.size(); ++d) {
                if (a[d] == b[d]) p.out_shape[d] = a[d];
                else if (a[d] == 1) p.out_shape[d] = b[d];
                else if (b[d] == 1) p.out_shape[d] = a[d];
                else fail(op, "shape mismatch " + shape_str(a) + " vs " + shape_str(b));
            }
        } else {
            fail(op, "shape mismatch " + shape_str(a) + " vs " + shape_str(b) + " (explicit reshape required)");
        }
        p.out_strides = row_major_strides(p.out_shape);
        auto in_strides = [&](const Shape& s) {
            std::vector<long long> st(p.out_shape.size(), 0);
            if (s.size() == 1 && s[0] == 1 && p.out_shape.size() != 1) return st;  // scalar: all zero
            auto own = row_major_strides(s);
            for (size_t d = 0; d < s.size(); ++d) st[d] = (s[d] == 1 && p.out_shape[d] != 1) ? 0 : own[d];
            return st;
        };
        p.strides_a = in_strides(a);
        p.strides_b = in_strides(b);
        return p;
    }

    Value binary(OpKind k, Value a, Value b) {
        const Node& na = at(a);
        const Node& nb = at(b);
        BcPlan p = broadcast_plan(op_name(k), na.out.shape, nb.out.shape);
        Node n = make2(k, a, b);
        n.out = Array(p.out_shape);
        const double* pa = na.out.data.data();
        const double* pb = nb.out.data.data();
        double* po = n.out.data.data();
        long long total = n.out.size();
        auto apply = [k](double x, double y) {
            switch (k) {
                case OpKind::Add: return x + y;
                case OpKind::Sub: return x - y;
                case OpKind::Mul: return x * y;
                default: return x / y;
            }
        };
        if (p.trivial) {
            for (long long i = 0; i < total; ++i) po[i] = apply(pa[i], pb[i]);
        } else {
            std::vector<int> idx(p.out_shape.size(), 0);
            for (long long i = 0; i < total; ++i) {
                long long oa = 0, ob = 0;
                long long rem = i;
                for (size_t d = 0; d < p.out_shape.size(); ++d) {
                    long long q = rem / p.out_strides[d];
                    rem -= q * p.out_strides[d];
                    oa += q * p.strides_a[d];
                    ob += q * p.strides_b[d];
                }
                po[i] = apply(pa[oa], pb[ob]);
            }
        }
        return push(std::move(n));
    }

    struct ReduceDims {
        long long outer = 1, n = 1, inner = 1;
        Shape out_shape;
    };

    int check_axis(Value x, int axis, const char* op) const {
        const Shape& s = at(x).out.shape;
        if (axis < 0 || axis >= static_cast<int>(s.size())) fail(op, "axis out of range for " + shape_str(s));
        return axis;
    }

    ReduceDims reduce_dims(Value x, int axis, const char* op) const {
        check_axis(x, axis, op);
        const Shape& s = at(x).out.shape;
        ReduceDims rd;
        for (int d = 0; d < axis; ++d) rd.outer *= s[static_cast<size_t>(d)];
        rd.n = s[static_cast<size_t>(axis)];
        for (size_t d = static_cast<size_t>(axis) + 1; d < s.size(); ++d) rd.inner *= s[d];
        rd.out_shape = s;
        rd.out_shape.erase(rd.out_shape.begin() + axis);
        if (rd.out_shape.empty()) rd.out_shape = Shape{1};
        return rd;
    }

    static void copy_region(const double* src, const std::vector<long long>& src_strides,
                            const std::vector<int>& offsets, double* dst, const std::vector<int>& sizes) {
        size_t rank = sizes.size();
        std::vector<int> idx(rank, 0);
        long long total = 1;
        for (int s : sizes) total *= s;
        for (long long i = 0; i < total; ++i) {
            long long so = 0;
            for (size_t d = 0; d < rank; ++d) so += (offsets[d] + idx[d]) * src_strides[d];
            dst[i] = src[so];
            for (int d = static_cast<int>(rank) - 1; d >= 0; --d) {
                if (++idx[static_cast<size_t>(d)] < sizes[static_cast<size_t>(d)]) break;
                idx[static_cast<size_t>(d)] = 0;
            }
        }
    }

    static void add_region(double* dst, const std::vector<long long>& dst_strides,
                           const std::vector<int>& offsets, const double* src, const std::vector<int>& sizes) {
        size_t rank = sizes.size();
        std::vector<int> idx(rank, 0);
        long long total = 1;
        for (int s : sizes) total *= s;
        for (long long i = 0; i < total; ++i) {
            long long so = 0;
            for (size_t d = 0; d < rank; ++d) so += (offsets[d] + idx[d]) * dst_strides[d];
            dst[so] += src[i];
            for (int d = static_cast<int>(rank) - 1; d >= 0; --d) {
                if (++idx[static_cast<size_t>(d)] < sizes[static_cast<size_t>(d)]) break;
                idx[static_cast<size_t>(d)] = 0;
            }
        }
    }

    static void matmul_kernel(const double* a, const double* b, double* out, int m, int k, int p,
                              bool transpose_a, bool transpose_b) {
        std::fill_n(out, static_cast<long long>(m) * p, 0.0);
        for (int i = 0; i < m; ++i)
            for (int kk = 0; kk < k; ++kk) {
                double av = transpose_a ? a[static_cast<long long>(kk) * m + i] : a[static_cast<long long>(i) * k + kk];
                const double* brow = transpose_b ? nullptr : b + static_cast<long long>(kk) * p;
                double* orow = out + static_cast<long long>(i) * p;
                if (transpose_b) {
                    for (int j = 0; j < p; ++j) orow[j] += av * b[static_cast<long long>(j) * k + kk];
                } else {
                    for (int j = 0; j < p; ++j) orow[j] += av * brow[j];
                }
            }
    }

    // Accumulate grad g (shaped like out) into input id, reducing over broadcast axes.
    void accum_broadcast(int input_id, const std::vector<double>& g, const Shape& out_shape,
                         const std::vector<long long>& in_strides, const std::vector<long long>& out_strides) {
        Node& ni = node(input_id);
        if (!ni.requires_grad) return;
        long long total = 1;
        for (int d : out_shape) total *= d;
        for (long long i = 0; i < total; ++i) {
            long long oi = 0, rem = i;
            for (size_t d = 0; d < out_shape.size(); ++d) {
                long long q = rem / out_strides[d];
                rem -= q * out_strides[d];
                oi += q * in_strides[d];
            }
            ni.grad[static_cast<size_t>(oi)] += g[static_cast<size_t>(i)];
        }
    }

    void backward_node(Node& n) {
        const std::vector<double>& g = n.grad;
        auto in_grad = [this](int id) -> std::vector<double>* {
            if (id < 0) return nullptr;
            Node& ni = node(id);
            return ni.requires_grad ? &ni.grad : nullptr;
        };
        auto in_val = [this](int id) -> const std::vector<double>& { return node(id).out.data; };

        switch (n.kind) {
            case OpKind::Leaf:
                break;
            case OpKind::Add:
            case OpKind::Sub:
            case OpKind::Mul:
            case OpKind::Div: {
                const Shape& sa = node(n.in0).out.shape;
                const Shape& sb = node(n.in1).out.shape;
                BcPlan p = broadcast_plan(op_name(n.kind), sa, sb);
                const double* pa = in_val(n.in0).data();
                const double* pb = in_val(n.in1).data();
                std::vector<double>* ga = in_grad(n.in0);
                std::vector<double>* gb = in_grad(n.in1);
                long long total = n.out.size();
                if (p.trivial) {
                    for (long long i = 0; i < total; ++i) {
                        double gv = g[static_cast<size_t>(i)];
                        switch (n.kind) {
                            case OpKind::Add:
                                if (ga) (*ga)[static_cast<size_t>(i)] += gv;
                                if (gb) (*gb)[static_cast<size_t>(i)] += gv;
                                break;
                            case OpKind::Sub:
                                if (ga) (*ga)[static_cast<size_t>(i)] += gv;
                                if (gb) (*gb)[static_cast<size_t>(i)] -= gv;
                                break;
                            case OpKind::Mul:
                                if (ga) (*ga)[static_cast<size_t>(i)] += gv * pb[i];
                                if (gb) (*gb)[static_cast<size_t>(i)] += gv * pa[i];
                                break;
                            default:
                                if (ga) (*ga)[static_cast<size_t>(i)] += gv / pb[i];
                                if (gb) (*gb)[static_cast<size_t>(i)] -= gv * pa[i] / (pb[i] * pb[i]);
                        }
                    }
                } else {
                    for (long long i = 0; i < total; ++i) {
                        long long oa = 0, ob = 0, rem = i;
                        for (size_t d = 0; d < p.out_shape.size(); ++d) {
                            long long q = rem / p.out_strides[d];
                            rem -= q * p.out_strides[d];
                            oa += q * p.strides_a[d];
                            ob += q * p.strides_b[d];
                        }
                        double gv = g[static_cast<size_t>(i)];
                        switch (n.kind) {
                            case OpKind::Add:
                                if (ga) (*ga)[static_cast<size_t>(oa)] += gv;
                                if (gb) (*gb)[static_cast<size_t>(ob)] += gv;
                                break;
                            case OpKind::Sub:
                                if (ga) (*ga)[static_cast<size_t>(oa)] += gv;
                                if (gb) (*gb)[static_cast<size_t>(ob)] -= gv;
                                break;
                            case OpKind::Mul:
                                if (ga) (*ga)[static_cast<size_t>(oa)] += gv * pb[ob];
                                if (gb) (*gb)[static_cast<size_t>(ob)] += gv * pa[oa];
                                break;
                            default:
                                if (ga) (*ga)[static_cast<size_t>(oa)] += gv / pb[ob];
                                if (gb) (*gb)[static_cast<size_t>(ob)] -= gv * pa[oa] / (pb[ob] * pb[ob]);
                        }
                    }
                }
                break;
            }
            case OpKind::Neg:
                if (auto* gi = in_grad(n.in0))
                    for (size_t i = 0; i < g.size(); ++i) (*gi)[i] -= g[i];
                break;
            case OpKind::Exp:
                if (auto* gi = in_grad(n.in0))
                    for (size_t i = 0; i < g.size(); ++i) (*gi)[i] += g[i] * n.out.data[i];
                break;
            case OpKind::Log:
                if (auto* gi = in_grad(n.in0)) {
                    const auto& x = in_val(n.in0);
                    for (size_t i = 0; i < g.size(); ++i) (*gi)[i] += g[i] / x[i];
                }
                break;
            case OpKind::Tanh:
                if (auto* gi = in_grad(n.in0))
                    for (size_t i = 0; i < g.size(); ++i) (*gi)[i] += g[i] * (1.0 - n.out.data[i] * n.out.data[i]);
                break;
            case OpKind::Sigmoid:
                if (auto* gi = in_grad(n.in0))
                    for (size_t i = 0; i < g.size(); ++i) (*gi)[i] += g[i] * n.out.data[i] * (1.0 - n.out.data[i]);
                break;
            case OpKind::Sin:
                if (auto* gi = in_grad(n.in0)) {
                    const auto& x = in_val(n.in0);
                    for (size_t i = 0; i < g.size(); ++i) (*gi)[i] += g[i] * std::cos(x[i]);
                }
                break;
            case OpKind::Cos:
                if (auto* gi = in_grad(n.in0)) {
                    const auto& x = in_val(n.in0);
                    for (size_t i = 0; i < g.size(); ++i) (*gi)[i] -= g[i] * std::sin(x[i]);
                }
                break;
            case OpKind::Abs:
                if (auto* gi = in_grad(n.in0)) {
                    const auto& x = in_val(n.in0);
                    for (size_t i = 0; i < g.size(); ++i)
                        (*gi)[i] += g[i] * (x[i] > 0 ? 1.0 : (x[i] < 0 ? -1.0 : 0.0));
                }
                break;
            case OpKind::Relu:
                if (auto* gi = in_grad(n.in0)) {
                    const auto& x = in_val(n.in0);
                    for (size_t i = 0; i < g.size(); ++i) (*gi)[i] += x[i] > 0 ? g[i] : 0.0;
                }
                break;
            case OpKind::WrapAngle:
            case OpKind::AddC:
                if (auto* gi = in_grad(n.in0))
                    for (size_t i = 0; i < g.size(); ++i) (*gi)[i] += g[i];
                break;
            case OpKind::PowC:
                if (auto* gi = in_grad(n.in0)) {
                    const auto& x = in_val(n.in0);
                    for (size_t i = 0; i < g.size(); ++i)
                        (*gi)[i] += g[i] * n.c0 * std::pow(x[i], n.c0 - 1.0);
                }
                break;
            case OpKind::MulC:
                if (auto* gi = in_grad(n.in0))
                    for (size_t i = 0; i < g.size(); ++i) (*gi)[i] += g[i] * n.c0;
                break;
            case OpKind::MaxC:
                if (auto* gi = in_grad(n.in0)) {
                    const auto& x = in_val(n.in0);
                    for (size_t i = 0; i < g.size(); ++i) (*gi)[i] += x[i] > n.c0 ? g[i] : 0.0;
                }
                break;
            case OpKind::MinC:
                if (auto* gi = in_grad(n.in0)) {
                    const auto& x = in_val(n.in0);
                    for (size_t i = 0; i < g.size(); ++i) (*gi)[i] += x[i] < n.c0 ? g[i] : 0.0;
                }
                break;
            case OpKind::SumAll:
                if (auto* gi = in_grad(n.in0))
                    for (size_t i = 0; i < gi->size(); ++i) (*gi)[i] += g[0];
                break;
            case OpKind::MeanAll:
                if (auto* gi = in_grad(n.in0)) {
                    double s = g[0] / static_cast<double>(gi->size());
                    for (size_t i = 0; i < gi->size(); ++i) (*gi)[i] += s;
                }
                break;
            case OpKind::SumAxis: {
                if (auto* gi = in_grad(n.in0)) {
                    ReduceDims rd = reduce_dims(Value{this, n.in0}, n.i0, "sum_axis");
                    for (long long o = 0; o < rd.outer; ++o)
                        for (long long k = 0; k < rd.n; ++k)
                            for (long long i = 0; i < rd.inner; ++i)
                                (*gi)[static_cast<size_t>((o * rd.n + k) * rd.inner + i)] +=
                                    g[static_cast<size_t>(o * rd.inner + i)];
                }
                break;
            }
            case OpKind::MaxAxis: {
                if (auto* gi = in_grad(n.in0)) {
                    ReduceDims rd = reduce_dims(Value{this, n.in0}, n.i0, "max_axis");
                    const auto& x = in_val(n.in0);
                    for (long long o = 0; o < rd.outer; ++o)
                        for (long long i = 0; i < rd.inner; ++i) {
                            long long best = 0;
                            double bv = x[static_cast<size_t>((o * rd.n) * rd.inner + i)];
                            for (long long k = 1; k < rd.n; ++k) {
                                double v = x[static_cast<size_t>((o * rd.n + k) * rd.inner + i)];
                                if (v > bv) { bv = v; best = k; }
                            }
                            (*gi)[static_cast<size_t>((o * rd.n + best) * rd.inner + i)] +=
                                g[static_cast<size_t>(o * rd.inner + i)];
                        }
                }
                break;
            }
            case OpKind::LogSumExp: {
                if (auto* gi = in_grad(n.in0)) {
                    ReduceDims rd = reduce_dims(Value{this, n.in0}, n.i0, "log_sum_exp");
                    const auto& x = in_val(n.in0);
                    for (long long o = 0; o < rd.outer; ++o)
                        for (long long i = 0; i < rd.inner; ++i) {
                            double y = n.out.data[static_cast<size_t>(o * rd.inner + i)];
                            double gv = g[static_cast<size_t>(o * rd.inner + i)];
                            for (long long k = 0; k < rd.n; ++k) {
                                size_t idx = static_cast<size_t>((o * rd.n + k) * rd.inner + i);
                                (*gi)[idx] += gv * std::exp(x[idx] - y);
                            }
                        }
                }
                break;
            }
            case OpKind::Softmax: {
                if (auto* gi = in_grad(n.in0)) {
                    ReduceDims rd = reduce_dims(Value{this, n.in0}, n.i0, "softmax");
                    for (long long o = 0; o < rd.outer; ++o)
                        for (long long i = 0; i < rd.inner; ++i) {
                            double dot = 0.0;
                            for (long long k = 0; k < rd.n; ++k) {
                                size_t idx = static_cast<size_t>((o * rd.n + k) * rd.inner + i);
                                dot += g[idx] * n.out.data[idx];
                            }
                            for (long long k = 0; k < rd.n; ++k) {
                                size_t idx = static_cast<size_t>((o * rd.n + k) * rd.inner + i);
                                (*gi)[idx] += n.out.data[idx] * (g[idx] - dot);
                            }
                        }
                }
                break;
            }
            case OpKind::Reshape:
                if (auto* gi = in_grad(n.in0))
                    for (size_t i = 0; i < g.size(); ++i) (*gi)[i] += g[i];
                break;
            case OpKind::Concat: {
                const Shape& os = n.out.shape;
                int axis = n.i0;
                long long outer = 1, inner = 1;
                for (int d = 0; d < axis; ++d) outer *= os[static_cast<size_t>(d)];
                for (size_t d = static_cast<size_t>(axis) + 1; d < os.size(); ++d) inner *= os[d];
                long long total_axis = os[static_cast<size_t>(axis)];
                long long pos = 0;
                for (int pid : n.extra_in) {
                    Node& np = node(pid);
                    long long na = np.out.shape[static_cast<size_t>(axis)];
                    if (np.requires_grad)
                        for (long long o = 0; o < outer; ++o)
                            for (long long j = 0; j < na * inner; ++j)
                                np.grad[static_cast<size_t>(o * na * inner + j)] +=
                                    g[static_cast<size_t>((o * total_axis + pos) * inner + j)];
                    pos += na;
                }
                break;
            }
            case OpKind::Slice:
                if (in_grad(n.in0)) {
                    Node& ni = node(n.in0);
                    auto strides = row_major_strides(ni.out.shape);
                    add_region(ni.grad.data(), strides, n.v0, g.data(), n.v1);
                }
                break;
            case OpKind::Transpose2D:
                if (auto* gi = in_grad(n.in0)) {
                    int r = n.out.shape[0], c = n.out.shape[1];  // transposed dims
                    for (int i = 0; i < r; ++i)
                        for (int j = 0; j < c; ++j)
                            (*gi)[static_cast<size_t>(j) * r + i] += g[static_cast<size_t>(i) * c + j];
                }
                break;
            case OpKind::MatMul: {
                const Node& na = node(n.in0);
                const Node& nb = node(n.in1);
                int m = na.out.shape[0], k = na.out.shape[1], p = nb.out.shape[1];
                if (na.requires_grad) {
                    // dA += g * B^T
                    std::vector<double> tmp(static_cast<size_t>(m) * k, 0.0);
                    for (int i = 0; i < m; ++i)
                        for (int j = 0; j < p; ++j) {
                            double gv = g[static_cast<size_t>(i) * p + j];
                            const double* brow = nb.out.data.data() + static_cast<size_t>(0);
                            for (int kk = 0; kk < k; ++kk)
                                tmp[static_cast<size_t>(i) * k + kk] += gv * brow[static_cast<size_t>(kk) * p + j];
                        }
                    std::vector<double>& ga = node(n.in0).grad;
                    for (size_t i = 0; i < tmp.size(); ++i) ga[i] += tmp[i];
                }
                if (nb.requires_grad) {
                    // dB += A^T * g
                    std::vector<double>& gb = node(n.in1).grad;
                    for (int kk = 0; kk < k; ++kk)
                        for (int i = 0; i < m; ++i) {
                            double av = na.out.data[static_cast<size_t>(i) * k + kk];
                            const double* grow = g.data() + static_cast<size_t>(i) * p;
                            double* brow = gb.data() + static_cast<size_t>(kk) * p;
                            for (int j = 0; j < p; ++j) brow[j] += av * grow[j];
                        }
                }
                break;
            }
            case OpKind::Conv2D: {
                const Node& ni = node(n.in0);
                const Node& nw = node(n.in1);
                int ci = ni.out.shape[0], h = ni.out.shape[1], w = ni.out.shape[2];
                int co = nw.out.shape[0], kh = nw.out.shape[2], kw = nw.out.shape[3];
                int ph = n.i0 == 0 ? (kh - 1) / 2 : 0;
                int pw = n.i0 == 0 ? (kw - 1) / 2 : 0;
                int oh = n.out.shape[1], ow = n.out.shape[2];
                bool need_in = ni.requires_grad, need_w = nw.requires_grad;
                for (int oc = 0; oc < co; ++oc)
                    for (int oy = 0; oy < oh; ++oy)
                        for (int ox = 0; ox < ow; ++ox) {
                            double gv = g[(static_cast<size_t>(oc) * oh + oy) * ow + ox];
                            if (gv == 0.0) continue;
                            for (int ic = 0; ic < ci; ++ic)
                                for (int ky = 0; ky < kh; ++ky) {
                                    int iy = oy + ky - ph;
                                    if (iy < 0 || iy >= h) continue;
                                    for (int kx = 0; kx < kw; ++kx) {
                                        int ix = ox + kx - pw;
                                        if (ix < 0 || ix >= w) continue;
                                        size_t ii = (static_cast<size_t>(ic) * h + iy) * w + ix;
                                        size_t wi = ((static_cast<size_t>(oc) * ci + ic) * kh + ky) * kw + kx;
                                        if (need_w) node(n.in1).grad[wi] += gv * ni.out.data[ii];
                                        if (need_in) node(n.in0).grad[ii] += gv * nw.out.data[wi];
                                    }
                                }
                        }
                break;
            }
            case OpKind::ShiftGather:
                if (auto* gi = in_grad(n.in0)) {
                    int h = n.out.shape[0], w = n.out.shape[1];
                    for (int r = 0; r < h; ++r)
                        for (int c = 0; c < w; ++c) {
                            int sr = r + n.i0, sc = c + n.i1;
                            bool in = sr >= 0 && sr < h && sc >= 0 && sc < w;
                            size_t src = in ? static_cast<size_t>(sr) * w + sc : static_cast<size_t>(r) * w + c;
                            (*gi)[src] += g[static_cast<size_t>(r) * w + c];
                        }
                }
                break;
            case OpKind::ShiftScatter:
                if (auto* gi = in_grad(n.in0)) {
                    int h = n.out.shape[0], w = n.out.shape[1];
                    for (int r = 0; r < h; ++r)
                        for (int c = 0; c < w; ++c) {
                            int tr = r + n.i0, tc = c + n.i1;
                            bool in = tr >= 0 && tr < h && tc >= 0 && tc < w;
                            size_t dst = in ? static_cast<size_t>(tr) * w + tc : static_cast<size_t>(r) * w + c;
                            (*gi)[static_cast<size_t>(r) * w + c] += g[dst];
                        }
                }
                break;
            case OpKind::BilinearRead: {
                const Node& nm = node(n.in0);
                int h = nm.out.shape[0], w = nm.out.shape[1];
                double r = node(n.in1).out.data[0], c = node(n.in2).out.data[0];
                bool r_in = r >= 0.0 && r <= static_cast<double>(h - 1);
                bool c_in = c >= 0.0 && c <= static_cast<double>(w - 1);
                double rc = std::clamp(r, 0.0, static_cast<double>(h - 1));
                double cc = std::clamp(c, 0.0, static_cast<double>(w - 1));
                int r0 = std::min(static_cast<int>(std::floor(rc)), h - 2);
                int c0 = std::min(static_cast<int>(std::floor(cc)), w - 2);
                double fr = rc - r0, fc = cc - c0;
                const double* m = nm.out.data.data();
                double m00 = m[static_cast<size_t>(r0) * w + c0], m01 = m[static_cast<size_t>(r0) * w + c0 + 1];
                double m10 = m[static_cast<size_t>(r0 + 1) * w + c0], m11 = m[static_cast<size_t>(r0 + 1) * w + c0 + 1];
                double gv = g[0];
                if (nm.requires_grad) {
                    auto& gm = node(n.in0).grad;
                    gm[static_cast<size_t>(r0) * w + c0] += gv * (1 - fr) * (1 - fc);
                    gm[static_cast<size_t>(r0) * w + c0 + 1] += gv * (1 - fr) * fc;
                    gm[static_cast<size_t>(r0 + 1) * w + c0] += gv * fr * (1 - fc);
                    gm[static_cast<size_t>(r0 + 1) * w + c0 + 1] += gv * fr * fc;
                }
                if (node(n.in1).requires_grad && r_in)
                    node(n.in1).grad[0] += gv * ((1 - fc) * (m10 - m00) + fc * (m11 - m01));
                if (node(n.in2).requires_grad && c_in)
                    node(n.in2).grad[0] += gv * ((1 - fr) * (m01 - m00) + fr * (m11 - m10));
                break;
            }
        }
    }
};

// ----- operator sugar -----

inline Value operator+(Value a, Value b) { return a.tape->add(a, b); }
inline Value operator-(Value a, Value b) { return a.tape->sub(a, b); }
inline Value operator*(Value a, Value b) { return a.tape->mul(a, b); }
inline Value operator/(Value a, Value b) { return a.tape->div(a, b); }
inline Value operator-(Value a) { return a.tape->neg(a); }

// ----- gradient check -----

struct GradCheckReport {
    double max_rel_err = 0.0;
    int worst_leaf = -1;
    long long worst_index = -1;
    bool pass = false;
};

/// Central-difference check of every element of every leaf against the
/// analytic gradient. `build` must create one tape leaf per entry of
/// `leaves`, in order, and return the scalar loss. Relative error uses
/// denominator max(|analytic|, |numeric|, 1e-6).
inline GradCheckReport gradient_check(
    std::vector<Array> leaves,
    const std::function<Value(Tape&, const std::vector<Value>&)>& build,
    double tolerance, double fd_step = 1e-5) {
    auto eval = [&](bool want_grad) {
        Tape tape;
        std::vector<Value> vs;
        vs.reserve(leaves.size());
        for (const Array& a : leaves) vs.push_back(tape.leaf(a, want_grad));
        Value loss = build(tape, vs);
        if (want_grad) {
            tape.backward(loss);
            std::vector<Array> grads;
            for (Value v : vs) grads.push_back(tape.grad(v));
            return std::make_pair(tape.item(loss), grads);
        }
        return std::make_pair(tape.item(loss), std::vector<Array>{});
    };

    auto [loss0, analytic] = eval(true);
    (void)loss0;

    GradCheckReport rep;
    for (size_t li = 0; li < leaves.size(); ++li) {
        for (long long i = 0; i < leaves[li].size(); ++i) {
            double saved = leaves[li][i];
            leaves[li][i] = saved + fd_step;
            double fp = eval(false).first;
            leaves[li][i] = saved - fd_step;
            double fm = eval(false).first;
            leaves[li][i] = saved;
            double numeric = (fp - fm) / (2.0 * fd_step);
            double a = analytic[li][i];
            double denom = std::max({std::fabs(a), std::fabs(numeric), 1e-6});
            double err = std::fabs(a - numeric) / denom;
            if (err > rep.max_rel_err) {
                rep.max_rel_err = err;
                rep.worst_leaf = static_cast<int>(li);
                rep.worst_index = i;
            }
        }
    }
    rep.pass = rep.max_rel_err < tolerance;
    return rep;
}

}  // namespace viplan::ad
