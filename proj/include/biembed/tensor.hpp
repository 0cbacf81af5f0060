#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <limits>
#include <memory>
#include <sstream>
#include <string>
#include <unordered_set>
#include <vector>

#include "biembed/common.hpp"
#include "biembed/rng.hpp"

// Dense tensors with reverse-mode automatic differentiation. The op set is
// deliberately small: exactly what the encoder, the losses and the training
// loops need. Scalar type is a template parameter; tests and oracles run at
// double, training may run at float.
//
// Graph policy: every op result keeps shared ownership of its inputs, so a
// graph lives as long as any of its outputs. backward() may be called
// repeatedly and *accumulates* into grad buffers; callers zero grads between
// optimizer steps. Tensors are immutable after creation except for grad
// buffers and the explicit mutable_values() hook used by the optimizer.

namespace biembed {

using Shape = std::vector<std::size_t>;

inline std::size_t shape_numel(const Shape& s) {
    std::size_t n = 1;
    for (std::size_t d : s) n *= d;
    return n;
}

inline std::string shape_str(const Shape& s) {
    std::ostringstream os;
    os << "[";
    for (std::size_t i = 0; i < s.size(); ++i) os << (i ? "x" : "") << s[i];
    os << "]";
    return os.str();
}

template <class S>
struct TensorNode {
    Shape shape;
    std::vector<S> data;
    std::vector<S> grad;  // empty until first accumulation
    bool requires_grad = false;
    std::vector<std::shared_ptr<TensorNode<S>>> parents;
    std::function<void(TensorNode<S>&)> backprop;

    void ensure_grad() {
        if (grad.size() != data.size()) grad.assign(data.size(), S(0));
    }
};

template <class S>
class Tensor {
public:
    using Node = TensorNode<S>;
    using value_type = S;

    Tensor() = default;

    static Tensor zeros(Shape shape) { return full(std::move(shape), S(0)); }

    static Tensor full(Shape shape, S value) {
        auto n = std::make_shared<Node>();
        n->shape = std::move(shape);
        n->data.assign(shape_numel(n->shape), value);
        return Tensor(std::move(n));
    }

    static Tensor from(Shape shape, std::vector<S> data) {
        if (shape_numel(shape) != data.size())
            throw ShapeError("Tensor::from: shape " + shape_str(shape) + " does not match " +
                             std::to_string(data.size()) + " values");
        auto n = std::make_shared<Node>();
        n->shape = std::move(shape);
        n->data = std::move(data);
        return Tensor(std::move(n));
    }

    static Tensor scalar(S value) { return from({1}, {value}); }

    static Tensor randn(Shape shape, Rng& rng, double stdev = 1.0) {
        auto n = std::make_shared<Node>();
        n->shape = std::move(shape);
        n->data.resize(shape_numel(n->shape));
        for (S& v : n->data) v = static_cast<S>(rng.normal(0.0, stdev));
        return Tensor(std::move(n));
    }

    static Tensor uniform(Shape shape, Rng& rng, double lo, double hi) {
        auto n = std::make_shared<Node>();
        n->shape = std::move(shape);
        n->data.resize(shape_numel(n->shape));
        for (S& v : n->data) v = static_cast<S>(rng.uniform(lo, hi));
        return Tensor(std::move(n));
    }

    bool defined() const { return static_cast<bool>(n_); }
    const Shape& shape() const { return n_->shape; }
    std::size_t ndim() const { return n_->shape.size(); }
    std::size_t numel() const { return n_->data.size(); }
    std::size_t dim(std::size_t i) const { return n_->shape.at(i); }

    const std::vector<S>& values() const { return n_->data; }

    // Parameter update hook for the optimizer; the single-writer rule from
    // the concurrency contract applies.
    std::vector<S>& mutable_values() { return n_->data; }

    S item() const {
        if (numel() != 1) throw ShapeError("item: tensor " + shape_str(shape()) + " is not scalar");
        return n_->data[0];
    }

    S at(const std::vector<std::size_t>& idx) const {
        if (idx.size() != ndim()) throw ShapeError("at: rank mismatch");
        std::size_t flat = 0;
        for (std::size_t i = 0; i < idx.size(); ++i) {
            if (idx[i] >= n_->shape[i]) throw ShapeError("at: index out of range");
            flat = flat * n_->shape[i] + idx[i];
        }
        return n_->data[flat];
    }

    bool requires_grad() const { return n_->requires_grad; }

    Tensor& set_requires_grad(bool on = true) {
        n_->requires_grad = on;
        return *this;
    }

    bool has_grad() const { return n_ && n_->grad.size() == n_->data.size(); }

    const std::vector<S>& grad() const {
        if (!has_grad()) throw Error("grad: no gradient populated; call backward first");
        return n_->grad;
    }

    // Gradient rescaling hook for the clipper; same single-writer rule as
    // mutable_values().
    std::vector<S>& mutable_grad() {
        if (!has_grad()) throw Error("mutable_grad: no gradient populated; call backward first");
        return n_->grad;
    }

    void zero_grad() {
        if (n_) n_->grad.assign(n_->data.size(), S(0));
    }

    std::shared_ptr<Node> node() const { return n_; }

    static Tensor wrap(std::shared_ptr<Node> n) { return Tensor(std::move(n)); }

private:
    explicit Tensor(std::shared_ptr<Node> n) : n_(std::move(n)) {}
    std::shared_ptr<Node> n_;
};

namespace detail {

// Build an op result node. Parents and the backprop closure are dropped when
// no input requires gradients, so pure inference does not grow a graph of
// closures (data parents are still captured by value inside `data`).
template <class S>
Tensor<S> make_result(Shape shape, std::vector<S> data, std::vector<Tensor<S>> parents,
                      std::function<void(TensorNode<S>&)> backprop) {
    auto n = std::make_shared<TensorNode<S>>();
    n->shape = std::move(shape);
    n->data = std::move(data);
    bool rg = false;
    for (const auto& p : parents) rg = rg || p.requires_grad();
    n->requires_grad = rg;
    if (rg) {
        for (const auto& p : parents) n->parents.push_back(p.node());
        n->backprop = std::move(backprop);
    }
    return Tensor<S>::wrap(std::move(n));
}

// Strides of a row-major layout.
inline std::vector<std::size_t> strides_of(const Shape& s) {
    std::vector<std::size_t> st(s.size());
    std::size_t acc = 1;
    for (std::size_t i = s.size(); i-- > 0;) {
        st[i] = acc;
        acc *= s[i];
    }
    return st;
}

inline Shape broadcast_shape(const Shape& a, const Shape& b, const char* op) {
    Shape out(std::max(a.size(), b.size()));
    for (std::size_t i = 0; i < out.size(); ++i) {
        std::size_t da = i < out.size() - a.size() ? 1 : a[i - (out.size() - a.size())];
        std::size_t db = i < out.size() - b.size() ? 1 : b[i - (out.size() - b.size())];
        if (da != db && da != 1 && db != 1)
            throw ShapeError(std::string(op) + ": shapes " + shape_str(a) + " and " + shape_str(b) +
                             " are not broadcastable");
        out[i] = std::max(da, db);
    }
    return out;
}

// Map a flat index in `out` to a flat index in an input of shape `in`
// broadcast against `out` (right-aligned, dim-1 repeats).
struct BroadcastMap {
    std::vector<std::size_t> out_dims;
    std::vector<std::size_t> in_strides;  // 0 where the input dim is broadcast

    BroadcastMap(const Shape& out, const Shape& in) {
        out_dims = out;
        in_strides.assign(out.size(), 0);
        auto ist = strides_of(in);
        std::size_t off = out.size() - in.size();
        for (std::size_t i = 0; i < in.size(); ++i)
            in_strides[off + i] = in[i] == 1 ? 0 : ist[i];
    }

    std::size_t operator()(std::size_t flat) const {
        std::size_t idx = 0;
        for (std::size_t i = out_dims.size(); i-- > 0;) {
            idx += (flat % out_dims[i]) * in_strides[i];
            flat /= out_dims[i];
        }
        return idx;
    }
};

template <class S>
void accumulate_into(TensorNode<S>& parent, const std::vector<S>& contribution) {
    if (!parent.requires_grad) return;
    parent.ensure_grad();
    for (std::size_t i = 0; i < contribution.size(); ++i) parent.grad[i] += contribution[i];
}

// Elementwise binary op with numpy-style broadcasting. fwd(a,b) computes the
// value, dfa/dfb the partials w.r.t. each operand.
template <class S, class F, class Da, class Db>
Tensor<S> broadcast_binary(const char* name, const Tensor<S>& a, const Tensor<S>& b, F fwd, Da dfa,
                           Db dfb) {
    Shape oshape = broadcast_shape(a.shape(), b.shape(), name);
    std::size_t n = shape_numel(oshape);
    std::vector<S> out(n);
    const auto& av = a.values();
    const auto& bv = b.values();
    if (a.shape() == b.shape()) {
        for (std::size_t i = 0; i < n; ++i) out[i] = fwd(av[i], bv[i]);
    } else {
        BroadcastMap ma(oshape, a.shape()), mb(oshape, b.shape());
        for (std::size_t i = 0; i < n; ++i) out[i] = fwd(av[ma(i)], bv[mb(i)]);
    }
    auto an = a.node();
    auto bn = b.node();
    Shape ash = a.shape(), bsh = b.shape();
    bool same = ash == bsh;
    return make_result<S>(
        oshape, std::move(out), {a, b}, [=](TensorNode<S>& self) {
            if (same) {
                if (an->requires_grad) {
                    an->ensure_grad();
                    for (std::size_t i = 0; i < self.data.size(); ++i)
                        an->grad[i] += self.grad[i] * dfa(an->data[i], bn->data[i]);
                }
                if (bn->requires_grad) {
                    bn->ensure_grad();
                    for (std::size_t i = 0; i < self.data.size(); ++i)
                        bn->grad[i] += self.grad[i] * dfb(an->data[i], bn->data[i]);
                }
                return;
            }
            BroadcastMap ma(self.shape, ash), mb(self.shape, bsh);
            if (an->requires_grad) {
                an->ensure_grad();
                for (std::size_t i = 0; i < self.data.size(); ++i) {
                    std::size_t ia = ma(i);
                    an->grad[ia] += self.grad[i] * dfa(an->data[ia], bn->data[mb(i)]);
                }
            }
            if (bn->requires_grad) {
                bn->ensure_grad();
                for (std::size_t i = 0; i < self.data.size(); ++i) {
                    std::size_t ib = mb(i);
                    bn->grad[ib] += self.grad[i] * dfb(an->data[ma(i)], bn->data[ib]);
                }
            }
        });
}

template <class S, class F, class D>
Tensor<S> unary_op(const Tensor<S>& x, F fwd, D dfd) {
    std::size_t n = x.numel();
    std::vector<S> out(n);
    const auto& xv = x.values();
    for (std::size_t i = 0; i < n; ++i) out[i] = fwd(xv[i]);
    auto xn = x.node();
    return make_result<S>(x.shape(), std::move(out), {x}, [=](TensorNode<S>& self) {
        xn->ensure_grad();
        for (std::size_t i = 0; i < self.data.size(); ++i)
            xn->grad[i] += self.grad[i] * dfd(xn->data[i], self.data[i]);
    });
}

// Raw C = A*B (optionally transposed operands) over row-major buffers.
// Accumulation order inside each output element is a fixed sequential k-loop,
// so results are bit-identical regardless of thread count.
template <class S>
void gemm(bool ta, bool tb, std::size_t m, std::size_t n, std::size_t k, const S* A, const S* B,
          S* C, bool accumulate) {
    if (!accumulate) std::fill(C, C + m * n, S(0));
    if (!ta && !tb) {
#pragma omp parallel for schedule(static) if (m * n * k > 16384)
        for (std::ptrdiff_t i = 0; i < static_cast<std::ptrdiff_t>(m); ++i) {
            S* crow = C + i * n;
            for (std::size_t kk = 0; kk < k; ++kk) {
                S aik = A[i * k + kk];
                const S* brow = B + kk * n;
                for (std::size_t j = 0; j < n; ++j) crow[j] += aik * brow[j];
            }
        }
    } else if (!ta && tb) {  // C[i,j] += sum_k A[i,k] * B[j,k]
#pragma omp parallel for schedule(static) if (m * n * k > 16384)
        for (std::ptrdiff_t i = 0; i < static_cast<std::ptrdiff_t>(m); ++i) {
            const S* arow = A + i * k;
            S* crow = C + i * n;
            for (std::size_t j = 0; j < n; ++j) {
                const S* brow = B + j * k;
                S acc = 0;
                for (std::size_t kk = 0; kk < k; ++kk) acc += arow[kk] * brow[kk];
                crow[j] += acc;
            }
        }
    } else if (ta && !tb) {  // C[i,j] += sum_k A[k,i] * B[k,j]
#pragma omp parallel for schedule(static) if (m * n * k > 16384)
        for (std::ptrdiff_t i = 0; i < static_cast<std::ptrdiff_t>(m); ++i) {
            S* crow = C + i * n;
            for (std::size_t kk = 0; kk < k; ++kk) {
                S aki = A[kk * m + i];
                const S* brow = B + kk * n;
                for (std::size_t j = 0; j < n; ++j) crow[j] += aki * brow[j];
            }
        }
    } else {  // C[i,j] += sum_k A[k,i] * B[j,k]
#pragma omp parallel for schedule(static) if (m * n * k > 16384)
        for (std::ptrdiff_t i = 0; i < static_cast<std::ptrdiff_t>(m); ++i) {
            S* crow = C + i * n;
            for (std::size_t j = 0; j < n; ++j) {
                const S* brow = B + j * k;
                S acc = 0;
                for (std::size_t kk = 0; kk < k; ++kk) acc += A[kk * m + i] * brow[kk];
                crow[j] += acc;
            }
        }
    }
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Elementwise arithmetic
// ---------------------------------------------------------------------------

template <class S>
Tensor<S> add(const Tensor<S>& a, const Tensor<S>& b) {
    return detail::broadcast_binary<S>(
        "add", a, b, [](S x, S y) { return x + y; }, [](S, S) { return S(1); },
        [](S, S) { return S(1); });
}

template <class S>
Tensor<S> sub(const Tensor<S>& a, const Tensor<S>& b) {
    return detail::broadcast_binary<S>(
        "sub", a, b, [](S x, S y) { return x - y; }, [](S, S) { return S(1); },
        [](S, S) { return S(-1); });
}

template <class S>
Tensor<S> mul(const Tensor<S>& a, const Tensor<S>& b) {
    return detail::broadcast_binary<S>(
        "mul", a, b, [](S x, S y) { return x * y; }, [](S, S y) { return y; },
        [](S x, S) { return x; });
}

template <class S>
Tensor<S> div(const Tensor<S>& a, const Tensor<S>& b) {
    return detail::broadcast_binary<S>(
        "div", a, b, [](S x, S y) { return x / y; }, [](S, S y) { return S(1) / y; },
        [](S x, S y) { return -x / (y * y); });
}

template <class S>
Tensor<S> neg(const Tensor<S>& x) {
    return detail::unary_op(x, [](S v) { return -v; }, [](S, S) { return S(-1); });
}

template <class S>
Tensor<S> add_scalar(const Tensor<S>& x, S c) {
    return detail::unary_op(x, [c](S v) { return v + c; }, [](S, S) { return S(1); });
}

template <class S>
Tensor<S> mul_scalar(const Tensor<S>& x, S c) {
    return detail::unary_op(x, [c](S v) { return v * c; }, [c](S, S) { return c; });
}

template <class S>
Tensor<S> exp_t(const Tensor<S>& x) {
    return detail::unary_op(x, [](S v) { return std::exp(v); }, [](S, S y) { return y; });
}

template <class S>
Tensor<S> log_t(const Tensor<S>& x) {
    return detail::unary_op(x, [](S v) { return std::log(v); }, [](S v, S) { return S(1) / v; });
}

template <class S>
Tensor<S> sqrt_t(const Tensor<S>& x) {
    return detail::unary_op(x, [](S v) { return std::sqrt(v); },
                            [](S, S y) { return S(0.5) / y; });
}

// Exact GELU via erf.
template <class S>
Tensor<S> gelu(const Tensor<S>& x) {
    return detail::unary_op(
        x,
        [](S v) { return static_cast<S>(0.5 * double(v) * (1.0 + std::erf(double(v) * 0.7071067811865475244))); },
        [](S v, S) {
            double phi = 0.3989422804014326779 * std::exp(-0.5 * double(v) * double(v));
            return static_cast<S>(0.5 * (1.0 + std::erf(double(v) * 0.7071067811865475244)) +
                                  double(v) * phi);
        });
}

// Inverted dropout with a pre-drawn mask; identity when rate == 0.
template <class S>
Tensor<S> dropout(const Tensor<S>& x, double rate, Rng& rng) {
    if (rate <= 0.0) return x;
    std::vector<S> mask(x.numel());
    S keep_scale = static_cast<S>(1.0 / (1.0 - rate));
    for (S& m : mask) m = rng.bernoulli(rate) ? S(0) : keep_scale;
    Tensor<S> mask_t = Tensor<S>::from(x.shape(), std::move(mask));
    return mul(x, mask_t);
}

// ---------------------------------------------------------------------------
// Shape ops
// ---------------------------------------------------------------------------

template <class S>
Tensor<S> reshape(const Tensor<S>& x, Shape new_shape) {
    if (shape_numel(new_shape) != x.numel())
        throw ShapeError("reshape: cannot view " + shape_str(x.shape()) + " as " +
                         shape_str(new_shape));
    auto xn = x.node();
    return detail::make_result<S>(std::move(new_shape), x.values(), {x},
                                  [xn](TensorNode<S>& self) {
                                      xn->ensure_grad();
                                      for (std::size_t i = 0; i < self.data.size(); ++i)
                                          xn->grad[i] += self.grad[i];
                                  });
}

// General axis permutation (out dim i = in dim axes[i]).
template <class S>
Tensor<S> permute(const Tensor<S>& x, const std::vector<std::size_t>& axes) {
    if (axes.size() != x.ndim()) throw ShapeError("permute: axes rank mismatch");
    Shape oshape(axes.size());
    for (std::size_t i = 0; i < axes.size(); ++i) oshape[i] = x.shape()[axes[i]];
    auto in_strides = detail::strides_of(x.shape());
    std::vector<std::size_t> gather(x.numel());
    {
        std::vector<std::size_t> idx(axes.size(), 0);
        for (std::size_t flat = 0; flat < x.numel(); ++flat) {
            std::size_t rem = flat, src = 0;
            for (std::size_t i = oshape.size(); i-- > 0;) {
                idx[i] = rem % oshape[i];
                rem /= oshape[i];
            }
            for (std::size_t i = 0; i < axes.size(); ++i) src += idx[i] * in_strides[axes[i]];
            gather[flat] = src;
        }
    }
    std::vector<S> out(x.numel());
    const auto& xv = x.values();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = xv[gather[i]];
    auto xn = x.node();
    auto gmap = std::make_shared<std::vector<std::size_t>>(std::move(gather));
    return detail::make_result<S>(std::move(oshape), std::move(out), {x},
                                  [xn, gmap](TensorNode<S>& self) {
                                      xn->ensure_grad();
                                      for (std::size_t i = 0; i < self.data.size(); ++i)
                                          xn->grad[(*gmap)[i]] += self.grad[i];
                                  });
}

// Swap the last two axes.
template <class S>
Tensor<S> transpose2(const Tensor<S>& x) {
    if (x.ndim() < 2) throw ShapeError("transpose2: need rank >= 2, got " + shape_str(x.shape()));
    std::vector<std::size_t> axes(x.ndim());
    for (std::size_t i = 0; i < axes.size(); ++i) axes[i] = i;
    std::swap(axes[axes.size() - 1], axes[axes.size() - 2]);
    return permute(x, axes);
}

template <class S>
Tensor<S> concat(const std::vector<Tensor<S>>& parts, std::size_t axis) {
    if (parts.empty()) throw ShapeError("concat: no inputs");
    const Shape& s0 = parts[0].shape();
    if (axis >= s0.size()) throw ShapeError("concat: axis out of range");
    Shape oshape = s0;
    oshape[axis] = 0;
    for (const auto& p : parts) {
        if (p.ndim() != s0.size()) throw ShapeError("concat: rank mismatch");
        for (std::size_t i = 0; i < s0.size(); ++i)
            if (i != axis && p.shape()[i] != s0[i])
                throw ShapeError("concat: shapes " + shape_str(s0) + " and " +
                                 shape_str(p.shape()) + " differ off-axis");
        oshape[axis] += p.shape()[axis];
    }
    // outer = dims before axis, inner = dims after (contiguous block copy)
    std::size_t outer = 1, inner = 1;
    for (std::size_t i = 0; i < axis; ++i) outer *= oshape[i];
    for (std::size_t i = axis + 1; i < oshape.size(); ++i) inner *= oshape[i];
    std::vector<S> out(shape_numel(oshape));
    std::size_t axis_total = oshape[axis];
    std::size_t offset = 0;
    for (const auto& p : parts) {
        std::size_t pa = p.shape()[axis];
        const auto& pv = p.values();
        for (std::size_t o = 0; o < outer; ++o)
            std::copy(pv.begin() + o * pa * inner, pv.begin() + (o + 1) * pa * inner,
                      out.begin() + (o * axis_total + offset) * inner);
        offset += pa;
    }
    std::vector<std::shared_ptr<TensorNode<S>>> pnodes;
    std::vector<std::size_t> axis_sizes;
    for (const auto& p : parts) {
        pnodes.push_back(p.node());
        axis_sizes.push_back(p.shape()[axis]);
    }
    return detail::make_result<S>(
        std::move(oshape), std::move(out), parts,
        [pnodes, axis_sizes, outer, inner, axis_total](TensorNode<S>& self) {
            std::size_t offset = 0;
            for (std::size_t pi = 0; pi < pnodes.size(); ++pi) {
                auto& pn = *pnodes[pi];
                std::size_t pa = axis_sizes[pi];
                if (pn.requires_grad) {
                    pn.ensure_grad();
                    for (std::size_t o = 0; o < outer; ++o)
                        for (std::size_t i = 0; i < pa * inner; ++i)
                            pn.grad[o * pa * inner + i] +=
                                self.grad[(o * axis_total + offset) * inner + i];
                }
                offset += pa;
            }
        });
}

// Stack rank-1 tensors of equal length into a matrix [k, d].
template <class S>
Tensor<S> stack_rows(const std::vector<Tensor<S>>& rows) {
    std::vector<Tensor<S>> reshaped;
    reshaped.reserve(rows.size());
    for (const auto& r : rows) {
        if (r.ndim() != 1) throw ShapeError("stack_rows: expected rank-1 inputs");
        reshaped.push_back(reshape(r, {1, r.numel()}));
    }
    return concat(reshaped, 0);
}

// Diagonal of a square matrix -> [k].
template <class S>
Tensor<S> diag(const Tensor<S>& x) {
    if (x.ndim() != 2 || x.shape()[0] != x.shape()[1])
        throw ShapeError("diag: need square matrix, got " + shape_str(x.shape()));
    std::size_t k = x.shape()[0];
    std::vector<S> out(k);
    for (std::size_t i = 0; i < k; ++i) out[i] = x.values()[i * k + i];
    auto xn = x.node();
    return detail::make_result<S>({k}, std::move(out), {x}, [xn, k](TensorNode<S>& self) {
        xn->ensure_grad();
        for (std::size_t i = 0; i < k; ++i) xn->grad[i * k + i] += self.grad[i];
    });
}

// Gather arbitrary (row, col) elements of a matrix -> [n].
template <class S>
Tensor<S> take_rc(const Tensor<S>& x, const std::vector<std::size_t>& rows,
                  const std::vector<std::size_t>& cols) {
    if (x.ndim() != 2) throw ShapeError("take_rc: need matrix, got " + shape_str(x.shape()));
    if (rows.size() != cols.size()) throw ShapeError("take_rc: rows/cols length mismatch");
    std::size_t ncols = x.shape()[1];
    std::vector<S> out(rows.size());
    for (std::size_t i = 0; i < rows.size(); ++i) {
        if (rows[i] >= x.shape()[0] || cols[i] >= ncols)
            throw ShapeError("take_rc: index out of range");
        out[i] = x.values()[rows[i] * ncols + cols[i]];
    }
    auto xn = x.node();
    auto r = std::make_shared<std::vector<std::size_t>>(rows);
    auto c = std::make_shared<std::vector<std::size_t>>(cols);
    return detail::make_result<S>({rows.size()}, std::move(out), {x},
                                  [xn, r, c, ncols](TensorNode<S>& self) {
                                      xn->ensure_grad();
                                      for (std::size_t i = 0; i < self.data.size(); ++i)
                                          xn->grad[(*r)[i] * ncols + (*c)[i]] += self.grad[i];
                                  });
}

// Embedding lookup: rows of `table` [V, d] selected by ids -> [n, d].
// Backward scatter-adds into the table rows.
template <class S>
Tensor<S> embedding_lookup(const Tensor<S>& table, const std::vector<std::int64_t>& ids) {
    if (table.ndim() != 2) throw ShapeError("embedding_lookup: table must be [V, d]");
    std::size_t V = table.shape()[0], d = table.shape()[1];
    std::vector<S> out(ids.size() * d);
    for (std::size_t i = 0; i < ids.size(); ++i) {
        if (ids[i] < 0 || static_cast<std::size_t>(ids[i]) >= V)
            throw ShapeError("embedding_lookup: id " + std::to_string(ids[i]) +
                             " out of range [0," + std::to_string(V) + ")");
        std::copy_n(table.values().begin() + static_cast<std::size_t>(ids[i]) * d, d,
                    out.begin() + i * d);
    }
    auto tn = table.node();
    auto idv = std::make_shared<std::vector<std::int64_t>>(ids);
    return detail::make_result<S>({ids.size(), d}, std::move(out), {table},
                                  [tn, idv, d](TensorNode<S>& self) {
                                      tn->ensure_grad();
                                      for (std::size_t i = 0; i < idv->size(); ++i) {
                                          std::size_t row = static_cast<std::size_t>((*idv)[i]);
                                          for (std::size_t j = 0; j < d; ++j)
                                              tn->grad[row * d + j] += self.grad[i * d + j];
                                      }
                                  });
}

// ---------------------------------------------------------------------------
// Reductions
// ---------------------------------------------------------------------------

template <class S>
Tensor<S> sum_all(const Tensor<S>& x) {
    S acc = 0;
    for (S v : x.values()) acc += v;
    auto xn = x.node();
    return detail::make_result<S>({1}, {acc}, {x}, [xn](TensorNode<S>& self) {
        xn->ensure_grad();
        for (S& g : xn->grad) g += self.grad[0];
    });
}

template <class S>
Tensor<S> mean_all(const Tensor<S>& x) {
    return mul_scalar(sum_all(x), static_cast<S>(1.0 / double(x.numel())));
}

// Sum over the last axis, keeping it as size 1 (so results broadcast back).
template <class S>
Tensor<S> sum_lastdim(const Tensor<S>& x) {
    if (x.ndim() < 1) throw ShapeError("sum_lastdim: rank 0");
    std::size_t d = x.shape().back();
    std::size_t rows = x.numel() / d;
    std::vector<S> out(rows);
    const auto& xv = x.values();
    for (std::size_t r = 0; r < rows; ++r) {
        S acc = 0;
        for (std::size_t j = 0; j < d; ++j) acc += xv[r * d + j];
        out[r] = acc;
    }
    Shape oshape = x.shape();
    oshape.back() = 1;
    auto xn = x.node();
    return detail::make_result<S>(std::move(oshape), std::move(out), {x},
                                  [xn, d, rows](TensorNode<S>& self) {
                                      xn->ensure_grad();
                                      for (std::size_t r = 0; r < rows; ++r)
                                          for (std::size_t j = 0; j < d; ++j)
                                              xn->grad[r * d + j] += self.grad[r];
                                  });
}

template <class S>
Tensor<S> mean_lastdim(const Tensor<S>& x) {
    std::size_t d = x.shape().back();
    return mul_scalar(sum_lastdim(x), static_cast<S>(1.0 / double(d)));
}

// ---------------------------------------------------------------------------
// Matrix multiplication
// ---------------------------------------------------------------------------

// matmul(a, b): last two axes contract as [.., m, k] x [.., k, n] -> [.., m, n].
// Leading (batch) axes must either match, or one operand may be rank-2 and is
// then shared across the other's batch.
template <class S>
Tensor<S> matmul(const Tensor<S>& a, const Tensor<S>& b) {
    if (a.ndim() < 2 || b.ndim() < 2)
        throw ShapeError("matmul: need rank >= 2 operands, got " + shape_str(a.shape()) + " and " +
                         shape_str(b.shape()));
    std::size_t m = a.shape()[a.ndim() - 2], ka = a.shape()[a.ndim() - 1];
    std::size_t kb = b.shape()[b.ndim() - 2], n = b.shape()[b.ndim() - 1];
    if (ka != kb)
        throw ShapeError("matmul: inner dimensions disagree: " + shape_str(a.shape()) + " x " +
                         shape_str(b.shape()));
    Shape abatch(a.shape().begin(), a.shape().end() - 2);
    Shape bbatch(b.shape().begin(), b.shape().end() - 2);
    if (!abatch.empty() && !bbatch.empty() && abatch != bbatch)
        throw ShapeError("matmul: batch dimensions disagree: " + shape_str(a.shape()) + " x " +
                         shape_str(b.shape()));
    Shape batch = abatch.empty() ? bbatch : abatch;
    std::size_t nbatch = shape_numel(batch);
    bool a_shared = abatch.empty() && !bbatch.empty();
    bool b_shared = bbatch.empty() && !abatch.empty();

    Shape oshape = batch;
    oshape.push_back(m);
    oshape.push_back(n);
    std::vector<S> out(shape_numel(oshape));
    const S* ap = a.values().data();
    const S* bp = b.values().data();
    for (std::size_t bi = 0; bi < nbatch; ++bi)
        detail::gemm<S>(false, false, m, n, ka, ap + (a_shared ? 0 : bi * m * ka),
                        bp + (b_shared ? 0 : bi * ka * n), out.data() + bi * m * n, false);

    auto an = a.node();
    auto bn = b.node();
    return detail::make_result<S>(
        std::move(oshape), std::move(out), {a, b},
        [an, bn, m, n, ka, nbatch, a_shared, b_shared](TensorNode<S>& self) {
            // dA = dC * B^T, dB = A^T * dC; shared operands accumulate over
            // the batch in a fixed serial order.
            if (an->requires_grad) {
                an->ensure_grad();
                for (std::size_t bi = 0; bi < nbatch; ++bi)
                    detail::gemm<S>(false, true, m, ka, n, self.grad.data() + bi * m * n,
                                    bn->data.data() + (b_shared ? 0 : bi * ka * n),
                                    an->grad.data() + (a_shared ? 0 : bi * m * ka), true);
            }
            if (bn->requires_grad) {
                bn->ensure_grad();
                for (std::size_t bi = 0; bi < nbatch; ++bi)
                    detail::gemm<S>(true, false, ka, n, m,
                                    an->data.data() + (a_shared ? 0 : bi * m * ka),
                                    self.grad.data() + bi * m * n,
                                    bn->grad.data() + (b_shared ? 0 : bi * ka * n), true);
            }
        });
}

// ---------------------------------------------------------------------------
// Normalization & softmax
// ---------------------------------------------------------------------------

// Row softmax over the last axis, stabilized by max subtraction. Rows that are
// entirely -inf (fully masked) produce a uniform row and no gradient.
template <class S>
Tensor<S> softmax_lastdim(const Tensor<S>& x) {
    std::size_t d = x.shape().back();
    if (d < 1) throw ShapeError("softmax_lastdim: empty last axis");
    std::size_t rows = x.numel() / d;
    std::vector<S> out(x.numel());
    const auto& xv = x.values();
    for (std::size_t r = 0; r < rows; ++r) {
        const S* row = xv.data() + r * d;
        S* orow = out.data() + r * d;
        S mx = row[0];
        for (std::size_t j = 1; j < d; ++j) mx = std::max(mx, row[j]);
        if (!(mx > -std::numeric_limits<S>::infinity())) {
            for (std::size_t j = 0; j < d; ++j) orow[j] = static_cast<S>(1.0 / double(d));
            continue;
        }
        S denom = 0;
        for (std::size_t j = 0; j < d; ++j) {
            orow[j] = std::exp(row[j] - mx);
            denom += orow[j];
        }
        for (std::size_t j = 0; j < d; ++j) orow[j] /= denom;
    }
    auto xn = x.node();
    return detail::make_result<S>(x.shape(), std::move(out), {x},
                                  [xn, d, rows](TensorNode<S>& self) {
                                      xn->ensure_grad();
                                      for (std::size_t r = 0; r < rows; ++r) {
                                          const S* y = self.data.data() + r * d;
                                          const S* dy = self.grad.data() + r * d;
                                          S dot = 0;
                                          for (std::size_t j = 0; j < d; ++j) dot += dy[j] * y[j];
                                          for (std::size_t j = 0; j < d; ++j)
                                              xn->grad[r * d + j] += y[j] * (dy[j] - dot);
                                      }
                                  });
}

// softmax_rows(x, bias): softmax over the last axis of x + bias (bias
// broadcast against x). The attention path passes the ALiBi distance penalty
// and the -inf padding mask through `bias`.
template <class S>
Tensor<S> softmax_rows(const Tensor<S>& x) {
    return softmax_lastdim(x);
}

template <class S>
Tensor<S> softmax_rows(const Tensor<S>& x, const Tensor<S>& additive_bias) {
    return softmax_lastdim(add(x, additive_bias));
}

// Row-wise log(sum(exp(x))) over the last axis, keepdim, max-stabilized.
template <class S>
Tensor<S> logsumexp_lastdim(const Tensor<S>& x) {
    std::size_t d = x.shape().back();
    std::size_t rows = x.numel() / d;
    std::vector<S> out(rows);
    const auto& xv = x.values();
    for (std::size_t r = 0; r < rows; ++r) {
        const S* row = xv.data() + r * d;
        S mx = row[0];
        for (std::size_t j = 1; j < d; ++j) mx = std::max(mx, row[j]);
        S acc = 0;
        for (std::size_t j = 0; j < d; ++j) acc += std::exp(row[j] - mx);
        out[r] = mx + std::log(acc);
    }
    Shape oshape = x.shape();
    oshape.back() = 1;
    auto xn = x.node();
    return detail::make_result<S>(std::move(oshape), std::move(out), {x},
                                  [xn, d, rows](TensorNode<S>& self) {
                                      // d lse / d x_j = softmax(x)_j
                                      xn->ensure_grad();
                                      for (std::size_t r = 0; r < rows; ++r) {
                                          S lse = self.data[r];
                                          S g = self.grad[r];
                                          for (std::size_t j = 0; j < d; ++j)
                                              xn->grad[r * d + j] +=
                                                  g * std::exp(xn->data[r * d + j] - lse);
                                      }
                                  });
}

// layer_norm(x, gain, bias, eps): per-row (last axis) standardization with a
// learned affine map; biased variance, eps inside the square root.
template <class S>
Tensor<S> layer_norm(const Tensor<S>& x, const Tensor<S>& gain, const Tensor<S>& bias,
                     double eps) {
    std::size_t d = x.shape().back();
    if (gain.numel() != d || bias.numel() != d)
        throw ShapeError("layer_norm: gain/bias must have length " + std::to_string(d));
    if (!(eps > 0)) throw ConfigError("layer_norm: eps must be positive");
    std::size_t rows = x.numel() / d;
    std::vector<S> out(x.numel());
    std::vector<S> inv_sigma(rows), xhat(x.numel());
    const auto& xv = x.values();
    const auto& gv = gain.values();
    const auto& bv = bias.values();
    for (std::size_t r = 0; r < rows; ++r) {
        const S* row = xv.data() + r * d;
        S mu = 0;
        for (std::size_t j = 0; j < d; ++j) mu += row[j];
        mu /= static_cast<S>(d);
        S var = 0;
        for (std::size_t j = 0; j < d; ++j) var += (row[j] - mu) * (row[j] - mu);
        var /= static_cast<S>(d);
        S is = static_cast<S>(1.0 / std::sqrt(double(var) + eps));
        inv_sigma[r] = is;
        for (std::size_t j = 0; j < d; ++j) {
            S xh = (row[j] - mu) * is;
            xhat[r * d + j] = xh;
            out[r * d + j] = gv[j] * xh + bv[j];
        }
    }
    auto xn = x.node();
    auto gn = gain.node();
    auto bn = bias.node();
    auto is_keep = std::make_shared<std::vector<S>>(std::move(inv_sigma));
    auto xh_keep = std::make_shared<std::vector<S>>(std::move(xhat));
    return detail::make_result<S>(
        x.shape(), std::move(out), {x, gain, bias},
        [xn, gn, bn, is_keep, xh_keep, d, rows](TensorNode<S>& self) {
            for (std::size_t r = 0; r < rows; ++r) {
                const S* dy = self.grad.data() + r * d;
                const S* xh = xh_keep->data() + r * d;
                S is = (*is_keep)[r];
                if (xn->requires_grad) {
                    xn->ensure_grad();
                    S mean_dg = 0, mean_dgxh = 0;
                    for (std::size_t j = 0; j < d; ++j) {
                        S dg = dy[j] * gn->data[j];
                        mean_dg += dg;
                        mean_dgxh += dg * xh[j];
                    }
                    mean_dg /= static_cast<S>(d);
                    mean_dgxh /= static_cast<S>(d);
                    for (std::size_t j = 0; j < d; ++j) {
                        S dg = dy[j] * gn->data[j];
                        xn->grad[r * d + j] += is * (dg - mean_dg - xh[j] * mean_dgxh);
                    }
                }
                if (gn->requires_grad) {
                    gn->ensure_grad();
                    for (std::size_t j = 0; j < d; ++j) gn->grad[j] += dy[j] * xh[j];
                }
                if (bn->requires_grad) {
                    bn->ensure_grad();
                    for (std::size_t j = 0; j < d; ++j) bn->grad[j] += dy[j];
                }
            }
        });
}

// ---------------------------------------------------------------------------
// Similarity composites
// ---------------------------------------------------------------------------

// Divide each row by its L2 norm. Zero-norm rows are a degenerate input.
template <class S>
Tensor<S> normalize_lastdim(const Tensor<S>& x) {
    Tensor<S> sq = sum_lastdim(mul(x, x));
    for (S v : sq.values())
        if (!(v > 0))
            throw DegenerateError("normalize_lastdim: zero-norm row (cosine undefined)");
    return div(x, sqrt_t(sq));
}

// Cosine similarity of two vectors -> scalar tensor in [-1, 1].
template <class S>
Tensor<S> cosine_sim(const Tensor<S>& x, const Tensor<S>& y) {
    if (x.ndim() != 1 || y.ndim() != 1 || x.numel() != y.numel())
        throw ShapeError("cosine_sim: need equal-length vectors, got " + shape_str(x.shape()) +
                         " and " + shape_str(y.shape()));
    Tensor<S> xs = sum_all(mul(x, x));
    Tensor<S> ys = sum_all(mul(y, y));
    if (!(xs.item() > 0) || !(ys.item() > 0))
        throw DegenerateError("cosine_sim: zero-norm input");
    Tensor<S> dot = sum_all(mul(x, y));
    return div(dot, sqrt_t(mul(xs, ys)));
}

// ---------------------------------------------------------------------------
// Backward
// ---------------------------------------------------------------------------

// Reverse-mode sweep from a scalar root. Seeds d(root)/d(root) = 1 and
// accumulates into every requires_grad ancestor. Calling twice accumulates
// twice; callers zero grads between optimizer steps.
template <class S>
void backward(const Tensor<S>& root) {
    if (!root.defined() || root.numel() != 1)
        throw ShapeError("backward: root must be a defined scalar tensor");
    using Node = TensorNode<S>;
    std::vector<Node*> order;
    std::unordered_set<Node*> seen;
    // Iterative post-order DFS; children (parents in graph terms) first.
    std::vector<std::pair<Node*, std::size_t>> stack;
    stack.emplace_back(root.node().get(), 0);
    seen.insert(root.node().get());
    while (!stack.empty()) {
        auto& [node, next] = stack.back();
        if (next < node->parents.size()) {
            Node* p = node->parents[next++].get();
            if (seen.insert(p).second) stack.emplace_back(p, 0);
        } else {
            order.push_back(node);
            stack.pop_back();
        }
    }
    // Interior grads are per-sweep scratch: reset them so a second backward
    // over the same graph contributes exactly one more unit. Leaf grads
    // (no parents) persist and accumulate for the optimizer.
    for (Node* node : order)
        if (!node->parents.empty() && !node->grad.empty()) node->grad.assign(node->data.size(), S(0));
    root.node()->ensure_grad();
    root.node()->grad[0] += S(1);
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
        Node* node = *it;
        if (node->backprop && node->grad.size() == node->data.size()) node->backprop(*node);
    }
}

// ---------------------------------------------------------------------------
// Gradient oracle
// ---------------------------------------------------------------------------

// Central finite-difference check of d f / d x against the autodiff gradient.
// Returns max over checked coordinates of
//   |analytic - central| / (|analytic| + 1e-12).
// When numel > max_coords, a deterministic evenly-spaced subset is checked.
template <class S>
double finite_diff_check(const std::function<Tensor<S>(const Tensor<S>&)>& f, const Tensor<S>& x,
                         double h,
                         std::size_t max_coords = std::numeric_limits<std::size_t>::max()) {
    if (!(h > 0)) throw ConfigError("finite_diff_check: h must be positive");
    Tensor<S> leaf = Tensor<S>::from(x.shape(), x.values());
    leaf.set_requires_grad(true);
    Tensor<S> y = f(leaf);
    if (y.numel() != 1) throw ShapeError("finite_diff_check: f must be scalar-valued");
    backward(y);
    std::vector<S> analytic = leaf.grad();

    std::size_t n = x.numel();
    std::size_t step = 1, count = n;
    if (n > max_coords && max_coords > 0) {
        step = (n + max_coords - 1) / max_coords;
        count = (n + step - 1) / step;
    }
    double worst = 0.0;
    std::vector<S> base = x.values();
    for (std::size_t c = 0; c < count; ++c) {
        std::size_t i = c * step;
        std::vector<S> plus = base, minus = base;
        plus[i] = static_cast<S>(double(plus[i]) + h);
        minus[i] = static_cast<S>(double(minus[i]) - h);
        double fp = double(f(Tensor<S>::from(x.shape(), std::move(plus))).item());
        double fm = double(f(Tensor<S>::from(x.shape(), std::move(minus))).item());
        double central = (fp - fm) / (2.0 * h);
        double err = std::abs(double(analytic[i]) - central) /
                     (std::abs(double(analytic[i])) + 1e-12);
        worst = std::max(worst, err);
    }
    return worst;
}

using TensorD = Tensor<double>;
using TensorF = Tensor<float>;

}  // namespace biembed
