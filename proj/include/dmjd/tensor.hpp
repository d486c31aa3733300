#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <initializer_list>
#include <limits>
#include <memory>
#include <numbers>
#include <span>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "dmjd/error.hpp"

namespace dmjd {

using Shape = std::vector<std::size_t>;

inline std::size_t shape_numel(const Shape& s) {
    std::size_t n = 1;
    for (std::size_t d : s) n *= d;
    return n;
}

inline std::string shape_str(const Shape& s) {
    std::ostringstream os;
    os << '[';
    for (std::size_t i = 0; i < s.size(); ++i) os << (i ? "," : "") << s[i];
    os << ']';
    return os.str();
}

template <typename T>
struct TensorNode {
    Shape shape;
    std::vector<T> value;
    std::vector<T> grad;  // empty until backward touches this node
    bool requires_grad = false;

    void ensure_grad() {
        if (grad.size() != value.size()) grad.assign(value.size(), T(0));
    }
};

template <typename T>
class Tape;

// Dense real tensor. Value-semantic handle to shared storage; shapes are
// row-major, rank 0 holds a single scalar. Once produced by an op a tensor's
// values are never mutated; only grad buffers accumulate (inside backward).
template <typename T>
class Tensor {
public:
    Tensor() = default;

    static Tensor zeros(Shape shape, bool requires_grad = false) {
        return full(std::move(shape), T(0), requires_grad);
    }

    static Tensor full(Shape shape, T v, bool requires_grad = false) {
        auto node = std::make_shared<TensorNode<T>>();
        node->value.assign(shape_numel(shape), v);
        node->shape = std::move(shape);
        node->requires_grad = requires_grad;
        return Tensor(std::move(node));
    }

    static Tensor from(Shape shape, std::vector<T> data, bool requires_grad = false) {
        if (shape_numel(shape) != data.size()) {
            throw shape_error("Tensor::from: shape " + shape_str(shape) + " wants " +
                              std::to_string(shape_numel(shape)) + " values, got " +
                              std::to_string(data.size()));
        }
        auto node = std::make_shared<TensorNode<T>>();
        node->shape = std::move(shape);
        node->value = std::move(data);
        node->requires_grad = requires_grad;
        return Tensor(std::move(node));
    }

    static Tensor scalar(T v) { return from({}, {v}); }

    bool valid() const { return node_ != nullptr; }
    const Shape& shape() const { return node_->shape; }
    std::size_t rank() const { return node_->shape.size(); }
    std::size_t extent(std::size_t axis) const { return node_->shape.at(axis); }
    std::size_t numel() const { return node_->value.size(); }

    std::span<const T> values() const { return node_->value; }
    // Leaf initialization only; never mutate a tensor that ops already consumed.
    std::span<T> values_mut() { return node_->value; }

    T item() const {
        if (numel() != 1) {
            throw contract_error("Tensor::item: tensor has shape " + shape_str(shape()));
        }
        return node_->value[0];
    }

    bool requires_grad() const { return node_->requires_grad; }
    Tensor& set_requires_grad(bool b) {
        node_->requires_grad = b;
        return *this;
    }

    bool has_grad() const { return node_->grad.size() == node_->value.size(); }
    std::span<const T> grad() const {
        if (!has_grad()) throw contract_error("Tensor::grad: no gradient present; run backward first");
        return node_->grad;
    }
    void zero_grad() {
        if (!node_->grad.empty()) std::fill(node_->grad.begin(), node_->grad.end(), T(0));
    }

    std::shared_ptr<TensorNode<T>> node_ptr() const { return node_; }
    TensorNode<T>* node() const { return node_.get(); }

private:
    explicit Tensor(std::shared_ptr<TensorNode<T>> node) : node_(std::move(node)) {}
    std::shared_ptr<TensorNode<T>> node_;
};

// Define-by-run gradient tape. Constructing one makes it the active tape for
// the current thread; ops executed while it is active append their adjoint
// steps in execution order, which is already topological. One backward pass
// per recording; a consumed tape refuses to run again.
template <typename T>
class Tape {
public:
    Tape() {
        if (active_) throw lifecycle_error("Tape: a tape is already active on this thread");
        active_ = this;
    }
    ~Tape() {
        if (active_ == this) active_ = nullptr;
    }
    Tape(const Tape&) = delete;
    Tape& operator=(const Tape&) = delete;

    static Tape* active() { return active_; }

    void record(std::function<void()> adjoint) { steps_.push_back(std::move(adjoint)); }
    std::size_t size() const { return steps_.size(); }
    bool consumed() const { return consumed_; }

    void run_backward(const Tensor<T>& loss) {
        if (consumed_) {
            throw lifecycle_error("Tape: backward already ran on this tape; re-record the forward pass");
        }
        if (loss.numel() != 1) {
            throw contract_error("backward: loss must be scalar, got shape " + shape_str(loss.shape()));
        }
        consumed_ = true;
        loss.node()->ensure_grad();
        loss.node()->grad[0] += T(1);
        for (auto it = steps_.rbegin(); it != steps_.rend(); ++it) (*it)();
    }

private:
    std::vector<std::function<void()>> steps_;
    bool consumed_ = false;
    inline static thread_local Tape* active_ = nullptr;
};

template <typename T>
void backward(const Tensor<T>& loss) {
    Tape<T>* tape = Tape<T>::active();
    if (!tape) throw lifecycle_error("backward: no active tape on this thread");
    tape->run_backward(loss);
}

namespace detail {

// fabs(x) <= max is false for NaN and for +-Inf, so one comparison covers both.
template <typename T>
inline void check_finite(const std::vector<T>& v, const char* op) {
    const T lim = std::numeric_limits<T>::max();
    bool ok = true;
    for (const T& x : v) ok &= (std::fabs(x) <= lim);
    if (!ok) throw numeric_error(std::string(op) + ": non-finite value in result");
}

template <typename T>
inline Tensor<T> make_output(Shape shape, std::vector<T> value, bool requires_grad, const char* op) {
    check_finite(value, op);
    Tensor<T> out = Tensor<T>::from(std::move(shape), std::move(value));
    out.set_requires_grad(requires_grad);
    return out;
}

template <typename T>
inline bool want_grad(std::initializer_list<const Tensor<T>*> inputs) {
    if (!Tape<T>::active()) return false;
    for (const Tensor<T>* t : inputs)
        if (t->requires_grad()) return true;
    return false;
}

template <typename T>
inline bool grad_ready(const std::shared_ptr<TensorNode<T>>& out) {
    return out->grad.size() == out->value.size();
}

template <typename T>
inline void axpy(std::span<T> dst, T a, std::span<const T> x) {
    for (std::size_t i = 0; i < dst.size(); ++i) dst[i] += a * x[i];
}

inline void require(bool cond, const std::string& msg) {
    if (!cond) throw shape_error(msg);
}

}  // namespace detail

// ---------------------------------------------------------------------------
// elementwise
// ---------------------------------------------------------------------------

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
    detail::require(a.shape() == b.shape(),
                    "add: shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
    std::vector<T> out(a.numel());
    auto av = a.values(), bv = b.values();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] + bv[i];
    const bool rg = detail::want_grad<T>({&a, &b});
    Tensor<T> res = detail::make_output(a.shape(), std::move(out), rg, "add");
    if (rg) {
        auto an = a.node_ptr(), bn = b.node_ptr(), on = res.node_ptr();
        Tape<T>::active()->record([an, bn, on] {
            if (!detail::grad_ready(on)) return;
            if (an->requires_grad) {
                an->ensure_grad();
                for (std::size_t i = 0; i < on->grad.size(); ++i) an->grad[i] += on->grad[i];
            }
            if (bn->requires_grad) {
                bn->ensure_grad();
                for (std::size_t i = 0; i < on->grad.size(); ++i) bn->grad[i] += on->grad[i];
            }
        });
    }
    return res;
}

template <typename T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
    detail::require(a.shape() == b.shape(),
                    "sub: shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
    std::vector<T> out(a.numel());
    auto av = a.values(), bv = b.values();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] - bv[i];
    const bool rg = detail::want_grad<T>({&a, &b});
    Tensor<T> res = detail::make_output(a.shape(), std::move(out), rg, "sub");
    if (rg) {
        auto an = a.node_ptr(), bn = b.node_ptr(), on = res.node_ptr();
        Tape<T>::active()->record([an, bn, on] {
            if (!detail::grad_ready(on)) return;
            if (an->requires_grad) {
                an->ensure_grad();
                for (std::size_t i = 0; i < on->grad.size(); ++i) an->grad[i] += on->grad[i];
            }
            if (bn->requires_grad) {
                bn->ensure_grad();
                for (std::size_t i = 0; i < on->grad.size(); ++i) bn->grad[i] -= on->grad[i];
            }
        });
    }
    return res;
}

template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
    detail::require(a.shape() == b.shape(),
                    "mul: shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
    std::vector<T> out(a.numel());
    auto av = a.values(), bv = b.values();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] * bv[i];
    const bool rg = detail::want_grad<T>({&a, &b});
    Tensor<T> res = detail::make_output(a.shape(), std::move(out), rg, "mul");
    if (rg) {
        auto an = a.node_ptr(), bn = b.node_ptr(), on = res.node_ptr();
        Tape<T>::active()->record([an, bn, on] {
            if (!detail::grad_ready(on)) return;
            if (an->requires_grad) {
                an->ensure_grad();
                for (std::size_t i = 0; i < on->grad.size(); ++i) an->grad[i] += on->grad[i] * bn->value[i];
            }
            if (bn->requires_grad) {
                bn->ensure_grad();
                for (std::size_t i = 0; i < on->grad.size(); ++i) bn->grad[i] += on->grad[i] * an->value[i];
            }
        });
    }
    return res;
}

template <typename T>
Tensor<T> scale(const Tensor<T>& a, T c) {
    std::vector<T> out(a.numel());
    auto av = a.values();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] * c;
    const bool rg = detail::want_grad<T>({&a});
    Tensor<T> res = detail::make_output(a.shape(), std::move(out), rg, "scale");
    if (rg) {
        auto an = a.node_ptr(), on = res.node_ptr();
        Tape<T>::active()->record([an, on, c] {
            if (!detail::grad_ready(on) || !an->requires_grad) return;
            an->ensure_grad();
            for (std::size_t i = 0; i < on->grad.size(); ++i) an->grad[i] += on->grad[i] * c;
        });
    }
    return res;
}

// x: R x D, v: D. Adds v to every row.
template <typename T>
Tensor<T> add_rowvec(const Tensor<T>& x, const Tensor<T>& v) {
    detail::require(x.rank() == 2 && v.rank() == 1 && x.extent(1) == v.extent(0),
                    "add_rowvec: want [R,D] + [D], got " + shape_str(x.shape()) + " + " + shape_str(v.shape()));
    const std::size_t rows = x.extent(0), d = x.extent(1);
    std::vector<T> out(x.numel());
    auto xv = x.values(), vv = v.values();
    for (std::size_t r = 0; r < rows; ++r)
        for (std::size_t j = 0; j < d; ++j) out[r * d + j] = xv[r * d + j] + vv[j];
    const bool rg = detail::want_grad<T>({&x, &v});
    Tensor<T> res = detail::make_output(x.shape(), std::move(out), rg, "add_rowvec");
    if (rg) {
        auto xn = x.node_ptr(), vn = v.node_ptr(), on = res.node_ptr();
        Tape<T>::active()->record([xn, vn, on, rows, d] {
            if (!detail::grad_ready(on)) return;
            if (xn->requires_grad) {
                xn->ensure_grad();
                for (std::size_t i = 0; i < on->grad.size(); ++i) xn->grad[i] += on->grad[i];
            }
            if (vn->requires_grad) {
                vn->ensure_grad();
                for (std::size_t r = 0; r < rows; ++r)
                    for (std::size_t j = 0; j < d; ++j) vn->grad[j] += on->grad[r * d + j];
            }
        });
    }
    return res;
}

// v: D -> n x D, every row a copy of v.
template <typename T>
Tensor<T> broadcast_row(const Tensor<T>& v, std::size_t n) {
    detail::require(v.rank() == 1, "broadcast_row: want rank-1 input, got " + shape_str(v.shape()));
    const std::size_t d = v.extent(0);
    std::vector<T> out(n * d);
    auto vv = v.values();
    for (std::size_t r = 0; r < n; ++r)
        for (std::size_t j = 0; j < d; ++j) out[r * d + j] = vv[j];
    const bool rg = detail::want_grad<T>({&v});
    Tensor<T> res = detail::make_output({n, d}, std::move(out), rg, "broadcast_row");
    if (rg) {
        auto vn = v.node_ptr(), on = res.node_ptr();
        Tape<T>::active()->record([vn, on, n, d] {
            if (!detail::grad_ready(on) || !vn->requires_grad) return;
            vn->ensure_grad();
            for (std::size_t r = 0; r < n; ++r)
                for (std::size_t j = 0; j < d; ++j) vn->grad[j] += on->grad[r * d + j];
        });
    }
    return res;
}

// ---------------------------------------------------------------------------
// linear algebra
// ---------------------------------------------------------------------------

namespace detail {

// c += a x b for zero-initialized c; i-k-j order keeps the inner loop an
// independent-add form the compiler vectorizes without reassociation.
template <typename T>
inline void matmul_kernel(const T* a, const T* b, T* c, std::size_t m, std::size_t k, std::size_t p) {
    for (std::size_t i = 0; i < m; ++i) {
        T* crow = c + i * p;
        const T* arow = a + i * k;
        for (std::size_t kk = 0; kk < k; ++kk) {
            const T av = arow[kk];
            const T* brow = b + kk * p;
            for (std::size_t j = 0; j < p; ++j) crow[j] += av * brow[j];
        }
    }
}

}  // namespace detail

template <typename T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
    detail::require(a.rank() == 2 && b.rank() == 2 && a.extent(1) == b.extent(0),
                    "matmul: want [M,K]x[K,P], got " + shape_str(a.shape()) + " x " + shape_str(b.shape()));
    const std::size_t m = a.extent(0), k = a.extent(1), p = b.extent(1);
    std::vector<T> out(m * p);
    detail::matmul_kernel(a.values().data(), b.values().data(), out.data(), m, k, p);
    const bool rg = detail::want_grad<T>({&a, &b});
    Tensor<T> res = detail::make_output({m, p}, std::move(out), rg, "matmul");
    if (rg) {
        auto an = a.node_ptr(), bn = b.node_ptr(), on = res.node_ptr();
        Tape<T>::active()->record([an, bn, on, m, k, p] {
            if (!detail::grad_ready(on)) return;
            const T* g = on->grad.data();
            if (an->requires_grad) {
                // dA[i,:] += dC[i,j] * Bt[j,:]; the transposed copy keeps the
                // inner loop in vectorizable independent-add form
                an->ensure_grad();
                std::vector<T> bt(k * p);
                for (std::size_t kk = 0; kk < k; ++kk)
                    for (std::size_t j = 0; j < p; ++j) bt[j * k + kk] = bn->value[kk * p + j];
                for (std::size_t i = 0; i < m; ++i) {
                    const T* grow = g + i * p;
                    T* darow = an->grad.data() + i * k;
                    for (std::size_t j = 0; j < p; ++j) {
                        const T gv = grow[j];
                        const T* btrow = bt.data() + j * k;
                        for (std::size_t kk = 0; kk < k; ++kk) darow[kk] += gv * btrow[kk];
                    }
                }
            }
            if (bn->requires_grad) {
                // dB[kk,:] += A[i,kk] * dC[i,:]
                bn->ensure_grad();
                T* db = bn->grad.data();
                const T* av = an->value.data();
                for (std::size_t i = 0; i < m; ++i) {
                    const T* arow = av + i * k;
                    const T* grow = g + i * p;
                    for (std::size_t kk = 0; kk < k; ++kk) {
                        T* dbrow = db + kk * p;
                        const T aik = arow[kk];
                        for (std::size_t j = 0; j < p; ++j) dbrow[j] += aik * grow[j];
                    }
                }
            }
        });
    }
    return res;
}

template <typename T>
Tensor<T> transpose(const Tensor<T>& x) {
    detail::require(x.rank() == 2, "transpose: want rank-2 input, got " + shape_str(x.shape()));
    const std::size_t m = x.extent(0), n = x.extent(1);
    std::vector<T> out(m * n);
    auto xv = x.values();
    for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j) out[j * m + i] = xv[i * n + j];
    const bool rg = detail::want_grad<T>({&x});
    Tensor<T> res = detail::make_output({n, m}, std::move(out), rg, "transpose");
    if (rg) {
        auto xn = x.node_ptr(), on = res.node_ptr();
        Tape<T>::active()->record([xn, on, m, n] {
            if (!detail::grad_ready(on) || !xn->requires_grad) return;
            xn->ensure_grad();
            for (std::size_t i = 0; i < m; ++i)
                for (std::size_t j = 0; j < n; ++j) xn->grad[i * n + j] += on->grad[j * m + i];
        });
    }
    return res;
}

// ---------------------------------------------------------------------------
// row/column selection
// ---------------------------------------------------------------------------

template <typename T>
Tensor<T> gather_rows(const Tensor<T>& x, std::vector<std::size_t> idx) {
    detail::require(x.rank() == 2, "gather_rows: want rank-2 input, got " + shape_str(x.shape()));
    const std::size_t n = x.extent(0), d = x.extent(1);
    for (std::size_t i : idx) {
        if (i >= n)
            throw index_error("gather_rows: index " + std::to_string(i) + " out of range [0," +
                              std::to_string(n) + ")");
    }
    std::vector<T> out(idx.size() * d);
    auto xv = x.values();
    for (std::size_t r = 0; r < idx.size(); ++r)
        std::copy_n(xv.data() + idx[r] * d, d, out.data() + r * d);
    const bool rg = detail::want_grad<T>({&x});
    Tensor<T> res = detail::make_output({idx.size(), d}, std::move(out), rg, "gather_rows");
    if (rg) {
        auto xn = x.node_ptr(), on = res.node_ptr();
        Tape<T>::active()->record([xn, on, idx = std::move(idx), d] {
            if (!detail::grad_ready(on) || !xn->requires_grad) return;
            xn->ensure_grad();
            for (std::size_t r = 0; r < idx.size(); ++r)
                for (std::size_t j = 0; j < d; ++j) xn->grad[idx[r] * d + j] += on->grad[r * d + j];
        });
    }
    return res;
}

// Output row i equals rows[r] where idx[r] == i, otherwise base row i.
// Indices must be unique and in range.
template <typename T>
Tensor<T> overwrite_rows(const Tensor<T>& base, const std::vector<std::size_t>& idx, const Tensor<T>& rows) {
    detail::require(base.rank() == 2 && rows.rank() == 2 && base.extent(1) == rows.extent(1),
                    "overwrite_rows: want [N,D] base and [V,D] rows, got " + shape_str(base.shape()) +
                        " and " + shape_str(rows.shape()));
    detail::require(rows.extent(0) == idx.size(), "overwrite_rows: index count does not match rows");
    const std::size_t n = base.extent(0), d = base.extent(1);
    std::vector<std::uint8_t> taken(n, 0);
    for (std::size_t i : idx) {
        if (i >= n)
            throw index_error("overwrite_rows: index " + std::to_string(i) + " out of range [0," +
                              std::to_string(n) + ")");
        if (taken[i]) throw index_error("overwrite_rows: duplicate index " + std::to_string(i));
        taken[i] = 1;
    }
    std::vector<T> out(base.values().begin(), base.values().end());
    auto rv = rows.values();
    for (std::size_t r = 0; r < idx.size(); ++r)
        std::copy_n(rv.data() + r * d, d, out.data() + idx[r] * d);
    const bool rg = detail::want_grad<T>({&base, &rows});
    Tensor<T> res = detail::make_output(base.shape(), std::move(out), rg, "overwrite_rows");
    if (rg) {
        auto bn = base.node_ptr(), rn = rows.node_ptr(), on = res.node_ptr();
        Tape<T>::active()->record([bn, rn, on, idx, taken = std::move(taken), n, d] {
            if (!detail::grad_ready(on)) return;
            if (rn->requires_grad) {
                rn->ensure_grad();
                for (std::size_t r = 0; r < idx.size(); ++r)
                    for (std::size_t j = 0; j < d; ++j) rn->grad[r * d + j] += on->grad[idx[r] * d + j];
            }
            if (bn->requires_grad) {
                bn->ensure_grad();
                for (std::size_t i = 0; i < n; ++i) {
                    if (taken[i]) continue;
                    for (std::size_t j = 0; j < d; ++j) bn->grad[i * d + j] += on->grad[i * d + j];
                }
            }
        });
    }
    return res;
}

// Columns [c0, c1) of a rank-2 tensor.
template <typename T>
Tensor<T> slice_cols(const Tensor<T>& x, std::size_t c0, std::size_t c1) {
    detail::require(x.rank() == 2, "slice_cols: want rank-2 input, got " + shape_str(x.shape()));
    const std::size_t m = x.extent(0), n = x.extent(1);
    if (!(c0 < c1 && c1 <= n))
        throw index_error("slice_cols: range [" + std::to_string(c0) + "," + std::to_string(c1) +
                          ") invalid for width " + std::to_string(n));
    const std::size_t w = c1 - c0;
    std::vector<T> out(m * w);
    auto xv = x.values();
    for (std::size_t i = 0; i < m; ++i) std::copy_n(xv.data() + i * n + c0, w, out.data() + i * w);
    const bool rg = detail::want_grad<T>({&x});
    Tensor<T> res = detail::make_output({m, w}, std::move(out), rg, "slice_cols");
    if (rg) {
        auto xn = x.node_ptr(), on = res.node_ptr();
        Tape<T>::active()->record([xn, on, m, n, c0, w] {
            if (!detail::grad_ready(on) || !xn->requires_grad) return;
            xn->ensure_grad();
            for (std::size_t i = 0; i < m; ++i)
                for (std::size_t j = 0; j < w; ++j) xn->grad[i * n + c0 + j] += on->grad[i * w + j];
        });
    }
    return res;
}

template <typename T>
Tensor<T> concat_cols(const std::vector<Tensor<T>>& parts) {
    if (parts.empty()) throw contract_error("concat_cols: no inputs");
    const std::size_t m = parts[0].extent(0);
    std::size_t total = 0;
    for (const auto& p : parts) {
        detail::require(p.rank() == 2 && p.extent(0) == m,
                        "concat_cols: all inputs must share row count");
        total += p.extent(1);
    }
    std::vector<T> out(m * total);
    std::size_t off = 0;
    bool rg_any = false;
    for (const auto& p : parts) {
        const std::size_t w = p.extent(1);
        auto pv = p.values();
        for (std::size_t i = 0; i < m; ++i)
            std::copy_n(pv.data() + i * w, w, out.data() + i * total + off);
        off += w;
        rg_any = rg_any || p.requires_grad();
    }
    const bool rg = Tape<T>::active() && rg_any;
    Tensor<T> res = detail::make_output({m, total}, std::move(out), rg, "concat_cols");
    if (rg) {
        std::vector<std::shared_ptr<TensorNode<T>>> nodes;
        nodes.reserve(parts.size());
        for (const auto& p : parts) nodes.push_back(p.node_ptr());
        auto on = res.node_ptr();
        Tape<T>::active()->record([nodes = std::move(nodes), on, m, total] {
            if (!detail::grad_ready(on)) return;
            std::size_t off = 0;
            for (auto& pn : nodes) {
                const std::size_t w = pn->shape[1];
                if (pn->requires_grad) {
                    pn->ensure_grad();
                    for (std::size_t i = 0; i < m; ++i)
                        for (std::size_t j = 0; j < w; ++j)
                            pn->grad[i * w + j] += on->grad[i * total + off + j];
                }
                off += w;
            }
        });
    }
    return res;
}

// ---------------------------------------------------------------------------
// nonlinearities and normalization
// ---------------------------------------------------------------------------

// Exact erf formulation, not the tanh approximation.
template <typename T>
Tensor<T> gelu(const Tensor<T>& x) {
    const T inv_sqrt2 = T(1) / std::sqrt(T(2));
    const T inv_sqrt2pi = T(1) / std::sqrt(T(2) * std::numbers::pi_v<T>);
    std::vector<T> out(x.numel());
    std::vector<T> cdf_cache;
    const bool rg = detail::want_grad<T>({&x});
    if (rg) cdf_cache.resize(x.numel());
    auto xv = x.values();
    for (std::size_t i = 0; i < out.size(); ++i) {
        const T cdf = T(0.5) * (T(1) + std::erf(xv[i] * inv_sqrt2));
        if (rg) cdf_cache[i] = cdf;
        out[i] = xv[i] * cdf;
    }
    Tensor<T> res = detail::make_output(x.shape(), std::move(out), rg, "gelu");
    if (rg) {
        auto xn = x.node_ptr(), on = res.node_ptr();
        Tape<T>::active()->record([xn, on, cdf = std::move(cdf_cache), inv_sqrt2pi] {
            if (!detail::grad_ready(on) || !xn->requires_grad) return;
            xn->ensure_grad();
            for (std::size_t i = 0; i < on->grad.size(); ++i) {
                const T v = xn->value[i];
                const T pdf = std::exp(T(-0.5) * v * v) * inv_sqrt2pi;
                xn->grad[i] += on->grad[i] * (cdf[i] + v * pdf);
            }
        });
    }
    return res;
}

// Softmax over the last axis; rows sum to 1.
template <typename T>
Tensor<T> softmax_last(const Tensor<T>& x) {
    detail::require(x.rank() >= 1, "softmax_last: want rank >= 1");
    const std::size_t d = x.shape().back();
    const std::size_t rows = x.numel() / d;
    std::vector<T> out(x.numel());
    auto xv = x.values();
    for (std::size_t r = 0; r < rows; ++r) {
        const T* in = xv.data() + r * d;
        T* o = out.data() + r * d;
        T mx = in[0];
        for (std::size_t j = 1; j < d; ++j) mx = std::max(mx, in[j]);
        T sum = T(0);
        for (std::size_t j = 0; j < d; ++j) {
            o[j] = std::exp(in[j] - mx);
            sum += o[j];
        }
        const T inv = T(1) / sum;
        for (std::size_t j = 0; j < d; ++j) o[j] *= inv;
    }
    const bool rg = detail::want_grad<T>({&x});
    Tensor<T> res = detail::make_output(x.shape(), std::move(out), rg, "softmax_last");
    if (rg) {
        auto xn = x.node_ptr(), on = res.node_ptr();
        Tape<T>::active()->record([xn, on, rows, d] {
            if (!detail::grad_ready(on) || !xn->requires_grad) return;
            xn->ensure_grad();
            for (std::size_t r = 0; r < rows; ++r) {
                const T* y = on->value.data() + r * d;
                const T* g = on->grad.data() + r * d;
                T dot = T(0);
                for (std::size_t j = 0; j < d; ++j) dot += g[j] * y[j];
                T* dx = xn->grad.data() + r * d;
                for (std::size_t j = 0; j < d; ++j) dx[j] += y[j] * (g[j] - dot);
            }
        });
    }
    return res;
}

// Per-last-axis standardization followed by affine gain/bias.
template <typename T>
Tensor<T> layer_norm(const Tensor<T>& x, const Tensor<T>& gain, const Tensor<T>& bias, T eps) {
    detail::require(x.rank() >= 1, "layer_norm: want rank >= 1");
    const std::size_t d = x.shape().back();
    detail::require(gain.rank() == 1 && gain.extent(0) == d && bias.rank() == 1 && bias.extent(0) == d,
                    "layer_norm: gain/bias must have shape [" + std::to_string(d) + "]");
    if (!(eps > T(0))) throw config_error("layer_norm: eps must be positive");
    const std::size_t rows = x.numel() / d;
    std::vector<T> out(x.numel());
    std::vector<T> inv_sd(rows), mean(rows);
    auto xv = x.values();
    auto gv = gain.values(), bv = bias.values();
    for (std::size_t r = 0; r < rows; ++r) {
        const T* in = xv.data() + r * d;
        T mu = T(0);
        for (std::size_t j = 0; j < d; ++j) mu += in[j];
        mu /= T(d);
        T var = T(0);
        for (std::size_t j = 0; j < d; ++j) {
            const T c = in[j] - mu;
            var += c * c;
        }
        var /= T(d);
        const T is = T(1) / std::sqrt(var + eps);
        mean[r] = mu;
        inv_sd[r] = is;
        T* o = out.data() + r * d;
        for (std::size_t j = 0; j < d; ++j) o[j] = gv[j] * ((in[j] - mu) * is) + bv[j];
    }
    const bool rg = detail::want_grad<T>({&x, &gain, &bias});
    Tensor<T> res = detail::make_output(x.shape(), std::move(out), rg, "layer_norm");
    if (rg) {
        auto xn = x.node_ptr(), gn = gain.node_ptr(), bn = bias.node_ptr(), on = res.node_ptr();
        Tape<T>::active()->record([xn, gn, bn, on, mean = std::move(mean), inv_sd = std::move(inv_sd),
                                   rows, d] {
            if (!detail::grad_ready(on)) return;
            for (std::size_t r = 0; r < rows; ++r) {
                const T* in = xn->value.data() + r * d;
                const T* g = on->grad.data() + r * d;
                const T mu = mean[r], is = inv_sd[r];
                if (gn->requires_grad) {
                    gn->ensure_grad();
                    for (std::size_t j = 0; j < d; ++j) gn->grad[j] += g[j] * ((in[j] - mu) * is);
                }
                if (bn->requires_grad) {
                    bn->ensure_grad();
                    for (std::size_t j = 0; j < d; ++j) bn->grad[j] += g[j];
                }
                if (xn->requires_grad) {
                    xn->ensure_grad();
                    // dxhat = g * gain; dx = is*(dxhat - mean(dxhat) - xhat*mean(dxhat*xhat))
                    T sum_dh = T(0), sum_dh_xh = T(0);
                    for (std::size_t j = 0; j < d; ++j) {
                        const T xh = (in[j] - mu) * is;
                        const T dh = g[j] * gn->value[j];
                        sum_dh += dh;
                        sum_dh_xh += dh * xh;
                    }
                    const T m1 = sum_dh / T(d), m2 = sum_dh_xh / T(d);
                    T* dx = xn->grad.data() + r * d;
                    for (std::size_t j = 0; j < d; ++j) {
                        const T xh = (in[j] - mu) * is;
                        const T dh = g[j] * gn->value[j];
                        dx[j] += is * (dh - m1 - xh * m2);
                    }
                }
            }
        });
    }
    return res;
}

// ---------------------------------------------------------------------------
// reductions and losses
// ---------------------------------------------------------------------------

template <typename T>
Tensor<T> sum_all(const Tensor<T>& x) {
    T acc = T(0);
    for (T v : x.values()) acc += v;
    const bool rg = detail::want_grad<T>({&x});
    Tensor<T> res = detail::make_output(Shape{}, std::vector<T>{acc}, rg, "sum_all");
    if (rg) {
        auto xn = x.node_ptr(), on = res.node_ptr();
        Tape<T>::active()->record([xn, on] {
            if (!detail::grad_ready(on) || !xn->requires_grad) return;
            xn->ensure_grad();
            const T g = on->grad[0];
            for (std::size_t i = 0; i < xn->grad.size(); ++i) xn->grad[i] += g;
        });
    }
    return res;
}

template <typename T>
Tensor<T> mean_all(const Tensor<T>& x) {
    if (x.numel() == 0) throw contract_error("mean_all: empty tensor");
    T acc = T(0);
    for (T v : x.values()) acc += v;
    const T inv = T(1) / T(x.numel());
    const bool rg = detail::want_grad<T>({&x});
    Tensor<T> res = detail::make_output(Shape{}, std::vector<T>{acc * inv}, rg, "mean_all");
    if (rg) {
        auto xn = x.node_ptr(), on = res.node_ptr();
        Tape<T>::active()->record([xn, on, inv] {
            if (!detail::grad_ready(on) || !xn->requires_grad) return;
            xn->ensure_grad();
            const T g = on->grad[0] * inv;
            for (std::size_t i = 0; i < xn->grad.size(); ++i) xn->grad[i] += g;
        });
    }
    return res;
}

// Elementwise smooth-L1 with quadratic zone scaled by beta:
// |x| <= beta -> x^2/(2 beta), else |x| - beta/2. C1 at the knee.
template <typename T>
Tensor<T> huber(const Tensor<T>& x, T beta) {
    if (!(beta > T(0))) throw config_error("huber: beta must be positive");
    std::vector<T> out(x.numel());
    auto xv = x.values();
    for (std::size_t i = 0; i < out.size(); ++i) {
        const T a = std::fabs(xv[i]);
        out[i] = a <= beta ? xv[i] * xv[i] / (T(2) * beta) : a - T(0.5) * beta;
    }
    const bool rg = detail::want_grad<T>({&x});
    Tensor<T> res = detail::make_output(x.shape(), std::move(out), rg, "huber");
    if (rg) {
        auto xn = x.node_ptr(), on = res.node_ptr();
        Tape<T>::active()->record([xn, on, beta] {
            if (!detail::grad_ready(on) || !xn->requires_grad) return;
            xn->ensure_grad();
            for (std::size_t i = 0; i < on->grad.size(); ++i) {
                const T v = xn->value[i];
                const T dv = std::clamp(v / beta, T(-1), T(1));
                xn->grad[i] += on->grad[i] * dv;
            }
        });
    }
    return res;
}

// Mean cross-entropy of softmax(logits) against integer labels.
template <typename T>
Tensor<T> softmax_cross_entropy(const Tensor<T>& logits, const std::vector<std::size_t>& labels) {
    detail::require(logits.rank() == 2, "softmax_cross_entropy: want [B,C] logits");
    const std::size_t b = logits.extent(0), c = logits.extent(1);
    if (labels.size() != b) throw contract_error("softmax_cross_entropy: label count mismatch");
    for (std::size_t l : labels)
        if (l >= c) throw index_error("softmax_cross_entropy: label " + std::to_string(l) + " out of range");
    auto xv = logits.values();
    T total = T(0);
    for (std::size_t r = 0; r < b; ++r) {
        const T* in = xv.data() + r * c;
        T mx = in[0];
        for (std::size_t j = 1; j < c; ++j) mx = std::max(mx, in[j]);
        T sum = T(0);
        for (std::size_t j = 0; j < c; ++j) sum += std::exp(in[j] - mx);
        total += mx + std::log(sum) - in[labels[r]];
    }
    const bool rg = detail::want_grad<T>({&logits});
    Tensor<T> res = detail::make_output(Shape{}, std::vector<T>{total / T(b)}, rg, "softmax_cross_entropy");
    if (rg) {
        auto xn = logits.node_ptr(), on = res.node_ptr();
        Tape<T>::active()->record([xn, on, labels, b, c] {
            if (!detail::grad_ready(on) || !xn->requires_grad) return;
            xn->ensure_grad();
            const T g = on->grad[0] / T(b);
            for (std::size_t r = 0; r < b; ++r) {
                const T* in = xn->value.data() + r * c;
                T mx = in[0];
                for (std::size_t j = 1; j < c; ++j) mx = std::max(mx, in[j]);
                T sum = T(0);
                for (std::size_t j = 0; j < c; ++j) sum += std::exp(in[j] - mx);
                const T inv = T(1) / sum;
                T* dx = xn->grad.data() + r * c;
                for (std::size_t j = 0; j < c; ++j) {
                    const T p = std::exp(in[j] - mx) * inv;
                    dx[j] += g * (p - (j == labels[r] ? T(1) : T(0)));
                }
            }
        });
    }
    return res;
}

// New leaf sharing nothing with the graph; gradients stop here.
template <typename T>
Tensor<T> detach(const Tensor<T>& x) {
    return Tensor<T>::from(x.shape(), std::vector<T>(x.values().begin(), x.values().end()));
}

}  // namespace dmjd
