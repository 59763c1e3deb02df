#pragma once

// Dense tensors on a define-by-run reverse-mode tape. The tape is rebuilt
// every step; backward may run once per tape. Instantiated for float
// (training) and double (gradient checks).

#include <algorithm>
#include <cmath>
#include <cstring>
#include <functional>
#include <memory>
#include <span>
#include <utility>
#include <vector>

#include "miniclip/common.hpp"

namespace miniclip {

template <class S>
class TapeT;

template <class S>
class TensorT {
  public:
    TensorT() = default;

    const Shape& shape() const { return tape_->node(id_).shape; }
    int64_t size() const { return static_cast<int64_t>(tape_->node(id_).value.size()); }
    std::span<const S> value() const { return tape_->node(id_).value; }
    // Zero-length until backward has run for a grad-requiring node.
    std::span<const S> grad() const { return tape_->node(id_).grad; }
    bool requires_grad() const { return tape_->node(id_).requires_grad; }
    int id() const { return id_; }
    TapeT<S>& tape() const { return *tape_; }

    S item() const {
        if (size() != 1) throw ShapeError("item() requires a scalar tensor, got shape " + shape_str(shape()));
        return value()[0];
    }

  private:
    friend class TapeT<S>;
    TensorT(TapeT<S>* tape, int id) : tape_(tape), id_(id) {}
    TapeT<S>* tape_ = nullptr;
    int id_ = -1;
};

template <class S>
class TapeT {
  public:
    struct Node {
        Shape shape;
        std::vector<S> value;
        std::vector<S> grad;
        bool requires_grad = false;
        std::function<void(TapeT&)> backward_fn;
        const char* op = "leaf";
    };

    TapeT() = default;
    TapeT(const TapeT&) = delete;
    TapeT& operator=(const TapeT&) = delete;

    TensorT<S> leaf(Shape shape, std::vector<S> data, bool requires_grad = true) {
        check_numel(shape, data.size());
        return push(std::move(shape), std::move(data), requires_grad, nullptr, "leaf");
    }

    TensorT<S> constant(Shape shape, std::vector<S> data) {
        check_numel(shape, data.size());
        return push(std::move(shape), std::move(data), false, nullptr, "constant");
    }

    TensorT<S> scalar(S v) { return constant({1}, {v}); }

    // Seeds d(root)/d(root) = 1 and walks the recorded entries once in
    // reverse order. A second call on the same tape is an error.
    void backward(TensorT<S> root) {
        if (root.size() != 1)
            throw ShapeError("backward requires a scalar root, got shape " + shape_str(root.shape()));
        if (backward_done_) throw Error("backward already ran on this tape; build a fresh tape");
        backward_done_ = true;
        for (auto& n : nodes_) {
            if (n.requires_grad) n.grad.assign(n.value.size(), S(0));
        }
        Node& r = nodes_[root.id()];
        if (!r.requires_grad) return;  // root disconnected from any trainable leaf
        r.grad[0] = S(1);
        for (int i = root.id(); i >= 0; --i) {
            Node& n = nodes_[i];
            if (n.requires_grad && n.backward_fn) n.backward_fn(*this);
        }
    }

    bool backward_done() const { return backward_done_; }
    size_t node_count() const { return nodes_.size(); }

    Node& node(int id) { return nodes_[id]; }
    const Node& node(int id) const { return nodes_[id]; }

    const std::vector<S>& val(int id) const { return nodes_[id].value; }
    std::vector<S>& grad_buf(int id) { return nodes_[id].grad; }
    bool wants_grad(int id) const { return nodes_[id].requires_grad; }

    TensorT<S> push(Shape shape, std::vector<S> value, bool requires_grad,
                    std::function<void(TapeT&)> backward_fn, const char* op) {
        Node n;
        n.shape = std::move(shape);
        n.value = std::move(value);
        n.requires_grad = requires_grad;
        n.backward_fn = std::move(backward_fn);
        n.op = op;
        nodes_.push_back(std::move(n));
        return TensorT<S>(this, static_cast<int>(nodes_.size()) - 1);
    }

  private:
    static void check_numel(const Shape& shape, size_t n) {
        if (numel(shape) != static_cast<int64_t>(n))
            throw ShapeError("data length " + std::to_string(n) + " does not match shape " + shape_str(shape));
    }

    std::vector<Node> nodes_;
    bool backward_done_ = false;
};

using Tape = TapeT<float>;
using Tensor = TensorT<float>;

namespace detail {

// c[m,n] (+)= a[m,k] @ b[k,n]
template <class S>
void matmul_raw(const S* a, const S* b, S* c, int64_t m, int64_t k, int64_t n, bool accumulate) {
    parallel_for(m, [&](int64_t lo, int64_t hi) {
        for (int64_t i = lo; i < hi; ++i) {
            S* crow = c + i * n;
            if (!accumulate) std::fill(crow, crow + n, S(0));
            const S* arow = a + i * k;
            for (int64_t kk = 0; kk < k; ++kk) {
                const S av = arow[kk];
                const S* brow = b + kk * n;
                for (int64_t j = 0; j < n; ++j) crow[j] += av * brow[j];
            }
        }
    });
}

// c[m,n] (+)= a[m,k] @ b[n,k]^T
template <class S>
void matmul_nt_raw(const S* a, const S* b, S* c, int64_t m, int64_t k, int64_t n, bool accumulate) {
    parallel_for(m, [&](int64_t lo, int64_t hi) {
        for (int64_t i = lo; i < hi; ++i) {
            const S* arow = a + i * k;
            S* crow = c + i * n;
            for (int64_t j = 0; j < n; ++j) {
                const S* brow = b + j * k;
                S acc = 0;
                for (int64_t kk = 0; kk < k; ++kk) acc += arow[kk] * brow[kk];
                if (accumulate)
                    crow[j] += acc;
                else
                    crow[j] = acc;
            }
        }
    });
}

// c[k,n] (+)= a[m,k]^T @ b[m,n]
template <class S>
void matmul_tn_raw(const S* a, const S* b, S* c, int64_t m, int64_t k, int64_t n, bool accumulate) {
    parallel_for(k, [&](int64_t lo, int64_t hi) {
        for (int64_t kk = lo; kk < hi; ++kk) {
            S* crow = c + kk * n;
            if (!accumulate) std::fill(crow, crow + n, S(0));
            for (int64_t i = 0; i < m; ++i) {
                const S av = a[i * k + kk];
                const S* brow = b + i * n;
                for (int64_t j = 0; j < n; ++j) crow[j] += av * brow[j];
            }
        }
    });
}

template <class S>
void check_finite(const std::vector<S>& v, const char* what) {
    for (const S x : v) {
        if (!std::isfinite(x)) throw NumericError(std::string(what) + ": non-finite input value");
    }
}

template <class S>
bool is_scalar(const TensorT<S>& t) {
    return t.size() == 1;
}

template <class S>
void require_same_tape(const TensorT<S>& a, const TensorT<S>& b) {
    if (&a.tape() != &b.tape()) throw Error("operands live on different tapes");
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Elementwise binaries (equal shapes, or one scalar operand)

enum class BinOp { Add, Sub, Mul, Div };

template <class S>
TensorT<S> binary_op(BinOp kind, TensorT<S> a, TensorT<S> b) {
    detail::require_same_tape(a, b);
    TapeT<S>& tape = a.tape();
    const bool a_sc = detail::is_scalar(a), b_sc = detail::is_scalar(b);
    if (!a_sc && !b_sc && a.shape() != b.shape())
        throw ShapeError("elementwise operands differ: " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));

    const auto& av = a.tape().val(a.id());
    const auto& bv = b.tape().val(b.id());
    const int64_t n = std::max<int64_t>(a.size(), b.size());
    std::vector<S> out(n);
    auto ael = [&](int64_t i) { return a_sc ? av[0] : av[i]; };
    auto bel = [&](int64_t i) { return b_sc ? bv[0] : bv[i]; };
    const char* name = "add";
    switch (kind) {
        case BinOp::Add:
            for (int64_t i = 0; i < n; ++i) out[i] = ael(i) + bel(i);
            break;
        case BinOp::Sub:
            name = "sub";
            for (int64_t i = 0; i < n; ++i) out[i] = ael(i) - bel(i);
            break;
        case BinOp::Mul:
            name = "mul";
            for (int64_t i = 0; i < n; ++i) out[i] = ael(i) * bel(i);
            break;
        case BinOp::Div:
            name = "div";
            for (int64_t i = 0; i < n; ++i) {
                if (bel(i) == S(0)) throw DomainError("division by zero");
                out[i] = ael(i) / bel(i);
            }
            break;
    }
    Shape out_shape = a_sc && !b_sc ? b.shape() : a.shape();
    const bool rg = a.requires_grad() || b.requires_grad();
    const int aid = a.id(), bid = b.id();
    TensorT<S> out_t = tape.push(std::move(out_shape), std::move(out), rg, nullptr, name);
    const int oid = out_t.id();
    if (rg) {
        tape.node(oid).backward_fn = [kind, aid, bid, oid, a_sc, b_sc, n](TapeT<S>& t) {
            const auto& g = t.grad_buf(oid);
            const auto& av2 = t.val(aid);
            const auto& bv2 = t.val(bid);
            if (t.wants_grad(aid)) {
                auto& da = t.grad_buf(aid);
                for (int64_t i = 0; i < n; ++i) {
                    const int64_t ia = a_sc ? 0 : i;
                    switch (kind) {
                        case BinOp::Add: da[ia] += g[i]; break;
                        case BinOp::Sub: da[ia] += g[i]; break;
                        case BinOp::Mul: da[ia] += g[i] * (b_sc ? bv2[0] : bv2[i]); break;
                        case BinOp::Div: da[ia] += g[i] / (b_sc ? bv2[0] : bv2[i]); break;
                    }
                }
            }
            if (t.wants_grad(bid)) {
                auto& db = t.grad_buf(bid);
                for (int64_t i = 0; i < n; ++i) {
                    const int64_t ib = b_sc ? 0 : i;
                    const S bvv = b_sc ? bv2[0] : bv2[i];
                    switch (kind) {
                        case BinOp::Add: db[ib] += g[i]; break;
                        case BinOp::Sub: db[ib] -= g[i]; break;
                        case BinOp::Mul: db[ib] += g[i] * (a_sc ? av2[0] : av2[i]); break;
                        case BinOp::Div: db[ib] -= g[i] * (a_sc ? av2[0] : av2[i]) / (bvv * bvv); break;
                    }
                }
            }
        };
    }
    return out_t;
}

template <class S>
TensorT<S> add(TensorT<S> a, TensorT<S> b) {
    return binary_op(BinOp::Add, a, b);
}
template <class S>
TensorT<S> sub(TensorT<S> a, TensorT<S> b) {
    return binary_op(BinOp::Sub, a, b);
}
template <class S>
TensorT<S> mul(TensorT<S> a, TensorT<S> b) {
    return binary_op(BinOp::Mul, a, b);
}
template <class S>
TensorT<S> divide(TensorT<S> a, TensorT<S> b) {
    return binary_op(BinOp::Div, a, b);
}

// ---------------------------------------------------------------------------
// Elementwise unaries

template <class S>
TensorT<S> exp(TensorT<S> x) {
    TapeT<S>& tape = x.tape();
    const auto& xv = tape.val(x.id());
    std::vector<S> out(xv.size());
    for (size_t i = 0; i < xv.size(); ++i) out[i] = std::exp(xv[i]);
    TensorT<S> o = tape.push(x.shape(), std::move(out), x.requires_grad(), nullptr, "exp");
    if (x.requires_grad()) {
        const int xid = x.id(), oid = o.id();
        tape.node(oid).backward_fn = [xid, oid](TapeT<S>& t) {
            const auto& g = t.grad_buf(oid);
            const auto& y = t.val(oid);
            auto& dx = t.grad_buf(xid);
            for (size_t i = 0; i < g.size(); ++i) dx[i] += g[i] * y[i];
        };
    }
    return o;
}

template <class S>
TensorT<S> log(TensorT<S> x) {
    TapeT<S>& tape = x.tape();
    const auto& xv = tape.val(x.id());
    std::vector<S> out(xv.size());
    for (size_t i = 0; i < xv.size(); ++i) {
        if (xv[i] <= S(0)) throw DomainError("log of non-positive value " + std::to_string(xv[i]));
        out[i] = std::log(xv[i]);
    }
    TensorT<S> o = tape.push(x.shape(), std::move(out), x.requires_grad(), nullptr, "log");
    if (x.requires_grad()) {
        const int xid = x.id(), oid = o.id();
        tape.node(oid).backward_fn = [xid, oid](TapeT<S>& t) {
            const auto& g = t.grad_buf(oid);
            const auto& xv2 = t.val(xid);
            auto& dx = t.grad_buf(xid);
            for (size_t i = 0; i < g.size(); ++i) dx[i] += g[i] / xv2[i];
        };
    }
    return o;
}

template <class S>
TensorT<S> neg(TensorT<S> x) {
    TapeT<S>& tape = x.tape();
    const auto& xv = tape.val(x.id());
    std::vector<S> out(xv.size());
    for (size_t i = 0; i < xv.size(); ++i) out[i] = -xv[i];
    TensorT<S> o = tape.push(x.shape(), std::move(out), x.requires_grad(), nullptr, "neg");
    if (x.requires_grad()) {
        const int xid = x.id(), oid = o.id();
        tape.node(oid).backward_fn = [xid, oid](TapeT<S>& t) {
            const auto& g = t.grad_buf(oid);
            auto& dx = t.grad_buf(xid);
            for (size_t i = 0; i < g.size(); ++i) dx[i] -= g[i];
        };
    }
    return o;
}

template <class S>
TensorT<S> relu(TensorT<S> x) {
    TapeT<S>& tape = x.tape();
    const auto& xv = tape.val(x.id());
    std::vector<S> out(xv.size());
    for (size_t i = 0; i < xv.size(); ++i) out[i] = xv[i] > S(0) ? xv[i] : S(0);
    TensorT<S> o = tape.push(x.shape(), std::move(out), x.requires_grad(), nullptr, "relu");
    if (x.requires_grad()) {
        const int xid = x.id(), oid = o.id();
        tape.node(oid).backward_fn = [xid, oid](TapeT<S>& t) {
            const auto& g = t.grad_buf(oid);
            const auto& xv2 = t.val(xid);
            auto& dx = t.grad_buf(xid);
            for (size_t i = 0; i < g.size(); ++i)
                if (xv2[i] > S(0)) dx[i] += g[i];
        };
    }
    return o;
}

template <class S>
TensorT<S> scale(TensorT<S> x, S c) {
    TapeT<S>& tape = x.tape();
    const auto& xv = tape.val(x.id());
    std::vector<S> out(xv.size());
    for (size_t i = 0; i < xv.size(); ++i) out[i] = xv[i] * c;
    TensorT<S> o = tape.push(x.shape(), std::move(out), x.requires_grad(), nullptr, "scale");
    if (x.requires_grad()) {
        const int xid = x.id(), oid = o.id();
        tape.node(oid).backward_fn = [xid, oid, c](TapeT<S>& t) {
            const auto& g = t.grad_buf(oid);
            auto& dx = t.grad_buf(xid);
            for (size_t i = 0; i < g.size(); ++i) dx[i] += c * g[i];
        };
    }
    return o;
}

template <class S>
TensorT<S> add_scalar(TensorT<S> x, S c) {
    TapeT<S>& tape = x.tape();
    const auto& xv = tape.val(x.id());
    std::vector<S> out(xv.size());
    for (size_t i = 0; i < xv.size(); ++i) out[i] = xv[i] + c;
    TensorT<S> o = tape.push(x.shape(), std::move(out), x.requires_grad(), nullptr, "add_scalar");
    if (x.requires_grad()) {
        const int xid = x.id(), oid = o.id();
        tape.node(oid).backward_fn = [xid, oid](TapeT<S>& t) {
            const auto& g = t.grad_buf(oid);
            auto& dx = t.grad_buf(xid);
            for (size_t i = 0; i < g.size(); ++i) dx[i] += g[i];
        };
    }
    return o;
}

// ---------------------------------------------------------------------------
// Matrix products

template <class S>
TensorT<S> matmul(TensorT<S> a, TensorT<S> b) {
    detail::require_same_tape(a, b);
    if (a.shape().size() != 2 || b.shape().size() != 2 || a.shape()[1] != b.shape()[0])
        throw ShapeError("matmul shape mismatch: " + shape_str(a.shape()) + " x " + shape_str(b.shape()));
    TapeT<S>& tape = a.tape();
    const int64_t m = a.shape()[0], k = a.shape()[1], n = b.shape()[1];
    std::vector<S> out(m * n);
    detail::matmul_raw(tape.val(a.id()).data(), tape.val(b.id()).data(), out.data(), m, k, n, false);
    const bool rg = a.requires_grad() || b.requires_grad();
    TensorT<S> o = tape.push({static_cast<int>(m), static_cast<int>(n)}, std::move(out), rg, nullptr, "matmul");
    if (rg) {
        const int aid = a.id(), bid = b.id(), oid = o.id();
        tape.node(oid).backward_fn = [aid, bid, oid, m, k, n](TapeT<S>& t) {
            const auto& g = t.grad_buf(oid);
            if (t.wants_grad(aid))  // dA += G @ B^T
                detail::matmul_nt_raw(g.data(), t.val(bid).data(), t.grad_buf(aid).data(), m, n, k, true);
            if (t.wants_grad(bid))  // dB += A^T @ G
                detail::matmul_tn_raw(t.val(aid).data(), g.data(), t.grad_buf(bid).data(), m, k, n, true);
        };
    }
    return o;
}

// a[m,k] @ b[n,k]^T -> [m,n]
template <class S>
TensorT<S> matmul_nt(TensorT<S> a, TensorT<S> b) {
    detail::require_same_tape(a, b);
    if (a.shape().size() != 2 || b.shape().size() != 2 || a.shape()[1] != b.shape()[1])
        throw ShapeError("matmul_nt shape mismatch: " + shape_str(a.shape()) + " x " + shape_str(b.shape()) + "^T");
    TapeT<S>& tape = a.tape();
    const int64_t m = a.shape()[0], k = a.shape()[1], n = b.shape()[0];
    std::vector<S> out(m * n);
    detail::matmul_nt_raw(tape.val(a.id()).data(), tape.val(b.id()).data(), out.data(), m, k, n, false);
    const bool rg = a.requires_grad() || b.requires_grad();
    TensorT<S> o = tape.push({static_cast<int>(m), static_cast<int>(n)}, std::move(out), rg, nullptr, "matmul_nt");
    if (rg) {
        const int aid = a.id(), bid = b.id(), oid = o.id();
        tape.node(oid).backward_fn = [aid, bid, oid, m, k, n](TapeT<S>& t) {
            const auto& g = t.grad_buf(oid);
            if (t.wants_grad(aid))  // dA += G @ B
                detail::matmul_raw(g.data(), t.val(bid).data(), t.grad_buf(aid).data(), m, n, k, true);
            if (t.wants_grad(bid))  // dB += G^T @ A
                detail::matmul_tn_raw(g.data(), t.val(aid).data(), t.grad_buf(bid).data(), m, n, k, true);
        };
    }
    return o;
}

// a{B,m,k} @ b{B,k,n} (or b{B,n,k} with trans_b) -> {B,m,n}
template <class S>
TensorT<S> batched_matmul(TensorT<S> a, TensorT<S> b, bool trans_b = false) {
    detail::require_same_tape(a, b);
    if (a.shape().size() != 3 || b.shape().size() != 3 || a.shape()[0] != b.shape()[0])
        throw ShapeError("batched_matmul shape mismatch: " + shape_str(a.shape()) + " x " + shape_str(b.shape()));
    const int64_t B = a.shape()[0], m = a.shape()[1], k = a.shape()[2];
    const int64_t n = trans_b ? b.shape()[1] : b.shape()[2];
    const int64_t bk = trans_b ? b.shape()[2] : b.shape()[1];
    if (bk != k)
        throw ShapeError("batched_matmul inner dims differ: " + shape_str(a.shape()) + " x " + shape_str(b.shape()));
    TapeT<S>& tape = a.tape();
    const auto& av = tape.val(a.id());
    const auto& bv = tape.val(b.id());
    std::vector<S> out(B * m * n);
    parallel_for(B, [&](int64_t lo, int64_t hi) {
        for (int64_t p = lo; p < hi; ++p) {
            const S* ap = av.data() + p * m * k;
            const S* bp = bv.data() + p * k * n;
            S* cp = out.data() + p * m * n;
            for (int64_t i = 0; i < m; ++i) {
                S* crow = cp + i * n;
                const S* arow = ap + i * k;
                if (trans_b) {
                    for (int64_t j = 0; j < n; ++j) {
                        const S* brow = bp + j * k;
                        S acc = 0;
                        for (int64_t kk = 0; kk < k; ++kk) acc += arow[kk] * brow[kk];
                        crow[j] = acc;
                    }
                } else {
                    std::fill(crow, crow + n, S(0));
                    for (int64_t kk = 0; kk < k; ++kk) {
                        const S avv = arow[kk];
                        const S* brow = bp + kk * n;
                        for (int64_t j = 0; j < n; ++j) crow[j] += avv * brow[j];
                    }
                }
            }
        }
    });
    const bool rg = a.requires_grad() || b.requires_grad();
    TensorT<S> o = tape.push({static_cast<int>(B), static_cast<int>(m), static_cast<int>(n)}, std::move(out), rg,
                             nullptr, "batched_matmul");
    if (rg) {
        const int aid = a.id(), bid = b.id(), oid = o.id();
        tape.node(oid).backward_fn = [aid, bid, oid, B, m, k, n, trans_b](TapeT<S>& t) {
            const auto& g = t.grad_buf(oid);
            const auto& av2 = t.val(aid);
            const auto& bv2 = t.val(bid);
            if (t.wants_grad(aid)) {
                auto& da = t.grad_buf(aid);
                parallel_for(B, [&](int64_t lo, int64_t hi) {
                    for (int64_t p = lo; p < hi; ++p) {
                        const S* gp = g.data() + p * m * n;
                        const S* bp = bv2.data() + p * k * n;
                        S* dap = da.data() + p * m * k;
                        if (trans_b)  // dA += G @ B   (B is [n,k])
                            detail::matmul_raw(gp, bp, dap, m, n, k, true);
                        else  // dA += G @ B^T (B is [k,n])
                            detail::matmul_nt_raw(gp, bp, dap, m, n, k, true);
                    }
                });
            }
            if (t.wants_grad(bid)) {
                auto& db = t.grad_buf(bid);
                parallel_for(B, [&](int64_t lo, int64_t hi) {
                    for (int64_t p = lo; p < hi; ++p) {
                        const S* gp = g.data() + p * m * n;
                        const S* ap = av2.data() + p * m * k;
                        S* dbp = db.data() + p * k * n;
                        if (trans_b)  // dB += G^T @ A (result [n,k])
                            detail::matmul_tn_raw(gp, ap, dbp, m, n, k, true);
                        else  // dB += A^T @ G (result [k,n])
                            detail::matmul_tn_raw(ap, gp, dbp, m, k, n, true);
                    }
                });
            }
        };
    }
    return o;
}

template <class S>
TensorT<S> transpose(TensorT<S> x) {
    if (x.shape().size() != 2) throw ShapeError("transpose requires a matrix, got " + shape_str(x.shape()));
    TapeT<S>& tape = x.tape();
    const int64_t m = x.shape()[0], n = x.shape()[1];
    const auto& xv = tape.val(x.id());
    std::vector<S> out(m * n);
    for (int64_t i = 0; i < m; ++i)
        for (int64_t j = 0; j < n; ++j) out[j * m + i] = xv[i * n + j];
    TensorT<S> o =
        tape.push({static_cast<int>(n), static_cast<int>(m)}, std::move(out), x.requires_grad(), nullptr, "transpose");
    if (x.requires_grad()) {
        const int xid = x.id(), oid = o.id();
        tape.node(oid).backward_fn = [xid, oid, m, n](TapeT<S>& t) {
            const auto& g = t.grad_buf(oid);
            auto& dx = t.grad_buf(xid);
            for (int64_t j = 0; j < n; ++j)
                for (int64_t i = 0; i < m; ++i) dx[i * n + j] += g[j * m + i];
        };
    }
    return o;
}

template <class S>
TensorT<S> reshape(TensorT<S> x, Shape shape) {
    if (numel(shape) != x.size())
        throw ShapeError("reshape " + shape_str(x.shape()) + " -> " + shape_str(shape) + " changes element count");
    TapeT<S>& tape = x.tape();
    std::vector<S> out(tape.val(x.id()));
    TensorT<S> o = tape.push(std::move(shape), std::move(out), x.requires_grad(), nullptr, "reshape");
    if (x.requires_grad()) {
        const int xid = x.id(), oid = o.id();
        tape.node(oid).backward_fn = [xid, oid](TapeT<S>& t) {
            const auto& g = t.grad_buf(oid);
            auto& dx = t.grad_buf(xid);
            for (size_t i = 0; i < g.size(); ++i) dx[i] += g[i];
        };
    }
    return o;
}

// ---------------------------------------------------------------------------
// Reductions and indexing

template <class S>
TensorT<S> sum(TensorT<S> x) {
    TapeT<S>& tape = x.tape();
    const auto& xv = tape.val(x.id());
    double acc = 0;
    for (const S v : xv) acc += static_cast<double>(v);
    TensorT<S> o = tape.push({1}, {static_cast<S>(acc)}, x.requires_grad(), nullptr, "sum");
    if (x.requires_grad()) {
        const int xid = x.id(), oid = o.id();
        tape.node(oid).backward_fn = [xid, oid](TapeT<S>& t) {
            const S g = t.grad_buf(oid)[0];
            auto& dx = t.grad_buf(xid);
            for (auto& d : dx) d += g;
        };
    }
    return o;
}

template <class S>
TensorT<S> mean(TensorT<S> x) {
    return scale(sum(x), S(1) / static_cast<S>(x.size()));
}

// out[i] = x[i, idx[i]]
template <class S>
TensorT<S> pick_per_row(TensorT<S> x, std::vector<int> idx) {
    if (x.shape().size() != 2) throw ShapeError("pick_per_row requires a matrix, got " + shape_str(x.shape()));
    const int64_t n = x.shape()[0], m = x.shape()[1];
    if (static_cast<int64_t>(idx.size()) != n)
        throw ShapeError("pick_per_row needs one index per row: " + std::to_string(idx.size()) + " for " +
                         shape_str(x.shape()));
    TapeT<S>& tape = x.tape();
    const auto& xv = tape.val(x.id());
    std::vector<S> out(n);
    for (int64_t i = 0; i < n; ++i) {
        if (idx[i] < 0 || idx[i] >= m) throw ShapeError("pick_per_row index out of range");
        out[i] = xv[i * m + idx[i]];
    }
    TensorT<S> o = tape.push({static_cast<int>(n)}, std::move(out), x.requires_grad(), nullptr, "pick_per_row");
    if (x.requires_grad()) {
        const int xid = x.id(), oid = o.id();
        tape.node(oid).backward_fn = [xid, oid, m, idx = std::move(idx)](TapeT<S>& t) {
            const auto& g = t.grad_buf(oid);
            auto& dx = t.grad_buf(xid);
            for (size_t i = 0; i < idx.size(); ++i) dx[static_cast<int64_t>(i) * m + idx[i]] += g[i];
        };
    }
    return o;
}

template <class S>
TensorT<S> diag(TensorT<S> x) {
    if (x.shape().size() != 2 || x.shape()[0] != x.shape()[1])
        throw ShapeError("diag requires a square matrix, got " + shape_str(x.shape()));
    std::vector<int> idx(x.shape()[0]);
    for (size_t i = 0; i < idx.size(); ++i) idx[i] = static_cast<int>(i);
    return pick_per_row(x, std::move(idx));
}

// out[j,:] = x[rows[j],:]; repeated rows accumulate on backward.
template <class S>
TensorT<S> gather_rows(TensorT<S> x, std::vector<int> rows) {
    if (x.shape().size() != 2) throw ShapeError("gather_rows requires a matrix, got " + shape_str(x.shape()));
    const int64_t n = x.shape()[0], m = x.shape()[1];
    TapeT<S>& tape = x.tape();
    const auto& xv = tape.val(x.id());
    std::vector<S> out(rows.size() * m);
    for (size_t j = 0; j < rows.size(); ++j) {
        if (rows[j] < 0 || rows[j] >= n) throw ShapeError("gather_rows index out of range");
        std::copy_n(xv.data() + static_cast<int64_t>(rows[j]) * m, m, out.data() + j * m);
    }
    TensorT<S> o = tape.push({static_cast<int>(rows.size()), static_cast<int>(m)}, std::move(out), x.requires_grad(),
                             nullptr, "gather_rows");
    if (x.requires_grad()) {
        const int xid = x.id(), oid = o.id();
        tape.node(oid).backward_fn = [xid, oid, m, rows = std::move(rows)](TapeT<S>& t) {
            const auto& g = t.grad_buf(oid);
            auto& dx = t.grad_buf(xid);
            for (size_t j = 0; j < rows.size(); ++j) {
                const S* grow = g.data() + j * m;
                S* drow = dx.data() + static_cast<int64_t>(rows[j]) * m;
                for (int64_t c = 0; c < m; ++c) drow[c] += grow[c];
            }
        };
    }
    return o;
}

// Row lookup in an embedding table; ids are data, not graph values.
template <class S>
TensorT<S> embedding(TensorT<S> table, std::vector<int> ids) {
    if (table.shape().size() != 2) throw ShapeError("embedding table must be a matrix, got " + shape_str(table.shape()));
    const int64_t v = table.shape()[0];
    for (int id : ids) {
        if (id < 0 || id >= v)
            throw DomainError("embedding id " + std::to_string(id) + " out of table range [0," + std::to_string(v) + ")");
    }
    return gather_rows(table, std::move(ids));
}

// x[n,m] + b[m] broadcast over rows.
template <class S>
TensorT<S> add_bias(TensorT<S> x, TensorT<S> b) {
    detail::require_same_tape(x, b);
    if (x.shape().size() != 2 || b.shape().size() != 1 || x.shape()[1] != b.shape()[0])
        throw ShapeError("add_bias shape mismatch: " + shape_str(x.shape()) + " + " + shape_str(b.shape()));
    TapeT<S>& tape = x.tape();
    const int64_t n = x.shape()[0], m = x.shape()[1];
    const auto& xv = tape.val(x.id());
    const auto& bv = tape.val(b.id());
    std::vector<S> out(n * m);
    for (int64_t i = 0; i < n; ++i)
        for (int64_t j = 0; j < m; ++j) out[i * m + j] = xv[i * m + j] + bv[j];
    const bool rg = x.requires_grad() || b.requires_grad();
    TensorT<S> o = tape.push(x.shape(), std::move(out), rg, nullptr, "add_bias");
    if (rg) {
        const int xid = x.id(), bid = b.id(), oid = o.id();
        tape.node(oid).backward_fn = [xid, bid, oid, n, m](TapeT<S>& t) {
            const auto& g = t.grad_buf(oid);
            if (t.wants_grad(xid)) {
                auto& dx = t.grad_buf(xid);
                for (size_t i = 0; i < g.size(); ++i) dx[i] += g[i];
            }
            if (t.wants_grad(bid)) {
                auto& db = t.grad_buf(bid);
                for (int64_t i = 0; i < n; ++i)
                    for (int64_t j = 0; j < m; ++j) db[j] += g[i * m + j];
            }
        };
    }
    return o;
}

// ---------------------------------------------------------------------------
// Row-wise softmax family (max-shifted for stability)

template <class S>
TensorT<S> softmax_rows(TensorT<S> x) {
    if (x.shape().size() != 2) throw ShapeError("softmax_rows requires a matrix, got " + shape_str(x.shape()));
    TapeT<S>& tape = x.tape();
    const auto& xv = tape.val(x.id());
    detail::check_finite(xv, "softmax_rows");
    const int64_t n = x.shape()[0], m = x.shape()[1];
    std::vector<S> out(n * m);
    for (int64_t i = 0; i < n; ++i) {
        const S* row = xv.data() + i * m;
        S* orow = out.data() + i * m;
        S mx = row[0];
        for (int64_t j = 1; j < m; ++j) mx = std::max(mx, row[j]);
        double denom = 0;
        for (int64_t j = 0; j < m; ++j) {
            orow[j] = std::exp(row[j] - mx);
            denom += static_cast<double>(orow[j]);
        }
        for (int64_t j = 0; j < m; ++j) orow[j] = static_cast<S>(orow[j] / denom);
    }
    TensorT<S> o = tape.push(x.shape(), std::move(out), x.requires_grad(), nullptr, "softmax_rows");
    if (x.requires_grad()) {
        const int xid = x.id(), oid = o.id();
        tape.node(oid).backward_fn = [xid, oid, n, m](TapeT<S>& t) {
            const auto& g = t.grad_buf(oid);
            const auto& y = t.val(oid);
            auto& dx = t.grad_buf(xid);
            for (int64_t i = 0; i < n; ++i) {
                const S* grow = g.data() + i * m;
                const S* yrow = y.data() + i * m;
                S* drow = dx.data() + i * m;
                double dot = 0;
                for (int64_t j = 0; j < m; ++j) dot += static_cast<double>(grow[j]) * yrow[j];
                for (int64_t j = 0; j < m; ++j) drow[j] += yrow[j] * (grow[j] - static_cast<S>(dot));
            }
        };
    }
    return o;
}

template <class S>
TensorT<S> log_softmax_rows(TensorT<S> x) {
    if (x.shape().size() != 2) throw ShapeError("log_softmax_rows requires a matrix, got " + shape_str(x.shape()));
    TapeT<S>& tape = x.tape();
    const auto& xv = tape.val(x.id());
    detail::check_finite(xv, "log_softmax_rows");
    const int64_t n = x.shape()[0], m = x.shape()[1];
    std::vector<S> out(n * m);
    for (int64_t i = 0; i < n; ++i) {
        const S* row = xv.data() + i * m;
        S* orow = out.data() + i * m;
        S mx = row[0];
        for (int64_t j = 1; j < m; ++j) mx = std::max(mx, row[j]);
        double denom = 0;
        for (int64_t j = 0; j < m; ++j) denom += std::exp(static_cast<double>(row[j] - mx));
        const S lse = mx + static_cast<S>(std::log(denom));
        for (int64_t j = 0; j < m; ++j) orow[j] = row[j] - lse;
    }
    TensorT<S> o = tape.push(x.shape(), std::move(out), x.requires_grad(), nullptr, "log_softmax_rows");
    if (x.requires_grad()) {
        const int xid = x.id(), oid = o.id();
        tape.node(oid).backward_fn = [xid, oid, n, m](TapeT<S>& t) {
            const auto& g = t.grad_buf(oid);
            const auto& y = t.val(oid);
            auto& dx = t.grad_buf(xid);
            for (int64_t i = 0; i < n; ++i) {
                const S* grow = g.data() + i * m;
                const S* yrow = y.data() + i * m;
                S* drow = dx.data() + i * m;
                double gsum = 0;
                for (int64_t j = 0; j < m; ++j) gsum += static_cast<double>(grow[j]);
                for (int64_t j = 0; j < m; ++j) drow[j] += grow[j] - static_cast<S>(gsum) * std::exp(yrow[j]);
            }
        };
    }
    return o;
}

template <class S>
TensorT<S> l2_normalize_rows(TensorT<S> x) {
    if (x.shape().size() != 2) throw ShapeError("l2_normalize_rows requires a matrix, got " + shape_str(x.shape()));
    TapeT<S>& tape = x.tape();
    const auto& xv = tape.val(x.id());
    const int64_t n = x.shape()[0], m = x.shape()[1];
    std::vector<S> out(n * m);
    std::vector<S> norms(n);
    for (int64_t i = 0; i < n; ++i) {
        const S* row = xv.data() + i * m;
        double sq = 0;
        for (int64_t j = 0; j < m; ++j) sq += static_cast<double>(row[j]) * row[j];
        const double norm = std::sqrt(sq);
        if (norm < 1e-12) throw DomainError("degenerate embedding: row " + std::to_string(i) + " has near-zero norm");
        norms[i] = static_cast<S>(norm);
        for (int64_t j = 0; j < m; ++j) out[i * m + j] = static_cast<S>(row[j] / norm);
    }
    TensorT<S> o = tape.push(x.shape(), std::move(out), x.requires_grad(), nullptr, "l2_normalize_rows");
    if (x.requires_grad()) {
        const int xid = x.id(), oid = o.id();
        tape.node(oid).backward_fn = [xid, oid, n, m, norms = std::move(norms)](TapeT<S>& t) {
            const auto& g = t.grad_buf(oid);
            const auto& y = t.val(oid);
            auto& dx = t.grad_buf(xid);
            for (int64_t i = 0; i < n; ++i) {
                const S* grow = g.data() + i * m;
                const S* yrow = y.data() + i * m;
                S* drow = dx.data() + i * m;
                double dot = 0;
                for (int64_t j = 0; j < m; ++j) dot += static_cast<double>(grow[j]) * yrow[j];
                for (int64_t j = 0; j < m; ++j)
                    drow[j] += (grow[j] - static_cast<S>(dot) * yrow[j]) / norms[i];
            }
        };
    }
    return o;
}

// Pairwise dot products of (assumed unit) rows.
template <class S>
TensorT<S> cosine_sim_matrix(TensorT<S> a, TensorT<S> b) {
    if (a.shape().size() != 2 || b.shape().size() != 2 || a.shape()[1] != b.shape()[1])
        throw ShapeError("cosine_sim_matrix dimension mismatch: " + shape_str(a.shape()) + " vs " +
                         shape_str(b.shape()));
    return matmul_nt(a, b);
}

template <class S>
TensorT<S> stop_gradient(TensorT<S> x) {
    TapeT<S>& tape = x.tape();
    std::vector<S> out(tape.val(x.id()));
    return tape.push(x.shape(), std::move(out), false, nullptr, "stop_gradient");
}

// ---------------------------------------------------------------------------
// Layer norm over the last dimension of [n, e] rows

template <class S>
TensorT<S> layer_norm_rows(TensorT<S> x, TensorT<S> gain, TensorT<S> bias, S eps = S(1e-5)) {
    detail::require_same_tape(x, gain);
    detail::require_same_tape(x, bias);
    if (x.shape().size() != 2 || gain.shape().size() != 1 || bias.shape().size() != 1 ||
        gain.shape()[0] != x.shape()[1] || bias.shape()[0] != x.shape()[1])
        throw ShapeError("layer_norm_rows shape mismatch: " + shape_str(x.shape()) + ", gain " +
                         shape_str(gain.shape()) + ", bias " + shape_str(bias.shape()));
    TapeT<S>& tape = x.tape();
    const int64_t n = x.shape()[0], e = x.shape()[1];
    const auto& xv = tape.val(x.id());
    const auto& gv = tape.val(gain.id());
    const auto& bv = tape.val(bias.id());
    std::vector<S> out(n * e);
    std::vector<S> xhat(n * e);
    std::vector<S> inv_sigma(n);
    for (int64_t i = 0; i < n; ++i) {
        const S* row = xv.data() + i * e;
        double mu = 0;
        for (int64_t j = 0; j < e; ++j) mu += static_cast<double>(row[j]);
        mu /= static_cast<double>(e);
        double var = 0;
        for (int64_t j = 0; j < e; ++j) {
            const double d = static_cast<double>(row[j]) - mu;
            var += d * d;
        }
        var /= static_cast<double>(e);
        const double is = 1.0 / std::sqrt(var + static_cast<double>(eps));
        inv_sigma[i] = static_cast<S>(is);
        for (int64_t j = 0; j < e; ++j) {
            const S xh = static_cast<S>((static_cast<double>(row[j]) - mu) * is);
            xhat[i * e + j] = xh;
            out[i * e + j] = gv[j] * xh + bv[j];
        }
    }
    const bool rg = x.requires_grad() || gain.requires_grad() || bias.requires_grad();
    TensorT<S> o = tape.push(x.shape(), std::move(out), rg, nullptr, "layer_norm_rows");
    if (rg) {
        const int xid = x.id(), gid = gain.id(), bid = bias.id(), oid = o.id();
        tape.node(oid).backward_fn = [xid, gid, bid, oid, n, e, xhat = std::move(xhat),
                                      inv_sigma = std::move(inv_sigma)](TapeT<S>& t) {
            const auto& g = t.grad_buf(oid);
            const auto& gv2 = t.val(gid);
            if (t.wants_grad(bid)) {
                auto& db = t.grad_buf(bid);
                for (int64_t i = 0; i < n; ++i)
                    for (int64_t j = 0; j < e; ++j) db[j] += g[i * e + j];
            }
            if (t.wants_grad(gid)) {
                auto& dg = t.grad_buf(gid);
                for (int64_t i = 0; i < n; ++i)
                    for (int64_t j = 0; j < e; ++j) dg[j] += g[i * e + j] * xhat[i * e + j];
            }
            if (t.wants_grad(xid)) {
                auto& dx = t.grad_buf(xid);
                for (int64_t i = 0; i < n; ++i) {
                    const S* grow = g.data() + i * e;
                    const S* xh = xhat.data() + i * e;
                    double mean_dxhat = 0, mean_dxhat_xhat = 0;
                    for (int64_t j = 0; j < e; ++j) {
                        const double dxh = static_cast<double>(grow[j]) * gv2[j];
                        mean_dxhat += dxh;
                        mean_dxhat_xhat += dxh * xh[j];
                    }
                    mean_dxhat /= static_cast<double>(e);
                    mean_dxhat_xhat /= static_cast<double>(e);
                    for (int64_t j = 0; j < e; ++j) {
                        const double dxh = static_cast<double>(grow[j]) * gv2[j];
                        dx[i * e + j] += static_cast<S>(inv_sigma[i] * (dxh - mean_dxhat - xh[j] * mean_dxhat_xhat));
                    }
                }
            }
        };
    }
    return o;
}

// ---------------------------------------------------------------------------
// Convolution and pooling (NCHW)

template <class S>
TensorT<S> conv2d(TensorT<S> x, TensorT<S> w, TensorT<S> b, int stride, int pad) {
    detail::require_same_tape(x, w);
    detail::require_same_tape(x, b);
    if (x.shape().size() != 4 || w.shape().size() != 4 || x.shape()[1] != w.shape()[1])
        throw ShapeError("conv2d shape mismatch: input " + shape_str(x.shape()) + ", kernel " + shape_str(w.shape()));
    const int64_t N = x.shape()[0], C = x.shape()[1], H = x.shape()[2], W = x.shape()[3];
    const int64_t K = w.shape()[0], kh = w.shape()[2], kw = w.shape()[3];
    if (b.shape() != Shape{static_cast<int>(K)})
        throw ShapeError("conv2d bias shape " + shape_str(b.shape()) + " must be [" + std::to_string(K) + "]");
    const int64_t OH = (H + 2 * pad - kh) / stride + 1;
    const int64_t OW = (W + 2 * pad - kw) / stride + 1;
    if (OH <= 0 || OW <= 0) throw ShapeError("conv2d output would be empty for input " + shape_str(x.shape()));
    TapeT<S>& tape = x.tape();
    const auto& xv = tape.val(x.id());
    const auto& wv = tape.val(w.id());
    const auto& bv = tape.val(b.id());

    const int64_t patch = C * kh * kw;
    const int64_t opix = OH * OW;
    // col[(n*OH*OW + o), (c*kh*kw + r)] = padded x value
    auto cols = std::make_shared<std::vector<S>>(N * opix * patch);
    parallel_for(N * opix, [&](int64_t lo, int64_t hi) {
        for (int64_t row = lo; row < hi; ++row) {
            const int64_t n = row / opix;
            const int64_t o = row % opix;
            const int64_t oy = o / OW, ox = o % OW;
            S* dst = cols->data() + row * patch;
            for (int64_t c = 0; c < C; ++c) {
                const S* src = xv.data() + (n * C + c) * H * W;
                for (int64_t r = 0; r < kh; ++r) {
                    const int64_t iy = oy * stride - pad + r;
                    for (int64_t s = 0; s < kw; ++s) {
                        const int64_t ix = ox * stride - pad + s;
                        *dst++ = (iy >= 0 && iy < H && ix >= 0 && ix < W) ? src[iy * W + ix] : S(0);
                    }
                }
            }
        }
    });
    // out_mat[(n*opix), K] = cols @ w_mat^T  with w_mat[K, patch]
    std::vector<S> out_mat(N * opix * K);
    detail::matmul_nt_raw(cols->data(), wv.data(), out_mat.data(), N * opix, patch, K, false);
    // reorder to NCHW and add bias
    std::vector<S> out(N * K * opix);
    for (int64_t n = 0; n < N; ++n)
        for (int64_t o = 0; o < opix; ++o) {
            const S* src = out_mat.data() + (n * opix + o) * K;
            for (int64_t c = 0; c < K; ++c) out[(n * K + c) * opix + o] = src[c] + bv[c];
        }
    const bool rg = x.requires_grad() || w.requires_grad() || b.requires_grad();
    TensorT<S> ot = tape.push({static_cast<int>(N), static_cast<int>(K), static_cast<int>(OH), static_cast<int>(OW)},
                              std::move(out), rg, nullptr, "conv2d");
    if (rg) {
        const int xid = x.id(), wid = w.id(), bid = b.id(), oid = ot.id();
        tape.node(oid).backward_fn = [=](TapeT<S>& t) {
            const auto& g = t.grad_buf(oid);  // [N,K,OH,OW]
            // g_mat[(n*opix), K]
            std::vector<S> g_mat(N * opix * K);
            for (int64_t n = 0; n < N; ++n)
                for (int64_t c = 0; c < K; ++c) {
                    const S* src = g.data() + (n * K + c) * opix;
                    for (int64_t o = 0; o < opix; ++o) g_mat[(n * opix + o) * K + c] = src[o];
                }
            if (t.wants_grad(bid)) {
                auto& db = t.grad_buf(bid);
                for (int64_t r = 0; r < N * opix; ++r)
                    for (int64_t c = 0; c < K; ++c) db[c] += g_mat[r * K + c];
            }
            if (t.wants_grad(wid)) {  // dW[K, patch] += g_mat^T @ cols
                auto& dw = t.grad_buf(wid);
                detail::matmul_tn_raw(g_mat.data(), cols->data(), dw.data(), N * opix, K, patch, true);
            }
            if (t.wants_grad(xid)) {  // dcol = g_mat @ w_mat, then col2im
                const auto& wv2 = t.val(wid);
                std::vector<S> dcol(N * opix * patch);
                detail::matmul_raw(g_mat.data(), wv2.data(), dcol.data(), N * opix, K, patch, false);
                auto& dx = t.grad_buf(xid);
                for (int64_t row = 0; row < N * opix; ++row) {
                    const int64_t n = row / opix;
                    const int64_t o = row % opix;
                    const int64_t oy = o / OW, ox = o % OW;
                    const S* src = dcol.data() + row * patch;
                    for (int64_t c = 0; c < C; ++c) {
                        S* dst = dx.data() + (n * C + c) * H * W;
                        for (int64_t r = 0; r < kh; ++r) {
                            const int64_t iy = oy * stride - pad + r;
                            for (int64_t s = 0; s < kw; ++s) {
                                const int64_t ix = ox * stride - pad + s;
                                if (iy >= 0 && iy < H && ix >= 0 && ix < W) dst[iy * W + ix] += *src;
                                ++src;
                            }
                        }
                    }
                }
            }
        };
    }
    return ot;
}

template <class S>
TensorT<S> global_avg_pool(TensorT<S> x) {
    if (x.shape().size() != 4) throw ShapeError("global_avg_pool requires [N,C,H,W], got " + shape_str(x.shape()));
    const int64_t N = x.shape()[0], C = x.shape()[1], HW = static_cast<int64_t>(x.shape()[2]) * x.shape()[3];
    TapeT<S>& tape = x.tape();
    const auto& xv = tape.val(x.id());
    std::vector<S> out(N * C);
    for (int64_t n = 0; n < N; ++n)
        for (int64_t c = 0; c < C; ++c) {
            const S* src = xv.data() + (n * C + c) * HW;
            double acc = 0;
            for (int64_t i = 0; i < HW; ++i) acc += static_cast<double>(src[i]);
            out[n * C + c] = static_cast<S>(acc / static_cast<double>(HW));
        }
    TensorT<S> o = tape.push({static_cast<int>(N), static_cast<int>(C)}, std::move(out), x.requires_grad(), nullptr,
                             "global_avg_pool");
    if (x.requires_grad()) {
        const int xid = x.id(), oid = o.id();
        tape.node(oid).backward_fn = [xid, oid, N, C, HW](TapeT<S>& t) {
            const auto& g = t.grad_buf(oid);
            auto& dx = t.grad_buf(xid);
            const S inv = S(1) / static_cast<S>(HW);
            for (int64_t n = 0; n < N; ++n)
                for (int64_t c = 0; c < C; ++c) {
                    const S gv = g[n * C + c] * inv;
                    S* dst = dx.data() + (n * C + c) * HW;
                    for (int64_t i = 0; i < HW; ++i) dst[i] += gv;
                }
        };
    }
    return o;
}

// ---------------------------------------------------------------------------
// Multi-head reshuffles: [n*len, e] <-> {n*heads, len, e/heads}

template <class S>
TensorT<S> head_split(TensorT<S> x, int n, int len, int heads) {
    if (x.shape().size() != 2 || x.shape()[0] != n * len || x.shape()[1] % heads != 0)
        throw ShapeError("head_split([n*len,e]) mismatch for " + shape_str(x.shape()));
    const int64_t e = x.shape()[1];
    const int64_t dh = e / heads;
    TapeT<S>& tape = x.tape();
    const auto& xv = tape.val(x.id());
    std::vector<S> out(static_cast<int64_t>(n) * len * e);
    for (int64_t b = 0; b < n; ++b)
        for (int64_t h = 0; h < heads; ++h)
            for (int64_t l = 0; l < len; ++l) {
                const S* src = xv.data() + (b * len + l) * e + h * dh;
                S* dst = out.data() + (((b * heads + h) * len) + l) * dh;
                std::copy_n(src, dh, dst);
            }
    TensorT<S> o = tape.push({n * heads, len, static_cast<int>(dh)}, std::move(out), x.requires_grad(), nullptr,
                             "head_split");
    if (x.requires_grad()) {
        const int xid = x.id(), oid = o.id();
        tape.node(oid).backward_fn = [xid, oid, n, len, heads, e, dh](TapeT<S>& t) {
            const auto& g = t.grad_buf(oid);
            auto& dx = t.grad_buf(xid);
            for (int64_t b = 0; b < n; ++b)
                for (int64_t h = 0; h < heads; ++h)
                    for (int64_t l = 0; l < len; ++l) {
                        const S* src = g.data() + (((b * heads + h) * len) + l) * dh;
                        S* dst = dx.data() + (b * len + l) * e + h * dh;
                        for (int64_t j = 0; j < dh; ++j) dst[j] += src[j];
                    }
        };
    }
    return o;
}

template <class S>
TensorT<S> head_merge(TensorT<S> x, int n, int len, int heads) {
    if (x.shape().size() != 3 || x.shape()[0] != n * heads || x.shape()[1] != len)
        throw ShapeError("head_merge({n*heads,len,dh}) mismatch for " + shape_str(x.shape()));
    const int64_t dh = x.shape()[2];
    const int64_t e = dh * heads;
    TapeT<S>& tape = x.tape();
    const auto& xv = tape.val(x.id());
    std::vector<S> out(static_cast<int64_t>(n) * len * e);
    for (int64_t b = 0; b < n; ++b)
        for (int64_t h = 0; h < heads; ++h)
            for (int64_t l = 0; l < len; ++l) {
                const S* src = xv.data() + (((b * heads + h) * len) + l) * dh;
                S* dst = out.data() + (b * len + l) * e + h * dh;
                std::copy_n(src, dh, dst);
            }
    TensorT<S> o =
        tape.push({n * len, static_cast<int>(e)}, std::move(out), x.requires_grad(), nullptr, "head_merge");
    if (x.requires_grad()) {
        const int xid = x.id(), oid = o.id();
        tape.node(oid).backward_fn = [xid, oid, n, len, heads, e, dh](TapeT<S>& t) {
            const auto& g = t.grad_buf(oid);
            auto& dx = t.grad_buf(xid);
            for (int64_t b = 0; b < n; ++b)
                for (int64_t h = 0; h < heads; ++h)
                    for (int64_t l = 0; l < len; ++l) {
                        const S* src = g.data() + (b * len + l) * e + h * dh;
                        S* dst = dx.data() + (((b * heads + h) * len) + l) * dh;
                        for (int64_t j = 0; j < dh; ++j) dst[j] += src[j];
                    }
        };
    }
    return o;
}

// ---------------------------------------------------------------------------
// Gradient checking (use S = double)

// Max over elements of |analytic - numeric| / max(1, |analytic|, |numeric|)
// with central differences (f(x+h) - f(x-h)) / 2h.
template <class S>
double grad_check(const std::function<TensorT<S>(TapeT<S>&, TensorT<S>)>& f, const Shape& shape,
                  std::vector<S> x0, S h = S(1e-5)) {
    std::vector<S> analytic;
    {
        TapeT<S> tape;
        TensorT<S> x = tape.leaf(shape, x0, true);
        TensorT<S> y = f(tape, x);
        tape.backward(y);
        auto g = x.grad();
        analytic.assign(g.begin(), g.end());
    }
    double worst = 0;
    for (size_t i = 0; i < x0.size(); ++i) {
        auto eval = [&](S v) {
            std::vector<S> xs = x0;
            xs[i] = v;
            TapeT<S> tape;
            TensorT<S> x = tape.leaf(shape, std::move(xs), false);
            return static_cast<double>(f(tape, x).item());
        };
        const double fp = eval(x0[i] + h);
        const double fm = eval(x0[i] - h);
        const double numeric = (fp - fm) / (2.0 * static_cast<double>(h));
        const double a = analytic.empty() ? 0.0 : static_cast<double>(analytic[i]);
        const double denom = std::max({1.0, std::abs(a), std::abs(numeric)});
        worst = std::max(worst, std::abs(a - numeric) / denom);
    }
    return worst;
}

}  // namespace miniclip
