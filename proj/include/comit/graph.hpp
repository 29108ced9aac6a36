#pragma once

// Reverse-mode automatic differentiation over dense row-major matrices.
//
// A Graph is a tape of matrix-valued nodes created in topological order.
// Each op computes its value eagerly and registers a closure that routes the
// node's gradient to its parents. backward() walks the tape in reverse
// creation order, which is a valid reverse topological order by construction.
//
// Graphs are single-threaded and cheap to construct; batch parallelism is
// achieved by giving each sample its own graph and merging parameter
// gradients afterwards (see ParamStore / collect_param_grads).

#include "comit/common.hpp"

#include <functional>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

namespace comit {

// Named parameter registry with Adam moment buffers. Weights live here and are
// referenced (not copied) by graph leaves.
template <typename T>
class ParamStore {
public:
    struct Entry {
        std::string name;
        Mat<T> w;
        Mat<T> m;  // Adam first moment
        Mat<T> v;  // Adam second moment
    };

    int add(const std::string& name, Mat<T> w) {
        require(by_name_.find(name) == by_name_.end(), "ParamStore: duplicate name " + name);
        int id = static_cast<int>(entries_.size());
        Entry e;
        e.name = name;
        e.m = Mat<T>::Zero(w.rows(), w.cols());
        e.v = Mat<T>::Zero(w.rows(), w.cols());
        e.w = std::move(w);
        entries_.push_back(std::move(e));
        by_name_[name] = id;
        return id;
    }

    int size() const { return static_cast<int>(entries_.size()); }
    Entry& entry(int id) { return entries_[static_cast<size_t>(id)]; }
    const Entry& entry(int id) const { return entries_[static_cast<size_t>(id)]; }
    Mat<T>& weight(int id) { return entries_[static_cast<size_t>(id)].w; }
    const Mat<T>& weight(int id) const { return entries_[static_cast<size_t>(id)].w; }

    int find(const std::string& name) const {
        auto it = by_name_.find(name);
        return it == by_name_.end() ? -1 : it->second;
    }

    int64_t total_elements() const {
        int64_t n = 0;
        for (const auto& e : entries_) n += e.w.size();
        return n;
    }

private:
    std::vector<Entry> entries_;
    std::unordered_map<std::string, int> by_name_;
};

template <typename T>
class Graph {
public:
    struct Var {
        int i = -1;
        bool valid() const { return i >= 0; }
    };

    Graph() { nodes_.reserve(256); }
    Graph(const Graph&) = delete;
    Graph& operator=(const Graph&) = delete;

    // ---- node access -------------------------------------------------------

    const Mat<T>& val(Var v) const {
        const Node& n = nodes_[static_cast<size_t>(v.i)];
        return n.ext ? *n.ext : n.value;
    }

    // gradient of a node after backward(); zero matrix if it never received one
    Mat<T> grad_of(Var v) const {
        const Node& n = nodes_[static_cast<size_t>(v.i)];
        if (n.grad_live) return n.grad;
        const Mat<T>& x = n.ext ? *n.ext : n.value;
        return Mat<T>::Zero(x.rows(), x.cols());
    }

    bool requires_grad(Var v) const { return nodes_[static_cast<size_t>(v.i)].requires_grad; }
    size_t size() const { return nodes_.size(); }

    // ---- leaves ------------------------------------------------------------

    Var constant(Mat<T> v) { return push(std::move(v), false); }

    Var input(Mat<T> v, bool needs_grad = false) { return push(std::move(v), needs_grad); }

    Var param(ParamStore<T>& store, int param_id) {
        Node n;
        n.ext = &store.weight(param_id);
        n.requires_grad = true;
        n.param_id = param_id;
        n.param_store = &store;
        nodes_.push_back(std::move(n));
        return {static_cast<int>(nodes_.size()) - 1};
    }

    // detached copy: same value, no gradient path
    Var detach(Var a) { return constant(val(a)); }

    // ---- arithmetic --------------------------------------------------------

    Var add(Var a, Var b) {
        const Mat<T>&A = val(a), &B = val(b);
        require(A.rows() == B.rows() && A.cols() == B.cols(), "add: shape mismatch");
        Var out = push(A + B, requires_grad(a) || requires_grad(b));
        if (needs(out))
            set_back(out, [this, a, b, out] {
                const Mat<T>& g = grad(out);
                if (requires_grad(a)) grad(a) += g;
                if (requires_grad(b)) grad(b) += g;
            });
        return out;
    }

    Var sub(Var a, Var b) {
        const Mat<T>&A = val(a), &B = val(b);
        require(A.rows() == B.rows() && A.cols() == B.cols(), "sub: shape mismatch");
        Var out = push(A - B, requires_grad(a) || requires_grad(b));
        if (needs(out))
            set_back(out, [this, a, b, out] {
                const Mat<T>& g = grad(out);
                if (requires_grad(a)) grad(a) += g;
                if (requires_grad(b)) grad(b) -= g;
            });
        return out;
    }

    // broadcast a 1 x c row over all rows of a
    Var add_rowvec(Var a, Var b) {
        const Mat<T>&A = val(a), &B = val(b);
        require(B.rows() == 1 && B.cols() == A.cols(), "add_rowvec: expected 1 x cols(a)");
        Mat<T> y = A;
        y.rowwise() += B.row(0);
        Var out = push(std::move(y), requires_grad(a) || requires_grad(b));
        if (needs(out))
            set_back(out, [this, a, b, out] {
                const Mat<T>& g = grad(out);
                if (requires_grad(a)) grad(a) += g;
                if (requires_grad(b)) grad(b).row(0) += g.colwise().sum();
            });
        return out;
    }

    Var scale(Var a, T s) {
        Var out = push(Mat<T>(val(a) * s), requires_grad(a));
        if (needs(out))
            set_back(out, [this, a, out, s] { grad(a) += grad(out) * s; });
        return out;
    }

    Var neg(Var a) { return scale(a, T(-1)); }

    Var hadamard(Var a, Var b) {
        const Mat<T>&A = val(a), &B = val(b);
        require(A.rows() == B.rows() && A.cols() == B.cols(), "hadamard: shape mismatch");
        Var out = push(A.cwiseProduct(B), requires_grad(a) || requires_grad(b));
        if (needs(out))
            set_back(out, [this, a, b, out] {
                const Mat<T>& g = grad(out);
                if (requires_grad(a)) grad(a) += g.cwiseProduct(val(b));
                if (requires_grad(b)) grad(b) += g.cwiseProduct(val(a));
            });
        return out;
    }

    // a (n x c) scaled per column by row vector b (1 x c)
    Var hadamard_rowvec(Var a, Var b) {
        const Mat<T>&A = val(a), &B = val(b);
        require(B.rows() == 1 && B.cols() == A.cols(), "hadamard_rowvec: expected 1 x cols(a)");
        Mat<T> y = A.array().rowwise() * B.row(0).array();
        Var out = push(std::move(y), requires_grad(a) || requires_grad(b));
        if (needs(out))
            set_back(out, [this, a, b, out] {
                const Mat<T>& g = grad(out);
                if (requires_grad(a)) grad(a).array() += g.array().rowwise() * val(b).row(0).array();
                if (requires_grad(b)) grad(b).row(0) += g.cwiseProduct(val(a)).colwise().sum();
            });
        return out;
    }

    Var matmul(Var a, Var b) {
        const Mat<T>&A = val(a), &B = val(b);
        require(A.cols() == B.rows(), "matmul: inner dimension mismatch");
        Mat<T> y(A.rows(), B.cols());
        y.noalias() = A * B;
        Var out = push(std::move(y), requires_grad(a) || requires_grad(b));
        if (needs(out))
            set_back(out, [this, a, b, out] {
                const Mat<T>& g = grad(out);
                if (requires_grad(a)) grad(a).noalias() += g * val(b).transpose();
                if (requires_grad(b)) grad(b).noalias() += val(a).transpose() * g;
            });
        return out;
    }

    // a * b^T
    Var matmul_nt(Var a, Var b) {
        const Mat<T>&A = val(a), &B = val(b);
        require(A.cols() == B.cols(), "matmul_nt: column mismatch");
        Mat<T> y(A.rows(), B.rows());
        y.noalias() = A * B.transpose();
        Var out = push(std::move(y), requires_grad(a) || requires_grad(b));
        if (needs(out))
            set_back(out, [this, a, b, out] {
                const Mat<T>& g = grad(out);
                if (requires_grad(a)) grad(a).noalias() += g * val(b);
                if (requires_grad(b)) grad(b).noalias() += g.transpose() * val(a);
            });
        return out;
    }

    // ---- slicing / stacking ------------------------------------------------

    Var rows(Var a, int r0, int n) {
        const Mat<T>& A = val(a);
        require(r0 >= 0 && n >= 0 && r0 + n <= A.rows(), "rows: slice out of range");
        Var out = push(Mat<T>(A.middleRows(r0, n)), requires_grad(a));
        if (needs(out))
            set_back(out, [this, a, out, r0, n] { grad(a).middleRows(r0, n) += grad(out); });
        return out;
    }

    Var cols(Var a, int c0, int n) {
        const Mat<T>& A = val(a);
        require(c0 >= 0 && n >= 0 && c0 + n <= A.cols(), "cols: slice out of range");
        Var out = push(Mat<T>(A.middleCols(c0, n)), requires_grad(a));
        if (needs(out))
            set_back(out, [this, a, out, c0, n] { grad(a).middleCols(c0, n) += grad(out); });
        return out;
    }

    Var vstack(const std::vector<Var>& parts) {
        require(!parts.empty(), "vstack: empty");
        Eigen::Index total = 0, cols_n = val(parts[0]).cols();
        bool any_grad = false;
        for (Var p : parts) {
            require(val(p).cols() == cols_n, "vstack: column mismatch");
            total += val(p).rows();
            any_grad = any_grad || requires_grad(p);
        }
        Mat<T> y(total, cols_n);
        Eigen::Index r = 0;
        for (Var p : parts) {
            y.middleRows(r, val(p).rows()) = val(p);
            r += val(p).rows();
        }
        Var out = push(std::move(y), any_grad);
        if (needs(out))
            set_back(out, [this, parts, out] {
                const Mat<T>& g = grad(out);
                Eigen::Index r = 0;
                for (Var p : parts) {
                    Eigen::Index n = val(p).rows();
                    if (requires_grad(p)) grad(p) += g.middleRows(r, n);
                    r += n;
                }
            });
        return out;
    }

    Var hstack(const std::vector<Var>& parts) {
        require(!parts.empty(), "hstack: empty");
        Eigen::Index total = 0, rows_n = val(parts[0]).rows();
        bool any_grad = false;
        for (Var p : parts) {
            require(val(p).rows() == rows_n, "hstack: row mismatch");
            total += val(p).cols();
            any_grad = any_grad || requires_grad(p);
        }
        Mat<T> y(rows_n, total);
        Eigen::Index c = 0;
        for (Var p : parts) {
            y.middleCols(c, val(p).cols()) = val(p);
            c += val(p).cols();
        }
        Var out = push(std::move(y), any_grad);
        if (needs(out))
            set_back(out, [this, parts, out] {
                const Mat<T>& g = grad(out);
                Eigen::Index c = 0;
                for (Var p : parts) {
                    Eigen::Index n = val(p).cols();
                    if (requires_grad(p)) grad(p) += g.middleCols(c, n);
                    c += n;
                }
            });
        return out;
    }

    // gather rows of a table by index (embedding lookup)
    Var gather_rows(Var table, std::vector<int> idx) {
        const Mat<T>& W = val(table);
        Mat<T> y(static_cast<Eigen::Index>(idx.size()), W.cols());
        for (size_t r = 0; r < idx.size(); ++r) {
            require(idx[r] >= 0 && idx[r] < W.rows(), "gather_rows: index out of range");
            y.row(static_cast<Eigen::Index>(r)) = W.row(idx[r]);
        }
        Var out = push(std::move(y), requires_grad(table));
        if (needs(out))
            set_back(out, [this, table, out, idx = std::move(idx)] {
                const Mat<T>& g = grad(out);
                Mat<T>& gt = grad(table);
                for (size_t r = 0; r < idx.size(); ++r)
                    gt.row(idx[r]) += g.row(static_cast<Eigen::Index>(r));
            });
        return out;
    }

    // caller-evaluated elementwise map: y_ij = f(a_ij) with dy/da supplied.
    // Used for ops whose forward is not smooth (straight-through estimators).
    Var elementwise_custom(Var a, Mat<T> value, Mat<T> deriv) {
        const Mat<T>& A = val(a);
        require(value.rows() == A.rows() && value.cols() == A.cols() &&
                    deriv.rows() == A.rows() && deriv.cols() == A.cols(),
                "elementwise_custom: shape mismatch");
        Var out = push(std::move(value), requires_grad(a));
        if (needs(out))
            set_back(out, [this, a, out, deriv = std::move(deriv)] {
                grad(a).array() += grad(out).array() * deriv.array();
            });
        return out;
    }

    // ---- nonlinearities ------------------------------------------------------

    Var silu(Var a) {
        const Mat<T>& A = val(a);
        Mat<T> sig = (T(1) / (T(1) + (-A.array()).exp())).matrix();
        Var out = push(A.cwiseProduct(sig), requires_grad(a));
        if (needs(out))
            set_back(out, [this, a, out, sig = std::move(sig)] {
                // d/dx x*s(x) = s(x) * (1 + x * (1 - s(x)))
                auto s = sig.array();
                grad(a).array() +=
                    grad(out).array() * s * (T(1) + val(a).array() * (T(1) - s));
            });
        return out;
    }

    Var gelu(Var a) {
        const Mat<T>& A = val(a);
        Mat<T> cdf(A.rows(), A.cols());
        for (Eigen::Index r = 0; r < A.rows(); ++r)
            for (Eigen::Index c = 0; c < A.cols(); ++c)
                cdf(r, c) = T(0.5) * (T(1) + std::erf(A(r, c) * T(0.7071067811865475)));
        Var out = push(A.cwiseProduct(cdf), requires_grad(a));
        if (needs(out))
            set_back(out, [this, a, out, cdf = std::move(cdf)] {
                const T inv_sqrt2pi = T(0.3989422804014327);
                auto x = val(a).array();
                grad(a).array() += grad(out).array() *
                                   (cdf.array() + x * inv_sqrt2pi * (-T(0.5) * x * x).exp());
            });
        return out;
    }

    Var tanh_(Var a) {
        Mat<T> y = val(a).array().tanh().matrix();
        Var out = push(y, requires_grad(a));
        if (needs(out))
            set_back(out, [this, a, out] {
                auto y2 = val(out).array().square();
                grad(a).array() += grad(out).array() * (T(1) - y2);
            });
        return out;
    }

    Var exp_(Var a) {
        Mat<T> y = val(a).array().exp().matrix();
        Var out = push(std::move(y), requires_grad(a));
        if (needs(out))
            set_back(out, [this, a, out] {
                grad(a).array() += grad(out).array() * val(out).array();
            });
        return out;
    }

    // ---- normalization -------------------------------------------------------

    // per-row standardization, no learned affine (modulation supplies it)
    Var layernorm_rows(Var a, T eps = T(1e-6)) {
        const Mat<T>& A = val(a);
        Mat<T> y(A.rows(), A.cols());
        Mat<T> inv_std(A.rows(), 1);
        const T n = static_cast<T>(A.cols());
        for (Eigen::Index r = 0; r < A.rows(); ++r) {
            T mu = A.row(r).mean();
            T var = (A.row(r).array() - mu).square().sum() / n;
            T is = T(1) / std::sqrt(var + eps);
            inv_std(r, 0) = is;
            y.row(r) = ((A.row(r).array() - mu) * is).matrix();
        }
        Var out = push(std::move(y), requires_grad(a));
        if (needs(out))
            set_back(out, [this, a, out, inv_std = std::move(inv_std), n] {
                const Mat<T>&g = grad(out), &y = val(out);
                Mat<T>& ga = grad(a);
                for (Eigen::Index r = 0; r < g.rows(); ++r) {
                    T gm = g.row(r).mean();
                    T gy = g.row(r).cwiseProduct(y.row(r)).sum() / n;
                    ga.row(r).array() +=
                        inv_std(r, 0) * (g.row(r).array() - gm - y.row(r).array() * gy);
                }
            });
        return out;
    }

    // x * (1 + scale) + shift with 1 x c scale/shift broadcast over rows
    Var modulate_rows(Var x, Var scale_row, Var shift_row) {
        const Mat<T>&X = val(x), &S = val(scale_row), &B = val(shift_row);
        require(S.rows() == 1 && B.rows() == 1 && S.cols() == X.cols() && B.cols() == X.cols(),
                "modulate_rows: scale/shift must be 1 x cols(x)");
        Mat<T> y = (X.array().rowwise() * (S.row(0).array() + T(1))).matrix();
        y.rowwise() += B.row(0);
        Var out = push(std::move(y),
                       requires_grad(x) || requires_grad(scale_row) || requires_grad(shift_row));
        if (needs(out))
            set_back(out, [this, x, scale_row, shift_row, out] {
                const Mat<T>& g = grad(out);
                if (requires_grad(x))
                    grad(x).array() += g.array().rowwise() * (val(scale_row).row(0).array() + T(1));
                if (requires_grad(scale_row))
                    grad(scale_row).row(0) += g.cwiseProduct(val(x)).colwise().sum();
                if (requires_grad(shift_row)) grad(shift_row).row(0) += g.colwise().sum();
            });
        return out;
    }

    // row-wise softmax with optional additive mask (use -inf to forbid)
    Var softmax_rows(Var a, const Mat<T>* mask = nullptr) {
        const Mat<T>& A = val(a);
        if (mask)
            require(mask->rows() == A.rows() && mask->cols() == A.cols(),
                    "softmax_rows: mask shape mismatch");
        Mat<T> y(A.rows(), A.cols());
        for (Eigen::Index r = 0; r < A.rows(); ++r) {
            Eigen::Array<T, 1, Eigen::Dynamic> row = A.row(r).array();
            if (mask) row += mask->row(r).array();
            T mx = row.maxCoeff();
            Eigen::Array<T, 1, Eigen::Dynamic> e = (row - mx).exp();
            y.row(r) = (e / e.sum()).matrix();
        }
        Var out = push(std::move(y), requires_grad(a));
        if (needs(out))
            set_back(out, [this, a, out] {
                const Mat<T>&g = grad(out), &y = val(out);
                Mat<T>& ga = grad(a);
                for (Eigen::Index r = 0; r < g.rows(); ++r) {
                    T dot = g.row(r).cwiseProduct(y.row(r)).sum();
                    ga.row(r).array() += y.row(r).array() * (g.row(r).array() - dot);
                }
            });
        return out;
    }

    // ---- reductions ----------------------------------------------------------

    Var sum_all(Var a) {
        Mat<T> y(1, 1);
        y(0, 0) = val(a).sum();
        Var out = push(std::move(y), requires_grad(a));
        if (needs(out))
            set_back(out, [this, a, out] { grad(a).array() += grad(out)(0, 0); });
        return out;
    }

    Var mean_all(Var a) {
        const T inv_n = T(1) / static_cast<T>(val(a).size());
        Mat<T> y(1, 1);
        y(0, 0) = val(a).sum() * inv_n;
        Var out = push(std::move(y), requires_grad(a));
        if (needs(out))
            set_back(out, [this, a, out, inv_n] { grad(a).array() += grad(out)(0, 0) * inv_n; });
        return out;
    }

    // column-wise mean over rows -> 1 x c
    Var mean_rows(Var a) {
        const Mat<T>& A = val(a);
        const T inv_n = T(1) / static_cast<T>(A.rows());
        Mat<T> y = A.colwise().sum() * inv_n;
        Var out = push(std::move(y), requires_grad(a));
        if (needs(out))
            set_back(out, [this, a, out, inv_n] {
                grad(a).array().rowwise() += grad(out).row(0).array() * inv_n;
            });
        return out;
    }

    // cosine similarity of two 1 x c vectors; defined as 0 when either norm
    // vanishes (zero gradient in that case)
    Var cosine_vec(Var a, Var b) {
        const Mat<T>&A = val(a), &B = val(b);
        require(A.rows() == 1 && B.rows() == 1 && A.cols() == B.cols(),
                "cosine_vec: expected matching row vectors");
        T na = A.row(0).norm(), nb = B.row(0).norm();
        const T tiny = std::numeric_limits<T>::min();
        bool degenerate = na <= tiny || nb <= tiny;
        T c = degenerate ? T(0) : A.row(0).dot(B.row(0)) / (na * nb);
        Mat<T> y(1, 1);
        y(0, 0) = c;
        Var out = push(std::move(y), !degenerate && (requires_grad(a) || requires_grad(b)));
        if (needs(out))
            set_back(out, [this, a, b, out, na, nb, c] {
                T g = grad(out)(0, 0);
                const Mat<T>&A = val(a), &B = val(b);
                if (requires_grad(a))
                    grad(a).row(0) += g * (B.row(0) / (na * nb) - A.row(0) * (c / (na * na)));
                if (requires_grad(b))
                    grad(b).row(0) += g * (A.row(0) / (na * nb) - B.row(0) * (c / (nb * nb)));
            });
        return out;
    }

    // per-row cosine similarity between matching rows of a and b -> n x 1
    Var cosine_rows(Var a, Var b) {
        const Mat<T>&A = val(a), &B = val(b);
        require(A.rows() == B.rows() && A.cols() == B.cols(), "cosine_rows: shape mismatch");
        const T tiny = std::numeric_limits<T>::min();
        Mat<T> y(A.rows(), 1);
        for (Eigen::Index r = 0; r < A.rows(); ++r) {
            T na = A.row(r).norm(), nb = B.row(r).norm();
            y(r, 0) = (na <= tiny || nb <= tiny) ? T(0) : A.row(r).dot(B.row(r)) / (na * nb);
        }
        Var out = push(std::move(y), requires_grad(a) || requires_grad(b));
        if (needs(out))
            set_back(out, [this, a, b, out] {
                const Mat<T>&A = val(a), &B = val(b), &y = val(out), &g = grad(out);
                const T tiny = std::numeric_limits<T>::min();
                for (Eigen::Index r = 0; r < A.rows(); ++r) {
                    T na = A.row(r).norm(), nb = B.row(r).norm();
                    if (na <= tiny || nb <= tiny) continue;
                    T gr = g(r, 0), c = y(r, 0);
                    if (requires_grad(a))
                        grad(a).row(r) += gr * (B.row(r) / (na * nb) - A.row(r) * (c / (na * na)));
                    if (requires_grad(b))
                        grad(b).row(r) += gr * (A.row(r) / (na * nb) - B.row(r) * (c / (nb * nb)));
                }
            });
        return out;
    }

    // ---- fused losses ----------------------------------------------------------

    // mean squared error against a target; target may be a constant or any var
    Var mse(Var pred, Var target) {
        Var d = sub(pred, target);
        return mean_all(hadamard(d, d));
    }

    // mean cross-entropy of row-wise logits against integer labels
    Var cross_entropy(Var logits, std::vector<int> labels) {
        const Mat<T>& Z = val(logits);
        require(static_cast<Eigen::Index>(labels.size()) == Z.rows(),
                "cross_entropy: one label per row required");
        Mat<T> probs(Z.rows(), Z.cols());
        T loss = 0;
        for (Eigen::Index r = 0; r < Z.rows(); ++r) {
            require(labels[static_cast<size_t>(r)] >= 0 &&
                        labels[static_cast<size_t>(r)] < Z.cols(),
                    "cross_entropy: label out of range");
            T mx = Z.row(r).maxCoeff();
            Eigen::Array<T, 1, Eigen::Dynamic> e = (Z.row(r).array() - mx).exp();
            T lse = std::log(e.sum()) + mx;
            probs.row(r) = (e / e.sum()).matrix();
            loss += lse - Z(r, labels[static_cast<size_t>(r)]);
        }
        Mat<T> y(1, 1);
        y(0, 0) = loss / static_cast<T>(Z.rows());
        Var out = push(std::move(y), requires_grad(logits));
        if (needs(out))
            set_back(out, [this, logits, out, probs = std::move(probs), labels = std::move(labels)] {
                T g = grad(out)(0, 0) / static_cast<T>(probs.rows());
                Mat<T>& gl = grad(logits);
                gl += probs * g;
                for (Eigen::Index r = 0; r < probs.rows(); ++r)
                    gl(r, labels[static_cast<size_t>(r)]) -= g;
            });
        return out;
    }

    // mean binary cross-entropy with logits against a {0,1} target matrix
    Var bce_with_logits(Var logits, Mat<T> targets) {
        const Mat<T>& Z = val(logits);
        require(targets.rows() == Z.rows() && targets.cols() == Z.cols(),
                "bce_with_logits: target shape mismatch");
        // log(1+e^z) computed stably as max(z,0) + log1p(e^-|z|)
        T loss = 0;
        for (Eigen::Index r = 0; r < Z.rows(); ++r)
            for (Eigen::Index c = 0; c < Z.cols(); ++c) {
                T z = Z(r, c);
                loss += std::max(z, T(0)) - z * targets(r, c) + std::log1p(std::exp(-std::abs(z)));
            }
        Mat<T> y(1, 1);
        y(0, 0) = loss / static_cast<T>(Z.size());
        Var out = push(std::move(y), requires_grad(logits));
        if (needs(out))
            set_back(out, [this, logits, out, targets = std::move(targets)] {
                T g = grad(out)(0, 0) / static_cast<T>(targets.size());
                auto z = val(logits).array();
                grad(logits).array() += g * (T(1) / (T(1) + (-z).exp()) - targets.array());
            });
        return out;
    }

    // ---- backward ------------------------------------------------------------

    void backward(Var loss) {
        require(val(loss).rows() == 1 && val(loss).cols() == 1, "backward: loss must be scalar");
        require(requires_grad(loss), "backward: loss has no gradient path");
        grad(loss).setConstant(T(1));
        for (size_t i = nodes_.size(); i-- > 0;) {
            Node& n = nodes_[i];
            if (n.grad_live && n.back) n.back();
        }
    }

    // deposit parameter gradients accumulated on this tape into `sink`
    // (one matrix per param id, caller-allocated or empty); when `store` is
    // given, only leaves of that store contribute
    void collect_param_grads(std::vector<Mat<T>>& sink,
                             const ParamStore<T>* store = nullptr) const {
        for (const Node& n : nodes_) {
            if (n.param_id < 0 || !n.grad_live) continue;
            if (store && n.param_store != store) continue;
            Mat<T>& dst = sink[static_cast<size_t>(n.param_id)];
            if (dst.size() == 0)
                dst = n.grad;
            else
                dst += n.grad;
        }
    }

private:
    struct Node {
        Mat<T> value;
        const Mat<T>* ext = nullptr;
        Mat<T> grad;
        std::function<void()> back;
        bool requires_grad = false;
        bool grad_live = false;
        int param_id = -1;
        const ParamStore<T>* param_store = nullptr;
    };

    std::vector<Node> nodes_;

    Var push(Mat<T> v, bool needs_grad) {
        Node n;
        n.value = std::move(v);
        n.requires_grad = needs_grad;
        nodes_.push_back(std::move(n));
        return {static_cast<int>(nodes_.size()) - 1};
    }

    bool needs(Var v) { return nodes_[static_cast<size_t>(v.i)].requires_grad; }

    void set_back(Var v, std::function<void()> f) {
        nodes_[static_cast<size_t>(v.i)].back = std::move(f);
    }

    Mat<T>& grad(Var v) {
        Node& n = nodes_[static_cast<size_t>(v.i)];
        if (!n.grad_live) {
            const Mat<T>& x = n.ext ? *n.ext : n.value;
            n.grad = Mat<T>::Zero(x.rows(), x.cols());
            n.grad_live = true;
        }
        return n.grad;
    }
};

template <typename T>
using Var = typename Graph<T>::Var;

}  // namespace comit
