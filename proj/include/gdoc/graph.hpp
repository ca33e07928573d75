#pragma once

#include <cmath>
#include <cstdint>
#include <deque>
#include <string>
#include <vector>

#include "gdoc/errors.hpp"
#include "gdoc/tensor.hpp"

namespace gdoc::ad {

// Primitive set of the reverse-mode tape. Each record stores the op kind plus
// enough arguments to replay the forward sweep; eval() is the single dispatch
// used both when a node is created and when the tape is replayed, so replay is
// bit-identical by construction.
enum class Op : uint8_t {
    Leaf,
    Add,
    Sub,
    Mul,
    Scale,        // targs: c
    MatMul,
    Transpose,
    RowSoftmax,   // targs: temperature
    RowLogSumExp,
    RowSum,
    ColMean,
    SumAll,
    LogClamped,   // targs: floor
    Gelu,
    L2NormRows,   // targs: min norm
    LayerNorm,    // parents: x, gain, bias; targs: eps
    EmbedLookup,  // parents: table; iargs: ids
    MeanRows,     // targs: per-row weights
    SliceCols,    // iargs: start, len
    SliceRows,    // iargs: start, len
    ConcatCols,
    ConcatRows,
    TakeDiag,
};

using NodeId = int;

template <typename T>
class Graph {
  public:
    struct Record {
        Op op = Op::Leaf;
        std::vector<NodeId> parents;
        std::vector<int> iargs;
        std::vector<T> targs;
        Tensor<T> out;
        std::vector<T> grad;  // same layout as out.data, allocated by backward()
        bool needs_grad = false;
    };

    // ---- graph construction -------------------------------------------------

    NodeId leaf(const Tensor<T>& t) {
        Record r;
        r.op = Op::Leaf;
        r.out = t;
        r.out.grad.clear();
        r.needs_grad = t.requires_grad;
        return push(std::move(r));
    }

    NodeId constant(Tensor<T> t) {
        t.requires_grad = false;
        return leaf(t);
    }

    NodeId scalar_constant(T v) { return constant(Tensor<T>::full(1, 1, v)); }

    NodeId add(NodeId a, NodeId b) { return elementwise(Op::Add, a, b); }
    NodeId sub(NodeId a, NodeId b) { return elementwise(Op::Sub, a, b); }
    NodeId mul(NodeId a, NodeId b) { return elementwise(Op::Mul, a, b); }

    NodeId scale(NodeId a, T c) { return push(make(Op::Scale, {a}, {}, {c})); }

    NodeId matmul(NodeId a, NodeId b) {
        const auto& ta = value(a);
        const auto& tb = value(b);
        if (ta.cols != tb.rows)
            throw ShapeError("matmul: inner dimensions disagree, " + ta.shape_str() + " x " +
                             tb.shape_str());
        return push(make(Op::MatMul, {a, b}, {}, {}));
    }

    NodeId transpose(NodeId a) { return push(make(Op::Transpose, {a}, {}, {})); }

    NodeId row_softmax(NodeId a, T temperature) {
        if (!(temperature > T(0)))
            throw NumericError("row_softmax: temperature must be positive");
        return push(make(Op::RowSoftmax, {a}, {}, {temperature}));
    }

    NodeId row_logsumexp(NodeId a) { return push(make(Op::RowLogSumExp, {a}, {}, {})); }
    NodeId row_sum(NodeId a) { return push(make(Op::RowSum, {a}, {}, {})); }
    NodeId col_mean(NodeId a) { return push(make(Op::ColMean, {a}, {}, {})); }
    NodeId sum_all(NodeId a) { return push(make(Op::SumAll, {a}, {}, {})); }

    NodeId log_clamped(NodeId a, T floor) { return push(make(Op::LogClamped, {a}, {}, {floor})); }
    NodeId gelu(NodeId a) { return push(make(Op::Gelu, {a}, {}, {})); }

    NodeId l2_normalize_rows(NodeId a, T min_norm = T(1e-12)) {
        return push(make(Op::L2NormRows, {a}, {}, {min_norm}));
    }

    NodeId layer_norm(NodeId x, NodeId gain, NodeId bias, T eps = T(1e-5)) {
        const auto& tx = value(x);
        const auto& tg = value(gain);
        const auto& tb = value(bias);
        if (tg.rows != 1 || tg.cols != tx.cols || tb.rows != 1 || tb.cols != tx.cols)
            throw ShapeError("layer_norm: gain/bias must be 1x" + std::to_string(tx.cols) +
                             ", got " + tg.shape_str() + " and " + tb.shape_str());
        return push(make(Op::LayerNorm, {x, gain, bias}, {}, {eps}));
    }

    NodeId embedding_lookup(NodeId table, const std::vector<int>& ids) {
        const auto& tt = value(table);
        for (int id : ids)
            if (id < 0 || id >= tt.rows)
                throw DataError("embedding_lookup: id " + std::to_string(id) +
                                " out of vocabulary of size " + std::to_string(tt.rows));
        return push(make(Op::EmbedLookup, {table}, ids, {}));
    }

    // Weighted mean over rows; weights are fixed (no gradient into them).
    NodeId mean_rows(NodeId a, std::vector<T> weights) {
        const auto& ta = value(a);
        if (static_cast<int>(weights.size()) != ta.rows)
            throw ShapeError("mean_rows: " + std::to_string(weights.size()) + " weights for " +
                             ta.shape_str());
        T total = T(0);
        for (T w : weights) total += w;
        if (!(total > T(0))) throw NumericError("mean_rows: weights sum to zero");
        return push(make(Op::MeanRows, {a}, {}, std::move(weights)));
    }

    NodeId mean_pool(NodeId a) {
        return mean_rows(a, std::vector<T>(static_cast<size_t>(value(a).rows), T(1)));
    }

    NodeId slice_cols(NodeId a, int start, int len) {
        check_slice(value(a).cols, start, len, "slice_cols");
        return push(make(Op::SliceCols, {a}, {start, len}, {}));
    }

    NodeId slice_rows(NodeId a, int start, int len) {
        check_slice(value(a).rows, start, len, "slice_rows");
        return push(make(Op::SliceRows, {a}, {start, len}, {}));
    }

    NodeId concat_cols(const std::vector<NodeId>& parts) {
        if (parts.empty()) throw ShapeError("concat_cols: no parts");
        return push(make(Op::ConcatCols, parts, {}, {}));
    }

    NodeId concat_rows(const std::vector<NodeId>& parts) {
        if (parts.empty()) throw ShapeError("concat_rows: no parts");
        return push(make(Op::ConcatRows, parts, {}, {}));
    }

    NodeId take_diag(NodeId a) {
        const auto& ta = value(a);
        if (ta.rows != ta.cols)
            throw ShapeError("take_diag: square matrix required, got " + ta.shape_str());
        return push(make(Op::TakeDiag, {a}, {}, {}));
    }

    // ---- access -------------------------------------------------------------

    const Tensor<T>& value(NodeId id) const { return records_[check(id)].out; }
    const std::vector<T>& grad(NodeId id) const { return records_[check(id)].grad; }
    bool needs_grad(NodeId id) const { return records_[check(id)].needs_grad; }
    size_t size() const { return records_.size(); }

    T scalar(NodeId id) const {
        const auto& t = value(id);
        if (t.numel() != 1) throw ShapeError("scalar: node is " + t.shape_str());
        return t.data[0];
    }

    // ---- reverse sweep ------------------------------------------------------

    void backward(NodeId out) {
        const auto& t = value(out);
        if (t.numel() != 1)
            throw ShapeError("backward: output must be scalar, got " + t.shape_str());
        for (auto& r : records_) {
            if (r.needs_grad)
                r.grad.assign(r.out.numel(), T(0));
            else
                r.grad.clear();
        }
        if (!records_[out].needs_grad) return;
        records_[out].grad[0] = T(1);
        for (int i = out; i >= 0; --i) {
            Record& r = records_[i];
            if (!r.needs_grad || r.op == Op::Leaf) continue;
            backprop(r);
        }
    }

    // Re-runs the forward sweep from the recorded leaves and compares every
    // node bit-for-bit with the stored values.
    bool replay_matches() const {
        for (const auto& r : records_) {
            if (r.op == Op::Leaf) continue;
            Tensor<T> again = eval(r);
            if (again.data != r.out.data) return false;
        }
        return true;
    }

  private:
    // deque: references returned by value()/grad() stay valid as the tape grows
    std::deque<Record> records_;

    NodeId check(NodeId id) const {
        if (id < 0 || id >= static_cast<NodeId>(records_.size()))
            throw ShapeError("bad node id " + std::to_string(id));
        return id;
    }

    static void check_slice(int extent, int start, int len, const char* what) {
        if (start < 0 || len <= 0 || start + len > extent)
            throw ShapeError(std::string(what) + ": range [" + std::to_string(start) + "," +
                             std::to_string(start + len) + ") out of extent " +
                             std::to_string(extent));
    }

    Record make(Op op, std::vector<NodeId> parents, std::vector<int> iargs, std::vector<T> targs) {
        Record r;
        r.op = op;
        r.parents = std::move(parents);
        r.iargs = std::move(iargs);
        r.targs = std::move(targs);
        for (NodeId p : r.parents) r.needs_grad = r.needs_grad || records_[check(p)].needs_grad;
        return r;
    }

    NodeId push(Record r) {
        if (r.op != Op::Leaf) r.out = eval(r);
        records_.push_back(std::move(r));
        return static_cast<NodeId>(records_.size()) - 1;
    }

    const Tensor<T>& p(const Record& r, size_t k) const { return records_[r.parents[k]].out; }

    // ---- forward kernels ----------------------------------------------------

    Tensor<T> eval(const Record& r) const {
        switch (r.op) {
            case Op::Leaf:
                return r.out;
            case Op::Add:
            case Op::Sub:
            case Op::Mul: {
                const auto& a = p(r, 0);
                const auto& b = p(r, 1);
                Tensor<T> out(a.rows, a.cols);
                for (size_t i = 0; i < a.data.size(); ++i) {
                    if (r.op == Op::Add) out.data[i] = a.data[i] + b.data[i];
                    if (r.op == Op::Sub) out.data[i] = a.data[i] - b.data[i];
                    if (r.op == Op::Mul) out.data[i] = a.data[i] * b.data[i];
                }
                return out;
            }
            case Op::Scale: {
                const auto& a = p(r, 0);
                Tensor<T> out(a.rows, a.cols);
                for (size_t i = 0; i < a.data.size(); ++i) out.data[i] = a.data[i] * r.targs[0];
                return out;
            }
            case Op::MatMul: {
                const auto& a = p(r, 0);
                const auto& b = p(r, 1);
                Tensor<T> out(a.rows, b.cols);
                for (int i = 0; i < a.rows; ++i) {
                    for (int k = 0; k < a.cols; ++k) {
                        T aik = a.at(i, k);
                        if (aik == T(0)) continue;
                        const T* brow = &b.data[static_cast<size_t>(k) * b.cols];
                        T* orow = &out.data[static_cast<size_t>(i) * b.cols];
                        for (int j = 0; j < b.cols; ++j) orow[j] += aik * brow[j];
                    }
                }
                return out;
            }
            case Op::Transpose: {
                const auto& a = p(r, 0);
                Tensor<T> out(a.cols, a.rows);
                for (int i = 0; i < a.rows; ++i)
                    for (int j = 0; j < a.cols; ++j) out.at(j, i) = a.at(i, j);
                return out;
            }
            case Op::RowSoftmax: {
                const auto& a = p(r, 0);
                T tau = r.targs[0];
                Tensor<T> out(a.rows, a.cols);
                for (int i = 0; i < a.rows; ++i) {
                    T mx = a.at(i, 0);
                    for (int j = 0; j < a.cols; ++j) {
                        if (!std::isfinite(static_cast<double>(a.at(i, j))))
                            throw NumericError("row_softmax: non-finite input at row " +
                                               std::to_string(i));
                        mx = std::max(mx, a.at(i, j));
                    }
                    T denom = T(0);
                    for (int j = 0; j < a.cols; ++j) {
                        T e = std::exp((a.at(i, j) - mx) / tau);
                        out.at(i, j) = e;
                        denom += e;
                    }
                    for (int j = 0; j < a.cols; ++j) out.at(i, j) /= denom;
                }
                return out;
            }
            case Op::RowLogSumExp: {
                const auto& a = p(r, 0);
                Tensor<T> out(a.rows, 1);
                for (int i = 0; i < a.rows; ++i) {
                    T mx = a.at(i, 0);
                    for (int j = 0; j < a.cols; ++j) mx = std::max(mx, a.at(i, j));
                    T s = T(0);
                    for (int j = 0; j < a.cols; ++j) s += std::exp(a.at(i, j) - mx);
                    out.at(i, 0) = mx + std::log(s);
                }
                return out;
            }
            case Op::RowSum: {
                const auto& a = p(r, 0);
                Tensor<T> out(a.rows, 1);
                for (int i = 0; i < a.rows; ++i) {
                    T s = T(0);
                    for (int j = 0; j < a.cols; ++j) s += a.at(i, j);
                    out.at(i, 0) = s;
                }
                return out;
            }
            case Op::ColMean: {
                const auto& a = p(r, 0);
                Tensor<T> out(1, a.cols);
                for (int j = 0; j < a.cols; ++j) {
                    T s = T(0);
                    for (int i = 0; i < a.rows; ++i) s += a.at(i, j);
                    out.at(0, j) = s / static_cast<T>(a.rows);
                }
                return out;
            }
            case Op::SumAll: {
                const auto& a = p(r, 0);
                T s = T(0);
                for (T v : a.data) s += v;
                return Tensor<T>::full(1, 1, s);
            }
            case Op::LogClamped: {
                const auto& a = p(r, 0);
                T floor = r.targs[0];
                Tensor<T> out(a.rows, a.cols);
                for (size_t i = 0; i < a.data.size(); ++i)
                    out.data[i] = std::log(std::max(a.data[i], floor));
                return out;
            }
            case Op::Gelu: {
                const auto& a = p(r, 0);
                Tensor<T> out(a.rows, a.cols);
                for (size_t i = 0; i < a.data.size(); ++i) {
                    T x = a.data[i];
                    out.data[i] = x * T(0.5) * (T(1) + std::erf(x * T(0.7071067811865476)));
                }
                return out;
            }
            case Op::L2NormRows: {
                const auto& a = p(r, 0);
                Tensor<T> out(a.rows, a.cols);
                for (int i = 0; i < a.rows; ++i) {
                    T nrm = row_norm(a, i);
                    if (!(nrm > r.targs[0]))
                        throw NumericError("l2_normalize: degenerate input, row " +
                                           std::to_string(i) + " has near-zero norm");
                    for (int j = 0; j < a.cols; ++j) out.at(i, j) = a.at(i, j) / nrm;
                }
                return out;
            }
            case Op::LayerNorm: {
                const auto& x = p(r, 0);
                const auto& gn = p(r, 1);
                const auto& bs = p(r, 2);
                T eps = r.targs[0];
                Tensor<T> out(x.rows, x.cols);
                for (int i = 0; i < x.rows; ++i) {
                    T mu, inv_sigma;
                    row_moments(x, i, eps, mu, inv_sigma);
                    for (int j = 0; j < x.cols; ++j)
                        out.at(i, j) = (x.at(i, j) - mu) * inv_sigma * gn.at(0, j) + bs.at(0, j);
                }
                return out;
            }
            case Op::EmbedLookup: {
                const auto& table = p(r, 0);
                Tensor<T> out(static_cast<int>(r.iargs.size()), table.cols);
                for (size_t i = 0; i < r.iargs.size(); ++i)
                    for (int j = 0; j < table.cols; ++j)
                        out.at(static_cast<int>(i), j) = table.at(r.iargs[i], j);
                return out;
            }
            case Op::MeanRows: {
                const auto& a = p(r, 0);
                T total = T(0);
                for (T w : r.targs) total += w;
                Tensor<T> out(1, a.cols);
                for (int i = 0; i < a.rows; ++i) {
                    T w = r.targs[i] / total;
                    if (w == T(0)) continue;
                    for (int j = 0; j < a.cols; ++j) out.at(0, j) += w * a.at(i, j);
                }
                return out;
            }
            case Op::SliceCols: {
                const auto& a = p(r, 0);
                Tensor<T> out(a.rows, r.iargs[1]);
                for (int i = 0; i < a.rows; ++i)
                    for (int j = 0; j < r.iargs[1]; ++j) out.at(i, j) = a.at(i, r.iargs[0] + j);
                return out;
            }
            case Op::SliceRows: {
                const auto& a = p(r, 0);
                Tensor<T> out(r.iargs[1], a.cols);
                for (int i = 0; i < r.iargs[1]; ++i)
                    for (int j = 0; j < a.cols; ++j) out.at(i, j) = a.at(r.iargs[0] + i, j);
                return out;
            }
            case Op::ConcatCols: {
                int rows = p(r, 0).rows, cols = 0;
                for (size_t k = 0; k < r.parents.size(); ++k) {
                    if (p(r, k).rows != rows)
                        throw ShapeError("concat_cols: row counts disagree");
                    cols += p(r, k).cols;
                }
                Tensor<T> out(rows, cols);
                int off = 0;
                for (size_t k = 0; k < r.parents.size(); ++k) {
                    const auto& a = p(r, k);
                    for (int i = 0; i < rows; ++i)
                        for (int j = 0; j < a.cols; ++j) out.at(i, off + j) = a.at(i, j);
                    off += a.cols;
                }
                return out;
            }
            case Op::ConcatRows: {
                int cols = p(r, 0).cols, rows = 0;
                for (size_t k = 0; k < r.parents.size(); ++k) {
                    if (p(r, k).cols != cols)
                        throw ShapeError("concat_rows: column counts disagree");
                    rows += p(r, k).rows;
                }
                Tensor<T> out(rows, cols);
                int off = 0;
                for (size_t k = 0; k < r.parents.size(); ++k) {
                    const auto& a = p(r, k);
                    for (int i = 0; i < a.rows; ++i)
                        for (int j = 0; j < cols; ++j) out.at(off + i, j) = a.at(i, j);
                    off += a.rows;
                }
                return out;
            }
            case Op::TakeDiag: {
                const auto& a = p(r, 0);
                Tensor<T> out(a.rows, 1);
                for (int i = 0; i < a.rows; ++i) out.at(i, 0) = a.at(i, i);
                return out;
            }
        }
        throw ShapeError("eval: unknown op");
    }

    // ---- backward kernels ---------------------------------------------------

    std::vector<T>* grad_buf(NodeId id) {
        Record& r = records_[id];
        return r.needs_grad ? &r.grad : nullptr;
    }

    void backprop(Record& r) {
        const std::vector<T>& g = r.grad;
        switch (r.op) {
            case Op::Leaf:
                return;
            case Op::Add:
            case Op::Sub: {
                if (auto* ga = grad_buf(r.parents[0]))
                    for (size_t i = 0; i < g.size(); ++i) (*ga)[i] += g[i];
                if (auto* gb = grad_buf(r.parents[1])) {
                    T s = (r.op == Op::Sub) ? T(-1) : T(1);
                    for (size_t i = 0; i < g.size(); ++i) (*gb)[i] += s * g[i];
                }
                return;
            }
            case Op::Mul: {
                const auto& a = p(r, 0);
                const auto& b = p(r, 1);
                if (auto* ga = grad_buf(r.parents[0]))
                    for (size_t i = 0; i < g.size(); ++i) (*ga)[i] += g[i] * b.data[i];
                if (auto* gb = grad_buf(r.parents[1]))
                    for (size_t i = 0; i < g.size(); ++i) (*gb)[i] += g[i] * a.data[i];
                return;
            }
            case Op::Scale: {
                if (auto* ga = grad_buf(r.parents[0]))
                    for (size_t i = 0; i < g.size(); ++i) (*ga)[i] += g[i] * r.targs[0];
                return;
            }
            case Op::MatMul: {
                const auto& a = p(r, 0);
                const auto& b = p(r, 1);
                // dA = G B^T ; dB = A^T G
                if (auto* ga = grad_buf(r.parents[0])) {
                    for (int i = 0; i < a.rows; ++i)
                        for (int k = 0; k < a.cols; ++k) {
                            T s = T(0);
                            const T* grow = &g[static_cast<size_t>(i) * b.cols];
                            const T* brow = &b.data[static_cast<size_t>(k) * b.cols];
                            for (int j = 0; j < b.cols; ++j) s += grow[j] * brow[j];
                            (*ga)[static_cast<size_t>(i) * a.cols + k] += s;
                        }
                }
                if (auto* gb = grad_buf(r.parents[1])) {
                    for (int i = 0; i < a.rows; ++i) {
                        const T* arow = &a.data[static_cast<size_t>(i) * a.cols];
                        const T* grow = &g[static_cast<size_t>(i) * b.cols];
                        for (int k = 0; k < a.cols; ++k) {
                            if (arow[k] == T(0)) continue;
                            T* brow = &(*gb)[static_cast<size_t>(k) * b.cols];
                            for (int j = 0; j < b.cols; ++j) brow[j] += arow[k] * grow[j];
                        }
                    }
                }
                return;
            }
            case Op::Transpose: {
                const auto& a = p(r, 0);
                if (auto* ga = grad_buf(r.parents[0]))
                    for (int i = 0; i < a.rows; ++i)
                        for (int j = 0; j < a.cols; ++j)
                            (*ga)[static_cast<size_t>(i) * a.cols + j] +=
                                g[static_cast<size_t>(j) * a.rows + i];
                return;
            }
            case Op::RowSoftmax: {
                auto* ga = grad_buf(r.parents[0]);
                if (!ga) return;
                const auto& y = r.out;
                T tau = r.targs[0];
                for (int i = 0; i < y.rows; ++i) {
                    T dot = T(0);
                    for (int j = 0; j < y.cols; ++j)
                        dot += g[static_cast<size_t>(i) * y.cols + j] * y.at(i, j);
                    for (int j = 0; j < y.cols; ++j)
                        (*ga)[static_cast<size_t>(i) * y.cols + j] +=
                            y.at(i, j) * (g[static_cast<size_t>(i) * y.cols + j] - dot) / tau;
                }
                return;
            }
            case Op::RowLogSumExp: {
                auto* ga = grad_buf(r.parents[0]);
                if (!ga) return;
                const auto& a = p(r, 0);
                for (int i = 0; i < a.rows; ++i) {
                    T lse = r.out.at(i, 0);
                    for (int j = 0; j < a.cols; ++j)
                        (*ga)[static_cast<size_t>(i) * a.cols + j] +=
                            g[i] * std::exp(a.at(i, j) - lse);
                }
                return;
            }
            case Op::RowSum: {
                auto* ga = grad_buf(r.parents[0]);
                if (!ga) return;
                const auto& a = p(r, 0);
                for (int i = 0; i < a.rows; ++i)
                    for (int j = 0; j < a.cols; ++j)
                        (*ga)[static_cast<size_t>(i) * a.cols + j] += g[i];
                return;
            }
            case Op::ColMean: {
                auto* ga = grad_buf(r.parents[0]);
                if (!ga) return;
                const auto& a = p(r, 0);
                T inv = T(1) / static_cast<T>(a.rows);
                for (int i = 0; i < a.rows; ++i)
                    for (int j = 0; j < a.cols; ++j)
                        (*ga)[static_cast<size_t>(i) * a.cols + j] += g[j] * inv;
                return;
            }
            case Op::SumAll: {
                if (auto* ga = grad_buf(r.parents[0]))
                    for (size_t i = 0; i < ga->size(); ++i) (*ga)[i] += g[0];
                return;
            }
            case Op::LogClamped: {
                auto* ga = grad_buf(r.parents[0]);
                if (!ga) return;
                const auto& a = p(r, 0);
                for (size_t i = 0; i < a.data.size(); ++i)
                    if (a.data[i] > r.targs[0]) (*ga)[i] += g[i] / a.data[i];
                return;
            }
            case Op::Gelu: {
                auto* ga = grad_buf(r.parents[0]);
                if (!ga) return;
                const auto& a = p(r, 0);
                for (size_t i = 0; i < a.data.size(); ++i) {
                    T x = a.data[i];
                    T cdf = T(0.5) * (T(1) + std::erf(x * T(0.7071067811865476)));
                    T pdf = std::exp(-x * x * T(0.5)) * T(0.3989422804014327);
                    (*ga)[i] += g[i] * (cdf + x * pdf);
                }
                return;
            }
            case Op::L2NormRows: {
                auto* ga = grad_buf(r.parents[0]);
                if (!ga) return;
                const auto& a = p(r, 0);
                const auto& y = r.out;
                for (int i = 0; i < a.rows; ++i) {
                    T nrm = row_norm(a, i);
                    T dot = T(0);
                    for (int j = 0; j < a.cols; ++j)
                        dot += g[static_cast<size_t>(i) * a.cols + j] * y.at(i, j);
                    for (int j = 0; j < a.cols; ++j)
                        (*ga)[static_cast<size_t>(i) * a.cols + j] +=
                            (g[static_cast<size_t>(i) * a.cols + j] - dot * y.at(i, j)) / nrm;
                }
                return;
            }
            case Op::LayerNorm: {
                const auto& x = p(r, 0);
                const auto& gn = p(r, 1);
                T eps = r.targs[0];
                auto* gx = grad_buf(r.parents[0]);
                auto* gg = grad_buf(r.parents[1]);
                auto* gb = grad_buf(r.parents[2]);
                for (int i = 0; i < x.rows; ++i) {
                    T mu, inv_sigma;
                    row_moments(x, i, eps, mu, inv_sigma);
                    T mean_dxhat = T(0), mean_dxhat_xhat = T(0);
                    std::vector<T> xhat(static_cast<size_t>(x.cols));
                    std::vector<T> dxhat(static_cast<size_t>(x.cols));
                    for (int j = 0; j < x.cols; ++j) {
                        xhat[j] = (x.at(i, j) - mu) * inv_sigma;
                        dxhat[j] = g[static_cast<size_t>(i) * x.cols + j] * gn.at(0, j);
                        mean_dxhat += dxhat[j];
                        mean_dxhat_xhat += dxhat[j] * xhat[j];
                    }
                    mean_dxhat /= static_cast<T>(x.cols);
                    mean_dxhat_xhat /= static_cast<T>(x.cols);
                    for (int j = 0; j < x.cols; ++j) {
                        if (gx)
                            (*gx)[static_cast<size_t>(i) * x.cols + j] +=
                                (dxhat[j] - mean_dxhat - xhat[j] * mean_dxhat_xhat) * inv_sigma;
                        if (gg) (*gg)[j] += g[static_cast<size_t>(i) * x.cols + j] * xhat[j];
                        if (gb) (*gb)[j] += g[static_cast<size_t>(i) * x.cols + j];
                    }
                }
                return;
            }
            case Op::EmbedLookup: {
                auto* gt = grad_buf(r.parents[0]);
                if (!gt) return;
                int cols = p(r, 0).cols;
                for (size_t i = 0; i < r.iargs.size(); ++i)
                    for (int j = 0; j < cols; ++j)
                        (*gt)[static_cast<size_t>(r.iargs[i]) * cols + j] += g[i * cols + j];
                return;
            }
            case Op::MeanRows: {
                auto* ga = grad_buf(r.parents[0]);
                if (!ga) return;
                const auto& a = p(r, 0);
                T total = T(0);
                for (T w : r.targs) total += w;
                for (int i = 0; i < a.rows; ++i) {
                    T w = r.targs[i] / total;
                    if (w == T(0)) continue;
                    for (int j = 0; j < a.cols; ++j)
                        (*ga)[static_cast<size_t>(i) * a.cols + j] += w * g[j];
                }
                return;
            }
            case Op::SliceCols: {
                auto* ga = grad_buf(r.parents[0]);
                if (!ga) return;
                const auto& a = p(r, 0);
                for (int i = 0; i < r.out.rows; ++i)
                    for (int j = 0; j < r.iargs[1]; ++j)
                        (*ga)[static_cast<size_t>(i) * a.cols + r.iargs[0] + j] +=
                            g[static_cast<size_t>(i) * r.iargs[1] + j];
                return;
            }
            case Op::SliceRows: {
                auto* ga = grad_buf(r.parents[0]);
                if (!ga) return;
                const auto& a = p(r, 0);
                for (int i = 0; i < r.iargs[1]; ++i)
                    for (int j = 0; j < a.cols; ++j)
                        (*ga)[static_cast<size_t>(r.iargs[0] + i) * a.cols + j] +=
                            g[static_cast<size_t>(i) * a.cols + j];
                return;
            }
            case Op::ConcatCols: {
                int off = 0;
                for (size_t k = 0; k < r.parents.size(); ++k) {
                    const auto& a = p(r, k);
                    if (auto* ga = grad_buf(r.parents[k]))
                        for (int i = 0; i < a.rows; ++i)
                            for (int j = 0; j < a.cols; ++j)
                                (*ga)[static_cast<size_t>(i) * a.cols + j] +=
                                    g[static_cast<size_t>(i) * r.out.cols + off + j];
                    off += a.cols;
                }
                return;
            }
            case Op::ConcatRows: {
                int off = 0;
                for (size_t k = 0; k < r.parents.size(); ++k) {
                    const auto& a = p(r, k);
                    if (auto* ga = grad_buf(r.parents[k]))
                        for (size_t i = 0; i < a.data.size(); ++i)
                            (*ga)[i] += g[static_cast<size_t>(off) * a.cols + i];
                    off += a.rows;
                }
                return;
            }
            case Op::TakeDiag: {
                auto* ga = grad_buf(r.parents[0]);
                if (!ga) return;
                const auto& a = p(r, 0);
                for (int i = 0; i < a.rows; ++i)
                    (*ga)[static_cast<size_t>(i) * a.cols + i] += g[i];
                return;
            }
        }
    }

    NodeId elementwise(Op op, NodeId a, NodeId b) {
        const auto& ta = value(a);
        const auto& tb = value(b);
        if (!ta.same_shape(tb))
            throw ShapeError("elementwise op: shape mismatch, " + ta.shape_str() + " vs " +
                             tb.shape_str());
        return push(make(op, {a, b}, {}, {}));
    }

    static T row_norm(const Tensor<T>& a, int i) {
        T s = T(0);
        for (int j = 0; j < a.cols; ++j) s += a.at(i, j) * a.at(i, j);
        return std::sqrt(s);
    }

    static void row_moments(const Tensor<T>& x, int i, T eps, T& mu, T& inv_sigma) {
        mu = T(0);
        for (int j = 0; j < x.cols; ++j) mu += x.at(i, j);
        mu /= static_cast<T>(x.cols);
        T var = T(0);
        for (int j = 0; j < x.cols; ++j) {
            T d = x.at(i, j) - mu;
            var += d * d;
        }
        var /= static_cast<T>(x.cols);
        inv_sigma = T(1) / std::sqrt(var + eps);
    }
};

// ---- composed helpers -------------------------------------------------------

// x [m×k] * W [k×n] + b [1×n]
template <typename T>
NodeId linear(Graph<T>& g, NodeId x, NodeId w, NodeId b) {
    NodeId y = g.matmul(x, w);
    const auto& ty = g.value(y);
    const auto& tb = g.value(b);
    if (tb.rows != 1 || tb.cols != ty.cols)
        throw ShapeError("linear: bias must be 1x" + std::to_string(ty.cols) + ", got " +
                         tb.shape_str());
    std::vector<NodeId> rows;
    if (ty.rows == 1) return g.add(y, b);
    rows.reserve(static_cast<size_t>(ty.rows));
    for (int i = 0; i < ty.rows; ++i) rows.push_back(b);
    return g.add(y, g.concat_rows(rows));
}

// Inner product of two 1×n rows.
template <typename T>
NodeId dot(Graph<T>& g, NodeId a, NodeId b) {
    return g.sum_all(g.mul(a, b));
}

// Mean over rows of -sum_j target_ij * log(pred_ij). Target rows must sum to 1.
template <typename T>
NodeId cross_entropy(Graph<T>& g, NodeId predicted, NodeId target, T floor = T(1e-12)) {
    const auto& tp = g.value(predicted);
    const auto& tt = g.value(target);
    if (!tp.same_shape(tt))
        throw ShapeError("cross_entropy: shape mismatch, " + tp.shape_str() + " vs " +
                         tt.shape_str());
    for (int i = 0; i < tt.rows; ++i) {
        T s = T(0);
        for (int j = 0; j < tt.cols; ++j) s += tt.at(i, j);
        if (std::abs(static_cast<double>(s) - 1.0) > 1e-6)
            throw NumericError("cross_entropy: target row " + std::to_string(i) +
                               " sums to " + std::to_string(static_cast<double>(s)));
    }
    NodeId ll = g.mul(target, g.log_clamped(predicted, floor));
    return g.scale(g.sum_all(ll), T(-1) / static_cast<T>(tp.rows));
}

}  // namespace gdoc::ad
