#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <deque>
#include <functional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "compactformer/tensor.hpp"

namespace cf {

/// Counts query-key dot products performed in the output phase of an
/// attention call. Monotone within a call.
struct OpCounter {
    long long dot_products = 0;
};

enum class Op : std::uint8_t {
    leaf,
    add,
    sub,
    mul,
    scale,
    relu,
    sigmoid,
    matmul,
    matmul_nt,
    bmm_w,
    add_bcast,
    softmax_rows,
    layer_norm,
    mean_tokens,
    mean_all,
    sum_last,
    mse,
    slice_last,
    concat_last,
    reshape,
    scale_cols,
    attention,
    probsparse_attention,
    householder_q,
};

/// Reverse-mode tape over whole tensors. Nodes are appended in evaluation
/// order, so every node's inputs precede it and one reverse sweep visits
/// each node exactly once. Node storage is a deque so references returned
/// by val() stay valid while the tape grows.
class Tape {
public:
    struct Node {
        Op op;
        std::array<int, 3> in{-1, -1, -1};
        Tensor val;
        std::function<void(Tape&, int)> back;  // empty for leaves
    };

    int push(Op op, std::array<int, 3> in, Tensor val, std::function<void(Tape&, int)> back) {
        nodes_.push_back(Node{op, in, std::move(val), std::move(back)});
        return static_cast<int>(nodes_.size()) - 1;
    }

    int leaf(Tensor t) { return push(Op::leaf, {-1, -1, -1}, std::move(t), {}); }

    const Tensor& val(int id) const { return nodes_[static_cast<std::size_t>(id)].val; }
    const Node& node(int id) const { return nodes_[static_cast<std::size_t>(id)]; }
    std::size_t size() const { return nodes_.size(); }

    void reset() {
        nodes_.clear();
        grads_.clear();
    }

    /// Accumulation buffer for a node, allocated zero on first touch.
    Tensor& grad_buf(int id) {
        auto& g = grads_[static_cast<std::size_t>(id)];
        if (g.data.empty()) g = Tensor::zeros(nodes_[static_cast<std::size_t>(id)].val.shape);
        return g;
    }

    /// Gradient after backward(); exact zeros for disconnected nodes.
    Tensor gradient(int id) const {
        const auto& g = grads_[static_cast<std::size_t>(id)];
        if (g.data.empty()) return Tensor::zeros(nodes_[static_cast<std::size_t>(id)].val.shape);
        return g;
    }

    void backward(int loss_id) {
        if (val(loss_id).size() != 1)
            throw std::invalid_argument("backward: loss must be scalar, got shape " +
                                        shape_str(val(loss_id).shape));
        grads_.assign(nodes_.size(), Tensor{});
        grad_buf(loss_id).data[0] = 1.0;
        for (int id = loss_id; id >= 0; --id) {
            auto& n = nodes_[static_cast<std::size_t>(id)];
            if (!n.back) continue;
            if (grads_[static_cast<std::size_t>(id)].data.empty()) continue;  // not on a path to loss
            n.back(*this, id);
        }
    }

    // ---- elementwise ----

    int add(int a, int b) {
        require_same_shape(val(a), val(b), "add");
        Tensor out = val(a);
        const auto& bv = val(b);
        for (std::size_t i = 0; i < out.size(); ++i) out[i] += bv[i];
        return push(Op::add, {a, b, -1}, std::move(out), [a, b](Tape& t, int self) {
            const auto& g = t.grad_buf(self);
            auto& ga = t.grad_buf(a);
            auto& gb = t.grad_buf(b);
            for (std::size_t i = 0; i < g.size(); ++i) {
                ga[i] += g[i];
                gb[i] += g[i];
            }
        });
    }

    int sub(int a, int b) {
        require_same_shape(val(a), val(b), "sub");
        Tensor out = val(a);
        const auto& bv = val(b);
        for (std::size_t i = 0; i < out.size(); ++i) out[i] -= bv[i];
        return push(Op::sub, {a, b, -1}, std::move(out), [a, b](Tape& t, int self) {
            const auto& g = t.grad_buf(self);
            auto& ga = t.grad_buf(a);
            auto& gb = t.grad_buf(b);
            for (std::size_t i = 0; i < g.size(); ++i) {
                ga[i] += g[i];
                gb[i] -= g[i];
            }
        });
    }

    int mul(int a, int b) {
        require_same_shape(val(a), val(b), "mul");
        Tensor out = val(a);
        const auto& bv = val(b);
        for (std::size_t i = 0; i < out.size(); ++i) out[i] *= bv[i];
        return push(Op::mul, {a, b, -1}, std::move(out), [a, b](Tape& t, int self) {
            const auto& g = t.grad_buf(self);
            const auto& av = t.val(a);
            const auto& bv2 = t.val(b);
            auto& ga = t.grad_buf(a);
            auto& gb = t.grad_buf(b);
            for (std::size_t i = 0; i < g.size(); ++i) {
                ga[i] += g[i] * bv2[i];
                gb[i] += g[i] * av[i];
            }
        });
    }

    int scale(int a, double c) {
        Tensor out = val(a);
        for (auto& x : out.data) x *= c;
        return push(Op::scale, {a, -1, -1}, std::move(out), [a, c](Tape& t, int self) {
            const auto& g = t.grad_buf(self);
            auto& ga = t.grad_buf(a);
            for (std::size_t i = 0; i < g.size(); ++i) ga[i] += c * g[i];
        });
    }

    int relu(int a) {
        Tensor out = val(a);
        for (auto& x : out.data) x = x > 0.0 ? x : 0.0;
        return push(Op::relu, {a, -1, -1}, std::move(out), [a](Tape& t, int self) {
            const auto& g = t.grad_buf(self);
            const auto& av = t.val(a);
            auto& ga = t.grad_buf(a);
            for (std::size_t i = 0; i < g.size(); ++i)
                if (av[i] > 0.0) ga[i] += g[i];
        });
    }

    int sigmoid(int a) {
        Tensor out = val(a);
        for (auto& x : out.data) x = 1.0 / (1.0 + std::exp(-x));
        return push(Op::sigmoid, {a, -1, -1}, std::move(out), [a](Tape& t, int self) {
            const auto& g = t.grad_buf(self);
            const auto& ov = t.val(self);
            auto& ga = t.grad_buf(a);
            for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * ov[i] * (1.0 - ov[i]);
        });
    }

    // ---- linear algebra ----

    /// [m,k] x [k,n] -> [m,n]
    int matmul(int a, int b) {
        const auto& A = val(a);
        const auto& B = val(b);
        if (A.rank() != 2 || B.rank() != 2 || A.shape[1] != B.shape[0])
            throw std::invalid_argument("matmul: shape mismatch " + shape_str(A.shape) + " vs " +
                                        shape_str(B.shape));
        const std::size_t m = A.shape[0], k = A.shape[1], n = B.shape[1];
        Tensor out({m, n});
        gemm(A.data.data(), B.data.data(), out.data.data(), m, k, n);
        return push(Op::matmul, {a, b, -1}, std::move(out), [a, b, m, k, n](Tape& t, int self) {
            const auto& g = t.grad_buf(self);
            const auto& A2 = t.val(a);
            const auto& B2 = t.val(b);
            // dA = g . B^T ; dB = A^T . g
            auto& ga = t.grad_buf(a);
            for (std::size_t i = 0; i < m; ++i)
                for (std::size_t j = 0; j < n; ++j) {
                    const double gij = g[i * n + j];
                    for (std::size_t p = 0; p < k; ++p) ga[i * k + p] += gij * B2[p * n + j];
                }
            auto& gb = t.grad_buf(b);
            for (std::size_t i = 0; i < m; ++i)
                for (std::size_t p = 0; p < k; ++p) {
                    const double aip = A2[i * k + p];
                    for (std::size_t j = 0; j < n; ++j) gb[p * n + j] += aip * g[i * n + j];
                }
        });
    }

    /// [m,k] x [n,k]^T -> [m,n]
    int matmul_nt(int a, int b) {
        const auto& A = val(a);
        const auto& B = val(b);
        if (A.rank() != 2 || B.rank() != 2 || A.shape[1] != B.shape[1])
            throw std::invalid_argument("matmul_nt: shape mismatch " + shape_str(A.shape) +
                                        " vs " + shape_str(B.shape));
        const std::size_t m = A.shape[0], k = A.shape[1], n = B.shape[0];
        Tensor out({m, n});
        for (std::size_t i = 0; i < m; ++i)
            for (std::size_t j = 0; j < n; ++j) {
                double acc = 0.0;
                for (std::size_t p = 0; p < k; ++p) acc += A[i * k + p] * B[j * k + p];
                out[i * n + j] = acc;
            }
        return push(Op::matmul_nt, {a, b, -1}, std::move(out), [a, b, m, k, n](Tape& t, int self) {
            const auto& g = t.grad_buf(self);
            const auto& A2 = t.val(a);
            const auto& B2 = t.val(b);
            auto& ga = t.grad_buf(a);  // dA = g . B
            for (std::size_t i = 0; i < m; ++i)
                for (std::size_t j = 0; j < n; ++j) {
                    const double gij = g[i * n + j];
                    for (std::size_t p = 0; p < k; ++p) ga[i * k + p] += gij * B2[j * k + p];
                }
            auto& gb = t.grad_buf(b);  // dB = g^T . A
            for (std::size_t i = 0; i < m; ++i)
                for (std::size_t j = 0; j < n; ++j) {
                    const double gij = g[i * n + j];
                    for (std::size_t p = 0; p < k; ++p) gb[j * k + p] += gij * A2[i * k + p];
                }
        });
    }

    /// Batched token projection: [B,L,k] x [k,n] -> [B,L,n].
    int bmm_w(int a, int w) {
        const auto& A = val(a);
        const auto& W = val(w);
        if (A.rank() != 3 || W.rank() != 2 || A.shape[2] != W.shape[0])
            throw std::invalid_argument("bmm_w: shape mismatch " + shape_str(A.shape) + " vs " +
                                        shape_str(W.shape));
        const std::size_t rows = A.shape[0] * A.shape[1], k = A.shape[2], n = W.shape[1];
        Tensor out({A.shape[0], A.shape[1], n});
        gemm(A.data.data(), W.data.data(), out.data.data(), rows, k, n);
        return push(Op::bmm_w, {a, w, -1}, std::move(out), [a, w, rows, k, n](Tape& t, int self) {
            const auto& g = t.grad_buf(self);
            const auto& A2 = t.val(a);
            const auto& W2 = t.val(w);
            auto& ga = t.grad_buf(a);
            for (std::size_t i = 0; i < rows; ++i)
                for (std::size_t j = 0; j < n; ++j) {
                    const double gij = g[i * n + j];
                    for (std::size_t p = 0; p < k; ++p) ga[i * k + p] += gij * W2[p * n + j];
                }
            auto& gw = t.grad_buf(w);
            for (std::size_t i = 0; i < rows; ++i)
                for (std::size_t p = 0; p < k; ++p) {
                    const double aip = A2[i * k + p];
                    for (std::size_t j = 0; j < n; ++j) gw[p * n + j] += aip * g[i * n + j];
                }
        });
    }

    /// a + b with b broadcast over leading axes; b.shape must be a suffix of
    /// a.shape. Backward sums over the broadcast axes.
    int add_bcast(int a, int b) {
        const auto& A = val(a);
        const auto& B = val(b);
        if (B.rank() > A.rank() ||
            !std::equal(B.shape.begin(), B.shape.end(), A.shape.end() - B.rank()))
            throw std::invalid_argument("add_bcast: " + shape_str(B.shape) +
                                        " is not a suffix of " + shape_str(A.shape));
        const std::size_t bn = B.size();
        Tensor out = A;
        for (std::size_t i = 0; i < out.size(); ++i) out[i] += B[i % bn];
        return push(Op::add_bcast, {a, b, -1}, std::move(out), [a, b, bn](Tape& t, int self) {
            const auto& g = t.grad_buf(self);
            auto& ga = t.grad_buf(a);
            auto& gb = t.grad_buf(b);
            for (std::size_t i = 0; i < g.size(); ++i) {
                ga[i] += g[i];
                gb[i % bn] += g[i];
            }
        });
    }

    // ---- reductions / normalization ----

    /// Softmax over the last axis, max-shifted per row for stability.
    int softmax_rows(int a) {
        const auto& A = val(a);
        if (A.rank() < 1) throw std::invalid_argument("softmax_rows: rank-0 input");
        const std::size_t n = A.shape.back(), rows = A.size() / n;
        Tensor out = A;
        for (std::size_t r = 0; r < rows; ++r) softmax_row(out.data.data() + r * n, n);
        return push(Op::softmax_rows, {a, -1, -1}, std::move(out), [a, rows, n](Tape& t, int self) {
            const auto& g = t.grad_buf(self);
            const auto& p = t.val(self);
            auto& ga = t.grad_buf(a);
            for (std::size_t r = 0; r < rows; ++r) {
                double dot = 0.0;
                for (std::size_t j = 0; j < n; ++j) dot += g[r * n + j] * p[r * n + j];
                for (std::size_t j = 0; j < n; ++j)
                    ga[r * n + j] += p[r * n + j] * (g[r * n + j] - dot);
            }
        });
    }

    /// Per-vector normalization over the last axis (variance epsilon 1e-5),
    /// then affine by gamma/beta.
    int layer_norm(int x, int gamma, int beta) {
        const auto& X = val(x);
        const auto& G = val(gamma);
        const auto& Bv = val(beta);
        const std::size_t d = X.shape.back();
        if (G.size() != d || Bv.size() != d)
            throw std::invalid_argument("layer_norm: gamma/beta must be length " +
                                        std::to_string(d));
        const std::size_t rows = X.size() / d;
        Tensor out(X.shape);
        std::vector<double> inv_std(rows), mean(rows);
        for (std::size_t r = 0; r < rows; ++r) {
            const double* xr = X.data.data() + r * d;
            double m = 0.0;
            for (std::size_t j = 0; j < d; ++j) m += xr[j];
            m /= static_cast<double>(d);
            double var = 0.0;
            for (std::size_t j = 0; j < d; ++j) var += (xr[j] - m) * (xr[j] - m);
            var /= static_cast<double>(d);
            const double is = 1.0 / std::sqrt(var + 1e-5);
            mean[r] = m;
            inv_std[r] = is;
            for (std::size_t j = 0; j < d; ++j) out[r * d + j] = (xr[j] - m) * is * G[j] + Bv[j];
        }
        return push(Op::layer_norm, {x, gamma, beta}, std::move(out),
                    [x, gamma, beta, rows, d, mean = std::move(mean),
                     inv_std = std::move(inv_std)](Tape& t, int self) {
                        const auto& g = t.grad_buf(self);
                        const auto& X2 = t.val(x);
                        const auto& G2 = t.val(gamma);
                        auto& gx = t.grad_buf(x);
                        auto& gg = t.grad_buf(gamma);
                        auto& gb = t.grad_buf(beta);
                        const double dn = static_cast<double>(d);
                        for (std::size_t r = 0; r < rows; ++r) {
                            const double* xr = X2.data.data() + r * d;
                            const double* gr = g.data.data() + r * d;
                            const double is = inv_std[r], m = mean[r];
                            double sum_gy = 0.0, sum_gyxh = 0.0;
                            for (std::size_t j = 0; j < d; ++j) {
                                const double xh = (xr[j] - m) * is;
                                const double gy = gr[j] * G2[j];
                                gg[j] += gr[j] * xh;
                                gb[j] += gr[j];
                                sum_gy += gy;
                                sum_gyxh += gy * xh;
                            }
                            for (std::size_t j = 0; j < d; ++j) {
                                const double xh = (xr[j] - m) * is;
                                const double gy = gr[j] * G2[j];
                                gx[r * d + j] += is * (gy - sum_gy / dn - xh * sum_gyxh / dn);
                            }
                        }
                    });
    }

    /// [B,L,d] -> [B,d], mean over tokens.
    int mean_tokens(int a) {
        const auto& A = val(a);
        if (A.rank() != 3) throw std::invalid_argument("mean_tokens: expected rank-3 input");
        const std::size_t B = A.shape[0], L = A.shape[1], d = A.shape[2];
        Tensor out({B, d});
        for (std::size_t b = 0; b < B; ++b)
            for (std::size_t l = 0; l < L; ++l)
                for (std::size_t j = 0; j < d; ++j) out[b * d + j] += A.at(b, l, j);
        const double inv = 1.0 / static_cast<double>(L);
        for (auto& x : out.data) x *= inv;
        return push(Op::mean_tokens, {a, -1, -1}, std::move(out), [a, B, L, d, inv](Tape& t, int self) {
            const auto& g = t.grad_buf(self);
            auto& ga = t.grad_buf(a);
            for (std::size_t b = 0; b < B; ++b)
                for (std::size_t l = 0; l < L; ++l)
                    for (std::size_t j = 0; j < d; ++j) ga.at(b, l, j) += g[b * d + j] * inv;
        });
    }

    int mean_all(int a) {
        const auto& A = val(a);
        double m = 0.0;
        for (double x : A.data) m += x;
        const double inv = 1.0 / static_cast<double>(A.size());
        return push(Op::mean_all, {a, -1, -1}, Tensor::scalar(m * inv), [a, inv](Tape& t, int self) {
            const double g = t.grad_buf(self)[0];
            auto& ga = t.grad_buf(a);
            for (auto& x : ga.data) x += g * inv;
        });
    }

    /// [..., n] -> [...], sum over the last axis.
    int sum_last(int a) {
        const auto& A = val(a);
        if (A.rank() < 2) throw std::invalid_argument("sum_last: need rank >= 2");
        const std::size_t n = A.shape.back(), rows = A.size() / n;
        Shape os(A.shape.begin(), A.shape.end() - 1);
        Tensor out(os);
        for (std::size_t r = 0; r < rows; ++r) {
            double s = 0.0;
            for (std::size_t j = 0; j < n; ++j) s += A[r * n + j];
            out[r] = s;
        }
        return push(Op::sum_last, {a, -1, -1}, std::move(out), [a, rows, n](Tape& t, int self) {
            const auto& g = t.grad_buf(self);
            auto& ga = t.grad_buf(a);
            for (std::size_t r = 0; r < rows; ++r)
                for (std::size_t j = 0; j < n; ++j) ga[r * n + j] += g[r];
        });
    }

    /// Mean over all elements of squared difference.
    int mse(int pred, int target) {
        require_same_shape(val(pred), val(target), "mse");
        const auto& P = val(pred);
        const auto& T = val(target);
        double acc = 0.0;
        for (std::size_t i = 0; i < P.size(); ++i) {
            const double e = P[i] - T[i];
            acc += e * e;
        }
        const double inv = 1.0 / static_cast<double>(P.size());
        return push(Op::mse, {pred, target, -1}, Tensor::scalar(acc * inv),
                    [pred, target, inv](Tape& t, int self) {
                        const double g = t.grad_buf(self)[0];
                        const auto& P2 = t.val(pred);
                        const auto& T2 = t.val(target);
                        auto& gp = t.grad_buf(pred);
                        auto& gt = t.grad_buf(target);
                        for (std::size_t i = 0; i < P2.size(); ++i) {
                            const double e = 2.0 * inv * (P2[i] - T2[i]) * g;
                            gp[i] += e;
                            gt[i] -= e;
                        }
                    });
    }

    // ---- shape plumbing ----

    int slice_last(int a, std::size_t start, std::size_t len) {
        const auto& A = val(a);
        const std::size_t n = A.shape.back();
        if (start + len > n)
            throw std::invalid_argument("slice_last: [" + std::to_string(start) + "," +
                                        std::to_string(start + len) + ") exceeds " +
                                        std::to_string(n));
        const std::size_t rows = A.size() / n;
        Shape os = A.shape;
        os.back() = len;
        Tensor out(os);
        for (std::size_t r = 0; r < rows; ++r)
            for (std::size_t j = 0; j < len; ++j) out[r * len + j] = A[r * n + start + j];
        return push(Op::slice_last, {a, -1, -1}, std::move(out),
                    [a, start, len, rows, n](Tape& t, int self) {
                        const auto& g = t.grad_buf(self);
                        auto& ga = t.grad_buf(a);
                        for (std::size_t r = 0; r < rows; ++r)
                            for (std::size_t j = 0; j < len; ++j)
                                ga[r * n + start + j] += g[r * len + j];
                    });
    }

    int concat_last(std::span<const int> parts) {
        if (parts.empty()) throw std::invalid_argument("concat_last: no inputs");
        const auto& first = val(parts[0]);
        std::size_t total = 0;
        for (int p : parts) {
            const auto& v = val(p);
            if (v.rank() != first.rank() ||
                !std::equal(v.shape.begin(), v.shape.end() - 1, first.shape.begin()))
                throw std::invalid_argument("concat_last: incompatible shapes");
            total += v.shape.back();
        }
        Shape os = first.shape;
        os.back() = total;
        const std::size_t rows = numel(os) / total;
        Tensor out(os);
        std::size_t off = 0;
        for (int p : parts) {
            const auto& v = val(p);
            const std::size_t w = v.shape.back();
            for (std::size_t r = 0; r < rows; ++r)
                for (std::size_t j = 0; j < w; ++j) out[r * total + off + j] = v[r * w + j];
            off += w;
        }
        std::vector<int> ins(parts.begin(), parts.end());
        // record first three inputs for introspection; backward uses the full list
        std::array<int, 3> rec{-1, -1, -1};
        for (std::size_t i = 0; i < std::min<std::size_t>(3, ins.size()); ++i) rec[i] = ins[i];
        return push(Op::concat_last, rec, std::move(out),
                    [ins = std::move(ins), rows, total](Tape& t, int self) {
                        const auto& g = t.grad_buf(self);
                        std::size_t off2 = 0;
                        for (int p : ins) {
                            auto& gp = t.grad_buf(p);
                            const std::size_t w = t.val(p).shape.back();
                            for (std::size_t r = 0; r < rows; ++r)
                                for (std::size_t j = 0; j < w; ++j)
                                    gp[r * w + j] += g[r * total + off2 + j];
                            off2 += w;
                        }
                    });
    }

    int reshape(int a, Shape s) {
        const auto& A = val(a);
        if (numel(s) != A.size())
            throw std::invalid_argument("reshape: " + shape_str(A.shape) + " -> " + shape_str(s) +
                                        " changes element count");
        Tensor out(std::move(s), A.data);
        return push(Op::reshape, {a, -1, -1}, std::move(out), [a](Tape& t, int self) {
            const auto& g = t.grad_buf(self);
            auto& ga = t.grad_buf(a);
            for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
        });
    }

    /// Column scaling: out[:, j] = a[:, j] * s[j].
    int scale_cols(int a, int s) {
        const auto& A = val(a);
        const auto& S = val(s);
        if (A.rank() != 2 || S.size() != A.shape[1])
            throw std::invalid_argument("scale_cols: shape mismatch " + shape_str(A.shape) +
                                        " vs " + shape_str(S.shape));
        const std::size_t m = A.shape[0], n = A.shape[1];
        Tensor out = A;
        for (std::size_t i = 0; i < m; ++i)
            for (std::size_t j = 0; j < n; ++j) out[i * n + j] *= S[j];
        return push(Op::scale_cols, {a, s, -1}, std::move(out), [a, s, m, n](Tape& t, int self) {
            const auto& g = t.grad_buf(self);
            const auto& A2 = t.val(a);
            const auto& S2 = t.val(s);
            auto& ga = t.grad_buf(a);
            auto& gs = t.grad_buf(s);
            for (std::size_t i = 0; i < m; ++i)
                for (std::size_t j = 0; j < n; ++j) {
                    ga[i * n + j] += g[i * n + j] * S2[j];
                    gs[j] += g[i * n + j] * A2[i * n + j];
                }
        });
    }

    // ---- fused attention ----

    /// One attention output row: softmax(scale * q . K^T) V. Shared by dense
    /// attention and the active rows of sparse attention so both produce
    /// bit-identical results on identical inputs.
    static void attn_row(const double* q, const double* K, const double* V, std::size_t Lk,
                         std::size_t dk, std::size_t dv, double scale, double* probs,
                         double* out, OpCounter* counter) {
        for (std::size_t j = 0; j < Lk; ++j) {
            double dot = 0.0;
            for (std::size_t p = 0; p < dk; ++p) dot += q[p] * K[j * dk + p];
            probs[j] = dot * scale;
        }
        if (counter) counter->dot_products += static_cast<long long>(Lk);
        softmax_row(probs, Lk);
        for (std::size_t p = 0; p < dv; ++p) out[p] = 0.0;
        for (std::size_t j = 0; j < Lk; ++j) {
            const double w = probs[j];
            for (std::size_t p = 0; p < dv; ++p) out[p] += w * V[j * dv + p];
        }
    }

    /// Dense single-head attention, batched: q [B,Lq,dk], k [B,Lk,dk],
    /// v [B,Lk,dv] -> [B,Lq,dv].
    int attention(int q, int k, int v, double scale, OpCounter* counter = nullptr) {
        const auto& Q = val(q);
        const auto& K = val(k);
        const auto& V = val(v);
        check_attn_shapes(Q, K, V);
        const std::size_t B = Q.shape[0], Lq = Q.shape[1], dk = Q.shape[2];
        const std::size_t Lk = K.shape[1], dv = V.shape[2];
        Tensor out({B, Lq, dv});
        Tensor probs({B, Lq, Lk});
        for (std::size_t b = 0; b < B; ++b) {
            const double* Kb = K.data.data() + b * Lk * dk;
            const double* Vb = V.data.data() + b * Lk * dv;
            for (std::size_t i = 0; i < Lq; ++i)
                attn_row(Q.data.data() + (b * Lq + i) * dk, Kb, Vb, Lk, dk, dv, scale,
                         probs.data.data() + (b * Lq + i) * Lk,
                         out.data.data() + (b * Lq + i) * dv, counter);
        }
        return push(Op::attention, {q, k, v}, std::move(out),
                    [q, k, v, scale, B, Lq, Lk, dk, dv, probs = std::move(probs)](Tape& t,
                                                                                  int self) {
                        const auto& g = t.grad_buf(self);
                        backward_softmax_attn(t, q, k, v, g, probs, scale, B, Lq, Lk, dk, dv);
                    });
    }

    static void softmax_row(double* x, std::size_t n) {
        double mx = x[0];
        for (std::size_t j = 1; j < n; ++j) mx = std::max(mx, x[j]);
        double sum = 0.0;
        for (std::size_t j = 0; j < n; ++j) {
            x[j] = std::exp(x[j] - mx);
            sum += x[j];
        }
        const double inv = 1.0 / sum;
        for (std::size_t j = 0; j < n; ++j) x[j] *= inv;
    }

    static void check_attn_shapes(const Tensor& Q, const Tensor& K, const Tensor& V) {
        if (Q.rank() != 3 || K.rank() != 3 || V.rank() != 3 || Q.shape[0] != K.shape[0] ||
            K.shape[0] != V.shape[0] || Q.shape[2] != K.shape[2] || K.shape[1] != V.shape[1])
            throw std::invalid_argument("attention: incompatible shapes " + shape_str(Q.shape) +
                                        ", " + shape_str(K.shape) + ", " + shape_str(V.shape));
    }

    /// Adjoint of out[b,i,:] = softmax(scale * q_i . K^T) V for a subset of
    /// rows (all rows here; sparse attention reuses it per selection).
    static void backward_softmax_attn(Tape& t, int q, int k, int v, const Tensor& g,
                                      const Tensor& probs, double scale, std::size_t B,
                                      std::size_t Lq, std::size_t Lk, std::size_t dk,
                                      std::size_t dv) {
        const auto& Q2 = t.val(q);
        const auto& K2 = t.val(k);
        const auto& V2 = t.val(v);
        auto& gq = t.grad_buf(q);
        auto& gk = t.grad_buf(k);
        auto& gv = t.grad_buf(v);
        std::vector<double> dp(Lk), ds(Lk);
        for (std::size_t b = 0; b < B; ++b)
            for (std::size_t i = 0; i < Lq; ++i) {
                const double* gi = g.data.data() + (b * Lq + i) * dv;
                const double* pi = probs.data.data() + (b * Lq + i) * Lk;
                const double* qi = Q2.data.data() + (b * Lq + i) * dk;
                double dot = 0.0;
                for (std::size_t j = 0; j < Lk; ++j) {
                    const double* vj = V2.data.data() + (b * Lk + j) * dv;
                    double acc = 0.0;
                    for (std::size_t p = 0; p < dv; ++p) acc += gi[p] * vj[p];
                    dp[j] = acc;
                    dot += acc * pi[j];
                    double* gvj = gv.data.data() + (b * Lk + j) * dv;
                    for (std::size_t p = 0; p < dv; ++p) gvj[p] += pi[j] * gi[p];
                }
                for (std::size_t j = 0; j < Lk; ++j) ds[j] = pi[j] * (dp[j] - dot) * scale;
                double* gqi = gq.data.data() + (b * Lq + i) * dk;
                for (std::size_t j = 0; j < Lk; ++j) {
                    const double* kj = K2.data.data() + (b * Lk + j) * dk;
                    double* gkj = gk.data.data() + (b * Lk + j) * dk;
                    for (std::size_t p = 0; p < dk; ++p) {
                        gqi[p] += ds[j] * kj[p];
                        gkj[p] += ds[j] * qi[p];
                    }
                }
            }
    }

private:
    static void gemm(const double* A, const double* B, double* C, std::size_t m, std::size_t k,
                     std::size_t n) {
        for (std::size_t i = 0; i < m; ++i) {
            double* ci = C + i * n;
            for (std::size_t j = 0; j < n; ++j) ci[j] = 0.0;
            for (std::size_t p = 0; p < k; ++p) {
                const double aip = A[i * k + p];
                const double* bp = B + p * n;
                for (std::size_t j = 0; j < n; ++j) ci[j] += aip * bp[j];
            }
        }
    }

    std::deque<Node> nodes_;
    std::vector<Tensor> grads_;
};

}  // namespace cf
