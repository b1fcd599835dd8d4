#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <limits>
#include <numeric>
#include <stdexcept>
#include <string>
#include <vector>

#include "compactformer/tape.hpp"
#include "compactformer/tensor.hpp"

namespace cf::sparse {

enum class LazyMode { mean, topk };

inline LazyMode lazy_mode_from_string(const std::string& s) {
    if (s == "mean") return LazyMode::mean;
    if (s == "topk") return LazyMode::topk;
    throw std::invalid_argument("probsparse.lazy_mode must be \"mean\" or \"topk\", got \"" + s +
                                "\"");
}

inline const char* to_string(LazyMode m) { return m == LazyMode::mean ? "mean" : "topk"; }

/// u = min(L_Q, ceil(c * ln(L_K))), clamped to at least one active query.
inline std::size_t default_u(std::size_t lq, std::size_t lk, double c) {
    const double raw = std::ceil(c * std::log(static_cast<double>(lk)));
    const auto u = static_cast<std::size_t>(std::max(1.0, raw));
    return std::min(lq, u);
}

/// M(q_i) = max_j(q_i.k_j * scale) - mean_j(q_i.k_j * scale); non-negative.
inline std::vector<double> sparsity_score(const Tensor& Q, const Tensor& K, double scale) {
    if (Q.rank() != 2 || K.rank() != 2 || Q.shape[1] != K.shape[1])
        throw std::invalid_argument("sparsity_score: shape mismatch " + shape_str(Q.shape) +
                                    " vs " + shape_str(K.shape));
    const std::size_t lq = Q.shape[0], lk = K.shape[0], d = Q.shape[1];
    std::vector<double> m(lq);
    for (std::size_t i = 0; i < lq; ++i) {
        double mx = -std::numeric_limits<double>::infinity(), sum = 0.0;
        for (std::size_t j = 0; j < lk; ++j) {
            double dot = 0.0;
            for (std::size_t p = 0; p < d; ++p) dot += Q.at(i, p) * K.at(j, p);
            dot *= scale;
            mx = std::max(mx, dot);
            sum += dot;
        }
        m[i] = std::max(0.0, mx - sum / static_cast<double>(lk));
    }
    return m;
}

/// Indices of the u largest scores, ties to the lower index, returned
/// strictly increasing.
inline std::vector<std::size_t> select_top_u(const std::vector<double>& scores, std::size_t u) {
    if (u < 1 || u > scores.size())
        throw std::invalid_argument("select_top_u: u=" + std::to_string(u) +
                                    " out of range [1," + std::to_string(scores.size()) + "]");
    std::vector<std::size_t> idx(scores.size());
    std::iota(idx.begin(), idx.end(), 0);
    std::stable_sort(idx.begin(), idx.end(),
                     [&](std::size_t a, std::size_t b) { return scores[a] > scores[b]; });
    idx.resize(u);
    std::sort(idx.begin(), idx.end());
    return idx;
}

/// ProbSparse attention, batched like Tape::attention. Active queries get
/// full softmax attention over every key (the exact dense code path). Lazy
/// queries get either the column mean of V or softmax attention restricted
/// to the u keys with the largest column-max scores. Selection is discrete;
/// gradients flow through the chosen paths only.
inline int probsparse_attention(Tape& t, int q, int k, int v, std::size_t u, LazyMode mode,
                                double scale, OpCounter* counter = nullptr) {
    const Tensor& Q = t.val(q);
    const Tensor& K = t.val(k);
    const Tensor& V = t.val(v);
    Tape::check_attn_shapes(Q, K, V);
    const std::size_t B = Q.shape[0], Lq = Q.shape[1], dk = Q.shape[2];
    const std::size_t Lk = K.shape[1], dv = V.shape[2];
    if (u < 1 || u > Lq)
        throw std::invalid_argument("probsparse_attention: u=" + std::to_string(u) +
                                    " out of range [1," + std::to_string(Lq) + "]");

    Tensor out({B, Lq, dv});
    // Saved for backward: per batch the active query set, the lazy key set,
    // and softmax rows (full width for active rows, u wide for lazy topk).
    std::vector<std::vector<std::size_t>> active(B), key_sel(B);
    Tensor active_probs({B, Lq, Lk});
    Tensor lazy_probs(mode == LazyMode::topk ? Shape{B, Lq, std::min(u, Lk)} : Shape{B, 1, 1});
    const std::size_t uk = std::min(u, Lk);
    std::vector<double> scores(Lq * Lk);

    for (std::size_t b = 0; b < B; ++b) {
        const double* Qb = Q.data.data() + b * Lq * dk;
        const double* Kb = K.data.data() + b * Lk * dk;
        const double* Vb = V.data.data() + b * Lk * dv;

        // Scoring phase: every q.k dot product, deliberately uncounted; the
        // counter instruments the attention-output phase only.
        std::vector<double> m(Lq);
        for (std::size_t i = 0; i < Lq; ++i) {
            double mx = -std::numeric_limits<double>::infinity(), sum = 0.0;
            for (std::size_t j = 0; j < Lk; ++j) {
                double dot = 0.0;
                for (std::size_t p = 0; p < dk; ++p) dot += Qb[i * dk + p] * Kb[j * dk + p];
                dot *= scale;
                scores[i * Lk + j] = dot;
                mx = std::max(mx, dot);
                sum += dot;
            }
            m[i] = std::max(0.0, mx - sum / static_cast<double>(Lk));
        }
        active[b] = select_top_u(m, u);

        std::vector<char> is_active(Lq, 0);
        for (std::size_t i : active[b]) is_active[i] = 1;

        if (mode == LazyMode::topk) {
            std::vector<double> col_max(Lk, -std::numeric_limits<double>::infinity());
            for (std::size_t i = 0; i < Lq; ++i)
                for (std::size_t j = 0; j < Lk; ++j)
                    col_max[j] = std::max(col_max[j], scores[i * Lk + j]);
            key_sel[b] = select_top_u(col_max, uk);
        }

        for (std::size_t i = 0; i < Lq; ++i) {
            double* oi = out.data.data() + (b * Lq + i) * dv;
            if (is_active[i]) {
                Tape::attn_row(Qb + i * dk, Kb, Vb, Lk, dk, dv, scale,
                               active_probs.data.data() + (b * Lq + i) * Lk, oi, counter);
            } else if (mode == LazyMode::mean) {
                for (std::size_t p = 0; p < dv; ++p) {
                    double acc = 0.0;
                    for (std::size_t j = 0; j < Lk; ++j) acc += Vb[j * dv + p];
                    oi[p] = acc / static_cast<double>(Lk);
                }
            } else {
                // restricted attention over the selected keys, recomputed so
                // the counter reflects the output-phase cost
                std::vector<double> ksub(uk * dk), vsub(uk * dv);
                for (std::size_t s = 0; s < uk; ++s) {
                    const std::size_t j = key_sel[b][s];
                    std::copy_n(Kb + j * dk, dk, ksub.data() + s * dk);
                    std::copy_n(Vb + j * dv, dv, vsub.data() + s * dv);
                }
                Tape::attn_row(Qb + i * dk, ksub.data(), vsub.data(), uk, dk, dv, scale,
                               lazy_probs.data.data() + (b * Lq + i) * uk, oi, counter);
            }
        }
    }

    return t.push(
        Op::probsparse_attention, {q, k, v}, std::move(out),
        [q, k, v, scale, mode, B, Lq, Lk, dk, dv, uk, active = std::move(active),
         key_sel = std::move(key_sel), active_probs = std::move(active_probs),
         lazy_probs = std::move(lazy_probs)](Tape& t2, int self) {
            const auto& g = t2.grad_buf(self);
            const auto& Q2 = t2.val(q);
            const auto& K2 = t2.val(k);
            const auto& V2 = t2.val(v);
            auto& gq = t2.grad_buf(q);
            auto& gk = t2.grad_buf(k);
            auto& gv = t2.grad_buf(v);
            std::vector<double> dp(Lk);
            for (std::size_t b = 0; b < B; ++b) {
                std::vector<char> is_active(Lq, 0);
                for (std::size_t i : active[b]) is_active[i] = 1;
                for (std::size_t i = 0; i < Lq; ++i) {
                    const double* gi = g.data.data() + (b * Lq + i) * dv;
                    const double* qi = Q2.data.data() + (b * Lq + i) * dk;
                    double* gqi = gq.data.data() + (b * Lq + i) * dk;
                    if (is_active[i]) {
                        const double* pi = active_probs.data.data() + (b * Lq + i) * Lk;
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
                        for (std::size_t j = 0; j < Lk; ++j) {
                            const double dsj = pi[j] * (dp[j] - dot) * scale;
                            const double* kj = K2.data.data() + (b * Lk + j) * dk;
                            double* gkj = gk.data.data() + (b * Lk + j) * dk;
                            for (std::size_t p = 0; p < dk; ++p) {
                                gqi[p] += dsj * kj[p];
                                gkj[p] += dsj * qi[p];
                            }
                        }
                    } else if (mode == LazyMode::mean) {
                        const double inv = 1.0 / static_cast<double>(Lk);
                        for (std::size_t j = 0; j < Lk; ++j) {
                            double* gvj = gv.data.data() + (b * Lk + j) * dv;
                            for (std::size_t p = 0; p < dv; ++p) gvj[p] += inv * gi[p];
                        }
                    } else {
                        const double* pi = lazy_probs.data.data() + (b * Lq + i) * uk;
                        double dot = 0.0;
                        for (std::size_t s = 0; s < uk; ++s) {
                            const std::size_t j = key_sel[b][s];
                            const double* vj = V2.data.data() + (b * Lk + j) * dv;
                            double acc = 0.0;
                            for (std::size_t p = 0; p < dv; ++p) acc += gi[p] * vj[p];
                            dp[s] = acc;
                            dot += acc * pi[s];
                            double* gvj = gv.data.data() + (b * Lk + j) * dv;
                            for (std::size_t p = 0; p < dv; ++p) gvj[p] += pi[s] * gi[p];
                        }
                        for (std::size_t s = 0; s < uk; ++s) {
                            const std::size_t j = key_sel[b][s];
                            const double dsj = pi[s] * (dp[s] - dot) * scale;
                            const double* kj = K2.data.data() + (b * Lk + j) * dk;
                            double* gkj = gk.data.data() + (b * Lk + j) * dk;
                            for (std::size_t p = 0; p < dk; ++p) {
                                gqi[p] += dsj * kj[p];
                                gkj[p] += dsj * qi[p];
                            }
                        }
                    }
                }
            }
        });
}

}  // namespace cf::sparse
