#pragma once

#include <cmath>
#include <cstddef>
#include <optional>
#include <stdexcept>
#include <vector>

#include "compactformer/probsparse.hpp"
#include "compactformer/tape.hpp"
#include "compactformer/tensor.hpp"

namespace cf::blocks {

/// Fixed table: pe[pos][2k] = sin(pos / 10000^(2k/d)),
/// pe[pos][2k+1] = cos(pos / 10000^(2k/d)).
inline Tensor sinusoidal_pe(std::size_t L, std::size_t d_model) {
    if (L < 1 || d_model % 2 != 0)
        throw std::invalid_argument("sinusoidal_pe: need L >= 1 and even d_model");
    Tensor pe({L, d_model});
    for (std::size_t pos = 0; pos < L; ++pos)
        for (std::size_t k = 0; k < d_model; k += 2) {
            const double angle = static_cast<double>(pos) /
                                 std::pow(10000.0, static_cast<double>(k) /
                                                       static_cast<double>(d_model));
            pe.at(pos, k) = std::sin(angle);
            pe.at(pos, k + 1) = std::cos(angle);
        }
    return pe;
}

/// Moving-average trend with centered window of odd size k and edge
/// replication, plus the seasonal residual. trend + seasonal == input.
struct DecompPair {
    Tensor trend;
    Tensor seasonal;
};

inline DecompPair decompose(const Tensor& x, std::size_t k) {
    if (k % 2 == 0) throw std::invalid_argument("decompose: kernel size must be odd");
    if (x.rank() != 2) throw std::invalid_argument("decompose: expected [N, P] input");
    const std::size_t N = x.shape[0], P = x.shape[1];
    const auto half = static_cast<std::int64_t>(k / 2);
    DecompPair out{Tensor({N, P}), Tensor({N, P})};
    for (std::size_t i = 0; i < N; ++i)
        for (std::size_t t = 0; t < P; ++t) {
            double acc = 0.0;
            for (std::int64_t o = -half; o <= half; ++o) {
                auto idx = std::clamp<std::int64_t>(static_cast<std::int64_t>(t) + o, 0,
                                                    static_cast<std::int64_t>(P) - 1);
                acc += x.at(i, static_cast<std::size_t>(idx));
            }
            const double tr = acc / static_cast<double>(k);
            out.trend.at(i, t) = tr;
            out.seasonal.at(i, t) = x.at(i, t) - tr;
        }
    return out;
}

struct MHAConfig {
    std::size_t d_model = 8;
    std::size_t heads = 2;

    std::size_t head_dim() const {
        if (d_model % heads != 0)
            throw std::invalid_argument("MHAConfig: d_model must be divisible by heads");
        return d_model / heads;
    }
};

/// Optional sparse-attention settings for the per-head encoder attention.
struct SparseOpts {
    double c = 5.0;
    sparse::LazyMode lazy_mode = sparse::LazyMode::mean;
    OpCounter* counter = nullptr;
};

struct EncoderLayerWeights {
    Tensor Wq, Wk, Wv, Wo;  // [d,d]
    Tensor gamma1, beta1;   // [d]
    Tensor W1;              // [d,d_ff]
    Tensor W2;              // [d_ff,d]
    Tensor gamma2, beta2;   // [d]
};

inline EncoderLayerWeights make_encoder_layer(std::size_t d, std::size_t d_ff, Rng& rng) {
    EncoderLayerWeights w;
    w.Wq = Tensor({d, d});
    w.Wk = Tensor({d, d});
    w.Wv = Tensor({d, d});
    w.Wo = Tensor({d, d});
    init_uniform(w.Wq, d, rng);
    init_uniform(w.Wk, d, rng);
    init_uniform(w.Wv, d, rng);
    init_uniform(w.Wo, d, rng);
    w.gamma1 = Tensor::filled({d}, 1.0);
    w.beta1 = Tensor({d});
    w.W1 = Tensor({d, d_ff});
    w.W2 = Tensor({d_ff, d});
    init_uniform(w.W1, d, rng);
    init_uniform(w.W2, d_ff, rng);
    w.gamma2 = Tensor::filled({d}, 1.0);
    w.beta2 = Tensor({d});
    return w;
}

/// Leaf ids of one encoder layer's weights on a tape.
struct EncoderLayerVars {
    int Wq, Wk, Wv, Wo, gamma1, beta1, W1, W2, gamma2, beta2;
};

inline EncoderLayerVars bind_encoder_layer(Tape& t, const EncoderLayerWeights& w) {
    return EncoderLayerVars{t.leaf(w.Wq),     t.leaf(w.Wk),    t.leaf(w.Wv),   t.leaf(w.Wo),
                            t.leaf(w.gamma1), t.leaf(w.beta1), t.leaf(w.W1),   t.leaf(w.W2),
                            t.leaf(w.gamma2), t.leaf(w.beta2)};
}

/// Per head i: softmax(Q_i K_i^T / sqrt(d_model/h)) V_i; heads concatenated
/// and projected by Wo. With `sparse_u` set, each head computes ProbSparse
/// attention instead of the dense softmax.
inline int multi_head_attention(Tape& t, int q_in, int k_in, int v_in, const MHAConfig& cfg,
                                int Wq, int Wk, int Wv, int Wo,
                                std::optional<std::size_t> sparse_u = std::nullopt,
                                const SparseOpts& sopts = {}) {
    const std::size_t hd = cfg.head_dim();
    const double scale = 1.0 / std::sqrt(static_cast<double>(hd));
    const int Q = t.bmm_w(q_in, Wq);
    const int K = t.bmm_w(k_in, Wk);
    const int V = t.bmm_w(v_in, Wv);
    std::vector<int> heads;
    heads.reserve(cfg.heads);
    for (std::size_t h = 0; h < cfg.heads; ++h) {
        const int qh = t.slice_last(Q, h * hd, hd);
        const int kh = t.slice_last(K, h * hd, hd);
        const int vh = t.slice_last(V, h * hd, hd);
        if (sparse_u)
            heads.push_back(sparse::probsparse_attention(t, qh, kh, vh, *sparse_u,
                                                         sopts.lazy_mode, scale, sopts.counter));
        else
            heads.push_back(t.attention(qh, kh, vh, scale, sopts.counter));
    }
    const int cat = t.concat_last(heads);
    return t.bmm_w(cat, Wo);
}

/// x.W1 -> ReLU -> .W2
inline int ffn(Tape& t, int x, int W1, int W2) { return t.bmm_w(t.relu(t.bmm_w(x, W1)), W2); }

/// x <- LayerNorm(x + MHA(x,x,x)); x <- LayerNorm(x + FFN(x))
inline int encoder_layer(Tape& t, int x, const MHAConfig& cfg, const EncoderLayerVars& w,
                         std::optional<std::size_t> sparse_u = std::nullopt,
                         const SparseOpts& sopts = {}) {
    const int att = multi_head_attention(t, x, x, x, cfg, w.Wq, w.Wk, w.Wv, w.Wo, sparse_u, sopts);
    const int x1 = t.layer_norm(t.add(x, att), w.gamma1, w.beta1);
    const int f = ffn(t, x1, w.W1, w.W2);
    return t.layer_norm(t.add(x1, f), w.gamma2, w.beta2);
}

struct DecoderLayerWeights {
    Tensor Wq_s, Wk_s, Wv_s;  // self-attention projections [d,d]
    Tensor Wq_c, Wk_c, Wv_c;  // cross-attention projections [d,d]
    Tensor gamma1, beta1, gamma2, beta2, gamma3, beta3;
    Tensor W1, W2;
};

inline DecoderLayerWeights make_decoder_layer(std::size_t d, std::size_t d_ff, Rng& rng) {
    DecoderLayerWeights w;
    for (Tensor* m : {&w.Wq_s, &w.Wk_s, &w.Wv_s, &w.Wq_c, &w.Wk_c, &w.Wv_c}) {
        *m = Tensor({d, d});
        init_uniform(*m, d, rng);
    }
    w.gamma1 = Tensor::filled({d}, 1.0);
    w.beta1 = Tensor({d});
    w.gamma2 = Tensor::filled({d}, 1.0);
    w.beta2 = Tensor({d});
    w.W1 = Tensor({d, d_ff});
    w.W2 = Tensor({d_ff, d});
    init_uniform(w.W1, d, rng);
    init_uniform(w.W2, d_ff, rng);
    w.gamma3 = Tensor::filled({d}, 1.0);
    w.beta3 = Tensor({d});
    return w;
}

struct DecoderLayerVars {
    int Wq_s, Wk_s, Wv_s, Wq_c, Wk_c, Wv_c;
    int gamma1, beta1, gamma2, beta2, gamma3, beta3;
    int W1, W2;
};

inline DecoderLayerVars bind_decoder_layer(Tape& t, const DecoderLayerWeights& w) {
    return DecoderLayerVars{t.leaf(w.Wq_s),   t.leaf(w.Wk_s),  t.leaf(w.Wv_s),
                            t.leaf(w.Wq_c),   t.leaf(w.Wk_c),  t.leaf(w.Wv_c),
                            t.leaf(w.gamma1), t.leaf(w.beta1), t.leaf(w.gamma2),
                            t.leaf(w.beta2),  t.leaf(w.gamma3), t.leaf(w.beta3),
                            t.leaf(w.W1),     t.leaf(w.W2)};
}

/// Single-head decoder block, transcribed from the forecasting procedure:
/// SelfAttn and CrossAttn are both computed from the incoming decoder state,
/// then the three residual+norm updates run in sequence. Attention scaling
/// is 1/sqrt(d_model). Self-attention optionally uses ProbSparse.
inline int decoder_layer(Tape& t, int x_dec, int h_enc, std::size_t d_model,
                         const DecoderLayerVars& w,
                         std::optional<std::size_t> sparse_u = std::nullopt,
                         const SparseOpts& sopts = {}) {
    const double scale = 1.0 / std::sqrt(static_cast<double>(d_model));
    const int sq = t.bmm_w(x_dec, w.Wq_s);
    const int sk = t.bmm_w(x_dec, w.Wk_s);
    const int sv = t.bmm_w(x_dec, w.Wv_s);
    const int self_att =
        sparse_u ? sparse::probsparse_attention(t, sq, sk, sv, *sparse_u, sopts.lazy_mode, scale,
                                                sopts.counter)
                 : t.attention(sq, sk, sv, scale, sopts.counter);
    const int cq = t.bmm_w(x_dec, w.Wq_c);
    const int ck = t.bmm_w(h_enc, w.Wk_c);
    const int cv = t.bmm_w(h_enc, w.Wv_c);
    const int cross_att = t.attention(cq, ck, cv, scale, sopts.counter);
    int z = t.layer_norm(t.add(x_dec, self_att), w.gamma1, w.beta1);
    z = t.layer_norm(t.add(z, cross_att), w.gamma2, w.beta2);
    const int f = ffn(t, z, w.W1, w.W2);
    return t.layer_norm(t.add(z, f), w.gamma3, w.beta3);
}

/// Mean over the token axis: [B,L,d] -> [B,d].
inline int avg_pool_tokens(Tape& t, int x) { return t.mean_tokens(x); }

}  // namespace cf::blocks
