#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <memory>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "compactformer/blocks.hpp"
#include "compactformer/optim.hpp"
#include "compactformer/probsparse.hpp"
#include "compactformer/rng.hpp"
#include "compactformer/tape.hpp"
#include "compactformer/tensor.hpp"

namespace cf::koop {

struct QrFactors {
    Tensor Q;
    Tensor R;
};

/// Householder QR of a square matrix with the sign convention that R has a
/// non-negative diagonal, which makes A -> Q a well-defined smooth map.
/// Throws on numerically rank-deficient input.
inline QrFactors householder_qr(const Tensor& A) {
    if (A.rank() != 2 || A.shape[0] != A.shape[1])
        throw std::invalid_argument("householder_qr: expected a square matrix, got " +
                                    shape_str(A.shape));
    const std::size_t n = A.shape[0];
    Tensor R = A;
    Tensor Q({n, n});
    for (std::size_t i = 0; i < n; ++i) Q.at(i, i) = 1.0;
    std::vector<double> v(n);
    for (std::size_t k = 0; k + 1 < n; ++k) {
        double norm = 0.0;
        for (std::size_t i = k; i < n; ++i) norm += R.at(i, k) * R.at(i, k);
        norm = std::sqrt(norm);
        if (norm == 0.0) continue;  // column already zero below the diagonal
        const double alpha = R.at(k, k) >= 0.0 ? -norm : norm;
        double vnorm2 = 0.0;
        v[k] = R.at(k, k) - alpha;
        vnorm2 += v[k] * v[k];
        for (std::size_t i = k + 1; i < n; ++i) {
            v[i] = R.at(i, k);
            vnorm2 += v[i] * v[i];
        }
        if (vnorm2 == 0.0) continue;
        const double two_over = 2.0 / vnorm2;
        // R <- (I - 2 v v^T / v^T v) R on the trailing block
        for (std::size_t j = k; j < n; ++j) {
            double dot = 0.0;
            for (std::size_t i = k; i < n; ++i) dot += v[i] * R.at(i, j);
            dot *= two_over;
            for (std::size_t i = k; i < n; ++i) R.at(i, j) -= dot * v[i];
        }
        // Q <- Q (I - 2 v v^T / v^T v)
        for (std::size_t i = 0; i < n; ++i) {
            double dot = 0.0;
            for (std::size_t j = k; j < n; ++j) dot += Q.at(i, j) * v[j];
            dot *= two_over;
            for (std::size_t j = k; j < n; ++j) Q.at(i, j) -= dot * v[j];
        }
    }
    for (std::size_t k = 0; k < n; ++k) {
        if (std::abs(R.at(k, k)) < 1e-12)
            throw std::invalid_argument("householder_qr: numerically rank-deficient input (|R[" +
                                        std::to_string(k) + "," + std::to_string(k) + "]| < 1e-12)");
        if (R.at(k, k) < 0.0) {
            for (std::size_t i = 0; i < n; ++i) Q.at(i, k) = -Q.at(i, k);
            for (std::size_t j = 0; j < n; ++j) R.at(k, j) = -R.at(k, j);
        }
    }
    // zero the strictly-lower triangle exactly
    for (std::size_t i = 1; i < n; ++i)
        for (std::size_t j = 0; j < i; ++j) R.at(i, j) = 0.0;
    return {std::move(Q), std::move(R)};
}

/// Differentiable orthogonal factor. Adjoint of A -> Q for square full-rank
/// A with the fixed sign convention:
///   M = -dQ^T Q,  copyltu(M) = tril(M,-1) + tril(M,-1)^T + diag(M),
///   dA = (dQ + Q copyltu(M)) R^{-T}.
inline int householder_orthogonalize(Tape& t, int a) {
    auto [Q, R] = householder_qr(t.val(a));
    const std::size_t n = Q.shape[0];
    return t.push(Op::householder_q, {a, -1, -1}, Q,
                  [a, n, R = std::move(R)](Tape& t2, int self) {
                      const Tensor& dQ = t2.grad_buf(self);
                      const Tensor& Q2 = t2.val(self);
                      Tensor M({n, n});
                      for (std::size_t i = 0; i < n; ++i)
                          for (std::size_t j = 0; j < n; ++j) {
                              double acc = 0.0;
                              for (std::size_t p = 0; p < n; ++p)
                                  acc += dQ.at(p, i) * Q2.at(p, j);
                              M.at(i, j) = -acc;
                          }
                      Tensor C({n, n});
                      for (std::size_t i = 0; i < n; ++i)
                          for (std::size_t j = 0; j < n; ++j)
                              C.at(i, j) = (i > j) ? M.at(i, j) : (i < j ? M.at(j, i) : M.at(i, i));
                      Tensor Z({n, n});  // Z = dQ + Q C
                      for (std::size_t i = 0; i < n; ++i)
                          for (std::size_t j = 0; j < n; ++j) {
                              double acc = dQ.at(i, j);
                              for (std::size_t p = 0; p < n; ++p) acc += Q2.at(i, p) * C.at(p, j);
                              Z.at(i, j) = acc;
                          }
                      // dA row r solves R x = Z[r,:] (back substitution)
                      auto& ga = t2.grad_buf(a);
                      std::vector<double> x(n);
                      for (std::size_t r = 0; r < n; ++r) {
                          for (std::size_t jj = n; jj-- > 0;) {
                              double acc = Z.at(r, jj);
                              for (std::size_t p = jj + 1; p < n; ++p)
                                  acc -= R.at(jj, p) * x[p];
                              x[jj] = acc / R.at(jj, jj);
                          }
                          for (std::size_t jj = 0; jj < n; ++jj) ga.at(r, jj) += x[jj];
                      }
                  });
}

/// Raw parameter triple behind the stability-constrained operator
/// K = orth(U_raw) diag(sigmoid(S_raw) * 0.99) orth(V_raw)^T.
struct KoopmanOperator {
    Tensor U_raw;  // [n,n]
    Tensor V_raw;  // [n,n]
    Tensor S_raw;  // [n]
};

inline KoopmanOperator make_operator(std::size_t n, Rng& rng) {
    KoopmanOperator op;
    op.U_raw = Tensor({n, n});
    op.V_raw = Tensor({n, n});
    init_uniform(op.U_raw, n, rng);
    init_uniform(op.V_raw, n, rng);
    op.S_raw = Tensor({n});
    return op;
}

inline double max_singular_value(const KoopmanOperator& op) {
    double mx = 0.0;
    for (double s : op.S_raw.data) mx = std::max(mx, 1.0 / (1.0 + std::exp(-s)) * 0.99);
    return mx;
}

/// Effective matrix without a tape (tests, spectral checks).
inline Tensor koopman_matrix(const KoopmanOperator& op) {
    const Tensor U = householder_qr(op.U_raw).Q;
    const Tensor V = householder_qr(op.V_raw).Q;
    const std::size_t n = U.shape[0];
    Tensor K({n, n});
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < n; ++j) {
            double acc = 0.0;
            for (std::size_t p = 0; p < n; ++p) {
                const double s = 1.0 / (1.0 + std::exp(-op.S_raw[p])) * 0.99;
                acc += U.at(i, p) * s * V.at(j, p);
            }
            K.at(i, j) = acc;
        }
    return K;
}

/// Tape version: K = orth(U) diag(S) orth(V)^T with S = sigmoid(S_raw)*0.99.
struct KoopmanVars {
    int U_raw, V_raw, S_raw;
    int K;
};

inline KoopmanVars koopman_matrix(Tape& t, int u_raw, int v_raw, int s_raw) {
    const int qu = householder_orthogonalize(t, u_raw);
    const int qv = householder_orthogonalize(t, v_raw);
    const int s = t.scale(t.sigmoid(s_raw), 0.99);
    const int k = t.matmul_nt(t.scale_cols(qu, s), qv);
    return {u_raw, v_raw, s_raw, k};
}

/// mean over batch of ReLU(|z_next|^2 - |z_t|^2); non-negative.
inline int lyapunov_loss(Tape& t, int z_t, int z_next) {
    const int en = t.sum_last(t.mul(z_next, z_next));
    const int et = t.sum_last(t.mul(z_t, z_t));
    return t.mean_all(t.relu(t.sub(en, et)));
}

enum class Backbone { patchtst, autoformer, informer };

inline const char* to_string(Backbone b) {
    switch (b) {
        case Backbone::patchtst: return "patchtst";
        case Backbone::autoformer: return "autoformer";
        case Backbone::informer: return "informer";
    }
    return "?";
}

inline Backbone backbone_from_string(const std::string& s) {
    if (s == "patchtst") return Backbone::patchtst;
    if (s == "autoformer") return Backbone::autoformer;
    if (s == "informer") return Backbone::informer;
    throw std::invalid_argument("unknown backbone \"" + s + "\"");
}

struct KoopformerConfig {
    Backbone backbone = Backbone::patchtst;
    std::size_t P = 16;
    std::size_t H = 5;
    std::size_t d_state = 2;
    std::size_t d_model = 16;
    std::size_t heads = 2;
    std::size_t d_ff = 64;
    std::size_t enc_layers = 2;
    std::size_t d_latent = 16;
    double lambda = 0.1;
    std::size_t k_ma = 3;       // autoformer backbone decomposition
    double probsparse_c = 5.0;  // informer backbone attention
    sparse::LazyMode lazy_mode = sparse::LazyMode::mean;
};

/// Transformer encoder -> latent linear -> Koopman propagation -> linear
/// decoder to H*d_state outputs.
struct KoopformerModel {
    KoopformerConfig config;
    Tensor W_e;  // [d_state, d_model]
    Tensor pe;   // fixed [P, d_model]
    std::vector<blocks::EncoderLayerWeights> enc;
    Tensor W_lat, b_lat;      // [d_model, d_latent], [d_latent]
    Tensor W_trend, b_trend;  // autoformer backbone: [P*d_state, d_latent]
    KoopmanOperator op;
    Tensor W_dec, b_dec;  // [d_latent, H*d_state], [H*d_state]
};

inline KoopformerModel build_koopformer(const KoopformerConfig& cfg, std::uint64_t seed) {
    if (cfg.d_model % cfg.heads != 0)
        throw std::invalid_argument("KoopformerConfig: d_model must be divisible by heads");
    KoopformerModel m;
    m.config = cfg;
    Rng rng(seed);
    m.W_e = Tensor({cfg.d_state, cfg.d_model});
    init_uniform(m.W_e, cfg.d_state, rng);
    m.pe = blocks::sinusoidal_pe(cfg.P, cfg.d_model);
    for (std::size_t i = 0; i < cfg.enc_layers; ++i)
        m.enc.push_back(blocks::make_encoder_layer(cfg.d_model, cfg.d_ff, rng));
    m.W_lat = Tensor({cfg.d_model, cfg.d_latent});
    init_uniform(m.W_lat, cfg.d_model, rng);
    m.b_lat = Tensor({cfg.d_latent});
    if (cfg.backbone == Backbone::autoformer) {
        m.W_trend = Tensor({cfg.P * cfg.d_state, cfg.d_latent});
        init_uniform(m.W_trend, cfg.P * cfg.d_state, rng);
        m.b_trend = Tensor({cfg.d_latent});
    }
    m.op = make_operator(cfg.d_latent, rng);
    m.W_dec = Tensor({cfg.d_latent, cfg.H * cfg.d_state});
    init_uniform(m.W_dec, cfg.d_latent, rng);
    m.b_dec = Tensor({cfg.H * cfg.d_state});
    return m;
}

template <typename F>
void for_each_param(KoopformerModel& m, F&& f) {
    f("W_e", m.W_e);
    for (std::size_t i = 0; i < m.enc.size(); ++i) {
        auto& l = m.enc[i];
        const std::string p = "enc." + std::to_string(i) + ".";
        f(p + "Wq", l.Wq);
        f(p + "Wk", l.Wk);
        f(p + "Wv", l.Wv);
        f(p + "Wo", l.Wo);
        f(p + "gamma1", l.gamma1);
        f(p + "beta1", l.beta1);
        f(p + "W1", l.W1);
        f(p + "W2", l.W2);
        f(p + "gamma2", l.gamma2);
        f(p + "beta2", l.beta2);
    }
    f("W_lat", m.W_lat);
    f("b_lat", m.b_lat);
    if (m.config.backbone == Backbone::autoformer) {
        f("W_trend", m.W_trend);
        f("b_trend", m.b_trend);
    }
    f("U_raw", m.op.U_raw);
    f("V_raw", m.op.V_raw);
    f("S_raw", m.op.S_raw);
    f("W_dec", m.W_dec);
    f("b_dec", m.b_dec);
}

struct KoopformerForward {
    int y = -1;       // [B, H, d_state]
    int z_t = -1;     // [B, d_latent]
    int z_next = -1;  // [B, d_latent]
    std::vector<Tensor*> params;
    std::vector<int> leaf_ids;
};

namespace detail {

/// Per-dimension moving-average split of multivariate windows.
inline std::pair<Tensor, Tensor> decompose_multi(const Tensor& x, std::size_t k) {
    const std::size_t B = x.shape[0], P = x.shape[1], D = x.shape[2];
    Tensor col({B, P});
    Tensor trend(x.shape), seasonal(x.shape);
    for (std::size_t d = 0; d < D; ++d) {
        for (std::size_t b = 0; b < B; ++b)
            for (std::size_t t = 0; t < P; ++t) col.at(b, t) = x.at(b, t, d);
        auto parts = blocks::decompose(col, k);
        for (std::size_t b = 0; b < B; ++b)
            for (std::size_t t = 0; t < P; ++t) {
                trend.at(b, t, d) = parts.trend.at(b, t);
                seasonal.at(b, t, d) = parts.seasonal.at(b, t);
            }
    }
    return {std::move(trend), std::move(seasonal)};
}

}  // namespace detail

/// x: [B, P, d_state] -> forecast plus the latent pair for the stability
/// penalty.
inline KoopformerForward koopformer_forward(Tape& t, KoopformerModel& m, const Tensor& x) {
    const auto& cfg = m.config;
    if (x.rank() != 3 || x.shape[1] != cfg.P || x.shape[2] != cfg.d_state)
        throw std::invalid_argument("koopformer_forward: input " + shape_str(x.shape) +
                                    " does not match [B," + std::to_string(cfg.P) + "," +
                                    std::to_string(cfg.d_state) + "]");
    KoopformerForward fwd;
    auto bind = [&](Tensor& w) {
        const int id = t.leaf(w);
        fwd.params.push_back(&w);
        fwd.leaf_ids.push_back(id);
        return id;
    };
    const std::size_t B = x.shape[0];
    const blocks::MHAConfig mha{cfg.d_model, cfg.heads};
    blocks::SparseOpts sopts;
    sopts.lazy_mode = cfg.lazy_mode;
    const std::optional<std::size_t> enc_u =
        cfg.backbone == Backbone::informer
            ? std::optional<std::size_t>(sparse::default_u(cfg.P, cfg.P, cfg.probsparse_c))
            : std::nullopt;

    Tensor trend_flat;
    int z;
    if (cfg.backbone == Backbone::autoformer) {
        auto [trend, seasonal] = detail::decompose_multi(x, cfg.k_ma);
        trend_flat = Tensor({B, cfg.P * cfg.d_state}, std::move(trend.data));
        z = t.bmm_w(t.leaf(std::move(seasonal)), bind(m.W_e));
    } else {
        z = t.bmm_w(t.leaf(x), bind(m.W_e));
    }
    z = t.add_bcast(z, t.leaf(m.pe));
    for (auto& layer : m.enc) {
        const blocks::EncoderLayerVars vars{bind(layer.Wq),     bind(layer.Wk),
                                            bind(layer.Wv),     bind(layer.Wo),
                                            bind(layer.gamma1), bind(layer.beta1),
                                            bind(layer.W1),     bind(layer.W2),
                                            bind(layer.gamma2), bind(layer.beta2)};
        z = blocks::encoder_layer(t, z, mha, vars, enc_u, sopts);
    }
    int zt = t.add_bcast(t.matmul(t.mean_tokens(z), bind(m.W_lat)), bind(m.b_lat));
    if (cfg.backbone == Backbone::autoformer) {
        const int tr = t.add_bcast(t.matmul(t.leaf(std::move(trend_flat)), bind(m.W_trend)),
                                   bind(m.b_trend));
        zt = t.add(zt, tr);
    }
    const auto kv = koopman_matrix(t, bind(m.op.U_raw), bind(m.op.V_raw), bind(m.op.S_raw));
    const int zn = t.matmul_nt(zt, kv.K);
    const int dec = t.add_bcast(t.matmul(zn, bind(m.W_dec)), bind(m.b_dec));
    fwd.y = t.reshape(dec, {B, cfg.H, cfg.d_state});
    fwd.z_t = zt;
    fwd.z_next = zn;
    return fwd;
}

struct LossBreakdown {
    int mse = -1;
    int lyapunov = -1;
    int total = -1;
};

inline LossBreakdown koopformer_loss(Tape& t, const KoopformerForward& fwd, int target,
                                     double lambda) {
    if (lambda < 0.0) throw std::invalid_argument("koopformer_loss: lambda must be >= 0");
    LossBreakdown lb;
    lb.mse = t.mse(fwd.y, target);
    lb.lyapunov = lyapunov_loss(t, fwd.z_t, fwd.z_next);
    lb.total = t.add(lb.mse, t.scale(lb.lyapunov, lambda));
    return lb;
}

// ---- training ----

/// Multivariate windows over a [N, d_state] trajectory.
struct StateWindows {
    Tensor inputs;   // [Nw, P, d_state]
    Tensor targets;  // [Nw, H, d_state]
};

inline StateWindows window_states(const Tensor& states, std::size_t P, std::size_t H) {
    const std::size_t N = states.shape[0], D = states.shape[1];
    if (N < P + H)
        throw std::invalid_argument("window_states: trajectory length " + std::to_string(N) +
                                    " < required minimum P+H = " + std::to_string(P + H));
    const std::size_t Nw = N - P - H + 1;
    StateWindows w{Tensor({Nw, P, D}), Tensor({Nw, H, D})};
    for (std::size_t i = 0; i < Nw; ++i) {
        for (std::size_t t = 0; t < P; ++t)
            for (std::size_t d = 0; d < D; ++d) w.inputs.at(i, t, d) = states.at(i + t, d);
        for (std::size_t t = 0; t < H; ++t)
            for (std::size_t d = 0; d < D; ++d) w.targets.at(i, t, d) = states.at(i + P + t, d);
    }
    return w;
}

struct EpochRecord {
    std::size_t epoch = 0;
    double mse = 0.0;
    double lyapunov = 0.0;
    double total = 0.0;
    double max_singular_value = 0.0;
};

struct TrainResult {
    std::vector<EpochRecord> curve;  // the spectral trace rides along
    double test_rmse = 0.0;
    Tensor test_pred;     // [Nt, H, d_state]
    Tensor test_target;   // [Nt, H, d_state]
    double first_total = 0.0;
    double final_total = 0.0;
};

namespace detail {

inline Tensor gather_windows(const Tensor& src, const std::vector<std::size_t>& idx) {
    const std::size_t a = src.shape[1], b = src.shape[2];
    Tensor out({idx.size(), a, b});
    for (std::size_t i = 0; i < idx.size(); ++i)
        std::copy_n(src.data.begin() + static_cast<std::ptrdiff_t>(idx[i] * a * b), a * b,
                    out.data.begin() + static_cast<std::ptrdiff_t>(i * a * b));
    return out;
}

}  // namespace detail

/// One epoch is one Adam step on a seeded random mini-batch. The windows
/// split chronologically (first 80% train); the loss curve records the batch
/// mse/lyapunov/total plus the operator's max singular value per epoch.
inline TrainResult train_koopformer(KoopformerModel& m, const StateWindows& w,
                                    std::size_t epochs, double lr, std::size_t batch_size,
                                    std::uint64_t seed) {
    const std::size_t Nw = w.inputs.shape[0];
    const auto n_train = static_cast<std::size_t>(static_cast<double>(Nw) * 0.8);
    if (n_train == 0 || n_train == Nw)
        throw std::invalid_argument("train_koopformer: empty train or test split");
    Rng rng(seed);
    TrainResult out;
    out.curve.reserve(epochs);
    std::unique_ptr<Adam> opt;
    Tape tape;
    std::vector<std::size_t> idx(batch_size);
    for (std::size_t e = 0; e < epochs; ++e) {
        for (auto& i : idx)
            i = static_cast<std::size_t>(rng.uniform_int(0, static_cast<std::int64_t>(n_train) - 1));
        tape.reset();
        auto fwd = koopformer_forward(tape, m, detail::gather_windows(w.inputs, idx));
        const int target = tape.leaf(detail::gather_windows(w.targets, idx));
        const auto lb = koopformer_loss(tape, fwd, target, m.config.lambda);
        EpochRecord rec;
        rec.epoch = e + 1;
        rec.mse = tape.val(lb.mse)[0];
        rec.lyapunov = tape.val(lb.lyapunov)[0];
        rec.total = tape.val(lb.total)[0];
        tape.backward(lb.total);
        std::vector<Tensor> grads;
        grads.reserve(fwd.leaf_ids.size());
        for (int id : fwd.leaf_ids) grads.push_back(tape.gradient(id));
        if (!opt) opt = std::make_unique<Adam>(fwd.params, lr);
        opt->step(fwd.params, grads);
        rec.max_singular_value = max_singular_value(m.op);
        out.curve.push_back(rec);
        if (e == 0) out.first_total = rec.total;
        out.final_total = rec.total;
    }

    // held-out evaluation on the chronological tail
    std::vector<std::size_t> test_idx(Nw - n_train);
    for (std::size_t i = 0; i < test_idx.size(); ++i) test_idx[i] = n_train + i;
    Tape eval_tape;
    auto fwd = koopformer_forward(eval_tape, m, detail::gather_windows(w.inputs, test_idx));
    out.test_pred = eval_tape.val(fwd.y);
    out.test_target = detail::gather_windows(w.targets, test_idx);
    double se = 0.0;
    for (std::size_t i = 0; i < out.test_pred.size(); ++i) {
        const double err = out.test_pred[i] - out.test_target[i];
        se += err * err;
    }
    out.test_rmse = std::sqrt(se / static_cast<double>(out.test_pred.size()));
    return out;
}

}  // namespace cf::koop
