#pragma once

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <limits>
#include <map>
#include <memory>
#include <stdexcept>
#include <string>
#include <thread>
#include <tuple>
#include <vector>

#include "compactformer/models.hpp"
#include "compactformer/optim.hpp"
#include "compactformer/rng.hpp"
#include "compactformer/signals.hpp"
#include "compactformer/tape.hpp"

namespace cf::bench {

struct TrainTestSplit {
    Tensor x_train, y_train;
    Tensor x_test, y_test;
};

/// Chronological split over windows: first fraction trains, the rest tests.
inline TrainTestSplit split_dataset(const signals::SeriesDataset& ds, double fraction) {
    const std::size_t N = ds.inputs.shape[0];
    const auto n_train = static_cast<std::size_t>(static_cast<double>(N) * fraction);
    if (n_train == 0 || n_train == N)
        throw std::invalid_argument("split_dataset: empty train or test split (N=" +
                                    std::to_string(N) + ")");
    const std::size_t P = ds.inputs.shape[1], H = ds.targets.shape[1];
    TrainTestSplit s;
    s.x_train = Tensor({n_train, P});
    s.y_train = Tensor({n_train, H});
    s.x_test = Tensor({N - n_train, P});
    s.y_test = Tensor({N - n_train, H});
    std::copy_n(ds.inputs.data.begin(), n_train * P, s.x_train.data.begin());
    std::copy_n(ds.targets.data.begin(), n_train * H, s.y_train.data.begin());
    std::copy(ds.inputs.data.begin() + static_cast<std::ptrdiff_t>(n_train * P),
              ds.inputs.data.end(), s.x_test.data.begin());
    std::copy(ds.targets.data.begin() + static_cast<std::ptrdiff_t>(n_train * H),
              ds.targets.data.end(), s.y_test.data.begin());
    return s;
}

inline Tensor gather_rows(const Tensor& src, const std::vector<std::size_t>& idx) {
    const std::size_t w = src.shape[1];
    Tensor out({idx.size(), w});
    for (std::size_t i = 0; i < idx.size(); ++i)
        std::copy_n(src.data.begin() + static_cast<std::ptrdiff_t>(idx[i] * w), w,
                    out.data.begin() + static_cast<std::ptrdiff_t>(i * w));
    return out;
}

/// One epoch is a full pass over the training windows in seeded-shuffled
/// mini-batches. Returns the per-epoch mean training loss.
inline std::vector<double> train(models::ModelInstance& m, const Tensor& x_train,
                                 const Tensor& y_train, std::size_t epochs, double lr,
                                 std::size_t batch_size, std::uint64_t shuffle_seed) {
    const std::size_t N = x_train.shape[0];
    if (N == 0) throw std::invalid_argument("train: empty training split");
    if (batch_size == 0) throw std::invalid_argument("train: batch_size must be >= 1");
    Rng rng(shuffle_seed);
    std::vector<std::size_t> order(N);
    for (std::size_t i = 0; i < N; ++i) order[i] = i;

    std::unique_ptr<Adam> opt;
    std::vector<double> curve;
    curve.reserve(epochs);
    Tape tape;
    for (std::size_t e = 0; e < epochs; ++e) {
        for (std::size_t i = N; i > 1; --i) {
            const auto j = static_cast<std::size_t>(
                rng.uniform_int(0, static_cast<std::int64_t>(i) - 1));
            std::swap(order[i - 1], order[j]);
        }
        double epoch_loss = 0.0;
        for (std::size_t start = 0; start < N; start += batch_size) {
            const std::size_t len = std::min(batch_size, N - start);
            const std::vector<std::size_t> idx(order.begin() + static_cast<std::ptrdiff_t>(start),
                                               order.begin() +
                                                   static_cast<std::ptrdiff_t>(start + len));
            tape.reset();
            auto fwd = models::forward(tape, m, gather_rows(x_train, idx));
            const int loss = tape.mse(fwd.y, tape.leaf(gather_rows(y_train, idx)));
            epoch_loss += tape.val(loss)[0] * static_cast<double>(len);
            tape.backward(loss);
            std::vector<Tensor> grads;
            grads.reserve(fwd.leaf_ids.size());
            for (int id : fwd.leaf_ids) grads.push_back(tape.gradient(id));
            if (!opt) opt = std::make_unique<Adam>(fwd.params, lr);
            opt->step(fwd.params, grads);
        }
        curve.push_back(epoch_loss / static_cast<double>(N));
    }
    return curve;
}

struct Metrics {
    double rmse = 0.0;
    double mae = 0.0;
};

/// RMSE/MAE over all test windows and horizon steps.
inline Metrics evaluate(models::ModelInstance& m, const Tensor& x_test, const Tensor& y_test) {
    if (x_test.shape[0] == 0) throw std::invalid_argument("evaluate: no test windows");
    const Tensor pred = models::predict(m, x_test);
    double se = 0.0, ae = 0.0;
    for (std::size_t i = 0; i < pred.size(); ++i) {
        const double e = pred[i] - y_test[i];
        se += e * e;
        ae += std::abs(e);
    }
    const auto n = static_cast<double>(pred.size());
    return {std::sqrt(se / n), ae / n};
}

struct GridSpec {
    std::vector<std::size_t> patch_lengths{4, 8, 12, 16, 20};
    std::vector<std::size_t> horizons{2, 4, 8, 12, 20};
    std::vector<signals::SignalId> sigs = signals::all_signals();
    std::vector<models::Family> families{models::Family::patchtst};
    std::vector<models::Variant> variants{models::Variant::minimal, models::Variant::standard,
                                          models::Variant::full};
    bool noise = false;
    std::size_t epochs_clean = 300;
    std::size_t epochs_noisy = 600;
    double lr = 1e-3;
    std::uint64_t seed = 0;
    double split_fraction = 0.8;
    std::size_t batch_size = 32;
    std::size_t series_length = signals::kDefaultLength;
    signals::NoiseConfig noise_cfg;
    double probsparse_c = 5.0;
    sparse::LazyMode lazy_mode = sparse::LazyMode::mean;
    std::size_t jobs = 1;
    std::size_t d_model = 8;
    std::size_t heads = 2;
    std::size_t d_ff = 32;
    std::size_t enc_layers = 2;
    std::size_t dec_layers = 1;

    std::size_t epochs() const { return noise ? epochs_noisy : epochs_clean; }
};

struct RunResult {
    signals::SignalId signal = signals::SignalId::sine;
    models::Family family = models::Family::patchtst;
    models::Variant variant = models::Variant::minimal;
    std::size_t P = 0;
    std::size_t H = 0;
    bool noise = false;
    double rmse = 0.0;
    double mae = 0.0;
    std::size_t epochs = 0;
    std::uint64_t seed = 0;
    long long wall_ms = 0;
    bool ok = true;
    std::string error;
};

inline std::size_t family_index(models::Family f) { return static_cast<std::size_t>(f); }
inline std::size_t variant_index(models::Variant v) { return static_cast<std::size_t>(v); }
inline std::size_t signal_index(signals::SignalId s) { return static_cast<std::size_t>(s); }

inline std::uint64_t cell_seed(const GridSpec& spec, models::Family f, models::Variant v,
                               signals::SignalId sig, std::size_t P, std::size_t H) {
    return hash_seed({spec.seed, family_index(f), variant_index(v), signal_index(sig), P, H,
                      spec.noise ? 1ULL : 0ULL});
}

/// The normalized series each cell trains on, generated once per signal and
/// regime; noise is not resampled per cell.
inline std::vector<double> benchmark_series(const GridSpec& spec, signals::SignalId sig) {
    signals::Series s = signals::generate(sig, spec.series_length);
    if (spec.noise) {
        signals::NoiseConfig cfg = spec.noise_cfg;
        cfg.seed = hash_seed({spec.seed, signal_index(sig), 0xA5A5ULL});
        s = signals::add_noise(s, cfg);
    }
    return signals::normalize(s).values;
}

inline RunResult run_cell(const GridSpec& spec, models::Family f, models::Variant v,
                          signals::SignalId sig, std::size_t P, std::size_t H,
                          const std::vector<double>& series) {
    RunResult r;
    r.signal = sig;
    r.family = f;
    r.variant = v;
    r.P = P;
    r.H = H;
    r.noise = spec.noise;
    r.epochs = spec.epochs();
    r.seed = cell_seed(spec, f, v, sig, P, H);
    const auto t0 = std::chrono::steady_clock::now();
    try {
        const auto ds = signals::window(series, P, H);
        const auto split = split_dataset(ds, spec.split_fraction);
        auto cfg = models::make_config(f, v, P, H);
        cfg.probsparse_c = spec.probsparse_c;
        cfg.lazy_mode = spec.lazy_mode;
        cfg.d_model = spec.d_model;
        cfg.heads = spec.heads;
        cfg.d_ff = spec.d_ff;
        cfg.enc_layers = spec.enc_layers;
        cfg.dec_layers = spec.dec_layers;
        auto model = models::build(cfg, hash_seed({r.seed, 1ULL}));
        train(model, split.x_train, split.y_train, r.epochs, spec.lr, spec.batch_size,
              hash_seed({r.seed, 2ULL}));
        const Metrics metrics = evaluate(model, split.x_test, split.y_test);
        r.rmse = metrics.rmse;
        r.mae = metrics.mae;
    } catch (const std::exception& e) {
        r.ok = false;
        r.error = e.what();
        r.rmse = std::numeric_limits<double>::quiet_NaN();
        r.mae = std::numeric_limits<double>::quiet_NaN();
    }
    r.wall_ms = std::chrono::duration_cast<std::chrono::milliseconds>(
                    std::chrono::steady_clock::now() - t0)
                    .count();
    return r;
}

/// One result per (family, variant, signal, P, H), in canonical order.
/// Cells are independent; failures are recorded and the run continues.
inline std::vector<RunResult> run_grid(const GridSpec& spec) {
    struct Cell {
        models::Family f;
        models::Variant v;
        signals::SignalId sig;
        std::size_t P, H;
        const std::vector<double>* series;
    };
    std::map<signals::SignalId, std::vector<double>> series;
    for (auto sig : spec.sigs) series.emplace(sig, benchmark_series(spec, sig));

    std::vector<Cell> cells;
    for (auto f : spec.families)
        for (auto v : spec.variants)
            for (auto sig : spec.sigs)
                for (auto P : spec.patch_lengths)
                    for (auto H : spec.horizons)
                        cells.push_back({f, v, sig, P, H, &series.at(sig)});

    std::vector<RunResult> results(cells.size());
    const std::size_t jobs = std::max<std::size_t>(1, spec.jobs);
    if (jobs == 1) {
        for (std::size_t i = 0; i < cells.size(); ++i) {
            const auto& c = cells[i];
            results[i] = run_cell(spec, c.f, c.v, c.sig, c.P, c.H, *c.series);
        }
    } else {
        std::atomic<std::size_t> next{0};
        auto worker = [&] {
            for (;;) {
                const std::size_t i = next.fetch_add(1);
                if (i >= cells.size()) return;
                const auto& c = cells[i];
                results[i] = run_cell(spec, c.f, c.v, c.sig, c.P, c.H, *c.series);
            }
        };
        std::vector<std::thread> pool;
        for (std::size_t j = 0; j < std::min(jobs, cells.size()); ++j) pool.emplace_back(worker);
        for (auto& th : pool) th.join();
    }
    return results;
}

struct AggregateCell {
    models::Family family;
    models::Variant variant;
    std::size_t P, H;
    double mean_rmse = 0.0;
    double mean_mae = 0.0;
    std::size_t count = 0;
};

struct GridAggregate {
    std::vector<AggregateCell> cells;             // canonical order
    std::vector<std::string> missing;             // failed/absent cell descriptions
};

/// Mean rmse/mae per (family, variant, P, H) over the signals present.
inline GridAggregate aggregate(const std::vector<RunResult>& results) {
    std::map<std::tuple<std::size_t, std::size_t, std::size_t, std::size_t>, AggregateCell> acc;
    GridAggregate out;
    for (const auto& r : results) {
        if (!r.ok) {
            out.missing.push_back(std::string(models::to_string(r.family)) + "/" +
                                  models::to_string(r.variant) + "/" +
                                  signals::to_string(r.signal) + " P=" + std::to_string(r.P) +
                                  " H=" + std::to_string(r.H) + ": " + r.error);
            continue;
        }
        auto key = std::make_tuple(family_index(r.family), variant_index(r.variant), r.P, r.H);
        auto& cell = acc[key];
        cell.family = r.family;
        cell.variant = r.variant;
        cell.P = r.P;
        cell.H = r.H;
        cell.mean_rmse += r.rmse;
        cell.mean_mae += r.mae;
        cell.count += 1;
    }
    for (auto& [key, cell] : acc) {
        cell.mean_rmse /= static_cast<double>(cell.count);
        cell.mean_mae /= static_cast<double>(cell.count);
        out.cells.push_back(cell);
    }
    return out;
}

/// Per signal, the (variant, P, H) minimizing RMSE within one family;
/// ties resolve to lower P, then lower H, then minimal < standard < full.
inline std::vector<RunResult> best_per_signal(const std::vector<RunResult>& results,
                                              models::Family family) {
    std::map<std::size_t, const RunResult*> best;
    for (const auto& r : results) {
        if (!r.ok || r.family != family) continue;
        auto& slot = best[signal_index(r.signal)];
        if (!slot) {
            slot = &r;
            continue;
        }
        const auto rank = [](const RunResult& x) {
            return std::make_tuple(x.rmse, x.P, x.H, variant_index(x.variant));
        };
        if (rank(r) < rank(*slot)) slot = &r;
    }
    std::vector<RunResult> out;
    out.reserve(best.size());
    for (const auto& [idx, r] : best) out.push_back(*r);
    return out;
}

}  // namespace cf::bench
