#pragma once

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "compactformer/bench.hpp"
#include "compactformer/dynsys.hpp"
#include "compactformer/koopman.hpp"
#include "compactformer/signals.hpp"

namespace cf::io {

inline std::string fmt6(double v) {
    char buf[64];
    std::snprintf(buf, sizeof(buf), "%.6f", v);
    return buf;
}

inline std::string fmtg(double v) {
    char buf[64];
    std::snprintf(buf, sizeof(buf), "%.10g", v);
    return buf;
}

/// Write-to-temp then atomic rename; a failed run never leaves a partial
/// artifact behind.
inline void atomic_write(const std::filesystem::path& path, const std::string& content) {
    const std::filesystem::path tmp = path.string() + ".tmp";
    {
        std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
        if (!out) throw std::runtime_error("cannot write " + tmp.string());
        out << content;
        if (!out) throw std::runtime_error("write failed for " + tmp.string());
    }
    std::filesystem::rename(tmp, path);
}

inline std::string read_file(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("cannot read " + path.string());
    std::ostringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

// ---- signal / trajectory CSVs ----

inline std::string series_csv(const signals::Series& s) {
    std::string out = "t,value\n";
    for (std::size_t t = 0; t < s.values.size(); ++t)
        out += std::to_string(t) + "," + fmt6(s.values[t]) + "\n";
    return out;
}

inline std::string trajectory_csv(const dynsys::Trajectory& traj) {
    const std::size_t N = traj.states.shape[0], D = traj.states.shape[1];
    std::string out = "t,x1,x2";
    if (D >= 3) out += ",x3";
    out += "\n";
    for (std::size_t t = 0; t < N; ++t) {
        out += fmt6(static_cast<double>(t) * traj.dt);
        for (std::size_t d = 0; d < D; ++d) out += "," + fmt6(traj.states.at(t, d));
        out += "\n";
    }
    return out;
}

// ---- benchmark CSVs ----

inline const char* kResultsHeader = "signal,family,variant,patch,horizon,noise,rmse,mae,epochs,seed,wall_ms";

inline std::string results_csv(const std::vector<bench::RunResult>& results) {
    std::string out = std::string(kResultsHeader) + "\n";
    for (const auto& r : results) {
        out += std::string(signals::to_string(r.signal)) + "," + models::to_string(r.family) +
               "," + models::to_string(r.variant) + "," + std::to_string(r.P) + "," +
               std::to_string(r.H) + "," + (r.noise ? "1" : "0") + "," + fmt6(r.rmse) + "," +
               fmt6(r.mae) + "," + std::to_string(r.epochs) + "," + std::to_string(r.seed) +
               "," + std::to_string(r.wall_ms) + "\n";
    }
    return out;
}

inline std::vector<std::string> split_line(const std::string& line, char sep) {
    std::vector<std::string> parts;
    std::string cur;
    for (char c : line) {
        if (c == sep) {
            parts.push_back(cur);
            cur.clear();
        } else {
            cur += c;
        }
    }
    parts.push_back(cur);
    return parts;
}

inline std::vector<bench::RunResult> parse_results_csv(const std::string& text) {
    std::vector<bench::RunResult> out;
    std::istringstream ss(text);
    std::string line;
    if (!std::getline(ss, line)) throw std::runtime_error("results csv: empty file");
    if (line != kResultsHeader)
        throw std::runtime_error("results csv: unexpected header \"" + line + "\"");
    while (std::getline(ss, line)) {
        if (line.empty()) continue;
        const auto f = split_line(line, ',');
        if (f.size() != 11)
            throw std::runtime_error("results csv: expected 11 fields, got " +
                                     std::to_string(f.size()));
        bench::RunResult r;
        r.signal = signals::signal_from_string(f[0]);
        r.family = models::family_from_string(f[1]);
        r.variant = models::variant_from_string(f[2]);
        r.P = std::stoull(f[3]);
        r.H = std::stoull(f[4]);
        r.noise = f[5] == "1";
        r.rmse = std::stod(f[6]);
        r.mae = std::stod(f[7]);
        r.epochs = std::stoull(f[8]);
        r.seed = std::stoull(f[9]);
        r.wall_ms = std::stoll(f[10]);
        r.ok = std::isfinite(r.rmse);
        out.push_back(r);
    }
    return out;
}

inline std::string aggregate_csv(const bench::GridAggregate& agg) {
    std::string out = "family,variant,patch,horizon,mean_rmse,mean_mae\n";
    for (const auto& c : agg.cells)
        out += std::string(models::to_string(c.family)) + "," + models::to_string(c.variant) +
               "," + std::to_string(c.P) + "," + std::to_string(c.H) + "," + fmt6(c.mean_rmse) +
               "," + fmt6(c.mean_mae) + "\n";
    return out;
}

inline std::string best_table_csv(const std::vector<bench::RunResult>& rows) {
    std::string out = "signal,variant,patch,horizon,rmse,mae\n";
    for (const auto& r : rows)
        out += std::string(signals::to_string(r.signal)) + "," + models::to_string(r.variant) +
               "," + std::to_string(r.P) + "," + std::to_string(r.H) + "," + fmt6(r.rmse) + "," +
               fmt6(r.mae) + "\n";
    return out;
}

// ---- koopformer CSVs ----

inline std::string koop_loss_csv(const std::vector<koop::EpochRecord>& curve) {
    std::string out = "epoch,mse,lyapunov,total,max_singular_value\n";
    for (const auto& r : curve)
        out += std::to_string(r.epoch) + "," + fmtg(r.mse) + "," + fmtg(r.lyapunov) + "," +
               fmtg(r.total) + "," + fmtg(r.max_singular_value) + "\n";
    return out;
}

inline std::string koop_spectral_csv(const std::vector<koop::EpochRecord>& curve) {
    std::string out = "epoch,max_singular_value\n";
    for (const auto& r : curve)
        out += std::to_string(r.epoch) + "," + fmtg(r.max_singular_value) + "\n";
    return out;
}

/// One row per held-out window: predictions then truths, column per
/// (state dimension, horizon step).
inline std::string koop_forecast_csv(const Tensor& pred, const Tensor& truth) {
    const std::size_t N = pred.shape[0], H = pred.shape[1], D = pred.shape[2];
    std::string out = "window";
    for (const char* kind : {"pred", "true"})
        for (std::size_t d = 0; d < D; ++d)
            for (std::size_t h = 0; h < H; ++h)
                out += "," + std::string(kind) + "_x" + std::to_string(d + 1) + "_h" +
                       std::to_string(h + 1);
    out += "\n";
    for (std::size_t i = 0; i < N; ++i) {
        out += std::to_string(i);
        for (const Tensor* src : {&pred, &truth})
            for (std::size_t d = 0; d < D; ++d)
                for (std::size_t h = 0; h < H; ++h) out += "," + fmt6(src->at(i, h, d));
        out += "\n";
    }
    return out;
}

}  // namespace cf::io
