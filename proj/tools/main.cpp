// compactformer command-line interface: synthetic-signal generation, the
// benchmark grid, Koopman-constrained training, and dynamical-system
// simulation. All commands are deterministic for a given --seed.

#include <cstdlib>
#include <filesystem>
#include <iostream>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "compactformer/bench.hpp"
#include "compactformer/config.hpp"
#include "compactformer/dynsys.hpp"
#include "compactformer/io.hpp"
#include "compactformer/koopman.hpp"
#include "compactformer/svg.hpp"

namespace fs = std::filesystem;
using namespace cf;

namespace {

constexpr int kExitOk = 0;
constexpr int kExitUsage = 1;
constexpr int kExitPartial = 2;

std::uint64_t env_seed_or(std::uint64_t fallback) {
    if (const char* s = std::getenv("COMPACTFORMER_SEED")) return std::stoull(s);
    return fallback;
}

struct SeedOpt {
    std::optional<std::uint64_t> value;
    std::uint64_t resolve(std::uint64_t config_seed) const {
        if (value) return *value;
        return env_seed_or(config_seed);
    }
};

void add_seed_option(CLI::App* cmd, SeedOpt& seed) {
    cmd->add_option("--seed", seed.value, "RNG seed (overrides config and COMPACTFORMER_SEED)");
}

void ensure_dir(const fs::path& dir) {
    std::error_code ec;
    fs::create_directories(dir, ec);
    if (ec && !fs::is_directory(dir))
        throw std::runtime_error("cannot create output directory " + dir.string());
}

int cmd_signals_gen(const std::string& id, bool noisy, const SeedOpt& seed_opt,
                    const std::string& out_dir, std::size_t T) {
    const std::uint64_t seed = seed_opt.resolve(0);
    std::vector<signals::SignalId> ids;
    if (id == "all")
        ids = signals::all_signals();
    else
        ids.push_back(signals::signal_from_string(id));
    ensure_dir(out_dir);
    for (auto sig : ids) {
        signals::Series s = signals::generate(sig, T);
        std::string name = signals::to_string(sig);
        if (noisy) {
            signals::NoiseConfig ncfg;
            ncfg.seed = hash_seed({seed, static_cast<std::uint64_t>(sig), 0xA5A5ULL});
            s = signals::add_noise(s, ncfg);
            name += "_noisy";
        }
        s = signals::normalize(s);
        io::atomic_write(fs::path(out_dir) / (name + ".csv"), io::series_csv(s));
    }
    std::cout << "wrote " << ids.size() << " signal file(s) to " << out_dir << "\n";
    return kExitOk;
}

void write_heatmaps(const bench::GridAggregate& agg, const std::vector<std::size_t>& patches,
                    const std::vector<std::size_t>& horizons, const fs::path& out_dir,
                    bool global_scale) {
    struct Key {
        models::Family f;
        models::Variant v;
    };
    std::map<std::pair<std::size_t, std::size_t>, std::vector<std::vector<double>>> rmse, mae;
    auto idx_of = [](const std::vector<std::size_t>& xs, std::size_t x) {
        for (std::size_t i = 0; i < xs.size(); ++i)
            if (xs[i] == x) return i;
        throw std::runtime_error("aggregate cell outside the configured grid");
    };
    for (const auto& c : agg.cells) {
        auto key = std::make_pair(bench::family_index(c.family), bench::variant_index(c.variant));
        auto& mr = rmse[key];
        auto& mm = mae[key];
        if (mr.empty()) {
            mr.assign(patches.size(), std::vector<double>(horizons.size(), 0.0));
            mm.assign(patches.size(), std::vector<double>(horizons.size(), 0.0));
        }
        mr[idx_of(patches, c.P)][idx_of(horizons, c.H)] = c.mean_rmse;
        mm[idx_of(patches, c.P)][idx_of(horizons, c.H)] = c.mean_mae;
    }
    auto bounds = [&](const auto& maps) {
        double lo = 1e300, hi = -1e300;
        for (const auto& [k, m] : maps)
            for (const auto& row : m)
                for (double v : row) {
                    lo = std::min(lo, v);
                    hi = std::max(hi, v);
                }
        return std::make_pair(lo, hi);
    };
    const auto [grl, grh] = bounds(rmse);
    const auto [gml, gmh] = bounds(mae);
    for (const auto& [key, m] : rmse) {
        const auto family = static_cast<models::Family>(key.first);
        const auto variant = static_cast<models::Variant>(key.second);
        const std::string base = std::string(models::to_string(family)) + "_" +
                                 models::to_string(variant);
        auto local = bounds(std::map<std::pair<std::size_t, std::size_t>,
                                     std::vector<std::vector<double>>>{{key, m}});
        const double lo = global_scale ? grl : local.first;
        const double hi = global_scale ? grh : local.second;
        io::atomic_write(out_dir / ("heatmap_" + base + "_rmse.svg"),
                         svg::heatmap(m, patches, horizons, base + " mean RMSE", lo, hi));
        const auto& mm = mae.at(key);
        auto local_m = bounds(std::map<std::pair<std::size_t, std::size_t>,
                                       std::vector<std::vector<double>>>{{key, mm}});
        const double lom = global_scale ? gml : local_m.first;
        const double him = global_scale ? gmh : local_m.second;
        io::atomic_write(out_dir / ("heatmap_" + base + "_mae.svg"),
                         svg::heatmap(mm, patches, horizons, base + " mean MAE", lom, him));
    }
}

struct GridOverrides {
    std::vector<std::string> families, variants, sigs;
    std::vector<std::size_t> patches, horizons;
    std::optional<std::string> regime;
    std::optional<std::size_t> epochs, jobs;
};

int cmd_bench_run(const std::string& config_path, const GridOverrides& ov, const SeedOpt& seed,
                  const std::string& out_dir, bool global_scale) {
    config::RunConfig cfg;
    if (!config_path.empty()) cfg = config::load_file(config_path);
    cfg.seed = seed.resolve(cfg.seed);
    cfg.grid.seed = cfg.seed;
    if (!ov.families.empty()) {
        cfg.grid.families.clear();
        for (const auto& s : ov.families) cfg.grid.families.push_back(models::family_from_string(s));
    }
    if (!ov.variants.empty()) {
        cfg.grid.variants.clear();
        for (const auto& s : ov.variants) cfg.grid.variants.push_back(models::variant_from_string(s));
    }
    if (!ov.sigs.empty()) {
        cfg.grid.sigs.clear();
        for (const auto& s : ov.sigs) cfg.grid.sigs.push_back(signals::signal_from_string(s));
    }
    if (!ov.patches.empty()) cfg.grid.patch_lengths = ov.patches;
    if (!ov.horizons.empty()) cfg.grid.horizons = ov.horizons;
    if (ov.regime) cfg.regime = config::regime_from_string(*ov.regime);
    if (ov.epochs) {
        cfg.grid.epochs_clean = *ov.epochs;
        cfg.grid.epochs_noisy = *ov.epochs;
    }
    if (ov.jobs) cfg.grid.jobs = *ov.jobs;

    ensure_dir(out_dir);
    std::vector<bench::RunResult> results;
    auto run_regime = [&](bool noisy) {
        bench::GridSpec spec = cfg.grid;
        spec.noise = noisy;
        auto rows = bench::run_grid(spec);
        results.insert(results.end(), rows.begin(), rows.end());
    };
    if (cfg.regime == config::Regime::clean || cfg.regime == config::Regime::both)
        run_regime(false);
    if (cfg.regime == config::Regime::noisy || cfg.regime == config::Regime::both)
        run_regime(true);

    const auto agg = bench::aggregate(results);
    io::atomic_write(fs::path(out_dir) / "results.csv", io::results_csv(results));
    io::atomic_write(fs::path(out_dir) / "aggregate.csv", io::aggregate_csv(agg));
    write_heatmaps(agg, cfg.grid.patch_lengths, cfg.grid.horizons, out_dir, global_scale);

    std::size_t failures = 0;
    for (const auto& r : results)
        if (!r.ok) ++failures;
    std::cout << "grid complete: " << results.size() << " cells, " << failures << " failure(s)\n";
    for (const auto& msg : agg.missing) std::cerr << "  cell failed: " << msg << "\n";
    return failures ? kExitPartial : kExitOk;
}

int cmd_bench_aggregate(const std::string& results_path, const std::string& out_dir,
                        bool global_scale) {
    const auto results = io::parse_results_csv(io::read_file(results_path));
    const auto agg = bench::aggregate(results);
    ensure_dir(out_dir);
    io::atomic_write(fs::path(out_dir) / "aggregate.csv", io::aggregate_csv(agg));
    std::set<std::size_t> patch_set, horizon_set;
    for (const auto& c : agg.cells) {
        patch_set.insert(c.P);
        horizon_set.insert(c.H);
    }
    write_heatmaps(agg, {patch_set.begin(), patch_set.end()},
                   {horizon_set.begin(), horizon_set.end()}, out_dir, global_scale);
    std::cout << "aggregated " << results.size() << " rows into " << agg.cells.size()
              << " cells\n";
    return kExitOk;
}

int cmd_best_table(const std::string& results_path, const std::string& family,
                   const std::string& out_path) {
    const auto results = io::parse_results_csv(io::read_file(results_path));
    const auto best = bench::best_per_signal(results, models::family_from_string(family));
    const std::string csv = io::best_table_csv(best);
    if (out_path.empty())
        std::cout << csv;
    else
        io::atomic_write(out_path, csv);
    return kExitOk;
}

int cmd_koopformer_train(const std::string& config_path, const std::string& system,
                         const std::string& backbone, std::optional<std::size_t> epochs,
                         const SeedOpt& seed_opt, const std::string& out_dir) {
    config::RunConfig cfg;
    if (!config_path.empty()) cfg = config::load_file(config_path);
    if (!system.empty()) cfg.koopformer.system = system;
    if (!backbone.empty()) cfg.koopformer.backbone = koop::backbone_from_string(backbone);
    if (epochs) cfg.koopformer.epochs = *epochs;
    const std::uint64_t seed = seed_opt.resolve(cfg.seed);
    const auto& ks = cfg.koopformer;

    koop::KoopformerConfig kc;
    kc.backbone = ks.backbone;
    kc.P = ks.resolved_P();
    kc.H = ks.resolved_H();
    kc.d_state = ks.system == "lorenz" ? 3 : 2;
    kc.d_model = ks.d_model;
    kc.heads = ks.heads;
    kc.d_ff = ks.d_ff;
    kc.enc_layers = ks.enc_layers;
    kc.d_latent = ks.d_latent;
    kc.lambda = ks.lambda;

    Tensor states;
    if (ks.system == "lorenz") {
        dynsys::LorenzConfig sim;
        sim.noise_sigma = ks.resolved_noise_sigma();
        sim.seed = hash_seed({seed, 0x10ULL});
        states = dynsys::simulate(sim).states;
    } else {
        dynsys::VdpConfig sim;
        sim.noise_sigma = ks.resolved_noise_sigma();
        sim.seed = hash_seed({seed, 0x10ULL});
        states = dynsys::simulate(sim).states;
    }
    const auto windows = koop::window_states(dynsys::minmax_normalize(states), kc.P, kc.H);
    auto model = koop::build_koopformer(kc, hash_seed({seed, 0x11ULL}));
    const auto result = koop::train_koopformer(model, windows, ks.resolved_epochs(), ks.lr,
                                               ks.resolved_batch(), hash_seed({seed, 0x12ULL}));

    ensure_dir(out_dir);
    const std::string base = "koopformer_" + ks.system + "_" + koop::to_string(ks.backbone);
    io::atomic_write(fs::path(out_dir) / (base + "_loss.csv"), io::koop_loss_csv(result.curve));
    io::atomic_write(fs::path(out_dir) / (base + "_spectral.csv"),
                     io::koop_spectral_csv(result.curve));
    io::atomic_write(fs::path(out_dir) / (base + "_forecast.csv"),
                     io::koop_forecast_csv(result.test_pred, result.test_target));
    std::cout << "trained " << base << ": first_total=" << io::fmtg(result.first_total)
              << " final_total=" << io::fmtg(result.final_total)
              << " test_rmse=" << io::fmtg(result.test_rmse) << "\n";
    return kExitOk;
}

int cmd_dynsys_simulate(const std::string& system, const SeedOpt& seed_opt,
                        std::optional<double> noise_sigma, const std::string& out_path) {
    const std::uint64_t seed = seed_opt.resolve(0);
    dynsys::Trajectory traj;
    if (system == "lorenz") {
        dynsys::LorenzConfig cfg;
        cfg.seed = seed;
        if (noise_sigma) cfg.noise_sigma = *noise_sigma;
        traj = dynsys::simulate(cfg);
    } else if (system == "vdp") {
        dynsys::VdpConfig cfg;
        cfg.seed = seed;
        if (noise_sigma) cfg.noise_sigma = *noise_sigma;
        traj = dynsys::simulate(cfg);
    } else {
        throw CLI::ValidationError("--system", "must be vdp or lorenz");
    }
    const std::string path = out_path.empty() ? system + ".csv" : out_path;
    io::atomic_write(path, io::trajectory_csv(traj));
    std::cout << "wrote " << traj.states.shape[0] << " steps to " << path << "\n";
    return kExitOk;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"compactformer: transformer time-series forecasting benchmark"};
    app.require_subcommand(1);

    // signals gen
    auto* signals_cmd = app.add_subcommand("signals", "synthetic signal tools");
    signals_cmd->require_subcommand(1);
    auto* gen = signals_cmd->add_subcommand("gen", "generate benchmark signal CSVs");
    std::string gen_id = "all", gen_out = ".";
    bool gen_noisy = false;
    std::size_t gen_T = signals::kDefaultLength;
    SeedOpt gen_seed;
    gen->add_option("--id", gen_id, "signal id or 'all'");
    gen->add_flag("--noisy", gen_noisy, "apply the three-stage noise model");
    gen->add_option("--out", gen_out, "output directory");
    gen->add_option("-T,--length", gen_T, "series length");
    add_seed_option(gen, gen_seed);

    // bench run / aggregate
    auto* bench_cmd = app.add_subcommand("bench", "benchmark grid tools");
    bench_cmd->require_subcommand(1);
    auto* run = bench_cmd->add_subcommand("run", "train and evaluate the model grid");
    std::string run_config, run_out = "bench_out";
    bool run_global_scale = false;
    GridOverrides ov;
    SeedOpt run_seed;
    run->add_option("--config", run_config, "JSON run configuration")
        ->check(CLI::ExistingFile);
    run->add_option("--families", ov.families, "family filter")->delimiter(',');
    run->add_option("--variants", ov.variants, "variant filter")->delimiter(',');
    run->add_option("--signals", ov.sigs, "signal filter")->delimiter(',');
    run->add_option("--patches", ov.patches, "patch lengths")->delimiter(',');
    run->add_option("--horizons", ov.horizons, "forecast horizons")->delimiter(',');
    run->add_option("--regime", ov.regime, "clean|noisy|both");
    run->add_option("--epochs", ov.epochs, "override training epochs for all regimes");
    run->add_option("--jobs", ov.jobs, "parallel cell workers (default 1)");
    run->add_option("--out", run_out, "output directory");
    run->add_flag("--global-scale", run_global_scale,
                  "normalize heatmap color scales across variants");
    add_seed_option(run, run_seed);

    auto* agg = bench_cmd->add_subcommand("aggregate", "aggregate a results CSV");
    std::string agg_results, agg_out = "bench_out";
    bool agg_global_scale = false;
    agg->add_option("--results", agg_results, "results.csv path")
        ->required()
        ->check(CLI::ExistingFile);
    agg->add_option("--out", agg_out, "output directory");
    agg->add_flag("--global-scale", agg_global_scale,
                  "normalize heatmap color scales across variants");

    // best-table
    auto* best = app.add_subcommand("best-table", "best configuration per signal by RMSE");
    std::string best_results, best_family, best_out;
    best->add_option("--results", best_results, "results.csv path")
        ->required()
        ->check(CLI::ExistingFile);
    best->add_option("--family", best_family, "model family")->required();
    best->add_option("--out", best_out, "output CSV (stdout when omitted)");

    // koopformer train
    auto* koopf = app.add_subcommand("koopformer", "stability-constrained Koopman training");
    koopf->require_subcommand(1);
    auto* ktrain = koopf->add_subcommand("train", "train on a simulated system");
    std::string kt_config, kt_system, kt_backbone, kt_out = "koop_out";
    std::optional<std::size_t> kt_epochs;
    SeedOpt kt_seed;
    ktrain->add_option("--config", kt_config, "JSON run configuration")->check(CLI::ExistingFile);
    ktrain->add_option("--system", kt_system, "vdp|lorenz")
        ->check(CLI::IsMember({"vdp", "lorenz"}));
    ktrain->add_option("--backbone", kt_backbone, "patchtst|autoformer|informer")
        ->check(CLI::IsMember({"patchtst", "autoformer", "informer"}));
    ktrain->add_option("--epochs", kt_epochs, "override training epochs");
    ktrain->add_option("--out", kt_out, "output directory");
    add_seed_option(ktrain, kt_seed);

    // dynsys simulate
    auto* dyn = app.add_subcommand("dynsys", "dynamical system simulators");
    dyn->require_subcommand(1);
    auto* sim = dyn->add_subcommand("simulate", "simulate a noisy trajectory");
    std::string sim_system, sim_out;
    std::optional<double> sim_sigma;
    SeedOpt sim_seed;
    sim->add_option("--system", sim_system, "vdp|lorenz")
        ->required()
        ->check(CLI::IsMember({"vdp", "lorenz"}));
    sim->add_option("--noise-sigma", sim_sigma, "override noise standard deviation");
    sim->add_option("--out", sim_out, "output CSV path");
    add_seed_option(sim, sim_seed);

    try {
        app.parse(argc, argv);
        if (gen->parsed()) return cmd_signals_gen(gen_id, gen_noisy, gen_seed, gen_out, gen_T);
        if (run->parsed())
            return cmd_bench_run(run_config, ov, run_seed, run_out, run_global_scale);
        if (agg->parsed()) return cmd_bench_aggregate(agg_results, agg_out, agg_global_scale);
        if (best->parsed()) return cmd_best_table(best_results, best_family, best_out);
        if (ktrain->parsed())
            return cmd_koopformer_train(kt_config, kt_system, kt_backbone, kt_epochs, kt_seed,
                                        kt_out);
        if (sim->parsed()) return cmd_dynsys_simulate(sim_system, sim_seed, sim_sigma, sim_out);
    } catch (const CLI::ParseError& e) {
        return app.exit(e);  // --help exits 0 here
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kExitUsage;
    }
    return kExitUsage;
}
