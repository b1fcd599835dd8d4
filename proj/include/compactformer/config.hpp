#pragma once

#include <cstdint>
#include <fstream>
#include <optional>
#include <set>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "compactformer/bench.hpp"
#include "compactformer/koopman.hpp"

namespace cf::config {

enum class Regime { clean, noisy, both };

inline const char* to_string(Regime r) {
    switch (r) {
        case Regime::clean: return "clean";
        case Regime::noisy: return "noisy";
        case Regime::both: return "both";
    }
    return "?";
}

inline Regime regime_from_string(const std::string& s) {
    if (s == "clean") return Regime::clean;
    if (s == "noisy") return Regime::noisy;
    if (s == "both") return Regime::both;
    throw std::invalid_argument("regime must be clean|noisy|both, got \"" + s + "\"");
}

/// Koopformer settings; absent fields fall back to per-system defaults.
struct KoopformerSettings {
    std::string system = "vdp";
    koop::Backbone backbone = koop::Backbone::patchtst;
    std::optional<std::size_t> P, H, epochs, batch_size;
    std::optional<double> noise_sigma;
    std::size_t d_latent = 16;
    std::size_t d_model = 16;
    std::size_t heads = 2;
    std::size_t d_ff = 64;
    std::size_t enc_layers = 2;
    double lambda = 0.1;
    double lr = 1e-3;

    std::size_t resolved_P() const { return P.value_or(system == "lorenz" ? 200 : 16); }
    std::size_t resolved_H() const { return H.value_or(5); }
    std::size_t resolved_epochs() const {
        return epochs.value_or(system == "lorenz" ? 3000 : 1000);
    }
    std::size_t resolved_batch() const { return batch_size.value_or(system == "lorenz" ? 8 : 64); }
    double resolved_noise_sigma() const {
        return noise_sigma.value_or(system == "lorenz" ? 0.5 : 0.02);
    }
};

struct RunConfig {
    int config_version = 1;
    std::uint64_t seed = 0;
    Regime regime = Regime::clean;
    bench::GridSpec grid;  // noise flag and per-cell seeds resolved at run time
    KoopformerSettings koopformer;
};

namespace detail {

inline void reject_unknown(const nlohmann::json& j, const std::set<std::string>& known,
                           const std::string& where) {
    for (auto it = j.begin(); it != j.end(); ++it)
        if (!known.count(it.key()))
            throw std::invalid_argument("config: unknown key \"" + it.key() + "\" in " + where);
}

template <typename T>
void get_if(const nlohmann::json& j, const char* key, T& out) {
    if (j.contains(key)) out = j.at(key).get<T>();
}

template <typename T>
void get_opt(const nlohmann::json& j, const char* key, std::optional<T>& out) {
    if (j.contains(key)) out = j.at(key).get<T>();
}

}  // namespace detail

inline RunConfig from_json(const nlohmann::json& j) {
    detail::reject_unknown(
        j, {"config_version", "seed", "grid", "model", "noise", "probsparse", "koopformer"},
        "top level");
    RunConfig c;
    detail::get_if(j, "config_version", c.config_version);
    if (c.config_version != 1)
        throw std::invalid_argument("config: unsupported config_version " +
                                    std::to_string(c.config_version));
    detail::get_if(j, "seed", c.seed);

    if (j.contains("grid")) {
        const auto& g = j.at("grid");
        detail::reject_unknown(g,
                               {"families", "variants", "signals", "patch_lengths", "horizons",
                                "regime", "epochs_clean", "epochs_noisy", "lr", "split_fraction",
                                "batch_size", "series_length", "jobs"},
                               "grid");
        if (g.contains("families")) {
            c.grid.families.clear();
            for (const auto& s : g.at("families"))
                c.grid.families.push_back(models::family_from_string(s.get<std::string>()));
        }
        if (g.contains("variants")) {
            c.grid.variants.clear();
            for (const auto& s : g.at("variants"))
                c.grid.variants.push_back(models::variant_from_string(s.get<std::string>()));
        }
        if (g.contains("signals")) {
            c.grid.sigs.clear();
            for (const auto& s : g.at("signals"))
                c.grid.sigs.push_back(signals::signal_from_string(s.get<std::string>()));
        }
        detail::get_if(g, "patch_lengths", c.grid.patch_lengths);
        detail::get_if(g, "horizons", c.grid.horizons);
        if (g.contains("regime")) c.regime = regime_from_string(g.at("regime").get<std::string>());
        detail::get_if(g, "epochs_clean", c.grid.epochs_clean);
        detail::get_if(g, "epochs_noisy", c.grid.epochs_noisy);
        detail::get_if(g, "lr", c.grid.lr);
        detail::get_if(g, "split_fraction", c.grid.split_fraction);
        detail::get_if(g, "batch_size", c.grid.batch_size);
        detail::get_if(g, "series_length", c.grid.series_length);
        detail::get_if(g, "jobs", c.grid.jobs);
    }
    if (j.contains("model")) {
        const auto& m = j.at("model");
        detail::reject_unknown(m, {"d_model", "heads", "d_ff", "enc_layers", "dec_layers"},
                               "model");
        detail::get_if(m, "d_model", c.grid.d_model);
        detail::get_if(m, "heads", c.grid.heads);
        detail::get_if(m, "d_ff", c.grid.d_ff);
        detail::get_if(m, "enc_layers", c.grid.enc_layers);
        detail::get_if(m, "dec_layers", c.grid.dec_layers);
    }
    if (j.contains("noise")) {
        const auto& n = j.at("noise");
        detail::reject_unknown(n, {"sigma_add", "sigma_mult", "shift_prob", "shift_range"},
                               "noise");
        detail::get_if(n, "sigma_add", c.grid.noise_cfg.sigma_add);
        detail::get_if(n, "sigma_mult", c.grid.noise_cfg.sigma_mult);
        detail::get_if(n, "shift_prob", c.grid.noise_cfg.shift_prob);
        detail::get_if(n, "shift_range", c.grid.noise_cfg.shift_range);
        if (c.grid.noise_cfg.sigma_add < 0 || c.grid.noise_cfg.sigma_mult < 0 ||
            c.grid.noise_cfg.shift_prob < 0 || c.grid.noise_cfg.shift_prob > 1)
            throw std::invalid_argument("config: noise sigmas must be >= 0 and shift_prob in [0,1]");
    }
    if (j.contains("probsparse")) {
        const auto& p = j.at("probsparse");
        detail::reject_unknown(p, {"c", "lazy_mode"}, "probsparse");
        detail::get_if(p, "c", c.grid.probsparse_c);
        if (p.contains("lazy_mode"))
            c.grid.lazy_mode = sparse::lazy_mode_from_string(p.at("lazy_mode").get<std::string>());
    }
    if (j.contains("koopformer")) {
        const auto& k = j.at("koopformer");
        detail::reject_unknown(k,
                               {"system", "backbone", "P", "H", "epochs", "batch_size",
                                "noise_sigma", "d_latent", "d_model", "heads", "d_ff",
                                "enc_layers", "lambda", "lr"},
                               "koopformer");
        detail::get_if(k, "system", c.koopformer.system);
        if (c.koopformer.system != "vdp" && c.koopformer.system != "lorenz")
            throw std::invalid_argument("config: koopformer.system must be vdp|lorenz");
        if (k.contains("backbone"))
            c.koopformer.backbone =
                koop::backbone_from_string(k.at("backbone").get<std::string>());
        detail::get_opt(k, "P", c.koopformer.P);
        detail::get_opt(k, "H", c.koopformer.H);
        detail::get_opt(k, "epochs", c.koopformer.epochs);
        detail::get_opt(k, "batch_size", c.koopformer.batch_size);
        detail::get_opt(k, "noise_sigma", c.koopformer.noise_sigma);
        detail::get_if(k, "d_latent", c.koopformer.d_latent);
        detail::get_if(k, "d_model", c.koopformer.d_model);
        detail::get_if(k, "heads", c.koopformer.heads);
        detail::get_if(k, "d_ff", c.koopformer.d_ff);
        detail::get_if(k, "enc_layers", c.koopformer.enc_layers);
        detail::get_if(k, "lambda", c.koopformer.lambda);
        detail::get_if(k, "lr", c.koopformer.lr);
    }
    return c;
}

inline nlohmann::json to_json(const RunConfig& c) {
    nlohmann::json j;
    j["config_version"] = c.config_version;
    j["seed"] = c.seed;
    nlohmann::json g;
    auto names = [](const auto& xs, auto f) {
        std::vector<std::string> out;
        for (const auto& x : xs) out.emplace_back(f(x));
        return out;
    };
    g["families"] = names(c.grid.families, [](auto f) { return models::to_string(f); });
    g["variants"] = names(c.grid.variants, [](auto v) { return models::to_string(v); });
    g["signals"] = names(c.grid.sigs, [](auto s) { return signals::to_string(s); });
    g["patch_lengths"] = c.grid.patch_lengths;
    g["horizons"] = c.grid.horizons;
    g["regime"] = to_string(c.regime);
    g["epochs_clean"] = c.grid.epochs_clean;
    g["epochs_noisy"] = c.grid.epochs_noisy;
    g["lr"] = c.grid.lr;
    g["split_fraction"] = c.grid.split_fraction;
    g["batch_size"] = c.grid.batch_size;
    g["series_length"] = c.grid.series_length;
    g["jobs"] = c.grid.jobs;
    j["grid"] = std::move(g);
    j["model"] = {{"d_model", c.grid.d_model},
                  {"heads", c.grid.heads},
                  {"d_ff", c.grid.d_ff},
                  {"enc_layers", c.grid.enc_layers},
                  {"dec_layers", c.grid.dec_layers}};
    j["noise"] = {{"sigma_add", c.grid.noise_cfg.sigma_add},
                  {"sigma_mult", c.grid.noise_cfg.sigma_mult},
                  {"shift_prob", c.grid.noise_cfg.shift_prob},
                  {"shift_range", c.grid.noise_cfg.shift_range}};
    j["probsparse"] = {{"c", c.grid.probsparse_c},
                       {"lazy_mode", sparse::to_string(c.grid.lazy_mode)}};
    nlohmann::json k;
    k["system"] = c.koopformer.system;
    k["backbone"] = koop::to_string(c.koopformer.backbone);
    k["P"] = c.koopformer.resolved_P();
    k["H"] = c.koopformer.resolved_H();
    k["epochs"] = c.koopformer.resolved_epochs();
    k["batch_size"] = c.koopformer.resolved_batch();
    k["noise_sigma"] = c.koopformer.resolved_noise_sigma();
    k["d_latent"] = c.koopformer.d_latent;
    k["d_model"] = c.koopformer.d_model;
    k["heads"] = c.koopformer.heads;
    k["d_ff"] = c.koopformer.d_ff;
    k["enc_layers"] = c.koopformer.enc_layers;
    k["lambda"] = c.koopformer.lambda;
    k["lr"] = c.koopformer.lr;
    j["koopformer"] = std::move(k);
    return j;
}

inline RunConfig load_file(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw std::invalid_argument("config: cannot open " + path);
    return from_json(nlohmann::json::parse(in));
}

}  // namespace cf::config
