#pragma once

#include <cstddef>
#include <cstdint>
#include <fstream>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "compactformer/blocks.hpp"
#include "compactformer/probsparse.hpp"
#include "compactformer/tape.hpp"
#include "compactformer/tensor.hpp"

namespace cf::models {

enum class Family { patchtst, informer, autoformer };
enum class Variant { minimal, standard, full };

inline const char* to_string(Family f) {
    switch (f) {
        case Family::patchtst: return "patchtst";
        case Family::informer: return "informer";
        case Family::autoformer: return "autoformer";
    }
    return "?";
}

inline const char* to_string(Variant v) {
    switch (v) {
        case Variant::minimal: return "minimal";
        case Variant::standard: return "standard";
        case Variant::full: return "full";
    }
    return "?";
}

inline Family family_from_string(const std::string& s) {
    if (s == "patchtst") return Family::patchtst;
    if (s == "informer") return Family::informer;
    if (s == "autoformer") return Family::autoformer;
    throw std::invalid_argument("unknown family \"" + s + "\"");
}

inline Variant variant_from_string(const std::string& s) {
    if (s == "minimal") return Variant::minimal;
    if (s == "standard") return Variant::standard;
    if (s == "full") return Variant::full;
    throw std::invalid_argument("unknown variant \"" + s + "\"");
}

struct ModelConfig {
    Family family = Family::patchtst;
    Variant variant = Variant::minimal;
    std::size_t P = 16;
    std::size_t H = 4;
    std::size_t d_model = 8;
    std::size_t heads = 2;
    std::size_t d_ff = 32;
    std::size_t enc_layers = 2;
    std::size_t dec_layers = 1;
    std::size_t k_ma = 3;  // 25 for autoformer full
    double probsparse_c = 5.0;
    sparse::LazyMode lazy_mode = sparse::LazyMode::mean;
};

inline ModelConfig make_config(Family f, Variant v, std::size_t P, std::size_t H) {
    ModelConfig c;
    c.family = f;
    c.variant = v;
    c.P = P;
    c.H = H;
    if (f == Family::autoformer) c.k_ma = (v == Variant::full) ? 25 : 3;
    return c;
}

inline void validate(const ModelConfig& c) {
    if (c.P < 1 || c.H < 1) throw std::invalid_argument("ModelConfig: P and H must be >= 1");
    if (c.d_model % c.heads != 0)
        throw std::invalid_argument("ModelConfig: d_model must be divisible by heads");
    if (c.k_ma % 2 == 0) throw std::invalid_argument("ModelConfig: k_ma must be odd");
    if (c.enc_layers < 1) throw std::invalid_argument("ModelConfig: need >= 1 encoder layer");
    if ((c.variant == Variant::full) && c.dec_layers < 1)
        throw std::invalid_argument("ModelConfig: full variants need >= 1 decoder layer");
}

inline bool has_decoder(const ModelConfig& c) { return c.variant == Variant::full; }
inline bool uses_trend_head(const ModelConfig& c) { return c.family == Family::autoformer; }
inline bool uses_learnable_pe(const ModelConfig& c) {
    return c.family == Family::patchtst && c.variant == Variant::standard;
}
inline bool uses_probsparse(const ModelConfig& c) {
    return c.family == Family::informer && c.variant != Variant::minimal;
}

/// Config plus every parameter tensor. Fixed positional tables are kept
/// here too but are not parameters.
struct ModelInstance {
    ModelConfig config;
    Tensor W_e_enc;  // [1, d_model]
    Tensor p_learn;  // [P, d_model], patchtst standard only
    Tensor pe_enc;   // fixed sinusoidal table [P, d_model]
    std::vector<blocks::EncoderLayerWeights> enc;
    Tensor W_e_dec;  // [1, d_model], full variants
    Tensor pe_dec;   // fixed sinusoidal table [H, d_model]
    std::vector<blocks::DecoderLayerWeights> dec;
    Tensor W_o;  // [d_model, H] pooled variants, [d_model, 1] full variants
    Tensor W_t;  // [P, H], autoformer trend head
};

template <typename F>
void for_each_param(ModelInstance& m, F&& f) {
    f("W_e_enc", m.W_e_enc);
    if (uses_learnable_pe(m.config)) f("p", m.p_learn);
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
    if (has_decoder(m.config)) {
        f("W_e_dec", m.W_e_dec);
        for (std::size_t i = 0; i < m.dec.size(); ++i) {
            auto& l = m.dec[i];
            const std::string p = "dec." + std::to_string(i) + ".";
            f(p + "Wq_s", l.Wq_s);
            f(p + "Wk_s", l.Wk_s);
            f(p + "Wv_s", l.Wv_s);
            f(p + "Wq_c", l.Wq_c);
            f(p + "Wk_c", l.Wk_c);
            f(p + "Wv_c", l.Wv_c);
            f(p + "gamma1", l.gamma1);
            f(p + "beta1", l.beta1);
            f(p + "gamma2", l.gamma2);
            f(p + "beta2", l.beta2);
            f(p + "gamma3", l.gamma3);
            f(p + "beta3", l.beta3);
            f(p + "W1", l.W1);
            f(p + "W2", l.W2);
        }
    }
    f("W_o", m.W_o);
    if (uses_trend_head(m.config)) f("W_t", m.W_t);
}

inline std::size_t param_count(ModelInstance& m) {
    std::size_t n = 0;
    for_each_param(m, [&](const std::string&, Tensor& t) { n += t.size(); });
    return n;
}

/// Deterministic for (config, seed). Weight matrices U(+-1/sqrt(fan_in)),
/// norm scales one, additive parameters zero.
inline ModelInstance build(const ModelConfig& config, std::uint64_t seed) {
    validate(config);
    ModelInstance m;
    m.config = config;
    Rng rng(seed);
    const std::size_t d = config.d_model;

    m.W_e_enc = Tensor({1, d});
    init_uniform(m.W_e_enc, 1, rng);
    if (uses_learnable_pe(config))
        m.p_learn = Tensor({config.P, d});  // zero, like every additive parameter
    else
        m.pe_enc = blocks::sinusoidal_pe(config.P, d);
    for (std::size_t i = 0; i < config.enc_layers; ++i)
        m.enc.push_back(blocks::make_encoder_layer(d, config.d_ff, rng));

    if (has_decoder(config)) {
        m.W_e_dec = Tensor({1, d});
        init_uniform(m.W_e_dec, 1, rng);
        m.pe_dec = blocks::sinusoidal_pe(config.H, d);
        for (std::size_t i = 0; i < config.dec_layers; ++i)
            m.dec.push_back(blocks::make_decoder_layer(d, config.d_ff, rng));
        m.W_o = Tensor({d, 1});
        init_uniform(m.W_o, d, rng);
    } else {
        m.W_o = Tensor({d, config.H});
        init_uniform(m.W_o, d, rng);
    }
    if (uses_trend_head(config)) {
        m.W_t = Tensor({config.P, config.H});
        init_uniform(m.W_t, config.P, rng);
    }
    return m;
}

/// A forward pass: prediction node plus the parameter-to-leaf binding used
/// to read gradients after backward. Binding order is identical on every
/// call for a given config.
struct Forward {
    int y = -1;
    std::vector<Tensor*> params;
    std::vector<int> leaf_ids;
};

namespace detail {

struct Binder {
    Tape& t;
    Forward& fwd;
    int operator()(Tensor& w) {
        const int id = t.leaf(w);
        fwd.params.push_back(&w);
        fwd.leaf_ids.push_back(id);
        return id;
    }
};

inline blocks::EncoderLayerVars bind_enc(Binder& b, blocks::EncoderLayerWeights& w) {
    return {b(w.Wq), b(w.Wk), b(w.Wv), b(w.Wo), b(w.gamma1),
            b(w.beta1), b(w.W1), b(w.W2), b(w.gamma2), b(w.beta2)};
}

inline blocks::DecoderLayerVars bind_dec(Binder& b, blocks::DecoderLayerWeights& w) {
    return {b(w.Wq_s), b(w.Wk_s), b(w.Wv_s), b(w.Wq_c), b(w.Wk_c), b(w.Wv_c),
            b(w.gamma1), b(w.beta1), b(w.gamma2), b(w.beta2), b(w.gamma3), b(w.beta3),
            b(w.W1), b(w.W2)};
}

/// Decoder input for the repeat-last-value initialization: the final input
/// value tiled H times.
inline Tensor repeat_last(const Tensor& x, std::size_t H) {
    const std::size_t B = x.shape[0], P = x.shape[1];
    Tensor rep({B, H, 1});
    for (std::size_t b = 0; b < B; ++b) {
        const double last = x.at(b, P - 1);
        for (std::size_t h = 0; h < H; ++h) rep.at(b, h, 0) = last;
    }
    return rep;
}

inline Tensor lift3(const Tensor& x) {  // [B,P] -> [B,P,1]
    Tensor out({x.shape[0], x.shape[1], 1});
    out.data = x.data;
    return out;
}

}  // namespace detail

/// Runs one of the nine variants on a batch of windows x: [B, P] -> [B, H].
inline Forward forward(Tape& t, ModelInstance& m, const Tensor& x,
                       OpCounter* counter = nullptr) {
    const auto& cfg = m.config;
    if (x.rank() != 2 || x.shape[1] != cfg.P)
        throw std::invalid_argument("forward: input " + shape_str(x.shape) +
                                    " does not match configured P=" + std::to_string(cfg.P));
    Forward fwd;
    detail::Binder bind{t, fwd};
    const blocks::MHAConfig mha{cfg.d_model, cfg.heads};
    blocks::SparseOpts sopts;
    sopts.lazy_mode = cfg.lazy_mode;
    sopts.counter = counter;
    const std::optional<std::size_t> enc_u =
        uses_probsparse(cfg) ? std::optional<std::size_t>(
                                   sparse::default_u(cfg.P, cfg.P, cfg.probsparse_c))
                             : std::nullopt;

    // encoder input: per-step tokens, decomposed first for autoformer
    Tensor trend;
    int z;
    if (cfg.family == Family::autoformer) {
        auto parts = blocks::decompose(x, cfg.k_ma);
        trend = std::move(parts.trend);
        z = t.bmm_w(t.leaf(detail::lift3(parts.seasonal)), bind(m.W_e_enc));
    } else {
        z = t.bmm_w(t.leaf(detail::lift3(x)), bind(m.W_e_enc));
    }
    z = uses_learnable_pe(cfg) ? t.add_bcast(z, bind(m.p_learn))
                               : t.add_bcast(z, t.leaf(m.pe_enc));
    for (auto& layer : m.enc) {
        const auto vars = detail::bind_enc(bind, layer);
        z = blocks::encoder_layer(t, z, mha, vars, enc_u, sopts);
    }

    int y;
    if (!has_decoder(cfg)) {
        const int pooled = blocks::avg_pool_tokens(t, z);
        y = t.matmul(pooled, bind(m.W_o));
    } else {
        Tensor dec_in = (cfg.family == Family::autoformer)
                            ? Tensor({x.shape[0], cfg.H, 1})  // zero-initialized seasonal input
                            : detail::repeat_last(x, cfg.H);
        int zd = t.bmm_w(t.leaf(std::move(dec_in)), bind(m.W_e_dec));
        zd = t.add_bcast(zd, t.leaf(m.pe_dec));
        const std::optional<std::size_t> dec_u =
            uses_probsparse(cfg) ? std::optional<std::size_t>(
                                       sparse::default_u(cfg.H, cfg.H, cfg.probsparse_c))
                                 : std::nullopt;
        for (auto& layer : m.dec) {
            const auto vars = detail::bind_dec(bind, layer);
            zd = blocks::decoder_layer(t, zd, z, cfg.d_model, vars, dec_u, sopts);
        }
        y = t.reshape(t.bmm_w(zd, bind(m.W_o)), {x.shape[0], cfg.H});
    }
    if (uses_trend_head(cfg)) y = t.add(y, t.matmul(t.leaf(std::move(trend)), bind(m.W_t)));
    fwd.y = y;
    return fwd;
}

/// Plain prediction without gradient bookkeeping.
inline Tensor predict(ModelInstance& m, const Tensor& x) {
    Tape t;
    return t.val(forward(t, m, x).y);
}

// ---- cfv1 checkpoints ----

inline nlohmann::json config_to_json(const ModelConfig& c) {
    return nlohmann::json{{"family", to_string(c.family)},
                          {"variant", to_string(c.variant)},
                          {"P", c.P},
                          {"H", c.H},
                          {"d_model", c.d_model},
                          {"heads", c.heads},
                          {"d_ff", c.d_ff},
                          {"enc_layers", c.enc_layers},
                          {"dec_layers", c.dec_layers},
                          {"k_ma", c.k_ma},
                          {"probsparse_c", c.probsparse_c},
                          {"lazy_mode", sparse::to_string(c.lazy_mode)}};
}

inline ModelConfig config_from_json(const nlohmann::json& j) {
    ModelConfig c;
    c.family = family_from_string(j.at("family").get<std::string>());
    c.variant = variant_from_string(j.at("variant").get<std::string>());
    c.P = j.at("P").get<std::size_t>();
    c.H = j.at("H").get<std::size_t>();
    c.d_model = j.at("d_model").get<std::size_t>();
    c.heads = j.at("heads").get<std::size_t>();
    c.d_ff = j.at("d_ff").get<std::size_t>();
    c.enc_layers = j.at("enc_layers").get<std::size_t>();
    c.dec_layers = j.at("dec_layers").get<std::size_t>();
    c.k_ma = j.at("k_ma").get<std::size_t>();
    c.probsparse_c = j.at("probsparse_c").get<double>();
    c.lazy_mode = sparse::lazy_mode_from_string(j.at("lazy_mode").get<std::string>());
    return c;
}

inline void save_checkpoint(ModelInstance& m, const std::string& path) {
    nlohmann::json j;
    j["format"] = "cfv1";
    j["config"] = config_to_json(m.config);
    nlohmann::json params = nlohmann::json::object();
    for_each_param(m, [&](const std::string& name, Tensor& t) { params[name] = t.data; });
    j["params"] = std::move(params);
    std::ofstream out(path, std::ios::binary);
    if (!out) throw std::runtime_error("save_checkpoint: cannot open " + path);
    out << j.dump();
}

inline ModelInstance load_checkpoint(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("load_checkpoint: cannot open " + path);
    nlohmann::json j = nlohmann::json::parse(in);
    if (j.at("format").get<std::string>() != "cfv1")
        throw std::runtime_error("load_checkpoint: unsupported format \"" +
                                 j.at("format").get<std::string>() + "\"");
    ModelInstance m = build(config_from_json(j.at("config")), 0);
    const auto& params = j.at("params");
    std::size_t seen = 0;
    for_each_param(m, [&](const std::string& name, Tensor& t) {
        const auto it = params.find(name);
        if (it == params.end())
            throw std::runtime_error("load_checkpoint: missing parameter \"" + name + "\"");
        auto values = it->get<std::vector<double>>();
        if (values.size() != t.size())
            throw std::runtime_error("load_checkpoint: parameter \"" + name + "\" has " +
                                     std::to_string(values.size()) + " values, expected " +
                                     std::to_string(t.size()));
        t.data = std::move(values);
        ++seen;
    });
    if (seen != params.size())
        throw std::runtime_error("load_checkpoint: checkpoint carries unknown parameters");
    return m;
}

}  // namespace cf::models
