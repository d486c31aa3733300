#pragma once

#include <algorithm>
#include <cctype>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "dmjd/dataset.hpp"
#include "dmjd/model.hpp"
#include "dmjd/trainer.hpp"

namespace dmjd {

namespace detail {

inline std::string trim(const std::string& s) {
    std::size_t a = 0, b = s.size();
    while (a < b && std::isspace(static_cast<unsigned char>(s[a]))) ++a;
    while (b > a && std::isspace(static_cast<unsigned char>(s[b - 1]))) --b;
    return s.substr(a, b - a);
}

inline bool parse_bool(const std::string& v, const std::string& key) {
    if (v == "true" || v == "on" || v == "1" || v == "yes") return true;
    if (v == "false" || v == "off" || v == "0" || v == "no") return false;
    throw config_error("config: key '" + key + "' wants a boolean, got '" + v + "'");
}

inline double parse_double(const std::string& v, const std::string& key) {
    try {
        std::size_t pos = 0;
        const double d = std::stod(v, &pos);
        if (pos != v.size()) throw std::invalid_argument(v);
        return d;
    } catch (const std::exception&) {
        throw config_error("config: key '" + key + "' wants a number, got '" + v + "'");
    }
}

inline std::uint64_t parse_u64(const std::string& v, const std::string& key) {
    try {
        std::size_t pos = 0;
        const std::uint64_t u = std::stoull(v, &pos);
        if (pos != v.size()) throw std::invalid_argument(v);
        return u;
    } catch (const std::exception&) {
        throw config_error("config: key '" + key + "' wants an unsigned integer, got '" + v + "'");
    }
}

inline TargetKind parse_target_kind(const std::string& v, const std::string& key) {
    if (v == "pixel") return TargetKind::pixel;
    if (v == "hog") return TargetKind::hog;
    if (v == "external") return TargetKind::external;
    throw config_error("config: key '" + key + "' wants pixel|hog|external, got '" + v + "'");
}

inline NormMode parse_norm_mode(const std::string& v, const std::string& key) {
    if (v == "none") return NormMode::none;
    if (v == "per_patch_standardize") return NormMode::per_patch_standardize;
    if (v == "layer_norm") return NormMode::layer_norm;
    if (v == "l2") return NormMode::l2;
    throw config_error("config: key '" + key +
                       "' wants none|per_patch_standardize|layer_norm|l2, got '" + v + "'");
}

}  // namespace detail

// One experiment: dataset + model + targets + training + evaluation knobs.
// File format is `key = value` lines with '#' comments; unknown keys are
// rejected so typos fail loudly.
struct ExperimentConfig {
    std::string run_name = "run";
    std::string dataset_path;
    std::string precision = "f32";
    std::uint64_t seed = 0;

    // model (target dims are derived from the target pipelines at build time)
    std::size_t image_size = 32;
    std::size_t patch_size = 8;
    std::size_t encoder_dim = 64;
    std::size_t encoder_depth = 4;
    std::size_t encoder_heads = 4;
    std::size_t decoder_dim = 64;
    std::size_t decoder_depth = 4;
    std::size_t projector_hidden = 128;

    // targets
    TargetKind target = TargetKind::pixel;
    NormMode pixel_norm = NormMode::per_patch_standardize;
    std::size_t hog_bins = 9;
    std::size_t hog_cells = 2;
    std::string external_path;
    bool vdb = false;
    TargetKind vdb_target = TargetKind::hog;
    bool vdb_target_set = false;  // unset -> follows `target`
    NormMode vdb_norm = NormMode::layer_norm;
    bool vdb_stop_grad = false;

    // training
    std::size_t epochs = 30;
    std::size_t warmup_epochs = 3;
    std::size_t batch_size = 64;
    std::size_t k_views = 2;
    double m_corr = 0.6;
    double m_pred = 0.95;
    PatternKind pattern = PatternKind::block;
    std::size_t min_block_tokens = 2;
    double block_aspect_min = 0.5;
    double block_aspect_max = 2.0;
    double base_lr = 1.5e-4;
    double min_lr = 0.0;
    double weight_decay = 0.05;
    double beta1 = 0.9;
    double beta2 = 0.95;
    double adam_eps = 1e-8;
    double lambda = 1.0;
    double huber_beta = 2.0;
    bool hflip = true;

    // evaluation
    double val_fraction = 0.2;
    std::uint64_t split_seed = 17;
    double val_m_corr = 0.75;

    TargetKind vdb_kind() const { return vdb_target_set ? vdb_target : target; }

    void set(const std::string& key, const std::string& value) {
        using namespace detail;
        if (key == "run_name") run_name = value;
        else if (key == "dataset") dataset_path = value;
        else if (key == "precision") {
            if (value != "f32" && value != "f64")
                throw config_error("config: precision wants f32|f64, got '" + value + "'");
            precision = value;
        }
        else if (key == "seed") seed = parse_u64(value, key);
        else if (key == "image_size") image_size = parse_u64(value, key);
        else if (key == "patch_size") patch_size = parse_u64(value, key);
        else if (key == "encoder_dim") encoder_dim = parse_u64(value, key);
        else if (key == "encoder_depth") encoder_depth = parse_u64(value, key);
        else if (key == "encoder_heads") encoder_heads = parse_u64(value, key);
        else if (key == "decoder_dim") decoder_dim = parse_u64(value, key);
        else if (key == "decoder_depth") decoder_depth = parse_u64(value, key);
        else if (key == "projector_hidden") projector_hidden = parse_u64(value, key);
        else if (key == "target") target = parse_target_kind(value, key);
        else if (key == "pixel_norm") pixel_norm = parse_norm_mode(value, key);
        else if (key == "hog_bins") hog_bins = parse_u64(value, key);
        else if (key == "hog_cells") hog_cells = parse_u64(value, key);
        else if (key == "external_path") external_path = value;
        else if (key == "vdb") vdb = parse_bool(value, key);
        else if (key == "vdb_target") {
            vdb_target = parse_target_kind(value, key);
            vdb_target_set = true;
        }
        else if (key == "vdb_norm") vdb_norm = parse_norm_mode(value, key);
        else if (key == "vdb_stop_grad") vdb_stop_grad = parse_bool(value, key);
        else if (key == "epochs") epochs = parse_u64(value, key);
        else if (key == "warmup_epochs") warmup_epochs = parse_u64(value, key);
        else if (key == "batch_size") batch_size = parse_u64(value, key);
        else if (key == "k_views") k_views = parse_u64(value, key);
        else if (key == "m_corr") m_corr = parse_double(value, key);
        else if (key == "m_pred") m_pred = parse_double(value, key);
        else if (key == "pattern") {
            if (value == "uniform") pattern = PatternKind::uniform;
            else if (value == "block") pattern = PatternKind::block;
            else throw config_error("config: pattern wants uniform|block, got '" + value + "'");
        }
        else if (key == "min_block_tokens") min_block_tokens = parse_u64(value, key);
        else if (key == "block_aspect_min") block_aspect_min = parse_double(value, key);
        else if (key == "block_aspect_max") block_aspect_max = parse_double(value, key);
        else if (key == "base_lr") base_lr = parse_double(value, key);
        else if (key == "min_lr") min_lr = parse_double(value, key);
        else if (key == "weight_decay") weight_decay = parse_double(value, key);
        else if (key == "beta1") beta1 = parse_double(value, key);
        else if (key == "beta2") beta2 = parse_double(value, key);
        else if (key == "adam_eps") adam_eps = parse_double(value, key);
        else if (key == "lambda") lambda = parse_double(value, key);
        else if (key == "huber_beta") huber_beta = parse_double(value, key);
        else if (key == "hflip") hflip = parse_bool(value, key);
        else if (key == "val_fraction") val_fraction = parse_double(value, key);
        else if (key == "split_seed") split_seed = parse_u64(value, key);
        else if (key == "val_m_corr") val_m_corr = parse_double(value, key);
        else throw config_error("config: unknown key '" + key + "'");
    }

    static ExperimentConfig parse_text(const std::string& text) {
        ExperimentConfig cfg;
        cfg.apply_text(text);
        return cfg;
    }

    void apply_text(const std::string& text) {
        std::istringstream is(text);
        std::string line;
        std::size_t line_no = 0;
        while (std::getline(is, line)) {
            ++line_no;
            const auto hash = line.find('#');
            if (hash != std::string::npos) line.resize(hash);
            line = detail::trim(line);
            if (line.empty()) continue;
            const auto eq = line.find('=');
            if (eq == std::string::npos)
                throw config_error("config: line " + std::to_string(line_no) +
                                   " is not a key = value pair: '" + line + "'");
            set(detail::trim(line.substr(0, eq)), detail::trim(line.substr(eq + 1)));
        }
    }

    static ExperimentConfig parse_file(const std::string& path) {
        std::ifstream is(path);
        if (!is) throw config_error("config: cannot open " + path);
        std::stringstream buf;
        buf << is.rdbuf();
        return parse_text(buf.str());
    }

    std::string canonical_text() const {
        std::ostringstream os;
        os.precision(17);
        os << "adam_eps = " << adam_eps << '\n'
           << "base_lr = " << base_lr << '\n'
           << "batch_size = " << batch_size << '\n'
           << "beta1 = " << beta1 << '\n'
           << "beta2 = " << beta2 << '\n'
           << "block_aspect_max = " << block_aspect_max << '\n'
           << "block_aspect_min = " << block_aspect_min << '\n'
           << "dataset = " << dataset_path << '\n'
           << "decoder_depth = " << decoder_depth << '\n'
           << "decoder_dim = " << decoder_dim << '\n'
           << "encoder_depth = " << encoder_depth << '\n'
           << "encoder_dim = " << encoder_dim << '\n'
           << "encoder_heads = " << encoder_heads << '\n'
           << "epochs = " << epochs << '\n'
           << "external_path = " << external_path << '\n'
           << "hflip = " << (hflip ? "true" : "false") << '\n'
           << "hog_bins = " << hog_bins << '\n'
           << "hog_cells = " << hog_cells << '\n'
           << "huber_beta = " << huber_beta << '\n'
           << "image_size = " << image_size << '\n'
           << "k_views = " << k_views << '\n'
           << "lambda = " << lambda << '\n'
           << "m_corr = " << m_corr << '\n'
           << "m_pred = " << m_pred << '\n'
           << "min_block_tokens = " << min_block_tokens << '\n'
           << "min_lr = " << min_lr << '\n'
           << "pattern = " << pattern_name(pattern) << '\n'
           << "patch_size = " << patch_size << '\n'
           << "pixel_norm = " << norm_mode_name(pixel_norm) << '\n'
           << "precision = " << precision << '\n'
           << "projector_hidden = " << projector_hidden << '\n'
           << "run_name = " << run_name << '\n'
           << "seed = " << seed << '\n'
           << "split_seed = " << split_seed << '\n'
           << "target = " << target_kind_name(target) << '\n'
           << "val_fraction = " << val_fraction << '\n'
           << "val_m_corr = " << val_m_corr << '\n'
           << "vdb = " << (vdb ? "true" : "false") << '\n'
           << "vdb_norm = " << norm_mode_name(vdb_norm) << '\n'
           << "vdb_stop_grad = " << (vdb_stop_grad ? "true" : "false") << '\n'
           << "vdb_target = " << target_kind_name(vdb_kind()) << '\n'
           << "warmup_epochs = " << warmup_epochs << '\n'
           << "weight_decay = " << weight_decay << '\n';
        return os.str();
    }

    std::uint64_t hash() const {
        const std::string text = canonical_text();
        std::uint64_t h = 0xcbf29ce484222325ull;
        for (unsigned char ch : text) {
            h ^= ch;
            h *= 0x100000001b3ull;
        }
        return h;
    }

    ModelConfig model_config(std::size_t channels, std::size_t mpb_dim, std::size_t vdb_dim) const {
        ModelConfig mc;
        mc.image_size = image_size;
        mc.patch_size = patch_size;
        mc.channels = channels;
        mc.encoder_dim = encoder_dim;
        mc.encoder_depth = encoder_depth;
        mc.encoder_heads = encoder_heads;
        mc.decoder_dim = decoder_dim;
        mc.decoder_depth = decoder_depth;
        mc.projector_hidden = projector_hidden;
        mc.target_dim = mpb_dim;
        mc.vdb_target_dim = vdb_dim;
        mc.vdb_enabled = vdb;
        return mc;
    }

    TrainConfig train_config() const {
        TrainConfig tc;
        tc.base_lr = base_lr;
        tc.batch_size = batch_size;
        tc.k_views = k_views;
        tc.m_corr = m_corr;
        tc.m_pred = m_pred;
        tc.pattern = pattern;
        tc.min_block_tokens = min_block_tokens;
        tc.block_aspect_min = block_aspect_min;
        tc.block_aspect_max = block_aspect_max;
        tc.weight_decay = weight_decay;
        tc.epochs = epochs;
        tc.warmup_epochs = warmup_epochs;
        tc.beta1 = beta1;
        tc.beta2 = beta2;
        tc.adam_eps = adam_eps;
        tc.min_lr = min_lr;
        tc.lambda = lambda;
        tc.huber_beta = huber_beta;
        tc.vdb_norm = vdb_norm;
        tc.vdb_stop_grad = vdb_stop_grad;
        tc.hflip = hflip;
        tc.seed = seed;
        return tc;
    }

    // Every violation at once, so a bad config fails with the full list.
    std::vector<std::string> validate(const Dataset& ds) const {
        std::vector<std::string> problems;
        if (ds.size() == 0) problems.push_back("dataset is empty");
        if (ds.h != image_size || ds.w != image_size)
            problems.push_back("dataset images are " + std::to_string(ds.h) + "x" + std::to_string(ds.w) +
                               " but config wants image_size " + std::to_string(image_size));
        const std::size_t mpb_dim = target == TargetKind::hog ? hog_cells * hog_cells * hog_bins * ds.c
                                                              : patch_size * patch_size * ds.c;
        ModelConfig mc = model_config(ds.c == 0 ? 3 : ds.c, std::max<std::size_t>(1, mpb_dim),
                                      std::max<std::size_t>(1, mpb_dim));
        for (auto& p : mc.validate()) problems.push_back(p);
        if (patch_size != 0 && image_size % patch_size == 0) {
            for (auto& p : train_config().validate(mc.n_tokens())) problems.push_back(p);
        }
        if (target == TargetKind::hog && hog_cells > 0 && patch_size % hog_cells != 0)
            problems.push_back("patch_size must be divisible by hog_cells");
        if ((target == TargetKind::external || (vdb && vdb_kind() == TargetKind::external))) {
            if (external_path.empty()) problems.push_back("external targets need external_path");
            if (hflip) problems.push_back("external targets are precomputed per image; disable hflip");
        }
        if (val_fraction < 0.0 || val_fraction >= 1.0) problems.push_back("val_fraction must lie in [0,1)");
        if (!(val_m_corr > 0.0) || val_m_corr >= 1.0) problems.push_back("val_m_corr must lie in (0,1)");
        if (!decoder_depth_note().empty()) {
            // informational only; not a validation failure
        }
        return problems;
    }

    std::string decoder_depth_note() const {
        if (decoder_depth == 2 || decoder_depth == 4 || decoder_depth == 8) return "";
        return "decoder_depth " + std::to_string(decoder_depth) +
               " is outside the studied {2,4,8} range";
    }
};

}  // namespace dmjd
