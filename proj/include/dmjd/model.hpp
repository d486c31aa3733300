#pragma once

#include <cmath>
#include <cstring>
#include <fstream>
#include <functional>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "dmjd/image.hpp"
#include "dmjd/masking.hpp"
#include "dmjd/rng.hpp"
#include "dmjd/tensor.hpp"

namespace dmjd {

constexpr double kLayerNormEps = 1e-6;

struct ModelConfig {
    std::size_t image_size = 32;
    std::size_t patch_size = 8;
    std::size_t channels = 3;
    std::size_t encoder_dim = 64;
    std::size_t encoder_depth = 4;
    std::size_t encoder_heads = 4;
    std::size_t decoder_dim = 64;
    std::size_t decoder_depth = 4;
    std::size_t projector_hidden = 128;
    std::size_t target_dim = 192;
    std::size_t vdb_target_dim = 0;  // 0 means same as target_dim
    bool vdb_enabled = true;

    std::size_t grid() const { return image_size / patch_size; }
    std::size_t n_tokens() const { return grid() * grid(); }
    std::size_t token_dim() const { return patch_size * patch_size * channels; }
    std::size_t vdb_dim() const { return vdb_target_dim == 0 ? target_dim : vdb_target_dim; }

    // Depths outside the ablation range still run, just flagged.
    bool decoder_depth_in_paper_range() const {
        return decoder_depth == 2 || decoder_depth == 4 || decoder_depth == 8;
    }

    std::vector<std::string> validate() const {
        std::vector<std::string> problems;
        if (patch_size == 0 || image_size % patch_size != 0)
            problems.push_back("image_size must be divisible by patch_size");
        if (channels == 0) problems.push_back("channels must be positive");
        if (encoder_heads == 0 || encoder_dim % encoder_heads != 0)
            problems.push_back("encoder_dim must be divisible by encoder_heads");
        if (decoder_dim % encoder_heads != 0)
            problems.push_back("decoder_dim must be divisible by encoder_heads (shared head count)");
        if (encoder_dim % 4 != 0 || decoder_dim % 4 != 0)
            problems.push_back("encoder_dim and decoder_dim must be divisible by 4 (2-D sincos positions)");
        if (encoder_depth == 0 || decoder_depth == 0) problems.push_back("depths must be positive");
        if (projector_hidden == 0) problems.push_back("projector_hidden must be positive");
        if (target_dim == 0) problems.push_back("target_dim must be positive");
        return problems;
    }
};

// Fixed 2-D sinusoidal embeddings for a token grid, row-major. Half the
// channels encode the row coordinate, half the column, each as interleaved
// sin/cos banks with the usual 10000^(i/d) frequency spacing.
template <typename T>
Tensor<T> sincos_pos_embed(std::size_t grid_h, std::size_t grid_w, std::size_t dim) {
    if (dim % 4 != 0) throw config_error("sincos_pos_embed: dim must be divisible by 4");
    const std::size_t half = dim / 2, quarter = dim / 4;
    std::vector<double> omega(quarter);
    for (std::size_t i = 0; i < quarter; ++i)
        omega[i] = 1.0 / std::pow(10000.0, static_cast<double>(i) / static_cast<double>(quarter));
    std::vector<T> out(grid_h * grid_w * dim);
    for (std::size_t r = 0; r < grid_h; ++r) {
        for (std::size_t c = 0; c < grid_w; ++c) {
            T* row = out.data() + (r * grid_w + c) * dim;
            for (std::size_t i = 0; i < quarter; ++i) {
                row[i] = static_cast<T>(std::sin(static_cast<double>(r) * omega[i]));
                row[quarter + i] = static_cast<T>(std::cos(static_cast<double>(r) * omega[i]));
                row[half + i] = static_cast<T>(std::sin(static_cast<double>(c) * omega[i]));
                row[half + quarter + i] = static_cast<T>(std::cos(static_cast<double>(c) * omega[i]));
            }
        }
    }
    return Tensor<T>::from({grid_h * grid_w, dim}, std::move(out));
}

template <typename T>
struct PatchTokens {
    Tensor<T> tokens;                                        // N x (p*p*C)
    std::vector<std::pair<std::size_t, std::size_t>> grid;  // (row, col) per token
};

// Non-overlapping patches in row-major grid order; within a patch the layout
// is y, x, channel, matching pixel_target.
template <typename T>
PatchTokens<T> patchify(const Image<T>& img, std::size_t patch_size) {
    if (patch_size == 0 || img.h % patch_size != 0 || img.w % patch_size != 0) {
        throw shape_error("patchify: image " + std::to_string(img.h) + "x" + std::to_string(img.w) +
                          " not divisible by patch " + std::to_string(patch_size));
    }
    const std::size_t gh = img.h / patch_size, gw = img.w / patch_size;
    const std::size_t dim = patch_size * patch_size * img.c;
    std::vector<T> tokens(gh * gw * dim);
    std::vector<std::pair<std::size_t, std::size_t>> grid;
    grid.reserve(gh * gw);
    for (std::size_t pr = 0; pr < gh; ++pr) {
        for (std::size_t pc = 0; pc < gw; ++pc) {
            grid.emplace_back(pr, pc);
            T* row = tokens.data() + (pr * gw + pc) * dim;
            std::size_t k = 0;
            for (std::size_t y = 0; y < patch_size; ++y)
                for (std::size_t x = 0; x < patch_size; ++x)
                    for (std::size_t ch = 0; ch < img.c; ++ch)
                        row[k++] = img.at(pr * patch_size + y, pc * patch_size + x, ch);
        }
    }
    return {Tensor<T>::from({gh * gw, dim}, std::move(tokens)), std::move(grid)};
}

template <typename T>
Image<T> unpatchify(const Tensor<T>& tokens, std::size_t patch_size, std::size_t channels) {
    const std::size_t n = tokens.extent(0);
    const std::size_t g = static_cast<std::size_t>(std::llround(std::sqrt(static_cast<double>(n))));
    if (g * g != n) throw shape_error("unpatchify: token count is not a square grid");
    Image<T> img{g * patch_size, g * patch_size, channels,
                 std::vector<T>(n * tokens.extent(1))};
    auto tv = tokens.values();
    const std::size_t dim = tokens.extent(1);
    for (std::size_t pr = 0; pr < g; ++pr) {
        for (std::size_t pc = 0; pc < g; ++pc) {
            const T* row = tv.data() + (pr * g + pc) * dim;
            std::size_t k = 0;
            for (std::size_t y = 0; y < patch_size; ++y)
                for (std::size_t x = 0; x < patch_size; ++x)
                    for (std::size_t ch = 0; ch < channels; ++ch)
                        img.at(pr * patch_size + y, pc * patch_size + x, ch) = row[k++];
        }
    }
    return img;
}

template <typename T>
struct ParamEntry {
    std::string name;
    Tensor<T> tensor;
    bool weight_decay = true;
};

template <typename T>
class ParamSet {
public:
    enum class Init { trunc_normal, zeros, ones };

    // Returns a value handle; Tensor shares the underlying node, so the copy
    // stays tied to the registered parameter.
    Tensor<T> add(std::string name, Shape shape, Init init, bool weight_decay, Rng& rng) {
        Tensor<T> t = Tensor<T>::zeros(shape, true);
        auto vals = t.values_mut();
        switch (init) {
            case Init::trunc_normal:
                for (auto& v : vals) v = static_cast<T>(rng.truncated_normal(0.02));
                break;
            case Init::zeros:
                break;
            case Init::ones:
                std::fill(vals.begin(), vals.end(), T(1));
                break;
        }
        entries_.push_back({std::move(name), t, weight_decay});
        return t;
    }

    std::vector<ParamEntry<T>>& entries() { return entries_; }
    const std::vector<ParamEntry<T>>& entries() const { return entries_; }

    std::size_t total_params() const {
        std::size_t n = 0;
        for (const auto& e : entries_) n += e.tensor.numel();
        return n;
    }

    void zero_grads() {
        for (auto& e : entries_) e.tensor.zero_grad();
    }

    ParamEntry<T>* find(const std::string& name) {
        for (auto& e : entries_)
            if (e.name == name) return &e;
        return nullptr;
    }

private:
    std::vector<ParamEntry<T>> entries_;
};

namespace detail {

template <typename T>
struct LayerNormParams {
    Tensor<T> gain, bias;
};

template <typename T>
struct BlockParams {
    LayerNormParams<T> ln1, ln2;
    Tensor<T> wq, bq, wk, bk, wv, bv, wo, bo;
    Tensor<T> w1, b1, w2, b2;
};

}  // namespace detail

// Observer hook for per-layer activations; name then tensor.
template <typename T>
using ActivationObserver = std::function<void(const std::string&, const Tensor<T>&)>;

// Micro vision-transformer autoencoder with the dual-branch head: visible-only
// encoder, masked-prediction decoder, and visible projector + predictor.
template <typename T>
class Model {
public:
    explicit Model(ModelConfig cfg, Rng& rng) : cfg_(cfg) {
        auto problems = cfg.validate();
        if (!problems.empty()) {
            std::string msg = "ModelConfig invalid:";
            for (const auto& p : problems) msg += " " + p + ";";
            throw config_error(msg);
        }
        const std::size_t e = cfg.encoder_dim, d = cfg.decoder_dim, h = cfg.projector_hidden;
        using Init = typename ParamSet<T>::Init;
        embed_w_ = params_.add("enc.embed.w", {cfg.token_dim(), e}, Init::trunc_normal, true, rng);
        embed_b_ = params_.add("enc.embed.b", {e}, Init::zeros, true, rng);
        for (std::size_t i = 0; i < cfg.encoder_depth; ++i)
            enc_blocks_.push_back(make_block("enc.block" + std::to_string(i), e, rng));
        enc_norm_ = make_ln("enc.norm", e, rng);

        dec_embed_w_ = params_.add("dec.embed.w", {e, d}, Init::trunc_normal, true, rng);
        dec_embed_b_ = params_.add("dec.embed.b", {d}, Init::zeros, true, rng);
        mask_token_ = params_.add("dec.mask_token", {d}, Init::trunc_normal, false, rng);
        for (std::size_t i = 0; i < cfg.decoder_depth; ++i)
            dec_blocks_.push_back(make_block("dec.block" + std::to_string(i), d, rng));
        dec_norm_ = make_ln("dec.norm", d, rng);
        head_w_ = params_.add("dec.head.w", {d, cfg.target_dim}, Init::trunc_normal, true, rng);
        head_b_ = params_.add("dec.head.b", {cfg.target_dim}, Init::zeros, true, rng);

        if (cfg.vdb_enabled) {
            proj_w1_ = params_.add("vdb.proj.fc1.w", {e, h}, Init::trunc_normal, true, rng);
            proj_b1_ = params_.add("vdb.proj.fc1.b", {h}, Init::zeros, true, rng);
            proj_ln1_ = make_ln("vdb.proj.ln1", h, rng);
            proj_w2_ = params_.add("vdb.proj.fc2.w", {h, h}, Init::trunc_normal, true, rng);
            proj_b2_ = params_.add("vdb.proj.fc2.b", {h}, Init::zeros, true, rng);
            proj_ln2_ = make_ln("vdb.proj.ln2", h, rng);
            proj_w3_ = params_.add("vdb.proj.fc3.w", {h, h}, Init::trunc_normal, true, rng);
            proj_b3_ = params_.add("vdb.proj.fc3.b", {h}, Init::zeros, true, rng);
            proj_ln3_ = make_ln("vdb.proj.ln3", h, rng);
            pred_w_ = params_.add("vdb.pred.w", {h, cfg.vdb_dim()}, Init::trunc_normal, true, rng);
            pred_b_ = params_.add("vdb.pred.b", {cfg.vdb_dim()}, Init::zeros, true, rng);
        }

        enc_pos_ = sincos_pos_embed<T>(cfg.grid(), cfg.grid(), e);
        dec_pos_ = sincos_pos_embed<T>(cfg.grid(), cfg.grid(), d);
    }

    const ModelConfig& config() const { return cfg_; }
    ParamSet<T>& params() { return params_; }
    const ParamSet<T>& params() const { return params_; }

    // Closed-form parameter count; the registry total must match this exactly.
    static std::size_t param_count_formula(const ModelConfig& cfg) {
        const std::size_t e = cfg.encoder_dim, d = cfg.decoder_dim, h = cfg.projector_hidden;
        auto block = [](std::size_t dim) {
            // ln1 + ln2, q/k/v/o with biases, mlp at ratio 4
            return 4 * dim + 4 * (dim * dim + dim) + (dim * 4 * dim + 4 * dim) +
                   (4 * dim * dim + dim);
        };
        std::size_t n = cfg.token_dim() * e + e;            // patch embed
        n += cfg.encoder_depth * block(e) + 2 * e;          // encoder blocks + final ln
        n += e * d + d;                                     // decoder embed
        n += d;                                             // mask token
        n += cfg.decoder_depth * block(d) + 2 * d;          // decoder blocks + final ln
        n += d * cfg.target_dim + cfg.target_dim;           // reconstruction head
        if (cfg.vdb_enabled) {
            n += e * h + h + 2 * h;                         // fc1 + ln1
            n += 2 * (h * h + h + 2 * h);                   // fc2 + ln2, fc3 + ln3
            n += h * cfg.vdb_dim() + cfg.vdb_dim();         // predictor
        }
        return n;
    }

    // Encoder over pre-gathered token rows with matching positional rows, in
    // any row order. Attention is permutation-equivariant, so reordering rows
    // reorders outputs.
    Tensor<T> encode_rows(const Tensor<T>& token_rows, const Tensor<T>& pos_rows,
                          const ActivationObserver<T>& observer = {}) const {
        Tensor<T> x = add(add_rowvec(matmul(token_rows, embed_w_), embed_b_), pos_rows);
        if (observer) observer("enc.embed", x);
        for (std::size_t i = 0; i < enc_blocks_.size(); ++i) {
            x = run_block(x, enc_blocks_[i], cfg_.encoder_heads);
            if (observer) observer("enc.block" + std::to_string(i), x);
        }
        x = layer_norm(x, enc_norm_.gain, enc_norm_.bias, T(kLayerNormEps));
        if (observer) observer("enc.norm", x);
        return x;
    }

    // Visible-only encoding: masked tokens never enter the computation.
    // Output rows follow ascending token index.
    Tensor<T> encode_visible(const Tensor<T>& tokens, const MaskVector& mask,
                             const ActivationObserver<T>& observer = {}) const {
        check_tokens(tokens, mask);
        const auto visible = mask.visible_indices();
        if (visible.empty()) throw contract_error("encode_visible: all tokens masked, encoder needs >= 1 visible");
        return encode_rows(gather_rows(tokens, visible), gather_rows(enc_pos_, visible), observer);
    }

    // Full-image encoding for evaluation; every token visible.
    Tensor<T> encode_all(const Tensor<T>& tokens) const {
        MaskVector none{cfg_.n_tokens(), std::vector<std::uint8_t>(cfg_.n_tokens(), 0), 0.0};
        return encode_visible(tokens, none);
    }

    // Assembled decoder input before positions: visible slots carry projected
    // encoder features, masked slots all share the mask token.
    Tensor<T> decoder_input(const Tensor<T>& z, const MaskVector& mask) const {
        const auto visible = mask.visible_indices();
        if (z.rank() != 2 || z.extent(0) != visible.size() || z.extent(1) != cfg_.encoder_dim) {
            throw shape_error("decode_masked: encoder output " + shape_str(z.shape()) +
                              " does not match " + std::to_string(visible.size()) + " visible tokens");
        }
        Tensor<T> zd = add_rowvec(matmul(z, dec_embed_w_), dec_embed_b_);
        return overwrite_rows(broadcast_row(mask_token_, cfg_.n_tokens()), visible, zd);
    }

    // Returns predictions for all N tokens; the loss masks later.
    Tensor<T> decode_masked(const Tensor<T>& z, const MaskVector& mask,
                            const ActivationObserver<T>& observer = {}) const {
        Tensor<T> x = add(decoder_input(z, mask), dec_pos_);
        if (observer) observer("dec.embed", x);
        for (std::size_t i = 0; i < dec_blocks_.size(); ++i) {
            x = run_block(x, dec_blocks_[i], cfg_.encoder_heads);
            if (observer) observer("dec.block" + std::to_string(i), x);
        }
        x = layer_norm(x, dec_norm_.gain, dec_norm_.bias, T(kLayerNormEps));
        return add_rowvec(matmul(x, head_w_), head_b_);
    }

    // Projector (3 FC layers, LayerNorm after each, gelu between) followed by
    // the single-FC predictor aligning to the target dimension.
    Tensor<T> project_visible(const Tensor<T>& z) const {
        if (!cfg_.vdb_enabled) throw contract_error("project_visible: model built without the VDB");
        Tensor<T> x = add_rowvec(matmul(z, proj_w1_), proj_b1_);
        x = gelu(layer_norm(x, proj_ln1_.gain, proj_ln1_.bias, T(kLayerNormEps)));
        x = add_rowvec(matmul(x, proj_w2_), proj_b2_);
        x = gelu(layer_norm(x, proj_ln2_.gain, proj_ln2_.bias, T(kLayerNormEps)));
        x = add_rowvec(matmul(x, proj_w3_), proj_b3_);
        x = layer_norm(x, proj_ln3_.gain, proj_ln3_.bias, T(kLayerNormEps));
        return add_rowvec(matmul(x, pred_w_), pred_b_);
    }

    const Tensor<T>& encoder_positions() const { return enc_pos_; }

private:
    detail::LayerNormParams<T> make_ln(const std::string& name, std::size_t dim, Rng& rng) {
        using Init = typename ParamSet<T>::Init;
        detail::LayerNormParams<T> ln;
        ln.gain = params_.add(name + ".g", {dim}, Init::ones, false, rng);
        ln.bias = params_.add(name + ".b", {dim}, Init::zeros, false, rng);
        return ln;
    }

    detail::BlockParams<T> make_block(const std::string& name, std::size_t dim, Rng& rng) {
        using Init = typename ParamSet<T>::Init;
        detail::BlockParams<T> b;
        b.ln1 = make_ln(name + ".ln1", dim, rng);
        b.wq = params_.add(name + ".attn.wq", {dim, dim}, Init::trunc_normal, true, rng);
        b.bq = params_.add(name + ".attn.bq", {dim}, Init::zeros, true, rng);
        b.wk = params_.add(name + ".attn.wk", {dim, dim}, Init::trunc_normal, true, rng);
        b.bk = params_.add(name + ".attn.bk", {dim}, Init::zeros, true, rng);
        b.wv = params_.add(name + ".attn.wv", {dim, dim}, Init::trunc_normal, true, rng);
        b.bv = params_.add(name + ".attn.bv", {dim}, Init::zeros, true, rng);
        b.wo = params_.add(name + ".attn.wo", {dim, dim}, Init::trunc_normal, true, rng);
        b.bo = params_.add(name + ".attn.bo", {dim}, Init::zeros, true, rng);
        b.ln2 = make_ln(name + ".ln2", dim, rng);
        b.w1 = params_.add(name + ".mlp.w1", {dim, 4 * dim}, Init::trunc_normal, true, rng);
        b.b1 = params_.add(name + ".mlp.b1", {4 * dim}, Init::zeros, true, rng);
        b.w2 = params_.add(name + ".mlp.w2", {4 * dim, dim}, Init::trunc_normal, true, rng);
        b.b2 = params_.add(name + ".mlp.b2", {dim}, Init::zeros, true, rng);
        return b;
    }

    Tensor<T> run_block(const Tensor<T>& x, const detail::BlockParams<T>& b, std::size_t heads) const {
        const std::size_t dim = x.extent(1);
        const std::size_t dh = dim / heads;
        const T att_scale = T(1) / std::sqrt(static_cast<T>(dh));
        Tensor<T> h = layer_norm(x, b.ln1.gain, b.ln1.bias, T(kLayerNormEps));
        Tensor<T> q = add_rowvec(matmul(h, b.wq), b.bq);
        Tensor<T> k = add_rowvec(matmul(h, b.wk), b.bk);
        Tensor<T> v = add_rowvec(matmul(h, b.wv), b.bv);
        std::vector<Tensor<T>> head_outs;
        head_outs.reserve(heads);
        for (std::size_t i = 0; i < heads; ++i) {
            const std::size_t c0 = i * dh, c1 = (i + 1) * dh;
            Tensor<T> qh = slice_cols(q, c0, c1);
            Tensor<T> kh = slice_cols(k, c0, c1);
            Tensor<T> vh = slice_cols(v, c0, c1);
            Tensor<T> attn = softmax_last(scale(matmul(qh, transpose(kh)), att_scale));
            head_outs.push_back(matmul(attn, vh));
        }
        Tensor<T> o = add_rowvec(matmul(concat_cols(head_outs), b.wo), b.bo);
        Tensor<T> y = add(x, o);
        Tensor<T> m = layer_norm(y, b.ln2.gain, b.ln2.bias, T(kLayerNormEps));
        m = add_rowvec(matmul(gelu(add_rowvec(matmul(m, b.w1), b.b1)), b.w2), b.b2);
        return add(y, m);
    }

    void check_tokens(const Tensor<T>& tokens, const MaskVector& mask) const {
        if (tokens.rank() != 2 || tokens.extent(0) != cfg_.n_tokens() ||
            tokens.extent(1) != cfg_.token_dim()) {
            throw shape_error("model: tokens " + shape_str(tokens.shape()) + " do not match config [" +
                              std::to_string(cfg_.n_tokens()) + "," + std::to_string(cfg_.token_dim()) + "]");
        }
        if (mask.n_tokens != cfg_.n_tokens()) throw shape_error("model: mask length mismatch");
    }

    ModelConfig cfg_;
    ParamSet<T> params_;
    Tensor<T> embed_w_, embed_b_;
    std::vector<detail::BlockParams<T>> enc_blocks_;
    detail::LayerNormParams<T> enc_norm_;
    Tensor<T> dec_embed_w_, dec_embed_b_, mask_token_;
    std::vector<detail::BlockParams<T>> dec_blocks_;
    detail::LayerNormParams<T> dec_norm_;
    Tensor<T> head_w_, head_b_;
    Tensor<T> proj_w1_, proj_b1_, proj_w2_, proj_b2_, proj_w3_, proj_b3_;
    detail::LayerNormParams<T> proj_ln1_, proj_ln2_, proj_ln3_;
    Tensor<T> pred_w_, pred_b_;
    Tensor<T> enc_pos_, dec_pos_;
};

// ---------------------------------------------------------------------------
// checkpoint format: magic "DMJC", u32 config text length, config text as
// key=value lines, u32 param count, then per parameter: u32 name length,
// name, u32 rank, u32 extents, f32 data. Save/load round-trips bitwise.
// ---------------------------------------------------------------------------

namespace detail {

inline void ck_write_u32(std::ostream& os, std::uint32_t v) {
    os.write(reinterpret_cast<const char*>(&v), 4);
}

inline std::uint32_t ck_read_u32(std::istream& is, const char* what) {
    std::uint32_t v;
    if (!is.read(reinterpret_cast<char*>(&v), 4))
        throw format_error(std::string("checkpoint: unexpected end of file reading ") + what);
    return v;
}

}  // namespace detail

inline std::string model_config_text(const ModelConfig& cfg) {
    std::ostringstream os;
    os << "image_size=" << cfg.image_size << '\n'
       << "patch_size=" << cfg.patch_size << '\n'
       << "channels=" << cfg.channels << '\n'
       << "encoder_dim=" << cfg.encoder_dim << '\n'
       << "encoder_depth=" << cfg.encoder_depth << '\n'
       << "encoder_heads=" << cfg.encoder_heads << '\n'
       << "decoder_dim=" << cfg.decoder_dim << '\n'
       << "decoder_depth=" << cfg.decoder_depth << '\n'
       << "projector_hidden=" << cfg.projector_hidden << '\n'
       << "target_dim=" << cfg.target_dim << '\n'
       << "vdb_target_dim=" << cfg.vdb_target_dim << '\n'
       << "vdb_enabled=" << (cfg.vdb_enabled ? 1 : 0) << '\n';
    return os.str();
}

inline ModelConfig parse_model_config_text(const std::string& text) {
    ModelConfig cfg;
    std::istringstream is(text);
    std::string line;
    while (std::getline(is, line)) {
        const auto eq = line.find('=');
        if (eq == std::string::npos) continue;
        const std::string key = line.substr(0, eq);
        const std::string value = line.substr(eq + 1);
        const std::size_t v = static_cast<std::size_t>(std::stoull(value));
        if (key == "image_size") cfg.image_size = v;
        else if (key == "patch_size") cfg.patch_size = v;
        else if (key == "channels") cfg.channels = v;
        else if (key == "encoder_dim") cfg.encoder_dim = v;
        else if (key == "encoder_depth") cfg.encoder_depth = v;
        else if (key == "encoder_heads") cfg.encoder_heads = v;
        else if (key == "decoder_dim") cfg.decoder_dim = v;
        else if (key == "decoder_depth") cfg.decoder_depth = v;
        else if (key == "projector_hidden") cfg.projector_hidden = v;
        else if (key == "target_dim") cfg.target_dim = v;
        else if (key == "vdb_target_dim") cfg.vdb_target_dim = v;
        else if (key == "vdb_enabled") cfg.vdb_enabled = v != 0;
        else throw format_error("checkpoint: unknown config key '" + key + "'");
    }
    return cfg;
}

template <typename T>
void save_checkpoint(const Model<T>& model, const std::string& path) {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw format_error("save_checkpoint: cannot open " + path);
    os.write("DMJC", 4);
    const std::string cfg = model_config_text(model.config());
    detail::ck_write_u32(os, static_cast<std::uint32_t>(cfg.size()));
    os.write(cfg.data(), static_cast<std::streamsize>(cfg.size()));
    const auto& entries = model.params().entries();
    detail::ck_write_u32(os, static_cast<std::uint32_t>(entries.size()));
    for (const auto& e : entries) {
        detail::ck_write_u32(os, static_cast<std::uint32_t>(e.name.size()));
        os.write(e.name.data(), static_cast<std::streamsize>(e.name.size()));
        detail::ck_write_u32(os, static_cast<std::uint32_t>(e.tensor.rank()));
        for (std::size_t d : e.tensor.shape()) detail::ck_write_u32(os, static_cast<std::uint32_t>(d));
        for (T v : e.tensor.values()) {
            const float f = static_cast<float>(v);
            os.write(reinterpret_cast<const char*>(&f), 4);
        }
    }
    if (!os) throw format_error("save_checkpoint: write failed for " + path);
}

template <typename T = float>
Model<T> load_checkpoint(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw format_error("load_checkpoint: cannot open " + path);
    char magic[4];
    if (!is.read(magic, 4) || std::memcmp(magic, "DMJC", 4) != 0) {
        throw format_error("load_checkpoint: bad magic in " + path + ", expected \"DMJC\"");
    }
    const std::uint32_t cfg_len = detail::ck_read_u32(is, "config length");
    std::string cfg_text(cfg_len, '\0');
    if (!is.read(cfg_text.data(), cfg_len)) throw format_error("load_checkpoint: truncated config block");
    const ModelConfig cfg = parse_model_config_text(cfg_text);
    Rng dummy(0);
    Model<T> model(cfg, dummy);
    const std::uint32_t count = detail::ck_read_u32(is, "parameter count");
    auto& entries = model.params().entries();
    if (count != entries.size()) {
        throw format_error("load_checkpoint: file holds " + std::to_string(count) +
                           " parameters, model wants " + std::to_string(entries.size()));
    }
    for (auto& e : entries) {
        const std::uint32_t name_len = detail::ck_read_u32(is, "parameter name length");
        std::string name(name_len, '\0');
        if (!is.read(name.data(), name_len)) throw format_error("load_checkpoint: truncated name");
        if (name != e.name) {
            throw format_error("load_checkpoint: parameter '" + name + "' where '" + e.name +
                               "' was expected");
        }
        const std::uint32_t rank = detail::ck_read_u32(is, "parameter rank");
        Shape shape(rank);
        for (auto& d : shape) d = detail::ck_read_u32(is, "parameter extent");
        if (shape != e.tensor.shape()) {
            throw format_error("load_checkpoint: parameter '" + name + "' has shape " +
                               shape_str(shape) + ", expected " + shape_str(e.tensor.shape()));
        }
        auto vals = e.tensor.values_mut();
        for (auto& v : vals) {
            float f;
            if (!is.read(reinterpret_cast<char*>(&f), 4))
                throw format_error("load_checkpoint: truncated data for '" + name + "'");
            v = static_cast<T>(f);
        }
    }
    return model;
}

}  // namespace dmjd
