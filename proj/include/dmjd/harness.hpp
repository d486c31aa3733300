#pragma once

#include <chrono>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <future>
#include <iomanip>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "dmjd/config.hpp"
#include "dmjd/dataset.hpp"
#include "dmjd/grad_check.hpp"
#include "dmjd/model.hpp"
#include "dmjd/trainer.hpp"

namespace dmjd {

constexpr const char* kMetricsHeader = "epoch,ete,steps,lr,loss_mim,loss_vis,loss_total,m_pred_realized,wall_s";
constexpr const char* kMetricsSchemaVersion = "dmjd-metrics-v1";
constexpr std::uint64_t kValMaskSeed = 0x56414C5F4D41534Bull;

namespace detail {

inline std::string format_metric(double v) {
    char buf[64];
    std::snprintf(buf, sizeof(buf), "%.10g", v);
    return buf;
}

inline std::string metrics_row(const EpochStats& s) {
    std::ostringstream os;
    os << (s.epoch + 1) << ',' << s.ete << ',' << s.steps << ',' << format_metric(s.lr) << ','
       << format_metric(s.loss_mim) << ',' << format_metric(s.loss_vis) << ','
       << format_metric(s.loss_total) << ',' << format_metric(s.m_pred_realized) << ','
       << format_metric(s.wall_s);
    return os.str();
}

inline std::vector<std::string> split_csv_line(const std::string& line) {
    std::vector<std::string> out;
    std::string cur;
    for (char c : line) {
        if (c == ',') {
            out.push_back(cur);
            cur.clear();
        } else {
            cur.push_back(c);
        }
    }
    out.push_back(cur);
    return out;
}

}  // namespace detail

// Parses and validates a metrics CSV: exact header, 9 numeric columns per
// row, strictly increasing epoch index.
inline std::vector<EpochStats> load_metrics(const std::string& path) {
    std::ifstream is(path);
    if (!is) throw format_error("load_metrics: cannot open " + path);
    std::string line;
    if (!std::getline(is, line) || line != kMetricsHeader)
        throw format_error("load_metrics: bad header in " + path);
    std::vector<EpochStats> rows;
    std::size_t line_no = 1;
    while (std::getline(is, line)) {
        ++line_no;
        if (line.empty()) continue;
        const auto cols = detail::split_csv_line(line);
        if (cols.size() != 9)
            throw format_error("load_metrics: line " + std::to_string(line_no) + " has " +
                               std::to_string(cols.size()) + " columns, expected 9");
        EpochStats s;
        try {
            s.epoch = std::stoull(cols[0]) - 1;
            s.ete = std::stoull(cols[1]);
            s.steps = std::stoull(cols[2]);
            s.lr = std::stod(cols[3]);
            s.loss_mim = std::stod(cols[4]);
            s.loss_vis = std::stod(cols[5]);
            s.loss_total = std::stod(cols[6]);
            s.m_pred_realized = std::stod(cols[7]);
            s.wall_s = std::stod(cols[8]);
        } catch (const std::exception&) {
            throw format_error("load_metrics: line " + std::to_string(line_no) + " is not numeric");
        }
        if (!rows.empty() && s.epoch <= rows.back().epoch)
            throw format_error("load_metrics: epoch index not increasing at line " +
                               std::to_string(line_no));
        rows.push_back(s);
    }
    return rows;
}

inline bool metrics_equal_ignoring_wall(const std::string& path_a, const std::string& path_b) {
    auto strip = [](const std::string& path) {
        std::ifstream is(path);
        if (!is) throw format_error("metrics compare: cannot open " + path);
        std::ostringstream out;
        std::string line;
        while (std::getline(is, line)) {
            const auto last = line.rfind(',');
            out << line.substr(0, last) << '\n';
        }
        return out.str();
    };
    return strip(path_a) == strip(path_b);
}

// ---------------------------------------------------------------------------
// pretraining runs
// ---------------------------------------------------------------------------

struct PretrainResult {
    std::string run_dir;
    RunStats train;
    RunStats validation;
};

namespace detail {

template <typename T>
struct PipelineStorage {
    std::vector<TargetTensor<T>> external;

    TargetPipeline<T> build(const ExperimentConfig& cfg, TargetKind kind, std::size_t n_tokens,
                            std::size_t token_dim) {
        TargetPipeline<T> p;
        p.kind = kind;
        p.pixel_norm = cfg.pixel_norm;
        p.hog = HogParams{cfg.hog_bins, cfg.hog_cells};
        if (kind == TargetKind::external) {
            if (external.empty()) {
                // dimension read back from the file header
                std::ifstream probe(cfg.external_path, std::ios::binary);
                if (!probe) throw format_error("external targets: cannot open " + cfg.external_path);
                probe.seekg(8);
                std::uint32_t dim = 0;
                probe.read(reinterpret_cast<char*>(&dim), 4);
                (void)token_dim;
                external = external_target_load<T>(cfg.external_path, n_tokens, dim);
            }
            p.external = &external;
        }
        return p;
    }
};

// Fixed validation protocol shared by every run on a dataset: one uniform
// view per validation image at val_m_corr, masks derived from the image
// index alone so they repeat identically across epochs and runs.
inline MaskVector validation_mask(std::size_t n_tokens, double val_m_corr, std::size_t image_index) {
    Rng rng(kValMaskSeed ^ (0x9e3779b97f4a7c15ull * (image_index + 1)));
    return sample_mask(n_tokens, MaskPattern{}, val_m_corr, rng);
}

template <typename T>
EpochStats validate_epoch(Model<T>& model, const std::vector<Image<T>>& images,
                          const std::vector<std::size_t>& val_indices, const ExperimentConfig& cfg,
                          const TargetPipeline<T>& mpb, const std::optional<TargetPipeline<T>>& vdb,
                          const EpochStats& train_stats) {
    const auto t0 = std::chrono::steady_clock::now();
    const auto& mc = model.config();
    double sum_lm = 0.0, sum_lv = 0.0, sum_rate = 0.0;
    for (std::size_t idx : val_indices) {
        const Image<T>& img = images[idx];
        const Tensor<T> tokens = patchify(img, mc.patch_size).tokens;
        const MaskVector mask = validation_mask(mc.n_tokens(), cfg.val_m_corr, idx);
        const TargetTensor<T> target = mpb.make(img, mc.patch_size, idx);
        Tensor<T> z = model.encode_visible(tokens, mask);
        sum_lm += static_cast<double>(mim_loss(model.decode_masked(z, mask), target, mask).item());
        if (vdb) {
            const TargetTensor<T> vt =
                vdb->same_extractor(mpb) ? target : vdb->make(img, mc.patch_size, idx);
            sum_lv += static_cast<double>(
                visible_distill_loss(model.project_visible(z), vt, mask, cfg.vdb_norm,
                                     static_cast<T>(cfg.huber_beta))
                    .item());
        }
        sum_rate += static_cast<double>(mask.masked_count()) / static_cast<double>(mask.n_tokens);
    }
    const double n = static_cast<double>(val_indices.size());
    EpochStats s = train_stats;
    s.loss_mim = sum_lm / n;
    s.loss_vis = vdb ? sum_lv / n : 0.0;
    s.loss_total = s.loss_vis + cfg.lambda * s.loss_mim;
    s.m_pred_realized = sum_rate / n;
    s.wall_s = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    return s;
}

template <typename T>
PretrainResult run_pretrain_impl(const ExperimentConfig& cfg, const Dataset& ds,
                                 const std::string& run_dir) {
    namespace fs = std::filesystem;
    fs::create_directories(run_dir);

    PipelineStorage<T> storage;
    const std::size_t n_tokens = (cfg.image_size / cfg.patch_size) * (cfg.image_size / cfg.patch_size);
    const std::size_t token_dim = cfg.patch_size * cfg.patch_size * ds.c;
    TargetPipeline<T> mpb = storage.build(cfg, cfg.target, n_tokens, token_dim);
    std::optional<TargetPipeline<T>> vdb;
    if (cfg.vdb) vdb = storage.build(cfg, cfg.vdb_kind(), n_tokens, token_dim);

    ModelConfig mc = cfg.model_config(ds.c, 0, 0);
    mc.target_dim = mpb.dim(mc);
    mc.vdb_target_dim = vdb ? vdb->dim(mc) : mc.target_dim;

    Rng root(cfg.seed);
    Rng init_rng(root.next_u64());
    Model<T> model(mc, init_rng);
    TrainConfig tc = cfg.train_config();
    tc.seed = root.next_u64();
    Trainer<T> trainer(model, tc, mpb, vdb);

    auto [train_idx, val_idx] = split_indices(ds.size(), cfg.val_fraction, cfg.split_seed);
    const auto images = ds.images<T>();

    {
        std::ofstream cfg_out(fs::path(run_dir) / "config.cfg");
        cfg_out << cfg.canonical_text();
        std::ofstream schema_out(fs::path(run_dir) / "schema.txt");
        schema_out << kMetricsSchemaVersion << '\n';
    }
    std::ofstream metrics(fs::path(run_dir) / "metrics.csv");
    std::ofstream val_metrics(fs::path(run_dir) / "val_metrics.csv");
    metrics << kMetricsHeader << '\n';
    val_metrics << kMetricsHeader << '\n';

    PretrainResult result;
    result.run_dir = run_dir;
    for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
        EpochStats train_stats = trainer.train_epoch(images, train_idx, epoch);
        metrics << metrics_row(train_stats) << '\n';
        metrics.flush();
        result.train.epochs.push_back(train_stats);
        if (!val_idx.empty()) {
            EpochStats val_stats = validate_epoch(model, images, val_idx, cfg, mpb, vdb, train_stats);
            val_metrics << metrics_row(val_stats) << '\n';
            val_metrics.flush();
            result.validation.epochs.push_back(val_stats);
        }
    }
    save_checkpoint(model, (fs::path(run_dir) / "checkpoint.dmjc").string());
    return result;
}

}  // namespace detail

// Executes a full pretraining run into out_dir/<run_name>: config snapshot,
// per-epoch training and validation metrics, final checkpoint.
inline PretrainResult run_pretrain(const ExperimentConfig& cfg, const std::string& out_dir) {
    const Dataset ds = load_dataset(cfg.dataset_path);
    auto problems = cfg.validate(ds);
    if (!problems.empty()) {
        std::string msg = "run_pretrain: configuration invalid:";
        for (const auto& p : problems) msg += "\n  - " + p;
        throw config_error(msg);
    }
    const std::string run_dir = (std::filesystem::path(out_dir) / cfg.run_name).string();
    if (cfg.precision == "f64") return detail::run_pretrain_impl<double>(cfg, ds, run_dir);
    return detail::run_pretrain_impl<float>(cfg, ds, run_dir);
}

// ---------------------------------------------------------------------------
// full-objective gradient check
// ---------------------------------------------------------------------------

struct ObjectiveGradCheck {
    std::vector<ParamGradCheckResult> results;
    double max_rel_err = 0.0;
    std::string worst_param;
    double tol = 0.0;

    bool pass() const { return max_rel_err <= tol; }
};

// Finite-difference check of the joint objective (masked reconstruction plus
// visible distillation over K disjoint views of one image) against the tape
// gradients, parameter group by parameter group, at 64-bit precision.
inline ObjectiveGradCheck run_objective_grad_check(double tol = 1e-3, std::uint64_t seed = 0) {
    ModelConfig mc;
    mc.image_size = 16;
    mc.patch_size = 8;
    mc.channels = 3;
    mc.encoder_dim = 16;
    mc.encoder_depth = 2;
    mc.encoder_heads = 2;
    mc.decoder_dim = 16;
    mc.decoder_depth = 2;
    mc.projector_hidden = 16;
    mc.target_dim = 192;  // pixel reconstruction
    mc.vdb_target_dim = 18;  // hog distillation, 6 bins x 1 cell x 3 channels
    mc.vdb_enabled = true;

    Rng root(seed);
    Rng init_rng(root.next_u64());
    Model<double> model(mc, init_rng);

    const Dataset ds = generate_toy_dataset(1, mc.image_size, 1, root.next_u64());
    const Image<double> img = ds.image<double>(0);
    const Tensor<double> tokens = patchify(img, mc.patch_size).tokens;
    const TargetTensor<double> mpb_target = pixel_target(img, mc.patch_size, NormMode::per_patch_standardize);
    const TargetTensor<double> vdb_target = hog_target(img, mc.patch_size, HogParams{6, 1});

    // masks fixed once so the loss is a pure function of the parameters
    Rng mask_rng(root.next_u64());
    const auto plan = plan_view_quotas(mc.n_tokens(), 0.5, 2, 0.75);
    const auto views = sample_plan_views(plan, mask_rng);

    const double lambda = 1.0, beta = 2.0;
    auto loss_fn = [&] {
        Tensor<double> acc;
        for (const auto& mask : views) {
            Tensor<double> z = model.encode_visible(tokens, mask);
            Tensor<double> lm = mim_loss(model.decode_masked(z, mask), mpb_target, mask);
            Tensor<double> lv = visible_distill_loss(model.project_visible(z), vdb_target, mask,
                                                     NormMode::layer_norm, beta);
            Tensor<double> lt = total_loss(lv, lm, lambda);
            acc = acc.valid() ? add(acc, lt) : lt;
        }
        return scale(acc, 1.0 / static_cast<double>(views.size()));
    };

    ObjectiveGradCheck check;
    check.tol = tol;
    check.results = grad_check_params(model.params(), loss_fn, tol);
    for (const auto& r : check.results) {
        if (r.report.max_rel_err > check.max_rel_err) {
            check.max_rel_err = r.report.max_rel_err;
            check.worst_param = r.name;
        }
    }
    return check;
}

// ---------------------------------------------------------------------------
// linear probing
// ---------------------------------------------------------------------------

struct ProbeResult {
    double heldout_accuracy = 0.0;
    double train_accuracy = 0.0;
    std::size_t classes = 0;
};

// Frozen-encoder evaluation: mean-pooled encoder features of unmasked images,
// standardized by train-split statistics, classified by one linear layer.
inline ProbeResult run_linear_probe(Model<float>& model, const Dataset& ds,
                                    std::size_t probe_epochs, std::uint64_t seed,
                                    double val_fraction = 0.2, std::uint64_t split_seed = 17) {
    if (!ds.labeled()) throw contract_error("run_linear_probe: dataset has no labels");
    const auto& mc = model.config();
    const std::size_t dim = mc.encoder_dim;

    std::vector<float> features(ds.size() * dim);
    for (std::size_t i = 0; i < ds.size(); ++i) {
        const Image<float> img = ds.image<float>(i);
        const Tensor<float> z = model.encode_all(patchify(img, mc.patch_size).tokens);
        const std::size_t n = z.extent(0);
        for (std::size_t j = 0; j < dim; ++j) {
            double acc = 0.0;
            for (std::size_t r = 0; r < n; ++r) acc += z.values()[r * dim + j];
            features[i * dim + j] = static_cast<float>(acc / static_cast<double>(n));
        }
    }

    auto [train_idx, val_idx] = split_indices(ds.size(), val_fraction, split_seed);
    if (train_idx.empty() || val_idx.empty())
        throw config_error("run_linear_probe: split leaves an empty side");

    // standardize features on train statistics
    std::vector<double> mean(dim, 0.0), var(dim, 0.0);
    for (std::size_t i : train_idx)
        for (std::size_t j = 0; j < dim; ++j) mean[j] += features[i * dim + j];
    for (std::size_t j = 0; j < dim; ++j) mean[j] /= static_cast<double>(train_idx.size());
    for (std::size_t i : train_idx)
        for (std::size_t j = 0; j < dim; ++j) {
            const double c = features[i * dim + j] - mean[j];
            var[j] += c * c;
        }
    for (std::size_t j = 0; j < dim; ++j) var[j] /= static_cast<double>(train_idx.size());
    for (std::size_t i = 0; i < ds.size(); ++i)
        for (std::size_t j = 0; j < dim; ++j)
            features[i * dim + j] = static_cast<float>(
                (features[i * dim + j] - mean[j]) / std::sqrt(var[j] + 1e-8));

    Rng rng(seed);
    ParamSet<float> params;
    Tensor<float> w = params.add("probe.w", {dim, ds.class_count}, ParamSet<float>::Init::trunc_normal, true, rng);
    Tensor<float> b = params.add("probe.b", {ds.class_count}, ParamSet<float>::Init::zeros, false, rng);
    AdamW<float> opt(params, AdamWConfig{0.9, 0.999, 1e-8, 0.0});

    const std::size_t batch = 128;
    std::vector<std::size_t> order(train_idx.begin(), train_idx.end());
    for (std::size_t epoch = 0; epoch < probe_epochs; ++epoch) {
        rng.shuffle(order);
        for (std::size_t start = 0; start < order.size(); start += batch) {
            const std::size_t end = std::min(order.size(), start + batch);
            std::vector<float> xb((end - start) * dim);
            std::vector<std::size_t> yb(end - start);
            for (std::size_t r = start; r < end; ++r) {
                std::copy_n(features.data() + order[r] * dim, dim, xb.data() + (r - start) * dim);
                yb[r - start] = ds.labels[order[r]];
            }
            Tape<float> tape;
            auto x = Tensor<float>::from({end - start, dim}, std::move(xb));
            auto logits = add_rowvec(matmul(x, w), b);
            backward(softmax_cross_entropy(logits, yb));
            opt.step(params, 0.05);
            params.zero_grads();
        }
    }

    auto accuracy = [&](const std::vector<std::size_t>& idx) {
        std::size_t hits = 0;
        for (std::size_t i : idx) {
            auto x = Tensor<float>::from({1, dim}, std::vector<float>(features.begin() + static_cast<std::ptrdiff_t>(i * dim),
                                                                      features.begin() + static_cast<std::ptrdiff_t>((i + 1) * dim)));
            auto logits = add_rowvec(matmul(x, w), b);
            std::size_t best = 0;
            for (std::size_t c = 1; c < ds.class_count; ++c)
                if (logits.values()[c] > logits.values()[best]) best = c;
            hits += best == ds.labels[i];
        }
        return static_cast<double>(hits) / static_cast<double>(idx.size());
    };
    return {accuracy(val_idx), accuracy(train_idx), ds.class_count};
}

inline ProbeResult run_linear_probe(const std::string& checkpoint_path, const Dataset& ds,
                                    std::size_t probe_epochs, std::uint64_t seed,
                                    double val_fraction = 0.2, std::uint64_t split_seed = 17) {
    Model<float> model = load_checkpoint<float>(checkpoint_path);
    return run_linear_probe(model, ds, probe_epochs, seed, val_fraction, split_seed);
}

// ---------------------------------------------------------------------------
// run comparison
// ---------------------------------------------------------------------------

struct CrossPoint {
    bool crossed = false;
    std::size_t epoch = 0;  // 1-based, first epoch at or under the threshold
    std::size_t ete = 0;
    double wall = 0.0;  // cumulative training seconds through that epoch
};

struct CompareReport {
    double threshold = 0.0;
    std::string column;
    bool used_validation = true;
    CrossPoint a, b;
    bool ratios_defined = false;
    double epoch_ratio = 0.0, ete_ratio = 0.0, wall_ratio = 0.0;

    std::string text() const {
        std::ostringstream os;
        os.precision(10);
        os << "threshold " << threshold << " on " << (used_validation ? "validation " : "training ")
           << column << '\n';
        auto line = [&](const char* tag, const CrossPoint& p) {
            os << "run " << tag << ": ";
            if (p.crossed)
                os << "crossed at epoch " << p.epoch << " (ete " << p.ete << ", wall "
                   << std::fixed << std::setprecision(1) << p.wall << "s)" << std::defaultfloat
                   << std::setprecision(10) << '\n';
            else
                os << "never crossed\n";
        };
        line("A", a);
        line("B", b);
        if (ratios_defined) {
            os << "ratio A/B  epochs: " << epoch_ratio << "  ete: " << ete_ratio
               << "  wall: " << wall_ratio << '\n';
        }
        return os.str();
    }
};

namespace detail {

inline double metric_column(const EpochStats& s, const std::string& column) {
    if (column == "loss_mim") return s.loss_mim;
    if (column == "loss_vis") return s.loss_vis;
    if (column == "loss_total") return s.loss_total;
    throw config_error("compare_runs: unknown column '" + column + "'");
}

inline CrossPoint find_crossing(const std::vector<EpochStats>& rows,
                                const std::vector<EpochStats>& train_rows, double threshold,
                                const std::string& column) {
    CrossPoint p;
    double wall = 0.0;
    for (std::size_t i = 0; i < rows.size(); ++i) {
        wall += i < train_rows.size() ? train_rows[i].wall_s : 0.0;
        if (metric_column(rows[i], column) <= threshold) {
            p.crossed = true;
            p.epoch = rows[i].epoch + 1;
            p.ete = rows[i].ete;
            p.wall = wall;
            return p;
        }
    }
    return p;
}

inline std::string config_value(const std::string& text, const std::string& key) {
    std::istringstream is(text);
    std::string line;
    while (std::getline(is, line)) {
        const auto eq = line.find('=');
        if (eq == std::string::npos) continue;
        if (trim(line.substr(0, eq)) == key) return trim(line.substr(eq + 1));
    }
    return "";
}

}  // namespace detail

// First threshold crossing per run plus epoch/ETE/wall ratios. Runs must
// share the dataset and model geometry; thresholds default to the
// validation loss_mim column.
inline CompareReport compare_runs(const std::string& dir_a, const std::string& dir_b,
                                  double threshold, const std::string& column = "loss_mim",
                                  bool use_validation = true) {
    namespace fs = std::filesystem;
    auto read_cfg = [](const std::string& dir) {
        std::ifstream is(fs::path(dir) / "config.cfg");
        if (!is) throw format_error("compare_runs: missing config.cfg in " + dir);
        std::stringstream buf;
        buf << is.rdbuf();
        return buf.str();
    };
    const std::string cfg_a = read_cfg(dir_a), cfg_b = read_cfg(dir_b);
    for (const char* key : {"dataset", "image_size", "patch_size", "encoder_dim", "encoder_depth",
                            "encoder_heads", "decoder_dim", "decoder_depth", "projector_hidden",
                            "val_fraction", "split_seed", "val_m_corr"}) {
        if (detail::config_value(cfg_a, key) != detail::config_value(cfg_b, key)) {
            throw config_error("compare_runs: runs disagree on '" + std::string(key) + "' (" +
                               detail::config_value(cfg_a, key) + " vs " +
                               detail::config_value(cfg_b, key) + ")");
        }
    }

    const char* file = use_validation ? "val_metrics.csv" : "metrics.csv";
    auto rows_a = load_metrics((fs::path(dir_a) / file).string());
    auto rows_b = load_metrics((fs::path(dir_b) / file).string());
    auto train_a = load_metrics((fs::path(dir_a) / "metrics.csv").string());
    auto train_b = load_metrics((fs::path(dir_b) / "metrics.csv").string());

    CompareReport report;
    report.threshold = threshold;
    report.column = column;
    report.used_validation = use_validation;
    report.a = detail::find_crossing(rows_a, train_a, threshold, column);
    report.b = detail::find_crossing(rows_b, train_b, threshold, column);
    if (report.a.crossed && report.b.crossed) {
        report.ratios_defined = true;
        report.epoch_ratio = static_cast<double>(report.a.epoch) / static_cast<double>(report.b.epoch);
        report.ete_ratio = static_cast<double>(report.a.ete) / static_cast<double>(report.b.ete);
        report.wall_ratio = report.a.wall / report.b.wall;
    }
    return report;
}

// ---------------------------------------------------------------------------
// ablation grids
// ---------------------------------------------------------------------------

struct AblationMember {
    std::string desc;
    std::string hash_hex;
    bool ok = false;
    std::string error_msg;
    std::string run_dir;
};

struct AblationResult {
    std::vector<AblationMember> members;
    std::string csv_path;
};

constexpr const char* kAblationHeader =
    "config_hash,config_desc,split,epoch,ete,steps,lr,loss_mim,loss_vis,loss_total,m_pred_realized,wall_s";

// Grid spec: "key=v1,v2;key2=w1,w2" expands to the cartesian product.
inline std::vector<std::vector<std::pair<std::string, std::string>>> expand_grid(
    const std::string& spec, std::size_t max_configs = 64) {
    if (detail::trim(spec).empty()) throw config_error("ablation: empty grid");
    std::vector<std::pair<std::string, std::vector<std::string>>> axes;
    std::istringstream is(spec);
    std::string axis;
    while (std::getline(is, axis, ';')) {
        axis = detail::trim(axis);
        if (axis.empty()) continue;
        const auto eq = axis.find('=');
        if (eq == std::string::npos)
            throw config_error("ablation: grid axis '" + axis + "' is not key=v1,v2");
        const std::string key = detail::trim(axis.substr(0, eq));
        std::vector<std::string> values;
        std::istringstream vs(axis.substr(eq + 1));
        std::string v;
        while (std::getline(vs, v, ',')) {
            v = detail::trim(v);
            if (!v.empty()) values.push_back(v);
        }
        if (key.empty() || values.empty())
            throw config_error("ablation: grid axis '" + axis + "' has no values");
        axes.emplace_back(key, std::move(values));
    }
    if (axes.empty()) throw config_error("ablation: empty grid");
    std::size_t total = 1;
    for (const auto& [key, values] : axes) total *= values.size();
    if (total > max_configs)
        throw config_error("ablation: grid expands to " + std::to_string(total) +
                           " configs, limit is " + std::to_string(max_configs));
    std::vector<std::vector<std::pair<std::string, std::string>>> combos(1);
    for (const auto& [key, values] : axes) {
        std::vector<std::vector<std::pair<std::string, std::string>>> next;
        for (const auto& combo : combos) {
            for (const auto& v : values) {
                auto extended = combo;
                extended.emplace_back(key, v);
                next.push_back(std::move(extended));
            }
        }
        combos = std::move(next);
    }
    return combos;
}

// Runs every grid member; failures are recorded and the rest continue.
// Aggregates all per-epoch metrics into one long-format CSV keyed by the
// member's config hash.
inline AblationResult run_ablation(const ExperimentConfig& base, const std::string& grid_spec,
                                   const std::string& out_root, std::size_t jobs = 1) {
    namespace fs = std::filesystem;
    const auto combos = expand_grid(grid_spec);
    fs::create_directories(out_root);

    struct MemberPlan {
        ExperimentConfig cfg;
        std::string desc;
        std::string hash_hex;
    };
    std::vector<MemberPlan> plans;
    for (const auto& combo : combos) {
        ExperimentConfig cfg = base;
        std::string desc;
        for (const auto& [key, value] : combo) {
            cfg.set(key, value);
            if (!desc.empty()) desc += ";";
            desc += key + "=" + value;
        }
        char hex[32];
        std::snprintf(hex, sizeof(hex), "%016llx",
                      static_cast<unsigned long long>(cfg.hash()));
        cfg.run_name = std::string("member_") + hex;
        plans.push_back({std::move(cfg), std::move(desc), hex});
    }

    AblationResult result;
    result.members.resize(plans.size());
    auto run_member = [&](std::size_t i) {
        AblationMember m;
        m.desc = plans[i].desc;
        m.hash_hex = plans[i].hash_hex;
        try {
            auto r = run_pretrain(plans[i].cfg, out_root);
            m.ok = true;
            m.run_dir = r.run_dir;
        } catch (const std::exception& e) {
            m.ok = false;
            m.error_msg = e.what();
        }
        result.members[i] = std::move(m);
    };

    if (jobs <= 1) {
        for (std::size_t i = 0; i < plans.size(); ++i) run_member(i);
    } else {
        std::vector<std::future<void>> inflight;
        for (std::size_t i = 0; i < plans.size(); ++i) {
            if (inflight.size() >= jobs) {
                inflight.front().wait();
                inflight.erase(inflight.begin());
            }
            inflight.push_back(std::async(std::launch::async, run_member, i));
        }
        for (auto& f : inflight) f.wait();
    }

    const std::string csv_path = (fs::path(out_root) / "ablation.csv").string();
    std::ofstream out(csv_path);
    out << kAblationHeader << '\n';
    for (const auto& m : result.members) {
        if (!m.ok) continue;
        for (const char* split : {"train", "val"}) {
            const std::string file = std::string(split) == "train" ? "metrics.csv" : "val_metrics.csv";
            const auto path = fs::path(m.run_dir) / file;
            if (!fs::exists(path)) continue;
            for (const auto& row : load_metrics(path.string())) {
                out << m.hash_hex << ',' << m.desc << ',' << split << ',' << detail::metrics_row(row)
                    << '\n';
            }
        }
    }
    result.csv_path = csv_path;
    return result;
}

}  // namespace dmjd
