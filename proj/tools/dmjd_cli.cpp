// Command-line surface for the DMJD training laboratory.
//
// Verbs: gen-data, pretrain, probe, compare, ablate, grad-check, mask-stats.
// Exit codes: 0 success, 2 config error, 3 data-format error, 4 numeric failure.

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>

#include <CLI11.hpp>

#include "dmjd/harness.hpp"

using namespace dmjd;

namespace {

struct GlobalArgs {
    std::string config_path;
    std::optional<std::uint64_t> seed;
    std::string out_dir = ".";
    std::size_t threads = 1;
};

ExperimentConfig load_config(const GlobalArgs& g) {
    if (g.config_path.empty()) throw config_error("this command needs --config PATH");
    ExperimentConfig cfg = ExperimentConfig::parse_file(g.config_path);
    if (g.seed) cfg.seed = *g.seed;
    return cfg;
}

int cmd_gen_data(const GlobalArgs& g, std::size_t n, std::size_t size, std::size_t classes,
                 const std::string& out_file) {
    const std::uint64_t seed = g.seed.value_or(0);
    Dataset ds = generate_toy_dataset(n, size, classes, seed);
    save_dataset(ds, out_file);
    std::printf("wrote %zu %zux%zux%zu images, %zu classes, seed %llu -> %s\n", ds.size(), ds.h,
                ds.w, ds.c, ds.class_count, static_cast<unsigned long long>(seed), out_file.c_str());
    return 0;
}

int cmd_pretrain(const GlobalArgs& g) {
    ExperimentConfig cfg = load_config(g);
    const std::string note = cfg.decoder_depth_note();
    if (!note.empty()) std::fprintf(stderr, "note: %s\n", note.c_str());
    PretrainResult result = run_pretrain(cfg, g.out_dir);
    const auto& last = result.train.epochs.back();
    std::printf("run dir: %s\n", result.run_dir.c_str());
    std::printf("epochs %zu  ete %zu  final train loss_mim %.6g  loss_vis %.6g  loss_total %.6g\n",
                result.train.epochs.size(), last.ete, last.loss_mim, last.loss_vis, last.loss_total);
    if (!result.validation.epochs.empty()) {
        const auto& v = result.validation.epochs.back();
        std::printf("final validation loss_mim %.6g  loss_vis %.6g  loss_total %.6g\n", v.loss_mim,
                    v.loss_vis, v.loss_total);
    }
    return 0;
}

int cmd_probe(const GlobalArgs& g, const std::string& checkpoint, const std::string& data,
              std::size_t epochs, bool show_train) {
    Dataset ds = load_dataset(data);
    ProbeResult probe = run_linear_probe(checkpoint, ds, epochs, g.seed.value_or(0));
    std::printf("linear probe: held-out top-1 accuracy %.4f over %zu classes\n",
                probe.heldout_accuracy, probe.classes);
    if (show_train) std::printf("train-split top-1 accuracy %.4f\n", probe.train_accuracy);
    return 0;
}

int cmd_compare(const std::string& run_a, const std::string& run_b, double threshold,
                const std::string& column, bool use_train) {
    CompareReport report = compare_runs(run_a, run_b, threshold, column, !use_train);
    std::fputs(report.text().c_str(), stdout);
    return 0;
}

int cmd_ablate(const GlobalArgs& g, const std::string& grid) {
    ExperimentConfig base = load_config(g);
    AblationResult result = run_ablation(base, grid, g.out_dir, std::max<std::size_t>(1, g.threads));
    std::size_t failed = 0;
    for (const auto& m : result.members) {
        if (m.ok) {
            std::printf("[ok]   %s  %s\n", m.hash_hex.c_str(), m.desc.c_str());
        } else {
            ++failed;
            std::printf("[FAIL] %s  %s\n       %s\n", m.hash_hex.c_str(), m.desc.c_str(),
                        m.error_msg.c_str());
        }
    }
    std::printf("aggregated metrics: %s (%zu of %zu members succeeded)\n", result.csv_path.c_str(),
                result.members.size() - failed, result.members.size());
    return 0;
}

int cmd_grad_check(const GlobalArgs& g, double tol) {
    ObjectiveGradCheck check = run_objective_grad_check(tol, g.seed.value_or(0));
    for (const auto& r : check.results) {
        std::printf("%-22s max rel err %.3e %s\n", r.name.c_str(), r.report.max_rel_err,
                    r.report.max_rel_err <= tol ? "ok" : "FAIL");
    }
    std::printf("overall max rel err %.3e (tol %.1e), worst parameter %s: %s\n", check.max_rel_err,
                tol, check.worst_param.c_str(), check.pass() ? "PASS" : "FAIL");
    if (!check.pass()) throw numeric_error("gradient check failed");
    return 0;
}

int cmd_mask_stats(const GlobalArgs& g, std::size_t trials, const std::string& export_path) {
    ExperimentConfig cfg = load_config(g);
    const std::size_t grid = cfg.image_size / cfg.patch_size;
    const std::size_t n = grid * grid;
    TrainConfig tc = cfg.train_config();
    const auto plan = plan_view_quotas(n, tc.m_corr, tc.k_views, tc.effective_m_pred(),
                                       tc.mask_pattern(grid, grid));
    Rng rng(g.seed.value_or(cfg.seed));

    std::printf("N=%zu tokens (%zux%zu grid), K=%zu, pattern=%s, m_corr=%.4f, target m_pred=%.4f\n",
                n, grid, grid, plan.k_views, pattern_name(plan.pattern.kind), plan.corruption_rate,
                plan.target_pred_rate);
    std::printf("fresh-token quotas per view:");
    for (std::size_t q : plan.new_quota) std::printf(" %zu", q);
    std::printf("\n");

    double rate_min = 1.0, rate_max = 0.0, rate_sum = 0.0;
    std::size_t regulation_violations = 0;
    std::vector<std::size_t> hits(n, 0);
    std::vector<MaskVector> first_views;
    for (std::size_t t = 0; t < trials; ++t) {
        CumulativeMask cum = CumulativeMask::empty(n);
        std::vector<MaskVector> views;
        for (std::size_t k = 0; k < plan.k_views; ++k) {
            MaskVector v = sample_disjoint_view(plan, k, cum, rng);
            if (k >= 1) {
                std::size_t fresh = 0;
                for (std::size_t i = 0; i < n; ++i) fresh += (v.bits[i] && !cum.covered[i]);
                if (fresh == 0) ++regulation_violations;
            }
            cum = accumulate(std::move(cum), v);
            for (std::size_t i = 0; i < n; ++i) hits[i] += v.bits[i];
            views.push_back(std::move(v));
        }
        const double rate = prediction_rate(views);
        rate_min = std::min(rate_min, rate);
        rate_max = std::max(rate_max, rate);
        rate_sum += rate;
        if (t == 0) first_views = views;
    }
    const double draws = static_cast<double>(trials * plan.k_views);
    double freq_min = 1.0, freq_max = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        const double f = static_cast<double>(hits[i]) / draws;
        freq_min = std::min(freq_min, f);
        freq_max = std::max(freq_max, f);
    }
    std::printf("%zu trials: realized m_pred mean %.5f, min %.5f, max %.5f (quantization 1/N = %.5f)\n",
                trials, rate_sum / static_cast<double>(trials), rate_min, rate_max,
                1.0 / static_cast<double>(n));
    std::printf("per-token masking frequency in [%.4f, %.4f]; regulation violations: %zu\n", freq_min,
                freq_max, regulation_violations);
    if (!export_path.empty()) {
        std::ofstream os(export_path);
        if (!os) throw format_error("mask-stats: cannot open " + export_path);
        write_mask_views(os, first_views);
        std::printf("wrote first trial's %zu views to %s\n", first_views.size(), export_path.c_str());
    }
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"DMJD training laboratory: disjoint masking with joint distillation"};
    app.require_subcommand(1);
    app.fallthrough();  // global flags work before or after the verb

    GlobalArgs g;
    app.add_option("--config", g.config_path, "experiment config file (key = value lines)");
    app.add_option("--seed", g.seed, "seed override");
    app.add_option("--out", g.out_dir, "output directory");
    app.add_option("--threads", g.threads, "worker threads for ablation members");

    auto* gen = app.add_subcommand("gen-data", "generate a labeled toy dataset");
    std::size_t gen_n = 1000, gen_size = 32, gen_classes = 10;
    std::string gen_out = "toy.dmjd";
    gen->add_option("--n", gen_n, "number of images");
    gen->add_option("--size", gen_size, "square image size in pixels");
    gen->add_option("--classes", gen_classes, "class count");
    gen->add_option("--file", gen_out, "output dataset file");

    auto* pre = app.add_subcommand("pretrain", "run a pretraining experiment");

    auto* probe = app.add_subcommand("probe", "linear-probe a frozen checkpoint");
    std::string probe_ckpt, probe_data;
    std::size_t probe_epochs = 100;
    bool probe_train_acc = false;
    probe->add_option("--checkpoint", probe_ckpt, "checkpoint file")->required();
    probe->add_option("--data", probe_data, "labeled dataset file")->required();
    probe->add_option("--epochs", probe_epochs, "probe training epochs");
    probe->add_flag("--train-acc", probe_train_acc, "also report train-split accuracy");

    auto* cmp = app.add_subcommand("compare", "compare two runs against a loss threshold");
    std::string cmp_a, cmp_b, cmp_column = "loss_mim";
    double cmp_threshold = 0.0;
    bool cmp_train = false;
    cmp->add_option("run_a", cmp_a, "first run directory")->required();
    cmp->add_option("run_b", cmp_b, "second run directory")->required();
    cmp->add_option("--threshold", cmp_threshold, "loss threshold")->required();
    cmp->add_option("--column", cmp_column, "metrics column (loss_mim|loss_vis|loss_total)");
    cmp->add_flag("--train-metrics", cmp_train, "threshold on training metrics instead of validation");

    auto* abl = app.add_subcommand("ablate", "run a config grid and aggregate metrics");
    std::string abl_grid;
    abl->add_option("--grid", abl_grid, "grid spec: key=v1,v2;key2=w1,w2")->required();

    auto* gc = app.add_subcommand("grad-check", "finite-difference check of the full objective");
    double gc_tol = 1e-3;
    gc->add_option("--tol", gc_tol, "relative-error tolerance");

    auto* ms = app.add_subcommand("mask-stats", "sample disjoint masking plans and report statistics");
    std::size_t ms_trials = 1000;
    std::string ms_export;
    ms->add_option("--trials", ms_trials, "number of sampled plans");
    ms->add_option("--export", ms_export, "write the first trial's views ('N K' header, 0/1 rows)");

    try {
        app.parse(argc, argv);
        if (gen->parsed()) return cmd_gen_data(g, gen_n, gen_size, gen_classes, gen_out);
        if (pre->parsed()) return cmd_pretrain(g);
        if (probe->parsed()) return cmd_probe(g, probe_ckpt, probe_data, probe_epochs, probe_train_acc);
        if (cmp->parsed()) return cmd_compare(cmp_a, cmp_b, cmp_threshold, cmp_column, cmp_train);
        if (abl->parsed()) return cmd_ablate(g, abl_grid);
        if (gc->parsed()) return cmd_grad_check(g, gc_tol);
        if (ms->parsed()) return cmd_mask_stats(g, ms_trials, ms_export);
        return 0;
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? 0 : 2;
    } catch (const format_error& e) {
        std::fprintf(stderr, "data-format error: %s\n", e.what());
        return 3;
    } catch (const numeric_error& e) {
        std::fprintf(stderr, "numeric failure: %s\n", e.what());
        return 4;
    } catch (const config_error& e) {
        std::fprintf(stderr, "config error: %s\n", e.what());
        return 2;
    } catch (const contract_error& e) {
        std::fprintf(stderr, "config error: %s\n", e.what());
        return 2;
    } catch (const lifecycle_error& e) {
        std::fprintf(stderr, "config error: %s\n", e.what());
        return 2;
    } catch (const std::exception& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return 1;
    }
}
