#include <CLI11.hpp>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>

#include "aolkit/certification.hpp"
#include "aolkit/diagnostics.hpp"
#include "aolkit/io.hpp"
#include "aolkit/rng.hpp"
#include "aolkit/training.hpp"

namespace {

constexpr int kExitOk = 0;
constexpr int kExitUsage = 1;
constexpr int kExitValidation = 2;

const std::vector<double> kDefaultEps = {36.0 / 255.0, 72.0 / 255.0, 108.0 / 255.0, 1.0};

/// AOLKIT_THREADS caps worker parallelism. All current evaluation paths are
/// sequential, so any positive cap is honored; the value is still validated
/// so configs stay portable to parallel builds.
int thread_cap() {
    const char* v = std::getenv("AOLKIT_THREADS");
    if (!v) return 1;
    char* end = nullptr;
    const long n = std::strtol(v, &end, 10);
    if (!end || *end != '\0' || n < 1)
        throw CLI::ValidationError("AOLKIT_THREADS must be a positive integer");
    return static_cast<int>(n);
}

struct CommonFlags {
    std::string config_path;
    std::string checkpoint_path;
    std::string dataset_path;  // overrides the config's dataset block
    std::string out_dir = ".";
    std::vector<double> eps;
    std::uint64_t seed = 0;
    bool seed_set = false;
    int epochs = -1;
    double offset_u = -1.0;
    double temperature_t = -1.0;
};

aol::DatasetSource dataset_from_flag(const std::string& path) {
    std::ifstream f(path);
    if (!f) throw std::runtime_error("cannot open dataset file: " + path);
    nlohmann::json j;
    f >> j;
    return aol::dataset_source_from_json(j);
}

void apply_overrides(aol::TrainConfig& cfg, const CommonFlags& flags) {
    if (flags.seed_set) cfg.seed = flags.seed;
    if (flags.epochs >= 0) cfg.epochs = flags.epochs;
    if (flags.offset_u >= 0.0) cfg.loss_offset_u = flags.offset_u;
    if (flags.temperature_t > 0.0) cfg.loss_temperature_t = flags.temperature_t;
}

int cmd_train(const CommonFlags& flags) {
    aol::RunConfig rc = aol::run_config_from_file(flags.config_path);
    if (!flags.dataset_path.empty()) rc.dataset = dataset_from_flag(flags.dataset_path);
    aol::TrainConfig cfg = rc.train;
    apply_overrides(cfg, flags);
    cfg.validate();

    const aol::Dataset data = aol::load_dataset(rc.dataset);
    aol::Model model = aol::build_model(rc.model, cfg.seed);

    const std::vector<double> cert_eps = flags.eps.empty() ? cfg.cert_eps : flags.eps;
    aol::EpochCallback cb = nullptr;
    if (!cert_eps.empty()) {
        cb = [&](const aol::Model& m, aol::EpochMetrics& em) {
            const aol::CertReport rep =
                aol::certified_robust_accuracy(m, data.test_x, data.test_y, cert_eps);
            em.cert_acc = rep.cert_acc;
        };
    }

    const aol::TrainResult result = aol::train(model, data, cfg, cb);
    if (result.diverged)
        std::cerr << "warning: training diverged; parameters rolled back to the last "
                     "completed epoch\n";

    std::filesystem::create_directories(flags.out_dir);
    const std::string metrics_path = flags.out_dir + "/metrics.csv";
    {
        std::ofstream mf(metrics_path);
        aol::write_metrics_csv(mf, result.log, cert_eps);
    }

    aol::CheckpointMeta meta;
    meta.seed = cfg.seed;
    if (!result.log.empty()) {
        const auto& last = result.log.back();
        meta.epoch = last.epoch + 1;
        meta.train_loss = last.train_loss;
        meta.train_acc = last.train_acc;
        meta.val_acc = last.val_acc;
    }
    const std::string ckpt_path = flags.out_dir + "/model.ckpt";
    aol::save_checkpoint(ckpt_path, model, meta);

    std::cout << "checkpoint: " << ckpt_path << "\nmetrics: " << metrics_path << "\n";
    if (!result.log.empty())
        std::cout << "final train_acc " << result.log.back().train_acc << " val_acc "
                  << result.log.back().val_acc << "\n";
    return result.diverged ? kExitValidation : kExitOk;
}

int cmd_certify(const CommonFlags& flags) {
    const aol::Model model = aol::load_checkpoint(flags.checkpoint_path);
    aol::DatasetSource src;
    if (!flags.dataset_path.empty()) {
        src = dataset_from_flag(flags.dataset_path);
    } else if (!flags.config_path.empty()) {
        src = aol::run_config_from_file(flags.config_path).dataset;
    } else {
        throw std::runtime_error("certify requires --dataset or --config for the test set");
    }
    const aol::Dataset data = aol::load_dataset(src);
    const std::vector<double> eps = flags.eps.empty() ? kDefaultEps : flags.eps;

    const aol::CertReport rep =
        aol::certified_robust_accuracy(model, data.test_x, data.test_y, eps);
    std::cout << aol::cert_report_to_json(rep).dump(2) << "\n";
    if (flags.out_dir != ".") {
        std::filesystem::create_directories(flags.out_dir);
        std::ofstream cf(flags.out_dir + "/cert_report.csv");
        rep.write_csv(cf);
    }
    return kExitOk;
}

int cmd_diagnose(const CommonFlags& flags) {
    const aol::Model model = aol::load_checkpoint(flags.checkpoint_path);
    std::filesystem::create_directories(flags.out_dir);
    aol::Shape shape = model.input_shape();
    bool any = false;
    for (std::size_t i = 0; i < model.layer_count(); ++i) {
        const aol::LayerSpec& ls = model.spec.layers[i];
        const aol::Shape out = aol::layer_output_shape(ls, shape);
        if (ls.has_params() && aol::numel_of_shape(shape) <= 10000) {
            const aol::GramStats gs = aol::gram_analysis(ls, model.params[i], shape);
            std::cout << "layer " << i << " (" << aol::layer_kind_to_string(ls.kind)
                      << "): diag_mean " << gs.diag_mean << " offdiag_mean_abs "
                      << gs.offdiag_mean_abs << " orthogonality_ratio "
                      << gs.orthogonality_ratio << "\n";
            aol::export_gram_crops(gs.gram,
                                   flags.out_dir + "/gram_layer" + std::to_string(i), 32,
                                   {8});
            any = true;
        }
        shape = out;
    }
    if (!any) std::cout << "no layer small enough to materialize\n";
    return kExitOk;
}

int cmd_bound(const CommonFlags& flags) {
    const aol::Model model = aol::load_checkpoint(flags.checkpoint_path);
    const aol::BoundAudit audit = aol::audit_model_bound(model, 200, flags.seed);
    aol::write_bound_audit_csv(std::cout, audit);
    std::cout << "product " << audit.product << "\n";
    if (!audit.ok) {
        std::cerr << "bound audit failed: a layer exceeds spectral norm 1\n";
        return kExitValidation;
    }
    return kExitOk;
}

int cmd_gradcheck(const CommonFlags& flags) {
    // Finite-difference audit of the full backward path on a tiny mixed model.
    aol::ModelSpec spec;
    spec.input_shape = {4, 4, 2};
    spec.layers = {aol::LayerSpec::concat_pool(2), aol::LayerSpec::aol_conv(2, 1, 8),
                   aol::LayerSpec::maxmin(), aol::LayerSpec::flatten(),
                   aol::LayerSpec::aol_fc(6), aol::LayerSpec::maxmin(),
                   aol::LayerSpec::aol_fc(6), aol::LayerSpec::first_channels(3)};
    aol::Model model = aol::build_model(spec, flags.seed);
    aol::Rng rng(flags.seed + 1);
    for (auto& lp : model.params)
        for (std::int64_t i = 0; i < lp.P.numel(); ++i) lp.P[i] += 0.3 * rng.gaussian();

    aol::Tensor x({3, 4, 4, 2});
    for (std::int64_t i = 0; i < x.numel(); ++i) x[i] = rng.gaussian();
    const std::vector<int> labels = {0, 1, 2};
    aol::TrainConfig cfg;
    const aol::Grads grads = aol::grad(model, x, labels, cfg);

    const double h = 1e-5;
    double max_rel = 0.0;
    int checked = 0;
    for (std::size_t li = 0; li < model.layer_count() && checked < 50; ++li) {
        if (!spec.layers[li].has_params()) continue;
        aol::Tensor& P = model.params[li].P;
        const std::int64_t step = std::max<std::int64_t>(1, P.numel() / 10);
        for (std::int64_t i = 0; i < P.numel() && checked < 50; i += step, ++checked) {
            const double orig = P[i];
            double lp, lm;
            P[i] = orig + h;
            aol::grad(model, x, labels, cfg, &lp);
            P[i] = orig - h;
            aol::grad(model, x, labels, cfg, &lm);
            P[i] = orig;
            const double fd = (lp - lm) / (2.0 * h);
            const double got = grads.layers[li].dP[i];
            const double rel =
                std::fabs(got - fd) / std::max({std::fabs(got), std::fabs(fd), 1e-8});
            max_rel = std::max(max_rel, rel);
        }
    }
    std::cout << "checked " << checked << " coordinates, max relative error " << max_rel
              << "\n";
    if (max_rel >= 1e-4) {
        std::cerr << "gradcheck FAILED\n";
        return kExitValidation;
    }
    std::cout << "gradcheck passed\n";
    return kExitOk;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"aol: provably 1-Lipschitz layers, training and certification"};
    app.require_subcommand(1);

    CommonFlags flags;
    auto add_common = [&](CLI::App* sub, bool needs_config, bool needs_ckpt) {
        if (needs_config) {
            CLI::Option* opt =
                sub->add_option("--config", flags.config_path, "run configuration JSON");
            if (sub->get_name() == "train") opt->required();
        }
        if (needs_ckpt)
            sub->add_option("--checkpoint", flags.checkpoint_path, "model checkpoint")
                ->required();
        sub->add_option("--dataset", flags.dataset_path, "dataset source JSON (overrides config)");
        sub->add_option("--out-dir", flags.out_dir, "output directory");
        sub->add_option("--eps", flags.eps, "L2 radii (repeatable)");
        sub->add_option("--seed", flags.seed, "run seed")->each([&](const std::string&) {
            flags.seed_set = true;
        });
        sub->add_option("--epochs", flags.epochs, "override epoch count");
        sub->add_option("--offset-u", flags.offset_u, "loss offset u");
        sub->add_option("--temperature-t", flags.temperature_t, "loss temperature t");
    };

    CLI::App* train = app.add_subcommand("train", "train a model from a config");
    add_common(train, true, false);
    CLI::App* certify = app.add_subcommand("certify", "certified robust accuracy report");
    add_common(certify, true, true);
    CLI::App* diagnose = app.add_subcommand("diagnose", "orthogonality diagnostics");
    add_common(diagnose, false, true);
    CLI::App* bound = app.add_subcommand("bound", "per-layer spectral norm audit");
    add_common(bound, false, true);
    CLI::App* gradcheck = app.add_subcommand("gradcheck", "finite-difference gradient audit");
    add_common(gradcheck, false, false);

    try {
        app.parse(argc, argv);
        (void)thread_cap();
        if (train->parsed()) return cmd_train(flags);
        if (certify->parsed()) return cmd_certify(flags);
        if (diagnose->parsed()) return cmd_diagnose(flags);
        if (bound->parsed()) return cmd_bound(flags);
        if (gradcheck->parsed()) return cmd_gradcheck(flags);
        return kExitUsage;
    } catch (const CLI::ParseError& e) {
        return app.exit(e) == 0 ? kExitOk : kExitUsage;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kExitValidation;
    }
}
