#include <CLI11.hpp>
#include <json.hpp>

#include <fstream>
#include <iostream>
#include <optional>

#include "poguise/config_json.hpp"
#include "poguise/data.hpp"
#include "poguise/errors.hpp"
#include "poguise/flops.hpp"
#include "poguise/gradcheck_suite.hpp"
#include "poguise/model.hpp"
#include "poguise/train.hpp"

using nlohmann::json;

namespace {

poguise::ModelConfig config_for_scale(const std::string& scale) {
    if (scale == "base") return poguise::base_config();
    if (scale == "toy") return poguise::toy_config();
    throw poguise::ConfigError("unknown scale '" + scale + "' (expected base|toy)");
}

// Settings resolve in layers: scale defaults, then the JSON config file,
// then individual flags.
struct RunSettings {
    std::string scale = "toy";
    poguise::ModelConfig model = poguise::toy_config();
    poguise::OptimConfig optim;
    int seed = 1;
    int views = 3;
};

struct CommonArgs {
    std::string config_path;
    std::string scale;
    std::optional<double> rho, lambda, kappa;
    std::optional<std::string> score_policy, merge_policy, similarity;
    std::optional<int> seed;

    void attach(CLI::App* cmd) {
        cmd->add_option("--config", config_path, "JSON run config (comments allowed)");
        cmd->add_option("--scale", scale, "model scale: base|toy");
        cmd->add_option("--rho", rho, "keep rate");
        cmd->add_option("--lambda", lambda, "merge rate (0 disables merging)");
        cmd->add_option("--kappa", kappa, "class/pose score balance");
        cmd->add_option("--score-policy", score_policy, "class|midframe|class_pose");
        cmd->add_option("--merge-policy", merge_policy, "none|poguise|bipartite");
        cmd->add_option("--similarity", similarity, "merge similarity feature: q|k|attn");
        cmd->add_option("--seed", seed, "master RNG seed");
    }

    RunSettings resolve() const {
        RunSettings s;
        json file = json::object();
        if (!config_path.empty()) {
            std::ifstream in(config_path);
            if (!in) throw poguise::FormatError("cannot open config " + config_path);
            try {
                file = json::parse(in, nullptr, true, /*ignore_comments=*/true);
            } catch (const json::exception& e) {
                throw poguise::FormatError("config parse failure: " + std::string(e.what()));
            }
        }
        s.scale = !scale.empty() ? scale : file.value("scale", s.scale);
        s.model = config_for_scale(s.scale);
        if (file.contains("model")) file.at("model").get_to(s.model);
        if (file.contains("optim")) file.at("optim").get_to(s.optim);
        s.seed = file.value("seed", s.seed);
        s.views = file.value("views", s.views);

        if (rho) s.model.selection.rho = *rho;
        if (kappa) s.model.selection.kappa = *kappa;
        if (lambda) {
            if (*lambda > 0.0) {
                s.model.selection.lambda = *lambda;
                if (s.model.selection.merge_policy == poguise::MergePolicy::NONE)
                    s.model.selection.merge_policy = poguise::MergePolicy::POGUISE;
            } else {
                s.model.selection.merge_policy = poguise::MergePolicy::NONE;
            }
        }
        if (score_policy) s.model.selection.score_policy = poguise::score_policy_from(*score_policy);
        if (merge_policy) s.model.selection.merge_policy = poguise::merge_policy_from(*merge_policy);
        if (similarity)
            s.model.selection.similarity_feature = poguise::similarity_feature_from(*similarity);
        if (seed) s.seed = *seed;
        return s;
    }
};

// ---------------------------------------------------------------- flops ----

struct FlopsArgs {
    CommonArgs common;
    bool pose_tokens = false;
    std::string csv_path;
};

int run_flops(const FlopsArgs& args) {
    RunSettings s = args.common.resolve();
    poguise::ModelConfig cfg = s.model;
    cfg.pose_tokens = args.pose_tokens;
    if (!args.pose_tokens) cfg.selection.score_policy = poguise::ScorePolicy::CLASS;

    const poguise::CostReport rep = poguise::model_flops(cfg);

    const bool merging = cfg.selection.merge_policy != poguise::MergePolicy::NONE;
    json out;
    out["config"] = {{"scale", s.scale},
                     {"pose_tokens", cfg.pose_tokens},
                     {"rho", cfg.selection.rho},
                     {"lambda", merging ? cfg.selection.lambda : 0.0},
                     {"kappa", cfg.selection.kappa},
                     {"stages", cfg.encoder.selection_stages}};
    out["layer_tokens"] = rep.layer_tokens;
    out["visual_counts"] = rep.visual_counts;
    out["embed_gflops"] = rep.embed_flops / 1e9;
    out["head_gflops"] = rep.head_flops / 1e9;
    out["decoder_gflops"] = rep.decoder_flops / 1e9;
    out["total_gflops"] = rep.total_gflops();
    std::cout << out.dump(2) << "\n";

    if (!args.csv_path.empty()) {
        std::ofstream csv(args.csv_path);
        if (!csv) throw poguise::FormatError("cannot write " + args.csv_path);
        csv << "layer,tokens,attn_gflops,mlp_gflops\n";
        for (std::size_t i = 0; i < rep.layer_tokens.size(); ++i)
            csv << (i + 1) << "," << rep.layer_tokens[i] << "," << rep.layer_attn_flops[i] / 1e9
                << "," << rep.layer_mlp_flops[i] / 1e9 << "\n";
    }
    return 0;
}

// ------------------------------------------------------------- gen-data ----

struct GenDataArgs {
    std::string out_dir;
    poguise::SyntheticSpec spec;
};

int run_gen_data(const GenDataArgs& args) {
    poguise::write_dataset(args.spec, args.out_dir);
    auto index = poguise::read_dataset(args.out_dir);
    json out = {{"dir", args.out_dir},
                {"classes", index.classes},
                {"clips", index.clips.size()},
                {"train", index.split_indices("train").size()},
                {"test", index.split_indices("test").size()}};
    std::cout << out.dump(2) << "\n";
    return 0;
}

// ---------------------------------------------------------------- train ----

struct TrainArgs {
    CommonArgs common;
    std::string data_dir, out_dir;
    std::optional<double> lr_backbone, lr_heads, weight_decay;
    std::optional<int> epochs, batch_size, accumulate;
};

void check_dataset_fit(const poguise::ModelConfig& cfg, const poguise::DatasetIndex& data) {
    if (cfg.heads.num_classes != static_cast<int>(data.classes.size()))
        throw poguise::ConfigError("model expects " + std::to_string(cfg.heads.num_classes) +
                                   " classes but the dataset has " +
                                   std::to_string(data.classes.size()));
    if (!data.clips.empty()) {
        const auto& anns = data.annotations.at(data.clips.front().id);
        if (!anns.empty() && cfg.heads.landmarks != static_cast<int>(anns.front().kps.size()))
            throw poguise::ConfigError(
                "model decodes " + std::to_string(cfg.heads.landmarks) +
                " landmarks but annotations carry " + std::to_string(anns.front().kps.size()));
    }
}

int run_train(const TrainArgs& args) {
    RunSettings s = args.common.resolve();
    if (args.lr_backbone) s.optim.lr_backbone = *args.lr_backbone;
    if (args.lr_heads) s.optim.lr_heads = *args.lr_heads;
    if (args.weight_decay) s.optim.weight_decay = *args.weight_decay;
    if (args.epochs) s.optim.epochs = *args.epochs;
    if (args.batch_size) s.optim.batch_size = *args.batch_size;
    if (args.accumulate) s.optim.accumulate_batches = *args.accumulate;
    s.model.validate();
    s.optim.validate();

    auto data = poguise::read_dataset(args.data_dir);
    check_dataset_fit(s.model, data);

    auto model = poguise::Model<float>::init(s.model, static_cast<std::uint64_t>(s.seed));
    poguise::TrainOptions opt;
    opt.optim = s.optim;
    opt.seed = static_cast<std::uint64_t>(s.seed);
    opt.log_sink = &std::cout;
    auto result = poguise::train_model(model, data, opt);

    poguise::save_checkpoint(args.out_dir, model);
    {
        std::ofstream log(std::filesystem::path(args.out_dir) / "training_log.csv");
        if (!log) throw poguise::FormatError("cannot write training log in " + args.out_dir);
        log << "epoch,lr_backbone,lr_heads,loss_cls,loss_hm,loss_total,train_accuracy,train_mae\n";
        for (const auto& e : result.log)
            log << e.epoch << "," << e.lr_backbone << "," << e.lr_heads << "," << e.loss_cls
                << "," << e.loss_hm << "," << e.loss_total << "," << e.train_accuracy << ","
                << e.train_mae << "\n";
    }

    json out = {{"checkpoint", args.out_dir},
                {"epochs", result.log.size()},
                {"final_loss", result.log.back().loss_total},
                {"final_train_accuracy", result.log.back().train_accuracy}};
    std::cout << out.dump(2) << "\n";
    return 0;
}

// ----------------------------------------------------------------- eval ----

struct EvalArgs {
    std::string data_dir, checkpoint, split = "test", out_path;
    int views = 3;
};

json report_json(const poguise::EvalReport& rep) {
    return {{"total", rep.total},
            {"micro_accuracy", rep.micro},
            {"macro_accuracy", rep.macro},
            {"heatmap_mae", rep.heatmap_mae},
            {"per_class_accuracy", rep.per_class_accuracy},
            {"confusion", rep.confusion}};
}

int run_eval(const EvalArgs& args) {
    auto model = poguise::load_checkpoint(args.checkpoint);
    auto data = poguise::read_dataset(args.data_dir);
    auto rep = poguise::evaluate(model, data, args.split, args.views);
    json out = report_json(rep);
    out["split"] = args.split;
    out["views"] = args.views;
    std::cout << out.dump(2) << "\n";
    if (!args.out_path.empty()) {
        std::ofstream f(args.out_path);
        if (!f) throw poguise::FormatError("cannot write " + args.out_path);
        f << out.dump(2) << "\n";
    }
    return 0;
}

// ------------------------------------------------------------- gradcheck ----

int run_gradcheck(bool ops_only) {
    auto cases = poguise::run_gradcheck_suite(!ops_only);
    bool all = true;
    for (const auto& c : cases) {
        std::printf("%-55s %7d elems  max rel err %.3e  %s\n", c.name.c_str(), c.result.checked,
                    c.result.max_rel_err, c.pass() ? "PASS" : "FAIL");
        all = all && c.pass();
    }
    std::printf("%s\n", all ? "all gradient checks passed" : "gradient checks FAILED");
    return all ? 0 : 1;
}

// ------------------------------------------------------------ demo-select ----

struct DemoSelectArgs {
    CommonArgs common;
    std::string out_path;
};

int run_demo_select(const DemoSelectArgs& args) {
    RunSettings s = args.common.resolve();
    s.model.validate();
    auto model = poguise::Model<float>::init(s.model, static_cast<std::uint64_t>(s.seed));

    // a fixed random clip: the mask structure, not the content, is the point
    auto rng = poguise::derive_rng(static_cast<std::uint64_t>(s.seed), 2);
    std::vector<float> clip(static_cast<std::size_t>(s.model.clip.frames) *
                            s.model.clip.channels * s.model.clip.height * s.model.clip.width);
    for (auto& v : clip) v = static_cast<float>(rng.uniform());

    poguise::ForwardOptions fopt;
    fopt.collect_trace = true;
    auto res = model.forward(clip, fopt);

    std::ofstream file;
    std::ostream* out = &std::cout;
    if (!args.out_path.empty()) {
        file.open(args.out_path);
        if (!file) throw poguise::FormatError("cannot write " + args.out_path);
        out = &file;
    }
    *out << "stage,tcube,row,col,status\n";
    for (const auto& stage : res.traces)
        for (const auto& row : stage)
            *out << row.stage << "," << row.origin.tcube << "," << row.origin.row << ","
                 << row.origin.col << "," << row.status << "\n";
    return 0;
}

// ---------------------------------------------------------------- bench ----

struct BenchArgs {
    CommonArgs common;
    std::vector<double> rhos{1.0, 0.9, 0.8, 0.7, 0.6, 0.5};
    std::vector<double> lambdas{0.3};
    std::string data_dir, out_path;
    std::optional<int> epochs;
};

int run_bench(const BenchArgs& args) {
    RunSettings s = args.common.resolve();
    if (args.epochs) s.optim.epochs = *args.epochs;

    std::optional<poguise::DatasetIndex> data;
    if (!args.data_dir.empty()) {
        data = poguise::read_dataset(args.data_dir);
        check_dataset_fit(s.model, *data);
    }

    std::ofstream file;
    std::ostream* out = &std::cout;
    if (!args.out_path.empty()) {
        file.open(args.out_path);
        if (!file) throw poguise::FormatError("cannot write " + args.out_path);
        out = &file;
    }
    *out << "rho,lambda,gflops,micro,macro,mae\n";
    for (double lambda : args.lambdas) {
        for (double rho : args.rhos) {
            poguise::ModelConfig cfg = s.model;
            cfg.selection.rho = rho;
            if (lambda > 0.0) {
                cfg.selection.lambda = lambda;
                if (cfg.selection.merge_policy == poguise::MergePolicy::NONE)
                    cfg.selection.merge_policy = poguise::MergePolicy::POGUISE;
            } else {
                cfg.selection.merge_policy = poguise::MergePolicy::NONE;
            }
            cfg.validate();
            const double gflops = poguise::model_flops(cfg).total_gflops();

            *out << rho << "," << lambda << "," << gflops;
            if (data) {
                auto model = poguise::Model<float>::init(cfg, static_cast<std::uint64_t>(s.seed));
                poguise::TrainOptions opt;
                opt.optim = s.optim;
                opt.seed = static_cast<std::uint64_t>(s.seed);
                poguise::train_model(model, *data, opt);
                auto rep = poguise::evaluate(model, *data, "test", s.views);
                *out << "," << rep.micro << "," << rep.macro << "," << rep.heatmap_mae;
            } else {
                *out << ",,,";
            }
            *out << "\n";
            out->flush();
        }
    }
    return 0;
}

} // namespace

int main(int argc, char** argv) {
    CLI::App app{"PO-GUISE video transformer: training, evaluation and analysis"};
    app.require_subcommand(1);

    FlopsArgs flops_args;
    auto* flops_cmd = app.add_subcommand("flops", "emit the analytic cost report");
    flops_args.common.attach(flops_cmd);
    flops_cmd->add_flag("--pose-tokens", flops_args.pose_tokens,
                        "include pose tokens + heatmap decoder");
    flops_cmd->add_option("--csv", flops_args.csv_path, "also write a per-layer CSV");

    GenDataArgs gen_args;
    auto* gen_cmd = app.add_subcommand("gen-data", "generate a synthetic stick-figure dataset");
    gen_cmd->add_option("--out", gen_args.out_dir, "output directory")->required();
    gen_cmd->add_option("--classes", gen_args.spec.num_classes, "number of action classes");
    gen_cmd->add_option("--clips-per-class", gen_args.spec.clips_per_class, "clips per class");
    gen_cmd->add_option("--frames", gen_args.spec.frames, "frames per clip");
    gen_cmd->add_option("--height", gen_args.spec.height, "frame height in pixels");
    gen_cmd->add_option("--width", gen_args.spec.width, "frame width in pixels");
    gen_cmd->add_option("--persons", gen_args.spec.persons, "actors per clip (1 or 2)");
    gen_cmd->add_option("--noise", gen_args.spec.noise, "additive uniform pixel noise");
    gen_cmd->add_option("--train-fraction", gen_args.spec.train_fraction, "train split fraction");
    gen_cmd->add_option("--seed", gen_args.spec.seed, "master RNG seed");

    TrainArgs train_args;
    auto* train_cmd = app.add_subcommand("train", "train a model and save a checkpoint");
    train_args.common.attach(train_cmd);
    train_cmd->add_option("--data", train_args.data_dir, "dataset directory")->required();
    train_cmd->add_option("--out", train_args.out_dir, "checkpoint directory")->required();
    train_cmd->add_option("--lr-backbone", train_args.lr_backbone, "backbone peak lr");
    train_cmd->add_option("--lr-heads", train_args.lr_heads, "heads peak lr");
    train_cmd->add_option("--weight-decay", train_args.weight_decay, "decoupled weight decay");
    train_cmd->add_option("--epochs", train_args.epochs, "training epochs");
    train_cmd->add_option("--batch-size", train_args.batch_size, "samples per optimizer step");
    train_cmd->add_option("--accumulate", train_args.accumulate,
                          "batches accumulated per optimizer step");

    EvalArgs eval_args;
    auto* eval_cmd = app.add_subcommand("eval", "evaluate a checkpoint on a dataset split");
    eval_cmd->add_option("--data", eval_args.data_dir, "dataset directory")->required();
    eval_cmd->add_option("--checkpoint", eval_args.checkpoint, "checkpoint directory")->required();
    eval_cmd->add_option("--split", eval_args.split, "dataset split (train|test)");
    eval_cmd->add_option("--views", eval_args.views, "temporal views averaged at inference");
    eval_cmd->add_option("--out", eval_args.out_path, "also write the JSON report here");

    bool gradcheck_ops_only = false;
    auto* gradcheck_cmd =
        app.add_subcommand("gradcheck", "finite-difference check of ops and the composed model");
    gradcheck_cmd->add_flag("--ops-only", gradcheck_ops_only, "skip the composed-model check");

    DemoSelectArgs demo_args;
    auto* demo_cmd =
        app.add_subcommand("demo-select", "emit the per-stage token selection mask as CSV");
    demo_args.common.attach(demo_cmd);
    demo_cmd->add_option("--out", demo_args.out_path, "CSV path (default stdout)");

    BenchArgs bench_args;
    auto* bench_cmd =
        app.add_subcommand("bench", "sweep rho/lambda and emit a GFLOPs-vs-accuracy CSV");
    bench_args.common.attach(bench_cmd);
    bench_cmd->add_option("--rho-list", bench_args.rhos, "keep rates to sweep")->delimiter(',');
    bench_cmd->add_option("--lambda-list", bench_args.lambdas, "merge rates to sweep")
        ->delimiter(',');
    bench_cmd->add_option("--data", bench_args.data_dir,
                          "dataset directory (omit for a cost-only sweep)");
    bench_cmd->add_option("--epochs", bench_args.epochs, "training epochs per sweep point");
    bench_cmd->add_option("--out", bench_args.out_path, "CSV path (default stdout)");

    try {
        app.parse(argc, argv);
        if (flops_cmd->parsed()) return run_flops(flops_args);
        if (gen_cmd->parsed()) return run_gen_data(gen_args);
        if (train_cmd->parsed()) return run_train(train_args);
        if (eval_cmd->parsed()) return run_eval(eval_args);
        if (gradcheck_cmd->parsed()) return run_gradcheck(gradcheck_ops_only);
        if (demo_cmd->parsed()) return run_demo_select(demo_args);
        if (bench_cmd->parsed()) return run_bench(bench_args);
        return 1;
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e); // CLI11 prints usage
        return code == 0 ? 0 : 1;    // bad flags are a user error
    } catch (const poguise::ConfigError& e) {
        std::cerr << e.what() << "\n";
        return 1;
    } catch (const poguise::FormatError& e) {
        std::cerr << e.what() << "\n";
        return 1;
    } catch (const poguise::ShapeError& e) {
        std::cerr << e.what() << "\n";
        return 1;
    } catch (const std::exception& e) {
        std::cerr << "internal error: " << e.what() << "\n";
        return 2;
    }
}
