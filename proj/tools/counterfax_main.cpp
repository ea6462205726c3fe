// counterfax command-line interface: data preparation, classifier and
// explainer training, explanation export, evaluation, and report tables.

#include <iostream>

#include "CLI11.hpp"

#include "counterfax/pipeline.hpp"

using namespace counterfax;

int main(int argc, char** argv) {
    CLI::App app{"counterfactual visual explanations for binary classifiers"};
    app.require_subcommand(1);

    std::string config_path;
    std::optional<uint64_t> seed;
    std::optional<std::string> method;
    std::optional<std::string> out_dir;
    std::string input_path, out_path;
    std::vector<std::string> runs;
    int count = 8;

    auto add_common = [&](CLI::App* cmd) {
        cmd->add_option("--config", config_path, "run configuration file (JSON)")->required();
        cmd->add_option("--seed", seed, "override the top-level seed");
        cmd->add_option("--output-dir", out_dir, "override output_dir from the config");
    };

    auto* prep = app.add_subcommand("prepare-data", "materialize dataset splits");
    add_common(prep);

    auto* train_cls = app.add_subcommand("train-classifier", "train and freeze the classifier");
    add_common(train_cls);

    auto* train_exp = app.add_subcommand("train-explainer", "train an explainer");
    add_common(train_exp);
    train_exp->add_option("--method", method, "SyCE | CyCE | CyCE_noFc | SSyE | CyCSAE");

    auto* explain = app.add_subcommand("explain", "export stable/adversary/map files");
    add_common(explain);
    explain->add_option("--method", method, "explainer method");
    explain->add_option("--input", input_path, "image file or directory (png/pgm)");
    explain->add_option("--out", out_path, "output directory for explanation files");
    explain->add_option("--count", count, "number of test images when --input is omitted");

    auto* evaluate = app.add_subcommand("evaluate", "compute the metric report");
    add_common(evaluate);
    evaluate->add_option("--method", method, "explainer method");

    auto* report = app.add_subcommand("report", "aggregate evaluation reports into a table");
    add_common(report);
    report->add_option("--runs", runs, "run directories or report JSON files")->expected(-1);

    CLI11_PARSE(app, argc, argv);

    try {
        ConfigOverrides ov;
        ov.seed = seed;
        ov.method = method;
        ov.output_dir = out_dir;
        RunConfig cfg = load_run_config(config_path, ov);
        std::string m = method.value_or(cfg.explainer.method);

        if (prep->parsed()) {
            cmd_prepare_data(cfg);
        } else if (train_cls->parsed()) {
            cmd_train_classifier(cfg);
        } else if (train_exp->parsed()) {
            cmd_train_explainer(cfg, m);
        } else if (explain->parsed()) {
            std::optional<fs::path> in, out;
            if (!input_path.empty()) in = input_path;
            if (!out_path.empty()) out = out_path;
            cmd_explain(cfg, m, in, out, count);
        } else if (evaluate->parsed()) {
            cmd_evaluate(cfg, m);
        } else if (report->parsed()) {
            if (runs.empty()) runs.push_back(cfg.output_dir.string());
            cmd_report(cfg, runs);
        }
    } catch (const NumericError& e) {
        std::cerr << "numerical failure: " << e.what() << std::endl;
        return 3;
    } catch (const ConfigError& e) {
        std::cerr << "error: " << e.what() << std::endl;
        return 2;
    } catch (const FormatError& e) {
        std::cerr << "error: " << e.what() << std::endl;
        return 2;
    } catch (const UndefinedError& e) {
        std::cerr << "error: " << e.what() << std::endl;
        return 2;
    } catch (const ShapeError& e) {
        std::cerr << "error: " << e.what() << std::endl;
        return 2;
    } catch (const std::exception& e) {
        std::cerr << "unexpected error: " << e.what() << std::endl;
        return 1;
    }
    return 0;
}
