#include "ikd/experiment.hpp"

#include <CLI11.hpp>

#include <iostream>

int main(int argc, char** argv) {
    using namespace ikd::cli;
    CLI::App app{"Inverse knowledge distillation attack toolkit"};
    app.set_version_flag("--version", tool_version());
    app.require_subcommand(1);

    RunOptions opts;
    std::string out;
    std::uint64_t seed = 0;
    ikd::Index jobs = 1;

    const std::vector<std::pair<std::string, std::string>> commands = {
        {"make-dataset", "Write the synthetic training and test sets named in the config"},
        {"train", "Train the model zoo and write weights plus a manifest"},
        {"attack", "Craft adversarial archives for every surrogate and method"},
        {"eval", "Score archives on every target and write transfer reports"},
        {"sweep", "Run the soft-loss or gamma ablation"},
        {"verify", "Recheck artifact hashes; --replay reruns and compares bytes"},
    };
    std::vector<CLI::App*> subs;
    for (const auto& [name, help] : commands) {
        auto* sub = app.add_subcommand(name, help);
        sub->add_option("--config", opts.config, "Experiment config (JSON)")->required()->check(CLI::ExistingFile);
        sub->add_option("--out", out, "Output directory (overrides the config)");
        sub->add_option("--seed", seed, "Global seed (overrides the config)");
        sub->add_option("--jobs", jobs, "Worker threads")->check(CLI::PositiveNumber);
        sub->add_flag("--overwrite", opts.overwrite, "Replace existing outputs");
        if (name == "verify") sub->add_flag("--replay", opts.replay, "Rerun recorded commands and compare outputs");
        subs.push_back(sub);
    }

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::CallForVersion& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        app.exit(e);
        return kExitValidation;
    }

    for (auto* sub : subs) {
        if (!sub->parsed()) continue;
        if (sub->count("--out")) opts.out = out;
        if (sub->count("--seed")) opts.seed = seed;
        if (sub->count("--jobs")) opts.jobs = jobs;
        return run_command(sub->get_name(), opts, std::cout, std::cerr);
    }
    return kExitValidation;
}
