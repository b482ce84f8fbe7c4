#include <cstdio>
#include <iostream>
#include <map>
#include <string>

#include <CLI11.hpp>

#include "taste/taste.hpp"

namespace {

struct CommonArgs {
    std::string config_path;
    std::string out_override;
    int64_t seed_override = -1;
};

void add_common(CLI::App* cmd, CommonArgs& args) {
    cmd->add_option("--config", args.config_path, "Run configuration JSON")->required();
    cmd->add_option("--seed", args.seed_override, "Override the config seed");
    cmd->add_option("--out", args.out_override, "Override the output directory");
}

taste::RunConfig load_with_overrides(const CommonArgs& args) {
    taste::RunConfig cfg = taste::load_run_config(args.config_path);
    if (!args.out_override.empty()) {
        cfg.out_dir = args.out_override;
        cfg.raw["out_dir"] = args.out_override;
    }
    if (args.seed_override >= 0) {
        cfg.seed = static_cast<uint64_t>(args.seed_override);
        cfg.train.seed = cfg.seed;
        cfg.synth.seed = cfg.seed;
        cfg.raw["seed"] = cfg.seed;
    }
    return cfg;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"taste: multimodal music recommendation benchmark"};
    app.require_subcommand(1);

    static const char* kCommands[] = {"synth",     "ingest", "tokenize",  "train", "eval",
                                      "coldstart", "sweep",  "diversity", "drift"};
    std::map<std::string, CommonArgs> args;
    for (const char* name : kCommands) {
        CLI::App* cmd = app.add_subcommand(name);
        add_common(cmd, args[name]);
    }
    app.get_subcommand("synth")->description("Generate a synthetic dataset with planted structure");
    app.get_subcommand("ingest")->description("Parse events, binarize, k-core filter, and split");
    app.get_subcommand("tokenize")->description("Fit per-layer K-means codebooks and emit tokens");
    app.get_subcommand("train")->description("Train the configured CTR or recall model");
    app.get_subcommand("eval")->description("Evaluate a trained checkpoint");
    app.get_subcommand("coldstart")->description("Multi-seed cold-start comparison with t-tests");
    app.get_subcommand("sweep")->description("Cluster-count sweep (k -> validation AUC)");
    app.get_subcommand("diversity")->description("Popularity distribution of top-K recommendations");
    app.get_subcommand("drift")->description("Monthly feature drift with PCA projection");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? 0 : 2;
    }

    const std::string command = app.get_subcommands().front()->get_name();
    try {
        taste::RunConfig cfg = load_with_overrides(args[command]);
        if (command == "synth")
            taste::cmd_synth(cfg);
        else if (command == "ingest")
            taste::cmd_ingest(cfg);
        else if (command == "tokenize")
            taste::cmd_tokenize(cfg);
        else if (command == "train")
            taste::cmd_train(cfg);
        else if (command == "eval")
            taste::cmd_eval(cfg);
        else if (command == "coldstart")
            taste::cmd_coldstart(cfg);
        else if (command == "sweep")
            taste::cmd_sweep_clusters(cfg);
        else if (command == "diversity")
            taste::cmd_diversity(cfg);
        else if (command == "drift")
            taste::cmd_drift(cfg);
        std::cerr << "taste " << command << ": done\n";
        return 0;
    } catch (const taste::TasteError& e) {
        std::cerr << "taste " << command << ": " << e.what() << "\n";
        return taste::errc_exit_code(e.code());
    } catch (const std::exception& e) {
        std::cerr << "taste " << command << ": " << e.what() << "\n";
        return 1;
    }
}
