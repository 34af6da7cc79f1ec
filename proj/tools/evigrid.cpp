// SPDX-License-Identifier: Apache-2.0
//
// evigrid command-line entry point.

#include <iostream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "evigrid/config.hpp"
#include "evigrid/pipeline.hpp"

using namespace evigrid;
namespace pl = evigrid::pipeline;

namespace {

struct CommonOptions {
    std::string config_path;
    std::vector<std::string> sets;
    std::string run_dir;
};

void add_common(CLI::App* cmd, CommonOptions& o) {
    cmd->add_option("-c,--config", o.config_path, "key = value config file");
    cmd->add_option("-s,--set", o.sets, "override a key, key=value (repeatable)");
    cmd->add_option("--run-dir", o.run_dir, "shorthand for --set run.dir=DIR");
}

Config resolve(const CommonOptions& o) {
    Config c = o.config_path.empty() ? Config() : Config::from_file(o.config_path);
    if (!o.run_dir.empty()) {
        c.set("run.dir", o.run_dir);
    }
    for (const auto& s : o.sets) {
        c.set_assignment(s);
    }
    return c;
}

int code(pl::ExitCode e) { return static_cast<int>(e); }

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Evidence-grounded video answering on synthetic features"};
    app.require_subcommand(1);
    CommonOptions common;

    auto* gen = app.add_subcommand("gen-data", "generate the toy train and held-out splits");
    add_common(gen, common);

    auto* train = app.add_subcommand("train", "supervised training from initialization");
    add_common(train, common);
    std::string epochs;
    train->add_option("--epochs", epochs, "shorthand for --set train.epochs=N");

    auto* synth = app.add_subcommand("synth", "synthesize preference pairs");
    add_common(synth, common);
    std::string factors;
    synth->add_option("--factors", factors, "factor weights, e.g. shift=1.0 (unlisted factors get 0)");

    auto* fpo = app.add_subcommand("fpo", "preference optimization from a supervised checkpoint");
    add_common(fpo, common);
    std::string steps, beta;
    fpo->add_option("--steps", steps, "shorthand for --set fpo.steps=N");
    fpo->add_option("--beta", beta, "shorthand for --set fpo.beta=X");

    auto* ev = app.add_subcommand("eval", "generate over a split and score it");
    add_common(ev, common);
    std::string thresholds, checkpoint, split;
    ev->add_option("--thresholds", thresholds, "recall@1 IoU thresholds, comma separated");
    ev->add_option("--checkpoint", checkpoint, "shorthand for --set eval.checkpoint=PATH");
    ev->add_option("--split", split, "shorthand for --set eval.split=NAME");

    auto* gc = app.add_subcommand("gradcheck", "finite-difference checks of every objective");
    add_common(gc, common);
    bool flip = false;
    gc->add_flag("--flip-logistic-grad", flip, "test hook: corrupt the logistic backward (must fail)");

    auto* infer = app.add_subcommand("infer", "print one generated response");
    add_common(infer, common);
    std::string index, infer_ckpt;
    infer->add_option("--index", index, "shorthand for --set infer.index=N");
    infer->add_option("--checkpoint", infer_ckpt, "shorthand for --set infer.checkpoint=PATH");

    auto* cfgcmd = app.add_subcommand("config", "print every config key with its default and meaning");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int rc = app.exit(e);
        return rc == 0 ? 0 : code(pl::ExitCode::Config);
    }

    try {
        if (cfgcmd->parsed()) {
            for (const auto& k : config_schema()) {
                std::cout << "# " << k.doc << '\n' << k.key << " = " << k.default_value << "\n\n";
            }
            return 0;
        }
        Config c = resolve(common);
        if (gen->parsed()) {
            pl::cmd_gen_data(c, std::cout);
        } else if (train->parsed()) {
            if (!epochs.empty()) c.set("train.epochs", epochs);
            pl::cmd_train(c, std::cout);
        } else if (synth->parsed()) {
            if (!factors.empty()) pl::apply_factor_weights(c, factors);
            pl::cmd_synth(c, std::cout);
        } else if (fpo->parsed()) {
            if (!steps.empty()) c.set("fpo.steps", steps);
            if (!beta.empty()) c.set("fpo.beta", beta);
            const auto r = pl::cmd_fpo(c, std::cout);
            if (r.steps > 0 && !r.margin_increased()) {
                std::cerr << "held-out preference margin did not increase\n";
                return code(pl::ExitCode::Acceptance);
            }
        } else if (ev->parsed()) {
            if (!thresholds.empty()) c.set("eval.thresholds", thresholds);
            if (!checkpoint.empty()) c.set("eval.checkpoint", checkpoint);
            if (!split.empty()) c.set("eval.split", split);
            pl::cmd_eval(c, std::cout);
        } else if (gc->parsed()) {
            testing_hooks::set_flip_logistic_grad(flip);
            const auto rows = pl::cmd_gradcheck(c, std::cout);
            for (const auto& r : rows) {
                if (!r.passed()) {
                    return code(pl::ExitCode::Acceptance);
                }
            }
        } else if (infer->parsed()) {
            if (!index.empty()) c.set("infer.index", index);
            if (!infer_ckpt.empty()) c.set("infer.checkpoint", infer_ckpt);
            pl::cmd_infer(c, std::cout);
        }
    } catch (const Error& e) {
        std::cerr << "error: " << e.what() << '\n';
        return code(pl::exit_code_for(e));
    }
    return 0;
}
