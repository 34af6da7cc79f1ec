#include <filesystem>
#include <fstream>
#include <sstream>

#include "doctest.h"
#include "evigrid/config.hpp"
#include "evigrid/errors.hpp"
#include "evigrid/pipeline.hpp"
#include "json.hpp"

using namespace evigrid;
namespace fs = std::filesystem;
namespace pl = evigrid::pipeline;

namespace {

struct TempDir {
    fs::path path;
    explicit TempDir(const std::string& name) : path(fs::temp_directory_path() / ("evigrid-test-" + name)) {
        fs::remove_all(path);
        fs::create_directories(path);
    }
    ~TempDir() { fs::remove_all(path); }
};

// Small but complete configuration for fast end-to-end runs.
Config small_config(const fs::path& run) {
    Config c;
    c.set("run.dir", run.string());
    c.set("data.train_count", "12");
    c.set("data.heldout_count", "6");
    c.set("train.epochs", "1");
    c.set("fpo.steps", "2");
    c.set("fpo.batch_size", "2");
    return c;
}

std::string slurp(const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    std::stringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

}  // namespace

TEST_CASE("config files") {
    TempDir tmp("config");
    const fs::path file = tmp.path / "run.conf";
    std::ofstream(file) << "# comment\n\ntrain.epochs = 5\n eval.thresholds = 0.3,0.5 \n";
    const Config c = Config::from_file(file.string());
    CHECK(c.get_int("train.epochs") == 5);
    CHECK(c.get_doubles("eval.thresholds") == std::vector<double>{0.3, 0.5});
    CHECK(c.get_int("data.train_count") == 512);

    SUBCASE("unknown keys are rejected") {
        Config d;
        CHECK_THROWS_AS(d.set("train.epoch", "5"), ConfigError);
        CHECK_THROWS_AS(d.merge_text("bogus = 1\n", "x"), ConfigError);
        CHECK_THROWS_AS(d.set_assignment("no-equals-sign"), ConfigError);
        CHECK_THROWS_AS(d.set("format_version", "2"), ConfigError);
    }
    SUBCASE("malformed values name the key") {
        Config d;
        d.set("train.epochs", "many");
        try {
            (void)d.get_int("train.epochs");
            FAIL("expected ConfigError");
        } catch (const ConfigError& e) {
            CHECK(std::string(e.what()).find("train.epochs") != std::string::npos);
        }
    }
    SUBCASE("dump round trips") {
        Config d;
        d.set("fpo.beta", "0.5");
        Config e;
        e.merge_text(d.dump(), "dump");
        CHECK(e.values() == d.values());
    }
    SUBCASE("missing file") {
        CHECK_THROWS_AS(Config::from_file((tmp.path / "nope.conf").string()), IoError);
    }
}

TEST_CASE("factor weight shorthand") {
    Config c;
    pl::apply_factor_weights(c, "shift=1.0");
    const auto s = pl::synth_config(c);
    CHECK(s.weights[0] == 1.0);
    for (size_t f = 1; f < s.weights.size(); ++f) CHECK(s.weights[f] == 0.0);
    CHECK_THROWS_AS(pl::apply_factor_weights(c, "sideways=1"), ConfigError);
}

TEST_CASE("exit codes") {
    CHECK(pl::exit_code_for(ConfigError("x")) == pl::ExitCode::Config);
    CHECK(pl::exit_code_for(SchemaError("x")) == pl::ExitCode::Data);
    CHECK(pl::exit_code_for(IoError("x")) == pl::ExitCode::Data);
    CHECK(pl::exit_code_for(AcceptanceFailure("x")) == pl::ExitCode::Acceptance);
    CHECK(pl::exit_code_for(NonFiniteError("x")) == pl::ExitCode::Acceptance);
}

TEST_CASE("gen-data") {
    TempDir tmp("gendata");
    std::ostringstream log;
    SUBCASE("reruns reproduce the manifests") {
        const Config c = small_config(tmp.path / "a");
        const auto a = pl::cmd_gen_data(c, log);
        CHECK(a.counts.at("train") == 12);
        CHECK(a.counts.at("heldout") == 6);
        const auto b = pl::cmd_gen_data(small_config(tmp.path / "b"), log);
        CHECK(a.manifest_hash == b.manifest_hash);
        CHECK(slurp(tmp.path / "a/data/train/manifest.json") == slurp(tmp.path / "b/data/train/manifest.json"));
        const auto loaded = pl::load_dataset(pl::split_dir(c, "train"));
        REQUIRE(loaded.size() == 12);
        CHECK(loaded[0].ann.id == "train00000");
        CHECK(pl::load_dataset(pl::split_dir(c, "heldout"))[0].ann.id == "held00012");  // indices continue after the training split
    }
    SUBCASE("an impossible layout names the field") {
        Config c = small_config(tmp.path / "c");
        c.set("data.max_events", "9");
        try {
            pl::cmd_gen_data(c, log);
            FAIL("expected ConfigError");
        } catch (const ConfigError& e) {
            CHECK(std::string(e.what()).find("data.max_events") != std::string::npos);
        }
    }
    SUBCASE("a corrupted feature file is detected") {
        const Config c = small_config(tmp.path / "d");
        pl::cmd_gen_data(c, log);
        const fs::path feat = tmp.path / "d/data/train/features/train00000.f32";
        std::ofstream(feat, std::ios::binary | std::ios::trunc) << "xx";
        CHECK_THROWS_AS(pl::load_dataset(pl::split_dir(c, "train")), IoError);
    }
}

TEST_CASE("train, synth, fpo, eval") {
    TempDir tmp("flow");
    std::ostringstream log;
    Config c = small_config(tmp.path);
    pl::cmd_gen_data(c, log);

    SUBCASE("zero epochs saves the initialization") {
        c.set("train.epochs", "0");
        const auto r = pl::cmd_train(c, log);
        model::ModelConfig mcfg;
        const ParamStore saved = pl::load_model(r.checkpoint, &mcfg);
        const ParamStore init = model::init_model(pl::model_config(c), c.get_u64("model.init_seed"));
        for (const auto& [name, p] : init.params()) {
            const auto& q = saved.params().at(name);
            REQUIRE(q.value.data.size() == p.value.data.size());
            for (size_t i = 0; i < p.value.data.size(); ++i)
                CHECK(q.value.data[i] == static_cast<double>(static_cast<float>(p.value.data[i])));
        }
        CHECK(fs::exists(pl::checkpoint_sibling(r.checkpoint, ".config")));
    }
    SUBCASE("missing checkpoint reports the path") {
        c.set("eval.checkpoint", (tmp.path / "absent.ckpt").string());
        try {
            pl::cmd_eval(c, log);
            FAIL("expected IoError");
        } catch (const IoError& e) {
            CHECK(std::string(e.what()).find("absent.ckpt") != std::string::npos);
        }
    }
    SUBCASE("the whole flow") {
        pl::cmd_train(c, log);
        const auto synth = pl::cmd_synth(c, log);
        CHECK(synth.at("train").pairs + static_cast<int>(synth.at("train").failures.size()) == 12);
        CHECK(synth.at("heldout").pairs > 0);
        for (const auto& p : pl::load_pairs(pl::pair_root(c) + "/train")) CHECK(validate_pair(p).empty());

        SUBCASE("zero steps leaves margins unchanged") {
            c.set("fpo.steps", "0");
            const auto r = pl::cmd_fpo(c, log);
            CHECK(r.heldout_pre.mean == r.heldout_post.mean);
            CHECK_FALSE(r.margin_increased());
        }
        SUBCASE("beta is recorded in the resolved config") {
            c.set("fpo.beta", "0.5");
            const auto r = pl::cmd_fpo(c, log);
            const std::string resolved = slurp(pl::checkpoint_sibling(r.checkpoint, ".config"));
            CHECK(resolved.find("fpo.beta = 0.5") != std::string::npos);
            CHECK(fs::exists(pl::checkpoint_sibling(r.checkpoint, ".report.tsv")));
            CHECK(fs::exists(pl::checkpoint_sibling(r.checkpoint, ".log.tsv")));
        }
        SUBCASE("eval writes every requested threshold") {
            c.set("eval.thresholds", "0.5,0.7");
            const auto r = pl::cmd_eval(c, log);
            const auto j = nlohmann::json::parse(slurp(fs::path(r.out_dir) / "report.json"));
            const std::string dumped = j.dump();
            CHECK(dumped.find(eval::recall_key(0.5)) != std::string::npos);
            CHECK(dumped.find(eval::recall_key(0.7)) != std::string::npos);
            CHECK(fs::exists(fs::path(r.out_dir) / "predictions.jsonl"));
            const auto again = pl::cmd_eval(c, log);
            CHECK(slurp(fs::path(again.out_dir) / "report.json") == slurp(fs::path(r.out_dir) / "report.json"));
        }
        SUBCASE("synth reruns reproduce the manifests") {
            const auto again = pl::cmd_synth(c, log);
            CHECK(again.at("train").manifest_hash == synth.at("train").manifest_hash);
        }
        SUBCASE("a single factor") {
            pl::apply_factor_weights(c, "shift=1.0");
            pl::cmd_synth(c, log);
            for (const auto& p : pl::load_pairs(pl::pair_root(c) + "/train"))
                CHECK(p.provenance.factor == Factor::TemporalShift);
        }
    }
}

TEST_CASE("gradcheck table has four rows") {
    Config c;
    c.set("gradcheck.instances", "2");
    std::ostringstream log;
    const auto rows = pl::cmd_gradcheck(c, log);
    CHECK(rows.size() == 4);
    for (const auto& r : rows) CHECK(r.passed());
}
