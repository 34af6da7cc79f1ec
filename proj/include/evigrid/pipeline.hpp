// SPDX-License-Identifier: Apache-2.0
//
// The commands behind the CLI. Each one reads a resolved Config, consumes
// files, writes files plus its resolved config, and returns a summary. The
// on-disk layout under run.dir by default:
//
//   data/{train,heldout}/manifest.json, <id>.json, features/<id>.f32
//   sft.ckpt (+ .config, .report.tsv)
//   pairs/{train,heldout}/manifest.json, <base_id>.pair.json
//   fpo.ckpt (+ .config, .report.tsv, .log.tsv)
//   eval/<checkpoint stem>-<split>/report.json, report.tsv, predictions.jsonl, config

#pragma once

#include <array>
#include <iosfwd>
#include <map>
#include <string>
#include <vector>

#include "evigrid/config.hpp"
#include "evigrid/eval.hpp"
#include "evigrid/fpo.hpp"
#include "evigrid/gradcheck.hpp"
#include "evigrid/model.hpp"
#include "evigrid/synth.hpp"

namespace evigrid::pipeline {

enum class ExitCode : int { Ok = 0, Config = 2, Data = 3, Acceptance = 4 };

ExitCode exit_code_for(const Error& e);

// ---- typed views of a Config ------------------------------------------------

model::ToyConfig toy_config(const Config& c);
model::ModelConfig model_config(const Config& c);
model::TrainConfig train_config(const Config& c);
synth::SynthConfig synth_config(const Config& c);
fpo::FpoTrainConfig fpo_config(const Config& c);  // reference pointer left unset
eval::EvalConfig eval_config(const Config& c);

// Config key of a factor weight, e.g. "synth.weight.shift".
std::string factor_weight_key(Factor f);
// "shift=1.0,add=0.5": listed factors get the given weights, the rest 0.
void apply_factor_weights(Config& c, const std::string& spec);

// ---- paths ------------------------------------------------------------------

std::string data_dir(const Config& c);
std::string split_dir(const Config& c, const std::string& split);
std::string sft_checkpoint(const Config& c);
std::string pair_root(const Config& c);
std::string fpo_init(const Config& c);
std::string fpo_checkpoint(const Config& c);
std::string eval_checkpoint(const Config& c);
std::string eval_dir(const Config& c);

// Sibling file of a checkpoint: "run/sft.ckpt" + ".config" -> "run/sft.config".
std::string checkpoint_sibling(const std::string& checkpoint, const std::string& suffix);

// ---- files ------------------------------------------------------------------

// 16 hex digits of FNV-1a over the bytes.
std::string content_hash(std::string_view bytes);
void write_text_file(const std::string& path, std::string_view text);  // IoError
std::string read_text_file(const std::string& path);                    // IoError

// Writes annotation files, feature files and manifest.json; returns the
// manifest hash. `meta` is merged into the manifest.
std::string write_dataset(const std::string& dir, const std::vector<model::LoadedSample>& samples,
                          const std::string& meta_json);
// Loads every sample listed in dir/manifest.json, in manifest order.
std::vector<model::LoadedSample> load_dataset(const std::string& dir);

std::string write_pairs(const std::string& dir, const std::vector<PreferencePair>& pairs,
                        const std::string& meta_json);
std::vector<PreferencePair> load_pairs(const std::string& dir);

// Checkpoints carry the model config in their header.
void save_model(const std::string& path, const ParamStore& store, const model::ModelConfig& cfg);
ParamStore load_model(const std::string& path, model::ModelConfig* cfg);

// ---- commands ---------------------------------------------------------------

struct GenDataResult {
    std::map<std::string, int> counts;                 // split -> samples
    std::map<std::string, std::string> manifest_hash;  // split -> hash
};
GenDataResult cmd_gen_data(const Config& c, std::ostream& log);

struct TrainResult {
    std::string checkpoint;
    model::TrainReport report;
};
TrainResult cmd_train(const Config& c, std::ostream& log);

struct SynthSplitResult {
    int samples = 0;
    int pairs = 0;
    std::vector<std::string> failures;  // "<id>: <reason>"
    std::array<int, kNumFactors> factor_counts{};
    std::string manifest_hash;
};
std::map<std::string, SynthSplitResult> cmd_synth(const Config& c, std::ostream& log);

struct MarginSummary {
    double mean = 0.0;
    double temporal_mean = 0.0;  // over temporal-factor pairs
    double text_mean = 0.0;      // over text-factor pairs
    std::array<double, kNumFactors> factor_mean{};
    std::array<int, kNumFactors> factor_count{};
    int pairs = 0;
};
MarginSummary summarize_margins(ParamStore& store, const model::ModelConfig& mcfg,
                                const std::vector<fpo::PairExample>& pairs);

struct FpoResult {
    std::string checkpoint;
    int steps = 0;
    MarginSummary heldout_pre;
    MarginSummary heldout_post;
    double seconds = 0.0;
    bool margin_increased() const { return heldout_post.mean > heldout_pre.mean; }
};
FpoResult cmd_fpo(const Config& c, std::ostream& log);

struct EvalResult {
    std::string out_dir;
    eval::EvalReport report;
};
// Generation options and interval source come from the eval.* keys.
std::vector<eval::Prediction> predict(ParamStore& store, const model::ModelConfig& mcfg,
                                      const std::vector<model::LoadedSample>& data, const Config& c,
                                      std::map<std::string, double>* diagnostics = nullptr);
EvalResult cmd_eval(const Config& c, std::ostream& log);

std::vector<GradcheckRow> cmd_gradcheck(const Config& c, std::ostream& log);

// Prints the generated two-stage response and its intervals.
void cmd_infer(const Config& c, std::ostream& out);

}  // namespace evigrid::pipeline
