// SPDX-License-Identifier: Apache-2.0

#include "evigrid/config.hpp"

#include <charconv>
#include <fstream>
#include <sstream>

#include "evigrid/errors.hpp"

namespace evigrid {

const std::vector<ConfigKey>& config_schema() {
    static const std::vector<ConfigKey> schema = {
        {"format_version", "1", "config format version"},
        {"run.dir", "run", "root directory for default input and output paths"},

        {"data.dir", "", "dataset root holding train/ and heldout/ (default <run.dir>/data)"},
        {"data.seed", "7", "generator seed"},
        {"data.train_count", "512", "training samples"},
        {"data.heldout_count", "128", "held-out samples"},
        {"data.min_frames", "24", "shortest video, frames"},
        {"data.max_frames", "32", "longest video, frames"},
        {"data.feature_dim", "32", "frame feature width"},
        {"data.num_concepts", "8", "distinct concepts (<= model vocab concepts)"},
        {"data.min_events", "1", "fewest queried events per sample"},
        {"data.max_events", "3", "most queried events per sample"},
        {"data.min_event_len", "3", "shortest event, frames"},
        {"data.max_event_len", "5", "longest event, frames"},
        {"data.max_distractors", "1", "unqueried events per sample, drawn from 0..max"},
        {"data.ordered_question", "false", "list queried concepts in temporal order"},
        {"data.noise", "0.1", "std-dev of per-frame Gaussian noise"},
        {"data.signal", "1.0", "scale of the concept direction inside events"},
        {"data.concept_seed", "7", "seed of the concept direction table"},

        {"model.channels", "32", "hidden width"},
        {"model.layers", "2", "decoder blocks"},
        {"model.heads", "2", "attention heads"},
        {"model.max_frames", "32", "longest supported video"},
        {"model.max_question", "8", "longest supported question"},
        {"model.max_events", "8", "most evidence slots per response"},
        {"model.max_answer_len", "24", "answer token budget including </s>"},
        {"model.aggregate_semantics", "true", "pool salient frame features into evidence tokens"},
        {"model.evidence_refs", "true", "re-emit evidence tokens in the answer"},
        {"model.init_seed", "1", "parameter initialization seed"},

        {"train.data", "", "training split directory (default <data.dir>/train)"},
        {"train.out", "", "checkpoint path (default <run.dir>/sft.ckpt)"},
        {"train.epochs", "80", "passes over the training split"},
        {"train.batch_size", "8", "samples per optimizer step"},
        {"train.lr", "0.002", "Adam learning rate"},
        {"train.clip_norm", "1.0", "global gradient norm clip (0 disables)"},
        {"train.weight_decay", "0", "decoupled weight decay"},
        {"train.lr_final_fraction", "1.0", "final lr as a fraction of train.lr (linear)"},
        {"train.feature_jitter", "0.1", "std-dev of fresh feature noise per step"},
        {"train.w_sft", "1", "weight of the token cross-entropy"},
        {"train.w_gnd", "1", "weight of the per-frame grounding loss"},
        {"train.w_cons", "1", "weight of the evidence consistency loss"},
        {"train.seed", "1", "shuffle and jitter seed"},

        {"synth.splits", "train,heldout", "dataset splits to synthesize pairs for"},
        {"synth.out", "", "pair root, one subdirectory per split (default <run.dir>/pairs)"},
        {"synth.weight.shift", "1", "relative weight of TemporalShift"},
        {"synth.weight.add", "1", "relative weight of AddEvent"},
        {"synth.weight.delete", "1", "relative weight of DeleteEvent"},
        {"synth.weight.merge", "1", "relative weight of MergeEvents"},
        {"synth.weight.distort", "1", "relative weight of DistortText"},
        {"synth.weight.repeat", "1", "relative weight of RepeatText"},
        {"synth.shift_min", "0.1", "smallest shift, fraction of event length"},
        {"synth.shift_max", "0.4", "largest shift, fraction of event length"},
        {"synth.max_events", "3", "most events perturbed per pair"},
        {"synth.distorter", "rule", "rule or remote"},
        {"synth.endpoint", "", "remote distorter URL, http://host:port/path"},
        {"synth.max_in_flight", "4", "concurrent remote distorter requests"},
        {"synth.max_attempts", "8", "resampling attempts per sample"},
        {"synth.seed", "1", "synthesis seed"},

        {"fpo.init", "", "starting checkpoint (default <run.dir>/sft.ckpt)"},
        {"fpo.out", "", "output checkpoint (default <run.dir>/fpo.ckpt)"},
        {"fpo.pairs", "", "training pairs (default <synth.out>/train)"},
        {"fpo.heldout_pairs", "", "held-out pairs (default <synth.out>/heldout)"},
        {"fpo.beta", "1", "preference temperature"},
        {"fpo.use_reference", "true", "subtract the frozen starting model's margin"},
        {"fpo.steps", "300", "optimizer steps"},
        {"fpo.batch_size", "8", "pairs per step"},
        {"fpo.optimizer", "adam", "sgd or adam"},
        {"fpo.lr", "0.0002", "learning rate"},
        {"fpo.clip_norm", "1.0", "global gradient norm clip (0 disables)"},
        {"fpo.sft_weight", "1", "weight of the supervised loss on preferred samples mixed into each step"},
        {"fpo.seed", "1", "minibatch seed"},

        {"eval.checkpoint", "", "checkpoint to evaluate (default <run.dir>/sft.ckpt)"},
        {"eval.split", "heldout", "dataset split to evaluate"},
        {"eval.out", "", "report directory (default <run.dir>/eval/<checkpoint stem>-<split>)"},
        {"eval.thresholds", "0.5,0.7", "recall@1 IoU thresholds"},
        {"eval.match_iou", "0.5", "IoU threshold of event matching"},
        {"eval.interval_source", "stage1", "stage1 or final (answer re-grounding where referenced)"},
        {"eval.regrounding", "true", "re-ground answer-stage evidence tokens"},
        {"eval.salient_ratio", "0.6", "inference salient-frame ratio of the max similarity"},

        {"gradcheck.instances", "20", "random instances per row"},
        {"gradcheck.seed", "1", "instance seed"},

        {"infer.checkpoint", "", "checkpoint (default <run.dir>/sft.ckpt)"},
        {"infer.split", "heldout", "split holding the sample"},
        {"infer.index", "0", "sample position in the split manifest"},
        {"infer.annotation", "", "annotation file to use instead of a split sample"},
    };
    return schema;
}

namespace {

std::string trim(std::string_view s) {
    const auto b = s.find_first_not_of(" \t\r");
    if (b == std::string_view::npos) {
        return {};
    }
    const auto e = s.find_last_not_of(" \t\r");
    return std::string(s.substr(b, e - b + 1));
}

template <typename T>
T parse_number(const std::string& key, const std::string& text) {
    T v{};
    const char* end = text.data() + text.size();
    auto [ptr, ec] = std::from_chars(text.data(), end, v);
    if (ec != std::errc() || ptr != end || text.empty()) {
        throw ConfigError(key + ": expected a number, got '" + text + "'");
    }
    return v;
}

}  // namespace

Config::Config() {
    for (const auto& k : config_schema()) {
        values_[k.key] = k.default_value;
    }
}

Config Config::from_file(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) {
        throw IoError("cannot read config " + path);
    }
    std::stringstream ss;
    ss << in.rdbuf();
    Config c;
    c.merge_text(ss.str(), path);
    return c;
}

void Config::merge_text(std::string_view text, const std::string& source) {
    int line_no = 0;
    size_t pos = 0;
    while (pos <= text.size()) {
        const size_t nl = text.find('\n', pos);
        const std::string_view raw = text.substr(pos, nl == std::string_view::npos ? text.size() - pos : nl - pos);
        pos = nl == std::string_view::npos ? text.size() + 1 : nl + 1;
        ++line_no;
        std::string line = trim(raw);
        if (line.empty() || line[0] == '#') {
            continue;
        }
        const auto eq = line.find('=');
        if (eq == std::string::npos) {
            throw ConfigError(source + ":" + std::to_string(line_no) + ": expected 'key = value'");
        }
        try {
            set(trim(line.substr(0, eq)), trim(line.substr(eq + 1)));
        } catch (const ConfigError& e) {
            throw ConfigError(source + ":" + std::to_string(line_no) + ": " + e.what());
        }
    }
}

void Config::set(const std::string& key, const std::string& value) {
    auto it = values_.find(key);
    if (it == values_.end()) {
        throw ConfigError("unknown key '" + key + "'");
    }
    if (key == "format_version" && value != std::to_string(kConfigFormatVersion)) {
        throw ConfigError("format_version " + value + " is not supported (expected " +
                          std::to_string(kConfigFormatVersion) + ")");
    }
    it->second = value;
}

void Config::set_assignment(const std::string& assignment) {
    const auto eq = assignment.find('=');
    if (eq == std::string::npos) {
        throw ConfigError("--set expects key=value, got '" + assignment + "'");
    }
    set(trim(assignment.substr(0, eq)), trim(assignment.substr(eq + 1)));
}

const std::string& Config::get(const std::string& key) const {
    auto it = values_.find(key);
    if (it == values_.end()) {
        throw ConfigError("unknown key '" + key + "'");
    }
    return it->second;
}

int Config::get_int(const std::string& key) const { return parse_number<int>(key, get(key)); }

uint64_t Config::get_u64(const std::string& key) const { return parse_number<uint64_t>(key, get(key)); }

double Config::get_double(const std::string& key) const { return parse_number<double>(key, get(key)); }

bool Config::get_bool(const std::string& key) const {
    const std::string& v = get(key);
    if (v == "true" || v == "1" || v == "on" || v == "yes") {
        return true;
    }
    if (v == "false" || v == "0" || v == "off" || v == "no") {
        return false;
    }
    throw ConfigError(key + ": expected true/false, got '" + v + "'");
}

std::vector<std::string> Config::get_list(const std::string& key) const {
    std::vector<std::string> out;
    std::stringstream ss(get(key));
    std::string item;
    while (std::getline(ss, item, ',')) {
        item = trim(item);
        if (!item.empty()) {
            out.push_back(item);
        }
    }
    return out;
}

std::vector<double> Config::get_doubles(const std::string& key) const {
    std::vector<double> out;
    for (const auto& s : get_list(key)) {
        out.push_back(parse_number<double>(key, s));
    }
    return out;
}

std::string Config::dump() const {
    std::ostringstream os;
    os << "# evigrid resolved configuration\n";
    for (const auto& k : config_schema()) {
        os << k.key << " = " << values_.at(k.key) << '\n';
    }
    return os.str();
}

}  // namespace evigrid
