// SPDX-License-Identifier: Apache-2.0

#include "evigrid/pipeline.hpp"

#include <filesystem>
#include <fstream>
#include <iomanip>
#include <memory>
#include <optional>
#include <ostream>
#include <sstream>
#include <unordered_map>

#include "evigrid/parallel.hpp"
#include "evigrid/rng.hpp"
#include "json.hpp"

namespace evigrid::pipeline {

namespace fs = std::filesystem;
using json = nlohmann::ordered_json;

ExitCode exit_code_for(const Error& e) {
    switch (e.category()) {
        case Error::Category::Config:
            return ExitCode::Config;
        case Error::Category::Data:
            return ExitCode::Data;
        case Error::Category::Numeric:
        case Error::Category::Acceptance:
            return ExitCode::Acceptance;
    }
    return ExitCode::Data;
}

namespace {

void require(bool ok, const std::string& key, const std::string& rule) {
    if (!ok) {
        throw ConfigError(key + " " + rule);
    }
}

std::string or_default(const Config& c, const std::string& key, const fs::path& fallback) {
    const std::string& v = c.get(key);
    return v.empty() ? fallback.string() : v;
}

constexpr std::array<const char*, kNumFactors> kFactorKeys = {"shift", "add", "delete", "merge", "distort", "repeat"};

}  // namespace

// ---- typed views ----------------------------------------------------------------

model::ToyConfig toy_config(const Config& c) {
    model::ToyConfig t;
    t.min_frames = c.get_int("data.min_frames");
    t.max_frames = c.get_int("data.max_frames");
    t.feature_dim = c.get_int("data.feature_dim");
    t.num_concepts = c.get_int("data.num_concepts");
    t.min_events = c.get_int("data.min_events");
    t.max_events = c.get_int("data.max_events");
    t.min_event_len = c.get_int("data.min_event_len");
    t.max_event_len = c.get_int("data.max_event_len");
    t.max_distractors = c.get_int("data.max_distractors");
    t.ordered_question = c.get_bool("data.ordered_question");
    t.noise = c.get_double("data.noise");
    t.signal = c.get_double("data.signal");
    t.concept_seed = c.get_u64("data.concept_seed");
    return t;
}

model::ModelConfig model_config(const Config& c) {
    model::ModelConfig m;
    m.channels = c.get_int("model.channels");
    m.feature_dim = c.get_int("data.feature_dim");
    m.layers = c.get_int("model.layers");
    m.heads = c.get_int("model.heads");
    m.max_frames = c.get_int("model.max_frames");
    m.max_question = c.get_int("model.max_question");
    m.max_events = c.get_int("model.max_events");
    m.max_answer_len = c.get_int("model.max_answer_len");
    m.aggregate_semantics = c.get_bool("model.aggregate_semantics");
    m.evidence_refs = c.get_bool("model.evidence_refs");
    m.validate();
    return m;
}

model::TrainConfig train_config(const Config& c) {
    model::TrainConfig t;
    t.epochs = c.get_int("train.epochs");
    t.batch_size = c.get_int("train.batch_size");
    t.adam.lr = c.get_double("train.lr");
    t.adam.clip_norm = c.get_double("train.clip_norm");
    t.adam.weight_decay = c.get_double("train.weight_decay");
    t.lr_final_fraction = c.get_double("train.lr_final_fraction");
    t.feature_jitter = c.get_double("train.feature_jitter");
    t.weights = {c.get_double("train.w_sft"), c.get_double("train.w_gnd"), c.get_double("train.w_cons")};
    t.seed = c.get_u64("train.seed");
    require(t.epochs >= 0, "train.epochs", "must be >= 0");
    require(t.batch_size >= 1, "train.batch_size", "must be >= 1");
    require(t.adam.lr > 0.0, "train.lr", "must be positive");
    require(t.adam.clip_norm >= 0.0, "train.clip_norm", "must be >= 0");
    require(t.adam.weight_decay >= 0.0, "train.weight_decay", "must be >= 0");
    require(t.lr_final_fraction >= 0.0, "train.lr_final_fraction", "must be >= 0");
    require(t.feature_jitter >= 0.0, "train.feature_jitter", "must be >= 0");
    require(t.weights.sft >= 0.0 && t.weights.gnd >= 0.0 && t.weights.cons >= 0.0, "train.w_*", "must be >= 0");
    return t;
}

std::string factor_weight_key(Factor f) { return std::string("synth.weight.") + kFactorKeys[static_cast<size_t>(f)]; }

void apply_factor_weights(Config& c, const std::string& spec) {
    std::array<std::string, kNumFactors> values;
    values.fill("0");
    std::stringstream ss(spec);
    std::string item;
    bool any = false;
    while (std::getline(ss, item, ',')) {
        const auto eq = item.find('=');
        if (eq == std::string::npos) {
            throw ConfigError("--factors expects name=weight pairs, got '" + item + "'");
        }
        const std::string name = item.substr(0, eq);
        size_t idx = 0;
        while (idx < kFactorKeys.size() && name != kFactorKeys[idx]) {
            ++idx;
        }
        if (idx == kFactorKeys.size()) {
            throw ConfigError("--factors: unknown factor '" + name + "' (shift, add, delete, merge, distort, repeat)");
        }
        values[idx] = item.substr(eq + 1);
        any = true;
    }
    if (!any) {
        throw ConfigError("--factors: no factors given");
    }
    for (int f = 0; f < kNumFactors; ++f) {
        c.set(factor_weight_key(static_cast<Factor>(f)), values[static_cast<size_t>(f)]);
    }
}

synth::SynthConfig synth_config(const Config& c) {
    synth::SynthConfig s;
    for (int f = 0; f < kNumFactors; ++f) {
        s.weights[static_cast<size_t>(f)] = c.get_double(factor_weight_key(static_cast<Factor>(f)));
    }
    s.shift_min = c.get_double("synth.shift_min");
    s.shift_max = c.get_double("synth.shift_max");
    s.max_events = c.get_int("synth.max_events");
    const std::string& kind = c.get("synth.distorter");
    if (kind == "rule") {
        s.distorter = synth::DistorterKind::RuleBased;
    } else if (kind == "remote") {
        s.distorter = synth::DistorterKind::Remote;
    } else {
        throw ConfigError("synth.distorter must be 'rule' or 'remote', got '" + kind + "'");
    }
    s.endpoint = c.get("synth.endpoint");
    s.max_in_flight = c.get_int("synth.max_in_flight");
    s.max_attempts = c.get_int("synth.max_attempts");
    s.seed = c.get_u64("synth.seed");
    s.validate();
    return s;
}

fpo::FpoTrainConfig fpo_config(const Config& c) {
    fpo::FpoTrainConfig f;
    f.steps = c.get_int("fpo.steps");
    f.batch_size = c.get_int("fpo.batch_size");
    const std::string opt = c.get("fpo.optimizer");
    require(opt == "sgd" || opt == "adam", "fpo.optimizer", "must be sgd or adam");
    f.optimizer.kind = opt == "sgd" ? OptimizerKind::Sgd : OptimizerKind::Adam;
    f.optimizer.adam.lr = c.get_double("fpo.lr");
    f.optimizer.adam.clip_norm = c.get_double("fpo.clip_norm");
    f.fpo.beta = c.get_double("fpo.beta");
    f.fpo.use_reference = c.get_bool("fpo.use_reference");
    f.sft_weight = c.get_double("fpo.sft_weight");
    f.sft_terms = {c.get_double("train.w_sft"), c.get_double("train.w_gnd"), c.get_double("train.w_cons")};
    f.seed = c.get_u64("fpo.seed");
    require(f.steps >= 0, "fpo.steps", "must be >= 0");
    require(f.batch_size >= 1, "fpo.batch_size", "must be >= 1");
    require(f.optimizer.adam.lr > 0.0, "fpo.lr", "must be positive");
    require(f.optimizer.adam.clip_norm >= 0.0, "fpo.clip_norm", "must be >= 0");
    require(f.fpo.beta > 0.0, "fpo.beta", "must be positive");
    require(f.sft_weight >= 0.0, "fpo.sft_weight", "must be >= 0");
    return f;
}

eval::EvalConfig eval_config(const Config& c) {
    eval::EvalConfig e;
    e.thresholds = c.get_doubles("eval.thresholds");
    e.match_iou = c.get_double("eval.match_iou");
    e.validate();
    return e;
}

// ---- paths ------------------------------------------------------------------------

std::string data_dir(const Config& c) { return or_default(c, "data.dir", fs::path(c.get("run.dir")) / "data"); }

std::string split_dir(const Config& c, const std::string& split) { return (fs::path(data_dir(c)) / split).string(); }

std::string sft_checkpoint(const Config& c) {
    return or_default(c, "train.out", fs::path(c.get("run.dir")) / "sft.ckpt");
}

std::string pair_root(const Config& c) { return or_default(c, "synth.out", fs::path(c.get("run.dir")) / "pairs"); }

std::string fpo_init(const Config& c) { return or_default(c, "fpo.init", sft_checkpoint(c)); }

std::string fpo_checkpoint(const Config& c) {
    return or_default(c, "fpo.out", fs::path(c.get("run.dir")) / "fpo.ckpt");
}

std::string eval_checkpoint(const Config& c) { return or_default(c, "eval.checkpoint", sft_checkpoint(c)); }

std::string eval_dir(const Config& c) {
    const std::string stem = fs::path(eval_checkpoint(c)).stem().string();
    return or_default(c, "eval.out", fs::path(c.get("run.dir")) / "eval" / (stem + "-" + c.get("eval.split")));
}

std::string checkpoint_sibling(const std::string& checkpoint, const std::string& suffix) {
    fs::path p(checkpoint);
    p.replace_extension(suffix);
    return p.string();
}

// ---- files ------------------------------------------------------------------------

std::string content_hash(std::string_view bytes) {
    uint64_t h = 0xcbf29ce484222325ULL;
    for (unsigned char ch : bytes) {
        h ^= ch;
        h *= 0x100000001b3ULL;
    }
    std::ostringstream os;
    os << std::hex << std::setw(16) << std::setfill('0') << h;
    return os.str();
}

void write_text_file(const std::string& path, std::string_view text) {
    const fs::path p(path);
    std::error_code ec;
    if (p.has_parent_path()) {
        fs::create_directories(p.parent_path(), ec);
    }
    std::ofstream out(p, std::ios::binary | std::ios::trunc);
    if (!out) {
        throw IoError("cannot write " + path);
    }
    out.write(text.data(), static_cast<std::streamsize>(text.size()));
    if (!out) {
        throw IoError("write failed for " + path);
    }
}

std::string read_text_file(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) {
        throw IoError("cannot read " + path);
    }
    std::stringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

namespace {

json parse_manifest(const std::string& dir) {
    const std::string path = (fs::path(dir) / "manifest.json").string();
    const std::string text = read_text_file(path);
    try {
        json m = json::parse(text);
        if (m.at("format_version").get<int>() != 1) {
            throw SchemaError(path + ": unsupported format_version");
        }
        m.at("files");
        return m;
    } catch (const json::exception& e) {
        throw SchemaError(path + ": " + e.what());
    }
}

}  // namespace

std::string write_dataset(const std::string& dir, const std::vector<model::LoadedSample>& samples,
                          const std::string& meta_json) {
    const fs::path root(dir);
    std::error_code ec;
    fs::create_directories(root / "features", ec);
    if (ec) {
        throw IoError("cannot create " + (root / "features").string() + ": " + ec.message());
    }
    json files = json::array();
    for (const auto& s : samples) {
        const std::string feat_rel = "features/" + s.ann.id + ".f32";
        AnnotationSample ann = s.ann;
        ann.video = VideoRef{feat_rel, s.video.num_frames(), s.video.channels()};
        const std::string ann_text = serialize_annotation(ann);
        const std::string feat_bytes = encode_features(s.video);
        write_text_file((root / feat_rel).string(), feat_bytes);
        write_text_file((root / (s.ann.id + ".json")).string(), ann_text);
        files.push_back({{"id", s.ann.id},
                         {"annotation", s.ann.id + ".json"},
                         {"features", feat_rel},
                         {"annotation_hash", content_hash(ann_text)},
                         {"features_hash", content_hash(feat_bytes)}});
    }
    json manifest;
    manifest["format_version"] = 1;
    const json meta = json::parse(meta_json);
    for (const auto& [k, v] : meta.items()) {
        manifest[k] = v;
    }
    manifest["count"] = samples.size();
    manifest["files"] = std::move(files);
    const std::string text = manifest.dump(2) + "\n";
    write_text_file((root / "manifest.json").string(), text);
    return content_hash(text);
}

std::vector<model::LoadedSample> load_dataset(const std::string& dir) {
    const json manifest = parse_manifest(dir);
    std::vector<model::LoadedSample> out;
    for (const auto& entry : manifest.at("files")) {
        const std::string path = (fs::path(dir) / entry.at("annotation").get<std::string>()).string();
        try {
            model::LoadedSample s;
            s.ann = parse_annotation(read_text_file(path));
            if (entry.contains("id") && entry.at("id").get<std::string>() != s.ann.id) {
                throw InvariantError("id '" + s.ann.id + "' differs from the manifest entry");
            }
            s.video = resolve_video(s.ann, dir);
            out.push_back(std::move(s));
        } catch (const Error& e) {
            e.rethrow_with_context(path);
        }
    }
    return out;
}

std::string write_pairs(const std::string& dir, const std::vector<PreferencePair>& pairs, const std::string& meta_json) {
    const fs::path root(dir);
    json files = json::array();
    for (const auto& p : pairs) {
        const std::string text = serialize_pair(p);
        const std::string name = p.base_id + ".pair.json";
        write_text_file((root / name).string(), text);
        files.push_back({{"base_id", p.base_id},
                         {"file", name},
                         {"factor", std::string(factor_name(p.provenance.factor))},
                         {"hash", content_hash(text)}});
    }
    json manifest;
    manifest["format_version"] = 1;
    const json meta = json::parse(meta_json);
    for (const auto& [k, v] : meta.items()) {
        manifest[k] = v;
    }
    manifest["count"] = pairs.size();
    manifest["files"] = std::move(files);
    const std::string text = manifest.dump(2) + "\n";
    write_text_file((root / "manifest.json").string(), text);
    return content_hash(text);
}

std::vector<PreferencePair> load_pairs(const std::string& dir) {
    const json manifest = parse_manifest(dir);
    std::vector<PreferencePair> out;
    for (const auto& entry : manifest.at("files")) {
        const std::string path = (fs::path(dir) / entry.at("file").get<std::string>()).string();
        try {
            out.push_back(parse_pair(read_text_file(path)));
        } catch (const Error& e) {
            e.rethrow_with_context(path);
        }
    }
    return out;
}

void save_model(const std::string& path, const ParamStore& store, const model::ModelConfig& cfg) {
    const fs::path p(path);
    if (p.has_parent_path()) {
        std::error_code ec;
        fs::create_directories(p.parent_path(), ec);
    }
    save_checkpoint(path, store, json{{"model", json::parse(model::config_to_json(cfg))}}.dump());
}

ParamStore load_model(const std::string& path, model::ModelConfig* cfg) {
    std::string meta;
    ParamStore store = load_checkpoint(path, &meta);
    try {
        const json m = json::parse(meta);
        *cfg = model::config_from_json(m.at("model").dump());
    } catch (const json::exception& e) {
        throw SchemaError(path + ": checkpoint has no model config (" + e.what() + ")");
    }
    if (store.parameter_count() != cfg->expected_parameter_count()) {
        throw SchemaError(path + ": parameter count " + std::to_string(store.parameter_count()) +
                          " does not match its model config (" + std::to_string(cfg->expected_parameter_count()) + ")");
    }
    return store;
}

// ---- commands ---------------------------------------------------------------------

namespace {

json toy_json(const model::ToyConfig& t) {
    return {{"min_frames", t.min_frames},       {"max_frames", t.max_frames},
            {"feature_dim", t.feature_dim},     {"num_concepts", t.num_concepts},
            {"min_events", t.min_events},       {"max_events", t.max_events},
            {"min_event_len", t.min_event_len}, {"max_event_len", t.max_event_len},
            {"max_distractors", t.max_distractors}, {"ordered_question", t.ordered_question},
            {"noise", t.noise},                 {"signal", t.signal},
            {"concept_seed", t.concept_seed}};
}

std::vector<AnnotationSample> annotations(const std::vector<model::LoadedSample>& data) {
    std::vector<AnnotationSample> out;
    out.reserve(data.size());
    for (const auto& s : data) {
        out.push_back(s.ann);
    }
    return out;
}

}  // namespace

GenDataResult cmd_gen_data(const Config& c, std::ostream& log) {
    const model::ToyConfig toy = toy_config(c);
    const model::ModelConfig mcfg = model_config(c);
    toy.validate(mcfg.vocab);
    const int n_train = c.get_int("data.train_count");
    const int n_held = c.get_int("data.heldout_count");
    require(n_train >= 1, "data.train_count", "must be >= 1");
    require(n_held >= 0, "data.heldout_count", "must be >= 0");
    const uint64_t seed = c.get_u64("data.seed");

    GenDataResult result;
    struct Split {
        const char* name;
        const char* prefix;
        int count;
        int first;
    };
    for (const Split& sp : {Split{"train", "train", n_train, 0}, Split{"heldout", "held", n_held, n_train}}) {
        if (sp.count == 0) {
            continue;
        }
        const auto samples = model::make_toy_dataset(sp.count, toy, mcfg.vocab, seed, sp.first, sp.prefix);
        const json meta = {{"split", sp.name}, {"seed", seed}, {"first_index", sp.first}, {"generator", toy_json(toy)}};
        const std::string hash = write_dataset(split_dir(c, sp.name), samples, meta.dump());
        result.counts[sp.name] = sp.count;
        result.manifest_hash[sp.name] = hash;
        log << sp.name << ": " << sp.count << " samples in " << split_dir(c, sp.name) << ", manifest " << hash << '\n';
    }
    write_text_file((fs::path(data_dir(c)) / "config").string(), c.dump());
    return result;
}

TrainResult cmd_train(const Config& c, std::ostream& log) {
    const model::ModelConfig mcfg = model_config(c);
    model::TrainConfig tc = train_config(c);
    const std::string data_path = or_default(c, "train.data", split_dir(c, "train"));
    const auto data = load_dataset(data_path);
    if (data.empty()) {
        throw InvariantError(data_path + ": no training samples");
    }
    ParamStore store = model::init_model(mcfg, c.get_u64("model.init_seed"));
    log << "training on " << data.size() << " samples, " << store.parameter_count() << " parameters, " << tc.epochs
        << " epochs\n";
    tc.progress = &log;
    TrainResult result;
    result.checkpoint = sft_checkpoint(c);
    result.report = model::train(store, mcfg, data, tc);

    save_model(result.checkpoint, store, mcfg);
    write_text_file(checkpoint_sibling(result.checkpoint, ".config"), c.dump());
    std::ostringstream rep;
    rep << "epoch\tsft\tgnd\tcons\ttotal\n";
    for (const auto& e : result.report.epochs) {
        rep << e.epoch << '\t' << e.sft << '\t' << e.gnd << '\t' << e.cons << '\t' << e.total << '\n';
    }
    write_text_file(checkpoint_sibling(result.checkpoint, ".report.tsv"), rep.str());
    log << "wrote " << result.checkpoint << " (" << result.report.steps << " steps, " << std::fixed
        << std::setprecision(1) << result.report.seconds << " s)\n";
    log.unsetf(std::ios::floatfield);
    return result;
}

std::map<std::string, SynthSplitResult> cmd_synth(const Config& c, std::ostream& log) {
    const synth::SynthConfig sc = synth_config(c);
    const model::ModelConfig mcfg = model_config(c);
    const auto distorter = synth::make_distorter(sc, mcfg.vocab);
    std::map<std::string, SynthSplitResult> results;
    for (const auto& split : c.get_list("synth.splits")) {
        const std::string src = split_dir(c, split);
        const auto data = load_dataset(src);
        std::vector<std::optional<PreferencePair>> made(data.size());
        std::vector<std::string> errors(data.size());
        parallel_for(data.size(), [&](size_t i) {
            const AnnotationSample& s = data[i].ann;
            try {
                made[i] = synth::synthesize_pair(s, sc, *distorter, derive_seed(sc.seed, s.id));
            } catch (const ConfigError&) {
                throw;
            } catch (const Error& e) {
                errors[i] = s.id + ": " + e.what();
            }
        });
        SynthSplitResult r;
        r.samples = static_cast<int>(data.size());
        std::vector<PreferencePair> pairs;
        for (size_t i = 0; i < data.size(); ++i) {
            if (made[i]) {
                ++r.factor_counts[static_cast<size_t>(made[i]->provenance.factor)];
                pairs.push_back(std::move(*made[i]));
            } else {
                r.failures.push_back(errors[i]);
                log << "skipped " << errors[i] << '\n';
            }
        }
        r.pairs = static_cast<int>(pairs.size());
        json weights = json::object();
        for (int f = 0; f < kNumFactors; ++f) {
            weights[kFactorKeys[static_cast<size_t>(f)]] = sc.weights[static_cast<size_t>(f)];
        }
        const json meta = {{"split", split},
                           {"seed", sc.seed},
                           {"source", src},
                           {"source_manifest", content_hash(read_text_file((fs::path(src) / "manifest.json").string()))},
                           {"weights", weights}};
        const std::string out_dir = (fs::path(pair_root(c)) / split).string();
        r.manifest_hash = write_pairs(out_dir, pairs, meta.dump());
        log << split << ": " << r.pairs << " pairs from " << r.samples << " samples, manifest " << r.manifest_hash
            << '\n';
        for (int f = 0; f < kNumFactors; ++f) {
            log << "  " << factor_name(static_cast<Factor>(f)) << '\t' << r.factor_counts[static_cast<size_t>(f)]
                << '\n';
        }
        results[split] = std::move(r);
    }
    write_text_file((fs::path(pair_root(c)) / "config").string(), c.dump());
    return results;
}

MarginSummary summarize_margins(ParamStore& store, const model::ModelConfig& mcfg,
                                const std::vector<fpo::PairExample>& pairs) {
    std::vector<double> margins(pairs.size());
    const fpo::FpoConfig plain;
    parallel_for(pairs.size(), [&](size_t i) {
        margins[i] = fpo::score_pair(store, mcfg, *pairs[i].base, pairs[i].pair, plain).margin;
    });
    MarginSummary m;
    m.pairs = static_cast<int>(pairs.size());
    int temporal = 0;
    int text = 0;
    for (size_t i = 0; i < pairs.size(); ++i) {
        const Factor f = pairs[i].pair.provenance.factor;
        m.mean += margins[i];
        m.factor_mean[static_cast<size_t>(f)] += margins[i];
        ++m.factor_count[static_cast<size_t>(f)];
        if (is_temporal(f)) {
            m.temporal_mean += margins[i];
            ++temporal;
        } else {
            m.text_mean += margins[i];
            ++text;
        }
    }
    if (!pairs.empty()) {
        m.mean /= static_cast<double>(pairs.size());
    }
    if (temporal > 0) {
        m.temporal_mean /= temporal;
    }
    if (text > 0) {
        m.text_mean /= text;
    }
    for (int f = 0; f < kNumFactors; ++f) {
        if (m.factor_count[static_cast<size_t>(f)] > 0) {
            m.factor_mean[static_cast<size_t>(f)] /= m.factor_count[static_cast<size_t>(f)];
        }
    }
    return m;
}

namespace {

std::vector<fpo::PairExample> attach_bases(const std::vector<PreferencePair>& pairs,
                                           const std::unordered_map<std::string, const model::LoadedSample*>& bases,
                                           const std::string& where) {
    std::vector<fpo::PairExample> out;
    out.reserve(pairs.size());
    for (const auto& p : pairs) {
        auto it = bases.find(p.base_id);
        if (it == bases.end()) {
            throw InvariantError(where + ": pair base '" + p.base_id + "' is not in the dataset");
        }
        if (it->second->video.num_frames() != p.num_frames) {
            throw InvariantError(where + ": pair " + p.base_id + " was made for a video of a different length");
        }
        out.push_back({it->second, p});
    }
    return out;
}

void write_margins(std::ostream& os, const std::string& label, const MarginSummary& m) {
    os << label << "\tall\t" << m.pairs << '\t' << m.mean << '\n';
    int temporal = 0;
    int text = 0;
    for (int f = 0; f < kNumFactors; ++f) {
        (is_temporal(static_cast<Factor>(f)) ? temporal : text) += m.factor_count[static_cast<size_t>(f)];
    }
    os << label << "\ttemporal\t" << temporal << '\t' << m.temporal_mean << '\n';
    os << label << "\ttext\t" << text << '\t' << m.text_mean << '\n';
    for (int f = 0; f < kNumFactors; ++f) {
        os << label << '\t' << factor_name(static_cast<Factor>(f)) << '\t' << m.factor_count[static_cast<size_t>(f)]
           << '\t' << m.factor_mean[static_cast<size_t>(f)] << '\n';
    }
}

}  // namespace

FpoResult cmd_fpo(const Config& c, std::ostream& log) {
    fpo::FpoTrainConfig ft = fpo_config(c);
    model::ModelConfig mcfg;
    ParamStore store = load_model(fpo_init(c), &mcfg);

    std::vector<model::LoadedSample> data = load_dataset(split_dir(c, "train"));
    if (fs::exists(fs::path(split_dir(c, "heldout")) / "manifest.json")) {
        auto held = load_dataset(split_dir(c, "heldout"));
        data.insert(data.end(), std::make_move_iterator(held.begin()), std::make_move_iterator(held.end()));
    }
    std::unordered_map<std::string, const model::LoadedSample*> bases;
    for (const auto& s : data) {
        bases[s.ann.id] = &s;
    }
    const std::string train_pairs_dir = or_default(c, "fpo.pairs", fs::path(pair_root(c)) / "train");
    const std::string held_pairs_dir = or_default(c, "fpo.heldout_pairs", fs::path(pair_root(c)) / "heldout");
    const auto train_pairs = attach_bases(load_pairs(train_pairs_dir), bases, train_pairs_dir);
    const auto held_pairs = attach_bases(load_pairs(held_pairs_dir), bases, held_pairs_dir);
    if (train_pairs.empty() && ft.steps > 0) {
        throw InvariantError(train_pairs_dir + ": no training pairs");
    }

    const ParamStore reference = store;
    ft.fpo.reference = ft.fpo.use_reference ? &reference : nullptr;

    FpoResult result;
    result.checkpoint = fpo_checkpoint(c);
    result.steps = ft.steps;
    result.heldout_pre = summarize_margins(store, mcfg, held_pairs);
    log << "preference training on " << train_pairs.size() << " pairs, " << ft.steps << " steps; held-out margin "
        << result.heldout_pre.mean << " over " << held_pairs.size() << " pairs\n";

    const std::string log_path = checkpoint_sibling(result.checkpoint, ".log.tsv");
    if (fs::path(log_path).has_parent_path()) {
        fs::create_directories(fs::path(log_path).parent_path());
    }
    std::ofstream step_log(log_path, std::ios::trunc);
    if (!step_log) {
        throw IoError("cannot write " + log_path);
    }
    const fpo::FpoTrainReport rep = fpo::train_fpo(store, mcfg, train_pairs, ft, &step_log);
    result.seconds = rep.seconds;
    result.heldout_post = summarize_margins(store, mcfg, held_pairs);

    save_model(result.checkpoint, store, mcfg);
    write_text_file(checkpoint_sibling(result.checkpoint, ".config"), c.dump());
    std::ostringstream os;
    os << "when\tfactor\tpairs\tmean_margin\n";
    write_margins(os, "pre", result.heldout_pre);
    write_margins(os, "post", result.heldout_post);
    write_text_file(checkpoint_sibling(result.checkpoint, ".report.tsv"), os.str());
    log << "held-out margin " << result.heldout_pre.mean << " -> " << result.heldout_post.mean << " (temporal "
        << result.heldout_pre.temporal_mean << " -> " << result.heldout_post.temporal_mean << ", text "
        << result.heldout_pre.text_mean << " -> " << result.heldout_post.text_mean << "), " << rep.seconds << " s\n";
    log << "wrote " << result.checkpoint << '\n';
    return result;
}

std::vector<eval::Prediction> predict(ParamStore& store, const model::ModelConfig& mcfg,
                                      const std::vector<model::LoadedSample>& data, const Config& c,
                                      std::map<std::string, double>* diagnostics) {
    model::GenerateOptions opts;
    opts.grounding.salient_ratio = c.get_double("eval.salient_ratio");
    opts.grounding.validate();
    opts.regrounding = c.get_bool("eval.regrounding");
    const std::string& source = c.get("eval.interval_source");
    if (source != "stage1" && source != "final") {
        throw ConfigError("eval.interval_source must be 'stage1' or 'final', got '" + source + "'");
    }
    std::vector<model::GenerationResult> gens(data.size());
    parallel_for(data.size(), [&](size_t i) {
        gens[i] = model::generate(store, mcfg, data[i].video, data[i].ann.question, opts);
    });
    std::vector<eval::Prediction> preds;
    preds.reserve(data.size());
    long refs = 0;
    long disagreements = 0;
    long truncated = 0;
    for (size_t i = 0; i < data.size(); ++i) {
        const auto& g = gens[i];
        preds.push_back({data[i].ann.id, source == "stage1" ? g.stage1_intervals : g.final_intervals,
                         g.response.text_tokens()});
        refs += static_cast<long>(g.answer_intervals.size());
        disagreements += g.regrounding_disagreements;
        truncated += g.truncated ? 1 : 0;
    }
    if (diagnostics != nullptr) {
        (*diagnostics)["regrounding_disagreement_rate"] =
            refs > 0 ? static_cast<double>(disagreements) / static_cast<double>(refs) : 0.0;
        (*diagnostics)["truncated_rate"] =
            data.empty() ? 0.0 : static_cast<double>(truncated) / static_cast<double>(data.size());
    }
    return preds;
}

EvalResult cmd_eval(const Config& c, std::ostream& log) {
    const eval::EvalConfig ecfg = eval_config(c);
    model::ModelConfig mcfg;
    const std::string ckpt = eval_checkpoint(c);
    ParamStore store = load_model(ckpt, &mcfg);
    const auto data = load_dataset(split_dir(c, c.get("eval.split")));

    std::map<std::string, double> diagnostics;
    const auto preds = predict(store, mcfg, data, c, &diagnostics);
    EvalResult result;
    result.out_dir = eval_dir(c);
    result.report = eval::evaluate(preds, annotations(data), ecfg);
    result.report.diagnostics = diagnostics;

    const fs::path out(result.out_dir);
    write_text_file((out / "report.json").string(), eval::report_json(result.report));
    write_text_file((out / "report.tsv").string(), eval::report_tsv(result.report));
    std::ostringstream pj;
    for (const auto& p : preds) {
        json iv = json::array();
        for (const auto& i : p.intervals) {
            iv.push_back({i.start, i.end});
        }
        pj << json{{"id", p.id}, {"intervals", iv}, {"text", p.text}}.dump() << '\n';
    }
    write_text_file((out / "predictions.jsonl").string(), pj.str());
    write_text_file((out / "config").string(), c.dump());
    log << "evaluated " << ckpt << " on " << data.size() << " " << c.get("eval.split") << " samples\n";
    for (const auto& [k, v] : result.report.aggregates) {
        log << "  " << k << '\t' << v << '\n';
    }
    log << "wrote " << result.out_dir << '\n';
    return result;
}

std::vector<GradcheckRow> cmd_gradcheck(const Config& c, std::ostream& log) {
    const int n = c.get_int("gradcheck.instances");
    require(n >= 1, "gradcheck.instances", "must be >= 1");
    const auto rows = run_gradcheck(n, c.get_u64("gradcheck.seed"));
    log << "check\tinstances\tmax_rel_error\tseconds\tstatus\n";
    for (const auto& r : rows) {
        log << r.name << '\t' << r.instances << '\t' << std::scientific << std::setprecision(3) << r.max_rel_error
            << '\t' << std::fixed << std::setprecision(2) << r.seconds << '\t' << (r.passed() ? "pass" : "FAIL")
            << '\n';
    }
    log.unsetf(std::ios::floatfield);
    log << std::setprecision(6);
    return rows;
}

namespace {

std::string show_interval(const Interval& iv) {
    return "[" + std::to_string(iv.start) + "," + std::to_string(iv.end) + "]";
}

}  // namespace

void cmd_infer(const Config& c, std::ostream& out) {
    model::ModelConfig mcfg;
    const std::string ckpt = or_default(c, "infer.checkpoint", sft_checkpoint(c));
    ParamStore store = load_model(ckpt, &mcfg);
    model::LoadedSample sample;
    if (!c.get("infer.annotation").empty()) {
        const std::string path = c.get("infer.annotation");
        sample.ann = parse_annotation(read_text_file(path));
        sample.video = resolve_video(sample.ann, fs::path(path).parent_path().string());
    } else {
        const auto data = load_dataset(split_dir(c, c.get("infer.split")));
        const int idx = c.get_int("infer.index");
        if (idx < 0 || idx >= static_cast<int>(data.size())) {
            throw ConfigError("infer.index " + std::to_string(idx) + " outside 0.." + std::to_string(data.size() - 1));
        }
        sample = data[static_cast<size_t>(idx)];
    }
    model::GenerateOptions opts;
    opts.grounding.salient_ratio = c.get_double("eval.salient_ratio");
    opts.regrounding = c.get_bool("eval.regrounding");
    const model::GenerationResult g = model::generate(store, mcfg, sample.video, sample.ann.question, opts);
    const Vocab& v = mcfg.vocab;

    out << "sample " << sample.ann.id << " (" << sample.video.num_frames() << " frames)\n";
    out << "question:";
    for (int t : sample.ann.question) {
        out << ' ' << v.display(t);
    }
    out << "\nstage 1:";
    for (const auto& iv : g.stage1_intervals) {
        out << ' ' << v.display(v.evi) << show_interval(iv);
    }
    out << ' ' << v.display(v.evi_end) << "\nanswer:";
    size_t ref = 0;
    for (const auto& part : g.response.answer_parts) {
        if (const auto* span = std::get_if<TextSpan>(&part)) {
            for (int t : span->tokens) {
                out << ' ' << v.display(t);
            }
        } else {
            out << ' ' << v.display(v.evi) << show_interval(g.answer_intervals[ref++]);
        }
    }
    out << (g.truncated ? " (truncated)" : " " + v.display(v.eos)) << '\n';
    out << "ground truth:";
    for (const auto& iv : sample.ann.time_gt) {
        out << ' ' << show_interval(iv);
    }
    out << "\nre-grounding disagreements: " << g.regrounding_disagreements << '\n';
}

}  // namespace evigrid::pipeline
