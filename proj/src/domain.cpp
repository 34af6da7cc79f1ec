// SPDX-License-Identifier: Apache-2.0

#include "evigrid/domain.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <limits>
#include <set>
#include <sstream>

#include "json.hpp"

namespace evigrid {

using nlohmann::json;

// ---- basic types -------------------------------------------------------------

Interval interval_from_seconds(double start_s, double end_s, double fps) {
    const int s = static_cast<int>(std::lround(start_s * fps));
    const int e = static_cast<int>(std::lround(end_s * fps));
    Interval iv{s, e};
    if (!iv.valid()) {
        throw InvariantError("interval [" + std::to_string(start_s) + ", " + std::to_string(end_s) +
                             "] s does not round to a valid frame range");
    }
    return iv;
}

void VideoFeatures::validate() const {
    if (frames.rows < 1 || frames.cols < 1) {
        throw InvariantError("video needs T >= 1 and C >= 1");
    }
    for (double v : frames.data) {
        if (!std::isfinite(v)) {
            throw InvariantError("video contains a non-finite feature");
        }
    }
    if (!(fps > 0.0)) {
        throw InvariantError("fps must be positive");
    }
}

std::vector<int> ResponseSequence::ref_indices() const {
    std::vector<int> out;
    for (const auto& part : answer_parts) {
        if (const auto* ref = std::get_if<EvidenceRef>(&part)) {
            out.push_back(ref->index);
        }
    }
    return out;
}

std::vector<int> ResponseSequence::text_tokens() const {
    std::vector<int> out;
    for (const auto& part : answer_parts) {
        if (const auto* span = std::get_if<TextSpan>(&part)) {
            out.insert(out.end(), span->tokens.begin(), span->tokens.end());
        }
    }
    return out;
}

std::vector<std::string> ResponseSequence::violations() const {
    std::vector<std::string> out;
    const int k = num_events();
    int prev = -1;
    for (int idx : ref_indices()) {
        if (idx < 0 || idx >= k) {
            out.push_back("evidence reference " + std::to_string(idx) + " outside 0.." + std::to_string(k - 1));
        } else if (idx <= prev) {
            out.push_back("evidence references must be unique and increasing");
        }
        prev = std::max(prev, idx);
    }
    for (size_t i = 0; i < grounding_slots.size(); ++i) {
        if (grounding_slots[i].stage != Stage::Grounding) {
            out.push_back("grounding slot " + std::to_string(i) + " tagged with the answer stage");
        }
        if (!grounding_slots[i].interval.valid()) {
            out.push_back("grounding slot " + std::to_string(i) + " has an invalid interval");
        }
        if (i + 1 < grounding_slots.size() &&
            grounding_slots[i].interval.start > grounding_slots[i + 1].interval.start) {
            out.push_back("grounding slots are not in temporal order");
        }
    }
    return out;
}

EventTexts split_event_texts(const ResponseSequence& r) {
    EventTexts out;
    std::vector<int> pending;
    for (const auto& part : r.answer_parts) {
        if (const auto* span = std::get_if<TextSpan>(&part)) {
            pending.insert(pending.end(), span->tokens.begin(), span->tokens.end());
        } else {
            out.per_event.push_back(std::move(pending));
            pending.clear();
        }
    }
    out.tail = std::move(pending);
    return out;
}

ResponseSequence build_response(const std::vector<Interval>& intervals, const EventTexts& texts) {
    if (texts.per_event.size() != intervals.size()) {
        throw ArityMismatch("build_response: " + std::to_string(texts.per_event.size()) + " event texts for " +
                            std::to_string(intervals.size()) + " intervals");
    }
    ResponseSequence r;
    for (size_t k = 0; k < intervals.size(); ++k) {
        r.grounding_slots.push_back(EvidenceSlot{intervals[k], {}, Stage::Grounding});
        if (!texts.per_event[k].empty()) {
            r.answer_parts.emplace_back(TextSpan{texts.per_event[k]});
        }
        r.answer_parts.emplace_back(EvidenceRef{static_cast<int>(k), EvidenceSlot{intervals[k], {}, Stage::Answer}});
    }
    if (!texts.tail.empty()) {
        r.answer_parts.emplace_back(TextSpan{texts.tail});
    }
    return r;
}

void attach_intervals(ResponseSequence& r, const std::vector<Interval>& intervals) {
    if (intervals.size() != r.grounding_slots.size()) {
        throw ArityMismatch("attach_intervals: " + std::to_string(intervals.size()) + " intervals for " +
                            std::to_string(r.grounding_slots.size()) + " slots");
    }
    for (size_t k = 0; k < intervals.size(); ++k) {
        r.grounding_slots[k].interval = intervals[k];
    }
    for (auto& part : r.answer_parts) {
        if (auto* ref = std::get_if<EvidenceRef>(&part)) {
            if (ref->index >= 0 && static_cast<size_t>(ref->index) < intervals.size()) {
                ref->slot.interval = intervals[static_cast<size_t>(ref->index)];
            }
        }
    }
}

int AnnotationSample::num_frames() const {
    if (const auto* v = std::get_if<VideoFeatures>(&video)) {
        return v->num_frames();
    }
    return std::get<VideoRef>(video).num_frames;
}

// ---- vocabulary --------------------------------------------------------------

std::string Vocab::display(int tok) const {
    if (tok == bos) return "<s>";
    if (tok == eos) return "</s>";
    if (tok == evi) return "<evi>";
    if (tok == evi_end) return "</evi>";
    if (tok == find) return "find";
    if (tok == word_a) return "a";
    if (tok == word_and) return "and";
    if (is_concept(tok)) return "c" + std::to_string(tok - concept_begin);
    return "w" + std::to_string(tok);
}

std::map<std::string, std::string> Vocab::hint_table() const {
    std::map<std::string, std::string> out;
    for (int t = 0; t < size; ++t) {
        out[std::to_string(t)] = display(t);
    }
    return out;
}

void Vocab::validate() const {
    const std::set<int> specials{bos, eos, evi, evi_end, find, word_a, word_and};
    if (specials.size() != 7) {
        throw ConfigError("vocab: special and word ids must be distinct");
    }
    for (int s : specials) {
        if (s < 0 || s >= size) {
            throw ConfigError("vocab: id " + std::to_string(s) + " outside [0, size)");
        }
        if (is_concept(s)) {
            throw ConfigError("vocab: id " + std::to_string(s) + " collides with the concept range");
        }
    }
    if (num_concepts < 2 || concept_begin < 0 || concept_begin + num_concepts > size) {
        throw ConfigError("vocab: concept range must hold >= 2 ids inside [0, size)");
    }
}

// ---- JSON helpers ------------------------------------------------------------

namespace {

int as_int(const json& j, const std::string& where) {
    if (!j.is_number_integer()) {
        throw SchemaError(where + " must be an integer");
    }
    const auto v = j.get<int64_t>();
    if (v < std::numeric_limits<int>::min() || v > std::numeric_limits<int>::max()) {
        throw SchemaError(where + " out of integer range");
    }
    return static_cast<int>(v);
}

std::vector<int> as_int_array(const json& j, const std::string& where) {
    if (!j.is_array()) {
        throw SchemaError(where + " must be an array of integers");
    }
    std::vector<int> out;
    out.reserve(j.size());
    for (size_t i = 0; i < j.size(); ++i) {
        out.push_back(as_int(j[i], where + "[" + std::to_string(i) + "]"));
    }
    return out;
}

const json& require(const json& obj, const char* key, const std::string& where) {
    auto it = obj.find(key);
    if (it == obj.end()) {
        throw SchemaError(where + ": missing key '" + key + "'");
    }
    return *it;
}

void only_keys(const json& obj, std::initializer_list<const char*> allowed, const std::string& where) {
    for (auto it = obj.begin(); it != obj.end(); ++it) {
        bool ok = false;
        for (const char* a : allowed) {
            ok = ok || it.key() == a;
        }
        if (!ok) {
            throw SchemaError(where + ": unexpected key '" + it.key() + "'");
        }
    }
}

Interval parse_interval(const json& j, const std::string& where) {
    if (!j.is_array() || j.size() != 2) {
        throw SchemaError(where + " must be a [start, end] pair");
    }
    return Interval{as_int(j[0], where + "[0]"), as_int(j[1], where + "[1]")};
}

std::vector<Interval> parse_intervals(const json& j, const std::string& where) {
    if (!j.is_array()) {
        throw SchemaError(where + " must be an array of [start, end] pairs");
    }
    std::vector<Interval> out;
    for (size_t i = 0; i < j.size(); ++i) {
        out.push_back(parse_interval(j[i], where + "[" + std::to_string(i) + "]"));
    }
    return out;
}

json intervals_json(const std::vector<Interval>& ivs) {
    json out = json::array();
    for (const auto& iv : ivs) {
        out.push_back({iv.start, iv.end});
    }
    return out;
}

json response_json(const ResponseSequence& r) {
    json answer = json::array();
    for (const auto& part : r.answer_parts) {
        if (const auto* span = std::get_if<TextSpan>(&part)) {
            answer.push_back({{"text", span->tokens}});
        } else {
            answer.push_back({{"evi", std::get<EvidenceRef>(part).index}});
        }
    }
    return {{"grounding_k", r.num_events()}, {"answer", answer}};
}

// Parses the response template; slot intervals are left at [0,0] for the
// caller to attach.
ResponseSequence parse_response(const json& j, const std::string& where) {
    if (!j.is_object()) {
        throw SchemaError(where + " must be an object");
    }
    only_keys(j, {"grounding_k", "answer"}, where);
    const int k = as_int(require(j, "grounding_k", where), where + ".grounding_k");
    if (k < 0) {
        throw SchemaError(where + ".grounding_k must be >= 0");
    }
    const json& answer = require(j, "answer", where);
    if (!answer.is_array()) {
        throw SchemaError(where + ".answer must be an array");
    }
    ResponseSequence r;
    r.grounding_slots.assign(static_cast<size_t>(k), EvidenceSlot{});
    for (size_t i = 0; i < answer.size(); ++i) {
        const std::string w = where + ".answer[" + std::to_string(i) + "]";
        const json& part = answer[i];
        if (!part.is_object() || part.size() != 1) {
            throw SchemaError(w + " must be {\"text\": [...]} or {\"evi\": k}");
        }
        if (part.contains("text")) {
            r.answer_parts.emplace_back(TextSpan{as_int_array(part["text"], w + ".text")});
        } else if (part.contains("evi")) {
            EvidenceRef ref;
            ref.index = as_int(part["evi"], w + ".evi");
            ref.slot.stage = Stage::Answer;
            r.answer_parts.emplace_back(ref);
        } else {
            throw SchemaError(w + " must be {\"text\": [...]} or {\"evi\": k}");
        }
    }
    return r;
}

void check_token_ids(const std::vector<int>& toks, const std::string& where) {
    for (int t : toks) {
        if (t < 0) {
            throw InvariantError(where + " contains a negative token id");
        }
    }
}

void check_response_against(const ResponseSequence& r, const std::vector<Interval>& ivs, int num_frames,
                            const std::string& where, bool require_all_refs) {
    for (const auto& v : r.violations()) {
        throw InvariantError(where + ": " + v);
    }
    if (static_cast<int>(ivs.size()) != r.num_events()) {
        throw InvariantError(where + ": " + std::to_string(ivs.size()) + " intervals for grounding_k=" +
                             std::to_string(r.num_events()));
    }
    if (require_all_refs && static_cast<int>(r.ref_indices().size()) != r.num_events()) {
        throw InvariantError(where + ": answer has " + std::to_string(r.ref_indices().size()) +
                             " evidence references for " + std::to_string(r.num_events()) + " events");
    }
    for (size_t k = 0; k < ivs.size(); ++k) {
        if (!ivs[k].valid() || (num_frames > 0 && ivs[k].end >= num_frames)) {
            throw InvariantError(where + ": interval " + std::to_string(k) + " [" + std::to_string(ivs[k].start) +
                                 ", " + std::to_string(ivs[k].end) + "] out of range for T=" +
                                 std::to_string(num_frames));
        }
        if (k + 1 < ivs.size() && ivs[k].start > ivs[k + 1].start) {
            throw InvariantError(where + ": intervals are not in temporal order");
        }
    }
    for (const auto& part : r.answer_parts) {
        if (const auto* span = std::get_if<TextSpan>(&part)) {
            check_token_ids(span->tokens, where + ".answer");
        }
    }
}

}  // namespace

// ---- annotation documents ----------------------------------------------------

AnnotationSample parse_annotation(std::string_view text) {
    json doc;
    try {
        doc = json::parse(text.begin(), text.end());
    } catch (const json::exception& e) {
        throw SchemaError(std::string("not valid JSON: ") + e.what());
    }
    try {
        if (!doc.is_object()) {
            throw SchemaError("annotation must be a JSON object");
        }
        only_keys(doc, {"id", "video", "question", "response", "time_gt", "vocab_hint"}, "annotation");

        AnnotationSample s;
        if (doc.contains("id")) {
            if (!doc["id"].is_string()) {
                throw SchemaError("id must be a string");
            }
            s.id = doc["id"].get<std::string>();
        }

        const json& video = require(doc, "video", "annotation");
        if (video.is_object()) {
            only_keys(video, {"path", "T", "C"}, "video");
            const json& path = require(video, "path", "video");
            if (!path.is_string() || path.get<std::string>().empty()) {
                throw SchemaError("video.path must be a non-empty string");
            }
            VideoRef ref{path.get<std::string>(), as_int(require(video, "T", "video"), "video.T"),
                         as_int(require(video, "C", "video"), "video.C")};
            if (ref.num_frames < 1 || ref.channels < 1) {
                throw InvariantError("video reference needs T >= 1 and C >= 1");
            }
            s.video = ref;
        } else if (video.is_array()) {
            if (video.empty() || !video[0].is_array() || video[0].empty()) {
                throw SchemaError("inline video must be a non-empty array of non-empty rows");
            }
            const int rows = static_cast<int>(video.size());
            const int cols = static_cast<int>(video[0].size());
            Tensor frames(rows, cols);
            for (int i = 0; i < rows; ++i) {
                const json& row = video[static_cast<size_t>(i)];
                if (!row.is_array() || static_cast<int>(row.size()) != cols) {
                    throw SchemaError("inline video row " + std::to_string(i) + " has the wrong length");
                }
                for (int j = 0; j < cols; ++j) {
                    const json& v = row[static_cast<size_t>(j)];
                    if (!v.is_number()) {
                        throw SchemaError("inline video entries must be numbers");
                    }
                    frames(i, j) = v.get<double>();
                }
            }
            VideoFeatures vf{std::move(frames), 1.0};
            vf.validate();
            s.video = std::move(vf);
        } else {
            throw SchemaError("video must be a {path, T, C} object or an array of rows");
        }

        s.question = as_int_array(require(doc, "question", "annotation"), "question");
        check_token_ids(s.question, "question");
        s.response = parse_response(require(doc, "response", "annotation"), "response");
        s.time_gt = parse_intervals(require(doc, "time_gt", "annotation"), "time_gt");

        if (doc.contains("vocab_hint")) {
            const json& hint = doc["vocab_hint"];
            if (!hint.is_object()) {
                throw SchemaError("vocab_hint must be an object of strings");
            }
            for (auto it = hint.begin(); it != hint.end(); ++it) {
                if (!it->is_string()) {
                    throw SchemaError("vocab_hint values must be strings");
                }
                s.vocab_hint[it.key()] = it->get<std::string>();
            }
        }

        check_response_against(s.response, s.time_gt, s.num_frames(), "annotation", true);
        attach_intervals(s.response, s.time_gt);
        return s;
    } catch (const json::exception& e) {
        throw SchemaError(std::string("malformed annotation: ") + e.what());
    }
}

std::string serialize_annotation(const AnnotationSample& sample) {
    json doc;
    if (!sample.id.empty()) {
        doc["id"] = sample.id;
    }
    if (const auto* ref = std::get_if<VideoRef>(&sample.video)) {
        doc["video"] = {{"path", ref->path}, {"T", ref->num_frames}, {"C", ref->channels}};
    } else {
        const Tensor& f = std::get<VideoFeatures>(sample.video).frames;
        json rows = json::array();
        for (int i = 0; i < f.rows; ++i) {
            json row = json::array();
            for (int j = 0; j < f.cols; ++j) {
                row.push_back(f(i, j));
            }
            rows.push_back(std::move(row));
        }
        doc["video"] = std::move(rows);
    }
    doc["question"] = sample.question;
    doc["response"] = response_json(sample.response);
    doc["time_gt"] = intervals_json(sample.time_gt);
    if (!sample.vocab_hint.empty()) {
        doc["vocab_hint"] = sample.vocab_hint;
    }
    return doc.dump() + "\n";
}

// ---- feature files -------------------------------------------------------------

namespace {

void put_u32(std::string& out, uint32_t u) {
    for (int b = 0; b < 4; ++b) {
        out.push_back(static_cast<char>((u >> (8 * b)) & 0xff));
    }
}

uint32_t get_u32(std::string_view in, size_t off) {
    uint32_t u = 0;
    for (int b = 0; b < 4; ++b) {
        u |= static_cast<uint32_t>(static_cast<unsigned char>(in[off + static_cast<size_t>(b)])) << (8 * b);
    }
    return u;
}

}  // namespace

std::string encode_features(const VideoFeatures& video) {
    video.validate();
    std::string out;
    out.reserve(8 + video.frames.size() * 4);
    put_u32(out, static_cast<uint32_t>(video.num_frames()));
    put_u32(out, static_cast<uint32_t>(video.channels()));
    for (double v : video.frames.data) {
        put_u32(out, std::bit_cast<uint32_t>(static_cast<float>(v)));
    }
    return out;
}

VideoFeatures decode_features(std::string_view bytes) {
    if (bytes.size() < 8) {
        throw IoError("feature file shorter than its header");
    }
    const uint32_t t = get_u32(bytes, 0);
    const uint32_t c = get_u32(bytes, 4);
    if (t == 0 || c == 0 || t > (1u << 20) || c > (1u << 16)) {
        throw IoError("feature file header has implausible shape " + std::to_string(t) + "x" + std::to_string(c));
    }
    const size_t n = static_cast<size_t>(t) * c;
    if (bytes.size() != 8 + n * 4) {
        throw IoError("feature file payload size does not match its header");
    }
    Tensor frames(static_cast<int>(t), static_cast<int>(c));
    for (size_t i = 0; i < n; ++i) {
        frames.data[i] = static_cast<double>(std::bit_cast<float>(get_u32(bytes, 8 + 4 * i)));
    }
    VideoFeatures vf{std::move(frames), 1.0};
    vf.validate();
    return vf;
}

void write_feature_file(const std::string& path, const VideoFeatures& video) {
    const std::string bytes = encode_features(video);
    std::ofstream os(path, std::ios::binary);
    if (!os) {
        throw IoError("cannot write feature file '" + path + "'");
    }
    os.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!os) {
        throw IoError("failed writing feature file '" + path + "'");
    }
}

VideoFeatures read_feature_file(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) {
        throw IoError("cannot open feature file '" + path + "'");
    }
    std::ostringstream ss;
    ss << is.rdbuf();
    return decode_features(ss.str());
}

VideoFeatures resolve_video(const AnnotationSample& sample, const std::string& base_dir) {
    if (const auto* v = std::get_if<VideoFeatures>(&sample.video)) {
        return *v;
    }
    const auto& ref = std::get<VideoRef>(sample.video);
    const std::filesystem::path p = std::filesystem::path(ref.path).is_absolute()
                                        ? std::filesystem::path(ref.path)
                                        : std::filesystem::path(base_dir) / ref.path;
    VideoFeatures vf = read_feature_file(p.string());
    if (vf.num_frames() != ref.num_frames || vf.channels() != ref.channels) {
        throw InvariantError("feature file '" + p.string() + "' shape disagrees with its annotation reference");
    }
    return vf;
}

// ---- factors -------------------------------------------------------------------

namespace {
constexpr std::string_view kFactorNames[kNumFactors] = {"TemporalShift", "AddEvent",    "DeleteEvent",
                                                        "MergeEvents",   "DistortText", "RepeatText"};
}

std::string_view factor_name(Factor f) { return kFactorNames[static_cast<int>(f)]; }

std::optional<Factor> factor_from_name(std::string_view name) {
    for (int i = 0; i < kNumFactors; ++i) {
        if (kFactorNames[i] == name) {
            return static_cast<Factor>(i);
        }
    }
    return std::nullopt;
}

bool is_temporal(Factor f) {
    return f == Factor::TemporalShift || f == Factor::AddEvent || f == Factor::DeleteEvent ||
           f == Factor::MergeEvents;
}

// ---- pair validation -----------------------------------------------------------

namespace {

struct Event {
    Interval iv;
    std::vector<int> text;
    bool operator==(const Event&) const = default;
};

struct Flat {
    std::vector<Event> events;
    std::vector<int> tail;
};

Flat flatten(const ScoredResponse& s) {
    Flat f;
    EventTexts t = split_event_texts(s.response);
    // A response without references carries no per-event text.
    t.per_event.resize(s.intervals.size());
    for (size_t k = 0; k < s.intervals.size(); ++k) {
        f.events.push_back(Event{s.intervals[k], t.per_event[k]});
    }
    f.tail = t.tail;
    return f;
}

std::vector<Violation> check_scored(const ScoredResponse& s, int num_frames, const std::string& field) {
    std::vector<Violation> out;
    for (const auto& v : s.response.violations()) {
        out.push_back({field + ".response", v});
    }
    if (static_cast<int>(s.intervals.size()) != s.response.num_events()) {
        out.push_back({field + ".intervals", "one interval per evidence slot"});
        return out;
    }
    for (size_t k = 0; k < s.intervals.size(); ++k) {
        if (!s.intervals[k].valid_for(num_frames)) {
            out.push_back({field + ".intervals", "interval " + std::to_string(k) + " outside the video"});
        }
        if (k + 1 < s.intervals.size() && s.intervals[k].start > s.intervals[k + 1].start) {
            out.push_back({field + ".intervals", "intervals must be in temporal order"});
        }
    }
    return out;
}

bool pairwise_disjoint(const std::vector<Event>& ev) {
    for (size_t i = 0; i + 1 < ev.size(); ++i) {
        if (ev[i].iv.overlaps(ev[i + 1].iv)) {
            return false;
        }
    }
    return true;
}

std::set<int> recorded_events(const Provenance& p) {
    std::set<int> out;
    for (const auto& r : p.records) {
        out.insert(r.events.begin(), r.events.end());
    }
    return out;
}

std::vector<Interval> recorded_after(const Provenance& p) {
    std::vector<Interval> out;
    for (const auto& r : p.records) {
        out.insert(out.end(), r.after_intervals.begin(), r.after_intervals.end());
    }
    return out;
}

std::vector<Interval> recorded_before(const Provenance& p) {
    std::vector<Interval> out;
    for (const auto& r : p.records) {
        out.insert(out.end(), r.before_intervals.begin(), r.before_intervals.end());
    }
    return out;
}

// Returns the first factor-consistency failure, if any.
std::optional<Violation> check_factor(const Flat& p, const Flat& d, const Provenance& prov) {
    const auto np = p.events.size();
    const auto nd = d.events.size();
    auto fail = [](std::string rule) { return std::optional<Violation>(Violation{"dispreferred", std::move(rule)}); };
    const std::set<int> rec = recorded_events(prov);

    switch (prov.factor) {
        case Factor::TemporalShift: {
            if (nd != np) return fail("TemporalShift must keep the event count");
            if (d.tail != p.tail) return fail("TemporalShift must not change text");
            std::set<int> changed;
            for (size_t k = 0; k < np; ++k) {
                if (d.events[k].text != p.events[k].text) return fail("TemporalShift must not change text");
                if (d.events[k].iv != p.events[k].iv) {
                    if (d.events[k].iv.length() != p.events[k].iv.length()) {
                        return fail("TemporalShift must preserve interval length");
                    }
                    changed.insert(static_cast<int>(k));
                }
            }
            if (changed.empty()) return fail("TemporalShift left every interval unchanged");
            if (changed != rec) return fail("shifted events disagree with the provenance record");
            if (!pairwise_disjoint(d.events)) return fail("shifted events overlap");
            return std::nullopt;
        }
        case Factor::AddEvent: {
            if (nd <= np) return fail("AddEvent must increase the event count");
            if (d.tail != p.tail) return fail("AddEvent must not change the tail text");
            std::vector<Interval> added;
            size_t j = 0;
            for (size_t i = 0; i < nd; ++i) {
                if (j < np && d.events[i] == p.events[j]) {
                    ++j;
                    continue;
                }
                const bool copied = std::any_of(p.events.begin(), p.events.end(),
                                                [&](const Event& e) { return e.text == d.events[i].text; });
                if (!copied) return fail("added event text is not copied from an existing event");
                added.push_back(d.events[i].iv);
            }
            if (j != np) return fail("AddEvent altered an existing event");
            if (added != recorded_after(prov)) return fail("added intervals disagree with the provenance record");
            if (!pairwise_disjoint(d.events)) return fail("added event overlaps an existing event");
            return std::nullopt;
        }
        case Factor::DeleteEvent: {
            if (nd >= np) return fail("DeleteEvent must decrease the event count");
            if (d.tail != p.tail) return fail("DeleteEvent must not change the tail text");
            std::set<int> deleted;
            size_t j = 0;
            for (size_t i = 0; i < np; ++i) {
                if (j < nd && d.events[j] == p.events[i]) {
                    ++j;
                } else {
                    deleted.insert(static_cast<int>(i));
                }
            }
            if (j != nd) return fail("DeleteEvent altered a surviving event");
            if (deleted != rec) return fail("deleted events disagree with the provenance record");
            return std::nullopt;
        }
        case Factor::MergeEvents: {
            if (nd + 1 != np) return fail("MergeEvents must reduce the event count by one");
            if (d.tail != p.tail) return fail("MergeEvents must not change the tail text");
            size_t i = 0;
            while (i < nd && d.events[i] == p.events[i]) {
                ++i;
            }
            if (i + 1 >= np) return fail("MergeEvents found no merged pair");
            Event merged{Interval{std::min(p.events[i].iv.start, p.events[i + 1].iv.start),
                                  std::max(p.events[i].iv.end, p.events[i + 1].iv.end)},
                         p.events[i].text};
            merged.text.insert(merged.text.end(), p.events[i + 1].text.begin(), p.events[i + 1].text.end());
            if (!(d.events[i] == merged)) return fail("merged event is not the span and text of an adjacent pair");
            for (size_t k = i + 1; k < nd; ++k) {
                if (!(d.events[k] == p.events[k + 1])) return fail("MergeEvents altered another event");
            }
            if (rec != std::set<int>{static_cast<int>(i), static_cast<int>(i + 1)}) {
                return fail("merged pair disagrees with the provenance record");
            }
            return std::nullopt;
        }
        case Factor::DistortText:
        case Factor::RepeatText: {
            const bool repeat = prov.factor == Factor::RepeatText;
            const std::string name(factor_name(prov.factor));
            if (nd != np) return fail(name + " must keep the event count");
            if (d.tail != p.tail) return fail(name + " must not change the tail text");
            std::set<int> changed;
            for (size_t k = 0; k < np; ++k) {
                if (d.events[k].iv != p.events[k].iv) return fail(name + " must not change intervals");
                if (d.events[k].text != p.events[k].text) {
                    if (repeat && (k == 0 || d.events[k].text != p.events[k - 1].text)) {
                        return fail("RepeatText must copy the previous event's text");
                    }
                    changed.insert(static_cast<int>(k));
                }
            }
            if (changed.empty()) return fail(name + " left every text unchanged");
            if (changed != rec) return fail("changed texts disagree with the provenance record");
            return std::nullopt;
        }
    }
    return fail("unknown factor");
}

}  // namespace

std::vector<Violation> validate_pair(const PreferencePair& pair) {
    std::vector<Violation> out;
    if (pair.num_frames < 1) {
        out.push_back({"num_frames", "base video must have at least one frame"});
        return out;
    }
    auto a = check_scored(pair.preferred, pair.num_frames, "preferred");
    auto b = check_scored(pair.dispreferred, pair.num_frames, "dispreferred");
    out.insert(out.end(), a.begin(), a.end());
    out.insert(out.end(), b.begin(), b.end());
    if (pair.preferred.intervals.size() != static_cast<size_t>(pair.preferred.response.num_events()) ||
        pair.dispreferred.intervals.size() != static_cast<size_t>(pair.dispreferred.response.num_events())) {
        return out;
    }
    const Flat p = flatten(pair.preferred);
    const Flat d = flatten(pair.dispreferred);
    const bool identical = p.events == d.events && p.tail == d.tail;
    if (pair.provenance.records.empty()) {
        out.push_back({"provenance.records", "at least one perturbation record"});
    }
    for (size_t i = 0; i < pair.provenance.records.size(); ++i) {
        const auto& r = pair.provenance.records[i];
        const std::string f = "provenance.records[" + std::to_string(i) + "]";
        if (r.factor != pair.provenance.factor) {
            out.push_back({f + ".factor", "record factor differs from the pair factor"});
        }
        if (!identical && r.before_intervals == r.after_intervals && r.before_text == r.after_text) {
            out.push_back({f, "record shows no change"});
        }
    }
    if (identical) {
        out.push_back({"dispreferred", "identical to preferred (no-op perturbation)"});
        return out;
    }
    if (auto v = check_factor(p, d, pair.provenance)) {
        out.push_back(*v);
    }
    // Recorded "before" intervals must exist in the preferred response.
    for (const auto& iv : recorded_before(pair.provenance)) {
        if (std::none_of(p.events.begin(), p.events.end(), [&](const Event& e) { return e.iv == iv; })) {
            out.push_back({"provenance.records", "before-interval not present in the preferred response"});
            break;
        }
    }
    return out;
}

// ---- pair files ------------------------------------------------------------------

namespace {

json scored_json(const ScoredResponse& s) {
    return {{"response", response_json(s.response)}, {"intervals", intervals_json(s.intervals)}};
}

ScoredResponse parse_scored(const json& j, const std::string& where) {
    if (!j.is_object()) {
        throw SchemaError(where + " must be an object");
    }
    only_keys(j, {"response", "intervals"}, where);
    ScoredResponse s;
    s.response = parse_response(require(j, "response", where), where + ".response");
    s.intervals = parse_intervals(require(j, "intervals", where), where + ".intervals");
    if (static_cast<int>(s.intervals.size()) != s.response.num_events()) {
        throw InvariantError(where + ": interval count differs from grounding_k");
    }
    attach_intervals(s.response, s.intervals);
    return s;
}

json texts_json(const std::vector<std::vector<int>>& t) {
    json out = json::array();
    for (const auto& span : t) {
        out.push_back(span);
    }
    return out;
}

std::vector<std::vector<int>> parse_texts(const json& j, const std::string& where) {
    if (!j.is_array()) {
        throw SchemaError(where + " must be an array of token arrays");
    }
    std::vector<std::vector<int>> out;
    for (size_t i = 0; i < j.size(); ++i) {
        out.push_back(as_int_array(j[i], where + "[" + std::to_string(i) + "]"));
    }
    return out;
}

Factor parse_factor(const json& j, const std::string& where) {
    if (!j.is_string()) {
        throw SchemaError(where + " must be a factor name");
    }
    auto f = factor_from_name(j.get<std::string>());
    if (!f) {
        throw SchemaError(where + ": unknown factor '" + j.get<std::string>() + "'");
    }
    return *f;
}

}  // namespace

std::string serialize_pair(const PreferencePair& pair) {
    json records = json::array();
    for (const auto& r : pair.provenance.records) {
        records.push_back({{"factor", factor_name(r.factor)},
                           {"events", r.events},
                           {"before_intervals", intervals_json(r.before_intervals)},
                           {"after_intervals", intervals_json(r.after_intervals)},
                           {"before_text", texts_json(r.before_text)},
                           {"after_text", texts_json(r.after_text)}});
    }
    json doc = {{"base_id", pair.base_id},
                {"num_frames", pair.num_frames},
                {"preferred", scored_json(pair.preferred)},
                {"dispreferred", scored_json(pair.dispreferred)},
                {"provenance", {{"factor", factor_name(pair.provenance.factor)}, {"records", records}}}};
    return doc.dump() + "\n";
}

PreferencePair parse_pair(std::string_view text) {
    json doc;
    try {
        doc = json::parse(text.begin(), text.end());
    } catch (const json::exception& e) {
        throw SchemaError(std::string("not valid JSON: ") + e.what());
    }
    try {
        if (!doc.is_object()) {
            throw SchemaError("pair must be a JSON object");
        }
        only_keys(doc, {"base_id", "num_frames", "preferred", "dispreferred", "provenance"}, "pair");
        PreferencePair p;
        const json& id = require(doc, "base_id", "pair");
        if (!id.is_string()) {
            throw SchemaError("base_id must be a string");
        }
        p.base_id = id.get<std::string>();
        p.num_frames = as_int(require(doc, "num_frames", "pair"), "num_frames");
        p.preferred = parse_scored(require(doc, "preferred", "pair"), "preferred");
        p.dispreferred = parse_scored(require(doc, "dispreferred", "pair"), "dispreferred");
        const json& prov = require(doc, "provenance", "pair");
        if (!prov.is_object()) {
            throw SchemaError("provenance must be an object");
        }
        p.provenance.factor = parse_factor(require(prov, "factor", "provenance"), "provenance.factor");
        const json& recs = require(prov, "records", "provenance");
        if (!recs.is_array()) {
            throw SchemaError("provenance.records must be an array");
        }
        for (size_t i = 0; i < recs.size(); ++i) {
            const std::string w = "provenance.records[" + std::to_string(i) + "]";
            const json& r = recs[i];
            if (!r.is_object()) {
                throw SchemaError(w + " must be an object");
            }
            PerturbationRecord rec;
            rec.factor = parse_factor(require(r, "factor", w), w + ".factor");
            rec.events = as_int_array(require(r, "events", w), w + ".events");
            rec.before_intervals = parse_intervals(require(r, "before_intervals", w), w + ".before_intervals");
            rec.after_intervals = parse_intervals(require(r, "after_intervals", w), w + ".after_intervals");
            rec.before_text = parse_texts(require(r, "before_text", w), w + ".before_text");
            rec.after_text = parse_texts(require(r, "after_text", w), w + ".after_text");
            p.provenance.records.push_back(std::move(rec));
        }
        return p;
    } catch (const json::exception& e) {
        throw SchemaError(std::string("malformed pair: ") + e.what());
    }
}

}  // namespace evigrid
