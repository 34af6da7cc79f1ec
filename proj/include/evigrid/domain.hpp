// SPDX-License-Identifier: Apache-2.0
//
// Core value types shared by every module, the annotation document schema,
// the float32 feature-file format, and the preference-pair checker.

#pragma once

#include <compare>
#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <string_view>
#include <variant>
#include <vector>

#include "evigrid/autograd.hpp"

namespace evigrid {

// Inclusive frame-index range. At 1 FPS a frame index is a second.
struct Interval {
    int start = 0;
    int end = 0;

    int length() const { return end - start + 1; }
    bool contains(int t) const { return t >= start && t <= end; }
    bool valid() const { return 0 <= start && start <= end; }
    bool valid_for(int num_frames) const { return valid() && end < num_frames; }
    bool overlaps(const Interval& o) const { return start <= o.end && o.start <= end; }

    auto operator<=>(const Interval&) const = default;
};

// Rounds second-valued boundaries to the nearest frame.
Interval interval_from_seconds(double start_s, double end_s, double fps = 1.0);

struct VideoFeatures {
    Tensor frames;  // T×C
    double fps = 1.0;

    int num_frames() const { return frames.rows; }
    int channels() const { return frames.cols; }
    void validate() const;  // throws InvariantError

    bool operator==(const VideoFeatures&) const = default;
};

// Reference to an external feature file, resolved relative to the
// annotation document's directory.
struct VideoRef {
    std::string path;
    int num_frames = 0;
    int channels = 0;

    bool operator==(const VideoRef&) const = default;
};

enum class Stage { Grounding, Answer };

struct EvidenceSlot {
    Interval interval;
    std::vector<double> feature;  // empty until a forward pass fills it
    Stage stage = Stage::Grounding;

    bool operator==(const EvidenceSlot&) const = default;
};

struct TextSpan {
    std::vector<int> tokens;
    bool operator==(const TextSpan&) const = default;
};

struct EvidenceRef {
    int index = 0;
    EvidenceSlot slot;  // stage = Answer
    bool operator==(const EvidenceRef&) const = default;
};

using AnswerPart = std::variant<TextSpan, EvidenceRef>;

// Two-stage response: K grounding slots, the stage separator (implicit),
// then interleaved text and evidence references.
struct ResponseSequence {
    std::vector<EvidenceSlot> grounding_slots;
    std::vector<AnswerPart> answer_parts;

    int num_events() const { return static_cast<int>(grounding_slots.size()); }
    std::vector<int> ref_indices() const;
    std::vector<int> text_tokens() const;  // all answer text, in order

    // Checks the structural invariants; returns human-readable violations.
    std::vector<std::string> violations() const;

    bool operator==(const ResponseSequence&) const = default;
};

// Answer text grouped by event: segment k is the text between reference k-1
// (or the start) and reference k; `tail` is text after the last reference.
struct EventTexts {
    std::vector<std::vector<int>> per_event;
    std::vector<int> tail;
    bool operator==(const EventTexts&) const = default;
};

EventTexts split_event_texts(const ResponseSequence& r);

// Builds a response with one slot and one reference per interval, each
// reference preceded by its event text, followed by the tail.
ResponseSequence build_response(const std::vector<Interval>& intervals, const EventTexts& texts);

// Copies `intervals` into every slot and reference of `r` (ref index k gets
// interval k).
void attach_intervals(ResponseSequence& r, const std::vector<Interval>& intervals);

struct AnnotationSample {
    std::string id;
    std::variant<VideoFeatures, VideoRef> video;
    std::vector<int> question;
    ResponseSequence response;
    std::vector<Interval> time_gt;
    std::map<std::string, std::string> vocab_hint;

    int num_frames() const;
    bool operator==(const AnnotationSample&) const = default;
};

// Token ids of the symbolic vocabulary. Concept tokens occupy
// [concept_begin, concept_begin + num_concepts).
struct Vocab {
    int size = 64;
    int bos = 0;
    int eos = 1;
    int evi = 2;
    int evi_end = 3;
    int find = 4;
    int word_a = 5;
    int word_and = 6;
    int concept_begin = 16;
    int num_concepts = 16;

    bool is_concept(int tok) const { return tok >= concept_begin && tok < concept_begin + num_concepts; }
    bool is_special(int tok) const { return tok == bos || tok == eos || tok == evi || tok == evi_end; }
    std::string display(int tok) const;
    std::map<std::string, std::string> hint_table() const;
    void validate() const;  // throws ConfigError
};

// ---- annotation documents ---------------------------------------------------

// Throws SchemaError (shape of the document) or InvariantError (semantics).
AnnotationSample parse_annotation(std::string_view text);
// Canonical JSON: sorted keys, no insignificant whitespace, trailing newline.
std::string serialize_annotation(const AnnotationSample& sample);

// Resolves the sample's video, loading a referenced feature file from
// `base_dir` when needed.
VideoFeatures resolve_video(const AnnotationSample& sample, const std::string& base_dir);

// Feature file: two little-endian uint32 (T, C), then T·C float32 row-major.
void write_feature_file(const std::string& path, const VideoFeatures& video);
VideoFeatures read_feature_file(const std::string& path);
std::string encode_features(const VideoFeatures& video);
VideoFeatures decode_features(std::string_view bytes);

// ---- preference pairs -------------------------------------------------------

enum class Factor { TemporalShift, AddEvent, DeleteEvent, MergeEvents, DistortText, RepeatText };
inline constexpr int kNumFactors = 6;

std::string_view factor_name(Factor f);
std::optional<Factor> factor_from_name(std::string_view name);
bool is_temporal(Factor f);

struct PerturbationRecord {
    Factor factor = Factor::TemporalShift;
    std::vector<int> events;  // indices into the preferred response's events
    std::vector<Interval> before_intervals;
    std::vector<Interval> after_intervals;
    std::vector<std::vector<int>> before_text;
    std::vector<std::vector<int>> after_text;

    bool operator==(const PerturbationRecord&) const = default;
};

// A response together with the intervals it claims (one per event).
struct ScoredResponse {
    ResponseSequence response;
    std::vector<Interval> intervals;
    bool operator==(const ScoredResponse&) const = default;
};

struct Provenance {
    Factor factor = Factor::TemporalShift;
    std::vector<PerturbationRecord> records;
    bool operator==(const Provenance&) const = default;
};

struct PreferencePair {
    std::string base_id;
    int num_frames = 0;  // T of the base video, for range checks
    ScoredResponse preferred;
    ScoredResponse dispreferred;
    Provenance provenance;

    bool operator==(const PreferencePair&) const = default;
};

struct Violation {
    std::string field;
    std::string rule;
    bool operator==(const Violation&) const = default;
};

// Empty iff the pair is well formed and the dispreferred response differs
// from the preferred one exactly as the recorded factor allows.
std::vector<Violation> validate_pair(const PreferencePair& pair);

std::string serialize_pair(const PreferencePair& pair);
PreferencePair parse_pair(std::string_view text);

}  // namespace evigrid
