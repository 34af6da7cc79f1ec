#include <algorithm>
#include <cmath>
#include <string>

#include "doctest.h"
#include "evigrid/domain.hpp"
#include "evigrid/errors.hpp"
#include "evigrid/rng.hpp"

using namespace evigrid;

namespace {

const char* kMinimal = R"({
  "id": "m1",
  "video": [[0.1,0.2],[0.3,0.4],[0.5,0.6],[0.7,0.8],[0.9,1.0],[1.1,1.2],[1.3,1.4],[1.5,1.6]],
  "question": [4, 16],
  "response": {"grounding_k": 1, "answer": [{"text": [5, 16]}, {"evi": 0}]},
  "time_gt": [[2, 5]]
})";

// Random valid sample with inline features.
AnnotationSample random_sample(Rng& rng, int index) {
    const Vocab vocab;
    AnnotationSample s;
    s.id = "r" + std::to_string(index);
    const int t = rng.uniform_int(1, 20);
    const int c = rng.uniform_int(1, 4);
    VideoFeatures v;
    v.frames = Tensor(t, c);
    for (auto& x : v.frames.data) {
        // float32-representable so the text round trip is exact
        x = static_cast<float>(rng.uniform(-2.0, 2.0));
    }
    s.video = v;
    s.question = {vocab.find, rng.uniform_int(vocab.concept_begin, vocab.concept_begin + vocab.num_concepts - 1)};
    const int k = rng.uniform_int(0, std::min(4, t));
    std::vector<int> starts;
    for (int i = 0; i < k; ++i) starts.push_back(rng.uniform_int(0, t - 1));
    std::sort(starts.begin(), starts.end());
    EventTexts texts;
    for (int i = 0; i < k; ++i) {
        s.time_gt.push_back({starts[static_cast<size_t>(i)], rng.uniform_int(starts[static_cast<size_t>(i)], t - 1)});
        std::vector<int> words;
        const int n = rng.uniform_int(0, 3);
        for (int w = 0; w < n; ++w) words.push_back(rng.uniform_int(vocab.find, vocab.size - 1));
        texts.per_event.push_back(words);
    }
    if (rng.uniform() < 0.5) texts.tail = {vocab.word_and};
    s.response = build_response(s.time_gt, texts);
    if (rng.uniform() < 0.3) s.vocab_hint = vocab.hint_table();
    return s;
}

PreferencePair two_event_pair() {
    PreferencePair p;
    p.base_id = "b";
    p.num_frames = 30;
    const std::vector<Interval> iv{{2, 5}, {10, 14}};
    EventTexts texts;
    texts.per_event = {{16}, {17}};
    p.preferred = {build_response(iv, texts), iv};
    p.dispreferred = p.preferred;
    return p;
}

}  // namespace

TEST_CASE("interval basics") {
    CHECK(Interval{3, 3}.length() == 1);
    CHECK(Interval{2, 5}.length() == 4);
    CHECK_FALSE(Interval{4, 3}.valid());
    CHECK(Interval{0, 9}.valid_for(10));
    CHECK_FALSE(Interval{0, 10}.valid_for(10));
    CHECK(interval_from_seconds(1.4, 3.6) == Interval{1, 4});
    CHECK(interval_from_seconds(2.0, 8.0, 0.5) == Interval{1, 4});
}

TEST_CASE("interval length is positive for every valid interval") {
    for (int s = 0; s < 30; ++s) {
        for (int e = s; e < 30; ++e) {
            CHECK(Interval{s, e}.length() == e - s + 1);
        }
    }
}

TEST_CASE("minimal document parses to one event") {
    const AnnotationSample s = parse_annotation(kMinimal);
    CHECK(s.id == "m1");
    CHECK(s.num_frames() == 8);
    CHECK(s.response.num_events() == 1);
    CHECK(s.response.ref_indices() == std::vector<int>{0});
    REQUIRE(s.time_gt.size() == 1);
    CHECK(s.time_gt[0] == Interval{2, 5});
    CHECK(s.response.grounding_slots[0].interval == Interval{2, 5});
    CHECK(s.response.text_tokens() == std::vector<int>{5, 16});
}

TEST_CASE("schema errors") {
    CHECK_THROWS_AS(parse_annotation("not json"), SchemaError);
    CHECK_THROWS_AS(parse_annotation(R"({"video": [[0.0]], "question": []})"), SchemaError);
    std::string extra = kMinimal;
    extra.insert(extra.find("\"question\""), "\"bogus\": 1, ");
    CHECK_THROWS_AS(parse_annotation(extra), SchemaError);
    std::string arity = kMinimal;
    arity.replace(arity.find("[[2, 5]]"), 8, "[[2, 5, 7]]");
    CHECK_THROWS_AS(parse_annotation(arity), SchemaError);
}

TEST_CASE("invariant errors") {
    SUBCASE("two references against three ground-truth intervals") {
        const std::string doc = R"({
          "video": {"path": "v.f32", "T": 30, "C": 4},
          "question": [4],
          "response": {"grounding_k": 2, "answer": [{"evi": 0}, {"evi": 1}]},
          "time_gt": [[1, 2], [4, 6], [8, 9]]
        })";
        CHECK_THROWS_AS(parse_annotation(doc), InvariantError);
    }
    SUBCASE("interval past the last frame") {
        std::string doc = kMinimal;
        doc.replace(doc.find("[[2, 5]]"), 8, "[[2, 8]]");
        CHECK_THROWS_AS(parse_annotation(doc), InvariantError);
    }
    SUBCASE("reversed interval") {
        std::string doc = kMinimal;
        doc.replace(doc.find("[[2, 5]]"), 8, "[[5, 2]]");
        CHECK_THROWS_AS(parse_annotation(doc), InvariantError);
    }
    SUBCASE("grounding slots out of temporal order") {
        const std::string doc = R"({
          "video": {"path": "v.f32", "T": 30, "C": 4},
          "question": [4],
          "response": {"grounding_k": 2, "answer": [{"evi": 0}, {"evi": 1}]},
          "time_gt": [[8, 9], [1, 2]]
        })";
        CHECK_THROWS_AS(parse_annotation(doc), InvariantError);
    }
    SUBCASE("non-finite feature") {
        std::string doc = kMinimal;
        doc.replace(doc.find("0.1"), 3, "1e999");
        CHECK_THROWS_AS(parse_annotation(doc), Error);
    }
}

TEST_CASE("random documents round trip") {
    Rng rng(11);
    for (int i = 0; i < 100; ++i) {
        const AnnotationSample s = random_sample(rng, i);
        const std::string text = serialize_annotation(s);
        const AnnotationSample back = parse_annotation(text);
        CHECK(back == s);
        CHECK(serialize_annotation(back) == text);
    }
}

TEST_CASE("serialization is canonical") {
    const AnnotationSample a = parse_annotation(kMinimal);
    std::string reordered = R"({"time_gt": [[2, 5]], "question": [4, 16],
      "response": {"answer": [{"text": [5, 16]}, {"evi": 0}], "grounding_k": 1},
      "video": [[0.1,0.2],[0.3,0.4],[0.5,0.6],[0.7,0.8],[0.9,1.0],[1.1,1.2],[1.3,1.4],[1.5,1.6]],
      "id": "m1"})";
    CHECK(serialize_annotation(parse_annotation(reordered)) == serialize_annotation(a));
    CHECK(serialize_annotation(a).back() == '\n');
}

TEST_CASE("pure-text sample serializes with an empty time_gt") {
    AnnotationSample s;
    s.id = "t";
    s.video = VideoRef{"x.f32", 4, 2};
    s.question = {4};
    s.response.answer_parts.emplace_back(TextSpan{{5, 6}});
    const std::string text = serialize_annotation(s);
    CHECK(text.find("\"time_gt\":[]") != std::string::npos);
    CHECK(parse_annotation(text) == s);
}

TEST_CASE("parsing never crashes on mutated documents") {
    Rng rng(5);
    const std::string base = serialize_annotation(random_sample(rng, 0));
    const std::string alphabet = "{}[]\":,0123456789-.eabcx ";
    int parsed = 0;
    for (int i = 0; i < 2000; ++i) {
        std::string doc = base;
        const int edits = rng.uniform_int(1, 4);
        for (int e = 0; e < edits; ++e) {
            const size_t pos = static_cast<size_t>(rng.uniform_int(0, static_cast<int>(doc.size()) - 1));
            const char ch = alphabet[static_cast<size_t>(rng.uniform_int(0, static_cast<int>(alphabet.size()) - 1))];
            switch (rng.uniform_int(0, 2)) {
                case 0: doc[pos] = ch; break;
                case 1: doc.insert(pos, 1, ch); break;
                default: doc.erase(pos, 1); break;
            }
        }
        try {
            const AnnotationSample s = parse_annotation(doc);
            CHECK(s.response.violations().empty());
            ++parsed;
        } catch (const SchemaError&) {
        } catch (const InvariantError&) {
        }
    }
    CHECK(parsed < 2000);
}

TEST_CASE("feature files round trip as float32") {
    VideoFeatures v;
    v.frames = Tensor(3, 2);
    v.frames.data = {0.5, -1.25, 3.0, 0.0, 2.5, -0.75};
    const std::string bytes = encode_features(v);
    CHECK(bytes.size() == 8 + 6 * 4);
    CHECK(decode_features(bytes) == v);
    CHECK_THROWS_AS(decode_features(bytes.substr(0, 10)), IoError);
    CHECK_THROWS_AS(read_feature_file("/nonexistent/x.f32"), IoError);
}

TEST_CASE("response structure") {
    SUBCASE("built responses are valid and split back into their texts") {
        EventTexts texts;
        texts.per_event = {{16, 5}, {}, {17}};
        texts.tail = {6};
        const ResponseSequence r = build_response({{1, 2}, {3, 5}, {7, 7}}, texts);
        CHECK(r.violations().empty());
        CHECK(r.ref_indices() == std::vector<int>{0, 1, 2});
        CHECK(split_event_texts(r) == texts);
    }
    SUBCASE("duplicate references are a violation") {
        ResponseSequence r = build_response({{1, 2}}, EventTexts{{{}}, {}});
        r.answer_parts.push_back(EvidenceRef{0, {}});
        CHECK_FALSE(r.violations().empty());
    }
    SUBCASE("reference beyond K is a violation") {
        ResponseSequence r = build_response({{1, 2}}, EventTexts{{{}}, {}});
        std::get<EvidenceRef>(r.answer_parts.back()).index = 1;
        CHECK_FALSE(r.violations().empty());
    }
}

TEST_CASE("factor names") {
    for (int f = 0; f < kNumFactors; ++f) {
        const auto fac = static_cast<Factor>(f);
        CHECK(factor_from_name(factor_name(fac)) == fac);
    }
    CHECK_FALSE(factor_from_name("Nope").has_value());
    CHECK(is_temporal(Factor::MergeEvents));
    CHECK_FALSE(is_temporal(Factor::RepeatText));
}

TEST_CASE("validate_pair") {
    SUBCASE("no-op temporal shift is one violation") {
        PreferencePair p = two_event_pair();
        p.provenance.factor = Factor::TemporalShift;
        p.provenance.records.push_back({Factor::TemporalShift, {0}, {{2, 5}}, {{2, 5}}, {}, {}});
        CHECK(validate_pair(p).size() == 1);
    }
    SUBCASE("a real shift is clean") {
        PreferencePair p = two_event_pair();
        p.provenance.factor = Factor::TemporalShift;
        const std::vector<Interval> iv{{3, 6}, {10, 14}};
        p.dispreferred.intervals = iv;
        attach_intervals(p.dispreferred.response, iv);
        p.provenance.records.push_back({Factor::TemporalShift, {0}, {{2, 5}}, {{3, 6}}, {}, {}});
        CHECK(validate_pair(p).empty());
    }
    SUBCASE("delete that keeps the event count is one violation") {
        PreferencePair p = two_event_pair();
        p.provenance.factor = Factor::DeleteEvent;
        const std::vector<Interval> iv{{2, 5}, {11, 14}};
        p.dispreferred.intervals = iv;
        attach_intervals(p.dispreferred.response, iv);
        p.provenance.records.push_back({Factor::DeleteEvent, {1}, {{10, 14}}, {}, {}, {}});
        CHECK(validate_pair(p).size() == 1);
    }
    SUBCASE("pairs survive serialization") {
        PreferencePair p = two_event_pair();
        p.provenance.factor = Factor::DistortText;
        EventTexts texts;
        texts.per_event = {{18}, {17}};
        p.dispreferred.response = build_response(p.preferred.intervals, texts);
        p.provenance.records.push_back({Factor::DistortText, {0}, {}, {}, {{16}}, {{18}}});
        CHECK(validate_pair(p).empty());
        CHECK(parse_pair(serialize_pair(p)) == p);
    }
}
