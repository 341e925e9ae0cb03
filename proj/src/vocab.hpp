#pragma once

#include <map>
#include <optional>
#include <sstream>

#include "avatars.hpp"

namespace idfuse {

// ---------------------------------------------------------------------------
// Closed caption vocabulary and grammar. Captions follow one fixed word
// order, which keeps them trivially parseable back to the mentioned
// attribute subset:
//
//   a photo of a [expr]? [bald]? <class>
//     [with [short|long]? <color> hair]? [wearing glasses]?
//     [in the <scene> background]?
//
// plus a few attribute-free source templates for editing-direction pairs.
// ---------------------------------------------------------------------------

inline constexpr int kCaptionLen = 16;

struct Vocab {
    std::vector<std::string> words;
    std::map<std::string, int> ids;

    Vocab() {
        static const char* base[] = {"<pad>", "<null>", "a", "photo", "of", "the", "good", "with",
                                     "hair", "wearing", "glasses", "in", "background"};
        for (const char* w : base) push(w);
        for (const auto& w : class_words()) push(w);
        for (int i = 0; i < kNumHairColors; ++i) push(to_word((HairColor)i));
        push("short");
        push("long");
        push("bald");
        push("smiling");
        push("angry");
        push("surprised");
        for (int i = 0; i < kNumBackgrounds; ++i) push(to_word((Background)i));
    }

    void push(const std::string& w) {
        if (ids.count(w)) return;
        ids[w] = (int)words.size();
        words.push_back(w);
    }

    int size() const { return (int)words.size(); }
    int pad() const { return 0; }
    int null() const { return 1; }

    int id(const std::string& w) const {
        auto it = ids.find(w);
        if (it == ids.end()) throw std::out_of_range("out-of-vocabulary word: '" + w + "'");
        return it->second;
    }
    const std::string& word(int i) const {
        if (i < 0 || i >= size()) throw std::out_of_range("token id out of range");
        return words[(size_t)i];
    }

    std::string serialize() const {
        std::string out;
        for (int i = 0; i < size(); ++i) out += words[(size_t)i] + "\t" + std::to_string(i) + "\n";
        return out;
    }
    static Vocab parse(const std::string& text) {
        Vocab v;
        v.words.clear();
        v.ids.clear();
        std::istringstream is(text);
        std::string line;
        while (std::getline(is, line)) {
            if (line.empty()) continue;
            auto tab = line.find('\t');
            if (tab == std::string::npos) throw std::runtime_error("vocab: bad line '" + line + "'");
            std::string w = line.substr(0, tab);
            int id = std::stoi(line.substr(tab + 1));
            if (id != (int)v.words.size()) throw std::runtime_error("vocab: non-sequential id for '" + w + "'");
            v.push(w);
        }
        return v;
    }
};

inline const Vocab& vocab() {
    static const Vocab v;
    return v;
}

using CaptionTokens = std::vector<int>;  // fixed length kCaptionLen, padded

// attribute subset a caption mentions
struct CaptionAttrs {
    std::string class_word;
    std::optional<HairColor> hair_color;
    std::optional<HairLength> hair_length;  // long/short only meaningful with color; bald stands alone
    std::optional<Expression> expression;   // never neutral
    bool glasses = false;
    std::optional<Background> background;
};

inline CaptionTokens pad_caption(std::vector<int> ids) {
    if ((int)ids.size() > kCaptionLen) throw std::invalid_argument("caption longer than limit");
    ids.resize(kCaptionLen, vocab().pad());
    return ids;
}

inline CaptionTokens null_caption() {
    std::vector<int> ids = {vocab().null()};
    return pad_caption(std::move(ids));
}

inline bool is_null_caption(const CaptionTokens& c) { return !c.empty() && c[0] == vocab().null(); }

inline CaptionTokens build_caption(const CaptionAttrs& a) {
    const Vocab& v = vocab();
    std::vector<int> ids = {v.id("a"), v.id("photo"), v.id("of"), v.id("a")};
    if (a.expression) {
        if (*a.expression == Expression::neutral) throw std::invalid_argument("neutral expression is unmentionable");
        ids.push_back(v.id(to_word(*a.expression)));
    }
    bool bald = a.hair_length && *a.hair_length == HairLength::bald;
    if (bald) {
        if (a.hair_color) throw std::invalid_argument("bald caption cannot mention hair color");
        ids.push_back(v.id("bald"));
    }
    ids.push_back(v.id(a.class_word));
    if (a.hair_color) {
        ids.push_back(v.id("with"));
        if (a.hair_length && !bald) ids.push_back(v.id(to_word(*a.hair_length)));
        ids.push_back(v.id(to_word(*a.hair_color)));
        ids.push_back(v.id("hair"));
    } else if (a.hair_length && !bald) {
        ids.push_back(v.id("with"));
        ids.push_back(v.id(to_word(*a.hair_length)));
        ids.push_back(v.id("hair"));
    }
    if (a.glasses) {
        ids.push_back(v.id("wearing"));
        ids.push_back(v.id("glasses"));
    }
    if (a.background) {
        ids.push_back(v.id("in"));
        ids.push_back(v.id("the"));
        ids.push_back(v.id(to_word(*a.background)));
        ids.push_back(v.id("background"));
    }
    return pad_caption(std::move(ids));
}

inline std::string caption_text(const CaptionTokens& c) {
    std::string out;
    for (int id : c) {
        if (id == vocab().pad()) break;
        if (!out.empty()) out += ' ';
        out += vocab().word(id);
    }
    return out;
}

// recover the mentioned attribute subset from a caption (round-trip of
// build_caption); throws on captions with no or multiple class words
inline CaptionAttrs parse_caption(const CaptionTokens& c) {
    const Vocab& v = vocab();
    CaptionAttrs a;
    int class_count = 0;
    for (int id : c) {
        if (id == v.pad()) break;
        const std::string& w = v.word(id);
        bool matched = false;
        for (const auto& cw : class_words())
            if (w == cw) {
                a.class_word = w;
                ++class_count;
                matched = true;
            }
        if (matched) continue;
        for (int i = 0; i < kNumHairColors; ++i)
            if (w == to_word((HairColor)i)) a.hair_color = (HairColor)i;
        if (w == "short") a.hair_length = HairLength::short_hair;
        if (w == "long") a.hair_length = HairLength::long_hair;
        if (w == "bald") a.hair_length = HairLength::bald;
        if (w == "smiling") a.expression = Expression::smiling;
        if (w == "angry") a.expression = Expression::angry;
        if (w == "surprised") a.expression = Expression::surprised;
        if (w == "glasses") a.glasses = true;
        for (int i = 0; i < kNumBackgrounds; ++i)
            if (w == to_word((Background)i)) a.background = (Background)i;
    }
    if (class_count != 1) throw std::runtime_error("caption must contain exactly one class word, got " +
                                                   std::to_string(class_count) + " in '" + caption_text(c) + "'");
    return a;
}

// free-text prompt -> tokens; reports the offending word and its position
inline CaptionTokens parse_prompt(const std::string& text) {
    const Vocab& v = vocab();
    std::istringstream is(text);
    std::string w;
    std::vector<int> ids;
    int pos = 0;
    while (is >> w) {
        ++pos;
        auto it = v.ids.find(w);
        if (it == v.ids.end())
            throw std::runtime_error("prompt parse error: unknown word '" + w + "' at position " +
                                     std::to_string(pos));
        ids.push_back(it->second);
    }
    if ((int)ids.size() > kCaptionLen)
        throw std::runtime_error("prompt parse error: longer than " + std::to_string(kCaptionLen) + " tokens");
    CaptionTokens c = pad_caption(std::move(ids));
    parse_caption(c);  // enforces the one-class-word rule
    return c;
}

// caption mention probabilities used when generating the dataset
struct MentionPolicy {
    double p_hair = 0.9;
    double p_hair_length = 0.7;  // given hair mentioned and not bald
    double p_expression = 0.9;   // given non-neutral
    double p_glasses = 0.9;      // given glasses present
    double p_background = 0.8;
};

inline CaptionAttrs draw_caption_attrs(const std::string& class_word, const AttributeVector& attrs,
                                       uint64_t template_seed, const MentionPolicy& policy) {
    Rng rng(0xca9710ull ^ template_seed * 0x9e3779b97f4a7c15ull);
    CaptionAttrs a;
    a.class_word = class_word;
    if (rng.uniform() < policy.p_hair) {
        if (attrs.hair_length == HairLength::bald) {
            a.hair_length = HairLength::bald;
        } else {
            a.hair_color = attrs.hair_color;
            if (rng.uniform() < policy.p_hair_length) a.hair_length = attrs.hair_length;
        }
    }
    if (attrs.expression != Expression::neutral && rng.uniform() < policy.p_expression)
        a.expression = attrs.expression;
    if (attrs.eyewear == Eyewear::glasses && rng.uniform() < policy.p_glasses) a.glasses = true;
    if (rng.uniform() < policy.p_background) a.background = attrs.background;
    return a;
}

inline CaptionTokens caption_for(const std::string& class_word, const AttributeVector& attrs, uint64_t template_seed,
                                 const MentionPolicy& policy = {}) {
    return build_caption(draw_caption_attrs(class_word, attrs, template_seed, policy));
}

// ---------------------------------------------------------------------------
// Editing prompt pairs (source without the attribute, target with it).
// Templates carry a <class> placeholder substituted per sample.
// ---------------------------------------------------------------------------

struct PromptPair {
    std::string source_template;
    std::string target_template;
    std::string tag;
};

inline std::vector<PromptPair> default_prompt_pairs() {
    static const char* sources[] = {"a photo of a <class>", "the photo of a <class>", "a good photo of a <class>",
                                    "a photo of the <class>"};
    std::vector<std::pair<std::string, std::string>> targets;
    for (int i = 0; i < kNumHairColors; ++i)
        targets.push_back({"a photo of a <class> with " + std::string(to_word((HairColor)i)) + " hair",
                           "hair_color:" + std::string(to_word((HairColor)i))});
    targets.push_back({"a photo of a <class> with long hair", "hair_length:long"});
    targets.push_back({"a photo of a <class> with short hair", "hair_length:short"});
    targets.push_back({"a photo of a bald <class>", "hair_length:bald"});
    targets.push_back({"a photo of a smiling <class>", "expression:smiling"});
    targets.push_back({"a photo of a angry <class>", "expression:angry"});
    targets.push_back({"a photo of a surprised <class>", "expression:surprised"});
    targets.push_back({"a photo of a <class> wearing glasses", "eyewear:glasses"});
    std::vector<PromptPair> out;
    for (size_t i = 0; i < targets.size(); ++i)
        for (int j = 0; j < 2; ++j)
            out.push_back({sources[(i + j) % 4], targets[i].first, targets[i].second});
    return out;
}

inline std::string substitute_class(const std::string& tmpl, const std::string& class_word) {
    std::string out = tmpl;
    auto pos = out.find("<class>");
    if (pos == std::string::npos) throw std::runtime_error("template without <class>: " + tmpl);
    out.replace(pos, 7, class_word);
    return out;
}

inline std::string serialize_prompt_pairs(const std::vector<PromptPair>& pairs) {
    std::string out = "# source\ttarget\ttag\n";
    for (const auto& p : pairs) out += p.source_template + "\t" + p.target_template + "\t" + p.tag + "\n";
    return out;
}

inline std::vector<PromptPair> parse_prompt_pairs(const std::string& text) {
    std::vector<PromptPair> out;
    std::istringstream is(text);
    std::string line;
    while (std::getline(is, line)) {
        if (line.empty() || line[0] == '#') continue;
        auto t1 = line.find('\t');
        auto t2 = line.find('\t', t1 + 1);
        if (t1 == std::string::npos || t2 == std::string::npos)
            throw std::runtime_error("prompt pair table: bad line '" + line + "'");
        out.push_back({line.substr(0, t1), line.substr(t1 + 1, t2 - t1 - 1), line.substr(t2 + 1)});
    }
    if (out.empty()) throw std::runtime_error("prompt pair table: empty");
    return out;
}

}  // namespace idfuse
