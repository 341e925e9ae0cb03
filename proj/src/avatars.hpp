#pragma once

#include <optional>
#include <string>

#include "core.hpp"

namespace idfuse {

// ---------------------------------------------------------------------------
// Procedural avatar domain: identities are continuous geometry/color
// parameters derived purely from the identity id; attributes are the
// discrete, editable factors. Renders are 32x32 RGB in [0,1] plus a binary
// face+hair mask.
// ---------------------------------------------------------------------------

inline constexpr int kImageSize = 32;
inline constexpr int kImagePixels = kImageSize * kImageSize;

enum class HairColor { black = 0, red, blond, grey, purple };
enum class HairLength { short_hair = 0, long_hair, bald };
enum class Expression { neutral = 0, smiling, angry, surprised };
enum class Eyewear { none = 0, glasses };
enum class Background { indigo = 0, forest, sand, stripes, checker, tangerine };

inline constexpr int kNumHairColors = 5;
inline constexpr int kNumHairLengths = 3;
inline constexpr int kNumExpressions = 4;
inline constexpr int kNumEyewear = 2;
inline constexpr int kNumBackgrounds = 6;

const char* to_word(HairColor v);
const char* to_word(HairLength v);
const char* to_word(Expression v);
const char* to_word(Eyewear v);
const char* to_word(Background v);

struct IdentitySpec {
    int identity_id = 0;
    float face_hue = 0;      // [0,1)
    float face_shape = 1;    // [0.78, 1.28] ellipse aspect
    float eye_spacing = 4;   // [3.0, 5.2] px
    float eye_size = 1.8;    // [1.3, 2.4] px
    float nose_len = 3;      // [2.0, 4.5] px
};

struct AttributeVector {
    HairColor hair_color = HairColor::black;
    HairLength hair_length = HairLength::short_hair;
    Expression expression = Expression::neutral;
    Eyewear eyewear = Eyewear::none;
    Background background = Background::indigo;

    bool operator==(const AttributeVector&) const = default;
};

// names of the coordinates, for manifests and edit tables
inline const std::vector<std::string>& attribute_names() {
    static const std::vector<std::string> n = {"hair_color", "hair_length", "expression", "eyewear", "background"};
    return n;
}
int attribute_value(const AttributeVector& a, int coord);
void set_attribute_value(AttributeVector& a, int coord, int value);
int attribute_cardinality(int coord);
int count_attribute_diffs(const AttributeVector& a, const AttributeVector& b);

// identity parameters are a pure function of the id (independent of any
// dataset seed, so a given id renders the same face everywhere)
IdentitySpec identity_from_id(int identity_id);

// deterministic class word for an identity
const std::string& class_word_for(const IdentitySpec& id);
const std::vector<std::string>& class_words();

struct Render {
    Tensor<float> image;  // (3, 32*32), values in [0,1]
    Tensor<float> mask;   // (32*32), exactly 0 or 1; 1 = face or hair
};

// Deterministic given (id, attrs, seed); seed drives small position/scale
// jitter. Pixels fully inside the mask never depend on the background.
Render render_avatar(const IdentitySpec& id, const AttributeVector& attrs, uint64_t seed);

AttributeVector random_attributes(Rng& rng);

inline constexpr float kBackgroundFill = 0.5f;  // mid-gray fill for masked references

// replaces everything outside the mask with the fill value
Tensor<float> apply_background_mask(const Tensor<float>& image, const Tensor<float>& mask,
                                    float fill = kBackgroundFill);

}  // namespace idfuse
