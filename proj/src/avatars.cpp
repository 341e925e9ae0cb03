#include "avatars.hpp"

#include <cmath>

namespace idfuse {

const char* to_word(HairColor v) {
    static const char* w[] = {"black", "red", "blond", "grey", "purple"};
    return w[(int)v];
}
const char* to_word(HairLength v) {
    static const char* w[] = {"short", "long", "bald"};
    return w[(int)v];
}
const char* to_word(Expression v) {
    static const char* w[] = {"neutral", "smiling", "angry", "surprised"};
    return w[(int)v];
}
const char* to_word(Eyewear v) {
    static const char* w[] = {"none", "glasses"};
    return w[(int)v];
}
const char* to_word(Background v) {
    static const char* w[] = {"indigo", "forest", "sand", "stripes", "checker", "tangerine"};
    return w[(int)v];
}

int attribute_value(const AttributeVector& a, int coord) {
    switch (coord) {
        case 0: return (int)a.hair_color;
        case 1: return (int)a.hair_length;
        case 2: return (int)a.expression;
        case 3: return (int)a.eyewear;
        case 4: return (int)a.background;
    }
    throw std::out_of_range("attribute coord");
}

void set_attribute_value(AttributeVector& a, int coord, int value) {
    switch (coord) {
        case 0: a.hair_color = (HairColor)value; return;
        case 1: a.hair_length = (HairLength)value; return;
        case 2: a.expression = (Expression)value; return;
        case 3: a.eyewear = (Eyewear)value; return;
        case 4: a.background = (Background)value; return;
    }
    throw std::out_of_range("attribute coord");
}

int attribute_cardinality(int coord) {
    static const int c[] = {kNumHairColors, kNumHairLengths, kNumExpressions, kNumEyewear, kNumBackgrounds};
    if (coord < 0 || coord > 4) throw std::out_of_range("attribute coord");
    return c[coord];
}

int count_attribute_diffs(const AttributeVector& a, const AttributeVector& b) {
    int n = 0;
    for (int c = 0; c < 5; ++c)
        if (attribute_value(a, c) != attribute_value(b, c)) ++n;
    return n;
}

IdentitySpec identity_from_id(int identity_id) {
    Rng rng(0x1d5eedull ^ (uint64_t)identity_id * 0x9e3779b97f4a7c15ull);
    IdentitySpec s;
    s.identity_id = identity_id;
    s.face_hue = (float)rng.uniform();
    s.face_shape = (float)rng.uniform(0.78, 1.28);
    s.eye_spacing = (float)rng.uniform(3.0, 5.2);
    s.eye_size = (float)rng.uniform(1.3, 2.4);
    s.nose_len = (float)rng.uniform(2.0, 4.5);
    return s;
}

const std::vector<std::string>& class_words() {
    static const std::vector<std::string> w = {"person", "man", "woman", "girl", "boy"};
    return w;
}
const std::string& class_word_for(const IdentitySpec& id) {
    Rng rng(0xc1a55ull ^ (uint64_t)id.identity_id * 0x2545f4914f6cdd1dull);
    return class_words()[rng.below(class_words().size())];
}

AttributeVector random_attributes(Rng& rng) {
    AttributeVector a;
    a.hair_color = (HairColor)rng.below(kNumHairColors);
    a.hair_length = (HairLength)rng.below(kNumHairLengths);
    a.expression = (Expression)rng.below(kNumExpressions);
    a.eyewear = (Eyewear)rng.below(kNumEyewear);
    a.background = (Background)rng.below(kNumBackgrounds);
    return a;
}

namespace {

struct Rgb {
    float r, g, b;
};

Rgb hsv(float h, float s, float v) {
    h = h - std::floor(h);
    float c = v * s;
    float hp = h * 6.0f;
    float x = c * (1.0f - std::abs(std::fmod(hp, 2.0f) - 1.0f));
    float r = 0, g = 0, b = 0;
    if (hp < 1) { r = c; g = x; }
    else if (hp < 2) { r = x; g = c; }
    else if (hp < 3) { g = c; b = x; }
    else if (hp < 4) { g = x; b = c; }
    else if (hp < 5) { r = x; b = c; }
    else { r = c; b = x; }
    float m = v - c;
    return {r + m, g + m, b + m};
}

inline bool in_ellipse(float x, float y, float cx, float cy, float rx, float ry) {
    float dx = (x - cx) / rx, dy = (y - cy) / ry;
    return dx * dx + dy * dy <= 1.0f;
}

// distance from point to segment <= radius
inline bool in_capsule(float x, float y, float x0, float y0, float x1, float y1, float radius) {
    float vx = x1 - x0, vy = y1 - y0;
    float len2 = vx * vx + vy * vy;
    float t = len2 > 0 ? ((x - x0) * vx + (y - y0) * vy) / len2 : 0.0f;
    t = std::clamp(t, 0.0f, 1.0f);
    float dx = x - (x0 + t * vx), dy = y - (y0 + t * vy);
    return dx * dx + dy * dy <= radius * radius;
}

struct Scene {
    Background kind;
    Rgb at(float x, float y) const {
        switch (kind) {
            case Background::indigo: return {0.22f, 0.26f, 0.52f};
            case Background::forest: return {0.16f, 0.42f, 0.25f};
            case Background::sand: return {0.82f, 0.72f, 0.46f};
            case Background::stripes:
                return ((int)std::floor(y / 4.0f)) % 2 == 0 ? Rgb{0.13f, 0.50f, 0.55f} : Rgb{0.88f, 0.92f, 0.92f};
            case Background::checker:
                return (((int)std::floor(x / 4.0f) + (int)std::floor(y / 4.0f)) % 2 + 2) % 2 == 0
                           ? Rgb{0.42f, 0.20f, 0.55f}
                           : Rgb{0.90f, 0.88f, 0.93f};
            case Background::tangerine:
                return ((int)std::floor(x / 4.0f)) % 2 == 0 ? Rgb{0.95f, 0.55f, 0.15f} : Rgb{0.95f, 0.90f, 0.80f};
        }
        return {0, 0, 0};
    }
};

Rgb hair_rgb(HairColor c) {
    switch (c) {
        case HairColor::black: return {0.08f, 0.08f, 0.09f};
        case HairColor::red: return {0.76f, 0.16f, 0.10f};
        case HairColor::blond: return {0.92f, 0.80f, 0.35f};
        case HairColor::grey: return {0.62f, 0.62f, 0.64f};
        case HairColor::purple: return {0.55f, 0.20f, 0.70f};
    }
    return {0, 0, 0};
}

}  // namespace

Render render_avatar(const IdentitySpec& id, const AttributeVector& attrs, uint64_t seed) {
    Rng rng(0xfacedull ^ seed * 0x9e3779b97f4a7c15ull ^ (uint64_t)id.identity_id);
    const float dx = (float)rng.uniform(-1.2, 1.2);
    const float dy = (float)rng.uniform(-1.0, 1.0);
    const float s = (float)rng.uniform(0.92, 1.08);

    const float cx = 16.0f + dx, cy = 16.5f + dy;
    const float shape_sq = std::sqrt(id.face_shape);
    const float rx = 7.2f * s * shape_sq;
    const float ry = 8.8f * s / shape_sq;

    const Rgb skin = hsv(id.face_hue, 0.52f, 0.88f);
    const Rgb skin_dark = {skin.r * 0.62f, skin.g * 0.62f, skin.b * 0.62f};
    const Rgb hair = hair_rgb(attrs.hair_color);
    const Scene scene{attrs.background};

    const float eye_y = cy - 2.2f * s;
    const float ex_l = cx - id.eye_spacing * s, ex_r = cx + id.eye_spacing * s;
    const float er = id.eye_size * s * (attrs.expression == Expression::surprised ? 1.25f : 1.0f);
    const float pupil = er * 0.45f;

    const bool has_hair = attrs.hair_length != HairLength::bald;
    const bool long_hair = attrs.hair_length == HairLength::long_hair;
    const float hair_line = cy - 0.18f * ry;
    const float strand_x_l = cx - (rx + 1.8f), strand_x_r = cx + (rx + 1.8f);

    const float mouth_y = cy + 0.52f * ry;
    const float mouth_w = 2.9f * s;
    const Rgb mouth_col = {0.45f, 0.12f, 0.12f};
    const Rgb glasses_col = {0.12f, 0.12f, 0.14f};
    const Rgb brow_col = {0.10f, 0.07f, 0.06f};
    const Rgb sclera = {0.97f, 0.97f, 0.97f};
    const Rgb pupil_col = {0.05f, 0.05f, 0.06f};

    auto face_hit = [&](float x, float y) { return in_ellipse(x, y, cx, cy, rx, ry); };
    auto hair_hit = [&](float x, float y) {
        if (!has_hair) return false;
        bool cap = in_ellipse(x, y, cx, cy, rx + 0.9f, ry + 0.9f) && y < hair_line;
        if (cap) return true;
        if (long_hair) {
            if (in_capsule(x, y, strand_x_l, cy - 0.30f * ry, strand_x_l, cy + 1.05f * ry, 2.0f)) return true;
            if (in_capsule(x, y, strand_x_r, cy - 0.30f * ry, strand_x_r, cy + 1.05f * ry, 2.0f)) return true;
        }
        return false;
    };

    auto sample_color = [&](float x, float y) -> Rgb {
        // pupils and sclera sit on top of everything facial
        float dl2 = (x - ex_l) * (x - ex_l) + (y - eye_y) * (y - eye_y);
        float dr2 = (x - ex_r) * (x - ex_r) + (y - eye_y) * (y - eye_y);
        if (dl2 <= pupil * pupil || dr2 <= pupil * pupil) return pupil_col;
        if (dl2 <= er * er || dr2 <= er * er) return sclera;

        if (attrs.eyewear == Eyewear::glasses) {
            float gr = er + 1.3f;
            float th = 0.7f;
            bool ring_l = dl2 <= gr * gr && dl2 >= (gr - th) * (gr - th);
            bool ring_r = dr2 <= gr * gr && dr2 >= (gr - th) * (gr - th);
            bool bridge = in_capsule(x, y, ex_l + gr - th, eye_y, ex_r - gr + th, eye_y, 0.35f);
            if (ring_l || ring_r || bridge) return glasses_col;
        }

        if (attrs.expression == Expression::angry) {
            // strong inward-slanted brows
            if (in_capsule(x, y, ex_l - er - 0.5f, eye_y - er - 2.3f, ex_l + er + 0.3f, eye_y - er - 0.6f, 0.7f))
                return brow_col;
            if (in_capsule(x, y, ex_r - er - 0.3f, eye_y - er - 0.6f, ex_r + er + 0.5f, eye_y - er - 2.3f, 0.7f))
                return brow_col;
        } else if (attrs.expression == Expression::surprised) {
            // raised flat brows
            if (in_capsule(x, y, ex_l - er, eye_y - er - 2.2f, ex_l + er, eye_y - er - 2.2f, 0.7f)) return brow_col;
            if (in_capsule(x, y, ex_r - er, eye_y - er - 2.2f, ex_r + er, eye_y - er - 2.2f, 0.7f)) return brow_col;
        }

        // mouth by expression
        switch (attrs.expression) {
            case Expression::neutral: {
                if (std::abs(x - cx) <= mouth_w && std::abs(y - mouth_y) <= 0.6f) return mouth_col;
                break;
            }
            case Expression::angry: {
                // frown: corners pulled down hard
                float u = (x - cx) / mouth_w;
                if (std::abs(x - cx) <= mouth_w) {
                    float curve = mouth_y + 2.0f * s * (u * u - 0.6f);
                    if (std::abs(y - curve) <= 0.7f) return mouth_col;
                }
                break;
            }
            case Expression::smiling: {
                // open grin: a wide half-disc hanging below the mouth line
                if (y >= mouth_y - 0.2f && in_ellipse(x, y, cx, mouth_y, mouth_w * 1.1f, 2.1f * s))
                    return mouth_col;
                break;
            }
            case Expression::surprised:
                // wide-open mouth
                if (in_ellipse(x, y, cx, mouth_y, 1.9f * s, 2.4f * s)) return {0.25f, 0.05f, 0.05f};
                break;
        }

        if (in_capsule(x, y, cx, cy + 0.2f, cx, cy + 0.2f + id.nose_len * s, 0.45f)) return skin_dark;
        if (hair_hit(x, y)) return hair;
        if (face_hit(x, y)) return skin;
        return scene.at(x, y);
    };

    Render out;
    out.image = Tensor<float>({3, kImagePixels});
    out.mask = Tensor<float>({kImagePixels});
    constexpr int ss = 4;  // 4x4 subsamples per pixel
    for (int i = 0; i < kImageSize; ++i) {
        for (int j = 0; j < kImageSize; ++j) {
            float r = 0, g = 0, b = 0;
            int covered = 0;
            for (int vi = 0; vi < ss; ++vi) {
                for (int vj = 0; vj < ss; ++vj) {
                    float y = (float)i + ((float)vi + 0.5f) / ss;
                    float x = (float)j + ((float)vj + 0.5f) / ss;
                    Rgb c = sample_color(x, y);
                    r += c.r; g += c.g; b += c.b;
                    if (face_hit(x, y) || hair_hit(x, y)) ++covered;
                }
            }
            int p = i * kImageSize + j;
            out.image[0 * kImagePixels + p] = r / (ss * ss);
            out.image[1 * kImagePixels + p] = g / (ss * ss);
            out.image[2 * kImagePixels + p] = b / (ss * ss);
            // only fully covered pixels count: guarantees in-mask pixels are
            // independent of the background
            out.mask[p] = covered == ss * ss ? 1.0f : 0.0f;
        }
    }
    return out;
}

Tensor<float> apply_background_mask(const Tensor<float>& image, const Tensor<float>& mask, float fill) {
    Tensor<float> out = image;
    int S = (int)mask.numel();
    for (int c = 0; c < 3; ++c)
        for (int p = 0; p < S; ++p)
            if (mask[p] == 0.0f) out[(int64_t)c * S + p] = fill;
    return out;
}

}  // namespace idfuse
