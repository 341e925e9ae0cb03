#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "losses.hpp"
#include "test_util.hpp"

using namespace idfuse;
using namespace idfuse::testutil;

namespace {

Tensor<double> randn(Rng& rng, std::vector<int> s) {
    Tensor<double> t(std::move(s));
    rng.fill_normal(t);
    return t;
}

// editing direction with constant (off-tape) deltas, for loss-only tests
EditingDirection<double> synthetic_direction(Tape<double>& t, const std::vector<Tensor<double>>& deltas,
                                             const std::vector<std::string>& names, int timestep = 3,
                                             const std::string& zfp = "zx") {
    EditingDirection<double> d;
    d.y = null_caption();
    d.y_prime = null_caption();
    d.timestep = timestep;
    d.z_fingerprint = zfp;
    d.tap_names = names;
    for (const auto& dd : deltas) d.deltas.push_back(t.constant(dd));
    return d;
}

}  // namespace

TEST_CASE("loss_rec: exact values and scalar-loop oracle") {
    Rng rng(1);
    Tape<double> t;
    Tensor<double> eps = randn(rng, {3, 64});
    CHECK(loss_rec(t, t.constant(eps), eps).val()[0] == 0.0);

    Tensor<double> off = eps;
    for (auto& v : off.data) v += 1.0;
    CHECK(loss_rec(t, t.constant(off), eps).val()[0] == doctest::Approx(1.0).epsilon(1e-12));

    Tensor<double> pred = randn(rng, {3, 64});
    double oracle = 0;
    for (int64_t i = 0; i < eps.numel(); ++i) oracle += (pred[i] - eps[i]) * (pred[i] - eps[i]);
    oracle /= (double)eps.numel();
    CHECK(rel_close(loss_rec(t, t.constant(pred), eps).val()[0], oracle, 1e-7));
}

TEST_CASE("editing_direction: identical prompts give zero, swap negates exactly") {
    TinyModel<double> m(2);
    Rng rng(3);
    Tensor<double> z = randn(rng, {3, 1024});
    CaptionTokens y = parse_prompt("a photo of a person");
    CaptionTokens y2 = parse_prompt("a photo of a person with red hair");
    std::vector<std::string> taps = {"up1.xattn"};

    Tape<double> t;
    t.grad_enabled = false;
    auto same = editing_direction<double>(t, m.dn, m.ps, m.txt, z, 7, y, y, std::nullopt, 1.0, taps);
    for (auto v : same.deltas[0].val().data) CHECK(v == 0.0);

    auto fwd = editing_direction<double>(t, m.dn, m.ps, m.txt, z, 7, y, y2, std::nullopt, 1.0, taps);
    auto bwd = editing_direction<double>(t, m.dn, m.ps, m.txt, z, 7, y2, y, std::nullopt, 1.0, taps);
    for (int64_t i = 0; i < fwd.deltas[0].val().numel(); ++i)
        CHECK(fwd.deltas[0].val()[i] == -bwd.deltas[0].val()[i]);

    // identity branch at lambda 0 equals the base model's direction bit for bit
    Tensor<double> f = randn(rng, {16, m.cc.d_ctx});
    auto with_id0 = editing_direction<double>(t, m.dn, m.ps, m.txt, z, 7, y, y2, t.constant(f), 0.0, taps);
    CHECK(bits_equal(with_id0.deltas[0].val(), fwd.deltas[0].val()));

    CHECK_THROWS_AS(editing_direction<double>(t, m.dn, m.ps, m.txt, z, 7, y, y2, std::nullopt, 1.0, {}),
                    std::invalid_argument);
}

TEST_CASE("loss_edit: closed-form values and provenance checks") {
    Rng rng(4);
    Tape<double> t;
    std::vector<std::string> names = {"b0", "b1"};
    Tensor<double> d0 = randn(rng, {16, 6}), d1 = randn(rng, {16, 6});
    MaskPyramid<double> masks;
    masks.tap_names = names;
    masks.block_masks = {Tensor<double>::full({16}, 1.0), Tensor<double>::full({16}, 1.0)};

    auto base = synthetic_direction(t, {d0, d1}, names);
    // identical directions, full mask -> 0
    CHECK(loss_edit(t, base, synthetic_direction(t, {d0, d1}, names), masks).val()[0] ==
          doctest::Approx(0.0).epsilon(1e-12));
    // negated direction -> 2 per block, summed over blocks
    Tensor<double> n0 = d0, n1 = d1;
    for (auto& v : n0.data) v = -v;
    for (auto& v : n1.data) v = -v;
    CHECK(loss_edit(t, base, synthetic_direction(t, {n0, n1}, names), masks).val()[0] ==
          doctest::Approx(4.0).epsilon(1e-9));
    // orthogonal per-location vectors, single block -> 1
    Tensor<double> a({4, 2}), b({4, 2});
    for (int i = 0; i < 4; ++i) {
        a[i * 2] = 1.0;
        b[i * 2 + 1] = 1.0 + i;
    }
    MaskPyramid<double> m1;
    m1.tap_names = {"b0"};
    m1.block_masks = {Tensor<double>::full({4}, 1.0)};
    CHECK(loss_edit(t, synthetic_direction(t, {a}, {"b0"}), synthetic_direction(t, {b}, {"b0"}), m1).val()[0] ==
          doctest::Approx(1.0).epsilon(1e-12));

    // provenance: timestep, z fingerprint, prompt pair, taps
    auto mismatch_t = synthetic_direction(t, {d0, d1}, names, 4);
    CHECK_THROWS_WITH_AS(loss_edit(t, base, mismatch_t, masks), doctest::Contains("provenance"), std::runtime_error);
    auto mismatch_z = synthetic_direction(t, {d0, d1}, names, 3, "other");
    CHECK_THROWS_AS(loss_edit(t, base, mismatch_z, masks), std::runtime_error);
    auto mismatch_y = synthetic_direction(t, {d0, d1}, names);
    mismatch_y.y = parse_prompt("a photo of a man");
    CHECK_THROWS_AS(loss_edit(t, base, mismatch_y, masks), std::runtime_error);
}

TEST_CASE("loss_edit: range bound and scale invariance") {
    Rng rng(5);
    Tape<double> t;
    std::vector<std::string> names = {"b0", "b1", "b2"};
    MaskPyramid<double> masks;
    masks.tap_names = names;
    for (int l = 0; l < 3; ++l) {
        Tensor<double> mk({8});
        for (int i = 0; i < 8; ++i) mk[i] = rng.uniform() < 0.5 ? 1.0 : 0.0;
        masks.block_masks.push_back(mk);
    }
    for (int trial = 0; trial < 50; ++trial) {
        std::vector<Tensor<double>> db, dm, dms;
        for (int l = 0; l < 3; ++l) {
            db.push_back(randn(rng, {8, 5}));
            dm.push_back(randn(rng, {8, 5}));
            dms.push_back(dm.back());
            double c = 0.1 + 10.0 * rng.uniform();
            for (auto& v : dms.back().data) v *= c;  // positive per-direction rescale
        }
        double v = loss_edit(t, synthetic_direction(t, db, names), synthetic_direction(t, dm, names), masks).val()[0];
        CHECK(v >= 0.0);
        CHECK(v <= 2.0 * 3);
        double vs =
            loss_edit(t, synthetic_direction(t, db, names), synthetic_direction(t, dms, names), masks).val()[0];
        CHECK(rel_close(v, vs, 1e-6));
    }
}

TEST_CASE("loss_edit: zero-vector locations contribute nothing") {
    Tape<double> t;
    Rng rng(6);
    Tensor<double> base = randn(rng, {4, 3}), mw = randn(rng, {4, 3});
    for (int j = 0; j < 3; ++j) mw[1 * 3 + j] = 0.0;   // mw zero at location 1
    for (int j = 0; j < 3; ++j) base[2 * 3 + j] = 0.0;  // base zero at location 2
    MaskPyramid<double> masks;
    masks.tap_names = {"b0"};
    masks.block_masks = {Tensor<double>::full({4}, 1.0)};
    double v = loss_edit(t, synthetic_direction(t, {base}, {"b0"}), synthetic_direction(t, {mw}, {"b0"}), masks)
                   .val()[0];
    // only locations 0 and 3 contribute
    double expect = 0;
    for (int i : {0, 3}) {
        double uu = 0, vv = 0, uv = 0;
        for (int j = 0; j < 3; ++j) {
            uu += base[i * 3 + j] * base[i * 3 + j];
            vv += mw[i * 3 + j] * mw[i * 3 + j];
            uv += base[i * 3 + j] * mw[i * 3 + j];
        }
        expect += 1.0 - uv / std::sqrt(uu * vv);
    }
    CHECK(rel_close(v, expect / 4.0, 1e-9));
}

TEST_CASE("mask pyramid: nearest-neighbor downsampling stays binary") {
    TinyModel<double> m(7);
    Rng rng(8);
    Tensor<double> mask({kImagePixels});
    for (auto& v : mask.data) v = rng.uniform() < 0.3 ? 1.0 : 0.0;
    auto pyr = build_mask_pyramid(m.dn, mask, {"up1.xattn", "up3.xattn"});
    CHECK(pyr.block("up1.xattn").numel() == 64);
    CHECK(pyr.block("up3.xattn").numel() == 1024);
    for (auto v : pyr.block("up1.xattn").data) CHECK((v == 0.0 || v == 1.0));
    // 32x32 level of a 32x32 mask is the mask itself
    CHECK(bits_equal(pyr.block("up3.xattn"), mask));
    CHECK_THROWS(pyr.block("nope"));
}

TEST_CASE("loss_disen: identical features, all-ones mask, face-region invariance") {
    TinyModel<double> m(9);
    Rng rng(10);
    Tensor<double> z = randn(rng, {3, 1024});
    Tensor<double> img({3, 1024});
    rng.fill_uniform(img, 0.0, 1.0);
    CaptionTokens cap = build_caption({.class_word = "person"});
    Tensor<double> f_val;
    {
        Tape<double> t0;
        t0.grad_enabled = false;
        f_val = m.idmap.apply(t0, m.ps, m.psi.patch_tokens(t0, m.ps, t0.constant(img))).val();
    }
    Tensor<double> mask({kImagePixels});
    for (int i = 0; i < kImagePixels; ++i) mask[i] = (i % 7 == 0) ? 1.0 : 0.0;

    Tape<double> t;
    t.grad_enabled = false;
    Var<double> text = m.txt.encode(t, m.ps, cap);
    std::optional<IdCond<double>> id = IdCond<double>{t.constant(f_val), false};
    Var<double> eps_f = m.dn.predict_epsilon(t, m.ps, t.constant(z), 3, text, id, 1.0);

    // f_aug == f: both branches identical, exactly zero
    CHECK(loss_disen(t, m.dn, m.ps, eps_f, t.constant(z), 3, text, f_val, 1.0, mask).val()[0] == 0.0);

    // all-ones mask: empty background region
    Tensor<double> f_aug = f_val;
    for (auto& v : f_aug.data) v += 0.3;
    Tensor<double> ones = Tensor<double>::full({kImagePixels}, 1.0);
    CHECK(loss_disen(t, m.dn, m.ps, eps_f, t.constant(z), 3, text, f_aug, 1.0, ones).val()[0] == 0.0);

    // direct op-level check: perturbing values inside the face region leaves
    // the background norm unchanged
    Tensor<double> d1 = randn(rng, {3, 1024});
    Tensor<double> d2 = d1;
    for (int c = 0; c < 3; ++c)
        for (int p = 0; p < kImagePixels; ++p)
            if (mask[p] == 1.0) d2[(int64_t)c * kImagePixels + p] += rng.normal();
    CHECK(t.masked_background_abs_mean(t.constant(d1), mask).val()[0] ==
          t.masked_background_abs_mean(t.constant(d2), mask).val()[0]);
}

TEST_CASE("loss_edit and loss_disen: finite differences against identity-path parameters") {
    TinyModel<double> m(11);
    for (auto& e : m.ps.entries())
        if (e.name.rfind("psi.", 0) == 0) e.trainable = false;
    Rng rng(12);
    Tensor<double> z = randn(rng, {3, 1024});
    Tensor<double> img({3, 1024});
    rng.fill_uniform(img, 0.0, 1.0);
    Tensor<double> mask({kImagePixels});
    for (int i = 0; i < kImagePixels; ++i) mask[i] = (i / kImageSize > 10 && i / kImageSize < 22) ? 1.0 : 0.0;
    CaptionTokens y = parse_prompt("a photo of a person");
    CaptionTokens y2 = parse_prompt("a photo of a smiling person");
    std::vector<std::string> taps = {"up1.xattn"};
    Tensor<double> f_aug({16, m.cc.d_ctx});
    rng.fill_normal(f_aug);

    auto edit_value = [&]() {
        Tape<double> t;
        t.grad_enabled = false;
        auto base = editing_direction<double>(t, m.dn, m.ps, m.txt, z, 5, y, y2, std::nullopt, 1.0, taps);
        Var<double> f = m.idmap.apply(t, m.ps, m.psi.patch_tokens(t, m.ps, t.constant(img)));
        auto mw = editing_direction<double>(t, m.dn, m.ps, m.txt, z, 5, y, y2, f, 1.0, taps);
        return loss_edit(t, base, mw, build_mask_pyramid(m.dn, mask, taps)).val()[0];
    };
    auto disen_value = [&]() {
        Tape<double> t;
        t.grad_enabled = false;
        Var<double> text = m.txt.encode(t, m.ps, y);
        Var<double> f = m.idmap.apply(t, m.ps, m.psi.patch_tokens(t, m.ps, t.constant(img)));
        std::optional<IdCond<double>> id = IdCond<double>{f, false};
        Var<double> eps_f = m.dn.predict_epsilon(t, m.ps, t.constant(z), 5, text, id, 1.0);
        return loss_disen(t, m.dn, m.ps, eps_f, t.constant(z), 5, text, f_aug, 1.0, mask).val()[0];
    };

    // analytic gradients
    m.ps.zero_grads();
    {
        Tape<double> t;
        t.grad_enabled = false;
        auto base = editing_direction<double>(t, m.dn, m.ps, m.txt, z, 5, y, y2, std::nullopt, 1.0, taps);
        t.grad_enabled = true;
        Var<double> f = m.idmap.apply(t, m.ps, m.psi.patch_tokens(t, m.ps, t.constant(img)));
        auto mw = editing_direction<double>(t, m.dn, m.ps, m.txt, z, 5, y, y2, f, 1.0, taps);
        t.backward(loss_edit(t, base, mw, build_mask_pyramid(m.dn, mask, taps)));
    }
    std::vector<std::pair<std::string, int64_t>> probes = {
        {"unet.up1.xattn.wkf.w", 3}, {"unet.down1.xattn.wvf.w", 11}, {"idmap.in_proj.w", 5}, {"idmap.unit0.wq.w", 2}};
    for (auto& [name, idx] : probes) {
        double analytic = m.ps.at(name).grad[idx];
        double fd = fd_at(m.ps, name, idx, edit_value);
        CAPTURE(name);
        CHECK(rel_close(fd, analytic, 1e-4));
    }

    m.ps.zero_grads();
    {
        Tape<double> t;
        Var<double> text = m.txt.encode(t, m.ps, y);
        Var<double> f = m.idmap.apply(t, m.ps, m.psi.patch_tokens(t, m.ps, t.constant(img)));
        std::optional<IdCond<double>> id = IdCond<double>{f, false};
        Var<double> eps_f = m.dn.predict_epsilon(t, m.ps, t.constant(z), 5, text, id, 1.0);
        t.backward(loss_disen(t, m.dn, m.ps, eps_f, t.constant(z), 5, text, f_aug, 1.0, mask));
    }
    for (auto& [name, idx] : probes) {
        double analytic = m.ps.at(name).grad[idx];
        double fd = fd_at(m.ps, name, idx, disen_value);
        CAPTURE(name);
        CHECK(rel_close(fd, analytic, 1e-4));
    }
}

TEST_CASE("loss_edit: the base branch is a constant target") {
    TinyModel<double> m(13);
    Rng rng(14);
    Tensor<double> z = randn(rng, {3, 1024});
    Tensor<double> img({3, 1024});
    rng.fill_uniform(img, 0.0, 1.0);
    CaptionTokens y = parse_prompt("a photo of a person");
    CaptionTokens y2 = parse_prompt("a photo of a bald person");
    std::vector<std::string> taps = {"up1.xattn"};
    Tensor<double> mask = Tensor<double>::full({kImagePixels}, 1.0);

    // stage-2 trainability: backbone frozen, identity path live
    for (auto& e : m.ps.entries()) e.trainable = false;
    for (auto& e : m.ps.entries())
        if (e.name.rfind("idmap.", 0) == 0 || e.name == "null.id" || e.name.find(".wkf.") != std::string::npos ||
            e.name.find(".wvf.") != std::string::npos)
            e.trainable = true;

    m.ps.zero_grads();
    Tape<double> t;
    t.grad_enabled = false;
    auto base = editing_direction<double>(t, m.dn, m.ps, m.txt, z, 5, y, y2, std::nullopt, 1.0, taps);
    t.grad_enabled = true;
    Var<double> f = m.idmap.apply(t, m.ps, m.psi.patch_tokens(t, m.ps, t.constant(img)));
    auto mw = editing_direction<double>(t, m.dn, m.ps, m.txt, z, 5, y, y2, f, 1.0, taps);
    t.backward(loss_edit(t, base, mw, build_mask_pyramid(m.dn, mask, taps)));

    double id_path_grad = 0;
    for (const auto& e : m.ps.entries()) {
        double s = 0;
        for (auto g : e.grad.data) s += std::abs(g);
        if (e.trainable) id_path_grad += s;
        else CHECK(s == 0.0);  // base-model parameters receive nothing
    }
    CHECK(id_path_grad > 0.0);
}

TEST_CASE("loss_total: weighting, arithmetic, non-finite rejection") {
    Tape<double> t;
    LossWeights w;  // defaults 0.01 / 1.0
    Var<double> rec = t.constant(Tensor<double>::scalar(1.0));
    std::optional<Var<double>> edit = t.constant(Tensor<double>::scalar(2.0));
    std::optional<Var<double>> disen = t.constant(Tensor<double>::scalar(3.0));
    std::optional<Var<double>> none;
    CHECK(loss_total(t, rec, edit, disen, w).val()[0] == doctest::Approx(4.02).epsilon(1e-12));

    LossWeights zero;
    zero.lambda_edit = 0;
    zero.lambda_disen = 0;
    CHECK(loss_total(t, rec, edit, disen, zero).val()[0] == doctest::Approx(1.0));
    CHECK(loss_total(t, rec, none, none, w).val()[0] == doctest::Approx(1.0));

    std::optional<Var<double>> bad = t.constant(Tensor<double>::scalar(std::nan("")));
    CHECK_THROWS_AS(loss_total(t, rec, bad, disen, w), std::runtime_error);
}
