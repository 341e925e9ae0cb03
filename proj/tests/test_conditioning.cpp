#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "test_util.hpp"

using namespace idfuse;
using namespace idfuse::testutil;

TEST_CASE("vocab: serialization round trip, single class-word rule") {
    const Vocab& v = vocab();
    Vocab parsed = Vocab::parse(v.serialize());
    CHECK(parsed.size() == v.size());
    for (int i = 0; i < v.size(); ++i) CHECK(parsed.word(i) == v.word(i));
    CHECK_THROWS(v.id("automobile"));

    CaptionTokens two_classes = pad_caption({v.id("a"), v.id("man"), v.id("woman")});
    CHECK_THROWS(parse_caption(two_classes));
}

TEST_CASE("encode_text: determinism, null caption, out-of-vocabulary") {
    TinyModel<double> m(3);
    CaptionTokens cap = build_caption({.class_word = "person", .hair_color = HairColor::purple});
    Tape<double> t;
    t.grad_enabled = false;
    Tensor<double> a = m.txt.encode(t, m.ps, cap).val();
    Tensor<double> b = m.txt.encode(t, m.ps, cap).val();
    CHECK(bits_equal(a, b));

    // the null caption maps to the learned null embedding row-for-row
    Tensor<double> n = m.txt.encode(t, m.ps, null_caption()).val();
    CHECK(bits_equal(n, m.ps.at("null.text").val));

    CaptionTokens bad = cap;
    bad[2] = 9999;
    CHECK_THROWS(m.txt.encode(t, m.ps, bad));
}

TEST_CASE("encode_reference: determinism, wrong resolution, zero input") {
    TinyModel<double> m(4);
    Rng rng(5);
    Tensor<double> img({3, kImagePixels});
    rng.fill_uniform(img, 0.0, 1.0);
    Tape<double> t;
    t.grad_enabled = false;
    Tensor<double> p1 = m.psi.patch_tokens(t, m.ps, t.constant(img)).val();
    Tensor<double> p2 = m.psi.patch_tokens(t, m.ps, t.constant(img)).val();
    CHECK(bits_equal(p1, p2));
    CHECK(p1.rows() == 16);
    CHECK(p1.cols() == m.cc.d_psi);

    Tensor<double> wrong({3, 16 * 16});
    CHECK_THROWS(m.psi.patch_tokens(t, m.ps, t.constant(wrong)));

    Tensor<double> zeros({3, kImagePixels});
    Tensor<double> pz = m.psi.patch_tokens(t, m.ps, t.constant(zeros)).val();
    for (auto v : pz.data) CHECK(std::isfinite(v));
}

TEST_CASE("id_map: shape contract and finite-difference gradient") {
    TinyModel<double> m(6);
    Rng rng(7);
    Tensor<double> patches({16, m.cc.d_psi});
    rng.fill_normal(patches);

    auto f_scalar = [&]() {
        Tape<double> t;
        t.grad_enabled = false;
        return t.mean_all(m.idmap.apply(t, m.ps, t.constant(patches))).val()[0];
    };
    {
        Tape<double> t;
        Var<double> f = m.idmap.apply(t, m.ps, t.constant(patches));
        CHECK(f.val().rows() == 16);
        CHECK(f.val().cols() == m.cc.d_ctx);
        for (auto v : f.val().data) CHECK(std::isfinite(v));
        t.backward(t.mean_all(f));
    }
    Rng pick(8);
    const std::string name = "idmap.in_proj.w";
    for (int probe = 0; probe < 4; ++probe) {
        int64_t idx = (int64_t)pick.below((uint64_t)m.ps.at(name).val.numel());
        double analytic = m.ps.at(name).grad[idx];
        double fd = fd_at(m.ps, name, idx, f_scalar);
        CHECK(rel_close(fd, analytic, 1e-4));
    }
}

TEST_CASE("id_map: zeroed residual branches reduce to the input projection") {
    TinyModel<double> m(9);
    for (auto& e : m.ps.entries()) {
        bool residual_out = e.name.rfind("idmap.unit", 0) == 0 &&
                            (e.name.find(".wo.") != std::string::npos || e.name.find(".so.") != std::string::npos ||
                             e.name.find(".ff2.") != std::string::npos);
        if (residual_out) e.val.fill(0.0);
    }
    Rng rng(10);
    Tensor<double> patches({16, m.cc.d_psi});
    rng.fill_normal(patches);
    Tape<double> t;
    t.grad_enabled = false;
    Tensor<double> f = m.idmap.apply(t, m.ps, t.constant(patches)).val();
    Tensor<double> proj = m.idmap.in_proj.apply(t, m.ps, t.constant(patches)).val();
    CHECK(bits_equal(f, proj));
}

TEST_CASE("concat_references: singleton, order, counts, errors") {
    Rng rng(11);
    IdentityFeature<double> a, b;
    a.f = Tensor<double>({4, 8});
    b.f = Tensor<double>({4, 8});
    rng.fill_normal(a.f);
    rng.fill_normal(b.f);

    auto single = concat_references<double>({a});
    CHECK(bits_equal(single.f, a.f));
    CHECK(single.source_count == 1);

    auto ab = concat_references<double>({a, b});
    CHECK(ab.f.rows() == 8);
    CHECK(ab.source_count == 2);
    for (int i = 0; i < 4 * 8; ++i) {
        CHECK(ab.f[i] == a.f[i]);
        CHECK(ab.f[32 + i] == b.f[i]);
    }
    // associative at the feature level
    auto left = concat_references<double>({ab, a});
    auto right = concat_references<double>({a, concat_references<double>({b, a})});
    CHECK(bits_equal(left.f, right.f));

    CHECK_THROWS_AS(concat_references<double>({}), std::invalid_argument);
    IdentityFeature<double> wrong;
    wrong.f = Tensor<double>({4, 6});
    CHECK_THROWS_AS(concat_references<double>({a, wrong}), std::invalid_argument);
}

TEST_CASE("concat_references: duplicated feature leaves fused attention unchanged") {
    TinyModel<double> m(12);
    Rng rng(13);
    Tensor<double> q({10, 8}), tk({5, 8}), tv({5, 8});
    rng.fill_normal(q);
    rng.fill_normal(tk);
    rng.fill_normal(tv);
    IdentityFeature<double> f;
    f.f = Tensor<double>({6, 8});
    rng.fill_normal(f.f);
    auto dup = concat_references<double>({f, f});

    Tape<double> t;
    auto run = [&](const Tensor<double>& idf) {
        return fuse_dual_attention<double>(t, t.constant(q), t.constant(tk), t.constant(tv), t.constant(idf),
                                           t.constant(idf), 1.0)
            .val();
    };
    Tensor<double> once = run(f.f), twice = run(dup.f);
    for (int64_t i = 0; i < once.numel(); ++i) CHECK(std::abs(once[i] - twice[i]) < 1e-5);
}

TEST_CASE("interpolate_identity: endpoints exact, midpoint linear") {
    Rng rng(14);
    IdentityFeature<double> a, b;
    a.f = Tensor<double>({16, 8});
    b.f = Tensor<double>({16, 8});
    rng.fill_normal(a.f);
    rng.fill_normal(b.f);

    CHECK(bits_equal(interpolate_identity(a, b, 0.0).f, a.f));
    CHECK(bits_equal(interpolate_identity(a, b, 1.0).f, b.f));

    auto q1 = interpolate_identity(a, b, 0.25), q3 = interpolate_identity(a, b, 0.75);
    auto mid = interpolate_identity(a, b, 0.5);
    for (int64_t i = 0; i < mid.f.numel(); ++i)
        CHECK(rel_close(q1.f[i] + q3.f[i], 2.0 * mid.f[i], 1e-9));

    IdentityFeature<double> wrong;
    wrong.f = Tensor<double>({4, 8});
    CHECK_THROWS_AS(interpolate_identity(a, wrong, 0.5), std::invalid_argument);
}

TEST_CASE("psi_embedding: unit norm and self-cosine of 1") {
    TinyModel<float> m(15);
    Rng rng(16);
    Tensor<float> img({3, kImagePixels});
    rng.fill_uniform(img, 0.0, 1.0);
    Tensor<float> e = psi_embedding(m.psi, m.ps, img);
    double norm = 0;
    for (auto v : e.data) norm += (double)v * v;
    CHECK(std::abs(norm - 1.0) < 1e-5);
    CHECK(cosine(e, e) == doctest::Approx(1.0).epsilon(1e-6));
}
