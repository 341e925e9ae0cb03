#pragma once

#include "nn.hpp"
#include "vocab.hpp"

namespace idfuse {

// ---------------------------------------------------------------------------
// Conditioning stack:
//   TextEncoder   tau:  caption tokens -> (L, d_ctx), trained with the base
//                 model in stage 1, frozen afterwards. The null caption maps
//                 to a dedicated learned embedding (the CFG null).
//   RefEncoder    psi:  masked 32x32 reference -> 16 patch tokens (4x4, 128d)
//                 from the layer before the classification head. Pretrained
//                 as an identity classifier, then the trunk is frozen.
//   IdMapper      M:    patch tokens -> identity feature f (16 x d_ctx).
// ---------------------------------------------------------------------------

struct CondConfig {
    int d_ctx = 64;        // token dim fed to denoiser cross-attention
    int text_len = kCaptionLen;
    int n_id_tokens = 16;  // N_single
    int d_psi = 128;
    int psi_ids = 1000;    // identity classes for pretraining
};

template <typename T>
struct TransformerBlock {
    LayerNorm<T> ln_attn, ln_ff;
    Linear<T> wq, wk, wv, wo, ff1, ff2;

    void init(ParamStore<T>& ps, const std::string& p, int d, Rng& rng) {
        ln_attn.init(ps, p + ".ln_attn", d);
        ln_ff.init(ps, p + ".ln_ff", d);
        wq.init(ps, p + ".wq", d, d, rng, false);
        wk.init(ps, p + ".wk", d, d, rng, false);
        wv.init(ps, p + ".wv", d, d, rng, false);
        wo.init(ps, p + ".wo", d, d, rng, true, 0.1);
        ff1.init(ps, p + ".ff1", d, 2 * d, rng);
        ff2.init(ps, p + ".ff2", 2 * d, d, rng, true, 0.1);
    }

    Var<T> apply(Tape<T>& t, ParamStore<T>& ps, Var<T> x) const {
        Var<T> h = ln_attn.apply(t, ps, x);
        Var<T> att = attention(t, wq.apply(t, ps, h), wk.apply(t, ps, h), wv.apply(t, ps, h));
        x = t.add(x, wo.apply(t, ps, att));
        Var<T> f = ln_ff.apply(t, ps, x);
        f = ff2.apply(t, ps, t.silu(ff1.apply(t, ps, f)));
        return t.add(x, f);
    }
};

template <typename T>
struct TextEncoder {
    CondConfig cfg;
    int tok_emb = -1, pos_emb = -1, null_emb = -1;
    TransformerBlock<T> block0, block1;
    LayerNorm<T> ln_out;

    void init(ParamStore<T>& ps, const CondConfig& c, Rng& rng) {
        cfg = c;
        Tensor<T> te({vocab().size(), c.d_ctx});
        rng.fill_normal(te, 0.02);
        tok_emb = ps.add("txt.tok_emb", std::move(te));
        Tensor<T> pe({c.text_len, c.d_ctx});
        rng.fill_normal(pe, 0.02);
        pos_emb = ps.add("txt.pos_emb", std::move(pe));
        Tensor<T> ne({c.text_len, c.d_ctx});
        rng.fill_normal(ne, 0.02);
        null_emb = ps.add("null.text", std::move(ne));
        block0.init(ps, "txt.block0", c.d_ctx, rng);
        block1.init(ps, "txt.block1", c.d_ctx, rng);
        ln_out.init(ps, "txt.ln_out", c.d_ctx);
    }

    // (L, d_ctx); null caption returns the learned null embedding directly
    Var<T> encode(Tape<T>& t, ParamStore<T>& ps, const CaptionTokens& c) const {
        if ((int)c.size() != cfg.text_len) throw std::invalid_argument("encode_text: caption length");
        if (is_null_caption(c)) return ps.use(t, null_emb);
        for (int id : c) (void)vocab().word(id);  // validates ids
        Var<T> x = t.gather_rows(ps.use(t, tok_emb), c);
        x = t.add(x, ps.use(t, pos_emb));
        x = block0.apply(t, ps, x);
        x = block1.apply(t, ps, x);
        return ln_out.apply(t, ps, x);
    }

    Var<T> null_embedding(Tape<T>& t, ParamStore<T>& ps) const { return ps.use(t, null_emb); }
};

template <typename T>
struct RefEncoder {
    CondConfig cfg;
    Conv2d<T> conv1, conv2, conv3, conv4;
    GroupNorm<T> gn1, gn2, gn3;
    Linear<T> head;  // identity-classification head, used in pretraining only

    void init(ParamStore<T>& ps, const CondConfig& c, Rng& rng) {
        cfg = c;
        conv1.init(ps, "psi.conv1", 3, 32, 3, 2, rng);
        gn1.init(ps, "psi.gn1", 32, 8);
        conv2.init(ps, "psi.conv2", 32, 64, 3, 2, rng);
        gn2.init(ps, "psi.gn2", 64, 8);
        conv3.init(ps, "psi.conv3", 64, c.d_psi, 3, 2, rng);
        gn3.init(ps, "psi.gn3", c.d_psi, 8);
        conv4.init(ps, "psi.conv4", c.d_psi, c.d_psi, 3, 1, rng);
        head.init(ps, "psi.head", c.d_psi, c.psi_ids, rng);
    }

    // masked reference image (3, 32*32) -> patch tokens (16, d_psi)
    Var<T> patch_tokens(Tape<T>& t, ParamStore<T>& ps, Var<T> image) const {
        if (image.val().rows() != 3 || image.val().cols() != kImagePixels)
            throw std::invalid_argument("encode_reference: expected 3x" + std::to_string(kImagePixels) +
                                        " image, got " + shape_str(image.shape()));
        Var<T> h = t.silu(gn1.apply(t, ps, conv1.apply(t, ps, image, 32, 32)));
        h = t.silu(gn2.apply(t, ps, conv2.apply(t, ps, h, 16, 16)));
        h = t.silu(gn3.apply(t, ps, conv3.apply(t, ps, h, 8, 8)));
        h = conv4.apply(t, ps, h, 4, 4);   // (d_psi, 16)
        return t.transpose(h);             // (16, d_psi)
    }

    // mean patch token, used for identity similarity and pretraining head
    Var<T> pooled(Tape<T>& t, ParamStore<T>& ps, Var<T> image) const {
        Var<T> tok = patch_tokens(t, ps, image);
        Tensor<T> w({1, tok.val().rows()});
        w.fill(T(1) / (T)tok.val().rows());
        return t.matmul(t.constant(std::move(w)), tok);  // (1, d_psi)
    }

    Var<T> logits(Tape<T>& t, ParamStore<T>& ps, Var<T> image) const {
        return head.apply(t, ps, pooled(t, ps, image));
    }
};

// unit-normalized psi embedding of a masked image, as plain data
template <typename T>
Tensor<T> psi_embedding(const RefEncoder<T>& psi, ParamStore<T>& ps, const Tensor<T>& masked_image) {
    Tape<T> t;
    t.grad_enabled = false;
    Var<T> e = psi.pooled(t, ps, t.constant(masked_image));
    Tensor<T> out = e.val();
    double n = 0;
    for (const T& v : out.data) n += (double)v * (double)v;
    n = std::sqrt(std::max(n, 1e-30));
    for (T& v : out.data) v = (T)((double)v / n);
    return out;
}

template <typename T>
double cosine(const Tensor<T>& a, const Tensor<T>& b) {
    if (!a.same_shape(b)) throw std::invalid_argument("cosine: shape mismatch");
    double ab = 0, aa = 0, bb = 0;
    for (int64_t i = 0; i < a.numel(); ++i) {
        ab += (double)a[i] * (double)b[i];
        aa += (double)a[i] * (double)a[i];
        bb += (double)b[i] * (double)b[i];
    }
    if (aa == 0 || bb == 0) return 0;
    return ab / (std::sqrt(aa) * std::sqrt(bb));
}

// ---------------------------------------------------------------------------
// ID mapper: input projection of patch tokens followed by two units of
// (cross-attention to patch tokens, feed-forward, self-attention), all
// residual. With every residual branch zeroed the output reduces to the
// input projection.
// ---------------------------------------------------------------------------
template <typename T>
struct IdMapperUnit {
    LayerNorm<T> ln_x, ln_ff, ln_s;
    Linear<T> wq, wk, wv, wo, ff1, ff2, sq, sk, sv, so;

    void init(ParamStore<T>& ps, const std::string& p, int d, int d_kv, Rng& rng) {
        ln_x.init(ps, p + ".ln_x", d);
        ln_ff.init(ps, p + ".ln_ff", d);
        ln_s.init(ps, p + ".ln_s", d);
        wq.init(ps, p + ".wq", d, d, rng, false);
        wk.init(ps, p + ".wk", d_kv, d, rng, false);
        wv.init(ps, p + ".wv", d_kv, d, rng, false);
        wo.init(ps, p + ".wo", d, d, rng, true, 0.1);
        ff1.init(ps, p + ".ff1", d, 2 * d, rng);
        ff2.init(ps, p + ".ff2", 2 * d, d, rng, true, 0.1);
        sq.init(ps, p + ".sq", d, d, rng, false);
        sk.init(ps, p + ".sk", d, d, rng, false);
        sv.init(ps, p + ".sv", d, d, rng, false);
        so.init(ps, p + ".so", d, d, rng, true, 0.1);
    }

    Var<T> apply(Tape<T>& t, ParamStore<T>& ps, Var<T> x, Var<T> patches) const {
        Var<T> h = ln_x.apply(t, ps, x);
        Var<T> att = attention(t, wq.apply(t, ps, h), wk.apply(t, ps, patches), wv.apply(t, ps, patches));
        x = t.add(x, wo.apply(t, ps, att));
        Var<T> f = ln_ff.apply(t, ps, x);
        x = t.add(x, ff2.apply(t, ps, t.silu(ff1.apply(t, ps, f))));
        Var<T> s = ln_s.apply(t, ps, x);
        Var<T> satt = attention(t, sq.apply(t, ps, s), sk.apply(t, ps, s), sv.apply(t, ps, s));
        return t.add(x, so.apply(t, ps, satt));
    }
};

template <typename T>
struct IdMapper {
    CondConfig cfg;
    Linear<T> in_proj;
    IdMapperUnit<T> unit0, unit1;

    void init(ParamStore<T>& ps, const CondConfig& c, Rng& rng) {
        cfg = c;
        in_proj.init(ps, "idmap.in_proj", c.d_psi, c.d_ctx, rng);
        unit0.init(ps, "idmap.unit0", c.d_ctx, c.d_psi, rng);
        unit1.init(ps, "idmap.unit1", c.d_ctx, c.d_psi, rng);
    }

    // patch tokens (N, d_psi) -> identity feature (N, d_ctx)
    Var<T> apply(Tape<T>& t, ParamStore<T>& ps, Var<T> patches) const {
        Var<T> x = in_proj.apply(t, ps, patches);
        x = unit0.apply(t, ps, x, patches);
        return unit1.apply(t, ps, x, patches);
    }
};

// ---------------------------------------------------------------------------
// Identity feature values (outside any tape): multi-reference concatenation
// along the token dimension and identity interpolation.
// ---------------------------------------------------------------------------

template <typename T>
struct IdentityFeature {
    Tensor<T> f;          // (N, d)
    int source_count = 1;
};

template <typename T>
IdentityFeature<T> concat_references(const std::vector<IdentityFeature<T>>& features) {
    if (features.empty()) throw std::invalid_argument("concat_references: empty list");
    int d = features[0].f.cols();
    int n = 0, sc = 0;
    for (const auto& fe : features) {
        if (fe.f.cols() != d) throw std::invalid_argument("concat_references: feature dim mismatch");
        n += fe.f.rows();
        sc += fe.source_count;
    }
    IdentityFeature<T> out;
    out.f = Tensor<T>({n, d});
    out.source_count = sc;
    int64_t off = 0;
    for (const auto& fe : features) {
        std::memcpy(out.f.ptr() + off, fe.f.ptr(), sizeof(T) * fe.f.numel());
        off += fe.f.numel();
    }
    return out;
}

template <typename T>
IdentityFeature<T> interpolate_identity(const IdentityFeature<T>& a, const IdentityFeature<T>& b, double alpha) {
    if (!a.f.same_shape(b.f)) throw std::invalid_argument("interpolate_identity: shape mismatch");
    if (alpha == 0.0) return a;
    if (alpha == 1.0) return b;
    IdentityFeature<T> out = a;
    for (int64_t i = 0; i < out.f.numel(); ++i)
        out.f[i] = (T)((1.0 - alpha) * (double)a.f[i] + alpha * (double)b.f[i]);
    return out;
}

}  // namespace idfuse
