#pragma once

#include "conditioning.hpp"

namespace idfuse {

// ---------------------------------------------------------------------------
// Toy epsilon-prediction UNet, pixel space, three resolutions (32/16/8).
// Every resolution has one text cross-attention block in the encoder and
// decoder plus one in the mid block; each cross-attention block carries an
// extra identity key/value projection pair and fuses the two attention
// outputs as  text_attn + lambda * id_attn.
//
// Decoder stages are named up1 (8x8, the first decoder stage) through up3
// (32x32). Attention blocks are addressable by name as feature taps; the
// captured feature is the fused attention output before the block's output
// projection and residual add.
// ---------------------------------------------------------------------------

struct DenoiserConfig {
    int image_size = 32;
    int in_channels = 3;
    std::vector<int> widths = {16, 32, 64};  // at 32, 16, 8
    int d_ctx = 64;
    int temb_dim = 64;
    int groups = 8;
    int n_id_tokens = 16;
};

// identity condition handed to the denoiser; detach_projections runs the
// identity path through value-only projection weights (used when the
// identity condition is dropped, so the projections receive no gradient
// while the learned null tokens still do)
template <typename T>
struct IdCond {
    Var<T> tokens;
    bool detach_projections = false;
};

template <typename T>
struct FeatureTap {
    std::string block_name;
    Var<T> feature;  // (H*W, D) fused attention output
    int h = 0, w = 0, d = 0;
};

// Attention(Q,K,V) + lambda * Attention(Q,K_f,V_f); absent identity or
// lambda == 0 returns the text attention bit-exactly.
template <typename T>
Var<T> fuse_dual_attention(Tape<T>& t, Var<T> q, Var<T> text_k, Var<T> text_v, std::optional<Var<T>> id_k,
                           std::optional<Var<T>> id_v, T lambda) {
    Var<T> text_att = attention(t, q, text_k, text_v);
    if (!id_k || lambda == T(0)) return text_att;
    Var<T> id_att = attention(t, q, *id_k, *id_v);
    return t.add(text_att, lambda == T(1) ? id_att : t.scale(id_att, lambda));
}

template <typename T>
struct CrossAttnBlock {
    GroupNorm<T> gn;
    Linear<T> wq, wk, wv, wo;
    int wkf = -1, wvf = -1;  // identity-path projections (d_ctx -> C)
    int channels = 0, d_ctx = 0;

    void init(ParamStore<T>& ps, const std::string& p, int c, int d_ctx_, int groups, Rng& rng) {
        channels = c;
        d_ctx = d_ctx_;
        gn.init(ps, p + ".gn", c, groups);
        wq.init(ps, p + ".wq", c, c, rng, false);
        wk.init(ps, p + ".wk", d_ctx_, c, rng, false);
        wv.init(ps, p + ".wv", d_ctx_, c, rng, false);
        // identity projections start as copies of the text projections
        Tensor<T> kf = ps.at(p + ".wk.w").val;
        Tensor<T> vf = ps.at(p + ".wv.w").val;
        wkf = ps.add(p + ".wkf.w", std::move(kf));
        wvf = ps.add(p + ".wvf.w", std::move(vf));
        wo.init(ps, p + ".wo", c, c, rng, true, 0.1);
    }

    // x: (C, S); text: (L, d_ctx); returns x + residual attention update
    Var<T> apply(Tape<T>& t, ParamStore<T>& ps, Var<T> x, int S, Var<T> text, const std::optional<IdCond<T>>& id,
                 T lambda, Var<T>* tap_out) const {
        Var<T> xt = t.transpose(gn.apply(t, ps, x));  // (S, C)
        Var<T> q = wq.apply(t, ps, xt);
        Var<T> tk = wk.apply(t, ps, text);
        Var<T> tv = wv.apply(t, ps, text);
        std::optional<Var<T>> ik, iv;
        if (id) {
            Var<T> pk = id->detach_projections ? ps.use_frozen(t, wkf) : ps.use(t, wkf);
            Var<T> pv = id->detach_projections ? ps.use_frozen(t, wvf) : ps.use(t, wvf);
            ik = t.matmul(id->tokens, pk, false, true);
            iv = t.matmul(id->tokens, pv, false, true);
        }
        Var<T> fused = fuse_dual_attention(t, q, tk, tv, ik, iv, lambda);
        if (tap_out) *tap_out = fused;
        Var<T> out = wo.apply(t, ps, fused);
        return t.add(x, t.transpose(out));
    }
};

template <typename T>
struct SelfAttnBlock {
    GroupNorm<T> gn;
    Linear<T> wq, wk, wv, wo;

    void init(ParamStore<T>& ps, const std::string& p, int c, int groups, Rng& rng) {
        gn.init(ps, p + ".gn", c, groups);
        wq.init(ps, p + ".wq", c, c, rng, false);
        wk.init(ps, p + ".wk", c, c, rng, false);
        wv.init(ps, p + ".wv", c, c, rng, false);
        wo.init(ps, p + ".wo", c, c, rng, true, 0.1);
    }

    Var<T> apply(Tape<T>& t, ParamStore<T>& ps, Var<T> x, Var<T>* tap_out) const {
        Var<T> xt = t.transpose(gn.apply(t, ps, x));
        Var<T> att =
            attention(t, wq.apply(t, ps, xt), wk.apply(t, ps, xt), wv.apply(t, ps, xt));
        if (tap_out) *tap_out = att;
        return t.add(x, t.transpose(wo.apply(t, ps, att)));
    }
};

template <typename T>
struct ResBlock {
    GroupNorm<T> gn1, gn2;
    Conv2d<T> conv1, conv2;
    Linear<T> temb_proj;
    Conv2d<T> skip;
    bool has_skip = false;

    void init(ParamStore<T>& ps, const std::string& p, int cin, int cout, int temb_dim, int groups, Rng& rng) {
        gn1.init(ps, p + ".gn1", cin, groups);
        conv1.init(ps, p + ".conv1", cin, cout, 3, 1, rng);
        temb_proj.init(ps, p + ".temb", temb_dim, cout, rng);
        gn2.init(ps, p + ".gn2", cout, groups);
        conv2.init(ps, p + ".conv2", cout, cout, 3, 1, rng, 0.1);
        if (cin != cout) {
            has_skip = true;
            skip.init(ps, p + ".skip", cin, cout, 1, 1, rng);
        }
    }

    Var<T> apply(Tape<T>& t, ParamStore<T>& ps, Var<T> x, int H, int W, Var<T> temb) const {
        Var<T> h = conv1.apply(t, ps, t.silu(gn1.apply(t, ps, x)), H, W);
        Var<T> tp = t.transpose(temb_proj.apply(t, ps, temb));  // (C, 1)
        h = t.add_rowwise(h, tp);
        h = conv2.apply(t, ps, t.silu(gn2.apply(t, ps, h)), H, W);
        Var<T> sk = has_skip ? skip.apply(t, ps, x, H, W) : x;
        return t.add(h, sk);
    }
};

template <typename T>
class Denoiser {
  public:
    DenoiserConfig cfg;

    void init(ParamStore<T>& ps, const DenoiserConfig& c, Rng& rng) {
        cfg = c;
        const int w0 = c.widths[0], w1 = c.widths[1], w2 = c.widths[2];
        temb1_.init(ps, "unet.temb1", c.temb_dim, c.temb_dim, rng);
        temb2_.init(ps, "unet.temb2", c.temb_dim, c.temb_dim, rng);
        stem_.init(ps, "unet.stem", c.in_channels, w0, 3, 1, rng);
        down1_res_.init(ps, "unet.down1.res", w0, w0, c.temb_dim, c.groups, rng);
        down1_x_.init(ps, "unet.down1.xattn", w0, c.d_ctx, c.groups, rng);
        pool1_.init(ps, "unet.down1.pool", w0, w1, 3, 2, rng);
        down2_res_.init(ps, "unet.down2.res", w1, w1, c.temb_dim, c.groups, rng);
        down2_x_.init(ps, "unet.down2.xattn", w1, c.d_ctx, c.groups, rng);
        pool2_.init(ps, "unet.down2.pool", w1, w2, 3, 2, rng);
        down3_res_.init(ps, "unet.down3.res", w2, w2, c.temb_dim, c.groups, rng);
        down3_x_.init(ps, "unet.down3.xattn", w2, c.d_ctx, c.groups, rng);
        mid_res_.init(ps, "unet.mid.res", w2, w2, c.temb_dim, c.groups, rng);
        mid_s_.init(ps, "unet.mid.sattn", w2, c.groups, rng);
        mid_x_.init(ps, "unet.mid.xattn", w2, c.d_ctx, c.groups, rng);
        up1_res_.init(ps, "unet.up1.res", w2 * 2, w2, c.temb_dim, c.groups, rng);
        up1_x_.init(ps, "unet.up1.xattn", w2, c.d_ctx, c.groups, rng);
        up1_conv_.init(ps, "unet.up1.up", w2, w1, 3, 1, rng);
        up2_res_.init(ps, "unet.up2.res", w1 * 2, w1, c.temb_dim, c.groups, rng);
        up2_x_.init(ps, "unet.up2.xattn", w1, c.d_ctx, c.groups, rng);
        up2_conv_.init(ps, "unet.up2.up", w1, w0, 3, 1, rng);
        up3_res_.init(ps, "unet.up3.res", w0 * 2, w0, c.temb_dim, c.groups, rng);
        up3_x_.init(ps, "unet.up3.xattn", w0, c.d_ctx, c.groups, rng);
        head_gn_.init(ps, "unet.head.gn", w0, c.groups);
        head_conv_.init(ps, "unet.head.conv", w0, c.in_channels, 3, 1, rng, 0.1);
        null_id_ = ps.add("null.id", [&] {
            Tensor<T> n({c.n_id_tokens, c.d_ctx});
            rng.fill_normal(n, 0.02);
            return n;
        }());
    }

    int null_id_param() const { return null_id_; }

    // ordered attention-block names; cross-attention blocks of a decoder
    // stage can be selected with the stage prefix (up1 -> up1.xattn)
    static const std::vector<std::string>& attention_block_names() {
        static const std::vector<std::string> n = {"down1.xattn", "down2.xattn", "down3.xattn", "mid.sattn",
                                                   "mid.xattn",   "up1.xattn",   "up2.xattn",   "up3.xattn"};
        return n;
    }
    struct BlockShape { int h, w, d; };
    BlockShape block_shape(const std::string& name) const {
        const int w0 = cfg.widths[0], w1 = cfg.widths[1], w2 = cfg.widths[2];
        if (name == "down1.xattn") return {32, 32, w0};
        if (name == "down2.xattn") return {16, 16, w1};
        if (name == "down3.xattn" || name == "mid.sattn" || name == "mid.xattn" || name == "up1.xattn")
            return {8, 8, w2};
        if (name == "up2.xattn") return {16, 16, w1};
        if (name == "up3.xattn") return {32, 32, w0};
        throw std::out_of_range("unknown attention block: " + name);
    }

    // eps prediction. text is required (real or null embedding); id is
    // optional: absent id reproduces the text-only base model exactly.
    Var<T> predict_epsilon(Tape<T>& t, ParamStore<T>& ps, Var<T> z, int timestep, Var<T> text,
                           const std::optional<IdCond<T>>& id, T lambda,
                           const std::vector<std::string>& tap_names = {},
                           std::vector<FeatureTap<T>>* taps = nullptr, bool stop_after_taps = false) const {
        for (const auto& n : tap_names) (void)block_shape(n);  // unknown-tap-name check up front
        if (taps) taps->clear();
        auto want = [&](const std::string& n) {
            return std::find(tap_names.begin(), tap_names.end(), n) != tap_names.end();
        };
        auto grab = [&](const std::string& n, Var<T> feat) {
            if (taps && want(n)) {
                auto bs = block_shape(n);
                taps->push_back({n, feat, bs.h, bs.w, bs.d});
            }
        };
        // done() lets editing-direction forwards stop once the deepest
        // requested tap has been captured
        int wanted = (int)tap_names.size();
        auto done = [&]() { return stop_after_taps && taps && (int)taps->size() == wanted; };
        // captures happen in execution order; hand them back in request order
        auto reorder = [&]() {
            if (!taps) return;
            std::vector<FeatureTap<T>> ordered;
            for (const auto& n : tap_names)
                for (auto& ft : *taps)
                    if (ft.block_name == n) ordered.push_back(ft);
            *taps = std::move(ordered);
        };

        Var<T> temb = timestep_embedding(t, timestep);
        temb = temb2_.apply(t, ps, t.silu(temb1_.apply(t, ps, temb)));
        temb = t.silu(temb);

        const int S32 = 32 * 32, S16 = 16 * 16, S8 = 8 * 8;
        Var<T> tap;
        Var<T> x = stem_.apply(t, ps, z, 32, 32);
        x = down1_res_.apply(t, ps, x, 32, 32, temb);
        x = down1_x_.apply(t, ps, x, S32, text, id, lambda, want("down1.xattn") ? &tap : nullptr);
        grab("down1.xattn", tap);
        Var<T> skip1 = x;
        x = pool1_.apply(t, ps, x, 32, 32);
        x = down2_res_.apply(t, ps, x, 16, 16, temb);
        x = down2_x_.apply(t, ps, x, S16, text, id, lambda, want("down2.xattn") ? &tap : nullptr);
        grab("down2.xattn", tap);
        Var<T> skip2 = x;
        x = pool2_.apply(t, ps, x, 16, 16);
        x = down3_res_.apply(t, ps, x, 8, 8, temb);
        x = down3_x_.apply(t, ps, x, S8, text, id, lambda, want("down3.xattn") ? &tap : nullptr);
        grab("down3.xattn", tap);
        Var<T> skip3 = x;
        x = mid_res_.apply(t, ps, x, 8, 8, temb);
        x = mid_s_.apply(t, ps, x, want("mid.sattn") ? &tap : nullptr);
        grab("mid.sattn", tap);
        x = mid_x_.apply(t, ps, x, S8, text, id, lambda, want("mid.xattn") ? &tap : nullptr);
        grab("mid.xattn", tap);
        if (done()) { reorder(); return x; }

        x = t.concat_rows(x, skip3);
        x = up1_res_.apply(t, ps, x, 8, 8, temb);
        x = up1_x_.apply(t, ps, x, S8, text, id, lambda, want("up1.xattn") ? &tap : nullptr);
        grab("up1.xattn", tap);
        if (done()) { reorder(); return x; }
        x = up1_conv_.apply(t, ps, t.upsample2x(x, 8, 8), 16, 16);

        x = t.concat_rows(x, skip2);
        x = up2_res_.apply(t, ps, x, 16, 16, temb);
        x = up2_x_.apply(t, ps, x, S16, text, id, lambda, want("up2.xattn") ? &tap : nullptr);
        grab("up2.xattn", tap);
        if (done()) { reorder(); return x; }
        x = up2_conv_.apply(t, ps, t.upsample2x(x, 16, 16), 32, 32);

        x = t.concat_rows(x, skip1);
        x = up3_res_.apply(t, ps, x, 32, 32, temb);
        x = up3_x_.apply(t, ps, x, S32, text, id, lambda, want("up3.xattn") ? &tap : nullptr);
        grab("up3.xattn", tap);
        reorder();

        return head_conv_.apply(t, ps, t.silu(head_gn_.apply(t, ps, x)), 32, 32);
    }

    // learned null identity tokens as a condition; projections detached so
    // dropped-identity steps put zero gradient on the W_K^f / W_V^f pairs
    IdCond<T> null_id_cond(Tape<T>& t, ParamStore<T>& ps) const {
        return IdCond<T>{ps.use(t, null_id_), true};
    }

    Var<T> timestep_embedding(Tape<T>& t, int timestep) const {
        int d = cfg.temb_dim, half = d / 2;
        Tensor<T> e({1, d});
        for (int i = 0; i < half; ++i) {
            double freq = std::exp(-std::log(10000.0) * (double)i / (double)half);
            e[i] = (T)std::sin((double)timestep * freq);
            e[half + i] = (T)std::cos((double)timestep * freq);
        }
        return t.constant(std::move(e));
    }

  private:
    Linear<T> temb1_, temb2_;
    Conv2d<T> stem_;
    ResBlock<T> down1_res_, down2_res_, down3_res_, mid_res_, up1_res_, up2_res_, up3_res_;
    CrossAttnBlock<T> down1_x_, down2_x_, down3_x_, mid_x_, up1_x_, up2_x_, up3_x_;
    SelfAttnBlock<T> mid_s_;
    Conv2d<T> pool1_, pool2_, up1_conv_, up2_conv_;
    GroupNorm<T> head_gn_;
    Conv2d<T> head_conv_;
    int null_id_ = -1;
};

// expands a tap selector to cross-attention block names: a stage prefix like
// "up1" selects that stage's cross-attention blocks; full names pass through
template <typename T>
std::vector<std::string> resolve_taps(const Denoiser<T>& dn, const std::vector<std::string>& selectors) {
    std::vector<std::string> out;
    for (const auto& s : selectors) {
        bool matched = false;
        for (const auto& n : Denoiser<T>::attention_block_names()) {
            if (n == s || (n.rfind(s + ".", 0) == 0 && n.find(".xattn") != std::string::npos)) {
                out.push_back(n);
                matched = true;
            }
        }
        if (!matched) throw std::out_of_range("unknown tap selector: " + s);
    }
    return out;
}

}  // namespace idfuse
