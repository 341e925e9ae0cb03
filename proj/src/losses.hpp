#pragma once

#include "denoiser.hpp"

namespace idfuse {

// ---------------------------------------------------------------------------
// Training objectives: epsilon reconstruction, editing-direction alignment
// against the frozen base model, and background disentanglement under
// identity swaps.
// ---------------------------------------------------------------------------

struct LossWeights {
    double lambda_edit = 0.01;
    double lambda_disen = 1.0;
};

template <typename T>
Var<T> loss_rec(Tape<T>& t, Var<T> eps_hat, const Tensor<T>& eps) {
    return t.mse(eps_hat, t.constant(eps));
}

// face mask downsampled to each tapped block's resolution; nearest neighbor
// then thresholded so levels stay binary
template <typename T>
struct MaskPyramid {
    Tensor<T> image_mask;                         // (H*W) at image resolution
    std::vector<std::string> tap_names;
    std::vector<Tensor<T>> block_masks;           // (H_l*W_l) per tap

    const Tensor<T>& block(const std::string& name) const {
        for (size_t i = 0; i < tap_names.size(); ++i)
            if (tap_names[i] == name) return block_masks[i];
        throw std::out_of_range("mask pyramid has no level for " + name);
    }
};

template <typename T>
Tensor<T> downsample_mask_nearest(const Tensor<T>& mask, int src, int dst) {
    Tensor<T> out({dst * dst});
    double f = (double)src / dst;
    for (int i = 0; i < dst; ++i)
        for (int j = 0; j < dst; ++j) {
            int si = std::min(src - 1, (int)(((double)i + 0.5) * f));
            int sj = std::min(src - 1, (int)(((double)j + 0.5) * f));
            out[i * dst + j] = mask[si * src + sj] >= T(0.5) ? T(1) : T(0);
        }
    return out;
}

template <typename T>
MaskPyramid<T> build_mask_pyramid(const Denoiser<T>& dn, const Tensor<T>& image_mask,
                                  const std::vector<std::string>& tap_names) {
    MaskPyramid<T> p;
    p.image_mask = image_mask;
    p.tap_names = tap_names;
    int src = dn.cfg.image_size;
    for (const auto& n : tap_names) {
        auto bs = dn.block_shape(n);
        p.block_masks.push_back(downsample_mask_nearest(image_mask, src, bs.h));
    }
    return p;
}

// Per-block feature difference between two prompts at the same (z_t, t).
// Provenance travels with the deltas so mismatched pairs are rejected at
// loss time.
template <typename T>
struct EditingDirection {
    CaptionTokens y, y_prime;
    int timestep = 0;
    std::string z_fingerprint;
    std::vector<std::string> tap_names;
    std::vector<Var<T>> deltas;  // (H_l*W_l, D_l), on the originating tape
};

template <typename T>
std::string tensor_fingerprint(const Tensor<T>& t) {
    return sha256_hex(t.ptr(), sizeof(T) * t.numel()).substr(0, 16);
}

// `f` is an in-graph identity feature (or absent for the text-only base
// model), so editing-direction gradients reach the ID mapper as well as the
// identity projections
template <typename T>
EditingDirection<T> editing_direction(Tape<T>& tape, const Denoiser<T>& dn, ParamStore<T>& ps,
                                      const TextEncoder<T>& txt, const Tensor<T>& z_t, int timestep,
                                      const CaptionTokens& y, const CaptionTokens& y_prime,
                                      std::optional<Var<T>> f, T lambda,
                                      const std::vector<std::string>& tap_names) {
    if (tap_names.empty()) throw std::invalid_argument("editing_direction: no taps requested");
    EditingDirection<T> out;
    out.y = y;
    out.y_prime = y_prime;
    out.timestep = timestep;
    out.z_fingerprint = tensor_fingerprint(z_t);
    out.tap_names = tap_names;

    auto run = [&](const CaptionTokens& cap) {
        Var<T> text = txt.encode(tape, ps, cap);
        std::optional<IdCond<T>> id;
        if (f) id = IdCond<T>{*f, false};
        std::vector<FeatureTap<T>> taps;
        Var<T> z = tape.constant(z_t);
        dn.predict_epsilon(tape, ps, z, timestep, text, id, lambda, tap_names, &taps, /*stop_after_taps=*/true);
        return taps;
    };
    auto taps_src = run(y);
    auto taps_tgt = run(y_prime);
    for (size_t i = 0; i < tap_names.size(); ++i)
        out.deltas.push_back(tape.sub(taps_tgt[i].feature, taps_src[i].feature));
    return out;
}

// Identity path of the editing feature: gradients reach the tape through
// delta_mw only; delta_base is data. Per block the per-location masked
// cosine misalignment is averaged over all locations, then blocks are summed.
template <typename T>
Var<T> loss_edit(Tape<T>& t, const EditingDirection<T>& delta_base, const EditingDirection<T>& delta_mw,
                 const MaskPyramid<T>& masks) {
    if (delta_base.y != delta_mw.y || delta_base.y_prime != delta_mw.y_prime)
        throw std::runtime_error("loss_edit: provenance mismatch (prompt pair)");
    if (delta_base.timestep != delta_mw.timestep)
        throw std::runtime_error("loss_edit: provenance mismatch (timestep)");
    if (delta_base.z_fingerprint != delta_mw.z_fingerprint)
        throw std::runtime_error("loss_edit: provenance mismatch (z_t)");
    if (delta_base.tap_names != delta_mw.tap_names)
        throw std::runtime_error("loss_edit: provenance mismatch (taps)");
    Var<T> total;
    for (size_t l = 0; l < delta_mw.deltas.size(); ++l) {
        const Tensor<T>& mask = masks.block(delta_mw.tap_names[l]);
        Var<T> term = t.cosine_align_rows(delta_mw.deltas[l], delta_base.deltas[l].val(), mask);
        total = total.defined() ? t.add(total, term) : term;
    }
    return total;
}

// || (1 - m) . (eps(f) - eps(f_aug)) ||, mean absolute value over background
// elements. eps_f may be a shared forward pass (the reconstruction branch).
template <typename T>
Var<T> loss_disen(Tape<T>& t, const Denoiser<T>& dn, ParamStore<T>& ps, Var<T> eps_f, Var<T> z, int timestep,
                  Var<T> text, const Tensor<T>& f_aug, T lambda, const Tensor<T>& face_mask) {
    std::optional<IdCond<T>> id_aug = IdCond<T>{t.constant(f_aug), false};
    Var<T> eps_aug = dn.predict_epsilon(t, ps, z, timestep, text, id_aug, lambda);
    Var<T> diff = t.sub(eps_f, eps_aug);
    return t.masked_background_abs_mean(diff, face_mask);
}

template <typename T>
Var<T> loss_total(Tape<T>& t, Var<T> rec, std::optional<Var<T>> edit, std::optional<Var<T>> disen,
                  const LossWeights& w) {
    auto finite = [](Var<T> v, const char* name) {
        if (!std::isfinite((double)v.val()[0]))
            throw std::runtime_error(std::string("loss_total: non-finite ") + name + " = " +
                                     std::to_string((double)v.val()[0]));
    };
    finite(rec, "L_rec");
    Var<T> total = rec;
    if (edit) {
        finite(*edit, "L_edit");
        total = t.add(total, t.scale(*edit, (T)w.lambda_edit));
    }
    if (disen) {
        finite(*disen, "L_disen");
        total = t.add(total, t.scale(*disen, (T)w.lambda_disen));
    }
    return total;
}

}  // namespace idfuse
