#pragma once

#include "config.hpp"
#include "denoiser.hpp"

namespace idfuse::testutil {

// small double-precision model for gradient checks
template <typename T>
struct TinyModel {
    ParamStore<T> ps;
    CondConfig cc;
    DenoiserConfig dc;
    TextEncoder<T> txt;
    RefEncoder<T> psi;
    IdMapper<T> idmap;
    Denoiser<T> dn;

    explicit TinyModel(uint64_t seed = 7) {
        cc.d_ctx = 32;
        cc.d_psi = 48;
        cc.psi_ids = 8;
        dc.widths = {8, 16, 24};
        dc.d_ctx = 32;
        dc.temb_dim = 16;
        dc.groups = 4;
        Rng rng(seed);
        txt.init(ps, cc, rng);
        psi.init(ps, cc, rng);
        idmap.init(ps, cc, rng);
        dn.init(ps, dc, rng);
    }
};

// small fast RunConfig for smoke-scale end-to-end tests
inline RunConfig tiny_run_config(uint64_t seed = 11) {
    RunConfig c;
    c.seed = seed;
    c.schedule.timesteps = 50;
    c.model.widths = {8, 16, 24};
    c.model.d_ctx = 32;
    c.model.temb_dim = 16;
    c.model.groups = 4;
    c.conditioning.d_ctx = 32;
    c.conditioning.psi_ids = 6;
    c.data.n_identities = 6;
    c.data.samples_per_identity = 2;
    c.data.sim_threshold = 0.0;
    c.data.mix_ratio = 0.5;
    c.data.psi_steps = 20;
    c.data.psi_batch = 4;
    c.data.classifier_steps = 20;
    c.data.classifier_batch = 4;
    c.train.batch_size = 4;
    c.train.stage1 = {6, 1e-3};
    c.train.stage2 = {4, 1e-3};
    c.train.edit_samples = 2;
    c.train.checkpoint_every = 0;
    c.sample.steps = 8;
    c.eval.identities = 3;
    c.eval.refs_per_identity = 2;
    c.eval.attr_prompts_per_identity = 2;
    c.eval.bg_prompts_per_identity = 1;
    return c;
}

// central finite difference of `f` at params[name][index]
template <typename F>
double fd_at(ParamStore<double>& ps, const std::string& name, int64_t index, F f, double h = 1e-5) {
    auto& e = ps.at(name);
    double orig = e.val[index];
    e.val[index] = orig + h;
    double up = f();
    e.val[index] = orig - h;
    double dn = f();
    e.val[index] = orig;
    return (up - dn) / (2 * h);
}

inline bool rel_close(double a, double b, double tol) {
    double denom = std::max({std::abs(a), std::abs(b), 1e-8});
    return std::abs(a - b) / denom < tol;
}

inline bool bytes_equal(const Tensor<float>& a, const Tensor<float>& b) {
    return a.shape == b.shape && std::memcmp(a.ptr(), b.ptr(), sizeof(float) * a.numel()) == 0;
}
template <typename T>
bool bits_equal(const Tensor<T>& a, const Tensor<T>& b) {
    return a.shape == b.shape && std::memcmp(a.ptr(), b.ptr(), sizeof(T) * a.numel()) == 0;
}

}  // namespace idfuse::testutil
