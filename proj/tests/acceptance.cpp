// Acceptance suite: one pass/fail line per criterion.
//
// Criteria 1-2 are self-contained (mechanism invariants and the float64
// gradient oracle). Criteria 3-6 evaluate the trained toy pipeline; the
// suite drives the CLI to build any missing artifact under the artifacts
// directory (IDFUSE_ACCEPT_DIR, default <repo>/acceptance_artifacts), so the
// first run performs the full two-stage training plus the three ablation
// variants. Criteria 7-8 run smoke-scale end-to-end determinism and dataset
// contract checks.

#include <chrono>
#include <cstdlib>
#include <filesystem>

#include "evalkit.hpp"
#include "pngio.hpp"
#include "test_util.hpp"

using namespace idfuse;
using namespace idfuse::testutil;
namespace fs = std::filesystem;

namespace {

int g_failures = 0;
std::vector<std::string> g_lines;

void report(int criterion, bool pass, const std::string& what, const std::string& detail) {
    char buf[512];
    std::snprintf(buf, sizeof(buf), "[%s] criterion %d: %s  (%s)", pass ? "PASS" : "FAIL", criterion, what.c_str(),
                  detail.c_str());
    printf("%s\n", buf);
    fflush(stdout);
    g_lines.push_back(buf);
    if (!pass) ++g_failures;
}

double seconds_since(std::chrono::steady_clock::time_point t0) {
    return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

struct Check {
    bool ok = true;
    std::string detail;
    void expect(bool cond, const std::string& what) {
        if (!cond) {
            ok = false;
            if (!detail.empty()) detail += "; ";
            detail += what;
        }
    }
};

std::string artifacts_dir() {
    const char* env = std::getenv("IDFUSE_ACCEPT_DIR");
    if (env && *env) return env;
    return std::string(IDFUSE_REPO_DIR) + "/acceptance_artifacts";
}

int run_cli(const std::string& args, const std::string& log_name) {
    std::string dir = artifacts_dir();
    fs::create_directories(dir + "/logs");
    std::string cmd = std::string(IDFUSE_BIN) + " " + args + " >> " + dir + "/logs/" + log_name + " 2>&1";
    int rc = std::system(cmd.c_str());
    return WIFEXITED(rc) ? WEXITSTATUS(rc) : -1;
}

// the frozen toy-scale acceptance configuration (thresholds included)
json acceptance_config(const std::string& out_dir) {
    return json{
        {"schema_version", 1},
        {"seed", 2024},
        {"out_dir", out_dir},
        {"schedule", {{"timesteps", 1000}, {"beta_min", 1e-4}, {"beta_max", 0.02}}},
        {"model", {{"widths", {16, 32, 64}}, {"d_ctx", 64}, {"temb_dim", 64}, {"groups", 8}}},
        {"data",
         {{"n_identities", 1000},
          {"samples_per_identity", 5},
          {"sim_threshold", 0.8},
          {"mix_ratio", 0.36},
          {"psi_steps", 3000},
          {"psi_batch", 64},
          {"classifier_steps", 3000},
          {"classifier_batch", 64}}},
        {"train",
         {{"batch_size", 16},
          {"stage1", {{"iterations", 20000}, {"lr", 1e-4}}},
          {"stage2", {{"iterations", 4000}, {"lr", 1e-4}}},
          {"lambda_edit", 0.01},
          {"lambda_disen", 1.0},
          {"edit_samples", 4},
          {"checkpoint_every", 5000}}},
        {"sample", {{"steps", 50}, {"scale", 5.0}, {"lambda", 1.0}, {"sampler", "ddim"}}},
        {"eval",
         {{"identities", 16},
          {"refs_per_identity", 4},
          {"attr_prompts_per_identity", 4},
          {"bg_prompts_per_identity", 2},
          {"seed", 500},
          {"attr_success_min", 0.6},
          {"id_gap_min", 0.15}}},
    };
}

json smoke_determinism_config(const std::string& out_dir, uint64_t seed) {
    json j = acceptance_config(out_dir);
    j["seed"] = seed;
    j["data"]["n_identities"] = 24;
    j["data"]["samples_per_identity"] = 2;
    j["data"]["sim_threshold"] = 0.0;
    j["data"]["psi_steps"] = 60;
    j["data"]["classifier_steps"] = 60;
    j["data"]["psi_batch"] = 8;
    j["data"]["classifier_batch"] = 8;
    j["train"]["batch_size"] = 4;
    j["train"]["stage1"] = {{"iterations", 40}, {"lr", 1e-3}};
    j["train"]["stage2"] = {{"iterations", 20}, {"lr", 1e-3}};
    j["train"]["edit_samples"] = 2;
    j["train"]["checkpoint_every"] = 0;
    j["sample"]["steps"] = 8;
    j["eval"]["identities"] = 3;
    j["eval"]["refs_per_identity"] = 2;
    j["eval"]["attr_prompts_per_identity"] = 1;
    j["eval"]["bg_prompts_per_identity"] = 1;
    return j;
}

json load_timings(const std::string& dir) {
    if (file_exists(dir + "/timings.json")) return json::parse(read_file(dir + "/timings.json"));
    return json::object();
}
void save_timings(const std::string& dir, const json& t) { write_file(dir + "/timings.json", t.dump(2) + "\n"); }

// builds any missing pipeline artifact; records wall times of the builds
bool ensure_artifacts(const std::string& dir, std::string& error) {
    fs::create_directories(dir);
    std::string cfg_path = dir + "/config.json";
    if (!file_exists(cfg_path)) write_file(cfg_path, acceptance_config(dir + "/out").dump(2) + "\n");
    json timings = load_timings(dir);
    auto timed = [&](const char* key, const std::string& args, const std::string& log) {
        auto t0 = std::chrono::steady_clock::now();
        int rc = run_cli(args, log);
        if (rc != 0) {
            error = std::string("command failed (") + args + "), rc=" + std::to_string(rc);
            return false;
        }
        timings[key] = seconds_since(t0);
        save_timings(dir, timings);
        return true;
    };

    std::string out = dir + "/out";
    if (!file_exists(out + "/data/manifest.jsonl"))
        if (!timed("gen_data", "gen-data --config " + cfg_path, "gen_data.log")) return false;
    if (!file_exists(out + "/train/base.ckpt"))
        if (!timed("stage1", "train --config " + cfg_path + " --stage base", "train_base.log")) return false;
    for (const char* v : {"full", "no_edit", "no_disen", "no_aug"}) {
        if (!file_exists(out + "/train/" + std::string(v) + ".ckpt")) {
            if (!timed((std::string("stage2_") + v).c_str(),
                       "train --config " + cfg_path + " --stage edit --ablation " + v,
                       std::string("train_") + v + ".log"))
                return false;
        }
    }
    if (!file_exists(out + "/eval/metrics_report.json"))
        if (!timed("eval_metrics",
                   "eval --config " + cfg_path + " --suite metrics --checkpoint " + out + "/train/full.ckpt",
                   "eval.log"))
            return false;
    if (!file_exists(out + "/eval/lambda_report.json"))
        if (!timed("eval_lambda",
                   "eval --config " + cfg_path + " --suite lambda --checkpoint " + out + "/train/full.ckpt",
                   "eval.log"))
            return false;
    if (!file_exists(out + "/eval/refs_report.json"))
        if (!timed("eval_refs",
                   "eval --config " + cfg_path + " --suite refs --checkpoint " + out + "/train/full.ckpt",
                   "eval.log"))
            return false;
    if (!file_exists(out + "/eval/ablation_report.json")) {
        std::string args = "eval --config " + cfg_path + " --suite ablation";
        for (const char* v : {"full", "no_edit", "no_disen", "no_aug"}) {
            std::string flag = std::string(v);
            for (auto& c : flag)
                if (c == '_') c = '-';
            args += " --ckpt-" + flag + " " + out + "/train/" + v + ".ckpt";
        }
        if (!timed("eval_ablation", args, "eval.log")) return false;
    }
    return true;
}

// ---- criterion 1: mechanism invariants -------------------------------------

void criterion1() {
    auto t0 = std::chrono::steady_clock::now();
    Check c;
    Rng rng(101);

    {  // softmax row normalization inside attention
        TinyModel<double> m(1);
        Tape<double> t;
        Tensor<double> q({12, 16}), k({9, 16});
        rng.fill_normal(q);
        rng.fill_normal(k);
        Var<double> w = t.softmax_rows(t.scale(t.matmul(t.constant(q), t.constant(k), false, true), 0.25));
        for (int i = 0; i < 12; ++i) {
            double s = 0;
            for (int j = 0; j < 9; ++j) s += w.val()[i * 9 + j];
            c.expect(std::abs(s - 1.0) <= 1e-6, "softmax row sum off by " + std::to_string(std::abs(s - 1.0)));
        }
    }
    {  // lambda = 0 base-model bit-equivalence under scrambled identity projections
        TinyModel<double> a(2), b(2);
        Rng scr(3);
        for (auto& e : b.ps.entries())
            if (e.name.find(".wkf.") != std::string::npos || e.name.find(".wvf.") != std::string::npos)
                scr.fill_normal(e.val);
        Tensor<double> z({3, 1024});
        rng.fill_normal(z);
        CaptionTokens cap = build_caption({.class_word = "person"});
        auto run = [&](TinyModel<double>& m, std::optional<Tensor<double>> f, double lam) {
            Tape<double> t;
            t.grad_enabled = false;
            Var<double> text = m.txt.encode(t, m.ps, cap);
            std::optional<IdCond<double>> id;
            if (f) id = IdCond<double>{t.constant(*f), false};
            return m.dn.predict_epsilon(t, m.ps, t.constant(z), 11, text, id, lam).val();
        };
        Tensor<double> f({16, 32});
        rng.fill_normal(f);
        c.expect(bits_equal(run(a, std::nullopt, 1.0), run(b, std::nullopt, 1.0)),
                 "f-absent output depends on identity projections");
        c.expect(bits_equal(run(a, f, 0.0), run(b, f, 0.0)), "lambda=0 output depends on identity projections");
    }
    {  // token-duplication invariance of the dual attention
        Tape<double> t;
        Tensor<double> q({20, 12}), tk({5, 12}), tv({5, 12}), ik({7, 12}), iv({7, 12});
        rng.fill_normal(q);
        rng.fill_normal(tk);
        rng.fill_normal(tv);
        rng.fill_normal(ik);
        rng.fill_normal(iv);
        Var<double> once = fuse_dual_attention<double>(t, t.constant(q), t.constant(tk), t.constant(tv),
                                                       t.constant(ik), t.constant(iv), 1.0);
        Var<double> twice = fuse_dual_attention<double>(
            t, t.constant(q), t.constant(tk), t.constant(tv), t.concat_rows(t.constant(ik), t.constant(ik)),
            t.concat_rows(t.constant(iv), t.constant(iv)), 1.0);
        for (int64_t i = 0; i < once.val().numel(); ++i)
            c.expect(std::abs(once.val()[i] - twice.val()[i]) < 1e-5, "token duplication moved the output");
    }
    {  // editing-direction antisymmetry plus loss range and scale invariance
        TinyModel<double> m(4);
        Tensor<double> z({3, 1024});
        rng.fill_normal(z);
        CaptionTokens y = parse_prompt("a photo of a person");
        CaptionTokens y2 = parse_prompt("a photo of a person with red hair");
        std::vector<std::string> taps = {"up1.xattn"};
        Tape<double> t;
        t.grad_enabled = false;
        auto fwd = editing_direction<double>(t, m.dn, m.ps, m.txt, z, 9, y, y2, std::nullopt, 1.0, taps);
        auto bwd = editing_direction<double>(t, m.dn, m.ps, m.txt, z, 9, y2, y, std::nullopt, 1.0, taps);
        for (int64_t i = 0; i < fwd.deltas[0].val().numel(); ++i)
            c.expect(fwd.deltas[0].val()[i] == -bwd.deltas[0].val()[i], "direction antisymmetry broken");

        Tensor<double> mask = Tensor<double>::full({kImagePixels}, 1.0);
        MaskPyramid<double> pyr = build_mask_pyramid(m.dn, mask, taps);
        EditingDirection<double> mw = fwd;
        double base_val = loss_edit(t, fwd, mw, pyr).val()[0];
        c.expect(std::abs(base_val) <= 1e-12, "aligned directions should give exactly 0");
        // negate and rescale
        EditingDirection<double> neg = fwd;
        Tensor<double> nv = fwd.deltas[0].val();
        for (auto& v : nv.data) v = -v;
        neg.deltas[0] = t.constant(nv);
        double lneg = loss_edit(t, fwd, neg, pyr).val()[0];
        c.expect(std::abs(lneg - 2.0) <= 1e-9, "negated direction should hit the 2*|taps| bound");
        Tensor<double> sv = fwd.deltas[0].val();
        for (auto& v : sv.data) v *= 123.0;
        EditingDirection<double> scaled = fwd;
        scaled.deltas[0] = t.constant(sv);
        double lsc = loss_edit(t, fwd, scaled, pyr).val()[0];
        c.expect(std::abs(lsc - base_val) <= 1e-6, "loss not scale-invariant");
        c.expect(lneg >= 0.0 && lneg <= 2.0 * (double)taps.size(), "loss out of range");
    }
    {  // disentanglement loss ignores everything inside the face region
        Tape<double> t;
        Tensor<double> mask({kImagePixels});
        for (int i = 0; i < kImagePixels; ++i) mask[i] = (i % 3 == 0) ? 1.0 : 0.0;
        Tensor<double> d1({3, kImagePixels});
        rng.fill_normal(d1);
        Tensor<double> d2 = d1;
        for (int ch = 0; ch < 3; ++ch)
            for (int p = 0; p < kImagePixels; ++p)
                if (mask[p] == 1.0) d2[(int64_t)ch * kImagePixels + p] = rng.normal() * 100.0;
        double v1 = t.masked_background_abs_mean(t.constant(d1), mask).val()[0];
        double v2 = t.masked_background_abs_mean(t.constant(d2), mask).val()[0];
        c.expect(v1 == v2, "face-region change leaked into the background norm");
    }
    {  // forward-noising closed form over 1000 random draws
        NoiseSchedule s = make_schedule(1000, 1e-4, 0.02);
        for (int trial = 0; trial < 1000; ++trial) {
            int t = (int)rng.below(1000);
            Tensor<double> z0({1, 8}), eps({1, 8});
            rng.fill_normal(z0);
            rng.fill_normal(eps);
            auto ns = forward_noise(z0, t, eps, s);
            double a = std::sqrt(s.alpha_bars[(size_t)t]), b = std::sqrt(1 - s.alpha_bars[(size_t)t]);
            for (int i = 0; i < 8; ++i)
                c.expect(rel_close(ns.z_t[i], a * z0[i] + b * eps[i], 1e-6), "noising identity off");
        }
    }
    double dt = seconds_since(t0);
    c.expect(dt < 120.0, "runtime " + std::to_string(dt) + "s exceeds 2 minutes");
    report(1, c.ok, "mechanism invariant suite",
           c.ok ? "all invariants hold, " + std::to_string(dt) + "s" : c.detail);
}

// ---- criterion 2: float64 gradient oracle ----------------------------------

void criterion2() {
    auto t0 = std::chrono::steady_clock::now();
    Check c;

    // default-scale model in double precision
    ParamStore<double> ps;
    CondConfig cc;
    DenoiserConfig dc;
    Rng init(2024);
    TextEncoder<double> txt;
    RefEncoder<double> psi;
    IdMapper<double> idmap;
    Denoiser<double> dn;
    txt.init(ps, cc, init);
    psi.init(ps, cc, init);
    idmap.init(ps, cc, init);
    dn.init(ps, dc, init);
    for (auto& e : ps.entries())
        if (e.name.rfind("psi.", 0) == 0) e.trainable = false;

    Rng rng(77);
    Tensor<double> z({3, 1024});
    rng.fill_normal(z);
    Tensor<double> img({3, 1024});
    rng.fill_uniform(img, 0.0, 1.0);
    Tensor<double> eps({3, 1024});
    rng.fill_normal(eps);
    Tensor<double> mask({kImagePixels});
    for (int i = 0; i < kImagePixels; ++i)
        mask[i] = (i / kImageSize >= 8 && i / kImageSize < 26 && i % kImageSize >= 9 && i % kImageSize < 24) ? 1.0
                                                                                                             : 0.0;
    CaptionTokens cap = build_caption({.class_word = "woman", .hair_color = HairColor::blond});
    CaptionTokens y = parse_prompt("a photo of a woman");
    CaptionTokens y2 = parse_prompt("a photo of a surprised woman");
    std::vector<std::string> taps = {"up1.xattn"};
    Tensor<double> f_aug({16, cc.d_ctx});
    rng.fill_normal(f_aug);
    const int t_step = 417;

    auto rec_value = [&]() {
        Tape<double> t;
        t.grad_enabled = false;
        Var<double> text = txt.encode(t, ps, cap);
        Var<double> f = idmap.apply(t, ps, psi.patch_tokens(t, ps, t.constant(img)));
        std::optional<IdCond<double>> id = IdCond<double>{f, false};
        Var<double> eh = dn.predict_epsilon(t, ps, t.constant(z), t_step, text, id, 1.0);
        return t.mse(eh, t.constant(eps)).val()[0];
    };
    auto edit_value = [&]() {
        Tape<double> t;
        t.grad_enabled = false;
        auto base = editing_direction<double>(t, dn, ps, txt, z, t_step, y, y2, std::nullopt, 1.0, taps);
        Var<double> f = idmap.apply(t, ps, psi.patch_tokens(t, ps, t.constant(img)));
        auto mw = editing_direction<double>(t, dn, ps, txt, z, t_step, y, y2, f, 1.0, taps);
        return loss_edit(t, base, mw, build_mask_pyramid(dn, mask, taps)).val()[0];
    };
    auto disen_value = [&]() {
        Tape<double> t;
        t.grad_enabled = false;
        Var<double> text = txt.encode(t, ps, cap);
        Var<double> f = idmap.apply(t, ps, psi.patch_tokens(t, ps, t.constant(img)));
        std::optional<IdCond<double>> id = IdCond<double>{f, false};
        Var<double> eh = dn.predict_epsilon(t, ps, t.constant(z), t_step, text, id, 1.0);
        return loss_disen(t, dn, ps, eh, t.constant(z), t_step, text, f_aug, 1.0, mask).val()[0];
    };

    auto backward_rec = [&]() {
        Tape<double> t;
        Var<double> text = txt.encode(t, ps, cap);
        Var<double> f = idmap.apply(t, ps, psi.patch_tokens(t, ps, t.constant(img)));
        std::optional<IdCond<double>> id = IdCond<double>{f, false};
        Var<double> eh = dn.predict_epsilon(t, ps, t.constant(z), t_step, text, id, 1.0);
        t.backward(t.mse(eh, t.constant(eps)));
    };
    auto backward_edit = [&]() {
        Tape<double> t;
        t.grad_enabled = false;
        auto base = editing_direction<double>(t, dn, ps, txt, z, t_step, y, y2, std::nullopt, 1.0, taps);
        t.grad_enabled = true;
        Var<double> f = idmap.apply(t, ps, psi.patch_tokens(t, ps, t.constant(img)));
        auto mw = editing_direction<double>(t, dn, ps, txt, z, t_step, y, y2, f, 1.0, taps);
        t.backward(loss_edit(t, base, mw, build_mask_pyramid(dn, mask, taps)));
    };
    auto backward_disen = [&]() {
        Tape<double> t;
        Var<double> text = txt.encode(t, ps, cap);
        Var<double> f = idmap.apply(t, ps, psi.patch_tokens(t, ps, t.constant(img)));
        std::optional<IdCond<double>> id = IdCond<double>{f, false};
        Var<double> eh = dn.predict_epsilon(t, ps, t.constant(z), t_step, text, id, 1.0);
        t.backward(loss_disen(t, dn, ps, eh, t.constant(z), t_step, text, f_aug, 1.0, mask));
    };

    // parameter sampling: all trainables for the reconstruction loss,
    // identity-path parameters for the two personalization losses
    auto sample_params = [&](Rng& pick, bool id_only, int n) {
        std::vector<std::pair<std::string, int64_t>> out;
        std::vector<int> pool;
        for (int i = 0; i < ps.size(); ++i) {
            const auto& e = ps.at(i);
            if (!e.trainable) continue;
            if (id_only && !(e.name.rfind("idmap.", 0) == 0 || e.name == "null.id" ||
                             e.name.find(".wkf.") != std::string::npos || e.name.find(".wvf.") != std::string::npos))
                continue;
            pool.push_back(i);
        }
        for (int k = 0; k < n; ++k) {
            const auto& e = ps.at(pool[(size_t)pick.below(pool.size())]);
            out.push_back({e.name, (int64_t)pick.below((uint64_t)e.val.numel())});
        }
        return out;
    };

    struct LossCase {
        const char* name;
        std::function<double()> value;
        std::function<void()> backward;
        bool id_only;
    };
    std::vector<LossCase> cases = {{"L_rec", rec_value, backward_rec, false},
                                   {"L_edit", edit_value, backward_edit, true},
                                   {"L_disen", disen_value, backward_disen, true}};
    double worst = 0;
    for (auto& lc : cases) {
        ps.zero_grads();
        lc.backward();
        Rng pick(std::string(lc.name)[2] + 1000u);
        auto probes = sample_params(pick, lc.id_only, 20);
        for (auto& [name, idx] : probes) {
            double analytic = ps.at(name).grad[idx];
            double fd = fd_at(ps, name, idx, lc.value);
            double denom = std::max({std::abs(fd), std::abs(analytic), 1e-8});
            double rel = std::abs(fd - analytic) / denom;
            worst = std::max(worst, rel);
            c.expect(rel <= 1e-4, std::string(lc.name) + " @" + name + "[" + std::to_string(idx) +
                                      "] rel err " + std::to_string(rel));
        }
    }
    double dt = seconds_since(t0);
    c.expect(dt < 300.0, "runtime " + std::to_string(dt) + "s exceeds 5 minutes");
    report(2, c.ok, "gradient oracle (20 params per loss, float64)",
           c.ok ? "worst relative error " + std::to_string(worst) + ", " + std::to_string(dt) + "s" : c.detail);
}

// ---- criteria 3-6: trained pipeline ----------------------------------------

void criteria_3_to_6(const std::string& dir) {
    std::string err;
    if (!ensure_artifacts(dir, err)) {
        for (int k = 3; k <= 6; ++k) report(k, false, "trained-pipeline criteria", "artifact build failed: " + err);
        return;
    }
    std::string out = dir + "/out";
    RunConfig cfg = RunConfig::from_file(dir + "/config.json");
    json timings = load_timings(dir);
    json metrics = json::parse(read_file(out + "/eval/metrics_report.json"));
    json lambda = json::parse(read_file(out + "/eval/lambda_report.json"));
    json refs = json::parse(read_file(out + "/eval/refs_report.json"));
    json ablation = json::parse(read_file(out + "/eval/ablation_report.json"));

    {  // criterion 3: training budget and held-out quality thresholds
        Check c;
        double train_s = timings.value("stage1", 0.0) + timings.value("stage2_full", 0.0);
        c.expect(train_s > 0, "missing training timings");
        c.expect(train_s <= 6 * 3600.0,
                 "training took " + std::to_string(train_s / 3600.0) + "h, budget is 6h CPU");
        double attr = metrics.at("attr_success");
        double gap = metrics.at("id_gap");
        c.expect(attr >= cfg.eval.attr_success_min,
                 "attr_success " + std::to_string(attr) + " < " + std::to_string(cfg.eval.attr_success_min));
        c.expect(gap >= cfg.eval.id_gap_min,
                 "id_gap " + std::to_string(gap) + " < " + std::to_string(cfg.eval.id_gap_min));
        char d[256];
        std::snprintf(d, sizeof(d), "train %.2fh, attr_success %.3f, id_gap %.3f", train_s / 3600.0, attr, gap);
        report(3, c.ok, "end-to-end toy training quality and budget", c.ok ? d : c.detail);
    }
    {  // criterion 4: ablation directions
        Check c;
        std::map<std::string, json> rows;
        for (const auto& r : ablation.at("rows")) rows[r.at("variant")] = r;
        double full_attr = rows.at("full").at("attr_success");
        double full_sim = rows.at("full").at("id_sim_same");
        double ne_attr = rows.at("no_edit").at("attr_success");
        double ne_sim = rows.at("no_edit").at("id_sim_same");
        c.expect(full_attr >= ne_attr + 0.05, "full vs no_edit attr " + std::to_string(full_attr) + " vs " +
                                                  std::to_string(ne_attr) + " (need +5 points)");
        c.expect(full_sim >= ne_sim - 0.05, "full id_sim dropped more than 0.05 vs no_edit");
        c.expect(full_attr > rows.at("no_aug").at("attr_success").get<double>(), "full must beat no_aug on attr");
        c.expect(full_attr > rows.at("no_disen").at("attr_success").get<double>(),
                 "full must beat no_disen on attr");
        char d[256];
        std::snprintf(d, sizeof(d), "attr: full %.3f, no_edit %.3f, no_aug %.3f, no_disen %.3f; sim: %.3f vs %.3f",
                      full_attr, ne_attr, rows.at("no_aug").at("attr_success").get<double>(),
                      rows.at("no_disen").at("attr_success").get<double>(), full_sim, ne_sim);
        report(4, c.ok, "ablation direction reproduction", c.ok ? d : c.detail);
    }
    {  // criterion 5: lambda sweep directions
        Check c;
        double sp_sim = lambda.at("spearman_lambda_id_sim");
        double sp_attr = lambda.at("spearman_lambda_attr");
        c.expect(sp_sim >= 0.8, "Spearman(lambda, id_sim) " + std::to_string(sp_sim) + " < 0.8");
        c.expect(sp_attr <= 0.0, "attr_success trend not non-increasing (Spearman " + std::to_string(sp_attr) + ")");
        char d[128];
        std::snprintf(d, sizeof(d), "Spearman id_sim %.3f, attr trend %.3f", sp_sim, sp_attr);
        report(5, c.ok, "lambda sweep direction", c.ok ? d : c.detail);
    }
    {  // criterion 6: reference count direction and duplication invariance
        Check c;
        double sim1 = 0, sim4 = 0, sim_dup = 0;
        for (const auto& r : refs.at("rows")) {
            double k = r.at("references");
            if (k == 1) sim1 = r.at("id_sim_same");
            if (k == 4) sim4 = r.at("id_sim_same");
            if (k == -1) sim_dup = r.at("id_sim_same");
        }
        c.expect(sim4 >= sim1, "id_sim(4 refs) " + std::to_string(sim4) + " < id_sim(1 ref) " + std::to_string(sim1));
        c.expect(std::abs(sim_dup - sim1) <= 1e-3,
                 "duplicated single reference deviates " + std::to_string(std::abs(sim_dup - sim1)));
        char d[128];
        std::snprintf(d, sizeof(d), "id_sim 1 ref %.4f, 4 refs %.4f, duplicated %.4f", sim1, sim4, sim_dup);
        report(6, c.ok, "reference count direction", c.ok ? d : c.detail);
    }
}

// ---- criterion 7: determinism ------------------------------------------------

void criterion7(const std::string& dir) {
    Check c;
    std::string d1 = dir + "/det_run1", d2 = dir + "/det_run2";
    for (const std::string& d : {d1, d2}) {
        if (file_exists(d + "/done.json")) continue;
        fs::remove_all(d);
        fs::create_directories(d);
        std::string cfg_path = d + "/config.json";
        write_file(cfg_path, smoke_determinism_config(d + "/out", 777).dump(2));
        bool ok = run_cli("gen-data --config " + cfg_path, "determinism.log") == 0 &&
                  run_cli("train --config " + cfg_path + " --stage base", "determinism.log") == 0 &&
                  run_cli("train --config " + cfg_path + " --stage edit", "determinism.log") == 0 &&
                  run_cli("sample --config " + cfg_path + " --checkpoint " + d +
                              "/out/train/full.ckpt --prompt \"a photo of a man\" --steps 8 --seed 3 --out s.png",
                          "determinism.log") == 0;
        if (!ok) {
            report(7, false, "determinism", "pipeline run failed in " + d);
            return;
        }
        write_file(d + "/done.json", "{}\n");
    }
    auto same = [&](const std::string& rel) {
        bool eq = read_file(d1 + rel) == read_file(d2 + rel);
        c.expect(eq, "mismatch in " + rel);
        return eq;
    };
    same("/out/train/base.ckpt");
    same("/out/train/full.ckpt");
    same("/out/train/metrics_base.jsonl");
    same("/out/train/metrics_full.jsonl");
    same("/out/samples/s.png");
    same("/out/data/manifest.jsonl");
    report(7, c.ok, "bit-identical checkpoints, metric logs and sampled images across two runs",
           c.ok ? "7 artifact classes compared byte-for-byte" : c.detail);
}

// ---- criterion 8: dataset contracts -----------------------------------------

void criterion8(const std::string& dir) {
    Check c;
    std::string data_dir = dir + "/out/data";
    if (!file_exists(data_dir + "/manifest.jsonl")) {
        report(8, false, "dataset contracts", "dataset missing (criterion 3 artifacts required)");
        return;
    }
    // every augmented record differs from its source in exactly one attribute
    auto records = load_dataset(data_dir);
    int n_aug = 0;
    bool single_diff = true;
    for (const auto& r : records) {
        if (!r.augmented) continue;
        ++n_aug;
        if (count_attribute_diffs(r.attrs, r.ref_attrs) != 1) single_diff = false;
    }
    c.expect(n_aug > 0, "no augmented records");
    c.expect(single_diff, "an augmented record differs in != 1 attribute");

    // empirical mix ratio within +-0.01 over 1e5 draws
    RunConfig cfg = RunConfig::from_file(dir + "/config.json");
    std::vector<DatasetRecord> orig, aug;
    for (auto& r : records) (r.augmented ? aug : orig).push_back(std::move(r));
    MixSampler sampler(orig, aug, cfg.data.mix_ratio);
    Rng rng(909);
    int hits = 0;
    const int draws = 100000;
    for (int i = 0; i < draws; ++i)
        if (sampler.draw(rng).augmented) ++hits;
    double frac = (double)hits / draws;
    c.expect(std::abs(frac - cfg.data.mix_ratio) <= 0.01,
             "mix fraction " + std::to_string(frac) + " vs configured " + std::to_string(cfg.data.mix_ratio));

    // regeneration is byte-identical: rerun gen-data into a scratch root
    std::string scratch = dir + "/regen_scratch";
    std::string regen_report = dir + "/regen_ok.json";
    if (!file_exists(regen_report)) {
        fs::remove_all(scratch);
        fs::create_directories(scratch);
        json j = json::parse(read_file(dir + "/config.json"));
        j["out_dir"] = scratch + "/out";
        write_file(scratch + "/config.json", j.dump(2));
        if (run_cli("gen-data --config " + scratch + "/config.json", "regen.log") != 0) {
            report(8, false, "dataset contracts", "regeneration run failed");
            return;
        }
        bool all_equal = true;
        std::string first_diff;
        for (auto& p : fs::recursive_directory_iterator(data_dir)) {
            if (!p.is_regular_file()) continue;
            std::string rel = fs::relative(p.path(), data_dir).string();
            std::string other = scratch + "/out/data/" + rel;
            if (!file_exists(other) || read_file(p.path().string()) != read_file(other)) {
                all_equal = false;
                first_diff = rel;
                break;
            }
        }
        write_file(regen_report, json{{"byte_identical", all_equal}, {"first_diff", first_diff}}.dump() + "\n");
        fs::remove_all(scratch);
    }
    json regen = json::parse(read_file(regen_report));
    c.expect(regen.at("byte_identical").get<bool>(), "regeneration differed at " + regen.value("first_diff", "?"));

    char d[160];
    std::snprintf(d, sizeof(d), "%d augmented records single-diff, mix %.4f vs %.2f, regeneration byte-identical",
                  n_aug, frac, cfg.data.mix_ratio);
    report(8, c.ok, "dataset contracts", c.ok ? d : c.detail);
}

}  // namespace

int main() {
    std::string dir = artifacts_dir();
    printf("acceptance artifacts: %s\n", dir.c_str());
    criterion1();
    criterion2();
    criteria_3_to_6(dir);
    criterion7(dir);
    criterion8(dir);
    printf("\n%d/8 criteria passed\n", 8 - g_failures);
    return g_failures == 0 ? 0 : 1;
}
