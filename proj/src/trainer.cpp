#include "trainer.hpp"

#include <filesystem>
#include <fstream>

#include "pngio.hpp"

namespace idfuse {

namespace fs = std::filesystem;

void ModelBundle::build(const RunConfig& c) {
    cfg = c;
    ps = ParamStore<float>();
    Rng rng(c.seed ^ 0x1f11ull);
    txt.init(ps, c.conditioning, rng);
    psi.init(ps, c.conditioning, rng);
    idmap.init(ps, c.conditioning, rng);
    dn.init(ps, c.model, rng);
    sched = make_schedule(c.schedule.timesteps, c.schedule.beta_min, c.schedule.beta_max);
}

IdentityFeature<float> ModelBundle::encode_reference_feature(const Tensor<float>& ref_masked) {
    Tape<float> t;
    t.grad_enabled = false;
    Var<float> f = reference_feature_graph(t, ref_masked);
    IdentityFeature<float> out;
    out.f = f.val();
    out.source_count = 1;
    return out;
}

Var<float> ModelBundle::reference_feature_graph(Tape<float>& t, const Tensor<float>& ref_masked) {
    Var<float> patches = psi.patch_tokens(t, ps, t.constant(ref_masked));
    return idmap.apply(t, ps, patches);
}

Tensor<float> ModelBundle::generate(const SampleSpec& spec) {
    EpsFn<float> cond = [&](const Tensor<float>& z, int step) {
        Tape<float> t;
        t.grad_enabled = false;
        Var<float> text = txt.encode(t, ps, spec.prompt);
        std::optional<IdCond<float>> id;
        if (spec.id_feature) id = IdCond<float>{t.constant(*spec.id_feature), false};
        return dn.predict_epsilon(t, ps, t.constant(z), step, text, id, (float)spec.lambda).val();
    };
    EpsFn<float> uncond = [&](const Tensor<float>& z, int step) {
        Tape<float> t;
        t.grad_enabled = false;
        Var<float> text = txt.null_embedding(t, ps);
        std::optional<IdCond<float>> id;
        if (spec.id_feature) {
            // null tokens cover however many references were concatenated
            const Tensor<float>& null_id = ps.at(dn.null_id_param()).val;
            int n = spec.id_feature->rows();
            Tensor<float> tokens({n, null_id.cols()});
            for (int i = 0; i < n; ++i)
                std::memcpy(tokens.ptr() + (int64_t)i * null_id.cols(),
                            null_id.ptr() + (int64_t)(i % null_id.rows()) * null_id.cols(),
                            sizeof(float) * null_id.cols());
            id = IdCond<float>{t.constant(std::move(tokens)), false};
        }
        return dn.predict_epsilon(t, ps, t.constant(z), step, text, id, (float)spec.lambda).val();
    };
    Tensor<float> z = sample_loop<float>(cond, uncond, {3, kImagePixels}, sched, spec.guidance, spec.seed);
    return to_image_range(z);
}

bool is_identity_path_param(const std::string& name) {
    if (name.rfind("idmap.", 0) == 0) return true;
    if (name == "null.id") return true;
    auto ends_with = [&](const char* suf) {
        size_t n = std::strlen(suf);
        return name.size() >= n && name.compare(name.size() - n, n, suf) == 0;
    };
    return ends_with(".wkf.w") || ends_with(".wvf.w");
}

void set_stage_trainables(ParamStore<float>& ps, Stage stage) {
    if (stage == Stage::base) {
        ps.set_all_trainable(true);
        ps.set_trainable_prefix("psi.", false);
    } else {
        ps.set_all_trainable(false);
        for (auto& e : ps.entries())
            if (is_identity_path_param(e.name)) e.trainable = true;
    }
}

std::string base_model_fingerprint(const ParamStore<float>& ps) {
    Sha256 h;
    for (const auto& e : ps.entries()) {
        bool backbone = (e.name.rfind("unet.", 0) == 0 || e.name.rfind("txt.", 0) == 0 || e.name == "null.text") &&
                        !is_identity_path_param(e.name);
        if (!backbone) continue;
        h.update(e.name.data(), e.name.size());
        h.update(e.val.ptr(), sizeof(float) * e.val.numel());
    }
    return h.hex();
}

std::string psi_fingerprint(const ParamStore<float>& ps) { return ps.fingerprint("psi."); }

json StepMetrics::to_json() const {
    json j{{"iter", iter},         {"L_rec", rec},           {"total", total},
           {"lr", lr},             {"grad_norm", grad_norm}, {"dropout_category", dropout_category}};
    if (edit) j["L_edit"] = *edit;
    if (disen) j["L_disen"] = *disen;
    return j;
}

int draw_dropout_category(Rng& rng, const TrainConfig& tc) {
    double u = rng.uniform();
    if (u < tc.drop_text_p) return 1;
    if (u < tc.drop_text_p + tc.drop_image_p) return 2;
    if (u < tc.drop_text_p + tc.drop_image_p + tc.drop_both_p) return 3;
    return 0;
}

namespace {

const char* category_name(int c) {
    static const char* n[] = {"none", "text", "image", "both"};
    return n[c];
}

struct BatchItem {
    const DatasetRecord* rec;
    int t;
    Tensor<float> eps;
    Tensor<float> z_t;
    Tensor<float> f;      // identity feature value (prepass)
    Tensor<float> f_aug;  // shuffled identity feature for the disen loss
};

}  // namespace

StepMetrics train_step(TrainState& st, std::optional<int> forced_category) {
    ModelBundle& m = *st.model;
    const RunConfig& cfg = m.cfg;
    const int B = cfg.train.batch_size;
    const bool stage2 = st.stage == Stage::edit_finetune;
    MixSampler sampler(*st.originals, *st.augmented, stage2 ? st.mix_ratio : 0.0);

    // fixed draw order: batch, dropout category, timesteps, noise, prompt pair
    std::vector<BatchItem> batch(B);
    for (int i = 0; i < B; ++i) batch[i].rec = &sampler.draw(st.rng);

    int category = draw_dropout_category(st.rng, cfg.train);
    if (forced_category) category = *forced_category;
    const bool drop_text = category == 1 || category == 3;
    const bool drop_image = category == 2 || category == 3;

    for (int i = 0; i < B; ++i) batch[i].t = (int)st.rng.below((uint64_t)m.sched.steps);
    for (int i = 0; i < B; ++i) {
        batch[i].eps = Tensor<float>({3, kImagePixels});
        st.rng.fill_normal(batch[i].eps);
        batch[i].z_t = forward_noise(to_model_range(batch[i].rec->image), batch[i].t, batch[i].eps, m.sched).z_t;
    }

    const PromptPair* pair = nullptr;
    if (stage2 && st.weights.lambda_edit > 0)
        pair = &(*st.prompt_pairs)[(size_t)st.rng.below(st.prompt_pairs->size())];

    // identity features precomputed as data; the disen branch swaps in the
    // next sample's feature (batch of one falls back to a noisy copy)
    const bool want_disen = stage2 && st.weights.lambda_disen > 0 && !drop_image;
    for (int i = 0; i < B; ++i) batch[i].f = m.encode_reference_feature(batch[i].rec->ref_image).f;
    if (want_disen) {
        if (B > 1) {
            for (int i = 0; i < B; ++i) batch[i].f_aug = batch[(i + 1) % B].f;
        } else {
            double sd = 0, mean = 0;
            for (const float& v : batch[0].f.data) mean += v;
            mean /= (double)batch[0].f.numel();
            for (const float& v : batch[0].f.data) sd += (v - mean) * (v - mean);
            sd = std::sqrt(sd / (double)batch[0].f.numel());
            batch[0].f_aug = batch[0].f;
            for (auto& v : batch[0].f_aug.data) v += (float)(st.rng.normal() * 0.1 * sd);
        }
    }

    m.ps.zero_grads();
    double sum_rec = 0, sum_disen = 0, sum_edit = 0;
    int n_edit = 0;
    const int edit_take = pair ? std::min(st.edit_samples, B) : 0;

    for (int i = 0; i < B; ++i) {
        BatchItem& it = batch[i];
        Tape<float> t;
        Var<float> z = t.constant(it.z_t);
        Var<float> text = drop_text ? m.txt.null_embedding(t, m.ps) : m.txt.encode(t, m.ps, it.rec->caption);
        std::optional<IdCond<float>> id;
        Var<float> f_graph;
        if (drop_image) {
            id = m.dn.null_id_cond(t, m.ps);
        } else {
            f_graph = m.reference_feature_graph(t, it.rec->ref_image);
            id = IdCond<float>{f_graph, false};
        }
        Var<float> eps_hat = m.dn.predict_epsilon(t, m.ps, z, it.t, text, id, 1.0f);
        Var<float> rec = loss_rec(t, eps_hat, it.eps);
        sum_rec += rec.val()[0];
        Var<float> total = t.scale(rec, 1.0f / (float)B);

        if (want_disen) {
            Var<float> dis = loss_disen(t, m.dn, m.ps, eps_hat, z, it.t, text, it.f_aug, 1.0f, it.rec->mask);
            sum_disen += dis.val()[0];
            total = t.add(total, t.scale(dis, (float)(st.weights.lambda_disen / B)));
        }

        if (pair && i < edit_take) {
            CaptionTokens y = parse_prompt(substitute_class(pair->source_template, it.rec->class_word));
            CaptionTokens y2 = parse_prompt(substitute_class(pair->target_template, it.rec->class_word));
            bool saved = t.grad_enabled;
            t.grad_enabled = false;
            EditingDirection<float> base =
                editing_direction<float>(t, m.dn, m.ps, m.txt, it.z_t, it.t, y, y2, std::nullopt, 1.0f, st.taps);
            t.grad_enabled = saved;
            Var<float> f_edit = f_graph.defined() ? f_graph : t.constant(it.f);
            EditingDirection<float> mw =
                editing_direction<float>(t, m.dn, m.ps, m.txt, it.z_t, it.t, y, y2, f_edit, 1.0f, st.taps);
            MaskPyramid<float> masks = build_mask_pyramid(m.dn, it.rec->mask, st.taps);
            Var<float> ed = loss_edit(t, base, mw, masks);
            sum_edit += ed.val()[0];
            ++n_edit;
            total = t.add(total, t.scale(ed, (float)(st.weights.lambda_edit / edit_take)));
        }

        if (!std::isfinite((double)total.val()[0])) {
            std::string dump = "non-finite loss at iter " + std::to_string(st.iter) + "; batch indices/t: ";
            for (const auto& b : batch)
                dump += std::to_string(b.rec->index) + "/t=" + std::to_string(b.t) + " ";
            throw NumericError(dump);
        }
        t.backward(total);
    }

    double gn = st.opt.grad_norm(m.ps);
    st.opt.step(m.ps);

    StepMetrics out;
    out.iter = st.iter;
    out.rec = sum_rec / B;
    if (stage2) {
        out.edit = n_edit > 0 ? sum_edit / n_edit : 0.0;
        out.disen = want_disen ? sum_disen / B : 0.0;
    }
    out.total = out.rec + (out.edit ? st.weights.lambda_edit * *out.edit : 0.0) +
                (out.disen ? st.weights.lambda_disen * *out.disen : 0.0);
    out.lr = st.opt.lr;
    out.grad_norm = gn;
    out.dropout_category = category_name(category);
    ++st.iter;
    return out;
}

StageResult run_stage(ModelBundle& model, Stage stage, const std::vector<DatasetRecord>& originals,
                      const std::vector<DatasetRecord>& augmented, const std::vector<PromptPair>& pairs,
                      const std::string& out_dir, const std::string& tag, const std::string& ablation,
                      const std::string& resume_path, const std::string& stage1_checkpoint) {
    const RunConfig& cfg = model.cfg;
    const bool stage2 = stage == Stage::edit_finetune;
    if (stage2 && resume_path.empty()) {
        if (stage1_checkpoint.empty())
            throw std::runtime_error("edit_finetune requires a stage-1 checkpoint (missing artifact: base model)");
        load_checkpoint(stage1_checkpoint, model.ps, nullptr);
    }

    TrainState st;
    st.model = &model;
    st.stage = stage;
    st.originals = &originals;
    st.augmented = &augmented;
    st.prompt_pairs = &pairs;
    st.taps = resolve_taps(model.dn, cfg.train.tapped_blocks);
    st.weights.lambda_edit = stage2 ? cfg.train.lambda_edit : 0.0;
    st.weights.lambda_disen = stage2 ? cfg.train.lambda_disen : 0.0;
    st.mix_ratio = stage2 ? cfg.data.mix_ratio : 0.0;
    st.edit_samples = cfg.train.edit_samples;
    if (ablation == "no_edit") st.weights.lambda_edit = 0.0;
    if (ablation == "no_disen") st.weights.lambda_disen = 0.0;
    if (ablation == "no_aug") st.mix_ratio = 0.0;

    const TrainStageConfig& sc = stage2 ? cfg.train.stage2 : cfg.train.stage1;
    st.opt.lr = sc.lr;
    st.opt.weight_decay = cfg.train.weight_decay;
    st.opt.clip_norm = cfg.train.clip_norm;

    set_stage_trainables(model.ps, stage);
    st.opt.attach(model.ps);
    st.rng = Rng(cfg.seed ^ (stage2 ? 0x57a6e2ull : 0x57a6e1ull));

    std::string psi_fp = psi_fingerprint(model.ps);
    std::string base_fp = base_model_fingerprint(model.ps);

    int64_t start_iter = 0;
    if (!resume_path.empty()) {
        json meta = load_checkpoint(resume_path, model.ps, &st.opt);
        if (meta.value("stage", "") != std::string(stage_name(stage)))
            throw std::runtime_error("resume: checkpoint stage mismatch");
        st.rng.restore_state(meta.at("rng"));
        start_iter = meta.at("iter");
        psi_fp = meta.at("fingerprints").at("psi");
        base_fp = meta.at("fingerprints").at("base_model");
    }
    st.iter = start_iter;

    fs::create_directories(out_dir);
    std::string metrics_path = out_dir + "/metrics_" + tag + ".jsonl";
    std::ofstream log(metrics_path, resume_path.empty() ? std::ios::trunc : std::ios::app);

    auto meta_for = [&](int64_t it) {
        return json{{"kind", "model"},
                    {"stage", stage_name(stage)},
                    {"ablation", ablation},
                    {"iter", it},
                    {"rng", st.rng.state_string()},
                    {"config", cfg.resolved()},
                    {"fingerprints", {{"psi", psi_fp}, {"base_model", base_fp}}}};
    };
    std::string ckpt_path = out_dir + "/" + tag + ".ckpt";

    for (int64_t it = start_iter; it < sc.iterations; ++it) {
        StepMetrics sm = train_step(st);
        log << sm.to_json().dump() << "\n";
        if (cfg.train.checkpoint_every > 0 && (it + 1) % cfg.train.checkpoint_every == 0 &&
            it + 1 < sc.iterations) {
            save_checkpoint(out_dir + "/" + tag + "_iter" + std::to_string(it + 1) + ".ckpt", model.ps, &st.opt,
                            meta_for(it + 1));
        }
    }
    log.flush();
    save_checkpoint(ckpt_path, model.ps, &st.opt, meta_for(sc.iterations));
    return {ckpt_path, metrics_path};
}

void pretrain_reference_encoder(const RunConfig& cfg, ParamStore<float>& psi_ps, RefEncoder<float>& psi,
                                const std::string& metrics_path) {
    Rng rng(cfg.seed ^ 0x951ull);
    psi_ps = ParamStore<float>();
    psi.init(psi_ps, cfg.conditioning, rng);
    AdamW<float> opt;
    opt.lr = cfg.data.psi_lr;
    opt.attach(psi_ps);
    std::ofstream log;
    if (!metrics_path.empty()) log.open(metrics_path);

    const int B = cfg.data.psi_batch;
    for (int step = 0; step < cfg.data.psi_steps; ++step) {
        psi_ps.zero_grads();
        double loss_sum = 0;
        for (int b = 0; b < B; ++b) {
            int id = (int)rng.below((uint64_t)cfg.data.n_identities);
            AttributeVector attrs = random_attributes(rng);
            Render r = render_avatar(identity_from_id(id), attrs, rng.next_u64());
            Tensor<float> img = apply_background_mask(r.image, r.mask);
            // light noise so the encoder tolerates imperfect generations
            for (auto& v : img.data) v = std::clamp(v + (float)(rng.normal() * 0.03), 0.0f, 1.0f);
            Tape<float> t;
            Var<float> logits = psi.logits(t, psi_ps, t.constant(img));
            Var<float> loss = t.softmax_xent_rows(logits, {id});
            loss_sum += loss.val()[0];
            t.backward(t.scale(loss, 1.0f / (float)B));
        }
        opt.step(psi_ps);
        if (log && step % 50 == 0)
            log << json{{"step", step}, {"xent", loss_sum / B}}.dump() << "\n";
    }
}

}  // namespace idfuse
