#include "evalkit.hpp"

#include <algorithm>
#include <fstream>
#include <numeric>

#include "pngio.hpp"

namespace idfuse {

void AttributeClassifier::init(Rng& rng) {
    ps = ParamStore<float>();
    c1.init(ps, "cls.c1", 3, 32, 3, 2, rng);
    g1.init(ps, "cls.g1", 32, 8);
    c2.init(ps, "cls.c2", 32, 64, 3, 2, rng);
    g2.init(ps, "cls.g2", 64, 8);
    c3.init(ps, "cls.c3", 64, 64, 3, 1, rng);
    g3.init(ps, "cls.g3", 64, 8);
    heads.resize(5);
    for (int i = 0; i < 5; ++i)
        heads[(size_t)i].init(ps, "cls.head" + std::to_string(i), 64, attribute_cardinality(i), rng);
    loc1.init(ps, "cls.loc1", 64, 32, 3, 1, rng);
    loc2.init(ps, "cls.loc2", 32, 16, 3, 1, rng);
    loc3.init(ps, "cls.loc3", 16, 1, 3, 1, rng);
}

Var<float> AttributeClassifier::trunk(Tape<float>& t, Var<float> image) {
    Var<float> h = t.silu(g1.apply(t, ps, c1.apply(t, ps, image, 32, 32)));
    h = t.silu(g2.apply(t, ps, c2.apply(t, ps, h, 16, 16)));
    return t.silu(g3.apply(t, ps, c3.apply(t, ps, h, 8, 8)));
}

Var<float> AttributeClassifier::head_logits(Tape<float>& t, Var<float> feat, int coord) {
    Tensor<float> pool({feat.val().cols(), 1});
    pool.fill(1.0f / (float)feat.val().cols());
    Var<float> pooled = t.transpose(t.matmul(feat, t.constant(std::move(pool))));  // (1, C)
    return heads[(size_t)coord].apply(t, ps, pooled);
}

Var<float> AttributeClassifier::mask_logits(Tape<float>& t, Var<float> feat) {
    Var<float> h = t.silu(loc1.apply(t, ps, feat, 8, 8));
    h = t.upsample2x(h, 8, 8);
    h = t.silu(loc2.apply(t, ps, h, 16, 16));
    h = t.upsample2x(h, 16, 16);
    return loc3.apply(t, ps, h, 32, 32);
}

AttributeVector AttributeClassifier::classify(const Tensor<float>& image01) {
    Tape<float> t;
    t.grad_enabled = false;
    Var<float> feat = trunk(t, t.constant(image01));
    AttributeVector a;
    for (int coord = 0; coord < 5; ++coord) {
        const Tensor<float>& lg = head_logits(t, feat, coord).val();
        int best = 0;
        for (int i = 1; i < lg.numel(); ++i)
            if (lg[i] > lg[best]) best = i;
        set_attribute_value(a, coord, best);
    }
    return a;
}

Tensor<float> AttributeClassifier::localize(const Tensor<float>& image01) {
    Tape<float> t;
    t.grad_enabled = false;
    const Tensor<float>& lg = mask_logits(t, trunk(t, t.constant(image01))).val();
    Tensor<float> mask({kImagePixels});
    for (int p = 0; p < kImagePixels; ++p) mask[p] = lg[p] > 0.0f ? 1.0f : 0.0f;
    return mask;
}

AttributeClassifier train_attribute_classifier(const RunConfig& cfg, const std::string& metrics_path) {
    AttributeClassifier cls;
    Rng rng(cfg.seed ^ 0xc7a55ull);
    cls.init(rng);
    AdamW<float> opt;
    opt.lr = cfg.data.classifier_lr;
    opt.attach(cls.ps);
    std::ofstream log;
    if (!metrics_path.empty()) log.open(metrics_path);

    auto render_random = [&](Rng& r, bool held_out) {
        int id = held_out ? 2'000'000 + (int)r.below(500) : (int)r.below((uint64_t)cfg.data.n_identities);
        AttributeVector attrs = random_attributes(r);
        Render rd = render_avatar(identity_from_id(id), attrs, r.next_u64());
        return std::pair<Render, AttributeVector>{std::move(rd), attrs};
    };

    const int B = cfg.data.classifier_batch;
    for (int step = 0; step < cfg.data.classifier_steps; ++step) {
        cls.ps.zero_grads();
        double loss_sum = 0;
        for (int b = 0; b < B; ++b) {
            auto [rd, attrs] = render_random(rng, false);
            Tensor<float> img = rd.image;
            // light noise so the oracle tolerates imperfect generations
            for (auto& v : img.data) v = std::clamp(v + (float)(rng.normal() * 0.03), 0.0f, 1.0f);
            Tape<float> t;
            Var<float> feat = cls.trunk(t, t.constant(img));
            Var<float> loss;
            for (int coord = 0; coord < 5; ++coord) {
                // hair color is invisible on bald renders; skip that head
                if (coord == 0 && attrs.hair_length == HairLength::bald) continue;
                Var<float> term =
                    t.softmax_xent_rows(cls.head_logits(t, feat, coord), {attribute_value(attrs, coord)});
                loss = loss.defined() ? t.add(loss, term) : term;
            }
            Tensor<float> mask_target({1, kImagePixels});
            for (int p = 0; p < kImagePixels; ++p) mask_target[p] = rd.mask[p];
            loss = t.add(loss, t.bce_with_logits(cls.mask_logits(t, feat), mask_target));
            loss_sum += loss.val()[0];
            t.backward(t.scale(loss, 1.0f / (float)B));
        }
        opt.step(cls.ps);
        if (log && step % 50 == 0) log << json{{"step", step}, {"loss", loss_sum / B}}.dump() << "\n";
    }

    Rng hrng(cfg.seed ^ 0x6a7eull);
    int correct = 0, total = 0;
    for (int i = 0; i < 300; ++i) {
        auto [rd, attrs] = render_random(hrng, true);
        AttributeVector pred = cls.classify(rd.image);
        for (int coord = 0; coord < 5; ++coord) {
            if (coord == 0 && attrs.hair_length == HairLength::bald) continue;
            ++total;
            if (attribute_value(pred, coord) == attribute_value(attrs, coord)) ++correct;
        }
    }
    cls.held_out_accuracy = (double)correct / total;
    return cls;
}

void save_classifier(const std::string& path, const AttributeClassifier& c) {
    save_checkpoint(path, c.ps, nullptr, json{{"kind", "classifier"}, {"held_out_accuracy", c.held_out_accuracy}});
}

AttributeClassifier load_classifier(const std::string& path) {
    AttributeClassifier c;
    Rng rng(0);
    c.init(rng);
    json meta = load_checkpoint(path, c.ps, nullptr);
    c.held_out_accuracy = meta.at("held_out_accuracy");
    return c;
}

// ---------------------------------------------------------------------------

namespace {

// prompt expressing exactly one attribute target
CaptionTokens prompt_for_target(const std::string& cw, int coord, int value) {
    CaptionAttrs a;
    a.class_word = cw;
    switch (coord) {
        case 0: a.hair_color = (HairColor)value; break;
        case 1: a.hair_length = (HairLength)value; break;
        case 2: a.expression = (Expression)value; break;
        case 3: a.glasses = true; break;
        case 4: a.background = (Background)value; break;
    }
    return build_caption(a);
}

}  // namespace

EvalSet build_eval_set(const RunConfig& cfg, ModelBundle& model) {
    EvalSet es;
    Rng rng(cfg.eval.seed ^ 0xe7a1ull);
    for (int i = 0; i < cfg.eval.identities; ++i) {
        int id = cfg.data.n_identities + i;  // past the training range, so held out
        es.identity_ids.push_back(id);
        IdentitySpec spec = identity_from_id(id);
        es.class_word.push_back(class_word_for(spec));
        std::vector<Render> refs;
        std::vector<AttributeVector> rattrs;
        for (int k = 0; k < cfg.eval.refs_per_identity; ++k) {
            AttributeVector a = random_attributes(rng);
            refs.push_back(render_avatar(spec, a, rng.next_u64()));
            rattrs.push_back(a);
        }
        es.ref_masked.push_back(apply_background_mask(refs[0].image, refs[0].mask));
        es.ref_embedding.push_back(psi_embedding(model.psi, model.ps, es.ref_masked.back()));
        es.refs.push_back(std::move(refs));
        es.ref_attrs.push_back(std::move(rattrs));
    }

    Rng prng(cfg.eval.seed ^ 0x9f0333ull);
    for (int i = 0; i < cfg.eval.identities; ++i) {
        const std::string& cw = es.class_word[(size_t)i];
        const AttributeVector& ref = es.ref_attrs[(size_t)i][0];
        auto add_item = [&](const std::string& cat, int coord, int value) {
            EvalItem it;
            it.identity_ord = i;
            it.category = cat;
            it.target_coord = coord;
            it.target_value = value;
            it.prompt = cat == "general" ? build_caption({.class_word = cw}) : prompt_for_target(cw, coord, value);
            it.prompt_text = caption_text(it.prompt);
            it.gen_seed = ((uint64_t)i << 32 | (uint64_t)es.items.size()) ^ cfg.eval.seed * 0x9e3779b97f4a7c15ull;
            es.items.push_back(std::move(it));
        };
        add_item("general", -1, -1);
        // attribute prompts conflict with the reference's current value, so
        // success requires overriding the copied identity appearance
        int added = 0, guard = 0;
        while (added < cfg.eval.attr_prompts_per_identity && guard++ < 200) {
            int coord = (int)prng.below(4);
            int card = attribute_cardinality(coord);
            int cur = attribute_value(ref, coord);
            int value = (cur + 1 + (int)prng.below((uint64_t)(card - 1))) % card;
            if (coord == 2 && value == (int)Expression::neutral) continue;  // unmentionable
            if (coord == 3 && value != (int)Eyewear::glasses) continue;     // only "glasses" exists as a word
            add_item("attribute", coord, value);
            ++added;
        }
        for (int k = 0; k < cfg.eval.bg_prompts_per_identity; ++k) {
            int cur = (int)ref.background;
            int value = (cur + 1 + (int)prng.below((uint64_t)(kNumBackgrounds - 1))) % kNumBackgrounds;
            add_item("background", 4, value);
        }
    }
    return es;
}

double attribute_success(AttributeClassifier& cls, const std::vector<Tensor<float>>& images,
                         const std::vector<std::pair<int, int>>& targets) {
    if (images.empty()) throw std::invalid_argument("attribute_success: empty image list");
    if (images.size() != targets.size()) throw std::invalid_argument("attribute_success: image/target mismatch");
    if (cls.held_out_accuracy < kClassifierGate)
        throw std::runtime_error("attribute classifier below gate: accuracy " +
                                 std::to_string(cls.held_out_accuracy) + " < " + std::to_string(kClassifierGate));
    int ok = 0;
    for (size_t i = 0; i < images.size(); ++i) {
        AttributeVector pred = cls.classify(images[i]);
        if (attribute_value(pred, targets[i].first) == targets[i].second) ++ok;
    }
    return (double)ok / (double)images.size();
}

double identity_similarity(ModelBundle& model, AttributeClassifier& cls, const std::vector<Tensor<float>>& images,
                           const Tensor<float>& reference_embedding, int* flagged) {
    if (images.empty()) throw std::invalid_argument("identity_similarity: empty image list");
    int n_flag = 0;
    double sum = 0;
    for (const auto& img : images) {
        Tensor<float> mask = cls.localize(img);
        double area = 0;
        for (const float& v : mask.data) area += v;
        if (area / kImagePixels < kFaceAreaMin) {
            ++n_flag;  // no face found: scored 0
            continue;
        }
        Tensor<float> emb = psi_embedding(model.psi, model.ps, apply_background_mask(img, mask));
        sum += cosine(emb, reference_embedding);
    }
    if (flagged) *flagged = n_flag;
    return sum / (double)images.size();
}

json MetricsReport::to_json() const {
    return json{{"attr_success", attr_success},
                {"attr_success_attribute", attr_success_attribute},
                {"attr_success_background", attr_success_background},
                {"face_rate_general", face_rate_general},
                {"id_sim_same", id_sim_same},
                {"id_sim_cross", id_sim_cross},
                {"id_gap", id_gap},
                {"flagged_fraction", flagged_fraction},
                {"n_images", n_images}};
}

MetricsReport run_metrics(ModelBundle& model, AttributeClassifier& cls, const EvalSet& es, double lambda,
                          const GuidanceConfig& g, bool use_identity, int refs_per_item,
                          bool duplicate_single_ref) {
    if (cls.held_out_accuracy < kClassifierGate)
        throw std::runtime_error("attribute classifier below gate: accuracy " +
                                 std::to_string(cls.held_out_accuracy));
    // identity features, possibly token-concatenated over several references
    std::vector<Tensor<float>> feats;
    for (size_t i = 0; i < es.identity_ids.size(); ++i) {
        if ((int)es.refs[i].size() < refs_per_item)
            throw std::runtime_error("insufficient references: have " + std::to_string(es.refs[i].size()) +
                                     ", need " + std::to_string(refs_per_item));
        std::vector<IdentityFeature<float>> parts;
        for (int k = 0; k < refs_per_item; ++k) {
            const Render& r = es.refs[i][(size_t)(duplicate_single_ref ? 0 : k)];
            parts.push_back(model.encode_reference_feature(apply_background_mask(r.image, r.mask)));
        }
        feats.push_back(concat_references(parts).f);
    }

    MetricsReport rep;
    int n_attr = 0, ok_attr = 0, n_bg = 0, ok_bg = 0, n_gen = 0, ok_gen = 0, flagged = 0;
    double sim_same = 0, sim_cross = 0;
    int n_cross = 0;
    for (const auto& item : es.items) {
        SampleSpec spec;
        spec.prompt = item.prompt;
        if (use_identity) spec.id_feature = feats[(size_t)item.identity_ord];
        spec.lambda = lambda;
        spec.guidance = g;
        spec.seed = item.gen_seed;
        Tensor<float> img = model.generate(spec);
        ++rep.n_images;

        Tensor<float> mask = cls.localize(img);
        double area = 0;
        for (const float& v : mask.data) area += v;
        bool face = area / kImagePixels >= kFaceAreaMin;
        if (!face) ++flagged;

        if (item.category == "general") {
            ++n_gen;
            if (face) ++ok_gen;
        } else {
            AttributeVector pred = cls.classify(img);
            bool ok = attribute_value(pred, item.target_coord) == item.target_value;
            if (item.category == "attribute") {
                ++n_attr;
                if (ok) ++ok_attr;
            } else {
                ++n_bg;
                if (ok) ++ok_bg;
            }
        }

        if (face) {
            Tensor<float> emb = psi_embedding(model.psi, model.ps, apply_background_mask(img, mask));
            sim_same += cosine(emb, es.ref_embedding[(size_t)item.identity_ord]);
            for (size_t j = 0; j < es.ref_embedding.size(); ++j) {
                if ((int)j == item.identity_ord) continue;
                sim_cross += cosine(emb, es.ref_embedding[j]);
                ++n_cross;
            }
        }
    }
    rep.attr_success_attribute = n_attr ? (double)ok_attr / n_attr : 0;
    rep.attr_success_background = n_bg ? (double)ok_bg / n_bg : 0;
    rep.attr_success = (n_attr + n_bg) ? (double)(ok_attr + ok_bg) / (n_attr + n_bg) : 0;
    rep.face_rate_general = n_gen ? (double)ok_gen / n_gen : 0;
    rep.id_sim_same = rep.n_images ? sim_same / rep.n_images : 0;
    rep.id_sim_cross = n_cross ? sim_cross / n_cross : 0;
    rep.id_gap = rep.id_sim_same - rep.id_sim_cross;
    rep.flagged_fraction = rep.n_images ? (double)flagged / rep.n_images : 0;
    return rep;
}

double spearman(const std::vector<double>& x, const std::vector<double>& y) {
    if (x.size() != y.size() || x.size() < 2) throw std::invalid_argument("spearman: need matched series");
    auto ranks = [](const std::vector<double>& v) {
        size_t n = v.size();
        std::vector<size_t> idx(n);
        std::iota(idx.begin(), idx.end(), 0);
        std::sort(idx.begin(), idx.end(), [&](size_t a, size_t b) { return v[a] < v[b]; });
        std::vector<double> r(n);
        size_t i = 0;
        while (i < n) {
            size_t j = i;
            while (j + 1 < n && v[idx[j + 1]] == v[idx[i]]) ++j;
            double avg = ((double)i + (double)j) / 2.0 + 1.0;
            for (size_t k = i; k <= j; ++k) r[idx[k]] = avg;
            i = j + 1;
        }
        return r;
    };
    std::vector<double> rx = ranks(x), ry = ranks(y);
    double mx = 0, my = 0;
    for (size_t i = 0; i < rx.size(); ++i) { mx += rx[i]; my += ry[i]; }
    mx /= (double)rx.size();
    my /= (double)ry.size();
    double num = 0, dx = 0, dy = 0;
    for (size_t i = 0; i < rx.size(); ++i) {
        num += (rx[i] - mx) * (ry[i] - my);
        dx += (rx[i] - mx) * (rx[i] - mx);
        dy += (ry[i] - my) * (ry[i] - my);
    }
    if (dx == 0 || dy == 0) return 0;  // a constant series has no trend
    return num / std::sqrt(dx * dy);
}

std::vector<SweepRow> lambda_sweep(ModelBundle& model, AttributeClassifier& cls, const EvalSet& es,
                                   const GuidanceConfig& g) {
    std::vector<SweepRow> rows;
    for (int i = 0; i <= 10; ++i) {
        double lam = (double)i / 10.0;
        rows.push_back({lam, run_metrics(model, cls, es, lam, g)});
    }
    return rows;
}

std::vector<SweepRow> reference_count_sweep(ModelBundle& model, AttributeClassifier& cls, const EvalSet& es,
                                            const GuidanceConfig& g) {
    if (es.refs.empty() || es.refs[0].empty()) throw std::runtime_error("reference sweep: no references");
    int max_refs = (int)es.refs[0].size();
    std::vector<SweepRow> rows;
    for (int k = 1; k <= max_refs; ++k)
        rows.push_back({(double)k, run_metrics(model, cls, es, 1.0, g, true, k)});
    // duplicated single reference, for the token-duplication invariance row
    rows.push_back({-1.0, run_metrics(model, cls, es, 1.0, g, true, max_refs, /*duplicate_single_ref=*/true)});
    return rows;
}

std::vector<AblationRow> ablation_suite(const RunConfig& cfg, const std::map<std::string, std::string>& ckpts,
                                        AttributeClassifier& cls) {
    static const std::vector<std::string> variants = {"full", "no_edit", "no_disen", "no_aug"};
    for (const auto& v : variants)
        if (!ckpts.count(v)) throw std::runtime_error("ablation suite: missing checkpoint for variant '" + v + "'");

    json ref_config;
    std::vector<AblationRow> rows;
    for (const auto& v : variants) {
        ModelBundle m;
        m.build(cfg);
        json meta = load_checkpoint(ckpts.at(v), m.ps, nullptr);
        if (meta.value("ablation", "") != v)
            throw std::runtime_error("ablation suite: checkpoint " + ckpts.at(v) + " is tagged '" +
                                     meta.value("ablation", "?") + "', expected '" + v + "'");
        json cfg_echo = meta.at("config");
        if (ref_config.is_null()) ref_config = cfg_echo;
        else if (cfg_echo != ref_config)
            throw std::runtime_error("ablation suite: config mismatch for variant '" + v +
                                     "' (checkpoints differ beyond the ablated component)");
        EvalSet es = build_eval_set(cfg, m);
        rows.push_back({v, run_metrics(m, cls, es, 1.0, cfg.sample.guidance())});
    }
    return rows;
}

}  // namespace idfuse
