// idfuse command line: dataset generation, staged training, sampling and
// evaluation, all driven by one JSON config.
//
// exit codes: 0 ok, 2 config/validation error, 3 missing artifact or
// precondition, 4 numeric failure.

#include <CLI11.hpp>

#include <cstdlib>
#include <filesystem>
#include <fstream>

#include "evalkit.hpp"
#include "plot.hpp"
#include "pngio.hpp"

using namespace idfuse;
namespace fs = std::filesystem;

namespace {

struct PreconditionError : std::runtime_error {
    explicit PreconditionError(const std::string& m) : std::runtime_error(m) {}
};

std::string resolve_out_dir(const RunConfig& cfg) {
    const char* root = std::getenv("IDFUSE_OUT_ROOT");
    if (root && *root && !fs::path(cfg.out_dir).is_absolute()) return std::string(root) + "/" + cfg.out_dir;
    return cfg.out_dir;
}

// one command per output directory at a time
struct DirLock {
    std::string path;
    explicit DirLock(const std::string& dir) {
        fs::create_directories(dir);
        path = dir + "/.lock";
        FILE* f = std::fopen(path.c_str(), "wx");
        if (!f)
            throw PreconditionError("output directory is locked by another command (remove " + path +
                                    " if that command died)");
        std::fclose(f);
    }
    ~DirLock() { std::remove(path.c_str()); }
};

void write_run_manifest(const std::string& out_dir, const std::string& command, const json& flags,
                        const RunConfig& cfg, const json& inputs, const json& outputs) {
    json m{{"command", command}, {"flags", flags},   {"config", cfg.resolved()},
           {"inputs", inputs},   {"outputs", outputs}};
    fs::create_directories(out_dir + "/manifests");
    std::string key = sha256_hex(command + m["flags"].dump() + m["config"].dump()).substr(0, 16);
    write_file(out_dir + "/manifests/" + command + "-" + key + ".json", m.dump(2) + "\n");
}

Tensor<float> load_reference(const std::string& path, const std::string& classifier_path) {
    if (!file_exists(path)) throw PreconditionError("missing reference image: " + path);
    Tensor<float> img = from_png_rgb(read_png(path));
    std::string mask_path = path.substr(0, path.size() - 4) + "_mask.png";
    if (file_exists(mask_path)) return apply_background_mask(img, from_png_mask(read_png(mask_path)));
    if (file_exists(classifier_path)) {
        AttributeClassifier cls = load_classifier(classifier_path);
        return apply_background_mask(img, cls.localize(img));
    }
    return img;  // assume the caller already masked the background
}

int cmd_gen_data(const std::string& config_path) {
    RunConfig cfg = RunConfig::from_file(config_path);
    std::string out_dir = resolve_out_dir(cfg);
    DirLock lock(out_dir);
    std::string data_dir = out_dir + "/data";

    printf("[gen-data] pretraining reference encoder (%d steps)\n", cfg.data.psi_steps);
    ParamStore<float> psi_ps;
    RefEncoder<float> psi;
    pretrain_reference_encoder(cfg, psi_ps, psi);

    // identity separability gate: within-identity minus cross-identity
    // cosine over held-out renders must clear 0.2 before any identity metric
    // downstream can be trusted
    double separability = 0;
    {
        Rng srng(cfg.seed ^ 0x5e9aull);
        double within = 0, cross = 0;
        const int pairs = 100;
        for (int i = 0; i < pairs; ++i) {
            int id_a = 1'500'000 + (int)srng.below(2000), id_b = 1'500'000 + (int)srng.below(2000);
            while (id_b == id_a) id_b = 1'500'000 + (int)srng.below(2000);
            auto embed = [&](int id) {
                Render r = render_avatar(identity_from_id(id), random_attributes(srng), srng.next_u64());
                return psi_embedding(psi, psi_ps, apply_background_mask(r.image, r.mask));
            };
            within += cosine(embed(id_a), embed(id_a));
            cross += cosine(embed(id_a), embed(id_b));
        }
        separability = (within - cross) / pairs;
        printf("[gen-data] psi identity separability (within - cross cosine): %.4f\n", separability);
        if (separability < 0.2 && cfg.data.psi_steps >= 1000)
            throw PreconditionError("reference encoder separability " + std::to_string(separability) +
                                    " is below the 0.2 gate; identity metrics would be meaningless");
    }
    fs::create_directories(data_dir);
    save_checkpoint(data_dir + "/psi.ckpt", psi_ps, nullptr,
                    json{{"kind", "psi"}, {"separability", separability}});

    printf("[gen-data] training attribute classifier (%d steps)\n", cfg.data.classifier_steps);
    AttributeClassifier cls = train_attribute_classifier(cfg);
    printf("[gen-data] classifier held-out accuracy: %.4f\n", cls.held_out_accuracy);
    save_classifier(data_dir + "/classifier.ckpt", cls);

    printf("[gen-data] rendering %d identities x %d samples\n", cfg.data.n_identities, cfg.data.samples_per_identity);
    auto base = make_base_dataset(cfg.data.n_identities, cfg.data.samples_per_identity, cfg.seed);
    auto aug = make_augmented_dataset(base, default_edit_table(), cfg.data.sim_threshold, cfg.seed, psi, psi_ps);
    printf("[gen-data] %zu original, %zu augmented (filter kept %.1f%%)\n", base.size(), aug.size(),
           100.0 * (double)aug.size() / (double)base.size());

    std::vector<DatasetRecord> all = base;
    all.insert(all.end(), aug.begin(), aug.end());
    save_dataset(data_dir, all);
    write_file(data_dir + "/config.json", cfg.resolved().dump(2) + "\n");

    write_run_manifest(out_dir, "gen-data", json{{"config", config_path}}, cfg, json::object(),
                       json{{"manifest", file_sha256(data_dir + "/manifest.jsonl")},
                            {"psi", file_sha256(data_dir + "/psi.ckpt")},
                            {"classifier", file_sha256(data_dir + "/classifier.ckpt")},
                            {"originals", base.size()},
                            {"augmented", aug.size()}});
    printf("[gen-data] dataset at %s\n", data_dir.c_str());
    return 0;
}

struct LoadedData {
    std::vector<DatasetRecord> originals, augmented;
    std::vector<PromptPair> pairs;
};

LoadedData load_training_data(const std::string& data_dir) {
    if (!file_exists(data_dir + "/manifest.jsonl"))
        throw PreconditionError("missing dataset (run gen-data first): " + data_dir + "/manifest.jsonl");
    LoadedData d;
    for (auto& r : load_dataset(data_dir)) (r.augmented ? d.augmented : d.originals).push_back(std::move(r));
    d.pairs = parse_prompt_pairs(read_file(data_dir + "/prompt_pairs.tsv"));
    return d;
}

ModelBundle build_bundle(const RunConfig& cfg, const std::string& data_dir) {
    ModelBundle m;
    m.build(cfg);
    std::string psi_path = data_dir + "/psi.ckpt";
    if (!file_exists(psi_path)) throw PreconditionError("missing reference encoder checkpoint: " + psi_path);
    load_checkpoint(psi_path, m.ps, nullptr, /*partial=*/true);
    return m;
}

int cmd_train(const std::string& config_path, const std::string& stage_str, const std::string& resume,
              const std::string& ablation) {
    RunConfig cfg = RunConfig::from_file(config_path);
    std::string out_dir = resolve_out_dir(cfg);
    DirLock lock(out_dir);
    std::string data_dir = out_dir + "/data";
    LoadedData data = load_training_data(data_dir);
    ModelBundle model = build_bundle(cfg, data_dir);

    Stage stage = stage_str == "base" ? Stage::base : Stage::edit_finetune;
    std::string tag = stage == Stage::base ? "base" : ablation;
    std::string stage1 = out_dir + "/train/base.ckpt";
    if (stage == Stage::edit_finetune && resume.empty() && !file_exists(stage1))
        throw PreconditionError("edit stage requires the stage-1 checkpoint (missing artifact: " + stage1 + ")");

    printf("[train] stage=%s tag=%s iterations=%d batch=%d\n", stage_name(stage), tag.c_str(),
           stage == Stage::base ? cfg.train.stage1.iterations : cfg.train.stage2.iterations, cfg.train.batch_size);
    StageResult res = run_stage(model, stage, data.originals, data.augmented, data.pairs, out_dir + "/train", tag,
                                ablation, resume, stage1);
    write_run_manifest(out_dir, "train",
                       json{{"config", config_path}, {"stage", stage_str}, {"resume", resume}, {"ablation", ablation}},
                       cfg, json{{"dataset", file_sha256(data_dir + "/manifest.jsonl")}},
                       json{{"checkpoint", res.checkpoint_path}, {"checkpoint_sha256", file_sha256(res.checkpoint_path)}});
    printf("[train] checkpoint: %s\n", res.checkpoint_path.c_str());
    return 0;
}

int cmd_sample(const std::string& config_path, const std::string& ckpt, const std::string& prompt,
               const std::vector<std::string>& refs, double lambda, double scale, int steps, uint64_t seed,
               const std::string& sampler, const std::string& out_name) {
    RunConfig cfg = RunConfig::from_file(config_path);
    std::string out_dir = resolve_out_dir(cfg);
    DirLock lock(out_dir);
    if (!file_exists(ckpt)) throw PreconditionError("missing checkpoint: " + ckpt);

    ModelBundle model;
    model.build(cfg);
    load_checkpoint(ckpt, model.ps, nullptr);

    SampleSpec spec;
    spec.prompt = parse_prompt(prompt);  // grammar errors carry the position
    spec.lambda = lambda;
    spec.guidance.scale = scale;
    spec.guidance.steps = steps;
    spec.guidance.sampler_kind = sampler == "ddpm" ? SamplerKind::ancestral_ddpm : SamplerKind::deterministic_ddim;
    spec.seed = seed;

    json ref_info = json::array();
    if (!refs.empty()) {
        std::vector<IdentityFeature<float>> feats;
        for (const auto& r : refs) {
            feats.push_back(model.encode_reference_feature(load_reference(r, out_dir + "/data/classifier.ckpt")));
            ref_info.push_back(json{{"path", r}, {"sha256", file_sha256(r)}});
        }
        spec.id_feature = concat_references(feats).f;  // token-dimension concat
    }

    Tensor<float> img = model.generate(spec);
    fs::create_directories(out_dir + "/samples");
    std::string png_path = out_dir + "/samples/" + out_name;
    write_png(png_path, to_png_rgb(img, kImageSize));
    json sidecar{{"prompt", prompt},
                 {"lambda", lambda},
                 {"scale", scale},
                 {"steps", steps},
                 {"seed", seed},
                 {"sampler", sampler},
                 {"checkpoint", ckpt},
                 {"checkpoint_sha256", file_sha256(ckpt)},
                 {"refs", ref_info},
                 {"image_sha256", file_sha256(png_path)}};
    write_file(png_path + ".json", sidecar.dump(2) + "\n");
    write_run_manifest(out_dir, "sample",
                       json{{"prompt", prompt}, {"seed", seed}, {"lambda", lambda}, {"scale", scale},
                            {"steps", steps}, {"sampler", sampler}, {"out", out_name}},
                       cfg, json{{"checkpoint", sidecar["checkpoint_sha256"]}},
                       json{{"image", png_path}, {"image_sha256", sidecar["image_sha256"]}});
    printf("[sample] wrote %s\n", png_path.c_str());
    return 0;
}

int cmd_eval(const std::string& config_path, const std::string& suite, const std::string& ckpt,
             const std::map<std::string, std::string>& ablation_ckpts) {
    RunConfig cfg = RunConfig::from_file(config_path);
    std::string out_dir = resolve_out_dir(cfg);
    DirLock lock(out_dir);
    std::string data_dir = out_dir + "/data";
    std::string cls_path = data_dir + "/classifier.ckpt";
    if (!file_exists(cls_path)) throw PreconditionError("missing classifier checkpoint: " + cls_path);
    AttributeClassifier cls = load_classifier(cls_path);
    fs::create_directories(out_dir + "/eval");
    GuidanceConfig g = cfg.sample.guidance();

    json report;
    std::vector<std::string> outputs;
    auto bundle_for = [&](const std::string& path) {
        if (!file_exists(path)) throw PreconditionError("missing checkpoint: " + path);
        ModelBundle m = build_bundle(cfg, data_dir);
        json meta = load_checkpoint(path, m.ps, nullptr);
        return std::pair<ModelBundle, json>(std::move(m), std::move(meta));
    };

    if (suite == "metrics") {
        auto [model, meta] = bundle_for(ckpt);
        EvalSet es = build_eval_set(cfg, model);
        bool base = meta.value("stage", "") == "base";
        MetricsReport r = run_metrics(model, cls, es, cfg.sample.lambda, g, /*use_identity=*/!base);
        report = r.to_json();
        report["checkpoint"] = ckpt;
        report["checkpoint_sha256"] = file_sha256(ckpt);
        report["baseline_text_only"] = base;
    } else if (suite == "lambda") {
        auto [model, meta] = bundle_for(ckpt);
        EvalSet es = build_eval_set(cfg, model);
        auto rows = lambda_sweep(model, cls, es, g);
        Series sim{"id_sim", {}, {}}, attr{"attr_success", {}, {}};
        report["rows"] = json::array();
        std::vector<double> lam, simv, attrv;
        for (auto& r : rows) {
            json row = r.report.to_json();
            row["lambda"] = r.x;
            report["rows"].push_back(row);
            sim.x.push_back(r.x);
            sim.y.push_back(r.report.id_sim_same);
            attr.x.push_back(r.x);
            attr.y.push_back(r.report.attr_success);
            if (r.x > 0) { lam.push_back(r.x); simv.push_back(r.report.id_sim_same); attrv.push_back(r.report.attr_success); }
        }
        report["spearman_lambda_id_sim"] = spearman(lam, simv);
        report["spearman_lambda_attr"] = spearman(lam, attrv);
        plot_lines(out_dir + "/eval/lambda_sweep.png", {sim, attr}, "lambda sweep");
        outputs.push_back(out_dir + "/eval/lambda_sweep.png");
    } else if (suite == "refs") {
        auto [model, meta] = bundle_for(ckpt);
        EvalSet es = build_eval_set(cfg, model);
        auto rows = reference_count_sweep(model, cls, es, g);
        Series sim{"id_sim", {}, {}};
        report["rows"] = json::array();
        std::vector<double> k, v;
        for (auto& r : rows) {
            json row = r.report.to_json();
            row["references"] = r.x;  // -1 marks the duplicated-single row
            report["rows"].push_back(row);
            if (r.x > 0) {
                sim.x.push_back(r.x);
                sim.y.push_back(r.report.id_sim_same);
                k.push_back(r.x);
                v.push_back(r.report.id_sim_same);
            }
        }
        report["spearman_refs_id_sim"] = spearman(k, v);
        plot_lines(out_dir + "/eval/reference_sweep.png", {sim}, "reference count sweep");
        outputs.push_back(out_dir + "/eval/reference_sweep.png");
    } else if (suite == "ablation") {
        for (const auto& [k2, v2] : ablation_ckpts)
            if (v2.empty())
                throw PreconditionError("ablation suite: missing checkpoint for variant '" + k2 + "'");
        auto rows = ablation_suite(cfg, ablation_ckpts, cls);
        report["rows"] = json::array();
        std::vector<std::string> labels;
        std::vector<double> attr, sim;
        for (auto& r : rows) {
            json row = r.report.to_json();
            row["variant"] = r.variant;
            report["rows"].push_back(row);
            labels.push_back(r.variant);
            attr.push_back(r.report.attr_success);
            sim.push_back(r.report.id_sim_same);
        }
        plot_bars(out_dir + "/eval/ablation_attr.png", labels, attr, "attr success by variant");
        plot_bars(out_dir + "/eval/ablation_idsim.png", labels, sim, "id similarity by variant");
        outputs.push_back(out_dir + "/eval/ablation_attr.png");
        outputs.push_back(out_dir + "/eval/ablation_idsim.png");
    } else {
        throw ConfigError("unknown eval suite: " + suite);
    }

    report["suite"] = suite;
    report["config_fingerprint"] = sha256_hex(cfg.resolved().dump()).substr(0, 16);
    report["classifier_fingerprint"] = cls.fingerprint().substr(0, 16);
    report["classifier_accuracy"] = cls.held_out_accuracy;
    std::string rpt = out_dir + "/eval/" + suite + "_report.json";
    write_file(rpt, report.dump(2) + "\n");
    write_run_manifest(out_dir, "eval", json{{"suite", suite}, {"checkpoint", ckpt}}, cfg, json::object(),
                       json{{"report", rpt}, {"report_sha256", file_sha256(rpt)}});
    printf("[eval] report: %s\n", rpt.c_str());
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"idfuse: identity-conditioned avatar diffusion testbed"};
    app.require_subcommand(1);

    std::string config_path, stage = "base", resume, ablation = "full";
    std::string prompt, ckpt, sampler = "ddim", out_name = "sample.png", suite = "metrics";
    std::vector<std::string> refs;
    double lambda = 1.0, scale = 5.0;
    int steps = 50;
    uint64_t seed = 0;
    std::map<std::string, std::string> ab_ckpts = {{"full", ""}, {"no_edit", ""}, {"no_disen", ""}, {"no_aug", ""}};

    auto* gen = app.add_subcommand("gen-data", "generate the avatar dataset (and its frozen encoders)");
    gen->add_option("--config", config_path)->required();

    auto* tr = app.add_subcommand("train", "run one training stage");
    tr->add_option("--config", config_path)->required();
    tr->add_option("--stage", stage)->check(CLI::IsMember({"base", "edit"}));
    tr->add_option("--resume", resume);
    tr->add_option("--ablation", ablation)->check(CLI::IsMember({"full", "no_edit", "no_disen", "no_aug"}));

    auto* sm = app.add_subcommand("sample", "generate images from a checkpoint");
    sm->add_option("--config", config_path)->required();
    sm->add_option("--checkpoint", ckpt)->required();
    sm->add_option("--prompt", prompt)->required();
    sm->add_option("--ref", refs);
    sm->add_option("--lambda", lambda);
    sm->add_option("--scale", scale);
    sm->add_option("--steps", steps);
    sm->add_option("--seed", seed);
    sm->add_option("--sampler", sampler)->check(CLI::IsMember({"ddim", "ddpm"}));
    sm->add_option("--out", out_name);

    auto* ev = app.add_subcommand("eval", "run an evaluation suite");
    ev->add_option("--config", config_path)->required();
    ev->add_option("--suite", suite)->check(CLI::IsMember({"metrics", "lambda", "refs", "ablation"}));
    ev->add_option("--checkpoint", ckpt);
    ev->add_option("--ckpt-full", ab_ckpts["full"]);
    ev->add_option("--ckpt-no-edit", ab_ckpts["no_edit"]);
    ev->add_option("--ckpt-no-disen", ab_ckpts["no_disen"]);
    ev->add_option("--ckpt-no-aug", ab_ckpts["no_aug"]);

    try {
        app.parse(argc, argv);
        if (gen->parsed()) return cmd_gen_data(config_path);
        if (tr->parsed()) return cmd_train(config_path, stage, resume, ablation);
        if (sm->parsed())
            return cmd_sample(config_path, ckpt, prompt, refs, lambda, scale, steps, seed, sampler, out_name);
        if (ev->parsed()) return cmd_eval(config_path, suite, ckpt, ab_ckpts);
    } catch (const CLI::ParseError& e) {
        int rc = app.exit(e);
        return rc == 0 ? 0 : 2;
    } catch (const ConfigError& e) {
        fprintf(stderr, "error: %s\n", e.what());
        return 2;
    } catch (const PreconditionError& e) {
        fprintf(stderr, "error: %s\n", e.what());
        return 3;
    } catch (const NumericError& e) {
        fprintf(stderr, "numeric failure: %s\n", e.what());
        return 4;
    } catch (const std::exception& e) {
        // parse errors from the prompt grammar and config loading are
        // validation failures; anything unexpected is also reported as such
        std::string msg = e.what();
        fprintf(stderr, "error: %s\n", msg.c_str());
        if (msg.find("missing") != std::string::npos || msg.find("requires") != std::string::npos ||
            msg.find("below gate") != std::string::npos || msg.find("insufficient") != std::string::npos)
            return 3;
        return 2;
    }
    return 0;
}
