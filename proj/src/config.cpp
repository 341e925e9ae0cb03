#include "config.hpp"

#include <set>

#include "pngio.hpp"

namespace idfuse {

namespace {

struct Section {
    const json& j;
    std::string path;
    mutable std::set<std::string> seen;

    Section(const json& j_, std::string p) : j(j_), path(std::move(p)) {
        if (!j.is_object()) throw ConfigError("config: " + path + " must be an object");
    }
    ~Section() = default;

    template <typename T>
    void get(const char* key, T& out) const {
        seen.insert(key);
        if (!j.contains(key)) return;
        try {
            out = j.at(key).get<T>();
        } catch (const std::exception&) {
            throw ConfigError("config: bad value for " + path + "." + key);
        }
    }
    bool has(const char* key) const {
        seen.insert(key);
        return j.contains(key);
    }
    void finish() const {
        for (auto it = j.begin(); it != j.end(); ++it)
            if (!seen.count(it.key())) throw ConfigError("config: unknown key " + path + "." + it.key());
    }
};

void require(bool ok, const std::string& field, const std::string& what) {
    if (!ok) throw ConfigError("config: " + field + " " + what);
}

}  // namespace

RunConfig RunConfig::from_json(const json& j) {
    RunConfig c;
    Section root(j, "");
    root.get("schema_version", c.schema_version);
    require(c.schema_version == 1, "schema_version", "must be 1");
    root.get("seed", c.seed);
    root.get("out_dir", c.out_dir);
    require(!c.out_dir.empty(), "out_dir", "must not be empty");

    if (root.has("schedule")) {
        Section s(j.at("schedule"), "schedule");
        s.get("timesteps", c.schedule.timesteps);
        s.get("beta_min", c.schedule.beta_min);
        s.get("beta_max", c.schedule.beta_max);
        s.finish();
        require(c.schedule.timesteps >= 2, "schedule.timesteps", "must be >= 2");
        require(c.schedule.beta_min > 0 && c.schedule.beta_min <= c.schedule.beta_max && c.schedule.beta_max < 1,
                "schedule.beta_min/beta_max", "must satisfy 0 < beta_min <= beta_max < 1");
    }
    if (root.has("model")) {
        Section s(j.at("model"), "model");
        s.get("widths", c.model.widths);
        s.get("d_ctx", c.model.d_ctx);
        s.get("temb_dim", c.model.temb_dim);
        s.get("groups", c.model.groups);
        s.finish();
        require(c.model.widths.size() == 3, "model.widths", "must list 3 resolutions");
        for (int w : c.model.widths)
            require(w > 0 && w % c.model.groups == 0, "model.widths", "must be positive multiples of model.groups");
    }
    if (root.has("conditioning")) {
        Section s(j.at("conditioning"), "conditioning");
        s.get("n_id_tokens", c.conditioning.n_id_tokens);
        s.get("d_psi", c.conditioning.d_psi);
        s.finish();
        require(c.conditioning.n_id_tokens == 16, "conditioning.n_id_tokens", "must be 16 (4x4 patch grid)");
    }
    c.conditioning.d_ctx = c.model.d_ctx;
    c.model.n_id_tokens = c.conditioning.n_id_tokens;
    c.conditioning.psi_ids = c.data.n_identities;

    if (root.has("data")) {
        Section s(j.at("data"), "data");
        s.get("n_identities", c.data.n_identities);
        s.get("samples_per_identity", c.data.samples_per_identity);
        s.get("sim_threshold", c.data.sim_threshold);
        s.get("mix_ratio", c.data.mix_ratio);
        s.get("psi_steps", c.data.psi_steps);
        s.get("psi_batch", c.data.psi_batch);
        s.get("psi_lr", c.data.psi_lr);
        s.get("classifier_steps", c.data.classifier_steps);
        s.get("classifier_batch", c.data.classifier_batch);
        s.get("classifier_lr", c.data.classifier_lr);
        s.finish();
        require(c.data.n_identities >= 1, "data.n_identities", "must be >= 1");
        require(c.data.samples_per_identity >= 1, "data.samples_per_identity", "must be >= 1");
        require(c.data.mix_ratio >= 0.0 && c.data.mix_ratio <= 1.0, "data.mix_ratio", "must be in [0,1]");
        c.conditioning.psi_ids = c.data.n_identities;
    }
    if (root.has("train")) {
        Section s(j.at("train"), "train");
        s.get("batch_size", c.train.batch_size);
        s.get("weight_decay", c.train.weight_decay);
        s.get("clip_norm", c.train.clip_norm);
        if (s.has("stage1")) {
            Section s1(j.at("train").at("stage1"), "train.stage1");
            s1.get("iterations", c.train.stage1.iterations);
            s1.get("lr", c.train.stage1.lr);
            s1.finish();
        }
        if (s.has("stage2")) {
            Section s2(j.at("train").at("stage2"), "train.stage2");
            s2.get("iterations", c.train.stage2.iterations);
            s2.get("lr", c.train.stage2.lr);
            s2.finish();
        }
        s.get("drop_text_p", c.train.drop_text_p);
        s.get("drop_image_p", c.train.drop_image_p);
        s.get("drop_both_p", c.train.drop_both_p);
        s.get("lambda_edit", c.train.lambda_edit);
        s.get("lambda_disen", c.train.lambda_disen);
        s.get("edit_samples", c.train.edit_samples);
        s.get("tapped_blocks", c.train.tapped_blocks);
        s.get("deterministic", c.train.deterministic);
        s.get("log_every", c.train.log_every);
        s.get("checkpoint_every", c.train.checkpoint_every);
        s.finish();
        require(c.train.batch_size >= 1, "train.batch_size", "must be >= 1");
        require(c.train.drop_text_p >= 0 && c.train.drop_image_p >= 0 && c.train.drop_both_p >= 0,
                "train.drop_*_p", "must be >= 0");
        require(c.train.drop_text_p + c.train.drop_image_p + c.train.drop_both_p <= 1.0, "train.drop_*_p",
                "must sum to <= 1");
        require(c.train.lambda_edit >= 0 && c.train.lambda_disen >= 0, "train.lambda_*", "must be >= 0");
        require(c.train.edit_samples >= 1, "train.edit_samples", "must be >= 1");
        require(!c.train.tapped_blocks.empty(), "train.tapped_blocks", "must not be empty");
    }
    if (root.has("sample")) {
        Section s(j.at("sample"), "sample");
        s.get("steps", c.sample.steps);
        s.get("scale", c.sample.scale);
        s.get("lambda", c.sample.lambda);
        s.get("sampler", c.sample.sampler);
        s.finish();
        require(c.sample.steps >= 1 && c.sample.steps <= c.schedule.timesteps, "sample.steps",
                "must be in [1, schedule.timesteps]");
        require(c.sample.scale >= 0, "sample.scale", "must be >= 0");
        require(c.sample.lambda >= 0, "sample.lambda", "must be >= 0");
        require(c.sample.sampler == "ddim" || c.sample.sampler == "ddpm", "sample.sampler",
                "must be 'ddim' or 'ddpm'");
    }
    if (root.has("eval")) {
        Section s(j.at("eval"), "eval");
        s.get("identities", c.eval.identities);
        s.get("refs_per_identity", c.eval.refs_per_identity);
        s.get("attr_prompts_per_identity", c.eval.attr_prompts_per_identity);
        s.get("bg_prompts_per_identity", c.eval.bg_prompts_per_identity);
        s.get("seed", c.eval.seed);
        s.get("attr_success_min", c.eval.attr_success_min);
        s.get("id_gap_min", c.eval.id_gap_min);
        s.finish();
        require(c.eval.identities >= 1, "eval.identities", "must be >= 1");
        require(c.eval.refs_per_identity >= 1, "eval.refs_per_identity", "must be >= 1");
    }
    root.finish();
    return c;
}

RunConfig RunConfig::from_file(const std::string& path) {
    json j;
    try {
        j = json::parse(read_file(path));
    } catch (const json::parse_error& e) {
        throw ConfigError("config: invalid JSON in " + path + ": " + e.what());
    }
    return from_json(j);
}

json RunConfig::resolved() const {
    return json{
        {"schema_version", schema_version},
        {"seed", seed},
        {"out_dir", out_dir},
        {"schedule", {{"timesteps", schedule.timesteps}, {"beta_min", schedule.beta_min}, {"beta_max", schedule.beta_max}}},
        {"model",
         {{"widths", model.widths}, {"d_ctx", model.d_ctx}, {"temb_dim", model.temb_dim}, {"groups", model.groups}}},
        {"conditioning", {{"n_id_tokens", conditioning.n_id_tokens}, {"d_psi", conditioning.d_psi}}},
        {"data",
         {{"n_identities", data.n_identities},
          {"samples_per_identity", data.samples_per_identity},
          {"sim_threshold", data.sim_threshold},
          {"mix_ratio", data.mix_ratio},
          {"psi_steps", data.psi_steps},
          {"psi_batch", data.psi_batch},
          {"psi_lr", data.psi_lr},
          {"classifier_steps", data.classifier_steps},
          {"classifier_batch", data.classifier_batch},
          {"classifier_lr", data.classifier_lr}}},
        {"train",
         {{"batch_size", train.batch_size},
          {"weight_decay", train.weight_decay},
          {"clip_norm", train.clip_norm},
          {"stage1", {{"iterations", train.stage1.iterations}, {"lr", train.stage1.lr}}},
          {"stage2", {{"iterations", train.stage2.iterations}, {"lr", train.stage2.lr}}},
          {"drop_text_p", train.drop_text_p},
          {"drop_image_p", train.drop_image_p},
          {"drop_both_p", train.drop_both_p},
          {"lambda_edit", train.lambda_edit},
          {"lambda_disen", train.lambda_disen},
          {"edit_samples", train.edit_samples},
          {"tapped_blocks", train.tapped_blocks},
          {"deterministic", train.deterministic},
          {"log_every", train.log_every},
          {"checkpoint_every", train.checkpoint_every}}},
        {"sample",
         {{"steps", sample.steps}, {"scale", sample.scale}, {"lambda", sample.lambda}, {"sampler", sample.sampler}}},
        {"eval",
         {{"identities", eval.identities},
          {"refs_per_identity", eval.refs_per_identity},
          {"attr_prompts_per_identity", eval.attr_prompts_per_identity},
          {"bg_prompts_per_identity", eval.bg_prompts_per_identity},
          {"seed", eval.seed},
          {"attr_success_min", eval.attr_success_min},
          {"id_gap_min", eval.id_gap_min}}},
    };
}

}  // namespace idfuse
