#pragma once

#include <json.hpp>

#include "denoiser.hpp"
#include "schedule.hpp"

namespace idfuse {

using json = nlohmann::json;

// ---------------------------------------------------------------------------
// One config file drives every command. Parsing is strict: unknown keys and
// out-of-range values are hard errors naming the offending field.
// ---------------------------------------------------------------------------

struct DataConfig {
    int n_identities = 1000;
    int samples_per_identity = 5;
    double sim_threshold = 0.8;
    double mix_ratio = 0.36;  // probability a training draw is augmented
    int psi_steps = 3000, psi_batch = 64;
    double psi_lr = 3e-4;
    int classifier_steps = 3000, classifier_batch = 64;
    double classifier_lr = 3e-4;
};

struct TrainStageConfig {
    int iterations = 0;
    double lr = 1e-4;
};

struct TrainConfig {
    int batch_size = 16;
    double weight_decay = 0.01;
    double clip_norm = 1.0;
    TrainStageConfig stage1{20000, 1e-4};
    TrainStageConfig stage2{4000, 1e-4};
    double drop_text_p = 0.05, drop_image_p = 0.05, drop_both_p = 0.05;
    double lambda_edit = 0.01, lambda_disen = 1.0;
    int edit_samples = 4;  // batch slice the editing loss runs on
    std::vector<std::string> tapped_blocks = {"up1"};
    bool deterministic = true;
    int log_every = 50;
    int checkpoint_every = 2000;
};

struct SampleConfig {
    int steps = 50;
    double scale = 5.0;
    double lambda = 1.0;
    std::string sampler = "ddim";  // ddim | ddpm

    GuidanceConfig guidance() const {
        GuidanceConfig g;
        g.steps = steps;
        g.scale = scale;
        g.sampler_kind = sampler == "ddpm" ? SamplerKind::ancestral_ddpm : SamplerKind::deterministic_ddim;
        return g;
    }
};

struct EvalConfig {
    int identities = 16;
    int refs_per_identity = 4;
    int attr_prompts_per_identity = 4;
    int bg_prompts_per_identity = 2;
    uint64_t seed = 500;
    double attr_success_min = 0.6;  // acceptance thresholds, frozen here
    double id_gap_min = 0.15;
};

struct ScheduleConfig {
    int timesteps = 1000;
    double beta_min = 1e-4;
    double beta_max = 0.02;
};

struct RunConfig {
    int schema_version = 1;
    uint64_t seed = 1234;
    std::string out_dir = "out";
    ScheduleConfig schedule;
    DenoiserConfig model;
    CondConfig conditioning;
    DataConfig data;
    TrainConfig train;
    SampleConfig sample;
    EvalConfig eval;

    static RunConfig from_json(const json& j);
    static RunConfig from_file(const std::string& path);
    json resolved() const;  // full config echo with every default filled in
};

// thrown for malformed configs; CLI maps it to exit code 2
struct ConfigError : std::runtime_error {
    explicit ConfigError(const std::string& m) : std::runtime_error(m) {}
};

}  // namespace idfuse
