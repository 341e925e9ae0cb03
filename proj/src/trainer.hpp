#pragma once

#include "config.hpp"
#include "dataset.hpp"
#include "losses.hpp"
#include "serialize.hpp"

namespace idfuse {

// ---------------------------------------------------------------------------
// Two-stage training:
//   stage 1 (base)          trains the text backbone, text encoder and the
//                           identity path jointly with the reconstruction
//                           loss on original records only.
//   stage 2 (edit_finetune) freezes the backbone and text encoder (they are
//                           the "base model" the editing directions align
//                           against) and finetunes the identity path with
//                           reconstruction + editing-direction + background-
//                           disentanglement losses on the mixed dataset.
// All randomness flows through one stream that is checkpointed, so resumed
// runs replay the uninterrupted run bit-for-bit.
// ---------------------------------------------------------------------------

enum class Stage { base, edit_finetune };

inline const char* stage_name(Stage s) { return s == Stage::base ? "base" : "edit_finetune"; }

struct SampleSpec {
    CaptionTokens prompt;
    std::optional<Tensor<float>> id_feature;  // (N, d_ctx), token-concatenated refs
    double lambda = 1.0;
    GuidanceConfig guidance;
    uint64_t seed = 0;
};

struct ModelBundle {
    RunConfig cfg;
    ParamStore<float> ps;
    TextEncoder<float> txt;
    RefEncoder<float> psi;
    IdMapper<float> idmap;
    Denoiser<float> dn;
    NoiseSchedule sched;

    void build(const RunConfig& c);

    // identity feature of a background-masked reference, as data
    IdentityFeature<float> encode_reference_feature(const Tensor<float>& ref_masked);
    // same path but on a tape, so the ID mapper receives gradients
    Var<float> reference_feature_graph(Tape<float>& t, const Tensor<float>& ref_masked);

    // eps prediction closures with CFG null conditions, then the sampler.
    // Returned image lives in [0,1].
    Tensor<float> generate(const SampleSpec& spec);
};

void set_stage_trainables(ParamStore<float>& ps, Stage stage);

// identity-path parameter: ID mapper, the per-block identity projections,
// or the learned null identity tokens
bool is_identity_path_param(const std::string& name);

// "base model" = everything the editing direction targets are computed
// with: UNet backbone minus identity projections, text encoder, text null
std::string base_model_fingerprint(const ParamStore<float>& ps);
std::string psi_fingerprint(const ParamStore<float>& ps);

struct StepMetrics {
    int64_t iter = 0;
    double rec = 0;
    std::optional<double> edit;
    std::optional<double> disen;
    double total = 0;
    double lr = 0;
    double grad_norm = 0;
    std::string dropout_category;
    json to_json() const;
};

struct TrainState {
    ModelBundle* model = nullptr;
    Stage stage = Stage::base;
    const std::vector<DatasetRecord>* originals = nullptr;
    const std::vector<DatasetRecord>* augmented = nullptr;
    const std::vector<PromptPair>* prompt_pairs = nullptr;
    double mix_ratio = 0;
    AdamW<float> opt;
    Rng rng;
    int64_t iter = 0;
    std::vector<std::string> taps;
    LossWeights weights;
    int edit_samples = 4;
};

// dropout category for one step: 0=none, 1=drop text, 2=drop image, 3=both
int draw_dropout_category(Rng& rng, const TrainConfig& tc);

// one optimizer step over a drawn batch; `forced_category` bypasses the
// dropout draw for tests
StepMetrics train_step(TrainState& st, std::optional<int> forced_category = std::nullopt);

struct StageResult {
    std::string checkpoint_path;
    std::string metrics_path;
};

// `ablation` tags the checkpoint and zeroes the matching mechanism:
//   full | no_edit | no_disen | no_aug
StageResult run_stage(ModelBundle& model, Stage stage, const std::vector<DatasetRecord>& originals,
                      const std::vector<DatasetRecord>& augmented, const std::vector<PromptPair>& pairs,
                      const std::string& out_dir, const std::string& tag, const std::string& ablation = "full",
                      const std::string& resume_path = "", const std::string& stage1_checkpoint = "");

// reference-encoder pretraining (identity classification over fresh renders);
// returns the trained psi parameters in a standalone store
void pretrain_reference_encoder(const RunConfig& cfg, ParamStore<float>& psi_ps, RefEncoder<float>& psi,
                                const std::string& metrics_path = "");

// thrown when a loss goes non-finite; carries the diagnostic dump
struct NumericError : std::runtime_error {
    explicit NumericError(const std::string& m) : std::runtime_error(m) {}
};

inline Tensor<float> to_model_range(const Tensor<float>& img01) {
    Tensor<float> out = img01;
    for (auto& v : out.data) v = v * 2.0f - 1.0f;
    return out;
}
inline Tensor<float> to_image_range(const Tensor<float>& pm1) {
    Tensor<float> out = pm1;
    for (auto& v : out.data) v = std::clamp((v + 1.0f) / 2.0f, 0.0f, 1.0f);
    return out;
}

}  // namespace idfuse
