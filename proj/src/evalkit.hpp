#pragma once

#include "trainer.hpp"

namespace idfuse {

// ---------------------------------------------------------------------------
// Evaluation oracles and harnesses. The synthetic domain has ground truth,
// so text alignment is scored by a frozen attribute classifier and identity
// fidelity by the frozen reference encoder over localized face crops; both
// are toy analogs of the paper-scale metrics, reported under their own
// names.
// ---------------------------------------------------------------------------

struct AttributeClassifier {
    ParamStore<float> ps;
    Conv2d<float> c1, c2, c3;
    GroupNorm<float> g1, g2, g3;
    std::vector<Linear<float>> heads;  // hair_color, hair_length, expression, eyewear, background
    Conv2d<float> loc1, loc2, loc3;
    double held_out_accuracy = 0;

    void init(Rng& rng);
    Var<float> trunk(Tape<float>& t, Var<float> image);  // (64, 8*8)
    Var<float> head_logits(Tape<float>& t, Var<float> feat, int coord);
    Var<float> mask_logits(Tape<float>& t, Var<float> feat);  // (1, 32*32)

    AttributeVector classify(const Tensor<float>& image01);
    Tensor<float> localize(const Tensor<float>& image01);  // binary (1024)
    std::string fingerprint() const { return ps.fingerprint(); }
};

// trains on fresh renders with ground-truth labels; holds out unseen
// identities to measure the gate accuracy
AttributeClassifier train_attribute_classifier(const RunConfig& cfg, const std::string& metrics_path = "");
void save_classifier(const std::string& path, const AttributeClassifier& c);
AttributeClassifier load_classifier(const std::string& path);

inline constexpr double kClassifierGate = 0.95;
inline constexpr double kFaceAreaMin = 0.04;  // of the image

// ---------------------------------------------------------------------------

struct EvalItem {
    int identity_ord = 0;
    std::string category;  // attribute | background | general
    int target_coord = -1;
    int target_value = -1;
    CaptionTokens prompt;
    std::string prompt_text;
    uint64_t gen_seed = 0;
};

struct EvalSet {
    std::vector<int> identity_ids;                   // held-out ids
    std::vector<std::string> class_word;             // per identity
    std::vector<std::vector<Render>> refs;           // per identity renders
    std::vector<std::vector<AttributeVector>> ref_attrs;
    std::vector<Tensor<float>> ref_masked;           // primary reference, background-masked
    std::vector<Tensor<float>> ref_embedding;        // psi embedding of the primary reference
    std::vector<EvalItem> items;
};

EvalSet build_eval_set(const RunConfig& cfg, ModelBundle& model);

// fraction of images whose predicted value matches the target coordinate;
// errors on an empty list or when the classifier is below its gate
double attribute_success(AttributeClassifier& cls, const std::vector<Tensor<float>>& images,
                         const std::vector<std::pair<int, int>>& targets);

// mean cosine between psi embeddings of localized face crops and the
// reference embedding; undetected faces score 0 and are flagged
double identity_similarity(ModelBundle& model, AttributeClassifier& cls, const std::vector<Tensor<float>>& images,
                           const Tensor<float>& reference_embedding, int* flagged = nullptr);

struct MetricsReport {
    double attr_success = 0;  // over attribute + background prompts
    double attr_success_attribute = 0, attr_success_background = 0;
    double face_rate_general = 0;
    double id_sim_same = 0, id_sim_cross = 0, id_gap = 0;
    double flagged_fraction = 0;
    int n_images = 0;
    json to_json() const;
};

// generates one image per eval item and scores it. use_identity=false
// evaluates the bare text model (the baseline row). refs_per_item > 1
// concatenates that many reference features along the token dimension;
// duplicate_single_ref repeats the primary reference instead.
MetricsReport run_metrics(ModelBundle& model, AttributeClassifier& cls, const EvalSet& es, double lambda,
                          const GuidanceConfig& g, bool use_identity = true, int refs_per_item = 1,
                          bool duplicate_single_ref = false);

double spearman(const std::vector<double>& x, const std::vector<double>& y);

struct SweepRow {
    double x = 0;
    MetricsReport report;
};

// lambda in {0.0, 0.1, ..., 1.0}; the 0 row is the identity-branch-inert baseline
std::vector<SweepRow> lambda_sweep(ModelBundle& model, AttributeClassifier& cls, const EvalSet& es,
                                   const GuidanceConfig& g);
// k = 1..refs_per_identity references, plus a duplicated-single row at x = -1
std::vector<SweepRow> reference_count_sweep(ModelBundle& model, AttributeClassifier& cls, const EvalSet& es,
                                            const GuidanceConfig& g);

struct AblationRow {
    std::string variant;
    MetricsReport report;
};
// variants: full, no_edit, no_disen, no_aug; errors if a checkpoint is
// missing or the configs differ beyond the ablated component
std::vector<AblationRow> ablation_suite(const RunConfig& cfg, const std::map<std::string, std::string>& ckpts,
                                        AttributeClassifier& cls);

}  // namespace idfuse
