#pragma once

#include <json.hpp>

#include "conditioning.hpp"

namespace idfuse {

// ---------------------------------------------------------------------------
// Training dataset over the avatar domain. Original records pair an image
// with itself as the identity reference (background-masked); augmented
// records re-render the reference with exactly one facial attribute changed
// and keep the original input image and caption, filtered by reference-
// encoder similarity.
// ---------------------------------------------------------------------------

struct DatasetRecord {
    int index = 0;
    int identity_id = 0;
    std::string class_word;
    AttributeVector attrs;      // input image attributes
    AttributeVector ref_attrs;  // reference attributes (== attrs for originals)
    CaptionTokens caption;
    std::string caption_text;
    Tensor<float> image;      // (3, 1024) in [0,1]
    Tensor<float> mask;       // (1024) binary face+hair mask of the input
    Tensor<float> ref_image;  // (3, 1024) background-masked reference
    Tensor<float> ref_mask;   // (1024) mask of the reference render
    bool augmented = false;
    std::string edited_attribute;  // empty for originals
    double similarity = 1.0;
    uint64_t render_seed = 0;
};

std::vector<DatasetRecord> make_base_dataset(int n_identities, int samples_per_identity, uint64_t seed,
                                             const MentionPolicy& policy = {});

// editable attribute coordinates; the background is not a face attribute and
// is rejected at construction
struct EditTable {
    std::vector<int> coords;
    explicit EditTable(std::vector<int> c);
};
EditTable default_edit_table();

std::vector<DatasetRecord> make_augmented_dataset(const std::vector<DatasetRecord>& base, const EditTable& edits,
                                                  double sim_threshold, uint64_t seed, const RefEncoder<float>& psi,
                                                  ParamStore<float>& psi_params);

// stream over the two pools: each draw is augmented with probability `ratio`
struct MixSampler {
    const std::vector<DatasetRecord>* original = nullptr;
    const std::vector<DatasetRecord>* augmented = nullptr;
    double ratio = 0.0;

    MixSampler(const std::vector<DatasetRecord>& orig, const std::vector<DatasetRecord>& aug, double ratio_);
    const DatasetRecord& draw(Rng& rng) const;
};

nlohmann::json record_manifest(const DatasetRecord& r);

// directory layout: manifest.jsonl, vocab.txt, prompt_pairs.tsv and one PNG
// per image/mask/reference
void save_dataset(const std::string& dir, const std::vector<DatasetRecord>& records);
std::vector<DatasetRecord> load_dataset(const std::string& dir);

}  // namespace idfuse
