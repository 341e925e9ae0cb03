#include "dataset.hpp"

#include <filesystem>

#include "pngio.hpp"

namespace idfuse {

namespace fs = std::filesystem;
using json = nlohmann::json;

std::vector<DatasetRecord> make_base_dataset(int n_identities, int samples_per_identity, uint64_t seed,
                                             const MentionPolicy& policy) {
    if (n_identities < 1 || samples_per_identity < 1)
        throw std::invalid_argument("make_base_dataset: counts must be >= 1");
    std::vector<DatasetRecord> out;
    out.reserve((size_t)n_identities * samples_per_identity);
    Rng root(seed);
    Rng attrs_rng = root.fork("attrs");
    Rng seed_rng = root.fork("render_seeds");
    int index = 0;
    for (int id = 0; id < n_identities; ++id) {
        IdentitySpec spec = identity_from_id(id);
        for (int s = 0; s < samples_per_identity; ++s) {
            DatasetRecord r;
            r.index = index;
            r.identity_id = id;
            r.class_word = class_word_for(spec);
            r.attrs = random_attributes(attrs_rng);
            r.ref_attrs = r.attrs;
            r.render_seed = seed_rng.next_u64();
            Render rd = render_avatar(spec, r.attrs, r.render_seed);
            r.image = rd.image;
            r.mask = rd.mask;
            // original condition: the reference is the input image itself
            r.ref_image = apply_background_mask(rd.image, rd.mask);
            r.ref_mask = rd.mask;
            uint64_t template_seed = seed ^ (uint64_t)index * 0x100000001b3ull;
            r.caption = caption_for(r.class_word, r.attrs, template_seed, policy);
            r.caption_text = caption_text(r.caption);
            ++index;
            out.push_back(std::move(r));
        }
    }
    return out;
}

EditTable::EditTable(std::vector<int> c) : coords(std::move(c)) {
    if (coords.empty()) throw std::invalid_argument("edit table: empty");
    for (int coord : coords) {
        if (coord < 0 || coord >= 4)
            throw std::invalid_argument("edit table: '" + (coord == 4 ? std::string("background")
                                                                      : std::string("coord ") + std::to_string(coord)) +
                                        "' is not a face attribute");
    }
}

EditTable default_edit_table() { return EditTable({0, 1, 2, 3}); }

std::vector<DatasetRecord> make_augmented_dataset(const std::vector<DatasetRecord>& base, const EditTable& edits,
                                                  double sim_threshold, uint64_t seed, const RefEncoder<float>& psi,
                                                  ParamStore<float>& psi_params) {
    std::vector<DatasetRecord> out;
    Rng rng(seed ^ 0xa06u);
    int index = base.empty() ? 0 : base.back().index + 1;
    for (const auto& src : base) {
        int coord = edits.coords[(size_t)rng.below(edits.coords.size())];
        int card = attribute_cardinality(coord);
        int cur = attribute_value(src.attrs, coord);
        int next = (cur + 1 + (int)rng.below((uint64_t)(card - 1))) % card;

        DatasetRecord r = src;
        r.index = index;
        r.augmented = true;
        r.ref_attrs = src.attrs;
        set_attribute_value(r.ref_attrs, coord, next);
        r.edited_attribute = attribute_names()[(size_t)coord] + ":" + std::to_string(next);
        // same identity and render seed: the pair differs only in the edited
        // attribute (plus its pixels)
        Render ref = render_avatar(identity_from_id(src.identity_id), r.ref_attrs, src.render_seed);
        r.ref_image = apply_background_mask(ref.image, ref.mask);
        r.ref_mask = ref.mask;

        Tensor<float> emb_src = psi_embedding(psi, psi_params, apply_background_mask(src.image, src.mask));
        Tensor<float> emb_ref = psi_embedding(psi, psi_params, r.ref_image);
        r.similarity = cosine(emb_src, emb_ref);
        if (r.similarity < sim_threshold) continue;
        ++index;
        out.push_back(std::move(r));
    }
    return out;
}

MixSampler::MixSampler(const std::vector<DatasetRecord>& orig, const std::vector<DatasetRecord>& aug, double ratio_)
    : original(&orig), augmented(&aug), ratio(ratio_) {
    if (ratio < 0.0 || ratio > 1.0) throw std::invalid_argument("mix_datasets: ratio must be in [0,1]");
    if (orig.empty() && ratio < 1.0) throw std::invalid_argument("mix_datasets: empty original pool");
    if (aug.empty() && ratio > 0.0) throw std::invalid_argument("mix_datasets: empty augmented pool");
}

const DatasetRecord& MixSampler::draw(Rng& rng) const {
    bool aug = rng.uniform() < ratio;
    const auto& pool = aug ? *augmented : *original;
    return pool[(size_t)rng.below(pool.size())];
}

namespace {

json attrs_json(const AttributeVector& a) {
    return json{{"hair_color", to_word(a.hair_color)},
                {"hair_length", to_word(a.hair_length)},
                {"expression", to_word(a.expression)},
                {"eyewear", to_word(a.eyewear)},
                {"background", to_word(a.background)}};
}

template <typename E>
E enum_from_word(const std::string& w, int count) {
    for (int i = 0; i < count; ++i)
        if (w == to_word((E)i)) return (E)i;
    throw std::runtime_error("manifest: unknown attribute word " + w);
}

AttributeVector attrs_from_json(const json& j) {
    AttributeVector a;
    a.hair_color = enum_from_word<HairColor>(j.at("hair_color"), kNumHairColors);
    a.hair_length = enum_from_word<HairLength>(j.at("hair_length"), kNumHairLengths);
    a.expression = enum_from_word<Expression>(j.at("expression"), kNumExpressions);
    a.eyewear = enum_from_word<Eyewear>(j.at("eyewear"), kNumEyewear);
    a.background = enum_from_word<Background>(j.at("background"), kNumBackgrounds);
    return a;
}

std::string img_name(int index) {
    char buf[16];
    std::snprintf(buf, sizeof(buf), "%06d.png", index);
    return buf;
}

}  // namespace

json record_manifest(const DatasetRecord& r) {
    return json{{"index", r.index},
                {"identity_id", r.identity_id},
                {"class_word", r.class_word},
                {"attrs", attrs_json(r.attrs)},
                {"ref_attrs", attrs_json(r.ref_attrs)},
                {"caption", r.caption_text},
                {"caption_ids", r.caption},
                {"provenance", r.augmented ? "augmented" : "original"},
                {"edited_attribute", r.edited_attribute},
                {"similarity", r.similarity},
                {"render_seed", r.render_seed}};
}

void save_dataset(const std::string& dir, const std::vector<DatasetRecord>& records) {
    for (const char* sub : {"", "/img", "/mask", "/ref", "/refmask"}) fs::create_directories(dir + sub);
    std::string manifest;
    for (const auto& r : records) {
        manifest += record_manifest(r).dump() + "\n";
        std::string n = img_name(r.index);
        write_png(dir + "/img/" + n, to_png_rgb(r.image, kImageSize));
        write_png(dir + "/mask/" + n, to_png_mask(r.mask, kImageSize), /*one_bit=*/true);
        write_png(dir + "/ref/" + n, to_png_rgb(r.ref_image, kImageSize));
        write_png(dir + "/refmask/" + n, to_png_mask(r.ref_mask, kImageSize), /*one_bit=*/true);
    }
    write_file(dir + "/manifest.jsonl", manifest);
    write_file(dir + "/vocab.txt", vocab().serialize());
    write_file(dir + "/prompt_pairs.tsv", serialize_prompt_pairs(default_prompt_pairs()));
}

std::vector<DatasetRecord> load_dataset(const std::string& dir) {
    std::istringstream is(read_file(dir + "/manifest.jsonl"));
    std::vector<DatasetRecord> out;
    std::string line;
    while (std::getline(is, line)) {
        if (line.empty()) continue;
        json j = json::parse(line);
        DatasetRecord r;
        r.index = j.at("index");
        r.identity_id = j.at("identity_id");
        r.class_word = j.at("class_word");
        r.attrs = attrs_from_json(j.at("attrs"));
        r.ref_attrs = attrs_from_json(j.at("ref_attrs"));
        r.caption_text = j.at("caption");
        r.caption = j.at("caption_ids").get<std::vector<int>>();
        r.augmented = j.at("provenance") == "augmented";
        r.edited_attribute = j.at("edited_attribute");
        r.similarity = j.at("similarity");
        r.render_seed = j.at("render_seed");
        std::string n = img_name(r.index);
        r.image = from_png_rgb(read_png(dir + "/img/" + n));
        r.mask = from_png_mask(read_png(dir + "/mask/" + n));
        r.ref_image = from_png_rgb(read_png(dir + "/ref/" + n));
        r.ref_mask = from_png_mask(read_png(dir + "/refmask/" + n));
        out.push_back(std::move(r));
    }
    return out;
}

}  // namespace idfuse
