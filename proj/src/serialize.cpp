#include "serialize.hpp"

#include <fstream>

#include "pngio.hpp"

namespace idfuse {

namespace {

constexpr uint32_t kMagic = 0x4944465au;  // "IDFZ"
constexpr uint32_t kVersion = 1;

void put_u32(std::ostream& os, uint32_t v) { os.write((const char*)&v, 4); }
uint32_t get_u32(std::istream& is) {
    uint32_t v = 0;
    is.read((char*)&v, 4);
    return v;
}

void put_tensor(std::ostream& os, const std::string& name, const Tensor<float>& t) {
    put_u32(os, (uint32_t)name.size());
    os.write(name.data(), (std::streamsize)name.size());
    put_u32(os, (uint32_t)t.shape.size());
    for (int d : t.shape) put_u32(os, (uint32_t)d);
    os.write((const char*)t.ptr(), (std::streamsize)(sizeof(float) * t.numel()));
}

std::pair<std::string, Tensor<float>> get_tensor(std::istream& is) {
    uint32_t name_len = get_u32(is);
    std::string name(name_len, '\0');
    is.read(name.data(), name_len);
    uint32_t ndim = get_u32(is);
    std::vector<int> shape(ndim);
    for (auto& d : shape) d = (int)get_u32(is);
    Tensor<float> t(shape);
    is.read((char*)t.ptr(), (std::streamsize)(sizeof(float) * t.numel()));
    if (!is) throw std::runtime_error("checkpoint: truncated tensor " + name);
    return {name, std::move(t)};
}

}  // namespace

void save_checkpoint(const std::string& path, const ParamStore<float>& ps, const AdamW<float>* opt,
                     const json& meta) {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw std::runtime_error("cannot write checkpoint " + path);
    put_u32(os, kMagic);
    put_u32(os, kVersion);
    json m = meta;
    if (opt) m["opt_step_count"] = opt->step_count;
    std::string ms = m.dump();
    put_u32(os, (uint32_t)ms.size());
    os.write(ms.data(), (std::streamsize)ms.size());

    uint32_t count = (uint32_t)ps.size() * (opt ? 3u : 1u);
    put_u32(os, count);
    for (const auto& e : ps.entries()) put_tensor(os, e.name, e.val);
    if (opt) {
        for (int i = 0; i < ps.size(); ++i) put_tensor(os, "opt.m/" + ps.at(i).name, opt->m[(size_t)i]);
        for (int i = 0; i < ps.size(); ++i) put_tensor(os, "opt.v/" + ps.at(i).name, opt->v[(size_t)i]);
    }
    if (!os) throw std::runtime_error("checkpoint write failed: " + path);
}

json load_checkpoint(const std::string& path, ParamStore<float>& ps, AdamW<float>* opt, bool partial) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw std::runtime_error("cannot read checkpoint " + path);
    if (get_u32(is) != kMagic) throw std::runtime_error("not a checkpoint: " + path);
    if (get_u32(is) != kVersion) throw std::runtime_error("unsupported checkpoint version: " + path);
    uint32_t mlen = get_u32(is);
    std::string ms(mlen, '\0');
    is.read(ms.data(), mlen);
    json meta = json::parse(ms);

    if (opt) {
        opt->attach(ps);
        opt->step_count = meta.value("opt_step_count", (int64_t)0);
    }
    uint32_t count = get_u32(is);
    uint32_t loaded = 0;
    for (uint32_t i = 0; i < count; ++i) {
        auto [name, t] = get_tensor(is);
        if (name.rfind("opt.m/", 0) == 0 || name.rfind("opt.v/", 0) == 0) {
            if (!opt) continue;
            bool is_m = name[4] == 'm';
            std::string pname = name.substr(6);
            int idx = ps.idx(pname);
            auto& dst = is_m ? opt->m[(size_t)idx] : opt->v[(size_t)idx];
            if (!dst.same_shape(t)) throw std::runtime_error("checkpoint: optimizer shape mismatch " + name);
            dst = std::move(t);
            continue;
        }
        auto& e = ps.at(name);
        if (!e.val.same_shape(t))
            throw std::runtime_error("checkpoint: shape mismatch for " + name + ": file " + shape_str(t.shape) +
                                     " vs model " + shape_str(e.val.shape));
        e.val = std::move(t);
        ++loaded;
    }
    if (!partial && loaded != (uint32_t)ps.size())
        throw std::runtime_error("checkpoint: expected " + std::to_string(ps.size()) + " tensors, loaded " +
                                 std::to_string(loaded));
    return meta;
}

json peek_checkpoint_meta(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw std::runtime_error("cannot read checkpoint " + path);
    if (get_u32(is) != kMagic) throw std::runtime_error("not a checkpoint: " + path);
    if (get_u32(is) != kVersion) throw std::runtime_error("unsupported checkpoint version: " + path);
    uint32_t mlen = get_u32(is);
    std::string ms(mlen, '\0');
    is.read(ms.data(), mlen);
    return json::parse(ms);
}

std::string file_sha256(const std::string& path) {
    std::string data = read_file(path);
    return sha256_hex(data);
}

std::string describe_params(const ParamStore<float>& ps) {
    std::string out;
    for (const auto& e : ps.entries()) out += e.name + "  " + shape_str(e.val.shape) + "\n";
    return out;
}

}  // namespace idfuse
