#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <random>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace idfuse {

// ---------------------------------------------------------------------------
// Tensor: dense row-major array, up to 4 dims. Shape conventions used across
// the project:
//   spatial feature maps  (C, H*W)   one row per channel
//   token matrices        (N, D)     one row per token
//   scalars               {1}
// ---------------------------------------------------------------------------
template <typename T>
struct Tensor {
    std::vector<int> shape;
    std::vector<T> data;

    Tensor() = default;
    explicit Tensor(std::vector<int> s) : shape(std::move(s)) { data.assign(count(shape), T(0)); }
    Tensor(std::vector<int> s, std::vector<T> d) : shape(std::move(s)), data(std::move(d)) {
        if ((int64_t)data.size() != count(shape)) throw std::invalid_argument("tensor: shape/data mismatch");
    }

    static int64_t count(const std::vector<int>& s) {
        int64_t n = 1;
        for (int d : s) n *= d;
        return n;
    }
    static Tensor zeros(std::vector<int> s) { return Tensor(std::move(s)); }
    static Tensor full(std::vector<int> s, T v) {
        Tensor t(std::move(s));
        std::fill(t.data.begin(), t.data.end(), v);
        return t;
    }
    static Tensor scalar(T v) { return Tensor({1}, {v}); }

    int64_t numel() const { return (int64_t)data.size(); }
    int rows() const { return shape.at(0); }
    int cols() const { return shape.size() == 2 ? shape[1] : (int)(numel() / shape[0]); }
    T* ptr() { return data.data(); }
    const T* ptr() const { return data.data(); }
    T& operator[](int64_t i) { return data[(size_t)i]; }
    const T& operator[](int64_t i) const { return data[(size_t)i]; }

    bool same_shape(const Tensor& o) const { return shape == o.shape; }
    void fill(T v) { std::fill(data.begin(), data.end(), v); }

    template <typename U>
    Tensor<U> cast() const {
        Tensor<U> out;
        out.shape = shape;
        out.data.resize(data.size());
        for (size_t i = 0; i < data.size(); ++i) out.data[i] = (U)data[i];
        return out;
    }
};

inline std::string shape_str(const std::vector<int>& s) {
    std::string r = "(";
    for (size_t i = 0; i < s.size(); ++i) r += std::to_string(s[i]) + (i + 1 < s.size() ? "," : "");
    return r + ")";
}

// ---------------------------------------------------------------------------
// Rng: deterministic random stream. mt19937_64 has a standard-specified
// output sequence; gaussian/uniform transforms are our own so draws are
// reproducible across library versions. Streams can be forked by label so
// independent components never share draw order.
// ---------------------------------------------------------------------------
struct Rng {
    std::mt19937_64 gen;

    Rng() : gen(0) {}
    explicit Rng(uint64_t seed) : gen(seed) {}

    uint64_t next_u64() { return gen(); }

    // uniform in [0,1)
    double uniform() { return (double)(next_u64() >> 11) * 0x1.0p-53; }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    // unbiased integer in [0, n)
    uint64_t below(uint64_t n) {
        if (n == 0) throw std::invalid_argument("rng.below(0)");
        uint64_t lim = UINT64_MAX - UINT64_MAX % n;
        uint64_t v;
        do { v = next_u64(); } while (v >= lim);
        return v % n;
    }
    int64_t range(int64_t lo, int64_t hi) { return lo + (int64_t)below((uint64_t)(hi - lo)); }

    // Box-Muller; one value per call, no cached spare (keeps state = engine state)
    double normal() {
        double u1, u2;
        do { u1 = uniform(); } while (u1 <= 0.0);
        u2 = uniform();
        return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * M_PI * u2);
    }

    template <typename T>
    void fill_normal(Tensor<T>& t) {
        for (auto& v : t.data) v = (T)normal();
    }
    template <typename T>
    void fill_normal(Tensor<T>& t, double stddev) {
        for (auto& v : t.data) v = (T)(normal() * stddev);
    }
    template <typename T>
    void fill_uniform(Tensor<T>& t, double lo, double hi) {
        for (auto& v : t.data) v = (T)uniform(lo, hi);
    }

    // fork a named child stream; label mixing uses FNV-1a so forks are stable
    Rng fork(const std::string& label) {
        uint64_t h = 1469598103934665603ull;
        for (char c : label) { h ^= (uint8_t)c; h *= 1099511628211ull; }
        uint64_t s = next_u64();
        return Rng(s ^ h);
    }

    std::string state_string() const;
    void restore_state(const std::string& s);
};

inline std::string Rng::state_string() const {
    std::ostringstream os;
    os << gen;
    return os.str();
}
inline void Rng::restore_state(const std::string& s) {
    std::istringstream is(s);
    is >> gen;
    if (is.fail()) throw std::runtime_error("rng: bad state string");
}

// ---------------------------------------------------------------------------
// SHA-256 (FIPS 180-4) for content fingerprints of checkpoints and reports.
// ---------------------------------------------------------------------------
struct Sha256 {
    uint32_t h[8];
    uint64_t len = 0;
    uint8_t buf[64];
    size_t buf_n = 0;

    Sha256() {
        static const uint32_t init[8] = {0x6a09e667, 0xbb67ae85, 0x3c6ef372, 0xa54ff53a,
                                         0x510e527f, 0x9b05688c, 0x1f83d9ab, 0x5be0cd19};
        std::memcpy(h, init, sizeof(h));
    }

    static uint32_t rotr(uint32_t x, int n) { return (x >> n) | (x << (32 - n)); }

    void block(const uint8_t* p) {
        static const uint32_t k[64] = {
            0x428a2f98, 0x71374491, 0xb5c0fbcf, 0xe9b5dba5, 0x3956c25b, 0x59f111f1, 0x923f82a4, 0xab1c5ed5,
            0xd807aa98, 0x12835b01, 0x243185be, 0x550c7dc3, 0x72be5d74, 0x80deb1fe, 0x9bdc06a7, 0xc19bf174,
            0xe49b69c1, 0xefbe4786, 0x0fc19dc6, 0x240ca1cc, 0x2de92c6f, 0x4a7484aa, 0x5cb0a9dc, 0x76f988da,
            0x983e5152, 0xa831c66d, 0xb00327c8, 0xbf597fc7, 0xc6e00bf3, 0xd5a79147, 0x06ca6351, 0x14292967,
            0x27b70a85, 0x2e1b2138, 0x4d2c6dfc, 0x53380d13, 0x650a7354, 0x766a0abb, 0x81c2c92e, 0x92722c85,
            0xa2bfe8a1, 0xa81a664b, 0xc24b8b70, 0xc76c51a3, 0xd192e819, 0xd6990624, 0xf40e3585, 0x106aa070,
            0x19a4c116, 0x1e376c08, 0x2748774c, 0x34b0bcb5, 0x391c0cb3, 0x4ed8aa4a, 0x5b9cca4f, 0x682e6ff3,
            0x748f82ee, 0x78a5636f, 0x84c87814, 0x8cc70208, 0x90befffa, 0xa4506ceb, 0xbef9a3f7, 0xc67178f2};
        uint32_t w[64];
        for (int i = 0; i < 16; ++i)
            w[i] = (uint32_t)p[4 * i] << 24 | (uint32_t)p[4 * i + 1] << 16 | (uint32_t)p[4 * i + 2] << 8 | p[4 * i + 3];
        for (int i = 16; i < 64; ++i) {
            uint32_t s0 = rotr(w[i - 15], 7) ^ rotr(w[i - 15], 18) ^ (w[i - 15] >> 3);
            uint32_t s1 = rotr(w[i - 2], 17) ^ rotr(w[i - 2], 19) ^ (w[i - 2] >> 10);
            w[i] = w[i - 16] + s0 + w[i - 7] + s1;
        }
        uint32_t a = h[0], b = h[1], c = h[2], d = h[3], e = h[4], f = h[5], g = h[6], hh = h[7];
        for (int i = 0; i < 64; ++i) {
            uint32_t s1 = rotr(e, 6) ^ rotr(e, 11) ^ rotr(e, 25);
            uint32_t ch = (e & f) ^ (~e & g);
            uint32_t t1 = hh + s1 + ch + k[i] + w[i];
            uint32_t s0 = rotr(a, 2) ^ rotr(a, 13) ^ rotr(a, 22);
            uint32_t mj = (a & b) ^ (a & c) ^ (b & c);
            uint32_t t2 = s0 + mj;
            hh = g; g = f; f = e; e = d + t1; d = c; c = b; b = a; a = t1 + t2;
        }
        h[0] += a; h[1] += b; h[2] += c; h[3] += d; h[4] += e; h[5] += f; h[6] += g; h[7] += hh;
    }

    void update(const void* data, size_t n) {
        const uint8_t* p = (const uint8_t*)data;
        len += n;
        while (n > 0) {
            size_t take = std::min(n, (size_t)64 - buf_n);
            std::memcpy(buf + buf_n, p, take);
            buf_n += take; p += take; n -= take;
            if (buf_n == 64) { block(buf); buf_n = 0; }
        }
    }

    std::string hex() {
        uint64_t bits = len * 8;
        uint8_t pad = 0x80;
        update(&pad, 1);
        uint8_t z = 0;
        while (buf_n != 56) update(&z, 1);
        uint8_t l[8];
        for (int i = 0; i < 8; ++i) l[i] = (uint8_t)(bits >> (56 - 8 * i));
        update(l, 8);
        static const char* d = "0123456789abcdef";
        std::string out;
        for (int i = 0; i < 8; ++i)
            for (int b = 28; b >= 0; b -= 4) out += d[(h[i] >> b) & 0xf];
        return out;
    }
};

inline std::string sha256_hex(const void* data, size_t n) {
    Sha256 s;
    s.update(data, n);
    return s.hex();
}
inline std::string sha256_hex(const std::string& s) { return sha256_hex(s.data(), s.size()); }

}  // namespace idfuse
