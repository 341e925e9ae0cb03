#pragma once

#include <map>
#include <optional>

#include "autograd.hpp"

namespace idfuse {

// ---------------------------------------------------------------------------
// Parameter store + the small set of layers the models are assembled from.
// Layers hold indices into the store so weights, gradients, optimizer state
// and checkpoints all key off stable parameter names.
// ---------------------------------------------------------------------------

template <typename T>
class ParamStore {
  public:
    struct Entry {
        std::string name;
        Tensor<T> val;
        Tensor<T> grad;
        bool trainable = true;
    };

    int add(const std::string& name, Tensor<T> v, bool trainable = true) {
        if (index_.count(name)) throw std::invalid_argument("param exists: " + name);
        Entry e;
        e.name = name;
        e.grad = Tensor<T>::zeros(v.shape);
        e.val = std::move(v);
        e.trainable = trainable;
        entries_.push_back(std::move(e));
        index_[name] = (int)entries_.size() - 1;
        return (int)entries_.size() - 1;
    }

    Entry& at(int i) { return entries_[(size_t)i]; }
    const Entry& at(int i) const { return entries_[(size_t)i]; }
    Entry& at(const std::string& name) { return entries_[(size_t)idx(name)]; }
    int idx(const std::string& name) const {
        auto it = index_.find(name);
        if (it == index_.end()) throw std::out_of_range("no param: " + name);
        return it->second;
    }
    bool has(const std::string& name) const { return index_.count(name) > 0; }
    int size() const { return (int)entries_.size(); }

    void zero_grads() {
        for (auto& e : entries_) e.grad.fill(T(0));
    }
    void set_trainable_prefix(const std::string& prefix, bool v) {
        for (auto& e : entries_)
            if (e.name.rfind(prefix, 0) == 0) e.trainable = v;
    }
    void set_all_trainable(bool v) {
        for (auto& e : entries_) e.trainable = v;
    }

    Var<T> use(Tape<T>& t, int i) {
        Entry& e = entries_[(size_t)i];
        return t.leaf(&e.val, &e.grad, e.trainable);
    }
    // value only; no gradient regardless of trainable flag
    Var<T> use_frozen(Tape<T>& t, int i) {
        Entry& e = entries_[(size_t)i];
        return t.leaf(&e.val, nullptr, false);
    }

    // fingerprint of all parameter bytes under a name prefix
    std::string fingerprint(const std::string& prefix = "") const {
        Sha256 h;
        for (const auto& e : entries_) {
            if (!prefix.empty() && e.name.rfind(prefix, 0) != 0) continue;
            h.update(e.name.data(), e.name.size());
            h.update(e.val.ptr(), sizeof(T) * e.val.numel());
        }
        return const_cast<Sha256&>(h).hex();
    }

    const std::vector<Entry>& entries() const { return entries_; }
    std::vector<Entry>& entries() { return entries_; }

  private:
    std::vector<Entry> entries_;
    std::map<std::string, int> index_;
};

// ---------------------------------------------------------------------------

template <typename T>
struct Linear {
    int w = -1, b = -1;
    int in = 0, out = 0;

    void init(ParamStore<T>& ps, const std::string& name, int in_, int out_, Rng& rng, bool bias = true,
              double gain = 1.0) {
        in = in_;
        out = out_;
        Tensor<T> wt({out, in});
        rng.fill_normal(wt, gain / std::sqrt((double)in));
        w = ps.add(name + ".w", std::move(wt));
        if (bias) b = ps.add(name + ".b", Tensor<T>::zeros({out}));
    }

    // x: (R, in) -> (R, out)
    Var<T> apply(Tape<T>& t, ParamStore<T>& ps, Var<T> x) const {
        Var<T> y = t.matmul(x, ps.use(t, w), false, true);
        if (b >= 0) y = t.add_colwise(y, ps.use(t, b));
        return y;
    }
};

template <typename T>
struct Conv2d {
    int w = -1, b = -1;
    int in = 0, out = 0, k = 3, stride = 1;

    void init(ParamStore<T>& ps, const std::string& name, int in_, int out_, int k_, int stride_, Rng& rng,
              double gain = 1.0) {
        in = in_;
        out = out_;
        k = k_;
        stride = stride_;
        Tensor<T> wt({out, in * k * k});
        rng.fill_normal(wt, gain * std::sqrt(2.0 / (in * k * k)));
        w = ps.add(name + ".w", std::move(wt));
        b = ps.add(name + ".b", Tensor<T>::zeros({out}));
    }

    Var<T> apply(Tape<T>& t, ParamStore<T>& ps, Var<T> x, int H, int W) const {
        return t.conv2d(x, ps.use(t, w), ps.use(t, b), H, W, k, stride);
    }
};

template <typename T>
struct GroupNorm {
    int g = -1, b = -1;
    int groups = 8;

    void init(ParamStore<T>& ps, const std::string& name, int channels, int groups_) {
        groups = groups_;
        g = ps.add(name + ".g", Tensor<T>::full({channels}, T(1)));
        b = ps.add(name + ".b", Tensor<T>::zeros({channels}));
    }
    Var<T> apply(Tape<T>& t, ParamStore<T>& ps, Var<T> x) const {
        return t.group_norm(x, groups, ps.use(t, g), ps.use(t, b));
    }
};

template <typename T>
struct LayerNorm {
    int g = -1, b = -1;

    void init(ParamStore<T>& ps, const std::string& name, int dim) {
        g = ps.add(name + ".g", Tensor<T>::full({dim}, T(1)));
        b = ps.add(name + ".b", Tensor<T>::zeros({dim}));
    }
    Var<T> apply(Tape<T>& t, ParamStore<T>& ps, Var<T> x) const {
        return t.layer_norm(x, ps.use(t, g), ps.use(t, b));
    }
};

// ---------------------------------------------------------------------------
// AdamW with decoupled weight decay and global-norm gradient clipping.
// Decay applies to matrices only (norm gains and biases are exempt).
// ---------------------------------------------------------------------------
template <typename T>
struct AdamW {
    double lr = 1e-4, beta1 = 0.9, beta2 = 0.999, eps = 1e-8, weight_decay = 0.01, clip_norm = 1.0;
    int64_t step_count = 0;
    std::vector<Tensor<T>> m, v;

    void attach(const ParamStore<T>& ps) {
        m.clear();
        v.clear();
        for (const auto& e : ps.entries()) {
            m.push_back(Tensor<T>::zeros(e.val.shape));
            v.push_back(Tensor<T>::zeros(e.val.shape));
        }
        step_count = 0;
    }

    double grad_norm(const ParamStore<T>& ps) const {
        double s = 0;
        for (const auto& e : ps.entries()) {
            if (!e.trainable) continue;
            for (const T& g : e.grad.data) s += (double)g * (double)g;
        }
        return std::sqrt(s);
    }

    void step(ParamStore<T>& ps) {
        ++step_count;
        double gn = grad_norm(ps);
        double cs = (clip_norm > 0 && gn > clip_norm) ? clip_norm / gn : 1.0;
        double bc1 = 1.0 - std::pow(beta1, (double)step_count);
        double bc2 = 1.0 - std::pow(beta2, (double)step_count);
        for (int i = 0; i < ps.size(); ++i) {
            auto& e = ps.at(i);
            if (!e.trainable) continue;
            bool decay = e.val.shape.size() >= 2 && weight_decay > 0;
            for (int64_t j = 0; j < e.val.numel(); ++j) {
                double g = (double)e.grad[j] * cs;
                double mj = beta1 * (double)m[i][j] + (1 - beta1) * g;
                double vj = beta2 * (double)v[i][j] + (1 - beta2) * g * g;
                m[i][j] = (T)mj;
                v[i][j] = (T)vj;
                double upd = (mj / bc1) / (std::sqrt(vj / bc2) + eps);
                if (decay) upd += weight_decay * (double)e.val[j];
                e.val[j] = (T)((double)e.val[j] - lr * upd);
            }
        }
    }
};

}  // namespace idfuse
