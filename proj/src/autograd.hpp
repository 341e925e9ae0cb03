#pragma once

#include <deque>
#include <functional>
#include <memory>

#include <Eigen/Dense>

#include "core.hpp"

namespace idfuse {

// ---------------------------------------------------------------------------
// Reverse-mode autodiff on a tape. Single-threaded by design: node order is
// creation order, backward walks it in reverse, so gradient accumulation is
// bit-reproducible for a given sequence of ops.
//
// Templated on scalar type: float for training/inference, double for the
// finite-difference gradient harness.
// ---------------------------------------------------------------------------

template <typename T>
using EMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using EMap = Eigen::Map<EMat<T>>;
template <typename T>
using ECMap = Eigen::Map<const EMat<T>>;

template <typename T>
EMap<T> as_mat(Tensor<T>& t, int r, int c) { return EMap<T>(t.ptr(), r, c); }
template <typename T>
ECMap<T> as_mat(const Tensor<T>& t, int r, int c) { return ECMap<T>(t.ptr(), r, c); }

template <typename T>
struct Node {
    const Tensor<T>* vptr = nullptr;  // external value (params) or &own_val
    Tensor<T> own_val;
    Tensor<T>* gptr = nullptr;        // external grad accumulator (params) or &own_grad
    Tensor<T> own_grad;
    bool needs_grad = false;
    bool grad_live = false;           // grad buffer touched during this backward
    std::function<void()> back;

    const Tensor<T>& val() const { return *vptr; }
    Tensor<T>& grad() {
        if (!grad_live) {
            if (gptr == &own_grad && !own_grad.same_shape(*vptr)) own_grad = Tensor<T>::zeros(vptr->shape);
            grad_live = true;
        }
        return *gptr;
    }
    bool has_grad() const { return grad_live; }
};

// Non-owning handle; nodes live on the tape.
template <typename T>
struct Var {
    Node<T>* n = nullptr;
    const Tensor<T>& val() const { return n->val(); }
    const std::vector<int>& shape() const { return n->val().shape; }
    bool defined() const { return n != nullptr; }
};

template <typename T>
class Tape {
  public:
    bool grad_enabled = true;

    Var<T> make(Tensor<T> v, bool needs) {
        nodes_.emplace_back(std::make_unique<Node<T>>());
        Node<T>* n = nodes_.back().get();
        n->own_val = std::move(v);
        n->vptr = &n->own_val;
        n->gptr = &n->own_grad;
        n->needs_grad = needs && grad_enabled;
        return {n};
    }

    Var<T> constant(Tensor<T> v) { return make(std::move(v), false); }
    Var<T> scalar(T v) { return constant(Tensor<T>::scalar(v)); }

    // Leaf over external storage. If `grad_sink` is non-null, backward
    // accumulates straight into it (used for model parameters).
    Var<T> leaf(const Tensor<T>* v, Tensor<T>* grad_sink, bool trainable) {
        nodes_.emplace_back(std::make_unique<Node<T>>());
        Node<T>* n = nodes_.back().get();
        n->vptr = v;
        n->needs_grad = trainable && grad_enabled;
        if (n->needs_grad && grad_sink) {
            n->gptr = grad_sink;
            n->grad_live = true;  // external sinks accumulate across tapes
        } else {
            n->gptr = &n->own_grad;
        }
        return {n};
    }

    size_t size() const { return nodes_.size(); }

    // ---- elementwise -------------------------------------------------------

    Var<T> add(Var<T> a, Var<T> b) {
        check_same(a, b, "add");
        Tensor<T> out = a.val();
        for (int64_t i = 0; i < out.numel(); ++i) out[i] += b.val()[i];
        return unary_or_binary(std::move(out), a, b, [](Node<T>* o, Node<T>* pa, Node<T>* pb) {
            if (pa->needs_grad) axpy(pa->grad(), o->grad(), T(1));
            if (pb->needs_grad) axpy(pb->grad(), o->grad(), T(1));
        });
    }

    Var<T> sub(Var<T> a, Var<T> b) {
        check_same(a, b, "sub");
        Tensor<T> out = a.val();
        for (int64_t i = 0; i < out.numel(); ++i) out[i] -= b.val()[i];
        return unary_or_binary(std::move(out), a, b, [](Node<T>* o, Node<T>* pa, Node<T>* pb) {
            if (pa->needs_grad) axpy(pa->grad(), o->grad(), T(1));
            if (pb->needs_grad) axpy(pb->grad(), o->grad(), T(-1));
        });
    }

    Var<T> mul(Var<T> a, Var<T> b) {
        check_same(a, b, "mul");
        Tensor<T> out = a.val();
        for (int64_t i = 0; i < out.numel(); ++i) out[i] *= b.val()[i];
        return unary_or_binary(std::move(out), a, b, [](Node<T>* o, Node<T>* pa, Node<T>* pb) {
            const Tensor<T>& g = o->grad();
            if (pa->needs_grad) {
                Tensor<T>& ga = pa->grad();
                for (int64_t i = 0; i < g.numel(); ++i) ga[i] += g[i] * pb->val()[i];
            }
            if (pb->needs_grad) {
                Tensor<T>& gb = pb->grad();
                for (int64_t i = 0; i < g.numel(); ++i) gb[i] += g[i] * pa->val()[i];
            }
        });
    }

    Var<T> scale(Var<T> a, T s) {
        Tensor<T> out = a.val();
        for (auto& v : out.data) v *= s;
        return unary(std::move(out), a, [s](Node<T>* o, Node<T>* p) { axpy(p->grad(), o->grad(), s); });
    }

    Var<T> add_scalar(Var<T> a, T s) {
        Tensor<T> out = a.val();
        for (auto& v : out.data) v += s;
        return unary(std::move(out), a, [](Node<T>* o, Node<T>* p) { axpy(p->grad(), o->grad(), T(1)); });
    }

    Var<T> silu(Var<T> a) {
        Tensor<T> out = a.val();
        for (auto& v : out.data) v = v / (T(1) + std::exp(-v));
        return unary(std::move(out), a, [](Node<T>* o, Node<T>* p) {
            Tensor<T>& g = p->grad();
            const Tensor<T>& go = o->grad();
            const Tensor<T>& x = p->val();
            for (int64_t i = 0; i < x.numel(); ++i) {
                T s = T(1) / (T(1) + std::exp(-x[i]));
                g[i] += go[i] * s * (T(1) + x[i] * (T(1) - s));
            }
        });
    }

    // ---- linear algebra ----------------------------------------------------

    // C = op(A) * op(B); all operands 2-D
    Var<T> matmul(Var<T> a, Var<T> b, bool ta = false, bool tb = false) {
        int am = a.val().rows(), an = a.val().cols();
        int bm = b.val().rows(), bn = b.val().cols();
        int m = ta ? an : am, k = ta ? am : an;
        int kb = tb ? bn : bm, n = tb ? bm : bn;
        if (k != kb)
            throw std::invalid_argument("matmul: inner dims " + shape_str(a.shape()) + (ta ? "^T" : "") + " x " +
                                        shape_str(b.shape()) + (tb ? "^T" : ""));
        Tensor<T> out({m, n});
        {
            auto A = as_mat(a.val(), am, an);
            auto B = as_mat(b.val(), bm, bn);
            auto C = as_mat(out, m, n);
            if (!ta && !tb) C.noalias() = A * B;
            else if (ta && !tb) C.noalias() = A.transpose() * B;
            else if (!ta && tb) C.noalias() = A * B.transpose();
            else C.noalias() = A.transpose() * B.transpose();
        }
        return unary_or_binary(std::move(out), a, b, [am, an, bm, bn, m, n, ta, tb](Node<T>* o, Node<T>* pa, Node<T>* pb) {
            auto G = as_mat(o->grad(), m, n);
            if (pa->needs_grad) {
                auto GA = as_mat(pa->grad(), am, an);
                auto B = as_mat(pb->val(), bm, bn);
                if (!ta && !tb) GA.noalias() += G * B.transpose();
                else if (ta && !tb) GA.noalias() += B * G.transpose();
                else if (!ta && tb) GA.noalias() += G * B;
                else GA.noalias() += B.transpose() * G.transpose();
            }
            if (pb->needs_grad) {
                auto GB = as_mat(pb->grad(), bm, bn);
                auto A = as_mat(pa->val(), am, an);
                if (!ta && !tb) GB.noalias() += A.transpose() * G;
                else if (ta && !tb) GB.noalias() += A * G;
                else if (!ta && tb) GB.noalias() += G.transpose() * A;
                else GB.noalias() += G.transpose() * A.transpose();
            }
        });
    }

    Var<T> transpose(Var<T> a) {
        int r = a.val().rows(), c = a.val().cols();
        Tensor<T> out({c, r});
        as_mat(out, c, r) = as_mat(a.val(), r, c).transpose();
        return unary(std::move(out), a, [r, c](Node<T>* o, Node<T>* p) {
            as_mat(p->grad(), r, c) += as_mat(o->grad(), c, r).transpose();
        });
    }

    // x: (R,C), b: (C); adds b to every row
    Var<T> add_colwise(Var<T> x, Var<T> b) {
        int r = x.val().rows(), c = x.val().cols();
        if (b.val().numel() != c) throw std::invalid_argument("add_colwise: bias size");
        Tensor<T> out = x.val();
        for (int i = 0; i < r; ++i)
            for (int j = 0; j < c; ++j) out[(int64_t)i * c + j] += b.val()[j];
        return unary_or_binary(std::move(out), x, b, [r, c](Node<T>* o, Node<T>* px, Node<T>* pb) {
            const Tensor<T>& g = o->grad();
            if (px->needs_grad) axpy(px->grad(), g, T(1));
            if (pb->needs_grad) {
                Tensor<T>& gb = pb->grad();
                for (int i = 0; i < r; ++i)
                    for (int j = 0; j < c; ++j) gb[j] += g[(int64_t)i * c + j];
            }
        });
    }

    // x: (R,C), b: (R); adds b[i] to every element of row i (per-channel bias)
    Var<T> add_rowwise(Var<T> x, Var<T> b) {
        int r = x.val().rows(), c = x.val().cols();
        if (b.val().numel() != r) throw std::invalid_argument("add_rowwise: bias size");
        Tensor<T> out = x.val();
        for (int i = 0; i < r; ++i)
            for (int j = 0; j < c; ++j) out[(int64_t)i * c + j] += b.val()[i];
        return unary_or_binary(std::move(out), x, b, [r, c](Node<T>* o, Node<T>* px, Node<T>* pb) {
            const Tensor<T>& g = o->grad();
            if (px->needs_grad) axpy(px->grad(), g, T(1));
            if (pb->needs_grad) {
                Tensor<T>& gb = pb->grad();
                for (int i = 0; i < r; ++i) {
                    T s = 0;
                    for (int j = 0; j < c; ++j) s += g[(int64_t)i * c + j];
                    gb[i] += s;
                }
            }
        });
    }

    Var<T> concat_rows(Var<T> a, Var<T> b) {
        int ra = a.val().rows(), rb = b.val().rows(), c = a.val().cols();
        if (b.val().cols() != c) throw std::invalid_argument("concat_rows: col mismatch");
        Tensor<T> out({ra + rb, c});
        std::memcpy(out.ptr(), a.val().ptr(), sizeof(T) * ra * c);
        std::memcpy(out.ptr() + (int64_t)ra * c, b.val().ptr(), sizeof(T) * rb * c);
        return unary_or_binary(std::move(out), a, b, [ra, rb, c](Node<T>* o, Node<T>* pa, Node<T>* pb) {
            const Tensor<T>& g = o->grad();
            if (pa->needs_grad) {
                Tensor<T>& ga = pa->grad();
                for (int64_t i = 0; i < (int64_t)ra * c; ++i) ga[i] += g[i];
            }
            if (pb->needs_grad) {
                Tensor<T>& gb = pb->grad();
                for (int64_t i = 0; i < (int64_t)rb * c; ++i) gb[i] += g[(int64_t)ra * c + i];
            }
        });
    }

    // rows of `table` selected by ids; backward scatter-adds
    Var<T> gather_rows(Var<T> table, const std::vector<int>& ids) {
        int c = table.val().cols();
        Tensor<T> out({(int)ids.size(), c});
        for (size_t i = 0; i < ids.size(); ++i) {
            if (ids[i] < 0 || ids[i] >= table.val().rows()) throw std::out_of_range("gather_rows: id");
            std::memcpy(out.ptr() + i * c, table.val().ptr() + (int64_t)ids[i] * c, sizeof(T) * c);
        }
        return unary(std::move(out), table, [ids, c](Node<T>* o, Node<T>* p) {
            Tensor<T>& g = p->grad();
            const Tensor<T>& go = o->grad();
            for (size_t i = 0; i < ids.size(); ++i)
                for (int j = 0; j < c; ++j) g[(int64_t)ids[i] * c + j] += go[(int64_t)i * c + j];
        });
    }

    Var<T> softmax_rows(Var<T> x) {
        int r = x.val().rows(), c = x.val().cols();
        Tensor<T> out = x.val();
        for (int i = 0; i < r; ++i) {
            T* row = out.ptr() + (int64_t)i * c;
            T mx = row[0];
            for (int j = 1; j < c; ++j) mx = std::max(mx, row[j]);
            T s = 0;
            for (int j = 0; j < c; ++j) { row[j] = std::exp(row[j] - mx); s += row[j]; }
            for (int j = 0; j < c; ++j) row[j] /= s;
        }
        return unary(std::move(out), x, [r, c](Node<T>* o, Node<T>* p) {
            Tensor<T>& g = p->grad();
            const Tensor<T>& y = o->val();
            const Tensor<T>& go = o->grad();
            for (int i = 0; i < r; ++i) {
                const T* yr = y.ptr() + (int64_t)i * c;
                const T* gr = go.ptr() + (int64_t)i * c;
                T dot = 0;
                for (int j = 0; j < c; ++j) dot += yr[j] * gr[j];
                T* gx = g.ptr() + (int64_t)i * c;
                for (int j = 0; j < c; ++j) gx[j] += yr[j] * (gr[j] - dot);
            }
        });
    }

    // ---- normalization ------------------------------------------------------

    // x: (C, S) channel-major feature map; statistics per group over (C/G * S)
    Var<T> group_norm(Var<T> x, int groups, Var<T> gamma, Var<T> beta, T eps = T(1e-5)) {
        int C = x.val().rows(), S = x.val().cols();
        if (C % groups != 0) throw std::invalid_argument("group_norm: C % groups != 0");
        int cg = C / groups;
        Tensor<T> out({C, S});
        auto xhat = std::make_shared<Tensor<T>>(std::vector<int>{C, S});
        auto invstd = std::make_shared<Tensor<T>>(std::vector<int>{groups});
        const T* xp = x.val().ptr();
        for (int g = 0; g < groups; ++g) {
            int64_t o0 = (int64_t)g * cg * S, n = (int64_t)cg * S;
            T mean = 0;
            for (int64_t i = 0; i < n; ++i) mean += xp[o0 + i];
            mean /= (T)n;
            T var = 0;
            for (int64_t i = 0; i < n; ++i) { T d = xp[o0 + i] - mean; var += d * d; }
            var /= (T)n;
            T is = T(1) / std::sqrt(var + eps);
            (*invstd)[g] = is;
            for (int64_t i = 0; i < n; ++i) (*xhat)[o0 + i] = (xp[o0 + i] - mean) * is;
        }
        for (int ch = 0; ch < C; ++ch)
            for (int j = 0; j < S; ++j)
                out[(int64_t)ch * S + j] = (*xhat)[(int64_t)ch * S + j] * gamma.val()[ch] + beta.val()[ch];

        Var<T> o = make(std::move(out), x.n->needs_grad || gamma.n->needs_grad || beta.n->needs_grad);
        if (!o.n->needs_grad) return o;
        Node<T>*on = o.n, *xn = x.n, *gn = gamma.n, *bn = beta.n;
        on->back = [on, xn, gn, bn, xhat, invstd, groups, cg, C, S]() {
            const Tensor<T>& go = on->grad();
            if (gn->needs_grad) {
                Tensor<T>& gg = gn->grad();
                for (int ch = 0; ch < C; ++ch) {
                    T s = 0;
                    for (int j = 0; j < S; ++j) s += go[(int64_t)ch * S + j] * (*xhat)[(int64_t)ch * S + j];
                    gg[ch] += s;
                }
            }
            if (bn->needs_grad) {
                Tensor<T>& gb = bn->grad();
                for (int ch = 0; ch < C; ++ch) {
                    T s = 0;
                    for (int j = 0; j < S; ++j) s += go[(int64_t)ch * S + j];
                    gb[ch] += s;
                }
            }
            if (xn->needs_grad) {
                Tensor<T>& gx = xn->grad();
                for (int g = 0; g < groups; ++g) {
                    int64_t o0 = (int64_t)g * cg * S, n = (int64_t)cg * S;
                    T sum_d = 0, sum_dx = 0;
                    for (int c2 = 0; c2 < cg; ++c2) {
                        int ch = g * cg + c2;
                        T gm = gn->val()[ch];
                        for (int j = 0; j < S; ++j) {
                            int64_t idx = (int64_t)ch * S + j;
                            T d = go[idx] * gm;
                            sum_d += d;
                            sum_dx += d * (*xhat)[idx];
                        }
                    }
                    T inv_n = T(1) / (T)n, is = (*invstd)[g];
                    for (int c2 = 0; c2 < cg; ++c2) {
                        int ch = g * cg + c2;
                        T gm = gn->val()[ch];
                        for (int j = 0; j < S; ++j) {
                            int64_t idx = (int64_t)ch * S + j;
                            T d = go[idx] * gm;
                            gx[idx] += is * (d - inv_n * sum_d - (*xhat)[idx] * inv_n * sum_dx);
                        }
                    }
                    (void)o0;
                }
            }
        };
        return o;
    }

    // x: (R, C) token matrix; statistics per row
    Var<T> layer_norm(Var<T> x, Var<T> gamma, Var<T> beta, T eps = T(1e-5)) {
        int R = x.val().rows(), C = x.val().cols();
        Tensor<T> out({R, C});
        auto xhat = std::make_shared<Tensor<T>>(std::vector<int>{R, C});
        auto invstd = std::make_shared<Tensor<T>>(std::vector<int>{R});
        for (int i = 0; i < R; ++i) {
            const T* row = x.val().ptr() + (int64_t)i * C;
            T mean = 0;
            for (int j = 0; j < C; ++j) mean += row[j];
            mean /= (T)C;
            T var = 0;
            for (int j = 0; j < C; ++j) { T d = row[j] - mean; var += d * d; }
            var /= (T)C;
            T is = T(1) / std::sqrt(var + eps);
            (*invstd)[i] = is;
            for (int j = 0; j < C; ++j) {
                T xh = (row[j] - mean) * is;
                (*xhat)[(int64_t)i * C + j] = xh;
                out[(int64_t)i * C + j] = xh * gamma.val()[j] + beta.val()[j];
            }
        }
        Var<T> o = make(std::move(out), x.n->needs_grad || gamma.n->needs_grad || beta.n->needs_grad);
        if (!o.n->needs_grad) return o;
        Node<T>*on = o.n, *xn = x.n, *gn = gamma.n, *bn = beta.n;
        on->back = [on, xn, gn, bn, xhat, invstd, R, C]() {
            const Tensor<T>& go = on->grad();
            if (gn->needs_grad) {
                Tensor<T>& gg = gn->grad();
                for (int j = 0; j < C; ++j) {
                    T s = 0;
                    for (int i = 0; i < R; ++i) s += go[(int64_t)i * C + j] * (*xhat)[(int64_t)i * C + j];
                    gg[j] += s;
                }
            }
            if (bn->needs_grad) {
                Tensor<T>& gb = bn->grad();
                for (int j = 0; j < C; ++j) {
                    T s = 0;
                    for (int i = 0; i < R; ++i) s += go[(int64_t)i * C + j];
                    gb[j] += s;
                }
            }
            if (xn->needs_grad) {
                Tensor<T>& gx = xn->grad();
                for (int i = 0; i < R; ++i) {
                    T sum_d = 0, sum_dx = 0;
                    for (int j = 0; j < C; ++j) {
                        T d = go[(int64_t)i * C + j] * gn->val()[j];
                        sum_d += d;
                        sum_dx += d * (*xhat)[(int64_t)i * C + j];
                    }
                    T inv_c = T(1) / (T)C, is = (*invstd)[i];
                    for (int j = 0; j < C; ++j) {
                        int64_t idx = (int64_t)i * C + j;
                        T d = go[idx] * gn->val()[j];
                        gx[idx] += is * (d - inv_c * sum_d - (*xhat)[idx] * inv_c * sum_dx);
                    }
                }
            }
        };
        return o;
    }

    // ---- convolution ---------------------------------------------------------

    // x: (Cin, H*W); w: (Cout, Cin*k*k); 'same' padding when stride 1, floor(H/2) when stride 2
    Var<T> conv2d(Var<T> x, Var<T> w, Var<T> b, int H, int W, int k, int stride) {
        int Cin = x.val().rows();
        int Cout = w.val().rows();
        if (w.val().cols() != Cin * k * k) throw std::invalid_argument("conv2d: kernel shape");
        int pad = k / 2;
        int Ho = (H + 2 * pad - k) / stride + 1;
        int Wo = (W + 2 * pad - k) / stride + 1;
        auto cols = std::make_shared<Tensor<T>>(std::vector<int>{Cin * k * k, Ho * Wo});
        im2col(x.val().ptr(), Cin, H, W, k, stride, pad, Ho, Wo, cols->ptr());

        Tensor<T> out({Cout, Ho * Wo});
        as_mat(out, Cout, Ho * Wo).noalias() = as_mat(w.val(), Cout, Cin * k * k) * as_mat(*cols, Cin * k * k, Ho * Wo);
        if (b.defined())
            for (int c = 0; c < Cout; ++c)
                for (int j = 0; j < Ho * Wo; ++j) out[(int64_t)c * Ho * Wo + j] += b.val()[c];

        bool needs = x.n->needs_grad || w.n->needs_grad || (b.defined() && b.n->needs_grad);
        Var<T> o = make(std::move(out), needs);
        if (!needs) return o;
        Node<T>*on = o.n, *xn = x.n, *wn = w.n, *bn = b.defined() ? b.n : nullptr;
        on->back = [on, xn, wn, bn, cols, Cin, Cout, H, W, k, stride, pad, Ho, Wo]() {
            const Tensor<T>& go = on->grad();
            auto G = as_mat(go, Cout, Ho * Wo);
            if (bn && bn->needs_grad) {
                Tensor<T>& gb = bn->grad();
                for (int c = 0; c < Cout; ++c) {
                    T s = 0;
                    for (int j = 0; j < Ho * Wo; ++j) s += go[(int64_t)c * Ho * Wo + j];
                    gb[c] += s;
                }
            }
            if (wn->needs_grad) {
                as_mat(wn->grad(), Cout, Cin * k * k).noalias() += G * as_mat(*cols, Cin * k * k, Ho * Wo).transpose();
            }
            if (xn->needs_grad) {
                Tensor<T> dcols({Cin * k * k, Ho * Wo});
                as_mat(dcols, Cin * k * k, Ho * Wo).noalias() = as_mat(wn->val(), Cout, Cin * k * k).transpose() * G;
                col2im(dcols.ptr(), Cin, H, W, k, stride, pad, Ho, Wo, xn->grad().ptr());
            }
        };
        return o;
    }

    // x: (C, H*W) -> (C, 2H*2W) nearest neighbor
    Var<T> upsample2x(Var<T> x, int H, int W) {
        int C = x.val().rows();
        Tensor<T> out({C, 4 * H * W});
        for (int c = 0; c < C; ++c) {
            const T* src = x.val().ptr() + (int64_t)c * H * W;
            T* dst = out.ptr() + (int64_t)c * 4 * H * W;
            for (int i = 0; i < 2 * H; ++i)
                for (int j = 0; j < 2 * W; ++j) dst[i * 2 * W + j] = src[(i / 2) * W + (j / 2)];
        }
        return unary(std::move(out), x, [C, H, W](Node<T>* o, Node<T>* p) {
            Tensor<T>& g = p->grad();
            const Tensor<T>& go = o->grad();
            for (int c = 0; c < C; ++c) {
                const T* src = go.ptr() + (int64_t)c * 4 * H * W;
                T* dst = g.ptr() + (int64_t)c * H * W;
                for (int i = 0; i < 2 * H; ++i)
                    for (int j = 0; j < 2 * W; ++j) dst[(i / 2) * W + (j / 2)] += src[i * 2 * W + j];
            }
        });
    }

    // ---- reductions / losses --------------------------------------------------

    Var<T> mean_all(Var<T> x) {
        int64_t n = x.val().numel();
        T s = 0;
        for (const T& v : x.val().data) s += v;
        Tensor<T> out = Tensor<T>::scalar(s / (T)n);
        return unary(std::move(out), x, [n](Node<T>* o, Node<T>* p) {
            T g = o->grad()[0] / (T)n;
            for (auto& v : p->grad().data) v += g;
        });
    }

    Var<T> mse(Var<T> a, Var<T> b) {
        check_same(a, b, "mse");
        int64_t n = a.val().numel();
        T s = 0;
        for (int64_t i = 0; i < n; ++i) { T d = a.val()[i] - b.val()[i]; s += d * d; }
        Tensor<T> out = Tensor<T>::scalar(s / (T)n);
        return unary_or_binary(std::move(out), a, b, [n](Node<T>* o, Node<T>* pa, Node<T>* pb) {
            T g = o->grad()[0] * T(2) / (T)n;
            if (pa->needs_grad) {
                Tensor<T>& ga = pa->grad();
                for (int64_t i = 0; i < n; ++i) ga[i] += g * (pa->val()[i] - pb->val()[i]);
            }
            if (pb->needs_grad) {
                Tensor<T>& gb = pb->grad();
                for (int64_t i = 0; i < n; ++i) gb[i] += g * (pb->val()[i] - pa->val()[i]);
            }
        });
    }

    // mean |x| over elements where per-location mask == 0 (background), over all
    // channels; mask has one value per spatial location (cols of x). Returns 0
    // if the background is empty.
    Var<T> masked_background_abs_mean(Var<T> x, const Tensor<T>& mask) {
        int C = x.val().rows(), S = x.val().cols();
        if (mask.numel() != S) throw std::invalid_argument("masked_background_abs_mean: mask size");
        int64_t n_bg = 0;
        for (int j = 0; j < S; ++j)
            if (mask[j] == T(0)) ++n_bg;
        if (n_bg == 0) return scalar(T(0));
        int64_t n = n_bg * C;
        T s = 0;
        for (int c = 0; c < C; ++c)
            for (int j = 0; j < S; ++j)
                if (mask[j] == T(0)) s += std::abs(x.val()[(int64_t)c * S + j]);
        Tensor<T> out = Tensor<T>::scalar(s / (T)n);
        Tensor<T> msk = mask;
        return unary(std::move(out), x, [C, S, n, msk](Node<T>* o, Node<T>* p) {
            T g = o->grad()[0] / (T)n;
            Tensor<T>& gx = p->grad();
            const Tensor<T>& xv = p->val();
            for (int c = 0; c < C; ++c)
                for (int j = 0; j < S; ++j)
                    if (msk[j] == T(0)) {
                        int64_t idx = (int64_t)c * S + j;
                        gx[idx] += g * (xv[idx] > T(0) ? T(1) : (xv[idx] < T(0) ? T(-1) : T(0)));
                    }
        });
    }

    // Per-location cosine alignment against a constant target:
    //   loss = (1/R) * sum_i mask[i] ? (1 - cos(target_i, x_i)) : 0
    // Locations where either vector is all-zero contribute 0 (cosine taken as 1).
    // Gradient flows to x only.
    Var<T> cosine_align_rows(Var<T> x, const Tensor<T>& target, const Tensor<T>& mask) {
        int R = x.val().rows(), C = x.val().cols();
        if (!(target.shape == x.val().shape)) throw std::invalid_argument("cosine_align_rows: target shape");
        if (mask.numel() != R) throw std::invalid_argument("cosine_align_rows: mask size");
        T total = 0;
        for (int i = 0; i < R; ++i) {
            if (mask[i] == T(0)) continue;
            const T* u = target.ptr() + (int64_t)i * C;
            const T* v = x.val().ptr() + (int64_t)i * C;
            T uu = 0, vv = 0, uv = 0;
            for (int j = 0; j < C; ++j) { uu += u[j] * u[j]; vv += v[j] * v[j]; uv += u[j] * v[j]; }
            if (uu == T(0) || vv == T(0)) continue;
            total += T(1) - uv / (std::sqrt(uu) * std::sqrt(vv));
        }
        Tensor<T> out = Tensor<T>::scalar(total / (T)R);
        Tensor<T> tgt = target, msk = mask;
        return unary(std::move(out), x, [R, C, tgt, msk](Node<T>* o, Node<T>* p) {
            T g0 = o->grad()[0] / (T)R;
            Tensor<T>& gx = p->grad();
            const Tensor<T>& xv = p->val();
            for (int i = 0; i < R; ++i) {
                if (msk[i] == T(0)) continue;
                const T* u = tgt.ptr() + (int64_t)i * C;
                const T* v = xv.ptr() + (int64_t)i * C;
                T uu = 0, vv = 0, uv = 0;
                for (int j = 0; j < C; ++j) { uu += u[j] * u[j]; vv += v[j] * v[j]; uv += u[j] * v[j]; }
                if (uu == T(0) || vv == T(0)) continue;
                T nu = std::sqrt(uu), nv = std::sqrt(vv);
                // d(1-cos)/dv_j = -(u_j/(nu*nv) - uv*v_j/(nu*nv^3))
                T a = T(1) / (nu * nv), b = uv / (nu * nv * vv);
                T* gr = gx.ptr() + (int64_t)i * C;
                for (int j = 0; j < C; ++j) gr[j] += g0 * (b * v[j] - a * u[j]);
            }
        });
    }

    // mean softmax cross-entropy over rows of logits against integer labels
    Var<T> softmax_xent_rows(Var<T> logits, const std::vector<int>& labels) {
        int R = logits.val().rows(), C = logits.val().cols();
        if ((int)labels.size() != R) throw std::invalid_argument("softmax_xent_rows: label count");
        auto probs = std::make_shared<Tensor<T>>(std::vector<int>{R, C});
        T total = 0;
        for (int i = 0; i < R; ++i) {
            const T* row = logits.val().ptr() + (int64_t)i * C;
            T* pr = probs->ptr() + (int64_t)i * C;
            T mx = row[0];
            for (int j = 1; j < C; ++j) mx = std::max(mx, row[j]);
            T s = 0;
            for (int j = 0; j < C; ++j) { pr[j] = std::exp(row[j] - mx); s += pr[j]; }
            for (int j = 0; j < C; ++j) pr[j] /= s;
            if (labels[i] < 0 || labels[i] >= C) throw std::out_of_range("softmax_xent_rows: label");
            total -= std::log(std::max(pr[labels[i]], T(1e-30)));
        }
        Tensor<T> out = Tensor<T>::scalar(total / (T)R);
        return unary(std::move(out), logits, [probs, labels, R, C](Node<T>* o, Node<T>* p) {
            T g = o->grad()[0] / (T)R;
            Tensor<T>& gx = p->grad();
            for (int i = 0; i < R; ++i)
                for (int j = 0; j < C; ++j)
                    gx[(int64_t)i * C + j] += g * ((*probs)[(int64_t)i * C + j] - (labels[i] == j ? T(1) : T(0)));
        });
    }

    // mean binary cross-entropy with logits against targets in [0,1]
    Var<T> bce_with_logits(Var<T> x, const Tensor<T>& target) {
        if (!(target.shape == x.val().shape)) throw std::invalid_argument("bce_with_logits: target shape");
        int64_t n = x.val().numel();
        T total = 0;
        for (int64_t i = 0; i < n; ++i) {
            T z = x.val()[i], t = target[i];
            // log(1+exp(z)) computed stably
            T sp = z > 0 ? z + std::log1p(std::exp(-z)) : std::log1p(std::exp(z));
            total += sp - t * z;
        }
        Tensor<T> out = Tensor<T>::scalar(total / (T)n);
        Tensor<T> tgt = target;
        return unary(std::move(out), x, [tgt, n](Node<T>* o, Node<T>* p) {
            T g = o->grad()[0] / (T)n;
            Tensor<T>& gx = p->grad();
            for (int64_t i = 0; i < n; ++i) {
                T s = T(1) / (T(1) + std::exp(-p->val()[i]));
                gx[i] += g * (s - tgt[i]);
            }
        });
    }

    // ---- backward -------------------------------------------------------------

    void backward(Var<T> loss) {
        if (loss.val().numel() != 1) throw std::invalid_argument("backward: loss must be scalar");
        if (!loss.n->needs_grad) throw std::invalid_argument("backward: loss does not require grad");
        loss.n->grad()[0] = T(1);
        for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) {
            Node<T>* n = it->get();
            if (n->back && n->has_grad()) n->back();
        }
    }

  private:
    std::deque<std::unique_ptr<Node<T>>> nodes_;

    static void axpy(Tensor<T>& y, const Tensor<T>& x, T a) {
        for (int64_t i = 0; i < x.numel(); ++i) y[i] += a * x[i];
    }

    static void check_same(Var<T> a, Var<T> b, const char* op) {
        if (!a.val().same_shape(b.val()))
            throw std::invalid_argument(std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " +
                                        shape_str(b.shape()));
    }

    template <typename F>
    Var<T> unary(Tensor<T> out, Var<T> a, F f) {
        Var<T> o = make(std::move(out), a.n->needs_grad);
        if (!o.n->needs_grad) return o;
        Node<T>*on = o.n, *an = a.n;
        on->back = [on, an, f]() {
            if (an->needs_grad) { an->grad(); f(on, an); }
        };
        return o;
    }

    template <typename F>
    Var<T> unary_or_binary(Tensor<T> out, Var<T> a, Var<T> b, F f) {
        bool needs = a.n->needs_grad || b.n->needs_grad;
        Var<T> o = make(std::move(out), needs);
        if (!needs) return o;
        Node<T>*on = o.n, *an = a.n, *bn = b.n;
        on->back = [on, an, bn, f]() {
            if (an->needs_grad) an->grad();
            if (bn->needs_grad) bn->grad();
            f(on, an, bn);
        };
        return o;
    }

    static void im2col(const T* x, int Cin, int H, int W, int k, int stride, int pad, int Ho, int Wo, T* cols) {
        for (int c = 0; c < Cin; ++c) {
            for (int ki = 0; ki < k; ++ki) {
                for (int kj = 0; kj < k; ++kj) {
                    T* dst = cols + ((int64_t)(c * k + ki) * k + kj) * Ho * Wo;
                    for (int oi = 0; oi < Ho; ++oi) {
                        int ii = oi * stride + ki - pad;
                        if (ii < 0 || ii >= H) {
                            for (int oj = 0; oj < Wo; ++oj) dst[oi * Wo + oj] = T(0);
                            continue;
                        }
                        const T* src = x + (int64_t)c * H * W + (int64_t)ii * W;
                        for (int oj = 0; oj < Wo; ++oj) {
                            int jj = oj * stride + kj - pad;
                            dst[oi * Wo + oj] = (jj < 0 || jj >= W) ? T(0) : src[jj];
                        }
                    }
                }
            }
        }
    }

    static void col2im(const T* cols, int Cin, int H, int W, int k, int stride, int pad, int Ho, int Wo, T* dx) {
        for (int c = 0; c < Cin; ++c) {
            for (int ki = 0; ki < k; ++ki) {
                for (int kj = 0; kj < k; ++kj) {
                    const T* src = cols + ((int64_t)(c * k + ki) * k + kj) * Ho * Wo;
                    for (int oi = 0; oi < Ho; ++oi) {
                        int ii = oi * stride + ki - pad;
                        if (ii < 0 || ii >= H) continue;
                        T* dst = dx + (int64_t)c * H * W + (int64_t)ii * W;
                        for (int oj = 0; oj < Wo; ++oj) {
                            int jj = oj * stride + kj - pad;
                            if (jj >= 0 && jj < W) dst[jj] += src[oi * Wo + oj];
                        }
                    }
                }
            }
        }
    }
};

// scaled dot-product attention built from primitives; rows of q are queries
template <typename T>
Var<T> attention(Tape<T>& t, Var<T> q, Var<T> k, Var<T> v) {
    int dk = q.val().cols();
    if (k.val().cols() != dk) throw std::invalid_argument("attention: q/k dim mismatch");
    if (k.val().rows() != v.val().rows()) throw std::invalid_argument("attention: k/v token mismatch");
    Var<T> logits = t.matmul(q, k, false, true);
    logits = t.scale(logits, T(1) / std::sqrt((T)dk));
    Var<T> w = t.softmax_rows(logits);
    return t.matmul(w, v);
}

}  // namespace idfuse
