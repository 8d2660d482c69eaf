#pragma once

// Reverse-mode automatic differentiation over real-valued tensors. A Tape
// records one backward closure per forward op, in topological (recording)
// order; backward() replays them in reverse. Gradients accumulate at leaves
// across backward calls; non-leaf gradients are scratch and reset per call.

#include <cmath>
#include <functional>
#include <memory>
#include <string>
#include <vector>

#include "ptycho/common.hpp"

namespace ptycho::nn {

struct TensorImpl {
    std::vector<double> v;
    std::vector<double> g;  // empty until first needed
    std::vector<int> shape;
    bool requires_grad = false;
    int node_id = -1;  // producing op on the tape; -1 for leaves
};

inline size_t numel_of(const std::vector<int>& shape) {
    size_t n = 1;
    for (int d : shape) n *= size_t(d);
    return n;
}

class Tensor {
  public:
    Tensor() = default;
    explicit Tensor(std::shared_ptr<TensorImpl> impl) : p_(std::move(impl)) {}

    static Tensor leaf(std::vector<int> shape, bool requires_grad = false) {
        auto impl = std::make_shared<TensorImpl>();
        impl->shape = std::move(shape);
        impl->v.assign(numel_of(impl->shape), 0.0);
        impl->requires_grad = requires_grad;
        return Tensor(impl);
    }

    bool defined() const { return bool(p_); }
    TensorImpl* impl() const { return p_.get(); }
    const std::shared_ptr<TensorImpl>& ptr() const { return p_; }

    const std::vector<int>& shape() const { return p_->shape; }
    size_t numel() const { return p_->v.size(); }
    std::vector<double>& val() { return p_->v; }
    const std::vector<double>& val() const { return p_->v; }
    bool requires_grad() const { return p_->requires_grad; }
    void set_requires_grad(bool b) { p_->requires_grad = b; }

    double item() const {
        if (p_->v.size() != 1)
            throw DimensionError("item() on tensor of " + std::to_string(p_->v.size()) + " elements");
        return p_->v[0];
    }

    std::vector<double>& grad() {
        if (p_->g.empty()) p_->g.assign(p_->v.size(), 0.0);
        return p_->g;
    }
    bool has_grad() const { return !p_->g.empty(); }
    void zero_grad() { p_->g.assign(p_->v.size(), 0.0); }

    std::string shape_str() const {
        std::string s = "[";
        for (size_t i = 0; i < p_->shape.size(); ++i) s += (i ? "," : "") + std::to_string(p_->shape[i]);
        return s + "]";
    }

  private:
    std::shared_ptr<TensorImpl> p_;
};

inline void ensure_grad(TensorImpl* t) {
    if (t->g.empty()) t->g.assign(t->v.size(), 0.0);
}

class Tape {
  public:
    // When recording is off, ops run forward-only and outputs carry no grad.
    bool recording = true;

    int record(std::shared_ptr<TensorImpl> output, std::function<void()> back) {
        outputs_.push_back(std::move(output));
        nodes_.push_back(std::move(back));
        const int id = int(nodes_.size()) - 1;
        outputs_.back()->node_id = id;
        return id;
    }

    size_t size() const { return nodes_.size(); }

    void clear() {
        nodes_.clear();
        outputs_.clear();
    }

    // Populates d(loss)/d(leaf) for every requires_grad leaf reachable from
    // loss. Leaf gradients accumulate across calls; interior gradients are
    // reset here so each call contributes exactly one factor.
    void backward(const Tensor& loss) {
        if (nodes_.empty()) throw Error("backward on empty tape");
        if (loss.numel() != 1) throw DimensionError("backward needs a scalar loss, got " + loss.shape_str());
        if (!loss.requires_grad()) throw Error("backward on a loss that requires no grad");
        for (const auto& out : outputs_) out->g.assign(out->v.size(), 0.0);
        ensure_grad(loss.impl());
        loss.impl()->g[0] = 1.0;
        const int last = loss.impl()->node_id;
        if (last < 0) throw Error("loss tensor is a leaf; nothing to differentiate");
        for (int i = last; i >= 0; --i) nodes_[size_t(i)]();
    }

  private:
    std::vector<std::function<void()>> nodes_;
    std::vector<std::shared_ptr<TensorImpl>> outputs_;
};

namespace detail {

inline Tensor make_out(std::vector<int> shape, bool requires_grad) {
    Tensor t = Tensor::leaf(std::move(shape), requires_grad);
    return t;
}

inline void check_same_shape(const Tensor& a, const Tensor& b, const char* op) {
    if (a.shape() != b.shape())
        throw DimensionError(std::string(op) + ": shape mismatch " + a.shape_str() + " vs " + b.shape_str());
}

}  // namespace detail

// ---- elementwise binary ----

inline Tensor add(Tape& tape, const Tensor& a, const Tensor& b) {
    detail::check_same_shape(a, b, "add");
    const bool rg = tape.recording && (a.requires_grad() || b.requires_grad());
    Tensor out = detail::make_out(a.shape(), rg);
    for (size_t i = 0; i < out.numel(); ++i) out.val()[i] = a.val()[i] + b.val()[i];
    if (rg) {
        auto ai = a.ptr(), bi = b.ptr(), oi = out.ptr();
        tape.record(oi, [ai, bi, oi] {
            if (ai->requires_grad) {
                ensure_grad(ai.get());
                for (size_t i = 0; i < oi->g.size(); ++i) ai->g[i] += oi->g[i];
            }
            if (bi->requires_grad) {
                ensure_grad(bi.get());
                for (size_t i = 0; i < oi->g.size(); ++i) bi->g[i] += oi->g[i];
            }
        });
    }
    return out;
}

inline Tensor mul(Tape& tape, const Tensor& a, const Tensor& b) {
    detail::check_same_shape(a, b, "mul");
    const bool rg = tape.recording && (a.requires_grad() || b.requires_grad());
    Tensor out = detail::make_out(a.shape(), rg);
    for (size_t i = 0; i < out.numel(); ++i) out.val()[i] = a.val()[i] * b.val()[i];
    if (rg) {
        auto ai = a.ptr(), bi = b.ptr(), oi = out.ptr();
        tape.record(oi, [ai, bi, oi] {
            if (ai->requires_grad) {
                ensure_grad(ai.get());
                for (size_t i = 0; i < oi->g.size(); ++i) ai->g[i] += oi->g[i] * bi->v[i];
            }
            if (bi->requires_grad) {
                ensure_grad(bi.get());
                for (size_t i = 0; i < oi->g.size(); ++i) bi->g[i] += oi->g[i] * ai->v[i];
            }
        });
    }
    return out;
}

// ---- elementwise unary ----

inline Tensor scale(Tape& tape, const Tensor& a, double alpha) {
    const bool rg = tape.recording && a.requires_grad();
    Tensor out = detail::make_out(a.shape(), rg);
    for (size_t i = 0; i < out.numel(); ++i) out.val()[i] = alpha * a.val()[i];
    if (rg) {
        auto ai = a.ptr();
        auto oi = out.ptr();
        tape.record(oi, [ai, oi, alpha] {
            ensure_grad(ai.get());
            for (size_t i = 0; i < oi->g.size(); ++i) ai->g[i] += alpha * oi->g[i];
        });
    }
    return out;
}

inline Tensor leaky_relu(Tape& tape, const Tensor& a, double slope = 0.2) {
    const bool rg = tape.recording && a.requires_grad();
    Tensor out = detail::make_out(a.shape(), rg);
    for (size_t i = 0; i < out.numel(); ++i) {
        const double x = a.val()[i];
        out.val()[i] = x > 0.0 ? x : slope * x;
    }
    if (rg) {
        auto ai = a.ptr();
        auto oi = out.ptr();
        tape.record(oi, [ai, oi, slope] {
            ensure_grad(ai.get());
            for (size_t i = 0; i < oi->g.size(); ++i) ai->g[i] += (ai->v[i] > 0.0 ? 1.0 : slope) * oi->g[i];
        });
    }
    return out;
}

inline Tensor sigmoid(Tape& tape, const Tensor& a) {
    const bool rg = tape.recording && a.requires_grad();
    Tensor out = detail::make_out(a.shape(), rg);
    for (size_t i = 0; i < out.numel(); ++i) out.val()[i] = 1.0 / (1.0 + std::exp(-a.val()[i]));
    if (rg) {
        auto ai = a.ptr();
        auto oi = out.ptr();
        tape.record(oi, [ai, oi] {
            ensure_grad(ai.get());
            for (size_t i = 0; i < oi->g.size(); ++i) {
                const double y = oi->v[i];
                ai->g[i] += y * (1.0 - y) * oi->g[i];
            }
        });
    }
    return out;
}

inline Tensor abs(Tape& tape, const Tensor& a) {
    const bool rg = tape.recording && a.requires_grad();
    Tensor out = detail::make_out(a.shape(), rg);
    for (size_t i = 0; i < out.numel(); ++i) out.val()[i] = std::abs(a.val()[i]);
    if (rg) {
        auto ai = a.ptr();
        auto oi = out.ptr();
        tape.record(oi, [ai, oi] {
            ensure_grad(ai.get());
            for (size_t i = 0; i < oi->g.size(); ++i) {
                const double x = ai->v[i];
                ai->g[i] += (x > 0.0 ? 1.0 : (x < 0.0 ? -1.0 : 0.0)) * oi->g[i];
            }
        });
    }
    return out;
}

inline Tensor log(Tape& tape, const Tensor& a) {
    const bool rg = tape.recording && a.requires_grad();
    Tensor out = detail::make_out(a.shape(), rg);
    for (size_t i = 0; i < out.numel(); ++i) {
        if (!(a.val()[i] > 0.0))
            throw DomainError("log requires strictly positive input, got " + std::to_string(a.val()[i]));
        out.val()[i] = std::log(a.val()[i]);
    }
    if (rg) {
        auto ai = a.ptr();
        auto oi = out.ptr();
        tape.record(oi, [ai, oi] {
            ensure_grad(ai.get());
            for (size_t i = 0; i < oi->g.size(); ++i) ai->g[i] += oi->g[i] / ai->v[i];
        });
    }
    return out;
}

inline Tensor square(Tape& tape, const Tensor& a) {
    const bool rg = tape.recording && a.requires_grad();
    Tensor out = detail::make_out(a.shape(), rg);
    for (size_t i = 0; i < out.numel(); ++i) out.val()[i] = a.val()[i] * a.val()[i];
    if (rg) {
        auto ai = a.ptr();
        auto oi = out.ptr();
        tape.record(oi, [ai, oi] {
            ensure_grad(ai.get());
            for (size_t i = 0; i < oi->g.size(); ++i) ai->g[i] += 2.0 * ai->v[i] * oi->g[i];
        });
    }
    return out;
}

// ---- reductions ----

inline Tensor sum(Tape& tape, const Tensor& a) {
    const bool rg = tape.recording && a.requires_grad();
    Tensor out = detail::make_out({1}, rg);
    double s = 0.0;
    for (double x : a.val()) s += x;
    out.val()[0] = s;
    if (rg) {
        auto ai = a.ptr();
        auto oi = out.ptr();
        tape.record(oi, [ai, oi] {
            ensure_grad(ai.get());
            for (size_t i = 0; i < ai->g.size(); ++i) ai->g[i] += oi->g[0];
        });
    }
    return out;
}

inline Tensor mean(Tape& tape, const Tensor& a) {
    const bool rg = tape.recording && a.requires_grad();
    Tensor out = detail::make_out({1}, rg);
    double s = 0.0;
    for (double x : a.val()) s += x;
    const double inv = 1.0 / double(a.numel());
    out.val()[0] = s * inv;
    if (rg) {
        auto ai = a.ptr();
        auto oi = out.ptr();
        tape.record(oi, [ai, oi, inv] {
            ensure_grad(ai.get());
            for (size_t i = 0; i < ai->g.size(); ++i) ai->g[i] += inv * oi->g[0];
        });
    }
    return out;
}

// ---- shape ----

inline Tensor reshape(Tape& tape, const Tensor& a, std::vector<int> shape) {
    if (numel_of(shape) != a.numel())
        throw DimensionError("reshape from " + a.shape_str() + " to incompatible element count");
    const bool rg = tape.recording && a.requires_grad();
    Tensor out = detail::make_out(std::move(shape), rg);
    out.val() = a.val();
    if (rg) {
        auto ai = a.ptr();
        auto oi = out.ptr();
        tape.record(oi, [ai, oi] {
            ensure_grad(ai.get());
            for (size_t i = 0; i < oi->g.size(); ++i) ai->g[i] += oi->g[i];
        });
    }
    return out;
}

// ---- matmul ----

inline Tensor matmul(Tape& tape, const Tensor& a, const Tensor& b) {
    if (a.shape().size() != 2 || b.shape().size() != 2 || a.shape()[1] != b.shape()[0])
        throw DimensionError("matmul: incompatible shapes " + a.shape_str() + " x " + b.shape_str());
    const int m = a.shape()[0], k = a.shape()[1], n = b.shape()[1];
    const bool rg = tape.recording && (a.requires_grad() || b.requires_grad());
    Tensor out = detail::make_out({m, n}, rg);
    const double* av = a.val().data();
    const double* bv = b.val().data();
    double* ov = out.val().data();
    for (int i = 0; i < m; ++i) {
        for (int j = 0; j < n; ++j) ov[i * n + j] = 0.0;
        for (int l = 0; l < k; ++l) {
            const double aa = av[i * k + l];
            const double* brow = bv + size_t(l) * n;
            double* orow = ov + size_t(i) * n;
            for (int j = 0; j < n; ++j) orow[j] += aa * brow[j];
        }
    }
    if (rg) {
        auto ai = a.ptr(), bi = b.ptr(), oi = out.ptr();
        tape.record(oi, [ai, bi, oi, m, k, n] {
            const double* go = oi->g.data();
            if (ai->requires_grad) {
                ensure_grad(ai.get());
                for (int i = 0; i < m; ++i)
                    for (int l = 0; l < k; ++l) {
                        double s = 0.0;
                        const double* grow = go + size_t(i) * n;
                        const double* brow = bi->v.data() + size_t(l) * n;
                        for (int j = 0; j < n; ++j) s += grow[j] * brow[j];
                        ai->g[size_t(i) * k + l] += s;
                    }
            }
            if (bi->requires_grad) {
                ensure_grad(bi.get());
                for (int l = 0; l < k; ++l)
                    for (int i = 0; i < m; ++i) {
                        const double aa = ai->v[size_t(i) * k + l];
                        const double* grow = go + size_t(i) * n;
                        double* brow = bi->g.data() + size_t(l) * n;
                        for (int j = 0; j < n; ++j) brow[j] += aa * grow[j];
                    }
            }
        });
    }
    return out;
}

// ---- spatial ops on [C,H,W] ----

namespace detail {

inline void check_chw(const Tensor& x, const char* op) {
    if (x.shape().size() != 3)
        throw DimensionError(std::string(op) + " expects [C,H,W], got " + x.shape_str());
}

// Zero-padded copy, one ring: [C,H,W] -> C x (H+2) x (W+2).
inline std::vector<double> pad1(const std::vector<double>& v, int ch, int h, int w) {
    const int ph = h + 2, pw = w + 2;
    std::vector<double> out(size_t(ch) * ph * pw, 0.0);
    for (int c = 0; c < ch; ++c)
        for (int r = 0; r < h; ++r) {
            const double* src = v.data() + (size_t(c) * h + r) * w;
            double* dst = out.data() + (size_t(c) * ph + r + 1) * pw + 1;
            for (int i = 0; i < w; ++i) dst[i] = src[i];
        }
    return out;
}

}  // namespace detail

// 3x3 convolution, stride 1, zero padding 1, optional per-channel bias.
// x [C,H,W], kernel [OC,C,3,3], bias [OC] -> [OC,H,W].
inline Tensor conv2d(Tape& tape, const Tensor& x, const Tensor& kernel, const Tensor& bias) {
    detail::check_chw(x, "conv2d");
    if (kernel.shape().size() != 4 || kernel.shape()[2] != 3 || kernel.shape()[3] != 3)
        throw DimensionError("conv2d kernel must be [OC,IC,3,3], got " + kernel.shape_str());
    const int ch = x.shape()[0], h = x.shape()[1], w = x.shape()[2];
    const int oc = kernel.shape()[0];
    if (kernel.shape()[1] != ch)
        throw DimensionError("conv2d: kernel " + kernel.shape_str() + " vs input " + x.shape_str());
    if (bias.defined() && (bias.shape().size() != 1 || bias.shape()[0] != oc))
        throw DimensionError("conv2d bias must be [OC], got " + bias.shape_str());

    const bool rg = tape.recording &&
                    (x.requires_grad() || kernel.requires_grad() || (bias.defined() && bias.requires_grad()));
    Tensor out = detail::make_out({oc, h, w}, rg);
    const int ph = h + 2, pw = w + 2;
    std::vector<double> pad = detail::pad1(x.val(), ch, h, w);
    const double* kv = kernel.val().data();
    double* ov = out.val().data();
    for (int o = 0; o < oc; ++o) {
        double* oplane = ov + size_t(o) * h * w;
        const double b = bias.defined() ? bias.val()[o] : 0.0;
        for (int i = 0; i < h * w; ++i) oplane[i] = b;
        for (int c = 0; c < ch; ++c) {
            const double* kk = kv + (size_t(o) * ch + c) * 9;
            const double* pplane = pad.data() + size_t(c) * ph * pw;
            for (int r = 0; r < h; ++r) {
                const double* r0 = pplane + size_t(r) * pw;
                const double* r1 = r0 + pw;
                const double* r2 = r1 + pw;
                double* orow = oplane + size_t(r) * w;
                for (int i = 0; i < w; ++i) {
                    orow[i] += kk[0] * r0[i] + kk[1] * r0[i + 1] + kk[2] * r0[i + 2] +
                               kk[3] * r1[i] + kk[4] * r1[i + 1] + kk[5] * r1[i + 2] +
                               kk[6] * r2[i] + kk[7] * r2[i + 1] + kk[8] * r2[i + 2];
                }
            }
        }
    }
    if (rg) {
        auto xi = x.ptr(), ki = kernel.ptr(), oi = out.ptr();
        auto bi = bias.defined() ? bias.ptr() : nullptr;
        tape.record(oi, [xi, ki, bi, oi, ch, h, w, oc] {
            const int ph = h + 2, pw = w + 2;
            const double* go = oi->g.data();
            if (bi && bi->requires_grad) {
                ensure_grad(bi.get());
                for (int o = 0; o < oc; ++o) {
                    double s = 0.0;
                    const double* gplane = go + size_t(o) * h * w;
                    for (int i = 0; i < h * w; ++i) s += gplane[i];
                    bi->g[o] += s;
                }
            }
            if (ki->requires_grad) {
                ensure_grad(ki.get());
                std::vector<double> padx = detail::pad1(xi->v, ch, h, w);
                for (int o = 0; o < oc; ++o) {
                    const double* gplane = go + size_t(o) * h * w;
                    for (int c = 0; c < ch; ++c) {
                        const double* pplane = padx.data() + size_t(c) * ph * pw;
                        double acc[9] = {0, 0, 0, 0, 0, 0, 0, 0, 0};
                        for (int r = 0; r < h; ++r) {
                            const double* grow = gplane + size_t(r) * w;
                            const double* r0 = pplane + size_t(r) * pw;
                            const double* r1 = r0 + pw;
                            const double* r2 = r1 + pw;
                            for (int i = 0; i < w; ++i) {
                                const double g = grow[i];
                                acc[0] += g * r0[i];
                                acc[1] += g * r0[i + 1];
                                acc[2] += g * r0[i + 2];
                                acc[3] += g * r1[i];
                                acc[4] += g * r1[i + 1];
                                acc[5] += g * r1[i + 2];
                                acc[6] += g * r2[i];
                                acc[7] += g * r2[i + 1];
                                acc[8] += g * r2[i + 2];
                            }
                        }
                        double* kg = ki->g.data() + (size_t(o) * ch + c) * 9;
                        for (int t = 0; t < 9; ++t) kg[t] += acc[t];
                    }
                }
            }
            if (xi->requires_grad) {
                ensure_grad(xi.get());
                // gin = correlation of padded gout with the 180-rotated kernel.
                std::vector<double> padg = detail::pad1(oi->g, oc, h, w);
                for (int c = 0; c < ch; ++c) {
                    double* xplane = xi->g.data() + size_t(c) * h * w;
                    for (int o = 0; o < oc; ++o) {
                        const double* kk = ki->v.data() + (size_t(o) * ch + c) * 9;
                        const double* gplane = padg.data() + size_t(o) * ph * pw;
                        for (int r = 0; r < h; ++r) {
                            const double* r0 = gplane + size_t(r) * pw;
                            const double* r1 = r0 + pw;
                            const double* r2 = r1 + pw;
                            double* xrow = xplane + size_t(r) * w;
                            for (int i = 0; i < w; ++i) {
                                xrow[i] += kk[8] * r0[i] + kk[7] * r0[i + 1] + kk[6] * r0[i + 2] +
                                           kk[5] * r1[i] + kk[4] * r1[i + 1] + kk[3] * r1[i + 2] +
                                           kk[2] * r2[i] + kk[1] * r2[i + 1] + kk[0] * r2[i + 2];
                            }
                        }
                    }
                }
            }
        });
    }
    return out;
}

// Nearest-neighbour x2 upsampling: [C,H,W] -> [C,2H,2W].
inline Tensor upsample_nearest(Tape& tape, const Tensor& x) {
    detail::check_chw(x, "upsample_nearest");
    const int ch = x.shape()[0], h = x.shape()[1], w = x.shape()[2];
    const bool rg = tape.recording && x.requires_grad();
    Tensor out = detail::make_out({ch, 2 * h, 2 * w}, rg);
    const double* xv = x.val().data();
    double* ov = out.val().data();
    for (int c = 0; c < ch; ++c)
        for (int r = 0; r < h; ++r) {
            const double* src = xv + (size_t(c) * h + r) * w;
            double* d0 = ov + (size_t(c) * 2 * h + 2 * r) * 2 * w;
            double* d1 = d0 + 2 * w;
            for (int i = 0; i < w; ++i) {
                d0[2 * i] = d0[2 * i + 1] = src[i];
                d1[2 * i] = d1[2 * i + 1] = src[i];
            }
        }
    if (rg) {
        auto xi = x.ptr();
        auto oi = out.ptr();
        tape.record(oi, [xi, oi, ch, h, w] {
            ensure_grad(xi.get());
            const double* go = oi->g.data();
            for (int c = 0; c < ch; ++c)
                for (int r = 0; r < h; ++r) {
                    double* dst = xi->g.data() + (size_t(c) * h + r) * w;
                    const double* g0 = go + (size_t(c) * 2 * h + 2 * r) * 2 * w;
                    const double* g1 = g0 + 2 * w;
                    for (int i = 0; i < w; ++i)
                        dst[i] += g0[2 * i] + g0[2 * i + 1] + g1[2 * i] + g1[2 * i + 1];
                }
        });
    }
    return out;
}

// 2x2 average pooling: [C,H,W] -> [C,H/2,W/2]; H and W must be even.
inline Tensor avgpool(Tape& tape, const Tensor& x) {
    detail::check_chw(x, "avgpool");
    const int ch = x.shape()[0], h = x.shape()[1], w = x.shape()[2];
    if (h % 2 || w % 2) throw DimensionError("avgpool needs even spatial size, got " + x.shape_str());
    const bool rg = tape.recording && x.requires_grad();
    Tensor out = detail::make_out({ch, h / 2, w / 2}, rg);
    const double* xv = x.val().data();
    double* ov = out.val().data();
    for (int c = 0; c < ch; ++c)
        for (int r = 0; r < h / 2; ++r) {
            const double* s0 = xv + (size_t(c) * h + 2 * r) * w;
            const double* s1 = s0 + w;
            double* dst = ov + (size_t(c) * (h / 2) + r) * (w / 2);
            for (int i = 0; i < w / 2; ++i)
                dst[i] = 0.25 * (s0[2 * i] + s0[2 * i + 1] + s1[2 * i] + s1[2 * i + 1]);
        }
    if (rg) {
        auto xi = x.ptr();
        auto oi = out.ptr();
        tape.record(oi, [xi, oi, ch, h, w] {
            ensure_grad(xi.get());
            const double* go = oi->g.data();
            for (int c = 0; c < ch; ++c)
                for (int r = 0; r < h / 2; ++r) {
                    double* d0 = xi->g.data() + (size_t(c) * h + 2 * r) * w;
                    double* d1 = d0 + w;
                    const double* src = go + (size_t(c) * (h / 2) + r) * (w / 2);
                    for (int i = 0; i < w / 2; ++i) {
                        const double g = 0.25 * src[i];
                        d0[2 * i] += g;
                        d0[2 * i + 1] += g;
                        d1[2 * i] += g;
                        d1[2 * i + 1] += g;
                    }
                }
        });
    }
    return out;
}

}  // namespace ptycho::nn
