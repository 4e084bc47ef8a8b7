#include "sst/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <sstream>

namespace sst {

namespace {

thread_local Graph* tl_current_graph = nullptr;

void require_defined(const Tensor& t, const char* op) {
    if (!t.defined()) throw Error(std::string(op) + ": undefined tensor");
}

std::vector<float> alloc_out(std::size_t n) { return std::vector<float>(n, 0.0f); }

}  // namespace

std::size_t shape_numel(const Shape& shape) {
    std::size_t n = 1;
    for (int d : shape) n *= static_cast<std::size_t>(d);
    return n;
}

bool same_shape(const Shape& a, const Shape& b) { return a == b; }

std::string shape_str(const Shape& shape) {
    std::ostringstream os;
    os << '[';
    for (std::size_t i = 0; i < shape.size(); ++i) {
        if (i) os << ',';
        os << shape[i];
    }
    os << ']';
    return os.str();
}

// ---------------------------------------------------------------------------
// Tensor
// ---------------------------------------------------------------------------

Tensor Tensor::zeros(Shape shape) { return full(std::move(shape), 0.0f); }

Tensor Tensor::full(Shape shape, float value) {
    for (int d : shape)
        if (d <= 0) throw ShapeMismatch("tensor shape dims must be positive, got " + shape_str(shape));
    Tensor t;
    t.shape_ = std::move(shape);
    t.data_ = std::make_shared<std::vector<float>>(shape_numel(t.shape_), value);
    return t;
}

Tensor Tensor::from_data(Shape shape, std::vector<float> values) {
    for (int d : shape)
        if (d <= 0) throw ShapeMismatch("tensor shape dims must be positive, got " + shape_str(shape));
    if (shape_numel(shape) != values.size())
        throw ShapeMismatch("data length " + std::to_string(values.size()) +
                            " does not match shape " + shape_str(shape));
    Tensor t;
    t.shape_ = std::move(shape);
    t.data_ = std::make_shared<std::vector<float>>(std::move(values));
    return t;
}

Tensor Tensor::scalar(float value) { return from_data({1}, {value}); }

Tensor Tensor::with_requires_grad() const {
    require_defined(*this, "with_requires_grad");
    Tensor t;
    t.shape_ = shape_;
    t.data_ = data_;
    t.requires_grad_ = true;
    t.grad_ = std::make_shared<std::vector<float>>();
    return t;
}

Tensor Tensor::detach() const {
    Tensor t;
    t.shape_ = shape_;
    t.data_ = data_;
    return t;
}

Tensor Tensor::clone() const {
    require_defined(*this, "clone");
    Tensor t;
    t.shape_ = shape_;
    t.data_ = std::make_shared<std::vector<float>>(*data_);
    return t;
}

std::span<const float> Tensor::grad() const {
    if (!has_grad()) throw MissingGrad("tensor has no gradient");
    return {grad_->data(), grad_->size()};
}

Tensor Tensor::grad_tensor() const {
    auto g = grad();
    return Tensor::from_data(shape_, std::vector<float>(g.begin(), g.end()));
}

void Tensor::zero_grad() {
    if (grad_) grad_->clear();
}

float Tensor::item() const {
    require_defined(*this, "item");
    if (numel() != 1) throw ShapeMismatch("item() requires a single-element tensor, shape " + shape_str(shape_));
    return (*data_)[0];
}

float Tensor::at(std::initializer_list<int> idx) const {
    require_defined(*this, "at");
    if (static_cast<int>(idx.size()) != ndim()) throw ShapeMismatch("at(): index rank mismatch");
    std::size_t flat = 0;
    int axis = 0;
    for (int i : idx) {
        if (i < 0 || i >= shape_[static_cast<std::size_t>(axis)]) throw ShapeMismatch("at(): index out of range");
        flat = flat * static_cast<std::size_t>(shape_[static_cast<std::size_t>(axis)]) + static_cast<std::size_t>(i);
        ++axis;
    }
    return (*data_)[flat];
}

// ---------------------------------------------------------------------------
// Graph / scope
// ---------------------------------------------------------------------------

Graph* Graph::current() { return tl_current_graph; }

int Graph::add_slot(std::size_t numel, bool needs_grad, std::shared_ptr<std::vector<float>> leaf_grad) {
    slots_.push_back({numel, needs_grad, std::move(leaf_grad)});
    return static_cast<int>(slots_.size()) - 1;
}

int Graph::enlist_leaf(const Tensor& t) {
    auto it = leaf_ids_.find(static_cast<const void*>(t.data_.get()));
    if (it != leaf_ids_.end()) return it->second;
    int id = add_slot(t.numel(), true, t.grad_);
    leaf_ids_.emplace(static_cast<const void*>(t.data_.get()), id);
    return id;
}

GraphScope::GraphScope(Graph& g) : prev_(tl_current_graph) { tl_current_graph = &g; }
GraphScope::~GraphScope() { tl_current_graph = prev_; }

/// Per-op recording helper. Inputs registered via input() get a value id when
/// they will receive gradient flow (-1 otherwise); the op is recorded only if
/// at least one input is tracked.
class OpRecorder {
public:
    OpRecorder() {
        Graph* g = Graph::current();
        g_ = (g && !g->consumed()) ? g : nullptr;
    }

    int input(const Tensor& t) {
        if (!g_) return -1;
        if (t.graph_ == g_ && t.node_ >= 0) {
            tracked_ = true;
            return t.node_;
        }
        if (t.requires_grad_) {
            tracked_ = true;
            return g_->enlist_leaf(t);
        }
        return -1;
    }

    bool active() const { return g_ != nullptr && tracked_; }

    /// Attaches out to the graph and returns its value id.
    int attach_output(Tensor& out) {
        int id = g_->add_slot(out.numel(), true, nullptr);
        out.graph_ = g_;
        out.node_ = id;
        return id;
    }

    void node(const char* op, std::vector<int> inputs, int output,
              std::function<void(BackwardBuffers&)> fn) {
        g_->nodes_.push_back({op, std::move(inputs), output, std::move(fn)});
    }

private:
    Graph* g_ = nullptr;
    bool tracked_ = false;
};

void backward(const Tensor& loss) {
    require_defined(loss, "backward");
    if (loss.numel() != 1) throw NonScalarLoss("backward: loss has shape " + shape_str(loss.shape()));
    Graph* g = loss.graph();
    if (!g || loss.node_id() < 0)
        throw GraphConsumed("backward: loss is not attached to a recorded graph");
    if (g->consumed_) throw GraphConsumed("backward: graph already consumed");
    g->consumed_ = true;

    BackwardBuffers buffers(g->slots_.size());
    buffers.acc(loss.node_id(), 1)[0] = 1.0f;

    for (auto it = g->nodes_.rbegin(); it != g->nodes_.rend(); ++it) {
        if (!buffers.seen(it->output)) continue;
        it->backward(buffers);
    }

    for (std::size_t i = 0; i < g->slots_.size(); ++i) {
        const auto& slot = g->slots_[i];
        if (!slot.leaf_grad || !buffers.seen(static_cast<int>(i))) continue;
        auto& dst = *slot.leaf_grad;
        const auto& src = buffers.at(static_cast<int>(i));
        if (dst.empty()) dst.assign(slot.numel, 0.0f);
        for (std::size_t j = 0; j < src.size(); ++j) dst[j] += src[j];
    }
}

// ---------------------------------------------------------------------------
// Elementwise
// ---------------------------------------------------------------------------

namespace {

// Strides of b viewed through a's index space, 0 on broadcast axes.
std::vector<std::size_t> broadcast_strides(const Shape& a, const Shape& b) {
    if (a.size() != b.size())
        throw ShapeMismatch("elementwise: rank mismatch " + shape_str(a) + " vs " + shape_str(b));
    std::vector<std::size_t> strides(b.size());
    std::size_t s = 1;
    for (int d = static_cast<int>(b.size()) - 1; d >= 0; --d) {
        const auto du = static_cast<std::size_t>(d);
        if (b[du] != a[du] && b[du] != 1)
            throw ShapeMismatch("elementwise: shape " + shape_str(b) + " not broadcastable to " + shape_str(a));
        strides[du] = (b[du] == 1) ? 0 : s;
        s *= static_cast<std::size_t>(b[du]);
    }
    return strides;
}

// Walks a's flat index space applying fn(flat_a, flat_b).
template <typename Fn>
void broadcast_walk(const Shape& a, const std::vector<std::size_t>& bstride, Fn&& fn) {
    const std::size_t n = shape_numel(a);
    const int nd = static_cast<int>(a.size());
    std::vector<int> idx(static_cast<std::size_t>(nd), 0);
    std::size_t bi = 0;
    for (std::size_t ai = 0; ai < n; ++ai) {
        fn(ai, bi);
        for (int d = nd - 1; d >= 0; --d) {
            const auto du = static_cast<std::size_t>(d);
            ++idx[du];
            bi += bstride[du];
            if (idx[du] < a[du]) break;
            idx[du] = 0;
            bi -= bstride[du] * static_cast<std::size_t>(a[du]);
        }
    }
}

}  // namespace

Tensor elementwise(const Tensor& a, const Tensor& b, EwKind kind) {
    require_defined(a, "elementwise");
    require_defined(b, "elementwise");
    const bool same = same_shape(a.shape(), b.shape());
    std::vector<std::size_t> bstride;
    if (!same) bstride = broadcast_strides(a.shape(), b.shape());

    const auto ad = a.data();
    const auto bd = b.data();
    auto out = alloc_out(a.numel());
    auto apply = [kind](float x, float y) {
        switch (kind) {
            case EwKind::Add: return x + y;
            case EwKind::Sub: return x - y;
            default: return x * y;
        }
    };
    if (same) {
        for (std::size_t i = 0; i < out.size(); ++i) out[i] = apply(ad[i], bd[i]);
    } else {
        broadcast_walk(a.shape(), bstride, [&](std::size_t ai, std::size_t bi) { out[ai] = apply(ad[ai], bd[bi]); });
    }
    Tensor result = Tensor::from_data(a.shape(), std::move(out));

    OpRecorder rec;
    const int ia = rec.input(a);
    const int ib = rec.input(b);
    if (!rec.active()) return result;
    const int io = rec.attach_output(result);
    const char* name = kind == EwKind::Add ? "add" : (kind == EwKind::Sub ? "sub" : "mul");
    rec.node(name, {ia, ib}, io,
             [=, ashape = a.shape(), abuf = a.buffer(), bbuf = b.buffer()](BackwardBuffers& B) {
                 const auto& go = B.at(io);
                 const std::size_t n = go.size();
                 if (ia >= 0) {
                     auto& ga = B.acc(ia, n);
                     if (kind == EwKind::Mul) {
                         if (same) {
                             for (std::size_t i = 0; i < n; ++i) ga[i] += go[i] * (*bbuf)[i];
                         } else {
                             broadcast_walk(ashape, bstride,
                                            [&](std::size_t ai, std::size_t bi) { ga[ai] += go[ai] * (*bbuf)[bi]; });
                         }
                     } else {
                         for (std::size_t i = 0; i < n; ++i) ga[i] += go[i];
                     }
                 }
                 if (ib >= 0) {
                     auto& gb = B.acc(ib, bbuf->size());
                     const float sgn = kind == EwKind::Sub ? -1.0f : 1.0f;
                     if (same) {
                         if (kind == EwKind::Mul) {
                             for (std::size_t i = 0; i < n; ++i) gb[i] += go[i] * (*abuf)[i];
                         } else {
                             for (std::size_t i = 0; i < n; ++i) gb[i] += sgn * go[i];
                         }
                     } else {
                         // Broadcast axes sum-reduce on the way back.
                         if (kind == EwKind::Mul) {
                             broadcast_walk(ashape, bstride,
                                            [&](std::size_t ai, std::size_t bi) { gb[bi] += go[ai] * (*abuf)[ai]; });
                         } else {
                             broadcast_walk(ashape, bstride,
                                            [&](std::size_t ai, std::size_t bi) { gb[bi] += sgn * go[ai]; });
                         }
                     }
                 }
             });
    return result;
}

Tensor add(const Tensor& a, const Tensor& b) { return elementwise(a, b, EwKind::Add); }
Tensor sub(const Tensor& a, const Tensor& b) { return elementwise(a, b, EwKind::Sub); }
Tensor mul(const Tensor& a, const Tensor& b) { return elementwise(a, b, EwKind::Mul); }

// ---------------------------------------------------------------------------
// conv2d
// ---------------------------------------------------------------------------

namespace {

struct ConvDims {
    int cin, h, w, cout, k, ho, wo, stride, pad;
};

ConvDims conv_check(const Tensor& input, const Tensor& weight, const Tensor& bias, int stride, int pad) {
    if (input.ndim() != 3) throw ShapeMismatch("conv2d: input must be [C,H,W], got " + shape_str(input.shape()));
    if (weight.ndim() != 4)
        throw ShapeMismatch("conv2d: weight must be [Co,Ci,k,k], got " + shape_str(weight.shape()));
    ConvDims d{};
    d.cin = input.dim(0);
    d.h = input.dim(1);
    d.w = input.dim(2);
    d.cout = weight.dim(0);
    d.k = weight.dim(2);
    d.stride = stride;
    d.pad = pad;
    if (weight.dim(1) != d.cin)
        throw ShapeMismatch("conv2d: weight expects " + std::to_string(weight.dim(1)) + " input channels, got " +
                            std::to_string(d.cin));
    if (weight.dim(3) != d.k) throw ShapeMismatch("conv2d: kernel must be square");
    if (d.k % 2 == 0) throw ShapeMismatch("conv2d: kernel size must be odd");
    if (bias.ndim() != 1 || bias.dim(0) != d.cout) throw ShapeMismatch("conv2d: bias must be [C_out]");
    if (stride < 1 || pad < 0) throw ShapeMismatch("conv2d: invalid stride/pad");
    d.ho = (d.h + 2 * pad - d.k) / stride + 1;
    d.wo = (d.w + 2 * pad - d.k) / stride + 1;
    if (d.h + 2 * pad - d.k < 0 || d.w + 2 * pad - d.k < 0 || d.ho < 1 || d.wo < 1)
        throw ShapeMismatch("conv2d: kernel larger than padded input");
    return d;
}

// Valid output range [lo,hi) for one kernel tap: 0 <= ox*stride - pad + kc < extent.
inline void tap_range(int kc, int extent, int out_extent, int stride, int pad, int& lo, int& hi) {
    int start = pad - kc;  // ox*stride >= start
    lo = start <= 0 ? 0 : (start + stride - 1) / stride;
    int last = extent - 1 + pad - kc;  // ox*stride <= last
    hi = last < 0 ? 0 : std::min(out_extent, last / stride + 1);
    if (lo > hi) lo = hi;
}

}  // namespace

Tensor conv2d(const Tensor& input, const Tensor& weight, const Tensor& bias, int stride, int pad) {
    require_defined(input, "conv2d");
    require_defined(weight, "conv2d");
    require_defined(bias, "conv2d");
    const ConvDims d = conv_check(input, weight, bias, stride, pad);

    const float* in = input.data().data();
    const float* wt = weight.data().data();
    const float* bs = bias.data().data();
    auto out = alloc_out(static_cast<std::size_t>(d.cout) * d.ho * d.wo);

    for (int co = 0; co < d.cout; ++co)
        std::fill_n(out.data() + static_cast<std::size_t>(co) * d.ho * d.wo,
                    static_cast<std::size_t>(d.ho) * d.wo, bs[co]);

    for (int co = 0; co < d.cout; ++co) {
        float* oplane = out.data() + static_cast<std::size_t>(co) * d.ho * d.wo;
        for (int ci = 0; ci < d.cin; ++ci) {
            const float* iplane = in + static_cast<std::size_t>(ci) * d.h * d.w;
            const float* wk = wt + (static_cast<std::size_t>(co) * d.cin + ci) * d.k * d.k;
            for (int ky = 0; ky < d.k; ++ky) {
                int oy_lo, oy_hi;
                tap_range(ky, d.h, d.ho, d.stride, d.pad, oy_lo, oy_hi);
                for (int kx = 0; kx < d.k; ++kx) {
                    const float w = wk[ky * d.k + kx];
                    int ox_lo, ox_hi;
                    tap_range(kx, d.w, d.wo, d.stride, d.pad, ox_lo, ox_hi);
                    for (int oy = oy_lo; oy < oy_hi; ++oy) {
                        const int iy = oy * d.stride - d.pad + ky;
                        const float* irow = iplane + static_cast<std::size_t>(iy) * d.w;
                        float* orow = oplane + static_cast<std::size_t>(oy) * d.wo;
                        if (d.stride == 1) {
                            const int off = kx - d.pad;
                            for (int ox = ox_lo; ox < ox_hi; ++ox) orow[ox] += w * irow[ox + off];
                        } else {
                            for (int ox = ox_lo; ox < ox_hi; ++ox)
                                orow[ox] += w * irow[ox * d.stride - d.pad + kx];
                        }
                    }
                }
            }
        }
    }
    Tensor result = Tensor::from_data({d.cout, d.ho, d.wo}, std::move(out));

    OpRecorder rec;
    const int ii = rec.input(input);
    const int iw = rec.input(weight);
    const int ib = rec.input(bias);
    if (!rec.active()) return result;
    const int io = rec.attach_output(result);
    rec.node("conv2d", {ii, iw, ib}, io,
             [=, ibuf = input.buffer(), wbuf = weight.buffer()](BackwardBuffers& B) {
                 const auto& go = B.at(io);
                 const float* inp = ibuf->data();
                 const float* wtp = wbuf->data();
                 if (ib >= 0) {
                     auto& gb = B.acc(ib, static_cast<std::size_t>(d.cout));
                     for (int co = 0; co < d.cout; ++co) {
                         double acc = 0.0;
                         const float* oplane = go.data() + static_cast<std::size_t>(co) * d.ho * d.wo;
                         for (int i = 0; i < d.ho * d.wo; ++i) acc += oplane[i];
                         gb[static_cast<std::size_t>(co)] += static_cast<float>(acc);
                     }
                 }
                 if (iw >= 0) {
                     auto& gw = B.acc(iw, wbuf->size());
                     for (int co = 0; co < d.cout; ++co) {
                         const float* oplane = go.data() + static_cast<std::size_t>(co) * d.ho * d.wo;
                         for (int ci = 0; ci < d.cin; ++ci) {
                             const float* iplane = inp + static_cast<std::size_t>(ci) * d.h * d.w;
                             float* gwk = gw.data() + (static_cast<std::size_t>(co) * d.cin + ci) * d.k * d.k;
                             for (int ky = 0; ky < d.k; ++ky) {
                                 int oy_lo, oy_hi;
                                 tap_range(ky, d.h, d.ho, d.stride, d.pad, oy_lo, oy_hi);
                                 for (int kx = 0; kx < d.k; ++kx) {
                                     int ox_lo, ox_hi;
                                     tap_range(kx, d.w, d.wo, d.stride, d.pad, ox_lo, ox_hi);
                                     float acc = 0.0f;
                                     for (int oy = oy_lo; oy < oy_hi; ++oy) {
                                         const int iy = oy * d.stride - d.pad + ky;
                                         const float* irow = iplane + static_cast<std::size_t>(iy) * d.w;
                                         const float* orow = oplane + static_cast<std::size_t>(oy) * d.wo;
                                         if (d.stride == 1) {
                                             const int off = kx - d.pad;
                                             for (int ox = ox_lo; ox < ox_hi; ++ox) acc += orow[ox] * irow[ox + off];
                                         } else {
                                             for (int ox = ox_lo; ox < ox_hi; ++ox)
                                                 acc += orow[ox] * irow[ox * d.stride - d.pad + kx];
                                         }
                                     }
                                     gwk[ky * d.k + kx] += acc;
                                 }
                             }
                         }
                     }
                 }
                 if (ii >= 0) {
                     auto& gi = B.acc(ii, ibuf->size());
                     for (int co = 0; co < d.cout; ++co) {
                         const float* oplane = go.data() + static_cast<std::size_t>(co) * d.ho * d.wo;
                         for (int ci = 0; ci < d.cin; ++ci) {
                             float* giplane = gi.data() + static_cast<std::size_t>(ci) * d.h * d.w;
                             const float* wk = wtp + (static_cast<std::size_t>(co) * d.cin + ci) * d.k * d.k;
                             for (int ky = 0; ky < d.k; ++ky) {
                                 int oy_lo, oy_hi;
                                 tap_range(ky, d.h, d.ho, d.stride, d.pad, oy_lo, oy_hi);
                                 for (int kx = 0; kx < d.k; ++kx) {
                                     const float w = wk[ky * d.k + kx];
                                     int ox_lo, ox_hi;
                                     tap_range(kx, d.w, d.wo, d.stride, d.pad, ox_lo, ox_hi);
                                     for (int oy = oy_lo; oy < oy_hi; ++oy) {
                                         const int iy = oy * d.stride - d.pad + ky;
                                         float* girow = giplane + static_cast<std::size_t>(iy) * d.w;
                                         const float* orow = oplane + static_cast<std::size_t>(oy) * d.wo;
                                         if (d.stride == 1) {
                                             const int off = kx - d.pad;
                                             for (int ox = ox_lo; ox < ox_hi; ++ox) girow[ox + off] += w * orow[ox];
                                         } else {
                                             for (int ox = ox_lo; ox < ox_hi; ++ox)
                                                 girow[ox * d.stride - d.pad + kx] += w * orow[ox];
                                         }
                                     }
                                 }
                             }
                         }
                     }
                 }
             });
    return result;
}

// ---------------------------------------------------------------------------
// relu
// ---------------------------------------------------------------------------

Tensor relu(const Tensor& x) {
    require_defined(x, "relu");
    const auto xd = x.data();
    auto out = alloc_out(x.numel());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = xd[i] > 0.0f ? xd[i] : 0.0f;
    Tensor result = Tensor::from_data(x.shape(), std::move(out));

    OpRecorder rec;
    const int ix = rec.input(x);
    if (!rec.active()) return result;
    const int io = rec.attach_output(result);
    rec.node("relu", {ix}, io, [=, xbuf = x.buffer()](BackwardBuffers& B) {
        const auto& go = B.at(io);
        auto& gx = B.acc(ix, go.size());
        // Subgradient at exactly 0 is 0.
        for (std::size_t i = 0; i < go.size(); ++i)
            if ((*xbuf)[i] > 0.0f) gx[i] += go[i];
    });
    return result;
}

// ---------------------------------------------------------------------------
// bilinear_resize
// ---------------------------------------------------------------------------

namespace {

struct Lerp {
    int i0, i1;
    float w1;
};

// align-corners-false source coordinates, clamped at the borders.
std::vector<Lerp> lerp_table(int in_extent, int out_extent) {
    std::vector<Lerp> t(static_cast<std::size_t>(out_extent));
    const double scl = static_cast<double>(in_extent) / out_extent;
    for (int o = 0; o < out_extent; ++o) {
        double src = (o + 0.5) * scl - 0.5;
        if (src <= 0.0) {
            t[static_cast<std::size_t>(o)] = {0, 0, 0.0f};
        } else if (src >= in_extent - 1) {
            t[static_cast<std::size_t>(o)] = {in_extent - 1, in_extent - 1, 0.0f};
        } else {
            int i0 = static_cast<int>(src);
            t[static_cast<std::size_t>(o)] = {i0, i0 + 1, static_cast<float>(src - i0)};
        }
    }
    return t;
}

}  // namespace

Tensor bilinear_resize(const Tensor& x, int out_h, int out_w) {
    require_defined(x, "bilinear_resize");
    if (x.ndim() != 3) throw ShapeMismatch("bilinear_resize: input must be [C,H,W]");
    if (out_h < 1 || out_w < 1) throw ShapeMismatch("bilinear_resize: output size must be >= 1");
    const int c = x.dim(0), h = x.dim(1), w = x.dim(2);
    const bool identity = (out_h == h && out_w == w);

    const auto xd = x.data();
    std::vector<float> out;
    std::vector<Lerp> ty, tx;
    if (identity) {
        out.assign(xd.begin(), xd.end());
    } else {
        ty = lerp_table(h, out_h);
        tx = lerp_table(w, out_w);
        out = alloc_out(static_cast<std::size_t>(c) * out_h * out_w);
        for (int ch = 0; ch < c; ++ch) {
            const float* ip = xd.data() + static_cast<std::size_t>(ch) * h * w;
            float* op = out.data() + static_cast<std::size_t>(ch) * out_h * out_w;
            for (int oy = 0; oy < out_h; ++oy) {
                const Lerp& ly = ty[static_cast<std::size_t>(oy)];
                const float* r0 = ip + static_cast<std::size_t>(ly.i0) * w;
                const float* r1 = ip + static_cast<std::size_t>(ly.i1) * w;
                for (int ox = 0; ox < out_w; ++ox) {
                    const Lerp& lx = tx[static_cast<std::size_t>(ox)];
                    const float top = r0[lx.i0] * (1.0f - lx.w1) + r0[lx.i1] * lx.w1;
                    const float bot = r1[lx.i0] * (1.0f - lx.w1) + r1[lx.i1] * lx.w1;
                    op[static_cast<std::size_t>(oy) * out_w + ox] = top * (1.0f - ly.w1) + bot * ly.w1;
                }
            }
        }
    }
    Tensor result = Tensor::from_data({c, out_h, out_w}, std::move(out));

    OpRecorder rec;
    const int ix = rec.input(x);
    if (!rec.active()) return result;
    const int io = rec.attach_output(result);
    rec.node("bilinear_resize", {ix}, io, [=, n = x.numel()](BackwardBuffers& B) {
        const auto& go = B.at(io);
        auto& gx = B.acc(ix, n);
        if (identity) {
            for (std::size_t i = 0; i < go.size(); ++i) gx[i] += go[i];
            return;
        }
        for (int ch = 0; ch < c; ++ch) {
            float* gp = gx.data() + static_cast<std::size_t>(ch) * h * w;
            const float* op = go.data() + static_cast<std::size_t>(ch) * out_h * out_w;
            for (int oy = 0; oy < out_h; ++oy) {
                const Lerp& ly = ty[static_cast<std::size_t>(oy)];
                for (int ox = 0; ox < out_w; ++ox) {
                    const Lerp& lx = tx[static_cast<std::size_t>(ox)];
                    const float g = op[static_cast<std::size_t>(oy) * out_w + ox];
                    gp[static_cast<std::size_t>(ly.i0) * w + lx.i0] += g * (1.0f - ly.w1) * (1.0f - lx.w1);
                    gp[static_cast<std::size_t>(ly.i0) * w + lx.i1] += g * (1.0f - ly.w1) * lx.w1;
                    gp[static_cast<std::size_t>(ly.i1) * w + lx.i0] += g * ly.w1 * (1.0f - lx.w1);
                    gp[static_cast<std::size_t>(ly.i1) * w + lx.i1] += g * ly.w1 * lx.w1;
                }
            }
        }
    });
    return result;
}

// ---------------------------------------------------------------------------
// masked_global_pool
// ---------------------------------------------------------------------------

Tensor masked_global_pool(const Tensor& feat, const Tensor& mask, bool* empty_mask) {
    require_defined(feat, "masked_global_pool");
    require_defined(mask, "masked_global_pool");
    if (feat.ndim() != 3) throw ShapeMismatch("masked_global_pool: feat must be [C,h,w]");
    if (mask.ndim() != 3 || mask.dim(0) != 1 || mask.dim(1) != feat.dim(1) || mask.dim(2) != feat.dim(2))
        throw ShapeMismatch("masked_global_pool: mask must be [1,h,w] matching feat, got " +
                            shape_str(mask.shape()) + " vs " + shape_str(feat.shape()));
    constexpr float kEps = 1e-6f;
    const int c = feat.dim(0);
    const std::size_t hw = static_cast<std::size_t>(feat.dim(1)) * static_cast<std::size_t>(feat.dim(2));
    const auto fd = feat.data();
    const auto md = mask.data();

    double msum = 0.0;
    for (std::size_t i = 0; i < hw; ++i) msum += md[i];
    const float msum_f = static_cast<float>(msum);
    const bool empty = msum_f < kEps;
    if (empty_mask) *empty_mask = empty;
    const float denom = std::max(msum_f, kEps);

    auto out = alloc_out(static_cast<std::size_t>(c));
    for (int ch = 0; ch < c; ++ch) {
        const float* fp = fd.data() + static_cast<std::size_t>(ch) * hw;
        double acc = 0.0;
        for (std::size_t i = 0; i < hw; ++i) acc += static_cast<double>(fp[i]) * md[i];
        out[static_cast<std::size_t>(ch)] = static_cast<float>(acc) / denom;
    }
    Tensor result = Tensor::from_data({c, 1, 1}, std::move(out));

    OpRecorder rec;
    const int ifeat = rec.input(feat);
    if (!rec.active()) return result;
    const int io = rec.attach_output(result);
    rec.node("masked_global_pool", {ifeat}, io, [=, mbuf = mask.buffer(), n = feat.numel()](BackwardBuffers& B) {
        const auto& go = B.at(io);
        auto& gf = B.acc(ifeat, n);
        const float* mp = mbuf->data();
        for (int ch = 0; ch < c; ++ch) {
            const float g = go[static_cast<std::size_t>(ch)] / denom;
            float* gp = gf.data() + static_cast<std::size_t>(ch) * hw;
            for (std::size_t i = 0; i < hw; ++i) gp[i] += g * mp[i];
        }
    });
    return result;
}

// ---------------------------------------------------------------------------
// tile_spatial
// ---------------------------------------------------------------------------

Tensor tile_spatial(const Tensor& v, int h, int w) {
    require_defined(v, "tile_spatial");
    if (v.ndim() != 3 || v.dim(1) != 1 || v.dim(2) != 1)
        throw ShapeMismatch("tile_spatial: input must be [C,1,1], got " + shape_str(v.shape()));
    if (h < 1 || w < 1) throw ShapeMismatch("tile_spatial: target size must be >= 1");
    const int c = v.dim(0);
    const auto vd = v.data();
    const std::size_t hw = static_cast<std::size_t>(h) * static_cast<std::size_t>(w);
    auto out = alloc_out(static_cast<std::size_t>(c) * hw);
    for (int ch = 0; ch < c; ++ch)
        std::fill_n(out.data() + static_cast<std::size_t>(ch) * hw, hw, vd[static_cast<std::size_t>(ch)]);
    Tensor result = Tensor::from_data({c, h, w}, std::move(out));

    OpRecorder rec;
    const int iv = rec.input(v);
    if (!rec.active()) return result;
    const int io = rec.attach_output(result);
    rec.node("tile_spatial", {iv}, io, [=](BackwardBuffers& B) {
        const auto& go = B.at(io);
        auto& gv = B.acc(iv, static_cast<std::size_t>(c));
        for (int ch = 0; ch < c; ++ch) {
            double acc = 0.0;
            const float* gp = go.data() + static_cast<std::size_t>(ch) * hw;
            for (std::size_t i = 0; i < hw; ++i) acc += gp[i];
            gv[static_cast<std::size_t>(ch)] += static_cast<float>(acc);
        }
    });
    return result;
}

// ---------------------------------------------------------------------------
// softmax_cross_entropy
// ---------------------------------------------------------------------------

Tensor softmax_cross_entropy(const Tensor& logits, const Tensor& target) {
    require_defined(logits, "softmax_cross_entropy");
    require_defined(target, "softmax_cross_entropy");
    if (logits.ndim() != 3 || logits.dim(0) != 2)
        throw ShapeMismatch("softmax_cross_entropy: logits must be [2,h,w], got " + shape_str(logits.shape()));
    if (target.ndim() != 3 || target.dim(0) != 1 || target.dim(1) != logits.dim(1) ||
        target.dim(2) != logits.dim(2))
        throw ShapeMismatch("softmax_cross_entropy: target must be [1,h,w] matching logits");

    const std::size_t hw = static_cast<std::size_t>(logits.dim(1)) * static_cast<std::size_t>(logits.dim(2));
    const auto ld = logits.data();
    const auto td = target.data();
    for (std::size_t i = 0; i < hw; ++i)
        if (td[i] != 0.0f && td[i] != 1.0f)
            throw InvalidTarget("softmax_cross_entropy: target values must be exactly 0 or 1");

    // Probabilities are kept for the backward pass.
    auto probs = std::make_shared<std::vector<float>>(2 * hw);
    double loss_acc = 0.0;
    for (std::size_t i = 0; i < hw; ++i) {
        const float l0 = ld[i];
        const float l1 = ld[hw + i];
        const float m = std::max(l0, l1);
        const double e0 = std::exp(static_cast<double>(l0 - m));
        const double e1 = std::exp(static_cast<double>(l1 - m));
        const double z = e0 + e1;
        const double p0 = e0 / z;
        const double p1 = e1 / z;
        (*probs)[i] = static_cast<float>(p0);
        (*probs)[hw + i] = static_cast<float>(p1);
        loss_acc -= std::log(td[i] == 1.0f ? p1 : p0);
    }
    Tensor result = Tensor::scalar(static_cast<float>(loss_acc / static_cast<double>(hw)));

    OpRecorder rec;
    const int il = rec.input(logits);
    if (!rec.active()) return result;
    const int io = rec.attach_output(result);
    rec.node("softmax_cross_entropy", {il}, io, [=, tbuf = target.buffer()](BackwardBuffers& B) {
        const float g = B.at(io)[0] / static_cast<float>(hw);
        auto& gl = B.acc(il, 2 * hw);
        const float* tp = tbuf->data();
        const float* pp = probs->data();
        for (std::size_t i = 0; i < hw; ++i) {
            const float t1 = tp[i];
            gl[i] += g * (pp[i] - (1.0f - t1));
            gl[hw + i] += g * (pp[hw + i] - t1);
        }
    });
    return result;
}

// ---------------------------------------------------------------------------
// sum / scale / concat
// ---------------------------------------------------------------------------

Tensor sum(const Tensor& x) {
    require_defined(x, "sum");
    const auto xd = x.data();
    double acc = 0.0;
    for (float v : xd) acc += v;
    Tensor result = Tensor::scalar(static_cast<float>(acc));

    OpRecorder rec;
    const int ix = rec.input(x);
    if (!rec.active()) return result;
    const int io = rec.attach_output(result);
    rec.node("sum", {ix}, io, [=, n = x.numel()](BackwardBuffers& B) {
        const float g = B.at(io)[0];
        auto& gx = B.acc(ix, n);
        for (std::size_t i = 0; i < n; ++i) gx[i] += g;
    });
    return result;
}

Tensor scale(const Tensor& x, float factor) {
    require_defined(x, "scale");
    const auto xd = x.data();
    auto out = alloc_out(x.numel());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = xd[i] * factor;
    Tensor result = Tensor::from_data(x.shape(), std::move(out));

    OpRecorder rec;
    const int ix = rec.input(x);
    if (!rec.active()) return result;
    const int io = rec.attach_output(result);
    rec.node("scale", {ix}, io, [=](BackwardBuffers& B) {
        const auto& go = B.at(io);
        auto& gx = B.acc(ix, go.size());
        for (std::size_t i = 0; i < go.size(); ++i) gx[i] += go[i] * factor;
    });
    return result;
}

Tensor concat_channels(const Tensor& a, const Tensor& b) {
    require_defined(a, "concat_channels");
    require_defined(b, "concat_channels");
    if (a.ndim() != 3 || b.ndim() != 3 || a.dim(1) != b.dim(1) || a.dim(2) != b.dim(2))
        throw ShapeMismatch("concat_channels: inputs must be [C,h,w] with matching spatial dims, got " +
                            shape_str(a.shape()) + " and " + shape_str(b.shape()));
    const std::size_t na = a.numel(), nb = b.numel();
    auto out = alloc_out(na + nb);
    std::memcpy(out.data(), a.data().data(), na * sizeof(float));
    std::memcpy(out.data() + na, b.data().data(), nb * sizeof(float));
    Tensor result = Tensor::from_data({a.dim(0) + b.dim(0), a.dim(1), a.dim(2)}, std::move(out));

    OpRecorder rec;
    const int ia = rec.input(a);
    const int ib = rec.input(b);
    if (!rec.active()) return result;
    const int io = rec.attach_output(result);
    rec.node("concat_channels", {ia, ib}, io, [=](BackwardBuffers& B) {
        const auto& go = B.at(io);
        if (ia >= 0) {
            auto& ga = B.acc(ia, na);
            for (std::size_t i = 0; i < na; ++i) ga[i] += go[i];
        }
        if (ib >= 0) {
            auto& gb = B.acc(ib, nb);
            for (std::size_t i = 0; i < nb; ++i) gb[i] += go[na + i];
        }
    });
    return result;
}

}  // namespace sst
