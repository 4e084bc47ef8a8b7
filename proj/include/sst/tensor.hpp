#pragma once

#include <cstddef>
#include <functional>
#include <memory>
#include <span>
#include <unordered_map>
#include <vector>

#include "sst/errors.hpp"

namespace sst {

using Shape = std::vector<int>;

std::size_t shape_numel(const Shape& shape);
bool same_shape(const Shape& a, const Shape& b);
std::string shape_str(const Shape& shape);

class Graph;

/// Dense row-major float32 tensor. Copies are shallow: they share the same
/// data buffer. Plain tensors (no graph, requires_grad=false) are treated as
/// immutable values; mutable_data() exists for parameter updates and buffer
/// construction only.
class Tensor {
public:
    Tensor() = default;

    static Tensor zeros(Shape shape);
    static Tensor full(Shape shape, float value);
    static Tensor from_data(Shape shape, std::vector<float> values);
    static Tensor scalar(float value);  // shape {1}

    /// Marks this value as a differentiable leaf. Shares the data buffer,
    /// allocates a (lazily filled) gradient slot.
    Tensor with_requires_grad() const;

    /// Same data, no graph, no gradient tracking.
    Tensor detach() const;

    /// Deep copy of the data; detached.
    Tensor clone() const;

    bool defined() const { return data_ != nullptr; }
    const Shape& shape() const { return shape_; }
    int ndim() const { return static_cast<int>(shape_.size()); }
    int dim(int axis) const { return shape_[static_cast<std::size_t>(axis)]; }
    std::size_t numel() const { return data_ ? data_->size() : 0; }

    std::span<const float> data() const { return {data_->data(), data_->size()}; }
    std::span<float> mutable_data() { return {data_->data(), data_->size()}; }
    const std::shared_ptr<std::vector<float>>& buffer() const { return data_; }

    bool requires_grad() const { return requires_grad_; }
    bool has_grad() const { return grad_ && !grad_->empty(); }
    std::span<const float> grad() const;
    Tensor grad_tensor() const;  // gradient as a plain tensor (copy)
    void zero_grad();            // empties the gradient buffer

    float item() const;
    float at(std::initializer_list<int> idx) const;

    /// Identifier of this tensor's value in the graph that produced it,
    /// or -1 for leaves and plain values.
    int node_id() const { return node_; }
    Graph* graph() const { return graph_; }

private:
    friend class Graph;
    friend class OpRecorder;

    Shape shape_;
    std::shared_ptr<std::vector<float>> data_;
    std::shared_ptr<std::vector<float>> grad_;  // only on requires_grad leaves
    bool requires_grad_ = false;
    Graph* graph_ = nullptr;
    int node_ = -1;
};

/// Gradient buffers addressed by value id, lazily allocated during backward.
class BackwardBuffers {
public:
    explicit BackwardBuffers(std::size_t n) : grads_(n) {}

    bool seen(int id) const { return !grads_[static_cast<std::size_t>(id)].empty(); }
    const std::vector<float>& at(int id) const { return grads_[static_cast<std::size_t>(id)]; }

    /// Grad buffer for accumulation, zero-allocated on first touch.
    std::vector<float>& acc(int id, std::size_t numel) {
        auto& g = grads_[static_cast<std::size_t>(id)];
        if (g.empty()) g.assign(numel, 0.0f);
        return g;
    }

private:
    std::vector<std::vector<float>> grads_;
};

/// Reverse-mode tape. Records one forward pass; backward() may traverse it
/// exactly once. Confined to a single thread together with its tensors.
class Graph {
public:
    Graph() = default;
    Graph(const Graph&) = delete;
    Graph& operator=(const Graph&) = delete;

    bool consumed() const { return consumed_; }
    std::size_t node_count() const { return nodes_.size(); }

    /// Innermost graph opened by a live GraphScope on this thread, or null.
    static Graph* current();

private:
    friend class GraphScope;
    friend class OpRecorder;
    friend void backward(const Tensor& loss);

    struct Slot {
        std::size_t numel = 0;
        bool needs_grad = false;
        std::shared_ptr<std::vector<float>> leaf_grad;  // set for requires_grad leaves
    };
    struct Node {
        const char* op;
        std::vector<int> inputs;
        int output;
        std::function<void(BackwardBuffers&)> backward;
    };

    int add_slot(std::size_t numel, bool needs_grad, std::shared_ptr<std::vector<float>> leaf_grad);
    int enlist_leaf(const Tensor& t);

    std::vector<Slot> slots_;
    std::vector<Node> nodes_;
    std::unordered_map<const void*, int> leaf_ids_;
    bool consumed_ = false;
};

/// RAII scope making a graph the recording target for ops on this thread.
/// Scopes nest; the innermost wins.
class GraphScope {
public:
    explicit GraphScope(Graph& g);
    ~GraphScope();
    GraphScope(const GraphScope&) = delete;
    GraphScope& operator=(const GraphScope&) = delete;

private:
    Graph* prev_;
};

enum class EwKind { Add, Sub, Mul };

/// Elementwise add/sub/mul. b may be broadcast: its shape must equal a's with
/// any subset of axes set to 1. Result has a's shape.
Tensor elementwise(const Tensor& a, const Tensor& b, EwKind kind);
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);

/// Cross-correlation of input [C_in,H,W] with weight [C_out,C_in,k,k] plus
/// bias [C_out]. k must be odd and square. Output spatial size is
/// floor((H + 2*pad - k)/stride) + 1 and must be >= 1.
Tensor conv2d(const Tensor& input, const Tensor& weight, const Tensor& bias, int stride, int pad);

Tensor relu(const Tensor& x);

/// Bilinear interpolation (align-corners-false) of [C,H,W] to [C,out_h,out_w].
Tensor bilinear_resize(const Tensor& x, int out_h, int out_w);

/// out[c] = sum_xy feat[c,x,y]*mask[0,x,y] / max(sum mask, 1e-6), shape [C,1,1].
/// Differentiable w.r.t. feat; the mask is treated as a constant. Sets
/// *empty_mask when the mask sum falls below 1e-6 (the output is then zero).
Tensor masked_global_pool(const Tensor& feat, const Tensor& mask, bool* empty_mask = nullptr);

/// Repeats a [C,1,1] vector over an h x w grid.
Tensor tile_spatial(const Tensor& v, int h, int w);

/// Mean over pixels of -log softmax(logits)[target]. logits [2,h,w], target
/// [1,h,w] with values in {0,1}. Returns a scalar.
Tensor softmax_cross_entropy(const Tensor& logits, const Tensor& target);

/// Full reduction to a scalar.
Tensor sum(const Tensor& x);

/// x * factor with a compile-time-constant-style scalar.
Tensor scale(const Tensor& x, float factor);

/// Concatenates [Ca,h,w] and [Cb,h,w] along channels.
Tensor concat_channels(const Tensor& a, const Tensor& b);

/// Populates gradients of every requires_grad leaf reachable from loss.
/// Gradients accumulate additively into existing leaf buffers. The loss must
/// be a scalar recorded on a not-yet-consumed graph.
void backward(const Tensor& loss);

}  // namespace sst
