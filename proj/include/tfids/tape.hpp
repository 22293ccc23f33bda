#pragma once

#include <array>
#include <cstdint>
#include <vector>

#include "tfids/rng.hpp"
#include "tfids/tensor.hpp"

namespace tfids::ad {

class Tape;

// Lightweight handle to a node on a tape.
class Var {
public:
    Var() = default;
    bool valid() const { return tape_ != nullptr; }
    int id() const { return id_; }
    const Shape& shape() const;
    std::int64_t size() const;
    const Tensor& value() const;
    bool requires_grad() const;

private:
    friend class Tape;
    Var(Tape* tape, int id) : tape_(tape), id_(id) {}
    Tape* tape_ = nullptr;
    int id_ = -1;
};

// Reverse-mode tape over dense float32 tensors. Operations are recorded in
// execution order; backward() replays them once in reverse. One tape serves
// one forward pass; training builds a fresh tape per step.
//
// Every kernel is sequential and deterministic: two identical forward+backward
// passes produce bit-identical gradients.
class Tape {
public:
    Tape() = default;
    Tape(const Tape&) = delete;
    Tape& operator=(const Tape&) = delete;

    Var leaf(Tensor value, bool requires_grad);
    Var leaf(Tensor value) {
        const bool rg = value.requires_grad();
        return leaf(std::move(value), rg);
    }
    Var constant(Tensor value) { return leaf(std::move(value), false); }

    // (m,k)x(k,n) -> (m,n)
    Var matmul(Var a, Var b);
    // (b,m,k)x(b,k,n) -> (b,m,n)
    Var bmm(Var a, Var b);
    // swap the last two axes (rank 2 or 3)
    Var transpose_last(Var a);
    // (d0,d1,d2,d3) -> (d0,d2,d1,d3)
    Var permute_0213(Var a);
    Var reshape(Var a, Shape shape);
    Var add(Var a, Var b);
    Var sub(Var a, Var b);
    // (..., n) + (n)
    Var add_rowvec(Var a, Var bias);
    Var mul(Var a, Var b);
    // scale * x + shift
    Var affine(Var a, float scale, float shift);
    Var relu(Var a);
    Var gelu(Var a);
    Var sigmoid(Var a);
    // log(max(x, floor)); the floor keeps log finite on clamped inputs
    Var log_clamped(Var a, float floor = 1e-12f);
    Var clamp(Var a, float lo, float hi);
    Var softmax_lastdim(Var a);
    Var layer_norm_lastdim(Var x, Var gamma, Var beta, float eps = 1e-5f);
    // table (V,e), indices flat -> (n, e)
    Var embedding(Var table, const std::vector<int>& indices);
    Var concat_lastdim(Var a, Var b);
    // inverted-scaling dropout; rate 0 is the identity
    Var dropout(Var a, float rate, Rng& rng);
    // (B,L,D) -> (B,D) at a fixed step
    Var select_step(Var a, int step);
    // (B,L,D) -> (B,D), mean over axis 1
    Var mean_axis1(Var a);
    Var sum_all(Var a);
    Var mean_all(Var a);

    // Reverse sweep from a scalar loss. A tape can be replayed backward
    // exactly once.
    void backward(Var loss);

    // Gradient of the last backward() w.r.t. v; zeros if v was off-path.
    Tensor grad(Var v) const;

    // backward + gather in one call.
    std::vector<Tensor> gradients(Var loss, const std::vector<Var>& leaves);

    const Tensor& value(Var v) const;
    bool var_requires_grad(Var v) const;
    size_t node_count() const { return nodes_.size(); }

private:
    enum class Op : std::uint8_t {
        Leaf,
        Matmul,
        BatchMatmul,
        TransposeLast,
        Permute0213,
        Reshape,
        Add,
        Sub,
        AddRowVec,
        Mul,
        Affine,
        Relu,
        Gelu,
        Sigmoid,
        LogClamped,
        Clamp,
        SoftmaxLast,
        LayerNormLast,
        Embedding,
        ConcatLast,
        Dropout,
        SelectStep,
        MeanAxis1,
        SumAll,
        MeanAll,
    };

    struct Node {
        Op op = Op::Leaf;
        Tensor value;
        Tensor grad; // empty until the backward sweep touches it
        bool requires_grad = false;
        std::array<int, 3> parents{-1, -1, -1};
        int n_parents = 0;
        std::vector<int> iaux;   // indices / step selectors
        std::vector<float> faux; // dropout masks, layer-norm row stats
        float a = 0.0f;          // scale / lo / eps
        float b = 0.0f;          // shift / hi
    };

    int push(Node node);
    Var wrap(int id) { return Var(this, id); }
    const Node& node(Var v) const;
    Tensor& grad_buf(int id);
    void add_into_grad(int id, const float* src, std::int64_t n);
    void backward_node(int id);
    void require_same_tape(Var v, const char* op) const;

    std::vector<Node> nodes_;
    bool backward_done_ = false;
};

} // namespace tfids::ad
