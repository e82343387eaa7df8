#pragma once

#include "mmbc/tensor.hpp"

#include <functional>
#include <string>
#include <vector>

namespace mmbc {

// Define-by-run reverse-mode tape over f32 tensors.
//
// A Var is an index into the tape; nodes are created in topological order, so
// the backward pass is a single reverse sweep. Every op validates shapes and
// rejects non-finite outputs.
struct Var {
    int32_t id = -1;
    bool valid() const { return id >= 0; }
};

class Tape {
public:
    struct Node {
        Tensor value;
        Tensor grad;
        bool has_grad = false;
        bool requires_grad = false;
        std::vector<int32_t> inputs;
        std::function<void(Tape&, Node&)> backward; // empty for leaves
        const char* op = "leaf";
    };

    Var leaf(Tensor value, bool requires_grad = false);
    Var constant(Tensor value) { return leaf(std::move(value), false); }

    // --- elementwise / structural ops ---
    Var add(Var a, Var b);       // same shape, or b rank-1 broadcast over rows of a
    Var sub(Var a, Var b);       // same shape
    Var mul(Var a, Var b);       // same shape
    Var scale(Var a, float c);
    Var add_scalar(Var a, float c);
    Var relu(Var a);
    Var abs(Var a);
    Var square(Var a);
    Var sqrt_op(Var a);          // input must be strictly positive
    Var exp_op(Var a);
    Var log_op(Var a);           // input must be strictly positive
    Var softplus(Var a);
    Var concat_cols(Var a, Var b);
    Var slice_cols(Var a, int64_t c0, int64_t c1); // [B, c0:c1)
    Var reduce_mean_all(Var a);  // -> scalar
    Var reduce_sum_all(Var a);   // -> scalar
    Var mean_rows(Var a);        // [B, n] -> [n], mean over batch
    Var stop_gradient(Var a);

    // --- linear algebra ---
    Var matmul(Var a, Var b);     // [m,k] x [k,n]
    Var matmul_tn(Var a, Var b);  // [k,m]^T x [k,n] -> [m,n]

    // mu + exp(0.5*logvar) * eps with caller-supplied noise.
    Var gaussian_sample(Var mu, Var logvar, const Tensor& eps);

    // Custom node: `value` precomputed outside the tape, `backward` pushes
    // gradients into the inputs. Used for divergences solved iteratively.
    Var custom(std::vector<Var> inputs, Tensor value,
               std::function<void(Tape&, Node&)> backward, const char* op_name);

    // Gradient of a scalar loss w.r.t. everything that requires grad.
    void backward(Var loss);

    const Tensor& value(Var v) const { return nodes_[v.id].value; }
    const Tensor& grad(Var v) const;
    Tensor grad_or_zero(Var v) const; // zeros when no gradient reached the node
    float scalar_value(Var v) const;

    size_t num_nodes() const { return nodes_.size(); }
    Node& node(Var v) { return nodes_[v.id]; }

private:
    Var make(Tensor value, std::vector<int32_t> inputs,
             std::function<void(Tape&, Node&)> backward, const char* op_name);
    void accumulate(int32_t id, const Tensor& g);
    void accumulate_scaled(int32_t id, const Tensor& g, float c);
    void check_finite(const Tensor& t, const char* op_name) const;

    std::vector<Node> nodes_;

    friend class Mlp;
};

} // namespace mmbc
