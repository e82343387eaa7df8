#pragma once

#include "mmbc/autodiff.hpp"
#include "mmbc/rng.hpp"
#include "mmbc/tensor.hpp"

#include <map>
#include <string>
#include <vector>

namespace mmbc {

// Named parameter set; the unit that optimizers and checkpoints operate on.
// Iteration order is the (sorted) name order, which keeps updates and
// serialization deterministic.
class ParamStore {
public:
    Tensor& create(const std::string& name, std::vector<int64_t> shape);
    Tensor& at(const std::string& name);
    const Tensor& at(const std::string& name) const;
    bool contains(const std::string& name) const { return params_.count(name) > 0; }

    std::map<std::string, Tensor>& all() { return params_; }
    const std::map<std::string, Tensor>& all() const { return params_; }
    int64_t total_size() const;

private:
    std::map<std::string, Tensor> params_;
};

// Checkpoint blob format: <path>.index is a text file with one
// "name ndims d0 d1 ... byte_offset" line per parameter; <path>.blob is the
// concatenated little-endian f32 data. Round-trips exactly.
void save_params(const ParamStore& ps, const std::string& path_prefix);
void load_params(ParamStore& ps, const std::string& path_prefix);

// Per-tape view of a ParamStore: parameters enter the tape as leaves exactly
// once and their gradients can be read back by name after backward().
class BoundParams {
public:
    BoundParams(Tape& tape, ParamStore& ps) : tape_(tape), ps_(ps) {}

    Var get(const std::string& name);
    Tape& tape() { return tape_; }
    ParamStore& store() { return ps_; }

    // name -> gradient (zeros where no gradient reached the leaf)
    std::map<std::string, Tensor> collect_grads() const;

private:
    Tape& tape_;
    ParamStore& ps_;
    std::map<std::string, Var> vars_;
};

// Fully connected ReLU network. Widths include input and output,
// e.g. {6, 256, 256, 256, 120}. The last layer is linear.
class Mlp {
public:
    Mlp() = default;
    Mlp(std::string name, std::vector<int64_t> widths);

    void init(ParamStore& ps, Rng& rng) const;                  // He-normal weights, zero biases
    Var forward(BoundParams& bp, Var x) const;                  // differentiable
    Tensor forward_plain(const ParamStore& ps, const Tensor& x) const; // inference path

    // Parameter names owned by this net, in deterministic order.
    std::vector<std::string> param_names() const;
    int64_t param_count() const;

    const std::vector<int64_t>& widths() const { return widths_; }
    const std::string& name() const { return name_; }

private:
    std::string name_;
    std::vector<int64_t> widths_;
};

// Sinusoidal embedding of a scalar time t (normalized to [0,1]) into
// `dim` features: interleaved sin/cos at geometrically spaced frequencies.
void time_embedding(float t, int dim, float* out);
Tensor time_embedding_batch(const std::vector<float>& ts, int dim);

struct AdamWConfig {
    float lr = 5e-4f;
    float weight_decay = 0.02f;
    float beta1 = 0.9f;
    float beta2 = 0.999f;
    float eps = 1e-8f;
};

// Decoupled weight decay: the decay is applied to the parameter directly and
// never enters the moment estimates.
class AdamW {
public:
    explicit AdamW(AdamWConfig cfg = {}) : cfg_(cfg) {}

    void step(ParamStore& params, const std::map<std::string, Tensor>& grads);
    int64_t step_count() const { return t_; }
    const AdamWConfig& config() const { return cfg_; }

private:
    AdamWConfig cfg_;
    std::map<std::string, Tensor> m_, v_;
    int64_t t_ = 0;
};

} // namespace mmbc
