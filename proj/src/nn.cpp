#include "mmbc/nn.hpp"

#include <cmath>
#include <cstdio>
#include <fstream>
#include <sstream>

namespace mmbc {

Tensor& ParamStore::create(const std::string& name, std::vector<int64_t> shape) {
    auto [it, inserted] = params_.emplace(name, Tensor(std::move(shape)));
    if (!inserted) throw ShapeError("parameter already exists: " + name);
    return it->second;
}

Tensor& ParamStore::at(const std::string& name) {
    auto it = params_.find(name);
    if (it == params_.end()) throw ShapeError("unknown parameter: " + name);
    return it->second;
}

const Tensor& ParamStore::at(const std::string& name) const {
    auto it = params_.find(name);
    if (it == params_.end()) throw ShapeError("unknown parameter: " + name);
    return it->second;
}

int64_t ParamStore::total_size() const {
    int64_t n = 0;
    for (const auto& [k, v] : params_) n += v.size();
    return n;
}

void save_params(const ParamStore& ps, const std::string& path_prefix) {
    std::ofstream idx(path_prefix + ".index");
    std::ofstream blob(path_prefix + ".blob", std::ios::binary);
    if (!idx || !blob) throw std::runtime_error("cannot open checkpoint files at " + path_prefix);
    int64_t offset = 0;
    for (const auto& [name, t] : ps.all()) {
        idx << name << " " << t.rank();
        for (int64_t d : t.shape()) idx << " " << d;
        idx << " " << offset << "\n";
        blob.write(reinterpret_cast<const char*>(t.data()),
                   static_cast<std::streamsize>(t.size() * sizeof(float)));
        offset += t.size() * static_cast<int64_t>(sizeof(float));
    }
}

void load_params(ParamStore& ps, const std::string& path_prefix) {
    std::ifstream idx(path_prefix + ".index");
    std::ifstream blob(path_prefix + ".blob", std::ios::binary);
    if (!idx || !blob) throw std::runtime_error("cannot open checkpoint files at " + path_prefix);
    std::string line;
    while (std::getline(idx, line)) {
        if (line.empty()) continue;
        std::istringstream ls(line);
        std::string name;
        size_t nd = 0;
        int64_t offset = 0;
        ls >> name >> nd;
        std::vector<int64_t> shape(nd);
        for (size_t i = 0; i < nd; ++i) ls >> shape[i];
        ls >> offset;
        if (!ls) throw std::runtime_error("malformed checkpoint index line: " + line);
        Tensor t(shape);
        blob.seekg(offset);
        blob.read(reinterpret_cast<char*>(t.data()),
                  static_cast<std::streamsize>(t.size() * sizeof(float)));
        if (!blob) throw std::runtime_error("checkpoint blob truncated at parameter " + name);
        if (ps.contains(name))
            ps.at(name) = std::move(t);
        else
            ps.create(name, t.shape()) = std::move(t);
    }
}

Mlp::Mlp(std::string name, std::vector<int64_t> widths)
    : name_(std::move(name)), widths_(std::move(widths)) {
    if (widths_.size() < 2) throw ShapeError("Mlp needs at least input and output widths");
}

std::vector<std::string> Mlp::param_names() const {
    std::vector<std::string> names;
    for (size_t l = 0; l + 1 < widths_.size(); ++l) {
        names.push_back(name_ + ".w" + std::to_string(l));
        names.push_back(name_ + ".b" + std::to_string(l));
    }
    return names;
}

int64_t Mlp::param_count() const {
    int64_t n = 0;
    for (size_t l = 0; l + 1 < widths_.size(); ++l)
        n += widths_[l] * widths_[l + 1] + widths_[l + 1];
    return n;
}

void Mlp::init(ParamStore& ps, Rng& rng) const {
    for (size_t l = 0; l + 1 < widths_.size(); ++l) {
        const int64_t fan_in = widths_[l], fan_out = widths_[l + 1];
        Tensor& w = ps.create(name_ + ".w" + std::to_string(l), {fan_in, fan_out});
        const float std = std::sqrt(2.0f / float(fan_in));
        for (int64_t i = 0; i < w.size(); ++i) w.at(i) = std * float(rng.normal());
        ps.create(name_ + ".b" + std::to_string(l), {fan_out});
    }
}

Var BoundParams::get(const std::string& name) {
    auto it = vars_.find(name);
    if (it != vars_.end()) return it->second;
    Var v = tape_.leaf(ps_.at(name), true);
    tape_.node(v).op = "param";
    vars_.emplace(name, v);
    return v;
}

std::map<std::string, Tensor> BoundParams::collect_grads() const {
    std::map<std::string, Tensor> grads;
    for (const auto& [name, var] : vars_) grads.emplace(name, tape_.grad_or_zero(var));
    return grads;
}

Var Mlp::forward(BoundParams& bp, Var x) const {
    Tape& tape = bp.tape();
    for (size_t l = 0; l + 1 < widths_.size(); ++l) {
        Var w = bp.get(name_ + ".w" + std::to_string(l));
        Var b = bp.get(name_ + ".b" + std::to_string(l));
        x = tape.add(tape.matmul(x, w), b);
        if (l + 2 < widths_.size()) x = tape.relu(x);
    }
    return x;
}

Tensor Mlp::forward_plain(const ParamStore& ps, const Tensor& x) const {
    Tensor h = x;
    for (size_t l = 0; l + 1 < widths_.size(); ++l) {
        const Tensor& w = ps.at(name_ + ".w" + std::to_string(l));
        const Tensor& b = ps.at(name_ + ".b" + std::to_string(l));
        Tensor out({h.dim(0), w.dim(1)});
        mm_nn(h, w, out);
        const int64_t B = out.dim(0), n = out.dim(1);
        const bool last = (l + 2 == widths_.size());
        for (int64_t r = 0; r < B; ++r) {
            float* row = out.data() + r * n;
            for (int64_t c = 0; c < n; ++c) {
                row[c] += b.at(c);
                if (!last && row[c] < 0.0f) row[c] = 0.0f;
            }
        }
        h = std::move(out);
    }
    if (!h.all_finite()) throw NumericsError("non-finite output in Mlp::forward_plain");
    return h;
}

void time_embedding(float t, int dim, float* out) {
    const int half = dim / 2;
    for (int i = 0; i < half; ++i) {
        // 0.5 .. 16 cycles over the unit time range, geometrically spaced;
        // smooth in t so continuous-time conditioning interpolates well
        const float cycles = 0.5f * std::pow(32.0f, float(i) / float(half - 1));
        const float w = 2.0f * float(M_PI) * cycles;
        out[2 * i] = std::sin(w * t);
        out[2 * i + 1] = std::cos(w * t);
    }
}

Tensor time_embedding_batch(const std::vector<float>& ts, int dim) {
    Tensor out({static_cast<int64_t>(ts.size()), dim});
    for (size_t r = 0; r < ts.size(); ++r) time_embedding(ts[r], dim, out.data() + r * dim);
    return out;
}

void AdamW::step(ParamStore& params, const std::map<std::string, Tensor>& grads) {
    ++t_;
    const float bc1 = 1.0f - std::pow(cfg_.beta1, float(t_));
    const float bc2 = 1.0f - std::pow(cfg_.beta2, float(t_));
    for (auto& [name, p] : params.all()) {
        auto git = grads.find(name);
        if (git == grads.end()) continue;
        const Tensor& g = git->second;
        if (!g.same_shape(p)) throw ShapeError("AdamW: gradient shape mismatch for " + name);
        Tensor& m = m_.emplace(name, Tensor(p.shape())).first->second;
        Tensor& v = v_.emplace(name, Tensor(p.shape())).first->second;
        for (int64_t i = 0; i < p.size(); ++i) {
            const float gi = g.at(i);
            m.at(i) = cfg_.beta1 * m.at(i) + (1.0f - cfg_.beta1) * gi;
            v.at(i) = cfg_.beta2 * v.at(i) + (1.0f - cfg_.beta2) * gi * gi;
            const float mhat = m.at(i) / bc1;
            const float vhat = v.at(i) / bc2;
            p.at(i) -= cfg_.lr * cfg_.weight_decay * p.at(i); // decoupled decay
            p.at(i) -= cfg_.lr * mhat / (std::sqrt(vhat) + cfg_.eps);
        }
        if (!p.all_finite()) throw NumericsError("AdamW produced non-finite parameter " + name);
    }
}

} // namespace mmbc
