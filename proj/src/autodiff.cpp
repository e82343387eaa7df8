#include "mmbc/autodiff.hpp"

#include <cmath>

namespace mmbc {

namespace {
void require(bool ok, const std::string& msg) {
    if (!ok) throw ShapeError(msg);
}
} // namespace

void Tape::check_finite(const Tensor& t, const char* op_name) const {
    if (!t.all_finite())
        throw NumericsError(std::string("non-finite output in op '") + op_name + "'");
}

Var Tape::make(Tensor value, std::vector<int32_t> inputs,
               std::function<void(Tape&, Node&)> backward, const char* op_name) {
    check_finite(value, op_name);
    Node n;
    n.value = std::move(value);
    n.inputs = std::move(inputs);
    n.backward = std::move(backward);
    n.op = op_name;
    for (int32_t i : n.inputs)
        if (nodes_[i].requires_grad) n.requires_grad = true;
    nodes_.push_back(std::move(n));
    return Var{static_cast<int32_t>(nodes_.size()) - 1};
}

Var Tape::leaf(Tensor value, bool requires_grad) {
    check_finite(value, "leaf");
    Node n;
    n.value = std::move(value);
    n.requires_grad = requires_grad;
    nodes_.push_back(std::move(n));
    return Var{static_cast<int32_t>(nodes_.size()) - 1};
}

void Tape::accumulate(int32_t id, const Tensor& g) {
    Node& n = nodes_[id];
    if (!n.requires_grad) return;
    if (!n.has_grad) {
        n.grad = Tensor(n.value.shape());
        n.has_grad = true;
    }
    float* dst = n.grad.data();
    const float* src = g.data();
    const int64_t sz = n.grad.size();
    for (int64_t i = 0; i < sz; ++i) dst[i] += src[i];
}

void Tape::accumulate_scaled(int32_t id, const Tensor& g, float c) {
    Node& n = nodes_[id];
    if (!n.requires_grad) return;
    if (!n.has_grad) {
        n.grad = Tensor(n.value.shape());
        n.has_grad = true;
    }
    float* dst = n.grad.data();
    const float* src = g.data();
    const int64_t sz = n.grad.size();
    for (int64_t i = 0; i < sz; ++i) dst[i] += c * src[i];
}

Var Tape::add(Var a, Var b) {
    const Tensor& ta = nodes_[a.id].value;
    const Tensor& tb = nodes_[b.id].value;
    if (ta.same_shape(tb)) {
        Tensor out = ta;
        const float* pb = tb.data();
        float* po = out.data();
        for (int64_t i = 0; i < out.size(); ++i) po[i] += pb[i];
        return make(std::move(out), {a.id, b.id}, [a, b](Tape& t, Node& n) {
            t.accumulate(a.id, n.grad);
            t.accumulate(b.id, n.grad);
        }, "add");
    }
    // bias broadcast: a is [B, n], b is [n]
    require(ta.rank() == 2 && tb.rank() == 1 && ta.dim(1) == tb.dim(0),
            "add: incompatible shapes " + shape_str(ta.shape()) + " vs " + shape_str(tb.shape()));
    Tensor out = ta;
    const int64_t B = ta.dim(0), n = ta.dim(1);
    for (int64_t r = 0; r < B; ++r) {
        float* row = out.data() + r * n;
        const float* pb = tb.data();
        for (int64_t c = 0; c < n; ++c) row[c] += pb[c];
    }
    return make(std::move(out), {a.id, b.id}, [a, b, B, n](Tape& t, Node& nd) {
        t.accumulate(a.id, nd.grad);
        if (t.nodes_[b.id].requires_grad) {
            Tensor gb({n});
            for (int64_t r = 0; r < B; ++r) {
                const float* row = nd.grad.data() + r * n;
                for (int64_t c = 0; c < n; ++c) gb.at(c) += row[c];
            }
            t.accumulate(b.id, gb);
        }
    }, "add");
}

Var Tape::sub(Var a, Var b) {
    const Tensor& ta = nodes_[a.id].value;
    const Tensor& tb = nodes_[b.id].value;
    require(ta.same_shape(tb), "sub: shape mismatch " + shape_str(ta.shape()) + " vs " +
                                   shape_str(tb.shape()));
    Tensor out = ta;
    const float* pb = tb.data();
    float* po = out.data();
    for (int64_t i = 0; i < out.size(); ++i) po[i] -= pb[i];
    return make(std::move(out), {a.id, b.id}, [a, b](Tape& t, Node& n) {
        t.accumulate(a.id, n.grad);
        t.accumulate_scaled(b.id, n.grad, -1.0f);
    }, "sub");
}

Var Tape::mul(Var a, Var b) {
    const Tensor& ta = nodes_[a.id].value;
    const Tensor& tb = nodes_[b.id].value;
    require(ta.same_shape(tb), "mul: shape mismatch");
    Tensor out = ta;
    float* po = out.data();
    const float* pb = tb.data();
    for (int64_t i = 0; i < out.size(); ++i) po[i] *= pb[i];
    return make(std::move(out), {a.id, b.id}, [a, b](Tape& t, Node& n) {
        if (t.nodes_[a.id].requires_grad) {
            Tensor ga = n.grad;
            const float* pb2 = t.nodes_[b.id].value.data();
            for (int64_t i = 0; i < ga.size(); ++i) ga.at(i) *= pb2[i];
            t.accumulate(a.id, ga);
        }
        if (t.nodes_[b.id].requires_grad) {
            Tensor gb = n.grad;
            const float* pa = t.nodes_[a.id].value.data();
            for (int64_t i = 0; i < gb.size(); ++i) gb.at(i) *= pa[i];
            t.accumulate(b.id, gb);
        }
    }, "mul");
}

Var Tape::scale(Var a, float c) {
    Tensor out = nodes_[a.id].value;
    for (int64_t i = 0; i < out.size(); ++i) out.at(i) *= c;
    return make(std::move(out), {a.id}, [a, c](Tape& t, Node& n) {
        t.accumulate_scaled(a.id, n.grad, c);
    }, "scale");
}

Var Tape::add_scalar(Var a, float c) {
    Tensor out = nodes_[a.id].value;
    for (int64_t i = 0; i < out.size(); ++i) out.at(i) += c;
    return make(std::move(out), {a.id}, [a](Tape& t, Node& n) {
        t.accumulate(a.id, n.grad);
    }, "add_scalar");
}

Var Tape::relu(Var a) {
    Tensor out = nodes_[a.id].value;
    for (int64_t i = 0; i < out.size(); ++i)
        if (out.at(i) < 0.0f) out.at(i) = 0.0f;
    return make(std::move(out), {a.id}, [a](Tape& t, Node& n) {
        if (!t.nodes_[a.id].requires_grad) return;
        Tensor g = n.grad;
        const float* x = t.nodes_[a.id].value.data();
        for (int64_t i = 0; i < g.size(); ++i)
            if (x[i] <= 0.0f) g.at(i) = 0.0f;
        t.accumulate(a.id, g);
    }, "relu");
}

Var Tape::abs(Var a) {
    Tensor out = nodes_[a.id].value;
    for (int64_t i = 0; i < out.size(); ++i) out.at(i) = std::fabs(out.at(i));
    return make(std::move(out), {a.id}, [a](Tape& t, Node& n) {
        if (!t.nodes_[a.id].requires_grad) return;
        Tensor g = n.grad;
        const float* x = t.nodes_[a.id].value.data();
        for (int64_t i = 0; i < g.size(); ++i) {
            if (x[i] < 0.0f) g.at(i) = -g.at(i);
            else if (x[i] == 0.0f) g.at(i) = 0.0f;
        }
        t.accumulate(a.id, g);
    }, "abs");
}

Var Tape::square(Var a) {
    Tensor out = nodes_[a.id].value;
    for (int64_t i = 0; i < out.size(); ++i) out.at(i) *= out.at(i);
    return make(std::move(out), {a.id}, [a](Tape& t, Node& n) {
        if (!t.nodes_[a.id].requires_grad) return;
        Tensor g = n.grad;
        const float* x = t.nodes_[a.id].value.data();
        for (int64_t i = 0; i < g.size(); ++i) g.at(i) *= 2.0f * x[i];
        t.accumulate(a.id, g);
    }, "square");
}

Var Tape::sqrt_op(Var a) {
    Tensor out = nodes_[a.id].value;
    for (int64_t i = 0; i < out.size(); ++i) {
        if (out.at(i) <= 0.0f) throw NumericsError("sqrt: non-positive input");
        out.at(i) = std::sqrt(out.at(i));
    }
    return make(std::move(out), {a.id}, [a](Tape& t, Node& n) {
        if (!t.nodes_[a.id].requires_grad) return;
        Tensor g = n.grad;
        const float* y = n.value.data();
        for (int64_t i = 0; i < g.size(); ++i) g.at(i) *= 0.5f / y[i];
        t.accumulate(a.id, g);
    }, "sqrt");
}

Var Tape::exp_op(Var a) {
    Tensor out = nodes_[a.id].value;
    for (int64_t i = 0; i < out.size(); ++i) out.at(i) = std::exp(out.at(i));
    return make(std::move(out), {a.id}, [a](Tape& t, Node& n) {
        if (!t.nodes_[a.id].requires_grad) return;
        Tensor g = n.grad;
        const float* y = n.value.data();
        for (int64_t i = 0; i < g.size(); ++i) g.at(i) *= y[i];
        t.accumulate(a.id, g);
    }, "exp");
}

Var Tape::log_op(Var a) {
    Tensor out = nodes_[a.id].value;
    for (int64_t i = 0; i < out.size(); ++i) {
        if (out.at(i) <= 0.0f) throw NumericsError("log: non-positive input");
        out.at(i) = std::log(out.at(i));
    }
    return make(std::move(out), {a.id}, [a](Tape& t, Node& n) {
        if (!t.nodes_[a.id].requires_grad) return;
        Tensor g = n.grad;
        const float* x = t.nodes_[a.id].value.data();
        for (int64_t i = 0; i < g.size(); ++i) g.at(i) /= x[i];
        t.accumulate(a.id, g);
    }, "log");
}

Var Tape::softplus(Var a) {
    Tensor out = nodes_[a.id].value;
    for (int64_t i = 0; i < out.size(); ++i) {
        const float x = out.at(i);
        out.at(i) = x > 20.0f ? x : std::log1p(std::exp(x));
    }
    return make(std::move(out), {a.id}, [a](Tape& t, Node& n) {
        if (!t.nodes_[a.id].requires_grad) return;
        Tensor g = n.grad;
        const float* x = t.nodes_[a.id].value.data();
        for (int64_t i = 0; i < g.size(); ++i) g.at(i) *= 1.0f / (1.0f + std::exp(-x[i]));
        t.accumulate(a.id, g);
    }, "softplus");
}

Var Tape::concat_cols(Var a, Var b) {
    const Tensor& ta = nodes_[a.id].value;
    const Tensor& tb = nodes_[b.id].value;
    require(ta.rank() == 2 && tb.rank() == 2 && ta.dim(0) == tb.dim(0),
            "concat_cols: need matching row counts");
    const int64_t B = ta.dim(0), na = ta.dim(1), nb = tb.dim(1);
    Tensor out({B, na + nb});
    for (int64_t r = 0; r < B; ++r) {
        float* row = out.data() + r * (na + nb);
        const float* ra = ta.data() + r * na;
        const float* rb = tb.data() + r * nb;
        for (int64_t c = 0; c < na; ++c) row[c] = ra[c];
        for (int64_t c = 0; c < nb; ++c) row[na + c] = rb[c];
    }
    return make(std::move(out), {a.id, b.id}, [a, b, B, na, nb](Tape& t, Node& n) {
        if (t.nodes_[a.id].requires_grad) {
            Tensor ga({B, na});
            for (int64_t r = 0; r < B; ++r)
                for (int64_t c = 0; c < na; ++c) ga.at2(r, c) = n.grad.at2(r, c);
            t.accumulate(a.id, ga);
        }
        if (t.nodes_[b.id].requires_grad) {
            Tensor gb({B, nb});
            for (int64_t r = 0; r < B; ++r)
                for (int64_t c = 0; c < nb; ++c) gb.at2(r, c) = n.grad.at2(r, na + c);
            t.accumulate(b.id, gb);
        }
    }, "concat_cols");
}

Var Tape::slice_cols(Var a, int64_t c0, int64_t c1) {
    const Tensor& ta = nodes_[a.id].value;
    require(ta.rank() == 2 && c0 >= 0 && c1 <= ta.dim(1) && c0 < c1, "slice_cols: bad range");
    const int64_t B = ta.dim(0), n = ta.dim(1), w = c1 - c0;
    Tensor out({B, w});
    for (int64_t r = 0; r < B; ++r)
        for (int64_t c = 0; c < w; ++c) out.at2(r, c) = ta.at2(r, c0 + c);
    return make(std::move(out), {a.id}, [a, B, n, c0, w](Tape& t, Node& nd) {
        if (!t.nodes_[a.id].requires_grad) return;
        Tensor ga({B, n});
        for (int64_t r = 0; r < B; ++r)
            for (int64_t c = 0; c < w; ++c) ga.at2(r, c0 + c) = nd.grad.at2(r, c);
        t.accumulate(a.id, ga);
    }, "slice_cols");
}

Var Tape::reduce_mean_all(Var a) {
    const Tensor& ta = nodes_[a.id].value;
    double s = 0.0;
    for (int64_t i = 0; i < ta.size(); ++i) s += ta.at(i);
    const int64_t n = ta.size();
    Tensor out = Tensor::scalar(static_cast<float>(s / double(n)));
    return make(std::move(out), {a.id}, [a, n](Tape& t, Node& nd) {
        if (!t.nodes_[a.id].requires_grad) return;
        Tensor g(t.nodes_[a.id].value.shape(), nd.grad.at(0) / float(n));
        t.accumulate(a.id, g);
    }, "reduce_mean");
}

Var Tape::reduce_sum_all(Var a) {
    const Tensor& ta = nodes_[a.id].value;
    double s = 0.0;
    for (int64_t i = 0; i < ta.size(); ++i) s += ta.at(i);
    Tensor out = Tensor::scalar(static_cast<float>(s));
    return make(std::move(out), {a.id}, [a](Tape& t, Node& nd) {
        if (!t.nodes_[a.id].requires_grad) return;
        Tensor g(t.nodes_[a.id].value.shape(), nd.grad.at(0));
        t.accumulate(a.id, g);
    }, "reduce_sum");
}

Var Tape::mean_rows(Var a) {
    const Tensor& ta = nodes_[a.id].value;
    require(ta.rank() == 2, "mean_rows: rank-2 input required");
    const int64_t B = ta.dim(0), n = ta.dim(1);
    Tensor out({n});
    for (int64_t r = 0; r < B; ++r)
        for (int64_t c = 0; c < n; ++c) out.at(c) += ta.at2(r, c);
    for (int64_t c = 0; c < n; ++c) out.at(c) /= float(B);
    return make(std::move(out), {a.id}, [a, B, n](Tape& t, Node& nd) {
        if (!t.nodes_[a.id].requires_grad) return;
        Tensor g({B, n});
        for (int64_t r = 0; r < B; ++r)
            for (int64_t c = 0; c < n; ++c) g.at2(r, c) = nd.grad.at(c) / float(B);
        t.accumulate(a.id, g);
    }, "mean_rows");
}

Var Tape::stop_gradient(Var a) {
    Tensor out = nodes_[a.id].value;
    Node n;
    n.value = std::move(out);
    n.requires_grad = false; // gradients do not cross this node
    n.op = "stop_gradient";
    nodes_.push_back(std::move(n));
    return Var{static_cast<int32_t>(nodes_.size()) - 1};
}

Var Tape::matmul(Var a, Var b) {
    const Tensor& ta = nodes_[a.id].value;
    const Tensor& tb = nodes_[b.id].value;
    require(ta.rank() == 2 && tb.rank() == 2 && ta.dim(1) == tb.dim(0),
            "matmul: incompatible " + shape_str(ta.shape()) + " x " + shape_str(tb.shape()));
    Tensor out({ta.dim(0), tb.dim(1)});
    mm_nn(ta, tb, out);
    return make(std::move(out), {a.id, b.id}, [a, b](Tape& t, Node& n) {
        const Tensor& A = t.nodes_[a.id].value;
        const Tensor& B = t.nodes_[b.id].value;
        if (t.nodes_[a.id].requires_grad) {
            Tensor ga({A.dim(0), A.dim(1)});
            mm_nt(n.grad, B, ga); // dA = G B^T
            t.accumulate(a.id, ga);
        }
        if (t.nodes_[b.id].requires_grad) {
            Tensor gb({B.dim(0), B.dim(1)});
            mm_tn(A, n.grad, gb); // dB = A^T G
            t.accumulate(b.id, gb);
        }
    }, "matmul");
}

Var Tape::matmul_tn(Var a, Var b) {
    const Tensor& ta = nodes_[a.id].value;
    const Tensor& tb = nodes_[b.id].value;
    require(ta.rank() == 2 && tb.rank() == 2 && ta.dim(0) == tb.dim(0),
            "matmul_tn: incompatible shapes");
    Tensor out({ta.dim(1), tb.dim(1)});
    mm_tn(ta, tb, out);
    return make(std::move(out), {a.id, b.id}, [a, b](Tape& t, Node& n) {
        const Tensor& A = t.nodes_[a.id].value; // [k, m]
        const Tensor& B = t.nodes_[b.id].value; // [k, n]
        if (t.nodes_[a.id].requires_grad) {
            Tensor ga({A.dim(0), A.dim(1)});
            mm_nt(B, n.grad, ga); // dA = B G^T
            t.accumulate(a.id, ga);
        }
        if (t.nodes_[b.id].requires_grad) {
            Tensor gb({B.dim(0), B.dim(1)});
            mm_nn(A, n.grad, gb); // dB = A G
            t.accumulate(b.id, gb);
        }
    }, "matmul_tn");
}

Var Tape::gaussian_sample(Var mu, Var logvar, const Tensor& eps) {
    const Tensor& tm = nodes_[mu.id].value;
    const Tensor& tl = nodes_[logvar.id].value;
    require(tm.same_shape(tl) && tm.same_shape(eps), "gaussian_sample: shape mismatch");
    Tensor out = tm;
    for (int64_t i = 0; i < out.size(); ++i)
        out.at(i) += std::exp(0.5f * tl.at(i)) * eps.at(i);
    Tensor eps_copy = eps;
    return make(std::move(out), {mu.id, logvar.id},
                [mu, logvar, eps_copy](Tape& t, Node& n) {
        t.accumulate(mu.id, n.grad);
        if (t.nodes_[logvar.id].requires_grad) {
            const Tensor& tl2 = t.nodes_[logvar.id].value;
            Tensor g = n.grad;
            for (int64_t i = 0; i < g.size(); ++i)
                g.at(i) *= 0.5f * std::exp(0.5f * tl2.at(i)) * eps_copy.at(i);
            t.accumulate(logvar.id, g);
        }
    }, "gaussian_sample");
}

Var Tape::custom(std::vector<Var> inputs, Tensor value,
                 std::function<void(Tape&, Node&)> backward, const char* op_name) {
    std::vector<int32_t> ids;
    ids.reserve(inputs.size());
    for (Var v : inputs) ids.push_back(v.id);
    return make(std::move(value), std::move(ids), std::move(backward), op_name);
}

void Tape::backward(Var loss) {
    Node& ln = nodes_[loss.id];
    if (ln.value.size() != 1) throw ShapeError("backward: loss must be scalar");
    ln.grad = Tensor::scalar(1.0f);
    ln.has_grad = true;
    for (int32_t i = loss.id; i >= 0; --i) {
        Node& n = nodes_[i];
        if (!n.has_grad || !n.backward) continue;
        n.backward(*this, n);
        if (n.has_grad && !n.grad.all_finite())
            throw NumericsError(std::string("non-finite gradient at op '") + n.op + "'");
    }
    for (auto& n : nodes_) {
        if (n.has_grad && !n.grad.all_finite())
            throw NumericsError(std::string("non-finite gradient at op '") + n.op + "'");
    }
}

const Tensor& Tape::grad(Var v) const {
    const Node& n = nodes_[v.id];
    if (!n.has_grad) throw NumericsError("grad requested for a node with no gradient");
    return n.grad;
}

Tensor Tape::grad_or_zero(Var v) const {
    const Node& n = nodes_[v.id];
    if (!n.has_grad) return Tensor(n.value.shape());
    return n.grad;
}

float Tape::scalar_value(Var v) const {
    const Tensor& t = nodes_[v.id].value;
    if (t.size() != 1) throw ShapeError("scalar_value: tensor is not scalar");
    return t.at(0);
}

} // namespace mmbc
