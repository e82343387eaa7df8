#include "mmbc/divergences.hpp"

#include <Eigen/Core>

#include <cmath>

namespace mmbc {

double gaussian_kl(const std::vector<double>& mu_q, const std::vector<double>& lv_q,
                   const std::vector<double>& mu_p, const std::vector<double>& lv_p) {
    const size_t d = mu_q.size();
    if (lv_q.size() != d || mu_p.size() != d || lv_p.size() != d)
        throw ShapeError("gaussian_kl: dimension mismatch");
    double kl = 0.0;
    for (size_t i = 0; i < d; ++i) {
        const double dl = lv_q[i] - lv_p[i];
        const double dm = mu_q[i] - mu_p[i];
        // expm1 keeps exp(dl) - 1 - dl accurate near zero
        kl += 0.5 * ((std::expm1(dl) - dl) + dm * dm * std::exp(-lv_p[i]));
    }
    return kl;
}

Var gaussian_kl_mean_to_std(Tape& tape, Var mu, Var logvar) {
    const int64_t B = tape.value(mu).dim(0);
    // 0.5 * sum_d (exp(l) + mu^2 - 1 - l), averaged over the batch
    Var term = tape.add(tape.exp_op(logvar), tape.square(mu));
    term = tape.add_scalar(term, -1.0f);
    term = tape.sub(term, logvar);
    return tape.scale(tape.reduce_sum_all(term), 0.5f / float(B));
}

double imq_kernel(const float* a, const float* b, int64_t d, const std::vector<double>& scales) {
    double s2 = 0.0;
    for (int64_t i = 0; i < d; ++i) {
        const double diff = double(a[i]) - double(b[i]);
        s2 += diff * diff;
    }
    double k = 0.0;
    for (double c : scales) k += c / (c + s2);
    return k;
}

std::vector<double> imq_default_scales(int d_z) {
    return {0.5 * d_z, 1.0 * d_z, 2.0 * d_z, 4.0 * d_z};
}

namespace {

double imq_sum_pairs(const Tensor& x, const Tensor& y, const std::vector<double>& scales) {
    const int64_t B = x.dim(0), d = x.dim(1);
    double s = 0.0;
    for (int64_t i = 0; i < B; ++i)
        for (int64_t j = 0; j < y.dim(0); ++j)
            s += imq_kernel(x.data() + i * d, y.data() + j * d, d, scales);
    return s;
}

// d/ds of sum_C C/(C+s)
double imq_kernel_ds(double s2, const std::vector<double>& scales) {
    double g = 0.0;
    for (double c : scales) {
        const double t = c + s2;
        g -= c / (t * t);
    }
    return g;
}

} // namespace

double imq_mmd(const Tensor& zq, const Tensor& zp, const std::vector<double>& scales) {
    if (zq.rank() != 2 || zp.rank() != 2 || zq.dim(1) != zp.dim(1) || zq.dim(0) != zp.dim(0))
        throw ShapeError("imq_mmd: batches must be [B, d] with equal sizes");
    const double B = double(zq.dim(0));
    return (imq_sum_pairs(zq, zq, scales) + imq_sum_pairs(zp, zp, scales) -
            2.0 * imq_sum_pairs(zq, zp, scales)) /
           (B * B);
}

Var imq_mmd_op(Tape& tape, Var zq, Var zp, const std::vector<double>& scales) {
    const Tensor q = tape.value(zq);
    const Tensor p = tape.value(zp);
    const double val = imq_mmd(q, p, scales);
    auto backward = [zq, zp, scales](Tape& t, Tape::Node& n) {
        const float g0 = n.grad.at(0);
        const Tensor& q2 = t.value(zq);
        const Tensor& p2 = t.value(zp);
        const int64_t B = q2.dim(0), d = q2.dim(1);
        const double inv = 1.0 / double(B * B);
        auto pair_grad = [&](const Tensor& x, const Tensor& y, double coef, Tensor& gx) {
            // d/dx_i of sum_ij k(x_i, y_j): coef * k'(s2) * 2 (x_i - y_j)
            for (int64_t i = 0; i < B; ++i)
                for (int64_t j = 0; j < B; ++j) {
                    double s2 = 0.0;
                    for (int64_t c = 0; c < d; ++c) {
                        const double diff = double(x.at2(i, c)) - double(y.at2(j, c));
                        s2 += diff * diff;
                    }
                    const double kp = imq_kernel_ds(s2, scales);
                    for (int64_t c = 0; c < d; ++c) {
                        const double diff = double(x.at2(i, c)) - double(y.at2(j, c));
                        gx.at2(i, c) += float(coef * kp * 2.0 * diff);
                    }
                }
        };
        auto accumulate = [&](Var v, Tensor& gt) {
            auto& nd = t.node(v);
            if (!nd.has_grad) {
                nd.grad = Tensor(nd.value.shape());
                nd.has_grad = true;
            }
            for (int64_t i = 0; i < gt.size(); ++i) nd.grad.at(i) += g0 * gt.at(i);
        };
        if (t.node(zq).requires_grad) {
            Tensor gq({B, d});
            pair_grad(q2, q2, 2.0 * inv, gq); // both arguments vary
            pair_grad(q2, p2, -2.0 * inv, gq);
            accumulate(zq, gq);
        }
        if (t.node(zp).requires_grad) {
            Tensor gp({B, d});
            pair_grad(p2, p2, 2.0 * inv, gp);
            pair_grad(p2, q2, -2.0 * inv, gp);
            accumulate(zp, gp);
        }
    };
    return tape.custom({zq, zp}, Tensor::scalar(float(val)), backward, "imq_mmd");
}

namespace {

using Arr = Eigen::ArrayXXd;
using Vec = Eigen::ArrayXd;

Arr squared_cost(const Tensor& x, const Tensor& y) {
    const int64_t n = x.dim(0), m = y.dim(0), d = x.dim(1);
    Arr c(n, m);
    for (int64_t i = 0; i < n; ++i)
        for (int64_t j = 0; j < m; ++j) {
            double s = 0.0;
            for (int64_t k = 0; k < d; ++k) {
                const double diff = double(x.at2(i, k)) - double(y.at2(j, k));
                s += diff * diff;
            }
            c(i, j) = s;
        }
    return c;
}

struct OtSolution {
    Vec f, g;
    double dual = 0.0;
    bool converged = false;
    int iterations = 0;
};

// Log-domain Sinkhorn with uniform marginals. An epsilon-scaling warm-up
// (anneal the regularization from the cost diameter down to the target blur)
// precedes the fixed-point loop; symmetric problems (x == y) use averaged
// updates so the potentials stay symmetric.
OtSolution solve_ot(const Arr& C, double eps, double tol, int max_iters, bool symmetric) {
    const int64_t n = C.rows(), m = C.cols();
    const double la = -std::log(double(n)), lb = -std::log(double(m));
    Vec f = Vec::Zero(n), g = Vec::Zero(m);
    OtSolution sol;
    auto lse_rows = [&](const Vec& gv, double e) {
        // for each i: e * log sum_j exp(lb + (g_j - C_ij)/e)
        Vec out(n);
        for (int64_t i = 0; i < n; ++i) {
            double mx = -1e300;
            for (int64_t j = 0; j < m; ++j) mx = std::max(mx, lb + (gv(j) - C(i, j)) / e);
            double s = 0.0;
            for (int64_t j = 0; j < m; ++j) s += std::exp(lb + (gv(j) - C(i, j)) / e - mx);
            out(i) = e * (mx + std::log(s));
        }
        return out;
    };
    auto lse_cols = [&](const Vec& fv, double e) {
        Vec out(m);
        for (int64_t j = 0; j < m; ++j) {
            double mx = -1e300;
            for (int64_t i = 0; i < n; ++i) mx = std::max(mx, la + (fv(i) - C(i, j)) / e);
            double s = 0.0;
            for (int64_t i = 0; i < n; ++i) s += std::exp(la + (fv(i) - C(i, j)) / e - mx);
            out(j) = e * (mx + std::log(s));
        }
        return out;
    };
    // Damped Jacobi averaging for every problem; a symmetric instance then
    // follows exactly the same trajectory as its self-transport terms, so the
    // debiased combination cancels sharply even before full convergence.
    auto update = [&](double e) {
        if (symmetric) {
            f = 0.5 * (f - lse_rows(f, e));
            g = f;
            return;
        }
        const Vec fn = 0.5 * (f - lse_rows(g, e));
        const Vec gn = 0.5 * (g - lse_cols(f, e));
        f = fn;
        g = gn;
    };
    auto residual = [&](double e) {
        if (symmetric) return (f + lse_rows(f, e)).abs().maxCoeff();
        return std::max((f + lse_rows(g, e)).abs().maxCoeff(),
                        (g + lse_cols(f, e)).abs().maxCoeff());
    };

    int it = 0;
    for (double e = std::max(eps, C.maxCoeff()); e > eps && it < max_iters; e *= 0.7, ++it)
        update(e);
    for (; it < max_iters; ++it) {
        update(eps);
        if (residual(eps) < tol) {
            sol.converged = true;
            ++it;
            break;
        }
    }
    sol.iterations = it;
    sol.f = f;
    sol.g = g;
    sol.dual = f.mean() + g.mean();
    return sol;
}

Arr plan_from(const Arr& C, const Vec& f, const Vec& g, double eps) {
    const int64_t n = C.rows(), m = C.cols();
    Arr P(n, m);
    const double lab = -std::log(double(n)) - std::log(double(m));
    for (int64_t i = 0; i < n; ++i)
        for (int64_t j = 0; j < m; ++j)
            P(i, j) = std::exp(lab + (f(i) + g(j) - C(i, j)) / eps);
    return P;
}

} // namespace

SinkhornResult sinkhorn_divergence(const Tensor& zq, const Tensor& zp, double blur, double tol,
                                   int max_iters) {
    if (zq.rank() != 2 || zp.rank() != 2 || zq.dim(1) != zp.dim(1) || zq.dim(0) != zp.dim(0))
        throw ShapeError("sinkhorn_divergence: batches must be [B, d] with equal sizes");
    if (blur <= 0.0) throw std::invalid_argument("sinkhorn_divergence: blur must be positive");
    const Arr Cqp = squared_cost(zq, zp);
    const Arr Cqq = squared_cost(zq, zq);
    const Arr Cpp = squared_cost(zp, zp);
    const OtSolution qp = solve_ot(Cqp, blur, tol, max_iters, false);
    const OtSolution qq = solve_ot(Cqq, blur, tol, max_iters, true);
    const OtSolution pp = solve_ot(Cpp, blur, tol, max_iters, true);
    SinkhornResult res;
    res.value = qp.dual - 0.5 * qq.dual - 0.5 * pp.dual;
    res.converged = qp.converged && qq.converged && pp.converged;
    res.iterations = std::max({qp.iterations, qq.iterations, pp.iterations});
    return res;
}

Var sinkhorn_op(Tape& tape, Var zq, Var zp, double blur, double tol, int max_iters) {
    const Tensor q = tape.value(zq);
    const Tensor p = tape.value(zp);
    if (q.rank() != 2 || p.rank() != 2 || q.dim(1) != p.dim(1) || q.dim(0) != p.dim(0))
        throw ShapeError("sinkhorn_op: batches must be [B, d] with equal sizes");
    const Arr Cqp = squared_cost(q, p);
    const Arr Cqq = squared_cost(q, q);
    const Arr Cpp = squared_cost(p, p);
    const OtSolution qp = solve_ot(Cqp, blur, tol, max_iters, false);
    const OtSolution qq = solve_ot(Cqq, blur, tol, max_iters, true);
    const OtSolution pp = solve_ot(Cpp, blur, tol, max_iters, true);
    const double val = qp.dual - 0.5 * qq.dual - 0.5 * pp.dual;

    // Envelope gradients: optimal plans held fixed.
    const Arr Pqp = plan_from(Cqp, qp.f, qp.g, blur);
    const Arr Pqq = plan_from(Cqq, qq.f, qq.g, blur);
    const Arr Ppp = plan_from(Cpp, pp.f, pp.g, blur);

    auto backward = [zq, zp, Pqp, Pqq, Ppp](Tape& t, Tape::Node& n) {
        const double g0 = double(n.grad.at(0));
        const Tensor& q2 = t.value(zq);
        const Tensor& p2 = t.value(zp);
        const int64_t B = q2.dim(0), d = q2.dim(1);
        auto accumulate = [&](Var v, const Tensor& gt) {
            auto& nd = t.node(v);
            if (!nd.requires_grad) return;
            if (!nd.has_grad) {
                nd.grad = Tensor(nd.value.shape());
                nd.has_grad = true;
            }
            for (int64_t i = 0; i < gt.size(); ++i) nd.grad.at(i) += gt.at(i);
        };
        if (t.node(zq).requires_grad) {
            Tensor gq({B, d});
            for (int64_t i = 0; i < B; ++i)
                for (int64_t j = 0; j < B; ++j) {
                    const double wqp = Pqp(i, j);
                    const double wqq = Pqq(i, j) + Pqq(j, i);
                    for (int64_t c = 0; c < d; ++c) {
                        const double dqp = double(q2.at2(i, c)) - double(p2.at2(j, c));
                        const double dqq = double(q2.at2(i, c)) - double(q2.at2(j, c));
                        gq.at2(i, c) += float(g0 * (2.0 * wqp * dqp - wqq * dqq));
                    }
                }
            accumulate(zq, gq);
        }
        if (t.node(zp).requires_grad) {
            Tensor gp({B, d});
            for (int64_t j = 0; j < B; ++j)
                for (int64_t i = 0; i < B; ++i) {
                    const double wqp = Pqp(i, j);
                    const double wpp = Ppp(j, i) + Ppp(i, j);
                    for (int64_t c = 0; c < d; ++c) {
                        const double dpq = double(p2.at2(j, c)) - double(q2.at2(i, c));
                        const double dpp = double(p2.at2(j, c)) - double(p2.at2(i, c));
                        gp.at2(j, c) += float(g0 * (2.0 * wqp * dpq - wpp * dpp));
                    }
                }
            accumulate(zp, gp);
        }
    };
    return tape.custom({zq, zp}, Tensor::scalar(float(val)), backward, "sinkhorn");
}

Var geometry_penalty(Tape& tape, Var zq, const GeomRegConfig& cfg) {
    const Tensor& z = tape.value(zq);
    if (z.rank() != 2) throw ShapeError("geometry_penalty: latent batch must be [B, d]");
    const int64_t B = z.dim(0), d = z.dim(1);
    if (B < 2) throw ShapeError("geometry_penalty: need at least 2 samples");

    Var mean = tape.mean_rows(zq);                                   // [d]
    Var mean_term = tape.scale(tape.reduce_sum_all(tape.square(mean)), cfg.beta_mean);

    Var centered = tape.add(zq, tape.scale(mean, -1.0f));            // broadcast subtract
    Var var_d = tape.mean_rows(tape.square(centered));               // [d]
    Var sigma = tape.sqrt_op(tape.add_scalar(var_d, cfg.eps_num));   // [d]

    Var std_term = tape.scale(
        tape.reduce_sum_all(tape.square(tape.add_scalar(sigma, -cfg.sigma_star))),
        cfg.beta_std / float(d));
    Var max_term = tape.scale(
        tape.reduce_sum_all(tape.square(tape.relu(tape.add_scalar(sigma, -cfg.sigma_max)))),
        cfg.beta_max / float(d));

    Var cov = tape.scale(tape.matmul_tn(centered, centered), 1.0f / float(B - 1)); // [d, d]
    Tensor offdiag_mask({d, d}, 1.0f);
    for (int64_t i = 0; i < d; ++i) offdiag_mask.at2(i, i) = 0.0f;
    Var offdiag = tape.mul(cov, tape.constant(offdiag_mask));
    Var cov_term = tape.scale(tape.reduce_sum_all(tape.square(offdiag)), cfg.beta_cov / float(d));

    return tape.add(tape.add(mean_term, std_term), tape.add(max_term, cov_term));
}

} // namespace mmbc
