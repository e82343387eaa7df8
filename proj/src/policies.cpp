#include "mmbc/policies.hpp"

#include <nlohmann/json.hpp>

#include <algorithm>
#include <cmath>
#include <fstream>

namespace mmbc {

using json = nlohmann::json;

const char* family_name(Family f) {
    switch (f) {
        case Family::BCAT: return "bcat";
        case Family::KlCvae: return "kl-cvae";
        case Family::MmdCwae: return "mmd-cwae";
        case Family::SinkhornCwae: return "sinkhorn-cwae";
        case Family::VqVae: return "vq-vae";
        case Family::LatFlow: return "lat-flow";
        case Family::ActFlow: return "act-flow";
        case Family::ActDiff: return "act-diff";
    }
    return "unknown";
}

std::optional<Family> parse_family(const std::string& name) {
    for (int f = 0; f <= int(Family::ActDiff); ++f)
        if (name == family_name(Family(f))) return Family(f);
    return std::nullopt;
}

int default_epochs(TaskId id) { return id == TaskId::Circle ? 600 : 1000; }

int default_latent_dim(TaskId id) {
    switch (id) {
        case TaskId::Circle: return 1;
        case TaskId::Sequential: return 2;
        case TaskId::Radial: return 4;
        case TaskId::Corridor: return 4;
    }
    return 1;
}

bool PolicyState::has_encoder() const {
    return family == Family::KlCvae || family == Family::MmdCwae ||
           family == Family::SinkhornCwae || family == Family::VqVae ||
           family == Family::LatFlow;
}

bool PolicyState::has_flow_net() const {
    return family == Family::LatFlow || family == Family::ActFlow || family == Family::ActDiff;
}

PolicyState make_policy(Family family, const TaskSpec& task, const NormBounds& norm,
                        const Hyper& hyper, uint64_t seed) {
    PolicyState p;
    p.family = family;
    p.task_id = task.task_id;
    p.K = task.K;
    p.H = task.H;
    p.act_dim = 2 * task.H;
    p.d_z = default_latent_dim(task.task_id);
    p.hyper = hyper;
    p.norm = norm;
    const int64_t h = hyper.hidden;
    const int64_t obs = 2, act = p.act_dim, dz = p.d_z, te = hyper.time_embed_dim;

    switch (family) {
        case Family::BCAT:
            p.decoder = Mlp("dec", {obs, h, h, h, act});
            break;
        case Family::KlCvae:
            p.decoder = Mlp("dec", {dz + obs, h, h, h, act});
            p.encoder = Mlp("enc", {act + obs, h, h, h, 2 * dz});
            break;
        case Family::MmdCwae:
        case Family::SinkhornCwae:
            p.decoder = Mlp("dec", {dz + obs, h, h, h, act});
            p.encoder = Mlp("enc", {act + obs, h, h, h, dz});
            break;
        case Family::VqVae:
            p.decoder = Mlp("dec", {dz + obs, h, h, h, act});
            p.encoder = Mlp("enc", {act + obs, h, h, h, dz});
            break;
        case Family::LatFlow:
            p.decoder = Mlp("dec", {dz + obs, h, h, h, act});
            p.encoder = Mlp("enc", {act + obs, h, h, h, dz});
            p.flow_net = Mlp("flow", {dz + te + obs, h, h, h, dz});
            break;
        case Family::ActFlow:
        case Family::ActDiff:
            p.flow_net = Mlp("flow", {act + te + obs, h, h, h, act});
            break;
    }

    Rng init_rng = named_stream(seed, "init");
    if (!p.decoder.name().empty()) p.decoder.init(p.params, init_rng);
    if (p.has_encoder()) p.encoder.init(p.params, init_rng);
    if (p.has_flow_net()) p.flow_net.init(p.params, init_rng);

    if (family == Family::VqVae) {
        p.vq.layers = hyper.vq_layers;
        p.vq.codebook_size = hyper.vq_codebook_size > 0 ? hyper.vq_codebook_size : task.K;
        p.vq.d_z = int(dz);
        p.vq.ema_decay = hyper.vq_ema_decay;
        p.vq.dead_code_batches = hyper.vq_dead_code_batches;
        for (int l = 0; l < p.vq.layers; ++l) {
            p.vq.codes.emplace_back(std::vector<int64_t>{p.vq.codebook_size, dz});
            p.vq.ema_count.emplace_back(std::vector<int64_t>{p.vq.codebook_size});
            p.vq.ema_sum.emplace_back(std::vector<int64_t>{p.vq.codebook_size, dz});
            p.vq.unused_streak.emplace_back(size_t(p.vq.codebook_size), 0);
        }
    }
    return p;
}

Batch make_batch(const Dataset& ds, const std::vector<int>& indices) {
    const int64_t B = int64_t(indices.size());
    const int64_t H = ds.H;
    Batch b{Tensor({B, 2}), Tensor({B, 2 * H})};
    for (int64_t r = 0; r < B; ++r) {
        const Demo& d = ds.demos[size_t(indices[size_t(r)])];
        b.obs.at2(r, 0) = ds.norm.nx(d.obs[0]);
        b.obs.at2(r, 1) = ds.norm.ny(d.obs[1]);
        for (int64_t t = 0; t < H; ++t) {
            b.chunk.at2(r, 2 * t) = ds.norm.nx(d.chunk.xy[size_t(2 * t)]);
            b.chunk.at2(r, 2 * t + 1) = ds.norm.ny(d.chunk.xy[size_t(2 * t + 1)]);
        }
    }
    return b;
}

namespace {

Tensor normal_tensor(std::vector<int64_t> shape, Rng& rng) {
    Tensor t(std::move(shape));
    for (int64_t i = 0; i < t.size(); ++i) t.at(i) = float(rng.normal());
    return t;
}

Var l1_mean(Tape& tape, Var pred, Var target) {
    return tape.reduce_mean_all(tape.abs(tape.sub(pred, target)));
}

} // namespace

LossResult bcat_loss(BoundParams& bp, PolicyState& p, const Batch& b) {
    Tape& tape = bp.tape();
    Var obs = tape.constant(b.obs);
    Var pred = p.decoder.forward(bp, obs);
    Var loss = l1_mean(tape, pred, tape.constant(b.chunk));
    return {loss, {{"rec", tape.scalar_value(loss)}}};
}

LossResult kl_cvae_loss(BoundParams& bp, PolicyState& p, const Batch& b, Rng& rng) {
    Tape& tape = bp.tape();
    const int64_t B = b.obs.dim(0);
    Var obs = tape.constant(b.obs);
    Var chunk = tape.constant(b.chunk);
    Var enc_out = p.encoder.forward(bp, tape.concat_cols(chunk, obs));
    Var mu = tape.slice_cols(enc_out, 0, p.d_z);
    Var logvar = tape.slice_cols(enc_out, p.d_z, 2 * p.d_z);
    Var z = tape.gaussian_sample(mu, logvar, normal_tensor({B, p.d_z}, rng));
    Var pred = p.decoder.forward(bp, tape.concat_cols(z, obs));
    Var rec = l1_mean(tape, pred, chunk);
    Var kl = gaussian_kl_mean_to_std(tape, mu, logvar);
    Var loss = tape.add(rec, tape.scale(kl, p.hyper.beta_kl));
    return {loss, {{"rec", tape.scalar_value(rec)}, {"kl", tape.scalar_value(kl)}}};
}

namespace {

// Shared by the aggregate-matched families: deterministic encoder, optional
// decoder-side jitter, optional geometry regularizer.
struct CwaeCore {
    Var zq;
    Var rec;
    Var geom; // invalid when disabled
};

CwaeCore cwae_core(BoundParams& bp, PolicyState& p, const Batch& b, Rng& rng) {
    Tape& tape = bp.tape();
    const int64_t B = b.obs.dim(0);
    Var obs = tape.constant(b.obs);
    Var chunk = tape.constant(b.chunk);
    CwaeCore core;
    core.zq = p.encoder.forward(bp, tape.concat_cols(chunk, obs));
    Var zdec = core.zq;
    if (p.hyper.jitter_enabled && p.hyper.sigma_dec > 0.0f) {
        Tensor eps = normal_tensor({B, p.d_z}, rng);
        for (int64_t i = 0; i < eps.size(); ++i) eps.at(i) *= p.hyper.sigma_dec;
        zdec = tape.add(core.zq, tape.constant(eps));
    }
    Var pred = p.decoder.forward(bp, tape.concat_cols(zdec, obs));
    core.rec = l1_mean(tape, pred, chunk);
    if (p.hyper.geom_enabled) core.geom = geometry_penalty(tape, core.zq, p.hyper.geom);
    return core;
}

} // namespace

LossResult cwae_loss(BoundParams& bp, PolicyState& p, const Batch& b, Rng& rng) {
    Tape& tape = bp.tape();
    const int64_t B = b.obs.dim(0);
    CwaeCore core = cwae_core(bp, p, b, rng);
    Var zp = tape.constant(normal_tensor({B, p.d_z}, rng));
    Var div;
    float beta;
    if (p.family == Family::MmdCwae) {
        div = imq_mmd_op(tape, core.zq, zp, imq_default_scales(p.d_z));
        beta = p.hyper.beta_mmd;
    } else {
        div = sinkhorn_op(tape, core.zq, zp, p.hyper.sink_blur, p.hyper.sink_tol,
                          p.hyper.sink_max_iters);
        beta = p.hyper.beta_sink;
    }
    Var loss = tape.add(core.rec, tape.scale(div, beta));
    std::map<std::string, double> parts{{"rec", tape.scalar_value(core.rec)},
                                        {"div", tape.scalar_value(div)}};
    if (core.geom.valid()) {
        loss = tape.add(loss, core.geom);
        parts["geom"] = tape.scalar_value(core.geom);
    }
    return {loss, parts};
}

LossResult lat_flow_loss(BoundParams& bp, PolicyState& p, const Batch& b, Rng& rng) {
    Tape& tape = bp.tape();
    CwaeCore core = cwae_core(bp, p, b, rng);
    Var flow = flow_matching_loss(bp, p.flow_net, core.zq, b.obs, rng, p.hyper.time_embed_dim,
                                  p.hyper.flow_time_beta_a);
    Var loss = tape.add(core.rec, tape.scale(flow, p.hyper.beta_flow));
    std::map<std::string, double> parts{{"rec", tape.scalar_value(core.rec)},
                                        {"flow", tape.scalar_value(flow)}};
    if (core.geom.valid()) {
        loss = tape.add(loss, core.geom);
        parts["geom"] = tape.scalar_value(core.geom);
    }
    return {loss, parts};
}

LossResult vq_vae_loss(BoundParams& bp, PolicyState& p, const Batch& b, Rng& rng,
                       RvqEncodeResult* out_enc, Tensor* out_zcont) {
    Tape& tape = bp.tape();
    const int64_t B = b.obs.dim(0);
    Var obs = tape.constant(b.obs);
    Var chunk = tape.constant(b.chunk);
    Var z_cont = p.encoder.forward(bp, tape.concat_cols(chunk, obs));
    const Tensor z_val = tape.value(z_cont);
    if (!p.vq.initialized) rvq_init_from_batch(p.vq, z_val, rng);
    RvqEncodeResult enc = rvq_quantize(p.vq, z_val);

    // straight-through: decoder sees z_q, encoder receives the identity grad
    Tensor delta = enc.z_q;
    for (int64_t i = 0; i < delta.size(); ++i) delta.at(i) -= z_val.at(i);
    Var z_st = tape.add(z_cont, tape.constant(delta));
    Var pred = p.decoder.forward(bp, tape.concat_cols(z_st, obs));
    Var rec = l1_mean(tape, pred, chunk);

    // commitment: residual at layer l is z_cont - sg(cumulative codes before l),
    // so each term is ||z_cont - sg(cum_codes[l])||^2
    Var commit;
    for (int l = 0; l < p.vq.layers; ++l) {
        Var term = tape.reduce_sum_all(
            tape.square(tape.sub(z_cont, tape.constant(enc.cum_codes[size_t(l)]))));
        commit = l == 0 ? term : tape.add(commit, term);
    }
    commit = tape.scale(commit, 1.0f / float(B * p.vq.layers));
    Var loss = tape.add(rec, tape.scale(commit, p.hyper.beta_vq));
    if (out_enc) *out_enc = enc;
    if (out_zcont) *out_zcont = z_val;
    return {loss, {{"rec", tape.scalar_value(rec)}, {"commit", tape.scalar_value(commit)}}};
}

Var flow_matching_loss(BoundParams& bp, const Mlp& net, Var x1, const Tensor& cond, Rng& rng,
                       int temb_dim, float time_beta_a) {
    Tape& tape = bp.tape();
    const Tensor& x1v = tape.value(x1);
    const int64_t B = x1v.dim(0), D = x1v.dim(1);
    std::vector<float> ts(static_cast<size_t>(B));
    // negative `a` flips the skew toward t = 0 (the base-noise end)
    for (auto& t : ts) {
        const double draw = rng.beta_a1(std::fabs(time_beta_a));
        t = float(time_beta_a < 0.0f ? 1.0 - draw : draw);
    }
    Tensor u = normal_tensor({B, D}, rng);
    Tensor t_bcast({B, D});
    Tensor u_part({B, D});
    for (int64_t r = 0; r < B; ++r)
        for (int64_t c = 0; c < D; ++c) {
            t_bcast.at2(r, c) = ts[size_t(r)];
            u_part.at2(r, c) = (1.0f - ts[size_t(r)]) * u.at2(r, c);
        }
    Var xt = tape.add(tape.mul(x1, tape.constant(t_bcast)), tape.constant(u_part));
    Var temb = tape.constant(time_embedding_batch(ts, temb_dim));
    Var in = tape.concat_cols(xt, tape.concat_cols(temb, tape.constant(cond)));
    Var out = net.forward(bp, in);
    Var target = tape.sub(x1, tape.constant(u));
    return tape.reduce_mean_all(tape.square(tape.sub(out, target)));
}

LossResult act_flow_loss(BoundParams& bp, PolicyState& p, const Batch& b, Rng& rng) {
    Var x1 = bp.tape().constant(b.chunk);
    Var loss = flow_matching_loss(bp, p.flow_net, x1, b.obs, rng, p.hyper.time_embed_dim,
                                  p.hyper.flow_time_beta_a);
    return {loss, {{"flow", bp.tape().scalar_value(loss)}}};
}

std::vector<double> ddim_alpha_bar(int train_steps) {
    const int T = train_steps;
    auto f = [&](double t) {
        const double arg = (t / double(T) + 0.008) / 1.008 * M_PI / 2.0;
        const double c = std::cos(arg);
        return c * c;
    };
    std::vector<double> abar(size_t(T) + 1);
    const double f0 = f(0.0);
    abar[0] = 1.0;
    for (int t = 1; t <= T; ++t) {
        double a = f(double(t)) / f0;
        a = std::max(a, abar[size_t(t) - 1] * (1.0 - 0.999)); // per-step beta cap
        abar[size_t(t)] = std::min(a, 1.0);
    }
    return abar;
}

LossResult act_diff_loss(BoundParams& bp, PolicyState& p, const Batch& b, Rng& rng) {
    Tape& tape = bp.tape();
    const int64_t B = b.obs.dim(0), D = p.act_dim;
    const int T = p.hyper.ddim_train_steps;
    static thread_local std::vector<double> abar_cache;
    static thread_local int abar_T = -1;
    if (abar_T != T) {
        abar_cache = ddim_alpha_bar(T);
        abar_T = T;
    }
    std::vector<float> ts(static_cast<size_t>(B));
    Tensor a_t({B, D});
    for (int64_t r = 0; r < B; ++r) {
        const int t = 1 + int(rng.uniform_index(uint64_t(T)));
        ts[size_t(r)] = float(t) / float(T);
        const float sa = float(std::sqrt(abar_cache[size_t(t)]));
        const float sb = float(std::sqrt(1.0 - abar_cache[size_t(t)]));
        for (int64_t c = 0; c < D; ++c)
            a_t.at2(r, c) = sa * b.chunk.at2(r, c) + sb * float(rng.normal());
    }
    Var in = tape.concat_cols(tape.constant(a_t),
                              tape.concat_cols(tape.constant(time_embedding_batch(
                                                   ts, p.hyper.time_embed_dim)),
                                               tape.constant(b.obs)));
    Var out = p.flow_net.forward(bp, in);
    Var loss = tape.reduce_mean_all(tape.square(tape.sub(out, tape.constant(b.chunk))));
    return {loss, {{"diff", tape.scalar_value(loss)}}};
}

LossResult policy_loss(BoundParams& bp, PolicyState& p, const Batch& b, Rng& rng,
                       RvqEncodeResult* out_enc, Tensor* out_zcont) {
    switch (p.family) {
        case Family::BCAT: return bcat_loss(bp, p, b);
        case Family::KlCvae: return kl_cvae_loss(bp, p, b, rng);
        case Family::MmdCwae:
        case Family::SinkhornCwae: return cwae_loss(bp, p, b, rng);
        case Family::VqVae: return vq_vae_loss(bp, p, b, rng, out_enc, out_zcont);
        case Family::LatFlow: return lat_flow_loss(bp, p, b, rng);
        case Family::ActFlow: return act_flow_loss(bp, p, b, rng);
        case Family::ActDiff: return act_diff_loss(bp, p, b, rng);
    }
    throw std::invalid_argument("policy_loss: unknown family");
}

Tensor integrate_flow(const Mlp& net, const ParamStore& ps, const Tensor& x0,
                      const Tensor& cond, int steps, int temb_dim) {
    const int64_t B = x0.dim(0), D = x0.dim(1);
    Tensor x = x0;
    for (int k = 0; k < steps; ++k) {
        const float t = float(k) / float(steps);
        Tensor in({B, D + temb_dim + cond.dim(1)});
        std::vector<float> temb(static_cast<size_t>(temb_dim));
        time_embedding(t, temb_dim, temb.data());
        for (int64_t r = 0; r < B; ++r) {
            float* row = in.data() + r * in.dim(1);
            const float* xr = x.data() + r * D;
            for (int64_t c = 0; c < D; ++c) row[c] = xr[c];
            for (int c = 0; c < temb_dim; ++c) row[D + c] = temb[size_t(c)];
            for (int64_t c = 0; c < cond.dim(1); ++c) row[D + temb_dim + c] = cond.at2(r, c);
        }
        Tensor v = net.forward_plain(ps, in);
        for (int64_t i = 0; i < x.size(); ++i) x.at(i) += v.at(i) / float(steps);
    }
    return x;
}

Tensor ddim_sample(const Mlp& net, const ParamStore& ps, const Tensor& noise,
                   const Tensor& cond, const std::vector<double>& alpha_bar, int steps,
                   bool clip_sample, int temb_dim) {
    const int64_t B = noise.dim(0), D = noise.dim(1);
    const int T = int(alpha_bar.size()) - 1;
    Tensor x = noise;
    // timestep ladder T = t_0 > t_1 > ... > t_steps = 0
    std::vector<int> ladder(size_t(steps) + 1);
    for (int k = 0; k <= steps; ++k)
        ladder[size_t(k)] = int(std::lround(double(T) * (1.0 - double(k) / double(steps))));
    for (int k = 0; k < steps; ++k) {
        const int t = ladder[size_t(k)], tn = ladder[size_t(k) + 1];
        if (t == tn) continue;
        const double ab_t = alpha_bar[size_t(t)], ab_n = alpha_bar[size_t(tn)];
        Tensor in({B, D + temb_dim + cond.dim(1)});
        std::vector<float> temb(static_cast<size_t>(temb_dim));
        time_embedding(float(t) / float(T), temb_dim, temb.data());
        for (int64_t r = 0; r < B; ++r) {
            float* row = in.data() + r * in.dim(1);
            const float* xr = x.data() + r * D;
            for (int64_t c = 0; c < D; ++c) row[c] = xr[c];
            for (int c = 0; c < temb_dim; ++c) row[D + c] = temb[size_t(c)];
            for (int64_t c = 0; c < cond.dim(1); ++c) row[D + temb_dim + c] = cond.at2(r, c);
        }
        Tensor g = net.forward_plain(ps, in);
        if (clip_sample)
            for (int64_t i = 0; i < g.size(); ++i) g.at(i) = std::clamp(g.at(i), -1.0f, 1.0f);
        const float sa_t = float(std::sqrt(ab_t)), sb_t = float(std::sqrt(1.0 - ab_t));
        const float sa_n = float(std::sqrt(ab_n)), sb_n = float(std::sqrt(1.0 - ab_n));
        for (int64_t i = 0; i < x.size(); ++i) {
            const float eps_hat = (x.at(i) - sa_t * g.at(i)) / sb_t;
            x.at(i) = sa_n * g.at(i) + sb_n * eps_hat;
        }
    }
    return x;
}

RvqEncodeResult rvq_quantize(const VqState& vq, const Tensor& z_cont) {
    const int64_t B = z_cont.dim(0), d = z_cont.dim(1);
    RvqEncodeResult res;
    res.z_q = Tensor({B, d});
    res.indices.assign(size_t(vq.layers), std::vector<int>(size_t(B), 0));
    Tensor residual = z_cont;
    for (int l = 0; l < vq.layers; ++l) {
        const Tensor& codes = vq.codes[size_t(l)];
        for (int64_t r = 0; r < B; ++r) {
            double best = 1e300;
            int best_c = 0;
            for (int64_t c = 0; c < vq.codebook_size; ++c) {
                double s = 0.0;
                for (int64_t k = 0; k < d; ++k) {
                    const double diff = double(residual.at2(r, k)) - double(codes.at2(c, k));
                    s += diff * diff;
                }
                if (s < best) {
                    best = s;
                    best_c = int(c);
                }
            }
            res.indices[size_t(l)][size_t(r)] = best_c;
            for (int64_t k = 0; k < d; ++k) {
                const float q = codes.at2(best_c, k);
                res.z_q.at2(r, k) += q;
                residual.at2(r, k) -= q;
            }
        }
        res.cum_codes.push_back(res.z_q);
    }
    return res;
}

void rvq_init_from_batch(VqState& vq, const Tensor& z_cont, Rng& rng) {
    const int64_t B = z_cont.dim(0), d = z_cont.dim(1);
    Tensor residual = z_cont;
    for (int l = 0; l < vq.layers; ++l) {
        Tensor& codes = vq.codes[size_t(l)];
        for (int64_t c = 0; c < vq.codebook_size; ++c) {
            const int64_t r = int64_t(rng.uniform_index(uint64_t(B)));
            for (int64_t k = 0; k < d; ++k) codes.at2(c, k) = residual.at2(r, k);
        }
        // advance residuals through this freshly seeded layer
        for (int64_t r = 0; r < B; ++r) {
            double best = 1e300;
            int best_c = 0;
            for (int64_t c = 0; c < vq.codebook_size; ++c) {
                double s = 0.0;
                for (int64_t k = 0; k < d; ++k) {
                    const double diff = double(residual.at2(r, k)) - double(codes.at2(c, k));
                    s += diff * diff;
                }
                if (s < best) {
                    best = s;
                    best_c = int(c);
                }
            }
            for (int64_t k = 0; k < d; ++k) residual.at2(r, k) -= codes.at2(best_c, k);
        }
    }
    vq.initialized = true;
}

void rvq_ema_update(VqState& vq, const Tensor& z_cont, const RvqEncodeResult& enc, Rng& rng) {
    const int64_t B = z_cont.dim(0), d = z_cont.dim(1);
    const float decay = vq.ema_decay;
    for (int l = 0; l < vq.layers; ++l) {
        // forward-pass residual entering layer l: z_cont - cum_codes[l-1]
        Tensor residual = z_cont;
        if (l > 0) {
            const Tensor& prev = enc.cum_codes[size_t(l) - 1];
            for (int64_t i = 0; i < residual.size(); ++i) residual.at(i) -= prev.at(i);
        }
        Tensor batch_count({vq.codebook_size});
        Tensor batch_sum({vq.codebook_size, int64_t(d)});
        for (int64_t r = 0; r < B; ++r) {
            const int c = enc.indices[size_t(l)][size_t(r)];
            batch_count.at(c) += 1.0f;
            for (int64_t k = 0; k < d; ++k) batch_sum.at2(c, k) += residual.at2(r, k);
        }
        Tensor& counts = vq.ema_count[size_t(l)];
        Tensor& sums = vq.ema_sum[size_t(l)];
        Tensor& codes = vq.codes[size_t(l)];
        for (int64_t c = 0; c < vq.codebook_size; ++c) {
            counts.at(c) = decay * counts.at(c) + (1.0f - decay) * batch_count.at(c);
            for (int64_t k = 0; k < d; ++k)
                sums.at2(c, k) = decay * sums.at2(c, k) + (1.0f - decay) * batch_sum.at2(c, k);
            if (counts.at(c) > 1e-5f)
                for (int64_t k = 0; k < d; ++k) codes.at2(c, k) = sums.at2(c, k) / counts.at(c);
            auto& streak = vq.unused_streak[size_t(l)][size_t(c)];
            if (batch_count.at(c) == 0.0f) {
                if (++streak >= vq.dead_code_batches) {
                    // re-seed a dead code from a random batch latent
                    const int64_t r = int64_t(rng.uniform_index(uint64_t(B)));
                    for (int64_t k = 0; k < d; ++k) codes.at2(c, k) = residual.at2(r, k);
                    counts.at(c) = 1.0f;
                    for (int64_t k = 0; k < d; ++k) sums.at2(c, k) = residual.at2(r, k);
                    streak = 0;
                }
            } else {
                streak = 0;
            }
        }
    }
}

Trajectory denormalize_chunk(const PolicyState& p, const float* row) {
    Trajectory traj(p.H);
    for (int t = 0; t < p.H; ++t) {
        traj.xy[size_t(2 * t)] = p.norm.ix(row[2 * t]);
        traj.xy[size_t(2 * t) + 1] = p.norm.iy(row[2 * t + 1]);
    }
    return traj;
}

namespace {

Tensor obs_rows(const PolicyState& p, Point obs, int64_t n) {
    Tensor t({n, 2});
    for (int64_t r = 0; r < n; ++r) {
        t.at2(r, 0) = p.norm.nx(float(obs.x));
        t.at2(r, 1) = p.norm.ny(float(obs.y));
    }
    return t;
}

Tensor decode_latents(const PolicyState& p, const Tensor& z, const Tensor& obs) {
    const int64_t n = z.dim(0);
    Tensor in({n, z.dim(1) + 2});
    for (int64_t r = 0; r < n; ++r) {
        float* row = in.data() + r * in.dim(1);
        for (int64_t c = 0; c < z.dim(1); ++c) row[c] = z.at2(r, c);
        row[z.dim(1)] = obs.at2(r, 0);
        row[z.dim(1) + 1] = obs.at2(r, 1);
    }
    return p.decoder.forward_plain(p.params, in);
}

std::vector<Trajectory> rows_to_trajs(const PolicyState& p, const Tensor& out) {
    std::vector<Trajectory> trajs;
    trajs.reserve(size_t(out.dim(0)));
    for (int64_t r = 0; r < out.dim(0); ++r)
        trajs.push_back(denormalize_chunk(p, out.data() + r * out.dim(1)));
    return trajs;
}

} // namespace

std::vector<Trajectory> sample_policy(const PolicyState& p, Point obs, Rng& rng, int n) {
    const Tensor obs_t = obs_rows(p, obs, n);
    switch (p.family) {
        case Family::BCAT:
            return rows_to_trajs(p, p.decoder.forward_plain(p.params, obs_t));
        case Family::KlCvae:
        case Family::MmdCwae:
        case Family::SinkhornCwae: {
            Tensor z = normal_tensor({n, p.d_z}, rng);
            return rows_to_trajs(p, decode_latents(p, z, obs_t));
        }
        case Family::LatFlow: {
            Tensor z0 = normal_tensor({n, p.d_z}, rng);
            Tensor z1 = integrate_flow(p.flow_net, p.params, z0, obs_t, p.hyper.flow_steps,
                                       p.hyper.time_embed_dim);
            return rows_to_trajs(p, decode_latents(p, z1, obs_t));
        }
        case Family::VqVae: {
            Tensor z({int64_t(n), int64_t(p.d_z)});
            for (int64_t r = 0; r < n; ++r)
                for (int l = 0; l < p.vq.layers; ++l) {
                    const int64_t c = int64_t(rng.uniform_index(uint64_t(p.vq.codebook_size)));
                    for (int64_t k = 0; k < p.d_z; ++k)
                        z.at2(r, k) += p.vq.codes[size_t(l)].at2(c, k);
                }
            return rows_to_trajs(p, decode_latents(p, z, obs_t));
        }
        case Family::ActFlow:
        case Family::ActDiff: {
            Tensor u = normal_tensor({n, p.act_dim}, rng);
            return decode_noise(p, obs, u);
        }
    }
    throw std::invalid_argument("sample_policy: unknown family");
}

std::vector<Trajectory> decode_noise(const PolicyState& p, Point obs, const Tensor& noise) {
    if (noise.rank() != 2 || noise.dim(1) != p.act_dim)
        throw ShapeError("decode_noise: noise must be [n, 2H]");
    const Tensor obs_t = obs_rows(p, obs, noise.dim(0));
    if (p.family == Family::ActFlow) {
        Tensor x = integrate_flow(p.flow_net, p.params, noise, obs_t, p.hyper.flow_steps,
                                  p.hyper.time_embed_dim);
        return rows_to_trajs(p, x);
    }
    if (p.family == Family::ActDiff) {
        const auto abar = ddim_alpha_bar(p.hyper.ddim_train_steps);
        Tensor x = ddim_sample(p.flow_net, p.params, noise, obs_t, abar,
                               p.hyper.ddim_infer_steps, p.hyper.ddim_clip_sample,
                               p.hyper.time_embed_dim);
        return rows_to_trajs(p, x);
    }
    throw std::invalid_argument("decode_noise: only the action-space families are "
                                "deterministic noise-to-chunk maps");
}

TrainResult train_policy(PolicyState& p, const Dataset& ds, const TrainConfig& cfg) {
    const int epochs = cfg.epochs >= 0
                           ? cfg.epochs
                           : (p.hyper.epochs > 0 ? p.hyper.epochs : default_epochs(p.task_id));
    AdamW opt({p.hyper.lr, p.hyper.weight_decay});
    Rng train_rng = named_stream(cfg.seed, "train");

    TrainResult result;
    auto snapshot = [&](int epoch, double loss) {
        result.checkpoints.push_back({epoch, p.params, p.vq, loss});
    };
    snapshot(0, 0.0);

    std::vector<int> order(ds.demos.size());
    for (size_t i = 0; i < order.size(); ++i) order[i] = int(i);
    const int B = p.hyper.batch_size;

    for (int epoch = 1; epoch <= epochs; ++epoch) {
        // Fisher-Yates shuffle from the train stream
        for (size_t i = order.size(); i > 1; --i) {
            const size_t j = size_t(train_rng.uniform_index(uint64_t(i)));
            std::swap(order[i - 1], order[j]);
        }
        double epoch_loss = 0.0;
        int batches = 0;
        for (size_t off = 0; off < order.size(); off += size_t(B)) {
            const size_t hi = std::min(order.size(), off + size_t(B));
            std::vector<int> idx(order.begin() + long(off), order.begin() + long(hi));
            Batch batch = make_batch(ds, idx);
            Tape tape;
            BoundParams bp(tape, p.params);
            RvqEncodeResult vq_enc;
            Tensor vq_zcont;
            LossResult lr;
            try {
                lr = policy_loss(bp, p, batch, train_rng, &vq_enc, &vq_zcont);
                tape.backward(lr.loss);
            } catch (const NumericsError& e) {
                throw NumericsError("training aborted at epoch " + std::to_string(epoch) +
                                    " batch " + std::to_string(batches) + ": " + e.what());
            }
            opt.step(p.params, bp.collect_grads());
            if (p.family == Family::VqVae) rvq_ema_update(p.vq, vq_zcont, vq_enc, train_rng);
            epoch_loss += tape.scalar_value(lr.loss);
            ++batches;
            result.last_parts = lr.parts;
        }
        epoch_loss /= std::max(1, batches);
        result.loss_trace.push_back(epoch_loss);
        if (epoch % cfg.checkpoint_every == 0 || epoch == epochs) snapshot(epoch, epoch_loss);
    }
    return result;
}

void restore_checkpoint(PolicyState& p, const Checkpoint& ck) {
    p.params = ck.params;
    p.vq = ck.vq;
}

namespace {

json hyper_to_json(const Hyper& h) {
    return json{{"beta_kl", h.beta_kl},
                {"beta_mmd", h.beta_mmd},
                {"beta_sink", h.beta_sink},
                {"sink_blur", h.sink_blur},
                {"geom_enabled", h.geom_enabled},
                {"jitter_enabled", h.jitter_enabled},
                {"sigma_dec", h.sigma_dec},
                {"beta_mean", h.geom.beta_mean},
                {"beta_std", h.geom.beta_std},
                {"beta_max", h.geom.beta_max},
                {"beta_cov", h.geom.beta_cov},
                {"sigma_star", h.geom.sigma_star},
                {"sigma_max", h.geom.sigma_max},
                {"beta_flow", h.beta_flow},
                {"flow_steps", h.flow_steps},
                {"flow_time_beta_a", h.flow_time_beta_a},
                {"ddim_train_steps", h.ddim_train_steps},
                {"ddim_infer_steps", h.ddim_infer_steps},
                {"ddim_clip_sample", h.ddim_clip_sample},
                {"beta_vq", h.beta_vq},
                {"vq_layers", h.vq_layers},
                {"vq_codebook_size", h.vq_codebook_size},
                {"batch_size", h.batch_size},
                {"epochs", h.epochs},
                {"rollout_every", h.rollout_every},
                {"rollouts_per_eval", h.rollouts_per_eval},
                {"lr", h.lr},
                {"weight_decay", h.weight_decay},
                {"time_embed_dim", h.time_embed_dim},
                {"hidden", h.hidden}};
}

Hyper hyper_from_json(const json& j) {
    Hyper h;
    h.beta_kl = j.value("beta_kl", h.beta_kl);
    h.beta_mmd = j.value("beta_mmd", h.beta_mmd);
    h.beta_sink = j.value("beta_sink", h.beta_sink);
    h.sink_blur = j.value("sink_blur", h.sink_blur);
    h.geom_enabled = j.value("geom_enabled", h.geom_enabled);
    h.jitter_enabled = j.value("jitter_enabled", h.jitter_enabled);
    h.sigma_dec = j.value("sigma_dec", h.sigma_dec);
    h.geom.beta_mean = j.value("beta_mean", h.geom.beta_mean);
    h.geom.beta_std = j.value("beta_std", h.geom.beta_std);
    h.geom.beta_max = j.value("beta_max", h.geom.beta_max);
    h.geom.beta_cov = j.value("beta_cov", h.geom.beta_cov);
    h.geom.sigma_star = j.value("sigma_star", h.geom.sigma_star);
    h.geom.sigma_max = j.value("sigma_max", h.geom.sigma_max);
    h.beta_flow = j.value("beta_flow", h.beta_flow);
    h.flow_steps = j.value("flow_steps", h.flow_steps);
    h.flow_time_beta_a = j.value("flow_time_beta_a", h.flow_time_beta_a);
    h.ddim_train_steps = j.value("ddim_train_steps", h.ddim_train_steps);
    h.ddim_infer_steps = j.value("ddim_infer_steps", h.ddim_infer_steps);
    h.ddim_clip_sample = j.value("ddim_clip_sample", h.ddim_clip_sample);
    h.beta_vq = j.value("beta_vq", h.beta_vq);
    h.vq_layers = j.value("vq_layers", h.vq_layers);
    h.vq_codebook_size = j.value("vq_codebook_size", h.vq_codebook_size);
    h.batch_size = j.value("batch_size", h.batch_size);
    h.epochs = j.value("epochs", h.epochs);
    h.rollout_every = j.value("rollout_every", h.rollout_every);
    h.rollouts_per_eval = j.value("rollouts_per_eval", h.rollouts_per_eval);
    h.lr = j.value("lr", h.lr);
    h.weight_decay = j.value("weight_decay", h.weight_decay);
    h.time_embed_dim = j.value("time_embed_dim", h.time_embed_dim);
    h.hidden = j.value("hidden", h.hidden);
    return h;
}

} // namespace

void save_policy(const PolicyState& p, const std::string& path_prefix, int epoch,
                 const std::string& dataset_hash) {
    ParamStore full = p.params;
    if (p.family == Family::VqVae) {
        for (int l = 0; l < p.vq.layers; ++l) {
            const std::string suffix = std::to_string(l);
            full.create("vq.codes" + suffix, p.vq.codes[size_t(l)].shape()) =
                p.vq.codes[size_t(l)];
            full.create("vq.ema_count" + suffix, p.vq.ema_count[size_t(l)].shape()) =
                p.vq.ema_count[size_t(l)];
            full.create("vq.ema_sum" + suffix, p.vq.ema_sum[size_t(l)].shape()) =
                p.vq.ema_sum[size_t(l)];
        }
    }
    save_params(full, path_prefix);

    json manifest{{"family", family_name(p.family)},
                  {"task", task_name(p.task_id)},
                  {"K", p.K},
                  {"H", p.H},
                  {"d_z", p.d_z},
                  {"epoch", epoch},
                  {"dataset_hash", dataset_hash},
                  {"vq_initialized", p.vq.initialized},
                  {"norm", {p.norm.min_x, p.norm.min_y, p.norm.max_x, p.norm.max_y}},
                  {"hyper", hyper_to_json(p.hyper)}};
    std::ofstream mf(path_prefix + ".json");
    if (!mf) throw std::runtime_error("cannot write manifest at " + path_prefix);
    mf << manifest.dump(2) << "\n";
}

PolicyState load_policy(const std::string& path_prefix) {
    std::ifstream mf(path_prefix + ".json");
    if (!mf) throw std::runtime_error("cannot read manifest at " + path_prefix);
    json manifest = json::parse(mf);
    const auto family = parse_family(manifest.at("family").get<std::string>());
    const auto task_id = parse_task(manifest.at("task").get<std::string>());
    if (!family || !task_id) throw std::runtime_error("manifest names unknown family or task");
    const TaskSpec task = build_task(*task_id);
    NormBounds norm;
    const auto& nb = manifest.at("norm");
    norm = {nb[0].get<float>(), nb[1].get<float>(), nb[2].get<float>(), nb[3].get<float>()};
    Hyper hyper = hyper_from_json(manifest.at("hyper"));
    PolicyState p = make_policy(*family, task, norm, hyper, /*seed=*/0);

    ParamStore full;
    load_params(full, path_prefix);
    for (auto& [name, t] : full.all()) {
        if (name.rfind("vq.", 0) == 0) continue;
        p.params.at(name) = t;
    }
    if (p.family == Family::VqVae) {
        for (int l = 0; l < p.vq.layers; ++l) {
            const std::string suffix = std::to_string(l);
            p.vq.codes[size_t(l)] = full.at("vq.codes" + suffix);
            p.vq.ema_count[size_t(l)] = full.at("vq.ema_count" + suffix);
            p.vq.ema_sum[size_t(l)] = full.at("vq.ema_sum" + suffix);
        }
        p.vq.initialized = manifest.value("vq_initialized", false);
    }
    return p;
}

} // namespace mmbc
