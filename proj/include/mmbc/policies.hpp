#pragma once

#include "mmbc/divergences.hpp"
#include "mmbc/modemetrics.hpp"
#include "mmbc/nn.hpp"
#include "mmbc/tasklab.hpp"

#include <map>
#include <optional>
#include <string>
#include <vector>

namespace mmbc {

enum class Family {
    BCAT = 0,
    KlCvae,
    MmdCwae,
    SinkhornCwae,
    VqVae,
    LatFlow,
    ActFlow,
    ActDiff,
};

const char* family_name(Family f);
std::optional<Family> parse_family(const std::string& name);

struct Hyper {
    // latent regularization weights
    float beta_kl = 0.01f;
    float beta_mmd = 1.0f;
    float beta_sink = 0.01f;
    float sink_blur = 0.1f;
    int sink_max_iters = 500;
    float sink_tol = 1e-6f;

    // posterior geometry regularizer + decoder jitter (aggregate-matched and
    // latent-flow families)
    bool geom_enabled = true;
    bool jitter_enabled = true;
    float sigma_dec = 0.075f;
    GeomRegConfig geom;

    // flow matching
    float beta_flow = 0.01f;
    int flow_steps = 10;
    float flow_time_beta_a = 1.5f; // training times t ~ Beta(1.5, 1)

    // DDIM
    int ddim_train_steps = 100;
    int ddim_infer_steps = 100;
    bool ddim_clip_sample = true;

    // residual VQ
    float beta_vq = 0.25f;
    int vq_layers = 2;
    int vq_codebook_size = 0; // 0 -> task mode count K
    float vq_ema_decay = 0.99f;
    int vq_dead_code_batches = 100;

    // training
    int batch_size = 256;
    int epochs = 0; // 0 -> task default (600 on Circle, 1000 elsewhere)
    int rollout_every = 100;
    int rollouts_per_eval = 200;
    float lr = 5e-4f;
    float weight_decay = 0.02f;
    int time_embed_dim = 32;
    int hidden = 256;
};

int default_epochs(TaskId id);
int default_latent_dim(TaskId id); // Circle 1, Sequential 2, Radial 4, Corridor 4

// Minibatch in normalized coordinates.
struct Batch {
    Tensor obs;   // [B, 2]
    Tensor chunk; // [B, 2H]
};

struct VqState {
    int layers = 0;
    int codebook_size = 0;
    int d_z = 0;
    float ema_decay = 0.99f;
    int dead_code_batches = 100;
    bool initialized = false;
    std::vector<Tensor> codes;     // [L] x [C, d]
    std::vector<Tensor> ema_count; // [L] x [C]
    std::vector<Tensor> ema_sum;   // [L] x [C, d]
    std::vector<std::vector<int>> unused_streak;
};

struct PolicyState {
    Family family = Family::BCAT;
    TaskId task_id = TaskId::Circle;
    int K = 0;
    int H = 60;
    int act_dim = 120;
    int d_z = 0;
    Hyper hyper;
    NormBounds norm;

    ParamStore params;
    Mlp decoder;  // f_theta
    Mlp encoder;  // e_phi / (mu, logvar) head
    Mlp flow_net; // velocity / denoiser network
    VqState vq;

    bool has_encoder() const;
    bool has_flow_net() const;
};

PolicyState make_policy(Family family, const TaskSpec& task, const NormBounds& norm,
                        const Hyper& hyper, uint64_t seed);

Batch make_batch(const Dataset& ds, const std::vector<int>& indices);

// --- residual vector quantization state produced during the forward pass ---
struct RvqEncodeResult {
    Tensor z_q;                            // [B, d] sum of per-layer codes
    std::vector<std::vector<int>> indices; // [L][B]
    std::vector<Tensor> cum_codes;         // cumulative code sums per layer [B, d]
};

struct LossResult {
    Var loss;
    std::map<std::string, double> parts;
};

// --- per-family training objectives (differentiable) ---
// The optional out-parameters of vq_vae_loss expose the quantization result
// so the training loop can apply the EMA codebook update after the step.
LossResult bcat_loss(BoundParams& bp, PolicyState& p, const Batch& b);
LossResult kl_cvae_loss(BoundParams& bp, PolicyState& p, const Batch& b, Rng& rng);
LossResult cwae_loss(BoundParams& bp, PolicyState& p, const Batch& b, Rng& rng);
LossResult lat_flow_loss(BoundParams& bp, PolicyState& p, const Batch& b, Rng& rng);
LossResult vq_vae_loss(BoundParams& bp, PolicyState& p, const Batch& b, Rng& rng,
                       RvqEncodeResult* out_enc = nullptr, Tensor* out_zcont = nullptr);
LossResult act_flow_loss(BoundParams& bp, PolicyState& p, const Batch& b, Rng& rng);
LossResult act_diff_loss(BoundParams& bp, PolicyState& p, const Batch& b, Rng& rng);
LossResult policy_loss(BoundParams& bp, PolicyState& p, const Batch& b, Rng& rng,
                       RvqEncodeResult* out_enc = nullptr, Tensor* out_zcont = nullptr);

// Conditional flow-matching loss on a data batch (latent or action space):
// x_t = (1-t) u + t x1, target velocity x1 - u, t ~ Beta(a, 1).
Var flow_matching_loss(BoundParams& bp, const Mlp& net, Var x1, const Tensor& cond,
                       Rng& rng, int temb_dim, float time_beta_a);

// Euler integration of the learned velocity field from x0 over `steps`.
Tensor integrate_flow(const Mlp& net, const ParamStore& ps, const Tensor& x0,
                      const Tensor& cond, int steps, int temb_dim);

// Squared-cosine capped cumulative schedule; alpha_bar[0] = 1.
std::vector<double> ddim_alpha_bar(int train_steps);

// Deterministic DDIM sampling from initial noise.
Tensor ddim_sample(const Mlp& net, const ParamStore& ps, const Tensor& noise,
                   const Tensor& cond, const std::vector<double>& alpha_bar, int steps,
                   bool clip_sample, int temb_dim);

// --- residual vector quantization ---
RvqEncodeResult rvq_quantize(const VqState& vq, const Tensor& z_cont);
void rvq_init_from_batch(VqState& vq, const Tensor& z_cont, Rng& rng);
void rvq_ema_update(VqState& vq, const Tensor& z_cont, const RvqEncodeResult& enc, Rng& rng);

// --- sampling / deployment ---

// Draw n chunks from the deployed policy at observation `obs` (raw [0,1]^2
// coordinates); output chunks are de-normalized.
std::vector<Trajectory> sample_policy(const PolicyState& p, Point obs, Rng& rng, int n);

// Deterministic base-noise decode for the action-space families (the
// push-forward sampler G_{theta,s}); `noise` is [n, 2H].
std::vector<Trajectory> decode_noise(const PolicyState& p, Point obs, const Tensor& noise);

Trajectory denormalize_chunk(const PolicyState& p, const float* row);

struct Checkpoint {
    int epoch = 0;
    ParamStore params;
    VqState vq;
    double train_loss = 0.0;
};

struct TrainConfig {
    int epochs = -1; // -1 -> task default
    uint64_t seed = 0;
    int checkpoint_every = 100;
};

struct TrainResult {
    std::vector<Checkpoint> checkpoints;
    std::vector<double> loss_trace; // per-epoch mean loss
    std::map<std::string, double> last_parts;
};

TrainResult train_policy(PolicyState& p, const Dataset& ds, const TrainConfig& cfg);

// Restore checkpoint weights into the policy.
void restore_checkpoint(PolicyState& p, const Checkpoint& ck);

// Policy + manifest serialization (gradcore blob + JSON sidecar).
void save_policy(const PolicyState& p, const std::string& path_prefix, int epoch,
                 const std::string& dataset_hash);
PolicyState load_policy(const std::string& path_prefix);

} // namespace mmbc
