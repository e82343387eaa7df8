#include "mmbc/harness.hpp"

#include <nlohmann/json.hpp>

#include <atomic>
#include <chrono>
#include <cstdlib>
#include <fstream>
#include <sstream>
#include <thread>

namespace mmbc {

using json = nlohmann::json;

uint64_t fnv1a64_bytes(const void* data, size_t size) {
    const auto* p = static_cast<const unsigned char*>(data);
    uint64_t h = 0xcbf29ce484222325ULL;
    for (size_t i = 0; i < size; ++i) {
        h ^= p[i];
        h *= 0x100000001b3ULL;
    }
    return h;
}

std::string hash_hex(uint64_t h) {
    char buf[17];
    std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(h));
    return buf;
}

std::string dataset_hash(const Dataset& ds) {
    std::ostringstream os(std::ios::binary);
    write_dataset(ds, os);
    const std::string bytes = os.str();
    return hash_hex(fnv1a64_bytes(bytes.data(), bytes.size()));
}

namespace {

double family_beta(const ExperimentConfig& cfg) {
    switch (cfg.family) {
        case Family::KlCvae: return cfg.hyper.beta_kl;
        case Family::MmdCwae: return cfg.hyper.beta_mmd;
        case Family::SinkhornCwae: return cfg.hyper.beta_sink;
        case Family::LatFlow: return cfg.hyper.beta_flow;
        case Family::VqVae: return cfg.hyper.beta_vq;
        default: return 0.0;
    }
}

void append_doubles(std::string& buf, std::initializer_list<double> vals) {
    for (double v : vals) buf.append(reinterpret_cast<const char*>(&v), sizeof(double));
}

} // namespace

std::string RunRecord::record_hash() const {
    std::string buf;
    for (const auto& ck : checkpoints) {
        append_doubles(buf, {double(ck.epoch), ck.train_loss, ck.metrics.success_rate,
                             ck.metrics.coverage, ck.metrics.mer});
        for (int c : ck.metrics.per_mode_counts) append_doubles(buf, {double(c)});
        if (ck.has_info)
            append_doubles(buf, {ck.info.h_mode, ck.info.b_fano, ck.info.i_mode,
                                 ck.info.i_action, ck.info.k_pt, ck.info.rho_z});
        if (ck.has_valid_mass)
            append_doubles(buf, {ck.valid_mass.posterior_valid, ck.valid_mass.prior_valid,
                                 ck.valid_mass.delta_valid});
    }
    return hash_hex(fnv1a64_bytes(buf.data(), buf.size()));
}

RunRecord run_experiment(const ExperimentConfig& cfg, RunArtifacts* keep) {
    const auto t0 = std::chrono::steady_clock::now();

    RunRecord run;
    run.task = task_name(cfg.task);
    run.family = family_name(cfg.family);
    run.seed = cfg.seed;
    run.beta = family_beta(cfg);
    const std::string config_str = canonical_config_string(cfg);
    run.config_hash = hash_hex(fnv1a64_bytes(config_str.data(), config_str.size()));

    const TaskSpec task = build_task(cfg.task);
    const Dataset ds =
        generate_dataset(task, cfg.n_demos, derive_stream_seed(cfg.seed, "data"), cfg.demo);
    run.data_hash = dataset_hash(ds);
    const double mean_len = ds.mean_expert_length();

    PolicyState policy = make_policy(cfg.family, task, ds.norm, cfg.hyper, cfg.seed);
    TrainConfig tcfg;
    tcfg.epochs = cfg.epochs;
    tcfg.seed = cfg.seed;
    tcfg.checkpoint_every = cfg.hyper.rollout_every;
    TrainResult trained = train_policy(policy, ds, tcfg);

    for (const auto& ck : trained.checkpoints) {
        restore_checkpoint(policy, ck);
        CheckpointReport rep;
        rep.epoch = ck.epoch;
        rep.train_loss = ck.train_loss;

        Rng roll_rng =
            named_stream(cfg.seed, "rollout:" + std::to_string(ck.epoch));
        const auto chunks =
            sample_policy(policy, task.start, roll_rng, cfg.hyper.rollouts_per_eval);
        rep.metrics = compute_metrics(evaluate_batch(chunks, task, mean_len), task.K);

        if (cfg.diag_info && policy.family == Family::KlCvae) {
            rep.info = info_chain(policy, ds, cfg.info_n_mc,
                                  derive_stream_seed(cfg.seed, "diag:" + std::to_string(ck.epoch)));
            rep.has_info = true;
        }
        if (cfg.diag_valid_mass && policy.has_encoder()) {
            rep.valid_mass =
                valid_mass_gap(policy, ds, task, cfg.valid_mass_samples,
                               derive_stream_seed(cfg.seed, "vm:" + std::to_string(ck.epoch)));
            rep.has_valid_mass = true;
        }
        run.checkpoints.push_back(std::move(rep));
    }
    restore_checkpoint(policy, trained.checkpoints.back());

    run.wall_time_sec =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    if (keep) {
        keep->policy = std::move(policy);
        keep->checkpoints = std::move(trained.checkpoints);
        keep->dataset = ds;
        keep->task = task;
    }
    return run;
}

FinalMetrics final_metrics(const RunRecord& run) {
    std::vector<const CheckpointReport*> evals;
    for (const auto& ck : run.checkpoints)
        if (ck.epoch > 0) evals.push_back(&ck);
    if (evals.empty() && !run.checkpoints.empty()) evals.push_back(&run.checkpoints.front());
    FinalMetrics out;
    const size_t use = std::min<size_t>(5, evals.size());
    out.short_history = use < 5;
    out.checkpoints_used = int(use);
    if (use == 0) return out;
    const int K = int(evals.back()->metrics.per_mode_counts.size());
    out.metrics.per_mode_counts.assign(size_t(K), 0);
    for (size_t i = evals.size() - use; i < evals.size(); ++i) {
        out.metrics.success_rate += evals[i]->metrics.success_rate;
        out.metrics.coverage += evals[i]->metrics.coverage;
        out.metrics.mer += evals[i]->metrics.mer;
        for (int k = 0; k < K; ++k)
            out.metrics.per_mode_counts[size_t(k)] += evals[i]->metrics.per_mode_counts[size_t(k)];
    }
    out.metrics.success_rate /= double(use);
    out.metrics.coverage /= double(use);
    out.metrics.mer /= double(use);
    return out;
}

int worker_count() {
    const char* env = std::getenv("MMBC_THREADS");
    if (!env) return 1;
    const int n = std::atoi(env);
    return n > 0 ? n : 1;
}

std::vector<RunRecord> sweep_beta(const SweepConfig& sweep) {
    struct Cell {
        ExperimentConfig cfg;
    };
    std::vector<Cell> cells;
    for (double beta : sweep.betas)
        for (int s = 0; s < sweep.n_seeds; ++s) {
            ExperimentConfig cfg = sweep.base;
            cfg.family = Family::KlCvae;
            cfg.hyper.beta_kl = float(beta);
            cfg.seed = sweep.base.seed + uint64_t(s);
            cfg.diag_info = true;
            cells.push_back({cfg});
        }
    std::vector<RunRecord> records(cells.size());
    std::atomic<size_t> next{0};
    const int workers = std::min<int>(worker_count(), int(cells.size()));
    auto work = [&]() {
        for (;;) {
            const size_t i = next.fetch_add(1);
            if (i >= cells.size()) return;
            records[i] = run_experiment(cells[i].cfg);
        }
    };
    if (workers <= 1) {
        work();
    } else {
        std::vector<std::thread> pool;
        for (int w = 0; w < workers; ++w) pool.emplace_back(work);
        for (auto& t : pool) t.join();
    }
    return records;
}

namespace {

json metrics_to_json(const ModeMetrics& m) {
    return json{{"sr", m.success_rate},
                {"cov", m.coverage},
                {"mer", m.mer},
                {"per_mode_counts", m.per_mode_counts}};
}

ModeMetrics metrics_from_json(const json& j) {
    ModeMetrics m;
    m.success_rate = j.at("sr").get<double>();
    m.coverage = j.at("cov").get<double>();
    m.mer = j.at("mer").get<double>();
    m.per_mode_counts = j.at("per_mode_counts").get<std::vector<int>>();
    return m;
}

} // namespace

void write_run_record(const RunRecord& run, const std::string& path) {
    json j{{"config_hash", run.config_hash}, {"data_hash", run.data_hash},
           {"task", run.task},               {"family", run.family},
           {"seed", run.seed},               {"beta", run.beta},
           {"wall_time_sec", run.wall_time_sec}};
    j["checkpoints"] = json::array();
    for (const auto& ck : run.checkpoints) {
        json cj{{"epoch", ck.epoch},
                {"train_loss", ck.train_loss},
                {"metrics", metrics_to_json(ck.metrics)}};
        if (ck.has_info)
            cj["info"] = json{{"h_mode", ck.info.h_mode},     {"b_fano", ck.info.b_fano},
                              {"i_mode", ck.info.i_mode},     {"i_action", ck.info.i_action},
                              {"k_pt", ck.info.k_pt},         {"rho_z", ck.info.rho_z},
                              {"n_samples", ck.info.n_samples}};
        if (ck.has_valid_mass)
            cj["valid_mass"] = json{{"posterior_valid", ck.valid_mass.posterior_valid},
                                    {"prior_valid", ck.valid_mass.prior_valid},
                                    {"delta_valid", ck.valid_mass.delta_valid}};
        j["checkpoints"].push_back(std::move(cj));
    }
    j["record_hash"] = run.record_hash();
    std::ofstream os(path);
    if (!os) throw std::runtime_error("cannot write run record: " + path);
    os << j.dump(2) << "\n";
}

RunRecord read_run_record(const std::string& path) {
    std::ifstream is(path);
    if (!is) throw std::runtime_error("cannot read run record: " + path);
    const json j = json::parse(is);
    RunRecord run;
    run.config_hash = j.at("config_hash").get<std::string>();
    run.data_hash = j.at("data_hash").get<std::string>();
    run.task = j.at("task").get<std::string>();
    run.family = j.at("family").get<std::string>();
    run.seed = j.at("seed").get<uint64_t>();
    run.beta = j.at("beta").get<double>();
    run.wall_time_sec = j.at("wall_time_sec").get<double>();
    for (const auto& cj : j.at("checkpoints")) {
        CheckpointReport ck;
        ck.epoch = cj.at("epoch").get<int>();
        ck.train_loss = cj.at("train_loss").get<double>();
        ck.metrics = metrics_from_json(cj.at("metrics"));
        if (cj.contains("info")) {
            const auto& ij = cj.at("info");
            ck.has_info = true;
            ck.info.h_mode = ij.at("h_mode").get<double>();
            ck.info.b_fano = ij.at("b_fano").get<double>();
            ck.info.i_mode = ij.at("i_mode").get<double>();
            ck.info.i_action = ij.at("i_action").get<double>();
            ck.info.k_pt = ij.at("k_pt").get<double>();
            ck.info.rho_z = ij.at("rho_z").get<double>();
            ck.info.n_samples = ij.at("n_samples").get<int>();
        }
        if (cj.contains("valid_mass")) {
            const auto& vj = cj.at("valid_mass");
            ck.has_valid_mass = true;
            ck.valid_mass.posterior_valid = vj.at("posterior_valid").get<double>();
            ck.valid_mass.prior_valid = vj.at("prior_valid").get<double>();
            ck.valid_mass.delta_valid = vj.at("delta_valid").get<double>();
        }
        run.checkpoints.push_back(std::move(ck));
    }
    return run;
}

void write_metrics_csv(const RunRecord& run, const std::string& path) {
    std::ofstream os(path);
    if (!os) throw std::runtime_error("cannot write metrics csv: " + path);
    os << "checkpoint_epoch,sr,cov,mer";
    const int K = run.checkpoints.empty()
                      ? 0
                      : int(run.checkpoints.front().metrics.per_mode_counts.size());
    for (int k = 1; k <= K; ++k) os << ",mode" << k;
    os << "\n";
    os.precision(10);
    for (const auto& ck : run.checkpoints) {
        os << ck.epoch << "," << ck.metrics.success_rate << "," << ck.metrics.coverage << ","
           << ck.metrics.mer;
        for (int c : ck.metrics.per_mode_counts) os << "," << c;
        os << "\n";
    }
}

void write_info_csv(const std::vector<RunRecord>& runs, const std::string& path) {
    std::ofstream os(path);
    if (!os) throw std::runtime_error("cannot write info csv: " + path);
    os << "task,beta,seed,checkpoint_epoch,sr,cov,mer,h_mode,b_fano,i_mode,i_action,k_pt,"
          "rho_z,posterior_valid,prior_valid,delta_valid\n";
    os.precision(10);
    for (const auto& run : runs)
        for (const auto& ck : run.checkpoints) {
            os << run.task << "," << run.beta << "," << run.seed << "," << ck.epoch << ","
               << ck.metrics.success_rate << "," << ck.metrics.coverage << "," << ck.metrics.mer;
            if (ck.has_info)
                os << "," << ck.info.h_mode << "," << ck.info.b_fano << "," << ck.info.i_mode
                   << "," << ck.info.i_action << "," << ck.info.k_pt << "," << ck.info.rho_z;
            else
                os << ",,,,,,";
            if (ck.has_valid_mass)
                os << "," << ck.valid_mass.posterior_valid << "," << ck.valid_mass.prior_valid
                   << "," << ck.valid_mass.delta_valid;
            else
                os << ",,,";
            os << "\n";
        }
}

void write_bridge_csv(const std::string& task, const std::string& sampler,
                      const BridgeCollection& col, const std::string& path) {
    std::ofstream os(path);
    if (!os) throw std::runtime_error("cannot write bridge csv: " + path);
    os << "task,sampler,mode_i,mode_j,w,s_seg,delta_ij,ratio,bridge_fraction,"
          "transition_found\n";
    os.precision(10);
    for (const auto& p : col.paths) {
        const double ratio =
            (p.transition_found && p.delta > 0.0) ? p.s_seg / (p.delta / p.w) : 0.0;
        os << task << "," << sampler << "," << p.mode_i << "," << p.mode_j << "," << p.w << ","
           << p.s_seg << "," << p.delta << "," << ratio << "," << p.bridge_fraction << ","
           << (p.transition_found ? 1 : 0) << "\n";
    }
}

} // namespace mmbc
