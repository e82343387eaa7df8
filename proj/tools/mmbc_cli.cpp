// Command-line entry point: dataset generation, training, rollouts and the
// diagnostic suites, all driven by a config file plus flag overrides.
#include "mmbc/ambiguity.hpp"
#include "mmbc/harness.hpp"

#include <CLI11.hpp>

#include <filesystem>
#include <fstream>
#include <iostream>

namespace fs = std::filesystem;
using namespace mmbc;

namespace {

struct CommonOpts {
    std::string config_path;
    std::vector<std::string> overrides; // key=value pairs
};

ExperimentConfig load_config(const CommonOpts& opts) {
    std::map<std::string, std::string> kv;
    if (!opts.config_path.empty()) kv = parse_config_file(opts.config_path);
    for (const auto& ov : opts.overrides) {
        const size_t eq = ov.find('=');
        if (eq == std::string::npos)
            throw ConfigError("override must be key=value, got: " + ov);
        kv[ov.substr(0, eq)] = ov.substr(eq + 1);
    }
    return config_from_map(kv);
}

void add_common(CLI::App* cmd, CommonOpts& opts) {
    cmd->add_option("--config", opts.config_path, "config file (key = value lines)");
    cmd->add_option("--set", opts.overrides, "config override key=value (repeatable)");
}

int cmd_gen_data(const std::string& task_name_in, int n, uint64_t seed, double start_jitter,
                 const std::string& out, const std::string& csv) {
    const auto task_id = parse_task(task_name_in);
    if (!task_id) throw ConfigError("unknown task: " + task_name_in);
    const TaskSpec task = build_task(*task_id);
    DemoConfig demo;
    demo.start_jitter = start_jitter;
    const Dataset ds = generate_dataset(task, n, seed, demo);
    write_dataset(ds, out);
    if (!csv.empty()) export_dataset_csv(ds, csv);
    std::cout << "wrote " << ds.demos.size() << " demos to " << out
              << " hash=" << dataset_hash(ds) << "\n";
    return 0;
}

int cmd_train(const ExperimentConfig& cfg) {
    fs::create_directories(cfg.out_dir);
    RunArtifacts art;
    const RunRecord run = run_experiment(cfg, &art);
    const std::string stem = cfg.out_dir + "/" + run.family + "_" + run.task + "_s" +
                             std::to_string(cfg.seed);
    write_dataset(art.dataset, stem + ".mmbc");
    save_policy(art.policy, stem, art.checkpoints.back().epoch, run.data_hash);
    write_run_record(run, stem + ".run.json");
    write_metrics_csv(run, stem + ".metrics.csv");
    const FinalMetrics fm = final_metrics(run);
    std::cout << "final sr=" << fm.metrics.success_rate << " cov=" << fm.metrics.coverage
              << " mer=" << fm.metrics.mer << " (over " << fm.checkpoints_used
              << " checkpoints) record=" << run.record_hash() << "\n";
    return 0;
}

int cmd_rollout(const std::string& policy_prefix, int n, uint64_t seed, const std::string& out) {
    PolicyState policy = load_policy(policy_prefix);
    const TaskSpec task = build_task(policy.task_id);
    // expert length baseline comes from the frozen templates
    double mean_len = 0.0;
    for (const auto& t : task.templates) mean_len += polyline_length(t);
    mean_len /= double(task.K);
    Rng rng = named_stream(seed, "rollout");
    const auto chunks = sample_policy(policy, task.start, rng, n);
    const RolloutBatch batch = evaluate_batch(chunks, task, mean_len);
    const ModeMetrics m = compute_metrics(batch, task.K);
    if (!out.empty()) {
        std::ofstream os(out);
        os << "rollout,success,mode\n";
        for (size_t i = 0; i < batch.chunks.size(); ++i)
            os << i << "," << (batch.success_flags[i] ? 1 : 0) << ","
               << (batch.labels[i] ? *batch.labels[i] : 0) << "\n";
    }
    std::cout << "sr=" << m.success_rate << " cov=" << m.coverage << " mer=" << m.mer << "\n";
    return 0;
}

int cmd_diag_info(const std::string& policy_prefix, const std::string& data_path, uint64_t seed,
                  int n_mc) {
    PolicyState policy = load_policy(policy_prefix);
    const Dataset ds = read_dataset(data_path);
    const InfoChain chain = info_chain(policy, ds, n_mc, seed);
    std::cout << "h_mode=" << chain.h_mode << " b_fano=" << chain.b_fano
              << " i_mode=" << chain.i_mode << " i_action=" << chain.i_action
              << " k_pt=" << chain.k_pt << " rho_z=" << chain.rho_z << "\n";
    return 0;
}

int cmd_diag_bridge(const std::string& policy_prefix, uint64_t seed, int n_noise, int n_pairs,
                    int n_interp, const std::string& out) {
    PolicyState policy = load_policy(policy_prefix);
    const TaskSpec task = build_task(policy.task_id);
    double mean_len = 0.0;
    for (const auto& t : task.templates) mean_len += polyline_length(t);
    mean_len /= double(task.K);
    const auto decoder = policy_noise_decoder(policy, task.start);
    const BridgeCollection col = collect_bridge_paths(decoder, task, mean_len, policy.act_dim,
                                                      n_noise, n_pairs, n_interp, seed);
    if (!out.empty()) write_bridge_csv(task_name(task.task_id), family_name(policy.family), col, out);
    double mean_bf = 0.0;
    int found = 0;
    bool bound_ok = true;
    for (const auto& p : col.paths) {
        mean_bf += p.bridge_fraction;
        if (p.transition_found) {
            ++found;
            if (p.delta > 0.0 && p.s_seg * p.w < p.delta - 1e-6) bound_ok = false;
        }
    }
    if (!col.paths.empty()) mean_bf /= double(col.paths.size());
    std::cout << "valid_base=" << col.n_valid_base << "/" << col.n_noise
              << " paths=" << col.paths.size() << " transitions=" << found
              << " mean_bridge_fraction=" << mean_bf << " bound_ok=" << (bound_ok ? 1 : 0)
              << "\n";
    return bound_ok ? 0 : 1;
}

int cmd_diag_ambiguity(const std::string& data_path, const std::string& csv_path, int horizon,
                       int k, int n_queries, uint64_t seed, const std::vector<double>& radii,
                       const std::string& out) {
    EpisodeDataset ep;
    if (!data_path.empty())
        ep = episodes_from_dataset(read_dataset(data_path));
    else if (!csv_path.empty())
        ep = read_episode_csv(csv_path);
    else
        throw ConfigError("diag-ambiguity needs --data or --episodes-csv");
    AmbiguityConfig cfg;
    cfg.horizon = horizon;
    cfg.k = k;
    cfg.n_queries = n_queries;
    cfg.seed = seed;
    cfg.radii = radii;

    std::ofstream os;
    if (!out.empty()) {
        os.open(out);
        os << "variant,radius,median,p90,random_median,coverage,n_queries\n";
        os.precision(10);
    }
    const AmbiguityReport knn = ambiguity_knn(ep, cfg);
    std::cout << "knn median=" << knn.median_ratio << " p90=" << knn.p90_ratio
              << " random_median=" << knn.random_baseline_median << "\n";
    if (os.is_open())
        os << "knn,," << knn.median_ratio << "," << knn.p90_ratio << ","
           << knn.random_baseline_median << ",1," << knn.n_queries_used << "\n";
    if (!radii.empty()) {
        for (const auto& rep : ambiguity_radius(ep, cfg)) {
            std::cout << "radius=" << rep.radius << " coverage=" << rep.coverage
                      << " median=" << rep.median_ratio << " p90=" << rep.p90_ratio << "\n";
            if (os.is_open())
                os << "radius," << rep.radius << "," << rep.median_ratio << "," << rep.p90_ratio
                   << ",," << rep.coverage << "," << rep.n_queries_used << "\n";
        }
    }
    return 0;
}

int cmd_sweep_beta(const ExperimentConfig& base, const std::vector<double>& betas, int n_seeds,
                   const std::string& out_dir) {
    fs::create_directories(out_dir);
    SweepConfig sweep;
    sweep.base = base;
    if (!betas.empty()) sweep.betas = betas;
    sweep.n_seeds = n_seeds;
    const auto records = sweep_beta(sweep);
    for (const auto& run : records) {
        const std::string stem = out_dir + "/sweep_" + run.task + "_b" +
                                 std::to_string(run.beta) + "_s" + std::to_string(run.seed);
        write_run_record(run, stem + ".run.json");
    }
    write_info_csv(records, out_dir + "/sweep_info.csv");
    std::cout << "sweep cells=" << records.size() << " -> " << out_dir << "/sweep_info.csv\n";
    return 0;
}

int cmd_oracle_prop2() {
    // closed-form oracle over a grid of piecewise-linear generators
    int cells = 0, violations = 0;
    for (double tau : {0.01, 0.02, 0.05, 0.1, 0.2}) {
        for (double L : {0.5, 1.0, 2.0, 4.0}) {
            for (double gap : {0.5, 1.0, 2.0}) {
                // staircase generator climbing at slope L between flat treads
                const double width = 0.2;
                const int n_modes = 8;
                PiecewiseLinear gen;
                std::vector<Interval> modes;
                double x = -6.0, y = 0.0;
                gen.xs.push_back(x);
                gen.ys.push_back(y);
                for (int m = 0; m < n_modes; ++m) {
                    modes.push_back({y - width / 2, y + width / 2});
                    x += 0.8; // tread
                    gen.xs.push_back(x);
                    gen.ys.push_back(y);
                    const double rise = gap + width;
                    x += rise / L;
                    y += rise;
                    gen.xs.push_back(x);
                    gen.ys.push_back(y);
                }
                const int count = count_tau_modes_exact(gen, modes, tau);
                const int bound = prop2_bound(tau, gen.lipschitz(), gap);
                ++cells;
                if (count > bound) ++violations;
            }
        }
    }
    std::cout << "cells=" << cells << " violations=" << violations << "\n";
    return violations == 0 ? 0 : 1;
}

int cmd_report(const std::string& dir, const std::string& out) {
    std::vector<RunRecord> runs;
    for (const auto& entry : fs::directory_iterator(dir)) {
        const std::string name = entry.path().filename().string();
        if (name.size() > 9 && name.substr(name.size() - 9) == ".run.json")
            runs.push_back(read_run_record(entry.path().string()));
    }
    std::ofstream os(out);
    if (!os) throw std::runtime_error("cannot write report: " + out);
    os << "task,family,beta,seed,final_sr,final_cov,final_mer,checkpoints,wall_time_sec\n";
    os.precision(10);
    for (const auto& run : runs) {
        const FinalMetrics fm = final_metrics(run);
        os << run.task << "," << run.family << "," << run.beta << "," << run.seed << ","
           << fm.metrics.success_rate << "," << fm.metrics.coverage << "," << fm.metrics.mer
           << "," << fm.checkpoints_used << "," << run.wall_time_sec << "\n";
    }
    std::cout << "aggregated " << runs.size() << " runs -> " << out << "\n";
    return 0;
}

} // namespace

int main(int argc, char** argv) {
    CLI::App app{"mmbc: multimodal behavioral-cloning benchmark lab"};
    app.require_subcommand(1);

    // gen-data
    auto* gen = app.add_subcommand("gen-data", "generate a demonstration dataset");
    std::string gen_task = "circle", gen_out = "dataset.mmbc", gen_csv;
    int gen_n = 1000;
    uint64_t gen_seed = 0;
    double gen_jitter = 0.0;
    gen->add_option("--task", gen_task)->required();
    gen->add_option("--n", gen_n);
    gen->add_option("--seed", gen_seed)->required();
    gen->add_option("--start-jitter", gen_jitter);
    gen->add_option("--out", gen_out);
    gen->add_option("--csv", gen_csv, "also export a CSV copy");

    // train
    auto* train = app.add_subcommand("train", "train a policy and evaluate checkpoints");
    CommonOpts train_common;
    add_common(train, train_common);
    std::string train_task, train_family;
    int train_epochs = -2;
    uint64_t train_seed = 0;
    bool train_seed_set = false;
    double train_beta = -1.0;
    train->add_option("--task", train_task);
    train->add_option("--family", train_family);
    train->add_option("--epochs", train_epochs);
    train->add_option("--beta", train_beta, "override the family regularization weight");
    train->add_option("--seed", train_seed)->required()->each([&](const std::string&) {
        train_seed_set = true;
    });
    std::string train_out;
    train->add_option("--out", train_out);

    // rollout
    auto* roll = app.add_subcommand("rollout", "sample a trained policy and score it");
    std::string roll_policy, roll_out;
    int roll_n = 200;
    uint64_t roll_seed = 0;
    roll->add_option("--policy", roll_policy)->required();
    roll->add_option("--n", roll_n);
    roll->add_option("--seed", roll_seed)->required();
    roll->add_option("--out", roll_out);

    // diag-info
    auto* dinfo = app.add_subcommand("diag-info", "information-chain diagnostics (KL-CVAE)");
    std::string dinfo_policy, dinfo_data;
    uint64_t dinfo_seed = 0;
    int dinfo_mc = 8;
    dinfo->add_option("--policy", dinfo_policy)->required();
    dinfo->add_option("--data", dinfo_data)->required();
    dinfo->add_option("--seed", dinfo_seed)->required();
    dinfo->add_option("--n-mc", dinfo_mc);

    // diag-bridge
    auto* dbridge = app.add_subcommand("diag-bridge", "bridge and sensitivity diagnostics");
    std::string dbridge_policy, dbridge_out;
    uint64_t dbridge_seed = 0;
    int dbridge_noise = 4096, dbridge_pairs = 100, dbridge_interp = 51;
    dbridge->add_option("--policy", dbridge_policy)->required();
    dbridge->add_option("--seed", dbridge_seed)->required();
    dbridge->add_option("--n-noise", dbridge_noise);
    dbridge->add_option("--n-pairs", dbridge_pairs);
    dbridge->add_option("--n-interp", dbridge_interp);
    dbridge->add_option("--out", dbridge_out);

    // diag-ambiguity
    auto* damb = app.add_subcommand("diag-ambiguity", "conditional action-ambiguity diagnostics");
    std::string damb_data, damb_csv, damb_out;
    int damb_h = 10, damb_k = 25, damb_q = 10000;
    uint64_t damb_seed = 0;
    std::vector<double> damb_radii;
    damb->add_option("--data", damb_data, "MMBC dataset file");
    damb->add_option("--episodes-csv", damb_csv, "generic episode CSV");
    damb->add_option("--horizon", damb_h);
    damb->add_option("--k", damb_k);
    damb->add_option("--n-queries", damb_q);
    damb->add_option("--seed", damb_seed)->required();
    damb->add_option("--radius", damb_radii, "radius-controlled variant (repeatable)");
    damb->add_option("--out", damb_out);

    // sweep-beta
    auto* sweep = app.add_subcommand("sweep-beta", "KL-CVAE beta sweep with diagnostics");
    CommonOpts sweep_common;
    add_common(sweep, sweep_common);
    std::string sweep_task = "sequential", sweep_out = "sweep_out";
    uint64_t sweep_seed = 0;
    std::vector<double> sweep_betas;
    int sweep_seeds = 3;
    sweep->add_option("--task", sweep_task);
    sweep->add_option("--seed", sweep_seed)->required();
    sweep->add_option("--betas", sweep_betas);
    sweep->add_option("--seeds", sweep_seeds);
    sweep->add_option("--out", sweep_out);

    // oracle-prop2
    app.add_subcommand("oracle-prop2", "closed-form tau-represented mode-count oracle");

    // report
    auto* report = app.add_subcommand("report", "aggregate run records into a summary CSV");
    std::string report_dir = ".", report_out = "summary.csv";
    report->add_option("--dir", report_dir);
    report->add_option("--out", report_out);

    CLI11_PARSE(app, argc, argv);

    try {
        if (gen->parsed())
            return cmd_gen_data(gen_task, gen_n, gen_seed, gen_jitter, gen_out, gen_csv);
        if (train->parsed()) {
            ExperimentConfig cfg = load_config(train_common);
            if (!train_task.empty()) {
                const auto t = parse_task(train_task);
                if (!t) throw ConfigError("unknown task: " + train_task);
                cfg.task = *t;
            }
            if (!train_family.empty()) {
                const auto f = parse_family(train_family);
                if (!f) throw ConfigError("unknown family: " + train_family);
                cfg.family = *f;
            }
            if (train_epochs != -2) cfg.epochs = train_epochs;
            cfg.seed = train_seed;
            if (!train_out.empty()) cfg.out_dir = train_out;
            if (train_beta >= 0.0) {
                switch (cfg.family) {
                    case Family::KlCvae: cfg.hyper.beta_kl = float(train_beta); break;
                    case Family::MmdCwae: cfg.hyper.beta_mmd = float(train_beta); break;
                    case Family::SinkhornCwae: cfg.hyper.beta_sink = float(train_beta); break;
                    case Family::LatFlow: cfg.hyper.beta_flow = float(train_beta); break;
                    case Family::VqVae: cfg.hyper.beta_vq = float(train_beta); break;
                    default:
                        throw ConfigError("--beta has no meaning for family " +
                                          std::string(family_name(cfg.family)));
                }
            }
            return cmd_train(cfg);
        }
        if (roll->parsed()) return cmd_rollout(roll_policy, roll_n, roll_seed, roll_out);
        if (dinfo->parsed()) return cmd_diag_info(dinfo_policy, dinfo_data, dinfo_seed, dinfo_mc);
        if (dbridge->parsed())
            return cmd_diag_bridge(dbridge_policy, dbridge_seed, dbridge_noise, dbridge_pairs,
                                   dbridge_interp, dbridge_out);
        if (damb->parsed())
            return cmd_diag_ambiguity(damb_data, damb_csv, damb_h, damb_k, damb_q, damb_seed,
                                      damb_radii, damb_out);
        if (sweep->parsed()) {
            ExperimentConfig base = load_config(sweep_common);
            const auto t = parse_task(sweep_task);
            if (!t) throw ConfigError("unknown task: " + sweep_task);
            base.task = *t;
            base.seed = sweep_seed;
            return cmd_sweep_beta(base, sweep_betas, sweep_seeds, sweep_out);
        }
        if (app.get_subcommand("oracle-prop2")->parsed()) return cmd_oracle_prop2();
        if (report->parsed()) return cmd_report(report_dir, report_out);
    } catch (const ConfigError& e) {
        std::cerr << "error kind=config msg=\"" << e.what() << "\"\n";
        return 2;
    } catch (const DatasetIoError& e) {
        std::cerr << "error kind=dataset-io msg=\"" << e.what() << "\"\n";
        return 3;
    } catch (const NumericsError& e) {
        std::cerr << "error kind=numerics msg=\"" << e.what() << "\"\n";
        return 4;
    } catch (const std::exception& e) {
        std::cerr << "error kind=runtime msg=\"" << e.what() << "\"\n";
        return 1;
    }
    return 0;
}
