#include "mmbc/config.hpp"

#include <fstream>
#include <functional>
#include <sstream>

namespace mmbc {

namespace {

std::string trim(const std::string& s) {
    size_t a = s.find_first_not_of(" \t\r\n");
    if (a == std::string::npos) return "";
    size_t b = s.find_last_not_of(" \t\r\n");
    return s.substr(a, b - a + 1);
}

} // namespace

std::map<std::string, std::string> parse_config_text(const std::string& text) {
    std::map<std::string, std::string> kv;
    std::istringstream is(text);
    std::string line, section;
    int lineno = 0;
    while (std::getline(is, line)) {
        ++lineno;
        const size_t hash = line.find('#');
        if (hash != std::string::npos) line = line.substr(0, hash);
        line = trim(line);
        if (line.empty()) continue;
        if (line.front() == '[') {
            if (line.back() != ']')
                throw ConfigError("line " + std::to_string(lineno) + ": unterminated section");
            section = trim(line.substr(1, line.size() - 2));
            continue;
        }
        const size_t eq = line.find('=');
        if (eq == std::string::npos)
            throw ConfigError("line " + std::to_string(lineno) + ": expected key = value");
        std::string key = trim(line.substr(0, eq));
        const std::string val = trim(line.substr(eq + 1));
        if (key.empty()) throw ConfigError("line " + std::to_string(lineno) + ": empty key");
        if (!section.empty()) key = section + "." + key;
        if (kv.count(key)) throw ConfigError("duplicate key: " + key);
        kv[key] = val;
    }
    return kv;
}

std::map<std::string, std::string> parse_config_file(const std::string& path) {
    std::ifstream is(path);
    if (!is) throw ConfigError("cannot open config file: " + path);
    std::stringstream ss;
    ss << is.rdbuf();
    return parse_config_text(ss.str());
}

namespace {

template <typename T>
T parse_number(const std::string& key, const std::string& val);

template <>
double parse_number<double>(const std::string& key, const std::string& val) {
    try {
        size_t pos = 0;
        const double v = std::stod(val, &pos);
        if (pos != val.size()) throw std::invalid_argument("trailing");
        return v;
    } catch (const std::exception&) {
        throw ConfigError("key '" + key + "': not a number: " + val);
    }
}

template <>
int parse_number<int>(const std::string& key, const std::string& val) {
    try {
        size_t pos = 0;
        const long v = std::stol(val, &pos);
        if (pos != val.size()) throw std::invalid_argument("trailing");
        return int(v);
    } catch (const std::exception&) {
        throw ConfigError("key '" + key + "': not an integer: " + val);
    }
}

template <>
uint64_t parse_number<uint64_t>(const std::string& key, const std::string& val) {
    try {
        size_t pos = 0;
        const unsigned long long v = std::stoull(val, &pos);
        if (pos != val.size()) throw std::invalid_argument("trailing");
        return uint64_t(v);
    } catch (const std::exception&) {
        throw ConfigError("key '" + key + "': not an unsigned integer: " + val);
    }
}

bool parse_bool(const std::string& key, const std::string& val) {
    if (val == "true" || val == "1" || val == "yes") return true;
    if (val == "false" || val == "0" || val == "no") return false;
    throw ConfigError("key '" + key + "': not a bool: " + val);
}

} // namespace

ExperimentConfig config_from_map(const std::map<std::string, std::string>& kv) {
    ExperimentConfig cfg;
    // handler per documented key; anything else is rejected below
    std::map<std::string, std::function<void(const std::string&, const std::string&)>> handlers;
    auto num_f = [](float& dst) {
        return [&dst](const std::string& k, const std::string& v) {
            dst = float(parse_number<double>(k, v));
        };
    };
    auto num_i = [](int& dst) {
        return [&dst](const std::string& k, const std::string& v) {
            dst = parse_number<int>(k, v);
        };
    };
    auto num_b = [](bool& dst) {
        return [&dst](const std::string& k, const std::string& v) { dst = parse_bool(k, v); };
    };

    handlers["task"] = [&cfg](const std::string& k, const std::string& v) {
        const auto t = parse_task(v);
        if (!t) throw ConfigError("key '" + k + "': unknown task: " + v);
        cfg.task = *t;
    };
    handlers["family"] = [&cfg](const std::string& k, const std::string& v) {
        const auto f = parse_family(v);
        if (!f) throw ConfigError("key '" + k + "': unknown family: " + v);
        cfg.family = *f;
    };
    handlers["seed"] = [&cfg](const std::string& k, const std::string& v) {
        cfg.seed = parse_number<uint64_t>(k, v);
    };
    handlers["demos"] = num_i(cfg.n_demos);
    handlers["epochs"] = num_i(cfg.epochs);
    handlers["out_dir"] = [&cfg](const std::string&, const std::string& v) { cfg.out_dir = v; };
    handlers["start_jitter"] = [&cfg](const std::string& k, const std::string& v) {
        cfg.demo.start_jitter = parse_number<double>(k, v);
    };
    handlers["info_n_mc"] = num_i(cfg.info_n_mc);
    handlers["valid_mass_samples"] = num_i(cfg.valid_mass_samples);
    handlers["diag_info"] = num_b(cfg.diag_info);
    handlers["diag_valid_mass"] = num_b(cfg.diag_valid_mass);

    Hyper& h = cfg.hyper;
    handlers["hyper.beta_kl"] = num_f(h.beta_kl);
    handlers["hyper.beta_mmd"] = num_f(h.beta_mmd);
    handlers["hyper.beta_sink"] = num_f(h.beta_sink);
    handlers["hyper.sink_blur"] = num_f(h.sink_blur);
    handlers["hyper.sink_max_iters"] = num_i(h.sink_max_iters);
    handlers["hyper.geom_enabled"] = num_b(h.geom_enabled);
    handlers["hyper.jitter_enabled"] = num_b(h.jitter_enabled);
    handlers["hyper.sigma_dec"] = num_f(h.sigma_dec);
    handlers["hyper.beta_mean"] = num_f(h.geom.beta_mean);
    handlers["hyper.beta_std"] = num_f(h.geom.beta_std);
    handlers["hyper.beta_max"] = num_f(h.geom.beta_max);
    handlers["hyper.beta_cov"] = num_f(h.geom.beta_cov);
    handlers["hyper.sigma_star"] = num_f(h.geom.sigma_star);
    handlers["hyper.sigma_max"] = num_f(h.geom.sigma_max);
    handlers["hyper.beta_flow"] = num_f(h.beta_flow);
    handlers["hyper.flow_steps"] = num_i(h.flow_steps);
    handlers["hyper.flow_time_beta_a"] = num_f(h.flow_time_beta_a);
    handlers["hyper.ddim_train_steps"] = num_i(h.ddim_train_steps);
    handlers["hyper.ddim_infer_steps"] = num_i(h.ddim_infer_steps);
    handlers["hyper.ddim_clip_sample"] = num_b(h.ddim_clip_sample);
    handlers["hyper.beta_vq"] = num_f(h.beta_vq);
    handlers["hyper.vq_layers"] = num_i(h.vq_layers);
    handlers["hyper.vq_codebook_size"] = num_i(h.vq_codebook_size);
    handlers["hyper.batch_size"] = num_i(h.batch_size);
    handlers["hyper.rollout_every"] = num_i(h.rollout_every);
    handlers["hyper.rollouts_per_eval"] = num_i(h.rollouts_per_eval);
    handlers["hyper.lr"] = num_f(h.lr);
    handlers["hyper.weight_decay"] = num_f(h.weight_decay);
    handlers["hyper.time_embed_dim"] = num_i(h.time_embed_dim);
    handlers["hyper.hidden"] = num_i(h.hidden);

    for (const auto& [key, val] : kv) {
        auto it = handlers.find(key);
        if (it == handlers.end()) throw ConfigError("unknown config key: " + key);
        it->second(key, val);
    }
    return cfg;
}

std::string canonical_config_string(const ExperimentConfig& cfg) {
    std::ostringstream os;
    os.precision(10);
    const Hyper& h = cfg.hyper;
    os << "task=" << task_name(cfg.task) << "\nfamily=" << family_name(cfg.family)
       << "\nseed=" << cfg.seed << "\ndemos=" << cfg.n_demos << "\nepochs=" << cfg.epochs
       << "\nstart_jitter=" << cfg.demo.start_jitter << "\ninfo_n_mc=" << cfg.info_n_mc
       << "\nvalid_mass_samples=" << cfg.valid_mass_samples << "\ndiag_info=" << cfg.diag_info
       << "\ndiag_valid_mass=" << cfg.diag_valid_mass << "\nbeta_kl=" << h.beta_kl
       << "\nbeta_mmd=" << h.beta_mmd << "\nbeta_sink=" << h.beta_sink
       << "\nsink_blur=" << h.sink_blur << "\ngeom_enabled=" << h.geom_enabled
       << "\njitter_enabled=" << h.jitter_enabled << "\nsigma_dec=" << h.sigma_dec
       << "\nbeta_mean=" << h.geom.beta_mean << "\nbeta_std=" << h.geom.beta_std
       << "\nbeta_max=" << h.geom.beta_max << "\nbeta_cov=" << h.geom.beta_cov
       << "\nsigma_star=" << h.geom.sigma_star << "\nsigma_max=" << h.geom.sigma_max
       << "\nbeta_flow=" << h.beta_flow << "\nflow_steps=" << h.flow_steps
       << "\nflow_time_beta_a=" << h.flow_time_beta_a
       << "\nddim_train_steps=" << h.ddim_train_steps
       << "\nddim_infer_steps=" << h.ddim_infer_steps
       << "\nddim_clip_sample=" << h.ddim_clip_sample << "\nbeta_vq=" << h.beta_vq
       << "\nvq_layers=" << h.vq_layers << "\nvq_codebook_size=" << h.vq_codebook_size
       << "\nbatch_size=" << h.batch_size << "\nrollout_every=" << h.rollout_every
       << "\nrollouts_per_eval=" << h.rollouts_per_eval << "\nlr=" << h.lr
       << "\nweight_decay=" << h.weight_decay << "\ntime_embed_dim=" << h.time_embed_dim
       << "\nhidden=" << h.hidden << "\n";
    return os.str();
}

} // namespace mmbc
