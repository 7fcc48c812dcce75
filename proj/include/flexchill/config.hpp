#pragma once

// Experiment configuration: a line-oriented `key = value` format with
// [section] headers and # comments. One descriptor table drives parsing,
// echoing, and sweep overrides, so the three can never disagree.

#include <cctype>
#include <cstdint>
#include <cstdio>
#include <functional>
#include <optional>
#include <sstream>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include "flexchill/federated.hpp"
#include "flexchill/model.hpp"

namespace flexchill {

class config_error : public std::runtime_error {
  public:
    using std::runtime_error::runtime_error;
};

struct ModelConfig {
    std::string kind = "mlp";  // mlp | logreg_2d | mlp_femnist | cnn2_cifar | cnn1d_har
    std::size_t num_classes = 10;
    std::size_t input_dim = 20;      // flat input size (mlp, logreg_2d)
    std::vector<std::size_t> hidden = {64};
    std::size_t seq_len = 128;       // sequence length (cnn1d_har)
};

struct DataConfig {
    std::string source = "blobs";  // blobs | idx | csv
    std::size_t per_class = 100;
    std::size_t dim = 20;
    double spread = 0.5;
    double test_fraction = 0.2;
    std::string images, labels, test_images, test_labels;
    std::string csv_path;
    std::string partition = "iid";  // iid | dirichlet | shards
    double alpha = 0.5;
    std::size_t shard_size = 0;  // 0 = derive from dataset size
    std::size_t shards_per_client = 2;
};

struct MetricsConfig {
    bool entropy = true;
    bool aggregation_delta = true;
    bool grad_norm_hist = false;
    bool cka = false;
    std::vector<std::size_t> cka_layers;
    bool calibration = false;
    std::size_t calibration_bins = 15;
    std::string boundary_params;  // "eps_max:steps", empty = off
};

struct OutputConfig {
    std::string dir = "out";
    bool save_model = false;
};

struct ExperimentConfig {
    FLConfig fl;
    ModelConfig model;
    DataConfig data;
    MetricsConfig metrics;
    OutputConfig output;
};

namespace detail {

inline std::string trim(std::string_view s) {
    std::size_t b = 0, e = s.size();
    while (b < e && std::isspace(static_cast<unsigned char>(s[b]))) ++b;
    while (e > b && std::isspace(static_cast<unsigned char>(s[e - 1]))) --e;
    return std::string(s.substr(b, e - b));
}

inline double parse_double(const std::string& v, const std::string& key) {
    try {
        std::size_t pos = 0;
        const double d = std::stod(v, &pos);
        if (pos != v.size()) throw std::invalid_argument("");
        return d;
    } catch (const std::exception&) {
        throw config_error(key + ": expected a number, got '" + v + "'");
    }
}

inline std::uint64_t parse_u64(const std::string& v, const std::string& key) {
    try {
        std::size_t pos = 0;
        if (!v.empty() && v[0] == '-') throw std::invalid_argument("");
        const unsigned long long u = std::stoull(v, &pos);
        if (pos != v.size()) throw std::invalid_argument("");
        return u;
    } catch (const std::exception&) {
        throw config_error(key + ": expected a non-negative integer, got '" + v + "'");
    }
}

inline std::size_t parse_size(const std::string& v, const std::string& key) {
    return static_cast<std::size_t>(parse_u64(v, key));
}

inline bool parse_bool(const std::string& v, const std::string& key) {
    if (v == "true" || v == "1" || v == "yes" || v == "on") return true;
    if (v == "false" || v == "0" || v == "no" || v == "off") return false;
    throw config_error(key + ": expected true/false, got '" + v + "'");
}

inline std::vector<std::string> split(const std::string& v, char sep) {
    std::vector<std::string> parts;
    std::string cur;
    for (char c : v) {
        if (c == sep) {
            parts.push_back(trim(cur));
            cur.clear();
        } else {
            cur += c;
        }
    }
    parts.push_back(trim(cur));
    return parts;
}

inline std::vector<std::size_t> parse_size_list(const std::string& v, const std::string& key) {
    std::vector<std::size_t> out;
    if (trim(v).empty()) return out;
    for (const auto& p : split(v, ',')) out.push_back(parse_size(p, key));
    return out;
}

// "round:temperature,round:temperature,..." with 1-based strictly increasing rounds.
inline std::vector<SchedulePoint> parse_schedule(const std::string& v, const std::string& key) {
    std::vector<SchedulePoint> out;
    if (trim(v).empty()) return out;
    for (const auto& p : split(v, ',')) {
        const auto colon = p.find(':');
        if (colon == std::string::npos)
            throw config_error(key + ": expected round:temperature pairs, got '" + p + "'");
        out.push_back({parse_size(trim(p.substr(0, colon)), key),
                       parse_double(trim(p.substr(colon + 1)), key)});
    }
    return out;
}

inline std::string fmt_double(double d) {
    char buf[64];
    std::snprintf(buf, sizeof(buf), "%.17g", d);
    return buf;
}

inline std::string fmt_size_list(const std::vector<std::size_t>& v) {
    std::string out;
    for (std::size_t i = 0; i < v.size(); ++i) {
        if (i) out += ",";
        out += std::to_string(v[i]);
    }
    return out;
}

inline std::string fmt_schedule(const std::vector<SchedulePoint>& v) {
    std::string out;
    for (std::size_t i = 0; i < v.size(); ++i) {
        if (i) out += ",";
        out += std::to_string(v[i].round) + ":" + fmt_double(v[i].temperature);
    }
    return out;
}

}  // namespace detail

struct ConfigKey {
    std::string section;
    std::string key;
    bool sweepable;
    std::function<void(ExperimentConfig&, const std::string&)> set;
    std::function<std::string(const ExperimentConfig&)> get;
};

inline const std::vector<ConfigKey>& config_keys() {
    using detail::fmt_double;
    static const std::vector<ConfigKey> keys = [] {
        std::vector<ConfigKey> k;
        auto add = [&](const std::string& section, const std::string& key, bool sweepable,
                       std::function<void(ExperimentConfig&, const std::string&)> set,
                       std::function<std::string(const ExperimentConfig&)> get) {
            k.push_back({section, key, sweepable, std::move(set), std::move(get)});
        };

        // [federated]
        add("federated", "algorithm", false,
            [](ExperimentConfig& c, const std::string& v) {
                if (v == "fedavg") c.fl.algorithm = FLAlgorithm::fedavg;
                else if (v == "fedprox") c.fl.algorithm = FLAlgorithm::fedprox;
                else if (v == "scaffold") c.fl.algorithm = FLAlgorithm::scaffold;
                else if (v == "fedbn") c.fl.algorithm = FLAlgorithm::fedbn;
                else throw config_error("algorithm: unknown value '" + v + "'");
            },
            [](const ExperimentConfig& c) { return algorithm_name(c.fl.algorithm); });
        add("federated", "total_clients", false,
            [](ExperimentConfig& c, const std::string& v) {
                c.fl.total_clients = detail::parse_size(v, "total_clients");
            },
            [](const ExperimentConfig& c) { return std::to_string(c.fl.total_clients); });
        add("federated", "rounds", false,
            [](ExperimentConfig& c, const std::string& v) {
                c.fl.rounds = detail::parse_size(v, "rounds");
            },
            [](const ExperimentConfig& c) { return std::to_string(c.fl.rounds); });
        add("federated", "participants_per_round", true,
            [](ExperimentConfig& c, const std::string& v) {
                c.fl.participants_per_round = detail::parse_size(v, "participants_per_round");
            },
            [](const ExperimentConfig& c) {
                return std::to_string(c.fl.participants_per_round);
            });
        add("federated", "local_epochs", true,
            [](ExperimentConfig& c, const std::string& v) {
                c.fl.local_epochs = detail::parse_size(v, "local_epochs");
            },
            [](const ExperimentConfig& c) { return std::to_string(c.fl.local_epochs); });
        add("federated", "batch_size", true,
            [](ExperimentConfig& c, const std::string& v) {
                c.fl.batch_size = detail::parse_size(v, "batch_size");
            },
            [](const ExperimentConfig& c) { return std::to_string(c.fl.batch_size); });
        add("federated", "learning_rate", true,
            [](ExperimentConfig& c, const std::string& v) {
                c.fl.learning_rate = detail::parse_double(v, "learning_rate");
            },
            [](const ExperimentConfig& c) { return fmt_double(c.fl.learning_rate); });
        add("federated", "lr_decay", false,
            [](ExperimentConfig& c, const std::string& v) {
                c.fl.lr_decay = detail::parse_double(v, "lr_decay");
            },
            [](const ExperimentConfig& c) { return fmt_double(c.fl.lr_decay); });
        add("federated", "temperature", true,
            [](ExperimentConfig& c, const std::string& v) {
                c.fl.temperature = detail::parse_double(v, "temperature");
            },
            [](const ExperimentConfig& c) { return fmt_double(c.fl.temperature); });
        add("federated", "temperature_schedule", false,
            [](ExperimentConfig& c, const std::string& v) {
                c.fl.temperature_schedule = detail::parse_schedule(v, "temperature_schedule");
            },
            [](const ExperimentConfig& c) {
                return detail::fmt_schedule(c.fl.temperature_schedule);
            });
        add("federated", "fedprox_mu", false,
            [](ExperimentConfig& c, const std::string& v) {
                c.fl.fedprox_mu = detail::parse_double(v, "fedprox_mu");
            },
            [](const ExperimentConfig& c) { return fmt_double(c.fl.fedprox_mu); });
        add("federated", "seed", false,
            [](ExperimentConfig& c, const std::string& v) {
                c.fl.seed = detail::parse_u64(v, "seed");
            },
            [](const ExperimentConfig& c) { return std::to_string(c.fl.seed); });
        add("federated", "target_accuracy", false,
            [](ExperimentConfig& c, const std::string& v) {
                if (detail::trim(v).empty() || v == "none")
                    c.fl.target_accuracy.reset();
                else
                    c.fl.target_accuracy = detail::parse_double(v, "target_accuracy");
            },
            [](const ExperimentConfig& c) {
                return c.fl.target_accuracy ? fmt_double(*c.fl.target_accuracy)
                                            : std::string("none");
            });
        add("federated", "client_holdout_frac", false,
            [](ExperimentConfig& c, const std::string& v) {
                c.fl.client_holdout_frac = detail::parse_double(v, "client_holdout_frac");
            },
            [](const ExperimentConfig& c) { return fmt_double(c.fl.client_holdout_frac); });

        // [model]
        add("model", "kind", false,
            [](ExperimentConfig& c, const std::string& v) {
                if (v != "mlp" && v != "logreg_2d" && v != "mlp_femnist" && v != "cnn2_cifar" &&
                    v != "cnn1d_har")
                    throw config_error("kind: unknown model kind '" + v + "'");
                c.model.kind = v;
            },
            [](const ExperimentConfig& c) { return c.model.kind; });
        add("model", "num_classes", false,
            [](ExperimentConfig& c, const std::string& v) {
                c.model.num_classes = detail::parse_size(v, "num_classes");
            },
            [](const ExperimentConfig& c) { return std::to_string(c.model.num_classes); });
        add("model", "input_dim", false,
            [](ExperimentConfig& c, const std::string& v) {
                c.model.input_dim = detail::parse_size(v, "input_dim");
            },
            [](const ExperimentConfig& c) { return std::to_string(c.model.input_dim); });
        add("model", "hidden", false,
            [](ExperimentConfig& c, const std::string& v) {
                c.model.hidden = detail::parse_size_list(v, "hidden");
            },
            [](const ExperimentConfig& c) { return detail::fmt_size_list(c.model.hidden); });
        add("model", "seq_len", false,
            [](ExperimentConfig& c, const std::string& v) {
                c.model.seq_len = detail::parse_size(v, "seq_len");
            },
            [](const ExperimentConfig& c) { return std::to_string(c.model.seq_len); });

        // [data]
        add("data", "source", false,
            [](ExperimentConfig& c, const std::string& v) {
                if (v != "blobs" && v != "idx" && v != "csv")
                    throw config_error("source: unknown data source '" + v + "'");
                c.data.source = v;
            },
            [](const ExperimentConfig& c) { return c.data.source; });
        add("data", "per_class", false,
            [](ExperimentConfig& c, const std::string& v) {
                c.data.per_class = detail::parse_size(v, "per_class");
            },
            [](const ExperimentConfig& c) { return std::to_string(c.data.per_class); });
        add("data", "dim", false,
            [](ExperimentConfig& c, const std::string& v) {
                c.data.dim = detail::parse_size(v, "dim");
            },
            [](const ExperimentConfig& c) { return std::to_string(c.data.dim); });
        add("data", "spread", false,
            [](ExperimentConfig& c, const std::string& v) {
                c.data.spread = detail::parse_double(v, "spread");
            },
            [](const ExperimentConfig& c) { return fmt_double(c.data.spread); });
        add("data", "test_fraction", false,
            [](ExperimentConfig& c, const std::string& v) {
                c.data.test_fraction = detail::parse_double(v, "test_fraction");
            },
            [](const ExperimentConfig& c) { return fmt_double(c.data.test_fraction); });
        add("data", "images", false,
            [](ExperimentConfig& c, const std::string& v) { c.data.images = v; },
            [](const ExperimentConfig& c) { return c.data.images; });
        add("data", "labels", false,
            [](ExperimentConfig& c, const std::string& v) { c.data.labels = v; },
            [](const ExperimentConfig& c) { return c.data.labels; });
        add("data", "test_images", false,
            [](ExperimentConfig& c, const std::string& v) { c.data.test_images = v; },
            [](const ExperimentConfig& c) { return c.data.test_images; });
        add("data", "test_labels", false,
            [](ExperimentConfig& c, const std::string& v) { c.data.test_labels = v; },
            [](const ExperimentConfig& c) { return c.data.test_labels; });
        add("data", "csv_path", false,
            [](ExperimentConfig& c, const std::string& v) { c.data.csv_path = v; },
            [](const ExperimentConfig& c) { return c.data.csv_path; });
        add("data", "partition", false,
            [](ExperimentConfig& c, const std::string& v) {
                if (v != "iid" && v != "dirichlet" && v != "shards")
                    throw config_error("partition: unknown scheme '" + v + "'");
                c.data.partition = v;
            },
            [](const ExperimentConfig& c) { return c.data.partition; });
        add("data", "alpha", true,
            [](ExperimentConfig& c, const std::string& v) {
                c.data.alpha = detail::parse_double(v, "alpha");
            },
            [](const ExperimentConfig& c) { return fmt_double(c.data.alpha); });
        add("data", "shard_size", false,
            [](ExperimentConfig& c, const std::string& v) {
                c.data.shard_size = detail::parse_size(v, "shard_size");
            },
            [](const ExperimentConfig& c) { return std::to_string(c.data.shard_size); });
        add("data", "shards_per_client", false,
            [](ExperimentConfig& c, const std::string& v) {
                c.data.shards_per_client = detail::parse_size(v, "shards_per_client");
            },
            [](const ExperimentConfig& c) { return std::to_string(c.data.shards_per_client); });

        // [metrics]
        add("metrics", "entropy", false,
            [](ExperimentConfig& c, const std::string& v) {
                c.metrics.entropy = detail::parse_bool(v, "entropy");
            },
            [](const ExperimentConfig& c) { return c.metrics.entropy ? "true" : "false"; });
        add("metrics", "aggregation_delta", false,
            [](ExperimentConfig& c, const std::string& v) {
                c.metrics.aggregation_delta = detail::parse_bool(v, "aggregation_delta");
            },
            [](const ExperimentConfig& c) {
                return c.metrics.aggregation_delta ? "true" : "false";
            });
        add("metrics", "grad_norm_hist", false,
            [](ExperimentConfig& c, const std::string& v) {
                c.metrics.grad_norm_hist = detail::parse_bool(v, "grad_norm_hist");
            },
            [](const ExperimentConfig& c) {
                return c.metrics.grad_norm_hist ? "true" : "false";
            });
        add("metrics", "cka", false,
            [](ExperimentConfig& c, const std::string& v) {
                c.metrics.cka = detail::parse_bool(v, "cka");
            },
            [](const ExperimentConfig& c) { return c.metrics.cka ? "true" : "false"; });
        add("metrics", "cka_layers", false,
            [](ExperimentConfig& c, const std::string& v) {
                c.metrics.cka_layers = detail::parse_size_list(v, "cka_layers");
            },
            [](const ExperimentConfig& c) {
                return detail::fmt_size_list(c.metrics.cka_layers);
            });
        add("metrics", "calibration", false,
            [](ExperimentConfig& c, const std::string& v) {
                c.metrics.calibration = detail::parse_bool(v, "calibration");
            },
            [](const ExperimentConfig& c) { return c.metrics.calibration ? "true" : "false"; });
        add("metrics", "calibration_bins", false,
            [](ExperimentConfig& c, const std::string& v) {
                c.metrics.calibration_bins = detail::parse_size(v, "calibration_bins");
            },
            [](const ExperimentConfig& c) {
                return std::to_string(c.metrics.calibration_bins);
            });
        add("metrics", "boundary_params", false,
            [](ExperimentConfig& c, const std::string& v) { c.metrics.boundary_params = v; },
            [](const ExperimentConfig& c) { return c.metrics.boundary_params; });

        // [output]
        add("output", "dir", false,
            [](ExperimentConfig& c, const std::string& v) { c.output.dir = v; },
            [](const ExperimentConfig& c) { return c.output.dir; });
        add("output", "save_model", false,
            [](ExperimentConfig& c, const std::string& v) {
                c.output.save_model = detail::parse_bool(v, "save_model");
            },
            [](const ExperimentConfig& c) { return c.output.save_model ? "true" : "false"; });

        return k;
    }();
    return keys;
}

inline const ConfigKey* find_config_key(const std::string& section, const std::string& key) {
    for (const auto& k : config_keys())
        if (k.section == section && k.key == key) return &k;
    return nullptr;
}

// Sweep keys are addressed by bare name (each sweepable key is unique).
inline const ConfigKey* find_sweep_key(const std::string& key) {
    for (const auto& k : config_keys())
        if (k.sweepable && k.key == key) return &k;
    return nullptr;
}

inline ExperimentConfig parse_config_text(const std::string& text) {
    ExperimentConfig cfg;
    std::istringstream in(text);
    std::string line;
    std::string section;
    std::size_t lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        const auto hash = line.find('#');
        if (hash != std::string::npos) line.erase(hash);
        const std::string t = detail::trim(line);
        if (t.empty()) continue;
        if (t.front() == '[') {
            if (t.back() != ']')
                throw config_error("line " + std::to_string(lineno) + ": unterminated section header");
            section = detail::trim(t.substr(1, t.size() - 2));
            if (section.empty())
                throw config_error("line " + std::to_string(lineno) + ": empty section name");
            continue;
        }
        const auto eq = t.find('=');
        if (eq == std::string::npos)
            throw config_error("line " + std::to_string(lineno) + ": expected key = value");
        const std::string key = detail::trim(t.substr(0, eq));
        const std::string value = detail::trim(t.substr(eq + 1));
        if (section.empty())
            throw config_error("line " + std::to_string(lineno) + ": key '" + key +
                               "' outside any [section]");
        const ConfigKey* desc = find_config_key(section, key);
        if (desc == nullptr)
            throw config_error("line " + std::to_string(lineno) + ": unknown key '" + section +
                               "." + key + "'");
        try {
            desc->set(cfg, value);
        } catch (const config_error& e) {
            throw config_error("line " + std::to_string(lineno) + ": " + e.what());
        }
    }
    return cfg;
}

// Echo the full configuration (all keys, table order). parse(format(c))
// reproduces c exactly; doubles are printed with round-trip precision.
inline std::string format_config(const ExperimentConfig& cfg) {
    std::string out;
    std::string section;
    for (const auto& k : config_keys()) {
        if (k.section != section) {
            if (!out.empty()) out += "\n";
            out += "[" + k.section + "]\n";
            section = k.section;
        }
        out += k.key + " = " + k.get(cfg) + "\n";
    }
    return out;
}

// Resolve the [model] block to a concrete architecture description.
inline ModelSpec resolve_model_spec(const ModelConfig& m) {
    if (m.kind == "mlp_femnist") return ModelSpec::femnist();
    if (m.kind == "cnn2_cifar") return ModelSpec::cifar();
    if (m.kind == "cnn1d_har") return ModelSpec::har(m.seq_len);
    if (m.kind == "logreg_2d") return ModelSpec::logreg(m.input_dim, m.num_classes);
    if (m.kind == "mlp") return ModelSpec::mlp_custom(m.input_dim, m.hidden, m.num_classes);
    throw config_error("kind: unknown model kind '" + m.kind + "'");
}

}  // namespace flexchill
