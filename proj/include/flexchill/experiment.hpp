#pragma once

// Experiment orchestration: turn a parsed configuration into datasets, a
// partition, and a federated run, and write the run's outputs (per-round CSV,
// JSON summary, optional measurement dumps) under the configured directory.

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "flexchill/analysis.hpp"
#include "flexchill/checkpoint.hpp"
#include "flexchill/config.hpp"
#include "flexchill/data.hpp"
#include "flexchill/federated.hpp"
#include "flexchill/partition.hpp"

namespace flexchill {

namespace detail {

// "%.6g" with NaN spelled "nan" regardless of platform quirks.
inline std::string csv_num(double v) {
    if (std::isnan(v)) return "nan";
    char buf[48];
    std::snprintf(buf, sizeof(buf), "%.6g", v);
    return buf;
}

inline std::ofstream open_out(const std::filesystem::path& p) {
    std::ofstream f(p);
    if (!f) throw format_error("cannot write " + p.string());
    return f;
}

}  // namespace detail

struct BuiltData {
    Dataset train;
    Dataset test;
    ClientPartition partition;
};

// Materialize [data] against the resolved model: generate or load the
// dataset, carve out the test split, and partition the train rows.
inline BuiltData build_data(const ExperimentConfig& cfg, const ModelSpec& spec) {
    const DataConfig& d = cfg.data;
    BuiltData out;

    if (d.source == "blobs") {
        if (d.dim != spec.input_elements())
            throw config_error("data.dim (" + std::to_string(d.dim) +
                               ") must match the model input size (" +
                               std::to_string(spec.input_elements()) + ")");
        Dataset full = gen_gaussian_blobs(spec.num_classes, d.per_class, d.dim, d.spread,
                                          cfg.fl.seed);
        auto [train, test] = split_train_test(full, d.test_fraction, cfg.fl.seed);
        out.train = std::move(train);
        out.test = std::move(test);
    } else if (d.source == "idx") {
        if (d.images.empty() || d.labels.empty() || d.test_images.empty() ||
            d.test_labels.empty())
            throw config_error(
                "idx source needs images, labels, test_images and test_labels paths");
        out.train = load_idx(d.images, d.labels);
        out.test = load_idx(d.test_images, d.test_labels);
    } else if (d.source == "csv") {
        if (d.csv_path.empty()) throw config_error("csv source needs csv_path");
        Dataset full = load_csv(d.csv_path, spec.num_classes);
        auto [train, test] = split_train_test(full, d.test_fraction, cfg.fl.seed);
        out.train = std::move(train);
        out.test = std::move(test);
    } else {
        throw config_error("unknown data source '" + d.source + "'");
    }

    if (d.partition == "iid") {
        out.partition = partition_iid(out.train, cfg.fl.total_clients, cfg.fl.seed);
    } else if (d.partition == "dirichlet") {
        out.partition = partition_dirichlet(out.train, cfg.fl.total_clients, d.alpha, cfg.fl.seed);
    } else if (d.partition == "shards") {
        std::size_t shard = d.shard_size;
        if (shard == 0) {
            const std::size_t shards = cfg.fl.total_clients * d.shards_per_client;
            shard = shards ? std::max<std::size_t>(1, out.train.size() / shards) : 1;
        }
        out.partition = partition_shards(out.train, cfg.fl.total_clients, shard,
                                         d.shards_per_client, cfg.fl.seed);
    } else {
        throw config_error("unknown partition scheme '" + d.partition + "'");
    }
    return out;
}

struct ExperimentResult {
    FederatedRun run;
    BuiltData data;
    std::optional<std::size_t> reached_round;  // first round hitting target_accuracy
    std::filesystem::path dir;
};

// Rebuild the config keys that a summary.json echoes (exact string values).
inline ExperimentConfig config_from_json(const nlohmann::json& echoed) {
    ExperimentConfig cfg;
    for (const auto& k : config_keys()) {
        if (!echoed.contains(k.section)) continue;
        const auto& section = echoed.at(k.section);
        if (!section.contains(k.key)) continue;
        k.set(cfg, section.at(k.key).get<std::string>());
    }
    return cfg;
}

inline nlohmann::json config_to_json(const ExperimentConfig& cfg) {
    nlohmann::json echoed = nlohmann::json::object();
    for (const auto& k : config_keys()) echoed[k.section][k.key] = k.get(cfg);
    return echoed;
}

// Run one experiment and write rounds.csv, summary.json, any enabled
// measurement dumps, and (optionally) the final model checkpoint.
inline ExperimentResult run_experiment(const ExperimentConfig& cfg_in) {
    ExperimentConfig cfg = cfg_in;
    FLConfig& fl = cfg.fl;
    fl.model = resolve_model_spec(cfg.model);
    fl.measure_entropy = cfg.metrics.entropy;
    fl.measure_deltas = cfg.metrics.aggregation_delta;
    fl.validate();

    ExperimentResult result;
    result.dir = cfg.output.dir;
    std::filesystem::create_directories(result.dir);

    result.data = build_data(cfg, fl.model);

    std::ofstream rounds_csv = detail::open_out(result.dir / "rounds.csv");
    rounds_csv << "round,acc,loss,delta_part,delta_nonpart,entropy_pre,entropy_post,wall_s\n"
               << std::flush;
    const auto emit = [&](const RoundRecord& r) {
        rounds_csv << r.round << ',' << detail::csv_num(r.accuracy) << ','
                   << detail::csv_num(r.loss) << ',' << detail::csv_num(r.delta_participants)
                   << ',' << detail::csv_num(r.delta_nonparticipants) << ','
                   << detail::csv_num(r.entropy_pre_agg) << ','
                   << detail::csv_num(r.entropy_post_agg) << ','
                   << detail::csv_num(r.wall_seconds) << '\n'
                   << std::flush;
    };

    result.run = run_federated(fl, result.data.train, result.data.partition, result.data.test,
                               emit);

    std::vector<double> acc_series;
    acc_series.reserve(result.run.records.size());
    double wall_total = 0.0;
    for (const auto& r : result.run.records) {
        acc_series.push_back(r.accuracy);
        wall_total += r.wall_seconds;
    }
    if (fl.target_accuracy)
        result.reached_round = rounds_to_target(acc_series, *fl.target_accuracy);

    Model& final_model = result.run.final_model;
    const double t_final = effective_temperature(fl, std::max<std::size_t>(fl.rounds, 1));

    nlohmann::json summary;
    summary["rounds_completed"] = result.run.records.size();
    if (!result.run.records.empty()) {
        summary["final_accuracy"] = result.run.records.back().accuracy;
        summary["final_loss"] = result.run.records.back().loss;
    }
    if (fl.target_accuracy) {
        if (result.reached_round)
            summary["rounds_to_target"] = *result.reached_round;
        else
            summary["rounds_to_target"] = nullptr;
    }
    summary["parameters_total"] = parameter_count(final_model);
    summary["parameters_trainable"] = trainable_parameter_count(final_model);
    summary["wall_seconds_total"] = wall_total;
    summary["config"] = config_to_json(cfg);

    if (cfg.metrics.grad_norm_hist) {
        // Per-sample input-gradient norms on (up to) the first 2048 test rows.
        const std::size_t n = std::min<std::size_t>(result.data.test.size(), 2048);
        std::vector<std::size_t> idx(n);
        for (std::size_t i = 0; i < n; ++i) idx[i] = i;
        Dataset probe = result.data.test.subset(idx);
        const GradNormSplit split = input_gradient_norms(final_model, probe, t_final);
        std::ofstream f = detail::open_out(result.dir / "gradnorms.csv");
        f << "split,norm\n";
        for (double v : split.correct) f << "correct," << detail::csv_num(v) << '\n';
        for (double v : split.incorrect) f << "incorrect," << detail::csv_num(v) << '\n';
    }

    if (cfg.metrics.cka) {
        // Compare per-client locally adapted models against the final global.
        std::vector<std::size_t> layer_ids = cfg.metrics.cka_layers;
        if (layer_ids.empty())
            for (std::size_t i = 0; i < final_model.plan.size(); ++i) layer_ids.push_back(i);
        const std::size_t probe_n = std::min<std::size_t>(result.data.test.size(), 256);
        std::vector<std::size_t> idx(probe_n);
        for (std::size_t i = 0; i < probe_n; ++i) idx[i] = i;
        Dataset probe = result.data.test.subset(idx);

        std::vector<Model> locals;
        std::vector<std::size_t> local_ids;
        for (std::size_t i = 0; i < fl.total_clients; ++i) {
            Dataset client_data = result.data.train.subset(result.data.partition.assignments[i]);
            if (client_data.size() == 0) continue;
            locals.push_back(client_update(final_model, client_data, fl,
                                           std::max<std::size_t>(fl.rounds, 1), i));
            local_ids.push_back(i);
        }
        if (!locals.empty()) {
            std::vector<Model*> ptrs;
            for (auto& m : locals) ptrs.push_back(&m);
            const CkaReport report = cka_report(ptrs, final_model, probe, layer_ids);
            std::ofstream f = detail::open_out(result.dir / "cka.csv");
            f << "layer,a,b,cka\n";
            for (std::size_t li = 0; li < report.layer_ids.size(); ++li)
                for (std::size_t a = 0; a < report.entries; ++a)
                    for (std::size_t b = 0; b < report.entries; ++b)
                        f << report.layer_ids[li] << ',' << a << ',' << b << ','
                          << detail::csv_num(report.at(li, a, b)) << '\n';
            nlohmann::json entries = nlohmann::json::array();
            for (std::size_t id : local_ids) entries.push_back("client" + std::to_string(id));
            entries.push_back("global");
            summary["cka_entries"] = entries;
        }
    }

    if (cfg.metrics.calibration) {
        const CalibrationReport report =
            calibration(final_model, result.data.test, t_final, cfg.metrics.calibration_bins);
        std::ofstream f = detail::open_out(result.dir / "calibration.csv");
        f << "bin,lo,hi,count,mean_confidence,accuracy\n";
        const double M = static_cast<double>(report.bins.size());
        for (std::size_t b = 0; b < report.bins.size(); ++b)
            f << b << ',' << detail::csv_num(static_cast<double>(b) / M) << ','
              << detail::csv_num(static_cast<double>(b + 1) / M) << ',' << report.bins[b].count
              << ',' << detail::csv_num(report.bins[b].mean_confidence) << ','
              << detail::csv_num(report.bins[b].accuracy) << '\n';
        summary["ece"] = report.ece;
    }

    if (!cfg.metrics.boundary_params.empty()) {
        // "eps_max:steps" grid probe over (up to) the first 100 test rows.
        const auto colon = cfg.metrics.boundary_params.find(':');
        if (colon == std::string::npos)
            throw config_error("boundary_params: expected eps_max:steps");
        const double eps_max =
            detail::parse_double(cfg.metrics.boundary_params.substr(0, colon), "boundary_params");
        const std::size_t steps = detail::parse_size(
            cfg.metrics.boundary_params.substr(colon + 1), "boundary_params");
        std::ofstream f = detail::open_out(result.dir / "boundary.csv");
        f << "sample,label,distance\n";
        const std::size_t n = std::min<std::size_t>(result.data.test.size(), 100);
        for (std::size_t i = 0; i < n; ++i) {
            const auto dist = boundary_distance(final_model, result.data.test.row(i),
                                                result.data.test.labels[i], eps_max, steps);
            f << i << ',' << result.data.test.labels[i] << ','
              << (dist ? detail::csv_num(*dist) : std::string("inf")) << '\n';
        }
    }

    if (cfg.output.save_model)
        save_checkpoint(final_model.params, result.dir / "model.fxch");

    detail::open_out(result.dir / "summary.json") << summary.dump(2) << '\n';
    return result;
}

// Run the base configuration once per value of one sweepable key, each into
// its own subdirectory, and write a manifest of the runs.
inline void sweep_experiment(const ExperimentConfig& base, const std::string& key,
                             const std::vector<std::string>& values) {
    const ConfigKey* desc = find_sweep_key(key);
    if (desc == nullptr) throw config_error("sweep: key '" + key + "' is not sweepable");
    if (values.empty()) throw config_error("sweep: need at least one value");

    std::filesystem::create_directories(base.output.dir);
    nlohmann::json manifest;
    manifest["key"] = key;
    manifest["values"] = values;
    nlohmann::json runs = nlohmann::json::array();

    for (const std::string& value : values) {
        ExperimentConfig cfg = base;
        desc->set(cfg, value);
        const std::filesystem::path sub =
            std::filesystem::path(base.output.dir) / (key + "=" + value);
        cfg.output.dir = sub.string();
        const ExperimentResult res = run_experiment(cfg);

        nlohmann::json entry;
        entry["value"] = value;
        entry["dir"] = sub.filename().string();
        if (!res.run.records.empty()) entry["final_accuracy"] = res.run.records.back().accuracy;
        if (cfg.fl.target_accuracy) {
            if (res.reached_round)
                entry["rounds_to_target"] = *res.reached_round;
            else
                entry["rounds_to_target"] = nullptr;
        }
        runs.push_back(entry);
    }
    manifest["runs"] = runs;
    detail::open_out(std::filesystem::path(base.output.dir) / "manifest.json")
        << manifest.dump(2) << '\n';
}

namespace detail {

// Dump a linear model's per-class weight rows, for plotting 2-D decision
// boundaries: one line per (model, class).
inline void write_logreg_boundaries(const std::filesystem::path& path,
                                    const std::vector<std::pair<std::string, const Model*>>& models) {
    std::ofstream f = open_out(path);
    f << "model,class,w0,w1,bias\n";
    for (const auto& [name, m] : models) {
        const ParamEntry* w = m->params.find("fc1.weight");
        const ParamEntry* b = m->params.find("fc1.bias");
        if (w == nullptr || b == nullptr)
            throw std::logic_error("boundaries: model has no fc1 layer");
        const std::size_t C = w->tensor.dim(0), D = w->tensor.dim(1);
        if (D != 2) throw std::logic_error("boundaries: expected 2-D inputs");
        for (std::size_t c = 0; c < C; ++c)
            f << name << ',' << c << ',' << csv_num(w->tensor.data()[c * D]) << ','
              << csv_num(w->tensor.data()[c * D + 1]) << ',' << csv_num(b->tensor.data()[c])
              << '\n';
    }
}

}  // namespace detail

// Built-in experiment setups. Every preset writes its config file(s) under
// `out`; unless dry_run is set, the self-contained ones also run.
inline void run_preset(const std::string& name, const std::filesystem::path& out, bool dry_run,
                       std::optional<std::uint64_t> seed_override = std::nullopt) {
    std::filesystem::create_directories(out);

    if (name == "toy2d") {
        // Three clients, three Gaussian blobs in the plane, a linear model:
        // small enough to plot, slow-cooled enough to show the effect.
        for (const double temperature : {1.0, 0.5}) {
            ExperimentConfig cfg;
            cfg.model.kind = "logreg_2d";
            cfg.model.input_dim = 2;
            cfg.model.num_classes = 3;
            cfg.data.source = "blobs";
            cfg.data.per_class = 60;
            cfg.data.dim = 2;
            cfg.data.spread = 0.35;
            cfg.data.test_fraction = 0.25;
            cfg.data.partition = "iid";
            cfg.fl.total_clients = 3;
            cfg.fl.participants_per_round = 3;
            cfg.fl.rounds = 30;
            cfg.fl.local_epochs = 5;
            cfg.fl.batch_size = 8;
            cfg.fl.learning_rate = 0.05;
            cfg.fl.temperature = temperature;
            cfg.fl.seed = seed_override.value_or(7);
            const std::string run_name = temperature == 1.0 ? "t1.0" : "t0.5";
            cfg.output.dir = (out / run_name).string();

            detail::open_out(out / ("toy2d_" + run_name + ".cfg")) << format_config(cfg);
            if (dry_run) continue;

            ExperimentResult res = run_experiment(cfg);

            // Per-client adapted weights next to the aggregate's.
            std::vector<Model> locals;
            std::vector<std::pair<std::string, const Model*>> rows;
            for (std::size_t i = 0; i < cfg.fl.total_clients; ++i) {
                Dataset client_data =
                    res.data.train.subset(res.data.partition.assignments[i]);
                if (client_data.size() == 0) continue;
                locals.push_back(client_update(res.run.final_model, client_data, cfg.fl,
                                               cfg.fl.rounds, i));
            }
            for (std::size_t i = 0; i < locals.size(); ++i)
                rows.push_back({"client" + std::to_string(i), &locals[i]});
            rows.push_back({"global", &res.run.final_model});
            detail::write_logreg_boundaries(res.dir / "boundaries.csv", rows);
        }
        return;
    }

    if (name == "synthetic-noniid") {
        // Ten clients on 20-D blobs with a Dirichlet label skew; sweeps the
        // concentration parameter across heavy/medium/mild skew.
        ExperimentConfig cfg;
        cfg.model.kind = "mlp";
        cfg.model.input_dim = 20;
        cfg.model.hidden = {64};
        cfg.model.num_classes = 10;
        cfg.data.source = "blobs";
        cfg.data.per_class = 120;
        cfg.data.dim = 20;
        cfg.data.spread = 0.55;
        cfg.data.test_fraction = 0.2;
        cfg.data.partition = "dirichlet";
        cfg.fl.total_clients = 10;
        cfg.fl.participants_per_round = 5;
        cfg.fl.rounds = 100;
        cfg.fl.local_epochs = 5;
        cfg.fl.batch_size = 16;
        cfg.fl.learning_rate = 0.003;
        cfg.fl.temperature = 0.5;
        cfg.fl.seed = seed_override.value_or(3);
        cfg.output.dir = out.string();

        detail::open_out(out / "synthetic_noniid.cfg") << format_config(cfg);
        if (!dry_run) sweep_experiment(cfg, "alpha", {"0.1", "0.5", "1.0"});
        return;
    }

    if (name == "mnist-idx") {
        // Config skeleton for IDX-format image data; fill in the four paths.
        ExperimentConfig cfg;
        cfg.model.kind = "mlp_femnist";
        cfg.data.source = "idx";
        cfg.data.images = "data/train-images-idx3-ubyte";
        cfg.data.labels = "data/train-labels-idx1-ubyte";
        cfg.data.test_images = "data/t10k-images-idx3-ubyte";
        cfg.data.test_labels = "data/t10k-labels-idx1-ubyte";
        cfg.data.partition = "dirichlet";
        cfg.data.alpha = 0.5;
        cfg.fl.total_clients = 10;
        cfg.fl.participants_per_round = 5;
        cfg.fl.rounds = 50;
        cfg.fl.temperature = 0.5;
        if (seed_override) cfg.fl.seed = *seed_override;
        cfg.output.dir = (out / "run").string();
        detail::open_out(out / "mnist_idx.cfg") << format_config(cfg);
        return;
    }

    throw config_error("unknown preset '" + name + "'");
}

}  // namespace flexchill
