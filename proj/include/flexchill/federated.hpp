#pragma once

// The federated loop. Every round: sample participants, run local training at
// the round's temperature on each (optionally across threads), aggregate by
// sample count, then measure. All randomness flows through named streams of
// cfg.seed, and per-client work is reduced in client-id order, so serial and
// parallel executions produce bit-identical runs.

#include <atomic>
#include <chrono>
#include <cstdint>
#include <cstdlib>
#include <functional>
#include <iostream>
#include <limits>
#include <optional>
#include <string>
#include <thread>
#include <vector>

#include "flexchill/analysis.hpp"
#include "flexchill/data.hpp"
#include "flexchill/model.hpp"
#include "flexchill/ops.hpp"
#include "flexchill/params.hpp"
#include "flexchill/partition.hpp"
#include "flexchill/rng.hpp"

namespace flexchill {

enum class FLAlgorithm { fedavg, fedprox, scaffold, fedbn };

inline std::string algorithm_name(FLAlgorithm a) {
    switch (a) {
        case FLAlgorithm::fedavg: return "fedavg";
        case FLAlgorithm::fedprox: return "fedprox";
        case FLAlgorithm::scaffold: return "scaffold";
        case FLAlgorithm::fedbn: return "fedbn";
    }
    return "unknown";
}

// Piecewise-constant temperature override: from `round` (1-based) onward use
// `temperature`, until a later point takes over.
struct SchedulePoint {
    std::size_t round;
    double temperature;
};

struct FLConfig {
    FLAlgorithm algorithm = FLAlgorithm::fedavg;
    ModelSpec model;
    std::size_t total_clients = 10;
    std::size_t participants_per_round = 10;
    std::size_t rounds = 300;
    std::size_t local_epochs = 10;
    std::size_t batch_size = 16;
    double learning_rate = 0.001;
    double lr_decay = 1e-5;
    double temperature = 1.0;
    std::vector<SchedulePoint> temperature_schedule;
    double fedprox_mu = 0.0;
    std::uint64_t seed = 1;
    std::optional<double> target_accuracy;
    double client_holdout_frac = 0.2;
    bool measure_entropy = true;  // per-round pre/post aggregation entropy
    bool measure_deltas = true;   // per-round holdout accuracy deltas

    void validate() const {
        detail::require(total_clients >= 1, "config: total_clients must be at least 1");
        detail::require(participants_per_round >= 1 && participants_per_round <= total_clients,
                        "config: participants_per_round must lie in [1, total_clients]");
        detail::require(local_epochs >= 1, "config: local_epochs must be at least 1");
        detail::require(batch_size >= 1, "config: batch_size must be at least 1");
        detail::require(std::isfinite(learning_rate) && learning_rate >= 0.0,
                        "config: learning_rate must be finite and non-negative");
        detail::require(std::isfinite(lr_decay) && lr_decay >= 0.0,
                        "config: lr_decay must be finite and non-negative");
        detail::require(std::isfinite(temperature) && temperature > 0.0,
                        "config: temperature must be positive");
        for (const auto& p : temperature_schedule) {
            detail::require(p.round >= 1, "config: schedule rounds are 1-based");
            detail::require(std::isfinite(p.temperature) && p.temperature > 0.0,
                            "config: scheduled temperatures must be positive");
        }
        for (std::size_t i = 1; i < temperature_schedule.size(); ++i)
            detail::require(temperature_schedule[i - 1].round < temperature_schedule[i].round,
                            "config: schedule rounds must strictly increase");
        detail::require(std::isfinite(fedprox_mu) && fedprox_mu >= 0.0,
                        "config: fedprox_mu must be finite and non-negative");
        if (target_accuracy)
            detail::require(*target_accuracy > 0.0 && *target_accuracy <= 1.0,
                            "config: target_accuracy must lie in (0, 1]");
        detail::require(client_holdout_frac >= 0.0 && client_holdout_frac < 1.0,
                        "config: client_holdout_frac must lie in [0, 1)");
        if (algorithm == FLAlgorithm::scaffold)
            detail::require(learning_rate > 0.0, "config: scaffold needs a positive learning rate");
    }
};

inline double effective_temperature(const FLConfig& cfg, std::size_t round) {
    double t = cfg.temperature;
    for (const auto& p : cfg.temperature_schedule) {
        if (p.round <= round) t = p.temperature;
        else break;
    }
    return t;
}

struct RoundRecord {
    std::size_t round = 0;  // 1-based
    double accuracy = 0.0;
    double loss = 0.0;
    double delta_participants = std::numeric_limits<double>::quiet_NaN();
    double delta_nonparticipants = std::numeric_limits<double>::quiet_NaN();
    double entropy_pre_agg = 0.0;
    double entropy_post_agg = 0.0;
    double wall_seconds = 0.0;
};

// Uniform draw of participants_per_round distinct client ids, sorted. Keyed
// only by (seed, round): temperature or algorithm changes never move it.
inline std::vector<std::size_t> sample_clients(const FLConfig& cfg, std::size_t round) {
    std::vector<std::size_t> ids(cfg.total_clients);
    for (std::size_t i = 0; i < ids.size(); ++i) ids[i] = i;
    Rng rng(cfg.seed, "sample-clients", round);
    // Partial Fisher-Yates: position i picks from [i, end).
    for (std::size_t i = 0; i < cfg.participants_per_round; ++i) {
        const std::size_t j = i + static_cast<std::size_t>(
                                      uniform_below(rng, ids.size() - i));
        std::swap(ids[i], ids[j]);
    }
    ids.resize(cfg.participants_per_round);
    std::sort(ids.begin(), ids.end());
    return ids;
}

// Zero-filled value holder congruent with `params` (used for control variates).
inline ParamSet zeros_like(const ParamSet& params) {
    ParamSet out;
    for (const auto& e : params)
        out.add(e.name, Tensor::zeros(e.tensor.shape(), false), e.role);
    return out;
}

inline double fedprox_penalty(const ParamSet& local, const ParamSet& global_ref, double mu) {
    if (!local.congruent_with(global_ref))
        throw std::invalid_argument("fedprox: parameter sets are not congruent");
    double sq = 0.0;
    for (std::size_t i = 0; i < local.size(); ++i) {
        if (!local[i].tensor.requires_grad()) continue;
        const auto& a = local[i].tensor.data();
        const auto& b = global_ref[i].tensor.data();
        for (std::size_t j = 0; j < a.size(); ++j) {
            const double d = a[j] - b[j];
            sq += d * d;
        }
    }
    return 0.5 * mu * sq;
}

namespace detail {

struct LocalUpdateResult {
    Model model;
    ParamSet new_control;    // scaffold only
    long long steps = 0;
    double eta_eff = 0.0;
};

// Shared local-training loop. `mode` distinguishes the gradient correction:
// fedprox adds mu*(w - w_global) and scaffold adds (c - c_i) before each step.
inline LocalUpdateResult local_update(const Model& global_model, const Dataset& data,
                                      const FLConfig& cfg, std::size_t round,
                                      FLAlgorithm mode, const ParamSet* server_c,
                                      const ParamSet* client_c) {
    LocalUpdateResult res{global_model.clone(), {}, 0, 0.0};
    if (data.size() == 0) return res;

    Model& local = res.model;
    const double temperature = effective_temperature(cfg, round);
    double lr_eff_sum = 0.0;
    long long step = 0;

    std::vector<std::size_t> order = data.identity_order();
    for (std::size_t epoch = 0; epoch < cfg.local_epochs; ++epoch) {
        Rng shuffle_rng(cfg.seed, "batch-shuffle", round, epoch);
        shuffle(order, shuffle_rng);
        for (std::size_t lo = 0; lo < data.size(); lo += cfg.batch_size) {
            const std::size_t hi = std::min(data.size(), lo + cfg.batch_size);
            Tensor x = data.gather(order, lo, hi);
            std::vector<int> labels(hi - lo);
            for (std::size_t i = lo; i < hi; ++i) labels[i - lo] = data.labels[order[i]];

            Tape tape;
            Tensor logits = forward(local, x, &tape, true);
            Tensor loss = ce_loss_t(&tape, logits, labels, temperature);
            backward(tape, loss);

            if (mode == FLAlgorithm::fedprox && cfg.fedprox_mu > 0.0) {
                for (std::size_t i = 0; i < local.params.size(); ++i) {
                    auto& t = local.params[i].tensor;
                    if (!t.requires_grad()) continue;
                    auto& g = t.grad_buffer();
                    const auto& w = t.data();
                    const auto& w0 = global_model.params[i].tensor.data();
                    for (std::size_t j = 0; j < g.size(); ++j)
                        g[j] += cfg.fedprox_mu * (w[j] - w0[j]);
                }
            } else if (mode == FLAlgorithm::scaffold) {
                for (std::size_t i = 0; i < local.params.size(); ++i) {
                    auto& t = local.params[i].tensor;
                    if (!t.requires_grad()) continue;
                    auto& g = t.grad_buffer();
                    const auto& c = (*server_c)[i].tensor.data();
                    const auto& ci = (*client_c)[i].tensor.data();
                    for (std::size_t j = 0; j < g.size(); ++j) g[j] += c[j] - ci[j];
                }
            }

            lr_eff_sum += effective_lr(cfg.learning_rate, cfg.lr_decay, step);
            sgd_step(local.params, cfg.learning_rate, cfg.lr_decay, step);
            ++step;
        }
    }

    res.steps = step;
    res.eta_eff = step > 0 ? lr_eff_sum / static_cast<double>(step) : 0.0;
    return res;
}

}  // namespace detail

// One client's local training pass: clone the broadcast model, run
// local_epochs of minibatch SGD on temperature-scaled cross-entropy, return
// the trained clone. client_id is part of the public signature; batch order
// is keyed by (seed, round, epoch) so equal data means equal updates.
inline Model client_update(const Model& global_model, const Dataset& data, const FLConfig& cfg,
                           std::size_t round = 1, std::size_t client_id = 0) {
    (void)client_id;
    return detail::local_update(global_model, data, cfg, round, FLAlgorithm::fedavg, nullptr,
                                nullptr)
        .model;
}

// client_update plus the proximal pull mu*(w - w_global) on every gradient.
inline Model client_update_fedprox(const Model& global_model, const Dataset& data,
                                   const FLConfig& cfg, std::size_t round = 1,
                                   std::size_t client_id = 0) {
    (void)client_id;
    return detail::local_update(global_model, data, cfg, round, FLAlgorithm::fedprox, nullptr,
                                nullptr)
        .model;
}

struct ScaffoldUpdate {
    Model model;
    ParamSet new_client_control;
};

// Control-variate local step: every gradient is corrected by (c - c_i), and
// the client control advances to c_i - c + (w_global - w_local)/(S * eta_eff)
// over the S local steps actually taken (eta_eff = mean effective lr, which
// must be positive).
inline ScaffoldUpdate client_update_scaffold(const Model& global_model, const Dataset& data,
                                             const FLConfig& cfg, const ParamSet& server_control,
                                             const ParamSet& client_control, std::size_t round = 1,
                                             std::size_t client_id = 0) {
    (void)client_id;
    if (!server_control.congruent_with(client_control) ||
        !server_control.congruent_with(global_model.params))
        throw std::invalid_argument("scaffold: control states must be congruent with the model");
    if (data.size() == 0)
        return {global_model.clone(), client_control.clone()};

    auto res = detail::local_update(global_model, data, cfg, round, FLAlgorithm::scaffold,
                                    &server_control, &client_control);
    if (!(res.eta_eff > 0.0))
        throw std::invalid_argument("scaffold: effective learning rate must be positive");

    ParamSet new_control = client_control.clone();
    const double scale = 1.0 / (static_cast<double>(res.steps) * res.eta_eff);
    for (std::size_t i = 0; i < new_control.size(); ++i) {
        if (!global_model.params[i].tensor.requires_grad()) continue;
        auto& nc = new_control[i].tensor.data();
        const auto& ci = client_control[i].tensor.data();
        const auto& c = server_control[i].tensor.data();
        const auto& wg = global_model.params[i].tensor.data();
        const auto& wl = res.model.params[i].tensor.data();
        for (std::size_t j = 0; j < nc.size(); ++j)
            nc[j] = ci[j] - c[j] + (wg[j] - wl[j]) * scale;
    }
    return {std::move(res.model), std::move(new_control)};
}

enum class AggregateMode { fedavg, fedbn };

struct Aggregand {
    const ParamSet* params;
    double weight;
};

// Weighted elementwise mean, computed relative to the first entry:
// out = x_0 + sum_i w_i * (x_i - x_0) with weights normalized to one. The
// relative form keeps "aggregate of identical sets" an exact no-op. In fedbn
// mode batchnorm entries (statistics and affine) are not averaged; the output
// keeps the first entry's values for them.
inline ParamSet aggregate(const std::vector<Aggregand>& models, AggregateMode mode) {
    if (models.empty()) throw std::invalid_argument("aggregate: need at least one model");
    double total = 0.0;
    for (const auto& a : models) {
        if (a.params == nullptr) throw std::invalid_argument("aggregate: null parameter set");
        if (!std::isfinite(a.weight) || a.weight < 0.0)
            throw std::invalid_argument("aggregate: weights must be finite and non-negative");
        if (!a.params->congruent_with(*models.front().params))
            throw std::invalid_argument("aggregate: parameter sets are not congruent");
        total += a.weight;
    }
    if (!(total > 0.0)) throw std::invalid_argument("aggregate: weights sum to zero");

    ParamSet out = models.front().params->clone();
    for (std::size_t e = 0; e < out.size(); ++e) {
        const ParamRole role = out[e].role;
        if (mode == AggregateMode::fedbn &&
            (role == ParamRole::batchnorm_stat || role == ParamRole::batchnorm_affine))
            continue;
        auto& acc = out[e].tensor.data();
        const auto& base = models.front().params->operator[](e).tensor.data();
        for (std::size_t i = 1; i < models.size(); ++i) {
            const double w = models[i].weight / total;
            const auto& x = models[i].params->operator[](e).tensor.data();
            for (std::size_t j = 0; j < acc.size(); ++j) acc[j] += w * (x[j] - base[j]);
        }
    }
    return out;
}

struct FederatedRun {
    std::vector<RoundRecord> records;
    Model final_model;
};

using RoundCallback = std::function<void(const RoundRecord&)>;

namespace detail {

inline unsigned resolve_threads() {
    if (const char* env = std::getenv("FLEXCHILL_THREADS")) {
        char* end = nullptr;
        const unsigned long v = std::strtoul(env, &end, 10);
        if (end != env && *end == '\0' && v >= 1) return static_cast<unsigned>(v);
        return 1;
    }
    const unsigned hw = std::thread::hardware_concurrency();
    return hw == 0 ? 1 : hw;
}

// Batchnorm personalization state: (param index, values) pairs.
using BnOverlay = std::vector<std::pair<std::size_t, std::vector<double>>>;

inline BnOverlay extract_bn(const ParamSet& params) {
    BnOverlay overlay;
    for (std::size_t i = 0; i < params.size(); ++i)
        if (params[i].role == ParamRole::batchnorm_stat ||
            params[i].role == ParamRole::batchnorm_affine)
            overlay.push_back({i, params[i].tensor.data()});
    return overlay;
}

inline void apply_bn(ParamSet& params, const BnOverlay& overlay) {
    for (const auto& [idx, values] : overlay) params[idx].tensor.data() = values;
}

}  // namespace detail

// Full simulation. The partition must cover cfg.total_clients. Within a
// round, client updates may run on up to FLEXCHILL_THREADS threads (default:
// hardware concurrency); results are reduced in client-id order either way.
inline FederatedRun run_federated(const FLConfig& cfg, const Dataset& train,
                                  const ClientPartition& partition, const Dataset& test,
                                  const RoundCallback& on_round = {}) {
    cfg.validate();
    detail::require(partition.num_clients() == cfg.total_clients,
                    "run: partition covers " + std::to_string(partition.num_clients()) +
                        " clients, config expects " + std::to_string(cfg.total_clients));
    detail::require(test.size() > 0, "run: test dataset is empty");

    const std::size_t K = cfg.total_clients;

    // Per-client train/holdout views, fixed for the whole run.
    std::vector<Dataset> client_train(K), client_hold(K);
    for (std::size_t i = 0; i < K; ++i) {
        std::vector<std::size_t> idx = partition.assignments[i];
        Rng rng(cfg.seed, "holdout", i);
        shuffle(idx, rng);
        std::size_t hold = static_cast<std::size_t>(
            cfg.client_holdout_frac * static_cast<double>(idx.size()));
        if (hold >= idx.size() && !idx.empty()) hold = idx.size() - 1;
        std::vector<std::size_t> hold_idx(idx.begin(), idx.begin() + static_cast<std::ptrdiff_t>(hold));
        std::vector<std::size_t> train_idx(idx.begin() + static_cast<std::ptrdiff_t>(hold), idx.end());
        std::sort(hold_idx.begin(), hold_idx.end());
        std::sort(train_idx.begin(), train_idx.end());
        client_train[i] = train.subset(train_idx);
        client_hold[i] = train.subset(hold_idx);
    }

    Model global = build_model(cfg.model, cfg.seed);

    // scaffold control state
    ParamSet server_c;
    std::vector<ParamSet> client_c;
    if (cfg.algorithm == FLAlgorithm::scaffold) {
        server_c = zeros_like(global.params);
        client_c.reserve(K);
        for (std::size_t i = 0; i < K; ++i) client_c.push_back(zeros_like(global.params));
    }

    // fedbn personalization state
    const bool fedbn = cfg.algorithm == FLAlgorithm::fedbn;
    detail::BnOverlay initial_bn;
    std::vector<std::optional<detail::BnOverlay>> client_bn;
    if (fedbn) {
        initial_bn = detail::extract_bn(global.params);
        client_bn.assign(K, std::nullopt);
    }
    auto bn_for_client = [&](std::size_t i) -> const detail::BnOverlay& {
        return client_bn[i] ? *client_bn[i] : initial_bn;
    };

    bool warned_empty = false;
    FederatedRun run{{}, global.clone()};

    for (std::size_t round = 1; round <= cfg.rounds; ++round) {
        const auto t0 = std::chrono::steady_clock::now();
        const double temperature = effective_temperature(cfg, round);

        const std::vector<std::size_t> sampled = sample_clients(cfg, round);
        std::vector<std::size_t> active;
        for (std::size_t id : sampled) {
            if (client_train[id].size() == 0) {
                if (!warned_empty) {
                    std::cerr << "warning: client " << id
                              << " has no training samples and is skipped when sampled\n";
                    warned_empty = true;
                }
                continue;
            }
            active.push_back(id);
        }

        struct Slot {
            Model model;
            ParamSet new_control;
            bool done = false;
        };
        std::vector<Slot> slots(active.size());

        auto train_one = [&](std::size_t k) {
            const std::size_t id = active[k];
            switch (cfg.algorithm) {
                case FLAlgorithm::fedavg:
                    slots[k].model = client_update(global, client_train[id], cfg, round, id);
                    break;
                case FLAlgorithm::fedprox:
                    slots[k].model =
                        client_update_fedprox(global, client_train[id], cfg, round, id);
                    break;
                case FLAlgorithm::scaffold: {
                    auto res = client_update_scaffold(global, client_train[id], cfg, server_c,
                                                      client_c[id], round, id);
                    slots[k].model = std::move(res.model);
                    slots[k].new_control = std::move(res.new_client_control);
                    break;
                }
                case FLAlgorithm::fedbn: {
                    Model personalized = global.clone();
                    detail::apply_bn(personalized.params, bn_for_client(id));
                    slots[k].model = client_update(personalized, client_train[id], cfg, round, id);
                    break;
                }
            }
            slots[k].done = true;
        };

        const unsigned threads =
            std::min<unsigned>(detail::resolve_threads(),
                               static_cast<unsigned>(std::max<std::size_t>(active.size(), 1)));
        if (threads <= 1 || active.size() <= 1) {
            for (std::size_t k = 0; k < active.size(); ++k) train_one(k);
        } else {
            std::vector<std::exception_ptr> errors(threads);
            std::vector<std::thread> pool;
            pool.reserve(threads);
            for (unsigned w = 0; w < threads; ++w)
                pool.emplace_back([&, w]() {
                    try {
                        for (std::size_t k = w; k < active.size(); k += threads) train_one(k);
                    } catch (...) {
                        errors[w] = std::current_exception();
                    }
                });
            for (auto& t : pool) t.join();
            for (auto& e : errors)
                if (e) std::rethrow_exception(e);
        }

        Model previous_global = std::move(global);

        if (!active.empty()) {
            std::vector<Aggregand> aggregands;
            aggregands.reserve(active.size());
            for (std::size_t k = 0; k < active.size(); ++k)
                aggregands.push_back(
                    {&slots[k].model.params,
                     static_cast<double>(client_train[active[k]].size())});
            ParamSet merged =
                aggregate(aggregands, fedbn ? AggregateMode::fedbn : AggregateMode::fedavg);
            global = Model{previous_global.spec, std::move(merged), previous_global.plan};
            if (fedbn) {
                detail::apply_bn(global.params, detail::extract_bn(previous_global.params));
                for (std::size_t k = 0; k < active.size(); ++k)
                    client_bn[active[k]] = detail::extract_bn(slots[k].model.params);
            }
            if (cfg.algorithm == FLAlgorithm::scaffold) {
                ParamSet mean_delta = zeros_like(server_c);
                for (std::size_t k = 0; k < active.size(); ++k) {
                    const std::size_t id = active[k];
                    for (std::size_t e = 0; e < server_c.size(); ++e) {
                        if (!previous_global.params[e].tensor.requires_grad()) continue;
                        auto& acc = mean_delta[e].tensor.data();
                        const auto& nc = slots[k].new_control[e].tensor.data();
                        const auto& oc = client_c[id][e].tensor.data();
                        for (std::size_t j = 0; j < acc.size(); ++j) acc[j] += nc[j] - oc[j];
                    }
                }
                // c += (m/K) * mean(delta) = (1/K) * sum(delta)
                const double scale = 1.0 / static_cast<double>(K);
                for (std::size_t e = 0; e < server_c.size(); ++e) {
                    auto& c = server_c[e].tensor.data();
                    const auto& d = mean_delta[e].tensor.data();
                    for (std::size_t j = 0; j < c.size(); ++j) c[j] += scale * d[j];
                }
                for (std::size_t k = 0; k < active.size(); ++k)
                    client_c[active[k]] = std::move(slots[k].new_control);
            }
        } else {
            global = std::move(previous_global);
            previous_global = global.clone();
        }

        RoundRecord rec;
        rec.round = round;

        const EvalResult eval = evaluate(global, test, temperature);
        rec.accuracy = eval.accuracy;
        rec.loss = eval.loss;

        if (cfg.measure_entropy) {
            // Aggregation smoothing is measured where it acts: each
            // participant's local model against that client's own holdout,
            // next to the fresh global on the same rows.
            double pre_sum = 0.0, post_sum = 0.0;
            std::size_t measured = 0;
            for (std::size_t k = 0; k < active.size(); ++k) {
                const Dataset& hold = client_hold[active[k]];
                if (hold.size() == 0) continue;
                pre_sum += output_entropy(slots[k].model, hold, temperature);
                post_sum += output_entropy(global, hold, temperature);
                ++measured;
            }
            if (measured > 0) {
                rec.entropy_pre_agg = pre_sum / static_cast<double>(measured);
                rec.entropy_post_agg = post_sum / static_cast<double>(measured);
            } else {
                rec.entropy_pre_agg = output_entropy(global, test, temperature);
                rec.entropy_post_agg = rec.entropy_pre_agg;
            }
        } else {
            rec.entropy_pre_agg = std::numeric_limits<double>::quiet_NaN();
            rec.entropy_post_agg = std::numeric_limits<double>::quiet_NaN();
        }

        if (cfg.measure_deltas) {
            std::vector<bool> is_participant(K, false);
            for (std::size_t id : active) is_participant[id] = true;
            std::vector<Model> post_models;  // fedbn personalizes post-aggregation views
            std::vector<Model> pre_globals;
            post_models.reserve(fedbn ? K : 1);
            pre_globals.reserve(fedbn ? K : 1);
            std::vector<Model*> pre(K, nullptr), post(K, nullptr);
            if (!fedbn) {
                post_models.push_back(global.clone());
                pre_globals.push_back(previous_global.clone());
            }
            std::vector<std::size_t> active_slot(K, SIZE_MAX);
            for (std::size_t k = 0; k < active.size(); ++k) active_slot[active[k]] = k;
            for (std::size_t i = 0; i < K; ++i) {
                if (fedbn) {
                    Model pg = previous_global.clone();
                    detail::apply_bn(pg.params, bn_for_client(i));
                    pre_globals.push_back(std::move(pg));
                    Model ng = global.clone();
                    detail::apply_bn(ng.params, bn_for_client(i));
                    post_models.push_back(std::move(ng));
                    post[i] = &post_models.back();
                    pre[i] = active_slot[i] != SIZE_MAX ? &slots[active_slot[i]].model
                                                        : &pre_globals.back();
                } else {
                    post[i] = &post_models.front();
                    pre[i] = active_slot[i] != SIZE_MAX ? &slots[active_slot[i]].model
                                                        : &pre_globals.front();
                }
            }
            const AggregationDeltas deltas =
                pre_post_aggregation_delta(pre, post, client_hold, is_participant);
            rec.delta_participants = deltas.participant_mean;
            rec.delta_nonparticipants = deltas.nonparticipant_mean;
        }

        rec.wall_seconds =
            std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
        run.records.push_back(rec);
        if (on_round) on_round(rec);
    }

    run.final_model = std::move(global);
    return run;
}

}  // namespace flexchill
