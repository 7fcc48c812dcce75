#pragma once

// Measurement suite: accuracy/loss evaluation, convergence bookkeeping,
// output entropy, linear CKA over collected features, confidence calibration,
// input-gradient norms, and decision-boundary probing. Everything here treats
// models as read-only: forwards run in eval mode, so running statistics never
// move.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <limits>
#include <optional>
#include <string>
#include <vector>

#include "flexchill/data.hpp"
#include "flexchill/model.hpp"
#include "flexchill/ops.hpp"
#include "flexchill/tensor.hpp"

namespace flexchill {

namespace detail {
inline constexpr std::size_t kEvalBatch = 128;

inline std::vector<int> argmax_rows(const Tensor& logits) {
    const std::size_t B = logits.dim(0), C = logits.dim(1);
    std::vector<int> out(B);
    const auto& v = logits.data();
    for (std::size_t r = 0; r < B; ++r) {
        std::size_t best = 0;
        for (std::size_t j = 1; j < C; ++j)
            if (v[r * C + j] > v[r * C + best]) best = j;
        out[r] = static_cast<int>(best);
    }
    return out;
}
}  // namespace detail

struct EvalResult {
    double accuracy = 0.0;
    double loss = 0.0;
};

// Accuracy comes from the raw-logit argmax, so it is bit-identical for every
// evaluation temperature; only the loss depends on T_eval.
inline EvalResult evaluate(Model& m, const Dataset& ds, double t_eval) {
    if (ds.size() == 0) throw std::invalid_argument("evaluate: dataset is empty");
    const auto order = ds.identity_order();
    std::size_t correct = 0;
    double loss_sum = 0.0;
    for (std::size_t lo = 0; lo < ds.size(); lo += detail::kEvalBatch) {
        const std::size_t hi = std::min(ds.size(), lo + detail::kEvalBatch);
        Tensor x = ds.gather(order, lo, hi);
        Tensor logits = forward(m, x, nullptr, false);
        const std::vector<int> labels(ds.labels.begin() + static_cast<std::ptrdiff_t>(lo),
                                      ds.labels.begin() + static_cast<std::ptrdiff_t>(hi));
        const auto pred = detail::argmax_rows(logits);
        for (std::size_t i = 0; i < pred.size(); ++i)
            if (pred[i] == labels[i]) ++correct;
        loss_sum += ce_loss_t(nullptr, logits, labels, t_eval).value() *
                    static_cast<double>(hi - lo);
    }
    return {static_cast<double>(correct) / static_cast<double>(ds.size()),
            loss_sum / static_cast<double>(ds.size())};
}

inline double accuracy_of(Model& m, const Dataset& ds) {
    if (ds.size() == 0) throw std::invalid_argument("accuracy: dataset is empty");
    const auto order = ds.identity_order();
    std::size_t correct = 0;
    for (std::size_t lo = 0; lo < ds.size(); lo += detail::kEvalBatch) {
        const std::size_t hi = std::min(ds.size(), lo + detail::kEvalBatch);
        Tensor logits = forward(m, ds.gather(order, lo, hi), nullptr, false);
        const auto pred = detail::argmax_rows(logits);
        for (std::size_t i = 0; i < pred.size(); ++i)
            if (pred[i] == ds.labels[lo + i]) ++correct;
    }
    return static_cast<double>(correct) / static_cast<double>(ds.size());
}

// First 1-based position in the series reaching the target, if any.
inline std::optional<std::size_t> rounds_to_target(const std::vector<double>& accuracy_series,
                                                   double target) {
    for (std::size_t i = 0; i < accuracy_series.size(); ++i)
        if (accuracy_series[i] >= target) return i + 1;
    return std::nullopt;
}

inline double convergence_speedup(std::size_t baseline_rounds, std::size_t rounds) {
    if (rounds == 0) throw std::invalid_argument("speedup: rounds must be positive");
    return static_cast<double>(baseline_rounds) / static_cast<double>(rounds);
}

// Mean Shannon entropy (nats) of the temperature-scaled output distribution.
inline double output_entropy(Model& m, const Dataset& ds, double t_eval) {
    if (ds.size() == 0) throw std::invalid_argument("entropy: dataset is empty");
    const auto order = ds.identity_order();
    double total = 0.0;
    for (std::size_t lo = 0; lo < ds.size(); lo += detail::kEvalBatch) {
        const std::size_t hi = std::min(ds.size(), lo + detail::kEvalBatch);
        Tensor logits = forward(m, ds.gather(order, lo, hi), nullptr, false);
        Tensor p = softmax_t(logits, t_eval);
        const std::size_t C = p.dim(1);
        const auto& pv = p.data();
        for (std::size_t r = 0; r < hi - lo; ++r) {
            double h = 0.0;
            for (std::size_t j = 0; j < C; ++j) {
                const double q = pv[r * C + j];
                if (q > 0.0) h -= q * std::log(q);
            }
            total += h;
        }
    }
    return total / static_cast<double>(ds.size());
}

// Row-major feature matrix, one row per probe sample.
struct FeatureMatrix {
    std::size_t rows = 0;
    std::size_t cols = 0;
    std::vector<double> values;

    double at(std::size_t r, std::size_t c) const { return values[r * cols + c]; }
};

// Activations at one plan index over a probe set, flattened per sample.
inline FeatureMatrix collect_features(Model& m, const Dataset& probe, std::size_t layer_id) {
    if (probe.size() == 0) throw std::invalid_argument("features: probe set is empty");
    detail::require(layer_id < m.plan.size(), "features: layer id " + std::to_string(layer_id) +
                                                  " out of range for plan of " +
                                                  std::to_string(m.plan.size()));
    const auto order = probe.identity_order();
    FeatureMatrix out;
    out.rows = probe.size();
    const std::vector<std::size_t> ids{layer_id};
    std::vector<Tensor> captured;
    for (std::size_t lo = 0; lo < probe.size(); lo += detail::kEvalBatch) {
        const std::size_t hi = std::min(probe.size(), lo + detail::kEvalBatch);
        forward(m, probe.gather(order, lo, hi), nullptr, false, ids, &captured);
        const Tensor& act = captured[0];
        const std::size_t width = act.numel() / (hi - lo);
        if (out.cols == 0) {
            out.cols = width;
            out.values.resize(out.rows * out.cols);
        }
        std::copy(act.data().begin(), act.data().end(),
                  out.values.begin() + static_cast<std::ptrdiff_t>(lo * out.cols));
    }
    return out;
}

// Linear centered-kernel alignment between two feature matrices with the same
// rows: |Y^T X|_F^2 / (|X^T X|_F |Y^T Y|_F) after column mean-centering.
inline double linear_cka(const FeatureMatrix& X, const FeatureMatrix& Y) {
    if (X.rows != Y.rows)
        throw std::invalid_argument("cka: feature matrices need matching rows, got " +
                                    std::to_string(X.rows) + " and " + std::to_string(Y.rows));
    if (X.rows < 2) throw std::invalid_argument("cka: need at least two rows");
    for (double v : X.values)
        if (!std::isfinite(v)) throw numeric_error("cka: features must be finite");
    for (double v : Y.values)
        if (!std::isfinite(v)) throw numeric_error("cka: features must be finite");

    const std::size_t n = X.rows;
    auto centered = [n](const FeatureMatrix& A) {
        std::vector<double> out = A.values;
        for (std::size_t c = 0; c < A.cols; ++c) {
            double mean = 0.0;
            for (std::size_t r = 0; r < n; ++r) mean += out[r * A.cols + c];
            mean /= static_cast<double>(n);
            for (std::size_t r = 0; r < n; ++r) out[r * A.cols + c] -= mean;
        }
        return out;
    };
    const std::vector<double> xc = centered(X);
    const std::vector<double> yc = centered(Y);

    // |B^T A|_F^2 for column-centered A [n,p], B [n,q].
    auto cross_fro2 = [n](const std::vector<double>& a, std::size_t p,
                          const std::vector<double>& b, std::size_t q) {
        double total = 0.0;
        std::vector<double> col(n);
        for (std::size_t j = 0; j < q; ++j) {
            for (std::size_t r = 0; r < n; ++r) col[r] = b[r * q + j];
            for (std::size_t i = 0; i < p; ++i) {
                double dot = 0.0;
                for (std::size_t r = 0; r < n; ++r) dot += col[r] * a[r * p + i];
                total += dot * dot;
            }
        }
        return total;
    };

    const double num = cross_fro2(xc, X.cols, yc, Y.cols);
    const double den_x = std::sqrt(cross_fro2(xc, X.cols, xc, X.cols));
    const double den_y = std::sqrt(cross_fro2(yc, Y.cols, yc, Y.cols));
    if (den_x == 0.0 || den_y == 0.0)
        throw numeric_error("cka: similarity undefined for all-constant features");
    return num / (den_x * den_y);
}

// Pairwise CKA at each requested layer across `models` plus a reference model
// appended as the final row/column of every matrix.
struct CkaReport {
    std::vector<std::size_t> layer_ids;
    std::size_t entries = 0;               // models + 1 (reference last)
    std::vector<std::vector<double>> matrices;  // one (entries x entries) row-major matrix per layer

    double at(std::size_t layer, std::size_t a, std::size_t b) const {
        return matrices[layer][a * entries + b];
    }
};

inline CkaReport cka_report(const std::vector<Model*>& models, Model& reference,
                            const Dataset& probe, const std::vector<std::size_t>& layer_ids) {
    if (models.empty()) throw std::invalid_argument("cka report: need at least one model");
    if (layer_ids.empty()) throw std::invalid_argument("cka report: need at least one layer id");
    CkaReport report;
    report.layer_ids = layer_ids;
    report.entries = models.size() + 1;
    for (std::size_t layer : layer_ids) {
        std::vector<FeatureMatrix> feats;
        feats.reserve(report.entries);
        for (Model* m : models) feats.push_back(collect_features(*m, probe, layer));
        feats.push_back(collect_features(reference, probe, layer));
        std::vector<double> matrix(report.entries * report.entries, 0.0);
        for (std::size_t a = 0; a < report.entries; ++a)
            for (std::size_t b = a; b < report.entries; ++b) {
                const double v = linear_cka(feats[a], feats[b]);
                matrix[a * report.entries + b] = v;
                matrix[b * report.entries + a] = v;
            }
        report.matrices.push_back(std::move(matrix));
    }
    return report;
}

struct CalibrationBin {
    std::size_t count = 0;
    double mean_confidence = 0.0;
    double accuracy = 0.0;
};

struct CalibrationReport {
    std::vector<CalibrationBin> bins;
    double ece = 0.0;
    std::size_t samples = 0;
};

// Expected calibration error over M equal-width bins of (0,1], right-closed:
// bin m covers ((m-1)/M, m/M]. Confidence 1.0 lands in the last bin.
inline CalibrationReport calibration_from_scores(const std::vector<double>& confidence,
                                                 const std::vector<bool>& correct,
                                                 std::size_t num_bins) {
    if (num_bins == 0) throw std::invalid_argument("calibration: need at least one bin");
    if (confidence.size() != correct.size())
        throw std::invalid_argument("calibration: confidence and correctness lengths differ");
    if (confidence.empty()) throw std::invalid_argument("calibration: no samples");

    std::vector<double> conf_sum(num_bins, 0.0), acc_sum(num_bins, 0.0);
    std::vector<std::size_t> count(num_bins, 0);
    for (std::size_t i = 0; i < confidence.size(); ++i) {
        const double c = confidence[i];
        if (!(c > 0.0) || !(c <= 1.0))
            throw std::invalid_argument("calibration: confidence must lie in (0, 1]");
        std::size_t bin = static_cast<std::size_t>(
            std::ceil(c * static_cast<double>(num_bins))) - 1;
        bin = std::min(bin, num_bins - 1);
        ++count[bin];
        conf_sum[bin] += c;
        acc_sum[bin] += correct[i] ? 1.0 : 0.0;
    }

    CalibrationReport report;
    report.samples = confidence.size();
    report.bins.resize(num_bins);
    double ece = 0.0;
    for (std::size_t b = 0; b < num_bins; ++b) {
        report.bins[b].count = count[b];
        if (count[b] == 0) continue;
        report.bins[b].mean_confidence = conf_sum[b] / static_cast<double>(count[b]);
        report.bins[b].accuracy = acc_sum[b] / static_cast<double>(count[b]);
        ece += (static_cast<double>(count[b]) / static_cast<double>(report.samples)) *
               std::abs(report.bins[b].accuracy - report.bins[b].mean_confidence);
    }
    report.ece = ece;
    return report;
}

inline CalibrationReport calibration(Model& m, const Dataset& ds, double t_eval,
                                     std::size_t num_bins) {
    if (ds.size() == 0) throw std::invalid_argument("calibration: dataset is empty");
    std::vector<double> confidence;
    std::vector<bool> correct;
    confidence.reserve(ds.size());
    correct.reserve(ds.size());
    const auto order = ds.identity_order();
    for (std::size_t lo = 0; lo < ds.size(); lo += detail::kEvalBatch) {
        const std::size_t hi = std::min(ds.size(), lo + detail::kEvalBatch);
        Tensor logits = forward(m, ds.gather(order, lo, hi), nullptr, false);
        Tensor p = softmax_t(logits, t_eval);
        const auto pred = detail::argmax_rows(logits);
        const std::size_t C = p.dim(1);
        for (std::size_t r = 0; r < hi - lo; ++r) {
            confidence.push_back(p.data()[r * C + static_cast<std::size_t>(pred[r])]);
            correct.push_back(pred[r] == ds.labels[lo + r]);
        }
    }
    return calibration_from_scores(confidence, correct, num_bins);
}

struct GradNormSplit {
    std::vector<double> correct;
    std::vector<double> incorrect;
};

// L2 norm of d(loss)/d(input) per sample at temperature T, split by whether
// the model's prediction matches the label.
inline GradNormSplit input_gradient_norms(Model& m, const Dataset& ds, double temperature) {
    if (ds.size() == 0) throw std::invalid_argument("grad norms: dataset is empty");
    GradNormSplit split;
    const auto order = ds.identity_order();
    for (std::size_t i = 0; i < ds.size(); ++i) {
        Tensor x = ds.gather(order, i, i + 1);
        x.set_requires_grad(true);
        Tape tape;
        Tensor logits = forward(m, x, &tape, false);
        Tensor loss = ce_loss_t(&tape, logits, {ds.labels[i]}, temperature);
        backward(tape, loss);
        double sq = 0.0;
        for (double g : x.grad()) sq += g * g;
        const double norm = std::sqrt(sq);
        const auto pred = detail::argmax_rows(logits);
        if (pred[0] == ds.labels[i])
            split.correct.push_back(norm);
        else
            split.incorrect.push_back(norm);
    }
    return split;
}

// Smallest epsilon on the grid {eps_max * i / steps} whose one-shot signed
// perturbation x' = x + eps * sign(d loss/d x) changes the predicted class.
// The sign is computed once at x against the given label (temperature 1; the
// positive 1/T factor never changes signs). Returns nothing if no grid point
// flips the prediction.
inline std::optional<double> boundary_distance(Model& m, const Tensor& sample, int label,
                                               double eps_max, std::size_t steps) {
    if (!(eps_max > 0.0)) throw std::invalid_argument("boundary: eps_max must be positive");
    if (steps == 0) throw std::invalid_argument("boundary: need at least one grid step");
    detail::require(sample.numel() == m.spec.input_elements(),
                    "boundary: sample size does not match model input");

    std::vector<std::size_t> batch_shape{1};
    for (std::size_t d : sample.shape()) batch_shape.push_back(d);
    Tensor x(batch_shape, sample.data());
    x.set_requires_grad(true);

    Tape tape;
    Tensor logits = forward(m, x, &tape, false);
    const int base_class = detail::argmax_rows(logits)[0];
    Tensor loss = ce_loss_t(&tape, logits, {label}, 1.0);
    backward(tape, loss);

    std::vector<double> direction(x.numel());
    for (std::size_t i = 0; i < direction.size(); ++i) {
        const double g = x.grad()[i];
        direction[i] = g > 0.0 ? 1.0 : (g < 0.0 ? -1.0 : 0.0);
    }

    for (std::size_t s = 1; s <= steps; ++s) {
        const double eps = eps_max * static_cast<double>(s) / static_cast<double>(steps);
        Tensor xp(batch_shape, sample.data());
        for (std::size_t i = 0; i < xp.numel(); ++i) xp.data()[i] += eps * direction[i];
        Tensor out = forward(m, xp, nullptr, false);
        if (detail::argmax_rows(out)[0] != base_class) return eps;
    }
    return std::nullopt;
}

struct AggregationDeltas {
    std::vector<double> participants;
    std::vector<double> nonparticipants;
    double participant_mean = std::numeric_limits<double>::quiet_NaN();
    double nonparticipant_mean = std::numeric_limits<double>::quiet_NaN();
};

// Per-client accuracy change from its pre-aggregation model to the
// post-aggregation model, measured on that client's own evaluation split.
// Clients with empty evaluation splits are skipped.
inline AggregationDeltas pre_post_aggregation_delta(const std::vector<Model*>& pre,
                                                    const std::vector<Model*>& post,
                                                    const std::vector<Dataset>& eval_sets,
                                                    const std::vector<bool>& is_participant) {
    const std::size_t n = eval_sets.size();
    if (pre.size() != n || post.size() != n || is_participant.size() != n)
        throw std::invalid_argument("deltas: per-client vectors must have equal lengths");
    AggregationDeltas out;
    for (std::size_t i = 0; i < n; ++i) {
        if (eval_sets[i].size() == 0) continue;
        const double before = accuracy_of(*pre[i], eval_sets[i]);
        const double after = accuracy_of(*post[i], eval_sets[i]);
        (is_participant[i] ? out.participants : out.nonparticipants).push_back(after - before);
    }
    auto mean = [](const std::vector<double>& v) {
        if (v.empty()) return std::numeric_limits<double>::quiet_NaN();
        double s = 0.0;
        for (double x : v) s += x;
        return s / static_cast<double>(v.size());
    };
    out.participant_mean = mean(out.participants);
    out.nonparticipant_mean = mean(out.nonparticipants);
    return out;
}

}  // namespace flexchill
