#pragma once

// Named parameter collections and the plain-SGD update.

#include <cmath>
#include <cstddef>
#include <functional>
#include <stdexcept>
#include <string>
#include <vector>

#include "flexchill/tensor.hpp"

namespace flexchill {

// Role tags drive aggregation policy (batchnorm entries can be held back) and
// bookkeeping; they carry no behavior of their own.
enum class ParamRole : unsigned char {
    dense = 0,
    conv = 1,
    batchnorm_stat = 2,
    batchnorm_affine = 3,
    bias = 4,
};

struct ParamEntry {
    std::string name;
    Tensor tensor;
    ParamRole role;
};

class ParamSet {
public:
    void add(std::string name, Tensor tensor, ParamRole role) {
        if (find(name) != nullptr)
            throw std::invalid_argument("paramset: duplicate name '" + name + "'");
        entries_.push_back({std::move(name), std::move(tensor), role});
    }

    std::size_t size() const { return entries_.size(); }
    bool empty() const { return entries_.empty(); }

    ParamEntry& operator[](std::size_t i) { return entries_[i]; }
    const ParamEntry& operator[](std::size_t i) const { return entries_[i]; }

    auto begin() { return entries_.begin(); }
    auto end() { return entries_.end(); }
    auto begin() const { return entries_.begin(); }
    auto end() const { return entries_.end(); }

    ParamEntry* find(const std::string& name) {
        for (auto& e : entries_)
            if (e.name == name) return &e;
        return nullptr;
    }
    const ParamEntry* find(const std::string& name) const {
        for (const auto& e : entries_)
            if (e.name == name) return &e;
        return nullptr;
    }

    ParamEntry& at(const std::string& name) {
        if (auto* e = find(name)) return *e;
        throw std::invalid_argument("paramset: no entry named '" + name + "'");
    }
    const ParamEntry& at(const std::string& name) const {
        if (auto* e = find(name)) return *e;
        throw std::invalid_argument("paramset: no entry named '" + name + "'");
    }

    // Same names, roles, and shapes, in the same order.
    bool congruent_with(const ParamSet& other) const {
        if (entries_.size() != other.entries_.size()) return false;
        for (std::size_t i = 0; i < entries_.size(); ++i) {
            const auto& a = entries_[i];
            const auto& b = other.entries_[i];
            if (a.name != b.name || a.role != b.role ||
                a.tensor.shape() != b.tensor.shape())
                return false;
        }
        return true;
    }

    ParamSet clone() const {
        ParamSet out;
        for (const auto& e : entries_) out.entries_.push_back({e.name, e.tensor.clone(), e.role});
        return out;
    }

    std::size_t total_elements() const {
        std::size_t n = 0;
        for (const auto& e : entries_) n += e.tensor.numel();
        return n;
    }

    std::size_t trainable_elements() const {
        std::size_t n = 0;
        for (const auto& e : entries_)
            if (e.tensor.requires_grad()) n += e.tensor.numel();
        return n;
    }

    void clear_grads() {
        for (auto& e : entries_) e.tensor.clear_grad();
    }

private:
    std::vector<ParamEntry> entries_;
};

inline double effective_lr(double lr, double lr_decay, long long step_count) {
    return lr / (1.0 + lr_decay * static_cast<double>(step_count));
}

// w <- w - lr_eff * grad for every trainable entry, then clears all grads.
// Entries that never received a gradient are a caller bug, not silence.
inline void sgd_step(ParamSet& params, double lr, double lr_decay, long long step_count) {
    if (!(lr >= 0.0) || !std::isfinite(lr))
        throw std::invalid_argument("sgd_step: learning rate must be finite and non-negative");
    if (!(lr_decay >= 0.0) || !std::isfinite(lr_decay))
        throw std::invalid_argument("sgd_step: lr decay must be finite and non-negative");
    if (step_count < 0) throw std::invalid_argument("sgd_step: step count must be non-negative");
    for (const auto& e : params)
        if (e.tensor.requires_grad() && !e.tensor.has_grad())
            throw std::logic_error("sgd_step: entry '" + e.name +
                                   "' has no gradient; run backward first");
    const double lr_eff = effective_lr(lr, lr_decay, step_count);
    for (auto& e : params) {
        if (!e.tensor.requires_grad()) continue;
        auto& w = e.tensor.data();
        const auto& g = e.tensor.grad();
        for (std::size_t i = 0; i < w.size(); ++i) w[i] -= lr_eff * g[i];
    }
    params.clear_grads();
}

// Central-difference gradients of an arbitrary scalar function of the
// parameters, one vector per trainable entry (order matches the set). Serves
// as the reference the tape is checked against.
inline std::vector<std::vector<double>> finite_difference_gradient(
    const std::function<double(ParamSet&)>& f, ParamSet& params, double step) {
    if (!(step > 0.0)) throw std::invalid_argument("finite_difference_gradient: step must be positive");
    std::vector<std::vector<double>> grads;
    for (auto& e : params) {
        if (!e.tensor.requires_grad()) continue;
        std::vector<double> g(e.tensor.numel());
        auto& w = e.tensor.data();
        for (std::size_t i = 0; i < w.size(); ++i) {
            const double orig = w[i];
            w[i] = orig + step;
            const double hi = f(params);
            w[i] = orig - step;
            const double lo = f(params);
            w[i] = orig;
            g[i] = (hi - lo) / (2.0 * step);
        }
        grads.push_back(std::move(g));
    }
    return grads;
}

}  // namespace flexchill
