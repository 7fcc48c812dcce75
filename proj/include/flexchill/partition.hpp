#pragma once

// Client partitioners. Both return disjoint index lists over the dataset;
// indices a scheme cannot place stay unassigned rather than being forced onto
// a client.

#include <algorithm>
#include <cstdint>
#include <numeric>
#include <string>
#include <vector>

#include "flexchill/data.hpp"
#include "flexchill/rng.hpp"

namespace flexchill {

struct ClientPartition {
    std::vector<std::vector<std::size_t>> assignments;  // one index list per client

    std::size_t num_clients() const { return assignments.size(); }

    std::size_t assigned_total() const {
        std::size_t n = 0;
        for (const auto& a : assignments) n += a.size();
        return n;
    }
};

// Label-sorted shard dealing: rows sort by (label, index), split into
// consecutive shards of `shard_size`, shards shuffle once, and every client
// draws `shards_per_client` of them. Leftover rows in a final partial shard
// stay unassigned.
inline ClientPartition partition_shards(const Dataset& ds, std::size_t num_clients,
                                        std::size_t shard_size, std::size_t shards_per_client,
                                        std::uint64_t seed) {
    if (num_clients == 0) throw std::invalid_argument("shards: need at least one client");
    if (shard_size == 0 || shards_per_client == 0)
        throw std::invalid_argument("shards: shard size and shards per client must be positive");
    const std::size_t needed = num_clients * shards_per_client;
    const std::size_t available = ds.size() / shard_size;
    if (needed > available)
        throw std::invalid_argument(
            "shards: need " + std::to_string(needed) + " shards of size " +
            std::to_string(shard_size) + " but only " + std::to_string(available) +
            " fit in " + std::to_string(ds.size()) + " samples");

    std::vector<std::size_t> order = ds.identity_order();
    std::stable_sort(order.begin(), order.end(),
                     [&](std::size_t a, std::size_t b) { return ds.labels[a] < ds.labels[b]; });

    std::vector<std::size_t> shard_ids(available);
    std::iota(shard_ids.begin(), shard_ids.end(), 0);
    Rng rng(seed, "shard-deal");
    shuffle(shard_ids, rng);

    ClientPartition part;
    part.assignments.resize(num_clients);
    std::size_t next = 0;
    for (std::size_t c = 0; c < num_clients; ++c) {
        auto& mine = part.assignments[c];
        mine.reserve(shards_per_client * shard_size);
        for (std::size_t s = 0; s < shards_per_client; ++s) {
            const std::size_t shard = shard_ids[next++];
            for (std::size_t i = 0; i < shard_size; ++i)
                mine.push_back(order[shard * shard_size + i]);
        }
        std::sort(mine.begin(), mine.end());
    }
    return part;
}

// Client-by-class proportion matrix for the Dirichlet scheme: row i is the
// draw p^(i) ~ Dir(alpha,...,alpha), then every class column is renormalized
// to sum to one across clients. Exposed so the allocation below is checkable
// against the exact matrix it used.
inline std::vector<std::vector<double>> dirichlet_class_proportions(std::size_t num_clients,
                                                                    std::size_t num_classes,
                                                                    double alpha,
                                                                    std::uint64_t seed) {
    if (num_clients == 0) throw std::invalid_argument("dirichlet: need at least one client");
    if (num_classes == 0) throw std::invalid_argument("dirichlet: need at least one class");
    if (!(alpha > 0.0)) throw std::invalid_argument("dirichlet: alpha must be positive");

    std::vector<std::vector<double>> p(num_clients);
    for (std::size_t i = 0; i < num_clients; ++i) {
        Rng rng(seed, "dirichlet-draw", i);
        p[i] = dirichlet(rng, alpha, num_classes);
    }
    for (std::size_t k = 0; k < num_classes; ++k) {
        double col = 0.0;
        for (std::size_t i = 0; i < num_clients; ++i) col += p[i][k];
        if (col <= 0.0) {
            for (std::size_t i = 0; i < num_clients; ++i) p[i][k] = 1.0 / static_cast<double>(num_clients);
        } else {
            for (std::size_t i = 0; i < num_clients; ++i) p[i][k] /= col;
        }
    }
    return p;
}

// Dirichlet label skew: client i takes floor(|class k| * p~_k^(i)) samples
// of class k from that class's shuffled pool, where p~ is the column-
// normalized draw above. Flooring remainders stay unassigned.
inline ClientPartition partition_dirichlet(const Dataset& ds, std::size_t num_clients,
                                           double alpha, std::uint64_t seed) {
    if (ds.num_classes == 0) throw std::invalid_argument("dirichlet: dataset has no classes");
    const auto p = dirichlet_class_proportions(num_clients, ds.num_classes, alpha, seed);

    std::vector<std::vector<std::size_t>> pools(ds.num_classes);
    for (std::size_t r = 0; r < ds.size(); ++r)
        pools[static_cast<std::size_t>(ds.labels[r])].push_back(r);
    for (std::size_t k = 0; k < pools.size(); ++k) {
        Rng rng(seed, "dirichlet-pool", k);
        shuffle(pools[k], rng);
    }

    ClientPartition part;
    part.assignments.resize(num_clients);
    for (std::size_t k = 0; k < ds.num_classes; ++k) {
        std::size_t cursor = 0;
        for (std::size_t i = 0; i < num_clients; ++i) {
            const std::size_t take = static_cast<std::size_t>(
                static_cast<double>(pools[k].size()) * p[i][k]);
            for (std::size_t t = 0; t < take && cursor < pools[k].size(); ++t)
                part.assignments[i].push_back(pools[k][cursor++]);
        }
    }
    for (auto& a : part.assignments) std::sort(a.begin(), a.end());
    return part;
}

// Plain shuffled round-robin deal; every client ends within one sample of
// N / num_clients.
inline ClientPartition partition_iid(const Dataset& ds, std::size_t num_clients,
                                     std::uint64_t seed) {
    if (num_clients == 0) throw std::invalid_argument("iid: need at least one client");
    std::vector<std::size_t> order = ds.identity_order();
    Rng rng(seed, "iid-deal");
    shuffle(order, rng);
    ClientPartition part;
    part.assignments.resize(num_clients);
    for (std::size_t i = 0; i < order.size(); ++i)
        part.assignments[i % num_clients].push_back(order[i]);
    for (auto& a : part.assignments) std::sort(a.begin(), a.end());
    return part;
}

}  // namespace flexchill
