#pragma once

#include <algorithm>
#include <cstdint>
#include <limits>
#include <map>
#include <set>
#include <span>
#include <vector>

#include <Eigen/Dense>

#include "semot/core.hpp"
#include "semot/rng.hpp"
#include "semot/transport.hpp"

namespace semot {

struct InvalidClusterCount : Error {
    using Error::Error;
};
struct UnknownNode : Error {
    using Error::Error;
};
struct DisconnectedAndOverclustered : Error {
    using Error::Error;
};

/// Symmetric pairwise distance table over identified circuit nodes.
struct DistanceMatrix {
    std::vector<FeatureRef> ids;
    Matrix entries;  // n x n, zero diagonal

    std::size_t size() const { return ids.size(); }

    std::size_t index_of(FeatureRef f) const {
        for (std::size_t i = 0; i < ids.size(); ++i)
            if (ids[i] == f) return i;
        throw UnknownNode("node not present in distance matrix");
    }

    void validate(double tol = 1e-9) const {
        if (entries.rows() != ids.size() || entries.cols() != ids.size())
            throw Error("distance matrix shape mismatch");
        if (!entries.all_finite()) throw Error("distance matrix must be finite");
        for (std::size_t i = 0; i < ids.size(); ++i) {
            if (entries(i, i) != 0.0) throw Error("distance matrix diagonal must be zero");
            for (std::size_t j = i + 1; j < ids.size(); ++j)
                if (std::abs(entries(i, j) - entries(j, i)) > tol)
                    throw Error("distance matrix not symmetric");
        }
    }
};

/// Disjoint cover of circuit nodes by labeled supernodes, with the
/// within-group mean-distance objective it achieves.
struct SupernodePartition {
    std::vector<std::vector<FeatureRef>> groups;
    double objective = 0.0;
};

/// Mean within-group distance objective: each group contributes the mean of
/// D(u,v) over its ordered pairs; singletons contribute zero.
inline double eq5_objective(const DistanceMatrix& d,
                            const std::vector<std::vector<FeatureRef>>& groups) {
    double total = 0.0;
    for (const auto& group : groups) {
        if (group.size() < 2) continue;
        std::vector<std::size_t> idx;
        idx.reserve(group.size());
        for (const FeatureRef f : group) idx.push_back(d.index_of(f));
        double sum = 0.0;
        for (std::size_t a = 0; a < idx.size(); ++a)
            for (std::size_t b = 0; b < idx.size(); ++b)
                if (a != b) sum += d.entries(idx[a], idx[b]);
        total += sum / (static_cast<double>(group.size()) *
                        static_cast<double>(group.size() - 1));
    }
    return total;
}

struct PairwiseOptions {
    std::size_t k = 32;
    ProjectionSpec projection = ProjectionSpec::concat_all();
    GroundCost cost = GroundCost::euclidean();
    Solver solver{};
    std::size_t threads = 1;
};

struct PairwiseDistances {
    DistanceMatrix matrix;
    std::vector<FeatureRef> dropped;  // dead nodes, excluded from the matrix
};

/// Pairwise transport distances over circuit nodes. Dead nodes (no positive
/// activation) are dropped and reported. Both solve directions are averaged
/// so solver asymmetry cannot leak into the matrix; the diagonal is zero by
/// construction.
inline PairwiseDistances pairwise_distances(const HiddenStateStore& store,
                                            const ActivationTable& table,
                                            std::span<const FeatureRef> nodes,
                                            const PairwiseOptions& opt = {}) {
    if (nodes.size() < 2) throw Error("need at least two nodes");
    {
        std::set<FeatureRef> unique(nodes.begin(), nodes.end());
        if (unique.size() != nodes.size()) throw Error("duplicate node in list");
    }

    PairwiseDistances out;
    std::vector<EmpiricalDistribution> dists;
    for (const FeatureRef f : nodes) {
        try {
            dists.push_back(build_distribution(store, f, table, opt.k, opt.projection));
            out.matrix.ids.push_back(f);
        } catch (const DeadFeature&) {
            out.dropped.push_back(f);
        }
    }
    const std::size_t n = out.matrix.ids.size();
    if (n < 2) throw Error("fewer than two live nodes");
    out.matrix.entries = Matrix(n, n);

    std::vector<std::pair<std::uint32_t, std::uint32_t>> pairs;
    pairs.reserve(n * (n - 1) / 2);
    for (std::uint32_t i = 0; i < n; ++i)
        for (std::uint32_t j = i + 1; j < n; ++j) pairs.push_back({i, j});

    parallel_for(pairs.size(), opt.threads, [&](std::size_t p) {
        const auto [i, j] = pairs[p];
        const double dij = wasserstein(opt.cost, dists[i], dists[j], opt.solver);
        const double dji = wasserstein(opt.cost, dists[j], dists[i], opt.solver);
        const double d = 0.5 * (dij + dji);
        out.matrix.entries(i, j) = d;
        out.matrix.entries(j, i) = d;
    });
    return out;
}

/// Bottom-up average-linkage clustering on a precomputed distance matrix,
/// merging until `m` clusters remain. Merge ties break on the smallest
/// (i, j) pair of active cluster positions. Groups are canonicalized:
/// members ascending, groups ordered by first member.
inline SupernodePartition agglomerate(const DistanceMatrix& d, std::size_t m) {
    d.validate();
    const std::size_t n = d.size();
    if (m < 1 || m > n) throw InvalidClusterCount("cluster count must be in [1, n]");

    std::vector<std::vector<std::size_t>> members(n);
    for (std::size_t i = 0; i < n; ++i) members[i] = {i};
    // Working copy of cluster-to-cluster average distances.
    std::vector<std::vector<double>> dist(n, std::vector<double>(n));
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < n; ++j) dist[i][j] = d.entries(i, j);

    while (members.size() > m) {
        std::size_t bi = 0, bj = 1;
        double best = std::numeric_limits<double>::infinity();
        for (std::size_t i = 0; i < members.size(); ++i)
            for (std::size_t j = i + 1; j < members.size(); ++j)
                if (dist[i][j] < best) {
                    best = dist[i][j];
                    bi = i;
                    bj = j;
                }
        const double wi = static_cast<double>(members[bi].size());
        const double wj = static_cast<double>(members[bj].size());
        for (std::size_t t = 0; t < members.size(); ++t) {
            if (t == bi || t == bj) continue;
            const double merged = (wi * dist[bi][t] + wj * dist[bj][t]) / (wi + wj);
            dist[bi][t] = merged;
            dist[t][bi] = merged;
        }
        members[bi].insert(members[bi].end(), members[bj].begin(), members[bj].end());
        members.erase(members.begin() + static_cast<std::ptrdiff_t>(bj));
        for (auto& row : dist) row.erase(row.begin() + static_cast<std::ptrdiff_t>(bj));
        dist.erase(dist.begin() + static_cast<std::ptrdiff_t>(bj));
    }

    SupernodePartition part;
    part.groups.reserve(members.size());
    for (auto& g : members) {
        std::sort(g.begin(), g.end());
        std::vector<FeatureRef> refs;
        refs.reserve(g.size());
        for (std::size_t i : g) refs.push_back(d.ids[i]);
        part.groups.push_back(std::move(refs));
    }
    std::sort(part.groups.begin(), part.groups.end(),
              [](const auto& a, const auto& b) { return a.front() < b.front(); });
    part.objective = eq5_objective(d, part.groups);
    return part;
}

/// Expected-distance assignment of a distribution to the nearest of a set of
/// centers (euclidean base metric). gamma is the score gap to the closest
/// competing center.
struct VoronoiAssignment {
    Vec scores;
    std::size_t assigned = 0;
    double gamma = 0.0;
};

inline VoronoiAssignment voronoi_assign(const EmpiricalDistribution& dist,
                                        const std::vector<Vec>& centers) {
    dist.validate();
    if (centers.size() < 2) throw Error("need at least two centers");
    for (const Vec& c : centers)
        if (c.size() != dist.dim()) throw DimensionMismatch("center dimension mismatch");

    VoronoiAssignment va;
    va.scores.resize(centers.size());
    for (std::size_t k = 0; k < centers.size(); ++k) {
        double q = 0.0;
        for (std::size_t t = 0; t < dist.size(); ++t)
            q += dist.weights[t] * l2_dist(dist.support[t], centers[k]);
        va.scores[k] = q;
    }
    va.assigned = 0;
    for (std::size_t k = 1; k < centers.size(); ++k)
        if (va.scores[k] < va.scores[va.assigned]) va.assigned = k;
    va.gamma = std::numeric_limits<double>::infinity();
    for (std::size_t k = 0; k < centers.size(); ++k)
        if (k != va.assigned) va.gamma = std::min(va.gamma, va.scores[k] - va.scores[va.assigned]);
    return va;
}

/// One representative point per supernode: the mean of the member
/// distributions' centroids.
inline std::vector<Vec> supernode_centers(
    const SupernodePartition& part,
    const std::map<FeatureRef, EmpiricalDistribution>& distributions) {
    std::vector<Vec> centers;
    centers.reserve(part.groups.size());
    for (const auto& group : part.groups) {
        if (group.empty()) throw Error("empty supernode");
        Vec acc;
        for (const FeatureRef f : group) {
            auto it = distributions.find(f);
            if (it == distributions.end()) throw UnknownNode("no distribution for node");
            const Vec c = centroid(it->second);
            if (acc.empty()) acc.assign(c.size(), 0.0);
            for (std::size_t j = 0; j < c.size(); ++j) acc[j] += c[j];
        }
        for (double& x : acc) x /= static_cast<double>(group.size());
        centers.push_back(std::move(acc));
    }
    return centers;
}

namespace detail {

/// Lloyd k-means with k-means++ seeding; fixed restarts, best inertia wins.
inline std::vector<std::size_t> kmeans(const std::vector<Vec>& points, std::size_t k,
                                       std::uint64_t seed, std::size_t restarts = 50) {
    const std::size_t n = points.size();
    Rng rng(seed);
    std::vector<std::size_t> best_assign(n, 0);
    double best_inertia = std::numeric_limits<double>::infinity();

    for (std::size_t r = 0; r < restarts; ++r) {
        std::vector<Vec> centers;
        centers.reserve(k);
        centers.push_back(points[rng.uniform_int(n)]);
        Vec d2(n);
        while (centers.size() < k) {
            double total = 0.0;
            for (std::size_t i = 0; i < n; ++i) {
                double best_d = std::numeric_limits<double>::infinity();
                for (const Vec& c : centers) best_d = std::min(best_d, sq_dist(points[i], c));
                d2[i] = best_d;
                total += best_d;
            }
            if (total <= 0.0) {
                // Fewer distinct points than centers; reuse an existing point.
                centers.push_back(points[rng.uniform_int(n)]);
                continue;
            }
            double target = rng.uniform() * total;
            std::size_t pick = n - 1;
            for (std::size_t i = 0; i < n; ++i) {
                target -= d2[i];
                if (target <= 0.0) {
                    pick = i;
                    break;
                }
            }
            centers.push_back(points[pick]);
        }

        std::vector<std::size_t> assign(n, 0);
        for (std::size_t it = 0; it < 100; ++it) {
            bool changed = false;
            for (std::size_t i = 0; i < n; ++i) {
                std::size_t bestc = 0;
                double bestd = std::numeric_limits<double>::infinity();
                for (std::size_t c = 0; c < k; ++c) {
                    const double dd = sq_dist(points[i], centers[c]);
                    if (dd < bestd) {
                        bestd = dd;
                        bestc = c;
                    }
                }
                if (assign[i] != bestc) {
                    assign[i] = bestc;
                    changed = true;
                }
            }
            for (std::size_t c = 0; c < k; ++c) {
                Vec mean(points[0].size(), 0.0);
                std::size_t count = 0;
                for (std::size_t i = 0; i < n; ++i)
                    if (assign[i] == c) {
                        for (std::size_t j = 0; j < mean.size(); ++j) mean[j] += points[i][j];
                        ++count;
                    }
                if (count > 0) {
                    for (double& x : mean) x /= static_cast<double>(count);
                    centers[c] = mean;
                }
            }
            if (!changed) break;
        }
        double inertia = 0.0;
        for (std::size_t i = 0; i < n; ++i) inertia += sq_dist(points[i], centers[assign[i]]);
        if (inertia < best_inertia) {
            best_inertia = inertia;
            best_assign = assign;
        }
    }
    return best_assign;
}

}  // namespace detail

/// Groups nodes that repeatedly land in the same supernode across many
/// partitions. Affinity is the Jaccard co-occurrence ratio
/// co / (cnt_u + cnt_v - co); edges below `min_cooccurrence` are dropped.
/// The affinity graph is clustered by normalized-Laplacian spectral
/// embedding followed by seeded k-means (seed 0, k-means++ init, 50
/// restarts, best inertia).
inline std::vector<std::vector<FeatureRef>> modular_groups(
    std::span<const SupernodePartition> partitions, std::size_t n_groups,
    std::size_t min_cooccurrence = 0) {
    if (partitions.size() < 2) throw Error("need at least two partitions");
    if (n_groups == 0) throw Error("need at least one group");

    std::set<FeatureRef> universe;
    for (const auto& part : partitions)
        for (const auto& group : part.groups)
            for (const FeatureRef f : group) universe.insert(f);
    const std::vector<FeatureRef> nodes(universe.begin(), universe.end());
    const std::size_t n = nodes.size();
    if (n_groups > n) throw Error("more groups than nodes");

    std::map<FeatureRef, std::size_t> pos;
    for (std::size_t i = 0; i < n; ++i) pos[nodes[i]] = i;

    std::vector<std::size_t> cnt(n, 0);
    Matrix co(n, n, 0.0);
    for (const auto& part : partitions) {
        for (const auto& group : part.groups) {
            for (std::size_t a = 0; a < group.size(); ++a) {
                const std::size_t ia = pos[group[a]];
                ++cnt[ia];
                for (std::size_t b = a + 1; b < group.size(); ++b) {
                    const std::size_t ib = pos[group[b]];
                    co(ia, ib) += 1.0;
                    co(ib, ia) += 1.0;
                }
            }
        }
    }

    Matrix affinity(n, n, 0.0);
    for (std::size_t i = 0; i < n; ++i) {
        affinity(i, i) = 1.0;
        for (std::size_t j = i + 1; j < n; ++j) {
            const double c = co(i, j);
            if (c < static_cast<double>(min_cooccurrence)) continue;
            const double denom = static_cast<double>(cnt[i] + cnt[j]) - c;
            const double jac = denom > 0.0 ? c / denom : 0.0;
            affinity(i, j) = jac;
            affinity(j, i) = jac;
        }
    }

    // Connected components over nonzero off-diagonal affinity.
    std::vector<std::size_t> comp(n, SIZE_MAX);
    std::size_t n_comp = 0;
    for (std::size_t s = 0; s < n; ++s) {
        if (comp[s] != SIZE_MAX) continue;
        std::vector<std::size_t> stack{s};
        comp[s] = n_comp;
        while (!stack.empty()) {
            const std::size_t u = stack.back();
            stack.pop_back();
            for (std::size_t v = 0; v < n; ++v)
                if (v != u && affinity(u, v) > 0.0 && comp[v] == SIZE_MAX) {
                    comp[v] = n_comp;
                    stack.push_back(v);
                }
        }
        ++n_comp;
    }
    if (n_comp > 1 && n_groups > n_comp)
        throw DisconnectedAndOverclustered("affinity graph has " + std::to_string(n_comp) +
                                           " components, fewer than requested groups");

    // Normalized Laplacian spectral embedding.
    Eigen::MatrixXd lap(n, n);
    Vec dinv(n);
    for (std::size_t i = 0; i < n; ++i) {
        double deg = 0.0;
        for (std::size_t j = 0; j < n; ++j) deg += affinity(i, j);
        dinv[i] = deg > 0.0 ? 1.0 / std::sqrt(deg) : 0.0;
    }
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < n; ++j)
            lap(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)) =
                (i == j ? 1.0 : 0.0) - dinv[i] * affinity(i, j) * dinv[j];

    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> eig(lap);
    if (eig.info() != Eigen::Success) throw Error("spectral decomposition failed");

    std::vector<Vec> rows(n, Vec(n_groups, 0.0));
    for (std::size_t i = 0; i < n; ++i) {
        double norm = 0.0;
        for (std::size_t k = 0; k < n_groups; ++k) {
            const double v = eig.eigenvectors()(static_cast<Eigen::Index>(i),
                                                static_cast<Eigen::Index>(k));
            rows[i][k] = v;
            norm += v * v;
        }
        if (norm > 0.0) {
            norm = std::sqrt(norm);
            for (double& v : rows[i]) v /= norm;
        }
    }

    const auto assign = detail::kmeans(rows, n_groups, /*seed=*/0);

    std::vector<std::vector<FeatureRef>> groups(n_groups);
    for (std::size_t i = 0; i < n; ++i) groups[assign[i]].push_back(nodes[i]);
    groups.erase(std::remove_if(groups.begin(), groups.end(),
                                [](const auto& g) { return g.empty(); }),
                 groups.end());
    std::sort(groups.begin(), groups.end(),
              [](const auto& a, const auto& b) { return a.front() < b.front(); });
    return groups;
}

}  // namespace semot
