#pragma once

#include <algorithm>
#include <limits>
#include <optional>
#include <span>
#include <vector>

#include "semot/core.hpp"
#include "semot/transport.hpp"

namespace semot {

struct EmptySources : Error {
    using Error::Error;
};
struct NegativeEpsilon : Error {
    using Error::Error;
};

/// Outcome of matching one target feature against a source feature set.
/// `margin` is the gap to the runner-up among the candidates that were
/// actually evaluated (a lower-fidelity proxy for the population margin);
/// it is +inf when only one candidate was evaluated.
struct MatchResult {
    FeatureRef target;
    FeatureRef matched;
    double distance = 0.0;
    double margin = 0.0;
    std::size_t candidates_evaluated = 0;
    bool certified = false;
};

/// True iff margin > 2 * epsilon, the sufficient recovery condition. A false
/// result does not imply the match is wrong. For combined distribution and
/// cost perturbations pass epsilon = delta_ij + eps_c.
inline bool certify_match(const MatchResult& result, double epsilon) {
    if (epsilon < 0.0) throw NegativeEpsilon("epsilon must be nonnegative");
    return result.margin > 2.0 * epsilon;
}

/// Indices of the top_n sources whose centroids are ground-cost closest to
/// the target centroid. Ties break by ascending source index.
inline std::vector<std::size_t> prefilter_candidates(const Vec& target_centroid,
                                                     const std::vector<Vec>& source_centroids,
                                                     const GroundCost& cost,
                                                     std::size_t top_n = 50) {
    std::vector<std::pair<double, std::size_t>> scored;
    scored.reserve(source_centroids.size());
    for (std::size_t s = 0; s < source_centroids.size(); ++s)
        scored.push_back({cost(target_centroid, source_centroids[s]), s});
    std::stable_sort(scored.begin(), scored.end(), [](const auto& a, const auto& b) {
        if (a.first != b.first) return a.first < b.first;
        return a.second < b.second;
    });
    if (scored.size() > top_n) scored.resize(top_n);
    std::vector<std::size_t> out;
    out.reserve(scored.size());
    for (const auto& [_, s] : scored) out.push_back(s);
    return out;
}

struct MatchOptions {
    std::size_t k = 32;
    std::size_t top_n = 50;
    GroundCost cost = GroundCost::euclidean();
    Solver solver{};
    std::optional<double> epsilon;  // certification threshold, if any
};

/// Matches one target feature: projects target and sources into the target
/// layer's space, prefilters by centroid distance, evaluates the transport
/// distance to each survivor, and returns the argmin with its margin.
/// `spec` must be target-layer alignment at the target's own layer.
inline MatchResult match_feature(const HiddenStateStore& store, const ActivationTable& table,
                                 FeatureRef target, std::span<const FeatureRef> sources,
                                 const ProjectionSpec& spec, const MatchOptions& opt = {}) {
    if (sources.empty()) throw EmptySources("no source features");
    if (spec.mode != ProjectionMode::TargetLayerAlignment || !spec.target_layer ||
        *spec.target_layer != target.layer)
        throw Error("matching requires target-layer alignment at the target's layer");

    const EmpiricalDistribution target_dist =
        build_distribution(store, target, table, opt.k, spec);
    const Vec target_c = centroid(target_dist);

    std::vector<EmpiricalDistribution> source_dists;
    source_dists.reserve(sources.size());
    std::vector<Vec> source_centroids;
    source_centroids.reserve(sources.size());
    for (const FeatureRef s : sources) {
        source_dists.push_back(build_distribution(store, s, table, opt.k, spec));
        source_centroids.push_back(centroid(source_dists.back()));
    }

    const auto survivors = prefilter_candidates(target_c, source_centroids, opt.cost, opt.top_n);

    std::vector<std::pair<std::size_t, double>> evaluated;  // (source idx, distance)
    evaluated.reserve(survivors.size());
    for (const std::size_t s : survivors)
        evaluated.push_back({s, wasserstein(opt.cost, target_dist, source_dists[s], opt.solver)});

    std::size_t best_idx = evaluated.front().first;
    double best = evaluated.front().second;
    for (const auto& [s, d] : evaluated)
        if (d < best || (d == best && s < best_idx)) {
            best = d;
            best_idx = s;
        }
    double second = std::numeric_limits<double>::infinity();
    for (const auto& [s, d] : evaluated)
        if (s != best_idx) second = std::min(second, d);

    MatchResult result;
    result.target = target;
    result.matched = sources[best_idx];
    result.distance = best;
    result.margin = std::isinf(second) ? second : second - best;
    result.candidates_evaluated = survivors.size();
    result.certified = opt.epsilon ? certify_match(result, *opt.epsilon) : false;
    return result;
}

/// Matches every target-layer feature present in the table against all
/// source-layer features. Targets are processed independently (optionally in
/// parallel); output order follows ascending target index.
inline std::vector<MatchResult> match_layer(const HiddenStateStore& store,
                                            const ActivationTable& table,
                                            std::uint32_t target_layer, std::uint32_t source_layer,
                                            const MatchOptions& opt = {},
                                            std::size_t threads = 1) {
    const auto targets = table.features_at_layer(target_layer);
    const auto sources = table.features_at_layer(source_layer);
    if (sources.empty()) throw EmptySources("no source features at layer");
    const ProjectionSpec spec = ProjectionSpec::target(target_layer);
    std::vector<MatchResult> results(targets.size());
    parallel_for(targets.size(), threads, [&](std::size_t i) {
        results[i] = match_feature(store, table, targets[i], sources, spec, opt);
    });
    return results;
}

}  // namespace semot
