#pragma once

#include <algorithm>
#include <cmath>
#include <compare>
#include <cstdint>
#include <map>
#include <optional>
#include <span>
#include <utility>
#include <vector>

#include "semot/common.hpp"

namespace semot {

/// Identity of an SAE feature: (layer, index within that layer's dictionary).
struct FeatureRef {
    std::uint32_t layer = 0;
    std::uint32_t index = 0;
    auto operator<=>(const FeatureRef&) const = default;
};

/// One observed activation of a feature at a token position. Values are
/// nonnegative; zero-valued events are kept for fidelity but never selected.
struct ActivationEvent {
    FeatureRef feature;
    std::uint32_t token = 0;
    double value = 0.0;
};

struct DeadFeature : Error {
    using Error::Error;
};
struct EmptyInput : Error {
    using Error::Error;
};
struct NonPositiveValue : Error {
    using Error::Error;
};
struct LayerMismatch : Error {
    using Error::Error;
};
struct NonFiniteValue : Error {
    using Error::Error;
};

/// Token-aligned hidden states for every layer of a corpus. Layer l holds a
/// row-major (tokens x dim_l) block; token t means the same corpus position
/// in every layer.
class HiddenStateStore {
  public:
    HiddenStateStore() = default;

    /// Appends a layer. `flat` is row-major with tokens*dim entries; the
    /// token count must match layers added before.
    void add_layer(std::size_t dim, std::vector<double> flat) {
        if (dim == 0) throw Error("layer dimension must be positive");
        if (flat.size() % dim != 0) throw Error("flat state size not a multiple of dim");
        const std::size_t t = flat.size() / dim;
        if (!dims_.empty() && t != tokens_)
            throw Error("token count mismatch across layers: " + std::to_string(t) + " vs " +
                        std::to_string(tokens_));
        for (double v : flat)
            if (!std::isfinite(v)) throw NonFiniteValue("non-finite hidden state value");
        tokens_ = t;
        dims_.push_back(dim);
        states_.push_back(std::move(flat));
    }

    std::size_t layer_count() const { return dims_.size(); }
    std::size_t tokens() const { return tokens_; }

    std::size_t dim(std::size_t layer) const {
        check_layer(layer);
        return dims_[layer];
    }

    /// Hidden vector of token `t` at `layer`.
    std::span<const double> state(std::size_t layer, std::size_t token) const {
        check_layer(layer);
        if (token >= tokens_) throw Error("token index out of range");
        return {states_[layer].data() + token * dims_[layer], dims_[layer]};
    }

    const std::vector<double>& layer_data(std::size_t layer) const {
        check_layer(layer);
        return states_[layer];
    }

    std::size_t total_dim() const {
        std::size_t d = 0;
        for (std::size_t x : dims_) d += x;
        return d;
    }

    bool operator==(const HiddenStateStore& o) const {
        return dims_ == o.dims_ && states_ == o.states_;
    }

  private:
    void check_layer(std::size_t layer) const {
        if (layer >= dims_.size())
            throw LayerMismatch("layer " + std::to_string(layer) + " not present in store");
    }

    std::vector<std::size_t> dims_;
    std::vector<std::vector<double>> states_;  // per layer, row-major tokens x dim
    std::size_t tokens_ = 0;
};

/// Sparse per-feature activation records over a corpus.
class ActivationTable {
  public:
    void add(const ActivationEvent& e) {
        if (e.value < 0.0) throw NonPositiveValue("negative activation value");
        if (!std::isfinite(e.value)) throw NonFiniteValue("non-finite activation value");
        events_[e.feature].push_back({e.token, e.value});
    }

    bool has(FeatureRef f) const { return events_.count(f) != 0; }

    /// (token, value) pairs in insertion order; empty if the feature never fired.
    std::span<const std::pair<std::uint32_t, double>> events_for(FeatureRef f) const {
        static const std::vector<std::pair<std::uint32_t, double>> empty;
        auto it = events_.find(f);
        return it == events_.end() ? std::span<const std::pair<std::uint32_t, double>>(empty)
                                   : std::span<const std::pair<std::uint32_t, double>>(it->second);
    }

    std::vector<FeatureRef> features() const {
        std::vector<FeatureRef> out;
        out.reserve(events_.size());
        for (const auto& [f, _] : events_) out.push_back(f);
        return out;
    }

    std::vector<FeatureRef> features_at_layer(std::uint32_t layer) const {
        std::vector<FeatureRef> out;
        for (const auto& [f, _] : events_)
            if (f.layer == layer) out.push_back(f);
        return out;
    }

    /// Events flattened in insertion order per feature, features ordered by id.
    std::vector<ActivationEvent> all_events() const {
        std::vector<ActivationEvent> out;
        for (const auto& [f, evs] : events_)
            for (const auto& [t, v] : evs) out.push_back({f, t, v});
        return out;
    }

  private:
    std::map<FeatureRef, std::vector<std::pair<std::uint32_t, double>>> events_;
};

/// Weighted finite set of support points in a common reference space.
/// Weights are strictly positive and sum to one.
struct EmpiricalDistribution {
    std::vector<Vec> support;
    Vec weights;

    std::size_t size() const { return support.size(); }
    std::size_t dim() const { return support.empty() ? 0 : support.front().size(); }

    void validate(double tol = 1e-9) const {
        if (support.empty()) throw Error("empty distribution");
        if (support.size() != weights.size()) throw Error("support/weight length mismatch");
        const std::size_t d = support.front().size();
        double sum = 0.0;
        for (std::size_t i = 0; i < weights.size(); ++i) {
            if (support[i].size() != d) throw DimensionMismatch("ragged support");
            if (!(weights[i] > 0.0)) throw NonPositiveValue("non-positive weight");
            sum += weights[i];
        }
        if (std::abs(sum - 1.0) > tol) throw Error("weights do not sum to 1");
    }
};

/// How layer-local support points are mapped into the shared reference space.
enum class ProjectionMode {
    Identity,              // keep the feature's own layer vectors
    TargetLayerAlignment,  // same token, representation taken at target_layer
    AllLayerConcatenation  // concatenation of every layer's vector at the token
};

struct ProjectionSpec {
    ProjectionMode mode = ProjectionMode::Identity;
    std::optional<std::uint32_t> target_layer;

    static ProjectionSpec identity() { return {ProjectionMode::Identity, std::nullopt}; }
    static ProjectionSpec target(std::uint32_t layer) {
        return {ProjectionMode::TargetLayerAlignment, layer};
    }
    static ProjectionSpec concat_all() {
        return {ProjectionMode::AllLayerConcatenation, std::nullopt};
    }
};

namespace detail {

/// Shared top-K logic over sparse (token, value) pairs. Only strictly
/// positive activations are eligible. Order: descending value, then
/// ascending token.
inline std::vector<std::pair<std::uint32_t, double>> topk_events(
    std::span<const std::pair<std::uint32_t, double>> events, std::size_t k) {
    std::vector<std::pair<std::uint32_t, double>> positive;
    positive.reserve(events.size());
    for (const auto& e : events)
        if (e.second > 0.0) positive.push_back(e);
    if (positive.empty()) throw DeadFeature("feature has no positive activation");
    std::sort(positive.begin(), positive.end(), [](const auto& a, const auto& b) {
        if (a.second != b.second) return a.second > b.second;
        return a.first < b.first;
    });
    if (positive.size() > k) positive.resize(k);
    return positive;
}

}  // namespace detail

/// Token indices of the K largest strictly-positive activations.
/// `values[t]` is the activation at token t. Ties break by ascending token
/// index; fewer than K positives returns all of them.
inline std::vector<std::uint32_t> topk_select(const Vec& values, std::size_t k) {
    if (k == 0) throw Error("K must be positive");
    std::vector<std::pair<std::uint32_t, double>> pairs;
    pairs.reserve(values.size());
    for (std::size_t t = 0; t < values.size(); ++t)
        pairs.push_back({static_cast<std::uint32_t>(t), values[t]});
    auto picked = detail::topk_events(pairs, k);
    std::vector<std::uint32_t> out;
    out.reserve(picked.size());
    for (const auto& [t, _] : picked) out.push_back(t);
    return out;
}

/// w_t = a_t / sum(a). Input order is preserved.
inline Vec normalize_weights(const Vec& activations) {
    if (activations.empty()) throw EmptyInput("no activations to normalize");
    double sum = 0.0;
    for (double a : activations) {
        if (!(a > 0.0)) throw NonPositiveValue("activation must be strictly positive");
        sum += a;
    }
    Vec out(activations.size());
    for (std::size_t i = 0; i < activations.size(); ++i) out[i] = activations[i] / sum;
    return out;
}

/// Reference-space representation of token `t` for a feature living at
/// `feature_layer`, under the given projection.
inline Vec project_token(const HiddenStateStore& store, std::uint32_t feature_layer,
                         std::uint32_t token, const ProjectionSpec& spec) {
    switch (spec.mode) {
        case ProjectionMode::Identity: {
            auto s = store.state(feature_layer, token);
            return Vec(s.begin(), s.end());
        }
        case ProjectionMode::TargetLayerAlignment: {
            if (!spec.target_layer) throw Error("target-layer-alignment requires target_layer");
            auto s = store.state(*spec.target_layer, token);
            return Vec(s.begin(), s.end());
        }
        case ProjectionMode::AllLayerConcatenation: {
            Vec out;
            out.reserve(store.total_dim());
            for (std::size_t l = 0; l < store.layer_count(); ++l) {
                auto s = store.state(l, token);
                out.insert(out.end(), s.begin(), s.end());
            }
            return out;
        }
    }
    throw Error("unknown projection mode");
}

/// Builds the activation-weighted empirical distribution of one feature:
/// top-K token selection, weight normalization, and projection of each
/// selected token into the reference space.
inline EmpiricalDistribution build_distribution(const HiddenStateStore& store, FeatureRef feature,
                                                const ActivationTable& table, std::size_t k,
                                                const ProjectionSpec& spec) {
    if (feature.layer >= store.layer_count())
        throw LayerMismatch("feature layer not present in store");
    if (spec.mode == ProjectionMode::TargetLayerAlignment && spec.target_layer &&
        *spec.target_layer >= store.layer_count())
        throw LayerMismatch("projection target layer not present in store");

    auto picked = detail::topk_events(table.events_for(feature), k);

    Vec acts;
    acts.reserve(picked.size());
    for (const auto& [_, v] : picked) acts.push_back(v);

    EmpiricalDistribution dist;
    dist.weights = normalize_weights(acts);
    dist.support.reserve(picked.size());
    for (const auto& [t, _] : picked)
        dist.support.push_back(project_token(store, feature.layer, t, spec));
    return dist;
}

/// Selected token indices of build_distribution, in selection order.
inline std::vector<std::uint32_t> selected_tokens(const ActivationTable& table, FeatureRef feature,
                                                  std::size_t k) {
    auto picked = detail::topk_events(table.events_for(feature), k);
    std::vector<std::uint32_t> out;
    out.reserve(picked.size());
    for (const auto& [t, _] : picked) out.push_back(t);
    return out;
}

/// Activation-weighted mean of the support.
inline Vec centroid(const EmpiricalDistribution& dist) {
    dist.validate();
    Vec c(dist.dim(), 0.0);
    for (std::size_t i = 0; i < dist.size(); ++i)
        for (std::size_t j = 0; j < c.size(); ++j) c[j] += dist.weights[i] * dist.support[i][j];
    return c;
}

}  // namespace semot
