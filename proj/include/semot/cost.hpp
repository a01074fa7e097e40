#pragma once

#include <cmath>
#include <functional>
#include <utility>

#include "semot/common.hpp"
#include "semot/core.hpp"

namespace semot {

struct CosineNormViolation : Error {
    using Error::Error;
};

using CostMatrix = Matrix;

/// Ground cost c(z, z') on the reference space.
///
/// flow_composite combines a squared positional term with a squared
/// directional term averaged over M field evaluations:
///   c(z,z') = lambda_x * |z - z'|^2 + lambda_u * (1/M) * sum_m |q_m(z) - q_m(z')|^2
/// The field callable returns the already-normalized q_m(z) (norm <= 1);
/// eps_norm records the normalization floor the caller used.
class GroundCost {
  public:
    enum class Kind { Euclidean, SquaredEuclidean, Mahalanobis, Cosine, FlowComposite };
    using Field = std::function<Vec(const Vec&, std::size_t)>;

    static GroundCost euclidean() { return GroundCost(Kind::Euclidean); }
    static GroundCost squared_euclidean() { return GroundCost(Kind::SquaredEuclidean); }

    static GroundCost mahalanobis(Matrix a) {
        if (!a.all_finite()) throw Error("mahalanobis matrix must be finite");
        GroundCost c(Kind::Mahalanobis);
        c.mahalanobis_a_ = std::move(a);
        return c;
    }

    static GroundCost cosine(double min_norm) {
        if (!(min_norm > 0.0)) throw Error("cosine min norm must be positive");
        GroundCost c(Kind::Cosine);
        c.cosine_min_norm_ = min_norm;
        return c;
    }

    static GroundCost flow_composite(double lambda_x, double lambda_u, std::size_t terms,
                                     Field field, double eps_norm = 1e-8) {
        if (lambda_x < 0.0 || lambda_u < 0.0) throw Error("flow weights must be nonnegative");
        if (terms == 0) throw Error("flow cost needs at least one field term");
        GroundCost c(Kind::FlowComposite);
        c.lambda_x_ = lambda_x;
        c.lambda_u_ = lambda_u;
        c.field_terms_ = terms;
        c.field_ = std::move(field);
        c.eps_norm_ = eps_norm;
        return c;
    }

    Kind kind() const { return kind_; }
    double lambda_x() const { return lambda_x_; }
    double lambda_u() const { return lambda_u_; }
    std::size_t field_terms() const { return field_terms_; }
    double cosine_min_norm() const { return cosine_min_norm_; }

    double operator()(const Vec& z, const Vec& zp) const {
        if (z.size() != zp.size()) throw DimensionMismatch("cost points differ in dimension");
        switch (kind_) {
            case Kind::Euclidean:
                return l2_dist(z, zp);
            case Kind::SquaredEuclidean:
                return sq_dist(z, zp);
            case Kind::Mahalanobis:
                return mahalanobis_dist(z, zp);
            case Kind::Cosine:
                return cosine_cost(z, zp);
            case Kind::FlowComposite:
                return flow_cost(z, zp);
        }
        throw Error("unknown cost kind");
    }

    /// Pairwise cost matrix between two distributions. Field evaluations are
    /// cached per support point so each point is visited once.
    CostMatrix matrix(const EmpiricalDistribution& mu, const EmpiricalDistribution& nu) const {
        if (mu.dim() != nu.dim()) throw DimensionMismatch("distributions differ in dimension");
        const std::size_t n = mu.size(), m = nu.size();
        CostMatrix c(n, m);
        if (kind_ == Kind::FlowComposite) {
            auto fa = evaluate_field(mu);
            auto fb = evaluate_field(nu);
            for (std::size_t p = 0; p < n; ++p)
                for (std::size_t q = 0; q < m; ++q) {
                    double dir = 0.0;
                    for (std::size_t t = 0; t < field_terms_; ++t)
                        dir += sq_dist(fa[p][t], fb[q][t]);
                    c(p, q) = lambda_x_ * sq_dist(mu.support[p], nu.support[q]) +
                              lambda_u_ * dir / static_cast<double>(field_terms_);
                }
            return c;
        }
        for (std::size_t p = 0; p < n; ++p)
            for (std::size_t q = 0; q < m; ++q) c(p, q) = (*this)(mu.support[p], nu.support[q]);
        return c;
    }

  private:
    explicit GroundCost(Kind k) : kind_(k) {}

    double mahalanobis_dist(const Vec& z, const Vec& zp) const {
        if (mahalanobis_a_.cols() != z.size())
            throw DimensionMismatch("mahalanobis matrix incompatible with point dimension");
        double s = 0.0;
        for (std::size_t r = 0; r < mahalanobis_a_.rows(); ++r) {
            double row = 0.0;
            for (std::size_t j = 0; j < z.size(); ++j)
                row += mahalanobis_a_(r, j) * (z[j] - zp[j]);
            s += row * row;
        }
        return std::sqrt(s);
    }

    double cosine_cost(const Vec& z, const Vec& zp) const {
        const double na = norm2(z), nb = norm2(zp);
        if (na < cosine_min_norm_ || nb < cosine_min_norm_)
            throw CosineNormViolation("support point norm below cosine floor");
        return 1.0 - dot(z, zp) / (na * nb);
    }

    double flow_cost(const Vec& z, const Vec& zp) const {
        double dir = 0.0;
        for (std::size_t t = 0; t < field_terms_; ++t)
            dir += sq_dist(field_at(z, t), field_at(zp, t));
        return lambda_x_ * sq_dist(z, zp) + lambda_u_ * dir / static_cast<double>(field_terms_);
    }

    Vec field_at(const Vec& z, std::size_t t) const {
        Vec q = field_(z, t);
        if (norm2(q) > 1.0 + 1e-9) throw Error("flow field value exceeds unit norm");
        return q;
    }

    std::vector<std::vector<Vec>> evaluate_field(const EmpiricalDistribution& d) const {
        std::vector<std::vector<Vec>> out(d.size());
        for (std::size_t i = 0; i < d.size(); ++i) {
            out[i].reserve(field_terms_);
            for (std::size_t t = 0; t < field_terms_; ++t)
                out[i].push_back(field_at(d.support[i], t));
        }
        return out;
    }

    Kind kind_;
    Matrix mahalanobis_a_;
    double cosine_min_norm_ = 1e-8;
    double lambda_x_ = 1.0;
    double lambda_u_ = 0.0;
    std::size_t field_terms_ = 0;
    Field field_;
    double eps_norm_ = 1e-8;
};

/// Normalizes a raw field vector v to v / (|v| + eps_norm), the form expected
/// by GroundCost::flow_composite.
inline Vec normalize_field_value(Vec v, double eps_norm = 1e-8) {
    const double n = norm2(v) + eps_norm;
    for (double& x : v) x /= n;
    return v;
}

inline CostMatrix cost_matrix(const GroundCost& cost, const EmpiricalDistribution& mu,
                              const EmpiricalDistribution& nu) {
    return cost.matrix(mu, nu);
}

}  // namespace semot
