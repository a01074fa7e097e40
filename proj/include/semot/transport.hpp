#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <deque>
#include <limits>
#include <vector>

#include "semot/common.hpp"
#include "semot/cost.hpp"

namespace semot {

struct InvalidSimplex : Error {
    using Error::Error;
};
struct TooLarge : Error {
    using Error::Error;
};

/// A coupling between two discrete distributions together with the marginals
/// it was asked to match and the cost of the plan under the cost matrix it
/// was solved against.
struct TransportPlan {
    Matrix coupling;
    Vec row_marginal;
    Vec col_marginal;
    double cost = 0.0;
    std::size_t iterations = 0;        // Sinkhorn sweeps or simplex pivots
    double marginal_violation = 0.0;   // L1 violation before rounding (Sinkhorn)
    bool converged = true;

    double recompute_cost(const CostMatrix& c) const {
        double s = 0.0;
        for (std::size_t i = 0; i < coupling.rows(); ++i)
            for (std::size_t j = 0; j < coupling.cols(); ++j) s += coupling(i, j) * c(i, j);
        return s;
    }
};

struct SinkhornOptions {
    double eps = 0.0;            // <= 0 selects 0.05 * median positive cost entry
    double tol = 1e-6;           // L1 marginal violation stopping rule
    std::size_t max_iter = 2000; // per annealing stage
    std::vector<double> anneal;  // optional schedule; last entry is the final eps
};

namespace detail {

inline void check_simplex(const Vec& w, std::size_t expect, const char* side) {
    if (w.size() != expect) throw DimensionMismatch(std::string(side) + " weight size mismatch");
    double sum = 0.0;
    for (double x : w) {
        if (!(x > 0.0)) throw InvalidSimplex(std::string(side) + " weights must be positive");
        sum += x;
    }
    if (std::abs(sum - 1.0) > 1e-9)
        throw InvalidSimplex(std::string(side) + " weights must sum to 1");
}

inline double median_positive(const CostMatrix& c) {
    std::vector<double> pos;
    pos.reserve(c.data().size());
    for (double v : c.data())
        if (v > 0.0) pos.push_back(v);
    if (pos.empty()) return 0.0;
    std::sort(pos.begin(), pos.end());
    const std::size_t n = pos.size();
    return n % 2 == 1 ? pos[n / 2] : 0.5 * (pos[n / 2 - 1] + pos[n / 2]);
}

/// Rounds a positive coupling onto the transport polytope: scale rows and
/// columns down where they overshoot, then repair the leftover mass with a
/// rank-one update. The result matches the marginals exactly (up to fp).
inline void round_to_feasible(Matrix& p, const Vec& a, const Vec& b) {
    const std::size_t n = p.rows(), m = p.cols();
    for (std::size_t i = 0; i < n; ++i) {
        double r = 0.0;
        for (std::size_t j = 0; j < m; ++j) r += p(i, j);
        const double x = r > a[i] ? a[i] / r : 1.0;
        if (x != 1.0)
            for (std::size_t j = 0; j < m; ++j) p(i, j) *= x;
    }
    Vec colsum(m, 0.0);
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < m; ++j) colsum[j] += p(i, j);
    for (std::size_t j = 0; j < m; ++j) {
        const double y = colsum[j] > b[j] ? b[j] / colsum[j] : 1.0;
        if (y != 1.0)
            for (std::size_t i = 0; i < n; ++i) p(i, j) *= y;
    }
    Vec ea(n, 0.0), eb(m, 0.0);
    double total = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        double r = 0.0;
        for (std::size_t j = 0; j < m; ++j) r += p(i, j);
        ea[i] = a[i] - r;
        total += ea[i];
    }
    for (std::size_t j = 0; j < m; ++j) {
        double c = 0.0;
        for (std::size_t i = 0; i < n; ++i) c += p(i, j);
        eb[j] = b[j] - c;
    }
    if (total > 0.0) {
        for (std::size_t i = 0; i < n; ++i) {
            if (ea[i] <= 0.0) continue;
            for (std::size_t j = 0; j < m; ++j)
                if (eb[j] > 0.0) p(i, j) += ea[i] * eb[j] / total;
        }
    }
}

}  // namespace detail

/// Entropically regularized optimal transport, log-domain scaling updates.
/// Iterates until the L1 marginal violation drops below `tol` or `max_iter`
/// sweeps are spent, then rounds the coupling to exact feasibility so the
/// reported cost is the cost of a feasible plan (hence >= the exact optimum).
/// Does not throw on non-convergence: `converged` and `marginal_violation`
/// report what was achieved.
inline TransportPlan sinkhorn(const CostMatrix& c, const Vec& a, const Vec& b,
                              const SinkhornOptions& opt = {}) {
    const std::size_t n = c.rows(), m = c.cols();
    if (n == 0 || m == 0) throw Error("empty cost matrix");
    if (!c.all_finite()) throw Error("cost matrix must be finite");
    detail::check_simplex(a, n, "row");
    detail::check_simplex(b, m, "col");

    std::vector<double> schedule = opt.anneal;
    if (schedule.empty()) {
        double eps = opt.eps;
        if (eps <= 0.0) eps = 0.05 * detail::median_positive(c);
        if (eps <= 0.0) {
            // All costs are zero: the product coupling is optimal at cost 0.
            TransportPlan plan;
            plan.coupling = Matrix(n, m);
            for (std::size_t i = 0; i < n; ++i)
                for (std::size_t j = 0; j < m; ++j) plan.coupling(i, j) = a[i] * b[j];
            plan.row_marginal = a;
            plan.col_marginal = b;
            plan.cost = plan.recompute_cost(c);
            return plan;
        }
        schedule.push_back(eps);
    }

    Vec f(n, 0.0), g(m, 0.0);
    Vec loga(n), logb(m);
    for (std::size_t i = 0; i < n; ++i) loga[i] = std::log(a[i]);
    for (std::size_t j = 0; j < m; ++j) logb[j] = std::log(b[j]);

    std::size_t total_iters = 0;
    double violation = std::numeric_limits<double>::infinity();
    double eps_final = schedule.back();

    for (double eps : schedule) {
        if (!(eps > 0.0)) throw Error("sinkhorn eps must be positive");
        violation = std::numeric_limits<double>::infinity();
        for (std::size_t it = 0; it < opt.max_iter; ++it) {
            // g update: exact column marginals in log domain.
            for (std::size_t j = 0; j < m; ++j) {
                double mx = -std::numeric_limits<double>::infinity();
                for (std::size_t i = 0; i < n; ++i)
                    mx = std::max(mx, (f[i] - c(i, j)));
                double s = 0.0;
                for (std::size_t i = 0; i < n; ++i) s += std::exp((f[i] - c(i, j) - mx) / eps);
                g[j] = eps * logb[j] - mx - eps * std::log(s);
            }
            // f update: exact row marginals.
            for (std::size_t i = 0; i < n; ++i) {
                double mx = -std::numeric_limits<double>::infinity();
                for (std::size_t j = 0; j < m; ++j)
                    mx = std::max(mx, (g[j] - c(i, j)));
                double s = 0.0;
                for (std::size_t j = 0; j < m; ++j) s += std::exp((g[j] - c(i, j) - mx) / eps);
                f[i] = eps * loga[i] - mx - eps * std::log(s);
            }
            ++total_iters;
            // Rows are exact after the f update; measure column violation.
            violation = 0.0;
            for (std::size_t j = 0; j < m; ++j) {
                double col = 0.0;
                for (std::size_t i = 0; i < n; ++i)
                    col += std::exp((f[i] + g[j] - c(i, j)) / eps);
                violation += std::abs(col - b[j]);
            }
            if (violation <= opt.tol) break;
        }
    }

    TransportPlan plan;
    plan.coupling = Matrix(n, m);
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < m; ++j)
            plan.coupling(i, j) = std::exp((f[i] + g[j] - c(i, j)) / eps_final);
    plan.iterations = total_iters;
    plan.marginal_violation = violation;
    plan.converged = violation <= opt.tol;
    detail::round_to_feasible(plan.coupling, a, b);
    plan.row_marginal = a;
    plan.col_marginal = b;
    plan.cost = plan.recompute_cost(c);
    return plan;
}

namespace detail {

struct BasisCell {
    std::uint32_t i, j;
    double flow;
};

}  // namespace detail

/// Exact solution of the discrete transportation problem by the
/// transportation simplex with Bland's anti-cycling rule. Deterministic:
/// northwest-corner start, first-negative entering cell in row-major order,
/// lowest-index leaving cell among ties. The returned coupling is a basic
/// feasible solution with n+m-1 basic cells.
inline TransportPlan exact_ot(const CostMatrix& c, const Vec& a, const Vec& b) {
    const std::size_t n = c.rows(), m = c.cols();
    if (n == 0 || m == 0) throw Error("empty cost matrix");
    if (!c.all_finite()) throw Error("cost matrix must be finite");
    if (std::min(n, m) > 256) throw TooLarge("exact solver limited to min(n,m) <= 256");
    detail::check_simplex(a, n, "row");
    detail::check_simplex(b, m, "col");

    std::vector<detail::BasisCell> basis;
    basis.reserve(n + m - 1);
    {
        Vec ra = a, cb = b;
        std::size_t i = 0, j = 0;
        while (true) {
            const double f = std::min(ra[i], cb[j]);
            basis.push_back({static_cast<std::uint32_t>(i), static_cast<std::uint32_t>(j), f});
            ra[i] -= f;
            cb[j] -= f;
            if (i == n - 1 && j == m - 1) break;
            if (i == n - 1)
                ++j;
            else if (j == m - 1)
                ++i;
            else if (ra[i] <= cb[j])
                ++i;
            else
                ++j;
        }
    }

    const double pivot_tol = 1e-12 * std::max(1.0, c.max_abs());
    Vec u(n), v(m);
    std::vector<std::vector<std::uint32_t>> row_cells(n), col_cells(m);
    std::vector<int> parent_cell(n + m);  // tree search scratch
    std::vector<std::uint32_t> queue;

    const std::size_t max_pivots = 2000 * (n + m) + 10000;
    std::size_t pivots = 0;

    while (true) {
        // Adjacency of the current basis tree.
        for (auto& r : row_cells) r.clear();
        for (auto& r : col_cells) r.clear();
        for (std::uint32_t k = 0; k < basis.size(); ++k) {
            row_cells[basis[k].i].push_back(k);
            col_cells[basis[k].j].push_back(k);
        }

        // Duals from the tree: u[row 0] = 0, u_i + v_j = c_ij on basic cells.
        {
            std::vector<char> seen(n + m, 0);
            queue.clear();
            queue.push_back(0);
            seen[0] = 1;
            u[0] = 0.0;
            for (std::size_t head = 0; head < queue.size(); ++head) {
                const std::uint32_t node = queue[head];
                if (node < n) {
                    for (std::uint32_t k : row_cells[node]) {
                        const std::uint32_t cn = n + basis[k].j;
                        if (!seen[cn]) {
                            v[basis[k].j] = c(node, basis[k].j) - u[node];
                            seen[cn] = 1;
                            queue.push_back(cn);
                        }
                    }
                } else {
                    const std::uint32_t jj = node - n;
                    for (std::uint32_t k : col_cells[jj]) {
                        const std::uint32_t rn = basis[k].i;
                        if (!seen[rn]) {
                            u[rn] = c(rn, jj) - v[jj];
                            seen[rn] = 1;
                            queue.push_back(rn);
                        }
                    }
                }
            }
        }

        // Entering cell: first negative reduced cost in row-major order.
        std::size_t ei = n, ej = m;
        for (std::size_t i = 0; i < n && ei == n; ++i)
            for (std::size_t j = 0; j < m; ++j)
                if (c(i, j) - u[i] - v[j] < -pivot_tol) {
                    ei = i;
                    ej = j;
                    break;
                }
        if (ei == n) break;  // optimal

        if (++pivots > max_pivots) throw Error("transportation simplex failed to terminate");

        // Unique tree path from column ej back to row ei.
        std::fill(parent_cell.begin(), parent_cell.end(), -1);
        {
            std::vector<char> seen(n + m, 0);
            queue.clear();
            const std::uint32_t start = static_cast<std::uint32_t>(n + ej);
            queue.push_back(start);
            seen[start] = 1;
            for (std::size_t head = 0; head < queue.size(); ++head) {
                const std::uint32_t node = queue[head];
                if (node == ei) break;
                if (node < n) {
                    for (std::uint32_t k : row_cells[node]) {
                        const std::uint32_t next = n + basis[k].j;
                        if (!seen[next]) {
                            seen[next] = 1;
                            parent_cell[next] = static_cast<int>(k);
                            queue.push_back(next);
                        }
                    }
                } else {
                    for (std::uint32_t k : col_cells[node - n]) {
                        const std::uint32_t next = basis[k].i;
                        if (!seen[next]) {
                            seen[next] = 1;
                            parent_cell[next] = static_cast<int>(k);
                            queue.push_back(next);
                        }
                    }
                }
            }
        }

        // Walk ei -> ej collecting cycle cells; signs alternate starting
        // with -1 for the first path edge after the entering (+) cell.
        std::vector<std::uint32_t> minus_cells, plus_cells;
        {
            std::uint32_t node = static_cast<std::uint32_t>(ei);
            int sign = -1;
            while (node != n + ej) {
                const int k = parent_cell[node];
                if (k < 0) throw Error("basis tree disconnected");
                (sign < 0 ? minus_cells : plus_cells).push_back(static_cast<std::uint32_t>(k));
                const auto& cell = basis[k];
                node = (node == cell.i) ? static_cast<std::uint32_t>(n + cell.j) : cell.i;
                sign = -sign;
            }
        }

        // Leaving cell: smallest flow among minus cells, ties to the lowest
        // (i, j) row-major index.
        double theta = std::numeric_limits<double>::infinity();
        std::uint32_t leave = 0;
        std::uint64_t leave_key = ~0ULL;
        for (std::uint32_t k : minus_cells) {
            const std::uint64_t key =
                static_cast<std::uint64_t>(basis[k].i) * m + basis[k].j;
            if (basis[k].flow < theta || (basis[k].flow == theta && key < leave_key)) {
                theta = basis[k].flow;
                leave = k;
                leave_key = key;
            }
        }

        for (std::uint32_t k : minus_cells) basis[k].flow -= theta;
        for (std::uint32_t k : plus_cells) basis[k].flow += theta;
        basis[leave] = {static_cast<std::uint32_t>(ei), static_cast<std::uint32_t>(ej), theta};
    }

    TransportPlan plan;
    plan.coupling = Matrix(n, m);
    for (const auto& cell : basis) plan.coupling(cell.i, cell.j) += cell.flow;
    plan.row_marginal = a;
    plan.col_marginal = b;
    plan.iterations = pivots;
    plan.cost = plan.recompute_cost(c);
    double viol = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        double r = 0.0;
        for (std::size_t j = 0; j < m; ++j) r += plan.coupling(i, j);
        viol += std::abs(r - a[i]);
    }
    plan.marginal_violation = viol;
    return plan;
}

/// Solver selection for wasserstein().
struct Solver {
    enum class Method { Sinkhorn, Exact };
    Method method = Method::Sinkhorn;
    SinkhornOptions options{};

    static Solver exact() { return {Method::Exact, {}}; }
    static Solver entropic(SinkhornOptions opt = {}) { return {Method::Sinkhorn, opt}; }
};

inline TransportPlan solve_transport(const CostMatrix& c, const Vec& a, const Vec& b,
                                     const Solver& solver) {
    return solver.method == Solver::Method::Exact ? exact_ot(c, a, b)
                                                  : sinkhorn(c, a, b, solver.options);
}

/// Semantic distance between two distributions: the transport cost of the
/// plan returned by the chosen solver under the given ground cost.
inline double wasserstein(const GroundCost& cost, const EmpiricalDistribution& mu,
                          const EmpiricalDistribution& nu, const Solver& solver = {}) {
    mu.validate();
    nu.validate();
    const CostMatrix c = cost.matrix(mu, nu);
    return solve_transport(c, mu.weights, nu.weights, solver).cost;
}

}  // namespace semot
