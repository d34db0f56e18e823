#include "coxvae/survstats.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <string>

namespace coxvae {

std::size_t SurvivalTable::n_events() const {
    std::size_t d = 0;
    for (auto e : event) d += e;
    return d;
}

void SurvivalTable::validate() const {
    if (time.empty()) throw ContractError("SurvivalTable: empty table");
    if (time.size() != event.size())
        throw ContractError("SurvivalTable: time/event length mismatch");
    for (double t : time)
        if (!(t > 0.0) || !std::isfinite(t))
            throw DomainError("SurvivalTable: times must be positive and finite, got " +
                              std::to_string(t));
    for (auto e : event)
        if (e > 1) throw DomainError("SurvivalTable: event indicator must be 0 or 1");
}

StepFunction::StepFunction(double value_before_first, std::vector<double> knots,
                           std::vector<double> values)
    : before_(value_before_first), knots_(std::move(knots)),
      values_(std::move(values)) {
    if (knots_.size() != values_.size())
        throw ContractError("StepFunction: knot/value length mismatch");
    for (std::size_t i = 1; i < knots_.size(); ++i)
        if (!(knots_[i - 1] < knots_[i]))
            throw ContractError("StepFunction: knots must be strictly increasing");
}

double StepFunction::operator()(double t) const {
    // last knot <= t
    auto it = std::upper_bound(knots_.begin(), knots_.end(), t);
    if (it == knots_.begin()) return before_;
    return values_[static_cast<std::size_t>(it - knots_.begin()) - 1];
}

double StepFunction::left_limit(double t) const {
    // last knot < t
    auto it = std::lower_bound(knots_.begin(), knots_.end(), t);
    if (it == knots_.begin()) return before_;
    return values_[static_cast<std::size_t>(it - knots_.begin()) - 1];
}

namespace {

std::vector<std::size_t> order_by_time(const SurvivalTable& table) {
    std::vector<std::size_t> idx(table.size());
    std::iota(idx.begin(), idx.end(), 0);
    std::sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) {
        if (table.time[a] != table.time[b]) return table.time[a] < table.time[b];
        return a < b;
    });
    return idx;
}

StepFunction km_impl(const SurvivalTable& table, bool flip) {
    table.validate();
    const auto idx = order_by_time(table);
    const std::size_t n = table.size();
    std::vector<double> knots, values;
    double s = 1.0;
    std::size_t at_risk = n;
    std::size_t i = 0;
    while (i < n) {
        const double t = table.time[idx[i]];
        std::size_t d = 0, leaving = 0;
        while (i < n && table.time[idx[i]] == t) {
            const bool ev = flip ? table.event[idx[i]] == 0 : table.event[idx[i]] == 1;
            if (ev) ++d;
            ++leaving;
            ++i;
        }
        if (d > 0) {
            s *= 1.0 - static_cast<double>(d) / static_cast<double>(at_risk);
            knots.push_back(t);
            values.push_back(s);
        }
        at_risk -= leaving;
    }
    return StepFunction(1.0, std::move(knots), std::move(values));
}

} // namespace

StepFunction kaplan_meier(const SurvivalTable& table) { return km_impl(table, false); }

StepFunction censoring_km(const SurvivalTable& table) { return km_impl(table, true); }

StepFunction breslow_baseline(const SurvivalTable& table,
                              std::span<const double> loghazard) {
    table.validate();
    if (loghazard.size() != table.size())
        throw ContractError("breslow_baseline: log-hazard length mismatch");
    const auto idx = order_by_time(table);
    const std::size_t n = table.size();
    double rmax = loghazard[0];
    for (double r : loghazard) rmax = std::max(rmax, r);
    // Walk times descending so the risk-set sum of exp(r - rmax) only grows.
    std::vector<double> knots, increments;
    double risk_sum = 0.0;
    std::size_t i = n;
    while (i > 0) {
        const double t = table.time[idx[i - 1]];
        std::size_t d = 0;
        while (i > 0 && table.time[idx[i - 1]] == t) {
            risk_sum += std::exp(loghazard[idx[i - 1]] - rmax);
            if (table.event[idx[i - 1]]) ++d;
            --i;
        }
        if (d > 0) {
            knots.push_back(t);
            increments.push_back(static_cast<double>(d) /
                                 (risk_sum * std::exp(rmax)));
        }
    }
    std::reverse(knots.begin(), knots.end());
    std::reverse(increments.begin(), increments.end());
    std::vector<double> values(increments.size());
    double h = 0.0;
    for (std::size_t k = 0; k < increments.size(); ++k) {
        h += increments[k];
        values[k] = h;
    }
    return StepFunction(0.0, std::move(knots), std::move(values));
}

StepFunction survival_curve(const StepFunction& baseline, double loghazard) {
    const double scale = std::exp(loghazard);
    std::vector<double> values(baseline.step_values().size());
    for (std::size_t i = 0; i < values.size(); ++i)
        values[i] = std::exp(-baseline.step_values()[i] * scale);
    return StepFunction(std::exp(-baseline.value_before_first() * scale),
                        baseline.knots(), std::move(values));
}

double concordance_index(const SurvivalTable& table, std::span<const double> risk) {
    table.validate();
    if (risk.size() != table.size())
        throw ContractError("concordance_index: risk length mismatch");
    const std::size_t n = table.size();
    double pairs = 0.0, concordant = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        if (!table.event[i]) continue;
        for (std::size_t j = 0; j < n; ++j) {
            if (!(table.time[i] < table.time[j])) continue;
            pairs += 1.0;
            if (risk[i] > risk[j])
                concordant += 1.0;
            else if (risk[i] == risk[j])
                concordant += 0.5;
        }
    }
    if (pairs == 0.0)
        throw MetricError("concordance_index: no comparable pairs");
    return concordant / pairs;
}

double brier_score(double t_eval, const SurvivalTable& table,
                   std::span<const double> predicted,
                   const StepFunction& censor_g) {
    table.validate();
    if (predicted.size() != table.size())
        throw ContractError("brier_score: prediction length mismatch");
    const std::size_t n = table.size();
    double acc = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        const double s = predicted[i];
        if (table.time[i] <= t_eval && table.event[i]) {
            const double g = censor_g.left_limit(table.time[i]);
            if (g <= 0.0)
                throw MetricError("brier_score: censoring weight is zero just before t=" +
                                  std::to_string(table.time[i]));
            acc += s * s / g;
        } else if (table.time[i] > t_eval) {
            const double g = censor_g(t_eval);
            if (g <= 0.0)
                throw MetricError("brier_score: censoring weight is zero at t_eval=" +
                                  std::to_string(t_eval));
            acc += (1.0 - s) * (1.0 - s) / g;
        }
        // censored at or before t_eval: no contribution
    }
    return acc / static_cast<double>(n);
}

double integrated_brier(std::span<const double> grid, const SurvivalTable& table,
                        std::span<const StepFunction> curves,
                        const StepFunction& censor_g) {
    if (grid.size() < 2)
        throw ConfigError("integrated_brier: grid needs at least 2 points");
    for (std::size_t i = 1; i < grid.size(); ++i)
        if (!(grid[i - 1] < grid[i]))
            throw ConfigError("integrated_brier: grid must be strictly increasing");
    const auto [lo, hi] =
        std::minmax_element(table.time.begin(), table.time.end());
    if (grid.front() < *lo || grid.back() > *hi)
        throw ConfigError("integrated_brier: grid exceeds the observed time range");
    if (curves.size() != table.size())
        throw ContractError("integrated_brier: one curve per subject required");

    std::vector<double> pred(table.size());
    auto brier_at = [&](double t) {
        for (std::size_t i = 0; i < pred.size(); ++i) pred[i] = curves[i](t);
        return brier_score(t, table, pred, censor_g);
    };
    double integral = 0.0;
    double prev_t = grid[0];
    double prev_b = brier_at(prev_t);
    for (std::size_t k = 1; k < grid.size(); ++k) {
        const double t = grid[k];
        const double b = brier_at(t);
        integral += 0.5 * (b + prev_b) * (t - prev_t);
        prev_t = t;
        prev_b = b;
    }
    return integral / (grid.back() - grid.front());
}

std::vector<double> default_ibs_grid(const SurvivalTable& table,
                                     std::size_t points) {
    table.validate();
    if (points < 2) throw ConfigError("default_ibs_grid: need at least 2 points");
    std::vector<double> sorted = table.time;
    std::sort(sorted.begin(), sorted.end());
    auto quantile = [&](double q) {
        const double pos = q * static_cast<double>(sorted.size() - 1);
        const std::size_t lo = static_cast<std::size_t>(pos);
        const std::size_t hi = std::min(lo + 1, sorted.size() - 1);
        const double frac = pos - static_cast<double>(lo);
        return sorted[lo] * (1.0 - frac) + sorted[hi] * frac;
    };
    const double a = quantile(0.05), b = quantile(0.95);
    if (!(a < b))
        throw ConfigError("default_ibs_grid: degenerate time distribution");
    std::vector<double> grid(points);
    for (std::size_t i = 0; i < points; ++i)
        grid[i] = a + (b - a) * static_cast<double>(i) /
                          static_cast<double>(points - 1);
    return grid;
}

CoxNllValue cox_nll_oracle(std::span<const double> loghazard,
                           const SurvivalTable& table) {
    table.validate();
    if (loghazard.size() != table.size())
        throw ContractError("cox_nll_oracle: log-hazard length mismatch");
    const std::size_t n = table.size();
    const std::size_t d = table.n_events();
    if (d == 0) return {0.0, 0};
    double acc = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        if (!table.event[i]) continue;
        // log sum over the risk set {j: t_j >= t_i}, max-subtracted
        double m = -std::numeric_limits<double>::infinity();
        for (std::size_t j = 0; j < n; ++j)
            if (table.time[j] >= table.time[i]) m = std::max(m, loghazard[j]);
        double s = 0.0;
        for (std::size_t j = 0; j < n; ++j)
            if (table.time[j] >= table.time[i]) s += std::exp(loghazard[j] - m);
        acc += loghazard[i] - (m + std::log(s));
    }
    return {-acc / static_cast<double>(d), static_cast<int>(d)};
}

} // namespace coxvae
