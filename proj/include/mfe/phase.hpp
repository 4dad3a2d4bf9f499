#pragma once

#include <algorithm>
#include <cmath>
#include <numbers>
#include <utility>
#include <vector>

#include "mfe/profile.hpp"

namespace mfe {

struct GaussRule {
    std::vector<double> x, w;  // on [-1, 1]
};

inline GaussRule gauss_legendre(int n) {
    GaussRule r;
    r.x.resize(static_cast<std::size_t>(n));
    r.w.resize(static_cast<std::size_t>(n));
    for (int i = 0; i < n; ++i) {
        double x = std::cos(std::numbers::pi * (i + 0.75) / (n + 0.5));
        double dp = 0.0;
        for (int it = 0; it < 100; ++it) {
            double p0 = 1.0, p1 = x;
            for (int k = 2; k <= n; ++k) {
                double p2 = ((2 * k - 1) * x * p1 - (k - 1) * p0) / k;
                p0 = p1;
                p1 = p2;
            }
            dp = n * (x * p1 - p0) / (x * x - 1.0);
            double dx = p1 / dp;
            x -= dx;
            if (std::abs(dx) < 1e-16) break;
        }
        r.x[static_cast<std::size_t>(i)] = x;
        r.w[static_cast<std::size_t>(i)] = 2.0 / ((1.0 - x * x) * dp * dp);
    }
    return r;
}

// phi(tau) = int_0^tau c(tau0 + s) ds on a grid, with Gauss-Legendre panels
// between consecutive grid points. tau0 shifts the profile for later windows.
class PhaseTable {
public:
    PhaseTable() = default;
    PhaseTable(SlowProfile speed, std::vector<double> grid, double tau0 = 0.0, int order = 10)
        : speed_(std::move(speed)), grid_(std::move(grid)), tau0_(tau0), rule_(gauss_legendre(order)), order_(order) {
        if (grid_.empty() || grid_.front() != 0.0) throw Error("phase: grid must start at 0");
        values_.assign(grid_.size(), 0.0);
        for (std::size_t m = 1; m < grid_.size(); ++m) {
            if (!(grid_[m] > grid_[m - 1])) throw Error("phase: grid must be increasing");
            values_[m] = values_[m - 1] + panel(grid_[m - 1], grid_[m]);
        }
    }

    double at(double tau) const {
        auto it = std::upper_bound(grid_.begin(), grid_.end(), tau);
        std::size_t m = it == grid_.begin() ? 0 : static_cast<std::size_t>(it - grid_.begin()) - 1;
        if (m >= grid_.size()) m = grid_.size() - 1;
        if (tau == grid_[m]) return values_[m];
        return values_[m] + panel(grid_[m], tau);
    }

    const std::vector<double>& grid() const { return grid_; }
    const std::vector<double>& values() const { return values_; }
    double tau0() const { return tau0_; }
    int order() const { return order_; }
    const SlowProfile& speed() const { return speed_; }

private:
    double panel(double a, double b) const {
        double mid = 0.5 * (a + b), half = 0.5 * (b - a), s = 0.0;
        for (std::size_t i = 0; i < rule_.x.size(); ++i) s += rule_.w[i] * speed_(tau0_ + mid + half * rule_.x[i]);
        return half * s;
    }

    SlowProfile speed_;
    std::vector<double> grid_;
    double tau0_ = 0.0;
    GaussRule rule_;
    int order_ = 10;
    std::vector<double> values_;
};

inline PhaseTable phase(const SlowProfile& speed, std::vector<double> grid, double tau0 = 0.0) {
    return PhaseTable(speed, std::move(grid), tau0);
}

inline std::vector<double> uniform_grid(double length, double h) {
    auto n = static_cast<std::size_t>(std::llround(length / h));
    if (n == 0) n = 1;
    std::vector<double> g(n + 1);
    for (std::size_t m = 0; m <= n; ++m) g[m] = length * static_cast<double>(m) / static_cast<double>(n);
    return g;
}

}  // namespace mfe
