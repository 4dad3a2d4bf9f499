#pragma once

// Brute-force quantities on explicit signed-lattice configurations y_j^k:
// the quartic potential, its gradient, the phase-rotation flow and the two
// pairing sums that vanish term by term. Used as oracles for the engine.

#include <cmath>
#include <map>
#include <random>
#include <utility>
#include <vector>

#include "mfe/spectral.hpp"

namespace mfe {

struct LatticeEntry {
    ModeIndex j;  // signed
    LabelCode k;
    double kappa;  // k.w
    double omega;  // Omega_j
    cplx y, ydot;
};

class LatticeConfig {
public:
    void add(LatticeEntry e) {
        index_[{e.j, e.k}] = entries_.size();
        entries_.push_back(e);
    }
    const std::vector<LatticeEntry>& entries() const { return entries_; }
    std::vector<LatticeEntry>& entries() { return entries_; }
    const LatticeEntry* find(const ModeIndex& j, LabelCode k) const {
        auto it = index_.find({j, k});
        return it == index_.end() ? nullptr : &entries_[it->second];
    }

private:
    std::vector<LatticeEntry> entries_;
    std::map<std::pair<ModeIndex, LabelCode>, std::size_t> index_;
};

inline ModeIndex add_modes(const ModeIndex& a, const ModeIndex& b) { return {a[0] + b[0], a[1] + b[1], a[2] + b[2]}; }
inline ModeIndex neg_mode(const ModeIndex& a) { return {-a[0], -a[1], -a[2]}; }

// U(y) = a/4 sum_{j1+..+j4=0, k1+..+k4=0} y1 y2 y3 y4
inline cplx quartic_potential(const LatticeConfig& cfg, double a) {
    cplx acc{};
    const auto& E = cfg.entries();
    for (const auto& e1 : E)
        for (const auto& e2 : E)
            for (const auto& e3 : E) {
                ModeIndex j = neg_mode(add_modes(add_modes(e1.j, e2.j), e3.j));
                const LatticeEntry* e4 = cfg.find(j, -(e1.k + e2.k + e3.k));
                if (e4) acc += e1.y * e2.y * e3.y * e4->y;
            }
    return 0.25 * a * acc;
}

// a * sum_{j1+j2+j3=j, k1+k2+k3=k} y y y, the gradient of U with respect to y_{-j}^{-k}.
inline cplx cubic_force(const LatticeConfig& cfg, double a, const ModeIndex& j, LabelCode k) {
    cplx acc{};
    const auto& E = cfg.entries();
    for (const auto& e1 : E)
        for (const auto& e2 : E) {
            ModeIndex j3 = add_modes(j, neg_mode(add_modes(e1.j, e2.j)));
            const LatticeEntry* e3 = cfg.find(j3, k - e1.k - e2.k);
            if (e3) acc += e1.y * e2.y * e3->y;
        }
    return a * acc;
}

// Central difference of U along y_{-j}^{-k} (holomorphic derivative).
inline cplx potential_gradient_fd(LatticeConfig cfg, double a, const ModeIndex& j, LabelCode k, double h = 1e-5) {
    for (auto& e : cfg.entries()) {
        if (e.j == neg_mode(j) && e.k == -k) {
            const cplx y0 = e.y;
            e.y = y0 + h;
            cplx up = quartic_potential(cfg, a);
            e.y = y0 - h;
            cplx dn = quartic_potential(cfg, a);
            return (up - dn) / (2 * h);
        }
    }
    return {};
}

// d/dtheta U(e^{-i k.w theta} y) at theta = 0 by a central difference.
inline cplx rotation_derivative(const LatticeConfig& cfg, double a, double h = 1e-4) {
    auto rotated = [&](double th) {
        LatticeConfig c = cfg;
        for (auto& e : c.entries()) e.y *= std::polar(1.0, -e.kappa * th);
        return quartic_potential(c, a);
    };
    return (rotated(h) - rotated(-h)) / (2 * h);
}

// Scale for relative comparisons: a/4 sum |y1 y2 y3 y4|.
inline double quartic_scale(const LatticeConfig& cfg, double a) {
    LatticeConfig c = cfg;
    for (auto& e : c.entries()) e.y = std::abs(e.y);
    return std::abs(quartic_potential(c, a));
}

// sum i(k.w) y_{-j}^{-k} Omega^2 c^2 y_j^k and sum i(k.w) ydot_{-j}^{-k} ydot_j^k.
inline std::pair<cplx, cplx> cancellation_sums(const LatticeConfig& cfg, double c) {
    cplx s1{}, s2{};
    for (const auto& e : cfg.entries()) {
        const LatticeEntry* m = cfg.find(neg_mode(e.j), -e.k);
        if (!m) continue;
        s1 += cplx(0, e.kappa) * m->y * e.omega * e.omega * c * c * e.y;
        s2 += cplx(0, e.kappa) * m->ydot * e.ydot;
    }
    return {s1, s2};
}

// Random configuration over all signed images of the given modes, with label
// sets closed under negation. labels[p] lists (code, kappa) for mode p.
inline LatticeConfig random_lattice(const ModeSet& ms, const std::vector<std::vector<std::pair<LabelCode, double>>>& labels,
                                    std::mt19937_64& rng, double scale) {
    std::uniform_real_distribution<double> U(-1.0, 1.0);
    LatticeConfig cfg;
    const auto signs = sign_patterns(ms.dim());
    for (std::size_t p = 0; p < ms.size(); ++p)
        for (const auto& sp : signs) {
            ModeIndex j{0, 0, 0};
            for (int i = 0; i < ms.dim(); ++i)
                j[static_cast<std::size_t>(i)] = sp.s[static_cast<std::size_t>(i)] * ms.mode(p)[static_cast<std::size_t>(i)];
            for (const auto& [k, kap] : labels[p]) {
                for (int sg : {1, -1}) {
                    ModeIndex js = sg > 0 ? j : neg_mode(j);
                    if (cfg.find(js, sg * k)) continue;
                    cfg.add({js, sg * k, sg * kap, ms.omega(p), scale * cplx(U(rng), U(rng)), scale * cplx(U(rng), U(rng))});
                }
            }
        }
    return cfg;
}

}  // namespace mfe
