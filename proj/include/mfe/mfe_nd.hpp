#pragma once

// Two- and three-dimensional expansion over the frequency ladder, with
// near-resonant labels routed into the diagonal equations.

#include <cmath>

#include "mfe/expansion.hpp"

namespace mfe {

using ModulationTableND = ModulationTable;

struct NdOptions {
    int order = 4;
    double alpha = -1.0;  // -1: 1/N
    double grid_h = 1e-2;
    double tau0 = 0.0;
    int defect_order = -1;  // -1: N+2
};

inline ModulationTableND build_modulation_nd(const ModeSet& ms, const ModeState& s0, const ProblemSpec& spec,
                                             NdOptions o = {}) {
    if (ms.dim() < 2) throw Error("build_modulation_nd: mode set must be two- or three-dimensional");
    ExpansionOptions opt;
    opt.order = o.order;
    opt.alpha = o.alpha > 0 ? o.alpha : 1.0 / o.order;
    if (!(opt.alpha > 0 && opt.alpha < 1)) throw Error("build_modulation_nd: alpha must lie in (0,1)");
    opt.grid_h = o.grid_h;
    opt.tau0 = o.tau0;
    opt.defect_order = o.defect_order < 0 ? o.order + 2 : o.defect_order;
    return ModulationTable(ms, LabelMode::Ladder, spec.speed, spec.coupling, spec.epsilon, s0, opt);
}

// w_j^k(tau) = exp(i (k.w - Omega_j) phi(tau) / eps).
inline cplx w_factor(double kappa, double Omega, const PhaseTable& phase, double tau, double eps) {
    return std::polar(1.0, (kappa - Omega) * phase.at(tau) / eps);
}

inline cplx g_term_nd(const ModulationTableND& t, std::size_t p, const MultiIndexK& k, int l, double tau) {
    return t.g_value(t.snapshot(tau, 0), p, pack(k), l);
}

inline DefectResult defect_nd(const ModulationTableND& t, double tau, bool keep_values = false) {
    return t.defect(t.snapshot(tau, 2), keep_values);
}

inline ModeState reconstruct_nd(const ModulationTableND& t, double time) {
    const double tau = t.eps() * time;
    if (tau < -1e-12 || tau > 1.0 + 1e-12) throw Error("reconstruct: time outside the window");
    return t.reconstruct(std::clamp(tau, 0.0, 1.0));
}

inline InvariantValue almost_invariant_nd(const ModulationTableND& t, double tau) {
    return t.almost_invariant(t.snapshot(tau, 1));
}

// e_j^{s<j>} for mode p and sign s.
inline cplx near_resonant_force(const ModulationTableND& t, std::size_t p, int sign, double tau) {
    auto e = t.near_resonant_force(t.snapshot(tau, 0));
    return e[2 * p + (sign > 0 ? 0 : 1)];
}

// sum_{s,j} s Omega_j y_{-j}^{-s<j>} e_j^{s<j>}, with y_{-j}^{-s<j>} = -conj(z_j^{s<j>}) e^{-i s Omega phi/eps}
// over the full signed lattice.
inline cplx near_force_pairing(const ModulationTableND& t, double tau) {
    auto s = t.snapshot(tau, 0);
    auto e = t.near_resonant_force(s);
    cplx acc{};
    for (std::size_t p = 0; p < t.modes().size(); ++p) {
        const double Om = t.modes().omega(p);
        for (int sg : {1, -1}) {
            const int slot = static_cast<int>(2 * p + (sg > 0 ? 0 : 1));
            cplx y = -std::conj(s.combined(slot)) * std::polar(1.0, -sg * Om * s.phi() / t.eps());
            acc += static_cast<double>(sg) * Om * y * e[static_cast<std::size_t>(slot)];
        }
    }
    return t.images() * acc;
}

}  // namespace mfe
