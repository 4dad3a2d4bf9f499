#pragma once

// One-dimensional expansion: integer labels k with frequency k*pi/l.

#include <cmath>

#include "mfe/expansion.hpp"

namespace mfe {

using ModulationTable1D = ModulationTable;

inline ModulationTable1D build_modulation_1d(const ModeSet& ms, const ModeState& s0, const ProblemSpec& spec, int N,
                                             double h = 5e-3, double tau0 = 0.0) {
    if (ms.dim() != 1) throw Error("build_modulation_1d: mode set must be one-dimensional");
    ExpansionOptions opt;
    opt.order = N;
    opt.grid_h = h;
    opt.tau0 = tau0;
    return ModulationTable(ms, LabelMode::Scalar, spec.speed, spec.coupling, spec.epsilon, s0, opt);
}

// g_{j,l}^k at window-local slow time tau.
inline cplx g_term(const ModulationTable1D& t, int j, int k, int l, double tau) {
    auto p = t.modes().find({j, 0, 0});
    if (!p) throw Error("g_term: mode outside the cutoff");
    return t.g_value(t.snapshot(tau, 0), *p, k, l);
}

inline DefectResult defect_1d(const ModulationTable1D& t, double tau, bool keep_values = false) {
    return t.defect(t.snapshot(tau, 2), keep_values);
}

// t is the fast time measured from the window start.
inline ModeState reconstruct_1d(const ModulationTable1D& t, double time) {
    const double tau = t.eps() * time;
    if (tau < -1e-12 || tau > 1.0 + 1e-12) throw Error("reconstruct: time outside the window");
    return t.reconstruct(std::clamp(tau, 0.0, 1.0));
}

inline InvariantValue almost_invariant_1d(const ModulationTable1D& t, double tau) {
    return t.almost_invariant(t.snapshot(tau, 1));
}

}  // namespace mfe
