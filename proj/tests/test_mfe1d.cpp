#include <gtest/gtest.h>

#include <cmath>
#include <functional>
#include <numbers>
#include <random>

#include "mfe/mfe1d.hpp"
#include "mfe/solver.hpp"

using namespace mfe;

namespace {
constexpr double pi = std::numbers::pi;

ProblemSpec make_spec(const char* c, const char* a, double eps) {
    ProblemSpec s;
    s.speed = parse_profile(c);
    s.coupling = parse_profile(a);
    s.epsilon = eps;
    s.c0 = 0.1;
    return s;
}

ModeState random_state(const ModeSet& ms, double eps, unsigned seed) {
    std::mt19937_64 rng(seed);
    std::uniform_real_distribution<double> U(-1, 1);
    auto s = ModeState::zeros(ms.size());
    for (std::size_t p = 0; p < ms.size(); ++p) {
        double j = static_cast<double>(p + 1);
        s.u[p] = eps * U(rng) / (j * j);
        s.v[p] = eps * U(rng) / (j * j);
    }
    return s;
}

double adaptive_simpson(const std::function<double(double)>& f, double a, double b, double tol) {
    std::function<double(double, double, double, double, double, double, int)> rec =
        [&](double a, double b, double fa, double fm, double fb, double whole, int depth) {
            double m = 0.5 * (a + b), lm = 0.5 * (a + m), rm = 0.5 * (m + b);
            double flm = f(lm), frm = f(rm);
            double left = (m - a) / 6 * (fa + 4 * flm + fm), right = (b - m) / 6 * (fm + 4 * frm + fb);
            if (depth > 40 || std::abs(left + right - whole) <= 15 * tol) return left + right + (left + right - whole) / 15;
            return rec(a, m, fa, flm, fm, left, depth + 1) + rec(m, b, fm, frm, fb, right, depth + 1);
        };
    double fa = f(a), fb = f(b), fm = f(0.5 * (a + b));
    return rec(a, b, fa, fm, fb, (b - a) / 6 * (fa + 4 * fm + fb), 0);
}

// z_{j,l}^k for a signed 1D mode, via z_{-j}^k = -z_j^k; zero outside the table.
cplx zval(const ModulationTable1D& T, const Snapshot& s, int j, LabelCode k, int l) {
    const int aj = std::abs(j);
    if (aj < 1 || aj > T.modes().cutoff()) return {};
    auto slot = T.find_slot(static_cast<std::size_t>(aj - 1), k);
    if (!slot) return {};
    cplx z = s.z(l, *slot);
    return j > 0 ? z : -z;
}

// -a sum over order splits, signed modes and labels of z z z.
cplx g_oracle(const ModulationTable1D& T, const Snapshot& s, int j, LabelCode k, int l) {
    const int J = T.modes().cutoff(), K = (T.order() + 1) * J;
    cplx acc{};
    for (int l1 = 1; l1 <= l - 2; ++l1)
        for (int l2 = 1; l1 + l2 <= l - 1; ++l2) {
            const int l3 = l - l1 - l2;
            for (int j1 = -J; j1 <= J; ++j1)
                for (int j2 = -J; j2 <= J; ++j2) {
                    const int j3 = j - j1 - j2;
                    if (j1 == 0 || j2 == 0 || j3 == 0 || std::abs(j3) > J) continue;
                    for (int k1 = -K; k1 <= K; ++k1) {
                        cplx z1 = zval(T, s, j1, k1, l1);
                        if (z1 == cplx{}) continue;
                        for (int k2 = -K; k2 <= K; ++k2) {
                            cplx z2 = zval(T, s, j2, k2, l2);
                            if (z2 == cplx{}) continue;
                            acc += z1 * z2 * zval(T, s, j3, k - k1 - k2, l3);
                        }
                    }
                }
        }
    return -s.a() * acc;
}
}  // namespace

TEST(Phase, Examples) {
    auto grid = uniform_grid(1.0, 5e-3);
    auto one = phase(parse_profile("1"), grid);
    auto lin = phase(parse_profile("1 + tau"), grid);
    for (double t : {0.0, 0.1234, 0.5, 0.77777, 1.0}) {
        EXPECT_NEAR(one.at(t), t, 1e-15);
        EXPECT_NEAR(lin.at(t), t + t * t / 2, 1e-15);
    }
    auto sn = phase(parse_profile("1 + 0.5*sin(tau)"), grid);
    double ref = adaptive_simpson([](double x) { return 1 + 0.5 * std::sin(x); }, 0.0, 1.0, 1e-16);
    EXPECT_NEAR(sn.at(1.0), ref, 1e-12 * ref);
    EXPECT_NEAR(ref, 1 + 0.5 * (1 - std::cos(1.0)), 1e-14);
    // strictly increasing
    for (std::size_t m = 1; m < sn.values().size(); ++m) EXPECT_GT(sn.values()[m], sn.values()[m - 1]);
    // shifted window: phi(tau) = int_0^tau c(tau0 + s) ds
    auto sh = PhaseTable(parse_profile("1 + tau"), grid, 2.0);
    EXPECT_NEAR(sh.at(0.5), 3 * 0.5 + 0.125, 1e-15);
    EXPECT_THROW(phase(parse_profile("1"), {0.1, 0.2}), Error);
    EXPECT_THROW(phase(parse_profile("1"), {0.0, 0.2, 0.2}), Error);
}

TEST(Mfe1d, GTermMatchesBruteForce) {
    ModeSet ms(1, 4, {pi});
    const double eps = 0.1;
    auto T = build_modulation_1d(ms, random_state(ms, eps, 3), make_spec("1 + 0.5*sin(tau)", "1 + 0.2*cos(tau)", eps), 3);
    for (double tau : {0.0, 0.37}) {
        auto s = T.snapshot(tau, 0);
        for (int l = 3; l <= 5; ++l)
            for (int j = 1; j <= 4; ++j)
                for (int k = -3 * l; k <= 3 * l; ++k) {
                    cplx want = g_oracle(T, s, j, k, l);
                    cplx got = g_term(T, j, k, l, tau);
                    EXPECT_LE(std::abs(got - want), 1e-13 * std::max(1e-9, std::abs(want)) + 1e-20)
                        << "j=" << j << " k=" << k << " l=" << l;
                }
        for (int l : {1, 2}) EXPECT_EQ(g_term(T, 1, 1, l, tau), cplx{});
    }
}

// Layer 1 is linear in the data and g_3 is cubic in layer 1, so scaling the data by lambda scales g_3 by lambda^3.
TEST(Mfe1d, GTermHomogeneity) {
    ModeSet ms(1, 4, {pi});
    const double eps = 0.1, lam = 1.7;
    auto s0 = random_state(ms, eps, 5), s1 = s0;
    for (std::size_t p = 0; p < ms.size(); ++p) s1.u[p] *= lam, s1.v[p] *= lam;
    auto spec = make_spec("1 + 0.5*sin(tau)", "1", eps);
    auto A = build_modulation_1d(ms, s0, spec, 2), B = build_modulation_1d(ms, s1, spec, 2);
    for (int j = 1; j <= 4; ++j)
        for (int k = -6; k <= 6; ++k) {
            cplx a = g_term(A, j, k, 3, 0.6), b = g_term(B, j, k, 3, 0.6);
            EXPECT_NEAR(std::abs(b - lam * lam * lam * a), 0.0, 1e-12 * std::abs(b) + 1e-22);
        }
}

TEST(Mfe1d, LinearConstantCase) {
    ModeSet ms(1, 6, {pi});
    const double eps = 0.1, c = 1.3;
    auto s0 = random_state(ms, eps, 9);
    auto T = build_modulation_1d(ms, s0, make_spec("1.3", "0", eps), 2);
    for (double tau : {0.0, 0.41, 1.0}) {
        auto s = T.snapshot(tau, 2);
        for (std::size_t i = 0; i < T.slot_count(); ++i) {
            const auto p = static_cast<std::size_t>(T.slot_mode(i));
            const double j = static_cast<double>(p + 1);
            for (int l = 1; l <= T.order() + 1; ++l) {
                cplx want{};
                if (l == 1 && T.slot_diag(i) != 0) {
                    const double sg = T.slot_diag(i);
                    want = 0.5 * cplx(s0.u[p] / eps, -sg * s0.v[p] / (j * c * eps));
                }
                EXPECT_NEAR(std::abs(s.z(l, static_cast<int>(i)) - want), 0.0, 1e-14);
                EXPECT_EQ(s.z(l, static_cast<int>(i), 1), cplx{}) << "l=" << l;
            }
        }
        auto d = T.defect(s);
        EXPECT_LE(d.norm, 1e-16);
        auto inv = T.almost_invariant(s);
        EXPECT_NEAR(inv.value, inv.leading, 1e-14 * inv.leading);
        EXPECT_LE(std::abs(inv.imag), 1e-14 * inv.leading);
    }
}

TEST(Mfe1d, ReconstructExactAtStart) {
    ModeSet ms(1, 16, {pi});
    for (int N : {1, 2, 3}) {
        const double eps = 0.1;
        auto s0 = random_state(ms, eps, 17);
        auto T = build_modulation_1d(ms, s0, make_spec("1 + 0.5*sin(tau)", "1", eps), N);
        auto r = reconstruct_1d(T, 0.0);
        for (std::size_t p = 0; p < ms.size(); ++p) EXPECT_NEAR(r.u[p], s0.u[p], 1e-16) << "N=" << N;
        // velocity residual is eps^(N+2) times the top-layer derivative sum, which is held at zero
        double dv = 0;
        for (std::size_t p = 0; p < ms.size(); ++p) dv = std::max(dv, std::abs(r.v[p] - s0.v[p]));
        EXPECT_LT(dv, 50 * std::pow(eps, N + 2)) << "N=" << N;
        EXPECT_EQ(r.t, 0.0);
    }
}

TEST(Mfe1d, HarmonicSolution) {
    ModeSet ms(1, 5, {pi});
    const double eps = 0.05, c = 0.8;
    auto s0 = random_state(ms, eps, 23);
    auto T = build_modulation_1d(ms, s0, make_spec("0.8", "0", eps), 2);
    for (double t : {0.0, 1.2345, 7.0, 13.33, 20.0}) {
        auto r = reconstruct_1d(T, t);
        double im = 0;
        T.reconstruct(T.snapshot(eps * t, 1), &im);
        EXPECT_LE(im, 1e-14);
        for (std::size_t p = 0; p < ms.size(); ++p) {
            double w = c * static_cast<double>(p + 1);
            EXPECT_NEAR(r.u[p], s0.u[p] * std::cos(w * t) + s0.v[p] / w * std::sin(w * t), 1e-12);
            EXPECT_NEAR(r.v[p], -s0.u[p] * w * std::sin(w * t) + s0.v[p] * std::cos(w * t), 1e-12);
        }
    }
    EXPECT_THROW(reconstruct_1d(T, 20.5), Error);
    EXPECT_THROW(reconstruct_1d(T, -1.0), Error);
}

// Property: reality, support and the vanishing of off-diagonal layers 1 and 2.
TEST(Mfe1d, RealityAndSupport) {
    ModeSet ms(1, 8, {pi});
    const double eps = 0.1;
    auto T = build_modulation_1d(ms, random_state(ms, eps, 29), make_spec("1 + 0.5*sin(tau)", "1", eps), 3);
    const int J = 8;
    for (double tau : {0.0, 0.3, 0.8125, 1.0}) {
        auto s = T.snapshot(tau, 2);
        for (std::size_t i = 0; i < T.slot_count(); ++i) {
            const auto p = static_cast<std::size_t>(T.slot_mode(i));
            const LabelCode k = T.slot_label(i);
            auto mirror = T.find_slot(p, -k);
            ASSERT_TRUE(mirror) << "label " << k;
            for (int l = 1; l <= T.order() + 1; ++l)
                for (int q = 0; q <= 2; ++q) {
                    cplx a = s.z(l, static_cast<int>(i), q), b = s.z(l, *mirror, q);
                    EXPECT_LE(std::abs(a - std::conj(b)), 1e-12 * std::max(1.0, std::abs(a)));
                    if (std::abs(k) > l * J) {
                        EXPECT_EQ(a, cplx{});
                    }
                }
            if (T.slot_diag(i) == 0) {
                EXPECT_GE(T.slot_first_layer(i), 3);
                EXPECT_EQ(s.z(1, static_cast<int>(i)), cplx{});
                EXPECT_EQ(s.z(2, static_cast<int>(i)), cplx{});
            } else {
                EXPECT_EQ(std::abs(k), static_cast<LabelCode>(p + 1));
            }
        }
        double im = 0;
        T.reconstruct(s, &im);
        EXPECT_LE(im, 1e-10);
        auto inv = T.almost_invariant(s);
        EXPECT_LE(std::abs(inv.imag), 1e-10);
    }
}

TEST(Mfe1d, DefectPathsAgree) {
    ModeSet ms(1, 8, {pi});
    for (int N : {2, 3}) {
        const double eps = 0.1;
        auto T = build_modulation_1d(ms, random_state(ms, eps, 31), make_spec("1 + 0.5*sin(tau)", "1", eps), N);
        for (double tau : {0.0, 0.5, 1.0}) {
            auto d = defect_1d(T, tau, true);
            ASSERT_GT(d.norm, 0.0);
            EXPECT_LE(std::abs(d.norm - d.norm_check), 1e-10 * d.norm);
            EXPECT_LE(d.max_entry_gap, 1e-10 * d.max_entry);
            EXPECT_EQ(d.values.size(), d.entries);
        }
    }
}

TEST(Mfe1d, DefectRatioUnderHalving) {
    ModeSet ms(1, 16, {pi});
    auto max_defect = [&](double eps) {
        auto T = build_modulation_1d(ms, random_state(ms, eps, 7), make_spec("1 + 0.5*sin(tau)", "1", eps), 2);
        double m = 0;
        for (int i = 0; i <= 20; ++i) m = std::max(m, defect_1d(T, i / 20.0).norm);
        return m;
    };
    const double r = max_defect(0.1) / max_defect(0.05);
    EXPECT_GT(r, 16 / 1.5);
    EXPECT_LT(r, 16 * 1.5);
}

TEST(Mfe1d, ZeroDataGivesZeroTable) {
    ModeSet ms(1, 4, {pi});
    auto T = build_modulation_1d(ms, ModeState::zeros(ms.size()), make_spec("1 + 0.5*sin(tau)", "1", 0.1), 2);
    auto inv = almost_invariant_1d(T, 0.5);
    EXPECT_EQ(inv.value, 0.0);
    EXPECT_EQ(inv.leading, 0.0);
    EXPECT_EQ(defect_1d(T, 0.5).norm, 0.0);
}

TEST(Mfe1d, Errors) {
    ModeSet ms(1, 4, {pi});
    auto spec = make_spec("1", "1", 0.1);
    EXPECT_THROW(build_modulation_1d(ModeSet(2, 2, {pi, pi}), ModeState::zeros(4), spec, 2), Error);
    EXPECT_THROW(build_modulation_1d(ms, ModeState::zeros(3), spec, 2), Error);
    EXPECT_THROW(build_modulation_1d(ms, ModeState::zeros(4), spec, 0), Error);
    auto T = build_modulation_1d(ms, ModeState::zeros(4), spec, 2);
    EXPECT_THROW(g_term(T, 5, 1, 3, 0.0), Error);
    EXPECT_THROW(T.snapshot(1.5), Error);
}

TEST(Mfe1d, SnapshotMatchesTimeDerivativeOfReconstruction) {
    // d/dt of the reconstructed u equals the reconstructed velocity up to the defect-sized mismatch
    ModeSet ms(1, 6, {pi});
    const double eps = 0.1;
    auto T = build_modulation_1d(ms, random_state(ms, eps, 41), make_spec("1 + 0.5*sin(tau)", "1", eps), 2);
    const double t = 4.321, h = 1e-4;
    auto a = reconstruct_1d(T, t - h), b = reconstruct_1d(T, t + h), m = reconstruct_1d(T, t);
    for (std::size_t p = 0; p < ms.size(); ++p) EXPECT_NEAR((b.u[p] - a.u[p]) / (2 * h), m.v[p], 1e-8);
}
