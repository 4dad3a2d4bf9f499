#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <numbers>
#include <random>

#include "mfe/spectral.hpp"

using namespace mfe;

namespace {
constexpr double pi = std::numbers::pi;

std::vector<PiMultiple> unit_pi(int d) { return std::vector<PiMultiple>(static_cast<std::size_t>(d)); }
}  // namespace

TEST(Spectral, OmegaExamples) {
    std::vector<double> cube{pi, pi, pi};
    EXPECT_NEAR(omega({1, 1, 1}, cube), std::sqrt(3.0), 1e-15);
    EXPECT_NEAR(omega({3, 4, 5}, cube), std::sqrt(50.0), 1e-14);
    std::vector<double> line{pi};
    EXPECT_DOUBLE_EQ(omega({5, 0, 0}, line), 5.0);
    EXPECT_THROW(omega({1, 0, 2}, cube), Error);
}

TEST(Spectral, ModeSetEnumeration) {
    ModeSet ms(3, 2, {pi, pi, pi});
    ASSERT_EQ(ms.size(), 8u);
    EXPECT_EQ(ms.mode(0), (ModeIndex{1, 1, 1}));
    EXPECT_EQ(ms.mode(1), (ModeIndex{1, 1, 2}));
    EXPECT_EQ(ms.mode(7), (ModeIndex{2, 2, 2}));
    for (std::size_t p = 0; p < ms.size(); ++p) {
        EXPECT_EQ(ms.find(ms.mode(p)), p);
        for (int i = 0; i < 3; ++i) EXPECT_NE(ms.mode(p)[static_cast<std::size_t>(i)], 0);
    }
    EXPECT_FALSE(ms.find({0, 1, 1}));
    EXPECT_FALSE(ms.find({3, 1, 1}));
    EXPECT_THROW(ModeSet(4, 2, {1, 1, 1, 1}), Error);
    EXPECT_THROW(ModeSet(2, 2, {1}), Error);
}

TEST(Spectral, SobolevAndActionExamples) {
    ModeSet ms(1, 4, {pi});
    auto z = ModeState::zeros(ms.size());
    auto n0 = sobolev_norms(ms, z);
    EXPECT_EQ(n0.grad, 0.0);
    EXPECT_EQ(n0.vel, 0.0);
    EXPECT_EQ(action(ms, z, 1.0), 0.0);
    auto s = z;
    s.u[0] = 1e-2;
    auto n = sobolev_norms(ms, s);
    EXPECT_NEAR(n.grad * n.grad, 2e-4, 1e-18);
    EXPECT_EQ(n.vel, 0.0);
    EXPECT_NEAR(action(ms, s, 2.0), 2e-4, 1e-18);
    EXPECT_THROW(action(ms, s, 0.0), Error);
}

// Quadrature of the reconstructed odd field u(x) = i sum u_j e^{ijx} = -2 sum u_j sin(jx).
TEST(Spectral, SobolevMatchesFieldQuadrature) {
    ModeSet ms(1, 8, {pi});
    std::mt19937_64 rng(3);
    std::uniform_real_distribution<double> U(-1, 1);
    for (int trial = 0; trial < 5; ++trial) {
        auto s = ModeState::zeros(ms.size());
        for (std::size_t p = 0; p < ms.size(); ++p) {
            s.u[p] = U(rng);
            s.v[p] = U(rng);
        }
        const int M = 1024;
        double gx = 0, vt = 0;
        for (int m = 0; m < M; ++m) {
            double x = 2 * pi * m / M, ux = 0, ut = 0;
            for (int j = 1; j <= 8; ++j) {
                ux += -2.0 * j * s.u[static_cast<std::size_t>(j - 1)] * std::cos(j * x);
                ut += -2.0 * s.v[static_cast<std::size_t>(j - 1)] * std::sin(j * x);
            }
            gx += ux * ux;
            vt += ut * ut;
        }
        gx *= 2 * pi / M / (2 * pi);
        vt *= 2 * pi / M / (2 * pi);
        auto n = sobolev_norms(ms, s);
        EXPECT_NEAR(n.grad * n.grad, gx, 1e-10 * gx);
        EXPECT_NEAR(n.vel * n.vel, vt, 1e-10 * vt);
    }
}

TEST(Spectral, ActionSignSymmetry) {
    ModeSet ms(2, 3, {pi, 2.0});
    std::mt19937_64 rng(8);
    std::uniform_real_distribution<double> U(-1, 1);
    auto s = ModeState::zeros(ms.size());
    for (std::size_t p = 0; p < ms.size(); ++p) s.u[p] = U(rng), s.v[p] = U(rng);
    auto m = s;
    for (std::size_t p = 0; p < ms.size(); ++p) m.u[p] = -m.u[p], m.v[p] = -m.v[p];
    EXPECT_EQ(action(ms, s, 1.3), action(ms, m, 1.3));
}

TEST(Spectral, LadderOneDimensional) {
    ModeSet ms(1, 4, {pi});
    auto L = frequency_ladder(ms);
    ASSERT_EQ(L.size(), 4u);
    for (int j = 1; j <= 4; ++j) {
        EXPECT_NEAR(L.omega[static_cast<std::size_t>(j - 1)], j, 1e-14);
        EXPECT_EQ(L.rung[static_cast<std::size_t>(j - 1)], j - 1);
    }
}

TEST(Spectral, LadderCubeCollapses) {
    for (bool exact : {true, false}) {
        ModeSet ms = exact ? ModeSet(3, 2, {pi, pi, pi}, unit_pi(3)) : ModeSet(3, 2, {pi, pi, pi});
        auto L = frequency_ladder(ms);
        EXPECT_EQ(L.exact, exact);
        ASSERT_EQ(L.size(), 4u);
        const double want[] = {std::sqrt(3.0), std::sqrt(6.0), 3.0, std::sqrt(12.0)};
        for (int i = 0; i < 4; ++i) EXPECT_NEAR(L.omega[static_cast<std::size_t>(i)], want[i], 1e-14);
        auto r = [&](ModeIndex j) { return L.rung[*ms.find(j)]; };
        EXPECT_EQ(r({1, 1, 2}), r({1, 2, 1}));
        EXPECT_EQ(r({1, 2, 1}), r({2, 1, 1}));
        EXPECT_EQ(r({1, 1, 2}), 1);
        EXPECT_EQ(r({2, 2, 2}), 3);
        EXPECT_EQ(L.unit(*ms.find({2, 1, 2})), MultiIndexK::unit(2));
    }
}

TEST(Spectral, LadderIrrationalRatioDistinct) {
    ModeSet ms(2, 2, {pi, pi * std::sqrt(2.0)});
    auto L = frequency_ladder(ms, 1e-12);
    ASSERT_EQ(L.size(), 4u);
    for (std::size_t i = 1; i < L.size(); ++i) EXPECT_GT(L.omega[i], L.omega[i - 1]);
    // each mode matches its rung
    for (std::size_t p = 0; p < ms.size(); ++p)
        EXPECT_LE(std::abs(ms.omega(p) - L.omega[static_cast<std::size_t>(L.rung[p])]), 1e-12);
}

TEST(Spectral, LadderAmbiguousMergeFails) {
    // Omega = 1..16 with tol 1.2 chain into one cluster of diameter 15 > 10 * tol
    ModeSet ms(1, 16, {pi});
    EXPECT_THROW(frequency_ladder(ms, 1.2), Error);
    EXPECT_NO_THROW(frequency_ladder(ModeSet(1, 4, {pi}), 0.5));
}

// Property: scaling every length by lambda scales the ladder by 1/lambda and keeps the rungs.
TEST(Spectral, LadderHomogeneity) {
    ModeSet a(2, 3, {1.0, 1.7});
    ModeSet b(2, 3, {2.5, 4.25});
    auto La = frequency_ladder(a), Lb = frequency_ladder(b);
    ASSERT_EQ(La.size(), Lb.size());
    for (std::size_t i = 0; i < La.size(); ++i) EXPECT_NEAR(Lb.omega[i], La.omega[i] / 2.5, 1e-12);
    EXPECT_EQ(La.rung, Lb.rung);
    for (std::size_t p = 0; p < a.size(); ++p) EXPECT_NEAR(b.omega(p), a.omega(p) / 2.5, 1e-12);
}

TEST(Spectral, PackUnpackRoundTrip) {
    std::mt19937_64 rng(4);
    std::uniform_int_distribution<int> R(0, kMaxRungs - 1), V(-5, 5);
    for (int t = 0; t < 500; ++t) {
        MultiIndexK a, b;
        for (int e = 0; e < 3; ++e) {
            a = a + MultiIndexK::unit(R(rng), V(rng) == 0 ? 1 : V(rng));
            b = b + MultiIndexK::unit(R(rng), V(rng) == 0 ? -1 : V(rng));
        }
        a.entries.erase(std::remove_if(a.entries.begin(), a.entries.end(), [](auto e) { return e.second == 0; }),
                        a.entries.end());
        EXPECT_TRUE(a.canonical());
        EXPECT_EQ(unpack(pack(a), kMaxRungs), a);
        EXPECT_EQ(pack(a + b), pack(a) + pack(b));
        EXPECT_EQ(pack(-a), -pack(a));
    }
}

TEST(Spectral, ResonanceSetExamples) {
    ModeSet ms(1, 4, {pi});
    auto L = frequency_ladder(ms);
    auto has = [](const std::vector<MultiIndexK>& v, const MultiIndexK& k) {
        return std::find(v.begin(), v.end(), k) != v.end();
    };
    for (std::size_t p = 0; p < ms.size(); ++p) {
        auto K = resonance_set(p, L, 0.1, 0.25, 3);
        EXPECT_TRUE(has(K, L.unit(p)));
        EXPECT_TRUE(has(K, -L.unit(p)));
    }
    auto K1 = resonance_set(0, L, 0.1, 0.25, 3);
    EXPECT_TRUE(has(K1, MultiIndexK::unit(0, 3)));
    auto K3 = resonance_set(2, L, 0.1, 0.25, 3);
    EXPECT_FALSE(has(K3, MultiIndexK::unit(0) + MultiIndexK::unit(1)));
    for (const auto& k : K3) {
        EXPECT_TRUE(k.canonical());
        EXPECT_LE(k.norm(), 3);
    }
    EXPECT_THROW(resonance_set(0, L, 0.1, 1.0, 3), Error);
    EXPECT_THROW(resonance_set(0, L, 0.1, 0.25, 0), Error);
    EXPECT_THROW(resonance_set(0, L, 0.1, 0.25, 3, 10), BudgetError);
}

// Property: shrinking eps can only grow the kept set.
TEST(Spectral, ResonanceSetMonotoneInEps) {
    ModeSet ms(3, 2, {pi, pi, pi}, unit_pi(3));
    auto L = frequency_ladder(ms);
    for (std::size_t p : {std::size_t{0}, std::size_t{1}, std::size_t{7}}) {
        auto big = resonance_set(p, L, 0.2, 0.25, 3);
        auto small = resonance_set(p, L, 0.05, 0.25, 3);
        EXPECT_GE(small.size(), big.size());
        for (const auto& k : big) EXPECT_NE(std::find(small.begin(), small.end(), k), small.end());
    }
}

TEST(Spectral, ResonancePredicatesDifferForNegativeKappa) {
    // kappa = -Omega: outside the kept set, near-resonant with sign -1 only
    EXPECT_FALSE(in_kept_set(-2.0, 2.0, 0.1, false));
    EXPECT_TRUE(in_near_set(-2.0, 2.0, 0.1, -1));
    EXPECT_FALSE(in_near_set(-2.0, 2.0, 0.1, 1));
    EXPECT_TRUE(in_kept_set(-2.0, 2.0, 0.1, true));
}

TEST(Spectral, MfeNormExamples) {
    ModeSet ms(1, 3, {pi});
    std::vector<LabelValue> empty;
    auto n0 = mfe_norm(ms, empty, LabelKind::Scalar);
    EXPECT_EQ(n0.diag, 0.0);
    EXPECT_EQ(n0.offdiag, 0.0);
    EXPECT_EQ(n0.full, 0.0);
    std::vector<LabelValue> one{{1, 2.0, 1, cplx(1, 0)}};
    auto n1 = mfe_norm(ms, one, LabelKind::Scalar);
    EXPECT_NEAR(n1.full, std::sqrt(8.0), 1e-15);
    EXPECT_EQ(n1.offdiag, 0.0);

    ModeSet cube(3, 2, {pi, pi, pi});
    std::vector<LabelValue> dg{{0, std::sqrt(3.0), 1, cplx(0.3, 0.1)}, {0, -std::sqrt(3.0), -1, cplx(0.3, -0.1)}};
    auto n2 = mfe_norm(cube, dg, LabelKind::Ladder);
    EXPECT_EQ(n2.offdiag, 0.0);
    const double a = std::abs(cplx(0.3, 0.1));
    EXPECT_NEAR(n2.diag, std::sqrt(8.0) * 2 * std::sqrt(3.0) * 2 * a, 1e-14);
}

// Property: full^2 = diag^2 + offdiag^2, and the 1D weight is |Omega^2 - kappa^2|.
TEST(Spectral, MfeNormSplitProperty) {
    std::mt19937_64 rng(9);
    std::uniform_real_distribution<double> U(-1, 1);
    ModeSet ms(1, 4, {pi});
    ModeSet cube(3, 2, {pi, pi, pi});
    for (int t = 0; t < 20; ++t) {
        std::vector<LabelValue> l1, l3;
        for (std::size_t p = 0; p < 4; ++p)
            for (int k = -5; k <= 5; ++k) {
                int j = static_cast<int>(p) + 1;
                l1.push_back({p, double(k), k == j ? 1 : (k == -j ? -1 : 0), cplx(U(rng), U(rng))});
            }
        for (std::size_t p = 0; p < 8; ++p)
            for (int k = 0; k < 4; ++k) l3.push_back({p, U(rng) * 5, k < 2 ? (k == 0 ? 1 : -1) : 0, cplx(U(rng), U(rng))});
        for (auto [m, layer, kind] : {std::tuple{&ms, &l1, LabelKind::Scalar}, std::tuple{&cube, &l3, LabelKind::Ladder}}) {
            auto n = mfe_norm(*m, *layer, kind);
            EXPECT_NEAR(n.full * n.full, n.diag * n.diag + n.offdiag * n.offdiag, 1e-12 * n.full * n.full);
        }
        // independent evaluation of the 1D formula
        double full2 = 0;
        for (int j = 1; j <= 4; ++j) {
            double d = 0, o = 0;
            for (const auto& e : l1) {
                if (e.mode != static_cast<std::size_t>(j - 1)) continue;
                if (e.diag) d += std::abs(e.z);
                else o += std::abs(j * j - e.kappa * e.kappa) * std::abs(e.z);
            }
            full2 += 2 * (j * j * d * d + o * o);
        }
        EXPECT_NEAR(mfe_norm(ms, l1, LabelKind::Scalar).full, std::sqrt(full2), 1e-12 * std::sqrt(full2));
    }
}
