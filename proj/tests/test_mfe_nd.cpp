#include <gtest/gtest.h>

#include <cmath>
#include <map>
#include <numbers>
#include <random>

#include "mfe/lattice.hpp"
#include "mfe/mfe_nd.hpp"

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
        double w = ms.omega(p);
        s.u[p] = eps * U(rng) / (w * w);
        s.v[p] = eps * U(rng) / (w * w);
    }
    return s;
}

NdOptions opts(int N, int defect_order = -1) {
    NdOptions o;
    o.order = N;
    o.defect_order = defect_order;
    return o;
}

// One layer spread over the full signed lattice, z_{s o j}^k = parity(s) z_j^k.
struct Signed {
    ModeIndex j;
    MultiIndexK k;
    double kappa;
    cplx z;
};
struct Layer {
    std::vector<Signed> list;
    std::map<std::pair<ModeIndex, LabelCode>, cplx> at;
};

Layer signed_layer(const ModulationTableND& T, const Snapshot& s, int l) {
    Layer L;
    const auto& ms = T.modes();
    const int R = static_cast<int>(T.ladder().size());
    for (std::size_t i = 0; i < T.slot_count(); ++i) {
        cplx z = s.z(l, static_cast<int>(i));
        if (z == cplx{}) continue;
        const auto p = static_cast<std::size_t>(T.slot_mode(i));
        for (const auto& sp : sign_patterns(ms.dim())) {
            ModeIndex j{0, 0, 0};
            for (int d = 0; d < ms.dim(); ++d) j[static_cast<std::size_t>(d)] = sp.s[static_cast<std::size_t>(d)] * ms.mode(p)[static_cast<std::size_t>(d)];
            L.list.push_back({j, unpack(T.slot_label(i), R), T.slot_kappa(i), sp.parity * z});
            L.at[{j, T.slot_label(i)}] = sp.parity * z;
        }
    }
    return L;
}

ModeIndex sub3(const ModeIndex& a, const ModeIndex& b, const ModeIndex& c) {
    return {a[0] - b[0] - c[0], a[1] - b[1] - c[1], a[2] - b[2] - c[2]};
}

// -a sum over order splits and the signed lattice of z z z at (p, k).
cplx g_oracle(const ModulationTableND& T, const Snapshot& s, const std::vector<Layer>& Ls, std::size_t p,
              const MultiIndexK& k, int l) {
    const int top = T.order() + 1;
    const ModeIndex j = T.modes().mode(p);
    cplx acc{};
    for (int l1 = 1; l1 <= top; ++l1)
        for (int l2 = 1; l2 <= top; ++l2) {
            const int l3 = l - l1 - l2;
            if (l3 < 1 || l3 > top) continue;
            for (const auto& a : Ls[static_cast<std::size_t>(l1)].list)
                for (const auto& b : Ls[static_cast<std::size_t>(l2)].list) {
                    ModeIndex j3 = sub3(j, a.j, b.j);
                    MultiIndexK k3 = k + (-a.k) + (-b.k);
                    LabelCode c3;
                    try {
                        c3 = pack(k3);
                    } catch (const Error&) {
                        continue;
                    }
                    auto it = Ls[static_cast<std::size_t>(l3)].at.find({j3, c3});
                    if (it != Ls[static_cast<std::size_t>(l3)].at.end()) acc += a.z * b.z * it->second;
                }
        }
    return -s.a() * acc;
}

struct Fixture {
    ModeSet ms{3, 2, {pi, pi, pi}};
    double eps = 0.1;
    ModulationTableND T;
    explicit Fixture(int N, int defect_order = -1)
        : T(build_modulation_nd(ms, random_state(ms, 0.1, 13), make_spec("1 + 0.3*sin(tau)", "1 + 0.1*tau", 0.1),
                                opts(N, defect_order))) {}
};
}  // namespace

TEST(MfeNd, WFactorExamples) {
    auto ph = phase(parse_profile("1"), uniform_grid(1.0, 1e-2));
    EXPECT_EQ(w_factor(2.0, 2.0, ph, 0.7, 0.1), cplx(1.0, 0.0));
    cplx w = w_factor(1.1, 1.0, ph, 0.5, 0.1);
    EXPECT_NEAR(std::abs(w - std::polar(1.0, 0.5)), 0.0, 1e-14);
    auto ph2 = phase(parse_profile("1 + tau"), uniform_grid(1.0, 1e-2));
    cplx w2 = w_factor(0.8, 1.0, ph2, 1.0, 0.05);
    EXPECT_NEAR(std::abs(w2 - std::polar(1.0, -0.2 * 1.5 / 0.05)), 0.0, 1e-13);
    EXPECT_NEAR(std::abs(w2), 1.0, 1e-15);
}

TEST(MfeNd, GTermMatchesBruteForce) {
    Fixture F(2);
    const auto& T = F.T;
    const int R = static_cast<int>(T.ladder().size());
    for (double tau : {0.0, 0.45}) {
        auto s = T.snapshot(tau, 0);
        std::vector<Layer> Ls(static_cast<std::size_t>(T.order() + 2));
        for (int l = 1; l <= T.order() + 1; ++l) Ls[static_cast<std::size_t>(l)] = signed_layer(T, s, l);
        for (std::size_t p : {std::size_t{0}, std::size_t{5}, T.modes().size() - 1}) {
            std::vector<LabelCode> targets;
            for (std::size_t i = 0; i < T.slot_count(); ++i)
                if (static_cast<std::size_t>(T.slot_mode(i)) == p) targets.push_back(T.slot_label(i));
            for (std::size_t i = 0; i < T.near_count(); ++i)
                if (static_cast<std::size_t>(T.near_mode(i)) == p) targets.push_back(T.near_label(i));
            for (int l = 3; l <= T.defect_order(); ++l)
                for (LabelCode k : targets) {
                    cplx want = g_oracle(T, s, Ls, p, unpack(k, R), l);
                    cplx got = g_term_nd(T, p, unpack(k, R), l, tau);
                    EXPECT_LE(std::abs(got - want), 1e-13 * std::abs(want) + 1e-22) << "p=" << p << " l=" << l;
                }
        }
        EXPECT_EQ(g_term_nd(T, 0, MultiIndexK::unit(0), 2, tau), cplx{});
    }
}

TEST(MfeNd, NearForceMatchesDirectLoop) {
    for (int Lmax : {-1, 5}) {
        Fixture F(2, Lmax);
        const auto& T = F.T;
        const auto& ms = T.modes();
        const int R = static_cast<int>(T.ladder().size());
        const double tau = 0.6;
        auto s = T.snapshot(tau, 0);
        std::vector<Layer> Ls(static_cast<std::size_t>(T.order() + 2));
        for (int l = 1; l <= T.order() + 1; ++l) Ls[static_cast<std::size_t>(l)] = signed_layer(T, s, l);
        std::vector<cplx> want(2 * ms.size());
        std::vector<double> scale(2 * ms.size());
        const int top = T.order() + 1;
        for (int l1 = 1; l1 <= top; ++l1)
            for (int l2 = 1; l2 <= top; ++l2)
                for (int l3 = 1; l3 <= top; ++l3) {
                    const int l = l1 + l2 + l3;
                    if (l > T.defect_order()) continue;
                    const double w = std::pow(T.eps(), l);
                    for (const auto& a : Ls[static_cast<std::size_t>(l1)].list)
                        for (const auto& b : Ls[static_cast<std::size_t>(l2)].list)
                            for (const auto& c : Ls[static_cast<std::size_t>(l3)].list) {
                                ModeIndex j{a.j[0] + b.j[0] + c.j[0], a.j[1] + b.j[1] + c.j[1], a.j[2] + b.j[2] + c.j[2]};
                                auto p = ms.find(j);
                                if (!p) continue;
                                MultiIndexK k = a.k + b.k + c.k;
                                const double kap = k.dot(T.ladder().omega);
                                const double Om = ms.omega(*p);
                                const LabelCode up = T.up_label(*p);
                                const bool diag = pack(k) == up || pack(k) == pack(-unpack(up, R));
                                if (in_kept_set(kap, Om, T.delta(), diag)) continue;
                                const std::size_t e = 2 * *p + (in_near_set(kap, Om, T.delta(), 1) ? 0 : 1);
                                cplx v = w * a.z * b.z * c.z;
                                want[e] += -s.a() * v * std::polar(1.0, kap * s.phi() / T.eps());
                                scale[e] += std::abs(s.a() * v);
                            }
                }
        double total = 0;
        for (std::size_t p = 0; p < ms.size(); ++p)
            for (int sg : {1, -1}) {
                const std::size_t e = 2 * p + (sg > 0 ? 0 : 1);
                total += std::abs(want[e]);
                cplx got = near_resonant_force(T, p, sg, tau);
                EXPECT_LE(std::abs(got - want[e]), 1e-13 * scale[e] + 1e-30) << "p=" << p << " s=" << sg << " Lmax=" << Lmax;
            }
        EXPECT_GT(total, 0.0) << "the cube has exact resonances, the force should not vanish";
    }
}

TEST(MfeNd, LinearConstantCube) {
    ModeSet ms(3, 2, {pi, pi, pi});
    const double eps = 0.1, c = 1.2;
    auto s0 = random_state(ms, eps, 21);
    auto T = build_modulation_nd(ms, s0, make_spec("1.2", "0", eps), opts(2));
    for (double tau : {0.0, 0.33, 1.0}) {
        auto s = T.snapshot(tau, 2);
        for (std::size_t i = 0; i < T.slot_count(); ++i) {
            const auto p = static_cast<std::size_t>(T.slot_mode(i));
            for (int l = 1; l <= T.order() + 1; ++l) {
                cplx want{};
                if (l == 1 && T.slot_diag(i) != 0)
                    want = 0.5 * cplx(s0.u[p] / eps, -T.slot_diag(i) * s0.v[p] / (ms.omega(p) * c * eps));
                EXPECT_NEAR(std::abs(s.z(l, static_cast<int>(i)) - want), 0.0, 1e-13);
            }
        }
        EXPECT_LE(T.defect(s).norm, 1e-16);
        auto inv = T.almost_invariant(s);
        EXPECT_NEAR(inv.value, inv.leading, 1e-14 * inv.leading);
        EXPECT_LE(std::abs(inv.imag), 1e-14 * inv.leading);
    }
    for (double t : {0.0, 2.5, 9.99}) {
        auto r = reconstruct_nd(T, t);
        for (std::size_t p = 0; p < ms.size(); ++p) {
            const double w = c * ms.omega(p);
            EXPECT_NEAR(r.u[p], s0.u[p] * std::cos(w * t) + s0.v[p] / w * std::sin(w * t), 1e-12);
            EXPECT_NEAR(r.v[p], -s0.u[p] * w * std::sin(w * t) + s0.v[p] * std::cos(w * t), 1e-12);
        }
    }
}

TEST(MfeNd, ReconstructExactAtStart) {
    Fixture F(3);
    auto s0 = random_state(F.ms, 0.1, 13);
    auto r = reconstruct_nd(F.T, 0.0);
    for (std::size_t p = 0; p < F.ms.size(); ++p) EXPECT_NEAR(r.u[p], s0.u[p], 1e-16);
    EXPECT_THROW(reconstruct_nd(F.T, 11.0), Error);
}

// Property: z_j^{-k} = conj z_j^k, off-diagonal labels absent from layers 1 and 2, real reconstruction.
TEST(MfeNd, RealityAndLayers) {
    Fixture F(3);
    const auto& T = F.T;
    const int R = static_cast<int>(T.ladder().size());
    for (double tau : {0.0, 0.5, 1.0}) {
        auto s = T.snapshot(tau, 2);
        for (std::size_t i = 0; i < T.slot_count(); ++i) {
            const auto p = static_cast<std::size_t>(T.slot_mode(i));
            auto m = T.find_slot(p, pack(-unpack(T.slot_label(i), R)));
            ASSERT_TRUE(m);
            EXPECT_NEAR(T.slot_kappa(static_cast<std::size_t>(*m)), -T.slot_kappa(i), 1e-12);
            for (int l = 1; l <= T.order() + 1; ++l)
                for (int q = 0; q <= 2; ++q) {
                    cplx a = s.z(l, static_cast<int>(i), q), b = s.z(l, *m, q);
                    EXPECT_LE(std::abs(a - std::conj(b)), 1e-12 * std::max(1.0, std::abs(a)));
                    if (unpack(T.slot_label(i), R).norm() > l) {
                        EXPECT_EQ(a, cplx{});
                    }
                }
            if (T.slot_diag(i) == 0) {
                EXPECT_GE(T.slot_first_layer(i), 3);
                EXPECT_FALSE(in_near_set(T.slot_kappa(i), F.ms.omega(p), T.delta(), 1));
                EXPECT_FALSE(in_near_set(T.slot_kappa(i), F.ms.omega(p), T.delta(), -1));
            }
        }
        double im = 0;
        T.reconstruct(s, &im);
        EXPECT_LE(im, 1e-10);
        EXPECT_LE(std::abs(T.almost_invariant(s).imag), 1e-10);
    }
}

TEST(MfeNd, DefectPathsAgree) {
    Fixture F(2);
    for (double tau : {0.0, 0.5, 1.0}) {
        auto d = defect_nd(F.T, tau, true);
        ASSERT_GT(d.norm, 0.0);
        EXPECT_LE(std::abs(d.norm - d.norm_check), 1e-10 * d.norm);
        EXPECT_LE(d.max_entry_gap, 1e-10 * d.max_entry);
    }
    EXPECT_EQ(F.T.defect_order(), F.T.order() + 2);
}

TEST(MfeNd, Errors) {
    ModeSet one(1, 4, {pi});
    EXPECT_THROW(build_modulation_nd(one, ModeState::zeros(4), make_spec("1", "1", 0.1), opts(2)), Error);
    ModeSet ms(2, 2, {pi, pi});
    auto o = opts(2);
    o.alpha = 1.5;
    EXPECT_THROW(build_modulation_nd(ms, ModeState::zeros(4), make_spec("1", "1", 0.1), o), Error);
}

namespace {
LatticeConfig lattice_for(const ModulationTableND& T, std::mt19937_64& rng, int offdiag_per_mode) {
    std::vector<std::vector<std::pair<LabelCode, double>>> labels(T.modes().size());
    std::vector<int> taken(T.modes().size(), 0);
    for (std::size_t i = 0; i < T.slot_count(); ++i) {
        const auto p = static_cast<std::size_t>(T.slot_mode(i));
        if (T.slot_diag(i) == 0) {
            if (T.slot_kappa(i) < 0 || taken[p] >= offdiag_per_mode) continue;
            ++taken[p];
        }
        labels[p].push_back({T.slot_label(i), T.slot_kappa(i)});
    }
    return random_lattice(T.modes(), labels, rng, 1.0);
}
}  // namespace

// Property: the cubic force is the gradient of the quartic potential.
TEST(Lattice, GradientStructure) {
    ModeSet ms(2, 2, {pi, pi});
    auto T = build_modulation_nd(ms, random_state(ms, 0.1, 3), make_spec("1", "1", 0.1), opts(2));
    std::mt19937_64 rng(99);
    for (int trial = 0; trial < 20; ++trial) {
        auto cfg = lattice_for(T, rng, 1);
        const double a = 0.5 + trial * 0.1;
        const auto& E = cfg.entries();
        for (std::size_t n = 0; n < E.size(); n += E.size() / 5) {
            cplx an = cubic_force(cfg, a, E[n].j, E[n].k);
            cplx fd = potential_gradient_fd(cfg, a, E[n].j, E[n].k);
            EXPECT_LE(std::abs(an - fd), 1e-6 * std::max(1.0, std::abs(an))) << "trial " << trial;
        }
    }
}

// Property: the potential is invariant under the label phase rotation, and the two pairing sums vanish.
TEST(Lattice, RotationAndCancellation) {
    ModeSet ms(3, 2, {pi, pi, pi});
    auto T = build_modulation_nd(ms, random_state(ms, 0.1, 3), make_spec("1", "1", 0.1), opts(2));
    std::mt19937_64 rng(7);
    for (int trial = 0; trial < 5; ++trial) {
        auto cfg = lattice_for(T, rng, 1);
        const double sc = quartic_scale(cfg, 1.0);
        ASSERT_GT(sc, 0.0);
        EXPECT_LE(std::abs(rotation_derivative(cfg, 1.0)), 1e-8 * sc);
        auto [s1, s2] = cancellation_sums(cfg, 1.3);
        double m1 = 0, m2 = 0;
        for (const auto& e : cfg.entries()) {
            m1 += std::abs(e.kappa) * std::norm(e.y) * e.omega * e.omega * 1.69;
            m2 += std::abs(e.kappa) * std::norm(e.ydot);
        }
        EXPECT_LE(std::abs(s1), 1e-12 * m1);
        EXPECT_LE(std::abs(s2), 1e-12 * m2);
    }
}
