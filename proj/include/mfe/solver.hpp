#pragma once

// Reference integration of the truncated coefficient system
//   u_j'' = -c(eps t)^2 Omega_j^2 u_j - a(eps t) sum_{j1+j2+j3=j} u_j1 u_j2 u_j3
// with an explicit 8(5,3) Dormand-Prince pair.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <functional>
#include <string>
#include <vector>

#include "mfe/profile.hpp"
#include "mfe/spectral.hpp"

namespace mfe {

// Brute-force triple convolution over the full signed lattice; O(P^3 4^d).
inline std::vector<double> cubic_term_direct(const ModeSet& ms, std::span<const double> u) {
    const int d = ms.dim(), J = ms.cutoff();
    const auto signs = sign_patterns(d);
    struct Img {
        ModeIndex j;
        double val;
    };
    std::vector<Img> imgs;
    for (std::size_t p = 0; p < ms.size(); ++p) {
        for (const auto& s : signs) {
            Img im{};
            for (int i = 0; i < d; ++i) im.j[static_cast<std::size_t>(i)] = s.s[static_cast<std::size_t>(i)] * ms.mode(p)[static_cast<std::size_t>(i)];
            im.val = s.parity * u[p];
            imgs.push_back(im);
        }
    }
    std::vector<double> out(ms.size());
    for (std::size_t p = 0; p < ms.size(); ++p) {
        const ModeIndex& j = ms.mode(p);
        double acc = 0.0;
        for (const auto& a : imgs) {
            for (const auto& b : imgs) {
                ModeIndex j3{0, 0, 0};
                bool ok = true;
                double parity = 1.0;
                for (int i = 0; i < d && ok; ++i) {
                    auto ii = static_cast<std::size_t>(i);
                    int c = j[ii] - a.j[ii] - b.j[ii];
                    if (c == 0 || std::abs(c) > J) ok = false;
                    if (c < 0) parity = -parity;
                    j3[ii] = std::abs(c);
                }
                if (!ok) continue;
                acc += a.val * b.val * parity * u[*ms.find(j3)];
            }
        }
        out[p] = acc;
    }
    return out;
}

// Collocation on the DST-I grid x_n = n pi/(M+1), n = 1..M, M = 2J+1 per axis.
// With g(x) = sum_j u_j prod_i sin(j_i x_i) the convolution equals (-4)^d
// times the sine coefficients of g^3; M >= 2J keeps modes <= J alias-free.
class CubicCollocation {
public:
    CubicCollocation() = default;
    explicit CubicCollocation(const ModeSet& ms) : d_(ms.dim()), J_(ms.cutoff()), M_(2 * ms.cutoff() + 1) {
        fwd_.resize(static_cast<std::size_t>(M_ * J_));
        bwd_.resize(static_cast<std::size_t>(J_ * M_));
        const double h = std::numbers::pi / (M_ + 1);
        for (int n = 1; n <= M_; ++n)
            for (int j = 1; j <= J_; ++j) {
                double s = std::sin(j * n * h);
                fwd_[static_cast<std::size_t>((n - 1) * J_ + (j - 1))] = s;
                bwd_[static_cast<std::size_t>((j - 1) * M_ + (n - 1))] = 2.0 / (M_ + 1) * s;
            }
        scale_ = std::pow(-4.0, d_);
    }

    std::vector<double> operator()(std::span<const double> u) const {
        std::array<int, 3> dims{1, 1, 1};
        for (int i = 0; i < d_; ++i) dims[static_cast<std::size_t>(i)] = J_;
        std::vector<double> a(u.begin(), u.end()), b;
        for (int ax = 0; ax < d_; ++ax) {
            apply(a, b, dims, ax, fwd_, M_, J_);
            std::swap(a, b);
            dims[static_cast<std::size_t>(ax)] = M_;
        }
        for (double& x : a) x = x * x * x;
        for (int ax = 0; ax < d_; ++ax) {
            apply(a, b, dims, ax, bwd_, J_, M_);
            std::swap(a, b);
            dims[static_cast<std::size_t>(ax)] = J_;
        }
        for (double& x : a) x *= scale_;
        return a;
    }

private:
    // Row-major tensor (axis 0 slowest); contract `axis` with a rows x cols matrix.
    static void apply(const std::vector<double>& in, std::vector<double>& out, const std::array<int, 3>& dims,
                      int axis, const std::vector<double>& mat, int rows, int cols) {
        std::size_t outer = 1, inner = 1;
        for (int i = 0; i < axis; ++i) outer *= static_cast<std::size_t>(dims[static_cast<std::size_t>(i)]);
        for (int i = axis + 1; i < 3; ++i) inner *= static_cast<std::size_t>(dims[static_cast<std::size_t>(i)]);
        out.assign(outer * static_cast<std::size_t>(rows) * inner, 0.0);
        for (std::size_t o = 0; o < outer; ++o)
            for (int r = 0; r < rows; ++r) {
                double* dst = &out[(o * static_cast<std::size_t>(rows) + static_cast<std::size_t>(r)) * inner];
                for (int c = 0; c < cols; ++c) {
                    double m = mat[static_cast<std::size_t>(r * cols + c)];
                    const double* src = &in[(o * static_cast<std::size_t>(cols) + static_cast<std::size_t>(c)) * inner];
                    for (std::size_t i = 0; i < inner; ++i) dst[i] += m * src[i];
                }
            }
    }

    int d_ = 1, J_ = 1, M_ = 3;
    std::vector<double> fwd_, bwd_;
    double scale_ = -4.0;
};

inline std::vector<double> cubic_term(const ModeSet& ms, std::span<const double> u) {
    return CubicCollocation(ms)(u);
}

inline ModeState rhs(const ModeSet& ms, const ModeState& s, const ProblemSpec& spec, const CubicCollocation& cubic) {
    const double tau = spec.epsilon * s.t;
    const double c = spec.speed(tau), a = spec.coupling(tau);
    ModeState d = ModeState::zeros(ms.size(), s.t);
    std::vector<double> conv = a != 0.0 ? cubic(s.u) : std::vector<double>(ms.size());
    for (std::size_t p = 0; p < ms.size(); ++p) {
        double w = ms.omega(p);
        d.u[p] = s.v[p];
        d.v[p] = -c * c * w * w * s.u[p] - a * conv[p];
    }
    return d;
}

inline ModeState rhs(const ModeSet& ms, const ModeState& s, const ProblemSpec& spec) {
    return rhs(ms, s, spec, CubicCollocation(ms));
}

struct IntegratorStats {
    long steps = 0;
    long rejected = 0;
    long rhs_evals = 0;
    double tol = 0.0;
};

struct Trajectory {
    std::vector<double> t;
    std::vector<ModeState> states;
    std::vector<double> action;
    std::vector<SobolevNorms> norms;
    IntegratorStats stats;
};

namespace dop853 {
// Hairer's DOP853 tableau.
inline constexpr double c2 = 0.526001519587677318785587544488e-01, c3 = 0.789002279381515978178381316732e-01,
                        c4 = 0.118350341907227396726757197510e+00, c5 = 0.281649658092772603273242802490e+00,
                        c6 = 0.333333333333333333333333333333e+00, c7 = 0.25e+00,
                        c8 = 0.307692307692307692307692307692e+00, c9 = 0.651282051282051282051282051282e+00,
                        c10 = 0.6e+00, c11 = 0.857142857142857142857142857142e+00;
inline constexpr double a21 = 5.26001519587677318785587544488e-2, a31 = 1.97250569845378994544595329183e-2,
                        a32 = 5.91751709536136983633785987549e-2, a41 = 2.95875854768068491816892993775e-2,
                        a43 = 8.87627564304205475450678981324e-2, a51 = 2.41365134159266685502369798665e-1,
                        a53 = -8.84549479328286085344864962717e-1, a54 = 9.24834003261792003115737966543e-1,
                        a61 = 3.7037037037037037037037037037e-2, a64 = 1.70828608729473871279604482173e-1,
                        a65 = 1.25467687566822425016691814123e-1, a71 = 3.7109375e-2,
                        a74 = 1.70252211019544039314978060272e-1, a75 = 6.02165389804559606850219397283e-2,
                        a76 = -1.7578125e-2, a81 = 3.70920001185047927108779319836e-2,
                        a84 = 1.70383925712239993810214054705e-1, a85 = 1.07262030446373284651809199168e-1,
                        a86 = -1.53194377486244017527936158236e-2, a87 = 8.27378916381402288758473766002e-3,
                        a91 = 6.24110958716075717114429577812e-1, a94 = -3.36089262944694129406857109825e0,
                        a95 = -8.68219346841726006818189891453e-1, a96 = 2.75920996994467083049415600797e1,
                        a97 = 2.01540675504778934086186788979e1, a98 = -4.34898841810699588477366255144e1,
                        a101 = 4.77662536438264365890433908527e-1, a104 = -2.48811461997166764192642586468e0,
                        a105 = -5.90290826836842996371446475743e-1, a106 = 2.12300514481811942347288949897e1,
                        a107 = 1.52792336328824235832596922938e1, a108 = -3.32882109689848629194453265587e1,
                        a109 = -2.03312017085086261358222928593e-2, a111 = -9.3714243008598732571704021658e-1,
                        a114 = 5.18637242884406370830023853209e0, a115 = 1.09143734899672957818500254654e0,
                        a116 = -8.14978701074692612513997267357e0, a117 = -1.85200656599969598641566180701e1,
                        a118 = 2.27394870993505042818970056734e1, a119 = 2.49360555267965238987089396762e0,
                        a1110 = -3.0467644718982195003823669022e0, a121 = 2.27331014751653820792359768449e0,
                        a124 = -1.05344954667372501984066689879e1, a125 = -2.00087205822486249909675718444e0,
                        a126 = -1.79589318631187989172765950534e1, a127 = 2.79488845294199600508499808837e1,
                        a128 = -2.85899827713502369474065508674e0, a129 = -8.87285693353062954433549289258e0,
                        a1210 = 1.23605671757943030647266201528e1, a1211 = 6.43392746015763530355970484046e-1;
inline constexpr double b1 = 5.42937341165687622380535766363e-2, b6 = 4.45031289275240888144113950566e0,
                        b7 = 1.89151789931450038304281599044e0, b8 = -5.8012039600105847814672114227e0,
                        b9 = 3.1116436695781989440891606237e-1, b10 = -1.52160949662516078556178806805e-1,
                        b11 = 2.01365400804030348374776537501e-1, b12 = 4.47106157277725905176885569043e-2;
inline constexpr double bhh1 = 0.244094488188976377952755905512e+00, bhh2 = 0.733846688281611857341361741547e+00,
                        bhh3 = 0.220588235294117647058823529412e-01;
inline constexpr double er1 = 0.1312004499419488073250102996e-01, er6 = -0.1225156446376204440720569753e+01,
                        er7 = -0.4957589496572501915214079952e+00, er8 = 0.1664377182454986536961530415e+01,
                        er9 = -0.3503288487499736816886487290e+00, er10 = 0.3341791187130174790297318841e+00,
                        er11 = 0.8192320648511571246570742613e-01, er12 = -0.2235530786388629525884427845e-01;
}  // namespace dop853

// Adaptive integration from s0 (at s0.t) to t1, sampling every dt including
// both endpoints. The local error is measured in the Sobolev metric
// sqrt(2^d sum Omega^2 du^2 + dv^2) and held below tol * min(h, 1), so the
// global error over a time span T stays near tol * T.
inline Trajectory integrate(const ModeSet& ms, const ModeState& s0, double t1, const ProblemSpec& spec, double tol,
                            double dt) {
    using namespace dop853;
    if (!(t1 > s0.t)) throw Error("integrate: t1 must exceed the start time");
    if (!(tol > 0)) throw Error("integrate: tol must be positive");
    if (!(dt > 0)) throw Error("integrate: sample spacing must be positive");
    const std::size_t P = ms.size(), n = 2 * P;
    const CubicCollocation cubic(ms);
    const double images = std::ldexp(1.0, ms.dim());
    std::vector<double> wt(n);
    for (std::size_t p = 0; p < P; ++p) {
        wt[p] = images * ms.omega(p) * ms.omega(p);
        wt[P + p] = images;
    }
    Trajectory tr;
    tr.stats.tol = tol;

    auto f = [&](double t, const std::vector<double>& y, std::vector<double>& dy) {
        ++tr.stats.rhs_evals;
        const double tau = spec.epsilon * t;
        const double c = spec.speed(tau), a = spec.coupling(tau);
        std::span<const double> u(y.data(), P);
        std::vector<double> conv = a != 0.0 ? cubic(u) : std::vector<double>(P);
        for (std::size_t p = 0; p < P; ++p) {
            double w = ms.omega(p);
            dy[p] = y[P + p];
            dy[P + p] = -c * c * w * w * y[p] - a * conv[p];
        }
    };
    auto record = [&](double t, const std::vector<double>& y) {
        ModeState s{std::vector<double>(y.begin(), y.begin() + static_cast<long>(P)),
                    std::vector<double>(y.begin() + static_cast<long>(P), y.end()), t};
        tr.t.push_back(t);
        tr.norms.push_back(sobolev_norms(ms, s));
        tr.action.push_back(action(ms, s, spec.speed(spec.epsilon * t)));
        tr.states.push_back(std::move(s));
    };

    std::vector<double> y(n);
    std::copy(s0.u.begin(), s0.u.end(), y.begin());
    std::copy(s0.v.begin(), s0.v.end(), y.begin() + static_cast<long>(P));
    double t = s0.t;
    record(t, y);
    const double norm0 = tr.norms[0].grad + tr.norms[0].vel;
    const double guard = 1e3 * std::max(norm0, 1e-300);

    std::vector<double> k1(n), k2(n), k3(n), k4(n), k5(n), k6(n), k7(n), k8(n), k9(n), k10(n), k11(n), k12(n),
        yt(n), ynew(n);
    f(t, y, k1);
    double maxf = 0.0;
    for (double w : ms.omegas()) maxf = std::max(maxf, w);
    maxf *= spec.speed(spec.epsilon * t) + 1.0;
    double h = std::min(dt, 0.5 / maxf);

    const auto nsamples = static_cast<long>(std::ceil((t1 - s0.t) / dt - 1e-9));
    for (long si = 1; si <= nsamples; ++si) {
        const double target = si == nsamples ? t1 : s0.t + static_cast<double>(si) * dt;
        while (t < target) {
            bool last = false;
            double hs = h;
            if (t + hs >= target - 1e-14 * std::abs(target)) {
                hs = target - t;
                last = true;
            }
            if (hs < 1e-14 * std::max(1.0, std::abs(t))) throw SolverError(t, "step size underflow");
            auto stage = [&](std::vector<double>& out, double cc, auto&&... terms) {
                for (std::size_t i = 0; i < n; ++i) {
                    double s = 0.0;
                    ((s += terms.first * (*terms.second)[i]), ...);
                    yt[i] = y[i] + hs * s;
                }
                f(t + cc * hs, yt, out);
            };
            using P2 = std::pair<double, const std::vector<double>*>;
            stage(k2, c2, P2{a21, &k1});
            stage(k3, c3, P2{a31, &k1}, P2{a32, &k2});
            stage(k4, c4, P2{a41, &k1}, P2{a43, &k3});
            stage(k5, c5, P2{a51, &k1}, P2{a53, &k3}, P2{a54, &k4});
            stage(k6, c6, P2{a61, &k1}, P2{a64, &k4}, P2{a65, &k5});
            stage(k7, c7, P2{a71, &k1}, P2{a74, &k4}, P2{a75, &k5}, P2{a76, &k6});
            stage(k8, c8, P2{a81, &k1}, P2{a84, &k4}, P2{a85, &k5}, P2{a86, &k6}, P2{a87, &k7});
            stage(k9, c9, P2{a91, &k1}, P2{a94, &k4}, P2{a95, &k5}, P2{a96, &k6}, P2{a97, &k7}, P2{a98, &k8});
            stage(k10, c10, P2{a101, &k1}, P2{a104, &k4}, P2{a105, &k5}, P2{a106, &k6}, P2{a107, &k7},
                  P2{a108, &k8}, P2{a109, &k9});
            stage(k11, c11, P2{a111, &k1}, P2{a114, &k4}, P2{a115, &k5}, P2{a116, &k6}, P2{a117, &k7},
                  P2{a118, &k8}, P2{a119, &k9}, P2{a1110, &k10});
            stage(k12, 1.0, P2{a121, &k1}, P2{a124, &k4}, P2{a125, &k5}, P2{a126, &k6}, P2{a127, &k7},
                  P2{a128, &k8}, P2{a129, &k9}, P2{a1210, &k10}, P2{a1211, &k11});
            double err5 = 0.0, err3 = 0.0;
            for (std::size_t i = 0; i < n; ++i) {
                double incr = b1 * k1[i] + b6 * k6[i] + b7 * k7[i] + b8 * k8[i] + b9 * k9[i] + b10 * k10[i] +
                              b11 * k11[i] + b12 * k12[i];
                ynew[i] = y[i] + hs * incr;
                double e3 = incr - bhh1 * k1[i] - bhh2 * k9[i] - bhh3 * k12[i];
                double e5 = er1 * k1[i] + er6 * k6[i] + er7 * k7[i] + er8 * k8[i] + er9 * k9[i] + er10 * k10[i] +
                            er11 * k11[i] + er12 * k12[i];
                err3 += wt[i] * (e3 / tol) * (e3 / tol);
                err5 += wt[i] * (e5 / tol) * (e5 / tol);
            }
            double deno = err5 + 0.01 * err3;
            if (deno <= 0.0) deno = 1.0;
            // error per unit step: the accepted local error is at most tol * min(h, 1)
            double err = std::abs(hs) * err5 / std::sqrt(deno) / std::min(std::abs(hs), 1.0);
            double fac = err > 0 ? 0.9 * std::pow(err, -1.0 / 8.0) : 6.0;
            fac = std::clamp(fac, 1.0 / 3.0, 6.0);
            ++tr.stats.steps;
            if (err <= 1.0) {
                t = last ? target : t + hs;
                y.swap(ynew);
                f(t, y, k1);
                SobolevNorms nn = sobolev_norms(
                    ms, ModeState{std::vector<double>(y.begin(), y.begin() + static_cast<long>(P)),
                                  std::vector<double>(y.begin() + static_cast<long>(P), y.end()), t});
                if (!std::isfinite(nn.grad + nn.vel) || nn.grad + nn.vel > guard)
                    throw SolverError(t, "blow-up guard tripped (norm exceeds 1e3 x initial)");
                if (!last) h = hs * fac;
            } else {
                ++tr.stats.rejected;
                h = hs * std::min(1.0, fac);
            }
        }
        record(t, y);
    }
    return tr;
}

inline void write_trajectory_csv(const Trajectory& tr, const std::string& path) {
    std::ofstream os(path);
    if (!os) throw Error("cannot open " + path + " for writing");
    os << "t,I,grad_norm,vel_norm\n";
    char buf[128];
    for (std::size_t i = 0; i < tr.t.size(); ++i) {
        std::snprintf(buf, sizeof buf, "%.17g,%.17g,%.17g,%.17g\n", tr.t[i], tr.action[i], tr.norms[i].grad,
                      tr.norms[i].vel);
        os << buf;
    }
    if (!os) throw Error("write failed for " + path);
}

}  // namespace mfe
