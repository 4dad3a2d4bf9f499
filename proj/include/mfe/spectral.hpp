#pragma once

// Sine-spectral mode sets, states, norms, the action, and the frequency
// ladder with its integer labels.

#include <algorithm>
#include <array>
#include <cmath>
#include <complex>
#include <cstdint>
#include <numbers>
#include <numeric>
#include <optional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "mfe/error.hpp"

namespace mfe {

using cplx = std::complex<double>;
using ModeIndex = std::array<int, 3>;  // unused trailing components are 0

inline double omega(const ModeIndex& j, std::span<const double> lengths) {
    double s = 0.0;
    for (std::size_t i = 0; i < lengths.size(); ++i) {
        if (j[i] == 0) throw Error("omega: mode index has a zero component");
        double w = j[i] * std::numbers::pi / lengths[i];
        s += w * w;
    }
    return std::sqrt(s);
}

// Length l = pi * num/den. Used to compare squared frequencies exactly.
struct PiMultiple {
    std::int64_t num = 1, den = 1;
};

class ModeSet {
public:
    ModeSet() = default;
    ModeSet(int dim, int cutoff, std::vector<double> lengths,
            std::optional<std::vector<PiMultiple>> pi_multiples = std::nullopt)
        : dim_(dim), cutoff_(cutoff), lengths_(std::move(lengths)), pi_(std::move(pi_multiples)) {
        if (dim_ < 1 || dim_ > 3) throw Error("ModeSet: dimension must be 1, 2 or 3");
        if (cutoff_ < 1) throw Error("ModeSet: cutoff must be at least 1");
        if (static_cast<int>(lengths_.size()) != dim_) throw Error("ModeSet: one length per axis required");
        for (double l : lengths_)
            if (!(l > 0)) throw Error("ModeSet: lengths must be positive");
        if (pi_ && static_cast<int>(pi_->size()) != dim_) pi_.reset();
        ModeIndex j{0, 0, 0};
        enumerate(0, j);
        omega_.reserve(modes_.size());
        for (const auto& m : modes_) omega_.push_back(mfe::omega(m, lengths_));
    }

    int dim() const { return dim_; }
    int cutoff() const { return cutoff_; }
    std::size_t size() const { return modes_.size(); }
    const std::vector<double>& lengths() const { return lengths_; }
    const ModeIndex& mode(std::size_t p) const { return modes_[p]; }
    double omega(std::size_t p) const { return omega_[p]; }
    const std::vector<double>& omegas() const { return omega_; }
    const std::optional<std::vector<PiMultiple>>& pi_multiples() const { return pi_; }

    // Lexicographic position of a positive-octant index, or nullopt.
    std::optional<std::size_t> find(const ModeIndex& j) const {
        std::size_t p = 0;
        for (int i = 0; i < dim_; ++i) {
            if (j[static_cast<std::size_t>(i)] < 1 || j[static_cast<std::size_t>(i)] > cutoff_) return std::nullopt;
            p = p * static_cast<std::size_t>(cutoff_) + static_cast<std::size_t>(j[static_cast<std::size_t>(i)] - 1);
        }
        return p;
    }

    // Omega^2 scaled to an integer when every length is a rational multiple of pi.
    std::optional<std::int64_t> exact_omega2(std::size_t p) const {
        if (!pi_) return std::nullopt;
        std::int64_t L = 1;
        for (const auto& m : *pi_) L = std::lcm(L, m.num * m.num);
        std::int64_t s = 0;
        for (int i = 0; i < dim_; ++i) {
            const auto& m = (*pi_)[static_cast<std::size_t>(i)];
            std::int64_t ji = modes_[p][static_cast<std::size_t>(i)];
            s += ji * ji * m.den * m.den * (L / (m.num * m.num));
        }
        return s;
    }

private:
    void enumerate(int axis, ModeIndex& j) {
        if (axis == dim_) {
            modes_.push_back(j);
            return;
        }
        for (int v = 1; v <= cutoff_; ++v) {
            j[static_cast<std::size_t>(axis)] = v;
            enumerate(axis + 1, j);
        }
        j[static_cast<std::size_t>(axis)] = 0;
    }

    int dim_ = 1;
    int cutoff_ = 1;
    std::vector<double> lengths_;
    std::optional<std::vector<PiMultiple>> pi_;
    std::vector<ModeIndex> modes_;
    std::vector<double> omega_;
};

// Sign patterns s in {-1,1}^d with parity sigma(s) = prod s_i. A positive
// mode j has images s*j carrying coefficient sigma(s) u_j.
struct SignPattern {
    ModeIndex s{1, 1, 1};
    double parity = 1.0;
};

inline std::vector<SignPattern> sign_patterns(int dim) {
    std::vector<SignPattern> out;
    for (int mask = 0; mask < (1 << dim); ++mask) {
        SignPattern sp;
        for (int i = 0; i < dim; ++i) {
            if (mask & (1 << i)) {
                sp.s[static_cast<std::size_t>(i)] = -1;
                sp.parity = -sp.parity;
            }
        }
        out.push_back(sp);
    }
    return out;
}

struct ModeState {
    std::vector<double> u, v;
    double t = 0.0;

    static ModeState zeros(std::size_t n, double t = 0.0) { return {std::vector<double>(n), std::vector<double>(n), t}; }
};

struct SobolevNorms {
    double grad = 0.0;
    double vel = 0.0;
};

// Coefficient-space norms over the full signed lattice (2^d images per stored mode).
inline SobolevNorms sobolev_norms(const ModeSet& ms, const ModeState& s) {
    double g = 0.0, v = 0.0;
    for (std::size_t p = 0; p < ms.size(); ++p) {
        double w = ms.omega(p);
        g += w * w * s.u[p] * s.u[p];
        v += s.v[p] * s.v[p];
    }
    double images = std::ldexp(1.0, ms.dim());
    return {std::sqrt(images * g), std::sqrt(images * v)};
}

inline double action(const ModeSet& ms, const ModeState& s, double c) {
    if (!(c > 0)) throw Error("action: wave speed must be positive");
    auto n = sobolev_norms(ms, s);
    return (n.vel * n.vel + c * c * n.grad * n.grad) / (2.0 * c);
}

// ---------------------------------------------------------------------------
// Labels. A MultiIndexK is a sparse integer vector over ladder rungs.

struct MultiIndexK {
    std::vector<std::pair<int, int>> entries;  // (rung, k_m != 0), rung increasing

    int norm() const {
        int s = 0;
        for (auto [m, k] : entries) s += std::abs(k);
        return s;
    }
    double dot(std::span<const double> ladder) const {
        double s = 0.0;
        for (auto [m, k] : entries) s += k * ladder[static_cast<std::size_t>(m)];
        return s;
    }
    bool canonical() const {
        for (std::size_t i = 0; i < entries.size(); ++i) {
            if (entries[i].second == 0) return false;
            if (i > 0 && entries[i].first <= entries[i - 1].first) return false;
        }
        return true;
    }
    MultiIndexK operator-() const {
        MultiIndexK r = *this;
        for (auto& e : r.entries) e.second = -e.second;
        return r;
    }
    static MultiIndexK unit(int m, int k = 1) { return {{{m, k}}}; }
    friend bool operator==(const MultiIndexK&, const MultiIndexK&) = default;
};

inline MultiIndexK operator+(const MultiIndexK& a, const MultiIndexK& b) {
    MultiIndexK r;
    std::size_t i = 0, j = 0;
    while (i < a.entries.size() || j < b.entries.size()) {
        if (j == b.entries.size() || (i < a.entries.size() && a.entries[i].first < b.entries[j].first)) {
            r.entries.push_back(a.entries[i++]);
        } else if (i == a.entries.size() || b.entries[j].first < a.entries[i].first) {
            r.entries.push_back(b.entries[j++]);
        } else {
            int k = a.entries[i].second + b.entries[j].second;
            if (k != 0) r.entries.emplace_back(a.entries[i].first, k);
            ++i;
            ++j;
        }
    }
    return r;
}

// Packed labels: balanced base-32 digits, one per rung, so that label
// addition is integer addition as long as every |k_m| <= 15.
using LabelCode = std::int64_t;
inline constexpr int kLabelBits = 5;
inline constexpr int kMaxRungs = 12;
inline constexpr int kMaxLabelEntry = 15;

inline LabelCode pack(const MultiIndexK& k) {
    LabelCode code = 0;
    for (auto it = k.entries.rbegin(); it != k.entries.rend(); ++it) {
        if (it->first >= kMaxRungs) throw Error("label packing supports at most 12 distinct frequencies");
        if (std::abs(it->second) > kMaxLabelEntry) throw Error("label entry out of packing range");
    }
    LabelCode scale = 1;
    int m = 0;
    for (auto [rung, v] : k.entries) {
        for (; m < rung; ++m) scale <<= kLabelBits;
        code += v * scale;
    }
    return code;
}

inline MultiIndexK unpack(LabelCode code, int rungs) {
    MultiIndexK k;
    constexpr LabelCode base = LabelCode{1} << kLabelBits;
    constexpr LabelCode half = base / 2;
    for (int m = 0; m < rungs && code != 0; ++m) {
        LabelCode digit = ((code % base) + base + half) % base - half;
        if (digit != 0) k.entries.emplace_back(m, static_cast<int>(digit));
        code = (code - digit) / base;
    }
    if (code != 0) throw Error("unpack: label code has digits beyond the ladder");
    return k;
}

struct FrequencyLadder {
    std::vector<double> omega;  // strictly increasing rungs
    std::vector<int> rung;      // rung of each mode
    double tol = 0.0;
    bool exact = false;  // built from exact squared frequencies

    MultiIndexK unit(std::size_t mode) const { return MultiIndexK::unit(rung[mode]); }
    std::size_t size() const { return omega.size(); }
};

// Negative tol selects the default 1e-9 * smallest frequency.
inline FrequencyLadder frequency_ladder(const ModeSet& ms, double tol = -1.0) {
    FrequencyLadder L;
    std::size_t n = ms.size();
    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), std::size_t{0});
    L.rung.assign(n, -1);
    if (ms.pi_multiples()) {
        L.exact = true;
        std::vector<std::int64_t> key(n);
        for (std::size_t p = 0; p < n; ++p) key[p] = *ms.exact_omega2(p);
        std::stable_sort(order.begin(), order.end(), [&](auto a, auto b) { return key[a] < key[b]; });
        for (std::size_t i = 0; i < n; ++i) {
            std::size_t p = order[i];
            if (i == 0 || key[p] != key[order[i - 1]]) L.omega.push_back(ms.omega(p));
            L.rung[p] = static_cast<int>(L.omega.size()) - 1;
        }
        L.tol = 0.0;
        return L;
    }
    const auto& w = ms.omegas();
    std::stable_sort(order.begin(), order.end(), [&](auto a, auto b) { return w[a] < w[b]; });
    if (tol < 0) tol = 1e-9 * w[order.front()];
    L.tol = tol;
    std::size_t start = 0;
    for (std::size_t i = 1; i <= n; ++i) {
        if (i < n && w[order[i]] - w[order[i - 1]] <= tol) continue;
        double lo = w[order[start]], hi = w[order[i - 1]];
        if (hi - lo > 10.0 * tol && tol > 0)
            throw Error("frequency_ladder: ambiguous merge, cluster diameter " + std::to_string(hi - lo) +
                        " exceeds 10*tol");
        double mean = 0.0;
        for (std::size_t q = start; q < i; ++q) mean += w[order[q]];
        mean /= static_cast<double>(i - start);
        for (std::size_t q = start; q < i; ++q) L.rung[order[q]] = static_cast<int>(L.omega.size());
        L.omega.push_back(mean);
        start = i;
    }
    return L;
}

// Membership in the kept set: | |k.w| - Omega | >= eps^(1-alpha), or k = +-<j>.
inline bool in_kept_set(double kappa, double Omega, double delta, bool is_diagonal) {
    return is_diagonal || std::abs(std::abs(kappa) - Omega) >= delta;
}
// Near-resonant with sign s: |k.w - s*Omega| < eps^(1-alpha) (no inner absolute value).
inline bool in_near_set(double kappa, double Omega, double delta, int sign) {
    return std::abs(kappa - sign * Omega) < delta;
}

inline std::vector<MultiIndexK> resonance_set(std::size_t mode, const FrequencyLadder& ladder, double eps,
                                              double alpha, int kmax, std::size_t cap = 2'000'000) {
    if (!(alpha > 0 && alpha < 1)) throw Error("resonance_set: alpha must lie in (0,1)");
    if (kmax < 1) throw Error("resonance_set: kmax must be at least 1");
    const double delta = std::pow(eps, 1.0 - alpha);
    const double Om = ladder.omega[static_cast<std::size_t>(ladder.rung[mode])];
    const MultiIndexK up = ladder.unit(mode), down = -up;
    const int R = static_cast<int>(ladder.size());
    std::vector<MultiIndexK> out;
    std::size_t visited = 0;
    MultiIndexK cur;
    // Depth-first over rungs in increasing order, remaining budget b.
    auto dfs = [&](auto&& self, int m, int b) -> void {
        if (m == R) {
            if (cur.entries.empty()) return;
            if (++visited > cap) throw BudgetError("resonance_set: enumeration cap exceeded", visited);
            double kw = cur.dot(ladder.omega);
            if (in_kept_set(kw, Om, delta, cur == up || cur == down)) out.push_back(cur);
            return;
        }
        self(self, m + 1, b);
        for (int v = 1; v <= b; ++v) {
            for (int s : {1, -1}) {
                cur.entries.emplace_back(m, s * v);
                self(self, m + 1, b - v);
                cur.entries.pop_back();
            }
        }
    };
    dfs(dfs, 0, kmax);
    return out;
}

// ---------------------------------------------------------------------------
// Weighted norms of one expansion layer, summed over the full signed lattice.

enum class LabelKind { Scalar, Ladder };

struct LabelValue {
    std::size_t mode = 0;
    double kappa = 0.0;  // k.omega
    int diag = 0;        // +1 / -1 for the labels +-<j>, 0 otherwise
    cplx z;
};

struct MfeNorm {
    double diag = 0.0;
    double offdiag = 0.0;
    double full = 0.0;
};

inline MfeNorm mfe_norm(const ModeSet& ms, std::span<const LabelValue> layer, LabelKind kind) {
    std::vector<double> dsum(ms.size()), osum(ms.size());
    for (const auto& e : layer) {
        double Om = ms.omega(e.mode);
        double a = std::abs(e.z);
        if (e.diag != 0) {
            dsum[e.mode] += a;
        } else {
            double w = kind == LabelKind::Scalar ? std::abs(Om * Om - e.kappa * e.kappa) : std::abs(e.kappa) + Om;
            osum[e.mode] += w * a;
        }
    }
    double d2 = 0.0, o2 = 0.0;
    for (std::size_t p = 0; p < ms.size(); ++p) {
        double Om = ms.omega(p);
        double wd = kind == LabelKind::Scalar ? Om : 2.0 * Om;
        d2 += wd * wd * dsum[p] * dsum[p];
        o2 += osum[p] * osum[p];
    }
    double images = std::ldexp(1.0, ms.dim());
    MfeNorm r;
    r.diag = std::sqrt(images * d2);
    r.offdiag = std::sqrt(images * o2);
    r.full = std::sqrt(images * (d2 + o2));
    return r;
}

}  // namespace mfe
