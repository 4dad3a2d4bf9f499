#pragma once

// Modulated Fourier expansion of the coefficient system
//
//   u_j(t) ~ sum_k z_j^k(eps t) exp(i (k.omega) phi(eps t)/eps),
//   z_j^k = sum_{l=1}^{N+1} eps^l z_{j,l}^k.
//
// One engine serves both label flavours: in 1D a label is an integer k with
// frequency k*pi/l (LabelMode::Scalar); in 2D/3D it is a packed multi-index
// over the frequency ladder (LabelMode::Ladder), and labels near the mode's
// own frequency are split off into the near-resonant sets.
//
// All slow-time derivatives are carried as truncated Taylor series, obtained
// by differentiating the layer recursion itself.

#include <absl/container/flat_hash_map.h>

#include <algorithm>
#include <array>
#include <cmath>
#include <complex>
#include <cstdint>
#include <map>
#include <numeric>
#include <optional>
#include <span>
#include <tuple>
#include <utility>
#include <vector>

#include "mfe/error.hpp"
#include "mfe/phase.hpp"
#include "mfe/profile.hpp"
#include "mfe/series.hpp"
#include "mfe/spectral.hpp"

namespace mfe {

enum class LabelMode { Scalar, Ladder };

struct ExpansionOptions {
    int order = 2;         // truncation index N
    double alpha = 0.25;   // near-resonance exponent (ladder labels only)
    double grid_h = 5e-3;  // slow-time step of the diagonal integrator
    double tau0 = 0.0;     // slow time at the window start
    // Highest total eps-order of cubic terms evaluated in the defect; -1 means
    // all of them (3N+3).
    int defect_order = -1;
    std::size_t plan_limit = 12'000'000;   // stage-2 plan entries kept per product
    std::size_t enum_budget = 4'000'000'000;  // cap on enumerated label triples
};

namespace detail {

// Dense integer code for signed mode vectors with |j_i| <= 4J.
struct JCoder {
    int dim = 1, off = 4, base = 9, zero = 0, size = 9;
    JCoder() = default;
    JCoder(int d, int J) : dim(d), off(4 * J), base(8 * J + 1) {
        zero = 0;
        size = 1;
        for (int i = 0; i < d; ++i) {
            zero = zero * base + off;
            size *= base;
        }
    }
    int encode(const ModeIndex& j) const {
        int c = 0;
        for (int i = 0; i < dim; ++i) c = c * base + j[static_cast<std::size_t>(i)] + off;
        return c;
    }
};

struct SignedEntry {
    int jc;        // code of the signed mode s*j
    int local;     // index within the owning layer
    LabelCode k;
    double parity;  // sigma(s)
};

struct PairTable {
    int a = 0, b = 0;
    int count = 0;
    std::vector<int> pa, pb, pid;
    std::vector<signed char> par;
    std::vector<int> bucket_begin;  // CSR over jc
    std::vector<std::pair<LabelCode, int>> bucket;
};

// Stage-2 plan: out[target] += par * P[pid] * C[lc].
struct OutPlan {
    bool streamed = false;
    std::vector<int> pid, lc, target;
    std::vector<signed char> par;
};

struct Split {
    int a, b, c;
    double mult;
};

}  // namespace detail

class ModulationTable;

// Everything the expansion knows at one slow time: every layer's Taylor
// series up to the order requested.
class Snapshot {
public:
    double tau() const { return tau_; }
    double phi() const { return phi_; }
    int derivs() const { return R_; }
    // q-th slow-time derivative of z_{l}^{slot}; zero if the slot is not active in layer l.
    cplx z(int l, int slot, int q = 0) const;
    // q-th derivative of the combined coefficient sum_l eps^l z_l.
    cplx combined(int slot, int q = 0) const;
    double c(int q = 0) const { return cs_[static_cast<std::size_t>(q)] * fact(q); }
    double a(int q = 0) const { return as_[static_cast<std::size_t>(q)] * fact(q); }
    const ModulationTable& table() const { return *T_; }

private:
    friend class ModulationTable;
    static double fact(int q) {
        double f = 1.0;
        for (int i = 2; i <= q; ++i) f *= i;
        return f;
    }
    const ModulationTable* T_ = nullptr;
    double tau_ = 0.0, phi_ = 0.0;
    int R_ = 0;
    std::vector<double> cs_, as_;
    std::vector<std::vector<cplx>> Z_;  // per layer: local x stride
    std::vector<int> S_;                // stride per layer
};

struct DefectResult {
    double norm = 0.0;        // direct evaluation
    double norm_check = 0.0;  // eps^(N+2)-prefactored evaluation
    double max_entry_gap = 0.0;  // max |d_direct - d_check| over entries
    double max_entry = 0.0;      // max |d_direct|
    std::size_t entries = 0;
    // per-entry values (direct path): mode, label, value
    std::vector<std::tuple<int, LabelCode, cplx>> values;
};

struct InvariantValue {
    double value = 0.0;
    double imag = 0.0;
    double leading = 0.0;
};

class ModulationTable {
public:
    ModulationTable(ModeSet modes, LabelMode lm, SlowProfile speed, SlowProfile coupling, double eps,
                    const ModeState& s0, ExpansionOptions opt)
        : ms_(std::move(modes)), lm_(lm), speed_(std::move(speed)), coupling_(std::move(coupling)), eps_(eps),
          opt_(opt), N_(opt.order) {
        if (N_ < 1) throw Error("expansion order N must be at least 1");
        if (!(eps > 0 && eps < 1)) throw Error("epsilon must lie in (0,1)");
        if (s0.u.size() != ms_.size() || s0.v.size() != ms_.size()) throw Error("initial state does not match the mode set");
        Lmax_ = opt.defect_order < 0 ? 3 * (N_ + 1) : std::clamp(opt.defect_order, N_ + 2, 3 * (N_ + 1));
        setup_modes();
        build_supports();
        build_plans();
        grid_ = uniform_grid(1.0, opt_.grid_h);
        phase_ = PhaseTable(speed_, grid_, opt_.tau0);
        integrate_diagonal(s0);
    }

    // ---- metadata
    const ModeSet& modes() const { return ms_; }
    LabelMode label_mode() const { return lm_; }
    const FrequencyLadder& ladder() const { return ladder_; }
    double eps() const { return eps_; }
    int order() const { return N_; }
    double alpha() const { return opt_.alpha; }
    double delta() const { return delta_; }
    double tau0() const { return opt_.tau0; }
    int defect_order() const { return Lmax_; }
    const ExpansionOptions& options() const { return opt_; }
    const std::vector<double>& grid() const { return grid_; }
    const PhaseTable& phase() const { return phase_; }
    const SlowProfile& speed() const { return speed_; }
    const SlowProfile& coupling() const { return coupling_; }
    double images() const { return std::ldexp(1.0, ms_.dim()); }

    // ---- slots: diagonal labels first (2p: +<j>, 2p+1: -<j>), then off-diagonal
    std::size_t slot_count() const { return slot_mode_.size(); }
    int slot_mode(std::size_t s) const { return slot_mode_[s]; }
    LabelCode slot_label(std::size_t s) const { return slot_label_[s]; }
    double slot_kappa(std::size_t s) const { return slot_kappa_[s]; }
    int slot_diag(std::size_t s) const { return slot_diag_[s]; }
    int slot_first_layer(std::size_t s) const { return slot_first_[s]; }
    std::optional<int> find_slot(std::size_t p, LabelCode k) const {
        auto it = dir_[p].find(k);
        if (it == dir_[p].end() || it->second < 0) return std::nullopt;
        return it->second;
    }
    std::size_t layer_size(int l) const { return layers_[static_cast<std::size_t>(l)].slots.size(); }
    LabelCode up_label(std::size_t p) const { return up_[p]; }
    double kappa_of(LabelCode k) const {
        if (lm_ == LabelMode::Scalar) return static_cast<double>(k) * omega0_;
        return unpack(k, static_cast<int>(ladder_.size())).dot(ladder_.omega);
    }

    // ---- near-resonant labels (never stored as modulation functions)
    std::size_t near_count() const { return near_mode_.size(); }
    int near_mode(std::size_t i) const { return near_mode_[i]; }
    LabelCode near_label(std::size_t i) const { return near_label_[i]; }
    double near_kappa(std::size_t i) const { return near_kappa_[i]; }
    int near_sign(std::size_t i) const { return near_sign_[i]; }
    int near_first_order(std::size_t i) const { return near_first_[i]; }

    // Evaluate the expansion at slow time tau in [0,1] with `derivs`
    // derivatives of every coefficient.
    Snapshot snapshot(double tau, int derivs = 2) const {
        if (tau < -1e-12 || tau > 1.0 + 1e-12) throw Error("snapshot: tau outside the window [0,1]");
        tau = std::clamp(tau, 0.0, 1.0);
        std::vector<cplx> diag = interpolate_diag(tau);
        Orders ord = orders_for_output(derivs);
        Snapshot s = evaluate(tau, phase_.at(tau), ord, &diag, nullptr);
        s.R_ = derivs;
        return s;
    }

    // Value of g_{l} at (p, k) for the given snapshot, -a times the cubic sum
    // over all order splits. Zero for l < 3.
    cplx g_value(const Snapshot& s, std::size_t p, LabelCode k, int l) const {
        if (l < 3) return {};
        cplx acc{};
        for (const auto& sp : splits_for(l)) {
            if (sp.c > N_ + 1) continue;
            const auto& P = pair_table(sp.a, sp.b);
            std::vector<cplx> Pv = pair_values(P, s, 0);
            const auto& C = layers_[static_cast<std::size_t>(sp.c)];
            const auto& Zc = s.Z_[static_cast<std::size_t>(sp.c)];
            const int Sc = s.S_[static_cast<std::size_t>(sp.c)];
            cplx h{};
            stage2_scan(P, C.entries, static_cast<int>(p), [&](int, LabelCode code, int pid, const detail::SignedEntry& e) {
                if (code == k) h += e.parity * Pv[static_cast<std::size_t>(pid)] * Zc[static_cast<std::size_t>(e.local * Sc)];
            });
            acc += sp.mult * h;
        }
        return -s.a() * acc;
    }

    // Reconstructed state at window-local slow time tau; state time (tau0 + tau)/eps.
    ModeState reconstruct(double tau) const { return reconstruct(snapshot(tau, 1)); }
    ModeState reconstruct(const Snapshot& s, double* max_imag = nullptr) const {
        const std::size_t P = ms_.size();
        std::vector<cplx> u(P), v(P);
        const double c = s.c();
        for (std::size_t i = 0; i < slot_count(); ++i) {
            const auto p = static_cast<std::size_t>(slot_mode_[i]);
            const double kap = slot_kappa_[i];
            cplx e = std::polar(1.0, kap * s.phi() / eps_);
            cplx Z = s.combined(static_cast<int>(i), 0), Zd = s.combined(static_cast<int>(i), 1);
            u[p] += Z * e;
            v[p] += (eps_ * Zd + cplx(0, kap * c) * Z) * e;
        }
        ModeState out = ModeState::zeros(P, (opt_.tau0 + s.tau()) / eps_);
        double im = 0.0;
        for (std::size_t p = 0; p < P; ++p) {
            out.u[p] = u[p].real();
            out.v[p] = v[p].real();
            im = std::max({im, std::abs(u[p].imag()), std::abs(v[p].imag())});
        }
        if (max_imag) *max_imag = im;
        return out;
    }

    // Almost-invariant: sum over the signed lattice of i(k.w)(-conj z)(eps z' + i(k.w) c z),
    // phase factors cancel. Leading term 2^d c sum Omega^2 |z^<j>|^2.
    InvariantValue almost_invariant(const Snapshot& s) const {
        const double c = s.c();
        cplx acc{};
        double lead = 0.0;
        for (std::size_t i = 0; i < slot_count(); ++i) {
            const double kap = slot_kappa_[i];
            cplx Z = s.combined(static_cast<int>(i), 0), Zd = s.combined(static_cast<int>(i), 1);
            acc += cplx(0, kap) * (-std::conj(Z)) * (eps_ * Zd + cplx(0, kap * c) * Z);
            if (slot_diag_[i] != 0) {
                double Om = ms_.omega(static_cast<std::size_t>(slot_mode_[i]));
                lead += Om * Om * std::norm(Z);
            }
        }
        return {images() * acc.real(), images() * acc.imag(), images() * c * lead};
    }

    // Norms of the combined coefficients (layer = 0) or of one layer.
    MfeNorm norms(const Snapshot& s, int layer = 0) const {
        std::vector<LabelValue> vals;
        vals.reserve(slot_count());
        for (std::size_t i = 0; i < slot_count(); ++i) {
            cplx z = layer == 0 ? s.combined(static_cast<int>(i)) : s.z(layer, static_cast<int>(i));
            vals.push_back({static_cast<std::size_t>(slot_mode_[i]), slot_kappa_[i], slot_diag_[i], z});
        }
        return mfe_norm(ms_, vals, lm_ == LabelMode::Scalar ? LabelKind::Scalar : LabelKind::Ladder);
    }

    DefectResult defect(const Snapshot& s, bool keep_values = false) const;

    // e_j^{s<j>} = -a sum over near-resonant k of the cubic of the combined
    // coefficients (phase factor e^{i(k.w)phi/eps} included), truncated at the
    // defect order.
    std::vector<cplx> near_resonant_force(const Snapshot& s) const;

    // Diagonal state (layers 1..N+1, both signs) at grid point m.
    const std::vector<cplx>& diag_state(std::size_t m) const { return diag_val_[m]; }
    static std::size_t diag_index(int l, std::size_t p, int sign, std::size_t P) {
        return static_cast<std::size_t>(l - 1) * 2 * P + 2 * p + (sign > 0 ? 0 : 1);
    }

    // Structure statistics, for diagnostics and budgeting.
    struct Stats {
        std::vector<std::size_t> layer_slots;
        std::size_t near = 0;
        std::size_t plan_entries = 0;
        std::size_t streamed_products = 0;
    };
    Stats stats() const {
        Stats st;
        for (int l = 1; l <= N_ + 1; ++l) st.layer_slots.push_back(layer_size(l));
        st.near = near_count();
        for (const auto& [key, pl] : plans_) {
            st.plan_entries += pl.pid.size();
            st.streamed_products += pl.streamed ? 1 : 0;
        }
        return st;
    }

private:
    struct Layer {
        std::vector<int> slots;  // global slot ids; diag slots first, 2p/2p+1
        std::vector<int> local;  // global -> local, -1 if inactive
        std::vector<detail::SignedEntry> entries;
        std::vector<int> prev1, prev2;  // local index of the same slot in layers l-1, l-2 (or -1)
        std::vector<double> kappa, omega;  // per local
        std::vector<int> mode;             // per local
    };

    struct Orders {
        std::vector<int> diag, off, gfull, gnear;  // index by layer / order, -1 = not needed
        bool init = false;
    };

    // ------------------------------------------------------------------ setup
    void setup_modes() {
        const std::size_t P = ms_.size();
        signs_ = sign_patterns(ms_.dim());
        jc_ = detail::JCoder(ms_.dim(), ms_.cutoff());
        mode_jc_.resize(P);
        for (std::size_t p = 0; p < P; ++p) mode_jc_[p] = jc_.encode(ms_.mode(p));
        delta_ = std::pow(eps_, 1.0 - opt_.alpha);
        up_.resize(P);
        if (lm_ == LabelMode::Scalar) {
            if (ms_.dim() != 1) throw Error("integer labels require dimension 1");
            omega0_ = std::numbers::pi / ms_.lengths()[0];
            for (std::size_t p = 0; p < P; ++p) up_[p] = ms_.mode(p)[0];
        } else {
            ladder_ = frequency_ladder(ms_);
            if (static_cast<int>(ladder_.size()) > kMaxRungs)
                throw Error("frequency ladder has " + std::to_string(ladder_.size()) +
                            " rungs; label packing supports at most 12");
            if (3 * (N_ + 1) > kMaxLabelEntry)
                throw Error("expansion order too large for label packing");
            for (std::size_t p = 0; p < P; ++p) up_[p] = pack(ladder_.unit(p));
        }
        dir_.assign(P, {});
        for (std::size_t p = 0; p < P; ++p) {
            for (int s : {1, -1}) {
                int id = static_cast<int>(slot_mode_.size());
                slot_mode_.push_back(static_cast<int>(p));
                slot_label_.push_back(s * up_[p]);
                slot_kappa_.push_back(s * ms_.omega(p));
                slot_diag_.push_back(static_cast<signed char>(s));
                slot_first_.push_back(1);
                dir_[p][s * up_[p]] = id;
            }
        }
    }

    void make_layer(int l) {
        Layer& L = layers_[static_cast<std::size_t>(l)];
        L = Layer{};
        L.local.assign(slot_count(), -1);
        for (std::size_t i = 0; i < slot_count(); ++i) {
            if (slot_diag_[i] != 0 || slot_first_[i] <= l) {
                L.local[i] = static_cast<int>(L.slots.size());
                L.slots.push_back(static_cast<int>(i));
            }
        }
        for (int loc = 0; loc < static_cast<int>(L.slots.size()); ++loc) {
            const int g = L.slots[static_cast<std::size_t>(loc)];
            const auto p = static_cast<std::size_t>(slot_mode_[static_cast<std::size_t>(g)]);
            L.kappa.push_back(slot_kappa_[static_cast<std::size_t>(g)]);
            L.omega.push_back(ms_.omega(p));
            L.mode.push_back(static_cast<int>(p));
            for (const auto& sp : signs_) {
                ModeIndex j{0, 0, 0};
                for (int i = 0; i < ms_.dim(); ++i)
                    j[static_cast<std::size_t>(i)] = sp.s[static_cast<std::size_t>(i)] * ms_.mode(p)[static_cast<std::size_t>(i)];
                L.entries.push_back({jc_.encode(j), loc, slot_label_[static_cast<std::size_t>(g)], sp.parity});
            }
        }
    }

    void link_layers() {
        for (int l = 1; l <= N_ + 1; ++l) {
            Layer& L = layers_[static_cast<std::size_t>(l)];
            L.prev1.assign(L.slots.size(), -1);
            L.prev2.assign(L.slots.size(), -1);
            for (std::size_t loc = 0; loc < L.slots.size(); ++loc) {
                const auto g = static_cast<std::size_t>(L.slots[loc]);
                if (l >= 2) L.prev1[loc] = layers_[static_cast<std::size_t>(l - 1)].local[g];
                if (l >= 3) L.prev2[loc] = layers_[static_cast<std::size_t>(l - 2)].local[g];
            }
        }
    }

    static std::vector<detail::Split> make_splits(int l) {
        std::vector<detail::Split> out;
        for (int a = 1; a <= l; ++a)
            for (int b = a; b <= l; ++b) {
                int c = l - a - b;
                if (c < b) continue;
                double mult = (a == b && b == c) ? 1.0 : (a == b || b == c) ? 3.0 : 6.0;
                out.push_back({a, b, c, mult});
            }
        return out;
    }
    const std::vector<detail::Split>& splits_for(int l) const { return splits_[static_cast<std::size_t>(l)]; }

    // Pair table for entry lists A x B (the two smaller orders of a split).
    detail::PairTable build_pair(int a, int b, const std::vector<detail::SignedEntry>& A,
                                 const std::vector<detail::SignedEntry>& B) const {
        detail::PairTable T;
        T.a = a;
        T.b = b;
        absl::flat_hash_map<std::pair<int, LabelCode>, int> id;
        std::vector<std::pair<int, LabelCode>> keys;
        const std::size_t total = A.size() * B.size();
        if (total > opt_.enum_budget) throw BudgetError("pair product exceeds enumeration budget", total);
        T.pa.reserve(total);
        T.pb.reserve(total);
        T.pid.reserve(total);
        T.par.reserve(total);
        for (const auto& ea : A)
            for (const auto& eb : B) {
                std::pair<int, LabelCode> key{ea.jc + eb.jc - jc_.zero, ea.k + eb.k};
                auto [it, fresh] = id.try_emplace(key, static_cast<int>(keys.size()));
                if (fresh) keys.push_back(key);
                T.pa.push_back(ea.local);
                T.pb.push_back(eb.local);
                T.pid.push_back(it->second);
                T.par.push_back(static_cast<signed char>(ea.parity * eb.parity));
            }
        T.count = static_cast<int>(keys.size());
        T.bucket_begin.assign(static_cast<std::size_t>(jc_.size) + 1, 0);
        for (const auto& k : keys) ++T.bucket_begin[static_cast<std::size_t>(k.first) + 1];
        for (std::size_t i = 1; i < T.bucket_begin.size(); ++i) T.bucket_begin[i] += T.bucket_begin[i - 1];
        T.bucket.resize(keys.size());
        std::vector<int> fill(T.bucket_begin.begin(), T.bucket_begin.end() - 1);
        for (std::size_t i = 0; i < keys.size(); ++i)
            T.bucket[static_cast<std::size_t>(fill[static_cast<std::size_t>(keys[i].first)]++)] = {keys[i].second, static_cast<int>(i)};
        return T;
    }

    const detail::PairTable& pair_table(int a, int b) const { return pairs_.at({a, b}); }

    // Visit (output mode, output label, pid, C entry) for every product with
    // j_P + j_C = j_p; mode < 0 visits all output modes.
    template <class F>
    void stage2_scan(const detail::PairTable& P, const std::vector<detail::SignedEntry>& C, int mode, F&& f) const {
        const std::size_t p0 = mode < 0 ? 0 : static_cast<std::size_t>(mode);
        const std::size_t p1 = mode < 0 ? ms_.size() : p0 + 1;
        for (std::size_t p = p0; p < p1; ++p) {
            const int jp = mode_jc_[p];
            for (const auto& e : C) {
                const int jP = jp - e.jc + jc_.zero;
                const int b0 = P.bucket_begin[static_cast<std::size_t>(jP)], b1 = P.bucket_begin[static_cast<std::size_t>(jP) + 1];
                for (int b = b0; b < b1; ++b) {
                    const auto& [kP, pid] = P.bucket[static_cast<std::size_t>(b)];
                    f(static_cast<int>(p), kP + e.k, pid, e);
                }
            }
        }
    }

    bool kept(std::size_t p, LabelCode k, double kap) const {
        if (lm_ == LabelMode::Scalar) return true;
        return in_kept_set(kap, ms_.omega(p), delta_, k == up_[p] || k == -up_[p]);
    }

    void build_supports() {
        const std::size_t P = ms_.size();
        layers_.assign(static_cast<std::size_t>(N_) + 2, {});
        splits_.assign(static_cast<std::size_t>(3 * (N_ + 1)) + 1, {});
        for (int l = 3; l <= 3 * (N_ + 1); ++l) splits_[static_cast<std::size_t>(l)] = make_splits(l);
        make_layer(1);
        make_layer(2);
        absl::flat_hash_map<LabelCode, double> kappa_cache;
        auto kap_of = [&](LabelCode k) {
            auto it = kappa_cache.find(k);
            if (it != kappa_cache.end()) return it->second;
            double v = kappa_of(k);
            kappa_cache.emplace(k, v);
            return v;
        };
        for (int l = 3; l <= N_ + 1; ++l) {
            for (const auto& sp : splits_for(l)) {
                auto key = std::make_pair(sp.a, sp.b);
                if (!pairs_.count(key))
                    pairs_.emplace(key, build_pair(sp.a, sp.b, layers_[static_cast<std::size_t>(sp.a)].entries,
                                                   layers_[static_cast<std::size_t>(sp.b)].entries));
                const auto& PT = pairs_.at(key);
                std::size_t visited = 0;
                stage2_scan(PT, layers_[static_cast<std::size_t>(sp.c)].entries, -1,
                            [&](int p, LabelCode code, int, const detail::SignedEntry&) {
                                ++visited;
                                auto& dir = dir_[static_cast<std::size_t>(p)];
                                if (dir.contains(code)) return;
                                const double kap = kap_of(code);
                                const auto pp = static_cast<std::size_t>(p);
                                if (kept(pp, code, kap)) {
                                    const double Om = ms_.omega(pp);
                                    if (lm_ == LabelMode::Ladder &&
                                        std::abs(Om * Om - kap * kap) < 0.5 * delta_ * (std::abs(kap) + Om))
                                        throw ConsistencyError("kept label with sub-threshold denominator");
                                    dir[code] = static_cast<int>(slot_mode_.size());
                                    slot_mode_.push_back(p);
                                    slot_label_.push_back(code);
                                    slot_kappa_.push_back(kap);
                                    slot_diag_.push_back(0);
                                    slot_first_.push_back(l);
                                } else {
                                    int sgn = in_near_set(kap, Om_of(pp), delta_, 1) ? 1 : -1;
                                    dir[code] = -1 - static_cast<int>(near_mode_.size());
                                    near_mode_.push_back(p);
                                    near_label_.push_back(code);
                                    near_kappa_.push_back(kap);
                                    near_sign_.push_back(static_cast<signed char>(sgn));
                                    near_first_.push_back(l);
                                }
                            });
                if (visited > opt_.enum_budget) throw BudgetError("label enumeration exceeds budget", visited);
            }
            // Layers l-1 and l-2 feed no new labels into themselves; layer l
            // (as an input) is first needed for l+2.
            make_layer(l);
        }
        renumber();
        for (int l = 1; l <= N_ + 1; ++l) make_layer(l);
        link_layers();
        near_by_mode_.assign(P, {});
        for (std::size_t i = 0; i < near_count(); ++i)
            near_by_mode_[static_cast<std::size_t>(near_mode_[i])].push_back(static_cast<int>(i));
        // pair tables were built against the provisional numbering
        pairs_.clear();
    }

    double Om_of(std::size_t p) const { return ms_.omega(p); }

    // Deterministic slot order: diagonal block, then (mode, first layer, label).
    void renumber() {
        const std::size_t P = ms_.size(), D = 2 * P;
        std::vector<std::size_t> ord(slot_count() - D);
        std::iota(ord.begin(), ord.end(), D);
        std::sort(ord.begin(), ord.end(), [&](std::size_t x, std::size_t y) {
            return std::tie(slot_mode_[x], slot_first_[x], slot_label_[x]) <
                   std::tie(slot_mode_[y], slot_first_[y], slot_label_[y]);
        });
        auto permute = [&](auto& v) {
            auto old = v;
            for (std::size_t i = 0; i < ord.size(); ++i) v[D + i] = old[ord[i]];
        };
        permute(slot_mode_);
        permute(slot_label_);
        permute(slot_kappa_);
        permute(slot_diag_);
        permute(slot_first_);
        std::vector<std::size_t> nord(near_count());
        std::iota(nord.begin(), nord.end(), std::size_t{0});
        std::sort(nord.begin(), nord.end(), [&](std::size_t x, std::size_t y) {
            return std::tie(near_mode_[x], near_label_[x]) < std::tie(near_mode_[y], near_label_[y]);
        });
        auto npermute = [&](auto& v) {
            auto old = v;
            for (std::size_t i = 0; i < nord.size(); ++i) v[i] = old[nord[i]];
        };
        npermute(near_mode_);
        npermute(near_label_);
        npermute(near_kappa_);
        npermute(near_sign_);
        npermute(near_first_);
        for (auto& d : dir_) d.clear();
        for (std::size_t i = 0; i < slot_count(); ++i)
            dir_[static_cast<std::size_t>(slot_mode_[i])][slot_label_[i]] = static_cast<int>(i);
        for (std::size_t i = 0; i < near_count(); ++i)
            dir_[static_cast<std::size_t>(near_mode_[i])][near_label_[i]] = -1 - static_cast<int>(i);
    }

    // Plans for the products feeding layers 3..N+1: "full" outputs are the
    // off-diagonal slots of layer l, "near" outputs the diagonal slots plus
    // the near-resonant labels. Pair tables also cover the defect orders.
    void build_plans() {
        for (int l = 3; l <= Lmax_; ++l)
            for (const auto& sp : splits_for(l)) {
                if (sp.c > N_ + 1) continue;
                auto key = std::make_pair(sp.a, sp.b);
                if (!pairs_.count(key))
                    pairs_.emplace(key, build_pair(sp.a, sp.b, layers_[static_cast<std::size_t>(sp.a)].entries,
                                                   layers_[static_cast<std::size_t>(sp.b)].entries));
            }
        for (int l = 3; l <= N_ + 1; ++l)
            for (const auto& sp : splits_for(l))
                for (int kind : {0, 1}) plans_.emplace(std::make_tuple(l, sp.a, sp.b, kind), make_plan(l, sp, kind));
    }

    // Output target of (mode p, label code) for a product feeding layer l:
    // >= 0 local slot in layer l, < 0 near index (-1-i), or INT_MIN if not wanted.
    int route(int l, int kind, std::size_t p, LabelCode code) const {
        const auto& dir = dir_[p];
        auto it = dir.find(code);
        if (it == dir.end()) return INT32_MIN;
        const int v = it->second;
        if (v < 0) return kind == 1 ? v : INT32_MIN;
        const bool diag = slot_diag_[static_cast<std::size_t>(v)] != 0;
        if (diag != (kind == 1)) return INT32_MIN;
        return layers_[static_cast<std::size_t>(l)].local[static_cast<std::size_t>(v)];
    }

    detail::OutPlan make_plan(int l, const detail::Split& sp, int kind) const {
        detail::OutPlan pl;
        const auto& PT = pair_table(sp.a, sp.b);
        std::size_t n = 0;
        stage2_scan(PT, layers_[static_cast<std::size_t>(sp.c)].entries, -1,
                    [&](int p, LabelCode code, int pid, const detail::SignedEntry& e) {
                        if (pl.streamed) return;
                        int t = route(l, kind, static_cast<std::size_t>(p), code);
                        if (t == INT32_MIN) return;
                        if (++n > opt_.plan_limit) {
                            pl.streamed = true;
                            pl.pid.clear();
                            pl.pid.shrink_to_fit();
                            pl.lc.clear();
                            pl.lc.shrink_to_fit();
                            pl.target.clear();
                            pl.target.shrink_to_fit();
                            pl.par.clear();
                            pl.par.shrink_to_fit();
                            return;
                        }
                        pl.pid.push_back(pid);
                        pl.lc.push_back(e.local);
                        pl.target.push_back(t);
                        pl.par.push_back(static_cast<signed char>(e.parity));
                    });
        return pl;
    }

    // ------------------------------------------------------------ evaluation
    Orders orders_empty() const {
        Orders o;
        const auto n = static_cast<std::size_t>(N_) + 3;
        o.diag.assign(n, -1);
        o.off.assign(n, -1);
        o.gfull.assign(n, -1);
        o.gnear.assign(n, -1);
        return o;
    }

    void propagate(Orders& o) const {
        auto up = [](int& x, int v) { x = std::max(x, v); };
        for (int l = N_ + 1; l >= 1; --l) {
            const auto L = static_cast<std::size_t>(l);
            int qg = -1;
            for (int m = l + 2; m <= N_ + 2; ++m) qg = std::max({qg, o.gfull[static_cast<std::size_t>(m)], o.gnear[static_cast<std::size_t>(m)]});
            if (qg >= 0) {
                up(o.diag[L], qg);
                if (l >= 3) up(o.off[L], qg);
            }
            if (l < 3) o.off[L] = -1;
            if (o.off[L] >= 0) {
                up(o.gfull[L], o.off[L]);
                if (l - 1 >= 3) up(o.off[L - 1], o.off[L] + 1);
                if (l - 2 >= 3) up(o.off[L - 2], o.off[L] + 2);
            }
            if (o.diag[L] >= 1 && l <= N_) {
                if (l - 1 >= 1) up(o.diag[L - 1], o.diag[L] + 1);
                if (l + 1 >= 3) up(o.gnear[L + 1], o.diag[L] - 1);
            }
            if (o.diag[L] < 0) o.diag[L] = 0;
        }
    }

    Orders orders_for_output(int R) const {
        Orders o = orders_empty();
        for (int l = 1; l <= N_ + 1; ++l) {
            o.diag[static_cast<std::size_t>(l)] = R;
            if (l >= 3) o.off[static_cast<std::size_t>(l)] = R;
        }
        propagate(o);
        return o;
    }
    Orders orders_for_rk() const {
        Orders o = orders_empty();
        for (int l = 1; l <= N_; ++l) o.diag[static_cast<std::size_t>(l)] = 1;
        propagate(o);
        return o;
    }
    Orders orders_for_init() const {
        Orders o = orders_empty();
        o.init = true;
        for (int l = 1; l <= N_ + 1; ++l) {
            const auto L = static_cast<std::size_t>(l);
            if (l >= 3) o.off[L] = std::max(o.off[L], 0);
            if (l <= N_) {
                o.diag[L] = std::max(o.diag[L], 1);
                if (l >= 3) o.off[L] = std::max(o.off[L], 1);
            }
        }
        propagate(o);
        return o;
    }

    std::vector<cplx> pair_values(const detail::PairTable& P, const Snapshot& s, int Q) const {
        const int Sa = s.S_[static_cast<std::size_t>(P.a)], Sb = s.S_[static_cast<std::size_t>(P.b)];
        const auto& A = s.Z_[static_cast<std::size_t>(P.a)];
        const auto& B = s.Z_[static_cast<std::size_t>(P.b)];
        const int S = Q + 1;
        std::vector<cplx> out(static_cast<std::size_t>(P.count) * static_cast<std::size_t>(S));
        for (std::size_t i = 0; i < P.pid.size(); ++i) {
            cplx* o = &out[static_cast<std::size_t>(P.pid[i]) * static_cast<std::size_t>(S)];
            const cplx* a = &A[static_cast<std::size_t>(P.pa[i] * Sa)];
            const cplx* b = &B[static_cast<std::size_t>(P.pb[i] * Sb)];
            const double par = P.par[i];
            if (Q == 0) {
                o[0] += par * a[0] * b[0];
            } else {
                series::mul_acc(o, a, b, Q, par);
            }
        }
        return out;
    }

    // h = sum over splits of mult * (pair x layer c), accumulated into the
    // layer-l local array (kind 0) or diag/near arrays (kind 1).
    void product(int l, int kind, int Q, const Snapshot& s, std::map<std::pair<int, int>, std::pair<int, std::vector<cplx>>>& pcache,
                 const Orders& ord, std::vector<cplx>& out_local, std::vector<cplx>& out_near) const {
        const int S = Q + 1;
        const Layer& Lout = layers_[static_cast<std::size_t>(l)];
        out_local.assign(Lout.slots.size() * static_cast<std::size_t>(S), cplx{});
        if (kind == 1) out_near.assign(near_count() * static_cast<std::size_t>(S), cplx{});
        for (const auto& sp : splits_for(l)) {
            const auto& PT = pair_table(sp.a, sp.b);
            auto key = std::make_pair(sp.a, sp.b);
            auto it = pcache.find(key);
            if (it == pcache.end() || it->second.first < Q) {
                int Qp = std::max(Q, pair_order(sp.a, sp.b, ord));
                it = pcache.insert_or_assign(key, std::make_pair(Qp, pair_values(PT, s, Qp))).first;
            }
            const int Sp = it->second.first + 1;
            const auto& Pv = it->second.second;
            const auto& Zc = s.Z_[static_cast<std::size_t>(sp.c)];
            const int Sc = s.S_[static_cast<std::size_t>(sp.c)];
            auto emit = [&](int t, int pid, int lc, double par) {
                cplx* o = t >= 0 ? &out_local[static_cast<std::size_t>(t * S)] : &out_near[static_cast<std::size_t>((-1 - t) * S)];
                const cplx* pv = &Pv[static_cast<std::size_t>(pid * Sp)];
                const cplx* zc = &Zc[static_cast<std::size_t>(lc * Sc)];
                const double m = par * sp.mult;
                if (Q == 0) o[0] += m * pv[0] * zc[0];
                else series::mul_acc(o, pv, zc, Q, m);
            };
            const auto& pl = plans_.at(std::make_tuple(l, sp.a, sp.b, kind));
            if (!pl.streamed) {
                for (std::size_t i = 0; i < pl.pid.size(); ++i) emit(pl.target[i], pl.pid[i], pl.lc[i], pl.par[i]);
            } else {
                stage2_scan(PT, layers_[static_cast<std::size_t>(sp.c)].entries, -1,
                            [&](int p, LabelCode code, int pid, const detail::SignedEntry& e) {
                                int t = route(l, kind, static_cast<std::size_t>(p), code);
                                if (t == INT32_MIN) return;
                                emit(t, pid, e.local, e.parity);
                            });
            }
        }
    }

    int pair_order(int a, int b, const Orders& ord) const {
        int q = 0;
        for (int l = 3; l <= N_ + 1; ++l)
            for (const auto& sp : splits_for(l))
                if (sp.a == a && sp.b == b)
                    q = std::max({q, ord.gfull[static_cast<std::size_t>(l)], ord.gnear[static_cast<std::size_t>(l)]});
        return q;
    }

    // Core evaluation. diag: state vector of diagonal values (layers 1..N+1);
    // s0: initial state when building initial values instead.
    Snapshot evaluate(double tau, double phi, const Orders& ord, const std::vector<cplx>* diag, const ModeState* s0,
                      std::vector<cplx>* init_out = nullptr) const {
        const std::size_t P = ms_.size();
        Snapshot s;
        s.T_ = this;
        s.tau_ = tau;
        s.phi_ = phi;
        int Qmax = 2;
        for (int l = 1; l <= N_ + 2; ++l)
            Qmax = std::max({Qmax, ord.diag[static_cast<std::size_t>(l)], ord.off[static_cast<std::size_t>(l)],
                             ord.gfull[static_cast<std::size_t>(l)], ord.gnear[static_cast<std::size_t>(l)]});
        const int Qc = Qmax + 1;
        s.cs_ = series::of_profile(speed_, opt_.tau0 + tau, Qc);
        s.as_ = series::of_profile(coupling_, opt_.tau0 + tau, Qc);
        const auto& c = s.cs_;
        std::vector<double> cd(static_cast<std::size_t>(Qc));  // c'
        series::derivative(cd.data(), c.data(), Qc);
        const std::vector<double> cinv = series::reciprocal(c, Qc);
        const std::vector<double> cinv2 = series::product(cinv, cinv, Qc);
        std::vector<double> Aser = series::product(cd, cinv, Qc - 1);  // c'/c
        for (double& x : Aser) x *= -0.5;
        std::vector<double> minus_a(s.as_);
        for (double& x : minus_a) x = -x;

        s.Z_.assign(static_cast<std::size_t>(N_) + 2, {});
        s.S_.assign(static_cast<std::size_t>(N_) + 2, 1);
        std::map<std::pair<int, int>, std::pair<int, std::vector<cplx>>> pcache;
        std::vector<cplx> h_local, h_near, g_tmp, dummy;

        // -a * h as a series, in place
        auto times_minus_a = [&](std::vector<cplx>& v, int Q) {
            const int S = Q + 1;
            std::vector<cplx> tmp(static_cast<std::size_t>(S));
            for (std::size_t i = 0; i + static_cast<std::size_t>(S) <= v.size(); i += static_cast<std::size_t>(S)) {
                std::fill(tmp.begin(), tmp.end(), cplx{});
                series::mul_acc(tmp.data(), minus_a.data(), &v[i], Q, 1.0);
                std::copy(tmp.begin(), tmp.end(), v.begin() + static_cast<long>(i));
            }
        };

        for (int l = 1; l <= N_ + 1; ++l) {
            const auto L = static_cast<std::size_t>(l);
            const Layer& Ly = layers_[L];
            const int Ql = std::max({ord.diag[L], ord.off[L], 0});
            const int S = Ql + 1;
            s.S_[L] = S;
            auto& Z = s.Z_[L];
            Z.assign(Ly.slots.size() * static_cast<std::size_t>(S), cplx{});

            // off-diagonal block from the algebraic relation
            if (l >= 3 && ord.off[L] >= 0) {
                const int Q = ord.off[L];
                product(l, 0, Q, s, pcache, ord, h_local, dummy);
                times_minus_a(h_local, Q);
                const int Sg = Q + 1;
                const auto& Z1 = s.Z_[L - 1];
                const int S1 = s.S_[L - 1];
                const auto& Z2 = s.Z_[L - 2];
                const int S2 = s.S_[L - 2];
                std::vector<cplx> num(static_cast<std::size_t>(Sg)), d1(static_cast<std::size_t>(Sg + 1)), d2(static_cast<std::size_t>(Sg));
                for (std::size_t loc = 2 * P; loc < Ly.slots.size(); ++loc) {
                    const double kap = Ly.kappa[loc], Om = Ly.omega[loc];
                    for (int q = 0; q <= Q; ++q) num[static_cast<std::size_t>(q)] = h_local[loc * static_cast<std::size_t>(Sg) + static_cast<std::size_t>(q)];
                    if (const int i2 = Ly.prev2[loc]; i2 >= 0) {
                        const cplx* z2 = &Z2[static_cast<std::size_t>(i2 * S2)];
                        for (int q = 0; q <= Q; ++q) num[static_cast<std::size_t>(q)] -= static_cast<double>((q + 1) * (q + 2)) * z2[q + 2];
                    }
                    if (const int i1 = Ly.prev1[loc]; i1 >= 0) {
                        const cplx* z1 = &Z1[static_cast<std::size_t>(i1 * S1)];
                        for (int q = 0; q <= Q; ++q) d1[static_cast<std::size_t>(q)] = static_cast<double>(q + 1) * z1[q + 1];
                        // -2i k c z' - i k c' z
                        std::fill(d2.begin(), d2.end(), cplx{});
                        series::mul_acc(d2.data(), c.data(), d1.data(), Q, 2.0);
                        series::mul_acc(d2.data(), cd.data(), z1, Q, 1.0);
                        for (int q = 0; q <= Q; ++q) num[static_cast<std::size_t>(q)] -= cplx(0, kap) * d2[static_cast<std::size_t>(q)];
                    }
                    cplx* z = &Z[loc * static_cast<std::size_t>(S)];
                    const double den = Om * Om - kap * kap;
                    series::mul_acc(z, cinv2.data(), num.data(), Q, 1.0 / den);
                }
            }

            // diagonal values
            for (std::size_t p = 0; p < P; ++p) {
                for (int sg : {1, -1}) {
                    const std::size_t loc = 2 * p + (sg > 0 ? 0 : 1);
                    cplx val;
                    if (s0) {
                        val = init_value(l, p, sg, *s0, s, c[0]);
                        if (init_out) (*init_out)[diag_index(l, p, sg, P)] = val;
                    } else {
                        val = (*diag)[diag_index(l, p, sg, P)];
                    }
                    Z[loc * static_cast<std::size_t>(S)] = val;
                }
            }

            // diagonal derivatives from the ODE (top layer is constant)
            if (l <= N_ && ord.diag[L] >= 1) {
                const int Q = ord.diag[L];
                const int Qg = Q - 1, Sg = Qg + 1;
                bool have_g = l + 1 >= 3;
                if (have_g) {
                    product(l + 1, 1, Qg, s, pcache, ord, h_local, h_near);
                    times_minus_a(h_local, Qg);
                    times_minus_a(h_near, Qg);
                }
                const auto& Zp = s.Z_[L - 1 < 1 ? 1 : L - 1];
                const int Sp = l >= 2 ? s.S_[L - 1] : 1;
                std::vector<cplx> F(static_cast<std::size_t>(Sg)), B(static_cast<std::size_t>(Sg));
                for (std::size_t p = 0; p < P; ++p) {
                    const double Om = ms_.omega(p);
                    for (int sg : {1, -1}) {
                        const std::size_t loc = 2 * p + (sg > 0 ? 0 : 1);
                        std::fill(F.begin(), F.end(), cplx{});
                        if (have_g) {
                            // own label; g for layer l+1 stored at layer-(l+1) locals, diag at 2p/2p+1
                            for (int q = 0; q <= Qg; ++q) F[static_cast<std::size_t>(q)] += h_local[loc * static_cast<std::size_t>(Sg) + static_cast<std::size_t>(q)];
                            for (int ni : near_by_mode_[p]) {
                                if (near_sign_[static_cast<std::size_t>(ni)] != sg) continue;
                                const cplx* gn = &h_near[static_cast<std::size_t>(ni * Sg)];
                                bool nz = false;
                                for (int q = 0; q <= Qg; ++q) nz = nz || gn[q] != cplx{};
                                if (!nz) continue;
                                std::vector<cplx> w = w_series(near_kappa_[static_cast<std::size_t>(ni)] - sg * Om, phi, c, Qg);
                                series::mul_acc(F.data(), w.data(), gn, Qg, 1.0);
                            }
                        }
                        if (l >= 2) {
                            const cplx* zp = &Zp[loc * static_cast<std::size_t>(Sp)];
                            for (int q = 0; q <= Qg; ++q) F[static_cast<std::size_t>(q)] -= static_cast<double>((q + 1) * (q + 2)) * zp[q + 2];
                        }
                        std::fill(B.begin(), B.end(), cplx{});
                        series::mul_acc(B.data(), cinv.data(), F.data(), Qg, 1.0);
                        const cplx inv = 1.0 / cplx(0, 2.0 * sg * Om);
                        cplx* z = &Z[loc * static_cast<std::size_t>(S)];
                        for (int q = 0; q < Q; ++q) {
                            cplx acc = B[static_cast<std::size_t>(q)] * inv;
                            for (int i = 0; i <= q; ++i) acc += Aser[static_cast<std::size_t>(i)] * z[q - i];
                            z[q + 1] = acc / static_cast<double>(q + 1);
                        }
                    }
                }
            }
        }
        return s;
    }

    // w = exp(i beta phi(tau)/eps) as a series; phi' = c.
    std::vector<cplx> w_series(double beta, double phi, const std::vector<double>& c, int Q) const {
        std::vector<cplx> f(static_cast<std::size_t>(Q) + 1);
        f[0] = cplx(0, beta * phi / eps_);
        for (int q = 1; q <= Q; ++q) f[static_cast<std::size_t>(q)] = cplx(0, beta * c[static_cast<std::size_t>(q - 1)] / (q * eps_));
        return series::exp(f, Q);
    }

    // Initial diagonal values at tau = 0 from the two conditions
    //   sum_k z_l^k(0) = u(0)/eps [l=1],
    //   sum_k (i k.w c z_l^k(0) + z'_{l-1}^k(0)) = v(0)/eps [l=1].
    cplx init_value(int l, std::size_t p, int sg, const ModeState& s0, const Snapshot& s, double c0) const {
        const auto L = static_cast<std::size_t>(l);
        const Layer& Ly = layers_[L];
        cplx A = l == 1 ? cplx(s0.u[p] / eps_) : cplx{};
        cplx B = l == 1 ? cplx(s0.v[p] / eps_) : cplx{};
        const int S = s.S_[L];
        const auto& Z = s.Z_[L];
        for (std::size_t loc = 2 * ms_.size(); loc < Ly.slots.size(); ++loc) {
            if (Ly.mode[loc] != static_cast<int>(p)) continue;
            cplx z = Z[loc * static_cast<std::size_t>(S)];
            A -= z;
            B -= cplx(0, Ly.kappa[loc] * c0) * z;
        }
        if (l >= 2) {
            const Layer& Lp = layers_[L - 1];
            const int Sp = s.S_[L - 1];
            const auto& Zp = s.Z_[L - 1];
            for (std::size_t loc = 0; loc < Lp.slots.size(); ++loc)
                if (Lp.mode[loc] == static_cast<int>(p)) B -= Zp[loc * static_cast<std::size_t>(Sp) + 1];
        }
        const cplx iwc(0, ms_.omega(p) * c0);
        return 0.5 * (A + static_cast<double>(sg) * B / iwc);
    }

    // ------------------------------------------------- diagonal integration
    std::vector<cplx> rk_rhs(double tau, const std::vector<cplx>& y, const Orders& ord) const {
        Snapshot s = evaluate(tau, phase_.at(tau), ord, &y, nullptr);
        std::vector<cplx> d(y.size());
        const std::size_t P = ms_.size();
        for (int l = 1; l <= N_; ++l)
            for (std::size_t p = 0; p < P; ++p)
                for (int sg : {1, -1}) {
                    const std::size_t loc = 2 * p + (sg > 0 ? 0 : 1);
                    d[diag_index(l, p, sg, P)] = s.Z_[static_cast<std::size_t>(l)][loc * static_cast<std::size_t>(s.S_[static_cast<std::size_t>(l)]) + 1];
                }
        return d;
    }

    void integrate_diagonal(const ModeState& s0) {
        const std::size_t P = ms_.size();
        const std::size_t n = static_cast<std::size_t>(N_ + 1) * 2 * P;
        std::vector<cplx> y(n);
        Orders oi = orders_for_init();
        evaluate(0.0, 0.0, oi, nullptr, &s0, &y);
        const Orders ork = orders_for_rk();
        diag_val_.assign(grid_.size(), {});
        diag_der_.assign(grid_.size(), {});
        diag_val_[0] = y;
        diag_der_[0] = rk_rhs(0.0, y, ork);
        auto axpy = [](const std::vector<cplx>& a, const std::vector<cplx>& b, double h) {
            std::vector<cplx> r(a);
            for (std::size_t i = 0; i < r.size(); ++i) r[i] += h * b[i];
            return r;
        };
        for (std::size_t m = 0; m + 1 < grid_.size(); ++m) {
            const double t = grid_[m], h = grid_[m + 1] - grid_[m];
            const auto& k1 = diag_der_[m];
            auto k2 = rk_rhs(t + 0.5 * h, axpy(y, k1, 0.5 * h), ork);
            auto k3 = rk_rhs(t + 0.5 * h, axpy(y, k2, 0.5 * h), ork);
            auto k4 = rk_rhs(t + h, axpy(y, k3, h), ork);
            for (std::size_t i = 0; i < n; ++i) y[i] += h / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]);
            diag_val_[m + 1] = y;
            diag_der_[m + 1] = rk_rhs(grid_[m + 1], y, ork);
        }
    }

    std::vector<cplx> interpolate_diag(double tau) const {
        auto it = std::upper_bound(grid_.begin(), grid_.end(), tau);
        std::size_t m = it == grid_.begin() ? 0 : static_cast<std::size_t>(it - grid_.begin()) - 1;
        if (m + 1 >= grid_.size()) return diag_val_.back();
        const double h = grid_[m + 1] - grid_[m], x = (tau - grid_[m]) / h;
        if (x == 0.0) return diag_val_[m];
        const double h00 = (1 + 2 * x) * (1 - x) * (1 - x), h10 = x * (1 - x) * (1 - x), h01 = x * x * (3 - 2 * x),
                     h11 = x * x * (x - 1);
        std::vector<cplx> r(diag_val_[m].size());
        for (std::size_t i = 0; i < r.size(); ++i)
            r[i] = h00 * diag_val_[m][i] + h10 * h * diag_der_[m][i] + h01 * diag_val_[m + 1][i] + h11 * h * diag_der_[m + 1][i];
        return r;
    }

    // Cubic of order-0 values summed over splits with total order in [lo, hi],
    // each weighted eps^l (scaled by `weight_sign`), routed to global slots,
    // near entries, or extra labels.
    struct Routed {
        std::vector<cplx> slot, near;
        std::vector<absl::flat_hash_map<LabelCode, cplx>> extra;  // per mode
    };
    void cubic_orders(const Snapshot& s, int lo, int hi, Routed& out) const;
    void cubic_combined(const Snapshot& s, Routed& out) const;

    friend class Snapshot;

    ModeSet ms_;
    LabelMode lm_;
    SlowProfile speed_, coupling_;
    double eps_;
    ExpansionOptions opt_;
    int N_;
    int Lmax_ = 0;
    double delta_ = 0.0;
    double omega0_ = 1.0;
    FrequencyLadder ladder_;
    std::vector<SignPattern> signs_;
    detail::JCoder jc_;
    std::vector<int> mode_jc_;
    std::vector<LabelCode> up_;

    std::vector<int> slot_mode_;
    std::vector<LabelCode> slot_label_;
    std::vector<double> slot_kappa_;
    std::vector<signed char> slot_diag_;
    std::vector<int> slot_first_;
    std::vector<absl::flat_hash_map<LabelCode, int>> dir_;

    std::vector<int> near_mode_;
    std::vector<LabelCode> near_label_;
    std::vector<double> near_kappa_;
    std::vector<signed char> near_sign_;
    std::vector<int> near_first_;
    std::vector<std::vector<int>> near_by_mode_;

    std::vector<Layer> layers_;
    std::vector<std::vector<detail::Split>> splits_;
    std::map<std::pair<int, int>, detail::PairTable> pairs_;
    std::map<std::tuple<int, int, int, int>, detail::OutPlan> plans_;

    std::vector<double> grid_;
    PhaseTable phase_;
    std::vector<std::vector<cplx>> diag_val_, diag_der_;
};

inline cplx Snapshot::z(int l, int slot, int q) const {
    if (q > R_ && q > 0) throw Error("snapshot: derivative order not evaluated");
    const auto& Ly = T_->layers_[static_cast<std::size_t>(l)];
    const int loc = Ly.local[static_cast<std::size_t>(slot)];
    if (loc < 0) return {};
    const int S = S_[static_cast<std::size_t>(l)];
    if (q >= S) return {};
    return Z_[static_cast<std::size_t>(l)][static_cast<std::size_t>(loc * S + q)] * fact(q);
}

inline cplx Snapshot::combined(int slot, int q) const {
    cplx acc{};
    double e = 1.0;
    for (int l = 1; l <= T_->N_ + 1; ++l) {
        e *= T_->eps_;
        acc += e * z(l, slot, q);
    }
    return acc;
}

inline void ModulationTable::cubic_orders(const Snapshot& s, int lo, int hi, Routed& out) const {
    const std::size_t P = ms_.size();
    out.slot.assign(slot_count(), cplx{});
    out.near.assign(near_count(), cplx{});
    out.extra.assign(P, {});
    std::map<std::pair<int, int>, std::vector<cplx>> pv;
    for (int l = lo; l <= hi; ++l) {
        const double w = std::pow(eps_, l);
        for (const auto& sp : splits_for(l)) {
            if (sp.c > N_ + 1) continue;
            const auto& PT = pair_table(sp.a, sp.b);
            auto key = std::make_pair(sp.a, sp.b);
            if (!pv.count(key)) pv.emplace(key, pair_values(PT, s, 0));
            const auto& Pv = pv.at(key);
            const auto& Zc = s.Z_[static_cast<std::size_t>(sp.c)];
            const int Sc = s.S_[static_cast<std::size_t>(sp.c)];
            const double m = w * sp.mult;
            stage2_scan(PT, layers_[static_cast<std::size_t>(sp.c)].entries, -1,
                        [&](int p, LabelCode code, int pid, const detail::SignedEntry& e) {
                            const cplx v = m * e.parity * Pv[static_cast<std::size_t>(pid)] * Zc[static_cast<std::size_t>(e.local * Sc)];
                            const auto& dir = dir_[static_cast<std::size_t>(p)];
                            auto it = dir.find(code);
                            if (it == dir.end()) out.extra[static_cast<std::size_t>(p)][code] += v;
                            else if (it->second >= 0) out.slot[static_cast<std::size_t>(it->second)] += v;
                            else out.near[static_cast<std::size_t>(-1 - it->second)] += v;
                        });
        }
    }
}

// Full cubic of the combined coefficients: pair the whole table with itself.
inline void ModulationTable::cubic_combined(const Snapshot& s, Routed& out) const {
    const std::size_t P = ms_.size();
    out.slot.assign(slot_count(), cplx{});
    out.near.assign(near_count(), cplx{});
    out.extra.assign(P, {});
    // combined values and entries over all slots
    const auto& Ltop = layers_[static_cast<std::size_t>(N_ + 1)];
    std::vector<cplx> Zc(Ltop.slots.size());
    for (std::size_t loc = 0; loc < Ltop.slots.size(); ++loc) Zc[loc] = s.combined(Ltop.slots[loc]);
    // pair values accumulated into a hash keyed by (jc, label)
    absl::flat_hash_map<std::pair<int, LabelCode>, cplx> pair;
    for (const auto& ea : Ltop.entries)
        for (const auto& eb : Ltop.entries)
            pair[{ea.jc + eb.jc - jc_.zero, ea.k + eb.k}] +=
                ea.parity * eb.parity * Zc[static_cast<std::size_t>(ea.local)] * Zc[static_cast<std::size_t>(eb.local)];
    // bucket by jc, in sorted key order for a deterministic summation order
    std::vector<std::tuple<int, LabelCode, cplx>> items;
    items.reserve(pair.size());
    for (const auto& [k, v] : pair) items.emplace_back(k.first, k.second, v);
    std::sort(items.begin(), items.end(), [](const auto& x, const auto& y) {
        return std::tie(std::get<0>(x), std::get<1>(x)) < std::tie(std::get<0>(y), std::get<1>(y));
    });
    std::vector<int> begin(static_cast<std::size_t>(jc_.size) + 1, 0);
    for (const auto& it : items) ++begin[static_cast<std::size_t>(std::get<0>(it)) + 1];
    for (std::size_t i = 1; i < begin.size(); ++i) begin[i] += begin[i - 1];
    for (std::size_t p = 0; p < P; ++p) {
        const auto& dir = dir_[p];
        for (const auto& e : Ltop.entries) {
            const int jP = mode_jc_[p] - e.jc + jc_.zero;
            for (int b = begin[static_cast<std::size_t>(jP)]; b < begin[static_cast<std::size_t>(jP) + 1]; ++b) {
                const auto& [jc, kP, pvv] = items[static_cast<std::size_t>(b)];
                const LabelCode code = kP + e.k;
                const cplx v = e.parity * pvv * Zc[static_cast<std::size_t>(e.local)];
                auto it = dir.find(code);
                if (it == dir.end()) out.extra[p][code] += v;
                else if (it->second >= 0) out.slot[static_cast<std::size_t>(it->second)] += v;
                else out.near[static_cast<std::size_t>(-1 - it->second)] += v;
            }
        }
    }
}

inline DefectResult ModulationTable::defect(const Snapshot& s, bool keep_values) const {
    if (s.R_ < 2) throw Error("defect: snapshot needs two derivatives");
    const std::size_t P = ms_.size();
    const double e = eps_, c = s.c(), cd = s.c(1), a = s.a();
    const double eN2 = std::pow(e, N_ + 2);

    Routed direct, check;
    if (Lmax_ == 3 * (N_ + 1)) cubic_combined(s, direct);
    else cubic_orders(s, 3, Lmax_, direct);
    cubic_orders(s, N_ + 2, Lmax_, check);

    // per-mode accumulators
    std::vector<double> sum_d(P), sum_c(P);
    DefectResult r;
    auto account = [&](int p, LabelCode k, cplx dv, cplx dc) {
        sum_d[static_cast<std::size_t>(p)] += std::abs(dv);
        sum_c[static_cast<std::size_t>(p)] += std::abs(dc);
        r.max_entry_gap = std::max(r.max_entry_gap, std::abs(dv - dc));
        r.max_entry = std::max(r.max_entry, std::abs(dv));
        ++r.entries;
        if (keep_values) r.values.emplace_back(p, k, dv);
    };

    // near-resonant contributions folded into the diagonal entries
    std::vector<cplx> near_d(2 * P), near_c(2 * P);
    auto fold = [&](std::size_t p, int sg, double kap, cplx vd, cplx vc) {
        const double beta = kap - sg * ms_.omega(p);
        const cplx w = std::polar(1.0, beta * s.phi() / e);
        near_d[2 * p + (sg > 0 ? 0 : 1)] += a * w * vd;
        near_c[2 * p + (sg > 0 ? 0 : 1)] += a * w * vc;
    };
    for (std::size_t i = 0; i < near_count(); ++i)
        fold(static_cast<std::size_t>(near_mode_[i]), near_sign_[i], near_kappa_[i], direct.near[i], check.near[i]);

    // labels produced only beyond order N+1
    for (std::size_t p = 0; p < P; ++p) {
        std::vector<LabelCode> keys;
        for (const auto& [k, v] : direct.extra[p]) keys.push_back(k);
        for (const auto& [k, v] : check.extra[p])
            if (!direct.extra[p].contains(k)) keys.push_back(k);
        std::sort(keys.begin(), keys.end());
        for (LabelCode k : keys) {
            auto itd = direct.extra[p].find(k);
            auto itc = check.extra[p].find(k);
            const cplx vd = itd == direct.extra[p].end() ? cplx{} : itd->second;
            const cplx vc = itc == check.extra[p].end() ? cplx{} : itc->second;
            const double kap = kappa_of(k);
            if (kept(p, k, kap)) account(static_cast<int>(p), k, a * vd, a * vc);
            else fold(p, in_near_set(kap, ms_.omega(p), delta_, 1) ? 1 : -1, kap, vd, vc);
        }
    }

    // stored slots
    for (std::size_t i = 0; i < slot_count(); ++i) {
        const auto p = static_cast<std::size_t>(slot_mode_[i]);
        const double kap = slot_kappa_[i], Om = ms_.omega(p);
        const int si = static_cast<int>(i);
        const cplx Z = s.combined(si, 0), Zd = s.combined(si, 1), Zdd = s.combined(si, 2);
        cplx dv = e * e * Zdd + cplx(0, 2 * kap * e * c) * Zd + (cplx(0, kap * e * cd) - kap * kap * c * c) * Z +
                  Om * Om * c * c * Z + a * direct.slot[i];
        // eps^(N+2) (z''_N + 2i k c z'_{N+1} + i k c' z_{N+1} + eps z''_{N+1}) + a * cubic beyond N+1
        cplx dc = eN2 * (s.z(N_, si, 2) + cplx(0, 2 * kap * c) * s.z(N_ + 1, si, 1) +
                         cplx(0, kap * cd) * s.z(N_ + 1, si, 0) + e * s.z(N_ + 1, si, 2)) +
                  a * check.slot[i];
        if (slot_diag_[i] != 0) {
            const std::size_t di = 2 * p + (slot_diag_[i] > 0 ? 0 : 1);
            dv += near_d[di];
            dc += near_c[di];
        }
        account(static_cast<int>(p), slot_label_[i], dv, dc);
    }
    double nd = 0.0, nc = 0.0;
    for (std::size_t p = 0; p < P; ++p) {
        nd += sum_d[p] * sum_d[p];
        nc += sum_c[p] * sum_c[p];
    }
    r.norm = std::sqrt(images() * nd);
    r.norm_check = std::sqrt(images() * nc);
    return r;
}

inline std::vector<cplx> ModulationTable::near_resonant_force(const Snapshot& s) const {
    const std::size_t P = ms_.size();
    Routed r;
    if (Lmax_ == 3 * (N_ + 1)) cubic_combined(s, r);
    else cubic_orders(s, 3, Lmax_, r);
    std::vector<cplx> e(2 * P);
    const double a = s.a();
    for (std::size_t i = 0; i < near_count(); ++i) {
        const auto p = static_cast<std::size_t>(near_mode_[i]);
        e[2 * p + (near_sign_[i] > 0 ? 0 : 1)] += -a * r.near[i] * std::polar(1.0, near_kappa_[i] * s.phi() / eps_);
    }
    for (std::size_t p = 0; p < P; ++p) {
        std::vector<LabelCode> keys;
        for (const auto& [k, v] : r.extra[p]) keys.push_back(k);
        std::sort(keys.begin(), keys.end());
        for (LabelCode k : keys) {
            const double kap = kappa_of(k);
            if (kept(p, k, kap)) continue;
            const int sg = in_near_set(kap, ms_.omega(p), delta_, 1) ? 1 : -1;
            e[2 * p + (sg > 0 ? 0 : 1)] += -a * r.extra[p].at(k) * std::polar(1.0, kap * s.phi() / eps_);
        }
    }
    return e;
}

}  // namespace mfe
