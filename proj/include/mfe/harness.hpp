#pragma once

// Experiment driver: flat key=value configs, window runs against the
// reference integrator, patching across windows, order fits and reports.

#include <json.hpp>

#include <algorithm>
#include <atomic>
#include <charconv>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <mutex>
#include <optional>
#include <random>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include "mfe/error.hpp"
#include "mfe/expansion.hpp"
#include "mfe/profile.hpp"
#include "mfe/solver.hpp"
#include "mfe/spectral.hpp"

namespace mfe {

inline constexpr const char* kVersion = "1.0.0";

struct InitMode {
    ModeIndex j{0, 0, 0};
    double u = 0.0, v = 0.0;  // in units of eps
};

struct ExperimentConfig {
    int dimension = 1;
    std::vector<std::string> lengths;  // expressions, default "pi"
    int cutoff = 16;
    std::vector<double> eps{0.1};
    int order = 2;
    double alpha = 0.0;  // 0: 1/N
    std::string speed = "1";
    std::string coupling = "1";
    double c0 = 0.1;
    std::string init = "random";
    std::vector<InitMode> init_modes;
    std::uint64_t seed = 1;
    double decay = 2.0;
    int windows = 1;  // 0: ceil(1/eps) per run
    double solver_tol = 1e-10;
    double grid_h = 5e-3;
    int samples = 200;
    int mfe_samples = 200;
    int defect_samples = 200;
    int defect_order = -1;
    std::string out = "out";
    std::vector<std::string> checks;
    std::map<std::string, std::string> echo;  // every key with its effective value
};

// ------------------------------------------------------------------ parsing
namespace cfg_detail {

inline std::string trim(std::string s) {
    const auto b = s.find_first_not_of(" \t\r\n");
    if (b == std::string::npos) return {};
    const auto e = s.find_last_not_of(" \t\r\n");
    return s.substr(b, e - b + 1);
}

inline std::vector<std::string> split(const std::string& s, char sep) {
    std::vector<std::string> out;
    std::string cur;
    std::istringstream is(s);
    while (std::getline(is, cur, sep)) {
        cur = trim(cur);
        if (!cur.empty()) out.push_back(cur);
    }
    return out;
}

inline double to_double(const std::string& key, const std::string& v) {
    try {
        std::size_t n = 0;
        double x = std::stod(v, &n);
        if (n != v.size()) throw std::invalid_argument(v);
        return x;
    } catch (const std::exception&) {
        throw ConfigError(key, "expected a number, got '" + v + "'");
    }
}

inline long long to_int(const std::string& key, const std::string& v) {
    try {
        std::size_t n = 0;
        long long x = std::stoll(v, &n);
        if (n != v.size()) throw std::invalid_argument(v);
        return x;
    } catch (const std::exception&) {
        throw ConfigError(key, "expected an integer, got '" + v + "'");
    }
}

// Shortest text that round-trips to the same double.
inline std::string fmt(double x) {
    char buf[40];
    auto [end, ec] = std::to_chars(buf, buf + sizeof buf, x);
    return std::string(buf, end);
}

}  // namespace cfg_detail

inline ExperimentConfig parse_config(const std::string& text) {
    using namespace cfg_detail;
    std::map<std::string, std::string> kv;
    std::istringstream is(text);
    std::string line;
    int lineno = 0;
    while (std::getline(is, line)) {
        ++lineno;
        if (auto h = line.find('#'); h != std::string::npos) line.resize(h);
        line = trim(line);
        if (line.empty()) continue;
        auto eq = line.find('=');
        if (eq == std::string::npos) throw ConfigError("line " + std::to_string(lineno), "expected key = value");
        std::string key = trim(line.substr(0, eq)), val = trim(line.substr(eq + 1));
        if (key.empty()) throw ConfigError("line " + std::to_string(lineno), "empty key");
        if (kv.count(key)) throw ConfigError(key, "duplicate key");
        kv[key] = val;
    }
    static const char* known[] = {"dimension", "lengths",     "cutoff",      "eps",          "order",
                                  "alpha",     "speed_expr",       "coupling_expr",    "c0",           "init",
                                  "init_modes", "seed",       "decay",       "windows",      "solver_tol",
                                  "grid_h",    "samples",     "mfe_samples", "defect_samples", "defect_order",
                                  "out",       "checks"};
    for (const auto& [k, v] : kv)
        if (std::find_if(std::begin(known), std::end(known), [&](const char* s) { return k == s; }) == std::end(known))
            throw ConfigError(k, "unknown key");
    if (!kv.count("eps")) throw ConfigError("eps", "missing required key");

    ExperimentConfig c;
    auto get = [&](const char* k) -> std::optional<std::string> {
        auto it = kv.find(k);
        if (it == kv.end()) return std::nullopt;
        return it->second;
    };
    if (auto v = get("dimension")) c.dimension = static_cast<int>(to_int("dimension", *v));
    if (c.dimension < 1 || c.dimension > 3) throw ConfigError("dimension", "must be 1, 2 or 3");
    const bool nd = c.dimension > 1;
    c.cutoff = nd ? 3 : 16;
    c.order = nd ? 4 : 2;
    c.grid_h = nd ? 1e-2 : 5e-3;
    c.mfe_samples = nd ? 4 : 200;
    c.defect_samples = nd ? 2 : 200;
    c.checks = nd ? std::vector<std::string>{"defect", "drift"} : std::vector<std::string>{"defect", "remainder", "drift"};
    if (auto v = get("lengths")) c.lengths = split(*v, ',');
    else c.lengths.assign(static_cast<std::size_t>(c.dimension), "pi");
    if (static_cast<int>(c.lengths.size()) != c.dimension) throw ConfigError("lengths", "one length per axis required");
    if (auto v = get("cutoff")) c.cutoff = static_cast<int>(to_int("cutoff", *v));
    if (c.cutoff < 1) throw ConfigError("cutoff", "must be at least 1");
    c.eps.clear();
    for (const auto& s : split(*get("eps"), ',')) c.eps.push_back(to_double("eps", s));
    if (c.eps.empty()) throw ConfigError("eps", "empty list");
    for (double e : c.eps)
        if (!(e > 0 && e < 1)) throw ConfigError("eps", "values must lie in (0,1)");
    for (std::size_t i = 1; i < c.eps.size(); ++i)
        if (!(c.eps[i] < c.eps[i - 1])) throw ConfigError("eps", "list must be strictly descending");
    if (auto v = get("order")) c.order = static_cast<int>(to_int("order", *v));
    if (c.order < 1 || c.order > 4) throw ConfigError("order", "must lie in 1..4");
    if (auto v = get("alpha")) c.alpha = to_double("alpha", *v);
    if (c.alpha == 0.0) c.alpha = 1.0 / c.order;
    if (!(c.alpha > 0 && c.alpha < 1)) throw ConfigError("alpha", "must lie in (0,1)");
    if (auto v = get("speed_expr")) c.speed = *v;
    if (auto v = get("coupling_expr")) c.coupling = *v;
    if (auto v = get("c0")) c.c0 = to_double("c0", *v);
    if (!(c.c0 > 0)) throw ConfigError("c0", "must be positive");
    if (auto v = get("init")) c.init = *v;
    if (c.init != "random" && c.init != "modes") throw ConfigError("init", "must be 'random' or 'modes'");
    if (auto v = get("init_modes")) {
        for (const auto& item : split(*v, ';')) {
            auto parts = split(item, ':');
            if (parts.size() != 3) throw ConfigError("init_modes", "entries are j[,j2[,j3]]:u:v");
            auto idx = split(parts[0], ',');
            if (static_cast<int>(idx.size()) != c.dimension) throw ConfigError("init_modes", "mode index needs one entry per axis");
            InitMode m;
            for (std::size_t i = 0; i < idx.size(); ++i) m.j[i] = static_cast<int>(to_int("init_modes", idx[i]));
            m.u = to_double("init_modes", parts[1]);
            m.v = to_double("init_modes", parts[2]);
            c.init_modes.push_back(m);
        }
    }
    if (c.init == "modes" && c.init_modes.empty()) throw ConfigError("init_modes", "required when init = modes");
    if (auto v = get("seed")) c.seed = static_cast<std::uint64_t>(to_int("seed", *v));
    if (auto v = get("decay")) c.decay = to_double("decay", *v);
    if (auto v = get("windows")) {
        if (*v == "inv_eps") c.windows = 0;
        else c.windows = static_cast<int>(to_int("windows", *v));
        if (c.windows < 0 || (c.windows == 0 && *v != "inv_eps")) throw ConfigError("windows", "must be positive or 'inv_eps'");
    }
    if (auto v = get("solver_tol")) c.solver_tol = to_double("solver_tol", *v);
    if (!(c.solver_tol > 0)) throw ConfigError("solver_tol", "must be positive");
    if (auto v = get("grid_h")) c.grid_h = to_double("grid_h", *v);
    if (!(c.grid_h > 0 && c.grid_h <= 0.5)) throw ConfigError("grid_h", "must lie in (0, 0.5]");
    if (auto v = get("samples")) c.samples = static_cast<int>(to_int("samples", *v));
    if (auto v = get("mfe_samples")) c.mfe_samples = static_cast<int>(to_int("mfe_samples", *v));
    if (auto v = get("defect_samples")) c.defect_samples = static_cast<int>(to_int("defect_samples", *v));
    if (c.samples < 1) throw ConfigError("samples", "must be at least 1");
    if (c.mfe_samples < 1 || c.samples % c.mfe_samples != 0)
        throw ConfigError("mfe_samples", "must be positive and divide samples");
    if (c.defect_samples < 0 || (c.defect_samples > 0 && c.samples % c.defect_samples != 0))
        throw ConfigError("defect_samples", "must divide samples (0 disables)");
    if (auto v = get("defect_order")) c.defect_order = static_cast<int>(to_int("defect_order", *v));
    if (auto v = get("out")) c.out = *v;
    if (auto v = get("checks")) c.checks = split(*v, ',');
    static const char* metrics[] = {"defect", "remainder", "drift", "transition", "action_dev",
                                    "link_calI", "link_I", "diag", "offdiag"};
    for (const auto& m : c.checks)
        if (std::find_if(std::begin(metrics), std::end(metrics), [&](const char* s) { return m == s; }) == std::end(metrics))
            throw ConfigError("checks", "unknown metric '" + m + "'");

    // profiles must parse and stay above c0 on the whole horizon
    const int maxd = std::max(6, c.order + 3);
    SlowProfile sp, cp;
    try {
        sp = parse_profile(c.speed, maxd, "speed_expr");
    } catch (const ParseError& e) {
        throw ConfigError("speed_expr", e.what());
    }
    try {
        cp = parse_profile(c.coupling, maxd, "coupling_expr");
    } catch (const ParseError& e) {
        throw ConfigError("coupling_expr", e.what());
    }
    const double horizon = c.windows == 0 ? std::ceil(1.0 / c.eps.back()) : c.windows;
    ProfileReport rep;
    try {
        rep = validate_profile(sp, horizon, c.c0, 2001);
    } catch (const Error& e) {
        throw ConfigError("speed_expr", e.what());
    }
    if (!rep.pass)
        throw ConfigError("speed_expr", "speed dips to " + fmt(rep.min_value) + " at tau=" + fmt(rep.argmin) + ", below c0=" + fmt(c.c0));
    try {
        validate_profile(cp, horizon, -INFINITY, 2001);
    } catch (const Error& e) {
        throw ConfigError("coupling_expr", e.what());
    }
    for (std::size_t i = 0; i < c.lengths.size(); ++i) {
        double L = 0.0;
        try {
            auto lp = parse_profile(c.lengths[i], 2, "length");
            if (!lp.is_constant()) throw ConfigError("lengths", "lengths must be constant expressions");
            L = lp(0.0);
        } catch (const ParseError& e) {
            throw ConfigError("lengths", e.what());
        }
        if (!(L > 0)) throw ConfigError("lengths", "lengths must be positive");
    }

    auto join = [](const auto& v, auto f) {
        std::string s;
        for (std::size_t i = 0; i < v.size(); ++i) s += (i ? "," : "") + f(v[i]);
        return s;
    };
    c.echo = {{"dimension", std::to_string(c.dimension)},
              {"lengths", join(c.lengths, [](const std::string& s) { return s; })},
              {"cutoff", std::to_string(c.cutoff)},
              {"eps", join(c.eps, [](double x) { return fmt(x); })},
              {"order", std::to_string(c.order)},
              {"alpha", fmt(c.alpha)},
              {"speed_expr", c.speed},
              {"coupling_expr", c.coupling},
              {"c0", fmt(c.c0)},
              {"init", c.init},
              {"init_modes", kv.count("init_modes") ? kv["init_modes"] : ""},
              {"seed", std::to_string(c.seed)},
              {"decay", fmt(c.decay)},
              {"windows", c.windows == 0 ? "inv_eps" : std::to_string(c.windows)},
              {"solver_tol", fmt(c.solver_tol)},
              {"grid_h", fmt(c.grid_h)},
              {"samples", std::to_string(c.samples)},
              {"mfe_samples", std::to_string(c.mfe_samples)},
              {"defect_samples", std::to_string(c.defect_samples)},
              {"defect_order", std::to_string(c.defect_order)},
              {"out", c.out},
              {"checks", join(c.checks, [](const std::string& s) { return s; })}};
    return c;
}

inline ExperimentConfig load_config(const std::string& path) {
    std::ifstream is(path);
    if (!is) throw ConfigError("config", "cannot open " + path);
    std::stringstream ss;
    ss << is.rdbuf();
    return parse_config(ss.str());
}

// FNV-1a over the canonical echo; the output directory is not part of the identity.
inline std::string config_hash(const ExperimentConfig& c) {
    std::uint64_t h = 1469598103934665603ULL;
    for (const auto& [k, v] : c.echo)
        if (k != "out")
            for (char ch : k + "=" + v + "\n") {
            h ^= static_cast<unsigned char>(ch);
            h *= 1099511628211ULL;
        }
    char buf[17];
    std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
    return buf;
}

// ------------------------------------------------------------ problem setup
inline std::optional<std::vector<PiMultiple>> pi_multiples(const std::vector<double>& lengths) {
    std::vector<PiMultiple> out;
    for (double L : lengths) {
        const double r = L / std::numbers::pi;
        bool found = false;
        for (std::int64_t den = 1; den <= 16 && !found; ++den) {
            const double num = std::round(r * static_cast<double>(den));
            if (num >= 1 && std::abs(r * static_cast<double>(den) - num) < 1e-12 * std::max(1.0, num)) {
                out.push_back({static_cast<std::int64_t>(num), den});
                found = true;
            }
        }
        if (!found) return std::nullopt;
    }
    return out;
}

struct Problem {
    ModeSet modes;
    ProblemSpec spec;
};

inline Problem make_problem(const ExperimentConfig& c, double eps) {
    std::vector<double> L;
    for (const auto& s : c.lengths) L.push_back(parse_profile(s, 2)(0.0));
    Problem p;
    p.modes = ModeSet(c.dimension, c.cutoff, L, pi_multiples(L));
    p.spec.dimension = c.dimension;
    p.spec.lengths = L;
    const int maxd = std::max(6, c.order + 3);
    p.spec.speed = parse_profile(c.speed, maxd, "speed_expr");
    p.spec.coupling = parse_profile(c.coupling, maxd, "coupling_expr");
    p.spec.epsilon = eps;
    p.spec.c0 = c.c0;
    return p;
}

// Initial data: either the listed modes (amplitudes times eps) or random
// coefficients eps*|j|^(-decay)*U(-1,1). The random draw depends only on the
// seed, so every eps sees the same data shape.
inline ModeState initial_state(const ExperimentConfig& c, const ModeSet& ms, double eps, std::uint64_t seed) {
    ModeState s = ModeState::zeros(ms.size());
    if (c.init == "modes") {
        for (const auto& m : c.init_modes) {
            auto p = ms.find(m.j);
            if (!p) throw ConfigError("init_modes", "mode outside the cutoff");
            s.u[*p] = eps * m.u;
            s.v[*p] = eps * m.v;
        }
        return s;
    }
    std::mt19937_64 rng(seed);
    std::uniform_real_distribution<double> U(-1.0, 1.0);
    for (std::size_t p = 0; p < ms.size(); ++p) {
        const auto& j = ms.mode(p);
        const double n = std::sqrt(static_cast<double>(j[0] * j[0] + j[1] * j[1] + j[2] * j[2]));
        const double amp = eps * std::pow(n, -c.decay);
        s.u[p] = amp * U(rng);
        s.v[p] = amp * U(rng);
    }
    return s;
}

// ---------------------------------------------------------------- windows
struct SampleRow {
    double t = 0.0;
    double I = 0.0;
    std::optional<double> calI, defect, remainder;
    double lead = 0.0;
    std::optional<double> diag, offdiag;
    int window = 0;
};

struct WindowResult {
    std::vector<SampleRow> rows;
    double calI_start = 0.0, calI_end = 0.0;
    double defect_max = 0.0;
    double remainder_end = 0.0;
    double link_calI = 0.0, link_I = 0.0;
    double diag_max = 0.0, offdiag_max = 0.0;
    double check_gap = 0.0;  // max relative gap of the two defect paths
    ModeState end;
};

inline double h1l2_distance(const ModeSet& ms, const ModeState& a, const ModeState& b) {
    ModeState d = ModeState::zeros(ms.size());
    for (std::size_t p = 0; p < ms.size(); ++p) {
        d.u[p] = a.u[p] - b.u[p];
        d.v[p] = a.v[p] - b.v[p];
    }
    auto n = sobolev_norms(ms, d);
    return std::sqrt(n.grad * n.grad + n.vel * n.vel);
}

inline ModulationTable build_table(const ExperimentConfig& c, const Problem& pb, const ModeState& start, int window) {
    ExpansionOptions opt;
    opt.order = c.order;
    opt.alpha = c.alpha;
    opt.grid_h = c.grid_h;
    opt.tau0 = window;
    opt.defect_order = c.defect_order < 0 ? (c.dimension == 1 ? -1 : c.order + 2) : c.defect_order;
    return ModulationTable(pb.modes, c.dimension == 1 ? LabelMode::Scalar : LabelMode::Ladder, pb.spec.speed,
                           pb.spec.coupling, pb.spec.epsilon, start, opt);
}

// One window [n/eps, (n+1)/eps]: expansion from the window-start state and the
// reference trajectory side by side.
inline WindowResult run_window(const ExperimentConfig& c, const Problem& pb, const ModeState& start, int n) {
    const double eps = pb.spec.epsilon;
    ModulationTable T = build_table(c, pb, start, n);
    const double t0 = n / eps, t1 = (n + 1) / eps;
    ModeState s0 = start;
    s0.t = t0;
    Trajectory tr = integrate(pb.modes, s0, t1, pb.spec, c.solver_tol, (t1 - t0) / c.samples);
    if (static_cast<int>(tr.t.size()) != c.samples + 1) throw Error("run_window: unexpected sample count");
    WindowResult r;
    const int me = c.samples / c.mfe_samples;
    const int de = c.defect_samples > 0 ? c.samples / c.defect_samples : 0;
    for (int m = 0; m <= c.samples; ++m) {
        SampleRow row;
        row.t = tr.t[static_cast<std::size_t>(m)];
        row.I = tr.action[static_cast<std::size_t>(m)];
        row.window = n;
        const bool mfe = m % me == 0;
        const bool dfc = de > 0 && m % de == 0;
        if (mfe || dfc) {
            const double tau = static_cast<double>(m) / c.samples;
            Snapshot s = T.snapshot(tau, dfc ? 2 : 1);
            auto inv = T.almost_invariant(s);
            row.calI = inv.value;
            row.lead = inv.leading;
            ModeState rec = T.reconstruct(s);
            row.remainder = h1l2_distance(pb.modes, rec, tr.states[static_cast<std::size_t>(m)]);
            auto nm = T.norms(s);
            row.diag = nm.diag;
            row.offdiag = nm.offdiag;
            r.link_calI = std::max(r.link_calI, std::abs(inv.value - inv.leading));
            const double I_mfe = action(pb.modes, rec, pb.spec.speed(n + tau));
            r.link_I = std::max(r.link_I, std::abs(I_mfe - inv.leading));
            r.diag_max = std::max(r.diag_max, nm.diag);
            r.offdiag_max = std::max(r.offdiag_max, nm.offdiag);
            if (m == 0) r.calI_start = inv.value;
            if (m == c.samples) {
                r.calI_end = inv.value;
                r.remainder_end = *row.remainder;
            }
            if (dfc) {
                auto d = T.defect(s);
                row.defect = d.norm;
                r.defect_max = std::max(r.defect_max, d.norm);
                if (d.norm > 0) r.check_gap = std::max(r.check_gap, std::abs(d.norm - d.norm_check) / d.norm);
            }
        }
        r.rows.push_back(row);
    }
    r.end = tr.states.back();
    return r;
}

struct RunMetrics {
    double defect = 0, remainder = 0, drift = 0, transition = 0, action_dev = 0, link_calI = 0, link_I = 0, diag = 0,
           offdiag = 0, check_gap = 0;
    double get(const std::string& m) const {
        if (m == "defect") return defect;
        if (m == "remainder") return remainder;
        if (m == "drift") return drift;
        if (m == "transition") return transition;
        if (m == "action_dev") return action_dev;
        if (m == "link_calI") return link_calI;
        if (m == "link_I") return link_I;
        if (m == "diag") return diag;
        if (m == "offdiag") return offdiag;
        throw Error("unknown metric " + m);
    }
};

struct RunResult {
    double eps = 0.0;
    int windows = 0;
    std::vector<SampleRow> rows;
    std::vector<double> transitions;  // |calI_n(0) - calI_{n-1}(1)| at each boundary
    std::vector<double> drifts;       // |calI_n(1) - calI_n(0)| per window
    RunMetrics metrics;
};

// Chain W windows, restarting the expansion from the reference state at each
// boundary. The reference trajectory is continuous across boundaries.
inline RunResult run_patched(const ExperimentConfig& c, double eps, int W) {
    if (W < 1) throw Error("run_patched: need at least one window");
    Problem pb = make_problem(c, eps);
    ModeState state = initial_state(c, pb.modes, eps, c.seed);
    RunResult rr;
    rr.eps = eps;
    rr.windows = W;
    double prev_end = 0.0;
    const double I0 = action(pb.modes, state, pb.spec.speed(0.0));
    for (int n = 0; n < W; ++n) {
        WindowResult w = run_window(c, pb, state, n);
        if (n > 0) rr.transitions.push_back(std::abs(w.calI_start - prev_end));
        rr.drifts.push_back(std::abs(w.calI_end - w.calI_start));
        prev_end = w.calI_end;
        if (n == 0) {
            rr.metrics.defect = w.defect_max;
            rr.metrics.remainder = w.remainder_end;
            rr.metrics.link_calI = w.link_calI;
            rr.metrics.link_I = w.link_I;
            rr.metrics.diag = w.diag_max;
            rr.metrics.offdiag = w.offdiag_max;
        }
        rr.metrics.check_gap = std::max(rr.metrics.check_gap, w.check_gap);
        for (std::size_t i = 0; i < w.rows.size(); ++i) {
            if (n > 0 && i == 0) continue;  // boundary sample already recorded
            rr.metrics.action_dev = std::max(rr.metrics.action_dev, std::abs(w.rows[i].I - I0));
            rr.rows.push_back(w.rows[i]);
        }
        state = w.end;
    }
    for (double d : rr.drifts) rr.metrics.drift = std::max(rr.metrics.drift, d);
    for (double d : rr.transitions) rr.metrics.transition = std::max(rr.metrics.transition, d);
    return rr;
}

// --------------------------------------------------------------- order fits
struct OrderFit {
    double slope = 0.0, intercept = 0.0, stderr_ = 0.0;
    std::vector<double> eps_used;
    std::vector<double> eps_excluded;  // zero magnitudes, below floor
};

inline OrderFit estimate_order(const std::vector<std::pair<double, double>>& pts) {
    OrderFit f;
    std::vector<double> x, y;
    for (auto [e, m] : pts) {
        if (!(e > 0)) throw Error("estimate_order: eps must be positive");
        if (m > 0 && std::isfinite(m)) {
            x.push_back(std::log(e));
            y.push_back(std::log(m));
            f.eps_used.push_back(e);
        } else {
            f.eps_excluded.push_back(e);
        }
    }
    const std::size_t n = x.size();
    if (n < 2) throw Error("estimate_order: fewer than 2 usable points");
    double mx = 0, my = 0;
    for (std::size_t i = 0; i < n; ++i) {
        mx += x[i];
        my += y[i];
    }
    mx /= static_cast<double>(n);
    my /= static_cast<double>(n);
    double sxx = 0, sxy = 0;
    for (std::size_t i = 0; i < n; ++i) {
        sxx += (x[i] - mx) * (x[i] - mx);
        sxy += (x[i] - mx) * (y[i] - my);
    }
    if (sxx == 0) throw Error("estimate_order: eps values must differ");
    f.slope = sxy / sxx;
    f.intercept = my - f.slope * mx;
    if (n > 2) {
        double rss = 0;
        for (std::size_t i = 0; i < n; ++i) {
            double r = y[i] - (f.intercept + f.slope * x[i]);
            rss += r * r;
        }
        f.stderr_ = std::sqrt(rss / static_cast<double>(n - 2) / sxx);
    }
    return f;
}

// Expected eps-exponent and tolerance of each metric.
inline std::pair<double, double> expected_slope(const ExperimentConfig& c, const std::string& m) {
    const double N = c.order, a = c.alpha;
    if (c.dimension == 1) {
        if (m == "defect" || m == "drift" || m == "transition") return {N + 2, 0.5};
        if (m == "remainder") return {N + 1, 0.5};
        if (m == "diag") return {1, 0.5};
        if (m == "offdiag") return {3, 0.5};
        return {3, 0.5};  // action_dev, link_calI, link_I
    }
    if (m == "defect" || m == "drift" || m == "transition") return {4 - 1 / N, 0.5};
    if (m == "remainder") return {3 - a, 0.5};
    if (m == "diag") return {1, 0.3};
    if (m == "offdiag") return {2 + a, 0.5};
    return {3, 0.5};
}

// ------------------------------------------------------------------ reports
struct SweepReport {
    ExperimentConfig config;
    std::vector<RunResult> runs;
};

inline SweepReport sweep(const ExperimentConfig& c, int jobs = 1) {
    SweepReport rep;
    rep.config = c;
    rep.runs.resize(c.eps.size());
    std::atomic<std::size_t> next{0};
    std::mutex mu;
    std::exception_ptr err;
    auto worker = [&] {
        for (;;) {
            const std::size_t i = next++;
            if (i >= c.eps.size()) return;
            try {
                const double e = c.eps[i];
                const int W = c.windows == 0 ? static_cast<int>(std::ceil(1.0 / e - 1e-9)) : c.windows;
                rep.runs[i] = run_patched(c, e, W);
            } catch (...) {
                std::lock_guard<std::mutex> lk(mu);
                if (!err) err = std::current_exception();
                next = c.eps.size();
            }
        }
    };
    jobs = std::max(1, std::min<int>(jobs, static_cast<int>(c.eps.size())));
    std::vector<std::thread> pool;
    for (int k = 1; k < jobs; ++k) pool.emplace_back(worker);
    worker();
    for (auto& t : pool) t.join();
    if (err) std::rethrow_exception(err);
    return rep;
}

namespace report_detail {

inline void atomic_write(const std::filesystem::path& path, const std::string& data) {
    auto tmp = path;
    tmp += ".tmp";
    {
        std::ofstream os(tmp, std::ios::binary);
        if (!os) throw Error("cannot open " + tmp.string() + " for writing");
        os << data;
        if (!os) throw Error("write failed for " + tmp.string());
    }
    std::error_code ec;
    std::filesystem::rename(tmp, path, ec);
    if (ec) throw Error("cannot rename " + tmp.string() + " to " + path.string() + ": " + ec.message());
}

inline std::string csv(const RunResult& r) {
    std::string s = "t,I,calI,defect_norm,remainder_H1L2,window_index\n";
    char buf[64];
    auto num = [&](double x) {
        std::snprintf(buf, sizeof buf, "%.17g", x);
        return std::string(buf);
    };
    for (const auto& row : r.rows) {
        s += num(row.t) + "," + num(row.I) + "," + (row.calI ? num(*row.calI) : "") + "," +
             (row.defect ? num(*row.defect) : "") + "," + (row.remainder ? num(*row.remainder) : "") + "," +
             std::to_string(row.window) + "\n";
    }
    return s;
}

inline std::string run_name(std::size_t i, double eps) {
    char buf[64];
    std::snprintf(buf, sizeof buf, "run_%02zu_eps_%.6g.csv", i, eps);
    return buf;
}

}  // namespace report_detail

struct ReportSummary {
    bool pass = true;
    nlohmann::ordered_json json;
};

inline ReportSummary summarize(const SweepReport& rep) {
    using nlohmann::ordered_json;
    const auto& c = rep.config;
    ReportSummary out;
    ordered_json j;
    j["version"] = kVersion;
    j["config_hash"] = config_hash(c);
    ordered_json cfg = ordered_json::object();
    for (const auto& [k, v] : c.echo) cfg[k] = v;
    j["config"] = cfg;
    ordered_json runs = ordered_json::array();
    for (std::size_t i = 0; i < rep.runs.size(); ++i) {
        const auto& r = rep.runs[i];
        ordered_json m;
        for (const char* k : {"defect", "remainder", "drift", "transition", "action_dev", "link_calI", "link_I", "diag",
                              "offdiag"})
            m[k] = r.metrics.get(k);
        m["defect_path_gap"] = r.metrics.check_gap;
        runs.push_back({{"eps", r.eps},
                        {"windows", r.windows},
                        {"csv", report_detail::run_name(i, r.eps)},
                        {"metrics", m},
                        {"drifts", r.drifts},
                        {"transitions", r.transitions}});
    }
    j["runs"] = runs;
    ordered_json fits = ordered_json::object();
    if (rep.runs.size() >= 2) {
        for (const char* k : {"defect", "remainder", "drift", "transition", "action_dev", "link_calI", "link_I", "diag",
                              "offdiag"}) {
            std::vector<std::pair<double, double>> pts;
            for (const auto& r : rep.runs) pts.emplace_back(r.eps, r.metrics.get(k));
            auto [want, tol] = expected_slope(c, k);
            const bool checked = std::find(c.checks.begin(), c.checks.end(), k) != c.checks.end();
            ordered_json f;
            try {
                OrderFit of = estimate_order(pts);
                const bool ok = std::abs(of.slope - want) <= tol;
                f = {{"slope", of.slope}, {"intercept", of.intercept}, {"stderr", of.stderr_},
                     {"eps", of.eps_used}, {"below_floor", of.eps_excluded}, {"expected", want},
                     {"tolerance", tol},   {"checked", checked},            {"pass", ok}};
                if (checked && !ok) out.pass = false;
            } catch (const Error& e) {
                f = {{"note", e.what()}, {"expected", want}, {"tolerance", tol}, {"checked", checked}, {"pass", false}};
                if (checked) out.pass = false;
            }
            fits[k] = f;
        }
    }
    j["fits"] = fits;
    j["pass"] = out.pass;
    out.json = j;
    return out;
}

inline ReportSummary emit_report(const SweepReport& rep, const std::string& outdir) {
    std::filesystem::create_directories(outdir);
    for (std::size_t i = 0; i < rep.runs.size(); ++i)
        report_detail::atomic_write(std::filesystem::path(outdir) / report_detail::run_name(i, rep.runs[i].eps),
                                    report_detail::csv(rep.runs[i]));
    ReportSummary s = summarize(rep);
    report_detail::atomic_write(std::filesystem::path(outdir) / "summary.json", s.json.dump(2) + "\n");
    return s;
}

// Modulation table export at the given slow times.
inline nlohmann::ordered_json table_json(const ModulationTable& T, const std::vector<double>& taus) {
    using nlohmann::ordered_json;
    ordered_json j;
    j["eps"] = T.eps();
    j["order"] = T.order();
    j["dimension"] = T.modes().dim();
    j["tau0"] = T.tau0();
    j["label_kind"] = T.label_mode() == LabelMode::Scalar ? "integer" : "ladder";
    if (T.label_mode() == LabelMode::Ladder) {
        j["alpha"] = T.alpha();
        j["ladder"] = T.ladder().omega;
    }
    j["grid_h"] = T.options().grid_h;
    j["tau"] = taus;
    auto label_json = [&](LabelCode k) -> ordered_json {
        if (T.label_mode() == LabelMode::Scalar) return k;
        ordered_json a = ordered_json::array();
        for (auto [m, v] : unpack(k, static_cast<int>(T.ladder().size())).entries) a.push_back({m, v});
        return a;
    };
    std::vector<Snapshot> snaps;
    for (double t : taus) snaps.push_back(T.snapshot(t, 0));
    ordered_json slots = ordered_json::array();
    for (std::size_t i = 0; i < T.slot_count(); ++i) {
        const auto& jm = T.modes().mode(static_cast<std::size_t>(T.slot_mode(i)));
        ordered_json mode = ordered_json::array();
        for (int a = 0; a < T.modes().dim(); ++a) mode.push_back(jm[static_cast<std::size_t>(a)]);
        ordered_json layers = ordered_json::array();
        for (int l = T.slot_first_layer(i); l <= T.order() + 1; ++l) {
            ordered_json vals = ordered_json::array();
            for (const auto& s : snaps) {
                cplx z = s.z(l, static_cast<int>(i));
                vals.push_back({z.real(), z.imag()});
            }
            layers.push_back({{"l", l}, {"z", vals}});
        }
        slots.push_back({{"mode", mode},
                         {"label", label_json(T.slot_label(i))},
                         {"kappa", T.slot_kappa(i)},
                         {"diagonal", T.slot_diag(i)},
                         {"layers", layers}});
    }
    j["slots"] = slots;
    ordered_json near = ordered_json::array();
    for (std::size_t i = 0; i < T.near_count(); ++i) {
        const auto& jm = T.modes().mode(static_cast<std::size_t>(T.near_mode(i)));
        ordered_json mode = ordered_json::array();
        for (int a = 0; a < T.modes().dim(); ++a) mode.push_back(jm[static_cast<std::size_t>(a)]);
        near.push_back({{"mode", mode}, {"label", label_json(T.near_label(i))}, {"kappa", T.near_kappa(i)}, {"sign", T.near_sign(i)}});
    }
    j["near_resonant"] = near;
    return j;
}

}  // namespace mfe
