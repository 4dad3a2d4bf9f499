// Command-line front end: validate, run, sweep, snapshot.

#include <CLI11.hpp>

#include <cstdio>
#include <filesystem>
#include <iostream>

#include "mfe/harness.hpp"

namespace {

enum Exit { kPass = 0, kFail = 1, kConfig = 2, kRuntime = 3 };

struct Common {
    std::string config;
    std::string out;
    std::optional<std::uint64_t> seed;
    int jobs = 1;
};

mfe::ExperimentConfig load(const Common& o) {
    auto c = mfe::load_config(o.config);
    if (o.seed) {
        c.seed = *o.seed;
        c.echo["seed"] = std::to_string(c.seed);
    }
    if (!o.out.empty()) {
        c.out = o.out;
        c.echo["out"] = c.out;
    }
    return c;
}

void print_config(const mfe::ExperimentConfig& c) {
    for (const auto& [k, v] : c.echo) std::printf("%s = %s\n", k.c_str(), v.c_str());
    std::printf("# hash %s, %zu run(s)\n", mfe::config_hash(c).c_str(), c.eps.size());
}

int report(const mfe::SweepReport& rep, const std::string& out) {
    auto s = mfe::emit_report(rep, out);
    for (const auto& r : rep.runs)
        std::printf("eps=%-8g defect=%.3e remainder=%.3e drift=%.3e action_dev=%.3e\n", r.eps, r.metrics.defect,
                    r.metrics.remainder, r.metrics.drift, r.metrics.action_dev);
    for (const auto& [k, f] : s.json["fits"].items()) {
        if (!f.contains("slope")) continue;
        std::printf("fit %-11s slope %7.3f +- %.3f (expected %.3f +- %.2f)%s\n", k.c_str(), f["slope"].get<double>(),
                    f["stderr"].get<double>(), f["expected"].get<double>(), f["tolerance"].get<double>(),
                    f["checked"].get<bool>() ? (f["pass"].get<bool>() ? "  PASS" : "  FAIL") : "");
    }
    std::printf("%s -> %s\n", s.pass ? "PASS" : "FAIL", out.c_str());
    return s.pass ? kPass : kFail;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Modulated Fourier expansions for wave equations with slowly varying speed"};
    app.require_subcommand(1);
    Common o;
    auto add_common = [&](CLI::App* sc) {
        sc->add_option("--config", o.config, "config file (key = value)")->required()->check(CLI::ExistingFile);
        sc->add_option("--out", o.out, "output directory (overrides config)");
        sc->add_option("--seed", o.seed, "seed for random initial data (overrides config)");
        sc->add_option("--jobs", o.jobs, "concurrent runs")->check(CLI::PositiveNumber);
    };
    auto* validate = app.add_subcommand("validate", "check a config and echo it with defaults");
    auto* run = app.add_subcommand("run", "run the first eps of the config");
    auto* sweep = app.add_subcommand("sweep", "run every eps and fit orders");
    auto* snapshot = app.add_subcommand("snapshot", "dump the first window's modulation table as JSON");
    int points = 5;
    snapshot->add_option("--points", points, "slow-time samples in [0,1]")->check(CLI::Range(1, 1001));
    for (auto* sc : {validate, run, sweep, snapshot}) add_common(sc);
    CLI11_PARSE(app, argc, argv);

    try {
        mfe::ExperimentConfig c = load(o);
        if (validate->parsed()) {
            print_config(c);
            return kPass;
        }
        if (run->parsed()) {
            c.eps.resize(1);
            c.echo["eps"] = mfe::cfg_detail::fmt(c.eps[0]);
            return report(mfe::sweep(c, 1), c.out);
        }
        if (sweep->parsed()) return report(mfe::sweep(c, o.jobs), c.out);
        if (snapshot->parsed()) {
            auto pb = mfe::make_problem(c, c.eps[0]);
            auto s0 = mfe::initial_state(c, pb.modes, c.eps[0], c.seed);
            auto T = mfe::build_table(c, pb, s0, 0);
            std::vector<double> taus;
            for (int i = 0; i < points; ++i) taus.push_back(points == 1 ? 0.0 : static_cast<double>(i) / (points - 1));
            std::filesystem::create_directories(c.out);
            auto path = std::filesystem::path(c.out) / "table.json";
            mfe::report_detail::atomic_write(path, mfe::table_json(T, taus).dump(1) + "\n");
            std::printf("%zu slots, %zu near-resonant labels -> %s\n", T.slot_count(), T.near_count(), path.c_str());
            return kPass;
        }
    } catch (const mfe::ConfigError& e) {
        std::fprintf(stderr, "config error: %s\n", e.what());
        return kConfig;
    } catch (const std::exception& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return kRuntime;
    }
    return kRuntime;
}
