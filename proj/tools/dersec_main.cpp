#include "dersec/scenario.hpp"

#include <CLI11.hpp>

#include <atomic>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <mutex>
#include <string>
#include <thread>
#include <vector>

namespace {

int log_level() {
    const char* env = std::getenv("DERSEC_LOG");
    if (!env)
        return 1;
    const std::string v(env);
    if (v == "quiet" || v == "0")
        return 0;
    if (v == "debug" || v == "2")
        return 2;
    return 1;
}

struct SweepResult {
    std::uint64_t seed = 0;
    dersec::Summary summary;
    bool failed = false;
    std::string error;
};

} // namespace

int main(int argc, char** argv) {
    CLI::App app{"dersec - data-driven secondary control testbed"};
    app.require_subcommand(1);

    auto* run = app.add_subcommand("run", "run a scenario file");
    std::string scenario_path;
    std::string out_dir;
    std::string algorithm;
    std::int64_t seed = -1;
    int sweep = 1;
    run->add_option("scenario", scenario_path, "scenario file")->required();
    run->add_option("--seed", seed, "override the scenario seed");
    run->add_option("--out", out_dir, "output directory for logs and summaries");
    run->add_option("--algorithm", algorithm, "override: alg1|alg2|additive");
    run->add_option("--sweep", sweep, "run K consecutive seeds in parallel")
        ->check(CLI::Range(1, 1024));

    CLI11_PARSE(app, argc, argv);
    const int verbosity = log_level();

    try {
        dersec::Scenario scenario = dersec::load_scenario_file(scenario_path);
        if (seed >= 0)
            scenario.seed = static_cast<std::uint64_t>(seed);
        if (!algorithm.empty())
            scenario.algorithm = dersec::algorithm_from_name(algorithm);

        if (sweep == 1) {
            if (verbosity >= 1)
                std::cerr << "running " << scenario.name << " ("
                          << dersec::algorithm_name(scenario.algorithm) << ", seed "
                          << scenario.seed << ")\n";
            dersec::RunLog log;
            try {
                log = dersec::run_scenario(scenario);
            } catch (const dersec::ScenarioAborted& aborted) {
                std::cerr << "error: " << aborted.what() << "\n";
                if (!out_dir.empty()) {
                    dersec::write_run_log(aborted.partial_log, out_dir);
                    std::cerr << "partial log written to " << out_dir << "\n";
                }
                return 1;
            }
            const dersec::Summary summary = dersec::summarize(log);
            if (!out_dir.empty()) {
                dersec::write_run_log(log, out_dir);
                if (verbosity >= 1)
                    std::cerr << "wrote " << out_dir << "\n";
            }
            std::cout << dersec::summary_table(summary);
            return 0;
        }

        // Seed sweep: independent runs, merged summary in seed order.
        std::vector<SweepResult> results(static_cast<std::size_t>(sweep));
        std::atomic<int> next{0};
        const unsigned threads =
            std::min<unsigned>(std::thread::hardware_concurrency() > 0
                                   ? std::thread::hardware_concurrency()
                                   : 2,
                               static_cast<unsigned>(sweep));
        auto worker = [&]() {
            for (;;) {
                const int idx = next.fetch_add(1);
                if (idx >= sweep)
                    return;
                dersec::Scenario copy = scenario;
                copy.seed = scenario.seed + static_cast<std::uint64_t>(idx);
                SweepResult& res = results[static_cast<std::size_t>(idx)];
                res.seed = copy.seed;
                try {
                    const dersec::RunLog log = dersec::run_scenario(copy);
                    res.summary = dersec::summarize(log);
                    if (!out_dir.empty())
                        dersec::write_run_log(log,
                                              (std::filesystem::path(out_dir) /
                                               ("seed_" + std::to_string(copy.seed)))
                                                  .string());
                } catch (const dersec::ScenarioAborted& aborted) {
                    res.failed = true;
                    res.error = aborted.what();
                    if (!out_dir.empty())
                        dersec::write_run_log(aborted.partial_log,
                                              (std::filesystem::path(out_dir) /
                                               ("seed_" + std::to_string(copy.seed)))
                                                  .string());
                } catch (const std::exception& ex) {
                    res.failed = true;
                    res.error = ex.what();
                }
            }
        };
        std::vector<std::thread> pool;
        for (unsigned i = 0; i < threads; ++i)
            pool.emplace_back(worker);
        for (auto& th : pool)
            th.join();

        bool any_failed = false;
        std::string merged;
        for (const SweepResult& res : results) {
            std::cout << "== seed " << res.seed << " ==\n";
            merged += "== seed " + std::to_string(res.seed) + " ==\n";
            if (res.failed) {
                any_failed = true;
                std::cout << "error: " << res.error << "\n";
                merged += "error: " + res.error + "\n";
                continue;
            }
            std::cout << dersec::summary_table(res.summary);
            merged += dersec::summary_table(res.summary);
        }
        if (!out_dir.empty()) {
            std::filesystem::create_directories(out_dir);
            std::ofstream out(std::filesystem::path(out_dir) / "summary.txt");
            out << merged;
        }
        return any_failed ? 1 : 0;
    } catch (const std::exception& ex) {
        std::cerr << "error: " << ex.what() << "\n";
        return 1;
    }
}
