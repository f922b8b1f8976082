// Command-line front end. Everything numerical goes through the C interface;
// this file only assembles the configuration, writes files and maps failures
// to exit codes.
#include "dakit/dakit.h"

#include "CLI11.hpp"
#include "json.hpp"

#include <chrono>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <memory>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

// sysexits-style codes, plus 2 for numerical failures.
constexpr int kExitOk = 0;
constexpr int kExitNumeric = 2;
constexpr int kExitUsage = 64;
constexpr int kExitData = 65;
constexpr int kExitSoftware = 70;
constexpr int kExitIo = 74;

int exit_code(dakit_status s) {
    switch (s) {
    case DAKIT_OK:
        return kExitOk;
    case DAKIT_E_NUMERIC:
    case DAKIT_E_DOMAIN:
    case DAKIT_E_DEGENERATE:
    case DAKIT_E_NON_CONVERGENCE:
    case DAKIT_E_RANK:
    case DAKIT_E_EVALUATION:
        return kExitNumeric;
    case DAKIT_E_ARGUMENT:
        return kExitUsage;
    case DAKIT_E_CONFIGURATION:
    case DAKIT_E_PRECONDITION:
    case DAKIT_E_CONSTRUCTION:
    case DAKIT_E_PARSE:
        return kExitData;
    case DAKIT_E_IO:
        return kExitIo;
    default:
        return kExitSoftware;
    }
}

enum class LogLevel { error, info, debug };

LogLevel g_log = LogLevel::error;

void log(LogLevel level, const std::string& line) {
    if (level <= g_log) std::cerr << "dakit: " << line << '\n';
}

std::uint64_t fnv1a64(const std::string& s) {
    std::uint64_t h = 0xcbf29ce484222325ULL;
    for (unsigned char c : s) {
        h ^= c;
        h *= 0x100000001b3ULL;
    }
    return h;
}

std::string hex(std::uint64_t v) {
    char buf[17];
    std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(v));
    return buf;
}

void write_text(const fs::path& path, const std::string& text) {
    std::ofstream out(path, std::ios::binary);
    out << text;
    if (!out) throw std::runtime_error("cannot write " + path.string());
}

// Command-line values that override fields of one configuration section.
struct Overrides {
    std::map<std::string, std::optional<std::string>> text;
    std::map<std::string, std::optional<long long>> integer;
    std::map<std::string, std::optional<double>> real;

    void apply(json& section) const {
        for (const auto& [k, v] : text)
            if (v) section[k] = *v;
        for (const auto& [k, v] : integer)
            if (v) section[k] = *v;
        for (const auto& [k, v] : real)
            if (v) section[k] = *v;
    }
    bool any() const {
        for (const auto& [k, v] : text)
            if (v) return true;
        for (const auto& [k, v] : integer)
            if (v) return true;
        for (const auto& [k, v] : real)
            if (v) return true;
        return false;
    }
};

struct Failure {
    dakit_status status;
    std::string message;
    std::vector<std::string> details;
};

Failure last_failure(dakit_status s) {
    Failure f{s, dakit_last_error(), {}};
    for (size_t i = 0; i < dakit_last_error_detail_count(); ++i) f.details.emplace_back(dakit_last_error_detail(i));
    return f;
}

int report(const Failure& f, const std::string& command, const fs::path& out_dir) {
    std::cerr << "dakit " << command << ": " << dakit_status_name(f.status) << " error: " << f.message << '\n';
    const json doc{{"command", command},
                   {"status", dakit_status_name(f.status)},
                   {"code", static_cast<int>(f.status)},
                   {"message", f.message},
                   {"details", f.details}};
    try {
        fs::create_directories(out_dir);
        write_text(out_dir / "error.json", doc.dump(2) + "\n");
    } catch (const std::exception& e) {
        std::cerr << "dakit: could not write error.json: " << e.what() << '\n';
    }
    return exit_code(f.status);
}

std::string read_config(const std::optional<std::string>& path) {
    if (!path) return "{}";
    std::ifstream in(*path, std::ios::binary);
    if (!in) throw Failure{DAKIT_E_IO, "cannot read configuration '" + *path + "'", {}};
    std::ostringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

// Folds the seed and per-command overrides into the configuration text.
// Malformed JSON is passed through untouched so the library reports it.
std::string merge(const std::string& text, const std::string& command, const Overrides& o,
                  const std::optional<std::uint64_t>& seed) {
    if (!o.any() && !seed) return text;
    json j = json::parse(text, nullptr, false);
    if (j.is_discarded() || !j.is_object()) return text;
    if (seed) j["seed"] = *seed;
    if (o.any()) {
        json& section = j[command];
        if (section.is_null()) section = json::object();
        if (section.is_object()) o.apply(section);
    }
    return j.dump();
}

int execute(const std::string& command, const std::optional<std::string>& config_path,
            const std::optional<std::uint64_t>& seed, const fs::path& out_dir, int threads, const Overrides& o) {
    const auto started = std::chrono::steady_clock::now();
    try {
        if (dakit_set_threads(threads) != DAKIT_OK) throw last_failure(DAKIT_E_ARGUMENT);
        char* canonical_c = nullptr;
        const std::string merged = merge(read_config(config_path), command, o, seed);
        if (dakit_status s = dakit_config_canonicalize(merged.c_str(), &canonical_c); s != DAKIT_OK)
            throw last_failure(s);
        const std::string canonical = canonical_c;
        dakit_string_free(canonical_c);
        log(LogLevel::debug, "configuration:\n" + canonical);

        dakit_result* result = nullptr;
        log(LogLevel::info, "running " + command + " with " + std::to_string(dakit_get_threads()) + " thread(s)");
        if (dakit_status s = dakit_run(command.c_str(), canonical.c_str(), nullptr, &result); s != DAKIT_OK)
            throw last_failure(s);
        std::unique_ptr<dakit_result, void (*)(dakit_result*)> guard(result, dakit_result_destroy);

        json artifacts = json::array();
        try {
            fs::create_directories(out_dir);
            write_text(out_dir / "resolved_config.json", canonical);
            for (size_t i = 0; i < dakit_result_artifact_count(result); ++i) {
                size_t length = 0;
                const char* content = dakit_result_artifact_content(result, i, &length);
                const std::string name = dakit_result_artifact_name(result, i);
                write_text(out_dir / name, std::string(content, length));
                artifacts.push_back({{"name", name}, {"bytes", length}});
                log(LogLevel::info, "wrote " + (out_dir / name).string());
            }
        } catch (const std::exception& e) {
            throw Failure{DAKIT_E_IO, e.what(), {}};
        }
        const json summary = json::parse(dakit_result_summary(result));
        const double wall =
            std::chrono::duration<double>(std::chrono::steady_clock::now() - started).count();
        const json manifest{{"command", command},
                            {"version", dakit_version()},
                            {"config_hash", "fnv1a64:" + hex(fnv1a64(canonical))},
                            {"seed", json::parse(canonical)["seed"]},
                            {"threads", dakit_get_threads()},
                            {"wall_seconds", wall},
                            {"artifacts", artifacts},
                            {"summary", summary}};
        write_text(out_dir / "manifest.json", manifest.dump(2) + "\n");
        log(LogLevel::info, "summary " + summary.dump());
        return kExitOk;
    } catch (const Failure& f) {
        return report(f, command, out_dir);
    } catch (const std::exception& e) {
        return report(Failure{DAKIT_E_INTERNAL, e.what(), {}}, command, out_dir);
    }
}

}  // namespace

int main(int argc, char** argv) {
    if (const char* env = std::getenv("DAKIT_LOG")) {
        const std::string v = env;
        if (v == "error") g_log = LogLevel::error;
        else if (v == "info") g_log = LogLevel::info;
        else if (v == "debug") g_log = LogLevel::debug;
        else {
            std::cerr << "dakit: DAKIT_LOG must be error, info or debug (got '" << v << "')\n";
            return kExitUsage;
        }
    }

    CLI::App app{"dakit: data assimilation experiments from a JSON configuration"};
    app.set_version_flag("--version", std::string(dakit_version()));
    app.name("dakit");
    app.require_subcommand(0, 1);
    app.fallthrough();
    app.footer("Exit status: 0 success, 2 numerical failure, 64 usage error, 65 invalid configuration or data,\n"
               "74 file error, 70 internal error. Failures also write error.json to the output directory.\n"
               "Set DAKIT_LOG=info or DAKIT_LOG=debug for progress messages on stderr.");

    std::optional<std::string> config;
    std::optional<std::uint64_t> seed;
    std::string out_dir = ".";
    int threads = 1;
    app.add_option("--config", config, "JSON configuration file")->check(CLI::ExistingFile);
    app.add_option("--seed", seed, "Root seed (overrides the configuration)");
    app.add_option("--out-dir", out_dir, "Directory for artifacts and the manifest")->capture_default_str();
    app.add_option("--threads", threads, "Worker threads; 0 uses every core. Results do not depend on it")
        ->check(CLI::NonNegativeNumber)
        ->capture_default_str();

    std::map<std::string, Overrides> overrides;
    auto text = [&](CLI::App* sub, const std::string& flag, const std::string& key, const std::string& help) {
        sub->add_option(flag, overrides[sub->get_name()].text[key], help);
    };
    auto integer = [&](CLI::App* sub, const std::string& flag, const std::string& key, const std::string& help) {
        sub->add_option(flag, overrides[sub->get_name()].integer[key], help);
    };
    auto real = [&](CLI::App* sub, const std::string& flag, const std::string& key, const std::string& help) {
        sub->add_option(flag, overrides[sub->get_name()].real[key], help);
    };

    std::map<std::string, CLI::App*> subs;
    const std::map<std::string, std::string> about{
        {"generate", "Simulate a truth trajectory and observations"},
        {"filter", "Run a sequential filter over observations"},
        {"smooth", "Solve the 4DVar smoothing problem"},
        {"learn", "Estimate model parameters or a filter gain"},
        {"score", "Score ensemble forecasts against a truth trajectory"},
        {"mf", "Allocate samples across model fidelities"},
        {"invert", "Ensemble Kalman inversion"},
        {"bench", "Time the filters on simulated data"}};
    for (size_t i = 0; i < dakit_command_count(); ++i) {
        const std::string name = dakit_command_name(i);
        subs[name] = app.add_subcommand(name, about.at(name));
        overrides[name];
    }

    integer(subs["generate"], "--steps", "steps", "Number of assimilation steps");

    text(subs["filter"], "--algorithm", "algorithm", "kf, 3dvar, exkf, enkf, bpf or opf");
    text(subs["filter"], "--obs", "obs", "Observation CSV");
    text(subs["filter"], "--truth", "truth", "Truth CSV, adds an RMSE to the summary");
    integer(subs["filter"], "--ensemble-size", "ensemble_size", "Ensemble or particle count");

    text(subs["smooth"], "--mode", "mode", "weak or strong");
    text(subs["smooth"], "--obs", "obs", "Observation CSV");
    integer(subs["smooth"], "--max-iter", "max_iter", "Gauss-Newton iteration limit");

    text(subs["learn"], "--method", "method", "em, mcem, mle, increment or gain");
    text(subs["learn"], "--obs", "obs", "Observation CSV");
    text(subs["learn"], "--truth", "truth", "Truth CSV (increment method)");
    integer(subs["learn"], "--iters", "iters", "Outer iterations");

    text(subs["score"], "--forecast", "forecast", "Ensemble forecast CSV (j,member,x0,...)");
    text(subs["score"], "--truth", "truth", "Truth CSV");
    text(subs["score"], "--rule", "rule", "crps, energy or spread_error");

    real(subs["mf"], "--budget", "budget", "Total cost budget");
    integer(subs["mf"], "--replications", "replications", "Synthetic replications for checking the variance");

    text(subs["invert"], "--data", "data", "Data CSV");
    integer(subs["invert"], "--iters", "iters", "Iterations");
    integer(subs["invert"], "--ensemble-size", "ensemble_size", "Ensemble size");

    integer(subs["bench"], "--steps", "steps", "Simulated steps");
    integer(subs["bench"], "--ensemble-size", "ensemble_size", "Ensemble and particle count");
    integer(subs["bench"], "--repeats", "repeats", "Timing repetitions");

    // Set after the subcommands exist so they do not inherit it; stray words
    // then reach the checks below instead of a generic parser message.
    app.allow_extras();
    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::CallForAllHelp& e) {
        return app.exit(e);
    } catch (const CLI::CallForVersion& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        app.exit(e);
        return kExitUsage;
    }

    const std::vector<std::string> extras = app.remaining();
    for (const auto& [name, sub] : subs) {
        if (!sub->parsed()) continue;
        if (!extras.empty()) {
            std::cerr << "dakit " << name << ": unexpected argument '" << extras.front() << "'\n";
            return kExitUsage;
        }
        return execute(name, config, seed, fs::path(out_dir), threads, overrides.at(name));
    }
    if (!extras.empty())
        std::cerr << "dakit: unknown command '" << extras.front() << "'\n";
    std::cerr << app.help();
    return kExitUsage;
}
