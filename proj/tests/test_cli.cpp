// Drives the installed-style `dakit` executable through a shell.
#include "json.hpp"

#include <gtest/gtest.h>

#include <sys/wait.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

const fs::path kGolden = DAKIT_GOLDEN_DIR;

std::string slurp(const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    EXPECT_TRUE(in.good()) << "cannot read " << p;
    std::ostringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

class Cli : public ::testing::Test {
protected:
    void SetUp() override {
        dir_ = fs::temp_directory_path() /
               (std::string("dakit_cli_") + ::testing::UnitTest::GetInstance()->current_test_info()->name());
        fs::remove_all(dir_);
        fs::create_directories(dir_);
        fs::copy_file(kGolden / "config.json", dir_ / "config.json");
    }
    void TearDown() override { fs::remove_all(dir_); }

    // Runs the CLI inside the scratch directory and returns its exit status.
    int dakit(const std::string& args) {
        const std::string cmd = "cd '" + dir_.string() + "' && '" DAKIT_CLI_PATH "' " + args + " >stdout.txt 2>stderr.txt";
        const int status = std::system(cmd.c_str());
        return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
    }
    std::string file(const std::string& name) { return slurp(dir_ / name); }
    void put(const std::string& name, const std::string& text) { std::ofstream(dir_ / name) << text; }

    fs::path dir_;
};

}  // namespace

TEST_F(Cli, GenerateAndFilterReproduceGoldenFiles) {
    ASSERT_EQ(dakit("generate --config config.json --out-dir ."), 0) << file("stderr.txt");
    EXPECT_EQ(file("truth.csv"), slurp(kGolden / "truth.csv"));
    EXPECT_EQ(file("observations.csv"), slurp(kGolden / "observations.csv"));

    ASSERT_EQ(dakit("filter --config config.json --out-dir enkf"), 0) << file("stderr.txt");
    EXPECT_EQ(file("enkf/filter.csv"), slurp(kGolden / "filter_enkf.csv"));
    ASSERT_EQ(dakit("filter --config config.json --algorithm bpf --ensemble-size 200 --out-dir bpf"), 0);
    EXPECT_EQ(file("bpf/filter.csv"), slurp(kGolden / "filter_bpf.csv"));
    ASSERT_EQ(dakit("filter --config config.json --algorithm kf --out-dir kf"), 0);
    EXPECT_EQ(file("kf/filter.csv"), slurp(kGolden / "filter_kf.csv"));
}

TEST_F(Cli, OutputsDoNotDependOnThreadCount) {
    for (const char* threads : {"1", "2", "5"}) {
        const std::string out = std::string("t") + threads;
        ASSERT_EQ(dakit("generate --config config.json --threads " + std::string(threads) + " --out-dir " + out), 0);
        ASSERT_EQ(dakit("filter --config config.json --threads " + std::string(threads) + " --obs " + out +
                        "/observations.csv --truth " + out + "/truth.csv --algorithm bpf --ensemble-size 200" +
                        " --out-dir " + out),
                  0)
            << file("stderr.txt");
        EXPECT_EQ(file(out + "/truth.csv"), slurp(kGolden / "truth.csv"));
        EXPECT_EQ(file(out + "/filter.csv"), slurp(kGolden / "filter_bpf.csv"));
        EXPECT_EQ(json::parse(file(out + "/manifest.json"))["threads"], std::stoi(threads));
    }
}

TEST_F(Cli, ManifestDescribesTheRun) {
    ASSERT_EQ(dakit("generate --config config.json --out-dir run"), 0);
    const json m = json::parse(file("run/manifest.json"));
    EXPECT_EQ(m["command"], "generate");
    EXPECT_EQ(m["seed"], 20240611u);
    EXPECT_EQ(m["version"], "0.1.0");
    EXPECT_EQ(m["config_hash"].get<std::string>().rfind("fnv1a64:", 0), 0u);
    EXPECT_GE(m["wall_seconds"].get<double>(), 0.0);
    ASSERT_EQ(m["artifacts"].size(), 2u);
    EXPECT_EQ(m["artifacts"][0]["bytes"], file("run/truth.csv").size());

    // The hash identifies the resolved configuration, so a different seed
    // changes it and the same inputs do not.
    ASSERT_EQ(dakit("generate --config config.json --out-dir again"), 0);
    ASSERT_EQ(dakit("generate --config config.json --seed 1 --out-dir other"), 0);
    EXPECT_EQ(json::parse(file("again/manifest.json"))["config_hash"], m["config_hash"]);
    EXPECT_NE(json::parse(file("other/manifest.json"))["config_hash"], m["config_hash"]);
    EXPECT_NE(file("other/truth.csv"), file("run/truth.csv"));
}

TEST_F(Cli, ResolvedConfigRoundTripsByteForByte) {
    ASSERT_EQ(dakit("generate --config config.json --out-dir a"), 0);
    ASSERT_EQ(dakit("generate --config a/resolved_config.json --out-dir b"), 0);
    EXPECT_EQ(file("a/resolved_config.json"), file("b/resolved_config.json"));
    EXPECT_EQ(file("a/truth.csv"), file("b/truth.csv"));
}

TEST_F(Cli, UnknownConfigKeyIsRejected) {
    put("typo.json", R"({"model": {"dynamics": [[1]], "obs": [[1]], "model_noise": [[1]], "obs_noise": [[1]],
                                    "obs_nosie": [[1]]}})");
    EXPECT_EQ(dakit("generate --config typo.json --out-dir out"), 65);
    const json err = json::parse(file("out/error.json"));
    EXPECT_EQ(err["status"], "parse");
    ASSERT_EQ(err["details"].size(), 1u);
    EXPECT_NE(err["details"][0].get<std::string>().find("model.obs_nosie"), std::string::npos);
}

TEST_F(Cli, NegativeVarianceIsReportedWithItsFieldPath) {
    put("neg.json", R"({"model": {"dynamics": [[1]], "obs": [[1]], "model_noise": [[-0.1]], "obs_noise": [[1]]}})");
    EXPECT_EQ(dakit("generate --config neg.json --out-dir out"), 65);
    const json err = json::parse(file("out/error.json"));
    EXPECT_NE(err["details"][0].get<std::string>().find("model.model_noise"), std::string::npos);
    EXPECT_NE(file("stderr.txt").find("model.model_noise"), std::string::npos);
}

TEST_F(Cli, UnknownCommandIsAUsageError) {
    EXPECT_EQ(dakit("assimilate --config config.json"), 64);
    EXPECT_NE(file("stderr.txt").find("unknown command 'assimilate'"), std::string::npos);
    EXPECT_EQ(dakit(""), 64);
    EXPECT_EQ(dakit("filter --no-such-flag"), 64);
}

TEST_F(Cli, HelpListsTheFlags) {
    EXPECT_EQ(dakit("--help"), 0);
    const std::string help = file("stdout.txt");
    for (const char* flag : {"--config", "--seed", "--out-dir", "--threads", "generate", "filter", "smooth", "learn",
                             "score", "mf", "invert", "bench", "DAKIT_LOG"})
        EXPECT_NE(help.find(flag), std::string::npos) << flag;
    EXPECT_EQ(dakit("filter --help"), 0);
    EXPECT_NE(file("stdout.txt").find("--algorithm"), std::string::npos);
}

TEST_F(Cli, NumericFailureExitsWithTwoAndDiagnostics) {
    put("mf.json", R"({"mf": {"cost_hi": 1, "models": [{"name": "cheap", "cost": 0.5, "rho": 0.9}], "budget": 1}})");
    EXPECT_EQ(dakit("mf --config mf.json --out-dir out"), 2);
    const json err = json::parse(file("out/error.json"));
    EXPECT_EQ(err["command"], "mf");
    EXPECT_EQ(err["status"], "domain");
    EXPECT_FALSE(err["message"].get<std::string>().empty());
}

TEST_F(Cli, MissingInputIsAFileError) {
    EXPECT_EQ(dakit("filter --config config.json --obs nowhere.csv --out-dir out"), 74);
    EXPECT_EQ(json::parse(file("out/error.json"))["status"], "io");
}

TEST_F(Cli, LogLevelControlsStderr) {
    EXPECT_EQ(dakit("generate --config config.json --out-dir q"), 0);
    EXPECT_TRUE(file("stderr.txt").empty());
    ASSERT_EQ(std::system(("cd '" + dir_.string() + "' && DAKIT_LOG=info '" DAKIT_CLI_PATH
                           "' generate --config config.json --out-dir q 2>log.txt")
                              .c_str()),
              0);
    EXPECT_NE(file("log.txt").find("wrote"), std::string::npos);
    const int bad = std::system(("cd '" + dir_.string() + "' && DAKIT_LOG=loud '" DAKIT_CLI_PATH
                                 "' generate --config config.json 2>/dev/null")
                                    .c_str());
    EXPECT_EQ(WEXITSTATUS(bad), 64);
}

TEST_F(Cli, EverySubcommandRunsFromTheCommandLine) {
    ASSERT_EQ(dakit("generate --config config.json --out-dir ."), 0);
    EXPECT_EQ(dakit("smooth --config config.json --out-dir smooth"), 0) << file("stderr.txt");
    EXPECT_TRUE(fs::exists(dir_ / "smooth/map.csv"));
    EXPECT_EQ(dakit("learn --config config.json --method em --iters 3 --out-dir learn"), 0) << file("stderr.txt");
    EXPECT_TRUE(fs::exists(dir_ / "learn/params.json"));
    put("forecast.csv", "j,member,x0,x1,x2\n1,0,1,0,-1\n1,1,1.5,0.5,-0.5\n");
    EXPECT_EQ(dakit("score --config config.json --rule energy --out-dir score"), 0) << file("stderr.txt");
    EXPECT_TRUE(fs::exists(dir_ / "score/score.json"));
    put("mf.json", R"({"mf": {"models": [{"name": "cheap", "cost": 0.01, "rho": 0.95}], "budget": 30}})");
    EXPECT_EQ(dakit("mf --config mf.json --out-dir mf"), 0) << file("stderr.txt");
    EXPECT_TRUE(fs::exists(dir_ / "mf/allocation.csv"));
    put("inv.json", R"({"invert": {"matrix": [[1, 0], [0, 2]]}})");
    put("data.csv", "1\n2\n");
    EXPECT_EQ(dakit("invert --config inv.json --iters 3 --out-dir inv"), 0) << file("stderr.txt");
    EXPECT_TRUE(fs::exists(dir_ / "inv/result.json"));
    EXPECT_EQ(dakit("bench --config config.json --steps 10 --ensemble-size 20 --repeats 1 --out-dir bench"), 0)
        << file("stderr.txt");
    EXPECT_TRUE(fs::exists(dir_ / "bench/bench.json"));
}
