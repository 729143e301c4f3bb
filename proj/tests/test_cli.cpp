#include <doctest.h>

#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "cladapt/cli.hpp"

namespace fs = std::filesystem;

namespace {

struct Outcome {
    int code;
    std::string out;
    std::string err;
};

Outcome cli(std::vector<std::string> args) {
    args.insert(args.begin(), "cladapt");
    std::vector<const char*> argv;
    for (const auto& a : args) argv.push_back(a.c_str());
    std::ostringstream out, err;
    const int code = cladapt::cli::run_cli(static_cast<int>(argv.size()), argv.data(), out, err);
    return {code, out.str(), err.str()};
}

std::string slurp(const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    std::stringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

fs::path scratch(const std::string& name) {
    auto p = fs::temp_directory_path() / ("cladapt_cli_" + name);
    fs::remove_all(p);
    return p;
}

const std::string kDefaultConfig = std::string(CLADAPT_SOURCE_DIR) + "/configs/default.json";

}  // namespace

TEST_CASE("usage and configuration errors exit with 2") {
    CHECK(cli({}).code == 2);
    CHECK(cli({"frobnicate"}).code == 2);
    const auto unknown = cli({"run", "--out", "/tmp/x", "--bogus"});
    CHECK(unknown.code == 2);
    CHECK(unknown.err.find("--bogus") != std::string::npos);
    CHECK(cli({"run"}).code == 2);  // --out is required

    const auto missing = cli({"run", "--config", "/nonexistent/cfg.json", "--out", scratch("missing").string()});
    CHECK(missing.code == 2);
    CHECK(missing.err.find("/nonexistent/cfg.json") != std::string::npos);

    const auto dir = scratch("badjson");
    fs::create_directories(dir);
    std::ofstream(dir / "cfg.json") << "{\"repetitions\": 0}";
    CHECK(cli({"generate", "--config", (dir / "cfg.json").string(), "--out", dir.string()}).code == 2);
    CHECK(cli({"adapt", "--out", dir.string(), "--strategy", "replay"}).code == 2);
    CHECK(cli({"adapt", "--out", dir.string(), "--strategy", "ewc", "--rho", "0.1", "--quantile", "0.5"}).code == 2);
    fs::remove_all(dir);
}

TEST_CASE("help exits with 0") {
    const auto r = cli({"--help"});
    CHECK(r.code == 0);
    CHECK(r.out.find("adapt") != std::string::npos);
}

TEST_CASE("runtime errors exit with 1") {
    const auto dir = scratch("runtime");
    CHECK(cli({"generate", "--out", dir.string()}).code == 0);
    // no stage-1 checkpoint yet
    const auto r = cli({"adapt", "--out", dir.string(), "--strategy", "JT-0%", "--rep", "1"});
    CHECK(r.code == 1);
    CHECK(r.err.find("checkpoint") != std::string::npos);
    fs::remove_all(dir);
}

TEST_CASE("run produces the full output tree") {
    const auto dir = scratch("run");
    const auto r = cli({"run", "--config", kDefaultConfig, "--out", dir.string(), "--repetitions", "1", "--strategy",
                        "JT-0%", "--strategy", "EWC"});
    REQUIRE(r.code == 0);
    CHECK(r.out.find("JT-0%,") != std::string::npos);
    for (const char* f : {"data/A.csv", "data/B.csv", "config.json", "provenance.json", "report.md", "report.json",
                          "transfer.csv", "checkpoints/rep1_initial.ckpt", "checkpoints/rep1_ewc.ckpt",
                          "checkpoints/rep1_ewc_fisher.params", "checkpoints/rep1_ewc_prior.params",
                          "scores/rep1_initial_A.csv", "scores/rep1_jt-0_B.csv"})
        CHECK_MESSAGE(fs::exists(dir / f), f);

    // every number of the report comes back from the score files alone
    const auto md = slurp(dir / "report.md");
    fs::remove(dir / "report.md");
    CHECK(cli({"report", "--out", dir.string()}).code == 0);
    CHECK(slurp(dir / "report.md") == md);
    fs::remove_all(dir);
}

TEST_CASE("staged subcommands reproduce run") {
    const auto staged = scratch("staged");
    const auto whole = scratch("whole");
    const std::vector<std::string> base{"--config", kDefaultConfig, "--seed", "3"};
    auto with = [&](std::vector<std::string> head, const fs::path& out) {
        head.insert(head.end(), base.begin(), base.end());
        head.push_back("--out");
        head.push_back(out.string());
        return head;
    };

    auto run_args = with({"run"}, whole);
    run_args.insert(run_args.end(), {"--repetitions", "1", "--strategy", "JT-0%", "--strategy", "LWF"});
    REQUIRE(cli(run_args).code == 0);

    // the staged tree picks up the restricted config written by run
    fs::create_directories(staged);
    fs::copy_file(whole / "config.json", staged / "config.json");
    REQUIRE(cli({"generate", "--out", staged.string()}).code == 0);
    REQUIRE(cli({"train", "--out", staged.string()}).code == 0);
    REQUIRE(cli({"adapt", "--out", staged.string(), "--strategy", "JT-0%"}).code == 0);
    REQUIRE(cli({"adapt", "--out", staged.string(), "--strategy", "lwf"}).code == 0);
    REQUIRE(cli({"evaluate", "--out", staged.string()}).code == 0);
    REQUIRE(cli({"report", "--out", staged.string()}).code == 0);
    CHECK(slurp(staged / "report.md") == slurp(whole / "report.md"));
    CHECK(slurp(staged / "report.json") == slurp(whole / "report.json"));
    CHECK(slurp(staged / "checkpoints/rep1_lwf.ckpt") == slurp(whole / "checkpoints/rep1_lwf.ckpt"));
    fs::remove_all(staged);
    fs::remove_all(whole);
}

TEST_CASE("adapt accepts the reference EWC flags") {
    const auto dir = scratch("ewcflags");
    REQUIRE(cli({"train", "--out", dir.string(), "--rep", "1"}).code == 0);
    const auto r = cli({"adapt", "--out", dir.string(), "--rep", "1", "--strategy", "ewc", "--lambda", "0.001",
                        "--rho", "0.001"});
    CHECK(r.code == 0);
    CHECK(fs::exists(dir / "checkpoints/rep1_ewc_prior.params"));
    const auto prior = slurp(dir / "checkpoints/rep1_ewc_prior.params");
    CHECK(prior.find("absolute") != std::string::npos);
    fs::remove_all(dir);
}

TEST_CASE("sequential and concurrent repetitions give identical reports") {
    const auto seq = scratch("seq");
    const auto par = scratch("par");
    const std::vector<std::string> common{"--config", kDefaultConfig, "--repetitions", "3", "--strategy", "JT-0%",
                                          "--strategy", "JT-100%", "--strategy", "EWC"};
    auto args = [&](const fs::path& out, const char* threads) {
        std::vector<std::string> a{"run", "--out", out.string(), "--threads", threads};
        a.insert(a.end(), common.begin(), common.end());
        return a;
    };
    REQUIRE(cli(args(seq, "1")).code == 0);
    REQUIRE(cli(args(par, "3")).code == 0);
    CHECK(slurp(seq / "report.md") == slurp(par / "report.md"));
    CHECK(slurp(seq / "report.json") == slurp(par / "report.json"));
    CHECK(slurp(seq / "transfer.csv") == slurp(par / "transfer.csv"));
    fs::remove_all(seq);
    fs::remove_all(par);
}
