#include <gtest/gtest.h>

#include "json.hpp"

#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <numbers>
#include <sstream>
#include <sys/wait.h>
#include <unistd.h>

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

const std::string cli = BUBBLETREE_CLI_PATH;
const std::string data = BUBBLETREE_DATA_DIR;

fs::path scratch() {
    static const fs::path dir = [] {
        fs::path d = fs::temp_directory_path() / ("bubbletree_cli_" + std::to_string(::getpid()));
        fs::create_directories(d);
        return d;
    }();
    return dir;
}

std::string slurp(const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    std::ostringstream s;
    s << in.rdbuf();
    return s.str();
}

struct Invocation {
    int code = -1;
    std::string out;
    std::string err;
    json report() const { return json::parse(out); }
};

Invocation run(const std::string& args, const std::string& env = "") {
    static int n = 0;
    const fs::path o = scratch() / ("out" + std::to_string(n)), e = scratch() / ("err" + std::to_string(n));
    ++n;
    const std::string cmd = env + (env.empty() ? "" : " ") + cli + " " + args + " > " + o.string() + " 2> " + e.string();
    const int status = std::system(cmd.c_str());
    return {WIFEXITED(status) ? WEXITSTATUS(status) : -1, slurp(o), slurp(e)};
}

fs::path write_config(const std::string& name, const std::string& text) {
    const fs::path p = scratch() / name;
    std::ofstream(p) << text;
    return p;
}

constexpr double unit_charge = 8.0 * std::numbers::pi * std::numbers::pi;

}  // namespace

// --- instanton ---

TEST(CliInstanton, DefaultUnitBpstCarriesOneCharge) {
    const Invocation r = run("instanton");
    ASSERT_EQ(r.code, 0) << r.err;
    const json j = r.report();
    EXPECT_NEAR(j["energy"].get<double>() / unit_charge, 1.0, 5e-3);
    EXPECT_TRUE(j["pass"].get<bool>());
}

TEST(CliInstanton, ProductConnectionIsAllZeros) {
    const Invocation r = run("instanton --config " + data + "/instanton/flat.json");
    ASSERT_EQ(r.code, 0) << r.err;
    const json j = r.report();
    EXPECT_EQ(j["energy"].get<double>(), 0.0);
    EXPECT_EQ(j["asd_residual"].get<double>(), 0.0);
    EXPECT_EQ(j["moments"]["scale"].get<double>(), 0.0);
}

TEST(CliInstanton, SmallScale) {
    const Invocation r = run("instanton --config " + data + "/instanton/small.json");
    ASSERT_EQ(r.code, 0) << r.err;
    EXPECT_NEAR(r.report()["moments"]["scale"].get<double>(), std::sqrt(2.0) * 0.1, 1e-2 * std::sqrt(2.0) * 0.1);
}

TEST(CliInstanton, ConfigErrorsExitThree) {
    EXPECT_EQ(run("instanton --config " + write_config("bad_key.json", R"({"bpts": {}})").string()).code, 3);
    EXPECT_EQ(run("instanton --config " + write_config("broken.json", "{").string()).code, 3);
    EXPECT_EQ(run("instanton --config " + write_config("neg.json", R"({"bpst": {"lambda": -1}})").string()).code, 3);
    EXPECT_EQ(run("instanton --config /nonexistent/file.json").code, 3);
    EXPECT_EQ(run("instanton --threads 0").code, 3);
    EXPECT_EQ(run("frobnicate").code, 3);
}

TEST(CliInstanton, WritesReportToOut) {
    const fs::path out = scratch() / "inst";
    const Invocation r = run("instanton --out " + out.string());
    ASSERT_EQ(r.code, 0) << r.err;
    EXPECT_EQ(slurp(out / "report.json"), r.out);
}

// --- scan ---

TEST(CliScan, RotationAndSelfDualSlopes) {
    const fs::path out = scratch() / "scan";
    const Invocation r = run("scan --config " + data + "/scan/rotation.json --out " + out.string());
    ASSERT_EQ(r.code, 0) << r.err;
    const json j = r.report();
    EXPECT_NEAR(j["fits"]["rotation"]["slope"].get<double>(), 0.5, 0.15);
    EXPECT_NEAR(j["selfdual_error"]["p=2"]["slope"].get<double>(), 1.0, 0.15);
    const std::string csv = slurp(out / "table.csv");
    EXPECT_EQ(csv.substr(0, csv.find('\n')), "direction,vertex,lambda,norm_X,norm_base");
    EXPECT_EQ(std::count(csv.begin(), csv.end(), '\n'), 4);
}

TEST(CliScan, SingleLambdaGridIsRejected) {
    json cfg = json::parse(slurp(data + "/scan/rotation.json"));
    cfg["lambdas"] = {1e-4};
    const Invocation r = run("scan --config " + write_config("one.json", cfg.dump()).string());
    EXPECT_EQ(r.code, 3);
    EXPECT_NE(r.err.find("need >= 3 samples"), std::string::npos) << r.err;
}

TEST(CliScan, UnknownVertexOrDirection) {
    json cfg = json::parse(slurp(data + "/scan/rotation.json"));
    cfg["vertex"] = "7";
    EXPECT_EQ(run("scan --config " + write_config("v7.json", cfg.dump()).string()).code, 3);
    cfg["vertex"] = "1";
    cfg["directions"] = {"sideways"};
    EXPECT_EQ(run("scan --config " + write_config("side.json", cfg.dump()).string()).code, 3);
}

// --- extract ---

TEST(CliExtract, TwoLevelFamilyRoundTrips) {
    const fs::path out = scratch() / "extract";
    const Invocation r = run("extract --config " + data + "/families/single.json --out " + out.string());
    ASSERT_EQ(r.code, 0) << r.err;
    const json j = r.report();
    EXPECT_TRUE(j["roundtrip"]["isomorphic"].get<bool>());
    EXPECT_EQ(j["vertices"].get<int>(), 2);
    const json ideal = json::parse(slurp(out / "ideal.json"));
    EXPECT_EQ(ideal["nodes"].size(), 2u);
    const std::string csv = slurp(out / "necks.csv");
    EXPECT_EQ(csv.substr(0, csv.find('\n')), "vertex,alpha,neck_energy,ball_energy");
    EXPECT_GT(std::count(csv.begin(), csv.end(), '\n'), 2);
}

TEST(CliExtract, NonDegeneratingFamilyIsOneVertex) {
    const Invocation r = run("extract --config " + data + "/families/constant.json");
    ASSERT_EQ(r.code, 0) << r.err;
    const json j = r.report();
    EXPECT_EQ(j["vertices"].get<int>(), 1);
    EXPECT_EQ(j["ideal"]["nodes"].size(), 1u);
}

TEST(CliExtract, DepthBeyondChargeIsAlgorithmFailure) {
    const Invocation r = run("extract --config " + data + "/families/adversarial_depth.json");
    EXPECT_EQ(r.code, 4);
    EXPECT_NE(r.err.find("depth"), std::string::npos) << r.err;
}

TEST(CliExtract, MissingConfigExitsThree) { EXPECT_EQ(run("extract").code, 3); }

// --- check ---

TEST(CliCheck, DefaultSeedPasses) {
    const Invocation r = run("check");
    ASSERT_EQ(r.code, 0) << r.out << r.err;
    const json j = r.report();
    EXPECT_TRUE(j["pass"].get<bool>());
    EXPECT_GE(j["checks"].size(), 10u);
    for (const auto& c : j["checks"]) EXPECT_TRUE(c["pass"].get<bool>()) << c.dump();
}

TEST(CliCheck, InjectedBadCutoffIsReported) {
    const Invocation r = run("check --inject bad-cutoff");
    EXPECT_EQ(r.code, 2);
    const json j = r.report();
    bool flagged = false;
    for (const auto& c : j["checks"])
        if (c["name"] == "splice.psi_bound") flagged = !c["pass"].get<bool>();
    EXPECT_TRUE(flagged);
}

TEST(CliCheck, ByteIdenticalAcrossThreadCounts) {
    const Invocation a = run("check --seed 42 --threads 1");
    const Invocation b = run("check --seed 42 --threads 4");
    const Invocation c = run("check --seed 42", "BUBBLETREE_THREADS=3");
    ASSERT_EQ(a.code, 0);
    EXPECT_EQ(a.out, b.out);
    EXPECT_EQ(a.out, c.out);
    EXPECT_NE(a.out, run("check --seed 43").out);
}

TEST(CliExtract, ByteIdenticalAcrossThreadCounts) {
    const std::string args = "extract --config " + data + "/families/single.json";
    const Invocation a = run(args + " --threads 1"), b = run(args + " --threads 3");
    ASSERT_EQ(a.code, 0);
    EXPECT_EQ(a.out, b.out);
}
