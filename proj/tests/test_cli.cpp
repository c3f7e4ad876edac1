#include <doctest.h>

#include <sys/wait.h>

#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>

#include <json.hpp>

#ifndef MKOOP_CLI
#error "MKOOP_CLI must name the command-line binary"
#endif

namespace fs = std::filesystem;

namespace {

struct Run {
    int code = -1;
    std::string out;
};

Run run(const std::string& args) {
    const std::string cmd = std::string(MKOOP_CLI) + " " + args + " 2>/dev/null";
    Run r;
    FILE* pipe = popen(cmd.c_str(), "r");
    REQUIRE(pipe != nullptr);
    char buf[4096];
    std::size_t got = 0;
    while ((got = fread(buf, 1, sizeof buf, pipe)) > 0) r.out.append(buf, got);
    const int status = pclose(pipe);
    r.code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
    return r;
}

std::string slurp(const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    std::ostringstream s;
    s << in.rdbuf();
    return s.str();
}

void write(const fs::path& p, const std::string& text) {
    std::ofstream out(p, std::ios::binary);
    out << text;
}

struct Scratch {
    fs::path dir;
    Scratch() : dir(fs::temp_directory_path() / "mkoop_test_cli") {
        fs::remove_all(dir);
        fs::create_directories(dir);
        write(dir / "data.json", R"({"manipulator": {"n": 2, "topology": "planar"}, "trajectories": 4,
                                    "snapshots": 40, "dt": 0.01, "excitation": {"amplitude": 1.0}})");
        write(dir / "train.json", R"({"epochs": 2, "batch_size": 32, "encoder": {"hidden": [8], "features": 3}})");
    }
    ~Scratch() { fs::remove_all(dir); }
    std::string path(const std::string& name) const { return (dir / name).string(); }
};

}  // namespace

TEST_CASE("help and version exit cleanly") {
    const auto help = run("--help");
    CHECK(help.code == 0);
    CHECK(help.out.find("gen-data") != std::string::npos);
    CHECK(help.out.find("track") != std::string::npos);
    const auto version = run("--version");
    CHECK(version.code == 0);
    CHECK(!version.out.empty());
}

TEST_CASE("usage errors exit with 1") {
    Scratch s;
    CHECK(run("").code == 1);
    CHECK(run("no-such-command").code == 1);
    CHECK(run("gen-data").code == 1);
    CHECK(run("gen-data --config " + s.path("missing.json")).code == 1);
    write(s.dir / "bad.json", R"({"manipulator": {"n": 2}, "trajectories": 1})");
    CHECK(run("gen-data --config " + s.path("bad.json") + " --out " + s.path("bad")).code == 1);
    CHECK(run("train --dataset " + s.path("nowhere") + " --variant proposed --out " + s.path("m.json")).code == 1);
}

TEST_CASE("gen-data is byte-reproducible for a seed") {
    Scratch s;
    REQUIRE(run("gen-data --config " + s.path("data.json") + " --seed 5 --out " + s.path("a")).code == 0);
    REQUIRE(run("gen-data --config " + s.path("data.json") + " --seed 5 --out " + s.path("b")).code == 0);
    REQUIRE(run("gen-data --config " + s.path("data.json") + " --seed 6 --out " + s.path("c")).code == 0);
    int files = 0;
    for (const auto& e : fs::directory_iterator(s.dir / "a")) {
        const auto name = e.path().filename();
        if (name == "run_manifest.json") continue;
        ++files;
        CHECK(slurp(e.path()) == slurp(s.dir / "b" / name));
    }
    CHECK(files >= 5);
    CHECK(slurp(s.dir / "a" / "traj_0000.csv") != slurp(s.dir / "c" / "traj_0000.csv"));
    const auto manifest = nlohmann::json::parse(slurp(s.dir / "a" / "run_manifest.json"));
    CHECK(manifest["seed"] == 5);
    CHECK(manifest.contains("config_hash"));
}

TEST_CASE("train, evaluate and track end to end") {
    Scratch s;
    REQUIRE(run("gen-data --config " + s.path("data.json") + " --out " + s.path("ds")).code == 0);
    const auto trained = run("train --quiet --config " + s.path("train.json") + " --dataset " + s.path("ds") +
                             " --variant proposed --out " + s.path("model.json"));
    REQUIRE(trained.code == 0);
    const auto model = nlohmann::json::parse(slurp(s.dir / "model.json"));
    CHECK(model["variant"] == "proposed");
    CHECK(fs::exists(s.dir / "model.manifest.json"));

    const auto eval = run("eval-pred --model " + s.path("model.json") + " --dataset " + s.path("ds") +
                          " --window 10 --out " + s.path("eval"));
    CHECK(eval.code == 0);
    CHECK(nlohmann::json::parse(slurp(s.dir / "eval" / "eval.json"))["error"].is_number());

    write(s.dir / "track.json", R"({"manipulator": {"n": 2, "topology": "planar"},
                                    "path": {"kind": "petal", "center": [0.4, 0.1, 0.0],
                                             "u_axis": [1, 0, 0], "v_axis": [0, 1, 0], "petal_amplitude": 0.05}})");
    const auto tracked = run("track --model " + s.path("model.json") + " --config " + s.path("track.json") +
                             " --duration 0.5 --geso both --out " + s.path("trk"));
    CHECK(tracked.code == 0);
    CHECK(fs::exists(s.dir / "trk" / "report.csv"));
    CHECK(fs::exists(s.dir / "trk" / "log_petal_d0_geso-on.csv"));
    CHECK(fs::exists(s.dir / "trk" / "log_petal_d0_geso-off.csv"));

    const auto merged = run("report --input " + s.path("trk") + " --out " + s.path("merged"));
    CHECK(merged.code == 0);
    CHECK(fs::exists(s.dir / "merged" / "report.csv"));
    CHECK(run("report --input " + s.path("trk") + " --input " + s.path("eval") + " --out " + s.path("mix")).code != 0);
}

TEST_CASE("runtime failures exit with 2") {
    Scratch s;
    write(s.dir / "model.json", R"({"format": "mkoop-koopman-model", "variant": "proposed"})");
    write(s.dir / "track.json", R"({"manipulator": {"n": 2, "topology": "planar"}})");
    const auto r = run("track --model " + s.path("model.json") + " --config " + s.path("track.json") + " --out " +
                       s.path("trk"));
    CHECK(r.code != 0);
    // A dataset directory that exists but is not a dataset is a runtime failure.
    fs::create_directories(s.dir / "empty");
    CHECK(run("train --dataset " + s.path("empty") + " --variant proposed --out " + s.path("m.json")).code == 2);
}
