#include "vplan/common.hpp"
#include "vplan/json_io.hpp"

#include <doctest.h>

#include <array>
#include <cstdio>
#include <filesystem>
#include <sys/wait.h>

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

struct Result {
    int code = -1;
    std::string out;
};

// Runs the CLI with stderr folded into stdout.
Result run(const std::string& args) {
    const std::string cmd = std::string(VPLAN_CLI) + " " + args + " 2>&1";
    Result r;
    FILE* pipe = popen(cmd.c_str(), "r");
    REQUIRE(pipe != nullptr);
    std::array<char, 4096> buf{};
    while (std::fgets(buf.data(), buf.size(), pipe)) r.out += buf.data();
    const int status = pclose(pipe);
    r.code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
    return r;
}

json last_json_line(const std::string& s) {
    const auto end = s.find_last_not_of('\n');
    const auto start = s.rfind('\n', end);
    return json::parse(s.substr(start == std::string::npos ? 0 : start + 1, end + 1 - (start == std::string::npos ? 0 : start + 1)));
}

const std::string kConfig = std::string(VPLAN_SOURCE_DIR) + "/configs/smoke.jsonc";

struct TempDir {
    fs::path path;
    explicit TempDir(const std::string& name) : path(fs::temp_directory_path() / ("vplan_cli_" + name)) {
        fs::remove_all(path);
    }
    ~TempDir() { fs::remove_all(path); }
    std::string str() const { return path.string(); }
};

}  // namespace

TEST_CASE("cli: usage errors exit 1 with a JSON error record") {
    auto r = run("");
    CHECK(r.code == 1);
    CHECK(last_json_line(r.out).at("error") == "usage");
    r = run("train --config /nonexistent.jsonc --stage 1");
    CHECK(r.code == 1);
    CHECK(last_json_line(r.out).at("exit_code") == 1);
    r = run("train --config " + kConfig + " --stage 4");
    CHECK(r.code == 1);
}

TEST_CASE("cli: gen-corpus writes a validated corpus and the resolved config") {
    TempDir dir("gen");
    const auto r = run("gen-corpus --quiet --config " + kConfig + " --out " + dir.str());
    CHECK(r.code == 0);
    for (const char* f : {"config.json", "corpus/world.json", "corpus/train.jsonl", "corpus/test.jsonl", "corpus/corpus.json"}) {
        CHECK(fs::exists(dir.path / f));
    }
    const json meta = vplan::parse_json(vplan::read_file((dir.path / "corpus/corpus.json").string()), "corpus.json");
    CHECK(meta.at("violations") == 0);
    CHECK(meta.at("n_train") == 64);
}

TEST_CASE("cli: staged training, prerequisites, resumability, ATA-off") {
    TempDir dir("train");
    const std::string base = "train --quiet --config " + kConfig + " --seed 1 --out " + dir.str();

    auto r = run(base + " --stage 2");
    CHECK(r.code == 2);
    CHECK(last_json_line(r.out).at("message").get<std::string>().find("missing prerequisite checkpoint") != std::string::npos);

    CHECK(run(base + " --stage 1").code == 0);
    const fs::path ck1 = dir.path / "seed_1" / "stage1.ckpt";
    const auto t1 = fs::last_write_time(ck1);
    CHECK(run(base + " --stage 1").code == 0);
    CHECK(fs::last_write_time(ck1) == t1);

    r = run(base + " --stage 3 --cell mtp_noata");
    CHECK(r.code == 0);
    CHECK_FALSE(fs::exists(dir.path / "seed_1" / "stage2.ckpt"));
    CHECK(fs::exists(dir.path / "seed_1" / "mtp_noata" / "stage3.ckpt"));

    r = run(base + " --stage 3 --cell mtp_ata");
    CHECK(r.code == 2);

    // A stage-1 checkpoint from a different seed has a different key.
    r = run("train --quiet --config " + kConfig + " --seed 2 --stage 2 --in " + ck1.string() + " --out " + dir.str());
    CHECK(r.code == 2);
    CHECK(last_json_line(r.out).at("message").get<std::string>().find("config-hash mismatch") != std::string::npos);

    r = run("eval --quiet --config " + kConfig + " --seed 1 --cell mtp_noata --out " + dir.str());
    CHECK(r.code == 0);
    CHECK(fs::exists(dir.path / "eval.json"));
}

TEST_CASE("cli: teacher-forcing eval scores all ones") {
    TempDir dir("tf");
    const auto r = run("eval --quiet --teacher-forcing --config " + kConfig + " --horizon 3 --horizon 4 --out " + dir.str());
    CHECK(r.code == 0);
    const json j = vplan::parse_json(vplan::read_file((dir.path / "eval_teacher_forcing.json").string()), "eval");
    for (const char* h : {"3", "4"}) {
        const auto& m = j.at("horizons").at(h);
        CHECK(m.at("sr") == 1.0);
        CHECK(m.at("macc") == 1.0);
        CHECK(m.at("miou") == 1.0);
    }
}

TEST_CASE("cli: ablate then report; tampering fails with exit 2") {
    TempDir dir("ablate");
    auto r = run("ablate --quiet --config " + kConfig + " --out " + dir.str());
    CHECK(r.code == 0);
    CHECK(r.out.find("Next-token vs partial vs full multi-token prediction") != std::string::npos);
    CHECK(r.out.find("Auxiliary task augmentation x multi-token prediction") != std::string::npos);
    r = run("report --out " + dir.str());
    CHECK(r.code == 0);
    CHECK(r.out.find("± ") != std::string::npos);

    const std::string metrics = (dir.path / "seed_1" / "ntp_ata" / "metrics.json").string();
    vplan::write_file(metrics, vplan::read_file(metrics) + " ");
    r = run("report --manifest " + (dir.path / "manifest.json").string());
    CHECK(r.code == 2);
    CHECK(last_json_line(r.out).at("message").get<std::string>().find("hash mismatch") != std::string::npos);
}
