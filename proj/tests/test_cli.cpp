#include <catch2/catch_amalgamated.hpp>

#include <sys/wait.h>

#include <filesystem>
#include <fstream>
#include <sstream>

#include "slode/cli.hpp"

using namespace slode;
namespace fs = std::filesystem;

namespace {

struct Outcome {
    int code;
    std::string out, err;
};

Outcome call(std::vector<std::string> args) {
    args.insert(args.begin(), "slode");
    std::vector<const char*> argv;
    for (const auto& a : args) argv.push_back(a.c_str());
    std::ostringstream out, err;
    const int code = cli::run(static_cast<int>(argv.size()), argv.data(), out, err);
    return {code, out.str(), err.str()};
}

fs::path scratch(const std::string& name) {
    const fs::path p = fs::temp_directory_path() / ("slode_cli_" + name);
    fs::remove_all(p);
    return p;
}

std::string read_text(const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    return {std::istreambuf_iterator<char>(in), {}};
}

std::vector<std::string> lines_of(const fs::path& p) {
    std::vector<std::string> v;
    std::ifstream in(p);
    for (std::string l; std::getline(in, l);) v.push_back(l);
    return v;
}

void write_text(const fs::path& p, const std::string& s) { std::ofstream(p, std::ios::binary) << s; }

// A model small enough to train in a few seconds.
const char* kTinyConfig = "# tiny model\n"
                          "d_u = 3\n"
                          "d_eps = 2\n"
                          "state_dim = 2\n"
                          "hidden = 6\n"
                          "conv_channels = 4\n"
                          "batch_size = 8\n"
                          "S_qu = 4\n"
                          "n_z = 4\n"
                          "n_prior = 6\n"
                          "substeps = 2\n";

// Generates data and a trained checkpoint once for the whole file.
struct Fixture {
    fs::path root = scratch("fixture");
    fs::path data = root / "data", config = root / "tiny.cfg", model = root / "model.ck";

    Fixture() {
        fs::create_directories(root);
        write_text(config, kTinyConfig);
        auto g = call({"--seed", "4", "gen-data", "--out", data.string(), "--n", "30", "--n-times", "12", "--t-max", "4"});
        REQUIRE(g.code == 0);
        auto t = call({"--config", config.string(), "train", "--data", data.string(), "--out", model.string(), "--epochs",
                       "2"});
        REQUIRE(t.code == 0);
    }
};

const Fixture& fixture() {
    static Fixture f;
    return f;
}

} // namespace

TEST_CASE("usage errors exit with 2") {
    CHECK(call({}).code == cli::kUsage);
    CHECK(call({"frobnicate"}).code == cli::kUsage);
    CHECK(call({"gen-data"}).code == cli::kUsage); // --out is required
    CHECK(call({"gen-data", "--out", scratch("x").string(), "--noise", "laplace"}).code == cli::kUsage);
    CHECK(call({"gen-data", "--out", scratch("x").string(), "--n", "5"}).code == cli::kUsage);
    CHECK(call({"gen-data", "--out", scratch("x").string(), "--n", "0"}).code == cli::kUsage);
    CHECK(call({"gen-data", "--out", scratch("x").string(), "--noise-scale", "-1"}).code == cli::kUsage);
    const auto h = call({"--help"});
    CHECK(h.code == 0);
    CHECK(h.out.find("gen-data") != std::string::npos);
}

TEST_CASE("config files: unknown keys are rejected, flags override") {
    const auto dir = scratch("config");
    fs::create_directories(dir);
    write_text(dir / "bad.cfg", "n_series = 20\nwarp_factor = 9\n");
    const auto bad = call({"--config", (dir / "bad.cfg").string(), "gen-data", "--out", (dir / "d").string()});
    CHECK(bad.code == cli::kUsage);
    CHECK(bad.err.find("warp_factor") != std::string::npos);
    CHECK(bad.err.find(":2") != std::string::npos);

    write_text(dir / "good.cfg", "n_series = 20\nn_times = 8\nseed = 9\n");
    REQUIRE(call({"--config", (dir / "good.cfg").string(), "gen-data", "--out", (dir / "a").string()}).code == 0);
    Dataset a = load_dataset(dir / "a");
    CHECK(a.config.n_series == 20);
    CHECK(a.config.n_times == 8);
    CHECK(a.config.seed == 9);

    REQUIRE(call({"--config", (dir / "good.cfg").string(), "--seed", "10", "gen-data", "--out", (dir / "b").string(),
                  "--n", "24"})
                .code == 0);
    Dataset b = load_dataset(dir / "b");
    CHECK(b.config.n_series == 24);
    CHECK(b.config.seed == 10);

    CHECK(call({"--config", (dir / "absent.cfg").string(), "gen-data", "--out", (dir / "c").string()}).code == cli::kIo);
    fs::remove_all(dir);
}

TEST_CASE("gen-data is idempotent") {
    const auto a = scratch("gen_a"), b = scratch("gen_b");
    for (const auto& d : {a, b}) {
        REQUIRE(call({"--seed", "3", "gen-data", "--out", d.string(), "--n", "20", "--noise", "asymmetric"}).code == 0);
    }
    for (const char* f : {"manifest.txt", "train_inputs.csv", "train_observations.csv", "val_inputs.csv",
                          "val_observations.csv", "test_inputs.csv", "test_observations.csv"}) {
        CHECK(read_text(a / f) == read_text(b / f));
        CHECK_FALSE(read_text(a / f).empty());
    }
    CHECK(load_dataset(a).config.noise_kind == NoiseKind::asymmetric);
    fs::remove_all(a);
    fs::remove_all(b);
}

TEST_CASE("train writes a checkpoint and a per-epoch log") {
    const auto& f = fixture();
    REQUIRE(fs::exists(f.model));
    const auto log = lines_of(f.model.string() + ".log");
    REQUIRE(log.size() == 3);
    CHECK(log[0] == "emission,epoch,train_elbo,val_elbo,wall_seconds");
    CHECK(log[1].rfind("ald,1,", 0) == 0);
    CHECK(log[2].rfind("ald,2,", 0) == 0);
    Checkpoint ck = load_checkpoint(f.model);
    CHECK(ck.config.model.hidden == 6);
    CHECK(ck.config.model.n_times == 12);
    CHECK(ck.t_max == 4.0);

    // a retrain reproduces the checkpoint byte for byte
    const auto again = f.root / "again.ck";
    REQUIRE(call({"--config", f.config.string(), "train", "--data", f.data.string(), "--out", again.string(), "--epochs",
                  "2", "--log", (f.root / "again.log").string()})
                .code == 0);
    CHECK(read_text(again) == read_text(f.model));
}

TEST_CASE("train error exits") {
    const auto& f = fixture();
    CHECK(call({"train", "--data", scratch("nowhere").string(), "--out", (f.root / "x.ck").string()}).code == cli::kIo);
    CHECK(call({"--config", f.config.string(), "train", "--data", f.data.string(), "--out", (f.root / "x.ck").string(),
                "--emission", "poisson"})
              .code == cli::kUsage);

    const auto cfg = f.root / "fragile.cfg";
    write_text(cfg, std::string(kTinyConfig) + "max_steps = 3\n");
    const auto r = call({"--config", cfg.string(), "train", "--data", f.data.string(), "--out",
                         (f.root / "aborted.ck").string(), "--epochs", "2"});
    CHECK(r.code == cli::kAborted);
    CHECK_FALSE(fs::exists(f.root / "aborted.ck"));
}

TEST_CASE("eval writes the metrics report") {
    const auto& f = fixture();
    const auto a = f.root / "metrics_a.txt", b = f.root / "metrics_b.txt";
    const auto r = call({"eval", "--model", f.model.string(), "--data", f.data.string(), "--out", a.string()});
    REQUIRE(r.code == 0);
    CHECK(r.out.find("u_accuracy") != std::string::npos);
    REQUIRE(call({"eval", "--model", f.model.string(), "--data", f.data.string(), "--out", b.string()}).code == 0);
    CHECK(read_text(a) == read_text(b));
    for (const char* key : {"u_accuracy: ", "l1_posterior: ", "l1_prior: ", "elbo_mean: ", "coverage_95: "}) {
        CHECK(read_text(a).find(key) != std::string::npos);
    }
    CHECK(call({"eval", "--model", f.model.string(), "--data", f.data.string(), "--split", "val", "--out", a.string()})
              .code == 0);
    CHECK(call({"eval", "--model", f.model.string(), "--data", f.data.string(), "--split", "holdout", "--out",
                a.string()})
              .code == cli::kUsage);
}

TEST_CASE("incompatible data exits with 5") {
    const auto& f = fixture();
    const auto other = f.root / "other_grid";
    REQUIRE(call({"gen-data", "--out", other.string(), "--n", "20", "--n-times", "10", "--t-max", "4"}).code == 0);
    const auto r = call({"eval", "--model", f.model.string(), "--data", other.string(), "--out",
                         (f.root / "m.txt").string()});
    CHECK(r.code == cli::kIncompatible);
    CHECK(r.err.find("time points") != std::string::npos);

    const auto stretched = f.root / "other_window";
    REQUIRE(call({"gen-data", "--out", stretched.string(), "--n", "20", "--n-times", "12", "--t-max", "6"}).code == 0);
    CHECK(call({"infer", "--model", f.model.string(), "--data", stretched.string(), "--out", (f.root / "p.csv").string()})
              .code == cli::kIncompatible);
}

TEST_CASE("corrupt checkpoints exit with 3") {
    const auto& f = fixture();
    const auto bad = f.root / "bad.ck";
    const std::string good = read_text(f.model);
    write_text(bad, good.substr(0, good.size() / 2));
    const auto r = call({"eval", "--model", bad.string(), "--data", f.data.string(), "--out", (f.root / "m.txt").string()});
    CHECK(r.code == cli::kIo);
    CHECK(r.err.find("truncated") != std::string::npos);
    CHECK(call({"generate", "--model", (f.root / "absent.ck").string(), "--u", "1,1", "--out",
                (f.root / "g.csv").string()})
              .code == cli::kIo);
}

TEST_CASE("infer from a dataset split and from an observations file") {
    const auto& f = fixture();
    const auto out = f.root / "pred.csv";
    const auto r = call({"infer", "--model", f.model.string(), "--data", f.data.string(), "--out", out.string()});
    REQUIRE(r.code == 0);
    CHECK(r.out.find("accuracy") != std::string::npos);
    const auto rows = lines_of(out);
    const Dataset d = load_dataset(f.data);
    REQUIRE(rows.size() == d.splits.test.size() + 1);
    CHECK(rows[0] == "series_id,label,p0,p1,p2,p3,u1,u2");
    for (std::size_t i = 1; i < rows.size(); ++i) {
        const auto fields = split_fields(rows[i]);
        REQUIRE(fields.size() == 8);
        CHECK(std::stoi(fields[0]) == d.splits.test[i - 1].series_id);
        double sum = 0.0;
        for (int c = 0; c < 4; ++c) sum += std::stod(fields[2 + c]);
        CHECK(std::abs(sum - 1.0) < 1e-9);
    }

    // the observations file alone gives the same answers
    const auto out2 = f.root / "pred_obs.csv";
    const auto r2 = call({"infer", "--model", f.model.string(), "--observations",
                         (f.data / "test_observations.csv").string(), "--out", out2.string()});
    REQUIRE(r2.code == 0);
    CHECK(r2.out.find("accuracy") == std::string::npos);
    CHECK(read_text(out2) == read_text(out));

    CHECK(call({"infer", "--model", f.model.string(), "--out", out2.string()}).code == cli::kUsage);
    CHECK(call({"infer", "--model", f.model.string(), "--data", f.data.string(), "--observations",
                (f.data / "test_observations.csv").string(), "--out", out2.string()})
              .code == cli::kUsage);
    write_text(f.root / "garbled.csv", "series_id,time,y1,y2,y3\n1,0,abc,0,0\n");
    CHECK(call({"infer", "--model", f.model.string(), "--observations", (f.root / "garbled.csv").string(), "--out",
                out2.string()})
              .code == cli::kIo);
}

TEST_CASE("generate writes a banded trajectory summary") {
    const auto& f = fixture();
    const auto out = f.root / "gen.csv";
    const auto r = call({"generate", "--model", f.model.string(), "--u", "0.5,-0.3", "--samples", "20", "--out",
                         out.string()});
    REQUIRE(r.code == 0);
    CHECK(r.out.find("class 1") != std::string::npos);
    const auto rows = lines_of(out);
    REQUIRE(rows.size() == 3 * 12 + 1);
    CHECK(rows[0] == "time,channel,median,lower,upper");
    for (std::size_t i = 1; i < rows.size(); ++i) {
        const auto v = split_fields(rows[i]);
        REQUIRE(v.size() == 5);
        CHECK(std::stod(v[3]) <= std::stod(v[2]));
        CHECK(std::stod(v[2]) <= std::stod(v[4]));
    }
    const auto again = f.root / "gen2.csv";
    REQUIRE(call({"generate", "--model", f.model.string(), "--u", "0.5,-0.3", "--samples", "20", "--out",
                  again.string()})
                .code == 0);
    CHECK(read_text(again) == read_text(out));

    CHECK(call({"generate", "--model", f.model.string(), "--u", "0.5", "--out", out.string()}).code == cli::kUsage);
    CHECK(call({"generate", "--model", f.model.string(), "--u", "a,b", "--out", out.string()}).code == cli::kUsage);
    CHECK(call({"generate", "--model", f.model.string(), "--u", "1,1", "--samples", "0", "--out", out.string()}).code ==
          cli::kUsage);
}

TEST_CASE("the installed binary reports exit codes") {
    auto status = [](const std::string& args) {
        const int s = std::system((std::string(SLODE_BIN) + " " + args + " >/dev/null 2>&1").c_str());
        return WIFEXITED(s) ? WEXITSTATUS(s) : -1;
    };
    CHECK(status("--help") == 0);
    CHECK(status("") == cli::kUsage);
    CHECK(status("gen-data") == cli::kUsage);
    CHECK(status("eval --model /nonexistent.ck --data /nonexistent --out /dev/null") == cli::kIo);
    const auto d = scratch("bin_data");
    CHECK(status("gen-data --out " + d.string() + " --n 12 --n-times 6") == 0);
    CHECK(fs::exists(d / "manifest.txt"));
    fs::remove_all(d);
}
