#include "support.hpp"

#include "ikd/archive.hpp"
#include "ikd/binary_io.hpp"
#include "ikd/checksum.hpp"
#include "ikd/experiment.hpp"

#include <gtest/gtest.h>

#include <cstdlib>
#include <fstream>
#include <set>
#include <sstream>
#include <sys/wait.h>

using namespace ikd;
using namespace ikd::cli;
using nlohmann::json;

namespace {

json base_doc(const fs::path& data_dir) {
    return {{"seed", 3},
            {"dataset",
             {{"train", (data_dir / "train.ikdd").string()},
              {"test", (data_dir / "test.ikdd").string()},
              {"train_per_class", 60},
              {"test_per_class", 20},
              {"synthetic", {{"size", 12}, {"classes", 4}, {"max_shift", 1}}}}},
            {"models", {{"epochs", 12}, {"accuracy_floor", 0.8}}},
            {"eval", {{"samples", 12}}},
            {"attack", {{"steps", 3}}}};
}

fs::path write_config(const fs::path& dir, const json& doc, const std::string& name = "config.json") {
    const auto p = dir / name;
    std::ofstream(p) << doc.dump(2);
    return p;
}

struct Outcome {
    int code;
    std::string log;
    std::string err;
};

Outcome run(const std::string& command, const fs::path& config, const fs::path& out, bool overwrite = false,
            std::optional<Index> jobs = std::nullopt) {
    RunOptions o;
    o.config = config;
    o.out = out;
    o.overwrite = overwrite;
    o.jobs = jobs;
    std::ostringstream log, err;
    const int code = run_command(command, o, log, err);
    return {code, log.str(), err.str()};
}

Outcome verify(const fs::path& config, const fs::path& out, bool replay) {
    RunOptions o;
    o.config = config;
    o.out = out;
    o.replay = replay;
    std::ostringstream log, err;
    const int code = run_command("verify", o, log, err);
    return {code, log.str(), err.str()};
}

std::string slurp(const fs::path& p) { return io::read_file(p); }

std::vector<std::string> lines(const std::string& text) {
    std::vector<std::string> out;
    std::istringstream in(text);
    for (std::string l; std::getline(in, l);) out.push_back(l);
    return out;
}

/// Datasets plus one trained zoo shared by the whole binary.
struct Zoo {
    test::TempDir dir{"cli-zoo"};
    fs::path config;
    fs::path manifest;
    Zoo() {
        fs::create_directories(dir.path() / "data");
        config = write_config(dir.path(), base_doc(dir.path() / "data"));
        const auto made = run("make-dataset", config, dir.path() / "zoo");
        if (made.code != 0) throw std::runtime_error(made.err);
        const auto trained = run("train", config, dir.path() / "zoo");
        if (trained.code != 0) throw std::runtime_error(trained.err);
        manifest = dir.path() / "zoo" / "models" / "manifest.json";
    }
};

const Zoo& zoo() {
    static const Zoo z;
    return z;
}

/// Config that loads the shared zoo.
json load_doc() {
    auto doc = base_doc(zoo().dir.path() / "data");
    doc["models"] = {{"mode", "load"}, {"manifest", zoo().manifest.string()}};
    return doc;
}

int shell(const std::string& args) {
    const int status = std::system((std::string(IKD_CLI_PATH) + " " + args + " >/dev/null 2>&1").c_str());
    return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

}  // namespace

TEST(Config, UnknownKeyIsRejected) {
    test::TempDir d("cfg");
    auto doc = base_doc(d.path());
    doc["attack"]["epsilonn"] = 0.1;
    const auto r = run("train", write_config(d.path(), doc), d.path() / "out");
    EXPECT_EQ(r.code, kExitValidation);
    EXPECT_NE(r.err.find("epsilonn"), std::string::npos) << r.err;
    EXPECT_FALSE(fs::exists(d.path() / "out" / "models"));
}

TEST(Config, WrongTypeIsRejected) {
    test::TempDir d("cfg");
    auto doc = base_doc(d.path());
    doc["attack"]["steps"] = "ten";
    EXPECT_EQ(run("attack", write_config(d.path(), doc), d.path() / "out").code, kExitValidation);
    doc = base_doc(d.path());
    doc["ikd"] = {{"kind", "hinge"}};
    EXPECT_EQ(run("attack", write_config(d.path(), doc), d.path() / "out").code, kExitValidation);
    doc = base_doc(d.path());
    doc["attack"]["ti_kernel_len"] = 4;
    EXPECT_EQ(run("attack", write_config(d.path(), doc), d.path() / "out").code, kExitValidation);
}

TEST(Config, EmptyMethodListWritesNothing) {
    test::TempDir d("cfg");
    auto doc = load_doc();
    doc["eval"]["methods"] = json::array();
    const auto out = d.path() / "out";
    const auto r = run("attack", write_config(d.path(), doc), out);
    EXPECT_EQ(r.code, kExitValidation);
    EXPECT_FALSE(fs::exists(out));
}

TEST(Config, PixelLevelsAndBothFormsConflict) {
    json doc = {{"attack", {{"epsilon_255", 8}, {"alpha_255", 1}}}};
    const auto c = parse_config(doc, "/");
    EXPECT_DOUBLE_EQ(c.attack.epsilon, 8.0 / 255);
    EXPECT_DOUBLE_EQ(c.attack.alpha, 1.0 / 255);
    doc["attack"]["epsilon"] = 0.1;
    EXPECT_THROW(parse_config(doc, "/"), ValidationError);
}

TEST(Config, HashIgnoresOutputAndJobs) {
    const auto a = parse_config({{"output", "a"}, {"jobs", 1}}, "/x");
    const auto b = parse_config({{"output", "b"}, {"jobs", 8}}, "/x");
    const auto c = parse_config(json::object({{"seed", 1}}), "/x");
    EXPECT_EQ(a.hash(), b.hash());
    EXPECT_NE(a.hash(), c.hash());
    EXPECT_EQ(parse_config(json::object({{"dataset", {{"test", "t.ikdd"}}}}), "/base").test_set, fs::path("/base/t.ikdd"));
}

TEST(Train, MissingDatasetFailsBeforeTraining) {
    test::TempDir d("train");
    const auto r = run("train", write_config(d.path(), base_doc(d.path() / "nowhere")), d.path() / "out");
    EXPECT_EQ(r.code, kExitValidation);
    EXPECT_NE(r.err.find("not found"), std::string::npos) << r.err;
    EXPECT_FALSE(fs::exists(d.path() / "out" / "models"));
}

TEST(Train, RerunGivesIdenticalWeights) {
    test::TempDir d("train");
    const auto r = run("train", zoo().config, d.path() / "again", false, 3);
    ASSERT_EQ(r.code, 0) << r.err;
    const auto first = json::parse(slurp(zoo().manifest));
    const auto second = json::parse(slurp(d.path() / "again" / "models" / "manifest.json"));
    EXPECT_EQ(first, second);
    std::set<std::string> ids, sums;
    for (const auto& m : first["models"]) {
        ids.insert(m["id"].get<std::string>());
        sums.insert(m["checksum"].get<std::string>());
        EXPECT_GE(m["test_accuracy"].get<double>(), 0.8);
    }
    EXPECT_GE(ids.size(), 5u);
    EXPECT_EQ(sums.size(), ids.size());
}

TEST(Train, AccuracyFloorFailureNamesModelAndWritesNothing) {
    test::TempDir d("train");
    auto doc = base_doc(zoo().dir.path() / "data");
    doc["models"] = {{"epochs", 1}, {"learning_rate", 1e-7}, {"accuracy_floor", 0.95}};
    const auto r = run("train", write_config(d.path(), doc), d.path() / "out");
    EXPECT_EQ(r.code, kExitRuntime);
    EXPECT_NE(r.err.find("model '"), std::string::npos) << r.err;
    EXPECT_FALSE(fs::exists(d.path() / "out" / "models" / "manifest.json"));
}

TEST(Archive, RoundTripAndCorruption) {
    const auto& world = test::small_world();
    const std::vector<data::LabeledSample> samples(world.test_samples.begin(), world.test_samples.begin() + 5);
    attack::AttackConfig cfg;
    cfg.steps = 2;
    const auto set = eval::generate(world.models.at("cnn_s"), samples, {}, cfg, 1, true, 2);
    const auto a = archive::from_set(set, samples, 0xabcdef);
    const auto bytes = archive::encode(a);
    auto back = archive::decode(bytes);
    back.method = "MIFGSM";
    EXPECT_EQ(back.config_hash, 0xabcdefu);
    EXPECT_EQ(back.labels, a.labels);
    EXPECT_EQ(back.pixels, a.pixels);
    EXPECT_EQ(back.diversity.pairs, a.diversity.pairs);
    EXPECT_EQ(archive::encode(back), bytes);
    const auto images = archive::to_set(back, {}).images;
    for (std::size_t i = 0; i < images.size(); ++i) EXPECT_TRUE(bitwise_equal(images[i], set.images[i]));

    EXPECT_THROW(archive::decode(bytes.substr(0, bytes.size() - 3)), io::CorruptFile);
    auto flipped = bytes;
    flipped[40] ^= 0x10;
    EXPECT_THROW(archive::decode(flipped), io::CorruptFile);
    auto magic = bytes;
    magic[0] = 'X';
    EXPECT_THROW(archive::decode(magic), io::CorruptFile);
}

TEST(Archive, ZeroGammaIsByteIdentical) {
    const auto& world = test::small_world();
    const std::vector<data::LabeledSample> samples(world.test_samples.begin(), world.test_samples.begin() + 6);
    attack::AttackConfig cfg;
    cfg.steps = 3;
    for (auto m : attack::kAllMethods) {
        const auto base = eval::generate(world.models.at("mlp_s"), samples, {m, {}}, cfg, 2, true, 1);
        const auto twin =
            eval::generate(world.models.at("mlp_s"), samples, {m, {losses::SoftKind::KL, 0.0}}, cfg, 2, true, 1);
        EXPECT_EQ(archive::encode(archive::from_set(base, samples, 1)),
                  archive::encode(archive::from_set(twin, samples, 1)))
            << attack::to_string(m);
    }
}

TEST(Archive, BudgetScanFlagsTamperedImages) {
    const auto& world = test::small_world();
    const std::vector<data::LabeledSample> samples(world.test_samples.begin(), world.test_samples.begin() + 3);
    attack::AttackConfig cfg;
    cfg.steps = 4;
    auto a = archive::from_set(eval::generate(world.models.at("cnn_s"), samples, {}, cfg, 1, true, 1), samples, 0);
    const auto clean = archive::scan_budget(a, samples, cfg.epsilon);
    EXPECT_EQ(clean.violations, 0);
    EXPECT_LE(clean.max_linf, cfg.epsilon + archive::kQuantizationSlack);
    auto& px = a.pixels[1][10];
    px = px > 128 ? 0 : 255;
    EXPECT_EQ(archive::scan_budget(a, samples, cfg.epsilon).violations, 1);
}

TEST(Archive, StemJoinsSurrogateAndMethod) { EXPECT_EQ(archive::archive_stem("cnn_s", "MIFGSM-IKD"), "cnn_s__MIFGSM-IKD"); }

TEST(Pipeline, SingleCellCsvCarriesStarAndEmptyAverage) {
    test::TempDir d("pipe");
    auto doc = load_doc();
    doc["eval"]["surrogates"] = {"cnn_s"};
    doc["eval"]["targets"] = {"cnn_s"};
    const auto cfg = write_config(d.path(), doc);
    ASSERT_EQ(run("attack", cfg, d.path() / "out").code, 0);
    const auto r = run("eval", cfg, d.path() / "out");
    ASSERT_EQ(r.code, 0) << r.err;
    const auto csv = lines(slurp(d.path() / "out" / "eval" / "report_cnn_s.csv"));
    ASSERT_EQ(csv.size(), 4u);
    EXPECT_EQ(csv[0].rfind("# ikd ", 0), 0u);
    EXPECT_EQ(csv[1], "method,cnn_s,AVG");
    for (std::size_t i = 2; i < 4; ++i) {
        EXPECT_NE(csv[i].find("★"), std::string::npos);
        EXPECT_EQ(csv[i].back(), ',');
    }
}

TEST(Pipeline, ColumnsFollowConfiguredTargetOrder) {
    test::TempDir d("pipe");
    auto doc = load_doc();
    doc["eval"]["surrogates"] = {"mlp_s"};
    doc["eval"]["targets"] = {"mlp_s", "cnn_w", "cnn_s"};
    doc["eval"]["methods"] = {"MIFGSM"};
    const auto cfg = write_config(d.path(), doc);
    ASSERT_EQ(run("attack", cfg, d.path() / "out").code, 0);
    ASSERT_EQ(run("eval", cfg, d.path() / "out").code, 0);
    const auto csv = lines(slurp(d.path() / "out" / "eval" / "report_mlp_s.csv"));
    EXPECT_EQ(csv[1], "method,mlp_s,cnn_w,cnn_s,AVG");
    const auto report = json::parse(slurp(d.path() / "out" / "eval" / "report.json"));
    EXPECT_EQ(report["targets"], json({"mlp_s", "cnn_w", "cnn_s"}));
    EXPECT_TRUE(report["rows"][0]["cells"][0]["white_box"].get<bool>());
}

TEST(Pipeline, EvalNeedsArchivesFromTheSameConfig) {
    test::TempDir d("pipe");
    auto doc = load_doc();
    doc["eval"]["surrogates"] = {"cnn_s"};
    doc["eval"]["methods"] = {"MIFGSM"};
    const auto cfg = write_config(d.path(), doc);
    EXPECT_EQ(run("eval", cfg, d.path() / "out").code, kExitValidation);
    ASSERT_EQ(run("attack", cfg, d.path() / "out").code, 0);
    doc["seed"] = 4;
    const auto other = write_config(d.path(), doc, "other.json");
    const auto r = run("eval", other, d.path() / "out");
    EXPECT_EQ(r.code, kExitValidation);
    EXPECT_NE(r.err.find("config"), std::string::npos);
}

TEST(Pipeline, RerunIsByteIdenticalAndThreadIndependent) {
    test::TempDir d("pipe");
    auto doc = load_doc();
    doc["eval"]["surrogates"] = {"cnn_dw", "mlp_d"};
    doc["eval"]["methods"] = {"DIFGSM", "VMIFGSM-IKD"};
    const auto cfg = write_config(d.path(), doc);
    for (const auto& [name, jobs] : std::vector<std::pair<std::string, Index>>{{"a", 1}, {"b", 4}}) {
        ASSERT_EQ(run("attack", cfg, d.path() / name, false, jobs).code, 0);
        ASSERT_EQ(run("eval", cfg, d.path() / name, false, jobs).code, 0);
    }
    Index compared = 0;
    for (const auto& e : fs::recursive_directory_iterator(d.path() / "a")) {
        if (!e.is_regular_file() || e.path().filename() == "run.log") continue;
        const auto twin = d.path() / "b" / fs::relative(e.path(), d.path() / "a");
        EXPECT_EQ(slurp(e.path()), slurp(twin)) << twin;
        ++compared;
    }
    // 8 archive files, 4 report files, the ledger.
    EXPECT_EQ(compared, 13);
}

TEST(Pipeline, ExistingOutputsNeedOverwrite) {
    test::TempDir d("pipe");
    auto doc = load_doc();
    doc["eval"]["surrogates"] = {"cnn_s"};
    doc["eval"]["methods"] = {"MIFGSM"};
    const auto cfg = write_config(d.path(), doc);
    ASSERT_EQ(run("attack", cfg, d.path() / "out").code, 0);
    const auto again = run("attack", cfg, d.path() / "out");
    EXPECT_EQ(again.code, kExitValidation);
    EXPECT_NE(again.err.find("--overwrite"), std::string::npos);
    EXPECT_EQ(run("attack", cfg, d.path() / "out", true).code, 0);
}

TEST(Pipeline, SingletonGammaSweep) {
    test::TempDir d("pipe");
    auto doc = load_doc();
    doc["eval"]["surrogates"] = {"cnn_s", "mlp_s"};
    doc["eval"]["methods"] = {"MIFGSM", "MIFGSM-IKD"};
    doc["sweep"] = {{"kind", "gamma"}, {"gammas", {0.5}}};
    const auto cfg = write_config(d.path(), doc);
    const auto r = run("sweep", cfg, d.path() / "out");
    ASSERT_EQ(r.code, 0) << r.err;
    const auto series = lines(slurp(d.path() / "out" / "sweep" / "series.csv"));
    ASSERT_EQ(series.size(), 4u);
    EXPECT_EQ(series[1], "x,surrogate,method,black_box_avg,white_box_asr");
    EXPECT_EQ(series[2].rfind("0.5,cnn_s,MIFGSM-IKD,", 0), 0u);
    EXPECT_TRUE(fs::exists(d.path() / "out" / "sweep" / "gamma_0.5" / "report.json"));
    EXPECT_EQ(json::parse(slurp(d.path() / "out" / "sweep" / "summary.json"))["points"], 1);
}

TEST(Pipeline, SoftKindSweepHasThreePoints) {
    test::TempDir d("pipe");
    auto doc = load_doc();
    doc["eval"]["surrogates"] = {"cnn_s"};
    doc["eval"]["methods"] = {"MIFGSM"};
    doc["sweep"] = {{"kind", "kind"}};
    const auto cfg = write_config(d.path(), doc);
    ASSERT_EQ(run("sweep", cfg, d.path() / "out").code, 0);
    for (const char* k : {"kind_KL", "kind_CE", "kind_MSE"}) {
        EXPECT_TRUE(fs::exists(d.path() / "out" / "sweep" / k / "report_cnn_s.csv")) << k;
    }
}

TEST(Verify, DetectsTamperingAndReplays) {
    test::TempDir d("verify");
    auto doc = load_doc();
    doc["eval"]["surrogates"] = {"cnn_s"};
    doc["eval"]["methods"] = {"MIFGSM-IKD", "TIFGSM"};
    doc["sweep"] = {{"gammas", {0.0, 10.0}}};
    const auto cfg = write_config(d.path(), doc);
    const auto out = d.path() / "out";
    for (const char* c : {"attack", "eval", "sweep"}) ASSERT_EQ(run(c, cfg, out).code, 0) << c;
    EXPECT_EQ(verify(cfg, out, false).code, 0);
    const auto replayed = verify(cfg, out, true);
    EXPECT_EQ(replayed.code, 0) << replayed.err;
    EXPECT_NE(replayed.log.find("byte for byte"), std::string::npos);

    std::ofstream(out / "eval" / "report.md", std::ios::app) << "edited\n";
    const auto tampered = verify(cfg, out, false);
    EXPECT_EQ(tampered.code, kExitRuntime);
    EXPECT_NE(tampered.err.find("eval/report.md"), std::string::npos);
}

TEST(Verify, NeedsLedger) {
    test::TempDir d("verify");
    const auto cfg = write_config(d.path(), load_doc());
    EXPECT_EQ(verify(cfg, d.path() / "empty", false).code, kExitValidation);
}

TEST(Binary, ExitCodes) {
    EXPECT_EQ(shell("--help"), 0);
    EXPECT_EQ(shell("attack"), 1);
    EXPECT_EQ(shell("attack --config /nonexistent/config.json"), 1);
    EXPECT_EQ(shell("frobnicate"), 1);
    test::TempDir d("bin");
    auto doc = load_doc();
    doc["eval"]["surrogates"] = {"cnn_s"};
    doc["eval"]["targets"] = {"cnn_s"};
    doc["eval"]["methods"] = {"MIFGSM"};
    const auto cfg = write_config(d.path(), doc);
    const auto args = "--config " + cfg.string() + " --out " + (d.path() / "out").string();
    EXPECT_EQ(shell("attack " + args + " --jobs 2 --seed 9"), 0);
    EXPECT_EQ(shell("attack " + args + " --seed 9"), 1);
    EXPECT_EQ(shell("eval " + args + " --seed 9"), 0);
    EXPECT_EQ(shell("verify " + args + " --seed 9"), 0);
    EXPECT_EQ(shell("attack " + args + " --jobs 0"), 1);
}
