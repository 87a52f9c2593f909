#include "ikd/experiment.hpp"

#include "ikd/archive.hpp"
#include "ikd/binary_io.hpp"
#include "ikd/checksum.hpp"
#include "ikd/random.hpp"

#include <algorithm>
#include <atomic>
#include <chrono>
#include <ctime>
#include <fstream>
#include <numeric>
#include <ostream>
#include <set>
#include <thread>
#include <unistd.h>

namespace ikd::cli {

using nlohmann::json;

namespace {

constexpr std::uint64_t kSampleStream = 0x53414d50;
constexpr std::uint64_t kInitStream = 1;
constexpr std::uint64_t kShuffleStream = 2;

[[noreturn]] void invalid(const std::string& msg) { throw ValidationError(msg); }

/// Strict view over one JSON object: every key must be consumed.
class Section {
public:
    Section(const json& obj, std::string path) : obj_(obj), path_(std::move(path)) {
        if (!obj_.is_object()) invalid(where() + " must be an object");
    }

    bool has(const char* key) const { return obj_.contains(key); }

    const json* raw(const char* key) {
        used_.insert(key);
        auto it = obj_.find(key);
        return it == obj_.end() ? nullptr : &*it;
    }

    double number(const char* key, double fallback) {
        const json* v = raw(key);
        if (!v) return fallback;
        if (!v->is_number()) invalid(where(key) + " must be a number");
        return v->get<double>();
    }

    Index integer(const char* key, Index fallback, Index min = 0) {
        const json* v = raw(key);
        if (!v) return fallback;
        if (!v->is_number_integer()) invalid(where(key) + " must be an integer");
        const auto x = v->get<std::int64_t>();
        if (x < min) invalid(where(key) + " must be >= " + std::to_string(min));
        return x;
    }

    std::uint64_t seed(const char* key, std::uint64_t fallback) {
        const json* v = raw(key);
        if (!v) return fallback;
        if (!v->is_number_integer() || (!v->is_number_unsigned() && v->get<std::int64_t>() < 0)) {
            invalid(where(key) + " must be a non-negative integer");
        }
        return v->get<std::uint64_t>();
    }

    bool boolean(const char* key, bool fallback) {
        const json* v = raw(key);
        if (!v) return fallback;
        if (!v->is_boolean()) invalid(where(key) + " must be true or false");
        return v->get<bool>();
    }

    std::string string(const char* key, const std::string& fallback) {
        const json* v = raw(key);
        if (!v) return fallback;
        if (!v->is_string()) invalid(where(key) + " must be a string");
        return v->get<std::string>();
    }

    std::vector<std::string> strings(const char* key, std::vector<std::string> fallback) {
        const json* v = raw(key);
        if (!v) return fallback;
        if (!v->is_array()) invalid(where(key) + " must be an array of strings");
        std::vector<std::string> out;
        for (const auto& e : *v) {
            if (!e.is_string()) invalid(where(key) + " must be an array of strings");
            out.push_back(e.get<std::string>());
        }
        return out;
    }

    std::vector<double> numbers(const char* key, std::vector<double> fallback) {
        const json* v = raw(key);
        if (!v) return fallback;
        if (!v->is_array()) invalid(where(key) + " must be an array of numbers");
        std::vector<double> out;
        for (const auto& e : *v) {
            if (!e.is_number()) invalid(where(key) + " must be an array of numbers");
            out.push_back(e.get<double>());
        }
        return out;
    }

    Section child(const char* key) {
        static const json empty = json::object();
        const json* v = raw(key);
        return Section(v ? *v : empty, where(key));
    }

    void finish() const {
        for (const auto& [key, value] : obj_.items()) {
            if (!used_.count(key)) invalid("unknown key " + where(key.c_str()));
        }
    }

    std::string where(const char* key = nullptr) const {
        if (!key) return path_.empty() ? "config" : "'" + path_ + "'";
        return "'" + (path_.empty() ? std::string(key) : path_ + "." + key) + "'";
    }

private:
    const json& obj_;
    std::string path_;
    std::set<std::string> used_;
};

fs::path resolve(const fs::path& base, const std::string& p) {
    if (p.empty()) return {};
    return fs::weakly_canonical(fs::path(p).is_absolute() ? fs::path(p) : base / p);
}

/// Accepts the [0,1] value under `key` or pixel levels under `key`_255.
double pixel_amount(Section& s, const std::string& key, double fallback) {
    const auto levels = key + "_255";
    if (s.has(key.c_str()) && s.has(levels.c_str())) invalid("give only one of " + s.where(key.c_str()) + " and " + s.where(levels.c_str()));
    if (s.has(levels.c_str())) return s.number(levels.c_str(), 0.0) / 255.0;
    return s.number(key.c_str(), fallback);
}

json soft_kinds_json(const std::vector<losses::SoftKind>& kinds) {
    json out = json::array();
    for (auto k : kinds) out.push_back(std::string(losses::to_string(k)));
    return out;
}

std::string file_hash(const fs::path& p) { return hex64(fnv1a(io::read_file(p))); }

std::string rel(const fs::path& p, const fs::path& root) { return fs::relative(p, root).generic_string(); }

void require_file(const fs::path& p, const std::string& what) {
    if (p.empty()) invalid(what + " path is not set");
    if (!fs::is_regular_file(p)) invalid(what + " not found: " + p.string());
}

// --- one run ------------------------------------------------------------------

struct Run {
    ExperimentConfig cfg;
    std::uint64_t hash = 0;
    fs::path out;
    bool overwrite = false;
    std::ostream& log;
    std::map<std::string, std::string> files;  // path relative to out -> hash

    fs::path manifest_path() const { return cfg.models_mode == "load" ? cfg.manifest : out / "models" / "manifest.json"; }

    void check_fresh(const std::vector<fs::path>& targets) const {
        if (overwrite) return;
        for (const auto& t : targets) {
            if (fs::exists(t)) invalid(t.string() + " already exists; pass --overwrite to replace it");
        }
    }

    void write(const fs::path& p, std::string_view bytes) {
        io::write_file_atomic(p, bytes);
        files[rel(p, out)] = hex64(fnv1a(bytes));
    }

    json stamp() const { return {{"tool_version", tool_version()}, {"config_hash", hex64(hash)}}; }

    std::string csv_banner() const { return "# ikd " + tool_version() + " config " + hex64(hash) + "\n"; }

    std::vector<eval::MethodSpec> methods() const {
        std::vector<eval::MethodSpec> out;
        for (const auto& m : cfg.methods) out.push_back(eval::parse_method_spec(m, cfg.ikd));
        return out;
    }

    eval::EvalConfig eval_config(std::map<std::string, std::uint64_t> checksums, const std::string& sample_set,
                                 const eval::ModelRegistry& registry) const {
        eval::EvalConfig e;
        std::vector<std::string> all;
        for (const auto& [id, m] : registry) all.push_back(id);
        e.surrogates = cfg.surrogates.empty() ? all : cfg.surrogates;
        e.targets = cfg.targets.empty() ? all : cfg.targets;
        e.methods = methods();
        e.attack = cfg.attack;
        e.sample_set = sample_set;
        e.seed = cfg.seed;
        e.quantize = cfg.quantize;
        e.jobs = cfg.jobs;
        e.expected_checksums = std::move(checksums);
        return e;
    }

    void write_report(const fs::path& dir, const eval::TransferReport& report) {
        json doc = eval::report_json(report);
        doc["metadata"].update(stamp());
        doc["metadata"]["config"] = cfg.to_json();
        write(dir / "report.json", eval::canonical(doc));
        write(dir / "report.md", eval::report_markdown(report) + "\n_ikd " + tool_version() + ", config " +
                                     hex64(hash) + "_\n");
        std::set<std::string> done;
        for (const auto& row : report.rows) {
            if (!done.insert(row.surrogate).second) continue;
            write(dir / ("report_" + row.surrogate + ".csv"), csv_banner() + eval::report_csv(report, row.surrogate));
        }
    }

    std::vector<fs::path> report_files(const fs::path& dir, const std::vector<std::string>& surrogates) const {
        std::vector<fs::path> out = {dir / "report.json", dir / "report.md"};
        for (const auto& s : surrogates) out.push_back(dir / ("report_" + s + ".csv"));
        return out;
    }

    void record(const std::string& command) {
        const auto path = out / "artifacts.json";
        json ledger = {{"tool_version", tool_version()}, {"commands", json::object()}};
        if (fs::exists(path)) {
            try {
                ledger = json::parse(io::read_file(path));
            } catch (const json::exception& e) {
                throw std::runtime_error(path.string() + ": unreadable artifact ledger: " + e.what());
            }
        }
        ledger["tool_version"] = tool_version();
        ledger["commands"][command] = {
            {"config_hash", hex64(hash)}, {"config", cfg.to_json()}, {"files", files}};
        io::write_file_atomic(path, eval::canonical(ledger));
    }
};

// --- commands -----------------------------------------------------------------

void cmd_make_dataset(Run& run) {
    const auto& c = run.cfg;
    if (c.train_set.empty() || c.test_set.empty()) invalid("dataset.train and dataset.test must be set");
    run.check_fresh({c.train_set, c.test_set});
    const auto train = data::make_synthetic(c.synthetic, c.train_per_class, c.train_sample_seed);
    const auto test = data::make_synthetic(c.synthetic, c.test_per_class, c.test_sample_seed);
    data::write_dataset(train, c.train_set);
    data::write_dataset(test, c.test_set);
    run.log << "wrote " << train.size() << " training and " << test.size() << " test images\n";
}

void cmd_train(Run& run) {
    const auto& c = run.cfg;
    if (c.models_mode != "train") invalid("models.mode is 'load'; there is nothing to train");
    require_file(c.train_set, "training set");
    require_file(c.test_set, "test set");
    const auto train_ds = data::read_dataset(c.train_set);
    const auto test_ds = data::read_dataset(c.test_set);
    if (!(train_ds.geometry() == test_ds.geometry()) || train_ds.classes() != test_ds.classes()) {
        invalid("training and test sets differ in geometry or class count");
    }
    const auto zoo = models::toy_zoo(train_ds.geometry(), train_ds.classes());
    const auto dir = run.out / "models";
    std::vector<fs::path> targets = {dir / "manifest.json"};
    for (const auto& a : zoo) targets.push_back(dir / (a.id + ".ikdw"));
    run.check_fresh(targets);

    const auto train_samples = train_ds.samples();
    const auto test_samples = test_ds.samples();
    const auto train_hash = file_hash(c.train_set);
    std::vector<std::optional<models::TrainResult>> results(zoo.size());
    std::vector<std::string> errors(zoo.size());
    std::atomic<std::size_t> next{0};
    {
        std::vector<std::jthread> pool;
        const auto workers = std::min<std::size_t>(zoo.size(), static_cast<std::size_t>(c.jobs));
        for (std::size_t w = 0; w < workers; ++w) {
            pool.emplace_back([&] {
                for (std::size_t i = next++; i < zoo.size(); i = next++) {
                    try {
                        auto params = c.training;
                        params.seed = derive_seed(c.seed, {kShuffleStream, i});
                        results[i] = models::train(models::build_model(zoo[i], derive_seed(c.seed, {kInitStream, i})),
                                                   train_samples, test_samples, params, train_hash);
                    } catch (const std::exception& e) {
                        errors[i] = zoo[i].id + ": " + e.what();
                    }
                }
            });
        }
    }
    std::string failures;
    for (std::size_t i = 0; i < zoo.size(); ++i) {
        if (!errors[i].empty()) {
            failures += "\n  " + errors[i];
            continue;
        }
        const double acc = results[i]->model.training().test_accuracy;
        run.log << zoo[i].id << ": test accuracy " << acc << "\n";
        if (acc < c.accuracy_floor) {
            failures += "\n  model '" + zoo[i].id + "' reached test accuracy " + std::to_string(acc) +
                        ", below the floor " + std::to_string(c.accuracy_floor);
        }
    }
    if (!failures.empty()) throw std::runtime_error("training failed:" + failures);

    json entries = json::array();
    for (std::size_t i = 0; i < zoo.size(); ++i) {
        const auto& m = results[i]->model;
        const auto file = zoo[i].id + ".ikdw";
        run.write(dir / file, models::encode_weights(m));
        json history = json::array();
        for (const auto& h : results[i]->history) {
            history.push_back({{"epoch", h.epoch}, {"mean_loss", h.mean_loss}, {"test_accuracy", h.test_accuracy}});
        }
        entries.push_back({{"id", zoo[i].id},
                           {"file", file},
                           {"checksum", hex64(m.checksum())},
                           {"test_accuracy", m.training().test_accuracy},
                           {"epochs", m.training().epochs},
                           {"history", history}});
    }
    const auto& g = train_ds.geometry();
    json manifest = run.stamp();
    manifest["seed"] = c.seed;
    manifest["accuracy_floor"] = c.accuracy_floor;
    manifest["dataset"] = {{"train", train_hash},
                           {"test", file_hash(c.test_set)},
                           {"geometry", {g.channels, g.height, g.width}},
                           {"classes", train_ds.classes()}};
    manifest["models"] = entries;
    run.write(dir / "manifest.json", eval::canonical(manifest));
}

struct Loaded {
    eval::ModelRegistry models;
    std::map<std::string, std::uint64_t> checksums;
    std::vector<data::LabeledSample> samples;
    std::string sample_set;
    eval::EvalConfig eval;
};

Loaded load_inputs(const Run& run) {
    require_file(run.cfg.test_set, "test set");
    require_file(run.manifest_path(), "model manifest");
    Loaded l;
    l.models = load_manifest(run.manifest_path(), &l.checksums);
    l.samples = evaluation_samples(run.cfg, &l.sample_set);
    l.eval = run.eval_config(l.checksums, l.sample_set, l.models);
    l.eval.validate(l.models);
    return l;
}

void cmd_attack(Run& run) {
    auto in = load_inputs(run);
    const auto dir = run.out / "attack";
    std::vector<fs::path> targets;
    for (const auto& s : in.eval.surrogates) {
        for (const auto& m : in.eval.methods) {
            const auto stem = archive::archive_stem(s, m.label());
            targets.push_back(dir / (stem + ".ikda"));
            targets.push_back(dir / (stem + ".json"));
        }
    }
    run.check_fresh(targets);
    for (const auto& s : in.eval.surrogates) {
        for (const auto& m : in.eval.methods) {
            const auto set = eval::generate(in.models.at(s), in.samples, m, in.eval.attack, in.eval.seed,
                                            in.eval.quantize, in.eval.jobs);
            const auto a = archive::from_set(set, in.samples, run.hash);
            const auto stem = archive::archive_stem(s, m.label());
            json side = archive::sidecar(a, in.samples);
            side.update(run.stamp());
            for (std::size_t i = 0; i < set.traces.size(); ++i) {
                json steps = json::array();
                for (const auto& r : set.traces[i]) {
                    steps.push_back({{"t", r.t}, {"loss", r.loss}, {"grad_l1", r.grad_l1}, {"predicted", r.predicted}});
                }
                side["samples"][i]["trace"] = steps;
            }
            run.write(dir / (stem + ".ikda"), archive::encode(a));
            run.write(dir / (stem + ".json"), eval::canonical(side));
            const auto failed = std::count_if(a.failures.begin(), a.failures.end(), [](auto& f) { return !f.empty(); });
            run.log << stem << ": " << a.size() << " samples, " << failed << " failed\n";
        }
    }
}

void cmd_eval(Run& run) {
    auto in = load_inputs(run);
    const auto dir = run.out / "eval";
    std::vector<archive::AdversarialArchive> archives;
    for (const auto& s : in.eval.surrogates) {
        for (const auto& m : in.eval.methods) {
            const auto path = run.out / "attack" / (archive::archive_stem(s, m.label()) + ".ikda");
            if (!fs::is_regular_file(path)) invalid("archive not found: " + path.string() + " (run attack first)");
            auto a = archive::decode(io::read_file(path), path.string());
            a.surrogate = s;
            a.method = m.label();
            if (a.config_hash != run.hash) {
                invalid(path.string() + " was produced by config " + hex64(a.config_hash) + ", not " + hex64(run.hash));
            }
            archives.push_back(std::move(a));
        }
    }
    run.check_fresh(run.report_files(dir, in.eval.surrogates));

    eval::TransferReport report;
    report.targets = in.eval.targets;
    std::size_t k = 0;
    for (const auto& s : in.eval.surrogates) {
        (void)s;
        for (const auto& m : in.eval.methods) {
            const auto& a = archives[k++];
            const auto scan = archive::scan_budget(a, in.samples, in.eval.attack.epsilon);
            if (scan.violations > 0) {
                throw std::runtime_error(archive::archive_stem(a.surrogate, a.method) + ": " +
                                         std::to_string(scan.violations) + " images exceed the perturbation budget");
            }
            report.rows.push_back(eval::score_row(archive::to_set(a, m), in.models, in.eval.targets, in.samples));
        }
    }
    report.metadata = eval::report_metadata(in.models, in.eval, in.samples.size());
    run.write_report(dir, report);
    run.log << eval::report_markdown(report);
}

std::string sweep_dir_name(const ExperimentConfig& c, const eval::AblationEntry& e) {
    return (c.sweep.kind == SweepKind::Gamma ? "gamma_" : "kind_") + e.x;
}

void cmd_sweep(Run& run) {
    auto in = load_inputs(run);
    const auto& sw = run.cfg.sweep;
    std::vector<eval::MethodSpec> bases;
    std::set<attack::Method> seen;
    for (const auto& m : in.eval.methods) {
        if (seen.insert(m.method).second) bases.push_back({m.method, {}});
    }
    in.eval.methods = bases;

    const auto dir = run.out / "sweep";
    std::vector<std::string> labels;
    if (sw.kind == SweepKind::Gamma) {
        char buf[32];
        for (double g : sw.gammas) {
            std::snprintf(buf, sizeof buf, "%g", g);
            labels.push_back(std::string("gamma_") + buf);
        }
    } else {
        for (auto k : sw.kinds) labels.push_back("kind_" + std::string(losses::to_string(k)));
    }
    std::vector<fs::path> targets = {dir / "series.csv", dir / "summary.json"};
    for (const auto& l : labels) {
        auto f = run.report_files(dir / l, in.eval.surrogates);
        targets.insert(targets.end(), f.begin(), f.end());
    }
    run.check_fresh(targets);

    const auto entries = sw.kind == SweepKind::Gamma
                             ? eval::ablation_gamma(in.models, in.samples, in.eval, sw.soft_kind, sw.gammas)
                             : eval::ablation_soft_kind(in.models, in.samples, in.eval, sw.kinds, sw.gamma);
    json series = json::array();
    for (const auto& e : entries) {
        run.write_report(dir / sweep_dir_name(run.cfg, e), e.report);
        for (const auto& r : e.report.rows) {
            json wb;
            for (const auto& cell : r.cells) {
                if (cell.white_box) wb = cell.asr;
            }
            series.push_back({{"x", e.x},
                              {"surrogate", r.surrogate},
                              {"method", r.method.label()},
                              {"black_box_avg", r.black_box_avg ? json(*r.black_box_avg) : json()},
                              {"white_box_asr", wb}});
        }
    }
    run.write(dir / "series.csv", run.csv_banner() + eval::ablation_series_csv(entries));
    json summary = run.stamp();
    summary["sweep"] = sw.kind == SweepKind::Gamma ? "gamma" : "kind";
    summary["points"] = entries.size();
    summary["series"] = series;
    run.write(dir / "summary.json", eval::canonical(summary));
    run.log << eval::ablation_series_csv(entries);
}

using CommandFn = void (*)(Run&);

CommandFn find_command(const std::string& name) {
    if (name == "make-dataset") return cmd_make_dataset;
    if (name == "train") return cmd_train;
    if (name == "attack") return cmd_attack;
    if (name == "eval") return cmd_eval;
    if (name == "sweep") return cmd_sweep;
    return nullptr;
}

const std::vector<std::string> kReplayOrder = {"train", "attack", "eval", "sweep"};

void cmd_verify(const fs::path& out, const std::optional<std::uint64_t>& current_hash, bool replay, Index jobs,
                std::ostream& log) {
    const auto path = out / "artifacts.json";
    if (!fs::is_regular_file(path)) invalid("no artifact ledger at " + path.string());
    const json ledger = json::parse(io::read_file(path));
    Index checked = 0;
    std::string problems;
    for (const auto& [command, entry] : ledger.at("commands").items()) {
        if (current_hash && entry.at("config_hash").get<std::string>() != hex64(*current_hash)) {
            log << command << ": recorded under config " << entry.at("config_hash").get<std::string>()
                << ", current config is " << hex64(*current_hash) << "\n";
        }
        for (const auto& [file, hash] : entry.at("files").items()) {
            const auto p = out / file;
            if (!fs::is_regular_file(p)) {
                problems += "\n  " + file + ": missing";
            } else if (file_hash(p) != hash.get<std::string>()) {
                problems += "\n  " + file + ": checksum differs from the ledger";
            }
            ++checked;
        }
    }
    if (!problems.empty()) throw std::runtime_error("verification failed:" + problems);
    log << "verified " << checked << " artifacts\n";
    if (!replay) return;

    const auto scratch = fs::temp_directory_path() /
                         ("ikd-replay-" + std::to_string(::getpid()) + "-" +
                          std::to_string(std::chrono::steady_clock::now().time_since_epoch().count()));
    struct Cleanup {
        fs::path p;
        ~Cleanup() {
            std::error_code ec;
            fs::remove_all(p, ec);
        }
    } cleanup{scratch};
    for (const auto& command : kReplayOrder) {
        if (!ledger.at("commands").contains(command)) continue;
        const auto& entry = ledger["commands"][command];
        ExperimentConfig cfg = parse_config(entry.at("config"), scratch);
        cfg.jobs = jobs;
        Run run{cfg, cfg.hash(), scratch, true, log, {}};
        if (hex64(run.hash) != entry.at("config_hash").get<std::string>()) {
            throw std::runtime_error(command + ": embedded config does not reproduce its recorded hash");
        }
        find_command(command)(run);
        for (const auto& [file, hash] : entry.at("files").items()) {
            const auto it = run.files.find(file);
            if (it == run.files.end()) {
                problems += "\n  " + command + ": replay did not produce " + file;
            } else if (it->second != hash.get<std::string>()) {
                problems += "\n  " + command + ": replayed " + file + " differs";
            }
        }
        log << "replayed " << command << "\n";
    }
    if (!problems.empty()) throw std::runtime_error("replay failed:" + problems);
    log << "replay reproduced every artifact byte for byte\n";
}

void append_run_log(const fs::path& out, const std::string& command, const std::string& hash, int code,
                    double seconds) {
    std::error_code ec;
    fs::create_directories(out, ec);
    std::ofstream f(out / "run.log", std::ios::app);
    if (!f) return;
    const auto now = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
    char stamp[32];
    std::strftime(stamp, sizeof stamp, "%Y-%m-%dT%H:%M:%SZ", std::gmtime(&now));
    char wall[32];
    std::snprintf(wall, sizeof wall, "%.2f", seconds);
    f << stamp << ' ' << command << " config=" << hash << " exit=" << code << " wall=" << wall << "s\n";
}

}  // namespace

std::string tool_version() { return IKD_VERSION; }

json ExperimentConfig::to_json() const {
    const auto& p = attack.params;
    const auto& s = synthetic;
    json methods_json = methods;
    json gammas = sweep.gammas;
    return {{"seed", seed},
            {"dataset",
             {{"train", train_set.generic_string()},
              {"test", test_set.generic_string()},
              {"train_per_class", train_per_class},
              {"test_per_class", test_per_class},
              {"train_seed", train_sample_seed},
              {"test_seed", test_sample_seed},
              {"synthetic",
               {{"size", s.size},
                {"classes", s.classes},
                {"strokes", s.strokes},
                {"prototype_seed", s.prototype_seed},
                {"noise", s.noise},
                {"max_shift", s.max_shift},
                {"intensity_min", s.intensity_min},
                {"intensity_max", s.intensity_max},
                {"background_max", s.background_max},
                {"exposure_min", s.exposure_min}}}}},
            {"models",
             {{"mode", models_mode},
              {"manifest", manifest.generic_string()},
              {"epochs", training.epochs},
              {"learning_rate", training.learning_rate},
              {"momentum", training.momentum},
              {"weight_decay", training.weight_decay},
              {"batch_size", training.batch_size},
              {"accuracy_floor", accuracy_floor}}},
            {"eval",
             {{"surrogates", surrogates},
              {"targets", targets},
              {"methods", methods_json},
              {"samples", eval_samples},
              {"quantize", quantize}}},
            {"ikd", {{"kind", std::string(losses::to_string(ikd.kind))}, {"gamma", ikd.gamma}}},
            {"attack",
             {{"epsilon", attack.epsilon},
              {"alpha", attack.alpha},
              {"steps", attack.steps},
              {"step_policy", std::string(attack::to_string(attack.step_policy))},
              {"mu", attack.mu},
              {"di_prob", p.di_prob},
              {"di_max_ratio", p.di_max_ratio},
              {"ti_kernel_len", p.ti_kernel_len},
              {"ti_sigma", p.ti_sigma},
              {"si_copies", p.si_copies},
              {"vt_samples", p.vt_samples},
              {"vt_beta", p.vt_beta},
              {"pixel_min", p.pixel_min},
              {"pixel_max", p.pixel_max}}},
            {"sweep",
             {{"kind", sweep.kind == SweepKind::Gamma ? "gamma" : "kind"},
              {"gammas", gammas},
              {"soft_kind", std::string(losses::to_string(sweep.soft_kind))},
              {"kinds", soft_kinds_json(sweep.kinds)},
              {"gamma", sweep.gamma}}}};
}

std::uint64_t ExperimentConfig::hash() const { return fnv1a(eval::canonical(to_json())); }

ExperimentConfig parse_config(const json& doc, const fs::path& base_dir) {
    ExperimentConfig c;
    Section root(doc, "");
    c.seed = root.seed("seed", c.seed);
    c.output = resolve(base_dir, root.string("output", ""));
    c.jobs = root.integer("jobs", c.jobs, 1);

    auto ds = root.child("dataset");
    c.train_set = resolve(base_dir, ds.string("train", ""));
    c.test_set = resolve(base_dir, ds.string("test", ""));
    c.train_per_class = ds.integer("train_per_class", c.train_per_class, 1);
    c.test_per_class = ds.integer("test_per_class", c.test_per_class, 1);
    c.train_sample_seed = ds.seed("train_seed", c.train_sample_seed);
    c.test_sample_seed = ds.seed("test_seed", c.test_sample_seed);
    {
        auto sy = ds.child("synthetic");
        auto& s = c.synthetic;
        s.size = sy.integer("size", s.size, 1);
        s.classes = sy.integer("classes", s.classes, 2);
        s.strokes = sy.integer("strokes", s.strokes, 1);
        s.prototype_seed = sy.seed("prototype_seed", s.prototype_seed);
        s.noise = sy.number("noise", s.noise);
        s.max_shift = sy.integer("max_shift", s.max_shift, 0);
        s.intensity_min = sy.number("intensity_min", s.intensity_min);
        s.intensity_max = sy.number("intensity_max", s.intensity_max);
        s.background_max = sy.number("background_max", s.background_max);
        s.exposure_min = sy.number("exposure_min", s.exposure_min);
        sy.finish();
    }
    ds.finish();

    auto md = root.child("models");
    c.models_mode = md.string("mode", c.models_mode);
    if (c.models_mode != "train" && c.models_mode != "load") invalid("'models.mode' must be \"train\" or \"load\"");
    c.manifest = resolve(base_dir, md.string("manifest", ""));
    if (c.models_mode == "load" && c.manifest.empty()) invalid("'models.manifest' is required when models.mode is \"load\"");
    c.training.epochs = md.integer("epochs", c.training.epochs, 1);
    c.training.learning_rate = md.number("learning_rate", c.training.learning_rate);
    c.training.momentum = md.number("momentum", c.training.momentum);
    c.training.weight_decay = md.number("weight_decay", c.training.weight_decay);
    c.training.batch_size = md.integer("batch_size", c.training.batch_size, 1);
    c.accuracy_floor = md.number("accuracy_floor", c.accuracy_floor);
    if (!(c.training.learning_rate > 0.0)) invalid("'models.learning_rate' must be positive");
    if (c.accuracy_floor < 0.0 || c.accuracy_floor > 1.0) invalid("'models.accuracy_floor' must lie in [0, 1]");
    md.finish();

    auto ev = root.child("eval");
    c.surrogates = ev.strings("surrogates", c.surrogates);
    c.targets = ev.strings("targets", c.targets);
    c.methods = ev.strings("methods", c.methods);
    c.eval_samples = ev.integer("samples", c.eval_samples, 1);
    c.quantize = ev.boolean("quantize", c.quantize);
    ev.finish();
    if (c.methods.empty()) invalid("'eval.methods' must list at least one method");

    auto ik = root.child("ikd");
    try {
        c.ikd.kind = losses::parse_soft_kind(ik.string("kind", std::string(losses::to_string(c.ikd.kind))));
    } catch (const std::invalid_argument& e) {
        invalid(std::string("'ikd.kind': ") + e.what());
    }
    c.ikd.gamma = ik.number("gamma", c.ikd.gamma);
    ik.finish();

    auto at = root.child("attack");
    auto& a = c.attack;
    a.epsilon = pixel_amount(at, "epsilon", a.epsilon);
    a.alpha = pixel_amount(at, "alpha", a.alpha);
    a.steps = at.integer("steps", a.steps, 1);
    a.step_policy = attack::parse_step_policy(at.string("step_policy", std::string(attack::to_string(a.step_policy))));
    a.mu = at.number("mu", a.mu);
    auto& p = a.params;
    p.di_prob = at.number("di_prob", p.di_prob);
    p.di_max_ratio = at.number("di_max_ratio", p.di_max_ratio);
    p.ti_kernel_len = at.integer("ti_kernel_len", p.ti_kernel_len, 1);
    p.ti_sigma = at.number("ti_sigma", p.ti_sigma);
    p.si_copies = at.integer("si_copies", p.si_copies, 1);
    p.vt_samples = at.integer("vt_samples", p.vt_samples, 1);
    p.vt_beta = at.number("vt_beta", p.vt_beta);
    p.pixel_min = at.number("pixel_min", p.pixel_min);
    p.pixel_max = at.number("pixel_max", p.pixel_max);
    at.finish();

    auto sw = root.child("sweep");
    const auto kind = sw.string("kind", "gamma");
    if (kind != "gamma" && kind != "kind") invalid("'sweep.kind' must be \"gamma\" or \"kind\"");
    c.sweep.kind = kind == "gamma" ? SweepKind::Gamma : SweepKind::SoftKind;
    c.sweep.gammas = sw.numbers("gammas", c.sweep.gammas);
    c.sweep.soft_kind = losses::parse_soft_kind(sw.string("soft_kind", std::string(losses::to_string(c.sweep.soft_kind))));
    std::vector<std::string> kinds;
    for (auto k : c.sweep.kinds) kinds.emplace_back(losses::to_string(k));
    c.sweep.kinds.clear();
    for (const auto& k : sw.strings("kinds", kinds)) c.sweep.kinds.push_back(losses::parse_soft_kind(k));
    c.sweep.gamma = sw.number("gamma", c.sweep.gamma);
    if (c.sweep.gammas.empty()) invalid("'sweep.gammas' must not be empty");
    if (c.sweep.kinds.empty()) invalid("'sweep.kinds' must not be empty");
    sw.finish();

    root.finish();

    try {
        c.ikd.validate();
        a.validate();
        for (const auto& m : c.methods) eval::parse_method_spec(m, c.ikd);
        for (auto k : c.sweep.kinds) {
            if (k == losses::SoftKind::None) invalid("'sweep.kinds' may not contain \"none\"");
        }
        for (double g : c.sweep.gammas) losses::LossSpec{c.sweep.soft_kind, g}.validate();
    } catch (const std::invalid_argument& e) {
        invalid(e.what());
    }
    return c;
}

ExperimentConfig load_config(const fs::path& path) {
    if (!fs::is_regular_file(path)) invalid("config file not found: " + path.string());
    json doc;
    try {
        doc = json::parse(io::read_file(path));
    } catch (const json::parse_error& e) {
        invalid(path.string() + ": " + e.what());
    }
    return parse_config(doc, fs::absolute(path).parent_path());
}

std::vector<data::LabeledSample> evaluation_samples(const ExperimentConfig& cfg, std::string* sample_set_id) {
    require_file(cfg.test_set, "test set");
    const auto ds = data::read_dataset(cfg.test_set);
    if (cfg.eval_samples > ds.size()) {
        invalid("eval.samples is " + std::to_string(cfg.eval_samples) + " but the test set holds " +
                std::to_string(ds.size()));
    }
    std::vector<Index> idx(static_cast<std::size_t>(ds.size()));
    std::iota(idx.begin(), idx.end(), Index{0});
    Rng rng(derive_seed(cfg.seed, {kSampleStream}));
    for (std::size_t i = idx.size() - 1; i > 0; --i) {
        std::swap(idx[i], idx[static_cast<std::size_t>(rng.uniform_int(0, static_cast<std::int64_t>(i)))]);
    }
    idx.resize(static_cast<std::size_t>(cfg.eval_samples));
    std::sort(idx.begin(), idx.end());
    if (sample_set_id) {
        *sample_set_id = "test:" + file_hash(cfg.test_set) + "/seed:" + std::to_string(cfg.seed) +
                         "/n:" + std::to_string(cfg.eval_samples);
    }
    return ds.subset(idx).samples();
}

eval::ModelRegistry load_manifest(const fs::path& manifest, std::map<std::string, std::uint64_t>* checksums) {
    require_file(manifest, "model manifest");
    json doc;
    try {
        doc = json::parse(io::read_file(manifest));
        const auto& g = doc.at("dataset").at("geometry");
        const data::ImageGeometry geometry{g.at(0).get<Index>(), g.at(1).get<Index>(), g.at(2).get<Index>()};
        const auto zoo = models::toy_zoo(geometry, doc.at("dataset").at("classes").get<Index>());
        eval::ModelRegistry out;
        for (const auto& e : doc.at("models")) {
            const auto id = e.at("id").get<std::string>();
            const auto expected = parse_hex64(e.at("checksum").get<std::string>());
            auto model = models::load_weights(models::find_arch(zoo, id), manifest.parent_path() / e.at("file").get<std::string>());
            if (model.checksum() != expected) {
                throw std::runtime_error("model '" + id + "' weights hash to " + hex64(model.checksum()) +
                                         ", manifest records " + hex64(expected));
            }
            if (checksums) (*checksums)[id] = expected;
            out.emplace(id, std::move(model));
        }
        if (out.empty()) invalid(manifest.string() + " lists no models");
        return out;
    } catch (const json::exception& e) {
        invalid(manifest.string() + ": malformed manifest: " + e.what());
    }
}

int run_command(const std::string& command, const RunOptions& options, std::ostream& log, std::ostream& err) {
    const auto start = std::chrono::steady_clock::now();
    fs::path out;
    std::string hash = "-";
    int code = kExitOk;
    try {
        if (std::find(kCommands.begin(), kCommands.end(), command) == kCommands.end()) {
            invalid("unknown command '" + command + "'");
        }
        ExperimentConfig cfg = load_config(options.config);
        if (options.seed) cfg.seed = *options.seed;
        if (options.jobs) {
            if (*options.jobs < 1) invalid("--jobs must be >= 1");
            cfg.jobs = *options.jobs;
        }
        if (options.out) cfg.output = fs::absolute(*options.out);
        if (cfg.output.empty()) invalid("no output directory: set 'output' in the config or pass --out");
        out = cfg.output;
        hash = hex64(cfg.hash());
        if (command == "verify") {
            cmd_verify(out, cfg.hash(), options.replay, cfg.jobs, log);
        } else {
            Run run{cfg, cfg.hash(), out, options.overwrite, log, {}};
            find_command(command)(run);
            if (!run.files.empty()) run.record(command);
        }
    } catch (const ValidationError& e) {
        err << "error: " << e.what() << "\n";
        code = kExitValidation;
    } catch (const std::invalid_argument& e) {
        err << "error: " << e.what() << "\n";
        code = kExitValidation;
    } catch (const std::exception& e) {
        err << "failed: " << e.what() << "\n";
        code = kExitRuntime;
    }
    if (!out.empty() && command != "verify") {
        const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
        append_run_log(out, command, hash, code, secs);
    }
    return code;
}

}  // namespace ikd::cli
