#pragma once

#include "ikd/attack.hpp"
#include "ikd/dataset.hpp"
#include "ikd/losses.hpp"
#include "ikd/model.hpp"
#include "ikd/transfer.hpp"

#include <json.hpp>

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

namespace ikd::cli {

namespace fs = std::filesystem;

enum ExitCode : int { kExitOk = 0, kExitValidation = 1, kExitRuntime = 2 };

/// Bad configuration, arguments, or preconditions. Maps to exit code 1.
class ValidationError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

std::string tool_version();

enum class SweepKind { Gamma, SoftKind };

struct SweepSpec {
    SweepKind kind = SweepKind::Gamma;
    std::vector<double> gammas = eval::kDefaultGammaGrid;
    /// Soft loss used by the gamma sweep.
    losses::SoftKind soft_kind = losses::SoftKind::KL;
    std::vector<losses::SoftKind> kinds = {losses::SoftKind::KL, losses::SoftKind::CE, losses::SoftKind::MSE};
    /// Gamma used by the soft-kind sweep.
    double gamma = 0.01;
};

struct ExperimentConfig {
    /// Absolute paths, resolved against the config file's directory.
    fs::path train_set;
    fs::path test_set;
    data::SyntheticSpec synthetic;
    Index train_per_class = 300;
    Index test_per_class = 100;
    std::uint64_t train_sample_seed = 11;
    std::uint64_t test_sample_seed = 22;

    /// "train" writes the zoo to <out>/models; "load" reads `manifest`.
    std::string models_mode = "train";
    fs::path manifest;
    models::TrainParams training;
    double accuracy_floor = 0.90;

    std::vector<std::string> surrogates;
    std::vector<std::string> targets;
    std::vector<std::string> methods = {"MIFGSM", "MIFGSM-IKD"};
    losses::LossSpec ikd{losses::SoftKind::KL, 0.01};
    attack::AttackConfig attack;
    Index eval_samples = 500;
    bool quantize = true;
    SweepSpec sweep;

    fs::path output;
    std::uint64_t seed = 0;
    Index jobs = 1;

    /// Canonical form of everything that affects results (excludes output and jobs).
    nlohmann::json to_json() const;
    std::uint64_t hash() const;
};

/// Strict parse: unknown keys and wrong types are ValidationErrors.
ExperimentConfig parse_config(const nlohmann::json& doc, const fs::path& base_dir);
ExperimentConfig load_config(const fs::path& path);

struct RunOptions {
    fs::path config;
    std::optional<fs::path> out;
    std::optional<std::uint64_t> seed;
    std::optional<Index> jobs;
    bool overwrite = false;
    /// verify: also rerun the recorded command and compare bytes.
    bool replay = false;
};

inline const std::vector<std::string> kCommands = {"make-dataset", "train", "attack", "eval", "sweep", "verify"};

/// Runs one subcommand and returns its exit code. Progress goes to `log`,
/// errors to `err`.
int run_command(const std::string& command, const RunOptions& options, std::ostream& log, std::ostream& err);

/// Loads the test split and picks the evaluation subset for the config seed.
std::vector<data::LabeledSample> evaluation_samples(const ExperimentConfig& cfg, std::string* sample_set_id = nullptr);

/// Loads every model listed in a manifest, checking recorded checksums.
eval::ModelRegistry load_manifest(const fs::path& manifest, std::map<std::string, std::uint64_t>* checksums = nullptr);

}  // namespace ikd::cli
