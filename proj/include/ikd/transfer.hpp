#pragma once

#include "ikd/attack.hpp"
#include "ikd/dataset.hpp"
#include "ikd/losses.hpp"
#include "ikd/model.hpp"

#include <json.hpp>

#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

namespace ikd::eval {

using ModelRegistry = std::map<std::string, models::Classifier>;

inline constexpr Index kEvalBatch = 64;

/// A base method, optionally with an IKD objective. Any soft kind other than
/// None labels the row "<METHOD>-IKD", even at gamma 0.
struct MethodSpec {
    attack::Method method = attack::Method::MIFGSM;
    losses::LossSpec loss;

    std::string label() const;
};

MethodSpec parse_method_spec(std::string_view text, losses::LossSpec ikd_loss);

struct EvalConfig {
    std::vector<std::string> surrogates;
    std::vector<std::string> targets;
    std::vector<MethodSpec> methods;
    /// Method, loss and seed fields are overridden per row.
    attack::AttackConfig attack;
    std::string sample_set;
    std::uint64_t seed = 0;
    /// Store adversarial images as 8-bit before scoring.
    bool quantize = true;
    Index jobs = 1;
    /// When set, each listed model must carry exactly this checksum.
    std::map<std::string, std::uint64_t> expected_checksums;

    void validate(const ModelRegistry& models) const;
};

struct AsrResult {
    double percent = 0.0;
    Index eligible = 0;
    Index successes = 0;
    Index samples = 0;
};

/// Success rate over samples the target classifies correctly when benign.
AsrResult asr(const models::Classifier& target, std::span<const Tensor> adv_images, std::span<const Index> labels,
              std::span<const Tensor> benign_images);

/// Mean cosine similarity between successive normalized gradients.
struct DiversityStat {
    double cosine_sum = 0.0;
    Index pairs = 0;
    /// Pairs skipped because one gradient had zero norm.
    Index excluded = 0;

    void add(const attack::AttackTrace& trace);
    void merge(const DiversityStat& other);
    /// In [-1, 1]; 0 when no pair was counted.
    double mean() const { return pairs > 0 ? cosine_sum / static_cast<double>(pairs) : 0.0; }
};

DiversityStat diversity_report(std::span<const attack::AttackTrace> traces);

/// Adversarial images for one (surrogate, method) over a sample set.
struct AdversarialSet {
    std::string surrogate;
    MethodSpec method;
    std::vector<Tensor> images;
    /// Empty string for a successful attack, else the failure reason.
    std::vector<std::string> failures;
    DiversityStat diversity;
    /// Per-sample step records without the gradient tensors.
    std::vector<attack::AttackTrace> traces;

    bool ok() const;
    std::optional<std::string> first_failure() const;
};

/// Attacks every sample (in parallel over `jobs` threads; results do not
/// depend on the thread count). Failures are recorded per sample.
AdversarialSet generate(const models::Classifier& surrogate, std::span<const data::LabeledSample> samples,
                        const MethodSpec& method, const attack::AttackConfig& base, std::uint64_t seed, bool quantize,
                        Index jobs);

struct Cell {
    std::string target;
    double asr = 0.0;
    Index eligible = 0;
    Index successes = 0;
    bool white_box = false;
};

struct ReportRow {
    std::string surrogate;
    MethodSpec method;
    std::vector<Cell> cells;
    std::optional<double> black_box_avg;
    std::optional<std::string> failure;
    DiversityStat diversity;
};

struct TransferReport {
    std::vector<std::string> targets;
    std::vector<ReportRow> rows;
    nlohmann::json metadata = nlohmann::json::object();

    const ReportRow& row(const std::string& surrogate, const std::string& method_label) const;
};

/// Scores one adversarial set on every target. A set with any failed
/// attack yields a row with no cells and the first failure recorded.
ReportRow score_row(const AdversarialSet& set, const ModelRegistry& models, std::span<const std::string> targets,
                    std::span<const data::LabeledSample> samples);

/// Seed, sample set, attack settings and model checksums for a report.
nlohmann::json report_metadata(const ModelRegistry& models, const EvalConfig& cfg, std::size_t sample_count);

TransferReport transfer_matrix(const ModelRegistry& models, std::span<const data::LabeledSample> samples,
                               const EvalConfig& cfg);

struct AblationEntry {
    std::string x;
    losses::LossSpec loss;
    TransferReport report;
};

/// One transfer matrix per soft-loss kind at a fixed gamma; every method in
/// the config takes the swept loss.
std::vector<AblationEntry> ablation_soft_kind(const ModelRegistry& models, std::span<const data::LabeledSample> samples,
                                              const EvalConfig& cfg, std::span<const losses::SoftKind> kinds,
                                              double gamma);

inline const std::vector<double> kDefaultGammaGrid = {0.001, 0.01, 0.1, 1.0, 10.0, 100.0, 1000.0};

std::vector<AblationEntry> ablation_gamma(const ModelRegistry& models, std::span<const data::LabeledSample> samples,
                                          const EvalConfig& cfg, losses::SoftKind kind, std::span<const double> grid);

nlohmann::json attack_config_json(const attack::AttackConfig& cfg);
nlohmann::json report_json(const TransferReport& report);
/// Canonical text: sorted keys, two-space indent, trailing newline.
std::string canonical(const nlohmann::json& doc);

/// Columns are the targets in config order then AVG; white-box cells carry a
/// star suffix; one decimal.
std::string report_csv(const TransferReport& report, const std::string& surrogate);
std::string report_markdown(const TransferReport& report);

/// Comparison across ablation entries: x, surrogate, method, black-box AVG,
/// white-box ASR.
std::string ablation_series_csv(std::span<const AblationEntry> entries);

}  // namespace ikd::eval
