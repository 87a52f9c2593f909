#include "ikd/transfer.hpp"

#include "ikd/checksum.hpp"

#include <algorithm>
#include <atomic>
#include <cstdio>
#include <set>
#include <sstream>
#include <stdexcept>
#include <thread>

namespace ikd::eval {

namespace {

std::string fixed1(double v) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.1f", v);
    return buf;
}

std::string shortest(double v) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%g", v);
    return buf;
}

nlohmann::json loss_json(const losses::LossSpec& loss) {
    return {{"kind", std::string(losses::to_string(loss.kind))}, {"gamma", loss.gamma}};
}

const models::Classifier& lookup(const ModelRegistry& models, const std::string& id) {
    auto it = models.find(id);
    if (it == models.end()) throw std::invalid_argument("model '" + id + "' is not in the manifest");
    return it->second;
}

void require_unique(const std::vector<std::string>& ids, const char* what) {
    std::set<std::string> seen;
    for (const auto& id : ids) {
        if (!seen.insert(id).second) throw std::invalid_argument(std::string("duplicate ") + what + " '" + id + "'");
    }
}

template <typename Fn>
void parallel_for(std::size_t n, Index jobs, Fn&& fn) {
    const auto workers = static_cast<std::size_t>(std::clamp<Index>(jobs, 1, static_cast<Index>(std::max<std::size_t>(n, 1))));
    if (workers <= 1) {
        for (std::size_t i = 0; i < n; ++i) fn(i);
        return;
    }
    std::atomic<std::size_t> next{0};
    std::vector<std::jthread> pool;
    for (std::size_t w = 0; w < workers; ++w) {
        pool.emplace_back([&] {
            for (std::size_t i = next++; i < n; i = next++) fn(i);
        });
    }
}

}  // namespace

std::string MethodSpec::label() const {
    std::string out(attack::to_string(method));
    if (loss.kind != losses::SoftKind::None) out += "-IKD";
    return out;
}

MethodSpec parse_method_spec(std::string_view text, losses::LossSpec ikd_loss) {
    constexpr std::string_view suffix = "-IKD";
    if (text.size() > suffix.size() && text.substr(text.size() - suffix.size()) == suffix) {
        if (ikd_loss.kind == losses::SoftKind::None) {
            throw std::invalid_argument("method '" + std::string(text) + "' needs a soft loss kind");
        }
        return {attack::parse_method(text.substr(0, text.size() - suffix.size())), ikd_loss};
    }
    return {attack::parse_method(text), {}};
}

void EvalConfig::validate(const ModelRegistry& models) const {
    if (surrogates.empty()) throw std::invalid_argument("eval config: no surrogate models");
    if (targets.empty()) throw std::invalid_argument("eval config: no target models");
    if (methods.empty()) throw std::invalid_argument("eval config: no attack methods");
    if (jobs < 1) throw std::invalid_argument("eval config: jobs must be >= 1");
    require_unique(surrogates, "surrogate");
    require_unique(targets, "target");
    std::set<std::string> labels;
    for (const auto& m : methods) {
        m.loss.validate();
        if (!labels.insert(m.label()).second) throw std::invalid_argument("duplicate method '" + m.label() + "'");
    }
    attack.validate();
    for (const auto& id : surrogates) lookup(models, id);
    for (const auto& id : targets) lookup(models, id);
    for (const auto& [id, expected] : expected_checksums) {
        const auto actual = lookup(models, id).checksum();
        if (actual != expected) {
            throw std::runtime_error("model '" + id + "' checksum " + hex64(actual) + " does not match manifest " +
                                     hex64(expected));
        }
    }
}

AsrResult asr(const models::Classifier& target, std::span<const Tensor> adv_images, std::span<const Index> labels,
              std::span<const Tensor> benign_images) {
    if (adv_images.size() != labels.size() || benign_images.size() != labels.size()) {
        throw std::invalid_argument("asr: image and label counts differ");
    }
    AsrResult r;
    r.samples = static_cast<Index>(labels.size());
    for (std::size_t start = 0; start < labels.size(); start += kEvalBatch) {
        const auto n = std::min<std::size_t>(kEvalBatch, labels.size() - start);
        const Tensor clean = models::forward_logits(target, models::stack(benign_images.subspan(start, n)));
        const Tensor adv = models::forward_logits(target, models::stack(adv_images.subspan(start, n)));
        for (std::size_t i = 0; i < n; ++i) {
            const Index row = static_cast<Index>(i);
            if (models::argmax_row(clean, row) != labels[start + i]) continue;
            ++r.eligible;
            if (models::argmax_row(adv, row) != labels[start + i]) ++r.successes;
        }
    }
    if (r.eligible == 0) throw std::runtime_error("asr: '" + target.arch().id + "' classifies no sample correctly");
    r.percent = 100.0 * static_cast<double>(r.successes) / static_cast<double>(r.eligible);
    return r;
}

void DiversityStat::add(const attack::AttackTrace& trace) {
    for (std::size_t t = 1; t < trace.size(); ++t) {
        const auto& a = trace[t - 1].normalized_grad.data();
        const auto& b = trace[t].normalized_grad.data();
        const double na = a.matrix().norm(), nb = b.matrix().norm();
        if (na == 0.0 || nb == 0.0) {
            ++excluded;
            continue;
        }
        cosine_sum += std::clamp((a * b).sum() / (na * nb), -1.0, 1.0);
        ++pairs;
    }
}

void DiversityStat::merge(const DiversityStat& other) {
    cosine_sum += other.cosine_sum;
    pairs += other.pairs;
    excluded += other.excluded;
}

DiversityStat diversity_report(std::span<const attack::AttackTrace> traces) {
    if (traces.empty()) throw std::invalid_argument("diversity_report: no traces");
    DiversityStat s;
    for (const auto& t : traces) s.add(t);
    return s;
}

bool AdversarialSet::ok() const {
    return std::all_of(failures.begin(), failures.end(), [](const std::string& f) { return f.empty(); });
}

std::optional<std::string> AdversarialSet::first_failure() const {
    for (const auto& f : failures) {
        if (!f.empty()) return f;
    }
    return std::nullopt;
}

AdversarialSet generate(const models::Classifier& surrogate, std::span<const data::LabeledSample> samples,
                        const MethodSpec& method, const attack::AttackConfig& base, std::uint64_t seed, bool quantize,
                        Index jobs) {
    if (samples.empty()) throw std::invalid_argument("generate: empty sample set");
    attack::AttackConfig cfg = base;
    cfg.method = method.method;
    cfg.loss = method.loss;
    cfg.seed = seed;
    cfg.validate();

    AdversarialSet out{surrogate.arch().id, method, std::vector<Tensor>(samples.size()),
                       std::vector<std::string>(samples.size()), {},
                       std::vector<attack::AttackTrace>(samples.size())};
    std::vector<DiversityStat> stats(samples.size());
    parallel_for(samples.size(), jobs, [&](std::size_t i) {
        try {
            auto r = attack::run_attack(surrogate, samples[i], cfg, i);
            stats[i].add(r.trace);
            for (auto& step : r.trace) step.normalized_grad = Tensor();
            out.traces[i] = std::move(r.trace);
            out.images[i] = quantize ? data::dequantize(data::quantize(r.x_adv), r.x_adv.shape()) : std::move(r.x_adv);
        } catch (const std::exception& e) {
            out.failures[i] = "sample " + std::to_string(i) + ": " + e.what();
            out.images[i] = samples[i].image;
        }
    });
    for (const auto& s : stats) out.diversity.merge(s);
    return out;
}

const ReportRow& TransferReport::row(const std::string& surrogate, const std::string& method_label) const {
    for (const auto& r : rows) {
        if (r.surrogate == surrogate && r.method.label() == method_label) return r;
    }
    throw std::out_of_range("report has no row (" + surrogate + ", " + method_label + ")");
}

ReportRow score_row(const AdversarialSet& set, const ModelRegistry& models, std::span<const std::string> targets,
                    std::span<const data::LabeledSample> samples) {
    if (set.images.size() != samples.size()) throw std::invalid_argument("score_row: sample count mismatch");
    ReportRow row{set.surrogate, set.method, {}, std::nullopt, set.first_failure(), set.diversity};
    if (row.failure) return row;

    std::vector<Tensor> benign;
    std::vector<Index> labels;
    for (const auto& s : samples) {
        benign.push_back(s.image);
        labels.push_back(s.label);
    }
    double bb_sum = 0.0;
    Index bb_count = 0;
    for (const auto& id : targets) {
        const auto r = asr(lookup(models, id), set.images, labels, benign);
        const bool white = id == set.surrogate;
        row.cells.push_back({id, r.percent, r.eligible, r.successes, white});
        if (!white) {
            bb_sum += r.percent;
            ++bb_count;
        }
    }
    if (bb_count > 0) row.black_box_avg = bb_sum / static_cast<double>(bb_count);
    return row;
}

nlohmann::json report_metadata(const ModelRegistry& models, const EvalConfig& cfg, std::size_t sample_count) {
    attack::AttackConfig shown = cfg.attack;
    shown.seed = cfg.seed;
    nlohmann::json model_meta = nlohmann::json::object();
    std::set<std::string> ids(cfg.surrogates.begin(), cfg.surrogates.end());
    ids.insert(cfg.targets.begin(), cfg.targets.end());
    for (const auto& id : ids) {
        const auto& m = lookup(models, id);
        model_meta[id] = {{"arch", m.arch().id}, {"checksum", hex64(m.checksum())}};
    }
    return {{"seed", cfg.seed},
            {"sample_set", cfg.sample_set},
            {"sample_count", sample_count},
            {"eval_batch", kEvalBatch},
            {"quantized", cfg.quantize},
            {"attack", attack_config_json(shown)},
            {"models", model_meta},
            {"rng", "mt19937_64, stream per (seed, sample index, step)"}};
}

TransferReport transfer_matrix(const ModelRegistry& models, std::span<const data::LabeledSample> samples,
                               const EvalConfig& cfg) {
    cfg.validate(models);
    if (samples.empty()) throw std::invalid_argument("transfer_matrix: empty sample set");
    TransferReport report;
    report.targets = cfg.targets;
    for (const auto& sid : cfg.surrogates) {
        for (const auto& m : cfg.methods) {
            const auto set = generate(lookup(models, sid), samples, m, cfg.attack, cfg.seed, cfg.quantize, cfg.jobs);
            report.rows.push_back(score_row(set, models, cfg.targets, samples));
        }
    }
    report.metadata = report_metadata(models, cfg, samples.size());
    return report;
}

std::vector<AblationEntry> ablation_soft_kind(const ModelRegistry& models, std::span<const data::LabeledSample> samples,
                                              const EvalConfig& cfg, std::span<const losses::SoftKind> kinds,
                                              double gamma) {
    if (kinds.empty()) throw std::invalid_argument("ablation_soft_kind: no kinds given");
    std::vector<AblationEntry> out;
    for (auto kind : kinds) {
        if (kind == losses::SoftKind::None) throw std::invalid_argument("ablation_soft_kind: kind 'none' is not a soft loss");
        EvalConfig c = cfg;
        const losses::LossSpec loss{kind, gamma};
        for (auto& m : c.methods) m.loss = loss;
        out.push_back({std::string(losses::to_string(kind)), loss, transfer_matrix(models, samples, c)});
    }
    return out;
}

std::vector<AblationEntry> ablation_gamma(const ModelRegistry& models, std::span<const data::LabeledSample> samples,
                                          const EvalConfig& cfg, losses::SoftKind kind, std::span<const double> grid) {
    if (grid.empty()) throw std::invalid_argument("ablation_gamma: empty grid");
    if (kind == losses::SoftKind::None) throw std::invalid_argument("ablation_gamma: kind 'none' is not a soft loss");
    std::vector<AblationEntry> out;
    for (double gamma : grid) {
        EvalConfig c = cfg;
        const losses::LossSpec loss{kind, gamma};
        for (auto& m : c.methods) m.loss = loss;
        out.push_back({shortest(gamma), loss, transfer_matrix(models, samples, c)});
    }
    return out;
}

nlohmann::json attack_config_json(const attack::AttackConfig& cfg) {
    const auto& p = cfg.params;
    return {{"epsilon", cfg.epsilon},
            {"steps", cfg.steps},
            {"alpha", cfg.alpha},
            {"step_policy", std::string(attack::to_string(cfg.step_policy))},
            {"mu", cfg.mu},
            {"seed", cfg.seed},
            {"params",
             {{"di_prob", p.di_prob},
              {"di_max_ratio", p.di_max_ratio},
              {"ti_kernel_len", p.ti_kernel_len},
              {"ti_sigma", p.ti_sigma},
              {"si_copies", p.si_copies},
              {"vt_samples", p.vt_samples},
              {"vt_beta", p.vt_beta},
              {"pixel_min", p.pixel_min},
              {"pixel_max", p.pixel_max}}}};
}

nlohmann::json report_json(const TransferReport& report) {
    nlohmann::json rows = nlohmann::json::array();
    for (const auto& r : report.rows) {
        nlohmann::json cells = nlohmann::json::array();
        for (const auto& c : r.cells) {
            cells.push_back({{"target", c.target},
                             {"asr", c.asr},
                             {"eligible", c.eligible},
                             {"successes", c.successes},
                             {"white_box", c.white_box}});
        }
        rows.push_back({{"surrogate", r.surrogate},
                        {"method", r.method.label()},
                        {"base_method", std::string(attack::to_string(r.method.method))},
                        {"loss", loss_json(r.method.loss)},
                        {"cells", cells},
                        {"black_box_avg", r.black_box_avg ? nlohmann::json(*r.black_box_avg) : nlohmann::json()},
                        {"failure", r.failure ? nlohmann::json(*r.failure) : nlohmann::json()},
                        {"diversity",
                         {{"mean_cosine", r.diversity.mean()},
                          {"pairs", r.diversity.pairs},
                          {"excluded", r.diversity.excluded}}}});
    }
    return {{"targets", report.targets}, {"rows", rows}, {"metadata", report.metadata}};
}

std::string canonical(const nlohmann::json& doc) { return doc.dump(2) + "\n"; }

std::string report_csv(const TransferReport& report, const std::string& surrogate) {
    std::ostringstream out;
    out << "method";
    for (const auto& t : report.targets) out << ',' << t;
    out << ",AVG\n";
    for (const auto& r : report.rows) {
        if (r.surrogate != surrogate) continue;
        out << r.method.label();
        for (std::size_t i = 0; i < report.targets.size(); ++i) {
            out << ',';
            if (r.failure) {
                out << "FAILED";
            } else {
                out << fixed1(r.cells[i].asr) << (r.cells[i].white_box ? "★" : "");
            }
        }
        out << ',' << (r.black_box_avg ? fixed1(*r.black_box_avg) : "") << '\n';
    }
    return out.str();
}

std::string report_markdown(const TransferReport& report) {
    std::ostringstream out;
    out << "| Surrogate | Method |";
    for (const auto& t : report.targets) out << ' ' << t << " |";
    out << " AVG |\n|---|---|";
    for (std::size_t i = 0; i < report.targets.size(); ++i) out << "---:|";
    out << "---:|\n";
    for (const auto& r : report.rows) {
        out << "| " << r.surrogate << " | " << r.method.label() << " |";
        for (std::size_t i = 0; i < report.targets.size(); ++i) {
            if (r.failure) {
                out << " failed |";
            } else {
                out << ' ' << fixed1(r.cells[i].asr) << (r.cells[i].white_box ? "★" : "") << " |";
            }
        }
        out << ' ' << (r.black_box_avg ? fixed1(*r.black_box_avg) : "") << " |\n";
    }
    for (const auto& r : report.rows) {
        if (r.failure) out << "\n" << r.surrogate << " / " << r.method.label() << " failed: " << *r.failure << "\n";
    }
    return out.str();
}

std::string ablation_series_csv(std::span<const AblationEntry> entries) {
    std::ostringstream out;
    out << "x,surrogate,method,black_box_avg,white_box_asr\n";
    for (const auto& e : entries) {
        for (const auto& r : e.report.rows) {
            out << e.x << ',' << r.surrogate << ',' << r.method.label() << ',';
            if (r.black_box_avg) out << shortest(*r.black_box_avg);
            out << ',';
            for (const auto& c : r.cells) {
                if (c.white_box) out << shortest(c.asr);
            }
            out << '\n';
        }
    }
    return out.str();
}

}  // namespace ikd::eval
