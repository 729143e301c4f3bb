#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "cladapt/data.hpp"
#include "cladapt/metrics.hpp"
#include "cladapt/nn.hpp"
#include "cladapt/optim.hpp"
#include "cladapt/strategies.hpp"

namespace cladapt::runner {

inline constexpr int kSchemaVersion = 1;

enum class StrategyKind { JointTraining, Ewc, Lwf };

std::string kind_name(StrategyKind kind);
StrategyKind parse_kind(const std::string& s);

struct StrategyConfig {
    std::string name;
    StrategyKind kind = StrategyKind::JointTraining;
    double fraction = 0.0;  // JT
    double lambda = 0.0;    // EWC, LWF
    cl::ThresholdRule threshold = cl::ThresholdRule::quantile(0.5);  // EWC
    bool classic_ewc = false;
    // LWF: "source_unique" (labels only the source domain annotates) or "source_all"
    std::string regularized_labels = "source_unique";

    std::string slug() const;
    nlohmann::json to_json() const;
    static StrategyConfig from_json(const nlohmann::json& j);
};

struct StageConfig {
    optim::SgdConfig sgd;
    std::size_t epochs = 30;
    double lr_floor = 1e-6;
    double plateau_factor = 0.1;
    std::size_t patience = 1;
    double min_delta = 0.0;

    nlohmann::json to_json() const;
    static StageConfig from_json(const nlohmann::json& j, const StageConfig& defaults);
};

struct ExperimentConfig {
    std::uint64_t master_seed = 1;
    std::size_t repetitions = 5;
    std::size_t threads = 0;  // 0 = one per repetition, capped by hardware
    data::BenchmarkSpec benchmark;
    double test_fraction = 0.2;
    double validation_fraction = 0.1;
    std::vector<std::size_t> hidden = {64, 32};
    StageConfig stage1;
    StageConfig stage2;
    std::vector<StrategyConfig> strategies;

    // Six JT fractions, binarized EWC and partial-label LWF with the reference settings.
    static ExperimentConfig defaults();
    void validate() const;
    nlohmann::json to_json() const;
    static ExperimentConfig from_json(const nlohmann::json& j);
    static ExperimentConfig load(const std::filesystem::path& path);
    std::string hash() const;

    const StrategyConfig& strategy(const std::string& name_or_slug) const;
    std::vector<std::string> strategy_names() const;
};

std::uint64_t repetition_seed(const ExperimentConfig& cfg, std::size_t repetition);

struct RepetitionData {
    data::Splits source;  // domain A
    data::Splits target;  // domain B
};

// Test splits depend only on the master seed; validation splits on the repetition.
RepetitionData prepare_repetition(const ExperimentConfig& cfg, const data::DomainPair& pair, std::size_t repetition);

struct Stage1Result {
    nn::MlpModel model;
    optim::TrainRecord record;
};

Stage1Result run_stage1(const ExperimentConfig& cfg, const RepetitionData& data, std::size_t repetition);

struct AdaptResult {
    nn::MlpModel model;
    optim::TrainRecord record;
    std::optional<cl::FisherDiagonal> fisher;
    std::optional<cl::GaussianPrior> prior;
    std::optional<cl::SoftTargets> soft_targets;
};

AdaptResult run_adaptation(const nn::MlpModel& source_model, const StrategyConfig& strategy,
                           const ExperimentConfig& cfg, const RepetitionData& data, std::size_t repetition);

// Raw model outputs on one test split, with the ground truth needed to recompute AUCs.
struct ScoreFile {
    std::vector<std::int64_t> sample_ids;
    std::vector<std::int64_t> group_ids;
    Matrix scores;
    Matrix labels;
    Matrix presence;
};

ScoreFile score_dataset(const nn::MlpModel& model, const data::Dataset& dataset);
void write_scores(const ScoreFile& scores, const std::filesystem::path& path);
ScoreFile read_scores(const std::filesystem::path& path);

struct RunResult {
    std::string strategy;
    std::size_t repetition = 0;
    metrics::AucTable source_before;   // source model, domain-A test, A labels
    metrics::AucTable source_after;    // adapted model, domain-A test, A labels
    metrics::AucTable target_initial;  // source model, domain-B test, shared labels
    metrics::AucTable target_after;    // adapted model, domain-B test, B labels
    metrics::LabelValues bwt;
    metrics::LabelValues fwt;
};

RunResult make_run_result(const std::string& strategy, std::size_t repetition, const ScoreFile& initial_source,
                          const ScoreFile& initial_target, const ScoreFile& adapted_source,
                          const ScoreFile& adapted_target);

struct MeanStd {
    double mean = 0.0;
    double std = 0.0;
    std::size_t count = 0;  // repetitions with a defined value
};

struct StrategySummary {
    std::string name;
    std::vector<std::optional<MeanStd>> source_auc;  // per source label, then average
    std::vector<std::optional<MeanStd>> target_auc;  // per target label, then average
    std::vector<double> bwt_per_repetition;          // label-mean BWT of each repetition
    std::vector<double> average_row_bwt;             // table-average difference per repetition
    metrics::Aggregate bwt;                          // over labels of the repetition-mean BWT
    double mean_bwt = 0.0;                           // mean of bwt_per_repetition
    double std_bwt = 0.0;
    double mean_average_row_bwt = 0.0;
    double mean_target_auc = 0.0;                    // mean over repetitions of target table averages
};

struct ExperimentSummary {
    std::size_t repetitions = 0;
    std::vector<std::size_t> source_labels;
    std::vector<std::size_t> target_labels;
    std::vector<std::size_t> shared_labels;
    std::vector<std::optional<MeanStd>> initial_source_auc;
    std::vector<std::optional<MeanStd>> initial_target_auc;  // shared labels
    std::vector<StrategySummary> strategies;
    metrics::Aggregate fwt;
    double mean_fwt = 0.0;
    std::vector<double> fwt_per_repetition;

    const StrategySummary& strategy(const std::string& name) const;
};

// Order-insensitive: results are sorted by (strategy order, repetition) first.
ExperimentSummary summarize(std::vector<RunResult> results, const std::vector<std::string>& strategy_order);

struct ReportFiles {
    std::string markdown;
    std::string json;
    std::string transfer_csv;
};

ReportFiles render_report(const ExperimentSummary& summary);
void evaluate_and_report(std::vector<RunResult> results, const std::vector<std::string>& strategy_order,
                         const std::filesystem::path& out_dir);

// Output-tree helpers.
std::filesystem::path score_path(const std::filesystem::path& out, std::size_t repetition, const std::string& model,
                                 data::Domain domain);
std::filesystem::path checkpoint_path(const std::filesystem::path& out, std::size_t repetition,
                                      const std::string& model);

// Datasets under out/data, generated and saved if absent, verified against the spec hash if present.
data::DomainPair load_or_generate(const ExperimentConfig& cfg, const std::filesystem::path& out);

// Stage 1 of one repetition; writes checkpoint, train record and scores.
Stage1Result train_repetition(const ExperimentConfig& cfg, const data::DomainPair& pair, std::size_t repetition,
                              const std::filesystem::path& out);
// Adaptation of one repetition from the saved stage-1 checkpoint; writes checkpoint, record, scores, extras.
void adapt_repetition(const ExperimentConfig& cfg, const data::DomainPair& pair, const StrategyConfig& strategy,
                      std::size_t repetition, const std::filesystem::path& out);

// Rebuilds every RunResult from the persisted score files.
std::vector<RunResult> collect_results(const ExperimentConfig& cfg, const std::filesystem::path& out);

// Full protocol: data, all repetitions (concurrently), scores, report.
void run_experiment(const ExperimentConfig& cfg, const std::filesystem::path& out);

}  // namespace cladapt::runner
