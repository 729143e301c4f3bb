#include "cladapt/runner.hpp"

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cmath>
#include <ctime>
#include <exception>
#include <fstream>
#include <map>
#include <sstream>
#include <thread>

#include "cladapt/checkpoint.hpp"
#include "cladapt/errors.hpp"
#include "cladapt/util.hpp"

namespace cladapt::runner {

using nlohmann::json;
namespace fs = std::filesystem;

std::string kind_name(StrategyKind kind) {
    switch (kind) {
        case StrategyKind::JointTraining: return "jt";
        case StrategyKind::Ewc: return "ewc";
        case StrategyKind::Lwf: return "lwf";
    }
    return "?";
}

StrategyKind parse_kind(const std::string& s) {
    if (s == "jt") return StrategyKind::JointTraining;
    if (s == "ewc") return StrategyKind::Ewc;
    if (s == "lwf") return StrategyKind::Lwf;
    throw ConfigError("unknown strategy kind '" + s + "' (expected jt, ewc or lwf)");
}

namespace {

void reject_unknown_keys(const json& j, std::initializer_list<const char*> known, const std::string& where) {
    if (!j.is_object()) throw ConfigError(where + " must be a JSON object");
    for (const auto& [key, _] : j.items()) {
        if (std::none_of(known.begin(), known.end(), [&](const char* k) { return key == k; }))
            throw ConfigError("unknown field '" + key + "' in " + where);
    }
}

template <typename F>
auto json_guard(const std::string& where, F&& f) {
    try {
        return f();
    } catch (const json::exception& e) {
        throw ConfigError(where + ": " + e.what());
    }
}

}  // namespace

std::string StrategyConfig::slug() const { return util::slugify(name); }

json StrategyConfig::to_json() const {
    json j = {{"name", name}, {"kind", kind_name(kind)}};
    switch (kind) {
        case StrategyKind::JointTraining: j["fraction"] = fraction; break;
        case StrategyKind::Ewc:
            j["lambda"] = lambda;
            j["threshold"] = {{"rule", threshold.kind == cl::ThresholdRule::Kind::Absolute ? "absolute" : "quantile"},
                              {"value", threshold.value}};
            j["classic"] = classic_ewc;
            break;
        case StrategyKind::Lwf:
            j["lambda"] = lambda;
            j["regularized_labels"] = regularized_labels;
            break;
    }
    return j;
}

StrategyConfig StrategyConfig::from_json(const json& j) {
    reject_unknown_keys(j, {"name", "kind", "fraction", "lambda", "threshold", "classic", "regularized_labels"},
                        "strategy");
    return json_guard("strategy", [&] {
        StrategyConfig s;
        s.name = j.at("name").get<std::string>();
        s.kind = parse_kind(j.at("kind").get<std::string>());
        s.fraction = j.value("fraction", 0.0);
        s.lambda = j.value("lambda", 0.0);
        s.classic_ewc = j.value("classic", false);
        s.regularized_labels = j.value("regularized_labels", std::string("source_unique"));
        if (j.contains("threshold")) {
            const auto& t = j.at("threshold");
            reject_unknown_keys(t, {"rule", "value"}, "strategy threshold");
            const auto rule = t.at("rule").get<std::string>();
            const double v = t.at("value").get<double>();
            if (rule == "absolute") s.threshold = cl::ThresholdRule::absolute(v);
            else if (rule == "quantile") s.threshold = cl::ThresholdRule::quantile(v);
            else throw ConfigError("threshold rule must be 'absolute' or 'quantile'");
        }
        return s;
    });
}

json StageConfig::to_json() const {
    return {{"learning_rate", sgd.learning_rate}, {"momentum", sgd.momentum},     {"weight_decay", sgd.weight_decay},
            {"batch_size", sgd.batch_size},       {"epochs", epochs},             {"lr_floor", lr_floor},
            {"plateau_factor", plateau_factor},   {"patience", patience},         {"min_delta", min_delta}};
}

StageConfig StageConfig::from_json(const json& j, const StageConfig& defaults) {
    reject_unknown_keys(j,
                        {"learning_rate", "momentum", "weight_decay", "batch_size", "epochs", "lr_floor",
                         "plateau_factor", "patience", "min_delta"},
                        "stage config");
    return json_guard("stage config", [&] {
        StageConfig s = defaults;
        s.sgd.learning_rate = j.value("learning_rate", s.sgd.learning_rate);
        s.sgd.momentum = j.value("momentum", s.sgd.momentum);
        s.sgd.weight_decay = j.value("weight_decay", s.sgd.weight_decay);
        s.sgd.batch_size = j.value("batch_size", s.sgd.batch_size);
        s.epochs = j.value("epochs", s.epochs);
        s.lr_floor = j.value("lr_floor", s.lr_floor);
        s.plateau_factor = j.value("plateau_factor", s.plateau_factor);
        s.patience = j.value("patience", s.patience);
        s.min_delta = j.value("min_delta", s.min_delta);
        return s;
    });
}

ExperimentConfig ExperimentConfig::defaults() {
    ExperimentConfig cfg;
    cfg.stage1.sgd.weight_decay = 1e-4;
    cfg.stage2.sgd.weight_decay = 0.0;
    for (int pct : {0, 20, 40, 60, 80, 100}) {
        StrategyConfig s;
        s.name = "JT-" + std::to_string(pct) + "%";
        s.kind = StrategyKind::JointTraining;
        s.fraction = pct / 100.0;
        cfg.strategies.push_back(s);
    }
    StrategyConfig ewc;
    ewc.name = "EWC";
    ewc.kind = StrategyKind::Ewc;
    ewc.lambda = 0.1;
    ewc.threshold = cl::ThresholdRule::quantile(0.5);
    cfg.strategies.push_back(ewc);
    StrategyConfig lwf;
    lwf.name = "LWF";
    lwf.kind = StrategyKind::Lwf;
    lwf.lambda = 2.0;
    cfg.strategies.push_back(lwf);
    return cfg;
}

void ExperimentConfig::validate() const {
    if (repetitions < 1) throw ConfigError("repetitions must be at least 1");
    benchmark.validate();
    data::SplitSpec{test_fraction, validation_fraction, master_seed}.validate();
    for (auto h : hidden)
        if (h == 0) throw ConfigError("hidden layer widths must be positive");
    for (const auto* stage : {&stage1, &stage2}) {
        stage->sgd.validate();
        if (stage->epochs < 1) throw ConfigError("epochs must be at least 1");
        optim::PlateauSchedule s;
        s.current_lr = stage->sgd.learning_rate;
        s.factor = stage->plateau_factor;
        s.patience = stage->patience;
        s.min_delta = stage->min_delta;
        s.validate();
    }
    if (strategies.empty()) throw ConfigError("no strategy configured");
    std::vector<std::string> slugs;
    for (const auto& s : strategies) {
        if (s.name.empty() || s.slug().empty()) throw ConfigError("strategy names must contain letters or digits");
        if (s.slug() == "initial") throw ConfigError("strategy name 'initial' is reserved");
        if (std::find(slugs.begin(), slugs.end(), s.slug()) != slugs.end())
            throw ConfigError("duplicate strategy name '" + s.name + "'");
        slugs.push_back(s.slug());
        switch (s.kind) {
            case StrategyKind::JointTraining:
                if (!(s.fraction >= 0.0 && s.fraction <= 1.0)) throw ConfigError("JT fraction must lie in [0,1]");
                break;
            case StrategyKind::Ewc:
                if (!(s.lambda >= 0.0)) throw ConfigError("EWC lambda must be nonnegative");
                s.threshold.validate();
                break;
            case StrategyKind::Lwf:
                if (!(s.lambda >= 0.0)) throw ConfigError("LWF lambda must be nonnegative");
                if (s.regularized_labels != "source_unique" && s.regularized_labels != "source_all")
                    throw ConfigError("regularized_labels must be 'source_unique' or 'source_all'");
                break;
        }
    }
}

json ExperimentConfig::to_json() const {
    json strategies_json = json::array();
    for (const auto& s : strategies) strategies_json.push_back(s.to_json());
    return {{"schema_version", kSchemaVersion},
            {"master_seed", master_seed},
            {"repetitions", repetitions},
            {"threads", threads},
            {"benchmark", benchmark.to_json()},
            {"split", {{"test_fraction", test_fraction}, {"validation_fraction", validation_fraction}}},
            {"model", {{"hidden", hidden}}},
            {"stage1", stage1.to_json()},
            {"stage2", stage2.to_json()},
            {"strategies", strategies_json}};
}

ExperimentConfig ExperimentConfig::from_json(const json& j) {
    reject_unknown_keys(j,
                        {"schema_version", "master_seed", "repetitions", "threads", "benchmark", "split", "model",
                         "stage1", "stage2", "strategies"},
                        "experiment config");
    auto cfg = defaults();
    json_guard("experiment config", [&] {
        const int version = j.value("schema_version", kSchemaVersion);
        if (version != kSchemaVersion)
            throw ConfigError("unsupported config schema_version " + std::to_string(version));
        cfg.master_seed = j.value("master_seed", cfg.master_seed);
        cfg.repetitions = j.value("repetitions", cfg.repetitions);
        cfg.threads = j.value("threads", cfg.threads);
        if (j.contains("benchmark")) cfg.benchmark = data::BenchmarkSpec::from_json(j.at("benchmark"));
        if (j.contains("split")) {
            const auto& s = j.at("split");
            reject_unknown_keys(s, {"test_fraction", "validation_fraction"}, "split");
            cfg.test_fraction = s.value("test_fraction", cfg.test_fraction);
            cfg.validation_fraction = s.value("validation_fraction", cfg.validation_fraction);
        }
        if (j.contains("model")) {
            const auto& m = j.at("model");
            reject_unknown_keys(m, {"hidden"}, "model");
            cfg.hidden = m.value("hidden", cfg.hidden);
        }
        if (j.contains("stage1")) cfg.stage1 = StageConfig::from_json(j.at("stage1"), cfg.stage1);
        if (j.contains("stage2")) cfg.stage2 = StageConfig::from_json(j.at("stage2"), cfg.stage2);
        if (j.contains("strategies")) {
            cfg.strategies.clear();
            for (const auto& s : j.at("strategies")) cfg.strategies.push_back(StrategyConfig::from_json(s));
        }
        return 0;
    });
    cfg.validate();
    return cfg;
}

ExperimentConfig ExperimentConfig::load(const fs::path& path) {
    std::ifstream in(path);
    if (!in) throw ConfigError("cannot open config file " + path.string());
    json j;
    try {
        in >> j;
    } catch (const json::exception& e) {
        throw ConfigError("config file " + path.string() + " is not valid JSON: " + e.what());
    }
    return from_json(j);
}

std::string ExperimentConfig::hash() const { return util::hex64(util::fnv1a64(to_json().dump())); }

const StrategyConfig& ExperimentConfig::strategy(const std::string& name_or_slug) const {
    for (const auto& s : strategies)
        if (s.name == name_or_slug || s.slug() == name_or_slug) return s;
    throw ConfigError("no strategy named '" + name_or_slug + "' in config");
}

std::vector<std::string> ExperimentConfig::strategy_names() const {
    std::vector<std::string> out;
    for (const auto& s : strategies) out.push_back(s.name);
    return out;
}

std::uint64_t repetition_seed(const ExperimentConfig& cfg, std::size_t repetition) {
    return cfg.master_seed + repetition;
}

RepetitionData prepare_repetition(const ExperimentConfig& cfg, const data::DomainPair& pair, std::size_t repetition) {
    const auto rep_seed = repetition_seed(cfg, repetition);
    auto split_for = [&](const data::Dataset& ds, const char* domain) {
        data::SplitSpec spec{cfg.test_fraction, cfg.validation_fraction, util::derive_seed(cfg.master_seed, domain)};
        return data::split(ds, spec, util::derive_seed(rep_seed, domain));
    };
    return {split_for(pair.a, "A"), split_for(pair.b, "B")};
}

namespace {

optim::TrainOptions options_for(const StageConfig& stage, std::uint64_t seed, std::optional<nn::LabelMask> mask) {
    optim::TrainOptions o;
    o.sgd = stage.sgd;
    o.epochs = stage.epochs;
    o.lr_floor = stage.lr_floor;
    o.seed = seed;
    o.mask = std::move(mask);
    return o;
}

optim::PlateauSchedule schedule_for(const StageConfig& stage) {
    auto s = optim::PlateauSchedule::starting_at(stage.sgd.learning_rate, stage.plateau_factor);
    s.patience = stage.patience;
    s.min_delta = stage.min_delta;
    return s;
}

}  // namespace

Stage1Result run_stage1(const ExperimentConfig& cfg, const RepetitionData& data, std::size_t repetition) {
    const auto rep_seed = repetition_seed(cfg, repetition);
    nn::MlpArchitecture arch{cfg.benchmark.feature_dim, cfg.hidden, data::kLabelCount};
    nn::MlpModel model(arch, util::derive_seed(rep_seed, "init"));
    auto record = optim::train_loop(model, data.source.train, data.source.validation,
                                    options_for(cfg.stage1, util::derive_seed(rep_seed, "stage1"),
                                                data::domain_mask(data::Domain::A)),
                                    schedule_for(cfg.stage1));
    return {std::move(model), std::move(record)};
}

AdaptResult run_adaptation(const nn::MlpModel& source_model, const StrategyConfig& strategy,
                           const ExperimentConfig& cfg, const RepetitionData& data, std::size_t repetition) {
    const auto rep_seed = repetition_seed(cfg, repetition);
    const auto train_seed = util::derive_seed(rep_seed, "stage2");
    const auto target_mask = data::domain_mask(data::Domain::B);
    AdaptResult out{source_model, {}, {}, {}, {}};
    switch (strategy.kind) {
        case StrategyKind::JointTraining: {
            const auto combined = cl::jt_mix(data.source.train, data.target.train, strategy.fraction,
                                             util::derive_seed(rep_seed, "jt"));
            // per-sample masks on the mixture, B's labels on B's validation split
            auto opts = options_for(cfg.stage2, train_seed, std::nullopt);
            out.record = optim::train_loop(out.model, combined, data.target.validation, opts, schedule_for(cfg.stage2));
            break;
        }
        case StrategyKind::Ewc: {
            const auto fisher =
                cl::fisher_diagonal(source_model, data.source.train, data::domain_mask(data::Domain::A));
            auto prior = strategy.classic_ewc
                             ? cl::GaussianPrior::classic_from(source_model.get_parameters(), fisher, strategy.lambda)
                             : cl::GaussianPrior::binarized_from(source_model.get_parameters(), fisher,
                                                                 strategy.threshold, strategy.lambda);
            cl::EwcRegularizer reg(prior);
            out.record = optim::train_loop(out.model, data.target.train, data.target.validation,
                                           options_for(cfg.stage2, train_seed, target_mask), schedule_for(cfg.stage2),
                                           &reg);
            out.fisher = fisher;
            out.prior = std::move(prior);
            break;
        }
        case StrategyKind::Lwf: {
            const auto regularized = strategy.regularized_labels == "source_all"
                                         ? data::domain_mask(data::Domain::A)
                                         : nn::LabelMask::from_indices(data::kLabelCount,
                                                                       data::unique_labels(data::Domain::A));
            auto soft = cl::record_soft_targets(source_model, data.target.train, regularized);
            cl::LwfRegularizer reg(soft, strategy.lambda, data.target.train);
            out.record = optim::train_loop(out.model, data.target.train, data.target.validation,
                                           options_for(cfg.stage2, train_seed, target_mask), schedule_for(cfg.stage2),
                                           &reg);
            out.soft_targets = std::move(soft);
            break;
        }
    }
    return out;
}

ScoreFile score_dataset(const nn::MlpModel& model, const data::Dataset& dataset) {
    return {dataset.sample_ids, dataset.group_ids, model.predict(dataset.features), dataset.labels, dataset.presence};
}

void write_scores(const ScoreFile& s, const fs::path& path) {
    if (path.has_parent_path()) fs::create_directories(path.parent_path());
    std::ofstream out(path, std::ios::binary);
    if (!out) throw std::runtime_error("cannot open " + path.string() + " for writing");
    const auto labels = s.scores.cols();
    out << "sample_id,group_id";
    for (const char* p : {"s_", "y_", "m_"})
        for (Eigen::Index c = 0; c < labels; ++c) out << ',' << p << c;
    out << '\n';
    for (std::size_t i = 0; i < s.sample_ids.size(); ++i) {
        const auto r = static_cast<Eigen::Index>(i);
        out << s.sample_ids[i] << ',' << s.group_ids[i];
        for (Eigen::Index c = 0; c < labels; ++c) out << ',' << util::format_double(s.scores(r, c));
        for (Eigen::Index c = 0; c < labels; ++c) out << ',' << (s.labels(r, c) != 0.0 ? '1' : '0');
        for (Eigen::Index c = 0; c < labels; ++c) out << ',' << (s.presence(r, c) != 0.0 ? '1' : '0');
        out << '\n';
    }
    if (!out) throw std::runtime_error("failed writing " + path.string());
}

ScoreFile read_scores(const fs::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IntegrityError("missing score file " + path.string());
    std::string line;
    if (!std::getline(in, line)) throw IntegrityError("empty score file " + path.string());
    const auto header = util::split_csv(line);
    if (header.size() < 5 || (header.size() - 2) % 3 != 0 || header[0] != "sample_id")
        throw IntegrityError("malformed score header in " + path.string());
    const auto labels = static_cast<Eigen::Index>((header.size() - 2) / 3);
    std::vector<std::vector<std::string>> rows;
    while (std::getline(in, line)) {
        if (line.empty()) continue;
        rows.push_back(util::split_csv(line));
        if (rows.back().size() != header.size()) throw IntegrityError("score row with wrong width in " + path.string());
    }
    ScoreFile s;
    const auto n = static_cast<Eigen::Index>(rows.size());
    s.scores.resize(n, labels);
    s.labels.resize(n, labels);
    s.presence.resize(n, labels);
    for (Eigen::Index r = 0; r < n; ++r) {
        const auto& cells = rows[static_cast<std::size_t>(r)];
        s.sample_ids.push_back(util::parse_int(cells[0]));
        s.group_ids.push_back(util::parse_int(cells[1]));
        for (Eigen::Index c = 0; c < labels; ++c) {
            s.scores(r, c) = util::parse_double(cells[static_cast<std::size_t>(2 + c)]);
            s.labels(r, c) = util::parse_double(cells[static_cast<std::size_t>(2 + labels + c)]);
            s.presence(r, c) = util::parse_double(cells[static_cast<std::size_t>(2 + 2 * labels + c)]);
        }
    }
    return s;
}

RunResult make_run_result(const std::string& strategy, std::size_t repetition, const ScoreFile& initial_source,
                          const ScoreFile& initial_target, const ScoreFile& adapted_source,
                          const ScoreFile& adapted_target) {
    if (initial_source.sample_ids != adapted_source.sample_ids || initial_target.sample_ids != adapted_target.sample_ids)
        throw IntegrityError("score files of one repetition cover different test samples");
    const auto source_labels = data::domain_mask(data::Domain::A);
    const auto target_labels = data::domain_mask(data::Domain::B);
    RunResult r;
    r.strategy = strategy;
    r.repetition = repetition;
    r.source_before =
        metrics::auc_table(initial_source.scores, initial_source.labels, initial_source.presence, source_labels);
    r.source_after =
        metrics::auc_table(adapted_source.scores, adapted_source.labels, adapted_source.presence, source_labels);
    r.target_initial = metrics::auc_table(initial_target.scores, initial_target.labels, initial_target.presence,
                                          data::shared_mask());
    r.target_after =
        metrics::auc_table(adapted_target.scores, adapted_target.labels, adapted_target.presence, target_labels);
    r.bwt = metrics::backward_transfer(r.source_before, r.source_after);
    r.fwt = metrics::forward_transfer(r.target_initial);
    return r;
}

namespace {

double mean_of(const std::vector<double>& v) {
    double s = 0.0;
    for (double x : v) s += x;
    return v.empty() ? 0.0 : s / static_cast<double>(v.size());
}

// Population standard deviation; 0 for a single value.
double std_of(const std::vector<double>& v) {
    if (v.size() < 2) return 0.0;
    const double m = mean_of(v);
    double s = 0.0;
    for (double x : v) s += (x - m) * (x - m);
    return std::sqrt(s / static_cast<double>(v.size()));
}

std::optional<MeanStd> mean_std(const std::vector<double>& v) {
    if (v.empty()) return std::nullopt;
    return MeanStd{mean_of(v), std_of(v), v.size()};
}

// Per label of `labels` (then one extra entry for the table average) across tables.
std::vector<std::optional<MeanStd>> table_stats(const std::vector<const metrics::AucTable*>& tables,
                                                const std::vector<std::size_t>& labels) {
    std::vector<std::optional<MeanStd>> out;
    for (std::size_t i = 0; i < labels.size(); ++i) {
        std::vector<double> v;
        for (const auto* t : tables) {
            if (t->labels != labels) throw IntegrityError("inconsistent label sets across results");
            if (t->defined[i]) v.push_back(t->values[i]);
        }
        out.push_back(mean_std(v));
    }
    std::vector<double> avgs;
    for (const auto* t : tables)
        if (auto a = t->average()) avgs.push_back(*a);
    out.push_back(mean_std(avgs));
    return out;
}

}  // namespace

const StrategySummary& ExperimentSummary::strategy(const std::string& name) const {
    for (const auto& s : strategies)
        if (s.name == name) return s;
    throw ConfigError("summary has no strategy '" + name + "'");
}

ExperimentSummary summarize(std::vector<RunResult> results, const std::vector<std::string>& strategy_order) {
    if (results.empty()) throw ConfigError("no completed repetition to report");
    auto rank = [&](const std::string& name) {
        auto it = std::find(strategy_order.begin(), strategy_order.end(), name);
        if (it == strategy_order.end()) throw IntegrityError("result for unknown strategy '" + name + "'");
        return static_cast<std::size_t>(it - strategy_order.begin());
    };
    std::sort(results.begin(), results.end(), [&](const RunResult& a, const RunResult& b) {
        return std::pair(rank(a.strategy), a.repetition) < std::pair(rank(b.strategy), b.repetition);
    });

    std::map<std::string, std::vector<const RunResult*>> by_strategy;
    for (const auto& r : results) by_strategy[r.strategy].push_back(&r);
    std::vector<std::size_t> reps;
    for (const auto* r : by_strategy.begin()->second) reps.push_back(r->repetition);
    for (const auto& [name, rs] : by_strategy) {
        std::vector<std::size_t> mine;
        for (const auto* r : rs) mine.push_back(r->repetition);
        if (mine != reps) throw IntegrityError("strategy '" + name + "' covers a different set of repetitions");
        for (std::size_t i = 1; i < mine.size(); ++i)
            if (mine[i] == mine[i - 1]) throw IntegrityError("duplicate result for strategy '" + name + "'");
    }

    ExperimentSummary sum;
    sum.repetitions = reps.size();
    const auto& first = results.front();
    sum.source_labels = first.source_before.labels;
    sum.target_labels = first.target_after.labels;
    sum.shared_labels = first.target_initial.labels;

    // the initial model is shared by all strategies of a repetition; take it from the first strategy
    const auto& lead = by_strategy.at(results.front().strategy);
    std::vector<const metrics::AucTable*> init_src, init_tgt;
    for (const auto* r : lead) {
        init_src.push_back(&r->source_before);
        init_tgt.push_back(&r->target_initial);
    }
    sum.initial_source_auc = table_stats(init_src, sum.source_labels);
    sum.initial_target_auc = table_stats(init_tgt, sum.shared_labels);
    for (const auto* r : lead) {
        const auto fwt = metrics::aggregate(r->fwt);
        sum.fwt_per_repetition.push_back(fwt.mean);
    }
    sum.mean_fwt = mean_of(sum.fwt_per_repetition);
    {
        // per-label FWT averaged over repetitions, then min/mean/max over labels
        std::vector<double> per_label;
        for (std::size_t i = 0; i < sum.shared_labels.size(); ++i) {
            std::vector<double> v;
            for (const auto* r : lead)
                if (r->fwt.defined[i]) v.push_back(r->fwt.values[i]);
            if (!v.empty()) per_label.push_back(mean_of(v));
        }
        sum.fwt = metrics::aggregate(per_label);
    }

    for (const auto& name : strategy_order) {
        auto it = by_strategy.find(name);
        if (it == by_strategy.end()) continue;
        const auto& rs = it->second;
        StrategySummary s;
        s.name = name;
        std::vector<const metrics::AucTable*> src, tgt;
        for (const auto* r : rs) {
            if (r->bwt.labels != sum.source_labels || r->target_after.labels != sum.target_labels)
                throw IntegrityError("inconsistent label sets across results");
            src.push_back(&r->source_after);
            tgt.push_back(&r->target_after);
            s.bwt_per_repetition.push_back(metrics::aggregate(r->bwt).mean);
            s.average_row_bwt.push_back(metrics::average_backward_transfer(r->source_before, r->source_after));
        }
        s.source_auc = table_stats(src, sum.source_labels);
        s.target_auc = table_stats(tgt, sum.target_labels);
        std::vector<double> per_label;
        for (std::size_t i = 0; i < sum.source_labels.size(); ++i) {
            std::vector<double> v;
            for (const auto* r : rs)
                if (r->bwt.defined[i]) v.push_back(r->bwt.values[i]);
            if (!v.empty()) per_label.push_back(mean_of(v));
        }
        s.bwt = metrics::aggregate(per_label);
        s.mean_bwt = mean_of(s.bwt_per_repetition);
        s.std_bwt = std_of(s.bwt_per_repetition);
        s.mean_average_row_bwt = mean_of(s.average_row_bwt);
        s.mean_target_auc = s.target_auc.back() ? s.target_auc.back()->mean : 0.0;
        sum.strategies.push_back(std::move(s));
    }
    return sum;
}

namespace {

// Four decimals without the leading zero, as in ".8106" or "-.0398".
std::string short4(double v) {
    auto s = util::format_fixed(v, 4);
    if (s.rfind("0.", 0) == 0) s.erase(0, 1);
    else if (s.rfind("-0.", 0) == 0) s.erase(1, 1);
    return s;
}

std::string cell(const std::optional<MeanStd>& v) {
    if (!v) return "";
    return short4(v->mean) + "±" + short4(v->std);
}

json stats_json(const std::vector<std::optional<MeanStd>>& stats, const std::vector<std::size_t>& labels) {
    json out = json::object();
    for (std::size_t i = 0; i <= labels.size(); ++i) {
        const auto key = i < labels.size() ? data::label_name(labels[i]) : std::string("average");
        if (stats[i]) out[key] = {{"mean", stats[i]->mean}, {"std", stats[i]->std}, {"n", stats[i]->count}};
        else out[key] = nullptr;
    }
    return out;
}

json aggregate_json(const metrics::Aggregate& a) { return {{"min", a.min}, {"mean", a.mean}, {"max", a.max}}; }

}  // namespace

ReportFiles render_report(const ExperimentSummary& sum) {
    using ojson = nlohmann::ordered_json;
    ReportFiles files;
    std::ostringstream md;
    md << "# Continual adaptation report\n\n";
    md << "Mean AUC ± standard deviation over " << sum.repetitions
       << " repetition(s). Upper block: source domain A test split. Lower block: target domain B test split. "
          "Initial is the source model before adaptation.\n\n";
    md << "| Domain | Label | Initial |";
    for (const auto& s : sum.strategies) md << ' ' << s.name << " |";
    md << "\n|:--|:--|--:|";
    for (std::size_t i = 0; i < sum.strategies.size(); ++i) md << "--:|";
    md << '\n';

    for (std::size_t i = 0; i <= sum.source_labels.size(); ++i) {
        const bool avg = i == sum.source_labels.size();
        md << "| A | " << (avg ? std::string("Average") : data::label_name(sum.source_labels[i])) << " | "
           << cell(sum.initial_source_auc[i]) << " |";
        for (const auto& s : sum.strategies) md << ' ' << cell(s.source_auc[i]) << " |";
        md << '\n';
    }
    for (std::size_t i = 0; i <= sum.target_labels.size(); ++i) {
        const bool avg = i == sum.target_labels.size();
        std::optional<MeanStd> initial;
        if (avg) {
            initial = sum.initial_target_auc.back();
        } else {
            auto it = std::find(sum.shared_labels.begin(), sum.shared_labels.end(), sum.target_labels[i]);
            if (it != sum.shared_labels.end())
                initial = sum.initial_target_auc[static_cast<std::size_t>(it - sum.shared_labels.begin())];
        }
        md << "| B | " << (avg ? std::string("Average") : data::label_name(sum.target_labels[i])) << " | "
           << cell(initial) << " |";
        for (const auto& s : sum.strategies) md << ' ' << cell(s.target_auc[i]) << " |";
        md << '\n';
    }

    md << "\n## Backward transfer on domain A\n\n";
    md << "Per-label AUC change after adaptation, averaged over repetitions; min/mean/max taken over labels. "
          "Std is the spread of the label-mean across repetitions. Average-row is the change of the table average.\n\n";
    md << "| Strategy | Min | Mean | Max | Std | Average-row |\n|:--|--:|--:|--:|--:|--:|\n";
    for (const auto& s : sum.strategies) {
        md << "| " << s.name << " | " << short4(s.bwt.min) << " | " << short4(s.bwt.mean) << " | " << short4(s.bwt.max)
           << " | " << short4(s.std_bwt) << " | " << short4(s.mean_average_row_bwt) << " |\n";
    }
    md << "\n## Forward transfer on domain B\n\n";
    md << "Source model AUC on the unseen target domain minus 0.5, shared labels.\n\n";
    md << "| Min | Mean | Max |\n|--:|--:|--:|\n";
    md << "| " << short4(sum.fwt.min) << " | " << short4(sum.fwt.mean) << " | " << short4(sum.fwt.max) << " |\n";
    files.markdown = md.str();

    ojson j;
    j["schema_version"] = kSchemaVersion;
    j["repetitions"] = sum.repetitions;
    std::vector<std::string> names;
    for (const auto& s : sum.strategies) names.push_back(s.name);
    j["strategies"] = names;
    j["initial"] = {{"source_auc", stats_json(sum.initial_source_auc, sum.source_labels)},
                    {"target_auc", stats_json(sum.initial_target_auc, sum.shared_labels)}};
    j["forward_transfer"] = aggregate_json(sum.fwt);
    j["forward_transfer"]["per_repetition"] = sum.fwt_per_repetition;
    ojson per_strategy = ojson::object();
    for (const auto& s : sum.strategies) {
        ojson e;
        e["source_auc"] = stats_json(s.source_auc, sum.source_labels);
        e["target_auc"] = stats_json(s.target_auc, sum.target_labels);
        e["backward_transfer"] = aggregate_json(s.bwt);
        e["backward_transfer"]["std_over_repetitions"] = s.std_bwt;
        e["backward_transfer"]["per_repetition"] = s.bwt_per_repetition;
        e["backward_transfer"]["average_row"] = s.mean_average_row_bwt;
        per_strategy[s.name] = e;
    }
    j["results"] = per_strategy;
    files.json = j.dump(2) + "\n";

    std::ostringstream csv;
    csv << "measure,strategy,min,mean,max,std_over_repetitions\n";
    for (const auto& s : sum.strategies) {
        csv << "bwt," << s.name << ',' << util::format_double(s.bwt.min) << ',' << util::format_double(s.bwt.mean)
            << ',' << util::format_double(s.bwt.max) << ',' << util::format_double(s.std_bwt) << '\n';
    }
    csv << "fwt,Initial," << util::format_double(sum.fwt.min) << ',' << util::format_double(sum.fwt.mean) << ','
        << util::format_double(sum.fwt.max) << ',' << util::format_double(std_of(sum.fwt_per_repetition)) << '\n';
    files.transfer_csv = csv.str();
    return files;
}

namespace {

void write_text(const fs::path& path, const std::string& text) {
    if (path.has_parent_path()) fs::create_directories(path.parent_path());
    std::ofstream out(path, std::ios::binary);
    if (!out) throw std::runtime_error("cannot open " + path.string() + " for writing");
    out << text;
}

std::string rep_prefix(std::size_t repetition) { return "rep" + std::to_string(repetition); }

}  // namespace

void evaluate_and_report(std::vector<RunResult> results, const std::vector<std::string>& strategy_order,
                         const fs::path& out_dir) {
    for (const auto& r : results) {
        const auto stem = out_dir / "tables" / (rep_prefix(r.repetition) + "_" + util::slugify(r.strategy));
        metrics::write_label_values_csv(r.source_after, stem.string() + "_source_auc.csv", &data::label_name);
        metrics::write_label_values_csv(r.target_after, stem.string() + "_target_auc.csv", &data::label_name);
        metrics::write_label_values_csv(r.bwt, stem.string() + "_bwt.csv", &data::label_name);
        const auto init = out_dir / "tables" / (rep_prefix(r.repetition) + "_initial");
        metrics::write_label_values_csv(r.source_before, init.string() + "_source_auc.csv", &data::label_name);
        metrics::write_label_values_csv(r.fwt, init.string() + "_fwt.csv", &data::label_name);
    }
    const auto files = render_report(summarize(std::move(results), strategy_order));
    write_text(out_dir / "report.md", files.markdown);
    write_text(out_dir / "report.json", files.json);
    write_text(out_dir / "transfer.csv", files.transfer_csv);
}

fs::path score_path(const fs::path& out, std::size_t repetition, const std::string& model, data::Domain domain) {
    return out / "scores" /
           (rep_prefix(repetition) + "_" + util::slugify(model) + "_" + data::domain_letter(domain) + ".csv");
}

fs::path checkpoint_path(const fs::path& out, std::size_t repetition, const std::string& model) {
    return out / "checkpoints" / (rep_prefix(repetition) + "_" + util::slugify(model) + ".ckpt");
}

data::DomainPair load_or_generate(const ExperimentConfig& cfg, const fs::path& out) {
    const auto a_path = out / "data" / "A.csv";
    const auto b_path = out / "data" / "B.csv";
    const auto hash = cfg.benchmark.hash();
    if (fs::exists(a_path) && fs::exists(b_path))
        return {data::load_dataset(a_path, hash), data::load_dataset(b_path, hash)};
    auto pair = data::generate(cfg.benchmark);
    data::save_dataset(pair.a, a_path, hash, cfg.benchmark.seed);
    data::save_dataset(pair.b, b_path, hash, cfg.benchmark.seed);
    return pair;
}

namespace {

void write_stage1_outputs(const Stage1Result& s1, const RepetitionData& data, std::size_t repetition,
                          const fs::path& out) {
    io::save_model(s1.model, checkpoint_path(out, repetition, "initial"));
    optim::write_train_record_csv(s1.record,
                                  out / "checkpoints" / (rep_prefix(repetition) + "_initial_train.csv"));
    write_scores(score_dataset(s1.model, data.source.test), score_path(out, repetition, "initial", data::Domain::A));
    write_scores(score_dataset(s1.model, data.target.test), score_path(out, repetition, "initial", data::Domain::B));
}

void adapt_and_write(const nn::MlpModel& source, const ExperimentConfig& cfg, const RepetitionData& data,
                     const StrategyConfig& strategy, std::size_t repetition, const fs::path& out) {
    const auto result = run_adaptation(source, strategy, cfg, data, repetition);
    const auto stem = rep_prefix(repetition) + "_" + strategy.slug();
    io::save_model(result.model, checkpoint_path(out, repetition, strategy.name));
    optim::write_train_record_csv(result.record, out / "checkpoints" / (stem + "_train.csv"));
    if (result.fisher) cl::save_fisher(*result.fisher, out / "checkpoints" / (stem + "_fisher.params"));
    if (result.prior) cl::save_prior(*result.prior, out / "checkpoints" / (stem + "_prior.params"));
    if (result.soft_targets)
        cl::save_soft_targets(*result.soft_targets, out / "checkpoints" / (stem + "_soft_targets.csv"));
    write_scores(score_dataset(result.model, data.source.test),
                 score_path(out, repetition, strategy.name, data::Domain::A));
    write_scores(score_dataset(result.model, data.target.test),
                 score_path(out, repetition, strategy.name, data::Domain::B));
}

void write_config(const ExperimentConfig& cfg, const fs::path& out) {
    write_text(out / "config.json", cfg.to_json().dump(2) + "\n");
}

}  // namespace

Stage1Result train_repetition(const ExperimentConfig& cfg, const data::DomainPair& pair, std::size_t repetition,
                              const fs::path& out) {
    const auto data = prepare_repetition(cfg, pair, repetition);
    auto s1 = run_stage1(cfg, data, repetition);
    write_stage1_outputs(s1, data, repetition, out);
    return s1;
}

void adapt_repetition(const ExperimentConfig& cfg, const data::DomainPair& pair, const StrategyConfig& strategy,
                      std::size_t repetition, const fs::path& out) {
    const auto ckpt = checkpoint_path(out, repetition, "initial");
    if (!fs::exists(ckpt))
        throw std::runtime_error("stage-1 checkpoint " + ckpt.string() + " not found; run 'train' first");
    const auto source = io::load_model(ckpt);
    adapt_and_write(source, cfg, prepare_repetition(cfg, pair, repetition), strategy, repetition, out);
}

std::vector<RunResult> collect_results(const ExperimentConfig& cfg, const fs::path& out) {
    std::vector<RunResult> results;
    for (std::size_t rep = 1; rep <= cfg.repetitions; ++rep) {
        const auto init_a = read_scores(score_path(out, rep, "initial", data::Domain::A));
        const auto init_b = read_scores(score_path(out, rep, "initial", data::Domain::B));
        for (const auto& s : cfg.strategies) {
            results.push_back(make_run_result(s.name, rep, init_a, init_b,
                                              read_scores(score_path(out, rep, s.name, data::Domain::A)),
                                              read_scores(score_path(out, rep, s.name, data::Domain::B))));
        }
    }
    return results;
}

namespace {

std::string utc_now() {
    const auto t = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
    std::tm tm{};
    gmtime_r(&t, &tm);
    char buf[32];
    std::strftime(buf, sizeof(buf), "%Y-%m-%dT%H:%M:%SZ", &tm);
    return buf;
}

}  // namespace

void run_experiment(const ExperimentConfig& cfg, const fs::path& out) {
    cfg.validate();
    const auto started = utc_now();
    fs::create_directories(out);
    write_config(cfg, out);
    const auto pair = load_or_generate(cfg, out);

    std::size_t workers = cfg.threads;
    if (workers == 0) workers = std::max<std::size_t>(1, std::thread::hardware_concurrency());
    workers = std::min(workers, cfg.repetitions);

    std::vector<std::exception_ptr> errors(cfg.repetitions);
    std::atomic<std::size_t> next{0};
    auto work = [&] {
        for (std::size_t i = next++; i < cfg.repetitions; i = next++) {
            const std::size_t rep = i + 1;
            try {
                const auto data = prepare_repetition(cfg, pair, rep);
                const auto s1 = run_stage1(cfg, data, rep);
                write_stage1_outputs(s1, data, rep, out);
                for (const auto& s : cfg.strategies) adapt_and_write(s1.model, cfg, data, s, rep, out);
            } catch (...) {
                errors[i] = std::current_exception();
            }
        }
    };
    std::vector<std::thread> pool;
    for (std::size_t t = 1; t < workers; ++t) pool.emplace_back(work);
    work();
    for (auto& t : pool) t.join();
    for (const auto& e : errors)
        if (e) std::rethrow_exception(e);

    evaluate_and_report(collect_results(cfg, out), cfg.strategy_names(), out);

    json seeds = json::array();
    for (std::size_t rep = 1; rep <= cfg.repetitions; ++rep) seeds.push_back(repetition_seed(cfg, rep));
    const json provenance = {{"config_hash", cfg.hash()},
                             {"benchmark_hash", cfg.benchmark.hash()},
                             {"master_seed", cfg.master_seed},
                             {"repetition_seeds", seeds},
                             {"started_at", started},
                             {"finished_at", utc_now()}};
    write_text(out / "provenance.json", provenance.dump(2) + "\n");
}

}  // namespace cladapt::runner
