#include "cladapt/cli.hpp"

#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "cladapt/checkpoint.hpp"
#include "cladapt/errors.hpp"
#include "cladapt/runner.hpp"
#include "cladapt/util.hpp"

namespace cladapt::cli {

namespace fs = std::filesystem;
using runner::ExperimentConfig;

namespace {

struct CommonOptions {
    std::string config;
    std::string out;
    std::optional<std::uint64_t> seed;
};

struct AdaptOptions {
    std::string strategy;
    std::optional<double> lambda;
    std::optional<double> rho;
    std::optional<double> quantile;
    std::optional<double> fraction;
    bool classic = false;
};

void add_common(CLI::App* cmd, CommonOptions& o, bool out_required = true) {
    cmd->add_option("--config", o.config, "Experiment config (JSON)");
    auto* out = cmd->add_option("--out", o.out, "Output directory");
    if (out_required) out->required();
    cmd->add_option("--seed", o.seed, "Override the master seed");
}

// --config wins, then <out>/config.json, then built-in defaults.
ExperimentConfig resolve_config(const CommonOptions& o) {
    ExperimentConfig cfg;
    if (!o.config.empty()) {
        if (!fs::exists(o.config)) throw ConfigError("config file not found: " + o.config);
        cfg = ExperimentConfig::load(o.config);
    } else if (!o.out.empty() && fs::exists(fs::path(o.out) / "config.json")) {
        cfg = ExperimentConfig::load(fs::path(o.out) / "config.json");
    } else {
        cfg = ExperimentConfig::defaults();
    }
    if (o.seed) cfg.master_seed = *o.seed;
    cfg.validate();
    return cfg;
}

void save_config(const ExperimentConfig& cfg, const fs::path& out) {
    fs::create_directories(out);
    std::ofstream f(out / "config.json", std::ios::binary);
    f << cfg.to_json().dump(2) << '\n';
}

std::vector<std::size_t> repetitions_of(const ExperimentConfig& cfg, std::size_t rep) {
    if (rep > cfg.repetitions) throw ConfigError("repetition index exceeds configured repetitions");
    if (rep != 0) return {rep};
    std::vector<std::size_t> all;
    for (std::size_t r = 1; r <= cfg.repetitions; ++r) all.push_back(r);
    return all;
}

// Finds the strategy by name or slug, or creates one from a bare kind keyword, then applies overrides.
runner::StrategyConfig resolve_strategy(ExperimentConfig& cfg, const AdaptOptions& a) {
    runner::StrategyConfig* found = nullptr;
    for (auto& s : cfg.strategies)
        if (s.name == a.strategy || s.slug() == util::slugify(a.strategy)) found = &s;
    if (!found) {
        runner::StrategyConfig s;
        s.kind = runner::parse_kind(util::slugify(a.strategy));
        s.name = util::slugify(a.strategy);
        for (auto& c : s.name) c = static_cast<char>(std::toupper(static_cast<unsigned char>(c)));
        if (s.kind == runner::StrategyKind::Lwf) s.lambda = 2.0;
        if (s.kind == runner::StrategyKind::Ewc) s.lambda = 0.001;
        cfg.strategies.push_back(s);
        found = &cfg.strategies.back();
    }
    if (a.lambda) found->lambda = *a.lambda;
    if (a.rho && a.quantile) throw ConfigError("--rho and --quantile are mutually exclusive");
    if (a.rho) found->threshold = cl::ThresholdRule::absolute(*a.rho);
    if (a.quantile) found->threshold = cl::ThresholdRule::quantile(*a.quantile);
    if (a.fraction) found->fraction = *a.fraction;
    if (a.classic) found->classic_ewc = true;
    cfg.validate();
    return *found;
}

void print_summary(const runner::ExperimentSummary& sum, std::ostream& out) {
    out << "strategy,mean_bwt,mean_target_auc\n";
    for (const auto& s : sum.strategies)
        out << s.name << ',' << util::format_fixed(s.mean_bwt, 4) << ',' << util::format_fixed(s.mean_target_auc, 4)
            << '\n';
    out << "forward_transfer," << util::format_fixed(sum.mean_fwt, 4) << '\n';
}

}  // namespace

int run_cli(int argc, const char* const* argv, std::ostream& out, std::ostream& err) {
    CLI::App app{"Continual adaptation experiments: joint training, EWC and LWF on a two-domain benchmark",
                 "cladapt"};
    app.require_subcommand(1);

    CommonOptions gen_o, train_o, adapt_o, eval_o, report_o, run_o;
    std::size_t train_rep = 0, adapt_rep = 0, eval_rep = 0;
    AdaptOptions adapt_a;
    std::vector<std::string> run_strategies;
    std::optional<std::size_t> run_reps, run_threads;

    auto* gen = app.add_subcommand("generate", "Generate and save the two-domain benchmark");
    add_common(gen, gen_o);

    auto* train = app.add_subcommand("train", "Stage 1: train source models on domain A");
    add_common(train, train_o);
    train->add_option("--rep", train_rep, "Repetition index (default: all)");

    auto* adapt = app.add_subcommand("adapt", "Stage 2: adapt saved source models to domain B");
    add_common(adapt, adapt_o);
    adapt->add_option("--strategy", adapt_a.strategy, "Strategy name from the config, or jt/ewc/lwf")->required();
    adapt->add_option("--rep", adapt_rep, "Repetition index (default: all)");
    adapt->add_option("--lambda", adapt_a.lambda, "Regularization strength (EWC, LWF)");
    adapt->add_option("--rho", adapt_a.rho, "Absolute Fisher threshold (EWC)");
    adapt->add_option("--quantile", adapt_a.quantile, "Fisher quantile threshold (EWC)");
    adapt->add_option("--fraction", adapt_a.fraction, "Fraction of source groups replayed (JT)");
    adapt->add_flag("--classic", adapt_a.classic, "Magnitude-weighted EWC instead of binarized");

    auto* eval = app.add_subcommand("evaluate", "Score saved checkpoints on both test splits");
    add_common(eval, eval_o);
    eval->add_option("--rep", eval_rep, "Repetition index (default: all)");

    auto* report = app.add_subcommand("report", "Rebuild report.md/report.json from saved score files");
    add_common(report, report_o);

    auto* run = app.add_subcommand("run", "Full pipeline: generate, train, adapt, evaluate, report");
    add_common(run, run_o);
    run->add_option("--strategy", run_strategies, "Restrict to these strategies (repeatable)");
    run->add_option("--repetitions", run_reps, "Override the repetition count");
    run->add_option("--threads", run_threads, "Worker threads (0 = automatic)");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        if (e.get_exit_code() == 0) {
            out << app.help();
            return 0;
        }
        err << "error: " << e.what() << "\n\n" << app.help();
        return 2;
    }

    try {
        if (gen->parsed()) {
            const auto cfg = resolve_config(gen_o);
            save_config(cfg, gen_o.out);
            const auto pair = runner::load_or_generate(cfg, gen_o.out);
            out << "generated " << pair.a.size() << " domain-A and " << pair.b.size() << " domain-B samples\n";
        } else if (train->parsed()) {
            const auto cfg = resolve_config(train_o);
            save_config(cfg, train_o.out);
            const auto pair = runner::load_or_generate(cfg, train_o.out);
            for (auto rep : repetitions_of(cfg, train_rep)) {
                const auto s1 = runner::train_repetition(cfg, pair, rep, train_o.out);
                out << "rep " << rep << ": best epoch " << s1.record.best_epoch << ", val loss "
                    << util::format_fixed(s1.record.best().val_loss, 4) << '\n';
            }
        } else if (adapt->parsed()) {
            auto cfg = resolve_config(adapt_o);
            const auto strategy = resolve_strategy(cfg, adapt_a);
            save_config(cfg, adapt_o.out);
            const auto pair = runner::load_or_generate(cfg, adapt_o.out);
            for (auto rep : repetitions_of(cfg, adapt_rep)) {
                runner::adapt_repetition(cfg, pair, strategy, rep, adapt_o.out);
                out << "rep " << rep << ": adapted with " << strategy.name << '\n';
            }
        } else if (eval->parsed()) {
            const auto cfg = resolve_config(eval_o);
            const auto pair = runner::load_or_generate(cfg, eval_o.out);
            std::vector<runner::RunResult> results;
            for (auto rep : repetitions_of(cfg, eval_rep)) {
                const auto data = runner::prepare_repetition(cfg, pair, rep);
                std::vector<std::string> models = {"initial"};
                for (const auto& s : cfg.strategies) models.push_back(s.name);
                for (const auto& m : models) {
                    const auto ckpt = runner::checkpoint_path(eval_o.out, rep, m);
                    if (!fs::exists(ckpt)) throw std::runtime_error("missing checkpoint " + ckpt.string());
                    const auto model = io::load_model(ckpt);
                    runner::write_scores(runner::score_dataset(model, data.source.test),
                                         runner::score_path(eval_o.out, rep, m, data::Domain::A));
                    runner::write_scores(runner::score_dataset(model, data.target.test),
                                         runner::score_path(eval_o.out, rep, m, data::Domain::B));
                }
                const auto ia = runner::read_scores(runner::score_path(eval_o.out, rep, "initial", data::Domain::A));
                const auto ib = runner::read_scores(runner::score_path(eval_o.out, rep, "initial", data::Domain::B));
                for (const auto& s : cfg.strategies) {
                    results.push_back(runner::make_run_result(
                        s.name, rep, ia, ib, runner::read_scores(runner::score_path(eval_o.out, rep, s.name, data::Domain::A)),
                        runner::read_scores(runner::score_path(eval_o.out, rep, s.name, data::Domain::B))));
                }
            }
            print_summary(runner::summarize(results, cfg.strategy_names()), out);
        } else if (report->parsed()) {
            const auto cfg = resolve_config(report_o);
            auto results = runner::collect_results(cfg, report_o.out);
            print_summary(runner::summarize(results, cfg.strategy_names()), out);
            runner::evaluate_and_report(std::move(results), cfg.strategy_names(), report_o.out);
        } else if (run->parsed()) {
            auto cfg = resolve_config(run_o);
            if (run_reps) cfg.repetitions = *run_reps;
            if (run_threads) cfg.threads = *run_threads;
            if (!run_strategies.empty()) {
                std::vector<runner::StrategyConfig> kept;
                for (const auto& name : run_strategies) kept.push_back(cfg.strategy(name));
                cfg.strategies = std::move(kept);
            }
            cfg.validate();
            runner::run_experiment(cfg, run_o.out);
            print_summary(runner::summarize(runner::collect_results(cfg, run_o.out), cfg.strategy_names()), out);
        }
    } catch (const std::invalid_argument& e) {  // ConfigError, ShapeError
        err << "configuration error: " << e.what() << '\n';
        return 2;
    } catch (const std::exception& e) {
        err << "error: " << e.what() << '\n';
        return 1;
    }
    return 0;
}

}  // namespace cladapt::cli
