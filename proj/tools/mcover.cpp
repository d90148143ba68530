#include <CLI11.hpp>

#include <cstdio>
#include <fstream>
#include <iostream>
#include <map>
#include <string>
#include <vector>

#include "mcover/harness.hpp"

using namespace mcover;
using namespace mcover::harness;

namespace {

constexpr int kExitConfig = 2;
constexpr int kExitDiverged = 3;

struct Flag {
    const char* name;
    const char* key;
    const char* help;
};

const std::vector<Flag>& flags_for(Model m) {
    static const std::vector<Flag> perceptron{
        {"--n", "N", "input dimension N"},
        {"--alpha", "alpha", "loading factor P/N"},
        {"--m", "M", "number of covers"},
        {"--method", "method", "vanilla | rsa | mcover"},
        {"--kernel", "kernel", "ring | uniform | identity"},
        {"--mu", "mu", "ring shift"},
        {"--sigma", "sigma", "ring width"},
        {"--sperm", "s_perm", "permutations in the bank"},
        {"--dest-s", "dest_s", "destination channels"},
        {"--gamma", "gamma", "replica coupling for rsa"},
        {"--tmax", "t_max", "initial temperature"},
        {"--tmin", "t_min", "final temperature"},
        {"--dt", "dt", "temperature step per sweep"},
    };
    static const std::vector<Flag> committee{
        {"--data", "data", "synthetic, a dataset name under the data root, or a directory"},
        {"--classes", "classes", "two digits, first maps to +1"},
        {"--threshold", "threshold", "pixel binarization threshold in [0,1]"},
        {"--p", "P", "training patterns"},
        {"--p-test", "P_test", "test patterns (0: whole test split)"},
        {"--input-dim", "n", "synthetic input dimension"},
        {"--k", "K", "hidden units"},
        {"--m", "M", "number of covers"},
        {"--method", "method", "sgd | rsgd | mcover"},
        {"--kernel", "kernel", "uniform | ring | identity"},
        {"--mu", "mu", "ring shift"},
        {"--sigma", "sigma", "ring width"},
        {"--sperm", "s_perm", "permutations in the bank"},
        {"--dest-s", "dest_s", "destination channels"},
        {"--batch", "batch", "minibatch size"},
        {"--epochs", "epochs", "maximum epochs"},
        {"--lr", "lr", "learning rate"},
        {"--lr-decay", "lr_decay", "lr_t = lr / (1 + decay * epoch)"},
        {"--beta0", "beta_0", "initial surrogate sharpness"},
        {"--beta-growth", "beta_growth", "sharpness factor per epoch"},
        {"--coupling", "coupling", "initial rsgd coupling"},
        {"--init-noise", "init_noise", "shared init plus noise; negative for independent covers"},
    };
    static const std::vector<Flag> mlp{
        {"--data", "data", "dataset name under the data root, or a directory"},
        {"--arch", "arch", "layer widths, e.g. 784,512,512,10"},
        {"--m", "M", "number of covers"},
        {"--method", "method", "vanilla | mcover"},
        {"--kernel", "kernel", "ring | uniform | identity"},
        {"--mu", "mu", "ring shift"},
        {"--sigma", "sigma", "ring width"},
        {"--sperm", "s_perm", "permutations per mixer"},
        {"--mode", "mode", "empirical | exact"},
        {"--blocks", "blocks", "input-layer groups,hidden-layer groups"},
        {"--reduction", "reduction", "sum | mean over covers"},
        {"--lr", "lr", "learning rate"},
        {"--momentum", "momentum", "momentum"},
        {"--nesterov", "nesterov", "true | false"},
        {"--batch", "batch", "minibatch size"},
        {"--epochs", "epochs", "epochs"},
        {"--init-noise", "init_noise", "per-cover init noise std"},
        {"--train-limit", "train_limit", "use the first N training images (0: all)"},
        {"--test-limit", "test_limit", "use the first N test images (0: all)"},
        {"--precision", "precision", "32 | 64"},
        {"--checkpoint", "checkpoint", "path prefix for final ensembles"},
    };
    switch (m) {
        case Model::perceptron: return perceptron;
        case Model::committee: return committee;
        case Model::mlp: return mlp;
    }
    return perceptron;
}

struct RunOptions {
    std::string config_path;
    std::string model_name;
    std::vector<std::string> sets;
    std::map<std::string, std::string> flag_values;
    std::string trials, seed, workers;
    std::string out = "-";
    std::string json;
    std::string trace;
    bool deterministic = false;
    bool quiet = false;
};

void add_common(CLI::App* app, RunOptions& o, bool with_flags, Model m) {
    app->add_option("--config", o.config_path, "key = value config file");
    app->add_option("--set", o.sets, "override any config key, key=value (repeatable)");
    app->add_option("--trials", o.trials, "number of trials");
    app->add_option("--seed", o.seed, "base seed; trial t uses seed + t");
    app->add_option("--workers", o.workers, "parallel trial workers");
    app->add_flag("--deterministic", o.deterministic, "write wall_ms as 0 for byte-identical output");
    app->add_flag("--quiet", o.quiet, "no progress on stderr");
    if (with_flags)
        for (const auto& f : flags_for(m)) app->add_option(f.name, o.flag_values[f.key], f.help);
}

ExperimentConfig build_config(const RunOptions& o, Model m, const CLI::App* app) {
    ExperimentConfig c = o.config_path.empty() ? ExperimentConfig(m) : ExperimentConfig::load(o.config_path, m);
    if (c.model() != m) throw ConfigError("config file is for model " + to_string(c.model()) + ", not " + to_string(m));
    for (const auto& f : flags_for(m))
        if (app->get_option_no_throw(f.name) && app->count(f.name)) c.set(f.key, o.flag_values.at(f.key));
    if (!o.trials.empty()) c.set("trials", o.trials);
    if (!o.seed.empty()) c.set("base_seed", o.seed);
    if (!o.workers.empty()) c.set("workers", o.workers);
    for (const auto& kv : o.sets) {
        const auto eq = kv.find('=');
        if (eq == std::string::npos) throw ConfigError("--set expects key=value, got '" + kv + "'");
        c.set(kv.substr(0, eq), kv.substr(eq + 1));
    }
    validate(c);
    return c;
}

void write_csv(const std::string& path, const csv::Table& t) {
    if (path == "-")
        csv::write_table(std::cout, t);
    else
        csv::write_table(path, t);
}

void write_json(const std::string& path, const nlohmann::ordered_json& j) {
    std::ofstream os(path);
    if (!os) throw InvalidInput("cannot write " + path);
    os << j.dump(2) << "\n";
}

ProgressFn progress_printer(const RunOptions& o, Model m) {
    if (o.quiet) return {};
    return [m](const TrialResult& r) {
        const std::string metric = primary_metric(m);
        std::fprintf(stderr, "trial %d seed %llu %s %s=%.4f (%.0f ms)%s%s\n", r.trial, static_cast<unsigned long long>(r.seed),
                     r.status.c_str(), metric.c_str(), metric_of(m, r, metric), r.wall_ms, r.note.empty() ? "" : " ",
                     r.note.c_str());
    };
}

int run_model(const RunOptions& o, Model m, const CLI::App* app) {
    const ExperimentConfig c = build_config(o, m, app);
    const auto results = run_trials(c, nullptr, progress_printer(o, m));
    write_csv(o.out, results_table(c, results, o.deterministic));
    const auto s = summarize(m, results, primary_metric(m));
    std::fprintf(stderr, "%s %s %s: %s (n=%d, se=%.4f)\n", to_string(m).c_str(), c.get("method").c_str(),
                 primary_metric(m).c_str(), stats::format_pm(s).c_str(), s.n, s.se);
    if (!o.json.empty()) {
        csv::Table t{summary_columns(), {}};
        int failed = 0;
        for (const auto& r : results) failed += r.failed();
        t.rows.push_back(summary_row("method", c.get("method"), primary_metric(m), s, failed));
        nlohmann::ordered_json j;
        j["config"] = nlohmann::ordered_json::object();
        for (const auto& [k, v] : c.entries()) j["config"][k] = v;
        j["summary"] = table_json(t);
        write_json(o.json, j);
    }
    if (!o.trace.empty()) write_csv(o.trace, trace_table(results, "test_error"));
    return any_failed(results) ? kExitDiverged : 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Permutation-routed M-cover training: perceptron, committee machine and MLP experiments"};
    app.require_subcommand(1);

    std::map<Model, RunOptions> opts;
    std::map<Model, CLI::App*> subs;
    const std::vector<std::pair<Model, const char*>> models{
        {Model::perceptron, "Binary teacher-student perceptron trained by simulated annealing"},
        {Model::committee, "Committee machine trained by SGD on a soft surrogate"},
        {Model::mlp, "Multilayer perceptron trained with block-message mixing"}};
    for (const auto& [m, help] : models) {
        auto* sub = app.add_subcommand(to_string(m), help);
        auto& o = opts[m];
        add_common(sub, o, true, m);
        sub->add_option("--out", o.out, "results CSV ('-' for stdout)");
        sub->add_option("--json", o.json, "summary JSON path");
        if (m == Model::mlp) sub->add_option("--trace", o.trace, "per-epoch test error CSV path");
        subs[m] = sub;
    }

    RunOptions sw;
    std::string param, values, prefix = "sweep";
    auto* sweep_cmd = app.add_subcommand("sweep", "Run trials over a grid of alpha, sigma, mu or M");
    add_common(sweep_cmd, sw, false, Model::perceptron);
    sweep_cmd->add_option("--model", sw.model_name, "perceptron | committee | mlp (default: from config, else perceptron)");
    sweep_cmd->add_option("--param", param, "alpha | sigma | mu | M")->required();
    sweep_cmd->add_option("--values", values, "comma list, or lo:hi:count for a uniform grid")->required();
    sweep_cmd->add_option("--out-prefix", prefix, "writes <prefix>_long.csv, <prefix>_summary.csv, <prefix>_summary.json");

    std::string in_path, by, metric, sum_out = "-", sum_json;
    auto* summarize_cmd = app.add_subcommand("summarize", "Summarize a long-form results CSV");
    summarize_cmd->add_option("--in", in_path, "long-form CSV")->required();
    summarize_cmd->add_option("--by", by, "grouping column (default: sweep_value if present, else method)");
    summarize_cmd->add_option("--metric", metric, "metric column (default: eps_g or test_error)");
    summarize_cmd->add_option("--out", sum_out, "summary CSV ('-' for stdout)");
    summarize_cmd->add_option("--json", sum_json, "summary JSON path");

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::CallForAllHelp& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        app.exit(e);
        return kExitConfig;
    }

    try {
        for (const auto& [m, sub] : subs)
            if (sub->parsed()) return run_model(opts[m], m, sub);

        if (sweep_cmd->parsed()) {
            Model m = Model::perceptron;
            if (!sw.model_name.empty())
                m = parse_model(sw.model_name);
            else if (!sw.config_path.empty())
                m = ExperimentConfig::load(sw.config_path).model();
            const ExperimentConfig base = build_config(sw, m, sweep_cmd);
            const auto points = sweep(base, param, parse_sweep_values(values), progress_printer(sw, m));
            csv::write_table(prefix + "_long.csv", sweep_long_table(param, points, sw.deterministic));
            const auto summary = sweep_summary_table(param, points);
            csv::write_table(prefix + "_summary.csv", summary);
            nlohmann::ordered_json j;
            j["parameter"] = param;
            j["config"] = nlohmann::ordered_json::object();
            for (const auto& [k, v] : base.entries()) j["config"][k] = v;
            j["summary"] = table_json(summary);
            write_json(prefix + "_summary.json", j);
            bool failed = false;
            for (const auto& p : points) {
                std::fprintf(stderr, "%s=%s: %s (n=%d)\n", param.c_str(), p.value.c_str(), stats::format_pm(p.summary).c_str(),
                             p.summary.n);
                failed = failed || any_failed(p.results);
            }
            return failed ? kExitDiverged : 0;
        }

        if (summarize_cmd->parsed()) {
            const csv::Table t = csv::read_table(in_path);
            if (by.empty()) by = t.column("sweep_value") >= 0 ? "sweep_value" : "method";
            if (metric.empty()) metric = t.column("eps_g") >= 0 ? "eps_g" : "test_error";
            const auto s = summarize_table(t, by, metric);
            write_csv(sum_out, s);
            if (!sum_json.empty()) write_json(sum_json, table_json(s));
            return 0;
        }
    } catch (const ConfigError& e) {
        std::fprintf(stderr, "config error: %s\n", e.what());
        return kExitConfig;
    } catch (const ParseError& e) {
        std::fprintf(stderr, "parse error: %s\n", e.what());
        return kExitConfig;
    } catch (const std::exception& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return 1;
    }
    return 0;
}
