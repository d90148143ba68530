#pragma once

// Experiment orchestration: flat key = value configs, seeded trials on a worker pool,
// parameter sweeps and summary tables.

#include <algorithm>
#include <atomic>
#include <charconv>
#include <cstdint>
#include <fstream>
#include <functional>
#include <istream>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <sstream>
#include <string>
#include <thread>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "mcover/committee.hpp"
#include "mcover/csv.hpp"
#include "mcover/data.hpp"
#include "mcover/errors.hpp"
#include "mcover/mlp.hpp"
#include "mcover/perceptron.hpp"
#include "mcover/stats.hpp"

namespace mcover::harness {

enum class Model { perceptron, committee, mlp };

inline std::string to_string(Model m) {
    switch (m) {
        case Model::perceptron: return "perceptron";
        case Model::committee: return "committee";
        case Model::mlp: return "mlp";
    }
    return "?";
}

inline Model parse_model(const std::string& s) {
    if (s == "perceptron") return Model::perceptron;
    if (s == "committee") return Model::committee;
    if (s == "mlp") return Model::mlp;
    throw ConfigError("unknown model '" + s + "'");
}

using KeyValues = std::vector<std::pair<std::string, std::string>>;

/// Every accepted key of a model with its default, in serialization order.
inline const KeyValues& default_keys(Model m) {
    static const KeyValues perceptron{
        {"method", "mcover"}, {"N", "1000"},     {"alpha", "1.58"}, {"M", "3"},        {"mu", "2"},
        {"sigma", "1.5"},     {"kernel", "ring"}, {"s_perm", "10"},  {"dest_s", "10"},  {"gamma", "1"},
        {"t_max", "0.4"},     {"t_min", "0.01"},  {"dt", "0.0001"},  {"trials", "20"},  {"base_seed", "0"},
        {"workers", "1"}};
    static const KeyValues committee{
        {"method", "mcover"},  {"data", "synthetic"},   {"K", "9"},          {"M", "4"},
        {"P", "1000"},         {"P_test", "0"},         {"n", "200"},        {"classes", "4,9"},
        {"threshold", "0.5"},  {"kernel", "uniform"},   {"mu", "2"},         {"sigma", "3"},
        {"s_perm", "10"},      {"dest_s", "10"},        {"batch", "100"},    {"epochs", "500"},
        {"lr", "0.01"},        {"lr_decay", "0"},       {"beta_0", "1"},     {"beta_growth", "1.01"},
        {"beta_max", "1000"},  {"loss_stop", "1e-07"},  {"coupling", "0.05"}, {"coupling_growth", "1.001"},
        {"coupling_max", "10"}, {"init_noise", "-1"},   {"sign_readout", "false"}, {"trials", "5"},
        {"base_seed", "0"},    {"workers", "1"}};
    static const KeyValues mlp{
        {"method", "mcover"},     {"data", "mnist"},     {"arch", "784,512,512,10"}, {"M", "5"},
        {"kernel", "ring"},       {"mu", "2"},           {"sigma", "3"},             {"blocks", "16,8"},
        {"s_perm", "10"},         {"mode", "empirical"}, {"shared_mixers", "false"}, {"reduction", "sum"},
        {"lr", "0.05"},           {"momentum", "0.9"},   {"nesterov", "true"},       {"batch", "256"},
        {"epochs", "40"},         {"init_noise", "0.01"}, {"eval_batch", "4096"},    {"train_limit", "0"},
        {"test_limit", "0"},      {"precision", "32"},   {"checkpoint", ""},         {"trials", "5"},
        {"base_seed", "0"},       {"workers", "1"}};
    switch (m) {
        case Model::perceptron: return perceptron;
        case Model::committee: return committee;
        case Model::mlp: return mlp;
    }
    return perceptron;
}

/// Config keys placed right after trial, seed, method in result rows.
inline std::vector<std::string> lead_keys(Model m) {
    switch (m) {
        case Model::perceptron: return {"N", "alpha", "M", "mu", "sigma"};
        case Model::committee: return {"data", "K", "M", "P"};
        case Model::mlp: return {"arch", "M", "kernel", "mu", "sigma"};
    }
    return {};
}

inline std::vector<std::string> metric_names(Model m) {
    switch (m) {
        case Model::perceptron: return {"R", "eps_g", "final_energy", "sweeps"};
        case Model::committee: return {"test_error", "train_error", "final_loss", "epochs_run"};
        case Model::mlp: return {"test_error", "train_loss", "epochs_run"};
    }
    return {};
}

inline std::string primary_metric(Model m) { return m == Model::perceptron ? "eps_g" : "test_error"; }

class ExperimentConfig {
public:
    explicit ExperimentConfig(Model m = Model::perceptron) : model_(m), values_(default_keys(m)) {}

    Model model() const { return model_; }

    bool has(const std::string& key) const { return find(key) != nullptr; }

    void set(const std::string& key, const std::string& value) {
        if (key == "model") {
            if (parse_model(value) != model_) throw ConfigError("model cannot change after construction");
            return;
        }
        auto* v = find(key);
        if (!v) throw ConfigError("unknown key '" + key + "' for model " + to_string(model_));
        *v = value;
    }

    const std::string& get(const std::string& key) const {
        const auto* v = find(key);
        if (!v) throw ConfigError("unknown key '" + key + "' for model " + to_string(model_));
        return *v;
    }

    long long get_int(const std::string& key) const {
        const std::string& s = get(key);
        long long v = 0;
        const auto res = std::from_chars(s.data(), s.data() + s.size(), v);
        if (res.ec != std::errc{} || res.ptr != s.data() + s.size()) throw ConfigError(key + " must be an integer, got '" + s + "'");
        return v;
    }

    std::uint64_t get_seed(const std::string& key) const {
        const std::string& s = get(key);
        std::uint64_t v = 0;
        const auto res = std::from_chars(s.data(), s.data() + s.size(), v);
        if (res.ec != std::errc{} || res.ptr != s.data() + s.size()) throw ConfigError(key + " must be a non-negative integer, got '" + s + "'");
        return v;
    }

    double get_double(const std::string& key) const {
        const std::string& s = get(key);
        double v = 0.0;
        const auto res = std::from_chars(s.data(), s.data() + s.size(), v);
        if (res.ec != std::errc{} || res.ptr != s.data() + s.size()) throw ConfigError(key + " must be a number, got '" + s + "'");
        return v;
    }

    bool get_bool(const std::string& key) const {
        const std::string& s = get(key);
        if (s == "true" || s == "1" || s == "yes") return true;
        if (s == "false" || s == "0" || s == "no") return false;
        throw ConfigError(key + " must be true or false, got '" + s + "'");
    }

    /// model first, then every key in table order.
    KeyValues entries() const {
        KeyValues out{{"model", to_string(model_)}};
        out.insert(out.end(), values_.begin(), values_.end());
        return out;
    }

    std::string serialize() const {
        std::string out;
        for (const auto& [k, v] : entries()) out += k + " = " + v + "\n";
        return out;
    }

    /// Lines of `key = value`; `#` starts a comment. The model key may appear anywhere.
    static ExperimentConfig parse(std::istream& is, Model fallback = Model::perceptron) {
        KeyValues pairs;
        std::string line;
        int lineno = 0;
        std::optional<Model> model;
        while (std::getline(is, line)) {
            ++lineno;
            if (const auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
            const auto trim = [](std::string s) {
                const auto b = s.find_first_not_of(" \t\r");
                if (b == std::string::npos) return std::string{};
                return s.substr(b, s.find_last_not_of(" \t\r") - b + 1);
            };
            line = trim(line);
            if (line.empty()) continue;
            const auto eq = line.find('=');
            if (eq == std::string::npos) throw ConfigError("line " + std::to_string(lineno) + ": expected key = value");
            std::string key = trim(line.substr(0, eq)), value = trim(line.substr(eq + 1));
            if (key.empty()) throw ConfigError("line " + std::to_string(lineno) + ": empty key");
            if (key == "model")
                model = parse_model(value);
            else
                pairs.emplace_back(std::move(key), std::move(value));
        }
        ExperimentConfig cfg(model.value_or(fallback));
        for (const auto& [k, v] : pairs) cfg.set(k, v);
        return cfg;
    }

    static ExperimentConfig load(const std::string& path, Model fallback = Model::perceptron) {
        std::ifstream is(path);
        if (!is) throw ConfigError("cannot open config " + path);
        return parse(is, fallback);
    }

private:
    std::string* find(const std::string& key) {
        for (auto& [k, v] : values_)
            if (k == key) return &v;
        return nullptr;
    }
    const std::string* find(const std::string& key) const { return const_cast<ExperimentConfig*>(this)->find(key); }

    Model model_;
    KeyValues values_;
};

template <typename F>
auto rethrow_as_config_error(F&& f) -> decltype(f()) {
    try {
        return f();
    } catch (const ConfigError&) {
        throw;
    } catch (const InvalidParameter& e) {
        throw ConfigError(e.what());
    }
}

inline std::vector<int> parse_int_list(const std::string& key, const std::string& s) {
    std::vector<int> out;
    std::stringstream ss(s);
    std::string item;
    while (std::getline(ss, item, ',')) {
        int v = 0;
        const auto res = std::from_chars(item.data(), item.data() + item.size(), v);
        if (res.ec != std::errc{} || res.ptr != item.data() + item.size()) throw ConfigError(key + ": bad integer list '" + s + "'");
        out.push_back(v);
    }
    return out;
}

inline perceptron::TrialConfig perceptron_config(const ExperimentConfig& c) {
    if (c.model() != Model::perceptron) throw ConfigError("not a perceptron config");
    return rethrow_as_config_error([&] {
        perceptron::TrialConfig p;
        p.N = int(c.get_int("N"));
        p.alpha = c.get_double("alpha");
        p.M = int(c.get_int("M"));
        p.method = perceptron::parse_method(c.get("method"));
        p.kernel = parse_kernel_family(c.get("kernel"));
        p.mu = c.get_double("mu");
        p.sigma = c.get_double("sigma");
        p.s_perm = int(c.get_int("s_perm"));
        p.dest_s = int(c.get_int("dest_s"));
        p.gamma = c.get_double("gamma");
        p.schedule = {c.get_double("t_max"), c.get_double("t_min"), c.get_double("dt")};
        p.schedule.validate();
        if (p.N < 1 || !(p.alpha > 0.0) || p.M < 1) throw ConfigError("need N >= 1, alpha > 0, M >= 1");
        return p;
    });
}

inline committee::CommitteeConfig committee_config(const ExperimentConfig& c) {
    if (c.model() != Model::committee) throw ConfigError("not a committee config");
    return rethrow_as_config_error([&] {
        committee::CommitteeConfig k;
        k.method = committee::parse_method(c.get("method"));
        k.K = int(c.get_int("K"));
        k.M = int(c.get_int("M"));
        k.kernel = parse_kernel_family(c.get("kernel"));
        k.mu = c.get_double("mu");
        k.sigma = c.get_double("sigma");
        k.s_perm = int(c.get_int("s_perm"));
        k.dest_s = int(c.get_int("dest_s"));
        k.schedule.batch_size = int(c.get_int("batch"));
        k.schedule.max_epochs = int(c.get_int("epochs"));
        k.schedule.lr_0 = c.get_double("lr");
        k.schedule.lr_decay = c.get_double("lr_decay");
        k.schedule.beta_0 = c.get_double("beta_0");
        k.schedule.beta_growth = c.get_double("beta_growth");
        k.schedule.beta_max = c.get_double("beta_max");
        k.schedule.loss_stop = c.get_double("loss_stop");
        k.schedule.validate();
        k.coupling_0 = c.get_double("coupling");
        k.coupling_growth = c.get_double("coupling_growth");
        k.coupling_max = c.get_double("coupling_max");
        k.init_noise = c.get_double("init_noise");
        k.sign_readout = c.get_bool("sign_readout");
        if (k.K < 1 || k.M < 1) throw ConfigError("need K >= 1 and M >= 1");
        if (c.get_int("P") < 0 || c.get_int("P_test") < 0 || c.get_int("n") < 1) throw ConfigError("need P, P_test >= 0 and n >= 1");
        if (c.get("data") != "synthetic" && parse_int_list("classes", c.get("classes")).size() != 2)
            throw ConfigError("classes must name exactly two digits, e.g. 4,9");
        return k;
    });
}

inline mlp::MlpConfig mlp_config(const ExperimentConfig& c) {
    if (c.model() != Model::mlp) throw ConfigError("not an mlp config");
    return rethrow_as_config_error([&] {
        mlp::MlpConfig m;
        const std::string method = c.get("method");
        if (method != "vanilla" && method != "mcover") throw ConfigError("mlp method must be vanilla or mcover");
        m.dims = mlp::parse_dims(c.get("arch"));
        const auto blocks = parse_int_list("blocks", c.get("blocks"));
        if (blocks.size() != 2) throw ConfigError("blocks must be '<input groups>,<hidden groups>'");
        m.g_input = blocks[0];
        m.g_hidden = blocks[1];
        m.M = method == "vanilla" ? 1 : int(c.get_int("M"));
        m.kernel = parse_kernel_family(c.get("kernel"));
        m.mu = c.get_double("mu");
        m.sigma = c.get_double("sigma");
        m.s_perm = int(c.get_int("s_perm"));
        m.mode = mlp::parse_mixer_mode(c.get("mode"));
        m.shared_mixers = c.get_bool("shared_mixers");
        m.reduction = mlp::parse_cover_reduction(c.get("reduction"));
        m.lr = c.get_double("lr");
        m.momentum = c.get_double("momentum");
        m.nesterov = c.get_bool("nesterov");
        m.batch = int(c.get_int("batch"));
        m.epochs = int(c.get_int("epochs"));
        m.init_noise = c.get_double("init_noise");
        m.eval_batch = int(c.get_int("eval_batch"));
        mlp::make_architecture(m.dims, m.g_input, m.g_hidden).validate();
        const auto prec = c.get_int("precision");
        if (prec != 32 && prec != 64) throw ConfigError("precision must be 32 or 64");
        if (m.M < 1 || m.batch < 1 || m.epochs < 0) throw ConfigError("need M >= 1, batch >= 1, epochs >= 0");
        return m;
    });
}

/// Throws ConfigError for anything a trial would reject up front.
inline void validate(const ExperimentConfig& c) {
    if (c.get_int("trials") < 1) throw ConfigError("trials must be >= 1");
    if (c.get_int("workers") < 1) throw ConfigError("workers must be >= 1");
    c.get_seed("base_seed");
    switch (c.model()) {
        case Model::perceptron: perceptron_config(c); break;
        case Model::committee: committee_config(c); break;
        case Model::mlp: mlp_config(c); break;
    }
}

struct TrialResult {
    int trial = 0;
    std::uint64_t seed = 0;
    std::string status = "ok";  // ok | diverged | error
    std::string note;
    std::vector<double> metrics;  // aligned with metric_names(model)
    double wall_ms = 0.0;
    std::vector<double> trace;

    bool failed() const { return status != "ok"; }
};

inline TrialResult failed_result(int trial, std::uint64_t seed, std::size_t n_metrics, std::string status, std::string note) {
    TrialResult r;
    r.trial = trial;
    r.seed = seed;
    r.status = std::move(status);
    r.note = std::move(note);
    r.metrics.assign(n_metrics, std::numeric_limits<double>::quiet_NaN());
    return r;
}

using MnistMatrix32 = Eigen::Matrix<float, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MnistMatrix64 = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

/// Read-only inputs shared by every trial of a run.
struct SharedData {
    std::optional<data::IdxDataset> train, test;
    MnistMatrix32 X32, Xt32;
    MnistMatrix64 X64, Xt64;
    std::vector<int> y, yt;
};

/// Loads whatever the config's model needs; ConfigError if the dataset is missing.
inline std::shared_ptr<const SharedData> prepare_data(const ExperimentConfig& c) {
    auto d = std::make_shared<SharedData>();
    if (c.model() == Model::perceptron) return d;
    const std::string name = c.get("data");
    if (c.model() == Model::committee && name == "synthetic") return d;
    if (!data::idx_available(name, "train") || !data::idx_available(name, "t10k"))
        throw ConfigError("dataset '" + name + "' not found (looked under " + data::dataset_root().string() + ")");
    d->train = data::load_idx(name, "train");
    d->test = data::load_idx(name, "t10k");
    if (c.model() == Model::mlp) {
        const auto limit = [](long long v) { return std::size_t(std::max(0LL, v)); };
        const std::size_t nl = limit(c.get_int("train_limit")), tl = limit(c.get_int("test_limit"));
        if (c.get_int("precision") == 32) {
            d->X32 = data::normalize_mnist<float>(*d->train, nl);
            d->Xt32 = data::normalize_mnist<float>(*d->test, tl);
        } else {
            d->X64 = data::normalize_mnist<double>(*d->train, nl);
            d->Xt64 = data::normalize_mnist<double>(*d->test, tl);
        }
        const std::size_t n = nl ? std::min(nl, d->train->count) : d->train->count;
        const std::size_t nt = tl ? std::min(tl, d->test->count) : d->test->count;
        d->y.assign(d->train->labels.begin(), d->train->labels.begin() + std::ptrdiff_t(n));
        d->yt.assign(d->test->labels.begin(), d->test->labels.begin() + std::ptrdiff_t(nt));
    }
    return d;
}

/// Synthetic committee test sets default to this size when P_test is 0.
inline constexpr std::size_t kSyntheticTestSize = 10000;

inline TrialResult run_one(const ExperimentConfig& c, const SharedData& d, int trial, std::uint64_t seed) {
    TrialResult r;
    r.trial = trial;
    r.seed = seed;
    switch (c.model()) {
        case Model::perceptron: {
            const auto o = perceptron::run_trial(perceptron_config(c), seed);
            r.metrics = {o.overlap.R, o.overlap.eps_g, o.final_energy, double(o.sweeps)};
            r.wall_ms = o.wall_ms;
            if (o.degenerate) r.note = "degenerate_collapse";
            break;
        }
        case Model::committee: {
            const auto cfg = committee_config(c);
            Rng data_rng = make_rng(seed, 7);
            const std::size_t P = std::size_t(c.get_int("P")), P_test = std::size_t(c.get_int("P_test"));
            data::BinaryTwoClassSet train, test;
            if (c.get("data") == "synthetic") {
                auto split = data::synthetic_committee_teacher(int(c.get_int("n")), cfg.K, P, P_test ? P_test : kSyntheticTestSize,
                                                               data_rng);
                train = std::move(split.train);
                test = std::move(split.test);
            } else {
                const auto cls = parse_int_list("classes", c.get("classes"));
                const double thr = c.get_double("threshold");
                train = data::binarize_two_class(*d.train, cls[0], cls[1], thr, P, data_rng);
                test = data::binarize_two_class(*d.test, cls[0], cls[1], thr, P_test, data_rng);
            }
            const auto o = committee::train_and_evaluate(cfg, train, test, seed);
            r.metrics = {o.test_error, o.train_error, o.final_loss, double(o.epochs)};
            r.wall_ms = o.wall_ms;
            r.note = o.stop_reason;
            if (o.diverged) r.status = "diverged";
            break;
        }
        case Model::mlp: {
            const auto cfg = mlp_config(c);
            const std::string ckpt = c.get("checkpoint");
            mlp::MlpOutcome o;
            auto train = [&](auto scalar_tag, const auto& X, const auto& Xt) {
                using Scalar = decltype(scalar_tag);
                mlp::MlpCoverEnsemble<Scalar> ens;
                o = mlp::train_mlp<Scalar>(cfg, X, d.y, Xt, d.yt, seed, ckpt.empty() ? nullptr : &ens);
                if (!ckpt.empty() && !o.diverged) {
                    std::ofstream os(ckpt + "_trial" + std::to_string(trial) + ".bin", std::ios::binary);
                    if (!os) throw InvalidInput("cannot write checkpoint under " + ckpt);
                    mlp::save_checkpoint(os, ens);
                }
            };
            if (c.get_int("precision") == 32)
                train(float{}, d.X32, d.Xt32);
            else
                train(double{}, d.X64, d.Xt64);
            r.metrics = {o.test_error, o.train_loss, double(o.epochs)};
            r.wall_ms = o.wall_ms;
            r.trace = o.test_error_trace;
            if (o.diverged) r.status = "diverged";
            break;
        }
    }
    if (r.status == "diverged") std::fill(r.metrics.begin(), r.metrics.end(), std::numeric_limits<double>::quiet_NaN());
    return r;
}

using TrialFn = std::function<TrialResult(int trial, std::uint64_t seed)>;
using ProgressFn = std::function<void(const TrialResult&)>;

/// Seeds are base_seed + t. Results come back in trial order whatever the completion order;
/// an exception inside a trial becomes that row's status instead of aborting the batch.
inline std::vector<TrialResult> run_trials(int trials, std::uint64_t base_seed, int workers, std::size_t n_metrics,
                                           const TrialFn& fn, const ProgressFn& progress = {}) {
    std::vector<TrialResult> results(static_cast<std::size_t>(std::max(trials, 0)));
    std::atomic<int> next{0};
    std::mutex report;
    auto worker = [&] {
        for (int t = next++; t < trials; t = next++) {
            const std::uint64_t seed = base_seed + std::uint64_t(t);
            TrialResult r;
            try {
                r = fn(t, seed);
                r.trial = t;
                r.seed = seed;
            } catch (const DivergenceError& e) {
                r = failed_result(t, seed, n_metrics, "diverged", e.what());
            } catch (const std::exception& e) {
                r = failed_result(t, seed, n_metrics, "error", e.what());
            }
            results[std::size_t(t)] = std::move(r);
            if (progress) {
                std::lock_guard lock(report);
                progress(results[std::size_t(t)]);
            }
        }
    };
    const int n = std::clamp(workers, 1, std::max(trials, 1));
    if (n == 1) {
        worker();
    } else {
        std::vector<std::jthread> pool;
        for (int i = 0; i < n; ++i) pool.emplace_back(worker);
    }
    return results;
}

inline std::vector<TrialResult> run_trials(const ExperimentConfig& c, std::shared_ptr<const SharedData> d = nullptr,
                                           const ProgressFn& progress = {}) {
    validate(c);
    if (!d) d = prepare_data(c);
    return run_trials(int(c.get_int("trials")), c.get_seed("base_seed"), int(c.get_int("workers")),
                      metric_names(c.model()).size(),
                      [&c, d](int t, std::uint64_t seed) { return run_one(c, *d, t, seed); }, progress);
}

inline bool any_failed(const std::vector<TrialResult>& rs) {
    return std::any_of(rs.begin(), rs.end(), [](const TrialResult& r) { return r.failed(); });
}

/// Columns depend only on the model: trial, seed, method, lead keys, metrics, wall_ms, status, note,
/// then every remaining config key.
inline csv::Row result_columns(Model m) {
    csv::Row h{"trial", "seed", "method"};
    const auto lead = lead_keys(m);
    h.insert(h.end(), lead.begin(), lead.end());
    for (const auto& k : metric_names(m)) h.push_back(k);
    h.insert(h.end(), {"wall_ms", "status", "note", "model"});
    for (const auto& [k, v] : default_keys(m))
        if (k != "method" && k != "workers" && std::find(lead.begin(), lead.end(), k) == lead.end()) h.push_back(k);
    return h;
}

/// `deterministic` writes wall_ms as 0 so identical runs give byte-identical files.
inline csv::Row result_row(const ExperimentConfig& c, const TrialResult& r, bool deterministic) {
    const csv::Row h = result_columns(c.model());
    const std::size_t n_metrics = metric_names(c.model()).size();
    csv::Row row{std::to_string(r.trial), std::to_string(r.seed), c.get("method")};
    const auto lead = lead_keys(c.model());
    for (const auto& k : lead) row.push_back(c.get(k));
    for (std::size_t i = 0; i < n_metrics; ++i)
        row.push_back(i < r.metrics.size() ? csv::format_number(r.metrics[i]) : "nan");
    row.push_back(deterministic ? "0" : csv::format_number(std::round(r.wall_ms * 1000.0) / 1000.0));
    row.push_back(r.status);
    row.push_back(r.note);
    row.push_back(to_string(c.model()));
    for (std::size_t i = row.size(); i < h.size(); ++i) row.push_back(c.get(h[i]));
    return row;
}

inline csv::Table results_table(const ExperimentConfig& c, const std::vector<TrialResult>& rs, bool deterministic = false) {
    csv::Table t{result_columns(c.model()), {}};
    for (const auto& r : rs) t.rows.push_back(result_row(c, r, deterministic));
    return t;
}

/// Per-epoch traces in long form (trial, epoch, value); empty when no trial kept one.
inline csv::Table trace_table(const std::vector<TrialResult>& rs, const std::string& value_name) {
    csv::Table t{{"trial", "seed", "epoch", value_name}, {}};
    for (const auto& r : rs)
        for (std::size_t e = 0; e < r.trace.size(); ++e)
            t.rows.push_back({std::to_string(r.trial), std::to_string(r.seed), std::to_string(e + 1), csv::format_number(r.trace[e])});
    return t;
}

inline double metric_of(Model m, const TrialResult& r, const std::string& name) {
    const auto names = metric_names(m);
    const auto it = std::find(names.begin(), names.end(), name);
    if (it == names.end()) throw ConfigError("unknown metric '" + name + "'");
    const auto i = std::size_t(it - names.begin());
    return i < r.metrics.size() ? r.metrics[i] : std::numeric_limits<double>::quiet_NaN();
}

inline stats::Summary summarize(Model m, const std::vector<TrialResult>& rs, const std::string& metric) {
    std::vector<double> v;
    for (const auto& r : rs)
        if (!r.failed()) v.push_back(metric_of(m, r, metric));
    return stats::summarize(v);
}

inline const csv::Row& summary_columns() {
    static const csv::Row h{"group_by", "value", "metric", "n", "n_failed", "mean", "sd", "se", "ci95",
                            "ci_low", "ci_high", "formatted", "status"};
    return h;
}

inline csv::Row summary_row(const std::string& by, const std::string& value, const std::string& metric, const stats::Summary& s,
                            int n_failed) {
    const auto num = [](double x) { return std::isfinite(x) ? csv::format_number(x) : std::string{}; };
    return {by,         value,           metric,           std::to_string(s.n),   std::to_string(n_failed), num(s.mean),
            num(s.sd),  num(s.se),       num(s.ci95),      num(s.ci_low()),       num(s.ci_high()),         stats::format_pm(s),
            s.n == 0 ? "empty" : "ok"};
}

/// Groups rows of a long-form table by one column (first-appearance order) and summarizes a metric column.
/// Rows whose status is not ok count as failed and are left out of the statistics.
inline csv::Table summarize_table(const csv::Table& long_form, const std::string& by, const std::string& metric) {
    const auto bi = long_form.column(by), mi = long_form.column(metric), si = long_form.column("status");
    if (bi < 0) throw ConfigError("no column '" + by + "' to group by");
    if (mi < 0) throw ConfigError("no metric column '" + metric + "'");
    std::vector<std::string> order;
    std::map<std::string, std::pair<std::vector<double>, int>> groups;
    for (const auto& row : long_form.rows) {
        const std::string& key = row[std::size_t(bi)];
        if (!groups.count(key)) order.push_back(key);
        auto& g = groups[key];
        const bool ok = si < 0 || row[std::size_t(si)] == "ok";
        if (!ok) {
            ++g.second;
            continue;
        }
        const std::string& cell = row[std::size_t(mi)];
        double v = std::numeric_limits<double>::quiet_NaN();
        std::from_chars(cell.data(), cell.data() + cell.size(), v);
        g.first.push_back(v);
    }
    csv::Table out{summary_columns(), {}};
    for (const auto& key : order) {
        const auto& g = groups[key];
        out.rows.push_back(summary_row(by, key, metric, stats::summarize(g.first), g.second));
    }
    return out;
}

inline nlohmann::ordered_json table_json(const csv::Table& t) {
    auto arr = nlohmann::ordered_json::array();
    for (const auto& row : t.rows) {
        nlohmann::ordered_json o;
        for (std::size_t i = 0; i < t.header.size(); ++i) o[t.header[i]] = row[i];
        arr.push_back(std::move(o));
    }
    return arr;
}

inline const std::vector<std::string>& sweep_parameters() {
    static const std::vector<std::string> p{"alpha", "sigma", "mu", "M"};
    return p;
}

struct SweepPoint {
    std::string value;
    ExperimentConfig config;
    std::vector<TrialResult> results;
    stats::Summary summary;
};

inline std::vector<std::string> split_values(const std::string& s) {
    std::vector<std::string> out;
    std::stringstream ss(s);
    std::string item;
    while (std::getline(ss, item, ','))
        if (!item.empty()) out.push_back(item);
    return out;
}

/// `lo:hi:count` expands to an inclusive uniform grid; anything else is a comma list.
inline std::vector<std::string> parse_sweep_values(const std::string& s) {
    if (std::count(s.begin(), s.end(), ':') == 2) {
        const auto a = s.find(':'), b = s.rfind(':');
        double lo = 0, hi = 0;
        int count = 0;
        try {
            lo = std::stod(s.substr(0, a));
            hi = std::stod(s.substr(a + 1, b - a - 1));
            count = std::stoi(s.substr(b + 1));
        } catch (const std::exception&) {
            throw ConfigError("bad grid '" + s + "', expected lo:hi:count");
        }
        if (count < 1) throw ConfigError("grid needs at least one point");
        std::vector<std::string> out;
        for (int i = 0; i < count; ++i)
            out.push_back(csv::format_number(count == 1 ? lo : lo + (hi - lo) * double(i) / double(count - 1)));
        return out;
    }
    auto out = split_values(s);
    if (out.empty()) throw ConfigError("no sweep values given");
    return out;
}

inline std::vector<SweepPoint> sweep(const ExperimentConfig& base, const std::string& parameter, const std::vector<std::string>& values,
                                     const ProgressFn& progress = {}) {
    const auto& allowed = sweep_parameters();
    if (std::find(allowed.begin(), allowed.end(), parameter) == allowed.end())
        throw ConfigError("cannot sweep '" + parameter + "'; choose alpha, sigma, mu or M");
    if (!base.has(parameter)) throw ConfigError(parameter + " is not a " + to_string(base.model()) + " parameter");
    std::vector<SweepPoint> points;
    for (const auto& v : values) {
        ExperimentConfig c = base;
        c.set(parameter, v);
        validate(c);
        points.push_back({v, c, {}, {}});
    }
    const auto shared = prepare_data(base);
    for (auto& p : points) {
        p.results = run_trials(p.config, shared, progress);
        p.summary = summarize(base.model(), p.results, primary_metric(base.model()));
    }
    return points;
}

inline csv::Table sweep_long_table(const std::string& parameter, const std::vector<SweepPoint>& points, bool deterministic = false) {
    csv::Table t;
    for (const auto& p : points) {
        const csv::Table part = results_table(p.config, p.results, deterministic);
        if (t.header.empty()) {
            t.header = {"sweep_param", "sweep_value"};
            t.header.insert(t.header.end(), part.header.begin(), part.header.end());
        }
        for (const auto& row : part.rows) {
            csv::Row r{parameter, p.value};
            r.insert(r.end(), row.begin(), row.end());
            t.rows.push_back(std::move(r));
        }
    }
    return t;
}

inline csv::Table sweep_summary_table(const std::string& parameter, const std::vector<SweepPoint>& points) {
    csv::Table t{summary_columns(), {}};
    t.header.insert(t.header.begin() + 2, {"model", "method"});
    for (const auto& p : points) {
        const int failed = int(std::count_if(p.results.begin(), p.results.end(), [](const TrialResult& r) { return r.failed(); }));
        auto row = summary_row(parameter, p.value, primary_metric(p.config.model()), p.summary, failed);
        row.insert(row.begin() + 2, {to_string(p.config.model()), p.config.get("method")});
        t.rows.push_back(std::move(row));
    }
    return t;
}

}  // namespace mcover::harness
