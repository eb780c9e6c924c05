#pragma once

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <map>
#include <mutex>
#include <optional>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include <json.hpp>

#include "context_dep.hpp"
#include "context_free.hpp"
#include "core.hpp"
#include "env_suite.hpp"
#include "verify.hpp"

namespace cmdp {

inline constexpr const char* kReportSchema = "cmdp-lab/1";
/// Above this many contexts (or for continuous contexts) suboptimality is
/// estimated by Monte Carlo.
inline constexpr std::size_t kExactContextLimit = 64;

enum class Algorithm { Kcfd, Ucfd, Kcdd, Ucdd };

inline Algorithm parse_algorithm(const std::string& s) {
    if (s == "kcfd") return Algorithm::Kcfd;
    if (s == "ucfd") return Algorithm::Ucfd;
    if (s == "kcdd") return Algorithm::Kcdd;
    if (s == "ucdd") return Algorithm::Ucdd;
    throw ConfigError("unknown algorithm '" + s + "' (kcfd, ucfd, kcdd, ucdd)");
}

inline std::string algorithm_name(Algorithm a) {
    switch (a) {
        case Algorithm::Kcfd: return "kcfd";
        case Algorithm::Ucfd: return "ucfd";
        case Algorithm::Kcdd: return "kcdd";
        case Algorithm::Ucdd: return "ucdd";
    }
    return "?";
}

/// Learner settings shared by the four algorithms; unset entries take the
/// algorithm's defaults.
struct LearnerSpec {
    double eps = 0.25;
    double delta = 0.1;
    Loss loss = Loss::L2;
    double constant_scale = 1.0;
    std::optional<double> B, beta, gamma, eps1, eps_p, eps_r, rho, eps2;
    bool fail_on_shortfall = false;
    bool record_off_target = false;
    ComplexityKind complexity = ComplexityKind::Pseudo;

    CfConfig context_free(const EnvHandle& env) const {
        CfConfig c;
        c.eps = eps;
        c.delta = delta;
        c.loss = loss;
        c.constant_scale = constant_scale;
        c.B = B;
        c.beta = beta;
        c.gamma = gamma;
        c.record_off_target = record_off_target;
        const ComplexityKind kind = complexity;
        c.reward_class = [&env, kind](std::size_t h, std::size_t s, std::size_t a) {
            return env.reward_class(h, s, a).set_complexity(kind);
        };
        return c;
    }

    CdConfig context_dep(const EnvHandle& env) const {
        CdConfig c;
        c.eps = eps;
        c.delta = delta;
        c.loss = loss;
        c.constant_scale = constant_scale;
        c.beta = beta;
        c.gamma = gamma;
        c.eps1 = eps1;
        c.eps_p = eps_p;
        c.eps_r = eps_r;
        c.rho = rho;
        c.eps2 = eps2;
        c.fail_on_shortfall = fail_on_shortfall;
        const ComplexityKind kind = complexity;
        c.reward_class = [&env, kind](std::size_t h, std::size_t s, std::size_t a) {
            return env.reward_class(h, s, a).set_complexity(kind);
        };
        c.layer_reward_class = [&env, kind](std::size_t h) { return env.layer_reward_class(h).set_complexity(kind); };
        c.layer_dynamics_class = [&env, kind](std::size_t h) { return env.layer_dynamics_class(h).set_complexity(kind); };
        return c;
    }

    nlohmann::json to_json() const {
        nlohmann::json j{{"eps", eps},
                         {"delta", delta},
                         {"loss", loss_name(loss)},
                         {"constant_scale", constant_scale},
                         {"fail_on_shortfall", fail_on_shortfall},
                         {"record_off_target", record_off_target},
                         {"complexity", complexity == ComplexityKind::Pseudo ? "pseudo" : "fat-shattering"}};
        const std::pair<const char*, const std::optional<double>*> opt[] = {
            {"B", &B},         {"beta", &beta},   {"gamma", &gamma}, {"eps1", &eps1},
            {"eps_p", &eps_p}, {"eps_r", &eps_r}, {"rho", &rho},     {"eps2", &eps2}};
        for (const auto& [name, v] : opt)
            if (*v) j[name] = **v;
        return j;
    }

    static LearnerSpec from_json(const nlohmann::json& j) {
        LearnerSpec l;
        l.eps = j.value("eps", l.eps);
        l.delta = j.value("delta", l.delta);
        l.loss = parse_loss(j.value("loss", std::string("l2")));
        l.constant_scale = j.value("constant_scale", l.constant_scale);
        l.fail_on_shortfall = j.value("fail_on_shortfall", l.fail_on_shortfall);
        l.record_off_target = j.value("record_off_target", l.record_off_target);
        const auto kind = j.value("complexity", std::string("pseudo"));
        if (kind == "pseudo")
            l.complexity = ComplexityKind::Pseudo;
        else if (kind == "fat-shattering")
            l.complexity = ComplexityKind::FatShattering;
        else
            throw ConfigError("unknown complexity '" + kind + "'");
        const std::pair<const char*, std::optional<double>*> opt[] = {
            {"B", &l.B},         {"beta", &l.beta},   {"gamma", &l.gamma}, {"eps1", &l.eps1},
            {"eps_p", &l.eps_p}, {"eps_r", &l.eps_r}, {"rho", &l.rho},     {"eps2", &l.eps2}};
        for (const auto& [name, v] : opt)
            if (j.contains(name)) *v = j.at(name).get<double>();
        if (!(l.eps > 0.0 && l.eps < 1.0)) throw ConfigError("learner.eps must lie in (0,1)");
        if (!(l.delta > 0.0 && l.delta < 1.0)) throw ConfigError("learner.delta must lie in (0,1)");
        if (!(l.constant_scale > 0.0)) throw ConfigError("learner.constant_scale must be positive");
        return l;
    }
};

struct ExperimentConfig {
    std::string name = "experiment";
    Algorithm algorithm = Algorithm::Kcfd;
    GenSpec env;
    LearnerSpec learner;
    std::uint64_t master_seed = 0;
    std::size_t n_seeds = 20;
    std::size_t n_eval_contexts = 256;
    /// 0 means one per hardware thread.
    std::size_t workers = 0;
    std::string output = "out";
    std::string format = "json";
    /// Pass when at least this fraction of seeds reach suboptimality <= max_suboptimality.
    double success_rate = 0.8;
    std::optional<double> max_suboptimality;
    bool write_models = false;
    /// Optional sweep: dotted path into this document and the values to try.
    std::string sweep_param;
    std::vector<double> sweep_values;
    /// The document the config was read from, used by sweeps.
    nlohmann::json source;

    double threshold() const { return max_suboptimality.value_or(learner.eps); }

    void validate() const {
        const bool context_free = env.dynamics_family == DynamicsFamily::ContextFreeRandom;
        const bool needs_known = algorithm == Algorithm::Kcfd || algorithm == Algorithm::Kcdd;
        if ((algorithm == Algorithm::Kcfd || algorithm == Algorithm::Ucfd) && !context_free)
            throw ConfigError(algorithm_name(algorithm) + " needs the context-free-random dynamics family");
        if (needs_known != env.known_dynamics)
            throw ConfigError(algorithm_name(algorithm) + (needs_known ? " needs" : " must not use") +
                              " known_dynamics");
        if (n_seeds < 1) throw ConfigError("n_seeds must be >= 1");
        if (format != "json" && format != "csv") throw ConfigError("format must be json or csv");
        if (!(success_rate >= 0.0 && success_rate <= 1.0)) throw ConfigError("success_rate outside [0,1]");
        try {
            env.validate();
        } catch (const InvalidParameter& e) {
            throw ConfigError(std::string("env: ") + e.what());
        }
    }

    nlohmann::json to_json() const {
        nlohmann::json j{{"name", name},
                         {"algorithm", algorithm_name(algorithm)},
                         {"env", env.to_json()},
                         {"learner", learner.to_json()},
                         {"master_seed", master_seed},
                         {"n_seeds", n_seeds},
                         {"n_eval_contexts", n_eval_contexts},
                         {"output", output},
                         {"format", format},
                         {"acceptance", {{"success_rate", success_rate}, {"max_suboptimality", threshold()}}},
                         {"write_models", write_models}};
        if (!sweep_param.empty()) j["sweep"] = {{"param", sweep_param}, {"values", sweep_values}};
        return j;
    }

    static ExperimentConfig from_json(const nlohmann::json& j) {
        ExperimentConfig c;
        try {
            if (!j.is_object()) throw ConfigError("config must be a JSON object");
            c.source = j;
            c.name = j.value("name", c.name);
            c.algorithm = parse_algorithm(j.at("algorithm").get<std::string>());
            c.env = GenSpec::from_json(j.at("env"));
            c.learner = LearnerSpec::from_json(j.value("learner", nlohmann::json::object()));
            c.master_seed = j.value("master_seed", c.master_seed);
            c.n_seeds = j.value("n_seeds", c.n_seeds);
            c.n_eval_contexts = j.value("n_eval_contexts", c.n_eval_contexts);
            c.workers = j.value("workers", c.workers);
            c.output = j.value("output", c.output);
            c.format = j.value("format", c.format);
            c.write_models = j.value("write_models", c.write_models);
            if (j.contains("acceptance")) {
                const auto& a = j.at("acceptance");
                c.success_rate = a.value("success_rate", c.success_rate);
                if (a.contains("max_suboptimality")) c.max_suboptimality = a.at("max_suboptimality").get<double>();
            }
            if (j.contains("sweep")) {
                c.sweep_param = j.at("sweep").at("param").get<std::string>();
                c.sweep_values = j.at("sweep").at("values").get<std::vector<double>>();
            }
        } catch (const nlohmann::json::exception& e) {
            throw ConfigError(std::string("malformed config: ") + e.what());
        } catch (const InvalidParameter& e) {
            throw ConfigError(std::string("invalid config: ") + e.what());
        }
        c.validate();
        return c;
    }

    static ExperimentConfig load(const std::string& path) {
        std::ifstream in(path);
        if (!in) throw ConfigError("cannot open config " + path);
        nlohmann::json j;
        try {
            in >> j;
        } catch (const nlohmann::json::exception& e) {
            throw ConfigError("config " + path + " is not valid JSON: " + e.what());
        }
        return from_json(j);
    }
};

struct SeedResult {
    std::size_t index = 0;
    std::uint64_t env_seed = 0;
    std::uint64_t learner_seed = 0;
    std::uint64_t episodes_used = 0;
    double suboptimality = 0.0;
    std::string suboptimality_method = "exact";
    double suboptimality_stderr = 0.0;
    bool success = false;
    std::optional<std::string> error;
    std::map<std::string, bool> invariants;
    std::map<std::string, bool> good_events;
    nlohmann::json audit;
    nlohmann::json model;
    double wall_time_s = 0.0;

    nlohmann::json to_json() const {
        nlohmann::json j{{"seed_index", index},
                         {"env_seed", env_seed},
                         {"learner_seed", learner_seed},
                         {"episodes_used", episodes_used},
                         {"suboptimality", suboptimality},
                         {"suboptimality_method", suboptimality_method},
                         {"suboptimality_stderr", suboptimality_stderr},
                         {"success", success},
                         {"invariants", invariants},
                         {"good_events", good_events},
                         {"audit", audit},
                         {"wall_time_s", wall_time_s}};
        j["error"] = error ? nlohmann::json(*error) : nlohmann::json(nullptr);
        return j;
    }
};

struct Rate {
    std::size_t successes = 0;
    std::size_t trials = 0;

    double frequency() const { return trials == 0 ? 0.0 : static_cast<double>(successes) / static_cast<double>(trials); }
    nlohmann::json to_json() const {
        const auto w = wilson_interval(successes, trials);
        return {{"successes", successes}, {"trials", trials}, {"frequency", frequency()}, {"wilson", {w.lower, w.upper}}};
    }
};

struct Report {
    ExperimentConfig config;
    std::vector<SeedResult> seeds;
    double wall_time_s = 0.0;

    double mean_episodes() const {
        double s = 0.0;
        for (const auto& r : seeds) s += static_cast<double>(r.episodes_used);
        return seeds.empty() ? 0.0 : s / static_cast<double>(seeds.size());
    }

    double mean_suboptimality() const {
        double s = 0.0;
        std::size_t n = 0;
        for (const auto& r : seeds)
            if (!r.error) {
                s += r.suboptimality;
                ++n;
            }
        return n == 0 ? 0.0 : s / static_cast<double>(n);
    }

    Rate success() const {
        Rate r{0, seeds.size()};
        for (const auto& s : seeds) r.successes += s.success ? 1 : 0;
        return r;
    }

    std::map<std::string, Rate> rates(bool invariants) const {
        std::map<std::string, Rate> out;
        for (const auto& s : seeds)
            for (const auto& [name, ok] : invariants ? s.invariants : s.good_events) {
                ++out[name].trials;
                out[name].successes += ok ? 1 : 0;
            }
        return out;
    }

    bool all_invariants_hold() const {
        for (const auto& s : seeds)
            for (const auto& [name, ok] : s.invariants)
                if (!ok) return false;
        return true;
    }

    std::size_t errors() const {
        std::size_t n = 0;
        for (const auto& s : seeds) n += s.error ? 1 : 0;
        return n;
    }

    bool passed() const {
        return errors() == 0 && all_invariants_hold() && success().frequency() >= config.success_rate;
    }

    nlohmann::json to_json() const {
        nlohmann::json rows = nlohmann::json::array();
        for (const auto& s : seeds) rows.push_back(s.to_json());
        nlohmann::json inv = nlohmann::json::object(), good = nlohmann::json::object();
        for (const auto& [k, r] : rates(true)) inv[k] = r.to_json();
        for (const auto& [k, r] : rates(false)) good[k] = r.to_json();
        return {{"schema", kReportSchema},
                {"config", config.to_json()},
                {"seeds", rows},
                {"aggregate",
                 {{"mean_episodes_used", mean_episodes()},
                  {"mean_suboptimality", mean_suboptimality()},
                  {"success", success().to_json()},
                  {"invariants", inv},
                  {"good_events", good},
                  {"errors", errors()},
                  {"passed", passed()}}},
                {"wall_time_s", wall_time_s}};
    }

    /// One line per seed; the first column carries the schema tag.
    std::string to_csv() const {
        std::ostringstream out;
        out << std::setprecision(17);
        out << "schema,algorithm,seed_index,env_seed,episodes_used,suboptimality,method,stderr,success,invariants_ok,error,"
               "wall_time_s\n";
        for (const auto& s : seeds) {
            bool ok = true;
            for (const auto& [k, v] : s.invariants) ok = ok && v;
            out << kReportSchema << ',' << algorithm_name(config.algorithm) << ',' << s.index << ',' << s.env_seed << ','
                << s.episodes_used << ',' << s.suboptimality << ',' << s.suboptimality_method << ','
                << s.suboptimality_stderr << ',' << (s.success ? 1 : 0) << ',' << (ok ? 1 : 0) << ','
                << (s.error ? "\"" + *s.error + "\"" : "") << ',' << s.wall_time_s << '\n';
        }
        return out.str();
    }
};

/// Copy of a report document with every wall_time_s field removed.
inline nlohmann::json strip_timing(nlohmann::json j) {
    if (j.is_object()) {
        j.erase("wall_time_s");
        for (auto& [k, v] : j.items()) v = strip_timing(v);
    } else if (j.is_array()) {
        for (auto& v : j) v = strip_timing(v);
    }
    return j;
}

namespace detail {

struct Suboptimality {
    double value = 0.0;
    double stderr_ = 0.0;
    std::string method;
};

inline Suboptimality measure_suboptimality(const Cmdp& cmdp, const PolicyMap& learned, std::size_t n_eval, Rng& rng) {
    if (cmdp.is_finite() && cmdp.contexts().size() <= kExactContextLimit)
        return {exact_suboptimality(cmdp, learned), 0.0, "exact"};
    const std::size_t n = std::max<std::size_t>(n_eval, 2);
    double sum = 0.0, sq = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        const Context c = cmdp.sample_context(rng);
        const auto m = cmdp.mdp_of(c);
        const double gap = plan(*m).value - policy_value(*m, learned(c));
        sum += gap;
        sq += gap * gap;
    }
    const double mean = sum / static_cast<double>(n);
    const double var = std::max(0.0, (sq - static_cast<double>(n) * mean * mean) / static_cast<double>(n - 1));
    return {mean, std::sqrt(var / static_cast<double>(n)), "monte-carlo"};
}

inline nlohmann::json budgets_json(const std::vector<BudgetEntry>& budgets) {
    nlohmann::json out = nlohmann::json::array();
    for (const auto& b : budgets)
        out.push_back({{"where", b.where}, {"episodes", b.episodes}, {"required", b.required}, {"collected", b.collected}});
    return out;
}

inline bool quotas_met(const std::vector<BudgetEntry>& budgets) {
    for (const auto& b : budgets)
        if (b.collected < b.required) return false;
    return true;
}

/// Contexts used for model checks: all of a finite space, else fresh draws.
inline std::vector<Context> probe_contexts(const Cmdp& cmdp, std::size_t n, Rng& rng) {
    if (cmdp.is_finite()) return cmdp.contexts();
    std::vector<Context> out;
    for (std::size_t i = 0; i < std::min<std::size_t>(n, 64); ++i) out.push_back(cmdp.sample_context(rng));
    return out;
}

/// True (gamma,beta)-good states under the real dynamics, finite contexts only.
inline std::vector<std::vector<bool>> true_good_states(const Cmdp& cmdp, double gamma, double beta) {
    const Layout& L = cmdp.layout();
    std::vector<std::vector<bool>> out;
    for (std::size_t h = 0; h < L.horizon(); ++h) {
        out.emplace_back(L.layer_size(h), false);
        for (std::size_t s = 0; s < L.layer_size(h); ++s) {
            double mass = 0.0;
            for (std::size_t i = 0; i < cmdp.contexts().size(); ++i)
                if (ffp(*cmdp.mdp_of(cmdp.contexts()[i]), h, s).prob >= beta) mass += cmdp.probabilities()[i];
            out[h][s] = mass >= gamma;
        }
    }
    return out;
}

inline bool sets_contain(const GoodSets& learned, const std::vector<std::vector<bool>>& truth) {
    for (std::size_t h = 0; h < truth.size(); ++h)
        for (std::size_t s = 0; s < truth[h].size(); ++s)
            if (truth[h][s] && !learned.good[h][s]) return false;
    return true;
}

}  // namespace detail

/// Explore, exploit and check one seed of an experiment.
inline SeedResult run_seed(const ExperimentConfig& cfg, std::size_t index) {
    const auto start = std::chrono::steady_clock::now();
    SeedResult r;
    r.index = index;
    r.env_seed = derive_seed(cfg.master_seed, index, 1);
    r.learner_seed = derive_seed(cfg.master_seed, index, 2);
    try {
        GenSpec g = cfg.env;
        g.seed = r.env_seed;
        const auto env = generate(g);
        const Cmdp& cmdp = env->cmdp();
        EnvSession session(env);
        Rng rng(r.learner_seed);
        Rng eval_rng(derive_seed(cfg.master_seed, index, 3));
        detail::Suboptimality sub;
        std::uint64_t audited = 0;

        if (cfg.algorithm == Algorithm::Kcfd || cfg.algorithm == Algorithm::Ucfd) {
            const CfConfig lc = cfg.learner.context_free(*env);
            const CfLearnedModel model = cfg.algorithm == Algorithm::Kcfd
                                             ? explore_kcfd(session, *dynamics_oracle(env), lc, rng)
                                             : explore_ucfd(session, lc, rng);
            r.episodes_used = model.episodes_used;
            for (const auto& b : model.budgets) audited += b.episodes;
            r.invariants["quotas_met"] = detail::quotas_met(model.budgets);
            r.audit = {{"budgets", detail::budgets_json(model.budgets)}, {"beta", model.beta}, {"gamma", model.gamma},
                       {"delta1", model.delta1}};
            if (cfg.algorithm == Algorithm::Ucfd) {
                bool stochastic = true;
                try {
                    validate_mdp(model.dynamics);
                } catch (const Error&) {
                    stochastic = false;
                }
                r.invariants["model_rows_stochastic"] = stochastic;
                // Every learned row within the concentration radius of its own count.
                const auto truth = cmdp.mdp_of(detail::probe_contexts(cmdp, 1, eval_rng).front());
                const Layout& L = env->layout();
                bool within = true;
                for (std::size_t h = 0; h < L.horizon(); ++h)
                    for (std::size_t s = 0; s < L.layer_size(h); ++s)
                        for (std::size_t a = 0; a < L.num_actions(); ++a) {
                            const std::size_t n = model.counters.n[h][s][a];
                            if (n == 0 || n < model.np_thresholds[h]) continue;
                            const double radius =
                                std::sqrt(2.0 * (std::log(1.0 / model.delta1) +
                                                 static_cast<double>(L.layer_size(h + 1) + 1) * std::log(2.0)) /
                                          static_cast<double>(n));
                            const auto t = truth->transition(h, s, a);
                            if (tv_distance(model.dynamics.transition(h, s, a).first(t.size()), t) > radius)
                                within = false;
                        }
                r.good_events["rows_within_radius"] = within;
            }
            sub = detail::measure_suboptimality(cmdp, policy_map(model), cfg.n_eval_contexts, eval_rng);
            if (cfg.write_models) r.model = model_to_json(model, r.learner_seed);
        } else {
            const CdConfig lc = cfg.learner.context_dep(*env);
            const CdLearnedModel model =
                cfg.algorithm == Algorithm::Kcdd
                    ? explore_kcdd(session, std::shared_ptr<const DynamicsOracle>(dynamics_oracle(env)), lc, rng)
                    : explore_ucdd(session, lc, rng);
            r.episodes_used = model.episodes_used;
            audited = model.agc_episodes;
            nlohmann::json layers = nlohmann::json::array();
            if (cfg.algorithm == Algorithm::Kcdd) {
                for (const auto& b : model.budgets) audited += b.episodes;
                // Every short dataset is listed as a shortfall and nothing else is.
                std::vector<std::string> short_pairs;
                for (const auto& b : model.budgets)
                    if (b.collected < b.required) short_pairs.push_back(b.where);
                r.invariants["shortfalls_recorded"] = short_pairs == model.shortfalls;
                r.good_events["no_shortfall"] = model.shortfalls.empty();
            } else {
                for (const auto& a : model.layers) {
                    audited += a.episodes;
                    layers.push_back({{"h", a.h},
                                      {"episodes", a.episodes},
                                      {"agc_episodes", a.agc_episodes},
                                      {"n_p", a.n_p},
                                      {"n_r", a.n_r},
                                      {"hits", a.hits},
                                      {"reward_samples", a.reward_samples},
                                      {"dynamics_samples", a.dynamics_samples},
                                      {"good_states", a.good_states}});
                }
                r.invariants["quotas_met"] = detail::quotas_met(model.budgets);
                r.invariants["dataset_shape"] = std::all_of(model.layers.begin(), model.layers.end(), [&](const LayerAudit& a) {
                    return a.dynamics_samples == a.hits * env->layout().layer_size(a.h + 1) && a.reward_samples == a.hits;
                });
                const Acdd acdd = model.acdd();
                bool stochastic = true;
                for (const auto& c : detail::probe_contexts(cmdp, cfg.n_eval_contexts, eval_rng)) {
                    try {
                        validate_mdp(acdd.build(c).model);
                    } catch (const Error&) {
                        stochastic = false;
                    }
                }
                r.invariants["acdd_rows_stochastic"] = stochastic;
            }
            if (cmdp.is_finite())
                r.good_events["good_sets_cover_truth"] = detail::sets_contain(
                    model.sets, detail::true_good_states(cmdp, model.params.gamma, model.params.beta));
            r.audit = {{"budgets", detail::budgets_json(model.budgets)},
                       {"agc_episodes", model.agc_episodes},
                       {"degenerate_rows", model.degenerate_rows},
                       {"shortfalls", model.shortfalls},
                       {"params", model.params.to_json()},
                       {"layers", layers}};
            sub = detail::measure_suboptimality(cmdp, policy_map(model), cfg.n_eval_contexts, eval_rng);
            if (cfg.write_models) r.model = model_to_json(model, r.learner_seed);
        }
        r.invariants["episode_accounting"] = audited == r.episodes_used && session.episodes() == r.episodes_used;
        r.suboptimality = sub.value;
        r.suboptimality_stderr = sub.stderr_;
        r.suboptimality_method = sub.method;
        r.invariants["suboptimality_nonnegative"] = sub.method != "exact" || sub.value >= -1e-9;
        r.success = sub.value <= cfg.threshold();
    } catch (const ConfigError&) {
        throw;
    } catch (const Error& e) {
        r.error = e.what();
        r.success = false;
    }
    r.wall_time_s = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    return r;
}

/// All seeds of a config on a worker pool; rows come back in seed order.
inline Report run(const ExperimentConfig& cfg) {
    cfg.validate();
    const auto start = std::chrono::steady_clock::now();
    Report report;
    report.config = cfg;
    report.seeds.resize(cfg.n_seeds);
    std::size_t workers = cfg.workers ? cfg.workers : std::max(1u, std::thread::hardware_concurrency());
    workers = std::min(workers, cfg.n_seeds);
    std::atomic<std::size_t> next{0};
    std::mutex fail_mutex;
    std::exception_ptr failure;
    auto work = [&] {
        for (std::size_t i = next++; i < cfg.n_seeds; i = next++) {
            try {
                report.seeds[i] = run_seed(cfg, i);
            } catch (...) {
                std::lock_guard<std::mutex> lock(fail_mutex);
                if (!failure) failure = std::current_exception();
            }
        }
    };
    if (workers <= 1) {
        work();
    } else {
        std::vector<std::thread> pool;
        for (std::size_t w = 0; w < workers; ++w) pool.emplace_back(work);
        for (auto& t : pool) t.join();
    }
    if (failure) std::rethrow_exception(failure);
    report.wall_time_s = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    return report;
}

/// Output directory: CMDP_LAB_OUT when set, else the config's output.
inline std::filesystem::path output_dir(const ExperimentConfig& cfg) {
    if (const char* env = std::getenv("CMDP_LAB_OUT"); env && *env) return env;
    return cfg.output;
}

inline std::filesystem::path write_report(const Report& report) {
    const auto dir = output_dir(report.config);
    std::filesystem::create_directories(dir);
    const auto path = dir / (report.config.name + "-report." + report.config.format);
    std::ofstream out(path);
    if (report.config.format == "csv")
        out << report.to_csv();
    else
        out << report.to_json().dump(2) << '\n';
    if (report.config.write_models) {
        const auto models = dir / (report.config.name + "-models");
        std::filesystem::create_directories(models);
        for (const auto& s : report.seeds)
            if (!s.model.is_null()) std::ofstream(models / ("seed-" + std::to_string(s.index) + ".json")) << s.model.dump(2) << '\n';
    }
    if (!out) throw Error("cannot write report " + path.string());
    return path;
}

/// Sets a dotted path (e.g. "learner.eps") in a JSON document.
inline void set_path(nlohmann::json& doc, const std::string& path, double value) {
    nlohmann::json* node = &doc;
    std::size_t pos = 0;
    while (true) {
        const std::size_t dot = path.find('.', pos);
        const std::string key = path.substr(pos, dot == std::string::npos ? std::string::npos : dot - pos);
        if (key.empty()) throw ConfigError("bad sweep parameter path '" + path + "'");
        if (dot == std::string::npos) {
            (*node)[key] = value;
            return;
        }
        node = &(*node)[key];
        pos = dot + 1;
    }
}

struct SweepPoint {
    double value = 0.0;
    Report report;
};

/// One run per grid value of a dotted parameter path.
inline std::vector<SweepPoint> sweep(const ExperimentConfig& base, const std::string& param,
                                     const std::vector<double>& values) {
    if (values.empty()) throw ConfigError("sweep grid is empty");
    if (param.empty()) throw ConfigError("sweep needs a parameter path");
    std::vector<SweepPoint> out;
    for (double v : values) {
        nlohmann::json doc = base.source.is_null() ? base.to_json() : base.source;
        doc.erase("sweep");
        set_path(doc, param, v);
        ExperimentConfig cfg = ExperimentConfig::from_json(doc);
        cfg.workers = base.workers;
        out.push_back({v, run(cfg)});
    }
    return out;
}

/// Columns: param, episodes_used, suboptimality (means over seeds).
inline std::string sweep_csv(const std::vector<SweepPoint>& points) {
    std::ostringstream out;
    out << std::setprecision(17) << "param,episodes_used,suboptimality\n";
    for (const auto& p : points)
        out << p.value << ',' << p.report.mean_episodes() << ',' << p.report.mean_suboptimality() << '\n';
    return out.str();
}

}  // namespace cmdp
