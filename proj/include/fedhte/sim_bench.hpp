#pragma once

// Simulation designs with transportable and non-transportable sources, the
// projection-truth oracle and the Monte Carlo study runner.

#include "fedhte/dr_solver.hpp"
#include "fedhte/error.hpp"
#include "fedhte/federation/coordinator.hpp"
#include "fedhte/federation/site.hpp"
#include "fedhte/inference.hpp"
#include "fedhte/numeric.hpp"
#include "fedhte/pipeline.hpp"
#include "fedhte/table_io.hpp"

#include <array>
#include <atomic>
#include <cstdio>
#include <functional>
#include <map>
#include <mutex>
#include <numeric>
#include <random>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

namespace fedhte::sim {

enum class Scenario { transportable, non_transportable };
enum class Setting { I, II, III };
enum class Role { ps, outcome };
enum class SiteKind { target, source, source_large };  // large: n_m at or above the median

inline std::string to_string(Scenario s) {
  return s == Scenario::transportable ? "transportable" : "non_transportable";
}
inline std::string to_string(Setting s) {
  return s == Setting::I ? "I" : (s == Setting::II ? "II" : "III");
}
inline Scenario scenario_from_string(const std::string& s) {
  if (s == "transportable") return Scenario::transportable;
  if (s == "non_transportable" || s == "nontransportable") return Scenario::non_transportable;
  throw ConfigError("unknown scenario '" + s + "'");
}
inline Setting setting_from_string(const std::string& s) {
  if (s == "I" || s == "1") return Setting::I;
  if (s == "II" || s == "2") return Setting::II;
  if (s == "III" || s == "3") return Setting::III;
  throw ConfigError("unknown setting '" + s + "'");
}

using Vec2 = std::array<double, 2>;
using Vec4 = std::array<double, 4>;

struct DgpConfig {
  Scenario scenario = Scenario::transportable;
  Setting setting = Setting::I;
  int n1 = 300;
  int Ks = 10;
  int n_min = 1500;
  int n_max = 2000;
  Vec2 mu1{0.1, 0.15};
  Vec2 theta1{0.5, 0.5};
  std::array<Vec2, 3> mu_m{Vec2{0.35, 0.3}, Vec2{0.45, 0.4}, Vec2{0.55, 0.5}};
  std::array<Vec2, 3> theta_m{Vec2{0.56, 0.61}, Vec2{0.62, 0.68}, Vec2{0.68, 0.75}};
  double psi0 = 0.0;
  Vec4 psi11{0.7, 0.7, -0.25, 0.6};
  Vec4 psi10{0.1, 0.1, -0.55, 0.1};
  double eta0 = -0.1;
  Vec4 eta{0.7, 0.7, -0.3, 0.3};
  std::uint64_t seed = 1;

  // Sources of 400-600 rows accompany n1 = 100, 1500-2000 otherwise.
  static DgpConfig transportable(int n1, int Ks, Setting setting) {
    DgpConfig c;
    c.n1 = n1;
    c.Ks = Ks;
    c.setting = setting;
    if (n1 <= 100) {
      c.n_min = 400;
      c.n_max = 600;
    }
    return c;
  }

  // psi10 keeps the transportable value; only psi11 changes in this design.
  static DgpConfig non_transportable() {
    DgpConfig c;
    c.scenario = Scenario::non_transportable;
    c.n1 = 400;
    c.Ks = 20;
    c.mu_m = {Vec2{0.35, 0.35}, Vec2{0.39, 0.39}, Vec2{0.43, 0.43}};
    c.theta_m = {Vec2{0.57, 0.57}, Vec2{0.6, 0.6}, Vec2{0.63, 0.63}};
    c.psi11 = {0.6, 0.6, -0.3, 0.6};
    c.eta0 = 0.0;
    return c;
  }
};

inline const std::vector<std::string>& covariate_names() {
  static const std::vector<std::string> names{"X1", "X2", "X3", "X4"};
  return names;
}

// Group 0, 1, 2 for each size by rank (stable by index): floor(3 rank / K).
inline std::vector<int> tertile_groups(const std::vector<int>& sizes) {
  const std::size_t k = sizes.size();
  std::vector<std::size_t> order(k);
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) { return sizes[a] < sizes[b]; });
  std::vector<int> g(k);
  for (std::size_t r = 0; r < k; ++r) g[order[r]] = static_cast<int>((3 * r) / k);
  return g;
}

// True for the upper half of sizes by rank: the sources at or above the median.
inline std::vector<bool> upper_half(const std::vector<int>& sizes) {
  const std::size_t k = sizes.size();
  std::vector<std::size_t> order(k);
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) { return sizes[a] < sizes[b]; });
  std::vector<bool> up(k, false);
  for (std::size_t r = k / 2; r < k; ++r) up[order[r]] = true;
  return up;
}

struct SourceInfo {
  int tertile = 0;
  SiteKind kind = SiteKind::source;
};

struct ScenarioData {
  ObservationTable target;
  std::vector<ObservationTable> sources;  // ids source01, source02, ...
  std::vector<SourceInfo> info;
};

inline std::string source_id(int m) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "source%02d", m);
  return buf;
}

inline Matrix draw_covariates(Rng& rng, int n, const Vec2& mu, const Vec2& theta) {
  std::normal_distribution<double> z(0.0, 1.0);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  Matrix x(n, 4);
  for (int i = 0; i < n; ++i) {
    x(i, 0) = mu[0] + z(rng);
    x(i, 1) = mu[1] + z(rng);
    x(i, 2) = u(rng) < theta[0] ? 1.0 : 0.0;
    x(i, 3) = u(rng) < theta[1] ? 1.0 : 0.0;
  }
  return x;
}

inline double dot4(const Vec4& c, const Matrix& x, Eigen::Index i) {
  return c[0] * x(i, 0) + c[1] * x(i, 1) + c[2] * x(i, 2) + c[3] * x(i, 3);
}

inline ObservationTable draw_site(Rng& rng, const DgpConfig& c, const std::string& id, int n,
                                  const Vec2& mu, const Vec2& theta) {
  const Matrix x = draw_covariates(rng, n, mu, theta);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  Vector a(n), y(n);
  for (int i = 0; i < n; ++i) {
    a[i] = u(rng) < expit(c.eta0 + dot4(c.eta, x, i)) ? 1.0 : 0.0;
    const Vec4& psi = a[i] == 1.0 ? c.psi11 : c.psi10;
    y[i] = u(rng) < expit(c.psi0 + dot4(psi, x, i)) ? 1.0 : 0.0;
  }
  return ObservationTable(id, std::move(y), std::move(a), x, covariate_names(), {0});
}

// Deterministic in (config, rep).
inline ScenarioData generate_scenario(const DgpConfig& c, int rep) {
  const std::uint64_t rep_seed = replicate_seed(c.seed, "replicate", static_cast<std::uint64_t>(rep));
  Rng size_rng(replicate_seed(rep_seed, "sizes", 0));
  std::uniform_int_distribution<int> size(c.n_min, c.n_max);
  std::vector<int> sizes(static_cast<std::size_t>(c.Ks));
  for (auto& s : sizes) s = size(size_rng);
  const auto groups = tertile_groups(sizes);
  const auto large = upper_half(sizes);

  ScenarioData d;
  Rng trng(replicate_seed(rep_seed, "target", 0));
  d.target = draw_site(trng, c, "target", c.n1, c.mu1, c.theta1);
  for (int m = 0; m < c.Ks; ++m) {
    const auto k = static_cast<std::size_t>(m);
    const std::string id = source_id(m + 1);
    Rng srng(replicate_seed(rep_seed, id, 0));
    d.sources.push_back(draw_site(srng, c, id, sizes[k], c.mu_m[static_cast<std::size_t>(groups[k])],
                                  c.theta_m[static_cast<std::size_t>(groups[k])]));
    d.info.push_back({groups[k], large[k] ? SiteKind::source_large : SiteKind::source});
  }
  return d;
}

// Working nuisance model for a site under the chosen design.
inline GlmSpec misspecify(Scenario scenario, Setting setting, Role role, SiteKind kind) {
  const std::vector<std::string> all{"X1", "X2", "X3", "X4"};
  GlmSpec s;
  s.family = GlmFamily::bernoulli_logit;
  s.include_treatment_main_and_interactions = role == Role::outcome;
  s.predictor_columns = all;
  if (scenario == Scenario::non_transportable) {
    if (role == Role::outcome || kind == SiteKind::source_large) s.predictor_columns = {"X3", "X4"};
    return s;
  }
  if (setting == Setting::II && role == Role::ps) s.predictor_columns = {"X1", "X2"};
  if (setting == Setting::III && role == Role::outcome) s.predictor_columns = {"X1", "X3"};
  return s;
}

inline WorkingDesign default_design() {
  return WorkingDesign::standard(LinkFunction(LinkKind::logit), {"X1"});
}

inline TiltSpec default_tilt() { return TiltSpec{{"X1", "X2", "X3", "X4"}, true}; }

// ---------------------------------------------------------------------------
// Truth oracle

struct TruthOptions {
  long n_oracle = 2'000'000;  // split into two independent halves
  std::uint64_t seed = 20240601;
  bool bernoulli = false;  // draw Y(a); default integrates them out
  long n_check = 1'000'000;
};

struct TruthResult {
  Vector beta;        // average of the halves
  Vector half_a;
  Vector half_b;
  double max_half_diff = 0.0;
  Vector mc_se;       // per-coordinate Monte Carlo SE of beta
  Vector check_residual;     // moment residual at beta on a fresh sample
  Vector check_residual_se;
  bool agreement_ok = false;  // halves within 0.005
  bool residual_ok = false;   // fresh residual within 4 SE
  std::vector<std::string> labels;
};

namespace detail {

inline std::vector<Eigen::Index> design_modifier_indices(const WorkingDesign& design) {
  std::vector<Eigen::Index> out;
  for (const auto& m : design.modifier_names()) {
    const auto& names = covariate_names();
    auto it = std::find(names.begin(), names.end(), m);
    if (it == names.end()) throw ConfigError("design modifier '" + m + "' is not a simulated covariate");
    out.push_back(static_cast<Eigen::Index>(it - names.begin()));
  }
  return out;
}

// Potential-outcome means (or draws) under the target covariate law.
inline OutcomeProjection oracle_projection(const DgpConfig& c, const WorkingDesign& design, long n,
                                           std::uint64_t seed, bool bernoulli) {
  Rng rng(seed);
  const Matrix x = draw_covariates(rng, static_cast<int>(n), c.mu1, c.theta1);
  Vector g0(n), g1(n);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  for (long i = 0; i < n; ++i) {
    const double m0 = expit(c.psi0 + dot4(c.psi10, x, i));
    const double m1 = expit(c.psi0 + dot4(c.psi11, x, i));
    g0[i] = bernoulli ? (u(rng) < m0 ? 1.0 : 0.0) : m0;
    g1[i] = bernoulli ? (u(rng) < m1 ? 1.0 : 0.0) : m1;
  }
  const ObservationTable t("oracle", Vector::Zero(n), Vector::Zero(n), x, covariate_names(),
                           design_modifier_indices(design));
  return OutcomeProjection(build_design_rows(t, design), std::move(g0), std::move(g1), design.link());
}

inline std::pair<Vector, Vector> oracle_solve(const DgpConfig& c, const WorkingDesign& design,
                                              long n, std::uint64_t seed, bool bernoulli) {
  const OutcomeProjection proj = oracle_projection(c, design, n, seed, bernoulli);
  HteEstimate e = solve_beta(proj, Vector::Zero(design.q()));
  if (!e.converged) throw NumericalError("truth oracle did not converge");
  // Sandwich SE of the oracle's own estimating equation.
  const Matrix t = -proj.jacobian(e.beta);
  const Matrix terms = proj.terms(e.beta);
  const Matrix tinv = t.inverse();
  const Matrix phi = terms * tinv;
  const double nn = static_cast<double>(n);
  const Vector se = ((phi.transpose() * phi).diagonal() / (nn * nn)).cwiseSqrt();
  return {e.beta, se};
}

}  // namespace detail

// beta_0 solving sum_i sum_a eta(x~_i, a)[Y_i(a) - l^{-1}(eta' beta)] = 0 over
// a large draw from the target covariate law. By default Y_i(a) is replaced by
// its conditional mean, which has the same solution in expectation and far
// smaller Monte Carlo error.
inline TruthResult truth_oracle(const DgpConfig& c, const WorkingDesign& design,
                                const TruthOptions& opt = {}) {
  if (opt.n_oracle < 1000) throw ConfigError("n_oracle must be at least 1000");
  TruthResult r;
  r.labels = design.labels();
  const long half = opt.n_oracle / 2;
  auto [ba, sa] = detail::oracle_solve(c, design, half, replicate_seed(opt.seed, "oracle-a", 0), opt.bernoulli);
  auto [bb, sb] = detail::oracle_solve(c, design, half, replicate_seed(opt.seed, "oracle-b", 0), opt.bernoulli);
  r.half_a = ba;
  r.half_b = bb;
  r.beta = 0.5 * (ba + bb);
  r.max_half_diff = (ba - bb).cwiseAbs().maxCoeff();
  r.mc_se = 0.5 * (sa.cwiseAbs2() + sb.cwiseAbs2()).cwiseSqrt();
  r.agreement_ok = r.max_half_diff < 0.005;

  const OutcomeProjection fresh = detail::oracle_projection(
      c, design, opt.n_check, replicate_seed(opt.seed, "oracle-check", 0), opt.bernoulli);
  const Matrix terms = fresh.terms(r.beta);
  const double n = static_cast<double>(terms.rows());
  r.check_residual = terms.colwise().mean().transpose();
  r.check_residual_se = column_sd(terms) / std::sqrt(n);
  r.residual_ok = (r.check_residual.cwiseAbs().array() <= 4.0 * r.check_residual_se.array()).all();
  return r;
}

// ---------------------------------------------------------------------------
// Monte Carlo study

enum class Estimator { target_only, fed_ss, fed_ss_naive, fed_bs };

inline std::string to_string(Estimator e) {
  switch (e) {
    case Estimator::target_only: return "Target-only";
    case Estimator::fed_ss: return "Fed-SS";
    case Estimator::fed_ss_naive: return "Fed-SSnaive";
    case Estimator::fed_bs: return "Fed-BS";
  }
  return "?";
}

inline Estimator estimator_from_string(const std::string& s) {
  if (s == "target_only" || s == "Target-only") return Estimator::target_only;
  if (s == "fed_ss" || s == "Fed-SS") return Estimator::fed_ss;
  if (s == "fed_ss_naive" || s == "Fed-SSnaive") return Estimator::fed_ss_naive;
  if (s == "fed_bs" || s == "Fed-BS") return Estimator::fed_bs;
  throw ConfigError("unknown estimator '" + s + "'");
}

struct MetricsRow {
  std::string estimator;
  std::string coefficient;
  double bias = 0.0;
  double mcsd = 0.0;
  double bse = 0.0;  // NaN when the study ran without bootstrap
  double cp = 0.0;   // percent
};

struct RepOutcome {
  bool ok = false;
  std::string error;
  std::map<Estimator, Vector> beta;
  std::map<Estimator, Vector> se;
  int excluded = 0;  // Fed-BS
};

struct StudyOptions {
  std::vector<Estimator> estimators{Estimator::target_only, Estimator::fed_ss,
                                    Estimator::fed_ss_naive};
  int reps = 100;
  int B = 200;  // 0: point estimates only
  int threads = 1;
  SelectionOptions selection;
  double max_failure_rate = 0.05;
  std::function<void(int done, int total)> progress;
};

struct StudyResult {
  Vector beta0;
  std::vector<std::string> labels;
  std::vector<MetricsRow> rows;
  std::map<Estimator, Matrix> estimates;  // successful reps x q
  double mean_excluded = std::nan("");
  int failures = 0;
  std::vector<std::string> failure_messages;

  const MetricsRow& row(Estimator e, const std::string& coef) const {
    for (const auto& r : rows) {
      if (r.estimator == to_string(e) && r.coefficient == coef) return r;
    }
    throw ConfigError("no metrics for " + to_string(e) + " / " + coef);
  }
};

// One Monte Carlo replicate: every estimator from the same data, fits and
// bootstrap replicates.
inline RepOutcome run_replicate(const DgpConfig& cfg, int rep, const StudyOptions& opt) {
  RepOutcome out;
  const ScenarioData data = generate_scenario(cfg, rep);
  const WorkingDesign design = default_design();
  const TiltSpec tilt = default_tilt();
  const Eigen::Index q = design.q();
  const GlmSpec t_ps = misspecify(cfg.scenario, cfg.setting, Role::ps, SiteKind::target);
  const GlmSpec t_or = misspecify(cfg.scenario, cfg.setting, Role::outcome, SiteKind::target);
  const std::uint64_t boot_seed = replicate_seed(cfg.seed, "bootstrap", static_cast<std::uint64_t>(rep));

  TargetState state = prepare_target(data.target, design, t_ps, t_or);
  const HteEstimate t_est = solve_beta(state.projection, state.p1.p);
  if (!t_est.converged || !state.p1.nuisance_converged) throw NumericalError("target fit did not converge");

  std::optional<TargetBootstrap> tb;
  if (opt.B > 0) tb = make_target_bootstrap(data.target, design, t_ps, t_or, tilt, BootstrapPlan{opt.B, boot_seed});
  const Vector full_moments = target_moments(data.target, tilt);
  const Matrix moments = tb ? tb->moments : Matrix(0, tilt.dimension());

  auto wants = [&](Estimator e) {
    return std::find(opt.estimators.begin(), opt.estimators.end(), e) != opt.estimators.end();
  };
  std::vector<AugmentationVector> full_t, full_u;
  std::map<std::string, std::vector<AugmentationVector>> reps_t, reps_u;
  std::map<std::string, Eigen::Index> sizes;
  for (std::size_t m = 0; m < data.sources.size(); ++m) {
    const ObservationTable& s = data.sources[m];
    wire::RoundConfig rc;
    rc.design = wire::DesignDescriptor::from(design);
    rc.tilt = tilt;
    rc.ps = misspecify(cfg.scenario, cfg.setting, Role::ps, data.info[m].kind);
    rc.or_spec = misspecify(cfg.scenario, cfg.setting, Role::outcome, data.info[m].kind);
    rc.base_seed = boot_seed;
    const wire::MomentRequest req = wire::build_request(rc, s.site_id(), full_moments, moments);
    const wire::SiteComputation sc = wire::compute_site(s, req);
    full_t.push_back(wire::to_augmentation_vector(sc.tilted, sc.tilted.full));
    full_u.push_back(wire::to_augmentation_vector(sc.untilted, sc.untilted.full));
    reps_t[s.site_id()] = wire::replicate_vectors(sc.tilted);
    reps_u[s.site_id()] = wire::replicate_vectors(sc.untilted);
    sizes[s.site_id()] = s.n();
  }

  auto t_se = [&]() -> Vector {
    if (!tb) return Vector::Constant(q, std::nan(""));
    std::vector<std::optional<Vector>> r;
    for (int b = 0; b < tb->B(); ++b) {
      r.push_back(tb->ok[static_cast<std::size_t>(b)] ? std::optional<Vector>(tb->beta.row(b).transpose())
                                                      : std::nullopt);
    }
    BootstrapSummary s = summarize_replicates(r, q);
    check_failure_rate(s, tb->B());
    return s.se;
  };
  auto fed = [&](const std::vector<AugmentationVector>& full,
                 const std::map<std::string, std::vector<AugmentationVector>>& reps,
                 const WeightScheme& scheme, Vector& beta, Vector& se) {
    FederatedEstimate f = estimate_federated_from_state(state, full, design, scheme);
    if (!f.estimate.converged) throw NumericalError("federated solve did not converge");
    beta = f.estimate.beta;
    se = tb ? federated_bootstrap(*tb, reps, f.weights, q).se : Vector::Constant(q, std::nan(""));
  };

  if (wants(Estimator::target_only)) {
    out.beta[Estimator::target_only] = t_est.beta;
    out.se[Estimator::target_only] = t_se();
  }
  if (wants(Estimator::fed_ss)) {
    fed(full_t, reps_t, WeightScheme::sample_size(), out.beta[Estimator::fed_ss], out.se[Estimator::fed_ss]);
  }
  if (wants(Estimator::fed_ss_naive)) {
    fed(full_u, reps_u, WeightScheme::sample_size(), out.beta[Estimator::fed_ss_naive],
        out.se[Estimator::fed_ss_naive]);
  }
  if (wants(Estimator::fed_bs)) {
    if (!tb) throw ConfigError("Fed-BS needs bootstrap replicates (B > 0)");
    const SelectionReport rep = select_from_replicates(*tb, reps_t, sizes, WeightScheme::sample_size(), opt.selection);
    out.excluded = static_cast<int>(rep.excluded().size());
    fed(full_t, reps_t, WeightScheme::with_weights(rep.final_weights), out.beta[Estimator::fed_bs],
        out.se[Estimator::fed_bs]);
  }
  out.ok = true;
  return out;
}

inline std::vector<MetricsRow> compute_metrics(const std::string& estimator, const Matrix& betas,
                                               const Matrix& ses, const Vector& beta0,
                                               const std::vector<std::string>& labels) {
  std::vector<MetricsRow> rows;
  const Vector mean = betas.colwise().mean().transpose();
  const Vector sd = column_sd(betas);
  for (Eigen::Index j = 0; j < betas.cols(); ++j) {
    MetricsRow r;
    r.estimator = estimator;
    r.coefficient = labels[static_cast<std::size_t>(j)];
    r.bias = mean[j] - beta0[j];
    r.mcsd = sd[j];
    r.bse = ses.col(j).mean();
    int cover = 0;
    for (Eigen::Index i = 0; i < betas.rows(); ++i) {
      if (std::abs(betas(i, j) - beta0[j]) <= kZ975 * ses(i, j)) ++cover;
    }
    r.cp = std::isfinite(r.bse) ? 100.0 * cover / static_cast<double>(betas.rows()) : std::nan("");
    rows.push_back(r);
  }
  return rows;
}

inline StudyResult run_study(const DgpConfig& cfg, const Vector& beta0, const StudyOptions& opt) {
  if (opt.reps < 2) throw ConfigError("a study needs at least 2 replicates");
  const WorkingDesign design = default_design();
  std::vector<RepOutcome> outcomes(static_cast<std::size_t>(opt.reps));
  std::atomic<int> next{0};
  std::atomic<int> done{0};
  std::mutex progress_mu;
  auto worker = [&]() {
    for (;;) {
      const int r = next.fetch_add(1);
      if (r >= opt.reps) return;
      RepOutcome o;
      try {
        o = run_replicate(cfg, r, opt);
      } catch (const std::exception& e) {
        o.ok = false;
        o.error = "replicate " + std::to_string(r) + ": " + e.what();
      }
      outcomes[static_cast<std::size_t>(r)] = std::move(o);
      const int d = ++done;
      if (opt.progress) {
        std::lock_guard<std::mutex> lock(progress_mu);
        opt.progress(d, opt.reps);
      }
    }
  };
  const int nthreads = std::max(1, opt.threads);
  if (nthreads == 1) {
    worker();
  } else {
    std::vector<std::thread> pool;
    for (int t = 0; t < nthreads; ++t) pool.emplace_back(worker);
    for (auto& t : pool) t.join();
  }

  StudyResult res;
  res.beta0 = beta0;
  res.labels = design.labels();
  std::vector<const RepOutcome*> good;
  for (const auto& o : outcomes) {
    if (o.ok) {
      good.push_back(&o);
    } else {
      ++res.failures;
      res.failure_messages.push_back(o.error);
    }
  }
  if (res.failures > opt.max_failure_rate * opt.reps) {
    std::string msg = std::to_string(res.failures) + " of " + std::to_string(opt.reps) +
                      " replicates failed (limit " + std::to_string(opt.max_failure_rate * 100) + "%)";
    for (std::size_t k = 0; k < res.failure_messages.size() && k < 5; ++k) msg += "\n  " + res.failure_messages[k];
    throw NumericalError(msg);
  }
  const auto n_ok = static_cast<Eigen::Index>(good.size());
  for (Estimator e : opt.estimators) {
    Matrix b(n_ok, design.q()), s(n_ok, design.q());
    for (Eigen::Index i = 0; i < n_ok; ++i) {
      b.row(i) = good[static_cast<std::size_t>(i)]->beta.at(e).transpose();
      s.row(i) = good[static_cast<std::size_t>(i)]->se.at(e).transpose();
    }
    auto rows = compute_metrics(to_string(e), b, s, beta0, res.labels);
    res.rows.insert(res.rows.end(), rows.begin(), rows.end());
    res.estimates[e] = b;
    if (e == Estimator::fed_bs) {
      double tot = 0.0;
      for (const auto* o : good) tot += o->excluded;
      res.mean_excluded = tot / static_cast<double>(n_ok);
    }
  }
  return res;
}

// Long format: estimator,coefficient,metric,value (values on the natural scale).
inline std::string metrics_csv(const StudyResult& r) {
  std::ostringstream out;
  out.precision(10);
  out << "estimator,coefficient,metric,value\n";
  for (const auto& m : r.rows) {
    out << m.estimator << ',' << m.coefficient << ",bias," << m.bias << '\n';
    out << m.estimator << ',' << m.coefficient << ",mcsd," << m.mcsd << '\n';
    out << m.estimator << ',' << m.coefficient << ",bse," << m.bse << '\n';
    out << m.estimator << ',' << m.coefficient << ",cp," << m.cp / 100.0 << '\n';
  }
  if (std::isfinite(r.mean_excluded)) out << "Fed-BS,,mean_excluded," << r.mean_excluded << '\n';
  return out.str();
}

// Table layout: one line per estimator, Bias MCSD BSE CP per coefficient,
// everything multiplied by 100 with one decimal.
inline std::string metrics_table(const StudyResult& r, const std::string& title) {
  std::ostringstream out;
  out << title << "\n";
  char buf[64];
  std::string header = "            ";
  for (const auto& l : r.labels) {
    std::snprintf(buf, sizeof buf, "| %-27s ", l.c_str());
    header += buf;
  }
  out << header << "\n            ";
  for (std::size_t k = 0; k < r.labels.size(); ++k) out << "|  Bias  MCSD   BSE    CP  ";
  out << "\n";
  std::vector<std::string> order;
  for (const auto& m : r.rows) {
    if (std::find(order.begin(), order.end(), m.estimator) == order.end()) order.push_back(m.estimator);
  }
  for (const auto& e : order) {
    std::snprintf(buf, sizeof buf, "%-12s", e.c_str());
    out << buf;
    for (const auto& l : r.labels) {
      for (const auto& m : r.rows) {
        if (m.estimator != e || m.coefficient != l) continue;
        std::snprintf(buf, sizeof buf, "| %5.1f %5.1f %5.1f %5.1f ", 100 * m.bias, 100 * m.mcsd,
                      100 * m.bse, m.cp);
        out << buf;
      }
    }
    out << "\n";
  }
  if (std::isfinite(r.mean_excluded)) {
    std::snprintf(buf, sizeof buf, "Fed-BS mean sources excluded: %.2f\n", r.mean_excluded);
    out << buf;
  }
  return out.str();
}

}  // namespace fedhte::sim
