#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <filesystem>
#include <fstream>
#include <utility>
#include <vector>

#include <Eigen/Dense>
#include <Eigen/Sparse>
#include <Eigen/SparseCholesky>
#include <json.hpp>

#include "dercoord/common.hpp"

namespace dercoord {

/// Affine expression over program variables: sum coef*x[var] + constant.
struct LinExpr {
  std::vector<std::pair<int, double>> terms;
  double constant = 0.0;

  LinExpr() = default;
  explicit LinExpr(double c) : constant(c) {}

  static LinExpr variable(int v, double coef = 1.0) {
    LinExpr e;
    e.terms.emplace_back(v, coef);
    return e;
  }

  LinExpr& add(int v, double coef) {
    terms.emplace_back(v, coef);
    return *this;
  }
  LinExpr& operator+=(const LinExpr& o) {
    terms.insert(terms.end(), o.terms.begin(), o.terms.end());
    constant += o.constant;
    return *this;
  }
  LinExpr& operator*=(double s) {
    for (auto& t : terms) t.second *= s;
    constant *= s;
    return *this;
  }
};

/// Convex program: minimize sum_i quadratic_diag[i]*x_i^2 + linear_cost.x
/// subject to eq_matrix*x = eq_rhs, lower <= x <= upper, and for each cone
/// (k_1..k_m): ||(x_{k_1},..,x_{k_{m-1}})||_2 <= x_{k_m}.
struct ConicProgram {
  int n_vars = 0;
  Eigen::VectorXd quadratic_diag;
  Eigen::VectorXd linear_cost;
  Eigen::SparseMatrix<double> eq_matrix;
  Eigen::VectorXd eq_rhs;
  Eigen::VectorXd lower;
  Eigen::VectorXd upper;
  std::vector<std::vector<int>> soc_cones;

  double objective_value(const Eigen::VectorXd& x) const {
    return quadratic_diag.dot(x.cwiseProduct(x)) + linear_cost.dot(x);
  }

  void validate() const {
    if (n_vars <= 0) throw DimensionError("program has no variables");
    if (quadratic_diag.size() != n_vars || linear_cost.size() != n_vars ||
        lower.size() != n_vars || upper.size() != n_vars)
      throw DimensionError("cost/bound vector size mismatch");
    if (eq_matrix.cols() != n_vars || eq_matrix.rows() != eq_rhs.size())
      throw DimensionError("equality block size mismatch");
    if ((quadratic_diag.array() < 0.0).any())
      throw ValueError("quadratic_diag must be nonnegative");
    for (int i = 0; i < n_vars; ++i)
      if (lower[i] > upper[i]) throw ValueError("lower bound exceeds upper bound");
    for (const auto& cone : soc_cones) {
      if (cone.size() < 2) throw DimensionError("cone needs >= 2 members");
      for (int k : cone)
        if (k < 0 || k >= n_vars) throw DimensionError("cone index out of range");
      if (lower[cone.back()] < 0.0)
        throw ValueError("cone radius variable needs lower bound >= 0");
    }
  }
};

enum class SolveStatus { optimal, infeasible, max_iters };

struct ConicSolution {
  Eigen::VectorXd x;
  double objective = 0.0;
  SolveStatus status = SolveStatus::max_iters;
  double primal_residual = kInf;
  double dual_residual = kInf;
  int iterations = 0;
};

struct SolverSettings {
  double eps_abs = 1e-6;
  double eps_rel = 1e-6;
  int max_iters = 200000;
  double alpha = 1.6;      // over-relaxation
  double rho = 0.1;        // step size; equality rows use rho*1e3
  double sigma = 1e-6;
  bool adaptive_rho = true;
  int check_every = 25;
  int scaling_iters = 10;
  // Infeasibility: residual stall (relative change < stall_tol over
  // stall_window iterations with primal residual still > infeas_primal)
  // or a primal-infeasibility certificate from the dual increments.
  double stall_tol = 1e-12;
  int stall_window = 1000;
  double infeas_primal = 1e-3;
};

namespace detail {

inline void project_soc(double* v, std::size_t m) {
  // members v[0..m-2], radius v[m-1]
  double norm = 0.0;
  for (std::size_t i = 0; i + 1 < m; ++i) norm += v[i] * v[i];
  norm = std::sqrt(norm);
  double t = v[m - 1];
  if (norm <= t) return;
  if (norm <= -t) {
    for (std::size_t i = 0; i < m; ++i) v[i] = 0.0;
    return;
  }
  double scale = 0.5 * (1.0 + t / norm);
  for (std::size_t i = 0; i + 1 < m; ++i) v[i] *= scale;
  v[m - 1] = scale * norm;
}

struct RowLayout {
  // Row blocks of the stacked constraint matrix: equalities, then box rows
  // (one per variable with a finite bound), then cone member rows.
  int m_eq = 0;
  std::vector<int> box_var;               // box row -> variable
  std::vector<std::pair<int, int>> cone_span;  // (first row, size) per cone
  int m_total = 0;
};

}  // namespace detail

/// Splitting solver: alternating projections onto the affine set and the
/// box/cone set with scaled dual updates (ADMM), Ruiz equilibration and
/// a directly factored quasi-definite KKT system. Deterministic: fixed
/// iteration order, no concurrency inside a solve.
class ConicSolver {
 public:
  explicit ConicSolver(const ConicProgram& prog, SolverSettings settings = {})
      : prog_(prog), st_(settings) {
    prog.validate();
    rho_in_ = st_.rho;
    rho_eq_ = st_.rho * 1e3;
    build_constraint_stack();
    equilibrate();
    assemble_kkt(rho_eq_, rho_in_);
  }

  ConicSolution solve(const Eigen::VectorXd* x0 = nullptr) {
    const int n = prog_.n_vars;
    const int m = layout_.m_total;
    Eigen::VectorXd x = Eigen::VectorXd::Zero(n);
    if (x0) {
      if (x0->size() != n) throw DimensionError("initial point size mismatch");
      x = D_.cwiseInverse().cwiseProduct(*x0);
    }
    Eigen::VectorXd z = A_s_ * x;
    project(z);
    Eigen::VectorXd y = Eigen::VectorXd::Zero(m);
    Eigen::VectorXd y_prev = y;

    Eigen::VectorXd rhs(n + m), sol(n + m), ztilde(m), zcand(m);
    ConicSolution best;
    best.x = D_.cwiseProduct(x);

    double last_stall_rp = kInf;
    int last_stall_iter = 0;

    int it = 0;
    for (it = 1; it <= st_.max_iters; ++it) {
      rhs.head(n) = st_.sigma * x - q_s_;
      rhs.tail(m) = z - rho_inv_.cwiseProduct(y);
      sol = kkt_.solve(rhs);
      const auto xt = sol.head(n);
      const auto nu = sol.tail(m);
      ztilde = z + rho_inv_.cwiseProduct(nu - y);
      x = st_.alpha * xt + (1.0 - st_.alpha) * x;
      zcand = st_.alpha * ztilde + (1.0 - st_.alpha) * z +
              rho_inv_.cwiseProduct(y);
      y_prev = y;
      z = zcand;
      project(z);
      y = rho_.cwiseProduct(zcand - z);

      if (it % st_.check_every == 0 || it == st_.max_iters) {
        Eigen::VectorXd xu = D_.cwiseProduct(x);
        Eigen::VectorXd zu = z.cwiseQuotient(E_);
        Eigen::VectorXd yu = E_.cwiseProduct(y) / cost_scale_;

        Eigen::VectorXd ax = A_ * xu;
        Eigen::VectorXd px = P_diag_.cwiseProduct(xu);
        Eigen::VectorXd aty = A_.transpose() * yu;
        double rp = (ax - zu).lpNorm<Eigen::Infinity>();
        double rd = (px + prog_.linear_cost + aty).lpNorm<Eigen::Infinity>();
        double eps_p = st_.eps_abs +
                       st_.eps_rel * std::max(ax.lpNorm<Eigen::Infinity>(),
                                              zu.lpNorm<Eigen::Infinity>());
        double eps_d =
            st_.eps_abs +
            st_.eps_rel * std::max({px.lpNorm<Eigen::Infinity>(),
                                    prog_.linear_cost.lpNorm<Eigen::Infinity>(),
                                    aty.lpNorm<Eigen::Infinity>()});
        if (rp <= eps_p && rd <= eps_d) {
          best.x = xu;
          best.status = SolveStatus::optimal;
          best.primal_residual = rp;
          best.dual_residual = rd;
          best.iterations = it;
          best.objective = prog_.objective_value(xu);
          return best;
        }
        best.x = xu;
        best.primal_residual = rp;
        best.dual_residual = rd;

        if (primal_infeasibility_certificate(y - y_prev)) {
          best.status = SolveStatus::infeasible;
          best.iterations = it;
          best.objective = prog_.objective_value(xu);
          return best;
        }
        // Residual stall.
        if (it - last_stall_iter >= st_.stall_window) {
          double rel = std::abs(rp - last_stall_rp) /
                       std::max(last_stall_rp, 1e-30);
          if (rel < st_.stall_tol && rp > st_.infeas_primal) {
            best.status = SolveStatus::infeasible;
            best.iterations = it;
            best.objective = prog_.objective_value(xu);
            return best;
          }
          last_stall_rp = rp;
          last_stall_iter = it;
        }

        if (st_.adaptive_rho && it % 200 == 0) {
          double num = rp / std::max({ax.lpNorm<Eigen::Infinity>(),
                                      zu.lpNorm<Eigen::Infinity>(), 1e-10});
          double den =
              rd / std::max({px.lpNorm<Eigen::Infinity>(),
                             prog_.linear_cost.lpNorm<Eigen::Infinity>(),
                             aty.lpNorm<Eigen::Infinity>(), 1e-10});
          double ratio = std::sqrt(num / std::max(den, 1e-30));
          ratio = std::clamp(ratio, 0.1, 10.0);
          if (ratio > 5.0 || ratio < 0.2) {
            rho_in_ = std::clamp(rho_in_ * ratio, 1e-6, 1e6);
            rho_eq_ = std::clamp(rho_eq_ * ratio, 1e-3, 1e9);
            assemble_kkt(rho_eq_, rho_in_);
          }
        }
      }
    }
    best.status = SolveStatus::max_iters;
    best.iterations = st_.max_iters;
    best.objective = prog_.objective_value(best.x);
    return best;
  }

 private:
  void build_constraint_stack() {
    const int n = prog_.n_vars;
    layout_.m_eq = static_cast<int>(prog_.eq_matrix.rows());
    for (int j = 0; j < n; ++j)
      if (std::isfinite(prog_.lower[j]) || std::isfinite(prog_.upper[j]))
        layout_.box_var.push_back(j);
    int m = layout_.m_eq + static_cast<int>(layout_.box_var.size());
    for (const auto& cone : prog_.soc_cones) {
      layout_.cone_span.emplace_back(m, static_cast<int>(cone.size()));
      m += static_cast<int>(cone.size());
    }
    layout_.m_total = m;

    std::vector<Eigen::Triplet<double>> trips;
    trips.reserve(static_cast<std::size_t>(prog_.eq_matrix.nonZeros()) +
                  layout_.box_var.size() + 16);
    for (int k = 0; k < prog_.eq_matrix.outerSize(); ++k)
      for (Eigen::SparseMatrix<double>::InnerIterator itr(prog_.eq_matrix, k);
           itr; ++itr)
        trips.emplace_back(static_cast<int>(itr.row()),
                           static_cast<int>(itr.col()), itr.value());
    int r = layout_.m_eq;
    for (int j : layout_.box_var) trips.emplace_back(r++, j, 1.0);
    for (std::size_t c = 0; c < prog_.soc_cones.size(); ++c) {
      int first = layout_.cone_span[c].first;
      const auto& cone = prog_.soc_cones[c];
      for (std::size_t k = 0; k < cone.size(); ++k)
        trips.emplace_back(first + static_cast<int>(k), cone[k], 1.0);
    }
    A_.resize(layout_.m_total, n);
    A_.setFromTriplets(trips.begin(), trips.end());
    P_diag_ = 2.0 * prog_.quadratic_diag;
  }

  void equilibrate() {
    const int n = prog_.n_vars;
    const int m = layout_.m_total;
    D_ = Eigen::VectorXd::Ones(n);
    E_ = Eigen::VectorXd::Ones(m);
    cost_scale_ = 1.0;
    A_s_ = A_;
    Eigen::VectorXd p = P_diag_;
    q_s_ = prog_.linear_cost;

    auto clamp_scale = [](double v) {
      if (!(v > 0)) return 1.0;
      return std::clamp(v, 1e-6, 1e6);
    };

    for (int round = 0; round < st_.scaling_iters; ++round) {
      // column norms over [P; A]
      Eigen::VectorXd cnorm = Eigen::VectorXd::Zero(n);
      for (int j = 0; j < n; ++j) cnorm[j] = std::abs(p[j]);
      for (int k = 0; k < A_s_.outerSize(); ++k)
        for (Eigen::SparseMatrix<double>::InnerIterator itr(A_s_, k); itr; ++itr)
          cnorm[itr.col()] = std::max(cnorm[itr.col()], std::abs(itr.value()));
      Eigen::VectorXd d(n);
      for (int j = 0; j < n; ++j)
        d[j] = 1.0 / std::sqrt(clamp_scale(cnorm[j]));

      Eigen::VectorXd rnorm = Eigen::VectorXd::Zero(m);
      for (int k = 0; k < A_s_.outerSize(); ++k)
        for (Eigen::SparseMatrix<double>::InnerIterator itr(A_s_, k); itr; ++itr)
          rnorm[itr.row()] = std::max(rnorm[itr.row()], std::abs(itr.value()));
      // one factor per cone so the scaled cone is still a cone
      for (const auto& [first, size] : layout_.cone_span) {
        double mx = 0.0;
        for (int i = first; i < first + size; ++i) mx = std::max(mx, rnorm[i]);
        for (int i = first; i < first + size; ++i) rnorm[i] = mx;
      }
      Eigen::VectorXd e(m);
      for (int i = 0; i < m; ++i) e[i] = 1.0 / std::sqrt(clamp_scale(rnorm[i]));

      for (int k = 0; k < A_s_.outerSize(); ++k)
        for (Eigen::SparseMatrix<double>::InnerIterator itr(A_s_, k); itr; ++itr)
          itr.valueRef() *= e[itr.row()] * d[itr.col()];
      p.array() *= d.array().square();
      q_s_.array() *= d.array();
      D_.array() *= d.array();
      E_.array() *= e.array();

      double pmean = p.size() > 0 ? p.cwiseAbs().mean() : 0.0;
      double g = 1.0 / clamp_scale(std::max(
                     pmean, q_s_.lpNorm<Eigen::Infinity>()));
      p *= g;
      q_s_ *= g;
      cost_scale_ *= g;
    }
    P_s_diag_ = p;

    // scaled box bounds and equality rhs
    lower_s_.resize(layout_.box_var.size());
    upper_s_.resize(layout_.box_var.size());
    for (std::size_t k = 0; k < layout_.box_var.size(); ++k) {
      int j = layout_.box_var[k];
      double e = E_[layout_.m_eq + static_cast<int>(k)];
      lower_s_[k] = prog_.lower[j] * e;
      upper_s_[k] = prog_.upper[j] * e;
    }
    rhs_eq_s_ = prog_.eq_rhs;
    for (int i = 0; i < layout_.m_eq; ++i) rhs_eq_s_[i] *= E_[i];
  }

  void assemble_kkt(double rho_eq, double rho_in) {
    const int n = prog_.n_vars;
    const int m = layout_.m_total;
    rho_.resize(m);
    for (int i = 0; i < m; ++i) rho_[i] = i < layout_.m_eq ? rho_eq : rho_in;
    rho_inv_ = rho_.cwiseInverse();

    std::vector<Eigen::Triplet<double>> trips;
    trips.reserve(static_cast<std::size_t>(A_s_.nonZeros()) + n + m);
    for (int j = 0; j < n; ++j)
      trips.emplace_back(j, j, P_s_diag_[j] + st_.sigma);
    for (int k = 0; k < A_s_.outerSize(); ++k)
      for (Eigen::SparseMatrix<double>::InnerIterator itr(A_s_, k); itr; ++itr) {
        trips.emplace_back(n + static_cast<int>(itr.row()),
                           static_cast<int>(itr.col()), itr.value());
        trips.emplace_back(static_cast<int>(itr.col()),
                           n + static_cast<int>(itr.row()), itr.value());
      }
    for (int i = 0; i < m; ++i) trips.emplace_back(n + i, n + i, -rho_inv_[i]);
    Eigen::SparseMatrix<double> kkt(n + m, n + m);
    kkt.setFromTriplets(trips.begin(), trips.end());
    if (!kkt_analyzed_) {
      kkt_.analyzePattern(kkt);
      kkt_analyzed_ = true;
    }
    kkt_.factorize(kkt);
    if (kkt_.info() != Eigen::Success)
      throw SolverFailure("KKT factorization failed");
  }

  void project(Eigen::VectorXd& z) const {
    for (int i = 0; i < layout_.m_eq; ++i) z[i] = rhs_eq_s_[i];
    int base = layout_.m_eq;
    for (std::size_t k = 0; k < layout_.box_var.size(); ++k)
      z[base + static_cast<int>(k)] =
          std::clamp(z[base + static_cast<int>(k)], lower_s_[k], upper_s_[k]);
    for (const auto& [first, size] : layout_.cone_span)
      detail::project_soc(z.data() + first, static_cast<std::size_t>(size));
  }

  bool primal_infeasibility_certificate(const Eigen::VectorXd& dy_scaled) const {
    Eigen::VectorXd dy = E_.cwiseProduct(dy_scaled) / cost_scale_;
    double norm_dy = dy.lpNorm<Eigen::Infinity>();
    if (norm_dy < 1e-12) return false;
    double eps = 1e-9 * norm_dy;
    if ((A_.transpose() * dy).lpNorm<Eigen::Infinity>() > eps) return false;
    // support function of the constraint set in direction dy must be negative
    double support = 0.0;
    for (int i = 0; i < layout_.m_eq; ++i) support += prog_.eq_rhs[i] * dy[i];
    int base = layout_.m_eq;
    for (std::size_t k = 0; k < layout_.box_var.size(); ++k) {
      double v = dy[base + static_cast<int>(k)];
      int j = layout_.box_var[k];
      if (v > eps) {
        if (!std::isfinite(prog_.upper[j])) return false;
        support += prog_.upper[j] * v;
      } else if (v < -eps) {
        if (!std::isfinite(prog_.lower[j])) return false;
        support += prog_.lower[j] * v;
      }
    }
    for (const auto& [first, size] : layout_.cone_span) {
      // sup over the cone is 0 iff -dy block is in the (self-dual) cone
      double nrm = 0.0;
      for (int i = first; i + 1 < first + size; ++i) nrm += dy[i] * dy[i];
      nrm = std::sqrt(nrm);
      if (nrm > -dy[first + size - 1] + eps) return false;
    }
    return support < -eps;
  }

  const ConicProgram& prog_;
  SolverSettings st_;
  detail::RowLayout layout_;
  Eigen::SparseMatrix<double> A_;    // unscaled stack
  Eigen::SparseMatrix<double> A_s_;  // scaled stack
  Eigen::VectorXd P_diag_;           // unscaled 2*quadratic_diag
  Eigen::VectorXd P_s_diag_;
  Eigen::VectorXd q_s_;
  Eigen::VectorXd D_, E_;
  double cost_scale_ = 1.0;
  Eigen::VectorXd lower_s_, upper_s_, rhs_eq_s_;
  Eigen::VectorXd rho_, rho_inv_;
  double rho_eq_ = 0.1 * 1e3;
  double rho_in_ = 0.1;
  Eigen::SimplicialLDLT<Eigen::SparseMatrix<double>> kkt_;
  bool kkt_analyzed_ = false;
};

inline ConicSolution solve(const ConicProgram& prog,
                           const SolverSettings& settings = {},
                           const Eigen::VectorXd* x0 = nullptr) {
  ConicSolver solver(prog, settings);
  return solver.solve(x0);
}

/// Incremental assembly of a ConicProgram.
class ProgramBuilder {
 public:
  int add_var(double lb = -kInf, double ub = kInf, double quad = 0.0,
              double lin = 0.0) {
    lower_.push_back(lb);
    upper_.push_back(ub);
    quad_.push_back(quad);
    lin_.push_back(lin);
    return static_cast<int>(lower_.size()) - 1;
  }

  int n_vars() const { return static_cast<int>(lower_.size()); }

  void set_bounds(int v, double lb, double ub) {
    lower_[static_cast<std::size_t>(v)] = lb;
    upper_[static_cast<std::size_t>(v)] = ub;
  }
  void add_linear_cost(int v, double c) { lin_[static_cast<std::size_t>(v)] += c; }
  void add_quadratic_cost(int v, double c) {
    quad_[static_cast<std::size_t>(v)] += c;
  }

  /// expr == rhs
  void add_eq(const LinExpr& expr, double rhs = 0.0) {
    for (const auto& [v, c] : expr.terms)
      trips_.emplace_back(n_eq_, v, c);
    rhs_.push_back(rhs - expr.constant);
    ++n_eq_;
  }

  /// ||(x_{k1},..,x_{k,m-1})|| <= x_{km}; forces radius lower bound >= 0.
  void add_soc(std::vector<int> members_then_radius) {
    int radius = members_then_radius.back();
    auto& lb = lower_[static_cast<std::size_t>(radius)];
    lb = std::max(lb, 0.0);
    cones_.push_back(std::move(members_then_radius));
  }

  /// |w|^2 <= u*v with u,v >= 0, via one standard cone:
  /// ||(2*w_1,..,2*w_k, u-v)|| <= u+v. w components, u and v are affine.
  void add_rotated_soc(const std::vector<LinExpr>& w, const LinExpr& u,
                       const LinExpr& v) {
    std::vector<int> cone;
    for (const LinExpr& wi : w) {
      int t = add_var();
      LinExpr row = wi;
      row *= 2.0;
      row.add(t, -1.0);
      add_eq(row, 0.0);
      cone.push_back(t);
    }
    int td = add_var();
    {
      LinExpr row = u;
      LinExpr mv = v;
      mv *= -1.0;
      row += mv;
      row.add(td, -1.0);
      add_eq(row, 0.0);
    }
    int ts = add_var(0.0);
    {
      LinExpr row = u;
      row += v;
      row.add(ts, -1.0);
      add_eq(row, 0.0);
    }
    cone.push_back(td);
    cone.push_back(ts);
    add_soc(std::move(cone));
  }

  ConicProgram build() const {
    ConicProgram p;
    p.n_vars = n_vars();
    p.quadratic_diag = Eigen::Map<const Eigen::VectorXd>(quad_.data(),
                                                         (long)quad_.size());
    p.linear_cost =
        Eigen::Map<const Eigen::VectorXd>(lin_.data(), (long)lin_.size());
    p.lower =
        Eigen::Map<const Eigen::VectorXd>(lower_.data(), (long)lower_.size());
    p.upper =
        Eigen::Map<const Eigen::VectorXd>(upper_.data(), (long)upper_.size());
    p.eq_matrix.resize(n_eq_, p.n_vars);
    p.eq_matrix.setFromTriplets(trips_.begin(), trips_.end());
    p.eq_rhs = Eigen::Map<const Eigen::VectorXd>(rhs_.data(), (long)rhs_.size());
    p.soc_cones = cones_;
    return p;
  }

 private:
  std::vector<double> lower_, upper_, quad_, lin_;
  std::vector<Eigen::Triplet<double>> trips_;
  std::vector<double> rhs_;
  int n_eq_ = 0;
  std::vector<std::vector<int>> cones_;
};

/// Debug dump: dimensions, sparsity and cone structure of a program.
inline void dump_program(const ConicProgram& p, const std::filesystem::path& path) {
  nlohmann::json j;
  j["n_vars"] = p.n_vars;
  j["n_eq"] = p.eq_matrix.rows();
  j["eq_nnz"] = p.eq_matrix.nonZeros();
  j["n_cones"] = p.soc_cones.size();
  nlohmann::json sizes = nlohmann::json::array();
  for (const auto& c : p.soc_cones) sizes.push_back(c.size());
  j["cone_sizes"] = sizes;
  int bounded = 0;
  for (int i = 0; i < p.n_vars; ++i)
    if (std::isfinite(p.lower[i]) || std::isfinite(p.upper[i])) ++bounded;
  j["bounded_vars"] = bounded;
  j["quad_nnz"] = (p.quadratic_diag.array() != 0.0).count();
  std::ofstream out(path);
  out << j.dump(2) << "\n";
}

}  // namespace dercoord
