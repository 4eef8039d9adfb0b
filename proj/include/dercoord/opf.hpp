#pragma once

#include <cmath>
#include <complex>
#include <optional>
#include <vector>

#include <Eigen/Dense>

#include "dercoord/common.hpp"
#include "dercoord/conic.hpp"
#include "dercoord/network.hpp"

namespace dercoord {

/// Exact AC power-flow state. Sign convention throughout: injections are
/// generation minus consumption, so loads enter as negative injections and
/// the slack injection is positive when the feeder imports power.
struct PowerFlowSolution {
  std::vector<std::complex<double>> voltages;    // per bus, pu
  std::vector<std::complex<double>> injections;  // per bus, pu (recomputed)
  std::complex<double> slack_power;              // injection at bus 0, pu
  double residual = 0.0;
  int iterations = 0;
};

/// Newton-Raphson solve of s_i = v_i * sum_j y_ij^* (v_i^* - v_j^*) at all
/// non-slack buses, slack fixed at 1+0j. `injections` has one complex entry
/// per bus in pu; entry 0 is ignored.
inline PowerFlowSolution solve_ac_oracle(
    const RadialNetwork& net, const std::vector<std::complex<double>>& injections,
    int max_iters = 50, double tol = 1e-11) {
  const int nb = net.n_buses();
  if (static_cast<int>(injections.size()) != nb)
    throw DimensionError("injections must have one entry per bus");
  for (const auto& s : injections)
    if (!std::isfinite(s.real()) || !std::isfinite(s.imag()))
      throw ValueError("injection must be finite");

  const int n = nb - 1;  // unknown buses
  std::vector<std::complex<double>> v(static_cast<std::size_t>(nb),
                                      std::complex<double>(1.0, 0.0));
  PowerFlowSolution out;
  out.voltages = v;
  out.injections.assign(static_cast<std::size_t>(nb), {0.0, 0.0});
  if (n == 0) return out;

  auto computed_injection = [&](int i) {
    std::complex<double> acc{0.0, 0.0};
    for (const auto& [j, y] : net.neighbors(i))
      acc += std::conj(y) *
             (std::conj(v[static_cast<std::size_t>(i)]) -
              std::conj(v[static_cast<std::size_t>(j)]));
    return v[static_cast<std::size_t>(i)] * acc;
  };

  Eigen::MatrixXd jac(2 * n, 2 * n);
  Eigen::VectorXd f(2 * n), step(2 * n);
  double worst = kInf;
  int it = 0;
  for (it = 0; it < max_iters; ++it) {
    worst = 0.0;
    for (int i = 1; i < nb; ++i) {
      std::complex<double> mismatch =
          computed_injection(i) - injections[static_cast<std::size_t>(i)];
      f[2 * (i - 1)] = mismatch.real();
      f[2 * (i - 1) + 1] = mismatch.imag();
      worst = std::max({worst, std::abs(mismatch.real()),
                        std::abs(mismatch.imag())});
    }
    if (worst < tol) break;

    jac.setZero();
    for (int i = 1; i < nb; ++i) {
      std::complex<double> ti{0.0, 0.0};  // sum_j y*(v_i* - v_j*)
      std::complex<double> ysum{0.0, 0.0};
      for (const auto& [j, y] : net.neighbors(i)) {
        ti += std::conj(y) * (std::conj(v[static_cast<std::size_t>(i)]) -
                              std::conj(v[static_cast<std::size_t>(j)]));
        ysum += y;
      }
      const std::complex<double> vi = v[static_cast<std::size_t>(i)];
      // dS_i/da_i, dS_i/db_i with v_i = a_i + j*b_i
      std::complex<double> d_ai = ti + vi * std::conj(ysum);
      std::complex<double> d_bi =
          std::complex<double>(0, 1) * ti -
          std::complex<double>(0, 1) * vi * std::conj(ysum);
      int row = 2 * (i - 1);
      jac(row, row) = d_ai.real();
      jac(row + 1, row) = d_ai.imag();
      jac(row, row + 1) = d_bi.real();
      jac(row + 1, row + 1) = d_bi.imag();
      for (const auto& [j, y] : net.neighbors(i)) {
        if (j == 0) continue;
        std::complex<double> d_aj = -vi * std::conj(y);
        std::complex<double> d_bj = std::complex<double>(0, 1) * vi * std::conj(y);
        int col = 2 * (j - 1);
        jac(row, col) = d_aj.real();
        jac(row + 1, col) = d_aj.imag();
        jac(row, col + 1) = d_bj.real();
        jac(row + 1, col + 1) = d_bj.imag();
      }
    }
    step = jac.partialPivLu().solve(f);
    for (int i = 1; i < nb; ++i) {
      v[static_cast<std::size_t>(i)] -=
          std::complex<double>(step[2 * (i - 1)], step[2 * (i - 1) + 1]);
    }
  }
  if (worst >= 1e-8)
    throw NoConvergence("power flow did not converge: residual " +
                        std::to_string(worst));
  out.voltages = v;
  for (int i = 0; i < nb; ++i)
    out.injections[static_cast<std::size_t>(i)] = computed_injection(i);
  out.slack_power = out.injections[0];
  out.residual = worst;
  out.iterations = it;
  return out;
}

/// Variable indices of one SOCP power-flow block over a horizon.
struct WBlock {
  int n_buses = 0;
  int horizon = 0;
  // (bus,t): squared voltage magnitude w_ii, net injection components
  std::vector<int> w_diag, s_re, s_im;
  // (edge,t): off-diagonal w_ij = v_i v_j^* split into re/im
  std::vector<int> w_re, w_im;

  int wd(int bus, int t) const { return w_diag[idx(bus, t)]; }
  int sre(int bus, int t) const { return s_re[idx(bus, t)]; }
  int sim(int bus, int t) const { return s_im[idx(bus, t)]; }
  int wre(int edge, int t) const { return w_re[eidx(edge, t)]; }
  int wim(int edge, int t) const { return w_im[eidx(edge, t)]; }

  std::size_t idx(int bus, int t) const {
    return static_cast<std::size_t>(t) * static_cast<std::size_t>(n_buses) +
           static_cast<std::size_t>(bus);
  }
  std::size_t eidx(int edge, int t) const {
    return static_cast<std::size_t>(t) * static_cast<std::size_t>(n_buses - 1) +
           static_cast<std::size_t>(edge);
  }
};

struct FlowOptions {
  double w_min = 0.25;  // pu^2 box on squared voltages, keeps problems bounded
  double w_max = 4.0;
};

/// Per-bus per-step injection pins: real/reactive affine expressions in
/// already-created variables (or constants). Empty optional = left free.
struct InjectionHandles {
  std::vector<std::optional<LinExpr>> p;  // size n_buses*horizon, bus-major per step
  std::vector<std::optional<LinExpr>> q;
};

/// Emits the relaxed flow physics per step: linking equalities
/// s_i = sum_j (w_ii - w_ij) y_ij^* split into re/im, one cone per edge
/// encoding |w_ij|^2 <= w_ii w_jj, slack w_00 fixed to 1, and optional
/// equalities pinning injections to the supplied handles.
inline WBlock build_flow_constraints(ProgramBuilder& pb, const RadialNetwork& net,
                                     int horizon, const InjectionHandles& inj,
                                     const FlowOptions& opt = {}) {
  const int nb = net.n_buses();
  const int ne = static_cast<int>(net.edges().size());
  const std::size_t want = static_cast<std::size_t>(nb) *
                           static_cast<std::size_t>(horizon);
  if (inj.p.size() != want || inj.q.size() != want)
    throw DimensionError("injection handles do not match buses*horizon");

  WBlock wb;
  wb.n_buses = nb;
  wb.horizon = horizon;
  wb.w_diag.resize(want);
  wb.s_re.resize(want);
  wb.s_im.resize(want);
  wb.w_re.resize(static_cast<std::size_t>(ne) * static_cast<std::size_t>(horizon));
  wb.w_im.resize(wb.w_re.size());

  for (int t = 0; t < horizon; ++t) {
    for (int b = 0; b < nb; ++b) {
      double lo = b == 0 ? 1.0 : opt.w_min;
      double hi = b == 0 ? 1.0 : opt.w_max;
      wb.w_diag[wb.idx(b, t)] = pb.add_var(lo, hi);
      wb.s_re[wb.idx(b, t)] = pb.add_var();
      wb.s_im[wb.idx(b, t)] = pb.add_var();
    }
    for (int e = 0; e < ne; ++e) {
      wb.w_re[wb.eidx(e, t)] = pb.add_var();
      wb.w_im[wb.eidx(e, t)] = pb.add_var();
    }

    // flow equalities: injection minus edge contributions = 0
    std::vector<LinExpr> rows_re(static_cast<std::size_t>(nb));
    std::vector<LinExpr> rows_im(static_cast<std::size_t>(nb));
    for (int b = 0; b < nb; ++b) {
      rows_re[static_cast<std::size_t>(b)].add(wb.sre(b, t), 1.0);
      rows_im[static_cast<std::size_t>(b)].add(wb.sim(b, t), 1.0);
    }
    for (int e = 0; e < ne; ++e) {
      const Edge& ed = net.edges()[static_cast<std::size_t>(e)];
      const std::complex<double> y = ed.admittance();
      const double g = y.real();
      const double bs = y.imag();
      const int i = ed.from_bus;
      const int j = ed.to_bus;
      const int wii = wb.wd(i, t), wjj = wb.wd(j, t);
      const int wre = wb.wre(e, t), wim = wb.wim(e, t);
      // at from-bus i: y^* (w_ii - w_ij), w_ij = wre + j*wim
      rows_re[static_cast<std::size_t>(i)].add(wii, -g).add(wre, g).add(wim, bs);
      rows_im[static_cast<std::size_t>(i)].add(wii, bs).add(wre, -bs).add(wim, g);
      // at to-bus j: y^* (w_jj - w_ij^*)
      rows_re[static_cast<std::size_t>(j)].add(wjj, -g).add(wre, g).add(wim, -bs);
      rows_im[static_cast<std::size_t>(j)].add(wjj, bs).add(wre, -bs).add(wim, -g);

      pb.add_rotated_soc({LinExpr::variable(wre), LinExpr::variable(wim)},
                         LinExpr::variable(wii), LinExpr::variable(wjj));
    }
    for (int b = 0; b < nb; ++b) {
      pb.add_eq(rows_re[static_cast<std::size_t>(b)], 0.0);
      pb.add_eq(rows_im[static_cast<std::size_t>(b)], 0.0);
    }

    for (int b = 0; b < nb; ++b) {
      const auto& ph = inj.p[wb.idx(b, t)];
      const auto& qh = inj.q[wb.idx(b, t)];
      if (ph) {
        LinExpr row = *ph;
        row.add(wb.sre(b, t), -1.0);
        pb.add_eq(row, 0.0);
      }
      if (qh) {
        LinExpr row = *qh;
        row.add(wb.sim(b, t), -1.0);
        pb.add_eq(row, 0.0);
      }
    }
  }
  return wb;
}

/// Hinge slacks for the soft voltage band on squared voltages:
/// over >= w_ii - vtol_plus^2, under >= vtol_minus^2 - w_ii, both >= 0,
/// quadratic cost weight lambda on each.
struct PenaltyBlock {
  std::vector<int> over_slack, under_slack;  // (bus,t), bus-major per step
  double lambda = 0.0;
  double vtol_plus = 1.045, vtol_minus = 0.955;
};

inline PenaltyBlock build_voltage_penalty(ProgramBuilder& pb, const WBlock& wb,
                                          double lambda, double vtol_plus,
                                          double vtol_minus) {
  if (!(vtol_minus < vtol_plus)) throw ValueError("inverted voltage band");
  if (lambda < 0) throw ValueError("lambda must be nonnegative");
  PenaltyBlock blk;
  blk.lambda = lambda;
  blk.vtol_plus = vtol_plus;
  blk.vtol_minus = vtol_minus;
  const double hi2 = vtol_plus * vtol_plus;
  const double lo2 = vtol_minus * vtol_minus;
  blk.over_slack.resize(wb.w_diag.size());
  blk.under_slack.resize(wb.w_diag.size());
  for (int t = 0; t < wb.horizon; ++t) {
    for (int b = 0; b < wb.n_buses; ++b) {
      int over = pb.add_var(0.0, kInf, lambda);
      int under = pb.add_var(0.0, kInf, lambda);
      int gap_o = pb.add_var(0.0);
      int gap_u = pb.add_var(0.0);
      // over - w_ii - gap_o = -hi2 with gap_o >= 0  <=>  over >= w_ii - hi2,
      // and over = max(w_ii - hi2, 0) at any optimum with lambda > 0
      LinExpr ro = LinExpr::variable(over);
      ro.add(wb.wd(b, t), -1.0).add(gap_o, -1.0);
      pb.add_eq(ro, -hi2);
      LinExpr ru = LinExpr::variable(under);
      ru.add(wb.wd(b, t), 1.0).add(gap_u, -1.0);
      pb.add_eq(ru, lo2);
      blk.over_slack[wb.idx(b, t)] = over;
      blk.under_slack[wb.idx(b, t)] = under;
    }
  }
  return blk;
}

/// Worst relaxation slack over all edges and steps: 1 - |w_ij|^2/(w_ii w_jj).
/// Zero means the solution is rank-1 (a physical voltage profile).
inline double relaxation_gap(const Eigen::VectorXd& x, const WBlock& wb,
                             const RadialNetwork& net) {
  double worst = 0.0;
  for (int t = 0; t < wb.horizon; ++t) {
    for (std::size_t e = 0; e < net.edges().size(); ++e) {
      const Edge& ed = net.edges()[e];
      double wii = x[wb.wd(ed.from_bus, t)];
      double wjj = x[wb.wd(ed.to_bus, t)];
      double re = x[wb.wre(static_cast<int>(e), t)];
      double im = x[wb.wim(static_cast<int>(e), t)];
      double gap = 1.0 - (re * re + im * im) / (wii * wjj);
      worst = std::max(worst, gap);
    }
  }
  return worst;
}

/// Overload for a gap computed against exact voltages: builds the rank-1 w.
inline double relaxation_gap(const std::vector<std::complex<double>>& v,
                             const RadialNetwork& net) {
  double worst = 0.0;
  for (const Edge& ed : net.edges()) {
    auto vi = v[static_cast<std::size_t>(ed.from_bus)];
    auto vj = v[static_cast<std::size_t>(ed.to_bus)];
    double wii = std::norm(vi), wjj = std::norm(vj);
    double wij2 = std::norm(vi * std::conj(vj));
    worst = std::max(worst, 1.0 - wij2 / (wii * wjj));
  }
  return worst;
}

}  // namespace dercoord
