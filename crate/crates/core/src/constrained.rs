//! BMI-constrained Koopman fits: the spectral-radius (asymptotic stability)
//! constraint and the (weighted) H-infinity norm regularizer, both handled by
//! an alternating scheme of convex LMI solves.
//!
//! Each fit alternates two steps: with `P` fixed (initial guess `P = I`),
//! solve the LMI problem in `(U, nu, W[, gamma])`; with `U` fixed, solve a
//! feasibility problem for `P`. The iteration stops when the cost stops
//! changing by more than a relative tolerance or an iteration cap is hit.

use crate::error::{Error, Result};
use crate::lti::{spectral_radius, StateSpace};
use crate::regressors::{compute_l, install_edmd_cost, FitMeta, KoopmanModel};
use crate::sdp::{self, MatExpr, SdProblem, SolveSettings, SolveStatus, VarId};
use crate::snapshots::SnapshotMatrices;
use nalgebra::DMatrix;
use std::collections::BTreeMap;
use std::path::Path;
use std::time::Instant;

/// Cap on `lambda_max(P)/lambda_min(P)` enforced in every P-step.
const P_CONDITION_CAP: f64 = 1e8;

/// Options of the alternating scheme.
#[derive(Debug, Clone)]
pub struct BmiOptions {
    /// Relative objective-change tolerance for convergence.
    pub tol: f64,
    pub max_iter: usize,
    pub solver: SolveSettings,
}

impl Default for BmiOptions {
    fn default() -> Self {
        Self {
            tol: 1e-4,
            max_iter: 40,
            solver: SolveSettings::default(),
        }
    }
}

/// One record of the alternation.
#[derive(Debug, Clone)]
pub struct BmiIteration {
    pub iter: usize,
    /// Full cost `c - 2 tr(U G^T) + nu [+ (beta/q) gamma]`.
    pub objective: f64,
    pub gamma: Option<f64>,
    /// Spectral radius of the iterate's `A` block.
    pub rho: f64,
    /// `||P_new - P_old||_F / ||P_old||_F` after the following P-step.
    pub p_residual: f64,
    /// Smallest constraint eigenvalue reported by the U-step verification.
    pub min_constraint_eig: f64,
    pub wall_ms: f64,
}

/// Verbatim record of the alternation, plus the convergence verdict.
#[derive(Debug, Clone)]
pub struct BmiIterationLog {
    pub iterations: Vec<BmiIteration>,
    pub converged: bool,
    pub reason: String,
}

impl BmiIterationLog {
    /// Write the log as CSV with columns `iter,objective,gamma,rho,wall_ms`.
    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut w = csv::Writer::from_path(path.as_ref())?;
        w.write_record(["iter", "objective", "gamma", "rho", "wall_ms"])?;
        for it in &self.iterations {
            w.write_record([
                it.iter.to_string(),
                format!("{}", it.objective),
                it.gamma.map_or_else(String::new, |g| format!("{g}")),
                format!("{}", it.rho),
                format!("{:.3}", it.wall_ms),
            ])?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Result of one U-step solve, consumed by the P-step and the driver.
#[derive(Debug, Clone)]
pub struct UStepData {
    pub u: DMatrix<f64>,
    pub objective: f64,
    pub gamma: Option<f64>,
    pub rho: f64,
    pub min_constraint_eig: f64,
}

/// Generic alternating driver shared by the constrained fits.
///
/// `u_step` solves the LMI problem at fixed `P`; `p_step` solves the
/// feasibility problem for `P` at the fixed U-step solution. Convergence is
/// declared when `|J_k - J_{k-1}| / max(1, |J_{k-1}|) < tol`; an infinite
/// tolerance returns after the first iteration. Hitting `max_iter` sets a
/// flag rather than raising.
pub fn bmi_alternate(
    mut u_step: impl FnMut(&DMatrix<f64>) -> Result<UStepData>,
    mut p_step: impl FnMut(&UStepData) -> Result<Option<DMatrix<f64>>>,
    p0: DMatrix<f64>,
    options: &BmiOptions,
) -> Result<(UStepData, BmiIterationLog)> {
    let mut p = p0;
    let mut prev_obj: Option<f64> = None;
    let mut log = BmiIterationLog {
        iterations: Vec::new(),
        converged: false,
        reason: format!("iteration cap ({}) reached", options.max_iter),
    };
    let mut best: Option<UStepData> = None;

    for k in 1..=options.max_iter {
        let t0 = Instant::now();
        let data = u_step(&p)?;
        let mut record = BmiIteration {
            iter: k,
            objective: data.objective,
            gamma: data.gamma,
            rho: data.rho,
            p_residual: 0.0,
            min_constraint_eig: data.min_constraint_eig,
            wall_ms: 0.0,
        };

        let rel_change = prev_obj
            .map(|pj| (data.objective - pj).abs() / f64::max(1.0, pj.abs()));
        prev_obj = Some(data.objective);
        best = Some(data);

        let converged = options.tol.is_infinite()
            || rel_change.map(|r| r < options.tol).unwrap_or(false);
        if converged {
            record.wall_ms = t0.elapsed().as_secs_f64() * 1e3;
            log.iterations.push(record);
            log.converged = true;
            log.reason = match rel_change {
                Some(r) => format!("relative objective change {r:.3e} below tolerance"),
                None => "tolerance is infinite".to_string(),
            };
            break;
        }

        if k < options.max_iter {
            match p_step(best.as_ref().unwrap())? {
                Some(p_new) => {
                    record.p_residual = (&p_new - &p).norm() / p.norm().max(1e-300);
                    p = p_new;
                }
                None => {
                    // The P-step cannot produce a verified strictly feasible
                    // update (the iterate sits on the constraint boundary);
                    // keep the current feasible iterate.
                    record.wall_ms = t0.elapsed().as_secs_f64() * 1e3;
                    log.iterations.push(record);
                    log.reason = "P-step stalled at the constraint boundary".to_string();
                    break;
                }
            }
        }
        record.wall_ms = t0.elapsed().as_secs_f64() * 1e3;
        log.iterations.push(record);
    }

    Ok((best.expect("at least one iteration"), log))
}

/// Selector matrices extracting `A = U S_a` and `B = U S_b`.
pub(crate) fn selectors(p_theta: usize, p_upsilon: usize) -> (DMatrix<f64>, DMatrix<f64>) {
    let p = p_theta + p_upsilon;
    let mut s_a = DMatrix::zeros(p, p_theta);
    for i in 0..p_theta {
        s_a[(i, i)] = 1.0;
    }
    let mut s_b = DMatrix::zeros(p, p_upsilon);
    for i in 0..p_upsilon {
        s_b[(p_theta + i, i)] = 1.0;
    }
    (s_a, s_b)
}

/// Install `[rho P, A^T P; P^T A, rho P] >= margin I` with `P` fixed and
/// `A = U S_a` variable.
pub(crate) fn stability_block_fixed_p(
    problem: &mut SdProblem,
    u: VarId,
    s_a: &DMatrix<f64>,
    p: &DMatrix<f64>,
    rho_bar: f64,
    margin: f64,
) {
    let r = p.nrows();
    let mut expr = MatExpr::zeros(2 * r);
    expr.add_const(0, 0, &(p * rho_bar));
    expr.add_const(r, r, &(p * rho_bar));
    // (0,1) = A^T P = S_a^T U^T P
    expr.add_product_tr(0, r, &s_a.transpose(), u, p, 1.0);
    // (1,0) = P^T A = P U S_a
    expr.add_product(r, 0, &p.transpose(), u, s_a, 1.0);
    problem.require_psd_with_margin(expr, margin, "stability block (P fixed)");
}

/// Build the P-step feasibility problem of the stability-constrained fit.
pub(crate) fn stability_p_step_problem(
    a: &DMatrix<f64>,
    rho_bar: f64,
    margin: f64,
) -> (SdProblem, VarId) {
    let r = a.nrows();
    let eye = DMatrix::<f64>::identity(r, r);
    let mut problem = SdProblem::new();
    let p = problem.sym_var(r);
    let mu = problem.scalar_var();
    // Maximize the slack of the stability block: when the U-step leaves
    // eigenvalues of A close to rho_bar, the feasible set for P is thin and
    // a pure feasibility solve stalls; the max-slack point is well centered
    // and still satisfies the U-step margin (t >= margin is enforced).
    let t = problem.scalar_var();

    let mut block = MatExpr::zeros(2 * r);
    block.add_product(0, 0, &eye, p, &eye, rho_bar);
    block.add_product(r, r, &eye, p, &eye, rho_bar);
    block.add_product(0, r, &a.transpose(), p, &eye, 1.0);
    block.add_product(r, 0, &eye, p, a, 1.0);
    block.add_scalar_mat(0, 0, t, &(-DMatrix::<f64>::identity(2 * r, 2 * r)));
    problem.require_psd_with_margin(block, 0.0, "stability block minus slack (U fixed)");

    let mut t_floor = MatExpr::zeros(1);
    t_floor.add_scalar_mat(0, 0, t, &DMatrix::identity(1, 1));
    t_floor.add_const(0, 0, &DMatrix::from_element(1, 1, -margin));
    problem.require_psd_with_margin(t_floor, 0.0, "t - margin");
    problem.add_objective_scalar(t, -1.0);

    let mut pd = MatExpr::zeros(r);
    pd.add_product(0, 0, &eye, p, &eye, 1.0);
    problem.require_psd_with_margin(pd, margin, "P");

    // Conditioning cap: mu I <= P <= cap * mu I.
    let mut lo = MatExpr::zeros(r);
    lo.add_product(0, 0, &eye, p, &eye, 1.0);
    lo.add_scalar_mat(0, 0, mu, &(-&eye));
    problem.require_psd_with_margin(lo, margin, "P - mu I");
    let mut hi = MatExpr::zeros(r);
    hi.add_scalar_mat(0, 0, mu, &(&eye * P_CONDITION_CAP));
    hi.add_product(0, 0, &eye, p, &eye, -1.0);
    problem.require_psd_with_margin(hi, margin, "cap mu I - P");

    // Scale fixed by tr(P) = r (the constraint set is homogeneous in P).
    problem.require_eq(vec![(p, eye.clone())], r as f64);
    (problem, p)
}

/// Solve the stability P-step and verify the candidate directly: the step's
/// contract is a strictly feasible `P`, so the returned matrix is accepted
/// whenever the eigenvalue checks pass, independent of the solver's
/// accuracy classification.
pub(crate) fn solve_stability_p_step(
    a: &DMatrix<f64>,
    rho_bar: f64,
    margin: f64,
    settings: &SolveSettings,
) -> Result<Option<DMatrix<f64>>> {
    // Solve with a hair of slack on the radius so the feasible set has an
    // interior even when eigenvalues of A sit at the bound, then verify the
    // candidate at the true radius.
    let (problem, pvar) = stability_p_step_problem(a, rho_bar * (1.0 + 1e-6), margin);
    let sol = sdp::solve(&problem, settings)?;
    if sol.status == SolveStatus::Infeasible {
        return Err(Error::InfeasibleStep(format!(
            "P-step infeasible ({})",
            sol.diagnostics.solver_status
        )));
    }
    let p = sol.value(pvar).clone();
    let n = p.nrows();
    let p_min = p
        .clone()
        .symmetric_eigenvalues()
        .iter()
        .copied()
        .fold(f64::INFINITY, f64::min);
    let mut block = DMatrix::zeros(2 * n, 2 * n);
    block.view_mut((0, 0), (n, n)).copy_from(&(&p * rho_bar));
    block.view_mut((n, n), (n, n)).copy_from(&(&p * rho_bar));
    block.view_mut((0, n), (n, n)).copy_from(&(a.transpose() * &p));
    block.view_mut((n, 0), (n, n)).copy_from(&(p.transpose() * a));
    let block_min = block
        .symmetric_eigenvalues()
        .iter()
        .copied()
        .fold(f64::INFINITY, f64::min);
    if p_min >= 0.5 * margin && block_min >= 0.5 * margin {
        Ok(Some(p))
    } else {
        Ok(None)
    }
}

/// EDMD with the modified Lyapunov spectral-radius constraint, solved by the
/// alternating fix-P / fix-U scheme from `P = I`.
///
/// The returned model satisfies `spectral_radius(A) <= rho_bar + 1e-6` for
/// every iterate, because the U-step constraint certifies it for any fixed
/// `P > 0`. If the first U-step is infeasible at the requested `rho_bar`,
/// the radius is relaxed to 1 and annealed back down over at most 5
/// intermediate solves before the main alternation continues.
pub fn fit_stability_constrained(
    snap: &SnapshotMatrices,
    rho_bar: f64,
    options: &BmiOptions,
) -> Result<(KoopmanModel, BmiIterationLog)> {
    if !(rho_bar > 0.0 && rho_bar <= 1.0) {
        return Err(Error::Config(format!(
            "rho_bar must lie in (0, 1], got {rho_bar}"
        )));
    }
    let p_theta = snap.p_theta;
    let (l, rank) = compute_l(&snap.psi, snap.q);
    let (s_a, _) = selectors(p_theta, snap.p_upsilon);
    let margin = options.solver.margin_coeff * (1.0 + 2.0 * p_theta as f64);

    let solve_u_step = |p_fixed: &DMatrix<f64>, rho: f64| -> Result<(sdp::Solution, VarId)> {
        let mut problem = SdProblem::new();
        let core = install_edmd_cost(&mut problem, snap, &l, Some(margin));
        stability_block_fixed_p(&mut problem, core.u, &s_a, p_fixed, rho, margin);
        let sol = sdp::solve(&problem, &options.solver)?;
        Ok((sol, core.u))
    };
    let solve_p_step = |a: &DMatrix<f64>| -> Result<Option<DMatrix<f64>>> {
        solve_stability_p_step(a, rho_bar, margin, &options.solver)
    };

    let mut first_call = true;
    let u_step = |p_fixed: &DMatrix<f64>| -> Result<UStepData> {
        let first = std::mem::take(&mut first_call);
        let (mut sol, uvar) = solve_u_step(p_fixed, rho_bar)?;
        if sol.status == SolveStatus::Infeasible && first {
            // Relax to rho = 1 and anneal back down geometrically.
            let mut p_anneal = p_fixed.clone();
            for step in 0..=5usize {
                let rho = rho_bar.powf(step as f64 / 5.0);
                let (s, _) = solve_u_step(&p_anneal, rho)?;
                if s.status != SolveStatus::Optimal {
                    return Err(Error::InfeasibleStep(format!(
                        "annealed U-step at rho = {rho} returned {:?}",
                        s.status
                    )));
                }
                let a = s.value(uvar).columns(0, p_theta).into_owned();
                if step < 5 {
                    match solve_p_step(&a)? {
                        Some(p_new) => p_anneal = p_new,
                        None => {}
                    }
                }
                sol = s;
            }
        }
        if sol.status != SolveStatus::Optimal {
            return Err(Error::InfeasibleStep(format!(
                "U-step returned {:?} ({})",
                sol.status, sol.diagnostics.solver_status
            )));
        }
        let u = sol.value(uvar).clone();
        let rho = spectral_radius(&u.columns(0, p_theta).into_owned());
        let min_eig = sol
            .diagnostics
            .constraint_min_eigs
            .iter()
            .copied()
            .fold(f64::INFINITY, f64::min);
        Ok(UStepData {
            objective: sol.objective,
            gamma: None,
            rho,
            min_constraint_eig: min_eig,
            u,
        })
    };
    let p_step = |data: &UStepData| -> Result<Option<DMatrix<f64>>> {
        solve_p_step(&data.u.columns(0, p_theta).into_owned())
    };

    let (best, log) = bmi_alternate(u_step, p_step, DMatrix::identity(p_theta, p_theta), options)?;

    let mut params = BTreeMap::new();
    params.insert("rho_bar".into(), rho_bar);
    let meta = FitMeta {
        method: "edmd-stability".into(),
        params,
        iterations: log.iterations.len(),
        final_cost: snap.cost_of(&best.u),
        rank: Some(rank),
        notes: if log.converged {
            Vec::new()
        } else {
            vec![log.reason.clone()]
        },
    };
    let model = KoopmanModel::new_full(best.u, p_theta, snap.dt, meta);
    Ok((model, log))
}

/// Output maps and weighting of the H-infinity regularized fit.
#[derive(Debug, Clone, Default)]
pub struct HinfOptions {
    /// Output map `C`; defaults to the identity on the lifted state.
    pub c: Option<DMatrix<f64>>,
    /// Feedthrough `D`; defaults to zero.
    pub d: Option<DMatrix<f64>>,
    /// Post-weighting filter cascaded after the Koopman system. A SISO
    /// weight is replicated across all output channels.
    pub weight: Option<StateSpace>,
}

pub(crate) struct AugmentedMaps {
    /// Constant part of the augmented `A` (weight coupling), `rw + r` total.
    pub(crate) a_const: DMatrix<f64>,
    pub(crate) b_const: DMatrix<f64>,
    pub(crate) c_aug: DMatrix<f64>,
    pub(crate) d_aug: DMatrix<f64>,
    pub(crate) r_total: usize,
}

pub(crate) fn augmented_maps(
    c: &DMatrix<f64>,
    d: &DMatrix<f64>,
    weight: &StateSpace,
    p_theta: usize,
    p_upsilon: usize,
) -> AugmentedMaps {
    let rw = weight.order();
    let r_total = p_theta + rw;
    let n_out = weight.n_outputs();
    let mut a_const = DMatrix::zeros(r_total, r_total);
    a_const
        .view_mut((p_theta, 0), (rw, p_theta))
        .copy_from(&(&weight.b * c));
    a_const
        .view_mut((p_theta, p_theta), (rw, rw))
        .copy_from(&weight.a);
    let mut b_const = DMatrix::zeros(r_total, p_upsilon);
    b_const
        .view_mut((p_theta, 0), (rw, p_upsilon))
        .copy_from(&(&weight.b * d));
    let mut c_aug = DMatrix::zeros(n_out, r_total);
    c_aug
        .view_mut((0, 0), (n_out, p_theta))
        .copy_from(&(&weight.d * c));
    c_aug
        .view_mut((0, p_theta), (n_out, rw))
        .copy_from(&weight.c);
    let d_aug = &weight.d * d;
    AugmentedMaps {
        a_const,
        b_const,
        c_aug,
        d_aug,
        r_total,
    }
}

/// Install the bounded-real block of the (possibly weighted) Koopman system
/// with `P` fixed, `U` variable, `gamma` variable.
#[allow(clippy::too_many_arguments)]
pub(crate) fn bounded_real_block_fixed_p(
    problem: &mut SdProblem,
    u: VarId,
    gamma: VarId,
    maps: &AugmentedMaps,
    s_a: &DMatrix<f64>,
    s_b: &DMatrix<f64>,
    p_theta: usize,
    p_fixed: &DMatrix<f64>,
    margin: f64,
) {
    let r = maps.r_total;
    let n_in = maps.b_const.ncols();
    let n_out = maps.c_aug.nrows();
    let s = 2 * r + n_in + n_out;
    // Embedding of the Koopman state block into the augmented state.
    let mut e1 = DMatrix::zeros(r, p_theta);
    for i in 0..p_theta {
        e1[(i, i)] = 1.0;
    }

    let mut expr = MatExpr::zeros(s);
    // (0,0) P, (1,1) P
    expr.add_const(0, 0, p_fixed);
    expr.add_const(r, r, p_fixed);
    // (0,1) A_aug P: variable part E1 U S_a E1^T P plus constant part.
    let right_a = s_a * e1.transpose() * p_fixed;
    expr.add_product(0, r, &e1, u, &right_a, 1.0);
    expr.add_const(0, r, &(&maps.a_const * p_fixed));
    // (1,0) = (A_aug P)^T
    let left_at = p_fixed.transpose() * &e1 * s_a.transpose();
    expr.add_product_tr(r, 0, &left_at, u, &e1.transpose(), 1.0);
    expr.add_const(r, 0, &(p_fixed.transpose() * maps.a_const.transpose()));
    // (0,2) B_aug = E1 U S_b + const
    expr.add_product(0, 2 * r, &e1, u, s_b, 1.0);
    expr.add_const(0, 2 * r, &maps.b_const);
    // (2,0) = B_aug^T
    expr.add_product_tr(2 * r, 0, &s_b.transpose(), u, &e1.transpose(), 1.0);
    expr.add_const(2 * r, 0, &maps.b_const.transpose());
    // (1,3) P C_aug^T, (3,1) C_aug P^T
    expr.add_const(r, 2 * r + n_in, &(p_fixed * maps.c_aug.transpose()));
    expr.add_const(2 * r + n_in, r, &(&maps.c_aug * p_fixed.transpose()));
    // (2,2) gamma I, (3,3) gamma I
    expr.add_scalar_mat(2 * r, 2 * r, gamma, &DMatrix::identity(n_in, n_in));
    expr.add_scalar_mat(
        2 * r + n_in,
        2 * r + n_in,
        gamma,
        &DMatrix::identity(n_out, n_out),
    );
    // (2,3) D_aug^T, (3,2) D_aug
    expr.add_const(2 * r, 2 * r + n_in, &maps.d_aug.transpose());
    expr.add_const(2 * r + n_in, 2 * r, &maps.d_aug);
    problem.require_psd_with_margin(expr, margin, "bounded-real block (P fixed)");
}

/// Solve the H-infinity P-step at a fixed system: minimize the norm bound
/// `gamma` jointly with `P`, so the returned `P` certifies the iterate's
/// actual weighted norm. A pure feasibility step at the U-step's minimized
/// `gamma` would leave the bound arbitrarily slack (nothing retightens it)
/// and often has no interior; minimizing keeps the reported `gamma` within
/// tolerance of the true norm at convergence. Falls back to plain
/// feasibility at a relaxed bound if the minimizing solve fails numerically.
pub(crate) fn solve_hinf_p_step(
    a_aug: &DMatrix<f64>,
    b_aug: &DMatrix<f64>,
    c_aug: &DMatrix<f64>,
    d_aug: &DMatrix<f64>,
    gamma_hint: f64,
    margin: f64,
    settings: &SolveSettings,
) -> Result<Option<DMatrix<f64>>> {
    let (problem, pvar) = hinf_p_step_problem(a_aug, b_aug, c_aug, d_aug, None, false, margin);
    let sol = sdp::solve(&problem, settings)?;
    if sol.status == SolveStatus::Optimal {
        return Ok(Some(sol.value(pvar).clone()));
    }
    for relax in [1e-2, 0.5] {
        let gamma_relaxed = gamma_hint * (1.0 + relax) + 1e-9;
        let (problem, pvar) = hinf_p_step_problem(
            a_aug,
            b_aug,
            c_aug,
            d_aug,
            Some(gamma_relaxed),
            false,
            margin,
        );
        let sol = sdp::solve(&problem, settings)?;
        match sol.status {
            SolveStatus::Feasible | SolveStatus::Optimal => {
                return Ok(Some(sol.value(pvar).clone()))
            }
            SolveStatus::Infeasible => {
                return Err(Error::InfeasibleStep(format!(
                    "P-step infeasible ({})",
                    sol.diagnostics.solver_status
                )))
            }
            _ => {}
        }
    }
    Ok(None)
}

/// P-step of the H-infinity fit: feasibility in `P` for a fixed system, with
/// a conditioning cap. The bounded-real LMI is not homogeneous in `P`, so no
/// trace normalization is applied here. With `gamma = None` the norm bound
/// becomes a minimized decision variable, which is used to initialize `P`
/// when the weight coupling makes `P = I` infeasible.
pub(crate) fn hinf_p_step_problem(
    a_aug: &DMatrix<f64>,
    b_aug: &DMatrix<f64>,
    c_aug: &DMatrix<f64>,
    d_aug: &DMatrix<f64>,
    gamma: Option<f64>,
    pin_scale: bool,
    margin: f64,
) -> (SdProblem, VarId) {
    let r = a_aug.nrows();
    let n_in = b_aug.ncols();
    let n_out = c_aug.nrows();
    let s = 2 * r + n_in + n_out;
    let eye = DMatrix::<f64>::identity(r, r);
    let mut problem = SdProblem::new();
    let p = problem.sym_var(r);
    let mu = problem.scalar_var();

    let mut expr = MatExpr::zeros(s);
    expr.add_product(0, 0, &eye, p, &eye, 1.0);
    expr.add_product(r, r, &eye, p, &eye, 1.0);
    expr.add_product(0, r, a_aug, p, &eye, 1.0);
    expr.add_product(r, 0, &eye, p, &a_aug.transpose(), 1.0);
    expr.add_const(0, 2 * r, b_aug);
    expr.add_const(2 * r, 0, &b_aug.transpose());
    expr.add_product(r, 2 * r + n_in, &eye, p, &c_aug.transpose(), 1.0);
    expr.add_product(2 * r + n_in, r, c_aug, p, &eye, 1.0);
    match gamma {
        Some(g) => {
            expr.add_const(2 * r, 2 * r, &(DMatrix::<f64>::identity(n_in, n_in) * g));
            expr.add_const(
                2 * r + n_in,
                2 * r + n_in,
                &(DMatrix::<f64>::identity(n_out, n_out) * g),
            );
        }
        None => {
            let gv = problem.scalar_var();
            expr.add_scalar_mat(2 * r, 2 * r, gv, &DMatrix::identity(n_in, n_in));
            expr.add_scalar_mat(
                2 * r + n_in,
                2 * r + n_in,
                gv,
                &DMatrix::identity(n_out, n_out),
            );
            problem.add_objective_scalar(gv, 1.0);
        }
    }
    if pin_scale {
        // Initialization mode: pin the scale with P >= I. When B_aug and
        // D_aug vanish, the LMI is homogeneous in P and minimizing gamma
        // would otherwise drive P to zero, poisoning the next U-step.
        let mut floor = MatExpr::zeros(r);
        floor.add_product(0, 0, &eye, p, &eye, 1.0);
        floor.add_const(0, 0, &(-&eye));
        problem.require_psd_with_margin(floor, margin, "P - I (init scale)");
    }
    expr.add_const(2 * r, 2 * r + n_in, &d_aug.transpose());
    expr.add_const(2 * r + n_in, 2 * r, d_aug);
    problem.require_psd_with_margin(expr, margin, "bounded-real block (U fixed)");

    let mut pd = MatExpr::zeros(r);
    pd.add_product(0, 0, &eye, p, &eye, 1.0);
    problem.require_psd_with_margin(pd, margin, "P");

    let mut lo = MatExpr::zeros(r);
    lo.add_product(0, 0, &eye, p, &eye, 1.0);
    lo.add_scalar_mat(0, 0, mu, &(-&eye));
    problem.require_psd_with_margin(lo, margin, "P - mu I");
    let mut hi = MatExpr::zeros(r);
    hi.add_scalar_mat(0, 0, mu, &(&eye * P_CONDITION_CAP));
    hi.add_product(0, 0, &eye, p, &eye, -1.0);
    problem.require_psd_with_margin(hi, margin, "cap mu I - P");
    (problem, p)
}

/// EDMD with an H-infinity norm regularizer on the (optionally post-weighted)
/// Koopman system, solved by the alternating fix-P / fix-U scheme.
///
/// Minimizes `c - 2 tr(U G^T) + nu + (beta/q) gamma` subject to the EDMD
/// slack constraints and the bounded-real block of the weighted system.
/// Finite-`gamma` feasibility forces asymptotic stability of the returned
/// model for every `beta > 0`. Returns the fitted model, the iteration log,
/// and `gamma` from the final U-step.
pub fn fit_hinf_regularized(
    snap: &SnapshotMatrices,
    beta: f64,
    hinf: &HinfOptions,
    options: &BmiOptions,
) -> Result<(KoopmanModel, BmiIterationLog, f64)> {
    if !(beta > 0.0) {
        return Err(Error::Config(format!("beta must be positive, got {beta}")));
    }
    let p_theta = snap.p_theta;
    let p_upsilon = snap.p_upsilon;
    let c = hinf
        .c
        .clone()
        .unwrap_or_else(|| DMatrix::identity(p_theta, p_theta));
    let d = hinf
        .d
        .clone()
        .unwrap_or_else(|| DMatrix::zeros(c.nrows(), p_upsilon));
    if c.ncols() != p_theta || d.nrows() != c.nrows() || d.ncols() != p_upsilon {
        return Err(Error::Dimension(
            "output maps C, D do not match the lifted dimensions".into(),
        ));
    }
    let n_out = c.nrows();
    let weight = match &hinf.weight {
        None => StateSpace::identity(n_out, snap.dt),
        Some(w) => {
            let w = if w.n_inputs() == 1 && n_out > 1 {
                w.replicate_diag(n_out)
            } else {
                w.clone()
            };
            if w.n_inputs() != n_out {
                return Err(Error::Dimension(format!(
                    "weight takes {} inputs but the system has {n_out} outputs",
                    w.n_inputs()
                )));
            }
            if ((w.dt - snap.dt) / snap.dt).abs() > 1e-9 {
                return Err(Error::Dimension(format!(
                    "weight dt {} does not match data dt {}",
                    w.dt, snap.dt
                )));
            }
            w
        }
    };
    if spectral_radius(&weight.a) >= 1.0 {
        return Err(Error::UnstableSystem(
            "weighting filter must be asymptotically stable".into(),
        ));
    }

    let maps = augmented_maps(&c, &d, &weight, p_theta, p_upsilon);
    let r_total = maps.r_total;
    let (l, rank) = compute_l(&snap.psi, snap.q);
    let (s_a, s_b) = selectors(p_theta, p_upsilon);
    let margin = options.solver.margin_coeff * (1.0 + 2.0 * r_total as f64);
    let beta_q = beta / snap.q as f64;

    let u_step = |p_fixed: &DMatrix<f64>| -> Result<UStepData> {
        let mut problem = SdProblem::new();
        let core = install_edmd_cost(&mut problem, snap, &l, Some(margin));
        let gamma = problem.scalar_var();
        bounded_real_block_fixed_p(
            &mut problem,
            core.u,
            gamma,
            &maps,
            &s_a,
            &s_b,
            p_theta,
            p_fixed,
            margin,
        );
        // gamma >= 0 keeps the objective bounded below.
        let mut gnn = MatExpr::zeros(1);
        gnn.add_scalar_mat(0, 0, gamma, &DMatrix::identity(1, 1));
        problem.require_psd_with_margin(gnn, margin, "gamma >= 0");
        problem.add_objective_scalar(gamma, beta_q);
        let sol = sdp::solve(&problem, &options.solver)?;
        if sol.status != SolveStatus::Optimal {
            return Err(Error::InfeasibleStep(format!(
                "U-step returned {:?} ({})",
                sol.status, sol.diagnostics.solver_status
            )));
        }
        let u = sol.value(core.u).clone();
        let rho = spectral_radius(&u.columns(0, p_theta).into_owned());
        if rho >= 1.0 {
            return Err(Error::Solver(format!(
                "bounded-real U-step returned a spectrally unstable iterate (rho = {rho});                  the fixed P is numerically degenerate"
            )));
        }
        let min_eig = sol
            .diagnostics
            .constraint_min_eigs
            .iter()
            .copied()
            .fold(f64::INFINITY, f64::min);
        Ok(UStepData {
            objective: sol.objective,
            gamma: Some(sol.scalar(gamma)),
            rho,
            min_constraint_eig: min_eig,
            u,
        })
    };
    let p_step = |data: &UStepData| -> Result<Option<DMatrix<f64>>> {
        let a = data.u.columns(0, p_theta).into_owned();
        let b = data.u.columns(p_theta, p_upsilon).into_owned();
        let mut a_aug = maps.a_const.clone();
        a_aug.view_mut((0, 0), (p_theta, p_theta)).copy_from(&a);
        let mut b_aug = maps.b_const.clone();
        b_aug.view_mut((0, 0), (p_theta, p_upsilon)).copy_from(&b);
        solve_hinf_p_step(
            &a_aug,
            &b_aug,
            &maps.c_aug,
            &maps.d_aug,
            data.gamma.expect("hinf U-step always sets gamma"),
            margin,
            &options.solver,
        )
    };

    // With a dynamic weight the coupling rows of the augmented A make P = I
    // infeasible regardless of U; seed P from the bounded-real solution of
    // the zero-Koopman augmented system instead.
    let p0 = if weight.order() == 0 {
        DMatrix::identity(r_total, r_total)
    } else {
        let (problem, pvar) = hinf_p_step_problem(
            &maps.a_const,
            &maps.b_const,
            &maps.c_aug,
            &maps.d_aug,
            None,
            true,
            margin,
        );
        let sol = sdp::solve(&problem, &options.solver)?;
        if sol.status != SolveStatus::Optimal {
            return Err(Error::InfeasibleStep(format!(
                "initial P solve returned {:?} ({})",
                sol.status, sol.diagnostics.solver_status
            )));
        }
        sol.value(pvar).clone()
    };

    let (best, log) = bmi_alternate(u_step, p_step, p0, options)?;

    // Certify the returned iterate: one final minimizing P-step reports the
    // tight norm bound of the fitted (weighted) system; the per-iteration
    // U-step bounds stay in the log.
    let gamma = {
        let a = best.u.columns(0, p_theta).into_owned();
        let b = best.u.columns(p_theta, p_upsilon).into_owned();
        let mut a_aug = maps.a_const.clone();
        a_aug.view_mut((0, 0), (p_theta, p_theta)).copy_from(&a);
        let mut b_aug = maps.b_const.clone();
        b_aug.view_mut((0, 0), (p_theta, p_upsilon)).copy_from(&b);
        let (problem, _) =
            hinf_p_step_problem(&a_aug, &b_aug, &maps.c_aug, &maps.d_aug, None, false, margin);
        match sdp::solve(&problem, &options.solver) {
            Ok(sol) if sol.status == SolveStatus::Optimal => sol.objective,
            _ => best.gamma.expect("hinf U-step always sets gamma"),
        }
    };
    let mut params = BTreeMap::new();
    params.insert("beta".into(), beta);
    params.insert("gamma".into(), gamma);
    let meta = FitMeta {
        method: "edmd-hinf".into(),
        params,
        iterations: log.iterations.len(),
        final_cost: snap.cost_of(&best.u),
        rank: Some(rank),
        notes: if log.converged {
            Vec::new()
        } else {
            vec![log.reason.clone()]
        },
    };
    let model = KoopmanModel::new_full(best.u, p_theta, snap.dt, meta).with_output_maps(c, d)?;
    Ok((model, log, gamma))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lifting::LiftingPipeline;
    use crate::lti::hinf_norm;
    use crate::regressors::edmd_closed_form;
    use crate::snapshots::{build_snapshots, Dataset, Episode};
    use rand::rngs::StdRng;
    use rand::{Rng, SeedableRng};

    fn simulate_linear(
        a: &DMatrix<f64>,
        b: &DMatrix<f64>,
        episodes: usize,
        t_len: usize,
        seed: u64,
    ) -> Dataset {
        let mut rng = StdRng::seed_from_u64(seed);
        let m = a.nrows();
        let n = b.ncols();
        let mut eps = Vec::new();
        for id in 0..episodes {
            let mut states = DMatrix::zeros(m, t_len);
            let mut inputs = DMatrix::zeros(n, t_len);
            let mut x = DMatrix::from_fn(m, 1, |_, _| rng.random_range(-1.0..1.0));
            for k in 0..t_len {
                states.set_column(k, &x.column(0));
                let u = DMatrix::from_fn(n, 1, |_, _| rng.random_range(-1.0..1.0));
                inputs.set_column(k, &u.column(0));
                x = a * &x + b * &u;
            }
            eps.push(Episode::new(id as u64, 0.1, states, inputs).unwrap());
        }
        Dataset::new(eps).unwrap()
    }

    fn snapshots_of(ds: &Dataset) -> SnapshotMatrices {
        let pipeline = LiftingPipeline::identity().fit(ds).unwrap();
        build_snapshots(ds, &pipeline).unwrap()
    }

    fn stable_dataset() -> Dataset {
        let a = DMatrix::from_row_slice(2, 2, &[0.4, 0.2, -0.1, 0.3]);
        let b = DMatrix::from_row_slice(2, 1, &[1.0, 0.5]);
        simulate_linear(&a, &b, 3, 60, 41)
    }

    fn drifting_dataset() -> Dataset {
        // Slightly unstable spiral: unconstrained EDMD recovers rho > 1.
        let rot = DMatrix::from_row_slice(2, 2, &[0.9950, -0.0998, 0.0998, 0.9950]);
        let a = rot * 1.02;
        let b = DMatrix::from_row_slice(2, 1, &[0.1, 0.05]);
        simulate_linear(&a, &b, 4, 30, 42)
    }

    #[test]
    fn schur_equivalence_of_modified_lyapunov_constraint() {
        // [rho P, A^T P; P^T A, rho P] > 0  <=>  A^T P A - rho^2 P < 0.
        let mut rng = StdRng::seed_from_u64(5);
        let mut agree = 0usize;
        for _ in 0..100 {
            let n = rng.random_range(2..5usize);
            let a = DMatrix::from_fn(n, n, |_, _| rng.random_range(-1.0..1.0));
            let base = DMatrix::from_fn(n, n, |_, _| rng.random_range(-1.0..1.0));
            let p = &base * base.transpose() + DMatrix::<f64>::identity(n, n) * 0.1;
            let rho: f64 = rng.random_range(0.3..1.0);

            let mut block = DMatrix::zeros(2 * n, 2 * n);
            block.view_mut((0, 0), (n, n)).copy_from(&(&p * rho));
            block.view_mut((n, n), (n, n)).copy_from(&(&p * rho));
            block
                .view_mut((0, n), (n, n))
                .copy_from(&(a.transpose() * &p));
            block.view_mut((n, 0), (n, n)).copy_from(&(p.transpose() * &a));
            let block_pd = block
                .symmetric_eigenvalues()
                .iter()
                .all(|&e| e > 0.0);

            let lyap = a.transpose() * &p * &a - &p * (rho * rho);
            let lyap_nd = lyap
                .symmetric_eigenvalues()
                .iter()
                .all(|&e| e < 0.0);
            if block_pd == lyap_nd {
                agree += 1;
            }
        }
        assert_eq!(agree, 100);
    }

    #[test]
    fn inactive_constraint_recovers_unconstrained_edmd() {
        let snap = snapshots_of(&stable_dataset());
        let edmd = edmd_closed_form(&snap);
        let (model, log) =
            fit_stability_constrained(&snap, 0.99, &BmiOptions::default()).unwrap();
        assert!(log.converged, "{}", log.reason);
        let rel = (&model.u - &edmd.u).norm() / edmd.u.norm();
        assert!(rel < 1e-4, "rel {rel}");
    }

    #[test]
    fn active_constraint_clamps_spectral_radius() {
        let snap = snapshots_of(&drifting_dataset());
        let edmd = edmd_closed_form(&snap);
        let rho_unconstrained = spectral_radius(&edmd.a());
        assert!(
            rho_unconstrained > 1.0,
            "engineered data must give unstable EDMD, got rho = {rho_unconstrained}"
        );
        let (model, log) =
            fit_stability_constrained(&snap, 0.99, &BmiOptions::default()).unwrap();
        let rho = spectral_radius(&model.a());
        assert!(rho <= 0.99 + 1e-6, "rho {rho}");
        // Objective sequence non-increasing within slack.
        for w in log.iterations.windows(2) {
            assert!(
                w[1].objective <= w[0].objective + 1e-6,
                "objective increased: {} -> {}",
                w[0].objective,
                w[1].objective
            );
        }
    }

    #[test]
    fn eigenvalue_clouds_respect_both_radii() {
        let snap = snapshots_of(&drifting_dataset());
        for rho_bar in [1.0, 0.99] {
            let (model, _) =
                fit_stability_constrained(&snap, rho_bar, &BmiOptions::default()).unwrap();
            let rho = spectral_radius(&model.a());
            assert!(rho <= rho_bar + 1e-6, "rho {rho} vs bound {rho_bar}");
        }
    }

    #[test]
    fn rho_bar_out_of_range_is_config_error() {
        let snap = snapshots_of(&stable_dataset());
        assert!(matches!(
            fit_stability_constrained(&snap, 0.0, &BmiOptions::default()),
            Err(Error::Config(_))
        ));
        assert!(matches!(
            fit_stability_constrained(&snap, 1.5, &BmiOptions::default()),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn driver_converges_fast_when_constraint_inactive() {
        let snap = snapshots_of(&stable_dataset());
        let (_, log) = fit_stability_constrained(&snap, 0.99, &BmiOptions::default()).unwrap();
        assert!(log.converged);
        assert!(log.iterations.len() <= 2, "{} iterations", log.iterations.len());
    }

    #[test]
    fn infinite_tolerance_returns_after_first_iteration() {
        let snap = snapshots_of(&stable_dataset());
        let options = BmiOptions {
            tol: f64::INFINITY,
            ..BmiOptions::default()
        };
        let (_, log) = fit_stability_constrained(&snap, 0.99, &options).unwrap();
        assert_eq!(log.iterations.len(), 1);
        assert!(log.converged);
    }

    #[test]
    fn hinf_fit_is_stable_and_gamma_bounds_norm() {
        let snap = snapshots_of(&drifting_dataset());
        let (model, log, gamma) =
            fit_hinf_regularized(&snap, 7.5e-3, &HinfOptions::default(), &BmiOptions::default())
                .unwrap();
        assert!(log.converged, "{}", log.reason);
        let rho = spectral_radius(&model.a());
        assert!(rho < 1.0, "rho {rho}");
        let norm = hinf_norm(&model.state_space().unwrap(), 1e-6).unwrap();
        assert!(
            gamma >= norm - 1e-3 * norm,
            "gamma {gamma} must dominate the independent norm {norm}"
        );
    }

    #[test]
    fn hinf_norm_non_increasing_in_beta() {
        let snap = snapshots_of(&drifting_dataset());
        let mut norms = Vec::new();
        for beta in [1e-3, 1e-1] {
            let (model, _, _) =
                fit_hinf_regularized(&snap, beta, &HinfOptions::default(), &BmiOptions::default())
                    .unwrap();
            assert!(spectral_radius(&model.a()) < 1.0);
            norms.push(hinf_norm(&model.state_space().unwrap(), 1e-6).unwrap());
        }
        assert!(
            norms[1] <= norms[0] + 1e-6,
            "norm at beta=1e-1 ({}) should not exceed norm at beta=1e-3 ({})",
            norms[1],
            norms[0]
        );
    }

    #[test]
    fn identity_weight_equals_unweighted_fit() {
        let snap = snapshots_of(&stable_dataset());
        let unweighted =
            fit_hinf_regularized(&snap, 1e-2, &HinfOptions::default(), &BmiOptions::default())
                .unwrap();
        let weighted = fit_hinf_regularized(
            &snap,
            1e-2,
            &HinfOptions {
                weight: Some(StateSpace::identity(snap.p_theta, snap.dt)),
                ..HinfOptions::default()
            },
            &BmiOptions::default(),
        )
        .unwrap();
        let rel = (&unweighted.0.u - &weighted.0.u).norm() / unweighted.0.u.norm();
        assert!(rel < 1e-6, "rel {rel}");
    }

    #[test]
    fn highpass_weighted_fit_runs_and_is_stable() {
        let snap = snapshots_of(&drifting_dataset());
        let weight = crate::lti::highpass_weight(0.5, 2.0, snap.dt).unwrap();
        let (model, _, gamma) = fit_hinf_regularized(
            &snap,
            1e-2,
            &HinfOptions {
                weight: Some(weight.clone()),
                ..HinfOptions::default()
            },
            &BmiOptions::default(),
        )
        .unwrap();
        assert!(spectral_radius(&model.a()) < 1.0);
        // gamma bounds the norm of the weighted cascade.
        let cascaded = crate::lti::cascade(
            &weight.replicate_diag(snap.p_theta),
            &model.state_space().unwrap(),
        )
        .unwrap();
        let norm = hinf_norm(&cascaded, 1e-6).unwrap();
        assert!(gamma >= norm - 1e-3 * norm, "gamma {gamma} vs weighted norm {norm}");
    }

    #[test]
    fn bad_beta_is_config_error() {
        let snap = snapshots_of(&stable_dataset());
        assert!(matches!(
            fit_hinf_regularized(&snap, 0.0, &HinfOptions::default(), &BmiOptions::default()),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn iteration_log_csv_has_documented_header() {
        let snap = snapshots_of(&stable_dataset());
        let (_, log) = fit_stability_constrained(&snap, 0.99, &BmiOptions::default()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("iterations.csv");
        log.write_csv(&path).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert!(text.starts_with("iter,objective,gamma,rho,wall_ms"));
    }
}

