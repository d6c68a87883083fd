//! Reduced-dimension regression via truncated SVD projection: closed-form
//! DMDc, its LMI form, optimal hard-threshold rank selection, and the
//! projected stability / H-infinity constrained fits.

use crate::constrained::{
    augmented_maps, bmi_alternate, bounded_real_block_fixed_p, hinf_p_step_problem, selectors,
    solve_hinf_p_step, solve_stability_p_step, stability_block_fixed_p, BmiIterationLog,
    BmiOptions, HinfOptions, UStepData,
};
use crate::error::{Error, Result};
use crate::lti::{spectral_radius, StateSpace};
use crate::regressors::{Basis, FitMeta, KoopmanModel};
use crate::sdp::{self, MatExpr, SdProblem, SolveStatus, VarId};
use crate::snapshots::SnapshotMatrices;
use nalgebra::{DMatrix, DVector};
use std::collections::BTreeMap;

/// Truncated SVD factors of `ThetaPlus` (hat) and `Psi` (tilde), plus the
/// projector product `Qbar = blkdiag(Qhat, I)^T Qtil`.
#[derive(Debug, Clone)]
pub struct TruncatedBasis {
    pub q_hat: DMatrix<f64>,
    pub sigma_hat: DVector<f64>,
    pub z_hat: DMatrix<f64>,
    pub q_til: DMatrix<f64>,
    pub sigma_til: DVector<f64>,
    pub z_til: DMatrix<f64>,
    pub q_bar: DMatrix<f64>,
    pub r_hat: usize,
    pub r_til: usize,
}

fn thin_svd(m: &DMatrix<f64>, rank: usize) -> (DMatrix<f64>, DVector<f64>, DMatrix<f64>) {
    let svd = m.clone().svd(true, true);
    let u = svd.u.expect("svd with u");
    let vt = svd.v_t.expect("svd with v_t");
    let q = u.columns(0, rank).into_owned();
    let sigma = DVector::from_fn(rank, |i, _| svd.singular_values[i]);
    let z = vt.rows(0, rank).transpose();
    (q, sigma, z)
}

fn positive_rank(sv: &nalgebra::DVector<f64>) -> usize {
    let max = sv.iter().copied().fold(0.0f64, f64::max);
    if max <= 0.0 {
        return 0;
    }
    sv.iter().filter(|&&s| s > 1e-14 * max).count()
}

/// Numerical rank of `Psi` (the default for `r_til`).
pub fn full_rank_til(snap: &SnapshotMatrices) -> usize {
    let svd = snap.psi.clone().svd(false, false);
    positive_rank(&svd.singular_values)
}

/// Compute the truncated bases for given ranks.
pub fn truncated_basis(snap: &SnapshotMatrices, r_hat: usize, r_til: usize) -> Result<TruncatedBasis> {
    let svd_theta = snap.theta_plus.clone().svd(false, false);
    let svd_psi = snap.psi.clone().svd(false, false);
    let max_hat = positive_rank(&svd_theta.singular_values);
    let max_til = positive_rank(&svd_psi.singular_values);
    if r_hat == 0 || r_hat > max_hat {
        return Err(Error::Dimension(format!(
            "r_hat = {r_hat} out of bounds (1..={max_hat})"
        )));
    }
    if r_til == 0 || r_til > max_til {
        return Err(Error::Dimension(format!(
            "r_til = {r_til} out of bounds (1..={max_til})"
        )));
    }
    let (q_hat, sigma_hat, z_hat) = thin_svd(&snap.theta_plus, r_hat);
    let (q_til, sigma_til, z_til) = thin_svd(&snap.psi, r_til);
    // Qbar = blkdiag(Qhat, I)^T Qtil.
    let p_upsilon = snap.p_upsilon;
    let mut q_bar = DMatrix::zeros(r_hat + p_upsilon, r_til);
    q_bar
        .view_mut((0, 0), (r_hat, r_til))
        .copy_from(&(q_hat.transpose() * q_til.rows(0, snap.p_theta)));
    q_bar
        .view_mut((r_hat, 0), (p_upsilon, r_til))
        .copy_from(&q_til.rows(snap.p_theta, p_upsilon));
    Ok(TruncatedBasis {
        q_hat,
        sigma_hat,
        z_hat,
        q_til,
        sigma_til,
        z_til,
        q_bar,
        r_hat,
        r_til,
    })
}

/// Median of the Marchenko-Pastur distribution with aspect ratio
/// `beta <= 1` and unit variance, by quadrature and bisection.
fn marchenko_pastur_median(beta: f64) -> f64 {
    let a = (1.0 - beta.sqrt()).powi(2);
    let b = (1.0 + beta.sqrt()).powi(2);
    // Substitution x = a + (b - a) sin^2(t) removes the endpoint
    // singularities; integrate with Simpson's rule.
    let integrand = |t: f64| -> f64 {
        let s = t.sin();
        let c = t.cos();
        let x = a + (b - a) * s * s;
        if x <= 0.0 {
            return 0.0;
        }
        (b - a).powi(2) * 2.0 * s * s * c * c / (2.0 * std::f64::consts::PI * beta * x)
    };
    let cdf_t = |t_max: f64| -> f64 {
        let n = 2000usize;
        let h = t_max / n as f64;
        let mut acc = integrand(0.0) + integrand(t_max);
        for i in 1..n {
            let w = if i % 2 == 1 { 4.0 } else { 2.0 };
            acc += w * integrand(i as f64 * h);
        }
        acc * h / 3.0
    };
    let mut lo = 0.0f64;
    let mut hi = std::f64::consts::FRAC_PI_2;
    for _ in 0..80 {
        let mid = 0.5 * (lo + hi);
        if cdf_t(mid) < 0.5 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    let t = 0.5 * (lo + hi);
    a + (b - a) * t.sin().powi(2)
}

/// The Gavish-Donoho optimal hard-threshold coefficient for unknown noise:
/// `omega(beta) = lambda*(beta) / sqrt(median(MP_beta))`.
pub fn hard_threshold_coefficient(beta: f64) -> f64 {
    let lam = (2.0 * (beta + 1.0) + 8.0 * beta / ((beta + 1.0) + (beta * beta + 14.0 * beta + 1.0).sqrt()))
        .sqrt();
    lam / marchenko_pastur_median(beta).sqrt()
}

/// Optimal hard singular-value truncation with unknown noise level: keep the
/// values above `omega(beta) * median(singular_values)`.
pub fn optimal_hard_threshold(singular_values: &[f64], rows: usize, cols: usize) -> Result<usize> {
    if singular_values.is_empty() || rows == 0 || cols == 0 {
        return Err(Error::Degenerate("empty singular value spectrum".into()));
    }
    let mut prev = f64::INFINITY;
    for &s in singular_values {
        if !(s >= 0.0) || s > prev {
            return Err(Error::Degenerate(
                "singular values must be nonincreasing and nonnegative".into(),
            ));
        }
        prev = s;
    }
    let beta = rows.min(cols) as f64 / rows.max(cols) as f64;
    let omega = hard_threshold_coefficient(beta);
    let n = singular_values.len();
    let median = if n % 2 == 1 {
        singular_values[n / 2]
    } else {
        0.5 * (singular_values[n / 2 - 1] + singular_values[n / 2])
    };
    let tau = omega * median;
    Ok(singular_values.iter().filter(|&&s| s > tau).count())
}

fn reduced_meta(method: &str, basis: &TruncatedBasis, cost: f64, iterations: usize) -> FitMeta {
    let mut params = BTreeMap::new();
    params.insert("r_hat".into(), basis.r_hat as f64);
    params.insert("r_til".into(), basis.r_til as f64);
    FitMeta {
        method: method.into(),
        params,
        iterations,
        final_cost: cost,
        rank: Some(basis.r_hat),
        notes: Vec::new(),
    }
}

fn reduced_model(
    snap: &SnapshotMatrices,
    basis: &TruncatedBasis,
    u_hat: DMatrix<f64>,
    meta: FitMeta,
) -> KoopmanModel {
    debug_assert_eq!(u_hat.nrows(), basis.r_hat);
    let c_hat = basis.q_hat.clone(); // C = I on the lifted state => C_hat = Q_hat
    let d = DMatrix::zeros(snap.p_theta, snap.p_upsilon);
    KoopmanModel {
        u: u_hat,
        c: c_hat,
        d,
        basis: Basis::Reduced {
            q_hat: basis.q_hat.clone(),
        },
        dt: snap.dt,
        pipeline: None,
        meta,
    }
}

/// Residual `(1/q) ||ThetaPlus - Qhat Uhat blkdiag(Qhat, I)^T Psi||_F^2` of a
/// reduced model in the full lifted space.
pub fn reduced_cost(snap: &SnapshotMatrices, basis: &TruncatedBasis, u_hat: &DMatrix<f64>) -> f64 {
    let psi_hat = project_psi(snap, basis);
    let residual = &snap.theta_plus - &basis.q_hat * u_hat * psi_hat;
    residual.norm_squared() / snap.q as f64
}

/// `blkdiag(Qhat, I)^T Psi`: the snapshot matrix in reduced coordinates.
fn project_psi(snap: &SnapshotMatrices, basis: &TruncatedBasis) -> DMatrix<f64> {
    let r_hat = basis.r_hat;
    let p_upsilon = snap.p_upsilon;
    let mut out = DMatrix::zeros(r_hat + p_upsilon, snap.q);
    out.view_mut((0, 0), (r_hat, snap.q))
        .copy_from(&(basis.q_hat.transpose() * snap.psi.rows(0, snap.p_theta)));
    out.view_mut((r_hat, 0), (p_upsilon, snap.q))
        .copy_from(&snap.psi.rows(snap.p_theta, p_upsilon));
    out
}

/// Closed-form DMDc: `Uhat = Qhat^T ThetaPlus Ztil SigmaTil^+ Qtil^T blkdiag(Qhat, I)`.
pub fn dmdc_closed_form(snap: &SnapshotMatrices, r_hat: usize, r_til: usize) -> Result<KoopmanModel> {
    let basis = truncated_basis(snap, r_hat, r_til)?;
    let sigma_inv = DMatrix::from_fn(r_til, r_til, |i, j| {
        if i == j {
            1.0 / basis.sigma_til[i]
        } else {
            0.0
        }
    });
    // Qtil^T blkdiag(Qhat, I) = Qbar^T.
    let u_hat =
        basis.q_hat.transpose() * &snap.theta_plus * &basis.z_til * sigma_inv * basis.q_bar.transpose();
    let cost = reduced_cost(snap, &basis, &u_hat);
    let meta = reduced_meta("dmdc", &basis, cost, 0);
    Ok(reduced_model(snap, &basis, u_hat, meta))
}

/// Install the DMDc LMI cost: minimize `(1/q) tr(What)` subject to
/// `What > 0` and the Schur block in `(Uhat, What)`.
fn install_dmdc_cost(
    problem: &mut SdProblem,
    basis: &TruncatedBasis,
    q: usize,
    p_upsilon: usize,
    margin: Option<f64>,
) -> (VarId, VarId) {
    let r_hat = basis.r_hat;
    let r_til = basis.r_til;
    let u_hat = problem.rect_var(r_hat, r_hat + p_upsilon);
    let w_hat = problem.sym_var(r_hat);
    let eye_hat = DMatrix::<f64>::identity(r_hat, r_hat);

    let mut wpd = MatExpr::zeros(r_hat);
    wpd.add_product(0, 0, &eye_hat, w_hat, &eye_hat, 1.0);
    match margin {
        Some(m) => problem.require_psd_with_margin(wpd, m, "What"),
        None => problem.require_psd(wpd, "What"),
    }

    let sigma_hat_sq = DMatrix::from_fn(r_hat, r_hat, |i, j| {
        if i == j {
            basis.sigma_hat[i] * basis.sigma_hat[i]
        } else {
            0.0
        }
    });
    let sigma_til = DMatrix::from_fn(r_til, r_til, |i, j| {
        if i == j {
            basis.sigma_til[i]
        } else {
            0.0
        }
    });
    // K = Qbar SigmaTil Ztil^T Zhat SigmaHat, the cross term.
    let k = &basis.q_bar
        * &sigma_til
        * basis.z_til.transpose()
        * &basis.z_hat
        * DMatrix::from_fn(r_hat, r_hat, |i, j| {
            if i == j {
                basis.sigma_hat[i]
            } else {
                0.0
            }
        });

    // Negated Schur block of the projected problem:
    // [What - SigmaHat^2 + He(Uhat K), -Uhat Qbar SigmaTil; ..., I] >= 0.
    let s = r_hat + r_til;
    let mut block = MatExpr::zeros(s);
    block.add_product(0, 0, &eye_hat, w_hat, &eye_hat, 1.0);
    block.add_const(0, 0, &(-&sigma_hat_sq));
    block.add_product(0, 0, &eye_hat, u_hat, &k, 1.0);
    block.add_product_tr(0, 0, &k.transpose(), u_hat, &eye_hat, 1.0);
    let qbar_sigma = &basis.q_bar * &sigma_til;
    block.add_product(0, r_hat, &eye_hat, u_hat, &qbar_sigma, -1.0);
    block.add_product_tr(r_hat, 0, &qbar_sigma.transpose(), u_hat, &eye_hat, -1.0);
    block.add_const(r_hat, r_hat, &DMatrix::identity(r_til, r_til));
    match margin {
        Some(m) => problem.require_psd_with_margin(block, m, "dmdc schur block"),
        None => problem.require_psd(block, "dmdc schur block"),
    }

    problem.add_objective_term(w_hat, DMatrix::identity(r_hat, r_hat) / q as f64);
    (u_hat, w_hat)
}

/// DMDc solved through its LMI form; matches [`dmdc_closed_form`] on
/// full-rank instances.
pub fn dmdc_lmi(
    snap: &SnapshotMatrices,
    r_hat: usize,
    r_til: usize,
    settings: &sdp::SolveSettings,
) -> Result<KoopmanModel> {
    let basis = truncated_basis(snap, r_hat, r_til)?;
    let mut problem = SdProblem::new();
    let (u_var, _) = install_dmdc_cost(&mut problem, &basis, snap.q, snap.p_upsilon, None);
    let sol = sdp::solve(&problem, settings)?;
    if sol.status != SolveStatus::Optimal {
        return Err(Error::Solver(format!(
            "dmdc_lmi: solver returned {:?} ({})",
            sol.status, sol.diagnostics.solver_status
        )));
    }
    let u_hat = sol.value(u_var).clone();
    let cost = reduced_cost(snap, &basis, &u_hat);
    let mut meta = reduced_meta("dmdc-lmi", &basis, cost, sol.diagnostics.iterations as usize);
    meta.notes.push(format!(
        "lmi dofs {} max block {}",
        problem.n_dof(),
        problem.max_block_size()
    ));
    Ok(reduced_model(snap, &basis, u_hat, meta))
}

/// Constraint to apply to the projected regression.
#[derive(Debug, Clone)]
pub enum DmdcConstraint {
    Stability { rho_bar: f64 },
    Hinf { beta: f64, options: HinfOptions },
}

/// Stability-constrained or H-infinity-regularized DMDc: the projected
/// system `(Ahat, Bhat, C Qhat, D)` passes through the same alternating
/// scheme as the full-order fits.
pub fn fit_dmdc_constrained(
    snap: &SnapshotMatrices,
    r_hat: usize,
    r_til: usize,
    constraint: &DmdcConstraint,
    options: &BmiOptions,
) -> Result<(KoopmanModel, BmiIterationLog)> {
    let basis = truncated_basis(snap, r_hat, r_til)?;
    let p_upsilon = snap.p_upsilon;
    let (s_a, s_b) = selectors(r_hat, p_upsilon);
    match constraint {
        DmdcConstraint::Stability { rho_bar } => {
            if !(*rho_bar > 0.0 && *rho_bar <= 1.0) {
                return Err(Error::Config(format!(
                    "rho_bar must lie in (0, 1], got {rho_bar}"
                )));
            }
            let margin = options.solver.margin_coeff * (1.0 + 2.0 * r_hat as f64);
            let u_step = |p_fixed: &DMatrix<f64>| -> Result<UStepData> {
                let mut problem = SdProblem::new();
                let (u_var, _) =
                    install_dmdc_cost(&mut problem, &basis, snap.q, p_upsilon, Some(margin));
                stability_block_fixed_p(&mut problem, u_var, &s_a, p_fixed, *rho_bar, margin);
                let sol = sdp::solve(&problem, &options.solver)?;
                if sol.status != SolveStatus::Optimal {
                    return Err(Error::InfeasibleStep(format!(
                        "U-step returned {:?} ({})",
                        sol.status, sol.diagnostics.solver_status
                    )));
                }
                let u = sol.value(u_var).clone();
                let rho = spectral_radius(&u.columns(0, r_hat).into_owned());
                Ok(UStepData {
                    objective: sol.objective,
                    gamma: None,
                    rho,
                    min_constraint_eig: sol
                        .diagnostics
                        .constraint_min_eigs
                        .iter()
                        .copied()
                        .fold(f64::INFINITY, f64::min),
                    u,
                })
            };
            let p_step = |data: &UStepData| -> Result<Option<DMatrix<f64>>> {
                let a = data.u.columns(0, r_hat).into_owned();
                solve_stability_p_step(&a, *rho_bar, margin, &options.solver)
            };
            let (best, log) =
                bmi_alternate(u_step, p_step, DMatrix::identity(r_hat, r_hat), options)?;
            let cost = reduced_cost(snap, &basis, &best.u);
            let mut meta = reduced_meta("dmdc-stability", &basis, cost, log.iterations.len());
            meta.params.insert("rho_bar".into(), *rho_bar);
            if !log.converged {
                meta.notes.push(log.reason.clone());
            }
            Ok((reduced_model(snap, &basis, best.u, meta), log))
        }
        DmdcConstraint::Hinf { beta, options: hinf } => {
            if !(*beta > 0.0) {
                return Err(Error::Config(format!("beta must be positive, got {beta}")));
            }
            // Reduced output maps: C_hat = C Qhat, D unchanged.
            let c_full = hinf
                .c
                .clone()
                .unwrap_or_else(|| DMatrix::identity(snap.p_theta, snap.p_theta));
            let d_full = hinf
                .d
                .clone()
                .unwrap_or_else(|| DMatrix::zeros(c_full.nrows(), p_upsilon));
            if c_full.ncols() != snap.p_theta {
                return Err(Error::Dimension(
                    "output map C must act on the lifted state".into(),
                ));
            }
            let c_hat = &c_full * &basis.q_hat;
            let n_out = c_hat.nrows();
            let weight = match &hinf.weight {
                None => StateSpace::identity(n_out, snap.dt),
                Some(w) => {
                    if w.n_inputs() == 1 && n_out > 1 {
                        w.replicate_diag(n_out)
                    } else {
                        w.clone()
                    }
                }
            };
            if weight.n_inputs() != n_out {
                return Err(Error::Dimension(format!(
                    "weight takes {} inputs but the reduced system has {n_out} outputs",
                    weight.n_inputs()
                )));
            }
            let maps = augmented_maps(&c_hat, &d_full, &weight, r_hat, p_upsilon);
            let r_total = maps.r_total;
            let margin = options.solver.margin_coeff * (1.0 + 2.0 * r_total as f64);
            let beta_q = *beta / snap.q as f64;

            let u_step = |p_fixed: &DMatrix<f64>| -> Result<UStepData> {
                let mut problem = SdProblem::new();
                let (u_var, _) =
                    install_dmdc_cost(&mut problem, &basis, snap.q, p_upsilon, Some(margin));
                let gamma = problem.scalar_var();
                bounded_real_block_fixed_p(
                    &mut problem,
                    u_var,
                    gamma,
                    &maps,
                    &s_a,
                    &s_b,
                    r_hat,
                    p_fixed,
                    margin,
                );
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
                let u = sol.value(u_var).clone();
                let rho = spectral_radius(&u.columns(0, r_hat).into_owned());
                if rho >= 1.0 {
                    return Err(Error::Solver(format!(
                        "bounded-real U-step returned a spectrally unstable iterate (rho = {rho})"
                    )));
                }
                Ok(UStepData {
                    objective: sol.objective,
                    gamma: Some(sol.scalar(gamma)),
                    rho,
                    min_constraint_eig: sol
                        .diagnostics
                        .constraint_min_eigs
                        .iter()
                        .copied()
                        .fold(f64::INFINITY, f64::min),
                    u,
                })
            };
            let p_step = |data: &UStepData| -> Result<Option<DMatrix<f64>>> {
                let a = data.u.columns(0, r_hat).into_owned();
                let b = data.u.columns(r_hat, p_upsilon).into_owned();
                let mut a_aug = maps.a_const.clone();
                a_aug.view_mut((0, 0), (r_hat, r_hat)).copy_from(&a);
                let mut b_aug = maps.b_const.clone();
                b_aug.view_mut((0, 0), (r_hat, p_upsilon)).copy_from(&b);
                solve_hinf_p_step(
                    &a_aug,
                    &b_aug,
                    &maps.c_aug,
                    &maps.d_aug,
                    data.gamma.expect("hinf U-step sets gamma"),
                    margin,
                    &options.solver,
                )
            };

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
            // Final minimizing P-step: report the certified norm bound of
            // the returned reduced system.
            let gamma = {
                let a = best.u.columns(0, r_hat).into_owned();
                let b = best.u.columns(r_hat, p_upsilon).into_owned();
                let mut a_aug = maps.a_const.clone();
                a_aug.view_mut((0, 0), (r_hat, r_hat)).copy_from(&a);
                let mut b_aug = maps.b_const.clone();
                b_aug.view_mut((0, 0), (r_hat, p_upsilon)).copy_from(&b);
                let (problem, _) = hinf_p_step_problem(
                    &a_aug,
                    &b_aug,
                    &maps.c_aug,
                    &maps.d_aug,
                    None,
                    false,
                    margin,
                );
                match sdp::solve(&problem, &options.solver) {
                    Ok(sol) if sol.status == SolveStatus::Optimal => sol.objective,
                    _ => best.gamma.expect("hinf U-step sets gamma"),
                }
            };
            let cost = reduced_cost(snap, &basis, &best.u);
            let mut meta = reduced_meta("dmdc-hinf", &basis, cost, log.iterations.len());
            meta.params.insert("beta".into(), *beta);
            meta.params.insert("gamma".into(), gamma);
            if !log.converged {
                meta.notes.push(log.reason.clone());
            }
            let model = reduced_model(snap, &basis, best.u, meta);
            let model = KoopmanModel {
                c: &c_full * &basis.q_hat,
                d: d_full,
                ..model
            };
            Ok((model, log))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lifting::LiftingPipeline;
    use crate::regressors::edmd_closed_form;
    use crate::snapshots::{build_snapshots, Dataset, Episode};
    use approx::assert_relative_eq;
    use rand::rngs::StdRng;
    use rand::{Rng, SeedableRng};

    fn random_snapshots(seed: u64, p_theta: usize, p_upsilon: usize, q: usize) -> SnapshotMatrices {
        let mut rng = StdRng::seed_from_u64(seed);
        let p = p_theta + p_upsilon;
        let psi = DMatrix::from_fn(p, q, |_, _| rng.random_range(-1.0..1.0));
        let u_true = DMatrix::from_fn(p_theta, p, |_, _| rng.random_range(-0.4..0.4));
        let noise = DMatrix::from_fn(p_theta, q, |_, _| rng.random_range(-0.005..0.005));
        let theta_plus = &u_true * &psi + noise;
        SnapshotMatrices::from_psi_theta(psi, theta_plus, p_theta, 0.1).unwrap()
    }

    fn linear_identity_snapshots() -> SnapshotMatrices {
        // x_{k+1} = 0.9 x + 0.1 u, identity lifting.
        let t_len = 50;
        let mut states = DMatrix::zeros(1, t_len);
        let mut inputs = DMatrix::zeros(1, t_len);
        let mut x = 1.0f64;
        for k in 0..t_len {
            states[(0, k)] = x;
            let u = (0.9 * k as f64).sin();
            inputs[(0, k)] = u;
            x = 0.9 * x + 0.1 * u;
        }
        let ds = Dataset::new(vec![Episode::new(0, 0.1, states, inputs).unwrap()]).unwrap();
        let pipeline = LiftingPipeline::identity().fit(&ds).unwrap();
        build_snapshots(&ds, &pipeline).unwrap()
    }

    #[test]
    fn hard_threshold_coefficient_square_case() {
        // Frozen oracle: scipy quadrature of the MP median gives
        // omega(1) = 2.858362.
        let omega = hard_threshold_coefficient(1.0);
        assert!((omega - 2.858362).abs() < 1e-3, "omega(1) = {omega}");
    }

    #[test]
    fn hard_threshold_coefficient_rectangular_cases() {
        // Frozen oracle values computed with independent quadrature.
        for (beta, expected) in [(0.5, 2.171185), (0.25, 1.836866), (0.1, 1.608772)] {
            let omega = hard_threshold_coefficient(beta);
            assert!(
                (omega - expected).abs() < 2e-3,
                "omega({beta}) = {omega}, expected {expected}"
            );
        }
    }

    #[test]
    fn hard_threshold_keeps_dominant_pair() {
        let mut sv = vec![10.0, 10.0];
        sv.extend(std::iter::repeat(1e-14).take(30));
        let rank = optimal_hard_threshold(&sv, 32, 200).unwrap();
        assert_eq!(rank, 2);
    }

    #[test]
    fn hard_threshold_rejects_empty_or_increasing() {
        assert!(matches!(
            optimal_hard_threshold(&[], 4, 4),
            Err(Error::Degenerate(_))
        ));
        assert!(matches!(
            optimal_hard_threshold(&[1.0, 2.0], 4, 4),
            Err(Error::Degenerate(_))
        ));
    }

    #[test]
    fn closed_form_equals_projected_edmd_at_full_rank() {
        // Oracle: project the full EDMD solution.
        let snap = random_snapshots(11, 4, 2, 120);
        let r_til = full_rank_til(&snap);
        let model = dmdc_closed_form(&snap, 4, r_til).unwrap();
        let edmd = edmd_closed_form(&snap);
        let basis = truncated_basis(&snap, 4, r_til).unwrap();
        // blkdiag(Qhat, I)
        let p = snap.p();
        let mut blk = DMatrix::zeros(p, 4 + snap.p_upsilon);
        blk.view_mut((0, 0), (snap.p_theta, 4)).copy_from(&basis.q_hat);
        for i in 0..snap.p_upsilon {
            blk[(snap.p_theta + i, 4 + i)] = 1.0;
        }
        let oracle = basis.q_hat.transpose() * &edmd.u * blk;
        let rel = (&model.u - &oracle).norm() / oracle.norm();
        assert!(rel < 1e-8, "rel {rel}");
    }

    #[test]
    fn rank_one_truncation_of_rank_one_data() {
        // Data generated by a one-dimensional system evolving in a fixed
        // direction: states x = q0 * s, targets theta+ = q0 (a s + b u).
        let q = 40;
        let mut rng = StdRng::seed_from_u64(13);
        let q0 = DMatrix::from_column_slice(2, 1, &[1.0, 2.0]) / 5.0f64.sqrt();
        let mut psi = DMatrix::zeros(3, q);
        let mut theta_plus = DMatrix::zeros(2, q);
        for k in 0..q {
            let s: f64 = rng.random_range(-1.0..1.0);
            let u: f64 = rng.random_range(-1.0..1.0);
            psi.view_mut((0, k), (2, 1)).copy_from(&(&q0 * s));
            psi[(2, k)] = u;
            theta_plus
                .view_mut((0, k), (2, 1))
                .copy_from(&(&q0 * (0.7 * s + 0.2 * u)));
        }
        let snap = SnapshotMatrices::from_psi_theta(psi, theta_plus, 2, 0.1).unwrap();
        let model = dmdc_closed_form(&snap, 1, full_rank_til(&snap)).unwrap();
        assert!(model.meta.final_cost < 1e-20, "cost {}", model.meta.final_cost);
    }

    #[test]
    fn identity_lift_full_rank_is_similarity_transform() {
        let snap = linear_identity_snapshots();
        let r_til = full_rank_til(&snap);
        let model = dmdc_closed_form(&snap, 1, r_til).unwrap();
        let basis = truncated_basis(&snap, 1, r_til).unwrap();
        // Expand back: A = Qhat Ahat Qhat^T, B = Qhat Bhat.
        let a_full = &basis.q_hat * model.a() * basis.q_hat.transpose();
        let b_full = &basis.q_hat * model.b();
        assert_relative_eq!(a_full[(0, 0)], 0.9, epsilon = 1e-9);
        assert_relative_eq!(b_full[(0, 0)], 0.1, epsilon = 1e-9);
    }

    #[test]
    fn lmi_matches_closed_form_at_full_rank() {
        let snap = random_snapshots(17, 4, 2, 150);
        let r_til = full_rank_til(&snap);
        let lmi = dmdc_lmi(&snap, 4, r_til, &sdp::SolveSettings::default()).unwrap();
        let cf = dmdc_closed_form(&snap, 4, r_til).unwrap();
        let rel = (&lmi.u - &cf.u).norm() / cf.u.norm();
        assert!(rel < 1e-5, "rel {rel}");
    }

    #[test]
    fn truncation_cannot_improve_residual() {
        let snap = random_snapshots(19, 5, 2, 150);
        let r_til = full_rank_til(&snap);
        let full = dmdc_closed_form(&snap, 5, r_til).unwrap();
        let truncated = dmdc_closed_form(&snap, 2, r_til).unwrap();
        assert!(
            truncated.meta.final_cost >= full.meta.final_cost - 1e-12,
            "{} < {}",
            truncated.meta.final_cost,
            full.meta.final_cost
        );
    }

    #[test]
    fn exact_low_rank_data_fits_exactly_at_true_rank() {
        // Data generated by a reduced-order model: states live in range(Q0)
        // and targets are Q0 * Uhat_true * [Q0^T x; u].
        let q = 60;
        let mut rng = StdRng::seed_from_u64(23);
        let raw = DMatrix::from_fn(3, 2, |_, _| rng.random_range(-1.0..1.0));
        let q0 = raw.qr().q(); // orthonormal 3x2
        let u_hat_true = DMatrix::from_fn(2, 3, |_, _| rng.random_range(-0.6..0.6));
        let mut psi = DMatrix::zeros(4, q);
        let mut theta_plus = DMatrix::zeros(3, q);
        for k in 0..q {
            let s = DMatrix::from_fn(2, 1, |_, _| rng.random_range(-1.0..1.0));
            let u: f64 = rng.random_range(-1.0..1.0);
            psi.view_mut((0, k), (3, 1)).copy_from(&(&q0 * &s));
            psi[(3, k)] = u;
            let mut su = DMatrix::zeros(3, 1);
            su.view_mut((0, 0), (2, 1)).copy_from(&s);
            su[(2, 0)] = u;
            theta_plus
                .view_mut((0, k), (3, 1))
                .copy_from(&(&q0 * &u_hat_true * su));
        }
        let snap = SnapshotMatrices::from_psi_theta(psi, theta_plus, 3, 0.1).unwrap();
        let model = dmdc_closed_form(&snap, 2, full_rank_til(&snap)).unwrap();
        assert!(model.meta.final_cost < 1e-8, "cost {}", model.meta.final_cost);
    }

    #[test]
    fn projected_slack_shares_eigenvalues_on_range() {
        // W with eigenvectors inside range(Qhat): What = Qhat^T W Qhat has
        // exactly those eigenvalues.
        let snap = random_snapshots(29, 4, 2, 100);
        let basis = truncated_basis(&snap, 2, full_rank_til(&snap)).unwrap();
        let lambda = DMatrix::from_partial_diagonal(2, 2, &[3.0, 0.5]);
        let w = &basis.q_hat * &lambda * basis.q_hat.transpose();
        let w_hat = basis.q_hat.transpose() * w * &basis.q_hat;
        let mut eigs = w_hat.symmetric_eigenvalues().as_slice().to_vec();
        eigs.sort_by(|a, b| b.total_cmp(a));
        assert_relative_eq!(eigs[0], 3.0, epsilon = 1e-10);
        assert_relative_eq!(eigs[1], 0.5, epsilon = 1e-10);
    }

    #[test]
    fn dmdc_problem_is_smaller_than_edmd_problem() {
        let snap = random_snapshots(31, 6, 2, 150);
        let basis = truncated_basis(&snap, 2, full_rank_til(&snap)).unwrap();
        let mut reduced = SdProblem::new();
        install_dmdc_cost(&mut reduced, &basis, snap.q, snap.p_upsilon, None);
        let (l, _) = crate::regressors::compute_l(&snap.psi, snap.q);
        let mut full = SdProblem::new();
        crate::regressors::install_edmd_cost(&mut full, &snap, &l, None);
        assert!(
            reduced.n_dof() < full.n_dof(),
            "reduced dofs {} vs full {}",
            reduced.n_dof(),
            full.n_dof()
        );
    }

    #[test]
    fn stability_constrained_dmdc_clamps_radius() {
        // Drifting data so the unconstrained reduced fit is unstable.
        let rot = DMatrix::from_row_slice(2, 2, &[0.9950, -0.0998, 0.0998, 0.9950]);
        let a = rot * 1.02;
        let b = DMatrix::from_row_slice(2, 1, &[0.1, 0.05]);
        let mut rng = StdRng::seed_from_u64(37);
        let mut eps = Vec::new();
        for id in 0..4 {
            let t_len = 30;
            let mut states = DMatrix::zeros(2, t_len);
            let mut inputs = DMatrix::zeros(1, t_len);
            let mut x = DMatrix::from_fn(2, 1, |_, _| rng.random_range(-1.0..1.0));
            for k in 0..t_len {
                states.set_column(k, &x.column(0));
                let u = rng.random_range(-1.0..1.0);
                inputs[(0, k)] = u;
                x = &a * &x + &b * u;
            }
            eps.push(Episode::new(id, 0.1, states, inputs).unwrap());
        }
        let ds = Dataset::new(eps).unwrap();
        let pipeline = LiftingPipeline::identity().fit(&ds).unwrap();
        let snap = build_snapshots(&ds, &pipeline).unwrap();
        let (model, log) = fit_dmdc_constrained(
            &snap,
            2,
            full_rank_til(&snap),
            &DmdcConstraint::Stability { rho_bar: 0.999 },
            &BmiOptions::default(),
        )
        .unwrap();
        assert!(log.converged || !log.iterations.is_empty());
        let rho = spectral_radius(&model.a());
        assert!(rho <= 0.999 + 1e-6, "rho {rho}");
    }

    #[test]
    fn hinf_dmdc_identity_weight_equals_unweighted() {
        let snap = linear_identity_snapshots();
        let r_til = full_rank_til(&snap);
        let unweighted = fit_dmdc_constrained(
            &snap,
            1,
            r_til,
            &DmdcConstraint::Hinf {
                beta: 1e-2,
                options: HinfOptions::default(),
            },
            &BmiOptions::default(),
        )
        .unwrap();
        let weighted = fit_dmdc_constrained(
            &snap,
            1,
            r_til,
            &DmdcConstraint::Hinf {
                beta: 1e-2,
                options: HinfOptions {
                    weight: Some(StateSpace::identity(1, snap.dt)),
                    ..HinfOptions::default()
                },
            },
            &BmiOptions::default(),
        )
        .unwrap();
        let rel = (&unweighted.0.u - &weighted.0.u).norm() / unweighted.0.u.norm();
        assert!(rel < 1e-6, "rel {rel}");
    }

    #[test]
    fn hinf_dmdc_is_stable_with_bounded_gamma() {
        let snap = random_snapshots(41, 4, 2, 150);
        let (model, log) = fit_dmdc_constrained(
            &snap,
            3,
            full_rank_til(&snap),
            &DmdcConstraint::Hinf {
                beta: 1e-2,
                options: HinfOptions::default(),
            },
            &BmiOptions::default(),
        )
        .unwrap();
        assert!(!log.iterations.is_empty());
        assert!(spectral_radius(&model.a()) < 1.0);
        assert!(model.meta.params["gamma"].is_finite());
    }
}
