//! Unconstrained Koopman regression: closed-form EDMD, the Tikhonov baseline,
//! the `H = L L^T` decomposition, and the LMI reformulation of EDMD.

use crate::error::{Error, Result};
use crate::lifting::LiftingPipeline;
use crate::lti::StateSpace;
use crate::sdp::{self, MatExpr, SdProblem, SolveSettings, SolveStatus};
use crate::snapshots::SnapshotMatrices;
use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::path::Path;

/// Relative singular-value cutoff for pseudoinverse and `L` truncation.
pub const SV_CUTOFF: f64 = 1e-12;

/// How a model's state coordinates relate to the lifted space.
#[derive(Debug, Clone)]
pub enum Basis {
    /// States are the lifted coordinates themselves.
    Full,
    /// States live in the column space of an orthonormal basis `Q_hat`
    /// (`p_theta x r_hat`).
    Reduced { q_hat: DMatrix<f64> },
}

/// Fit provenance attached to every model.
#[derive(Debug, Clone, Serialize, Deserialize, Default)]
pub struct FitMeta {
    pub method: String,
    /// Scalar hyperparameters (alpha, rho_bar, beta, gamma, ranks...).
    pub params: BTreeMap<String, f64>,
    pub iterations: usize,
    /// `(1/q) ||ThetaPlus - U Psi||_F^2` at the returned solution.
    pub final_cost: f64,
    /// Numerical rank used by pseudoinverse/truncation steps.
    pub rank: Option<usize>,
    pub notes: Vec<String>,
}

/// Identified Koopman system `theta+ = A theta + B upsilon`,
/// `zeta = C theta + D upsilon`, with `U = [A B]`.
#[derive(Debug, Clone)]
pub struct KoopmanModel {
    /// `[A B]`: `state_dim x (state_dim + input_dim)`.
    pub u: DMatrix<f64>,
    pub c: DMatrix<f64>,
    pub d: DMatrix<f64>,
    pub basis: Basis,
    pub dt: f64,
    /// The fitted pipeline used to produce the snapshots, when available.
    pub pipeline: Option<LiftingPipeline>,
    pub meta: FitMeta,
}

impl KoopmanModel {
    /// Full-basis model with default output maps `C = I`, `D = 0`.
    pub fn new_full(u: DMatrix<f64>, state_dim: usize, dt: f64, meta: FitMeta) -> Self {
        let input_dim = u.ncols() - state_dim;
        Self {
            c: DMatrix::identity(state_dim, state_dim),
            d: DMatrix::zeros(state_dim, input_dim),
            u,
            basis: Basis::Full,
            dt,
            pipeline: None,
            meta,
        }
    }

    /// Model state dimension (`p_theta`, or `r_hat` for reduced models).
    pub fn state_dim(&self) -> usize {
        self.u.nrows()
    }

    pub fn input_dim(&self) -> usize {
        self.u.ncols() - self.u.nrows()
    }

    /// State transition block `A`.
    pub fn a(&self) -> DMatrix<f64> {
        self.u.columns(0, self.state_dim()).into_owned()
    }

    /// Input block `B`.
    pub fn b(&self) -> DMatrix<f64> {
        self.u
            .columns(self.state_dim(), self.input_dim())
            .into_owned()
    }

    pub fn with_pipeline(mut self, pipeline: LiftingPipeline) -> Self {
        self.pipeline = Some(pipeline);
        self
    }

    /// Replace the output maps, checking dimensions.
    pub fn with_output_maps(mut self, c: DMatrix<f64>, d: DMatrix<f64>) -> Result<Self> {
        if c.ncols() != self.state_dim() {
            return Err(Error::Dimension(format!(
                "C must have {} columns, got {}",
                self.state_dim(),
                c.ncols()
            )));
        }
        if d.nrows() != c.nrows() || d.ncols() != self.input_dim() {
            return Err(Error::Dimension(format!(
                "D must be {}x{}, got {}x{}",
                c.nrows(),
                self.input_dim(),
                d.nrows(),
                d.ncols()
            )));
        }
        self.c = c;
        self.d = d;
        Ok(self)
    }

    /// The model as a discrete-time LTI system `(A, B, C, D)`.
    pub fn state_space(&self) -> Result<StateSpace> {
        StateSpace::new(self.a(), self.b(), self.c.clone(), self.d.clone(), self.dt)
    }

    pub fn save_json(&self, path: impl AsRef<Path>) -> Result<()> {
        let s = self.to_json_string()?;
        std::fs::write(path, s)?;
        Ok(())
    }

    pub fn load_json(path: impl AsRef<Path>) -> Result<Self> {
        let s = std::fs::read_to_string(path)?;
        Self::from_json_str(&s)
    }

    pub fn to_json_string(&self) -> Result<String> {
        let doc = ModelJson {
            format: FORMAT_TAG.to_string(),
            dt: self.dt,
            u: mat_to_json(&self.u),
            c: mat_to_json(&self.c),
            d: mat_to_json(&self.d),
            basis: match &self.basis {
                Basis::Full => None,
                Basis::Reduced { q_hat } => Some(BasisJson {
                    q_hat: mat_to_json(q_hat),
                }),
            },
            pipeline: self.pipeline.clone(),
            meta: self.meta.clone(),
        };
        Ok(serde_json::to_string_pretty(&doc)?)
    }

    pub fn from_json_str(s: &str) -> Result<Self> {
        let doc: ModelJson = serde_json::from_str(s)?;
        if doc.format != FORMAT_TAG {
            return Err(Error::Data(format!(
                "unsupported model format '{}'",
                doc.format
            )));
        }
        Ok(Self {
            u: mat_from_json(&doc.u)?,
            c: mat_from_json(&doc.c)?,
            d: mat_from_json(&doc.d)?,
            basis: match doc.basis {
                None => Basis::Full,
                Some(b) => Basis::Reduced {
                    q_hat: mat_from_json(&b.q_hat)?,
                },
            },
            dt: doc.dt,
            pipeline: doc.pipeline,
            meta: doc.meta,
        })
    }
}

const FORMAT_TAG: &str = "koopman-model-v1";

/// Row-major matrix payload of the JSON model container.
#[derive(Debug, Clone, Serialize, Deserialize)]
struct MatrixJson {
    rows: usize,
    cols: usize,
    /// Row-major entries, `rows * cols` values.
    data: Vec<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct BasisJson {
    q_hat: MatrixJson,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct ModelJson {
    format: String,
    dt: f64,
    u: MatrixJson,
    c: MatrixJson,
    d: MatrixJson,
    basis: Option<BasisJson>,
    pipeline: Option<LiftingPipeline>,
    meta: FitMeta,
}

fn mat_to_json(m: &DMatrix<f64>) -> MatrixJson {
    let mut data = Vec::with_capacity(m.nrows() * m.ncols());
    for i in 0..m.nrows() {
        for j in 0..m.ncols() {
            data.push(m[(i, j)]);
        }
    }
    MatrixJson {
        rows: m.nrows(),
        cols: m.ncols(),
        data,
    }
}

fn mat_from_json(m: &MatrixJson) -> Result<DMatrix<f64>> {
    if m.data.len() != m.rows * m.cols {
        return Err(Error::Data(format!(
            "matrix payload has {} entries for a {}x{} matrix",
            m.data.len(),
            m.rows,
            m.cols
        )));
    }
    Ok(DMatrix::from_row_slice(m.rows, m.cols, &m.data))
}

/// Pseudoinverse of a symmetric PSD matrix with relative cutoff
/// `SV_CUTOFF * sigma_max`; returns the numerical rank as well.
fn psd_pinv(h: &DMatrix<f64>) -> (DMatrix<f64>, usize) {
    let n = h.nrows();
    let eig = h.clone().symmetric_eigen();
    let sigma_max = eig.eigenvalues.iter().fold(0.0f64, |a, &b| a.max(b.abs()));
    let mut rank = 0usize;
    let mut inv = DMatrix::zeros(n, n);
    if sigma_max <= 0.0 {
        return (inv, 0);
    }
    for k in 0..n {
        let lam = eig.eigenvalues[k];
        if lam.abs() >= SV_CUTOFF * sigma_max {
            rank += 1;
            let v = eig.eigenvectors.column(k);
            inv += v * v.transpose() / lam;
        }
    }
    (inv, rank)
}

/// Closed-form EDMD: `U = G H^+` with the `1/q`-scaled `G`, `H`.
pub fn edmd_closed_form(snap: &SnapshotMatrices) -> KoopmanModel {
    let (h_pinv, rank) = psd_pinv(&snap.h);
    let u = &snap.g * h_pinv;
    let cost = snap.cost_of(&u);
    let meta = FitMeta {
        method: "edmd".into(),
        params: BTreeMap::new(),
        iterations: 0,
        final_cost: cost,
        rank: Some(rank),
        notes: Vec::new(),
    };
    KoopmanModel::new_full(u, snap.p_theta, snap.dt, meta)
}

/// Tikhonov-regularized EDMD.
///
/// Minimizes `(1/q) ||ThetaPlus - U Psi||_F^2 + alpha tr(U U^T)`, whose
/// closed form is `U = G (H + alpha I)^{-1}` with the `1/q`-scaled `G`, `H`.
/// `alpha = 0` reproduces [`edmd_closed_form`].
pub fn tikhonov(snap: &SnapshotMatrices, alpha: f64) -> Result<KoopmanModel> {
    if alpha < 0.0 {
        return Err(Error::Config(format!("alpha must be nonnegative, got {alpha}")));
    }
    if alpha == 0.0 {
        let mut model = edmd_closed_form(snap);
        model.meta.method = "tikhonov".into();
        model.meta.params.insert("alpha".into(), 0.0);
        return Ok(model);
    }
    let p = snap.p();
    let reg = &snap.h + DMatrix::<f64>::identity(p, p) * alpha;
    let chol = reg
        .clone()
        .cholesky()
        .ok_or_else(|| Error::Solver("H + alpha I is not positive definite".into()))?;
    // (H + alpha I) U^T = G^T
    let ut = chol.solve(&snap.g.transpose());
    let u = ut.transpose();
    let cost = snap.cost_of(&u) + alpha * (&u * u.transpose()).trace();
    let mut params = BTreeMap::new();
    params.insert("alpha".into(), alpha);
    let meta = FitMeta {
        method: "tikhonov".into(),
        params,
        iterations: 0,
        final_cost: cost,
        rank: Some(p),
        notes: Vec::new(),
    };
    Ok(KoopmanModel::new_full(u, snap.p_theta, snap.dt, meta))
}

/// Factor `H = L L^T` from the SVD of `Psi`: `L = (1/sqrt(q)) Q Sigma` with
/// singular values below `SV_CUTOFF * sigma_max` truncated. Returns `(L, rank)`.
pub fn compute_l(psi: &DMatrix<f64>, q: usize) -> (DMatrix<f64>, usize) {
    let svd = psi.clone().svd(true, false);
    let q_mat = svd.u.expect("svd with u requested");
    let sv = &svd.singular_values;
    let sigma_max = sv.iter().copied().fold(0.0f64, f64::max);
    let rank = if sigma_max <= 0.0 {
        0
    } else {
        sv.iter().filter(|&&s| s >= SV_CUTOFF * sigma_max).count()
    };
    let mut l = DMatrix::zeros(psi.nrows(), rank);
    let scale = 1.0 / (q as f64).sqrt();
    for k in 0..rank {
        let col = q_mat.column(k) * (sv[k] * scale);
        l.set_column(k, &col);
    }
    (l, rank)
}

/// Shared LMI pieces of the EDMD cost: slack variables `(nu, W)` with
/// `tr(W) < nu`, `W > 0`, `[W, U L; L^T U^T, I] > 0`.
pub(crate) struct EdmdLmiCore {
    pub u: sdp::VarId,
    #[allow(dead_code)]
    pub w: sdp::VarId,
    #[allow(dead_code)]
    pub nu: sdp::VarId,
}

/// Install the EDMD cost machinery (variables, slack constraints and the
/// objective `-2 tr(U G^T) + nu`) into `problem`.
pub(crate) fn install_edmd_cost(
    problem: &mut SdProblem,
    snap: &SnapshotMatrices,
    l: &DMatrix<f64>,
    margin: Option<f64>,
) -> EdmdLmiCore {
    let p_theta = snap.p_theta;
    let p = snap.p();
    let rank = l.ncols();
    let u = problem.rect_var(p_theta, p);
    let w = problem.sym_var(p_theta);
    let nu = problem.scalar_var();
    let eye_t = DMatrix::<f64>::identity(p_theta, p_theta);

    // nu - tr(W) >= margin
    let mut slack = MatExpr::zeros(1);
    slack.add_scalar_mat(0, 0, nu, &DMatrix::identity(1, 1));
    slack.add_trace(0, 0, w, p_theta, -1.0);
    match margin {
        Some(m) => problem.require_psd_with_margin(slack, m, "nu - tr(W)"),
        None => problem.require_psd(slack, "nu - tr(W)"),
    }

    // W > 0
    let mut wpd = MatExpr::zeros(p_theta);
    wpd.add_product(0, 0, &eye_t, w, &eye_t, 1.0);
    match margin {
        Some(m) => problem.require_psd_with_margin(wpd, m, "W"),
        None => problem.require_psd(wpd, "W"),
    }

    // [W, U L; L^T U^T, I] > 0
    let s = p_theta + rank;
    let mut schur = MatExpr::zeros(s);
    schur.add_product(0, 0, &eye_t, w, &eye_t, 1.0);
    let eye_r = DMatrix::<f64>::identity(rank, rank);
    schur.add_product(0, p_theta, &eye_t, u, l, 1.0);
    schur.add_product_tr(p_theta, 0, &l.transpose(), u, &eye_t, 1.0);
    schur.add_const(p_theta, p_theta, &eye_r);
    match margin {
        Some(m) => problem.require_psd_with_margin(schur, m, "edmd schur block"),
        None => problem.require_psd(schur, "edmd schur block"),
    }

    // min c - 2 tr(U G^T) + nu
    problem.add_objective_term(u, snap.g.clone() * -2.0);
    problem.add_objective_scalar(nu, 1.0);
    problem.set_objective_constant(snap.cost_constant());

    EdmdLmiCore { u, w, nu }
}

/// EDMD solved through its LMI form.
///
/// Minimizes `c - 2 tr(U G^T) + nu` subject to `tr(W) < nu`, `W > 0` and
/// `[W, U L; L^T U^T, I] > 0`, where `H = L L^T`.
pub fn edmd_lmi(snap: &SnapshotMatrices, settings: &SolveSettings) -> Result<KoopmanModel> {
    let (l, rank) = compute_l(&snap.psi, snap.q);
    let mut problem = SdProblem::new();
    let core = install_edmd_cost(&mut problem, snap, &l, None);
    let sol = sdp::solve(&problem, settings)?;
    if sol.status != SolveStatus::Optimal {
        return Err(Error::Solver(format!(
            "edmd_lmi: solver returned {:?} ({})",
            sol.status, sol.diagnostics.solver_status
        )));
    }
    let u = sol.value(core.u).clone();
    let cost = snap.cost_of(&u);
    let meta = FitMeta {
        method: "edmd-lmi".into(),
        params: BTreeMap::new(),
        iterations: sol.diagnostics.iterations as usize,
        final_cost: cost,
        rank: Some(rank),
        notes: Vec::new(),
    };
    Ok(KoopmanModel::new_full(u, snap.p_theta, snap.dt, meta))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lifting::LiftingPipeline;
    use crate::snapshots::{build_snapshots, Dataset, Episode};
    use approx::assert_relative_eq;
    use rand::rngs::StdRng;
    use rand::{Rng, SeedableRng};

    fn linear_scalar_dataset() -> Dataset {
        // x_{k+1} = 0.9 x_k + 0.1 u_k
        let t_len = 40;
        let mut states = DMatrix::zeros(1, t_len);
        let mut inputs = DMatrix::zeros(1, t_len);
        let mut x = 1.0f64;
        let mut phase = 0.0f64;
        for k in 0..t_len {
            states[(0, k)] = x;
            let u = (phase).sin();
            inputs[(0, k)] = u;
            x = 0.9 * x + 0.1 * u;
            phase += 0.7;
        }
        Dataset::new(vec![Episode::new(0, 0.1, states, inputs).unwrap()]).unwrap()
    }

    fn random_snapshots(rng: &mut StdRng, p_theta: usize, p: usize, q: usize) -> SnapshotMatrices {
        let psi = DMatrix::from_fn(p, q, |_, _| rng.random_range(-1.0..1.0));
        let u_true = DMatrix::from_fn(p_theta, p, |_, _| rng.random_range(-0.5..0.5));
        let noise = DMatrix::from_fn(p_theta, q, |_, _| rng.random_range(-0.01..0.01));
        let theta_plus = &u_true * &psi + noise;
        SnapshotMatrices::from_psi_theta(psi, theta_plus, p_theta, 0.1).unwrap()
    }

    #[test]
    fn edmd_recovers_exact_linear_model() {
        let ds = linear_scalar_dataset();
        let pipeline = LiftingPipeline::identity().fit(&ds).unwrap();
        let snap = build_snapshots(&ds, &pipeline).unwrap();
        let model = edmd_closed_form(&snap);
        assert_relative_eq!(model.u[(0, 0)], 0.9, epsilon = 1e-10);
        assert_relative_eq!(model.u[(0, 1)], 0.1, epsilon = 1e-10);
        assert!(model.meta.final_cost < 1e-20);
    }

    #[test]
    fn zero_targets_give_zero_koopman_matrix() {
        let mut rng = StdRng::seed_from_u64(1);
        let psi = DMatrix::from_fn(4, 50, |_, _| rng.random_range(-1.0..1.0));
        let theta_plus = DMatrix::zeros(2, 50);
        let snap = SnapshotMatrices::from_psi_theta(psi, theta_plus, 2, 0.1).unwrap();
        let model = edmd_closed_form(&snap);
        assert!(model.u.abs().max() < 1e-12);
    }

    #[test]
    fn edmd_matches_direct_pseudoinverse_oracle() {
        // Oracle: U = ThetaPlus Psi^+ via SVD of the full Psi.
        let mut rng = StdRng::seed_from_u64(2);
        let snap = random_snapshots(&mut rng, 4, 6, 200);
        let model = edmd_closed_form(&snap);
        let pinv = snap.psi.clone().pseudo_inverse(1e-12).unwrap();
        let oracle = &snap.theta_plus * pinv;
        let rel = (&model.u - &oracle).norm() / oracle.norm();
        assert!(rel < 1e-10, "rel {rel}");
    }

    #[test]
    fn edmd_residual_is_global_minimum() {
        let mut rng = StdRng::seed_from_u64(3);
        let snap = random_snapshots(&mut rng, 3, 5, 80);
        let model = edmd_closed_form(&snap);
        let base = snap.cost_of(&model.u);
        for _ in 0..10 {
            let delta = DMatrix::from_fn(3, 5, |_, _| rng.random_range(-1.0..1.0));
            let delta = &delta * (1e-3 / delta.norm());
            let perturbed = snap.cost_of(&(&model.u + delta));
            assert!(perturbed >= base - 1e-12, "{perturbed} < {base}");
        }
    }

    #[test]
    fn cost_identity_matches_expansion() {
        // c - 2 tr(U G^T) + tr(U H U^T) == (1/q) ||ThetaPlus - U Psi||_F^2
        let mut rng = StdRng::seed_from_u64(4);
        let snap = random_snapshots(&mut rng, 3, 5, 60);
        for _ in 0..5 {
            let u = DMatrix::from_fn(3, 5, |_, _| rng.random_range(-1.0..1.0));
            let lhs = snap.cost_constant() - 2.0 * (&u * snap.g.transpose()).trace()
                + (&u * &snap.h * u.transpose()).trace();
            let rhs = snap.cost_of(&u);
            assert_relative_eq!(lhs, rhs, max_relative = 1e-10);
        }
    }

    #[test]
    fn tikhonov_zero_alpha_reduces_to_edmd() {
        let mut rng = StdRng::seed_from_u64(5);
        let snap = random_snapshots(&mut rng, 4, 6, 120);
        let edmd = edmd_closed_form(&snap);
        let tik = tikhonov(&snap, 0.0).unwrap();
        let rel = (&edmd.u - &tik.u).norm() / edmd.u.norm();
        assert!(rel < 1e-12);
    }

    #[test]
    fn tikhonov_huge_alpha_shrinks_u() {
        let mut rng = StdRng::seed_from_u64(6);
        let snap = random_snapshots(&mut rng, 4, 6, 120);
        let tik = tikhonov(&snap, 1e12).unwrap();
        assert!(tik.u.norm() < 1e-6, "norm {}", tik.u.norm());
    }

    #[test]
    fn tikhonov_matches_normal_equation_oracle() {
        // Oracle: independent LU solve of (H + alpha I) U^T = G^T.
        let mut rng = StdRng::seed_from_u64(7);
        let snap = random_snapshots(&mut rng, 4, 6, 120);
        let alpha = 0.1;
        let tik = tikhonov(&snap, alpha).unwrap();
        let reg = &snap.h + DMatrix::<f64>::identity(6, 6) * alpha;
        let ut = reg.lu().solve(&snap.g.transpose()).unwrap();
        let oracle = ut.transpose();
        let rel = (&tik.u - &oracle).norm() / oracle.norm();
        assert!(rel < 1e-9, "rel {rel}");
    }

    #[test]
    fn compute_l_identity_psi() {
        let p = 4;
        let psi = DMatrix::<f64>::identity(p, p);
        let (l, rank) = compute_l(&psi, p);
        assert_eq!(rank, p);
        let expected = DMatrix::<f64>::identity(p, p) / (p as f64).sqrt();
        assert!((l.clone() * l.transpose() - &expected * expected.transpose())
            .abs()
            .max()
            < 1e-12);
    }

    #[test]
    fn compute_l_rank_one() {
        let col = DMatrix::from_column_slice(3, 1, &[1.0, 2.0, -1.0]);
        let mut psi = DMatrix::zeros(3, 10);
        for k in 0..10 {
            psi.set_column(k, &(col.column(0) * ((k + 1) as f64)));
        }
        let (l, rank) = compute_l(&psi, 10);
        assert_eq!(rank, 1);
        assert_eq!(l.ncols(), 1);
    }

    #[test]
    fn compute_l_factorizes_h() {
        let mut rng = StdRng::seed_from_u64(8);
        let psi = DMatrix::from_fn(8, 100, |_, _| rng.random_range(-1.0..1.0));
        let q = 100;
        let (l, _) = compute_l(&psi, q);
        let h = &psi * psi.transpose() / q as f64;
        let rel = (&l * l.transpose() - &h).norm() / h.norm();
        assert!(rel < 1e-10, "rel {rel}");
    }

    #[test]
    fn edmd_lmi_matches_closed_form_exact_linear() {
        let ds = linear_scalar_dataset();
        let pipeline = LiftingPipeline::identity().fit(&ds).unwrap();
        let snap = build_snapshots(&ds, &pipeline).unwrap();
        let model = edmd_lmi(&snap, &SolveSettings::default()).unwrap();
        assert_relative_eq!(model.u[(0, 0)], 0.9, epsilon = 1e-5);
        assert_relative_eq!(model.u[(0, 1)], 0.1, epsilon = 1e-5);
    }

    #[test]
    fn edmd_lmi_matches_closed_form_random() {
        let mut rng = StdRng::seed_from_u64(9);
        let snap = random_snapshots(&mut rng, 4, 6, 200);
        let lmi = edmd_lmi(&snap, &SolveSettings::default()).unwrap();
        let cf = edmd_closed_form(&snap);
        let rel = (&lmi.u - &cf.u).norm() / cf.u.norm();
        assert!(rel < 1e-5, "rel {rel}");
    }

    #[test]
    fn edmd_lmi_rank_deficient_residual_matches() {
        let mut rng = StdRng::seed_from_u64(10);
        let mut psi = DMatrix::from_fn(5, 80, |_, _| rng.random_range(-1.0..1.0));
        let row = psi.row(1).into_owned();
        psi.set_row(4, &row); // duplicated row => rank-deficient Psi
        let u_true = DMatrix::from_fn(3, 5, |_, _| rng.random_range(-0.5..0.5));
        let theta_plus = &u_true * &psi;
        let snap = SnapshotMatrices::from_psi_theta(psi, theta_plus, 3, 0.1).unwrap();
        let lmi = edmd_lmi(&snap, &SolveSettings::default()).unwrap();
        let cf = edmd_closed_form(&snap);
        let r_lmi = snap.cost_of(&lmi.u);
        let r_cf = snap.cost_of(&cf.u);
        assert!((r_lmi - r_cf).abs() < 1e-6, "{r_lmi} vs {r_cf}");
    }

    #[test]
    fn model_json_round_trip() {
        let ds = linear_scalar_dataset();
        let pipeline = LiftingPipeline::identity().fit(&ds).unwrap();
        let snap = build_snapshots(&ds, &pipeline).unwrap();
        let model = edmd_closed_form(&snap).with_pipeline(pipeline);
        let s = model.to_json_string().unwrap();
        let back = KoopmanModel::from_json_str(&s).unwrap();
        assert!((&model.u - &back.u).abs().max() == 0.0);
        assert!((&model.c - &back.c).abs().max() == 0.0);
        assert_eq!(model.meta.method, back.meta.method);
        assert!(back.pipeline.is_some());
        // Row-major payload documented: check one known entry position.
        let doc: serde_json::Value = serde_json::from_str(&s).unwrap();
        assert_eq!(doc["format"], "koopman-model-v1");
        let data = doc["u"]["data"].as_array().unwrap();
        assert_relative_eq!(data[0].as_f64().unwrap(), model.u[(0, 0)], epsilon = 1e-15);
        assert_relative_eq!(data[1].as_f64().unwrap(), model.u[(0, 1)], epsilon = 1e-15);
    }

    #[test]
    fn identity_lift_edmd_equals_least_squares_on_raw_data() {
        // With the identity embedding EDMD must reduce to ordinary least
        // squares on (x, u).
        let ds = linear_scalar_dataset();
        let pipeline = LiftingPipeline::identity().fit(&ds).unwrap();
        let snap = build_snapshots(&ds, &pipeline).unwrap();
        let model = edmd_closed_form(&snap);
        let pinv = snap.psi.clone().pseudo_inverse(1e-12).unwrap();
        let ls = &snap.theta_plus * pinv;
        assert!((&model.u - &ls).abs().max() < 1e-10);
    }
}
