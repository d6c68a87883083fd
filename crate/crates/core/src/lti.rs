//! Discrete-time LTI state-space systems: cascade composition, frequency
//! response, spectral radius, H-infinity norm, and weighting filters.

use crate::error::{Error, Result};
use crate::sdp::{self, MatExpr, SdProblem, SolveSettings};
use nalgebra::{Complex, DMatrix};

/// Discrete-time state-space system `x+ = A x + B u`, `y = C x + D u`.
#[derive(Debug, Clone, PartialEq)]
pub struct StateSpace {
    pub a: DMatrix<f64>,
    pub b: DMatrix<f64>,
    pub c: DMatrix<f64>,
    pub d: DMatrix<f64>,
    /// Sampling timestep in seconds.
    pub dt: f64,
}

impl StateSpace {
    pub fn new(
        a: DMatrix<f64>,
        b: DMatrix<f64>,
        c: DMatrix<f64>,
        d: DMatrix<f64>,
        dt: f64,
    ) -> Result<Self> {
        let r = a.nrows();
        if a.ncols() != r {
            return Err(Error::Dimension(format!(
                "A must be square, got {}x{}",
                a.nrows(),
                a.ncols()
            )));
        }
        if b.nrows() != r {
            return Err(Error::Dimension("B row count must match A".into()));
        }
        if c.ncols() != r {
            return Err(Error::Dimension("C column count must match A".into()));
        }
        if d.nrows() != c.nrows() || d.ncols() != b.ncols() {
            return Err(Error::Dimension(format!(
                "D must be {}x{}, got {}x{}",
                c.nrows(),
                b.ncols(),
                d.nrows(),
                d.ncols()
            )));
        }
        if !(dt > 0.0) {
            return Err(Error::Dimension(format!("dt must be positive, got {dt}")));
        }
        for m in [&a, &b, &c, &d] {
            if m.iter().any(|v| !v.is_finite()) {
                return Err(Error::Data("state-space matrices contain non-finite entries".into()));
            }
        }
        Ok(Self { a, b, c, d, dt })
    }

    /// State dimension.
    pub fn order(&self) -> usize {
        self.a.nrows()
    }

    pub fn n_inputs(&self) -> usize {
        self.b.ncols()
    }

    pub fn n_outputs(&self) -> usize {
        self.c.nrows()
    }

    /// Static identity system `y = u` with `n` channels (zero states).
    pub fn identity(n: usize, dt: f64) -> Self {
        Self {
            a: DMatrix::zeros(0, 0),
            b: DMatrix::zeros(0, n),
            c: DMatrix::zeros(n, 0),
            d: DMatrix::identity(n, n),
            dt,
        }
    }

    /// Nyquist frequency in Hz.
    pub fn nyquist_hz(&self) -> f64 {
        0.5 / self.dt
    }

    /// Evaluate the transfer matrix `C (e^{j theta} I - A)^{-1} B + D`.
    pub fn transfer_at(&self, theta: f64) -> Result<DMatrix<Complex<f64>>> {
        let r = self.order();
        let z = Complex::new(theta.cos(), theta.sin());
        let b_c = self.b.map(|v| Complex::new(v, 0.0));
        let x = if r == 0 {
            DMatrix::zeros(0, self.n_inputs())
        } else {
            let mut zi_a = self.a.map(|v| Complex::new(-v, 0.0));
            for i in 0..r {
                zi_a[(i, i)] += z;
            }
            zi_a.lu().solve(&b_c).ok_or_else(|| {
                Error::PoleOnCircle(format!("resolvent singular at theta = {theta}"))
            })?
        };
        let c_c = self.c.map(|v| Complex::new(v, 0.0));
        let d_c = self.d.map(|v| Complex::new(v, 0.0));
        Ok(c_c * x + d_c)
    }

    /// Block-diagonal replication of the system across `n` identical channels.
    ///
    /// Used to apply a SISO weighting filter to every output of a MIMO system.
    pub fn replicate_diag(&self, n: usize) -> Self {
        let r = self.order();
        let (ni, no) = (self.n_inputs(), self.n_outputs());
        let mut a = DMatrix::zeros(r * n, r * n);
        let mut b = DMatrix::zeros(r * n, ni * n);
        let mut c = DMatrix::zeros(no * n, r * n);
        let mut d = DMatrix::zeros(no * n, ni * n);
        for k in 0..n {
            a.view_mut((k * r, k * r), (r, r)).copy_from(&self.a);
            b.view_mut((k * r, k * ni), (r, ni)).copy_from(&self.b);
            c.view_mut((k * no, k * r), (no, r)).copy_from(&self.c);
            d.view_mut((k * no, k * ni), (no, ni)).copy_from(&self.d);
        }
        Self {
            a,
            b,
            c,
            d,
            dt: self.dt,
        }
    }
}

/// Series interconnection: the output of `g` feeds the input of `gw`.
///
/// Returns the realization
/// `[A 0; Bw C Aw], [B; Bw D], [Dw C Cw], Dw D`
/// whose transfer matrix is `Gw(z) * G(z)`.
pub fn cascade(gw: &StateSpace, g: &StateSpace) -> Result<StateSpace> {
    if gw.n_inputs() != g.n_outputs() {
        return Err(Error::Dimension(format!(
            "cascade: weight has {} inputs but system has {} outputs",
            gw.n_inputs(),
            g.n_outputs()
        )));
    }
    if (gw.dt - g.dt).abs() > 1e-12 * g.dt.max(gw.dt) {
        return Err(Error::Dimension(format!(
            "cascade: sampling steps differ ({} vs {})",
            gw.dt, g.dt
        )));
    }
    let r = g.order();
    let rw = gw.order();
    let mut a = DMatrix::zeros(r + rw, r + rw);
    a.view_mut((0, 0), (r, r)).copy_from(&g.a);
    a.view_mut((r, 0), (rw, r)).copy_from(&(&gw.b * &g.c));
    a.view_mut((r, r), (rw, rw)).copy_from(&gw.a);
    let mut b = DMatrix::zeros(r + rw, g.n_inputs());
    b.view_mut((0, 0), (r, g.n_inputs())).copy_from(&g.b);
    b.view_mut((r, 0), (rw, g.n_inputs()))
        .copy_from(&(&gw.b * &g.d));
    let mut c = DMatrix::zeros(gw.n_outputs(), r + rw);
    c.view_mut((0, 0), (gw.n_outputs(), r))
        .copy_from(&(&gw.d * &g.c));
    c.view_mut((0, r), (gw.n_outputs(), rw)).copy_from(&gw.c);
    let d = &gw.d * &g.d;
    StateSpace::new(a, b, c, d, g.dt)
}

/// Maximum singular value of the transfer matrix at discrete frequency
/// `theta` (radians/sample).
pub fn freq_response_max_sv(g: &StateSpace, theta: f64) -> Result<f64> {
    let t = g.transfer_at(theta)?;
    if t.nrows() == 0 || t.ncols() == 0 {
        return Ok(0.0);
    }
    Ok(t.singular_values()[0])
}

/// Spectral radius `max |lambda_i(A)|` of a square matrix.
pub fn spectral_radius(a: &DMatrix<f64>) -> f64 {
    if a.nrows() == 0 {
        return 0.0;
    }
    a.complex_eigenvalues()
        .iter()
        .map(|l| l.norm())
        .fold(0.0, f64::max)
}

/// Bounded-real feasibility problem: the LMI in `(P)` certifying
/// `||G||_inf < gamma` for a fixed system.
fn bounded_real_feasibility(g: &StateSpace, gamma: f64) -> SdProblem {
    let r = g.order();
    let n_in = g.n_inputs();
    let n_out = g.n_outputs();
    let s = 2 * r + n_in + n_out;
    let mut problem = SdProblem::new();
    let p = problem.sym_var(r);
    let eye_r = DMatrix::<f64>::identity(r, r);

    let mut pd = MatExpr::zeros(r);
    pd.add_product(0, 0, &eye_r, p, &eye_r, 1.0);
    problem.require_psd(pd, "P");

    let mut br = MatExpr::zeros(s);
    // (0,0) P; (1,1) P
    br.add_product(0, 0, &eye_r, p, &eye_r, 1.0);
    br.add_product(r, r, &eye_r, p, &eye_r, 1.0);
    // (0,1) A P and (1,0) P A^T
    br.add_product(0, r, &g.a, p, &eye_r, 1.0);
    br.add_product(r, 0, &eye_r, p, &g.a.transpose(), 1.0);
    // (0,2) B and (2,0) B^T
    br.add_const(0, 2 * r, &g.b);
    br.add_const(2 * r, 0, &g.b.transpose());
    // (1,3) P C^T and (3,1) C P
    br.add_product(r, 2 * r + n_in, &eye_r, p, &g.c.transpose(), 1.0);
    br.add_product(2 * r + n_in, r, &g.c, p, &eye_r, 1.0);
    // (2,2) gamma I, (3,3) gamma I
    br.add_const(
        2 * r,
        2 * r,
        &(DMatrix::<f64>::identity(n_in, n_in) * gamma),
    );
    br.add_const(
        2 * r + n_in,
        2 * r + n_in,
        &(DMatrix::<f64>::identity(n_out, n_out) * gamma),
    );
    // (2,3) D^T and (3,2) D
    br.add_const(2 * r, 2 * r + n_in, &g.d.transpose());
    br.add_const(2 * r + n_in, 2 * r, &g.d);
    problem.require_psd(br, "bounded-real");
    problem
}

/// Largest `max_sv` over a uniform theta grid, then locally refined around the
/// peak. Returns `(theta_peak, value)`.
pub fn refined_peak_gain(g: &StateSpace, base_points: usize) -> Result<(f64, f64)> {
    let n = base_points.max(8);
    let mut best_theta = 0.0;
    let mut best = f64::NEG_INFINITY;
    let mut second_spacing = std::f64::consts::PI / (n as f64 - 1.0);
    for i in 0..n {
        let theta = std::f64::consts::PI * (i as f64) / (n as f64 - 1.0);
        let v = freq_response_max_sv(g, theta)?;
        if v > best {
            best = v;
            best_theta = theta;
        }
    }
    // Local refinement: shrink a bracket around the best sample.
    let mut lo = (best_theta - second_spacing).max(0.0);
    let mut hi = (best_theta + second_spacing).min(std::f64::consts::PI);
    for _ in 0..24 {
        let m = 12usize;
        let mut local_best = best;
        let mut local_theta = best_theta;
        for i in 0..=m {
            let theta = lo + (hi - lo) * (i as f64) / (m as f64);
            let v = freq_response_max_sv(g, theta)?;
            if v > local_best {
                local_best = v;
                local_theta = theta;
            }
        }
        best = local_best;
        best_theta = local_theta;
        second_spacing = (hi - lo) / (m as f64);
        lo = (best_theta - second_spacing).max(0.0);
        hi = (best_theta + second_spacing).min(std::f64::consts::PI);
        if hi - lo < 1e-14 {
            break;
        }
    }
    Ok((best_theta, best))
}

/// H-infinity norm `sup_theta max_sv(G(e^{j theta}))` of an asymptotically
/// stable system, computed by bisection on the bounded-real LMI and
/// cross-checked against an adaptively refined frequency grid.
pub fn hinf_norm(g: &StateSpace, tol: f64) -> Result<f64> {
    let rho = spectral_radius(&g.a);
    if rho >= 1.0 {
        return Err(Error::UnstableSystem(format!(
            "spectral radius {rho} >= 1, H-infinity norm is infinite"
        )));
    }
    let n_io = g.n_inputs().min(g.n_outputs());
    if n_io == 0 {
        return Ok(0.0);
    }
    if g.order() == 0 {
        return Ok(g.d.clone().singular_values().max());
    }
    let (_, grid_peak) = refined_peak_gain(g, 512)?;

    let settings = SolveSettings::default();
    let lo = grid_peak;
    let mut hi = grid_peak * (1.0 + 16.0 * tol) + 1e-9;
    let feasible = |gamma: f64| -> Result<bool> {
        let sol = sdp::solve(&bounded_real_feasibility(g, gamma), &settings)?;
        Ok(matches!(
            sol.status,
            sdp::SolveStatus::Feasible | sdp::SolveStatus::Optimal
        ))
    };
    let mut doublings = 0;
    while !feasible(hi)? {
        hi = hi * 2.0 + 1e-9;
        doublings += 1;
        if doublings > 64 {
            return Err(Error::Solver(
                "bounded-real LMI infeasible for every tried gamma on a stable system".into(),
            ));
        }
    }
    let gamma = sdp::bisect(
        |gamma| bounded_real_feasibility(g, gamma),
        lo,
        hi,
        tol,
        &settings,
    )?;
    Ok(gamma.max(grid_peak))
}

/// First-order highpass weighting filter from pole-zero matching.
///
/// The zero and pole are mapped via `z = exp(-2 pi f dt)` and the gain is
/// normalized to one at the Nyquist frequency, giving a magnitude response
/// that increases monotonically with frequency.
pub fn highpass_weight(f_zero_hz: f64, f_pole_hz: f64, dt: f64) -> Result<StateSpace> {
    let nyquist = 0.5 / dt;
    if !(f_zero_hz > 0.0 && f_zero_hz < f_pole_hz && f_pole_hz < nyquist) {
        return Err(Error::Frequency(format!(
            "require 0 < f_zero < f_pole < Nyquist ({nyquist} Hz); got zero {f_zero_hz} Hz, pole {f_pole_hz} Hz"
        )));
    }
    let z_zero = (-2.0 * std::f64::consts::PI * f_zero_hz * dt).exp();
    let z_pole = (-2.0 * std::f64::consts::PI * f_pole_hz * dt).exp();
    // W(z) = k (z - z_zero) / (z - z_pole), k chosen so |W(-1)| = 1.
    let k = (1.0 + z_pole) / (1.0 + z_zero);
    let a = DMatrix::from_element(1, 1, z_pole);
    let b = DMatrix::from_element(1, 1, 1.0);
    let c = DMatrix::from_element(1, 1, k * (z_pole - z_zero));
    let d = DMatrix::from_element(1, 1, k);
    StateSpace::new(a, b, c, d, dt)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::rngs::StdRng;
    use rand::{Rng, SeedableRng};

    fn scalar_system(a: f64, b: f64, c: f64, d: f64, dt: f64) -> StateSpace {
        StateSpace::new(
            DMatrix::from_element(1, 1, a),
            DMatrix::from_element(1, 1, b),
            DMatrix::from_element(1, 1, c),
            DMatrix::from_element(1, 1, d),
            dt,
        )
        .unwrap()
    }

    fn random_stable_system(rng: &mut StdRng, r: usize, n_in: usize, n_out: usize) -> StateSpace {
        loop {
            let a = DMatrix::from_fn(r, r, |_, _| rng.random_range(-1.0..1.0));
            let rho = spectral_radius(&a);
            if rho < 1e-6 {
                continue;
            }
            let a = a * (rng.random_range(0.3..0.95) / rho);
            let b = DMatrix::from_fn(r, n_in, |_, _| rng.random_range(-1.0..1.0));
            let c = DMatrix::from_fn(n_out, r, |_, _| rng.random_range(-1.0..1.0));
            let d = DMatrix::from_fn(n_out, n_in, |_, _| rng.random_range(-0.5..0.5));
            return StateSpace::new(a, b, c, d, 0.1).unwrap();
        }
    }

    #[test]
    fn scalar_delay_has_unit_response_everywhere() {
        // G(z) = 1/z
        let g = scalar_system(0.0, 1.0, 1.0, 0.0, 1.0);
        for theta in [0.0, 0.4, 1.2, std::f64::consts::PI] {
            assert_relative_eq!(freq_response_max_sv(&g, theta).unwrap(), 1.0, epsilon = 1e-12);
        }
    }

    #[test]
    fn static_system_response_is_max_sv_of_d() {
        let d = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 0.0, 3.0]);
        let g = StateSpace::new(
            DMatrix::zeros(0, 0),
            DMatrix::zeros(0, 2),
            DMatrix::zeros(2, 0),
            d.clone(),
            0.5,
        )
        .unwrap();
        let sv = d.singular_values()[0];
        for theta in [0.0, 1.0, 3.0] {
            assert_relative_eq!(freq_response_max_sv(&g, theta).unwrap(), sv, epsilon = 1e-12);
        }
    }

    #[test]
    fn scalar_lag_dc_gain() {
        let g = scalar_system(0.5, 1.0, 1.0, 0.0, 1.0);
        assert_relative_eq!(freq_response_max_sv(&g, 0.0).unwrap(), 2.0, epsilon = 1e-12);
    }

    #[test]
    fn spectral_radius_basics() {
        assert_relative_eq!(spectral_radius(&DMatrix::identity(3, 3)), 1.0, epsilon = 1e-12);
        let d = DMatrix::from_partial_diagonal(2, 2, &[0.3, -0.9]);
        assert_relative_eq!(spectral_radius(&d), 0.9, epsilon = 1e-12);
    }

    #[test]
    fn spectral_radius_companion_quadratic() {
        // Companion matrix of z^2 - z + 0.89; oracle: quadratic roots.
        let a = DMatrix::from_row_slice(2, 2, &[1.0, -0.89, 1.0, 0.0]);
        // roots: (1 +- sqrt(1 - 3.56))/2, complex pair with |z|^2 = 0.89
        let oracle = 0.89f64.sqrt();
        assert_relative_eq!(spectral_radius(&a), oracle, epsilon = 1e-10);
    }

    #[test]
    fn cascade_with_identity_weight_is_unchanged() {
        let mut rng = StdRng::seed_from_u64(7);
        let g = random_stable_system(&mut rng, 3, 2, 2);
        let w = StateSpace::identity(2, g.dt);
        let gc = cascade(&w, &g).unwrap();
        for i in 0..64 {
            let theta = std::f64::consts::PI * (i as f64) / 63.0;
            let t0 = g.transfer_at(theta).unwrap();
            let t1 = gc.transfer_at(theta).unwrap();
            assert!((t0 - t1).map(|v| v.norm()).max() < 1e-12);
        }
    }

    #[test]
    fn cascade_matches_pointwise_transfer_product() {
        // Oracle: evaluate both scalar transfer functions on a grid.
        let mut rng = StdRng::seed_from_u64(11);
        let g1 = random_stable_system(&mut rng, 3, 1, 1);
        let g2 = random_stable_system(&mut rng, 2, 1, 1);
        let gc = cascade(&g2, &g1).unwrap();
        for i in 0..64 {
            let theta = std::f64::consts::PI * (i as f64) / 63.0;
            let prod = g2.transfer_at(theta).unwrap()[(0, 0)] * g1.transfer_at(theta).unwrap()[(0, 0)];
            let got = gc.transfer_at(theta).unwrap()[(0, 0)];
            assert!((prod - got).norm() < 1e-10, "theta {theta}");
        }
    }

    #[test]
    fn cascade_dimension_mismatch() {
        let mut rng = StdRng::seed_from_u64(13);
        let g = random_stable_system(&mut rng, 2, 1, 2);
        let w = random_stable_system(&mut rng, 1, 1, 1);
        assert!(matches!(cascade(&w, &g), Err(Error::Dimension(_))));
    }

    #[test]
    fn cascade_associativity_on_transfer_grid() {
        let mut rng = StdRng::seed_from_u64(17);
        let g1 = random_stable_system(&mut rng, 2, 2, 2);
        let g2 = random_stable_system(&mut rng, 3, 2, 2);
        let g3 = random_stable_system(&mut rng, 2, 2, 2);
        let left = cascade(&cascade(&g1, &g2).unwrap(), &g3).unwrap();
        let right = cascade(&g1, &cascade(&g2, &g3).unwrap()).unwrap();
        for i in 0..64 {
            let theta = std::f64::consts::PI * (i as f64) / 63.0;
            let vl = freq_response_max_sv(&left, theta).unwrap();
            let vr = freq_response_max_sv(&right, theta).unwrap();
            assert_relative_eq!(vl, vr, epsilon = 1e-9, max_relative = 1e-9);
        }
    }

    #[test]
    fn hinf_norm_scalar_lag_is_two() {
        let g = scalar_system(0.5, 1.0, 1.0, 0.0, 1.0);
        let gamma = hinf_norm(&g, 1e-6).unwrap();
        assert_relative_eq!(gamma, 2.0, epsilon = 1e-5, max_relative = 1e-5);
    }

    #[test]
    fn hinf_norm_static_system() {
        let d = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 0.0, 3.0]);
        let g = StateSpace::new(
            DMatrix::zeros(0, 0),
            DMatrix::zeros(0, 2),
            DMatrix::zeros(2, 0),
            d.clone(),
            0.5,
        )
        .unwrap();
        assert_relative_eq!(
            hinf_norm(&g, 1e-8).unwrap(),
            d.singular_values()[0],
            epsilon = 1e-8
        );
    }

    #[test]
    fn hinf_norm_unstable_system_errors() {
        let g = scalar_system(1.05, 1.0, 1.0, 0.0, 1.0);
        assert!(matches!(hinf_norm(&g, 1e-6), Err(Error::UnstableSystem(_))));
    }

    #[test]
    fn hinf_norm_random_systems_vs_dense_grid() {
        // Oracle: dense frequency grid.
        let mut rng = StdRng::seed_from_u64(23);
        for _ in 0..5 {
            let g = random_stable_system(&mut rng, 5, 2, 2);
            let gamma = hinf_norm(&g, 1e-6).unwrap();
            let mut grid_max: f64 = 0.0;
            for i in 0..100_000 {
                let theta = std::f64::consts::PI * (i as f64) / 99_999.0;
                grid_max = grid_max.max(freq_response_max_sv(&g, theta).unwrap());
            }
            let rel = (gamma - grid_max).abs() / grid_max;
            assert!(rel < 1e-3, "gamma {gamma} vs grid {grid_max} rel {rel}");
            assert!(gamma >= grid_max - 1e-9);
        }
    }

    #[test]
    fn hinf_dominates_pointwise_response() {
        let mut rng = StdRng::seed_from_u64(29);
        let g = random_stable_system(&mut rng, 4, 2, 3);
        let gamma = hinf_norm(&g, 1e-6).unwrap();
        for i in 0..257 {
            let theta = std::f64::consts::PI * (i as f64) / 256.0;
            assert!(freq_response_max_sv(&g, theta).unwrap() <= gamma + 1e-9);
        }
    }

    #[test]
    fn highpass_weight_shape_and_normalization() {
        let w = highpass_weight(4.0, 5.7, 1.0 / 12.0).unwrap();
        let low = freq_response_max_sv(&w, 2.0 * std::f64::consts::PI * 0.1 * w.dt).unwrap();
        let high = freq_response_max_sv(&w, 2.0 * std::f64::consts::PI * 5.0 * w.dt).unwrap();
        assert!(low < high, "highpass: |W(0.1 Hz)| = {low} vs |W(5 Hz)| = {high}");
        let nyq = freq_response_max_sv(&w, std::f64::consts::PI).unwrap();
        assert_relative_eq!(nyq, 1.0, epsilon = 1e-12);
        // Monotone increase over the band.
        let mut prev = freq_response_max_sv(&w, 1e-3).unwrap();
        for i in 1..200 {
            let theta = 1e-3 + (std::f64::consts::PI - 2e-3) * (i as f64) / 199.0;
            let v = freq_response_max_sv(&w, theta).unwrap();
            assert!(v >= prev - 1e-12);
            prev = v;
        }
    }

    #[test]
    fn highpass_weight_rejects_bad_frequencies() {
        assert!(matches!(
            highpass_weight(4.0, 4.0, 1.0 / 12.0),
            Err(Error::Frequency(_))
        ));
        assert!(matches!(
            highpass_weight(4.0, 7.0, 1.0 / 12.0),
            Err(Error::Frequency(_))
        ));
    }

    #[test]
    fn replicate_diag_preserves_scalar_response() {
        let w = highpass_weight(1.0, 2.0, 0.05).unwrap();
        let w3 = w.replicate_diag(3);
        assert_eq!(w3.n_inputs(), 3);
        for theta in [0.1, 0.7, 2.0] {
            assert_relative_eq!(
                freq_response_max_sv(&w3, theta).unwrap(),
                freq_response_max_sv(&w, theta).unwrap(),
                epsilon = 1e-12
            );
        }
    }

    #[test]
    fn hinf_finite_iff_stable() {
        // Stable: finite norm; marginally unstable variant errors out.
        let stable = scalar_system(0.9, 1.0, 1.0, 0.0, 1.0);
        assert!(hinf_norm(&stable, 1e-6).unwrap().is_finite());
        let unstable = scalar_system(1.0, 1.0, 1.0, 0.0, 1.0);
        assert!(hinf_norm(&unstable, 1e-6).is_err());
    }
}
