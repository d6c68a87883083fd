//! Model evaluation: recover-and-relift multi-step prediction, error metrics,
//! stability/conditioning reports, and Bode data.

use crate::error::{Error, Result};
use crate::lti;
use crate::regressors::{Basis, KoopmanModel};
use crate::snapshots::Episode;
use nalgebra::{DMatrix, DVector};

/// Any predicted state entry beyond this magnitude marks the run diverged.
pub const DIVERGENCE_THRESHOLD: f64 = 1e10;

/// Multi-step prediction against a recorded episode.
#[derive(Debug, Clone, PartialEq)]
pub struct PredictionResult {
    /// `m x T`; the first `max_delay` columns are copied from the truth as
    /// warm-up samples.
    pub predicted: DMatrix<f64>,
    pub truth: DMatrix<f64>,
    /// Euclidean error per step, length `T`.
    pub per_step_error: Vec<f64>,
    /// Root-mean-square of the per-step errors.
    pub rms_error: f64,
    /// Set when any predicted entry exceeds [`DIVERGENCE_THRESHOLD`];
    /// prediction freezes at the diverged value instead of overflowing.
    pub diverged: bool,
}

/// Simulate the model along an episode: lift the current predicted state
/// (with the recorded input and predicted-state history), advance by the
/// Koopman matrix, retract, repeat. Inputs are always the recorded ones; the
/// first `max_delay + 1` states are seeded from the episode.
pub fn predict_multistep(model: &KoopmanModel, episode: &Episode) -> Result<PredictionResult> {
    let pipeline = model
        .pipeline
        .as_ref()
        .ok_or_else(|| Error::State("model carries no lifting pipeline".into()))?;
    if !pipeline.is_fitted() {
        return Err(Error::State("model pipeline is not fitted".into()));
    }
    let m = pipeline.n_states();
    let n = pipeline.n_inputs();
    if episode.states.nrows() != m || episode.inputs.nrows() != n {
        return Err(Error::Dimension(format!(
            "episode has {} states / {} inputs, model expects {m} / {n}",
            episode.states.nrows(),
            episode.inputs.nrows()
        )));
    }
    let t_len = episode.len();
    let d = pipeline.max_delay();
    if t_len < d + 2 {
        return Err(Error::History(format!(
            "episode too short: {t_len} samples for delay horizon {d}"
        )));
    }

    let mut predicted = DMatrix::zeros(m, t_len);
    for k in 0..=d {
        predicted.set_column(k, &episode.states.column(k));
    }
    let mut diverged = false;
    let mut frozen: Option<DVector<f64>> = None;

    for k in d..t_len - 1 {
        if let Some(v) = &frozen {
            predicted.set_column(k + 1, v);
            continue;
        }
        let x = predicted.column(k).into_owned();
        let u = episode.inputs.column(k).into_owned();
        let hist_states = predicted.columns(0, k).into_owned();
        let hist_inputs = episode.inputs.columns(0, k).into_owned();
        let psi = pipeline.lift(&x, &u, &hist_states, &hist_inputs)?;
        let p_theta = pipeline.p_theta();
        let theta_next = match &model.basis {
            Basis::Full => {
                &model.u * DMatrix::from_column_slice(psi.len(), 1, psi.as_slice())
            }
            Basis::Reduced { q_hat } => {
                let r_hat = q_hat.ncols();
                let p_upsilon = psi.len() - p_theta;
                let mut psi_hat = DMatrix::zeros(r_hat + p_upsilon, 1);
                psi_hat
                    .view_mut((0, 0), (r_hat, 1))
                    .copy_from(&(q_hat.transpose() * psi.rows(0, p_theta)));
                psi_hat
                    .view_mut((r_hat, 0), (p_upsilon, 1))
                    .copy_from(&psi.rows(p_theta, p_upsilon));
                q_hat * (&model.u * psi_hat)
            }
        };
        let x_next = pipeline.retract(&DVector::from_column_slice(theta_next.column(0).as_slice()))?;
        predicted.set_column(k + 1, &x_next);
        if x_next.iter().any(|v| v.abs() > DIVERGENCE_THRESHOLD || !v.is_finite()) {
            diverged = true;
            frozen = Some(x_next);
        }
    }

    let truth = episode.states.clone();
    let mut per_step_error = Vec::with_capacity(t_len);
    for k in 0..t_len {
        per_step_error.push((predicted.column(k) - truth.column(k)).norm());
    }
    let rms_error =
        (per_step_error.iter().map(|e| e * e).sum::<f64>() / t_len as f64).sqrt();
    Ok(PredictionResult {
        predicted,
        truth,
        per_step_error,
        rms_error,
        diverged,
    })
}

/// Eigenstructure, singular values, conditioning and the stability verdict
/// of a model.
#[derive(Debug, Clone)]
pub struct StabilityConditioningReport {
    /// Eigenvalues of `A` as (re, im) pairs.
    pub eigenvalues: Vec<(f64, f64)>,
    pub spectral_radius: f64,
    pub singular_values_a: Vec<f64>,
    pub singular_values_b: Vec<f64>,
    /// `sigma_max / sigma_min`; infinite when `sigma_min = 0`.
    pub cond_a: f64,
    pub cond_b: f64,
    /// `spectral_radius < 1 - 1e-9`.
    pub asymptotically_stable: bool,
}

fn cond_of(sv: &[f64]) -> f64 {
    let max = sv.iter().copied().fold(0.0f64, f64::max);
    let min = sv.iter().copied().fold(f64::INFINITY, f64::min);
    if min <= 0.0 {
        f64::INFINITY
    } else {
        max / min
    }
}

pub fn model_report(model: &KoopmanModel) -> StabilityConditioningReport {
    let a = model.a();
    let b = model.b();
    let eig = a.complex_eigenvalues();
    let eigenvalues: Vec<(f64, f64)> = eig.iter().map(|l| (l.re, l.im)).collect();
    let spectral_radius = eig.iter().map(|l| l.norm()).fold(0.0, f64::max);
    let singular_values_a: Vec<f64> = a.svd(false, false).singular_values.iter().copied().collect();
    let singular_values_b: Vec<f64> = if b.ncols() == 0 {
        Vec::new()
    } else {
        b.svd(false, false).singular_values.iter().copied().collect()
    };
    StabilityConditioningReport {
        cond_a: cond_of(&singular_values_a),
        cond_b: cond_of(&singular_values_b),
        eigenvalues,
        spectral_radius,
        singular_values_a,
        singular_values_b,
        asymptotically_stable: spectral_radius < 1.0 - 1e-9,
    }
}

/// One Bode sample; `max_sv` is `None` where the response is undefined
/// (pole on the unit circle at that frequency).
#[derive(Debug, Clone, Copy)]
pub struct BodePoint {
    pub freq_hz: f64,
    pub max_sv: Option<f64>,
}

/// Maximum singular value of the model's transfer matrix on `n_points`
/// log-spaced frequencies spanning three decades up to `f_max` (at most the
/// Nyquist frequency).
pub fn bode_data(model: &KoopmanModel, n_points: usize, f_max: f64) -> Result<Vec<BodePoint>> {
    let ss = model.state_space()?;
    let nyquist = ss.nyquist_hz();
    if !(f_max > 0.0 && f_max <= nyquist * (1.0 + 1e-12)) {
        return Err(Error::Frequency(format!(
            "f_max must lie in (0, {nyquist}], got {f_max}"
        )));
    }
    let n = n_points.max(2);
    let f_min = f_max * 1e-3;
    let log_lo = f_min.log10();
    let log_hi = f_max.log10();
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        let f = 10f64.powf(log_lo + (log_hi - log_lo) * i as f64 / (n - 1) as f64);
        let theta = 2.0 * std::f64::consts::PI * f * ss.dt;
        let max_sv = lti::freq_response_max_sv(&ss, theta).ok();
        out.push(BodePoint { freq_hz: f, max_sv });
    }
    Ok(out)
}

/// Per-model summary over a set of test episodes.
#[derive(Debug, Clone)]
pub struct ComparisonRow {
    pub name: String,
    pub mean_rms: f64,
    /// Population standard deviation of the RMS errors across episodes.
    pub std_rms: f64,
    pub any_diverged: bool,
}

/// Mean and standard deviation of RMS prediction error per model across
/// episodes.
pub fn compare_models(
    models: &[(String, &KoopmanModel)],
    episodes: &[Episode],
) -> Result<Vec<ComparisonRow>> {
    if models.is_empty() || episodes.is_empty() {
        return Err(Error::Config(
            "compare_models needs at least one model and one episode".into(),
        ));
    }
    let mut rows = Vec::with_capacity(models.len());
    for (name, model) in models {
        let mut rms = Vec::with_capacity(episodes.len());
        let mut any_diverged = false;
        for ep in episodes {
            let result = predict_multistep(model, ep)?;
            rms.push(result.rms_error);
            any_diverged |= result.diverged;
        }
        let mean = rms.iter().sum::<f64>() / rms.len() as f64;
        let var = rms.iter().map(|r| (r - mean) * (r - mean)).sum::<f64>() / rms.len() as f64;
        rows.push(ComparisonRow {
            name: name.clone(),
            mean_rms: mean,
            std_rms: var.sqrt(),
            any_diverged,
        });
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dmdc::{dmdc_closed_form, full_rank_til};
    use crate::lifting::{LiftingPipeline, StageSpec};
    use crate::regressors::{edmd_closed_form, FitMeta};
    use crate::snapshots::{build_snapshots, Dataset};
    use approx::assert_relative_eq;

    fn linear_dataset(a00: f64, t_len: usize) -> Dataset {
        // x_{k+1} = a00 x_k + 0.1 u_k
        let mut states = DMatrix::zeros(1, t_len);
        let mut inputs = DMatrix::zeros(1, t_len);
        let mut x = 1.0f64;
        for k in 0..t_len {
            states[(0, k)] = x;
            let u = (0.37 * k as f64).sin();
            inputs[(0, k)] = u;
            x = a00 * x + 0.1 * u;
        }
        Dataset::new(vec![Episode::new(0, 0.1, states, inputs).unwrap()]).unwrap()
    }

    fn fitted_model(ds: &Dataset) -> KoopmanModel {
        let pipeline = LiftingPipeline::identity().fit(ds).unwrap();
        let snap = build_snapshots(ds, &pipeline).unwrap();
        edmd_closed_form(&snap).with_pipeline(pipeline)
    }

    #[test]
    fn exact_model_tracks_for_hundred_steps() {
        let ds = linear_dataset(0.95, 101);
        let model = fitted_model(&ds);
        let result = predict_multistep(&model, &ds.episodes[0]).unwrap();
        assert!(!result.diverged);
        for (k, e) in result.per_step_error.iter().enumerate() {
            assert!(*e < 1e-8, "step {k} error {e}");
        }
    }

    #[test]
    fn unstable_model_sets_diverged_flag() {
        let ds = linear_dataset(0.95, 60);
        let mut model = fitted_model(&ds);
        // Overwrite with an unstable A.
        model.u[(0, 0)] = 1.6;
        let mut long_states = DMatrix::zeros(1, 200);
        let long_inputs = DMatrix::zeros(1, 200);
        long_states[(0, 0)] = 1.0;
        let episode = Episode::new(9, 0.1, long_states, long_inputs).unwrap();
        let result = predict_multistep(&model, &episode).unwrap();
        assert!(result.diverged);
        assert!(result.predicted.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn rms_is_consistent_with_per_step_errors() {
        let ds = linear_dataset(0.9, 50);
        let mut model = fitted_model(&ds);
        model.u[(0, 0)] += 0.02; // imperfect model -> nonzero errors
        let result = predict_multistep(&model, &ds.episodes[0]).unwrap();
        let t = result.per_step_error.len() as f64;
        let sum_sq: f64 = result.per_step_error.iter().map(|e| e * e).sum();
        assert_relative_eq!(result.rms_error * result.rms_error * t, sum_sq, epsilon = 1e-12);
    }

    #[test]
    fn prediction_is_deterministic() {
        let ds = linear_dataset(0.9, 50);
        let model = fitted_model(&ds);
        let a = predict_multistep(&model, &ds.episodes[0]).unwrap();
        let b = predict_multistep(&model, &ds.episodes[0]).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn delay_pipeline_prediction_uses_true_seed() {
        let ds = linear_dataset(0.9, 50);
        let pipeline = LiftingPipeline::new(vec![StageSpec::Delay { steps: 2 }])
            .unwrap()
            .fit(&ds)
            .unwrap();
        let snap = build_snapshots(&ds, &pipeline).unwrap();
        let model = edmd_closed_form(&snap).with_pipeline(pipeline);
        let result = predict_multistep(&model, &ds.episodes[0]).unwrap();
        // Warm-up columns are the truth itself.
        for k in 0..=2 {
            assert_eq!(result.per_step_error[k], 0.0);
        }
        assert!(result.per_step_error.iter().all(|e| *e < 1e-7));
    }

    #[test]
    fn reduced_and_full_predictions_agree_at_full_rank() {
        let ds = linear_dataset(0.9, 60);
        let pipeline = LiftingPipeline::identity().fit(&ds).unwrap();
        let snap = build_snapshots(&ds, &pipeline).unwrap();
        let full = edmd_closed_form(&snap).with_pipeline(pipeline.clone());
        let reduced = dmdc_closed_form(&snap, 1, full_rank_til(&snap))
            .unwrap()
            .with_pipeline(pipeline);
        let rf = predict_multistep(&full, &ds.episodes[0]).unwrap();
        let rr = predict_multistep(&reduced, &ds.episodes[0]).unwrap();
        let diff = (&rf.predicted - &rr.predicted).abs().max();
        assert!(diff < 1e-8, "diff {diff}");
    }

    #[test]
    fn report_on_scaled_identity() {
        let u = DMatrix::from_fn(3, 4, |i, j| {
            if j < 3 {
                if i == j {
                    0.5
                } else {
                    0.0
                }
            } else if i == 0 {
                1.0
            } else {
                0.0
            }
        });
        let model = KoopmanModel::new_full(u, 3, 0.1, FitMeta::default());
        let report = model_report(&model);
        assert_relative_eq!(report.spectral_radius, 0.5, epsilon = 1e-12);
        assert_relative_eq!(report.cond_a, 1.0, epsilon = 1e-12);
        assert!(report.asymptotically_stable);
    }

    #[test]
    fn report_flags_unstable_matrix() {
        let mut u = DMatrix::zeros(2, 2);
        u[(0, 0)] = 1.2;
        u[(1, 1)] = 0.1;
        let model = KoopmanModel::new_full(u, 2, 0.1, FitMeta::default());
        let report = model_report(&model);
        assert!(!report.asymptotically_stable);
        assert_relative_eq!(report.spectral_radius, 1.2, epsilon = 1e-12);
    }

    #[test]
    fn bode_of_scalar_lag_decreases_from_dc_gain() {
        // A = 0.5, B = C = 1: DC gain 1/(1 - 0.5) = 2, monotone decreasing.
        let u = DMatrix::from_row_slice(1, 2, &[0.5, 1.0]);
        let model = KoopmanModel::new_full(u, 1, 0.1, FitMeta::default());
        let points = bode_data(&model, 64, 4.9).unwrap();
        let values: Vec<f64> = points.iter().map(|p| p.max_sv.unwrap()).collect();
        assert!((values[0] - 2.0).abs() < 1e-2, "dc value {}", values[0]);
        for w in values.windows(2) {
            assert!(w[1] <= w[0] + 1e-12);
        }
    }

    #[test]
    fn bode_of_feedthrough_only_model_is_flat() {
        let u = DMatrix::zeros(1, 2);
        let model = KoopmanModel::new_full(u, 1, 0.1, FitMeta::default())
            .with_output_maps(
                DMatrix::zeros(1, 1),
                DMatrix::from_element(1, 1, 3.0),
            )
            .unwrap();
        let points = bode_data(&model, 16, 5.0).unwrap();
        for p in points {
            assert_relative_eq!(p.max_sv.unwrap(), 3.0, epsilon = 1e-12);
        }
    }

    #[test]
    fn bode_max_is_bounded_by_hinf_norm() {
        let ds = linear_dataset(0.8, 80);
        let model = fitted_model(&ds);
        let norm = crate::lti::hinf_norm(&model.state_space().unwrap(), 1e-6).unwrap();
        let points = bode_data(&model, 128, 4.99).unwrap();
        for p in points {
            let v = p.max_sv.unwrap();
            assert!(v <= norm + 1e-6 * (1.0 + norm), "{v} > {norm}");
        }
    }

    #[test]
    fn comparison_single_model_single_episode_has_zero_std() {
        let ds = linear_dataset(0.9, 50);
        let model = fitted_model(&ds);
        let rows = compare_models(
            &[("edmd".to_string(), &model)],
            &ds.episodes,
        )
        .unwrap();
        assert_eq!(rows.len(), 1);
        assert_eq!(rows[0].std_rms, 0.0);
    }

    #[test]
    fn comparison_identical_models_give_identical_rows() {
        let ds = linear_dataset(0.9, 50);
        let model = fitted_model(&ds);
        let rows = compare_models(
            &[("a".to_string(), &model), ("b".to_string(), &model)],
            &ds.episodes,
        )
        .unwrap();
        assert_eq!(rows[0].mean_rms, rows[1].mean_rms);
        assert_eq!(rows[0].std_rms, rows[1].std_rms);
    }

    #[test]
    fn too_short_episode_is_history_error() {
        let ds = linear_dataset(0.9, 50);
        let pipeline = LiftingPipeline::new(vec![StageSpec::Delay { steps: 3 }])
            .unwrap()
            .fit(&ds)
            .unwrap();
        let snap = build_snapshots(&ds, &pipeline).unwrap();
        let model = edmd_closed_form(&snap).with_pipeline(pipeline);
        let short = Episode::new(
            5,
            0.1,
            DMatrix::zeros(1, 4),
            DMatrix::zeros(1, 4),
        )
        .unwrap();
        assert!(matches!(
            predict_multistep(&model, &short),
            Err(Error::History(_))
        ));
    }
}
