//! Fittable lifting pipelines mapping `(x, u)` to the lifted vector
//! `psi = [theta; upsilon]`, and the retraction back to the state.
//!
//! Feature ordering is fixed: raw current states first, then delayed states,
//! then higher-order monomials in graded lexicographic order; the input block
//! follows the same pattern for input-dependent features. Retraction is
//! therefore a fixed slice of the state block plus an affine inverse.

use crate::error::{Error, Result};
use crate::snapshots::{Dataset, Episode};
use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

/// Specification of one pipeline stage.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum StageSpec {
    /// No-op.
    Identity,
    /// Per-channel max-abs scaling into `[-1, 1]`, fitted on training data.
    Normalize,
    /// Augment states and inputs with versions delayed by `1..=steps`.
    Delay { steps: usize },
    /// All monomials of degree `1..=max_order`. State-only monomials form the
    /// state block; monomials involving at least one input channel form the
    /// input block.
    Monomial { max_order: usize },
    /// Bilinear input lift `upsilon = [u (x) theta; u]` (Kronecker product).
    BilinearInput,
    /// Per-feature zero-mean unit-variance affine map, fitted on training
    /// data (population standard deviation).
    Standardize,
}

impl StageSpec {
    fn validate(&self) -> Result<()> {
        match self {
            StageSpec::Delay { steps } if *steps == 0 => {
                Err(Error::Config("delay stage requires steps >= 1".into()))
            }
            StageSpec::Monomial { max_order } if *max_order == 0 => {
                Err(Error::Config("monomial stage requires max_order >= 1".into()))
            }
            _ => Ok(()),
        }
    }
}

/// Fitted per-stage parameters.
#[derive(Debug, Clone, Serialize, Deserialize)]
enum FittedStage {
    Identity,
    Normalize {
        state_scales: Vec<f64>,
        input_scales: Vec<f64>,
    },
    Delay {
        steps: usize,
    },
    Monomial {
        max_order: usize,
    },
    BilinearInput,
    Standardize {
        state_means: Vec<f64>,
        state_stds: Vec<f64>,
        input_means: Vec<f64>,
        input_stds: Vec<f64>,
    },
}

/// Time-aligned state-block and input-block features of one episode.
#[derive(Debug, Clone)]
struct Blocks {
    /// State-dependent features, one column per sample.
    s: DMatrix<f64>,
    /// Input-dependent features, one column per sample.
    i: DMatrix<f64>,
}

/// Lifted features of an episode. Column `k` corresponds to original sample
/// `k + start`.
#[derive(Debug, Clone)]
pub struct LiftedEpisode {
    pub theta: DMatrix<f64>,
    pub upsilon: DMatrix<f64>,
    /// Number of leading samples consumed by delay stages.
    pub start: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Fitted {
    stages: Vec<FittedStage>,
    m: usize,
    n: usize,
    p_theta: usize,
    p_upsilon: usize,
    max_delay: usize,
    /// Affine map `theta_i = a_i x_i + b_i` of the first `m` state features.
    retract_scale: Vec<f64>,
    retract_offset: Vec<f64>,
    /// Human-readable feature names, documenting the fixed ordering.
    theta_names: Vec<String>,
    upsilon_names: Vec<String>,
}

/// Ordered, fittable lifting stages mapping `(x, u)` to `psi` and back.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LiftingPipeline {
    specs: Vec<StageSpec>,
    fitted: Option<Fitted>,
}

impl LiftingPipeline {
    /// A pipeline from stage specifications; must be fitted before use.
    /// An empty stage list is the identity embedding `psi = [x; u]`.
    pub fn new(specs: Vec<StageSpec>) -> Result<Self> {
        for s in &specs {
            s.validate()?;
        }
        Ok(Self {
            specs,
            fitted: None,
        })
    }

    /// The raw identity embedding.
    pub fn identity() -> Self {
        Self {
            specs: Vec::new(),
            fitted: None,
        }
    }

    pub fn specs(&self) -> &[StageSpec] {
        &self.specs
    }

    pub fn is_fitted(&self) -> bool {
        self.fitted.is_some()
    }

    fn fitted(&self) -> Result<&Fitted> {
        self.fitted
            .as_ref()
            .ok_or_else(|| Error::State("lifting pipeline is not fitted".into()))
    }

    pub fn p_theta(&self) -> usize {
        self.fitted.as_ref().map_or(0, |f| f.p_theta)
    }

    pub fn p_upsilon(&self) -> usize {
        self.fitted.as_ref().map_or(0, |f| f.p_upsilon)
    }

    pub fn p(&self) -> usize {
        self.p_theta() + self.p_upsilon()
    }

    /// State dimension expected by `lift`.
    pub fn n_states(&self) -> usize {
        self.fitted.as_ref().map_or(0, |f| f.m)
    }

    /// Input dimension expected by `lift`.
    pub fn n_inputs(&self) -> usize {
        self.fitted.as_ref().map_or(0, |f| f.n)
    }

    /// Total delay horizon (samples of history needed by `lift`).
    pub fn max_delay(&self) -> usize {
        self.fitted.as_ref().map_or(0, |f| f.max_delay)
    }

    /// Names of the state-block features, in order.
    pub fn theta_feature_names(&self) -> &[String] {
        self.fitted.as_ref().map_or(&[], |f| &f.theta_names)
    }

    /// Names of the input-block features, in order.
    pub fn upsilon_feature_names(&self) -> &[String] {
        self.fitted.as_ref().map_or(&[], |f| &f.upsilon_names)
    }

    /// Estimate all stage parameters from the dataset and return the fitted
    /// pipeline.
    pub fn fit(mut self, dataset: &Dataset) -> Result<Self> {
        if dataset.episodes.is_empty() {
            return Err(Error::Data("cannot fit a lifting pipeline on an empty dataset".into()));
        }
        let m = dataset.n_states();
        let n = dataset.n_inputs();
        let mut blocks: Vec<Blocks> = dataset
            .episodes
            .iter()
            .map(|ep| Blocks {
                s: ep.states.clone(),
                i: ep.inputs.clone(),
            })
            .collect();
        let mut state_names: Vec<String> = (0..m).map(|i| format!("x{i}")).collect();
        let mut input_names: Vec<String> = (0..n).map(|i| format!("u{i}")).collect();
        let mut retract_scale = vec![1.0; m];
        let mut retract_offset = vec![0.0; m];
        let mut max_delay = 0usize;
        let mut stages = Vec::with_capacity(self.specs.len());

        for spec in &self.specs {
            let stage = match spec {
                StageSpec::Identity => FittedStage::Identity,
                StageSpec::Normalize => {
                    let fit_scales = |rows: usize,
                                      pick: &dyn Fn(&Blocks) -> &DMatrix<f64>,
                                      names: &[String]|
                     -> Result<Vec<f64>> {
                        let mut scales = Vec::with_capacity(rows);
                        for r in 0..rows {
                            let mut max_abs = 0.0f64;
                            for b in &blocks {
                                for k in 0..pick(b).ncols() {
                                    max_abs = max_abs.max(pick(b)[(r, k)].abs());
                                }
                            }
                            if max_abs < 1e-300 {
                                return Err(Error::DegenerateFeature(format!(
                                    "channel '{}' is identically zero, cannot normalize",
                                    names[r]
                                )));
                            }
                            scales.push(1.0 / max_abs);
                        }
                        Ok(scales)
                    };
                    let state_scales =
                        fit_scales(blocks[0].s.nrows(), &|b| &b.s, &state_names)?;
                    let input_scales =
                        fit_scales(blocks[0].i.nrows(), &|b| &b.i, &input_names)?;
                    FittedStage::Normalize {
                        state_scales,
                        input_scales,
                    }
                }
                StageSpec::Delay { steps } => {
                    max_delay += steps;
                    FittedStage::Delay { steps: *steps }
                }
                StageSpec::Monomial { max_order } => FittedStage::Monomial {
                    max_order: *max_order,
                },
                StageSpec::BilinearInput => FittedStage::BilinearInput,
                StageSpec::Standardize => {
                    let fit_stats = |rows: usize,
                                     pick: &dyn Fn(&Blocks) -> &DMatrix<f64>,
                                     names: &[String]|
                     -> Result<(Vec<f64>, Vec<f64>)> {
                        let mut means = Vec::with_capacity(rows);
                        let mut stds = Vec::with_capacity(rows);
                        for r in 0..rows {
                            let mut sum = 0.0;
                            let mut count = 0usize;
                            for b in &blocks {
                                for k in 0..pick(b).ncols() {
                                    sum += pick(b)[(r, k)];
                                    count += 1;
                                }
                            }
                            if count == 0 {
                                return Err(Error::Data("no samples left to standardize".into()));
                            }
                            let mean = sum / count as f64;
                            let mut var = 0.0;
                            for b in &blocks {
                                for k in 0..pick(b).ncols() {
                                    let d = pick(b)[(r, k)] - mean;
                                    var += d * d;
                                }
                            }
                            let std = (var / count as f64).sqrt();
                            if std < 1e-12 {
                                return Err(Error::DegenerateFeature(format!(
                                    "feature '{}' has zero variance (sigma = {std:.3e})",
                                    names[r]
                                )));
                            }
                            means.push(mean);
                            stds.push(std);
                        }
                        Ok((means, stds))
                    };
                    let (state_means, state_stds) =
                        fit_stats(blocks[0].s.nrows(), &|b| &b.s, &state_names)?;
                    let (input_means, input_stds) =
                        fit_stats(blocks[0].i.nrows(), &|b| &b.i, &input_names)?;
                    FittedStage::Standardize {
                        state_means,
                        state_stds,
                        input_means,
                        input_stds,
                    }
                }
            };

            apply_stage_names(&stage, &mut state_names, &mut input_names);
            update_retract(&stage, m, &mut retract_scale, &mut retract_offset);
            let mut any = false;
            for b in &mut blocks {
                *b = apply_stage(&stage, b)?;
                if b.s.ncols() > 0 {
                    any = true;
                }
            }
            if !any {
                return Err(Error::Data(
                    "all episodes are shorter than the delay horizon".into(),
                ));
            }
            stages.push(stage);
        }

        let p_theta = blocks[0].s.nrows();
        let p_upsilon = blocks[0].i.nrows();
        self.fitted = Some(Fitted {
            stages,
            m,
            n,
            p_theta,
            p_upsilon,
            max_delay,
            retract_scale,
            retract_offset,
            theta_names: state_names,
            upsilon_names: input_names,
        });
        Ok(self)
    }

    /// Lift a whole episode; columns of the result correspond to samples
    /// `start..T-1` of the episode.
    pub fn apply_episode(&self, episode: &Episode) -> Result<LiftedEpisode> {
        let f = self.fitted()?;
        if episode.states.nrows() != f.m || episode.inputs.nrows() != f.n {
            return Err(Error::Dimension(format!(
                "episode has {} states / {} inputs, pipeline fitted for {} / {}",
                episode.states.nrows(),
                episode.inputs.nrows(),
                f.m,
                f.n
            )));
        }
        let (theta, upsilon) = self.apply_matrices(&episode.states, &episode.inputs)?;
        Ok(LiftedEpisode {
            theta,
            upsilon,
            start: f.max_delay,
        })
    }

    fn apply_matrices(
        &self,
        states: &DMatrix<f64>,
        inputs: &DMatrix<f64>,
    ) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
        let f = self.fitted()?;
        let mut b = Blocks {
            s: states.clone(),
            i: inputs.clone(),
        };
        for stage in &f.stages {
            b = apply_stage(stage, &b)?;
        }
        Ok((b.s, b.i))
    }

    /// Lift one sample. `history_*` hold the most recent raw samples as
    /// columns, oldest first; at least `max_delay` columns are required.
    pub fn lift(
        &self,
        x: &DVector<f64>,
        u: &DVector<f64>,
        history_states: &DMatrix<f64>,
        history_inputs: &DMatrix<f64>,
    ) -> Result<DVector<f64>> {
        let f = self.fitted()?;
        let d = f.max_delay;
        if history_states.ncols() < d || history_inputs.ncols() < d {
            return Err(Error::History(format!(
                "need {d} history sample(s), got {}",
                history_states.ncols().min(history_inputs.ncols())
            )));
        }
        let mut s = DMatrix::zeros(f.m, d + 1);
        let mut i = DMatrix::zeros(f.n, d + 1);
        for k in 0..d {
            s.set_column(k, &history_states.column(history_states.ncols() - d + k));
            i.set_column(k, &history_inputs.column(history_inputs.ncols() - d + k));
        }
        s.set_column(d, x);
        i.set_column(d, u);
        let (theta, ups) = self.apply_matrices(&s, &i)?;
        debug_assert_eq!(theta.ncols(), 1);
        let mut psi = DVector::zeros(f.p_theta + f.p_upsilon);
        psi.rows_mut(0, f.p_theta).copy_from(&theta.column(0));
        psi.rows_mut(f.p_theta, f.p_upsilon)
            .copy_from(&ups.column(0));
        Ok(psi)
    }

    /// Recover the state from the state-dependent block of a lifted vector by
    /// inverting the affine maps on the raw-state features; higher-order
    /// features are ignored.
    pub fn retract(&self, theta: &DVector<f64>) -> Result<DVector<f64>> {
        let f = self.fitted()?;
        if theta.len() != f.p_theta || f.p_theta < f.m {
            return Err(Error::Retract(format!(
                "lifted vector of length {} does not carry the raw-state block (p_theta = {}, m = {})",
                theta.len(),
                f.p_theta,
                f.m
            )));
        }
        let mut x = DVector::zeros(f.m);
        for idx in 0..f.m {
            x[idx] = (theta[idx] - f.retract_offset[idx]) / f.retract_scale[idx];
        }
        Ok(x)
    }
}

fn update_retract(stage: &FittedStage, m: usize, scale: &mut [f64], offset: &mut [f64]) {
    match stage {
        FittedStage::Normalize { state_scales, .. } => {
            for idx in 0..m {
                scale[idx] *= state_scales[idx];
                offset[idx] *= state_scales[idx];
            }
        }
        FittedStage::Standardize {
            state_means,
            state_stds,
            ..
        } => {
            for idx in 0..m {
                scale[idx] /= state_stds[idx];
                offset[idx] = (offset[idx] - state_means[idx]) / state_stds[idx];
            }
        }
        _ => {}
    }
}

fn apply_stage_names(stage: &FittedStage, state_names: &mut Vec<String>, input_names: &mut Vec<String>) {
    match stage {
        FittedStage::Identity | FittedStage::Normalize { .. } | FittedStage::Standardize { .. } => {}
        FittedStage::Delay { steps } => {
            let base_s = state_names.clone();
            let base_i = input_names.clone();
            for lag in 1..=*steps {
                state_names.extend(base_s.iter().map(|n| format!("{n}[k-{lag}]")));
                input_names.extend(base_i.iter().map(|n| format!("{n}[k-{lag}]")));
            }
        }
        FittedStage::Monomial { max_order } => {
            let s_dim = state_names.len();
            let all_names: Vec<String> = state_names
                .iter()
                .chain(input_names.iter())
                .cloned()
                .collect();
            let state_monos = enumerate_monomials(s_dim, *max_order);
            *state_names = state_monos
                .iter()
                .map(|m| monomial_name(m, &all_names))
                .collect();
            let mixed = enumerate_mixed_monomials(s_dim, all_names.len(), *max_order);
            *input_names = mixed
                .iter()
                .map(|m| monomial_name(m, &all_names))
                .collect();
        }
        FittedStage::BilinearInput => {
            let mut new_inputs = Vec::new();
            for ui in input_names.iter() {
                for si in state_names.iter() {
                    new_inputs.push(format!("{ui}*{si}"));
                }
            }
            new_inputs.extend(input_names.iter().cloned());
            *input_names = new_inputs;
        }
    }
}

fn apply_stage(stage: &FittedStage, b: &Blocks) -> Result<Blocks> {
    let t = b.s.ncols();
    Ok(match stage {
        FittedStage::Identity => b.clone(),
        FittedStage::Normalize {
            state_scales,
            input_scales,
        } => {
            let mut s = b.s.clone();
            let mut i = b.i.clone();
            for (r, sc) in state_scales.iter().enumerate() {
                for k in 0..t {
                    s[(r, k)] *= sc;
                }
            }
            for (r, sc) in input_scales.iter().enumerate() {
                for k in 0..t {
                    i[(r, k)] *= sc;
                }
            }
            Blocks { s, i }
        }
        FittedStage::Delay { steps } => {
            let d = *steps;
            if t < d + 1 {
                return Ok(Blocks {
                    s: DMatrix::zeros(b.s.nrows() * (d + 1), 0),
                    i: DMatrix::zeros(b.i.nrows() * (d + 1), 0),
                });
            }
            let t_new = t - d;
            let stack = |m: &DMatrix<f64>| -> DMatrix<f64> {
                let rows = m.nrows();
                let mut out = DMatrix::zeros(rows * (d + 1), t_new);
                for lag in 0..=d {
                    out.view_mut((lag * rows, 0), (rows, t_new))
                        .copy_from(&m.columns(d - lag, t_new));
                }
                out
            };
            Blocks {
                s: stack(&b.s),
                i: stack(&b.i),
            }
        }
        FittedStage::Monomial { max_order } => {
            let s_dim = b.s.nrows();
            let i_dim = b.i.nrows();
            let state_monos = enumerate_monomials(s_dim, *max_order);
            let mixed = enumerate_mixed_monomials(s_dim, s_dim + i_dim, *max_order);
            let channel = |r: usize, k: usize| -> f64 {
                if r < s_dim {
                    b.s[(r, k)]
                } else {
                    b.i[(r - s_dim, k)]
                }
            };
            let eval = |monos: &[Vec<usize>]| -> DMatrix<f64> {
                let mut out = DMatrix::zeros(monos.len(), t);
                for (r, mono) in monos.iter().enumerate() {
                    for k in 0..t {
                        let mut v = 1.0;
                        for &ch in mono {
                            v *= channel(ch, k);
                        }
                        out[(r, k)] = v;
                    }
                }
                out
            };
            Blocks {
                s: eval(&state_monos),
                i: eval(&mixed),
            }
        }
        FittedStage::BilinearInput => {
            let s_dim = b.s.nrows();
            let i_dim = b.i.nrows();
            let mut out = DMatrix::zeros(i_dim * s_dim + i_dim, t);
            for ui in 0..i_dim {
                for si in 0..s_dim {
                    for k in 0..t {
                        out[(ui * s_dim + si, k)] = b.i[(ui, k)] * b.s[(si, k)];
                    }
                }
            }
            for ui in 0..i_dim {
                for k in 0..t {
                    out[(i_dim * s_dim + ui, k)] = b.i[(ui, k)];
                }
            }
            Blocks {
                s: b.s.clone(),
                i: out,
            }
        }
        FittedStage::Standardize {
            state_means,
            state_stds,
            input_means,
            input_stds,
        } => {
            let mut s = b.s.clone();
            let mut i = b.i.clone();
            for r in 0..s.nrows() {
                for k in 0..t {
                    s[(r, k)] = (s[(r, k)] - state_means[r]) / state_stds[r];
                }
            }
            for r in 0..i.nrows() {
                for k in 0..t {
                    i[(r, k)] = (i[(r, k)] - input_means[r]) / input_stds[r];
                }
            }
            Blocks { s, i }
        }
    })
}

/// All monomials of degree `1..=order` over `n_channels` channels as sorted
/// index multisets, graded by degree then lexicographic.
fn enumerate_monomials(n_channels: usize, order: usize) -> Vec<Vec<usize>> {
    let mut out = Vec::new();
    if n_channels == 0 {
        return out;
    }
    for degree in 1..=order {
        // Non-decreasing index tuples of length `degree`, lexicographic.
        let mut current = vec![0usize; degree];
        'gen: loop {
            out.push(current.clone());
            let mut pos = degree;
            while pos > 0 {
                pos -= 1;
                if current[pos] + 1 < n_channels {
                    let v = current[pos] + 1;
                    for slot in current.iter_mut().skip(pos) {
                        *slot = v;
                    }
                    continue 'gen;
                }
            }
            break;
        }
    }
    out
}

/// Monomials over all channels that involve at least one channel index
/// `>= split` (the input channels).
fn enumerate_mixed_monomials(split: usize, n_channels: usize, order: usize) -> Vec<Vec<usize>> {
    enumerate_monomials(n_channels, order)
        .into_iter()
        .filter(|m| m.iter().any(|&c| c >= split))
        .collect()
}

fn monomial_name(mono: &[usize], names: &[String]) -> String {
    let mut parts: Vec<String> = Vec::new();
    let mut idx = 0;
    while idx < mono.len() {
        let ch = mono[idx];
        let mut count = 0;
        while idx < mono.len() && mono[idx] == ch {
            count += 1;
            idx += 1;
        }
        if count == 1 {
            parts.push(names[ch].clone());
        } else {
            parts.push(format!("{}^{count}", names[ch]));
        }
    }
    parts.join("*")
}
