//! Deterministic synthetic nonlinear systems with inputs, for desk-scale
//! verification of the regression machinery.

use crate::error::{Error, Result};
use crate::snapshots::{Dataset, Episode};
use nalgebra::DMatrix;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

/// Hard cap during simulation; beyond it generation aborts.
const BLOWUP_LIMIT: f64 = 1e12;

/// Internal Euler step for the nonlinear systems.
const EULER_DT: f64 = 1e-3;

/// The simulated plant.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum SystemKind {
    /// `x1' = x2`, `x2' = (u - k x1 - c x2 - k3 x1^3) / mass`.
    MassSpringDamperCubic {
        mass: f64,
        stiffness: f64,
        damping: f64,
        cubic: f64,
    },
    /// `x'' + delta x' + alpha x + beta x^3 = u`.
    DuffingForced { delta: f64, alpha: f64, beta: f64 },
    /// Exact discrete-time iteration `x+ = A x + B u` with `A` row-major.
    Linear2State { a: [f64; 4], b: [f64; 2] },
}

/// Exogenous input signal. All randomness comes from the spec seed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum InputSignal {
    /// Sum of `tones` sinusoids with seeded random phases, frequencies spread
    /// up to a quarter of the sampling rate.
    Multisine { tones: usize, amplitude: f64 },
    /// Linear frequency sweep from `f0_hz` to `f1_hz` over each episode.
    Chirp { f0_hz: f64, f1_hz: f64, amplitude: f64 },
    /// Pseudo-random binary signal held for `hold_steps` samples.
    Prbs { amplitude: f64, hold_steps: usize },
    /// Identically zero input.
    Zero,
}

/// Full description of a synthetic dataset; the seed fixes every random
/// draw, so generation is reproducible bit for bit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub kind: SystemKind,
    /// Sampling step of the emitted episodes, seconds.
    pub dt: f64,
    /// Standard deviation of additive Gaussian measurement noise.
    pub noise_std: f64,
    pub input: InputSignal,
    pub seed: u64,
    pub episodes: usize,
    pub episode_len: usize,
}

impl SyntheticSpec {
    fn validate(&self) -> Result<()> {
        if !(self.dt > 0.0) {
            return Err(Error::Config(format!("dt must be positive, got {}", self.dt)));
        }
        if self.noise_std < 0.0 {
            return Err(Error::Config("noise_std must be nonnegative".into()));
        }
        if self.episodes == 0 || self.episode_len < 2 {
            return Err(Error::Config(
                "need at least 1 episode of at least 2 samples".into(),
            ));
        }
        Ok(())
    }
}

fn input_samples(
    signal: &InputSignal,
    dt: f64,
    t_len: usize,
    rng: &mut ChaCha12Rng,
) -> Vec<f64> {
    match signal {
        InputSignal::Zero => vec![0.0; t_len],
        InputSignal::Multisine { tones, amplitude } => {
            let tones = (*tones).max(1);
            let f_max = 0.25 / dt;
            let phases: Vec<f64> = (0..tones)
                .map(|_| rng.random_range(0.0..std::f64::consts::TAU))
                .collect();
            (0..t_len)
                .map(|k| {
                    let t = k as f64 * dt;
                    let mut v = 0.0;
                    for (j, phase) in phases.iter().enumerate() {
                        let f = f_max * (j + 1) as f64 / tones as f64;
                        v += (std::f64::consts::TAU * f * t + phase).sin();
                    }
                    amplitude * v / tones as f64
                })
                .collect()
        }
        InputSignal::Chirp {
            f0_hz,
            f1_hz,
            amplitude,
        } => {
            let t_total = (t_len.max(2) - 1) as f64 * dt;
            (0..t_len)
                .map(|k| {
                    let t = k as f64 * dt;
                    let f = f0_hz + (f1_hz - f0_hz) * t / t_total / 2.0;
                    amplitude * (std::f64::consts::TAU * f * t).sin()
                })
                .collect()
        }
        InputSignal::Prbs {
            amplitude,
            hold_steps,
        } => {
            let hold = (*hold_steps).max(1);
            let mut out = Vec::with_capacity(t_len);
            let mut level = 0.0;
            for k in 0..t_len {
                if k % hold == 0 {
                    level = if rng.random::<bool>() { *amplitude } else { -*amplitude };
                }
                out.push(level);
            }
            out
        }
    }
}

/// Simulate the spec into a dataset. Nonlinear systems integrate with
/// forward Euler at 1 ms (input held between samples) and are downsampled to
/// the spec `dt`; the linear system iterates exactly.
pub fn generate(spec: &SyntheticSpec) -> Result<Dataset> {
    spec.validate()?;
    let mut rng = ChaCha12Rng::seed_from_u64(spec.seed);
    let t_len = spec.episode_len;
    let mut episodes = Vec::with_capacity(spec.episodes);
    for id in 0..spec.episodes {
        let u = input_samples(&spec.input, spec.dt, t_len, &mut rng);
        let mut states = DMatrix::zeros(2, t_len);
        let mut x: [f64; 2] = [rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)];
        for k in 0..t_len {
            states[(0, k)] = x[0];
            states[(1, k)] = x[1];
            if x[0].abs() > BLOWUP_LIMIT || x[1].abs() > BLOWUP_LIMIT {
                return Err(Error::Generation(format!(
                    "state blew up at episode {id} step {k}"
                )));
            }
            x = step(&spec.kind, x, u[k], spec.dt);
        }
        // Additive measurement noise on the recorded states.
        if spec.noise_std > 0.0 {
            for v in states.iter_mut() {
                let z: f64 = rng.sample(StandardNormal);
                *v += spec.noise_std * z;
            }
        }
        let inputs = DMatrix::from_fn(1, t_len, |_, k| u[k]);
        episodes.push(Episode::new(id as u64, spec.dt, states, inputs)?);
    }
    Dataset::new(episodes)
}

fn step(kind: &SystemKind, x: [f64; 2], u: f64, dt: f64) -> [f64; 2] {
    match kind {
        SystemKind::Linear2State { a, b } => [
            a[0] * x[0] + a[1] * x[1] + b[0] * u,
            a[2] * x[0] + a[3] * x[1] + b[1] * u,
        ],
        SystemKind::MassSpringDamperCubic {
            mass,
            stiffness,
            damping,
            cubic,
        } => integrate_euler(x, dt, |s| {
            [
                s[1],
                (u - stiffness * s[0] - damping * s[1] - cubic * s[0] * s[0] * s[0]) / mass,
            ]
        }),
        SystemKind::DuffingForced { delta, alpha, beta } => integrate_euler(x, dt, |s| {
            [s[1], u - delta * s[1] - alpha * s[0] - beta * s[0] * s[0] * s[0]]
        }),
    }
}

fn integrate_euler(mut x: [f64; 2], dt: f64, f: impl Fn([f64; 2]) -> [f64; 2]) -> [f64; 2] {
    let steps = (dt / EULER_DT).round().max(1.0) as usize;
    let h = dt / steps as f64;
    for _ in 0..steps {
        let dx = f(x);
        x = [x[0] + h * dx[0], x[1] + h * dx[1]];
    }
    x
}
