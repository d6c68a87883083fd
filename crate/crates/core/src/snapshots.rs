//! Episodic trajectory data and assembly of the lifted snapshot matrices.

use crate::error::{Error, Result};
use crate::lifting::LiftingPipeline;
use nalgebra::DMatrix;
use std::path::Path;

/// One recorded trajectory with uniform sampling. Columns of `states` and
/// `inputs` are time-aligned samples.
#[derive(Debug, Clone)]
pub struct Episode {
    pub id: u64,
    /// Sampling step in seconds.
    pub dt: f64,
    /// `m x T` state samples.
    pub states: DMatrix<f64>,
    /// `n x T` input samples.
    pub inputs: DMatrix<f64>,
}

impl Episode {
    pub fn new(id: u64, dt: f64, states: DMatrix<f64>, inputs: DMatrix<f64>) -> Result<Self> {
        if states.ncols() != inputs.ncols() {
            return Err(Error::Dimension(format!(
                "episode {id}: states have {} samples but inputs have {}",
                states.ncols(),
                inputs.ncols()
            )));
        }
        if states.ncols() < 2 {
            return Err(Error::Sampling(format!(
                "episode {id}: need at least 2 samples, got {}",
                states.ncols()
            )));
        }
        if !(dt > 0.0) {
            return Err(Error::Sampling(format!("episode {id}: dt must be positive")));
        }
        if states.iter().chain(inputs.iter()).any(|v| !v.is_finite()) {
            return Err(Error::Data(format!(
                "episode {id}: non-finite entry in states or inputs"
            )));
        }
        Ok(Self {
            id,
            dt,
            states,
            inputs,
        })
    }

    /// Number of samples.
    pub fn len(&self) -> usize {
        self.states.ncols()
    }

    pub fn is_empty(&self) -> bool {
        false
    }
}

/// A set of episodes sharing state/input dimensions.
#[derive(Debug, Clone, Default)]
pub struct Dataset {
    pub episodes: Vec<Episode>,
}

impl Dataset {
    pub fn new(episodes: Vec<Episode>) -> Result<Self> {
        let ds = Self { episodes };
        ds.validate()?;
        Ok(ds)
    }

    fn validate(&self) -> Result<()> {
        if let Some(first) = self.episodes.first() {
            let (m, n) = (first.states.nrows(), first.inputs.nrows());
            for ep in &self.episodes {
                if ep.states.nrows() != m || ep.inputs.nrows() != n {
                    return Err(Error::Dimension(format!(
                        "episode {}: dimension mismatch (expected {m} states, {n} inputs)",
                        ep.id
                    )));
                }
            }
        }
        Ok(())
    }

    /// State dimension `m`.
    pub fn n_states(&self) -> usize {
        self.episodes.first().map_or(0, |e| e.states.nrows())
    }

    /// Input dimension `n`.
    pub fn n_inputs(&self) -> usize {
        self.episodes.first().map_or(0, |e| e.inputs.nrows())
    }

    pub fn episode(&self, id: u64) -> Option<&Episode> {
        self.episodes.iter().find(|e| e.id == id)
    }

    /// Split into (selected, rest) by episode id.
    pub fn split(&self, ids: &[u64]) -> (Dataset, Dataset) {
        let (sel, rest) = self
            .episodes
            .iter()
            .cloned()
            .partition(|e| ids.contains(&e.id));
        (Dataset { episodes: sel }, Dataset { episodes: rest })
    }
}

/// Column-role assignment for episode CSV files.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct ColumnSchema {
    pub episode: String,
    pub time: String,
    /// State columns, in state order. Empty means auto-detect `x0, x1, ...`.
    pub states: Vec<String>,
    /// Input columns, in input order. Empty means auto-detect `u0, u1, ...`.
    pub inputs: Vec<String>,
}

impl Default for ColumnSchema {
    fn default() -> Self {
        Self {
            episode: "episode".into(),
            time: "t".into(),
            states: Vec::new(),
            inputs: Vec::new(),
        }
    }
}

/// Load an episode CSV (header row, `.` decimal separator, UTF-8).
///
/// Default layout: columns `episode`, `t`, `x0..x{m-1}`, `u0..u{n-1}`.
/// `dt` is inferred from consecutive timestamps and must be uniform to within
/// a relative tolerance of 1e-6.
pub fn load_episodes(path: impl AsRef<Path>, schema: &ColumnSchema) -> Result<Dataset> {
    let mut reader = csv::Reader::from_path(path.as_ref())?;
    let headers: Vec<String> = reader
        .headers()?
        .iter()
        .map(|h| h.trim().to_string())
        .collect();

    let col_index = |name: &str| -> Result<usize> {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| Error::Schema(format!("missing column '{name}'")))
    };
    let ep_col = col_index(&schema.episode)?;
    let t_col = col_index(&schema.time)?;

    let auto_detect = |prefix: &str| -> Vec<String> {
        let mut found = Vec::new();
        loop {
            let name = format!("{prefix}{}", found.len());
            if headers.iter().any(|h| h == &name) {
                found.push(name);
            } else {
                break;
            }
        }
        found
    };
    let state_names = if schema.states.is_empty() {
        auto_detect("x")
    } else {
        schema.states.clone()
    };
    let input_names = if schema.inputs.is_empty() {
        auto_detect("u")
    } else {
        schema.inputs.clone()
    };
    if state_names.is_empty() {
        return Err(Error::Schema("no state columns found".into()));
    }
    let state_cols = state_names
        .iter()
        .map(|n| col_index(n))
        .collect::<Result<Vec<_>>>()?;
    let input_cols = input_names
        .iter()
        .map(|n| col_index(n))
        .collect::<Result<Vec<_>>>()?;

    // Gather rows per episode id, then sort by time.
    struct Row {
        t: f64,
        x: Vec<f64>,
        u: Vec<f64>,
    }
    let mut by_episode: Vec<(u64, Vec<Row>)> = Vec::new();
    for (line, record) in reader.records().enumerate() {
        let record = record?;
        let parse = |idx: usize| -> Result<f64> {
            let raw = record
                .get(idx)
                .ok_or_else(|| Error::Schema(format!("row {line}: too few columns")))?;
            raw.trim()
                .parse::<f64>()
                .map_err(|_| Error::Data(format!("row {line}: cannot parse '{raw}' as number")))
        };
        let ep_raw = parse(ep_col)?;
        if !ep_raw.is_finite() || ep_raw < 0.0 || ep_raw.fract() != 0.0 {
            return Err(Error::Data(format!(
                "row {line}: episode id '{ep_raw}' is not a nonnegative integer"
            )));
        }
        let ep_id = ep_raw as u64;
        let t = parse(t_col)?;
        let x = state_cols.iter().map(|&i| parse(i)).collect::<Result<Vec<_>>>()?;
        let u = input_cols.iter().map(|&i| parse(i)).collect::<Result<Vec<_>>>()?;
        if !t.is_finite() || x.iter().chain(u.iter()).any(|v| !v.is_finite()) {
            return Err(Error::Data(format!("row {line}: non-finite value")));
        }
        match by_episode.iter_mut().find(|(id, _)| *id == ep_id) {
            Some((_, rows)) => rows.push(Row { t, x, u }),
            None => by_episode.push((ep_id, vec![Row { t, x, u }])),
        }
    }

    let mut episodes = Vec::new();
    for (id, mut rows) in by_episode {
        rows.sort_by(|a, b| a.t.total_cmp(&b.t));
        if rows.len() < 2 {
            return Err(Error::Sampling(format!(
                "episode {id}: cannot infer dt from {} sample(s)",
                rows.len()
            )));
        }
        let dt = rows[1].t - rows[0].t;
        if !(dt > 0.0) {
            return Err(Error::Sampling(format!(
                "episode {id}: non-increasing timestamps"
            )));
        }
        for w in rows.windows(2) {
            let step = w[1].t - w[0].t;
            if ((step - dt) / dt).abs() > 1e-6 {
                return Err(Error::Sampling(format!(
                    "episode {id}: non-uniform sampling ({step} vs {dt})"
                )));
            }
        }
        let t_len = rows.len();
        let states = DMatrix::from_fn(state_cols.len(), t_len, |i, k| rows[k].x[i]);
        let inputs = DMatrix::from_fn(input_cols.len(), t_len, |i, k| rows[k].u[i]);
        episodes.push(Episode::new(id, dt, states, inputs)?);
    }
    Dataset::new(episodes)
}

/// Write a dataset in the episode CSV format read by [`load_episodes`].
pub fn save_episodes(dataset: &Dataset, path: impl AsRef<Path>) -> Result<()> {
    let mut writer = csv::Writer::from_path(path.as_ref())?;
    let m = dataset.n_states();
    let n = dataset.n_inputs();
    let mut header = vec!["episode".to_string(), "t".to_string()];
    header.extend((0..m).map(|i| format!("x{i}")));
    header.extend((0..n).map(|i| format!("u{i}")));
    writer.write_record(&header)?;
    for ep in &dataset.episodes {
        for k in 0..ep.len() {
            let mut record = vec![ep.id.to_string(), format_float(k as f64 * ep.dt)];
            record.extend((0..m).map(|i| format_float(ep.states[(i, k)])));
            record.extend((0..n).map(|i| format_float(ep.inputs[(i, k)])));
            writer.write_record(&record)?;
        }
    }
    writer.flush()?;
    Ok(())
}

pub(crate) fn format_float(v: f64) -> String {
    let mut buf = ryu_like(v);
    if !buf.contains('.') && !buf.contains('e') && !buf.contains("inf") && !buf.contains("nan") {
        buf.push_str(".0");
    }
    buf
}

fn ryu_like(v: f64) -> String {
    // Shortest round-trip representation, deterministic across runs.
    format!("{v}")
}

/// Lifted snapshot matrices and the scaled data products used by the
/// regression problems.
#[derive(Debug, Clone)]
pub struct SnapshotMatrices {
    /// `p x q`, columns are lifted states at time k.
    pub psi: DMatrix<f64>,
    /// `p_theta x q`, columns are state-dependent lifted states at time k+1.
    pub theta_plus: DMatrix<f64>,
    /// `(1/q) ThetaPlus Psi^T`.
    pub g: DMatrix<f64>,
    /// `(1/q) Psi Psi^T`, symmetric positive semidefinite.
    pub h: DMatrix<f64>,
    /// Number of snapshot pairs.
    pub q: usize,
    pub p_theta: usize,
    pub p_upsilon: usize,
    /// Sampling step shared by all contributing episodes.
    pub dt: f64,
}

impl SnapshotMatrices {
    pub fn p(&self) -> usize {
        self.p_theta + self.p_upsilon
    }

    /// `(1/q) tr(ThetaPlus ThetaPlus^T)`, the constant term of the regression
    /// cost.
    pub fn cost_constant(&self) -> f64 {
        (&self.theta_plus * self.theta_plus.transpose()).trace() / self.q as f64
    }

    /// Regression cost `(1/q) ||ThetaPlus - U Psi||_F^2` for a given Koopman
    /// matrix.
    pub fn cost_of(&self, u: &DMatrix<f64>) -> f64 {
        let residual = &self.theta_plus - u * &self.psi;
        residual.norm_squared() / self.q as f64
    }

    /// Assemble directly from snapshot matrices (bypassing a pipeline).
    pub fn from_psi_theta(psi: DMatrix<f64>, theta_plus: DMatrix<f64>, p_theta: usize, dt: f64) -> Result<Self> {
        if psi.ncols() != theta_plus.ncols() {
            return Err(Error::Dimension(
                "Psi and ThetaPlus must have the same number of columns".into(),
            ));
        }
        if theta_plus.nrows() != p_theta || psi.nrows() < p_theta {
            return Err(Error::Dimension("inconsistent p_theta".into()));
        }
        let q = psi.ncols();
        if q == 0 {
            return Err(Error::Data("no snapshot pairs".into()));
        }
        let g = &theta_plus * psi.transpose() / q as f64;
        let h = &psi * psi.transpose() / q as f64;
        let p_upsilon = psi.nrows() - p_theta;
        Ok(Self {
            psi,
            theta_plus,
            g,
            h,
            q,
            p_theta,
            p_upsilon,
            dt,
        })
    }
}

/// Lift every episode and assemble `Psi`, `ThetaPlus`, `G`, `H`.
///
/// Snapshot pairs never span an episode boundary. With a delay-lifted
/// pipeline the first `d` samples of each episode seed the delay history, so
/// each episode contributes `T - 1 - d` pairs.
pub fn build_snapshots(dataset: &Dataset, pipeline: &LiftingPipeline) -> Result<SnapshotMatrices> {
    if !pipeline.is_fitted() {
        return Err(Error::State("pipeline must be fitted before building snapshots".into()));
    }
    if dataset.episodes.is_empty() {
        return Err(Error::Data("dataset has no episodes".into()));
    }
    let dt = dataset.episodes[0].dt;
    for ep in &dataset.episodes {
        if ((ep.dt - dt) / dt).abs() > 1e-9 {
            return Err(Error::Data(format!(
                "episode {} has dt {} but episode {} has dt {}",
                ep.id, ep.dt, dataset.episodes[0].id, dt
            )));
        }
    }
    let p_theta = pipeline.p_theta();
    let p_upsilon = pipeline.p_upsilon();
    let p = p_theta + p_upsilon;

    let mut psi_cols: Vec<DMatrix<f64>> = Vec::new();
    let mut theta_cols: Vec<DMatrix<f64>> = Vec::new();
    let mut q = 0usize;
    for ep in &dataset.episodes {
        let lifted = pipeline.apply_episode(ep)?;
        let t_eff = lifted.theta.ncols();
        if t_eff < 2 {
            continue;
        }
        // Pairs (psi_k, theta_{k+1}) for k = 0..t_eff-2 in lifted time.
        let mut psi = DMatrix::zeros(p, t_eff - 1);
        psi.view_mut((0, 0), (p_theta, t_eff - 1))
            .copy_from(&lifted.theta.columns(0, t_eff - 1));
        psi.view_mut((p_theta, 0), (p_upsilon, t_eff - 1))
            .copy_from(&lifted.upsilon.columns(0, t_eff - 1));
        psi_cols.push(psi);
        theta_cols.push(lifted.theta.columns(1, t_eff - 1).into_owned());
        q += t_eff - 1;
    }
    if q == 0 {
        return Err(Error::Data(
            "no snapshot pairs: all episodes shorter than the delay horizon + 2".into(),
        ));
    }
    let mut psi = DMatrix::zeros(p, q);
    let mut theta_plus = DMatrix::zeros(p_theta, q);
    let mut off = 0usize;
    for (pc, tc) in psi_cols.iter().zip(&theta_cols) {
        let w = pc.ncols();
        psi.view_mut((0, off), (p, w)).copy_from(pc);
        theta_plus.view_mut((0, off), (p_theta, w)).copy_from(tc);
        off += w;
    }
    SnapshotMatrices::from_psi_theta(psi, theta_plus, p_theta, dt)
}
