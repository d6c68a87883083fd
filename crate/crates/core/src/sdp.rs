//! Semidefinite-program construction and solving.
//!
//! Problems are built from matrix decision variables (scalar, symmetric,
//! rectangular), affine matrix-inequality constraints required to be positive
//! semidefinite with a small strictness margin, optional scalar linear
//! equalities, and a linear objective. The backend is Clarabel's interior
//! point method; every solution is re-verified by an independent eigenvalue
//! check of each constraint block.
//!
//! Strict inequalities (`> 0`) are realized as `>= margin * I`. The default
//! margin is `margin_coeff * max(1, |tr(constant part)|)` per constraint and
//! can be overridden per constraint.

use crate::error::{Error, Result};
use clarabel::algebra::CscMatrix;
use clarabel::solver::{
    DefaultSettingsBuilder, DefaultSolver, IPSolver, SolverStatus, SupportedConeT,
};
use nalgebra::DMatrix;
use std::fmt::Write as _;

/// Handle to a decision variable of an [`SdProblem`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct VarId(usize);

/// Shape of a decision variable.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum VarKind {
    Scalar,
    /// Symmetric `n x n` matrix (free, not cone-constrained).
    Symmetric(usize),
    /// Rectangular `rows x cols` matrix.
    Rectangular(usize, usize),
}

impl VarKind {
    fn dof(&self) -> usize {
        match *self {
            VarKind::Scalar => 1,
            VarKind::Symmetric(n) => n * (n + 1) / 2,
            VarKind::Rectangular(r, c) => r * c,
        }
    }

    fn shape(&self) -> (usize, usize) {
        match *self {
            VarKind::Scalar => (1, 1),
            VarKind::Symmetric(n) => (n, n),
            VarKind::Rectangular(r, c) => (r, c),
        }
    }
}

#[derive(Debug, Clone)]
enum Term {
    /// `scale * left * op(X) * right` placed with upper-left corner at `(row0, col0)`.
    Product {
        var: VarId,
        left: DMatrix<f64>,
        right: DMatrix<f64>,
        transpose_var: bool,
        scale: f64,
        row0: usize,
        col0: usize,
    },
    /// `x * coeff` for a scalar variable `x`, placed at `(row0, col0)`.
    ScalarMat {
        var: VarId,
        coeff: DMatrix<f64>,
        row0: usize,
        col0: usize,
    },
}

/// Affine symmetric-matrix-valued expression of the decision variables.
#[derive(Debug, Clone)]
pub struct MatExpr {
    size: usize,
    constant: DMatrix<f64>,
    terms: Vec<Term>,
}

impl MatExpr {
    pub fn zeros(size: usize) -> Self {
        Self {
            size,
            constant: DMatrix::zeros(size, size),
            terms: Vec::new(),
        }
    }

    pub fn size(&self) -> usize {
        self.size
    }

    /// Add a constant block with upper-left corner at `(row0, col0)`.
    pub fn add_const(&mut self, row0: usize, col0: usize, m: &DMatrix<f64>) {
        for j in 0..m.ncols() {
            for i in 0..m.nrows() {
                self.constant[(row0 + i, col0 + j)] += m[(i, j)];
            }
        }
    }

    /// Add `scale * left * X * right` at `(row0, col0)`.
    pub fn add_product(
        &mut self,
        row0: usize,
        col0: usize,
        left: &DMatrix<f64>,
        var: VarId,
        right: &DMatrix<f64>,
        scale: f64,
    ) {
        self.terms.push(Term::Product {
            var,
            left: left.clone(),
            right: right.clone(),
            transpose_var: false,
            scale,
            row0,
            col0,
        });
    }

    /// Add `scale * left * X^T * right` at `(row0, col0)`.
    pub fn add_product_tr(
        &mut self,
        row0: usize,
        col0: usize,
        left: &DMatrix<f64>,
        var: VarId,
        right: &DMatrix<f64>,
        scale: f64,
    ) {
        self.terms.push(Term::Product {
            var,
            left: left.clone(),
            right: right.clone(),
            transpose_var: true,
            scale,
            row0,
            col0,
        });
    }

    /// Add `x * coeff` for a scalar variable at `(row0, col0)`.
    pub fn add_scalar_mat(&mut self, row0: usize, col0: usize, var: VarId, coeff: &DMatrix<f64>) {
        self.terms.push(Term::ScalarMat {
            var,
            coeff: coeff.clone(),
            row0,
            col0,
        });
    }

    /// Add `scale * tr(X)` into the `(row0, col0)` entry.
    pub fn add_trace(&mut self, row0: usize, col0: usize, var: VarId, dim: usize, scale: f64) {
        for k in 0..dim {
            let mut e_row = DMatrix::zeros(1, dim);
            e_row[(0, k)] = 1.0;
            let e_col = e_row.transpose();
            self.terms.push(Term::Product {
                var,
                left: e_row,
                right: e_col,
                transpose_var: false,
                scale,
                row0,
                col0,
            });
        }
    }

    /// Evaluate the expression at concrete variable values.
    pub fn eval(&self, values: &[DMatrix<f64>]) -> DMatrix<f64> {
        let mut out = self.constant.clone();
        for term in &self.terms {
            match term {
                Term::Product {
                    var,
                    left,
                    right,
                    transpose_var,
                    scale,
                    row0,
                    col0,
                } => {
                    let x = &values[var.0];
                    let block = if *transpose_var {
                        left * x.transpose() * right
                    } else {
                        left * x * right
                    };
                    for j in 0..block.ncols() {
                        for i in 0..block.nrows() {
                            out[(row0 + i, col0 + j)] += scale * block[(i, j)];
                        }
                    }
                }
                Term::ScalarMat {
                    var,
                    coeff,
                    row0,
                    col0,
                } => {
                    let x = values[var.0][(0, 0)];
                    for j in 0..coeff.ncols() {
                        for i in 0..coeff.nrows() {
                            out[(row0 + i, col0 + j)] += x * coeff[(i, j)];
                        }
                    }
                }
            }
        }
        out
    }

    /// Accumulate the derivative of the expression with respect to one scalar
    /// degree of freedom of `var` into `scratch` (which must be zeroed by the
    /// caller). For symmetric variables the dof `(k, l)` with `k <= l` covers
    /// both `X[k,l]` and `X[l,k]`.
    fn accumulate_derivative(
        &self,
        var: VarId,
        kind: VarKind,
        dof: usize,
        scratch: &mut DMatrix<f64>,
    ) {
        let (k, l) = dof_to_entry(kind, dof);
        for term in &self.terms {
            match term {
                Term::Product {
                    var: v,
                    left,
                    right,
                    transpose_var,
                    scale,
                    row0,
                    col0,
                } if *v == var => {
                    let mut add_outer = |a: usize, b: usize| {
                        // d/dX_{ab} of left*X*right = left[:,a] * right[b,:]
                        for j in 0..right.ncols() {
                            let rb = right[(b, j)];
                            if rb == 0.0 {
                                continue;
                            }
                            for i in 0..left.nrows() {
                                scratch[(row0 + i, col0 + j)] += scale * left[(i, a)] * rb;
                            }
                        }
                    };
                    match kind {
                        VarKind::Symmetric(_) => {
                            // X_{kl} and X_{lk} move together.
                            add_outer(k, l);
                            if k != l {
                                add_outer(l, k);
                            }
                        }
                        _ => {
                            if *transpose_var {
                                add_outer(l, k);
                            } else {
                                add_outer(k, l);
                            }
                        }
                    }
                }
                Term::ScalarMat {
                    var: v,
                    coeff,
                    row0,
                    col0,
                } if *v == var => {
                    for j in 0..coeff.ncols() {
                        for i in 0..coeff.nrows() {
                            scratch[(row0 + i, col0 + j)] += coeff[(i, j)];
                        }
                    }
                }
                _ => {}
            }
        }
    }
}

/// Map a flat dof index to the matrix entry it controls.
fn dof_to_entry(kind: VarKind, dof: usize) -> (usize, usize) {
    match kind {
        VarKind::Scalar => (0, 0),
        VarKind::Rectangular(rows, _) => (dof % rows, dof / rows),
        VarKind::Symmetric(_) => {
            // Upper triangle, column-major: (0,0), (0,1), (1,1), (0,2), ...
            let mut j = 0usize;
            let mut base = 0usize;
            loop {
                if dof < base + j + 1 {
                    return (dof - base, j);
                }
                base += j + 1;
                j += 1;
            }
        }
    }
}

#[derive(Debug, Clone)]
struct Constraint {
    expr: MatExpr,
    margin: Option<f64>,
    label: String,
}

/// Scalar linear equality `sum_v <coeff_v, X_v> = rhs`.
#[derive(Debug, Clone)]
struct LinearEq {
    terms: Vec<(VarId, DMatrix<f64>)>,
    rhs: f64,
}

/// A semidefinite program: matrix variables, PSD constraints with margins,
/// optional scalar equalities, and a linear objective.
#[derive(Debug, Clone, Default)]
pub struct SdProblem {
    vars: Vec<VarKind>,
    constraints: Vec<Constraint>,
    equalities: Vec<LinearEq>,
    /// Linear objective terms `<coeff, X>`; empty means feasibility problem.
    obj_terms: Vec<(VarId, DMatrix<f64>)>,
    obj_constant: f64,
    has_objective: bool,
}

impl SdProblem {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add_var(&mut self, kind: VarKind) -> VarId {
        self.vars.push(kind);
        VarId(self.vars.len() - 1)
    }

    pub fn scalar_var(&mut self) -> VarId {
        self.add_var(VarKind::Scalar)
    }

    pub fn sym_var(&mut self, n: usize) -> VarId {
        self.add_var(VarKind::Symmetric(n))
    }

    pub fn rect_var(&mut self, rows: usize, cols: usize) -> VarId {
        self.add_var(VarKind::Rectangular(rows, cols))
    }

    pub fn var_kind(&self, var: VarId) -> VarKind {
        self.vars[var.0]
    }

    /// Require `expr >= margin * I` with the default margin rule.
    pub fn require_psd(&mut self, expr: MatExpr, label: &str) {
        self.constraints.push(Constraint {
            expr,
            margin: None,
            label: label.to_string(),
        });
    }

    /// Require `expr >= margin * I` with an explicit margin.
    pub fn require_psd_with_margin(&mut self, expr: MatExpr, margin: f64, label: &str) {
        self.constraints.push(Constraint {
            expr,
            margin: Some(margin),
            label: label.to_string(),
        });
    }

    /// Require the scalar equality `sum_v <coeff_v, X_v> = rhs`.
    pub fn require_eq(&mut self, terms: Vec<(VarId, DMatrix<f64>)>, rhs: f64) {
        self.equalities.push(LinearEq { terms, rhs });
    }

    /// Add `<coeff, X_var>` to the minimized objective.
    pub fn add_objective_term(&mut self, var: VarId, coeff: DMatrix<f64>) {
        self.has_objective = true;
        self.obj_terms.push((var, coeff));
    }

    /// Add a scalar `scale * x` objective term for a scalar variable.
    pub fn add_objective_scalar(&mut self, var: VarId, scale: f64) {
        self.add_objective_term(var, DMatrix::from_element(1, 1, scale));
    }

    pub fn set_objective_constant(&mut self, c: f64) {
        self.obj_constant = c;
    }

    pub fn n_constraints(&self) -> usize {
        self.constraints.len()
    }

    /// Total scalar degrees of freedom across all variables.
    pub fn n_dof(&self) -> usize {
        self.vars.iter().map(|v| v.dof()).sum()
    }

    /// Largest constraint block size, a proxy for problem dimension.
    pub fn max_block_size(&self) -> usize {
        self.constraints.iter().map(|c| c.expr.size).max().unwrap_or(0)
    }

    fn margin_for(&self, c: &Constraint, margin_coeff: f64) -> f64 {
        c.margin
            .unwrap_or_else(|| margin_coeff * f64::max(1.0, c.expr.constant.trace().abs()))
    }

    fn var_offsets(&self) -> Vec<usize> {
        let mut offsets = Vec::with_capacity(self.vars.len());
        let mut acc = 0usize;
        for v in &self.vars {
            offsets.push(acc);
            acc += v.dof();
        }
        offsets
    }

    fn validate(&self) -> Result<()> {
        for (ci, c) in self.constraints.iter().enumerate() {
            let s = c.expr.size;
            if c.expr.constant.nrows() != s || c.expr.constant.ncols() != s {
                return Err(Error::Build(format!(
                    "constraint {ci} ({}): constant block is {}x{}, expected {s}x{s}",
                    c.label,
                    c.expr.constant.nrows(),
                    c.expr.constant.ncols()
                )));
            }
            let asym = (&c.expr.constant - c.expr.constant.transpose()).abs().max();
            let scale = c.expr.constant.abs().max().max(1.0);
            if asym > 1e-10 * scale {
                return Err(Error::Build(format!(
                    "constraint {ci} ({}): constant part is not symmetric (asymmetry {asym:.3e})",
                    c.label
                )));
            }
            for t in &c.expr.terms {
                let (var, row0, col0, rows, cols) = match t {
                    Term::Product {
                        var,
                        left,
                        right,
                        row0,
                        col0,
                        ..
                    } => (*var, *row0, *col0, left.nrows(), right.ncols()),
                    Term::ScalarMat {
                        var,
                        coeff,
                        row0,
                        col0,
                    } => (*var, *row0, *col0, coeff.nrows(), coeff.ncols()),
                };
                if var.0 >= self.vars.len() {
                    return Err(Error::Build(format!(
                        "constraint {ci} ({}): unknown variable id {}",
                        c.label, var.0
                    )));
                }
                if row0 + rows > s || col0 + cols > s {
                    return Err(Error::Build(format!(
                        "constraint {ci} ({}): term block exceeds constraint size",
                        c.label
                    )));
                }
                if let Term::Product {
                    var,
                    left,
                    right,
                    transpose_var,
                    ..
                } = t
                {
                    let (vr, vc) = self.vars[var.0].shape();
                    let (vr, vc) = if *transpose_var { (vc, vr) } else { (vr, vc) };
                    if left.ncols() != vr || right.nrows() != vc {
                        return Err(Error::Build(format!(
                            "constraint {ci} ({}): product term dimensions do not match variable",
                            c.label
                        )));
                    }
                }
            }
        }
        Ok(())
    }

    /// Serialize the problem in a sparse text format for external debugging.
    ///
    /// Format (one record per line):
    /// `var <id> scalar|sym <n>|rect <r> <c>`;
    /// `obj <var> <i> <j> <coeff>` for objective entries `coeff * X[i,j]`;
    /// `eq <k> <var> <i> <j> <coeff>` and `eq-rhs <k> <rhs>` for equalities;
    /// `con <k> size <s> margin <m> label <text>` opens a constraint, followed by
    /// `const <i> <j> <value>` entries and
    /// `coeff <var> <vi> <vj> <i> <j> <value>` entries meaning
    /// `d expr[i,j] / d X_var[vi,vj] = value`.
    pub fn dump(&self, margin_coeff: f64) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "# sdp problem dump v1");
        for (i, v) in self.vars.iter().enumerate() {
            match v {
                VarKind::Scalar => {
                    let _ = writeln!(out, "var {i} scalar");
                }
                VarKind::Symmetric(n) => {
                    let _ = writeln!(out, "var {i} sym {n}");
                }
                VarKind::Rectangular(r, c) => {
                    let _ = writeln!(out, "var {i} rect {r} {c}");
                }
            }
        }
        for (var, coeff) in &self.obj_terms {
            for j in 0..coeff.ncols() {
                for i in 0..coeff.nrows() {
                    if coeff[(i, j)] != 0.0 {
                        let _ = writeln!(out, "obj {} {i} {j} {:.17e}", var.0, coeff[(i, j)]);
                    }
                }
            }
        }
        for (k, eq) in self.equalities.iter().enumerate() {
            for (var, coeff) in &eq.terms {
                for j in 0..coeff.ncols() {
                    for i in 0..coeff.nrows() {
                        if coeff[(i, j)] != 0.0 {
                            let _ = writeln!(
                                out,
                                "eq {k} {} {i} {j} {:.17e}",
                                var.0,
                                coeff[(i, j)]
                            );
                        }
                    }
                }
            }
            let _ = writeln!(out, "eq-rhs {k} {:.17e}", eq.rhs);
        }
        for (k, c) in self.constraints.iter().enumerate() {
            let s = c.expr.size;
            let margin = self.margin_for(c, margin_coeff);
            let _ = writeln!(out, "con {k} size {s} margin {margin:.3e} label {}", c.label);
            for j in 0..s {
                for i in 0..s {
                    if c.expr.constant[(i, j)] != 0.0 {
                        let _ =
                            writeln!(out, "const {i} {j} {:.17e}", c.expr.constant[(i, j)]);
                    }
                }
            }
            let mut scratch = DMatrix::zeros(s, s);
            for (vi, kind) in self.vars.iter().enumerate() {
                for dof in 0..kind.dof() {
                    scratch.fill(0.0);
                    c.expr
                        .accumulate_derivative(VarId(vi), *kind, dof, &mut scratch);
                    let (ek, el) = dof_to_entry(*kind, dof);
                    for j in 0..s {
                        for i in 0..s {
                            if scratch[(i, j)] != 0.0 {
                                let _ = writeln!(
                                    out,
                                    "coeff {vi} {ek} {el} {i} {j} {:.17e}",
                                    scratch[(i, j)]
                                );
                            }
                        }
                    }
                }
            }
            let _ = writeln!(out, "end {k}");
        }
        out
    }
}

/// Solver settings.
#[derive(Debug, Clone)]
pub struct SolveSettings {
    pub max_iter: u32,
    /// Absolute/relative duality-gap and feasibility tolerance.
    pub tol: f64,
    pub time_limit_s: f64,
    pub verbose: bool,
    /// Coefficient of the default strictness-margin rule.
    pub margin_coeff: f64,
}

impl Default for SolveSettings {
    fn default() -> Self {
        Self {
            max_iter: 200,
            tol: 1e-9,
            time_limit_s: 300.0,
            verbose: false,
            margin_coeff: 1e-9,
        }
    }
}

/// Outcome classification of a solve.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SolveStatus {
    /// Objective minimized to within solver tolerance.
    Optimal,
    /// Feasibility problem solved (no objective was given).
    Feasible,
    Infeasible,
    NumericalFailure,
}

/// Per-solve diagnostics, including the independent eigenvalue re-check of
/// every constraint block.
#[derive(Debug, Clone)]
pub struct Diagnostics {
    pub solver_status: String,
    pub iterations: u32,
    pub solve_time_s: f64,
    /// Minimum eigenvalue of each constraint block at the solution.
    pub constraint_min_eigs: Vec<f64>,
    pub notes: Vec<String>,
}

/// Solution of an [`SdProblem`].
#[derive(Debug, Clone)]
pub struct Solution {
    pub status: SolveStatus,
    values: Vec<DMatrix<f64>>,
    pub objective: f64,
    pub diagnostics: Diagnostics,
}

impl Solution {
    pub fn value(&self, var: VarId) -> &DMatrix<f64> {
        &self.values[var.0]
    }

    pub fn scalar(&self, var: VarId) -> f64 {
        self.values[var.0][(0, 0)]
    }
}

struct Triplet {
    row: usize,
    col: usize,
    val: f64,
}

fn csc_from_triplets(nrows: usize, ncols: usize, mut triplets: Vec<Triplet>) -> CscMatrix<f64> {
    triplets.sort_by(|a, b| (a.col, a.row).cmp(&(b.col, b.row)));
    let mut colptr = vec![0usize; ncols + 1];
    let mut rowval = Vec::with_capacity(triplets.len());
    let mut nzval = Vec::with_capacity(triplets.len());
    for t in &triplets {
        colptr[t.col + 1] += 1;
        rowval.push(t.row);
        nzval.push(t.val);
    }
    for c in 0..ncols {
        colptr[c + 1] += colptr[c];
    }
    CscMatrix::new(nrows, ncols, colptr, rowval, nzval)
}

/// Solve the problem with Clarabel and re-verify the solution.
pub fn solve(problem: &SdProblem, settings: &SolveSettings) -> Result<Solution> {
    problem.validate()?;
    let offsets = problem.var_offsets();
    let n = problem.n_dof();

    let mut triplets: Vec<Triplet> = Vec::new();
    let mut b: Vec<f64> = Vec::new();
    let mut cones: Vec<SupportedConeT<f64>> = Vec::new();
    let mut row = 0usize;

    // Equalities first (zero cone).
    for eq in &problem.equalities {
        for (var, coeff) in &eq.terms {
            let kind = problem.vars[var.0];
            let (vr, vc) = kind.shape();
            if coeff.nrows() != vr || coeff.ncols() != vc {
                return Err(Error::Build(
                    "equality coefficient shape does not match variable".into(),
                ));
            }
            for dof in 0..kind.dof() {
                let (k, l) = dof_to_entry(kind, dof);
                let val = match kind {
                    VarKind::Symmetric(_) if k != l => coeff[(k, l)] + coeff[(l, k)],
                    _ => coeff[(k, l)],
                };
                if val != 0.0 {
                    triplets.push(Triplet {
                        row,
                        col: offsets[var.0] + dof,
                        val,
                    });
                }
            }
        }
        b.push(eq.rhs);
        row += 1;
    }
    if !problem.equalities.is_empty() {
        cones.push(SupportedConeT::ZeroConeT(problem.equalities.len()));
    }

    // Matrix inequality blocks.
    let sqrt2 = std::f64::consts::SQRT_2;
    for c in &problem.constraints {
        let s = c.expr.size;
        let margin = problem.margin_for(c, settings.margin_coeff);
        let svec_len = s * (s + 1) / 2;
        let block_row0 = row;

        // b = svec(constant - margin * I)
        let mut bblock = vec![0.0; svec_len];
        {
            let mut idx = 0usize;
            for j in 0..s {
                for i in 0..=j {
                    let mut v = c.expr.constant[(i, j)];
                    if i == j {
                        v -= margin;
                    }
                    bblock[idx] = if i == j { v } else { v * sqrt2 };
                    idx += 1;
                }
            }
        }

        // A = -svec(dExpr/dx_e) per dof.
        let mut ablock: Vec<Triplet> = Vec::new();
        let mut scratch = DMatrix::zeros(s, s);
        let mut max_asym = 0.0f64;
        for (vi, kind) in problem.vars.iter().enumerate() {
            let used = c.expr.terms.iter().any(|t| match t {
                Term::Product { var, .. } => var.0 == vi,
                Term::ScalarMat { var, .. } => var.0 == vi,
            });
            if !used {
                continue;
            }
            for dof in 0..kind.dof() {
                scratch.fill(0.0);
                c.expr
                    .accumulate_derivative(VarId(vi), *kind, dof, &mut scratch);
                let mut idx = 0usize;
                for j in 0..s {
                    for i in 0..=j {
                        let sym = 0.5 * (scratch[(i, j)] + scratch[(j, i)]);
                        max_asym = max_asym.max((scratch[(i, j)] - scratch[(j, i)]).abs());
                        if sym != 0.0 {
                            let val = if i == j { sym } else { sym * sqrt2 };
                            ablock.push(Triplet {
                                row: block_row0 + idx,
                                col: offsets[vi] + dof,
                                val: -val,
                            });
                        }
                        idx += 1;
                    }
                }
            }
        }
        let coeff_scale = ablock
            .iter()
            .map(|t| t.val.abs())
            .chain(bblock.iter().map(|v| v.abs()))
            .fold(0.0f64, f64::max);
        if max_asym > 1e-8 * coeff_scale.max(1.0) {
            return Err(Error::Build(format!(
                "constraint '{}' is not symmetric in the variables (asymmetry {max_asym:.3e})",
                c.label
            )));
        }
        // Normalize the block by its largest coefficient; the PSD cone is
        // invariant under positive scaling.
        let norm = if coeff_scale > 0.0 { coeff_scale } else { 1.0 };
        for t in &mut ablock {
            t.val /= norm;
        }
        for v in &mut bblock {
            *v /= norm;
        }
        triplets.extend(ablock);
        b.extend_from_slice(&bblock);
        cones.push(SupportedConeT::PSDTriangleConeT(s));
        row += svec_len;
    }

    // Objective.
    let mut q = vec![0.0f64; n];
    for (var, coeff) in &problem.obj_terms {
        let kind = problem.vars[var.0];
        let (vr, vc) = kind.shape();
        if coeff.nrows() != vr || coeff.ncols() != vc {
            return Err(Error::Build(
                "objective coefficient shape does not match variable".into(),
            ));
        }
        for dof in 0..kind.dof() {
            let (k, l) = dof_to_entry(kind, dof);
            let val = match kind {
                VarKind::Symmetric(_) if k != l => coeff[(k, l)] + coeff[(l, k)],
                _ => coeff[(k, l)],
            };
            q[offsets[var.0] + dof] += val;
        }
    }

    let a = csc_from_triplets(row, n, triplets);
    let p = CscMatrix::zeros((n, n));
    let clarabel_settings = DefaultSettingsBuilder::default()
        .verbose(settings.verbose)
        .max_iter(settings.max_iter)
        .time_limit(settings.time_limit_s)
        .tol_gap_abs(settings.tol)
        .tol_gap_rel(settings.tol)
        .tol_feas(settings.tol)
        .build()
        .map_err(|e| Error::Build(format!("solver settings: {e}")))?;
    let mut solver = DefaultSolver::new(&p, &q, &a, &b, &cones, clarabel_settings)
        .map_err(|e| Error::Build(format!("solver setup: {e:?}")))?;
    solver.solve();

    let raw_status = solver.solution.status;
    let x = &solver.solution.x;
    let mut values = Vec::with_capacity(problem.vars.len());
    for (vi, kind) in problem.vars.iter().enumerate() {
        let off = offsets[vi];
        let m = match *kind {
            VarKind::Scalar => DMatrix::from_element(1, 1, x[off]),
            VarKind::Rectangular(r, c) => {
                DMatrix::from_column_slice(r, c, &x[off..off + r * c])
            }
            VarKind::Symmetric(nn) => {
                let mut m = DMatrix::zeros(nn, nn);
                let mut idx = 0usize;
                for j in 0..nn {
                    for i in 0..=j {
                        m[(i, j)] = x[off + idx];
                        m[(j, i)] = x[off + idx];
                        idx += 1;
                    }
                }
                m
            }
        };
        values.push(m);
    }

    let mut objective = problem.obj_constant;
    for (var, coeff) in &problem.obj_terms {
        objective += (coeff.transpose() * &values[var.0]).trace();
    }

    let mut notes = Vec::new();
    let solved = matches!(
        raw_status,
        SolverStatus::Solved | SolverStatus::AlmostSolved
    );
    if raw_status == SolverStatus::AlmostSolved {
        notes.push("solver reported reduced accuracy".to_string());
    }

    // Independent eigenvalue re-check of every constraint block.
    let mut min_eigs = Vec::with_capacity(problem.constraints.len());
    let mut verified = true;
    if solved {
        for c in &problem.constraints {
            let e = c.expr.eval(&values);
            let sym = (&e + e.transpose()) * 0.5;
            let eig = sym.symmetric_eigenvalues();
            let min_eig = eig.iter().copied().fold(f64::INFINITY, f64::min);
            let scale = f64::max(1.0, c.expr.constant.trace().abs());
            if min_eig < -1e-7 * (1.0 + scale) {
                verified = false;
                notes.push(format!(
                    "constraint '{}' violated at solution: min eig {min_eig:.3e}",
                    c.label
                ));
            }
            min_eigs.push(min_eig);
        }
    }

    let status = match raw_status {
        SolverStatus::Solved | SolverStatus::AlmostSolved => {
            if !verified {
                SolveStatus::NumericalFailure
            } else if problem.has_objective {
                SolveStatus::Optimal
            } else {
                SolveStatus::Feasible
            }
        }
        SolverStatus::PrimalInfeasible | SolverStatus::AlmostPrimalInfeasible => {
            SolveStatus::Infeasible
        }
        _ => SolveStatus::NumericalFailure,
    };

    Ok(Solution {
        status,
        values,
        objective,
        diagnostics: Diagnostics {
            solver_status: format!("{raw_status:?}"),
            iterations: solver.info.iterations,
            solve_time_s: solver.info.solve_time,
            constraint_min_eigs: min_eigs,
            notes,
        },
    })
}

/// Report of the standalone post-hoc verification of a solution.
#[derive(Debug, Clone)]
pub struct VerifyReport {
    pub min_eigs: Vec<f64>,
    pub all_satisfied: bool,
}

/// Re-check every constraint of `problem` at the values stored in `solution`
/// by direct eigenvalue computation, independent of the solver backend.
pub fn verify(problem: &SdProblem, solution: &Solution, slack_coeff: f64) -> VerifyReport {
    let mut min_eigs = Vec::with_capacity(problem.constraints.len());
    let mut ok = true;
    for c in &problem.constraints {
        let e = c.expr.eval(&solution.values);
        let sym = (&e + e.transpose()) * 0.5;
        let min_eig = sym
            .symmetric_eigenvalues()
            .iter()
            .copied()
            .fold(f64::INFINITY, f64::min);
        let scale = f64::max(1.0, c.expr.constant.trace().abs());
        if min_eig < -slack_coeff * (1.0 + scale) {
            ok = false;
        }
        min_eigs.push(min_eig);
    }
    VerifyReport {
        min_eigs,
        all_satisfied: ok,
    }
}

/// Find the smallest `gamma` in `[lo, hi]` for which the feasibility problem
/// built by `feasibility_for` is feasible, to within relative tolerance `tol`.
///
/// Assumes feasibility is monotone in `gamma`, `lo` is infeasible (or zero),
/// and `hi` is feasible.
pub fn bisect(
    feasibility_for: impl Fn(f64) -> SdProblem,
    lo: f64,
    hi: f64,
    tol: f64,
    settings: &SolveSettings,
) -> Result<f64> {
    if !(lo <= hi) {
        return Err(Error::Bracket(format!("invalid bracket [{lo}, {hi}]")));
    }
    let is_feasible = |gamma: f64| -> Result<bool> {
        let problem = feasibility_for(gamma);
        let sol = solve(&problem, settings)?;
        Ok(matches!(
            sol.status,
            SolveStatus::Feasible | SolveStatus::Optimal
        ))
    };
    if !is_feasible(hi)? {
        return Err(Error::Bracket(format!(
            "upper endpoint gamma = {hi} is infeasible"
        )));
    }
    let mut lo = lo;
    let mut hi = hi;
    while hi - lo > tol * f64::max(1.0, hi) {
        let mid = 0.5 * (lo + hi);
        if is_feasible(mid)? {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    Ok(hi)
}
