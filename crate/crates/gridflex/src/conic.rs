//! Thin builder around the conic interior-point kernel.
//!
//! Everything numerical in the crate funnels through this one interface:
//! the envelope design program (nonnegative, second-order, and exponential
//! cones) and the plain LPs used by the geometry tools (degenerate cone set).
//! Rows are written in natural form and converted to the kernel's
//! `A x + s = b, s in K` layout here.

use clarabel::algebra::CscMatrix;
use clarabel::solver::{
    DefaultSettingsBuilder, DefaultSolver, ExponentialConeT, IPSolver, NonnegativeConeT,
    SecondOrderConeT, SolverStatus, SupportedConeT, ZeroConeT,
};
use nalgebra::{DMatrix, DVector};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ConicError {
    #[error("problem is primal infeasible")]
    Infeasible,
    #[error("problem is unbounded (dual infeasible)")]
    Unbounded,
    #[error("solver did not converge: {0}")]
    NotConverged(String),
    #[error("solver setup failed: {0}")]
    Setup(String),
}

#[derive(Debug, Clone, Copy)]
pub struct ConicSettings {
    pub tol: f64,
    pub max_iter: u32,
    pub verbose: bool,
    /// Ruiz equilibration in the kernel; disabling it occasionally rescues
    /// borderline-conditioned instances.
    pub equilibrate: bool,
    /// Multiplier on the kernel's static KKT regularization.
    pub static_reg_scale: f64,
}

impl Default for ConicSettings {
    fn default() -> Self {
        ConicSettings {
            tol: 1e-8,
            max_iter: 200,
            verbose: false,
            equilibrate: true,
            static_reg_scale: 1.0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct ConicSolution {
    pub x: Vec<f64>,
    pub objective: f64,
    pub iterations: u32,
    pub solve_time: f64,
    /// Kernel status string; `Solved` or `AlmostSolved`.
    pub status: String,
}

/// Sparse linear terms of an affine expression `terms . x + constant`.
pub type Terms = Vec<(usize, f64)>;

#[derive(Debug, Clone)]
enum Block {
    Zero(usize),
    Nonneg(usize),
    Soc(usize),
    Exp,
}

/// Incremental conic program: `minimize obj . x` subject to pushed blocks.
#[derive(Debug, Default)]
pub struct ConicProgram {
    n_vars: usize,
    obj: Vec<f64>,
    triplets: Vec<(usize, usize, f64)>,
    rhs: Vec<f64>,
    blocks: Vec<Block>,
}

impl ConicProgram {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add_vars(&mut self, count: usize) -> std::ops::Range<usize> {
        let start = self.n_vars;
        self.n_vars += count;
        self.obj.resize(self.n_vars, 0.0);
        start..self.n_vars
    }

    /// Add `coeff` to the minimization objective of `var`.
    pub fn add_objective(&mut self, var: usize, coeff: f64) {
        self.obj[var] += coeff;
    }

    fn push_row(&mut self, terms: &[(usize, f64)], b: f64) {
        let row = self.rhs.len();
        for &(var, coeff) in terms {
            debug_assert!(var < self.n_vars, "term references unadded variable");
            if coeff != 0.0 {
                self.triplets.push((row, var, coeff));
            }
        }
        self.rhs.push(b);
    }

    /// Pushed slack equals the affine value `terms . x + constant`.
    fn push_expr(&mut self, terms: &[(usize, f64)], constant: f64) {
        let negated: Terms = terms.iter().map(|&(v, c)| (v, -c)).collect();
        self.push_row(&negated, constant);
    }

    /// `terms . x <= b`
    pub fn le(&mut self, terms: &[(usize, f64)], b: f64) {
        self.push_row(terms, b);
        self.blocks.push(Block::Nonneg(1));
    }

    /// `terms . x = b`
    pub fn eq(&mut self, terms: &[(usize, f64)], b: f64) {
        self.push_row(terms, b);
        self.blocks.push(Block::Zero(1));
    }

    /// `|| tail ||_2 <= head`; every entry is an affine expression given as
    /// `(terms, constant)` with value `terms . x + constant`.
    pub fn soc(&mut self, head: (&[(usize, f64)], f64), tail: &[(Terms, f64)]) {
        self.push_expr(head.0, head.1);
        for (terms, constant) in tail {
            self.push_expr(terms, *constant);
        }
        self.blocks.push(Block::Soc(1 + tail.len()));
    }

    /// `(x, y, z) in Kexp` (i.e. `y exp(x/y) <= z`), entries affine as in
    /// [`ConicProgram::soc`].
    pub fn exp(
        &mut self,
        x: (&[(usize, f64)], f64),
        y: (&[(usize, f64)], f64),
        z: (&[(usize, f64)], f64),
    ) {
        self.push_expr(x.0, x.1);
        self.push_expr(y.0, y.1);
        self.push_expr(z.0, z.1);
        self.blocks.push(Block::Exp);
    }

    pub fn rows(&self) -> usize {
        self.rhs.len()
    }

    pub fn n_vars(&self) -> usize {
        self.n_vars
    }

    pub fn solve(&self, settings: &ConicSettings) -> Result<ConicSolution, ConicError> {
        let m = self.rhs.len();
        let n = self.n_vars;

        // Triplets to CSC: sort by (col, row), merge duplicates.
        let mut entries = self.triplets.clone();
        entries.sort_by_key(|&(r, c, _)| (c, r));
        let mut merged: Vec<(usize, usize, f64)> = Vec::with_capacity(entries.len());
        for (r, c, v) in entries {
            match merged.last_mut() {
                Some((lr, lc, lv)) if *lr == r && *lc == c => *lv += v,
                _ => merged.push((r, c, v)),
            }
        }
        let mut colptr = vec![0usize; n + 1];
        for &(_, c, _) in &merged {
            colptr[c + 1] += 1;
        }
        for c in 0..n {
            colptr[c + 1] += colptr[c];
        }
        let rowval: Vec<usize> = merged.iter().map(|&(r, _, _)| r).collect();
        let nzval: Vec<f64> = merged.iter().map(|&(_, _, v)| v).collect();
        let a = CscMatrix::new(m, n, colptr, rowval, nzval);
        let p = CscMatrix::<f64>::zeros((n, n));

        // Merge adjacent linear blocks so the kernel sees fewer cones.
        let mut cones: Vec<SupportedConeT<f64>> = Vec::new();
        for block in &self.blocks {
            match (block, cones.last_mut()) {
                (Block::Zero(k), Some(ZeroConeT(last))) => *last += k,
                (Block::Nonneg(k), Some(NonnegativeConeT(last))) => *last += k,
                (Block::Zero(k), _) => cones.push(ZeroConeT(*k)),
                (Block::Nonneg(k), _) => cones.push(NonnegativeConeT(*k)),
                (Block::Soc(k), _) => cones.push(SecondOrderConeT(*k)),
                (Block::Exp, _) => cones.push(ExponentialConeT()),
            }
        }

        let clarabel_settings = DefaultSettingsBuilder::default()
            .verbose(settings.verbose)
            .max_iter(settings.max_iter)
            .tol_gap_abs(settings.tol)
            .tol_gap_rel(settings.tol)
            .tol_feas(settings.tol)
            .equilibrate_enable(settings.equilibrate)
            .static_regularization_constant(1e-8 * settings.static_reg_scale)
            .build()
            .map_err(|e| ConicError::Setup(e.to_string()))?;

        let mut solver =
            DefaultSolver::new(&p, &self.obj, &a, &self.rhs, &cones, clarabel_settings)
                .map_err(|e| ConicError::Setup(format!("{e:?}")))?;
        solver.solve();

        let status = solver.solution.status;
        match status {
            SolverStatus::Solved | SolverStatus::AlmostSolved => Ok(ConicSolution {
                x: solver.solution.x.clone(),
                objective: solver.solution.obj_val,
                iterations: solver.solution.iterations,
                solve_time: solver.solution.solve_time,
                status: format!("{status:?}"),
            }),
            SolverStatus::PrimalInfeasible | SolverStatus::AlmostPrimalInfeasible => {
                Err(ConicError::Infeasible)
            }
            SolverStatus::DualInfeasible | SolverStatus::AlmostDualInfeasible => {
                Err(ConicError::Unbounded)
            }
            other => Err(ConicError::NotConverged(format!("{other:?}"))),
        }
    }
}

#[derive(Debug, Clone)]
pub struct LpSolution {
    pub x: DVector<f64>,
    pub objective: f64,
}

/// `minimize c . x` over `G x <= h` (and optional `E x = f`), solved by the
/// same kernel with a degenerate cone set.
pub fn solve_lp(
    c: &DVector<f64>,
    g: &DMatrix<f64>,
    h: &DVector<f64>,
    eq: Option<(&DMatrix<f64>, &DVector<f64>)>,
    settings: &ConicSettings,
) -> Result<LpSolution, ConicError> {
    let n = c.len();
    let mut prog = ConicProgram::new();
    prog.add_vars(n);
    for (i, &ci) in c.iter().enumerate() {
        prog.add_objective(i, ci);
    }
    if let Some((e_mat, f_vec)) = eq {
        for row in 0..e_mat.nrows() {
            let terms: Terms = (0..n)
                .filter(|&j| e_mat[(row, j)] != 0.0)
                .map(|j| (j, e_mat[(row, j)]))
                .collect();
            prog.eq(&terms, f_vec[row]);
        }
    }
    for row in 0..g.nrows() {
        let terms: Terms = (0..n)
            .filter(|&j| g[(row, j)] != 0.0)
            .map(|j| (j, g[(row, j)]))
            .collect();
        prog.le(&terms, h[row]);
    }
    let sol = prog.solve(settings)?;
    Ok(LpSolution {
        x: DVector::from_vec(sol.x),
        objective: sol.objective,
    })
}
