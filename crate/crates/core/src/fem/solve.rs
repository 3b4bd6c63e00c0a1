use faer::linalg::solvers::Solve;
use faer::sparse::linalg::solvers::Llt;
use faer::{Mat, Par, Side};
use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use super::assemble::{assemble_stiffness, load_vector, Boundary, SparseOperator};
use super::sparse::CsrMatrix;
use super::{FineFunction, Source};
use crate::error::{Error, Result};
use crate::field::CoefficientField;

/// Method used for the inner SPD solves.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum InnerSolver {
    /// Sparse Cholesky factorization.
    #[default]
    Cholesky,
    /// Conjugate gradients with Jacobi preconditioning.
    Pcg,
}

/// How a constrained system is solved.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum KktMethod {
    /// Dense factorization below the size threshold, Schur complement above.
    #[default]
    Auto,
    Schur,
    Dense,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SolverOptions {
    /// Relative residual tolerance.
    pub tol: f64,
    pub inner: InnerSolver,
    pub kkt: KktMethod,
    /// Systems with at most this many unknowns (primal plus multipliers) use
    /// the dense path under [`KktMethod::Auto`].
    pub dense_threshold: usize,
    pub max_iter: usize,
}

impl Default for SolverOptions {
    fn default() -> Self {
        Self {
            tol: 1e-10,
            inner: InnerSolver::Cholesky,
            kkt: KktMethod::Auto,
            dense_threshold: 600,
            max_iter: 50_000,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct SolveStats {
    pub iterations: usize,
    /// Relative residual of the primal equation.
    pub residual: f64,
    /// Absolute constraint residual `‖Cu − g‖`.
    pub constraint_residual: f64,
}

fn norm(x: &[f64]) -> f64 {
    x.iter().map(|v| v * v).sum::<f64>().sqrt()
}

fn dot(x: &[f64], y: &[f64]) -> f64 {
    x.iter().zip(y).map(|(a, b)| a * b).sum()
}

/// A reusable solver for `A x = b` with `A` symmetric positive definite.
pub enum SpdFactor {
    Cholesky { a: CsrMatrix, llt: Llt<usize, f64> },
    Pcg { a: CsrMatrix, inv_diag: Vec<f64>, tol: f64, max_iter: usize },
}

impl SpdFactor {
    pub fn new(a: &CsrMatrix, opts: &SolverOptions) -> Result<Self> {
        match opts.inner {
            InnerSolver::Cholesky => {
                faer::set_global_parallelism(Par::Seq);
                let llt = a
                    .to_faer()?
                    .sp_cholesky(Side::Lower)
                    .map_err(|e| Error::Factorization(format!("sparse Cholesky: {e:?}")))?;
                Ok(Self::Cholesky { a: a.clone(), llt })
            }
            InnerSolver::Pcg => {
                let diag = a.diag();
                if let Some(k) = diag.iter().position(|d| !(*d > 0.0)) {
                    return Err(Error::Factorization(format!("non-positive diagonal at dof {k}")));
                }
                Ok(Self::Pcg {
                    a: a.clone(),
                    inv_diag: diag.iter().map(|d| 1.0 / d).collect(),
                    tol: opts.tol,
                    max_iter: opts.max_iter,
                })
            }
        }
    }

    pub fn matrix(&self) -> &CsrMatrix {
        match self {
            Self::Cholesky { a, .. } | Self::Pcg { a, .. } => a,
        }
    }

    pub fn dim(&self) -> usize {
        self.matrix().dim()
    }

    /// Solves one system. Direct solves are followed by iterative refinement
    /// until the relative residual is at most `tol`.
    pub fn solve(&self, b: &[f64], tol: f64) -> Result<(Vec<f64>, SolveStats)> {
        let n = self.dim();
        let bn = norm(b);
        if bn == 0.0 {
            return Ok((vec![0.0; n], SolveStats::default()));
        }
        match self {
            Self::Cholesky { a, llt } => {
                let mut x = vec![0.0; n];
                let mut r = b.to_vec();
                let mut res = 1.0;
                for it in 1..=4 {
                    let mut m = Mat::from_fn(n, 1, |i, _| r[i]);
                    llt.solve_in_place(m.as_mut());
                    for (i, xi) in x.iter_mut().enumerate() {
                        *xi += m[(i, 0)];
                    }
                    let ax = a.matvec(&x);
                    for i in 0..n {
                        r[i] = b[i] - ax[i];
                    }
                    res = norm(&r) / bn;
                    if res <= tol {
                        return Ok((
                            x,
                            SolveStats {
                                iterations: it,
                                residual: res,
                                constraint_residual: 0.0,
                            },
                        ));
                    }
                }
                Err(Error::NotConverged {
                    iterations: 4,
                    residual: res,
                    tol,
                })
            }
            Self::Pcg { a, inv_diag, max_iter, .. } => pcg(a, inv_diag, b, tol, *max_iter),
        }
    }

    /// Solves for every column of `b` (column-major, `n × k`), without
    /// refinement.
    pub fn solve_columns(&self, b: &mut Mat<f64>) -> Result<()> {
        match self {
            Self::Cholesky { llt, .. } => {
                llt.solve_in_place(b.as_mut());
                Ok(())
            }
            Self::Pcg { a, inv_diag, tol, max_iter } => {
                let n = a.dim();
                for c in 0..b.ncols() {
                    let rhs: Vec<f64> = (0..n).map(|i| b[(i, c)]).collect();
                    let (x, _) = pcg(a, inv_diag, &rhs, *tol, *max_iter)?;
                    for (i, v) in x.into_iter().enumerate() {
                        b[(i, c)] = v;
                    }
                }
                Ok(())
            }
        }
    }
}

fn pcg(a: &CsrMatrix, inv_diag: &[f64], b: &[f64], tol: f64, max_iter: usize) -> Result<(Vec<f64>, SolveStats)> {
    let n = a.dim();
    let bn = norm(b);
    let mut x = vec![0.0; n];
    if bn == 0.0 {
        return Ok((x, SolveStats::default()));
    }
    let mut r = b.to_vec();
    let mut z: Vec<f64> = r.iter().zip(inv_diag).map(|(r, d)| r * d).collect();
    let mut p = z.clone();
    let mut rz = dot(&r, &z);
    let mut ap = vec![0.0; n];
    for it in 1..=max_iter {
        a.matvec_into(&p, &mut ap);
        let alpha = rz / dot(&p, &ap);
        for i in 0..n {
            x[i] += alpha * p[i];
            r[i] -= alpha * ap[i];
        }
        let res = norm(&r) / bn;
        if res <= tol {
            return Ok((
                x,
                SolveStats {
                    iterations: it,
                    residual: res,
                    constraint_residual: 0.0,
                },
            ));
        }
        for i in 0..n {
            z[i] = r[i] * inv_diag[i];
        }
        let rz_new = dot(&r, &z);
        let beta = rz_new / rz;
        rz = rz_new;
        for i in 0..n {
            p[i] = z[i] + beta * p[i];
        }
    }
    let res = norm(&r) / bn;
    Err(Error::NotConverged {
        iterations: max_iter,
        residual: res,
        tol,
    })
}

/// Solves `A x = b` on the free dofs of `op`.
pub fn solve_spd(op: &SparseOperator, b: &[f64], opts: &SolverOptions) -> Result<(Vec<f64>, SolveStats)> {
    if b.len() != op.dim() {
        return Err(Error::InvalidField(format!(
            "right-hand side has {} entries for {} dofs",
            b.len(),
            op.dim()
        )));
    }
    if norm(b) == 0.0 {
        return Ok((vec![0.0; op.dim()], SolveStats::default()));
    }
    SpdFactor::new(&op.matrix, opts)?.solve(b, opts.tol)
}

/// Fine-scale finite element solution of `−∇·(κ∇u) = f` with `u = 0` on
/// `∂Ω`.
pub fn solve_fine_reference(
    field: &CoefficientField,
    f: &Source,
    opts: &SolverOptions,
) -> Result<(FineFunction, SolveStats)> {
    let op = assemble_stiffness(field, None, Boundary::Dirichlet)?;
    let fh = f.nodal(*field.grid())?;
    let b = load_vector(&op.dofs, &fh);
    let (x, stats) = solve_spd(&op, &b, opts)?;
    Ok((op.dofs.to_function(&x), stats))
}

/// Sparse linear functional over dofs.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct SparseRow {
    pub idx: Vec<usize>,
    pub val: Vec<f64>,
}

impl SparseRow {
    pub fn apply(&self, u: &[f64]) -> f64 {
        self.idx.iter().zip(&self.val).map(|(i, v)| v * u[*i]).sum()
    }
}

/// Equality constraints `C u = g`; targets are supplied per solve.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ConstraintSet {
    pub rows: Vec<SparseRow>,
    pub labels: Vec<String>,
}

impl ConstraintSet {
    pub fn push(&mut self, row: SparseRow, label: impl Into<String>) {
        self.rows.push(row);
        self.labels.push(label.into());
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn apply(&self, u: &[f64]) -> Vec<f64> {
        self.rows.iter().map(|r| r.apply(u)).collect()
    }

    /// `Cᵀ λ` as a vector of length `n`.
    pub fn apply_transpose(&self, lambda: &[f64], n: usize) -> Vec<f64> {
        let mut out = vec![0.0; n];
        for (r, l) in self.rows.iter().zip(lambda) {
            for (i, v) in r.idx.iter().zip(&r.val) {
                out[*i] += v * l;
            }
        }
        out
    }

    pub fn to_dense(&self, n: usize) -> DMatrix<f64> {
        let mut c = DMatrix::zeros(self.len(), n);
        for (p, r) in self.rows.iter().enumerate() {
            for (i, v) in r.idx.iter().zip(&r.val) {
                c[(p, *i)] += v;
            }
        }
        c
    }
}

/// Lower-triangular Cholesky factor of a small dense SPD matrix (row-major).
#[derive(Debug, Clone)]
pub struct DenseCholesky {
    m: usize,
    l: Vec<f64>,
}

impl DenseCholesky {
    pub fn solve(&self, b: &[f64]) -> Vec<f64> {
        let m = self.m;
        let mut y = b.to_vec();
        for i in 0..m {
            let mut s = y[i];
            for k in 0..i {
                s -= self.l[i * m + k] * y[k];
            }
            y[i] = s / self.l[i * m + i];
        }
        for i in (0..m).rev() {
            let mut s = y[i];
            for k in i + 1..m {
                s -= self.l[k * m + i] * y[k];
            }
            y[i] = s / self.l[i * m + i];
        }
        y
    }
}

/// Cholesky factorization that stops at the first row whose pivot falls
/// below `rel_tol` times its original diagonal, returning that row.
pub fn dense_cholesky_pivoted(s: &[f64], m: usize, rel_tol: f64) -> std::result::Result<DenseCholesky, usize> {
    let mut l = s.to_vec();
    for j in 0..m {
        let orig = s[j * m + j];
        let mut d = l[j * m + j];
        for k in 0..j {
            d -= l[j * m + k] * l[j * m + k];
        }
        if !(orig > 0.0) || !(d > rel_tol * orig) {
            return Err(j);
        }
        let d = d.sqrt();
        l[j * m + j] = d;
        for i in j + 1..m {
            let mut v = l[i * m + j];
            for k in 0..j {
                v -= l[i * m + k] * l[j * m + k];
            }
            l[i * m + j] = v / d;
        }
        for i in 0..j {
            l[i * m + j] = 0.0;
        }
    }
    Ok(DenseCholesky { m, l })
}

/// Relative pivot below which a constraint row counts as dependent.
const RANK_TOL: f64 = 1e-12;

/// Minimizer of `½uᵀAu − bᵀu` subject to `Cu = g`, with multipliers.
#[derive(Debug, Clone, PartialEq)]
pub struct KktSolution {
    pub u: Vec<f64>,
    pub lambda: Vec<f64>,
    pub stats: SolveStats,
}

/// Factorized saddle-point system, reusable for many right-hand sides.
pub struct KktSolver {
    factor: SpdFactor,
    constraints: ConstraintSet,
    /// `W = A⁻¹Cᵀ`, column-major `n × m`.
    w: Vec<f64>,
    schur: DenseCholesky,
    dense: Option<nalgebra::LU<f64, nalgebra::Dyn, nalgebra::Dyn>>,
    tol: f64,
}

impl KktSolver {
    pub fn new(a: &CsrMatrix, constraints: ConstraintSet, opts: &SolverOptions) -> Result<Self> {
        let n = a.dim();
        let m = constraints.len();
        if let Some((p, _)) = constraints
            .rows
            .iter()
            .enumerate()
            .find(|(_, r)| r.idx.iter().any(|&i| i >= n))
        {
            return Err(Error::InvalidField(format!("constraint row {p} refers to a dof outside 0..{n}")));
        }
        let factor = SpdFactor::new(a, opts)?;

        let mut wm = Mat::<f64>::zeros(n, m);
        for (p, r) in constraints.rows.iter().enumerate() {
            for (i, v) in r.idx.iter().zip(&r.val) {
                wm[(*i, p)] += v;
            }
        }
        factor.solve_columns(&mut wm)?;
        let mut w = vec![0.0; n * m];
        for q in 0..m {
            for i in 0..n {
                w[q * n + i] = wm[(i, q)];
            }
        }
        drop(wm);

        let mut s = vec![0.0; m * m];
        for (p, r) in constraints.rows.iter().enumerate() {
            for q in 0..m {
                let col = &w[q * n..(q + 1) * n];
                s[p * m + q] = r.idx.iter().zip(&r.val).map(|(i, v)| v * col[*i]).sum();
            }
        }
        for p in 0..m {
            for q in 0..p {
                let avg = 0.5 * (s[p * m + q] + s[q * m + p]);
                s[p * m + q] = avg;
                s[q * m + p] = avg;
            }
        }
        let schur = dense_cholesky_pivoted(&s, m, RANK_TOL).map_err(|row| Error::RankDeficient {
            row,
            label: constraints.labels.get(row).cloned().unwrap_or_default(),
        })?;

        let use_dense = match opts.kkt {
            KktMethod::Dense => true,
            KktMethod::Schur => false,
            KktMethod::Auto => n + m <= opts.dense_threshold,
        };
        let dense = use_dense.then(|| {
            let mut k = DMatrix::zeros(n + m, n + m);
            k.view_mut((0, 0), (n, n)).copy_from(&a.to_dense());
            let c = constraints.to_dense(n);
            k.view_mut((n, 0), (m, n)).copy_from(&c);
            k.view_mut((0, n), (n, m)).copy_from(&c.transpose());
            k.lu()
        });

        Ok(Self {
            factor,
            constraints,
            w,
            schur,
            dense,
            tol: opts.tol,
        })
    }

    pub fn dim(&self) -> usize {
        self.factor.dim()
    }

    pub fn num_constraints(&self) -> usize {
        self.constraints.len()
    }

    pub fn constraints(&self) -> &ConstraintSet {
        &self.constraints
    }

    pub fn uses_dense_path(&self) -> bool {
        self.dense.is_some()
    }

    fn w_col(&self, q: usize) -> &[f64] {
        let n = self.dim();
        &self.w[q * n..(q + 1) * n]
    }

    /// One Schur-complement solve of `[A Cᵀ; C 0][u; λ] = [b; g]`.
    fn schur_solve(&self, b: Option<&[f64]>, g: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
        let n = self.dim();
        let m = self.num_constraints();
        let y = match b {
            Some(b) if norm(b) > 0.0 => self.factor.solve(b, self.tol)?.0,
            _ => vec![0.0; n],
        };
        let cy = self.constraints.apply(&y);
        let rhs: Vec<f64> = (0..m).map(|p| cy[p] - g[p]).collect();
        let lambda = self.schur.solve(&rhs);
        let mut u = y;
        for (q, l) in lambda.iter().enumerate() {
            if *l != 0.0 {
                for (ui, wi) in u.iter_mut().zip(self.w_col(q)) {
                    *ui -= l * wi;
                }
            }
        }
        Ok((u, lambda))
    }

    fn base_solve(&self, b: Option<&[f64]>, g: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
        match &self.dense {
            Some(lu) => {
                let n = self.dim();
                let m = self.num_constraints();
                let mut rhs = DVector::zeros(n + m);
                if let Some(b) = b {
                    rhs.rows_mut(0, n).copy_from_slice(b);
                }
                rhs.rows_mut(n, m).copy_from_slice(g);
                let x = lu
                    .solve(&rhs)
                    .ok_or_else(|| Error::Factorization("singular KKT matrix".into()))?;
                Ok((x.rows(0, n).iter().copied().collect(), x.rows(n, m).iter().copied().collect()))
            }
            None => self.schur_solve(b, g),
        }
    }

    /// Solves with right-hand side `b` (zero when `None`) and targets `g`,
    /// refining until both residuals meet the tolerance.
    pub fn solve(&self, b: Option<&[f64]>, g: &[f64]) -> Result<KktSolution> {
        let n = self.dim();
        let m = self.num_constraints();
        if g.len() != m || b.is_some_and(|b| b.len() != n) {
            return Err(Error::InvalidField("right-hand side does not match the KKT system".into()));
        }
        let (mut u, mut lambda) = self.base_solve(b, g)?;
        let gn = norm(g);
        let bn = b.map(norm).unwrap_or(0.0);
        let a = self.factor.matrix();
        let mut stats = SolveStats::default();
        for it in 0..=3 {
            let au = a.matvec(&u);
            let ctl = self.constraints.apply_transpose(&lambda, n);
            let r1: Vec<f64> = (0..n)
                .map(|i| b.map(|b| b[i]).unwrap_or(0.0) - au[i] - ctl[i])
                .collect();
            let cu = self.constraints.apply(&u);
            let r2: Vec<f64> = (0..m).map(|p| g[p] - cu[p]).collect();
            let scale = bn.max(norm(&ctl)).max(f64::MIN_POSITIVE);
            stats.residual = norm(&r1) / scale;
            stats.constraint_residual = norm(&r2);
            stats.iterations = it;
            let primal_ok = stats.residual <= self.tol || norm(&r1) == 0.0;
            let dual_ok = stats.constraint_residual <= self.tol * gn.max(1.0);
            if primal_ok && dual_ok {
                return Ok(KktSolution { u, lambda, stats });
            }
            if it == 3 {
                break;
            }
            let (du, dl) = self.base_solve(Some(&r1), &r2)?;
            u.iter_mut().zip(&du).for_each(|(a, d)| *a += d);
            lambda.iter_mut().zip(&dl).for_each(|(a, d)| *a += d);
        }
        Err(Error::NotConverged {
            iterations: stats.iterations,
            residual: stats.residual.max(stats.constraint_residual / gn.max(1.0)),
            tol: self.tol,
        })
    }
}

/// One-shot constrained minimization on the dofs of `op`.
pub fn solve_constrained(
    op: &SparseOperator,
    c: &ConstraintSet,
    b: &[f64],
    g: &[f64],
    opts: &SolverOptions,
) -> Result<KktSolution> {
    KktSolver::new(&op.matrix, c.clone(), opts)?.solve(Some(b), g)
}
