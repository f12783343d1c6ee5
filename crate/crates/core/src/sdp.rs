//! Small dense affine semidefinite programs.
//!
//! A problem is a set of symmetric matrix blocks `F_b(x) = F_b0 + Σ x_i F_bi`
//! that must be positive semidefinite, affine equalities and scalar
//! inequalities on `x`, and the objective `max  t + cᵀx` where `t` is a common
//! slack subtracted from every block flagged as a margin block. The solver is
//! an infeasible-start primal-dual interior-point method (HKM direction with a
//! Mehrotra predictor-corrector) applied to the LMI in dual form.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use nalgebra::Cholesky;
use rayon::prelude::*;
use thiserror::Error;

use crate::numkit::{min_eig, Matrix, Vector};

/// `F(x) = constant + Σ x_var · coeff`, all symmetric.
#[derive(Debug, Clone, PartialEq)]
pub struct AffineMatrix {
    pub constant: Matrix,
    pub terms: Vec<(usize, Matrix)>,
}

impl AffineMatrix {
    pub fn zeros(dim: usize) -> Self {
        AffineMatrix {
            constant: Matrix::zeros(dim, dim),
            terms: Vec::new(),
        }
    }

    pub fn constant(m: Matrix) -> Self {
        assert!(m.is_square(), "affine matrix must be square");
        AffineMatrix {
            constant: sym(&m),
            terms: Vec::new(),
        }
    }

    pub fn dim(&self) -> usize {
        self.constant.nrows()
    }

    pub fn add_term(&mut self, var: usize, coeff: Matrix) {
        assert_eq!(coeff.shape(), self.constant.shape(), "coefficient shape mismatch");
        if coeff.iter().any(|v| *v != 0.0) {
            self.terms.push((var, sym(&coeff)));
        }
    }

    pub fn add_constant(&mut self, m: &Matrix) {
        self.constant += sym(m);
    }

    /// `self += scale · other`
    pub fn add_scaled(&mut self, other: &AffineMatrix, scale: f64) {
        assert_eq!(self.dim(), other.dim(), "affine matrix dims differ");
        self.constant += &other.constant * scale;
        for (v, m) in &other.terms {
            self.terms.push((*v, m * scale));
        }
    }

    pub fn scaled(&self, scale: f64) -> AffineMatrix {
        let mut out = AffineMatrix::zeros(self.dim());
        out.add_scaled(self, scale);
        out
    }

    pub fn eval(&self, x: &[f64]) -> Matrix {
        let mut out = self.constant.clone();
        for (v, m) in &self.terms {
            out += m * x[*v];
        }
        out
    }

    /// Renumbers every variable `i` as `i + offset`.
    pub fn shifted(&self, offset: usize) -> AffineMatrix {
        AffineMatrix {
            constant: self.constant.clone(),
            terms: self.terms.iter().map(|(v, m)| (v + offset, m.clone())).collect(),
        }
    }

    /// `Gᵀ F(x) G`
    pub fn congruence(&self, g: &Matrix) -> AffineMatrix {
        let gt = g.transpose();
        AffineMatrix {
            constant: sym(&(&gt * &self.constant * g)),
            terms: self
                .terms
                .iter()
                .map(|(v, m)| (*v, sym(&(&gt * m * g))))
                .filter(|(_, m)| m.iter().any(|e| *e != 0.0))
                .collect(),
        }
    }

    /// Places `F` as the principal block starting at `offset` of a `dim × dim` zero matrix.
    pub fn embed(&self, dim: usize, offset: usize) -> AffineMatrix {
        let k = self.dim();
        assert!(offset + k <= dim, "embedding out of range");
        let place = |m: &Matrix| {
            let mut out = Matrix::zeros(dim, dim);
            out.view_mut((offset, offset), (k, k)).copy_from(m);
            out
        };
        AffineMatrix {
            constant: place(&self.constant),
            terms: self.terms.iter().map(|(v, m)| (*v, place(m))).collect(),
        }
    }

    /// Stacks several affine matrices block-diagonally.
    pub fn block_diag(parts: &[&AffineMatrix]) -> AffineMatrix {
        let dim: usize = parts.iter().map(|p| p.dim()).sum();
        let mut out = AffineMatrix::zeros(dim);
        let mut off = 0;
        for p in parts {
            out.add_scaled(&p.embed(dim, off), 1.0);
            off += p.dim();
        }
        out
    }

    pub fn max_var(&self) -> Option<usize> {
        self.terms.iter().map(|(v, _)| *v).max()
    }
}

fn sym(m: &Matrix) -> Matrix {
    (m + m.transpose()) * 0.5
}

/// `constant + Σ coeff · x_var`
#[derive(Debug, Clone, PartialEq, Default)]
pub struct LinearExpr {
    pub constant: f64,
    pub terms: Vec<(usize, f64)>,
}

impl LinearExpr {
    pub fn new(constant: f64, terms: Vec<(usize, f64)>) -> Self {
        LinearExpr { constant, terms }
    }

    pub fn eval(&self, x: &[f64]) -> f64 {
        self.constant + self.terms.iter().map(|(v, c)| c * x[*v]).sum::<f64>()
    }

    pub fn shifted(&self, offset: usize) -> LinearExpr {
        LinearExpr {
            constant: self.constant,
            terms: self.terms.iter().map(|(v, c)| (v + offset, *c)).collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PsdBlock {
    pub name: String,
    pub expr: AffineMatrix,
    /// Subtract the common slack `t·I` from this block.
    pub margin: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AffineSdp {
    pub num_vars: usize,
    pub blocks: Vec<PsdBlock>,
    /// Each expression must equal zero.
    pub equalities: Vec<LinearExpr>,
    /// Each expression must be nonnegative.
    pub inequalities: Vec<LinearExpr>,
    /// Linear part `c` of the objective `t + cᵀx`.
    pub objective: Vec<(usize, f64)>,
    pub margin_weight: f64,
}

impl AffineSdp {
    pub fn new(num_vars: usize) -> Self {
        AffineSdp {
            num_vars,
            blocks: Vec::new(),
            equalities: Vec::new(),
            inequalities: Vec::new(),
            objective: Vec::new(),
            margin_weight: 1.0,
        }
    }

    /// Reserves `count` fresh variables and returns the first index.
    pub fn add_vars(&mut self, count: usize) -> usize {
        let first = self.num_vars;
        self.num_vars += count;
        first
    }

    pub fn add_block(&mut self, name: impl Into<String>, expr: AffineMatrix, margin: bool) {
        self.blocks.push(PsdBlock {
            name: name.into(),
            expr,
            margin,
        });
    }

    pub fn add_equality(&mut self, e: LinearExpr) {
        self.equalities.push(e);
    }

    pub fn add_inequality(&mut self, e: LinearExpr) {
        self.inequalities.push(e);
    }

    pub fn validate(&self) -> Result<(), SdpError> {
        for b in &self.blocks {
            let d = b.expr.dim();
            if d == 0 {
                return Err(SdpError::Malformed(format!("block {:?} has dimension 0", b.name)));
            }
            if b.expr.terms.iter().any(|(v, _)| *v >= self.num_vars) {
                return Err(SdpError::Malformed(format!("variable out of range in block {:?}", b.name)));
            }
            for m in std::iter::once(&b.expr.constant).chain(b.expr.terms.iter().map(|(_, m)| m)) {
                if m.shape() != (d, d) || (m - m.transpose()).amax() > 1e-12 * (1.0 + m.amax()) {
                    return Err(SdpError::Malformed(format!("non-symmetric coefficient in block {:?}", b.name)));
                }
                if m.iter().any(|x| !x.is_finite()) {
                    return Err(SdpError::Malformed(format!("non-finite data in block {:?}", b.name)));
                }
            }
        }
        let lin = self
            .equalities
            .iter()
            .chain(self.inequalities.iter())
            .flat_map(|e| e.terms.iter())
            .chain(self.objective.iter());
        for (v, c) in lin {
            if *v >= self.num_vars || !c.is_finite() {
                return Err(SdpError::Malformed(format!("bad linear term on variable {v}")));
            }
        }
        Ok(())
    }

    /// Plain-text dump: a header line `sdp <vars> <blocks> <eqs> <ineqs>`,
    /// then per block `block <name> <dim> <margin 0|1>`, a `const` matrix and
    /// one `coef <var>` matrix per term (rows of space-separated numbers),
    /// then `eq`/`ineq` lines `<constant> <var>:<coeff> ...` and an `obj` line.
    pub fn dump_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(
            s,
            "sdp {} {} {} {}",
            self.num_vars,
            self.blocks.len(),
            self.equalities.len(),
            self.inequalities.len()
        );
        let write_mat = |s: &mut String, m: &Matrix| {
            for i in 0..m.nrows() {
                let row: Vec<String> = (0..m.ncols()).map(|j| format!("{:.17e}", m[(i, j)])).collect();
                let _ = writeln!(s, "{}", row.join(" "));
            }
        };
        for b in &self.blocks {
            let _ = writeln!(s, "block {} {} {}", b.name.replace(' ', "_"), b.expr.dim(), b.margin as u8);
            let _ = writeln!(s, "const");
            write_mat(&mut s, &b.expr.constant);
            for (v, m) in &b.expr.terms {
                let _ = writeln!(s, "coef {v}");
                write_mat(&mut s, m);
            }
        }
        let lin = |tag: &str, e: &LinearExpr| {
            let mut line = format!("{tag} {:.17e}", e.constant);
            for (v, c) in &e.terms {
                let _ = write!(line, " {v}:{c:.17e}");
            }
            line
        };
        for e in &self.equalities {
            let _ = writeln!(s, "{}", lin("eq", e));
        }
        for e in &self.inequalities {
            let _ = writeln!(s, "{}", lin("ineq", e));
        }
        let _ = writeln!(
            s,
            "{}",
            lin(
                "obj",
                &LinearExpr::new(self.margin_weight, self.objective.clone())
            )
        );
        s
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SdpOptions {
    pub max_iterations: usize,
    /// Relative primal/dual residual and duality-gap target.
    pub tolerance: f64,
    /// Looser target accepted when progress stalls.
    pub fallback_tolerance: f64,
    pub step_fraction: f64,
    /// `t*` below `-infeasible_margin` is reported as infeasible.
    pub infeasible_margin: f64,
    /// Allowed violation of non-margin blocks, inequalities and equalities.
    pub feasibility_tolerance: f64,
    /// Iterates beyond this norm are treated as divergence.
    pub divergence_bound: f64,
}

impl Default for SdpOptions {
    fn default() -> Self {
        SdpOptions {
            max_iterations: 150,
            tolerance: 1e-9,
            fallback_tolerance: 1e-6,
            step_fraction: 0.95,
            infeasible_margin: 1e-6,
            feasibility_tolerance: 1e-7,
            divergence_bound: 1e12,
        }
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SdpError {
    #[error("malformed problem: {0}")]
    Malformed(String),
    #[error("infeasible: best margin {margin:e}")]
    Infeasible { margin: f64 },
    #[error("objective unbounded above")]
    Unbounded,
    #[error("numerical failure after {iterations} iterations: {reason} (primal residual {primal_residual:e}, dual residual {dual_residual:e}, gap {gap:e})")]
    NumericalFailure {
        iterations: usize,
        reason: String,
        primal_residual: f64,
        dual_residual: f64,
        gap: f64,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct SdpSolution {
    pub x: Vec<f64>,
    /// Smallest eigenvalue over the margin blocks at `x` (`+∞` if there are none).
    pub margin: f64,
    pub objective: f64,
    pub iterations: usize,
    pub block_min_eigs: Vec<f64>,
    pub max_equality_residual: f64,
    pub min_inequality: f64,
    /// Relative residuals at termination.
    pub primal_residual: f64,
    pub dual_residual: f64,
    pub gap: f64,
    /// False when the solver stopped early and returned its best feasible
    /// iterate; `x` is then valid but `margin` may be below the optimum.
    pub converged: bool,
}

impl SdpSolution {
    pub fn value(&self, var: usize) -> f64 {
        self.x[var]
    }
}

/// Recomputes block eigenvalues and constraint residuals at `x`, independently
/// of the solver state.
pub fn evaluate(problem: &AffineSdp, x: &[f64]) -> (f64, Vec<f64>, f64, f64) {
    let eigs: Vec<f64> = problem.blocks.iter().map(|b| min_eig(&b.expr.eval(x))).collect();
    let margin = problem
        .blocks
        .iter()
        .zip(&eigs)
        .filter(|(b, _)| b.margin)
        .map(|(_, e)| *e)
        .fold(f64::INFINITY, f64::min);
    let eq = problem.equalities.iter().map(|e| e.eval(x).abs()).fold(0.0, f64::max);
    let ineq = problem.inequalities.iter().map(|e| e.eval(x)).fold(f64::INFINITY, f64::min);
    (margin, eigs, eq, ineq)
}

/// Reduced dual-form block: `S = c − Σ y_j a_j ⪰ 0`.
struct DualBlock {
    c: Matrix,
    a: Vec<(usize, Matrix)>,
}

/// `x = x0 + T z`, stored per original variable.
struct Reduction {
    x0: Vec<f64>,
    map: Vec<Vec<(usize, f64)>>,
    reduced: usize,
}

fn eliminate_equalities(problem: &AffineSdp) -> Result<Reduction, SdpError> {
    let n = problem.num_vars;
    let mut in_eq = vec![false; n];
    for e in &problem.equalities {
        for (v, c) in &e.terms {
            if *c != 0.0 {
                in_eq[*v] = true;
            }
        }
    }
    let eq_vars: Vec<usize> = (0..n).filter(|i| in_eq[*i]).collect();
    let mut map = vec![Vec::new(); n];
    let mut x0 = vec![0.0; n];
    let mut next = 0;
    for i in 0..n {
        if !in_eq[i] {
            map[i].push((next, 1.0));
            next += 1;
        }
    }
    if eq_vars.is_empty() {
        return Ok(Reduction { x0, map, reduced: next });
    }
    let k = problem.equalities.len();
    let ne = eq_vars.len();
    let col: BTreeMap<usize, usize> = eq_vars.iter().enumerate().map(|(j, v)| (*v, j)).collect();
    let rows = k.max(ne);
    let mut e = Matrix::zeros(rows, ne);
    let mut f = Vector::zeros(rows);
    for (r, ex) in problem.equalities.iter().enumerate() {
        for (v, c) in &ex.terms {
            if let Some(j) = col.get(v) {
                e[(r, *j)] += c;
            }
        }
        f[r] = -ex.constant;
    }
    let svd = e.clone().svd(true, true);
    let u = svd.u.as_ref().expect("u requested");
    let vt = svd.v_t.as_ref().expect("v_t requested");
    let smax = svd.singular_values.max();
    let thresh = 1e-10 * smax.max(1.0);
    let mut xe = Vector::zeros(ne);
    let mut null_cols = Vec::new();
    for (idx, s) in svd.singular_values.iter().enumerate() {
        let v = vt.row(idx).transpose();
        if *s > thresh {
            xe += v * (u.column(idx).dot(&f) / s);
        } else {
            null_cols.push(v);
        }
    }
    let resid = (&e * &xe - &f).amax();
    if resid > 1e-8 * (1.0 + f.amax()) {
        return Err(SdpError::Infeasible {
            margin: f64::NEG_INFINITY,
        });
    }
    for (j, v) in eq_vars.iter().enumerate() {
        x0[*v] = xe[j];
    }
    for ncol in &null_cols {
        for (j, v) in eq_vars.iter().enumerate() {
            if ncol[j].abs() > 1e-15 {
                map[*v].push((next, ncol[j]));
            }
        }
        next += 1;
    }
    Ok(Reduction { x0, map, reduced: next })
}

fn to_dual_block(expr: &AffineMatrix, red: &Reduction, t_index: Option<usize>) -> DualBlock {
    let d = expr.dim();
    let mut c = expr.constant.clone();
    let mut acc: BTreeMap<usize, Matrix> = BTreeMap::new();
    for (v, m) in &expr.terms {
        c += m * red.x0[*v];
        for (j, coef) in &red.map[*v] {
            let entry = acc.entry(*j).or_insert_with(|| Matrix::zeros(d, d));
            *entry -= m * *coef;
        }
    }
    if let Some(t) = t_index {
        acc.insert(t, Matrix::identity(d, d));
    }
    DualBlock {
        c: sym(&c),
        a: acc
            .into_iter()
            .filter(|(_, m)| m.iter().any(|x| *x != 0.0))
            .map(|(j, m)| (j, sym(&m)))
            .collect(),
    }
}

fn cholesky_inverse(s: &Matrix) -> Option<Matrix> {
    Cholesky::new(s.clone()).map(|c| c.inverse())
}

/// Largest `α` with `X + α D ⪰ 0` for `X ≻ 0`.
fn max_step(x: &Matrix, d: &Matrix) -> f64 {
    if x.nrows() == 1 {
        return if d[(0, 0)] < 0.0 { -x[(0, 0)] / d[(0, 0)] } else { f64::INFINITY };
    }
    let l = match Cholesky::new(x.clone()) {
        Some(c) => c.l(),
        None => return 0.0,
    };
    let tmp = l.solve_lower_triangular(d).expect("triangular solve");
    let w = l.solve_lower_triangular(&tmp.transpose()).expect("triangular solve");
    let lam = sym(&w).symmetric_eigenvalues().min();
    if lam < 0.0 {
        -1.0 / lam
    } else {
        f64::INFINITY
    }
}

fn trace_prod(a: &Matrix, b: &Matrix) -> f64 {
    // both symmetric
    a.dot(b)
}

struct Ipm<'a> {
    blocks: &'a [DualBlock],
    m: usize,
    active: Vec<bool>,
}

impl Ipm<'_> {
    fn apply_adjoint(&self, k: usize, y: &Vector) -> Matrix {
        let blk = &self.blocks[k];
        let mut out = Matrix::zeros(blk.c.nrows(), blk.c.ncols());
        for (j, a) in &blk.a {
            out += a * y[*j];
        }
        out
    }

    fn apply_op(&self, xs: &[Matrix]) -> Vector {
        let mut out = Vector::zeros(self.m);
        for (blk, x) in self.blocks.iter().zip(xs) {
            for (j, a) in &blk.a {
                out[*j] += trace_prod(a, x);
            }
        }
        out
    }

    fn schur(&self, xs: &[Matrix], sinv: &[Matrix]) -> Matrix {
        let m = self.m;
        let mm = (0..self.blocks.len())
            .into_par_iter()
            .map(|k| {
                let (blk, x, si) = (&self.blocks[k], &xs[k], &sinv[k]);
                let mut mm = Matrix::zeros(m, m);
                let us: Vec<Matrix> = blk.a.iter().map(|(_, a)| x * a * si).collect();
                for (p, (i, _)) in blk.a.iter().enumerate() {
                    for (q, (j, aj)) in blk.a.iter().enumerate().skip(p) {
                        let v = aj.dot(&us[p]);
                        mm[(*i, *j)] += v;
                        if p != q {
                            mm[(*j, *i)] += v;
                        }
                    }
                }
                mm
            })
            .reduce(|| Matrix::zeros(m, m), |a, b| a + b);
        (&mm + mm.transpose()) * 0.5
    }

    fn solve_schur(&self, mm: &Matrix, rhs: &Vector) -> Option<Vector> {
        let mut mm = mm.clone();
        for i in 0..self.m {
            if !self.active[i] {
                mm[(i, i)] = 1.0;
            }
        }
        let mut rhs = rhs.clone();
        for i in 0..self.m {
            if !self.active[i] {
                rhs[i] = 0.0;
            }
        }
        let scale = (0..self.m).map(|i| mm[(i, i)].abs()).fold(0.0, f64::max).max(1e-300);
        let mut reg = 0.0;
        for _ in 0..8 {
            let mut trial = mm.clone();
            if reg > 0.0 {
                for i in 0..self.m {
                    trial[(i, i)] += reg;
                }
            }
            if let Some(c) = Cholesky::new(trial) {
                let sol = c.solve(&rhs);
                if sol.iter().all(|v| v.is_finite()) {
                    return Some(sol);
                }
            }
            reg = if reg == 0.0 { 1e-14 * scale } else { reg * 100.0 };
        }
        mm.lu().solve(&rhs)
    }
}

struct Residuals {
    pinf: f64,
    dinf: f64,
    gap: f64,
    pobj: f64,
    dobj: f64,
}

/// Solves `max t·margin_weight + cᵀx` subject to the problem's constraints.
pub fn solve_max_margin(problem: &AffineSdp, opts: &SdpOptions) -> Result<SdpSolution, SdpError> {
    problem.validate()?;
    let red = eliminate_equalities(problem)?;
    let has_margin = problem.blocks.iter().any(|b| b.margin) && problem.margin_weight != 0.0;
    let t_index = has_margin.then_some(red.reduced);
    let m = red.reduced + has_margin as usize;

    let mut dual_blocks: Vec<DualBlock> = problem
        .blocks
        .iter()
        .map(|b| to_dual_block(&b.expr, &red, if b.margin && has_margin { t_index } else { None }))
        .collect();
    for ineq in &problem.inequalities {
        let mut am = AffineMatrix::constant(Matrix::from_element(1, 1, ineq.constant));
        for (v, c) in &ineq.terms {
            am.add_term(*v, Matrix::from_element(1, 1, *c));
        }
        dual_blocks.push(to_dual_block(&am, &red, None));
    }

    let mut b = Vector::zeros(m);
    for (v, c) in &problem.objective {
        for (j, coef) in &red.map[*v] {
            b[*j] += c * coef;
        }
    }
    if let Some(t) = t_index {
        b[t] += problem.margin_weight;
    }

    let mut active = vec![false; m];
    for blk in &dual_blocks {
        for (j, _) in &blk.a {
            active[*j] = true;
        }
    }
    if (0..m).any(|j| !active[j] && b[j].abs() > 0.0) {
        return Err(SdpError::Unbounded);
    }

    let out = if m == 0 || dual_blocks.is_empty() {
        IpmOutcome {
            y: Vector::zeros(m),
            iterations: 0,
            pinf: 0.0,
            dinf: 0.0,
            gap: 0.0,
            upper_bound: None,
            converged: true,
        }
    } else {
        run_ipm(&dual_blocks, b, active, opts)?
    };

    let mut x = red.x0.clone();
    for (i, xi) in x.iter_mut().enumerate() {
        for (j, coef) in &red.map[i] {
            *xi += coef * out.y[*j];
        }
    }
    finish(problem, x, opts, &out)
}

struct IpmOutcome {
    y: Vector,
    iterations: usize,
    pinf: f64,
    dinf: f64,
    gap: f64,
    /// Objective of a nearly feasible primal iterate, bounding the optimum.
    upper_bound: Option<f64>,
    converged: bool,
}

fn run_ipm(blocks: &[DualBlock], b: Vector, active: Vec<bool>, opts: &SdpOptions) -> Result<IpmOutcome, SdpError> {
    let m = b.len();
    let ipm = Ipm {
        blocks,
        m,
        active,
    };
    let n_tot: usize = blocks.iter().map(|k| k.c.nrows()).sum();
    let mut a_norm = vec![0.0f64; m];
    for blk in blocks {
        for (j, a) in &blk.a {
            a_norm[*j] += a.norm_squared();
        }
    }
    let a_norm: Vec<f64> = a_norm.into_iter().map(f64::sqrt).collect();
    let sqrt_n = (n_tot as f64).sqrt();
    let xi = (0..m)
        .map(|j| (1.0 + b[j].abs()) / (1.0 + a_norm[j]))
        .fold(10.0f64.max(sqrt_n), f64::max);
    let c_norm = blocks.iter().map(|k| k.c.norm_squared()).sum::<f64>().sqrt();
    let eta = a_norm.iter().copied().fold(10.0f64.max(sqrt_n).max(c_norm), f64::max);
    let b_norm = b.norm();

    let mut xs: Vec<Matrix> = blocks.iter().map(|k| Matrix::identity(k.c.nrows(), k.c.nrows()) * xi).collect();
    let mut ss: Vec<Matrix> = blocks.iter().map(|k| Matrix::identity(k.c.nrows(), k.c.nrows()) * eta).collect();
    let mut y = Vector::zeros(m);

    let residuals = |xs: &[Matrix], ss: &[Matrix], y: &Vector| -> (Residuals, Vector, Vec<Matrix>) {
        let rp = &b - ipm.apply_op(xs);
        let rd: Vec<Matrix> = (0..blocks.len())
            .map(|k| &blocks[k].c - &ss[k] - ipm.apply_adjoint(k, y))
            .collect();
        let pobj: f64 = blocks.iter().zip(xs).map(|(k, x)| trace_prod(&k.c, x)).sum();
        let dobj = b.dot(y);
        let rd_norm = rd.iter().map(|r| r.norm_squared()).sum::<f64>().sqrt();
        (
            Residuals {
                pinf: rp.norm() / (1.0 + b_norm),
                dinf: rd_norm / (1.0 + c_norm),
                gap: (pobj - dobj).abs() / (1.0 + pobj.abs() + dobj.abs()),
                pobj,
                dobj,
            },
            rp,
            rd,
        )
    };

    let outcome = |y: &Vector, iterations: usize, res: &Residuals, converged: bool| IpmOutcome {
        y: y.clone(),
        iterations,
        pinf: res.pinf,
        dinf: res.dinf,
        gap: res.gap,
        upper_bound: (res.pinf < opts.fallback_tolerance).then_some(res.pobj),
        converged,
    };
    // best dual-feasible iterate and the tightest primal bound seen so far
    let mut best: Option<(f64, IpmOutcome)> = None;
    let mut bound = f64::INFINITY;
    let mut last = None;
    let mut stalls = 0;
    for iter in 0..opts.max_iterations {
        let (res, rp, rd) = residuals(&xs, &ss, &y);
        if res.pinf < opts.fallback_tolerance {
            bound = bound.min(res.pobj);
        }
        if res.dinf < opts.fallback_tolerance && best.as_ref().is_none_or(|(d, _)| res.dobj >= *d) {
            best = Some((res.dobj, outcome(&y, iter, &res, false)));
        }
        let give_up = |best: Option<(f64, IpmOutcome)>, err: SdpError| match best {
            Some((_, mut o)) => {
                o.upper_bound = bound.is_finite().then_some(bound);
                Ok(o)
            }
            None => Err(err),
        };
        let fail = |reason: &str, res: &Residuals| SdpError::NumericalFailure {
            iterations: iter,
            reason: reason.to_string(),
            primal_residual: res.pinf,
            dual_residual: res.dinf,
            gap: res.gap,
        };
        if res.pinf < opts.tolerance && res.dinf < opts.tolerance && res.gap < opts.tolerance {
            return Ok(outcome(&y, iter, &res, true));
        }
        let x_size = xs.iter().map(|x| x.trace()).fold(0.0, f64::max);
        if x_size > opts.divergence_bound && res.pinf < opts.fallback_tolerance && res.pobj / x_size < -1e-12 {
            // primal ray: the LMI set is empty
            return Err(SdpError::Infeasible {
                margin: f64::NEG_INFINITY,
            });
        }
        if res.dobj > opts.divergence_bound && res.dinf < opts.fallback_tolerance {
            return Err(SdpError::Unbounded);
        }
        if y.amax() > opts.divergence_bound * 1e3 {
            return give_up(best, fail("dual iterates diverged", &res));
        }

        let sinv: Vec<Matrix> = match ss.iter().map(cholesky_inverse).collect::<Option<Vec<_>>>() {
            Some(v) => v,
            None => return give_up(best, fail("slack matrix lost definiteness", &res)),
        };
        let mu: f64 = xs.iter().zip(&ss).map(|(x, s)| trace_prod(x, s)).sum::<f64>() / n_tot as f64;
        let mm = ipm.schur(&xs, &sinv);

        let direction = |g: Vec<Matrix>| -> Option<(Vector, Vec<Matrix>, Vec<Matrix>)> {
            let rhs = &rp - ipm.apply_op(&g);
            let dy = ipm.solve_schur(&mm, &rhs)?;
            let mut dss = Vec::with_capacity(blocks.len());
            let mut dxs = Vec::with_capacity(blocks.len());
            for k in 0..blocks.len() {
                let ds = &rd[k] - ipm.apply_adjoint(k, &dy);
                let dx = &g[k] + &xs[k] * (ipm.apply_adjoint(k, &dy)) * &sinv[k];
                dxs.push(sym(&dx));
                dss.push(sym(&ds));
            }
            Some((dy, dxs, dss))
        };

        let base: Vec<Matrix> = (0..blocks.len())
            .map(|k| -&xs[k] - &xs[k] * &rd[k] * &sinv[k])
            .collect();
        let Some((_, dx_a, ds_a)) = direction(base.clone()) else {
            return give_up(best, fail("Schur system singular", &res));
        };
        let step = |xs: &[Matrix], d: &[Matrix]| xs.iter().zip(d).map(|(x, dx)| max_step(x, dx)).fold(f64::INFINITY, f64::min);
        let ap = step(&xs, &dx_a).min(1.0);
        let ad = step(&ss, &ds_a).min(1.0);
        let mu_aff: f64 = (0..blocks.len())
            .map(|k| trace_prod(&(&xs[k] + &dx_a[k] * ap), &(&ss[k] + &ds_a[k] * ad)))
            .sum::<f64>()
            / n_tot as f64;
        let sigma = (mu_aff / mu).clamp(0.0, 1.0).powi(3);

        let corrected: Vec<Matrix> = (0..blocks.len())
            .map(|k| &base[k] + &sinv[k] * (sigma * mu) - &dx_a[k] * &ds_a[k] * &sinv[k])
            .collect();
        let Some((dy, dxs, dss)) = direction(corrected) else {
            return give_up(best, fail("Schur system singular", &res));
        };
        let ap = (opts.step_fraction * step(&xs, &dxs)).min(1.0);
        let ad = (opts.step_fraction * step(&ss, &dss)).min(1.0);
        for k in 0..blocks.len() {
            xs[k] += &dxs[k] * ap;
            ss[k] += &dss[k] * ad;
            xs[k] = sym(&xs[k]);
            ss[k] = sym(&ss[k]);
        }
        y += dy * ad;

        if ap.min(ad) < 1e-3 {
            stalls += 1;
        } else {
            stalls = 0;
        }
        last = Some((iter, res));
        if stalls >= 5 {
            break;
        }
    }
    let (res, _, _) = residuals(&xs, &ss, &y);
    let iters = last.map(|l: (usize, Residuals)| l.0 + 1).unwrap_or(0);
    if res.pinf < opts.fallback_tolerance && res.dinf < opts.fallback_tolerance && res.gap < opts.fallback_tolerance {
        return Ok(outcome(&y, iters, &res, true));
    }
    if res.dinf < opts.fallback_tolerance && res.pobj < -1e6 * (1.0 + res.dobj.abs()) {
        return Err(SdpError::Infeasible {
            margin: f64::NEG_INFINITY,
        });
    }
    let err = SdpError::NumericalFailure {
        iterations: iters,
        reason: "iteration limit reached".into(),
        primal_residual: res.pinf,
        dual_residual: res.dinf,
        gap: res.gap,
    };
    if res.pinf < opts.fallback_tolerance {
        bound = bound.min(res.pobj);
    }
    if res.dinf < opts.fallback_tolerance && best.as_ref().is_none_or(|(d, _)| res.dobj >= *d) {
        best = Some((res.dobj, outcome(&y, iters, &res, false)));
    }
    match best {
        Some((_, mut o)) => {
            o.iterations = iters;
            o.upper_bound = bound.is_finite().then_some(bound);
            Ok(o)
        }
        None => Err(err),
    }
}

fn finish(problem: &AffineSdp, x: Vec<f64>, opts: &SdpOptions, out: &IpmOutcome) -> Result<SdpSolution, SdpError> {
    let (margin, eigs, eq, ineq) = evaluate(problem, &x);
    let nonmargin = problem
        .blocks
        .iter()
        .zip(&eigs)
        .filter(|(b, _)| !b.margin)
        .map(|(_, e)| *e)
        .fold(f64::INFINITY, f64::min);
    let scale = 1.0 + x.iter().fold(0.0f64, |a, v| a.max(v.abs()));
    let tol = opts.feasibility_tolerance * scale;
    if nonmargin < -tol || ineq < -tol || eq > tol.max(1e-8) {
        return Err(SdpError::NumericalFailure {
            iterations: out.iterations,
            reason: format!(
                "returned point violates hard constraints (block {nonmargin:e}, inequality {ineq:e}, equality {eq:e})"
            ),
            primal_residual: out.pinf,
            dual_residual: out.dinf,
            gap: out.gap,
        });
    }
    if margin.is_finite() && margin < -opts.infeasible_margin {
        let proven = out.converged || out.upper_bound.is_some_and(|u| u < -opts.infeasible_margin * problem.margin_weight.abs());
        if !proven {
            return Err(SdpError::NumericalFailure {
                iterations: out.iterations,
                reason: format!("stopped early at margin {margin:e} without an infeasibility bound"),
                primal_residual: out.pinf,
                dual_residual: out.dinf,
                gap: out.gap,
            });
        }
        return Err(SdpError::Infeasible { margin });
    }
    let objective = if margin.is_finite() { problem.margin_weight * margin } else { 0.0 }
        + problem.objective.iter().map(|(v, c)| c * x[*v]).sum::<f64>();
    Ok(SdpSolution {
        x,
        margin,
        objective,
        iterations: out.iterations,
        block_min_eigs: eigs,
        max_equality_residual: eq,
        min_inequality: ineq,
        primal_residual: out.pinf,
        dual_residual: out.dinf,
        gap: out.gap,
        converged: out.converged,
    })
}
