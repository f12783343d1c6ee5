//! Point-wise ρ-IQC multiplier families.
//!
//! A template fixes the filter `Ψ` and ρ and leaves `M`, `Z` affine in a
//! vector of free scalars, together with the affine constraints (equalities,
//! inequalities, LMIs) under which the IQC
//! `zᵀMz − ψᵀZψ + ρ⁻² ψ⁺ᵀZψ⁺ ≥ 0` is guaranteed.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use thiserror::Error;

use crate::model::Uncertainty;
use crate::numkit::{block_diag, kron, min_eig, vstack, Matrix, SymMatrix, Vector};
use crate::sdp::{AffineMatrix, AffineSdp, LinearExpr};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum IqcError {
    #[error("bad multiplier parameters: {0}")]
    BadParams(String),
    #[error("dimension mismatch: {0}")]
    DimMismatch(String),
}

/// `ψ⁺ = Aψ + B col(v,d)`, `z = Cψ + D col(v,d)`, `ψ₀ = 0`.
///
/// Also used for the inner filter `Φ` of the parametric family, whose input
/// is a single `p`-vector.
#[derive(Debug, Clone, PartialEq)]
pub struct FilterRealization {
    pub a: Matrix,
    pub b: Matrix,
    pub c: Matrix,
    pub d: Matrix,
}

impl FilterRealization {
    pub fn new(a: Matrix, b: Matrix, c: Matrix, d: Matrix) -> Result<Self, IqcError> {
        let f = FilterRealization { a, b, c, d };
        f.validate()?;
        Ok(f)
    }

    /// `z = u`, no state.
    pub fn memoryless(inputs: usize) -> Self {
        FilterRealization {
            a: Matrix::zeros(0, 0),
            b: Matrix::zeros(0, inputs),
            c: Matrix::zeros(inputs, 0),
            d: Matrix::identity(inputs, inputs),
        }
    }

    pub fn validate(&self) -> Result<(), IqcError> {
        let n = self.a.nrows();
        let ok = self.a.ncols() == n
            && self.b.nrows() == n
            && self.c.ncols() == n
            && self.d.nrows() == self.c.nrows()
            && self.d.ncols() == self.b.ncols();
        if ok {
            Ok(())
        } else {
            Err(IqcError::DimMismatch(format!(
                "filter blocks A {:?}, B {:?}, C {:?}, D {:?} are not conformable",
                self.a.shape(),
                self.b.shape(),
                self.c.shape(),
                self.d.shape()
            )))
        }
    }

    pub fn n_psi(&self) -> usize {
        self.a.nrows()
    }

    pub fn n_z(&self) -> usize {
        self.c.nrows()
    }

    pub fn inputs(&self) -> usize {
        self.b.ncols()
    }

    /// Uncertainty channel width `p` of a `Ψ` filter (input is `col(v, d)`).
    pub fn p(&self) -> usize {
        self.inputs() / 2
    }

    /// Columns of `B` (or `D`) acting on `v` and on `d`.
    pub fn split_b(&self) -> (Matrix, Matrix) {
        let p = self.p();
        (self.b.columns(0, p).into_owned(), self.b.columns(p, p).into_owned())
    }

    pub fn split_d(&self) -> (Matrix, Matrix) {
        let p = self.p();
        (self.d.columns(0, p).into_owned(), self.d.columns(p, p).into_owned())
    }
}

/// Descriptor of one multiplier family inside a template.
#[derive(Debug, Clone, PartialEq)]
pub enum MultiplierFamily {
    /// `symmetric` adds the equalities `Ŵ = Ŵᵀ`; without them `Ŵ` is a general
    /// doubly hyperdominant matrix.
    ZamesFalb { nu: usize, alpha: f64, beta: f64, symmetric: bool },
    StaticPolytopic { alpha: f64, beta: f64 },
    Parametric { a: f64, b: f64, phi: FilterRealization },
}

impl MultiplierFamily {
    pub fn name(&self) -> &'static str {
        match self {
            MultiplierFamily::ZamesFalb { .. } => "zames-falb",
            MultiplierFamily::StaticPolytopic { .. } => "static-polytopic",
            MultiplierFamily::Parametric { .. } => "parametric",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MultiplierTemplate {
    pub filter: FilterRealization,
    /// `None` for families valid for every ρ.
    pub rho: Option<f64>,
    pub p: usize,
    pub families: Vec<MultiplierFamily>,
    pub num_vars: usize,
    pub m: AffineMatrix,
    pub z: AffineMatrix,
    /// Each must vanish.
    pub equalities: Vec<LinearExpr>,
    /// Each must be nonnegative.
    pub inequalities: Vec<LinearExpr>,
    /// Each must be positive semidefinite.
    pub lmis: Vec<(String, AffineMatrix)>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MultiplierInstance {
    pub filter: FilterRealization,
    pub rho: f64,
    pub m: SymMatrix,
    pub z: SymMatrix,
    pub families: Vec<MultiplierFamily>,
    /// Free scalars the instance was built from.
    pub params: Vec<f64>,
}

impl MultiplierInstance {
    /// Left side of the point-wise IQC.
    pub fn iqc_value(&self, psi: &Vector, z: &Vector, psi_next: &Vector) -> f64 {
        let mut v = self.m.quad_form(z);
        if self.z.dim() > 0 {
            v += -self.z.quad_form(psi) + self.z.quad_form(psi_next) / (self.rho * self.rho);
        }
        v
    }
}

fn check_rho(rho: f64) -> Result<(), IqcError> {
    if rho > 0.0 && rho < 1.0 {
        Ok(())
    } else {
        Err(IqcError::BadParams(format!("rho = {rho} is not in (0, 1)")))
    }
}

fn unit(rows: usize, cols: usize, i: usize, j: usize) -> Matrix {
    let mut e = Matrix::zeros(rows, cols);
    e[(i, j)] = 1.0;
    e
}

/// Symmetric basis element `E_ij + E_ji` (or `E_ii`).
fn sym_unit(n: usize, i: usize, j: usize) -> Matrix {
    let mut e = unit(n, n, i, j);
    e[(j, i)] = 1.0;
    e
}

/// `[[0, X],[Xᵀ, 0]]` with `X = E_ij ⊗ I_p` inside a `2kp`-square matrix.
fn off_diag_unit(k: usize, p: usize, i: usize, j: usize) -> Matrix {
    let x = kron(&unit(k, k, i, j), &Matrix::identity(p, p));
    let n = k * p;
    let mut out = Matrix::zeros(2 * n, 2 * n);
    out.view_mut((0, n), (n, n)).copy_from(&x);
    out.view_mut((n, 0), (n, n)).copy_from(&x.transpose());
    out
}

fn t_matrix(lo: f64, hi: f64, p: usize) -> Matrix {
    let t = Matrix::from_row_slice(2, 2, &[hi, -1.0, -lo, 1.0]);
    kron(&t, &Matrix::identity(p, p))
}

/// Upper shift `J_ν` (ones on the superdiagonal).
fn shift(nu: usize) -> Matrix {
    let mut j = Matrix::zeros(nu, nu);
    for i in 0..nu.saturating_sub(1) {
        j[(i, i + 1)] = 1.0;
    }
    j
}

/// FIR Zames-Falb multipliers of order `ν` for slope-restricted `φ` with
/// slopes in `[α, β]`, with `Ŵ` symmetric.
pub fn build_zames_falb_template(nu: usize, alpha: f64, beta: f64, p: usize, rho: f64) -> Result<MultiplierTemplate, IqcError> {
    build_zames_falb_template_with(nu, alpha, beta, p, rho, true)
}

/// As [`build_zames_falb_template`]; `symmetric = false` drops the symmetry
/// equalities on `Ŵ`, leaving only double hyperdominance.
pub fn build_zames_falb_template_with(
    nu: usize,
    alpha: f64,
    beta: f64,
    p: usize,
    rho: f64,
    symmetric: bool,
) -> Result<MultiplierTemplate, IqcError> {
    check_rho(rho)?;
    if !(beta > alpha) {
        return Err(IqcError::BadParams(format!("need beta > alpha, got alpha = {alpha}, beta = {beta}")));
    }
    if nu == 0 || p == 0 {
        return Err(IqcError::BadParams("nu and p must be positive".into()));
    }
    let ip = Matrix::identity(p, p);
    let i2 = Matrix::identity(2, 2);
    let t = t_matrix(alpha, beta, p);
    let mut e_last = Matrix::zeros(nu, 1);
    e_last[(nu - 1, 0)] = 1.0;
    let mut c_blk = Matrix::zeros(nu + 1, nu);
    c_blk.view_mut((0, 0), (nu, nu)).copy_from(&Matrix::identity(nu, nu));
    let mut d_blk = Matrix::zeros(nu + 1, 1);
    d_blk[(nu, 0)] = 1.0;
    let filter = FilterRealization {
        a: kron(&kron(&i2, &shift(nu)), &ip),
        b: kron(&kron(&i2, &e_last), &ip) * &t,
        c: kron(&kron(&i2, &c_blk), &ip),
        d: kron(&kron(&i2, &d_blk), &ip) * &t,
    };

    let k = nu + 1;
    let w_var = |i: usize, j: usize| i * k + j;
    let q_var = |i: usize, j: usize| k * k + i * nu + j;
    let num_vars = k * k + nu * nu;
    let mut m = AffineMatrix::zeros(2 * k * p);
    for i in 0..k {
        for j in 0..k {
            m.add_term(w_var(i, j), off_diag_unit(k, p, i, j));
        }
    }
    let mut z = AffineMatrix::zeros(2 * nu * p);
    for i in 0..nu {
        for j in 0..nu {
            z.add_term(q_var(i, j), off_diag_unit(nu, p, i, j));
        }
    }
    let rho_m2 = 1.0 / (rho * rho);
    let w_hat = |i: usize, j: usize| {
        let mut terms = vec![(w_var(i, j), 1.0)];
        if i < nu && j < nu {
            terms.push((q_var(i, j), -1.0));
        }
        if i >= 1 && j >= 1 {
            terms.push((q_var(i - 1, j - 1), rho_m2));
        }
        terms
    };
    let neg = |terms: Vec<(usize, f64)>| terms.into_iter().map(|(v, c)| (v, -c)).collect::<Vec<_>>();
    let mut equalities = Vec::new();
    let mut inequalities = Vec::new();
    if symmetric {
        for i in 0..k {
            for j in (i + 1)..k {
                let mut terms = w_hat(i, j);
                terms.extend(neg(w_hat(j, i)));
                equalities.push(LinearExpr::new(0.0, terms));
            }
        }
    }
    for i in 0..k {
        for j in 0..k {
            if i != j {
                inequalities.push(LinearExpr::new(0.0, neg(w_hat(i, j))));
            }
        }
    }
    for i in 0..k {
        let row: Vec<_> = (0..k).flat_map(|j| w_hat(i, j)).collect();
        let col: Vec<_> = (0..k).flat_map(|j| w_hat(j, i)).collect();
        inequalities.push(LinearExpr::new(0.0, row));
        inequalities.push(LinearExpr::new(0.0, col));
    }
    Ok(MultiplierTemplate {
        filter,
        rho: Some(rho),
        p,
        families: vec![MultiplierFamily::ZamesFalb { nu, alpha, beta, symmetric }],
        num_vars,
        m,
        z,
        equalities,
        inequalities,
        lmis: Vec::new(),
    })
}

/// Memoryless multipliers for diagonal sector-bounded uncertainty
/// `d_i = δ_i v_i`, `δ_i ∈ [α, β]`. Valid for every ρ.
pub fn build_static_polytopic_template(alpha: f64, beta: f64, p: usize) -> Result<MultiplierTemplate, IqcError> {
    if !(beta > alpha) {
        return Err(IqcError::BadParams(format!("need beta > alpha, got alpha = {alpha}, beta = {beta}")));
    }
    if p == 0 {
        return Err(IqcError::BadParams("p must be positive".into()));
    }
    if p > 16 {
        return Err(IqcError::BadParams("too many vertices for the static polytopic family".into()));
    }
    let n = 2 * p;
    let mut m = AffineMatrix::zeros(n);
    let mut basis = Vec::new();
    for i in 0..n {
        for j in i..n {
            let v = basis.len();
            let e = sym_unit(n, i, j);
            m.add_term(v, e.clone());
            basis.push((v, e));
        }
    }
    let mut lmis = Vec::new();
    for mask in 0..(1usize << p) {
        let deltas: Vec<f64> = (0..p).map(|i| if mask >> i & 1 == 1 { beta } else { alpha }).collect();
        let mut g = Matrix::zeros(n, p);
        for i in 0..p {
            g[(i, i)] = 1.0;
            g[(p + i, i)] = deltas[i];
        }
        lmis.push((format!("polytopic vertex {mask}"), m.congruence(&g)));
    }
    let mut sel = Matrix::zeros(n, p);
    for i in 0..p {
        sel[(p + i, i)] = 1.0;
    }
    lmis.push(("polytopic M22 <= 0".into(), m.congruence(&sel).scaled(-1.0)));
    Ok(MultiplierTemplate {
        filter: FilterRealization {
            a: Matrix::zeros(0, 0),
            b: Matrix::zeros(0, n),
            c: Matrix::zeros(n, 0),
            d: Matrix::identity(n, n),
        },
        rho: None,
        p,
        families: vec![MultiplierFamily::StaticPolytopic { alpha, beta }],
        num_vars: basis.len(),
        m,
        z: AffineMatrix::zeros(0),
        equalities: Vec::new(),
        inequalities: Vec::new(),
        lmis,
    })
}

/// Multipliers for repeated parametric uncertainty `d = δ v`, `δ ∈ [a, b]`,
/// with a user-chosen filter `Φ` of input width `p`.
pub fn build_parametric_template(a: f64, b: f64, phi: &FilterRealization, rho: f64) -> Result<MultiplierTemplate, IqcError> {
    check_rho(rho)?;
    if !(b > a) {
        return Err(IqcError::BadParams(format!("need b > a, got a = {a}, b = {b}")));
    }
    phi.validate()?;
    let p = phi.inputs();
    if p == 0 {
        return Err(IqcError::BadParams("filter has no inputs".into()));
    }
    let nphi = phi.n_psi();
    let nz = phi.n_z();
    let i2 = Matrix::identity(2, 2);
    let t = t_matrix(a, b, p);
    let filter = FilterRealization {
        a: kron(&i2, &phi.a),
        b: kron(&i2, &phi.b) * &t,
        c: kron(&i2, &phi.c),
        d: kron(&i2, &phi.d) * &t,
    };

    // [I 0; A B; C D]
    let rows = 2 * nphi + nz;
    let mut g = Matrix::zeros(rows, nphi + p);
    g.view_mut((0, 0), (nphi, nphi)).copy_from(&Matrix::identity(nphi, nphi));
    g.view_mut((nphi, 0), (nphi, nphi)).copy_from(&phi.a);
    g.view_mut((nphi, nphi), (nphi, p)).copy_from(&phi.b);
    g.view_mut((2 * nphi, 0), (nz, nphi)).copy_from(&phi.c);
    g.view_mut((2 * nphi, nphi), (nz, p)).copy_from(&phi.d);
    let rho_m2 = 1.0 / (rho * rho);
    let z_part = |e: &Matrix| {
        let mut d = Matrix::zeros(rows, rows);
        d.view_mut((0, 0), (nphi, nphi)).copy_from(&(-e));
        d.view_mut((nphi, nphi), (nphi, nphi)).copy_from(&(e * rho_m2));
        g.transpose() * d * &g
    };
    let m_part = |e: &Matrix| {
        let mut d = Matrix::zeros(rows, rows);
        d.view_mut((2 * nphi, 2 * nphi), (nz, nz)).copy_from(e);
        g.transpose() * d * &g
    };

    let mut next = 0usize;
    let mut m = AffineMatrix::zeros(2 * nz);
    let mut z = AffineMatrix::zeros(2 * nphi);
    let mut lmi = [
        AffineMatrix::zeros(nphi + p),
        AffineMatrix::zeros(nphi + p),
        AffineMatrix::zeros(nphi + p),
    ];
    // M1, M3 symmetric; W2 general
    for (idx, off) in [(0usize, 0usize), (2, nz)] {
        for i in 0..nz {
            for j in i..nz {
                let e = sym_unit(nz, i, j);
                let mut big = Matrix::zeros(2 * nz, 2 * nz);
                big.view_mut((off, off), (nz, nz)).copy_from(&e);
                m.add_term(next, big);
                lmi[idx].add_term(next, m_part(&e));
                next += 1;
            }
        }
    }
    for i in 0..nz {
        for j in 0..nz {
            let e = unit(nz, nz, i, j);
            let mut big = Matrix::zeros(2 * nz, 2 * nz);
            big.view_mut((0, nz), (nz, nz)).copy_from(&e);
            big.view_mut((nz, 0), (nz, nz)).copy_from(&e.transpose());
            m.add_term(next, big);
            lmi[1].add_term(next, m_part(&(&e + e.transpose())));
            next += 1;
        }
    }
    // Z1, Z3 symmetric; Q2 general
    for (idx, off) in [(0usize, 0usize), (2, nphi)] {
        for i in 0..nphi {
            for j in i..nphi {
                let e = sym_unit(nphi, i, j);
                let mut big = Matrix::zeros(2 * nphi, 2 * nphi);
                big.view_mut((off, off), (nphi, nphi)).copy_from(&e);
                z.add_term(next, big);
                lmi[idx].add_term(next, z_part(&e));
                next += 1;
            }
        }
    }
    for i in 0..nphi {
        for j in 0..nphi {
            let e = unit(nphi, nphi, i, j);
            let mut big = Matrix::zeros(2 * nphi, 2 * nphi);
            big.view_mut((0, nphi), (nphi, nphi)).copy_from(&e);
            big.view_mut((nphi, 0), (nphi, nphi)).copy_from(&e.transpose());
            z.add_term(next, big);
            lmi[1].add_term(next, z_part(&(&e + e.transpose())));
            next += 1;
        }
    }
    let [l1, l2, l3] = lmi;
    Ok(MultiplierTemplate {
        filter,
        rho: Some(rho),
        p,
        families: vec![MultiplierFamily::Parametric { a, b, phi: phi.clone() }],
        num_vars: next,
        m,
        z,
        equalities: Vec::new(),
        inequalities: Vec::new(),
        lmis: vec![
            ("parametric i=1".into(), l1),
            ("parametric i=2".into(), l2),
            ("parametric i=3".into(), l3),
        ],
    })
}

/// Stacks filters and sums the member IQCs.
pub fn combine(templates: &[MultiplierTemplate]) -> Result<MultiplierTemplate, IqcError> {
    let first = templates
        .first()
        .ok_or_else(|| IqcError::BadParams("no templates to combine".into()))?;
    if templates.len() == 1 {
        return Ok(first.clone());
    }
    let p = first.p;
    let mut rho = None;
    for t in templates {
        if t.p != p {
            return Err(IqcError::DimMismatch(format!("templates have p = {} and p = {}", p, t.p)));
        }
        match (rho, t.rho) {
            (Some(r), Some(s)) if r != s => {
                return Err(IqcError::DimMismatch(format!("templates have rho = {r} and rho = {s}")));
            }
            (None, Some(s)) => rho = Some(s),
            _ => {}
        }
    }
    let a: Vec<&Matrix> = templates.iter().map(|t| &t.filter.a).collect();
    let b: Vec<&Matrix> = templates.iter().map(|t| &t.filter.b).collect();
    let c: Vec<&Matrix> = templates.iter().map(|t| &t.filter.c).collect();
    let d: Vec<&Matrix> = templates.iter().map(|t| &t.filter.d).collect();
    let filter = FilterRealization {
        a: block_diag(&a),
        b: vstack(&b, 2 * p),
        c: block_diag(&c),
        d: vstack(&d, 2 * p),
    };
    let mut offset = 0;
    let mut ms = Vec::new();
    let mut zs = Vec::new();
    let mut equalities = Vec::new();
    let mut inequalities = Vec::new();
    let mut lmis = Vec::new();
    let mut families = Vec::new();
    for t in templates {
        ms.push(t.m.shifted(offset));
        zs.push(t.z.shifted(offset));
        equalities.extend(t.equalities.iter().map(|e| e.shifted(offset)));
        inequalities.extend(t.inequalities.iter().map(|e| e.shifted(offset)));
        lmis.extend(t.lmis.iter().map(|(n, l)| (n.clone(), l.shifted(offset))));
        families.extend(t.families.iter().cloned());
        offset += t.num_vars;
    }
    Ok(MultiplierTemplate {
        filter,
        rho,
        p,
        families,
        num_vars: offset,
        m: AffineMatrix::block_diag(&ms.iter().collect::<Vec<_>>()),
        z: AffineMatrix::block_diag(&zs.iter().collect::<Vec<_>>()),
        equalities,
        inequalities,
        lmis,
    })
}

/// Template with no uncertainty channel: empty filter, `M`, `Z`.
pub fn empty_template() -> MultiplierTemplate {
    MultiplierTemplate {
        filter: FilterRealization {
            a: Matrix::zeros(0, 0),
            b: Matrix::zeros(0, 0),
            c: Matrix::zeros(0, 0),
            d: Matrix::zeros(0, 0),
        },
        rho: None,
        p: 0,
        families: Vec::new(),
        num_vars: 0,
        m: AffineMatrix::zeros(0),
        z: AffineMatrix::zeros(0),
        equalities: Vec::new(),
        inequalities: Vec::new(),
        lmis: Vec::new(),
    }
}

/// Rebuilds the template described by `families` (in order).
pub fn template_from_families(families: &[MultiplierFamily], p: usize, rho: f64) -> Result<MultiplierTemplate, IqcError> {
    if families.is_empty() {
        return Ok(empty_template());
    }
    let parts = families
        .iter()
        .map(|f| match f {
            MultiplierFamily::ZamesFalb { nu, alpha, beta, symmetric } => {
                build_zames_falb_template_with(*nu, *alpha, *beta, p, rho, *symmetric)
            }
            MultiplierFamily::StaticPolytopic { alpha, beta } => build_static_polytopic_template(*alpha, *beta, p),
            MultiplierFamily::Parametric { a, b, phi } => build_parametric_template(*a, *b, phi, rho),
        })
        .collect::<Result<Vec<_>, _>>()?;
    combine(&parts)
}

impl MultiplierTemplate {
    pub fn n_psi(&self) -> usize {
        self.filter.n_psi()
    }

    pub fn n_z(&self) -> usize {
        self.filter.n_z()
    }

    /// Same template with ρ fixed; fails if a different ρ is already fixed.
    pub fn with_rho(mut self, rho: f64) -> Result<Self, IqcError> {
        check_rho(rho)?;
        match self.rho {
            Some(r) if r != rho => Err(IqcError::BadParams(format!("template built for rho = {r}, requested {rho}"))),
            _ => {
                self.rho = Some(rho);
                Ok(self)
            }
        }
    }

    /// Evaluates `M`, `Z` at `params`.
    pub fn instantiate(&self, params: &[f64], rho: f64) -> Result<MultiplierInstance, IqcError> {
        if params.len() != self.num_vars {
            return Err(IqcError::DimMismatch(format!(
                "template has {} free scalars, got {}",
                self.num_vars,
                params.len()
            )));
        }
        if let Some(r) = self.rho {
            if r != rho {
                return Err(IqcError::BadParams(format!("template built for rho = {r}, requested {rho}")));
            }
        }
        check_rho(rho)?;
        Ok(MultiplierInstance {
            filter: self.filter.clone(),
            rho,
            m: SymMatrix::new(self.m.eval(params)),
            z: SymMatrix::new(self.z.eval(params)),
            families: self.families.clone(),
            params: params.to_vec(),
        })
    }

    /// Largest violation of the template constraints at `params`
    /// (`0` when all hold).
    pub fn constraint_violation(&self, params: &[f64]) -> f64 {
        let mut worst = 0.0f64;
        for e in &self.equalities {
            worst = worst.max(e.eval(params).abs());
        }
        for e in &self.inequalities {
            worst = worst.max(-e.eval(params));
        }
        for (_, l) in &self.lmis {
            worst = worst.max(-min_eig(&l.eval(params)));
        }
        worst
    }

    /// Appends the free scalars and constraints to `sdp`; returns the index
    /// of the first free scalar.
    pub fn add_to_sdp(&self, sdp: &mut AffineSdp) -> usize {
        let off = sdp.add_vars(self.num_vars);
        for e in &self.equalities {
            sdp.add_equality(e.shifted(off));
        }
        for e in &self.inequalities {
            sdp.add_inequality(e.shifted(off));
        }
        for (name, l) in &self.lmis {
            sdp.add_block(name.clone(), l.shifted(off), false);
        }
        off
    }
}

/// One step of the filter.
pub fn filter_step(f: &FilterRealization, psi: &Vector, v: &Vector, d: &Vector) -> Result<(Vector, Vector), IqcError> {
    let p = f.p();
    if psi.len() != f.n_psi() || v.len() != p || d.len() != p || f.inputs() != 2 * p {
        return Err(IqcError::DimMismatch(format!(
            "filter with n_psi = {}, p = {} given psi {}, v {}, d {}",
            f.n_psi(),
            p,
            psi.len(),
            v.len(),
            d.len()
        )));
    }
    let mut u = Vector::zeros(2 * p);
    u.rows_mut(0, p).copy_from(v);
    u.rows_mut(p, p).copy_from(d);
    Ok((&f.a * psi + &f.b * &u, &f.c * psi + &f.d * &u))
}

#[derive(Debug, Clone, PartialEq)]
pub struct IqcCheckReport {
    pub trajectories: usize,
    pub steps: usize,
    /// Smallest IQC left side seen (`+∞` if nothing was sampled).
    pub min_value: f64,
    pub worst_trajectory: Option<usize>,
    pub worst_step: Option<usize>,
}

impl IqcCheckReport {
    pub fn passed(&self, tol: f64) -> bool {
        self.min_value >= -tol
    }
}

fn probe_sequence(rng: &mut ChaCha8Rng, p: usize, length: usize, kind: usize) -> Vec<Vector> {
    match kind % 3 {
        0 => (0..length)
            .map(|_| Vector::from_fn(p, |_, _| rng.random_range(-5.0..=5.0)))
            .collect(),
        1 => {
            let amp: Vec<f64> = (0..p).map(|_| rng.random_range(0.0..=5.0)).collect();
            let omega: Vec<f64> = (0..p).map(|_| rng.random_range(0.01..=0.6)).collect();
            let phase: Vec<f64> = (0..p).map(|_| rng.random_range(0.0..std::f64::consts::TAU)).collect();
            (0..length)
                .map(|k| Vector::from_fn(p, |i, _| amp[i] * (omega[i] * k as f64 + phase[i]).sin()))
                .collect()
        }
        _ => {
            // sinusoid plus noise, clipped to the probe range
            let amp = rng.random_range(0.5..=4.0);
            let omega = rng.random_range(0.05..=1.5);
            (0..length)
                .map(|k| {
                    Vector::from_fn(p, |_, _| {
                        (amp * (omega * k as f64).sin() + rng.random_range(-1.0..=1.0)).clamp(-5.0, 5.0)
                    })
                })
                .collect()
        }
    }
}

/// Runs the filter along sampled `v` trajectories with `d = Δ(v)` and
/// reports the smallest IQC left side.
pub fn check_pointwise_iqc_empirical(
    inst: &MultiplierInstance,
    delta: &dyn Uncertainty,
    trajectories: usize,
    length: usize,
    seed: u64,
) -> IqcCheckReport {
    let p = inst.filter.p();
    let results: Vec<(f64, usize)> = (0..trajectories)
        .into_par_iter()
        .map(|traj| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(traj as u64);
            let vs = probe_sequence(&mut rng, p, length, traj);
            let mut psi = Vector::zeros(inst.filter.n_psi());
            let mut worst = (f64::INFINITY, 0);
            for (k, v) in vs.iter().enumerate() {
                let d = delta.eval(v);
                let (next, z) = filter_step(&inst.filter, &psi, v, &d).expect("dimensions fixed by the instance");
                let val = inst.iqc_value(&psi, &z, &next);
                if val < worst.0 {
                    worst = (val, k);
                }
                psi = next;
            }
            worst
        })
        .collect();
    let mut report = IqcCheckReport {
        trajectories,
        steps: trajectories * length,
        min_value: f64::INFINITY,
        worst_trajectory: None,
        worst_step: None,
    };
    for (i, (v, k)) in results.into_iter().enumerate() {
        if v < report.min_value {
            report.min_value = v;
            report.worst_trajectory = Some(i);
            report.worst_step = Some(k);
        }
    }
    report
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{LinearUncertainty, Saturation};
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    fn v1(x: f64) -> Vector {
        Vector::from_element(1, x)
    }

    /// `W = I` and `Q = 0` flattened for a Zames-Falb template of order ν.
    fn zf_identity_params(nu: usize) -> Vec<f64> {
        let k = nu + 1;
        let mut x = vec![0.0; k * k + nu * nu];
        for i in 0..k {
            x[i * k + i] = 1.0;
        }
        x
    }

    #[test]
    fn zames_falb_dimensions() {
        let t = build_zames_falb_template(2, 0.0, 0.25, 1, 0.86f64.sqrt()).unwrap();
        assert_eq!(t.n_psi(), 4);
        assert_eq!(t.n_z(), 6);
        let t = build_zames_falb_template(3, -1.0, 1.0, 2, 0.5).unwrap();
        assert_eq!(t.n_psi(), 12);
        assert_eq!(t.n_z(), 16);
    }

    #[test]
    fn zames_falb_t_matrix() {
        let t = build_zames_falb_template(2, 0.0, 0.25, 1, 0.86f64.sqrt()).unwrap();
        // the last row of each half of D is a row of T
        let d = &t.filter.d;
        assert_eq!(d.row(2).iter().copied().collect::<Vec<_>>(), vec![0.25, -1.0]);
        assert_eq!(d.row(5).iter().copied().collect::<Vec<_>>(), vec![0.0, 1.0]);
        assert_eq!(t_matrix(0.0, 0.25, 1), Matrix::from_row_slice(2, 2, &[0.25, -1.0, 0.0, 1.0]));
    }

    #[test]
    fn zames_falb_bad_params() {
        assert!(matches!(build_zames_falb_template(2, 0.0, 0.25, 1, 1.0), Err(IqcError::BadParams(_))));
        assert!(matches!(build_zames_falb_template(2, 0.3, 0.25, 1, 0.5), Err(IqcError::BadParams(_))));
        assert!(matches!(build_parametric_template(1.0, 1.0, &FilterRealization::memoryless(1), 0.5), Err(IqcError::BadParams(_))));
    }

    #[test]
    fn zames_falb_identity_is_feasible() {
        let t = build_zames_falb_template(2, 0.0, 0.25, 1, 0.9).unwrap();
        assert_eq!(t.constraint_violation(&zf_identity_params(2)), 0.0);
        // W off-diagonal positive breaks hyperdominance
        let mut x = zf_identity_params(2);
        x[1] = 0.5;
        x[3] = 0.5;
        assert!(t.constraint_violation(&x) > 0.4);
    }

    #[test]
    fn filter_step_zames_falb_hand_computed() {
        let t = build_zames_falb_template(1, 0.0, 1.0, 1, 0.5).unwrap();
        let (next, z) = filter_step(&t.filter, &Vector::zeros(2), &v1(1.0), &v1(0.5)).unwrap();
        assert_eq!(next.as_slice(), &[0.5, 0.5]);
        assert_eq!(z.as_slice(), &[0.0, 0.5, 0.0, 0.5]);
        let (next2, z2) = filter_step(&t.filter, &next, &v1(2.0), &v1(0.0)).unwrap();
        assert_eq!(next2.as_slice(), &[2.0, 0.0]);
        assert_eq!(z2.as_slice(), &[0.5, 2.0, 0.5, 0.0]);
        let (n0, z0) = filter_step(&t.filter, &Vector::zeros(2), &v1(0.0), &v1(0.0)).unwrap();
        assert_eq!(n0.amax(), 0.0);
        assert_eq!(z0.amax(), 0.0);
        assert!(matches!(
            filter_step(&t.filter, &Vector::zeros(3), &v1(0.0), &v1(0.0)),
            Err(IqcError::DimMismatch(_))
        ));
    }

    #[test]
    fn zames_falb_iqc_reduces_to_w_hat_form() {
        // zᵀMz − ψᵀZψ + ρ⁻²ψ⁺ᵀZψ⁺ = 2 φ̃βᵀ Ŵ φ̃α for ν = 2, p = 1
        let rho: f64 = 0.8;
        let t = build_zames_falb_template(2, 0.0, 0.25, 1, rho).unwrap();
        let x: Vec<f64> = (0..t.num_vars).map(|i| ((i * 7 + 3) % 11) as f64 / 5.0 - 1.0).collect();
        let inst = t.instantiate(&x, rho).unwrap();
        let w = Matrix::from_row_slice(3, 3, &x[0..9]);
        let q = Matrix::from_row_slice(2, 2, &x[9..13]);
        let mut w_hat = w.clone();
        for i in 0..2 {
            for j in 0..2 {
                w_hat[(i, j)] -= q[(i, j)];
                w_hat[(i + 1, j + 1)] += q[(i, j)] / (rho * rho);
            }
        }
        let vs = [1.0, -2.0, 3.5, 0.7];
        let delta = Saturation { gain: 0.125, knee: 2.0 };
        let mut psi = Vector::zeros(4);
        let mut hist_b = vec![0.0; 2];
        let mut hist_a = vec![0.0; 2];
        for v in vs {
            let d = delta.eval(&v1(v))[0];
            let (next, z) = filter_step(&inst.filter, &psi, &v1(v), &v1(d)).unwrap();
            let fb = Vector::from_column_slice(&[hist_b[0], hist_b[1], 0.25 * v - d]);
            let fa = Vector::from_column_slice(&[hist_a[0], hist_a[1], d]);
            let expected = 2.0 * fb.dot(&(&w_hat * &fa));
            assert_abs_diff_eq!(inst.iqc_value(&psi, &z, &next), expected, epsilon = 1e-12);
            hist_b = vec![hist_b[1], 0.25 * v - d];
            hist_a = vec![hist_a[1], d];
            psi = next;
        }
    }

    #[test]
    fn static_polytopic_examples() {
        let t = build_static_polytopic_template(0.0, 0.25, 1).unwrap();
        assert_eq!(t.n_psi(), 0);
        assert_eq!(t.n_z(), 2);
        assert_eq!(t.filter.d, Matrix::identity(2, 2));
        // variables (0,0), (0,1), (1,1)
        assert!(t.constraint_violation(&[0.0, 0.125, -1.0]) <= 1e-15);
        assert_eq!(t.constraint_violation(&[0.0, 0.0, 0.0]), 0.0);
        assert!(t.constraint_violation(&[-1.0, 0.0, 0.0]) >= 1.0 - 1e-15);
        let (next, z) = filter_step(&t.filter, &Vector::zeros(0), &v1(1.5), &v1(-0.2)).unwrap();
        assert_eq!(next.len(), 0);
        assert_eq!(z.as_slice(), &[1.5, -0.2]);
    }

    #[test]
    fn parametric_examples() {
        let phi = FilterRealization::memoryless(1);
        let t = build_parametric_template(-1.0, 1.0, &phi, 0.5).unwrap();
        assert_eq!(t_matrix(-1.0, 1.0, 1), Matrix::from_row_slice(2, 2, &[1.0, -1.0, 1.0, 1.0]));
        assert_eq!(t.n_psi(), 0);
        assert_eq!(t.n_z(), 2);
        // M1 = M3 = I, W2 = 0: variables M1, M3, W2
        assert_eq!(t.num_vars, 3);
        assert_eq!(t.constraint_violation(&[1.0, 1.0, 0.0]), 0.0);
        assert!(t.constraint_violation(&[-1.0, 1.0, 0.0]) > 0.0);
    }

    #[test]
    fn parametric_dynamic_filter_lmis_hold_for_identity_choice() {
        // Φ: one-step delay plus feedthrough
        let phi = FilterRealization::new(
            Matrix::zeros(1, 1),
            Matrix::from_element(1, 1, 1.0),
            Matrix::from_row_slice(2, 1, &[1.0, 0.0]),
            Matrix::from_row_slice(2, 1, &[0.0, 1.0]),
        )
        .unwrap();
        let t = build_parametric_template(0.0, 1.0, &phi, 0.9).unwrap();
        assert_eq!(t.n_psi(), 2);
        assert_eq!(t.n_z(), 4);
        // M1 = M3 = I2, W2 = 0, Z = 0: each LMI is [C D]ᵀ[C D] = I ⪰ 0
        let mut x = vec![0.0; t.num_vars];
        x[0] = 1.0;
        x[2] = 1.0;
        x[3] = 1.0;
        x[5] = 1.0;
        assert!(t.constraint_violation(&x) <= 1e-15);
        let inst = t.instantiate(&x, 0.9).unwrap();
        let r = check_pointwise_iqc_empirical(&inst, &LinearUncertainty { gain: Matrix::from_element(1, 1, 0.4) }, 10, 50, 1);
        assert!(r.passed(1e-9), "{r:?}");
    }

    #[test]
    fn combine_examples() {
        let rho = 0.86f64.sqrt();
        let zf = build_zames_falb_template(2, 0.0, 0.25, 1, rho).unwrap();
        let st = build_static_polytopic_template(0.0, 0.25, 1).unwrap();
        let c = combine(&[zf.clone(), st.clone()]).unwrap();
        assert_eq!(c.n_psi(), 4);
        assert_eq!(c.n_z(), 8);
        assert_eq!(c.rho, Some(rho));
        assert_eq!(c.num_vars, zf.num_vars + st.num_vars);
        assert_eq!(combine(std::slice::from_ref(&zf)).unwrap(), zf);
        let ss = combine(&[st.clone(), st.clone()]).unwrap();
        assert_eq!(ss.n_psi(), 0);
        assert_eq!(ss.n_z(), 4);
        let other = build_zames_falb_template(2, 0.0, 0.25, 1, 0.5).unwrap();
        assert!(matches!(combine(&[zf.clone(), other]), Err(IqcError::DimMismatch(_))));
        let p2 = build_static_polytopic_template(0.0, 0.25, 2).unwrap();
        assert!(matches!(combine(&[zf, p2]), Err(IqcError::DimMismatch(_))));
    }

    #[test]
    fn empirical_check_examples() {
        let st = build_static_polytopic_template(0.0, 0.25, 1).unwrap();
        let sector = st.instantiate(&[0.0, 0.125, -1.0], 0.5).unwrap();
        let sat = Saturation { gain: 0.125, knee: 2.0 };
        assert!(check_pointwise_iqc_empirical(&sector, &sat, 20, 100, 3).passed(1e-12));
        let ident = LinearUncertainty { gain: Matrix::identity(1, 1) };
        let r = check_pointwise_iqc_empirical(&sector, &ident, 5, 20, 3);
        assert!(r.min_value < -0.1);
        let empty = check_pointwise_iqc_empirical(&sector, &sat, 0, 20, 3);
        assert_eq!(empty.min_value, f64::INFINITY);
        assert_eq!(empty.steps, 0);
    }

    #[test]
    fn empirical_check_is_deterministic() {
        let st = build_static_polytopic_template(0.0, 0.25, 1).unwrap();
        let sector = st.instantiate(&[0.0, 0.125, -1.0], 0.5).unwrap();
        let ident = LinearUncertainty { gain: Matrix::identity(1, 1) };
        let a = check_pointwise_iqc_empirical(&sector, &ident, 16, 30, 9);
        let b = check_pointwise_iqc_empirical(&sector, &ident, 16, 30, 9);
        assert_eq!(a, b);
    }

    /// Random symmetric, doubly hyperdominant `Ŵ` and random `Q`; `W` is then
    /// recovered from `Ŵ = W − diag(Q,0) + diag(0, ρ⁻²Q)`.
    fn zf_params_from(nu: usize, rho: f64, off: &[f64], slack: &[f64], q: &[f64]) -> Vec<f64> {
        let k = nu + 1;
        let mut w_hat = Matrix::zeros(k, k);
        let mut idx = 0;
        for i in 0..k {
            for j in (i + 1)..k {
                w_hat[(i, j)] = -off[idx];
                w_hat[(j, i)] = -off[idx];
                idx += 1;
            }
        }
        for i in 0..k {
            let s: f64 = (0..k).filter(|j| *j != i).map(|j| -w_hat[(i, j)]).sum();
            w_hat[(i, i)] = s + slack[i];
        }
        params_from_w_hat(nu, rho, &w_hat, q)
    }

    /// Non-symmetric variant: independent off-diagonal entries, diagonal
    /// dominating both the row and the column sums.
    fn zf_params_nonsym(nu: usize, rho: f64, off: &[f64], slack: &[f64], q: &[f64]) -> Vec<f64> {
        let k = nu + 1;
        let mut w_hat = Matrix::zeros(k, k);
        let mut idx = 0;
        for i in 0..k {
            for j in 0..k {
                if i != j {
                    w_hat[(i, j)] = -off[idx];
                    idx += 1;
                }
            }
        }
        for i in 0..k {
            let row: f64 = (0..k).filter(|j| *j != i).map(|j| -w_hat[(i, j)]).sum();
            let col: f64 = (0..k).filter(|j| *j != i).map(|j| -w_hat[(j, i)]).sum();
            w_hat[(i, i)] = row.max(col) + slack[i];
        }
        params_from_w_hat(nu, rho, &w_hat, q)
    }

    fn params_from_w_hat(nu: usize, rho: f64, w_hat: &Matrix, q: &[f64]) -> Vec<f64> {
        let k = nu + 1;
        let qm = Matrix::from_row_slice(nu, nu, &q[..nu * nu]);
        let mut w = w_hat.clone();
        for i in 0..nu {
            for j in 0..nu {
                w[(i, j)] += qm[(i, j)];
                w[(i + 1, j + 1)] -= qm[(i, j)] / (rho * rho);
            }
        }
        let mut x: Vec<f64> = Vec::new();
        for i in 0..k {
            for j in 0..k {
                x.push(w[(i, j)]);
            }
        }
        for i in 0..nu {
            for j in 0..nu {
                x.push(qm[(i, j)]);
            }
        }
        x
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(16))]

        #[test]
        fn zames_falb_feasible_instances_hold(
            off in prop::collection::vec(0.0f64..1.0, 3),
            slack in prop::collection::vec(0.0f64..1.0, 3),
            q in prop::collection::vec(-1.0f64..1.0, 4),
            rho in 0.5f64..0.99,
            seed in 0u64..1000,
        ) {
            let t = build_zames_falb_template(2, 0.0, 0.25, 1, rho).unwrap();
            let x = zf_params_from(2, rho, &off, &slack, &q);
            prop_assert!(t.constraint_violation(&x) <= 1e-12);
            let inst = t.instantiate(&x, rho).unwrap();
            let sat = Saturation { gain: 0.125, knee: 2.0 };
            let r = check_pointwise_iqc_empirical(&inst, &sat, 20, 500, seed);
            prop_assert!(r.passed(1e-9), "{:?}", r);
        }

        #[test]
        fn nonsymmetric_zames_falb_instances_hold(
            off in prop::collection::vec(0.0f64..1.0, 12),
            slack in prop::collection::vec(0.0f64..1.0, 4),
            q in prop::collection::vec(-1.0f64..1.0, 9),
            rho in 0.5f64..0.999,
            seed in 0u64..1000,
        ) {
            let t = build_zames_falb_template_with(3, 0.0, 0.25, 1, rho, false).unwrap();
            let x = zf_params_nonsym(3, rho, &off, &slack, &q);
            prop_assert!(t.constraint_violation(&x) <= 1e-12);
            let inst = t.instantiate(&x, rho).unwrap();
            let sat = Saturation { gain: 0.125, knee: 2.0 };
            let r = check_pointwise_iqc_empirical(&inst, &sat, 20, 500, seed);
            prop_assert!(r.passed(1e-9), "{:?}", r);
        }

        #[test]
        fn combined_value_is_sum(
            x in prop::collection::vec(-1.0f64..1.0, 16),
            vs in prop::collection::vec(-5.0f64..5.0, 12),
        ) {
            let rho = 0.9;
            let zf = build_zames_falb_template(2, 0.0, 0.25, 1, rho).unwrap();
            let st = build_static_polytopic_template(0.0, 0.25, 1).unwrap();
            let c = combine(&[zf.clone(), st.clone()]).unwrap();
            let iz = zf.instantiate(&x[..13], rho).unwrap();
            let is = st.instantiate(&x[13..16], rho).unwrap();
            let ic = c.instantiate(&x, rho).unwrap();
            let sat = Saturation { gain: 0.125, knee: 2.0 };
            let (mut pz, mut pc) = (Vector::zeros(4), Vector::zeros(4));
            for v in vs {
                let v = v1(v);
                let d = sat.eval(&v);
                let (nz, zz) = filter_step(&iz.filter, &pz, &v, &d).unwrap();
                let (_, zs) = filter_step(&is.filter, &Vector::zeros(0), &v, &d).unwrap();
                let (nc, zc) = filter_step(&ic.filter, &pc, &v, &d).unwrap();
                let sum = iz.iqc_value(&pz, &zz, &nz) + is.iqc_value(&Vector::zeros(0), &zs, &Vector::zeros(0));
                prop_assert!((ic.iqc_value(&pc, &zc, &nc) - sum).abs() <= 1e-12 * (1.0 + sum.abs()));
                pz = nz;
                pc = nc;
            }
        }

        #[test]
        fn polytopic_vertex_feasibility_covers_interior(
            m in prop::collection::vec(-1.0f64..1.0, 10),
            p2 in proptest::bool::ANY,
        ) {
            let p = if p2 { 2 } else { 1 };
            let (alpha, beta) = (0.0, 0.25);
            let t = build_static_polytopic_template(alpha, beta, p).unwrap();
            let x = &m[..t.num_vars];
            prop_assume!(t.constraint_violation(x) <= 0.0);
            let mm = t.m.eval(x);
            let grid = 21;
            for a in 0..grid {
                for b in 0..(if p == 2 { grid } else { 1 }) {
                    let ds = [alpha + (beta - alpha) * a as f64 / (grid - 1) as f64, alpha + (beta - alpha) * b as f64 / (grid - 1) as f64];
                    let mut g = Matrix::zeros(2 * p, p);
                    for i in 0..p {
                        g[(i, i)] = 1.0;
                        g[(p + i, i)] = ds[i];
                    }
                    prop_assert!(min_eig(&(g.transpose() * &mm * &g)) >= -1e-12);
                }
            }
        }

        #[test]
        fn filter_is_linear(
            s in -2.0f64..2.0,
            a in prop::collection::vec(-3.0f64..3.0, 6),
            b in prop::collection::vec(-3.0f64..3.0, 6),
        ) {
            let t = build_zames_falb_template(2, 0.0, 0.25, 1, 0.9).unwrap();
            let f = &t.filter;
            let psi_a = Vector::from_column_slice(&a[..4]);
            let psi_b = Vector::from_column_slice(&b[..4]);
            let (na, za) = filter_step(f, &psi_a, &v1(a[4]), &v1(a[5])).unwrap();
            let (nb, zb) = filter_step(f, &psi_b, &v1(b[4]), &v1(b[5])).unwrap();
            let (n, z) = filter_step(f, &(&psi_a * s + &psi_b), &v1(s * a[4] + b[4]), &v1(s * a[5] + b[5])).unwrap();
            prop_assert!((n - (na * s + nb)).amax() <= 1e-12);
            prop_assert!((z - (za * s + zb)).amax() <= 1e-12);
        }
    }
}
