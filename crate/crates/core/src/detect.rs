//! Robust detectability: the extended system over the envelope box, the
//! max-margin LMI search for a certificate, and certificate checks.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::value::RawValue;
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::iqc::{
    empty_template, filter_step, template_from_families, FilterRealization, IqcError, MultiplierFamily,
    MultiplierInstance, MultiplierTemplate,
};
use crate::model::{BoxSet, IntervalMatrix, LipschitzEnvelope, Scenario};
use crate::numkit::{max_eig, min_eig, Matrix, SymMatrix, Vector};
use crate::sdp::{solve_max_margin, AffineMatrix, AffineSdp, LinearExpr, SdpError, SdpOptions};

/// Above this many non-degenerate envelope entries vertex enumeration is refused.
pub const MAX_FREE_PARAMETERS: usize = 20;

#[derive(Debug, Error)]
pub enum DetectError {
    #[error("LMI infeasible: best margin {margin:e}")]
    Infeasible { margin: f64 },
    #[error("{count} non-degenerate envelope intervals (limit {MAX_FREE_PARAMETERS})")]
    TooManyVertices { count: usize },
    #[error("interior sampling found LMI eigenvalue {max_eig:e} above tolerance")]
    InteriorViolation { max_eig: f64 },
    #[error("dimension mismatch: {0}")]
    DimMismatch(String),
    #[error(transparent)]
    Iqc(#[from] IqcError),
    #[error("SDP solver failure: {0}")]
    Solver(SdpError),
    #[error("certificate I/O: {0}")]
    Io(#[from] std::io::Error),
    #[error("certificate format: {0}")]
    Format(String),
    #[error("certificate content hash mismatch")]
    HashMismatch,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct DetectDims {
    pub n: usize,
    pub n_w: usize,
    pub m: usize,
    pub p: usize,
    pub q: usize,
    pub n_psi: usize,
    pub n_z: usize,
}

impl DetectDims {
    /// state `col(x−x̃, ψ−ψ̃, x, ψ)`
    pub fn n_chi(&self) -> usize {
        2 * self.n + 2 * self.n_psi
    }
    /// input `col(e_w, d, d̃, w, x̂)`
    pub fn n_nu(&self) -> usize {
        2 * self.n_w + 2 * self.p + self.n
    }
    /// output `col(e_w, w, e_y, x̂−x̃, z, z̃)`
    pub fn n_zeta(&self) -> usize {
        2 * self.n_w + self.m + self.n + 2 * self.n_z
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExtendedVertex {
    pub a: Matrix,
    pub b: Matrix,
    pub c: Matrix,
    pub d: Matrix,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExtendedVertexSystem {
    pub dims: DetectDims,
    pub vertices: Vec<ExtendedVertex>,
    /// System at the center of the box.
    pub midpoint: ExtendedVertex,
    pub free_parameters: usize,
}

/// Envelope blocks in the order `Θ₁ … Θ₆` use them.
const SLOTS: usize = 16;
const A1: usize = 0;
const BW1: usize = 1;
const BD1: usize = 2;
const C2: usize = 3;
const DW2: usize = 4;
const DD2: usize = 5;
const CV3: usize = 6;
const EW3: usize = 7;
const A4: usize = 8;
const BW4: usize = 9;
const BU4: usize = 10;
const BD4: usize = 11;
const CV5: usize = 12;
const EW5: usize = 13;
const CV6: usize = 14;
const EW6: usize = 15;

fn slots(env: &LipschitzEnvelope) -> [&IntervalMatrix; SLOTS] {
    [
        &env.a,
        &env.b_w,
        &env.b_d,
        &env.c,
        &env.d_w,
        &env.d_d,
        &env.c_v,
        &env.e_w,
        &env.a_abs,
        &env.b_w_abs,
        &env.b_u,
        &env.b_d_abs,
        &env.c_v_abs,
        &env.e_w_abs,
        &env.c_v_abs,
        &env.e_w_abs,
    ]
}

/// One point `Θ` of the parameter box.
#[derive(Debug, Clone)]
pub struct Theta(pub Vec<Matrix>);

struct ThetaBox<'a> {
    slots: [&'a IntervalMatrix; SLOTS],
    free: Vec<(usize, usize, usize)>,
}

impl<'a> ThetaBox<'a> {
    fn new(env: &'a LipschitzEnvelope) -> Self {
        let slots = slots(env);
        let mut free = Vec::new();
        for (s, im) in slots.iter().enumerate() {
            for (i, j) in im.free_entries() {
                free.push((s, i, j));
            }
        }
        ThetaBox { slots, free }
    }

    fn point(&self, mut pick: impl FnMut(usize, f64, f64) -> f64) -> Theta {
        let mut ms: Vec<Matrix> = self.slots.iter().map(|im| im.center()).collect();
        for (k, (s, i, j)) in self.free.iter().enumerate() {
            let im = self.slots[*s];
            ms[*s][(*i, *j)] = pick(k, im.lo[(*i, *j)], im.hi[(*i, *j)]);
        }
        Theta(ms)
    }

    fn vertex(&self, mask: usize) -> Theta {
        self.point(|k, lo, hi| if mask >> k & 1 == 1 { hi } else { lo })
    }

    fn center(&self) -> Theta {
        self.point(|_, lo, hi| 0.5 * (lo + hi))
    }

    fn sample(&self, rng: &mut impl Rng) -> Theta {
        self.point(|_, lo, hi| rng.random_range(lo..=hi))
    }
}

fn put(target: &mut Matrix, r: usize, c: usize, blk: &Matrix) {
    if blk.nrows() > 0 && blk.ncols() > 0 {
        let mut v = target.view_mut((r, c), blk.shape());
        v += blk;
    }
}

fn check_dims(env: &LipschitzEnvelope, filter: &FilterRealization) -> Result<DetectDims, DetectError> {
    let n = env.a.shape().0;
    let n_w = env.b_w.shape().1;
    let p = env.b_d.shape().1;
    let m = env.c.shape().0;
    let q = env.c_v.shape().0;
    let dims = crate::model::PlantDims { n, n_w, p, q, m, l: 0 };
    env.check_dims(dims).map_err(|e| DetectError::DimMismatch(e.to_string()))?;
    filter.validate()?;
    if p > 0 && (filter.inputs() != 2 * p || q != p) {
        return Err(DetectError::DimMismatch(format!(
            "filter takes {} inputs but the uncertainty channel has p = {p}, q = {q}",
            filter.inputs()
        )));
    }
    if p == 0 && filter.inputs() != 0 {
        return Err(DetectError::DimMismatch("filter given for a plant without uncertainty".into()));
    }
    Ok(DetectDims {
        n,
        n_w,
        m,
        p,
        q,
        n_psi: filter.n_psi(),
        n_z: filter.n_z(),
    })
}

/// `(𝒜, ℬ, 𝒞, 𝒟)` at one parameter point.
pub fn extended_system_at(dims: &DetectDims, filter: &FilterRealization, theta: &Theta) -> ExtendedVertex {
    let DetectDims { n, n_w, m, p, q, n_psi, n_z } = *dims;
    let t = &theta.0;
    let (bv, bd) = if p > 0 {
        filter.split_b()
    } else {
        (Matrix::zeros(n_psi, q), Matrix::zeros(n_psi, 0))
    };
    let (dv, dd) = if p > 0 {
        filter.split_d()
    } else {
        (Matrix::zeros(n_z, q), Matrix::zeros(n_z, 0))
    };
    let (nc, nn, nz) = (dims.n_chi(), dims.n_nu(), dims.n_zeta());
    // χ offsets
    let (cx_e, cp_e, cx, cp) = (0, n, n + n_psi, 2 * n + n_psi);
    // ν offsets
    let (v_ew, v_d, v_dt, v_w, v_xh) = (0, n_w, n_w + p, n_w + 2 * p, 2 * n_w + 2 * p);
    // ζ offsets
    let (z_ew, z_w, z_ey, z_xe, z_z, z_zt) = (0, n_w, 2 * n_w, 2 * n_w + m, 2 * n_w + m + n, 2 * n_w + m + n + n_z);
    let ident = |k: usize| Matrix::identity(k, k);

    let mut a = Matrix::zeros(nc, nc);
    put(&mut a, cx_e, cx_e, &t[A1]);
    put(&mut a, cp_e, cx_e, &(&bv * &t[CV3]));
    put(&mut a, cp_e, cp_e, &filter.a);
    put(&mut a, cx, cx, &t[A4]);
    put(&mut a, cp, cx, &(&bv * &t[CV5]));
    put(&mut a, cp, cp, &filter.a);

    let mut b = Matrix::zeros(nc, nn);
    put(&mut b, cx_e, v_ew, &t[BW1]);
    put(&mut b, cx_e, v_d, &t[BD1]);
    put(&mut b, cx_e, v_dt, &(-&t[BD1]));
    put(&mut b, cp_e, v_ew, &(&bv * &t[EW3]));
    put(&mut b, cp_e, v_d, &bd);
    put(&mut b, cp_e, v_dt, &(-&bd));
    put(&mut b, cx, v_d, &t[BD4]);
    put(&mut b, cx, v_w, &t[BW4]);
    put(&mut b, cx, v_xh, &t[BU4]);
    put(&mut b, cp, v_d, &bd);
    put(&mut b, cp, v_w, &(&bv * &t[EW5]));

    let mut c = Matrix::zeros(nz, nc);
    put(&mut c, z_ey, cx_e, &t[C2]);
    put(&mut c, z_xe, cx_e, &ident(n));
    put(&mut c, z_xe, cx, &(-ident(n)));
    put(&mut c, z_z, cx, &(&dv * &t[CV5]));
    put(&mut c, z_z, cp, &filter.c);
    put(&mut c, z_zt, cx_e, &(-(&dv * &t[CV6])));
    put(&mut c, z_zt, cp_e, &(-&filter.c));
    put(&mut c, z_zt, cx, &(&dv * &t[CV6]));
    put(&mut c, z_zt, cp, &filter.c);

    let mut d = Matrix::zeros(nz, nn);
    put(&mut d, z_ew, v_ew, &ident(n_w));
    put(&mut d, z_w, v_w, &ident(n_w));
    put(&mut d, z_ey, v_ew, &t[DW2]);
    put(&mut d, z_ey, v_d, &t[DD2]);
    put(&mut d, z_ey, v_dt, &(-&t[DD2]));
    put(&mut d, z_xe, v_xh, &ident(n));
    put(&mut d, z_z, v_d, &dd);
    put(&mut d, z_z, v_w, &(&dv * &t[EW5]));
    put(&mut d, z_zt, v_ew, &(-(&dv * &t[EW6])));
    put(&mut d, z_zt, v_dt, &dd);
    put(&mut d, z_zt, v_w, &(&dv * &t[EW6]));

    ExtendedVertex { a, b, c, d }
}

/// Enumerates the corners of the parameter box (point intervals collapsed).
pub fn assemble_extended_vertices(
    envelope: &LipschitzEnvelope,
    filter: &FilterRealization,
) -> Result<ExtendedVertexSystem, DetectError> {
    let dims = check_dims(envelope, filter)?;
    let tb = ThetaBox::new(envelope);
    let free = tb.free.len();
    if free > MAX_FREE_PARAMETERS {
        return Err(DetectError::TooManyVertices { count: free });
    }
    let vertices = (0..(1usize << free))
        .into_par_iter()
        .map(|mask| extended_system_at(&dims, filter, &tb.vertex(mask)))
        .collect();
    Ok(ExtendedVertexSystem {
        dims,
        vertices,
        midpoint: extended_system_at(&dims, filter, &tb.center()),
        free_parameters: free,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct DetectOptions {
    /// Bound on the summed traces of the certificate matrices and on the
    /// magnitude of each multiplier scalar; defaults to `10³·n_χ`.
    pub trace_scale: Option<f64>,
    /// Certificates need `t* > accept_margin`.
    pub accept_margin: f64,
    pub interior_samples: usize,
    pub interior_tolerance: f64,
    pub seed: u64,
    pub sdp: SdpOptions,
}

impl Default for DetectOptions {
    fn default() -> Self {
        DetectOptions {
            trace_scale: None,
            accept_margin: 1e-6,
            interior_samples: 1000,
            interior_tolerance: 1e-6,
            seed: 0x5eed,
            sdp: SdpOptions::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DetectabilityCertificate {
    pub scenario: String,
    /// Built without the uncertainty channel.
    pub nominal: bool,
    pub rho: f64,
    pub dims: DetectDims,
    pub p: SymMatrix,
    pub q: SymMatrix,
    pub q0: SymMatrix,
    pub r: SymMatrix,
    pub r0: SymMatrix,
    pub m_hat: SymMatrix,
    pub p0: SymMatrix,
    pub multiplier: MultiplierInstance,
    pub margin: f64,
    pub vertices: Vec<ExtendedVertex>,
    pub midpoint: ExtendedVertex,
    pub interior_samples: usize,
    pub interior_max_eig: f64,
}

impl DetectabilityCertificate {
    /// `(•)ᵀ P col(I_{n+n_ψ}, 0)`
    pub fn p11(&self) -> SymMatrix {
        let k = self.dims.n + self.dims.n_psi;
        SymMatrix::new(self.p.as_matrix().view((0, 0), (k, k)).into_owned())
    }

    /// `P − diag(0, ρ⁻² Z)`
    pub fn p_bar(&self) -> SymMatrix {
        let mut m = self.p.as_matrix().clone();
        let k = self.dims.n_psi;
        let off = self.dims.n_chi() - k;
        if k > 0 {
            let mut v = m.view_mut((off, off), (k, k));
            v -= self.multiplier.z.as_matrix() / (self.rho * self.rho);
        }
        SymMatrix::new(m)
    }

    /// `diag(Q, Q0, R, R0, −M−M̂, M̂)`
    pub fn p_p(&self) -> Matrix {
        let neg = -(self.multiplier.m.as_matrix() + self.m_hat.as_matrix());
        crate::numkit::block_diag(&[
            self.q.as_matrix(),
            self.q0.as_matrix(),
            self.r.as_matrix(),
            self.r0.as_matrix(),
            &neg,
            self.m_hat.as_matrix(),
        ])
    }

    /// The (negative semidefinite when valid) LMI matrix at one vertex.
    pub fn lmi_at(&self, v: &ExtendedVertex) -> Matrix {
        lmi_matrix(self.rho, self.p.as_matrix(), &self.p_p(), v)
    }
}

fn lmi_matrix(rho: f64, p: &Matrix, pp: &Matrix, v: &ExtendedVertex) -> Matrix {
    let nc = v.a.nrows();
    let nn = v.b.ncols();
    let mut g1 = Matrix::zeros(nc, nc + nn);
    g1.view_mut((0, 0), (nc, nc)).copy_from(&Matrix::identity(nc, nc));
    let mut g2 = Matrix::zeros(nc, nc + nn);
    g2.view_mut((0, 0), (nc, nc)).copy_from(&v.a);
    g2.view_mut((0, nc), (nc, nn)).copy_from(&v.b);
    let nz = v.c.nrows();
    let mut g3 = Matrix::zeros(nz, nc + nn);
    g3.view_mut((0, 0), (nz, nc)).copy_from(&v.c);
    g3.view_mut((0, nc), (nz, nn)).copy_from(&v.d);
    let l = -(rho * rho) * g1.transpose() * p * &g1 + g2.transpose() * p * &g2 - g3.transpose() * pp * &g3;
    (&l + l.transpose()) * 0.5
}

fn outer_factors(v: &ExtendedVertex) -> (Matrix, Matrix, Matrix) {
    let nc = v.a.nrows();
    let nn = v.b.ncols();
    let nz = v.c.nrows();
    let mut g1 = Matrix::zeros(nc, nc + nn);
    g1.view_mut((0, 0), (nc, nc)).copy_from(&Matrix::identity(nc, nc));
    let mut g2 = Matrix::zeros(nc, nc + nn);
    g2.view_mut((0, 0), (nc, nc)).copy_from(&v.a);
    g2.view_mut((0, nc), (nc, nn)).copy_from(&v.b);
    let mut g3 = Matrix::zeros(nz, nc + nn);
    g3.view_mut((0, 0), (nz, nc)).copy_from(&v.c);
    g3.view_mut((0, nc), (nz, nn)).copy_from(&v.d);
    (g1, g2, g3)
}

/// Symmetric matrix variable; returns its first index and affine form.
fn sym_var(sdp: &mut AffineSdp, dim: usize) -> (usize, AffineMatrix) {
    let count = dim * (dim + 1) / 2;
    let off = sdp.add_vars(count);
    let mut am = AffineMatrix::zeros(dim);
    let mut k = off;
    for i in 0..dim {
        for j in i..dim {
            let mut e = Matrix::zeros(dim, dim);
            e[(i, j)] = 1.0;
            e[(j, i)] = 1.0;
            am.add_term(k, e);
            k += 1;
        }
    }
    (off, am)
}

fn sym_trace_terms(off: usize, dim: usize) -> Vec<(usize, f64)> {
    let mut out = Vec::new();
    let mut k = off;
    for i in 0..dim {
        for j in i..dim {
            if i == j {
                out.push((k, 1.0));
            }
            k += 1;
        }
    }
    out
}

fn extract_sym(x: &[f64], off: usize, dim: usize) -> SymMatrix {
    let mut m = Matrix::zeros(dim, dim);
    let mut k = off;
    for i in 0..dim {
        for j in i..dim {
            m[(i, j)] = x[k];
            m[(j, i)] = x[k];
            k += 1;
        }
    }
    SymMatrix::new(m)
}

/// The max-margin problem together with the variable layout.
pub struct DetectabilitySdp {
    pub problem: AffineSdp,
    pub system: ExtendedVertexSystem,
    offsets: [usize; 7],
}

/// Builds the certificate search for `template` (whose ρ must match `rho`).
pub fn build_detectability_sdp(
    envelope: &LipschitzEnvelope,
    template: &MultiplierTemplate,
    rho: f64,
    opts: &DetectOptions,
) -> Result<DetectabilitySdp, DetectError> {
    if let Some(r) = template.rho {
        if r != rho {
            return Err(DetectError::Iqc(IqcError::BadParams(format!(
                "template built for rho = {r}, verification requested at rho = {rho}"
            ))));
        }
    }
    if !(rho > 0.0 && rho < 1.0) {
        return Err(DetectError::Iqc(IqcError::BadParams(format!("rho = {rho} is not in (0, 1)"))));
    }
    let system = assemble_extended_vertices(envelope, &template.filter)?;
    let dims = system.dims;
    let nc = dims.n_chi();
    let mut sdp = AffineSdp::new(0);
    let (p_off, p_aff) = sym_var(&mut sdp, nc);
    let (q_off, q_aff) = sym_var(&mut sdp, dims.n_w);
    let (q0_off, q0_aff) = sym_var(&mut sdp, dims.n_w);
    let (r_off, r_aff) = sym_var(&mut sdp, dims.m);
    let (r0_off, r0_aff) = sym_var(&mut sdp, dims.n);
    let (mh_off, mh_aff) = sym_var(&mut sdp, dims.n_z);
    let mult_off = template.add_to_sdp(&mut sdp);
    let m_aff = template.m.shifted(mult_off);
    let z_aff = template.z.shifted(mult_off);

    let mut neg_m = m_aff.scaled(-1.0);
    neg_m.add_scaled(&mh_aff, -1.0);
    let pp = AffineMatrix::block_diag(&[&q_aff, &q0_aff, &r_aff, &r0_aff, &neg_m, &mh_aff]);
    let rho2 = rho * rho;
    let lmi_blocks: Vec<AffineMatrix> = system
        .vertices
        .par_iter()
        .chain(rayon::iter::once(&system.midpoint))
        .map(|v| {
            let (g1, g2, g3) = outer_factors(v);
            // −L = ρ² G₁ᵀPG₁ − G₂ᵀPG₂ + G₃ᵀP_pG₃ ⪰ tI
            let mut e = p_aff.congruence(&g1).scaled(rho2);
            e.add_scaled(&p_aff.congruence(&g2), -1.0);
            e.add_scaled(&pp.congruence(&g3), 1.0);
            e
        })
        .collect();
    let nv = system.vertices.len();
    for (k, e) in lmi_blocks.into_iter().enumerate() {
        let name = if k < nv { format!("dissipation vertex {k}") } else { "dissipation midpoint".to_string() };
        sdp.add_block(name, e, true);
    }
    let mut pbar = p_aff.clone();
    if dims.n_psi > 0 {
        pbar.add_scaled(&z_aff.embed(nc, nc - dims.n_psi), -1.0 / rho2);
    }
    sdp.add_block("P - diag(0, Z/rho^2)", pbar, true);
    for (name, a) in [("Q", &q_aff), ("Q0", &q0_aff), ("R", &r_aff), ("R0", &r0_aff), ("Mhat", &mh_aff)] {
        if a.dim() > 0 {
            sdp.add_block(name, a.clone(), false);
        }
    }
    let scale = opts.trace_scale.unwrap_or(1e3 * nc as f64);
    let mut tr = Vec::new();
    for (off, dim) in [(p_off, nc), (q_off, dims.n_w), (q0_off, dims.n_w), (r_off, dims.m), (r0_off, dims.n), (mh_off, dims.n_z)] {
        tr.extend(sym_trace_terms(off, dim).into_iter().map(|(v, c)| (v, -c)));
    }
    sdp.add_inequality(LinearExpr::new(scale, tr));
    for v in mult_off..mult_off + template.num_vars {
        sdp.add_inequality(LinearExpr::new(scale, vec![(v, 1.0)]));
        sdp.add_inequality(LinearExpr::new(scale, vec![(v, -1.0)]));
    }
    Ok(DetectabilitySdp {
        problem: sdp,
        system,
        offsets: [p_off, q_off, q0_off, r_off, r0_off, mh_off, mult_off],
    })
}

/// Max-margin LMI search for a robust detectability certificate.
pub fn verify_detectability(
    scenario: &Scenario,
    template: &MultiplierTemplate,
    rho: f64,
    opts: &DetectOptions,
) -> Result<DetectabilityCertificate, DetectError> {
    if template.p != scenario.dims().p {
        return Err(DetectError::DimMismatch(format!(
            "template has p = {}, scenario has p = {}",
            template.p,
            scenario.dims().p
        )));
    }
    certify(scenario, template, rho, opts, false)
}

/// Certificate for the model with the uncertainty channel removed.
pub fn verify_nominal(scenario: &Scenario, rho: f64, opts: &DetectOptions) -> Result<DetectabilityCertificate, DetectError> {
    let nominal = scenario.without_uncertainty();
    certify(&nominal, &empty_template(), rho, opts, true)
}

fn certify(
    scenario: &Scenario,
    template: &MultiplierTemplate,
    rho: f64,
    opts: &DetectOptions,
    nominal: bool,
) -> Result<DetectabilityCertificate, DetectError> {
    let built = build_detectability_sdp(&scenario.envelope, template, rho, opts)?;
    let sol = match solve_max_margin(&built.problem, &opts.sdp) {
        Ok(s) => s,
        Err(SdpError::Infeasible { margin }) => return Err(DetectError::Infeasible { margin }),
        Err(e) => return Err(DetectError::Solver(e)),
    };
    if !(sol.margin > opts.accept_margin) {
        return Err(DetectError::Infeasible { margin: sol.margin });
    }
    let dims = built.system.dims;
    let [p_off, q_off, q0_off, r_off, r0_off, mh_off, mult_off] = built.offsets;
    let x = &sol.x;
    let params = &x[mult_off..mult_off + template.num_vars];
    let multiplier = template.instantiate(params, rho)?;
    let p = extract_sym(x, p_off, dims.n_chi());
    let k = dims.n + dims.n_psi;
    let p0 = SymMatrix::new(p.as_matrix().view((0, 0), (k, k)).into_owned());
    let mut cert = DetectabilityCertificate {
        scenario: scenario.name.clone(),
        nominal,
        rho,
        dims,
        p,
        q: extract_sym(x, q_off, dims.n_w),
        q0: extract_sym(x, q0_off, dims.n_w),
        r: extract_sym(x, r_off, dims.m),
        r0: extract_sym(x, r0_off, dims.n),
        m_hat: extract_sym(x, mh_off, dims.n_z),
        p0,
        multiplier,
        margin: sol.margin,
        vertices: built.system.vertices,
        midpoint: built.system.midpoint,
        interior_samples: 0,
        interior_max_eig: f64::NEG_INFINITY,
    };
    let worst = interior_max_eig(&cert, &scenario.envelope, opts.interior_samples, opts.seed);
    cert.interior_samples = opts.interior_samples;
    cert.interior_max_eig = worst;
    if worst > opts.interior_tolerance {
        return Err(DetectError::InteriorViolation { max_eig: worst });
    }
    Ok(cert)
}

/// Largest eigenvalue of the LMI matrix over random interior points of the box.
pub fn interior_max_eig(cert: &DetectabilityCertificate, envelope: &LipschitzEnvelope, samples: usize, seed: u64) -> f64 {
    let tb = ThetaBox::new(envelope);
    let pp = cert.p_p();
    (0..samples)
        .into_par_iter()
        .map(|s| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(s as u64);
            let theta = tb.sample(&mut rng);
            let v = extended_system_at(&cert.dims, &cert.multiplier.filter, &theta);
            max_eig(&lmi_matrix(cert.rho, cert.p.as_matrix(), &pp, &v))
        })
        .reduce(|| f64::NEG_INFINITY, f64::max)
}

/// Certificate conditions re-evaluated from the stored matrices.
#[derive(Debug, Clone, PartialEq)]
pub struct CertificateCheck {
    /// Largest eigenvalue of the LMI matrix over stored vertices and midpoint.
    pub vertex_max_eig: f64,
    pub p_bar_min_eig: f64,
    /// Smallest eigenvalue over `Q, Q0, R, R0, M̂`.
    pub weights_min_eig: f64,
    /// Smallest eigenvalue of `P0 − P₁₁`.
    pub p0_gap_min_eig: f64,
    pub multiplier_violation: f64,
}

impl CertificateCheck {
    pub fn passed(&self) -> bool {
        self.vertex_max_eig <= 1e-7
            && self.p_bar_min_eig > 1e-8
            && self.weights_min_eig >= -1e-8
            && self.p0_gap_min_eig >= -1e-8
            && self.multiplier_violation <= 1e-7
    }
}

pub fn recheck_certificate(cert: &DetectabilityCertificate) -> Result<CertificateCheck, DetectError> {
    let pp = cert.p_p();
    let vertex_max_eig = cert
        .vertices
        .iter()
        .chain(std::iter::once(&cert.midpoint))
        .map(|v| max_eig(&lmi_matrix(cert.rho, cert.p.as_matrix(), &pp, v)))
        .fold(f64::NEG_INFINITY, f64::max);
    let weights_min_eig = [&cert.q, &cert.q0, &cert.r, &cert.r0, &cert.m_hat]
        .iter()
        .map(|m| m.min_eigenvalue())
        .fold(f64::INFINITY, f64::min);
    let template = template_from_families(&cert.multiplier.families, cert.dims.p, cert.rho)?;
    let multiplier_violation = if template.num_vars == cert.multiplier.params.len() {
        let inst = template.instantiate(&cert.multiplier.params, cert.rho)?;
        let mismatch = (inst.m.as_matrix() - cert.multiplier.m.as_matrix())
            .amax()
            .max(if inst.z.dim() > 0 { (inst.z.as_matrix() - cert.multiplier.z.as_matrix()).amax() } else { 0.0 });
        template.constraint_violation(&cert.multiplier.params).max(mismatch)
    } else {
        f64::INFINITY
    };
    Ok(CertificateCheck {
        vertex_max_eig,
        p_bar_min_eig: cert.p_bar().min_eigenvalue(),
        weights_min_eig,
        p0_gap_min_eig: min_eig(&(cert.p0.as_matrix() - cert.p11().as_matrix())),
        multiplier_violation,
    })
}

/// Replaces `P0` by a user choice, which must dominate `P₁₁`.
pub fn with_p0(mut cert: DetectabilityCertificate, p0: SymMatrix) -> Result<DetectabilityCertificate, DetectError> {
    let k = cert.dims.n + cert.dims.n_psi;
    if p0.dim() != k {
        return Err(DetectError::DimMismatch(format!("P0 must be {k}×{k}")));
    }
    if min_eig(&(p0.as_matrix() - cert.p11().as_matrix())) < -1e-8 {
        return Err(DetectError::Format("P0 must satisfy P0 ⪰ P11".into()));
    }
    cert.p0 = p0;
    Ok(cert)
}

/// Signals along one step of a true/model trajectory pair.
#[derive(Debug, Clone)]
pub struct PairStep {
    pub chi: Vector,
    pub chi_next: Vector,
    pub w: Vector,
    pub w_tilde: Vector,
    pub xhat: Vector,
    pub x_tilde: Vector,
    pub y: Vector,
    pub y_tilde: Vector,
    pub z: Vector,
    pub z_tilde: Vector,
}

/// Left minus right side of the dissipation inequality (≤ 0 when it holds).
pub fn dissipation_gap(cert: &DetectabilityCertificate, s: &PairStep) -> f64 {
    let pm = &cert.p;
    let lhs = pm.quad_form(&s.chi_next);
    let ew = &s.w - &s.w_tilde;
    let ey = &s.y - &s.y_tilde;
    let ex = &s.xhat - &s.x_tilde;
    let mm = SymMatrix::new(cert.multiplier.m.as_matrix() + cert.m_hat.as_matrix());
    let rhs = cert.rho * cert.rho * pm.quad_form(&s.chi)
        + cert.q0.quad_form(&s.w)
        + cert.q.quad_form(&ew)
        + cert.r0.quad_form(&ex)
        + cert.m_hat.quad_form(&s.z_tilde)
        + cert.r.quad_form(&ey)
        - mm.quad_form(&s.z);
    lhs - rhs
}

fn chi(x: &Vector, xt: &Vector, psi: &Vector, psit: &Vector) -> Vector {
    let mut out = Vec::with_capacity(2 * x.len() + 2 * psi.len());
    out.extend((x - xt).iter());
    out.extend((psi - psit).iter());
    out.extend(x.iter());
    out.extend(psi.iter());
    Vector::from_vec(out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct DissipationReport {
    pub pairs: usize,
    pub steps_checked: usize,
    /// Steps dropped because a state left the envelope's probe region.
    pub steps_outside_region: usize,
    /// Largest left-minus-right value (≤ 0 means the inequality held).
    pub worst_violation: f64,
}

impl DissipationReport {
    pub fn passed(&self, tol: f64) -> bool {
        self.worst_violation <= tol
    }
}

/// Simulates true/model trajectory pairs driven by a common input and checks
/// the dissipation inequality at every step inside the envelope region.
pub fn validate_certificate(
    cert: &DetectabilityCertificate,
    scenario: &Scenario,
    pairs: usize,
    length: usize,
    seed: u64,
) -> Result<DissipationReport, DetectError> {
    let sd = scenario.dims();
    if sd.n != cert.dims.n || sd.n_w != cert.dims.n_w || sd.m != cert.dims.m || sd.p != cert.dims.p {
        return Err(DetectError::DimMismatch("certificate does not match the scenario".into()));
    }
    let region = scenario.probe_box();
    let wbox = scenario.boxes.w.clipped(scenario.probe_radius);
    let dbox = BoxSet::symmetric(sd.p, scenario.d_range);
    let filter = &cert.multiplier.filter;
    let n_psi = cert.dims.n_psi;
    let results: Vec<(usize, usize, f64)> = (0..pairs)
        .into_par_iter()
        .map(|pair| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(pair as u64);
            let half = BoxSet {
                lower: &region.lower * 0.5,
                upper: &region.upper * 0.5,
            };
            let mut x = half.sample(&mut rng);
            let mut xt = region.project(&(&x + Vector::from_fn(sd.n, |_, _| rng.random_range(-1.0..=1.0))));
            let mut psi = Vector::zeros(n_psi);
            let mut psit = Vector::zeros(n_psi);
            let (mut checked, mut outside, mut worst) = (0usize, 0usize, f64::NEG_INFINITY);
            for _ in 0..length {
                let xhat = &x + Vector::from_fn(sd.n, |_, _| rng.random_range(-0.5..=0.5));
                if !(region.contains(&x, 0.0) && region.contains(&xt, 0.0) && region.contains(&xhat, 0.0)) {
                    outside += 1;
                    break;
                }
                let w = wbox.sample(&mut rng);
                let wt = wbox.sample(&mut rng);
                let dt = dbox.sample(&mut rng);
                let plant = &scenario.plant;
                let u = scenario.controller.control(&xhat);
                let v = plant.g(&x, &w);
                let d = scenario.uncertainty.eval(&v);
                let vt = plant.g(&xt, &wt);
                let (psi_next, z) = if sd.p > 0 {
                    filter_step(filter, &psi, &v, &d).expect("dims checked")
                } else {
                    (Vector::zeros(0), Vector::zeros(0))
                };
                let (psit_next, zt) = if sd.p > 0 {
                    filter_step(filter, &psit, &vt, &dt).expect("dims checked")
                } else {
                    (Vector::zeros(0), Vector::zeros(0))
                };
                let x_next = plant.f(&x, &w, &d, &u);
                let xt_next = plant.f(&xt, &wt, &dt, &u);
                let step = PairStep {
                    chi: chi(&x, &xt, &psi, &psit),
                    chi_next: chi(&x_next, &xt_next, &psi_next, &psit_next),
                    y: plant.h(&x, &w, &d, &u),
                    y_tilde: plant.h(&xt, &wt, &dt, &u),
                    w,
                    w_tilde: wt,
                    xhat,
                    x_tilde: xt.clone(),
                    z,
                    z_tilde: zt,
                };
                worst = worst.max(dissipation_gap(cert, &step));
                checked += 1;
                x = x_next;
                xt = xt_next;
                psi = psi_next;
                psit = psit_next;
            }
            (checked, outside, worst)
        })
        .collect();
    Ok(DissipationReport {
        pairs,
        steps_checked: results.iter().map(|r| r.0).sum(),
        steps_outside_region: results.iter().map(|r| r.1).sum(),
        worst_violation: results.iter().map(|r| r.2).fold(f64::NEG_INFINITY, f64::max),
    })
}

// ---------------------------------------------------------------------------
// JSON

pub const CERTIFICATE_FORMAT: &str = "robust-mhe-certificate/1";

/// A float written with 17 significant digits.
#[derive(Debug, Clone, Copy, Deserialize)]
#[serde(transparent)]
struct Num(f64);

impl Serialize for Num {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        if !self.0.is_finite() {
            return Err(serde::ser::Error::custom("non-finite value in certificate"));
        }
        let raw = RawValue::from_string(format!("{:.16e}", self.0)).map_err(serde::ser::Error::custom)?;
        raw.serialize(s)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct MatJson {
    rows: usize,
    cols: usize,
    /// row-major
    data: Vec<Num>,
}

impl From<&Matrix> for MatJson {
    fn from(m: &Matrix) -> Self {
        MatJson {
            rows: m.nrows(),
            cols: m.ncols(),
            data: (0..m.nrows()).flat_map(|i| (0..m.ncols()).map(move |j| Num(m[(i, j)]))).collect(),
        }
    }
}

impl MatJson {
    fn to_matrix(&self) -> Result<Matrix, DetectError> {
        if self.data.len() != self.rows * self.cols {
            return Err(DetectError::Format(format!("matrix {}×{} has {} entries", self.rows, self.cols, self.data.len())));
        }
        Ok(Matrix::from_row_iterator(self.rows, self.cols, self.data.iter().map(|n| n.0)))
    }

    fn to_sym(&self) -> Result<SymMatrix, DetectError> {
        SymMatrix::try_from(self.to_matrix()?).map_err(|e| DetectError::Format(e.to_string()))
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct FilterJson {
    a: MatJson,
    b: MatJson,
    c: MatJson,
    d: MatJson,
}

impl From<&FilterRealization> for FilterJson {
    fn from(f: &FilterRealization) -> Self {
        FilterJson {
            a: (&f.a).into(),
            b: (&f.b).into(),
            c: (&f.c).into(),
            d: (&f.d).into(),
        }
    }
}

impl FilterJson {
    fn to_filter(&self) -> Result<FilterRealization, DetectError> {
        Ok(FilterRealization::new(
            self.a.to_matrix()?,
            self.b.to_matrix()?,
            self.c.to_matrix()?,
            self.d.to_matrix()?,
        )?)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
enum FamilyJson {
    ZamesFalb { nu: usize, alpha: Num, beta: Num, symmetric: bool },
    StaticPolytopic { alpha: Num, beta: Num },
    Parametric { a: Num, b: Num, phi: FilterJson },
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct VertexJson {
    a: MatJson,
    b: MatJson,
    c: MatJson,
    d: MatJson,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct MultiplierJson {
    families: Vec<FamilyJson>,
    params: Vec<Num>,
    filter: FilterJson,
    m: MatJson,
    z: MatJson,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct CertJson {
    format: String,
    scenario: String,
    nominal: bool,
    rho: Num,
    margin: Num,
    dims: DetectDims,
    p: MatJson,
    q: MatJson,
    q0: MatJson,
    r: MatJson,
    r0: MatJson,
    m_hat: MatJson,
    p0: MatJson,
    multiplier: MultiplierJson,
    vertices: Vec<VertexJson>,
    midpoint: VertexJson,
    interior_samples: usize,
    interior_max_eig: Num,
}

#[derive(Deserialize)]
struct FileJson<'a> {
    sha256: String,
    #[serde(borrow)]
    certificate: &'a RawValue,
}

fn vertex_json(v: &ExtendedVertex) -> VertexJson {
    VertexJson {
        a: (&v.a).into(),
        b: (&v.b).into(),
        c: (&v.c).into(),
        d: (&v.d).into(),
    }
}

fn vertex_from(v: &VertexJson) -> Result<ExtendedVertex, DetectError> {
    Ok(ExtendedVertex {
        a: v.a.to_matrix()?,
        b: v.b.to_matrix()?,
        c: v.c.to_matrix()?,
        d: v.d.to_matrix()?,
    })
}

fn sha256_hex(s: &str) -> String {
    hex::encode(Sha256::digest(s.as_bytes()))
}

/// Serializes the certificate with its content hash.
pub fn certificate_to_json(cert: &DetectabilityCertificate) -> Result<String, DetectError> {
    let text = certificate_body(cert)?;
    Ok(format!("{{\"sha256\":\"{}\",\"certificate\":{}}}\n", sha256_hex(&text), text))
}

/// SHA-256 of the serialized certificate body.
pub fn certificate_hash(cert: &DetectabilityCertificate) -> Result<String, DetectError> {
    Ok(sha256_hex(&certificate_body(cert)?))
}

fn certificate_body(cert: &DetectabilityCertificate) -> Result<String, DetectError> {
    let families = cert
        .multiplier
        .families
        .iter()
        .map(|f| match f {
            MultiplierFamily::ZamesFalb { nu, alpha, beta, symmetric } => FamilyJson::ZamesFalb {
                nu: *nu,
                alpha: Num(*alpha),
                beta: Num(*beta),
                symmetric: *symmetric,
            },
            MultiplierFamily::StaticPolytopic { alpha, beta } => FamilyJson::StaticPolytopic {
                alpha: Num(*alpha),
                beta: Num(*beta),
            },
            MultiplierFamily::Parametric { a, b, phi } => FamilyJson::Parametric {
                a: Num(*a),
                b: Num(*b),
                phi: phi.into(),
            },
        })
        .collect();
    let body = CertJson {
        format: CERTIFICATE_FORMAT.into(),
        scenario: cert.scenario.clone(),
        nominal: cert.nominal,
        rho: Num(cert.rho),
        margin: Num(cert.margin),
        dims: cert.dims,
        p: cert.p.as_matrix().into(),
        q: cert.q.as_matrix().into(),
        q0: cert.q0.as_matrix().into(),
        r: cert.r.as_matrix().into(),
        r0: cert.r0.as_matrix().into(),
        m_hat: cert.m_hat.as_matrix().into(),
        p0: cert.p0.as_matrix().into(),
        multiplier: MultiplierJson {
            families,
            params: cert.multiplier.params.iter().map(|v| Num(*v)).collect(),
            filter: (&cert.multiplier.filter).into(),
            m: cert.multiplier.m.as_matrix().into(),
            z: cert.multiplier.z.as_matrix().into(),
        },
        vertices: cert.vertices.iter().map(vertex_json).collect(),
        midpoint: vertex_json(&cert.midpoint),
        interior_samples: cert.interior_samples,
        interior_max_eig: Num(if cert.interior_max_eig.is_finite() { cert.interior_max_eig } else { -f64::MAX }),
    };
    serde_json::to_string(&body).map_err(|e| DetectError::Format(e.to_string()))
}

pub fn certificate_from_json(text: &str) -> Result<DetectabilityCertificate, DetectError> {
    let file: FileJson = serde_json::from_str(text).map_err(|e| DetectError::Format(e.to_string()))?;
    if sha256_hex(file.certificate.get()) != file.sha256 {
        return Err(DetectError::HashMismatch);
    }
    let c: CertJson = serde_json::from_str(file.certificate.get()).map_err(|e| DetectError::Format(e.to_string()))?;
    if c.format != CERTIFICATE_FORMAT {
        return Err(DetectError::Format(format!("unknown format {:?}", c.format)));
    }
    let families = c
        .multiplier
        .families
        .iter()
        .map(|f| {
            Ok(match f {
                FamilyJson::ZamesFalb { nu, alpha, beta, symmetric } => MultiplierFamily::ZamesFalb {
                    nu: *nu,
                    alpha: alpha.0,
                    beta: beta.0,
                    symmetric: *symmetric,
                },
                FamilyJson::StaticPolytopic { alpha, beta } => MultiplierFamily::StaticPolytopic {
                    alpha: alpha.0,
                    beta: beta.0,
                },
                FamilyJson::Parametric { a, b, phi } => MultiplierFamily::Parametric {
                    a: a.0,
                    b: b.0,
                    phi: phi.to_filter()?,
                },
            })
        })
        .collect::<Result<Vec<_>, DetectError>>()?;
    let multiplier = MultiplierInstance {
        filter: c.multiplier.filter.to_filter()?,
        rho: c.rho.0,
        m: c.multiplier.m.to_sym()?,
        z: c.multiplier.z.to_sym()?,
        families,
        params: c.multiplier.params.iter().map(|n| n.0).collect(),
    };
    Ok(DetectabilityCertificate {
        scenario: c.scenario,
        nominal: c.nominal,
        rho: c.rho.0,
        dims: c.dims,
        p: c.p.to_sym()?,
        q: c.q.to_sym()?,
        q0: c.q0.to_sym()?,
        r: c.r.to_sym()?,
        r0: c.r0.to_sym()?,
        m_hat: c.m_hat.to_sym()?,
        p0: c.p0.to_sym()?,
        multiplier,
        margin: c.margin.0,
        vertices: c.vertices.iter().map(vertex_from).collect::<Result<_, _>>()?,
        midpoint: vertex_from(&c.midpoint)?,
        interior_samples: c.interior_samples,
        interior_max_eig: c.interior_max_eig.0,
    })
}

pub fn write_certificate(cert: &DetectabilityCertificate, path: &Path) -> Result<(), DetectError> {
    std::fs::write(path, certificate_to_json(cert)?)?;
    Ok(())
}

pub fn read_certificate(path: &Path) -> Result<DetectabilityCertificate, DetectError> {
    certificate_from_json(&std::fs::read_to_string(path)?)
}

/// The combined slope-restricted multiplier used for the benchmark: FIR
/// Zames-Falb of order `nu` (symmetric `Ŵ`) plus the static polytopic family.
pub fn example_template(nu: usize, alpha: f64, beta: f64, p: usize, rho: f64) -> Result<MultiplierTemplate, DetectError> {
    example_template_with(nu, alpha, beta, p, rho, true)
}

/// As [`example_template`] with the symmetry of `Ŵ` selectable.
pub fn example_template_with(
    nu: usize,
    alpha: f64,
    beta: f64,
    p: usize,
    rho: f64,
    symmetric: bool,
) -> Result<MultiplierTemplate, DetectError> {
    let zf = crate::iqc::build_zames_falb_template_with(nu, alpha, beta, p, rho, symmetric)?;
    let st = crate::iqc::build_static_polytopic_template(alpha, beta, p)?;
    Ok(crate::iqc::combine(&[zf, st])?)
}

/// Grid of `ρ²` values scanned by [`search_rho`] for the example.
pub const RHO2_GRID: &[f64] = &[0.86, 0.90, 0.95, 0.98, 0.99, 0.995];

/// Zames-Falb order used with the non-symmetric template on the example.
pub const EXAMPLE_NU: usize = 4;

/// Tries each `ρ²` in increasing order and returns the first certificate.
/// The error of the last attempt is returned when none succeeds.
pub fn search_rho(
    scenario: &Scenario,
    rho2_grid: &[f64],
    template: impl Fn(f64) -> Result<MultiplierTemplate, DetectError>,
    opts: &DetectOptions,
) -> Result<DetectabilityCertificate, DetectError> {
    let mut last = DetectError::Format("empty ρ² grid".into());
    for &rho2 in rho2_grid {
        let rho = rho2.sqrt();
        match template(rho).and_then(|t| verify_detectability(scenario, &t, rho, opts)) {
            Ok(cert) => return Ok(cert),
            Err(e) => last = e,
        }
    }
    Err(last)
}

/// Certificate for the example on [`RHO2_GRID`] with non-symmetric
/// Zames-Falb of order [`EXAMPLE_NU`] plus the static family.
pub fn example_certificate(scenario: &Scenario, opts: &DetectOptions) -> Result<DetectabilityCertificate, DetectError> {
    search_rho(scenario, RHO2_GRID, |rho| example_template_with(EXAMPLE_NU, 0.0, 0.25, 1, rho, false), opts)
}
