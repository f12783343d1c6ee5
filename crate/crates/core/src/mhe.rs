//! Robust moving horizon estimation on the augmented state `θ = col(x, ψ)`,
//! the minimum-horizon bound and the ISS constants, plus the standard MHE
//! baseline that ignores the uncertainty.

use std::collections::VecDeque;

use thiserror::Error;

use crate::detect::DetectabilityCertificate;
use crate::iqc::FilterRealization;
use crate::model::Scenario;
use crate::numkit::{generalized_max_eig, min_eig, psd_factor, solve_spd, Matrix, NumError, SymMatrix, Vector};

#[derive(Debug, Error)]
pub enum MheError {
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("invalid certificate: {0}")]
    InvalidCertificate(String),
    #[error("dimension mismatch: {0}")]
    DimMismatch(String),
    #[error("estimator state: {0}")]
    State(String),
    #[error("window solver stopped after {iterations} iterations with KKT residual {kkt:e}")]
    SolverFailure {
        iterations: usize,
        kkt: f64,
        /// Best feasible iterate found.
        best: Box<MheSolution>,
    },
    #[error("window problem infeasible (constraint value {lambda:e})")]
    InfeasibleWindow { lambda: f64 },
}

impl From<NumError> for MheError {
    fn from(e: NumError) -> Self {
        MheError::InvalidCertificate(e.to_string())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MheConfig {
    /// Estimation horizon `N`.
    pub horizon: usize,
    pub epsilon: f64,
    pub xi: f64,
    pub kkt_tol: f64,
    pub max_iterations: usize,
    /// Bound on `|d̂|`; `None` uses ten times the scenario's validation range.
    pub d_max: Option<f64>,
}

impl Default for MheConfig {
    fn default() -> Self {
        MheConfig {
            horizon: 15,
            epsilon: 0.1,
            xi: 500.0,
            kkt_tol: 1e-8,
            max_iterations: 200,
            d_max: None,
        }
    }
}

impl MheConfig {
    pub fn validate(&self) -> Result<(), MheError> {
        if self.horizon < 1 {
            return Err(MheError::InvalidConfig("horizon must be at least 1".into()));
        }
        if !(self.epsilon > 0.0) {
            return Err(MheError::InvalidConfig(format!("epsilon must be positive, got {}", self.epsilon)));
        }
        if !(self.xi >= 0.0) {
            return Err(MheError::InvalidConfig(format!("xi must be nonnegative, got {}", self.xi)));
        }
        if !(self.kkt_tol > 0.0) || self.max_iterations == 0 {
            return Err(MheError::InvalidConfig("solver tolerance and iteration cap must be positive".into()));
        }
        if let Some(d) = self.d_max {
            if !(d > 0.0) {
                return Err(MheError::InvalidConfig(format!("d_max must be positive, got {d}")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EstimatorKind {
    Robust,
    Standard,
}

/// Weights and model pieces of the window problem, read off a certificate.
#[derive(Clone)]
pub struct MheDesign {
    pub kind: EstimatorKind,
    pub scenario: Scenario,
    pub rho: f64,
    pub horizon: usize,
    pub epsilon: f64,
    pub xi: f64,
    pub kkt_tol: f64,
    pub max_iterations: usize,
    pub d_max: f64,
    /// `None` for the standard estimator.
    pub filter: Option<FilterRealization>,
    l_p0: Matrix,
    l_q: Matrix,
    l_r: Matrix,
    l_mhat: Matrix,
    l_r0: Matrix,
    prior_coef: f64,
    w_coef: f64,
    y_coef: f64,
}

impl std::fmt::Debug for MheDesign {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("MheDesign")
            .field("kind", &self.kind)
            .field("scenario", &self.scenario.name)
            .field("rho", &self.rho)
            .field("horizon", &self.horizon)
            .finish_non_exhaustive()
    }
}

fn factor(m: &SymMatrix, name: &str) -> Result<Matrix, MheError> {
    let scale = m.as_matrix().amax().max(1.0);
    psd_factor(m, 1e-9 * scale).map_err(|e| MheError::InvalidCertificate(format!("{name}: {e}")))
}

impl MheDesign {
    /// Robust estimator from a certificate with the uncertainty channel.
    pub fn robust(cert: &DetectabilityCertificate, cfg: &MheConfig, scenario: &Scenario) -> Result<Self, MheError> {
        cfg.validate()?;
        let sd = scenario.dims();
        if cert.nominal {
            return Err(MheError::InvalidCertificate("nominal certificate given to the robust estimator".into()));
        }
        if cert.dims.n != sd.n || cert.dims.n_w != sd.n_w || cert.dims.m != sd.m || cert.dims.p != sd.p {
            return Err(MheError::DimMismatch("certificate does not match the scenario".into()));
        }
        let filter = cert.multiplier.filter.clone();
        Ok(MheDesign {
            kind: EstimatorKind::Robust,
            scenario: scenario.clone(),
            rho: cert.rho,
            horizon: cfg.horizon,
            epsilon: cfg.epsilon,
            xi: cfg.xi,
            kkt_tol: cfg.kkt_tol,
            max_iterations: cfg.max_iterations,
            d_max: cfg.d_max.unwrap_or(10.0 * scenario.d_range),
            filter: Some(filter),
            l_p0: factor(&cert.p0, "P0")?,
            l_q: factor(&cert.q, "Q")?,
            l_r: factor(&cert.r, "R")?,
            l_mhat: factor(&cert.m_hat, "M̂")?,
            l_r0: factor(&cert.r0, "R0")?,
            prior_coef: 2.0 + cfg.epsilon,
            w_coef: 2.0 + cfg.xi,
            y_coef: 1.0 + cfg.xi,
        })
    }

    /// Baseline estimator with `d̂ ≡ 0`, no filter and no trust constraint.
    pub fn standard(nominal: &DetectabilityCertificate, cfg: &MheConfig, scenario: &Scenario) -> Result<Self, MheError> {
        cfg.validate()?;
        let sd = scenario.dims();
        if nominal.dims.n_psi != 0 || nominal.dims.n != sd.n || nominal.dims.n_w != sd.n_w || nominal.dims.m != sd.m {
            return Err(MheError::DimMismatch("nominal certificate does not match the scenario".into()));
        }
        Ok(MheDesign {
            kind: EstimatorKind::Standard,
            scenario: scenario.clone(),
            rho: nominal.rho,
            horizon: cfg.horizon,
            epsilon: 0.0,
            xi: 0.0,
            kkt_tol: cfg.kkt_tol,
            max_iterations: cfg.max_iterations,
            d_max: 0.0,
            filter: None,
            l_p0: factor(&nominal.p0, "P0")?,
            l_q: factor(&nominal.q, "Q")?,
            l_r: factor(&nominal.r, "R")?,
            l_mhat: Matrix::zeros(0, 0),
            l_r0: Matrix::zeros(0, sd.n),
            prior_coef: 2.0,
            w_coef: 2.0,
            y_coef: 1.0,
        })
    }

    pub fn n_psi(&self) -> usize {
        self.filter.as_ref().map_or(0, |f| f.n_psi())
    }

    pub fn n_theta(&self) -> usize {
        self.scenario.dims().n + self.n_psi()
    }

    /// Number of free `d̂` entries per stage.
    fn n_d(&self) -> usize {
        match self.kind {
            EstimatorKind::Robust => self.scenario.dims().p,
            EstimatorKind::Standard => 0,
        }
    }

    fn has_trust_constraint(&self) -> bool {
        self.kind == EstimatorKind::Robust
    }

    /// Initial augmented estimate `col(x̂₀, 0)`.
    pub fn initial_theta(&self, xhat0: &Vector) -> Vector {
        let n = self.scenario.dims().n;
        let mut t = Vector::zeros(self.n_theta());
        t.rows_mut(0, n).copy_from(xhat0);
        t
    }
}

/// Window variables of one solve: `θ̂_{k−N_k|k}` and the stage sequences.
#[derive(Debug, Clone, PartialEq)]
pub struct WindowVars {
    pub theta0: Vector,
    pub w: Vec<Vector>,
    pub d: Vec<Vector>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MheSolution {
    pub time: usize,
    pub vars: WindowVars,
    /// `θ̂_{j|k}` for `j = k−N_k, …, k`.
    pub thetas: Vec<Vector>,
    pub y_hat: Vec<Vector>,
    pub z_hat: Vec<Vector>,
    pub cost: f64,
    /// Value of the trust constraint (feasible when `≤ 0`).
    pub lambda: f64,
    /// Largest violation of the `W`, `d̂`, `X` and `Y` bounds.
    pub bound_violation: f64,
    /// Multiplier estimate of the trust constraint.
    pub multiplier: f64,
    pub kkt: f64,
    pub iterations: usize,
    pub converged: bool,
}

impl MheSolution {
    pub fn x_hat(&self, n: usize) -> Vec<Vector> {
        self.thetas.iter().map(|t| t.rows(0, n).into_owned()).collect()
    }
}

/// Per-run estimator memory.
#[derive(Debug, Clone)]
pub struct MheState {
    pub k: usize,
    horizon: usize,
    /// `θ̂_i` for `i ∈ [k−N_k, k−1]`, plus `θ̂_k` once estimated.
    thetas: VecDeque<Vector>,
    inputs: VecDeque<Vector>,
    outputs: VecDeque<Vector>,
    initial: Vector,
    estimated: bool,
    warm: Option<WarmStart>,
}

#[derive(Debug, Clone)]
struct WarmStart {
    vars: WindowVars,
    /// `θ̂_{k−N_k+1|k}` of the previous solve.
    second: Vector,
    multiplier: f64,
}

impl MheState {
    pub fn new(theta0: Vector, horizon: usize) -> Self {
        MheState {
            k: 0,
            horizon,
            thetas: VecDeque::new(),
            inputs: VecDeque::new(),
            outputs: VecDeque::new(),
            initial: theta0,
            estimated: false,
            warm: None,
        }
    }

    pub fn for_design(design: &MheDesign, xhat0: &Vector) -> Self {
        MheState::new(design.initial_theta(xhat0), design.horizon)
    }

    pub fn window_len(&self) -> usize {
        self.k.min(self.horizon)
    }

    /// Latest published estimate `θ̂_k`.
    pub fn current(&self) -> Option<&Vector> {
        if self.estimated {
            self.thetas.back()
        } else {
            None
        }
    }

    /// Buffered published estimates `θ̂_i`, oldest first.
    pub fn history(&self) -> impl Iterator<Item = &Vector> {
        self.thetas.iter()
    }

    /// Stores the applied input `u_k` and measurement `y_k` and advances `k`.
    pub fn record(&mut self, u: Vector, y: Vector) -> Result<(), MheError> {
        if !self.estimated {
            return Err(MheError::State(format!("no estimate published at k = {}", self.k)));
        }
        self.inputs.push_back(u);
        self.outputs.push_back(y);
        while self.inputs.len() > self.horizon {
            self.inputs.pop_front();
            self.outputs.pop_front();
        }
        while self.thetas.len() > self.horizon {
            self.thetas.pop_front();
        }
        self.k += 1;
        self.estimated = false;
        Ok(())
    }
}

struct Sim {
    thetas: Vec<Vector>,
    ys: Vec<Vector>,
    zs: Vec<Vector>,
    dthetas: Vec<Matrix>,
    dys: Vec<Matrix>,
    dzs: Vec<Matrix>,
}

/// Residual form of the window problem: `J = ‖r‖²`, `Λ = ‖a‖² − ‖b‖²`.
struct Residuals {
    r: Vector,
    jr: Matrix,
    a: Vector,
    ja: Matrix,
    b: Vector,
    jb: Matrix,
    /// Extra inequalities `c(v) ≤ 0` from finite `X`/`Y` bounds.
    extra: Vec<(f64, Vector)>,
    sim: Sim,
}

/// The nonlinear program solved at one time step.
pub struct WindowProblem<'a> {
    design: &'a MheDesign,
    pub time: usize,
    pub nk: usize,
    prior: Vector,
    inputs: Vec<Vector>,
    outputs: Vec<Vector>,
    published: Vec<Vector>,
    lower: Vector,
    upper: Vector,
}

fn stack_residual(
    r: &mut Vec<f64>,
    jr: &mut Vec<Vec<f64>>,
    scale: f64,
    l: &Matrix,
    val: &Vector,
    dval: Option<&Matrix>,
    with_jac: bool,
) {
    if l.nrows() == 0 {
        return;
    }
    let s = scale.sqrt();
    let rv = l * val * s;
    r.extend(rv.iter());
    if with_jac {
        let jm = l * dval.expect("sensitivity") * s;
        for i in 0..jm.nrows() {
            jr.push(jm.row(i).iter().copied().collect());
        }
    }
}

fn to_matrix(rows: Vec<Vec<f64>>, cols: usize) -> Matrix {
    let mut m = Matrix::zeros(rows.len(), cols);
    for (i, row) in rows.iter().enumerate() {
        for (j, v) in row.iter().enumerate() {
            m[(i, j)] = *v;
        }
    }
    m
}

impl<'a> WindowProblem<'a> {
    pub fn new(design: &'a MheDesign, state: &MheState) -> Result<Self, MheError> {
        let nk = state.window_len();
        if state.estimated {
            return Err(MheError::State(format!("estimate at k = {} already published", state.k)));
        }
        if state.thetas.len() < nk || state.inputs.len() < nk {
            return Err(MheError::State("buffers shorter than the window".into()));
        }
        let th: Vec<_> = state.thetas.iter().skip(state.thetas.len() - nk).cloned().collect();
        let n = design.scenario.dims().n;
        let prior = th.first().cloned().unwrap_or_else(|| state.initial.clone());
        if prior.len() != design.n_theta() {
            return Err(MheError::DimMismatch(format!(
                "state holds θ of length {}, design expects {}",
                prior.len(),
                design.n_theta()
            )));
        }
        let inputs: Vec<_> = state.inputs.iter().skip(state.inputs.len() - nk).cloned().collect();
        let outputs: Vec<_> = state.outputs.iter().skip(state.outputs.len() - nk).cloned().collect();
        let published = th.iter().map(|t| t.rows(0, n).into_owned()).collect();
        let mut p = WindowProblem {
            design,
            time: state.k,
            nk,
            prior,
            inputs,
            outputs,
            published,
            lower: Vector::zeros(0),
            upper: Vector::zeros(0),
        };
        let dim = p.dim();
        let (mut lo, mut hi) = (Vector::from_element(dim, f64::NEG_INFINITY), Vector::from_element(dim, f64::INFINITY));
        let wb = &design.scenario.boxes.w;
        let (nw, nd) = (design.scenario.dims().n_w, design.n_d());
        for s in 0..nk {
            let o = p.stage_offset(s);
            lo.rows_mut(o, nw).copy_from(&wb.lower);
            hi.rows_mut(o, nw).copy_from(&wb.upper);
            lo.rows_mut(o + nw, nd).fill(-design.d_max);
            hi.rows_mut(o + nw, nd).fill(design.d_max);
        }
        p.lower = lo;
        p.upper = hi;
        Ok(p)
    }

    /// Number of decision variables.
    pub fn dim(&self) -> usize {
        let sd = self.design.scenario.dims();
        self.design.n_theta() + self.nk * (sd.n_w + self.design.n_d())
    }

    fn stage_offset(&self, s: usize) -> usize {
        let sd = self.design.scenario.dims();
        self.design.n_theta() + s * (sd.n_w + self.design.n_d())
    }

    pub fn pack(&self, vars: &WindowVars) -> Vector {
        let mut v = Vector::zeros(self.dim());
        let nt = self.design.n_theta();
        let (nw, nd) = (self.design.scenario.dims().n_w, self.design.n_d());
        v.rows_mut(0, nt).copy_from(&vars.theta0);
        for s in 0..self.nk {
            let o = self.stage_offset(s);
            v.rows_mut(o, nw).copy_from(&vars.w[s]);
            if nd > 0 {
                v.rows_mut(o + nw, nd).copy_from(&vars.d[s]);
            }
        }
        v
    }

    pub fn unpack(&self, v: &Vector) -> WindowVars {
        let nt = self.design.n_theta();
        let (nw, nd) = (self.design.scenario.dims().n_w, self.design.n_d());
        WindowVars {
            theta0: v.rows(0, nt).into_owned(),
            w: (0..self.nk).map(|s| v.rows(self.stage_offset(s), nw).into_owned()).collect(),
            d: (0..self.nk).map(|s| v.rows(self.stage_offset(s) + nw, nd).into_owned()).collect(),
        }
    }

    pub fn lower_bounds(&self) -> &Vector {
        &self.lower
    }

    pub fn upper_bounds(&self) -> &Vector {
        &self.upper
    }

    /// Window start equal to the prior, zero disturbances and uncertainty outputs.
    pub fn prior_point(&self) -> Vector {
        let mut v = Vector::zeros(self.dim());
        v.rows_mut(0, self.design.n_theta()).copy_from(&self.prior);
        v
    }

    /// `ρ^{2j−2}` for stage `s`, which sits `j = N_k − s` steps before `k`.
    fn discount(&self, s: usize) -> f64 {
        self.rho2_pow(self.nk - s - 1)
    }

    fn rho2_pow(&self, e: usize) -> f64 {
        (self.design.rho * self.design.rho).powi(e as i32)
    }

    fn simulate(&self, v: &Vector, with_jac: bool) -> Sim {
        let d = self.design;
        let sd = d.scenario.dims();
        let (n, nt, nw, nd) = (sd.n, d.n_theta(), sd.n_w, d.n_d());
        let dim = self.dim();
        let plant = &d.scenario.plant;
        let vars = self.unpack(v);
        let mut theta = vars.theta0.clone();
        let mut dtheta = if with_jac {
            let mut m = Matrix::zeros(nt, dim);
            m.view_mut((0, 0), (nt, nt)).copy_from(&Matrix::identity(nt, nt));
            m
        } else {
            Matrix::zeros(0, 0)
        };
        let mut sim = Sim {
            thetas: vec![theta.clone()],
            ys: Vec::with_capacity(self.nk),
            zs: Vec::with_capacity(self.nk),
            dthetas: Vec::new(),
            dys: Vec::new(),
            dzs: Vec::new(),
        };
        if with_jac {
            sim.dthetas.push(dtheta.clone());
        }
        let split = d.filter.as_ref().map(|f| {
            let (bv, bd) = f.split_b();
            let (dv, dd) = f.split_d();
            (bv, bd, dv, dd)
        });
        for s in 0..self.nk {
            let x = theta.rows(0, n).into_owned();
            let psi = theta.rows(n, nt - n).into_owned();
            let w = &vars.w[s];
            let dv = if nd > 0 { vars.d[s].clone() } else { Vector::zeros(sd.p) };
            let u = &self.inputs[s];
            let x_next = plant.f(&x, w, &dv, u);
            let y = plant.h(&x, w, &dv, u);
            let o = self.stage_offset(s);
            let mut next = Vector::zeros(nt);
            next.rows_mut(0, n).copy_from(&x_next);
            let mut z = Vector::zeros(0);
            let (fj, hj) = if with_jac {
                (Some(plant.f_jacobian(&x, w, &dv, u)), Some(plant.h_jacobian(&x, w, &dv, u)))
            } else {
                (None, None)
            };
            let mut dnext = if with_jac { Matrix::zeros(nt, dim) } else { Matrix::zeros(0, 0) };
            let mut dz = Matrix::zeros(0, 0);
            if with_jac {
                let dx = dtheta.rows(0, n).into_owned();
                let fj = fj.as_ref().expect("jacobian");
                let mut r = &fj.dx * &dx;
                let mut cols = r.columns_mut(o, nw);
                cols += &fj.dw;
                if nd > 0 {
                    let mut cols = r.columns_mut(o + nw, nd);
                    cols += &fj.dd;
                }
                dnext.rows_mut(0, n).copy_from(&r);
            }
            let dy = if with_jac {
                let dx = dtheta.rows(0, n).into_owned();
                let hj = hj.as_ref().expect("jacobian");
                let mut r = &hj.dx * &dx;
                let mut cols = r.columns_mut(o, nw);
                cols += &hj.dw;
                if nd > 0 {
                    let mut cols = r.columns_mut(o + nw, nd);
                    cols += &hj.dd;
                }
                r
            } else {
                Matrix::zeros(0, 0)
            };
            if let (Some(f), Some((bv, bd, dvm, ddm))) = (d.filter.as_ref(), split.as_ref()) {
                let g = plant.g(&x, w);
                next.rows_mut(n, nt - n).copy_from(&(&f.a * &psi + bv * &g + bd * &dv));
                z = &f.c * &psi + dvm * &g + ddm * &dv;
                if with_jac {
                    let (gx, gw) = plant.g_jacobian(&x, w);
                    let dx = dtheta.rows(0, n).into_owned();
                    let dpsi = dtheta.rows(n, nt - n).into_owned();
                    let mut dg = &gx * &dx;
                    {
                        let mut cols = dg.columns_mut(o, nw);
                        cols += &gw;
                    }
                    let mut dpsin = &f.a * &dpsi + bv * &dg;
                    let mut dzz = &f.c * &dpsi + dvm * &dg;
                    if nd > 0 {
                        let mut c1 = dpsin.columns_mut(o + nw, nd);
                        c1 += bd;
                        let mut c2 = dzz.columns_mut(o + nw, nd);
                        c2 += ddm;
                    }
                    dnext.rows_mut(n, nt - n).copy_from(&dpsin);
                    dz = dzz;
                }
            }
            sim.ys.push(y);
            sim.zs.push(z);
            if with_jac {
                sim.dys.push(dy);
                sim.dzs.push(dz);
                sim.dthetas.push(dnext.clone());
            }
            theta = next;
            dtheta = dnext;
            sim.thetas.push(theta.clone());
        }
        sim
    }

    fn residuals(&self, v: &Vector, with_jac: bool) -> Residuals {
        let d = self.design;
        let sd = d.scenario.dims();
        let (n, nt, nw) = (sd.n, d.n_theta(), sd.n_w);
        let dim = self.dim();
        let sim = self.simulate(v, with_jac);
        let (mut r, mut jr) = (Vec::new(), Vec::new());
        let (mut a, mut ja) = (Vec::new(), Vec::new());
        let (mut b, mut jb) = (Vec::new(), Vec::new());
        let mut unit = Matrix::zeros(nt, dim);
        unit.view_mut((0, 0), (nt, nt)).copy_from(&Matrix::identity(nt, nt));
        let dprior = &sim.thetas[0] - &self.prior;
        let end = self.rho2_pow(self.nk);
        stack_residual(&mut r, &mut jr, end * d.prior_coef, &d.l_p0, &dprior, Some(&unit), with_jac);
        let trust = d.has_trust_constraint();
        if trust {
            stack_residual(&mut b, &mut jb, end * d.epsilon, &d.l_p0, &dprior, Some(&unit), with_jac);
        }
        for s in 0..self.nk {
            let disc = self.discount(s);
            let o = self.stage_offset(s);
            let w = v.rows(o, nw).into_owned();
            let mut dw = Matrix::zeros(nw, dim);
            dw.view_mut((0, o), (nw, nw)).copy_from(&Matrix::identity(nw, nw));
            let ey = &self.outputs[s] - &sim.ys[s];
            let dey = if with_jac { Some(-&sim.dys[s]) } else { None };
            stack_residual(&mut r, &mut jr, disc * d.w_coef, &d.l_q, &w, Some(&dw), with_jac);
            if d.l_mhat.nrows() > 0 {
                stack_residual(&mut r, &mut jr, disc, &d.l_mhat, &sim.zs[s], sim.dzs.get(s), with_jac);
            }
            stack_residual(&mut r, &mut jr, disc * d.y_coef, &d.l_r, &ey, dey.as_ref(), with_jac);
            if trust {
                let ex = &self.published[s] - sim.thetas[s].rows(0, n);
                let dex = if with_jac { Some(-sim.dthetas[s].rows(0, n).into_owned()) } else { None };
                stack_residual(&mut a, &mut ja, disc, &d.l_r0, &ex, dex.as_ref(), with_jac);
                stack_residual(&mut b, &mut jb, disc * d.xi, &d.l_q, &w, Some(&dw), with_jac);
                stack_residual(&mut b, &mut jb, disc * d.xi, &d.l_r, &ey, dey.as_ref(), with_jac);
            }
        }
        let mut extra = Vec::new();
        let bounds = [(&d.scenario.boxes.x, true), (&d.scenario.boxes.y, false)];
        for (bx, is_x) in bounds {
            if !bx.has_finite_bound() {
                continue;
            }
            let count = if is_x { self.nk + 1 } else { self.nk };
            for s in 0..count {
                let (val, dval) = if is_x {
                    (sim.thetas[s].rows(0, n).into_owned(), sim.dthetas.get(s).map(|m| m.rows(0, n).into_owned()))
                } else {
                    (sim.ys[s].clone(), sim.dys.get(s).cloned())
                };
                for i in 0..val.len() {
                    let grad = |sign: f64| dval.as_ref().map_or(Vector::zeros(0), |m| m.row(i).transpose() * sign);
                    if bx.upper[i].is_finite() {
                        extra.push((val[i] - bx.upper[i], grad(1.0)));
                    }
                    if bx.lower[i].is_finite() {
                        extra.push((bx.lower[i] - val[i], grad(-1.0)));
                    }
                }
            }
        }
        Residuals {
            r: Vector::from_vec(r),
            jr: if with_jac { to_matrix(jr, dim) } else { Matrix::zeros(0, dim) },
            a: Vector::from_vec(a),
            ja: if with_jac { to_matrix(ja, dim) } else { Matrix::zeros(0, dim) },
            b: Vector::from_vec(b),
            jb: if with_jac { to_matrix(jb, dim) } else { Matrix::zeros(0, dim) },
            extra,
            sim,
        }
    }

    /// Objective `J`.
    pub fn cost(&self, v: &Vector) -> f64 {
        self.residuals(v, false).r.norm_squared()
    }

    /// Analytic gradient of `J`.
    pub fn cost_gradient(&self, v: &Vector) -> Vector {
        let res = self.residuals(v, true);
        res.jr.transpose() * &res.r * 2.0
    }

    /// Trust constraint value `Λ` (zero for the standard estimator).
    pub fn trust(&self, v: &Vector) -> f64 {
        let res = self.residuals(v, false);
        res.a.norm_squared() - res.b.norm_squared()
    }

    pub fn trust_gradient(&self, v: &Vector) -> Vector {
        let res = self.residuals(v, true);
        (res.ja.transpose() * &res.a - res.jb.transpose() * &res.b) * 2.0
    }

    fn bound_violation(&self, v: &Vector, extra: &[(f64, Vector)]) -> f64 {
        let mut worst = extra.iter().map(|e| e.0).fold(0.0f64, f64::max);
        for i in 0..v.len() {
            worst = worst.max(self.lower[i] - v[i]).max(v[i] - self.upper[i]);
        }
        worst
    }

    fn project(&self, v: &Vector) -> Vector {
        Vector::from_fn(v.len(), |i, _| v[i].clamp(self.lower[i], self.upper[i]))
    }

    /// Moves `ψ̂_{k−N_k|k}` away from the prior until `Λ ≤ 0`. Only the prior
    /// term of `Λ` depends on the window-initial filter state.
    fn restore(&self, v: &Vector) -> Option<Vector> {
        let d = self.design;
        if !d.has_trust_constraint() {
            return Some(v.clone());
        }
        let n = d.scenario.dims().n;
        let nt = d.n_theta();
        let np = nt - n;
        let lam = self.trust(v);
        let target = -1e-12 * (1.0 + self.residuals(v, false).a.norm_squared());
        if lam <= target {
            return Some(v.clone());
        }
        if np == 0 || d.epsilon <= 0.0 {
            return None;
        }
        let p0 = d.l_p0.transpose() * &d.l_p0;
        let block = p0.view((n, n), (np, np)).into_owned();
        let e_sym = SymMatrix::new(block).eigen();
        let mut e = Vector::zeros(nt);
        e.rows_mut(n, np).copy_from(&e_sym.vectors.column(np - 1));
        let delta = v.rows(0, nt) - &self.prior;
        let mut cross = (e.transpose() * &p0 * &delta)[0];
        if cross < 0.0 {
            e = -e;
            cross = -cross;
        }
        let quad = (e.transpose() * &p0 * &e)[0];
        let c = d.epsilon * self.rho2_pow(self.nk);
        // c (2 s cross + s² quad) = lam − target
        let need = (lam - target) / c;
        let step = (-cross + (cross * cross + quad * need).sqrt()) / quad;
        let mut scale = 1.0;
        for _ in 0..60 {
            let mut cand = v.clone();
            let mut head = cand.rows_mut(0, nt);
            head += &e * (step * scale);
            if self.trust(&cand) <= 0.0 {
                return Some(cand);
            }
            scale *= 1.5;
        }
        None
    }

    fn solution(&self, v: &Vector, iterations: usize, kkt: f64, converged: bool, multiplier: f64) -> MheSolution {
        let res = self.residuals(v, false);
        MheSolution {
            time: self.time,
            vars: self.unpack(v),
            thetas: res.sim.thetas.clone(),
            y_hat: res.sim.ys.clone(),
            z_hat: res.sim.zs.clone(),
            cost: res.r.norm_squared(),
            lambda: res.a.norm_squared() - res.b.norm_squared(),
            bound_violation: self.bound_violation(v, &res.extra),
            kkt,
            iterations,
            multiplier,
            converged,
        }
    }

    /// Solves the window problem from `start`.
    pub fn solve(&self, start: &Vector) -> Result<MheSolution, MheError> {
        self.solve_warm(start, 0.0)
    }

    /// Like [`solve`](Self::solve) with an initial multiplier for `Λ`.
    pub fn solve_warm(&self, start: &Vector, multiplier: f64) -> Result<MheSolution, MheError> {
        let d = self.design;
        let dim = self.dim();
        let mut v = self.project(start);
        let mut lam_mult = if d.has_trust_constraint() { multiplier.max(0.0) } else { 0.0 };
        let mut extra_mult: Vec<f64> = Vec::new();
        let mut mu = 1.0 / (1.0 + self.cost(&v));
        let mut inner_tol = 1e-3f64;
        let mut prev_violation = f64::INFINITY;
        let mut kkt = f64::INFINITY;
        let mut best: Option<(f64, Vector, f64)> = None;
        let mut iterations = 0;
        let mut converged = false;

        let merit = |res: &Residuals, lm: f64, em: &[f64], mu: f64| -> f64 {
            let lam = res.a.norm_squared() - res.b.norm_squared();
            let mut m = res.r.norm_squared();
            let al = |c: f64, l: f64| ((l + mu * c).max(0.0).powi(2) - l * l) / (2.0 * mu);
            if d.has_trust_constraint() {
                m += al(lam, lm);
            }
            for (i, (c, _)) in res.extra.iter().enumerate() {
                m += al(*c, em.get(i).copied().unwrap_or(0.0));
            }
            m
        };

        let mut cached: Option<Residuals> = None;
        while iterations < d.max_iterations {
            iterations += 1;
            let res = match cached.take() {
                Some(r) => r,
                None => self.residuals(&v, true),
            };
            if extra_mult.len() != res.extra.len() {
                extra_mult = vec![0.0; res.extra.len()];
            }
            let cost = res.r.norm_squared();
            let lam = res.a.norm_squared() - res.b.norm_squared();
            let gj = res.jr.transpose() * &res.r * 2.0;
            let glam = (res.ja.transpose() * &res.a - res.jb.transpose() * &res.b) * 2.0;
            let mut grad = gj.clone();
            let mut h = res.jr.transpose() * &res.jr * 2.0;
            let mut trial_mult = 0.0;
            if d.has_trust_constraint() {
                let eff = (lam_mult + mu * lam).max(0.0);
                trial_mult = eff;
                if eff > 0.0 {
                    grad += &glam * eff;
                    h += &glam * glam.transpose() * mu;
                    h += res.ja.transpose() * &res.ja * (2.0 * eff);
                    let curved = &h - res.jb.transpose() * &res.jb * (2.0 * eff);
                    if curved.clone().cholesky().is_some() {
                        h = curved;
                    }
                }
            }
            let mut trial_extra = vec![0.0; res.extra.len()];
            for (i, (c, g)) in res.extra.iter().enumerate() {
                let eff = (extra_mult[i] + mu * c).max(0.0);
                trial_extra[i] = eff;
                if eff > 0.0 {
                    grad += g * eff;
                    h += g * g.transpose() * mu;
                }
            }

            let reg = 1e-12 * (1.0 + h.diagonal().amax());
            for i in 0..dim {
                h[(i, i)] += reg;
            }
            let p = box_qp(&h, &grad, &(&self.lower - &v), &(&self.upper - &v));
            let slope = grad.dot(&p);
            // Decrease predicted by the Gauss-Newton model, in units of J.
            let pred = (-(slope + 0.5 * p.dot(&(&h * &p)))).max(0.0);
            let feas = lam.max(0.0).max(res.extra.iter().map(|e| e.0).fold(0.0, f64::max));
            let compl = (trial_mult * lam).abs().max(
                trial_extra.iter().zip(res.extra.iter()).map(|(m, e)| (m * e.0).abs()).fold(0.0, f64::max),
            );
            let scale = 1.0 + cost;
            kkt = (pred / scale).max(feas / scale).max(compl / scale);
            let feasible = lam <= 1e-12 * (1.0 + res.a.norm_squared()) && self.bound_violation(&v, &res.extra) <= 1e-9;
            if feasible && best.as_ref().is_none_or(|(c, _, _)| cost < *c) {
                best = Some((cost, v.clone(), kkt));
            }
            if kkt <= d.kkt_tol {
                converged = true;
                break;
            }

            if pred <= inner_tol * scale || !(slope < 0.0) {
                let mut violation = 0.0f64;
                if d.has_trust_constraint() {
                    violation = lam.max(-lam_mult / mu).abs();
                }
                for (i, (c, _)) in res.extra.iter().enumerate() {
                    violation = violation.max(c.max(-extra_mult[i] / mu).abs());
                }
                lam_mult = trial_mult;
                for (i, m) in trial_extra.iter().enumerate() {
                    extra_mult[i] = *m;
                }
                if violation > 0.25 * prev_violation {
                    mu *= 10.0;
                }
                prev_violation = violation;
                inner_tol = (inner_tol * 0.1).max(0.1 * d.kkt_tol);
                cached = Some(res);
                continue;
            }
            let m0 = merit(&res, lam_mult, &extra_mult, mu);
            let mut alpha = 1.0;
            let mut accepted = false;
            for _ in 0..40 {
                let cand = self.project(&(&v + &p * alpha));
                let rc = self.residuals(&cand, false);
                if merit(&rc, lam_mult, &extra_mult, mu) <= m0 + 1e-4 * alpha * slope {
                    v = cand;
                    accepted = true;
                    break;
                }
                alpha *= 0.5;
            }
            if !accepted {
                lam_mult = trial_mult;
                for (i, m) in trial_extra.iter().enumerate() {
                    extra_mult[i] = *m;
                }
                mu *= 10.0;
                if mu > 1e12 {
                    break;
                }
                cached = Some(res);
            }
        }

        if converged {
            if let Some(restored) = self.restore(&v) {
                return Ok(self.solution(&restored, iterations, kkt, true, lam_mult));
            }
        }
        let candidate = match best {
            Some((_, bv, bk)) => Some((bv, bk)),
            None => self.restore(&v).map(|r| (r, kkt)),
        };
        match candidate {
            Some((bv, bk)) => {
                let sol = self.solution(&bv, iterations, bk, false, lam_mult);
                Err(MheError::SolverFailure {
                    iterations,
                    kkt: bk,
                    best: Box::new(sol),
                })
            }
            None => Err(MheError::InfeasibleWindow { lambda: self.trust(&v) }),
        }
    }
}

/// `min gᵀp + ½pᵀHp` subject to `lo ≤ p ≤ hi` (with `lo ≤ 0 ≤ hi`).
/// Tries a primal-dual active-set iteration first and falls back to a
/// primal active-set method started at `p = 0` if that cycles.
pub fn box_qp(h: &Matrix, g: &Vector, lo: &Vector, hi: &Vector) -> Vector {
    pdas_box_qp(h, g, lo, hi, 30).unwrap_or_else(|| active_set_box_qp(h, g, lo, hi))
}

fn solve_free(h: &Matrix, g: &Vector, p: &mut Vector, state: &[i8]) {
    let n = g.len();
    let free: Vec<usize> = (0..n).filter(|&i| state[i] == 0).collect();
    if free.is_empty() {
        return;
    }
    let nf = free.len();
    let mut hf = Matrix::zeros(nf, nf);
    let mut rhs = Matrix::zeros(nf, 1);
    for (a, &i) in free.iter().enumerate() {
        let mut s = -g[i];
        for j in 0..n {
            if state[j] != 0 {
                s -= h[(i, j)] * p[j];
            }
        }
        rhs[(a, 0)] = s;
        for (b, &j) in free.iter().enumerate() {
            hf[(a, b)] = h[(i, j)];
        }
    }
    let sol = solve_spd(&hf, &rhs);
    for (a, &i) in free.iter().enumerate() {
        p[i] = sol[(a, 0)];
    }
}

fn pdas_box_qp(h: &Matrix, g: &Vector, lo: &Vector, hi: &Vector, max_iter: usize) -> Option<Vector> {
    let n = g.len();
    let mut p = Vector::zeros(n);
    let mut mu = g.clone();
    let mut state = vec![2i8; n];
    for _ in 0..max_iter {
        let mut next = vec![0i8; n];
        for i in 0..n {
            let c = h[(i, i)].max(f64::MIN_POSITIVE);
            let trial = p[i] - mu[i] / c;
            if lo[i] >= hi[i] || trial <= lo[i] {
                next[i] = -1;
            } else if trial >= hi[i] {
                next[i] = 1;
            }
        }
        if next == state {
            let tol = 1e-10 * (1.0 + g.amax() + h.diagonal().amax() * p.amax());
            let ok = (0..n).all(|i| match state[i] {
                -1 => mu[i] >= -tol || lo[i] >= hi[i],
                1 => mu[i] <= tol,
                _ => p[i] >= lo[i] - tol && p[i] <= hi[i] + tol,
            });
            return ok.then(|| Vector::from_fn(n, |i, _| p[i].clamp(lo[i], hi[i])));
        }
        state = next;
        for i in 0..n {
            match state[i] {
                -1 => p[i] = lo[i],
                1 => p[i] = hi[i],
                _ => {}
            }
        }
        solve_free(h, g, &mut p, &state);
        mu = h * &p + g;
    }
    None
}

fn active_set_box_qp(h: &Matrix, g: &Vector, lo: &Vector, hi: &Vector) -> Vector {
    let n = g.len();
    let mut p = Vector::zeros(n);
    // 0 free, -1 at lower, +1 at upper
    let mut state = vec![0i8; n];
    for i in 0..n {
        if lo[i] >= 0.0 && hi[i] <= 0.0 {
            state[i] = -1;
        }
    }
    for _ in 0..(4 * n + 20) {
        let mut target = p.clone();
        solve_free(h, g, &mut target, &state);
        let step = &target - &p;
        let mut t = 1.0f64;
        let mut blocking = None;
        for i in 0..n {
            if state[i] != 0 {
                continue;
            }
            if step[i] > 0.0 && p[i] + step[i] > hi[i] {
                let ti = (hi[i] - p[i]) / step[i];
                if ti < t {
                    t = ti;
                    blocking = Some((i, 1i8));
                }
            } else if step[i] < 0.0 && p[i] + step[i] < lo[i] {
                let ti = (lo[i] - p[i]) / step[i];
                if ti < t {
                    t = ti;
                    blocking = Some((i, -1i8));
                }
            }
        }
        p += &step * t.max(0.0);
        if let Some((i, side)) = blocking {
            state[i] = side;
            p[i] = if side > 0 { hi[i] } else { lo[i] };
            continue;
        }
        let grad = h * &p + g;
        let mut worst = None;
        let mut worst_val = 1e-14 * (1.0 + grad.amax());
        for i in 0..n {
            let wrong = match state[i] {
                -1 => -grad[i],
                1 => grad[i],
                _ => 0.0,
            };
            if wrong > worst_val && lo[i] < hi[i] {
                worst_val = wrong;
                worst = Some(i);
            }
        }
        match worst {
            Some(i) => state[i] = 0,
            None => break,
        }
    }
    p
}

/// Result of one estimator step.
#[derive(Debug, Clone)]
pub struct EstimateOutcome {
    pub theta: Vector,
    /// `None` at `k = 0`.
    pub solution: Option<MheSolution>,
    /// The solver hit its cap and the best feasible iterate was used.
    pub fallback: bool,
}

fn warm_start(problem: &WindowProblem<'_>, state: &MheState) -> Vector {
    let sd = problem.design.scenario.dims();
    let nd = problem.design.n_d();
    let Some(prev) = state.warm.as_ref() else {
        return problem.prior_point();
    };
    let mut vars = prev.vars.clone();
    if vars.w.len() == problem.nk && problem.nk > 0 {
        vars.theta0 = prev.second.clone();
        vars.w.remove(0);
        vars.d.remove(0);
    }
    while vars.w.len() < problem.nk {
        vars.w.push(Vector::zeros(sd.n_w));
        vars.d.push(Vector::zeros(nd));
    }
    vars.w.truncate(problem.nk);
    vars.d.truncate(problem.nk);
    problem.pack(&vars)
}

/// Computes `θ̂_k` and publishes it into `state`. At `k = 0` the initial
/// estimate is returned without solving. A solver stop at the iteration cap
/// publishes the best feasible iterate and sets `fallback`.
pub fn estimate_with(state: &mut MheState, design: &MheDesign) -> Result<EstimateOutcome, MheError> {
    if state.estimated {
        return Err(MheError::State(format!("estimate at k = {} already published", state.k)));
    }
    if state.k == 0 {
        let theta = state.initial.clone();
        state.thetas.push_back(theta.clone());
        state.estimated = true;
        return Ok(EstimateOutcome {
            theta,
            solution: None,
            fallback: false,
        });
    }
    let problem = WindowProblem::new(design, state)?;
    let start = warm_start(&problem, state);
    let multiplier = state.warm.as_ref().map_or(0.0, |w| w.multiplier);
    let (sol, fallback) = match problem.solve_warm(&start, multiplier) {
        Ok(sol) => (sol, false),
        Err(MheError::SolverFailure { best, .. }) => (*best, true),
        Err(e) => return Err(e),
    };
    let theta = sol.thetas.last().cloned().expect("window has a final state");
    state.warm = Some(WarmStart {
        vars: sol.vars.clone(),
        second: sol.thetas.get(1).cloned().unwrap_or_else(|| theta.clone()),
        multiplier: sol.multiplier,
    });
    state.thetas.push_back(theta.clone());
    state.estimated = true;
    Ok(EstimateOutcome {
        theta,
        solution: Some(sol),
        fallback,
    })
}

/// One step of the robust estimator.
pub fn estimate(
    state: &mut MheState,
    cert: &DetectabilityCertificate,
    cfg: &MheConfig,
    scenario: &Scenario,
) -> Result<EstimateOutcome, MheError> {
    estimate_with(state, &MheDesign::robust(cert, cfg, scenario)?)
}

/// One step of the standard estimator built from a nominal certificate.
pub fn estimate_standard(
    state: &mut MheState,
    nominal: &DetectabilityCertificate,
    cfg: &MheConfig,
    scenario: &Scenario,
) -> Result<EstimateOutcome, MheError> {
    estimate_with(state, &MheDesign::standard(nominal, cfg, scenario)?)
}

// ---------------------------------------------------------------------------
// Horizon bound and ISS constants

#[derive(Debug, Clone, PartialEq)]
pub struct HorizonBound {
    pub n_min: usize,
    /// `λ̄(P₂, P₁)`
    pub lambda_bar: f64,
    pub p1: SymMatrix,
    pub p2: SymMatrix,
}

/// `P₁ = P − diag(0, ρ⁻²Z)` and
/// `P₂ = P₁ + (•)ᵀP₁₁⁻¹[P₁₁ P₁₂] + diag((2+ε)P₀, 0)`.
pub fn horizon_matrices(cert: &DetectabilityCertificate, epsilon: f64) -> Result<(SymMatrix, SymMatrix), MheError> {
    let p1 = cert.p_bar();
    if p1.min_eigenvalue() <= 0.0 {
        return Err(MheError::InvalidCertificate(format!(
            "P₁ is not positive definite (min eigenvalue {:e})",
            p1.min_eigenvalue()
        )));
    }
    let k = cert.dims.n + cert.dims.n_psi;
    let nc = cert.dims.n_chi();
    let p = cert.p.as_matrix();
    let p11 = p.view((0, 0), (k, k)).into_owned();
    let top = p.view((0, 0), (k, nc)).into_owned();
    if min_eig(&p11) <= 0.0 {
        return Err(MheError::InvalidCertificate("P₁₁ is not positive definite".into()));
    }
    let mut p2 = p1.as_matrix() + top.transpose() * solve_spd(&p11, &top);
    if cert.p0.dim() != k {
        return Err(MheError::DimMismatch(format!("P0 must be {k}×{k}")));
    }
    let mut blk = p2.view_mut((0, 0), (k, k));
    blk += cert.p0.as_matrix() * (2.0 + epsilon);
    Ok((p1, SymMatrix::new(p2)))
}

/// `N_min = ⌊ln λ̄ / ln ρ⁻²⌋ + 1` from `λ̄` and `ρ`.
pub fn n_min_from(lambda_bar: f64, rho: f64) -> usize {
    let x = lambda_bar.ln() / (1.0 / (rho * rho)).ln();
    if x <= 0.0 {
        1
    } else {
        x.floor() as usize + 1
    }
}

pub fn min_horizon(cert: &DetectabilityCertificate, epsilon: f64) -> Result<HorizonBound, MheError> {
    if !(epsilon >= 0.0) {
        return Err(MheError::InvalidConfig("epsilon must be nonnegative".into()));
    }
    let (p1, p2) = horizon_matrices(cert, epsilon)?;
    let lambda_bar = generalized_max_eig(&p2, &p1)?;
    Ok(HorizonBound {
        n_min: n_min_from(lambda_bar, cert.rho),
        lambda_bar,
        p1,
        p2,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct IssConstants {
    /// Decay rate `λ = ρ·max(λ_m^{1/(2N)}, 1)`.
    pub lambda: f64,
    pub lambda_m: f64,
    pub c_x: f64,
    pub c_0: f64,
    pub c_w: f64,
    /// State bound `‖x_k‖ ≤ λ^k C_x(‖x₀−x̂₀‖+‖x₀‖) + C_w/(1−λ)·max‖w_i‖`.
    pub big_c_x: f64,
    pub big_c_w: f64,
    /// Error bound `‖x_k−x̂_k‖ ≤ λ^k e_x‖col(x₀, x₀−x̂₀)‖ + e_w·max √λ^{i−1}‖w_{k−i}‖`.
    pub err_c_x: f64,
    pub err_c_w: f64,
}

/// Constants from `P₁`, `P₂` and `Q̂ = (4+ξ)Q + Q₀`, with `n` plant states
/// and `n_psi` filter states in the ordering `(x−x̂, ψ−ψ̂, x, ψ)`.
pub fn iss_constants_from(
    p1: &SymMatrix,
    p2: &SymMatrix,
    q_hat: &SymMatrix,
    n: usize,
    n_psi: usize,
    rho: f64,
    horizon: usize,
) -> Result<IssConstants, MheError> {
    if horizon == 0 {
        return Err(MheError::InvalidConfig("horizon must be at least 1".into()));
    }
    let lambda_m = generalized_max_eig(p2, p1)?;
    let lambda = rho * lambda_m.powf(1.0 / (2.0 * horizon as f64)).max(1.0);
    if !(lambda < 1.0) {
        return Err(MheError::InvalidCertificate(format!(
            "decay rate {lambda} is not below one for N = {horizon}"
        )));
    }
    let dim = 2 * (n + n_psi);
    let mut perm = vec![0usize; dim];
    // (e_x, x, e_ψ, ψ) ← (e_x, e_ψ, x, ψ)
    for i in 0..n {
        perm[i] = i;
        perm[n + i] = n + n_psi + i;
    }
    for i in 0..n_psi {
        perm[2 * n + i] = n + i;
        perm[2 * n + n_psi + i] = 2 * n + n_psi + i;
    }
    let m = p1.as_matrix();
    let ph = Matrix::from_fn(dim, dim, |i, j| m[(perm[i], perm[j])]);
    let a = ph.view((0, 0), (2 * n, 2 * n)).into_owned();
    let x = if n_psi > 0 {
        let b = ph.view((0, 2 * n), (2 * n, 2 * n_psi)).into_owned();
        let c = ph.view((2 * n, 2 * n), (2 * n_psi, 2 * n_psi)).into_owned();
        &a - &b * solve_spd(&c, &b.transpose())
    } else {
        a.clone()
    };
    let x_min = min_eig(&x);
    if x_min <= 0.0 {
        return Err(MheError::InvalidCertificate("Schur complement of P̂₁ is not positive definite".into()));
    }
    let c_x = 1.0 / x_min;
    let c_0 = SymMatrix::new(a).max_eigenvalue();
    let c_w = q_hat.max_eigenvalue().max(0.0);
    let big_c_x = (lambda_m * c_x * c_0).sqrt();
    let big_c_w = (c_x * c_w).sqrt();
    Ok(IssConstants {
        lambda,
        lambda_m,
        c_x,
        c_0,
        c_w,
        big_c_x,
        big_c_w,
        err_c_x: big_c_x,
        err_c_w: big_c_w / (1.0 - lambda).sqrt(),
    })
}

pub fn iss_constants(cert: &DetectabilityCertificate, epsilon: f64, xi: f64, horizon: usize) -> Result<IssConstants, MheError> {
    let hb = min_horizon(cert, epsilon)?;
    if horizon < hb.n_min {
        return Err(MheError::InvalidConfig(format!("N = {horizon} is below N_min = {}", hb.n_min)));
    }
    let q_hat = SymMatrix::new(cert.q.as_matrix() * (4.0 + xi) + cert.q0.as_matrix());
    iss_constants_from(&hb.p1, &hb.p2, &q_hat, cert.dims.n, cert.dims.n_psi, cert.rho, horizon)
}
