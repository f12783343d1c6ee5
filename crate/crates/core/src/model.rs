//! Uncertain closed-loop setup: plant maps, controller, memoryless
//! uncertainty, constraint boxes and the slope-interval envelope used by the
//! detectability LMIs.

use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::numkit::{Matrix, Vector};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ModelError {
    #[error("value outside its admissible set: {0}")]
    DomainViolation(String),
    #[error("invalid model data: {0}")]
    Invalid(String),
    #[error("unknown scenario {0:?}")]
    UnknownScenario(String),
}

/// Axis-aligned box; bounds may be infinite.
#[derive(Debug, Clone, PartialEq)]
pub struct BoxSet {
    pub lower: Vector,
    pub upper: Vector,
}

impl BoxSet {
    pub fn new(lower: Vector, upper: Vector) -> Result<Self, ModelError> {
        if lower.len() != upper.len() {
            return Err(ModelError::Invalid("box bound lengths differ".into()));
        }
        if lower.iter().zip(upper.iter()).any(|(l, u)| l > u || l.is_nan() || u.is_nan()) {
            return Err(ModelError::Invalid("box lower bound exceeds upper bound".into()));
        }
        Ok(BoxSet { lower, upper })
    }

    pub fn unbounded(dim: usize) -> Self {
        BoxSet {
            lower: Vector::from_element(dim, f64::NEG_INFINITY),
            upper: Vector::from_element(dim, f64::INFINITY),
        }
    }

    pub fn symmetric(dim: usize, radius: f64) -> Self {
        BoxSet {
            lower: Vector::from_element(dim, -radius),
            upper: Vector::from_element(dim, radius),
        }
    }

    pub fn dim(&self) -> usize {
        self.lower.len()
    }

    pub fn contains(&self, v: &Vector, tol: f64) -> bool {
        v.len() == self.dim()
            && v
                .iter()
                .zip(self.lower.iter().zip(self.upper.iter()))
                .all(|(x, (l, u))| *x >= l - tol && *x <= u + tol)
    }

    pub fn is_bounded(&self) -> bool {
        self.lower.iter().chain(self.upper.iter()).all(|v| v.is_finite())
    }

    pub fn has_finite_bound(&self) -> bool {
        self.lower.iter().chain(self.upper.iter()).any(|v| v.is_finite())
    }

    pub fn project(&self, v: &Vector) -> Vector {
        Vector::from_iterator(
            v.len(),
            v.iter()
                .zip(self.lower.iter().zip(self.upper.iter()))
                .map(|(x, (l, u))| x.clamp(*l, *u)),
        )
    }

    /// Intersects with `[-radius, radius]` in every coordinate.
    pub fn clipped(&self, radius: f64) -> BoxSet {
        BoxSet {
            lower: self.lower.map(|l| l.max(-radius)),
            upper: self.upper.map(|u| u.min(radius)),
        }
    }

    pub fn sample(&self, rng: &mut impl Rng) -> Vector {
        Vector::from_iterator(
            self.dim(),
            self.lower.iter().zip(self.upper.iter()).map(|(l, u)| {
                if l == u {
                    *l
                } else {
                    rng.random_range(*l..=*u)
                }
            }),
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PlantDims {
    /// state
    pub n: usize,
    /// disturbance
    pub n_w: usize,
    /// uncertainty output
    pub p: usize,
    /// uncertainty input
    pub q: usize,
    /// measurement
    pub m: usize,
    /// control input
    pub l: usize,
}

/// Partial derivatives of a map `(x, w, d, u) ↦ ·` with respect to `x`, `w`, `d`.
#[derive(Debug, Clone)]
pub struct MapJacobian {
    pub dx: Matrix,
    pub dw: Matrix,
    pub dd: Matrix,
}

/// Known part of the plant: `x⁺ = f(x,w,d,u)`, `y = h(x,w,d,u)`, `v = g(x,w)`.
pub trait Plant: Send + Sync {
    fn dims(&self) -> PlantDims;
    fn f(&self, x: &Vector, w: &Vector, d: &Vector, u: &Vector) -> Vector;
    fn h(&self, x: &Vector, w: &Vector, d: &Vector, u: &Vector) -> Vector;
    fn g(&self, x: &Vector, w: &Vector) -> Vector;
    fn f_jacobian(&self, x: &Vector, w: &Vector, d: &Vector, u: &Vector) -> MapJacobian;
    fn h_jacobian(&self, x: &Vector, w: &Vector, d: &Vector, u: &Vector) -> MapJacobian;
    /// `(∂g/∂x, ∂g/∂w)`
    fn g_jacobian(&self, x: &Vector, w: &Vector) -> (Matrix, Matrix);
}

pub trait Controller: Send + Sync {
    fn control(&self, xhat: &Vector) -> Vector;
}

/// The true memoryless uncertainty `d = Δ(v)`. Only the simulator calls it.
pub trait Uncertainty: Send + Sync {
    fn eval(&self, v: &Vector) -> Vector;
}

/// `u = K x̂`
#[derive(Debug, Clone)]
pub struct LinearController {
    pub gain: Matrix,
}

impl Controller for LinearController {
    fn control(&self, xhat: &Vector) -> Vector {
        &self.gain * xhat
    }
}

/// Coordinate-wise saturation `Δ(v)_i = c (|v_i + s| − |v_i − s|)`.
#[derive(Debug, Clone)]
pub struct Saturation {
    pub gain: f64,
    pub knee: f64,
}

impl Uncertainty for Saturation {
    fn eval(&self, v: &Vector) -> Vector {
        v.map(|x| self.gain * ((x + self.knee).abs() - (x - self.knee).abs()))
    }
}

/// `Δ(v) = L v`
#[derive(Debug, Clone)]
pub struct LinearUncertainty {
    pub gain: Matrix,
}

impl Uncertainty for LinearUncertainty {
    fn eval(&self, v: &Vector) -> Vector {
        &self.gain * v
    }
}

/// A linear plant; handy for tests and small examples.
#[derive(Debug, Clone)]
pub struct LinearPlant {
    pub a: Matrix,
    pub b_w: Matrix,
    pub b_d: Matrix,
    pub b_u: Matrix,
    pub c: Matrix,
    pub d_w: Matrix,
    pub d_d: Matrix,
    pub d_u: Matrix,
    pub c_v: Matrix,
    pub e_w: Matrix,
}

impl LinearPlant {
    pub fn zero(dims: PlantDims) -> Self {
        let PlantDims { n, n_w, p, q, m, l } = dims;
        LinearPlant {
            a: Matrix::zeros(n, n),
            b_w: Matrix::zeros(n, n_w),
            b_d: Matrix::zeros(n, p),
            b_u: Matrix::zeros(n, l),
            c: Matrix::zeros(m, n),
            d_w: Matrix::zeros(m, n_w),
            d_d: Matrix::zeros(m, p),
            d_u: Matrix::zeros(m, l),
            c_v: Matrix::zeros(q, n),
            e_w: Matrix::zeros(q, n_w),
        }
    }

    /// Envelope whose intervals are all points; exact for a linear plant
    /// driven by `u = K x̂`.
    pub fn exact_envelope(&self, controller_gain: &Matrix) -> LipschitzEnvelope {
        let p = IntervalMatrix::point;
        LipschitzEnvelope {
            a: p(&self.a),
            b_w: p(&self.b_w),
            b_d: p(&self.b_d),
            c: p(&self.c),
            d_w: p(&self.d_w),
            d_d: p(&self.d_d),
            c_v: p(&self.c_v),
            e_w: p(&self.e_w),
            a_abs: p(&self.a),
            b_w_abs: p(&self.b_w),
            b_u: p(&(&self.b_u * controller_gain)),
            b_d_abs: p(&self.b_d),
            c_v_abs: p(&self.c_v),
            e_w_abs: p(&self.e_w),
        }
    }
}

impl Plant for LinearPlant {
    fn dims(&self) -> PlantDims {
        PlantDims {
            n: self.a.nrows(),
            n_w: self.b_w.ncols(),
            p: self.b_d.ncols(),
            q: self.c_v.nrows(),
            m: self.c.nrows(),
            l: self.b_u.ncols(),
        }
    }
    fn f(&self, x: &Vector, w: &Vector, d: &Vector, u: &Vector) -> Vector {
        &self.a * x + &self.b_w * w + &self.b_d * d + &self.b_u * u
    }
    fn h(&self, x: &Vector, w: &Vector, d: &Vector, u: &Vector) -> Vector {
        &self.c * x + &self.d_w * w + &self.d_d * d + &self.d_u * u
    }
    fn g(&self, x: &Vector, w: &Vector) -> Vector {
        &self.c_v * x + &self.e_w * w
    }
    fn f_jacobian(&self, _: &Vector, _: &Vector, _: &Vector, _: &Vector) -> MapJacobian {
        MapJacobian {
            dx: self.a.clone(),
            dw: self.b_w.clone(),
            dd: self.b_d.clone(),
        }
    }
    fn h_jacobian(&self, _: &Vector, _: &Vector, _: &Vector, _: &Vector) -> MapJacobian {
        MapJacobian {
            dx: self.c.clone(),
            dw: self.d_w.clone(),
            dd: self.d_d.clone(),
        }
    }
    fn g_jacobian(&self, _: &Vector, _: &Vector) -> (Matrix, Matrix) {
        (self.c_v.clone(), self.e_w.clone())
    }
}

/// The two-state benchmark plant with a sinusoidal term and a saturating
/// uncertainty entering the first state.
#[derive(Debug, Clone, Default)]
pub struct ExamplePlant;

impl Plant for ExamplePlant {
    fn dims(&self) -> PlantDims {
        PlantDims {
            n: 2,
            n_w: 1,
            p: 1,
            q: 1,
            m: 1,
            l: 2,
        }
    }
    fn f(&self, x: &Vector, _w: &Vector, d: &Vector, u: &Vector) -> Vector {
        Vector::from_column_slice(&[
            1.3 * x[0] - 0.4 * x[1] - d[0] - 0.1 * (0.5 * x[0]).sin() + u[0],
            0.6 * x[0] + 0.75 * x[1] + u[1],
        ])
    }
    fn h(&self, x: &Vector, w: &Vector, _d: &Vector, _u: &Vector) -> Vector {
        Vector::from_element(1, x[1] + w[0])
    }
    fn g(&self, x: &Vector, _w: &Vector) -> Vector {
        Vector::from_element(1, x[0])
    }
    fn f_jacobian(&self, x: &Vector, _: &Vector, _: &Vector, _: &Vector) -> MapJacobian {
        MapJacobian {
            dx: Matrix::from_row_slice(
                2,
                2,
                &[1.3 - 0.05 * (0.5 * x[0]).cos(), -0.4, 0.6, 0.75],
            ),
            dw: Matrix::zeros(2, 1),
            dd: Matrix::from_row_slice(2, 1, &[-1.0, 0.0]),
        }
    }
    fn h_jacobian(&self, _: &Vector, _: &Vector, _: &Vector, _: &Vector) -> MapJacobian {
        MapJacobian {
            dx: Matrix::from_row_slice(1, 2, &[0.0, 1.0]),
            dw: Matrix::from_element(1, 1, 1.0),
            dd: Matrix::zeros(1, 1),
        }
    }
    fn g_jacobian(&self, _: &Vector, _: &Vector) -> (Matrix, Matrix) {
        (Matrix::from_row_slice(1, 2, &[1.0, 0.0]), Matrix::zeros(1, 1))
    }
}

/// Entry-wise interval matrix `lo ≤ · ≤ hi`.
#[derive(Debug, Clone, PartialEq)]
pub struct IntervalMatrix {
    pub lo: Matrix,
    pub hi: Matrix,
}

impl IntervalMatrix {
    pub fn new(lo: Matrix, hi: Matrix) -> Result<Self, ModelError> {
        if lo.shape() != hi.shape() {
            return Err(ModelError::Invalid("interval bound shapes differ".into()));
        }
        if lo.iter().zip(hi.iter()).any(|(l, h)| !(l <= h)) {
            return Err(ModelError::Invalid("interval lower bound exceeds upper bound".into()));
        }
        Ok(IntervalMatrix { lo, hi })
    }

    pub fn point(m: &Matrix) -> Self {
        IntervalMatrix {
            lo: m.clone(),
            hi: m.clone(),
        }
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self::point(&Matrix::zeros(rows, cols))
    }

    pub fn shape(&self) -> (usize, usize) {
        self.lo.shape()
    }

    pub fn center(&self) -> Matrix {
        (&self.lo + &self.hi) * 0.5
    }

    /// `(row, col)` of every entry with `lo < hi`, column-major order.
    pub fn free_entries(&self) -> Vec<(usize, usize)> {
        let (r, c) = self.shape();
        let mut out = Vec::new();
        for j in 0..c {
            for i in 0..r {
                if self.lo[(i, j)] < self.hi[(i, j)] {
                    out.push((i, j));
                }
            }
        }
        out
    }

    /// Interval hull of `{ A x : lo ≤ A ≤ hi }`.
    pub fn apply_hull(&self, x: &Vector) -> (Vector, Vector) {
        let (r, c) = self.shape();
        let mut lo = Vector::zeros(r);
        let mut hi = Vector::zeros(r);
        for i in 0..r {
            for j in 0..c {
                let a = self.lo[(i, j)] * x[j];
                let b = self.hi[(i, j)] * x[j];
                lo[i] += a.min(b);
                hi[i] += a.max(b);
            }
        }
        (lo, hi)
    }

    /// Scales the half-width of every interval by `factor` around its center.
    pub fn inflated(&self, factor: f64) -> Self {
        let c = self.center();
        let half = (&self.hi - &self.lo) * (0.5 * factor);
        IntervalMatrix {
            lo: &c - &half,
            hi: &c + &half,
        }
    }
}

/// Slope-interval data for the difference dynamics (true vs. model trajectory)
/// and for the absolute closed-loop dynamics.
#[derive(Debug, Clone, PartialEq)]
pub struct LipschitzEnvelope {
    pub a: IntervalMatrix,
    pub b_w: IntervalMatrix,
    pub b_d: IntervalMatrix,
    pub c: IntervalMatrix,
    pub d_w: IntervalMatrix,
    pub d_d: IntervalMatrix,
    pub c_v: IntervalMatrix,
    pub e_w: IntervalMatrix,
    pub a_abs: IntervalMatrix,
    pub b_w_abs: IntervalMatrix,
    pub b_u: IntervalMatrix,
    pub b_d_abs: IntervalMatrix,
    pub c_v_abs: IntervalMatrix,
    pub e_w_abs: IntervalMatrix,
}

impl LipschitzEnvelope {
    pub fn check_dims(&self, dims: PlantDims) -> Result<(), ModelError> {
        let PlantDims { n, n_w, p, q, m, .. } = dims;
        let expect = [
            ("A", &self.a, (n, n)),
            ("B_w", &self.b_w, (n, n_w)),
            ("B_d", &self.b_d, (n, p)),
            ("C", &self.c, (m, n)),
            ("D_w", &self.d_w, (m, n_w)),
            ("D_d", &self.d_d, (m, p)),
            ("C_v", &self.c_v, (q, n)),
            ("E_w", &self.e_w, (q, n_w)),
            ("A_abs", &self.a_abs, (n, n)),
            ("B_w_abs", &self.b_w_abs, (n, n_w)),
            ("B_u", &self.b_u, (n, n)),
            ("B_d_abs", &self.b_d_abs, (n, p)),
            ("C_v_abs", &self.c_v_abs, (q, n)),
            ("E_w_abs", &self.e_w_abs, (q, n_w)),
        ];
        for (name, im, shape) in expect {
            if im.shape() != shape {
                return Err(ModelError::Invalid(format!(
                    "envelope block {name} has shape {:?}, expected {:?}",
                    im.shape(),
                    shape
                )));
            }
        }
        Ok(())
    }

    /// Copy with every interval half-width scaled by `factor`.
    pub fn inflated(&self, factor: f64) -> Self {
        LipschitzEnvelope {
            a: self.a.inflated(factor),
            b_w: self.b_w.inflated(factor),
            b_d: self.b_d.inflated(factor),
            c: self.c.inflated(factor),
            d_w: self.d_w.inflated(factor),
            d_d: self.d_d.inflated(factor),
            c_v: self.c_v.inflated(factor),
            e_w: self.e_w.inflated(factor),
            a_abs: self.a_abs.inflated(factor),
            b_w_abs: self.b_w_abs.inflated(factor),
            b_u: self.b_u.inflated(factor),
            b_d_abs: self.b_d_abs.inflated(factor),
            c_v_abs: self.c_v_abs.inflated(factor),
            e_w_abs: self.e_w_abs.inflated(factor),
        }
    }
}

#[derive(Debug, Clone)]
pub struct ScenarioBoxes {
    pub x: BoxSet,
    pub w: BoxSet,
    pub u: BoxSet,
    pub y: BoxSet,
}

#[derive(Clone)]
pub struct Scenario {
    pub name: String,
    pub plant: Arc<dyn Plant>,
    pub controller: Arc<dyn Controller>,
    pub uncertainty: Arc<dyn Uncertainty>,
    pub boxes: ScenarioBoxes,
    pub envelope: LipschitzEnvelope,
    pub x0: Vector,
    pub xhat0: Vector,
    /// Half-width of the state probe box used where `X` is unbounded.
    pub probe_radius: f64,
    /// Half-width of the range of `d` the envelope is claimed for.
    pub d_range: f64,
}

impl std::fmt::Debug for Scenario {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Scenario")
            .field("name", &self.name)
            .field("dims", &self.plant.dims())
            .field("x0", &self.x0)
            .field("xhat0", &self.xhat0)
            .finish()
    }
}

impl Scenario {
    pub fn dims(&self) -> PlantDims {
        self.plant.dims()
    }

    /// Bounded region where envelope claims are probed.
    pub fn probe_box(&self) -> BoxSet {
        self.boxes.x.clipped(self.probe_radius)
    }

    /// Same setup with the uncertainty channel removed (`p = 0`).
    pub fn without_uncertainty(&self) -> Scenario {
        let dims = self.dims();
        let n = dims.n;
        let mut env = self.envelope.clone();
        env.b_d = IntervalMatrix::zeros(n, 0);
        env.d_d = IntervalMatrix::zeros(dims.m, 0);
        env.b_d_abs = IntervalMatrix::zeros(n, 0);
        Scenario {
            name: format!("{}-nominal", self.name),
            plant: Arc::new(DropUncertainty {
                inner: self.plant.clone(),
            }),
            uncertainty: Arc::new(LinearUncertainty {
                gain: Matrix::zeros(0, dims.q),
            }),
            envelope: env,
            ..self.clone()
        }
    }
}

/// Wraps a plant, feeding `d = 0` and exposing `p = 0`.
struct DropUncertainty {
    inner: Arc<dyn Plant>,
}

impl DropUncertainty {
    fn zero_d(&self) -> Vector {
        Vector::zeros(self.inner.dims().p)
    }
}

impl Plant for DropUncertainty {
    fn dims(&self) -> PlantDims {
        PlantDims {
            p: 0,
            ..self.inner.dims()
        }
    }
    fn f(&self, x: &Vector, w: &Vector, _d: &Vector, u: &Vector) -> Vector {
        self.inner.f(x, w, &self.zero_d(), u)
    }
    fn h(&self, x: &Vector, w: &Vector, _d: &Vector, u: &Vector) -> Vector {
        self.inner.h(x, w, &self.zero_d(), u)
    }
    fn g(&self, x: &Vector, w: &Vector) -> Vector {
        self.inner.g(x, w)
    }
    fn f_jacobian(&self, x: &Vector, w: &Vector, _d: &Vector, u: &Vector) -> MapJacobian {
        let j = self.inner.f_jacobian(x, w, &self.zero_d(), u);
        MapJacobian {
            dd: Matrix::zeros(j.dx.nrows(), 0),
            ..j
        }
    }
    fn h_jacobian(&self, x: &Vector, w: &Vector, _d: &Vector, u: &Vector) -> MapJacobian {
        let j = self.inner.h_jacobian(x, w, &self.zero_d(), u);
        MapJacobian {
            dd: Matrix::zeros(j.dx.nrows(), 0),
            ..j
        }
    }
    fn g_jacobian(&self, x: &Vector, w: &Vector) -> (Matrix, Matrix) {
        self.inner.g_jacobian(x, w)
    }
}

/// Upper end of `1.3 − 0.1 sin(0.5 s)/s` over `0 < |s| ≤ radius`, valid while
/// `radius < 2π` (the ratio `sin(t)/t` is then positive and decreasing in |t|).
fn example_abs_slope_hi(radius: f64) -> f64 {
    let t = 0.5 * radius;
    1.3 - 0.05 * t.sin() / t
}

fn example_base(envelope_abs_a: IntervalMatrix, name: &str) -> Scenario {
    let k = Matrix::from_row_slice(2, 2, &[0.5, -0.41, 0.4, -0.75]);
    let a_center = Matrix::from_row_slice(2, 2, &[1.3, -0.4, 0.6, 0.75]);
    let mut a_lo = a_center.clone();
    let mut a_hi = a_center.clone();
    a_lo[(0, 0)] = 1.25;
    a_hi[(0, 0)] = 1.35;
    let a = IntervalMatrix::new(a_lo, a_hi).expect("valid interval");
    let pt = IntervalMatrix::point;
    let envelope = LipschitzEnvelope {
        a,
        b_w: IntervalMatrix::zeros(2, 1),
        b_d: pt(&Matrix::from_row_slice(2, 1, &[-1.0, 0.0])),
        c: pt(&Matrix::from_row_slice(1, 2, &[0.0, 1.0])),
        d_w: pt(&Matrix::from_element(1, 1, 1.0)),
        d_d: IntervalMatrix::zeros(1, 1),
        c_v: pt(&Matrix::from_row_slice(1, 2, &[1.0, 0.0])),
        e_w: IntervalMatrix::zeros(1, 1),
        a_abs: envelope_abs_a,
        b_w_abs: IntervalMatrix::zeros(2, 1),
        b_u: pt(&k),
        b_d_abs: pt(&Matrix::from_row_slice(2, 1, &[-1.0, 0.0])),
        c_v_abs: pt(&Matrix::from_row_slice(1, 2, &[1.0, 0.0])),
        e_w_abs: IntervalMatrix::zeros(1, 1),
    };
    Scenario {
        name: name.to_string(),
        plant: Arc::new(ExamplePlant),
        controller: Arc::new(LinearController { gain: k }),
        uncertainty: Arc::new(Saturation {
            gain: 0.125,
            knee: 2.0,
        }),
        boxes: ScenarioBoxes {
            x: BoxSet::unbounded(2),
            w: BoxSet::symmetric(1, 0.1),
            u: BoxSet::unbounded(2),
            y: BoxSet::unbounded(1),
        },
        envelope,
        x0: Vector::from_column_slice(&[2.0, -2.0]),
        xhat0: Vector::zeros(2),
        probe_radius: 5.0,
        d_range: 0.5,
    }
}

/// The two-state benchmark. The difference envelope carries the slope range
/// `1.3 − 0.05 cos(0.5 x₁) ∈ [1.25, 1.35]`; the absolute envelope carries the
/// secant range of `1.3 − 0.1 sin(0.5 x₁)/x₁` over the probe box
/// `|x₁| ≤ 5`, i.e. `[1.25, 1.288]`.
pub fn build_example_scenario() -> Scenario {
    let mut lo = Matrix::from_row_slice(2, 2, &[1.3, -0.4, 0.6, 0.75]);
    let mut hi = lo.clone();
    lo[(0, 0)] = 1.25;
    hi[(0, 0)] = example_abs_slope_hi(5.0);
    example_base(IntervalMatrix::new(lo, hi).expect("valid interval"), "example1")
}

/// Variant of the benchmark whose absolute envelope reuses the global slope
/// interval `[1.25, 1.35]` of the difference envelope.
pub fn build_example_scenario_global_abs() -> Scenario {
    let s = example_base(IntervalMatrix::zeros(2, 2), "example1-global");
    let a = s.envelope.a.clone();
    Scenario {
        envelope: LipschitzEnvelope {
            a_abs: a,
            ..s.envelope.clone()
        },
        ..s
    }
}

/// `x⁺ = a x + w`, `y = x + w`, no uncertainty channel, `u = 0`.
pub fn build_scalar_scenario(a: f64) -> Scenario {
    let dims = PlantDims {
        n: 1,
        n_w: 1,
        p: 0,
        q: 0,
        m: 1,
        l: 1,
    };
    let mut plant = LinearPlant::zero(dims);
    plant.a[(0, 0)] = a;
    plant.b_w[(0, 0)] = 1.0;
    plant.c[(0, 0)] = 1.0;
    plant.d_w[(0, 0)] = 1.0;
    let gain = Matrix::zeros(1, 1);
    let envelope = plant.exact_envelope(&gain);
    Scenario {
        name: "scalar".into(),
        plant: Arc::new(plant),
        controller: Arc::new(LinearController { gain }),
        uncertainty: Arc::new(LinearUncertainty {
            gain: Matrix::zeros(0, 0),
        }),
        boxes: ScenarioBoxes {
            x: BoxSet::unbounded(1),
            w: BoxSet::symmetric(1, 0.1),
            u: BoxSet::unbounded(1),
            y: BoxSet::unbounded(1),
        },
        envelope,
        x0: Vector::from_element(1, 1.0),
        xhat0: Vector::zeros(1),
        probe_radius: 5.0,
        d_range: 0.5,
    }
}

/// A linear scenario without uncertainty; `gain` is the state feedback.
pub fn build_linear_scenario(name: &str, plant: LinearPlant, gain: Matrix, w_radius: f64) -> Scenario {
    let dims = plant.dims();
    let envelope = plant.exact_envelope(&gain);
    Scenario {
        name: name.into(),
        plant: Arc::new(plant),
        controller: Arc::new(LinearController { gain }),
        uncertainty: Arc::new(LinearUncertainty {
            gain: Matrix::zeros(dims.p, dims.q),
        }),
        boxes: ScenarioBoxes {
            x: BoxSet::unbounded(dims.n),
            w: BoxSet::symmetric(dims.n_w, w_radius),
            u: BoxSet::unbounded(dims.l),
            y: BoxSet::unbounded(dims.m),
        },
        envelope,
        x0: Vector::zeros(dims.n),
        xhat0: Vector::zeros(dims.n),
        probe_radius: 5.0,
        d_range: 0.5,
    }
}

pub fn scenario_by_name(name: &str) -> Result<Scenario, ModelError> {
    match name {
        "example1" => Ok(build_example_scenario()),
        "example1-global" => Ok(build_example_scenario_global_abs()),
        "scalar" => Ok(build_scalar_scenario(0.5)),
        other => Err(ModelError::UnknownScenario(other.to_string())),
    }
}

pub const SCENARIO_NAMES: &[&str] = &["example1", "example1-global", "scalar"];

#[derive(Debug, Clone, PartialEq)]
pub struct StepOutcome {
    pub x_next: Vector,
    pub y: Vector,
    pub v: Vector,
    pub d: Vector,
}

/// One step of the true uncertain plant.
pub fn plant_step(
    scenario: &Scenario,
    x: &Vector,
    w: &Vector,
    u: &Vector,
) -> Result<StepOutcome, ModelError> {
    if !scenario.boxes.w.contains(w, 1e-12) {
        return Err(ModelError::DomainViolation(format!(
            "disturbance {:?} outside W",
            w.as_slice()
        )));
    }
    let plant = &scenario.plant;
    let v = plant.g(x, w);
    let d = scenario.uncertainty.eval(&v);
    let x_next = plant.f(x, w, &d, u);
    let y = plant.h(x, w, &d, u);
    Ok(StepOutcome { x_next, y, v, d })
}

#[derive(Debug, Clone, PartialEq)]
pub struct EnvelopeBlockReport {
    pub block: &'static str,
    pub passed: bool,
    pub worst_violation: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EnvelopeReport {
    pub samples: usize,
    pub tolerance: f64,
    pub probe_box: BoxSet,
    pub blocks: Vec<EnvelopeBlockReport>,
}

impl EnvelopeReport {
    pub fn passed(&self) -> bool {
        self.blocks.iter().all(|b| b.passed)
    }

    pub fn block(&self, name: &str) -> Option<&EnvelopeBlockReport> {
        self.blocks.iter().find(|b| b.block == name)
    }
}

fn hull_violation(val: &Vector, terms: &[(&IntervalMatrix, &Vector)]) -> f64 {
    let mut lo = Vector::zeros(val.len());
    let mut hi = Vector::zeros(val.len());
    for (im, x) in terms {
        if im.shape().1 == 0 {
            continue;
        }
        let (l, h) = im.apply_hull(x);
        lo += l;
        hi += h;
    }
    let mut worst = 0.0f64;
    for i in 0..val.len() {
        worst = worst.max(lo[i] - val[i]).max(val[i] - hi[i]);
    }
    worst
}

/// Sampled check that the plant's differences and absolute values lie inside
/// the interval hulls the envelope claims.
pub fn validate_envelope(scenario: &Scenario, sample_count: usize, seed: u64) -> EnvelopeReport {
    const TOL: f64 = 1e-9;
    let dims = scenario.dims();
    let env = &scenario.envelope;
    let plant = &scenario.plant;
    let xbox = scenario.probe_box();
    let wbox = scenario.boxes.w.clipped(scenario.probe_radius);
    let dbox = BoxSet::symmetric(dims.p, scenario.d_range);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = [0.0f64; 6];
    let names = ["f_diff", "h_diff", "g_diff", "f_abs", "g_abs", "equilibrium"];

    let x0 = Vector::zeros(dims.n);
    let u0 = scenario.controller.control(&x0);
    let eq = plant.f(&x0, &Vector::zeros(dims.n_w), &Vector::zeros(dims.p), &u0);
    let g0 = plant.g(&x0, &Vector::zeros(dims.n_w));
    worst[5] = eq.amax().max(if g0.is_empty() { 0.0 } else { g0.amax() });

    for _ in 0..sample_count.max(1) {
        let (x, xt) = (xbox.sample(&mut rng), xbox.sample(&mut rng));
        let (w, wt) = (wbox.sample(&mut rng), wbox.sample(&mut rng));
        let (d, dt) = (dbox.sample(&mut rng), dbox.sample(&mut rng));
        let xhat = xbox.sample(&mut rng);
        let u = scenario.controller.control(&xhat);
        let (ex, ew, ed) = (&x - &xt, &w - &wt, &d - &dt);

        let df = plant.f(&x, &w, &d, &u) - plant.f(&xt, &wt, &dt, &u);
        worst[0] = worst[0].max(hull_violation(&df, &[(&env.a, &ex), (&env.b_w, &ew), (&env.b_d, &ed)]));
        let dh = plant.h(&x, &w, &d, &u) - plant.h(&xt, &wt, &dt, &u);
        worst[1] = worst[1].max(hull_violation(&dh, &[(&env.c, &ex), (&env.d_w, &ew), (&env.d_d, &ed)]));
        let dg = plant.g(&x, &w) - plant.g(&xt, &wt);
        worst[2] = worst[2].max(hull_violation(&dg, &[(&env.c_v, &ex), (&env.e_w, &ew)]));
        let fa = plant.f(&x, &w, &d, &u);
        worst[3] = worst[3].max(hull_violation(
            &fa,
            &[(&env.a_abs, &x), (&env.b_w_abs, &w), (&env.b_u, &xhat), (&env.b_d_abs, &d)],
        ));
        let ga = plant.g(&x, &w);
        worst[4] = worst[4].max(hull_violation(&ga, &[(&env.c_v_abs, &x), (&env.e_w_abs, &w)]));
    }
    EnvelopeReport {
        samples: sample_count,
        tolerance: TOL,
        probe_box: xbox,
        blocks: names
            .iter()
            .zip(worst)
            .map(|(name, v)| EnvelopeBlockReport {
                block: name,
                passed: v <= TOL,
                worst_violation: v,
            })
            .collect(),
    }
}
