//! Closed loop of the uncertain plant, the controller and an estimator, with
//! the ISS and error bound checks and paired comparisons.

use std::fmt::Write as _;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use thiserror::Error;

use crate::iqc::filter_step;
use crate::mhe::{estimate_with, EstimatorKind, IssConstants, MheDesign, MheError, MheState};
use crate::model::{plant_step, ModelError};
use crate::numkit::Vector;

/// Steps averaged by the comparison metrics.
pub const TAIL_WINDOW: usize = 20;

#[derive(Debug, Error)]
pub enum SimError {
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error("estimator failed at k = {k}: {source}")]
    Estimator {
        k: usize,
        #[source]
        source: MheError,
        /// Steps completed before the failure.
        trace: Box<SimulationTrace>,
    },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("paired runs saw different disturbances for seed {0}")]
    Unpaired(u64),
}

#[derive(Debug, Clone, PartialEq)]
pub struct TraceStep {
    pub k: usize,
    pub x: Vector,
    pub xhat: Vector,
    pub w: Vector,
    pub u: Vector,
    pub y: Vector,
    pub v: Vector,
    pub d: Vector,
    /// True filter state, empty for the standard estimator.
    pub psi: Vector,
    pub cost: f64,
    pub lambda: f64,
    pub iterations: usize,
    /// The window solver hit its cap and its best feasible iterate was used.
    pub fallback: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimulationTrace {
    pub scenario: String,
    pub estimator: EstimatorKind,
    pub seed: u64,
    pub horizon: usize,
    pub epsilon: f64,
    pub xi: f64,
    pub cert_hash: String,
    pub steps: Vec<TraceStep>,
    /// State after the last step.
    pub x_final: Vector,
}

fn column_names(prefix: &str, dim: usize, always_index: bool) -> Vec<String> {
    if dim == 1 && !always_index {
        vec![prefix.to_string()]
    } else {
        (1..=dim).map(|i| format!("{prefix}{i}")).collect()
    }
}

impl SimulationTrace {
    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    pub fn fallbacks(&self) -> usize {
        self.steps.iter().filter(|s| s.fallback).count()
    }

    pub fn max_state_norm(&self) -> f64 {
        self.steps
            .iter()
            .map(|s| s.x.norm())
            .chain(std::iter::once(self.x_final.norm()))
            .fold(0.0, f64::max)
    }

    /// Mean `‖x − x̂‖` and mean `‖x‖` over the last [`TAIL_WINDOW`] steps.
    pub fn tail_means(&self) -> (f64, f64) {
        let start = self.steps.len().saturating_sub(TAIL_WINDOW);
        let tail = &self.steps[start..];
        let count = tail.len().max(1) as f64;
        let err = tail.iter().map(|s| (&s.x - &s.xhat).norm()).sum::<f64>() / count;
        let state = tail.iter().map(|s| s.x.norm()).sum::<f64>() / count;
        (err, state)
    }

    /// One header row and one row per step, floats with 17 significant digits.
    pub fn to_csv(&self) -> String {
        let Some(first) = self.steps.first() else {
            return String::new();
        };
        let mut header = vec!["k".to_string()];
        header.extend(column_names("x", first.x.len(), true));
        header.extend(column_names("xhat", first.xhat.len(), true));
        header.extend(column_names("w", first.w.len(), false));
        header.extend(column_names("u", first.u.len(), true));
        header.extend(column_names("y", first.y.len(), false));
        header.extend(column_names("v", first.v.len(), false));
        header.extend(column_names("d", first.d.len(), false));
        header.extend(["cost", "lambda_residual", "iters"].map(String::from));
        let mut out = header.join(",");
        out.push('\n');
        for s in &self.steps {
            let mut row = s.k.to_string();
            for vec in [&s.x, &s.xhat, &s.w, &s.u, &s.y, &s.v, &s.d] {
                for v in vec.iter() {
                    let _ = write!(row, ",{v:.16e}");
                }
            }
            let _ = write!(row, ",{:.16e},{:.16e},{}", s.cost, s.lambda, s.iterations);
            out.push_str(&row);
            out.push('\n');
        }
        out
    }
}

/// Disturbance source for [`run_closed_loop_with`].
pub enum Disturbance {
    /// I.i.d. uniform on `W` from a ChaCha8 stream keyed by the seed.
    Uniform,
    Zero,
}

pub fn run_closed_loop(
    design: &MheDesign,
    cert_hash: &str,
    steps: usize,
    seed: u64,
    x0: &Vector,
    xhat0: &Vector,
) -> Result<SimulationTrace, SimError> {
    run_closed_loop_with(design, cert_hash, steps, seed, x0, xhat0, Disturbance::Uniform)
}

pub fn run_closed_loop_with(
    design: &MheDesign,
    cert_hash: &str,
    steps: usize,
    seed: u64,
    x0: &Vector,
    xhat0: &Vector,
    disturbance: Disturbance,
) -> Result<SimulationTrace, SimError> {
    let scenario = &design.scenario;
    let sd = scenario.dims();
    if steps == 0 {
        return Err(SimError::InvalidInput("steps must be at least 1".into()));
    }
    if x0.len() != sd.n || xhat0.len() != sd.n {
        return Err(SimError::InvalidInput(format!("initial states must have length {}", sd.n)));
    }
    if !scenario.boxes.x.contains(x0, 0.0) || !scenario.boxes.x.contains(xhat0, 0.0) {
        return Err(SimError::InvalidInput("initial states outside X".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut trace = SimulationTrace {
        scenario: scenario.name.clone(),
        estimator: design.kind,
        seed,
        horizon: design.horizon,
        epsilon: design.epsilon,
        xi: design.xi,
        cert_hash: cert_hash.to_string(),
        steps: Vec::with_capacity(steps),
        x_final: x0.clone(),
    };
    let mut state = MheState::for_design(design, xhat0);
    let mut x = x0.clone();
    let mut psi = Vector::zeros(design.n_psi());
    for k in 0..steps {
        let out = match estimate_with(&mut state, design) {
            Ok(o) => o,
            Err(source) => {
                trace.x_final = x;
                return Err(SimError::Estimator {
                    k,
                    source,
                    trace: Box::new(trace),
                });
            }
        };
        let xhat = out.theta.rows(0, sd.n).into_owned();
        let u = scenario.controller.control(&xhat);
        let w = match disturbance {
            Disturbance::Uniform => scenario.boxes.w.sample(&mut rng),
            Disturbance::Zero => Vector::zeros(sd.n_w),
        };
        let step = plant_step(scenario, &x, &w, &u)?;
        let psi_next = match &design.filter {
            Some(f) => filter_step(f, &psi, &step.v, &step.d).expect("filter matches the scenario").0,
            None => Vector::zeros(0),
        };
        let (cost, lambda, iterations) = out
            .solution
            .as_ref()
            .map_or((0.0, 0.0, 0), |s| (s.cost, s.lambda, s.iterations));
        trace.steps.push(TraceStep {
            k,
            x: x.clone(),
            xhat,
            w,
            u: u.clone(),
            y: step.y.clone(),
            v: step.v,
            d: step.d,
            psi: psi.clone(),
            cost,
            lambda,
            iterations,
            fallback: out.fallback,
        });
        state.record(u, step.y).map_err(|source| SimError::Estimator {
            k,
            source,
            trace: Box::new(trace.clone()),
        })?;
        x = step.x_next;
        psi = psi_next;
    }
    trace.x_final = x;
    Ok(trace)
}

#[derive(Debug, Clone, PartialEq)]
pub struct BoundReport {
    pub max_state_ratio: f64,
    pub max_error_ratio: f64,
    pub worst_state_step: usize,
    pub worst_error_step: usize,
}

impl BoundReport {
    pub fn passed(&self, tol: f64) -> bool {
        self.max_state_ratio <= 1.0 + tol && self.max_error_ratio <= 1.0 + tol
    }
}

fn ratio(observed: f64, bound: f64) -> f64 {
    if observed == 0.0 {
        0.0
    } else if bound > 0.0 {
        observed / bound
    } else {
        f64::INFINITY
    }
}

/// Observed/bound ratios of the ISS state bound
/// `‖x_k‖ ≤ λ^k C_x(‖x₀−x̂₀‖+‖x₀‖) + C_w/(1−λ)·max_{i<k}‖w_i‖`
/// and of the estimation error bound
/// `‖x_k−x̂_k‖ ≤ λ^k e_x‖col(x₀, x₀−x̂₀)‖ + e_w·max_{1≤i≤k} √λ^{i−1}‖w_{k−i}‖`.
pub fn check_bounds(trace: &SimulationTrace, c: &IssConstants) -> BoundReport {
    let mut report = BoundReport {
        max_state_ratio: 0.0,
        max_error_ratio: 0.0,
        worst_state_step: 0,
        worst_error_step: 0,
    };
    let Some(first) = trace.steps.first() else {
        return report;
    };
    let e0 = (&first.x - &first.xhat).norm();
    let x0 = first.x.norm();
    let joint0 = (x0 * x0 + e0 * e0).sqrt();
    let wn: Vec<f64> = trace.steps.iter().map(|s| s.w.norm()).collect();
    let sq = c.lambda.sqrt();
    let mut wmax = 0.0f64;
    let states = trace.steps.iter().map(|s| s.x.norm()).chain(std::iter::once(trace.x_final.norm()));
    for (k, xn) in states.enumerate() {
        let lk = c.lambda.powi(k as i32);
        let bound = lk * c.big_c_x * (e0 + x0) + c.big_c_w / (1.0 - c.lambda) * wmax;
        let r = ratio(xn, bound);
        if r > report.max_state_ratio {
            report.max_state_ratio = r;
            report.worst_state_step = k;
        }
        if let Some(s) = trace.steps.get(k) {
            let weighted = (1..=k).map(|i| sq.powi(i as i32 - 1) * wn[k - i]).fold(0.0, f64::max);
            let bound = lk * c.err_c_x * joint0 + c.err_c_w * weighted;
            let r = ratio((&s.x - &s.xhat).norm(), bound);
            if r > report.max_error_ratio {
                report.max_error_ratio = r;
                report.worst_error_step = k;
            }
            wmax = wmax.max(wn[k]);
        }
    }
    report
}

#[derive(Debug, Clone, PartialEq)]
pub struct CompareRow {
    pub seed: u64,
    pub estimator: EstimatorKind,
    pub mean_err_tail: f64,
    pub mean_state_tail: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CompareSummary {
    pub rows: Vec<CompareRow>,
    pub median_err_proposed: f64,
    pub median_err_standard: f64,
    pub median_state_proposed: f64,
    pub median_state_standard: f64,
}

impl CompareSummary {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("seed,est,mean_err_tail,mean_state_tail\n");
        for r in &self.rows {
            let est = match r.estimator {
                EstimatorKind::Robust => "proposed",
                EstimatorKind::Standard => "standard",
            };
            let _ = writeln!(out, "{},{},{:.16e},{:.16e}", r.seed, est, r.mean_err_tail, r.mean_state_tail);
        }
        out
    }
}

#[derive(Debug, Clone)]
pub struct Comparison {
    pub summary: CompareSummary,
    pub first: Vec<SimulationTrace>,
    pub second: Vec<SimulationTrace>,
}

pub fn median(values: &[f64]) -> f64 {
    if values.is_empty() {
        return f64::NAN;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let m = v.len() / 2;
    if v.len() % 2 == 1 {
        v[m]
    } else {
        0.5 * (v[m - 1] + v[m])
    }
}

/// Paired runs of two estimators over the same seeds. The first design is
/// reported as "proposed" and the second as "standard" whatever their kinds.
#[allow(clippy::too_many_arguments)]
pub fn compare(
    first: (&MheDesign, &str),
    second: (&MheDesign, &str),
    steps: usize,
    seeds: &[u64],
    x0: &Vector,
    xhat0: &Vector,
) -> Result<Comparison, SimError> {
    if seeds.is_empty() {
        return Err(SimError::InvalidInput("no seeds given".into()));
    }
    let runs: Vec<Result<(SimulationTrace, SimulationTrace), SimError>> = seeds
        .par_iter()
        .map(|&seed| {
            let a = run_closed_loop(first.0, first.1, steps, seed, x0, xhat0)?;
            let b = run_closed_loop(second.0, second.1, steps, seed, x0, xhat0)?;
            if a.steps.iter().zip(&b.steps).any(|(p, q)| p.w != q.w) {
                return Err(SimError::Unpaired(seed));
            }
            Ok((a, b))
        })
        .collect();
    let mut rows = Vec::new();
    let (mut ta, mut tb) = (Vec::new(), Vec::new());
    for r in runs {
        let (a, b) = r?;
        for (t, kind) in [(&a, EstimatorKind::Robust), (&b, EstimatorKind::Standard)] {
            let (e, s) = t.tail_means();
            rows.push(CompareRow {
                seed: t.seed,
                estimator: kind,
                mean_err_tail: e,
                mean_state_tail: s,
            });
        }
        ta.push(a);
        tb.push(b);
    }
    let pick = |kind: EstimatorKind, f: fn(&CompareRow) -> f64| {
        median(&rows.iter().filter(|r| r.estimator == kind).map(f).collect::<Vec<_>>())
    };
    let summary = CompareSummary {
        median_err_proposed: pick(EstimatorKind::Robust, |r| r.mean_err_tail),
        median_err_standard: pick(EstimatorKind::Standard, |r| r.mean_err_tail),
        median_state_proposed: pick(EstimatorKind::Robust, |r| r.mean_state_tail),
        median_state_standard: pick(EstimatorKind::Standard, |r| r.mean_state_tail),
        rows,
    };
    Ok(Comparison {
        summary,
        first: ta,
        second: tb,
    })
}
