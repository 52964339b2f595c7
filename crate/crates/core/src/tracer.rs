//! Predictor-corrector path following from `t = 1` down to `t_end`.
//!
//! Each step takes an Euler predictor along the unit tangent of the zero
//! curve, then a Newton corrector on the square system
//! `{H(w) = 0, τᵀ(w - w_pred) = 0}` with `w = (u, t)`. Step lengths grow
//! after easy corrections and shrink after failed ones. The step that would
//! cross `t_end` is shortened to land on it, and the final point is solved
//! with `t` held fixed: on `f^L(x) = 0` for the plain map, on the KKT
//! system at `t_end` otherwise.

use std::io::Write;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::homotopy::HomotopyMap;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceConfig {
    /// Initial arclength step.
    pub h0: f64,
    pub h_min: f64,
    pub h_max: f64,
    /// Max-norm residual accepted by the corrector.
    pub corrector_tol: f64,
    pub max_corrector_iters: usize,
    pub grow: f64,
    pub shrink: f64,
    pub max_steps: usize,
    /// Terminal level; `None` picks 0 for the plain map, 1e-8 for KKT.
    pub t_end: Option<f64>,
    /// Residual target of the terminal solve on `f^L` (plain map).
    pub polish_tol: f64,
    pub max_polish_iters: usize,
    /// Corrector matrices with a larger 2-norm condition number are
    /// treated as a failed step.
    pub max_condition: f64,
    /// Leaving the domain box scaled by this factor aborts the trace.
    pub box_factor: f64,
    /// Keep every accepted point in the result.
    pub record_path: bool,
}

impl Default for TraceConfig {
    fn default() -> Self {
        TraceConfig {
            h0: 1e-2,
            h_min: 1e-10,
            h_max: 0.2,
            corrector_tol: 1e-10,
            max_corrector_iters: 10,
            grow: 1.5,
            shrink: 0.5,
            max_steps: 1_000_000,
            t_end: None,
            polish_tol: 1e-12,
            max_polish_iters: 30,
            max_condition: 1e12,
            box_factor: 2.0,
            record_path: true,
        }
    }
}

impl TraceConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidTraceConfig(m.to_string()));
        if !(self.h_min > 0.0 && self.h_min <= self.h0 && self.h0 <= self.h_max) {
            return bad("need 0 < h_min <= h0 <= h_max");
        }
        if !(self.shrink > 0.0 && self.shrink < 1.0 && self.grow > 1.0) {
            return bad("need 0 < shrink < 1 < grow");
        }
        if !(self.corrector_tol > 0.0 && self.polish_tol > 0.0) {
            return bad("tolerances must be positive");
        }
        if self.max_corrector_iters == 0 || self.max_steps == 0 {
            return bad("iteration limits must be positive");
        }
        if !(self.box_factor >= 1.0 && self.max_condition > 1.0) {
            return bad("need box_factor >= 1 and max_condition > 1");
        }
        if let Some(t) = self.t_end {
            if !(0.0..1.0).contains(&t) {
                return bad("t_end must lie in [0, 1)");
            }
        }
        Ok(())
    }

    pub fn terminal_level(&self, hm: &HomotopyMap) -> f64 {
        self.t_end.unwrap_or(if hm.is_kkt() { 1e-8 } else { 0.0 })
    }
}

/// One accepted point on the traced path.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PathPoint {
    pub u: Vec<f64>,
    pub t: f64,
    pub step_len: f64,
    pub corrector_iters: usize,
    /// `‖H(u, t)‖∞`.
    pub residual: f64,
    /// Cumulative sample evaluations of this trace when the point was accepted.
    pub sample_evals: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum TraceStatus {
    Converged,
    Stalled,
    MaxSteps,
    DivergedOutOfBox,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct TraceCounters {
    /// Predictor steps attempted, accepted or not.
    pub predictor_steps: u64,
    pub accepted_steps: u64,
    pub rejected_steps: u64,
    pub corrector_iters_total: u64,
    pub sample_evals: u64,
}

#[derive(Debug, Clone, Serialize)]
pub struct TraceResult {
    pub status: TraceStatus,
    pub u: Vec<f64>,
    pub t: f64,
    /// State part of `u`.
    pub x: Vec<f64>,
    /// `‖f^L(x)‖∞` for the plain map, `‖H(u, t_end)‖∞` for KKT.
    pub final_residual: f64,
    pub path: Vec<PathPoint>,
    pub counters: TraceCounters,
    pub message: Option<String>,
}

impl TraceResult {
    pub fn converged(&self) -> bool {
        self.status == TraceStatus::Converged
    }

    /// Path as CSV: step, t, ‖u‖, residual, step_len, corrector_iters,
    /// cumulative sample_evals.
    pub fn write_path_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record([
            "step",
            "t",
            "u_norm",
            "residual",
            "step_len",
            "corrector_iters",
            "sample_evals",
        ])?;
        for (i, p) in self.path.iter().enumerate() {
            let norm = p.u.iter().map(|v| v * v).sum::<f64>().sqrt();
            w.write_record([
                i.to_string(),
                format!("{:.16e}", p.t),
                format!("{norm:.16e}"),
                format!("{:.6e}", p.residual),
                format!("{:.6e}", p.step_len),
                p.corrector_iters.to_string(),
                p.sample_evals.to_string(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Failure of [`tangent`]: the Jacobian does not have full row rank.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RankDeficient {
    /// Second-smallest singular value of the bordered matrix relative to
    /// the largest.
    pub relative_gap: f64,
}

/// Unit vector spanning the kernel of the `d × (d + 1)` matrix `jac`,
/// oriented to have a positive inner product with `prev`, or, without a
/// previous tangent, a negative `t`-component.
pub fn tangent(
    jac: &DMatrix<f64>,
    prev: Option<&DVector<f64>>,
) -> std::result::Result<DVector<f64>, RankDeficient> {
    let d = jac.nrows();
    debug_assert_eq!(jac.ncols(), d + 1);
    // append a zero row: one singular value vanishes for the kernel direction
    let mut square = DMatrix::zeros(d + 1, d + 1);
    square.view_mut((0, 0), (d, d + 1)).copy_from(jac);
    let svd = square.svd(false, true);
    let v_t = svd.v_t.as_ref().expect("requested");
    let sv = &svd.singular_values;
    let mut order: Vec<usize> = (0..=d).collect();
    order.sort_by(|&a, &b| {
        sv[a]
            .partial_cmp(&sv[b])
            .unwrap_or(std::cmp::Ordering::Equal)
    });
    let largest = sv[order[d]];
    if d > 0 {
        let gap = sv[order[1]] / largest;
        if !(gap > 1e-13) || !largest.is_finite() {
            return Err(RankDeficient { relative_gap: gap });
        }
    } else if !largest.is_finite() {
        return Err(RankDeficient { relative_gap: 0.0 });
    }
    let mut tau: DVector<f64> = v_t.row(order[0]).transpose();
    tau /= tau.norm();
    let flip = match prev {
        Some(p) => tau.dot(p) < 0.0,
        None => tau[d] > 0.0,
    };
    if flip {
        tau = -tau;
    }
    Ok(tau)
}

fn inf_norm(v: &DVector<f64>) -> f64 {
    v.iter().fold(0.0f64, |m, x| m.max(x.abs()))
}

fn condition_number(m: &DMatrix<f64>) -> f64 {
    let sv = m.singular_values();
    let max = sv.iter().cloned().fold(0.0, f64::max);
    let min = sv.iter().cloned().fold(f64::INFINITY, f64::min);
    if min > 0.0 {
        max / min
    } else {
        f64::INFINITY
    }
}

/// Outcome of a successful correction.
#[derive(Debug, Clone)]
pub struct Corrected {
    pub u: DVector<f64>,
    pub t: f64,
    pub iters: usize,
    pub residual: f64,
    /// Jacobian at the corrected point.
    pub jac: DMatrix<f64>,
}

/// Why a correction was abandoned. Always recoverable by a shorter step.
#[derive(Debug, Clone, PartialEq)]
pub enum CorrectorFailure {
    NotConverged,
    Diverging,
    IllConditioned,
    Evaluation(String),
}

/// Newton iteration on `{H(u, t) = 0, τᵀ((u, t) - (u_pred, t_pred)) = 0}`.
/// `t` is clamped to `[0, 1]` after each update.
pub fn correct(
    hm: &HomotopyMap,
    u_pred: &DVector<f64>,
    t_pred: f64,
    tau: &DVector<f64>,
    cfg: &TraceConfig,
) -> std::result::Result<Corrected, CorrectorFailure> {
    let d = hm.dim();
    let mut w = DVector::zeros(d + 1);
    w.rows_mut(0, d).copy_from(u_pred);
    w[d] = t_pred.clamp(0.0, 1.0);
    let w_pred = {
        let mut p = w.clone();
        p[d] = t_pred;
        p
    };
    let mut last_step = f64::INFINITY;
    for iter in 0..=cfg.max_corrector_iters {
        let ev = hm
            .eval_with_jacobian(&w.as_slice()[..d], w[d])
            .map_err(|e| CorrectorFailure::Evaluation(e.to_string()))?;
        let res = inf_norm(&ev.value);
        if !res.is_finite() {
            return Err(CorrectorFailure::Evaluation("non-finite residual".into()));
        }
        if res <= cfg.corrector_tol {
            return Ok(Corrected {
                u: w.rows(0, d).clone_owned(),
                t: w[d],
                iters: iter,
                residual: res,
                jac: ev.jac,
            });
        }
        if iter == cfg.max_corrector_iters {
            break;
        }
        let mut m = DMatrix::zeros(d + 1, d + 1);
        m.view_mut((0, 0), (d, d + 1)).copy_from(&ev.jac);
        m.row_mut(d).copy_from(&tau.transpose());
        if condition_number(&m) > cfg.max_condition {
            return Err(CorrectorFailure::IllConditioned);
        }
        let mut rhs = DVector::zeros(d + 1);
        rhs.rows_mut(0, d).copy_from(&(-&ev.value));
        rhs[d] = -tau.dot(&(&w - &w_pred));
        let delta = m.lu().solve(&rhs).ok_or(CorrectorFailure::IllConditioned)?;
        let step = delta.norm();
        if iter >= 1 && step > last_step {
            return Err(CorrectorFailure::Diverging);
        }
        last_step = step;
        w += delta;
        w[d] = w[d].clamp(0.0, 1.0);
    }
    Err(CorrectorFailure::NotConverged)
}

/// Newton on `H(·, t) = 0` with `t` fixed. Returns the point, iterations
/// and final max-norm residual.
fn solve_fixed_t(
    hm: &HomotopyMap,
    u0: &DVector<f64>,
    t: f64,
    tol: f64,
    max_iters: usize,
    max_condition: f64,
) -> std::result::Result<(DVector<f64>, usize, f64), CorrectorFailure> {
    let d = hm.dim();
    let mut u = u0.clone();
    let mut last_step = f64::INFINITY;
    for iter in 0..=max_iters {
        let ev = hm
            .eval_with_jacobian(u.as_slice(), t)
            .map_err(|e| CorrectorFailure::Evaluation(e.to_string()))?;
        let res = inf_norm(&ev.value);
        if !res.is_finite() {
            return Err(CorrectorFailure::Evaluation("non-finite residual".into()));
        }
        if res <= tol {
            return Ok((u, iter, res));
        }
        if iter == max_iters {
            break;
        }
        let m = ev.jac.columns(0, d).clone_owned();
        if condition_number(&m) > max_condition {
            return Err(CorrectorFailure::IllConditioned);
        }
        let delta = m
            .lu()
            .solve(&(-&ev.value))
            .ok_or(CorrectorFailure::IllConditioned)?;
        let step = delta.norm();
        if iter >= 2 && step > last_step {
            return Err(CorrectorFailure::Diverging);
        }
        last_step = step;
        u += delta;
    }
    Err(CorrectorFailure::NotConverged)
}

/// Follows the zero curve of `hm` from its start point at `t = 1`.
pub fn trace(hm: &HomotopyMap, cfg: &TraceConfig) -> Result<TraceResult> {
    cfg.validate()?;
    let d = hm.dim();
    let n = hm.state_dim();
    let t_end = cfg.terminal_level(hm);
    let bm = hm.blended();
    let evals_at_start = bm.sample_evals();
    let evals = || bm.sample_evals() - evals_at_start;
    let outer = bm.system().domain().expanded(cfg.box_factor);

    let mut u = hm.start_point()?;
    let mut t = 1.0;
    let start = hm.eval_with_jacobian(u.as_slice(), t)?;
    let start_res = inf_norm(&start.value);
    if start_res > cfg.corrector_tol {
        return Err(Error::Config(format!("start point residual {start_res:e}")));
    }
    let singular = |u: &DVector<f64>, t: f64| Error::SingularJacobian {
        t,
        u_norm: u.norm(),
    };
    let mut tau = tangent(&start.jac, None).map_err(|_| singular(&u, t))?;

    let mut counters = TraceCounters::default();
    let mut path = Vec::new();
    let push = |path: &mut Vec<PathPoint>, p: PathPoint| {
        if cfg.record_path || path.is_empty() {
            path.push(p);
        } else {
            path[0] = p;
        }
    };
    path.push(PathPoint {
        u: u.as_slice().to_vec(),
        t,
        step_len: 0.0,
        corrector_iters: 0,
        residual: start_res,
        sample_evals: evals(),
    });

    let finish = |status: TraceStatus,
                  u: DVector<f64>,
                  t: f64,
                  final_residual: f64,
                  path: Vec<PathPoint>,
                  mut counters: TraceCounters,
                  message: Option<String>| {
        counters.sample_evals = evals();
        TraceResult {
            status,
            x: u.as_slice()[..n].to_vec(),
            u: u.as_slice().to_vec(),
            t,
            final_residual,
            path,
            counters,
            message,
        }
    };

    let mut h = cfg.h0;
    loop {
        if counters.predictor_steps as usize >= cfg.max_steps {
            let res = path.last().map(|p| p.residual).unwrap_or(f64::NAN);
            return Ok(finish(
                TraceStatus::MaxSteps,
                u,
                t,
                res,
                path,
                counters,
                None,
            ));
        }
        if h < cfg.h_min {
            let res = path.last().map(|p| p.residual).unwrap_or(f64::NAN);
            let msg = format!("step length fell below {:e} at t = {t:e}", cfg.h_min);
            return Ok(finish(
                TraceStatus::Stalled,
                u,
                t,
                res,
                path,
                counters,
                Some(msg),
            ));
        }
        counters.predictor_steps += 1;

        let t_pred = t + h * tau[d];
        let tau_u = tau.rows(0, d).clone_owned();
        if t_pred <= t_end {
            // land exactly on t_end and solve there with t fixed
            let h_land = (t - t_end) / (-tau[d]);
            let guess = &u + &tau_u * h_land;
            if let Some(done) = terminal_solve(hm, cfg, &guess, t_end, &mut counters) {
                let (u_fin, iters, res) = done;
                push(
                    &mut path,
                    PathPoint {
                        u: u_fin.as_slice().to_vec(),
                        t: t_end,
                        step_len: h_land,
                        corrector_iters: iters,
                        residual: res,
                        sample_evals: evals(),
                    },
                );
                counters.accepted_steps += 1;
                return Ok(finish(
                    TraceStatus::Converged,
                    u_fin,
                    t_end,
                    res,
                    path,
                    counters,
                    None,
                ));
            }
            counters.rejected_steps += 1;
            h *= cfg.shrink;
            continue;
        }

        let u_pred = &u + &tau_u * h;
        let corrected = correct(hm, &u_pred, t_pred, &tau, cfg);
        let c = match corrected {
            Ok(c) => c,
            Err(e) => {
                log::debug!("corrector failed at t = {t:e}, h = {h:e}: {e:?}");
                counters.rejected_steps += 1;
                h *= cfg.shrink;
                continue;
            }
        };
        counters.corrector_iters_total += c.iters as u64;

        // reject corrections that wander further than the step itself
        let mut moved = c.u.clone() - &u_pred;
        let dt_moved = c.t - t_pred;
        let wander = (moved.norm_squared() + dt_moved * dt_moved).sqrt();
        if wander > h {
            counters.rejected_steps += 1;
            h *= cfg.shrink;
            continue;
        }

        if c.t <= t_end {
            // clamped onto the terminal level inside the corrector
            if let Some((u_fin, iters, res)) = terminal_solve(hm, cfg, &c.u, t_end, &mut counters) {
                push(
                    &mut path,
                    PathPoint {
                        u: u_fin.as_slice().to_vec(),
                        t: t_end,
                        step_len: h,
                        corrector_iters: c.iters + iters,
                        residual: res,
                        sample_evals: evals(),
                    },
                );
                counters.accepted_steps += 1;
                return Ok(finish(
                    TraceStatus::Converged,
                    u_fin,
                    t_end,
                    res,
                    path,
                    counters,
                    None,
                ));
            }
            counters.rejected_steps += 1;
            h *= cfg.shrink;
            continue;
        }

        let new_tau = match tangent(&c.jac, Some(&tau)) {
            Ok(v) => v,
            Err(_) => {
                counters.rejected_steps += 1;
                h *= cfg.shrink;
                continue;
            }
        };

        moved = c.u.rows(0, n).clone_owned();
        if !outer.contains(moved.as_slice()) {
            counters.accepted_steps += 1;
            let msg = format!("state left the expanded domain box at t = {:e}", c.t);
            return Ok(finish(
                TraceStatus::DivergedOutOfBox,
                c.u,
                c.t,
                c.residual,
                path,
                counters,
                Some(msg),
            ));
        }

        counters.accepted_steps += 1;
        log::debug!(
            "step {} accepted: t = {:e}, h = {h:e}, {} corrector iterations",
            counters.accepted_steps,
            c.t,
            c.iters
        );
        u = c.u;
        t = c.t;
        tau = new_tau;
        push(
            &mut path,
            PathPoint {
                u: u.as_slice().to_vec(),
                t,
                step_len: h,
                corrector_iters: c.iters,
                residual: c.residual,
                sample_evals: evals(),
            },
        );
        if c.iters <= 3 {
            h = (h * cfg.grow).min(cfg.h_max);
        }
    }
}

fn terminal_solve(
    hm: &HomotopyMap,
    cfg: &TraceConfig,
    guess: &DVector<f64>,
    t_end: f64,
    counters: &mut TraceCounters,
) -> Option<(DVector<f64>, usize, f64)> {
    let (tol, iters) = if hm.is_kkt() {
        (cfg.corrector_tol, cfg.max_corrector_iters)
    } else {
        (cfg.polish_tol, cfg.max_polish_iters)
    };
    match solve_fixed_t(hm, guess, t_end, tol, iters, cfg.max_condition) {
        Ok((u, k, res)) => {
            counters.corrector_iters_total += k as u64;
            Some((u, k, res))
        }
        Err(_) => None,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::sync::Arc;

    use crate::error::ModelError;
    use crate::saa::{BlendedMap, BoxDomain, StochasticModel, StochasticSystem};
    use crate::sampling::{Distribution, Partition, SampleSet};
    use crate::schedule::{NodeSchedule, ScheduleKind};

    #[test]
    fn tangent_of_single_row() {
        let j = DMatrix::from_row_slice(1, 2, &[2.0, 1.0]);
        let tau = tangent(&j, None).unwrap();
        let s5 = 5f64.sqrt();
        assert!((tau[0] - 1.0 / s5).abs() < 1e-15);
        assert!((tau[1] + 2.0 / s5).abs() < 1e-15);
        let prev = DVector::from_vec(vec![-1.0, 0.0]);
        let tau2 = tangent(&j, Some(&prev)).unwrap();
        assert!(tau2.dot(&prev) > 0.0);
        assert!((&tau2 + &tau).amax() < 1e-15);
    }

    #[test]
    fn tangent_of_identity_block() {
        let mut j = DMatrix::zeros(3, 4);
        for i in 0..3 {
            j[(i, i)] = 1.0;
        }
        let tau = tangent(&j, None).unwrap();
        assert_eq!(tau.rows(0, 3).amax(), 0.0);
        assert_eq!(tau[3], -1.0);
    }

    #[test]
    fn tangent_rejects_rank_deficiency() {
        let j = DMatrix::from_row_slice(2, 3, &[1.0, 2.0, 3.0, 2.0, 4.0, 6.0]);
        assert!(tangent(&j, None).is_err());
        let j = DMatrix::zeros(1, 2);
        assert!(tangent(&j, None).is_err());
    }

    /// `f(x, ξ) = x - a` for every sample: the plain homotopy is linear and
    /// its zero curve is `x(t) = (1 - t) a + t x⁰`.
    struct Linear {
        a: Vec<f64>,
    }

    impl StochasticModel for Linear {
        fn dim(&self) -> usize {
            self.a.len()
        }
        fn residual(
            &self,
            x: &[f64],
            _xi: &[f64],
            out: &mut [f64],
        ) -> std::result::Result<(), ModelError> {
            for i in 0..x.len() {
                out[i] = x[i] - self.a[i];
            }
            Ok(())
        }
        fn jacobian(
            &self,
            _x: &[f64],
            _xi: &[f64],
            out: &mut DMatrix<f64>,
        ) -> std::result::Result<(), ModelError> {
            out.fill_with_identity();
            Ok(())
        }
        fn has_analytic_jacobian(&self) -> bool {
            true
        }
    }

    fn linear_map(x0: Vec<f64>, a: Vec<f64>) -> HomotopyMap {
        let n = a.len();
        let dist = Distribution::uniform_cube(-1.0, 1.0, 1);
        let set = SampleSet::draw(&dist, 1, 0).unwrap();
        let sys = StochasticSystem::new(
            Arc::new(Linear { a }),
            BoxDomain::cube(-10.0, 10.0, n).unwrap(),
            DVector::from_vec(x0),
        )
        .unwrap();
        let bm = BlendedMap::new(
            sys,
            Arc::new(set),
            Partition::uniform(1, 1).unwrap(),
            NodeSchedule::new(ScheduleKind::Uniform, 1).unwrap(),
        )
        .unwrap();
        HomotopyMap::plain(bm)
    }

    /// Exact zero curve of `linear_map` on the hyperplane through `w_pred`
    /// orthogonal to `tau`, found by bisection along the curve.
    fn closed_form_on_hyperplane(
        x0: &[f64],
        a: &[f64],
        w_pred: &DVector<f64>,
        tau: &DVector<f64>,
    ) -> (Vec<f64>, f64) {
        // with L = 1, d = θ(t)(x - a) where θ = sin²((1 - t)π/2); on the
        // curve (1-t)θ(x - a) + t(x - x0) = 0 ⇒ x = (cθ a + t x0)/(cθ + t)
        let point = |t: f64| {
            let th = ((1.0 - t) * std::f64::consts::FRAC_PI_2).sin().powi(2);
            let c = (1.0 - t) * th;
            let x: Vec<f64> = (0..a.len())
                .map(|i| (c * a[i] + t * x0[i]) / (c + t))
                .collect();
            x
        };
        let n = a.len();
        let g = |t: f64| {
            let x = point(t);
            (0..n).map(|i| tau[i] * (x[i] - w_pred[i])).sum::<f64>() + tau[n] * (t - w_pred[n])
        };
        let (mut lo, mut hi) = (0.0, 1.0);
        let glo = g(lo);
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            if (g(mid) > 0.0) == (glo > 0.0) {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        let t = 0.5 * (lo + hi);
        (point(t), t)
    }

    #[test]
    fn corrector_lands_on_closed_form_path() {
        let x0 = vec![0.5, -0.5];
        let a = vec![2.0, 1.0];
        let hm = linear_map(x0.clone(), a.clone());
        let cfg = TraceConfig::default();
        // on-path point at t = 0.6 and its tangent
        let (x_on, _) = {
            let th = (0.4 * std::f64::consts::FRAC_PI_2).sin().powi(2);
            let c = 0.4 * th;
            let x: Vec<f64> = (0..2)
                .map(|i| (c * a[i] + 0.6 * x0[i]) / (c + 0.6))
                .collect();
            (x, 0.6)
        };
        let ev = hm.eval_with_jacobian(&x_on, 0.6).unwrap();
        assert!(inf_norm(&ev.value) < 1e-14);
        let tau = tangent(&ev.jac, None).unwrap();

        // predictor already on the path
        let u_on = DVector::from_vec(x_on.clone());
        let c = correct(&hm, &u_on, 0.6, &tau, &cfg).unwrap();
        assert!(c.iters <= 1);
        assert!((&c.u - &u_on).amax() < 1e-12);

        // a nearby predictor
        let h = 0.05;
        let u_pred = &u_on + tau.rows(0, 2) * h;
        let t_pred = 0.6 + tau[2] * h;
        let c = correct(&hm, &u_pred, t_pred, &tau, &cfg).unwrap();
        let mut w_pred = DVector::zeros(3);
        w_pred.rows_mut(0, 2).copy_from(&u_pred);
        w_pred[2] = t_pred;
        let (x_exact, t_exact) = closed_form_on_hyperplane(&x0, &a, &w_pred, &tau);
        assert!((c.t - t_exact).abs() < 1e-9, "{} vs {t_exact}", c.t);
        for i in 0..2 {
            assert!((c.u[i] - x_exact[i]).abs() < 1e-9);
        }
        assert!(c.iters <= 4, "{} iterations", c.iters);
    }

    #[test]
    fn corrector_reports_failure_on_wild_predictor() {
        let hm = linear_map(vec![0.0], vec![3.0]);
        let cfg = TraceConfig {
            max_corrector_iters: 2,
            ..TraceConfig::default()
        };
        // oblique hyperplane: the t-nonlinearity of the blend needs more
        // than the allowed iterations from a distant guess
        let tau = DVector::from_vec(vec![1.0, -1.0]) / 2f64.sqrt();
        let far = DVector::from_vec(vec![50.0]);
        assert_eq!(
            correct(&hm, &far, 0.5, &tau, &cfg).unwrap_err(),
            CorrectorFailure::NotConverged
        );
        let nan = DVector::from_vec(vec![f64::NAN]);
        assert!(matches!(
            correct(&hm, &nan, 0.5, &tau, &cfg),
            Err(CorrectorFailure::Evaluation(_))
        ));
    }

    #[test]
    fn linear_trace_reaches_target() {
        let hm = linear_map(vec![0.5, -0.5], vec![2.0, 1.0]);
        let r = trace(&hm, &TraceConfig::default()).unwrap();
        assert!(r.converged(), "{:?}", r.message);
        assert_eq!(r.t, 0.0);
        assert!((r.x[0] - 2.0).abs() < 1e-12 && (r.x[1] - 1.0).abs() < 1e-12);
        assert!(r.final_residual <= 1e-12);
        assert_eq!(r.path[0].u, vec![0.5, -0.5]);
        assert_eq!(r.path[0].t, 1.0);
        assert_eq!(r.path[0].residual, 0.0);
        assert!(r.path.iter().all(|p| p.residual <= 1e-10));
    }

    #[test]
    fn config_validation() {
        let bad = TraceConfig {
            h0: 1.0,
            ..TraceConfig::default()
        };
        assert!(bad.validate().is_err());
        let bad = TraceConfig {
            shrink: 1.2,
            ..TraceConfig::default()
        };
        assert!(bad.validate().is_err());
        assert!(TraceConfig::default().validate().is_ok());
    }

    #[test]
    fn path_csv_schema() {
        let hm = linear_map(vec![0.0], vec![1.0]);
        let r = trace(&hm, &TraceConfig::default()).unwrap();
        let mut buf = Vec::new();
        r.write_path_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let mut lines = text.lines();
        assert_eq!(
            lines.next().unwrap(),
            "step,t,u_norm,residual,step_len,corrector_iters,sample_evals"
        );
        assert_eq!(lines.count(), r.path.len());
    }
}
