//! Stochastic systems and the gradually reinforced sample-average map.
//!
//! For a partition `q_1 < ... < q_L = N` and a node schedule, the blended
//! map on segment `l` (`t_l <= t <= t_{l-1}`) is
//!
//! ```text
//! d(x, t) = (1 - θ_l(t)) f^{l-1}(x) + θ_l(t) f^l(x),   f^l = mean of f(x, ξ_i), i < q_l
//! ```
//!
//! with `f^0 = 0`. Because `f^{l-1}` averages a prefix of the samples used by
//! `f^l`, both are produced by one pass over the first `q_l` samples. Sums
//! are accumulated in sample order, so results are bit-reproducible.

use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use serde::Serialize;

use crate::error::{Error, ModelError, Result};
use crate::sampling::{Partition, SampleSet};
use crate::schedule::{theta_on, theta_prime_on, NodeSchedule};

/// A residual `f(x, ξ)` with its `x`-Jacobian.
pub trait StochasticModel: Send + Sync {
    /// State dimension `n`.
    fn dim(&self) -> usize;

    /// Sample dimension `m`.
    fn sample_dim(&self) -> usize {
        1
    }

    fn residual(
        &self,
        x: &[f64],
        xi: &[f64],
        out: &mut [f64],
    ) -> std::result::Result<(), ModelError>;

    /// `∂f/∂x` into `out` (`n × n`). The default uses central differences;
    /// models with analytic Jacobians override it together with
    /// [`has_analytic_jacobian`](Self::has_analytic_jacobian).
    fn jacobian(
        &self,
        x: &[f64],
        xi: &[f64],
        out: &mut DMatrix<f64>,
    ) -> std::result::Result<(), ModelError> {
        finite_difference_jacobian(self, x, xi, out)
    }

    /// Residual and Jacobian together; models sharing work between the two
    /// override this.
    fn residual_and_jacobian(
        &self,
        x: &[f64],
        xi: &[f64],
        f: &mut [f64],
        jac: &mut DMatrix<f64>,
    ) -> std::result::Result<(), ModelError> {
        self.residual(x, xi, f)?;
        self.jacobian(x, xi, jac)
    }

    fn has_analytic_jacobian(&self) -> bool {
        false
    }
}

/// Central-difference Jacobian of a model's residual.
pub fn finite_difference_jacobian<M: StochasticModel + ?Sized>(
    model: &M,
    x: &[f64],
    xi: &[f64],
    out: &mut DMatrix<f64>,
) -> std::result::Result<(), ModelError> {
    let n = model.dim();
    let mut xp = x.to_vec();
    let mut fp = vec![0.0; n];
    let mut fm = vec![0.0; n];
    for j in 0..n {
        let h = 6e-6 * x[j].abs().max(1.0);
        xp[j] = x[j] + h;
        model.residual(&xp, xi, &mut fp)?;
        xp[j] = x[j] - h;
        model.residual(&xp, xi, &mut fm)?;
        xp[j] = x[j];
        for i in 0..n {
            out[(i, j)] = (fp[i] - fm[i]) / (2.0 * h);
        }
    }
    Ok(())
}

/// Axis-aligned box `[lo, hi]`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BoxDomain {
    pub lo: Vec<f64>,
    pub hi: Vec<f64>,
}

impl BoxDomain {
    pub fn new(lo: Vec<f64>, hi: Vec<f64>) -> Result<Self> {
        if lo.len() != hi.len() || lo.is_empty() {
            return Err(Error::Dimension("box bounds differ in length".into()));
        }
        for (index, (&l, &h)) in lo.iter().zip(&hi).enumerate() {
            if !(l < h) {
                return Err(Error::InvalidBox {
                    index,
                    lo: l,
                    hi: h,
                });
            }
        }
        Ok(BoxDomain { lo, hi })
    }

    pub fn cube(lo: f64, hi: f64, n: usize) -> Result<Self> {
        Self::new(vec![lo; n], vec![hi; n])
    }

    pub fn dim(&self) -> usize {
        self.lo.len()
    }

    pub fn contains_interior(&self, x: &[f64]) -> bool {
        x.len() == self.dim()
            && x.iter()
                .zip(self.lo.iter().zip(&self.hi))
                .all(|(&v, (&l, &h))| v > l && v < h)
    }

    pub fn contains(&self, x: &[f64]) -> bool {
        x.len() == self.dim()
            && x.iter()
                .zip(self.lo.iter().zip(&self.hi))
                .all(|(&v, (&l, &h))| v >= l && v <= h)
    }

    /// The box scaled by `factor` about its centre.
    pub fn expanded(&self, factor: f64) -> BoxDomain {
        let (lo, hi) = self
            .lo
            .iter()
            .zip(&self.hi)
            .map(|(&l, &h)| {
                let c = 0.5 * (l + h);
                let r = 0.5 * (h - l) * factor;
                (c - r, c + r)
            })
            .unzip();
        BoxDomain { lo, hi }
    }
}

/// A problem: residual model, compact domain box and interior reference
/// point `x⁰`.
#[derive(Clone)]
pub struct StochasticSystem {
    model: Arc<dyn StochasticModel>,
    domain: BoxDomain,
    x0: DVector<f64>,
}

impl std::fmt::Debug for StochasticSystem {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("StochasticSystem")
            .field("n", &self.dim())
            .field("m", &self.sample_dim())
            .field("domain", &self.domain)
            .field("x0", &self.x0.as_slice())
            .finish()
    }
}

impl StochasticSystem {
    pub fn new(
        model: Arc<dyn StochasticModel>,
        domain: BoxDomain,
        x0: DVector<f64>,
    ) -> Result<Self> {
        let n = model.dim();
        if domain.dim() != n || x0.len() != n {
            return Err(Error::Dimension(format!(
                "model has n = {n}, box {} and x0 {}",
                domain.dim(),
                x0.len()
            )));
        }
        if !domain.contains_interior(x0.as_slice()) {
            return Err(Error::ReferenceNotInterior);
        }
        Ok(StochasticSystem { model, domain, x0 })
    }

    pub fn dim(&self) -> usize {
        self.model.dim()
    }

    pub fn sample_dim(&self) -> usize {
        self.model.sample_dim()
    }

    pub fn model(&self) -> &dyn StochasticModel {
        self.model.as_ref()
    }

    pub fn domain(&self) -> &BoxDomain {
        &self.domain
    }

    pub fn x0(&self) -> &DVector<f64> {
        &self.x0
    }
}

/// Everything one blend pass produces at `(x, t)`.
#[derive(Debug, Clone)]
pub struct BlendEval {
    pub segment: usize,
    pub theta: f64,
    pub theta_prime: f64,
    /// `d(x, t)`.
    pub value: DVector<f64>,
    /// `∂d/∂t`.
    pub deriv_t: DVector<f64>,
    /// `∂d/∂x`, when requested.
    pub jac_x: Option<DMatrix<f64>>,
}

/// The gradually reinforced sample-average map `d(x, t)`.
#[derive(Debug)]
pub struct BlendedMap {
    system: StochasticSystem,
    samples: Arc<SampleSet>,
    partition: Partition,
    schedule: NodeSchedule,
    evals: AtomicU64,
}

impl Clone for BlendedMap {
    fn clone(&self) -> Self {
        BlendedMap {
            system: self.system.clone(),
            samples: self.samples.clone(),
            partition: self.partition.clone(),
            schedule: self.schedule.clone(),
            evals: AtomicU64::new(self.sample_evals()),
        }
    }
}

impl BlendedMap {
    pub fn new(
        system: StochasticSystem,
        samples: Arc<SampleSet>,
        partition: Partition,
        schedule: NodeSchedule,
    ) -> Result<Self> {
        if partition.groups() != schedule.segments() {
            return Err(Error::InvalidPartition(format!(
                "partition has {} groups but schedule has {} segments",
                partition.groups(),
                schedule.segments()
            )));
        }
        if partition.total() != samples.len() {
            return Err(Error::InvalidPartition(format!(
                "partition ends at {} but there are {} samples",
                partition.total(),
                samples.len()
            )));
        }
        if samples.dim() != system.sample_dim() {
            return Err(Error::Dimension(format!(
                "samples have dimension {}, model expects {}",
                samples.dim(),
                system.sample_dim()
            )));
        }
        Ok(BlendedMap {
            system,
            samples,
            partition,
            schedule,
            evals: AtomicU64::new(0),
        })
    }

    pub fn system(&self) -> &StochasticSystem {
        &self.system
    }

    pub fn samples(&self) -> &SampleSet {
        &self.samples
    }

    pub fn partition(&self) -> &Partition {
        &self.partition
    }

    pub fn schedule(&self) -> &NodeSchedule {
        &self.schedule
    }

    pub fn dim(&self) -> usize {
        self.system.dim()
    }

    /// Number of single-sample residual evaluations so far.
    pub fn sample_evals(&self) -> u64 {
        self.evals.load(Ordering::Relaxed)
    }

    pub fn reset_sample_evals(&self) {
        self.evals.store(0, Ordering::Relaxed);
    }

    fn charge(&self, count: usize) {
        self.evals.fetch_add(count as u64, Ordering::Relaxed);
    }

    fn check_x(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.dim() {
            return Err(Error::Dimension(format!(
                "x has length {}, expected {}",
                x.len(),
                self.dim()
            )));
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFiniteResidual { sample: 0 });
        }
        Ok(())
    }

    /// Sums of `f` (and optionally `∂f/∂x`) over the first `q_l` samples,
    /// with a snapshot of the sums after the first `q_{l-1}`.
    fn prefix_sums(&self, l: usize, x: &[f64], with_jac: bool) -> Result<PrefixSums> {
        let n = self.dim();
        let q_prev = self.partition.count(l - 1);
        let q = self.partition.count(l);
        let model = self.system.model();

        let mut sum = DVector::zeros(n);
        let mut sum_prev = DVector::zeros(n);
        let mut jsum = if with_jac {
            Some(DMatrix::zeros(n, n))
        } else {
            None
        };
        let mut jsum_prev = jsum.clone();
        let mut f = vec![0.0; n];
        let mut jac = DMatrix::zeros(n, n);

        for i in 0..q {
            let xi = self.samples.sample(i);
            let outcome = match jsum.as_mut() {
                Some(js) => model
                    .residual_and_jacobian(x, xi, &mut f, &mut jac)
                    .map(|_| {
                        *js += &jac;
                    }),
                None => model.residual(x, xi, &mut f),
            };
            if let Err(source) = outcome {
                self.charge(i + 1);
                return Err(Error::Model { sample: i, source });
            }
            if f.iter().any(|v| !v.is_finite()) || (with_jac && jac.iter().any(|v| !v.is_finite()))
            {
                self.charge(i + 1);
                return Err(Error::NonFiniteResidual { sample: i });
            }
            for (s, v) in sum.iter_mut().zip(&f) {
                *s += v;
            }
            if i + 1 == q_prev {
                sum_prev.copy_from(&sum);
                if let (Some(jp), Some(js)) = (jsum_prev.as_mut(), jsum.as_ref()) {
                    jp.copy_from(js);
                }
            }
        }
        self.charge(q);
        Ok(PrefixSums {
            q_prev,
            q,
            sum_prev,
            sum,
            jsum_prev,
            jsum,
        })
    }

    /// `f^l(x)`; `l = 0` returns zero without touching any sample.
    pub fn sample_average(&self, l: usize, x: &[f64]) -> Result<DVector<f64>> {
        self.check_x(x)?;
        if l > self.partition.groups() {
            return Err(Error::GroupOutOfRange {
                index: l,
                groups: self.partition.groups(),
            });
        }
        if l == 0 {
            return Ok(DVector::zeros(self.dim()));
        }
        let sums = self.prefix_sums(l, x, false)?;
        Ok(sums.sum / sums.q as f64)
    }

    /// `∂f^l/∂x`.
    pub fn sample_average_jacobian(&self, l: usize, x: &[f64]) -> Result<DMatrix<f64>> {
        self.check_x(x)?;
        if l > self.partition.groups() {
            return Err(Error::GroupOutOfRange {
                index: l,
                groups: self.partition.groups(),
            });
        }
        if l == 0 {
            return Ok(DMatrix::zeros(self.dim(), self.dim()));
        }
        let sums = self.prefix_sums(l, x, true)?;
        Ok(sums.jsum.expect("requested") / sums.q as f64)
    }

    /// One pass producing `d`, `∂d/∂t` and optionally `∂d/∂x` at `(x, t)`.
    /// Costs `q_l` sample evaluations for the segment `l` containing `t`.
    pub fn evaluate(&self, x: &[f64], t: f64, with_jac: bool) -> Result<BlendEval> {
        self.check_x(x)?;
        let l = self.schedule.segment_of(t)?;
        let (lo, hi) = (self.schedule.node(l), self.schedule.node(l - 1));
        let theta = theta_on(lo, hi, t);
        let theta_prime = theta_prime_on(lo, hi, t);

        let sums = self.prefix_sums(l, x, with_jac)?;
        let f_hi = &sums.sum / sums.q as f64;
        let f_lo = if sums.q_prev == 0 {
            DVector::zeros(self.dim())
        } else {
            &sums.sum_prev / sums.q_prev as f64
        };
        let value = blend_vec(theta, &f_lo, &f_hi);
        let deriv_t = (&f_hi - &f_lo) * theta_prime;
        let jac_x = match (sums.jsum, sums.jsum_prev) {
            (Some(js), Some(jp)) => {
                let j_hi = js / sums.q as f64;
                if sums.q_prev == 0 {
                    Some(j_hi * theta)
                } else {
                    let j_lo = jp / sums.q_prev as f64;
                    Some(blend_mat(theta, &j_lo, &j_hi))
                }
            }
            _ => None,
        };
        Ok(BlendEval {
            segment: l,
            theta,
            theta_prime,
            value,
            deriv_t,
            jac_x,
        })
    }

    /// `d(x, t)`.
    pub fn blend(&self, x: &[f64], t: f64) -> Result<DVector<f64>> {
        Ok(self.evaluate(x, t, false)?.value)
    }

    /// `∂d/∂x (x, t)`.
    pub fn blend_jac_x(&self, x: &[f64], t: f64) -> Result<DMatrix<f64>> {
        Ok(self.evaluate(x, t, true)?.jac_x.expect("requested"))
    }

    /// `∂d/∂t (x, t) = θ'_l(t) (f^l(x) - f^{l-1}(x))`.
    pub fn blend_deriv_t(&self, x: &[f64], t: f64) -> Result<DVector<f64>> {
        Ok(self.evaluate(x, t, false)?.deriv_t)
    }

    /// Minimum of `(x - x⁰)ᵀ f(x, ξ_i)` over boundary points of a regular
    /// lattice on the domain box (`grid_density` points per axis) and over
    /// up to `sample_cap` evenly strided samples. Diagnostic only; does not
    /// touch the evaluation counter.
    pub fn check_coercivity(
        &self,
        grid_density: usize,
        sample_cap: Option<usize>,
    ) -> CoercivityReport {
        let n = self.dim();
        let density = grid_density.max(2);
        let domain = self.system.domain();
        let x0 = self.system.x0();
        let model = self.system.model();

        let total = self.samples.len();
        let cap = sample_cap.unwrap_or(total).clamp(1, total);
        let stride = total / cap;
        let sample_ids: Vec<usize> = (0..cap).map(|k| k * stride).collect();

        let mut report = CoercivityReport {
            min_inner_product: f64::INFINITY,
            argmin_x: vec![],
            argmin_sample: 0,
            points_checked: 0,
            samples_checked: sample_ids.len(),
            evaluation_failures: 0,
            satisfied: false,
        };

        let mut idx = vec![0usize; n];
        let mut x = vec![0.0; n];
        let mut f = vec![0.0; n];
        loop {
            let on_boundary = idx.iter().any(|&k| k == 0 || k == density - 1);
            if on_boundary {
                for (j, &k) in idx.iter().enumerate() {
                    x[j] = if k == density - 1 {
                        domain.hi[j]
                    } else {
                        domain.lo[j]
                            + (domain.hi[j] - domain.lo[j]) * k as f64 / (density - 1) as f64
                    };
                }
                report.points_checked += 1;
                for &s in &sample_ids {
                    match model.residual(&x, self.samples.sample(s), &mut f) {
                        Ok(()) if f.iter().all(|v| v.is_finite()) => {
                            let ip: f64 = (0..n).map(|j| (x[j] - x0[j]) * f[j]).sum();
                            if ip < report.min_inner_product {
                                report.min_inner_product = ip;
                                report.argmin_x = x.clone();
                                report.argmin_sample = s;
                            }
                        }
                        _ => report.evaluation_failures += 1,
                    }
                }
            }
            // odometer step
            let mut j = 0;
            while j < n {
                idx[j] += 1;
                if idx[j] < density {
                    break;
                }
                idx[j] = 0;
                j += 1;
            }
            if j == n {
                break;
            }
        }
        report.satisfied = report.min_inner_product > 0.0;
        report
    }
}

struct PrefixSums {
    q_prev: usize,
    q: usize,
    sum_prev: DVector<f64>,
    sum: DVector<f64>,
    jsum_prev: Option<DMatrix<f64>>,
    jsum: Option<DMatrix<f64>>,
}

fn blend_vec(theta: f64, lo: &DVector<f64>, hi: &DVector<f64>) -> DVector<f64> {
    if theta == 1.0 {
        hi.clone()
    } else if theta == 0.0 {
        lo.clone()
    } else {
        lo * (1.0 - theta) + hi * theta
    }
}

fn blend_mat(theta: f64, lo: &DMatrix<f64>, hi: &DMatrix<f64>) -> DMatrix<f64> {
    if theta == 1.0 {
        hi.clone()
    } else if theta == 0.0 {
        lo.clone()
    } else {
        lo * (1.0 - theta) + hi * theta
    }
}

/// Outcome of [`BlendedMap::check_coercivity`].
#[derive(Debug, Clone, Serialize)]
pub struct CoercivityReport {
    pub min_inner_product: f64,
    pub argmin_x: Vec<f64>,
    pub argmin_sample: usize,
    pub points_checked: usize,
    pub samples_checked: usize,
    pub evaluation_failures: usize,
    /// `min_inner_product > 0` on everything tested.
    pub satisfied: bool,
}
