//! Benchmark problems: a three-good CES exchange market with firm
//! constraints, a coupled sine system and a box-constrained variational
//! inequality, with analytic Jacobians and expectation-based reference
//! solvers.

use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, ModelError, Result};
use crate::homotopy::{HomotopyMap, KktConstraints};
use crate::saa::{BlendedMap, BoxDomain, StochasticModel, StochasticSystem};
use crate::sampling::{Distribution, Partition, SampleSet};
use crate::schedule::NodeSchedule;

/// Market samples above `1 - XI_CLIP` are evaluated at `1 - XI_CLIP`.
pub const XI_CLIP: f64 = 1e-6;

/// Absolute tolerance of the quadrature behind the expectation oracles.
pub const QUADRATURE_TOL: f64 = 1e-13;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProblemKind {
    Market,
    SinSystem,
    Svi,
}

impl fmt::Display for ProblemKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ProblemKind::Market => "market",
            ProblemKind::SinSystem => "sin",
            ProblemKind::Svi => "svi",
        })
    }
}

impl FromStr for ProblemKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "market" => Ok(ProblemKind::Market),
            "sin" | "sin_system" => Ok(ProblemKind::SinSystem),
            "svi" => Ok(ProblemKind::Svi),
            other => Err(Error::Config(format!("unknown problem '{other}'"))),
        }
    }
}

/// CES excess demand `f(p, ξ) = (eᵀp) (P_i / g_i)_i` with
/// `P_i = p_i^{1/(ξ-1)}` and `g_i = Σ_j c_ij^{1/(ξ-1)} P_j^ξ`, where
/// `c_ij = w_i / w_j` are ratios of the utility weights `w = (2, 3, 1)`.
///
/// Evaluated in log space: every term is an exponential of
/// `e ln c_ij + ξ e ln p_j` with `e = 1/(ξ-1)`, which grows without bound
/// as `ξ → 1`.
#[derive(Debug, Clone)]
pub struct MarketModel {
    log_ratio: [[f64; 3]; 3],
}

impl Default for MarketModel {
    fn default() -> Self {
        let w = [2.0f64, 3.0, 1.0];
        let mut log_ratio = [[0.0; 3]; 3];
        for (i, row) in log_ratio.iter_mut().enumerate() {
            for (j, v) in row.iter_mut().enumerate() {
                *v = (w[i] / w[j]).ln();
            }
        }
        MarketModel { log_ratio }
    }
}

impl MarketModel {
    fn eval(
        &self,
        p: &[f64],
        xi: f64,
        f: &mut [f64],
        jac: Option<&mut DMatrix<f64>>,
    ) -> std::result::Result<(), ModelError> {
        for (index, &value) in p.iter().enumerate() {
            if !(value > 0.0) {
                return Err(ModelError::NonPositivePrice { index, value });
            }
        }
        let xi = if xi > 1.0 - XI_CLIP {
            log::debug!("market sample {xi} clipped to {}", 1.0 - XI_CLIP);
            1.0 - XI_CLIP
        } else {
            xi
        };
        let e = 1.0 / (xi - 1.0);
        let lp = [p[0].ln(), p[1].ln(), p[2].ln()];
        let total = p[0] + p[1] + p[2];
        let mut weights = [[0.0; 3]; 3];
        for i in 0..3 {
            let a = [
                e * self.log_ratio[i][0] + xi * e * lp[0],
                e * self.log_ratio[i][1] + xi * e * lp[1],
                e * self.log_ratio[i][2] + xi * e * lp[2],
            ];
            let m = a[0].max(a[1]).max(a[2]);
            let sum: f64 = a.iter().map(|v| (v - m).exp()).sum();
            let lse = m + sum.ln();
            for j in 0..3 {
                weights[i][j] = (a[j] - lse).exp();
            }
            f[i] = total * (e * lp[i] - lse).exp();
            if !f[i].is_finite() {
                return Err(ModelError::NonFinite);
            }
        }
        if let Some(jac) = jac {
            for i in 0..3 {
                for k in 0..3 {
                    let own = if i == k { 1.0 } else { 0.0 };
                    jac[(i, k)] = f[i] / total + f[i] * e * (own - xi * weights[i][k]) / p[k];
                }
            }
        }
        Ok(())
    }
}

impl StochasticModel for MarketModel {
    fn dim(&self) -> usize {
        3
    }

    fn residual(
        &self,
        x: &[f64],
        xi: &[f64],
        out: &mut [f64],
    ) -> std::result::Result<(), ModelError> {
        self.eval(x, xi[0], out, None)
    }

    fn jacobian(
        &self,
        x: &[f64],
        xi: &[f64],
        out: &mut DMatrix<f64>,
    ) -> std::result::Result<(), ModelError> {
        let mut f = [0.0; 3];
        self.eval(x, xi[0], &mut f, Some(out))
    }

    fn residual_and_jacobian(
        &self,
        x: &[f64],
        xi: &[f64],
        f: &mut [f64],
        jac: &mut DMatrix<f64>,
    ) -> std::result::Result<(), ModelError> {
        self.eval(x, xi[0], f, Some(jac))
    }

    fn has_analytic_jacobian(&self) -> bool {
        true
    }
}

/// `f_i(x, ξ) = x_i - 5 sin(i Σx + ξ)`, `i = 1..n`.
#[derive(Debug, Clone, Copy)]
pub struct SinModel {
    pub n: usize,
}

impl StochasticModel for SinModel {
    fn dim(&self) -> usize {
        self.n
    }

    fn residual(
        &self,
        x: &[f64],
        xi: &[f64],
        out: &mut [f64],
    ) -> std::result::Result<(), ModelError> {
        let s: f64 = x.iter().sum();
        for i in 0..self.n {
            out[i] = x[i] - 5.0 * ((i + 1) as f64 * s + xi[0]).sin();
        }
        Ok(())
    }

    fn jacobian(
        &self,
        x: &[f64],
        xi: &[f64],
        out: &mut DMatrix<f64>,
    ) -> std::result::Result<(), ModelError> {
        let s: f64 = x.iter().sum();
        for i in 0..self.n {
            let k = (i + 1) as f64;
            let c = -5.0 * k * (k * s + xi[0]).cos();
            for j in 0..self.n {
                out[(i, j)] = c;
            }
            out[(i, i)] += 1.0;
        }
        Ok(())
    }

    fn residual_and_jacobian(
        &self,
        x: &[f64],
        xi: &[f64],
        f: &mut [f64],
        jac: &mut DMatrix<f64>,
    ) -> std::result::Result<(), ModelError> {
        let s: f64 = x.iter().sum();
        for i in 0..self.n {
            let k = (i + 1) as f64;
            let (sin, cos) = (k * s + xi[0]).sin_cos();
            f[i] = x[i] - 5.0 * sin;
            let c = -5.0 * k * cos;
            for j in 0..self.n {
                jac[(i, j)] = c;
            }
            jac[(i, i)] += 1.0;
        }
        Ok(())
    }

    fn has_analytic_jacobian(&self) -> bool {
        true
    }
}

/// `f_i(x, ξ) = x_i - exp(cos(i Σx + ξ))`, `i = 1..n`.
#[derive(Debug, Clone, Copy)]
pub struct SviModel {
    pub n: usize,
}

impl StochasticModel for SviModel {
    fn dim(&self) -> usize {
        self.n
    }

    fn residual(
        &self,
        x: &[f64],
        xi: &[f64],
        out: &mut [f64],
    ) -> std::result::Result<(), ModelError> {
        let s: f64 = x.iter().sum();
        for i in 0..self.n {
            out[i] = x[i] - ((i + 1) as f64 * s + xi[0]).cos().exp();
        }
        Ok(())
    }

    fn jacobian(
        &self,
        x: &[f64],
        xi: &[f64],
        out: &mut DMatrix<f64>,
    ) -> std::result::Result<(), ModelError> {
        let mut f = vec![0.0; self.n];
        self.residual_and_jacobian(x, xi, &mut f, out)
    }

    fn residual_and_jacobian(
        &self,
        x: &[f64],
        xi: &[f64],
        f: &mut [f64],
        jac: &mut DMatrix<f64>,
    ) -> std::result::Result<(), ModelError> {
        let s: f64 = x.iter().sum();
        for i in 0..self.n {
            let k = (i + 1) as f64;
            let (sin, cos) = (k * s + xi[0]).sin_cos();
            let ex = cos.exp();
            f[i] = x[i] - ex;
            let c = k * ex * sin;
            for j in 0..self.n {
                jac[(i, j)] = c;
            }
            jac[(i, i)] += 1.0;
        }
        Ok(())
    }

    fn has_analytic_jacobian(&self) -> bool {
        true
    }
}

/// Firm technology rows of the market problem.
pub fn market_technology() -> DMatrix<f64> {
    DMatrix::from_row_slice(2, 3, &[-1.5, 1.0, 1.0, -1.0, -77.0 / 27.0, 11.0 / 9.0])
}

/// `B = [A; -I; eᵀ]`, `b = (0, 0, 0, 0, 0, 1)`.
pub fn market_constraints(kappa0: u32) -> Result<KktConstraints> {
    let a = market_technology();
    let mut b = DMatrix::zeros(6, 3);
    b.view_mut((0, 0), (2, 3)).copy_from(&a);
    for i in 0..3 {
        b[(2 + i, i)] = -1.0;
        b[(5, i)] = 1.0;
    }
    let mut rhs = DVector::zeros(6);
    rhs[5] = 1.0;
    KktConstraints::new(b, rhs, kappa0)
}

/// `[I; -I] x <= (bound e; bound e)`.
pub fn box_constraints(n: usize, bound: f64, kappa0: u32) -> Result<KktConstraints> {
    let mut b = DMatrix::zeros(2 * n, n);
    for i in 0..n {
        b[(i, i)] = 1.0;
        b[(n + i, i)] = -1.0;
    }
    KktConstraints::new(b, DVector::from_element(2 * n, bound), kappa0)
}

/// A benchmark with everything needed to build its homotopy.
#[derive(Clone)]
pub struct ProblemInstance {
    pub kind: ProblemKind,
    pub model: Arc<dyn StochasticModel>,
    pub domain: BoxDomain,
    pub x0: DVector<f64>,
    pub distribution: Distribution,
    pub constraints: Option<KktConstraints>,
}

impl fmt::Debug for ProblemInstance {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("ProblemInstance")
            .field("kind", &self.kind)
            .field("n", &self.dim())
            .field("x0", &self.x0.as_slice())
            .finish()
    }
}

impl ProblemInstance {
    /// Three goods, two firms, prices on the simplex.
    pub fn market(kappa0: u32) -> Result<Self> {
        Ok(ProblemInstance {
            kind: ProblemKind::Market,
            model: Arc::new(MarketModel::default()),
            domain: BoxDomain::cube(0.0, 1.0, 3)?,
            x0: DVector::from_vec(vec![0.3, 0.2, 0.1]),
            distribution: Distribution::uniform_cube(-1.0, 1.0, 1),
            constraints: Some(market_constraints(kappa0)?),
        })
    }

    pub fn sin_system(n: usize) -> Result<Self> {
        if n == 0 {
            return Err(Error::Config("n must be positive".into()));
        }
        Ok(ProblemInstance {
            kind: ProblemKind::SinSystem,
            model: Arc::new(SinModel { n }),
            domain: BoxDomain::cube(-10.0, 10.0, n)?,
            x0: DVector::zeros(n),
            distribution: Distribution::uniform_cube(-1.0, 1.0, 1),
            constraints: None,
        })
    }

    /// The variational inequality on `[-10, 10]^n`.
    pub fn svi(n: usize, kappa0: u32) -> Result<Self> {
        if n == 0 {
            return Err(Error::Config("n must be positive".into()));
        }
        Ok(ProblemInstance {
            kind: ProblemKind::Svi,
            model: Arc::new(SviModel { n }),
            domain: BoxDomain::cube(-10.0, 10.0, n)?,
            x0: DVector::zeros(n),
            distribution: Distribution::uniform_cube(-1.0, 1.0, 1),
            constraints: Some(box_constraints(n, 10.0, kappa0)?),
        })
    }

    pub fn build(kind: ProblemKind, n: usize, kappa0: u32) -> Result<Self> {
        match kind {
            ProblemKind::Market if n != 3 => Err(Error::Config(format!(
                "the market has 3 goods, got n = {n}"
            ))),
            ProblemKind::Market => Self::market(kappa0),
            ProblemKind::SinSystem => Self::sin_system(n),
            ProblemKind::Svi => Self::svi(n, kappa0),
        }
    }

    pub fn dim(&self) -> usize {
        self.model.dim()
    }

    pub fn draw_samples(&self, count: usize, seed: u64) -> Result<SampleSet> {
        SampleSet::draw(&self.distribution, count, seed)
    }

    pub fn system(&self) -> Result<StochasticSystem> {
        StochasticSystem::new(self.model.clone(), self.domain.clone(), self.x0.clone())
    }

    pub fn homotopy(
        &self,
        samples: Arc<SampleSet>,
        partition: Partition,
        schedule: NodeSchedule,
    ) -> Result<HomotopyMap> {
        let bm = BlendedMap::new(self.system()?, samples, partition, schedule)?;
        match &self.constraints {
            Some(c) => HomotopyMap::smoothed_kkt(bm, c.clone()),
            None => Ok(HomotopyMap::plain(bm)),
        }
    }
}

/// `E f(x, ξ)` for the sine system with `ξ ~ U[-1, 1]`:
/// `x_i - 5 sin(1) sin(i Σx)`.
pub fn sin_expected(x: &[f64]) -> DVector<f64> {
    let s: f64 = x.iter().sum();
    let c = 5.0 * 1f64.sin();
    DVector::from_iterator(
        x.len(),
        x.iter()
            .enumerate()
            .map(|(i, &xi)| xi - c * ((i + 1) as f64 * s).sin()),
    )
}

pub fn sin_expected_jacobian(x: &[f64]) -> DMatrix<f64> {
    let n = x.len();
    let s: f64 = x.iter().sum();
    let c = 5.0 * 1f64.sin();
    DMatrix::from_fn(n, n, |i, j| {
        let k = (i + 1) as f64;
        let own = if i == j { 1.0 } else { 0.0 };
        own - c * k * (k * s).cos()
    })
}

fn uniform_mean<F: Fn(f64) -> f64>(g: F) -> f64 {
    0.5 * quadrature::double_exponential::integrate(g, -1.0, 1.0, QUADRATURE_TOL).integral
}

/// `E f(x, ξ)` for the variational inequality map, by quadrature.
pub fn svi_expected(x: &[f64]) -> DVector<f64> {
    let s: f64 = x.iter().sum();
    DVector::from_iterator(
        x.len(),
        x.iter().enumerate().map(|(i, &xi)| {
            let a = (i + 1) as f64 * s;
            xi - uniform_mean(|z| (a + z).cos().exp())
        }),
    )
}

pub fn svi_expected_jacobian(x: &[f64]) -> DMatrix<f64> {
    let n = x.len();
    let s: f64 = x.iter().sum();
    let rows: Vec<f64> = (0..n)
        .map(|i| {
            let k = (i + 1) as f64;
            k * uniform_mean(|z| (k * s + z).cos().exp() * (k * s + z).sin())
        })
        .collect();
    DMatrix::from_fn(n, n, |i, j| if i == j { 1.0 + rows[i] } else { rows[i] })
}

/// `E f(p, ξ)` for the market, by quadrature.
pub fn market_expected(p: &[f64]) -> Result<DVector<f64>> {
    let model = MarketModel::default();
    let mut out = DVector::zeros(3);
    let failure = std::cell::RefCell::new(None);
    for i in 0..3 {
        out[i] = uniform_mean(|z| {
            let mut f = [0.0; 3];
            match model.eval(p, z, &mut f, None) {
                Ok(()) => f[i],
                Err(e) => {
                    failure.borrow_mut().get_or_insert(e);
                    f64::NAN
                }
            }
        });
    }
    if let Some(source) = failure.into_inner() {
        return Err(Error::Model { sample: 0, source });
    }
    Ok(out)
}

/// Damped Newton on `E f(x) = 0` from each start in turn; returns the
/// first root found to `tol` in the max norm.
pub fn oracle_solve(kind: ProblemKind, starts: &[DVector<f64>], tol: f64) -> Result<DVector<f64>> {
    let (value, jac): (fn(&[f64]) -> DVector<f64>, fn(&[f64]) -> DMatrix<f64>) =
        match kind {
            ProblemKind::SinSystem => (sin_expected, sin_expected_jacobian),
            ProblemKind::Svi => (svi_expected, svi_expected_jacobian),
            ProblemKind::Market => return Err(Error::Oracle(
                "the market has no independent equilibrium solver; use market_equilibrium_check"
                    .into(),
            )),
        };
    let mut last = String::from("no starting points");
    for start in starts {
        match damped_newton(value, jac, start.clone(), tol, 100) {
            Ok(x) => return Ok(x),
            Err(msg) => last = msg,
        }
    }
    Err(Error::Oracle(last))
}

fn damped_newton(
    value: fn(&[f64]) -> DVector<f64>,
    jac: fn(&[f64]) -> DMatrix<f64>,
    mut x: DVector<f64>,
    tol: f64,
    max_iters: usize,
) -> std::result::Result<DVector<f64>, String> {
    let mut f = value(x.as_slice());
    for _ in 0..max_iters {
        let merit = f.norm_squared();
        if f.amax() <= tol {
            return Ok(x);
        }
        let step = jac(x.as_slice())
            .lu()
            .solve(&(-&f))
            .ok_or_else(|| "singular Jacobian".to_string())?;
        let mut lambda = 1.0;
        loop {
            let trial = &x + &step * lambda;
            let ft = value(trial.as_slice());
            if ft.norm_squared() <= (1.0 - 1e-4 * lambda) * merit || lambda < 1e-10 {
                x = trial;
                f = ft;
                break;
            }
            lambda *= 0.5;
        }
        if !f.iter().all(|v| v.is_finite()) {
            return Err("non-finite residual".into());
        }
    }
    if f.amax() <= tol {
        Ok(x)
    } else {
        Err(format!(
            "residual {:e} after {max_iters} iterations",
            f.amax()
        ))
    }
}

/// KKT check of a market price against the expected excess demand.
#[derive(Debug, Clone)]
pub struct MarketCheck {
    pub expected_demand: DVector<f64>,
    /// Constraint rows with `|B_i p - b_i| <= active_tol`.
    pub active: Vec<usize>,
    /// Least-squares multipliers of the active rows; zero elsewhere.
    pub multipliers: DVector<f64>,
    /// `‖E f(p) - Bᵀz‖∞`.
    pub stationarity: f64,
    /// `max_i (B p - b)_i`, positive when infeasible.
    pub max_violation: f64,
}

impl MarketCheck {
    pub fn is_equilibrium(&self, tol: f64) -> bool {
        self.stationarity <= tol
            && self.max_violation <= tol
            && self.multipliers.iter().all(|&z| z >= -tol)
    }
}

/// Stationarity `E f(p) = Bᵀz`, `z >= 0` on the constraints active at `p`.
pub fn market_equilibrium_check(p: &[f64], active_tol: f64) -> Result<MarketCheck> {
    let c = market_constraints(2)?;
    let pv = DVector::from_column_slice(p);
    let slack = &c.rhs - &c.matrix * &pv;
    let active: Vec<usize> = (0..c.count())
        .filter(|&i| slack[i].abs() <= active_tol)
        .collect();
    let demand = market_expected(p)?;
    let mut multipliers = DVector::zeros(c.count());
    let fitted = if active.is_empty() {
        DVector::zeros(3)
    } else {
        let rows = c.matrix.select_rows(active.iter());
        let bt = rows.transpose();
        let z = bt
            .clone()
            .svd(true, true)
            .solve(&demand, 1e-14)
            .map_err(|e| Error::Oracle(e.to_string()))?;
        for (k, &i) in active.iter().enumerate() {
            multipliers[i] = z[k];
        }
        bt * z
    };
    Ok(MarketCheck {
        stationarity: (&demand - fitted).amax(),
        max_violation: slack.iter().map(|s| -s).fold(f64::NEG_INFINITY, f64::max),
        expected_demand: demand,
        active,
        multipliers,
    })
}

/// Residual of `E f` at `x` for problems with an expectation oracle.
pub fn expected_residual(kind: ProblemKind, x: &[f64]) -> Result<DVector<f64>> {
    match kind {
        ProblemKind::SinSystem => Ok(sin_expected(x)),
        ProblemKind::Svi => Ok(svi_expected(x)),
        ProblemKind::Market => market_expected(x),
    }
}
