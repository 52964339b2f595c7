//! The traced maps.
//!
//! * plain: `h(x, t) = (1 - t) d(x, t) + t (x - x⁰) - t (1 - t) α`
//! * smoothed KKT, for affine constraints `B x <= b`, with `u = (x, y)`:
//!
//! ```text
//! (1 - t)(d(x, t) - Bᵀ neg(y, t)) - t (x - x⁰) - t (1 - t) α = 0
//! B x + pos(y, t) - b = 0
//! ```
//!
//! where `neg(y, t) = ((√(y² + 4t) - y) / 2)^κ₀` and
//! `pos(y, t) = ((√(y² + 4t) + y) / 2)^κ₀` componentwise, so that
//! `neg · pos = t^κ₀`. `neg` plays the multiplier and `pos` the slack. A
//! system written with the multiplier on the `+y` side (`λ = pos`,
//! `z = neg`) maps onto this form by flipping the sign of `y`.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::saa::{BlendEval, BlendedMap};

/// Values and partial derivatives of the transform pair at one component.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TransformDerivs {
    pub neg: f64,
    pub pos: f64,
    pub dneg_dy: f64,
    pub dpos_dy: f64,
    pub dneg_dt: f64,
    pub dpos_dt: f64,
}

/// The two halves `((S - y)/2, (S + y)/2)` with `S = √(y² + 4t)`, computed
/// without cancellation; their product is `t`.
#[inline]
fn halves(y: f64, t: f64) -> (f64, f64, f64) {
    let s = (y * y + 4.0 * t).sqrt();
    if y >= 0.0 {
        let b = 0.5 * (s + y);
        let a = if b > 0.0 { t / b } else { 0.0 };
        (a, b, s)
    } else {
        let a = 0.5 * (s - y);
        (a, t / a, s)
    }
}

/// `(neg(y, t), pos(y, t))` for one component. At `t = 0` this reduces to
/// `(max(-y, 0)^κ₀, max(y, 0)^κ₀)`.
#[inline]
pub fn transform(y: f64, t: f64, kappa0: u32) -> (f64, f64) {
    debug_assert!(t >= 0.0 && kappa0 >= 2);
    let (a, b, _) = halves(y, t);
    (a.powi(kappa0 as i32), b.powi(kappa0 as i32))
}

pub fn transform_derivs(y: f64, t: f64, kappa0: u32) -> TransformDerivs {
    debug_assert!(t >= 0.0 && kappa0 >= 2);
    let k = kappa0 as i32;
    let kf = kappa0 as f64;
    let (a, b, s) = halves(y, t);
    let (neg, pos) = (a.powi(k), b.powi(k));
    if s > 0.0 {
        TransformDerivs {
            neg,
            pos,
            dneg_dy: -kf * neg / s,
            dpos_dy: kf * pos / s,
            dneg_dt: kf * a.powi(k - 1) / s,
            dpos_dt: kf * b.powi(k - 1) / s,
        }
    } else {
        // y = 0, t = 0: limits along y = 0, where neg = pos = t^{κ₀/2}
        let dt = if kappa0 == 2 { 1.0 } else { 0.0 };
        TransformDerivs {
            neg,
            pos,
            dneg_dy: 0.0,
            dpos_dy: 0.0,
            dneg_dt: dt,
            dpos_dt: dt,
        }
    }
}

/// Componentwise transform of a vector.
pub fn transform_vec(y: &DVector<f64>, t: f64, kappa0: u32) -> (DVector<f64>, DVector<f64>) {
    let mut neg = DVector::zeros(y.len());
    let mut pos = DVector::zeros(y.len());
    for (i, &v) in y.iter().enumerate() {
        let (a, b) = transform(v, t, kappa0);
        neg[i] = a;
        pos[i] = b;
    }
    (neg, pos)
}

/// Affine constraints `B x <= b` with the transform exponent.
#[derive(Debug, Clone, PartialEq)]
pub struct KktConstraints {
    pub matrix: DMatrix<f64>,
    pub rhs: DVector<f64>,
    pub kappa0: u32,
}

impl KktConstraints {
    pub fn new(matrix: DMatrix<f64>, rhs: DVector<f64>, kappa0: u32) -> Result<Self> {
        if matrix.nrows() != rhs.len() {
            return Err(Error::Dimension(format!(
                "constraint matrix has {} rows, rhs {}",
                matrix.nrows(),
                rhs.len()
            )));
        }
        if kappa0 < 2 {
            return Err(Error::Config(format!(
                "kappa0 must be at least 2, got {kappa0}"
            )));
        }
        Ok(KktConstraints {
            matrix,
            rhs,
            kappa0,
        })
    }

    pub fn count(&self) -> usize {
        self.rhs.len()
    }

    /// `y` with `pos(y, t) = s` componentwise. Since the two halves multiply
    /// to `t`, `y = r - t / r` with `r = s^{1/κ₀}`.
    pub fn solve_pos(&self, slack: &DVector<f64>, t: f64) -> Result<DVector<f64>> {
        slack
            .iter()
            .map(|&s| {
                if !(s > 0.0) {
                    return Err(Error::ReferenceNotInterior);
                }
                let r = s.powf(1.0 / self.kappa0 as f64);
                Ok(r - t / r)
            })
            .collect::<Result<Vec<f64>>>()
            .map(DVector::from_vec)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum HomotopyKind {
    Plain,
    SmoothedKkt(KktConstraints),
}

/// Value `H(u, t)` and Jacobian `[∂H/∂u | ∂H/∂t]`.
#[derive(Debug, Clone)]
pub struct HomotopyEval {
    pub value: DVector<f64>,
    pub jac: DMatrix<f64>,
}

#[derive(Debug, Clone)]
pub struct HomotopyMap {
    kind: HomotopyKind,
    blended: BlendedMap,
    x0: DVector<f64>,
    alpha: DVector<f64>,
}

impl HomotopyMap {
    pub fn plain(blended: BlendedMap) -> Self {
        let x0 = blended.system().x0().clone();
        let n = x0.len();
        HomotopyMap {
            kind: HomotopyKind::Plain,
            blended,
            x0,
            alpha: DVector::zeros(n),
        }
    }

    pub fn smoothed_kkt(blended: BlendedMap, constraints: KktConstraints) -> Result<Self> {
        let x0 = blended.system().x0().clone();
        if constraints.matrix.ncols() != x0.len() {
            return Err(Error::Dimension(format!(
                "constraint matrix has {} columns, state has {}",
                constraints.matrix.ncols(),
                x0.len()
            )));
        }
        let slack = &constraints.rhs - &constraints.matrix * &x0;
        if slack.iter().any(|&s| !(s > 0.0)) {
            return Err(Error::ReferenceNotInterior);
        }
        let n = x0.len();
        Ok(HomotopyMap {
            kind: HomotopyKind::SmoothedKkt(constraints),
            blended,
            x0,
            alpha: DVector::zeros(n),
        })
    }

    /// Sets the perturbation vector `α` (zero by default).
    pub fn with_alpha(mut self, alpha: DVector<f64>) -> Result<Self> {
        if alpha.len() != self.x0.len() {
            return Err(Error::Dimension(
                "alpha must have the state dimension".into(),
            ));
        }
        self.alpha = alpha;
        Ok(self)
    }

    pub fn kind(&self) -> &HomotopyKind {
        &self.kind
    }

    pub fn blended(&self) -> &BlendedMap {
        &self.blended
    }

    pub fn x0(&self) -> &DVector<f64> {
        &self.x0
    }

    pub fn alpha(&self) -> &DVector<f64> {
        &self.alpha
    }

    pub fn state_dim(&self) -> usize {
        self.x0.len()
    }

    /// Number of unknowns excluding `t`.
    pub fn dim(&self) -> usize {
        match &self.kind {
            HomotopyKind::Plain => self.state_dim(),
            HomotopyKind::SmoothedKkt(c) => self.state_dim() + c.count(),
        }
    }

    pub fn is_kkt(&self) -> bool {
        matches!(self.kind, HomotopyKind::SmoothedKkt(_))
    }

    /// The unique zero at `t = 1`: `x⁰`, plus `y` with
    /// `B x⁰ + pos(y, 1) = b` for the KKT form.
    pub fn start_point(&self) -> Result<DVector<f64>> {
        match &self.kind {
            HomotopyKind::Plain => Ok(self.x0.clone()),
            HomotopyKind::SmoothedKkt(c) => {
                let slack = &c.rhs - &c.matrix * &self.x0;
                let y = c.solve_pos(&slack, 1.0)?;
                let mut u = DVector::zeros(self.dim());
                u.rows_mut(0, self.state_dim()).copy_from(&self.x0);
                u.rows_mut(self.state_dim(), c.count()).copy_from(&y);
                Ok(u)
            }
        }
    }

    /// The state part `x` of `u`.
    pub fn state<'a>(&self, u: &'a DVector<f64>) -> nalgebra::DVectorView<'a, f64> {
        u.rows(0, self.state_dim())
    }

    fn check_t(t: f64) -> Result<()> {
        if !(0.0..=1.0).contains(&t) {
            return Err(Error::TOutOfRange(t));
        }
        Ok(())
    }

    /// Blend pass, skipped at `t = 1` where `d`, `∂d/∂x` and `∂d/∂t` all
    /// vanish identically.
    fn blend_eval(&self, x: &[f64], t: f64, with_jac: bool) -> Result<BlendEval> {
        let n = self.state_dim();
        if t == 1.0 {
            if x.len() != n {
                return Err(Error::Dimension("state has wrong length".into()));
            }
            return Ok(BlendEval {
                segment: 1,
                theta: 0.0,
                theta_prime: 0.0,
                value: DVector::zeros(n),
                deriv_t: DVector::zeros(n),
                jac_x: with_jac.then(|| DMatrix::zeros(n, n)),
            });
        }
        self.blended.evaluate(x, t, with_jac)
    }

    /// Plain homotopy value.
    pub fn eval_plain(&self, x: &[f64], t: f64) -> Result<DVector<f64>> {
        Self::check_t(t)?;
        let xv = DVector::from_column_slice(x);
        if t == 1.0 {
            self.check_len(x)?;
            return Ok(xv - &self.x0);
        }
        let d = self.blend_eval(x, t, false)?.value;
        if t == 0.0 {
            return Ok(d);
        }
        Ok(d * (1.0 - t) + (xv - &self.x0) * t - &self.alpha * (t * (1.0 - t)))
    }

    fn check_len(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.state_dim() {
            return Err(Error::Dimension(format!(
                "state has length {}, expected {}",
                x.len(),
                self.state_dim()
            )));
        }
        Ok(())
    }

    /// Plain homotopy value and `n × (n + 1)` Jacobian.
    pub fn jac_plain(&self, x: &[f64], t: f64) -> Result<HomotopyEval> {
        Self::check_t(t)?;
        self.check_len(x)?;
        let n = self.state_dim();
        let ev = self.blend_eval(x, t, true)?;
        let jd = ev.jac_x.expect("requested");
        let xv = DVector::from_column_slice(x);
        let shift = &xv - &self.x0;

        let value = if t == 1.0 {
            shift.clone()
        } else if t == 0.0 {
            ev.value.clone()
        } else {
            &ev.value * (1.0 - t) + &shift * t - &self.alpha * (t * (1.0 - t))
        };

        let mut jac = DMatrix::zeros(n, n + 1);
        let mut xblock = jd * (1.0 - t);
        for i in 0..n {
            xblock[(i, i)] += t;
        }
        jac.view_mut((0, 0), (n, n)).copy_from(&xblock);
        let tcol = -&ev.value + &ev.deriv_t * (1.0 - t) + &shift - &self.alpha * (1.0 - 2.0 * t);
        jac.column_mut(n).copy_from(&tcol);
        Ok(HomotopyEval { value, jac })
    }

    fn constraints(&self) -> Result<&KktConstraints> {
        match &self.kind {
            HomotopyKind::SmoothedKkt(c) => Ok(c),
            HomotopyKind::Plain => Err(Error::Config("map has no constraints".into())),
        }
    }

    /// Smoothed-KKT value at `u = (x, y)`.
    pub fn eval_kkt(&self, u: &[f64], t: f64) -> Result<DVector<f64>> {
        Ok(self.kkt_impl(u, t, false)?.value)
    }

    /// Smoothed-KKT value and `(n + M) × (n + M + 1)` Jacobian.
    pub fn jac_kkt(&self, u: &[f64], t: f64) -> Result<HomotopyEval> {
        self.kkt_impl(u, t, true)
    }

    fn kkt_impl(&self, u: &[f64], t: f64, with_jac: bool) -> Result<HomotopyEval> {
        Self::check_t(t)?;
        let c = self.constraints()?;
        let n = self.state_dim();
        let m = c.count();
        if u.len() != n + m {
            return Err(Error::Dimension(format!(
                "u has length {}, expected {}",
                u.len(),
                n + m
            )));
        }
        let x = &u[..n];
        let xv = DVector::from_column_slice(x);
        let shift = &xv - &self.x0;

        let derivs: Vec<TransformDerivs> = u[n..]
            .iter()
            .map(|&y| transform_derivs(y, t, c.kappa0))
            .collect();
        let neg = DVector::from_iterator(m, derivs.iter().map(|d| d.neg));
        let pos = DVector::from_iterator(m, derivs.iter().map(|d| d.pos));

        let ev = self.blend_eval(x, t, with_jac)?;
        let bt_neg = c.matrix.tr_mul(&neg);
        let inner = &ev.value - &bt_neg;

        let mut value = DVector::zeros(n + m);
        let block1 = if t == 1.0 {
            -&shift
        } else {
            &inner * (1.0 - t) - &shift * t - &self.alpha * (t * (1.0 - t))
        };
        value.rows_mut(0, n).copy_from(&block1);
        let block2 = &c.matrix * &xv + &pos - &c.rhs;
        value.rows_mut(n, m).copy_from(&block2);

        let mut jac = DMatrix::zeros(0, 0);
        if with_jac {
            jac = DMatrix::zeros(n + m, n + m + 1);
            let jd = ev.jac_x.expect("requested");
            let mut xx = jd * (1.0 - t);
            for i in 0..n {
                xx[(i, i)] -= t;
            }
            jac.view_mut((0, 0), (n, n)).copy_from(&xx);
            // ∂block1/∂y_k = -(1 - t) B[k, :]ᵀ dneg_k
            for k in 0..m {
                let s = -(1.0 - t) * derivs[k].dneg_dy;
                for i in 0..n {
                    jac[(i, n + k)] = s * c.matrix[(k, i)];
                }
            }
            let dneg_dt = DVector::from_iterator(m, derivs.iter().map(|d| d.dneg_dt));
            let tcol1 = -&inner + (&ev.deriv_t - c.matrix.tr_mul(&dneg_dt)) * (1.0 - t)
                - &shift
                - &self.alpha * (1.0 - 2.0 * t);
            jac.view_mut((0, n + m), (n, 1)).copy_from(&tcol1);

            jac.view_mut((n, 0), (m, n)).copy_from(&c.matrix);
            for k in 0..m {
                jac[(n + k, n + k)] = derivs[k].dpos_dy;
                jac[(n + k, n + m)] = derivs[k].dpos_dt;
            }
        }
        Ok(HomotopyEval { value, jac })
    }

    /// Value of the traced map at `(u, t)`.
    pub fn eval(&self, u: &[f64], t: f64) -> Result<DVector<f64>> {
        match self.kind {
            HomotopyKind::Plain => self.eval_plain(u, t),
            HomotopyKind::SmoothedKkt(_) => self.eval_kkt(u, t),
        }
    }

    /// Value and full Jacobian of the traced map, from one blend pass.
    pub fn eval_with_jacobian(&self, u: &[f64], t: f64) -> Result<HomotopyEval> {
        match self.kind {
            HomotopyKind::Plain => self.jac_plain(u, t),
            HomotopyKind::SmoothedKkt(_) => self.jac_kkt(u, t),
        }
    }

    /// `φ(x, t) = x - h(x, t)`; its fixed points are the zeros of `h`.
    pub fn fixed_point_map(&self, x: &[f64], t: f64) -> Result<DVector<f64>> {
        Ok(DVector::from_column_slice(x) - self.eval_plain(x, t)?)
    }

    /// Full-sample average `f^L(x)`.
    pub fn saa_residual(&self, x: &[f64]) -> Result<DVector<f64>> {
        self.blended
            .sample_average(self.blended.partition().groups(), x)
    }
}
