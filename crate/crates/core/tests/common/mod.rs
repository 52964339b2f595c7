//! Shared checks for the invariant tests and the acceptance harness. Each
//! check returns a description of the first violation it finds.

#![allow(dead_code)]

use std::sync::Arc;

use grsaa::homotopy::{transform, HomotopyMap};
use grsaa::problems::{oracle_solve, ProblemInstance, ProblemKind};
use grsaa::saa::finite_difference_jacobian;
use grsaa::sampling::Partition;
use grsaa::schedule::{NodeSchedule, ScheduleKind};
use grsaa::tracer::{trace, TraceConfig};
use nalgebra::{DMatrix, DVector};
use rand_chacha::rand_core::{RngCore, SeedableRng};
use rand_chacha::ChaCha20Rng;

pub type Check = Result<(), String>;

pub fn uniform(rng: &mut ChaCha20Rng, lo: f64, hi: f64) -> f64 {
    lo + (hi - lo) * ((rng.next_u64() >> 11) as f64 / (1u64 << 53) as f64)
}

pub fn build(
    inst: &ProblemInstance,
    samples: usize,
    segments: usize,
    kind: ScheduleKind,
    seed: u64,
) -> HomotopyMap {
    let set = Arc::new(inst.draw_samples(samples, seed).unwrap());
    inst.homotopy(
        set,
        Partition::uniform(samples, segments).unwrap(),
        NodeSchedule::new(kind, segments).unwrap(),
    )
    .unwrap()
}

pub fn quiet() -> TraceConfig {
    TraceConfig {
        record_path: false,
        ..TraceConfig::default()
    }
}

/// Max-norm of the one-sided `t`-derivative of the blend at `offset` from
/// every interior node, evaluated at `x`.
pub fn join_derivative(hm: &HomotopyMap, x: &[f64], offset: f64) -> Result<f64, String> {
    let bm = hm.blended();
    let nodes = bm.schedule().nodes().to_vec();
    let mut worst = 0.0f64;
    for &node in &nodes[1..nodes.len() - 1] {
        for t in [node - offset, node + offset] {
            let d = bm.blend_deriv_t(x, t).map_err(|e| e.to_string())?;
            worst = worst.max(d.amax());
        }
        let at = bm.blend_deriv_t(x, node).map_err(|e| e.to_string())?;
        if at.amax() != 0.0 {
            return Err(format!(
                "nonzero t-derivative {} exactly at node {node}",
                at.amax()
            ));
        }
        let l = bm.schedule().segment_of(node).map_err(|e| e.to_string())?;
        let left = bm.sample_average(l, x).map_err(|e| e.to_string())?;
        let blended = bm.blend(x, node).map_err(|e| e.to_string())?;
        if left != blended {
            return Err(format!("blend at node {node} is not the segment average"));
        }
    }
    Ok(worst)
}

/// Derivative of the blend within 1e-8 of every node of a four-segment
/// schedule. The sine system and the market are probed at their traced
/// solutions. The variational inequality ends on a face of its box where the
/// averages are far from zero, so it is probed at the root of its expected
/// field instead.
pub fn check_c1_joins(seed: u64) -> Check {
    for (inst, samples) in [
        (ProblemInstance::sin_system(3).unwrap(), 10_000),
        (ProblemInstance::svi(2, 2).unwrap(), 10_000),
        (ProblemInstance::market(2).unwrap(), 4_000),
    ] {
        let hm = build(&inst, samples, 4, ScheduleKind::Uniform, seed);
        let x = if inst.kind == ProblemKind::Svi {
            let start = DVector::from_element(inst.dim(), 1.0);
            oracle_solve(inst.kind, &[start], 1e-12)
                .map_err(|e| e.to_string())?
                .as_slice()
                .to_vec()
        } else {
            let r = trace(&hm, &quiet()).map_err(|e| e.to_string())?;
            if !r.converged() {
                return Err(format!("{:?} did not converge", inst.kind));
            }
            r.x
        };
        let worst = join_derivative(&hm, &x, 1e-8)?;
        if worst > 1e-6 {
            return Err(format!(
                "{:?}: |dd/dt| = {worst:e} at 1e-8 from a node",
                inst.kind
            ));
        }
    }
    Ok(())
}

/// Analytic model Jacobians against central differences at 100 points.
pub fn check_model_jacobians(seed: u64) -> Check {
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let cases = [
        (ProblemInstance::market(2).unwrap(), 0.05, 1.0),
        (ProblemInstance::sin_system(4).unwrap(), -3.0, 3.0),
        (ProblemInstance::svi(3, 2).unwrap(), -3.0, 3.0),
    ];
    for (inst, lo, hi) in cases {
        let n = inst.dim();
        let mut jac = DMatrix::zeros(n, n);
        let mut fd = DMatrix::zeros(n, n);
        for _ in 0..100 {
            let x: Vec<f64> = (0..n).map(|_| uniform(&mut rng, lo, hi)).collect();
            let xi = [uniform(&mut rng, -1.0, 1.0)];
            inst.model
                .jacobian(&x, &xi, &mut jac)
                .map_err(|e| e.to_string())?;
            finite_difference_jacobian(inst.model.as_ref(), &x, &xi, &mut fd)
                .map_err(|e| e.to_string())?;
            for (a, b) in jac.iter().zip(fd.iter()) {
                if (a - b).abs() > 1e-5 * a.abs().max(1.0) {
                    return Err(format!("{:?} Jacobian {a} vs {b} at {x:?}", inst.kind));
                }
            }
        }
    }
    Ok(())
}

fn central_difference(hm: &HomotopyMap, u: &[f64], t: f64, h: f64) -> Result<DMatrix<f64>, String> {
    let d = hm.dim();
    let eval = |u: &[f64], t: f64| hm.eval(u, t).map_err(|e| e.to_string());
    let mut fd = DMatrix::zeros(d, d + 1);
    for k in 0..d {
        let step = h * u[k].abs().max(1.0);
        let mut up = u.to_vec();
        let mut um = u.to_vec();
        up[k] += step;
        um[k] -= step;
        fd.set_column(k, &((eval(&up, t)? - eval(&um, t)?) / (2.0 * step)));
    }
    fd.set_column(d, &((eval(u, t + h)? - eval(u, t - h)?) / (2.0 * h)));
    Ok(fd)
}

/// Homotopy Jacobians in `(u, t)` against central differences.
pub fn check_homotopy_jacobians(seed: u64) -> Check {
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let h = 1e-6;
    let cases = [
        (ProblemInstance::sin_system(3).unwrap(), 600, 6),
        (ProblemInstance::svi(2, 2).unwrap(), 600, 6),
        (ProblemInstance::market(3).unwrap(), 600, 6),
    ];
    for (inst, samples, segments) in cases {
        let hm = build(
            &inst,
            samples,
            segments,
            ScheduleKind::RandomDescending { seed },
            seed,
        );
        let start = hm.start_point().map_err(|e| e.to_string())?;
        for _ in 0..30 {
            let t = uniform(&mut rng, 0.01, 0.99);
            let u: Vec<f64> = match inst.kind {
                ProblemKind::Market => {
                    // prices stay strictly positive under the difference steps
                    let mut u: Vec<f64> = start
                        .iter()
                        .map(|&v| v + uniform(&mut rng, -0.05, 0.05))
                        .collect();
                    for p in u.iter_mut().take(3) {
                        *p = p.max(0.05);
                    }
                    u
                }
                _ => start
                    .iter()
                    .map(|&v| v + uniform(&mut rng, -1.0, 1.0))
                    .collect(),
            };
            let exact = hm.eval_with_jacobian(&u, t).map_err(|e| e.to_string())?;
            let value = hm.eval(&u, t).map_err(|e| e.to_string())?;
            if value != exact.value {
                return Err("eval and eval_with_jacobian disagree".into());
            }
            let fd = central_difference(&hm, &u, t, h)?;
            for (a, b) in exact.jac.iter().zip(fd.iter()) {
                if (a - b).abs() > 1e-5 * a.abs().max(1.0) {
                    return Err(format!(
                        "{:?} homotopy Jacobian {a} vs {b} at t = {t}",
                        inst.kind
                    ));
                }
            }
        }
    }
    Ok(())
}

/// `neg · pos = t^κ` to 1e-12 relative.
pub fn check_transform_identity(seed: u64) -> Check {
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    for _ in 0..20_000 {
        let y = uniform(&mut rng, -50.0, 50.0);
        let t = uniform(&mut rng, 1e-8, 1.0);
        let kappa = 2 + (rng.next_u64() % 4) as u32;
        let (neg, pos) = transform(y, t, kappa);
        let target = t.powi(kappa as i32);
        if !(neg >= 0.0 && pos >= 0.0) {
            return Err(format!("negative transform at y = {y}, t = {t}"));
        }
        if (neg * pos - target).abs() > 1e-12 * target {
            return Err(format!(
                "neg·pos = {} vs t^κ = {target} at y = {y}, t = {t}, κ = {kappa}",
                neg * pos
            ));
        }
    }
    Ok(())
}

/// `h(x, 1) = x - x⁰` and `h(x, 0) = f^L(x)`, exactly.
pub fn check_endpoints(seed: u64) -> Check {
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    for n in [1, 3, 6] {
        let inst = ProblemInstance::sin_system(n).unwrap();
        let hm = build(&inst, 300, 7, ScheduleKind::RandomDescending { seed }, seed);
        for _ in 0..20 {
            let x: Vec<f64> = (0..n).map(|_| uniform(&mut rng, -10.0, 10.0)).collect();
            let xv = DVector::from_column_slice(&x);
            let at_one = hm.eval(&x, 1.0).map_err(|e| e.to_string())?;
            if at_one != &xv - hm.x0() {
                return Err(format!("h(x, 1) != x - x0 at {x:?}"));
            }
            let at_zero = hm.eval(&x, 0.0).map_err(|e| e.to_string())?;
            if at_zero != hm.saa_residual(&x).map_err(|e| e.to_string())? {
                return Err(format!("h(x, 0) != f^L(x) at {x:?}"));
            }
        }
    }
    Ok(())
}

/// The perturbation `t(1-t)α` leaves both ends untouched.
pub fn check_alpha_neutrality(seed: u64) -> Check {
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    for inst in [
        ProblemInstance::sin_system(3).unwrap(),
        ProblemInstance::svi(3, 2).unwrap(),
    ] {
        let plain = build(&inst, 200, 5, ScheduleKind::Uniform, seed);
        let alpha = DVector::from_fn(3, |_, _| uniform(&mut rng, -5.0, 5.0));
        let perturbed = build(&inst, 200, 5, ScheduleKind::Uniform, seed)
            .with_alpha(alpha)
            .map_err(|e| e.to_string())?;
        let start = plain.start_point().map_err(|e| e.to_string())?;
        for _ in 0..20 {
            let u: Vec<f64> = start
                .iter()
                .map(|&v| v + uniform(&mut rng, -2.0, 2.0))
                .collect();
            for t in [0.0, 1.0] {
                let a = plain.eval_with_jacobian(&u, t).map_err(|e| e.to_string())?;
                let b = perturbed
                    .eval_with_jacobian(&u, t)
                    .map_err(|e| e.to_string())?;
                if a.value != b.value {
                    return Err(format!("alpha changes h at t = {t}"));
                }
                if a.jac.columns(0, plain.dim()) != b.jac.columns(0, plain.dim()) {
                    return Err(format!("alpha changes the state Jacobian at t = {t}"));
                }
            }
        }
    }
    Ok(())
}

/// Two traces from identical inputs produce identical paths.
pub fn check_reproducibility(seed: u64) -> Check {
    let cases = [
        (
            ProblemInstance::sin_system(3).unwrap(),
            ScheduleKind::Harmonic { tau0: 7000.0 },
        ),
        (
            ProblemInstance::market(2).unwrap(),
            ScheduleKind::RandomDescending { seed },
        ),
        (ProblemInstance::svi(1, 2).unwrap(), ScheduleKind::Uniform),
    ];
    for (inst, kind) in cases {
        let a = trace(
            &build(&inst, 2_000, 20, kind, seed),
            &TraceConfig::default(),
        )
        .map_err(|e| e.to_string())?;
        let b = trace(
            &build(&inst, 2_000, 20, kind, seed),
            &TraceConfig::default(),
        )
        .map_err(|e| e.to_string())?;
        if a.path != b.path || a.u != b.u || a.counters != b.counters {
            return Err(format!(
                "{:?} trace differs between identical runs",
                inst.kind
            ));
        }
    }
    Ok(())
}

/// Every invariant with its name.
pub fn invariant_suite(seed: u64) -> Vec<(&'static str, Check)> {
    vec![
        ("C1 joins", check_c1_joins(seed)),
        ("model Jacobians", check_model_jacobians(seed)),
        ("homotopy Jacobians", check_homotopy_jacobians(seed)),
        ("transform identity", check_transform_identity(seed)),
        ("endpoints", check_endpoints(seed)),
        ("alpha neutrality", check_alpha_neutrality(seed)),
        ("reproducibility", check_reproducibility(seed)),
    ]
}

/// `‖x - x_ref‖₂` with `x_ref` the root of the expected sine system found
/// by Newton from `x`.
pub fn sin_oracle_error(x: &[f64]) -> Result<f64, String> {
    let start = DVector::from_column_slice(x);
    let reference = oracle_solve(ProblemKind::SinSystem, std::slice::from_ref(&start), 1e-13)
        .map_err(|e| e.to_string())?;
    Ok((start - reference).norm())
}

pub fn median(values: &mut [f64]) -> f64 {
    values.sort_by(f64::total_cmp);
    let m = values.len() / 2;
    if values.len().is_multiple_of(2) {
        0.5 * (values[m - 1] + values[m])
    } else {
        values[m]
    }
}
