//! Descending homotopy nodes `1 = t_0 > t_1 > ... > t_L = 0` and the sin²
//! blending ramps that carry one sample average into the next.

use std::f64::consts::{FRAC_PI_2, PI};
use std::io::Write;

use rand_chacha::rand_core::{RngCore, SeedableRng};
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Minimum gap between random nodes, and between a random node and {0, 1}.
pub const MIN_NODE_GAP: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum ScheduleKind {
    /// `t_l = 1 - l / L`.
    Uniform,
    /// `L - 1` uniform draws on (0, 1), sorted into strict descent.
    RandomDescending { seed: u64 },
    /// `t_l = 1 / (1 + tau0 * l)` for `l < L`, then `t_L = 0`.
    Harmonic { tau0: f64 },
    /// Nodes supplied by the caller.
    Explicit,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NodeSchedule {
    nodes: Vec<f64>,
    kind: ScheduleKind,
}

impl NodeSchedule {
    pub fn new(kind: ScheduleKind, segments: usize) -> Result<Self> {
        if segments == 0 {
            return Err(Error::InvalidSchedule("L must be at least 1".into()));
        }
        let l_count = segments;
        let mut nodes = Vec::with_capacity(l_count + 1);
        match kind {
            ScheduleKind::Uniform => {
                nodes.push(1.0);
                for l in 1..l_count {
                    nodes.push(1.0 - l as f64 / l_count as f64);
                }
                nodes.push(0.0);
            }
            ScheduleKind::Harmonic { tau0 } => {
                if !(tau0 > 0.0) || !tau0.is_finite() {
                    return Err(Error::InvalidSchedule(format!(
                        "tau0 must be positive, got {tau0}"
                    )));
                }
                nodes.push(1.0);
                for l in 1..l_count {
                    nodes.push(1.0 / (1.0 + tau0 * l as f64));
                }
                nodes.push(0.0);
            }
            ScheduleKind::RandomDescending { seed } => {
                let mut rng = ChaCha20Rng::seed_from_u64(seed);
                let mut interior: Vec<f64> = Vec::with_capacity(l_count - 1);
                while interior.len() < l_count - 1 {
                    let u = (rng.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64);
                    // re-draw anything too close to an existing node
                    let clear = (MIN_NODE_GAP..=1.0 - MIN_NODE_GAP).contains(&u)
                        && interior.iter().all(|&v| (v - u).abs() >= MIN_NODE_GAP);
                    if clear {
                        interior.push(u);
                    }
                }
                interior.sort_by(|a, b| b.partial_cmp(a).expect("finite draws"));
                nodes.push(1.0);
                nodes.extend(interior);
                nodes.push(0.0);
            }
            ScheduleKind::Explicit => {
                return Err(Error::InvalidSchedule(
                    "explicit schedules are built with from_nodes".into(),
                ))
            }
        }
        Self::validate(&nodes)?;
        Ok(NodeSchedule { nodes, kind })
    }

    /// Builds a schedule from explicit nodes (must start at 1, end at 0 and
    /// strictly descend).
    pub fn from_nodes(nodes: Vec<f64>) -> Result<Self> {
        Self::validate(&nodes)?;
        Ok(NodeSchedule {
            nodes,
            kind: ScheduleKind::Explicit,
        })
    }

    fn validate(nodes: &[f64]) -> Result<()> {
        if nodes.len() < 2 {
            return Err(Error::InvalidSchedule("need at least two nodes".into()));
        }
        if nodes[0] != 1.0 || *nodes.last().unwrap() != 0.0 {
            return Err(Error::InvalidSchedule("nodes must run from 1 to 0".into()));
        }
        if let Some(w) = nodes.windows(2).find(|w| !(w[1] < w[0])) {
            return Err(Error::InvalidSchedule(format!(
                "nodes not strictly decreasing: {} then {}",
                w[0], w[1]
            )));
        }
        Ok(())
    }

    pub fn kind(&self) -> ScheduleKind {
        self.kind
    }

    /// Number of segments `L`.
    pub fn segments(&self) -> usize {
        self.nodes.len() - 1
    }

    pub fn nodes(&self) -> &[f64] {
        &self.nodes
    }

    #[inline]
    pub fn node(&self, l: usize) -> f64 {
        self.nodes[l]
    }

    /// Segment `l` with `t_l <= t <= t_{l-1}`. An interior node `t_l`
    /// belongs to segment `l`, the cheaper of its two neighbours.
    pub fn segment_of(&self, t: f64) -> Result<usize> {
        if !(0.0..=1.0).contains(&t) {
            return Err(Error::TOutOfRange(t));
        }
        // nodes[1..] strictly decreasing: count those still above t
        let above = self.nodes[1..].partition_point(|&node| node > t);
        Ok(above + 1)
    }

    fn check_in_segment(&self, l: usize, t: f64) -> Result<(f64, f64)> {
        if l == 0 || l > self.segments() {
            return Err(Error::InvalidSchedule(format!("no segment {l}")));
        }
        let (lo, hi) = (self.nodes[l], self.nodes[l - 1]);
        if !(t >= lo && t <= hi) {
            return Err(Error::OutsideSegment {
                segment: l,
                t,
                lo,
                hi,
            });
        }
        Ok((lo, hi))
    }

    /// Blend weight `sin²((t - t_{l-1}) / (t_l - t_{l-1}) · π/2)`.
    pub fn theta(&self, l: usize, t: f64) -> Result<f64> {
        let (lo, hi) = self.check_in_segment(l, t)?;
        Ok(theta_on(lo, hi, t))
    }

    /// Exact derivative of [`theta`](Self::theta) in `t`.
    pub fn theta_prime(&self, l: usize, t: f64) -> Result<f64> {
        let (lo, hi) = self.check_in_segment(l, t)?;
        Ok(theta_prime_on(lo, hi, t))
    }

    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(["index", "node"])?;
        for (i, t) in self.nodes.iter().enumerate() {
            w.write_record([i.to_string(), format!("{t:.16e}")])?;
        }
        w.flush()?;
        Ok(())
    }
}

/// `theta` on the segment `[lo, hi]`; endpoints by branch.
#[inline]
pub(crate) fn theta_on(lo: f64, hi: f64, t: f64) -> f64 {
    if t == hi {
        0.0
    } else if t == lo {
        1.0
    } else {
        let s = (t - hi) / (lo - hi);
        let v = (s * FRAC_PI_2).sin();
        v * v
    }
}

#[inline]
pub(crate) fn theta_prime_on(lo: f64, hi: f64, t: f64) -> f64 {
    if t == hi || t == lo {
        0.0
    } else {
        let s = (t - hi) / (lo - hi);
        PI / (2.0 * (lo - hi)) * (s * PI).sin()
    }
}
