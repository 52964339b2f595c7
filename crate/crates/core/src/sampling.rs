//! Seeded sample generation and cumulative sample partitions.
//!
//! Samples are drawn from a ChaCha20 stream seeded through
//! [`SeedableRng::seed_from_u64`]. Each uniform variate consumes exactly one
//! `u64` from the stream and keeps its top 53 bits, so a sample set depends
//! only on `(seed, distribution, N)` and replays identically on every
//! platform. Components of a multi-dimensional sample are drawn in index
//! order, samples in sample order.

use std::io::{Read, Write};
use std::path::Path;

use rand_chacha::rand_core::{RngCore, SeedableRng};
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Sampling distribution of the stochastic parameter.
///
/// Only the box-uniform family is provided; new variants plug into
/// [`Distribution::draw_into`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Distribution {
    /// Independent uniform components on `[lo[k], hi[k])`.
    UniformBox { lo: Vec<f64>, hi: Vec<f64> },
}

impl Distribution {
    /// Uniform distribution on `[lo, hi]^m`.
    pub fn uniform_cube(lo: f64, hi: f64, m: usize) -> Self {
        Distribution::UniformBox {
            lo: vec![lo; m],
            hi: vec![hi; m],
        }
    }

    pub fn dim(&self) -> usize {
        match self {
            Distribution::UniformBox { lo, .. } => lo.len(),
        }
    }

    fn validate(&self) -> Result<()> {
        match self {
            Distribution::UniformBox { lo, hi } => {
                if lo.is_empty() || lo.len() != hi.len() {
                    return Err(Error::Dimension(format!(
                        "box bounds have lengths {} and {}",
                        lo.len(),
                        hi.len()
                    )));
                }
                for (index, (&l, &h)) in lo.iter().zip(hi).enumerate() {
                    if !(l < h) || !l.is_finite() || !h.is_finite() {
                        return Err(Error::InvalidBox {
                            index,
                            lo: l,
                            hi: h,
                        });
                    }
                }
                Ok(())
            }
        }
    }

    fn draw_into<R: RngCore>(&self, rng: &mut R, out: &mut [f64]) {
        match self {
            Distribution::UniformBox { lo, hi } => {
                for ((o, &l), &h) in out.iter_mut().zip(lo).zip(hi) {
                    *o = l + (h - l) * unit_f64(rng);
                }
            }
        }
    }

    /// Whether `xi` lies in the support.
    pub fn contains(&self, xi: &[f64]) -> bool {
        match self {
            Distribution::UniformBox { lo, hi } => xi
                .iter()
                .zip(lo.iter().zip(hi))
                .all(|(&x, (&l, &h))| x >= l && x <= h),
        }
    }
}

/// Uniform variate in `[0, 1)` from the top 53 bits of one `u64`.
fn unit_f64<R: RngCore>(rng: &mut R) -> f64 {
    (rng.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
}

/// A fixed, ordered batch of i.i.d. draws of the stochastic parameter.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleSet {
    data: Vec<f64>,
    dim: usize,
    seed: u64,
    distribution: Distribution,
}

impl SampleSet {
    /// Draws `count` samples from `distribution` using the seeded stream.
    pub fn draw(distribution: &Distribution, count: usize, seed: u64) -> Result<Self> {
        distribution.validate()?;
        if count == 0 {
            return Err(Error::EmptySampleSet);
        }
        let dim = distribution.dim();
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        let mut data = vec![0.0; count * dim];
        for chunk in data.chunks_exact_mut(dim) {
            distribution.draw_into(&mut rng, chunk);
        }
        Ok(SampleSet {
            data,
            dim,
            seed,
            distribution: distribution.clone(),
        })
    }

    /// Wraps explicitly given samples (one slice per sample).
    pub fn from_samples(
        distribution: &Distribution,
        samples: &[Vec<f64>],
        seed: u64,
    ) -> Result<Self> {
        distribution.validate()?;
        if samples.is_empty() {
            return Err(Error::EmptySampleSet);
        }
        let dim = distribution.dim();
        let mut data = Vec::with_capacity(samples.len() * dim);
        for s in samples {
            if s.len() != dim {
                return Err(Error::Dimension(format!(
                    "sample has dimension {}, expected {dim}",
                    s.len()
                )));
            }
            data.extend_from_slice(s);
        }
        Ok(SampleSet {
            data,
            dim,
            seed,
            distribution: distribution.clone(),
        })
    }

    pub fn len(&self) -> usize {
        self.data.len() / self.dim
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Dimension `m` of each sample.
    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn distribution(&self) -> &Distribution {
        &self.distribution
    }

    /// The `i`-th sample (0-based).
    #[inline]
    pub fn sample(&self, i: usize) -> &[f64] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn iter(&self) -> impl Iterator<Item = &[f64]> {
        self.data.chunks_exact(self.dim)
    }

    /// Writes one row per sample with 17 significant digits, which
    /// round-trips every `f64` exactly.
    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        let header: Vec<String> = (0..self.dim).map(|k| format!("xi{k}")).collect();
        w.write_record(&header)?;
        for s in self.iter() {
            w.write_record(s.iter().map(|v| format!("{v:.16e}")))?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_csv<R: Read>(reader: R, distribution: &Distribution, seed: u64) -> Result<Self> {
        let mut r = csv::Reader::from_reader(reader);
        let mut samples = Vec::new();
        for record in r.records() {
            let record = record?;
            let row = record
                .iter()
                .map(|f| {
                    f.trim()
                        .parse::<f64>()
                        .map_err(|e| Error::Io(format!("bad sample value {f:?}: {e}")))
                })
                .collect::<Result<Vec<f64>>>()?;
            samples.push(row);
        }
        Self::from_samples(distribution, &samples, seed)
    }

    pub fn save_csv(&self, path: &Path) -> Result<()> {
        self.write_csv(std::fs::File::create(path)?)
    }
}

/// Cumulative group sizes `0 < q_1 < ... < q_L = N`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Partition {
    q: Vec<usize>,
}

impl Partition {
    /// Validates an explicit list of cumulative counts.
    pub fn new(q: Vec<usize>) -> Result<Self> {
        if q.is_empty() {
            return Err(Error::InvalidPartition("no groups".into()));
        }
        if q[0] == 0 {
            return Err(Error::InvalidPartition("first group is empty".into()));
        }
        if let Some(w) = q.windows(2).find(|w| w[1] <= w[0]) {
            return Err(Error::InvalidPartition(format!(
                "counts not strictly increasing: {} then {}",
                w[0], w[1]
            )));
        }
        Ok(Partition { q })
    }

    /// `L` groups of (nearly) equal size: `q_l = round(l N / L)`, pushed up
    /// where needed so the sequence stays strictly increasing.
    pub fn uniform(total: usize, groups: usize) -> Result<Self> {
        if groups == 0 {
            return Err(Error::InvalidPartition("L must be at least 1".into()));
        }
        if groups > total {
            return Err(Error::InvalidPartition(format!(
                "L = {groups} exceeds N = {total}"
            )));
        }
        let mut q = Vec::with_capacity(groups);
        let mut prev = 0usize;
        for l in 1..=groups {
            let ideal = (l as f64 * total as f64 / groups as f64).round() as usize;
            // leave room for the remaining groups
            let cap = total - (groups - l);
            let v = ideal.max(prev + 1).min(cap);
            q.push(v);
            prev = v;
        }
        Self::new(q)
    }

    /// `q_l = tau1 * l` for `l = 1..=L`.
    pub fn linear(tau1: usize, groups: usize) -> Result<Self> {
        if tau1 == 0 {
            return Err(Error::InvalidPartition("tau1 must be at least 1".into()));
        }
        if groups == 0 {
            return Err(Error::InvalidPartition("L must be at least 1".into()));
        }
        Self::new((1..=groups).map(|l| tau1 * l).collect())
    }

    /// Number of groups `L`.
    pub fn groups(&self) -> usize {
        self.q.len()
    }

    /// Terminal count `q_L`.
    pub fn total(&self) -> usize {
        *self.q.last().expect("partition is non-empty")
    }

    /// `q_l` with the convention `q_0 = 0`.
    #[inline]
    pub fn count(&self, l: usize) -> usize {
        if l == 0 {
            0
        } else {
            self.q[l - 1]
        }
    }

    pub fn counts(&self) -> &[usize] {
        &self.q
    }
}
