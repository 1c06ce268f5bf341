//! Uniform time grids and piecewise-linear paths on them.

use alloc::vec::Vec;

use crate::curve::Band;
use crate::error::{Error, Result};
use crate::math;

/// Uniform partition of a subinterval of `[0, 1]`.
///
/// Nodes live on a shared lattice `origin + k * step`; a partition carved out
/// of another with [`Partition::subinterval`] keeps the parent lattice, so
/// node times of abutting segments agree bit-for-bit and concatenation never
/// perturbs pinned junction values.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Partition {
    origin: f64,
    step: f64,
    offset: usize,
    n: usize,
}

impl Partition {
    pub fn new(t_start: f64, t_end: f64, n: usize) -> Result<Self> {
        if n == 0 {
            return Err(Error::Domain("partition needs at least one subinterval"));
        }
        if !(t_start.is_finite() && t_end.is_finite()) || t_end <= t_start {
            return Err(Error::Domain("partition interval must satisfy t_start < t_end"));
        }
        Ok(Partition {
            origin: t_start,
            step: (t_end - t_start) / n as f64,
            offset: 0,
            n,
        })
    }

    /// Sub-partition between lattice indices `k_lo..=k_hi` of `self`.
    pub fn subinterval(&self, k_lo: usize, k_hi: usize) -> Result<Self> {
        if k_hi <= k_lo || k_hi > self.n {
            return Err(Error::Domain("subinterval indices out of range"));
        }
        Ok(Partition {
            origin: self.origin,
            step: self.step,
            offset: self.offset + k_lo,
            n: k_hi - k_lo,
        })
    }

    /// Number of subintervals (one less than the number of nodes).
    pub fn n(&self) -> usize {
        self.n
    }

    pub fn step(&self) -> f64 {
        self.step
    }

    /// Time of node `k` (`0 ..= n`).
    pub fn node(&self, k: usize) -> f64 {
        self.origin + (self.offset + k) as f64 * self.step
    }

    pub fn t_start(&self) -> f64 {
        self.node(0)
    }

    pub fn t_end(&self) -> f64 {
        self.node(self.n)
    }

    pub fn duration(&self) -> f64 {
        self.step * self.n as f64
    }

    /// Index of the node closest to `t`, together with the snap distance.
    pub fn nearest_node(&self, t: f64) -> (usize, f64) {
        let raw = (t - self.origin) / self.step - self.offset as f64;
        let k = math::round(raw).max(0.0) as usize;
        let k = k.min(self.n);
        (k, math::abs(self.node(k) - t))
    }
}

/// Path values on the nodes of a [`Partition`], read between nodes by linear
/// interpolation.
#[derive(Clone, Debug, PartialEq)]
pub struct GridPath {
    partition: Partition,
    values: Vec<f64>,
}

impl GridPath {
    /// Wrap node samples as a polygonal path.
    pub fn from_samples(values: Vec<f64>, partition: Partition) -> Result<Self> {
        if values.len() != partition.n() + 1 {
            return Err(Error::Structure("sample count must equal node count"));
        }
        Ok(GridPath { partition, values })
    }

    pub fn partition(&self) -> &Partition {
        &self.partition
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn value(&self, k: usize) -> f64 {
        self.values[k]
    }

    pub fn first(&self) -> f64 {
        self.values[0]
    }

    pub fn last(&self) -> f64 {
        self.values[self.values.len() - 1]
    }

    /// Evaluate the polygonal interpolant at time `t` (clamped to the span).
    /// Node times reproduce the stored samples exactly.
    pub fn eval(&self, t: f64) -> f64 {
        let p = &self.partition;
        let (near, dist) = p.nearest_node(t);
        if dist == 0.0 {
            return self.values[near];
        }
        let rel = (t - p.t_start()) / p.step();
        if rel <= 0.0 {
            return self.values[0];
        }
        let k = math::floor(rel) as usize;
        if k >= p.n() {
            return self.values[p.n()];
        }
        let frac = rel - k as f64;
        (1.0 - frac) * self.values[k] + frac * self.values[k + 1]
    }
}

/// Polygonalize node samples over a partition.
pub fn polygonalize(samples: Vec<f64>, partition: Partition) -> Result<GridPath> {
    GridPath::from_samples(samples, partition)
}

/// Concatenate abutting path segments into a single path.
///
/// Segments must share the lattice step exactly, abut in time, and agree at
/// every junction value with zero tolerance.
pub fn concat(segments: &[GridPath]) -> Result<GridPath> {
    let first = segments
        .first()
        .ok_or(Error::Structure("concat needs at least one segment"))?;
    let mut values = Vec::with_capacity(segments.iter().map(|s| s.partition.n()).sum::<usize>() + 1);
    values.extend_from_slice(first.values());
    let mut n_total = first.partition.n();
    for pair in segments.windows(2) {
        let (prev, next) = (&pair[0], &pair[1]);
        if prev.partition.step().to_bits() != next.partition.step().to_bits() {
            return Err(Error::Structure("concat segments must share one grid step"));
        }
        if prev.partition.t_end() != next.partition.t_start() {
            return Err(Error::Structure("concat segments must abut in time"));
        }
        if prev.last() != next.first() {
            return Err(Error::Structure("concat junction values disagree"));
        }
        values.extend_from_slice(&next.values()[1..]);
        n_total += next.partition.n();
    }
    let partition = Partition {
        origin: first.partition.origin,
        step: first.partition.step,
        offset: first.partition.offset,
        n: n_total,
    };
    GridPath::from_samples(values, partition)
}

/// Node-wise membership of a path in the closed band.
pub fn in_band(path: &GridPath, band: &Band) -> bool {
    let p = path.partition();
    for k in 0..=p.n() {
        if !band.contains(p.node(k), path.value(k)) {
            return false;
        }
    }
    true
}
