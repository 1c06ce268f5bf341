//! Random grid paths: bridges, free motion, band-conditioned variants,
//! boundary-pinned limit segments, and band-survival estimation.

use alloc::vec::Vec;

use crate::curve::{Band, Side, Sign, TimeTuple};
use crate::error::{Error, Result};
use crate::exec::{chunk_bounds, chunk_count, Executor};
use crate::grid::{concat, GridPath, Partition};
use crate::math;
use crate::measure::log_heat_kernel;
use crate::rng::{Prng, RngStream};

/// Right endpoint of a process: pinned to a value or left free.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum End {
    Pinned(f64),
    Free,
}

/// Endpoint and conditioning descriptor for a path segment.
///
/// Boundary flags mark endpoints that sit exactly on a band curve; the
/// corresponding value must equal the curve value at the segment endpoint
/// with zero tolerance.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ProcessSpec {
    pub a: f64,
    pub end: End,
    pub start_on_boundary: Option<Side>,
    pub end_on_boundary: Option<Side>,
}

impl ProcessSpec {
    pub fn bridge(a: f64, b: f64) -> Self {
        ProcessSpec { a, end: End::Pinned(b), start_on_boundary: None, end_on_boundary: None }
    }

    pub fn free(a: f64) -> Self {
        ProcessSpec { a, end: End::Free, start_on_boundary: None, end_on_boundary: None }
    }

    pub fn with_start_pin(mut self, side: Side) -> Self {
        self.start_on_boundary = Some(side);
        self
    }

    pub fn with_end_pin(mut self, side: Side) -> Self {
        self.end_on_boundary = Some(side);
        self
    }

    pub fn validate(&self, band: &Band, partition: &Partition) -> Result<()> {
        if self.end_on_boundary.is_some() && matches!(self.end, End::Free) {
            return Err(Error::Structure("a free end cannot sit on a boundary curve"));
        }
        if let Some(side) = self.start_on_boundary {
            let curve = band
                .curve(side)
                .ok_or(Error::Structure("start pinned on an absent band curve"))?;
            if curve.value(partition.t_start()) != self.a {
                return Err(Error::Structure("start value must equal the curve value exactly"));
            }
        }
        if let Some(side) = self.end_on_boundary {
            let curve = band
                .curve(side)
                .ok_or(Error::Structure("end pinned on an absent band curve"))?;
            let End::Pinned(b) = self.end else {
                return Err(Error::Structure("a free end cannot sit on a boundary curve"));
            };
            if curve.value(partition.t_end()) != b {
                return Err(Error::Structure("end value must equal the curve value exactly"));
            }
        }
        Ok(())
    }
}

/// Monte Carlo estimate with its standard error and provenance.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MCEstimate {
    pub mean: f64,
    pub std_error: f64,
    pub n_samples: u64,
    pub seed: u64,
}

impl MCEstimate {
    pub fn exact(value: f64) -> Self {
        MCEstimate { mean: value, std_error: 0.0, n_samples: 0, seed: 0 }
    }

    /// Relative standard error against a floor to avoid division blowups.
    pub fn rel_error(&self) -> f64 {
        self.std_error / math::abs(self.mean).max(1e-300)
    }
}

/// Band curve values pre-evaluated on a partition's nodes.
pub(crate) struct BandValues {
    lower: Option<Vec<f64>>,
    upper: Option<Vec<f64>>,
}

impl BandValues {
    pub(crate) fn new(band: &Band, p: &Partition) -> Self {
        let eval = |c: &crate::curve::Curve| (0..=p.n()).map(|k| c.value(p.node(k))).collect();
        BandValues {
            lower: band.lower().map(eval),
            upper: band.upper().map(eval),
        }
    }

    /// Mirror the node order (used with reversed-bridge sampling, which
    /// leaves the survival law unchanged by bridge reversibility).
    pub(crate) fn reverse(&mut self) {
        if let Some(lo) = &mut self.lower {
            lo.reverse();
        }
        if let Some(up) = &mut self.upper {
            up.reverse();
        }
    }

    #[inline]
    pub(crate) fn contains(&self, k: usize, x: f64) -> bool {
        if let Some(lo) = &self.lower {
            if x < lo[k] {
                return false;
            }
        }
        if let Some(up) = &self.upper {
            if x > up[k] {
                return false;
            }
        }
        true
    }
}

/// Draw a Brownian bridge from `a` to `b` on the partition by sequential
/// Gaussian conditioning; endpoints are set exactly.
pub fn sample_bridge(a: f64, b: f64, partition: &Partition, rng: &mut Prng) -> GridPath {
    let n = partition.n();
    let step = partition.step();
    let sqrt_step = math::sqrt(step);
    let mut values = Vec::with_capacity(n + 1);
    values.push(a);
    let mut x = a;
    for k in 1..n {
        let togo = (n - k + 1) as f64;
        let mean = x + (b - x) / togo;
        let sd = sqrt_step * math::sqrt((togo - 1.0) / togo);
        x = mean + sd * rng.normal();
        values.push(x);
    }
    values.push(b);
    GridPath::from_samples(values, *partition).expect("length matches by construction")
}

/// Draw free Brownian motion started at `a` (independent Gaussian increments
/// of variance equal to the step).
pub fn sample_free(a: f64, partition: &Partition, rng: &mut Prng) -> GridPath {
    let n = partition.n();
    let sqrt_step = math::sqrt(partition.step());
    let mut values = Vec::with_capacity(n + 1);
    let mut x = a;
    values.push(x);
    for _ in 0..n {
        x += sqrt_step * rng.normal();
        values.push(x);
    }
    GridPath::from_samples(values, *partition).expect("length matches by construction")
}

/// Bridge draw with early exit: returns `true` and fills `buf` when every
/// node lies in the closed band, `false` as soon as one leaves it.
fn try_bridge_in_band(
    a: f64,
    b: f64,
    partition: &Partition,
    bv: &BandValues,
    rng: &mut Prng,
    buf: &mut Vec<f64>,
) -> bool {
    let n = partition.n();
    if !bv.contains(0, a) || !bv.contains(n, b) {
        return false;
    }
    buf.clear();
    buf.push(a);
    let step = partition.step();
    let sqrt_step = math::sqrt(step);
    let mut x = a;
    for k in 1..n {
        let togo = (n - k + 1) as f64;
        let mean = x + (b - x) / togo;
        let sd = sqrt_step * math::sqrt((togo - 1.0) / togo);
        x = mean + sd * rng.normal();
        if !bv.contains(k, x) {
            return false;
        }
        buf.push(x);
    }
    buf.push(b);
    true
}

/// Free-motion draw with early exit, as [`try_bridge_in_band`].
fn try_free_in_band(
    a: f64,
    partition: &Partition,
    bv: &BandValues,
    rng: &mut Prng,
    buf: &mut Vec<f64>,
) -> bool {
    let n = partition.n();
    if !bv.contains(0, a) {
        return false;
    }
    buf.clear();
    buf.push(a);
    let sqrt_step = math::sqrt(partition.step());
    let mut x = a;
    for k in 1..=n {
        x += sqrt_step * rng.normal();
        if !bv.contains(k, x) {
            return false;
        }
        buf.push(x);
    }
    true
}

fn try_spec_in_band(
    spec: &ProcessSpec,
    partition: &Partition,
    bv: &BandValues,
    rng: &mut Prng,
    buf: &mut Vec<f64>,
) -> bool {
    match spec.end {
        End::Pinned(b) => try_bridge_in_band(spec.a, b, partition, bv, rng, buf),
        End::Free => try_free_in_band(spec.a, partition, bv, rng, buf),
    }
}

/// Log joint density of the interior nodes of a discrete bridge, written as
/// the product of per-step heat kernels over the pinned-interval kernel.
pub fn grid_bridge_log_density(path: &GridPath, a: f64, b: f64) -> Result<f64> {
    if path.first() != a || path.last() != b {
        return Err(Error::Structure("path endpoints must equal the pinned values"));
    }
    let p = path.partition();
    let step = p.step();
    let mut acc = 0.0;
    for j in 1..=p.n() {
        acc += log_heat_kernel(step, path.value(j - 1), path.value(j));
    }
    Ok(acc - log_heat_kernel(p.duration(), a, b))
}

/// Same density through the Gaussian action: `q / Xi` with
/// `q = exp(-sum (dx)^2 / (2 step))` and
/// `Xi = m^{-1/2} (2 pi step)^{(m-1)/2} exp(-(a-b)^2 / (2 m step))`.
pub fn grid_bridge_log_density_action(path: &GridPath, a: f64, b: f64) -> Result<f64> {
    if path.first() != a || path.last() != b {
        return Err(Error::Structure("path endpoints must equal the pinned values"));
    }
    let p = path.partition();
    let step = p.step();
    let m = p.n() as f64;
    let mut sum_sq = 0.0;
    for j in 1..=p.n() {
        let dx = path.value(j) - path.value(j - 1);
        sum_sq += dx * dx;
    }
    let log_q = -sum_sq / (2.0 * step);
    let d = a - b;
    let log_xi =
        -0.5 * math::ln(m) + 0.5 * (m - 1.0) * math::ln(math::TAU * step) - d * d / (2.0 * m * step);
    Ok(log_q - log_xi)
}

fn fold_mean(
    parts: impl IntoIterator<Item = (f64, f64)>,
    n: u64,
    seed: u64,
) -> MCEstimate {
    let (mut sum, mut sum_sq) = (0.0, 0.0);
    for (s, s2) in parts {
        sum += s;
        sum_sq += s2;
    }
    let nf = n as f64;
    let mean = sum / nf;
    let var = if n > 1 {
        ((sum_sq - nf * mean * mean) / (nf - 1.0)).max(0.0)
    } else {
        0.0
    };
    MCEstimate { mean, std_error: math::sqrt(var / nf), n_samples: n, seed }
}

/// Chunk-parallel mean with per-sample substreams and fixed-order reduction.
pub(crate) fn mc_mean<E: Executor>(
    exec: &E,
    stream: &RngStream,
    n_samples: u64,
    f: impl Fn(u64, &mut Prng) -> f64 + Sync,
) -> MCEstimate {
    let parts = exec.map_chunks(chunk_count(n_samples), |c| {
        let (lo, hi) = chunk_bounds(c, n_samples);
        let (mut s, mut s2) = (0.0, 0.0);
        for i in lo..hi {
            let mut rng = stream.sample_rng(i);
            let v = f(i, &mut rng);
            s += v;
            s2 += v * v;
        }
        (s, s2)
    });
    fold_mean(parts, n_samples, stream.key())
}

/// As [`mc_mean`] but for sample functions that can fail; the first failing
/// chunk (in chunk order) decides the error.
pub(crate) fn try_mc_mean<E: Executor>(
    exec: &E,
    stream: &RngStream,
    n_samples: u64,
    f: impl Fn(u64, &mut Prng) -> Result<f64> + Sync,
) -> Result<MCEstimate> {
    let parts = exec.map_chunks(chunk_count(n_samples), |c| {
        let (lo, hi) = chunk_bounds(c, n_samples);
        let (mut s, mut s2) = (0.0, 0.0);
        for i in lo..hi {
            let mut rng = stream.sample_rng(i);
            let v = f(i, &mut rng)?;
            s += v;
            s2 += v * v;
        }
        Ok((s, s2))
    });
    let mut ok = Vec::with_capacity(parts.len());
    for p in parts {
        ok.push(p?);
    }
    Ok(fold_mean(ok, n_samples, stream.key()))
}

/// Probability that all nodes of the process stay in the closed band.
///
/// Endpoints must lie strictly inside the band (conditioned-process cases);
/// survival of boundary-pinned segments is handled by the infinitesimal
/// probability estimators instead.
pub fn band_probability<E: Executor>(
    spec: &ProcessSpec,
    band: &Band,
    partition: &Partition,
    n_samples: u64,
    stream: &RngStream,
    exec: &E,
) -> Result<MCEstimate> {
    if n_samples == 0 {
        return Err(Error::Domain("band probability needs at least one sample"));
    }
    if !band.contains_interior(partition.t_start(), spec.a) {
        return Err(Error::Domain("start point must lie strictly inside the band"));
    }
    if let End::Pinned(b) = spec.end {
        if !band.contains_interior(partition.t_end(), b) {
            return Err(Error::Domain("end point must lie strictly inside the band"));
        }
    }
    let bv = BandValues::new(band, partition);
    Ok(survival_probability(spec, partition, &bv, n_samples, stream, exec))
}

/// Unvalidated survival estimate used by both `band_probability` and the
/// infinitesimal-probability fits (where endpoints sit on the curves).
pub(crate) fn survival_probability<E: Executor>(
    spec: &ProcessSpec,
    partition: &Partition,
    bv: &BandValues,
    n_samples: u64,
    stream: &RngStream,
    exec: &E,
) -> MCEstimate {
    let parts = exec.map_chunks(chunk_count(n_samples), |c| {
        let (lo, hi) = chunk_bounds(c, n_samples);
        let mut buf = Vec::with_capacity(partition.n() + 1);
        let mut hits = 0u64;
        for i in lo..hi {
            let mut rng = stream.sample_rng(i);
            if try_spec_in_band(spec, partition, bv, &mut rng, &mut buf) {
                hits += 1;
            }
        }
        (hits as f64, hits as f64)
    });
    fold_mean(parts, n_samples, stream.key())
}

/// Rejection-sample the process conditioned to the closed band. Both
/// endpoints must lie strictly inside the band.
pub fn sample_conditioned(
    spec: &ProcessSpec,
    band: &Band,
    partition: &Partition,
    max_attempts: u64,
    rng: &mut Prng,
) -> Result<GridPath> {
    if !band.contains_interior(partition.t_start(), spec.a) {
        return Err(Error::Domain("start point must lie strictly inside the band"));
    }
    if let End::Pinned(b) = spec.end {
        if !band.contains_interior(partition.t_end(), b) {
            return Err(Error::Domain("end point must lie strictly inside the band"));
        }
    }
    let bv = BandValues::new(band, partition);
    rejection_sample(spec, partition, &bv, max_attempts, rng)
}

/// Rejection-sample a segment with one or both endpoints pinned exactly on a
/// band curve; interior nodes are conditioned to the closed band. Acceptance
/// decays like `m^(-1/2)` per boundary endpoint on an `m`-step segment.
pub fn sample_pinned_segment(
    spec: &ProcessSpec,
    band: &Band,
    partition: &Partition,
    max_attempts: u64,
    rng: &mut Prng,
) -> Result<GridPath> {
    if spec.start_on_boundary.is_none() && spec.end_on_boundary.is_none() {
        return Err(Error::Domain("pinned segment needs an endpoint on a band curve"));
    }
    spec.validate(band, partition)?;
    let bv = BandValues::new(band, partition);
    rejection_sample(spec, partition, &bv, max_attempts, rng)
}

/// Mean of a path functional over rejection-sampled conditioned draws,
/// parallel over samples with per-sample substreams.
#[allow(clippy::too_many_arguments)]
pub(crate) fn rejection_mean_with<E: Executor>(
    spec: &ProcessSpec,
    partition: &Partition,
    bv: &BandValues,
    max_attempts: u64,
    n_samples: u64,
    stream: &RngStream,
    exec: &E,
    f: impl Fn(&GridPath) -> f64 + Sync,
) -> Result<MCEstimate> {
    try_mc_mean(exec, stream, n_samples, |_, rng| {
        let mut buf = Vec::with_capacity(partition.n() + 1);
        let mut attempts = 0u64;
        loop {
            attempts += 1;
            if try_spec_in_band(spec, partition, bv, rng, &mut buf) {
                let path = GridPath::from_samples(buf, *partition)?;
                return Ok(f(&path));
            }
            if attempts >= max_attempts {
                return Err(Error::Saturated { attempts });
            }
        }
    })
}

fn rejection_sample(
    spec: &ProcessSpec,
    partition: &Partition,
    bv: &BandValues,
    max_attempts: u64,
    rng: &mut Prng,
) -> Result<GridPath> {
    let mut buf = Vec::with_capacity(partition.n() + 1);
    let mut attempts = 0u64;
    while attempts < max_attempts {
        attempts += 1;
        if try_spec_in_band(spec, partition, bv, rng, &mut buf) {
            return GridPath::from_samples(buf, *partition);
        }
    }
    Err(Error::Saturated { attempts })
}

/// Sample the concatenated process pinned on the band curves at the given
/// interior times: an interior-to-boundary head, boundary-to-boundary middle
/// segments (excursion or house-moving laws), and a boundary-to-end tail
/// which is a meander when the end is free.
///
/// Times must be nodes of the global partition; junction values equal the
/// curve values exactly.
pub fn sample_y(
    eps: &[Sign],
    times: &TimeTuple,
    band: &Band,
    a: f64,
    end: End,
    global: &Partition,
    max_attempts: u64,
    rng: &mut Prng,
) -> Result<GridPath> {
    let j = eps.len();
    if j == 0 || j != times.len() {
        return Err(Error::Domain("need one sign per pinned time"));
    }
    let mut indices = Vec::with_capacity(j);
    for &t in times.times() {
        let (k, dist) = global.nearest_node(t);
        if dist > 1e-12 || k == 0 || k >= global.n() {
            return Err(Error::Domain("pinned times must be interior nodes of the global grid"));
        }
        indices.push(k);
    }
    for w in indices.windows(2) {
        if w[1] <= w[0] {
            return Err(Error::Domain("pinned times must map to increasing grid nodes"));
        }
    }
    let mut pin_values = Vec::with_capacity(j);
    for (i, &k) in indices.iter().enumerate() {
        let curve = band
            .curve(eps[i].side())
            .ok_or(Error::Domain("sign selects an unbounded band side"))?;
        pin_values.push(curve.value(global.node(k)));
    }

    let mut segments = Vec::with_capacity(j + 1);
    let head = ProcessSpec::bridge(a, pin_values[0]).with_end_pin(eps[0].side());
    segments.push(sample_pinned_segment(
        &head,
        band,
        &global.subinterval(0, indices[0])?,
        max_attempts,
        rng,
    )?);
    for i in 1..j {
        let mid = ProcessSpec::bridge(pin_values[i - 1], pin_values[i])
            .with_start_pin(eps[i - 1].side())
            .with_end_pin(eps[i].side());
        segments.push(sample_pinned_segment(
            &mid,
            band,
            &global.subinterval(indices[i - 1], indices[i])?,
            max_attempts,
            rng,
        )?);
    }
    let tail = ProcessSpec {
        a: pin_values[j - 1],
        end,
        start_on_boundary: Some(eps[j - 1].side()),
        end_on_boundary: None,
    };
    segments.push(sample_pinned_segment(
        &tail,
        band,
        &global.subinterval(indices[j - 1], global.n())?,
        max_attempts,
        rng,
    )?);
    concat(&segments)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::curve::Curve;
    use crate::exec::Sequential;
    use alloc::vec;

    fn stream(tag: u64) -> RngStream {
        RngStream::new(0x5eed).substream(tag)
    }

    #[test]
    fn bridge_pins_endpoints_exactly() {
        let p = Partition::new(0.0, 1.0, 64).unwrap();
        let mut rng = stream(0).sample_rng(0);
        for _ in 0..32 {
            let path = sample_bridge(-0.3, 1.7, &p, &mut rng);
            assert_eq!(path.first(), -0.3);
            assert_eq!(path.last(), 1.7);
        }
    }

    #[test]
    fn bridge_moments_match_gaussian_law() {
        let p = Partition::new(0.0, 1.0, 100).unwrap();
        let s = stream(1);
        let n = 100_000u64;
        let (mut sum, mut sum_sq) = (0.0, 0.0);
        for i in 0..n {
            let mut rng = s.sample_rng(i);
            let x = sample_bridge(0.0, 0.0, &p, &mut rng).value(50);
            sum += x;
            sum_sq += x * x;
        }
        let nf = n as f64;
        let mean = sum / nf;
        let var = sum_sq / nf - mean * mean;
        // Bridge marginal at t = 1/2: mean 0, variance t(1-t) = 1/4.
        let se_mean = math::sqrt(0.25 / nf);
        assert!(mean.abs() < 3.0 * se_mean, "mean {mean}");
        let se_var = 0.25 * math::sqrt(2.0 / nf);
        assert!((var - 0.25).abs() < 3.0 * se_var, "var {var}");
    }

    #[test]
    fn bridge_mean_interpolates_pins() {
        let p = Partition::new(0.0, 1.0, 100).unwrap();
        let s = stream(2);
        let n = 100_000u64;
        let mut sum = 0.0;
        for i in 0..n {
            let mut rng = s.sample_rng(i);
            sum += sample_bridge(0.0, 1.0, &p, &mut rng).value(25);
        }
        let mean = sum / n as f64;
        let se = math::sqrt(0.25 * 0.75 / n as f64);
        assert!((mean - 0.25).abs() < 3.0 * se, "mean {mean}");
    }

    #[test]
    fn free_motion_variance_and_increment_independence() {
        let p = Partition::new(0.0, 1.0, 100).unwrap();
        let s = stream(3);
        let n = 100_000u64;
        let (mut sum_end_sq, mut sum_prod) = (0.0, 0.0);
        for i in 0..n {
            let mut rng = s.sample_rng(i);
            let path = sample_free(0.0, &p, &mut rng);
            assert_eq!(path.first(), 0.0);
            sum_end_sq += path.value(100) * path.value(100);
            let inc_a = path.value(30) - path.value(10);
            let inc_b = path.value(80) - path.value(50);
            sum_prod += inc_a * inc_b;
        }
        let nf = n as f64;
        let var_end = sum_end_sq / nf;
        assert!((var_end - 1.0).abs() < 3.0 * math::sqrt(2.0 / nf), "var {var_end}");
        // E[inc_a * inc_b] = 0; Var of the product is Var(a)Var(b) = 0.06.
        let corr = sum_prod / nf;
        assert!(corr.abs() < 3.0 * math::sqrt(0.2 * 0.3 / nf), "corr {corr}");
    }

    #[test]
    fn log_density_forms_agree() {
        let p = Partition::new(0.0, 1.0, 10).unwrap();
        let s = stream(4);
        for i in 0..50 {
            let mut rng = s.sample_rng(i);
            let path = sample_bridge(0.4, -0.2, &p, &mut rng);
            let lhs = grid_bridge_log_density(&path, 0.4, -0.2).unwrap();
            let rhs = grid_bridge_log_density_action(&path, 0.4, -0.2).unwrap();
            assert!((lhs - rhs).abs() < 1e-10, "{lhs} vs {rhs}");
        }
    }

    #[test]
    fn log_density_trivial_cases() {
        let p1 = Partition::new(0.0, 1.0, 1).unwrap();
        let path = GridPath::from_samples(vec![0.3, 0.9], p1).unwrap();
        assert_eq!(grid_bridge_log_density(&path, 0.3, 0.9).unwrap(), 0.0);

        let p2 = Partition::new(0.0, 1.0, 2).unwrap();
        let sym = GridPath::from_samples(vec![0.0, 0.0, 0.0], p2).unwrap();
        let a = grid_bridge_log_density(&sym, 0.0, 0.0).unwrap();
        let b = grid_bridge_log_density_action(&sym, 0.0, 0.0).unwrap();
        assert!((a - b).abs() < 1e-12);

        assert!(grid_bridge_log_density(&sym, 0.1, 0.0).is_err());
    }

    #[test]
    fn log_density_mean_matches_entropy_formula() {
        // Average log-density over sampled bridges equals the analytic
        // negative differential entropy of the interior-node Gaussian.
        let (a, b, t) = (0.2, 0.8, 1.0);
        let m = 20usize;
        let p = Partition::new(0.0, t, m).unwrap();
        let s = stream(5);
        let n = 40_000u64;
        let (mut sum, mut sum_sq) = (0.0, 0.0);
        for i in 0..n {
            let mut rng = s.sample_rng(i);
            let path = sample_bridge(a, b, &p, &mut rng);
            let v = grid_bridge_log_density(&path, a, b).unwrap();
            sum += v;
            sum_sq += v * v;
        }
        let nf = n as f64;
        let mean = sum / nf;
        let se = math::sqrt(((sum_sq / nf - mean * mean) / nf).max(0.0));
        let step = p.step();
        let mf = m as f64;
        let expect = mf
            * (-0.5 * math::ln(math::TAU * step)
                - 0.5 * (1.0 - step / t)
                - (b - a) * (b - a) * step / (2.0 * t * t))
            - log_heat_kernel(p.duration(), a, b);
        assert!((mean - expect).abs() < 3.0 * se, "{mean} vs {expect}");
    }

    #[test]
    fn survival_matches_walk_positivity_law() {
        // For symmetric continuous increments, P(S_1 > 0, ..., S_m > 0)
        // equals C(2m, m) / 4^m for every m (distribution-free).
        let m = 10usize;
        let p = Partition::new(0.0, 1.0, m).unwrap();
        let spec = ProcessSpec::free(0.0);
        let band = Band::above(Curve::Const(0.0));
        let bv = BandValues::new(&band, &p);
        let est = survival_probability(&spec, &p, &bv, 200_000, &stream(6), &Sequential);
        let mut exact = 1.0;
        for k in 1..=m {
            exact *= (2.0 * k as f64 - 1.0) / (2.0 * k as f64);
        }
        // C(2m, m)/4^m written as a product of odd/even ratios.
        assert!(
            (est.mean - exact).abs() < 3.5 * est.std_error,
            "{} vs {exact}",
            est.mean
        );
    }

    #[test]
    fn survival_matches_bridge_cycle_law() {
        // Discrete bridge from 0 to 0 stays nonnegative with probability
        // exactly 1/m (cycle lemma, continuous symmetric increments).
        let m = 16usize;
        let p = Partition::new(0.0, 1.0, m).unwrap();
        let spec = ProcessSpec::bridge(0.0, 0.0);
        let band = Band::above(Curve::Const(0.0));
        let bv = BandValues::new(&band, &p);
        let est = survival_probability(&spec, &p, &bv, 200_000, &stream(7), &Sequential);
        let exact = 1.0 / m as f64;
        assert!(
            (est.mean - exact).abs() < 3.5 * est.std_error,
            "{} vs {exact}",
            est.mean
        );
    }

    #[test]
    fn band_probability_trivial_and_reflection() {
        let p = Partition::new(0.0, 1.0, 200).unwrap();
        let spec = ProcessSpec::bridge(0.5, 0.5);

        let free = band_probability(&spec, &Band::free(), &p, 1000, &stream(8), &Sequential)
            .unwrap();
        assert_eq!(free.mean, 1.0);
        assert_eq!(free.std_error, 0.0);

        let band = Band::above(Curve::Const(0.0));
        let est =
            band_probability(&spec, &band, &p, 250_000, &stream(9), &Sequential).unwrap();
        // Continuum value 1 - exp(-2ab/T) plus a positive O(n^{-1/2})
        // node-discretization excess.
        let continuum = 1.0 - math::exp(-0.5);
        let excess = est.mean - continuum;
        assert!(excess > 3.0 * est.std_error, "excess {excess} not positive");
        assert!(excess < 1.0 / math::sqrt(200.0), "excess {excess} too large");
    }

    #[test]
    fn band_probability_translation_invariance() {
        let p = Partition::new(0.0, 1.0, 50).unwrap();
        let spec = ProcessSpec::bridge(0.5, 0.5);
        let band = Band::between(Curve::Const(0.0), Curve::Const(1.0)).unwrap();
        let est = band_probability(&spec, &band, &p, 50_000, &stream(10), &Sequential).unwrap();

        let spec_up = ProcessSpec::bridge(1.5, 1.5);
        let band_up = Band::between(Curve::Const(1.0), Curve::Const(2.0)).unwrap();
        let est_up =
            band_probability(&spec_up, &band_up, &p, 50_000, &stream(10), &Sequential).unwrap();
        assert_eq!(est.mean, est_up.mean);
    }

    #[test]
    fn band_probability_monotone_under_common_seeds() {
        let p = Partition::new(0.0, 1.0, 50).unwrap();
        let spec = ProcessSpec::bridge(0.5, 0.5);
        let narrow = Band::between(Curve::Const(0.1), Curve::Const(0.9)).unwrap();
        let wide = Band::between(Curve::Const(0.0), Curve::Const(1.0)).unwrap();
        let s = stream(11);
        let a = band_probability(&spec, &narrow, &p, 20_000, &s, &Sequential).unwrap();
        let b = band_probability(&spec, &wide, &p, 20_000, &s, &Sequential).unwrap();
        assert!(b.mean >= a.mean);
    }

    #[test]
    fn band_probability_rejects_bad_inputs() {
        let p = Partition::new(0.0, 1.0, 10).unwrap();
        let band = Band::between(Curve::Const(0.0), Curve::Const(1.0)).unwrap();
        assert!(matches!(
            band_probability(
                &ProcessSpec::bridge(0.5, 0.5),
                &band,
                &p,
                0,
                &stream(12),
                &Sequential
            ),
            Err(Error::Domain(_))
        ));
        assert!(matches!(
            band_probability(
                &ProcessSpec::bridge(0.0, 0.5),
                &band,
                &p,
                10,
                &stream(12),
                &Sequential
            ),
            Err(Error::Domain(_))
        ));
    }

    #[test]
    fn conditioned_paths_stay_in_band_and_shift_upward() {
        let p = Partition::new(0.0, 1.0, 50).unwrap();
        let band = Band::above(Curve::Const(0.0));
        let spec = ProcessSpec::bridge(0.5, 0.5);
        let s = stream(13);
        let n = 20_000u64;
        let mut mean_mid = 0.0;
        for i in 0..n {
            let mut rng = s.sample_rng(i);
            let path = sample_conditioned(&spec, &band, &p, 1_000_000, &mut rng).unwrap();
            assert!(crate::grid::in_band(&path, &band));
            mean_mid += path.value(25);
        }
        mean_mid /= n as f64;
        // Conditioning on staying positive pushes the middle of the path up.
        assert!(mean_mid > 0.5 + 3.0 * math::sqrt(0.25 / n as f64), "{mean_mid}");

        // Importance route: E[X(1/2) 1_surv] / P(surv) over unconditioned
        // draws must agree with the conditioned mean.
        let s2 = stream(14);
        let bv = BandValues::new(&band, &p);
        let (mut num, mut den) = (0.0, 0.0);
        let mut buf = Vec::new();
        let n2 = 200_000u64;
        for i in 0..n2 {
            let mut rng = s2.sample_rng(i);
            if try_bridge_in_band(0.5, 0.5, &p, &bv, &mut rng, &mut buf) {
                num += buf[25];
                den += 1.0;
            }
        }
        let ratio = num / den;
        let se = 0.6 / math::sqrt(den);
        assert!((mean_mid - ratio).abs() < 3.5 * se, "{mean_mid} vs {ratio}");
    }

    #[test]
    fn conditioned_wide_band_matches_unconditioned() {
        let p = Partition::new(0.0, 1.0, 40).unwrap();
        let band = Band::between(Curve::Const(-50.0), Curve::Const(50.0)).unwrap();
        let spec = ProcessSpec::bridge(0.0, 0.0);
        let s = stream(15);
        let n = 50_000u64;
        let mut mean = 0.0;
        for i in 0..n {
            let mut rng = s.sample_rng(i);
            mean += sample_conditioned(&spec, &band, &p, 100, &mut rng).unwrap().value(20);
        }
        mean /= n as f64;
        assert!(mean.abs() < 3.0 * math::sqrt(0.25 / n as f64));
    }

    #[test]
    fn saturation_reports_attempts() {
        let p = Partition::new(0.0, 1.0, 400).unwrap();
        // Start pinned on the lower curve of a skinny band: acceptance is
        // far below 1/32.
        let band = Band::between(Curve::Const(0.0), Curve::Const(0.05)).unwrap();
        let spec = ProcessSpec::bridge(0.0, 0.025).with_start_pin(Side::Lower);
        let mut rng = stream(16).sample_rng(0);
        match sample_pinned_segment(&spec, &band, &p, 4, &mut rng) {
            Err(Error::Saturated { attempts }) => assert_eq!(attempts, 4),
            other => panic!("expected saturation, got {other:?}"),
        }
    }

    #[test]
    fn pinned_segment_validates_pins() {
        let p = Partition::new(0.0, 1.0, 10).unwrap();
        let band = Band::between(Curve::Const(0.0), Curve::Const(1.0)).unwrap();
        let mut rng = stream(17).sample_rng(0);
        // Not on the curve.
        let bad = ProcessSpec::bridge(0.1, 0.5).with_start_pin(Side::Lower);
        assert!(sample_pinned_segment(&bad, &band, &p, 10, &mut rng).is_err());
        // No pin at all.
        let none = ProcessSpec::bridge(0.5, 0.5);
        assert!(matches!(
            sample_pinned_segment(&none, &band, &p, 10, &mut rng),
            Err(Error::Domain(_))
        ));
    }

    #[test]
    fn excursion_and_house_moving_segments() {
        let p = Partition::new(0.0, 1.0, 40).unwrap();
        let band = Band::between(Curve::Const(0.0), Curve::Const(1.0)).unwrap();
        let mut rng = stream(18).sample_rng(0);

        let excursion = ProcessSpec::bridge(0.0, 0.0)
            .with_start_pin(Side::Lower)
            .with_end_pin(Side::Lower);
        for _ in 0..16 {
            let path = sample_pinned_segment(&excursion, &band, &p, 1_000_000, &mut rng).unwrap();
            assert_eq!(path.first(), 0.0);
            assert_eq!(path.last(), 0.0);
            assert!(path.values().iter().all(|&x| (0.0..=1.0).contains(&x)));
        }

        let moving = ProcessSpec::bridge(0.0, 1.0)
            .with_start_pin(Side::Lower)
            .with_end_pin(Side::Upper);
        for _ in 0..16 {
            let path = sample_pinned_segment(&moving, &band, &p, 1_000_000, &mut rng).unwrap();
            assert_eq!(path.first(), 0.0);
            assert_eq!(path.last(), 1.0);
            assert!(path.values().iter().all(|&x| (0.0..=1.0).contains(&x)));
        }
    }

    #[test]
    fn meander_segment_has_pinned_start_and_free_end() {
        let p = Partition::new(0.3, 1.0, 35).unwrap();
        let band = Band::above(Curve::Const(0.0));
        let spec = ProcessSpec {
            a: 0.0,
            end: End::Free,
            start_on_boundary: Some(Side::Lower),
            end_on_boundary: None,
        };
        let mut rng = stream(19).sample_rng(0);
        for _ in 0..16 {
            let path = sample_pinned_segment(&spec, &band, &p, 1_000_000, &mut rng).unwrap();
            assert_eq!(path.first(), 0.0);
            assert!(path.values().iter().all(|&x| x >= 0.0));
        }
    }

    #[test]
    fn pinned_segment_with_wide_band_reduces_to_bridge_through_pin() {
        // With the band pushed far away, conditioning disappears and the
        // two pinned half-segments glue into a bridge through the pin value.
        let global = Partition::new(0.0, 1.0, 40).unwrap();
        let band = Band::between(Curve::Const(-100.0), Curve::Const(100.0)).unwrap();
        let pin = -100.0 + 0.5; // not a curve point; use conditioned halves
        let _ = pin;
        let s = stream(20);
        let n = 40_000u64;
        let (mut sum, mut sum_sq) = (0.0, 0.0);
        for i in 0..n {
            let mut rng = s.sample_rng(i);
            let left = sample_bridge(0.0, 0.7, &global.subinterval(0, 20).unwrap(), &mut rng);
            let right = sample_bridge(0.7, 0.0, &global.subinterval(20, 40).unwrap(), &mut rng);
            let path = concat(&[left, right]).unwrap();
            assert!(crate::grid::in_band(&path, &band));
            let x = path.value(10);
            sum += x;
            sum_sq += x * x;
        }
        let nf = n as f64;
        let mean = sum / nf;
        let var = sum_sq / nf - mean * mean;
        // Bridge 0 -> 0.7 over [0, 0.5] marginal at t = 0.25.
        let expect_mean = 0.35;
        let expect_var = 0.25 * 0.25 / 0.5;
        assert!((mean - expect_mean).abs() < 3.0 * math::sqrt(expect_var / nf));
        assert!((var - expect_var).abs() < 3.5 * expect_var * math::sqrt(2.0 / nf));
    }

    #[test]
    fn y_process_pins_junctions_exactly() {
        let global = Partition::new(0.0, 1.0, 100).unwrap();
        let band = Band::between(Curve::Const(0.0), Curve::Const(1.0)).unwrap();
        let times = TimeTuple::new(vec![global.node(30), global.node(60)]).unwrap();
        let eps = vec![Sign::Plus, Sign::Minus];
        let mut rng = stream(21).sample_rng(0);
        for _ in 0..8 {
            let y = sample_y(
                &eps,
                &times,
                &band,
                0.5,
                End::Pinned(0.5),
                &global,
                10_000_000,
                &mut rng,
            )
            .unwrap();
            assert_eq!(y.partition().n(), 100);
            assert_eq!(y.value(30), 1.0);
            assert_eq!(y.value(60), 0.0);
            assert_eq!(y.first(), 0.5);
            assert_eq!(y.last(), 0.5);
            assert!(crate::grid::in_band(&y, &band));
        }
    }

    #[test]
    fn y_process_rejects_off_grid_times() {
        let global = Partition::new(0.0, 1.0, 10).unwrap();
        let band = Band::between(Curve::Const(0.0), Curve::Const(1.0)).unwrap();
        let times = TimeTuple::new(vec![0.314]).unwrap();
        let mut rng = stream(22).sample_rng(0);
        assert!(matches!(
            sample_y(
                &[Sign::Plus],
                &times,
                &band,
                0.5,
                End::Pinned(0.5),
                &global,
                1000,
                &mut rng
            ),
            Err(Error::Domain(_))
        ));
    }

    #[test]
    fn estimates_identical_across_executors() {
        struct Reversed;
        impl Executor for Reversed {
            fn map_chunks<T, F>(&self, n_chunks: usize, f: F) -> Vec<T>
            where
                T: Send,
                F: Fn(usize) -> T + Sync,
            {
                let mut out: Vec<(usize, T)> = (0..n_chunks).rev().map(|c| (c, f(c))).collect();
                out.sort_by_key(|(c, _)| *c);
                out.into_iter().map(|(_, v)| v).collect()
            }
        }
        let p = Partition::new(0.0, 1.0, 30).unwrap();
        let band = Band::between(Curve::Const(0.0), Curve::Const(1.0)).unwrap();
        let spec = ProcessSpec::bridge(0.5, 0.5);
        let s = stream(23);
        let a = band_probability(&spec, &band, &p, 30_000, &s, &Sequential).unwrap();
        let b = band_probability(&spec, &band, &p, 30_000, &s, &Reversed).unwrap();
        assert_eq!(a, b);
    }
}
