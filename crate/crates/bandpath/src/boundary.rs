//! First- and second-order infinitesimal probabilities and the boundary
//! densities assembled from them.
//!
//! The survival probability of a discrete segment with an endpoint pinned on
//! a band curve decays like `m^(-1/2)` per pinned endpoint in the number of
//! grid steps `m`. Rescaling by `sqrt(m)` (one pin) or `m` (two pins) and
//! extrapolating the residual `m^(-1/2)` correction gives the definitional
//! route to the limits; an independent route goes through Cameron-Martin
//! weight ratios and one-side containment probabilities.

use alloc::collections::BTreeMap;
use alloc::vec::Vec;

use crate::curve::{Band, Curve, Side, Sign};
use crate::error::{Error, Result};
use crate::exec::Executor;
use crate::grid::Partition;
use crate::math;
use crate::measure::{cameron_martin, heat_kernel_unchecked};
use crate::rng::RngStream;
use crate::sampler::{
    survival_probability, BandValues, End, MCEstimate, ProcessSpec,
};

/// Endpoint of a segment: either a given interior value or sitting exactly on
/// one of the band curves.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum EndpointSpec {
    Interior(f64),
    OnCurve(Side),
}

impl EndpointSpec {
    fn resolve(&self, band: &Band, t: f64) -> Result<(f64, Option<Side>)> {
        match self {
            EndpointSpec::Interior(v) => Ok((*v, None)),
            EndpointSpec::OnCurve(side) => {
                let curve = band
                    .curve(*side)
                    .ok_or(Error::Domain("endpoint pinned on an absent band curve"))?;
                Ok((curve.value(t), Some(*side)))
            }
        }
    }
}

/// Grid sizes and per-size sample budget for the scaled-limit fits.
#[derive(Clone, Debug, PartialEq)]
pub struct DeltaSchedule {
    pub sizes: Vec<usize>,
    pub samples: u64,
}

impl DeltaSchedule {
    pub fn new(sizes: Vec<usize>, samples: u64) -> Result<Self> {
        if sizes.len() < 2 {
            return Err(Error::Domain("schedule needs at least two grid sizes"));
        }
        for w in sizes.windows(2) {
            if w[1] <= w[0] {
                return Err(Error::Domain("schedule sizes must be strictly increasing"));
            }
        }
        if samples < 10_000 {
            return Err(Error::Domain("schedule needs at least 10^4 samples per size"));
        }
        Ok(DeltaSchedule { sizes, samples })
    }

    /// Desk-scale default: sizes 50/100/200.
    pub fn desk(samples: u64) -> Self {
        DeltaSchedule { sizes: alloc::vec![50, 100, 200], samples }
    }
}

/// Budgets for the Cameron-Martin (lemma) route.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LemmaBudget {
    pub grid: usize,
    pub samples: u64,
    pub max_attempts: u64,
}

impl LemmaBudget {
    pub fn desk(samples: u64) -> Self {
        LemmaBudget { grid: 160, samples, max_attempts: 10_000_000 }
    }
}

/// Weighted least squares of `y = c0 + c1 * m^(-1/2)`; returns the intercept,
/// its standard error, and the slope.
pub fn fit_inverse_sqrt(points: &[(f64, f64, f64)]) -> Result<(f64, f64, f64)> {
    if points.len() < 2 {
        return Err(Error::Domain("scaled-limit fit needs at least two points"));
    }
    let (mut sw, mut su, mut suu, mut sy, mut suy) = (0.0, 0.0, 0.0, 0.0, 0.0);
    for &(m, y, se) in points {
        let u = 1.0 / math::sqrt(m);
        let w = 1.0 / (se * se).max(1e-300);
        sw += w;
        su += w * u;
        suu += w * u * u;
        sy += w * y;
        suy += w * u * y;
    }
    let det = sw * suu - su * su;
    if det <= 0.0 || !det.is_finite() {
        return Err(Error::Degenerate("singular scaled-limit fit"));
    }
    let c0 = (suu * sy - su * suy) / det;
    let c1 = (sw * suy - su * sy) / det;
    let se0 = math::sqrt(suu / det);
    Ok((c0, se0, c1))
}

/// Binomial standard error with a Laplace floor so zero-hit sizes keep a
/// finite weight in the fit.
fn survival_se_floor(p_hat: f64, n: u64) -> f64 {
    let nf = n as f64;
    let p_eff = (p_hat * nf + 1.0) / (nf + 2.0);
    math::sqrt(p_eff * (1.0 - p_eff) / nf)
}

struct SegmentSetup {
    a: f64,
    end: End,
    start_pin: Option<Side>,
    end_pin: Option<Side>,
}

fn resolve_segment(
    band: &Band,
    t1: f64,
    t2: f64,
    start: EndpointSpec,
    end: Option<EndpointSpec>,
) -> Result<SegmentSetup> {
    if t1 >= t2 {
        return Err(Error::Domain("segment needs t1 < t2"));
    }
    let (a, start_pin) = start.resolve(band, t1)?;
    match end {
        Some(e) => {
            let (b, end_pin) = e.resolve(band, t2)?;
            Ok(SegmentSetup { a, end: End::Pinned(b), start_pin, end_pin })
        }
        None => Ok(SegmentSetup { a, end: End::Free, start_pin: None, end_pin: None }),
    }
}

/// Survival probability of the segment at grid size `m`, exploiting bridge
/// reversibility to start the draw at a pinned-on-curve endpoint whenever
/// possible (deaths then happen early and rejection is cheap).
fn segment_survival<E: Executor>(
    band: &Band,
    t1: f64,
    t2: f64,
    setup: &SegmentSetup,
    m: usize,
    samples: u64,
    stream: &RngStream,
    exec: &E,
) -> Result<MCEstimate> {
    let partition = Partition::new(t1, t2, m)?;
    let reversed = matches!(setup.end, End::Pinned(_))
        && setup.end_pin.is_some()
        && setup.start_pin.is_none();
    let (spec, bv) = if reversed {
        let End::Pinned(b) = setup.end else { unreachable!() };
        let spec = ProcessSpec {
            a: b,
            end: End::Pinned(setup.a),
            start_on_boundary: setup.end_pin,
            end_on_boundary: None,
        };
        let mut bv = BandValues::new(band, &partition);
        bv.reverse();
        (spec, bv)
    } else {
        let spec = ProcessSpec {
            a: setup.a,
            end: setup.end,
            start_on_boundary: setup.start_pin,
            end_on_boundary: setup.end_pin,
        };
        (spec, BandValues::new(band, &partition))
    };
    let mut est = survival_probability(&spec, &partition, &bv, samples, stream, exec);
    est.std_error = est.std_error.max(survival_se_floor(est.mean, samples));
    Ok(est)
}

fn scaled_survival_fit<E: Executor>(
    band: &Band,
    t1: f64,
    t2: f64,
    setup: &SegmentSetup,
    scale_power: f64,
    schedule: &DeltaSchedule,
    stream: &RngStream,
    exec: &E,
) -> Result<MCEstimate> {
    let mut points = Vec::with_capacity(schedule.sizes.len());
    let mut any_positive = false;
    for (idx, &m) in schedule.sizes.iter().enumerate() {
        let est = segment_survival(
            band,
            t1,
            t2,
            setup,
            m,
            schedule.samples,
            &stream.substream(idx as u64),
            exec,
        )?;
        let scale = if scale_power == 1.0 {
            m as f64
        } else {
            math::sqrt(m as f64)
        };
        if est.mean > 0.0 {
            any_positive = true;
        }
        points.push((m as f64, scale * est.mean, scale * est.std_error));
    }
    if !any_positive {
        return Err(Error::Degenerate("band survival vanished at every grid size"));
    }
    let (c0, se0, _slope) = fit_inverse_sqrt(&points)?;
    Ok(MCEstimate {
        mean: c0,
        std_error: se0,
        n_samples: schedule.samples * schedule.sizes.len() as u64,
        seed: stream.key(),
    })
}

/// First-order infinitesimal probability by its defining scaled limit:
/// fit `sqrt(m) * P(survive)` in `m^(-1/2)` and return the intercept.
/// Exactly one endpoint must sit on a band curve.
pub fn delta_p_first_def<E: Executor>(
    band: &Band,
    t1: f64,
    t2: f64,
    start: EndpointSpec,
    end: EndpointSpec,
    schedule: &DeltaSchedule,
    stream: &RngStream,
    exec: &E,
) -> Result<MCEstimate> {
    let setup = resolve_segment(band, t1, t2, start, Some(end))?;
    if setup.start_pin.is_some() == setup.end_pin.is_some() {
        return Err(Error::Domain("first-order limit needs exactly one endpoint on a curve"));
    }
    scaled_survival_fit(band, t1, t2, &setup, 0.5, schedule, stream, exec)
}

/// Second-order infinitesimal probability: fit `m * P(survive)`; both
/// endpoints must sit on band curves.
pub fn delta_p_second<E: Executor>(
    band: &Band,
    t1: f64,
    t2: f64,
    start: EndpointSpec,
    end: EndpointSpec,
    schedule: &DeltaSchedule,
    stream: &RngStream,
    exec: &E,
) -> Result<MCEstimate> {
    let setup = resolve_segment(band, t1, t2, start, Some(end))?;
    if setup.start_pin.is_none() || setup.end_pin.is_none() {
        return Err(Error::Domain("second-order limit needs both endpoints on curves"));
    }
    scaled_survival_fit(band, t1, t2, &setup, 1.0, schedule, stream, exec)
}

/// Free-end first-order infinitesimal probability: the start sits on a curve,
/// the end is unconstrained.
pub fn delta_p_free<E: Executor>(
    band: &Band,
    t1: f64,
    t2: f64,
    start: EndpointSpec,
    schedule: &DeltaSchedule,
    stream: &RngStream,
    exec: &E,
) -> Result<MCEstimate> {
    let (a, start_pin) = start.resolve(band, t1)?;
    if start_pin.is_none() {
        return Err(Error::Domain("free-end limit needs the start on a curve"));
    }
    let setup = SegmentSetup { a, end: End::Free, start_pin, end_pin: None };
    scaled_survival_fit(band, t1, t2, &setup, 0.5, schedule, stream, exec)
}

/// Expectation of a path functional under a rejection-sampled conditioned
/// segment law, parallel over samples.
fn rejection_mean<E: Executor>(
    spec: &ProcessSpec,
    partition: &Partition,
    band: &Band,
    max_attempts: u64,
    n_samples: u64,
    stream: &RngStream,
    exec: &E,
    f: impl Fn(&crate::grid::GridPath) -> f64 + Sync,
) -> Result<MCEstimate> {
    spec.validate(band, partition)?;
    let bv = BandValues::new(band, partition);
    crate::sampler::rejection_mean_with(spec, partition, &bv, max_attempts, n_samples, stream, exec, f)
}

/// Cameron-Martin coefficient for a segment with one endpoint on the curve
/// `f` at signed distance levels `alpha`, `beta` from it:
/// `2|alpha - beta| / (t2 - t1)` times the ratio of tilted-path expectations
/// (conditioned to stay nonnegative in the numerator).
#[allow(clippy::too_many_arguments)]
fn cm_coefficient<E: Executor>(
    g: &Curve,
    t1: f64,
    t2: f64,
    alpha: f64,
    beta: f64,
    budget: &LemmaBudget,
    stream: &RngStream,
    exec: &E,
) -> Result<(f64, f64)> {
    let base = 2.0 * math::abs(alpha - beta) / (t2 - t1);
    if g.is_const() {
        return Ok((base, 0.0));
    }
    let partition = Partition::new(t1, t2, budget.grid)?;
    let zero_band = Band::above(Curve::Const(0.0));
    let mut spec = ProcessSpec::bridge(alpha, beta);
    if alpha == 0.0 {
        spec = spec.with_start_pin(Side::Lower);
    } else {
        spec = spec.with_end_pin(Side::Lower);
    }
    let num = rejection_mean(
        &spec,
        &partition,
        &zero_band,
        budget.max_attempts,
        budget.samples,
        &stream.substream(1),
        exec,
        |path| cameron_martin(g, path),
    )?;
    let den = crate::sampler::mc_mean(
        exec,
        &stream.substream(2),
        budget.samples,
        |_, rng| {
            let path = crate::sampler::sample_bridge(alpha, beta, &partition, rng);
            cameron_martin(g, &path)
        },
    );
    if num.mean <= 0.0 || den.mean <= 0.0 {
        return Err(Error::Degenerate("Cameron-Martin expectation vanished"));
    }
    let value = base * num.mean / den.mean;
    let rel = math::sqrt(math::sq(num.rel_error()) + math::sq(den.rel_error()));
    Ok((value, value * rel))
}

/// Probability that the segment conditioned to the pinned curve's side also
/// respects the opposite curve. Exact one when the opposite side is absent;
/// otherwise estimated at two grid sizes and extrapolated in `m^(-1/2)`,
/// since the one-sided conditioning leaves a grid-boundary defect of that
/// order in the containment fraction.
#[allow(clippy::too_many_arguments)]
fn containment_probability<E: Executor>(
    band: &Band,
    side: Side,
    t1: f64,
    t2: f64,
    setup: &SegmentSetup,
    budget: &LemmaBudget,
    stream: &RngStream,
    exec: &E,
) -> Result<(f64, f64)> {
    let other_side = match side {
        Side::Lower => Side::Upper,
        Side::Upper => Side::Lower,
    };
    let Some(other) = band.curve(other_side) else {
        return Ok((1.0, 0.0));
    };
    let one_sided = match side {
        Side::Lower => Band::above(band.curve(Side::Lower).unwrap().clone()),
        Side::Upper => Band::below(band.curve(Side::Upper).unwrap().clone()),
    };
    let spec = ProcessSpec {
        a: setup.a,
        end: setup.end,
        start_on_boundary: setup.start_pin,
        end_on_boundary: setup.end_pin,
    };
    let mut points = Vec::with_capacity(2);
    for (idx, m) in [budget.grid, 2 * budget.grid].into_iter().enumerate() {
        let partition = Partition::new(t1, t2, m)?;
        let other_vals: Vec<f64> = (0..=m).map(|k| other.value(partition.node(k))).collect();
        let est = rejection_mean(
            &spec,
            &partition,
            &one_sided,
            budget.max_attempts,
            budget.samples,
            &stream.substream(3 + idx as u64),
            exec,
            |path| {
                let ok = match other_side {
                    Side::Upper => {
                        (0..=path.partition().n()).all(|k| path.value(k) <= other_vals[k])
                    }
                    Side::Lower => {
                        (0..=path.partition().n()).all(|k| path.value(k) >= other_vals[k])
                    }
                };
                if ok {
                    1.0
                } else {
                    0.0
                }
            },
        )?;
        if est.mean <= 0.0 {
            return Err(Error::Degenerate("containment probability vanished"));
        }
        points.push((
            m as f64,
            est.mean,
            est.std_error.max(survival_se_floor(est.mean, budget.samples)),
        ));
    }
    let (c0, se0, _slope) = fit_inverse_sqrt(&points)?;
    if c0 <= 0.0 {
        return Err(Error::Degenerate("containment probability vanished"));
    }
    Ok((c0.min(1.0), se0))
}

/// First-order infinitesimal probability through the Cameron-Martin route:
/// `sqrt(t2 - t1) / sqrt(2)` times the coefficient times the containment
/// probability of the one-side-conditioned segment.
pub fn delta_p_first_lemma<E: Executor>(
    band: &Band,
    t1: f64,
    t2: f64,
    start: EndpointSpec,
    end: EndpointSpec,
    budget: &LemmaBudget,
    stream: &RngStream,
    exec: &E,
) -> Result<MCEstimate> {
    let setup = resolve_segment(band, t1, t2, start, Some(end))?;
    let (side, alpha, beta) = match (setup.start_pin, setup.end_pin) {
        (Some(side), None) => {
            let End::Pinned(b) = setup.end else { unreachable!() };
            let f = band.curve(side).unwrap();
            (side, 0.0, math::abs(b - f.value(t2)))
        }
        (None, Some(side)) => {
            let f = band.curve(side).unwrap();
            (side, math::abs(setup.a - f.value(t1)), 0.0)
        }
        _ => {
            return Err(Error::Domain("first-order limit needs exactly one endpoint on a curve"))
        }
    };
    let f = band.curve(side).unwrap();
    let g = Curve::Scaled(
        match side {
            Side::Lower => -1.0,
            Side::Upper => 1.0,
        },
        alloc::boxed::Box::new(f.clone()),
    );
    let (coeff, coeff_se) = cm_coefficient(&g, t1, t2, alpha, beta, budget, stream, exec)?;
    let (cont, cont_se) =
        containment_probability(band, side, t1, t2, &setup, budget, stream, exec)?;
    let value = math::sqrt(t2 - t1) / math::sqrt(2.0) * coeff * cont;
    let rel = math::sqrt(
        math::sq(coeff_se / coeff.max(1e-300)) + math::sq(cont_se / cont.max(1e-300)),
    );
    Ok(MCEstimate {
        mean: value,
        std_error: value * rel,
        n_samples: budget.samples,
        seed: stream.key(),
    })
}

/// Free-end infinitesimal probability through the Cameron-Martin route:
/// the meander coefficient `sqrt(2 / (pi (t2 - t1)))` tilted by the curve,
/// times the containment probability.
pub fn delta_p_free_lemma<E: Executor>(
    band: &Band,
    t1: f64,
    t2: f64,
    start: EndpointSpec,
    budget: &LemmaBudget,
    stream: &RngStream,
    exec: &E,
) -> Result<MCEstimate> {
    let (a, Some(side)) = start.resolve(band, t1)? else {
        return Err(Error::Domain("free-end limit needs the start on a curve"));
    };
    let f = band.curve(side).unwrap();
    let g = Curve::Scaled(
        match side {
            Side::Lower => -1.0,
            Side::Upper => 1.0,
        },
        alloc::boxed::Box::new(f.clone()),
    );
    let (dbar, dbar_se) = if g.is_const() {
        (math::sqrt(2.0 / (math::PI * (t2 - t1))), 0.0)
    } else {
        let partition = Partition::new(t1, t2, budget.grid)?;
        let zero_band = Band::above(Curve::Const(0.0));
        let spec = ProcessSpec::free(0.0).with_start_pin(Side::Lower);
        let est = rejection_mean(
            &spec,
            &partition,
            &zero_band,
            budget.max_attempts,
            budget.samples,
            &stream.substream(1),
            exec,
            |path| cameron_martin(&g, path),
        )?;
        if est.mean <= 0.0 {
            return Err(Error::Degenerate("meander Cameron-Martin expectation vanished"));
        }
        let base = math::sqrt(2.0 / (math::PI * (t2 - t1)));
        (base * est.mean, base * est.std_error)
    };
    let setup = SegmentSetup { a, end: End::Free, start_pin: Some(side), end_pin: None };
    let (cont, cont_se) =
        containment_probability(band, side, t1, t2, &setup, budget, stream, exec)?;
    let value = math::sqrt(t2 - t1) / math::sqrt(2.0) * dbar * cont;
    let rel = math::sqrt(
        math::sq(dbar_se / dbar.max(1e-300)) + math::sq(cont_se / cont.max(1e-300)),
    );
    Ok(MCEstimate {
        mean: value,
        std_error: value * rel,
        n_samples: budget.samples,
        seed: stream.key(),
    })
}

/// Second-order limit through the split at an interior time `tau`:
/// average over the bridge marginal of the product of the two first-order
/// limits on `[t1, tau]` and `[tau, t2]`, scaled by `(t2 - t1)`. The result
/// does not depend on the choice of `tau`.
#[allow(clippy::too_many_arguments)]
pub fn delta_p_second_tau<E: Executor>(
    band: &Band,
    t1: f64,
    t2: f64,
    eps: (Sign, Sign),
    tau: f64,
    n_alpha: u64,
    inner: &LemmaBudget,
    stream: &RngStream,
    exec: &E,
) -> Result<MCEstimate> {
    if !(t1 < tau && tau < t2) {
        return Err(Error::Domain("tau must lie strictly inside the segment"));
    }
    if n_alpha == 0 {
        return Err(Error::Domain("tau split needs at least one level sample"));
    }
    let f1 = band
        .curve(eps.0.side())
        .ok_or(Error::Domain("sign selects an unbounded band side"))?;
    let f2 = band
        .curve(eps.1.side())
        .ok_or(Error::Domain("sign selects an unbounded band side"))?;
    let a = f1.value(t1);
    let b = f2.value(t2);
    let frac = (tau - t1) / (t2 - t1);
    let marginal_mean = a + (b - a) * frac;
    let marginal_sd = math::sqrt((tau - t1) * (t2 - tau) / (t2 - t1));
    let scale = 1.0 / (math::sqrt(tau - t1) * math::sqrt(t2 - tau));

    let (mut sum, mut sum_sq) = (0.0, 0.0);
    for i in 0..n_alpha {
        let sub = stream.substream(0x10_000 + i);
        let mut rng = sub.sample_rng(0);
        let alpha = marginal_mean + marginal_sd * rng.normal();
        let term = if band.contains_interior(tau, alpha) {
            // A degenerate one-sided factor means the level sits so close to
            // a curve that its containment vanished within noise; the
            // integrand vanishes at the curves, so the term contributes zero.
            let left = match delta_p_first_lemma(
                band,
                t1,
                tau,
                EndpointSpec::OnCurve(eps.0.side()),
                EndpointSpec::Interior(alpha),
                inner,
                &sub.substream(1),
                exec,
            ) {
                Ok(est) => Some(est),
                Err(Error::Degenerate(_)) => None,
                Err(e) => return Err(e),
            };
            let right = match delta_p_first_lemma(
                band,
                tau,
                t2,
                EndpointSpec::Interior(alpha),
                EndpointSpec::OnCurve(eps.1.side()),
                inner,
                &sub.substream(2),
                exec,
            ) {
                Ok(est) => Some(est),
                Err(Error::Degenerate(_)) => None,
                Err(e) => return Err(e),
            };
            match (left, right) {
                (Some(l), Some(r)) => l.mean * r.mean * scale,
                _ => 0.0,
            }
        } else {
            0.0
        };
        sum += term;
        sum_sq += term * term;
    }
    let nf = n_alpha as f64;
    let mean = sum / nf;
    let var = if n_alpha > 1 {
        ((sum_sq - nf * mean * mean) / (nf - 1.0)).max(0.0)
    } else {
        0.0
    };
    Ok(MCEstimate {
        mean: (t2 - t1) * mean,
        std_error: (t2 - t1) * math::sqrt(var / nf),
        n_samples: n_alpha,
        seed: stream.key(),
    })
}

/// Finite-dimensional density of the bridge (pinned end) or of free motion at
/// the given times and levels, with `t0 = 0` and `c0 = a`.
pub fn finite_dim_density(times: &[f64], levels: &[f64], a: f64, end: End) -> Result<f64> {
    if times.is_empty() || times.len() != levels.len() {
        return Err(Error::Domain("need one level per time"));
    }
    let mut prev_t = 0.0;
    let mut prev_c = a;
    let mut density = 1.0;
    for (&t, &c) in times.iter().zip(levels) {
        if t <= prev_t {
            return Err(Error::Domain("density times must be strictly increasing from 0"));
        }
        density *= heat_kernel_unchecked(t - prev_t, prev_c, c);
        prev_t = t;
        prev_c = c;
    }
    if let End::Pinned(b) = end {
        if prev_t >= 1.0 {
            return Err(Error::Domain("pinned density needs times inside (0, 1)"));
        }
        density *= heat_kernel_unchecked(1.0 - prev_t, prev_c, b) / heat_kernel_unchecked(1.0, a, b);
    }
    Ok(density)
}

/// One multiplicative factor of an assembled boundary density.
#[derive(Clone, Debug, PartialEq)]
pub struct NuFactor {
    pub label: &'static str,
    /// Stable identifier of the cached estimate behind this factor (zero for
    /// deterministic factors). Shared keys mark shared estimates.
    pub key: u64,
    pub value: f64,
    pub std_error: f64,
}

/// Boundary density at pinned times: the finite-dimensional density at the
/// curve levels times the scaled infinitesimal-probability factors.
#[derive(Clone, Debug, PartialEq)]
pub struct NuValue {
    pub eps: Vec<Sign>,
    pub times: Vec<f64>,
    pub value: f64,
    pub std_error: f64,
    pub factors: Vec<NuFactor>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
struct FactorKey {
    t1: u64,
    t2: u64,
    start: u8,
    end: u8,
}

const END_INTERIOR: u8 = 0;
const END_LOWER: u8 = 1;
const END_UPPER: u8 = 2;
const END_FREE: u8 = 3;

fn side_code(side: Side) -> u8 {
    match side {
        Side::Lower => END_LOWER,
        Side::Upper => END_UPPER,
    }
}

fn key_tag(key: &FactorKey) -> u64 {
    let mut acc = 0x243f_6a88_85a3_08d3u64;
    for part in [key.t1, key.t2, key.start as u64, key.end as u64] {
        acc = acc.rotate_left(23) ^ part.wrapping_mul(0x9e37_79b9_7f4a_7c15);
        acc = acc.wrapping_mul(0xff51_afd7_ed55_8ccd);
    }
    acc
}

/// How the engine turns a segment into a scaled edge factor.
#[derive(Clone, Debug, PartialEq)]
pub enum FactorMode {
    /// Fit the scaled survival over a size schedule and take the intercept:
    /// the infinitesimal-probability limit itself.
    Extrapolated(DeltaSchedule),
    /// Evaluate the scaled survival at the segment size induced by a global
    /// grid (`m = (t2 - t1) * n_global`). This is the pre-limit quantity
    /// entering the exact discrete identity at that grid, and it is what a
    /// finite-grid left side must be compared against: the `m^(-1/2)` defects
    /// of the survival factors and of the conditioned inner expectations
    /// cancel only at matched grid levels.
    AtLevel { n_global: usize, samples: u64 },
}

/// Assembles boundary densities for one scenario, caching every scaled
/// infinitesimal-probability factor per (interval, pins) key. Factor streams
/// are derived from the key, so the fill order (and hence parallel node
/// order) does not affect any estimate.
pub struct NuEngine<'a> {
    band: &'a Band,
    a: f64,
    end: End,
    mode: FactorMode,
    stream: RngStream,
    cache: BTreeMap<FactorKey, MCEstimate>,
}

impl<'a> NuEngine<'a> {
    pub fn new(band: &'a Band, a: f64, end: End, mode: FactorMode, stream: RngStream) -> Self {
        NuEngine { band, a, end, mode, stream, cache: BTreeMap::new() }
    }

    pub fn cached_factors(&self) -> usize {
        self.cache.len()
    }

    fn factor<E: Executor>(&mut self, key: FactorKey, exec: &E) -> Result<MCEstimate> {
        if let Some(est) = self.cache.get(&key) {
            return Ok(*est);
        }
        let t1 = f64::from_bits(key.t1);
        let t2 = f64::from_bits(key.t2);
        let stream = self.stream.substream(key_tag(&key));
        let start = match key.start {
            END_INTERIOR => EndpointSpec::Interior(self.a),
            END_LOWER => EndpointSpec::OnCurve(Side::Lower),
            _ => EndpointSpec::OnCurve(Side::Upper),
        };
        let end = match key.end {
            END_FREE => None,
            END_INTERIOR => {
                let End::Pinned(b) = self.end else {
                    return Err(Error::Structure("interior end factor without a pinned end"));
                };
                Some(EndpointSpec::Interior(b))
            }
            END_LOWER => Some(EndpointSpec::OnCurve(Side::Lower)),
            _ => Some(EndpointSpec::OnCurve(Side::Upper)),
        };
        let second_order = key.start != END_INTERIOR && matches!(key.end, END_LOWER | END_UPPER);
        let power = if second_order { 1.0 } else { 0.5 };
        let est = match &self.mode {
            FactorMode::Extrapolated(schedule) => {
                let setup = resolve_segment(self.band, t1, t2, start, end)?;
                scaled_survival_fit(self.band, t1, t2, &setup, power, schedule, &stream, exec)?
            }
            FactorMode::AtLevel { n_global, samples } => {
                let setup = resolve_segment(self.band, t1, t2, start, end)?;
                let m = (((t2 - t1) * *n_global as f64) + 0.5) as usize;
                if m == 0 {
                    return Err(Error::Domain("segment shorter than one global grid step"));
                }
                let est = segment_survival(self.band, t1, t2, &setup, m, *samples, &stream, exec)?;
                let scale = if second_order { m as f64 } else { math::sqrt(m as f64) };
                MCEstimate {
                    mean: scale * est.mean,
                    std_error: scale * est.std_error,
                    n_samples: *samples,
                    seed: stream.key(),
                }
            }
        };
        self.cache.insert(key, est);
        Ok(est)
    }

    /// Boundary density at the given signs and times. Returns `Ok(None)` when
    /// a sign addresses an absent band curve (the contribution vanishes);
    /// `Err(Degenerate)` when an estimated factor is unusable.
    pub fn nu<E: Executor>(
        &mut self,
        eps: &[Sign],
        times: &[f64],
        exec: &E,
    ) -> Result<Option<NuValue>> {
        let j = eps.len();
        if j == 0 || j != times.len() {
            return Err(Error::Domain("need one sign per pinned time"));
        }
        for w in times.windows(2) {
            if w[1] <= w[0] {
                return Err(Error::Domain("pinned times must increase"));
            }
        }
        if times[0] <= 0.0 || times[j - 1] >= 1.0 {
            return Err(Error::Domain("pinned times must lie inside (0, 1)"));
        }
        let mut levels = Vec::with_capacity(j);
        for (s, &t) in eps.iter().zip(times) {
            match self.band.curve(s.side()) {
                Some(c) => levels.push(c.value(t)),
                None => return Ok(None),
            }
        }

        let mut factors = Vec::with_capacity(j + 2);
        let density = finite_dim_density(times, &levels, self.a, self.end)?;
        factors.push(NuFactor { label: "density", key: 0, value: density, std_error: 0.0 });

        let head_key = FactorKey {
            t1: 0.0f64.to_bits(),
            t2: times[0].to_bits(),
            start: END_INTERIOR,
            end: side_code(eps[0].side()),
        };
        let head = self.factor(head_key, exec)?;
        if head.mean <= 0.0 {
            return Err(Error::Degenerate("head edge factor"));
        }
        let scale = 1.0 / math::sqrt(times[0]);
        factors.push(NuFactor {
            label: "edge-head",
            key: key_tag(&head_key),
            value: head.mean * scale,
            std_error: head.std_error * scale,
        });

        for i in 1..j {
            let key = FactorKey {
                t1: times[i - 1].to_bits(),
                t2: times[i].to_bits(),
                start: side_code(eps[i - 1].side()),
                end: side_code(eps[i].side()),
            };
            let mid = self.factor(key, exec)?;
            if mid.mean <= 0.0 {
                return Err(Error::Degenerate("middle edge factor"));
            }
            let scale = 1.0 / (times[i] - times[i - 1]);
            factors.push(NuFactor {
                label: "edge-middle",
                key: key_tag(&key),
                value: mid.mean * scale,
                std_error: mid.std_error * scale,
            });
        }

        let tail_key = FactorKey {
            t1: times[j - 1].to_bits(),
            t2: 1.0f64.to_bits(),
            start: side_code(eps[j - 1].side()),
            end: if matches!(self.end, End::Free) { END_FREE } else { END_INTERIOR },
        };
        let tail = self.factor(tail_key, exec)?;
        if tail.mean <= 0.0 {
            return Err(Error::Degenerate("tail edge factor"));
        }
        let scale = 1.0 / math::sqrt(1.0 - times[j - 1]);
        factors.push(NuFactor {
            label: "edge-tail",
            key: key_tag(&tail_key),
            value: tail.mean * scale,
            std_error: tail.std_error * scale,
        });

        let mut value = 1.0;
        let mut rel_sq = 0.0;
        for f in &factors {
            value *= f.value;
            let rel = f.std_error / math::abs(f.value).max(1e-300);
            rel_sq += rel * rel;
        }
        Ok(Some(NuValue {
            eps: eps.to_vec(),
            times: times.to_vec(),
            value,
            std_error: value * math::sqrt(rel_sq),
            factors,
        }))
    }
}
