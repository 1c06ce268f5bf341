//! Subcommand drivers: run the configured estimations and write report files.

use std::fmt::Write as _;
use std::fs;
use std::path::PathBuf;

use anyhow::{bail, Context};
use bandpath::boundary::{
    delta_p_first_def, delta_p_first_lemma, delta_p_free, delta_p_free_lemma, delta_p_second,
    delta_p_second_tau, DeltaSchedule, EndpointSpec, LemmaBudget,
};
use bandpath::curve::Side;
use bandpath::sampler::{
    band_probability, sample_bridge, sample_conditioned, sample_free, sample_pinned_segment,
    MCEstimate,
};
use bandpath::verify::{verify, Verdict, VerificationReport};
use bandpath::{
    Band, End, Executor, Partition, ProcessSpec, RngStream, Sign,
};
use serde::Serialize;

use crate::config::{
    config_hash, parse_side, DeltaPSection, RunConfig, SampleSection,
};

const VERSION: &str = env!("CARGO_PKG_VERSION");

/// Marker wrapper separating configuration problems (exit code 2) from
/// numerical failures (exit code 1).
#[derive(Debug)]
pub struct ConfigError(pub anyhow::Error);

impl std::fmt::Display for ConfigError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{:#}", self.0)
    }
}

impl std::error::Error for ConfigError {}

fn config_err(e: anyhow::Error) -> anyhow::Error {
    anyhow::Error::new(ConfigError(e))
}

/// Everything a run needs besides the section list.
pub struct RunContext<'a, E: Executor> {
    pub seed: u64,
    pub out_dir: PathBuf,
    pub hash: u64,
    pub exec: &'a E,
}

impl<'a, E: Executor> RunContext<'a, E> {
    pub fn new(cfg: &RunConfig, raw: &str, seed_override: Option<u64>, out_override: Option<&str>, exec: &'a E) -> Self {
        let out_dir = PathBuf::from(
            out_override
                .map(str::to_owned)
                .or_else(|| cfg.out_dir.clone())
                .unwrap_or_else(|| "out".to_owned()),
        );
        RunContext {
            seed: seed_override.unwrap_or(cfg.seed),
            out_dir,
            hash: config_hash(raw),
            exec,
        }
    }

    fn header(&self) -> String {
        format!("# config={:016x} seed={} version={VERSION}\n", self.hash, self.seed)
    }

    fn write(&self, name: &str, body: &str) -> anyhow::Result<PathBuf> {
        fs::create_dir_all(&self.out_dir)
            .with_context(|| format!("creating {:?}", self.out_dir))?;
        let path = self.out_dir.join(name);
        fs::write(&path, body).with_context(|| format!("writing {path:?}"))?;
        Ok(path)
    }
}

#[derive(Serialize)]
struct JsonEstimate {
    mean: f64,
    std_error: f64,
    n_samples: u64,
}

impl From<&MCEstimate> for JsonEstimate {
    fn from(e: &MCEstimate) -> Self {
        JsonEstimate { mean: e.mean, std_error: e.std_error, n_samples: e.n_samples }
    }
}

#[derive(Serialize)]
struct JsonContribution {
    j: usize,
    eps: Vec<i8>,
    order: Vec<usize>,
    value: f64,
}

#[derive(Serialize)]
struct JsonReport {
    config: String,
    seed: u64,
    version: String,
    scenario: String,
    lhs: JsonEstimate,
    bulk: JsonEstimate,
    bd: Vec<JsonEstimate>,
    rhs_total: JsonEstimate,
    z_score: f64,
    verdict: String,
    cause: Option<String>,
    contributions: Vec<JsonContribution>,
    snapped_nodes: u32,
    skipped_terms: u32,
}

fn verdict_str(v: Verdict) -> &'static str {
    match v {
        Verdict::Pass => "PASS",
        Verdict::Fail => "FAIL",
        Verdict::Invalid => "INVALID",
    }
}

fn json_report(ctx_hash: u64, seed: u64, name: &str, r: &VerificationReport) -> JsonReport {
    JsonReport {
        config: format!("{ctx_hash:016x}"),
        seed,
        version: VERSION.to_owned(),
        scenario: name.to_owned(),
        lhs: (&r.lhs).into(),
        bulk: (&r.bulk).into(),
        bd: r.bd.iter().map(JsonEstimate::from).collect(),
        rhs_total: (&r.rhs_total).into(),
        z_score: r.z_score,
        verdict: verdict_str(r.verdict).to_owned(),
        cause: r.cause.clone(),
        contributions: r
            .contributions
            .iter()
            .map(|c| JsonContribution {
                j: c.j,
                eps: c.eps.iter().map(|e| e.value() as i8).collect(),
                order: c.order.clone(),
                value: c.value,
            })
            .collect(),
        snapped_nodes: r.snapped_nodes,
        skipped_terms: r.skipped_terms,
    }
}

/// Run every `[[verify]]` section; returns the worst outcome (0 pass,
/// 1 fail/invalid).
pub fn run_verify<E: Executor>(cfg: &RunConfig, ctx: &RunContext<'_, E>) -> anyhow::Result<i32> {
    let mut summary = ctx.header();
    summary.push_str("scenario,lhs,lhs_se,rhs,rhs_se,z,verdict\n");
    let mut status = 0;
    let scenarios: Vec<_> = cfg
        .verify
        .iter()
        .map(|s| s.build(ctx.seed).map(|sc| (s, sc)))
        .collect::<anyhow::Result<_>>()
        .map_err(config_err)?;
    for (section, scenario) in scenarios {
        let report = verify(&scenario, ctx.exec).map_err(|e| anyhow::anyhow!("{e}"))?;
        if !report.passed() {
            status = 1;
        }
        let json = serde_json::to_string_pretty(&json_report(ctx.hash, ctx.seed, &section.name, &report))?;
        ctx.write(&format!("{}.json", section.name), &json)?;
        writeln!(
            summary,
            "{},{},{},{},{},{},{}",
            section.name,
            report.lhs.mean,
            report.lhs.std_error,
            report.rhs_total.mean,
            report.rhs_total.std_error,
            report.z_score,
            verdict_str(report.verdict)
        )?;
        println!(
            "verify {}: z = {:.3} [{}]",
            section.name, report.z_score, verdict_str(report.verdict)
        );
    }
    ctx.write("verify_summary.csv", &summary)?;
    Ok(status)
}

fn delta_endpoints(section: &DeltaPSection) -> anyhow::Result<(EndpointSpec, Option<EndpointSpec>)> {
    let start = section
        .start
        .as_ref()
        .context("delta-p section needs `start`")?
        .build()?;
    let end = section.end.as_ref().map(|e| e.build()).transpose()?;
    Ok((start, end))
}

/// Run every `[[delta_p]]` section into one CSV table.
pub fn run_delta_p<E: Executor>(cfg: &RunConfig, ctx: &RunContext<'_, E>) -> anyhow::Result<i32> {
    let mut table = ctx.header();
    table.push_str("name,t1,t2,pins,order,route,sizes,estimate,std_error\n");
    for (i, section) in cfg.delta_p.iter().enumerate() {
        let band = section.band.build()?;
        let sizes = section.sizes.clone().unwrap_or_else(|| vec![50, 100, 200]);
        let samples = section.samples.unwrap_or(200_000);
        let schedule = DeltaSchedule::new(sizes.clone(), samples)
            .map_err(|e| anyhow::anyhow!("schedule: {e}"))?;
        let lemma = LemmaBudget {
            grid: section.grid.unwrap_or(160),
            samples,
            max_attempts: 10_000_000,
        };
        let stream = RngStream::new(ctx.seed).substream(0xD0 + i as u64);
        let route = section.route.as_deref().unwrap_or("definition");
        let (start, end) = delta_endpoints(section)?;
        let sizes_str = sizes.iter().map(|s| s.to_string()).collect::<Vec<_>>().join(" ");
        let pin_name = |e: &EndpointSpec| match e {
            EndpointSpec::Interior(_) => "interior",
            EndpointSpec::OnCurve(Side::Lower) => "lower",
            EndpointSpec::OnCurve(Side::Upper) => "upper",
        };
        let pins = format!(
            "{}->{}",
            pin_name(&start),
            end.as_ref().map(pin_name).unwrap_or("free")
        );

        let mut push = |route_name: &str, est: MCEstimate| {
            writeln!(
                table,
                "{},{},{},{},{},{},{},{},{}",
                section.name, section.t1, section.t2, pins, section.order, route_name,
                sizes_str, est.mean, est.std_error
            )
            .unwrap();
            println!(
                "delta-p {} [{route_name}]: {} +- {}",
                section.name, est.mean, est.std_error
            );
        };

        match section.order.as_str() {
            "first" => {
                let end = end.context("first-order section needs `end`")?;
                if route == "definition" || route == "both" {
                    let est = delta_p_first_def(
                        &band, section.t1, section.t2, start, end, &schedule,
                        &stream.substream(1), ctx.exec,
                    )
                    .map_err(|e| anyhow::anyhow!("{}: {e}", section.name))?;
                    push("definition", est);
                }
                if route == "lemma" || route == "both" {
                    let est = delta_p_first_lemma(
                        &band, section.t1, section.t2, start, end, &lemma,
                        &stream.substream(2), ctx.exec,
                    )
                    .map_err(|e| anyhow::anyhow!("{}: {e}", section.name))?;
                    push("lemma", est);
                }
            }
            "second" => {
                let end = end.context("second-order section needs `end`")?;
                if route == "definition" || route == "both" {
                    let est = delta_p_second(
                        &band, section.t1, section.t2, start, end, &schedule,
                        &stream.substream(1), ctx.exec,
                    )
                    .map_err(|e| anyhow::anyhow!("{}: {e}", section.name))?;
                    push("definition", est);
                }
                if route == "tau" || route == "both" {
                    let (EndpointSpec::OnCurve(s1), EndpointSpec::OnCurve(s2)) = (start, end)
                    else {
                        bail!("tau route needs both endpoints on curves");
                    };
                    let eps = (
                        if s1 == Side::Lower { Sign::Minus } else { Sign::Plus },
                        if s2 == Side::Lower { Sign::Minus } else { Sign::Plus },
                    );
                    let tau = section.tau.unwrap_or(0.5 * (section.t1 + section.t2));
                    let est = delta_p_second_tau(
                        &band, section.t1, section.t2, eps, tau,
                        section.alpha_samples.unwrap_or(512),
                        &LemmaBudget { samples: samples / 4, ..lemma },
                        &stream.substream(2), ctx.exec,
                    )
                    .map_err(|e| anyhow::anyhow!("{}: {e}", section.name))?;
                    push("tau", est);
                }
            }
            "free" => {
                if route == "definition" || route == "both" {
                    let est = delta_p_free(
                        &band, section.t1, section.t2, start, &schedule,
                        &stream.substream(1), ctx.exec,
                    )
                    .map_err(|e| anyhow::anyhow!("{}: {e}", section.name))?;
                    push("definition", est);
                }
                if route == "lemma" || route == "both" {
                    let est = delta_p_free_lemma(
                        &band, section.t1, section.t2, start, &lemma,
                        &stream.substream(2), ctx.exec,
                    )
                    .map_err(|e| anyhow::anyhow!("{}: {e}", section.name))?;
                    push("lemma", est);
                }
            }
            other => bail!("unknown delta-p order `{other}` (first|second|free)"),
        }
    }
    ctx.write("delta_p.csv", &table)?;
    Ok(0)
}

/// Run every `[[converge]]` section: one CSV per section with per-size rows
/// and a fitted scaled-limit row.
pub fn run_converge<E: Executor>(cfg: &RunConfig, ctx: &RunContext<'_, E>) -> anyhow::Result<i32> {
    for (i, section) in cfg.converge.iter().enumerate() {
        let band = section.band.build()?;
        let samples = section.samples.unwrap_or(200_000);
        let stream = RngStream::new(ctx.seed).substream(0xC0 + i as u64);
        let (t1, t2) = (section.t1.unwrap_or(0.0), section.t2.unwrap_or(1.0));
        let mut body = ctx.header();
        body.push_str("n,estimate,std_error\n");
        let mut points = Vec::new();
        for (si, &m) in section.sizes.iter().enumerate() {
            let est = match section.kind.as_str() {
                "band-probability" => {
                    let a = section.a.context("band-probability needs `a`")?;
                    let end = section
                        .end
                        .as_ref()
                        .map(|e| e.build())
                        .transpose()?
                        .unwrap_or(End::Free);
                    let spec = match end {
                        End::Pinned(b) => ProcessSpec::bridge(a, b),
                        End::Free => ProcessSpec::free(a),
                    };
                    let p = Partition::new(t1, t2, m).map_err(|e| anyhow::anyhow!("{e}"))?;
                    band_probability(&spec, &band, &p, samples, &stream.substream(si as u64), ctx.exec)
                        .map_err(|e| anyhow::anyhow!("{}: {e}", section.name))?
                }
                "delta-p-first" | "delta-p-second" | "delta-p-free" => {
                    let start = section
                        .start
                        .as_ref()
                        .context("delta-p kinds need `start`")?
                        .build()?;
                    let schedule = DeltaSchedule::new(vec![m, 2 * m], samples)
                        .map_err(|e| anyhow::anyhow!("{e}"))?;
                    let sub = stream.substream(si as u64);
                    match section.kind.as_str() {
                        "delta-p-first" => {
                            let end = section
                                .end_point
                                .as_ref()
                                .context("delta-p-first needs `end_point`")?
                                .build()?;
                            delta_p_first_def(&band, t1, t2, start, end, &schedule, &sub, ctx.exec)
                        }
                        "delta-p-second" => {
                            let end = section
                                .end_point
                                .as_ref()
                                .context("delta-p-second needs `end_point`")?
                                .build()?;
                            delta_p_second(&band, t1, t2, start, end, &schedule, &sub, ctx.exec)
                        }
                        _ => delta_p_free(&band, t1, t2, start, &schedule, &sub, ctx.exec),
                    }
                    .map_err(|e| anyhow::anyhow!("{}: {e}", section.name))?
                }
                other => bail!("unknown converge kind `{other}`"),
            };
            writeln!(body, "{},{},{}", m, est.mean, est.std_error)?;
            points.push((m as f64, est.mean, est.std_error.max(1e-12)));
        }
        if points.len() >= 2 {
            if let Ok((c0, se0, slope)) = bandpath::boundary::fit_inverse_sqrt(&points) {
                writeln!(body, "extrapolated,{c0},{se0}")?;
                writeln!(body, "# fitted inverse-sqrt slope: {slope}")?;
            }
        }
        ctx.write(&format!("{}.csv", section.name), &body)?;
        println!("converge {}: {} sizes written", section.name, section.sizes.len());
    }
    Ok(0)
}

/// Run every `[[sample]]` section: CSV path dumps with columns
/// `path,t,value`.
pub fn run_sample<E: Executor>(cfg: &RunConfig, ctx: &RunContext<'_, E>) -> anyhow::Result<i32> {
    for (i, section) in cfg.sample.iter().enumerate() {
        let stream = RngStream::new(ctx.seed).substream(0x5A + i as u64);
        let (t1, t2) = (section.t1.unwrap_or(0.0), section.t2.unwrap_or(1.0));
        let partition = Partition::new(t1, t2, section.n).map_err(|e| anyhow::anyhow!("{e}"))?;
        let max_attempts = section.max_attempts.unwrap_or(10_000_000);
        let mut body = ctx.header();
        body.push_str("path,t,value\n");
        for idx in 0..section.count {
            let mut rng = stream.sample_rng(idx as u64);
            let path = sample_path(section, &partition, max_attempts, &mut rng)
                .map_err(|e| anyhow::anyhow!("{}: {e}", section.name))?;
            for k in 0..=partition.n() {
                writeln!(body, "{},{},{}", idx, partition.node(k), path.value(k))?;
            }
        }
        ctx.write(&format!("{}.csv", section.name), &body)?;
        println!("sample {}: {} paths written", section.name, section.count);
    }
    Ok(0)
}

fn sample_path(
    section: &SampleSection,
    partition: &Partition,
    max_attempts: u64,
    rng: &mut bandpath::Prng,
) -> anyhow::Result<bandpath::GridPath> {
    let band = section.band.as_ref().map(|b| b.build()).transpose()?.unwrap_or_else(Band::free);
    let t_start = partition.t_start();
    let t_end = partition.t_end();
    let curve_value = |side: Side, t: f64| -> anyhow::Result<f64> {
        band.curve(side)
            .map(|c| c.value(t))
            .context("sample kind needs the referenced band curve")
    };
    let path = match section.kind.as_str() {
        "bridge" => {
            let a = section.a.context("bridge needs `a`")?;
            let b = section.b.context("bridge needs `b`")?;
            sample_bridge(a, b, partition, rng)
        }
        "free" => sample_free(section.a.context("free needs `a`")?, partition, rng),
        "conditioned" => {
            let a = section.a.context("conditioned needs `a`")?;
            let spec = match section.b {
                Some(b) => ProcessSpec::bridge(a, b),
                None => ProcessSpec::free(a),
            };
            sample_conditioned(&spec, &band, partition, max_attempts, rng)
                .map_err(|e| anyhow::anyhow!("{e}"))?
        }
        "excursion" => {
            let side = parse_side(section.on.as_deref().unwrap_or("lower"))?;
            let a = curve_value(side, t_start)?;
            let b = curve_value(side, t_end)?;
            let spec = ProcessSpec::bridge(a, b).with_start_pin(side).with_end_pin(side);
            sample_pinned_segment(&spec, &band, partition, max_attempts, rng)
                .map_err(|e| anyhow::anyhow!("{e}"))?
        }
        "house-moving" => {
            let from = parse_side(section.from.as_deref().unwrap_or("lower"))?;
            let to = match from {
                Side::Lower => Side::Upper,
                Side::Upper => Side::Lower,
            };
            let a = curve_value(from, t_start)?;
            let b = curve_value(to, t_end)?;
            let spec = ProcessSpec::bridge(a, b).with_start_pin(from).with_end_pin(to);
            sample_pinned_segment(&spec, &band, partition, max_attempts, rng)
                .map_err(|e| anyhow::anyhow!("{e}"))?
        }
        "meander" => {
            let side = parse_side(section.from.as_deref().unwrap_or("lower"))?;
            let a = curve_value(side, t_start)?;
            let spec = ProcessSpec::free(a).with_start_pin(side);
            sample_pinned_segment(&spec, &band, partition, max_attempts, rng)
                .map_err(|e| anyhow::anyhow!("{e}"))?
        }
        other => bail!("unknown sample kind `{other}`"),
    };
    Ok(path)
}
