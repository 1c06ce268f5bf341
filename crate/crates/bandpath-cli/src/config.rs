//! TOML run configuration and its mapping onto library types.
//!
//! The schema is documented in `docs/config.md`; unknown fields are rejected
//! so typos surface as parse errors with line numbers.

use anyhow::{bail, Context};
use bandpath::boundary::EndpointSpec;
use bandpath::curve::{Band, Curve, Side};
use bandpath::functional::{CylFunctional, DirectionFunction, Kernel, Phi};
use bandpath::verify::{Budgets, Scenario};
use bandpath::End;
use serde::Deserialize;

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    #[serde(default)]
    pub out_dir: Option<String>,
    #[serde(default)]
    pub threads: Option<usize>,
    #[serde(default)]
    pub verify: Vec<VerifySection>,
    #[serde(default)]
    pub delta_p: Vec<DeltaPSection>,
    #[serde(default)]
    pub converge: Vec<ConvergeSection>,
    #[serde(default)]
    pub sample: Vec<SampleSection>,
}

impl RunConfig {
    pub fn parse(text: &str) -> anyhow::Result<RunConfig> {
        let cfg: RunConfig = toml::from_str(text).context("config parse error")?;
        Ok(cfg)
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CurveSpec {
    pub kind: String,
    #[serde(default)]
    pub value: Option<f64>,
    #[serde(default)]
    pub intercept: Option<f64>,
    #[serde(default)]
    pub slope: Option<f64>,
    #[serde(default)]
    pub c0: Option<f64>,
    #[serde(default)]
    pub c1: Option<f64>,
    #[serde(default)]
    pub c2: Option<f64>,
    #[serde(default)]
    pub amplitude: Option<f64>,
    /// Angular frequency in units of pi (1.0 means sin(pi t)).
    #[serde(default)]
    pub freq_pi: Option<f64>,
    #[serde(default)]
    pub phase: Option<f64>,
    #[serde(default)]
    pub center: Option<f64>,
    #[serde(default)]
    pub width: Option<f64>,
    #[serde(default)]
    pub scale: Option<f64>,
    #[serde(default)]
    pub offset: Option<f64>,
}

impl CurveSpec {
    pub fn build(&self) -> anyhow::Result<Curve> {
        let need = |v: Option<f64>, field: &str| {
            v.with_context(|| format!("curve kind `{}` needs field `{field}`", self.kind))
        };
        Ok(match self.kind.as_str() {
            "const" => Curve::Const(need(self.value, "value")?),
            "linear" => Curve::Linear {
                intercept: need(self.intercept, "intercept")?,
                slope: need(self.slope, "slope")?,
            },
            "quadratic" => Curve::Quadratic {
                c0: need(self.c0, "c0")?,
                c1: need(self.c1, "c1")?,
                c2: need(self.c2, "c2")?,
            },
            "sine" => Curve::Sine {
                amplitude: need(self.amplitude, "amplitude")?,
                angular_freq: need(self.freq_pi, "freq_pi")? * std::f64::consts::PI,
                phase: self.phase.unwrap_or(0.0),
            },
            // offset + scale * sqrt((t - center)^2 + width^2)
            "smooth-abs" => {
                let base = Curve::SmoothAbs {
                    center: need(self.center, "center")?,
                    width: need(self.width, "width")?,
                };
                let scaled = match self.scale {
                    Some(s) => Curve::Scaled(s, Box::new(base)),
                    None => base,
                };
                match self.offset {
                    Some(o) => Curve::Offset(o, Box::new(scaled)),
                    None => scaled,
                }
            }
            other => bail!("unknown curve kind `{other}` (const|linear|quadratic|sine|smooth-abs)"),
        })
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BandSpec {
    #[serde(default)]
    pub lower: Option<CurveSpec>,
    #[serde(default)]
    pub upper: Option<CurveSpec>,
}

impl BandSpec {
    pub fn build(&self) -> anyhow::Result<Band> {
        let lower = self.lower.as_ref().map(|c| c.build()).transpose()?;
        let upper = self.upper.as_ref().map(|c| c.build()).transpose()?;
        Band::new(lower, upper).map_err(|e| anyhow::anyhow!("band: {e}"))
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(untagged)]
pub enum EndSpec {
    Pinned(f64),
    Word(String),
}

impl EndSpec {
    pub fn build(&self) -> anyhow::Result<End> {
        match self {
            EndSpec::Pinned(b) => Ok(End::Pinned(*b)),
            EndSpec::Word(w) if w == "free" => Ok(End::Free),
            EndSpec::Word(w) => bail!("end must be a number or \"free\", got `{w}`"),
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct KernelSpec {
    pub kind: String,
    #[serde(default)]
    pub value: Option<f64>,
}

impl KernelSpec {
    fn build(&self) -> anyhow::Result<Kernel> {
        Ok(match self.kind.as_str() {
            "const" => Kernel::Const(self.value.unwrap_or(1.0)),
            "time" => Kernel::Time,
            "sin-pi" => Kernel::SinPi,
            other => bail!("unknown kernel kind `{other}` (const|time|sin-pi)"),
        })
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PhiSpec {
    pub kind: String,
    #[serde(default)]
    pub value: Option<f64>,
    #[serde(default)]
    pub coeffs: Option<Vec<f64>>,
    #[serde(default)]
    pub index: Option<usize>,
}

impl PhiSpec {
    fn build(&self) -> anyhow::Result<Phi> {
        Ok(match self.kind.as_str() {
            "const" => Phi::Const(self.value.context("phi `const` needs `value`")?),
            "linear" => Phi::Linear(self.coeffs.clone().context("phi `linear` needs `coeffs`")?),
            "square" => Phi::Square(self.index.unwrap_or(0)),
            "cube" => Phi::Cube(self.index.unwrap_or(0)),
            "tanh" => Phi::Tanh(self.index.unwrap_or(0)),
            other => bail!("unknown phi kind `{other}` (const|linear|square|cube|tanh)"),
        })
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BumpSpec {
    pub alpha: f64,
    pub beta: f64,
    #[serde(default)]
    pub amplitude: Option<f64>,
}

impl BumpSpec {
    fn build(&self) -> anyhow::Result<DirectionFunction> {
        let h = DirectionFunction::bump(self.alpha, self.beta)
            .map_err(|e| anyhow::anyhow!("direction: {e}"))?;
        Ok(match self.amplitude {
            Some(c) => h.scaled(c),
            None => h,
        })
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BudgetSpec {
    #[serde(default)]
    pub path_samples: Option<u64>,
    #[serde(default)]
    pub y_samples: Option<u64>,
    #[serde(default)]
    pub y_samples_first: Option<u64>,
    #[serde(default)]
    pub delta_samples: Option<u64>,
    #[serde(default)]
    pub schedule: Option<Vec<usize>>,
    #[serde(default)]
    pub nodes_per_dim: Option<usize>,
    #[serde(default)]
    pub max_attempts: Option<u64>,
    #[serde(default)]
    pub collar: Option<usize>,
}

impl BudgetSpec {
    fn build(&self) -> Budgets {
        let mut b = Budgets::desk();
        if let Some(v) = self.path_samples {
            b.path_samples = v;
        }
        if let Some(v) = self.y_samples {
            b.y_samples = v;
        }
        if let Some(v) = self.y_samples_first {
            b.y_samples_first = v;
        }
        if let Some(v) = self.delta_samples {
            b.delta_samples = v;
        }
        if let Some(v) = &self.schedule {
            b.schedule_sizes = v.clone();
        }
        if let Some(v) = self.nodes_per_dim {
            b.nodes_per_dim = v;
        }
        if let Some(v) = self.max_attempts {
            b.max_attempts = v;
        }
        if let Some(v) = self.collar {
            b.collar = v;
        }
        b
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VerifySection {
    pub name: String,
    pub band: BandSpec,
    pub a: f64,
    pub end: EndSpec,
    pub d: usize,
    pub phi: PhiSpec,
    pub kernels: Vec<KernelSpec>,
    #[serde(default)]
    pub order: Option<usize>,
    pub hs: Vec<BumpSpec>,
    #[serde(default)]
    pub n_global: Option<usize>,
    #[serde(default)]
    pub budgets: Option<BudgetSpec>,
}

impl VerifySection {
    pub fn build(&self, seed: u64) -> anyhow::Result<Scenario> {
        let kernels: Vec<Kernel> =
            self.kernels.iter().map(|k| k.build()).collect::<anyhow::Result<_>>()?;
        let phi = CylFunctional::new(
            self.phi.build()?,
            kernels,
            self.order.unwrap_or(self.d.max(2)),
        )
        .map_err(|e| anyhow::anyhow!("functional: {e}"))?;
        let hs: Vec<DirectionFunction> =
            self.hs.iter().map(|h| h.build()).collect::<anyhow::Result<_>>()?;
        let scenario = Scenario {
            band: self.band.build()?,
            a: self.a,
            end: self.end.build()?,
            d: self.d,
            phi,
            hs,
            n_global: self.n_global.unwrap_or(100),
            budgets: self.budgets.as_ref().map(|b| b.build()).unwrap_or_else(Budgets::desk),
            seed,
        };
        scenario
            .validate()
            .map_err(|e| anyhow::anyhow!("scenario `{}`: {e}", self.name))?;
        Ok(scenario)
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PointSpec {
    #[serde(default)]
    pub value: Option<f64>,
    #[serde(default)]
    pub curve: Option<String>,
}

impl PointSpec {
    pub fn build(&self) -> anyhow::Result<EndpointSpec> {
        match (self.value, self.curve.as_deref()) {
            (Some(v), None) => Ok(EndpointSpec::Interior(v)),
            (None, Some("lower")) => Ok(EndpointSpec::OnCurve(Side::Lower)),
            (None, Some("upper")) => Ok(EndpointSpec::OnCurve(Side::Upper)),
            _ => bail!("endpoint needs exactly one of `value` or `curve = \"lower\"|\"upper\"`"),
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DeltaPSection {
    pub name: String,
    pub band: BandSpec,
    pub t1: f64,
    pub t2: f64,
    pub order: String,
    #[serde(default)]
    pub start: Option<PointSpec>,
    #[serde(default)]
    pub end: Option<PointSpec>,
    #[serde(default)]
    pub route: Option<String>,
    #[serde(default)]
    pub samples: Option<u64>,
    #[serde(default)]
    pub sizes: Option<Vec<usize>>,
    #[serde(default)]
    pub grid: Option<usize>,
    #[serde(default)]
    pub tau: Option<f64>,
    #[serde(default)]
    pub alpha_samples: Option<u64>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConvergeSection {
    pub name: String,
    pub kind: String,
    pub band: BandSpec,
    #[serde(default)]
    pub a: Option<f64>,
    #[serde(default)]
    pub end: Option<EndSpec>,
    #[serde(default)]
    pub start: Option<PointSpec>,
    #[serde(default)]
    pub end_point: Option<PointSpec>,
    #[serde(default)]
    pub t1: Option<f64>,
    #[serde(default)]
    pub t2: Option<f64>,
    pub sizes: Vec<usize>,
    #[serde(default)]
    pub samples: Option<u64>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SampleSection {
    pub name: String,
    pub kind: String,
    #[serde(default)]
    pub band: Option<BandSpec>,
    #[serde(default)]
    pub a: Option<f64>,
    #[serde(default)]
    pub b: Option<f64>,
    #[serde(default)]
    pub on: Option<String>,
    #[serde(default)]
    pub from: Option<String>,
    #[serde(default)]
    pub t1: Option<f64>,
    #[serde(default)]
    pub t2: Option<f64>,
    pub n: usize,
    pub count: usize,
    #[serde(default)]
    pub max_attempts: Option<u64>,
}

pub fn parse_side(s: &str) -> anyhow::Result<Side> {
    match s {
        "lower" => Ok(Side::Lower),
        "upper" => Ok(Side::Upper),
        other => bail!("expected \"lower\" or \"upper\", got `{other}`"),
    }
}

/// FNV-1a hash of the raw config text, stamped into every output header.
pub fn config_hash(text: &str) -> u64 {
    let mut hash = 0xcbf2_9ce4_8422_2325u64;
    for b in text.as_bytes() {
        hash ^= *b as u64;
        hash = hash.wrapping_mul(0x0000_0100_0000_01b3);
    }
    hash
}
