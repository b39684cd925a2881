//! The multimodal few-shot regression task distribution.
//!
//! A task is one function drawn from one of five families. Each family has
//! its own parameter ranges; a mode set picks which families are in play.

use std::f64::consts::PI;
use std::fmt;
use std::str::FromStr;

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const DEFAULT_K: usize = 5;
pub const DEFAULT_L: usize = 10;
pub const DEFAULT_NOISE_SIGMA: f64 = 0.3;
pub const X_RANGE: (f64, f64) = (-5.0, 5.0);

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TaskError {
    #[error("mode set is empty")]
    EmptyModeSet,
    #[error("unsupported mode count {0}; expected 2, 3 or 5")]
    ModeCount(usize),
    #[error("unknown function mode `{0}`")]
    UnknownMode(String),
    #[error("support and query sizes must be at least 1 (got K={k}, L={l})")]
    EmptySet { k: usize, l: usize },
    #[error("noise sigma must be finite and non-negative, got {0}")]
    Noise(f64),
}

/// Serialized by its lowercase name; parsing also accepts the variant name.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(into = "&'static str", try_from = "String")]
pub enum FunctionMode {
    Sinusoidal,
    Linear,
    Quadratic,
    L1Norm,
    Tanh,
}

impl FunctionMode {
    pub const ALL: [FunctionMode; 5] = [
        FunctionMode::Sinusoidal,
        FunctionMode::Linear,
        FunctionMode::Quadratic,
        FunctionMode::L1Norm,
        FunctionMode::Tanh,
    ];

    pub fn name(self) -> &'static str {
        match self {
            FunctionMode::Sinusoidal => "sinusoidal",
            FunctionMode::Linear => "linear",
            FunctionMode::Quadratic => "quadratic",
            FunctionMode::L1Norm => "l1norm",
            FunctionMode::Tanh => "tanh",
        }
    }
}

impl fmt::Display for FunctionMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl From<FunctionMode> for &'static str {
    fn from(m: FunctionMode) -> Self {
        m.name()
    }
}

impl TryFrom<String> for FunctionMode {
    type Error = TaskError;

    fn try_from(s: String) -> Result<Self, Self::Error> {
        s.parse()
    }
}

impl FromStr for FunctionMode {
    type Err = TaskError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        FunctionMode::ALL
            .into_iter()
            .find(|m| m.name().eq_ignore_ascii_case(s) || format!("{m:?}").eq_ignore_ascii_case(s))
            .ok_or_else(|| TaskError::UnknownMode(s.to_string()))
    }
}

/// An ordered, non-empty set of function modes. A task's mode label is its
/// mode's index in this set.
///
/// Deserializes from either a list of modes or a mode count (2, 3 or 5).
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "ModeSetRepr", into = "Vec<FunctionMode>")]
pub struct ModeSet(Vec<FunctionMode>);

#[derive(Deserialize)]
#[serde(untagged)]
enum ModeSetRepr {
    Count(usize),
    Modes(Vec<FunctionMode>),
}

impl TryFrom<ModeSetRepr> for ModeSet {
    type Error = TaskError;

    fn try_from(r: ModeSetRepr) -> Result<Self, Self::Error> {
        match r {
            ModeSetRepr::Count(n) => Self::with_count(n),
            ModeSetRepr::Modes(m) => Self::new(m),
        }
    }
}

impl ModeSet {
    pub fn new(modes: Vec<FunctionMode>) -> Result<Self, TaskError> {
        if modes.is_empty() {
            return Err(TaskError::EmptyModeSet);
        }
        Ok(Self(modes))
    }

    /// The nested benchmark configurations: 2 = sinusoidal + linear,
    /// 3 adds quadratic, 5 is every family.
    pub fn with_count(count: usize) -> Result<Self, TaskError> {
        match count {
            2 | 3 | 5 => Ok(Self(FunctionMode::ALL[..count].to_vec())),
            n => Err(TaskError::ModeCount(n)),
        }
    }

    pub fn single(mode: FunctionMode) -> Self {
        Self(vec![mode])
    }

    pub fn modes(&self) -> &[FunctionMode] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn label_of(&self, mode: FunctionMode) -> Option<usize> {
        self.0.iter().position(|&m| m == mode)
    }
}

impl TryFrom<Vec<FunctionMode>> for ModeSet {
    type Error = TaskError;

    fn try_from(v: Vec<FunctionMode>) -> Result<Self, Self::Error> {
        Self::new(v)
    }
}

impl From<ModeSet> for Vec<FunctionMode> {
    fn from(m: ModeSet) -> Self {
        m.0
    }
}

/// A seeded random stream. Equal seeds give equal task sequences.
#[derive(Clone, Debug)]
pub struct RngStream {
    seed: u64,
    rng: ChaCha8Rng,
}

impl RngStream {
    pub fn new(seed: u64) -> Self {
        Self { seed, rng: ChaCha8Rng::seed_from_u64(seed) }
    }

    /// Independent stream for item `index` of a run seeded with `self.seed()`.
    pub fn substream(&self, index: u64) -> Self {
        Self::new(self.seed.wrapping_add(index))
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }
}

impl RngCore for RngStream {
    fn next_u32(&mut self) -> u32 {
        self.rng.next_u32()
    }

    fn next_u64(&mut self) -> u64 {
        self.rng.next_u64()
    }

    fn fill_bytes(&mut self, dst: &mut [u8]) {
        self.rng.fill_bytes(dst)
    }
}

/// A ground-truth function defining one task.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode")]
pub enum TaskSpec {
    /// `A * sin(w * x + b)`
    Sinusoidal {
        #[serde(rename = "A")]
        amplitude: f64,
        #[serde(rename = "w")]
        frequency: f64,
        #[serde(rename = "b")]
        phase: f64,
    },
    /// `A * x + b`
    Linear {
        #[serde(rename = "A")]
        slope: f64,
        #[serde(rename = "b")]
        intercept: f64,
    },
    /// `A * (x - c)^2 + b`
    Quadratic {
        #[serde(rename = "A")]
        scale: f64,
        #[serde(rename = "c")]
        center: f64,
        #[serde(rename = "b")]
        offset: f64,
    },
    /// `A * |x - c| + b`
    L1Norm {
        #[serde(rename = "A")]
        scale: f64,
        #[serde(rename = "c")]
        center: f64,
        #[serde(rename = "b")]
        offset: f64,
    },
    /// `A * tanh(x - c) + b`
    Tanh {
        #[serde(rename = "A")]
        scale: f64,
        #[serde(rename = "c")]
        center: f64,
        #[serde(rename = "b")]
        offset: f64,
    },
}

/// Named parameters of a spec; `None` where the family has no such parameter.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct SpecParams {
    pub a: f64,
    pub w: Option<f64>,
    pub c: Option<f64>,
    pub b: f64,
}

impl TaskSpec {
    pub fn mode(&self) -> FunctionMode {
        match self {
            TaskSpec::Sinusoidal { .. } => FunctionMode::Sinusoidal,
            TaskSpec::Linear { .. } => FunctionMode::Linear,
            TaskSpec::Quadratic { .. } => FunctionMode::Quadratic,
            TaskSpec::L1Norm { .. } => FunctionMode::L1Norm,
            TaskSpec::Tanh { .. } => FunctionMode::Tanh,
        }
    }

    pub fn params(&self) -> SpecParams {
        match *self {
            TaskSpec::Sinusoidal { amplitude, frequency, phase } => {
                SpecParams { a: amplitude, w: Some(frequency), c: None, b: phase }
            }
            TaskSpec::Linear { slope, intercept } => SpecParams { a: slope, w: None, c: None, b: intercept },
            TaskSpec::Quadratic { scale, center, offset }
            | TaskSpec::L1Norm { scale, center, offset }
            | TaskSpec::Tanh { scale, center, offset } => {
                SpecParams { a: scale, w: None, c: Some(center), b: offset }
            }
        }
    }

    /// Noise-free value of the function at `x`.
    pub fn evaluate(&self, x: f64) -> f64 {
        match *self {
            TaskSpec::Sinusoidal { amplitude, frequency, phase } => amplitude * (frequency * x + phase).sin(),
            TaskSpec::Linear { slope, intercept } => slope * x + intercept,
            TaskSpec::Quadratic { scale, center, offset } => scale * (x - center).powi(2) + offset,
            TaskSpec::L1Norm { scale, center, offset } => scale * (x - center).abs() + offset,
            TaskSpec::Tanh { scale, center, offset } => scale * (x - center).tanh() + offset,
        }
    }

    /// Whether every parameter lies in its family's sampling range.
    pub fn in_range(&self) -> bool {
        let within = |v: f64, (lo, hi): (f64, f64)| (lo..=hi).contains(&v);
        let split = |v: f64| within(v.abs(), SMALL_SCALE);
        match *self {
            TaskSpec::Sinusoidal { amplitude, frequency, phase } => {
                within(amplitude, (0.1, 5.0)) && within(frequency, (0.5, 2.0)) && within(phase, (0.0, 2.0 * PI))
            }
            TaskSpec::Linear { slope, intercept } => within(slope, UNIT3) && within(intercept, UNIT3),
            TaskSpec::Quadratic { scale, center, offset } | TaskSpec::L1Norm { scale, center, offset } => {
                split(scale) && within(center, UNIT3) && within(offset, UNIT3)
            }
            TaskSpec::Tanh { scale, center, offset } => {
                within(scale, UNIT3) && within(center, UNIT3) && within(offset, UNIT3)
            }
        }
    }
}

const UNIT3: (f64, f64) = (-3.0, 3.0);
/// Magnitude range of the split `[-0.15, -0.02] ∪ [0.02, 0.15]` scale.
const SMALL_SCALE: (f64, f64) = (0.02, 0.15);

fn uniform<R: Rng + ?Sized>(rng: &mut R, (lo, hi): (f64, f64)) -> f64 {
    rng.random_range(lo..=hi)
}

/// Fair coin for the sign, then uniform magnitude.
fn split_scale<R: Rng + ?Sized>(rng: &mut R) -> f64 {
    let sign = if rng.random_bool(0.5) { 1.0 } else { -1.0 };
    sign * uniform(rng, SMALL_SCALE)
}

/// Draws parameters for one function of `mode`.
pub fn sample_spec<R: Rng + ?Sized>(mode: FunctionMode, rng: &mut R) -> TaskSpec {
    match mode {
        FunctionMode::Sinusoidal => TaskSpec::Sinusoidal {
            amplitude: uniform(rng, (0.1, 5.0)),
            frequency: uniform(rng, (0.5, 2.0)),
            phase: uniform(rng, (0.0, 2.0 * PI)),
        },
        FunctionMode::Linear => TaskSpec::Linear { slope: uniform(rng, UNIT3), intercept: uniform(rng, UNIT3) },
        FunctionMode::Quadratic => TaskSpec::Quadratic {
            scale: split_scale(rng),
            center: uniform(rng, UNIT3),
            offset: uniform(rng, UNIT3),
        },
        FunctionMode::L1Norm => TaskSpec::L1Norm {
            scale: split_scale(rng),
            center: uniform(rng, UNIT3),
            offset: uniform(rng, UNIT3),
        },
        FunctionMode::Tanh => TaskSpec::Tanh {
            scale: uniform(rng, UNIT3),
            center: uniform(rng, UNIT3),
            offset: uniform(rng, UNIT3),
        },
    }
}

/// Picks a mode uniformly from `modes` and draws its parameters.
pub fn sample_task<R: Rng + ?Sized>(modes: &[FunctionMode], rng: &mut R) -> Result<TaskSpec, TaskError> {
    if modes.is_empty() {
        return Err(TaskError::EmptyModeSet);
    }
    let mode = modes[rng.random_range(0..modes.len())];
    Ok(sample_spec(mode, rng))
}

pub fn evaluate_function(spec: &TaskSpec, x: f64) -> f64 {
    spec.evaluate(x)
}

/// Paired inputs and targets.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Points {
    pub x: Vec<f64>,
    pub y: Vec<f64>,
}

impl Points {
    pub fn len(&self) -> usize {
        self.x.len()
    }

    pub fn is_empty(&self) -> bool {
        self.x.is_empty()
    }

    pub fn pairs(&self) -> impl Iterator<Item = (f64, f64)> + '_ {
        self.x.iter().copied().zip(self.y.iter().copied())
    }

    pub fn is_sorted_by_x(&self) -> bool {
        self.x.windows(2).all(|w| w[0] <= w[1])
    }

    /// Reorders pairs ascending by x.
    pub fn sort_by_x(&mut self) {
        let mut pairs: Vec<(f64, f64)> = self.pairs().collect();
        pairs.sort_by(|a, b| a.0.total_cmp(&b.0));
        self.x = pairs.iter().map(|p| p.0).collect();
        self.y = pairs.iter().map(|p| p.1).collect();
    }
}

/// A realized task: support set for adaptation and query set for evaluation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskSample {
    pub spec: TaskSpec,
    pub mode_label: usize,
    pub support: Points,
    pub query: Points,
}

fn draw_points<R: Rng + ?Sized>(spec: &TaskSpec, n: usize, noise: Option<&Normal<f64>>, rng: &mut R) -> Points {
    let mut pts = Points { x: Vec::with_capacity(n), y: Vec::with_capacity(n) };
    for _ in 0..n {
        let x = uniform(rng, X_RANGE);
        let eps = noise.map_or(0.0, |d| d.sample(rng));
        pts.x.push(x);
        pts.y.push(spec.evaluate(x) + eps);
    }
    pts
}

/// Draws K support and L query points with Gaussian output noise.
/// The support set is stored sorted by x.
pub fn realize_task<R: Rng + ?Sized>(
    spec: &TaskSpec,
    k: usize,
    l: usize,
    noise_sigma: f64,
    rng: &mut R,
) -> Result<TaskSample, TaskError> {
    if k == 0 || l == 0 {
        return Err(TaskError::EmptySet { k, l });
    }
    if !(noise_sigma.is_finite() && noise_sigma >= 0.0) {
        return Err(TaskError::Noise(noise_sigma));
    }
    let normal = (noise_sigma > 0.0).then(|| Normal::new(0.0, noise_sigma).expect("valid sigma"));
    let mut support = draw_points(spec, k, normal.as_ref(), rng);
    support.sort_by_x();
    let query = draw_points(spec, l, normal.as_ref(), rng);
    Ok(TaskSample { spec: *spec, mode_label: 0, support, query })
}

/// Sampling configuration for a stream of tasks.
#[derive(Clone, Debug, PartialEq)]
pub struct TaskDistribution {
    pub modes: ModeSet,
    pub k: usize,
    pub l: usize,
    pub noise_sigma: f64,
}

impl TaskDistribution {
    pub fn new(modes: ModeSet, k: usize, l: usize, noise_sigma: f64) -> Result<Self, TaskError> {
        if k == 0 || l == 0 {
            return Err(TaskError::EmptySet { k, l });
        }
        if !(noise_sigma.is_finite() && noise_sigma >= 0.0) {
            return Err(TaskError::Noise(noise_sigma));
        }
        Ok(Self { modes, k, l, noise_sigma })
    }

    /// Uniform mode, then a realized task labelled by its index in the mode set.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> TaskSample {
        let label = rng.random_range(0..self.modes.len());
        self.sample_labelled(label, rng)
    }

    /// A task from the mode at `label`.
    pub fn sample_labelled<R: Rng + ?Sized>(&self, label: usize, rng: &mut R) -> TaskSample {
        let spec = sample_spec(self.modes.modes()[label], rng);
        let mut task = realize_task(&spec, self.k, self.l, self.noise_sigma, rng).expect("validated sizes");
        task.mode_label = label;
        task
    }
}
