//! Vectorized diffusion time schedules.
//!
//! The streaming schedule assigns every latent frame k its own noise
//! level alpha_t^k = clamp(t - k/n_s, 0, 1), beta = 1 - alpha. At any
//! global time t this splits the sequence into three regions:
//!
//!   fixed past   k < m(t)   alpha == 1, committed and immutable
//!   active       m <= k < n 0 < alpha < 1, the only frames updated
//!   future noise k >= n     alpha == 0, untouched pure noise
//!
//! Boundary convention: alpha exactly 1 means fixed past, exactly 0 means
//! future noise, so the commit guarantee and locality bounds are exact
//! statements, not tolerance-based ones. To keep the boundaries exact in
//! floating point, times produced by `advance` are snapped onto the
//! k/n_s lattice whenever they land within 1e-9 of it.

use crate::error::{FloodError, Result};
use crate::num::rng::Rng;
use crate::num::scalar::Scalar;
use crate::num::tensor::Tensor;

use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScheduleKind {
    /// Lower-triangular clamp ramp (the streaming schedule).
    Triangular,
    /// Independent per-frame noise levels (vanilla diffusion forcing).
    Random,
    /// One shared noise level for all frames (chunk diffusion).
    Chunk,
}

impl std::fmt::Display for ScheduleKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            ScheduleKind::Triangular => write!(f, "triangular"),
            ScheduleKind::Random => write!(f, "random"),
            ScheduleKind::Chunk => write!(f, "chunk"),
        }
    }
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct ScheduleParams {
    /// Streaming step size: how many frames the ramp spans.
    pub n_s: f64,
    /// Latent frame count of the sequence under consideration.
    pub seq_len: usize,
    pub kind: ScheduleKind,
}

impl ScheduleParams {
    pub fn triangular(n_s: f64, seq_len: usize) -> Result<Self> {
        let p = ScheduleParams {
            n_s,
            seq_len,
            kind: ScheduleKind::Triangular,
        };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.n_s > 0.0) || !self.n_s.is_finite() {
            return Err(FloodError::Config(format!("n_s must be > 0, got {}", self.n_s)));
        }
        if self.seq_len == 0 {
            return Err(FloodError::Config("seq_len must be >= 1".into()));
        }
        Ok(())
    }

    fn require_triangular(&self) -> Result<()> {
        if self.kind != ScheduleKind::Triangular {
            return Err(FloodError::Config(format!(
                "operation defined for the triangular schedule, kind is {}",
                self.kind
            )));
        }
        Ok(())
    }

    /// Upper end of the training-time range: Uniform(0, 1 + (K-1)/n_s)
    /// lets every frame index visit every noise level.
    pub fn train_time_max(&self) -> f64 {
        1.0 + (self.seq_len as f64 - 1.0) / self.n_s
    }
}

/// Per-frame noise schedule at one global time.
#[derive(Clone, Debug, PartialEq)]
pub struct AlphaBetaVector {
    alpha: Vec<f64>,
}

impl AlphaBetaVector {
    pub fn from_alphas(alpha: Vec<f64>) -> Result<Self> {
        if alpha.iter().any(|a| !(0.0..=1.0).contains(a)) {
            return Err(FloodError::Config("alpha outside [0,1]".into()));
        }
        Ok(AlphaBetaVector { alpha })
    }

    pub fn len(&self) -> usize {
        self.alpha.len()
    }

    pub fn is_empty(&self) -> bool {
        self.alpha.is_empty()
    }

    pub fn alpha(&self, k: usize) -> f64 {
        self.alpha[k]
    }

    /// beta is defined as 1 - alpha, so the pair sums to 1 exactly.
    pub fn beta(&self, k: usize) -> f64 {
        1.0 - self.alpha[k]
    }

    pub fn alphas(&self) -> &[f64] {
        &self.alpha
    }
}

/// (fixed past, active window, future noise) frame partition.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct RegionPartition {
    /// First frame with alpha < 1 (fixed past is [0, m)).
    pub m: usize,
    /// First frame with alpha == 0 (future noise is [n, seq_len)).
    pub n: usize,
    pub seq_len: usize,
}

impl RegionPartition {
    pub fn active(&self) -> std::ops::Range<usize> {
        self.m..self.n
    }

    pub fn active_len(&self) -> usize {
        self.n - self.m
    }

    pub fn is_all_committed(&self) -> bool {
        self.m == self.seq_len
    }
}

/// alpha_t^k = clamp(t - k/n_s, 0, 1).
pub fn alpha_at(params: &ScheduleParams, t: f64, k: usize) -> Result<f64> {
    params.require_triangular()?;
    if k >= params.seq_len {
        return Err(FloodError::Config(format!(
            "frame {k} out of range (seq_len {})",
            params.seq_len
        )));
    }
    Ok((t - k as f64 / params.n_s).clamp(0.0, 1.0))
}

pub fn beta_at(params: &ScheduleParams, t: f64, k: usize) -> Result<f64> {
    Ok(1.0 - alpha_at(params, t, k)?)
}

/// All K alphas at time t.
pub fn alphas_at(params: &ScheduleParams, t: f64) -> Result<AlphaBetaVector> {
    params.require_triangular()?;
    let alpha = (0..params.seq_len)
        .map(|k| (t - k as f64 / params.n_s).clamp(0.0, 1.0))
        .collect();
    Ok(AlphaBetaVector { alpha })
}

/// Region partition at time t: m is the first frame with alpha < 1, n the
/// first with alpha == 0. alpha is non-increasing in k, so both are well
/// defined and m <= n.
pub fn partition(params: &ScheduleParams, t: f64) -> Result<RegionPartition> {
    params.require_triangular()?;
    let k_len = params.seq_len;
    let mut m = k_len;
    for k in 0..k_len {
        if alpha_at(params, t, k)? < 1.0 {
            m = k;
            break;
        }
    }
    let mut n = k_len;
    for k in m..k_len {
        if alpha_at(params, t, k)? <= 0.0 {
            n = k;
            break;
        }
    }
    Ok(RegionPartition {
        m,
        n,
        seq_len: k_len,
    })
}

/// Snap t to the nearest multiple of 1/n_s when within 1e-9 relative, so
/// integer numbers of solver steps land on exact region boundaries.
pub fn snap_time(t: f64, n_s: f64) -> f64 {
    let u = t * n_s;
    let r = u.round();
    if (u - r).abs() <= 1e-9 * u.abs().max(1.0) {
        r / n_s
    } else {
        t
    }
}

/// t' = t + dt, snapped to the schedule lattice.
pub fn advance(params: &ScheduleParams, t: f64, dt: f64) -> Result<f64> {
    if !(dt > 0.0) {
        return Err(FloodError::Config(format!("dt must be > 0, got {dt}")));
    }
    Ok(snap_time(t + dt, params.n_s))
}

/// Per-frame Gaussian corruption: x[k] = alpha[k] * z[k] + beta[k] * eps[k].
/// Rows of `z` and `eps` are latent frames.
pub fn corrupt<S: Scalar>(
    z: &Tensor<S>,
    ab: &AlphaBetaVector,
    eps: &Tensor<S>,
) -> Result<Tensor<S>> {
    if z.shape() != eps.shape() {
        return Err(FloodError::Shape(format!(
            "corrupt: z {:?} vs eps {:?}",
            z.shape(),
            eps.shape()
        )));
    }
    if z.rows() != ab.len() {
        return Err(FloodError::Shape(format!(
            "corrupt: {} frames vs {} alphas",
            z.rows(),
            ab.len()
        )));
    }
    let w = z.row_len();
    let mut out = Tensor::zeros(z.shape());
    for k in 0..z.rows() {
        let a = S::from_f64c(ab.alpha(k));
        let b = S::from_f64c(ab.beta(k));
        for j in 0..w {
            out.data_mut()[k * w + j] = a * z.data()[k * w + j] + b * eps.data()[k * w + j];
        }
    }
    Ok(out)
}

/// Noise levels drawn for one training step.
#[derive(Clone, Debug)]
pub enum TrainingTimes {
    /// Per-sample global times; alphas follow the triangular ramp.
    Triangular(Vec<f64>),
    /// Per-sample, per-frame independent alphas (diffusion-forcing ablation).
    Random(Vec<Vec<f64>>),
    /// Per-sample single alpha shared by all frames (chunk ablation).
    Chunk(Vec<f64>),
}

impl TrainingTimes {
    /// Resolve to per-sample alpha vectors of length seq_len.
    pub fn alphas(&self, params: &ScheduleParams) -> Result<Vec<AlphaBetaVector>> {
        match self {
            TrainingTimes::Triangular(ts) => {
                ts.iter().map(|&t| alphas_at(params, t)).collect()
            }
            TrainingTimes::Random(rows) => rows
                .iter()
                .map(|r| AlphaBetaVector::from_alphas(r.clone()))
                .collect(),
            TrainingTimes::Chunk(shared) => shared
                .iter()
                .map(|&a| {
                    AlphaBetaVector::from_alphas(vec![a; params.seq_len])
                })
                .collect(),
        }
    }
}

/// Draw noise levels for a batch according to the schedule kind.
pub fn sample_training_times(
    params: &ScheduleParams,
    rng: &mut Rng,
    batch: usize,
) -> TrainingTimes {
    match params.kind {
        ScheduleKind::Triangular => {
            let hi = params.train_time_max();
            TrainingTimes::Triangular((0..batch).map(|_| rng.uniform_in(0.0, hi)).collect())
        }
        ScheduleKind::Random => TrainingTimes::Random(
            (0..batch)
                .map(|_| (0..params.seq_len).map(|_| rng.uniform_f64()).collect())
                .collect(),
        ),
        ScheduleKind::Chunk => {
            TrainingTimes::Chunk((0..batch).map(|_| rng.uniform_f64()).collect())
        }
    }
}
