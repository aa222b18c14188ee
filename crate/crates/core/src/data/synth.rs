//! Labeled synthetic multivariate series.
//!
//! Every channel is a phase-shifted copy of one shared oscillator whose
//! amplitude drifts slowly, plus a shared slow level, a small channel-own
//! sinusoid and Gaussian noise:
//!
//! ```text
//! x_j(t) = offset_j + scale_j · ( A(t)·r_j·cos(θ(t) − φ_j) + g_j·L(t)
//!                                + c·sin(2π t / Q_j + ψ_j) + σ·ε )
//! ```
//!
//! The shared drivers make cross-channel structure learnable; the slow
//! amplitude and level drifts keep distant windows distinguishable.

use std::f64::consts::TAU;
use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::{DataError, MvtsDataset};
use crate::autodiff::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AnomalyKind {
    /// 1–3 timesteps where one or two channels jump by several scales.
    Spike,
    /// A stretch where one or two channels sit offset from normal.
    LevelShift,
    /// A stretch where two or three channels invert their coupling to the
    /// shared oscillator.
    CorrelationBreak,
    /// One channel is frozen at a constant everywhere except inside its
    /// anomaly stretches, where it fluctuates. A train split taken from a
    /// clean prefix therefore sees the channel as constant.
    StuckChannel,
}

impl AnomalyKind {
    pub const ALL: [AnomalyKind; 4] = [
        AnomalyKind::Spike,
        AnomalyKind::LevelShift,
        AnomalyKind::CorrelationBreak,
        AnomalyKind::StuckChannel,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Self::Spike => "spike",
            Self::LevelShift => "level-shift",
            Self::CorrelationBreak => "correlation-break",
            Self::StuckChannel => "stuck-channel",
        }
    }

    fn length_range(self) -> (usize, usize) {
        match self {
            Self::Spike => (1, 3),
            Self::LevelShift | Self::CorrelationBreak | Self::StuckChannel => (20, 60),
        }
    }
}

impl fmt::Display for AnomalyKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for AnomalyKind {
    type Err = DataError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Self::ALL
            .into_iter()
            .find(|k| k.as_str() == s.trim())
            .ok_or_else(|| {
                DataError::Invalid(format!(
                    "unknown anomaly kind {s:?}; expected one of spike, level-shift, correlation-break, stuck-channel"
                ))
            })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    /// Timesteps `T` (the clean training prefix for [`synth_train_test`]).
    pub length: usize,
    /// Channels `m`.
    pub channels: usize,
    pub seed: u64,
    /// Fraction of labeled timesteps, in `[0, 0.5]`.
    pub anomaly_fraction: f64,
    pub kinds: Vec<AnomalyKind>,
    /// Range the shared oscillator period is drawn from, in timesteps.
    pub oscillator_period: (f64, f64),
    /// Amplitude of each channel's own sinusoid relative to the oscillator.
    pub channel_amplitude: f64,
    /// Range the channel-own sinusoid periods are drawn from.
    pub channel_period: (f64, f64),
    /// Standard deviation of the additive noise, in channel scale units.
    pub noise_scale: f64,
    /// Amplitude of a stuck channel's fluctuation, in channel scale units.
    pub stuck_amplitude: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            length: 4000,
            channels: 6,
            seed: 7,
            anomaly_fraction: 0.2,
            kinds: vec![AnomalyKind::Spike, AnomalyKind::CorrelationBreak],
            oscillator_period: (20.0, 40.0),
            channel_amplitude: 0.2,
            channel_period: (5.0, 15.0),
            noise_scale: 0.05,
            stuck_amplitude: 0.3,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<(), DataError> {
        let bad = |msg: String| Err(DataError::Invalid(msg));
        if self.length == 0 || self.channels == 0 {
            return bad("length and channels must be ≥ 1".into());
        }
        if !(0.0..=0.5).contains(&self.anomaly_fraction) {
            return bad(format!("anomaly_fraction {} outside [0, 0.5]", self.anomaly_fraction));
        }
        if self.anomaly_fraction > 0.0 && self.kinds.is_empty() {
            return bad("anomaly_fraction > 0 needs at least one anomaly kind".into());
        }
        let (lo, hi) = self.oscillator_period;
        let (clo, chi) = self.channel_period;
        if !(lo > 1.0 && hi >= lo && clo > 1.0 && chi >= clo) {
            return bad("periods must be > 1 with min ≤ max".into());
        }
        if self.noise_scale < 0.0 || self.channel_amplitude < 0.0 || self.stuck_amplitude < 0.0 {
            return bad("amplitudes and noise must be ≥ 0".into());
        }
        Ok(())
    }
}

/// Seed-determined structure of the base signal.
struct Signal {
    period: f64,
    phase0: f64,
    amp_period: f64,
    amp_phase: f64,
    level_period: f64,
    level_phase: f64,
    offset: Vec<f64>,
    scale: Vec<f64>,
    coupling: Vec<f64>,
    phase: Vec<f64>,
    level_gain: Vec<f64>,
    own_period: Vec<f64>,
    own_phase: Vec<f64>,
    stuck_channel: Option<usize>,
}

impl Signal {
    fn draw(cfg: &SynthConfig, rng: &mut ChaCha8Rng) -> Self {
        let m = cfg.channels;
        let (lo, hi) = cfg.oscillator_period;
        let (clo, chi) = cfg.channel_period;
        let uniform = |rng: &mut ChaCha8Rng, a: f64, b: f64| a + (b - a) * rng.random::<f64>();
        let period = uniform(rng, lo, hi);
        let phase0 = uniform(rng, 0.0, TAU);
        let amp_period = uniform(rng, 300.0, 600.0);
        let amp_phase = uniform(rng, 0.0, TAU);
        let level_period = uniform(rng, 800.0, 1500.0);
        let level_phase = uniform(rng, 0.0, TAU);
        let offset = (0..m).map(|_| uniform(rng, -5.0, 5.0)).collect();
        let scale = (0..m).map(|_| uniform(rng, 0.5, 2.0)).collect();
        let coupling = (0..m).map(|_| uniform(rng, 0.7, 1.3)).collect();
        let phase = (0..m).map(|_| uniform(rng, 0.0, TAU)).collect();
        let level_gain = (0..m).map(|_| uniform(rng, -0.8, 0.8)).collect();
        let own_period = (0..m).map(|_| uniform(rng, clo, chi)).collect();
        let own_phase = (0..m).map(|_| uniform(rng, 0.0, TAU)).collect();
        let stuck_channel = cfg
            .kinds
            .contains(&AnomalyKind::StuckChannel)
            .then(|| rng.random_range(0..m));
        Self {
            period,
            phase0,
            amp_period,
            amp_phase,
            level_period,
            level_phase,
            offset,
            scale,
            coupling,
            phase,
            level_gain,
            own_period,
            own_phase,
            stuck_channel,
        }
    }

    fn theta(&self, t: f64) -> f64 {
        TAU * t / self.period + self.phase0
    }

    fn amplitude(&self, t: f64) -> f64 {
        1.0 + 0.5 * (TAU * t / self.amp_period + self.amp_phase).sin()
    }

    fn oscillator(&self, j: usize, t: f64) -> f64 {
        self.amplitude(t) * self.coupling[j] * (self.theta(t) - self.phase[j]).cos()
    }

    /// Clean value in channel scale units, before offset and scale.
    fn unit_value(&self, cfg: &SynthConfig, j: usize, t: f64, noise: f64) -> f64 {
        let level = (TAU * t / self.level_period + self.level_phase).sin();
        let own = (TAU * t / self.own_period[j] + self.own_phase[j]).sin();
        self.oscillator(j, t) + self.level_gain[j] * level + cfg.channel_amplitude * own + cfg.noise_scale * noise
    }
}

struct Segment {
    start: usize,
    len: usize,
    kind: AnomalyKind,
}

/// Places non-overlapping segments covering exactly `target` rows of
/// `[lo, hi)`, leaving a one-row gap between segments.
fn place_segments(
    cfg: &SynthConfig,
    lo: usize,
    hi: usize,
    target: usize,
    rng: &mut ChaCha8Rng,
) -> Vec<Segment> {
    let mut taken = vec![false; hi - lo];
    let mut segments = Vec::new();
    let mut covered = 0;
    let mut attempts = 0;
    while covered < target && attempts < 100_000 {
        attempts += 1;
        let kind = cfg.kinds[rng.random_range(0..cfg.kinds.len())];
        let (min_len, max_len) = kind.length_range();
        let len = rng.random_range(min_len..=max_len).min(target - covered);
        if len > hi - lo {
            continue;
        }
        let start = rng.random_range(0..=(hi - lo - len));
        let guard_lo = start.saturating_sub(1);
        let guard_hi = (start + len + 1).min(hi - lo);
        if taken[guard_lo..guard_hi].iter().any(|&t| t) {
            continue;
        }
        taken[start..start + len].fill(true);
        covered += len;
        segments.push(Segment {
            start: lo + start,
            len,
            kind,
        });
    }
    segments.sort_by_key(|s| s.start);
    segments
}

fn pick_channels(m: usize, count: usize, exclude: Option<usize>, rng: &mut ChaCha8Rng) -> Vec<usize> {
    let pool: Vec<usize> = (0..m).filter(|&c| Some(c) != exclude).collect();
    if pool.is_empty() {
        return Vec::new();
    }
    let count = count.min(pool.len());
    rand::seq::index::sample(rng, pool.len(), count)
        .into_iter()
        .map(|k| pool[k])
        .collect()
}

/// Generates `total` rows, injecting anomalies only into rows `[clean, total)`.
fn generate(cfg: &SynthConfig, total: usize, clean: usize) -> Result<MvtsDataset, DataError> {
    cfg.validate()?;
    let m = cfg.channels;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let signal = Signal::draw(cfg, &mut rng);

    let mut units = vec![0.0; total * m];
    for t in 0..total {
        for j in 0..m {
            let eps: f64 = StandardNormal.sample(&mut rng);
            units[t * m + j] = signal.unit_value(cfg, j, t as f64, eps);
        }
    }
    if let Some(s) = signal.stuck_channel {
        for t in 0..total {
            units[t * m + s] = 0.0;
        }
    }

    let target = ((total - clean) as f64 * cfg.anomaly_fraction).round() as usize;
    let segments = place_segments(cfg, clean, total, target, &mut rng);
    let mut labels = vec![0u8; total];
    for seg in &segments {
        labels[seg.start..seg.start + seg.len].fill(1);
        inject(cfg, &signal, seg, &mut units, &mut rng);
    }

    let data = units
        .iter()
        .enumerate()
        .map(|(i, u)| signal.offset[i % m] + signal.scale[i % m] * u)
        .collect();
    let samples = Tensor::matrix(total, m, data).map_err(|e| DataError::Invalid(e.to_string()))?;
    let names = (0..m).map(|j| format!("sensor_{j}")).collect();
    MvtsDataset::new(samples, Some(labels), names)
}

fn inject(cfg: &SynthConfig, signal: &Signal, seg: &Segment, units: &mut [f64], rng: &mut ChaCha8Rng) {
    let m = cfg.channels;
    let rows = seg.start..seg.start + seg.len;
    match seg.kind {
        AnomalyKind::Spike => {
            for t in rows {
                let count = rng.random_range(1..=2);
                for j in pick_channels(m, count, signal.stuck_channel, rng) {
                    let sign = if rng.random::<bool>() { 1.0 } else { -1.0 };
                    units[t * m + j] += sign * rng.random_range(4.0..7.0);
                }
            }
        }
        AnomalyKind::LevelShift => {
            let count = rng.random_range(1..=2);
            for j in pick_channels(m, count, signal.stuck_channel, rng) {
                let sign = if rng.random::<bool>() { 1.0 } else { -1.0 };
                let shift = sign * rng.random_range(2.5..4.0);
                for t in rows.clone() {
                    units[t * m + j] += shift;
                }
            }
        }
        AnomalyKind::CorrelationBreak => {
            let count = rng.random_range(2..=3);
            for j in pick_channels(m, count, signal.stuck_channel, rng) {
                for t in rows.clone() {
                    // cos(θ − φ − π) = −cos(θ − φ)
                    units[t * m + j] -= 2.0 * signal.oscillator(j, t as f64);
                }
            }
        }
        AnomalyKind::StuckChannel => {
            let Some(s) = signal.stuck_channel else { return };
            let period = rng.random_range(4.0..9.0);
            for t in rows {
                units[t * m + s] = cfg.stuck_amplitude * (TAU * t as f64 / period).sin();
            }
        }
    }
}

/// A single labeled series of `cfg.length` rows with anomalies anywhere.
pub fn synth_generate(cfg: &SynthConfig) -> Result<MvtsDataset, DataError> {
    generate(cfg, cfg.length, 0)
}

/// A clean training series of `cfg.length` rows and the `test_len` rows
/// that continue it, with anomalies injected only into the continuation.
pub fn synth_train_test(cfg: &SynthConfig, test_len: usize) -> Result<(MvtsDataset, MvtsDataset), DataError> {
    if test_len == 0 {
        return Err(DataError::Invalid("test length must be ≥ 1".into()));
    }
    let full = generate(cfg, cfg.length + test_len, cfg.length)?;
    Ok((full.slice(0, cfg.length)?, full.slice(cfg.length, test_len)?))
}
