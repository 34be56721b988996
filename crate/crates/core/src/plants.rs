//! Ground-truth plants, excitation signals, datasets and channel scaling.
//!
//! Two plant families are provided:
//!
//! - Van der Pol oscillators `ẋ1 = x2, ẋ2 = θ x2 (1 − x1²) − x1 + u`, `y = x`,
//!   integrated with classical RK4 under a zero-order hold.
//! - The torque-driven pendulum of the common Gym benchmark (angle measured
//!   from upright, semi-implicit Euler, rate and torque clipping), `y = φ`.
//!
//! Sample convention: row `k` of a dataset holds the input `u_k` and the output
//! measured *after* `u_k` has been applied for one sample period, matching the
//! model recurrence where `u_{t+1}` drives `ŷ_{t+1}`.

use std::f64::consts::{PI, TAU};
use std::fs;
use std::ops::Range;
use std::path::{Path, PathBuf};

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seed::{rng_for, tag};

pub const VDP_DT: f64 = 0.05;
pub const PENDULUM_DT: f64 = 0.05;
pub const PENDULUM_GRAVITY: f64 = 10.0;
pub const PENDULUM_LENGTH: f64 = 1.0;
pub const PENDULUM_MAX_TORQUE: f64 = 2.0;
pub const PENDULUM_MAX_SPEED: f64 = 8.0;
pub const PENDULUM_MASS_RANGE: (f64, f64) = (0.5, 1.5);

/// Van der Pol states beyond this magnitude count as a blow-up (the negative
/// damping branch escapes in finite time).
pub const VDP_DIVERGENCE: f64 = 1e6;

/// Dwell range (inclusive, in samples) of the piecewise-constant excitation.
pub const DWELL_RANGE: (usize, usize) = (5, 20);

/// Channels with variance below this keep a unit scale.
const VARIANCE_FLOOR: f64 = 1e-24;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PlantKind {
    Vdp,
    Pendulum,
}

impl PlantKind {
    pub fn n_x(self) -> usize {
        2
    }

    pub fn n_u(self) -> usize {
        1
    }

    pub fn n_y(self) -> usize {
        match self {
            PlantKind::Vdp => 2,
            PlantKind::Pendulum => 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum PlantParams {
    Vdp {
        /// Damping ratio θ.
        theta: f64,
        dt: f64,
    },
    Pendulum {
        /// Mass in kg.
        mass: f64,
        length: f64,
        gravity: f64,
        dt: f64,
    },
}

impl PlantParams {
    pub fn vdp(theta: f64) -> Self {
        PlantParams::Vdp { theta, dt: VDP_DT }
    }

    pub fn pendulum(mass: f64) -> Self {
        PlantParams::Pendulum {
            mass,
            length: PENDULUM_LENGTH,
            gravity: PENDULUM_GRAVITY,
            dt: PENDULUM_DT,
        }
    }

    pub fn kind(&self) -> PlantKind {
        match self {
            PlantParams::Vdp { .. } => PlantKind::Vdp,
            PlantParams::Pendulum { .. } => PlantKind::Pendulum,
        }
    }

    pub fn dt(&self) -> f64 {
        match *self {
            PlantParams::Vdp { dt, .. } | PlantParams::Pendulum { dt, .. } => dt,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.dt() > 0.0) {
            return Err(Error::Config(format!("plant dt must be positive, got {}", self.dt())));
        }
        match *self {
            PlantParams::Vdp { theta, .. } if !theta.is_finite() => {
                Err(Error::Config("van der Pol theta must be finite".into()))
            }
            PlantParams::Pendulum { mass, length, .. } if !(mass > 0.0 && length > 0.0) => Err(
                Error::Config(format!("pendulum mass and length must be positive, got {mass}, {length}")),
            ),
            _ => Ok(()),
        }
    }

    /// Physical input box of the plant.
    pub fn input_box(&self) -> (Vec<f64>, Vec<f64>) {
        match self {
            PlantParams::Vdp { .. } => (vec![-5.0], vec![5.0]),
            PlantParams::Pendulum { .. } => (vec![-PENDULUM_MAX_TORQUE], vec![PENDULUM_MAX_TORQUE]),
        }
    }

    pub fn step(&self, x: &[f64], u: &[f64]) -> Result<Vec<f64>> {
        if x.len() != 2 || u.len() != 1 {
            return Err(Error::Shape(format!(
                "plant expects a 2-state and 1 input, got {} and {}",
                x.len(),
                u.len()
            )));
        }
        let x = [x[0], x[1]];
        let next = match *self {
            PlantParams::Vdp { theta, dt } => vdp_step(x, u[0], theta, dt)?,
            PlantParams::Pendulum {
                mass,
                length,
                gravity,
                dt,
            } => pendulum_update(x, u[0], mass, length, gravity, dt),
        };
        Ok(next.to_vec())
    }

    pub fn observe(&self, x: &[f64]) -> Vec<f64> {
        match self {
            PlantParams::Vdp { .. } => x.to_vec(),
            PlantParams::Pendulum { .. } => vec![x[0]],
        }
    }
}

fn vdp_rhs(x: [f64; 2], u: f64, theta: f64) -> [f64; 2] {
    [x[1], theta * x[1] * (1.0 - x[0] * x[0]) - x[0] + u]
}

/// One RK4 step of the Van der Pol oscillator with `u` held over the step.
pub fn vdp_step(x: [f64; 2], u: f64, theta: f64, dt: f64) -> Result<[f64; 2]> {
    if !(dt > 0.0) {
        return Err(Error::Config(format!("dt must be positive, got {dt}")));
    }
    let add = |a: [f64; 2], b: [f64; 2], s: f64| [a[0] + s * b[0], a[1] + s * b[1]];
    let k1 = vdp_rhs(x, u, theta);
    let k2 = vdp_rhs(add(x, k1, dt / 2.0), u, theta);
    let k3 = vdp_rhs(add(x, k2, dt / 2.0), u, theta);
    let k4 = vdp_rhs(add(x, k3, dt), u, theta);
    let next = [
        x[0] + dt / 6.0 * (k1[0] + 2.0 * k2[0] + 2.0 * k3[0] + k4[0]),
        x[1] + dt / 6.0 * (k1[1] + 2.0 * k2[1] + 2.0 * k3[1] + k4[1]),
    ];
    if next.iter().all(|v| v.abs() <= VDP_DIVERGENCE) {
        Ok(next)
    } else {
        Err(Error::PlantBlowUp { step: 0 })
    }
}

/// Wraps an angle into `(−π, π]`.
pub fn wrap_angle(phi: f64) -> f64 {
    let w = (phi + PI).rem_euclid(TAU) - PI;
    if w <= -PI {
        w + TAU
    } else {
        w
    }
}

/// One step of the Gym pendulum (`φ = 0` upright) with the default constants.
pub fn pendulum_step(state: [f64; 2], torque: f64, mass: f64, dt: f64) -> [f64; 2] {
    pendulum_update(state, torque, mass, PENDULUM_LENGTH, PENDULUM_GRAVITY, dt)
}

fn pendulum_update(state: [f64; 2], torque: f64, mass: f64, length: f64, gravity: f64, dt: f64) -> [f64; 2] {
    let [phi, rate] = state;
    let tau = torque.clamp(-PENDULUM_MAX_TORQUE, PENDULUM_MAX_TORQUE);
    let accel = 3.0 * gravity / (2.0 * length) * phi.sin() + 3.0 / (mass * length * length) * tau;
    let rate = (rate + accel * dt).clamp(-PENDULUM_MAX_SPEED, PENDULUM_MAX_SPEED);
    [wrap_angle(phi + rate * dt), rate]
}

/// i.i.d. plant draws: θ ~ N(0, 1) for Van der Pol, mass ~ U[0.5, 1.5] for the pendulum.
pub fn sample_params(kind: PlantKind, count: usize, seed: u64) -> Result<Vec<PlantParams>> {
    if count == 0 {
        return Err(Error::Config("sample_params needs count >= 1".into()));
    }
    let mut rng = rng_for(seed, &[tag::PLANT_SAMPLE]);
    Ok((0..count)
        .map(|_| match kind {
            PlantKind::Vdp => {
                let theta: f64 = rng.sample(rand_distr::StandardNormal);
                PlantParams::vdp(theta)
            }
            PlantKind::Pendulum => {
                PlantParams::pendulum(rng.random_range(PENDULUM_MASS_RANGE.0..=PENDULUM_MASS_RANGE.1))
            }
        })
        .collect())
}

/// Uniform initial state in the box `±half_width`.
pub fn sample_initial_state<R: Rng + ?Sized>(half_width: &[f64], rng: &mut R) -> Vec<f64> {
    half_width
        .iter()
        .map(|&w| if w > 0.0 { rng.random_range(-w..=w) } else { 0.0 })
        .collect()
}

/// `(level, dwell)` pairs covering at least `length` samples.
pub fn excitation_levels<R: Rng + ?Sized>(rng: &mut R, amplitude: f64, length: usize) -> Vec<(f64, usize)> {
    let mut out = Vec::new();
    let mut covered = 0;
    while covered < length {
        let level = if amplitude > 0.0 {
            rng.random_range(-amplitude..=amplitude)
        } else {
            0.0
        };
        let dwell = rng.random_range(DWELL_RANGE.0..=DWELL_RANGE.1);
        out.push((level, dwell));
        covered += dwell;
    }
    out
}

/// Piecewise-constant random input, `[step][channel]`, channels drawn independently.
pub fn excitation(length: usize, n_u: usize, amplitude: f64, seed: u64) -> Vec<f64> {
    let mut rng = rng_for(seed, &[tag::EXCITATION]);
    excitation_with(&mut rng, length, n_u, amplitude)
}

pub fn excitation_with<R: Rng + ?Sized>(rng: &mut R, length: usize, n_u: usize, amplitude: f64) -> Vec<f64> {
    let mut out = vec![0.0; length * n_u];
    for c in 0..n_u {
        let mut k = 0;
        for (level, dwell) in excitation_levels(rng, amplitude, length) {
            for _ in 0..dwell {
                if k == length {
                    break;
                }
                out[k * n_u + c] = level;
                k += 1;
            }
        }
    }
    out
}

/// Input/output samples of one plant, possibly split into independent
/// episodes (segments). Windows never straddle a segment boundary.
#[derive(Debug, Clone, PartialEq)]
pub struct TrajectoryDataset {
    n_u: usize,
    n_y: usize,
    u: Vec<f64>,
    y: Vec<f64>,
    segment_starts: Vec<usize>,
    /// Provenance only; learners never read it.
    pub plant: Option<PlantParams>,
}

impl TrajectoryDataset {
    pub fn new(n_u: usize, n_y: usize, plant: Option<PlantParams>) -> Self {
        TrajectoryDataset {
            n_u,
            n_y,
            u: Vec::new(),
            y: Vec::new(),
            segment_starts: Vec::new(),
            plant,
        }
    }

    /// Single-segment dataset from `[step][channel]` buffers.
    pub fn from_samples(n_u: usize, n_y: usize, u: Vec<f64>, y: Vec<f64>, plant: Option<PlantParams>) -> Result<Self> {
        let mut ds = TrajectoryDataset::new(n_u, n_y, plant);
        if !u.len().is_multiple_of(n_u) || !y.len().is_multiple_of(n_y) || u.len() / n_u != y.len() / n_y {
            return Err(Error::Shape(format!(
                "input and output lengths differ ({} vs {} samples)",
                u.len() / n_u.max(1),
                y.len() / n_y.max(1)
            )));
        }
        if !u.is_empty() {
            ds.segment_starts.push(0);
        }
        ds.u = u;
        ds.y = y;
        ds.check_finite()?;
        Ok(ds)
    }

    /// Reassembles a dataset from its buffers and segment start indices.
    pub fn from_parts(
        n_u: usize,
        n_y: usize,
        u: Vec<f64>,
        y: Vec<f64>,
        segment_starts: Vec<usize>,
        plant: Option<PlantParams>,
    ) -> Result<Self> {
        let mut ds = TrajectoryDataset::from_samples(n_u, n_y, u, y, plant)?;
        let n = ds.len();
        let ordered = segment_starts.windows(2).all(|w| w[0] < w[1]);
        if (n > 0 && segment_starts.first() != Some(&0)) || !ordered || segment_starts.iter().any(|&s| s >= n.max(1)) {
            return Err(Error::Format("invalid segment start indices".into()));
        }
        if n > 0 {
            ds.segment_starts = segment_starts;
        }
        Ok(ds)
    }

    pub fn segment_starts(&self) -> &[usize] {
        &self.segment_starts
    }

    pub fn n_u(&self) -> usize {
        self.n_u
    }

    pub fn n_y(&self) -> usize {
        self.n_y
    }

    pub fn len(&self) -> usize {
        self.u.len() / self.n_u
    }

    pub fn is_empty(&self) -> bool {
        self.u.is_empty()
    }

    pub fn u(&self) -> &[f64] {
        &self.u
    }

    pub fn y(&self) -> &[f64] {
        &self.y
    }

    pub fn u_row(&self, k: usize) -> &[f64] {
        &self.u[k * self.n_u..(k + 1) * self.n_u]
    }

    pub fn y_row(&self, k: usize) -> &[f64] {
        &self.y[k * self.n_y..(k + 1) * self.n_y]
    }

    /// Opens a new segment; the next pushed sample starts it.
    pub fn start_segment(&mut self) {
        let n = self.len();
        if self.segment_starts.last() != Some(&n) {
            self.segment_starts.push(n);
        }
    }

    pub fn push(&mut self, u: &[f64], y: &[f64]) -> Result<()> {
        if u.len() != self.n_u || y.len() != self.n_y {
            return Err(Error::Shape(format!(
                "sample has {} inputs and {} outputs, dataset expects {} and {}",
                u.len(),
                y.len(),
                self.n_u,
                self.n_y
            )));
        }
        if u.iter().chain(y).any(|v| !v.is_finite()) {
            return Err(Error::Format(format!("non-finite sample at row {}", self.len())));
        }
        if self.segment_starts.is_empty() {
            self.segment_starts.push(0);
        }
        self.u.extend_from_slice(u);
        self.y.extend_from_slice(y);
        Ok(())
    }

    /// Appends all segments of `other` after the existing data.
    pub fn append(&mut self, other: &TrajectoryDataset) -> Result<()> {
        if other.n_u != self.n_u || other.n_y != self.n_y {
            return Err(Error::Shape("cannot append datasets of different widths".into()));
        }
        let base = self.len();
        for s in &other.segment_starts {
            if self.segment_starts.last() != Some(&(base + s)) {
                self.segment_starts.push(base + s);
            }
        }
        self.u.extend_from_slice(&other.u);
        self.y.extend_from_slice(&other.y);
        Ok(())
    }

    pub fn segments(&self) -> Vec<Range<usize>> {
        let n = self.len();
        let mut starts: Vec<usize> = self.segment_starts.iter().copied().filter(|&s| s < n).collect();
        starts.dedup();
        starts
            .iter()
            .enumerate()
            .map(|(i, &s)| s..starts.get(i + 1).copied().unwrap_or(n))
            .collect()
    }

    fn check_finite(&self) -> Result<()> {
        match self.u.iter().chain(&self.y).position(|v| !v.is_finite()) {
            Some(i) => Err(Error::Format(format!("non-finite value at flat index {i}"))),
            None => Ok(()),
        }
    }

    /// Copy with every sample transformed channel-wise.
    fn map_channels(&self, fu: impl Fn(usize, f64) -> f64, fy: impl Fn(usize, f64) -> f64) -> Self {
        let mut out = self.clone();
        for (i, v) in out.u.iter_mut().enumerate() {
            *v = fu(i % self.n_u, *v);
        }
        for (i, v) in out.y.iter_mut().enumerate() {
            *v = fy(i % self.n_y, *v);
        }
        out
    }
}

/// Simulates `params` from `x0` under `u` (`[step][channel]`) and records
/// noisy outputs. Noise is added to the recorded outputs only.
pub fn generate_trajectory(
    params: &PlantParams,
    u: &[f64],
    x0: &[f64],
    noise_std: f64,
    seed: u64,
) -> Result<TrajectoryDataset> {
    params.validate()?;
    let kind = params.kind();
    let (n_u, n_y) = (kind.n_u(), kind.n_y());
    if !u.len().is_multiple_of(n_u) || x0.len() != kind.n_x() {
        return Err(Error::Shape("input length or initial state size mismatch".into()));
    }
    if !(noise_std >= 0.0) {
        return Err(Error::Config(format!("noise_std must be non-negative, got {noise_std}")));
    }
    let mut rng = rng_for(seed, &[tag::NOISE]);
    let noise = Normal::new(0.0, noise_std).expect("non-negative std");
    let mut ds = TrajectoryDataset::new(n_u, n_y, Some(params.clone()));
    let mut x = x0.to_vec();
    for (k, uk) in u.chunks(n_u).enumerate() {
        x = params
            .step(&x, uk)
            .map_err(|e| match e {
                Error::PlantBlowUp { .. } => Error::PlantBlowUp { step: k },
                other => other,
            })?;
        let mut y = params.observe(&x);
        if noise_std > 0.0 {
            for v in &mut y {
                *v += noise.sample(&mut rng);
            }
        }
        ds.push(uk, &y)?;
    }
    Ok(ds)
}

/// Like [`generate_trajectory`] but the applied input is
/// `clip(excitation − K x)` for a linear state feedback `K` (one row per
/// input). The recorded input is the applied one. Used to excite plants that
/// are open-loop unstable around the operating point of interest.
pub fn generate_feedback_trajectory(
    params: &PlantParams,
    excitation: &[f64],
    gain: &[f64],
    x0: &[f64],
    noise_std: f64,
    seed: u64,
) -> Result<TrajectoryDataset> {
    params.validate()?;
    let kind = params.kind();
    let (n_u, n_x) = (kind.n_u(), kind.n_x());
    if gain.len() != n_u * n_x || !excitation.len().is_multiple_of(n_u) || x0.len() != n_x {
        return Err(Error::Shape("feedback gain, excitation or initial state has the wrong size".into()));
    }
    let (lo, hi) = params.input_box();
    let mut x = x0.to_vec();
    let mut applied = Vec::with_capacity(excitation.len());
    for (k, e) in excitation.chunks(n_u).enumerate() {
        let u: Vec<f64> = (0..n_u)
            .map(|i| {
                let fb: f64 = (0..n_x).map(|j| gain[i * n_x + j] * x[j]).sum();
                (e[i] - fb).clamp(lo[i], hi[i])
            })
            .collect();
        x = params.step(&x, &u).map_err(|err| match err {
            Error::PlantBlowUp { .. } => Error::PlantBlowUp { step: k },
            other => other,
        })?;
        applied.extend_from_slice(&u);
    }
    // replaying the applied inputs open loop visits the same states
    generate_trajectory(params, &applied, x0, noise_std, seed)
}

/// Adds i.i.d. `N(0, std²)` noise to every recorded output (inputs untouched).
pub fn add_output_noise(dataset: &TrajectoryDataset, std: f64, seed: u64) -> Result<TrajectoryDataset> {
    if !(std >= 0.0 && std.is_finite()) {
        return Err(Error::Config(format!("noise std must be non-negative, got {std}")));
    }
    let mut y = dataset.y().to_vec();
    if std > 0.0 {
        let noise = Normal::new(0.0, std).expect("valid std");
        let mut rng = rng_for(seed, &[tag::NOISE]);
        y.iter_mut().for_each(|v| *v += noise.sample(&mut rng));
    }
    TrajectoryDataset::from_parts(
        dataset.n_u(),
        dataset.n_y(),
        dataset.u().to_vec(),
        y,
        dataset.segment_starts().to_vec(),
        dataset.plant.clone(),
    )
}

/// Per-channel affine scaling `(v − mean) / scale`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scaler {
    pub u_mean: Vec<f64>,
    pub u_scale: Vec<f64>,
    pub y_mean: Vec<f64>,
    pub y_scale: Vec<f64>,
}

fn channel_stats(data: &[&[f64]], width: usize) -> (Vec<f64>, Vec<f64>) {
    let mut count = 0usize;
    let mut mean = vec![0.0; width];
    for d in data {
        for row in d.chunks(width) {
            count += 1;
            for (m, v) in mean.iter_mut().zip(row) {
                *m += v;
            }
        }
    }
    let n = count.max(1) as f64;
    mean.iter_mut().for_each(|m| *m /= n);
    let mut var = vec![0.0; width];
    for d in data {
        for row in d.chunks(width) {
            for ((s, v), m) in var.iter_mut().zip(row).zip(&mean) {
                *s += (v - m) * (v - m);
            }
        }
    }
    let scale = var
        .iter()
        .map(|s| {
            let v = s / n;
            if v > VARIANCE_FLOOR {
                v.sqrt()
            } else {
                1.0
            }
        })
        .collect();
    (mean, scale)
}

impl Scaler {
    pub fn identity(n_u: usize, n_y: usize) -> Self {
        Scaler {
            u_mean: vec![0.0; n_u],
            u_scale: vec![1.0; n_u],
            y_mean: vec![0.0; n_y],
            y_scale: vec![1.0; n_y],
        }
    }

    /// Zero-mean, unit-variance statistics pooled over `datasets`.
    pub fn fit(datasets: &[&TrajectoryDataset]) -> Result<Self> {
        let first = datasets
            .first()
            .ok_or_else(|| Error::Config("cannot fit a scaler on no data".into()))?;
        let (n_u, n_y) = (first.n_u, first.n_y);
        if datasets.iter().any(|d| d.n_u != n_u || d.n_y != n_y) {
            return Err(Error::Shape("datasets have different channel counts".into()));
        }
        let us: Vec<&[f64]> = datasets.iter().map(|d| d.u.as_slice()).collect();
        let ys: Vec<&[f64]> = datasets.iter().map(|d| d.y.as_slice()).collect();
        let (u_mean, u_scale) = channel_stats(&us, n_u);
        let (y_mean, y_scale) = channel_stats(&ys, n_y);
        Ok(Scaler {
            u_mean,
            u_scale,
            y_mean,
            y_scale,
        })
    }

    pub fn n_u(&self) -> usize {
        self.u_mean.len()
    }

    pub fn n_y(&self) -> usize {
        self.y_mean.len()
    }

    pub fn scale_u(&self, u: &[f64]) -> Vec<f64> {
        u.iter()
            .enumerate()
            .map(|(i, v)| (v - self.u_mean[i % self.n_u()]) / self.u_scale[i % self.n_u()])
            .collect()
    }

    pub fn unscale_u(&self, u: &[f64]) -> Vec<f64> {
        u.iter()
            .enumerate()
            .map(|(i, v)| v * self.u_scale[i % self.n_u()] + self.u_mean[i % self.n_u()])
            .collect()
    }

    pub fn scale_y(&self, y: &[f64]) -> Vec<f64> {
        y.iter()
            .enumerate()
            .map(|(i, v)| (v - self.y_mean[i % self.n_y()]) / self.y_scale[i % self.n_y()])
            .collect()
    }

    pub fn unscale_y(&self, y: &[f64]) -> Vec<f64> {
        y.iter()
            .enumerate()
            .map(|(i, v)| v * self.y_scale[i % self.n_y()] + self.y_mean[i % self.n_y()])
            .collect()
    }

    pub fn apply(&self, ds: &TrajectoryDataset) -> TrajectoryDataset {
        ds.map_channels(
            |c, v| (v - self.u_mean[c]) / self.u_scale[c],
            |c, v| (v - self.y_mean[c]) / self.y_scale[c],
        )
    }

    pub fn invert(&self, ds: &TrajectoryDataset) -> TrajectoryDataset {
        ds.map_channels(
            |c, v| v * self.u_scale[c] + self.u_mean[c],
            |c, v| v * self.y_scale[c] + self.y_mean[c],
        )
    }
}

/// Fits one scaler on all of `datasets` and applies it to each.
pub fn standardize(datasets: &[TrajectoryDataset]) -> Result<(Vec<TrajectoryDataset>, Scaler)> {
    let refs: Vec<&TrajectoryDataset> = datasets.iter().collect();
    let scaler = Scaler::fit(&refs)?;
    Ok((datasets.iter().map(|d| scaler.apply(d)).collect(), scaler))
}

/// JSON sidecar written next to every dataset CSV.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetSidecar {
    pub n_u: usize,
    pub n_y: usize,
    pub len: usize,
    pub plant: Option<PlantParams>,
    pub scaler: Option<Scaler>,
}

fn csv_header(n_u: usize, n_y: usize) -> Vec<String> {
    std::iter::once("t".to_string())
        .chain((0..n_u).map(|i| format!("u_{i}")))
        .chain((0..n_y).map(|i| format!("y_{i}")))
        .collect()
}

/// Writes `<stem>.csv` (header `t,u_0..,y_0..`, `t` restarting at 0 on each
/// segment) and `<stem>.json`. Returns the CSV path.
pub fn write_dataset(dir: &Path, stem: &str, ds: &TrajectoryDataset, scaler: Option<&Scaler>) -> Result<PathBuf> {
    fs::create_dir_all(dir)?;
    let csv_path = dir.join(format!("{stem}.csv"));
    let mut w = csv::Writer::from_path(&csv_path)?;
    w.write_record(csv_header(ds.n_u, ds.n_y))?;
    for seg in ds.segments() {
        for (t, k) in seg.enumerate() {
            let mut rec = Vec::with_capacity(1 + ds.n_u + ds.n_y);
            rec.push(t.to_string());
            rec.extend(ds.u_row(k).iter().map(|v| format!("{v:?}")));
            rec.extend(ds.y_row(k).iter().map(|v| format!("{v:?}")));
            w.write_record(&rec)?;
        }
    }
    w.flush()?;
    let sidecar = DatasetSidecar {
        n_u: ds.n_u,
        n_y: ds.n_y,
        len: ds.len(),
        plant: ds.plant.clone(),
        scaler: scaler.cloned(),
    };
    fs::write(dir.join(format!("{stem}.json")), serde_json::to_string_pretty(&sidecar)?)?;
    Ok(csv_path)
}

/// Reads a dataset CSV and its sidecar (same stem, `.json`).
pub fn read_dataset(csv_path: &Path) -> Result<(TrajectoryDataset, DatasetSidecar)> {
    let sidecar_path = csv_path.with_extension("json");
    let sidecar: DatasetSidecar = serde_json::from_str(&fs::read_to_string(&sidecar_path)?)?;
    let (n_u, n_y) = (sidecar.n_u, sidecar.n_y);
    let mut r = csv::ReaderBuilder::new().flexible(true).from_path(csv_path)?;
    let header: Vec<String> = r.headers()?.iter().map(str::to_string).collect();
    if header != csv_header(n_u, n_y) {
        return Err(Error::Format(format!(
            "{}: header {:?} does not match n_u={n_u}, n_y={n_y}",
            csv_path.display(),
            header
        )));
    }
    let mut ds = TrajectoryDataset::new(n_u, n_y, sidecar.plant.clone());
    let mut expected_t = 0usize;
    for (row, rec) in r.records().enumerate() {
        let rec = rec?;
        if rec.len() != 1 + n_u + n_y {
            return Err(Error::Format(format!(
                "{}: row {row} has {} fields, expected {}",
                csv_path.display(),
                rec.len(),
                1 + n_u + n_y
            )));
        }
        let parse = |s: &str| {
            s.parse::<f64>()
                .map_err(|e| Error::Format(format!("row {row}: `{s}`: {e}")))
        };
        let t: usize = rec[0]
            .parse()
            .map_err(|e| Error::Format(format!("row {row}: bad step index: {e}")))?;
        if t == 0 {
            ds.start_segment();
        } else if t != expected_t {
            return Err(Error::Format(format!("row {row}: step index {t}, expected {expected_t}")));
        }
        expected_t = t + 1;
        let vals: Vec<f64> = rec.iter().skip(1).map(parse).collect::<Result<_>>()?;
        ds.push(&vals[..n_u], &vals[n_u..])?;
    }
    if ds.len() != sidecar.len {
        return Err(Error::Format(format!(
            "{}: {} rows but sidecar declares {}",
            csv_path.display(),
            ds.len(),
            sidecar.len
        )));
    }
    Ok((ds, sidecar))
}
