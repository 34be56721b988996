//! Bilevel meta-training: implicit MAML with conjugate-gradient meta-gradients,
//! the first-order MAML baseline, plain supervised descent, window sampling
//! and closed-loop data collection.

use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::diff::{Objective, ParamVector};
use crate::error::{Error, Result};
use crate::mpc::{run_episode, EpisodeOptions, MpcSpec, Reference, TrackingController};
use crate::nssm::{NssmConfig, NssmObjective, NssmParams, WindowBatch};
use crate::plants::{sample_initial_state, PlantParams, Scaler, TrajectoryDataset};
use crate::seed::{derive_seed, rng_for, tag};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MetaConfig {
    /// Proximal regularization strength.
    pub gamma: f64,
    pub beta_out: f64,
    pub beta_in: f64,
    pub inner_steps: usize,
    pub cg_iters: usize,
    pub cg_tol: f64,
    pub batch_size: usize,
    pub outer_iters: usize,
    /// Std of the exploration noise added to closed-loop inputs (physical units).
    pub explore_std: f64,
    pub windows_per_task: usize,
    pub train_fraction: f64,
    /// Closed-loop collection episode length; 0 disables collection.
    pub episode_len: usize,
}

impl Default for MetaConfig {
    fn default() -> Self {
        MetaConfig {
            gamma: 1.0,
            beta_out: 1e-2,
            beta_in: 1e-3,
            inner_steps: 10,
            cg_iters: 20,
            cg_tol: 1e-6,
            batch_size: 16,
            outer_iters: 500,
            explore_std: 0.1,
            windows_per_task: 32,
            train_fraction: 0.5,
            episode_len: 50,
        }
    }
}

impl MetaConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: &str| Err(Error::Config(m.to_string()));
        if !(self.gamma > 0.0) {
            return fail("gamma must be positive");
        }
        if !(self.beta_out > 0.0 && self.beta_in > 0.0) {
            return fail("learning rates must be positive");
        }
        if self.inner_steps == 0 {
            return fail("inner_steps must be at least 1");
        }
        if self.cg_iters == 0 || !(self.cg_tol > 0.0) {
            return fail("cg_iters and cg_tol must be positive");
        }
        if self.batch_size == 0 {
            return fail("batch_size must be at least 1");
        }
        if self.windows_per_task < 2 {
            return fail("windows_per_task must be at least 2");
        }
        if !(self.train_fraction > 0.0 && self.train_fraction < 1.0) {
            return fail("train_fraction must lie in (0, 1)");
        }
        if !(self.explore_std >= 0.0) {
            return fail("explore_std must be non-negative");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Algorithm {
    Imaml,
    Maml,
    Supervised,
}

impl Algorithm {
    pub fn as_str(self) -> &'static str {
        match self {
            Algorithm::Imaml => "imaml",
            Algorithm::Maml => "maml",
            Algorithm::Supervised => "supervised",
        }
    }
}

impl fmt::Display for Algorithm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Algorithm {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "imaml" => Ok(Algorithm::Imaml),
            "maml" => Ok(Algorithm::Maml),
            "supervised" => Ok(Algorithm::Supervised),
            other => Err(Error::Config(format!("unknown algorithm `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TaskSplit {
    pub train: WindowBatch,
    pub test: WindowBatch,
}

/// Start indices of every window of length `history + horizon` that fits
/// inside one segment.
pub fn valid_starts(dataset: &TrajectoryDataset, history: usize, horizon: usize) -> Vec<usize> {
    let len = history + horizon;
    dataset
        .segments()
        .into_iter()
        .filter(|s| s.len() >= len)
        .flat_map(|s| s.start..=s.end - len)
        .collect()
}

fn windows_at(dataset: &TrajectoryDataset, history: usize, horizon: usize, starts: &[usize]) -> Result<WindowBatch> {
    let (nu, ny) = (dataset.n_u(), dataset.n_y());
    let mut batch = WindowBatch::new(nu, ny, history, horizon);
    let (u, y) = (dataset.u(), dataset.y());
    for &s in starts {
        let mid = s + history;
        let end = mid + horizon;
        batch.push(
            s,
            &u[s * nu..mid * nu],
            &y[s * ny..mid * ny],
            &u[mid * nu..end * nu],
            &y[mid * ny..end * ny],
        )?;
    }
    Ok(batch)
}

fn too_short(dataset: &TrajectoryDataset, history: usize, horizon: usize) -> Error {
    Error::DatasetTooShort {
        needed: history + horizon,
        available: dataset.segments().iter().map(|s| s.len()).max().unwrap_or(0),
    }
}

/// Every window of the dataset, in order.
pub fn all_windows(dataset: &TrajectoryDataset, history: usize, horizon: usize) -> Result<WindowBatch> {
    let starts = valid_starts(dataset, history, horizon);
    if starts.is_empty() {
        return Err(too_short(dataset, history, horizon));
    }
    windows_at(dataset, history, horizon, &starts)
}

/// Up to `count` distinct windows drawn uniformly (fewer if the dataset has
/// fewer valid starts), sorted by start index.
pub fn sample_windows(dataset: &TrajectoryDataset, history: usize, horizon: usize, count: usize, seed: u64) -> Result<WindowBatch> {
    let starts = valid_starts(dataset, history, horizon);
    if starts.is_empty() {
        return Err(too_short(dataset, history, horizon));
    }
    let mut rng = rng_for(seed, &[]);
    let mut picked: Vec<usize> = rand::seq::index::sample(&mut rng, starts.len(), count.min(starts.len()))
        .into_iter()
        .map(|i| starts[i])
        .collect();
    picked.sort_unstable();
    windows_at(dataset, history, horizon, &picked)
}

/// Random disjoint split with `⌈f·n⌉` training windows (kept within `1..n`).
pub fn partition(batch: &WindowBatch, train_fraction: f64, seed: u64) -> Result<TaskSplit> {
    let n = batch.len();
    if n < 2 {
        return Err(Error::Shape(format!("partition needs at least 2 windows, got {n}")));
    }
    if !(train_fraction > 0.0 && train_fraction < 1.0) {
        return Err(Error::Config("train_fraction must lie in (0, 1)".into()));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng_for(seed, &[]));
    let n_train = ((train_fraction * n as f64).ceil() as usize).clamp(1, n - 1);
    let (train, test) = order.split_at(n_train);
    Ok(TaskSplit {
        train: batch.select(train),
        test: batch.select(test),
    })
}

/// `steps` gradient steps on `ℓ(ψ) + (γ/2)‖ψ − anchor‖²` from `ψ = anchor`.
/// `gamma = 0` gives plain descent. Returns the final iterate and the
/// unregularized loss at each step listed in `log_at`.
pub fn proximal_descent(
    objective: &dyn Objective,
    anchor: &ParamVector,
    gamma: f64,
    lr: f64,
    steps: usize,
    log_at: &[usize],
) -> Result<(ParamVector, Vec<(usize, f64)>)> {
    proximal_descent_from(objective, anchor, anchor, gamma, lr, steps, log_at)
}

/// [`proximal_descent`] started at `start` instead of the anchor; the step
/// indices in `log_at` count from this start.
pub fn proximal_descent_from(
    objective: &dyn Objective,
    anchor: &ParamVector,
    start: &ParamVector,
    gamma: f64,
    lr: f64,
    steps: usize,
    log_at: &[usize],
) -> Result<(ParamVector, Vec<(usize, f64)>)> {
    let mut psi = start.clone();
    let mut log = Vec::new();
    for step in 0..steps {
        let (loss, mut grad) = objective.value_and_gradient(&psi)?;
        if !loss.is_finite() || !grad.is_finite() {
            return Err(Error::InnerDiverged { step });
        }
        if log_at.contains(&step) {
            log.push((step, loss));
        }
        if gamma != 0.0 {
            grad.axpy_inplace(gamma, &psi.sub(anchor)?)?;
        }
        psi.axpy_inplace(-lr, &grad)?;
    }
    if log_at.contains(&steps) || !psi.is_finite() {
        let loss = objective.value(&psi)?;
        if !loss.is_finite() || !psi.is_finite() {
            return Err(Error::InnerDiverged { step: steps });
        }
        log.push((steps, loss));
    }
    Ok((psi, log))
}

/// Proximally regularized inner adaptation.
pub fn inner_adapt_imaml(train: &dyn Objective, omega: &ParamVector, cfg: &MetaConfig) -> Result<ParamVector> {
    if cfg.inner_steps == 0 {
        return Err(Error::Config("inner_steps must be at least 1".into()));
    }
    Ok(proximal_descent(train, omega, cfg.gamma, cfg.beta_in, cfg.inner_steps, &[])?.0)
}

/// Plain gradient-descent inner adaptation.
pub fn inner_adapt_maml(train: &dyn Objective, omega: &ParamVector, cfg: &MetaConfig) -> Result<ParamVector> {
    if cfg.inner_steps == 0 {
        return Err(Error::Config("inner_steps must be at least 1".into()));
    }
    Ok(proximal_descent(train, omega, 0.0, cfg.beta_in, cfg.inner_steps, &[])?.0)
}

/// Gradient descent from `omega0` on the full objective.
pub fn supervised_train(objective: &dyn Objective, omega0: &ParamVector, steps: usize, lr: f64) -> Result<ParamVector> {
    Ok(proximal_descent(objective, omega0, 0.0, lr, steps, &[])?.0)
}

#[derive(Debug, Clone, PartialEq)]
pub struct CgReport {
    pub solution: ParamVector,
    pub iterations: usize,
    /// `‖r_k‖` after each iteration.
    pub residual_norms: Vec<f64>,
    /// `½φᵀQφ − φᵀP` after each iteration.
    pub objective: Vec<f64>,
}

/// Solves `(I + H/γ) φ = rhs` matrix-free, `H` being the Hessian of `train`
/// at `omega_b`.
pub fn cg_solve(
    train: &dyn Objective,
    omega_b: &ParamVector,
    rhs: &ParamVector,
    gamma: f64,
    iters: usize,
    tol: f64,
) -> Result<CgReport> {
    if !(gamma > 0.0) {
        return Err(Error::Config("gamma must be positive".into()));
    }
    let mut phi = rhs.zeros_like();
    let mut r = rhs.clone();
    let mut p = r.clone();
    let mut rr = r.dot(&r)?;
    let target = tol * rhs.norm();
    let mut report = CgReport {
        solution: phi.clone(),
        iterations: 0,
        residual_norms: Vec::new(),
        objective: Vec::new(),
    };
    if rr == 0.0 {
        return Ok(report);
    }
    for k in 0..iters {
        let mut qp = train.hvp(omega_b, &p)?.scale(1.0 / gamma);
        qp.axpy_inplace(1.0, &p)?;
        let curvature = p.dot(&qp)?;
        if !(curvature > 0.0) {
            return Err(Error::NotPositiveDefinite {
                iteration: k,
                curvature,
            });
        }
        let alpha = rr / curvature;
        phi.axpy_inplace(alpha, &p)?;
        r.axpy_inplace(-alpha, &qp)?;
        let rr_next = r.dot(&r)?;
        report.iterations = k + 1;
        report.residual_norms.push(rr_next.sqrt());
        // Qφ = rhs − r, so ½φᵀQφ − φᵀrhs = −½φᵀ(rhs + r)
        report.objective.push(-0.5 * phi.dot(&rhs.add(&r)?)?);
        if rr_next.sqrt() <= target {
            break;
        }
        p = r.add(&p.scale(rr_next / rr))?;
        rr = rr_next;
    }
    report.solution = phi;
    Ok(report)
}

/// Implicit meta-gradient `(I + ∇²ℓ_train/γ)^{-1} ∇ℓ_test` at the adapted
/// weights. Returns the CG report and the test loss.
pub fn cg_solve_meta_gradient(
    train: &dyn Objective,
    test: &dyn Objective,
    omega_b: &ParamVector,
    cfg: &MetaConfig,
) -> Result<(CgReport, f64)> {
    let (test_loss, p) = test.value_and_gradient(omega_b)?;
    Ok((cg_solve(train, omega_b, &p, cfg.gamma, cfg.cg_iters, cfg.cg_tol)?, test_loss))
}

/// One source task as seen by the outer loop.
pub trait MetaTask {
    /// Training and test objectives for this visit.
    fn objectives(&mut self, seed: u64) -> Result<(Box<dyn Objective>, Box<dyn Objective>)>;

    /// Hook run with the adapted weights after the meta-gradient is formed.
    fn after_adapt(&mut self, _adapted: &ParamVector, _seed: u64) -> Result<CollectionReport> {
        Ok(CollectionReport::default())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct CollectionReport {
    pub rows_added: usize,
    pub aborted: bool,
    pub dare_fallback: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct OuterMetrics {
    pub mean_test_loss: f64,
    /// Norm of the averaged meta-gradient.
    pub grad_norm: f64,
    pub dare_fallbacks: usize,
    pub aborted_episodes: usize,
    pub tasks: Vec<usize>,
}

/// One outer iteration: `B` distinct tasks (fewer if fewer exist) are
/// adapted, their meta-gradients averaged and `ω ← ω − β_out·mean(g)`.
pub fn outer_step<T: MetaTask>(
    algorithm: Algorithm,
    omega: &ParamVector,
    tasks: &mut [T],
    cfg: &MetaConfig,
    seed: u64,
    iter: u64,
) -> Result<(ParamVector, OuterMetrics)> {
    cfg.validate()?;
    if tasks.is_empty() {
        return Err(Error::Config("no source tasks".into()));
    }
    let b = cfg.batch_size.min(tasks.len());
    let mut chosen: Vec<usize> =
        rand::seq::index::sample(&mut rng_for(seed, &[tag::TASK_SELECT, iter]), tasks.len(), b).into_vec();
    chosen.sort_unstable();
    let mut sum = omega.zeros_like();
    let mut metrics = OuterMetrics {
        mean_test_loss: 0.0,
        grad_norm: 0.0,
        dare_fallbacks: 0,
        aborted_episodes: 0,
        tasks: chosen.clone(),
    };
    for &idx in &chosen {
        let task_seed = derive_seed(seed, &[tag::TASK, iter, idx as u64]);
        let run = |task: &mut T| -> Result<(ParamVector, f64, CollectionReport)> {
            let (train, test) = task.objectives(task_seed)?;
            let (g, test_loss, adapted) = match algorithm {
                Algorithm::Imaml => {
                    let adapted = inner_adapt_imaml(train.as_ref(), omega, cfg)?;
                    let (report, loss) = cg_solve_meta_gradient(train.as_ref(), test.as_ref(), &adapted, cfg)?;
                    (report.solution, loss, adapted)
                }
                Algorithm::Maml => {
                    let adapted = inner_adapt_maml(train.as_ref(), omega, cfg)?;
                    let (loss, g) = test.value_and_gradient(&adapted)?;
                    (g, loss, adapted)
                }
                Algorithm::Supervised => {
                    return Err(Error::Config("supervised training has no outer loop".into()));
                }
            };
            let report = task.after_adapt(&adapted, derive_seed(task_seed, &[tag::TRACK]))?;
            Ok((g, test_loss, report))
        };
        let (g, test_loss, report) = run(&mut tasks[idx]).map_err(|e| e.in_task(idx))?;
        sum.axpy_inplace(1.0, &g)?;
        metrics.mean_test_loss += test_loss / b as f64;
        metrics.dare_fallbacks += report.dare_fallback as usize;
        metrics.aborted_episodes += report.aborted as usize;
    }
    let mean = sum.scale(1.0 / b as f64);
    metrics.grad_norm = mean.norm();
    let mut next = omega.clone();
    next.axpy_inplace(-cfg.beta_out, &mean)?;
    if !next.is_finite() {
        return Err(Error::InnerDiverged { step: iter as usize });
    }
    Ok((next, metrics))
}

/// Everything closed-loop collection needs besides the model and plant.
#[derive(Debug, Clone)]
pub struct CollectionContext {
    pub scaler: Scaler,
    pub spec: MpcSpec,
    /// Reference in physical units.
    pub reference: Reference,
    /// Half-widths of the uniform initial-state box.
    pub initial_state: Vec<f64>,
    /// Measurement noise std in standardized output units.
    pub measurement_std: f64,
    /// Episodes stop early once any output leaves `±abort_bound`.
    pub abort_bound: Option<f64>,
}

/// Runs one exploratory MPC episode of the adapted model on the true plant
/// from a fresh initial state and appends it (scaled) as a new segment.
pub fn collect_closed_loop(
    omega_b: &NssmParams,
    plant: &PlantParams,
    dataset: &mut TrajectoryDataset,
    ctx: &CollectionContext,
    explore_std: f64,
    episode_len: usize,
    seed: u64,
) -> Result<CollectionReport> {
    let ctl = TrackingController::new(omega_b, &ctx.scaler, &ctx.spec)?;
    let mut rng = rng_for(seed, &[]);
    let x0 = sample_initial_state(&ctx.initial_state, &mut rng);
    let opts = EpisodeOptions {
        explore_std,
        measurement_std: ctx.measurement_std,
        abort_bound: ctx.abort_bound,
    };
    let ep = run_episode(&ctl, plant, &x0, &ctx.reference, episode_len, opts, &mut rng)?;
    if !ep.is_empty() {
        dataset.append(&ctx.scaler.apply(&ep.dataset(Some(plant.clone()))?))?;
    }
    Ok(CollectionReport {
        rows_added: ep.len(),
        aborted: ep.aborted,
        dare_fallback: ep.dare_fallback,
    })
}

/// Source system backed by a standardized trajectory dataset.
#[derive(Debug, Clone)]
pub struct SourceTask {
    pub plant: PlantParams,
    pub dataset: TrajectoryDataset,
    pub model: NssmConfig,
    pub windows: usize,
    pub train_fraction: f64,
    pub explore_std: f64,
    pub episode_len: usize,
    pub collection: Option<Arc<CollectionContext>>,
}

impl SourceTask {
    pub fn split(&self, seed: u64) -> Result<TaskSplit> {
        let batch = sample_windows(
            &self.dataset,
            self.model.history,
            self.model.horizon,
            self.windows,
            derive_seed(seed, &[0]),
        )?;
        partition(&batch, self.train_fraction, derive_seed(seed, &[1]))
    }
}

impl MetaTask for SourceTask {
    fn objectives(&mut self, seed: u64) -> Result<(Box<dyn Objective>, Box<dyn Objective>)> {
        let split = self.split(seed)?;
        Ok((
            Box::new(NssmObjective::new(self.model.clone(), &split.train)?),
            Box::new(NssmObjective::new(self.model.clone(), &split.test)?),
        ))
    }

    fn after_adapt(&mut self, adapted: &ParamVector, seed: u64) -> Result<CollectionReport> {
        match &self.collection {
            Some(ctx) if self.episode_len > 0 => {
                let params = NssmParams::new(self.model.clone(), adapted.clone())?;
                collect_closed_loop(
                    &params,
                    &self.plant,
                    &mut self.dataset,
                    ctx,
                    self.explore_std,
                    self.episode_len,
                    seed,
                )
            }
            _ => Ok(CollectionReport::default()),
        }
    }
}

/// Closed-form objectives standing in for the network loss in tests.
pub mod surrogate {
    use nalgebra::{DMatrix, DVector};

    use super::MetaTask;
    use crate::diff::{Objective, ParamVector};
    use crate::error::Result;

    /// `½ (w − c)ᵀ H (w − c)`.
    #[derive(Debug, Clone, PartialEq)]
    pub struct Quadratic {
        pub hessian: DMatrix<f64>,
        pub center: DVector<f64>,
    }

    impl Quadratic {
        pub fn isotropic(center: &[f64]) -> Self {
            Quadratic {
                hessian: DMatrix::identity(center.len(), center.len()),
                center: DVector::from_column_slice(center),
            }
        }

        pub fn diagonal(diag: &[f64], center: &[f64]) -> Self {
            Quadratic {
                hessian: DMatrix::from_diagonal(&DVector::from_column_slice(diag)),
                center: DVector::from_column_slice(center),
            }
        }

        fn offset(&self, w: &ParamVector) -> DVector<f64> {
            DVector::from_column_slice(w.values()) - &self.center
        }
    }

    impl Objective for Quadratic {
        fn value(&self, w: &ParamVector) -> Result<f64> {
            let d = self.offset(w);
            Ok(0.5 * d.dot(&(&self.hessian * &d)))
        }

        fn gradient(&self, w: &ParamVector) -> Result<ParamVector> {
            w.with_values((&self.hessian * self.offset(w)).as_slice().to_vec())
        }

        fn hvp(&self, w: &ParamVector, v: &ParamVector) -> Result<ParamVector> {
            w.check_compatible(v)?;
            w.with_values((&self.hessian * DVector::from_column_slice(v.values())).as_slice().to_vec())
        }
    }

    /// `gᵀw`.
    #[derive(Debug, Clone, PartialEq)]
    pub struct Linear {
        pub slope: Vec<f64>,
    }

    impl Objective for Linear {
        fn value(&self, w: &ParamVector) -> Result<f64> {
            Ok(w.values().iter().zip(&self.slope).map(|(a, b)| a * b).sum())
        }

        fn gradient(&self, w: &ParamVector) -> Result<ParamVector> {
            w.with_values(self.slope.clone())
        }

        fn hvp(&self, w: &ParamVector, v: &ParamVector) -> Result<ParamVector> {
            w.check_compatible(v)?;
            Ok(w.zeros_like())
        }
    }

    /// Task with fixed quadratic train and test losses.
    #[derive(Debug, Clone)]
    pub struct QuadraticTask {
        pub train: Quadratic,
        pub test: Quadratic,
    }

    impl MetaTask for QuadraticTask {
        fn objectives(&mut self, _seed: u64) -> Result<(Box<dyn Objective>, Box<dyn Objective>)> {
            Ok((Box::new(self.train.clone()), Box::new(self.test.clone())))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::surrogate::{Linear, Quadratic, QuadraticTask};
    use super::*;
    use crate::diff::{fd_gradient, relative_error};
    use crate::plants::{excitation, generate_trajectory};
    use nalgebra::{DMatrix, DVector};
    use proptest::prelude::{prop_assert, prop_assert_eq, proptest, ProptestConfig};

    fn pv(v: &[f64]) -> ParamVector {
        ParamVector::from_slice(v)
    }

    fn cfg(gamma: f64, beta_in: f64, steps: usize) -> MetaConfig {
        MetaConfig {
            gamma,
            beta_in,
            inner_steps: steps,
            cg_iters: 50,
            cg_tol: 1e-14,
            ..MetaConfig::default()
        }
    }

    fn ramp_dataset(len: usize) -> TrajectoryDataset {
        let u: Vec<f64> = (0..len).map(|k| k as f64).collect();
        let y: Vec<f64> = (0..len).map(|k| -(k as f64)).collect();
        TrajectoryDataset::from_samples(1, 1, u, y, None).unwrap()
    }

    #[test]
    fn sample_windows_examples() {
        let ds = ramp_dataset(30);
        let b = sample_windows(&ds, 10, 20, 1, 3).unwrap();
        assert_eq!(b.starts(), &[0]);

        let ds = ramp_dataset(200);
        let a = sample_windows(&ds, 10, 20, 40, 3).unwrap();
        assert_eq!(a, sample_windows(&ds, 10, 20, 40, 3).unwrap());
        assert_eq!(a.len(), 40);
        for w in 0..a.len() {
            let s = a.starts()[w] as f64;
            let hu = a.history_u(w);
            let fu = a.future_u(w);
            assert_eq!(hu[0], s);
            assert_eq!(fu[0], s + 10.0);
            assert!(hu.windows(2).chain(fu.windows(2)).all(|p| p[1] == p[0] + 1.0));
            assert_eq!(a.future_y(w)[19], -(s + 29.0));
        }
        let mut starts = a.starts().to_vec();
        starts.dedup();
        assert_eq!(starts.len(), 40);

        assert!(matches!(
            sample_windows(&ramp_dataset(29), 10, 20, 1, 0),
            Err(Error::DatasetTooShort { needed: 30, available: 29 })
        ));
    }

    #[test]
    fn windows_do_not_cross_segments() {
        let mut ds = ramp_dataset(40);
        ds.append(&ramp_dataset(35)).unwrap();
        let starts = valid_starts(&ds, 10, 20);
        assert_eq!(starts, (0..=10).chain(40..=45).collect::<Vec<_>>());
        let all = all_windows(&ds, 10, 20).unwrap();
        assert_eq!(all.len(), 17);
    }

    #[test]
    fn partition_examples() {
        let batch = sample_windows(&ramp_dataset(100), 2, 3, 10, 1).unwrap();
        let split = partition(&batch, 0.5, 7).unwrap();
        assert_eq!((split.train.len(), split.test.len()), (5, 5));
        let mut all: Vec<usize> = split.train.starts().iter().chain(split.test.starts()).copied().collect();
        all.sort_unstable();
        assert_eq!(all, batch.starts());
        assert_eq!(split, partition(&batch, 0.5, 7).unwrap());
        let split = partition(&batch, 0.31, 7).unwrap();
        assert_eq!(split.train.len(), 4);
    }

    #[test]
    fn imaml_inner_converges_to_proximal_point() {
        let c = [1.0, -2.0, 0.5];
        let omega = pv(&[0.3, 0.3, -1.0]);
        let gamma = 2.0;
        let out = inner_adapt_imaml(&Quadratic::isotropic(&c), &omega, &cfg(gamma, 0.2, 500)).unwrap();
        for i in 0..3 {
            let expected = (gamma * omega.values()[i] + c[i]) / (1.0 + gamma);
            assert!((out.values()[i] - expected).abs() <= 1e-8);
        }
    }

    #[test]
    fn imaml_single_step_by_hand() {
        let omega = pv(&[1.0, 2.0]);
        let out = inner_adapt_imaml(&Quadratic::isotropic(&[0.0, 4.0]), &omega, &cfg(1.0, 0.1, 1)).unwrap();
        // ψ = ω − β(ω − c) since ψ − ω = 0 at the first step
        assert_eq!(out.values(), &[0.9, 2.2]);

        let two = inner_adapt_imaml(&Quadratic::isotropic(&[0.0, 4.0]), &omega, &cfg(1.0, 0.1, 2)).unwrap();
        // second step: grad = ψ − c + (ψ − ω)
        let expected = [0.9 - 0.1 * (0.9 + (0.9 - 1.0)), 2.2 - 0.1 * ((2.2 - 4.0) + (2.2 - 2.0))];
        assert!((two.values()[0] - expected[0]).abs() < 1e-15);
        assert!((two.values()[1] - expected[1]).abs() < 1e-15);

        assert!(matches!(
            inner_adapt_imaml(&Quadratic::isotropic(&[0.0, 4.0]), &omega, &cfg(1.0, 0.1, 0)),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn huge_gamma_keeps_inner_near_anchor() {
        let omega = pv(&[1.0, 2.0]);
        let obj = Quadratic::isotropic(&[5.0, -5.0]);
        let grad_norm = obj.gradient(&omega).unwrap().norm();
        let one = inner_adapt_imaml(&obj, &omega, &cfg(1e6, 1e-7, 1)).unwrap();
        assert!(one.sub(&omega).unwrap().norm() <= 1e-7 * grad_norm * (1.0 + 1e-12));
        // the regularized minimizer sits ‖∇ℓ‖/(1+γ) away, and descent never overshoots it
        let many = inner_adapt_imaml(&obj, &omega, &cfg(1e6, 1e-7, 500)).unwrap();
        assert!(many.sub(&omega).unwrap().norm() <= grad_norm / (1.0 + 1e6) * (1.0 + 1e-9));
    }

    #[test]
    fn inner_divergence_reports_step() {
        let obj = Quadratic::diagonal(&[1e3], &[1.0]);
        let err = inner_adapt_maml(&obj, &pv(&[0.0]), &cfg(1.0, 10.0, 500)).unwrap_err();
        assert!(matches!(err, Error::InnerDiverged { step } if step > 0 && step < 500));
    }

    #[test]
    fn maml_inner_examples() {
        let omega = pv(&[0.5, -0.5]);
        assert_eq!(
            inner_adapt_maml(&Quadratic::isotropic(&[0.5, -0.5]), &omega, &cfg(1.0, 0.1, 7)).unwrap(),
            omega
        );
        let c = [2.0, 1.0];
        let one = inner_adapt_maml(&Quadratic::isotropic(&c), &omega, &cfg(1.0, 0.1, 1)).unwrap();
        assert!((one.values()[0] - (0.5 - 0.1 * (0.5 - 2.0))).abs() < 1e-15);
        let m = 13;
        let many = inner_adapt_maml(&Quadratic::isotropic(&c), &omega, &cfg(1.0, 0.1, m)).unwrap();
        for i in 0..2 {
            let expected = c[i] + 0.9f64.powi(m as i32) * (omega.values()[i] - c[i]);
            assert!((many.values()[i] - expected).abs() <= 1e-10);
        }
    }

    #[test]
    fn cg_examples() {
        let p = pv(&[1.0, -2.0, 3.0]);
        let lin = Linear { slope: vec![0.0; 3] };
        let r = cg_solve(&lin, &p, &p, 1.0, 20, 1e-12).unwrap();
        assert_eq!(r.iterations, 1);
        assert_eq!(r.solution, p);

        let d = [0.5, 2.0, 7.0, 1e-3, 30.0];
        let rhs = [1.0, -1.0, 2.0, 0.3, -4.0];
        let gamma = 0.7;
        let q = Quadratic::diagonal(&d, &[0.0; 5]);
        let w = pv(&[0.0; 5]);
        let r = cg_solve(&q, &w, &pv(&rhs), gamma, 20, 1e-14).unwrap();
        let dense = DMatrix::identity(5, 5) + DMatrix::from_diagonal(&DVector::from_column_slice(&d)) / gamma;
        let direct = dense.lu().solve(&DVector::from_column_slice(&rhs)).unwrap();
        for i in 0..5 {
            assert!((r.solution.values()[i] - direct[i]).abs() <= 1e-10);
        }
        assert!(r.objective.windows(2).all(|p| p[1] <= p[0] + 1e-15));
    }

    #[test]
    fn cg_detects_negative_curvature() {
        let q = Quadratic::diagonal(&[-5.0, 1.0], &[0.0, 0.0]);
        let err = cg_solve(&q, &pv(&[0.0, 0.0]), &pv(&[1.0, 0.0]), 1.0, 10, 1e-12).unwrap_err();
        assert!(err.to_string().contains("Q^b not positive definite; increase gamma"));
    }

    #[test]
    fn meta_gradient_matches_differentiation_through_exact_inner_solution() {
        // train loss ½(ψ−c)ᵀD(ψ−c): exact inner ψ(ω) = (D + γI)^{-1}(Dc + γω)
        let d = [0.5, 3.0, 1.5];
        let c = [1.0, -1.0, 2.0];
        let test_c = [0.3, 0.7, -0.2];
        let gamma = 1.3;
        let inner = |w: &[f64]| -> Vec<f64> { (0..3).map(|i| (d[i] * c[i] + gamma * w[i]) / (d[i] + gamma)).collect() };
        let test_loss = |w: &ParamVector| {
            let psi = inner(w.values());
            0.5 * psi.iter().zip(&test_c).map(|(a, b)| (a - b).powi(2)).sum::<f64>()
        };
        let omega = pv(&[0.2, 0.4, -0.6]);
        let omega_b = pv(&inner(omega.values()));
        let train = Quadratic::diagonal(&d, &c);
        let test = Quadratic::isotropic(&test_c);
        let mut config = cfg(gamma, 0.1, 1);
        config.cg_tol = 1e-15;
        let (report, _) = cg_solve_meta_gradient(&train, &test, &omega_b, &config).unwrap();
        let closed: Vec<f64> = (0..3)
            .map(|i| gamma / (d[i] + gamma) * (omega_b.values()[i] - test_c[i]))
            .collect();
        assert!(relative_error(report.solution.values(), &closed, 1e-12) <= 1e-6);
        let fd = fd_gradient(test_loss, &omega, 1e-5).unwrap();
        assert!(relative_error(report.solution.values(), fd.values(), 1e-12) <= 1e-6);
    }

    #[test]
    fn outer_step_fixed_point() {
        let c = [0.4, -0.3];
        let mut tasks = vec![
            QuadraticTask {
                train: Quadratic::isotropic(&c),
                test: Quadratic::isotropic(&c),
            };
            4
        ];
        let omega = pv(&c);
        for alg in [Algorithm::Imaml, Algorithm::Maml] {
            let (next, m) = outer_step(alg, &omega, &mut tasks, &cfg(1.0, 0.1, 5), 1, 0).unwrap();
            assert_eq!(next, omega);
            assert_eq!(m.grad_norm, 0.0);
        }
    }

    #[test]
    fn outer_step_quadratic_closed_forms() {
        let centers = [[1.0, 0.0], [0.0, 2.0], [-1.0, 1.0]];
        let mut tasks: Vec<QuadraticTask> = centers
            .iter()
            .map(|c| QuadraticTask {
                train: Quadratic::isotropic(c),
                test: Quadratic::isotropic(c),
            })
            .collect();
        let omega = pv(&[0.5, 0.5]);
        let gamma = 1.5;
        let mut config = cfg(gamma, 0.1, 400);
        config.batch_size = 3;
        config.beta_out = 0.2;
        let (next, _) = outer_step(Algorithm::Imaml, &omega, &mut tasks, &config, 1, 0).unwrap();
        for i in 0..2 {
            let g: f64 = centers
                .iter()
                .map(|c| {
                    let psi = (gamma * omega.values()[i] + c[i]) / (1.0 + gamma);
                    gamma / (1.0 + gamma) * (psi - c[i])
                })
                .sum::<f64>()
                / 3.0;
            assert!((next.values()[i] - (omega.values()[i] - 0.2 * g)).abs() <= 1e-8);
        }
        let mean_c = [0.0, 1.0];
        assert!(next.sub(&pv(&mean_c)).unwrap().norm() < omega.sub(&pv(&mean_c)).unwrap().norm());

        let mut config = cfg(gamma, 0.1, 3);
        config.batch_size = 3;
        config.beta_out = 0.2;
        let (next, _) = outer_step(Algorithm::Maml, &omega, &mut tasks, &config, 1, 0).unwrap();
        for i in 0..2 {
            let g: f64 = centers
                .iter()
                .map(|c| c[i] + 0.9f64.powi(3) * (omega.values()[i] - c[i]) - c[i])
                .sum::<f64>()
                / 3.0;
            assert!((next.values()[i] - (omega.values()[i] - 0.2 * g)).abs() <= 1e-12);
        }
        assert!(outer_step(Algorithm::Supervised, &omega, &mut tasks, &config, 1, 0).is_err());
    }

    #[test]
    fn outer_step_reports_failing_task() {
        let mut tasks = vec![
            QuadraticTask {
                train: Quadratic::isotropic(&[0.0]),
                test: Quadratic::isotropic(&[0.0]),
            },
            QuadraticTask {
                train: Quadratic::diagonal(&[-10.0], &[0.0]),
                test: Quadratic::isotropic(&[1.0]),
            },
        ];
        let mut config = cfg(1.0, 1e-3, 1);
        config.batch_size = 2;
        let err = outer_step(Algorithm::Imaml, &pv(&[0.5]), &mut tasks, &config, 1, 0).unwrap_err();
        assert!(matches!(err, Error::Task { index: 1, .. }));
        assert_eq!(err.exit_code(), 3);
    }

    #[test]
    fn supervised_examples() {
        let obj = Quadratic::diagonal(&[1.0, 4.0], &[1.0, 1.0]);
        let w0 = pv(&[3.0, -2.0]);
        assert_eq!(supervised_train(&obj, &w0, 0, 0.1).unwrap(), w0);
        let mut prev = obj.value(&w0).unwrap();
        for k in 1..20 {
            let w = supervised_train(&obj, &w0, k, 0.1).unwrap();
            let v = obj.value(&w).unwrap();
            assert!(v <= prev);
            prev = v;
        }
    }

    #[test]
    fn proximal_descent_logs_requested_steps() {
        let obj = Quadratic::isotropic(&[1.0]);
        let (_, log) = proximal_descent(&obj, &pv(&[0.0]), 0.0, 0.5, 3, &[0, 2, 3]).unwrap();
        assert_eq!(log, vec![(0, 0.5), (2, 0.5 * 0.0625), (3, 0.5 * 0.015625)]);
    }

    fn tiny_source(seed: u64) -> SourceTask {
        let plant = PlantParams::vdp(0.5);
        let ds = generate_trajectory(&plant, &excitation(120, 1, 1.0, seed), &[0.5, 0.0], 0.0, seed).unwrap();
        let model = NssmConfig {
            n_u: 1,
            n_y: 2,
            n_z: 2,
            history: 3,
            horizon: 4,
            hidden_width: 5,
            hidden_layers: 1,
        };
        let spec = {
            let mut s = crate::mpc::MpcConfig::for_plant(&plant).spec().unwrap();
            s.horizon = 5;
            s
        };
        SourceTask {
            plant,
            dataset: ds,
            model,
            windows: 12,
            train_fraction: 0.5,
            explore_std: 0.2,
            episode_len: 15,
            collection: Some(Arc::new(CollectionContext {
                scaler: Scaler::identity(1, 2),
                spec,
                reference: Reference::circle(2.0, 0.5, 0.05, 100),
                initial_state: vec![0.5, 0.5],
                measurement_std: 0.0,
                abort_bound: None,
            })),
        }
    }

    #[test]
    fn collection_appends_an_episode() {
        let mut task = tiny_source(2);
        let params = NssmParams::init(task.model.clone(), &mut rng_for(1, &[])).unwrap();
        let before = task.dataset.len();
        let rep = task.after_adapt(params.weights(), 9).unwrap();
        assert_eq!(rep.rows_added, 15);
        assert_eq!(task.dataset.len(), before + 15);
        assert_eq!(task.dataset.segments().len(), 2);

        let mut again = tiny_source(2);
        again.after_adapt(params.weights(), 9).unwrap();
        assert_eq!(again.dataset, task.dataset);
    }

    #[test]
    fn nssm_outer_step_is_reproducible() {
        let mut tasks: Vec<SourceTask> = (0..3).map(tiny_source).collect();
        let mut twins = tasks.clone();
        let omega = NssmParams::init(tasks[0].model.clone(), &mut rng_for(4, &[])).unwrap();
        let mut config = cfg(1.0, 1e-2, 3);
        config.batch_size = 2;
        config.cg_iters = 5;
        config.windows_per_task = 12;
        for alg in [Algorithm::Imaml, Algorithm::Maml] {
            let a = outer_step(alg, omega.weights(), &mut tasks, &config, 5, 0).unwrap();
            let b = outer_step(alg, omega.weights(), &mut twins, &config, 5, 0).unwrap();
            assert_eq!(a, b);
            assert!(a.1.mean_test_loss.is_finite());
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]

        #[test]
        fn cg_residual_energy_decreases(seed in 0u64..1000, gamma in 0.1f64..10.0) {
            let mut rng = rng_for(seed, &[]);
            use rand::Rng;
            let n = 6;
            let l = DMatrix::from_fn(n, n, |_, _| rng.random_range(-1.0..1.0));
            let q = Quadratic { hessian: &l * l.transpose(), center: DVector::zeros(n) };
            let rhs: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
            let r = cg_solve(&q, &pv(&[0.0; 6]), &pv(&rhs), gamma, 6, 1e-300).unwrap();
            prop_assert!(r.objective.windows(2).all(|p| p[1] <= p[0] + 1e-12));
        }

        #[test]
        fn partition_is_a_disjoint_cover(seed in 0u64..1000, n in 2usize..40, f in 0.05f64..0.95) {
            let batch = sample_windows(&ramp_dataset(200), 2, 3, n, seed).unwrap();
            let split = partition(&batch, f, seed).unwrap();
            prop_assert!(!split.train.is_empty() && !split.test.is_empty());
            let mut all: Vec<usize> = split.train.starts().iter().chain(split.test.starts()).copied().collect();
            all.sort_unstable();
            prop_assert_eq!(all, batch.starts().to_vec());
        }
    }
}
