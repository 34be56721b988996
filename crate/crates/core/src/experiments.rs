//! Experiment configuration, source/target data construction and the
//! commands behind the command-line front end.
//!
//! Every command is a pure function of its configuration, seed and input
//! files, and writes only below its output directory.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::meta::{
    all_windows, outer_step, proximal_descent_from, Algorithm, CollectionContext, MetaConfig, SourceTask,
};
use crate::mpc::{run_episode, Episode, EpisodeOptions, MpcConfig, Reference, TrackingController};
use crate::nssm::{decode_f64s, encode_f64s, NssmConfig, NssmObjective, NssmParams};
use crate::plants::{
    add_output_noise, excitation, generate_feedback_trajectory, generate_trajectory, read_dataset, sample_initial_state,
    sample_params, write_dataset, PlantKind, PlantParams, Scaler, TrajectoryDataset,
};
use crate::seed::{derive_seed, rng_for, tag};

/// Generation attempts per segment before a diverging plant is reported.
const MAX_SEGMENT_ATTEMPTS: u64 = 16;
/// Excitation amplitude shrink factor between attempts.
const RETRY_SHRINK: f64 = 0.8;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum ReferenceConfig {
    /// `radius·(cos(ω₀ t dt), sin(ω₀ t dt))`.
    Circle { radius: f64, angular_speed: f64 },
    Constant { value: Vec<f64> },
}

impl ReferenceConfig {
    pub fn build(&self, dt: f64, len: usize) -> Reference {
        match self {
            ReferenceConfig::Circle { radius, angular_speed } => Reference::circle(*radius, *angular_speed, dt, len),
            ReferenceConfig::Constant { value } => Reference::constant(value, len),
        }
    }

    fn n_y(&self) -> usize {
        match self {
            ReferenceConfig::Circle { .. } => 2,
            ReferenceConfig::Constant { value } => value.len(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    pub num_sources: usize,
    /// Samples per source system.
    pub source_length: usize,
    /// Sources are split into independent episodes of this length.
    pub segment_length: usize,
    pub target_length: usize,
    pub excitation_amplitude: f64,
    /// Output noise std in standardized units.
    pub noise_std: f64,
    /// Half-widths of the uniform initial-state box.
    pub initial_state_range: Vec<f64>,
    /// Optional stabilizing state feedback applied while exciting the plant.
    pub feedback_gain: Option<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdaptConfig {
    pub lr: f64,
    /// Proximal strength for iMAML adaptation; `None` reuses `meta.gamma`.
    pub gamma: Option<f64>,
    pub steps: usize,
    /// Steps at which the target loss is logged.
    pub log_steps: Vec<usize>,
    /// Steps at which adapted models are saved and tracked in a study.
    pub track_steps: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrackConfig {
    pub episode_len: usize,
    pub initial_state_range: Vec<f64>,
    pub measurement_noise_std: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub plant: PlantKind,
    pub data: DataConfig,
    pub nssm: NssmConfig,
    pub meta: MetaConfig,
    pub mpc: MpcConfig,
    pub reference: ReferenceConfig,
    pub adapt: AdaptConfig,
    pub track: TrackConfig,
    /// Collection episodes stop once an output leaves this bound.
    pub collection_abort_bound: Option<f64>,
    /// Meta-training writes a checkpoint and resume state every K iterations.
    pub checkpoint_every: usize,
    /// Write measured wall time into the metrics (breaks byte-identical reruns).
    pub record_wall_time: bool,
    pub seeds: Vec<u64>,
    pub output_dir: PathBuf,
}

impl ExperimentConfig {
    pub fn default_for(kind: PlantKind) -> Self {
        let (plant, data, reference, track, abort, num_sources) = match kind {
            PlantKind::Vdp => (
                PlantParams::vdp(0.0),
                DataConfig {
                    num_sources: 32,
                    source_length: 500,
                    segment_length: 500,
                    target_length: 300,
                    excitation_amplitude: 2.0,
                    noise_std: 0.01,
                    initial_state_range: vec![2.0, 2.0],
                    feedback_gain: None,
                },
                // clockwise at 1 rad/s: the only radius-2 circle with y_1 = dy_0/dt
                ReferenceConfig::Circle {
                    radius: 2.0,
                    angular_speed: -1.0,
                },
                TrackConfig {
                    episode_len: 300,
                    initial_state_range: vec![0.5, 0.5],
                    measurement_noise_std: 0.0,
                },
                Some(10.0),
                32,
            ),
            PlantKind::Pendulum => (
                PlantParams::pendulum(1.0),
                DataConfig {
                    num_sources: 5,
                    source_length: 500,
                    segment_length: 100,
                    target_length: 300,
                    excitation_amplitude: 0.5,
                    noise_std: 0.01,
                    initial_state_range: vec![0.05, 0.05],
                    feedback_gain: Some(vec![15.0, 3.0]),
                },
                ReferenceConfig::Constant { value: vec![0.0] },
                TrackConfig {
                    episode_len: 200,
                    initial_state_range: vec![0.05, 0.05],
                    measurement_noise_std: 0.0,
                },
                Some(1.0),
                5,
            ),
        };
        ExperimentConfig {
            plant: kind,
            data: DataConfig { num_sources, ..data },
            nssm: NssmConfig {
                n_u: kind.n_u(),
                n_y: kind.n_y(),
                n_z: 5,
                history: 10,
                horizon: 20,
                hidden_width: 128,
                hidden_layers: 2,
            },
            meta: MetaConfig::default(),
            mpc: MpcConfig::for_plant(&plant),
            reference,
            adapt: AdaptConfig {
                lr: 1e-3,
                gamma: None,
                steps: 3000,
                log_steps: vec![0, 10, 100, 300, 1000, 3000],
                track_steps: vec![10, 100, 3000],
            },
            track,
            collection_abort_bound: abort,
            checkpoint_every: 50,
            record_wall_time: false,
            seeds: (0..10).collect(),
            output_dir: PathBuf::from("runs"),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        self.nssm.validate()?;
        self.meta.validate()?;
        self.mpc.spec()?;
        let kind = self.plant;
        if self.nssm.n_u != kind.n_u() || self.nssm.n_y != kind.n_y() {
            return fail(format!(
                "model channels ({} in, {} out) do not match the {:?} plant ({} in, {} out)",
                self.nssm.n_u,
                self.nssm.n_y,
                kind,
                kind.n_u(),
                kind.n_y()
            ));
        }
        if self.mpc.u_min.len() != kind.n_u() || self.mpc.output_weight.len() != kind.n_y() {
            return fail("MPC weights or box do not match the plant".into());
        }
        if self.reference.n_y() != kind.n_y() {
            return fail("reference width does not match the plant output".into());
        }
        let window = self.nssm.history + self.nssm.horizon;
        let d = &self.data;
        if d.num_sources == 0 {
            return fail("num_sources must be at least 1".into());
        }
        if d.segment_length < window || d.source_length < window || d.target_length < window {
            return fail(format!("source, segment and target lengths must be at least history + horizon = {window}"));
        }
        if d.initial_state_range.len() != kind.n_x() || self.track.initial_state_range.len() != kind.n_x() {
            return fail(format!("initial state ranges need {} entries", kind.n_x()));
        }
        if let Some(g) = &d.feedback_gain {
            if g.len() != kind.n_u() * kind.n_x() {
                return fail(format!("feedback_gain needs {} entries", kind.n_u() * kind.n_x()));
            }
        }
        if !(d.excitation_amplitude >= 0.0 && d.noise_std >= 0.0 && self.track.measurement_noise_std >= 0.0) {
            return fail("amplitudes and noise levels must be non-negative".into());
        }
        if !(self.adapt.lr > 0.0) {
            return fail("adapt.lr must be positive".into());
        }
        if self.adapt.gamma.is_some_and(|g| !(g > 0.0)) {
            return fail("adapt.gamma must be positive".into());
        }
        if self.checkpoint_every == 0 {
            return fail("checkpoint_every must be at least 1".into());
        }
        if self.seeds.is_empty() {
            return fail("seeds must list at least one seed".into());
        }
        if let ReferenceConfig::Circle { radius, angular_speed } = self.reference {
            if !(radius.is_finite() && angular_speed.is_finite()) {
                return fail("circle reference parameters must be finite".into());
            }
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        let cfg: ExperimentConfig =
            serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_json())?;
        Ok(())
    }

    /// Representative plant for physical constants (dt, input box).
    fn nominal_plant(&self) -> PlantParams {
        match self.plant {
            PlantKind::Vdp => PlantParams::vdp(0.0),
            PlantKind::Pendulum => PlantParams::pendulum(1.0),
        }
    }
}

fn fmt_f64(v: f64) -> String {
    format!("{v:?}")
}

fn write_csv(path: &Path, header: &[&str], rows: &[Vec<String>]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(header)?;
    for r in rows {
        w.write_record(r)?;
    }
    w.flush()?;
    Ok(())
}

/// Clean (unscaled, noise-free) dataset of `length` samples in independent segments.
/// A segment whose simulation diverges is regenerated with a fresh sub-seed
/// and a smaller excitation amplitude.
pub fn generate_dataset(cfg: &ExperimentConfig, plant: &PlantParams, length: usize, seed: u64) -> Result<TrajectoryDataset> {
    let d = &cfg.data;
    let kind = plant.kind();
    let mut out = TrajectoryDataset::new(kind.n_u(), kind.n_y(), Some(plant.clone()));
    let mut remaining = length;
    let mut segment = 0u64;
    while remaining > 0 {
        let len = remaining.min(d.segment_length);
        let mut produced = None;
        for attempt in 0..MAX_SEGMENT_ATTEMPTS {
            let sub = derive_seed(seed, &[segment, attempt]);
            let amplitude = d.excitation_amplitude * RETRY_SHRINK.powi(attempt as i32);
            let x0 = sample_initial_state(&d.initial_state_range, &mut rng_for(sub, &[tag::INITIAL_STATE]));
            let u = excitation(len, kind.n_u(), amplitude, sub);
            let result = match &d.feedback_gain {
                Some(gain) => generate_feedback_trajectory(plant, &u, gain, &x0, 0.0, sub),
                None => generate_trajectory(plant, &u, &x0, 0.0, sub),
            };
            match result {
                Ok(ds) => {
                    produced = Some(ds);
                    break;
                }
                Err(Error::PlantBlowUp { step }) => {
                    log::debug!("segment {segment} attempt {attempt} diverged at step {step}; retrying");
                }
                Err(e) => return Err(e),
            }
        }
        let ds = produced.ok_or(Error::PlantBlowUp { step: 0 })?;
        out.append(&ds)?;
        remaining -= len;
        segment += 1;
    }
    Ok(out)
}

/// Standardized source and target datasets sharing one scaler.
#[derive(Debug, Clone, PartialEq)]
pub struct SourceData {
    pub sources: Vec<TrajectoryDataset>,
    pub target: TrajectoryDataset,
    pub scaler: Scaler,
}

impl SourceData {
    pub fn target_plant(&self) -> Result<&PlantParams> {
        self.target
            .plant
            .as_ref()
            .ok_or_else(|| Error::Format("target dataset carries no plant description".into()))
    }
}

pub fn target_plant_for(kind: PlantKind, seed: u64) -> Result<PlantParams> {
    Ok(sample_params(kind, 1, derive_seed(seed, &[tag::TARGET]))?.remove(0))
}

/// Samples the source plants and the target plant (or uses `target`) and
/// builds their standardized datasets.
pub fn build_source_data(cfg: &ExperimentConfig, seed: u64, target: Option<PlantParams>) -> Result<SourceData> {
    cfg.validate()?;
    let plants = sample_params(cfg.plant, cfg.data.num_sources, seed)?;
    let raw: Vec<TrajectoryDataset> = plants
        .iter()
        .enumerate()
        .map(|(k, p)| {
            generate_dataset(cfg, p, cfg.data.source_length, derive_seed(seed, &[tag::EXCITATION, k as u64]))
                .map_err(|e| e.in_task(k))
        })
        .collect::<Result<_>>()?;
    let target_plant = match target {
        Some(p) => p,
        None => target_plant_for(cfg.plant, seed)?,
    };
    let target_raw = generate_dataset(cfg, &target_plant, cfg.data.target_length, derive_seed(seed, &[tag::TARGET, 1]))?;
    let refs: Vec<&TrajectoryDataset> = raw.iter().collect();
    let scaler = Scaler::fit(&refs)?;
    let noisy = |d: &TrajectoryDataset, k: u64| add_output_noise(&scaler.apply(d), cfg.data.noise_std, derive_seed(seed, &[tag::NOISE, k]));
    Ok(SourceData {
        sources: raw
            .iter()
            .enumerate()
            .map(|(k, d)| noisy(d, k as u64))
            .collect::<Result<_>>()?,
        target: noisy(&target_raw, u64::MAX)?,
        scaler,
    })
}

pub fn write_source_data(data: &SourceData, out: &Path) -> Result<()> {
    fs::create_dir_all(out.join("sources"))?;
    for (k, ds) in data.sources.iter().enumerate() {
        write_dataset(&out.join("sources"), &format!("source_{k:03}"), ds, Some(&data.scaler))?;
    }
    write_dataset(out, "target", &data.target, Some(&data.scaler))?;
    fs::write(out.join("scaler.json"), serde_json::to_string_pretty(&data.scaler)?)?;
    Ok(())
}

pub fn load_source_data(dir: &Path) -> Result<SourceData> {
    let scaler: Scaler = serde_json::from_str(&fs::read_to_string(dir.join("scaler.json"))?)?;
    let mut paths: Vec<PathBuf> = fs::read_dir(dir.join("sources"))?
        .map(|e| e.map(|e| e.path()))
        .collect::<std::io::Result<_>>()?;
    paths.retain(|p| p.extension().is_some_and(|e| e == "csv"));
    paths.sort();
    if paths.is_empty() {
        return Err(Error::Format(format!("{} holds no source datasets", dir.display())));
    }
    let sources = paths
        .iter()
        .map(|p| read_dataset(p).map(|(d, _)| d))
        .collect::<Result<Vec<_>>>()?;
    let (target, _) = read_dataset(&dir.join("target.csv"))?;
    Ok(SourceData { sources, target, scaler })
}

/// `make-source`: writes `sources/source_NNN.{csv,json}`, `target.{csv,json}`,
/// `scaler.json` and the materialized `config.json` under `out`.
pub fn cmd_make_source(cfg: &ExperimentConfig, seed: u64, out: &Path) -> Result<SourceData> {
    let data = build_source_data(cfg, seed, None)?;
    fs::create_dir_all(out)?;
    cfg.save(&out.join("config.json"))?;
    write_source_data(&data, out)?;
    Ok(data)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub outer_iter: usize,
    pub algorithm: Algorithm,
    pub mean_test_loss: f64,
    pub grad_norm: f64,
    pub wall_ms: u64,
}

/// Meta-training progress: enough to continue bit-exactly.
#[derive(Debug, Clone)]
pub struct TrainState {
    pub algorithm: Algorithm,
    pub seed: u64,
    pub iter: usize,
    pub params: NssmParams,
    pub tasks: Vec<SourceTask>,
    pub metrics: Vec<MetricsRow>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct DatasetDoc {
    n_u: usize,
    n_y: usize,
    segment_starts: Vec<usize>,
    plant: Option<PlantParams>,
    u: String,
    y: String,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ResumeDoc {
    algorithm: Algorithm,
    seed: u64,
    iter: usize,
    checkpoint: String,
    datasets: Vec<DatasetDoc>,
    metrics: Vec<MetricsRow>,
}

fn collection_context(cfg: &ExperimentConfig, scaler: &Scaler) -> Result<Option<Arc<CollectionContext>>> {
    if cfg.meta.episode_len == 0 {
        return Ok(None);
    }
    let dt = cfg.nominal_plant().dt();
    Ok(Some(Arc::new(CollectionContext {
        scaler: scaler.clone(),
        spec: cfg.mpc.spec()?,
        reference: cfg.reference.build(dt, cfg.meta.episode_len + cfg.mpc.horizon + 1),
        initial_state: cfg.track.initial_state_range.clone(),
        measurement_std: cfg.data.noise_std,
        abort_bound: cfg.collection_abort_bound,
    })))
}

fn source_tasks(cfg: &ExperimentConfig, datasets: Vec<TrajectoryDataset>, scaler: &Scaler) -> Result<Vec<SourceTask>> {
    let ctx = collection_context(cfg, scaler)?;
    datasets
        .into_iter()
        .enumerate()
        .map(|(k, dataset)| {
            let plant = dataset
                .plant
                .clone()
                .ok_or_else(|| Error::Format(format!("source {k} carries no plant description")))?;
            Ok(SourceTask {
                plant,
                dataset,
                model: cfg.nssm.clone(),
                windows: cfg.meta.windows_per_task,
                train_fraction: cfg.meta.train_fraction,
                explore_std: cfg.meta.explore_std,
                episode_len: cfg.meta.episode_len,
                collection: ctx.clone(),
            })
        })
        .collect()
}

impl TrainState {
    pub fn new(cfg: &ExperimentConfig, data: &SourceData, algorithm: Algorithm, seed: u64) -> Result<Self> {
        cfg.validate()?;
        if algorithm == Algorithm::Supervised {
            return Err(Error::Config("supervised training has no meta-training phase".into()));
        }
        let params = NssmParams::init(cfg.nssm.clone(), &mut rng_for(seed, &[tag::INIT]))?;
        Ok(TrainState {
            algorithm,
            seed,
            iter: 0,
            params,
            tasks: source_tasks(cfg, data.sources.clone(), &data.scaler)?,
            metrics: Vec::new(),
        })
    }

    /// Runs outer iterations until `until` (exclusive) or the configured budget.
    pub fn run(
        &mut self,
        cfg: &ExperimentConfig,
        until: usize,
        mut on_iter: impl FnMut(&TrainState) -> Result<()>,
    ) -> Result<()> {
        let stop = until.min(cfg.meta.outer_iters);
        while self.iter < stop {
            let started = Instant::now();
            let (next, m) = outer_step(
                self.algorithm,
                self.params.weights(),
                &mut self.tasks,
                &cfg.meta,
                self.seed,
                self.iter as u64,
            )?;
            if m.dare_fallbacks > 0 {
                log::warn!("iteration {}: {} collection episodes used the fallback terminal weight", self.iter, m.dare_fallbacks);
            }
            self.params = self.params.with_weights(next)?;
            self.metrics.push(MetricsRow {
                outer_iter: self.iter,
                algorithm: self.algorithm,
                mean_test_loss: m.mean_test_loss,
                grad_norm: m.grad_norm,
                wall_ms: if cfg.record_wall_time { started.elapsed().as_millis() as u64 } else { 0 },
            });
            self.iter += 1;
            on_iter(self)?;
        }
        Ok(())
    }

    pub fn to_json(&self) -> String {
        let doc = ResumeDoc {
            algorithm: self.algorithm,
            seed: self.seed,
            iter: self.iter,
            checkpoint: self.params.to_checkpoint_json(),
            datasets: self
                .tasks
                .iter()
                .map(|t| DatasetDoc {
                    n_u: t.dataset.n_u(),
                    n_y: t.dataset.n_y(),
                    segment_starts: t.dataset.segment_starts().to_vec(),
                    plant: t.dataset.plant.clone(),
                    u: encode_f64s(t.dataset.u()),
                    y: encode_f64s(t.dataset.y()),
                })
                .collect(),
            metrics: self.metrics.clone(),
        };
        serde_json::to_string(&doc).expect("resume state serializes")
    }

    pub fn from_json(text: &str, cfg: &ExperimentConfig, scaler: &Scaler) -> Result<Self> {
        let doc: ResumeDoc = serde_json::from_str(text)?;
        let datasets = doc
            .datasets
            .into_iter()
            .map(|d| TrajectoryDataset::from_parts(d.n_u, d.n_y, decode_f64s(&d.u)?, decode_f64s(&d.y)?, d.segment_starts, d.plant))
            .collect::<Result<Vec<_>>>()?;
        let params = NssmParams::from_checkpoint_json(&doc.checkpoint)?;
        if params.config() != &cfg.nssm {
            return Err(Error::Config("resume state was written for a different model configuration".into()));
        }
        Ok(TrainState {
            algorithm: doc.algorithm,
            seed: doc.seed,
            iter: doc.iter,
            params,
            tasks: source_tasks(cfg, datasets, scaler)?,
            metrics: doc.metrics,
        })
    }
}

pub const METRICS_HEADER: [&str; 6] = [
    "outer_iter",
    "algorithm",
    "mean_test_loss",
    "grad_norm",
    "wall_ms",
    "log_mean_test_loss",
];

fn write_metrics(path: &Path, rows: &[MetricsRow]) -> Result<()> {
    let rows: Vec<Vec<String>> = rows
        .iter()
        .map(|r| {
            vec![
                r.outer_iter.to_string(),
                r.algorithm.to_string(),
                fmt_f64(r.mean_test_loss),
                fmt_f64(r.grad_norm),
                r.wall_ms.to_string(),
                fmt_f64(r.mean_test_loss.ln()),
            ]
        })
        .collect();
    write_csv(path, &METRICS_HEADER, &rows)
}

/// One `records.csv` line consumed by `report`.
#[derive(Debug, Clone, PartialEq)]
pub struct Record {
    pub algorithm: String,
    pub adapt_steps: usize,
    pub seed: u64,
    pub metric: String,
    pub value: f64,
}

const RECORD_HEADER: [&str; 5] = ["algorithm", "adapt_steps", "seed", "metric", "value"];

fn write_records(path: &Path, records: &[Record]) -> Result<()> {
    let rows: Vec<Vec<String>> = records
        .iter()
        .map(|r| {
            vec![
                r.algorithm.clone(),
                r.adapt_steps.to_string(),
                r.seed.to_string(),
                r.metric.clone(),
                fmt_f64(r.value),
            ]
        })
        .collect();
    write_csv(path, &RECORD_HEADER, &rows)
}

/// `meta-train`: writes `metrics.csv`, `checkpoint.json`, periodic
/// `checkpoints/iter_NNNNN.json` plus `resume.json`, and `records.csv`.
/// With `resume`, continues from `out/resume.json` when present.
pub fn cmd_meta_train(
    cfg: &ExperimentConfig,
    data_dir: &Path,
    algorithm: Algorithm,
    seed: u64,
    out: &Path,
    resume: bool,
) -> Result<TrainState> {
    cfg.validate()?;
    let data = load_source_data(data_dir)?;
    fs::create_dir_all(out.join("checkpoints"))?;
    let resume_path = out.join("resume.json");
    let mut state = if resume && resume_path.exists() {
        let s = TrainState::from_json(&fs::read_to_string(&resume_path)?, cfg, &data.scaler)?;
        if s.algorithm != algorithm || s.seed != seed {
            return Err(Error::Config("resume state belongs to a different algorithm or seed".into()));
        }
        s
    } else {
        TrainState::new(cfg, &data, algorithm, seed)?
    };
    let every = cfg.checkpoint_every;
    let save = |s: &TrainState| -> Result<()> {
        if s.iter.is_multiple_of(every) || s.iter == cfg.meta.outer_iters {
            s.params.save(out.join("checkpoints").join(format!("iter_{:05}.json", s.iter)))?;
            fs::write(out.join("resume.json"), s.to_json())?;
            write_metrics(&out.join("metrics.csv"), &s.metrics)?;
        }
        Ok(())
    };
    state.run(cfg, cfg.meta.outer_iters, save)?;
    write_metrics(&out.join("metrics.csv"), &state.metrics)?;
    state.params.save(out.join("checkpoint.json"))?;
    let mut records = Vec::new();
    if let (Some(first), Some(last)) = (state.metrics.first(), state.metrics.last()) {
        for (metric, value) in [
            ("initial_mean_test_loss", first.mean_test_loss),
            ("final_mean_test_loss", last.mean_test_loss),
        ] {
            records.push(Record {
                algorithm: algorithm.to_string(),
                adapt_steps: 0,
                seed,
                metric: metric.into(),
                value,
            });
        }
    }
    write_records(&out.join("records.csv"), &records)?;
    Ok(state)
}

#[derive(Debug, Clone)]
pub struct AdaptOutcome {
    pub params: NssmParams,
    /// `(step, target loss)` at the logged steps.
    pub losses: Vec<(usize, f64)>,
    /// Copies of the weights at the requested snapshot steps.
    pub snapshots: Vec<(usize, NssmParams)>,
}

/// Starting weights for adaptation: the meta-trained ones, or a fresh random
/// initialization for the supervised baseline.
pub fn adaptation_start(cfg: &ExperimentConfig, algorithm: Algorithm, meta: Option<&NssmParams>, seed: u64) -> Result<NssmParams> {
    match (algorithm, meta) {
        (Algorithm::Supervised, None) => NssmParams::init(cfg.nssm.clone(), &mut rng_for(seed, &[tag::INIT, 1])),
        (Algorithm::Supervised, Some(_)) => Err(Error::Config(
            "supervised adaptation starts from a random initialization; omit the checkpoint".into(),
        )),
        (_, Some(p)) => Ok(p.clone()),
        (_, None) => Err(Error::Config(format!("{algorithm} adaptation needs a meta-trained checkpoint"))),
    }
}

/// Adapts `start` on every window of the target dataset: proximal descent
/// around `start` for iMAML, plain descent otherwise.
pub fn adapt_model(
    cfg: &ExperimentConfig,
    start: &NssmParams,
    target: &TrajectoryDataset,
    algorithm: Algorithm,
    steps: usize,
    snapshot_steps: &[usize],
) -> Result<AdaptOutcome> {
    let windows = all_windows(target, cfg.nssm.history, cfg.nssm.horizon)?;
    let obj = NssmObjective::new(cfg.nssm.clone(), &windows)?;
    let gamma = match algorithm {
        Algorithm::Imaml => cfg.adapt.gamma.unwrap_or(cfg.meta.gamma),
        Algorithm::Maml | Algorithm::Supervised => 0.0,
    };
    let mut marks: Vec<usize> = snapshot_steps.iter().copied().filter(|&s| s <= steps).collect();
    marks.push(steps);
    marks.sort_unstable();
    marks.dedup();
    let log_steps: Vec<usize> = cfg.adapt.log_steps.iter().copied().filter(|&s| s <= steps).collect();

    let anchor = start.weights();
    let mut current = anchor.clone();
    let mut done = 0;
    let mut losses = Vec::new();
    let mut snapshots = Vec::new();
    for mark in marks {
        let local: Vec<usize> = log_steps
            .iter()
            .filter(|&&s| s >= done && s <= mark)
            .map(|s| s - done)
            .collect();
        let (w, log) = proximal_descent_from(&obj, anchor, &current, gamma, cfg.adapt.lr, mark - done, &local)
            .map_err(|e| match e {
                Error::InnerDiverged { step } => Error::InnerDiverged { step: step + done },
                other => other,
            })?;
        for (s, l) in log {
            if losses.last().map(|(ls, _)| *ls) != Some(s + done) {
                losses.push((s + done, l));
            }
        }
        current = w;
        done = mark;
        if snapshot_steps.contains(&mark) {
            snapshots.push((mark, start.with_weights(current.clone())?));
        }
    }
    Ok(AdaptOutcome {
        params: start.with_weights(current)?,
        losses,
        snapshots,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdaptInfo {
    pub algorithm: Algorithm,
    pub steps: usize,
    pub seed: u64,
}

/// `adapt`: writes `adapted.json`, `adapted_NNNNN.json` at the configured
/// track steps, `adapt_loss.csv`, `adapt_info.json` and `records.csv`.
pub fn cmd_adapt(
    cfg: &ExperimentConfig,
    checkpoint: Option<&Path>,
    data_dir: &Path,
    algorithm: Algorithm,
    steps: usize,
    seed: u64,
    out: &Path,
) -> Result<AdaptOutcome> {
    cfg.validate()?;
    let meta = checkpoint.map(NssmParams::load).transpose()?;
    if let Some(p) = &meta {
        if p.config() != &cfg.nssm {
            return Err(Error::Config("checkpoint model configuration differs from the config file".into()));
        }
    }
    let start = adaptation_start(cfg, algorithm, meta.as_ref(), seed)?;
    let (target, _) = read_dataset(&data_dir.join("target.csv"))?;
    fs::create_dir_all(out)?;
    let outcome = adapt_model(cfg, &start, &target, algorithm, steps, &cfg.adapt.track_steps)?;
    outcome.params.save(out.join("adapted.json"))?;
    for (s, p) in &outcome.snapshots {
        p.save(out.join(format!("adapted_{s:05}.json")))?;
        fs::write(
            out.join(format!("adapted_{s:05}.info.json")),
            serde_json::to_string_pretty(&AdaptInfo { algorithm, steps: *s, seed })?,
        )?;
    }
    fs::write(
        out.join("adapt_info.json"),
        serde_json::to_string_pretty(&AdaptInfo { algorithm, steps, seed })?,
    )?;
    let rows: Vec<Vec<String>> = outcome
        .losses
        .iter()
        .map(|(s, l)| vec![s.to_string(), fmt_f64(*l)])
        .collect();
    write_csv(&out.join("adapt_loss.csv"), &["step", "loss"], &rows)?;
    let records: Vec<Record> = outcome
        .losses
        .iter()
        .map(|(s, l)| Record {
            algorithm: algorithm.to_string(),
            adapt_steps: *s,
            seed,
            metric: "target_loss".into(),
            value: *l,
        })
        .collect();
    write_records(&out.join("records.csv"), &records)?;
    Ok(outcome)
}

/// Closed-loop tracking of the configured reference on `plant`.
pub fn track_model(cfg: &ExperimentConfig, params: &NssmParams, scaler: &Scaler, plant: &PlantParams, seed: u64) -> Result<Episode> {
    let spec = cfg.mpc.spec()?;
    let reference = cfg
        .reference
        .build(plant.dt(), cfg.track.episode_len + spec.horizon + 1);
    let ctl = TrackingController::new(params, scaler, &spec)?;
    let mut rng = rng_for(seed, &[tag::TRACK]);
    let x0 = sample_initial_state(&cfg.track.initial_state_range, &mut rng_for(seed, &[tag::INITIAL_STATE]));
    let opts = EpisodeOptions {
        explore_std: 0.0,
        measurement_std: cfg.track.measurement_noise_std,
        abort_bound: None,
    };
    run_episode(&ctl, plant, &x0, &reference, cfg.track.episode_len, opts, &mut rng)
}

pub fn write_episode(path: &Path, ep: &Episode) -> Result<()> {
    let header: Vec<String> = std::iter::once("t".to_string())
        .chain((0..ep.n_y).map(|i| format!("y_{i}")))
        .chain((0..ep.n_y).map(|i| format!("yref_{i}")))
        .chain((0..ep.n_u).map(|i| format!("u_{i}")))
        .chain(std::iter::once("err".to_string()))
        .collect();
    let header_ref: Vec<&str> = header.iter().map(String::as_str).collect();
    let rows: Vec<Vec<String>> = (0..ep.len())
        .map(|t| {
            std::iter::once(t.to_string())
                .chain(ep.y[t * ep.n_y..(t + 1) * ep.n_y].iter().map(|v| fmt_f64(*v)))
                .chain(ep.reference[t * ep.n_y..(t + 1) * ep.n_y].iter().map(|v| fmt_f64(*v)))
                .chain(ep.u[t * ep.n_u..(t + 1) * ep.n_u].iter().map(|v| fmt_f64(*v)))
                .chain(std::iter::once(fmt_f64(ep.err[t])))
                .collect()
        })
        .collect();
    write_csv(path, &header_ref, &rows)
}

/// `track`: runs the model on the target plant of `data_dir`; writes
/// `track.csv`, `summary.json` and `records.csv`.
pub fn cmd_track(cfg: &ExperimentConfig, checkpoint: &Path, data_dir: &Path, seed: u64, out: &Path) -> Result<Episode> {
    cfg.validate()?;
    let params = NssmParams::load(checkpoint)?;
    let data_scaler: Scaler = serde_json::from_str(&fs::read_to_string(data_dir.join("scaler.json"))?)?;
    let (target, _) = read_dataset(&data_dir.join("target.csv"))?;
    let plant = target
        .plant
        .clone()
        .ok_or_else(|| Error::Format("target dataset carries no plant description".into()))?;
    let info_path = checkpoint.with_extension("info.json");
    let sibling = checkpoint.parent().map(|d| d.join("adapt_info.json"));
    let info: Option<AdaptInfo> = [Some(info_path), sibling]
        .into_iter()
        .flatten()
        .find(|p| p.exists())
        .map(|p| -> Result<AdaptInfo> { Ok(serde_json::from_str(&fs::read_to_string(p)?)?) })
        .transpose()?;
    let ep = track_model(cfg, &params, &data_scaler, &plant, seed)?;
    fs::create_dir_all(out)?;
    write_episode(&out.join("track.csv"), &ep)?;
    let summary = ep.summary();
    fs::write(out.join("summary.json"), serde_json::to_string_pretty(&summary)?)?;
    let (algorithm, steps) = match &info {
        Some(i) => (i.algorithm.to_string(), i.steps),
        None => ("unknown".to_string(), 0),
    };
    let records: Vec<Record> = [("mean_err", summary.mean_err), ("final_err", summary.final_err)]
        .into_iter()
        .map(|(metric, value)| Record {
            algorithm: algorithm.clone(),
            adapt_steps: steps,
            seed,
            metric: metric.into(),
            value,
        })
        .collect();
    write_records(&out.join("records.csv"), &records)?;
    Ok(ep)
}

/// Mean and sample standard deviation (0 for a single value).
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len();
    if n == 0 {
        return (f64::NAN, f64::NAN);
    }
    let mean = values.iter().sum::<f64>() / n as f64;
    if n == 1 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    (mean, var.sqrt())
}

fn collect_record_files(dir: &Path, out: &mut Vec<PathBuf>) -> Result<()> {
    let mut entries: Vec<PathBuf> = fs::read_dir(dir)?
        .map(|e| e.map(|e| e.path()))
        .collect::<std::io::Result<_>>()?;
    entries.sort();
    for p in entries {
        if p.is_dir() {
            collect_record_files(&p, out)?;
        } else if p.file_name().is_some_and(|n| n == "records.csv") {
            out.push(p);
        }
    }
    Ok(())
}

pub fn read_records(path: &Path) -> Result<Vec<Record>> {
    let mut r = csv::Reader::from_path(path)?;
    let header: Vec<String> = r.headers()?.iter().map(str::to_string).collect();
    if header != RECORD_HEADER {
        return Err(Error::Format(format!("{}: unexpected header {header:?}", path.display())));
    }
    r.records()
        .map(|rec| {
            let rec = rec?;
            let bad = |what: &str| Error::Format(format!("{}: bad {what} in {:?}", path.display(), rec));
            Ok(Record {
                algorithm: rec[0].to_string(),
                adapt_steps: rec[1].parse().map_err(|_| bad("adapt_steps"))?,
                seed: rec[2].parse().map_err(|_| bad("seed"))?,
                metric: rec[3].to_string(),
                value: rec[4].parse().map_err(|_| bad("value"))?,
            })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct AggregateRow {
    pub algorithm: String,
    pub adapt_steps: usize,
    pub metric: String,
    pub n: usize,
    pub mean: f64,
    pub std: f64,
}

pub fn aggregate(records: &[Record]) -> Vec<AggregateRow> {
    let mut groups: BTreeMap<(String, usize, String), Vec<f64>> = BTreeMap::new();
    for r in records {
        groups
            .entry((r.algorithm.clone(), r.adapt_steps, r.metric.clone()))
            .or_default()
            .push(r.value);
    }
    groups
        .into_iter()
        .map(|((algorithm, adapt_steps, metric), values)| {
            let (mean, std) = mean_std(&values);
            AggregateRow {
                algorithm,
                adapt_steps,
                metric,
                n: values.len(),
                mean,
                std,
            }
        })
        .collect()
}

/// `report`: gathers every `records.csv` below `run_dir` and writes
/// `aggregate.csv` (mean and sample std per algorithm, step count and metric).
pub fn cmd_report(run_dir: &Path) -> Result<Vec<AggregateRow>> {
    let mut files = Vec::new();
    collect_record_files(run_dir, &mut files)?;
    let mut records = Vec::new();
    for f in &files {
        records.extend(read_records(f)?);
    }
    let rows = aggregate(&records);
    let lines: Vec<Vec<String>> = rows
        .iter()
        .map(|r| {
            vec![
                r.algorithm.clone(),
                r.adapt_steps.to_string(),
                r.metric.clone(),
                r.n.to_string(),
                fmt_f64(r.mean),
                fmt_f64(r.std),
            ]
        })
        .collect();
    write_csv(
        &run_dir.join("aggregate.csv"),
        &["algorithm", "adapt_steps", "metric", "n", "mean", "std"],
        &lines,
    )?;
    Ok(rows)
}

/// Full pipeline for each seed: data, meta-training for iMAML and MAML,
/// adaptation (including the supervised baseline) and tracking at every
/// configured step count, followed by `report`.
pub fn cmd_study(cfg: &ExperimentConfig, seeds: &[u64], out: &Path) -> Result<Vec<AggregateRow>> {
    cfg.validate()?;
    for &seed in seeds {
        let root = out.join(format!("seed_{seed}"));
        let data_dir = root.join("data");
        cmd_make_source(cfg, seed, &data_dir)?;
        for alg in [Algorithm::Imaml, Algorithm::Maml, Algorithm::Supervised] {
            let dir = root.join(alg.as_str());
            let checkpoint = if alg == Algorithm::Supervised {
                None
            } else {
                cmd_meta_train(cfg, &data_dir, alg, seed, &dir.join("train"), false)?;
                Some(dir.join("train").join("checkpoint.json"))
            };
            let adapt_dir = dir.join("adapt");
            cmd_adapt(cfg, checkpoint.as_deref(), &data_dir, alg, cfg.adapt.steps, seed, &adapt_dir)?;
            for &s in cfg.adapt.track_steps.iter().filter(|&&s| s <= cfg.adapt.steps) {
                cmd_track(
                    cfg,
                    &adapt_dir.join(format!("adapted_{s:05}.json")),
                    &data_dir,
                    seed,
                    &dir.join(format!("track_{s:05}")),
                )?;
            }
        }
    }
    cmd_report(out)
}
