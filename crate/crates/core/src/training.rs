//! Alternating source/target episodic optimization.
//!
//! Each iteration runs one source-domain step (source episode, target
//! alignment batch) followed by one target-domain step (target episode,
//! source alignment batch). Every step is a single Adam update of the shared
//! extractor and the stepping domain's mapping layer.

use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::episodes::{sample_alignment_batch, sample_episode, Episode, EpisodeShape, PatchBatch};
use crate::error::{Error, Result};
use crate::hsi_data::SampleSet;
use crate::losses::{episode_objective, EpisodeFeatures, KernelConfig, LossBreakdown, ObjectiveTerms};
use crate::network::{patches_to_map, ArchConfig, Domain, Gradients, NetworkParams};

pub const CHECKPOINT_MAGIC: &str = "PSFT1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    /// Alternation iterations; each runs one source and one target step.
    pub episodes: usize,
    pub learning_rate: f64,
    /// Episode ways; 0 means the target pool's class count.
    pub ways: usize,
    pub shots: usize,
    pub queries: usize,
    /// Alignment batch size; 0 means `ways * (shots + queries)`.
    pub align_batch: usize,
    pub use_qpl: bool,
    pub use_mmd: bool,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    /// Global gradient-norm cap; `None` disables clipping.
    pub grad_clip: Option<f64>,
    pub kernel: KernelConfig,
    /// Checkpoint period in iterations; 0 disables periodic checkpoints.
    pub checkpoint_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            episodes: 10_000,
            learning_rate: 1e-3,
            ways: 0,
            shots: 1,
            queries: 19,
            align_batch: 0,
            use_qpl: true,
            use_mmd: true,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            grad_clip: None,
            kernel: KernelConfig::default(),
            checkpoint_every: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.episodes == 0 {
            return Err(Error::Config("episodes must be >= 1".into()));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!("learning_rate must be positive, got {}", self.learning_rate)));
        }
        if self.shots == 0 || self.queries == 0 {
            return Err(Error::Config("N_s and N_q must be >= 1".into()));
        }
        for (name, b) in [("adam_beta1", self.beta1), ("adam_beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(Error::Config(format!("{name} must lie in [0, 1), got {b}")));
            }
        }
        if !(self.adam_eps > 0.0) {
            return Err(Error::Config("adam_eps must be positive".into()));
        }
        if let Some(c) = self.grad_clip {
            if !(c > 0.0) {
                return Err(Error::Config("grad_clip must be positive".into()));
            }
        }
        self.kernel.validate()
    }

    pub fn terms(&self) -> ObjectiveTerms {
        ObjectiveTerms::with_switches(self.use_qpl, self.use_mmd)
    }

    pub fn episode_shape(&self, target_classes: usize) -> EpisodeShape {
        EpisodeShape {
            ways: if self.ways == 0 { target_classes } else { self.ways },
            shots: self.shots,
            queries: self.queries,
        }
    }

    pub fn align_size(&self, shape: EpisodeShape) -> usize {
        if self.align_batch == 0 {
            shape.samples()
        } else {
            self.align_batch
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct AdamSlot {
    m: Vec<f64>,
    v: Vec<f64>,
    steps: u64,
}

/// Adam with per-tensor step counts, so tensors skipped by a step keep
/// their moments and bias correction untouched.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Adam {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    slots: Vec<AdamSlot>,
}

impl Adam {
    pub fn new(params: &NetworkParams, cfg: &TrainConfig) -> Self {
        let slots = params
            .trainable()
            .iter()
            .map(|(_, t)| AdamSlot { m: vec![0.0; t.len()], v: vec![0.0; t.len()], steps: 0 })
            .collect();
        Self { learning_rate: cfg.learning_rate, beta1: cfg.beta1, beta2: cfg.beta2, eps: cfg.adam_eps, slots }
    }

    /// Updates every tensor for which `active(name)` holds.
    pub fn step(&mut self, params: &mut NetworkParams, grads: &Gradients, active: impl Fn(&str) -> bool) {
        let (b1, b2) = (self.beta1, self.beta2);
        for ((slot, (name, p)), (_, g)) in self.slots.iter_mut().zip(params.trainable_mut()).zip(grads.tensors()) {
            if !active(name) {
                continue;
            }
            slot.steps += 1;
            let t = slot.steps as i32;
            let c1 = 1.0 - b1.powi(t);
            let c2 = 1.0 - b2.powi(t);
            for i in 0..p.len() {
                slot.m[i] = b1 * slot.m[i] + (1.0 - b1) * g[i];
                slot.v[i] = b2 * slot.v[i] + (1.0 - b2) * g[i] * g[i];
                let m_hat = slot.m[i] / c1;
                let v_hat = slot.v[i] / c2;
                p[i] -= self.learning_rate * m_hat / (v_hat.sqrt() + self.eps);
            }
        }
    }
}

fn mapping_prefix(domain: Domain) -> &'static str {
    match domain {
        Domain::Source => "source_mapping.",
        Domain::Target => "target_mapping.",
    }
}

/// Loss and gradient of one step without touching the parameters.
pub fn step_gradients(
    params: &NetworkParams,
    episode: &Episode<'_>,
    align: &PatchBatch<'_>,
    domain: Domain,
    cfg: &TrainConfig,
) -> Result<(LossBreakdown, Gradients, Vec<crate::network::ForwardTape>)> {
    step_gradients_with(params, episode, align, domain, cfg.terms(), &cfg.kernel)
}

pub(crate) fn step_gradients_with(
    params: &NetworkParams,
    episode: &Episode<'_>,
    align: &PatchBatch<'_>,
    domain: Domain,
    terms: ObjectiveTerms,
    kernel: &KernelConfig,
) -> Result<(LossBreakdown, Gradients, Vec<crate::network::ForwardTape>)> {
    let x = patches_to_map(&episode.patches())?;
    let (features, tape) = params.forward_train(&x, domain)?;
    let aligned = if terms.mmd {
        let xa = patches_to_map(&align.patches)?;
        Some(params.forward_train(&xa, domain.other())?)
    } else {
        None
    };
    let support_labels = episode.support_labels();
    let query_labels = episode.query_labels();
    let obj = episode_objective(
        domain,
        &EpisodeFeatures {
            features: &features,
            support_labels: &support_labels,
            query_labels: &query_labels,
            classes: episode.shape.ways,
        },
        aligned.as_ref().map(|(f, _)| f),
        terms,
        params.arch.distance,
        kernel,
    )?;
    let mut grads = Gradients::zeros_like(params);
    params.backward(&tape, &obj.d_episode, &mut grads);
    let mut tapes = vec![tape];
    if let (Some((_, atape)), Some(d_align)) = (aligned, obj.d_align.as_ref()) {
        params.backward(&atape, d_align, &mut grads);
        grads.zero_mapping(domain.other());
        tapes.push(atape);
    }
    Ok((obj.breakdown, grads, tapes))
}

/// One optimizer update on the step's total loss.
pub fn train_step(
    params: &mut NetworkParams,
    episode: &Episode<'_>,
    align: &PatchBatch<'_>,
    domain: Domain,
    adam: &mut Adam,
    cfg: &TrainConfig,
    iteration: usize,
) -> Result<LossBreakdown> {
    let (breakdown, mut grads, tapes) = step_gradients(params, episode, align, domain, cfg)?;
    if !breakdown.is_finite() {
        return Err(Error::Divergence { iteration, breakdown: Box::new(breakdown) });
    }
    if let Some(cap) = cfg.grad_clip {
        let norm = grads.norm();
        if norm > cap {
            grads.scale(cap / norm);
        }
    }
    let skip = mapping_prefix(domain.other());
    adam.step(params, &grads, |name| !name.starts_with(skip));
    for tape in &tapes {
        params.commit_batch_stats(tape);
    }
    if !params.is_finite() {
        return Err(Error::Divergence { iteration, breakdown: Box::new(breakdown) });
    }
    Ok(breakdown)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HistoryRecord {
    pub iteration: usize,
    #[serde(flatten)]
    pub loss: LossBreakdown,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainHistory {
    /// Two records per iteration: source step then target step.
    pub records: Vec<HistoryRecord>,
    pub source_seconds: f64,
    pub target_seconds: f64,
}

impl TrainHistory {
    pub fn iterations(&self) -> usize {
        self.records.len() / 2
    }

    pub fn domain(&self, domain: Domain) -> impl Iterator<Item = &HistoryRecord> {
        self.records.iter().filter(move |r| r.loss.domain == domain)
    }

    /// One JSON object per line: iteration, domain, fsl, qpl_inter, qpl_intra, mmd, total.
    pub fn write_jsonl<W: Write>(&self, mut out: W) -> Result<()> {
        for r in &self.records {
            serde_json::to_writer(&mut out, r)?;
            out.write_all(b"\n")?;
        }
        Ok(())
    }
}

/// Everything needed to continue training bit-for-bit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainState {
    pub params: NetworkParams,
    pub adam: Adam,
    pub rng: ChaCha8Rng,
    /// Completed iterations.
    pub iteration: usize,
}

impl TrainState {
    /// Initializes the network from `seed`; the same stream then drives sampling.
    pub fn new(
        arch: ArchConfig,
        source_bands: usize,
        target_bands: usize,
        cfg: &TrainConfig,
        seed: u64,
    ) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let params = NetworkParams::init(arch, source_bands, target_bands, &mut rng)?;
        let adam = Adam::new(&params, cfg);
        Ok(Self { params, adam, rng, iteration: 0 })
    }
}

pub type CheckpointSink<'s> = dyn FnMut(&TrainState) -> Result<()> + 's;

/// Runs iterations until `state.iteration == cfg.episodes`.
pub fn train_from(
    state: &mut TrainState,
    source: &SampleSet,
    target: &SampleSet,
    cfg: &TrainConfig,
    mut sink: Option<&mut CheckpointSink<'_>>,
) -> Result<TrainHistory> {
    cfg.validate()?;
    let shape = cfg.episode_shape(target.class_count());
    let align_n = cfg.align_size(shape);
    let mut history = TrainHistory::default();
    while state.iteration < cfg.episodes {
        let it = state.iteration;
        let result = (|| -> Result<(LossBreakdown, LossBreakdown, f64, f64)> {
            let t0 = Instant::now();
            let ep = sample_episode(source, shape, &mut state.rng)?;
            let al = sample_alignment_batch(target, align_n, &mut state.rng)?;
            let s = train_step(&mut state.params, &ep, &al, Domain::Source, &mut state.adam, cfg, it)?;
            let t1 = Instant::now();
            let ep = sample_episode(target, shape, &mut state.rng)?;
            let al = sample_alignment_batch(source, align_n, &mut state.rng)?;
            let t = train_step(&mut state.params, &ep, &al, Domain::Target, &mut state.adam, cfg, it)?;
            Ok((s, t, (t1 - t0).as_secs_f64(), t1.elapsed().as_secs_f64()))
        })();
        match result {
            Ok((s, t, ds, dt)) => {
                history.records.push(HistoryRecord { iteration: it, loss: s });
                history.records.push(HistoryRecord { iteration: it, loss: t });
                history.source_seconds += ds;
                history.target_seconds += dt;
                state.iteration += 1;
                if let Some(sink) = sink.as_deref_mut() {
                    if cfg.checkpoint_every > 0 && state.iteration % cfg.checkpoint_every == 0 {
                        sink(state)?;
                    }
                }
            }
            Err(e) => {
                if let Some(sink) = sink.as_deref_mut() {
                    sink(state)?;
                }
                return Err(e);
            }
        }
    }
    Ok(history)
}

/// Fresh initialization from `seed` followed by the full schedule.
pub fn train(
    source: &SampleSet,
    target: &SampleSet,
    arch: ArchConfig,
    cfg: &TrainConfig,
    seed: u64,
) -> Result<(NetworkParams, TrainHistory)> {
    let (sb, tb) = pool_bands(source, target)?;
    let mut state = TrainState::new(arch, sb, tb, cfg, seed)?;
    let history = train_from(&mut state, source, target, cfg, None)?;
    Ok((state.params, history))
}

pub fn pool_bands(source: &SampleSet, target: &SampleSet) -> Result<(usize, usize)> {
    let sb = source.bands().ok_or_else(|| Error::Config("source pool is empty".into()))?;
    let tb = target.bands().ok_or_else(|| Error::Config("target pool is empty".into()))?;
    Ok((sb, tb))
}

#[derive(Serialize, Deserialize)]
struct CheckpointFile {
    version: String,
    arch: ArchConfig,
    state: TrainState,
    /// Free-form provenance (config, seeds) recorded by the caller.
    meta: serde_json::Value,
}

pub fn write_checkpoint<W: Write>(mut out: W, state: &TrainState, meta: serde_json::Value) -> Result<()> {
    writeln!(out, "{CHECKPOINT_MAGIC}")?;
    let file = CheckpointFile { version: CHECKPOINT_MAGIC.into(), arch: state.params.arch, state: state.clone(), meta };
    serde_json::to_writer(&mut out, &file)?;
    out.flush()?;
    Ok(())
}

pub fn read_checkpoint<R: Read>(input: R) -> Result<(TrainState, serde_json::Value)> {
    let mut reader = BufReader::new(input);
    let mut magic = String::new();
    reader.read_line(&mut magic)?;
    if magic.trim_end() != CHECKPOINT_MAGIC {
        return Err(Error::Version(format!("expected magic {CHECKPOINT_MAGIC}, found {:?}", magic.trim_end())));
    }
    let file: CheckpointFile = serde_json::from_reader(reader)?;
    if file.version != CHECKPOINT_MAGIC {
        return Err(Error::Version(format!("unsupported checkpoint version {}", file.version)));
    }
    if file.arch != file.state.params.arch {
        return Err(Error::Version("architecture header disagrees with stored tensors".into()));
    }
    Ok((file.state, file.meta))
}

pub fn save_checkpoint(path: &Path, state: &TrainState, meta: serde_json::Value) -> Result<()> {
    let mut buf = Vec::new();
    write_checkpoint(&mut buf, state, meta)?;
    crate::write_atomic(path, &buf)
}

pub fn load_checkpoint(path: &Path) -> Result<(TrainState, serde_json::Value)> {
    let file = std::fs::File::open(path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => Error::MissingPath(path.to_path_buf()),
        _ => Error::Io(e),
    })?;
    read_checkpoint(file)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn config_defaults_follow_experimental_setup() {
        let cfg = TrainConfig::default();
        assert_eq!(cfg.episodes, 10_000);
        assert_eq!(cfg.learning_rate, 0.001);
        assert_eq!((cfg.shots, cfg.queries), (1, 19));
        assert_eq!(cfg.episode_shape(16).samples(), 320);
        assert_eq!(cfg.align_size(cfg.episode_shape(16)), 320);
    }

    #[test]
    fn config_validation() {
        let bad = TrainConfig { episodes: 0, ..TrainConfig::default() };
        assert!(matches!(bad.validate(), Err(Error::Config(_))));
        let bad = TrainConfig { learning_rate: -1.0, ..TrainConfig::default() };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn checkpoint_rejects_wrong_magic() {
        let err = read_checkpoint(&b"PSFT0\n{}"[..]).unwrap_err();
        assert!(matches!(err, Error::Version(_)));
    }
}
