//! Nearest-prototype inference, OA/AA/Kappa, repeated runs and ablations.

use std::fmt::Write as _;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::hsi_data::{
    apply_fixed_split, augment_pool, prepare_source, prepare_target, HsiCube, LabelMap, Patch, SampleSet,
};
use crate::losses::{argmin_row, compute_prototypes, pairwise_distance, Prototypes};
use crate::network::{ArchConfig, Domain, NetworkParams};
use crate::tensor::Matrix;
use crate::training::{train_from, TrainConfig, TrainHistory, TrainState};

/// Rows are true classes, columns predicted classes.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    classes: usize,
    counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(classes: usize) -> Self {
        Self { classes, counts: vec![0; classes * classes] }
    }

    pub fn from_rows(rows: &[Vec<u64>]) -> Result<Self> {
        let classes = rows.len();
        if rows.iter().any(|r| r.len() != classes) {
            return Err(Error::Shape("confusion matrix must be square".into()));
        }
        Ok(Self { classes, counts: rows.iter().flatten().copied().collect() })
    }

    pub fn from_predictions(truth: &[usize], predicted: &[usize], classes: usize) -> Result<Self> {
        if truth.len() != predicted.len() {
            return Err(Error::Shape(format!("{} labels but {} predictions", truth.len(), predicted.len())));
        }
        let mut cm = Self::new(classes);
        for (&t, &p) in truth.iter().zip(predicted) {
            if t >= classes || p >= classes {
                return Err(Error::Shape(format!("label {} out of range for {classes} classes", t.max(p))));
            }
            cm.counts[t * classes + p] += 1;
        }
        Ok(cm)
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn get(&self, truth: usize, predicted: usize) -> u64 {
        self.counts[truth * self.classes + predicted]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn row_sums(&self) -> Vec<u64> {
        (0..self.classes).map(|r| (0..self.classes).map(|c| self.get(r, c)).sum()).collect()
    }

    pub fn col_sums(&self) -> Vec<u64> {
        (0..self.classes).map(|c| (0..self.classes).map(|r| self.get(r, c)).sum()).collect()
    }

    pub fn rows(&self) -> Vec<Vec<u64>> {
        self.counts.chunks(self.classes.max(1)).map(<[u64]>::to_vec).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub oa: f64,
    pub aa: f64,
    pub kappa: f64,
    /// Recall per class; `None` for classes without test support.
    pub per_class: Vec<Option<f64>>,
}

impl Metrics {
    /// Classes left out of AA for lack of test samples.
    pub fn excluded_classes(&self) -> Vec<usize> {
        self.per_class.iter().enumerate().filter(|(_, a)| a.is_none()).map(|(i, _)| i).collect()
    }
}

/// OA, AA and Cohen's kappa. When chance agreement is 1, kappa is 1 if
/// the agreement is perfect and 0 otherwise.
pub fn metrics(cm: &ConfusionMatrix) -> Result<Metrics> {
    let total = cm.total();
    if total == 0 {
        return Err(Error::Config("metrics of an empty confusion matrix".into()));
    }
    let n = total as f64;
    let rows = cm.row_sums();
    let cols = cm.col_sums();
    let trace: u64 = (0..cm.classes).map(|c| cm.get(c, c)).sum();
    let oa = trace as f64 / n;
    let per_class: Vec<Option<f64>> =
        (0..cm.classes).map(|c| (rows[c] > 0).then(|| cm.get(c, c) as f64 / rows[c] as f64)).collect();
    let supported: Vec<f64> = per_class.iter().flatten().copied().collect();
    let aa = supported.iter().sum::<f64>() / supported.len() as f64;
    let pe = rows.iter().zip(&cols).map(|(&r, &c)| r as f64 * c as f64).sum::<f64>() / (n * n);
    let kappa = if pe >= 1.0 {
        if trace == total {
            1.0
        } else {
            0.0
        }
    } else {
        (oa - pe) / (1.0 - pe)
    };
    Ok(Metrics { oa, aa, kappa, per_class })
}

/// Which labeled pool the inference prototypes are averaged from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EvalPrototypes {
    Originals,
    Augmented,
}

impl std::str::FromStr for EvalPrototypes {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "originals" => Ok(Self::Originals),
            "augmented" => Ok(Self::Augmented),
            _ => Err(Error::Config(format!("eval_prototypes must be originals|augmented, got {s:?}"))),
        }
    }
}

const EVAL_CHUNK: usize = 256;

/// Per-class mean of eval-mode target features, in `class_ids` order.
pub fn build_eval_prototypes(params: &NetworkParams, labeled: &SampleSet, class_ids: &[u16]) -> Result<Prototypes> {
    let mut patches: Vec<&Patch> = Vec::new();
    let mut labels = Vec::new();
    for (i, &class) in class_ids.iter().enumerate() {
        let group = labeled.group(class).filter(|g| !g.is_empty()).ok_or(Error::MissingClass(class as usize))?;
        patches.extend(group.iter());
        labels.extend(std::iter::repeat(i).take(group.len()));
    }
    let features = params.embed_eval(&patches, Domain::Target, EVAL_CHUNK)?;
    compute_prototypes(&features, &labels, class_ids.len())
}

/// Index of the nearest prototype for every patch; ties go to the lower index.
pub fn predict(params: &NetworkParams, prototypes: &Prototypes, patches: &[&Patch]) -> Result<Vec<usize>> {
    let mut out = Vec::with_capacity(patches.len());
    for chunk in patches.chunks(EVAL_CHUNK) {
        let features = params.embed_eval(chunk, Domain::Target, EVAL_CHUNK)?;
        out.extend(predict_features(&features, prototypes, params.arch)?);
    }
    Ok(out)
}

pub fn predict_features(features: &Matrix, prototypes: &Prototypes, arch: ArchConfig) -> Result<Vec<usize>> {
    let d = pairwise_distance(features, &prototypes.matrix, arch.distance)?;
    Ok((0..d.rows()).map(|r| argmin_row(d.row(r))).collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub metrics: Metrics,
    pub confusion: ConfusionMatrix,
    /// Scene class id of each confusion-matrix row.
    pub class_ids: Vec<u16>,
}

/// Classifies every test patch against prototypes from `labeled`. Classes
/// are the union of both pools; every one needs labeled samples.
pub fn evaluate(params: &NetworkParams, labeled: &SampleSet, test: &SampleSet) -> Result<Evaluation> {
    let mut class_ids = labeled.class_ids();
    class_ids.extend(test.class_ids());
    class_ids.sort_unstable();
    class_ids.dedup();
    let prototypes = build_eval_prototypes(params, labeled, &class_ids)?;
    let mut patches = Vec::with_capacity(test.len());
    let mut truth = Vec::with_capacity(test.len());
    for (i, &class) in class_ids.iter().enumerate() {
        for p in test.group(class).unwrap_or(&[]) {
            patches.push(p);
            truth.push(i);
        }
    }
    let predicted = predict(params, &prototypes, &patches)?;
    let confusion = ConfusionMatrix::from_predictions(&truth, &predicted, class_ids.len())?;
    Ok(Evaluation { metrics: metrics(&confusion)?, confusion, class_ids })
}

/// A scene and its label map, already normalized.
#[derive(Debug, Clone)]
pub struct Scene {
    pub cube: HsiCube,
    pub labels: LabelMap,
    /// Fixed test mask; when present, `labels` acts as the training mask.
    pub test_mask: Option<LabelMap>,
}

#[derive(Debug, Clone)]
pub struct Datasets {
    pub name: String,
    pub source: Scene,
    pub target: Scene,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DataConfig {
    pub patch_size: usize,
    pub source_min_class: usize,
    pub source_per_class: usize,
    /// Labeled target samples per class (L).
    pub labeled_per_class: usize,
    pub augment_to: usize,
    pub noise_scale: f64,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            patch_size: 9,
            source_min_class: 200,
            source_per_class: 200,
            labeled_per_class: 5,
            augment_to: 200,
            noise_scale: 0.1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineConfig {
    pub arch: ArchConfig,
    pub train: TrainConfig,
    pub data: DataConfig,
    pub eval_prototypes: EvalPrototypes,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            arch: ArchConfig::default(),
            train: TrainConfig::default(),
            data: DataConfig::default(),
            eval_prototypes: EvalPrototypes::Originals,
        }
    }
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<()> {
        self.arch.validate()?;
        self.train.validate()?;
        if self.data.patch_size != self.arch.patch_size {
            return Err(Error::Config(format!(
                "patch_size {} disagrees with the architecture's {}",
                self.data.patch_size, self.arch.patch_size
            )));
        }
        if self.data.labeled_per_class == 0 {
            return Err(Error::Config("labeled_per_class must be >= 1".into()));
        }
        Ok(())
    }
}

/// Sampled pools for one run.
#[derive(Debug, Clone)]
pub struct RunPools {
    pub source: SampleSet,
    pub labeled: SampleSet,
    pub augmented: SampleSet,
    pub test: SampleSet,
}

pub fn sample_pools<R: Rng + ?Sized>(data: &Datasets, cfg: &DataConfig, rng: &mut R) -> Result<RunPools> {
    let source = prepare_source(
        &data.source.cube,
        &data.source.labels,
        cfg.patch_size,
        cfg.source_min_class,
        cfg.source_per_class,
        rng,
    )?;
    let t = &data.target;
    let (labeled, augmented, test) = match &t.test_mask {
        Some(mask) => {
            let (labeled, test) =
                apply_fixed_split(&t.cube, &t.labels, mask, cfg.patch_size, cfg.labeled_per_class, rng)?;
            let augmented = augment_pool(&labeled, cfg.augment_to, cfg.noise_scale, rng)?;
            (labeled, augmented, test)
        }
        None => {
            let p = prepare_target(
                &t.cube,
                &t.labels,
                cfg.patch_size,
                cfg.labeled_per_class,
                cfg.augment_to,
                cfg.noise_scale,
                rng,
            )?;
            (p.labeled, p.augmented, p.test)
        }
    };
    Ok(RunPools { source, labeled, augmented, test })
}

#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub seed: u64,
    pub evaluation: Evaluation,
    pub history: TrainHistory,
    pub params: NetworkParams,
}

/// Samples the pools and initializes the training state for run `seed`.
pub fn prepare_run(data: &Datasets, cfg: &PipelineConfig, seed: u64) -> Result<(RunPools, TrainState)> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let pools = sample_pools(data, &cfg.data, &mut rng)?;
    let train_seed: u64 = rng.gen();
    let state = TrainState::new(cfg.arch, data.source.cube.bands(), data.target.cube.bands(), &cfg.train, train_seed)?;
    Ok((pools, state))
}

/// Evaluates `params` on the run's test pool with the configured prototype source.
pub fn evaluate_run(params: &NetworkParams, pools: &RunPools, cfg: &PipelineConfig) -> Result<Evaluation> {
    let proto_pool = match cfg.eval_prototypes {
        EvalPrototypes::Originals => &pools.labeled,
        EvalPrototypes::Augmented => &pools.augmented,
    };
    evaluate(params, proto_pool, &pools.test)
}

/// Target sampling, training from scratch and prediction, all from `seed`.
pub fn run_pipeline(data: &Datasets, cfg: &PipelineConfig, seed: u64) -> Result<RunOutcome> {
    let (pools, mut state) = prepare_run(data, cfg, seed)?;
    let history = train_from(&mut state, &pools.source, &pools.augmented, &cfg.train, None)?;
    let evaluation = evaluate_run(&state.params, &pools, cfg)?;
    Ok(RunOutcome { seed, evaluation, history, params: state.params })
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Seed of run `r`: `splitmix64(master ^ splitmix64(r))`.
pub fn derive_seed(master: u64, run: usize) -> u64 {
    splitmix64(master ^ splitmix64(run as u64))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunMetrics {
    pub run: usize,
    pub seed: u64,
    pub metrics: Metrics,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub mean: f64,
    /// Sample standard deviation; 0 for a single run.
    pub std: f64,
}

impl Summary {
    pub fn of(values: &[f64]) -> Self {
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let std = if values.len() < 2 {
            0.0
        } else {
            (values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0)).sqrt()
        };
        Self { mean, std }
    }

    /// Percent with two decimals, e.g. `81.20±1.05`.
    pub fn percent(&self) -> String {
        format!("{:.2}±{:.2}", self.mean * 100.0, self.std * 100.0)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub dataset: String,
    pub runs: Vec<RunMetrics>,
}

impl MetricsReport {
    fn summary(&self, f: impl Fn(&Metrics) -> f64) -> Summary {
        Summary::of(&self.runs.iter().map(|r| f(&r.metrics)).collect::<Vec<_>>())
    }

    pub fn oa(&self) -> Summary {
        self.summary(|m| m.oa)
    }

    pub fn aa(&self) -> Summary {
        self.summary(|m| m.aa)
    }

    pub fn kappa(&self) -> Summary {
        self.summary(|m| m.kappa)
    }

    /// Per-class accuracy summaries over the runs in which the class had support.
    pub fn per_class(&self) -> Vec<Option<Summary>> {
        let classes = self.runs.first().map_or(0, |r| r.metrics.per_class.len());
        (0..classes)
            .map(|c| {
                let vals: Vec<f64> =
                    self.runs.iter().filter_map(|r| r.metrics.per_class.get(c).copied().flatten()).collect();
                (!vals.is_empty()).then(|| Summary::of(&vals))
            })
            .collect()
    }

    /// Human-readable table with OA, AA and Kappa rows.
    pub fn table(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "{:<10} {:<8} {}", "dataset", "metric", "mean±std");
        for (name, sum) in [("OA", self.oa()), ("AA", self.aa()), ("Kappa", self.kappa())] {
            let _ = writeln!(s, "{:<10} {:<8} {}", self.dataset, name, sum.percent());
        }
        for (c, sum) in self.per_class().iter().enumerate() {
            match sum {
                Some(sum) => {
                    let _ = writeln!(s, "{:<10} {:<8} {}", self.dataset, format!("class{}", c + 1), sum.percent());
                }
                None => {
                    let _ = writeln!(
                        s,
                        "{:<10} {:<8} no test support (excluded from AA)",
                        self.dataset,
                        format!("class{}", c + 1)
                    );
                }
            }
        }
        let _ = writeln!(s, "runs: {}", self.runs.len());
        s
    }
}

/// A repeated evaluation stopped by a failing run; earlier runs are kept.
#[derive(Debug)]
pub struct Interrupted {
    pub partial: MetricsReport,
    pub run: usize,
    pub error: Error,
}

impl std::fmt::Display for Interrupted {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "run {} failed after {} completed: {}", self.run, self.partial.runs.len(), self.error)
    }
}

impl std::error::Error for Interrupted {}

/// Runs the full pipeline `runs` times with seeds derived from `master_seed`.
pub fn repeated_eval(
    data: &Datasets,
    cfg: &PipelineConfig,
    runs: usize,
    master_seed: u64,
) -> std::result::Result<MetricsReport, Box<Interrupted>> {
    repeated_eval_with(data, cfg, runs, master_seed, |_| {})
}

/// As [`repeated_eval`], calling `on_run` after each completed run.
pub fn repeated_eval_with(
    data: &Datasets,
    cfg: &PipelineConfig,
    runs: usize,
    master_seed: u64,
    mut on_run: impl FnMut(&RunOutcome),
) -> std::result::Result<MetricsReport, Box<Interrupted>> {
    let mut report = MetricsReport { dataset: data.name.clone(), runs: Vec::new() };
    if runs == 0 {
        return Err(Box::new(Interrupted {
            partial: report,
            run: 0,
            error: Error::Config("runs must be >= 1".into()),
        }));
    }
    for r in 0..runs {
        let seed = derive_seed(master_seed, r);
        match run_pipeline(data, cfg, seed) {
            Ok(outcome) => {
                on_run(&outcome);
                report.runs.push(RunMetrics { run: r, seed, metrics: outcome.evaluation.metrics });
            }
            Err(error) => return Err(Box::new(Interrupted { partial: report, run: r, error })),
        }
    }
    Ok(report)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub use_qpl: bool,
    pub use_mmd: bool,
    pub report: MetricsReport,
}

impl AblationRow {
    pub fn label(&self) -> String {
        let mark = |b: bool| if b { "✓" } else { "×" };
        format!("{}/{}", mark(self.use_qpl), mark(self.use_mmd))
    }
}

pub const ABLATION_SWITCHES: [(bool, bool); 4] = [(false, false), (true, false), (false, true), (true, true)];

/// The four QPL/MMD switch combinations, each with the same run seeds.
pub fn ablation_suite(
    data: &Datasets,
    cfg: &PipelineConfig,
    runs: usize,
    master_seed: u64,
) -> std::result::Result<Vec<AblationRow>, Box<Interrupted>> {
    let mut rows = Vec::with_capacity(4);
    for (use_qpl, use_mmd) in ABLATION_SWITCHES {
        let mut c = cfg.clone();
        c.train.use_qpl = use_qpl;
        c.train.use_mmd = use_mmd;
        let report = repeated_eval(data, &c, runs, master_seed)?;
        rows.push(AblationRow { use_qpl, use_mmd, report });
    }
    Ok(rows)
}

pub fn ablation_table(rows: &[AblationRow]) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "{:<5} {:<5} {}", "QPL", "MMD", rows.first().map_or("OA", |r| r.report.dataset.as_str()));
    for row in rows {
        let mark = |b: bool| if b { "✓" } else { "×" };
        let _ = writeln!(s, "{:<5} {:<5} {}", mark(row.use_qpl), mark(row.use_mmd), row.report.oa().percent());
    }
    s
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub labeled: usize,
    pub oa: Option<Summary>,
    pub error: Option<String>,
}

/// One point per labeled count; failing points carry their error and the
/// sweep moves on.
pub fn labeled_count_sweep(
    data: &Datasets,
    cfg: &PipelineConfig,
    labeled_values: &[usize],
    runs: usize,
    master_seed: u64,
) -> Vec<SweepPoint> {
    labeled_values
        .iter()
        .map(|&l| {
            let mut c = cfg.clone();
            c.data.labeled_per_class = l;
            c.data.augment_to = c.data.augment_to.max(l);
            match repeated_eval(data, &c, runs, master_seed) {
                Ok(report) => SweepPoint { labeled: l, oa: Some(report.oa()), error: None },
                Err(e) => SweepPoint { labeled: l, oa: None, error: Some(e.to_string()) },
            }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hand_computed_two_class_matrix() {
        let cm = ConfusionMatrix::from_rows(&[vec![40, 10], vec![20, 30]]).unwrap();
        let m = metrics(&cm).unwrap();
        assert!((m.oa - 0.7).abs() < 1e-10);
        assert!((m.aa - 0.7).abs() < 1e-10);
        assert!((m.kappa - 0.4).abs() < 1e-10);
    }

    #[test]
    fn degenerate_chance_agreement() {
        let perfect = ConfusionMatrix::from_rows(&[vec![5, 0], vec![0, 0]]).unwrap();
        let m = metrics(&perfect).unwrap();
        assert_eq!(m.kappa, 1.0);
        assert_eq!(m.aa, 1.0);
        assert_eq!(m.excluded_classes(), vec![1]);
    }

    #[test]
    fn empty_matrix_errors() {
        assert!(metrics(&ConfusionMatrix::new(3)).is_err());
    }

    #[test]
    fn single_run_std_is_zero() {
        let s = Summary::of(&[0.6125]);
        assert_eq!(s.percent(), "61.25±0.00");
    }

    #[test]
    fn derived_seeds_are_distinct() {
        let seeds: std::collections::BTreeSet<u64> = (0..100).map(|r| derive_seed(42, r)).collect();
        assert_eq!(seeds.len(), 100);
        assert_eq!(derive_seed(42, 3), derive_seed(42, 3));
    }
}
