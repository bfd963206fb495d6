#![allow(dead_code)]

use hsi_fsl::episodes::{sample_alignment_batch, sample_episode, EpisodeShape};
use hsi_fsl::hsi_data::{Patch, PoolKind, SampleSet};
use hsi_fsl::losses::{episode_objective, DistanceMode, EpisodeFeatures, KernelConfig, ObjectiveTerms};
use hsi_fsl::network::{patches_to_map, Activation, ArchConfig, Domain, Gradients, NetworkParams, SpatialBlock};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

pub fn random_pool(
    kind: PoolKind,
    classes: usize,
    per_class: usize,
    bands: usize,
    size: usize,
    seed: u64,
) -> SampleSet {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut set = SampleSet::new(kind);
    for c in 0..classes {
        let offset: Vec<f32> = (0..bands).map(|_| rng.gen_range(-1.0..1.0)).collect();
        for i in 0..per_class {
            let values = (0..bands * size * size)
                .map(|k| offset[k / (size * size)] + 0.5 * rng.sample::<f32, _>(StandardNormal))
                .collect();
            set.push(Patch { values, bands, size, label: c as u16 + 1, origin: (c, i) });
        }
    }
    set
}

pub fn tiny_arch(distance: DistanceMode) -> ArchConfig {
    ArchConfig {
        mapped_dim: 5,
        branch_width: 6,
        patch_size: 5,
        activation: Activation::Mish,
        spatial_block: SpatialBlock::Asymmetric,
        distance,
    }
}

/// Worst finite-difference disagreement over every scalar parameter.
#[derive(Debug, Clone, Copy, Default)]
pub struct GradReport {
    pub checked: usize,
    pub failures: usize,
    pub worst_rel: f64,
}

pub const FD_STEP: f64 = 1e-5;

fn passes(analytic: f64, numeric: f64) -> (bool, f64) {
    let diff = (analytic - numeric).abs();
    let scale = analytic.abs().max(numeric.abs());
    let rel = if scale > 0.0 { diff / scale } else { 0.0 };
    if scale < 1e-4 {
        (diff < 1e-7 || rel < 1e-4, if diff < 1e-7 { 0.0 } else { rel })
    } else {
        (rel < 1e-4, rel)
    }
}

/// Finite-difference check of one training-mode objective through the tiny
/// network, including the opposite domain's mapping reached by MMD.
pub fn gradient_check(terms: ObjectiveTerms, distance: DistanceMode, domain: Domain, seed: u64) -> GradReport {
    let arch = tiny_arch(distance);
    let (src_bands, tgt_bands) = (4, 4);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let params = NetworkParams::init(arch, src_bands, tgt_bands, &mut rng).unwrap();
    let own = random_pool(PoolKind::Source, 3, 4, 4, 5, seed + 1);
    let other = random_pool(PoolKind::TargetAugmented, 3, 4, 4, 5, seed + 2);
    let shape = EpisodeShape { ways: 2, shots: 1, queries: 2 };
    let episode = sample_episode(&own, shape, &mut rng).unwrap();
    let align = sample_alignment_batch(&other, 6, &mut rng).unwrap();
    let x = patches_to_map(&episode.patches()).unwrap();
    let xa = patches_to_map(&align.patches).unwrap();
    let support = episode.support_labels();
    let query = episode.query_labels();
    let kernel = KernelConfig::default();

    let objective = |p: &NetworkParams, with_grad: bool| -> (f64, Option<Gradients>) {
        let (f, tape) = p.forward_train(&x, domain).unwrap();
        let (fa, tape_a) = p.forward_train(&xa, domain.other()).unwrap();
        let obj = episode_objective(
            domain,
            &EpisodeFeatures { features: &f, support_labels: &support, query_labels: &query, classes: 2 },
            Some(&fa),
            terms,
            distance,
            &kernel,
        )
        .unwrap();
        if !with_grad {
            return (obj.breakdown.total, None);
        }
        let mut g = Gradients::zeros_like(p);
        p.backward(&tape, &obj.d_episode, &mut g);
        if let Some(da) = &obj.d_align {
            p.backward(&tape_a, da, &mut g);
        }
        (obj.breakdown.total, Some(g))
    };

    let (_, grads) = objective(&params, true);
    let grads = grads.unwrap();
    let analytic: Vec<Vec<f64>> = grads.tensors().iter().map(|(_, t)| t.to_vec()).collect();
    let mut report = GradReport::default();
    let mut probe = params.clone();
    for (ti, g_t) in analytic.iter().enumerate() {
        for (i, &g) in g_t.iter().enumerate() {
            let orig = probe.trainable()[ti].1[i];
            probe.trainable_mut()[ti].1[i] = orig + FD_STEP;
            let up = objective(&probe, false).0;
            probe.trainable_mut()[ti].1[i] = orig - FD_STEP;
            let down = objective(&probe, false).0;
            probe.trainable_mut()[ti].1[i] = orig;
            let numeric = (up - down) / (2.0 * FD_STEP);
            let (ok, rel) = passes(g, numeric);
            report.checked += 1;
            report.failures += usize::from(!ok);
            report.worst_rel = report.worst_rel.max(rel);
        }
    }
    report
}

pub fn only(term: &str) -> ObjectiveTerms {
    let mut t = ObjectiveTerms::NONE;
    match term {
        "fsl" => t.fsl = true,
        "qpl_inter" => t.qpl_inter = true,
        "qpl_intra" => t.qpl_intra = true,
        "mmd" => t.mmd = true,
        "domain_total" => t = ObjectiveTerms::ALL,
        _ => panic!("unknown term {term}"),
    }
    t
}

pub const GRAD_TERMS: [&str; 5] = ["fsl", "qpl_inter", "qpl_intra", "mmd", "domain_total"];

// Brute-force loss oracles written directly from the formulas, with no
// shared code paths with the library.

pub fn rand_rows(rng: &mut ChaCha8Rng, n: usize, dim: usize) -> Vec<Vec<f64>> {
    (0..n).map(|_| (0..dim).map(|_| rng.gen_range(-1.0..1.0)).collect()).collect()
}

pub fn oracle_prototypes(support: &[Vec<f64>], labels: &[usize], classes: usize) -> Vec<Vec<f64>> {
    let dim = support[0].len();
    let mut out = vec![vec![0.0; dim]; classes];
    for c in 0..classes {
        let mut count = 0.0;
        for (row, &l) in support.iter().zip(labels) {
            if l == c {
                count += 1.0;
                for d in 0..dim {
                    out[c][d] += row[d];
                }
            }
        }
        for d in 0..dim {
            out[c][d] /= count;
        }
    }
    out
}

pub fn oracle_distance(a: &[f64], b: &[f64], mode: DistanceMode) -> f64 {
    let mut sq = 0.0;
    for i in 0..a.len() {
        sq += (a[i] - b[i]) * (a[i] - b[i]);
    }
    match mode {
        DistanceMode::Euclidean => sq.sqrt(),
        DistanceMode::SquaredEuclidean => sq,
    }
}

pub fn oracle_probabilities(distances: &[f64]) -> Vec<f64> {
    let z: f64 = distances.iter().map(|d| (-d).exp()).sum();
    distances.iter().map(|d| (-d).exp() / z).collect()
}

pub fn oracle_fsl(query: &[Vec<f64>], labels: &[usize], protos: &[Vec<f64>], mode: DistanceMode) -> f64 {
    let mut total = 0.0;
    for (q, &y) in query.iter().zip(labels) {
        let d: Vec<f64> = protos.iter().map(|p| oracle_distance(q, p, mode)).collect();
        total -= oracle_probabilities(&d)[y].ln();
    }
    total / query.len() as f64
}

/// Queries grouped by class: `per_class` consecutive rows for class 0, then class 1, ...
pub fn oracle_inter(query: &[Vec<f64>], protos: &[Vec<f64>], per_class: usize, mode: DistanceMode) -> f64 {
    let c = protos.len();
    let mut total = 0.0;
    for i in 0..c {
        for j in 0..c {
            if i == j {
                continue;
            }
            for k in 0..per_class {
                let d = oracle_distance(&query[i * per_class + k], &protos[j], mode);
                total += (1.0 + (-d).exp()).ln();
            }
        }
    }
    total / ((c - 1) * c * per_class) as f64
}

pub fn oracle_intra(query: &[Vec<f64>], protos: &[Vec<f64>], per_class: usize, mode: DistanceMode) -> f64 {
    let c = protos.len();
    let mut total = 0.0;
    for i in 0..c {
        for k in 0..per_class {
            let d = oracle_distance(&query[i * per_class + k], &protos[i], mode);
            total += (1.0 + d.exp()).ln();
        }
    }
    total / (c * per_class) as f64
}

/// Biased multi-kernel MMD with the median squared-distance bandwidth.
pub fn oracle_mmd(a: &[Vec<f64>], b: &[Vec<f64>], scales: &[f64], bandwidth: Option<f64>) -> f64 {
    let joint: Vec<&Vec<f64>> = a.iter().chain(b).collect();
    let sq = |x: &[f64], y: &[f64]| oracle_distance(x, y, DistanceMode::SquaredEuclidean);
    let base = bandwidth.unwrap_or_else(|| {
        let mut d = Vec::new();
        for i in 0..joint.len() {
            for j in i + 1..joint.len() {
                d.push(sq(joint[i], joint[j]));
            }
        }
        d.sort_by(|x, y| x.partial_cmp(y).unwrap());
        let n = d.len();
        let m = if n == 0 {
            0.0
        } else if n % 2 == 1 {
            d[n / 2]
        } else {
            (d[n / 2 - 1] + d[n / 2]) / 2.0
        };
        if m > 0.0 {
            m
        } else {
            1.0
        }
    });
    let k = |x: &[f64], y: &[f64]| scales.iter().map(|s| (-sq(x, y) / (s * base)).exp()).sum::<f64>();
    let mean = |xs: &[Vec<f64>], ys: &[Vec<f64>]| {
        let mut t = 0.0;
        for x in xs {
            for y in ys {
                t += k(x, y);
            }
        }
        t / (xs.len() * ys.len()) as f64
    };
    (mean(a, a) + mean(b, b) - 2.0 * mean(a, b)).max(0.0)
}

pub fn to_matrix(rows: &[Vec<f64>]) -> hsi_fsl::tensor::Matrix {
    hsi_fsl::tensor::Matrix::from_rows(rows).unwrap()
}

/// One random prototypical instance: support, query (grouped by class) and labels.
pub struct LossInstance {
    pub classes: usize,
    pub shots: usize,
    pub queries: usize,
    pub support: Vec<Vec<f64>>,
    pub support_labels: Vec<usize>,
    pub query: Vec<Vec<f64>>,
    pub query_labels: Vec<usize>,
}

pub fn random_instance(rng: &mut ChaCha8Rng) -> LossInstance {
    let classes = rng.gen_range(2..=4);
    let shots = rng.gen_range(1..=3);
    let queries = rng.gen_range(1..=3);
    let dim = rng.gen_range(1..=8);
    let support = rand_rows(rng, classes * shots, dim);
    let query = rand_rows(rng, classes * queries, dim);
    LossInstance {
        classes,
        shots,
        queries,
        support,
        support_labels: (0..classes * shots).map(|i| i / shots).collect(),
        query,
        query_labels: (0..classes * queries).map(|i| i / queries).collect(),
    }
}

/// Largest library-vs-oracle gap for prototypes/probabilities/fsl, both QPL terms and MMD.
pub fn oracle_gaps(inst: &LossInstance, mode: DistanceMode, rng: &mut ChaCha8Rng) -> [f64; 5] {
    use hsi_fsl::losses::*;
    let protos = compute_prototypes(&to_matrix(&inst.support), &inst.support_labels, inst.classes).unwrap();
    let want_protos = oracle_prototypes(&inst.support, &inst.support_labels, inst.classes);
    let mut g_proto: f64 = 0.0;
    for c in 0..inst.classes {
        for (x, y) in protos.matrix.row(c).iter().zip(&want_protos[c]) {
            g_proto = g_proto.max((x - y).abs());
        }
    }
    let q = to_matrix(&inst.query);
    let dist = pairwise_distance(&q, &protos.matrix, mode).unwrap();
    let probs = query_probabilities(&dist);
    let mut g_prob: f64 = 0.0;
    for (r, qrow) in inst.query.iter().enumerate() {
        let d: Vec<f64> = want_protos.iter().map(|p| oracle_distance(qrow, p, mode)).collect();
        for (x, y) in probs.row(r).iter().zip(oracle_probabilities(&d)) {
            g_prob = g_prob.max((x - y).abs());
        }
    }
    g_prob = g_prob.max(
        (fsl_loss(&q, &inst.query_labels, &protos, mode).unwrap()
            - oracle_fsl(&inst.query, &inst.query_labels, &want_protos, mode))
        .abs(),
    );
    let g_inter = (qpl_inter(&q, &inst.query_labels, &protos, mode).unwrap()
        - oracle_inter(&inst.query, &want_protos, inst.queries, mode))
    .abs();
    let g_intra = (qpl_intra(&q, &inst.query_labels, &protos, mode).unwrap()
        - oracle_intra(&inst.query, &want_protos, inst.queries, mode))
    .abs();
    let dim = inst.support[0].len();
    let na = rng.gen_range(1..=6);
    let nb = rng.gen_range(1..=6);
    let a = rand_rows(rng, na, dim);
    let b = rand_rows(rng, nb, dim);
    let kcfg = KernelConfig::default();
    let fixed = KernelConfig { bandwidth: Some(rng.gen_range(0.5..3.0)), ..KernelConfig::default() };
    let g_mmd =
        (mmd_loss(&to_matrix(&a), &to_matrix(&b), &kcfg).unwrap() - oracle_mmd(&a, &b, &kcfg.scales, None)).abs().max(
            (mmd_loss(&to_matrix(&a), &to_matrix(&b), &fixed).unwrap()
                - oracle_mmd(&a, &b, &fixed.scales, fixed.bandwidth))
            .abs(),
        );
    [g_proto, g_prob, g_inter, g_intra, g_mmd]
}

/// Normalized scenes from a synthetic pair, the way the CLI loads them.
pub fn synth_datasets(spec: &hsi_fsl::synthgen::SynthSpec, seed: u64) -> hsi_fsl::evaluation::Datasets {
    use hsi_fsl::evaluation::{Datasets, Scene};
    use hsi_fsl::hsi_data::{normalize_cube, Normalization};
    let pair = hsi_fsl::synthgen::gen_cross_domain_pair(spec, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
    let scene = |s: hsi_fsl::synthgen::SynthScene| Scene {
        cube: normalize_cube(&s.cube, Normalization::MinMax),
        labels: s.labels,
        test_mask: None,
    };
    Datasets { name: "synthetic".into(), source: scene(pair.source), target: scene(pair.target) }
}

pub fn tiny_spec() -> hsi_fsl::synthgen::SynthSpec {
    hsi_fsl::synthgen::SynthSpec {
        classes: 3,
        bands_source: 8,
        bands_target: 10,
        height: 20,
        width: 20,
        ..Default::default()
    }
}

/// Seconds-scale pipeline over [`tiny_spec`] scenes.
pub fn tiny_pipeline() -> hsi_fsl::evaluation::PipelineConfig {
    use hsi_fsl::evaluation::{DataConfig, EvalPrototypes, PipelineConfig};
    use hsi_fsl::training::TrainConfig;
    PipelineConfig {
        arch: tiny_arch(DistanceMode::SquaredEuclidean),
        train: TrainConfig { episodes: 4, ways: 3, shots: 1, queries: 2, ..TrainConfig::default() },
        data: DataConfig {
            patch_size: 5,
            source_min_class: 20,
            source_per_class: 20,
            labeled_per_class: 3,
            augment_to: 20,
            noise_scale: 0.1,
        },
        eval_prototypes: EvalPrototypes::Originals,
    }
}
