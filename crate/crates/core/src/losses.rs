//! Episode objectives: prototypes, distance softmax, the prototypical loss,
//! the query-prototype contrastive terms and multi-kernel MMD, each with an
//! exact gradient with respect to its feature inputs.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::network::{sigmoid, softplus, Domain};
use crate::tensor::Matrix;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DistanceMode {
    Euclidean,
    SquaredEuclidean,
}

/// Class prototypes, row `c` for episode class `c`.
#[derive(Debug, Clone, PartialEq)]
pub struct Prototypes {
    pub matrix: Matrix,
}

impl Prototypes {
    pub fn classes(&self) -> usize {
        self.matrix.rows()
    }
}

/// Per-class mean of the support features.
pub fn compute_prototypes(support: &Matrix, labels: &[usize], classes: usize) -> Result<Prototypes> {
    if labels.len() != support.rows() {
        return Err(Error::Shape(format!("{} support rows but {} labels", support.rows(), labels.len())));
    }
    let mut sums = Matrix::zeros(classes, support.cols());
    let mut counts = vec![0usize; classes];
    for (r, &l) in labels.iter().enumerate() {
        if l >= classes {
            return Err(Error::Shape(format!("label {l} outside 0..{classes}")));
        }
        counts[l] += 1;
        for (s, v) in sums.row_mut(l).iter_mut().zip(support.row(r)) {
            *s += v;
        }
    }
    for (c, &n) in counts.iter().enumerate() {
        if n == 0 {
            return Err(Error::MissingClass(c));
        }
        sums.row_mut(c).iter_mut().for_each(|v| *v /= n as f64);
    }
    Ok(Prototypes { matrix: sums })
}

/// Chain rule through [`compute_prototypes`].
pub fn prototypes_backward(d_protos: &Matrix, labels: &[usize]) -> Matrix {
    let mut counts = vec![0usize; d_protos.rows()];
    for &l in labels {
        counts[l] += 1;
    }
    let mut out = Matrix::zeros(labels.len(), d_protos.cols());
    for (r, &l) in labels.iter().enumerate() {
        let k = 1.0 / counts[l] as f64;
        for (o, g) in out.row_mut(r).iter_mut().zip(d_protos.row(l)) {
            *o = g * k;
        }
    }
    out
}

/// `(n, C)` matrix of distances between rows of `a` and rows of `b`.
pub fn pairwise_distance(a: &Matrix, b: &Matrix, mode: DistanceMode) -> Result<Matrix> {
    if a.cols() != b.cols() {
        return Err(Error::Shape(format!("feature dimension mismatch: {} vs {}", a.cols(), b.cols())));
    }
    let mut out = Matrix::zeros(a.rows(), b.rows());
    for i in 0..a.rows() {
        for j in 0..b.rows() {
            let sq: f64 = a.row(i).iter().zip(b.row(j)).map(|(x, y)| (x - y) * (x - y)).sum();
            out.set(
                i,
                j,
                match mode {
                    DistanceMode::SquaredEuclidean => sq,
                    DistanceMode::Euclidean => sq.sqrt(),
                },
            );
        }
    }
    Ok(out)
}

/// Back-propagates `d_dist` through [`pairwise_distance`], accumulating into
/// `da` and `db`.
fn distance_backward(
    a: &Matrix,
    b: &Matrix,
    dist: &Matrix,
    d_dist: &Matrix,
    mode: DistanceMode,
    da: &mut Matrix,
    db: &mut Matrix,
) {
    for i in 0..a.rows() {
        for j in 0..b.rows() {
            let g = d_dist.get(i, j);
            if g == 0.0 {
                continue;
            }
            let k = match mode {
                DistanceMode::SquaredEuclidean => 2.0 * g,
                DistanceMode::Euclidean => {
                    let d = dist.get(i, j);
                    if d > 0.0 {
                        g / d
                    } else {
                        0.0
                    }
                }
            };
            let cols = a.cols();
            for c in 0..cols {
                let diff = a.get(i, c) - b.get(j, c);
                da.data_mut()[i * cols + c] += k * diff;
                db.data_mut()[j * cols + c] -= k * diff;
            }
        }
    }
}

/// Row-wise softmax of the negated distances.
pub fn query_probabilities(distances: &Matrix) -> Matrix {
    let mut out = distances.clone();
    for r in 0..out.rows() {
        let row = out.row_mut(r);
        let best = row.iter().cloned().fold(f64::INFINITY, f64::min);
        let mut total = 0.0;
        for v in row.iter_mut() {
            *v = (best - *v).exp();
            total += *v;
        }
        row.iter_mut().for_each(|v| *v /= total);
    }
    out
}

/// Index of the smallest entry, ties broken toward the lowest index.
pub fn argmin_row(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v < row[best] {
            best = i;
        }
    }
    best
}

fn check_labels(labels: &[usize], rows: usize, classes: usize) -> Result<()> {
    if labels.len() != rows {
        return Err(Error::Shape(format!("{rows} query rows but {} labels", labels.len())));
    }
    if let Some(&l) = labels.iter().find(|&&l| l >= classes) {
        return Err(Error::Shape(format!("query label {l} outside 0..{classes}")));
    }
    Ok(())
}

/// Value and gradient with respect to the distance matrix.
struct DistanceLoss {
    value: f64,
    d_dist: Matrix,
}

fn fsl_on_distances(dist: &Matrix, labels: &[usize]) -> DistanceLoss {
    let n = dist.rows() as f64;
    let probs = query_probabilities(dist);
    let mut value = 0.0;
    let mut d_dist = Matrix::zeros(dist.rows(), dist.cols());
    for (q, &y) in labels.iter().enumerate() {
        // -log p_y = d_y + log sum_c exp(-d_c), computed with the row minimum shifted out
        let row = dist.row(q);
        let best = row.iter().cloned().fold(f64::INFINITY, f64::min);
        let lse = row.iter().map(|d| (best - d).exp()).sum::<f64>().ln() - best;
        value += row[y] + lse;
        for c in 0..dist.cols() {
            let indicator = if c == y { 1.0 } else { 0.0 };
            d_dist.set(q, c, (indicator - probs.get(q, c)) / n);
        }
    }
    DistanceLoss { value: value / n, d_dist }
}

fn inter_on_distances(dist: &Matrix, labels: &[usize]) -> Result<DistanceLoss> {
    let classes = dist.cols();
    if classes < 2 {
        return Err(Error::Config("the inter-class contrastive term needs C >= 2".into()));
    }
    let norm = ((classes - 1) * dist.rows()) as f64;
    let mut value = 0.0;
    let mut d_dist = Matrix::zeros(dist.rows(), classes);
    for (q, &y) in labels.iter().enumerate() {
        for j in (0..classes).filter(|&j| j != y) {
            let d = dist.get(q, j);
            value += softplus(-d);
            d_dist.set(q, j, -sigmoid(-d) / norm);
        }
    }
    Ok(DistanceLoss { value: value / norm, d_dist })
}

fn intra_on_distances(dist: &Matrix, labels: &[usize]) -> DistanceLoss {
    let norm = dist.rows() as f64;
    let mut value = 0.0;
    let mut d_dist = Matrix::zeros(dist.rows(), dist.cols());
    for (q, &y) in labels.iter().enumerate() {
        let d = dist.get(q, y);
        value += softplus(d);
        d_dist.set(q, y, sigmoid(d) / norm);
    }
    DistanceLoss { value: value / norm, d_dist }
}

/// A loss value with gradients for the query features and the prototypes.
#[derive(Debug, Clone)]
pub struct QueryLossGrad {
    pub value: f64,
    pub d_query: Matrix,
    pub d_protos: Matrix,
}

fn with_grad(
    query: &Matrix,
    protos: &Prototypes,
    dist: &Matrix,
    mode: DistanceMode,
    loss: DistanceLoss,
) -> QueryLossGrad {
    let mut d_query = Matrix::zeros(query.rows(), query.cols());
    let mut d_protos = Matrix::zeros(protos.matrix.rows(), protos.matrix.cols());
    distance_backward(query, &protos.matrix, dist, &loss.d_dist, mode, &mut d_query, &mut d_protos);
    QueryLossGrad { value: loss.value, d_query, d_protos }
}

/// Mean negative log-probability of the true class over the query set.
pub fn fsl_loss(query: &Matrix, labels: &[usize], protos: &Prototypes, mode: DistanceMode) -> Result<f64> {
    Ok(fsl_loss_grad(query, labels, protos, mode)?.value)
}

pub fn fsl_loss_grad(
    query: &Matrix,
    labels: &[usize],
    protos: &Prototypes,
    mode: DistanceMode,
) -> Result<QueryLossGrad> {
    check_labels(labels, query.rows(), protos.classes())?;
    let dist = pairwise_distance(query, &protos.matrix, mode)?;
    let loss = fsl_on_distances(&dist, labels);
    Ok(with_grad(query, protos, &dist, mode, loss))
}

/// Mean softplus of the negated query-to-negative-prototype distances over
/// every ordered (class, other class, query) triple.
pub fn qpl_inter(query: &Matrix, labels: &[usize], protos: &Prototypes, mode: DistanceMode) -> Result<f64> {
    Ok(qpl_inter_grad(query, labels, protos, mode)?.value)
}

pub fn qpl_inter_grad(
    query: &Matrix,
    labels: &[usize],
    protos: &Prototypes,
    mode: DistanceMode,
) -> Result<QueryLossGrad> {
    check_labels(labels, query.rows(), protos.classes())?;
    let dist = pairwise_distance(query, &protos.matrix, mode)?;
    let loss = inter_on_distances(&dist, labels)?;
    Ok(with_grad(query, protos, &dist, mode, loss))
}

/// Mean softplus of the query-to-own-prototype distance; bounded below by ln 2.
pub fn qpl_intra(query: &Matrix, labels: &[usize], protos: &Prototypes, mode: DistanceMode) -> Result<f64> {
    Ok(qpl_intra_grad(query, labels, protos, mode)?.value)
}

pub fn qpl_intra_grad(
    query: &Matrix,
    labels: &[usize],
    protos: &Prototypes,
    mode: DistanceMode,
) -> Result<QueryLossGrad> {
    check_labels(labels, query.rows(), protos.classes())?;
    let dist = pairwise_distance(query, &protos.matrix, mode)?;
    let loss = intra_on_distances(&dist, labels);
    Ok(with_grad(query, protos, &dist, mode, loss))
}

pub fn qpl_total(inter: f64, intra: f64) -> f64 {
    inter + intra
}

pub fn domain_total(fsl: f64, qpl: f64, mmd: f64) -> f64 {
    fsl + qpl + mmd
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KernelConfig {
    /// Multipliers applied to the base bandwidth; one Gaussian per entry.
    pub scales: Vec<f64>,
    /// Fixed base bandwidth; `None` uses the median pairwise squared distance.
    pub bandwidth: Option<f64>,
}

impl Default for KernelConfig {
    fn default() -> Self {
        Self { scales: vec![0.25, 0.5, 1.0, 2.0, 4.0], bandwidth: None }
    }
}

impl KernelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.scales.is_empty() {
            return Err(Error::Config("mmd_scales needs at least one scale".into()));
        }
        if let Some(s) = self.scales.iter().find(|s| !(**s > 0.0 && s.is_finite())) {
            return Err(Error::Config(format!("mmd scale {s} must be positive")));
        }
        if let Some(b) = self.bandwidth {
            if !(b > 0.0 && b.is_finite()) {
                return Err(Error::Config(format!("mmd_bandwidth {b} must be positive")));
            }
        }
        Ok(())
    }
}

/// Median of the pairwise squared distances, with the pair indices that
/// determine it (one pair for an odd count, two for an even count).
fn median_bandwidth(sq: &Matrix) -> (f64, Vec<(usize, usize)>) {
    let n = sq.rows();
    let mut pairs: Vec<(f64, usize, usize)> = Vec::with_capacity(n * (n - 1) / 2);
    for i in 0..n {
        for j in i + 1..n {
            pairs.push((sq.get(i, j), i, j));
        }
    }
    if pairs.is_empty() {
        return (1.0, Vec::new());
    }
    pairs.sort_by(|a, b| a.0.total_cmp(&b.0));
    let m = pairs.len();
    let picked: Vec<(f64, usize, usize)> =
        if m % 2 == 1 { vec![pairs[m / 2]] } else { vec![pairs[m / 2 - 1], pairs[m / 2]] };
    let median = picked.iter().map(|p| p.0).sum::<f64>() / picked.len() as f64;
    if median > 0.0 {
        (median, picked.into_iter().map(|(_, i, j)| (i, j)).collect())
    } else {
        (1.0, Vec::new())
    }
}

fn sorted_sum(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    v.iter().sum()
}

#[derive(Debug, Clone)]
pub struct MmdGrad {
    pub value: f64,
    pub bandwidth: f64,
    pub d_a: Matrix,
    pub d_b: Matrix,
}

/// Biased multi-kernel MMD estimate between two feature batches.
pub fn mmd_loss(a: &Matrix, b: &Matrix, kernel: &KernelConfig) -> Result<f64> {
    Ok(mmd_loss_grad(a, b, kernel)?.value)
}

pub fn mmd_loss_grad(a: &Matrix, b: &Matrix, kernel: &KernelConfig) -> Result<MmdGrad> {
    kernel.validate()?;
    if a.rows() == 0 || b.rows() == 0 {
        return Err(Error::Config("MMD needs two non-empty batches".into()));
    }
    if a.cols() != b.cols() {
        return Err(Error::Shape(format!("MMD batches have dimensions {} and {}", a.cols(), b.cols())));
    }
    let (na, nb) = (a.rows(), b.rows());
    let z = a.vstack(b)?;
    let n = z.rows();
    let sq = pairwise_distance(&z, &z, DistanceMode::SquaredEuclidean)?;
    let (base, median_pairs) = match kernel.bandwidth {
        Some(bw) => (bw, Vec::new()),
        None => median_bandwidth(&sq),
    };
    let weight = |i: usize, j: usize| match (i < na, j < na) {
        (true, true) => 1.0 / (na * na) as f64,
        (false, false) => 1.0 / (nb * nb) as f64,
        _ => -1.0 / (na * nb) as f64,
    };
    // Kernel sums per block, each added in sorted order so the estimate is
    // exactly symmetric in (a, b) and invariant to row order.
    let mut blocks: [Vec<f64>; 3] = [Vec::new(), Vec::new(), Vec::new()];
    let mut d_sq = Matrix::zeros(n, n);
    let mut d_base = 0.0;
    for i in 0..n {
        for j in 0..n {
            let w = weight(i, j);
            let d = sq.get(i, j);
            let mut k = 0.0;
            let mut dk_dd = 0.0;
            let mut dk_dbase = 0.0;
            for &s in &kernel.scales {
                let gamma = s * base;
                let e = (-d / gamma).exp();
                k += e;
                dk_dd -= e / gamma;
                dk_dbase += e * d / (gamma * base);
            }
            match (i < na, j < na) {
                (true, true) => blocks[0].push(k),
                (false, false) => blocks[1].push(k),
                (true, false) => blocks[2].push(k),
                (false, true) => {}
            }
            d_sq.set(i, j, w * dk_dd);
            d_base += w * dk_dbase;
        }
    }
    let [saa, sbb, sab] = blocks.map(sorted_sum);
    let value = (saa / (na * na) as f64 + sbb / (nb * nb) as f64) - 2.0 * sab / (na * nb) as f64;
    let share = d_base / median_pairs.len().max(1) as f64;
    for &(i, j) in &median_pairs {
        d_sq.set(i, j, d_sq.get(i, j) + share);
    }
    let mut d_z = Matrix::zeros(n, z.cols());
    let cols = z.cols();
    for i in 0..n {
        for j in 0..n {
            let g = d_sq.get(i, j);
            if g == 0.0 || i == j {
                continue;
            }
            for c in 0..cols {
                let diff = z.get(i, c) - z.get(j, c);
                d_z.data_mut()[i * cols + c] += 2.0 * g * diff;
                d_z.data_mut()[j * cols + c] -= 2.0 * g * diff;
            }
        }
    }
    Ok(MmdGrad { value: value.max(0.0), bandwidth: base, d_a: d_z.slice_rows(0, na), d_b: d_z.slice_rows(na, n) })
}

/// Per-step loss terms. Disabled terms are reported as exactly zero.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub domain: Domain,
    pub fsl: f64,
    pub qpl_inter: f64,
    pub qpl_intra: f64,
    pub mmd: f64,
    pub total: f64,
}

impl LossBreakdown {
    pub fn compose(domain: Domain, fsl: f64, qpl_inter: f64, qpl_intra: f64, mmd: f64) -> Self {
        Self { domain, fsl, qpl_inter, qpl_intra, mmd, total: domain_total(fsl, qpl_total(qpl_inter, qpl_intra), mmd) }
    }

    pub fn is_finite(&self) -> bool {
        [self.fsl, self.qpl_inter, self.qpl_intra, self.mmd, self.total].iter().all(|v| v.is_finite())
    }
}

/// Which terms of the episode objective are summed.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ObjectiveTerms {
    pub fsl: bool,
    pub qpl_inter: bool,
    pub qpl_intra: bool,
    pub mmd: bool,
}

impl ObjectiveTerms {
    pub const ALL: Self = Self { fsl: true, qpl_inter: true, qpl_intra: true, mmd: true };
    pub const NONE: Self = Self { fsl: false, qpl_inter: false, qpl_intra: false, mmd: false };

    pub fn with_switches(use_qpl: bool, use_mmd: bool) -> Self {
        Self { fsl: true, qpl_inter: use_qpl, qpl_intra: use_qpl, mmd: use_mmd }
    }
}

/// Episode features laid out support rows first, then query rows.
pub struct EpisodeFeatures<'a> {
    pub features: &'a Matrix,
    pub support_labels: &'a [usize],
    pub query_labels: &'a [usize],
    pub classes: usize,
}

pub struct ObjectiveGrad {
    pub breakdown: LossBreakdown,
    pub d_episode: Matrix,
    pub d_align: Option<Matrix>,
}

/// Total loss of one episode step with gradients for the episode features
/// and (when MMD is on) the alignment features.
pub fn episode_objective(
    domain: Domain,
    episode: &EpisodeFeatures<'_>,
    align: Option<&Matrix>,
    terms: ObjectiveTerms,
    mode: DistanceMode,
    kernel: &KernelConfig,
) -> Result<ObjectiveGrad> {
    let n_support = episode.support_labels.len();
    let n = episode.features.rows();
    if n != n_support + episode.query_labels.len() {
        return Err(Error::Shape(format!(
            "{n} episode rows for {} support + {} query labels",
            n_support,
            episode.query_labels.len()
        )));
    }
    let support = episode.features.slice_rows(0, n_support);
    let query = episode.features.slice_rows(n_support, n);
    let protos = compute_prototypes(&support, episode.support_labels, episode.classes)?;
    check_labels(episode.query_labels, query.rows(), episode.classes)?;
    let dist = pairwise_distance(&query, &protos.matrix, mode)?;

    let mut d_dist = Matrix::zeros(dist.rows(), dist.cols());
    let mut add = |loss: &DistanceLoss| {
        for (a, b) in d_dist.data_mut().iter_mut().zip(loss.d_dist.data()) {
            *a += b;
        }
    };
    let mut fsl = 0.0;
    let (mut inter, mut intra) = (0.0, 0.0);
    if terms.fsl {
        let l = fsl_on_distances(&dist, episode.query_labels);
        fsl = l.value;
        add(&l);
    }
    if terms.qpl_inter {
        let l = inter_on_distances(&dist, episode.query_labels)?;
        inter = l.value;
        add(&l);
    }
    if terms.qpl_intra {
        let l = intra_on_distances(&dist, episode.query_labels);
        intra = l.value;
        add(&l);
    }
    let mut d_query = Matrix::zeros(query.rows(), query.cols());
    let mut d_protos = Matrix::zeros(protos.classes(), query.cols());
    distance_backward(&query, &protos.matrix, &dist, &d_dist, mode, &mut d_query, &mut d_protos);
    let d_support = prototypes_backward(&d_protos, episode.support_labels);
    let mut d_episode = d_support.vstack(&d_query)?;

    let mut mmd = 0.0;
    let mut d_align = None;
    if terms.mmd {
        let align = align.ok_or_else(|| Error::Config("MMD term enabled without an alignment batch".into()))?;
        let g = mmd_loss_grad(episode.features, align, kernel)?;
        mmd = g.value;
        for (a, b) in d_episode.data_mut().iter_mut().zip(g.d_a.data()) {
            *a += b;
        }
        d_align = Some(g.d_b);
    }
    Ok(ObjectiveGrad { breakdown: LossBreakdown::compose(domain, fsl, inter, intra, mmd), d_episode, d_align })
}
