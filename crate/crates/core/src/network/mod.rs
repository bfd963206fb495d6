//! Per-domain mapping layers and the dual-branch residual feature extractor.
//!
//! ```text
//!             ┌ spatial:  3x3 conv-BN-act → [3x1 conv-BN-act → 1x3 conv-BN] + skip → act ┐
//! patch → map ┤                                                                           ├ concat → avg pool → embedding
//!             └ spectral: 1x1 conv-BN-act → 1x1 conv-BN-act → [1x1 … 1x1] + skip → act   ┘
//! ```
//!
//! The mapping layer is a bias-carrying 1x1 convolution from the domain's
//! band count to `mapped_dim`. All convolutions use zero same-padding so the
//! patch grid survives until the final average pool.

mod layers;

use rand::Rng;
use serde::{Deserialize, Serialize};

pub use layers::{mish, sigmoid, softplus, Activation, BatchNorm, BnTape, Conv2d, BN_EPS, BN_MOMENTUM};

use crate::error::{Error, Result};
use crate::hsi_data::{Patch, PoolKind};
use crate::losses::DistanceMode;
use crate::tensor::{FeatureMap, Matrix};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Domain {
    Source,
    Target,
}

impl Domain {
    pub fn other(self) -> Domain {
        match self {
            Domain::Source => Domain::Target,
            Domain::Target => Domain::Source,
        }
    }

    pub fn of_pool(kind: PoolKind) -> Domain {
        match kind {
            PoolKind::Source => Domain::Source,
            _ => Domain::Target,
        }
    }
}

impl std::fmt::Display for Domain {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Domain::Source => "source",
            Domain::Target => "target",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SpatialBlock {
    /// 3x1 followed by 1x3 inside the residual block.
    Asymmetric,
    /// Two 3x3 convolutions.
    Symmetric,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ArchConfig {
    pub mapped_dim: usize,
    pub branch_width: usize,
    pub patch_size: usize,
    pub activation: Activation,
    pub spatial_block: SpatialBlock,
    pub distance: DistanceMode,
}

impl Default for ArchConfig {
    fn default() -> Self {
        Self {
            mapped_dim: 100,
            branch_width: 60,
            patch_size: 9,
            activation: Activation::Mish,
            spatial_block: SpatialBlock::Asymmetric,
            distance: DistanceMode::SquaredEuclidean,
        }
    }
}

impl ArchConfig {
    pub fn fused_dim(&self) -> usize {
        2 * self.branch_width
    }

    pub fn validate(&self) -> Result<()> {
        if self.mapped_dim == 0 {
            return Err(Error::Config("mapped_dim must be >= 1".into()));
        }
        if self.branch_width == 0 {
            return Err(Error::Config("branch_width must be >= 1".into()));
        }
        if self.patch_size == 0 || self.patch_size % 2 == 0 {
            return Err(Error::Config(format!("patch_size must be odd, got {}", self.patch_size)));
        }
        Ok(())
    }

    fn residual_kernels(&self) -> [(usize, usize); 2] {
        match self.spatial_block {
            SpatialBlock::Asymmetric => [(3, 1), (1, 3)],
            SpatialBlock::Symmetric => [(3, 3), (3, 3)],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResidualBlock {
    pub conv1: Conv2d,
    pub bn1: BatchNorm,
    pub conv2: Conv2d,
    pub bn2: BatchNorm,
}

impl ResidualBlock {
    fn init<R: Rng + ?Sized>(width: usize, kernels: [(usize, usize); 2], rng: &mut R) -> Self {
        Self {
            conv1: Conv2d::init(width, width, kernels[0], rng),
            bn1: BatchNorm::new(width),
            conv2: Conv2d::init(width, width, kernels[1], rng),
            bn2: BatchNorm::new(width),
        }
    }

    fn zeros_like(&self) -> Self {
        Self {
            conv1: self.conv1.zeros_like(),
            bn1: self.bn1.zeros_like(),
            conv2: self.conv2.zeros_like(),
            bn2: self.bn2.zeros_like(),
        }
    }
}

/// All parameters of the two mapping layers and the shared extractor.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetworkParams {
    pub arch: ArchConfig,
    pub source_mapping: Conv2d,
    pub target_mapping: Conv2d,
    pub spatial_entry: Conv2d,
    pub spatial_entry_bn: BatchNorm,
    pub spatial_block: ResidualBlock,
    pub spectral_conv1: Conv2d,
    pub spectral_bn1: BatchNorm,
    pub spectral_conv2: Conv2d,
    pub spectral_bn2: BatchNorm,
    pub spectral_block: ResidualBlock,
}

/// Gradient buffers shaped like [`NetworkParams`]; running statistics unused.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients(pub NetworkParams);

impl Gradients {
    pub fn zeros_like(params: &NetworkParams) -> Self {
        Gradients(params.zeros_like())
    }

    pub fn tensors(&self) -> Vec<(&'static str, &[f64])> {
        self.0.trainable()
    }

    pub fn add_assign(&mut self, other: &Gradients) {
        for (dst, (_, src)) in self.0.trainable_mut().into_iter().zip(other.tensors()) {
            dst.1.iter_mut().zip(src).for_each(|(a, b)| *a += b);
        }
    }

    pub fn zero_mapping(&mut self, domain: Domain) {
        let m = self.0.mapping_mut(domain);
        m.weight.iter_mut().for_each(|v| *v = 0.0);
        m.bias.iter_mut().for_each(|v| *v = 0.0);
    }

    pub fn norm(&self) -> f64 {
        self.tensors().iter().flat_map(|(_, t)| t.iter()).map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn scale(&mut self, k: f64) {
        for (_, t) in self.0.trainable_mut() {
            t.iter_mut().for_each(|v| *v *= k);
        }
    }
}

/// Embeddings for a batch of patches.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureBatch {
    pub matrix: Matrix,
    pub domain: Domain,
}

/// Converts band-major patches into an NHWC activation map.
pub fn patches_to_map(patches: &[&Patch]) -> Result<FeatureMap> {
    let first = patches.first().ok_or_else(|| Error::Shape("empty patch batch".into()))?;
    let (b, s) = (first.bands, first.size);
    let mut map = FeatureMap::zeros(patches.len(), s, s, b);
    for (n, p) in patches.iter().enumerate() {
        if p.bands != b || p.size != s {
            return Err(Error::Shape(format!(
                "patch {n} is {}x{}x{}, batch expects {b}x{s}x{s}",
                p.bands, p.size, p.size
            )));
        }
        let base = n * s * s * b;
        for band in 0..b {
            for pix in 0..s * s {
                map.data[base + pix * b + band] = p.values[band * s * s + pix] as f64;
            }
        }
    }
    Ok(map)
}

struct UnitTape {
    cols: Vec<f64>,
    bn: BnTape,
    pre_act: Vec<f64>,
}

struct ResidualTape {
    unit: UnitTape,
    cols2: Vec<f64>,
    bn2: BnTape,
    sum: Vec<f64>,
}

struct BranchTape {
    units: Vec<UnitTape>,
    block: ResidualTape,
}

/// Everything a train-mode forward pass keeps for backpropagation.
pub struct ForwardTape {
    domain: Domain,
    mapping_cols: Vec<f64>,
    spatial: BranchTape,
    spectral: BranchTape,
    spatial_out: FeatureMap,
    spectral_out: FeatureMap,
}

impl ForwardTape {
    pub fn domain(&self) -> Domain {
        self.domain
    }

    /// Batch statistics of every BN layer in [`NetworkParams::batch_norms`] order.
    pub fn batch_stats(&self) -> Vec<&BnTape> {
        let mut out = Vec::new();
        for branch in [&self.spatial, &self.spectral] {
            out.extend(branch.units.iter().map(|u| &u.bn));
            out.push(&branch.block.unit.bn);
            out.push(&branch.block.bn2);
        }
        out
    }
}

fn apply_act(act: Activation, x: &FeatureMap) -> FeatureMap {
    let mut out = x.clone();
    out.data.iter_mut().for_each(|v| *v = act.apply(*v));
    out
}

fn bn_forward(bn: &BatchNorm, x: &FeatureMap, mode: Mode, keep: bool) -> (FeatureMap, Option<BnTape>) {
    match mode {
        Mode::Eval => (bn.forward_eval(x), None),
        Mode::Train => {
            let (y, t) = bn.forward_train(x, keep);
            (y, Some(t))
        }
    }
}

fn unit_forward(
    conv: &Conv2d,
    bn: &BatchNorm,
    act: Activation,
    x: &FeatureMap,
    mode: Mode,
    keep: bool,
) -> (FeatureMap, Option<UnitTape>) {
    let (z, cols) = conv.forward(x, keep);
    let (b, bt) = bn_forward(bn, &z, mode, keep);
    let out = apply_act(act, &b);
    let tape = match (cols, bt) {
        (Some(cols), Some(bn)) => Some(UnitTape { cols, bn, pre_act: b.data }),
        _ => None,
    };
    (out, tape)
}

fn unit_backward(
    conv: &Conv2d,
    bn: &BatchNorm,
    act: Activation,
    tape: &UnitTape,
    dy: &FeatureMap,
    grad_conv: &mut Conv2d,
    grad_bn: &mut BatchNorm,
) -> FeatureMap {
    let mut db = dy.clone();
    for (d, &pre) in db.data.iter_mut().zip(&tape.pre_act) {
        *d *= act.derivative(pre);
    }
    let dz = bn.backward(&tape.bn, &db, grad_bn);
    conv.backward(&tape.cols, &dz, grad_conv, true).expect("input gradient requested")
}

fn residual_forward(
    block: &ResidualBlock,
    act: Activation,
    x: &FeatureMap,
    mode: Mode,
    keep: bool,
) -> (FeatureMap, Option<ResidualTape>) {
    let (a1, t1) = unit_forward(&block.conv1, &block.bn1, act, x, mode, keep);
    let (z2, cols2) = block.conv2.forward(&a1, keep);
    let (mut s, bt2) = bn_forward(&block.bn2, &z2, mode, keep);
    s.data.iter_mut().zip(&x.data).for_each(|(a, b)| *a += b);
    let out = apply_act(act, &s);
    let tape = match (t1, cols2, bt2) {
        (Some(unit), Some(cols2), Some(bn2)) => Some(ResidualTape { unit, cols2, bn2, sum: s.data }),
        _ => None,
    };
    (out, tape)
}

fn residual_backward(
    block: &ResidualBlock,
    act: Activation,
    tape: &ResidualTape,
    dy: &FeatureMap,
    grad: &mut ResidualBlock,
) -> FeatureMap {
    let mut ds = dy.clone();
    for (d, &pre) in ds.data.iter_mut().zip(&tape.sum) {
        *d *= act.derivative(pre);
    }
    let dz2 = block.bn2.backward(&tape.bn2, &ds, &mut grad.bn2);
    let da1 = block.conv2.backward(&tape.cols2, &dz2, &mut grad.conv2, true).expect("input gradient requested");
    let mut dx = unit_backward(&block.conv1, &block.bn1, act, &tape.unit, &da1, &mut grad.conv1, &mut grad.bn1);
    dx.data.iter_mut().zip(&ds.data).for_each(|(a, b)| *a += b);
    dx
}

impl NetworkParams {
    pub fn init<R: Rng + ?Sized>(
        arch: ArchConfig,
        source_bands: usize,
        target_bands: usize,
        rng: &mut R,
    ) -> Result<Self> {
        arch.validate()?;
        if source_bands == 0 || target_bands == 0 {
            return Err(Error::Config("input band counts must be >= 1".into()));
        }
        let (m, w) = (arch.mapped_dim, arch.branch_width);
        let kernels = arch.residual_kernels();
        Ok(Self {
            arch,
            source_mapping: Conv2d::init(source_bands, m, (1, 1), rng),
            target_mapping: Conv2d::init(target_bands, m, (1, 1), rng),
            spatial_entry: Conv2d::init(m, w, (3, 3), rng),
            spatial_entry_bn: BatchNorm::new(w),
            spatial_block: ResidualBlock::init(w, kernels, rng),
            spectral_conv1: Conv2d::init(m, w, (1, 1), rng),
            spectral_bn1: BatchNorm::new(w),
            spectral_conv2: Conv2d::init(w, w, (1, 1), rng),
            spectral_bn2: BatchNorm::new(w),
            spectral_block: ResidualBlock::init(w, [(1, 1), (1, 1)], rng),
        })
    }

    fn zeros_like(&self) -> Self {
        Self {
            arch: self.arch,
            source_mapping: self.source_mapping.zeros_like(),
            target_mapping: self.target_mapping.zeros_like(),
            spatial_entry: self.spatial_entry.zeros_like(),
            spatial_entry_bn: self.spatial_entry_bn.zeros_like(),
            spatial_block: self.spatial_block.zeros_like(),
            spectral_conv1: self.spectral_conv1.zeros_like(),
            spectral_bn1: self.spectral_bn1.zeros_like(),
            spectral_conv2: self.spectral_conv2.zeros_like(),
            spectral_bn2: self.spectral_bn2.zeros_like(),
            spectral_block: self.spectral_block.zeros_like(),
        }
    }

    pub fn mapping(&self, domain: Domain) -> &Conv2d {
        match domain {
            Domain::Source => &self.source_mapping,
            Domain::Target => &self.target_mapping,
        }
    }

    fn mapping_mut(&mut self, domain: Domain) -> &mut Conv2d {
        match domain {
            Domain::Source => &mut self.source_mapping,
            Domain::Target => &mut self.target_mapping,
        }
    }

    pub fn input_bands(&self, domain: Domain) -> usize {
        self.mapping(domain).in_channels
    }

    /// Trainable tensors with stable names, in a fixed order.
    pub fn trainable(&self) -> Vec<(&'static str, &[f64])> {
        vec![
            ("source_mapping.weight", &self.source_mapping.weight),
            ("source_mapping.bias", &self.source_mapping.bias),
            ("target_mapping.weight", &self.target_mapping.weight),
            ("target_mapping.bias", &self.target_mapping.bias),
            ("spatial.entry.weight", &self.spatial_entry.weight),
            ("spatial.entry.bias", &self.spatial_entry.bias),
            ("spatial.entry_bn.gamma", &self.spatial_entry_bn.gamma),
            ("spatial.entry_bn.beta", &self.spatial_entry_bn.beta),
            ("spatial.block.conv1.weight", &self.spatial_block.conv1.weight),
            ("spatial.block.conv1.bias", &self.spatial_block.conv1.bias),
            ("spatial.block.bn1.gamma", &self.spatial_block.bn1.gamma),
            ("spatial.block.bn1.beta", &self.spatial_block.bn1.beta),
            ("spatial.block.conv2.weight", &self.spatial_block.conv2.weight),
            ("spatial.block.conv2.bias", &self.spatial_block.conv2.bias),
            ("spatial.block.bn2.gamma", &self.spatial_block.bn2.gamma),
            ("spatial.block.bn2.beta", &self.spatial_block.bn2.beta),
            ("spectral.conv1.weight", &self.spectral_conv1.weight),
            ("spectral.conv1.bias", &self.spectral_conv1.bias),
            ("spectral.bn1.gamma", &self.spectral_bn1.gamma),
            ("spectral.bn1.beta", &self.spectral_bn1.beta),
            ("spectral.conv2.weight", &self.spectral_conv2.weight),
            ("spectral.conv2.bias", &self.spectral_conv2.bias),
            ("spectral.bn2.gamma", &self.spectral_bn2.gamma),
            ("spectral.bn2.beta", &self.spectral_bn2.beta),
            ("spectral.block.conv1.weight", &self.spectral_block.conv1.weight),
            ("spectral.block.conv1.bias", &self.spectral_block.conv1.bias),
            ("spectral.block.bn1.gamma", &self.spectral_block.bn1.gamma),
            ("spectral.block.bn1.beta", &self.spectral_block.bn1.beta),
            ("spectral.block.conv2.weight", &self.spectral_block.conv2.weight),
            ("spectral.block.conv2.bias", &self.spectral_block.conv2.bias),
            ("spectral.block.bn2.gamma", &self.spectral_block.bn2.gamma),
            ("spectral.block.bn2.beta", &self.spectral_block.bn2.beta),
        ]
    }

    /// Mutable view of [`NetworkParams::trainable`], same order.
    pub fn trainable_mut(&mut self) -> Vec<(&'static str, &mut [f64])> {
        vec![
            ("source_mapping.weight", &mut self.source_mapping.weight),
            ("source_mapping.bias", &mut self.source_mapping.bias),
            ("target_mapping.weight", &mut self.target_mapping.weight),
            ("target_mapping.bias", &mut self.target_mapping.bias),
            ("spatial.entry.weight", &mut self.spatial_entry.weight),
            ("spatial.entry.bias", &mut self.spatial_entry.bias),
            ("spatial.entry_bn.gamma", &mut self.spatial_entry_bn.gamma),
            ("spatial.entry_bn.beta", &mut self.spatial_entry_bn.beta),
            ("spatial.block.conv1.weight", &mut self.spatial_block.conv1.weight),
            ("spatial.block.conv1.bias", &mut self.spatial_block.conv1.bias),
            ("spatial.block.bn1.gamma", &mut self.spatial_block.bn1.gamma),
            ("spatial.block.bn1.beta", &mut self.spatial_block.bn1.beta),
            ("spatial.block.conv2.weight", &mut self.spatial_block.conv2.weight),
            ("spatial.block.conv2.bias", &mut self.spatial_block.conv2.bias),
            ("spatial.block.bn2.gamma", &mut self.spatial_block.bn2.gamma),
            ("spatial.block.bn2.beta", &mut self.spatial_block.bn2.beta),
            ("spectral.conv1.weight", &mut self.spectral_conv1.weight),
            ("spectral.conv1.bias", &mut self.spectral_conv1.bias),
            ("spectral.bn1.gamma", &mut self.spectral_bn1.gamma),
            ("spectral.bn1.beta", &mut self.spectral_bn1.beta),
            ("spectral.conv2.weight", &mut self.spectral_conv2.weight),
            ("spectral.conv2.bias", &mut self.spectral_conv2.bias),
            ("spectral.bn2.gamma", &mut self.spectral_bn2.gamma),
            ("spectral.bn2.beta", &mut self.spectral_bn2.beta),
            ("spectral.block.conv1.weight", &mut self.spectral_block.conv1.weight),
            ("spectral.block.conv1.bias", &mut self.spectral_block.conv1.bias),
            ("spectral.block.bn1.gamma", &mut self.spectral_block.bn1.gamma),
            ("spectral.block.bn1.beta", &mut self.spectral_block.bn1.beta),
            ("spectral.block.conv2.weight", &mut self.spectral_block.conv2.weight),
            ("spectral.block.conv2.bias", &mut self.spectral_block.conv2.bias),
            ("spectral.block.bn2.gamma", &mut self.spectral_block.bn2.gamma),
            ("spectral.block.bn2.beta", &mut self.spectral_block.bn2.beta),
        ]
    }

    /// BN layers in forward order: spatial entry, spatial block (bn1, bn2),
    /// spectral bn1, bn2, spectral block (bn1, bn2).
    pub fn batch_norms_mut(&mut self) -> Vec<&mut BatchNorm> {
        vec![
            &mut self.spatial_entry_bn,
            &mut self.spatial_block.bn1,
            &mut self.spatial_block.bn2,
            &mut self.spectral_bn1,
            &mut self.spectral_bn2,
            &mut self.spectral_block.bn1,
            &mut self.spectral_block.bn2,
        ]
    }

    pub fn is_finite(&self) -> bool {
        self.trainable().iter().all(|(_, t)| t.iter().all(|v| v.is_finite()))
    }

    pub fn forward_mapping(&self, x: &FeatureMap, domain: Domain) -> Result<FeatureMap> {
        self.check_input(x, domain)?;
        Ok(self.mapping(domain).forward(x, false).0)
    }

    fn check_input(&self, x: &FeatureMap, domain: Domain) -> Result<()> {
        let expected = self.input_bands(domain);
        if x.c != expected {
            return Err(Error::Shape(format!("{domain} mapping expects {expected} bands, batch has {}", x.c)));
        }
        Ok(())
    }

    fn check_mapped(&self, mapped: &FeatureMap) -> Result<()> {
        if mapped.c != self.arch.mapped_dim {
            return Err(Error::Shape(format!(
                "branch input has {} channels, expected {}",
                mapped.c, self.arch.mapped_dim
            )));
        }
        Ok(())
    }

    fn spatial_pass(&self, mapped: &FeatureMap, mode: Mode, keep: bool) -> (FeatureMap, Option<BranchTape>) {
        let act = self.arch.activation;
        let (e, t0) = unit_forward(&self.spatial_entry, &self.spatial_entry_bn, act, mapped, mode, keep);
        let (out, tb) = residual_forward(&self.spatial_block, act, &e, mode, keep);
        let tape = t0.zip(tb).map(|(u, block)| BranchTape { units: vec![u], block });
        (out, tape)
    }

    fn spectral_pass(&self, mapped: &FeatureMap, mode: Mode, keep: bool) -> (FeatureMap, Option<BranchTape>) {
        let act = self.arch.activation;
        let (a1, t1) = unit_forward(&self.spectral_conv1, &self.spectral_bn1, act, mapped, mode, keep);
        let (a2, t2) = unit_forward(&self.spectral_conv2, &self.spectral_bn2, act, &a1, mode, keep);
        let (out, tb) = residual_forward(&self.spectral_block, act, &a2, mode, keep);
        let tape = match (t1, t2, tb) {
            (Some(a), Some(b), Some(block)) => Some(BranchTape { units: vec![a, b], block }),
            _ => None,
        };
        (out, tape)
    }

    pub fn forward_spatial(&self, mapped: &FeatureMap, mode: Mode) -> Result<FeatureMap> {
        self.check_mapped(mapped)?;
        Ok(self.spatial_pass(mapped, mode, false).0)
    }

    pub fn forward_spectral(&self, mapped: &FeatureMap, mode: Mode) -> Result<FeatureMap> {
        self.check_mapped(mapped)?;
        Ok(self.spectral_pass(mapped, mode, false).0)
    }

    fn fuse_and_pool(spatial: &FeatureMap, spectral: &FeatureMap) -> Matrix {
        let (ws, wp) = (spatial.c, spectral.c);
        let area = (spatial.h * spatial.w) as f64;
        let mut out = Matrix::zeros(spatial.n, ws + wp);
        let per = spatial.h * spatial.w;
        for n in 0..spatial.n {
            let row = out.row_mut(n);
            for pix in 0..per {
                let base = n * per + pix;
                for (o, v) in row[..ws].iter_mut().zip(&spatial.data[base * ws..(base + 1) * ws]) {
                    *o += v;
                }
                for (o, v) in row[ws..].iter_mut().zip(&spectral.data[base * wp..(base + 1) * wp]) {
                    *o += v;
                }
            }
            row.iter_mut().for_each(|v| *v /= area);
        }
        out
    }

    /// Embeddings of an NHWC input. Eval mode is batch-composition independent.
    pub fn features_of(&self, x: &FeatureMap, domain: Domain, mode: Mode) -> Result<Matrix> {
        let mapped = self.forward_mapping(x, domain)?;
        let (sp, _) = self.spatial_pass(&mapped, mode, false);
        let (sc, _) = self.spectral_pass(&mapped, mode, false);
        Ok(Self::fuse_and_pool(&sp, &sc))
    }

    pub fn extract_features(&self, patches: &[&Patch], domain: Domain, mode: Mode) -> Result<FeatureBatch> {
        let x = patches_to_map(patches)?;
        Ok(FeatureBatch { matrix: self.features_of(&x, domain, mode)?, domain })
    }

    /// Eval-mode embeddings computed in chunks to bound memory.
    pub fn embed_eval(&self, patches: &[&Patch], domain: Domain, chunk: usize) -> Result<Matrix> {
        let cols = self.arch.fused_dim();
        let mut data = Vec::with_capacity(patches.len() * cols);
        for part in patches.chunks(chunk.max(1)) {
            data.extend_from_slice(self.extract_features(part, domain, Mode::Eval)?.matrix.data());
        }
        Matrix::from_vec(patches.len(), cols, data)
    }

    /// Train-mode forward pass keeping everything needed by [`NetworkParams::backward`].
    pub fn forward_train(&self, x: &FeatureMap, domain: Domain) -> Result<(Matrix, ForwardTape)> {
        self.check_input(x, domain)?;
        let (mapped, mapping_cols) = self.mapping(domain).forward(x, true);
        let (sp, spt) = self.spatial_pass(&mapped, Mode::Train, true);
        let (sc, sct) = self.spectral_pass(&mapped, Mode::Train, true);
        let features = Self::fuse_and_pool(&sp, &sc);
        let tape = ForwardTape {
            domain,
            mapping_cols: mapping_cols.expect("kept"),
            spatial: spt.expect("kept"),
            spectral: sct.expect("kept"),
            spatial_out: sp,
            spectral_out: sc,
        };
        Ok((features, tape))
    }

    /// Accumulates `d loss / d params` into `grads` given `d loss / d features`.
    pub fn backward(&self, tape: &ForwardTape, dfeatures: &Matrix, grads: &mut Gradients) {
        let act = self.arch.activation;
        let (ws, wp) = (tape.spatial_out.c, tape.spectral_out.c);
        let per = tape.spatial_out.h * tape.spatial_out.w;
        let area = per as f64;
        let mut dsp = tape.spatial_out.same_shape(ws);
        let mut dsc = tape.spectral_out.same_shape(wp);
        for n in 0..tape.spatial_out.n {
            let row = dfeatures.row(n);
            for pix in 0..per {
                let base = n * per + pix;
                for (d, g) in dsp.data[base * ws..(base + 1) * ws].iter_mut().zip(&row[..ws]) {
                    *d = g / area;
                }
                for (d, g) in dsc.data[base * wp..(base + 1) * wp].iter_mut().zip(&row[ws..]) {
                    *d = g / area;
                }
            }
        }
        let g = &mut grads.0;

        // spatial branch
        let st = &tape.spatial;
        let d_entry = residual_backward(&self.spatial_block, act, &st.block, &dsp, &mut g.spatial_block);
        let mut dmapped = unit_backward(
            &self.spatial_entry,
            &self.spatial_entry_bn,
            act,
            &st.units[0],
            &d_entry,
            &mut g.spatial_entry,
            &mut g.spatial_entry_bn,
        );

        // spectral branch
        let ct = &tape.spectral;
        let d_a2 = residual_backward(&self.spectral_block, act, &ct.block, &dsc, &mut g.spectral_block);
        let d_a1 = unit_backward(
            &self.spectral_conv2,
            &self.spectral_bn2,
            act,
            &ct.units[1],
            &d_a2,
            &mut g.spectral_conv2,
            &mut g.spectral_bn2,
        );
        let d_mapped_spc = unit_backward(
            &self.spectral_conv1,
            &self.spectral_bn1,
            act,
            &ct.units[0],
            &d_a1,
            &mut g.spectral_conv1,
            &mut g.spectral_bn1,
        );
        dmapped.data.iter_mut().zip(&d_mapped_spc.data).for_each(|(a, b)| *a += b);

        let gm = g.mapping_mut(tape.domain);
        self.mapping(tape.domain).backward(&tape.mapping_cols, &dmapped, gm, false);
    }

    /// Folds the batch statistics of a train-mode pass into the running estimates.
    pub fn commit_batch_stats(&mut self, tape: &ForwardTape) {
        for (bn, stats) in self.batch_norms_mut().into_iter().zip(tape.batch_stats()) {
            bn.commit(stats);
        }
    }

    pub fn count_params(&self) -> usize {
        self.trainable().iter().map(|(_, t)| t.len()).sum()
    }
}

/// Trainable parameter count for an architecture without allocating it.
pub fn count_params(arch: &ArchConfig, source_bands: usize, target_bands: usize) -> usize {
    let (m, w) = (arch.mapped_dim, arch.branch_width);
    let conv = |cin: usize, cout: usize, k: usize| cin * cout * k + cout;
    let bn = 2 * w;
    let block_k: usize = arch.residual_kernels().iter().map(|(a, b)| a * b).sum();
    let mapping = conv(source_bands, m, 1) + conv(target_bands, m, 1);
    let spatial = conv(m, w, 9) + bn + (w * w * block_k + 2 * w) + 2 * bn;
    let spectral = conv(m, w, 1) + bn + conv(w, w, 1) + bn + 2 * (conv(w, w, 1) + bn);
    mapping + spatial + spectral
}

/// FLOPs (2 x multiply-accumulates) of one forward pass of one patch through
/// the `input_bands` mapping layer and the extractor.
pub fn count_flops(arch: &ArchConfig, input_bands: usize) -> usize {
    let (m, w) = (arch.mapped_dim, arch.branch_width);
    let area = arch.patch_size * arch.patch_size;
    let block_k: usize = arch.residual_kernels().iter().map(|(a, b)| a * b).sum();
    let macs = area
        * (input_bands * m          // mapping
            + m * w * 9             // spatial entry
            + w * w * block_k       // spatial residual pair
            + m * w + w * w         // spectral entry pair
            + 2 * w * w); // spectral residual pair
    2 * macs
}
