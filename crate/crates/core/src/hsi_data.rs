//! Hyperspectral scenes, patch extraction and the source/target sample pools.
//!
//! Cubes are stored row-major with the band index varying fastest, which is
//! also the on-disk order of the `HSI1` fixture format. Patches are stored
//! band-major as `(band, row, col)`.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use rand::seq::index;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const RAW_MAGIC: &[u8; 4] = b"HSI1";

#[derive(Debug, Clone, PartialEq)]
pub struct HsiCube {
    height: usize,
    width: usize,
    bands: usize,
    data: Vec<f32>,
}

impl HsiCube {
    pub fn new(height: usize, width: usize, bands: usize, data: Vec<f32>) -> Result<Self> {
        if bands == 0 || height == 0 || width == 0 {
            return Err(Error::Shape(format!("cube dimensions must be positive, got {height}x{width}x{bands}")));
        }
        if data.len() != height * width * bands {
            return Err(Error::Shape(format!(
                "cube {height}x{width}x{bands} needs {} values, got {}",
                height * width * bands,
                data.len()
            )));
        }
        if let Some(pos) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::parse("cube", format!("non-finite value at flat index {pos}")));
        }
        Ok(Self { height, width, bands, data })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn bands(&self) -> usize {
        self.bands
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn spectrum(&self, row: usize, col: usize) -> &[f32] {
        let start = (row * self.width + col) * self.bands;
        &self.data[start..start + self.bands]
    }

    #[inline]
    pub fn get(&self, row: usize, col: usize, band: usize) -> f32 {
        self.data[(row * self.width + col) * self.bands + band]
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelMap {
    height: usize,
    width: usize,
    labels: Vec<u16>,
}

impl LabelMap {
    pub fn new(height: usize, width: usize, labels: Vec<u16>) -> Result<Self> {
        if labels.len() != height * width {
            return Err(Error::Shape(format!(
                "label map {height}x{width} needs {} entries, got {}",
                height * width,
                labels.len()
            )));
        }
        Ok(Self { height, width, labels })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn labels(&self) -> &[u16] {
        &self.labels
    }

    pub fn get(&self, row: usize, col: usize) -> u16 {
        self.labels[row * self.width + col]
    }

    /// Largest class id present (0 when nothing is labeled).
    pub fn class_count(&self) -> u16 {
        self.labels.iter().copied().max().unwrap_or(0)
    }

    pub fn labeled_pixels(&self) -> usize {
        self.labels.iter().filter(|&&l| l != 0).count()
    }

    /// Labeled pixel positions per class, row-major within each class.
    pub fn pixels_by_class(&self) -> BTreeMap<u16, Vec<(usize, usize)>> {
        let mut out: BTreeMap<u16, Vec<(usize, usize)>> = BTreeMap::new();
        for (i, &l) in self.labels.iter().enumerate() {
            if l != 0 {
                out.entry(l).or_default().push((i / self.width, i % self.width));
            }
        }
        out
    }
}

fn check_pair(cube: &HsiCube, labels: &LabelMap) -> Result<()> {
    if cube.height != labels.height || cube.width != labels.width {
        return Err(Error::Shape(format!(
            "cube is {}x{} but label map is {}x{}",
            cube.height, cube.width, labels.height, labels.width
        )));
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Patch {
    /// `(band, row, col)` with `size * size` values per band.
    pub values: Vec<f32>,
    pub bands: usize,
    pub size: usize,
    pub label: u16,
    pub origin: (usize, usize),
}

impl Patch {
    pub fn get(&self, band: usize, row: usize, col: usize) -> f32 {
        self.values[(band * self.size + row) * self.size + col]
    }

    pub fn center(&self) -> Vec<f32> {
        let c = self.size / 2;
        (0..self.bands).map(|b| self.get(b, c, c)).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PoolKind {
    Source,
    TargetLabeled,
    TargetAugmented,
    TargetTest,
}

/// Patches grouped by class id, iterated in ascending class order.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleSet {
    groups: BTreeMap<u16, Vec<Patch>>,
    kind: PoolKind,
}

impl SampleSet {
    pub fn new(kind: PoolKind) -> Self {
        Self { groups: BTreeMap::new(), kind }
    }

    pub fn from_groups(kind: PoolKind, groups: BTreeMap<u16, Vec<Patch>>) -> Self {
        let groups = groups.into_iter().filter(|(_, g)| !g.is_empty()).collect();
        Self { groups, kind }
    }

    pub fn push(&mut self, patch: Patch) {
        self.groups.entry(patch.label).or_default().push(patch);
    }

    pub fn kind(&self) -> PoolKind {
        self.kind
    }

    pub fn groups(&self) -> &BTreeMap<u16, Vec<Patch>> {
        &self.groups
    }

    pub fn group(&self, class: u16) -> Option<&[Patch]> {
        self.groups.get(&class).map(Vec::as_slice)
    }

    pub fn class_ids(&self) -> Vec<u16> {
        self.groups.keys().copied().collect()
    }

    pub fn class_count(&self) -> usize {
        self.groups.len()
    }

    pub fn counts(&self) -> BTreeMap<u16, usize> {
        self.groups.iter().map(|(&c, g)| (c, g.len())).collect()
    }

    pub fn len(&self) -> usize {
        self.groups.values().map(Vec::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.groups.is_empty()
    }

    pub fn bands(&self) -> Option<usize> {
        self.iter().next().map(|p| p.bands)
    }

    /// All patches, class by class.
    pub fn iter(&self) -> impl Iterator<Item = &Patch> {
        self.groups.values().flatten()
    }
}

/// How a scene file is encoded.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum DataFormat {
    /// `HSI1` little-endian fixture.
    Raw,
    /// MATLAB v5 container; the label map may live in a separate file.
    Mat { cube_var: String, labels_var: String, labels_path: Option<PathBuf> },
}

pub fn load_cube(path: &Path, format: &DataFormat) -> Result<(HsiCube, LabelMap)> {
    match format {
        DataFormat::Raw => read_raw(path),
        DataFormat::Mat { cube_var, labels_var, labels_path } => {
            let mat = open_mat(path)?;
            let cube = mat_cube(&mat, cube_var)?;
            let labels = match labels_path {
                Some(p) if p != path => mat_labels(&open_mat(p)?, labels_var)?,
                _ => mat_labels(&mat, labels_var)?,
            };
            check_pair(&cube, &labels)?;
            Ok((cube, labels))
        }
    }
}

/// Reads only the label map of a scene file (used for fixed train/test masks).
pub fn load_labels(path: &Path, format: &DataFormat) -> Result<LabelMap> {
    match format {
        DataFormat::Raw => read_raw(path).map(|(_, l)| l),
        DataFormat::Mat { labels_var, .. } => mat_labels(&open_mat(path)?, labels_var),
    }
}

fn open_file(path: &Path) -> Result<File> {
    File::open(path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => Error::MissingPath(path.to_path_buf()),
        _ => Error::Io(e),
    })
}

fn open_mat(path: &Path) -> Result<matfile::MatFile> {
    let file = open_file(path)?;
    matfile::MatFile::parse(BufReader::new(file))
        .map_err(|e| Error::parse(path.display().to_string(), format!("MAT v5: {e}")))
}

fn mat_values(array: &matfile::Array) -> Vec<f64> {
    use matfile::NumericData as N;
    match array.data() {
        N::Int8 { real, .. } => real.iter().map(|&v| v as f64).collect(),
        N::UInt8 { real, .. } => real.iter().map(|&v| v as f64).collect(),
        N::Int16 { real, .. } => real.iter().map(|&v| v as f64).collect(),
        N::UInt16 { real, .. } => real.iter().map(|&v| v as f64).collect(),
        N::Int32 { real, .. } => real.iter().map(|&v| v as f64).collect(),
        N::UInt32 { real, .. } => real.iter().map(|&v| v as f64).collect(),
        N::Int64 { real, .. } => real.iter().map(|&v| v as f64).collect(),
        N::UInt64 { real, .. } => real.iter().map(|&v| v as f64).collect(),
        N::Single { real, .. } => real.iter().map(|&v| v as f64).collect(),
        N::Double { real, .. } => real.clone(),
    }
}

fn find_var<'m>(mat: &'m matfile::MatFile, name: &str) -> Result<&'m matfile::Array> {
    mat.find_by_name(name).ok_or_else(|| {
        let found: Vec<&str> = mat.arrays().iter().map(|a| a.name()).collect();
        Error::parse(name, format!("variable not found (file has {found:?})"))
    })
}

fn mat_cube(mat: &matfile::MatFile, name: &str) -> Result<HsiCube> {
    let array = find_var(mat, name)?;
    let size = array.size();
    if size.len() != 3 {
        return Err(Error::parse(name, format!("expected a 3-D array, got dims {size:?}")));
    }
    let (h, w, b) = (size[0], size[1], size[2]);
    let values = mat_values(array);
    // column-major: index = r + h * (c + w * band)
    let mut data = vec![0f32; h * w * b];
    for band in 0..b {
        for c in 0..w {
            for r in 0..h {
                data[(r * w + c) * b + band] = values[r + h * (c + w * band)] as f32;
            }
        }
    }
    HsiCube::new(h, w, b, data)
}

fn mat_labels(mat: &matfile::MatFile, name: &str) -> Result<LabelMap> {
    let array = find_var(mat, name)?;
    let size = array.size();
    if size.len() != 2 {
        return Err(Error::parse(name, format!("expected a 2-D array, got dims {size:?}")));
    }
    let (h, w) = (size[0], size[1]);
    let values = mat_values(array);
    let mut labels = vec![0u16; h * w];
    for c in 0..w {
        for r in 0..h {
            let v = values[r + h * c];
            if v < 0.0 || v > u16::MAX as f64 || v.fract() != 0.0 {
                return Err(Error::parse(name, format!("label {v} at ({r}, {c}) is not a class id")));
            }
            labels[r * w + c] = v as u16;
        }
    }
    LabelMap::new(h, w, labels)
}

pub fn read_raw(path: &Path) -> Result<(HsiCube, LabelMap)> {
    let mut reader = BufReader::new(open_file(path)?);
    let mut bytes = Vec::new();
    reader.read_to_end(&mut bytes)?;
    decode_raw(&bytes)
}

pub fn decode_raw(bytes: &[u8]) -> Result<(HsiCube, LabelMap)> {
    if bytes.len() < 20 {
        return Err(Error::parse("header", format!("file is only {} bytes", bytes.len())));
    }
    if &bytes[..4] != RAW_MAGIC {
        return Err(Error::parse("magic", format!("expected \"HSI1\", got {:?}", &bytes[..4])));
    }
    let word = |i: usize| u32::from_le_bytes(bytes[4 + 4 * i..8 + 4 * i].try_into().unwrap()) as usize;
    let (h, w, b, k) = (word(0), word(1), word(2), word(3));
    let n_values = h
        .checked_mul(w)
        .and_then(|hw| hw.checked_mul(b))
        .ok_or_else(|| Error::parse("header", "dimension overflow"))?;
    let expected = 20 + 4 * n_values + 2 * h * w;
    if bytes.len() != expected {
        return Err(Error::parse(
            "payload",
            format!("header {h}x{w}x{b} implies {expected} bytes, file has {}", bytes.len()),
        ));
    }
    let data: Vec<f32> =
        bytes[20..20 + 4 * n_values].chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
    let labels: Vec<u16> =
        bytes[20 + 4 * n_values..].chunks_exact(2).map(|c| u16::from_le_bytes(c.try_into().unwrap())).collect();
    if let Some(&bad) = labels.iter().find(|&&l| l as usize > k) {
        return Err(Error::parse("labels", format!("label {bad} exceeds class count K = {k}")));
    }
    let cube = HsiCube::new(h, w, b, data)?;
    let labels = LabelMap::new(h, w, labels)?;
    Ok((cube, labels))
}

pub fn encode_raw(cube: &HsiCube, labels: &LabelMap) -> Result<Vec<u8>> {
    check_pair(cube, labels)?;
    let mut out = Vec::with_capacity(20 + 4 * cube.data.len() + 2 * labels.labels.len());
    out.extend_from_slice(RAW_MAGIC);
    for v in [cube.height, cube.width, cube.bands, labels.class_count() as usize] {
        out.extend_from_slice(&(v as u32).to_le_bytes());
    }
    for v in &cube.data {
        out.extend_from_slice(&v.to_le_bytes());
    }
    for l in &labels.labels {
        out.extend_from_slice(&l.to_le_bytes());
    }
    Ok(out)
}

pub fn write_raw(path: &Path, cube: &HsiCube, labels: &LabelMap) -> Result<()> {
    let bytes = encode_raw(cube, labels)?;
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(&bytes)?;
    w.flush()?;
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Normalization {
    MinMax,
    ZScore,
}

/// Per-band normalization over the whole scene. Constant bands become zeros.
pub fn normalize_cube(cube: &HsiCube, mode: Normalization) -> HsiCube {
    let b = cube.bands;
    let n = (cube.height * cube.width) as f64;
    let mut data = cube.data.clone();
    for band in 0..b {
        let column = || cube.data.iter().skip(band).step_by(b).map(|&v| v as f64);
        let (scale, shift) = match mode {
            Normalization::MinMax => {
                let (lo, hi) = column().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| (lo.min(v), hi.max(v)));
                if hi > lo {
                    (1.0 / (hi - lo), lo)
                } else {
                    (0.0, lo)
                }
            }
            Normalization::ZScore => {
                let mean = column().sum::<f64>() / n;
                let var = column().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
                if var > 0.0 {
                    (1.0 / var.sqrt(), mean)
                } else {
                    (0.0, mean)
                }
            }
        };
        for v in data.iter_mut().skip(band).step_by(b) {
            *v = ((*v as f64 - shift) * scale) as f32;
        }
    }
    HsiCube { data, ..*cube }
}

/// Index into `0..n` with mirror reflection about the borders (edge not repeated).
pub fn reflect_index(i: isize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n as isize - 1);
    let mut m = i.rem_euclid(period);
    if m >= n as isize {
        m = period - m;
    }
    m as usize
}

pub fn extract_patch(cube: &HsiCube, labels: Option<&LabelMap>, row: usize, col: usize, size: usize) -> Result<Patch> {
    if size % 2 == 0 || size == 0 {
        return Err(Error::Config(format!("patch size must be odd, got {size}")));
    }
    if row >= cube.height || col >= cube.width {
        return Err(Error::Shape(format!("position ({row}, {col}) outside {}x{} scene", cube.height, cube.width)));
    }
    let half = (size / 2) as isize;
    let b = cube.bands;
    let mut values = vec![0f32; b * size * size];
    for dy in 0..size {
        let r = reflect_index(row as isize + dy as isize - half, cube.height);
        for dx in 0..size {
            let c = reflect_index(col as isize + dx as isize - half, cube.width);
            let spectrum = cube.spectrum(r, c);
            for (band, &v) in spectrum.iter().enumerate() {
                values[(band * size + dy) * size + dx] = v;
            }
        }
    }
    Ok(Patch { values, bands: b, size, label: labels.map_or(0, |l| l.get(row, col)), origin: (row, col) })
}

fn extract_all(cube: &HsiCube, labels: &LabelMap, positions: &[(usize, usize)], size: usize) -> Result<Vec<Patch>> {
    positions.iter().map(|&(r, c)| extract_patch(cube, Some(labels), r, c, size)).collect()
}

/// Drops classes with fewer than `min_class` pixels and samples `per_class`
/// patches from every surviving class without replacement.
pub fn prepare_source<R: Rng + ?Sized>(
    cube: &HsiCube,
    labels: &LabelMap,
    patch_size: usize,
    min_class: usize,
    per_class: usize,
    rng: &mut R,
) -> Result<SampleSet> {
    check_pair(cube, labels)?;
    if per_class > min_class {
        return Err(Error::Config(format!("source_per_class ({per_class}) cannot exceed min_class ({min_class})")));
    }
    let mut set = SampleSet::new(PoolKind::Source);
    for (class, pixels) in labels.pixels_by_class() {
        if pixels.len() < min_class {
            continue;
        }
        let chosen: Vec<(usize, usize)> =
            index::sample(rng, pixels.len(), per_class).into_iter().map(|i| pixels[i]).collect();
        set.groups.insert(class, extract_all(cube, labels, &chosen, patch_size)?);
    }
    if set.is_empty() {
        return Err(Error::EmptySource { min_class });
    }
    Ok(set)
}

#[derive(Debug, Clone, PartialEq)]
pub struct TargetPools {
    pub labeled: SampleSet,
    pub augmented: SampleSet,
    pub test: SampleSet,
}

/// Samples `labeled_per_class` pixels per class, expands them to
/// `augment_to` with Gaussian-noise copies, and keeps every other labeled
/// pixel for testing.
pub fn prepare_target<R: Rng + ?Sized>(
    cube: &HsiCube,
    labels: &LabelMap,
    patch_size: usize,
    labeled_per_class: usize,
    augment_to: usize,
    noise_scale: f64,
    rng: &mut R,
) -> Result<TargetPools> {
    check_pair(cube, labels)?;
    let by_class = labels.pixels_by_class();
    for (&class, pixels) in &by_class {
        if pixels.len() <= labeled_per_class {
            return Err(Error::InsufficientSamples { class, available: pixels.len(), required: labeled_per_class });
        }
    }
    let mut labeled = SampleSet::new(PoolKind::TargetLabeled);
    let mut test = SampleSet::new(PoolKind::TargetTest);
    for (class, pixels) in by_class {
        let picked = index::sample(rng, pixels.len(), labeled_per_class).into_vec();
        let mut is_picked = vec![false; pixels.len()];
        for &i in &picked {
            is_picked[i] = true;
        }
        let chosen: Vec<_> = picked.iter().map(|&i| pixels[i]).collect();
        let rest: Vec<_> = pixels.iter().zip(&is_picked).filter(|(_, &p)| !p).map(|(&px, _)| px).collect();
        labeled.groups.insert(class, extract_all(cube, labels, &chosen, patch_size)?);
        test.groups.insert(class, extract_all(cube, labels, &rest, patch_size)?);
    }
    let augmented = augment_pool(&labeled, augment_to, noise_scale, rng)?;
    Ok(TargetPools { labeled, augmented, test })
}

/// Per-band standard deviation over every value of every patch in the pool.
pub fn band_std(pool: &SampleSet) -> Vec<f64> {
    let Some(bands) = pool.bands() else {
        return Vec::new();
    };
    let mut sum = vec![0f64; bands];
    let mut sq = vec![0f64; bands];
    let mut count = 0usize;
    for p in pool.iter() {
        let area = p.size * p.size;
        count += area;
        for band in 0..bands {
            for &v in &p.values[band * area..(band + 1) * area] {
                sum[band] += v as f64;
                sq[band] += (v as f64) * (v as f64);
            }
        }
    }
    let n = count as f64;
    sum.iter()
        .zip(&sq)
        .map(|(s, q)| {
            let mean = s / n;
            (q / n - mean * mean).max(0.0).sqrt()
        })
        .collect()
}

/// Expands each class of `labeled` to `augment_to` patches. The originals
/// come first, unperturbed; copy `k` perturbs original `k % L` with
/// zero-mean Gaussian noise of std `noise_scale * band_std`.
pub fn augment_pool<R: Rng + ?Sized>(
    labeled: &SampleSet,
    augment_to: usize,
    noise_scale: f64,
    rng: &mut R,
) -> Result<SampleSet> {
    if noise_scale < 0.0 || !noise_scale.is_finite() {
        return Err(Error::Config(format!("noise_scale must be >= 0, got {noise_scale}")));
    }
    let std = band_std(labeled);
    let mut out = SampleSet::new(PoolKind::TargetAugmented);
    for (&class, originals) in &labeled.groups {
        if augment_to < originals.len() {
            return Err(Error::Config(format!(
                "augment_to ({augment_to}) is smaller than the labeled count ({})",
                originals.len()
            )));
        }
        let mut group = originals.clone();
        for k in 0..augment_to - originals.len() {
            let mut copy = originals[k % originals.len()].clone();
            let area = copy.size * copy.size;
            for (i, v) in copy.values.iter_mut().enumerate() {
                let z: f64 = StandardNormal.sample(rng);
                *v = (*v as f64 + z * noise_scale * std[i / area]) as f32;
            }
            group.push(copy);
        }
        out.groups.insert(class, group);
    }
    Ok(out)
}

/// Fixed train/test split (Houston style): labeled samples come from the
/// train mask only, the test pool is every pixel of the test mask.
pub fn apply_fixed_split<R: Rng + ?Sized>(
    cube: &HsiCube,
    train_mask: &LabelMap,
    test_mask: &LabelMap,
    patch_size: usize,
    labeled_per_class: usize,
    rng: &mut R,
) -> Result<(SampleSet, SampleSet)> {
    check_pair(cube, train_mask)?;
    check_pair(cube, test_mask)?;
    if let Some(i) = train_mask.labels.iter().zip(&test_mask.labels).position(|(&a, &b)| a != 0 && b != 0) {
        return Err(Error::Split(format!("train and test masks overlap at ({}, {})", i / cube.width, i % cube.width)));
    }
    let mut labeled = SampleSet::new(PoolKind::TargetLabeled);
    for (class, pixels) in train_mask.pixels_by_class() {
        if pixels.len() < labeled_per_class {
            return Err(Error::InsufficientSamples {
                class,
                available: pixels.len(),
                required: labeled_per_class.saturating_sub(1),
            });
        }
        let chosen: Vec<_> =
            index::sample(rng, pixels.len(), labeled_per_class).into_iter().map(|i| pixels[i]).collect();
        labeled.groups.insert(class, extract_all(cube, train_mask, &chosen, patch_size)?);
    }
    let mut test = SampleSet::new(PoolKind::TargetTest);
    for (class, pixels) in test_mask.pixels_by_class() {
        test.groups.insert(class, extract_all(cube, test_mask, &pixels, patch_size)?);
    }
    Ok((labeled, test))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn ramp_cube(h: usize, w: usize, b: usize) -> HsiCube {
        let data = (0..h * w * b).map(|i| i as f32 * 0.25).collect();
        HsiCube::new(h, w, b, data).unwrap()
    }

    #[test]
    fn raw_round_trip_small_fixture() {
        let cube = ramp_cube(4, 4, 3);
        let labels = LabelMap::new(4, 4, (0..16).map(|i| (i % 3) as u16).collect()).unwrap();
        let bytes = encode_raw(&cube, &labels).unwrap();
        let (c2, l2) = decode_raw(&bytes).unwrap();
        assert_eq!(c2, cube);
        assert_eq!(l2, labels);
    }

    #[test]
    fn raw_decode_rejects_bad_magic_and_length() {
        let cube = ramp_cube(2, 2, 1);
        let labels = LabelMap::new(2, 2, vec![1, 0, 1, 1]).unwrap();
        let mut bytes = encode_raw(&cube, &labels).unwrap();
        bytes.pop();
        assert!(matches!(decode_raw(&bytes), Err(Error::Parse { field, .. }) if field == "payload"));
        bytes.push(0);
        bytes[0] = b'X';
        assert!(matches!(decode_raw(&bytes), Err(Error::Parse { field, .. }) if field == "magic"));
    }

    #[test]
    fn minmax_maps_band_to_unit_interval() {
        let cube = HsiCube::new(1, 3, 1, vec![0.0, 5.0, 10.0]).unwrap();
        let n = normalize_cube(&cube, Normalization::MinMax);
        assert_eq!(n.data(), &[0.0, 0.5, 1.0]);
    }

    #[test]
    fn constant_band_normalizes_to_zero() {
        let cube = HsiCube::new(2, 2, 2, vec![3.0, 1.0, 3.0, 2.0, 3.0, 3.0, 3.0, 4.0]).unwrap();
        for mode in [Normalization::MinMax, Normalization::ZScore] {
            let n = normalize_cube(&cube, mode);
            assert!(n.data().iter().step_by(2).all(|&v| v == 0.0));
        }
    }

    #[test]
    fn zscore_statistics() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let data: Vec<f32> = (0..50 * 40 * 2).map(|_| rng.gen_range(-3.0..7.0)).collect();
        let cube = HsiCube::new(50, 40, 2, data).unwrap();
        let n = normalize_cube(&cube, Normalization::ZScore);
        for band in 0..2 {
            let vals: Vec<f64> = n.data().iter().skip(band).step_by(2).map(|&v| v as f64).collect();
            let mean = vals.iter().sum::<f64>() / vals.len() as f64;
            let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / vals.len() as f64;
            assert!(mean.abs() < 1e-6, "mean {mean}");
            assert!((var - 1.0).abs() < 1e-5, "var {var}");
        }
    }

    #[test]
    fn corner_patch_uses_mirror_indices() {
        let cube = ramp_cube(5, 5, 1);
        let p = extract_patch(&cube, None, 0, 0, 3).unwrap();
        let expected = [(1, 1), (1, 0), (1, 1), (0, 1), (0, 0), (0, 1), (1, 1), (1, 0), (1, 1)];
        for (k, &(r, c)) in expected.iter().enumerate() {
            assert_eq!(p.get(0, k / 3, k % 3), cube.get(r, c, 0));
        }
    }

    #[test]
    fn interior_patch_is_direct_slice() {
        let cube = ramp_cube(12, 11, 3);
        let p = extract_patch(&cube, None, 6, 5, 9).unwrap();
        for b in 0..3 {
            for dy in 0..9 {
                for dx in 0..9 {
                    assert_eq!(p.get(b, dy, dx), cube.get(6 + dy - 4, 5 + dx - 4, b));
                }
            }
        }
        assert_eq!(p.center(), cube.spectrum(6, 5));
    }

    #[test]
    fn even_patch_size_is_config_error() {
        let cube = ramp_cube(4, 4, 1);
        assert!(matches!(extract_patch(&cube, None, 1, 1, 4), Err(Error::Config(_))));
    }

    #[test]
    fn reflect_index_matches_numpy_reflect() {
        let n = 4;
        let got: Vec<usize> = (-5..9).map(|i| reflect_index(i, n)).collect();
        // numpy.pad(arange(4), 5, 'reflect')[:14]
        assert_eq!(got, vec![1, 2, 3, 2, 1, 0, 1, 2, 3, 2, 1, 0, 1, 2]);
    }

    fn count_scene(counts: &[usize]) -> (HsiCube, LabelMap) {
        let total: usize = counts.iter().sum();
        let w = 20;
        let h = total.div_ceil(w) + 1;
        let mut labels = vec![0u16; h * w];
        let mut i = 0;
        for (c, &n) in counts.iter().enumerate() {
            for _ in 0..n {
                labels[i] = c as u16 + 1;
                i += 1;
            }
        }
        (ramp_cube(h, w, 2), LabelMap::new(h, w, labels).unwrap())
    }

    #[test]
    fn source_threshold_drops_small_classes() {
        let (cube, labels) = count_scene(&[250, 150]);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let set = prepare_source(&cube, &labels, 3, 200, 200, &mut rng).unwrap();
        assert_eq!(set.class_ids(), vec![1]);
        assert_eq!(set.counts()[&1], 200);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(matches!(prepare_source(&cube, &labels, 3, 300, 200, &mut rng), Err(Error::EmptySource { .. })));
    }

    #[test]
    fn source_sampling_is_seeded() {
        let (cube, labels) = count_scene(&[260, 240]);
        let origins = |seed| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let s = prepare_source(&cube, &labels, 3, 200, 200, &mut rng).unwrap();
            s.iter().map(|p| p.origin).collect::<Vec<_>>()
        };
        assert_eq!(origins(9), origins(9));
        assert!((10..20).any(|s| origins(s) != origins(9)));
    }

    #[test]
    fn target_pools_sizes_and_disjointness() {
        let (cube, labels) = count_scene(&[30, 12, 6]);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let pools = prepare_target(&cube, &labels, 3, 5, 40, 0.1, &mut rng).unwrap();
        for (class, n) in [(1u16, 30usize), (2, 12), (3, 6)] {
            assert_eq!(pools.labeled.counts()[&class], 5);
            assert_eq!(pools.augmented.counts()[&class], 40);
            assert_eq!(pools.test.counts()[&class], n - 5);
            let originals = pools.labeled.group(class).unwrap();
            assert_eq!(&pools.augmented.group(class).unwrap()[..5], originals);
        }
        let labeled: std::collections::HashSet<_> = pools.labeled.iter().map(|p| p.origin).collect();
        assert!(pools.test.iter().all(|p| !labeled.contains(&p.origin)));
    }

    #[test]
    fn target_rejects_class_with_too_few_pixels() {
        let (cube, labels) = count_scene(&[30, 5]);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let err = prepare_target(&cube, &labels, 3, 5, 200, 0.1, &mut rng).unwrap_err();
        assert!(matches!(err, Error::InsufficientSamples { class: 2, available: 5, .. }));
    }

    #[test]
    fn fixed_split_rules() {
        let cube = ramp_cube(4, 4, 1);
        let train = LabelMap::new(4, 4, vec![1, 1, 2, 2, 0, 0, 0, 0, 1, 2, 0, 0, 0, 0, 0, 0]).unwrap();
        let test = LabelMap::new(4, 4, vec![0, 0, 0, 0, 1, 1, 2, 2, 0, 0, 1, 0, 0, 0, 0, 0]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let (labeled, test_set) = apply_fixed_split(&cube, &train, &test, 3, 2, &mut rng).unwrap();
        assert_eq!(labeled.len(), 4);
        assert_eq!(test_set.len(), 5);
        assert_eq!(test_set.counts()[&1], 3);

        let empty = LabelMap::new(4, 4, vec![0; 16]).unwrap();
        let (_, none) = apply_fixed_split(&cube, &train, &empty, 3, 1, &mut rng).unwrap();
        assert!(none.is_empty());

        let overlap = LabelMap::new(4, 4, vec![1; 16]).unwrap();
        assert!(matches!(apply_fixed_split(&cube, &train, &overlap, 3, 1, &mut rng), Err(Error::Split(_))));
    }

    #[test]
    fn shape_mismatch_between_cube_and_labels() {
        let cube = ramp_cube(3, 3, 1);
        let labels = LabelMap::new(3, 2, vec![1; 6]).unwrap();
        assert!(matches!(encode_raw(&cube, &labels), Err(Error::Shape(_))));
    }
}
