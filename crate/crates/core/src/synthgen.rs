//! Seeded synthetic cross-domain scene pairs.
//!
//! Class signatures are sums of Gaussian bumps over normalized band
//! position. Labels grow from random seeds as irregular blobs. The target
//! scene reuses the source classes after a sensor-style shift: resampling to
//! the target band count, a smooth multiplicative gain and an additive offset.

use rand::seq::index;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::hsi_data::{HsiCube, LabelMap};

const MAX_REJECTIONS: usize = 100;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthSpec {
    pub classes: usize,
    pub bands_source: usize,
    pub bands_target: usize,
    pub height: usize,
    pub width: usize,
    /// Gaussian bumps per signature.
    pub bumps: usize,
    pub blobs_per_class: usize,
    /// Fraction of pixels claimed by class blobs; the rest is background.
    pub coverage: f64,
    pub noise_std: f64,
    /// Floor on the L2 distance between any two signatures of a scene.
    pub min_separation: f64,
    /// Amplitude of the multiplicative gain warp.
    pub shift_amplitude: f64,
    /// Additive offset, as a multiple of `shift_amplitude`.
    pub offset_scale: f64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            classes: 5,
            bands_source: 20,
            bands_target: 24,
            height: 64,
            width: 64,
            bumps: 3,
            blobs_per_class: 3,
            coverage: 0.75,
            noise_std: 0.05,
            min_separation: 1.0,
            shift_amplitude: 0.3,
            offset_scale: 0.5,
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Spec(m));
        if self.classes < 2 {
            return fail(format!("classes must be >= 2, got {}", self.classes));
        }
        if self.bands_source < 4 || self.bands_target < 4 {
            return fail("band counts must be >= 4".into());
        }
        if self.bumps == 0 || self.blobs_per_class == 0 {
            return fail("bumps and blobs_per_class must be >= 1".into());
        }
        if !(0.5..=1.0).contains(&self.coverage) {
            return fail(format!("coverage must lie in [0.5, 1], got {}", self.coverage));
        }
        if self.height * self.width < self.classes * self.blobs_per_class {
            return fail("scene too small for the requested blob seeds".into());
        }
        for (name, v) in [
            ("noise_std", self.noise_std),
            ("min_separation", self.min_separation),
            ("shift_amplitude", self.shift_amplitude),
            ("offset_scale", self.offset_scale),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return fail(format!("{name} must be finite and >= 0, got {v}"));
            }
        }
        Ok(())
    }
}

/// A generated scene with its noise-free signatures; index 0 is background.
#[derive(Debug, Clone, PartialEq)]
pub struct SynthScene {
    pub cube: HsiCube,
    pub labels: LabelMap,
    pub signatures: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthPair {
    pub source: SynthScene,
    pub target: SynthScene,
}

#[derive(Debug, Clone, Copy)]
struct Bump {
    amp: f64,
    center: f64,
    width: f64,
}

#[derive(Debug, Clone)]
struct SignatureShape {
    base: f64,
    bumps: Vec<Bump>,
}

impl SignatureShape {
    fn random<R: Rng + ?Sized>(n: usize, rng: &mut R) -> Self {
        Self {
            base: rng.gen_range(0.1..0.4),
            bumps: (0..n)
                .map(|_| Bump {
                    amp: rng.gen_range(0.2..1.0),
                    center: rng.gen_range(0.0..1.0),
                    width: rng.gen_range(0.05..0.2),
                })
                .collect(),
        }
    }

    fn eval(&self, t: f64) -> f64 {
        self.base
            + self
                .bumps
                .iter()
                .map(|b| b.amp * (-(t - b.center).powi(2) / (2.0 * b.width * b.width)).exp())
                .sum::<f64>()
    }

    fn sample(&self, bands: usize) -> Vec<f64> {
        (0..bands).map(|i| self.eval(band_position(i, bands))).collect()
    }
}

fn band_position(i: usize, bands: usize) -> f64 {
    i as f64 / (bands - 1) as f64
}

/// Linear interpolation of `sig` onto `bands` evenly spaced positions.
pub fn resample(sig: &[f64], bands: usize) -> Vec<f64> {
    let n = sig.len();
    (0..bands)
        .map(|i| {
            let x = band_position(i, bands) * (n - 1) as f64;
            let lo = (x.floor() as usize).min(n - 1);
            let hi = (lo + 1).min(n - 1);
            let f = x - lo as f64;
            sig[lo] * (1.0 - f) + sig[hi] * f
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
struct Shift {
    amplitude: f64,
    offset: f64,
    cycles: f64,
    phase: f64,
}

impl Shift {
    fn random<R: Rng + ?Sized>(spec: &SynthSpec, rng: &mut R) -> Self {
        Self {
            amplitude: spec.shift_amplitude,
            offset: spec.shift_amplitude * spec.offset_scale,
            cycles: rng.gen_range(0.5..1.5),
            phase: rng.gen_range(0.0..std::f64::consts::TAU),
        }
    }

    fn apply(&self, sig: &[f64], bands: usize) -> Vec<f64> {
        resample(sig, bands)
            .into_iter()
            .enumerate()
            .map(|(i, v)| {
                let t = band_position(i, bands);
                let gain = 1.0 + self.amplitude * (std::f64::consts::TAU * self.cycles * t + self.phase).sin();
                v * gain + self.offset
            })
            .collect()
    }
}

pub fn l2(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

fn separated(candidate: &[f64], accepted: &[Vec<f64>], floor: f64) -> bool {
    accepted.iter().all(|s| l2(candidate, s) >= floor)
}

/// Background plus `classes` signatures, each drawn until it clears the
/// separation floor in every listed band layout.
fn draw_signatures<R: Rng + ?Sized>(
    spec: &SynthSpec,
    layouts: &[(usize, Option<Shift>)],
    rng: &mut R,
) -> Result<Vec<Vec<Vec<f64>>>> {
    let mut out: Vec<Vec<Vec<f64>>> = vec![Vec::new(); layouts.len()];
    for k in 0..=spec.classes {
        let mut placed = false;
        for _ in 0..MAX_REJECTIONS {
            let shape = SignatureShape::random(spec.bumps, rng);
            let base = shape.sample(spec.bands_source);
            let rendered: Vec<Vec<f64>> = layouts
                .iter()
                .map(|&(bands, shift)| match shift {
                    Some(s) => s.apply(&base, bands),
                    None => shape.sample(bands),
                })
                .collect();
            if rendered.iter().zip(&out).all(|(sig, acc)| separated(sig, acc, spec.min_separation)) {
                for (acc, sig) in out.iter_mut().zip(rendered) {
                    acc.push(sig);
                }
                placed = true;
                break;
            }
        }
        if !placed {
            return Err(Error::Spec(format!(
                "signature {k} could not reach separation {} in {MAX_REJECTIONS} draws",
                spec.min_separation
            )));
        }
    }
    Ok(out)
}

/// Round-robin region growing from `classes * blobs_per_class` seeds; seed
/// `i` grows class `i % classes + 1`. Unclaimed pixels stay 0.
pub fn grow_blobs<R: Rng + ?Sized>(spec: &SynthSpec, rng: &mut R) -> Result<LabelMap> {
    let (h, w) = (spec.height, spec.width);
    let n_seeds = spec.classes * spec.blobs_per_class;
    let target = (spec.coverage * (h * w) as f64).ceil() as usize;
    let mut labels = vec![0u16; h * w];
    let mut frontiers: Vec<Vec<usize>> = Vec::with_capacity(n_seeds);
    let mut claimed = 0usize;
    for (i, px) in index::sample(rng, h * w, n_seeds).into_iter().enumerate() {
        labels[px] = (i % spec.classes + 1) as u16;
        claimed += 1;
        frontiers.push(neighbours(px, h, w).collect());
    }
    while claimed < target && frontiers.iter().any(|f| !f.is_empty()) {
        for (i, frontier) in frontiers.iter_mut().enumerate() {
            if claimed >= target {
                break;
            }
            while !frontier.is_empty() {
                let px = frontier.swap_remove(rng.gen_range(0..frontier.len()));
                if labels[px] == 0 {
                    labels[px] = (i % spec.classes + 1) as u16;
                    claimed += 1;
                    frontier.extend(neighbours(px, h, w).filter(|&q| labels[q] == 0));
                    break;
                }
            }
        }
    }
    LabelMap::new(h, w, labels)
}

fn neighbours(px: usize, h: usize, w: usize) -> impl Iterator<Item = usize> {
    let (r, c) = (px / w, px % w);
    [(r > 0).then(|| px - w), (r + 1 < h).then(|| px + w), (c > 0).then(|| px - 1), (c + 1 < w).then(|| px + 1)]
        .into_iter()
        .flatten()
}

fn render<R: Rng + ?Sized>(labels: &LabelMap, signatures: &[Vec<f64>], noise_std: f64, rng: &mut R) -> Result<HsiCube> {
    let bands = signatures[0].len();
    let noise = Normal::new(0.0, noise_std).map_err(|e| Error::Spec(e.to_string()))?;
    let mut data = Vec::with_capacity(labels.labels().len() * bands);
    for &l in labels.labels() {
        for &v in &signatures[l as usize] {
            let e = if noise_std > 0.0 { noise.sample(rng) } else { 0.0 };
            data.push((v + e) as f32);
        }
    }
    HsiCube::new(labels.height(), labels.width(), bands, data)
}

/// A single scene with `bands_source` bands.
pub fn gen_domain<R: Rng + ?Sized>(spec: &SynthSpec, rng: &mut R) -> Result<SynthScene> {
    spec.validate()?;
    let signatures = draw_signatures(spec, &[(spec.bands_source, None)], rng)?.remove(0);
    let labels = grow_blobs(spec, rng)?;
    let cube = render(&labels, &signatures, spec.noise_std, rng)?;
    Ok(SynthScene { cube, labels, signatures })
}

/// Source and target scenes sharing class semantics; each has its own blob map.
pub fn gen_cross_domain_pair<R: Rng + ?Sized>(spec: &SynthSpec, rng: &mut R) -> Result<SynthPair> {
    spec.validate()?;
    let shift = Shift::random(spec, rng);
    let mut sigs = draw_signatures(spec, &[(spec.bands_source, None), (spec.bands_target, Some(shift))], rng)?;
    let target_sigs = sigs.pop().unwrap_or_default();
    let source_sigs = sigs.pop().unwrap_or_default();
    let source_labels = grow_blobs(spec, rng)?;
    let source_cube = render(&source_labels, &source_sigs, spec.noise_std, rng)?;
    let target_labels = grow_blobs(spec, rng)?;
    let target_cube = render(&target_labels, &target_sigs, spec.noise_std, rng)?;
    Ok(SynthPair {
        source: SynthScene { cube: source_cube, labels: source_labels, signatures: source_sigs },
        target: SynthScene { cube: target_cube, labels: target_labels, signatures: target_sigs },
    })
}

/// Accuracy of assigning every labeled pixel to its nearest class signature.
pub fn nearest_signature_accuracy(scene: &SynthScene) -> f64 {
    let (mut hit, mut total) = (0usize, 0usize);
    for r in 0..scene.labels.height() {
        for c in 0..scene.labels.width() {
            let truth = scene.labels.get(r, c) as usize;
            if truth == 0 {
                continue;
            }
            let px: Vec<f64> = scene.cube.spectrum(r, c).iter().map(|&v| v as f64).collect();
            let mut best = (f64::INFINITY, 0usize);
            for (k, sig) in scene.signatures.iter().enumerate().skip(1) {
                let d = l2(&px, sig);
                if d < best.0 {
                    best = (d, k);
                }
            }
            total += 1;
            hit += usize::from(best.1 == truth);
        }
    }
    hit as f64 / total as f64
}

/// Accuracy of always predicting the most frequent labeled class.
pub fn majority_baseline(labels: &LabelMap) -> f64 {
    let by_class = labels.pixels_by_class();
    let total: usize = by_class.values().map(Vec::len).sum();
    by_class.values().map(Vec::len).max().unwrap_or(0) as f64 / total as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn small() -> SynthSpec {
        SynthSpec { height: 24, width: 24, ..SynthSpec::default() }
    }

    #[test]
    fn every_class_present() {
        let scene = gen_domain(&small(), &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        assert_eq!(scene.labels.pixels_by_class().len(), 5);
        assert!(scene.labels.labels().iter().all(|&l| l <= 5));
        let covered = scene.labels.labeled_pixels() as f64 / (24.0 * 24.0);
        assert!(covered >= 0.75, "coverage {covered}");
    }

    #[test]
    fn identity_shift() {
        let spec = SynthSpec { shift_amplitude: 0.0, bands_target: 20, ..small() };
        let pair = gen_cross_domain_pair(&spec, &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
        for (a, b) in pair.source.signatures.iter().zip(&pair.target.signatures) {
            assert!(l2(a, b) < 1e-12);
        }
    }

    #[test]
    fn resample_preserves_endpoints() {
        let s = vec![1.0, 2.0, 4.0, 8.0];
        let r = resample(&s, 7);
        assert_eq!(r[0], 1.0);
        assert_eq!(r[6], 8.0);
        assert_eq!(resample(&s, 4), s);
    }

    #[test]
    fn unreachable_separation_is_spec_error() {
        let spec = SynthSpec { min_separation: 1e6, ..small() };
        assert!(matches!(gen_domain(&spec, &mut ChaCha8Rng::seed_from_u64(0)), Err(Error::Spec(_))));
    }

    #[test]
    fn invalid_specs() {
        assert!(SynthSpec { classes: 1, ..small() }.validate().is_err());
        assert!(SynthSpec { coverage: 0.4, ..small() }.validate().is_err());
        assert!(SynthSpec { bands_target: 3, ..small() }.validate().is_err());
    }
}
