//! Flat `key = value` run configuration and the registry of every key.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::evaluation::{DataConfig, EvalPrototypes, PipelineConfig};
use crate::hsi_data::{DataFormat, Normalization};
use crate::losses::{DistanceMode, KernelConfig};
use crate::network::{Activation, ArchConfig, SpatialBlock};
use crate::synthgen::SynthSpec;
use crate::training::TrainConfig;

/// Environment variable naming the directory searched for config files
/// that are not found as given.
pub const CONFIG_DIR_ENV: &str = "HSI_FSL_CONFIG_DIR";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct KeySpec {
    pub name: &'static str,
    pub default: &'static str,
    pub domain: &'static str,
    pub help: &'static str,
}

const fn key(name: &'static str, default: &'static str, domain: &'static str, help: &'static str) -> KeySpec {
    KeySpec { name, default, domain, help }
}

pub const KEYS: &[KeySpec] = &[
    key("dataset", "target", "text", "name shown in reports"),
    key("source_path", "", "path", "source scene file"),
    key("target_path", "", "path", "target scene file"),
    key("target_test_path", "", "path or empty", "fixed test mask; empty samples the test pool"),
    key("format", "raw", "raw|mat", "scene file format"),
    key("source_cube_var", "data", "text", "MAT variable holding the source cube"),
    key("source_labels_var", "labels", "text", "MAT variable holding the source labels"),
    key("source_labels_path", "", "path or empty", "separate MAT file with the source labels"),
    key("target_cube_var", "data", "text", "MAT variable holding the target cube"),
    key("target_labels_var", "labels", "text", "MAT variable holding the target labels"),
    key("target_labels_path", "", "path or empty", "separate MAT file with the target labels"),
    key("normalize", "minmax", "minmax|zscore", "per-band scene normalization"),
    key("patch_size", "9", "odd integer >= 1", "patch side length"),
    key("min_class", "200", "integer >= 1", "source classes with fewer pixels are dropped"),
    key("source_per_class", "200", "integer in [1, min_class]", "source patches sampled per class"),
    key("target_labeled", "5", "integer >= 1", "labeled target samples per class (L)"),
    key("augment_to", "200", "integer >= target_labeled", "augmented target pool size per class"),
    key("noise_scale", "0.1", "real >= 0", "augmentation noise, in per-band std units"),
    key("mapped_dim", "100", "integer >= 1", "channels after the mapping layer"),
    key("branch_width", "60", "integer >= 1", "channels per branch"),
    key("activation", "mish", "mish|relu", "activation function"),
    key("spatial_block", "asymmetric", "asymmetric|symmetric", "spatial residual kernels (3x1,1x3) or (3x3,3x3)"),
    key("distance", "squared_euclidean", "euclidean|squared_euclidean", "feature-prototype distance"),
    key("episodes", "10000", "integer >= 1", "iterations, each one source and one target episode"),
    key("learning_rate", "0.001", "real > 0", "Adam step size"),
    key("C", "0", "integer >= 0", "ways per episode; 0 uses the target class count"),
    key("N_s", "1", "integer >= 1", "support samples per class"),
    key("N_q", "19", "integer >= 1", "query samples per class"),
    key("align_batch", "0", "integer >= 0", "alignment batch size; 0 uses C*(N_s+N_q)"),
    key("use_qpl", "true", "true|false", "query-prototype contrastive terms"),
    key("use_mmd", "true", "true|false", "MMD alignment term"),
    key("adam_beta1", "0.9", "real in [0, 1)", "first-moment decay"),
    key("adam_beta2", "0.999", "real in [0, 1)", "second-moment decay"),
    key("adam_eps", "1e-8", "real > 0", "Adam denominator offset"),
    key("grad_clip", "0", "real >= 0", "global gradient-norm cap; 0 disables"),
    key("mmd_scales", "0.25,0.5,1,2,4", "comma list of reals > 0", "Gaussian kernel bandwidth multipliers"),
    key("mmd_bandwidth", "0", "real >= 0", "fixed base bandwidth; 0 uses the median heuristic"),
    key("checkpoint_every", "0", "integer >= 0", "checkpoint period in iterations; 0 only at the end"),
    key("eval_prototypes", "originals", "originals|augmented", "pool the inference prototypes come from"),
    key("seed", "0", "integer >= 0", "master seed"),
    key("runs", "10", "integer >= 1", "repeated runs per evaluation"),
    key("synth_classes", "5", "integer >= 2", "synthetic class count"),
    key("synth_bands_source", "20", "integer >= 4", "synthetic source bands"),
    key("synth_bands_target", "24", "integer >= 4", "synthetic target bands"),
    key("synth_height", "64", "integer >= 1", "synthetic scene height"),
    key("synth_width", "64", "integer >= 1", "synthetic scene width"),
    key("synth_bumps", "3", "integer >= 1", "Gaussian bumps per signature"),
    key("synth_blobs_per_class", "3", "integer >= 1", "label blobs per class"),
    key("synth_coverage", "0.75", "real in [0.5, 1]", "fraction of labeled pixels"),
    key("synth_noise_std", "0.05", "real >= 0", "pixel noise std"),
    key("synth_min_separation", "1.0", "real >= 0", "minimum L2 distance between signatures"),
    key("synth_shift_amplitude", "0.3", "real >= 0", "target gain warp amplitude"),
    key("synth_offset_scale", "0.5", "real >= 0", "target offset as a multiple of the amplitude"),
];

pub fn key_spec(name: &str) -> Option<&'static KeySpec> {
    KEYS.iter().find(|k| k.name == name)
}

fn unknown_key(name: &str) -> Error {
    let names: Vec<&str> = KEYS.iter().map(|k| k.name).collect();
    Error::Config(format!("unknown config key `{name}`; valid keys: {}", names.join(", ")))
}

/// Registry table for `--help`: every key with its default and domain.
pub fn keys_help() -> String {
    let mut s = String::from("Config keys (key = value; default; domain):\n");
    for k in KEYS {
        let default = if k.default.is_empty() { "<none>" } else { k.default };
        let _ = writeln!(s, "  {:<22} {:<18} {:<30} {}", k.name, default, k.domain, k.help);
    }
    s
}

/// Resolves a config file name, falling back to [`CONFIG_DIR_ENV`].
pub fn resolve_config_path(path: &Path) -> Result<PathBuf> {
    if path.exists() {
        return Ok(path.to_path_buf());
    }
    if path.is_relative() {
        if let Some(dir) = std::env::var_os(CONFIG_DIR_ENV) {
            let candidate = Path::new(&dir).join(path);
            if candidate.exists() {
                return Ok(candidate);
            }
        }
    }
    Err(Error::MissingPath(path.to_path_buf()))
}

/// Key/value pairs over the registry defaults. Relative paths resolve
/// against `base_dir` (the config file's directory).
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    values: BTreeMap<&'static str, String>,
    base_dir: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self { values: KEYS.iter().map(|k| (k.name, k.default.to_string())).collect(), base_dir: PathBuf::from(".") }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let path = resolve_config_path(path)?;
        let text = std::fs::read_to_string(&path)?;
        let mut cfg = Self::default();
        cfg.apply_text(&text)?;
        if let Some(dir) = path.parent() {
            cfg.base_dir = dir.to_path_buf();
        }
        Ok(cfg)
    }

    pub fn with_base_dir(mut self, dir: impl Into<PathBuf>) -> Self {
        self.base_dir = dir.into();
        self
    }

    /// Applies `key = value` lines; `#` starts a comment.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected `key = value`, got {raw:?}", n + 1)))?;
            self.set(k.trim(), v.trim())?;
        }
        Ok(())
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let spec = key_spec(key).ok_or_else(|| unknown_key(key))?;
        self.values.insert(spec.name, value.to_string());
        Ok(())
    }

    /// Parses `key=value`.
    pub fn set_pair(&mut self, pair: &str) -> Result<()> {
        let (k, v) =
            pair.split_once('=').ok_or_else(|| Error::Config(format!("override must be key=value, got {pair:?}")))?;
        self.set(k.trim(), v.trim())
    }

    pub fn get(&self, key: &str) -> &str {
        self.values.get(key).map(String::as_str).unwrap_or_else(|| panic!("unregistered key {key}"))
    }

    /// Every key, one `key = value` line each, in registry order.
    pub fn to_text(&self) -> String {
        KEYS.iter().map(|k| format!("{} = {}\n", k.name, self.get(k.name))).collect()
    }

    fn bad(&self, key: &str, value: &str) -> Error {
        let domain = key_spec(key).map_or("", |k| k.domain);
        Error::Config(format!("`{key}` must be {domain}, got {value:?}"))
    }

    fn usize(&self, key: &str) -> Result<usize> {
        let v = self.get(key);
        v.parse().map_err(|_| self.bad(key, v))
    }

    fn u64(&self, key: &str) -> Result<u64> {
        let v = self.get(key);
        v.parse().map_err(|_| self.bad(key, v))
    }

    fn f64(&self, key: &str) -> Result<f64> {
        let v = self.get(key);
        v.parse::<f64>().ok().filter(|x| x.is_finite()).ok_or_else(|| self.bad(key, v))
    }

    fn bool(&self, key: &str) -> Result<bool> {
        match self.get(key) {
            "true" | "1" | "yes" | "on" => Ok(true),
            "false" | "0" | "no" | "off" => Ok(false),
            v => Err(self.bad(key, v)),
        }
    }

    fn choice<T: Copy>(&self, key: &str, options: &[(&str, T)]) -> Result<T> {
        let v = self.get(key);
        options.iter().find(|(n, _)| *n == v).map(|&(_, t)| t).ok_or_else(|| self.bad(key, v))
    }

    pub fn path(&self, key: &str) -> Option<PathBuf> {
        let v = self.get(key);
        if v.is_empty() {
            return None;
        }
        let p = Path::new(v);
        Some(if p.is_absolute() { p.to_path_buf() } else { self.base_dir.join(p) })
    }

    pub fn require_path(&self, key: &str) -> Result<PathBuf> {
        self.path(key).ok_or_else(|| Error::Config(format!("`{key}` is required")))
    }

    pub fn seed(&self) -> Result<u64> {
        self.u64("seed")
    }

    pub fn runs(&self) -> Result<usize> {
        let r = self.usize("runs")?;
        if r == 0 {
            return Err(self.bad("runs", "0"));
        }
        Ok(r)
    }

    pub fn dataset(&self) -> String {
        self.get("dataset").to_string()
    }

    pub fn normalization(&self) -> Result<Normalization> {
        self.choice("normalize", &[("minmax", Normalization::MinMax), ("zscore", Normalization::ZScore)])
    }

    pub fn arch(&self) -> Result<ArchConfig> {
        let arch = ArchConfig {
            mapped_dim: self.usize("mapped_dim")?,
            branch_width: self.usize("branch_width")?,
            patch_size: self.usize("patch_size")?,
            activation: self.choice("activation", &[("mish", Activation::Mish), ("relu", Activation::Relu)])?,
            spatial_block: self.choice(
                "spatial_block",
                &[("asymmetric", SpatialBlock::Asymmetric), ("symmetric", SpatialBlock::Symmetric)],
            )?,
            distance: self.choice(
                "distance",
                &[("euclidean", DistanceMode::Euclidean), ("squared_euclidean", DistanceMode::SquaredEuclidean)],
            )?,
        };
        arch.validate()?;
        Ok(arch)
    }

    pub fn kernel(&self) -> Result<KernelConfig> {
        let raw = self.get("mmd_scales");
        let scales = raw
            .split(',')
            .map(|s| s.trim().parse::<f64>())
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(|_| self.bad("mmd_scales", raw))?;
        let bw = self.f64("mmd_bandwidth")?;
        let kernel = KernelConfig { scales, bandwidth: (bw > 0.0).then_some(bw) };
        kernel.validate()?;
        Ok(kernel)
    }

    pub fn train(&self) -> Result<TrainConfig> {
        let clip = self.f64("grad_clip")?;
        let cfg = TrainConfig {
            episodes: self.usize("episodes")?,
            learning_rate: self.f64("learning_rate")?,
            ways: self.usize("C")?,
            shots: self.usize("N_s")?,
            queries: self.usize("N_q")?,
            align_batch: self.usize("align_batch")?,
            use_qpl: self.bool("use_qpl")?,
            use_mmd: self.bool("use_mmd")?,
            beta1: self.f64("adam_beta1")?,
            beta2: self.f64("adam_beta2")?,
            adam_eps: self.f64("adam_eps")?,
            grad_clip: (clip > 0.0).then_some(clip),
            kernel: self.kernel()?,
            checkpoint_every: self.usize("checkpoint_every")?,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn data(&self) -> Result<DataConfig> {
        let cfg = DataConfig {
            patch_size: self.usize("patch_size")?,
            source_min_class: self.usize("min_class")?,
            source_per_class: self.usize("source_per_class")?,
            labeled_per_class: self.usize("target_labeled")?,
            augment_to: self.usize("augment_to")?,
            noise_scale: self.f64("noise_scale")?,
        };
        if cfg.source_per_class == 0 || cfg.source_per_class > cfg.source_min_class {
            return Err(self.bad("source_per_class", self.get("source_per_class")));
        }
        if cfg.augment_to < cfg.labeled_per_class {
            return Err(self.bad("augment_to", self.get("augment_to")));
        }
        if cfg.noise_scale < 0.0 {
            return Err(self.bad("noise_scale", self.get("noise_scale")));
        }
        Ok(cfg)
    }

    pub fn pipeline(&self) -> Result<PipelineConfig> {
        let cfg = PipelineConfig {
            arch: self.arch()?,
            train: self.train()?,
            data: self.data()?,
            eval_prototypes: self.get("eval_prototypes").parse::<EvalPrototypes>()?,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn synth_spec(&self) -> Result<SynthSpec> {
        let spec = SynthSpec {
            classes: self.usize("synth_classes")?,
            bands_source: self.usize("synth_bands_source")?,
            bands_target: self.usize("synth_bands_target")?,
            height: self.usize("synth_height")?,
            width: self.usize("synth_width")?,
            bumps: self.usize("synth_bumps")?,
            blobs_per_class: self.usize("synth_blobs_per_class")?,
            coverage: self.f64("synth_coverage")?,
            noise_std: self.f64("synth_noise_std")?,
            min_separation: self.f64("synth_min_separation")?,
            shift_amplitude: self.f64("synth_shift_amplitude")?,
            offset_scale: self.f64("synth_offset_scale")?,
        };
        spec.validate().map_err(|e| Error::Config(e.to_string()))?;
        Ok(spec)
    }

    pub fn format(&self, domain: &str) -> Result<DataFormat> {
        match self.get("format") {
            "raw" => Ok(DataFormat::Raw),
            "mat" => Ok(DataFormat::Mat {
                cube_var: self.get(&format!("{domain}_cube_var")).to_string(),
                labels_var: self.get(&format!("{domain}_labels_var")).to_string(),
                labels_path: self.path(&format!("{domain}_labels_path")),
            }),
            v => Err(self.bad("format", v)),
        }
    }

    /// Parses every key, so a bad value fails before any work starts.
    pub fn validate_all(&self) -> Result<()> {
        self.pipeline()?;
        self.synth_spec()?;
        self.normalization()?;
        self.format("source")?;
        self.format("target")?;
        self.seed()?;
        self.runs()?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn registry_defaults_mirror_module_defaults() {
        let cfg = RunConfig::default();
        assert_eq!(cfg.pipeline().unwrap(), PipelineConfig::default());
        assert_eq!(cfg.synth_spec().unwrap(), SynthSpec::default());
        assert_eq!(cfg.normalization().unwrap(), Normalization::MinMax);
        assert_eq!(cfg.runs().unwrap(), 10);
    }

    #[test]
    fn help_lists_every_key_with_default_and_domain() {
        let help = keys_help();
        for k in KEYS {
            let line = help.lines().find(|l| l.split_whitespace().next() == Some(k.name)).unwrap();
            assert!(line.contains(k.domain), "{}", k.name);
            if !k.default.is_empty() {
                assert!(line.contains(k.default), "{}", k.name);
            }
        }
    }

    #[test]
    fn registry_names_are_unique() {
        let mut names: Vec<&str> = KEYS.iter().map(|k| k.name).collect();
        names.sort_unstable();
        names.dedup();
        assert_eq!(names.len(), KEYS.len());
    }

    #[test]
    fn text_parsing_and_overrides() {
        let mut cfg = RunConfig::default();
        cfg.apply_text("# comment\nepisodes = 100  # trailing\n\nuse_mmd=false\n").unwrap();
        cfg.set_pair("N_q=10").unwrap();
        let t = cfg.train().unwrap();
        assert_eq!((t.episodes, t.use_mmd, t.queries), (100, false, 10));
    }

    #[test]
    fn unknown_key_lists_valid_keys() {
        let err = RunConfig::default().set("epochs", "3").unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("epochs") && msg.contains("episodes") && msg.contains("N_q"));
        assert_eq!(err.exit_code(), 2);
    }

    #[test]
    fn domain_violations_are_config_errors() {
        for (k, v) in [("patch_size", "8"), ("learning_rate", "-1"), ("activation", "gelu"), ("use_qpl", "maybe")] {
            let mut cfg = RunConfig::default();
            cfg.set(k, v).unwrap();
            let err = cfg.validate_all().unwrap_err();
            assert_eq!(err.exit_code(), 2, "{k}={v}: {err}");
        }
    }
}
