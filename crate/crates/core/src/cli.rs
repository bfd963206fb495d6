//! `hsi-fsl` command line: train, eval, ablate, sweep, plot, synth, info.

use std::ffi::OsString;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, CommandFactory, FromArgMatches, Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::config::{keys_help, RunConfig, CONFIG_DIR_ENV};
use crate::error::{Error, Result};
use crate::evaluation::{
    ablation_suite, ablation_table, evaluate_run, labeled_count_sweep, prepare_run, repeated_eval_with, Datasets,
    Evaluation, Interrupted, MetricsReport, RunMetrics, Scene, SweepPoint, ABLATION_SWITCHES,
};
use crate::hsi_data::{encode_raw, load_cube, load_labels, normalize_cube};
use crate::network::{count_flops, count_params, Domain};
use crate::synthgen::{gen_cross_domain_pair, majority_baseline, nearest_signature_accuracy};
use crate::training::{load_checkpoint, save_checkpoint, train_from, HistoryRecord, TrainHistory, TrainState};
use crate::write_atomic;

#[derive(Parser, Debug)]
#[command(name = "hsi-fsl", version, about = "Cross-domain few-shot hyperspectral classification")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone, Default)]
struct Common {
    /// Config file (`key = value` lines). Relative names are also looked up
    /// in $HSI_FSL_CONFIG_DIR.
    #[arg(long, short)]
    config: Option<PathBuf>,
    /// Override any config key; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Shorthand for `--set seed=N`.
    #[arg(long)]
    seed: Option<u64>,
    /// Shorthand for `--set episodes=N`.
    #[arg(long)]
    episodes: Option<usize>,
    /// Shorthand for `--set runs=N`.
    #[arg(long)]
    runs: Option<usize>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train one model and write checkpoint, history and manifest.
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        out: PathBuf,
        /// Continue from a checkpoint written by an earlier `train`.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Repeated train+test runs, or a single checkpoint with --checkpoint.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        out: PathBuf,
        /// Evaluate this model on its training seed's test pool (runs is ignored).
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// OA for the four QPL/MMD switch combinations.
    Ablate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        out: PathBuf,
    },
    /// OA against the labeled sample count.
    Sweep {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        out: PathBuf,
        /// Labeled counts, comma separated.
        #[arg(long, value_delimiter = ',', default_value = "1,2,3,4,5")]
        labeled: Vec<usize>,
        /// One series per QPL/MMD combination instead of the configured one.
        #[arg(long)]
        all_switches: bool,
    },
    /// Line chart (SVG) of a sweep result.
    Plot {
        /// sweep.json written by `sweep`.
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Write a synthetic source/target scene pair.
    Synth {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        out: PathBuf,
    },
    /// Parameter and FLOP counts of the configured network.
    Info {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value_t = 128)]
        source_bands: usize,
        #[arg(long, default_value_t = 200)]
        target_bands: usize,
    },
}

fn command() -> clap::Command {
    Cli::command().after_help(format!(
        "{}\nConfig files are looked up in ${CONFIG_DIR_ENV} when not found as given.\n\
         Exit codes: 0 success, 1 runtime/divergence, 2 usage/config, 3 data format.",
        keys_help()
    ))
}

/// Runs the CLI on `args` (including the program name) and returns the exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match command().try_get_matches_from(args).and_then(|m| Cli::from_arg_matches(&m)) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    match dispatch(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

fn dispatch(cmd: Command) -> Result<()> {
    match cmd {
        Command::Train { common, out, resume } => cmd_train(&common, &out, resume.as_deref()),
        Command::Eval { common, out, checkpoint } => cmd_eval(&common, &out, checkpoint.as_deref()),
        Command::Ablate { common, out } => cmd_ablate(&common, &out),
        Command::Sweep { common, out, labeled, all_switches } => cmd_sweep(&common, &out, &labeled, all_switches),
        Command::Plot { input, out } => cmd_plot(&input, &out),
        Command::Synth { common, out } => cmd_synth(&common, &out),
        Command::Info { common, source_bands, target_bands } => cmd_info(&common, source_bands, target_bands),
    }
}

fn build_config(common: &Common) -> Result<RunConfig> {
    let mut cfg = match &common.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    for pair in &common.overrides {
        cfg.set_pair(pair)?;
    }
    if let Some(s) = common.seed {
        cfg.set("seed", &s.to_string())?;
    }
    if let Some(e) = common.episodes {
        cfg.set("episodes", &e.to_string())?;
    }
    if let Some(r) = common.runs {
        cfg.set("runs", &r.to_string())?;
    }
    cfg.validate_all()?;
    Ok(cfg)
}

/// Loads and normalizes both scenes named by the config.
pub fn load_datasets(cfg: &RunConfig) -> Result<Datasets> {
    let norm = cfg.normalization()?;
    let load = |domain: &str| -> Result<Scene> {
        let path = cfg.require_path(&format!("{domain}_path"))?;
        let format = cfg.format(domain)?;
        let (cube, labels) = load_cube(&path, &format)?;
        let test_mask = match (domain, cfg.path("target_test_path")) {
            ("target", Some(p)) => Some(load_labels(&p, &format)?),
            _ => None,
        };
        Ok(Scene { cube: normalize_cube(&cube, norm), labels, test_mask })
    };
    Ok(Datasets { name: cfg.dataset(), source: load("source")?, target: load("target")? })
}

fn ensure_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    Ok(())
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut bytes = serde_json::to_vec_pretty(value)?;
    bytes.push(b'\n');
    write_atomic(path, &bytes)
}

fn environment() -> serde_json::Value {
    json!({
        "package": env!("CARGO_PKG_NAME"),
        "version": env!("CARGO_PKG_VERSION"),
        "os": std::env::consts::OS,
        "arch": std::env::consts::ARCH,
        "threads": 1,
    })
}

fn checkpoint_meta(cfg: &RunConfig, seed: u64) -> serde_json::Value {
    json!({ "seed": seed, "config": cfg.to_text() })
}

fn cmd_train(common: &Common, out: &Path, resume: Option<&Path>) -> Result<()> {
    let cfg = build_config(common)?;
    let pipeline = cfg.pipeline()?;
    let data = load_datasets(&cfg)?;
    let seed = cfg.seed()?;
    let (pools, fresh) = prepare_run(&data, &pipeline, seed)?;
    let mut state = match resume {
        None => fresh,
        Some(path) => {
            let (state, meta) = load_checkpoint(path)?;
            check_compatible(&state, &fresh)?;
            if meta.get("seed").and_then(|s| s.as_u64()) != Some(seed) {
                return Err(Error::Config(format!(
                    "checkpoint was trained with seed {}, config has {seed}",
                    meta.get("seed").map_or("?".to_string(), |s| s.to_string())
                )));
            }
            state
        }
    };
    ensure_dir(out)?;
    let ckpt_path = out.join("checkpoint.psft");
    let history_path = out.join("history.jsonl");
    let mut earlier: Vec<HistoryRecord> = Vec::new();
    if let Some(ck) = resume {
        let beside_checkpoint = ck.parent().map(|d| d.join("history.jsonl"));
        let source = [Some(history_path.clone()), beside_checkpoint].into_iter().flatten().find(|p| p.exists());
        if let Some(text) = source.and_then(|p| std::fs::read_to_string(p).ok()) {
            for line in text.lines().filter(|l| !l.trim().is_empty()) {
                let r: HistoryRecord = serde_json::from_str(line)?;
                if r.iteration < state.iteration {
                    earlier.push(r);
                }
            }
        }
    }
    let start = state.iteration;
    let meta = checkpoint_meta(&cfg, seed);
    let t0 = Instant::now();
    let mut sink = |s: &TrainState| save_checkpoint(&ckpt_path, s, meta.clone());
    let result = train_from(&mut state, &pools.source, &pools.augmented, &pipeline.train, Some(&mut sink));
    let history = result?;
    save_checkpoint(&ckpt_path, &state, meta.clone())?;
    let mut all = TrainHistory { records: earlier, ..TrainHistory::default() };
    all.records.extend(history.records.iter().copied());
    let mut buf = Vec::new();
    all.write_jsonl(&mut buf)?;
    write_atomic(&history_path, &buf)?;
    let arch = pipeline.arch;
    let (sb, tb) = (data.source.cube.bands(), data.target.cube.bands());
    write_json(
        &out.join("manifest.json"),
        &json!({
            "command": "train",
            "seed": seed,
            "dataset": cfg.dataset(),
            "config": cfg.to_text(),
            "resumed_from_iteration": resume.map(|_| start),
            "iterations": state.iteration,
            "params": count_params(&arch, sb, tb),
            "flops_source": count_flops(&arch, sb),
            "flops_target": count_flops(&arch, tb),
            "pools": {
                "source": pools.source.len(),
                "target_labeled": pools.labeled.len(),
                "target_augmented": pools.augmented.len(),
                "target_test": pools.test.len(),
            },
            "seconds": t0.elapsed().as_secs_f64(),
            "environment": environment(),
        }),
    )?;
    if let Some(last) = history.records.last() {
        println!(
            "trained {} iterations; last {} step: fsl {:.4} qpl_inter {:.4} qpl_intra {:.4} mmd {:.4} total {:.4}",
            state.iteration,
            last.loss.domain,
            last.loss.fsl,
            last.loss.qpl_inter,
            last.loss.qpl_intra,
            last.loss.mmd,
            last.loss.total
        );
    }
    println!("wrote {}", out.display());
    Ok(())
}

fn check_compatible(loaded: &TrainState, fresh: &TrainState) -> Result<()> {
    let (a, b) = (&loaded.params, &fresh.params);
    if a.arch != b.arch {
        return Err(Error::Version(format!(
            "checkpoint architecture {:?} differs from the configured {:?}",
            a.arch, b.arch
        )));
    }
    for d in [Domain::Source, Domain::Target] {
        if a.input_bands(d) != b.input_bands(d) {
            return Err(Error::Version(format!(
                "checkpoint expects {} {d} bands, data has {}",
                a.input_bands(d),
                b.input_bands(d)
            )));
        }
    }
    Ok(())
}

#[derive(Serialize)]
struct EvalFile<'a> {
    report: &'a MetricsReport,
    oa: String,
    aa: String,
    kappa: String,
    confusion: &'a [Evaluation],
}

fn write_report(out: &Path, report: &MetricsReport, evals: &[Evaluation]) -> Result<()> {
    write_atomic(&out.join("report.txt"), report.table().as_bytes())?;
    write_json(
        &out.join("report.json"),
        &EvalFile {
            report,
            oa: report.oa().percent(),
            aa: report.aa().percent(),
            kappa: report.kappa().percent(),
            confusion: evals,
        },
    )
}

fn cmd_eval(common: &Common, out: &Path, checkpoint: Option<&Path>) -> Result<()> {
    let cfg = build_config(common)?;
    let pipeline = cfg.pipeline()?;
    let data = load_datasets(&cfg)?;
    ensure_dir(out)?;
    let (report, evals) = match checkpoint {
        Some(path) => {
            let (state, meta) = load_checkpoint(path)?;
            let seed = meta
                .get("seed")
                .and_then(|s| s.as_u64())
                .ok_or_else(|| Error::Version("checkpoint metadata lacks the run seed".into()))?;
            let (pools, fresh) = prepare_run(&data, &pipeline, seed)?;
            check_compatible(&state, &fresh)?;
            let ev = evaluate_run(&state.params, &pools, &pipeline)?;
            let report = MetricsReport {
                dataset: data.name.clone(),
                runs: vec![RunMetrics { run: 0, seed, metrics: ev.metrics.clone() }],
            };
            (report, vec![ev])
        }
        None => {
            let mut evals = Vec::new();
            let result = repeated_eval_with(&data, &pipeline, cfg.runs()?, cfg.seed()?, |o| {
                eprintln!("run seed {}: OA {:.2}", o.seed, o.evaluation.metrics.oa * 100.0);
                evals.push(o.evaluation.clone());
            });
            match result {
                Ok(report) => (report, evals),
                Err(interrupted) => {
                    let Interrupted { partial, run, error } = *interrupted;
                    write_report(out, &partial, &evals)?;
                    eprintln!("run {run} failed; {} completed runs written", partial.runs.len());
                    return Err(error);
                }
            }
        }
    };
    write_report(out, &report, &evals)?;
    print!("{}", report.table());
    Ok(())
}

fn cmd_ablate(common: &Common, out: &Path) -> Result<()> {
    let cfg = build_config(common)?;
    let pipeline = cfg.pipeline()?;
    let data = load_datasets(&cfg)?;
    ensure_dir(out)?;
    let rows = ablation_suite(&data, &pipeline, cfg.runs()?, cfg.seed()?).map_err(|e| e.error)?;
    let table = ablation_table(&rows);
    write_atomic(&out.join("ablation.txt"), table.as_bytes())?;
    write_json(&out.join("ablation.json"), &rows)?;
    print!("{table}");
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepSeries {
    pub label: String,
    pub use_qpl: bool,
    pub use_mmd: bool,
    pub points: Vec<SweepPoint>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepFile {
    pub dataset: String,
    pub series: Vec<SweepSeries>,
}

fn switch_label(use_qpl: bool, use_mmd: bool) -> String {
    let mark = |b: bool| if b { "on" } else { "off" };
    format!("QPL {} / MMD {}", mark(use_qpl), mark(use_mmd))
}

fn cmd_sweep(common: &Common, out: &Path, labeled: &[usize], all_switches: bool) -> Result<()> {
    if labeled.is_empty() {
        return Err(Error::Config("--labeled needs at least one value".into()));
    }
    let cfg = build_config(common)?;
    let pipeline = cfg.pipeline()?;
    let data = load_datasets(&cfg)?;
    ensure_dir(out)?;
    let switches: Vec<(bool, bool)> =
        if all_switches { ABLATION_SWITCHES.to_vec() } else { vec![(pipeline.train.use_qpl, pipeline.train.use_mmd)] };
    let (runs, seed) = (cfg.runs()?, cfg.seed()?);
    let mut series = Vec::new();
    for (use_qpl, use_mmd) in switches {
        let mut c = pipeline.clone();
        c.train.use_qpl = use_qpl;
        c.train.use_mmd = use_mmd;
        let points = labeled_count_sweep(&data, &c, labeled, runs, seed);
        series.push(SweepSeries { label: switch_label(use_qpl, use_mmd), use_qpl, use_mmd, points });
    }
    let file = SweepFile { dataset: data.name.clone(), series };
    let mut table = String::new();
    let mut failures = 0;
    for s in &file.series {
        for p in &s.points {
            let cell = match (&p.oa, &p.error) {
                (Some(oa), _) => oa.percent(),
                (None, Some(e)) => {
                    failures += 1;
                    format!("failed: {e}")
                }
                (None, None) => "-".into(),
            };
            let _ = writeln!(table, "{:<20} L={:<4} {}", s.label, p.labeled, cell);
        }
    }
    write_json(&out.join("sweep.json"), &file)?;
    write_atomic(&out.join("sweep.txt"), table.as_bytes())?;
    print!("{table}");
    if failures > 0 {
        return Err(Error::Incomplete(format!("{failures} sweep point(s) failed; the rest were written")));
    }
    Ok(())
}

/// Renders OA (percent) against labeled count, one line per series.
pub fn render_sweep_svg(file: &SweepFile) -> Result<String> {
    use plotters::prelude::*;

    let points: Vec<(usize, f64)> = file
        .series
        .iter()
        .flat_map(|s| s.points.iter().filter_map(|p| p.oa.map(|oa| (p.labeled, oa.mean * 100.0))))
        .collect();
    if points.is_empty() {
        return Err(Error::Config("sweep has no successful points to plot".into()));
    }
    let x_min = points.iter().map(|p| p.0).min().unwrap_or(0) as f64;
    let x_max = points.iter().map(|p| p.0).max().unwrap_or(1) as f64;
    let (x_lo, x_hi) = if x_max > x_min { (x_min, x_max) } else { (x_min - 1.0, x_max + 1.0) };
    let y_min = points.iter().map(|p| p.1).fold(f64::INFINITY, f64::min);
    let y_max = points.iter().map(|p| p.1).fold(f64::NEG_INFINITY, f64::max);
    let pad = ((y_max - y_min) * 0.1).max(1.0);
    let (y_lo, y_hi) = ((y_min - pad).max(0.0), (y_max + pad).min(100.0));

    let mut svg = String::new();
    {
        let plot_err = |e: &dyn std::fmt::Display| Error::Config(format!("plot: {e}"));
        let root = SVGBackend::with_string(&mut svg, (720, 480)).into_drawing_area();
        root.fill(&WHITE).map_err(|e| plot_err(&e))?;
        let mut chart = ChartBuilder::on(&root)
            .caption(format!("{}: OA vs labeled samples", file.dataset), ("sans-serif", 20))
            .margin(12)
            .x_label_area_size(40)
            .y_label_area_size(50)
            .build_cartesian_2d(x_lo..x_hi, y_lo..y_hi)
            .map_err(|e| plot_err(&e))?;
        chart.configure_mesh().x_desc("labeled samples per class").y_desc("OA (%)").draw().map_err(|e| plot_err(&e))?;
        for (i, s) in file.series.iter().enumerate() {
            let color = Palette99::pick(i).to_rgba();
            let line: Vec<(f64, f64)> =
                s.points.iter().filter_map(|p| p.oa.map(|oa| (p.labeled as f64, oa.mean * 100.0))).collect();
            chart
                .draw_series(LineSeries::new(line.clone(), color.stroke_width(2)))
                .map_err(|e| plot_err(&e))?
                .label(s.label.clone())
                .legend(move |(x, y)| PathElement::new(vec![(x, y), (x + 20, y)], color.stroke_width(2)));
            chart.draw_series(line.into_iter().map(|p| Circle::new(p, 4, color.filled()))).map_err(|e| plot_err(&e))?;
        }
        chart
            .configure_series_labels()
            .background_style(WHITE.mix(0.8))
            .border_style(BLACK)
            .draw()
            .map_err(|e| plot_err(&e))?;
        root.present().map_err(|e| plot_err(&e))?;
    }
    Ok(svg)
}

fn cmd_plot(input: &Path, out: &Path) -> Result<()> {
    let text = std::fs::read_to_string(input).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => Error::MissingPath(input.to_path_buf()),
        _ => Error::Io(e),
    })?;
    let file: SweepFile = serde_json::from_str(&text)?;
    let svg = render_sweep_svg(&file)?;
    if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
        ensure_dir(dir)?;
    }
    write_atomic(out, svg.as_bytes())?;
    println!("wrote {}", out.display());
    Ok(())
}

fn cmd_synth(common: &Common, out: &Path) -> Result<()> {
    let cfg = build_config(common)?;
    let spec = cfg.synth_spec()?;
    let seed = cfg.seed()?;
    let pair = gen_cross_domain_pair(&spec, &mut ChaCha8Rng::seed_from_u64(seed))?;
    ensure_dir(out)?;
    write_atomic(&out.join("source.hsi"), &encode_raw(&pair.source.cube, &pair.source.labels)?)?;
    write_atomic(&out.join("target.hsi"), &encode_raw(&pair.target.cube, &pair.target.labels)?)?;
    let smallest = pair.source.labels.pixels_by_class().values().map(Vec::len).min().unwrap_or(0);
    let per_class = smallest.min(200);
    write_json(
        &out.join("synth.json"),
        &json!({
            "seed": seed,
            "spec": spec,
            "nearest_signature_accuracy": {
                "source": nearest_signature_accuracy(&pair.source),
                "target": nearest_signature_accuracy(&pair.target),
            },
            "majority_baseline_target": majority_baseline(&pair.target.labels),
            "files": ["source.hsi", "target.hsi"],
        }),
    )?;
    let cfg_text = format!(
        "# synthetic pair, seed {seed}\ndataset = synth\nformat = raw\nsource_path = source.hsi\n\
         target_path = target.hsi\nmin_class = {per_class}\nsource_per_class = {per_class}\n"
    );
    write_atomic(&out.join("synth.cfg"), cfg_text.as_bytes())?;
    println!("wrote {}", out.display());
    Ok(())
}

fn cmd_info(common: &Common, source_bands: usize, target_bands: usize) -> Result<()> {
    let cfg = build_config(common)?;
    let arch = cfg.arch()?;
    let params = count_params(&arch, source_bands, target_bands);
    println!("architecture: {arch:?}");
    println!(
        "params (source {source_bands} bands, target {target_bands} bands): {params} ({:.2}M)",
        params as f64 / 1e6
    );
    for (name, bands) in [("source", source_bands), ("target", target_bands)] {
        let flops = count_flops(&arch, bands);
        println!("flops per {name} patch: {flops} ({:.2}M)", flops as f64 / 1e6);
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn help_mentions_every_key() {
        let help = command().render_help().to_string();
        for k in crate::config::KEYS {
            assert!(help.contains(k.name), "{}", k.name);
        }
    }

    #[test]
    fn unknown_override_is_usage_error() {
        assert_eq!(run(["hsi-fsl", "info", "--set", "nope=1"]), 2);
    }

    #[test]
    fn info_succeeds_with_defaults() {
        assert_eq!(run(["hsi-fsl", "info"]), 0);
    }
}
