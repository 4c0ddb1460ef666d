//! Command-line front end.
//!
//! Every subcommand reads a JSON config, writes into `--out`, and finishes
//! with `manifest.json` (the files written) and `run.json` (config, seed,
//! version and wall-clock time). Numerical outputs depend only on the config
//! and seed.

use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use log::info;
use serde::{Deserialize, Serialize};

use crate::analysis::{build_report, wildcard_prevalence, Report, ReportOptions};
use crate::error::{Error, Result};
use crate::gibbs::{GibbsConfig, GibbsSampler};
use crate::io::{self, format_number, Manifest};
use crate::model::{Hyperparams, WeightStack};
use crate::rng::{stream, Purpose};
use crate::synthgen::{generate_categorical, generate_images, CategoricalGenConfig, ImageGenConfig};
use crate::vi::{binarize, run_vi, Initialization, Schedule};

pub use crate::io::load_dataset;

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_RUNTIME: i32 = 2;

#[derive(Debug, Parser)]
#[command(name = "ibpcat", version, about = "Latent-feature models for categorical data")]
struct Cli {
    /// Worker threads (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct Common {
    /// JSON run configuration.
    #[arg(long)]
    config: PathBuf,
    /// Output directory, created if missing.
    #[arg(long)]
    out: PathBuf,
    /// Overrides the seed in the config.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Noisy composites of base images.
    SynthImages(Common),
    /// Categorical data with planted features.
    SynthCat(Common),
    /// Collapsed Gibbs sampler.
    Gibbs(Common),
    /// Truncated variational inference.
    Vi(Common),
    /// Tables and curves from a gibbs or vi output directory.
    Analyze(Common),
}

/// Configuration of `gibbs`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GibbsRunConfig {
    pub dataset: PathBuf,
    pub sampler: GibbsConfig,
}

/// Starting point of `vi`.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum ViInit {
    #[default]
    Random,
    /// Z CSV and weights JSON, e.g. from a short Gibbs run.
    Features { z: PathBuf, weights: PathBuf },
}

fn default_threshold() -> f64 {
    0.5
}

/// Configuration of `vi`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ViRunConfig {
    pub dataset: PathBuf,
    pub truncation: usize,
    pub hyper: Hyperparams,
    #[serde(default)]
    pub schedule: Schedule,
    #[serde(default)]
    pub init: ViInit,
    /// ν above this marks a feature as present in the emitted Z.
    #[serde(default = "default_threshold")]
    pub binarize_threshold: f64,
}

/// Configuration of `analyze`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AnalyzeConfig {
    /// Output directory of a gibbs or vi run.
    pub input: PathBuf,
    /// Defaults to the dataset recorded by the input run.
    #[serde(default)]
    pub dataset: Option<PathBuf>,
    /// Defaults to the hyperparameters recorded by the input run.
    #[serde(default)]
    pub hyper: Option<Hyperparams>,
    #[serde(default)]
    pub report: ReportOptions,
}

/// Any subcommand's configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "command", rename_all = "kebab-case")]
pub enum RunConfig {
    SynthImages(ImageGenConfig),
    SynthCat(CategoricalGenConfig),
    Gibbs(GibbsRunConfig),
    Vi(ViRunConfig),
    Analyze(AnalyzeConfig),
}

impl RunConfig {
    pub fn name(&self) -> &'static str {
        match self {
            RunConfig::SynthImages(_) => "synth-images",
            RunConfig::SynthCat(_) => "synth-cat",
            RunConfig::Gibbs(_) => "gibbs",
            RunConfig::Vi(_) => "vi",
            RunConfig::Analyze(_) => "analyze",
        }
    }

    pub fn seed(&self) -> Option<u64> {
        match self {
            RunConfig::SynthImages(c) => Some(c.seed),
            RunConfig::SynthCat(c) => Some(c.seed),
            RunConfig::Gibbs(c) => Some(c.sampler.hyper.seed),
            RunConfig::Vi(c) => Some(c.hyper.seed),
            RunConfig::Analyze(_) => None,
        }
    }

    fn set_seed(&mut self, seed: u64) {
        match self {
            RunConfig::SynthImages(c) => c.seed = seed,
            RunConfig::SynthCat(c) => c.seed = seed,
            RunConfig::Gibbs(c) => c.sampler.hyper.seed = seed,
            RunConfig::Vi(c) => c.hyper.seed = seed,
            RunConfig::Analyze(_) => {}
        }
    }

    /// Makes relative paths relative to `base`.
    fn resolve_paths(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        match self {
            RunConfig::Gibbs(c) => fix(&mut c.dataset),
            RunConfig::Vi(c) => {
                fix(&mut c.dataset);
                if let ViInit::Features { z, weights } = &mut c.init {
                    fix(z);
                    fix(weights);
                }
            }
            RunConfig::Analyze(c) => {
                fix(&mut c.input);
                if let Some(d) = &mut c.dataset {
                    fix(d);
                }
            }
            RunConfig::SynthImages(_) | RunConfig::SynthCat(_) => {}
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            RunConfig::SynthImages(c) => c.validate(),
            RunConfig::SynthCat(c) => c.validate(),
            RunConfig::Gibbs(c) => c.sampler.validate(),
            RunConfig::Vi(c) => {
                c.hyper.validate()?;
                if c.truncation == 0 {
                    return Err(Error::Config("truncation must be >= 1".into()));
                }
                if !(0.0..1.0).contains(&c.binarize_threshold) {
                    return Err(Error::Config("binarize_threshold must lie in [0, 1)".into()));
                }
                Ok(())
            }
            RunConfig::Analyze(c) => {
                if let Some(h) = &c.hyper {
                    h.validate()?;
                }
                if let Some(t) = c.report.flip_threshold {
                    if !(0.0..=1.0).contains(&t) {
                        return Err(Error::Config("flip_threshold must lie in [0, 1]".into()));
                    }
                }
                Ok(())
            }
        }
    }
}

/// Reads the config at `path` for subcommand `command`. The file holds the
/// command's own settings; a `"command"` tag is optional.
pub fn load_config(path: &Path, command: &str) -> Result<RunConfig> {
    let mut value: serde_json::Value = io::read_json(path)?;
    let obj = value
        .as_object_mut()
        .ok_or_else(|| Error::Config(format!("{}: expected a JSON object", path.display())))?;
    match obj.get("command").and_then(|c| c.as_str()) {
        Some(tag) if tag != command => {
            return Err(Error::Config(format!(
                "{}: config is for '{tag}', not '{command}'",
                path.display()
            )))
        }
        Some(_) => {}
        None => {
            obj.insert("command".into(), command.into());
        }
    }
    let mut config: RunConfig =
        serde_json::from_value(value).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
    config.resolve_paths(path.parent().unwrap_or(Path::new(".")));
    Ok(config)
}

/// Reproducibility record written as `run.json`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunRecord {
    pub command: String,
    pub version: String,
    pub seed: Option<u64>,
    pub threads: usize,
    pub wall_clock_seconds: f64,
    pub config: RunConfig,
}

/// Parses `argv` (program name first), runs the subcommand, returns the
/// process exit code.
pub fn dispatch<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
        }
    };
    let _ = env_logger::Builder::from_env(env_logger::Env::new().filter_or("IBPCAT_LOG", "warn")).try_init();
    match execute(cli) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e}");
            EXIT_RUNTIME
        }
    }
}

fn execute(cli: Cli) -> Result<()> {
    if let Some(n) = cli.threads {
        if n == 0 {
            return Err(Error::Config("--threads must be >= 1".into()));
        }
        // Fails only if a pool already exists, e.g. a second dispatch in one process.
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
    let (name, common) = match &cli.command {
        Command::SynthImages(c) => ("synth-images", c),
        Command::SynthCat(c) => ("synth-cat", c),
        Command::Gibbs(c) => ("gibbs", c),
        Command::Vi(c) => ("vi", c),
        Command::Analyze(c) => ("analyze", c),
    };
    let mut config = load_config(&common.config, name)?;
    if let Some(seed) = common.seed {
        config.set_seed(seed);
    }
    run(&config, &common.out)
}

/// Runs a validated config into `out`; returns once the manifest and run
/// record are written.
pub fn run(config: &RunConfig, out: &Path) -> Result<()> {
    config.validate()?;
    std::fs::create_dir_all(out)?;
    let start = Instant::now();
    let mut manifest = Manifest::new(config.name());
    match config {
        RunConfig::SynthImages(c) => synth_images(c, out, &mut manifest)?,
        RunConfig::SynthCat(c) => synth_cat(c, out, &mut manifest)?,
        RunConfig::Gibbs(c) => gibbs(c, out, &mut manifest)?,
        RunConfig::Vi(c) => vi(c, out, &mut manifest)?,
        RunConfig::Analyze(c) => analyze(c, out, &mut manifest)?,
    }
    let record = RunRecord {
        command: config.name().to_string(),
        version: env!("CARGO_PKG_VERSION").to_string(),
        seed: config.seed(),
        threads: rayon::current_num_threads(),
        wall_clock_seconds: start.elapsed().as_secs_f64(),
        config: config.clone(),
    };
    io::write_json(&out.join("run.json"), &record)?;
    manifest.record("run.json", "run");
    io::write_json(&out.join("manifest.json"), &manifest)?;
    info!("{} finished in {:.2}s", config.name(), record.wall_clock_seconds);
    Ok(())
}

fn synth_images(c: &ImageGenConfig, out: &Path, m: &mut Manifest) -> Result<()> {
    let (x, z) = generate_images(c, &mut stream(c.seed, Purpose::Generator, 0, 0))?;
    m.emit(out, "dataset.csv", "dataset", &io::dataset_to_string(&x))?;
    m.emit(out, "true_z.csv", "true_z", &io::z_to_string(&z))?;
    let mut bases = String::new();
    for (k, img) in c.base_images.iter().enumerate() {
        m.emit(out, &format!("base_{}.pgm", k + 1), "base_image", &pgm(img.width, img.height, &img.pixels))?;
        let row: Vec<&str> = img.pixels.iter().map(|&w| if w { "1" } else { "0" }).collect();
        bases.push_str(&row.join(","));
        bases.push('\n');
    }
    m.emit(out, "base_images.csv", "base_images", &bases)?;
    Ok(())
}

fn pgm(width: usize, height: usize, white: &[bool]) -> String {
    let mut s = format!("P2\n{width} {height}\n1\n");
    for row in white.chunks(width) {
        let line: Vec<&str> = row.iter().map(|&w| if w { "1" } else { "0" }).collect();
        s.push_str(&line.join(" "));
        s.push('\n');
    }
    s
}

fn synth_cat(c: &CategoricalGenConfig, out: &Path, m: &mut Manifest) -> Result<()> {
    let (x, z, w) = generate_categorical(c, &mut stream(c.seed, Purpose::Generator, 0, 0))?;
    m.emit(out, "dataset.csv", "dataset", &io::dataset_to_string(&x))?;
    m.emit(out, "true_z.csv", "true_z", &io::z_to_string(&z))?;
    io::save_weights(&out.join("true_weights.json"), &w)?;
    m.record("true_weights.json", "true_weights");
    Ok(())
}

fn gibbs(c: &GibbsRunConfig, out: &Path, m: &mut Manifest) -> Result<()> {
    let x = load_dataset(&c.dataset)?;
    let z0 = crate::gibbs::initial_state(x.n_rows(), &c.sampler);
    let trace = GibbsSampler::new(&x, z0, c.sampler.clone())?.run(|iter, z| {
        info!("iteration {} K+ = {}", iter + 1, z.k_active());
    })?;
    m.emit(out, "trace.csv", "trace", &io::trace_to_string(&trace.k_active, &trace.log_marginal))?;
    m.emit(out, "z.csv", "z", &io::z_to_string(&trace.final_z))?;
    io::save_weights(&out.join("weights.json"), &trace.final_weights)?;
    m.record("weights.json", "weights");
    Ok(())
}

fn vi(c: &ViRunConfig, out: &Path, m: &mut Manifest) -> Result<()> {
    let x = load_dataset(&c.dataset)?;
    let init = match &c.init {
        ViInit::Random => Initialization::Random,
        ViInit::Features { z, weights } => Initialization::Features {
            z: io::load_z(z)?,
            weights: io::load_weights(weights)?,
        },
    };
    let result = run_vi(&x, c.truncation, &c.hyper, init, &c.schedule)?;
    info!("vi stopped after {} cycles, converged = {}", result.bound_trace.len() - 1, result.converged);
    m.emit(out, "bound.csv", "bound_trace", &io::bound_trace_to_string(&result.bound_trace))?;
    let nu = result.state.nu_matrix();
    let columns: Vec<String> = (1..=nu.ncols()).map(|k| format!("f{k}")).collect();
    let rows: Vec<(String, Vec<Option<f64>>)> = io::matrix_rows(&nu)
        .into_iter()
        .enumerate()
        .map(|(n, r)| ((n + 1).to_string(), r))
        .collect();
    m.emit(out, "nu.csv", "nu", &io::labelled_table("row", &columns, &rows))?;
    m.emit(out, "z.csv", "z", &io::z_to_string(&binarize(&result.state, c.binarize_threshold)))?;
    let phi = WeightStack::from_matrices(result.state.phi.clone())?;
    io::save_weights(&out.join("weights.json"), &phi)?;
    m.record("weights.json", "weights");
    io::write_json(&out.join("state.json"), &result.state.to_snapshot())?;
    m.record("state.json", "state");
    Ok(())
}

fn dataset_and_hyper(c: &AnalyzeConfig) -> Result<(PathBuf, Hyperparams)> {
    let record: Option<RunRecord> = io::read_json(&c.input.join("run.json")).ok();
    let from_run = record.as_ref().and_then(|r| match &r.config {
        RunConfig::Gibbs(g) => Some((g.dataset.clone(), g.sampler.hyper)),
        RunConfig::Vi(v) => Some((v.dataset.clone(), v.hyper)),
        _ => None,
    });
    let dataset = c
        .dataset
        .clone()
        .or_else(|| from_run.as_ref().map(|f| f.0.clone()))
        .ok_or_else(|| Error::Config("no dataset given and none recorded in the input run".into()))?;
    let hyper = c
        .hyper
        .or_else(|| from_run.map(|f| f.1))
        .ok_or_else(|| Error::Config("no hyper given and none recorded in the input run".into()))?;
    Ok((dataset, hyper))
}

fn analyze(c: &AnalyzeConfig, out: &Path, m: &mut Manifest) -> Result<()> {
    let input: Manifest = io::read_json(&c.input.join("manifest.json"))?;
    let file = |kind: &str| {
        input
            .find(kind)
            .map(|e| c.input.join(&e.name))
            .ok_or_else(|| Error::Config(format!("input manifest lists no '{kind}' file")))
    };
    let z = io::load_z(&file("z")?)?;
    let weights = io::load_weights(&file("weights")?)?;
    let (dataset, hyper) = dataset_and_hyper(c)?;
    let x = load_dataset(&dataset)?;
    let report = build_report(&x, &z, &weights, &hyper, &c.report)?;
    emit_report(&report, out, m)
}

fn feature_names(k: usize) -> Vec<String> {
    (1..=k).map(|j| format!("f{j}")).collect()
}

/// Writes every table and curve of `report` into `out`.
pub fn emit_report(report: &Report, out: &Path, m: &mut Manifest) -> Result<()> {
    let k = report.z.k_active();
    let n = report.z.n_rows() as f64;
    let dims: Vec<String> = (1..=report.baseline.len()).map(|d| format!("d{d}")).collect();

    let prevalence: Vec<(String, Vec<Option<f64>>)> = (0..k)
        .map(|j| (format!("f{}", j + 1), vec![Some(report.prevalence[j]), Some(report.single_prevalence[j])]))
        .collect();
    m.emit(
        out,
        "prevalence.csv",
        "prevalence",
        &io::labelled_table("feature", &["prevalence".into(), "only_feature".into()], &prevalence),
    )?;

    let names = feature_names(k);
    let label_rows = |rows: Vec<Vec<Option<f64>>>| -> Vec<(String, Vec<Option<f64>>)> {
        names.iter().cloned().zip(rows).collect()
    };
    if let Some((empirical, product)) = &report.cooccurrence {
        m.emit(
            out,
            "cooccurrence.csv",
            "cooccurrence",
            &io::labelled_table("feature", &names, &label_rows(io::matrix_rows(empirical))),
        )?;
        m.emit(
            out,
            "cooccurrence_independent.csv",
            "cooccurrence_independent",
            &io::labelled_table("feature", &names, &label_rows(io::matrix_rows(product))),
        )?;
    }
    m.emit(
        out,
        "conditional.csv",
        "conditional",
        &io::labelled_table("given", &names, &label_rows(report.conditional.clone())),
    )?;

    let mut census = String::from("rank,pattern,count,fraction,at_least_fraction\n");
    for (i, (pattern, count)) in report.census.iter().enumerate() {
        let at_least = wildcard_prevalence(&report.z, pattern)?;
        census.push_str(&format!(
            "{},{},{count},{},{}\n",
            i + 1,
            pattern.label(),
            format_number(*count as f64 / n),
            format_number(at_least)
        ));
    }
    m.emit(out, "census.csv", "census", &census)?;

    let mut probs: Vec<(String, Vec<Option<f64>>)> =
        vec![("empirical".into(), report.baseline.iter().map(|&b| Some(b)).collect())];
    let mut ratios = Vec::new();
    for curve in &report.curves {
        let label = curve.pattern.label();
        probs.push((label.clone(), curve.probabilities.iter().map(|&p| Some(p)).collect()));
        ratios.push((label, curve.ratios.clone()));
    }
    m.emit(out, "probabilities.csv", "probabilities", &io::labelled_table("pattern", &dims, &probs))?;
    m.emit(out, "ratios.csv", "ratios", &io::labelled_table("pattern", &dims, &ratios))?;

    m.emit(out, "z.csv", "z", &io::z_to_string(&report.z))?;
    io::save_weights(&out.join("weights.json"), &report.weights)?;
    m.record("weights.json", "weights");
    let summary = serde_json::json!({
        "flipped_features": report.flipped.iter().map(|k| k + 1).collect::<Vec<_>>(),
        "weights_refit": report.weights_refit,
        "target_categories": report.targets.iter().map(|t| t + 1).collect::<Vec<_>>(),
    });
    io::write_json(&out.join("report.json"), &summary)?;
    m.record("report.json", "report");
    Ok(())
}
