use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use serde::de::DeserializeOwned;
use serde::Serialize;

use tempogan::ablation::{run_suite, AblationSuite};
use tempogan::augment::{apply_directional, apply_passive, sample_transform, AugmentRanges};
use tempogan::checkpoint::Checkpoint;
use tempogan::data::Dataset;
use tempogan::infer::{
    evaluate_sequences, modify_velocity, Bundle, RecursiveOptions, TilePlan, Upscaler,
    VelocityControl,
};
use tempogan::plot::plot_metrics;
use tempogan::rng::substream;
use tempogan::sim::{generate_dataset, GenConfig, Split};
use tempogan::train::{evaluate, train, ExperimentConfig, CONFIG_COPY, METRICS_FILE};
use tempogan::{tgf, GridField};

const CONFIG_HELP: &str = "\
Configs are TOML. Keys missing from the file keep their defaults (desk scale
for `train` unless --reference) and unknown keys are rejected.
`--set key=value` overrides one dotted key after the file is read, e.g.
`--set train.iterations=500 --set losses.temporal=\"none\"`.
`train --print-config` and `gen-data --print-config` print every setting
with its default.

Exit codes: 0 success, 1 runtime failure, 2 usage error.";

#[derive(Parser)]
#[command(name = "tempogan", version, about = "Temporally coherent GAN super-resolution for smoke", after_help = CONFIG_HELP)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate paired low/high-resolution smoke and write a dataset.
    GenData(GenDataArgs),
    /// Train generator and discriminators on a dataset.
    Train(TrainArgs),
    /// Upscale low-resolution frames with a trained checkpoint.
    Infer(InferArgs),
    /// Score a checkpoint on held-out frames, or run an ablation suite.
    Eval(EvalArgs),
    /// Write randomly augmented tiles of one field for inspection.
    AugmentPreview(AugmentArgs),
    /// Draw loss curves from a metrics file.
    Plot(PlotArgs),
}

#[derive(Args)]
struct Overrides {
    /// TOML config file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override one config key (repeatable).
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// Print the resolved config and exit.
    #[arg(long)]
    print_config: bool,
}

#[derive(Args)]
struct GenDataArgs {
    /// Output directory; defaults to $TEMPOGAN_DATA_DIR.
    #[arg(
        long,
        env = "TEMPOGAN_DATA_DIR",
        required_unless_present = "print_config"
    )]
    out: Option<PathBuf>,
    /// Number of simulations.
    #[arg(long)]
    sims: Option<usize>,
    /// Frames simulated per scene.
    #[arg(long)]
    frames: Option<usize>,
    /// High-resolution cells per axis.
    #[arg(long)]
    res: Option<usize>,
    /// Resolution factor between the paired grids.
    #[arg(long)]
    scale: Option<usize>,
    /// Base seed (overrides the config's `seed`).
    #[arg(long)]
    seed: Option<u64>,
    #[command(flatten)]
    cfg: Overrides,
}

#[derive(Args)]
struct TrainArgs {
    /// Dataset directory or manifest; defaults to $TEMPOGAN_DATA_DIR.
    #[arg(
        long,
        env = "TEMPOGAN_DATA_DIR",
        required_unless_present = "print_config"
    )]
    manifest: Option<PathBuf>,
    /// Run directory for config copy, metrics and checkpoints.
    #[arg(long, required_unless_present = "print_config")]
    out: Option<PathBuf>,
    /// Base seed (overrides `train.seed`).
    #[arg(long)]
    seed: Option<u64>,
    /// Start from the full-size reference defaults instead of the desk-scale ones.
    #[arg(long)]
    reference: bool,
    /// Report progress every this many iterations.
    #[arg(long, default_value_t = 100)]
    log_every: usize,
    #[command(flatten)]
    cfg: Overrides,
}

#[derive(Args)]
struct VelocityArgs {
    /// Multiply input velocities by this factor.
    #[arg(long, conflicts_with = "vel_zero")]
    vel_scale: Option<f32>,
    /// Replace input velocities with zero.
    #[arg(long)]
    vel_zero: bool,
}

impl VelocityArgs {
    fn control(&self) -> Option<VelocityControl> {
        match (self.vel_zero, self.vel_scale) {
            (true, _) => Some(VelocityControl::Zero),
            (false, Some(s)) => Some(VelocityControl::Scale(s)),
            (false, None) => None,
        }
    }
}

#[derive(Args)]
struct InferArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Directory with density.tgf and velocity.tgf, or with one such
    /// subdirectory per frame.
    #[arg(long = "in")]
    input: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Low-resolution tile edge; whole-domain inference when omitted.
    #[arg(long)]
    tile: Option<usize>,
    /// Tile overlap in low-resolution cells.
    #[arg(long, default_value_t = tempogan::infer::DEFAULT_OVERLAP, requires = "tile")]
    overlap: usize,
    /// Apply the generator this many times to its own output.
    #[arg(long, value_name = "T")]
    recursive: Option<usize>,
    /// Halve the resolution between recursive passes.
    #[arg(long, requires = "recursive")]
    downsample_between: bool,
    #[command(flatten)]
    velocity: VelocityArgs,
}

#[derive(Args)]
struct EvalArgs {
    /// Checkpoint to score.
    #[arg(long, conflicts_with = "suite", required_unless_present = "suite")]
    checkpoint: Option<PathBuf>,
    /// Ablation suite TOML; trains and scores every run.
    #[arg(long)]
    suite: Option<PathBuf>,
    /// Dataset directory or manifest; defaults to $TEMPOGAN_DATA_DIR.
    #[arg(long, env = "TEMPOGAN_DATA_DIR")]
    manifest: PathBuf,
    /// Output directory for report files (required with --suite).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Override the suite's iteration budget.
    #[arg(long, requires = "suite")]
    iterations: Option<usize>,
    /// Discriminator evaluation batches.
    #[arg(long, default_value_t = 8)]
    batches: usize,
    #[command(flatten)]
    velocity: VelocityArgs,
}

#[derive(Args)]
struct AugmentArgs {
    /// A TGF1 field: one channel is treated as density, `dim` channels as
    /// velocity.
    #[arg(long = "in")]
    input: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
    /// Tile edge; half the smallest extent when omitted.
    #[arg(long)]
    tile: Option<usize>,
    /// Number of augmented tiles.
    #[arg(long, default_value_t = 4)]
    count: usize,
}

#[derive(Args)]
struct PlotArgs {
    /// metrics.csv, or a run directory containing it.
    #[arg(long)]
    metrics: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

/// Parses `value` as a TOML value, falling back to a bare string.
fn parse_value(value: &str) -> toml::Value {
    let doc = format!("v = {value}");
    match toml::from_str::<toml::Table>(&doc) {
        Ok(mut t) => t.remove("v").expect("parsed key"),
        Err(_) => toml::Value::String(value.to_string()),
    }
}

fn set_key(table: &mut toml::Table, assignment: &str) -> Result<()> {
    let (key, value) = assignment
        .split_once('=')
        .ok_or_else(|| anyhow!("override {assignment:?} is not KEY=VALUE"))?;
    let parts: Vec<&str> = key.trim().split('.').collect();
    let (last, parents) = parts.split_last().expect("split yields one part");
    let mut cur = table;
    for p in parents {
        cur = cur
            .entry(p.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()))
            .as_table_mut()
            .ok_or_else(|| anyhow!("{key}: {p} is not a table"))?;
    }
    cur.insert(last.to_string(), parse_value(value.trim()));
    Ok(())
}

fn merge(into: &mut toml::Table, from: toml::Table) {
    for (k, v) in from {
        match (into.get_mut(&k), v) {
            (Some(toml::Value::Table(a)), toml::Value::Table(b)) => merge(a, b),
            (_, v) => {
                into.insert(k, v);
            }
        }
    }
}

/// `base`, then the config file, then overrides; deserialized strictly.
fn resolve<T: Serialize + DeserializeOwned>(o: &Overrides, base: &T) -> Result<T> {
    let mut table = toml::Table::try_from(base).expect("config serializes");
    if let Some(p) = &o.config {
        let text = fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
        merge(
            &mut table,
            toml::from_str(&text).with_context(|| format!("parsing {}", p.display()))?,
        );
    }
    for s in &o.set {
        set_key(&mut table, s)?;
    }
    toml::Value::Table(table)
        .try_into()
        .map_err(|e| anyhow!("invalid config: {e}"))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn gen_data(a: GenDataArgs) -> Result<()> {
    let mut cfg: GenConfig = resolve(&a.cfg, &GenConfig::default())?;
    cfg.sims = a.sims.unwrap_or(cfg.sims);
    cfg.frames = a.frames.unwrap_or(cfg.frames);
    cfg.res = a.res.unwrap_or(cfg.res);
    cfg.scale = a.scale.unwrap_or(cfg.scale);
    cfg.seed = a.seed.unwrap_or(cfg.seed);
    let text = toml::to_string(&cfg)?;
    if a.cfg.print_config {
        print!("{text}");
        return Ok(());
    }
    let out = a.out.expect("required unless printing");
    let m = generate_dataset(&cfg, &out)?;
    write_text(&out.join("gen_config.toml"), &text)?;
    let train = m.frames.iter().filter(|f| f.split == Split::Train).count();
    println!(
        "{} frames kept ({} train, {} test) in {}",
        m.frames.len(),
        train,
        m.frames.len() - train,
        out.display()
    );
    Ok(())
}

fn train_cmd(a: TrainArgs) -> Result<()> {
    let base = if a.reference {
        ExperimentConfig::default()
    } else {
        ExperimentConfig::desk()
    };
    let mut cfg: ExperimentConfig = resolve(&a.cfg, &base)?;
    if let Some(s) = a.seed {
        cfg.train.seed = s;
    }
    cfg.validate()?;
    if a.cfg.print_config {
        print!("{}", cfg.to_toml());
        return Ok(());
    }
    let (manifest, run_dir) = (
        a.manifest.expect("required unless printing"),
        a.out.expect("required unless printing"),
    );
    let data = Dataset::load(&manifest, Split::Train)?;
    let every = a.log_every.max(1);
    let out = train(&data, &cfg, Some(&run_dir), |r| {
        if r.iteration % every == 0 {
            eprintln!(
                "it {:>6}  D_s {:.4}  D_t {:.4}  G {:.4}  L1 {:.4}  D_s(real/fake) {:.3}/{:.3}  D_t(real/fake) {:.3}/{:.3}",
                r.iteration, r.d_s, r.d_t, r.g_total, r.g_l1, r.ds_real, r.ds_fake, r.dt_real, r.dt_fake
            );
        }
    })?;
    if let Some(p) = out.checkpoint_path {
        println!("{}", p.display());
    }
    Ok(())
}

fn frame_dirs(input: &Path) -> Result<Vec<(Option<String>, PathBuf)>> {
    if input.join("density.tgf").exists() {
        return Ok(vec![(None, input.to_path_buf())]);
    }
    let mut dirs: Vec<_> = fs::read_dir(input)
        .with_context(|| format!("reading {}", input.display()))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.join("density.tgf").exists())
        .collect();
    dirs.sort();
    if dirs.is_empty() {
        bail!("{} holds no density.tgf", input.display());
    }
    Ok(dirs
        .into_iter()
        .map(|p| (p.file_name().map(|n| n.to_string_lossy().into_owned()), p))
        .collect())
}

fn infer_cmd(a: InferArgs) -> Result<()> {
    let ck = Checkpoint::load(&a.checkpoint)?;
    let up = Upscaler::from_checkpoint(&ck);
    let control = a.velocity.control();
    fs::create_dir_all(&a.out).with_context(|| format!("creating {}", a.out.display()))?;
    write_text(&a.out.join(CONFIG_COPY), &ck.config.to_toml())?;
    for (name, dir) in frame_dirs(&a.input)? {
        let mut x = Bundle::load(&dir)?;
        if let Some(c) = &control {
            x = modify_velocity(&x, c)?;
        }
        let y = match a.recursive {
            Some(t) => {
                let opts = RecursiveOptions {
                    downsample_between: a.downsample_between,
                    tiling: a.tile.map(|t| (t, a.overlap)),
                    ..RecursiveOptions::default()
                };
                up.infer_recursive(&x, t, &opts)?
            }
            None => match a.tile {
                Some(t) => up.infer_tiled(&x, &TilePlan::new(x.shape(), t, a.overlap)?)?,
                None => up.infer_full(&x)?,
            },
        };
        let target = match &name {
            Some(n) => a.out.join(n),
            None => a.out.clone(),
        };
        tgf::write(&target.join("density.tgf"), &y)?;
        println!("{} -> {:?}", dir.display(), y.shape());
    }
    Ok(())
}

fn print_rows<T: Serialize>(rows: &[T]) -> Result<()> {
    let mut w = csv::Writer::from_writer(std::io::stdout());
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

#[derive(Serialize)]
struct EvalRow {
    frames: usize,
    temporal_advected: f64,
    temporal_raw: f64,
    psnr: f64,
    detail: f64,
    mass: f64,
    reference_mass: f64,
    ds_real: f64,
    ds_fake: f64,
    dt_real: f64,
    dt_fake: f64,
    d_s: f64,
    d_t: f64,
    g_total: f64,
    g_l1: f64,
}

fn eval_cmd(a: EvalArgs) -> Result<()> {
    let test = Dataset::load(&a.manifest, Split::Test)?;
    if let Some(suite_path) = &a.suite {
        let out = a
            .out
            .as_ref()
            .ok_or_else(|| anyhow!("--suite needs --out"))?;
        let text = fs::read_to_string(suite_path)
            .with_context(|| format!("reading {}", suite_path.display()))?;
        let suite = AblationSuite::from_toml(&text)?;
        let train_data = Dataset::load(&a.manifest, Split::Train)?;
        let report = run_suite(
            &suite,
            a.iterations,
            &train_data,
            &test,
            Some(out),
            |name, r| {
                if r.iteration % 100 == 0 {
                    eprintln!("{name}: it {} G {:.4}", r.iteration, r.g_total);
                }
            },
        )?;
        print!("{}", report.to_markdown());
        if !report.complete {
            bail!("suite incomplete; see {}", out.join("report.md").display());
        }
        return Ok(());
    }
    let path = a
        .checkpoint
        .as_ref()
        .expect("clap requires checkpoint or suite");
    let ck = Checkpoint::load(path)?;
    let up = Upscaler::from_checkpoint(&ck);
    let control = a.velocity.control();
    let m = evaluate_sequences(&up, &test, control.as_ref())?;
    let d = evaluate(
        &ck.models,
        &ck.config,
        &test,
        a.batches,
        ck.config.train.seed,
    )?;
    let row = EvalRow {
        frames: m.frames,
        temporal_advected: m.temporal_advected,
        temporal_raw: m.temporal_raw,
        psnr: m.psnr,
        detail: m.detail,
        mass: m.mass,
        reference_mass: m.reference_mass,
        ds_real: d.ds_real,
        ds_fake: d.ds_fake,
        dt_real: d.dt_real,
        dt_fake: d.dt_fake,
        d_s: d.d_s,
        d_t: d.d_t,
        g_total: d.g.total,
        g_l1: d.g.l1,
    };
    if let Some(out) = &a.out {
        fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
        let p = out.join("eval.csv");
        let mut w = csv::Writer::from_path(&p)?;
        w.serialize(&row)?;
        w.flush()?;
        write_text(&out.join(CONFIG_COPY), &ck.config.to_toml())?;
    }
    print_rows(&[row])
}

fn augment_cmd(a: AugmentArgs) -> Result<()> {
    let f = tgf::read(&a.input)?;
    let dim = f.dim();
    let directional = match f.channels() {
        1 => false,
        c if c == dim => true,
        c => bail!(
            "{} has {c} channels; expected 1 or {dim}",
            a.input.display()
        ),
    };
    let edge = a
        .tile
        .unwrap_or_else(|| f.shape().iter().min().copied().unwrap_or(1) / 2);
    if edge == 0 {
        bail!("tile edge must be positive");
    }
    let tile = vec![edge; dim];
    let origin: Vec<usize> = f
        .shape()
        .iter()
        .map(|&n| n.saturating_sub(edge) / 2)
        .collect();
    fs::create_dir_all(&a.out).with_context(|| format!("creating {}", a.out.display()))?;
    tgf::write(&a.out.join("before.tgf"), &f.crop(&origin, &tile)?)?;
    let ranges = AugmentRanges::default();
    let mut log = Vec::new();
    for i in 0..a.count {
        let mut rng = substream(a.seed, &[i as u64]);
        let t = sample_transform(&mut rng, &ranges, &tile, f.shape(), 1)?;
        let out: GridField = if directional {
            apply_directional(&f, &t, &tile)?
        } else {
            apply_passive(&f, &t, &tile)?
        };
        tgf::write(&a.out.join(format!("after_{i:03}.tgf")), &out)?;
        log.push(serde_json::json!({
            "index": i,
            "scale": t.scale(),
            "angle_deg": t.angle_deg(),
            "flips": t.flips(),
            "offset": t.offset(),
        }));
    }
    write_text(
        &a.out.join("transforms.json"),
        &serde_json::to_string_pretty(&log)?,
    )?;
    println!(
        "{} tiles of {:?} written to {}",
        a.count,
        tile,
        a.out.display()
    );
    Ok(())
}

fn plot_cmd(a: PlotArgs) -> Result<()> {
    let metrics = if a.metrics.is_dir() {
        a.metrics.join(METRICS_FILE)
    } else {
        a.metrics.clone()
    };
    for p in plot_metrics(&metrics, &a.out)? {
        println!("{}", p.display());
    }
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenData(a) => gen_data(a),
        Command::Train(a) => train_cmd(a),
        Command::Infer(a) => infer_cmd(a),
        Command::Eval(a) => eval_cmd(a),
        Command::AugmentPreview(a) => augment_cmd(a),
        Command::Plot(a) => plot_cmd(a),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(2)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
