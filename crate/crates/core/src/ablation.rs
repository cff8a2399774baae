//! Comparison studies: several loss or input configurations trained on the
//! same data with the same seed and budget, then scored on held-out
//! sequences.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::data::{Dataset, InputFields};
use crate::error::{Error, Result};
use crate::infer::{evaluate_sequences, SequenceMetrics, Upscaler};
use crate::losses::TemporalVariant;
use crate::plot::{bar_chart, plot_rows};
use crate::train::{eval_discriminator_balance, train, ExperimentConfig, MetricsRow};

/// Batches of held-out tiles used for the discriminator balance.
const BALANCE_BATCHES: usize = 8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Preset {
    /// Supervised mean squared error only, no adversarial training.
    L2Only,
    /// Spatial discriminator, no temporal term.
    DsOnly,
    /// Spatial discriminator plus the L2 temporal term.
    DsL2t,
    /// Spatial discriminator plus a temporal discriminator on raw triplets.
    DsDtUnaligned,
    /// Spatial discriminator plus the advection-aligned temporal discriminator.
    Full,
    InputsRho,
    InputsRhoV,
    InputsRhoVW,
    FeaturePositive,
    FeatureZero,
    FeatureNegative,
}

impl Preset {
    /// Applies the preset on top of `base`. Input presets keep the base loss
    /// terms; feature presets keep the base temporal term.
    pub fn apply(self, base: &ExperimentConfig) -> ExperimentConfig {
        let mut c = base.clone();
        let l = &mut c.losses;
        let feature_mag = l
            .feature
            .iter()
            .map(|w| w.abs())
            .fold(0.0, f64::max)
            .max(1e-5);
        let mut inputs = |f: InputFields| {
            c.train.inputs = f;
            c.model.generator.input_channels = f.channels(c.model.generator.dim);
        };
        match self {
            Preset::InputsRho => inputs(InputFields::Rho),
            Preset::InputsRhoV => inputs(InputFields::RhoV),
            Preset::InputsRhoVW => inputs(InputFields::RhoVW),
            _ => {}
        }
        let l = &mut c.losses;
        match self {
            Preset::L2Only => {
                l.spatial_gan = false;
                l.temporal = TemporalVariant::None;
                l.l1 = 0.0;
                l.l2 = 1.0;
                l.feature.iter_mut().for_each(|w| *w = 0.0);
            }
            Preset::DsOnly => l.temporal = TemporalVariant::None,
            Preset::DsL2t => l.temporal = TemporalVariant::L2t,
            Preset::DsDtUnaligned => l.temporal = TemporalVariant::DtUnaligned,
            Preset::Full => l.temporal = TemporalVariant::DtAligned,
            Preset::FeaturePositive => l.feature.iter_mut().for_each(|w| *w = feature_mag),
            Preset::FeatureZero => l.feature.iter_mut().for_each(|w| *w = 0.0),
            Preset::FeatureNegative => l.feature.iter_mut().for_each(|w| *w = -feature_mag),
            Preset::InputsRho | Preset::InputsRhoV | Preset::InputsRhoVW => {}
        }
        c
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AblationRun {
    pub name: String,
    pub preset: Preset,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AblationSuite {
    /// Shared settings; the desk configuration when omitted.
    #[serde(default = "ExperimentConfig::desk")]
    pub base: ExperimentConfig,
    pub runs: Vec<AblationRun>,
}

impl AblationSuite {
    /// The temporal comparison: no temporal term, L2 temporal, unaligned
    /// and aligned temporal discriminator.
    pub fn temporal(base: ExperimentConfig) -> Self {
        let runs = [
            ("ds_only", Preset::DsOnly),
            ("ds_l2t", Preset::DsL2t),
            ("ds_dt_unaligned", Preset::DsDtUnaligned),
            ("full", Preset::Full),
        ]
        .map(|(name, preset)| AblationRun {
            name: name.into(),
            preset,
        })
        .to_vec();
        Self { base, runs }
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let s: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        s.validate()?;
        Ok(s)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("suite serializes")
    }

    pub fn validate(&self) -> Result<()> {
        if self.runs.is_empty() {
            return Err(Error::Config("suite has no runs".into()));
        }
        for (i, r) in self.runs.iter().enumerate() {
            if r.name.is_empty()
                || !r
                    .name
                    .chars()
                    .all(|c| c.is_ascii_alphanumeric() || c == '_' || c == '-')
            {
                return Err(Error::Config(format!(
                    "run name {:?} is not a plain identifier",
                    r.name
                )));
            }
            if self.runs[..i].iter().any(|o| o.name == r.name) {
                return Err(Error::Config(format!("duplicate run name {}", r.name)));
            }
            r.preset.apply(&self.base).validate()?;
        }
        Ok(())
    }

    /// Resolved configuration of every run. All share seed, data settings
    /// and iteration budget by construction.
    pub fn configs(&self) -> Vec<(String, ExperimentConfig)> {
        self.runs
            .iter()
            .map(|r| (r.name.clone(), r.preset.apply(&self.base)))
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub name: String,
    pub preset: Preset,
    pub metrics: SequenceMetrics,
    /// Mean spatial and temporal discriminator outputs on held-out tiles.
    pub ds_mean: f64,
    pub dt_mean: f64,
    pub seconds: f64,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub iterations: usize,
    pub seed: u64,
    pub rows: Vec<AblationRow>,
    /// False when any run failed; its row then carries the error.
    pub complete: bool,
}

impl AblationReport {
    pub fn row(&self, name: &str) -> Option<&AblationRow> {
        self.rows.iter().find(|r| r.name == name)
    }

    pub fn to_markdown(&self) -> String {
        let mut s = format!(
            "{} iterations, seed {}{}\n\n",
            self.iterations,
            self.seed,
            if self.complete { "" } else { ", INCOMPLETE" }
        );
        s.push_str("| run | temporal (advected) | temporal (raw) | PSNR dB | detail (mean grad) | mass | reference mass | D_s | D_t | seconds |\n");
        s.push_str("|---|---|---|---|---|---|---|---|---|---|\n");
        for r in &self.rows {
            if let Some(e) = &r.error {
                let _ = writeln!(s, "| {} | failed: {e} ||||||||| {:.0} |", r.name, r.seconds);
                continue;
            }
            let m = &r.metrics;
            let _ = writeln!(
                s,
                "| {} | {:.4e} | {:.4e} | {:.2} | {:.4e} | {:.2} | {:.2} | {:.3} | {:.3} | {:.0} |",
                r.name,
                m.temporal_advected,
                m.temporal_raw,
                m.psnr,
                m.detail,
                m.mass,
                m.reference_mass,
                r.ds_mean,
                r.dt_mean,
                r.seconds
            );
        }
        s.push_str("\nDetail is the mean density-gradient magnitude of the output, a proxy.\n");
        s
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        #[derive(Serialize)]
        struct Flat<'a> {
            name: &'a str,
            frames: usize,
            temporal_advected: f64,
            temporal_raw: f64,
            psnr: f64,
            detail: f64,
            mass: f64,
            reference_mass: f64,
            ds_mean: f64,
            dt_mean: f64,
            seconds: f64,
            error: &'a str,
        }
        let mut w = csv::Writer::from_path(path).map_err(|e| Error::format(path, e.to_string()))?;
        for r in &self.rows {
            let m = &r.metrics;
            w.serialize(Flat {
                name: &r.name,
                frames: m.frames,
                temporal_advected: m.temporal_advected,
                temporal_raw: m.temporal_raw,
                psnr: m.psnr,
                detail: m.detail,
                mass: m.mass,
                reference_mass: m.reference_mass,
                ds_mean: r.ds_mean,
                dt_mean: r.dt_mean,
                seconds: r.seconds,
                error: r.error.as_deref().unwrap_or(""),
            })
            .map_err(|e| Error::format(path, e.to_string()))?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }

    /// Writes `report.csv`, `report.md`, `report.json` and one bar chart per
    /// metric, bars in row order.
    pub fn write(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        self.write_csv(&dir.join("report.csv"))?;
        let md = dir.join("report.md");
        fs::write(&md, self.to_markdown()).map_err(|e| Error::io(&md, e))?;
        let js = dir.join("report.json");
        fs::write(
            &js,
            serde_json::to_vec_pretty(self).expect("report serializes"),
        )
        .map_err(|e| Error::io(&js, e))?;
        let metrics: [(&str, fn(&SequenceMetrics) -> f64); 5] = [
            ("temporal_advected", |m| m.temporal_advected),
            ("temporal_raw", |m| m.temporal_raw),
            ("psnr", |m| m.psnr),
            ("detail", |m| m.detail),
            ("mass", |m| m.mass),
        ];
        for (name, get) in metrics {
            let values: Vec<f64> = self.rows.iter().map(|r| get(&r.metrics)).collect();
            bar_chart(&dir.join(format!("{name}.png")), &values)?;
        }
        Ok(())
    }
}

/// Trains and scores one run. Metrics come from `test`.
fn run_one(
    config: &ExperimentConfig,
    train_data: &Dataset,
    test_data: &Dataset,
    dir: Option<&Path>,
    progress: &mut dyn FnMut(&MetricsRow),
) -> Result<(SequenceMetrics, f64, f64)> {
    let outcome = train(train_data, config, dir, |r| progress(r))?;
    if let Some(d) = dir {
        plot_rows(&outcome.metrics, &d.join("plots"))?;
    }
    let up = Upscaler::from_checkpoint(&outcome.checkpoint);
    let metrics = evaluate_sequences(&up, test_data, None)?;
    let (ds, dt) = eval_discriminator_balance(
        &outcome.checkpoint.models,
        config,
        test_data,
        BALANCE_BATCHES,
        config.train.seed,
    )?;
    Ok((metrics, ds, dt))
}

/// Trains every run of the suite in order. `iterations` overrides the
/// shared budget. A failed run is recorded in its row and the report is
/// marked incomplete; the remaining runs still execute.
pub fn run_suite(
    suite: &AblationSuite,
    iterations: Option<usize>,
    train_data: &Dataset,
    test_data: &Dataset,
    out_dir: Option<&Path>,
    mut progress: impl FnMut(&str, &MetricsRow),
) -> Result<AblationReport> {
    let mut suite = suite.clone();
    if let Some(n) = iterations {
        suite.base.train.iterations = n;
    }
    suite.validate()?;
    if let Some(d) = out_dir {
        fs::create_dir_all(d).map_err(|e| Error::io(d, e))?;
        let p = d.join("suite.toml");
        fs::write(&p, suite.to_toml()).map_err(|e| Error::io(&p, e))?;
    }
    let mut rows = Vec::with_capacity(suite.runs.len());
    for (run, (name, config)) in suite.runs.iter().zip(suite.configs()) {
        let dir: Option<PathBuf> = out_dir.map(|d| d.join(&name));
        let start = Instant::now();
        let result = run_one(&config, train_data, test_data, dir.as_deref(), &mut |r| {
            progress(&name, r)
        });
        let seconds = start.elapsed().as_secs_f64();
        rows.push(match result {
            Ok((metrics, ds_mean, dt_mean)) => AblationRow {
                name,
                preset: run.preset,
                metrics,
                ds_mean,
                dt_mean,
                seconds,
                error: None,
            },
            Err(e) => AblationRow {
                name,
                preset: run.preset,
                metrics: SequenceMetrics::default(),
                ds_mean: f64::NAN,
                dt_mean: f64::NAN,
                seconds,
                error: Some(e.to_string()),
            },
        });
    }
    let report = AblationReport {
        iterations: suite.base.train.iterations,
        seed: suite.base.train.seed,
        complete: rows.iter().all(|r| r.error.is_none()),
        rows,
    };
    if let Some(d) = out_dir {
        report.write(d)?;
    }
    Ok(report)
}
