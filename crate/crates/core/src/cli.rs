//! `sat` command-line interface.

use std::fmt::Write as _;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};

use crate::checkpoint::Checkpoint;
use crate::config::RunConfig;
use crate::error::{Result, SatError};
use crate::eval::{anisotropy, compare_reports, evaluate, AgeMap, EvalReport, REGION_NAMES};
use crate::model::{ForwardMode, ScoreMode};
use crate::pipeline::train_run;
use crate::synth::{generate, label_correlations, read_dataset, write_dataset, Correlation};

/// Environment variable holding the log filter.
pub const LOG_ENV: &str = "SAT_LOG";

#[derive(Debug, Parser)]
#[command(name = "sat", version, about = "Multi-region ordinal grading with a self-accumulative transformer")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic dataset from the config's data section.
    Gen(GenArgs),
    /// Train a model; writes metrics.csv and checkpoints.
    Train(TrainArgs),
    /// Evaluate a checkpoint; writes report.json and report.csv.
    Eval(EvalArgs),
    /// Paired comparison of two evaluation reports.
    Compare(CompareArgs),
    /// Dump attention matrices for one sample.
    Inspect(InspectArgs),
}

#[derive(Debug, Args)]
pub struct GenArgs {
    pub config: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Overrides data.seed.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Overrides data.num_samples.
    #[arg(long)]
    pub num_samples: Option<usize>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    pub config: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub resume: Option<PathBuf>,
    /// Stop once this many epochs have completed (counting resumed ones).
    #[arg(long)]
    pub stop_after: Option<usize>,
    /// Defaults to the config's output_dir.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum ScoreModeArg {
    Expected,
    Argmax,
}

impl From<ScoreModeArg> for ScoreMode {
    fn from(m: ScoreModeArg) -> Self {
        match m {
            ScoreModeArg::Expected => ScoreMode::Expected,
            ScoreModeArg::Argmax => ScoreMode::Argmax,
        }
    }
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    /// Cumulative-score thresholds.
    #[arg(long, num_args = 1.., default_values_t = vec![1.0])]
    pub theta: Vec<f64>,
    /// JSON file `{"knots": [[score, age], ...]}`.
    #[arg(long)]
    pub agemap: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "expected")]
    pub score_mode: ScoreModeArg,
    #[arg(long, default_value_t = 64)]
    pub batch_size: usize,
    /// Defaults to the checkpoint's directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct CompareArgs {
    #[arg(long, num_args = 2, value_names = ["A", "B"], required = true)]
    pub report: Vec<PathBuf>,
    /// Print the comparison as JSON.
    #[arg(long)]
    pub json: bool,
}

#[derive(Debug, Args)]
pub struct InspectArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub sample: usize,
    /// Defaults to the checkpoint's directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

fn emit(out: &mut dyn Write, text: &str) -> Result<()> {
    out.write_all(text.as_bytes()).map_err(|e| SatError::io("<stdout>", e))
}

fn parent_dir(path: &Path) -> PathBuf {
    path.parent().filter(|p| !p.as_os_str().is_empty()).map_or_else(|| PathBuf::from("."), Path::to_path_buf)
}

pub fn run(cli: Cli, out: &mut dyn Write) -> Result<()> {
    match cli.command {
        Command::Gen(a) => cmd_gen(a, out),
        Command::Train(a) => cmd_train(a, out),
        Command::Eval(a) => cmd_eval(a, out),
        Command::Compare(a) => cmd_compare(a, out),
        Command::Inspect(a) => cmd_inspect(a, out),
    }
}

fn cmd_gen(a: GenArgs, out: &mut dyn Write) -> Result<()> {
    let mut data_cfg = RunConfig::load(&a.config)?.data;
    if let Some(seed) = a.seed {
        data_cfg.seed = seed;
    }
    if let Some(n) = a.num_samples {
        data_cfg.num_samples = n;
    }
    data_cfg.validate()?;
    let ds = generate(&data_cfg)?;
    write_dataset(&ds, &a.out)?;
    let corr = label_correlations(&ds.samples, Correlation::Pearson);
    let mut text = format!("wrote {} samples to {}\nlabel correlation (pearson)\n", ds.len(), a.out.display());
    for (r, row) in corr.iter().enumerate() {
        let _ = write!(text, "{:<18}", REGION_NAMES.get(r).copied().unwrap_or("?"));
        for v in row {
            let _ = write!(text, " {v:7.4}");
        }
        text.push('\n');
    }
    emit(out, &text)
}

fn cmd_train(a: TrainArgs, out: &mut dyn Write) -> Result<()> {
    let cfg = RunConfig::load(&a.config)?;
    let data = read_dataset(&a.data)?;
    let resume = a.resume.as_deref().map(Checkpoint::load).transpose()?;
    let dir = a.out.unwrap_or_else(|| cfg.output_dir.clone());
    let outcome = train_run(&cfg, &data, &dir, resume, a.stop_after)?;
    let t = &outcome.trainer;
    let last = t.history.last().map_or(f64::NAN, |s| s.loss.total);
    emit(
        out,
        &format!(
            "variant {} epoch {}/{} loss {last:.6} ({})\n",
            cfg.variant.name(),
            t.epoch,
            cfg.optim.epochs,
            if outcome.finished { "finished" } else { "stopped" }
        ),
    )
}

fn cmd_eval(a: EvalArgs, out: &mut dyn Write) -> Result<()> {
    let ck = Checkpoint::load(&a.ckpt)?;
    let model = ck.model()?;
    let data = read_dataset(&a.data)?;
    let agemap = match &a.agemap {
        Some(p) => {
            let text = fs::read_to_string(p).map_err(|e| SatError::io(p, e))?;
            serde_json::from_str::<AgeMap>(&text).map_err(|e| SatError::Config(format!("{}: {e}", p.display())))?
        }
        None => AgeMap::default(),
    };
    let report = evaluate(&model, &data, &a.theta, &agemap, a.score_mode.into(), a.batch_size)?;
    let dir = a.out.unwrap_or_else(|| parent_dir(&a.ckpt));
    report.write(&dir)?;
    emit(out, &report.to_csv())
}

fn cmd_compare(a: CompareArgs, out: &mut dyn Write) -> Result<()> {
    let ra = EvalReport::read(&a.report[0])?;
    let rb = EvalReport::read(&a.report[1])?;
    let c = compare_reports(&ra, &rb)?;
    if a.json {
        return emit(out, &(serde_json::to_string_pretty(&c)? + "\n"));
    }
    let w = &c.wilcoxon;
    let mut text = format!(
        "wilcoxon signed-rank on age errors: W={} (W+={} W-={}) n={} p={} ({})\n",
        w.statistic,
        w.w_plus,
        w.w_minus,
        w.n,
        w.p_value,
        if w.exact { "exact" } else { "normal approximation" }
    );
    text.push_str("mae delta (A - B)\n");
    for (name, d) in c.regions.iter().zip(&c.region_mae_delta) {
        let _ = writeln!(text, "{name:<18} {d}");
    }
    let _ = writeln!(text, "{:<18} {}", "sum", c.sum_mae_delta);
    let _ = writeln!(text, "{:<18} {}", "baa", c.baa_mae_delta);
    emit(out, &text)
}

fn cmd_inspect(a: InspectArgs, out: &mut dyn Write) -> Result<()> {
    let ck = Checkpoint::load(&a.ckpt)?;
    let model = ck.model()?;
    let data = read_dataset(&a.data)?;
    if a.sample >= data.len() {
        return Err(SatError::Data(format!("sample {} out of range for {} samples", a.sample, data.len())));
    }
    let (tape, _, output) = model.run(&data.batch_images(&[a.sample]), ForwardMode::Eval)?;
    let records = output.records(&tape, 0);
    let dir = a.out.unwrap_or_else(|| parent_dir(&a.ckpt));
    fs::create_dir_all(&dir).map_err(|e| SatError::io(&dir, e))?;
    for rec in &records {
        let n = rec.post_softmax.shape()[1];
        let mut csv = String::new();
        for row in rec.post_softmax.data().chunks(n) {
            let cells: Vec<String> = row.iter().map(|v| v.to_string()).collect();
            csv.push_str(&cells.join(","));
            csv.push('\n');
        }
        let path = dir.join(format!("attn_L{}_H{}.csv", rec.layer, rec.head));
        fs::write(&path, csv).map_err(|e| SatError::io(&path, e))?;
    }
    let aniso = anisotropy(&records, model.config().num_regions)?;
    let mut text = format!("sample {}: wrote {} attention matrices to {}\n", a.sample, records.len(), dir.display());
    for (r, v) in aniso.iter().enumerate() {
        let _ = writeln!(text, "{:<18} {v:.6}", REGION_NAMES.get(r).copied().unwrap_or("?"));
    }
    let _ = writeln!(text, "{:<18} {:.6}", "mean", aniso.iter().sum::<f64>() / aniso.len() as f64);
    emit(out, &text)
}
