use clap::{Args, Parser, Subcommand};
use emorec::config::Config;
use emorec::data::{generate_synthetic, write_dataset, Dataset, SynthConfig};
use emorec::model::Model;
use emorec::report;
use emorec::train::{evaluate, load_checkpoint, train};
use emorec::Result;
use std::path::PathBuf;

#[derive(Parser)]
#[command(
    name = "emorec",
    version,
    about = "Uncertainty-aware multimodal multi-label emotion recognition"
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a synthetic dataset with planted label structure and per-sample noise
    GenData(GenDataArgs),
    /// Train a model and save the best-validation checkpoint
    Train(TrainArgs),
    /// Score a checkpoint on a split
    Eval(EvalArgs),
    /// Dump per-(sample, modality, label) distribution vectors as JSONL
    ExportEmbeddings(ExportArgs),
    /// Per-sample calibration table with rank correlations
    CalibReport(CalibArgs),
}

#[derive(Args)]
struct GenDataArgs {
    /// Output directory (manifest.json plus one JSONL per split)
    #[arg(long)]
    out: PathBuf,
    /// Number of samples
    #[arg(long, default_value_t = 2000)]
    n: usize,
    /// Number of labels
    #[arg(long, default_value_t = 4)]
    q: usize,
    #[arg(long, default_value_t = 42)]
    seed: u64,
    /// Dataset name recorded in the manifest
    #[arg(long, default_value = "synthetic")]
    name: String,
    /// Feature widths as visual,audio,text
    #[arg(long, default_value = "8,6,10", value_parser = parse_triple)]
    dims: (usize, usize, usize),
    #[arg(long, default_value_t = 4)]
    seq_min: usize,
    #[arg(long, default_value_t = 8)]
    seq_max: usize,
    /// Equal sequence lengths across modalities
    #[arg(long, default_value_t = false)]
    aligned: bool,
    /// Lower bound of the per-sample noise level
    #[arg(long, default_value_t = 0.1)]
    noise_low: f64,
    #[arg(long, default_value_t = 1.0)]
    noise_high: f64,
    #[arg(long, default_value_t = 0.8)]
    intensity_low: f64,
    #[arg(long, default_value_t = 1.2)]
    intensity_high: f64,
    /// Comma-separated per-label activation probabilities (defaults to a
    /// linear ramp from 0.35 down to 0.20)
    #[arg(long, value_delimiter = ',')]
    marginals: Option<Vec<f64>>,
    #[arg(long, default_value_t = 0.7)]
    train_frac: f64,
    #[arg(long, default_value_t = 0.15)]
    val_frac: f64,
}

#[derive(Args)]
struct TrainArgs {
    /// Dataset directory (from gen-data)
    #[arg(long)]
    data: PathBuf,
    /// Flat key = value config file; defaults apply when omitted
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory for checkpoint, metrics, and report
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value = "test")]
    split: String,
    /// Also compute embedding silhouette and noise correlations
    #[arg(long, default_value_t = false)]
    diagnostics: bool,
    /// Emit the machine-readable report instead of the table
    #[arg(long, default_value_t = false)]
    json: bool,
}

#[derive(Args)]
struct ExportArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value = "test")]
    split: String,
    /// Output JSONL file
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct CalibArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value = "test")]
    split: String,
    #[arg(long, default_value_t = false)]
    json: bool,
}

fn parse_triple(s: &str) -> std::result::Result<(usize, usize, usize), String> {
    let parts: Vec<&str> = s.split(',').collect();
    if parts.len() != 3 {
        return Err(format!("expected three comma-separated values, got `{s}`"));
    }
    let mut v = [0usize; 3];
    for (i, p) in parts.iter().enumerate() {
        v[i] = p
            .trim()
            .parse()
            .map_err(|e| format!("`{p}`: {e}"))?;
    }
    Ok((v[0], v[1], v[2]))
}

fn main() {
    if let Err(e) = run(Cli::parse()) {
        eprintln!("error: {e}");
        std::process::exit(1);
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.cmd {
        Cmd::GenData(a) => {
            let mut sc = SynthConfig::new(a.n, a.q, a.seed);
            sc.name = a.name;
            sc.dims = [a.dims.0, a.dims.1, a.dims.2];
            sc.seq_len = (a.seq_min, a.seq_max);
            sc.aligned = a.aligned;
            sc.noise = (a.noise_low, a.noise_high);
            sc.intensity = (a.intensity_low, a.intensity_high);
            sc.split_fracs = (a.train_frac, a.val_frac);
            if let Some(m) = a.marginals {
                sc.marginals = m;
            }
            let (manifest, samples) = generate_synthetic(&sc)?;
            write_dataset(&a.out, &manifest, &samples)?;
            for (split, ids) in &manifest.splits {
                println!("{split}: {} samples", ids.len());
            }
            println!("wrote dataset `{}` to {}", manifest.name, a.out.display());
        }
        Cmd::Train(a) => {
            let ds = Dataset::load(&a.data)?;
            let mut cfg = match &a.config {
                Some(path) => Config::from_flat(&emorec::config::FlatConfig::from_file(path)?)?,
                None => Config::default(),
            };
            cfg.apply_env()?;
            let mut model = Model::init(cfg, &ds.manifest)?;
            let art = train(&mut model, &ds, &a.out)?;
            for rec in &art.epochs {
                println!(
                    "epoch {:>3}  loss {:.4}  val miF1 {:.4}",
                    rec.epoch, rec.mean_loss.total, rec.val.classification.mi_f1
                );
            }
            println!(
                "best val miF1 {:.4} at epoch {}; checkpoint {}",
                art.best_mi_f1,
                art.best_epoch,
                art.checkpoint.display()
            );
        }
        Cmd::Eval(a) => {
            let ds = Dataset::load(&a.data)?;
            let (model, _tracker, epoch, f1) = load_checkpoint(&a.ckpt)?;
            let rep = evaluate(&model, &ds, &a.split, model.cfg.train.threshold, a.diagnostics)?;
            if a.json {
                println!("{}", serde_json::to_string_pretty(&rep)?);
            } else {
                println!("checkpoint from epoch {epoch} (val miF1 {f1:.4})");
                print!("{}", rep.table());
            }
        }
        Cmd::ExportEmbeddings(a) => {
            let ds = Dataset::load(&a.data)?;
            let (model, _, _, _) = load_checkpoint(&a.ckpt)?;
            let n = report::export_embeddings(&model, &ds, &a.split, &a.out)?;
            println!("wrote {n} embedding records to {}", a.out.display());
        }
        Cmd::CalibReport(a) => {
            let ds = Dataset::load(&a.data)?;
            let (model, tracker, _, _) = load_checkpoint(&a.ckpt)?;
            let rep = report::calib_report(&model, &ds, &a.split, &tracker)?;
            if a.json {
                println!("{}", serde_json::to_string_pretty(&rep)?);
            } else {
                print!("{}", rep.table());
            }
        }
    }
    Ok(())
}
