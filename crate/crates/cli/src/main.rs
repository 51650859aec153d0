use std::fs::File;
use std::io::BufWriter;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use skelmesh::body::{build_template, export_obj, skin, BodyTemplate};
use skelmesh::gradcheck::{check_op_trials, Fixtures, OPS};
use skelmesh::synth::{generate_dataset, read_dataset, write_dataset, Dataset, GenConfig, Split, Style};
use skelmesh::train::{
    dsd_predict, evaluate, precompute_features, train_dsd, train_satn, Checkpoint, FeatureStore, Stage, TrainConfig,
};

#[derive(Parser)]
#[command(name = "skelmesh", about = "Body mesh recovery from synthetic silhouettes")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Overrides the seed of the config file.
    #[arg(long)]
    seed: Option<u64>,
    /// Line-based `key = value` training config.
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset.
    GenData {
        #[arg(long)]
        out: PathBuf,
        /// First sequence seed.
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 8)]
        sequences: usize,
        #[arg(long, default_value_t = 16)]
        frames: usize,
        /// Standard deviation of silhouette pixel noise.
        #[arg(long, default_value_t = 0.0)]
        noise: f64,
        /// One of walk, wave, sit, mixed; cycles through all when absent.
        #[arg(long)]
        style: Option<Style>,
    },
    /// Train the single-frame network.
    TrainDsd {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Store per-frame features of a trained single-frame network.
    Precompute {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the temporal network on precomputed features.
    TrainSatn {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        features: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Write a JSON metric report for single-frame and temporal predictions.
    Eval {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        features: PathBuf,
        /// Temporal checkpoint; single-frame metrics only when absent.
        #[arg(long)]
        ckpt: Option<PathBuf>,
        #[arg(long, default_value = "heldout")]
        split: String,
        #[arg(long)]
        out: PathBuf,
    },
    /// Export a ground-truth or predicted mesh as OBJ.
    ExportObj {
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value_t = 0)]
        sequence: usize,
        #[arg(long, default_value_t = 0)]
        frame: usize,
        /// Single-frame checkpoint; exports the ground truth when absent.
        #[arg(long)]
        ckpt: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Finite-difference check of every differentiable op.
    GradCheck {
        #[arg(long, default_value_t = 10)]
        trials: u64,
    },
}

fn load_config(common: &Common) -> Result<TrainConfig> {
    let mut cfg = match &common.config {
        Some(p) => TrainConfig::from_file(p)?,
        None => TrainConfig::default(),
    };
    if let Some(s) = common.seed {
        cfg.seed = s;
    }
    Ok(cfg)
}

fn template_for(ds: &Dataset) -> Result<BodyTemplate> {
    Ok(build_template(ds.config.template_seed, ds.config.vertex_count)?)
}

fn load_stage(path: &Path, stage: Stage) -> Result<Checkpoint> {
    let ck = Checkpoint::load(path).with_context(|| format!("loading checkpoint {}", path.display()))?;
    if ck.stage != stage {
        bail!("{} is a {:?} checkpoint, expected {:?}", path.display(), ck.stage, stage);
    }
    Ok(ck)
}

fn log_file(out: &Path) -> Result<BufWriter<File>> {
    std::fs::create_dir_all(out)?;
    Ok(BufWriter::new(File::create(out.join("log.csv"))?))
}

fn run(cli: Cli) -> Result<bool> {
    match cli.command {
        Command::GenData {
            out,
            seed,
            sequences,
            frames,
            noise,
            style,
        } => {
            let cfg = GenConfig {
                sequences,
                frames,
                noise,
                style,
                ..GenConfig::default()
            };
            let template = build_template(cfg.template_seed, cfg.vertex_count)?;
            let ds = generate_dataset(&template, seed, &cfg)?;
            write_dataset(&ds, &out)?;
            println!("wrote {} sequences ({} seeds skipped) to {}", ds.sequences.len(), ds.skipped, out.display());
        }
        Command::TrainDsd { data, out, common } => {
            let cfg = load_config(&common)?;
            let ds = read_dataset(&data)?;
            let template = template_for(&ds)?;
            let mut log = log_file(&out)?;
            let ck = train_dsd(&ds, &template, &cfg, &mut log)?;
            ck.save(&out)?;
            println!("trained {} steps; checkpoint in {}", ck.step, out.display());
        }
        Command::Precompute { data, ckpt, out } => {
            let ds = read_dataset(&data)?;
            let template = template_for(&ds)?;
            let ck = load_stage(&ckpt, Stage::Dsd)?;
            let features = precompute_features(&ds, &template, &ck)?;
            features.write(&out)?;
            println!("wrote features of {} sequences to {}", features.sequences.len(), out.display());
        }
        Command::TrainSatn {
            data,
            features,
            out,
            common,
        } => {
            let cfg = load_config(&common)?;
            let ds = read_dataset(&data)?;
            let template = template_for(&ds)?;
            let features = FeatureStore::read(&features)?;
            let mut log = log_file(&out)?;
            let ck = train_satn(&ds, &features, &template, &cfg, &mut log)?;
            ck.save(&out)?;
            println!("trained {} steps; checkpoint in {}", ck.step, out.display());
        }
        Command::Eval {
            data,
            features,
            ckpt,
            split,
            out,
        } => {
            let split = match split.as_str() {
                "train" => Split::Train,
                "heldout" => Split::Heldout,
                other => bail!("unknown split `{other}`; use train or heldout"),
            };
            let ds = read_dataset(&data)?;
            let template = template_for(&ds)?;
            let features = FeatureStore::read(&features)?;
            let satn = ckpt.map(|p| load_stage(&p, Stage::Satn)).transpose()?;
            let report = evaluate(
                &ds,
                &features,
                &template,
                satn.as_ref().map(|c| (&c.params, &c.config.satn)),
                split,
            )?;
            std::fs::write(&out, serde_json::to_string_pretty(&report)?)?;
            println!("wrote report for {} frames to {}", report.dsd.n_frames, out.display());
        }
        Command::ExportObj {
            data,
            sequence,
            frame,
            ckpt,
            out,
        } => {
            let ds = read_dataset(&data)?;
            let template = template_for(&ds)?;
            let seq = ds.sequences.get(sequence).context("sequence index out of range")?;
            let gt = seq.gt_params.get(frame).context("frame index out of range")?;
            let params = match ckpt {
                Some(p) => {
                    let ck = load_stage(&p, Stage::Dsd)?;
                    dsd_predict(&ck.params, &template, &seq.observations[frame].silhouette)?.params
                }
                None => gt.clone(),
            };
            export_obj(&skin(&template, &params)?, &template.faces, &out)?;
            println!("wrote {}", out.display());
        }
        Command::GradCheck { trials } => {
            let fx = Fixtures::new()?;
            let mut all = true;
            for op in OPS {
                let r = check_op_trials(op, &fx, trials)?;
                let ok = r.passed();
                all &= ok;
                println!(
                    "{} {op:<20} max rel error {:.3e}",
                    if ok { "PASS" } else { "FAIL" },
                    r.max_rel_error()
                );
            }
            return Ok(all);
        }
    }
    Ok(true)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
