use std::error::Error as _;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use cxrseq::eval::format_auc;
use cxrseq::metadata::{RecordOrder, ViewPosition};
use cxrseq::nn::BackboneKind;
use cxrseq::pipeline::{
    cmd_build_samples, cmd_evaluate, cmd_preprocess, cmd_synth, cmd_train, PipelineConfig, PipelineError,
    TrainOptions,
};
use cxrseq::samples::SplitMode;
use cxrseq::synth::{Motif, SynthSpec};

/// Chest X-ray follow-up sequence classification pipeline.
#[derive(Debug, Parser)]
#[command(name = "cxrseq", version)]
struct Cli {
    /// TOML pipeline config; built-in defaults when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Seed for splitting, initialization, training and synthesis.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Directory for all stage outputs.
    #[arg(long, global = true)]
    work_dir: Option<PathBuf>,
    /// NIH-schema metadata CSV (optionally gzipped).
    #[arg(long, global = true)]
    metadata: Option<PathBuf>,
    /// Directory searched recursively for image files.
    #[arg(long, global = true)]
    image_root: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Parse metadata, apply both cohort filters, write cohort.csv.
    Preprocess {
        /// Record order within a patient: followup or image_index.
        #[arg(long)]
        order_by: Option<RecordOrder>,
    },
    /// Build sample sets and write the PA and AP manifests.
    BuildSamples {
        #[arg(long)]
        order_by: Option<RecordOrder>,
        /// by_sample or by_patient.
        #[arg(long)]
        split_mode: Option<SplitMode>,
    },
    /// Train one model on a view's training partition.
    Train(TrainArgs),
    /// Evaluate checkpoints (default: all under work_dir/models) and render reports.
    Evaluate {
        checkpoints: Vec<PathBuf>,
        /// Evaluate on this view; must match the checkpoint's training view.
        #[arg(long)]
        view: Option<ViewPosition>,
    },
    /// Generate a synthetic cohort.
    Synth(SynthArgs),
}

#[derive(Debug, Args)]
struct TrainArgs {
    #[arg(long, default_value = "PA")]
    view: ViewPosition,
    /// densenet169, resnet50v2, mobilenetv2 or tiny.
    #[arg(long)]
    backbone: Option<BackboneKind>,
    #[arg(long, overrides_with = "no_lstm")]
    lstm: bool,
    #[arg(long, overrides_with = "lstm")]
    no_lstm: bool,
    /// 3 (follow-up sequence) or 1 (last image only).
    #[arg(long)]
    branches: Option<usize>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
}

#[derive(Debug, Args)]
struct SynthArgs {
    /// Output directory (default: <work-dir>/synth).
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, default_value_t = SynthSpec::default().n_patients)]
    patients: usize,
    #[arg(long, default_value_t = SynthSpec::default().followups_per_patient)]
    followups: usize,
    /// Comma-separated motifs, optionally with labels: grow=Mass,shrink=Nodule.
    #[arg(long, value_delimiter = ',', default_values_t = ["grow".to_string(), "shrink".to_string()])]
    motifs: Vec<String>,
    #[arg(long, default_value_t = SynthSpec::default().image_size)]
    image_size: usize,
    #[arg(long, default_value_t = SynthSpec::default().noise_level)]
    noise: f64,
    /// Fraction of PA patients.
    #[arg(long, default_value_t = SynthSpec::default().view_mix)]
    view_mix: f64,
    #[arg(long, default_value_t = 0)]
    short_patients: usize,
    #[arg(long, default_value_t = 0)]
    mixed_view_patients: usize,
}

fn load_config(cli: &Cli) -> Result<PipelineConfig, PipelineError> {
    let mut config = match &cli.config {
        Some(path) => PipelineConfig::load(path)?,
        None => PipelineConfig::default(),
    };
    if let Some(seed) = cli.seed {
        config.seed = seed;
    }
    if let Some(dir) = &cli.work_dir {
        config.paths.work_dir = dir.clone();
    }
    if let Some(m) = &cli.metadata {
        config.paths.metadata = m.clone();
    }
    if let Some(r) = &cli.image_root {
        config.paths.image_root = r.clone();
    }
    Ok(config)
}

fn run(cli: Cli) -> Result<(), PipelineError> {
    let mut config = load_config(&cli)?;
    match cli.command {
        Command::Preprocess { order_by } => {
            if let Some(o) = order_by {
                config.filter.order_by = o;
            }
            let s = cmd_preprocess(&config)?;
            println!("records: {}", s.records);
            println!("patients: {}", s.patients);
            println!("after filter 1: {}", s.after_filter_1);
            println!("after filter 2: {}", s.after_filter_2);
            println!("cohort: {}", config.cohort_path().display());
        }
        Command::BuildSamples { order_by, split_mode } => {
            if let Some(o) = order_by {
                config.filter.order_by = o;
            }
            if let Some(m) = split_mode {
                config.split.mode = m;
            }
            let s = cmd_build_samples(&config)?;
            println!(
                "PA: {} patients, {} samples; AP: {} patients, {} samples",
                s.pa.patients, s.pa.samples, s.ap.patients, s.ap.samples
            );
            for view in [ViewPosition::PA, ViewPosition::AP] {
                println!("manifest: {}", config.manifest_path(view).display());
            }
        }
        Command::Train(args) => {
            if let Some(e) = args.epochs {
                config.training.epochs = e;
            }
            if let Some(b) = args.batch_size {
                config.training.batch_size = b;
            }
            config.validate()?;
            let options = TrainOptions {
                view: Some(args.view),
                backbone: args.backbone,
                use_lstm: match (args.lstm, args.no_lstm) {
                    (true, _) => Some(true),
                    (_, true) => Some(false),
                    _ => None,
                },
                branches: args.branches,
            };
            let s = cmd_train(&config, &options)?;
            println!("model: {}", s.descriptor);
            println!(
                "parameters: frozen {}, trainable {}, total {}",
                s.parameters.frozen, s.parameters.trainable, s.parameters.total
            );
            println!("epochs: {}", s.epochs);
            print!("final train loss: {:.6}", s.final_train_loss);
            match s.final_validation_loss {
                Some(v) => println!(", validation loss: {v:.6}"),
                None => println!(),
            }
            println!("checkpoint: {}", s.checkpoint.display());
        }
        Command::Evaluate { checkpoints, view } => {
            let s = cmd_evaluate(&config, &checkpoints, view)?;
            for r in &s.reports {
                println!(
                    "{}: {} test samples, mean AUC {}",
                    r.descriptor,
                    r.sample_count,
                    format_auc(r.mean_defined_auc())
                );
            }
            for f in s
                .files
                .tables
                .iter()
                .chain(&s.files.roc_plots)
                .chain(&s.files.loss_plots)
                .chain(&s.files.summaries)
            {
                println!("wrote {}", f.display());
            }
        }
        Command::Synth(args) => {
            let classes = args
                .motifs
                .iter()
                .map(|m| m.parse::<Motif>())
                .collect::<Result<Vec<_>, _>>()
                .map_err(PipelineError::Config)?;
            let spec = SynthSpec {
                n_patients: args.patients,
                followups_per_patient: args.followups,
                classes,
                image_size: args.image_size,
                noise_level: args.noise,
                seed: config.seed,
                view_mix: args.view_mix,
                short_patients: args.short_patients,
                mixed_view_patients: args.mixed_view_patients,
                ..SynthSpec::default()
            };
            let out = args.out.unwrap_or_else(|| config.work_dir().join("synth"));
            let c = cmd_synth(&spec, &out)?;
            println!("cohort: {}", c.dir.display());
            println!("metadata: {}", c.metadata_path().display());
            println!("images: {}", c.tally.images);
            println!(
                "expected: after filter 1: {}, after filter 2: {}, PA samples {}, AP samples {}",
                c.tally.after_filter_1, c.tally.after_filter_2, c.tally.pa_samples, c.tally.ap_samples
            );
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let mut msg = e.to_string();
            let mut source = e.source();
            while let Some(s) = source {
                let text = s.to_string();
                if !msg.contains(&text) {
                    msg.push_str(": ");
                    msg.push_str(&text);
                }
                source = s.source();
            }
            eprintln!("error[{}]: {msg}", e.kind());
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
