use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use tumorseg::crf::{finetune_step3, train_step2, CrfParameters, SliceSchedule};
use tumorseg::evaluation::ScoreReport;
use tumorseg::fcnn::NetworkParameters;
use tumorseg::fusion::fuse_volumes;
use tumorseg::phantom::{generate_phantom, PhantomConfig};
use tumorseg::pipeline::{
    load_dataset, preprocess_cases, preprocess_volume, run_segment, run_train, train_view, training_slices, PipelineConfig,
};
use tumorseg::postprocess::{postprocess, ALL_STEPS};
use tumorseg::{Axis, LabelVolume, MultiModalVolume};

#[derive(Parser)]
#[command(name = "tumorseg", version, about = "Multi-view FCNN + CRF brain tumor segmentation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone, Default)]
struct ConfigArg {
    /// Pipeline configuration (JSON); flags override its fields.
    #[arg(long)]
    config: Option<PathBuf>,
}

impl ConfigArg {
    fn load(&self) -> Result<PipelineConfig> {
        match &self.config {
            Some(p) => PipelineConfig::load(p).with_context(|| format!("config: reading {}", p.display())),
            None => Ok(PipelineConfig::default()),
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Write synthetic phantoms with ground truth.
    Phantom {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 1)]
        count: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Phantom settings (JSON).
        #[arg(long)]
        phantom_config: Option<PathBuf>,
        #[arg(long)]
        noise: Option<f64>,
        #[arg(long)]
        channels: Option<usize>,
    },
    /// Normalize the intensities of a volume.
    Preprocess {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        config: ConfigArg,
    },
    /// Train a view's FCNN on class-balanced patches.
    TrainFcnn {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        axis: Axis,
        /// Pooling window size.
        #[arg(long)]
        n: Option<usize>,
        /// Patches per class over the whole data set.
        #[arg(long)]
        per_class: Option<usize>,
        #[arg(long)]
        width: Option<usize>,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        lr: Option<f64>,
        #[arg(long)]
        batch_size: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
        /// Per-epoch losses (JSON).
        #[arg(long)]
        loss_out: Option<PathBuf>,
        #[command(flatten)]
        config: ConfigArg,
    },
    /// Train CRF weights and compatibility with the FCNN frozen.
    TrainCrf {
        #[arg(long)]
        fcnn: PathBuf,
        #[arg(long)]
        slices: PathBuf,
        /// Starting CRF parameters; configuration defaults otherwise.
        #[arg(long)]
        crf: Option<PathBuf>,
        /// Defaults to the axis recorded in the FCNN file.
        #[arg(long)]
        axis: Option<Axis>,
        #[arg(long)]
        iterations: Option<usize>,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        lr: Option<f64>,
        #[arg(long)]
        slices_per_volume: Option<usize>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        loss_out: Option<PathBuf>,
        #[command(flatten)]
        config: ConfigArg,
    },
    /// Fine-tune FCNN and CRF together.
    Finetune {
        #[arg(long)]
        fcnn: PathBuf,
        #[arg(long)]
        crf: PathBuf,
        #[arg(long)]
        slices: PathBuf,
        #[arg(long)]
        axis: Option<Axis>,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        lr: Option<f64>,
        #[arg(long)]
        slices_per_volume: Option<usize>,
        /// Defaults to overwriting `--fcnn`.
        #[arg(long)]
        out_fcnn: Option<PathBuf>,
        /// Defaults to overwriting `--crf`.
        #[arg(long)]
        out_crf: Option<PathBuf>,
        #[arg(long)]
        loss_out: Option<PathBuf>,
        #[command(flatten)]
        config: ConfigArg,
    },
    /// Run every configured training step for every configured view.
    Train {
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        model_dir: Option<PathBuf>,
        /// Training steps to run (1, 2, 3); repeatable.
        #[arg(long = "step")]
        steps: Vec<u8>,
        #[arg(long = "view")]
        views: Vec<Axis>,
        #[command(flatten)]
        config: ConfigArg,
    },
    /// Segment a volume end to end.
    Segment {
        #[arg(long)]
        input: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        model_dir: Option<PathBuf>,
        #[arg(long = "view")]
        views: Vec<Axis>,
        /// Skip CRF refinement.
        #[arg(long)]
        no_crf: bool,
        #[arg(long = "skip-step")]
        skip_steps: Vec<u8>,
        /// Write intermediate volumes into this directory.
        #[arg(long)]
        dump: Option<PathBuf>,
        #[arg(long)]
        iterations: Option<usize>,
        #[command(flatten)]
        config: ConfigArg,
    },
    /// Majority-vote three per-view label volumes.
    Fuse {
        #[arg(long)]
        axial: PathBuf,
        #[arg(long)]
        coronal: PathBuf,
        #[arg(long)]
        sagittal: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Apply the rule-based clean-up to a label volume.
    Postprocess {
        #[arg(long)]
        labels: PathBuf,
        /// Normalized intensities matching the labels.
        #[arg(long)]
        volume: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long = "skip-step")]
        skip_steps: Vec<u8>,
        /// Threshold override such as `theta31=0.2`; repeatable.
        #[arg(long = "theta", value_parser = parse_theta)]
        thetas: Vec<(String, f64)>,
        #[command(flatten)]
        config: ConfigArg,
    },
    /// Score a prediction against ground truth.
    Evaluate {
        #[arg(long)]
        pred: PathBuf,
        #[arg(long)]
        truth: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn parse_theta(s: &str) -> std::result::Result<(String, f64), String> {
    let (name, value) = s.split_once('=').ok_or_else(|| format!("expected NAME=VALUE, got {s:?}"))?;
    let value = value.trim().parse::<f64>().map_err(|e| format!("{value:?}: {e}"))?;
    Ok((name.trim().to_string(), value))
}

fn write_losses(path: &Path, losses: &[f64]) -> Result<()> {
    fs::write(path, serde_json::to_string_pretty(losses)? + "\n").with_context(|| format!("writing {}", path.display()))
}

fn resolve_axis(flag: Option<Axis>, fcnn: &NetworkParameters) -> Result<Axis> {
    flag.or(fcnn.axis)
        .ok_or_else(|| anyhow!("no --axis given and the FCNN file records none"))
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Phantom {
            out,
            count,
            seed,
            phantom_config,
            noise,
            channels,
        } => {
            let mut cfg = match phantom_config {
                Some(p) => serde_json::from_slice::<PhantomConfig>(&fs::read(&p)?).context("phantom: config")?,
                None => PhantomConfig::default(),
            };
            if let Some(n) = noise {
                cfg.noise = n;
            }
            if let Some(c) = channels {
                cfg.channels = c;
            }
            fs::create_dir_all(&out).context("phantom: output directory")?;
            for k in 0..count as u64 {
                let (vol, labels) = generate_phantom(seed + k, &cfg).context("phantom")?;
                let stem = format!("phantom_{:04}", seed + k);
                vol.save(out.join(format!("{stem}.mmv"))).context("phantom: write")?;
                labels.save(out.join(format!("{stem}_labels.mmv"))).context("phantom: write")?;
            }
        }

        Command::Preprocess { input, out, config } => {
            let mut cfg = config.load()?;
            let vol = MultiModalVolume::load(&input).context("preprocess: load input")?;
            cfg.modalities = vol.channels();
            let normalized = preprocess_volume(&vol, &cfg).context("preprocess")?;
            normalized.save(&out).context("preprocess: write")?;
        }

        Command::TrainFcnn {
            data,
            axis,
            n,
            per_class,
            width,
            epochs,
            lr,
            batch_size,
            seed,
            out,
            loss_out,
            config,
        } => {
            let mut cfg = config.load()?;
            cfg.pool = n.unwrap_or(cfg.pool);
            cfg.patches_per_class = per_class.unwrap_or(cfg.patches_per_class);
            cfg.width = width.unwrap_or(cfg.width);
            cfg.step1.epochs = epochs.unwrap_or(cfg.step1.epochs);
            cfg.step1.learning_rate = lr.unwrap_or(cfg.step1.learning_rate);
            cfg.step1.batch_size = batch_size.unwrap_or(cfg.step1.batch_size);
            cfg.seed = seed.unwrap_or(cfg.seed);
            cfg.training_steps = vec![1];
            let cases = load_dataset(&data).context("train-fcnn: load data")?;
            cfg.modalities = cases[0].volume.channels();
            cfg.validate().context("config")?;
            let cases = preprocess_cases(cases, &cfg)?;
            let trained = train_view(&cases, axis, &cfg, None, None)?;
            trained.fcnn.save(&out).context("train-fcnn: write model")?;
            if let Some(p) = loss_out {
                write_losses(&p, &trained.losses[&1])?;
            }
        }

        Command::TrainCrf {
            fcnn,
            slices,
            crf,
            axis,
            iterations,
            epochs,
            lr,
            slices_per_volume,
            out,
            loss_out,
            config,
        } => {
            let cfg = config.load()?;
            let net = NetworkParameters::load(&fcnn).context("train-crf: load FCNN")?;
            let axis = resolve_axis(axis, &net)?;
            let mut params = match crf {
                Some(p) => CrfParameters::load(&p).context("train-crf: load CRF")?,
                None => cfg.crf.clone(),
            };
            params.iterations = iterations.unwrap_or(params.iterations);
            let schedule = SliceSchedule {
                epochs: epochs.unwrap_or(cfg.step2.epochs),
                learning_rate: lr.unwrap_or(cfg.step2.learning_rate),
                seed: cfg.view_seed(axis),
                ..cfg.step2.clone()
            };
            let limit = slices_per_volume.or(cfg.crf_slices_per_volume);
            let train = slice_set(&slices, axis, limit, &cfg, net.in_channels).context("train-crf")?;
            let (trained, trace) = train_step2(&net, &params, &train, &schedule).context("train-crf")?;
            trained.save(&out).context("train-crf: write model")?;
            if let Some(p) = loss_out {
                write_losses(&p, &trace)?;
            }
        }

        Command::Finetune {
            fcnn,
            crf,
            slices,
            axis,
            epochs,
            lr,
            slices_per_volume,
            out_fcnn,
            out_crf,
            loss_out,
            config,
        } => {
            let cfg = config.load()?;
            let net = NetworkParameters::load(&fcnn).context("finetune: load FCNN")?;
            let params = CrfParameters::load(&crf).context("finetune: load CRF")?;
            let axis = resolve_axis(axis, &net)?;
            let schedule = SliceSchedule {
                epochs: epochs.unwrap_or(cfg.step3.epochs),
                learning_rate: lr.unwrap_or(cfg.step3.learning_rate),
                seed: cfg.view_seed(axis),
                ..cfg.step3.clone()
            };
            let limit = slices_per_volume.or(cfg.crf_slices_per_volume);
            let train = slice_set(&slices, axis, limit, &cfg, net.in_channels).context("finetune")?;
            let (mut net2, params2, trace) = finetune_step3(&net, &params, &train, &schedule).context("finetune")?;
            net2.round_to_f32();
            net2.save(out_fcnn.as_ref().unwrap_or(&fcnn)).context("finetune: write FCNN")?;
            params2.save(out_crf.as_ref().unwrap_or(&crf)).context("finetune: write CRF")?;
            if let Some(p) = loss_out {
                write_losses(&p, &trace)?;
            }
        }

        Command::Train {
            data,
            model_dir,
            steps,
            views,
            config,
        } => {
            let mut cfg = config.load()?;
            if data.is_some() {
                cfg.data_dir = data;
            }
            if model_dir.is_some() {
                cfg.model_dir = model_dir;
            }
            if !steps.is_empty() {
                cfg.training_steps = steps;
            }
            if !views.is_empty() {
                cfg.views = views;
            }
            for p in run_train(&cfg)? {
                println!("{}", p.display());
            }
        }

        Command::Segment {
            input,
            out,
            model_dir,
            views,
            no_crf,
            skip_steps,
            dump,
            iterations,
            config,
        } => {
            let mut cfg = config.load()?;
            if input.is_some() {
                cfg.input = input;
            }
            if out.is_some() {
                cfg.output = out;
            }
            if model_dir.is_some() {
                cfg.model_dir = model_dir;
            }
            if !views.is_empty() {
                cfg.views = views;
            }
            if no_crf {
                cfg.use_crf = false;
            }
            if dump.is_some() {
                cfg.dump_dir = dump;
            }
            cfg.postprocess_steps.retain(|k| !skip_steps.contains(k));
            if let Some(input) = &cfg.input {
                let channels = MultiModalVolume::load(input).context("load input")?.channels();
                cfg.modalities = channels;
            }
            if iterations.is_some() {
                cfg.segment_iterations = iterations;
            }
            run_segment(&cfg)?;
        }

        Command::Fuse {
            axial,
            coronal,
            sagittal,
            out,
        } => {
            let load = |p: &Path| LabelVolume::load(p).with_context(|| format!("fuse: load {}", p.display()));
            let fused = fuse_volumes(&load(&axial)?, &load(&coronal)?, &load(&sagittal)?).context("fuse")?;
            fused.save(&out).context("fuse: write")?;
        }

        Command::Postprocess {
            labels,
            volume,
            out,
            skip_steps,
            thetas,
            config,
        } => {
            let cfg = config.load()?;
            let mut th = cfg.thresholds.clone();
            for (name, value) in thetas {
                th.set(&name, value).context("postprocess")?;
            }
            for k in &skip_steps {
                if !ALL_STEPS.contains(k) {
                    bail!("postprocess: no step {k}");
                }
            }
            let steps: Vec<u8> = cfg.postprocess_steps.iter().copied().filter(|k| !skip_steps.contains(k)).collect();
            let res = LabelVolume::load(&labels).context("postprocess: load labels")?;
            let vol = MultiModalVolume::load(&volume).context("postprocess: load volume")?;
            let cleaned = postprocess(&res, &vol, &th, &steps).context("postprocess")?;
            cleaned.save(&out).context("postprocess: write")?;
        }

        Command::Evaluate { pred, truth, out } => {
            let p = LabelVolume::load(&pred).context("evaluate: load prediction")?;
            let t = LabelVolume::load(&truth).context("evaluate: load truth")?;
            let report = ScoreReport::evaluate(&p, &t).context("evaluate")?;
            let json = report.to_json()?;
            match out {
                Some(path) => fs::write(&path, json + "\n").context("evaluate: write report")?,
                None => println!("{json}"),
            }
        }
    }
    Ok(())
}

/// Normalized tumor-bearing slices of every labeled volume in `dir`.
fn slice_set(
    dir: &Path,
    axis: Axis,
    limit: Option<usize>,
    cfg: &PipelineConfig,
    channels: usize,
) -> Result<Vec<tumorseg::crf::TrainingSlice>> {
    let cfg = PipelineConfig {
        modalities: channels,
        ..cfg.clone()
    };
    let cases = preprocess_cases(load_dataset(dir).context("load data")?, &cfg)?;
    let mut out = Vec::new();
    for case in &cases {
        out.extend(training_slices(&case.volume, &case.labels, axis, limit)?);
    }
    Ok(out)
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
