use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use brainformer::checkpoint::Checkpoint;
use brainformer::manifest::{Entry, Manifest, Split};
use brainformer::phantom::{generate_phantom, normalize, PhantomSpec};
use brainformer::train::{evaluate, gradcheck, load_split, predict_volume, run_training, GradcheckOptions, Trainer};
use brainformer::volume_io::{read_volume, write_volume, write_volume_file, Dtype, VolumeFile};
use brainformer::{Brainformer, Error, TrainConfig};
use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Parser)]
#[command(name = "brainformer", version, about = "3D fusion-transformer brain tumor segmentation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone, Default)]
struct ConfigArgs {
    /// key=value config file
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override one key, e.g. `--set steps=500` (repeatable)
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

impl ConfigArgs {
    fn apply(&self, cfg: &mut TrainConfig) -> anyhow::Result<()> {
        if let Some(path) = &self.config {
            let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
            cfg.apply_text(&text).with_context(|| format!("in {}", path.display()))?;
        }
        for pair in &self.overrides {
            cfg.set_pair(pair)?;
        }
        Ok(())
    }

    fn resolve(&self, mut base: TrainConfig) -> anyhow::Result<TrainConfig> {
        self.apply(&mut base)?;
        base.validate()?;
        Ok(base)
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum DtypeArg {
    F32,
    F64,
}

#[derive(Subcommand)]
enum Command {
    /// Write synthetic phantom volumes and a manifest
    Phantom {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 20)]
        count: usize,
        /// How many of the volumes go to the validation split
        #[arg(long, default_value_t = 4)]
        val: usize,
        /// Seed of the first volume; volume i uses seed + i
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 1)]
        tumors: usize,
        /// 16³ volumes instead of 32³
        #[arg(long)]
        toy: bool,
        #[arg(long, value_enum, default_value = "f32")]
        dtype: DtypeArg,
    },
    /// Train on the train split of a manifest
    Train {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        config: ConfigArgs,
        /// Continue from a checkpoint; `--set` may change non-architecture keys
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Print progress every N steps (0 = quiet)
        #[arg(long, default_value_t = 10)]
        log_every: u64,
    },
    /// Evaluate a checkpoint on one split of a manifest
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value = "val")]
        split: String,
        /// Also write the JSON report here
        #[arg(long)]
        json: Option<PathBuf>,
    },
    /// Segment one volume file into a label file
    Predict {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        output: PathBuf,
    },
    /// Finite-difference check of every parameter group
    Gradcheck {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Coordinates sampled per parameter tensor
        #[arg(long, default_value_t = 24)]
        per_tensor: usize,
        #[arg(long, default_value_t = 1e-4)]
        threshold: f64,
        /// Scale the analytic gradients of parameters with this name prefix
        /// (negative control; the check must fail)
        #[arg(long)]
        corrupt: Option<String>,
    },
    /// Print the tensor shape of every stage for a config
    Shapes {
        #[command(flatten)]
        config: ConfigArgs,
    },
}

fn echo_config(cfg: &TrainConfig) {
    println!("# configuration (model {})", cfg.model_hash());
    for line in cfg.to_text().lines() {
        println!("{line}");
    }
}

fn phantom(out: &Path, count: usize, val: usize, seed: u64, tumors: usize, toy: bool, dtype: DtypeArg) -> anyhow::Result<()> {
    if val > count {
        bail!(Error::Config(format!("--val {val} exceeds --count {count}")));
    }
    std::fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    let dtype = match dtype {
        DtypeArg::F32 => Dtype::F32,
        DtypeArg::F64 => Dtype::F64,
    };
    let mut entries = Vec::with_capacity(count);
    for i in 0..count {
        let s = seed + i as u64;
        let base = if toy { PhantomSpec::toy(s) } else { PhantomSpec::new(s) };
        let spec = PhantomSpec { tumors, ..base };
        let ph = generate_phantom(&spec)?;
        let file = format!("phantom{i:03}.brnf");
        write_volume(&out.join(&file), &ph.block, dtype)?;
        let split = if i >= count - val { Split::Val } else { Split::Train };
        entries.push(Entry { split, file, seed: s });
    }
    let manifest = Manifest {
        entries,
        root: out.to_path_buf(),
    };
    let path = out.join("manifest.txt");
    manifest.save(&path)?;
    println!("wrote {count} volumes and {}", path.display());
    Ok(())
}

fn train(data: &Path, out: &Path, args: &ConfigArgs, resume: Option<&Path>, log_every: u64) -> anyhow::Result<()> {
    let mut trainer = match resume {
        Some(path) => {
            let mut ckpt = Checkpoint::load(path)?;
            let hash = ckpt.config.model_hash();
            let cfg = args.resolve(ckpt.config.clone())?;
            if cfg.model_hash() != hash || cfg.seed != ckpt.config.seed {
                bail!(Error::Config(
                    "--set may not change the architecture or seed of a resumed run".into()
                ));
            }
            ckpt.config = cfg;
            Trainer::from_checkpoint(ckpt)?
        }
        None => Trainer::new(args.resolve(TrainConfig::default())?)?,
    };
    echo_config(&trainer.config);
    if trainer.step > 0 {
        println!("# resuming at step {}", trainer.step);
    }
    let manifest = Manifest::load(data)?;
    let subjects = load_split(&manifest, Split::Train)?;
    let summary = run_training(&mut trainer, &subjects, out, |step, loss| {
        if log_every > 0 && step % log_every == 0 {
            eprintln!("step {step} loss {loss:.6}");
        }
    })?;
    println!("trained to step {}", summary.steps);
    if let Some(loss) = summary.last_loss {
        println!("last loss {loss}");
    }
    println!("trace {}", summary.trace.display());
    println!("checkpoint {}", summary.checkpoint.display());
    Ok(())
}

fn load_model(path: &Path) -> anyhow::Result<Brainformer> {
    Ok(Trainer::from_checkpoint(Checkpoint::load(path)?)?.model)
}

fn eval(checkpoint: &Path, data: &Path, split: &str, json: Option<&Path>) -> anyhow::Result<()> {
    let split: Split = split.parse().map_err(Error::Config)?;
    let model = load_model(checkpoint)?;
    let subjects = load_split(&Manifest::load(data)?, split)?;
    let report = evaluate(&model, &subjects)?;
    for (name, r) in &report.subjects {
        eprintln!("{name}\n{}", r.to_table());
    }
    eprintln!("mean over {} subjects\n{}", report.subjects.len(), report.mean.to_table());
    let text = format!("{:#}", report.to_json());
    if let Some(path) = json {
        std::fs::write(path, &text).with_context(|| format!("writing {}", path.display()))?;
    }
    println!("{text}");
    Ok(())
}

fn predict(checkpoint: &Path, input: &Path, output: &Path) -> anyhow::Result<()> {
    let model = load_model(checkpoint)?;
    let block = normalize(&read_volume(input)?);
    let labels = predict_volume(&model, &block.intensities)?;
    let hist = labels.histogram();
    write_volume_file(output, &VolumeFile::labels_only(labels))?;
    println!("wrote {} (class counts {hist:?})", output.display());
    Ok(())
}

/// Returns whether the check passed.
fn run_gradcheck(args: &ConfigArgs, opts: GradcheckOptions) -> anyhow::Result<bool> {
    let mut base = TrainConfig::default();
    base.model.block = [8, 8, 8];
    let cfg = args.resolve(base)?;
    echo_config(&cfg);
    let report = gradcheck(&cfg.model, &opts)?;
    println!(
        "{:<40} {:>7} {:>12} {:>12} {:>12}",
        "parameter group", "coords", "max rel err", "analytic", "numeric"
    );
    for g in &report.groups {
        let flag = if g.max_rel_error < report.threshold { "" } else { "  FAIL" };
        println!(
            "{:<40} {:>7} {:>12.3e} {:>12.4e} {:>12.4e}{flag}",
            g.name, g.checked, g.max_rel_error, g.analytic, g.numeric
        );
    }
    let verdict = if report.passed() { "PASS" } else { "FAIL" };
    println!(
        "{verdict}: max relative error {:.3e} (threshold {:.0e})",
        report.max_rel_error(),
        report.threshold
    );
    Ok(report.passed())
}

fn shapes(args: &ConfigArgs) -> anyhow::Result<()> {
    let cfg = args.resolve(TrainConfig::default())?;
    echo_config(&cfg);
    let model = Brainformer::new(cfg.model.clone(), cfg.seed)?;
    for (label, shape) in model.shape_trace()? {
        println!("{label:<28} {shape:?}");
    }
    println!("parameters {} in {} tensors", model.params.numel(), model.params.len());
    Ok(())
}

fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if let Some(e) = cause.downcast_ref::<Error>() {
            return e.exit_code() as u8;
        }
        if cause.is::<std::io::Error>() {
            return 3;
        }
    }
    1
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    let result = match &cli.command {
        Command::Phantom {
            out,
            count,
            val,
            seed,
            tumors,
            toy,
            dtype,
        } => phantom(out, *count, *val, *seed, *tumors, *toy, *dtype),
        Command::Train {
            data,
            out,
            config,
            resume,
            log_every,
        } => train(data, out, config, resume.as_deref(), *log_every),
        Command::Eval {
            checkpoint,
            data,
            split,
            json,
        } => eval(checkpoint, data, split, json.as_deref()),
        Command::Predict { checkpoint, input, output } => predict(checkpoint, input, output),
        Command::Gradcheck {
            config,
            seed,
            per_tensor,
            threshold,
            corrupt,
        } => {
            let opts = GradcheckOptions {
                seed: *seed,
                per_tensor: *per_tensor,
                threshold: *threshold,
                corrupt: corrupt.clone(),
                ..GradcheckOptions::default()
            };
            match run_gradcheck(config, opts) {
                Ok(true) => Ok(()),
                Ok(false) => return ExitCode::from(2),
                Err(e) => Err(e),
            }
        }
        Command::Shapes { config } => shapes(config),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            // Some error messages already embed their source; print each cause once.
            let mut msg = String::new();
            for cause in e.chain() {
                let text = cause.to_string();
                if !msg.contains(&text) {
                    if !msg.is_empty() {
                        msg.push_str(": ");
                    }
                    msg.push_str(&text);
                }
            }
            eprintln!("error: {msg}");
            ExitCode::from(exit_code(&e))
        }
    }
}
