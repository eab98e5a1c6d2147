//! Training loop, evaluation, tiled prediction and the gradient harness.

use std::fs::OpenOptions;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use brainformer_tensor::{analytic_gradients, compare_gradients, Coords, Tape, Tensor, TensorError, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::checkpoint::Checkpoint;
use crate::config::{ModelConfig, TrainConfig};
use crate::error::{Error, Result};
use crate::loss::softmax_dice_loss;
use crate::manifest::{Manifest, Split};
use crate::metrics::{evaluate_labels, mean_report, LabelVolume, MetricReport};
use crate::model::{argmax_classes, Brainformer};
use crate::optim::{adam_step, AdamConfig, AdamState};
use crate::params::Ctx;
use crate::phantom::{crop_block, normalize, CropMode};
use crate::sequentializer::VolumeBlock;
use crate::volume_io::read_volume;

/// A named, normalized volume.
#[derive(Debug, Clone)]
pub struct Subject {
    pub name: String,
    pub block: VolumeBlock,
}

/// Reads and normalizes every volume of one split, in manifest order.
pub fn load_split(manifest: &Manifest, split: Split) -> Result<Vec<Subject>> {
    manifest
        .split(split)
        .map(|e| {
            let block = read_volume(&manifest.path_of(e))?;
            Ok(Subject {
                name: e.file.clone(),
                block: normalize(&block),
            })
        })
        .collect()
}

pub struct Trainer {
    pub config: TrainConfig,
    pub model: Brainformer,
    pub adam: AdamState,
    /// Completed optimizer steps.
    pub step: u64,
}

impl Trainer {
    pub fn new(config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let mut model = Brainformer::new(config.model.clone(), config.seed)?;
        for id in model.params.ids().collect::<Vec<_>>() {
            model.params.get_mut(id).set_precision(config.precision);
        }
        let adam = AdamState::new(&model.params);
        Ok(Trainer {
            config,
            model,
            adam,
            step: 0,
        })
    }

    pub fn from_checkpoint(ckpt: Checkpoint) -> Result<Self> {
        let mut t = Trainer::new(ckpt.config)?;
        t.model.params.load(ckpt.params)?;
        for id in t.model.params.ids().collect::<Vec<_>>() {
            let p = t.config.precision;
            t.model.params.get_mut(id).set_precision(p);
        }
        if ckpt.adam.m.len() != t.model.params.len() {
            return Err(Error::Config("checkpoint optimizer state does not match the model".into()));
        }
        t.adam = ckpt.adam;
        t.step = ckpt.step;
        Ok(t)
    }

    pub fn checkpoint(&self) -> Checkpoint {
        let params = &self.model.params;
        Checkpoint {
            config: self.config.clone(),
            step: self.step,
            params: params
                .names()
                .iter()
                .cloned()
                .zip(params.tensors().iter().cloned())
                .collect(),
            adam: self.adam.clone(),
        }
    }

    /// Data checks run before step 0.
    pub fn check_data(&self, data: &[Subject]) -> Result<()> {
        let m = &self.config.model;
        if data.is_empty() {
            return Err(Error::Config("training split is empty".into()));
        }
        for s in data {
            let e = s.block.extents();
            if s.block.modality_count() != m.in_channels {
                return Err(Error::Config(format!(
                    "{}: {} channels, model expects {}",
                    s.name,
                    s.block.modality_count(),
                    m.in_channels
                )));
            }
            if (0..3).any(|i| e[i] < m.block[i]) {
                return Err(Error::Config(format!(
                    "{}: extents {e:?} smaller than block {:?}",
                    s.name, m.block
                )));
            }
            if s.block.labels.is_none() {
                return Err(Error::Config(format!("{}: training volume has no labels", s.name)));
            }
        }
        Ok(())
    }

    /// The batch for the next step, derived from `(seed, step)` only.
    pub fn sample_batch(&self, data: &[Subject]) -> Result<Vec<VolumeBlock>> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.config.seed);
        rng.set_stream(self.step + 1);
        (0..self.config.batch_size)
            .map(|_| {
                let s = &data[rng.random_range(0..data.len())];
                crop_block(&s.block, self.config.model.block, rng.random(), CropMode::Training)
            })
            .collect()
    }

    /// One forward/backward/update on `batch`; returns the mean loss before
    /// the update.
    pub fn step(&mut self, batch: &[VolumeBlock]) -> Result<f64> {
        let mut tape = Tape::with_precision(self.config.precision);
        let mut ctx = Ctx::new(&mut tape, &self.model.params);
        let mut losses = Vec::with_capacity(batch.len());
        for b in batch {
            let labels = b
                .labels
                .as_ref()
                .ok_or_else(|| Error::Data("training block has no labels".into()))?;
            let logits = self.model.forward(&mut ctx, &b.intensities)?;
            let loss = softmax_dice_loss(ctx.tape, logits, labels)?;
            losses.push(ctx.tape.reshape(loss, &[1])?);
        }
        let vars = ctx.vars().to_vec();
        let stacked = tape.concat(&losses, 0)?;
        let loss = tape.mean(stacked)?;
        let value = tape.value(loss).item()?;
        let mut grads = tape.backward(loss)?;
        let grads: Vec<Tensor> = vars
            .iter()
            .map(|v| grads.take(*v).expect("parameters are tracked leaves"))
            .collect();
        let mut cfg = AdamConfig::new(self.config.learning_rate, self.config.weight_decay);
        cfg.decoupled = self.config.decoupled_decay;
        adam_step(&mut self.model.params, &grads, &mut self.adam, &cfg, self.config.precision)?;
        self.step += 1;
        Ok(value)
    }
}

#[derive(Debug, Clone)]
pub struct TrainSummary {
    pub steps: u64,
    pub last_loss: Option<f64>,
    pub checkpoint: PathBuf,
    pub trace: PathBuf,
}

pub const TRACE_FILE: &str = "trace.txt";
pub const FINAL_CHECKPOINT: &str = "final.brck";

/// Runs `trainer` until `trainer.config.steps`, appending `step loss wall_ms`
/// lines to `out_dir/trace.txt` (truncated unless resuming past step 0) and
/// writing checkpoints.
pub fn run_training(
    trainer: &mut Trainer,
    data: &[Subject],
    out_dir: &Path,
    mut progress: impl FnMut(u64, f64),
) -> Result<TrainSummary> {
    trainer.check_data(data)?;
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let trace_path = out_dir.join(TRACE_FILE);
    let mut trace = OpenOptions::new()
        .create(true)
        .write(true)
        .append(trainer.step > 0)
        .truncate(trainer.step == 0)
        .open(&trace_path)
        .map_err(|e| Error::io(&trace_path, e))?;
    let mut last = None;
    while trainer.step < trainer.config.steps {
        let start = Instant::now();
        let batch = trainer.sample_batch(data)?;
        let loss = trainer.step(&batch)?;
        let ms = start.elapsed().as_millis();
        writeln!(trace, "{} {loss} {ms}", trainer.step).map_err(|e| Error::io(&trace_path, e))?;
        progress(trainer.step, loss);
        last = Some(loss);
        let every = trainer.config.checkpoint_every;
        if every > 0 && trainer.step % every == 0 {
            let p = out_dir.join(format!("step{:06}.brck", trainer.step));
            trainer.checkpoint().save(&p)?;
        }
    }
    trace.flush().map_err(|e| Error::io(&trace_path, e))?;
    let checkpoint = out_dir.join(FINAL_CHECKPOINT);
    trainer.checkpoint().save(&checkpoint)?;
    Ok(TrainSummary {
        steps: trainer.step,
        last_loss: last,
        checkpoint,
        trace: trace_path,
    })
}

/// `(step, loss)` pairs of a trace file; wall-clock times are ignored.
pub fn read_trace(path: &Path) -> Result<Vec<(u64, f64)>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .map(|line| {
            let mut f = line.split_whitespace();
            let parsed = (|| Some((f.next()?.parse().ok()?, f.next()?.parse().ok()?)))();
            parsed.ok_or_else(|| Error::format(path, format!("bad trace line `{line}`")))
        })
        .collect()
}

/// Labels for a whole normalized volume: center-pad to a multiple of the
/// block, run the model on non-overlapping tiles, stitch and crop back.
pub fn predict_volume(model: &Brainformer, intensities: &Tensor) -> Result<LabelVolume> {
    let m = &model.config;
    let s = intensities.shape();
    if s.len() != 4 || s[0] != m.in_channels {
        return Err(Error::Config(format!(
            "volume {s:?} does not have {} channels",
            m.in_channels
        )));
    }
    let c = s[0];
    let e = [s[1], s[2], s[3]];
    let b = m.block;
    let padded: [usize; 3] = std::array::from_fn(|i| e[i].div_ceil(b[i]) * b[i]);
    let lo: [usize; 3] = std::array::from_fn(|i| (padded[i] - e[i]) / 2);

    let mut tile = vec![0.0; c * b.iter().product::<usize>()];
    let mut labels = vec![0u8; e.iter().product()];
    let src = intensities.data();
    for th in (0..padded[0]).step_by(b[0]) {
        for tw in (0..padded[1]).step_by(b[1]) {
            for td in (0..padded[2]).step_by(b[2]) {
                let origin = [th, tw, td];
                let mut i = 0;
                for ch in 0..c {
                    for h in 0..b[0] {
                        for w in 0..b[1] {
                            for d in 0..b[2] {
                                let p = [origin[0] + h, origin[1] + w, origin[2] + d];
                                tile[i] = match source(p, lo, e) {
                                    Some([x, y, z]) => src[((ch * e[0] + x) * e[1] + y) * e[2] + z],
                                    None => 0.0,
                                };
                                i += 1;
                            }
                        }
                    }
                }
                let block = Tensor::new(vec![c, b[0], b[1], b[2]], tile.clone())?;
                let classes = argmax_classes(&model.infer(&block)?);
                let mut j = 0;
                for h in 0..b[0] {
                    for w in 0..b[1] {
                        for d in 0..b[2] {
                            let p = [origin[0] + h, origin[1] + w, origin[2] + d];
                            if let Some([x, y, z]) = source(p, lo, e) {
                                labels[(x * e[1] + y) * e[2] + z] = classes[j];
                            }
                            j += 1;
                        }
                    }
                }
            }
        }
    }
    LabelVolume::new(e, labels)
}

/// Padded coordinate to volume coordinate, if inside the volume.
fn source(p: [usize; 3], lo: [usize; 3], e: [usize; 3]) -> Option<[usize; 3]> {
    let mut out = [0; 3];
    for i in 0..3 {
        out[i] = p[i].checked_sub(lo[i]).filter(|&x| x < e[i])?;
    }
    Some(out)
}

#[derive(Debug, Clone)]
pub struct EvalReport {
    pub subjects: Vec<(String, MetricReport)>,
    pub mean: MetricReport,
}

impl EvalReport {
    pub fn to_json(&self) -> serde_json::Value {
        let subjects: Vec<serde_json::Value> = self
            .subjects
            .iter()
            .map(|(name, r)| serde_json::json!({ "subject": name, "metrics": r.to_json() }))
            .collect();
        serde_json::json!({ "subjects": subjects, "mean": self.mean.to_json() })
    }
}

/// Per-subject metrics (manifest order) and their mean.
pub fn evaluate(model: &Brainformer, subjects: &[Subject]) -> Result<EvalReport> {
    let mut reports = Vec::with_capacity(subjects.len());
    for s in subjects {
        let gt = s
            .block
            .labels
            .as_ref()
            .ok_or_else(|| Error::Data(format!("{}: no ground-truth labels", s.name)))?;
        let pred = predict_volume(model, &s.block.intensities)?;
        reports.push((s.name.clone(), evaluate_labels(&pred, gt)?));
    }
    let mean = mean_report(&reports.iter().map(|(_, r)| r.clone()).collect::<Vec<_>>())
        .ok_or_else(|| Error::Config("no subjects to evaluate".into()))?;
    Ok(EvalReport {
        subjects: reports,
        mean,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradcheckOptions {
    pub seed: u64,
    /// Coordinates sampled per parameter tensor.
    pub per_tensor: usize,
    pub step: f64,
    pub threshold: f64,
    /// Scale the analytic gradient of parameters whose name starts with
    /// this prefix by 1.5 (negative control).
    pub corrupt: Option<String>,
}

impl Default for GradcheckOptions {
    fn default() -> Self {
        GradcheckOptions {
            seed: 0,
            per_tensor: 24,
            step: 3e-5,
            threshold: 1e-4,
            corrupt: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GroupReport {
    pub name: String,
    pub checked: usize,
    pub max_rel_error: f64,
    pub analytic: f64,
    pub numeric: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradcheckReport {
    pub groups: Vec<GroupReport>,
    pub threshold: f64,
}

impl GradcheckReport {
    pub fn max_rel_error(&self) -> f64 {
        self.groups.iter().map(|g| g.max_rel_error).fold(0.0, f64::max)
    }

    pub fn passed(&self) -> bool {
        self.groups.iter().all(|g| g.max_rel_error < self.threshold)
    }
}

fn to_tensor_error(e: Error) -> TensorError {
    match e {
        Error::Tensor(t) => t,
        other => TensorError::Usage(other.to_string()),
    }
}

/// Finite-difference check of every parameter tensor of the full network
/// under the dice loss, at double precision.
pub fn gradcheck(config: &ModelConfig, opts: &GradcheckOptions) -> Result<GradcheckReport> {
    let model = Brainformer::new(config.clone(), opts.seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    rng.set_stream(u64::MAX);
    let [h, w, d] = config.block;
    let input = Tensor::randn(&[config.in_channels, h, w, d], 1.0, &mut rng)?;
    let labels = LabelVolume::new(config.block, (0..h * w * d).map(|_| rng.random_range(0..4u8)).collect())?;

    let f = |tape: &mut Tape, vars: &[Var]| -> brainformer_tensor::Result<Var> {
        let mut ctx = Ctx::from_vars(tape, vars.to_vec());
        let logits = model.forward(&mut ctx, &input).map_err(to_tensor_error)?;
        softmax_dice_loss(tape, logits, &labels).map_err(to_tensor_error)
    };
    let inputs = model.params.tensors();
    let mut analytic = analytic_gradients(f, inputs)?;
    if let Some(prefix) = &opts.corrupt {
        let mut hit = false;
        for (g, name) in analytic.iter_mut().zip(model.params.names()) {
            if name.starts_with(prefix.as_str()) {
                hit = true;
                for x in g.data_mut() {
                    *x *= 1.5;
                }
            }
        }
        if !hit {
            return Err(Error::Config(format!("no parameter matches `{prefix}`")));
        }
    }
    let coords = Coords::Sample {
        per_input: opts.per_tensor,
        seed: opts.seed,
    };
    let reports = compare_gradients(f, inputs, &analytic, opts.step, coords)?;
    let groups = reports
        .into_iter()
        .zip(model.params.names())
        .map(|(r, name)| GroupReport {
            name: name.clone(),
            checked: r.checked,
            max_rel_error: r.max_rel_error,
            analytic: r.analytic,
            numeric: r.numeric,
        })
        .collect();
    Ok(GradcheckReport {
        groups,
        threshold: opts.threshold,
    })
}
