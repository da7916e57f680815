//! Optimization recipe (AdamW + cosine annealing), checkpoints, the
//! training loop, inference and evaluation.

mod checkpoint;
mod config;
mod optim;
mod schedule;

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rasm_tensor::{Tape, Tensor};

pub use checkpoint::{Checkpoint, MAGIC, VERSION};
pub use config::{RunConfig, TrainSettings};
pub use optim::{adamw_step, clip_grad_norm, grad_norm, AdamWConfig, OptimizerState};
pub use schedule::Schedule;

use crate::data::{augment, random_crop, Dataset, ShadowSample};
use crate::error::{Error, Result};
use crate::losses::{total_loss, FeatureExtractor};
use crate::metrics::{evaluate_pair, EvalRecord};
use crate::network::{predict, rasm_forward, ModelConfig, ParameterSet};

/// Random stream for step `step`; stream 0 is reserved for initialization.
pub fn step_rng(seed: u64, step: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(step + 1);
    rng
}

/// Step-0 checkpoint: freshly initialized parameters and zero moments.
pub fn init_checkpoint(config: RunConfig) -> Result<Checkpoint> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.train.seed);
    let params = ParameterSet::init(&config.model, &mut rng)?;
    let optimizer = Some(OptimizerState::new(&params));
    Ok(Checkpoint { config, step: 0, params, optimizer })
}

/// Training data: the directory in `train.data_dir`, else `train.samples`
/// synthetic samples.
pub fn build_dataset(config: &RunConfig) -> Result<Dataset> {
    let ds = match &config.train.data_dir {
        Some(dir) => Dataset::load_dir(dir)?,
        None => Dataset::synthetic(&config.synth, config.train.samples)?,
    };
    if ds.is_empty() {
        return Err(Error::Config("training dataset is empty".into()));
    }
    Ok(ds)
}

fn stage_name(k: usize, part: &str) -> String {
    format!("extractor.stage{}.{part}", k + 1)
}

/// Perceptual extractor from `train.extractor_weights`, or seeded.
pub fn build_extractor(config: &RunConfig) -> Result<FeatureExtractor<f32>> {
    let Some(path) = &config.train.extractor_weights else {
        return Ok(FeatureExtractor::seeded(config.train.extractor_seed));
    };
    let ck = Checkpoint::load_unchecked(path)?;
    let stages = (0..5)
        .map(|k| Ok((ck.params.get(&stage_name(k, "weight"))?.clone(), ck.params.get(&stage_name(k, "bias"))?.clone())))
        .collect::<Result<Vec<_>>>()?;
    FeatureExtractor::from_stages(stages)
}

/// Packs extractor weights into a checkpoint readable by [`build_extractor`].
pub fn extractor_checkpoint(extractor: &FeatureExtractor<f32>) -> Result<Checkpoint> {
    let mut params = ParameterSet::new();
    for (k, (w, b)) in extractor.stages.iter().enumerate() {
        params.insert(stage_name(k, "weight"), w.clone())?;
        params.insert(stage_name(k, "bias"), b.clone())?;
    }
    Ok(Checkpoint { config: RunConfig::default(), step: 0, params, optimizer: None })
}

fn draw_batch(config: &RunConfig, dataset: &Dataset, rng: &mut ChaCha8Rng) -> Result<[Tensor<f32>; 3]> {
    let crop = config.train.crop_size;
    let mut parts: [Vec<Tensor<f32>>; 3] = Default::default();
    for _ in 0..config.train.batch_size {
        let sample = &dataset.samples[rng.random_range(0..dataset.len())];
        let partner = &dataset.samples[rng.random_range(0..dataset.len())];
        let s = augment(sample, Some(partner), &config.augment, rng)?;
        let s = random_crop(&s, crop, crop, rng)?;
        let ShadowSample { shadow, mask, gt, .. } = s;
        parts[0].push(shadow);
        parts[1].push(mask);
        parts[2].push(gt);
    }
    let [a, b, c] = parts;
    Ok([Tensor::stack(&a)?, Tensor::stack(&b)?, Tensor::stack(&c)?])
}

/// Loss and per-parameter gradients of one batch.
fn loss_and_grads(
    ck: &Checkpoint,
    extractor: &FeatureExtractor<f32>,
    batch: [Tensor<f32>; 3],
) -> Result<(f64, BTreeMap<String, Tensor<f32>>)> {
    let [shadow, mask, gt] = batch;
    let mut tape = Tape::new();
    let (sv, mv, gv) = (tape.constant(shadow), tape.constant(mask), tape.constant(gt));
    let bound = ck.params.bind(&mut tape, true);
    let pred = rasm_forward(&mut tape, sv, mv, &bound, &ck.config.model)?;
    let loss = total_loss(&mut tape, pred, gv, &ck.config.loss, extractor)?;
    let value = tape.value(loss).item()? as f64;
    if !value.is_finite() {
        return Ok((value, BTreeMap::new()));
    }
    let mut grads = tape.backward(loss)?;
    let map = bound
        .iter()
        .map(|(k, v)| {
            let g = grads.take(*v).unwrap_or_else(|| Tensor::zeros(tape.shape(*v)));
            (k.clone(), g)
        })
        .collect();
    Ok((value, map))
}

fn save_latest(ck: &Checkpoint, out_dir: Option<&Path>) -> Result<()> {
    match out_dir {
        Some(dir) => ck.save(&dir.join("latest.rasm")),
        None => Ok(()),
    }
}

/// Advances `ck` to step `until`: sample, augment, crop, forward, loss,
/// backward, clip, AdamW at `lr_at(step)`. Writes `step=<n> loss=<v> lr=<v>`
/// to `log` after every step and checkpoints into `out_dir` (if given)
/// periodically and at the end. Returns the loss of each step taken.
///
/// A non-finite loss aborts the run; the parameters from before that step
/// are saved as `latest.rasm` and an error is returned.
pub fn train_steps(
    ck: &mut Checkpoint,
    dataset: &Dataset,
    extractor: &FeatureExtractor<f32>,
    until: u64,
    out_dir: Option<&Path>,
    log: &mut dyn Write,
) -> Result<Vec<f64>> {
    ck.config.validate()?;
    if until > ck.config.schedule.total_steps {
        return Err(Error::Training(format!(
            "cannot train to step {until}; the schedule ends at {}",
            ck.config.schedule.total_steps
        )));
    }
    if dataset.is_empty() {
        return Err(Error::Training("dataset is empty".into()));
    }
    let mut opt = ck.optimizer.take().unwrap_or_else(|| OptimizerState::new(&ck.params));
    let mut losses = Vec::new();
    let result = (|| {
        while ck.step < until {
            let step = ck.step;
            let mut rng = step_rng(ck.config.train.seed, step);
            let batch = draw_batch(&ck.config, dataset, &mut rng)?;
            let (loss, mut grads) = loss_and_grads(ck, extractor, batch)?;
            if !loss.is_finite() {
                return Err(Error::Training(format!("non-finite loss {loss} at step {}", step + 1)));
            }
            if ck.config.train.grad_clip > 0.0 {
                clip_grad_norm(&mut grads, ck.config.train.grad_clip);
            }
            let lr = ck.config.schedule.lr_at(step)?;
            adamw_step(&mut ck.params, &grads, &mut opt, &ck.config.optimizer, lr)?;
            ck.step = step + 1;
            losses.push(loss);
            writeln!(log, "step={} loss={loss:.8} lr={lr:.6e}", ck.step).map_err(|e| Error::io("<log>", e))?;
            let every = ck.config.train.checkpoint_every;
            if let Some(dir) = out_dir.filter(|_| every > 0 && ck.step % every == 0) {
                ck.optimizer = Some(opt.clone());
                ck.save(&dir.join(format!("step_{:06}.rasm", ck.step)))?;
                ck.save(&dir.join("latest.rasm"))?;
            }
        }
        Ok(())
    })();
    ck.optimizer = Some(opt);
    // on failure this keeps the last good state on disk
    save_latest(ck, out_dir)?;
    result.map(|_| losses)
}

/// Final state and per-step losses of a run.
#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub checkpoint: Checkpoint,
    pub losses: Vec<f64>,
}

/// Trains from scratch for `config.schedule.total_steps` steps.
pub fn train(config: RunConfig, out_dir: Option<&Path>, log: &mut dyn Write) -> Result<TrainOutcome> {
    let mut ck = init_checkpoint(config)?;
    let dataset = build_dataset(&ck.config)?;
    let extractor = build_extractor(&ck.config)?;
    let total = ck.config.schedule.total_steps;
    let losses = train_steps(&mut ck, &dataset, &extractor, total, out_dir, log)?;
    Ok(TrainOutcome { checkpoint: ck, losses })
}

/// Continues a saved run up to step `until` (default: the schedule's end).
pub fn resume(path: &Path, until: Option<u64>, out_dir: Option<&Path>, log: &mut dyn Write) -> Result<TrainOutcome> {
    let mut ck = Checkpoint::load(path)?;
    let dataset = build_dataset(&ck.config)?;
    let extractor = build_extractor(&ck.config)?;
    let until = until.unwrap_or(ck.config.schedule.total_steps);
    let losses = train_steps(&mut ck, &dataset, &extractor, until, out_dir, log)?;
    Ok(TrainOutcome { checkpoint: ck, losses })
}

fn reflect(i: usize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n - 1);
    let m = i % period;
    if m < n {
        m
    } else {
        period - m
    }
}

/// Extends a `[C, H, W]` image at the bottom and right by mirror reflection
/// (edge pixel not repeated) to `height x width`.
pub fn reflect_pad(t: &Tensor<f32>, height: usize, width: usize) -> Result<Tensor<f32>> {
    let (c, h, w) = match *t.shape() {
        [c, h, w] if h <= height && w <= width && h > 0 && w > 0 => (c, h, w),
        ref s => return Err(Error::Dimension(format!("cannot pad {s:?} to {height}x{width}"))),
    };
    let d = t.data();
    let mut out = Vec::with_capacity(c * height * width);
    for ch in 0..c {
        for y in 0..height {
            for x in 0..width {
                out.push(d[(ch * h + reflect(y, h)) * w + reflect(x, w)]);
            }
        }
    }
    Ok(Tensor::new(vec![c, height, width], out)?)
}

fn crop_top_left(t: &Tensor<f32>, height: usize, width: usize) -> Result<Tensor<f32>> {
    let (c, w) = (t.shape()[0], t.shape()[2]);
    let d = t.data();
    let mut out = Vec::with_capacity(c * height * width);
    for ch in 0..c {
        for y in 0..height {
            let row = (ch * t.shape()[1] + y) * w;
            out.extend_from_slice(&d[row..row + width]);
        }
    }
    Ok(Tensor::new(vec![c, height, width], out)?)
}

/// Restores one `[3, H, W]` image: reflect-pads to a multiple of `2^depth`,
/// runs the network and crops back to `H x W`.
pub fn infer(
    params: &ParameterSet<f32>,
    config: &ModelConfig,
    shadow: &Tensor<f32>,
    mask: &Tensor<f32>,
) -> Result<Tensor<f32>> {
    let (h, w) = match (shadow.shape(), mask.shape()) {
        ([3, h, w], [1, mh, mw]) if (h, w) == (mh, mw) => (*h, *w),
        (s, m) => return Err(Error::Dimension(format!("image {s:?} and mask {m:?} are incompatible"))),
    };
    let f = config.size_factor();
    let (ph, pw) = (h.div_ceil(f) * f, w.div_ceil(f) * f);
    let out = predict(params, config, &reflect_pad(shadow, ph, pw)?, &reflect_pad(mask, ph, pw)?)?;
    crop_top_left(&out, h, w)
}

/// Runs [`infer`] on every sample and scores it against the ground truth.
pub fn evaluate(params: &ParameterSet<f32>, config: &ModelConfig, dataset: &Dataset) -> Result<Vec<EvalRecord>> {
    dataset
        .samples
        .iter()
        .map(|s| {
            let pred = infer(params, config, &s.shadow, &s.mask)?;
            evaluate_pair(&s.name, &pred, &s.gt, &s.mask)
        })
        .collect()
}
