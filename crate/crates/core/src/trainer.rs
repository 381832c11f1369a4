//! Fine-tuning loop: decoupled-weight-decay Adam with linear warmup, periodic
//! evaluation, early stopping, and a binary checkpoint format shared by the
//! encoder and the baseline models.

use std::fs;
use std::io::Write;
use std::path::Path;

use ndarray::{Array1, Array2};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::encoder::{self, EncoderConfig, EncoderParams, Mode, Objective};
use crate::error::{Error, Result};
use crate::eval::{classification_metrics, confusion_matrix};
use crate::tokenizer::TokenSequence;

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

/// Shape and name of one tensor in a parameter set.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TensorSpec {
    pub name: String,
    pub shape: Vec<usize>,
}

impl TensorSpec {
    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// A model's trainable tensors, enumerated in a fixed order. The optimizer
/// and the checkpoint codec only see parameters through this trait.
pub trait ParamTensors {
    fn specs(&self) -> Vec<TensorSpec>;
    fn views(&self) -> Vec<&[f64]>;
    fn views_mut(&mut self) -> Vec<&mut [f64]>;
}

fn spec_of_2d(name: &str, a: &Array2<f64>) -> TensorSpec {
    TensorSpec {
        name: name.to_string(),
        shape: vec![a.nrows(), a.ncols()],
    }
}

fn spec_of_1d(name: &str, a: &Array1<f64>) -> TensorSpec {
    TensorSpec {
        name: name.to_string(),
        shape: vec![a.len()],
    }
}

impl ParamTensors for EncoderParams {
    fn specs(&self) -> Vec<TensorSpec> {
        let mut out = vec![
            spec_of_2d("token_emb", &self.token_emb),
            spec_of_2d("segment_emb", &self.segment_emb),
            spec_of_2d("position_emb", &self.position_emb),
        ];
        for (i, l) in self.layers.iter().enumerate() {
            out.push(spec_of_2d(&format!("layer{i}.wq"), &l.wq));
            out.push(spec_of_1d(&format!("layer{i}.bq"), &l.bq));
            out.push(spec_of_2d(&format!("layer{i}.wk"), &l.wk));
            out.push(spec_of_1d(&format!("layer{i}.bk"), &l.bk));
            out.push(spec_of_2d(&format!("layer{i}.wv"), &l.wv));
            out.push(spec_of_1d(&format!("layer{i}.bv"), &l.bv));
            out.push(spec_of_2d(&format!("layer{i}.wo"), &l.wo));
            out.push(spec_of_1d(&format!("layer{i}.bo"), &l.bo));
            out.push(spec_of_2d(&format!("layer{i}.w1"), &l.w1));
            out.push(spec_of_1d(&format!("layer{i}.b1"), &l.b1));
            out.push(spec_of_2d(&format!("layer{i}.w2"), &l.w2));
            out.push(spec_of_1d(&format!("layer{i}.b2"), &l.b2));
            out.push(spec_of_1d(&format!("layer{i}.ln1_gain"), &l.ln1_gain));
            out.push(spec_of_1d(&format!("layer{i}.ln1_bias"), &l.ln1_bias));
            out.push(spec_of_1d(&format!("layer{i}.ln2_gain"), &l.ln2_gain));
            out.push(spec_of_1d(&format!("layer{i}.ln2_bias"), &l.ln2_bias));
        }
        out.push(spec_of_2d("classifier_w", &self.classifier_w));
        out.push(spec_of_1d("classifier_b", &self.classifier_b));
        out
    }

    fn views(&self) -> Vec<&[f64]> {
        let mut out = vec![
            self.token_emb.as_slice().expect("standard layout"),
            self.segment_emb.as_slice().expect("standard layout"),
            self.position_emb.as_slice().expect("standard layout"),
        ];
        for l in &self.layers {
            out.push(l.wq.as_slice().expect("standard layout"));
            out.push(l.bq.as_slice().expect("standard layout"));
            out.push(l.wk.as_slice().expect("standard layout"));
            out.push(l.bk.as_slice().expect("standard layout"));
            out.push(l.wv.as_slice().expect("standard layout"));
            out.push(l.bv.as_slice().expect("standard layout"));
            out.push(l.wo.as_slice().expect("standard layout"));
            out.push(l.bo.as_slice().expect("standard layout"));
            out.push(l.w1.as_slice().expect("standard layout"));
            out.push(l.b1.as_slice().expect("standard layout"));
            out.push(l.w2.as_slice().expect("standard layout"));
            out.push(l.b2.as_slice().expect("standard layout"));
            out.push(l.ln1_gain.as_slice().expect("standard layout"));
            out.push(l.ln1_bias.as_slice().expect("standard layout"));
            out.push(l.ln2_gain.as_slice().expect("standard layout"));
            out.push(l.ln2_bias.as_slice().expect("standard layout"));
        }
        out.push(self.classifier_w.as_slice().expect("standard layout"));
        out.push(self.classifier_b.as_slice().expect("standard layout"));
        out
    }

    fn views_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out = vec![
            self.token_emb.as_slice_mut().expect("standard layout"),
            self.segment_emb.as_slice_mut().expect("standard layout"),
            self.position_emb.as_slice_mut().expect("standard layout"),
        ];
        for l in &mut self.layers {
            out.push(l.wq.as_slice_mut().expect("standard layout"));
            out.push(l.bq.as_slice_mut().expect("standard layout"));
            out.push(l.wk.as_slice_mut().expect("standard layout"));
            out.push(l.bk.as_slice_mut().expect("standard layout"));
            out.push(l.wv.as_slice_mut().expect("standard layout"));
            out.push(l.bv.as_slice_mut().expect("standard layout"));
            out.push(l.wo.as_slice_mut().expect("standard layout"));
            out.push(l.bo.as_slice_mut().expect("standard layout"));
            out.push(l.w1.as_slice_mut().expect("standard layout"));
            out.push(l.b1.as_slice_mut().expect("standard layout"));
            out.push(l.w2.as_slice_mut().expect("standard layout"));
            out.push(l.b2.as_slice_mut().expect("standard layout"));
            out.push(l.ln1_gain.as_slice_mut().expect("standard layout"));
            out.push(l.ln1_bias.as_slice_mut().expect("standard layout"));
            out.push(l.ln2_gain.as_slice_mut().expect("standard layout"));
            out.push(l.ln2_bias.as_slice_mut().expect("standard layout"));
        }
        out.push(self.classifier_w.as_slice_mut().expect("standard layout"));
        out.push(self.classifier_b.as_slice_mut().expect("standard layout"));
        out
    }
}

/// Training hyperparameters. Defaults are the published fine-tuning setup;
/// desk-scale runs override them through the run configuration.
#[derive(Debug, Clone)]
pub struct TrainingArguments {
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub grad_accumulation: usize,
    pub epochs: usize,
    pub eval_and_save_every: usize,
    pub early_stopping: bool,
    pub patience: usize,
    pub warmup_steps: usize,
    pub seed: u64,
}

impl Default for TrainingArguments {
    fn default() -> Self {
        Self {
            learning_rate: 1e-5,
            weight_decay: 0.01,
            batch_size: 128,
            grad_accumulation: 1,
            epochs: 1,
            eval_and_save_every: 100,
            early_stopping: true,
            patience: 3,
            warmup_steps: 500,
            seed: 0,
        }
    }
}

impl TrainingArguments {
    pub fn validate(&self) -> Result<()> {
        if self.learning_rate <= 0.0
            || self.batch_size == 0
            || self.grad_accumulation == 0
            || self.epochs == 0
            || self.eval_and_save_every == 0
            || self.patience == 0
        {
            return Err(Error::InvalidConfig(
                "training arguments must be positive".into(),
            ));
        }
        if self.weight_decay < 0.0 {
            return Err(Error::InvalidConfig("weight_decay must be >= 0".into()));
        }
        Ok(())
    }

    /// Optimizer steps for a given training-set size.
    pub fn total_steps(&self, n_train: usize) -> usize {
        let batches = n_train.div_ceil(self.batch_size);
        let steps_per_epoch = batches.div_ceil(self.grad_accumulation);
        steps_per_epoch * self.epochs
    }
}

/// Learning rate at an optimizer step: a linear ramp from 0 to the peak over
/// `warmup_steps`, then linear decay to 0 at `total_steps`.
pub fn lr_at_step(step: usize, args: &TrainingArguments, total_steps: usize) -> f64 {
    let peak = args.learning_rate;
    let warmup = args.warmup_steps;
    if step < warmup {
        return peak * step as f64 / warmup as f64;
    }
    if total_steps <= warmup {
        return peak;
    }
    peak * (total_steps - step) as f64 / (total_steps - warmup) as f64
}

/// Bias-corrected decoupled-weight-decay Adam state.
pub struct AdamW {
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    t: u64,
}

impl AdamW {
    pub fn new(params: &impl ParamTensors) -> Self {
        let sizes: Vec<usize> = params.views().iter().map(|s| s.len()).collect();
        Self {
            m: sizes.iter().map(|&n| vec![0.0; n]).collect(),
            v: sizes.iter().map(|&n| vec![0.0; n]).collect(),
            t: 0,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.t
    }

    /// One update: `p <- p - lr * (m_hat / (sqrt(v_hat) + eps) + wd * p)`.
    /// The step counter increments once per call.
    pub fn step(
        &mut self,
        params: &mut impl ParamTensors,
        grads: &impl ParamTensors,
        lr: f64,
        weight_decay: f64,
    ) -> Result<()> {
        let specs = grads.specs();
        for (spec, g) in specs.iter().zip(grads.views()) {
            if g.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFiniteGradient(spec.name.clone()));
            }
        }
        self.t += 1;
        let t = self.t as i32;
        let bc1 = 1.0 - ADAM_BETA1.powi(t);
        let bc2 = 1.0 - ADAM_BETA2.powi(t);
        for ((p, g), (m, v)) in params
            .views_mut()
            .into_iter()
            .zip(grads.views())
            .zip(self.m.iter_mut().zip(self.v.iter_mut()))
        {
            for i in 0..p.len() {
                m[i] = ADAM_BETA1 * m[i] + (1.0 - ADAM_BETA1) * g[i];
                v[i] = ADAM_BETA2 * v[i] + (1.0 - ADAM_BETA2) * g[i] * g[i];
                let m_hat = m[i] / bc1;
                let v_hat = v[i] / bc2;
                p[i] -= lr * (m_hat / (v_hat.sqrt() + ADAM_EPS) + weight_decay * p[i]);
            }
        }
        Ok(())
    }
}

/// One evaluation row of the training log.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainLogRow {
    pub step: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub accuracy: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

/// Per-evaluation history of a fine-tuning run.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainLog {
    pub rows: Vec<TrainLogRow>,
}

impl TrainLog {
    /// `step,train_loss,val_loss,accuracy,precision,recall,f1` rows.
    pub fn to_csv(&self, path: &Path) -> Result<()> {
        let mut out = String::from("step,train_loss,val_loss,accuracy,precision,recall,f1\n");
        for r in &self.rows {
            out.push_str(&format!(
                "{},{},{},{},{},{},{}\n",
                r.step, r.train_loss, r.val_loss, r.accuracy, r.precision, r.recall, r.f1
            ));
        }
        fs::write(path, out).map_err(|source| Error::Io {
            path: path.to_path_buf(),
            source,
        })
    }
}

/// Result of a fine-tuning run: the lowest-validation-loss parameters, the
/// evaluation history, and whether training aborted on divergence.
pub struct FineTuneOutcome {
    pub best: EncoderParams,
    pub best_val_loss: f64,
    pub log: TrainLog,
    pub diverged: bool,
}

/// Mean eval-mode classification loss and attack probabilities over a set.
pub fn eval_loss_and_probs(
    config: &EncoderConfig,
    params: &EncoderParams,
    data: &[TokenSequence],
) -> Result<(f64, Vec<f64>)> {
    let mut probs = Vec::with_capacity(data.len());
    let mut loss_sum = 0.0;
    for chunk in data.chunks(64) {
        let tape = encoder::forward(config, params, chunk, Mode::Eval, 0)?;
        for (logits, seq) in tape.logits().rows().into_iter().zip(chunk) {
            let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let e0 = (logits[0] - max).exp();
            let e1 = (logits[1] - max).exp();
            let p1 = e1 / (e0 + e1);
            probs.push(p1);
            let p_label = if seq.label == 1 { p1 } else { 1.0 - p1 };
            loss_sum += -p_label.max(1e-300).ln();
        }
    }
    Ok((loss_sum / data.len() as f64, probs))
}

fn evaluate(
    config: &EncoderConfig,
    params: &EncoderParams,
    val: &[TokenSequence],
) -> Result<(f64, f64, f64, f64, f64)> {
    let (val_loss, probs) = eval_loss_and_probs(config, params, val)?;
    let predicted: Vec<u8> = probs.iter().map(|&p| u8::from(p >= 0.5)).collect();
    let actual: Vec<u8> = val.iter().map(|s| s.label).collect();
    let cm = confusion_matrix(&predicted, &actual)?;
    let metrics = classification_metrics(&cm)?;
    // Weighted averages mirror the reported training tables.
    Ok((
        val_loss,
        metrics.accuracy,
        metrics.weighted_precision,
        metrics.weighted_recall,
        metrics.weighted_f1,
    ))
}

/// Fine-tunes the encoder with seeded mini-batch shuffling, periodic
/// evaluation + checkpointing, and early stopping on validation loss.
///
/// When `checkpoint_dir` is given, each evaluation writes `step-<n>/` and the
/// final best parameters land in `best/`. A non-finite loss aborts the run
/// and returns the last good checkpoint with `diverged = true`.
pub fn fine_tune(
    config: &EncoderConfig,
    params: EncoderParams,
    train: &[TokenSequence],
    val: &[TokenSequence],
    args: &TrainingArguments,
    checkpoint_dir: Option<&Path>,
) -> Result<FineTuneOutcome> {
    args.validate()?;
    if train.is_empty() || val.is_empty() {
        return Err(Error::EmptyInput("train and validation sets must be nonempty".into()));
    }
    let total_steps = args.total_steps(train.len());
    if args.warmup_steps > total_steps {
        return Err(Error::InvalidConfig(format!(
            "warmup_steps {} exceeds total steps {total_steps}",
            args.warmup_steps
        )));
    }

    let mut params = params;
    let mut optimizer = AdamW::new(&params);
    let mut rng = ChaCha8Rng::seed_from_u64(args.seed);
    let mut log = TrainLog::default();

    let mut best: Option<(f64, EncoderParams)> = None;
    let mut evals_without_improvement = 0usize;
    let mut window_loss_sum = 0.0;
    let mut window_loss_count = 0usize;
    let mut step = 0usize;
    let mut diverged = false;

    let labels: Vec<u8> = train.iter().map(|s| s.label).collect();
    let mut order: Vec<usize> = (0..train.len()).collect();

    'epochs: for _epoch in 0..args.epochs {
        order.shuffle(&mut rng);
        let mut batches = order.chunks(args.batch_size).peekable();
        while batches.peek().is_some() {
            // One optimizer step over grad_accumulation micro-batches.
            let mut grads_acc = EncoderParams::zeros(config);
            let mut micro_batches = 0usize;
            let mut step_loss = 0.0;
            for _ in 0..args.grad_accumulation {
                let Some(batch_idx) = batches.next() else { break };
                let batch: Vec<TokenSequence> =
                    batch_idx.iter().map(|&i| train[i].clone()).collect();
                let batch_labels: Vec<u8> = batch_idx.iter().map(|&i| labels[i]).collect();
                let (loss, grads) = encoder::loss_and_gradients(
                    config,
                    &params,
                    &batch,
                    &Objective::Classification {
                        labels: &batch_labels,
                    },
                    Mode::Train,
                    args.seed ^ (step as u64 + 1).wrapping_mul(0x1000_0000_1B3),
                )?;
                if !loss.is_finite() {
                    diverged = true;
                    break 'epochs;
                }
                step_loss += loss;
                micro_batches += 1;
                for (acc, g) in grads_acc.views_mut().into_iter().zip(grads.views()) {
                    for (a, &b) in acc.iter_mut().zip(g) {
                        *a += b;
                    }
                }
            }
            if micro_batches == 0 {
                break;
            }
            let scale = 1.0 / micro_batches as f64;
            for acc in grads_acc.views_mut() {
                for a in acc.iter_mut() {
                    *a *= scale;
                }
            }
            step += 1;
            let lr = lr_at_step(step, args, total_steps);
            if let Err(Error::NonFiniteGradient(_)) =
                optimizer.step(&mut params, &grads_acc, lr, args.weight_decay)
            {
                diverged = true;
                break 'epochs;
            }
            window_loss_sum += step_loss * scale;
            window_loss_count += 1;

            if step % args.eval_and_save_every == 0 {
                let (val_loss, accuracy, precision, recall, f1) =
                    evaluate(config, &params, val)?;
                log.rows.push(TrainLogRow {
                    step,
                    train_loss: window_loss_sum / window_loss_count as f64,
                    val_loss,
                    accuracy,
                    precision,
                    recall,
                    f1,
                });
                window_loss_sum = 0.0;
                window_loss_count = 0;

                if let Some(dir) = checkpoint_dir {
                    save_checkpoint(
                        &dir.join(format!("step-{step}")),
                        &params,
                        &[("step".to_string(), step.to_string())],
                    )?;
                }

                let improved = best.as_ref().is_none_or(|(b, _)| val_loss < *b);
                if improved {
                    best = Some((val_loss, params.clone()));
                    evals_without_improvement = 0;
                } else {
                    evals_without_improvement += 1;
                    if args.early_stopping && evals_without_improvement >= args.patience {
                        break 'epochs;
                    }
                }
            }
        }
    }

    let (best_val_loss, best) = match best {
        Some((loss, p)) => (loss, p),
        // Divergence (or too few steps) before the first evaluation: the
        // last good parameters are the ones we have.
        None => (f64::INFINITY, params),
    };
    if let Some(dir) = checkpoint_dir {
        save_checkpoint(
            &dir.join("best"),
            &best,
            &[("val_loss".to_string(), best_val_loss.to_string())],
        )?;
    }
    Ok(FineTuneOutcome {
        best,
        best_val_loss,
        log,
        diverged,
    })
}

// ---------------------------------------------------------------------------
// Checkpoint format: args.txt (key = value), tensors.bin (little-endian f32),
// manifest.tsv (name, shape, byte offset, byte length).
// ---------------------------------------------------------------------------

const TENSORS_FILE: &str = "tensors.bin";
const MANIFEST_FILE: &str = "manifest.tsv";
const ARGS_FILE: &str = "args.txt";

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> Error + '_ {
    move |source| Error::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// Serializes a parameter set plus run arguments into a checkpoint directory.
pub fn save_checkpoint(
    dir: &Path,
    params: &impl ParamTensors,
    args: &[(String, String)],
) -> Result<()> {
    fs::create_dir_all(dir).map_err(io_err(dir))?;

    let mut args_text = String::new();
    for (k, v) in args {
        args_text.push_str(&format!("{k} = {v}\n"));
    }
    fs::write(dir.join(ARGS_FILE), args_text).map_err(io_err(&dir.join(ARGS_FILE)))?;

    let specs = params.specs();
    let views = params.views();
    let mut manifest = String::new();
    let mut blob: Vec<u8> = Vec::new();
    for (spec, view) in specs.iter().zip(views) {
        let offset = blob.len();
        for &v in view {
            blob.extend_from_slice(&(v as f32).to_le_bytes());
        }
        let shape = spec
            .shape
            .iter()
            .map(|d| d.to_string())
            .collect::<Vec<_>>()
            .join("x");
        manifest.push_str(&format!(
            "{}\t{}\t{}\t{}\n",
            spec.name,
            shape,
            offset,
            blob.len() - offset
        ));
    }
    fs::write(dir.join(MANIFEST_FILE), manifest).map_err(io_err(&dir.join(MANIFEST_FILE)))?;
    let mut f = fs::File::create(dir.join(TENSORS_FILE)).map_err(io_err(&dir.join(TENSORS_FILE)))?;
    f.write_all(&blob).map_err(io_err(&dir.join(TENSORS_FILE)))?;
    Ok(())
}

/// Reads the `key = value` argument file of a checkpoint.
pub fn read_checkpoint_args(dir: &Path) -> Result<Vec<(String, String)>> {
    let path = dir.join(ARGS_FILE);
    let text = fs::read_to_string(&path).map_err(io_err(&path))?;
    let mut out = Vec::new();
    for line in text.lines() {
        if line.trim().is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::Checkpoint(format!("malformed args line {line:?}")))?;
        out.push((k.trim().to_string(), v.trim().to_string()));
    }
    Ok(out)
}

/// Loads checkpoint tensors into an existing parameter set, which must have
/// matching tensor names and shapes. Returns the stored run arguments.
pub fn load_checkpoint_into(
    dir: &Path,
    params: &mut impl ParamTensors,
) -> Result<Vec<(String, String)>> {
    let manifest_path = dir.join(MANIFEST_FILE);
    let manifest = fs::read_to_string(&manifest_path).map_err(io_err(&manifest_path))?;
    let blob_path = dir.join(TENSORS_FILE);
    let blob = fs::read(&blob_path).map_err(io_err(&blob_path))?;

    let specs = params.specs();
    let mut views = params.views_mut();
    let lines: Vec<&str> = manifest.lines().filter(|l| !l.trim().is_empty()).collect();
    if lines.len() != specs.len() {
        return Err(Error::Checkpoint(format!(
            "manifest has {} tensors, model expects {}",
            lines.len(),
            specs.len()
        )));
    }
    for ((line, spec), view) in lines.iter().zip(&specs).zip(views.iter_mut()) {
        let parts: Vec<&str> = line.split('\t').collect();
        if parts.len() != 4 {
            return Err(Error::Checkpoint(format!("malformed manifest line {line:?}")));
        }
        let shape = spec
            .shape
            .iter()
            .map(|d| d.to_string())
            .collect::<Vec<_>>()
            .join("x");
        if parts[0] != spec.name || parts[1] != shape {
            return Err(Error::Checkpoint(format!(
                "tensor mismatch: checkpoint has {} [{}], model expects {} [{shape}]",
                parts[0], parts[1], spec.name
            )));
        }
        let offset: usize = parts[2]
            .parse()
            .map_err(|_| Error::Checkpoint(format!("bad offset in {line:?}")))?;
        let bytes: usize = parts[3]
            .parse()
            .map_err(|_| Error::Checkpoint(format!("bad length in {line:?}")))?;
        if bytes != 4 * spec.len() || offset + bytes > blob.len() {
            return Err(Error::Checkpoint(format!(
                "tensor {} does not fit the blob",
                spec.name
            )));
        }
        for (i, v) in view.iter_mut().enumerate() {
            let at = offset + 4 * i;
            let raw: [u8; 4] = blob[at..at + 4].try_into().expect("bounds checked");
            *v = f32::from_le_bytes(raw) as f64;
        }
    }
    read_checkpoint_args(dir)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder::{init_params, Activation};
    use crate::tokenizer::{build_vocab, encode};

    fn args(overrides: impl FnOnce(&mut TrainingArguments)) -> TrainingArguments {
        let mut a = TrainingArguments::default();
        overrides(&mut a);
        a
    }

    #[test]
    fn lr_schedule_hits_the_specified_points() {
        let a = args(|_| {});
        let total = 1000;
        assert_eq!(lr_at_step(0, &a, total), 0.0);
        assert!((lr_at_step(250, &a, total) - 5e-6).abs() < 1e-18);
        assert_eq!(lr_at_step(500, &a, total), 1e-5);
        assert_eq!(lr_at_step(1000, &a, total), 0.0);
    }

    #[test]
    fn lr_schedule_is_piecewise_linear_with_peak_at_warmup() {
        let a = args(|a| a.warmup_steps = 100);
        let total = 400;
        let mut max = 0.0;
        let mut prev = lr_at_step(0, &a, total);
        for step in 1..=total {
            let lr = lr_at_step(step, &a, total);
            let slope = lr - prev;
            if step <= 100 {
                assert!((slope - 1e-5 / 100.0).abs() < 1e-18);
            } else {
                assert!((slope + 1e-5 / 300.0).abs() < 1e-18);
            }
            if lr > max {
                max = lr;
            }
            prev = lr;
        }
        assert_eq!(max, a.learning_rate);
    }

    /// A one-tensor parameter set for hand-checked optimizer math.
    struct Scalar(Vec<f64>);

    impl ParamTensors for Scalar {
        fn specs(&self) -> Vec<TensorSpec> {
            vec![TensorSpec {
                name: "scalar".into(),
                shape: vec![self.0.len()],
            }]
        }
        fn views(&self) -> Vec<&[f64]> {
            vec![&self.0]
        }
        fn views_mut(&mut self) -> Vec<&mut [f64]> {
            vec![&mut self.0]
        }
    }

    #[test]
    fn adamw_decoupled_decay_only() {
        let mut p = Scalar(vec![1.0]);
        let g = Scalar(vec![0.0]);
        let mut opt = AdamW::new(&p);
        opt.step(&mut p, &g, 0.1, 0.01).unwrap();
        assert!((p.0[0] - 0.999).abs() < 1e-15);
    }

    #[test]
    fn adamw_first_step_is_bias_corrected() {
        let mut p = Scalar(vec![0.0]);
        let g = Scalar(vec![2.0]);
        let mut opt = AdamW::new(&p);
        opt.step(&mut p, &g, 0.1, 0.0).unwrap();
        // m_hat = 2, v_hat = 4: delta = -0.1 * 2/(2 + 1e-8)
        assert!((p.0[0] + 0.1).abs() < 1e-9);
        assert_eq!(opt.step_count(), 1);
    }

    #[test]
    fn adamw_zero_grads_zero_decay_is_a_fixed_point() {
        let mut p = Scalar(vec![0.7, -1.2]);
        let g = Scalar(vec![0.0, 0.0]);
        let mut opt = AdamW::new(&p);
        for _ in 0..3 {
            opt.step(&mut p, &g, 0.5, 0.0).unwrap();
        }
        assert_eq!(p.0, vec![0.7, -1.2]);
    }

    #[test]
    fn adamw_matches_hand_run_adam_for_three_steps() {
        let mut p = Scalar(vec![1.0]);
        let mut opt = AdamW::new(&p);
        let gs = [0.3, -0.2, 0.5];
        let lr = 0.01;

        // Hand recurrence.
        let (mut m, mut v, mut expect) = (0.0, 0.0, 1.0);
        for (t, &g) in gs.iter().enumerate() {
            m = 0.9 * m + 0.1 * g;
            v = 0.999 * v + 0.001 * g * g;
            let m_hat = m / (1.0 - 0.9f64.powi(t as i32 + 1));
            let v_hat = v / (1.0 - 0.999f64.powi(t as i32 + 1));
            expect -= lr * m_hat / (v_hat.sqrt() + 1e-8);
        }
        for &g in &gs {
            opt.step(&mut p, &Scalar(vec![g]), lr, 0.0).unwrap();
        }
        assert!((p.0[0] - expect).abs() < 1e-15);
    }

    #[test]
    fn adamw_rejects_non_finite_gradients() {
        let mut p = Scalar(vec![1.0]);
        let g = Scalar(vec![f64::NAN]);
        let mut opt = AdamW::new(&p);
        let err = opt.step(&mut p, &g, 0.1, 0.0).unwrap_err();
        assert!(matches!(err, Error::NonFiniteGradient(_)));
    }

    fn tiny_training_setup(
        n: usize,
    ) -> (EncoderConfig, EncoderParams, Vec<TokenSequence>) {
        let corpus: Vec<String> = (0..n)
            .map(|i| {
                if i % 2 == 0 {
                    format!("flow duration={} rate low", 100_000 + i * 11)
                } else {
                    format!("flow duration={} rate high", 10 + i)
                }
            })
            .collect();
        let vocab = build_vocab(&corpus, 80).unwrap();
        let data: Vec<TokenSequence> = corpus
            .iter()
            .enumerate()
            .map(|(i, t)| encode(&vocab, t, 16).unwrap().with_label((i % 2) as u8))
            .collect();
        let config = EncoderConfig {
            n_layers: 1,
            hidden_dim: 16,
            n_heads: 2,
            ffn_dim: 32,
            max_positions: 16,
            vocab_size: vocab.len(),
            dropout_rate: 0.0,
            activation: Activation::Relu,
            init_std: 0.02,
        };
        let params = init_params(&config, 3).unwrap();
        (config, params, data)
    }

    #[test]
    fn fine_tune_is_deterministic_and_tracks_best() {
        let (config, params, data) = tiny_training_setup(32);
        let a = args(|a| {
            a.batch_size = 8;
            a.epochs = 6;
            a.eval_and_save_every = 4;
            a.warmup_steps = 4;
            a.learning_rate = 5e-3;
            a.seed = 11;
        });
        let run1 = fine_tune(&config, params.clone(), &data, &data, &a, None).unwrap();
        let run2 = fine_tune(&config, params, &data, &data, &a, None).unwrap();
        assert_eq!(run1.log, run2.log);
        assert!(!run1.log.rows.is_empty());
        assert!(!run1.diverged);
        for w in run1.log.rows.windows(2) {
            assert!(w[1].step > w[0].step);
            assert_eq!(w[1].step % 4, 0);
        }
        for row in &run1.log.rows {
            assert!(run1.best_val_loss <= row.val_loss + 1e-12);
        }
    }

    #[test]
    fn early_stopping_halts_on_first_non_improving_eval() {
        // One trivially learned example evaluated every step: once the loss
        // plateaus, patience = 1 stops the run before the step budget.
        let (config, params, data) = tiny_training_setup(2);
        let one = vec![data[0].clone()];
        let a = args(|a| {
            a.batch_size = 1;
            a.epochs = 200;
            a.eval_and_save_every = 1;
            a.warmup_steps = 0;
            a.learning_rate = 1e-2;
            a.patience = 1;
        });
        let run = fine_tune(&config, params, &one, &one, &a, None).unwrap();
        let evals = run.log.rows.len();
        assert!(evals < 200, "stopped after {evals} evals");
        let improvements: Vec<f64> = run.log.rows.iter().map(|r| r.val_loss).collect();
        // The run ends exactly one eval after the best value.
        let best = improvements
            .iter()
            .cloned()
            .fold(f64::INFINITY, f64::min);
        assert!(improvements.last().copied().unwrap() >= best);
    }

    #[test]
    fn checkpoint_round_trip_is_bit_exact() {
        let (config, params, _) = tiny_training_setup(2);
        let _ = config;
        let dir = tempfile::tempdir().unwrap();
        let ckpt = dir.path().join("ckpt");
        save_checkpoint(&ckpt, &params, &[("seed".into(), "3".into())]).unwrap();

        let mut reloaded = EncoderParams::zeros(&tiny_training_setup(2).0);
        let args_back = load_checkpoint_into(&ckpt, &mut reloaded).unwrap();
        assert_eq!(args_back, vec![("seed".to_string(), "3".to_string())]);

        // Saving the reloaded parameters reproduces the tensor blob exactly.
        let ckpt2 = dir.path().join("ckpt2");
        save_checkpoint(&ckpt2, &reloaded, &[("seed".into(), "3".into())]).unwrap();
        let blob1 = std::fs::read(ckpt.join(TENSORS_FILE)).unwrap();
        let blob2 = std::fs::read(ckpt2.join(TENSORS_FILE)).unwrap();
        assert_eq!(blob1, blob2);
        let manifest = std::fs::read_to_string(ckpt.join(MANIFEST_FILE)).unwrap();
        assert!(manifest.starts_with("token_emb\t"));
    }

    #[test]
    fn checkpoint_rejects_shape_mismatch() {
        let (config, params, _) = tiny_training_setup(2);
        let dir = tempfile::tempdir().unwrap();
        let ckpt = dir.path().join("ckpt");
        save_checkpoint(&ckpt, &params, &[]).unwrap();

        let mut other_config = config;
        other_config.hidden_dim = 32;
        other_config.ffn_dim = 64;
        let mut other = EncoderParams::zeros(&other_config);
        assert!(load_checkpoint_into(&ckpt, &mut other).is_err());
    }

    #[test]
    fn train_log_csv_has_the_pinned_header() {
        let log = TrainLog {
            rows: vec![TrainLogRow {
                step: 100,
                train_loss: 0.5246,
                val_loss: 0.3908,
                accuracy: 0.801,
                precision: 0.6416,
                recall: 0.801,
                f1: 0.7125,
            }],
        };
        let file = tempfile::NamedTempFile::new().unwrap();
        log.to_csv(file.path()).unwrap();
        let text = std::fs::read_to_string(file.path()).unwrap();
        assert!(text.starts_with("step,train_loss,val_loss,accuracy,precision,recall,f1\n"));
        assert!(text.contains("100,0.5246,0.3908,0.801,0.6416,0.801,0.7125"));
    }
}
