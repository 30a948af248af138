use std::collections::BTreeMap;
use std::io::Write;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::adam::{Adam, AdamConfig};
use crate::encoder::{logits_on_tape, params_on_tape, ChannelBatch, DcVitModel, ModelParams};
use crate::error::{Error, Result};
use crate::numerics::{Tape, Tensor};

/// Batch size used for evaluation passes.
const EVAL_CHUNK: usize = 128;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    /// Desk default; large-batch training on real data typically uses 4e-4.
    pub lr: f64,
    pub betas: (f64, f64),
    pub eps: f64,
    pub batch_size: usize,
    pub steps: usize,
    pub seed: u64,
    pub eval_every: usize,
    /// Global gradient-norm ceiling.
    pub grad_clip: Option<f64>,
    /// Stop at the first evaluation reaching this validation accuracy.
    pub stop_at_val_accuracy: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        let adam = AdamConfig::default();
        Self {
            lr: adam.lr,
            betas: adam.betas,
            eps: adam.eps,
            batch_size: 16,
            steps: 1000,
            seed: 0,
            eval_every: 100,
            grad_clip: None,
            stop_at_val_accuracy: None,
        }
    }
}

impl TrainConfig {
    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            lr: self.lr,
            betas: self.betas,
            eps: self.eps,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.adam().validate()?;
        if self.steps == 0 || self.batch_size == 0 || self.eval_every == 0 {
            return Err(Error::Config("steps, batch_size and eval_every must be positive".into()));
        }
        if let Some(c) = self.grad_clip {
            if !(c.is_finite() && c > 0.0) {
                return Err(Error::Config(format!("grad_clip {c} must be positive")));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub step: usize,
    /// Mean minibatch loss since the previous record.
    pub train_loss: f64,
    pub val_accuracy: Option<f64>,
    pub alphas: BTreeMap<usize, f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainSummary {
    #[serde(rename = "final")]
    pub is_final: bool,
    pub steps_run: usize,
    pub stopped_early: bool,
    /// Validation accuracy of the returned weights.
    pub final_val_accuracy: Option<f64>,
    /// Final α per 1-based layer index.
    pub alphas: BTreeMap<usize, f64>,
    /// Largest |∂loss/∂α| seen per layer.
    pub alpha_grad_max: BTreeMap<usize, f64>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainHistory {
    pub records: Vec<EvalRecord>,
    pub summary: Option<TrainSummary>,
}

impl TrainHistory {
    pub fn final_val_accuracy(&self) -> Option<f64> {
        self.records.last().and_then(|r| r.val_accuracy)
    }

    pub fn best_val_accuracy(&self) -> Option<f64> {
        self.records.iter().filter_map(|r| r.val_accuracy).reduce(f64::max)
    }

    /// One JSON object per evaluation record, then the summary object.
    pub fn write_jsonl<W: Write>(&self, mut w: W) -> Result<()> {
        for r in &self.records {
            serde_json::to_writer(&mut w, r)?;
            writeln!(w)?;
        }
        if let Some(s) = &self.summary {
            serde_json::to_writer(&mut w, s)?;
            writeln!(w)?;
        }
        Ok(())
    }
}

/// Mean cross-entropy over rows of `logits` (`B×K`).
pub fn cross_entropy(logits: &Tensor, labels: &[usize]) -> Result<f64> {
    let mut tape = Tape::inference();
    let l = tape.constant(logits.clone());
    let loss = tape.cross_entropy(l, labels)?;
    Ok(tape.value(loss).item())
}

/// Loss and parameter gradients of one labelled batch.
pub fn loss_and_grads(model: &DcVitModel, batch: &ChannelBatch) -> Result<(f64, ModelParams)> {
    loss_and_grads_with(model, batch, None)
}

pub(crate) fn loss_and_grads_with(
    model: &DcVitModel,
    batch: &ChannelBatch,
    fault: Option<crate::numerics::Fault>,
) -> Result<(f64, ModelParams)> {
    let labels = batch
        .labels()
        .ok_or_else(|| Error::invalid("train", "batch has no labels"))?;
    let mut tape = Tape::new();
    if let Some(f) = fault {
        tape.inject_fault(f);
    }
    let vars = params_on_tape(&mut tape, &model.params, true);
    let logits = logits_on_tape(&mut tape, &model.config, &vars, batch)?;
    let loss = tape.cross_entropy(logits, labels)?;
    let mut grads = tape.backward(loss, Tensor::scalar(1.0))?;
    let g = vars.map(&mut |_, v| grads.take(*v).expect("every parameter is a recorded input"));
    Ok((tape.value(loss).item(), g))
}

/// Predicted classes (argmax, first index on ties) for every sample.
pub fn predict(model: &DcVitModel, batch: &ChannelBatch) -> Result<Vec<usize>> {
    let mut out = Vec::with_capacity(batch.batch_size());
    let idx: Vec<usize> = (0..batch.batch_size()).collect();
    for chunk in idx.chunks(EVAL_CHUNK) {
        let sub = if chunk.len() == idx.len() { batch.clone() } else { batch.select(chunk)? };
        let logits = crate::encoder::forward_logits(&sub, model)?;
        for r in 0..logits.rows() {
            let row = logits.row(r);
            let best = (0..row.len()).fold(0, |b, j| if row[j] > row[b] { j } else { b });
            out.push(best);
        }
    }
    Ok(out)
}

pub fn accuracy(model: &DcVitModel, batch: &ChannelBatch) -> Result<f64> {
    let labels = batch
        .labels()
        .ok_or_else(|| Error::invalid("accuracy", "batch has no labels"))?;
    let pred = predict(model, batch)?;
    let hits = pred.iter().zip(labels).filter(|(p, l)| p == l).count();
    Ok(hits as f64 / labels.len() as f64)
}

fn clip(grads: &mut ModelParams, max_norm: f64) {
    let mut sq = 0.0;
    grads.for_each(&mut |_, g| sq += g.data().iter().map(|v| v * v).sum::<f64>());
    let norm = sq.sqrt();
    if norm > max_norm {
        let s = max_norm / norm;
        grads.visit_mut(&mut |_, g| *g = g.scale(s));
    }
}

/// Seeded minibatch Adam on cross-entropy.
///
/// Evaluates every `eval_every` steps and after the last step.
pub fn train(
    model: &mut DcVitModel,
    train_set: &ChannelBatch,
    val_set: Option<&ChannelBatch>,
    cfg: &TrainConfig,
) -> Result<TrainHistory> {
    cfg.validate()?;
    if train_set.labels().is_none() {
        return Err(Error::invalid("train", "training set has no labels"));
    }
    let n = train_set.batch_size();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..n).collect();
    let mut cursor = n;
    let mut opt = Adam::new(cfg.adam(), model.params.leaves().into_iter().map(|(_, t)| t));
    let mut history = TrainHistory::default();
    let mut alpha_grad_max: BTreeMap<usize, f64> = model.alphas().keys().map(|&l| (l, 0.0)).collect();
    let (mut window_loss, mut window_steps) = (0.0, 0);
    let mut stopped_early = false;
    let mut step = 0;
    while step < cfg.steps {
        step += 1;
        let mut idx = Vec::with_capacity(cfg.batch_size);
        while idx.len() < cfg.batch_size.min(n) {
            if cursor == n {
                order.shuffle(&mut rng);
                cursor = 0;
            }
            idx.push(order[cursor]);
            cursor += 1;
        }
        let mb = train_set.select(&idx)?;
        let (loss, mut grads) = loss_and_grads(model, &mb)?;
        for (l, g) in grads.alphas() {
            let e = alpha_grad_max.entry(l).or_default();
            *e = e.max(g.item().abs());
        }
        if let Some(c) = cfg.grad_clip {
            clip(&mut grads, c);
        }
        opt.step(model.params.leaves_mut(), grads.leaves().into_iter().map(|(_, g)| g))?;
        window_loss += loss;
        window_steps += 1;

        if step % cfg.eval_every == 0 || step == cfg.steps {
            let val_accuracy = val_set.map(|v| accuracy(model, v)).transpose()?;
            history.records.push(EvalRecord {
                step,
                train_loss: window_loss / window_steps as f64,
                val_accuracy,
                alphas: model.alphas(),
            });
            window_loss = 0.0;
            window_steps = 0;
            if let (Some(target), Some(acc)) = (cfg.stop_at_val_accuracy, val_accuracy) {
                if acc >= target && step < cfg.steps {
                    stopped_early = true;
                    break;
                }
            }
        }
    }
    history.summary = Some(TrainSummary {
        is_final: true,
        steps_run: step,
        stopped_early,
        final_val_accuracy: history.final_val_accuracy(),
        alphas: model.alphas(),
        alpha_grad_max,
    });
    Ok(history)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datagen::{gen_dataset, SynthTask};
    use crate::encoder::ModelConfig;
    use std::collections::BTreeSet;

    fn setup() -> (DcVitModel, ChannelBatch) {
        let cfg = ModelConfig {
            c_max: 3,
            image_size: 8,
            patch_size: 4,
            dim: 8,
            depth: 2,
            heads: 2,
            channel_layers: BTreeSet::from([2]),
            mlp_ratio: 2.0,
            num_classes: 2,
            ..ModelConfig::default()
        };
        let task = SynthTask { image_size: 8, ..SynthTask::xor(3, [0, 1], 1) };
        (DcVitModel::new(cfg, 0).unwrap(), gen_dataset(&task, 24).unwrap())
    }

    #[test]
    fn cross_entropy_examples() {
        let l = Tensor::new([1, 2], vec![1.0, 0.0]).unwrap();
        assert!((cross_entropy(&l, &[0]).unwrap() - 0.313_261_687_518_222_8).abs() < 1e-12);
        let u = Tensor::zeros([3, 5]);
        assert!((cross_entropy(&u, &[0, 3, 4]).unwrap() - 5f64.ln()).abs() < 1e-12);
        let big = Tensor::new([1, 3], vec![1e4, 0.0, 0.0]).unwrap();
        assert!(cross_entropy(&big, &[0]).unwrap() < 1e-12);
        assert!(cross_entropy(&u, &[5, 0, 0]).is_err());
    }

    #[test]
    fn zero_lr_single_step_leaves_params() {
        let (mut m, data) = setup();
        let before = m.clone();
        let cfg = TrainConfig { lr: 0.0, steps: 1, ..TrainConfig::default() };
        let h = train(&mut m, &data, None, &cfg).unwrap();
        assert_eq!(m, before);
        assert_eq!(h.records.len(), 1);
        assert!((h.records[0].train_loss - 2f64.ln()).abs() < 0.1);
    }

    #[test]
    fn training_is_reproducible_and_moves_alpha() {
        let (m0, data) = setup();
        let cfg = TrainConfig { steps: 6, eval_every: 3, batch_size: 8, lr: 1e-2, ..TrainConfig::default() };
        let (mut a, mut b) = (m0.clone(), m0.clone());
        let ha = train(&mut a, &data, Some(&data), &cfg).unwrap();
        let hb = train(&mut b, &data, Some(&data), &cfg).unwrap();
        assert_eq!(ha, hb);
        assert_eq!(a, b);
        let s = ha.summary.as_ref().unwrap();
        assert_eq!(s.alphas.len(), 1);
        assert!(s.alpha_grad_max[&2] > 0.0);
        assert_ne!(s.alphas[&2], 0.1);

        let mut buf = Vec::new();
        ha.write_jsonl(&mut buf).unwrap();
        let lines: Vec<serde_json::Value> = String::from_utf8(buf)
            .unwrap()
            .lines()
            .map(|l| serde_json::from_str(l).unwrap())
            .collect();
        assert_eq!(lines.len(), 3);
        assert_eq!(lines[2]["final"], true);
        assert!(lines[2]["alphas"]["2"].is_number());
    }

    #[test]
    fn clipping_bounds_the_norm() {
        let (m, data) = setup();
        let (_, mut g) = loss_and_grads(&m, &data).unwrap();
        clip(&mut g, 1e-3);
        let mut sq = 0.0;
        g.for_each(&mut |_, t| sq += t.data().iter().map(|v| v * v).sum::<f64>());
        assert!((sq.sqrt() - 1e-3).abs() < 1e-12);
    }
}
