use rand::seq::SliceRandom;
use rand::Rng as _;

use super::pass::{self, backward_chunk, forward_chunk, Masks};
use super::{argmax, Model, Params, TrainConfig};
use crate::error::{Error, Result};
use crate::exec::Exec;
use crate::procdata::Dataset;
use crate::seed;

/// Examples per gradient chunk. Fixed so that results do not depend on the
/// number of worker threads.
const CHUNK: usize = 16;

/// An encoded window and the index of its target activity.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Example {
    pub tokens: Vec<u32>,
    pub target: usize,
}

/// Number of loss evaluations floored so far in this process.
pub fn clamped_losses() -> u64 {
    pass::clamped_count()
}

/// Gradient of the mean loss over `batch`. `mask_seeds` enables dropout with
/// one mask stream per example. Chunks run through `exec` and are summed in
/// order.
pub fn batch_gradient(model: &Model, batch: &[&Example], mask_seeds: Option<&[u64]>, exec: Exec) -> (Params, f64, usize) {
    let scale = 1.0 / batch.len() as f64;
    let p = &model.params;
    let cfg = &model.config;
    let idx: Vec<usize> = (0..batch.len()).step_by(CHUNK).collect();
    let parts = exec.map(&idx, |&start| {
        let end = (start + CHUNK).min(batch.len());
        let seqs: Vec<&[u32]> = batch[start..end].iter().map(|e| e.tokens.as_slice()).collect();
        let targets: Vec<usize> = batch[start..end].iter().map(|e| e.target).collect();
        let masks = mask_seeds.map(|s| Masks::draw(&s[start..end], cfg.steps(), cfg.hidden, cfg.dropout));
        let tr = forward_chunk(p, &seqs, masks.as_ref());
        let mut grad = p.zeros_like();
        backward_chunk(p, &tr, &targets, scale, masks.as_ref(), model.embedding_trainable, &mut grad);
        let m = p.dense_b.len();
        let mut loss = 0.0;
        let mut correct = 0;
        for (row, &t) in tr.probs.chunks_exact(m).zip(&targets) {
            loss += pass::loss(row, t);
            correct += usize::from(argmax(row) == t);
        }
        (grad, loss, correct)
    });
    let mut parts = parts.into_iter();
    let (mut grad, mut loss, mut correct) = parts.next().unwrap_or_else(|| (p.zeros_like(), 0.0, 0));
    for (g, l, c) in parts {
        grad.add_assign(&g);
        loss += l;
        correct += c;
    }
    (grad, loss, correct)
}

/// First and second moment estimates for Adam.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: Params,
    pub v: Params,
    pub t: u64,
}

impl AdamState {
    pub fn new(params: &Params) -> AdamState {
        AdamState {
            m: params.zeros_like(),
            v: params.zeros_like(),
            t: 0,
        }
    }
}

/// Adam with bias correction. The embedding group is skipped when
/// `update_embedding` is false.
pub fn adam_step(params: &mut Params, grads: &Params, state: &mut AdamState, cfg: &TrainConfig, update_embedding: bool) {
    state.t += 1;
    let t = state.t as i32;
    let c1 = 1.0 - cfg.beta1.powi(t);
    let c2 = 1.0 - cfg.beta2.powi(t);
    let groups = params
        .groups_mut()
        .into_iter()
        .zip(grads.groups())
        .zip(state.m.groups_mut())
        .zip(state.v.groups_mut());
    for (k, (((p, g), m), v)) in groups.enumerate() {
        if k == 0 && !update_embedding {
            continue;
        }
        for i in 0..p.len() {
            m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * g[i];
            v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * g[i] * g[i];
            let mh = m[i] / c1;
            let vh = v[i] / c2;
            p[i] -= cfg.learning_rate * mh / (vh.sqrt() + cfg.epsilon);
        }
    }
}

/// Per-epoch training curves.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct History {
    pub epoch_loss: Vec<f64>,
    /// Training accuracy in percent, measured under dropout.
    pub epoch_accuracy: Vec<f64>,
}

/// Trains every layer (the embedding only if trainable) with Adam on all
/// windows of `data`, using seeded shuffling and per-batch dropout masks.
pub fn train(model: &mut Model, data: &Dataset, exec: Exec) -> Result<History> {
    model.config.validate()?;
    model.check_shapes()?;
    if model.m() < 2 {
        return Err(Error::DegenerateDataset(format!("{} activities in the label set", model.m())));
    }
    let mut examples = Vec::new();
    for (tokens, target) in model.examples(data) {
        let target = target.ok_or_else(|| {
            Error::DegenerateDataset(format!("dataset '{}' has activities outside the model's label set", data.name))
        })?;
        examples.push(Example { tokens, target });
    }
    train_examples(model, &examples, exec)
}

pub(crate) fn train_examples(model: &mut Model, examples: &[Example], exec: Exec) -> Result<History> {
    if examples.is_empty() {
        return Err(Error::DegenerateDataset("no training pairs".into()));
    }
    let cfg = model.config;
    let mut order: Vec<usize> = (0..examples.len()).collect();
    let mut shuffle_rng = seed::rng(seed::derive(cfg.seed, "train/shuffle"));
    let mut state = AdamState::new(&model.params);
    let mut history = History::default();
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut shuffle_rng);
        let mut loss = 0.0;
        let mut correct = 0;
        for (bi, idx) in order.chunks(cfg.batch_size).enumerate() {
            let batch: Vec<&Example> = idx.iter().map(|&i| &examples[i]).collect();
            let mut mask_rng = seed::rng(seed::derive(cfg.seed, &format!("train/dropout/{epoch}/{bi}")));
            let seeds: Vec<u64> = batch.iter().map(|_| mask_rng.random()).collect();
            let masks = (cfg.dropout > 0.0).then_some(seeds.as_slice());
            let (grad, l, c) = batch_gradient(model, &batch, masks, exec);
            let update_embedding = model.embedding_trainable;
            adam_step(&mut model.params, &grad, &mut state, &cfg, update_embedding);
            loss += l;
            correct += c;
        }
        let n = examples.len() as f64;
        history.epoch_loss.push(loss / n);
        history.epoch_accuracy.push(100.0 * correct as f64 / n);
        log::debug!(
            "epoch {}: loss {:.4} acc {:.1}%",
            epoch + 1,
            loss / n,
            100.0 * correct as f64 / n
        );
    }
    Ok(history)
}
