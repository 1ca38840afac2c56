//! Batched forward and backward passes over a chunk of equal-length windows.

use std::sync::atomic::{AtomicU64, Ordering};

use rand::Rng as _;

use super::lstm::{layer_backward, layer_forward, LayerTrace};
use super::tensor::{gemm, softmax};
use super::Params;
use crate::seed;

/// Probability floor applied before taking the log in the loss.
pub const LOSS_FLOOR: f64 = 1e-12;

static CLAMPED: AtomicU64 = AtomicU64::new(0);

pub(crate) fn clamped_count() -> u64 {
    CLAMPED.load(Ordering::Relaxed)
}

/// Categorical cross-entropy `-ln p[target]`, with `p` floored at
/// [`LOSS_FLOOR`]. Each floored call bumps a process-wide counter.
pub fn loss(pred: &[f64], target: usize) -> f64 {
    let p = pred[target];
    if p < LOSS_FLOOR {
        CLAMPED.fetch_add(1, Ordering::Relaxed);
        return -LOSS_FLOOR.ln();
    }
    -p.ln()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    /// Dropout disabled.
    Infer,
    /// Dropout masks drawn from `seed`.
    Train { seed: u64 },
}

/// Inverted-dropout masks for a chunk: values are 0 or `1/(1-p)`.
pub(crate) struct Masks {
    /// Layer-1 outputs, time-major `steps * batch * h`.
    pub layer1: Vec<f64>,
    /// Final layer-2 output, `batch * h`.
    pub layer2: Vec<f64>,
}

impl Masks {
    /// One RNG stream per example so masks do not depend on chunking.
    pub fn draw(seeds: &[u64], steps: usize, h: usize, p: f64) -> Masks {
        let batch = seeds.len();
        let mut layer1 = vec![1.0; steps * batch * h];
        let mut layer2 = vec![1.0; batch * h];
        if p > 0.0 {
            let keep = 1.0 / (1.0 - p);
            for (b, &s) in seeds.iter().enumerate() {
                let mut rng = seed::rng(s);
                for t in 0..steps {
                    for v in &mut layer1[(t * batch + b) * h..(t * batch + b + 1) * h] {
                        *v = if rng.random::<f64>() < p { 0.0 } else { keep };
                    }
                }
                for v in &mut layer2[b * h..(b + 1) * h] {
                    *v = if rng.random::<f64>() < p { 0.0 } else { keep };
                }
            }
        }
        Masks { layer1, layer2 }
    }
}

pub(crate) struct Trace {
    pub batch: usize,
    pub steps: usize,
    /// Time-major token ids.
    pub tokens: Vec<u32>,
    pub l1: LayerTrace,
    /// Layer-2 inputs (layer-1 outputs after dropout).
    pub x2: Vec<f64>,
    pub l2: LayerTrace,
    /// Dense-layer input (final layer-2 output after dropout).
    pub hf: Vec<f64>,
    /// Softmax outputs, `batch * m`.
    pub probs: Vec<f64>,
}

/// Input projections `W1 e + b1` for every embedding row.
fn token_projections(p: &Params) -> Vec<f64> {
    let rows = p.embedding.rows;
    let g4 = p.lstm1.b.len();
    let mut proj = Vec::with_capacity(rows * g4);
    for _ in 0..rows {
        proj.extend_from_slice(&p.lstm1.b);
    }
    gemm(rows, p.embedding.cols, g4, &p.embedding.data, false, &p.lstm1.w.data, true, 1.0, &mut proj);
    proj
}

pub(crate) fn forward_chunk(p: &Params, seqs: &[&[u32]], masks: Option<&Masks>) -> Trace {
    let batch = seqs.len();
    let steps = seqs.first().map_or(0, |s| s.len());
    let h = p.lstm1.hidden();
    let g4 = 4 * h;
    let m = p.dense_b.len();

    let mut tokens = vec![0u32; steps * batch];
    for (b, s) in seqs.iter().enumerate() {
        debug_assert_eq!(s.len(), steps);
        for (t, &id) in s.iter().enumerate() {
            tokens[t * batch + b] = id;
        }
    }
    let proj = token_projections(p);
    let mut zin1 = Vec::with_capacity(steps * batch * g4);
    for &id in &tokens {
        let id = id as usize;
        zin1.extend_from_slice(&proj[id * g4..(id + 1) * g4]);
    }
    let l1 = layer_forward(&p.lstm1, zin1, steps, batch);

    let mut x2 = l1.h.clone();
    if let Some(mk) = masks {
        x2.iter_mut().zip(&mk.layer1).for_each(|(x, k)| *x *= k);
    }
    let mut zin2 = Vec::with_capacity(steps * batch * g4);
    for _ in 0..steps * batch {
        zin2.extend_from_slice(&p.lstm2.b);
    }
    gemm(steps * batch, h, g4, &x2, false, &p.lstm2.w.data, true, 1.0, &mut zin2);
    let l2 = layer_forward(&p.lstm2, zin2, steps, batch);

    let mut hf = if steps > 0 { l2.h_at(steps - 1, h).to_vec() } else { vec![0.0; batch * h] };
    if let Some(mk) = masks {
        hf.iter_mut().zip(&mk.layer2).for_each(|(x, k)| *x *= k);
    }
    let mut probs = Vec::with_capacity(batch * m);
    for _ in 0..batch {
        probs.extend_from_slice(&p.dense_b);
    }
    gemm(batch, h, m, &hf, false, &p.dense_w.data, true, 1.0, &mut probs);
    for row in probs.chunks_exact_mut(m) {
        softmax(row);
    }
    Trace {
        batch,
        steps,
        tokens,
        l1,
        x2,
        l2,
        hf,
        probs,
    }
}

/// Accumulates into `grad` the gradient of `scale * sum_b loss_b`.
pub(crate) fn backward_chunk(
    p: &Params,
    tr: &Trace,
    targets: &[usize],
    scale: f64,
    masks: Option<&Masks>,
    embedding_trainable: bool,
    grad: &mut Params,
) {
    let (batch, steps) = (tr.batch, tr.steps);
    let h = p.lstm1.hidden();
    let g4 = 4 * h;
    let m = p.dense_b.len();
    let d = p.embedding.cols;
    let vrows = p.embedding.rows;

    let mut dlogits = tr.probs.clone();
    for (b, &t) in targets.iter().enumerate() {
        dlogits[b * m + t] -= 1.0;
    }
    dlogits.iter_mut().for_each(|x| *x *= scale);
    gemm(m, batch, h, &dlogits, true, &tr.hf, false, 1.0, &mut grad.dense_w.data);
    for row in dlogits.chunks_exact(m) {
        grad.dense_b.iter_mut().zip(row).for_each(|(g, d)| *g += d);
    }
    if steps == 0 {
        return;
    }

    let mut dh2 = vec![0.0; steps * batch * h];
    let last = &mut dh2[(steps - 1) * batch * h..];
    gemm(batch, m, h, &dlogits, false, &p.dense_w.data, false, 0.0, last);
    if let Some(mk) = masks {
        last.iter_mut().zip(&mk.layer2).for_each(|(x, k)| *x *= k);
    }
    let dz2 = layer_backward(&p.lstm2, &tr.l2, &dh2, &mut grad.lstm2);
    gemm(g4, steps * batch, h, &dz2, true, &tr.x2, false, 1.0, &mut grad.lstm2.w.data);
    let mut dh1 = vec![0.0; steps * batch * h];
    gemm(steps * batch, g4, h, &dz2, false, &p.lstm2.w.data, false, 0.0, &mut dh1);
    if let Some(mk) = masks {
        dh1.iter_mut().zip(&mk.layer1).for_each(|(x, k)| *x *= k);
    }
    let dz1 = layer_backward(&p.lstm1, &tr.l1, &dh1, &mut grad.lstm1);

    // Gate gradients summed per token id: dW1 = G^T E, dE = G W1.
    let mut per_token = vec![0.0; vrows * g4];
    for (r, &id) in tr.tokens.iter().enumerate() {
        let dst = &mut per_token[id as usize * g4..(id as usize + 1) * g4];
        dst.iter_mut().zip(&dz1[r * g4..(r + 1) * g4]).for_each(|(a, b)| *a += b);
    }
    gemm(g4, vrows, d, &per_token, true, &p.embedding.data, false, 1.0, &mut grad.lstm1.w.data);
    if embedding_trainable {
        gemm(vrows, g4, d, &per_token, false, &p.lstm1.w.data, false, 1.0, &mut grad.embedding.data);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn loss_examples() {
        assert_eq!(loss(&[0.0, 1.0], 1), 0.0);
        assert!((loss(&[0.25; 4], 2) - 4f64.ln()).abs() < 1e-12);
        assert!((loss(&[0.5, 0.5], 0) - 2f64.ln()).abs() < 1e-12);
        let before = clamped_count();
        assert!((loss(&[1.0, 0.0], 1) - 1e12f64.ln()).abs() < 1e-9);
        assert!(clamped_count() > before);
    }

    #[test]
    fn masks_are_inverted_dropout() {
        let mk = Masks::draw(&[1, 2, 3], 4, 50, 0.2);
        let keep = 1.0 / 0.8;
        assert!(mk.layer1.iter().chain(&mk.layer2).all(|&v| v == 0.0 || v == keep));
        let dropped = mk.layer1.iter().filter(|&&v| v == 0.0).count() as f64 / mk.layer1.len() as f64;
        assert!((dropped - 0.2).abs() < 0.05, "{dropped}");
        // example 1 drawn alone equals example 1 inside the chunk
        let solo = Masks::draw(&[2], 4, 50, 0.2);
        for t in 0..4 {
            assert_eq!(&mk.layer1[(t * 3 + 1) * 50..(t * 3 + 2) * 50], &solo.layer1[t * 50..(t + 1) * 50]);
        }
    }
}
