//! Word embedding training: weighted log-count factorization of a
//! co-occurrence matrix, and continuous bag-of-words with negative sampling.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng as _;

use crate::corpus::{Vocabulary, WordCorpus};
use crate::error::{Error, Result};
use crate::exec::Exec;
use crate::seed;

#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingTable {
    pub vocab: Vocabulary,
    /// Row-major `|vocab| x dim`.
    pub vectors: Vec<f64>,
    pub dim: usize,
    pub method_tag: String,
    pub corpus_tag: String,
}

impl EmbeddingTable {
    /// Uniform initialization in `[-0.5/dim, 0.5/dim]`.
    pub fn random(vocab: Vocabulary, dim: usize, seed: u64) -> EmbeddingTable {
        let mut rng = seed::rng(seed);
        let half = 0.5 / dim as f64;
        let vectors = (0..vocab.len() * dim)
            .map(|_| rng.random_range(-half..=half))
            .collect();
        EmbeddingTable {
            vocab,
            vectors,
            dim,
            method_tag: "random".into(),
            corpus_tag: String::new(),
        }
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.vectors[i * self.dim..(i + 1) * self.dim]
    }

    pub fn get(&self, word: &str) -> Option<&[f64]> {
        self.vocab.index_of(word).map(|i| self.row(i))
    }

    pub fn is_finite(&self) -> bool {
        self.vectors.iter().all(|x| x.is_finite())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut out = String::new();
        let _ = writeln!(out, "{} {}", self.vocab.len(), self.dim);
        for (i, w) in self.vocab.words().iter().enumerate() {
            out.push_str(w);
            for x in self.row(i) {
                let _ = write!(out, " {x}");
            }
            out.push('\n');
        }
        fs::write(path, out).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<EmbeddingTable> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text, &path.display().to_string())
    }

    pub fn parse(text: &str, origin: &str) -> Result<EmbeddingTable> {
        let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
        let (_, header) = lines
            .next()
            .ok_or_else(|| Error::format(origin, 1, "missing header"))?;
        let head: Vec<&str> = header.split_whitespace().collect();
        let parse_usize = |s: &str| s.parse::<usize>().ok();
        let (count, dim) = match head.as_slice() {
            [c, d] => match (parse_usize(c), parse_usize(d)) {
                (Some(c), Some(d)) if d > 0 => (c, d),
                _ => return Err(Error::format(origin, 1, "header must be '<count> <dim>'")),
            },
            _ => return Err(Error::format(origin, 1, "header must be '<count> <dim>'")),
        };
        let mut words = Vec::with_capacity(count);
        let mut vectors = Vec::with_capacity(count * dim);
        for (row, (i, line)) in lines.enumerate() {
            let lineno = i + 1;
            let mut parts = line.split_whitespace();
            let word = parts.next().expect("line is not blank");
            let vals: Vec<&str> = parts.collect();
            if vals.len() != dim {
                if row == 0 {
                    return Err(Error::DimensionMismatch(format!(
                        "{origin}: header declares dim {dim}, first row has {}",
                        vals.len()
                    )));
                }
                return Err(Error::format(
                    origin,
                    lineno,
                    format!("expected {} columns, found {}", dim + 1, vals.len() + 1),
                ));
            }
            for v in vals {
                let x: f64 = v
                    .parse()
                    .map_err(|_| Error::format(origin, lineno, format!("bad float '{v}'")))?;
                vectors.push(x);
            }
            words.push((word.to_string(), 1));
        }
        if words.len() != count {
            return Err(Error::DimensionMismatch(format!(
                "{origin}: header declares {count} rows, body has {}",
                words.len()
            )));
        }
        let vocab = Vocabulary::from_ordered(words);
        if vocab.len() != count {
            return Err(Error::format(origin, 1, "duplicate word in embedding file"));
        }
        Ok(EmbeddingTable {
            vocab,
            vectors,
            dim,
            method_tag: "file".into(),
            corpus_tag: origin.to_string(),
        })
    }
}

pub fn cosine_similarity(u: &[f64], v: &[f64]) -> Result<f64> {
    if u.len() != v.len() {
        return Err(Error::DimensionMismatch(format!("{} vs {}", u.len(), v.len())));
    }
    let nu = dot(u, u).sqrt();
    let nv = dot(v, v).sqrt();
    if nu == 0.0 || nv == 0.0 {
        return Err(Error::UndefinedSimilarity);
    }
    Ok((dot(u, v) / (nu * nv)).clamp(-1.0, 1.0))
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Symmetric sparse co-occurrence counts over vocabulary indices.
#[derive(Debug, Clone, PartialEq)]
pub struct CooccurrenceMatrix {
    pub vocab: Vocabulary,
    pub entries: BTreeMap<(usize, usize), f64>,
}

impl CooccurrenceMatrix {
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.entries.get(&(i, j)).copied().unwrap_or(0.0)
    }

    pub fn get_words(&self, a: &str, b: &str) -> f64 {
        match (self.vocab.index_of(a), self.vocab.index_of(b)) {
            (Some(i), Some(j)) => self.get(i, j),
            _ => 0.0,
        }
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

fn doc_ids(corpus: &WordCorpus, vocab: &Vocabulary) -> Vec<Vec<usize>> {
    corpus
        .documents()
        .map(|d| d.iter().filter_map(|w| vocab.index_of(w)).collect())
        .collect()
}

/// Counts in-vocabulary neighbours within `window` positions of each other,
/// never across document boundaries. Out-of-vocabulary tokens keep their
/// position. Each pair adds to both symmetric cells (once on the diagonal).
pub fn build_cooccurrence(
    corpus: &WordCorpus,
    vocab: &Vocabulary,
    window: usize,
    distance_weighting: bool,
    exec: Exec,
) -> Result<CooccurrenceMatrix> {
    if window == 0 {
        return Err(Error::Usage("window must be at least 1".into()));
    }
    let docs: Vec<&[String]> = corpus.documents().collect();
    let shards = exec.map(&docs, |doc| {
        let ids: Vec<Option<usize>> = doc.iter().map(|w| vocab.index_of(w)).collect();
        let mut local: BTreeMap<(usize, usize), f64> = BTreeMap::new();
        for (p, a) in ids.iter().enumerate() {
            let Some(a) = *a else { continue };
            for d in 1..=window {
                let Some(&Some(b)) = ids.get(p + d) else { continue };
                let w = if distance_weighting { 1.0 / d as f64 } else { 1.0 };
                *local.entry((a, b)).or_default() += w;
                if a != b {
                    *local.entry((b, a)).or_default() += w;
                }
            }
        }
        local
    });
    let mut entries = BTreeMap::new();
    for shard in shards {
        for (k, v) in shard {
            *entries.entry(k).or_default() += v;
        }
    }
    Ok(CooccurrenceMatrix {
        vocab: vocab.clone(),
        entries,
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CoocParams {
    pub dim: usize,
    pub epochs: usize,
    pub learning_rate: f64,
    pub x_max: f64,
    pub alpha: f64,
    pub seed: u64,
}

impl Default for CoocParams {
    fn default() -> Self {
        CoocParams {
            dim: 100,
            epochs: 15,
            learning_rate: 0.05,
            x_max: 100.0,
            alpha: 0.75,
            seed: 0,
        }
    }
}

/// Result of an embedding trainer: the table and the epoch-averaged loss.
#[derive(Debug, Clone)]
pub struct Trained {
    pub table: EmbeddingTable,
    pub epoch_loss: Vec<f64>,
}

/// Weighted least squares on log counts with AdaGrad updates. The returned
/// vector of each word is the sum of its word and context vectors.
pub fn train_cooc_embeddings(x: &CooccurrenceMatrix, p: &CoocParams) -> Result<Trained> {
    if p.dim < 2 {
        return Err(Error::Usage("dim must be at least 2".into()));
    }
    if x.is_empty() {
        return Err(Error::Usage("empty co-occurrence matrix".into()));
    }
    let n = x.vocab.len();
    let d = p.dim;
    let mut rng = seed::rng(p.seed);
    let half = 0.5 / d as f64;
    let mut w: Vec<f64> = (0..n * d).map(|_| rng.random_range(-half..=half)).collect();
    let mut wc: Vec<f64> = (0..n * d).map(|_| rng.random_range(-half..=half)).collect();
    let mut b: Vec<f64> = (0..n).map(|_| rng.random_range(-half..=half)).collect();
    let mut bc: Vec<f64> = (0..n).map(|_| rng.random_range(-half..=half)).collect();
    let mut gw = vec![1.0f64; n * d];
    let mut gwc = vec![1.0f64; n * d];
    let mut gb = vec![1.0f64; n];
    let mut gbc = vec![1.0f64; n];

    let mut cells: Vec<(usize, usize, f64)> = x.entries.iter().map(|(&(i, j), &v)| (i, j, v)).collect();
    let mut epoch_loss = Vec::with_capacity(p.epochs);
    for _ in 0..p.epochs {
        cells.shuffle(&mut rng);
        let mut total = 0.0;
        for &(i, j, xij) in &cells {
            let wi = &mut w[i * d..(i + 1) * d];
            let wj = &mut wc[j * d..(j + 1) * d];
            let diff = dot(wi, wj) + b[i] + bc[j] - xij.ln();
            let weight = if xij < p.x_max { (xij / p.x_max).powf(p.alpha) } else { 1.0 };
            let fdiff = weight * diff;
            total += 0.5 * fdiff * diff;
            for k in 0..d {
                let gi = fdiff * wj[k];
                let gc = fdiff * wi[k];
                wi[k] -= p.learning_rate * gi / gw[i * d + k].sqrt();
                wj[k] -= p.learning_rate * gc / gwc[j * d + k].sqrt();
                gw[i * d + k] += gi * gi;
                gwc[j * d + k] += gc * gc;
            }
            b[i] -= p.learning_rate * fdiff / gb[i].sqrt();
            bc[j] -= p.learning_rate * fdiff / gbc[j].sqrt();
            gb[i] += fdiff * fdiff;
            gbc[j] += fdiff * fdiff;
        }
        epoch_loss.push(total / cells.len() as f64);
    }
    let vectors = w.iter().zip(&wc).map(|(a, c)| a + c).collect();
    Ok(Trained {
        table: EmbeddingTable {
            vocab: x.vocab.clone(),
            vectors,
            dim: d,
            method_tag: "cooc".into(),
            corpus_tag: String::new(),
        },
        epoch_loss,
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CbowParams {
    pub dim: usize,
    pub window: usize,
    pub negatives: usize,
    pub epochs: usize,
    pub learning_rate: f64,
    pub seed: u64,
}

impl Default for CbowParams {
    fn default() -> Self {
        CbowParams {
            dim: 100,
            window: 5,
            negatives: 5,
            epochs: 15,
            learning_rate: 0.05,
            seed: 0,
        }
    }
}

/// Cumulative unigram^0.75 distribution for negative sampling.
struct NegativeSampler {
    cdf: Vec<f64>,
}

impl NegativeSampler {
    fn new(counts: &[u64]) -> Self {
        let mut acc = 0.0;
        let mut cdf: Vec<f64> = counts
            .iter()
            .map(|&c| {
                acc += (c as f64).powf(0.75);
                acc
            })
            .collect();
        for x in &mut cdf {
            *x /= acc;
        }
        NegativeSampler { cdf }
    }

    fn sample(&self, rng: &mut seed::Rng) -> usize {
        let u: f64 = rng.random();
        self.cdf.partition_point(|&c| c < u).min(self.cdf.len() - 1)
    }
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Continuous bag-of-words with negative sampling and linearly decaying
/// learning rate. Out-of-vocabulary tokens are dropped before windowing.
pub fn train_context_embeddings(corpus: &WordCorpus, vocab: &Vocabulary, p: &CbowParams) -> Result<Trained> {
    if p.dim < 2 {
        return Err(Error::Usage("dim must be at least 2".into()));
    }
    if p.window == 0 || p.negatives == 0 {
        return Err(Error::Usage("window and negatives must be at least 1".into()));
    }
    let docs = doc_ids(corpus, vocab);
    let n_tokens: usize = docs.iter().map(Vec::len).sum();
    if n_tokens < 2 * p.window + 1 {
        return Err(Error::Usage(format!(
            "corpus has {n_tokens} in-vocabulary tokens, need at least {}",
            2 * p.window + 1
        )));
    }
    let n = vocab.len();
    let d = p.dim;
    let init = EmbeddingTable::random(vocab.clone(), d, p.seed);
    let mut syn0 = init.vectors;
    let mut syn1 = vec![0.0; n * d];
    let sampler = NegativeSampler::new(vocab.counts());
    let mut rng = seed::rng(seed::derive(p.seed, "cbow"));

    let total_steps = (p.epochs * n_tokens).max(1) as f64;
    let mut step = 0usize;
    let mut h = vec![0.0; d];
    let mut neu1e = vec![0.0; d];
    let mut epoch_loss = Vec::with_capacity(p.epochs);
    for _ in 0..p.epochs {
        let mut total = 0.0;
        let mut count = 0usize;
        for doc in &docs {
            for (pos, &target) in doc.iter().enumerate() {
                let lr = (p.learning_rate * (1.0 - step as f64 / total_steps)).max(p.learning_rate * 1e-4);
                step += 1;
                let lo = pos.saturating_sub(p.window);
                let hi = (pos + p.window).min(doc.len() - 1);
                let ctx: Vec<usize> = (lo..=hi).filter(|&q| q != pos).map(|q| doc[q]).collect();
                if ctx.is_empty() {
                    continue;
                }
                h.iter_mut().for_each(|x| *x = 0.0);
                for &c in &ctx {
                    for (hk, v) in h.iter_mut().zip(&syn0[c * d..(c + 1) * d]) {
                        *hk += v;
                    }
                }
                let inv = 1.0 / ctx.len() as f64;
                h.iter_mut().for_each(|x| *x *= inv);
                neu1e.iter_mut().for_each(|x| *x = 0.0);
                for s in 0..=p.negatives {
                    let (word, label) = if s == 0 {
                        (target, 1.0)
                    } else {
                        let w = sampler.sample(&mut rng);
                        if w == target {
                            continue;
                        }
                        (w, 0.0)
                    };
                    let out = &mut syn1[word * d..(word + 1) * d];
                    let score = sigmoid(dot(&h, out));
                    total -= if label > 0.5 { score.max(1e-12).ln() } else { (1.0 - score).max(1e-12).ln() };
                    let g = (label - score) * lr;
                    for k in 0..d {
                        neu1e[k] += g * out[k];
                        out[k] += g * h[k];
                    }
                }
                for &c in &ctx {
                    for (v, e) in syn0[c * d..(c + 1) * d].iter_mut().zip(&neu1e) {
                        *v += e;
                    }
                }
                count += 1;
            }
        }
        epoch_loss.push(total / count.max(1) as f64);
    }
    Ok(Trained {
        table: EmbeddingTable {
            vocab: vocab.clone(),
            vectors: syn0,
            dim: d,
            method_tag: "cbow".into(),
            corpus_tag: corpus.name.clone(),
        },
        epoch_loss,
    })
}
