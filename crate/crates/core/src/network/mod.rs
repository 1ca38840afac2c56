//! The predictive model: embedding layer, two stacked LSTM layers with
//! dropout on their outputs, and a dense softmax layer over the activity set.

mod config;
mod lstm;
mod pass;
mod tensor;
mod train;

pub use config::{TrainConfig, KEYS as CONFIG_KEYS};
pub use lstm::{lstm_cell, LstmParams};
pub use pass::{loss, Mode, LOSS_FLOOR};
pub use tensor::Matrix;
pub use train::{adam_step, batch_gradient, clamped_losses, train, AdamState, Example, History};

use std::collections::HashMap;
use std::path::Path;
use std::str::FromStr;

use rand::Rng as _;

use crate::corpus::Vocabulary;
use crate::embedding::EmbeddingTable;
use crate::error::{Error, Result};
use crate::exec::Exec;
use crate::procdata::{encode_activity, Activity, Dataset, Window, PAD_TOKEN};
use crate::seed;
use crate::weights::WeightFile;

/// Token id of the padding token.
pub const PAD_ID: u32 = 0;
/// Token id shared by all out-of-vocabulary words.
pub const UNK_ID: u32 = 1;

/// Half-width of the uniform range for embedding rows without a
/// pre-trained vector.
pub const EMBED_INIT: f64 = 0.05;

/// Names of the parameter groups, in storage order.
pub const GROUPS: [&str; 9] = [
    "embedding",
    "lstm1.W",
    "lstm1.U",
    "lstm1.b",
    "lstm2.W",
    "lstm2.U",
    "lstm2.b",
    "dense.W",
    "dense.b",
];

#[derive(Debug, Clone, PartialEq)]
pub struct Params {
    /// `(|vocab| + 2) x d`; row 0 is padding, row 1 unknown.
    pub embedding: Matrix,
    pub lstm1: LstmParams,
    pub lstm2: LstmParams,
    /// `m x h`.
    pub dense_w: Matrix,
    pub dense_b: Vec<f64>,
}

impl Params {
    pub fn zeros_like(&self) -> Params {
        Params {
            embedding: Matrix::zeros(self.embedding.rows, self.embedding.cols),
            lstm1: LstmParams::zeros(self.lstm1.input(), self.lstm1.hidden()),
            lstm2: LstmParams::zeros(self.lstm2.input(), self.lstm2.hidden()),
            dense_w: Matrix::zeros(self.dense_w.rows, self.dense_w.cols),
            dense_b: vec![0.0; self.dense_b.len()],
        }
    }

    pub fn groups(&self) -> [&[f64]; 9] {
        [
            &self.embedding.data,
            &self.lstm1.w.data,
            &self.lstm1.u.data,
            &self.lstm1.b,
            &self.lstm2.w.data,
            &self.lstm2.u.data,
            &self.lstm2.b,
            &self.dense_w.data,
            &self.dense_b,
        ]
    }

    pub fn groups_mut(&mut self) -> [&mut [f64]; 9] {
        [
            &mut self.embedding.data,
            &mut self.lstm1.w.data,
            &mut self.lstm1.u.data,
            &mut self.lstm1.b,
            &mut self.lstm2.w.data,
            &mut self.lstm2.u.data,
            &mut self.lstm2.b,
            &mut self.dense_w.data,
            &mut self.dense_b,
        ]
    }

    pub fn add_assign(&mut self, other: &Params) {
        for (a, b) in self.groups_mut().into_iter().zip(other.groups()) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += y;
            }
        }
    }

    pub fn is_finite(&self) -> bool {
        self.groups().iter().all(|g| g.iter().all(|x| x.is_finite()))
    }
}

/// How pre-trained embeddings enter a model.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EmbedMode {
    /// Copy and freeze.
    Set,
    /// Copy and keep training.
    SetTrain,
}

impl FromStr for EmbedMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<EmbedMode> {
        match s {
            "set" => Ok(EmbedMode::Set),
            "set_train" | "set+train" => Ok(EmbedMode::SetTrain),
            other => Err(Error::Usage(format!("unknown embedding mode '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub params: Params,
    pub alpha: Vec<Activity>,
    pub vocab: Vocabulary,
    pub config: TrainConfig,
    pub embedding_trainable: bool,
    alpha_index: HashMap<Activity, usize>,
}

pub(crate) fn random_rows(rows: usize, cols: usize, seed: u64) -> Matrix {
    Matrix::uniform(rows, cols, EMBED_INIT, &mut seed::rng(seed))
}

pub(crate) fn random_dense(m: usize, h: usize, seed: u64) -> Matrix {
    let limit = (6.0 / (m + h) as f64).sqrt();
    Matrix::uniform(m, h, limit, &mut seed::rng(seed))
}

impl Model {
    /// Randomly initialized model; every layer draws from its own seed
    /// derived from `config.seed`.
    pub fn new(alpha: Vec<Activity>, vocab: Vocabulary, config: TrainConfig) -> Result<Model> {
        config.validate()?;
        let (d, h, m) = (config.embed_dim, config.hidden, alpha.len());
        let s = config.seed;
        let params = Params {
            embedding: random_rows(vocab.len() + 2, d, seed::derive(s, "init/embedding")),
            lstm1: LstmParams::init(d, h, &mut seed::rng(seed::derive(s, "init/lstm1"))),
            lstm2: LstmParams::init(h, h, &mut seed::rng(seed::derive(s, "init/lstm2"))),
            dense_w: random_dense(m, h, seed::derive(s, "init/dense")),
            dense_b: vec![0.0; m],
        };
        Ok(Model::from_parts(params, alpha, vocab, config, true))
    }

    pub fn for_dataset(ds: &Dataset, config: TrainConfig) -> Result<Model> {
        Model::new(ds.alpha.clone(), ds.word_vocab.clone(), config)
    }

    pub fn from_parts(params: Params, alpha: Vec<Activity>, vocab: Vocabulary, config: TrainConfig, embedding_trainable: bool) -> Model {
        let alpha_index = alpha.iter().enumerate().map(|(i, a)| (a.clone(), i)).collect();
        Model {
            params,
            alpha,
            vocab,
            config,
            embedding_trainable,
            alpha_index,
        }
    }

    pub fn m(&self) -> usize {
        self.alpha.len()
    }

    pub fn activity_index(&self, a: &Activity) -> Option<usize> {
        self.alpha_index.get(a).copied()
    }

    pub fn token_id(&self, word: &str) -> u32 {
        if word == PAD_TOKEN {
            return PAD_ID;
        }
        self.vocab.index_of(word).map_or(UNK_ID, |i| i as u32 + 2)
    }

    /// Embedding row of `word`, if it belongs to the model vocabulary.
    pub fn embedding_row(&self, word: &str) -> Option<&[f64]> {
        self.vocab.index_of(word).map(|i| self.params.embedding.row(i + 2))
    }

    pub fn encode_activity(&self, a: &Activity) -> Vec<u32> {
        encode_activity(a, self.config.pad_to)
            .iter()
            .map(|t| self.token_id(t))
            .collect()
    }

    /// Token ids of a window; its `n` must match the model's `window_n`.
    pub fn encode_window(&self, w: &Window) -> Result<Vec<u32>> {
        if w.n != self.config.window_n {
            return Err(Error::Shape(format!(
                "window of {} activities, model expects {}",
                w.n, self.config.window_n
            )));
        }
        let pad = vec![PAD_ID; self.config.pad_to];
        Ok(w.slots()
            .flat_map(|s| s.map_or_else(|| pad.clone(), |a| self.encode_activity(a)))
            .collect())
    }

    /// Encodes every training pair of `ds`. Targets outside the model's
    /// activity set get `None`.
    pub fn examples(&self, ds: &Dataset) -> Vec<(Vec<u32>, Option<usize>)> {
        let mut cache: HashMap<&Activity, Vec<u32>> = HashMap::new();
        let pad = vec![PAD_ID; self.config.pad_to];
        let n = self.config.window_n;
        let mut out = Vec::new();
        for w in ds.windows(n) {
            let mut tokens = Vec::with_capacity(n * self.config.pad_to);
            for slot in w.slots() {
                match slot {
                    None => tokens.extend_from_slice(&pad),
                    Some(a) => tokens.extend_from_slice(cache.entry(a).or_insert_with(|| self.encode_activity(a))),
                }
            }
            out.push((tokens, self.activity_index(w.target())));
        }
        out
    }

    /// Distribution over the activity set for one window of token ids.
    pub fn forward(&self, tokens: &[u32], mode: Mode) -> Result<Vec<f64>> {
        self.check_tokens(tokens)?;
        let masks = match mode {
            Mode::Infer => None,
            Mode::Train { seed } => Some(pass::Masks::draw(&[seed], self.config.steps(), self.config.hidden, self.config.dropout)),
        };
        let trace = pass::forward_chunk(&self.params, &[tokens], masks.as_ref());
        Ok(trace.probs)
    }

    pub(crate) fn check_tokens(&self, tokens: &[u32]) -> Result<()> {
        if tokens.len() != self.config.steps() {
            return Err(Error::Shape(format!(
                "window of {} tokens, model expects {}",
                tokens.len(),
                self.config.steps()
            )));
        }
        let rows = self.params.embedding.rows;
        match tokens.iter().find(|&&t| t as usize >= rows) {
            Some(&id) => Err(Error::TokenOutOfRange { id: id as usize, rows }),
            None => Ok(()),
        }
    }

    /// Activities ranked by descending probability; ties keep activity-set order.
    pub fn predict_next(&self, w: &Window) -> Result<Vec<(Activity, f64)>> {
        let probs = self.forward(&self.encode_window(w)?, Mode::Infer)?;
        let mut ranked: Vec<(Activity, f64)> = self.alpha.iter().cloned().zip(probs).collect();
        ranked.sort_by(|a, b| b.1.total_cmp(&a.1));
        Ok(ranked)
    }

    /// Arg-max predictions for many windows, evaluated in inference mode.
    pub fn predict_indices(&self, windows: &[Vec<u32>], exec: Exec) -> Result<Vec<usize>> {
        for t in windows {
            self.check_tokens(t)?;
        }
        const CHUNK: usize = 64;
        let chunks: Vec<&[Vec<u32>]> = windows.chunks(CHUNK).collect();
        let preds = exec.map(&chunks, |chunk| {
            let seqs: Vec<&[u32]> = chunk.iter().map(Vec::as_slice).collect();
            let trace = pass::forward_chunk(&self.params, &seqs, None);
            trace
                .probs
                .chunks_exact(self.m())
                .map(argmax)
                .collect::<Vec<_>>()
        });
        Ok(preds.into_iter().flatten().collect())
    }

    /// Copies pre-trained vectors for words known to both the model and the
    /// table; every other row is redrawn uniformly in `±EMBED_INIT` from the
    /// model seed.
    pub fn init_embedding_layer(&mut self, table: &EmbeddingTable, mode: EmbedMode) -> Result<()> {
        let d = self.config.embed_dim;
        if table.dim != d {
            return Err(Error::DimensionMismatch(format!("table dim {} vs model dim {d}", table.dim)));
        }
        let mut emb = random_rows(self.vocab.len() + 2, d, seed::derive(self.config.seed, "init/embedding"));
        for (i, w) in self.vocab.words().iter().enumerate() {
            if let Some(v) = table.get(w) {
                emb.row_mut(i + 2).copy_from_slice(v);
            }
        }
        self.params.embedding = emb;
        self.embedding_trainable = mode == EmbedMode::SetTrain;
        Ok(())
    }

    pub fn to_weight_file(&self) -> WeightFile {
        let mut wf = WeightFile::new("model");
        wf.push_meta("embed_dim", self.config.embed_dim);
        wf.push_meta("hidden", self.config.hidden);
        wf.push_meta("m", self.m());
        wf.push_meta("vocab_size", self.vocab.len());
        wf.push_meta("embedding_trainable", self.embedding_trainable);
        for (k, v) in self.config.pairs() {
            wf.push_meta(&format!("config.{k}"), v);
        }
        wf.lists.push(("alpha".into(), self.alpha.iter().map(ToString::to_string).collect()));
        wf.lists.push(("vocab".into(), vocab_lines(&self.vocab)));
        let p = &self.params;
        wf.sections.push(("embedding".into(), p.embedding.clone()));
        push_lstm(&mut wf, "lstm1", &p.lstm1);
        push_lstm(&mut wf, "lstm2", &p.lstm2);
        wf.sections.push(("dense.W".into(), p.dense_w.clone()));
        wf.sections.push(("dense.b".into(), Matrix::from_vec(1, p.dense_b.len(), p.dense_b.clone())));
        wf
    }

    pub fn from_weight_file(mut wf: WeightFile) -> Result<Model> {
        if wf.kind != "model" {
            return Err(Error::format("model", 2, format!("expected kind 'model', found '{}'", wf.kind)));
        }
        let mut config = TrainConfig::default();
        let mut sec = crate::kv::Section::default();
        for (k, v) in &wf.meta {
            if let Some(key) = k.strip_prefix("config.") {
                sec.entries.insert(key.to_string(), (v.clone(), 0));
            }
        }
        config.apply(&sec, "model")?;
        let trainable = wf.require_meta("embedding_trainable")? == "true";
        let alpha = wf
            .list("alpha")
            .ok_or_else(|| Error::format("model", 0, "missing alpha list"))?
            .iter()
            .map(|s| s.parse())
            .collect::<Result<Vec<Activity>>>()?;
        let vocab = parse_vocab_lines(wf.list("vocab").ok_or_else(|| Error::format("model", 0, "missing vocab list"))?)?;
        let embedding = wf.take_section("embedding")?;
        let lstm1 = take_lstm(&mut wf, "lstm1")?;
        let lstm2 = take_lstm(&mut wf, "lstm2")?;
        let dense_w = wf.take_section("dense.W")?;
        let dense_b = wf.take_section("dense.b")?.data;
        let params = Params { embedding, lstm1, lstm2, dense_w, dense_b };
        let model = Model::from_parts(params, alpha, vocab, config, trainable);
        model.check_shapes()?;
        Ok(model)
    }

    pub fn check_shapes(&self) -> Result<()> {
        let p = &self.params;
        let (d, h, m) = (self.config.embed_dim, self.config.hidden, self.m());
        p.lstm1.check_shapes()?;
        p.lstm2.check_shapes()?;
        let ok = p.embedding.shape() == (self.vocab.len() + 2, d)
            && p.lstm1.input() == d
            && p.lstm1.hidden() == h
            && p.lstm2.input() == h
            && p.lstm2.hidden() == h
            && p.dense_w.shape() == (m, h)
            && p.dense_b.len() == m;
        if !ok {
            return Err(Error::Shape(format!("model parameters inconsistent with d={d}, h={h}, m={m}")));
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_weight_file().save(path)
    }

    pub fn load(path: &Path) -> Result<Model> {
        Model::from_weight_file(WeightFile::load(path)?)
    }
}

pub(crate) fn argmax(p: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in p.iter().enumerate() {
        if v > p[best] {
            best = i;
        }
    }
    best
}

pub(crate) fn push_lstm(wf: &mut WeightFile, name: &str, p: &LstmParams) {
    wf.sections.push((format!("{name}.W"), p.w.clone()));
    wf.sections.push((format!("{name}.U"), p.u.clone()));
    wf.sections.push((format!("{name}.b"), Matrix::from_vec(1, p.b.len(), p.b.clone())));
}

pub(crate) fn take_lstm(wf: &mut WeightFile, name: &str) -> Result<LstmParams> {
    let p = LstmParams {
        w: wf.take_section(&format!("{name}.W"))?,
        u: wf.take_section(&format!("{name}.U"))?,
        b: wf.take_section(&format!("{name}.b"))?.data,
    };
    p.check_shapes()?;
    Ok(p)
}

pub(crate) fn vocab_lines(v: &Vocabulary) -> Vec<String> {
    v.words().iter().zip(v.counts()).map(|(w, c)| format!("{w}\t{c}")).collect()
}

pub(crate) fn parse_vocab_lines(lines: &[String]) -> Result<Vocabulary> {
    let pairs = lines
        .iter()
        .map(|l| {
            let (w, c) = l.split_once('\t').ok_or_else(|| Error::format("vocab", 0, format!("bad entry '{l}'")))?;
            let c = c.parse().map_err(|_| Error::format("vocab", 0, format!("bad count in '{l}'")))?;
            Ok((w.to_string(), c))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Vocabulary::from_ordered(pairs))
}

/// Uniformly random model-sized vector, used by tests and benches.
pub fn random_tokens(model: &Model, seed: u64) -> Vec<u32> {
    let mut rng = seed::rng(seed);
    let rows = model.params.embedding.rows as u32;
    (0..model.config.steps()).map(|_| rng.random_range(0..rows)).collect()
}

#[cfg(test)]
mod tests;
