//! Layer-wise knowledge transfer between models trained on different
//! datasets, and dataset mixing.

use std::collections::HashSet;
use std::path::Path;

use crate::corpus::Vocabulary;
use crate::embedding::EmbeddingTable;
use crate::error::{Error, Result};
use crate::network::{parse_vocab_lines, push_lstm, random_dense, random_rows, take_lstm, vocab_lines};
use crate::network::{LstmParams, Matrix, Model, Params, TrainConfig};
use crate::procdata::{Dataset, InterventionSequence};
use crate::seed;
use crate::weights::WeightFile;

pub const BUNDLE_KIND: &str = "bundle";

/// Embedding and recurrent layers of a source model. The dense layer is
/// tied to the source activity set and never travels.
#[derive(Debug, Clone, PartialEq)]
pub struct TransferBundle {
    /// Label of the dataset the source model was trained on.
    pub source: String,
    pub vocab: Vocabulary,
    /// `(|vocab| + 2) x d`, same row layout as a model embedding.
    pub embedding: Matrix,
    pub lstm1: LstmParams,
    pub lstm2: LstmParams,
}

impl TransferBundle {
    pub fn embed_dim(&self) -> usize {
        self.embedding.cols
    }

    pub fn hidden(&self) -> usize {
        self.lstm1.hidden()
    }

    pub fn check_shapes(&self) -> Result<()> {
        self.lstm1.check_shapes()?;
        self.lstm2.check_shapes()?;
        let (d, h) = (self.embed_dim(), self.hidden());
        if self.embedding.rows != self.vocab.len() + 2
            || self.lstm1.input() != d
            || self.lstm2.input() != h
            || self.lstm2.hidden() != h
        {
            return Err(Error::Shape(format!("bundle layers inconsistent with d={d}, h={h}")));
        }
        Ok(())
    }

    pub fn to_weight_file(&self) -> WeightFile {
        let mut wf = WeightFile::new(BUNDLE_KIND);
        wf.push_meta("source", &self.source);
        wf.push_meta("embed_dim", self.embed_dim());
        wf.push_meta("hidden", self.hidden());
        wf.push_meta("vocab_size", self.vocab.len());
        wf.lists.push(("vocab".into(), vocab_lines(&self.vocab)));
        wf.sections.push(("embedding".into(), self.embedding.clone()));
        push_lstm(&mut wf, "lstm1", &self.lstm1);
        push_lstm(&mut wf, "lstm2", &self.lstm2);
        wf
    }

    pub fn from_weight_file(mut wf: WeightFile) -> Result<TransferBundle> {
        if wf.kind != BUNDLE_KIND {
            return Err(Error::format("bundle", 2, format!("expected kind '{BUNDLE_KIND}', found '{}'", wf.kind)));
        }
        if let Some((name, _)) = wf.sections.iter().find(|(n, _)| n.starts_with("dense")) {
            return Err(Error::format("bundle", 0, format!("bundles cannot carry '{name}'")));
        }
        let source = wf.require_meta("source")?.to_string();
        let vocab = parse_vocab_lines(wf.list("vocab").ok_or_else(|| Error::format("bundle", 0, "missing vocab list"))?)?;
        let bundle = TransferBundle {
            source,
            vocab,
            embedding: wf.take_section("embedding")?,
            lstm1: take_lstm(&mut wf, "lstm1")?,
            lstm2: take_lstm(&mut wf, "lstm2")?,
        };
        bundle.check_shapes()?;
        Ok(bundle)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_weight_file().save(path)
    }

    pub fn load(path: &Path) -> Result<TransferBundle> {
        TransferBundle::from_weight_file(WeightFile::load(path)?)
    }
}

/// Copies the embedding and both recurrent layers of `model`.
pub fn export_weights(model: &Model, source: &str) -> TransferBundle {
    TransferBundle {
        source: source.to_string(),
        vocab: model.vocab.clone(),
        embedding: model.params.embedding.clone(),
        lstm1: model.params.lstm1.clone(),
        lstm2: model.params.lstm2.clone(),
    }
}

/// Builds a destination model for `dest` whose recurrent layers are copies
/// of the bundle's. Embedding rows are matched by word: words known to the
/// source take its rows, other words come from `pretrained` when it has
/// them and are otherwise drawn from the seed. The dense layer is fresh and
/// every layer stays trainable.
pub fn init_from_transfer(
    bundle: &TransferBundle,
    dest: &Dataset,
    config: TrainConfig,
    pretrained: Option<&EmbeddingTable>,
) -> Result<Model> {
    config.validate()?;
    bundle.check_shapes()?;
    let (d, h) = (config.embed_dim, config.hidden);
    if bundle.embed_dim() != d || bundle.hidden() != h {
        return Err(Error::DimensionMismatch(format!(
            "bundle has d={}, h={}; configuration asks for d={d}, h={h}",
            bundle.embed_dim(),
            bundle.hidden()
        )));
    }
    if let Some(t) = pretrained {
        if t.dim != d {
            return Err(Error::DimensionMismatch(format!("embedding table dim {} vs model dim {d}", t.dim)));
        }
    }
    let vocab = dest.word_vocab.clone();
    let mut embedding = random_rows(vocab.len() + 2, d, seed::derive(config.seed, "init/embedding"));
    // padding and unknown rows carry over as well
    for r in 0..2 {
        embedding.row_mut(r).copy_from_slice(bundle.embedding.row(r));
    }
    for (i, w) in vocab.words().iter().enumerate() {
        let src = match bundle.vocab.index_of(w) {
            Some(j) => Some(bundle.embedding.row(j + 2)),
            None => pretrained.and_then(|t| t.get(w)),
        };
        if let Some(v) = src {
            embedding.row_mut(i + 2).copy_from_slice(v);
        }
    }
    let m = dest.m();
    let params = Params {
        embedding,
        lstm1: bundle.lstm1.clone(),
        lstm2: bundle.lstm2.clone(),
        dense_w: random_dense(m, h, seed::derive(config.seed, "init/dense")),
        dense_b: vec![0.0; m],
    };
    let model = Model::from_parts(params, dest.alpha.clone(), vocab, config, true);
    model.check_shapes()?;
    Ok(model)
}

/// Concatenates datasets for joint training. Intervention ids are prefixed
/// with their dataset name (and position, if names repeat) so they stay
/// unique; the activity set and vocabulary become unions.
pub fn mix_datasets(name: &str, parts: &[&Dataset]) -> Result<Dataset> {
    if parts.len() < 2 {
        return Err(Error::Usage("mixing needs at least two datasets".into()));
    }
    let mut seen = HashSet::new();
    let mut sequences = Vec::new();
    for (k, ds) in parts.iter().enumerate() {
        let prefix = if seen.insert(ds.name.as_str()) {
            ds.name.clone()
        } else {
            format!("{}~{}", ds.name, k + 1)
        };
        sequences.extend(ds.sequences.iter().map(|s| InterventionSequence {
            id: format!("{prefix}/{}", s.id),
            activities: s.activities.clone(),
        }));
    }
    Ok(Dataset::new(name, sequences))
}
