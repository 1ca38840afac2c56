//! Raw text ingestion: tokenization, word corpora and vocabularies.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::exec::Exec;

/// Separates documents inside a corpus; never enters a vocabulary.
pub const BOUNDARY: &str = "<doc>";

/// Name of the manifest file inside an ingest directory.
pub const MANIFEST: &str = "manifest.tsv";

/// Lowercases the text and splits it into maximal runs of letters and digits.
pub fn tokenize(raw: &str) -> Vec<String> {
    let mut out = Vec::new();
    let mut cur = String::new();
    for ch in raw.chars() {
        if ch.is_alphanumeric() {
            cur.extend(ch.to_lowercase().filter(|c| c.is_alphanumeric()));
        } else if !cur.is_empty() {
            out.push(std::mem::take(&mut cur));
        }
    }
    if !cur.is_empty() {
        out.push(cur);
    }
    out
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct WordCorpus {
    pub name: String,
    /// Tokens in document order, documents separated by [`BOUNDARY`].
    pub tokens: Vec<String>,
    pub source_manifest: Vec<String>,
}

impl WordCorpus {
    /// Tokenizes each `(id, text)` document and joins them in the given order.
    pub fn from_documents(name: &str, docs: &[(String, String)], exec: Exec) -> Self {
        let tokenized = exec.map(docs, |(_, text)| tokenize(text));
        let mut tokens = Vec::new();
        for (i, doc) in tokenized.into_iter().enumerate() {
            if i > 0 {
                tokens.push(BOUNDARY.to_string());
            }
            tokens.extend(doc);
        }
        WordCorpus {
            name: name.to_string(),
            tokens,
            source_manifest: docs.iter().map(|(id, _)| id.clone()).collect(),
        }
    }

    /// Builds a corpus from already tokenized documents.
    pub fn from_token_docs<I, D, S>(name: &str, docs: I) -> Self
    where
        I: IntoIterator<Item = D>,
        D: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let mut tokens = Vec::new();
        let mut manifest = Vec::new();
        for (i, doc) in docs.into_iter().enumerate() {
            if i > 0 {
                tokens.push(BOUNDARY.to_string());
            }
            tokens.extend(doc.into_iter().map(Into::into));
            manifest.push(format!("doc{i}"));
        }
        WordCorpus {
            name: name.to_string(),
            tokens,
            source_manifest: manifest,
        }
    }

    /// Word tokens, skipping boundaries.
    pub fn words(&self) -> impl Iterator<Item = &str> {
        self.tokens
            .iter()
            .map(String::as_str)
            .filter(|t| *t != BOUNDARY)
    }

    /// Token slices of each document.
    pub fn documents(&self) -> impl Iterator<Item = &[String]> {
        self.tokens.split(|t| t == BOUNDARY)
    }

    /// Drops words occurring fewer than `min_count` times.
    pub fn filter_min_count(&self, min_count: u64) -> WordCorpus {
        let mut counts: HashMap<&str, u64> = HashMap::new();
        for w in self.words() {
            *counts.entry(w).or_default() += 1;
        }
        let tokens = self
            .tokens
            .iter()
            .filter(|t| *t == BOUNDARY || counts[t.as_str()] >= min_count)
            .cloned()
            .collect();
        WordCorpus {
            name: self.name.clone(),
            tokens,
            source_manifest: self.source_manifest.clone(),
        }
    }

    /// Writes tokens separated by single spaces.
    pub fn save(&self, path: &Path) -> Result<()> {
        let f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(f);
        let res = (|| {
            for (i, t) in self.tokens.iter().enumerate() {
                if i > 0 {
                    w.write_all(b" ")?;
                }
                w.write_all(t.as_bytes())?;
            }
            w.write_all(b"\n")?;
            w.flush()
        })();
        res.map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<WordCorpus> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let tokens: Vec<String> = text.split_whitespace().map(str::to_string).collect();
        let n_docs = tokens.iter().filter(|t| *t == BOUNDARY).count() + 1;
        Ok(WordCorpus {
            name: path
                .file_stem()
                .map(|s| s.to_string_lossy().into_owned())
                .unwrap_or_default(),
            tokens,
            source_manifest: (0..n_docs).map(|i| format!("doc{i}")).collect(),
        })
    }
}

/// Ordered set of unique words with counts.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct Vocabulary {
    words: Vec<String>,
    index: HashMap<String, usize>,
    counts: Vec<u64>,
}

impl Vocabulary {
    /// Orders words by descending count, then lexicographically.
    pub fn from_counts<I: IntoIterator<Item = (String, u64)>>(counts: I) -> Vocabulary {
        let mut pairs: Vec<(String, u64)> = counts.into_iter().collect();
        pairs.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        Self::from_ordered(pairs)
    }

    /// Keeps the given order. Duplicate words are merged into the first entry.
    pub fn from_ordered<I: IntoIterator<Item = (String, u64)>>(pairs: I) -> Vocabulary {
        let mut v = Vocabulary::default();
        for (w, c) in pairs {
            if let Some(&i) = v.index.get(&w) {
                v.counts[i] += c;
                continue;
            }
            v.index.insert(w.clone(), v.words.len());
            v.words.push(w);
            v.counts.push(c);
        }
        v
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    pub fn words(&self) -> &[String] {
        &self.words
    }

    pub fn counts(&self) -> &[u64] {
        &self.counts
    }

    pub fn index_of(&self, word: &str) -> Option<usize> {
        self.index.get(word).copied()
    }

    pub fn contains(&self, word: &str) -> bool {
        self.index.contains_key(word)
    }

    pub fn count(&self, word: &str) -> u64 {
        self.index_of(word).map_or(0, |i| self.counts[i])
    }

    /// Union preserving `self` order, then new words of `other` in their order.
    pub fn union(&self, other: &Vocabulary) -> Vocabulary {
        let pairs = self
            .words
            .iter()
            .cloned()
            .zip(self.counts.iter().copied())
            .chain(other.words.iter().cloned().zip(other.counts.iter().copied()));
        Vocabulary::from_ordered(pairs)
    }
}

/// Vocabulary of all words occurring at least `min_count` times.
pub fn build_vocabulary(corpus: &WordCorpus, min_count: u64) -> Result<Vocabulary> {
    if min_count == 0 {
        return Err(Error::Usage("min_count must be positive".into()));
    }
    let mut counts: HashMap<&str, u64> = HashMap::new();
    for w in corpus.words() {
        *counts.entry(w).or_default() += 1;
    }
    let vocab = Vocabulary::from_counts(
        counts
            .into_iter()
            .filter(|&(_, c)| c >= min_count)
            .map(|(w, c)| (w.to_string(), c)),
    );
    if vocab.is_empty() {
        return Err(Error::EmptyVocabulary);
    }
    Ok(vocab)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CorpusStats {
    pub total_tokens: usize,
    pub unique_tokens: usize,
}

pub fn corpus_stats(corpus: &WordCorpus) -> CorpusStats {
    let mut seen = HashSet::new();
    let mut total = 0;
    for w in corpus.words() {
        total += 1;
        seen.insert(w);
    }
    CorpusStats {
        total_tokens: total,
        unique_tokens: seen.len(),
    }
}

/// Fraction of `domain_vocab` words that occur somewhere in `corpus`.
pub fn coverage(domain_vocab: &Vocabulary, corpus: &WordCorpus) -> Result<f64> {
    if domain_vocab.is_empty() {
        return Err(Error::Usage("coverage of an empty vocabulary".into()));
    }
    let present: HashSet<&str> = corpus.words().collect();
    let hit = domain_vocab
        .words()
        .iter()
        .filter(|w| present.contains(w.as_str()))
        .count();
    Ok(hit as f64 / domain_vocab.len() as f64)
}

/// Reads `(id, file name)` pairs from an ingest manifest. Missing manifest
/// yields an empty list.
pub fn read_manifest(dir: &Path) -> Result<Vec<(String, String)>> {
    let path = dir.join(MANIFEST);
    if !path.exists() {
        return Ok(Vec::new());
    }
    let f = fs::File::open(&path).map_err(|e| Error::io(&path, e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(f).lines().enumerate() {
        let line = line.map_err(|e| Error::io(&path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let (id, file) = line.split_once('\t').ok_or_else(|| {
            Error::format(path.display().to_string(), i + 1, "expected 'id<TAB>file'")
        })?;
        out.push((id.to_string(), file.to_string()));
    }
    Ok(out)
}

/// Loads the documents of an ingest directory in manifest order. Without a
/// manifest, every `*.txt` file is read in file-name order.
pub fn load_ingest_dir(dir: &Path) -> Result<Vec<(String, String)>> {
    let mut entries = read_manifest(dir)?;
    if entries.is_empty() {
        let listing = fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
        let mut names = BTreeMap::new();
        for entry in listing {
            let entry = entry.map_err(|e| Error::io(dir, e))?;
            let name = entry.file_name().to_string_lossy().into_owned();
            if let Some(stem) = name.strip_suffix(".txt") {
                names.insert(name.clone(), stem.to_string());
            }
        }
        entries = names.into_iter().map(|(f, id)| (id, f)).collect();
    }
    entries
        .into_iter()
        .map(|(id, file)| {
            let p = dir.join(&file);
            let text = fs::read_to_string(&p).map_err(|e| Error::io(&p, e))?;
            Ok((id, text))
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct FetchSummary {
    pub new_documents: usize,
    pub skipped_existing: usize,
    pub malformed: usize,
}

/// Retrieves up to `limit` documents from a JSON search endpoint into an
/// ingest directory.
///
/// The endpoint is queried as `GET <endpoint>?query=<q>&limit=<n>` and must
/// answer with a JSON array of `{"id": ..., "text": ...}` objects. Entries
/// lacking either string field are skipped and counted as malformed.
/// Identifiers already present in the manifest are not fetched again.
#[cfg(feature = "fetch")]
pub fn fetch_documents(endpoint: &str, query: &str, limit: usize, out_dir: &Path) -> Result<FetchSummary> {
    if limit == 0 {
        return Err(Error::Usage("limit must be at least 1".into()));
    }
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let known: HashSet<String> = read_manifest(out_dir)?.into_iter().map(|(id, _)| id).collect();

    let body = ureq::get(endpoint)
        .query("query", query)
        .query("limit", limit.to_string())
        .call()
        .map_err(|e| Error::Retriable(format!("{endpoint}: {e}")))?
        .body_mut()
        .read_to_string()
        .map_err(|e| Error::Retriable(format!("{endpoint}: {e}")))?;
    let docs: serde_json::Value = serde_json::from_str(&body)
        .map_err(|e| Error::Retriable(format!("{endpoint}: malformed response: {e}")))?;
    let items = docs
        .as_array()
        .ok_or_else(|| Error::Retriable(format!("{endpoint}: expected a JSON array")))?;

    let manifest_path = out_dir.join(MANIFEST);
    let mut summary = FetchSummary::default();
    let mut new_lines = String::new();
    let mut seen = known;
    for item in items.iter().take(limit) {
        let (Some(id), Some(text)) = (
            item.get("id").and_then(|v| v.as_str()),
            item.get("text").and_then(|v| v.as_str()),
        ) else {
            summary.malformed += 1;
            continue;
        };
        let safe: String = id
            .chars()
            .map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '_' { c } else { '_' })
            .collect();
        if safe.is_empty() {
            summary.malformed += 1;
            continue;
        }
        if !seen.insert(id.to_string()) {
            summary.skipped_existing += 1;
            continue;
        }
        let file = format!("{safe}.txt");
        let p = out_dir.join(&file);
        fs::write(&p, text).map_err(|e| Error::io(&p, e))?;
        new_lines.push_str(&format!("{id}\t{file}\n"));
        summary.new_documents += 1;
    }
    if summary.malformed > 0 {
        log::warn!("skipped {} malformed documents", summary.malformed);
    }
    if !new_lines.is_empty() {
        let mut f = fs::OpenOptions::new()
            .create(true)
            .append(true)
            .open(&manifest_path)
            .map_err(|e| Error::io(&manifest_path, e))?;
        f.write_all(new_lines.as_bytes())
            .map_err(|e| Error::io(&manifest_path, e))?;
    }
    Ok(summary)
}
