//! Activity data model, dataset statistics, activity encoding and windowing.

mod synth;

pub use synth::{generate_pair, generate_synthetic, Phase, SyntheticConfig, SyntheticProcess};

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use crate::corpus::{Vocabulary, WordCorpus};
use crate::error::{Error, Result};

/// Reserved token filling unused slots of an encoded activity.
pub const PAD_TOKEN: &str = "<pad>";

/// Default per-activity token budget.
pub const PAD_TO: usize = 15;

/// Header line of activity files.
pub const HEADER: [&str; 8] = ["intervention", "index", "lv", "li", "ls", "rv", "ri", "rs"];

/// One hand's action: verb, instrument and structure, each a possibly empty
/// token list (empty meaning idle).
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Default)]
pub struct HandAction {
    pub verb: Vec<String>,
    pub instrument: Vec<String>,
    pub structure: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Default)]
pub struct Activity {
    pub left: HandAction,
    pub right: HandAction,
}

impl Activity {
    /// Builds an activity from six element strings, whitespace-tokenized and
    /// lowercased.
    pub fn from_fields(fields: [&str; 6]) -> Activity {
        let el = |s: &str| -> Vec<String> { s.split_whitespace().map(str::to_lowercase).collect() };
        Activity {
            left: HandAction {
                verb: el(fields[0]),
                instrument: el(fields[1]),
                structure: el(fields[2]),
            },
            right: HandAction {
                verb: el(fields[3]),
                instrument: el(fields[4]),
                structure: el(fields[5]),
            },
        }
    }

    /// Elements in encoding order: lv, li, ls, rv, ri, rs.
    pub fn elements(&self) -> [&[String]; 6] {
        [
            &self.left.verb,
            &self.left.instrument,
            &self.left.structure,
            &self.right.verb,
            &self.right.instrument,
            &self.right.structure,
        ]
    }

    pub fn tokens(&self) -> impl Iterator<Item = &str> {
        self.elements().into_iter().flatten().map(String::as_str)
    }

    /// Number of matching elements out of six.
    pub fn matching_elements(&self, other: &Activity) -> usize {
        self.elements()
            .iter()
            .zip(other.elements())
            .filter(|(a, b)| **a == *b)
            .count()
    }
}

impl fmt::Display for Activity {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (i, e) in self.elements().iter().enumerate() {
            if i > 0 {
                f.write_str("|")?;
            }
            f.write_str(&e.join(" "))?;
        }
        Ok(())
    }
}

impl FromStr for Activity {
    type Err = Error;

    /// Parses the `lv|li|ls|rv|ri|rs` form produced by `Display`.
    fn from_str(s: &str) -> Result<Activity> {
        let parts: Vec<&str> = s.split('|').collect();
        let fields: [&str; 6] = parts
            .try_into()
            .map_err(|_| Error::Usage(format!("activity '{s}' must have 6 '|'-separated elements")))?;
        Ok(Activity::from_fields(fields))
    }
}

/// Encodes an activity as exactly `pad_to` tokens: elements concatenated in
/// order lv, li, ls, rv, ri, rs, truncated on the right or right-padded with
/// [`PAD_TOKEN`].
pub fn encode_activity(a: &Activity, pad_to: usize) -> Vec<String> {
    let mut out: Vec<String> = a.tokens().take(pad_to).map(str::to_string).collect();
    out.resize(pad_to, PAD_TOKEN.to_string());
    out
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct InterventionSequence {
    pub id: String,
    pub activities: Vec<Activity>,
}

impl InterventionSequence {
    pub fn len(&self) -> usize {
        self.activities.len()
    }

    pub fn is_empty(&self) -> bool {
        self.activities.is_empty()
    }

    /// `a_t` with 1-based `t`.
    pub fn at(&self, t: usize) -> &Activity {
        &self.activities[t - 1]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub name: String,
    pub sequences: Vec<InterventionSequence>,
    /// Distinct activities in order of first appearance.
    pub alpha: Vec<Activity>,
    alpha_index: HashMap<Activity, usize>,
    pub word_vocab: Vocabulary,
}

impl Dataset {
    pub fn new(name: impl Into<String>, sequences: Vec<InterventionSequence>) -> Dataset {
        let mut alpha = Vec::new();
        let mut alpha_index = HashMap::new();
        let mut counts: HashMap<String, u64> = HashMap::new();
        for a in sequences.iter().flat_map(|s| &s.activities) {
            if !alpha_index.contains_key(a) {
                alpha_index.insert(a.clone(), alpha.len());
                alpha.push(a.clone());
            }
            for t in a.tokens() {
                *counts.entry(t.to_string()).or_default() += 1;
            }
        }
        Dataset {
            name: name.into(),
            sequences,
            alpha,
            alpha_index,
            word_vocab: Vocabulary::from_counts(counts),
        }
    }

    pub fn m(&self) -> usize {
        self.alpha.len()
    }

    pub fn activity_index(&self, a: &Activity) -> Option<usize> {
        self.alpha_index.get(a).copied()
    }

    /// Sub-dataset with the given sequences, keeping this dataset's name.
    pub fn subset(&self, idx: &[usize]) -> Dataset {
        Dataset::new(
            self.name.clone(),
            idx.iter().map(|&i| self.sequences[i].clone()).collect(),
        )
    }

    /// Every `(window, target)` pair, `t = 1..l-1` for each sequence.
    pub fn windows(&self, n: usize) -> impl Iterator<Item = Window<'_>> {
        self.sequences
            .iter()
            .flat_map(move |s| (1..s.len()).map(move |t| Window { seq: s, t, n }))
    }

    /// Each sequence's activity tokens as one document.
    pub fn token_corpus(&self) -> WordCorpus {
        WordCorpus::from_token_docs(
            &self.name,
            self.sequences
                .iter()
                .map(|s| s.activities.iter().flat_map(|a| a.tokens()).collect::<Vec<_>>()),
        )
    }

    pub fn load(path: &Path) -> Result<Dataset> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let name = path
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_default();
        parse_dataset(&text, &name)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_csv()).map_err(|e| Error::io(path, e))
    }

    pub fn to_csv(&self) -> String {
        let mut w = csv::WriterBuilder::new()
            .quote_style(csv::QuoteStyle::Necessary)
            .from_writer(Vec::new());
        w.write_record(HEADER).expect("in-memory write");
        for s in &self.sequences {
            for (i, a) in s.activities.iter().enumerate() {
                let idx = (i + 1).to_string();
                let els = a.elements().map(|e| e.join(" "));
                let mut rec = vec![s.id.as_str(), idx.as_str()];
                rec.extend(els.iter().map(String::as_str));
                w.write_record(&rec).expect("in-memory write");
            }
        }
        String::from_utf8(w.into_inner().expect("in-memory flush")).expect("utf-8 input")
    }
}

/// Parses an activity file. Rows are grouped by intervention in order of
/// first appearance; each intervention's indices must be exactly `1..=l`.
pub fn parse_dataset(text: &str, name: &str) -> Result<Dataset> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .from_reader(text.as_bytes());
    let mut records = rdr.records();
    let header = match records.next() {
        None => return Err(Error::format(name, 1, "empty file")),
        Some(r) => r.map_err(|e| Error::format(name, 1, e.to_string()))?,
    };
    if header.iter().map(str::trim).ne(HEADER) {
        return Err(Error::format(name, 1, format!("header must be '{}'", HEADER.join(","))));
    }
    let mut order: Vec<String> = Vec::new();
    let mut rows: HashMap<String, BTreeMap<usize, (Activity, usize)>> = HashMap::new();
    for rec in records {
        let rec = rec.map_err(|e| Error::format(name, 0, e.to_string()))?;
        let row = rec.position().map_or(0, |p| p.line() as usize);
        if rec.len() != 8 {
            return Err(Error::format(name, row, format!("expected 8 columns, found {}", rec.len())));
        }
        let id = rec[0].trim().to_string();
        if id.is_empty() {
            return Err(Error::format(name, row, "missing intervention id"));
        }
        let index: usize = rec[1]
            .trim()
            .parse()
            .ok()
            .filter(|&i| i >= 1)
            .ok_or_else(|| Error::format(name, row, format!("bad index '{}'", &rec[1])))?;
        let act = Activity::from_fields([&rec[2], &rec[3], &rec[4], &rec[5], &rec[6], &rec[7]]);
        let seq = rows.entry(id.clone()).or_insert_with(|| {
            order.push(id.clone());
            BTreeMap::new()
        });
        if seq.insert(index, (act, row)).is_some() {
            return Err(Error::DuplicateIndex { row });
        }
    }
    if order.is_empty() {
        return Err(Error::format(name, 2, "no activity rows"));
    }
    let mut sequences = Vec::with_capacity(order.len());
    for id in order {
        let seq = rows.remove(&id).expect("every ordered id has rows");
        let mut activities = Vec::with_capacity(seq.len());
        for (expected, (index, (act, row))) in (1..).zip(seq) {
            if index != expected {
                return Err(Error::format(
                    name,
                    row,
                    format!("intervention '{id}': index {index} follows a gap (expected {expected})"),
                ));
            }
            activities.push(act);
        }
        sequences.push(InterventionSequence { id, activities });
    }
    Ok(Dataset::new(name, sequences))
}

/// The `n` activities ending at `a_t` (1-based), predicting `a_{t+1}`.
#[derive(Debug, Clone, Copy)]
pub struct Window<'a> {
    pub seq: &'a InterventionSequence,
    pub t: usize,
    pub n: usize,
}

impl<'a> Window<'a> {
    /// Slots oldest first; `None` is the padding activity used when `t < n`.
    pub fn slots(&self) -> impl Iterator<Item = Option<&'a Activity>> + '_ {
        let seq = self.seq;
        let t = self.t;
        (0..self.n).map(move |k| {
            // slot k holds a_{t-n+1+k}
            let pos = (t + k + 1).checked_sub(self.n)?;
            (pos >= 1).then(|| seq.at(pos))
        })
    }

    pub fn target(&self) -> &'a Activity {
        self.seq.at(self.t + 1)
    }

    /// `n * pad_to` tokens; padding slots encode as all-pad.
    pub fn encode(&self, pad_to: usize) -> Vec<String> {
        let pad = Activity::default();
        self.slots()
            .flat_map(|s| encode_activity(s.unwrap_or(&pad), pad_to))
            .collect()
    }
}

pub fn make_window(seq: &InterventionSequence, t: usize, n: usize) -> Result<Window<'_>> {
    if n == 0 {
        return Err(Error::Usage("window length must be at least 1".into()));
    }
    if t == 0 {
        return Err(Error::Usage("t is 1-based".into()));
    }
    if t >= seq.len() {
        return Err(Error::NoPredictionTarget { t, len: seq.len() });
    }
    Ok(Window { seq, t, n })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DatasetStats {
    pub n_interventions: usize,
    pub mean_length: f64,
    /// Population standard deviation of intervention lengths.
    pub std_length: f64,
    pub n_unique_activities: usize,
    pub n_verbs: usize,
    pub n_instruments: usize,
    pub n_structures: usize,
}

impl fmt::Display for DatasetStats {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "interventions\t{}", self.n_interventions)?;
        writeln!(f, "activities_per_intervention\t{:.1}±{:.1}", self.mean_length, self.std_length)?;
        writeln!(f, "unique_activities\t{}", self.n_unique_activities)?;
        writeln!(f, "verbs\t{}", self.n_verbs)?;
        writeln!(f, "instruments\t{}", self.n_instruments)?;
        write!(f, "structures\t{}", self.n_structures)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Level {
    Activity,
    Verb,
    Instrument,
    Structure,
}

impl FromStr for Level {
    type Err = Error;

    fn from_str(s: &str) -> Result<Level> {
        Ok(match s {
            "activity" | "activities" => Level::Activity,
            "verb" | "verbs" => Level::Verb,
            "instrument" | "instruments" => Level::Instrument,
            "structure" | "structures" => Level::Structure,
            other => return Err(Error::Usage(format!("unknown level '{other}'"))),
        })
    }
}

fn role_tokens(ds: &Dataset, level: Level) -> HashSet<String> {
    let pick = |h: &HandAction| -> Vec<String> {
        match level {
            Level::Verb => h.verb.clone(),
            Level::Instrument => h.instrument.clone(),
            Level::Structure => h.structure.clone(),
            Level::Activity => unreachable!("activities are not token sets"),
        }
    };
    ds.alpha
        .iter()
        .flat_map(|a| pick(&a.left).into_iter().chain(pick(&a.right)))
        .collect()
}

pub fn dataset_stats(ds: &Dataset) -> DatasetStats {
    let lens: Vec<f64> = ds.sequences.iter().map(|s| s.len() as f64).collect();
    let n = lens.len();
    let (mean, std) = if n == 0 {
        (0.0, 0.0)
    } else {
        let mean = lens.iter().sum::<f64>() / n as f64;
        let var = lens.iter().map(|l| (l - mean).powi(2)).sum::<f64>() / n as f64;
        (mean, var.sqrt())
    };
    DatasetStats {
        n_interventions: n,
        mean_length: mean,
        std_length: std,
        n_unique_activities: ds.m(),
        n_verbs: role_tokens(ds, Level::Verb).len(),
        n_instruments: role_tokens(ds, Level::Instrument).len(),
        n_structures: role_tokens(ds, Level::Structure).len(),
    }
}

/// Dice coefficient `2|A∩B| / (|A|+|B|)` in percent; two empty sets count as equal.
pub fn dice_percent<T: Eq + std::hash::Hash>(a: &HashSet<T>, b: &HashSet<T>) -> f64 {
    if a.is_empty() && b.is_empty() {
        return 100.0;
    }
    let shared = a.intersection(b).count();
    200.0 * shared as f64 / (a.len() + b.len()) as f64
}

/// Share of unique items common to both datasets, in percent (Dice).
pub fn shared_proportion(a: &Dataset, b: &Dataset, level: Level) -> f64 {
    match level {
        Level::Activity => {
            let sa: HashSet<&Activity> = a.alpha.iter().collect();
            let sb: HashSet<&Activity> = b.alpha.iter().collect();
            dice_percent(&sa, &sb)
        }
        _ => dice_percent(&role_tokens(a, level), &role_tokens(b, level)),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    const FILE: &str = "intervention,index,lv,li,ls,rv,ri,rs
p1,1,cut,scalpel,skin,hold,forceps,skin
p1,2,cut,scalpel,skin,,,
p1,3,\"coagulate vessel\",bipolar,fat,hold,forceps,skin
p2,1,cut,scalpel,skin,hold,forceps,skin
p2,3,irrigate,syringe,disc,,,
p2,2,cut,scalpel,skin,,,
";

    fn act(s: &str) -> Activity {
        s.parse().unwrap()
    }

    #[test]
    fn parse_groups_and_derives_alpha() {
        let ds = parse_dataset(FILE, "t").unwrap();
        assert_eq!(ds.sequences.len(), 2);
        assert_eq!(ds.m(), 4);
        assert_eq!(ds.sequences[1].activities[2], act("irrigate|syringe|disc|||"));
        assert_eq!(ds.alpha[2].left.verb, ["coagulate", "vessel"]);
        assert_eq!(parse_dataset(&ds.to_csv(), "t").unwrap(), ds);
    }

    #[test]
    fn parse_errors() {
        let bad = FILE.replace("p1,2,cut,scalpel,skin,,,", "p1,2,cut,scalpel,skin,,");
        let err = parse_dataset(&bad, "t").unwrap_err();
        assert!(err.to_string().contains("line 3"), "{err}");
        let dup = FILE.replace("p2,3,", "p2,1,");
        assert!(matches!(parse_dataset(&dup, "t"), Err(Error::DuplicateIndex { row: 6 })));
        let gap = FILE.replace("p2,3,", "p2,4,");
        assert!(parse_dataset(&gap, "t").unwrap_err().to_string().contains("gap"));
        assert!(parse_dataset("", "t").is_err());
        assert!(parse_dataset("intervention,index,lv,li,ls,rv,ri,rs\n", "t").is_err());
        assert!(parse_dataset("a,b\n", "t").is_err());
    }

    #[test]
    fn encode_examples() {
        let a = act("cut|scalpel|skin|hold|forceps|skin");
        let e = encode_activity(&a, PAD_TO);
        assert_eq!(e.len(), 15);
        assert_eq!(&e[..6], ["cut", "scalpel", "skin", "hold", "forceps", "skin"]);
        assert!(e[6..].iter().all(|t| t == PAD_TOKEN));

        let long: Vec<String> = (0..17).map(|i| format!("w{i}")).collect();
        let a = Activity {
            left: HandAction {
                verb: long[..5].to_vec(),
                instrument: long[5..10].to_vec(),
                structure: long[10..12].to_vec(),
            },
            right: HandAction {
                verb: long[12..15].to_vec(),
                instrument: long[15..17].to_vec(),
                structure: vec![],
            },
        };
        assert_eq!(encode_activity(&a, 15), long[..15]);
        assert_eq!(encode_activity(&Activity::default(), 15), vec![PAD_TOKEN; 15]);
    }

    fn seq(l: usize) -> InterventionSequence {
        InterventionSequence {
            id: "s".into(),
            activities: (1..=l).map(|i| act(&format!("v{i}||||| "))).collect(),
        }
    }

    #[test]
    fn window_examples() {
        let s = seq(10);
        let w = make_window(&s, 3, 5).unwrap();
        let slots: Vec<_> = w.slots().collect();
        assert_eq!(slots[..2], [None, None]);
        assert_eq!(slots[2..], [Some(s.at(1)), Some(s.at(2)), Some(s.at(3))]);
        assert_eq!(w.target(), s.at(4));
        assert_eq!(w.encode(15).len(), 75);

        let s = seq(100);
        let w = make_window(&s, 60, 50).unwrap();
        let slots: Vec<_> = w.slots().map(Option::unwrap).collect();
        assert_eq!(slots.first().unwrap(), &s.at(11));
        assert_eq!(slots.last().unwrap(), &s.at(60));
        assert!(matches!(make_window(&s, 100, 50), Err(Error::NoPredictionTarget { .. })));
    }

    #[test]
    fn stats_degenerate_and_enumerated() {
        let one = Dataset::new(
            "d",
            vec![InterventionSequence { id: "x".into(), activities: vec![act("cut|knife|skin|||"); 7] }],
        );
        let st = dataset_stats(&one);
        assert_eq!((st.n_interventions, st.mean_length, st.std_length, st.n_unique_activities), (1, 7.0, 0.0, 1));

        let ds = parse_dataset(FILE, "t").unwrap();
        let st = dataset_stats(&ds);
        // verbs: cut, coagulate, vessel, hold, irrigate
        // instruments: scalpel, forceps, bipolar, syringe
        // structures: skin, fat, disc
        assert_eq!(st.n_interventions, 2);
        assert_eq!(st.mean_length, 3.0);
        assert_eq!(st.n_unique_activities, 4);
        assert_eq!((st.n_verbs, st.n_instruments, st.n_structures), (5, 4, 3));
    }

    fn verbs_dataset(name: &str, verbs: &[String]) -> Dataset {
        let acts = verbs.iter().map(|v| act(&format!("{v}|||||"))).collect();
        Dataset::new(name, vec![InterventionSequence { id: "1".into(), activities: acts }])
    }

    #[test]
    fn shared_proportion_examples() {
        let a = parse_dataset(FILE, "a").unwrap();
        assert_eq!(shared_proportion(&a, &a, Level::Activity), 100.0);
        let va: Vec<String> = (0..11).map(|i| format!("v{i}")).collect();
        let vb: Vec<String> = (0..10).map(|i| format!("v{i}")).collect();
        let p = shared_proportion(&verbs_dataset("a", &va), &verbs_dataset("b", &vb), Level::Verb);
        assert!((p - 2000.0 / 21.0).abs() < 1e-12);
        assert_eq!((p * 10.0).round() / 10.0, 95.2);
        let vc: Vec<String> = (0..3).map(|i| format!("z{i}")).collect();
        assert_eq!(shared_proportion(&verbs_dataset("a", &va), &verbs_dataset("c", &vc), Level::Verb), 0.0);
    }

    proptest! {
        #[test]
        fn encode_always_fixed_length_and_prefix_decodes(
            els in proptest::collection::vec(proptest::collection::vec("[a-z]{1,4}", 0..4), 6),
            pad_to in 1usize..20,
        ) {
            let a = Activity {
                left: HandAction { verb: els[0].clone(), instrument: els[1].clone(), structure: els[2].clone() },
                right: HandAction { verb: els[3].clone(), instrument: els[4].clone(), structure: els[5].clone() },
            };
            let e = encode_activity(&a, pad_to);
            prop_assert_eq!(e.len(), pad_to);
            let all: Vec<String> = els.concat();
            if all.len() <= pad_to {
                let prefix: Vec<String> = e.iter().filter(|t| *t != PAD_TOKEN).cloned().collect();
                prop_assert_eq!(prefix, all);
            }
        }

        #[test]
        fn windows_count_and_length(l in 1usize..30, n in 1usize..8, pad_to in 1usize..5) {
            let ds = Dataset::new("w", vec![seq(l)]);
            let ws: Vec<_> = ds.windows(n).collect();
            prop_assert_eq!(ws.len(), l - 1);
            for w in ws {
                prop_assert_eq!(w.encode(pad_to).len(), n * pad_to);
            }
        }

        #[test]
        fn dice_symmetric_and_100_iff_equal(
            a in proptest::collection::hash_set(0u8..12, 0..8),
            b in proptest::collection::hash_set(0u8..12, 0..8),
        ) {
            let ab = dice_percent(&a, &b);
            prop_assert_eq!(ab, dice_percent(&b, &a));
            prop_assert_eq!(ab == 100.0, a == b);
        }
    }
}
