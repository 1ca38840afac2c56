//! Declarative experiment plans: synthetic data, embedding training, source
//! models for transfer and cross-validated evaluations, wired together by
//! `@step` references and executed in dependency order.
//!
//! ```text
//! seed = 7
//! out = results
//! epochs = 20            # defaults for every training step
//!
//! [step data]
//! kind = synth
//! profile = ldh_r
//!
//! [step base]
//! kind = cv
//! data = @data
//!
//! [step set]
//! kind = cv
//! data = @data
//! embeddings = vectors.txt
//! embed_mode = set
//! baseline = base
//! ```

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use crate::corpus::{build_vocabulary, WordCorpus};
use crate::embedding::{
    build_cooccurrence, train_context_embeddings, train_cooc_embeddings, CbowParams, CoocParams, EmbeddingTable,
};
use crate::error::{Error, Result};
use crate::evaluation::{cross_validate, render_reports, EvalReport, Pipeline};
use crate::exec::{with_threads, Exec};
use crate::kv::{self, Section};
use crate::network::{train, EmbedMode, Model, TrainConfig, CONFIG_KEYS};
use crate::procdata::{generate_pair, generate_synthetic, Dataset, SyntheticConfig};
use crate::seed;
use crate::transfer::{export_weights, mix_datasets, TransferBundle};

pub const SUMMARY_FILE: &str = "summary.csv";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum StepKind {
    Synth,
    Embed,
    Source,
    Cv,
}

impl StepKind {
    fn parse(s: &str) -> Option<StepKind> {
        Some(match s {
            "synth" => StepKind::Synth,
            "embed" => StepKind::Embed,
            "source" => StepKind::Source,
            "cv" => StepKind::Cv,
            _ => return None,
        })
    }

    pub fn name(self) -> &'static str {
        match self {
            StepKind::Synth => "synth",
            StepKind::Embed => "embed",
            StepKind::Source => "source",
            StepKind::Cv => "cv",
        }
    }

    fn keys(self) -> &'static [&'static str] {
        match self {
            StepKind::Synth => &[
                "profile",
                "config",
                "partner_profile",
                "overlap",
                "max_interventions",
                "length_scale",
                "pool_scale",
                "element_offset",
                "partner_element_offset",
                "extra_interventions",
            ],
            StepKind::Embed => &["corpus", "method", "dim", "epochs", "window", "min_count", "learning_rate"],
            StepKind::Source => &["data", "mix", "embeddings", "embed_mode"],
            StepKind::Cv => &["data", "mix", "embeddings", "embed_mode", "transfer", "baseline", "k", "runs"],
        }
    }

    fn trains(self) -> bool {
        matches!(self, StepKind::Source | StepKind::Cv)
    }
}

/// A value that is either another step's output or a file.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Input {
    Step { step: String, output: String },
    File(PathBuf),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Step {
    pub name: String,
    pub kind: StepKind,
    pub section: Section,
    pub deps: Vec<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Plan {
    pub origin: String,
    pub base_dir: PathBuf,
    pub seed: u64,
    pub out: PathBuf,
    pub jobs: usize,
    /// Training defaults and `k`/`runs` from the leading block.
    pub defaults: Section,
    /// Steps in a valid execution order.
    pub steps: Vec<Step>,
}

const GLOBAL_KEYS: [&str; 5] = ["seed", "out", "jobs", "k", "runs"];

fn plan_err(msg: impl Into<String>) -> Error {
    Error::Plan(msg.into())
}

impl Plan {
    pub fn load(path: &Path) -> Result<Plan> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Plan::parse(&text, &path.display().to_string(), &base)
    }

    /// Parses and validates a plan. Relative paths resolve against
    /// `base_dir`. Referenced files must exist.
    pub fn parse(text: &str, origin: &str, base_dir: &Path) -> Result<Plan> {
        let mut sections = kv::parse(text, origin)?.into_iter();
        let defaults = sections.next().expect("leading section");
        for (k, (_, line)) in &defaults.entries {
            if !GLOBAL_KEYS.contains(&k.as_str()) && !CONFIG_KEYS.contains(&k.as_str()) {
                return Err(Error::format(origin, *line, format!("unknown plan key '{k}'")));
            }
        }
        let seed = defaults.parse_or(origin, "seed", 0u64)?;
        let jobs = defaults.parse_or(origin, "jobs", 0usize)?;
        let out = base_dir.join(defaults.get("out").unwrap_or("out"));
        TrainConfig::default().apply(&defaults, origin)?;

        let mut steps = Vec::new();
        let mut names = HashSet::new();
        for s in sections {
            let header = s.header.clone().unwrap_or_default();
            let name = match header.split_whitespace().collect::<Vec<_>>()[..] {
                ["step", name] => name.to_string(),
                _ => return Err(Error::format(origin, s.line, format!("expected '[step <name>]', found '[{header}]'"))),
            };
            if name.contains('.') || name.contains('@') || name.contains(',') {
                return Err(Error::format(origin, s.line, format!("step name '{name}' may not contain '.', '@' or ','")));
            }
            if !names.insert(name.clone()) {
                return Err(Error::format(origin, s.line, format!("duplicate step '{name}'")));
            }
            let kind_str = s.require(origin, "kind")?;
            let kind = StepKind::parse(kind_str)
                .ok_or_else(|| Error::format(origin, s.line, format!("unknown step kind '{kind_str}'")))?;
            for (k, (_, line)) in &s.entries {
                let train_key = kind.trains() && CONFIG_KEYS.contains(&k.as_str()) && k != "seed";
                if k != "kind" && !kind.keys().contains(&k.as_str()) && !train_key {
                    return Err(Error::format(origin, *line, format!("key '{k}' not valid for a {} step", kind.name())));
                }
            }
            steps.push(Step { name, kind, section: s, deps: Vec::new() });
        }
        let mut plan = Plan {
            origin: origin.to_string(),
            base_dir: base_dir.to_path_buf(),
            seed,
            out,
            jobs,
            defaults,
            steps,
        };
        plan.resolve()?;
        Ok(plan)
    }

    fn input(&self, value: &str) -> Input {
        match value.strip_prefix('@') {
            Some(r) => {
                let (step, output) = r.split_once('.').unwrap_or((r, ""));
                Input::Step { step: step.to_string(), output: output.to_string() }
            }
            None => Input::File(self.base_dir.join(value)),
        }
    }

    fn step(&self, name: &str) -> Option<&Step> {
        self.steps.iter().find(|s| s.name == name)
    }

    /// Checks every reference and file, then orders steps topologically.
    fn resolve(&mut self) -> Result<()> {
        let kinds: HashMap<String, StepKind> = self.steps.iter().map(|s| (s.name.clone(), s.kind)).collect();
        let synth_outputs: HashMap<String, Vec<String>> = self
            .steps
            .iter()
            .filter(|s| s.kind == StepKind::Synth)
            .map(|s| (s.name.clone(), synth_outputs(&s.section)))
            .collect();
        let mut all_deps = Vec::new();
        for step in &self.steps {
            let mut deps = Vec::new();
            let sec = &step.section;
            let mut check = |key: &str, value: &str, want: StepKind| -> Result<()> {
                let line = sec.entries.get(key).map_or(sec.line, |e| e.1);
                match self.input(value) {
                    Input::File(p) => {
                        if !p.exists() {
                            return Err(Error::format(&self.origin, line, format!("{key}: file '{}' not found", p.display())));
                        }
                    }
                    Input::Step { step: dep, output } => {
                        let found = kinds.get(&dep).ok_or_else(|| {
                            Error::format(&self.origin, line, format!("{key}: unknown step '@{dep}'"))
                        })?;
                        if *found != want {
                            return Err(Error::format(
                                &self.origin,
                                line,
                                format!("{key}: '@{dep}' is a {} step, expected {}", found.name(), want.name()),
                            ));
                        }
                        let valid = match want {
                            StepKind::Synth => synth_outputs[&dep].contains(&output),
                            _ => output.is_empty(),
                        };
                        if !valid {
                            return Err(Error::format(&self.origin, line, format!("{key}: '@{dep}' has no output '{output}'")));
                        }
                        deps.push(dep);
                    }
                }
                Ok(())
            };
            if let Some(v) = sec.get("data") {
                check("data", v, StepKind::Synth)?;
            }
            for v in sec.list("mix") {
                check("mix", &v, StepKind::Synth)?;
            }
            for v in sec.list("corpus") {
                check("corpus", &v, StepKind::Synth)?;
            }
            if let Some(v) = sec.get("embeddings") {
                check("embeddings", v, StepKind::Embed)?;
            }
            if let Some(v) = sec.get("transfer") {
                check("transfer", v, StepKind::Source)?;
            }
            if let Some(v) = sec.get("config") {
                check("config", v, StepKind::Synth)?;
            }
            if let Some(v) = sec.get("baseline") {
                let b = v.trim_start_matches('@');
                check("baseline", &format!("@{b}"), StepKind::Cv)?;
            }
            self.check_step(step)?;
            deps.sort();
            deps.dedup();
            all_deps.push(deps);
        }
        for (s, d) in self.steps.iter_mut().zip(all_deps) {
            s.deps = d;
        }
        self.check_dimensions()?;
        self.steps = topological(&self.steps)?;
        Ok(())
    }

    fn check_step(&self, step: &Step) -> Result<()> {
        let sec = &step.section;
        let o = &self.origin;
        match step.kind {
            StepKind::Synth => {
                if sec.get("profile").is_some() == sec.get("config").is_some() {
                    return Err(Error::format(o, sec.line, "synth step needs exactly one of 'profile' or 'config'"));
                }
                for key in ["profile", "partner_profile"] {
                    if let Some(p) = sec.get(key) {
                        if SyntheticConfig::profile(p).is_none() {
                            return Err(Error::format(o, sec.entries[key].1, format!("unknown profile '{p}'")));
                        }
                    }
                }
                sec.parse::<f64>(o, "overlap")?;
                sec.parse::<usize>(o, "max_interventions")?;
                sec.parse::<f64>(o, "length_scale")?;
                sec.parse::<f64>(o, "pool_scale")?;
                sec.parse::<usize>(o, "element_offset")?;
                sec.parse::<usize>(o, "partner_element_offset")?;
                sec.parse::<usize>(o, "extra_interventions")?;
            }
            StepKind::Embed => {
                if sec.list("corpus").is_empty() {
                    return Err(Error::format(o, sec.line, "embed step needs 'corpus'"));
                }
                match sec.get("method").unwrap_or("cooc") {
                    "cooc" | "cbow" => {}
                    m => return Err(Error::format(o, sec.entries["method"].1, format!("unknown method '{m}'"))),
                }
                sec.parse::<usize>(o, "dim")?;
                sec.parse::<usize>(o, "epochs")?;
                sec.parse::<usize>(o, "window")?;
                sec.parse::<u64>(o, "min_count")?;
                sec.parse::<f64>(o, "learning_rate")?;
            }
            StepKind::Source | StepKind::Cv => {
                sec.require(o, "data")?;
                self.train_config(step)?;
                sec.parse::<EmbedMode>(o, "embed_mode")?;
                if step.kind == StepKind::Cv {
                    sec.parse::<usize>(o, "k")?;
                    sec.parse::<usize>(o, "runs")?;
                }
            }
        }
        Ok(())
    }

    /// Training configuration of a step: defaults, then step overrides.
    pub fn train_config(&self, step: &Step) -> Result<TrainConfig> {
        let mut cfg = TrainConfig::default();
        cfg.apply(&self.defaults, &self.origin)?;
        cfg.apply(&step.section, &self.origin)?;
        cfg.seed = seed::derive(self.seed, &step.name);
        cfg.validate()?;
        Ok(cfg)
    }

    fn embed_dim_of(&self, step: &Step) -> Result<usize> {
        let default = TrainConfig {
            embed_dim: self.defaults.parse_or(&self.origin, "embed_dim", TrainConfig::default().embed_dim)?,
            ..Default::default()
        };
        step.section.parse_or(&self.origin, "dim", default.embed_dim)
    }

    /// Embedding and transfer dimensions agree with the consuming step.
    fn check_dimensions(&self) -> Result<()> {
        for step in self.steps.iter().filter(|s| s.kind.trains()) {
            let cfg = self.train_config(step)?;
            let line = |k: &str| step.section.entries.get(k).map_or(step.section.line, |e| e.1);
            if let Some(Input::Step { step: e, .. }) = step.section.get("embeddings").map(|v| self.input(v)) {
                let dim = self.embed_dim_of(self.step(&e).expect("resolved"))?;
                if dim != cfg.embed_dim {
                    return Err(Error::format(
                        &self.origin,
                        line("embeddings"),
                        format!("'@{e}' produces {dim}-dimensional vectors, step '{}' uses {}", step.name, cfg.embed_dim),
                    ));
                }
            }
            if let Some(Input::Step { step: s, .. }) = step.section.get("transfer").map(|v| self.input(v)) {
                let src = self.train_config(self.step(&s).expect("resolved"))?;
                if (src.embed_dim, src.hidden) != (cfg.embed_dim, cfg.hidden) {
                    return Err(Error::format(
                        &self.origin,
                        line("transfer"),
                        format!("'@{s}' has d={}, h={}; step '{}' uses d={}, h={}", src.embed_dim, src.hidden, step.name, cfg.embed_dim, cfg.hidden),
                    ));
                }
            }
        }
        Ok(())
    }

    /// Steps grouped into waves; every step depends only on earlier waves.
    pub fn waves(&self) -> Vec<Vec<&Step>> {
        let mut level: HashMap<&str, usize> = HashMap::new();
        let mut waves: Vec<Vec<&Step>> = Vec::new();
        for s in &self.steps {
            let l = s.deps.iter().map(|d| level[d.as_str()] + 1).max().unwrap_or(0);
            level.insert(&s.name, l);
            if waves.len() <= l {
                waves.resize_with(l + 1, Vec::new);
            }
            waves[l].push(s);
        }
        waves
    }
}

fn synth_outputs(sec: &Section) -> Vec<String> {
    let partner = sec.get("partner_profile").is_some() || sec.get("config").is_some();
    let extra = sec.get("extra_interventions").is_some();
    let mut outs = vec![String::new()];
    if partner {
        outs.push("partner".into());
    }
    if extra {
        outs.push("extra".into());
        if partner {
            outs.push("partner.extra".into());
        }
    }
    outs
}

/// Kahn's algorithm; ties resolved by declaration order.
fn topological(steps: &[Step]) -> Result<Vec<Step>> {
    let mut remaining: Vec<&Step> = steps.iter().collect();
    let mut done: HashSet<&str> = HashSet::new();
    let mut order = Vec::new();
    while !remaining.is_empty() {
        let pos = remaining
            .iter()
            .position(|s| s.deps.iter().all(|d| done.contains(d.as_str())))
            .ok_or_else(|| {
                let names: Vec<&str> = remaining.iter().map(|s| s.name.as_str()).collect();
                plan_err(format!("dependency cycle among steps: {}", names.join(", ")))
            })?;
        let s = remaining.remove(pos);
        done.insert(&s.name);
        order.push(s.clone());
    }
    Ok(order)
}

#[derive(Debug, Clone)]
enum Artifact {
    Data(Dataset),
    Table(EmbeddingTable),
    Bundle(TransferBundle),
    Report(EvalReport),
}

/// One file written by a step.
#[derive(Debug, Clone, PartialEq)]
pub struct ArtifactFile {
    pub step: String,
    pub kind: StepKind,
    pub file: PathBuf,
}

#[derive(Debug, Default)]
pub struct PlanOutcome {
    pub summary: PathBuf,
    pub files: Vec<ArtifactFile>,
    pub reports: Vec<EvalReport>,
    /// First failing step and its error; later steps were not run.
    pub failure: Option<(String, Error)>,
}

struct StepOutput {
    artifacts: Vec<(String, Artifact)>,
    files: Vec<PathBuf>,
}

struct Runner<'a> {
    plan: &'a Plan,
    store: HashMap<String, Artifact>,
    exec: Exec,
}

impl Runner<'_> {
    fn dataset(&self, value: &str) -> Result<Dataset> {
        match self.plan.input(value) {
            Input::File(p) => Dataset::load(&p),
            Input::Step { step, output } => match self.store.get(&key(&step, &output)) {
                Some(Artifact::Data(d)) => Ok(d.clone()),
                _ => Err(plan_err(format!("'{value}' is not available"))),
            },
        }
    }

    fn table(&self, value: &str) -> Result<EmbeddingTable> {
        match self.plan.input(value) {
            Input::File(p) => EmbeddingTable::load(&p),
            Input::Step { step, .. } => match self.store.get(&step) {
                Some(Artifact::Table(t)) => Ok(t.clone()),
                _ => Err(plan_err(format!("'{value}' is not available"))),
            },
        }
    }

    fn bundle(&self, value: &str) -> Result<TransferBundle> {
        match self.plan.input(value) {
            Input::File(p) => TransferBundle::load(&p),
            Input::Step { step, .. } => match self.store.get(&step) {
                Some(Artifact::Bundle(b)) => Ok(b.clone()),
                _ => Err(plan_err(format!("'{value}' is not available"))),
            },
        }
    }

    fn run(&self, step: &Step) -> Result<StepOutput> {
        log::info!("step {} ({})", step.name, step.kind.name());
        match step.kind {
            StepKind::Synth => self.synth(step),
            StepKind::Embed => self.embed(step),
            StepKind::Source => self.source(step),
            StepKind::Cv => self.cv(step),
        }
    }

    fn synth(&self, step: &Step) -> Result<StepOutput> {
        let (sec, o) = (&step.section, &self.plan.origin);
        let s = seed::derive(self.plan.seed, &step.name);
        let mut cfg = match (sec.get("profile"), sec.get("config")) {
            (Some(p), _) => {
                let mut c = SyntheticConfig::profile(p).expect("validated");
                if let Some(pp) = sec.get("partner_profile") {
                    let mut partner = SyntheticConfig::profile(pp).expect("validated");
                    partner.element_offset = sec.parse_or(o, "partner_element_offset", 0)?;
                    c.partner = Some(Box::new(partner));
                }
                c.element_offset = sec.parse_or(o, "element_offset", 0)?;
                c.shared_pool_fraction = sec.parse_or(o, "overlap", 0.0)?;
                c
            }
            (None, Some(path)) => SyntheticConfig::load(&self.plan.base_dir.join(path))?,
            (None, None) => unreachable!("validated"),
        };
        let extra = sec.parse_or(o, "extra_interventions", 0usize)?;
        let max_n = sec.parse::<usize>(o, "max_interventions")?;
        let length_scale = sec.parse_or(o, "length_scale", 1.0)?;
        let pool_scale = sec.parse_or(o, "pool_scale", 1.0)?;
        let adjust = |c: &mut SyntheticConfig, name: String, seed: u64| {
            c.name = name;
            c.seed = seed;
            if let Some(m) = max_n {
                c.n_interventions = c.n_interventions.min(m);
            }
            c.mean_length *= length_scale;
            c.length_spread *= length_scale;
            for ph in &mut c.phases {
                ph.pool = ((ph.pool as f64 * pool_scale).round() as usize).max(1);
            }
            c.n_interventions += extra;
        };
        let mut partner = cfg.partner.take().map(|b| *b);
        adjust(&mut cfg, step.name.clone(), s);
        let mut generated = Vec::new();
        if let Some(p) = partner.as_mut() {
            adjust(p, format!("{}.partner", step.name), seed::derive(s, "partner"));
            if cfg.shared_pool_fraction == 0.0 {
                cfg.shared_pool_fraction = p.shared_pool_fraction;
            }
            let ((a, _), (b, _)) = generate_pair(&cfg, p)?;
            generated.push((String::new(), a, cfg.n_interventions - extra));
            generated.push(("partner".to_string(), b, p.n_interventions - extra));
        } else {
            let (a, _) = generate_synthetic(&cfg)?;
            generated.push((String::new(), a, cfg.n_interventions - extra));
        }
        let mut out = StepOutput { artifacts: Vec::new(), files: Vec::new() };
        for (suffix, ds, n) in generated {
            let mut parts = vec![(suffix.clone(), ds.subset(&(0..n).collect::<Vec<_>>()))];
            if extra > 0 {
                let more = ds.subset(&(n..ds.sequences.len()).collect::<Vec<_>>());
                let sfx = if suffix.is_empty() { "extra".to_string() } else { format!("{suffix}.extra") };
                parts.push((sfx, more));
            }
            for (sfx, mut d) in parts {
                d.name = key(&step.name, &sfx);
                let file = self.plan.out.join(format!("{}.csv", d.name));
                d.save(&file)?;
                out.files.push(file);
                out.artifacts.push((d.name.clone(), Artifact::Data(d)));
            }
        }
        Ok(out)
    }

    fn embed(&self, step: &Step) -> Result<StepOutput> {
        let (sec, o) = (&step.section, &self.plan.origin);
        let mut docs: Vec<Vec<String>> = Vec::new();
        for v in sec.list("corpus") {
            let corpus = match self.plan.input(&v) {
                Input::File(p) => WordCorpus::load(&p)?,
                Input::Step { .. } => self.dataset(&v)?.token_corpus(),
            };
            docs.extend(corpus.documents().map(<[String]>::to_vec));
        }
        let corpus = WordCorpus::from_token_docs(&step.name, docs);
        let vocab = build_vocabulary(&corpus, sec.parse_or(o, "min_count", 1)?)?;
        let dim = self.plan.embed_dim_of(step)?;
        let s = seed::derive(self.plan.seed, &step.name);
        let epochs = sec.parse_or(o, "epochs", 15)?;
        let lr = sec.parse_or(o, "learning_rate", 0.05)?;
        let mut trained = match sec.get("method").unwrap_or("cooc") {
            "cbow" => train_context_embeddings(
                &corpus,
                &vocab,
                &CbowParams { dim, epochs, learning_rate: lr, window: sec.parse_or(o, "window", 5)?, seed: s, ..Default::default() },
            )?,
            _ => {
                let x = build_cooccurrence(&corpus, &vocab, sec.parse_or(o, "window", 10)?, true, self.exec)?;
                train_cooc_embeddings(&x, &CoocParams { dim, epochs, learning_rate: lr, seed: s, ..Default::default() })?
            }
        };
        trained.table.corpus_tag = step.name.clone();
        let file = self.plan.out.join(format!("{}.emb", step.name));
        trained.table.save(&file)?;
        Ok(StepOutput {
            artifacts: vec![(step.name.clone(), Artifact::Table(trained.table))],
            files: vec![file],
        })
    }

    fn training_data(&self, step: &Step) -> Result<(Dataset, Vec<Dataset>)> {
        let data = self.dataset(step.section.get("data").expect("validated"))?;
        let mix = step.section.list("mix").iter().map(|v| self.dataset(v)).collect::<Result<Vec<_>>>()?;
        Ok((data, mix))
    }

    fn embeddings(&self, step: &Step) -> Result<Option<(EmbeddingTable, EmbedMode)>> {
        let o = &self.plan.origin;
        match step.section.get("embeddings") {
            None => Ok(None),
            Some(v) => Ok(Some((self.table(v)?, step.section.parse_or(o, "embed_mode", EmbedMode::SetTrain)?))),
        }
    }

    fn source(&self, step: &Step) -> Result<StepOutput> {
        let cfg = self.plan.train_config(step)?;
        let (data, mix) = self.training_data(step)?;
        let data = if mix.is_empty() {
            data
        } else {
            let mut parts = vec![&data];
            parts.extend(mix.iter());
            mix_datasets(&format!("{}+mix", data.name), &parts)?
        };
        let mut model = Model::for_dataset(&data, cfg)?;
        if let Some((table, mode)) = self.embeddings(step)? {
            model.init_embedding_layer(&table, mode)?;
        }
        train(&mut model, &data, self.exec)?;
        let bundle = export_weights(&model, &data.name);
        let model_file = self.plan.out.join(format!("{}.model", step.name));
        let bundle_file = self.plan.out.join(format!("{}.bundle", step.name));
        model.save(&model_file)?;
        bundle.save(&bundle_file)?;
        Ok(StepOutput {
            artifacts: vec![(step.name.clone(), Artifact::Bundle(bundle))],
            files: vec![model_file, bundle_file],
        })
    }

    fn cv(&self, step: &Step) -> Result<StepOutput> {
        let (sec, o) = (&step.section, &self.plan.origin);
        let (data, mix) = self.training_data(step)?;
        let mut config = self.plan.train_config(step)?;
        config.seed = 0;
        let mut pipeline = Pipeline::new(&step.name, config);
        pipeline.embeddings = self.embeddings(step)?;
        pipeline.transfer = sec.get("transfer").map(|v| self.bundle(v)).transpose()?;
        pipeline.mix = mix;
        pipeline.runs = sec.parse_or(o, "runs", self.plan.defaults.parse_or(o, "runs", 3)?)?;
        let k = sec.parse_or(o, "k", self.plan.defaults.parse_or(o, "k", 5)?)?;
        // shared fold seed so every step on a dataset sees the same folds
        let mut report = cross_validate(&data, &pipeline, k, self.plan.seed, self.exec)?;
        if let Some(b) = sec.get("baseline") {
            match self.store.get(b.trim_start_matches('@')) {
                Some(Artifact::Report(base)) => report.compare_to(base),
                _ => return Err(plan_err(format!("baseline '{b}' has no report"))),
            }
        }
        let file = self.plan.out.join(format!("{}.report.csv", step.name));
        fs::write(&file, render_reports(std::slice::from_ref(&report))).map_err(|e| Error::io(&file, e))?;
        Ok(StepOutput {
            artifacts: vec![(step.name.clone(), Artifact::Report(report))],
            files: vec![file],
        })
    }
}

fn key(step: &str, output: &str) -> String {
    if output.is_empty() {
        step.to_string()
    } else {
        format!("{step}.{output}")
    }
}

/// Executes a validated plan. Steps of one wave run concurrently on up to
/// `plan.jobs` threads; after a failing wave no further steps start, but
/// everything already written is kept and listed in the summary.
pub fn run_plan(plan: &Plan, exec: Exec) -> Result<PlanOutcome> {
    fs::create_dir_all(&plan.out).map_err(|e| Error::io(&plan.out, e))?;
    let mut runner = Runner { plan, store: HashMap::new(), exec };
    let mut outcome = PlanOutcome { summary: plan.out.join(SUMMARY_FILE), ..Default::default() };
    let mut status: BTreeMap<String, &'static str> = BTreeMap::new();
    for wave in plan.waves() {
        let results = with_threads(plan.jobs, || exec.map(&wave, |s| runner.run(s)));
        for (step, res) in wave.iter().zip(results) {
            match res {
                Ok(out) => {
                    status.insert(step.name.clone(), "ok");
                    outcome.files.extend(out.files.into_iter().map(|file| ArtifactFile { step: step.name.clone(), kind: step.kind, file }));
                    for (k, a) in out.artifacts {
                        if let Artifact::Report(r) = &a {
                            outcome.reports.push(r.clone());
                        }
                        runner.store.insert(k, a);
                    }
                }
                Err(e) => {
                    log::error!("step {} failed: {e}", step.name);
                    status.insert(step.name.clone(), "failed");
                    if outcome.failure.is_none() {
                        outcome.failure = Some((step.name.clone(), e));
                    }
                }
            }
        }
        if outcome.failure.is_some() {
            break;
        }
    }
    let text = render_summary(plan, &status, &outcome);
    fs::write(&outcome.summary, text).map_err(|e| Error::io(&outcome.summary, e))?;
    Ok(outcome)
}

fn render_summary(plan: &Plan, status: &BTreeMap<String, &str>, outcome: &PlanOutcome) -> String {
    let name = Path::new(&plan.origin).file_name().map_or(plan.origin.clone(), |n| n.to_string_lossy().into_owned());
    let mut s = format!("# plan {name} seed {}\nstep,kind,status,artifact\n", plan.seed);
    for step in &plan.steps {
        let st = status.get(&step.name).copied().unwrap_or("skipped");
        let files: Vec<&ArtifactFile> = outcome.files.iter().filter(|f| f.step == step.name).collect();
        if files.is_empty() {
            let _ = writeln!(s, "{},{},{st},", step.name, step.kind.name());
        }
        for f in files {
            let rel = f.file.strip_prefix(&plan.out).unwrap_or(&f.file);
            let _ = writeln!(s, "{},{},{st},{}", step.name, step.kind.name(), rel.display());
        }
    }
    s.push_str("\nconfig,dataset,mean,std,delta_vs,delta,p,stars\n");
    for r in &outcome.reports {
        let opt = |x: Option<f64>| x.map(|v| v.to_string()).unwrap_or_default();
        let _ = writeln!(
            s,
            "{},{},{},{},{},{},{},{}",
            r.config,
            r.dataset,
            r.mean,
            r.std,
            r.baseline.as_deref().unwrap_or(""),
            opt(r.delta),
            opt(r.p_value),
            r.stars
        );
    }
    s
}

/// Window length used for a dataset label outside the transfer grid.
pub fn paper_window(label: &str) -> usize {
    match label {
        "acdf_l" | "ldh_l" => 75,
        _ => 50,
    }
}

/// Common window length of every mix and transfer step.
pub const TRANSFER_WINDOW: usize = 50;

/// Inputs of the full study grid.
#[derive(Debug, Clone)]
pub struct PaperOptions {
    /// `procedure_site` labels with a dataset file each; `None` uses the
    /// synthetic profile of the same name.
    pub datasets: Vec<(String, Option<PathBuf>)>,
    /// Corpus files for the embedding runs; empty trains on the datasets'
    /// own token streams (plus extra synthetic interventions).
    pub corpus: Vec<PathBuf>,
    pub seed: u64,
    pub out: PathBuf,
    /// Extra `key = value` lines for the plan's leading block.
    pub overrides: Vec<(String, String)>,
    /// Synthetic stand-ins: cap on interventions and length/pool scaling.
    pub synth_scale: Option<(usize, f64, f64)>,
}

impl PaperOptions {
    pub fn synthetic(seed: u64, out: &Path) -> PaperOptions {
        PaperOptions {
            datasets: ["acdf_l", "acdf_r", "ldh_l", "ldh_r", "pa_l", "pa_r"].iter().map(|l| (l.to_string(), None)).collect(),
            corpus: Vec::new(),
            seed,
            out: out.to_path_buf(),
            overrides: Vec::new(),
            synth_scale: None,
        }
    }
}

fn split_label(label: &str) -> (&str, &str) {
    label.split_once('_').unwrap_or((label, ""))
}

/// Step counts of a generated grid, keyed by role.
pub fn paper_grid_counts(plan: &str) -> BTreeMap<String, usize> {
    let mut counts = BTreeMap::new();
    for line in plan.lines() {
        if let Some(role) = line.strip_prefix("# role: ") {
            *counts.entry(role.trim().to_string()).or_default() += 1;
        }
    }
    counts
}

/// Writes the plan text of the full grid: per-dataset baselines and
/// embedding runs, site mixes, procedure mixes, inter-site transfers and
/// inter-procedure transfers from a mix of the source procedure's sites.
pub fn paper_plan(opts: &PaperOptions) -> Result<String> {
    if opts.datasets.len() < 2 {
        return Err(Error::Usage("the study grid needs at least two datasets".into()));
    }
    let labels: Vec<&str> = opts.datasets.iter().map(|(l, _)| l.as_str()).collect();
    let mut seen = HashSet::new();
    for l in &labels {
        if !seen.insert(*l) || l.contains(['.', '@', ',', ' ']) {
            return Err(Error::Usage(format!("invalid or duplicate dataset label '{l}'")));
        }
    }
    let mut procs: Vec<&str> = Vec::new();
    for l in &labels {
        let p = split_label(l).0;
        if !procs.contains(&p) {
            procs.push(p);
        }
    }
    let sites = |p: &str| -> Vec<&str> { labels.iter().copied().filter(|l| split_label(l).0 == p).collect() };

    let mut s = String::new();
    let _ = writeln!(s, "# full study grid\nseed = {}\nout = {}", opts.seed, opts.out.display());
    for (k, v) in &opts.overrides {
        let _ = writeln!(s, "{k} = {v}");
    }
    let data_ref: HashMap<&str, String>;
    let mut corpus_refs: Vec<String> = opts.corpus.iter().map(|p| p.display().to_string()).collect();
    {
        let mut refs = HashMap::new();
        for p in &procs {
            let ss = sites(p);
            let synthetic: Vec<&str> = ss
                .iter()
                .copied()
                .filter(|l| opts.datasets.iter().any(|(x, f)| x == l && f.is_none()))
                .collect();
            for chunk in synthetic.chunks(2) {
                let step = format!("data_{}", chunk.join("_"));
                let _ = write!(s, "\n[step {step}]\nkind = synth\nprofile = {}\n", chunk[0]);
                let offset = procs.iter().position(|q| q == p).unwrap_or(0) * 3;
                let _ = writeln!(s, "element_offset = {offset}");
                if let Some(partner) = chunk.get(1) {
                    let _ = writeln!(s, "partner_profile = {partner}\npartner_element_offset = {offset}\noverlap = 0.5");
                }
                if let Some((n, len, pool)) = opts.synth_scale {
                    let _ = writeln!(s, "max_interventions = {n}\nlength_scale = {len}\npool_scale = {pool}");
                }
                if opts.corpus.is_empty() {
                    let _ = writeln!(s, "extra_interventions = 20");
                    corpus_refs.push(format!("@{step}.extra"));
                    if chunk.len() > 1 {
                        corpus_refs.push(format!("@{step}.partner.extra"));
                    }
                }
                refs.insert(chunk[0], format!("@{step}"));
                if let Some(partner) = chunk.get(1) {
                    refs.insert(*partner, format!("@{step}.partner"));
                }
            }
            for l in ss {
                if let Some((_, Some(path))) = opts.datasets.iter().find(|(x, _)| x == l) {
                    refs.insert(l, path.display().to_string());
                }
            }
        }
        data_ref = refs;
    }
    if opts.corpus.is_empty() {
        for l in &labels {
            if opts.datasets.iter().any(|(x, f)| x == l && f.is_some()) {
                corpus_refs.push(data_ref[l].clone());
            }
        }
    }
    // co-occurrence vectors on activity-token corpora share one dominant direction; CBOW keeps words apart
    let method = if opts.corpus.is_empty() { "cbow" } else { "cooc" };
    let _ = write!(s, "\n[step vectors]\nkind = embed\nmethod = {method}\ncorpus = {}\n", corpus_refs.join(", "));

    for l in &labels {
        let w = paper_window(l);
        let _ = write!(s, "\n# role: baseline\n[step base_{l}]\nkind = cv\ndata = {}\nwindow_n = {w}\n", data_ref[l]);
        let _ = write!(
            s,
            "\n# role: embedding\n[step set_train_{l}]\nkind = cv\ndata = {}\nwindow_n = {w}\nembeddings = @vectors\nembed_mode = set_train\nbaseline = base_{l}\n",
            data_ref[l]
        );
    }
    // the smaller site of a procedure is the data-scarce destination
    let scarce = |p: &str| -> &str {
        let ss = sites(p);
        *ss.iter().min_by_key(|l| {
            let n = opts
                .datasets
                .iter()
                .find(|(x, _)| x == *l)
                .and_then(|(_, f)| if f.is_none() { SyntheticConfig::profile(l).map(|c| c.n_interventions) } else { None })
                .unwrap_or(usize::MAX);
            (n, l.to_string())
        })
        .expect("procedure has a site")
    };
    for p in &procs {
        let ss = sites(p);
        if ss.len() < 2 {
            continue;
        }
        let dest = scarce(p);
        let others: Vec<&str> = ss.iter().map(|l| data_ref[l].as_str()).filter(|r| *r != data_ref[dest]).collect();
        let _ = write!(
            s,
            "\n# role: site_mix\n[step mix_{p}]\nkind = cv\ndata = {}\nmix = {}\nwindow_n = {TRANSFER_WINDOW}\nbaseline = base_{dest}\n",
            data_ref[dest],
            others.join(", ")
        );
    }
    for (i, p) in procs.iter().enumerate() {
        for q in &procs[i + 1..] {
            let dest = scarce(p);
            let other: Vec<&str> = sites(q).iter().map(|l| data_ref[l].as_str()).collect();
            let _ = write!(
                s,
                "\n# role: procedure_mix\n[step mix_{p}_{q}]\nkind = cv\ndata = {}\nmix = {}\nwindow_n = {TRANSFER_WINDOW}\nbaseline = base_{dest}\n",
                data_ref[dest],
                other.join(", ")
            );
        }
    }
    // sources: each single site, plus the mix of sites of each procedure
    for l in &labels {
        let _ = write!(s, "\n[step src_{l}]\nkind = source\ndata = {}\nwindow_n = {TRANSFER_WINDOW}\n", data_ref[l]);
    }
    for p in &procs {
        let ss = sites(p);
        if ss.len() >= 2 {
            let rest: Vec<&str> = ss[1..].iter().map(|l| data_ref[l].as_str()).collect();
            let _ = write!(
                s,
                "\n[step src_{p}_sites]\nkind = source\ndata = {}\nmix = {}\nwindow_n = {TRANSFER_WINDOW}\n",
                data_ref[ss[0]],
                rest.join(", ")
            );
        }
    }
    for p in &procs {
        let ss = sites(p);
        for a in &ss {
            for b in &ss {
                if a != b {
                    let _ = write!(
                        s,
                        "\n# role: inter_site\n[step transfer_{a}_to_{b}]\nkind = cv\ndata = {}\ntransfer = @src_{a}\nwindow_n = {TRANSFER_WINDOW}\nbaseline = base_{b}\n",
                        data_ref[b]
                    );
                }
            }
        }
    }
    for p in &procs {
        let src = if sites(p).len() >= 2 { format!("src_{p}_sites") } else { format!("src_{}", sites(p)[0]) };
        for q in &procs {
            if p == q {
                continue;
            }
            for b in sites(q) {
                let _ = write!(
                    s,
                    "\n# role: inter_procedure\n[step transfer_{p}_to_{b}]\nkind = cv\ndata = {}\ntransfer = @{src}\nwindow_n = {TRANSFER_WINDOW}\nbaseline = base_{b}\n",
                    data_ref[b]
                );
            }
        }
    }
    Ok(s)
}

#[cfg(test)]
mod tests {
    use super::*;

    const TINY: &str = "seed = 3\nout = out\nepochs = 1\nhidden = 4\nembed_dim = 4\nwindow_n = 2\npad_to = 6\nk = 2\nruns = 1\n";

    fn write_plan(dir: &Path, body: &str) -> PathBuf {
        let p = dir.join("plan.kv");
        fs::write(&p, format!("{TINY}{body}")).unwrap();
        p
    }

    const SMALL_SYNTH: &str = "\n[step data]\nkind = synth\nprofile = ldh_r\nmax_interventions = 4\nlength_scale = 0.2\npool_scale = 0.1\nextra_interventions = 4\n";

    #[test]
    fn rejects_cycles_before_running() {
        let dir = tempfile::tempdir().unwrap();
        let body = "\n[step a]\nkind = cv\ndata = x.csv\nbaseline = b\n\n[step b]\nkind = cv\ndata = x.csv\nbaseline = a\n";
        fs::write(dir.path().join("x.csv"), "").unwrap();
        let err = Plan::load(&write_plan(dir.path(), body)).unwrap_err();
        assert!(matches!(err, Error::Plan(ref m) if m.contains("cycle")), "{err}");
        assert!(!dir.path().join("out").exists());
    }

    #[test]
    fn rejects_missing_inputs_and_bad_refs() {
        let dir = tempfile::tempdir().unwrap();
        let e = Plan::load(&write_plan(dir.path(), "\n[step a]\nkind = cv\ndata = missing.csv\n")).unwrap_err();
        assert!(e.to_string().contains("not found"), "{e}");
        let e = Plan::load(&write_plan(dir.path(), "\n[step a]\nkind = cv\ndata = @nowhere\n")).unwrap_err();
        assert!(e.to_string().contains("unknown step"), "{e}");
        let body = format!("{SMALL_SYNTH}\n[step a]\nkind = cv\ndata = @data.partner\n");
        let e = Plan::load(&write_plan(dir.path(), &body)).unwrap_err();
        assert!(e.to_string().contains("no output"), "{e}");
        let e = Plan::load(&write_plan(dir.path(), "\n[step a]\nkind = cv\ndata = @a\nbogus = 1\n")).unwrap_err();
        assert!(e.to_string().contains("bogus"), "{e}");
        let body = format!("{SMALL_SYNTH}\n[step v]\nkind = embed\ncorpus = @data\ndim = 8\n\n[step a]\nkind = cv\ndata = @data\nembeddings = @v\n");
        let e = Plan::load(&write_plan(dir.path(), &body)).unwrap_err();
        assert!(e.to_string().contains("dimensional"), "{e}");
    }

    #[test]
    fn orders_steps_topologically() {
        let dir = tempfile::tempdir().unwrap();
        let body = format!(
            "\n[step set]\nkind = cv\ndata = @data\nembeddings = @v\nbaseline = base\n\n[step base]\nkind = cv\ndata = @data\n\n[step v]\nkind = embed\ncorpus = @data.extra\n{SMALL_SYNTH}"
        );
        let plan = Plan::load(&write_plan(dir.path(), &body)).unwrap();
        let order: Vec<&str> = plan.steps.iter().map(|s| s.name.as_str()).collect();
        let pos = |n: &str| order.iter().position(|x| *x == n).unwrap();
        assert!(pos("data") < pos("v") && pos("v") < pos("set") && pos("base") < pos("set"));
        let waves = plan.waves();
        assert_eq!(waves[0].len(), 1);
    }

    fn three_step_plan(dir: &Path) -> PathBuf {
        let body = format!(
            "{SMALL_SYNTH}\n[step v]\nkind = embed\ncorpus = @data.extra\nepochs = 2\n\n[step base]\nkind = cv\ndata = @data\n\n[step set]\nkind = cv\ndata = @data\nembeddings = @v\nembed_mode = set\nbaseline = base\n\n[step set_train]\nkind = cv\ndata = @data\nembeddings = @v\nembed_mode = set_train\nbaseline = base\n"
        );
        write_plan(dir, &body)
    }

    #[test]
    fn runs_and_is_reproducible() {
        let dir = tempfile::tempdir().unwrap();
        let plan = Plan::load(&three_step_plan(dir.path())).unwrap();
        let first = run_plan(&plan, Exec::Parallel).unwrap();
        assert!(first.failure.is_none());
        assert_eq!(first.reports.len(), 3);
        assert!(first.reports[1].delta.is_some());
        let summary = fs::read_to_string(&first.summary).unwrap();
        for f in &first.files {
            let rel = f.file.strip_prefix(&plan.out).unwrap().display().to_string();
            assert!(summary.contains(&rel), "{rel} missing from summary");
        }
        let written: Vec<_> = fs::read_dir(&plan.out).unwrap().map(|e| e.unwrap().file_name()).collect();
        assert_eq!(written.len(), first.files.len() + 1);
        let snapshot: Vec<Vec<u8>> = first.files.iter().map(|f| fs::read(&f.file).unwrap()).collect();

        let again = run_plan(&plan, Exec::Sequential).unwrap();
        for (f, bytes) in again.files.iter().zip(&snapshot) {
            assert_eq!(&fs::read(&f.file).unwrap(), bytes, "{} differs", f.file.display());
        }
        assert_eq!(fs::read_to_string(&again.summary).unwrap(), summary);
    }

    #[test]
    fn failure_keeps_completed_outputs() {
        let dir = tempfile::tempdir().unwrap();
        // k larger than the intervention count fails at run time
        let body = format!("{SMALL_SYNTH}\n[step base]\nkind = cv\ndata = @data\nk = 9\n\n[step later]\nkind = cv\ndata = @data\nbaseline = base\n");
        let plan = Plan::load(&write_plan(dir.path(), &body)).unwrap();
        let out = run_plan(&plan, Exec::Sequential).unwrap();
        let (step, _) = out.failure.as_ref().unwrap();
        assert_eq!(step, "base");
        assert!(plan.out.join("data.csv").exists());
        let summary = fs::read_to_string(&out.summary).unwrap();
        assert!(summary.contains("base,cv,failed,"));
        assert!(summary.contains("later,cv,skipped,"));
    }

    #[test]
    fn paper_grid_counts_and_windows() {
        let opts = PaperOptions::synthetic(1, Path::new("out"));
        let text = paper_plan(&opts).unwrap();
        let counts = paper_grid_counts(&text);
        let want: BTreeMap<String, usize> = [
            ("baseline", 6),
            ("embedding", 6),
            ("site_mix", 3),
            ("procedure_mix", 3),
            ("inter_site", 6),
            ("inter_procedure", 12),
        ]
        .into_iter()
        .map(|(k, v)| (k.to_string(), v))
        .collect();
        assert_eq!(counts, want);
        let plan = Plan::parse(&text, "paper", Path::new(".")).unwrap();
        for s in &plan.steps {
            let cfg = plan.train_config(s);
            let Ok(cfg) = cfg else { continue };
            if let Some(l) = s.name.strip_prefix("base_") {
                assert_eq!(cfg.window_n, paper_window(l));
            }
            if s.name.starts_with("transfer_") || s.name.starts_with("src_") || s.name.starts_with("mix_") {
                assert_eq!(cfg.window_n, TRANSFER_WINDOW);
            }
        }
        assert_eq!(paper_window("acdf_l"), 75);
        assert_eq!(paper_window("ldh_l"), 75);
        assert_eq!(paper_window("pa_r"), 50);
    }

    #[test]
    fn paper_grid_needs_two_datasets() {
        let mut opts = PaperOptions::synthetic(1, Path::new("out"));
        opts.datasets.truncate(1);
        assert!(paper_plan(&opts).is_err());
        opts = PaperOptions::synthetic(1, Path::new("out"));
        opts.datasets.truncate(2);
        let counts = paper_grid_counts(&paper_plan(&opts).unwrap());
        assert_eq!(counts["inter_site"], 2);
        assert!(!counts.contains_key("inter_procedure"));
    }
}
