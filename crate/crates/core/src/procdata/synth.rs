//! Phase-structured first-order Markov generator standing in for annotated
//! interventions.

use std::collections::HashSet;
use std::fs;
use std::path::Path;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::Rng as _;
use rand_distr::{Distribution, Normal};

use super::{Activity, Dataset, HandAction, InterventionSequence};
use crate::error::{Error, Result};
use crate::kv::{self, Section};
use crate::seed::{self, Rng};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Phase {
    /// Number of activities owned by the phase.
    pub pool: usize,
    /// Relative share of each intervention spent in the phase.
    pub dwell: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticConfig {
    pub name: String,
    pub phases: Vec<Phase>,
    pub n_interventions: usize,
    pub mean_length: f64,
    pub length_spread: f64,
    pub n_verbs: usize,
    pub n_instruments: usize,
    pub n_structures: usize,
    /// First index of this config's element tokens; partners with different
    /// offsets share fewer verbs, instruments and structures.
    pub element_offset: usize,
    /// Probability that a hand is idle in a pool activity.
    pub idle_prob: f64,
    /// Probability of the preferred successor; the remainder is uniform.
    pub peak: f64,
    /// Target activity-level Dice overlap with the partner.
    pub shared_pool_fraction: f64,
    pub seed: u64,
    pub partner: Option<Box<SyntheticConfig>>,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        SyntheticConfig {
            name: "synthetic".into(),
            phases: vec![Phase { pool: 20, dwell: 1.0 }],
            n_interventions: 10,
            mean_length: 100.0,
            length_spread: 20.0,
            n_verbs: 6,
            n_instruments: 8,
            n_structures: 5,
            element_offset: 0,
            idle_prob: 0.2,
            peak: 0.7,
            shared_pool_fraction: 0.0,
            seed: 0,
            partner: None,
        }
    }
}

impl SyntheticConfig {
    /// Profiles for six stand-in datasets (site L/R of
    /// three procedures): interventions, mean±std length, unique activities,
    /// verbs, instruments and structures.
    pub fn profile(name: &str) -> Option<SyntheticConfig> {
        let (n, mean, sd, m, v, i, s) = match name {
            "acdf_l" => (16, 367.0, 149.0, 377, 11, 24, 10),
            "acdf_r" => (48, 244.0, 76.0, 379, 11, 31, 6),
            "ldh_l" => (25, 242.0, 72.0, 413, 11, 26, 9),
            "ldh_r" => (20, 148.0, 49.0, 243, 10, 22, 7),
            "pa_l" => (15, 266.0, 77.0, 282, 14, 30, 6),
            "pa_r" => (11, 213.0, 46.0, 255, 14, 29, 8),
            _ => return None,
        };
        let n_phases = 5;
        let phases = (0..n_phases)
            .map(|k| Phase {
                pool: m / n_phases + usize::from(k < m % n_phases),
                dwell: 1.0,
            })
            .collect();
        Some(SyntheticConfig {
            name: name.into(),
            phases,
            n_interventions: n,
            mean_length: mean,
            length_spread: sd,
            n_verbs: v,
            n_instruments: i,
            n_structures: s,
            idle_prob: 0.15,
            peak: 0.6,
            ..Default::default()
        })
    }

    pub fn pool_size(&self) -> usize {
        self.phases.iter().map(|p| p.pool).sum()
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Infeasible(format!("{}: {m}", self.name)));
        if self.phases.is_empty() || self.phases.iter().any(|p| p.pool == 0 || !(p.dwell > 0.0)) {
            return bad("every phase needs a positive pool and dwell");
        }
        if self.n_interventions == 0 || !(self.mean_length >= 2.0) || !(self.length_spread >= 0.0) {
            return bad("need at least one intervention and mean length >= 2");
        }
        if self.n_verbs == 0 || self.n_instruments == 0 || self.n_structures == 0 {
            return bad("element vocabularies must be non-empty");
        }
        if !(0.0..1.0).contains(&self.idle_prob) || !(0.0..=1.0).contains(&self.peak) {
            return bad("idle_prob must be in [0,1) and peak in [0,1]");
        }
        if !(0.0..=1.0).contains(&self.shared_pool_fraction) {
            return bad("shared_pool_fraction must be in [0,1]");
        }
        if self.pool_size() > self.tuple_capacity() {
            return bad("pool larger than the number of distinct activity tuples");
        }
        Ok(())
    }

    fn hand_options(&self) -> usize {
        self.n_verbs * self.n_instruments * self.n_structures + usize::from(self.idle_prob > 0.0)
    }

    fn tuple_capacity(&self) -> usize {
        self.hand_options().saturating_mul(self.hand_options())
    }

    pub fn load(path: &Path) -> Result<SyntheticConfig> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text, &path.display().to_string())
    }

    /// Reads `key = value` lines; an optional `[partner]` section configures
    /// the partner dataset and inherits unspecified keys from the main block.
    pub fn parse(text: &str, origin: &str) -> Result<SyntheticConfig> {
        let sections = kv::parse(text, origin)?;
        let base = SyntheticConfig::default();
        let mut cfg = Self::from_section(&sections[0], origin, &base)?;
        for s in &sections[1..] {
            match s.header.as_deref() {
                Some("partner") => {
                    let mut p = Self::from_section(s, origin, &cfg)?;
                    p.partner = None;
                    if s.get("name").is_none() {
                        p.name = format!("{}_partner", cfg.name);
                    }
                    cfg.partner = Some(Box::new(p));
                }
                other => {
                    return Err(Error::format(origin, s.line, format!("unknown section {other:?}")));
                }
            }
        }
        Ok(cfg)
    }

    fn from_section(s: &Section, origin: &str, base: &SyntheticConfig) -> Result<SyntheticConfig> {
        let phases = match s.get("phases") {
            None => base.phases.clone(),
            Some(_) => s
                .list("phases")
                .iter()
                .map(|p| {
                    let (pool, dwell) = p.split_once(':').unwrap_or((p.as_str(), "1"));
                    match (pool.trim().parse(), dwell.trim().parse()) {
                        (Ok(pool), Ok(dwell)) => Ok(Phase { pool, dwell }),
                        _ => Err(Error::format(origin, s.entries["phases"].1, format!("bad phase '{p}'"))),
                    }
                })
                .collect::<Result<_>>()?,
        };
        Ok(SyntheticConfig {
            name: s.get("name").map_or_else(|| base.name.clone(), str::to_string),
            phases,
            n_interventions: s.parse_or(origin, "interventions", base.n_interventions)?,
            mean_length: s.parse_or(origin, "mean_length", base.mean_length)?,
            length_spread: s.parse_or(origin, "length_spread", base.length_spread)?,
            n_verbs: s.parse_or(origin, "verbs", base.n_verbs)?,
            n_instruments: s.parse_or(origin, "instruments", base.n_instruments)?,
            n_structures: s.parse_or(origin, "structures", base.n_structures)?,
            element_offset: s.parse_or(origin, "element_offset", base.element_offset)?,
            idle_prob: s.parse_or(origin, "idle_prob", base.idle_prob)?,
            peak: s.parse_or(origin, "peak", base.peak)?,
            shared_pool_fraction: s.parse_or(origin, "shared_pool_fraction", base.shared_pool_fraction)?,
            seed: s.parse_or(origin, "seed", base.seed)?,
            partner: None,
        })
    }
}

/// Ground truth of a generated dataset.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticProcess {
    /// Activity list of each phase; the preferred successor of entry `i` is
    /// entry `(i + 1) % len`.
    pub phases: Vec<Vec<Activity>>,
    pub peak: f64,
}

impl SyntheticProcess {
    fn locate(&self, a: &Activity) -> Option<(usize, usize)> {
        self.phases
            .iter()
            .enumerate()
            .find_map(|(p, pool)| pool.iter().position(|x| x == a).map(|i| (p, i)))
    }

    /// Within-phase transition distribution of `a` as `(activity, probability)`.
    pub fn transition_row(&self, a: &Activity) -> Option<Vec<(&Activity, f64)>> {
        let (p, i) = self.locate(a)?;
        let pool = &self.phases[p];
        let k = pool.len();
        if k == 1 {
            return Some(vec![(&pool[0], 1.0)]);
        }
        let preferred = (i + 1) % k;
        let rest = (1.0 - self.peak) / (k - 1) as f64;
        Some(
            pool.iter()
                .enumerate()
                .map(|(j, x)| (x, if j == preferred { self.peak } else { rest }))
                .collect(),
        )
    }

    /// Most probable next activity given the current one, ignoring phase
    /// changes (exact for single-phase processes).
    pub fn bayes_next(&self, a: &Activity) -> Option<&Activity> {
        let row = self.transition_row(a)?;
        row.into_iter()
            .fold(None, |best: Option<(&Activity, f64)>, (x, p)| match best {
                Some((_, bp)) if bp >= p => best,
                _ => Some((x, p)),
            })
            .map(|(x, _)| x)
    }

    pub fn contains(&self, a: &Activity) -> bool {
        self.locate(a).is_some()
    }
}

fn element_tokens(prefix: &str, offset: usize, n: usize) -> Vec<String> {
    (offset..offset + n).map(|i| format!("{prefix}{i}")).collect()
}

struct Elements {
    verbs: Vec<String>,
    instruments: Vec<String>,
    structures: Vec<String>,
    idle_prob: f64,
}

impl Elements {
    fn of(cfg: &SyntheticConfig) -> Elements {
        Elements {
            verbs: element_tokens("verb", cfg.element_offset, cfg.n_verbs),
            instruments: element_tokens("instr", cfg.element_offset, cfg.n_instruments),
            structures: element_tokens("struct", cfg.element_offset, cfg.n_structures),
            idle_prob: cfg.idle_prob,
        }
    }

    fn intersect(&self, other: &Elements) -> Elements {
        let keep = |a: &[String], b: &[String]| -> Vec<String> {
            a.iter().filter(|x| b.contains(x)).cloned().collect()
        };
        Elements {
            verbs: keep(&self.verbs, &other.verbs),
            instruments: keep(&self.instruments, &other.instruments),
            structures: keep(&self.structures, &other.structures),
            idle_prob: self.idle_prob.min(other.idle_prob),
        }
    }

    fn capacity(&self) -> usize {
        let hand = self.verbs.len() * self.instruments.len() * self.structures.len() + usize::from(self.idle_prob > 0.0);
        hand * hand
    }

    fn hand(&self, rng: &mut Rng) -> HandAction {
        if self.idle_prob > 0.0 && rng.random::<f64>() < self.idle_prob {
            return HandAction::default();
        }
        HandAction {
            verb: vec![self.verbs.choose(rng).expect("non-empty").clone()],
            instrument: vec![self.instruments.choose(rng).expect("non-empty").clone()],
            structure: vec![self.structures.choose(rng).expect("non-empty").clone()],
        }
    }

    /// Draws `n` activities not yet in `taken`, adding them to it.
    fn draw_unique(&self, n: usize, taken: &mut HashSet<Activity>, rng: &mut Rng) -> Result<Vec<Activity>> {
        if self.capacity() < taken.len() + n {
            return Err(Error::Infeasible(format!(
                "cannot draw {n} new activities from {} possible tuples",
                self.capacity()
            )));
        }
        let mut out = Vec::with_capacity(n);
        let mut attempts = 0usize;
        while out.len() < n {
            attempts += 1;
            if attempts > 1000 * (n + 10) {
                return Err(Error::Infeasible("activity pool too dense to fill by sampling".into()));
            }
            let a = Activity {
                left: self.hand(rng),
                right: self.hand(rng),
            };
            if taken.insert(a.clone()) {
                out.push(a);
            }
        }
        Ok(out)
    }
}

/// Splits `total` proportionally to `weights` with largest-remainder rounding.
fn apportion(total: usize, weights: &[f64]) -> Vec<usize> {
    let sum: f64 = weights.iter().sum();
    let exact: Vec<f64> = weights.iter().map(|w| total as f64 * w / sum).collect();
    let mut out: Vec<usize> = exact.iter().map(|x| x.floor() as usize).collect();
    let mut rem: Vec<(usize, f64)> = exact.iter().enumerate().map(|(i, x)| (i, x - x.floor())).collect();
    rem.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    let missing = total - out.iter().sum::<usize>();
    for &(i, _) in rem.iter().take(missing) {
        out[i] += 1;
    }
    out
}

/// Builds per-phase activity lists with `shared` activities at the front of
/// each phase (chunked in order across phases).
fn build_phases(cfg: &SyntheticConfig, shared: &[Activity], own: Vec<Activity>, rng: &mut Rng) -> Result<Vec<Vec<Activity>>> {
    let pools: Vec<f64> = cfg.phases.iter().map(|p| p.pool as f64).collect();
    let shared_split = apportion(shared.len(), &pools);
    let mut own = own.into_iter();
    let mut sh = shared.iter();
    let mut phases = Vec::with_capacity(cfg.phases.len());
    for (ph, &s) in cfg.phases.iter().zip(&shared_split) {
        if s > ph.pool {
            return Err(Error::Infeasible(format!("{}: shared activities exceed phase pool", cfg.name)));
        }
        let mut list: Vec<Activity> = sh.by_ref().take(s).cloned().collect();
        let mut rest: Vec<Activity> = own.by_ref().take(ph.pool - s).collect();
        rest.shuffle(rng);
        list.extend(rest);
        phases.push(list);
    }
    Ok(phases)
}

fn sample_sequences(cfg: &SyntheticConfig, process: &SyntheticProcess, seed: u64) -> Result<Dataset> {
    let mut rng = seed::rng(seed);
    let normal = Normal::new(cfg.mean_length, cfg.length_spread)
        .map_err(|e| Error::Infeasible(format!("{}: {e}", cfg.name)))?;
    let dwell: Vec<f64> = cfg.phases.iter().map(|p| p.dwell).collect();
    let n_phases = dwell.len();
    let mut sequences = Vec::with_capacity(cfg.n_interventions);
    for k in 0..cfg.n_interventions {
        let len = (normal.sample(&mut rng).round().max(2.0) as usize).max(n_phases);
        let mut per_phase = apportion(len, &dwell);
        // every phase visited at least once
        for p in 0..n_phases {
            if per_phase[p] == 0 {
                let donor = (0..n_phases).max_by_key(|&i| per_phase[i]).expect("phases");
                per_phase[donor] -= 1;
                per_phase[p] += 1;
            }
        }
        let mut acts = Vec::with_capacity(len);
        for (pool, &steps) in process.phases.iter().zip(&per_phase) {
            let mut cur = if rng.random::<f64>() < process.peak {
                0
            } else {
                rng.random_range(0..pool.len())
            };
            for step in 0..steps {
                if step > 0 {
                    let preferred = (cur + 1) % pool.len();
                    cur = if pool.len() == 1 || rng.random::<f64>() < process.peak {
                        preferred
                    } else {
                        let mut j = rng.random_range(0..pool.len() - 1);
                        if j >= preferred {
                            j += 1;
                        }
                        j
                    };
                }
                acts.push(pool[cur].clone());
            }
        }
        sequences.push(InterventionSequence {
            id: format!("{}_{:03}", cfg.name, k + 1),
            activities: acts,
        });
    }
    Ok(Dataset::new(cfg.name.clone(), sequences))
}

/// Generates one dataset and its ground-truth process. Deterministic in
/// `cfg.seed`.
pub fn generate_synthetic(cfg: &SyntheticConfig) -> Result<(Dataset, SyntheticProcess)> {
    cfg.validate()?;
    let mut rng = seed::rng(cfg.seed);
    let el = Elements::of(cfg);
    let own = el.draw_unique(cfg.pool_size(), &mut HashSet::new(), &mut rng)?;
    let phases = build_phases(cfg, &[], own, &mut rng)?;
    let process = SyntheticProcess { phases, peak: cfg.peak };
    let ds = sample_sequences(cfg, &process, seed::derive(cfg.seed, "sequences"))?;
    Ok((ds, process))
}

/// Generates two datasets whose activity pools overlap by
/// `a.shared_pool_fraction` (Dice). Shared activities keep the same
/// preferred successors in both processes wherever their phase chunks
/// coincide. The joint pool is drawn from `a.seed`.
pub fn generate_pair(
    a: &SyntheticConfig,
    b: &SyntheticConfig,
) -> Result<((Dataset, SyntheticProcess), (Dataset, SyntheticProcess))> {
    a.validate()?;
    b.validate()?;
    let (na, nb) = (a.pool_size(), b.pool_size());
    let shared = (a.shared_pool_fraction * (na + nb) as f64 / 2.0).round() as usize;
    if shared > na.min(nb) {
        return Err(Error::Infeasible(format!(
            "overlap {:.3} needs {shared} shared activities but pools hold {na} and {nb}",
            a.shared_pool_fraction
        )));
    }
    let mut rng = seed::rng(a.seed);
    let (ea, eb) = (Elements::of(a), Elements::of(b));
    let common = ea.intersect(&eb);
    if shared > 0 && (common.verbs.is_empty() || common.instruments.is_empty() || common.structures.is_empty()) {
        return Err(Error::Infeasible("partners share no element vocabulary".into()));
    }
    let mut taken = HashSet::new();
    let shared_acts = common.draw_unique(shared, &mut taken, &mut rng)?;
    let own_a = ea.draw_unique(na - shared, &mut taken, &mut rng)?;
    let own_b = eb.draw_unique(nb - shared, &mut taken, &mut rng)?;
    let pa = SyntheticProcess {
        phases: build_phases(a, &shared_acts, own_a, &mut rng)?,
        peak: a.peak,
    };
    let pb = SyntheticProcess {
        phases: build_phases(b, &shared_acts, own_b, &mut rng)?,
        peak: b.peak,
    };
    let da = sample_sequences(a, &pa, seed::derive(a.seed, "sequences"))?;
    let db = sample_sequences(b, &pb, seed::derive(b.seed, "sequences"))?;
    Ok(((da, pa), (db, pb)))
}
