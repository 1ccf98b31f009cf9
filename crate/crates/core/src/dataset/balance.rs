//! Configuration-stratified oversampling.
//!
//! Records are first duplicated so that the (answerable, hallucinated) and
//! (unanswerable, grounded) cells have equal size, and likewise (answerable,
//! grounded) and (unanswerable, hallucinated). That makes both the label and
//! the answerability ratio exactly 1:1. From then on records are only added in
//! such diagonal pairs, chosen greedily to pull every template, chunk size and
//! chunk count towards an equal share, until each value count is within one
//! record of it.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::prompts::{ChunkCount, ChunkSize, TemplateId};

/// The balancing-relevant attributes of one record.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Stratum {
    pub answerable: Option<bool>,
    pub label: u8,
    pub template_id: Option<TemplateId>,
    pub chunk_size: Option<ChunkSize>,
    pub chunks_per_prompt: Option<ChunkCount>,
}

/// One value of one configuration field, e.g. `chunk_size=750`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum FieldValue {
    Answerable(bool),
    ChunkSize(ChunkSize),
    ChunksPerPrompt(ChunkCount),
    Template(TemplateId),
}

impl FieldValue {
    pub fn field(&self) -> &'static str {
        match self {
            FieldValue::Answerable(_) => "answerable",
            FieldValue::ChunkSize(_) => "chunk_size",
            FieldValue::ChunksPerPrompt(_) => "chunks_per_prompt",
            FieldValue::Template(_) => "template_id",
        }
    }

    pub fn matches(&self, s: &Stratum) -> bool {
        match *self {
            FieldValue::Answerable(v) => s.answerable == Some(v),
            FieldValue::ChunkSize(v) => s.chunk_size == Some(v),
            FieldValue::ChunksPerPrompt(v) => s.chunks_per_prompt == Some(v),
            FieldValue::Template(v) => s.template_id == Some(v),
        }
    }
}

impl std::fmt::Display for FieldValue {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            FieldValue::Answerable(v) => write!(f, "answerable={v}"),
            FieldValue::ChunkSize(v) => write!(f, "chunk_size={v}"),
            FieldValue::ChunksPerPrompt(v) => write!(f, "chunks_per_prompt={v}"),
            FieldValue::Template(v) => write!(f, "template_id={v}"),
        }
    }
}

impl std::str::FromStr for FieldValue {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        let (field, value) = s.split_once('=').ok_or_else(|| format!("expected field=value, got {s:?}"))?;
        let value = value.trim();
        match field.trim() {
            "answerable" => value.parse().map(FieldValue::Answerable).map_err(|_| format!("bad boolean {value:?}")),
            "chunk_size" => value.parse().map(FieldValue::ChunkSize).map_err(|e| format!("{e}")),
            "chunks_per_prompt" => value.parse().map(FieldValue::ChunksPerPrompt).map_err(|e| format!("{e}")),
            "template_id" | "template" => value.parse().map(FieldValue::Template).map_err(|e| format!("{e}")),
            other => Err(format!("unknown field {other:?}")),
        }
    }
}

impl Serialize for FieldValue {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for FieldValue {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        String::deserialize(d)?.parse().map_err(serde::de::Error::custom)
    }
}

/// Which values each field must be balanced over. An empty list leaves the
/// field unbalanced (and unchecked).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BalanceTargets {
    pub answerable: Vec<bool>,
    pub templates: Vec<TemplateId>,
    pub chunk_sizes: Vec<ChunkSize>,
    pub chunk_counts: Vec<ChunkCount>,
}

impl Default for BalanceTargets {
    fn default() -> Self {
        Self::full()
    }
}

impl BalanceTargets {
    pub fn full() -> Self {
        Self {
            answerable: vec![true, false],
            templates: TemplateId::ALL.to_vec(),
            chunk_sizes: ChunkSize::ALL.to_vec(),
            chunk_counts: ChunkCount::ALL.to_vec(),
        }
    }

    /// Drops one value from its field's target set.
    pub fn without(mut self, v: FieldValue) -> Self {
        match v {
            FieldValue::Answerable(x) => self.answerable.retain(|&a| a != x),
            FieldValue::ChunkSize(x) => self.chunk_sizes.retain(|&a| a != x),
            FieldValue::ChunksPerPrompt(x) => self.chunk_counts.retain(|&a| a != x),
            FieldValue::Template(x) => self.templates.retain(|&a| a != x),
        }
        self
    }

    /// Stops balancing every field that the records leave unset.
    pub fn restrict_to(mut self, strata: &[Stratum]) -> Self {
        if strata.iter().all(|s| s.answerable.is_none()) {
            self.answerable.clear();
        }
        if strata.iter().all(|s| s.template_id.is_none()) {
            self.templates.clear();
        }
        if strata.iter().all(|s| s.chunk_size.is_none()) {
            self.chunk_sizes.clear();
        }
        if strata.iter().all(|s| s.chunks_per_prompt.is_none()) {
            self.chunk_counts.clear();
        }
        self
    }

    fn features(&self, s: &Stratum) -> [Option<usize>; 3] {
        fn pos<T: PartialEq + Copy>(list: &[T], v: &Option<T>) -> Option<usize> {
            v.and_then(|v| list.iter().position(|x| *x == v))
        }
        [pos(&self.templates, &s.template_id), pos(&self.chunk_sizes, &s.chunk_size), pos(&self.chunk_counts, &s.chunks_per_prompt)]
    }

    fn arity(&self) -> [usize; 3] {
        [self.templates.len(), self.chunk_sizes.len(), self.chunk_counts.len()]
    }

    fn check(&self, i: usize, s: &Stratum) -> Result<(), BalanceError> {
        let bad = |field: &'static str, value: String| Err(BalanceError::UnexpectedValue { record: i, field, value });
        if !self.answerable.is_empty() && !s.answerable.is_some_and(|a| self.answerable.contains(&a)) {
            return bad("answerable", format!("{:?}", s.answerable));
        }
        if !self.templates.is_empty() && !s.template_id.is_some_and(|a| self.templates.contains(&a)) {
            return bad("template_id", format!("{:?}", s.template_id));
        }
        if !self.chunk_sizes.is_empty() && !s.chunk_size.is_some_and(|a| self.chunk_sizes.contains(&a)) {
            return bad("chunk_size", format!("{:?}", s.chunk_size));
        }
        if !self.chunk_counts.is_empty() && !s.chunks_per_prompt.is_some_and(|a| self.chunk_counts.contains(&a)) {
            return bad("chunks_per_prompt", format!("{:?}", s.chunks_per_prompt));
        }
        if s.label > 1 {
            return bad("label", s.label.to_string());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum BalanceError {
    #[error("nothing to balance")]
    Empty,
    #[error("record {record}: {field} value {value} is outside the balance targets")]
    UnexpectedValue { record: usize, field: &'static str, value: String },
    #[error("no records in cell answerable={answerable:?} label={label}")]
    EmptyCell { answerable: Option<bool>, label: u8 },
    #[error("no records with {0}")]
    MissingValue(String),
    #[error("strata still off target after {0} additions")]
    NotReached(usize),
}

/// Per-value record counts, as written to the dataset manifest.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct StratumCounts {
    pub total: usize,
    pub label: BTreeMap<u8, usize>,
    pub answerable: BTreeMap<String, usize>,
    pub template_id: BTreeMap<String, usize>,
    pub chunk_size: BTreeMap<String, usize>,
    pub chunks_per_prompt: BTreeMap<String, usize>,
}

impl StratumCounts {
    pub fn tally(strata: &[Stratum], multiplicity: &[usize]) -> Self {
        let mut c = StratumCounts::default();
        let name = |o: Option<String>| o.unwrap_or_else(|| "unset".into());
        for (s, &m) in strata.iter().zip(multiplicity) {
            c.total += m;
            *c.label.entry(s.label).or_default() += m;
            *c.answerable.entry(name(s.answerable.map(|a| a.to_string()))).or_default() += m;
            *c.template_id.entry(name(s.template_id.map(|a| a.to_string()))).or_default() += m;
            *c.chunk_size.entry(name(s.chunk_size.map(|a| a.to_string()))).or_default() += m;
            *c.chunks_per_prompt.entry(name(s.chunks_per_prompt.map(|a| a.to_string()))).or_default() += m;
        }
        c
    }
}

type Cell = (Option<bool>, u8);

/// Pair additions allowed without narrowing the worst deviation.
const STALL_LIMIT: usize = 500;

/// Records of one cell grouped by their feature combination.
struct CellPool {
    types: Vec<([Option<usize>; 3], Vec<usize>)>,
}

impl CellPool {
    fn new(members: &[usize], feats: &[[Option<usize>; 3]]) -> Self {
        let mut map: BTreeMap<[Option<usize>; 3], Vec<usize>> = BTreeMap::new();
        for &i in members {
            map.entry(feats[i]).or_default().push(i);
        }
        Self { types: map.into_iter().collect() }
    }

    fn size(&self) -> usize {
        self.types.iter().map(|t| t.1.len()).sum()
    }
}

struct Tally {
    arity: [usize; 3],
    counts: [Vec<i64>; 3],
    n: i64,
}

impl Tally {
    fn add(&mut self, f: &[Option<usize>; 3], sign: i64) {
        self.n += sign;
        for (k, v) in f.iter().enumerate() {
            if let Some(v) = v {
                self.counts[k][*v] += sign;
            }
        }
    }

    /// Sum over balanced values of `(K·count − N)²`, scaled by `1/K²`.
    fn cost(&self) -> f64 {
        let mut total = 0.0;
        for k in 0..3 {
            let a = self.arity[k] as i64;
            if a == 0 {
                continue;
            }
            for &c in &self.counts[k] {
                let d = (a * c - self.n) as f64 / a as f64;
                total += d * d;
            }
        }
        total
    }

    /// Largest `|K·count − N|` over balanced values.
    fn max_gap(&self) -> i64 {
        (0..3)
            .flat_map(|k| {
                let a = self.arity[k] as i64;
                self.counts[k].iter().map(move |&c| (a * c - self.n).abs())
            })
            .max()
            .unwrap_or(0)
    }

    fn within_one(&self) -> bool {
        (0..3).all(|k| {
            let a = self.arity[k] as i64;
            a == 0 || self.counts[k].iter().all(|&c| (a * c - self.n).abs() <= a)
        })
    }
}

/// Picks the lowest-cost option, breaking exact ties uniformly at random.
fn pick_min<T: Copy>(options: impl Iterator<Item = (f64, T)>, rng: &mut impl Rng) -> Option<T> {
    let mut best: Vec<T> = Vec::new();
    let mut best_cost = f64::INFINITY;
    for (c, t) in options {
        if c < best_cost - 1e-9 {
            best_cost = c;
            best.clear();
            best.push(t);
        } else if (c - best_cost).abs() <= 1e-9 {
            best.push(t);
        }
    }
    if best.is_empty() {
        None
    } else {
        Some(best[rng.random_range(0..best.len())])
    }
}

/// Returns how many copies of each record the balanced split holds (every
/// count is at least 1).
pub fn oversample(strata: &[Stratum], targets: &BalanceTargets, seed: u64) -> Result<Vec<usize>, BalanceError> {
    if strata.is_empty() {
        return Err(BalanceError::Empty);
    }
    for (i, s) in strata.iter().enumerate() {
        targets.check(i, s)?;
    }
    let arity = targets.arity();
    let feats: Vec<[Option<usize>; 3]> = strata.iter().map(|s| targets.features(s)).collect();
    for (k, list) in [
        targets.templates.iter().map(|v| FieldValue::Template(*v)).collect::<Vec<_>>(),
        targets.chunk_sizes.iter().map(|v| FieldValue::ChunkSize(*v)).collect(),
        targets.chunk_counts.iter().map(|v| FieldValue::ChunksPerPrompt(*v)).collect(),
    ]
    .iter()
    .enumerate()
    {
        for (v, fv) in list.iter().enumerate() {
            if !feats.iter().any(|f| f[k] == Some(v)) {
                return Err(BalanceError::MissingValue(fv.to_string()));
            }
        }
    }

    let cell_of = |s: &Stratum| -> Cell { (if targets.answerable.len() == 2 { s.answerable } else { None }, s.label) };
    let groups: Vec<(Cell, Cell)> = if targets.answerable.len() == 2 {
        vec![((Some(true), 1), (Some(false), 0)), ((Some(true), 0), (Some(false), 1))]
    } else {
        vec![((None, 1), (None, 0))]
    };
    let mut members: BTreeMap<Cell, Vec<usize>> = BTreeMap::new();
    for (i, s) in strata.iter().enumerate() {
        members.entry(cell_of(s)).or_default().push(i);
    }
    let mut pools: BTreeMap<Cell, CellPool> = BTreeMap::new();
    for (a, b) in &groups {
        for cell in [a, b] {
            let m = members.get(cell).filter(|m| !m.is_empty());
            let m = m.ok_or(BalanceError::EmptyCell { answerable: cell.0, label: cell.1 })?;
            pools.insert(*cell, CellPool::new(m, &feats));
        }
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut multiplicity = vec![1usize; strata.len()];
    let mut tally = Tally { arity, counts: arity.map(|a| vec![0; a]), n: 0 };
    for f in &feats {
        tally.add(f, 1);
    }
    let mut sizes: BTreeMap<Cell, usize> = pools.iter().map(|(c, p)| (*c, p.size())).collect();
    let take = |cell: &Cell, t: usize, rng: &mut ChaCha8Rng, tally: &mut Tally, mult: &mut [usize], sizes: &mut BTreeMap<Cell, usize>| {
        let (f, ids) = &pools[cell].types[t];
        let i = ids[rng.random_range(0..ids.len())];
        mult[i] += 1;
        tally.add(f, 1);
        *sizes.get_mut(cell).expect("known cell") += 1;
    };

    let cap = 100_000usize.max(strata.len() * 50);
    let mut added = 0usize;
    for (a, b) in &groups {
        loop {
            let (na, nb) = (sizes[a], sizes[b]);
            if na == nb {
                break;
            }
            let small = if na < nb { a } else { b };
            let pool = &pools[small];
            let choice = pick_min(
                pool.types.iter().enumerate().map(|(t, (f, _))| {
                    tally.add(f, 1);
                    let c = tally.cost();
                    tally.add(f, -1);
                    (c, t)
                }),
                &mut rng,
            )
            .expect("cell is non-empty");
            take(small, choice, &mut rng, &mut tally, &mut multiplicity, &mut sizes);
            added += 1;
        }
    }

    let mut best_gap = i64::MAX;
    let mut since_best = 0usize;
    while !tally.within_one() {
        let gap = tally.max_gap();
        if gap < best_gap {
            best_gap = gap;
            since_best = 0;
        } else {
            since_best += 1;
        }
        if added >= cap || since_best > STALL_LIMIT {
            return Err(BalanceError::NotReached(added));
        }
        let mut options = Vec::new();
        for (g, (a, b)) in groups.iter().enumerate() {
            for (ta, (fa, _)) in pools[a].types.iter().enumerate() {
                tally.add(fa, 1);
                for (tb, (fb, _)) in pools[b].types.iter().enumerate() {
                    tally.add(fb, 1);
                    options.push((tally.cost(), (g, ta, tb)));
                    tally.add(fb, -1);
                }
                tally.add(fa, -1);
            }
        }
        let (g, ta, tb) = pick_min(options.into_iter(), &mut rng).expect("groups are non-empty");
        let (a, b) = groups[g];
        take(&a, ta, &mut rng, &mut tally, &mut multiplicity, &mut sizes);
        take(&b, tb, &mut rng, &mut tally, &mut multiplicity, &mut sizes);
        added += 2;
    }
    Ok(multiplicity)
}

/// Expands multiplicities into `(record, duplicate)` pairs in canonical order:
/// by record key, then duplicate index.
pub fn expand<K: Ord>(keys: &[K], multiplicity: &[usize]) -> Vec<(usize, usize)> {
    let mut order: Vec<usize> = (0..keys.len()).collect();
    order.sort_by(|&a, &b| keys[a].cmp(&keys[b]));
    order.into_iter().flat_map(|i| (0..multiplicity[i]).map(move |d| (i, d))).collect()
}
