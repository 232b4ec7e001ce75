//! Memory management and learning-rate adaptation driven by the ensemble's
//! mutual information.
//!
//! Each replay sample carries an accumulated mutual-information history `H`.
//! When the memory is full, a new stream sample replaces the lowest-`H`
//! member of the most populous class, unless its own score is no larger.

use std::collections::{BTreeMap, VecDeque};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::math::prob::entropy_slice;
use crate::math::{RngState, Tensor};
use crate::stream::Sample;

/// Allowed gap between `p_bar` and the mean of the branch predictions.
pub const MEAN_CONSISTENCY_TOL: f64 = 1e-6;

/// `H(p_bar) - mean_n H(p_n)` for one input.
pub fn mutual_information(p_bar: &Tensor, branch_ps: &[Tensor]) -> Result<f64> {
    let rows: Vec<&[f64]> = branch_ps.iter().map(|t| t.data()).collect();
    mutual_information_slices(p_bar.data(), &rows)
}

pub fn mutual_information_slices(p_bar: &[f64], branch_ps: &[&[f64]]) -> Result<f64> {
    if branch_ps.is_empty() {
        return Err(Error::Contract("no branch predictions".into()));
    }
    let classes = p_bar.len();
    if branch_ps.iter().any(|p| p.len() != classes) {
        return Err(Error::Shape("branch predictions differ in length".into()));
    }
    let n = branch_ps.len() as f64;
    for c in 0..classes {
        let mean = branch_ps.iter().map(|p| p[c]).sum::<f64>() / n;
        if (mean - p_bar[c]).abs() > MEAN_CONSISTENCY_TOL {
            return Err(Error::Contract(format!(
                "p_bar[{c}] = {} but branch mean is {mean}",
                p_bar[c]
            )));
        }
    }
    let branch_entropy = branch_ps.iter().map(|p| entropy_slice(p)).sum::<f64>() / n;
    Ok(entropy_slice(p_bar) - branch_entropy)
}

/// Row-wise mutual information for batched ensemble outputs (`B x C`).
pub fn mutual_information_rows(p_bar: &Tensor, branch_ps: &[Tensor]) -> Result<Vec<f64>> {
    (0..p_bar.rows())
        .map(|i| {
            let rows: Vec<&[f64]> = branch_ps.iter().map(|t| t.row(i)).collect();
            mutual_information_slices(p_bar.row(i), &rows)
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MemoryEntry {
    /// Unique and increasing in insertion order.
    pub id: u64,
    pub sample: Sample,
    pub history: f64,
    pub inserted_at: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub enum InsertOutcome {
    Appended,
    Replaced(MemoryEntry),
    Skipped,
}

/// Capacity-bounded replay memory with per-sample histories.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReplayMemory {
    capacity: usize,
    entries: Vec<MemoryEntry>,
    class_counts: BTreeMap<usize, usize>,
    next_id: u64,
    /// Stream samples offered so far (reservoir bookkeeping).
    offered: u64,
}

impl ReplayMemory {
    pub fn new(capacity: usize) -> Self {
        Self {
            capacity,
            entries: Vec::with_capacity(capacity),
            class_counts: BTreeMap::new(),
            next_id: 0,
            offered: 0,
        }
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> &[MemoryEntry] {
        &self.entries
    }

    pub fn class_counts(&self) -> &BTreeMap<usize, usize> {
        &self.class_counts
    }

    pub fn get(&self, id: u64) -> Option<&MemoryEntry> {
        self.position(id).map(|i| &self.entries[i])
    }

    fn position(&self, id: u64) -> Option<usize> {
        // ids increase with position except where replacements occurred
        self.entries.iter().position(|e| e.id == id)
    }

    /// Arithmetic mean of the histories; zero for an empty memory.
    pub fn mean_history(&self) -> f64 {
        if self.entries.is_empty() {
            0.0
        } else {
            self.entries.iter().map(|e| e.history).sum::<f64>() / self.entries.len() as f64
        }
    }

    /// Class with the most members, ties to the smallest class id.
    pub fn most_populous_class(&self) -> Option<usize> {
        let mut best: Option<(usize, usize)> = None;
        for (&c, &n) in &self.class_counts {
            if n > 0 && best.map_or(true, |(_, bn)| n > bn) {
                best = Some((c, n));
            }
        }
        best.map(|(c, _)| c)
    }

    fn make_entry(&mut self, sample: Sample, history: f64, t: u64) -> MemoryEntry {
        let id = self.next_id;
        self.next_id += 1;
        MemoryEntry {
            id,
            sample,
            history,
            inserted_at: t,
        }
    }

    fn push(&mut self, entry: MemoryEntry) {
        *self.class_counts.entry(entry.sample.label).or_insert(0) += 1;
        self.entries.push(entry);
    }

    fn replace_at(&mut self, pos: usize, entry: MemoryEntry) -> MemoryEntry {
        let victim = std::mem::replace(&mut self.entries[pos], entry);
        let count = self.class_counts.get_mut(&victim.sample.label).expect("counted");
        *count -= 1;
        if *count == 0 {
            self.class_counts.remove(&victim.sample.label);
        }
        *self.class_counts.entry(self.entries[pos].sample.label).or_insert(0) += 1;
        victim
    }
}

/// Mutual-information-driven insertion with class balancing.
pub fn memory_insert(mem: &mut ReplayMemory, sample: Sample, mi: f64, t: u64) -> Result<InsertOutcome> {
    if !mi.is_finite() {
        return Err(Error::Parameter(format!("mutual information {mi} is not finite")));
    }
    mem.offered += 1;
    if mem.capacity == 0 {
        return Ok(InsertOutcome::Skipped);
    }
    if mem.len() < mem.capacity {
        let e = mem.make_entry(sample, mi, t);
        mem.push(e);
        return Ok(InsertOutcome::Appended);
    }
    let target = mem.most_populous_class().expect("full memory has a class");
    let mut victim: Option<usize> = None;
    for (i, e) in mem.entries.iter().enumerate() {
        if e.sample.label != target {
            continue;
        }
        let better = match victim {
            None => true,
            Some(v) => {
                let cur = &mem.entries[v];
                e.history < cur.history
                    || (e.history == cur.history
                        && (e.inserted_at, e.id) < (cur.inserted_at, cur.id))
            }
        };
        if better {
            victim = Some(i);
        }
    }
    let pos = victim.expect("target class has members");
    if mi <= mem.entries[pos].history {
        return Ok(InsertOutcome::Skipped);
    }
    let e = mem.make_entry(sample, mi, t);
    Ok(InsertOutcome::Replaced(mem.replace_at(pos, e)))
}

/// Classic reservoir sampling, used by the replay baseline.
pub fn reservoir_insert(mem: &mut ReplayMemory, sample: Sample, t: u64, rng: &mut RngState) -> InsertOutcome {
    mem.offered += 1;
    if mem.capacity == 0 {
        return InsertOutcome::Skipped;
    }
    if mem.len() < mem.capacity {
        let e = mem.make_entry(sample, 0.0, t);
        mem.push(e);
        return InsertOutcome::Appended;
    }
    let j = rng.below(mem.offered as usize);
    if j < mem.capacity {
        let e = mem.make_entry(sample, 0.0, t);
        InsertOutcome::Replaced(mem.replace_at(j, e))
    } else {
        InsertOutcome::Skipped
    }
}

/// `H <- (1 - gamma) H + gamma I` for one trained memory sample.
pub fn update_history(mem: &mut ReplayMemory, id: u64, mi: f64, gamma: f64) -> Result<()> {
    if !(gamma > 0.0 && gamma <= 1.0) {
        return Err(Error::Parameter(format!("gamma {gamma} outside (0, 1]")));
    }
    if !mi.is_finite() {
        return Err(Error::Parameter(format!("mutual information {mi} is not finite")));
    }
    let pos = mem
        .position(id)
        .ok_or_else(|| Error::Index(format!("memory sample {id} not found")))?;
    let e = &mut mem.entries[pos];
    e.history = (1.0 - gamma) * e.history + gamma * mi;
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum LrMode {
    /// Multiply by `omega > 1` when the mean history rose, divide otherwise.
    MainText,
    /// Divide by `omega` when the mean history did not fall, multiply otherwise.
    Appendix,
    Off,
}

impl std::str::FromStr for LrMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "main_text" => Ok(LrMode::MainText),
            "appendix" => Ok(LrMode::Appendix),
            "off" => Ok(LrMode::Off),
            other => Err(Error::Config(format!("unknown lr mode '{other}'"))),
        }
    }
}

impl std::fmt::Display for LrMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            LrMode::MainText => "main_text",
            LrMode::Appendix => "appendix",
            LrMode::Off => "off",
        })
    }
}

/// Learning rate kept as `base * omega^exponent`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LrState {
    base: f64,
    omega: f64,
    exponent: i64,
    prev_mean: f64,
    mode: LrMode,
    /// Largest allowed `|exponent|`; `None` leaves the walk unbounded.
    #[serde(default)]
    bound: Option<u32>,
}

impl LrState {
    pub fn new(base: f64, omega: f64, mode: LrMode) -> Result<Self> {
        if !(base > 0.0 && base.is_finite()) {
            return Err(Error::Config(format!("learning rate {base} must be > 0")));
        }
        if !(omega > 1.0 && omega.is_finite()) {
            return Err(Error::Config(format!("pima.omega {omega} must be > 1")));
        }
        Ok(Self {
            base,
            omega,
            exponent: 0,
            prev_mean: 0.0,
            mode,
            bound: None,
        })
    }

    /// Keeps the rate within `base * omega^[-bound, bound]`.
    pub fn with_bound(mut self, bound: Option<u32>) -> Self {
        self.bound = bound;
        self
    }

    pub fn bound(&self) -> Option<u32> {
        self.bound
    }

    pub fn current(&self) -> f64 {
        self.base * self.omega.powi(self.exponent as i32)
    }

    pub fn exponent(&self) -> i64 {
        self.exponent
    }

    pub fn mode(&self) -> LrMode {
        self.mode
    }

    /// Caches the memory's current mean history as the "previous" value.
    pub fn observe_baseline(&mut self, mem: &ReplayMemory) {
        self.prev_mean = mem.mean_history();
    }
}

/// Rescales the learning rate if any running mean was snapshot-updated this
/// iteration. Returns whether the rate changed.
pub fn adapt_lr(lr: &mut LrState, mem: &ReplayMemory, any_mean_updated: bool) -> bool {
    let mean = mem.mean_history();
    let changed = any_mean_updated && lr.mode != LrMode::Off;
    if changed {
        let rose = match lr.mode {
            LrMode::MainText => mean > lr.prev_mean,
            _ => mean >= lr.prev_mean,
        };
        let up = match lr.mode {
            LrMode::MainText => rose,
            _ => !rose,
        };
        let next = lr.exponent + if up { 1 } else { -1 };
        lr.exponent = match lr.bound {
            Some(b) => next.clamp(-(b as i64), b as i64),
            None => next,
        };
    }
    lr.prev_mean = mean;
    changed
}

/// One element of a training batch.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchItem {
    pub sample: Sample,
    pub memory_id: Option<u64>,
}

/// Half stream buffer (newest first), half memory drawn without replacement;
/// whichever side is short is padded from the other.
pub fn draw_training_batch(
    mem: &ReplayMemory,
    stream: &VecDeque<Sample>,
    batch_size: usize,
    rng: &mut RngState,
) -> Result<Vec<BatchItem>> {
    if batch_size == 0 || batch_size % 2 != 0 {
        return Err(Error::Parameter(format!("batch size {batch_size} must be even and positive")));
    }
    if mem.is_empty() && stream.is_empty() {
        return Err(Error::Contract("both stream buffer and memory are empty".into()));
    }
    let mut from_stream = stream.len().min(batch_size / 2);
    let from_memory = mem.len().min(batch_size - from_stream);
    from_stream = stream.len().min(batch_size - from_memory);

    let mut items: Vec<BatchItem> = stream
        .iter()
        .rev()
        .take(from_stream)
        .map(|s| BatchItem {
            sample: s.clone(),
            memory_id: None,
        })
        .collect();
    let mut idx: Vec<usize> = (0..mem.len()).collect();
    for k in 0..from_memory {
        let j = k + rng.below(idx.len() - k);
        idx.swap(k, j);
        let e = &mem.entries[idx[k]];
        items.push(BatchItem {
            sample: e.sample.clone(),
            memory_id: Some(e.id),
        });
    }
    Ok(items)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PimaConfig {
    pub gamma: f64,
    pub omega: f64,
    pub lr_mode: LrMode,
    /// Largest number of net `omega` steps away from the base rate.
    pub lr_bound: Option<u32>,
}

impl Default for PimaConfig {
    fn default() -> Self {
        Self {
            gamma: 0.3,
            omega: 1.05,
            lr_mode: LrMode::MainText,
            lr_bound: Some(20),
        }
    }
}

impl PimaConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.gamma > 0.0 && self.gamma < 1.0) {
            return Err(Error::Config("pima.gamma must lie in (0, 1)".into()));
        }
        if !(self.omega > 1.0) {
            return Err(Error::Config("pima.omega must be > 1".into()));
        }
        Ok(())
    }
}
