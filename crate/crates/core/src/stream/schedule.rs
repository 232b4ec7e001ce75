//! Task-free stream construction.
//!
//! Every class gets an owning task. Disjoint classes stream only in their
//! task. Shared classes stream mostly in their task, but a `minor_portion`
//! of their samples is dealt round-robin to every other task. Task order is
//! fixed and samples are shuffled within each task.

use std::fmt;
use std::io::Write;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::dataset::Dataset;
use crate::error::{Error, Result};
use crate::math::rng::stream;
use crate::math::RngState;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Setup {
    Disjoint,
    Blurry,
    IBlurry,
}

impl FromStr for Setup {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "disjoint" => Ok(Setup::Disjoint),
            "blurry" => Ok(Setup::Blurry),
            "iblurry" | "i-blurry" => Ok(Setup::IBlurry),
            other => Err(Error::Config(format!("unknown stream setup '{other}'"))),
        }
    }
}

impl fmt::Display for Setup {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Setup::Disjoint => "disjoint",
            Setup::Blurry => "blurry",
            Setup::IBlurry => "iblurry",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StreamConfig {
    pub setup: Setup,
    pub tasks: usize,
    /// Fraction of classes that are disjoint across tasks (`N_b`).
    pub disjoint_portion: f64,
    /// Fraction of each shared class's samples streamed outside its task (`M_b`).
    pub minor_portion: f64,
    pub seed: u64,
}

impl StreamConfig {
    pub fn disjoint(tasks: usize, seed: u64) -> Self {
        Self {
            setup: Setup::Disjoint,
            tasks,
            disjoint_portion: 1.0,
            minor_portion: 0.0,
            seed,
        }
    }

    pub fn blurry(tasks: usize, minor_portion: f64, seed: u64) -> Self {
        Self {
            setup: Setup::Blurry,
            tasks,
            disjoint_portion: 0.0,
            minor_portion,
            seed,
        }
    }

    pub fn iblurry(tasks: usize, disjoint_portion: f64, minor_portion: f64, seed: u64) -> Self {
        Self {
            setup: Setup::IBlurry,
            tasks,
            disjoint_portion,
            minor_portion,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let unit = 0.0..=1.0;
        if !unit.contains(&self.disjoint_portion) || !unit.contains(&self.minor_portion) {
            return Err(Error::Config("stream portions must lie in [0, 1]".into()));
        }
        if self.tasks == 0 {
            return Err(Error::Config("stream.tasks must be >= 1".into()));
        }
        match self.setup {
            Setup::Disjoint if self.disjoint_portion != 1.0 || self.minor_portion != 0.0 => Err(Error::Config(
                "disjoint streams require n_b = 1 and m_b = 0".into(),
            )),
            Setup::Blurry if self.disjoint_portion != 0.0 => {
                Err(Error::Config("blurry streams require n_b = 0".into()))
            }
            _ => Ok(()),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StreamSchedule {
    /// `(sample index, task id)` in arrival order.
    pub entries: Vec<(usize, usize)>,
    /// Arrival position at which each task starts.
    pub task_starts: Vec<usize>,
    /// Classes owned by each task, used to group evaluation accuracy.
    pub task_classes: Vec<Vec<usize>>,
    /// Classes that stream in exactly one task.
    pub disjoint_classes: Vec<usize>,
}

impl StreamSchedule {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn num_tasks(&self) -> usize {
        self.task_classes.len()
    }

    /// Owning task of each class (`None` for classes absent from the stream).
    pub fn class_to_task(&self, num_classes: usize) -> Vec<Option<usize>> {
        let mut map = vec![None; num_classes];
        for (k, cs) in self.task_classes.iter().enumerate() {
            for &c in cs {
                map[c] = Some(k);
            }
        }
        map
    }

    /// Whether arrival position `pos` is the last of its task.
    pub fn is_task_end(&self, pos: usize) -> bool {
        pos + 1 == self.entries.len() || self.task_starts.contains(&(pos + 1))
    }

    /// CSV with header `iteration,sample_index,task_id`.
    pub fn write_csv(&self, out: &mut impl Write) -> std::io::Result<()> {
        writeln!(out, "iteration,sample_index,task_id")?;
        for (i, (s, k)) in self.entries.iter().enumerate() {
            writeln!(out, "{i},{s},{k}")?;
        }
        Ok(())
    }

    pub fn export_csv(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        self.write_csv(&mut f).map_err(|e| Error::io(path, e))
    }
}

fn split_groups(classes: &[usize], tasks: usize, what: &str) -> Result<Vec<Vec<usize>>> {
    if classes.len() % tasks != 0 {
        return Err(Error::Config(format!(
            "{} {what} classes cannot be split evenly over {tasks} tasks",
            classes.len()
        )));
    }
    let g = classes.len() / tasks;
    Ok((0..tasks).map(|k| classes[k * g..(k + 1) * g].to_vec()).collect())
}

pub fn build_schedule(ds: &Dataset, cfg: &StreamConfig) -> Result<StreamSchedule> {
    cfg.validate()?;
    let c = ds.num_classes;
    let k = cfg.tasks;
    if k > c {
        return Err(Error::Config(format!("{k} tasks for only {c} classes")));
    }
    let root = RngState::new(cfg.seed);

    let (disjoint, shared): (Vec<usize>, Vec<usize>) = match cfg.setup {
        Setup::Disjoint => ((0..c).collect(), Vec::new()),
        Setup::Blurry => (Vec::new(), (0..c).collect()),
        Setup::IBlurry => {
            let n_disjoint = (cfg.disjoint_portion * c as f64).round() as usize;
            let mut perm = root.substream(stream::SCHEDULE, 0).permutation(c);
            let mut d = perm.split_off(c - n_disjoint);
            d.sort_unstable();
            perm.sort_unstable();
            (d, perm)
        }
    };
    let disjoint_groups = split_groups(&disjoint, k, "disjoint")?;
    let shared_groups = split_groups(&shared, k, "shared")?;

    let mut per_task: Vec<Vec<usize>> = vec![Vec::new(); k];
    let mut task_classes: Vec<Vec<usize>> = vec![Vec::new(); k];
    for task in 0..k {
        for &cls in disjoint_groups[task].iter() {
            let mut idx = ds.class_indices(cls);
            root.substream(stream::SCHEDULE, 1 + cls as u64).shuffle(&mut idx);
            per_task[task].extend(idx);
            task_classes[task].push(cls);
        }
        for &cls in shared_groups[task].iter() {
            let mut idx = ds.class_indices(cls);
            root.substream(stream::SCHEDULE, 1 + cls as u64).shuffle(&mut idx);
            let n_minor = if k > 1 {
                (cfg.minor_portion * idx.len() as f64).round() as usize
            } else {
                0
            };
            let others: Vec<usize> = (0..k).filter(|&o| o != task).collect();
            for (j, &s) in idx[..n_minor].iter().enumerate() {
                per_task[others[j % others.len()]].push(s);
            }
            per_task[task].extend_from_slice(&idx[n_minor..]);
            task_classes[task].push(cls);
        }
        task_classes[task].sort_unstable();
    }

    let mut entries = Vec::with_capacity(ds.len());
    let mut task_starts = Vec::with_capacity(k);
    for (task, mut idx) in per_task.into_iter().enumerate() {
        root.substream(stream::SCHEDULE, 1_000_000 + task as u64).shuffle(&mut idx);
        task_starts.push(entries.len());
        entries.extend(idx.into_iter().map(|s| (s, task)));
    }
    Ok(StreamSchedule {
        entries,
        task_starts,
        task_classes,
        disjoint_classes: disjoint,
    })
}
