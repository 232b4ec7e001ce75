//! The online training loop shared by DPCL and the replay baselines.

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};

use super::config::{DataSource, ExperimentConfig, MemoryPolicy};
use super::eval::anytime_eval;
use super::metrics::{MetricsLog, MetricsRow};
use crate::bsc::{predict_ensemble, BscState};
use crate::error::{Error, Result};
use crate::math::rng::stream;
use crate::math::{RngState, Tensor};
use crate::network::{one_hot, AdamState, ForwardPlan, MlpModel};
use crate::pfi::{pfi_batch, update_class_loss, ClassLossTracker};
use crate::pima::{
    adapt_lr, draw_training_batch, memory_insert, mutual_information_rows, reservoir_insert, update_history,
    LrState, ReplayMemory,
};
use crate::stream::{
    build_schedule, load_csv_dataset, load_csv_dataset_with, make_synthetic_split, read_binary_dataset, Dataset,
    Sample, Split, Standardizer, StreamSchedule,
};

/// Everything that evolves during training.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainState {
    pub model: MlpModel,
    pub adam: AdamState,
    pub bsc: BscState,
    pub tracker: ClassLossTracker,
    pub lr: LrState,
    pub memory: ReplayMemory,
    /// Training steps taken so far.
    pub step: u64,
}

pub struct RunOutput {
    pub log: MetricsLog,
    pub state: TrainState,
    pub schedule: StreamSchedule,
    pub standardizer: Option<Standardizer>,
}

/// Loads or generates the train and test splits described by `cfg`.
pub fn load_data(cfg: &ExperimentConfig) -> Result<(Dataset, Dataset)> {
    match &cfg.data {
        DataSource::Synthetic {
            classes,
            dims,
            per_class,
            test_per_class,
            spread,
        } => make_synthetic_split(*classes, *dims, *per_class, *test_per_class, *spread, cfg.seed),
        DataSource::Csv {
            train,
            test,
            has_header,
            num_classes,
        } => {
            let tr = load_csv_dataset(train, *has_header, *num_classes)?;
            let st = tr.standardizer.clone().expect("csv loader fits a standardizer");
            let te = load_csv_dataset_with(test, *has_header, Some(tr.num_classes), &st)?;
            Ok((tr, te))
        }
        DataSource::Binary { train, test } => {
            let mut tr = read_binary_dataset(train, Split::Train)?;
            let mut te = read_binary_dataset(test, Split::Test)?;
            if te.dim() != tr.dim() {
                return Err(Error::Data(format!(
                    "train has {} features, test has {}",
                    tr.dim(),
                    te.dim()
                )));
            }
            let st = Standardizer::fit(&tr.inputs);
            st.apply(&mut tr.inputs);
            st.apply(&mut te.inputs);
            te.num_classes = te.num_classes.max(tr.num_classes);
            tr.num_classes = te.num_classes;
            tr.standardizer = Some(st.clone());
            te.standardizer = Some(st);
            Ok((tr, te))
        }
    }
}

pub fn run_experiment(cfg: &ExperimentConfig) -> Result<RunOutput> {
    cfg.validate()?;
    let (train, test) = load_data(cfg)?;
    run_on(cfg, &train, &test)
}

fn numeric(t: u64, what: impl Into<String>) -> Error {
    Error::Numeric {
        iteration: t,
        what: what.into(),
    }
}

/// Per-sample mutual information of the ensemble on a batch of samples.
fn batch_mi<'a>(
    state: &TrainState,
    samples: impl Iterator<Item = &'a Sample>,
    rng: &mut RngState,
) -> Result<Vec<f64>> {
    let rows: Vec<&[f64]> = samples.map(|s| s.x.as_slice()).collect();
    if rows.is_empty() {
        return Ok(Vec::new());
    }
    let x = Tensor::from_rows(&rows)?;
    let f = state.model.encoder.forward(&x)?;
    let (mean, branches) = predict_ensemble(&f, &state.model.heads, &state.bsc, rng)?;
    mutual_information_rows(&mean, &branches)
}

/// Trains on the stream defined by `cfg` over `train`, evaluating on `test`.
pub fn run_on(cfg: &ExperimentConfig, train: &Dataset, test: &Dataset) -> Result<RunOutput> {
    cfg.validate()?;
    if train.is_empty() || test.is_empty() {
        return Err(Error::Data("empty dataset".into()));
    }
    if test.dim() != train.dim() {
        return Err(Error::Data("train and test feature widths differ".into()));
    }
    let r = cfg.resolve();
    let track = r.tracks_history();
    let schedule = build_schedule(train, &cfg.stream)?;
    let classes = train.num_classes.max(test.num_classes);
    let class_to_task = schedule.class_to_task(classes);
    let num_tasks = schedule.num_tasks();

    let root = RngState::new(cfg.seed);
    let model = MlpModel::new(train.dim(), &cfg.hidden, cfg.feature_dim, classes, r.num_heads, &root)?;
    let mut st = TrainState {
        model,
        adam: AdamState::new(cfg.lr),
        bsc: BscState::new(r.bsc.clone()),
        tracker: ClassLossTracker::new(cfg.pfi.ema_coeff),
        lr: LrState::new(cfg.lr, cfg.pima.omega, r.lr_mode)?.with_bound(cfg.pima.lr_bound),
        memory: ReplayMemory::new(if r.memory_enabled { cfg.memory_capacity } else { 0 }),
        step: 0,
    };
    let mut log = MetricsLog::new(num_tasks);
    let mut buffer: VecDeque<Sample> = VecDeque::with_capacity(cfg.batch_size / 2);
    let mut credit = 0.0;

    for (pos, &(idx, task)) in schedule.entries.iter().enumerate() {
        let sample = train.sample(idx);
        let next = st.step + 1;
        if st.tracker.register(sample.label, next) {
            st.bsc.register(sample.label, next, cfg.feature_dim)?;
        }
        let mi_new = if track {
            batch_mi(&st, std::iter::once(&sample), &mut root.substream(stream::MI_STREAM, pos as u64))?[0]
        } else {
            0.0
        };
        if buffer.len() == cfg.batch_size / 2 {
            buffer.pop_front();
        }
        buffer.push_back(sample.clone());

        credit += cfg.updates_per_sample;
        while credit >= 1.0 - 1e-9 {
            credit -= 1.0;
            st.step += 1;
            train_step(cfg, &r, &mut st, &buffer, &root)?;
        }

        if r.memory_enabled {
            match r.memory_policy {
                MemoryPolicy::MutualInformation => {
                    memory_insert(&mut st.memory, sample, mi_new, st.step)?;
                }
                MemoryPolicy::Reservoir => {
                    reservoir_insert(
                        &mut st.memory,
                        sample,
                        st.step,
                        &mut root.substream(stream::MEMORY, pos as u64),
                    );
                }
            }
        }

        let task_end = schedule.is_task_end(pos);
        if (pos + 1) % cfg.eval_every == 0 || task_end {
            let acc = anytime_eval(
                &st.model,
                &st.bsc,
                test,
                &class_to_task,
                task,
                num_tasks,
                &mut root.substream(stream::EVAL, pos as u64),
            )?;
            let seen: Vec<f64> = acc.iter().flatten().copied().collect();
            let avg = if seen.is_empty() {
                0.0
            } else {
                seen.iter().sum::<f64>() / seen.len() as f64
            };
            if task_end {
                log.acc_matrix.push(acc.iter().take(task + 1).map(|a| a.unwrap_or(0.0)).collect());
            }
            log.rows.push(MetricsRow {
                iteration: pos + 1,
                task_id: task,
                acc,
                avg_acc: avg,
                lr: st.lr.current(),
                mem_size: st.memory.len(),
                mean_history: st.memory.mean_history(),
            });
        }
    }
    log.train_steps = st.step;
    Ok(RunOutput {
        log,
        state: st,
        standardizer: train.standardizer.clone(),
        schedule,
    })
}

fn train_step(
    cfg: &ExperimentConfig,
    r: &super::config::Resolved,
    st: &mut TrainState,
    buffer: &VecDeque<Sample>,
    root: &RngState,
) -> Result<()> {
    let t = st.step;
    let classes = st.model.num_classes();
    let batch = draw_training_batch(
        &st.memory,
        buffer,
        cfg.batch_size,
        &mut root.substream(stream::BATCH, t),
    )?;
    let x = Tensor::from_rows(&batch.iter().map(|b| b.sample.x.as_slice()).collect::<Vec<_>>())?;
    let labels: Vec<usize> = batch.iter().map(|b| b.sample.label).collect();

    // memory samples are scored with the weights they are trained from
    let trained_mi: Vec<(u64, f64)> = if r.tracks_history() {
        let ids: Vec<u64> = batch.iter().filter_map(|b| b.memory_id).collect();
        let mi = batch_mi(
            st,
            batch.iter().filter(|b| b.memory_id.is_some()).map(|b| &b.sample),
            &mut root.substream(stream::MI_MEMORY, t),
        )?;
        ids.into_iter().zip(mi).collect()
    } else {
        Vec::new()
    };
    let (trace, soft, dominant) = if r.use_pfi {
        let pb = pfi_batch(
            &st.model,
            &x,
            &labels,
            &cfg.pfi,
            &st.tracker,
            &mut root.substream(stream::PFI, t),
            t,
        )?;
        let dominant = pb.dominant_losses(classes);
        (pb.trace, pb.mixed_labels, dominant)
    } else {
        let trace = st.model.forward_trace(&x, &ForwardPlan::plain(&st.model))?;
        let soft = Tensor::from_rows(&labels.iter().map(|&y| one_hot(y, classes)).collect::<Vec<_>>())?;
        (trace, soft, Vec::new())
    };
    let loss = trace.loss(&soft)?;
    if !loss.is_finite() {
        return Err(numeric(t, format!("training loss is {loss}")));
    }
    let grads = st.model.backward(&trace, &soft)?;
    st.adam.lr = st.lr.current();
    st.adam.step(st.model.parameters_mut(), grads.tensors())?;
    if st.model.parameters().iter().any(|p| !p.all_finite()) {
        return Err(numeric(t, "parameters diverged"));
    }
    for (y, l) in dominant {
        update_class_loss(&mut st.tracker, y, l)?;
    }
    let snapshot = st.bsc.on_iteration(&st.model.heads, t)?;

    if r.tracks_history() {
        for (id, v) in trained_mi {
            update_history(&mut st.memory, id, v, cfg.pima.gamma)?;
        }
        adapt_lr(&mut st.lr, &st.memory, snapshot);
    }
    Ok(())
}
