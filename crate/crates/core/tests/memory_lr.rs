use std::collections::VecDeque;

use dpcl::math::RngState;
use dpcl::pima::{
    adapt_lr, draw_training_batch, memory_insert, reservoir_insert, update_history, InsertOutcome, LrMode, LrState,
    ReplayMemory,
};
use dpcl::stream::Sample;
use proptest::prelude::*;

fn sample(label: usize, index: usize) -> Sample {
    Sample {
        x: vec![index as f64, label as f64],
        label,
        index,
    }
}

#[derive(Clone, Debug)]
enum Op {
    Insert { label: usize, mi: u8 },
    Reservoir { label: usize },
    History { pick: usize, mi: u8 },
}

fn op() -> impl Strategy<Value = Op> {
    prop_oneof![
        (0usize..5, 0u8..6).prop_map(|(label, mi)| Op::Insert { label, mi }),
        (0usize..5).prop_map(|label| Op::Reservoir { label }),
        (0usize..64, 0u8..6).prop_map(|(pick, mi)| Op::History { pick, mi }),
    ]
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(512))]

    #[test]
    fn memory_invariants(cap in 0usize..7, ops in prop::collection::vec(op(), 0..60)) {
        let mut mem = ReplayMemory::new(cap);
        let mut rng = RngState::new(cap as u64);
        for (i, op) in ops.into_iter().enumerate() {
            let before = mem.clone();
            let max_before = before.class_counts().values().copied().max().unwrap_or(0);
            match op {
                Op::Insert { label, mi } => {
                    let out = memory_insert(&mut mem, sample(label, i), mi as f64 / 5.0, i as u64).unwrap();
                    if let InsertOutcome::Replaced(victim) = &out {
                        prop_assert_eq!(before.class_counts()[&victim.sample.label], max_before);
                        prop_assert!(mem.class_counts().values().all(|&c| c <= max_before + 1));
                        prop_assert!(victim.history < mi as f64 / 5.0);
                    }
                    if matches!(out, InsertOutcome::Skipped) {
                        prop_assert_eq!(mem.entries(), before.entries());
                    }
                }
                Op::Reservoir { label } => {
                    reservoir_insert(&mut mem, sample(label, i), i as u64, &mut rng);
                }
                Op::History { pick, mi } => {
                    if mem.is_empty() {
                        prop_assert!(update_history(&mut mem, 999_999, 0.1, 0.3).is_err());
                        continue;
                    }
                    let id = mem.entries()[pick % mem.len()].id;
                    update_history(&mut mem, id, mi as f64 / 5.0, 0.3).unwrap();
                    for (a, b) in mem.entries().iter().zip(before.entries()) {
                        if a.id == id {
                            let expected = 0.7 * b.history + 0.3 * (mi as f64 / 5.0);
                            prop_assert!((a.history - expected).abs() < 1e-15);
                        } else {
                            prop_assert_eq!(a, b);
                        }
                    }
                }
            }
            prop_assert!(mem.len() <= cap);
            prop_assert!(mem.entries().iter().all(|e| e.history.is_finite()));
            let total: usize = mem.class_counts().values().sum();
            prop_assert_eq!(total, mem.len());
        }
    }

    #[test]
    fn lr_stays_on_the_omega_lattice(
        omega in 1.001f64..2.0,
        steps in prop::collection::vec((any::<bool>(), 0u8..4), 0..200),
        appendix in any::<bool>(),
    ) {
        let base = 3e-4;
        let mode = if appendix { LrMode::Appendix } else { LrMode::MainText };
        let mut lr = LrState::new(base, omega, mode).unwrap().with_bound(None);
        let mut mem = ReplayMemory::new(3);
        memory_insert(&mut mem, sample(0, 0), 0.5, 0).unwrap();
        for (gate, h) in steps {
            let id = mem.entries()[0].id;
            update_history(&mut mem, id, h as f64 / 3.0, 0.5).unwrap();
            let before = lr.current();
            let changed = adapt_lr(&mut lr, &mem, gate);
            prop_assert_eq!(changed, gate);
            if !gate {
                prop_assert_eq!(lr.current(), before);
            }
            prop_assert!(lr.current() > 0.0);
            let k = (lr.current() / base).ln() / omega.ln();
            prop_assert!((k - k.round()).abs() < 1e-6);
            prop_assert_eq!(k.round() as i64, lr.exponent());
        }
    }

    #[test]
    fn training_batch_shape(mem_len in 0usize..20, buf_len in 0usize..9, half in 1usize..9, seed in 0u64..100) {
        let mut mem = ReplayMemory::new(20);
        for i in 0..mem_len {
            memory_insert(&mut mem, sample(i % 3, i), 0.0, 0).unwrap();
        }
        let buf: VecDeque<Sample> = (0..buf_len).map(|i| sample(0, 100 + i)).collect();
        let batch = draw_training_batch(&mem, &buf, 2 * half, &mut RngState::new(seed));
        if mem_len == 0 && buf_len == 0 {
            prop_assert!(batch.is_err());
        } else {
            let batch = batch.unwrap();
            prop_assert_eq!(batch.len(), (2 * half).min(mem_len + buf_len));
            let from_mem: Vec<u64> = batch.iter().filter_map(|b| b.memory_id).collect();
            let mut uniq = from_mem.clone();
            uniq.sort_unstable();
            uniq.dedup();
            prop_assert_eq!(uniq.len(), from_mem.len());
            let from_buf = batch.len() - from_mem.len();
            // newest stream samples first
            for (k, item) in batch.iter().take(from_buf).enumerate() {
                prop_assert_eq!(item.sample.index, 100 + buf_len - 1 - k);
            }
        }
    }
}
