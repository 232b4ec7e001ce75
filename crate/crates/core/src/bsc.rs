//! Branched stochastic classifiers.
//!
//! Every `(head, class)` sub-classifier (weight row plus bias) keeps
//! SWAG-style streaming statistics: the running mean of periodic snapshots,
//! the running mean of their squares, and a FIFO matrix of the last `A`
//! deviations from the mean. At inference the sub-classifier weights are
//! drawn from `N(mean, diag/2 + D D^T / (2 (A - 1)))` independently per class
//! node and softmax outputs are averaged over `R` draws and then over heads.

use std::collections::{BTreeMap, VecDeque};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::math::prob::softmax_into;
use crate::math::{RngState, Tensor};
use crate::network::BranchedHeads;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BscConfig {
    pub num_heads: usize,
    /// Snapshot period `P` in training iterations.
    pub period: u64,
    /// Maximum number of deviation columns `A`.
    pub rank: usize,
    /// Monte-Carlo weight samples `R` per prediction.
    pub mc_samples: usize,
    /// When off no snapshots are taken and inference uses the raw weights.
    pub weight_averaging: bool,
}

impl Default for BscConfig {
    fn default() -> Self {
        Self {
            num_heads: 5,
            period: 20,
            rank: 10,
            mc_samples: 10,
            weight_averaging: true,
        }
    }
}

impl BscConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_heads == 0 {
            return Err(Error::Config("bsc.num_heads must be >= 1".into()));
        }
        if self.period == 0 {
            return Err(Error::Config("bsc.period_p must be >= 1".into()));
        }
        if self.rank < 2 {
            return Err(Error::Config("bsc.rank_a must be >= 2".into()));
        }
        if self.mc_samples == 0 {
            return Err(Error::Config("bsc.num_mc_samples_r must be >= 1".into()));
        }
        Ok(())
    }
}

/// Streaming Gaussian statistics of one sub-classifier.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SwagNodeStats {
    mean: Vec<f64>,
    sq_mean: Vec<f64>,
    deviations: VecDeque<Vec<f64>>,
    snapshots: u64,
    first_seen: u64,
    period: u64,
    max_cols: usize,
}

impl SwagNodeStats {
    pub fn new(dim: usize, first_seen: u64, period: u64, max_cols: usize) -> Result<Self> {
        if period == 0 || max_cols < 2 {
            return Err(Error::Parameter(format!(
                "need period >= 1 and max columns >= 2, got {period} / {max_cols}"
            )));
        }
        Ok(Self {
            mean: vec![0.0; dim],
            sq_mean: vec![0.0; dim],
            deviations: VecDeque::with_capacity(max_cols),
            snapshots: 0,
            first_seen,
            period,
            max_cols,
        })
    }

    /// Assembles statistics directly, e.g. from a checkpoint or a test fixture.
    pub fn from_parts(
        mean: Vec<f64>,
        sq_mean: Vec<f64>,
        deviations: Vec<Vec<f64>>,
        snapshots: u64,
        max_cols: usize,
    ) -> Result<Self> {
        let dim = mean.len();
        if sq_mean.len() != dim || deviations.iter().any(|d| d.len() != dim) {
            return Err(Error::Shape("inconsistent statistic lengths".into()));
        }
        if max_cols < 2 || deviations.len() > max_cols {
            return Err(Error::Parameter("bad deviation column count".into()));
        }
        Ok(Self {
            mean,
            sq_mean,
            deviations: deviations.into(),
            snapshots,
            first_seen: 0,
            period: 1,
            max_cols,
        })
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn mean(&self) -> &[f64] {
        &self.mean
    }

    pub fn sq_mean(&self) -> &[f64] {
        &self.sq_mean
    }

    /// Deviation columns, oldest first.
    pub fn deviations(&self) -> impl ExactSizeIterator<Item = &Vec<f64>> {
        self.deviations.iter()
    }

    pub fn snapshots(&self) -> u64 {
        self.snapshots
    }

    pub fn first_seen(&self) -> u64 {
        self.first_seen
    }

    pub fn max_cols(&self) -> usize {
        self.max_cols
    }

    /// `s - mean^2` elementwise.
    pub fn diag_variance(&self) -> Vec<f64> {
        self.sq_mean
            .iter()
            .zip(&self.mean)
            .map(|(s, m)| s - m * m)
            .collect()
    }

    /// Whether iteration `t` is a snapshot boundary.
    pub fn is_due(&self, t: u64) -> bool {
        t > self.first_seen && (t - self.first_seen) % self.period == 0
    }

    fn absorb(&mut self, phi: &[f64]) {
        let k = self.snapshots as f64;
        for ((m, s), &p) in self.mean.iter_mut().zip(self.sq_mean.iter_mut()).zip(phi) {
            *m = (k * *m + p) / (k + 1.0);
            *s = (k * *s + p * p) / (k + 1.0);
        }
        if self.deviations.len() == self.max_cols {
            self.deviations.pop_front();
        }
        self.deviations
            .push_back(phi.iter().zip(&self.mean).map(|(p, m)| p - m).collect());
        self.snapshots += 1;
    }

    /// Draw `mean + sqrt(diag / 2) z1 + D z2 / sqrt(2 (A - 1))`.
    fn draw(&self, rng: &mut RngState, out: &mut [f64]) {
        let low_rank = 1.0 / (2.0 * (self.max_cols as f64 - 1.0)).sqrt();
        for ((o, m), (s, mu)) in out
            .iter_mut()
            .zip(&self.mean)
            .zip(self.sq_mean.iter().zip(&self.mean))
        {
            let var = (s - mu * mu).max(0.0);
            *o = m + (0.5 * var).sqrt() * rng.gaussian();
        }
        for col in &self.deviations {
            let z = rng.gaussian() * low_rank;
            for (o, d) in out.iter_mut().zip(col) {
                *o += d * z;
            }
        }
    }
}

/// Snapshot update for iteration `t`; fails unless `t` is a snapshot boundary.
pub fn swag_update(stats: &mut SwagNodeStats, phi: &[f64], t: u64) -> Result<()> {
    if phi.len() != stats.dim() {
        return Err(Error::Shape(format!(
            "snapshot has {} entries, statistics have {}",
            phi.len(),
            stats.dim()
        )));
    }
    if !stats.is_due(t) {
        return Err(Error::Contract(format!(
            "iteration {t} is not a snapshot boundary (first seen {}, period {})",
            stats.first_seen, stats.period
        )));
    }
    stats.absorb(phi);
    Ok(())
}

/// Samples sub-classifier weights; before the first snapshot returns `raw`.
pub fn swag_sample(stats: &SwagNodeStats, rng: &mut RngState, raw: &[f64]) -> Vec<f64> {
    if stats.snapshots == 0 {
        return raw.to_vec();
    }
    let mut out = vec![0.0; stats.dim()];
    stats.draw(rng, &mut out);
    out
}

/// Statistics for every `(head, class)` pair seen so far.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BscState {
    pub config: BscConfig,
    nodes: Vec<BTreeMap<usize, SwagNodeStats>>,
}

impl BscState {
    pub fn new(config: BscConfig) -> Self {
        let nodes = vec![BTreeMap::new(); config.num_heads];
        Self { config, nodes }
    }

    pub fn node(&self, head: usize, class: usize) -> Option<&SwagNodeStats> {
        self.nodes.get(head).and_then(|m| m.get(&class))
    }

    pub fn classes(&self) -> impl Iterator<Item = usize> + '_ {
        self.nodes[0].keys().copied()
    }

    /// Starts statistics for `class` in every head; no-op if already present.
    pub fn register(&mut self, class: usize, t: u64, feature_dim: usize) -> Result<()> {
        for head in &mut self.nodes {
            if !head.contains_key(&class) {
                head.insert(
                    class,
                    SwagNodeStats::new(feature_dim + 1, t, self.config.period, self.config.rank)?,
                );
            }
        }
        Ok(())
    }

    /// Takes snapshots for every node due at `t`. Returns whether any mean changed.
    pub fn on_iteration(&mut self, heads: &BranchedHeads, t: u64) -> Result<bool> {
        if !self.config.weight_averaging {
            return Ok(false);
        }
        if heads.num_heads() != self.nodes.len() {
            return Err(Error::Contract("head count differs from statistics".into()));
        }
        let mut updated = false;
        for (n, head) in self.nodes.iter_mut().enumerate() {
            for (&c, stats) in head.iter_mut() {
                if stats.is_due(t) {
                    swag_update(stats, &heads.sub_classifier(n, c), t)?;
                    updated = true;
                }
            }
        }
        Ok(updated)
    }

    fn sampled_nodes(&self, head: usize) -> usize {
        if !self.config.weight_averaging {
            return 0;
        }
        self.nodes[head].values().filter(|s| s.snapshots > 0).count()
    }
}

/// Class probabilities of head `n` for a `B x q` feature batch (or a single
/// feature vector), averaged over `R` weight draws.
///
/// One weight draw is shared by all rows of the batch; each row's estimate is
/// still an average of `R` independent draws.
pub fn predict_branch(
    n: usize,
    features: &Tensor,
    heads: &BranchedHeads,
    state: &BscState,
    rng: &mut RngState,
) -> Result<Tensor> {
    let q = heads.feature_dim();
    if features.cols() != q || features.rank() > 2 {
        return Err(Error::Shape(format!(
            "features must have width {q}, got {:?}",
            features.shape()
        )));
    }
    if n >= heads.num_heads() || n >= state.nodes.len() {
        return Err(Error::Index(format!("head {n} does not exist")));
    }
    let classes = heads.num_classes();
    let rows = features.rows();
    let raw: Vec<Vec<f64>> = (0..classes).map(|c| heads.sub_classifier(n, c)).collect();
    let stochastic = state.sampled_nodes(n) > 0;
    let draws = if stochastic { state.config.mc_samples } else { 1 };

    let mut acc = vec![0.0; rows * classes];
    let mut weights = raw.clone();
    let mut logits = vec![0.0; classes];
    let mut probs = vec![0.0; classes];
    for _ in 0..draws {
        if stochastic {
            for (c, w) in weights.iter_mut().enumerate() {
                match state.nodes[n].get(&c) {
                    Some(s) if s.snapshots > 0 => s.draw(rng, w),
                    _ => w.copy_from_slice(&raw[c]),
                }
            }
        }
        for b in 0..rows {
            let f = features.row(b);
            for (z, w) in logits.iter_mut().zip(&weights) {
                let mut v = w[q];
                for (wi, fi) in w[..q].iter().zip(f) {
                    v += wi * fi;
                }
                *z = v;
            }
            softmax_into(&logits, &mut probs);
            for (a, p) in acc[b * classes..(b + 1) * classes].iter_mut().zip(&probs) {
                *a += p;
            }
        }
    }
    let r = draws as f64;
    for a in &mut acc {
        *a /= r;
    }
    let shape: Vec<usize> = if features.rank() == 1 {
        vec![classes]
    } else {
        vec![rows, classes]
    };
    Tensor::from_vec(&shape, acc)
}

/// Mean of the branch predictions together with the per-branch predictions.
pub fn predict_ensemble(
    features: &Tensor,
    heads: &BranchedHeads,
    state: &BscState,
    rng: &mut RngState,
) -> Result<(Tensor, Vec<Tensor>)> {
    let branches = (0..heads.num_heads())
        .map(|n| predict_branch(n, features, heads, state, rng))
        .collect::<Result<Vec<_>>>()?;
    let mut mean = Tensor::zeros(branches[0].shape());
    for b in &branches {
        for (m, v) in mean.data_mut().iter_mut().zip(b.data()) {
            *m += v;
        }
    }
    let n = branches.len() as f64;
    for m in mean.data_mut() {
        *m /= n;
    }
    Ok((mean, branches))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::Linear;

    #[test]
    fn first_snapshot() {
        let mut s = SwagNodeStats::new(3, 0, 1, 4).unwrap();
        let v = [1.0, -2.0, 0.5];
        swag_update(&mut s, &v, 1).unwrap();
        assert_eq!(s.mean(), &v);
        assert_eq!(s.sq_mean(), &[1.0, 4.0, 0.25]);
        assert_eq!(s.deviations().len(), 1);
        assert!(s.deviations().next().unwrap().iter().all(|&d| d == 0.0));
    }

    #[test]
    fn two_scalar_snapshots() {
        let mut s = SwagNodeStats::new(1, 0, 1, 4).unwrap();
        swag_update(&mut s, &[2.0], 1).unwrap();
        swag_update(&mut s, &[4.0], 2).unwrap();
        assert_eq!(s.mean(), &[3.0]);
        assert_eq!(s.sq_mean(), &[10.0]);
        assert_eq!(s.diag_variance(), vec![1.0]);
    }

    #[test]
    fn fifo_truncation() {
        let mut s = SwagNodeStats::new(1, 0, 1, 2).unwrap();
        for (t, v) in [(1, 1.0), (2, 3.0), (3, 8.0)] {
            swag_update(&mut s, &[v], t).unwrap();
        }
        let cols: Vec<f64> = s.deviations().map(|d| d[0]).collect();
        // means after snapshots 2 and 3 are 2 and 4
        assert_eq!(cols, vec![1.0, 4.0]);
    }

    #[test]
    fn update_requires_boundary() {
        let mut s = SwagNodeStats::new(2, 5, 3, 4).unwrap();
        assert!(swag_update(&mut s, &[0.0, 0.0], 5).is_err());
        assert!(swag_update(&mut s, &[0.0, 0.0], 7).is_err());
        assert!(swag_update(&mut s, &[0.0, 0.0], 8).is_ok());
        assert!(swag_update(&mut s, &[0.0], 11).is_err());
    }

    #[test]
    fn zero_covariance_returns_mean() {
        let s = SwagNodeStats::from_parts(vec![1.5, -0.5], vec![2.25, 0.25], vec![vec![0.0, 0.0]], 3, 10).unwrap();
        let mut rng = RngState::new(0);
        for _ in 0..10 {
            assert_eq!(swag_sample(&s, &mut rng, &[9.0, 9.0]), vec![1.5, -0.5]);
        }
    }

    #[test]
    fn cold_start_uses_raw() {
        let s = SwagNodeStats::new(2, 0, 1, 4).unwrap();
        assert_eq!(swag_sample(&s, &mut RngState::new(1), &[0.1, 0.2]), vec![0.1, 0.2]);
    }

    fn heads_from(weights: Vec<Vec<f64>>, bias: Vec<f64>) -> BranchedHeads {
        let c = weights.len();
        let q = weights[0].len();
        BranchedHeads {
            heads: vec![Linear {
                weight: Tensor::from_vec(&[c, q], weights.concat()).unwrap(),
                bias: Tensor::vector(bias),
            }],
        }
    }

    #[test]
    fn zero_covariance_branch_is_mean_weight_softmax() {
        let heads = heads_from(vec![vec![0.3, -1.0], vec![0.2, 0.4]], vec![0.0, 0.1]);
        let mut state = BscState::new(BscConfig {
            num_heads: 1,
            mc_samples: 1,
            ..BscConfig::default()
        });
        state.register(0, 0, 2).unwrap();
        state.nodes[0].insert(
            0,
            SwagNodeStats::from_parts(vec![1.0, 2.0, -0.5], vec![1.0, 4.0, 0.25], vec![vec![0.0; 3]], 1, 10).unwrap(),
        );
        let f = Tensor::vector(vec![0.7, -0.2]);
        let p = predict_branch(0, &f, &heads, &state, &mut RngState::new(3)).unwrap();
        let z0 = -0.5 + 1.0 * 0.7 + 2.0 * -0.2;
        let z1 = 0.1 + 0.2 * 0.7 + 0.4 * -0.2;
        let mut expected = [0.0; 2];
        softmax_into(&[z0, z1], &mut expected);
        assert_eq!(p.data(), &expected);
    }

    #[test]
    fn ensemble_single_head_and_identical_heads() {
        let heads = heads_from(vec![vec![0.3, -1.0], vec![0.2, 0.4], vec![-0.1, 0.0]], vec![0.0, 0.1, 0.2]);
        let state = BscState::new(BscConfig {
            num_heads: 1,
            ..BscConfig::default()
        });
        let f = Tensor::from_rows(&[[0.7, -0.2], [1.0, 1.0]]).unwrap();
        let (mean, branches) = predict_ensemble(&f, &heads, &state, &mut RngState::new(0)).unwrap();
        assert_eq!(mean, branches[0]);

        let mut three = heads.clone();
        three.heads = vec![heads.heads[0].clone(); 3];
        let state3 = BscState::new(BscConfig {
            num_heads: 3,
            ..BscConfig::default()
        });
        let (mean3, b3) = predict_ensemble(&f, &three, &state3, &mut RngState::new(0)).unwrap();
        for (a, b) in mean3.data().iter().zip(b3[1].data()) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn snapshots_only_when_due_and_enabled() {
        let heads = heads_from(vec![vec![0.3, -1.0], vec![0.2, 0.4]], vec![0.0, 0.1]);
        let mut state = BscState::new(BscConfig {
            num_heads: 1,
            period: 3,
            ..BscConfig::default()
        });
        state.register(1, 2, 2).unwrap();
        assert!(!state.on_iteration(&heads, 2).unwrap());
        assert!(!state.on_iteration(&heads, 4).unwrap());
        assert!(state.on_iteration(&heads, 5).unwrap());
        assert_eq!(state.node(0, 1).unwrap().mean(), &[0.2, 0.4, 0.1]);
        assert!(state.node(0, 0).is_none());

        let mut off = BscState::new(BscConfig {
            num_heads: 1,
            period: 3,
            weight_averaging: false,
            ..BscConfig::default()
        });
        off.register(1, 2, 2).unwrap();
        assert!(!off.on_iteration(&heads, 5).unwrap());
    }
}
