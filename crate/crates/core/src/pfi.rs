//! Perturbed function interpolation.
//!
//! A random encoder layer `l` is chosen per batch. Each sample's layer-`l`
//! representation receives multiplicative and additive Gaussian noise whose
//! scale grows with `atan` of its class's running loss, and is then mixed with
//! a partner from a random permutation of the batch using a Beta-distributed
//! weight. Labels are mixed with the same weight.

use std::collections::BTreeMap;
use std::f64::consts::FRAC_PI_2;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::math::rng::{sample_beta, RngState};
use crate::math::Tensor;
use crate::network::{one_hot, ForwardPlan, ForwardTrace, Injection, MlpModel};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PfiConfig {
    pub sigma_m: f64,
    pub sigma_a: f64,
    pub alpha: f64,
    pub beta: f64,
    pub ema_coeff: f64,
    /// Draw one mixing weight per sample instead of one per batch.
    pub per_sample_zeta: bool,
    /// Overrides the Beta draw; used for degenerate runs and tests.
    pub force_zeta: Option<f64>,
}

impl Default for PfiConfig {
    fn default() -> Self {
        Self {
            sigma_m: 0.2,
            sigma_a: 0.4,
            alpha: 1.0,
            beta: 1.0,
            ema_coeff: 0.1,
            per_sample_zeta: false,
            force_zeta: None,
        }
    }
}

impl PfiConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.sigma_m >= 0.0 && self.sigma_a >= 0.0) {
            return Err(Error::Config("pfi noise scales must be >= 0".into()));
        }
        if !(self.alpha > 0.0 && self.beta > 0.0) {
            return Err(Error::Config("pfi.alpha and pfi.beta must be > 0".into()));
        }
        if !(self.ema_coeff > 0.0 && self.ema_coeff <= 1.0) {
            return Err(Error::Config("pfi.ema_coeff must lie in (0, 1]".into()));
        }
        if let Some(z) = self.force_zeta {
            if !(0.0..=1.0).contains(&z) {
                return Err(Error::Config("pfi.force_zeta must lie in [0, 1]".into()));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct ClassLoss {
    first_seen: u64,
    ema: Option<f64>,
}

/// Per-class exponential moving average of the training loss.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassLossTracker {
    ema_coeff: f64,
    classes: BTreeMap<usize, ClassLoss>,
}

impl ClassLossTracker {
    pub fn new(ema_coeff: f64) -> Self {
        Self {
            ema_coeff,
            classes: BTreeMap::new(),
        }
    }

    /// Records the first-encounter iteration of `class`. Later calls are
    /// no-ops; returns whether the class was new.
    pub fn register(&mut self, class: usize, t: u64) -> bool {
        if self.classes.contains_key(&class) {
            return false;
        }
        self.classes.insert(
            class,
            ClassLoss {
                first_seen: t,
                ema: None,
            },
        );
        true
    }

    pub fn first_seen(&self, class: usize) -> Option<u64> {
        self.classes.get(&class).map(|c| c.first_seen)
    }

    pub fn mean_loss(&self, class: usize) -> Option<f64> {
        self.classes.get(&class).and_then(|c| c.ema)
    }

    pub fn seen_classes(&self) -> impl Iterator<Item = usize> + '_ {
        self.classes.keys().copied()
    }
}

/// Noise scales `(mu_m, mu_a)` for class `y` at iteration `t`.
///
/// On the first-encounter iteration, and while no loss has been recorded for
/// the class yet, the raw `(sigma_m, sigma_a)` are returned.
pub fn noise_scales(cfg: &PfiConfig, tracker: &ClassLossTracker, y: usize, t: u64) -> Result<(f64, f64)> {
    let entry = tracker
        .classes
        .get(&y)
        .ok_or_else(|| Error::Index(format!("class {y} has not been encountered")))?;
    match entry.ema {
        Some(loss) if entry.first_seen != t => {
            let a = loss.atan();
            Ok((cfg.sigma_m * a, cfg.sigma_a * a))
        }
        _ => Ok((cfg.sigma_m, cfg.sigma_a)),
    }
}

/// `(1 + mu_m xi_m) * f + mu_a xi_a`, elementwise.
pub fn perturb_features(f: &Tensor, mu_m: f64, mu_a: f64, xi_m: &Tensor, xi_a: &Tensor) -> Result<Tensor> {
    f.ensure_same_shape(xi_m, "multiplicative noise")?;
    f.ensure_same_shape(xi_a, "additive noise")?;
    let mut out = f.clone();
    for ((o, xm), xa) in out.data_mut().iter_mut().zip(xi_m.data()).zip(xi_a.data()) {
        *o = (1.0 + mu_m * xm) * *o + mu_a * xa;
    }
    Ok(out)
}

fn convex(a: &[f64], b: &[f64], zeta: f64) -> Vec<f64> {
    a.iter().zip(b).map(|(x, y)| zeta * x + (1.0 - zeta) * y).collect()
}

/// Convex combination of two features and their soft labels.
pub fn mix_features(fa: &Tensor, fb: &Tensor, ya: &Tensor, yb: &Tensor, zeta: f64) -> Result<(Tensor, Tensor)> {
    if !(0.0..=1.0).contains(&zeta) {
        return Err(Error::Parameter(format!("mixing weight {zeta} outside [0, 1]")));
    }
    fa.ensure_same_shape(fb, "mixed features")?;
    ya.ensure_same_shape(yb, "mixed labels")?;
    let f = Tensor::from_vec(fa.shape(), convex(fa.data(), fb.data(), zeta))?;
    let y = Tensor::from_vec(ya.shape(), convex(ya.data(), yb.data(), zeta))?;
    Ok((f, y))
}

/// EMA update of the running loss of class `y`; the first update initializes it.
pub fn update_class_loss(tracker: &mut ClassLossTracker, y: usize, loss: f64) -> Result<()> {
    if !(loss >= 0.0) || !loss.is_finite() {
        return Err(Error::Parameter(format!("class loss must be finite and >= 0, got {loss}")));
    }
    let rho = tracker.ema_coeff;
    let entry = tracker
        .classes
        .get_mut(&y)
        .ok_or_else(|| Error::Index(format!("class {y} has not been encountered")))?;
    entry.ema = Some(match entry.ema {
        None => loss,
        Some(prev) => (1.0 - rho) * prev + rho * loss,
    });
    Ok(())
}

/// Upper bound of a noise scale for any running loss.
pub fn noise_scale_bound(sigma: f64) -> f64 {
    sigma * FRAC_PI_2
}

/// Every stochastic input of one interpolation step.
#[derive(Clone, Debug, PartialEq)]
pub struct PfiDraw {
    pub split: usize,
    pub xi_m: Tensor,
    pub xi_a: Tensor,
    pub partner: Vec<usize>,
    pub zeta: Vec<f64>,
}

impl PfiDraw {
    pub fn sample(cfg: &PfiConfig, model: &MlpModel, batch: usize, rng: &mut RngState) -> Result<Self> {
        if batch == 0 {
            return Err(Error::Parameter("empty batch".into()));
        }
        let split = rng.below(model.encoder.depth() + 1);
        let width = model.encoder.width_at(split);
        let xi_m = crate::math::sample_gaussian(rng, &[batch, width])?;
        let xi_a = crate::math::sample_gaussian(rng, &[batch, width])?;
        let partner = rng.permutation(batch);
        let draws = if cfg.per_sample_zeta { batch } else { 1 };
        let mut zs = Vec::with_capacity(draws);
        for _ in 0..draws {
            zs.push(match cfg.force_zeta {
                Some(z) => z,
                None => sample_beta(rng, cfg.alpha, cfg.beta)?,
            });
        }
        let zeta = if cfg.per_sample_zeta { zs } else { vec![zs[0]; batch] };
        Ok(Self {
            split,
            xi_m,
            xi_a,
            partner,
            zeta,
        })
    }
}

/// Output of [`pfi_batch`].
#[derive(Clone, Debug)]
pub struct PfiBatch {
    pub trace: ForwardTrace,
    pub mixed_labels: Tensor,
    /// Label carrying weight `>= 0.5` in each mixed pair.
    pub dominant: Vec<usize>,
    pub draw: PfiDraw,
}

impl PfiBatch {
    /// Head-averaged loss of each mixed sample against its dominant label.
    pub fn dominant_losses(&self, num_classes: usize) -> Vec<(usize, f64)> {
        self.dominant
            .iter()
            .enumerate()
            .map(|(i, &c)| (c, self.trace.sample_loss(i, &one_hot(c, num_classes))))
            .collect()
    }
}

/// Samples a draw from `rng` and runs [`pfi_batch_with`].
pub fn pfi_batch(
    model: &MlpModel,
    inputs: &Tensor,
    labels: &[usize],
    cfg: &PfiConfig,
    tracker: &ClassLossTracker,
    rng: &mut RngState,
    t: u64,
) -> Result<PfiBatch> {
    let draw = PfiDraw::sample(cfg, model, labels.len(), rng)?;
    pfi_batch_with(model, inputs, labels, cfg, tracker, t, draw)
}

/// Perturbs and mixes the batch at `draw.split` and records the forward pass.
pub fn pfi_batch_with(
    model: &MlpModel,
    inputs: &Tensor,
    labels: &[usize],
    cfg: &PfiConfig,
    tracker: &ClassLossTracker,
    t: u64,
    draw: PfiDraw,
) -> Result<PfiBatch> {
    let batch = labels.len();
    if batch == 0 {
        return Err(Error::Parameter("empty batch".into()));
    }
    if inputs.rows() != batch || inputs.rank() != 2 {
        return Err(Error::Shape(format!(
            "{} labels for inputs of shape {:?}",
            batch,
            inputs.shape()
        )));
    }
    let width = model.encoder.width_at(draw.split.min(model.encoder.depth()));
    if draw.xi_m.shape() != [batch, width] || draw.xi_a.shape() != [batch, width] {
        return Err(Error::Shape("noise tensors do not match the split width".into()));
    }
    let classes = model.num_classes();
    if let Some(&y) = labels.iter().find(|&&y| y >= classes) {
        return Err(Error::Index(format!("label {y} outside {classes} classes")));
    }

    let mut scale = Tensor::zeros(&[batch, width]);
    let mut shift = Tensor::zeros(&[batch, width]);
    for (i, &y) in labels.iter().enumerate() {
        let (mu_m, mu_a) = noise_scales(cfg, tracker, y, t)?;
        for ((s, xm), (a, xa)) in scale
            .row_mut(i)
            .iter_mut()
            .zip(draw.xi_m.row(i))
            .zip(shift.row_mut(i).iter_mut().zip(draw.xi_a.row(i)))
        {
            *s = 1.0 + mu_m * xm;
            *a = mu_a * xa;
        }
    }

    let mut mixed = Tensor::zeros(&[batch, classes]);
    let mut dominant = Vec::with_capacity(batch);
    for i in 0..batch {
        let (z, j) = (draw.zeta[i], draw.partner[i]);
        let y = convex(&one_hot(labels[i], classes), &one_hot(labels[j], classes), z);
        mixed.row_mut(i).copy_from_slice(&y);
        dominant.push(if z >= 0.5 { labels[i] } else { labels[j] });
    }

    let plan = ForwardPlan {
        split: draw.split,
        injection: Some(Injection {
            scale,
            shift,
            partner: draw.partner.clone(),
            zeta: draw.zeta.clone(),
        }),
    };
    let trace = model.forward_trace(inputs, &plan)?;
    Ok(PfiBatch {
        trace,
        mixed_labels: mixed,
        dominant,
        draw,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn tracker_with(y: usize, first: u64, loss: Option<f64>) -> ClassLossTracker {
        let mut t = ClassLossTracker::new(0.1);
        t.register(y, first);
        if let Some(l) = loss {
            update_class_loss(&mut t, y, l).unwrap();
        }
        t
    }

    #[test]
    fn scales_first_encounter() {
        let cfg = PfiConfig::default();
        let tr = tracker_with(3, 10, Some(5.0));
        assert_eq!(noise_scales(&cfg, &tr, 3, 10).unwrap(), (0.2, 0.4));
    }

    #[test]
    fn scales_zero_loss() {
        let cfg = PfiConfig::default();
        let tr = tracker_with(0, 1, Some(0.0));
        assert_eq!(noise_scales(&cfg, &tr, 0, 2).unwrap(), (0.0, 0.0));
    }

    #[test]
    fn scales_unit_loss() {
        let cfg = PfiConfig::default();
        let tr = tracker_with(0, 1, Some(1.0));
        let (m, a) = noise_scales(&cfg, &tr, 0, 5).unwrap();
        assert!((m - 0.2 * std::f64::consts::FRAC_PI_4).abs() < 1e-15);
        assert!((m - 0.15708).abs() < 1e-5);
        assert!((a - 0.4 * std::f64::consts::FRAC_PI_4).abs() < 1e-15);
    }

    #[test]
    fn scales_unknown_class() {
        let tr = ClassLossTracker::new(0.1);
        assert!(noise_scales(&PfiConfig::default(), &tr, 1, 0).is_err());
    }

    #[test]
    fn scales_without_recorded_loss_fall_back() {
        let tr = tracker_with(2, 1, None);
        assert_eq!(noise_scales(&PfiConfig::default(), &tr, 2, 9).unwrap(), (0.2, 0.4));
    }

    #[test]
    fn perturb_examples() {
        let f = Tensor::vector(vec![1.0, 1.0]);
        let z = Tensor::vector(vec![0.3, -0.8]);
        assert_eq!(perturb_features(&f, 0.0, 0.0, &z, &z).unwrap(), f);
        let out = perturb_features(&f, 0.5, 0.0, &Tensor::vector(vec![1.0, -1.0]), &z).unwrap();
        assert_eq!(out.data(), &[1.5, 0.5]);
        let zero = Tensor::vector(vec![0.0, 0.0]);
        assert_eq!(perturb_features(&zero, 0.7, 1.0, &f, &z).unwrap(), z);
        assert!(perturb_features(&f, 0.1, 0.1, &Tensor::vector(vec![0.0]), &z).is_err());
    }

    #[test]
    fn mix_examples() {
        let fa = Tensor::vector(vec![2.0, 0.0]);
        let fb = Tensor::vector(vec![0.0, 4.0]);
        let ya = Tensor::vector(one_hot(0, 3));
        let yb = Tensor::vector(one_hot(1, 3));
        let (f, y) = mix_features(&fa, &fb, &ya, &yb, 1.0).unwrap();
        assert_eq!((f, y), (fa.clone(), ya.clone()));
        let (_, y) = mix_features(&fa, &fb, &ya, &yb, 0.5).unwrap();
        assert_eq!(y.data(), &[0.5, 0.5, 0.0]);
        let (f, _) = mix_features(&fa, &fb, &ya, &yb, 0.25).unwrap();
        assert_eq!(f.data(), &[0.5, 3.0]);
        assert!(mix_features(&fa, &fb, &ya, &yb, 1.5).is_err());
        assert!(mix_features(&fa, &fb, &ya, &yb, -0.1).is_err());
    }

    #[test]
    fn class_loss_ema() {
        let mut tr = tracker_with(0, 0, None);
        update_class_loss(&mut tr, 0, 2.0).unwrap();
        assert_eq!(tr.mean_loss(0), Some(2.0));

        let mut tr = tracker_with(0, 0, Some(1.0));
        update_class_loss(&mut tr, 0, 2.0).unwrap();
        assert!((tr.mean_loss(0).unwrap() - 1.1).abs() < 1e-15);

        let mut tr = ClassLossTracker::new(1.0);
        tr.register(4, 0);
        for l in [0.3, 2.5, 0.9] {
            update_class_loss(&mut tr, 4, l).unwrap();
        }
        assert_eq!(tr.mean_loss(4), Some(0.9));
        assert!(update_class_loss(&mut tr, 4, -1.0).is_err());
        assert!(update_class_loss(&mut tr, 5, 1.0).is_err());
    }

    #[test]
    fn register_only_once() {
        let mut tr = ClassLossTracker::new(0.1);
        assert!(tr.register(1, 4));
        assert!(!tr.register(1, 9));
        assert_eq!(tr.first_seen(1), Some(4));
    }

    fn small_model(heads: usize) -> MlpModel {
        MlpModel::new(4, &[6, 5], 3, 3, heads, &RngState::new(21)).unwrap()
    }

    fn inputs(rows: usize) -> Tensor {
        let mut rng = RngState::new(99);
        Tensor::from_vec(&[rows, 4], (0..rows * 4).map(|_| rng.gaussian()).collect()).unwrap()
    }

    #[test]
    fn degenerate_batch_equals_plain_forward() {
        let model = small_model(2);
        let x = inputs(5);
        let labels = [0, 1, 2, 1, 0];
        let cfg = PfiConfig {
            sigma_m: 0.0,
            sigma_a: 0.0,
            force_zeta: Some(1.0),
            ..PfiConfig::default()
        };
        let mut tr = ClassLossTracker::new(0.1);
        for &y in &labels {
            tr.register(y, 0);
        }
        let plain = model.forward_trace(&x, &ForwardPlan::plain(&model)).unwrap();
        for seed in 0..8 {
            let out = pfi_batch(&model, &x, &labels, &cfg, &tr, &mut RngState::new(seed), 0).unwrap();
            for (a, b) in out.trace.logits().iter().zip(plain.logits()) {
                assert_eq!(a, b);
            }
        }
    }

    #[test]
    fn split_zero_is_input_mixup() {
        let model = small_model(1);
        let x = inputs(2);
        let labels = [0, 2];
        let mut tr = ClassLossTracker::new(0.1);
        tr.register(0, 0);
        tr.register(2, 0);
        let cfg = PfiConfig::default();
        let mut rng = RngState::new(5);
        let xi_m = crate::math::sample_gaussian(&mut rng, &[2, 4]).unwrap();
        let xi_a = crate::math::sample_gaussian(&mut rng, &[2, 4]).unwrap();
        let draw = PfiDraw {
            split: 0,
            xi_m: xi_m.clone(),
            xi_a: xi_a.clone(),
            partner: vec![1, 0],
            zeta: vec![0.3, 0.3],
        };
        let out = pfi_batch_with(&model, &x, &labels, &cfg, &tr, 0, draw).unwrap();
        // expected: perturb raw inputs, mix, run the whole encoder
        let p: Vec<Tensor> = (0..2)
            .map(|i| {
                perturb_features(
                    &Tensor::vector(x.row(i).to_vec()),
                    0.2,
                    0.4,
                    &Tensor::vector(xi_m.row(i).to_vec()),
                    &Tensor::vector(xi_a.row(i).to_vec()),
                )
                .unwrap()
            })
            .collect();
        let ya = Tensor::vector(one_hot(0, 3));
        let yb = Tensor::vector(one_hot(2, 3));
        let (m0, y0) = mix_features(&p[0], &p[1], &ya, &yb, 0.3).unwrap();
        let feat = model.encoder.forward(&m0).unwrap();
        let logits = model.heads.logits(0, &Tensor::from_rows(&[feat.data()]).unwrap());
        assert_eq!(logits.row(0), out.trace.logits()[0].row(0));
        assert_eq!(out.mixed_labels.row(0), y0.data());
        assert_eq!(out.dominant, vec![2, 0]);
    }

    #[test]
    fn swapped_pair_half_mix() {
        let model = small_model(1);
        let x = inputs(2);
        let labels = [0, 1];
        let mut tr = ClassLossTracker::new(0.1);
        tr.register(0, 0);
        tr.register(1, 0);
        let draw = PfiDraw {
            split: 2,
            xi_m: Tensor::zeros(&[2, 5]),
            xi_a: Tensor::zeros(&[2, 5]),
            partner: vec![1, 0],
            zeta: vec![0.5, 0.5],
        };
        let out = pfi_batch_with(&model, &x, &labels, &PfiConfig::default(), &tr, 0, draw).unwrap();
        assert_eq!(out.mixed_labels.row(0), &[0.5, 0.5, 0.0]);
        assert_eq!(out.mixed_labels.row(1), &[0.5, 0.5, 0.0]);
    }

    #[test]
    fn empty_batch_rejected() {
        let model = small_model(1);
        let tr = ClassLossTracker::new(0.1);
        let x = Tensor::zeros(&[0, 4]);
        assert!(pfi_batch(&model, &x, &[], &PfiConfig::default(), &tr, &mut RngState::new(0), 0).is_err());
    }

    proptest! {
        #[test]
        fn mixed_labels_are_distributions(zeta in 0.0f64..=1.0, a in 0usize..5, b in 0usize..5) {
            let (_, y) = mix_features(
                &Tensor::vector(vec![0.0]), &Tensor::vector(vec![1.0]),
                &Tensor::vector(one_hot(a, 5)), &Tensor::vector(one_hot(b, 5)), zeta).unwrap();
            prop_assert!(y.data().iter().all(|&v| v >= 0.0));
            prop_assert!((y.data().iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }

        #[test]
        fn scales_monotone_and_bounded(l1 in 0.0f64..50.0, dl in 0.0f64..50.0) {
            let cfg = PfiConfig::default();
            let (m1, a1) = noise_scales(&cfg, &tracker_with(0, 0, Some(l1)), 0, 1).unwrap();
            let (m2, a2) = noise_scales(&cfg, &tracker_with(0, 0, Some(l1 + dl)), 0, 1).unwrap();
            prop_assert!(m2 >= m1 && a2 >= a1);
            prop_assert!(m2 <= noise_scale_bound(cfg.sigma_m) && a2 <= noise_scale_bound(cfg.sigma_a));
        }
    }
}
