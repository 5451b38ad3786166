//! Objectives: class-weighted cross-entropy, box regression, and the
//! α-blended two-branch loss.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::stn::BBoxParams;
use crate::tensor::{Tape, Tensor, Var};

/// Per-class weights `w_c = Z / freq(c)`, with `Z` picked so that the weights
/// sum to the number of classes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassWeights {
    pub weights: Vec<f64>,
    pub normalizer: f64,
    pub freqs: Vec<usize>,
}

impl ClassWeights {
    pub fn unit(classes: usize) -> Self {
        ClassWeights {
            weights: vec![1.0; classes],
            normalizer: 1.0,
            freqs: vec![1; classes],
        }
    }

    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }
}

pub fn class_weights(freqs: &[usize]) -> Result<ClassWeights> {
    if freqs.is_empty() {
        return Err(Error::Usage(
            "class_weights needs at least one class".into(),
        ));
    }
    if let Some(class) = freqs.iter().position(|&f| f == 0) {
        return Err(Error::EmptyClass { class });
    }
    let inv_sum: f64 = freqs.iter().map(|&f| 1.0 / f as f64).sum();
    let normalizer = freqs.len() as f64 / inv_sum;
    Ok(ClassWeights {
        weights: freqs.iter().map(|&f| normalizer / f as f64).collect(),
        normalizer,
        freqs: freqs.to_vec(),
    })
}

/// One-hot `N×C` matrix for class indices.
pub fn one_hot(labels: &[usize], classes: usize) -> Result<Tensor> {
    if labels.is_empty() {
        return Err(Error::Usage("one_hot needs at least one label".into()));
    }
    let mut data = vec![0.0; labels.len() * classes];
    for (i, &l) in labels.iter().enumerate() {
        if l >= classes {
            return Err(Error::Label(format!(
                "class {l} out of range for {classes} classes"
            )));
        }
        data[i * classes + l] = 1.0;
    }
    Tensor::new(vec![labels.len(), classes], data)
}

/// Weighted cross-entropy on probabilities, averaged over the batch.
pub fn wce_loss(
    tape: &mut Tape,
    probs: Var,
    labels: &Tensor,
    weights: Option<&ClassWeights>,
) -> Result<Var> {
    tape.cross_entropy_probs(probs, labels, weights.map(|w| w.weights.as_slice()))
}

pub fn cross_entropy(tape: &mut Tape, probs: Var, labels: &Tensor) -> Result<Var> {
    tape.cross_entropy_probs(probs, labels, None)
}

/// Softmax followed by weighted cross-entropy, fused on the log-softmax.
/// Used for training since it stays finite for saturated logits.
pub fn softmax_wce(
    tape: &mut Tape,
    logits: Var,
    targets: &[usize],
    weights: Option<&ClassWeights>,
) -> Result<Var> {
    tape.softmax_cross_entropy(logits, targets, weights.map(|w| w.weights.as_slice()))
}

/// `½·‖p − p̂‖²` over `(t_r, t_c, s)`, averaged over the batch. `pred` is `N×3`.
pub fn sup_loc_loss(tape: &mut Tape, pred: Var, truth: &[BBoxParams]) -> Result<Var> {
    let n = truth.len();
    if tape.shape(pred) != [n, 3] {
        return Err(Error::dim(
            "sup_loc_loss",
            format!("predictions {:?} for {n} boxes", tape.shape(pred)),
        ));
    }
    let target = Tensor::new(
        vec![n, 3],
        truth.iter().flat_map(|b| b.as_array()).collect(),
    )?;
    let t = tape.constant(&target);
    let diff = tape.sub(pred, t)?;
    let sq = tape.square(diff);
    let total = tape.sum(sq);
    Ok(tape.scale(total, 0.5 / n as f64))
}

/// Plain-value form of [`sup_loc_loss`] for a single pair of boxes.
pub fn sup_loc_value(truth: &BBoxParams, pred: &BBoxParams) -> f64 {
    let (a, b) = (truth.as_array(), pred.as_array());
    0.5 * a
        .iter()
        .zip(&b)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
}

/// Blending weight `α` for the two-branch loss, complemented from
/// `flip_epoch` onward. Epochs are counted from 1.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AlphaSchedule {
    pub alpha: f64,
    pub flip_epoch: Option<usize>,
}

impl AlphaSchedule {
    pub fn new(alpha: f64, flip_epoch: Option<usize>) -> Result<Self> {
        let s = AlphaSchedule { alpha, flip_epoch };
        s.validate()?;
        Ok(s)
    }

    pub fn constant(alpha: f64) -> Result<Self> {
        Self::new(alpha, None)
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(Error::Config(format!(
                "alpha must lie in [0, 1], got {}",
                self.alpha
            )));
        }
        if self.flip_epoch == Some(0) {
            return Err(Error::Config("flip epoch must be positive".into()));
        }
        Ok(())
    }

    pub fn flipped(&self, epoch: usize) -> bool {
        self.flip_epoch.is_some_and(|f| epoch >= f)
    }

    pub fn alpha_at(&self, epoch: usize) -> f64 {
        if self.flipped(epoch) {
            1.0 - self.alpha
        } else {
            self.alpha
        }
    }
}

/// `(1 − α_eff)·L_class + α_eff·L_uloc`. Terms with a zero coefficient are
/// left out of the graph so each endpoint reproduces one branch loss exactly.
pub fn stl_total_loss(
    tape: &mut Tape,
    class_loss: Var,
    loc_loss: Var,
    schedule: &AlphaSchedule,
    epoch: usize,
) -> Result<Var> {
    schedule.validate()?;
    for v in [class_loss, loc_loss] {
        if tape.value(v).len() != 1 {
            return Err(Error::Usage(format!(
                "branch losses must be scalars, got {:?}",
                tape.shape(v)
            )));
        }
    }
    let a = schedule.alpha_at(epoch);
    let terms: Vec<(Var, f64)> = [(class_loss, 1.0 - a), (loc_loss, a)]
        .into_iter()
        .filter(|&(_, c)| c != 0.0)
        .collect();
    tape.combine(&terms)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::grad_check;
    use proptest::prelude::*;

    fn probs(tape: &mut Tape, rows: &[&[f64]]) -> Var {
        let c = rows[0].len();
        let t = Tensor::new(vec![rows.len(), c], rows.concat()).unwrap();
        tape.constant(&t)
    }

    #[test]
    fn weights_examples() {
        assert_eq!(
            class_weights(&[50, 50, 50]).unwrap().weights,
            vec![1.0, 1.0, 1.0]
        );
        let w = class_weights(&[100, 50, 25]).unwrap();
        assert!((w.normalizer - 3.0 / 0.07).abs() < 1e-12);
        for (a, b) in w
            .weights
            .iter()
            .zip([0.428_571_4, 0.857_142_9, 1.714_285_7])
        {
            assert!((a - b).abs() < 1e-6);
        }
        assert_eq!(class_weights(&[7]).unwrap().weights, vec![1.0]);
        assert!(matches!(
            class_weights(&[3, 0]),
            Err(Error::EmptyClass { class: 1 })
        ));
    }

    #[test]
    fn wce_examples() {
        let mut tape = Tape::new();
        let p = probs(&mut tape, &[&[0.0, 1.0]]);
        let y = one_hot(&[1], 2).unwrap();
        let l = wce_loss(&mut tape, p, &y, None).unwrap();
        assert_eq!(tape.scalar_value(l), 0.0);

        let p = probs(&mut tape, &[&[0.5, 0.5]]);
        let y = one_hot(&[0], 2).unwrap();
        let l = wce_loss(&mut tape, p, &y, None).unwrap();
        assert!((tape.scalar_value(l) - std::f64::consts::LN_2).abs() < 1e-15);

        let w = class_weights(&[100, 50, 25]).unwrap();
        let p = probs(&mut tape, &[&[0.25, 0.5, 0.25]]);
        let y = one_hot(&[2], 3).unwrap();
        let l = wce_loss(&mut tape, p, &y, Some(&w)).unwrap();
        let expected = w.weights[2] * -(0.25f64.ln());
        assert!((tape.scalar_value(l) - expected).abs() < 1e-12);
        assert!((tape.scalar_value(l) - 2.3765).abs() < 1e-4);
    }

    #[test]
    fn sup_loc_examples() {
        let a = BBoxParams::new(0.2, 0.3, 0.5);
        let b = BBoxParams::new(0.2, 0.3, 0.7);
        assert_eq!(sup_loc_value(&a, &a), 0.0);
        assert!((sup_loc_value(&a, &b) - 0.02).abs() < 1e-15);
        assert_eq!(sup_loc_value(&a, &b), sup_loc_value(&b, &a));

        let mut tape = Tape::new();
        let pred = tape.constant(&Tensor::new(vec![1, 3], vec![0.2, 0.3, 0.7]).unwrap());
        let l = sup_loc_loss(&mut tape, pred, &[a]).unwrap();
        assert!((tape.scalar_value(l) - 0.02).abs() < 1e-15);
    }

    #[test]
    fn stl_total_examples() {
        let mut tape = Tape::new();
        let lc = tape.constant(&Tensor::scalar(1.0));
        let lu = tape.constant(&Tensor::scalar(2.0));
        let at = |tape: &mut Tape, a: f64| {
            let s = AlphaSchedule::constant(a).unwrap();
            let v = stl_total_loss(tape, lc, lu, &s, 1).unwrap();
            tape.scalar_value(v)
        };
        assert_eq!(at(&mut tape, 0.0), 1.0);
        assert_eq!(at(&mut tape, 1.0), 2.0);
        assert!((at(&mut tape, 0.6) - 1.6).abs() < 1e-15);
        assert!(AlphaSchedule::constant(1.5).is_err());
    }

    #[test]
    fn alpha_flip() {
        let s = AlphaSchedule::new(0.6, Some(15)).unwrap();
        assert_eq!(s.alpha_at(14), 0.6);
        assert!((s.alpha_at(15) - 0.4).abs() < 1e-15);
        assert!((s.alpha_at(30) - 0.4).abs() < 1e-15);
    }

    #[test]
    fn fused_gradient_is_weighted_residual() {
        let w = class_weights(&[10, 20, 40]).unwrap();
        let targets = [2usize, 0];
        let z = Tensor::new(vec![2, 3], vec![0.3, -0.7, 1.1, 2.0, 0.1, -0.4]).unwrap();
        let mut tape = Tape::new();
        let zv = tape.leaf(&z.clone().with_grad());
        let l = softmax_wce(&mut tape, zv, &targets, Some(&w)).unwrap();
        let g = tape.backward(l).unwrap();
        let grad = g.get(zv).unwrap();
        for (i, &t) in targets.iter().enumerate() {
            let row = &z.data()[i * 3..i * 3 + 3];
            let m = row.iter().copied().fold(f64::MIN, f64::max);
            let e: Vec<f64> = row.iter().map(|v| (v - m).exp()).collect();
            let s: f64 = e.iter().sum();
            for j in 0..3 {
                let y = if j == t { 1.0 } else { 0.0 };
                let expected = w.weights[t] * (e[j] / s - y) / 2.0;
                assert!((grad[i * 3 + j] - expected).abs() < 1e-12);
            }
        }
        let err = grad_check(|t, v| softmax_wce(t, v, &targets, Some(&w)), &z, 1e-5).unwrap();
        assert!(err < 1e-6, "{err}");
    }

    proptest! {
        #[test]
        fn weights_are_scale_free(freqs in prop::collection::vec(1usize..200, 1..7), k in 1usize..20) {
            let a = class_weights(&freqs).unwrap();
            let scaled: Vec<usize> = freqs.iter().map(|f| f * k).collect();
            let b = class_weights(&scaled).unwrap();
            for (x, y) in a.weights.iter().zip(&b.weights) {
                prop_assert!((x - y).abs() < 1e-12);
            }
            prop_assert!((a.weights.iter().sum::<f64>() - freqs.len() as f64).abs() < 1e-12);
        }

        #[test]
        fn unit_weights_equal_plain_ce(seed in any::<u64>()) {
            let vals: Vec<f64> = (0..12).map(|i| (seed.wrapping_mul(31).wrapping_add(i) % 97) as f64 + 1.0).collect();
            let mut data = vals.clone();
            for row in data.chunks_exact_mut(3) {
                let s: f64 = row.iter().sum();
                row.iter_mut().for_each(|v| *v /= s);
            }
            let labels: Vec<usize> = (0..4).map(|i| ((seed >> i) % 3) as usize).collect();
            let y = one_hot(&labels, 3).unwrap();
            let mut tape = Tape::new();
            let p = tape.constant(&Tensor::new(vec![4, 3], data).unwrap());
            let a = wce_loss(&mut tape, p, &y, Some(&ClassWeights::unit(3))).unwrap();
            let b = cross_entropy(&mut tape, p, &y).unwrap();
            prop_assert_eq!(tape.scalar_value(a).to_bits(), tape.scalar_value(b).to_bits());
            prop_assert!(tape.scalar_value(a) >= 0.0);
        }

        #[test]
        fn total_loss_swaps_under_complement(a in 0.0f64..=1.0, lc in 0.0f64..5.0, lu in 0.0f64..5.0) {
            let mut tape = Tape::new();
            let c = tape.constant(&Tensor::scalar(lc));
            let u = tape.constant(&Tensor::scalar(lu));
            let s = AlphaSchedule::new(a, Some(2)).unwrap();
            let before = stl_total_loss(&mut tape, c, u, &s, 1).unwrap();
            let after = stl_total_loss(&mut tape, c, u, &s, 2).unwrap();
            let swapped = AlphaSchedule::constant(1.0 - a).unwrap();
            let direct = stl_total_loss(&mut tape, c, u, &swapped, 1).unwrap();
            prop_assert!((tape.scalar_value(before) - ((1.0 - a) * lc + a * lu)).abs() < 1e-12);
            prop_assert!((tape.scalar_value(after) - tape.scalar_value(direct)).abs() < 1e-12);
        }
    }
}
