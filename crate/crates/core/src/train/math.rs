//! Activation and loss functions used by the head and the training loop.

use ndarray::{Array, Array1, Array2, ArrayBase, ArrayView1, Axis, Data, Dimension, Ix2};

use crate::error::{Error, Result};

/// Entries of the predicted distribution are clamped to this before `ln`.
pub const LOG_FLOOR: f64 = 1e-12;

/// Tolerance on `sum(r) == 1` accepted by [`cross_entropy_lsr`].
pub const NORMALIZATION_TOL: f64 = 1e-6;

pub fn relu<S, D>(x: &ArrayBase<S, D>) -> Array<f64, D>
where
    S: Data<Elem = f64>,
    D: Dimension,
{
    // NaN passes through so corrupt inputs surface as a non-finite loss
    x.mapv(|v| if v < 0.0 { 0.0 } else { v })
}

pub fn softmax(m: ArrayView1<f64>) -> Result<Array1<f64>> {
    if m.is_empty() {
        return Err(Error::Numeric("softmax of an empty vector".into()));
    }
    let mut out = m.to_owned();
    softmax_in_place(out.view_mut().into_slice().expect("owned vector is contiguous"))?;
    Ok(out)
}

/// Row-wise softmax of a `(n, K)` logit matrix.
pub fn softmax_rows<S: Data<Elem = f64>>(m: &ArrayBase<S, Ix2>) -> Result<Array2<f64>> {
    let mut out = m.to_owned();
    for mut row in out.axis_iter_mut(Axis(0)) {
        match row.as_slice_mut() {
            Some(s) => softmax_in_place(s)?,
            None => {
                let mut tmp = row.to_vec();
                softmax_in_place(&mut tmp)?;
                row.assign(&Array1::from(tmp));
            }
        }
    }
    Ok(out)
}

fn softmax_in_place(v: &mut [f64]) -> Result<()> {
    if let Some(bad) = v.iter().find(|x| !x.is_finite()) {
        return Err(Error::Numeric(format!("softmax input contains {bad}")));
    }
    let max = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for x in v.iter_mut() {
        *x = (*x - max).exp();
        sum += *x;
    }
    for x in v.iter_mut() {
        *x /= sum;
    }
    Ok(())
}

/// Label-smoothed target `s'(k) = (1 - eps) * [k == y] + eps / K`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SmoothedTarget {
    pub label: usize,
    pub classes: usize,
    pub epsilon: f64,
}

impl SmoothedTarget {
    pub fn new(label: usize, classes: usize, epsilon: f64) -> Result<Self> {
        if classes == 0 {
            return Err(Error::Contract("class count must be positive".into()));
        }
        if label >= classes {
            return Err(Error::LabelOutOfRange { label, classes });
        }
        check_epsilon(epsilon)?;
        Ok(Self {
            label,
            classes,
            epsilon,
        })
    }

    /// Mass on every class from the uniform prior; also the minimum of `s'`.
    pub fn floor(&self) -> f64 {
        self.epsilon / self.classes as f64
    }

    pub fn get(&self, k: usize) -> f64 {
        if k == self.label {
            (1.0 - self.epsilon) + self.floor()
        } else {
            self.floor()
        }
    }

    pub fn to_array(&self) -> Array1<f64> {
        Array1::from_shape_fn(self.classes, |k| self.get(k))
    }
}

pub(crate) fn check_epsilon(epsilon: f64) -> Result<()> {
    if !(0.0..1.0).contains(&epsilon) {
        return Err(Error::Contract(format!("label smoothing {epsilon} outside [0, 1)")));
    }
    Ok(())
}

/// `H(s', r) = -sum_k s'(k) ln r(k)` for a predicted distribution `r`.
pub fn cross_entropy_lsr(r: ArrayView1<f64>, label: usize, epsilon: f64, classes: usize) -> Result<f64> {
    if r.len() != classes {
        return Err(Error::Contract(format!(
            "prediction has {} entries, expected {classes}",
            r.len()
        )));
    }
    let target = SmoothedTarget::new(label, classes, epsilon)?;
    check_distribution(r)?;
    Ok(-r
        .iter()
        .enumerate()
        .map(|(k, &p)| target.get(k) * p.max(LOG_FLOOR).ln())
        .sum::<f64>())
}

fn check_distribution(r: ArrayView1<f64>) -> Result<()> {
    if let Some(bad) = r.iter().find(|p| !p.is_finite() || **p < 0.0) {
        return Err(Error::Contract(format!(
            "probability entry {bad} is not a nonnegative number"
        )));
    }
    let sum: f64 = r.sum();
    if (sum - 1.0).abs() > NORMALIZATION_TOL {
        return Err(Error::Contract(format!("probabilities sum to {sum}, not 1")));
    }
    Ok(())
}

/// Gradient of `cross_entropy_lsr(softmax(m), ..)` with respect to the logits `m`,
/// given `probs = softmax(m)`.
pub fn lsr_logit_gradient(probs: ArrayView1<f64>, target: &SmoothedTarget) -> Array1<f64> {
    Array1::from_shape_fn(probs.len(), |k| probs[k] - target.get(k))
}

/// Mean smoothed cross-entropy over the rows of `probs` and the matching
/// gradient on the logits (already divided by the batch size).
pub fn batch_loss_and_gradient(probs: &Array2<f64>, labels: &[usize], epsilon: f64) -> Result<(f64, Array2<f64>)> {
    let (n, k) = probs.dim();
    if n != labels.len() {
        return Err(Error::Contract(format!("{n} predictions for {} labels", labels.len())));
    }
    if n == 0 {
        return Err(Error::Contract("empty batch".into()));
    }
    let mut total = 0.0;
    let mut grad = Array2::zeros((n, k));
    for (i, (row, &y)) in probs.axis_iter(Axis(0)).zip(labels).enumerate() {
        total += cross_entropy_lsr(row, y, epsilon, k)?;
        let target = SmoothedTarget::new(y, k, epsilon)?;
        grad.row_mut(i).assign(&(lsr_logit_gradient(row, &target) / n as f64));
    }
    Ok((total / n as f64, grad))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn relu_examples() {
        assert_eq!(relu(&array![-3.0, 0.0, 2.5]), array![0.0, 0.0, 2.5]);
        assert!(relu(&array![f64::NAN])[0].is_nan());
    }

    #[test]
    fn softmax_examples() {
        let p = softmax(array![0.0, 0.0, 0.0].view()).unwrap();
        for v in p.iter() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
        let c = -4.2;
        let p = softmax(array![c, c + 2f64.ln()].view()).unwrap();
        assert!((p[0] - 1.0 / 3.0).abs() < 1e-15 && (p[1] - 2.0 / 3.0).abs() < 1e-15);
        let p = softmax(array![1000.0, 1000.0].view()).unwrap();
        assert_eq!(p, array![0.5, 0.5]);
    }

    #[test]
    fn softmax_rejects_non_finite() {
        assert!(matches!(softmax(array![1.0, f64::NAN].view()), Err(Error::Numeric(_))));
        assert!(softmax_rows(&array![[0.0, f64::INFINITY]]).is_err());
    }

    #[test]
    fn cross_entropy_examples() {
        let r = array![0.0, 0.0, 1.0, 0.0];
        assert_eq!(cross_entropy_lsr(r.view(), 2, 0.0, 4).unwrap(), 0.0);
        let r = Array1::from_elem(5, 0.2);
        assert!((cross_entropy_lsr(r.view(), 1, 0.0, 5).unwrap() - 5f64.ln()).abs() < 1e-14);
    }

    #[test]
    fn cross_entropy_contract() {
        let r = array![0.5, 0.6];
        assert!(matches!(
            cross_entropy_lsr(r.view(), 0, 0.0, 2),
            Err(Error::Contract(_))
        ));
        let r = array![0.5, 0.5];
        assert!(cross_entropy_lsr(r.view(), 2, 0.0, 2).is_err());
        assert!(cross_entropy_lsr(r.view(), 0, 1.0, 2).is_err());
        assert!(cross_entropy_lsr(r.view(), 0, 0.0, 3).is_err());
    }

    #[test]
    fn smoothed_target_floor_is_exact() {
        let t = SmoothedTarget::new(1, 7, 0.3).unwrap();
        let s = t.to_array();
        let min = s.iter().copied().fold(f64::INFINITY, f64::min);
        assert_eq!(min, 0.3 / 7.0);
        assert!((s.sum() - 1.0).abs() < 1e-15);
    }

    #[test]
    fn batch_gradient_rows_sum_to_zero() {
        let probs = softmax_rows(&array![[1.0, 2.0, 0.5], [0.0, -1.0, 3.0]]).unwrap();
        let (loss, g) = batch_loss_and_gradient(&probs, &[0, 2], 0.1).unwrap();
        assert!(loss > 0.0);
        for row in g.rows() {
            assert!(row.sum().abs() < 1e-15);
        }
    }

    proptest::proptest! {
        #[test]
        fn softmax_is_shift_invariant(m in proptest::collection::vec(-30.0f64..30.0, 1..12), c in -50.0f64..50.0) {
            let a = softmax(Array1::from(m.clone()).view()).unwrap();
            let b = softmax(Array1::from(m).mapv(|v| v + c).view()).unwrap();
            proptest::prop_assert!((a.sum() - 1.0).abs() < 1e-12);
            for (x, y) in a.iter().zip(&b) {
                proptest::prop_assert!((x - y).abs() <= 1e-12 * x.max(*y).max(1e-300));
            }
        }

        #[test]
        fn smoothing_bounds_the_loss(
            m in proptest::collection::vec(-5.0f64..5.0, 2..10),
            eps in 0.0f64..0.9,
            pick in 0usize..100,
        ) {
            let k = m.len();
            let label = pick % k;
            let p = softmax(Array1::from(m).view()).unwrap();
            let loss = cross_entropy_lsr(p.view(), label, eps, k).unwrap();
            let target = SmoothedTarget::new(label, k, eps).unwrap();
            let s = target.to_array();
            let entropy: f64 = s.iter().filter(|v| **v > 0.0).map(|v| -v * v.ln()).sum();
            // Gibbs: cross entropy never undercuts the target's own entropy
            proptest::prop_assert!(loss >= entropy - 1e-12);
            let g = lsr_logit_gradient(p.view(), &target);
            proptest::prop_assert!(g.sum().abs() < 1e-12);
        }
    }
}
