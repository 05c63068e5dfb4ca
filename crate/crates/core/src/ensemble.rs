//! Late fusion of per-model class probabilities and the evaluation protocol.

use serde::{Deserialize, Serialize};

use crate::error::{invalid, shape_err, Result};

/// Tolerance for a probability vector summing to one.
pub const SIMPLEX_TOL: f64 = 1e-6;

/// Weights for the text (`w1`) and image (`w2`) predictions.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FusionWeights {
    pub w1: f64,
    pub w2: f64,
}

impl Default for FusionWeights {
    fn default() -> Self {
        Self { w1: 0.5, w2: 0.5 }
    }
}

impl FusionWeights {
    pub fn new(w1: f64, w2: f64) -> Result<Self> {
        let w = Self { w1, w2 };
        w.validate()?;
        Ok(w)
    }

    pub fn validate(&self) -> Result<()> {
        if self.w1 < 0.0 || self.w2 < 0.0 || (self.w1 + self.w2 - 1.0).abs() > 1e-9 {
            return invalid(format!("fusion weights ({}, {}) must be nonnegative and sum to 1", self.w1, self.w2));
        }
        Ok(())
    }
}

/// Checks that `p` is a probability vector.
pub fn check_prediction(p: &[f64]) -> Result<()> {
    if p.is_empty() {
        return invalid("empty prediction");
    }
    if p.iter().any(|v| !(*v >= 0.0)) {
        return invalid("prediction has a negative or NaN entry");
    }
    let s: f64 = p.iter().sum();
    if (s - 1.0).abs() > SIMPLEX_TOL {
        return invalid(format!("prediction sums to {s}"));
    }
    Ok(())
}

/// Weighted sum of `N` predictions with weights summing to one.
pub fn fuse_many(preds: &[&[f64]], weights: &[f64]) -> Result<Vec<f64>> {
    if preds.is_empty() || preds.len() != weights.len() {
        return shape_err(format!("{} predictions for {} weights", preds.len(), weights.len()));
    }
    if weights.iter().any(|w| *w < 0.0) || (weights.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
        return invalid("fusion weights must be nonnegative and sum to 1");
    }
    let c = preds[0].len();
    if preds.iter().any(|p| p.len() != c) {
        return shape_err("predictions differ in class count");
    }
    let mut out = vec![0.0; c];
    for (p, &w) in preds.iter().zip(weights) {
        for (o, v) in out.iter_mut().zip(p.iter()) {
            *o += w * v;
        }
    }
    Ok(out)
}

/// `w1 * p_text + w2 * p_image`.
pub fn fuse(p_text: &[f64], p_image: &[f64], w: FusionWeights) -> Result<Vec<f64>> {
    w.validate()?;
    fuse_many(&[p_text, p_image], &[w.w1, w.w2])
}

/// Argmax, taking the lowest index among ties.
pub fn predict_class(p: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in p.iter().enumerate() {
        if v > p[best] {
            best = i;
        }
    }
    best
}

/// Fraction of positions where `pred == label`.
pub fn evaluate(pred: &[usize], labels: &[usize]) -> Result<f64> {
    if pred.len() != labels.len() {
        return shape_err(format!("{} predictions for {} labels", pred.len(), labels.len()));
    }
    if pred.is_empty() {
        return Ok(0.0);
    }
    Ok(pred.iter().zip(labels).filter(|(a, b)| a == b).count() as f64 / pred.len() as f64)
}

/// Accuracy of argmax predictions from probability rows.
pub fn accuracy_of(probs: &[Vec<f64>], labels: &[usize]) -> Result<f64> {
    let pred: Vec<usize> = probs.iter().map(|p| predict_class(p)).collect();
    evaluate(&pred, labels)
}

pub fn median_accuracy(accs: &[f64]) -> Result<f64> {
    if accs.is_empty() {
        return invalid("median of an empty list");
    }
    let mut v = accs.to_vec();
    v.sort_by(|a, b| a.total_cmp(b));
    let m = v.len() / 2;
    Ok(if v.len() % 2 == 1 { v[m] } else { 0.5 * (v[m - 1] + v[m]) })
}

pub fn mean_accuracy(accs: &[f64]) -> Result<f64> {
    if accs.is_empty() {
        return invalid("mean of an empty list");
    }
    Ok(accs.iter().sum::<f64>() / accs.len() as f64)
}

/// `{0, step, 2 step, ..} ∪ {0.5, 1}`, ascending, all within `[0, 1]`.
pub fn candidate_weights(step: f64) -> Result<Vec<f64>> {
    if !(step > 0.0 && step <= 1.0) {
        return invalid(format!("grid step {step} outside (0, 1]"));
    }
    let n = (1.0 / step + 1e-9).floor() as usize;
    let mut c: Vec<f64> = (0..=n).map(|i| ((i as f64 * step) * 1e12).round() / 1e12).collect();
    c.extend([0.5, 1.0]);
    c.sort_by(|a, b| a.total_cmp(b));
    c.dedup_by(|a, b| (*a - *b).abs() < 1e-12);
    Ok(c)
}

/// Accuracy-maximizing `(w1, 1 - w1)` over the candidate grid; ties go to
/// the `w1` closest to 0.5, then to the lower `w1`.
pub fn grid_search_weights(text: &[Vec<f64>], image: &[Vec<f64>], labels: &[usize], step: f64) -> Result<FusionWeights> {
    let cands = candidate_weights(step)?;
    if labels.is_empty() {
        return invalid("empty validation set");
    }
    if text.len() != labels.len() || image.len() != labels.len() {
        return shape_err("validation predictions and labels differ in length");
    }
    let mut best: Option<(usize, f64)> = None;
    for &w1 in &cands {
        let w = FusionWeights { w1, w2: 1.0 - w1 };
        let mut hits = 0;
        for ((t, i), &y) in text.iter().zip(image).zip(labels) {
            if predict_class(&fuse(t, i, w)?) == y {
                hits += 1;
            }
        }
        let better = match best {
            None => true,
            Some((h, bw)) => hits > h || (hits == h && (w1 - 0.5).abs() < (bw - 0.5).abs() - 1e-12),
        };
        if better {
            best = Some((hits, w1));
        }
    }
    let w1 = best.unwrap().1;
    Ok(FusionWeights { w1, w2: 1.0 - w1 })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn fuse_examples() {
        let f = fuse(&[0.2, 0.8], &[0.7, 0.3], FusionWeights::default()).unwrap();
        assert!((f[0] - 0.45).abs() < 1e-15 && (f[1] - 0.55).abs() < 1e-15);
        assert_eq!(fuse(&[0.2, 0.8], &[0.7, 0.3], FusionWeights::new(1.0, 0.0).unwrap()).unwrap(), vec![0.2, 0.8]);
        assert_eq!(FusionWeights::default(), FusionWeights { w1: 0.5, w2: 0.5 });
        assert!(fuse(&[1.0], &[0.5, 0.5], FusionWeights::default()).is_err());
        assert!(FusionWeights::new(0.6, 0.6).is_err());
    }

    #[test]
    fn argmax_examples() {
        assert_eq!(predict_class(&[0.45, 0.55]), 1);
        assert_eq!(predict_class(&[0.25; 4]), 0);
    }

    #[test]
    fn eval_and_reducers() {
        assert_eq!(evaluate(&[0, 1, 0, 0], &[0, 1, 2, 3]).unwrap(), 0.5);
        assert_eq!(evaluate(&[2, 2], &[2, 2]).unwrap(), 1.0);
        assert_eq!(median_accuracy(&[0.9, 0.7, 0.8]).unwrap(), 0.8);
        assert_eq!(median_accuracy(&[0.3; 10]).unwrap(), 0.3);
        assert_eq!(median_accuracy(&[0.1, 0.4, 0.2, 0.3]).unwrap(), 0.25);
        assert!(median_accuracy(&[]).is_err());
        assert!((mean_accuracy(&[0.1, 0.2, 0.6]).unwrap() - 0.3).abs() < 1e-15);
    }

    #[test]
    fn candidate_sets() {
        assert_eq!(candidate_weights(0.5).unwrap(), vec![0.0, 0.5, 1.0]);
        assert_eq!(candidate_weights(0.1).unwrap().len(), 11);
        assert_eq!(candidate_weights(0.3).unwrap(), vec![0.0, 0.3, 0.5, 0.6, 0.9, 1.0]);
        assert!(candidate_weights(0.0).is_err());
    }

    #[test]
    fn grid_prefers_dominant_model() {
        let labels = vec![0, 1, 2, 0, 1, 2];
        let text: Vec<Vec<f64>> = labels.iter().map(|&y| (0..3).map(|c| if c == y { 1.0 } else { 0.0 }).collect()).collect();
        // image always confidently predicts class 2
        let image = vec![vec![0.0, 0.0, 1.0]; 6];
        let w = grid_search_weights(&text, &image, &labels, 0.5).unwrap();
        assert!(w.w1 >= 0.5);
        let w = grid_search_weights(&text, &image, &labels, 0.1).unwrap();
        let acc = |w1: f64| {
            let p: Vec<usize> = text.iter().zip(&image).map(|(t, i)| predict_class(&fuse(t, i, FusionWeights { w1, w2: 1.0 - w1 }).unwrap())).collect();
            evaluate(&p, &labels).unwrap()
        };
        assert_eq!(acc(w.w1), 1.0);
        assert!(grid_search_weights(&[], &[], &[], 0.1).is_err());
    }

    fn simplex(c: usize) -> impl Strategy<Value = Vec<f64>> {
        prop::collection::vec(0.001f64..1.0, c).prop_map(|v| {
            let s: f64 = v.iter().sum();
            v.into_iter().map(|x| x / s).collect()
        })
    }

    proptest! {
        #[test]
        fn fuse_stays_on_simplex((a, b) in (2usize..8).prop_flat_map(|c| (simplex(c), simplex(c))), w1 in 0.0f64..=1.0) {
            let f = fuse(&a, &b, FusionWeights { w1, w2: 1.0 - w1 }).unwrap();
            prop_assert!(check_prediction(&f).is_ok());
        }

        #[test]
        fn fuse_idempotent_on_agreement(a in (2usize..8).prop_flat_map(simplex), w1 in 0.0f64..=1.0) {
            let f = fuse(&a, &a, FusionWeights { w1, w2: 1.0 - w1 }).unwrap();
            for (x, y) in f.iter().zip(&a) {
                prop_assert!((x - y).abs() < 1e-12);
            }
        }

        #[test]
        fn argmax_scale_invariant(a in (1usize..10).prop_flat_map(simplex), s in 0.01f64..100.0) {
            let scaled: Vec<f64> = a.iter().map(|v| v * s).collect();
            prop_assert_eq!(predict_class(&a), predict_class(&scaled));
        }

        #[test]
        fn grid_never_worse_than_even_split(seed in 0u64..1000, step in prop::sample::select(vec![0.1, 0.2, 0.25, 0.3, 0.5, 1.0])) {
            use rand::{Rng, SeedableRng};
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let n = 20;
            let row = |rng: &mut rand_chacha::ChaCha8Rng| {
                let v: Vec<f64> = (0..3).map(|_| rng.random::<f64>() + 1e-3).collect();
                let s: f64 = v.iter().sum();
                v.into_iter().map(|x| x / s).collect::<Vec<f64>>()
            };
            let text: Vec<_> = (0..n).map(|_| row(&mut rng)).collect();
            let image: Vec<_> = (0..n).map(|_| row(&mut rng)).collect();
            let labels: Vec<usize> = (0..n).map(|_| rng.random_range(0..3)).collect();
            let w = grid_search_weights(&text, &image, &labels, step).unwrap();
            let cands = candidate_weights(step).unwrap();
            prop_assert!(cands.contains(&w.w1));
            let acc = |w1: f64| {
                let p: Vec<usize> = text.iter().zip(&image).map(|(t, i)| predict_class(&fuse(t, i, FusionWeights { w1, w2: 1.0 - w1 }).unwrap())).collect();
                evaluate(&p, &labels).unwrap()
            };
            prop_assert!(acc(w.w1) >= acc(0.5));
        }
    }
}
