//! Global space-time average pooling and the linear softmax classifier.

use crate::autodiff::{Tape, Var};
use crate::error::{dim_err, Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{softmax_rows, Tensor};

#[derive(Clone, Debug, PartialEq)]
pub struct ClassifierParams<S> {
    /// `[num_classes, C]`
    pub w_cls: Tensor<S>,
    /// `[num_classes]`
    pub b_cls: Tensor<S>,
}

impl<S: Scalar> ClassifierParams<S> {
    pub fn new(w_cls: Tensor<S>, b_cls: Tensor<S>) -> Result<Self> {
        match (w_cls.shape(), b_cls.shape()) {
            ([k, _], [kb]) if k == kb => Ok(Self { w_cls, b_cls }),
            (w, b) => dim_err("classifier", format!("weight {w:?} with bias {b:?}")),
        }
    }

    pub fn num_classes(&self) -> usize {
        self.w_cls.shape()[0]
    }

    pub fn dim(&self) -> usize {
        self.w_cls.shape()[1]
    }
}

/// `H~ = mean_i H_i`, then `W_cls H~ + b_cls`. Returns `(pooled [1, C], logits [1, K])`.
pub fn pool_and_classify_on<S: Scalar>(tape: &mut Tape<S>, h: Var, w_cls: Var, b_cls: Var) -> Result<(Var, Var)> {
    let pooled = tape.mean_rows(h)?;
    let logits = tape.matmul_nt(pooled, w_cls)?;
    let logits = tape.add_row(logits, b_cls)?;
    Ok((pooled, logits))
}

#[derive(Clone, Debug, PartialEq)]
pub struct Classification<S> {
    pub pooled: Vec<S>,
    pub logits: Vec<S>,
    pub probs: Vec<S>,
}

pub fn pool_and_classify<S: Scalar>(h: &Tensor<S>, params: &ClassifierParams<S>) -> Result<Classification<S>> {
    match h.shape() {
        [n, c] if *n >= 1 && *c == params.dim() => {}
        s => return dim_err("pool_and_classify", format!("features {s:?} for classifier dim {}", params.dim())),
    }
    let mut tape = Tape::new();
    let hv = tape.leaf(h);
    let w = tape.leaf(&params.w_cls);
    let b = tape.leaf(&params.b_cls);
    let (pooled, logits) = pool_and_classify_on(&mut tape, hv, w, b)?;
    let logits = tape.value(logits).to_vec();
    let mut probs = logits.clone();
    softmax_rows(&mut probs, logits.len());
    Ok(Classification {
        pooled: tape.value(pooled).to_vec(),
        logits,
        probs,
    })
}

/// `-log softmax(logits)[label]` in log-sum-exp form.
pub fn cross_entropy<S: Scalar>(logits: &[S], label: usize) -> Result<S> {
    if label >= logits.len() {
        return Err(Error::Range(format!("label {label} for {} classes", logits.len())));
    }
    let m = logits.iter().copied().fold(S::neg_infinity(), S::max);
    let lse = m + logits.iter().map(|&z| (z - m).exp()).sum::<S>().ln();
    Ok(lse - logits[label])
}

/// Index of the largest entry; ties go to the lowest index.
pub fn argmax<S: Scalar>(values: &[S]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;

    fn params(w: &[f64], b: &[f64], k: usize) -> ClassifierParams<f64> {
        let c = w.len() / k;
        ClassifierParams::new(
            Tensor::new(vec![k, c], w.to_vec()).unwrap(),
            Tensor::new(vec![k], b.to_vec()).unwrap(),
        )
        .unwrap()
    }

    #[test]
    fn identical_nodes_pool_to_that_feature() {
        let h = Tensor::from_fn(vec![5, 3], |i| [0.5, -1.0, 2.0][i % 3]).unwrap();
        let out = pool_and_classify(&h, &params(&[1.0; 6], &[0.0; 2], 2)).unwrap();
        for (a, b) in out.pooled.iter().zip([0.5, -1.0, 2.0]) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn zero_weights_give_uniform_probabilities() {
        let h = Tensor::from_fn(vec![4, 3], |i| i as f64).unwrap();
        let out = pool_and_classify(&h, &params(&[0.0; 12], &[0.0; 4], 4)).unwrap();
        assert!(out.probs.iter().all(|p| (p - 0.25).abs() < 1e-15));
        assert!((cross_entropy(&out.logits, 2).unwrap() - 4f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn hand_example() {
        let h = Tensor::new(vec![2, 1], vec![2.0, 4.0]).unwrap();
        let out = pool_and_classify(&h, &params(&[1.0, -1.0], &[0.0, 0.0], 2)).unwrap();
        assert_eq!(out.logits, vec![3.0, -3.0]);
        let e = (-6f64).exp();
        assert!((out.probs[0] - 1.0 / (1.0 + e)).abs() < 1e-15);
        assert!((out.probs.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        let loss = cross_entropy(&out.logits, 0).unwrap();
        assert!((loss - (1.0 + e).ln()).abs() < 1e-15);
    }

    #[test]
    fn confident_logits_give_near_zero_loss() {
        assert!(cross_entropy(&[50.0, -50.0, 0.0], 0).unwrap() < 1e-20);
        assert!(cross_entropy(&[1.0, 2.0], 2).is_err());
    }

    #[test]
    fn argmax_ties_and_shift() {
        assert_eq!(argmax(&[1.0, 3.0, 3.0, 0.0]), 1);
        assert_eq!(argmax(&[0.0, 0.0]), 0);
        let z = [0.2, -1.0, 0.7];
        let shifted: Vec<f64> = z.iter().map(|x| x + 123.0).collect();
        assert_eq!(argmax(&z), argmax(&shifted));
    }

    #[test]
    fn shape_mismatch_rejected() {
        let h = Tensor::<f64>::zeros(vec![2, 3]).unwrap();
        assert!(pool_and_classify(&h, &params(&[1.0, 1.0], &[0.0, 0.0], 2)).is_err());
        assert!(ClassifierParams::new(Tensor::<f64>::zeros(vec![2, 3]).unwrap(), Tensor::zeros(vec![3]).unwrap()).is_err());
    }
}
