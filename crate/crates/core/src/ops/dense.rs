//! Elementwise activation, fully connected layer and classification loss.

use crate::error::{ensure, Result};
use crate::tensor::{Scalar, Shape, Tensor};

pub fn relu<T: Scalar>(input: &Tensor<T>) -> Tensor<T> {
    input.map(|x| if x > T::zero() { x } else { T::zero() })
}

pub fn relu_backward<T: Scalar>(grad_out: &Tensor<T>, input: &Tensor<T>) -> Result<Tensor<T>> {
    grad_out.zip_map(input, |g, x| if x > T::zero() { g } else { T::zero() })
}

/// `input` (N, C, H, W) is flattened to N × (C·H·W); `weight` is (out, C·H·W, 1, 1).
/// Output is (N, out, 1, 1).
pub fn linear<T: Scalar>(input: &Tensor<T>, weight: &Tensor<T>, bias: Option<&Tensor<T>>) -> Result<Tensor<T>> {
    let s = input.shape();
    let ws = weight.shape();
    let feat = s.sample();
    ensure!(
        ws.c * ws.h * ws.w == feat,
        "linear layer expects {} features, input {} has {}",
        ws.c * ws.h * ws.w,
        s,
        feat
    );
    if let Some(b) = bias {
        ensure!(b.numel() == ws.n, "linear bias length {} != {}", b.numel(), ws.n);
    }
    let mut out = Tensor::zeros(Shape::new(s.n, ws.n, 1, 1));
    for n in 0..s.n {
        let x = input.sample(n);
        for o in 0..ws.n {
            let w = &weight.data()[o * feat..(o + 1) * feat];
            let mut acc: T = w.iter().zip(x).map(|(&a, &b)| a * b).sum();
            if let Some(b) = bias {
                acc += b.data()[o];
            }
            out.data_mut()[n * ws.n + o] = acc;
        }
    }
    Ok(out)
}

pub struct LinearGrads<T> {
    pub input: Tensor<T>,
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
}

pub fn linear_backward<T: Scalar>(grad_out: &Tensor<T>, input: &Tensor<T>, weight: &Tensor<T>) -> Result<LinearGrads<T>> {
    let s = input.shape();
    let ws = weight.shape();
    let feat = s.sample();
    ensure!(
        grad_out.shape() == Shape::new(s.n, ws.n, 1, 1),
        "linear gradient shape {} does not match output",
        grad_out.shape()
    );
    let mut gi = Tensor::zeros(s);
    let mut gw = Tensor::zeros(ws);
    let mut gb = Tensor::zeros(Shape::new(ws.n, 1, 1, 1));
    for n in 0..s.n {
        let x = input.sample(n);
        for o in 0..ws.n {
            let g = grad_out.data()[n * ws.n + o];
            gb.data_mut()[o] += g;
            let w = &weight.data()[o * feat..(o + 1) * feat];
            for (gwv, &xv) in gw.data_mut()[o * feat..(o + 1) * feat].iter_mut().zip(x) {
                *gwv += g * xv;
            }
            for (giv, &wv) in gi.data_mut()[n * feat..(n + 1) * feat].iter_mut().zip(w) {
                *giv += g * wv;
            }
        }
    }
    Ok(LinearGrads {
        input: gi,
        weight: gw,
        bias: gb,
    })
}

/// Mean softmax cross-entropy over the batch and its gradient wrt the logits.
pub fn softmax_cross_entropy<T: Scalar>(logits: &Tensor<T>, labels: &[usize]) -> Result<(T, Tensor<T>)> {
    let s = logits.shape();
    let k = s.sample();
    ensure!(labels.len() == s.n, "{} labels for a batch of {}", labels.len(), s.n);
    ensure!(s.n > 0 && k > 0, "empty logits");
    let mut grad = Tensor::zeros(s);
    let mut loss = T::zero();
    let inv_n = T::one() / T::of(s.n as f64);
    for (n, &y) in labels.iter().enumerate() {
        ensure!(y < k, "label {} out of range for {} classes", y, k);
        let z = logits.sample(n);
        let m = z.iter().copied().fold(T::neg_infinity(), T::max);
        let exps: Vec<T> = z.iter().map(|&v| (v - m).exp()).collect();
        let total: T = exps.iter().copied().sum();
        loss += (total.ln() + m - z[y]) * inv_n;
        let g = &mut grad.data_mut()[n * k..(n + 1) * k];
        for (i, (gv, e)) in g.iter_mut().zip(exps).enumerate() {
            let p = e / total;
            *gv = (p - if i == y { T::one() } else { T::zero() }) * inv_n;
        }
    }
    Ok((loss, grad))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn relu_clamps_negatives() {
        let x = Tensor::from_vec(Shape::new(1, 3, 1, 1), vec![-1.0f64, 0.0, 2.0]).unwrap();
        assert_eq!(relu(&x).data(), &[0.0, 0.0, 2.0]);
    }

    #[test]
    fn uniform_logits_give_ln_classes() {
        let z = Tensor::zeros(Shape::new(3, 10, 1, 1));
        let (loss, grad) = softmax_cross_entropy::<f64>(&z, &[0, 4, 9]).unwrap();
        assert!((loss - 10f64.ln()).abs() < 1e-12);
        assert!((loss - 2.302585).abs() < 1e-6);
        // gradient rows sum to zero
        for n in 0..3 {
            assert!(grad.sample(n).iter().sum::<f64>().abs() < 1e-15);
        }
    }

    #[test]
    fn linear_matches_hand_product() {
        let x = Tensor::from_vec(Shape::new(1, 2, 1, 1), vec![1.0f64, 2.0]).unwrap();
        let w = Tensor::from_vec(Shape::new(2, 2, 1, 1), vec![1.0, -1.0, 0.5, 0.25]).unwrap();
        let b = Tensor::from_vec(Shape::new(2, 1, 1, 1), vec![0.1, 0.2]).unwrap();
        let y = linear(&x, &w, Some(&b)).unwrap();
        assert!((y.data()[0] - (-1.0 + 0.1)).abs() < 1e-15);
        assert!((y.data()[1] - (1.0 + 0.2)).abs() < 1e-15);
    }

    #[test]
    fn bad_label_is_rejected() {
        let z = Tensor::<f64>::zeros(Shape::new(1, 3, 1, 1));
        assert!(softmax_cross_entropy(&z, &[3]).is_err());
    }
}
