use crate::error::{dim_err, Error, Result};
use crate::tape::Var;
use crate::tensor::{Real, Tensor};

/// `t′ = (1 − ε) t + ε/(K − 1) · (1 − t)`, row by row.
pub fn smooth_targets<T: Real>(targets: &Tensor<T>, eps: f64) -> Result<Tensor<T>> {
    if !(0.0..1.0).contains(&eps) {
        return Err(Error::Config(format!(
            "label smoothing must lie in [0, 1), got {eps}"
        )));
    }
    let s = targets.shape();
    if s.len() != 2 {
        return dim_err(format!("targets must be [B, K], got {s:?}"));
    }
    let k = s[1];
    if eps == 0.0 {
        return Ok(targets.clone());
    }
    if k < 2 {
        return Err(Error::Config(
            "label smoothing needs at least two classes".into(),
        ));
    }
    let keep = T::from_f64(1.0 - eps);
    let share = T::from_f64(eps / (k as f64 - 1.0));
    Ok(targets.map(|t| keep * t + share * (T::ONE - t)))
}

/// Mean over the batch of `−Σ t′ log softmax(logits)`.
pub fn label_smoothed_cross_entropy<'t, T: Real>(
    logits: Var<'t, T>,
    targets: &Tensor<T>,
    eps: f64,
) -> Result<Var<'t, T>> {
    let s = logits.shape();
    if s.as_slice() != targets.shape() || s.len() != 2 {
        return dim_err(format!(
            "cross entropy: logits {s:?} vs targets {:?}",
            targets.shape()
        ));
    }
    let smoothed = smooth_targets(targets, eps)?;
    let t = logits.tape().constant(smoothed);
    let picked = logits.log_softmax_rows()?.mul(t)?.sum_all();
    Ok(picked.scale(T::from_f64(-1.0 / s[0] as f64)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tape::Tape;

    #[test]
    fn uniform_logits_give_ln_k() {
        let tape = Tape::<f64>::new();
        let logits = tape.param(Tensor::zeros([3, 5]));
        let targets = Tensor::from_fn([3, 5], |i| if i % 5 == i / 5 { 1.0 } else { 0.0 });
        for eps in [0.0, 0.1, 0.5] {
            let loss = label_smoothed_cross_entropy(logits, &targets, eps).unwrap();
            assert!((loss.value().data()[0] - 5f64.ln()).abs() < 1e-15);
        }
    }

    #[test]
    fn eps_zero_is_plain_cross_entropy() {
        let tape = Tape::<f64>::new();
        let logits = tape.param(Tensor::new([1, 3], vec![1.0, 2.0, 3.0]).unwrap());
        let t = Tensor::new([1, 3], vec![0.0, 0.0, 1.0]).unwrap();
        let loss = label_smoothed_cross_entropy(logits, &t, 0.0)
            .unwrap()
            .value()
            .data()[0];
        let lse = (1f64.exp() + 2f64.exp() + 3f64.exp()).ln();
        assert!((loss - (lse - 3.0)).abs() < 1e-14);
    }

    #[test]
    fn smoothing_rows_stay_stochastic() {
        let t = Tensor::new([2, 4], vec![1.0, 0.0, 0.0, 0.0, 0.3, 0.7, 0.0, 0.0]).unwrap();
        let s = smooth_targets(&t, 0.1).unwrap();
        assert!((s.data()[0] - 0.9).abs() < 1e-15);
        assert!((s.data()[1] - 0.1 / 3.0).abs() < 1e-15);
        for row in s.data().chunks(4) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-15);
        }
    }

    #[test]
    fn single_class_smoothing_is_rejected() {
        let t = Tensor::<f64>::new([1, 1], vec![1.0]).unwrap();
        assert!(matches!(smooth_targets(&t, 0.1), Err(Error::Config(_))));
        assert!(smooth_targets(&t, 0.0).is_ok());
        assert!(smooth_targets(&t, 1.0).is_err());
    }
}
