//! Bernoulli likelihood for binary images, parameterized by logits.

use ndarray::IxDyn;
use rand::Rng;

use crate::error::{Error, Result};
use crate::tensor::{Arr, Tensor};

/// Per-pixel logits, `[N, C, H, W]`.
pub struct BernoulliParams {
    pub logits: Tensor,
}

impl BernoulliParams {
    pub fn new(logits: Tensor) -> Result<Self> {
        if logits.shape().len() != 4 {
            return Err(Error::shape(format!(
                "bernoulli logits must be [N, C, H, W], got {:?}",
                logits.shape()
            )));
        }
        Ok(BernoulliParams { logits })
    }
}

/// Log-likelihood of binary `targets` as `t * x - softplus(x)`, summed over
/// channels; numerically stable for saturated logits. Returns `[N, H, W]`.
pub fn bernoulli_log_prob(params: &BernoulliParams, targets: &Arr) -> Result<Tensor> {
    let shape = params.logits.shape();
    if targets.shape() != shape.as_slice() {
        return Err(Error::shape(format!(
            "targets {:?} vs logits {:?}",
            targets.shape(),
            shape
        )));
    }
    if targets.iter().any(|&v| v != 0.0 && v != 1.0) {
        return Err(Error::data("bernoulli targets must be 0 or 1".to_string()));
    }
    let t = params.logits.tape().constant(targets.clone());
    let ll = params.logits.mul(&t).sub(&params.logits.softplus_beta(1.0));
    Ok(ll.sum_axis(1))
}

/// Draw binary pixels; `threshold_only` decodes the argmax instead.
pub fn bernoulli_sample<R: Rng>(params: &BernoulliParams, rng: Option<&mut R>) -> Arr {
    let logits = params.logits.value();
    let probs = logits.mapv(crate::tensor::stable_sigmoid);
    match rng {
        Some(r) => {
            let mut out = Arr::zeros(IxDyn(probs.shape()));
            for (o, &p) in out.iter_mut().zip(probs.iter()) {
                *o = f64::from(r.gen::<f64>() < p);
            }
            out
        }
        None => probs.mapv(|p| f64::from(p >= 0.5)),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::check::scalar_fn_grad;
    use crate::tensor::Tape;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn params(tape: &Tape, logit: f64) -> BernoulliParams {
        BernoulliParams::new(tape.leaf(Arr::from_elem(IxDyn(&[1, 1, 1, 1]), logit))).unwrap()
    }

    #[test]
    fn zero_logit_is_log_half() {
        let tape = Tape::new();
        let p = params(&tape, 0.0);
        let t = Arr::from_elem(IxDyn(&[1, 1, 1, 1]), 1.0);
        let ll = bernoulli_log_prob(&p, &t).unwrap().value()[[0, 0, 0]];
        assert!((ll - 0.5f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn saturated_logit_is_near_zero_loss() {
        let tape = Tape::new();
        let p = params(&tape, 40.0);
        let t = Arr::from_elem(IxDyn(&[1, 1, 1, 1]), 1.0);
        let ll = bernoulli_log_prob(&p, &t).unwrap().value()[[0, 0, 0]];
        assert!(ll.abs() < 1e-9, "ll {ll}");
    }

    #[test]
    fn matches_direct_formula() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let tape = Tape::new();
        for _ in 0..100 {
            let x: f64 = rng.gen_range(-6.0..6.0);
            let t = f64::from(rng.gen::<bool>());
            let p = params(&tape, x);
            let ta = Arr::from_elem(IxDyn(&[1, 1, 1, 1]), t);
            let ll = bernoulli_log_prob(&p, &ta).unwrap().value()[[0, 0, 0]];
            let prob = 1.0 / (1.0 + (-x).exp());
            let direct = t * prob.ln() + (1.0 - t) * (1.0 - prob).ln();
            assert!((ll - direct).abs() < 1e-10, "{ll} vs {direct}");
        }
    }

    #[test]
    fn outcome_probabilities_sum_to_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let tape = Tape::new();
        for _ in 0..50 {
            let p = params(&tape, rng.gen_range(-8.0..8.0));
            let mut total = 0.0;
            for t in [0.0, 1.0] {
                let ta = Arr::from_elem(IxDyn(&[1, 1, 1, 1]), t);
                total += bernoulli_log_prob(&p, &ta).unwrap().value()[[0, 0, 0]].exp();
            }
            assert!((total - 1.0).abs() < 1e-6, "sum {total}");
        }
    }

    #[test]
    fn non_binary_targets_rejected() {
        let tape = Tape::new();
        let p = params(&tape, 0.0);
        let t = Arr::from_elem(IxDyn(&[1, 1, 1, 1]), 0.25);
        assert!(matches!(
            bernoulli_log_prob(&p, &t),
            Err(crate::Error::Data(_))
        ));
    }

    #[test]
    fn log_prob_gradcheck() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let logits = Arr::from_shape_fn(IxDyn(&[2, 1, 3, 3]), |_| rng.gen_range(-2.0..2.0));
        let targets = Arr::from_shape_fn(IxDyn(&[2, 1, 3, 3]), |_| f64::from(rng.gen::<bool>()));
        let build = move |ins: &[Arr]| {
            let tape = Tape::new();
            let x = tape.leaf(ins[0].clone());
            let p = BernoulliParams::new(x.clone()).unwrap();
            let ll = bernoulli_log_prob(&p, &targets).unwrap();
            (vec![x], ll.sum_all())
        };
        let err = scalar_fn_grad(&build, &[logits], 1e-5);
        assert!(err < 1e-4, "bernoulli gradcheck max rel err {err}");
    }
}
