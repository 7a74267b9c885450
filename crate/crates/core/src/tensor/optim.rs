use crate::error::{Error, Result};
use crate::tensor::ParamStore;

/// One SGD step with L2 weight decay: p <- p - lr * (grad + wd * p).
/// Consumes (clears) the gradients; a parameter without a gradient is an error.
pub fn sgd_step(params: &mut ParamStore, learning_rate: f32, weight_decay: f32) -> Result<()> {
    for (name, tensor) in params.tensors_mut() {
        let grad = tensor
            .take_grad()
            .ok_or_else(|| Error::MissingGrad { name: name.to_string() })?;
        tensor.update_data(|data| {
            for (p, g) in data.iter_mut().zip(&grad) {
                *p -= learning_rate * (g + weight_decay * *p);
            }
        });
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{Tape, Tensor};

    fn store_with(value: Vec<f32>) -> ParamStore {
        let mut store = ParamStore::new();
        let n = value.len();
        store.register("p", Tensor::param(vec![n], value).unwrap());
        store
    }

    #[test]
    fn plain_step() {
        let mut store = store_with(vec![1.0]);
        store.iter().next().unwrap().1.accumulate_grad(&[1.0]);
        sgd_step(&mut store, 0.1, 0.0).unwrap();
        assert_eq!(store.iter().next().unwrap().1.data(), &[0.9]);
    }

    #[test]
    fn weight_decay_only() {
        let mut store = store_with(vec![1.0]);
        store.iter().next().unwrap().1.accumulate_grad(&[0.0]);
        sgd_step(&mut store, 0.1, 0.0005).unwrap();
        assert_eq!(store.iter().next().unwrap().1.data(), &[0.99995]);
    }

    #[test]
    fn missing_grad_is_rejected() {
        let mut store = store_with(vec![1.0]);
        let err = sgd_step(&mut store, 0.1, 0.0).unwrap_err();
        assert!(matches!(err, Error::MissingGrad { .. }));
    }

    #[test]
    fn converges_on_quadratic() {
        // loss = (p - 3)^2, closed-form minimum at p = 3
        let mut store = store_with(vec![0.0]);
        for _ in 0..2000 {
            let mut tape = Tape::new();
            let p = store.iter().next().unwrap().1.clone();
            let shifted = tape.sub_const(&p, &[3.0]).unwrap();
            let sq = tape.elementwise_mul(&shifted, &shifted).unwrap();
            let loss = tape.sum_all(&sq);
            tape.backward(&loss).unwrap();
            sgd_step(&mut store, 0.05, 0.0).unwrap();
        }
        let p = store.iter().next().unwrap().1.data()[0];
        assert!((p - 3.0).abs() < 1e-6, "p = {p}");
    }
}
