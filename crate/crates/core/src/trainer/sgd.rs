use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::tensor::{Parameter, Scalar, Tensor};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SgdConfig {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
}

/// One momentum step on every parameter accepted by `trainable`:
/// `buf ← m·buf + g + wd·v`, `v ← v − lr·buf`, then the pruning mask is
/// re-applied.
pub fn sgd_step<F: Scalar>(
    params: &mut [Parameter<F>],
    grads: &BTreeMap<String, (Tensor<F>, bool)>,
    cfg: SgdConfig,
    trainable: impl Fn(&str) -> bool,
) -> Result<()> {
    let (lr, m, wd) = (F::from_f64(cfg.lr), F::from_f64(cfg.momentum), F::from_f64(cfg.weight_decay));
    for p in params.iter_mut().filter(|p| trainable(&p.name)) {
        let (g, _) = grads
            .get(&p.name)
            .ok_or_else(|| Error::Internal(format!("no gradient for trainable parameter '{}'", p.name)))?;
        if g.shape() != p.value.shape() {
            return Err(Error::Internal(format!(
                "gradient for '{}' has shape {:?}, parameter {:?}",
                p.name,
                g.shape(),
                p.value.shape()
            )));
        }
        if p.momentum.len() != p.value.len() {
            p.momentum = vec![F::zero(); p.value.len()];
        }
        for ((v, b), &g) in p.value.data_mut().iter_mut().zip(p.momentum.iter_mut()).zip(g.data()) {
            *b = m * *b + g + wd * *v;
            *v = *v - lr * *b;
        }
        p.apply_mask();
    }
    Ok(())
}
