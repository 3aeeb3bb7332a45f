use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::netgraph::SegmentedNetwork;
use crate::tensor::Scalar;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PruneScope {
    /// The requested fraction of every weight tensor.
    PerTensor,
    /// The requested fraction of all weights pooled together.
    Global,
}

impl FromStr for PruneScope {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "per_tensor" => Ok(PruneScope::PerTensor),
            "global" => Ok(PruneScope::Global),
            _ => Err(Error::Config(format!("unknown prune scope '{s}' (expected per_tensor or global)"))),
        }
    }
}

impl fmt::Display for PruneScope {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            PruneScope::PerTensor => "per_tensor",
            PruneScope::Global => "global",
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PruneSpec {
    pub sparsity: f64,
    pub scope: PruneScope,
    pub fine_tune_epochs: usize,
}

/// Convolution and linear weights; biases and normalization are never pruned.
pub fn prunable(name: &str) -> bool {
    name.ends_with(".weight")
}

/// Masks the smallest-magnitude prunable weights to zero and returns the
/// achieved zero fraction over prunable weights. Ties go to the lower index.
/// Existing masks are kept.
pub fn magnitude_prune<F: Scalar>(net: &mut SegmentedNetwork<F>, spec: &PruneSpec) -> Result<f64> {
    if !(0.0..1.0).contains(&spec.sparsity) {
        return Err(Error::Config(format!("sparsity must lie in [0, 1), got {}", spec.sparsity)));
    }
    let targets: Vec<usize> = net
        .params()
        .iter()
        .enumerate()
        .filter(|(_, p)| prunable(&p.name))
        .map(|(i, _)| i)
        .collect();
    let mut drop: Vec<Vec<usize>> = vec![Vec::new(); targets.len()];
    let by_magnitude = |a: &(f64, usize, usize), b: &(f64, usize, usize)| {
        a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2))
    };
    match spec.scope {
        PruneScope::PerTensor => {
            for (t, &pi) in targets.iter().enumerate() {
                let data = net.params()[pi].value.data();
                let count = (spec.sparsity * data.len() as f64).round() as usize;
                let mut order: Vec<(f64, usize, usize)> =
                    data.iter().enumerate().map(|(i, v)| (v.as_f64().abs(), t, i)).collect();
                order.sort_by(by_magnitude);
                drop[t] = order[..count].iter().map(|e| e.2).collect();
            }
        }
        PruneScope::Global => {
            let mut order: Vec<(f64, usize, usize)> = targets
                .iter()
                .enumerate()
                .flat_map(|(t, &pi)| {
                    net.params()[pi]
                        .value
                        .data()
                        .iter()
                        .enumerate()
                        .map(move |(i, v)| (v.as_f64().abs(), t, i))
                })
                .collect();
            let count = (spec.sparsity * order.len() as f64).round() as usize;
            order.sort_by(by_magnitude);
            for e in &order[..count] {
                drop[e.1].push(e.2);
            }
        }
    }
    let mut zeros = 0;
    let mut total = 0;
    for (t, &pi) in targets.iter().enumerate() {
        let p = &mut net.params_mut()[pi];
        if !drop[t].is_empty() {
            let mut mask = p.mask.clone().unwrap_or_else(|| vec![true; p.value.len()]);
            for &i in &drop[t] {
                mask[i] = false;
            }
            p.set_mask(mask);
        }
        zeros += p.mask.as_ref().map_or(0, |m| m.iter().filter(|&&k| !k).count());
        total += p.value.len();
    }
    Ok(zeros as f64 / total.max(1) as f64)
}
