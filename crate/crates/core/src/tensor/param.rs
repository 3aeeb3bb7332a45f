use super::{Scalar, Tensor};

/// A trainable tensor with its optimizer state and optional pruning mask.
#[derive(Clone, Debug, PartialEq)]
pub struct Parameter<F> {
    pub name: String,
    pub value: Tensor<F>,
    pub momentum: Vec<F>,
    /// `false` marks a pruned element, held at exactly zero.
    pub mask: Option<Vec<bool>>,
}

impl<F: Scalar> Parameter<F> {
    pub fn new(name: impl Into<String>, value: Tensor<F>) -> Self {
        let momentum = vec![F::zero(); value.len()];
        Parameter {
            name: name.into(),
            value,
            momentum,
            mask: None,
        }
    }

    /// Zeroes masked elements of the value and momentum buffer.
    pub fn apply_mask(&mut self) {
        if let Some(mask) = &self.mask {
            for ((v, m), &keep) in self
                .value
                .data_mut()
                .iter_mut()
                .zip(self.momentum.iter_mut())
                .zip(mask)
            {
                if !keep {
                    *v = F::zero();
                    *m = F::zero();
                }
            }
        }
    }

    pub fn set_mask(&mut self, mask: Vec<bool>) {
        assert_eq!(mask.len(), self.value.len(), "mask length for {}", self.name);
        self.mask = Some(mask);
        self.apply_mask();
    }

    pub fn zero_count(&self) -> usize {
        self.value.data().iter().filter(|v| **v == F::zero()).count()
    }
}

/// A non-trainable per-network tensor, such as a running statistic.
#[derive(Clone, Debug, PartialEq)]
pub struct Buffer<F> {
    pub name: String,
    pub value: Tensor<F>,
}
