use std::collections::hash_map::DefaultHasher;
use std::hash::{Hash, Hasher};

use crate::tensor::{Scalar, Tensor};

/// Access to a model's tensors by stable, dotted names.
pub trait Parameters<T: Scalar> {
    fn named(&self) -> Vec<(String, &Tensor<T>)>;
    fn named_mut(&mut self) -> Vec<(String, &mut Tensor<T>)>;

    fn num_parameters(&self) -> usize {
        self.named().iter().map(|(_, t)| t.numel()).sum()
    }

    /// Hash over names, shapes and exact bit patterns of every tensor.
    fn fingerprint(&self) -> u64 {
        let mut h = DefaultHasher::new();
        for (name, t) in self.named() {
            name.hash(&mut h);
            t.shape().hash(&mut h);
            for v in t.data() {
                v.as_f64().to_bits().hash(&mut h);
            }
        }
        h.finish()
    }
}

/// Glorot-normal standard deviation for a `fan_in x fan_out` matrix.
pub(crate) fn glorot_std(fan_in: usize, fan_out: usize) -> f64 {
    (2.0 / (fan_in + fan_out) as f64).sqrt()
}
