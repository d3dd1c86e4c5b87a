use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::PerturbationKernel;
use crate::codebook::{Codebook, QuantizedMap};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Uniform draw in `[0, 1)` keyed by `(seed, position)`; independent of the
/// order in which positions are visited.
pub fn keyed_uniform(seed: u64, position: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(position);
    rng.random::<f64>()
}

/// Inverse-CDF draw from one kernel row. Zero-probability entries are never
/// returned.
pub fn sample_row<T: Scalar>(row: &[T], u: f64) -> usize {
    let mut acc = 0.0;
    let mut last_positive = 0;
    for (j, &p) in row.iter().enumerate() {
        let p = p.to_f64_lossy();
        if p <= 0.0 {
            continue;
        }
        last_positive = j;
        acc += p;
        if u < acc {
            return j;
        }
    }
    last_positive
}

/// Resamples every index from its kernel row, one keyed draw per position.
pub fn sample_indices<T: Scalar>(indices: &[usize], kernel: &PerturbationKernel<T>, seed: u64) -> Result<Vec<usize>> {
    if let Some(&bad) = indices.iter().find(|&&i| i >= kernel.k()) {
        return Err(Error::invalid("indices", format!("index {bad} out of range for K={}", kernel.k())));
    }
    Ok(indices
        .iter()
        .enumerate()
        .map(|(pos, &i)| sample_row(kernel.row(i), keyed_uniform(seed, pos as u64)))
        .collect())
}

/// Runtime perturbation of a quantized map: each position's codeword is
/// replaced by a draw from its transition row.
pub fn sample_perturbed<T: Scalar>(
    qm: &QuantizedMap<T>,
    kernel: &PerturbationKernel<T>,
    cb: &Codebook<T>,
    seed: u64,
) -> Result<QuantizedMap<T>> {
    if kernel.k() != cb.k() {
        return Err(Error::invalid(
            "kernel",
            format!("kernel has K={} but codebook has K={}", kernel.k(), cb.k()),
        ));
    }
    let next = sample_indices(&qm.indices, kernel, seed)?;
    qm.with_indices(next, cb)
}
