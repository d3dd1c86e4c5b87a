use super::{sq_dist, Codebook};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{Tape, Tensor, Var};

/// Codeword assignment of a feature grid.
///
/// `grid` is the shape of the leading (spatial) axes; every position owns a
/// `d`-vector in `source` and `dequantized`.
#[derive(Clone, Debug, PartialEq)]
pub struct QuantizedMap<T> {
    pub grid: Vec<usize>,
    pub d: usize,
    pub indices: Vec<usize>,
    pub dequantized: Vec<T>,
    pub source: Vec<T>,
}

impl<T: Scalar> QuantizedMap<T> {
    pub fn positions(&self) -> usize {
        self.indices.len()
    }

    /// Same source with a different assignment; `dequantized` follows the
    /// new indices.
    pub fn with_indices(&self, indices: Vec<usize>, cb: &Codebook<T>) -> Result<Self> {
        if indices.len() != self.indices.len() {
            return Err(Error::invalid("indices", "length differs from the map"));
        }
        if let Some(&bad) = indices.iter().find(|&&i| i >= cb.k()) {
            return Err(Error::invalid("indices", format!("index {bad} out of range for K={}", cb.k())));
        }
        Ok(Self {
            grid: self.grid.clone(),
            d: self.d,
            dequantized: gather_codewords(cb, &indices),
            indices,
            source: self.source.clone(),
        })
    }

    pub fn dequantized_tensor(&self) -> Tensor<T> {
        let mut shape = self.grid.clone();
        shape.push(self.d);
        Tensor::new(shape, self.dequantized.clone()).expect("quantized map shape")
    }
}

fn gather_codewords<T: Scalar>(cb: &Codebook<T>, indices: &[usize]) -> Vec<T> {
    let mut out = Vec::with_capacity(indices.len() * cb.d());
    for &i in indices {
        out.extend_from_slice(cb.codeword(i));
    }
    out
}

/// Nearest codeword per row; ties go to the lowest index.
pub(crate) fn nearest_indices<T: Scalar>(rows: &[T], cb: &Codebook<T>) -> Vec<usize> {
    rows.chunks(cb.d())
        .map(|z| {
            let mut best = 0;
            let mut best_d = T::infinity();
            for j in 0..cb.k() {
                let dist = sq_dist(z, cb.codeword(j));
                if dist < best_d {
                    best = j;
                    best_d = dist;
                }
            }
            best
        })
        .collect()
}

fn split_feature_shape(op: &'static str, shape: &[usize], d: usize) -> Result<Vec<usize>> {
    match shape.split_last() {
        Some((&last, lead)) if last == d && !lead.is_empty() => Ok(lead.to_vec()),
        _ => Err(Error::ShapeMismatch {
            op,
            lhs: shape.to_vec(),
            rhs: vec![d],
        }),
    }
}

/// Assigns every position of a `[..., D]` feature tensor to its nearest
/// codeword under squared Euclidean distance.
pub fn quantize<T: Scalar>(z: &Tensor<T>, cb: &Codebook<T>) -> Result<QuantizedMap<T>> {
    let grid = split_feature_shape("quantize", z.shape(), cb.d())?;
    let indices = nearest_indices(z.data(), cb);
    Ok(QuantizedMap {
        grid,
        d: cb.d(),
        dequantized: gather_codewords(cb, &indices),
        indices,
        source: z.data().to_vec(),
    })
}

/// Quantizes a recorded `[..., D]` feature node with a straight-through
/// gradient: the forward value is the nearest codeword, the backward pass
/// hands the output gradient to `z` unchanged and nothing to the codebook.
pub fn ste_dequantize<T: Scalar>(tape: &mut Tape<T>, z: Var, cb: &Codebook<T>) -> Result<(Var, QuantizedMap<T>)> {
    let zt = Tensor::new(tape.shape(z).to_vec(), tape.value(z).to_vec())?;
    let qm = quantize(&zt, cb)?;
    let out = tape.straight_through(z, qm.dequantized.clone())?;
    Ok((out, qm))
}

/// Straight-through substitution of arbitrary codeword indices, used for
/// resampled (perturbed) assignments.
pub fn ste_select<T: Scalar>(tape: &mut Tape<T>, z: Var, cb: &Codebook<T>, indices: &[usize]) -> Result<Var> {
    let grid = split_feature_shape("ste_select", tape.shape(z), cb.d())?;
    if grid.iter().product::<usize>() != indices.len() || indices.iter().any(|&i| i >= cb.k()) {
        return Err(Error::invalid("indices", "do not match the feature grid or codebook"));
    }
    tape.straight_through(z, gather_codewords(cb, indices))
}

#[derive(Clone, Copy, Debug)]
pub struct VqLosses {
    pub codebook: Var,
    pub commitment: Var,
}

/// Codebook and commitment terms.
///
/// `codebook = mean_n ||sg(z_n) - c_{i_n}||^2` moves codewords only;
/// `commitment = beta * mean_n ||z_n - sg(c_{i_n})||^2` moves the encoder only.
/// `codewords` is the `[K, D]` codebook node.
pub fn vq_losses<T: Scalar>(tape: &mut Tape<T>, z: Var, codewords: Var, qm: &QuantizedMap<T>, beta: T) -> Result<VqLosses> {
    let d = qm.d;
    let n = qm.positions();
    if tape.value(z).len() != n * d || tape.shape(codewords).len() != 2 || tape.shape(codewords)[1] != d {
        return Err(Error::ShapeMismatch {
            op: "vq_losses",
            lhs: tape.shape(z).to_vec(),
            rhs: tape.shape(codewords).to_vec(),
        });
    }
    let zr = tape.reshape(z, vec![n, d])?;
    let q = tape.gather_rows(codewords, &qm.indices)?;
    let inv_n = T::one() / T::from_count(n);

    let z_sg = tape.detach(zr);
    let cb = tape.sq_l2_distance(z_sg, q)?;
    let codebook = tape.mul_scalar(cb, inv_n);

    let q_sg = tape.detach(q);
    let cm = tape.sq_l2_distance(zr, q_sg)?;
    let commitment = tape.mul_scalar(cm, beta * inv_n);
    Ok(VqLosses { codebook, commitment })
}

/// Mean per-sample assignment entropy minus the entropy of the mean
/// assignment, with soft assignments `softmax_j(-||z_n - c_j||^2 / tau)`.
///
/// Minimising it sharpens individual assignments while spreading usage
/// across the codebook.
pub fn entropy_regularizer<T: Scalar>(tape: &mut Tape<T>, z: Var, codewords: Var, tau: T) -> Result<Var> {
    if tau <= T::zero() {
        return Err(Error::invalid("tau", "temperature must be positive"));
    }
    let cshape = tape.shape(codewords).to_vec();
    if cshape.len() != 2 {
        return Err(Error::InvalidShape {
            op: "entropy_regularizer",
            msg: format!("codewords must be [K, D], got {cshape:?}"),
        });
    }
    let d = cshape[1];
    let total = tape.value(z).len();
    if !total.is_multiple_of(d) {
        return Err(Error::ShapeMismatch {
            op: "entropy_regularizer",
            lhs: tape.shape(z).to_vec(),
            rhs: cshape,
        });
    }
    let n = total / d;
    let zr = tape.reshape(z, vec![n, d])?;
    let dist = tape.pairwise_sq_dist(zr, codewords)?;
    let logits = tape.mul_scalar(dist, -T::one() / tau);
    let logp = tape.log_softmax(logits, 1)?;
    let p = tape.exp(logp);

    let plogp = tape.mul(p, logp)?;
    let s = tape.sum(plogp);
    let per_sample = tape.mul_scalar(s, -T::one() / T::from_count(n));

    let col = tape.sum_axis(p, 0)?;
    let mean_p = tape.mul_scalar(col, T::one() / T::from_count(n));
    let guarded = tape.add_scalar(mean_p, T::min_positive_value());
    let log_mean = tape.log(guarded);
    let ml = tape.mul(mean_p, log_mean)?;
    let batch = tape.sum(ml);
    // per_sample - H(mean) = per_sample + sum(mean * log mean)
    tape.add(per_sample, batch)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::codebook::Metric;

    fn line(points: &[f64]) -> Codebook<f64> {
        Codebook::new(points.len(), 1, points.to_vec(), Metric::Euclidean).unwrap()
    }

    fn feats(shape: Vec<usize>, data: Vec<f64>) -> Tensor<f64> {
        Tensor::new(shape, data).unwrap()
    }

    #[test]
    fn nearest_codeword() {
        let cb = line(&[0.0, 10.0]);
        let qm = quantize(&feats(vec![1, 1, 1], vec![1.0]), &cb).unwrap();
        assert_eq!(qm.indices, vec![0]);
    }

    #[test]
    fn ties_go_to_lowest_index() {
        let cb = line(&[0.0, 10.0]);
        let qm = quantize(&feats(vec![1, 1, 1], vec![5.0]), &cb).unwrap();
        assert_eq!(qm.indices, vec![0]);
        let cb = line(&[10.0, 0.0]);
        let qm = quantize(&feats(vec![1, 1, 1], vec![5.0]), &cb).unwrap();
        assert_eq!(qm.indices, vec![0]);
    }

    #[test]
    fn three_codeword_line() {
        let cb = line(&[0.0, 1.0, 3.0]);
        let qm = quantize(&feats(vec![1, 1, 1], vec![1.9]), &cb).unwrap();
        assert_eq!(qm.indices, vec![1]);
        assert_eq!(qm.dequantized, vec![1.0]);
    }

    #[test]
    fn dimension_mismatch() {
        let cb = line(&[0.0, 1.0]);
        assert!(quantize(&feats(vec![2, 2], vec![0.0; 4]), &cb).is_err());
    }

    #[test]
    fn ste_backward_is_identity() {
        let cb = Codebook::new(2, 2, vec![0.5, -1.0, 2.0, 3.0], Metric::Euclidean).unwrap();
        let z = feats(vec![2, 2], vec![0.4, -0.7, 1.6, 2.2]).with_requires_grad(true);
        let mut tape = Tape::new();
        let zv = tape.param(&z);
        let cw = tape.param(&cb.to_tensor().with_requires_grad(true));
        let (q, qm) = ste_dequantize(&mut tape, zv, &cb).unwrap();
        assert_eq!(tape.value(q), qm.dequantized.as_slice());
        let sq = tape.mul(q, q).unwrap();
        let l = tape.sum(sq);
        tape.backward(l).unwrap();
        let expect: Vec<f64> = qm.dequantized.iter().map(|c| 2.0 * c).collect();
        assert_eq!(tape.grad(zv).unwrap(), expect.as_slice());
        assert!(tape.grad(cw).is_none());
    }

    #[test]
    fn vq_losses_on_codewords_vanish() {
        let cb = line(&[1.0, 4.0]);
        let z = feats(vec![2, 1], vec![4.0, 1.0]).with_requires_grad(true);
        let mut tape = Tape::new();
        let zv = tape.param(&z);
        let cw = tape.param(&cb.to_tensor().with_requires_grad(true));
        let qm = quantize(&z, &cb).unwrap();
        let l = vq_losses(&mut tape, zv, cw, &qm, 0.25).unwrap();
        assert_eq!(tape.item(l.codebook), 0.0);
        assert_eq!(tape.item(l.commitment), 0.0);
    }

    #[test]
    fn vq_losses_scalar_case_and_gradient_routing() {
        let cb = line(&[1.0, 9.0]);
        let z = feats(vec![1, 1], vec![2.0]).with_requires_grad(true);
        let mut tape = Tape::new();
        let zv = tape.param(&z);
        let cw = tape.param(&cb.to_tensor().with_requires_grad(true));
        let qm = quantize(&z, &cb).unwrap();
        let l = vq_losses(&mut tape, zv, cw, &qm, 0.25).unwrap();
        assert_eq!(tape.item(l.codebook), 1.0);
        assert_eq!(tape.item(l.commitment), 0.25);

        tape.backward(l.codebook).unwrap();
        assert!(tape.grad(zv).is_none());
        assert_eq!(tape.grad(cw).unwrap(), &[-2.0, 0.0]);
        tape.backward(l.commitment).unwrap();
        assert!(tape.grad(cw).is_none());
        assert_eq!(tape.grad(zv).unwrap(), &[0.5]);

        let mut tape = Tape::new();
        let zv = tape.param(&z);
        let cw = tape.param(&cb.to_tensor());
        let l = vq_losses(&mut tape, zv, cw, &qm, 0.0).unwrap();
        assert_eq!(tape.item(l.commitment), 0.0);
    }

    fn entropy_value(z: Vec<f64>, n: usize, cb: &Codebook<f64>, tau: f64) -> f64 {
        let mut tape = Tape::new();
        let zv = tape.leaf(vec![n, cb.d()], z, false).unwrap();
        let cw = tape.constant(&cb.to_tensor());
        let e = entropy_regularizer(&mut tape, zv, cw, tau).unwrap();
        tape.item(e)
    }

    #[test]
    fn entropy_single_and_identical_samples_are_zero() {
        let cb = line(&[0.0, 1.0, 2.5]);
        assert!(entropy_value(vec![0.7], 1, &cb, 1.0).abs() < 1e-12);
        assert!(entropy_value(vec![0.7, 0.7], 2, &cb, 1.0).abs() < 1e-12);
    }

    #[test]
    fn entropy_of_hard_split_is_minus_ln2() {
        let cb = line(&[0.0, 1.0]);
        let v = entropy_value(vec![0.0, 1.0], 2, &cb, 1e-3);
        assert!((v + std::f64::consts::LN_2).abs() < 1e-9, "{v}");
        let mut tape = Tape::new();
        let zv = tape.leaf(vec![1, 1], vec![0.0], false).unwrap();
        let cw = tape.constant(&cb.to_tensor());
        assert!(entropy_regularizer(&mut tape, zv, cw, 0.0).is_err());
    }
}
