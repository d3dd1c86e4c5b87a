use nalgebra::{DMatrix, SymmetricEigen};

use super::{Codebook, QuantizedMap};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

#[derive(Clone, Debug, PartialEq)]
pub struct UtilizationRecord {
    pub step: usize,
    pub histogram: Vec<usize>,
    /// Fraction of codewords with a non-zero count.
    pub utilization: f64,
}

impl UtilizationRecord {
    pub fn from_histogram(step: usize, histogram: Vec<usize>) -> Self {
        let used = histogram.iter().filter(|&&c| c > 0).count();
        let utilization = used as f64 / histogram.len() as f64;
        Self {
            step,
            histogram,
            utilization,
        }
    }

    /// Shannon entropy (nats) of the normalised histogram.
    pub fn histogram_entropy(&self) -> f64 {
        let total: usize = self.histogram.iter().sum();
        if total == 0 {
            return 0.0;
        }
        let total = total as f64;
        self.histogram
            .iter()
            .filter(|&&c| c > 0)
            .map(|&c| {
                let p = c as f64 / total;
                -p * p.ln()
            })
            .sum()
    }

    pub fn csv_header() -> &'static str {
        "step,utilization,entropy_of_histogram"
    }

    pub fn csv_row(&self) -> String {
        use crate::scalar::fmt_sig17;
        format!("{},{},{}", self.step, fmt_sig17(self.utilization), fmt_sig17(self.histogram_entropy()))
    }
}

fn histogram<T: Scalar>(qm: &QuantizedMap<T>, k: usize) -> Vec<usize> {
    let mut h = vec![0usize; k];
    for &i in &qm.indices {
        h[i] += 1;
    }
    h
}

fn check_indices<T: Scalar>(qm: &QuantizedMap<T>, k: usize) -> Result<()> {
    match qm.indices.iter().find(|&&i| i >= k) {
        Some(&bad) => Err(Error::invalid("indices", format!("index {bad} out of range for K={k}"))),
        None => Ok(()),
    }
}

/// One record per quantized map, steps numbered from zero.
pub fn utilization<T: Scalar>(history: &[QuantizedMap<T>], k: usize) -> Result<Vec<UtilizationRecord>> {
    history
        .iter()
        .enumerate()
        .map(|(step, qm)| {
            check_indices(qm, k)?;
            Ok(UtilizationRecord::from_histogram(step, histogram(qm, k)))
        })
        .collect()
}

/// Like [`utilization`] but with histograms summed over all earlier steps.
pub fn cumulative_utilization<T: Scalar>(history: &[QuantizedMap<T>], k: usize) -> Result<Vec<UtilizationRecord>> {
    let mut acc = vec![0usize; k];
    history
        .iter()
        .enumerate()
        .map(|(step, qm)| {
            check_indices(qm, k)?;
            for (a, h) in acc.iter_mut().zip(histogram(qm, k)) {
                *a += h;
            }
            Ok(UtilizationRecord::from_histogram(step, acc.clone()))
        })
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PcaPoint {
    pub x: f64,
    pub y: f64,
    pub active: bool,
}

/// Projects codewords onto their top two principal components.
///
/// Each component's sign is fixed so that its largest-magnitude coordinate
/// is positive. With `D < 2` the second coordinate is zero.
pub fn pca_export<T: Scalar>(cb: &Codebook<T>, active_mask: &[bool]) -> Result<Vec<PcaPoint>> {
    let (k, d) = (cb.k(), cb.d());
    if k < 2 {
        return Err(Error::invalid("K", "PCA export needs at least two codewords"));
    }
    if active_mask.len() != k {
        return Err(Error::invalid("active_mask", format!("expected {k} flags, got {}", active_mask.len())));
    }
    let mut mean = vec![0.0; d];
    for i in 0..k {
        for (m, v) in mean.iter_mut().zip(cb.codeword(i)) {
            *m += v.to_f64_lossy() / k as f64;
        }
    }
    let centered = DMatrix::from_fn(k, d, |i, j| cb.codeword(i)[j].to_f64_lossy() - mean[j]);
    let cov = centered.transpose() * &centered / (k as f64);
    let eig = SymmetricEigen::new(cov);
    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]).then(a.cmp(&b)));

    let component = |rank: usize| -> Option<Vec<f64>> {
        let col = *order.get(rank)?;
        let mut v: Vec<f64> = eig.eigenvectors.column(col).iter().copied().collect();
        let pivot = v
            .iter()
            .enumerate()
            .fold((0, 0.0f64), |best, (i, &x)| if x.abs() > best.1.abs() + 1e-12 { (i, x) } else { best })
            .0;
        if v[pivot] < 0.0 {
            v.iter_mut().for_each(|x| *x = -*x);
        }
        Some(v)
    };
    let first = component(0).expect("D >= 1");
    let second = component(1);

    let project = |row: usize, axis: &[f64]| -> f64 { (0..d).map(|j| centered[(row, j)] * axis[j]).sum() };
    Ok((0..k)
        .map(|i| PcaPoint {
            x: project(i, &first),
            y: second.as_deref().map_or(0.0, |s| project(i, s)),
            active: active_mask[i],
        })
        .collect())
}
