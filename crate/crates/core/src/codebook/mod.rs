//! The learnable discrete vocabulary.

mod kmeans;
mod quantize;
mod usage;

pub use kmeans::kmeans;
pub use quantize::{entropy_regularizer, quantize, ste_dequantize, ste_select, vq_losses, QuantizedMap, VqLosses};
pub use usage::{cumulative_utilization, pca_export, utilization, PcaPoint, UtilizationRecord};

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::scalar::{fmt_sig17, Scalar};
use crate::tensor::Tensor;

/// Distance used for nearest-codeword search. The search itself compares
/// squared distances, which selects the same codeword.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum Metric {
    #[default]
    Euclidean,
}

impl fmt::Display for Metric {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Metric::Euclidean => f.write_str("euclidean"),
        }
    }
}

impl FromStr for Metric {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "euclidean" => Ok(Metric::Euclidean),
            other => Err(Error::parse("metric", format!("unknown metric `{other}`"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum InitScheme {
    UniformRandom,
    KmeansOnSample,
}

impl FromStr for InitScheme {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "uniform_random" | "uniform" => Ok(InitScheme::UniformRandom),
            "kmeans_on_sample" | "kmeans" => Ok(InitScheme::KmeansOnSample),
            other => Err(Error::parse("init scheme", format!("unknown scheme `{other}`"))),
        }
    }
}

/// `K` distinct, finite codewords of dimension `D`, stored row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct Codebook<T> {
    k: usize,
    d: usize,
    codewords: Vec<T>,
    metric: Metric,
}

#[inline]
pub(crate) fn sq_dist<T: Scalar>(a: &[T], b: &[T]) -> T {
    a.iter().zip(b).map(|(&x, &y)| (x - y) * (x - y)).sum()
}

impl<T: Scalar> Codebook<T> {
    pub fn new(k: usize, d: usize, codewords: Vec<T>, metric: Metric) -> Result<Self> {
        if k == 0 || d == 0 {
            return Err(Error::Codebook(format!("K and D must be positive, got K={k}, D={d}")));
        }
        if codewords.len() != k * d {
            return Err(Error::Codebook(format!(
                "expected {} values for K={k}, D={d}, got {}",
                k * d,
                codewords.len()
            )));
        }
        let cb = Self { k, d, codewords, metric };
        cb.validate()?;
        Ok(cb)
    }

    /// Checks finiteness and pairwise distinctness.
    pub fn validate(&self) -> Result<()> {
        if let Some(pos) = self.codewords.iter().position(|v| !v.is_finite()) {
            return Err(Error::Codebook(format!("non-finite entry in codeword {}", pos / self.d)));
        }
        if let Some((i, j)) = self.duplicate_pair() {
            return Err(Error::Codebook(format!("codewords {i} and {j} are identical")));
        }
        Ok(())
    }

    fn duplicate_pair(&self) -> Option<(usize, usize)> {
        for i in 0..self.k {
            for j in i + 1..self.k {
                if self.codeword(i) == self.codeword(j) {
                    return Some((i, j));
                }
            }
        }
        None
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn d(&self) -> usize {
        self.d
    }

    pub fn metric(&self) -> Metric {
        self.metric
    }

    pub fn codewords(&self) -> &[T] {
        &self.codewords
    }

    pub fn codeword(&self, i: usize) -> &[T] {
        &self.codewords[i * self.d..(i + 1) * self.d]
    }

    pub fn to_tensor(&self) -> Tensor<T> {
        Tensor::new(vec![self.k, self.d], self.codewords.clone()).expect("codebook shape")
    }

    /// Replaces the codewords, re-checking the invariants.
    pub fn set_codewords(&mut self, codewords: Vec<T>) -> Result<()> {
        let next = Self::new(self.k, self.d, codewords, self.metric)?;
        *self = next;
        Ok(())
    }

    pub fn distance(&self, i: usize, j: usize) -> T {
        sq_dist(self.codeword(i), self.codeword(j)).sqrt()
    }

    /// Smallest and largest Euclidean distance over distinct pairs.
    pub fn distance_range(&self) -> Option<(T, T)> {
        if self.k < 2 {
            return None;
        }
        let mut lo = T::infinity();
        let mut hi = T::zero();
        for i in 0..self.k {
            for j in i + 1..self.k {
                let dij = self.distance(i, j);
                lo = lo.min(dij);
                hi = hi.max(dij);
            }
        }
        Some((lo, hi))
    }

    /// Same codewords in a new order: row `i` of the result is row `perm[i]`.
    pub fn permuted(&self, perm: &[usize]) -> Result<Self> {
        let mut data = Vec::with_capacity(self.codewords.len());
        for &p in perm {
            if p >= self.k {
                return Err(Error::invalid("perm", format!("index {p} out of range")));
            }
            data.extend_from_slice(self.codeword(p));
        }
        Self::new(self.k, self.d, data, self.metric)
    }

    /// Text form: `K D metric` header, then one codeword per line.
    pub fn to_text(&self) -> String {
        let mut out = format!("{} {} {}\n", self.k, self.d, self.metric);
        for i in 0..self.k {
            let row: Vec<String> = self.codeword(i).iter().map(|&v| fmt_sig17(v)).collect();
            out.push_str(&row.join(" "));
            out.push('\n');
        }
        out
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut lines = text.lines().filter(|l| !l.trim().is_empty());
        let header = lines.next().ok_or_else(|| Error::parse("codebook", "empty input"))?;
        let parts: Vec<&str> = header.split_whitespace().collect();
        if parts.len() != 3 {
            return Err(Error::parse("codebook header", format!("expected `K D metric`, got `{header}`")));
        }
        let k: usize = parts[0]
            .parse()
            .map_err(|e| Error::parse("codebook K", format!("`{}`: {e}", parts[0])))?;
        let d: usize = parts[1]
            .parse()
            .map_err(|e| Error::parse("codebook D", format!("`{}`: {e}", parts[1])))?;
        let metric: Metric = parts[2].parse()?;
        let mut data = Vec::with_capacity(k * d);
        for (row, line) in lines.enumerate() {
            let vals = line
                .split_whitespace()
                .map(|t| {
                    t.parse::<f64>()
                        .map(T::lit)
                        .map_err(|e| Error::parse("codebook value", format!("`{t}`: {e}")))
                })
                .collect::<Result<Vec<_>>>()?;
            if vals.len() != d {
                return Err(Error::parse(
                    "codebook row",
                    format!("row {row} has {} values, expected {d}", vals.len()),
                ));
            }
            data.extend(vals);
        }
        if data.len() != k * d {
            return Err(Error::parse("codebook", format!("expected {k} rows, got {}", data.len() / d)));
        }
        Self::new(k, d, data, metric)
    }
}

const INIT_RETRIES: usize = 3;

/// Builds an initial codebook. Deterministic given `seed`.
///
/// `sample` holds row-major `D`-dimensional vectors and is required for
/// [`InitScheme::KmeansOnSample`]. Duplicate codewords are jittered and the
/// check repeated up to three times before giving up.
pub fn init_codebook<T: Scalar>(
    k: usize,
    d: usize,
    scheme: InitScheme,
    seed: u64,
    sample: Option<&[T]>,
) -> Result<Codebook<T>> {
    if k < 2 || d == 0 {
        return Err(Error::invalid("K", format!("need K >= 2 and D >= 1, got K={k}, D={d}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut data: Vec<T> = match scheme {
        InitScheme::UniformRandom => (0..k * d).map(|_| T::lit(rng.random_range(-1.0..1.0))).collect(),
        InitScheme::KmeansOnSample => {
            let sample = sample.ok_or_else(|| Error::invalid("sample", "k-means initialisation needs a sample"))?;
            if sample.len() % d != 0 || sample.len() / d < k {
                return Err(Error::invalid(
                    "sample",
                    format!("need at least K={k} vectors of dimension {d}, got {} values", sample.len()),
                ));
            }
            kmeans(sample, d, k, 50, seed)?
        }
    };
    let scale = data.iter().fold(T::zero(), |m, v| m.max(v.abs())).max(T::one());
    for _ in 0..=INIT_RETRIES {
        let candidate = Codebook {
            k,
            d,
            codewords: data.clone(),
            metric: Metric::Euclidean,
        };
        match candidate.duplicate_pair() {
            None => {
                candidate.validate()?;
                return Ok(candidate);
            }
            Some((_, j)) => {
                for v in &mut data[j * d..(j + 1) * d] {
                    *v += T::lit(rng.random_range(-1e-6..1e-6)) * scale;
                }
            }
        }
    }
    Err(Error::Codebook(format!(
        "duplicate codewords remain after {INIT_RETRIES} perturbation retries"
    )))
}
