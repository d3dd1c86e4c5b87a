use std::str::FromStr;

use crate::codebook::{sq_dist, Codebook};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Distance fed into `exp(-d)` when weighting transitions.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum KernelDistance {
    #[default]
    Euclidean,
    SquaredEuclidean,
}

impl FromStr for KernelDistance {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "euclidean" => Ok(Self::Euclidean),
            "squared_euclidean" | "sqeuclidean" => Ok(Self::SquaredEuclidean),
            other => Err(Error::parse("kernel distance", format!("unknown distance `{other}`"))),
        }
    }
}

impl KernelDistance {
    pub fn eval<T: Scalar>(self, a: &[T], b: &[T]) -> T {
        let s = sq_dist(a, b);
        match self {
            Self::Euclidean => s.sqrt(),
            Self::SquaredEuclidean => s,
        }
    }
}

/// Row-stochastic codeword transition matrix.
///
/// Row `i` keeps its codeword with probability `1 - eps` and otherwise moves
/// to `j != i` with probability proportional to `exp(-dist[i][j])`.
#[derive(Clone, Debug, PartialEq)]
pub struct PerturbationKernel<T> {
    k: usize,
    eps: T,
    pi: Vec<T>,
    dist: Vec<T>,
    equidistant: bool,
}

impl<T: Scalar> PerturbationKernel<T> {
    /// Builds the kernel from a symmetric `k x k` distance matrix with zero
    /// diagonal.
    pub fn from_distances(k: usize, dist: Vec<T>, eps: T) -> Result<Self> {
        if !(eps >= T::zero() && eps <= T::one()) {
            return Err(Error::invalid("eps", format!("must lie in [0, 1], got {eps}")));
        }
        if k < 2 {
            return Err(Error::invalid("K", "transition kernel needs at least two codewords"));
        }
        if dist.len() != k * k {
            return Err(Error::invalid("dist", format!("expected {} entries, got {}", k * k, dist.len())));
        }
        for i in 0..k {
            if dist[i * k + i] != T::zero() {
                return Err(Error::invalid("dist", format!("non-zero diagonal at {i}")));
            }
            for j in 0..k {
                let v = dist[i * k + j];
                if !v.is_finite() || v < T::zero() || v != dist[j * k + i] {
                    return Err(Error::invalid("dist", format!("entry ({i}, {j}) is not a finite symmetric distance")));
                }
            }
        }

        let stay = T::one() - eps;
        let mut pi = vec![T::zero(); k * k];
        for i in 0..k {
            let row = &dist[i * k..(i + 1) * k];
            // shift by the nearest neighbour so the normaliser cannot underflow
            let shift = (0..k).filter(|&j| j != i).map(|j| row[j]).fold(T::infinity(), T::min);
            let weights: Vec<T> = (0..k)
                .map(|j| if j == i { T::zero() } else { (shift - row[j]).exp() })
                .collect();
            let z: T = weights.iter().copied().sum();
            for j in 0..k {
                pi[i * k + j] = if j == i { stay } else { eps * (weights[j] / z) };
            }
        }
        let off = dist[1];
        let equidistant = (0..k).all(|i| (0..k).all(|j| i == j || dist[i * k + j] == off));
        Ok(Self {
            k,
            eps,
            pi,
            dist,
            equidistant,
        })
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn eps(&self) -> T {
        self.eps
    }

    pub fn prob(&self, from: usize, to: usize) -> T {
        self.pi[from * self.k + to]
    }

    pub fn row(&self, i: usize) -> &[T] {
        &self.pi[i * self.k..(i + 1) * self.k]
    }

    pub fn matrix(&self) -> &[T] {
        &self.pi
    }

    pub fn distances(&self) -> &[T] {
        &self.dist
    }

    /// Whether all off-diagonal distances are identical.
    pub fn is_equidistant(&self) -> bool {
        self.equidistant
    }

    /// Kernel dump: `K` lines of `K` values.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for i in 0..self.k {
            let row: Vec<String> = self.row(i).iter().map(|&v| crate::scalar::fmt_sig17(v)).collect();
            out.push_str(&row.join(" "));
            out.push('\n');
        }
        out
    }
}

pub fn distance_matrix<T: Scalar>(cb: &Codebook<T>, distance: KernelDistance) -> Vec<T> {
    let k = cb.k();
    let mut dist = vec![T::zero(); k * k];
    for i in 0..k {
        for j in i + 1..k {
            let v = distance.eval(cb.codeword(i), cb.codeword(j));
            dist[i * k + j] = v;
            dist[j * k + i] = v;
        }
    }
    dist
}

/// Transition kernel over a codebook with Euclidean codeword distances.
pub fn transition_kernel<T: Scalar>(cb: &Codebook<T>, eps: T) -> Result<PerturbationKernel<T>> {
    transition_kernel_with(cb, eps, KernelDistance::Euclidean)
}

pub fn transition_kernel_with<T: Scalar>(cb: &Codebook<T>, eps: T, distance: KernelDistance) -> Result<PerturbationKernel<T>> {
    PerturbationKernel::from_distances(cb.k(), distance_matrix(cb, distance), eps)
}

/// Codeword distribution after one transition from the uniform prior.
#[derive(Clone, Debug, PartialEq)]
pub struct PerturbedMarginal<T> {
    /// Column sums of the kernel, i.e. `K * Q(c_j)`.
    mass: Vec<T>,
    pub eps: T,
}

impl<T: Scalar> PerturbedMarginal<T> {
    pub fn k(&self) -> usize {
        self.mass.len()
    }

    /// `Q(c_j)` for every codeword.
    pub fn q(&self) -> Vec<T> {
        let kk = T::from_count(self.mass.len());
        self.mass.iter().map(|&m| m / kk).collect()
    }

    /// `K * Q(c_j)`, the ratio of perturbed to prior probability.
    pub fn ratio(&self) -> &[T] {
        &self.mass
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("j,Q\n");
        for (j, q) in self.q().into_iter().enumerate() {
            out.push_str(&format!("{j},{}\n", crate::scalar::fmt_sig17(q)));
        }
        out
    }
}

/// `Q(c_j) = (1/K) sum_i pi(j | i)`. Equidistant kernels are doubly
/// stochastic and give the uniform distribution exactly.
pub fn perturbed_marginal<T: Scalar>(kernel: &PerturbationKernel<T>) -> PerturbedMarginal<T> {
    let k = kernel.k;
    let mass = if kernel.equidistant {
        vec![T::one(); k]
    } else {
        (0..k).map(|j| (0..k).map(|i| kernel.pi[i * k + j]).sum()).collect()
    };
    PerturbedMarginal { mass, eps: kernel.eps }
}

/// `KL(P || Q) = -(1/K) sum_j ln(K Q(c_j))` for the uniform prior `P`.
pub fn kl_qpm<T: Scalar>(marginal: &PerturbedMarginal<T>) -> Result<T> {
    if let Some(j) = marginal.mass.iter().position(|&m| m <= T::zero()) {
        return Err(Error::ZeroMarginal(j));
    }
    let k = T::from_count(marginal.k());
    let s: T = marginal.mass.iter().map(|&m| m.ln()).sum();
    let kl = -s / k;
    // ln is concave, so the divergence is non-negative; clear rounding noise
    Ok(if kl < T::zero() { T::zero() } else { kl })
}

/// Extreme-strength (`eps = 1`) envelope of the perturbed marginal.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MarginalBounds<T> {
    pub lower: T,
    pub upper: T,
    pub dmin: T,
    pub dmax: T,
}

/// `exp(Dmin - Dmax) / K <= Q(c_j | 1) <= exp(Dmax - Dmin) / K`.
pub fn bounds_from_range<T: Scalar>(k: usize, dmin: T, dmax: T) -> Result<MarginalBounds<T>> {
    if k < 2 {
        return Err(Error::invalid("K", "bounds need at least two codewords"));
    }
    if !(dmin > T::zero() && dmin <= dmax && dmax.is_finite()) {
        return Err(Error::invalid("distances", format!("need 0 < Dmin <= Dmax < inf, got {dmin}, {dmax}")));
    }
    let kk = T::from_count(k);
    Ok(MarginalBounds {
        lower: (dmin - dmax).exp() / kk,
        upper: (dmax - dmin).exp() / kk,
        dmin,
        dmax,
    })
}

pub fn bounds_eps1<T: Scalar>(cb: &Codebook<T>) -> Result<MarginalBounds<T>> {
    bounds_eps1_with(cb, KernelDistance::Euclidean)
}

pub fn bounds_eps1_with<T: Scalar>(cb: &Codebook<T>, distance: KernelDistance) -> Result<MarginalBounds<T>> {
    let k = cb.k();
    if k < 2 {
        return Err(Error::invalid("K", "bounds need at least two codewords"));
    }
    let dist = distance_matrix(cb, distance);
    let mut dmin = T::infinity();
    let mut dmax = T::zero();
    for i in 0..k {
        for j in i + 1..k {
            dmin = dmin.min(dist[i * k + j]);
            dmax = dmax.max(dist[i * k + j]);
        }
    }
    if dmin == T::zero() {
        return Err(Error::Codebook("duplicate codewords give a zero minimum distance".into()));
    }
    bounds_from_range(k, dmin, dmax)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::codebook::Metric;

    fn line(points: &[f64]) -> Codebook<f64> {
        Codebook::new(points.len(), 1, points.to_vec(), Metric::Euclidean).unwrap()
    }

    #[test]
    fn two_codewords_split_evenly() {
        let k = transition_kernel(&line(&[0.0, 7.3]), 0.5).unwrap();
        assert_eq!(k.matrix(), &[0.5, 0.5, 0.5, 0.5]);
    }

    #[test]
    fn worked_line_row() {
        let k = transition_kernel(&line(&[0.0, 1.0, 3.0]), 0.6).unwrap();
        let row = k.row(0);
        assert_eq!(row[0], 1.0 - 0.6);
        let (a, b) = ((-1.0f64).exp(), (-3.0f64).exp());
        assert!((row[1] - 0.6 * a / (a + b)).abs() < 1e-15);
        assert!((row[2] - 0.6 * b / (a + b)).abs() < 1e-15);
        assert!((row[1] - 0.52846).abs() < 5e-5);
        assert!((row[2] - 0.07154).abs() < 5e-5);
    }

    #[test]
    fn eps_range_and_size_checked() {
        let cb = line(&[0.0, 1.0]);
        assert!(transition_kernel(&cb, -0.1).is_err());
        assert!(transition_kernel(&cb, 1.5).is_err());
        assert!(transition_kernel(&cb, f64::NAN).is_err());
        assert!(transition_kernel(&line(&[0.0]), 0.5).is_err());
    }

    #[test]
    fn far_codewords_do_not_underflow() {
        let k = transition_kernel(&line(&[0.0, 1000.0, 5000.0]), 1.0).unwrap();
        assert_eq!(k.prob(0, 1), 1.0);
        assert!(k.row(2).iter().all(|v| v.is_finite()));
        // column 2 receives only exp(-1000)-scale mass, which underflows
        let m = perturbed_marginal(&k);
        assert!(matches!(kl_qpm(&m), Err(Error::ZeroMarginal(2))));
    }

    #[test]
    fn identity_kernel_gives_zero_kl() {
        let k = transition_kernel(&line(&[0.0, 1.0, 3.0]), 0.0).unwrap();
        let m = perturbed_marginal(&k);
        assert_eq!(kl_qpm(&m).unwrap(), 0.0);
        assert!(m.q().iter().all(|&q| (q - 1.0 / 3.0).abs() < 1e-16));
    }

    #[test]
    fn zero_marginal_is_an_error() {
        let m = PerturbedMarginal {
            mass: vec![2.0, 0.0],
            eps: 1.0,
        };
        assert!(matches!(kl_qpm(&m), Err(Error::ZeroMarginal(1))));
    }

    #[test]
    fn bounds_closed_form() {
        let b = bounds_from_range(4, 1.0, 2.0).unwrap();
        assert!((b.lower - (-1.0f64).exp() / 4.0).abs() < 1e-15);
        assert!((b.upper - 1.0f64.exp() / 4.0).abs() < 1e-15);
        assert!((b.lower - 0.09197).abs() < 1e-5);
        assert!((b.upper - 0.67957).abs() < 1e-5);
        assert!(bounds_from_range(4, 0.0, 2.0).is_err());
        assert!(bounds_from_range(1, 1.0, 2.0).is_err());
    }

    #[test]
    fn marginal_csv_header() {
        let k = transition_kernel(&line(&[0.0, 1.0]), 0.3).unwrap();
        assert!(perturbed_marginal(&k).to_csv().starts_with("j,Q\n0,"));
    }
}
