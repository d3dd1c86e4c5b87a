use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Perturbation radius of dropout under the moment-matched Gaussian
/// approximation.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DropoutKl<T> {
    pub p: T,
    /// Prior variance. Cancels in the closed form.
    pub sigma0_sq: T,
    pub kl: T,
}

impl<T: Scalar> DropoutKl<T> {
    /// Variance of the moment-matched perturbed distribution.
    pub fn approx_variance(&self) -> T {
        self.sigma0_sq * (T::one() - self.p)
    }
}

fn check_rate<T: Scalar>(p: T) -> Result<()> {
    if p >= T::one() {
        return Err(Error::invalid("p", format!("dropout KL diverges for p >= 1, got {p}")));
    }
    if !(p >= T::zero()) {
        return Err(Error::invalid("p", format!("must lie in [0, 1), got {p}")));
    }
    Ok(())
}

/// `0.5 * (p / (1 - p) + ln(1 - p))`.
pub fn kl_dropout<T: Scalar>(p: T) -> Result<DropoutKl<T>> {
    kl_dropout_with_prior(p, T::one())
}

pub fn kl_dropout_with_prior<T: Scalar>(p: T, sigma0_sq: T) -> Result<DropoutKl<T>> {
    check_rate(p)?;
    if !(sigma0_sq > T::zero() && sigma0_sq.is_finite()) {
        return Err(Error::invalid("sigma0_sq", format!("must be positive and finite, got {sigma0_sq}")));
    }
    let half = T::lit(0.5);
    // ln_1p keeps precision for small p
    let kl = half * (p / (T::one() - p) + (-p).ln_1p());
    Ok(DropoutKl { p, sigma0_sq, kl })
}

/// `KL(N(0, var_p) || N(0, var_q))`.
pub fn gaussian_kl<T: Scalar>(var_p: T, var_q: T) -> T {
    T::lit(0.5) * (var_p / var_q - T::one() + (var_q / var_p).ln())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn closed_form_values() {
        assert_eq!(kl_dropout(0.0f64).unwrap().kl, 0.0);
        let half = kl_dropout(0.5f64).unwrap().kl;
        assert!((half - 0.5 * (1.0 + 0.5f64.ln())).abs() < 1e-15);
        assert!((half - 0.15343).abs() < 1e-5);
        assert!((kl_dropout(0.99f64).unwrap().kl - 47.197).abs() < 1e-3);
    }

    #[test]
    fn matches_gaussian_route() {
        for &s in &[0.3f64, 1.0, 17.0] {
            for i in 0..50 {
                let p = i as f64 / 51.0;
                let d = kl_dropout_with_prior(p, s).unwrap();
                let g = gaussian_kl(s, d.approx_variance());
                assert!((d.kl - g).abs() <= 1e-12 * (1.0 + g), "p={p} s={s}");
            }
        }
    }

    #[test]
    fn rate_checked() {
        assert!(kl_dropout(1.0f64).is_err());
        assert!(kl_dropout(1.2f64).is_err());
        assert!(kl_dropout(-0.1f64).is_err());
        assert!(kl_dropout(f64::NAN).is_err());
        assert!(kl_dropout_with_prior(0.5f64, 0.0).is_err());
    }

    #[test]
    fn works_in_single_precision() {
        let d = kl_dropout(0.5f32).unwrap();
        assert!((d.kl - 0.15343).abs() < 1e-5);
    }
}
