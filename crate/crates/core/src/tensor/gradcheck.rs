use super::{Tape, Tensor, Var};
use crate::error::Result;
use crate::scalar::Scalar;

/// Compares the tape gradient of a scalar function against central finite
/// differences.
///
/// `f` builds the function on a fresh tape from the recorded input. Returns
/// the maximum over coordinates of `|autodiff - fd| / (|fd| + 1e-8)`.
pub fn finite_diff_check<T, F>(f: F, x: &Tensor<T>, step: T) -> Result<T>
where
    T: Scalar,
    F: Fn(&mut Tape<T>, Var) -> Result<Var>,
{
    let mut tape = Tape::new();
    let xv = tape.param(&x.clone().with_requires_grad(true));
    let out = f(&mut tape, xv)?;
    tape.backward(out)?;
    let analytic = tape
        .grad(xv)
        .map(<[T]>::to_vec)
        .unwrap_or_else(|| vec![T::zero(); x.numel()]);

    let eval = |probe: &Tensor<T>| -> Result<T> {
        let mut t = Tape::new();
        let v = t.constant(probe);
        let o = f(&mut t, v)?;
        Ok(t.item(o))
    };

    let two = T::lit(2.0);
    let floor = T::lit(1e-8);
    let mut worst = T::zero();
    let mut probe = x.clone();
    for i in 0..x.numel() {
        let orig = x.data()[i];
        probe.data_mut()[i] = orig + step;
        let up = eval(&probe)?;
        probe.data_mut()[i] = orig - step;
        let down = eval(&probe)?;
        probe.data_mut()[i] = orig;
        let fd = (up - down) / (two * step);
        let err = (analytic[i] - fd).abs() / (fd.abs() + floor);
        worst = worst.max(err);
    }
    Ok(worst)
}
