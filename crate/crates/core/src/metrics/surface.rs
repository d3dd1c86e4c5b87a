use super::MaskPair;
use crate::error::{Error, Result};

/// Linear-interpolation percentile on sorted data, `q` in `[0, 100]`.
/// The rank is `q/100 * (n - 1)`.
pub fn percentile_sorted(sorted: &[f64], q: f64) -> f64 {
    let n = sorted.len();
    if n == 1 {
        return sorted[0];
    }
    let rank = q / 100.0 * (n - 1) as f64;
    let lo = rank.floor() as usize;
    let hi = (lo + 1).min(n - 1);
    let frac = rank - lo as f64;
    sorted[lo] + (sorted[hi] - sorted[lo]) * frac
}

fn directed(from: &[(usize, usize)], to: &[(usize, usize)], out: &mut Vec<f64>) {
    for &(r, c) in from {
        let best = to
            .iter()
            .map(|&(r2, c2)| {
                let dr = r as f64 - r2 as f64;
                let dc = c as f64 - c2 as f64;
                dr * dr + dc * dc
            })
            .fold(f64::INFINITY, f64::min);
        out.push(best.sqrt());
    }
}

/// Pooled directed boundary distances, pred-to-gt followed by gt-to-pred.
pub fn boundary_distances(mp: &MaskPair) -> Result<Vec<f64>> {
    if mp.pred.is_empty() {
        return Err(Error::invalid("pred", "surface metrics need a nonempty mask"));
    }
    if mp.gt.is_empty() {
        return Err(Error::invalid("gt", "surface metrics need a nonempty mask"));
    }
    let (a, b) = (mp.pred.boundary(), mp.gt.boundary());
    let mut d = Vec::with_capacity(a.len() + b.len());
    directed(&a, &b, &mut d);
    directed(&b, &a, &mut d);
    Ok(d)
}

/// `(hd95, asd)` over the pooled symmetric boundary distances.
pub fn surface_metrics(mp: &MaskPair) -> Result<(f64, f64)> {
    let mut d = boundary_distances(mp)?;
    let asd = d.iter().sum::<f64>() / d.len() as f64;
    d.sort_by(f64::total_cmp);
    Ok((percentile_sorted(&d, 95.0), asd))
}
