use super::MaskPair;

/// `(dice, jaccard)`. Two empty masks score `(1, 1)`.
pub fn dice_jaccard(mp: &MaskPair) -> (f64, f64) {
    let (mut inter, mut a, mut b) = (0usize, 0usize, 0usize);
    for (&p, &g) in mp.pred.data().iter().zip(mp.gt.data()) {
        a += p as usize;
        b += g as usize;
        inter += (p && g) as usize;
    }
    if a + b == 0 {
        return (1.0, 1.0);
    }
    let union = a + b - inter;
    (2.0 * inter as f64 / (a + b) as f64, inter as f64 / union as f64)
}
