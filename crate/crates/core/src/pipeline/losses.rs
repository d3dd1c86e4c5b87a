use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::model::SegModel;
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{Tape, Var};

/// Mean absolute error between two same-shaped nodes.
pub fn recon_l1<T: Scalar>(tape: &mut Tape<T>, x: Var, x_hat: Var) -> Result<Var> {
    let n = tape.value(x).len();
    let s = tape.l1_distance(x, x_hat)?;
    Ok(tape.mul_scalar(s, T::one() / T::from_count(n)))
}

/// Target value skipped by [`seg_ce`].
pub const IGNORE: u8 = 255;

/// Pixelwise cross-entropy of `[n, c, H, W]` logits against integer
/// targets laid out `[n, H, W]`, averaged over all pixels. Pixels labelled
/// [`IGNORE`] contribute zero.
pub fn seg_ce<T: Scalar>(tape: &mut Tape<T>, logits: Var, target: &[u8]) -> Result<Var> {
    let s = tape.shape(logits).to_vec();
    if s.len() != 4 || target.len() != s[0] * s[2] * s[3] {
        return Err(Error::ShapeMismatch {
            op: "seg_ce",
            lhs: s,
            rhs: vec![target.len()],
        });
    }
    let (n, c, hw) = (s[0], s[1], s[2] * s[3]);
    if let Some(p) = target.iter().position(|&t| t != IGNORE && t as usize >= c) {
        return Err(Error::invalid("target", format!("class {} at pixel {p} exceeds {c} classes", target[p])));
    }
    let logp = tape.log_softmax(logits, 1)?;
    let map: Vec<usize> = (0..n * hw)
        .filter(|&i| target[i] != IGNORE)
        .map(|i| {
            let (b, p) = (i / hw, i % hw);
            (b * c + target[i] as usize) * hw + p
        })
        .collect();
    let scale = -T::one() / T::from_count(n * hw);
    if map.is_empty() {
        let s = tape.sum(logp);
        return Ok(tape.mul_scalar(s, T::zero()));
    }
    let kept = map.len();
    let picked = tape.gather(logp, map, vec![kept])?;
    let sum = tape.sum(picked);
    Ok(tape.mul_scalar(sum, scale))
}

/// `mean|x - x_hat| + CE(y, y_hat)`.
pub fn labeled_loss<T: Scalar>(tape: &mut Tape<T>, x: Var, x_hat: Var, logits: Var, y: &[u8]) -> Result<Var> {
    let rec = recon_l1(tape, x, x_hat)?;
    let seg = seg_ce(tape, logits, y)?;
    tape.add(rec, seg)
}

/// Per-pixel argmax over the class axis of `[n, c, H, W]` probabilities.
/// Ties resolve to the lowest class.
pub fn pseudo_label<T: Scalar>(probs: &[T], shape: &[usize]) -> Result<Vec<u8>> {
    if shape.len() != 4 || probs.len() != shape.iter().product::<usize>() || shape[1] == 0 || shape[1] > 256 {
        return Err(Error::InvalidShape {
            op: "pseudo_label",
            msg: format!("expected [n, c, H, W] probabilities, got {shape:?}"),
        });
    }
    let (n, c, hw) = (shape[0], shape[1], shape[2] * shape[3]);
    Ok((0..n * hw)
        .map(|i| {
            let (b, p) = (i / hw, i % hw);
            let mut best = 0;
            for k in 1..c {
                if probs[(b * c + k) * hw + p] > probs[(b * c + best) * hw + p] {
                    best = k;
                }
            }
            best as u8
        })
        .collect())
}

/// Replaces labels whose top class probability is below `thresh` with
/// [`IGNORE`].
pub fn mask_unconfident<T: Scalar>(labels: &mut [u8], probs: &[T], shape: &[usize], thresh: T) -> Result<()> {
    if shape.len() != 4 || probs.len() != shape.iter().product::<usize>() || labels.len() != shape[0] * shape[2] * shape[3] {
        return Err(Error::InvalidShape {
            op: "mask_unconfident",
            msg: format!("labels of length {} do not match probabilities {shape:?}", labels.len()),
        });
    }
    let (c, hw) = (shape[1], shape[2] * shape[3]);
    for (i, l) in labels.iter_mut().enumerate() {
        if *l == IGNORE {
            continue;
        }
        let (b, p) = (i / hw, i % hw);
        if probs[(b * c + *l as usize) * hw + p] < thresh {
            *l = IGNORE;
        }
    }
    Ok(())
}

/// Axis-aligned box `[top, top+h) x [left, left+w)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Rect {
    pub top: usize,
    pub left: usize,
    pub h: usize,
    pub w: usize,
}

impl Rect {
    pub fn contains(&self, r: usize, c: usize) -> bool {
        r >= self.top && r < self.top + self.h && c >= self.left && c < self.left + self.w
    }

    /// A box covering about `area` of a `size x size` image with a random
    /// aspect ratio in `[1/2, 2]`.
    pub fn sample(size: usize, area: f64, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let ratio = (rng.random_range(-1.0..1.0f64) * std::f64::consts::LN_2).exp();
        let s = size as f64;
        let h = ((area * ratio).sqrt() * s).round().clamp(0.0, s) as usize;
        let w = ((area / ratio).sqrt() * s).round().clamp(0.0, s) as usize;
        let (h, w) = if area >= 1.0 { (size, size) } else { (h, w) };
        let top = rng.random_range(0..=size - h);
        let left = rng.random_range(0..=size - w);
        Self { top, left, h, w }
    }
}

/// Pastes `rect` of sample 2 into sample 1, for images and labels alike.
pub fn cutmix_apply<T: Scalar>(x1: &[T], x2: &[T], y1: &[u8], y2: &[u8], size: usize, rect: Rect) -> Result<(Vec<T>, Vec<u8>)> {
    let n = size * size;
    if x1.len() != n || x2.len() != n || y1.len() != n || y2.len() != n {
        return Err(Error::invalid("cutmix", format!("all inputs must hold {size}x{size} values")));
    }
    let mut xa = x1.to_vec();
    let mut ya = y1.to_vec();
    for r in 0..size {
        for c in 0..size {
            if rect.contains(r, c) {
                xa[r * size + c] = x2[r * size + c];
                ya[r * size + c] = y2[r * size + c];
            }
        }
    }
    Ok((xa, ya))
}

/// CutMix with an area fraction drawn uniformly from `[0.1, 0.4]`.
pub fn cutmix_pair<T: Scalar>(x1: &[T], x2: &[T], y1: &[u8], y2: &[u8], size: usize, seed: u64) -> Result<(Vec<T>, Vec<u8>, Rect)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let area = rng.random_range(0.1..=0.4);
    let rect = Rect::sample(size, area, rng.random());
    let (xa, ya) = cutmix_apply(x1, x2, y1, y2, size, rect)?;
    Ok((xa, ya, rect))
}

/// Rotation by `quarter_turns * 90` degrees, optionally followed by a
/// horizontal flip.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Geometric {
    pub quarter_turns: u8,
    pub flip: bool,
}

impl Geometric {
    pub fn random(rng: &mut ChaCha8Rng) -> Self {
        Self {
            quarter_turns: rng.random_range(0..4),
            flip: rng.random(),
        }
    }

    /// Source index of every output pixel of a square image.
    pub fn source_map(&self, size: usize) -> Vec<usize> {
        let mut map = Vec::with_capacity(size * size);
        for r in 0..size {
            for c in 0..size {
                let c = if self.flip { size - 1 - c } else { c };
                let (mut sr, mut sc) = (r, c);
                for _ in 0..self.quarter_turns {
                    // one counter-clockwise turn: out(r, c) = in(c, size-1-r)
                    let (a, b) = (sc, size - 1 - sr);
                    sr = a;
                    sc = b;
                }
                map.push(sr * size + sc);
            }
        }
        map
    }

    pub fn apply<V: Copy>(&self, values: &[V], size: usize) -> Vec<V> {
        self.source_map(size).into_iter().map(|s| values[s]).collect()
    }
}

/// Weak student view: geometric transform plus gain/offset jitter.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ViewAug {
    pub geo: Geometric,
    pub gain: f64,
    pub offset: f64,
}

impl ViewAug {
    pub fn random(rng: &mut ChaCha8Rng) -> Self {
        Self {
            geo: Geometric::random(rng),
            gain: rng.random_range(0.9..1.1),
            offset: rng.random_range(-0.05..0.05),
        }
    }

    pub fn image<T: Scalar>(&self, image: &[T], size: usize) -> Vec<T> {
        let (gain, offset) = (T::lit(self.gain), T::lit(self.offset));
        self.geo
            .apply(image, size)
            .into_iter()
            .map(|v| (v * gain + offset).max(T::zero()).min(T::one()))
            .collect()
    }

    /// Labels follow the geometry only.
    pub fn labels(&self, labels: &[u8], size: usize) -> Vec<u8> {
        self.geo.apply(labels, size)
    }
}

/// `teacher <- alpha * teacher + (1 - alpha) * student`, elementwise.
pub fn ema_update<T: Scalar>(teacher: &mut SegModel<T>, student: &SegModel<T>, alpha: T) -> Result<()> {
    if !(alpha >= T::zero() && alpha <= T::one()) {
        return Err(Error::invalid("alpha", format!("must lie in [0, 1], got {alpha}")));
    }
    if teacher.params.len() != student.params.len() {
        return Err(Error::invalid("teacher", "parameter count differs from student"));
    }
    for (t, s) in teacher.params.iter().zip(&student.params) {
        if t.shape() != s.shape() {
            return Err(Error::ShapeMismatch {
                op: "ema_update",
                lhs: t.shape().to_vec(),
                rhs: s.shape().to_vec(),
            });
        }
    }
    let beta = T::one() - alpha;
    for (t, s) in teacher.params.iter_mut().zip(&student.params) {
        for (a, &b) in t.data_mut().iter_mut().zip(s.data()) {
            *a = alpha * *a + beta * b;
        }
    }
    Ok(())
}
