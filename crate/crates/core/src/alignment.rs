//! Post-VQ feature adapter and patch-wise contrastive alignment against a
//! frozen feature extractor.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{Tape, Tensor, Var};

/// Channel-last `h x w x c` patch features.
#[derive(Clone, Debug, PartialEq)]
pub struct PatchFeatureMap<T> {
    pub h: usize,
    pub w: usize,
    pub c: usize,
    pub features: Vec<T>,
}

impl<T: Scalar> PatchFeatureMap<T> {
    pub fn new(h: usize, w: usize, c: usize, features: Vec<T>) -> Result<Self> {
        if h == 0 || w == 0 || c == 0 || features.len() != h * w * c {
            return Err(Error::invalid(
                "features",
                format!("{h}x{w}x{c} map needs {} values, got {}", h * w * c, features.len()),
            ));
        }
        if features.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("features", "non-finite entry"));
        }
        Ok(Self { h, w, c, features })
    }

    /// From a `[h, w, c]` tensor.
    pub fn from_tensor(t: &Tensor<T>) -> Result<Self> {
        match *t.shape() {
            [h, w, c] => Self::new(h, w, c, t.data().to_vec()),
            _ => Err(Error::InvalidShape {
                op: "patch feature map",
                msg: format!("expected [h, w, c], got {:?}", t.shape()),
            }),
        }
    }

    pub fn to_tensor(&self) -> Tensor<T> {
        Tensor::new(vec![self.h, self.w, self.c], self.features.clone()).expect("feature map shape")
    }

    pub fn positions(&self) -> usize {
        self.h * self.w
    }

    pub fn patch(&self, p: usize) -> &[T] {
        &self.features[p * self.c..(p + 1) * self.c]
    }
}

/// Nearest resize of `[n, d, h, w]` features to the target grid followed by
/// a 1x1 convolution with `[c, d, 1, 1]` weights. Returns `[n, h'*w', c]`.
pub fn pfa_project<T: Scalar>(
    tape: &mut Tape<T>,
    vq: Var,
    weight: Var,
    bias: Option<Var>,
    out_h: usize,
    out_w: usize,
) -> Result<Var> {
    let resized = tape.resize_nearest(vq, out_h, out_w)?;
    let mixed = tape.conv2d(resized, weight, bias, 1, 0)?;
    let s = tape.shape(mixed).to_vec();
    let nhwc = tape.permute(mixed, &[0, 2, 3, 1])?;
    tape.reshape(nhwc, vec![s[0], out_h * out_w, s[1]])
}

fn as_batched<T: Scalar>(tape: &mut Tape<T>, x: Var) -> Result<Var> {
    match *tape.shape(x) {
        [p, c] => tape.reshape(x, vec![1, p, c]),
        [_, _, _] => Ok(x),
        ref s => Err(Error::InvalidShape {
            op: "contrastive_align_loss",
            msg: format!("expected [positions, channels] or [batch, positions, channels], got {s:?}"),
        }),
    }
}

fn check_norms<T: Scalar>(tape: &Tape<T>, x: Var, which: &'static str) -> Result<()> {
    let c = *tape.shape(x).last().expect("rank checked");
    match tape.value(x).chunks(c).position(|row| row.iter().all(|&v| v == T::zero())) {
        Some(position) => Err(Error::ZeroNormPatch { which, position }),
        None => Ok(()),
    }
}

/// Patch-wise InfoNCE over cosine similarities.
///
/// Inputs are `[p, c]` or `[n, p, c]`. Position `i` of `f_pfa` is pulled
/// toward position `i` of `f_fm` and pushed from every other position of
/// the same sample. The result is the mean over all positions.
pub fn contrastive_align_loss<T: Scalar>(tape: &mut Tape<T>, f_pfa: Var, f_fm: Var, tau: T) -> Result<Var> {
    if !(tau > T::zero()) {
        return Err(Error::invalid("tau", format!("must be positive, got {tau}")));
    }
    if tape.shape(f_pfa) != tape.shape(f_fm) {
        return Err(Error::ShapeMismatch {
            op: "contrastive_align_loss",
            lhs: tape.shape(f_pfa).to_vec(),
            rhs: tape.shape(f_fm).to_vec(),
        });
    }
    let a = as_batched(tape, f_pfa)?;
    let b = as_batched(tape, f_fm)?;
    check_norms(tape, a, "f_pfa")?;
    check_norms(tape, b, "f_fm")?;
    let (n, p) = (tape.shape(a)[0], tape.shape(a)[1]);

    let an = tape.normalize(a, 2)?;
    let bn = tape.normalize(b, 2)?;
    let bt = tape.permute(bn, &[0, 2, 1])?;
    let sim = tape.matmul(an, bt)?;
    let logits = tape.mul_scalar(sim, T::one() / tau);
    let logp = tape.log_softmax(logits, 2)?;
    let diag: Vec<usize> = (0..n).flat_map(|s| (0..p).map(move |i| (s * p + i) * p + i)).collect();
    let pos = tape.gather(logp, diag, vec![n * p])?;
    let mean = tape.mean(pos);
    Ok(tape.mul_scalar(mean, -T::one()))
}

/// Loss between two standalone maps.
pub fn align_loss_maps<T: Scalar>(f_pfa: &PatchFeatureMap<T>, f_fm: &PatchFeatureMap<T>, tau: T) -> Result<T> {
    let mut tape = Tape::new();
    let a = tape.leaf(vec![f_pfa.positions(), f_pfa.c], f_pfa.features.clone(), false)?;
    let b = tape.leaf(vec![f_fm.positions(), f_fm.c], f_fm.features.clone(), false)?;
    if (f_pfa.h, f_pfa.w) != (f_fm.h, f_fm.w) {
        return Err(Error::ShapeMismatch {
            op: "contrastive_align_loss",
            lhs: vec![f_pfa.h, f_pfa.w, f_pfa.c],
            rhs: vec![f_fm.h, f_fm.w, f_fm.c],
        });
    }
    let loss = contrastive_align_loss(&mut tape, a, b, tau)?;
    Ok(tape.item(loss))
}

/// Frozen random two-layer patch extractor.
///
/// A non-overlapping `4x4` patch embedding with ReLU followed by a `2x2`
/// stride-2 merge, so each output position covers an `8x8` image patch.
#[derive(Clone, Debug, PartialEq)]
pub struct FrozenExtractor<T> {
    pub seed: u64,
    pub in_ch: usize,
    pub widths: [usize; 2],
    w1: Tensor<T>,
    b1: Tensor<T>,
    w2: Tensor<T>,
    b2: Tensor<T>,
}

const PATCH1: usize = 4;
const PATCH2: usize = 2;

fn uniform_tensor<T: Scalar>(rng: &mut ChaCha8Rng, shape: Vec<usize>, bound: f64) -> Tensor<T> {
    let n = shape.iter().product();
    let data = (0..n).map(|_| T::lit(rng.random_range(-bound..bound))).collect();
    Tensor::new(shape, data).expect("extractor weight shape")
}

impl<T: Scalar> FrozenExtractor<T> {
    pub fn new(seed: u64, in_ch: usize, widths: [usize; 2]) -> Result<Self> {
        if in_ch == 0 || widths.contains(&0) {
            return Err(Error::invalid("widths", "channel counts must be positive"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let fan1 = (in_ch * PATCH1 * PATCH1) as f64;
        let fan2 = (widths[0] * PATCH2 * PATCH2) as f64;
        Ok(Self {
            seed,
            in_ch,
            widths,
            w1: uniform_tensor(&mut rng, vec![widths[0], in_ch, PATCH1, PATCH1], (6.0 / fan1).sqrt()),
            b1: uniform_tensor(&mut rng, vec![widths[0]], 0.1),
            w2: uniform_tensor(&mut rng, vec![widths[1], widths[0], PATCH2, PATCH2], (3.0 / fan2).sqrt()),
            b2: uniform_tensor(&mut rng, vec![widths[1]], 0.1),
        })
    }

    /// Downsampling factor from image to patch grid.
    pub fn stride() -> usize {
        PATCH1 * PATCH2
    }

    pub fn out_channels(&self) -> usize {
        self.widths[1]
    }

    pub fn grid(&self, h: usize, w: usize) -> Result<(usize, usize)> {
        let s = Self::stride();
        if h == 0 || w == 0 || !h.is_multiple_of(s) || !w.is_multiple_of(s) {
            return Err(Error::invalid("image", format!("{h}x{w} is not a positive multiple of {s}")));
        }
        Ok((h / s, w / s))
    }

    /// `[n, in_ch, h, w]` images to `[n, (h/8)*(w/8), c']` features, recorded
    /// as a constant on `tape`.
    pub fn extract_on(&self, tape: &mut Tape<T>, images: &Tensor<T>) -> Result<Var> {
        let feats = self.extract(images)?;
        Ok(tape.constant(&feats))
    }

    pub fn extract(&self, images: &Tensor<T>) -> Result<Tensor<T>> {
        let s = images.shape();
        if s.len() != 4 || s[1] != self.in_ch {
            return Err(Error::InvalidShape {
                op: "frozen_extract",
                msg: format!("expected [n, {}, h, w], got {s:?}", self.in_ch),
            });
        }
        let (gh, gw) = self.grid(s[2], s[3])?;
        let mut tape = Tape::new();
        let x = tape.constant(images);
        let w1 = tape.constant(&self.w1);
        let b1 = tape.constant(&self.b1);
        let w2 = tape.constant(&self.w2);
        let b2 = tape.constant(&self.b2);
        let h = tape.conv2d(x, w1, Some(b1), PATCH1, 0)?;
        let h = tape.relu(h);
        let f = tape.conv2d(h, w2, Some(b2), PATCH2, 0)?;
        let nhwc = tape.permute(f, &[0, 2, 3, 1])?;
        let out = tape.reshape(nhwc, vec![s[0], gh * gw, self.widths[1]])?;
        Ok(tape.tensor(out))
    }
}

/// Features of one `h x w` single-channel image as a patch map.
pub fn frozen_extract<T: Scalar>(image: &[T], h: usize, w: usize, fe: &FrozenExtractor<T>) -> Result<PatchFeatureMap<T>> {
    let img = Tensor::new(vec![1, fe.in_ch, h, w], image.to_vec())?;
    let (gh, gw) = fe.grid(h, w)?;
    let feats = fe.extract(&img)?;
    PatchFeatureMap::new(gh, gw, fe.out_channels(), feats.into_data())
}
