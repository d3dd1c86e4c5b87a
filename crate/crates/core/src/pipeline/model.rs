use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::codebook::{ste_dequantize, ste_select, Codebook, Metric, QuantizedMap};
use crate::error::{Error, Result};
use crate::perturbation::{keyed_uniform, sample_indices, PerturbationKernel};
use crate::scalar::Scalar;
use crate::tensor::{Tape, Tensor, Var};

/// Layer sizes shared by student and teacher.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Arch {
    pub in_ch: usize,
    pub width: usize,
    pub d: usize,
    pub k: usize,
    pub classes: usize,
    pub fm_channels: usize,
}

/// Parameter slots, in storage order.
pub mod slot {
    pub const ENC1_W: usize = 0;
    pub const ENC1_B: usize = 1;
    pub const ENC2_W: usize = 2;
    pub const ENC2_B: usize = 3;
    pub const ENC3_W: usize = 4;
    pub const ENC3_B: usize = 5;
    pub const IMG: usize = 6;
    pub const SEG: usize = 12;
    pub const CODEBOOK: usize = 18;
    pub const PFA_W: usize = 19;
    pub const PFA_B: usize = 20;
    pub const COUNT: usize = 21;
}

pub const PARAM_NAMES: [&str; slot::COUNT] = [
    "enc1.w", "enc1.b", "enc2.w", "enc2.b", "enc3.w", "enc3.b", "img1.w", "img1.b", "img2.w", "img2.b", "img3.w",
    "img3.b", "seg1.w", "seg1.b", "seg2.w", "seg2.b", "seg3.w", "seg3.b", "codebook", "pfa.w", "pfa.b",
];

/// Encoder (stride 2, 2, 1), codebook, image and segmentation decoders
/// (two stride-2 transposed convolutions and a 3x3 head), and the 1x1
/// feature adapter.
#[derive(Clone, Debug, PartialEq)]
pub struct SegModel<T> {
    pub arch: Arch,
    pub params: Vec<Tensor<T>>,
}

fn he_uniform<T: Scalar>(rng: &mut ChaCha8Rng, shape: Vec<usize>, fan_in: usize) -> Tensor<T> {
    let bound = (6.0 / fan_in as f64).sqrt();
    let n = shape.iter().product();
    let data = (0..n).map(|_| T::lit(rng.random_range(-bound..bound))).collect();
    Tensor::new(shape, data).expect("parameter shape")
}

fn decoder_shapes(a: &Arch, out: usize) -> [Vec<usize>; 6] {
    let w = a.width;
    [
        vec![a.d, w, 4, 4],
        vec![w],
        vec![w, w, 4, 4],
        vec![w],
        vec![out, w, 3, 3],
        vec![out],
    ]
}

impl<T: Scalar> SegModel<T> {
    pub fn shapes(a: &Arch) -> Vec<Vec<usize>> {
        let w = a.width;
        let mut s = vec![
            vec![w, a.in_ch, 3, 3],
            vec![w],
            vec![2 * w, w, 3, 3],
            vec![2 * w],
            vec![a.d, 2 * w, 3, 3],
            vec![a.d],
        ];
        s.extend(decoder_shapes(a, a.in_ch));
        s.extend(decoder_shapes(a, a.classes));
        s.push(vec![a.k, a.d]);
        s.push(vec![a.fm_channels, a.d, 1, 1]);
        s.push(vec![a.fm_channels]);
        s
    }

    /// He-uniform weights, zero biases, uniform `(-1, 1)` codebook.
    pub fn init(arch: Arch, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let params = Self::shapes(&arch)
            .into_iter()
            .enumerate()
            .map(|(i, shape)| {
                if i == slot::CODEBOOK {
                    let n = shape.iter().product();
                    let data = (0..n).map(|_| T::lit(rng.random_range(-1.0..1.0))).collect();
                    return Tensor::new(shape, data).expect("codebook shape");
                }
                if shape.len() == 1 {
                    return Tensor::zeros(shape);
                }
                // transposed-conv weights are [in, out, kh, kw]
                let transposed = matches!(i, 6 | 8 | 12 | 14);
                let fan = if transposed { shape[0] * shape[2] * shape[3] / 4 } else { shape[1..].iter().product() };
                he_uniform(&mut rng, shape, fan.max(1))
            })
            .collect();
        Self { arch, params }
    }

    pub fn codebook(&self) -> Result<Codebook<T>> {
        let cb = &self.params[slot::CODEBOOK];
        Codebook::new(self.arch.k, self.arch.d, cb.data().to_vec(), Metric::Euclidean)
    }

    pub fn set_codebook(&mut self, cb: &Codebook<T>) -> Result<()> {
        if (cb.k(), cb.d()) != (self.arch.k, self.arch.d) {
            return Err(Error::invalid("codebook", "size does not match the model"));
        }
        self.params[slot::CODEBOOK] = Tensor::new(vec![cb.k(), cb.d()], cb.codewords().to_vec())?;
        Ok(())
    }

    /// Records every parameter; `trainable` decides whether gradients flow.
    pub fn register(&self, tape: &mut Tape<T>, trainable: bool) -> ModelVars {
        ModelVars {
            vars: self
                .params
                .iter()
                .map(|p| if trainable { tape.param(&p.clone().with_requires_grad(true)) } else { tape.constant(p) })
                .collect(),
        }
    }

    pub fn latent_size(&self, image: usize) -> usize {
        image / 4
    }
}

/// Tape handles of a registered model.
#[derive(Clone, Debug)]
pub struct ModelVars {
    pub vars: Vec<Var>,
}

impl ModelVars {
    pub fn get(&self, slot: usize) -> Var {
        self.vars[slot]
    }
}

/// Replacement for the quantized features of one unlabeled stream.
#[derive(Clone, Debug)]
pub enum Perturbation<'a, T> {
    Qpm { kernel: &'a PerturbationKernel<T>, seed: u64 },
    Dropout { p: T, seed: u64 },
}

/// Assignment captured from one forward call.
#[derive(Clone, Debug, PartialEq)]
pub struct FrozenAssignment<T> {
    pub z: Vec<T>,
    pub indices: Vec<usize>,
    pub perturbed: Option<Vec<usize>>,
}

/// How the quantizer behaves during a forward pass.
///
/// `Replay` substitutes `z + (c - z0)` with the offsets captured by
/// `Record`: the function whose exact derivative is the straight-through
/// gradient.
#[derive(Debug, Default)]
pub enum QuantMode<T> {
    #[default]
    Nearest,
    Record(Vec<FrozenAssignment<T>>),
    Replay(Vec<FrozenAssignment<T>>, usize),
}

#[derive(Clone, Debug)]
pub struct ForwardOut<T> {
    /// `[n*h*w, d]` encoder features.
    pub z: Var,
    /// Clean quantized features, `[n, d, h, w]`.
    pub q: Var,
    /// Features fed to the segmentation decoder.
    pub q_seg: Var,
    pub x_hat: Var,
    pub logits: Var,
    /// `[n, classes, H, W]` softmax.
    pub probs: Var,
    pub qm: QuantizedMap<T>,
}

fn conv_block<T: Scalar>(tape: &mut Tape<T>, v: &ModelVars, base: usize, x: Var, stride: usize, relu: bool) -> Result<Var> {
    let y = tape.conv2d(x, v.get(base), Some(v.get(base + 1)), stride, 1)?;
    Ok(if relu { tape.relu(y) } else { y })
}

fn decode<T: Scalar>(tape: &mut Tape<T>, v: &ModelVars, base: usize, q: Var) -> Result<Var> {
    let h = tape.conv_transpose2d(q, v.get(base), Some(v.get(base + 1)), 2, 1)?;
    let h = tape.relu(h);
    let h = tape.conv_transpose2d(h, v.get(base + 2), Some(v.get(base + 3)), 2, 1)?;
    let h = tape.relu(h);
    tape.conv2d(h, v.get(base + 4), Some(v.get(base + 5)), 1, 1)
}

/// `[n, in, H, W]` images to `[n, d, H/4, W/4]` features.
pub fn encode<T: Scalar>(tape: &mut Tape<T>, v: &ModelVars, x: Var) -> Result<Var> {
    let h = conv_block(tape, v, slot::ENC1_W, x, 2, true)?;
    let h = conv_block(tape, v, slot::ENC2_W, h, 2, true)?;
    conv_block(tape, v, slot::ENC3_W, h, 1, false)
}

fn rows_to_nchw<T: Scalar>(tape: &mut Tape<T>, rows: Var, n: usize, h: usize, w: usize, d: usize) -> Result<Var> {
    let nhwc = tape.reshape(rows, vec![n, h, w, d])?;
    tape.permute(nhwc, &[0, 3, 1, 2])
}

fn offset_substitute<T: Scalar>(tape: &mut Tape<T>, z: Var, frozen_z: &[T], cb: &Codebook<T>, indices: &[usize]) -> Result<Var> {
    let d = cb.d();
    let offsets: Vec<T> = indices
        .iter()
        .enumerate()
        .flat_map(|(p, &i)| (0..d).map(move |j| (p, i, j)))
        .map(|(p, i, j)| cb.codeword(i)[j] - frozen_z[p * d + j])
        .collect();
    let off = tape.leaf(tape.shape(z).to_vec(), offsets, false)?;
    tape.add(z, off)
}

/// Full forward pass: encode, quantize, optionally perturb the
/// segmentation input, decode both branches.
pub fn forward<T: Scalar>(
    tape: &mut Tape<T>,
    v: &ModelVars,
    cb: &Codebook<T>,
    x: Var,
    perturb: Option<Perturbation<'_, T>>,
    mode: &mut QuantMode<T>,
) -> Result<ForwardOut<T>> {
    let z4 = encode(tape, v, x)?;
    let s = tape.shape(z4).to_vec();
    let (n, d, h, w) = (s[0], s[1], s[2], s[3]);
    let nhwc = tape.permute(z4, &[0, 2, 3, 1])?;
    let z = tape.reshape(nhwc, vec![n * h * w, d])?;

    let (q_rows, q_seg_rows, qm) = if let QuantMode::Replay(store, next) = mode {
        let fa = store
            .get(*next)
            .ok_or_else(|| Error::invalid("quant mode", "replay ran out of recorded assignments"))?;
        *next += 1;
        let q = offset_substitute(tape, z, &fa.z, cb, &fa.indices)?;
        let q_seg = match (&perturb, &fa.perturbed) {
            (Some(Perturbation::Qpm { .. }), Some(idx)) => Some(offset_substitute(tape, z, &fa.z, cb, idx)?),
            _ => None,
        };
        let zt = Tensor::new(vec![n * h * w, d], fa.z.clone())?;
        let qm = crate::codebook::quantize(&zt, cb)?.with_indices(fa.indices.clone(), cb)?;
        (q, q_seg, qm)
    } else {
        let (q, qm) = ste_dequantize(tape, z, cb)?;
        let mut perturbed = None;
        let q_seg = match &perturb {
            Some(Perturbation::Qpm { kernel, seed }) => {
                let idx = sample_indices(&qm.indices, kernel, *seed)?;
                let out = ste_select(tape, z, cb, &idx)?;
                perturbed = Some(idx);
                Some(out)
            }
            _ => None,
        };
        if let QuantMode::Record(store) = mode {
            store.push(FrozenAssignment {
                z: tape.value(z).to_vec(),
                indices: qm.indices.clone(),
                perturbed,
            });
        }
        (q, q_seg, qm)
    };

    let q = rows_to_nchw(tape, q_rows, n, h, w, d)?;
    let q_seg = match (q_seg_rows, &perturb) {
        (Some(rows), _) => rows_to_nchw(tape, rows, n, h, w, d)?,
        (None, Some(Perturbation::Dropout { p, seed })) => {
            let keep = T::one() - *p;
            let scale = T::one() / keep;
            let mask: Vec<T> = (0..n * d * h * w)
                .map(|i| if T::lit(keyed_uniform(*seed, i as u64)) < keep { scale } else { T::zero() })
                .collect();
            let m = tape.leaf(vec![n, d, h, w], mask, false)?;
            tape.mul(q, m)?
        }
        _ => q,
    };
    let x_hat = decode(tape, v, slot::IMG, q)?;
    let logits = decode(tape, v, slot::SEG, q_seg)?;
    let probs = tape.softmax(logits, 1)?;
    Ok(ForwardOut {
        z,
        q,
        q_seg,
        x_hat,
        logits,
        probs,
        qm,
    })
}
