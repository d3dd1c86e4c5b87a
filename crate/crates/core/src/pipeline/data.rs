use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// One `size x size` single-channel image with its lesion mask.
#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticSample<T> {
    pub id: usize,
    pub size: usize,
    pub image: Vec<T>,
    pub mask: Vec<u8>,
    pub labeled: bool,
}

fn noise(rng: &mut ChaCha8Rng) -> f64 {
    // Irwin-Hall(3) centred: unit-ish bell, std 0.5
    rng.random::<f64>() + rng.random::<f64>() + rng.random::<f64>() - 1.5
}

fn sample<T: Scalar>(id: usize, size: usize, seed: u64, labeled: bool) -> SyntheticSample<T> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(id as u64);
    let s = size as f64;
    let base = rng.random_range(0.15..0.4);
    let contrast = rng.random_range(0.2..0.45);
    let sigma = rng.random_range(0.06..0.14);
    let (gx, gy) = (rng.random_range(-0.15..0.15), rng.random_range(-0.15..0.15));
    let cy = rng.random_range(0.25..0.75) * s;
    let cx = rng.random_range(0.25..0.75) * s;
    let ay = rng.random_range(0.1..0.25) * s;
    let ax = rng.random_range(0.1..0.25) * s;
    let theta = rng.random_range(0.0..std::f64::consts::PI);
    let (st, ct) = theta.sin_cos();

    let mut image = Vec::with_capacity(size * size);
    let mut mask = Vec::with_capacity(size * size);
    for r in 0..size {
        for c in 0..size {
            let (y, x) = (r as f64 + 0.5 - cy, c as f64 + 0.5 - cx);
            let u = (ct * x + st * y) / ax;
            let v = (-st * x + ct * y) / ay;
            let inside = u * u + v * v <= 1.0;
            let shade = base + gx * (c as f64 / s - 0.5) + gy * (r as f64 / s - 0.5);
            let val = shade + if inside { contrast } else { 0.0 } + sigma * 2.0 * noise(&mut rng);
            image.push(T::lit(val.clamp(0.0, 1.0)));
            mask.push(inside as u8);
        }
    }
    // the centre pixel lies in the ellipse when both semi-axes exceed one pixel
    if !mask.contains(&1) {
        let p = (cy as usize).min(size - 1) * size + (cx as usize).min(size - 1);
        mask[p] = 1;
    }
    SyntheticSample {
        id,
        size,
        image,
        mask,
        labeled,
    }
}

/// Noisy shaded background with one bright ellipse per image. The first
/// `ceil(labeled_ratio * n)` samples are flagged labeled.
pub fn gen_synthetic_dataset<T: Scalar>(n: usize, size: usize, seed: u64, labeled_ratio: f64) -> Result<Vec<SyntheticSample<T>>> {
    if n < 4 {
        return Err(Error::invalid("n", format!("need at least 4 samples, got {n}")));
    }
    if size < 16 {
        return Err(Error::invalid("size", format!("need size >= 16, got {size}")));
    }
    if !(0.0..=1.0).contains(&labeled_ratio) {
        return Err(Error::invalid("labeled_ratio", format!("must lie in [0, 1], got {labeled_ratio}")));
    }
    let labeled = (labeled_ratio * n as f64).ceil() as usize;
    Ok((0..n).map(|i| sample(i, size, seed, i < labeled)).collect())
}

/// `[n, 1, size, size]` batch of the selected images.
pub fn stack_images<T: Scalar>(samples: &[&SyntheticSample<T>]) -> Result<Tensor<T>> {
    let size = samples.first().map_or(0, |s| s.size);
    let data: Vec<T> = samples.iter().flat_map(|s| s.image.iter().copied()).collect();
    Tensor::new(vec![samples.len(), 1, size, size], data)
}

/// CSV dump: `id,labeled,row,col,intensity,mask`.
pub fn dataset_csv<T: Scalar>(samples: &[SyntheticSample<T>]) -> String {
    let mut out = String::from("id,labeled,row,col,intensity,mask\n");
    for s in samples {
        for r in 0..s.size {
            for c in 0..s.size {
                let p = r * s.size + c;
                out.push_str(&format!(
                    "{},{},{},{},{},{}\n",
                    s.id,
                    s.labeled as u8,
                    r,
                    c,
                    crate::scalar::fmt_sig17(s.image[p]),
                    s.mask[p]
                ));
            }
        }
    }
    out
}
