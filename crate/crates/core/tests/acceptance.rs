//! End-to-end acceptance suite. Prints one PASS/FAIL line per criterion and
//! fails if any criterion fails.

use std::io::Write as _;
use std::path::Path;
use std::process::Command;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use statrs::distribution::{ContinuousCDF, StudentsT};

use vqlab::alignment::contrastive_align_loss;
use vqlab::codebook::{init_codebook, ste_dequantize, Codebook, InitScheme, Metric, QuantizedMap};
use vqlab::metrics::{dice_jaccard, paired_t_test, surface_metrics, Mask, MaskPair};
use vqlab::perturbation::{
    bounds_eps1, kl_dropout, kl_qpm, perturbed_marginal, sample_perturbed, transition_kernel,
};
use vqlab::pipeline::{slot, total_loss, train, LossContext, PerturbMode, QuantMode, SegModel, TrainConfig};
use vqlab::tensor::{finite_diff_check, Tape, Tensor, Var};
use vqlab::Result;

const DROPOUT_TOL: f64 = 1e-12;
const DROPOUT_099: f64 = 47.197;
const DROPOUT_099_TOL: f64 = 1e-9;
const ROW_SUM_TOL: f64 = 1e-12;
const WORKED_TOL: f64 = 1e-3;
const MC_DRAWS: usize = 1_000_000;
const MC_SIGMAS: f64 = 3.0;
const FD_STEP: f64 = 1e-6;
const FD_TOL: f64 = 1e-4;
const SURFACE_TOL: f64 = 1e-9;
const TTEST_TOL: f64 = 1e-6;

struct Outcome {
    pass: bool,
    detail: String,
}

fn report(id: usize, name: &str, budget: Option<Duration>, f: impl FnOnce() -> Outcome) -> bool {
    let t0 = Instant::now();
    let mut o = f();
    let dt = t0.elapsed();
    if let Some(b) = budget {
        if dt > b {
            o.pass = false;
            o.detail.push_str(&format!("; over the {b:?} budget"));
        }
    }
    let line = format!(
        "criterion {id:>2} {} {name}: {} ({:.2}s)\n",
        if o.pass { "PASS" } else { "FAIL" },
        o.detail,
        dt.as_secs_f64()
    );
    // bypasses the harness capture so the lines land in the log
    let mut out = std::io::stdout();
    out.write_all(line.as_bytes()).unwrap();
    out.flush().unwrap();
    o.pass
}

fn random_codebook(rng: &mut ChaCha8Rng, k_max: usize) -> Codebook<f64> {
    let k = rng.random_range(2..=k_max);
    let d = rng.random_range(1..=8);
    init_codebook(k, d, InitScheme::UniformRandom, rng.random(), None).unwrap()
}

fn dropout_closed_form() -> Outcome {
    let oracle = |p: f64| 0.5 * (p / (1.0 - p) + (1.0 - p).ln());
    let grid: Vec<f64> = (1..=99).map(|i| i as f64 / 100.0).collect();
    let kl: Vec<f64> = grid.iter().map(|&p| kl_dropout(p).unwrap().kl).collect();
    let worst = grid.iter().zip(&kl).map(|(&p, &v)| (v - oracle(p)).abs()).fold(0.0, f64::max);
    let zero = kl_dropout(0.0).unwrap().kl;
    let monotone = (0..kl.len()).all(|i| (i + 1..kl.len()).all(|j| kl[i] < kl[j])) && zero < kl[0];
    let top = kl[98];
    // the quoted figure carries three decimals; the closed form pins the rest
    let pinned = (top - oracle(0.99)).abs() <= DROPOUT_099_TOL && (top - DROPOUT_099).abs() < 5e-4;
    Outcome {
        pass: worst <= DROPOUT_TOL && zero == 0.0 && monotone && pinned,
        detail: format!("max err {worst:.2e}, kl(0)={zero}, monotone={monotone}, kl(0.99)={top:.12}"),
    }
}

fn kernel_rows() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let (mut worst, mut diag_bad) = (0.0f64, 0usize);
    for _ in 0..1000 {
        let cb = random_codebook(&mut rng, 32);
        let eps: f64 = rng.random();
        let kernel = transition_kernel(&cb, eps).unwrap();
        for i in 0..cb.k() {
            worst = worst.max((kernel.row(i).iter().sum::<f64>() - 1.0).abs());
            diag_bad += (kernel.prob(i, i) != 1.0 - eps) as usize;
        }
    }
    let cb = init_codebook(4, 2, InitScheme::UniformRandom, 3, None).unwrap();
    let kernel = transition_kernel(&cb, 0.7).unwrap();
    let mut fig_ok = true;
    for i in 0..4 {
        let off: f64 = (0..4).filter(|&j| j != i).map(|j| kernel.prob(i, j)).sum();
        fig_ok &= (kernel.prob(i, i) - 0.30).abs() < 1e-15 && (off - 0.70).abs() <= ROW_SUM_TOL;
    }
    Outcome {
        pass: worst <= ROW_SUM_TOL && diag_bad == 0 && fig_ok,
        detail: format!("max row error {worst:.2e}, diagonal mismatches {diag_bad}, K=4 eps=0.7 split ok={fig_ok}"),
    }
}

fn brute_marginal(points: &[Vec<f64>], eps: f64) -> (Vec<f64>, f64) {
    let k = points.len();
    let dist = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
    let mut q = vec![0.0; k];
    for i in 0..k {
        let w: Vec<f64> = (0..k).map(|j| if i == j { 0.0 } else { (-dist(&points[i], &points[j])).exp() }).collect();
        let z: f64 = w.iter().sum();
        for j in 0..k {
            q[j] += if i == j { 1.0 - eps } else { eps * w[j] / z } / k as f64;
        }
    }
    let u = 1.0 / k as f64;
    let kl = q.iter().map(|&qj| u * (u / qj).ln()).sum();
    (q, kl)
}

fn marginal_and_kl() -> Outcome {
    let mut equi_ok = true;
    for k in [2usize, 3, 5, 16] {
        for scale in [1.0, 0.3, 2.5] {
            let mut cw = vec![0.0; k * k];
            for i in 0..k {
                cw[i * k + i] = scale;
            }
            let cb = Codebook::new(k, k, cw, Metric::Euclidean).unwrap();
            for eps in [0.0, 0.25, 0.5, 0.75, 1.0] {
                let m = perturbed_marginal(&transition_kernel(&cb, eps).unwrap());
                equi_ok &= m.q().iter().all(|&q| q == 1.0 / k as f64) && kl_qpm(&m).unwrap() == 0.0;
            }
        }
    }
    let cb = Codebook::new(3, 1, vec![0.0, 1.0, 3.0], Metric::Euclidean).unwrap();
    let m = perturbed_marginal(&transition_kernel(&cb, 0.6).unwrap());
    let (q_ref, kl_ref) = brute_marginal(&[vec![0.0], vec![1.0], vec![3.0]], 0.6);
    let q = m.q();
    let kl = kl_qpm(&m).unwrap();
    let quoted = [0.3333, 0.4557, 0.2110];
    let worked_ok = (0..3).all(|j| (q[j] - q_ref[j]).abs() <= WORKED_TOL && (q[j] - quoted[j]).abs() <= WORKED_TOL)
        && (kl - kl_ref).abs() <= WORKED_TOL
        && (kl - 0.0483).abs() <= WORKED_TOL;
    Outcome {
        pass: equi_ok && worked_ok,
        detail: format!(
            "equidistant uniform/zero-KL={equi_ok}, worked Q=({:.4}, {:.4}, {:.4}) KL={kl:.4} (oracle {kl_ref:.4})",
            q[0], q[1], q[2]
        ),
    }
}

fn extreme_bounds() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let (mut violations, mut non_finite) = (0usize, 0usize);
    for _ in 0..1000 {
        let cb = random_codebook(&mut rng, 32);
        let b = bounds_eps1(&cb).unwrap();
        let m = perturbed_marginal(&transition_kernel(&cb, 1.0).unwrap());
        let q = m.q();
        let lo = q.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = q.iter().copied().fold(0.0, f64::max);
        violations += (b.lower > lo) as usize + (hi > b.upper) as usize;
        non_finite += !kl_qpm(&m).is_ok_and(f64::is_finite) as usize;
    }
    Outcome {
        pass: violations == 0 && non_finite == 0,
        detail: format!("{violations} bound violations, {non_finite} non-finite KL values over 1000 codebooks"),
    }
}

fn monte_carlo() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let (mut entries, mut outside, mut worst) = (0usize, 0usize, 0.0f64);
    for cfg in 0..20 {
        let k = rng.random_range(2..=8);
        let d = rng.random_range(1..=4);
        let cb = init_codebook(k, d, InitScheme::UniformRandom, rng.random(), None).unwrap();
        let eps: f64 = rng.random_range(0.05..1.0);
        let row = rng.random_range(0..k);
        let kernel = transition_kernel(&cb, eps).unwrap();
        let qm = QuantizedMap {
            grid: vec![MC_DRAWS],
            d,
            indices: vec![row; MC_DRAWS],
            dequantized: cb.codeword(row).repeat(MC_DRAWS),
            source: cb.codeword(row).repeat(MC_DRAWS),
        };
        let out = sample_perturbed(&qm, &kernel, &cb, 1000 + cfg).unwrap();
        let mut counts = vec![0usize; k];
        for &j in &out.indices {
            counts[j] += 1;
        }
        let n = MC_DRAWS as f64;
        for (j, &c) in counts.iter().enumerate() {
            let p = kernel.prob(row, j);
            let sigma = (n * p * (1.0 - p)).sqrt();
            let z = if sigma > 0.0 { (c as f64 - n * p).abs() / sigma } else { (c as f64 - n * p).abs() };
            worst = worst.max(z);
            entries += 1;
            outside += (z > MC_SIGMAS) as usize;
        }
    }
    Outcome {
        pass: outside == 0,
        detail: format!("{outside}/{entries} entries outside {MC_SIGMAS} sigma, worst {worst:.2} sigma"),
    }
}

fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(lo..hi)).collect()).unwrap()
}

/// Values bounded away from zero, for the kinks of relu and abs.
fn off_zero(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let m = rng.random_range(0.1..1.5);
            if rng.random::<bool>() { m } else { -m }
        })
        .collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

/// Weighted sum against a fixed random tensor, so every output coordinate
/// reaches the scalar with a distinct weight.
fn readout(tape: &mut Tape<f64>, y: Var, seed: u64) -> Result<Var> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w = random_tensor(&mut rng, tape.shape(y), -1.0, 1.0);
    let wv = tape.constant(&w);
    let p = tape.mul(y, wv)?;
    Ok(tape.sum(p))
}

type Probe = Box<dyn Fn(&mut Tape<f64>, Var) -> Result<Var>>;

fn primitive_probes(rng: &mut ChaCha8Rng) -> Vec<(&'static str, Tensor<f64>, Probe)> {
    let mut probes: Vec<(&'static str, Tensor<f64>, Probe)> = Vec::new();
    let other = random_tensor(rng, &[3, 4], -1.0, 1.0);
    let mk = |o: &Tensor<f64>| o.clone();

    let b = mk(&other);
    probes.push(("add", random_tensor(rng, &[3, 4], -1.0, 1.0), Box::new(move |t, x| {
        let c = t.constant(&b);
        let y = t.add(x, c)?;
        readout(t, y, 1)
    })));
    let b = mk(&other);
    probes.push(("sub", random_tensor(rng, &[3, 4], -1.0, 1.0), Box::new(move |t, x| {
        let c = t.constant(&b);
        let y = t.sub(c, x)?;
        readout(t, y, 2)
    })));
    let b = mk(&other);
    probes.push(("mul", random_tensor(rng, &[3, 4], -1.0, 1.0), Box::new(move |t, x| {
        let c = t.constant(&b);
        let y = t.mul(x, c)?;
        let y = t.mul(y, x)?;
        readout(t, y, 3)
    })));
    probes.push(("add_scalar/mul_scalar", random_tensor(rng, &[5], -1.0, 1.0), Box::new(|t, x| {
        let y = t.add_scalar(x, 0.7);
        let y = t.mul(y, y)?;
        let y = t.mul_scalar(y, -1.3);
        readout(t, y, 4)
    })));
    probes.push(("relu", off_zero(rng, &[4, 3]), Box::new(|t, x| {
        let y = t.relu(x);
        let y = t.mul(y, y)?;
        readout(t, y, 5)
    })));
    probes.push(("exp", random_tensor(rng, &[6], -1.0, 1.0), Box::new(|t, x| {
        let y = t.exp(x);
        readout(t, y, 6)
    })));
    probes.push(("log", random_tensor(rng, &[6], 0.3, 2.0), Box::new(|t, x| {
        let y = t.log(x);
        readout(t, y, 7)
    })));
    probes.push(("sum", random_tensor(rng, &[2, 3], -1.0, 1.0), Box::new(|t, x| {
        let y = t.mul(x, x)?;
        Ok(t.sum(y))
    })));
    probes.push(("mean", random_tensor(rng, &[2, 3], -1.0, 1.0), Box::new(|t, x| {
        let y = t.mul(x, x)?;
        Ok(t.mean(y))
    })));
    probes.push(("sum_axis", random_tensor(rng, &[2, 3, 4], -1.0, 1.0), Box::new(|t, x| {
        let y = t.sum_axis(x, 1)?;
        let y = t.mul(y, y)?;
        readout(t, y, 8)
    })));
    let b = random_tensor(rng, &[4, 2], -1.0, 1.0);
    probes.push(("matmul lhs", random_tensor(rng, &[3, 4], -1.0, 1.0), Box::new(move |t, x| {
        let c = t.constant(&b);
        let y = t.matmul(x, c)?;
        readout(t, y, 9)
    })));
    let a = random_tensor(rng, &[2, 3, 4], -1.0, 1.0);
    probes.push(("matmul batched rhs", random_tensor(rng, &[2, 4, 2], -1.0, 1.0), Box::new(move |t, x| {
        let c = t.constant(&a);
        let y = t.matmul(c, x)?;
        readout(t, y, 10)
    })));
    let (w, bias) = (random_tensor(rng, &[3, 2, 3, 3], -1.0, 1.0), random_tensor(rng, &[3], -1.0, 1.0));
    probes.push(("conv2d input", random_tensor(rng, &[2, 2, 5, 5], -1.0, 1.0), Box::new(move |t, x| {
        let (wv, bv) = (t.constant(&w), t.constant(&bias));
        let y = t.conv2d(x, wv, Some(bv), 2, 1)?;
        readout(t, y, 11)
    })));
    let img = random_tensor(rng, &[2, 2, 5, 5], -1.0, 1.0);
    probes.push(("conv2d weight", random_tensor(rng, &[3, 2, 3, 3], -1.0, 1.0), Box::new(move |t, w| {
        let xv = t.constant(&img);
        let y = t.conv2d(xv, w, None, 1, 1)?;
        readout(t, y, 12)
    })));
    let w = random_tensor(rng, &[3, 2, 4, 4], -1.0, 1.0);
    probes.push(("conv_transpose2d input", random_tensor(rng, &[1, 3, 3, 3], -1.0, 1.0), Box::new(move |t, x| {
        let wv = t.constant(&w);
        let y = t.conv_transpose2d(x, wv, None, 2, 1)?;
        readout(t, y, 13)
    })));
    let img = random_tensor(rng, &[1, 3, 3, 3], -1.0, 1.0);
    probes.push(("conv_transpose2d weight", random_tensor(rng, &[3, 2, 4, 4], -1.0, 1.0), Box::new(move |t, w| {
        let xv = t.constant(&img);
        let y = t.conv_transpose2d(xv, w, None, 2, 1)?;
        readout(t, y, 14)
    })));
    let img = random_tensor(rng, &[1, 3, 3, 3], -1.0, 1.0);
    let w = random_tensor(rng, &[3, 2, 4, 4], -1.0, 1.0);
    probes.push(("conv_transpose2d bias", random_tensor(rng, &[2], -1.0, 1.0), Box::new(move |t, b| {
        let (xv, wv) = (t.constant(&img), t.constant(&w));
        let y = t.conv_transpose2d(xv, wv, Some(b), 2, 1)?;
        let y = t.mul(y, y)?;
        readout(t, y, 15)
    })));
    probes.push(("softmax", random_tensor(rng, &[2, 4, 3], -2.0, 2.0), Box::new(|t, x| {
        let y = t.softmax(x, 1)?;
        readout(t, y, 16)
    })));
    probes.push(("log_softmax", random_tensor(rng, &[3, 5], -2.0, 2.0), Box::new(|t, x| {
        let y = t.log_softmax(x, 1)?;
        readout(t, y, 17)
    })));
    probes.push(("normalize", random_tensor(rng, &[3, 4], -1.0, 1.0), Box::new(|t, x| {
        let y = t.normalize(x, 1)?;
        readout(t, y, 18)
    })));
    let b = mk(&other);
    probes.push(("l1_distance", off_zero(rng, &[3, 4]), Box::new(move |t, x| {
        let z = t.constant(&Tensor::zeros(vec![3, 4]));
        let c = t.constant(&b);
        let y = t.l1_distance(x, z)?;
        let s = t.sq_l2_distance(x, c)?;
        let y = t.mul(y, s)?;
        Ok(y)
    })));
    let b = mk(&other);
    probes.push(("sq_l2_distance", random_tensor(rng, &[3, 4], -1.0, 1.0), Box::new(move |t, x| {
        let c = t.constant(&b);
        t.sq_l2_distance(c, x)
    })));
    probes.push(("gather", random_tensor(rng, &[6], -1.0, 1.0), Box::new(|t, x| {
        let y = t.gather(x, vec![5, 0, 0, 3, 2, 5, 1, 4], vec![2, 4])?;
        let y = t.mul(y, y)?;
        readout(t, y, 19)
    })));
    probes.push(("permute", random_tensor(rng, &[2, 3, 4], -1.0, 1.0), Box::new(|t, x| {
        let y = t.permute(x, &[2, 0, 1])?;
        let y = t.exp(y);
        readout(t, y, 20)
    })));
    probes.push(("resize_nearest", random_tensor(rng, &[1, 2, 3, 3], -1.0, 1.0), Box::new(|t, x| {
        let y = t.resize_nearest(x, 7, 5)?;
        let y = t.mul(y, y)?;
        readout(t, y, 21)
    })));
    probes.push(("gather_rows", random_tensor(rng, &[4, 3], -1.0, 1.0), Box::new(|t, x| {
        let y = t.gather_rows(x, &[3, 1, 3, 0])?;
        let y = t.exp(y);
        readout(t, y, 22)
    })));
    probes.push(("reshape", random_tensor(rng, &[2, 6], -1.0, 1.0), Box::new(|t, x| {
        let y = t.reshape(x, vec![3, 4])?;
        let y = t.log_softmax(y, 1)?;
        readout(t, y, 23)
    })));
    let b = random_tensor(rng, &[5, 3], -1.0, 1.0);
    probes.push(("pairwise_sq_dist", random_tensor(rng, &[4, 3], -1.0, 1.0), Box::new(move |t, x| {
        let c = t.constant(&b);
        let y = t.pairwise_sq_dist(x, c)?;
        readout(t, y, 24)
    })));
    let fm = random_tensor(rng, &[2, 6, 5], -1.0, 1.0);
    probes.push(("contrastive align loss", random_tensor(rng, &[2, 6, 5], -1.0, 1.0), Box::new(move |t, x| {
        let f = t.constant(&fm);
        contrastive_align_loss(t, x, f, 0.1)
    })));
    probes
}

fn total_loss_fd() -> Result<f64> {
    let mut cfg = TrainConfig::default();
    for (k, v) in [
        ("n_samples", "24"),
        ("n_test", "4"),
        ("image_size", "16"),
        ("k", "8"),
        ("d", "4"),
        ("width", "4"),
        ("fm_channels", "6"),
        ("batch_labeled", "2"),
        ("batch_unlabeled", "2"),
        ("labeled_ratio", "0.25"),
        ("iters", "10"),
        ("conf_thresh", "0"),
    ] {
        cfg.set(k, v)?;
    }
    let mut tr = vqlab::Trainer::new(cfg)?;
    let batch = tr.next_batch()?;
    let cb = tr.student.codebook()?;
    let kernel = tr.perturbation_kernel(&cb)?;
    let ctx = LossContext {
        cfg: &tr.cfg,
        teacher: &tr.teacher,
        extractor: &tr.extractor,
        kernel: kernel.as_ref(),
    };
    let mut tape = Tape::new();
    let v = tr.student.register(&mut tape, true);
    let mut mode = QuantMode::Record(Vec::new());
    let terms = total_loss(&mut tape, &v, &cb, &batch, &ctx, &mut mode)?;
    tape.backward(terms.total)?;
    let QuantMode::Record(store) = mode else { unreachable!() };

    // replaying the recorded codeword offsets keeps the loss smooth in the
    // parameters around the recorded point
    let replay = |model: &SegModel<f64>| -> Result<f64> {
        let mut t = Tape::new();
        let v = model.register(&mut t, false);
        let mut m = QuantMode::Replay(store.clone(), 0);
        let terms = total_loss(&mut t, &v, &cb, &batch, &ctx, &mut m)?;
        Ok(t.item(terms.total))
    };
    let mut worst = 0.0f64;
    for s in [slot::ENC1_W, slot::ENC2_W, slot::ENC3_B, slot::IMG, slot::SEG + 2, slot::SEG + 5, slot::PFA_W, slot::PFA_B] {
        let n = tr.student.params[s].numel();
        for i in [0, n / 2, n - 1] {
            let analytic = tape.grad(v.get(s)).unwrap()[i];
            let mut m = tr.student.clone();
            let orig = m.params[s].data()[i];
            m.params[s].data_mut()[i] = orig + FD_STEP;
            let up = replay(&m)?;
            m.params[s].data_mut()[i] = orig - FD_STEP;
            let down = replay(&m)?;
            let fd = (up - down) / (2.0 * FD_STEP);
            worst = worst.max((analytic - fd).abs() / (fd.abs() + 1e-8));
        }
    }
    Ok(worst)
}

/// Quantized output against the same downstream loss with the quantized
/// values fed in as a free leaf: the STE gradient must be that leaf's
/// gradient, bit for bit.
fn ste_matches_identity(rng: &mut ChaCha8Rng) -> bool {
    let cb = init_codebook(6, 3, InitScheme::UniformRandom, 21, None).unwrap();
    let z = random_tensor(rng, &[2, 4, 3], -1.0, 1.0);
    let w = random_tensor(rng, &[2, 4, 3], -1.0, 1.0);
    let downstream = |t: &mut Tape<f64>, q: Var| -> Var {
        let wv = t.constant(&w);
        let y = t.mul(q, q).unwrap();
        let y = t.mul(y, wv).unwrap();
        let y = t.exp(y);
        t.sum(y)
    };
    let mut t = Tape::new();
    let zv = t.param(&z.clone().with_requires_grad(true));
    let (q, qm) = ste_dequantize(&mut t, zv, &cb).unwrap();
    let out = downstream(&mut t, q);
    t.backward(out).unwrap();
    let ste = t.grad(zv).unwrap().to_vec();

    let mut o = Tape::new();
    let qv = o.leaf(vec![2, 4, 3], qm.dequantized.clone(), true).unwrap();
    let out = downstream(&mut o, qv);
    o.backward(out).unwrap();
    ste == o.grad(qv).unwrap()
}

fn gradient_integrity() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut failed = Vec::new();
    let mut worst = 0.0f64;
    for (name, x, f) in primitive_probes(&mut rng) {
        match finite_diff_check(&f, &x, FD_STEP) {
            Ok(e) if e < FD_TOL => worst = worst.max(e),
            Ok(e) => failed.push(format!("{name} {e:.1e}")),
            Err(e) => failed.push(format!("{name}: {e}")),
        }
    }
    match total_loss_fd() {
        Ok(e) if e < FD_TOL => worst = worst.max(e),
        Ok(e) => failed.push(format!("total_loss {e:.1e}")),
        Err(e) => failed.push(format!("total_loss: {e}")),
    }
    let ste = ste_matches_identity(&mut rng);
    Outcome {
        pass: failed.is_empty() && ste,
        detail: format!("worst rel err {worst:.1e}, failures {failed:?}, STE exact={ste}"),
    }
}

fn base_config(seed: u64) -> TrainConfig {
    TrainConfig { seed, ..TrainConfig::default() }
}

fn test_dice(cfg: TrainConfig) -> f64 {
    train::<f64>(cfg).expect("training run").metrics.dice.mean
}

fn semi_supervised_gain(full: f64) -> Outcome {
    let sup = test_dice(TrainConfig { lambda_u: 0.0, ..base_config(0) });
    let drop = test_dice(TrainConfig { perturb: PerturbMode::Dropout(0.9), ..base_config(0) });
    Outcome {
        pass: full > sup && full > drop,
        detail: format!("full {full:.4}, supervised-only {sup:.4}, dropout 0.9 {drop:.4}"),
    }
}

fn median(v: &mut [f64]) -> f64 {
    v.sort_by(f64::total_cmp);
    v[v.len() / 2]
}

fn strength_ordering(full_seed0: f64) -> Outcome {
    let mut low = vec![full_seed0];
    let mut high = Vec::new();
    for seed in 0..5 {
        if seed > 0 {
            low.push(test_dice(base_config(seed)));
        }
        high.push(test_dice(TrainConfig { eps: 0.9, ..base_config(seed) }));
    }
    let detail = format!("eps 0.7 {low:.4?}, eps 0.9 {high:.4?}");
    let (ml, mh) = (median(&mut low), median(&mut high));
    Outcome {
        pass: ml > mh,
        detail: format!("median {ml:.4} vs {mh:.4}; {detail}"),
    }
}

fn brute_surface(pred: &[Vec<bool>], gt: &[Vec<bool>]) -> (f64, f64) {
    let h = pred.len() as isize;
    let w = pred[0].len() as isize;
    let border = |m: &[Vec<bool>]| -> Vec<(f64, f64)> {
        let at = |r: isize, c: isize| r >= 0 && c >= 0 && r < h && c < w && m[r as usize][c as usize];
        let mut out = Vec::new();
        for r in 0..h {
            for c in 0..w {
                if at(r, c) && [(-1, 0), (1, 0), (0, -1), (0, 1)].iter().any(|&(dr, dc)| !at(r + dr, c + dc)) {
                    out.push((r as f64, c as f64));
                }
            }
        }
        out
    };
    let (a, b) = (border(pred), border(gt));
    let nearest = |p: &(f64, f64), set: &[(f64, f64)]| {
        set.iter().map(|q| ((p.0 - q.0).powi(2) + (p.1 - q.1).powi(2)).sqrt()).fold(f64::INFINITY, f64::min)
    };
    let mut d: Vec<f64> = a.iter().map(|p| nearest(p, &b)).chain(b.iter().map(|p| nearest(p, &a))).collect();
    let asd = d.iter().sum::<f64>() / d.len() as f64;
    d.sort_by(f64::total_cmp);
    let rank = 0.95 * (d.len() - 1) as f64;
    let (lo, frac) = (rank.floor() as usize, rank.fract());
    let hd95 = if lo + 1 < d.len() { d[lo] * (1.0 - frac) + d[lo + 1] * frac } else { d[lo] };
    (hd95, asd)
}

fn metrics_correctness() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let (mut overlap_bad, mut surface_worst) = (0usize, 0.0f64);
    for _ in 0..100 {
        let h = rng.random_range(3..=12);
        let w = rng.random_range(3..=12);
        let density = rng.random_range(0.15..0.8);
        let grid = |rng: &mut ChaCha8Rng| -> Vec<Vec<bool>> {
            let mut g: Vec<Vec<bool>> = (0..h).map(|_| (0..w).map(|_| rng.random_bool(density)).collect()).collect();
            g[rng.random_range(0..h)][rng.random_range(0..w)] = true;
            g
        };
        let (p, g) = (grid(&mut rng), grid(&mut rng));
        let flat = |m: &Vec<Vec<bool>>| Mask::new(h, w, m.concat()).unwrap();
        let mp = MaskPair::new(flat(&p), flat(&g)).unwrap();

        let (mut inter, mut union, mut np, mut ng) = (0usize, 0usize, 0usize, 0usize);
        for r in 0..h {
            for c in 0..w {
                inter += (p[r][c] && g[r][c]) as usize;
                union += (p[r][c] || g[r][c]) as usize;
                np += p[r][c] as usize;
                ng += g[r][c] as usize;
            }
        }
        let (dice, jac) = dice_jaccard(&mp);
        overlap_bad += (dice != 2.0 * inter as f64 / (np + ng) as f64 || jac != inter as f64 / union as f64) as usize;

        let (hd, asd) = surface_metrics(&mp).unwrap();
        let (hd_ref, asd_ref) = brute_surface(&p, &g);
        surface_worst = surface_worst.max((hd - hd_ref).abs()).max((asd - asd_ref).abs());
    }

    let mut t_worst = 0.0f64;
    for trial in 0..20 {
        let n = 3 + trial % 8;
        let a: Vec<f64> = (0..n).map(|_| rng.random_range(0.4..0.9)).collect();
        let b: Vec<f64> = a.iter().map(|v| v - rng.random_range(-0.05..0.1)).collect();
        let t = paired_t_test(&a, &b).unwrap();
        let d: Vec<f64> = a.iter().zip(&b).map(|(x, y)| x - y).collect();
        let mean = d.iter().sum::<f64>() / n as f64;
        let sd = (d.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt();
        let t_ref = mean / (sd / (n as f64).sqrt());
        let dist = StudentsT::new(0.0, 1.0, (n - 1) as f64).unwrap();
        let p_ref = 2.0 * dist.cdf(-t_ref.abs());
        t_worst = t_worst.max((t.t - t_ref).abs()).max((t.p - p_ref).abs());
    }
    Outcome {
        pass: overlap_bad == 0 && surface_worst <= SURFACE_TOL && t_worst <= TTEST_TOL,
        detail: format!(
            "{overlap_bad} dice/jaccard mismatches, surface max err {surface_worst:.1e}, t-test max err {t_worst:.1e}"
        ),
    }
}

fn vqlab(args: &[&str]) -> Vec<u8> {
    let o = Command::new(env!("CARGO_BIN_EXE_vqlab")).args(args).output().expect("spawn vqlab");
    assert!(o.status.success(), "{args:?}: {}", String::from_utf8_lossy(&o.stderr));
    o.stdout
}

fn dir_bytes(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in std::fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                let rel = p.strip_prefix(dir).unwrap().to_string_lossy().into_owned();
                out.push((rel, std::fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}

fn determinism() -> Outcome {
    let tmp = tempfile::tempdir().unwrap();
    let put = |name: &str, text: &str| {
        let p = tmp.path().join(name);
        std::fs::write(&p, text).unwrap();
        p.to_string_lossy().into_owned()
    };
    let cb = put("cb.txt", "4 2 euclidean\n0 0\n1 0\n0 2\n1.5 1.5\n");
    let z = put("z.txt", "shape: 2 3 2\n0.1 0.2 0.9 0.1 0.2 1.7 1.4 1.6 0.5 0.4 -0.2 2.2\n");
    let pfa = put("pfa.txt", "shape: 2 2 2\n1 0 0.5 0.5 0 1 0.2 0.9\n");
    let fm = put("fm.txt", "shape: 2 2 2\n0.9 0.1 0.4 0.6 0.1 0.8 0.3 0.7\n");

    let runs: Vec<String> = ["a", "b"].iter().map(|n| tmp.path().join(n).to_string_lossy().into_owned()).collect();
    let mut train_out = Vec::new();
    for r in &runs {
        train_out.push(vqlab(&["train", "--iters", "30", "--seed", "3", "--out", r]));
    }
    let train_same = train_out[0] == train_out[1]
        && dir_bytes(Path::new(&runs[0])) == dir_bytes(Path::new(&runs[1]))
        && !dir_bytes(Path::new(&runs[0])).is_empty();

    let cmds: Vec<Vec<&str>> = vec![
        vec!["gen-data", "--n", "8", "--size", "16", "--seed", "5"],
        vec!["codebook", "init", "--k", "6", "--d", "3", "--seed", "2"],
        vec!["codebook", "init", "--k", "3", "--d", "2", "--scheme", "kmeans", "--sample", &z, "--seed", "2"],
        vec!["codebook", "report", "--codebook", &cb, "--features", &z],
        vec!["codebook", "export-pca", "--codebook", &cb, "--features", &z],
        vec!["quantize", "--codebook", &cb, "--features", &z],
        vec!["perturb", "--codebook", &cb, "--features", &z, "--eps", "0.7", "--seed", "11"],
        vec!["kernel", "--codebook", &cb, "--eps", "0.7"],
        vec!["kl-curve", "--mode", "qpm", "--grid", "0,0.3,0.7,1", "--codebook", &cb],
        vec!["kl-curve", "--mode", "dropout", "--grid", "0,0.5,0.9"],
        vec!["bounds", "--codebook", &cb],
        vec!["compare", "--codebook", &cb],
        vec!["align-loss", "--pfa", &pfa, "--fm", &fm],
        vec!["ttest", "--a", "0.71,0.74,0.69,0.73,0.75", "--b", "0.66,0.70,0.70,0.68,0.71"],
        vec!["eval", "--run", &runs[0]],
    ];
    let unstable: Vec<String> = cmds.iter().filter(|c| vqlab(c) != vqlab(c)).map(|c| c.join(" ")).collect();
    Outcome {
        pass: train_same && unstable.is_empty(),
        detail: format!("train artifacts identical={train_same}, {} analytic commands, unstable {unstable:?}", cmds.len()),
    }
}

#[test]
fn acceptance() {
    let s = Duration::from_secs;
    let mut results = vec![
        report(1, "dropout KL closed form", Some(s(1)), dropout_closed_form),
        report(2, "transition kernel rows", Some(s(5)), kernel_rows),
        report(3, "perturbed marginal and KL", Some(s(1)), marginal_and_kl),
        report(4, "extreme-strength bounds", Some(s(10)), extreme_bounds),
        report(5, "Monte Carlo resampling", Some(s(30)), monte_carlo),
        report(6, "gradient integrity", Some(s(60)), gradient_integrity),
    ];
    let mut full = 0.0;
    results.push(report(7, "semi-supervised gain", Some(s(15 * 60)), || {
        full = test_dice(base_config(0));
        semi_supervised_gain(full)
    }));
    results.push(report(8, "perturbation strength ordering", None, || strength_ordering(full)));
    results.push(report(9, "metrics against brute force", None, metrics_correctness));
    results.push(report(10, "determinism", None, determinism));
    let failed: Vec<usize> = results.iter().enumerate().filter(|(_, &p)| !p).map(|(i, _)| i + 1).collect();
    assert!(failed.is_empty(), "failed criteria: {failed:?}");
}
