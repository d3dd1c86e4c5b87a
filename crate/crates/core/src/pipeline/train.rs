use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::config::{CutmixTarget, PerturbMode, TrainConfig};
use super::data::{gen_synthetic_dataset, SyntheticSample};
use super::losses::{cutmix_pair, ema_update, labeled_loss, mask_unconfident, pseudo_label, recon_l1, seg_ce, ViewAug};
use super::model::{forward, Arch, ModelVars, Perturbation, QuantMode, SegModel, PARAM_NAMES};
use crate::alignment::{contrastive_align_loss, pfa_project, FrozenExtractor};
use crate::codebook::{entropy_regularizer, kmeans, vq_losses, Codebook, UtilizationRecord};
use crate::error::{Error, Result};
use crate::metrics::{evaluate, Mask, MaskPair, MetricsReport};
use crate::perturbation::{transition_kernel_with, PerturbationKernel};
use crate::scalar::{fmt_sig17, Scalar};
use crate::tensor::{Tape, Tensor, Var};

use super::model::slot;

const TEST_SEED_OFFSET: u64 = 0x9E37_79B9_7F4A_7C15;
const BATCH_STREAM: u64 = 0xB47C;
const KMEANS_IMAGES: usize = 32;

/// One training batch with every random choice already made.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch<T> {
    pub size: usize,
    pub x_l: Tensor<T>,
    pub y_l: Vec<u8>,
    /// Raw unlabeled images, as seen by the teacher.
    pub x_u: Vec<Vec<T>>,
    pub views: Vec<ViewAug>,
    /// CutMix seeds, one per unlabeled image `i` mixed with `i + 1`.
    pub cutmix_seeds: Vec<u64>,
    pub perturb_seed: u64,
}

impl<T: Scalar> Batch<T> {
    pub fn sample(labeled: &[&SyntheticSample<T>], unlabeled: &[&SyntheticSample<T>], cfg: &TrainConfig, rng: &mut ChaCha8Rng) -> Result<Self> {
        let size = cfg.image_size;
        let mut xl = Vec::with_capacity(cfg.batch_labeled * size * size);
        let mut yl = Vec::with_capacity(cfg.batch_labeled * size * size);
        for _ in 0..cfg.batch_labeled {
            let s = labeled[rng.random_range(0..labeled.len())];
            xl.extend_from_slice(&s.image);
            yl.extend_from_slice(&s.mask);
        }
        let x_u: Vec<Vec<T>> = (0..cfg.batch_unlabeled)
            .map(|_| unlabeled[rng.random_range(0..unlabeled.len())].image.clone())
            .collect();
        let views = (0..cfg.batch_unlabeled).map(|_| ViewAug::random(rng)).collect();
        let cutmix_seeds = (0..cfg.batch_unlabeled).map(|_| rng.random()).collect();
        Ok(Self {
            size,
            x_l: Tensor::new(vec![cfg.batch_labeled, 1, size, size], xl)?,
            y_l: yl,
            x_u,
            views,
            cutmix_seeds,
            perturb_seed: rng.random(),
        })
    }

    fn stack(&self, images: &[Vec<T>]) -> Result<Tensor<T>> {
        let data = images.iter().flat_map(|v| v.iter().copied()).collect();
        Tensor::new(vec![images.len(), 1, self.size, self.size], data)
    }
}

/// Loss nodes of one step.
#[derive(Clone, Debug)]
pub struct LossTerms {
    /// `L_l + lambda_u * L_u + lambda_a * L_align`.
    pub total: Var,
    /// `total` plus codebook, commitment and entropy terms.
    pub objective: Var,
    pub l_l: Var,
    pub l_u: Var,
    pub l_align: Var,
    pub vq_codebook: Var,
    pub vq_commitment: Var,
    pub entropy: Var,
    pub histogram: Vec<usize>,
}

/// Everything `total_loss` reads besides the student.
pub struct LossContext<'a, T> {
    pub cfg: &'a TrainConfig,
    pub teacher: &'a SegModel<T>,
    pub extractor: &'a FrozenExtractor<T>,
    pub kernel: Option<&'a PerturbationKernel<T>>,
}

/// Teacher argmax labels on raw images, computed on a private tape, with
/// pixels below `conf_thresh` marked [`IGNORE`](super::IGNORE).
pub fn teacher_pseudo_labels<T: Scalar>(teacher: &SegModel<T>, images: &Tensor<T>, conf_thresh: f64) -> Result<Vec<u8>> {
    let mut tape = Tape::new();
    let v = teacher.register(&mut tape, false);
    let cb = teacher.codebook()?;
    let x = tape.constant(images);
    let out = forward(&mut tape, &v, &cb, x, None, &mut QuantMode::Nearest)?;
    let (probs, shape) = (tape.value(out.probs), tape.shape(out.probs));
    let mut labels = pseudo_label(probs, shape)?;
    if conf_thresh > 0.0 {
        mask_unconfident(&mut labels, probs, shape, T::lit(conf_thresh))?;
    }
    Ok(labels)
}

fn align_term<T: Scalar>(tape: &mut Tape<T>, v: &ModelVars, q: Var, images: &Tensor<T>, fe: &FrozenExtractor<T>, tau: T) -> Result<Var> {
    let size = images.shape()[2];
    let (gh, gw) = fe.grid(size, size)?;
    let pfa = pfa_project(tape, q, v.get(slot::PFA_W), Some(v.get(slot::PFA_B)), gh, gw)?;
    let fm = fe.extract_on(tape, images)?;
    contrastive_align_loss(tape, pfa, fm, tau)
}

fn mean_of<T: Scalar>(tape: &mut Tape<T>, vars: &[Var]) -> Result<Var> {
    let mut acc = vars[0];
    for &v in &vars[1..] {
        acc = tape.add(acc, v)?;
    }
    Ok(tape.mul_scalar(acc, T::one() / T::from_count(vars.len())))
}

/// Builds the full objective for one batch on `tape`.
pub fn total_loss<T: Scalar>(
    tape: &mut Tape<T>,
    v: &ModelVars,
    cb: &Codebook<T>,
    batch: &Batch<T>,
    ctx: &LossContext<'_, T>,
    mode: &mut QuantMode<T>,
) -> Result<LossTerms> {
    let cfg = ctx.cfg;
    let size = batch.size;
    let px = size * size;
    let u = batch.x_u.len();

    // labeled stream
    let xl = tape.constant(&batch.x_l);
    let lab = forward(tape, v, cb, xl, None, mode)?;
    let l_l = labeled_loss(tape, xl, lab.x_hat, lab.logits, &batch.y_l)?;

    // teacher targets on the raw unlabeled images
    let raw = batch.stack(&batch.x_u)?;
    let pseudo = teacher_pseudo_labels(ctx.teacher, &raw, cfg.conf_thresh)?;

    // weak view with the perturbation slot
    let view_imgs: Vec<Vec<T>> = batch.views.iter().zip(&batch.x_u).map(|(a, x)| a.image(x, size)).collect();
    let view_lbls: Vec<u8> = batch
        .views
        .iter()
        .enumerate()
        .flat_map(|(i, a)| a.labels(&pseudo[i * px..(i + 1) * px], size))
        .collect();
    let view_t = batch.stack(&view_imgs)?;
    let xv = tape.constant(&view_t);
    let perturb = match (cfg.perturb, ctx.kernel) {
        (PerturbMode::Qpm, Some(kernel)) => Some(Perturbation::Qpm {
            kernel,
            seed: batch.perturb_seed,
        }),
        (PerturbMode::Qpm, None) => return Err(Error::invalid("kernel", "QPM mode needs a transition kernel")),
        (PerturbMode::Dropout(p), _) => Some(Perturbation::Dropout {
            p: T::lit(p),
            seed: batch.perturb_seed,
        }),
        (PerturbMode::None, _) => None,
    };
    let weak = forward(tape, v, cb, xv, perturb, mode)?;
    let rec_u = recon_l1(tape, xv, weak.x_hat)?;
    let seg_u = seg_ce(tape, weak.logits, &view_lbls)?;

    // strong view: CutMix of neighbouring unlabeled images
    let mut mixed_imgs = Vec::with_capacity(u);
    let mut mixed_lbls = Vec::with_capacity(u * px);
    for i in 0..u {
        let j = (i + 1) % u;
        let (yi, yj) = (&pseudo[i * px..(i + 1) * px], &pseudo[j * px..(j + 1) * px]);
        let (xa, ya, _) = cutmix_pair(&batch.x_u[i], &batch.x_u[j], yi, yj, size, batch.cutmix_seeds[i])?;
        mixed_imgs.push(xa);
        match cfg.cutmix_target {
            CutmixTarget::Mixed => mixed_lbls.extend_from_slice(&ya),
            CutmixTarget::Unmixed => mixed_lbls.extend_from_slice(yi),
        }
    }
    let xa = tape.constant(&batch.stack(&mixed_imgs)?);
    let strong = forward(tape, v, cb, xa, None, mode)?;
    let seg_a = seg_ce(tape, strong.logits, &mixed_lbls)?;

    let l_u = tape.add(rec_u, seg_u)?;
    let l_u = tape.add(l_u, seg_a)?;

    let tau = T::lit(cfg.tau);
    let al = align_term(tape, v, lab.q, &batch.x_l, ctx.extractor, tau)?;
    let au = align_term(tape, v, weak.q, &view_t, ctx.extractor, tau)?;
    let l_align = mean_of(tape, &[al, au])?;

    let wu = tape.mul_scalar(l_u, T::lit(cfg.lambda_u));
    let wa = tape.mul_scalar(l_align, T::lit(cfg.lambda_a));
    let total = tape.add(l_l, wu)?;
    let total = tape.add(total, wa)?;

    let codewords = v.get(slot::CODEBOOK);
    let beta = T::lit(cfg.beta_commit);
    let mut cbs = Vec::new();
    let mut cms = Vec::new();
    for out in [&lab, &weak, &strong] {
        let l = vq_losses(tape, out.z, codewords, &out.qm, beta)?;
        cbs.push(l.codebook);
        cms.push(l.commitment);
    }
    let vq_codebook = mean_of(tape, &cbs)?;
    let vq_commitment = mean_of(tape, &cms)?;
    let ent_tau = T::lit(cfg.ent_tau);
    let el = entropy_regularizer(tape, lab.z, codewords, ent_tau)?;
    let eu = entropy_regularizer(tape, weak.z, codewords, ent_tau)?;
    let entropy = mean_of(tape, &[el, eu])?;

    let objective = tape.add(total, vq_codebook)?;
    let objective = tape.add(objective, vq_commitment)?;
    let we = tape.mul_scalar(entropy, T::lit(cfg.lambda_ent));
    let objective = tape.add(objective, we)?;

    let mut histogram = vec![0usize; cb.k()];
    for out in [&lab, &weak, &strong] {
        for &i in &out.qm.indices {
            histogram[i] += 1;
        }
    }
    Ok(LossTerms {
        total,
        objective,
        l_l,
        l_u,
        l_align,
        vq_codebook,
        vq_commitment,
        entropy,
        histogram,
    })
}

/// Logged values of one step.
#[derive(Clone, Debug, PartialEq)]
pub struct StepLog {
    pub step: usize,
    pub lr: f64,
    pub total: f64,
    pub objective: f64,
    pub l_l: f64,
    pub l_u: f64,
    pub l_align: f64,
    pub vq_codebook: f64,
    pub vq_commitment: f64,
    pub entropy: f64,
    pub utilization: f64,
}

impl StepLog {
    pub fn csv_header() -> &'static str {
        "step,lr,total,objective,L_l,L_u,L_align,vq_codebook,vq_commitment,entropy,utilization"
    }

    pub fn csv_row(&self) -> String {
        let vals = [
            self.lr,
            self.total,
            self.objective,
            self.l_l,
            self.l_u,
            self.l_align,
            self.vq_codebook,
            self.vq_commitment,
            self.entropy,
            self.utilization,
        ];
        let mut s = self.step.to_string();
        for v in vals {
            s.push(',');
            s.push_str(&fmt_sig17(v));
        }
        s
    }

    fn breakdown(&self) -> String {
        format!(
            "L_l={} L_u={} L_align={} vq_codebook={} vq_commitment={} entropy={}",
            self.l_l, self.l_u, self.l_align, self.vq_codebook, self.vq_commitment, self.entropy
        )
    }

    fn is_finite(&self) -> bool {
        [
            self.total,
            self.objective,
            self.l_l,
            self.l_u,
            self.l_align,
            self.vq_codebook,
            self.vq_commitment,
            self.entropy,
        ]
        .iter()
        .all(|v| v.is_finite())
    }
}

/// Student, teacher, data and schedule of one run.
pub struct Trainer<T> {
    pub cfg: TrainConfig,
    pub student: SegModel<T>,
    pub teacher: SegModel<T>,
    pub extractor: FrozenExtractor<T>,
    pub train_set: Vec<SyntheticSample<T>>,
    pub test_set: Vec<SyntheticSample<T>>,
    pub step: usize,
    rng: ChaCha8Rng,
}

/// Held-out evaluation images for a run seed.
pub fn test_dataset<T: Scalar>(cfg: &TrainConfig) -> Result<Vec<SyntheticSample<T>>> {
    gen_synthetic_dataset(cfg.n_test.max(4), cfg.image_size, cfg.seed ^ TEST_SEED_OFFSET, 0.0)
}

pub fn arch_of(cfg: &TrainConfig) -> Arch {
    Arch {
        in_ch: 1,
        width: cfg.width,
        d: cfg.d,
        k: cfg.k,
        classes: 2,
        fm_channels: cfg.fm_channels,
    }
}

impl<T: Scalar> Trainer<T> {
    /// Generates data, initialises the student, seeds its codebook with
    /// k-means on initial encoder features and copies it into the teacher.
    pub fn new(cfg: TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let train_set = gen_synthetic_dataset(cfg.n_samples, cfg.image_size, cfg.seed, cfg.labeled_ratio)?;
        let test_set = test_dataset(&cfg)?;
        let mut student = SegModel::init(arch_of(&cfg), cfg.seed);
        let extractor = FrozenExtractor::new(cfg.fm_seed, 1, [cfg.fm_channels, cfg.fm_channels])?;

        let sample: Vec<&SyntheticSample<T>> = train_set.iter().take(KMEANS_IMAGES).collect();
        let imgs = super::data::stack_images(&sample)?;
        let mut tape = Tape::new();
        let v = student.register(&mut tape, false);
        let x = tape.constant(&imgs);
        let z = super::model::encode(&mut tape, &v, x)?;
        let zr = tape.permute(z, &[0, 2, 3, 1])?;
        let feats = tape.value(zr).to_vec();
        let centres = kmeans(&feats, cfg.d, cfg.k, 25, cfg.seed)?;
        let metric = student.codebook()?.metric();
        // k-means can return repeated centres on degenerate features
        let cb = match Codebook::new(cfg.k, cfg.d, centres, metric) {
            Ok(cb) => cb,
            Err(_) => student.codebook()?,
        };
        student.set_codebook(&cb)?;
        let teacher = student.clone();
        let rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ BATCH_STREAM);
        Ok(Self {
            cfg,
            student,
            teacher,
            extractor,
            train_set,
            test_set,
            step: 0,
            rng,
        })
    }

    pub fn next_batch(&mut self) -> Result<Batch<T>> {
        let labeled: Vec<&SyntheticSample<T>> = self.train_set.iter().filter(|s| s.labeled).collect();
        let unlabeled: Vec<&SyntheticSample<T>> = self.train_set.iter().filter(|s| !s.labeled).collect();
        Batch::sample(&labeled, &unlabeled, &self.cfg, &mut self.rng)
    }

    pub fn learning_rate(&self, step: usize) -> f64 {
        let t = self.cfg.iters.max(1) as f64;
        self.cfg.lr * (1.0 - step as f64 / t).max(0.0).powf(0.9)
    }

    /// Transition kernel for the configured perturbation, `None` unless QPM.
    pub fn perturbation_kernel(&self, cb: &Codebook<T>) -> Result<Option<PerturbationKernel<T>>> {
        match self.cfg.perturb {
            PerturbMode::Qpm => Ok(Some(transition_kernel_with(cb, T::lit(self.cfg.eps), self.cfg.kernel_distance)?)),
            _ => Ok(None),
        }
    }

    /// One gradient step on `batch` followed by the teacher update.
    pub fn step_on(&mut self, batch: &Batch<T>) -> Result<(StepLog, UtilizationRecord)> {
        let cb = self.student.codebook()?;
        let kernel = self.perturbation_kernel(&cb)?;
        let ctx = LossContext {
            cfg: &self.cfg,
            teacher: &self.teacher,
            extractor: &self.extractor,
            kernel: kernel.as_ref(),
        };
        let mut tape = Tape::new();
        let v = self.student.register(&mut tape, true);
        let terms = total_loss(&mut tape, &v, &cb, batch, &ctx, &mut QuantMode::Nearest)?;
        let lr = self.learning_rate(self.step);
        let rec = UtilizationRecord::from_histogram(self.step, terms.histogram);
        let val = |x: Var| tape.item(x).to_f64_lossy();
        let log = StepLog {
            step: self.step,
            lr,
            total: val(terms.total),
            objective: val(terms.objective),
            l_l: val(terms.l_l),
            l_u: val(terms.l_u),
            l_align: val(terms.l_align),
            vq_codebook: val(terms.vq_codebook),
            vq_commitment: val(terms.vq_commitment),
            entropy: val(terms.entropy),
            utilization: rec.utilization,
        };
        if !log.is_finite() {
            return Err(Error::NonFiniteLoss {
                step: self.step,
                breakdown: log.breakdown(),
            });
        }
        tape.backward(terms.objective)?;
        let step_size = T::lit(lr);
        for (p, &var) in self.student.params.iter_mut().zip(&v.vars) {
            if let Some(g) = tape.grad(var) {
                for (w, &gi) in p.data_mut().iter_mut().zip(g) {
                    *w -= step_size * gi;
                }
            }
        }
        ema_update(&mut self.teacher, &self.student, T::lit(self.cfg.ema_alpha))?;
        self.step += 1;
        Ok((log, rec))
    }

    pub fn train_step(&mut self) -> Result<(StepLog, UtilizationRecord)> {
        let batch = self.next_batch()?;
        self.step_on(&batch)
    }
}

/// Student predictions on `samples`, scored against their masks.
pub fn evaluate_model<T: Scalar>(model: &SegModel<T>, samples: &[SyntheticSample<T>]) -> Result<MetricsReport> {
    let cb = model.codebook()?;
    let mut pairs = Vec::with_capacity(samples.len());
    for chunk in samples.chunks(10) {
        let refs: Vec<&SyntheticSample<T>> = chunk.iter().collect();
        let imgs = super::data::stack_images(&refs)?;
        let mut tape = Tape::new();
        let v = model.register(&mut tape, false);
        let x = tape.constant(&imgs);
        let out = forward(&mut tape, &v, &cb, x, None, &mut QuantMode::Nearest)?;
        let pred = pseudo_label(tape.value(out.probs), tape.shape(out.probs))?;
        let px = chunk[0].size * chunk[0].size;
        for (i, s) in chunk.iter().enumerate() {
            let p = Mask::from_u8(s.size, s.size, &pred[i * px..(i + 1) * px])?;
            let g = Mask::from_u8(s.size, s.size, &s.mask)?;
            pairs.push((s.id, MaskPair::new(p, g)?));
        }
    }
    evaluate(&pairs)
}

/// Artifacts of a finished run.
#[derive(Clone, Debug)]
pub struct TrainRun<T> {
    pub config: TrainConfig,
    pub losses: Vec<StepLog>,
    pub utilization: Vec<UtilizationRecord>,
    pub metrics: MetricsReport,
    pub student: SegModel<T>,
    pub teacher: SegModel<T>,
}

/// Runs `cfg.iters` steps and evaluates the student on the held-out set.
pub fn train<T: Scalar>(cfg: TrainConfig) -> Result<TrainRun<T>> {
    let mut tr = Trainer::<T>::new(cfg)?;
    let mut losses = Vec::with_capacity(tr.cfg.iters);
    let mut utilization = Vec::with_capacity(tr.cfg.iters);
    for _ in 0..tr.cfg.iters {
        let (log, rec) = tr.train_step()?;
        utilization.push(rec);
        losses.push(log);
    }
    let metrics = evaluate_model(&tr.student, &tr.test_set)?;
    Ok(TrainRun {
        config: tr.cfg,
        losses,
        utilization,
        metrics,
        student: tr.student,
        teacher: tr.teacher,
    })
}

/// Writes one text tensor per parameter plus a manifest with the layer sizes.
pub fn save_checkpoint<T: Scalar>(model: &SegModel<T>, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    let a = model.arch;
    let mut manifest = format!(
        "in_ch={}\nwidth={}\nd={}\nk={}\nclasses={}\nfm_channels={}\n",
        a.in_ch, a.width, a.d, a.k, a.classes, a.fm_channels
    );
    for (name, p) in PARAM_NAMES.iter().zip(&model.params) {
        fs::write(dir.join(format!("{name}.txt")), p.to_text())?;
        manifest.push_str(&format!("param={name}\n"));
    }
    fs::write(dir.join("manifest.txt"), manifest)?;
    Ok(())
}

/// Inverse of [`save_checkpoint`].
pub fn load_checkpoint<T: Scalar>(dir: &Path) -> Result<SegModel<T>> {
    let manifest = fs::read_to_string(dir.join("manifest.txt"))?;
    let field = |key: &str| -> Result<usize> {
        manifest
            .lines()
            .find_map(|l| l.strip_prefix(key).and_then(|r| r.strip_prefix('=')))
            .ok_or_else(|| Error::parse("checkpoint manifest", format!("missing {key}")))?
            .trim()
            .parse()
            .map_err(|e| Error::parse("checkpoint manifest", format!("{key}: {e}")))
    };
    let arch = Arch {
        in_ch: field("in_ch")?,
        width: field("width")?,
        d: field("d")?,
        k: field("k")?,
        classes: field("classes")?,
        fm_channels: field("fm_channels")?,
    };
    let shapes = SegModel::<T>::shapes(&arch);
    let mut params = Vec::with_capacity(shapes.len());
    for (name, shape) in PARAM_NAMES.iter().zip(shapes) {
        let t = Tensor::from_text(&fs::read_to_string(dir.join(format!("{name}.txt")))?)?;
        if t.shape() != shape.as_slice() {
            return Err(Error::ShapeMismatch {
                op: "load_checkpoint",
                lhs: shape,
                rhs: t.shape().to_vec(),
            });
        }
        params.push(t);
    }
    Ok(SegModel { arch, params })
}

impl<T: Scalar> TrainRun<T> {
    pub fn losses_csv(&self) -> String {
        let mut s = String::from(StepLog::csv_header());
        s.push('\n');
        for l in &self.losses {
            s.push_str(&l.csv_row());
            s.push('\n');
        }
        s
    }

    pub fn utilization_csv(&self) -> String {
        let mut s = String::from(UtilizationRecord::csv_header());
        s.push('\n');
        for r in &self.utilization {
            s.push_str(&r.csv_row());
            s.push('\n');
        }
        s
    }

    /// `losses.csv`, `utilization.csv`, `metrics.json`, `config.txt` and
    /// `checkpoint/{student,teacher}/`.
    pub fn write_artifacts(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        fs::write(dir.join("losses.csv"), self.losses_csv())?;
        fs::write(dir.join("utilization.csv"), self.utilization_csv())?;
        fs::write(dir.join("metrics.json"), self.metrics.to_json())?;
        fs::write(dir.join("config.txt"), self.config.to_text())?;
        save_checkpoint(&self.student, &dir.join("checkpoint").join("student"))?;
        save_checkpoint(&self.teacher, &dir.join("checkpoint").join("teacher"))?;
        Ok(())
    }
}
