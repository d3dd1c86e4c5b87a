use std::fmt::Write as _;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::perturbation::KernelDistance;

/// What stands in the perturbation slot of the unlabeled student stream.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum PerturbMode {
    Qpm,
    /// Inverted dropout on post-VQ features at the given rate.
    Dropout(f64),
    None,
}

impl std::fmt::Display for PerturbMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Self::Qpm => f.write_str("qpm"),
            Self::Dropout(_) => f.write_str("dropout"),
            Self::None => f.write_str("none"),
        }
    }
}

/// Target used by the CutMix segmentation term.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CutmixTarget {
    /// Pseudo-labels mixed with the same rectangle as the images.
    Mixed,
    /// The first sample's unmixed pseudo-labels.
    Unmixed,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub eps: f64,
    pub lambda_u: f64,
    pub lambda_a: f64,
    pub tau: f64,
    pub beta_commit: f64,
    pub ema_alpha: f64,
    pub k: usize,
    pub d: usize,
    pub labeled_ratio: f64,
    pub iters: usize,
    pub seed: u64,
    pub batch_labeled: usize,
    pub batch_unlabeled: usize,
    pub lr: f64,
    pub lambda_ent: f64,
    pub ent_tau: f64,
    /// Teacher pixels whose top probability falls below this are ignored
    /// by the unlabeled segmentation terms; 0 keeps every pixel.
    pub conf_thresh: f64,
    pub perturb: PerturbMode,
    pub kernel_distance: KernelDistance,
    pub cutmix_target: CutmixTarget,
    pub n_samples: usize,
    pub n_test: usize,
    pub image_size: usize,
    pub width: usize,
    pub fm_channels: usize,
    pub fm_seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            eps: 0.7,
            lambda_u: 1.0,
            lambda_a: 5.0,
            tau: 0.1,
            beta_commit: 0.25,
            ema_alpha: 0.996,
            k: 64,
            d: 8,
            labeled_ratio: 0.1,
            iters: 2000,
            seed: 0,
            batch_labeled: 8,
            batch_unlabeled: 4,
            lr: 0.12,
            lambda_ent: 0.1,
            ent_tau: 1.0,
            conf_thresh: 0.95,
            perturb: PerturbMode::Qpm,
            kernel_distance: KernelDistance::Euclidean,
            cutmix_target: CutmixTarget::Mixed,
            n_samples: 200,
            n_test: 50,
            image_size: 32,
            width: 8,
            fm_channels: 16,
            fm_seed: 7,
        }
    }
}

fn parse_num<V: FromStr>(key: &str, v: &str) -> Result<V> {
    v.parse()
        .map_err(|_| Error::parse("config", format!("bad value `{v}` for `{key}`")))
}

fn unit(name: &'static str, v: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&v) {
        return Err(Error::invalid(name, format!("must lie in [0, 1], got {v}")));
    }
    Ok(())
}

fn non_negative(name: &'static str, v: f64) -> Result<()> {
    if !(v >= 0.0 && v.is_finite()) {
        return Err(Error::invalid(name, format!("must be finite and >= 0, got {v}")));
    }
    Ok(())
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        unit("eps", self.eps)?;
        unit("ema_alpha", self.ema_alpha)?;
        unit("labeled_ratio", self.labeled_ratio)?;
        unit("conf_thresh", self.conf_thresh)?;
        if self.labeled_ratio == 0.0 {
            return Err(Error::invalid("labeled_ratio", "need at least one labeled sample"));
        }
        for (name, v) in [
            ("lambda_u", self.lambda_u),
            ("lambda_a", self.lambda_a),
            ("beta_commit", self.beta_commit),
            ("lr", self.lr),
            ("lambda_ent", self.lambda_ent),
        ] {
            non_negative(name, v)?;
        }
        if !(self.tau > 0.0) {
            return Err(Error::invalid("tau", format!("must be positive, got {}", self.tau)));
        }
        if !(self.ent_tau > 0.0) {
            return Err(Error::invalid("ent_tau", format!("must be positive, got {}", self.ent_tau)));
        }
        if let PerturbMode::Dropout(p) = self.perturb {
            if !(0.0..1.0).contains(&p) {
                return Err(Error::invalid("dropout_p", format!("must lie in [0, 1), got {p}")));
            }
        }
        if self.k < 2 || self.d == 0 {
            return Err(Error::invalid("K", format!("need K >= 2 and D >= 1, got K={}, D={}", self.k, self.d)));
        }
        if self.n_samples < 4 {
            return Err(Error::invalid("n_samples", format!("need at least 4, got {}", self.n_samples)));
        }
        if self.image_size < 16 || !self.image_size.is_multiple_of(8) {
            return Err(Error::invalid("image_size", format!("must be a multiple of 8 and >= 16, got {}", self.image_size)));
        }
        if self.batch_labeled == 0 || self.batch_unlabeled < 2 {
            return Err(Error::invalid("batch", "need >= 1 labeled and >= 2 unlabeled per batch"));
        }
        let labeled = (self.labeled_ratio * self.n_samples as f64).ceil() as usize;
        if labeled >= self.n_samples {
            return Err(Error::invalid("labeled_ratio", "leaves no unlabeled samples"));
        }
        if self.width == 0 || self.fm_channels == 0 || self.n_test == 0 {
            return Err(Error::invalid("width", "widths and test size must be positive"));
        }
        Ok(())
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        match key.trim() {
            "eps" => self.eps = parse_num(key, v)?,
            "lambda_u" => self.lambda_u = parse_num(key, v)?,
            "lambda_a" => self.lambda_a = parse_num(key, v)?,
            "tau" => self.tau = parse_num(key, v)?,
            "beta_commit" => self.beta_commit = parse_num(key, v)?,
            "ema_alpha" => self.ema_alpha = parse_num(key, v)?,
            "K" | "k" => self.k = parse_num(key, v)?,
            "D" | "d" => self.d = parse_num(key, v)?,
            "labeled_ratio" => self.labeled_ratio = parse_num(key, v)?,
            "iters" => self.iters = parse_num(key, v)?,
            "seed" => self.seed = parse_num(key, v)?,
            "batch_labeled" => self.batch_labeled = parse_num(key, v)?,
            "batch_unlabeled" => self.batch_unlabeled = parse_num(key, v)?,
            "lr" => self.lr = parse_num(key, v)?,
            "lambda_ent" => self.lambda_ent = parse_num(key, v)?,
            "ent_tau" => self.ent_tau = parse_num(key, v)?,
            "conf_thresh" => self.conf_thresh = parse_num(key, v)?,
            "perturb" => {
                self.perturb = match v {
                    "qpm" => PerturbMode::Qpm,
                    "none" => PerturbMode::None,
                    "dropout" => PerturbMode::Dropout(match self.perturb {
                        PerturbMode::Dropout(p) => p,
                        _ => 0.5,
                    }),
                    other => return Err(Error::parse("config", format!("unknown perturb mode `{other}`"))),
                }
            }
            "dropout_p" => self.perturb = PerturbMode::Dropout(parse_num(key, v)?),
            "kernel_distance" => self.kernel_distance = v.parse()?,
            "cutmix_target" => {
                self.cutmix_target = match v {
                    "mixed" => CutmixTarget::Mixed,
                    "unmixed" => CutmixTarget::Unmixed,
                    other => return Err(Error::parse("config", format!("unknown cutmix target `{other}`"))),
                }
            }
            "n_samples" => self.n_samples = parse_num(key, v)?,
            "n_test" => self.n_test = parse_num(key, v)?,
            "image_size" => self.image_size = parse_num(key, v)?,
            "width" => self.width = parse_num(key, v)?,
            "fm_channels" => self.fm_channels = parse_num(key, v)?,
            "fm_seed" => self.fm_seed = parse_num(key, v)?,
            other => return Err(Error::parse("config", format!("unknown key `{other}`"))),
        }
        Ok(())
    }

    /// Flat `key=value` lines; `#` starts a comment.
    pub fn from_text(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        for (no, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::parse("config", format!("line {}: expected key=value", no + 1)))?;
            cfg.set(k, v)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let kd = match self.kernel_distance {
            KernelDistance::Euclidean => "euclidean",
            KernelDistance::SquaredEuclidean => "squared_euclidean",
        };
        let ct = match self.cutmix_target {
            CutmixTarget::Mixed => "mixed",
            CutmixTarget::Unmixed => "unmixed",
        };
        let _ = writeln!(s, "eps={}", self.eps);
        let _ = writeln!(s, "lambda_u={}", self.lambda_u);
        let _ = writeln!(s, "lambda_a={}", self.lambda_a);
        let _ = writeln!(s, "tau={}", self.tau);
        let _ = writeln!(s, "beta_commit={}", self.beta_commit);
        let _ = writeln!(s, "ema_alpha={}", self.ema_alpha);
        let _ = writeln!(s, "K={}", self.k);
        let _ = writeln!(s, "D={}", self.d);
        let _ = writeln!(s, "labeled_ratio={}", self.labeled_ratio);
        let _ = writeln!(s, "iters={}", self.iters);
        let _ = writeln!(s, "seed={}", self.seed);
        let _ = writeln!(s, "batch_labeled={}", self.batch_labeled);
        let _ = writeln!(s, "batch_unlabeled={}", self.batch_unlabeled);
        let _ = writeln!(s, "lr={}", self.lr);
        let _ = writeln!(s, "lambda_ent={}", self.lambda_ent);
        let _ = writeln!(s, "ent_tau={}", self.ent_tau);
        let _ = writeln!(s, "conf_thresh={}", self.conf_thresh);
        let _ = writeln!(s, "perturb={}", self.perturb);
        if let PerturbMode::Dropout(p) = self.perturb {
            let _ = writeln!(s, "dropout_p={p}");
        }
        let _ = writeln!(s, "kernel_distance={kd}");
        let _ = writeln!(s, "cutmix_target={ct}");
        let _ = writeln!(s, "n_samples={}", self.n_samples);
        let _ = writeln!(s, "n_test={}", self.n_test);
        let _ = writeln!(s, "image_size={}", self.image_size);
        let _ = writeln!(s, "width={}", self.width);
        let _ = writeln!(s, "fm_channels={}", self.fm_channels);
        let _ = writeln!(s, "fm_seed={}", self.fm_seed);
        s
    }

    pub fn labeled_count(&self) -> usize {
        (self.labeled_ratio * self.n_samples as f64).ceil() as usize
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_are_valid() {
        let c = TrainConfig::default();
        c.validate().unwrap();
        assert_eq!((c.eps, c.lambda_a, c.lambda_u, c.ema_alpha), (0.7, 5.0, 1.0, 0.996));
        assert_eq!((c.batch_labeled, c.batch_unlabeled), (8, 4));
    }

    #[test]
    fn text_round_trip() {
        let mut c = TrainConfig::default();
        c.perturb = PerturbMode::Dropout(0.9);
        c.cutmix_target = CutmixTarget::Unmixed;
        c.kernel_distance = KernelDistance::SquaredEuclidean;
        c.seed = 42;
        assert_eq!(TrainConfig::from_text(&c.to_text()).unwrap(), c);
    }

    #[test]
    fn bad_entries_rejected() {
        assert!(TrainConfig::from_text("eps=1.5").is_err());
        assert!(TrainConfig::from_text("nonsense=1").is_err());
        assert!(TrainConfig::from_text("eps").is_err());
        assert!(TrainConfig::from_text("dropout_p=1").is_err());
        let c = TrainConfig::from_text("# comment\niters = 5 # trailing\n").unwrap();
        assert_eq!(c.iters, 5);
    }
}
