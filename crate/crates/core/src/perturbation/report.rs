use super::{kl_dropout, kl_qpm, perturbed_marginal, transition_kernel};
use crate::codebook::Codebook;
use crate::error::Result;
use crate::scalar::{fmt_sig17, Scalar};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PerturbationKind {
    Qpm,
    Dropout,
}

impl PerturbationKind {
    pub fn as_str(self) -> &'static str {
        match self {
            Self::Qpm => "qpm",
            Self::Dropout => "dropout",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ReportRow<T> {
    pub kind: PerturbationKind,
    pub param: T,
    pub kl: T,
}

/// KL divergence of QPM at each `eps` and of dropout at each `p`.
pub fn compare_report<T: Scalar>(cb: &Codebook<T>, eps_grid: &[T], p_grid: &[T]) -> Result<Vec<ReportRow<T>>> {
    let mut rows = Vec::with_capacity(eps_grid.len() + p_grid.len());
    for &eps in eps_grid {
        let kernel = transition_kernel(cb, eps)?;
        let kl = kl_qpm(&perturbed_marginal(&kernel))?;
        rows.push(ReportRow {
            kind: PerturbationKind::Qpm,
            param: eps,
            kl,
        });
    }
    for &p in p_grid {
        rows.push(ReportRow {
            kind: PerturbationKind::Dropout,
            param: p,
            kl: kl_dropout(p)?.kl,
        });
    }
    Ok(rows)
}

/// `kind,param,kl` with a header row.
pub fn report_csv<T: Scalar>(rows: &[ReportRow<T>]) -> String {
    let mut out = String::from("kind,param,kl\n");
    for r in rows {
        out.push_str(&format!("{},{},{}\n", r.kind.as_str(), fmt_sig17(r.param), fmt_sig17(r.kl)));
    }
    out
}
