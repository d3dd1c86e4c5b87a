use serde::Serialize;

use super::{dice_jaccard, surface_metrics, MaskPair};
use crate::error::Result;

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct SampleMetrics {
    pub id: usize,
    pub dice: f64,
    pub jaccard: f64,
    /// `None` when either mask is empty.
    pub hd95: Option<f64>,
    pub asd: Option<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct Aggregate {
    pub mean: f64,
    /// Population standard deviation.
    pub std: f64,
    pub count: usize,
}

impl Aggregate {
    pub fn of(values: impl IntoIterator<Item = f64>) -> Self {
        let v: Vec<f64> = values.into_iter().collect();
        if v.is_empty() {
            return Self {
                mean: f64::NAN,
                std: f64::NAN,
                count: 0,
            };
        }
        let n = v.len() as f64;
        let mean = v.iter().sum::<f64>() / n;
        let var = v.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
        Self {
            mean,
            std: var.sqrt(),
            count: v.len(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MetricsReport {
    pub samples: Vec<SampleMetrics>,
    pub dice: Aggregate,
    pub jaccard: Aggregate,
    pub hd95: Aggregate,
    pub asd: Aggregate,
}

pub fn evaluate_sample(id: usize, mp: &MaskPair) -> Result<SampleMetrics> {
    let (dice, jaccard) = dice_jaccard(mp);
    let surface = if mp.pred.is_empty() || mp.gt.is_empty() {
        None
    } else {
        Some(surface_metrics(mp)?)
    };
    Ok(SampleMetrics {
        id,
        dice,
        jaccard,
        hd95: surface.map(|s| s.0),
        asd: surface.map(|s| s.1),
    })
}

/// Per-sample metrics with aggregates. Surface aggregates skip samples
/// with an empty mask.
pub fn evaluate(pairs: &[(usize, MaskPair)]) -> Result<MetricsReport> {
    let samples = pairs
        .iter()
        .map(|(id, mp)| evaluate_sample(*id, mp))
        .collect::<Result<Vec<_>>>()?;
    Ok(MetricsReport {
        dice: Aggregate::of(samples.iter().map(|s| s.dice)),
        jaccard: Aggregate::of(samples.iter().map(|s| s.jaccard)),
        hd95: Aggregate::of(samples.iter().filter_map(|s| s.hd95)),
        asd: Aggregate::of(samples.iter().filter_map(|s| s.asd)),
        samples,
    })
}

impl MetricsReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("metrics serialise")
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::metrics::Mask;

    #[test]
    fn empty_prediction_skips_surface() {
        let gt = Mask::from_u8(2, 2, &[1, 0, 0, 0]).unwrap();
        let mp = MaskPair::new(Mask::empty(2, 2), gt.clone()).unwrap();
        let hit = MaskPair::new(gt.clone(), gt).unwrap();
        let r = evaluate(&[(0, mp), (1, hit)]).unwrap();
        assert_eq!(r.samples[0].hd95, None);
        assert_eq!(r.dice.mean, 0.5);
        assert_eq!(r.dice.std, 0.5);
        assert_eq!(r.hd95.count, 1);
        let json: serde_json::Value = serde_json::from_str(&r.to_json()).unwrap();
        assert!(json["samples"][0]["hd95"].is_null());
        assert_eq!(json["dice"]["mean"], 0.5);
    }
}
