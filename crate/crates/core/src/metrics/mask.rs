use crate::error::{Error, Result};

/// Binary `h x w` mask, row-major.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Mask {
    h: usize,
    w: usize,
    data: Vec<bool>,
}

impl Mask {
    pub fn new(h: usize, w: usize, data: Vec<bool>) -> Result<Self> {
        if h == 0 || w == 0 || data.len() != h * w {
            return Err(Error::invalid("mask", format!("{h}x{w} mask needs {} entries, got {}", h * w, data.len())));
        }
        Ok(Self { h, w, data })
    }

    pub fn empty(h: usize, w: usize) -> Self {
        Self {
            h,
            w,
            data: vec![false; h * w],
        }
    }

    /// Accepts 0/1 values only.
    pub fn from_u8(h: usize, w: usize, values: &[u8]) -> Result<Self> {
        if let Some(p) = values.iter().position(|&v| v > 1) {
            return Err(Error::invalid("mask", format!("entry {p} is {}, expected 0 or 1", values[p])));
        }
        Self::new(h, w, values.iter().map(|&v| v == 1).collect())
    }

    pub fn height(&self) -> usize {
        self.h
    }

    pub fn width(&self) -> usize {
        self.w
    }

    pub fn data(&self) -> &[bool] {
        &self.data
    }

    pub fn get(&self, r: usize, c: usize) -> bool {
        self.data[r * self.w + c]
    }

    pub fn set(&mut self, r: usize, c: usize, v: bool) {
        self.data[r * self.w + c] = v;
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&v| v).count()
    }

    pub fn is_empty(&self) -> bool {
        !self.data.iter().any(|&v| v)
    }

    /// Foreground pixels with a 4-neighbour in the background. Pixels on
    /// the image edge count as touching background.
    pub fn boundary(&self) -> Vec<(usize, usize)> {
        let mut out = Vec::new();
        for r in 0..self.h {
            for c in 0..self.w {
                if !self.get(r, c) {
                    continue;
                }
                let edge = r == 0 || c == 0 || r + 1 == self.h || c + 1 == self.w;
                if edge || !self.get(r - 1, c) || !self.get(r + 1, c) || !self.get(r, c - 1) || !self.get(r, c + 1) {
                    out.push((r, c));
                }
            }
        }
        out
    }
}

/// Prediction and ground truth of identical shape.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MaskPair {
    pub pred: Mask,
    pub gt: Mask,
}

impl MaskPair {
    pub fn new(pred: Mask, gt: Mask) -> Result<Self> {
        if (pred.h, pred.w) != (gt.h, gt.w) {
            return Err(Error::ShapeMismatch {
                op: "mask pair",
                lhs: vec![pred.h, pred.w],
                rhs: vec![gt.h, gt.w],
            });
        }
        Ok(Self { pred, gt })
    }

    pub fn swapped(&self) -> Self {
        Self {
            pred: self.gt.clone(),
            gt: self.pred.clone(),
        }
    }
}
