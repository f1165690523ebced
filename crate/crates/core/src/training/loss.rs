//! Pairwise margin-based loss on the L1 distance between descriptors.
//!
//! For a true match the loss is `[d - (m - a)]₊`, for a wrong match
//! `[(m + a) - d]₊`. The subgradient at every kink (hinge and `|·|`) is 0.

use serde::{Deserialize, Serialize};

use crate::error::{ensure, Error, Result};

/// Pair label: `+1` true match, `-1` wrong match.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum PairKind {
    Positive,
    Negative,
}

impl PairKind {
    pub fn from_label(y: i32) -> Result<Self> {
        match y {
            1 => Ok(PairKind::Positive),
            -1 => Ok(PairKind::Negative),
            other => Err(Error::Validation(format!("pair label must be +1 or -1, got {other}"))),
        }
    }

    pub fn label(self) -> i32 {
        match self {
            PairKind::Positive => 1,
            PairKind::Negative => -1,
        }
    }
}

pub fn l1_distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).sum()
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MarginLoss {
    pub margin: f64,
    pub slack: f64,
}

impl MarginLoss {
    pub fn new(margin: f64, slack: f64) -> Result<Self> {
        ensure!(
            slack > 0.0 && slack < margin,
            Validation,
            "margin loss needs 0 < slack < margin, got m={margin}, a={slack}"
        );
        Ok(Self { margin, slack })
    }

    fn hinge(&self, d: f64, kind: PairKind) -> f64 {
        match kind {
            PairKind::Positive => (d - (self.margin - self.slack)).max(0.0),
            PairKind::Negative => ((self.margin + self.slack) - d).max(0.0),
        }
    }

    pub fn loss(&self, f1: &[f64], f2: &[f64], kind: PairKind) -> Result<f64> {
        ensure!(f1.len() == f2.len(), Shape, "descriptor lengths differ ({} vs {})", f1.len(), f2.len());
        Ok(self.hinge(l1_distance(f1, f2), kind))
    }

    /// Loss and its gradient with respect to `f1` (the gradient for `f2` is
    /// the negation).
    pub fn loss_and_grad(&self, f1: &[f64], f2: &[f64], kind: PairKind) -> (f64, Vec<f64>) {
        let d = l1_distance(f1, f2);
        let loss = self.hinge(d, kind);
        let scale = if loss > 0.0 {
            match kind {
                PairKind::Positive => 1.0,
                PairKind::Negative => -1.0,
            }
        } else {
            0.0
        };
        let grad = f1
            .iter()
            .zip(f2)
            .map(|(a, b)| {
                let diff = a - b;
                if diff > 0.0 {
                    scale
                } else if diff < 0.0 {
                    -scale
                } else {
                    0.0
                }
            })
            .collect();
        (loss, grad)
    }
}

/// Loss of one pair with an integer label `y ∈ {+1, -1}`.
pub fn pairwise_margin_loss(f1: &[f64], f2: &[f64], y: i32, margin: f64, slack: f64) -> Result<f64> {
    MarginLoss { margin, slack }.loss(f1, f2, PairKind::from_label(y)?)
}
