//! Non-fatal conditions flagged during estimation.

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Warning {
    /// The alternating loop hit its iteration cap before the common components settled.
    NoConverge {
        stage: String,
        iterations: usize,
        last_change: f64,
    },
    /// Inner smoothed-QR solves that stopped at the iteration cap.
    InnerMaxIters { stage: String, count: usize },
    /// Inner solves that finished with a coordinate pinned to the parameter box.
    ActiveBox { stage: String, count: usize },
    /// Inner solves whose design Gram matrix needed a ridge to be invertible.
    DegenerateDesign { stage: String, count: usize },
    /// Two retained eigenvalues are closer than the resolution used to order them.
    NearDegenerateEigs { stage: String, gap: f64 },
    /// Share of inverse-density weights that hit a clipping bound.
    ClippedFraction { fraction: f64, clip_lo: f64, clip_hi: f64 },
    /// Raw inverse-density weights had a non-positive median, so unit weights were used.
    NonPositiveWeightMedian { median: f64 },
    /// `h_d` is not below `h`, violating the upper end of the derivative bandwidth band.
    BandwidthBand { h: f64, h_d: f64 },
    /// Nuclear-norm proximal solver stopped at its iteration cap.
    PenalizedNoConverge { tau: f64, iterations: usize, rel_change: f64 },
}

impl std::fmt::Display for Warning {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Warning::NoConverge {
                stage,
                iterations,
                last_change,
            } => write!(
                f,
                "NoConverge[{stage}]: {iterations} outer iterations, last change {last_change:.3e}"
            ),
            Warning::InnerMaxIters { stage, count } => {
                write!(f, "InnerMaxIters[{stage}]: {count} inner solves hit the cap")
            }
            Warning::ActiveBox { stage, count } => {
                write!(f, "ActiveBox[{stage}]: {count} inner solves ended on the box boundary")
            }
            Warning::DegenerateDesign { stage, count } => {
                write!(f, "DegenerateDesign[{stage}]: {count} rank-deficient designs")
            }
            Warning::NearDegenerateEigs { stage, gap } => {
                write!(f, "NearDegenerateEigs[{stage}]: eigenvalue gap {gap:.3e}")
            }
            Warning::ClippedFraction {
                fraction,
                clip_lo,
                clip_hi,
            } => write!(
                f,
                "ClippedFractionWarning: {:.1}% of weights clipped to [{clip_lo:.4e}, {clip_hi:.4e}]",
                100.0 * fraction
            ),
            Warning::NonPositiveWeightMedian { median } => write!(
                f,
                "NonPositiveWeightMedian: raw weight median {median:.3e}, unit weights used"
            ),
            Warning::BandwidthBand { h, h_d } => {
                write!(f, "BandwidthBand: h_d = {h_d} is not below h = {h}")
            }
            Warning::PenalizedNoConverge {
                tau,
                iterations,
                rel_change,
            } => write!(
                f,
                "NoConverge[pel tau={tau}]: {iterations} iterations, relative change {rel_change:.3e}"
            ),
        }
    }
}

/// Counters accumulated over a batch of inner solves.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct SolveTally {
    pub solves: usize,
    pub max_iters: usize,
    pub active_box: usize,
    pub degenerate: usize,
}

impl SolveTally {
    pub fn merge(&mut self, other: SolveTally) {
        self.solves += other.solves;
        self.max_iters += other.max_iters;
        self.active_box += other.active_box;
        self.degenerate += other.degenerate;
    }

    pub fn warnings(&self, stage: &str) -> Vec<Warning> {
        let mut out = Vec::new();
        if self.max_iters > 0 {
            out.push(Warning::InnerMaxIters {
                stage: stage.to_string(),
                count: self.max_iters,
            });
        }
        if self.active_box > 0 {
            out.push(Warning::ActiveBox {
                stage: stage.to_string(),
                count: self.active_box,
            });
        }
        if self.degenerate > 0 {
            out.push(Warning::DegenerateDesign {
                stage: stage.to_string(),
                count: self.degenerate,
            });
        }
        out
    }
}
