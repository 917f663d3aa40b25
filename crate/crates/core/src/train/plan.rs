//! Multi-phase learning-rate schedules.

use serde::{Deserialize, Serialize};

use crate::error::TrainError;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Segment {
    pub lr: f64,
    pub iters: usize,
}

/// Which layers a phase updates.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Trainable {
    All,
    /// Layers the detector has on top of its SSD base.
    Extension,
    Layers(Vec<String>),
}

/// Network a phase runs on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Network {
    /// The plain SSD the detector extends.
    Base,
    Full,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Phase {
    pub network: Network,
    pub trainable: Trainable,
    pub segments: Vec<Segment>,
}

impl Phase {
    pub fn iters(&self) -> usize {
        self.segments.iter().map(|s| s.iters).sum()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhasePlan {
    pub phases: Vec<Phase>,
}

fn segs(list: &[(f64, usize)]) -> Vec<Segment> {
    list.iter().map(|&(lr, iters)| Segment { lr, iters }).collect()
}

/// Train SSD (80K/20K/20K at 1e-3/1e-4/1e-5), then only the added layers
/// (20K at 1e-3, 25K at 1e-4), then fine-tune everything
/// (20K/20K/30K/20K at 1e-3 down to 1e-6).
pub fn canonical_phase_plan() -> PhasePlan {
    PhasePlan {
        phases: vec![
            Phase { network: Network::Base, trainable: Trainable::All, segments: segs(&[(1e-3, 80_000), (1e-4, 20_000), (1e-5, 20_000)]) },
            Phase { network: Network::Full, trainable: Trainable::Extension, segments: segs(&[(1e-3, 20_000), (1e-4, 25_000)]) },
            Phase {
                network: Network::Full,
                trainable: Trainable::All,
                segments: segs(&[(1e-3, 20_000), (1e-4, 20_000), (1e-5, 30_000), (1e-6, 20_000)]),
            },
        ],
    }
}

impl PhasePlan {
    /// Divides every iteration count by `factor`, rounding up.
    pub fn scale(&self, factor: usize) -> PhasePlan {
        let factor = factor.max(1);
        let mut plan = self.clone();
        for s in plan.phases.iter_mut().flat_map(|p| p.segments.iter_mut()) {
            s.iters = s.iters.div_ceil(factor);
        }
        plan
    }

    /// Multiplies every learning rate by `factor`.
    pub fn scale_lr(&self, factor: f64) -> PhasePlan {
        let mut plan = self.clone();
        for s in plan.phases.iter_mut().flat_map(|p| p.segments.iter_mut()) {
            s.lr *= factor;
        }
        plan
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        if self.phases.is_empty() {
            return Err(TrainError::Plan("no phases".into()));
        }
        for (i, p) in self.phases.iter().enumerate() {
            if p.segments.is_empty() {
                return Err(TrainError::Plan(format!("phase {} has no segments", i + 1)));
            }
            for s in &p.segments {
                if s.iters == 0 || !(s.lr > 0.0 && s.lr.is_finite()) {
                    return Err(TrainError::Plan(format!("phase {}: segment {s:?} needs positive lr and iterations", i + 1)));
                }
            }
            if p.segments.windows(2).any(|w| w[1].lr > w[0].lr) {
                return Err(TrainError::Plan(format!("phase {}: learning rates increase", i + 1)));
            }
        }
        Ok(())
    }

    /// Phase by 1-based number.
    pub fn phase(&self, phase: usize) -> Result<&Phase, TrainError> {
        phase.checked_sub(1).and_then(|i| self.phases.get(i)).ok_or(TrainError::Phase(phase))
    }

    pub fn total_iters(&self) -> usize {
        self.phases.iter().map(Phase::iters).sum()
    }

    /// Learning rate at `iter` (0-based) of `phase` (1-based); each segment
    /// boundary is the first iteration of the next segment.
    pub fn lr_at(&self, phase: usize, iter: usize) -> Result<f64, TrainError> {
        let p = self.phase(phase)?;
        let mut start = 0;
        for s in &p.segments {
            if iter < start + s.iters {
                return Ok(s.lr);
            }
            start += s.iters;
        }
        Err(TrainError::IterRange { phase, iter, total: start })
    }
}
