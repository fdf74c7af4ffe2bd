use serde::{Deserialize, Serialize};

use crate::augment::AugPolicy;
use crate::losses::{Mode, RefineOptions, RefinementThresholds};
use crate::mask::AnnotationMode;
use crate::pseudolabel::TrustBand;

use super::TrainError;

/// Every knob of a training run. Defaults are the reference hyper-parameters;
/// `configs/desk.conf` holds the values tuned for the small synthetic benchmark.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub mode: Mode,
    /// Sparse annotation type used in weak mode.
    pub annotation: AnnotationMode,
    /// Labelled fraction in semi mode; `None` keeps the dataset's split.
    pub labeled_fraction: Option<f64>,
    pub batch_size: usize,
    pub lr: f64,
    pub generalist_lr: f64,
    /// Learning rate is multiplied by `lr_decay_factor` every this many epochs of a stage.
    pub lr_decay_every: usize,
    pub lr_decay_factor: f64,
    /// Auxiliary pre-training of the generalist.
    pub stage0_epochs: usize,
    pub aux_samples: usize,
    pub stage1_epochs: usize,
    pub generalist_finetune_epochs: usize,
    pub stage2_epochs: usize,
    pub stage3_alternations: usize,
    pub phase1_epochs: usize,
    pub phase2_epochs: usize,
    pub k: usize,
    /// Probability that a generalist training view carries the sparse
    /// annotation as a prompt (weak mode only). Fused pseudo-labels are
    /// always prompted; evaluation never is.
    pub generalist_prompt_rate: f64,
    pub aug_scales: bool,
    pub hard_entropy: f64,
    pub easy_entropy: f64,
    pub trust_low: f64,
    pub trust_high: f64,
    pub eta: f64,
    pub seed: u64,
    pub no_plf: bool,
    pub no_entropy_weight: bool,
    pub no_uncertainty_weight: bool,
    pub no_phase2: bool,
    pub lai_weak_weak: bool,
    pub lnr_with_refine: bool,
    pub no_stage1: bool,
    pub no_stage2: bool,
    pub trust_from_plf: bool,
    /// When set, the generalist pseudo-label is replaced by the average of
    /// `k` ground-truth copies whose boundary band is flipped at this rate.
    pub plf_oracle_noise: Option<f64>,
    /// Evaluate on the test split after every stage.
    pub stage_metrics: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            mode: Mode::Weak,
            annotation: AnnotationMode::Point,
            labeled_fraction: None,
            batch_size: 12,
            lr: 1e-4,
            generalist_lr: 1e-4,
            lr_decay_every: 8,
            lr_decay_factor: 0.1,
            stage0_epochs: 10,
            aux_samples: 96,
            stage1_epochs: 10,
            generalist_finetune_epochs: 10,
            stage2_epochs: 10,
            stage3_alternations: 10,
            phase1_epochs: 1,
            phase2_epochs: 1,
            k: 12,
            generalist_prompt_rate: 0.5,
            aug_scales: true,
            hard_entropy: 0.8,
            easy_entropy: 0.2,
            trust_low: 0.1,
            trust_high: 0.9,
            eta: 0.996,
            seed: 0,
            no_plf: false,
            no_entropy_weight: false,
            no_uncertainty_weight: false,
            no_phase2: false,
            lai_weak_weak: false,
            lnr_with_refine: false,
            no_stage1: false,
            no_stage2: false,
            trust_from_plf: false,
            plf_oracle_noise: None,
            stage_metrics: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: String| Err(TrainError::Config(m));
        if self.batch_size == 0 {
            return bad("batch_size must be positive".into());
        }
        for (name, v) in [("lr", self.lr), ("generalist_lr", self.generalist_lr)] {
            if !(v > 0.0 && v.is_finite()) {
                return bad(format!("{name} must be positive, got {v}"));
            }
        }
        if self.lr_decay_every == 0 {
            return bad("lr_decay_every must be positive".into());
        }
        if !(self.lr_decay_factor > 0.0 && self.lr_decay_factor <= 1.0) {
            return bad(format!("lr_decay_factor must lie in (0, 1], got {}", self.lr_decay_factor));
        }
        if self.k == 0 {
            return bad("k must be positive".into());
        }
        if self.phase1_epochs == 0 || self.phase2_epochs == 0 {
            return bad("phase epoch counts must be positive".into());
        }
        if !(0.0..=1.0).contains(&self.eta) {
            return bad(format!("eta must lie in [0, 1], got {}", self.eta));
        }
        if let Some(f) = self.labeled_fraction {
            if !(f > 0.0 && f <= 1.0) {
                return bad(format!("labeled_fraction must lie in (0, 1], got {f}"));
            }
        }
        if !(0.0..=1.0).contains(&self.generalist_prompt_rate) {
            return bad(format!("generalist_prompt_rate must lie in [0, 1], got {}", self.generalist_prompt_rate));
        }
        if let Some(r) = self.plf_oracle_noise {
            if !(0.0..=1.0).contains(&r) {
                return bad(format!("plf_oracle_noise must lie in [0, 1], got {r}"));
            }
        }
        self.thresholds().validate().map_err(|e| TrainError::Config(e.to_string()))?;
        Ok(())
    }

    pub fn thresholds(&self) -> RefinementThresholds {
        RefinementThresholds {
            hard_entropy: self.hard_entropy,
            easy_entropy: self.easy_entropy,
            trust: TrustBand { low: self.trust_low, high: self.trust_high },
        }
    }

    pub fn refine_options(&self) -> RefineOptions {
        RefineOptions { entropy_weight: !self.no_entropy_weight, uncertainty_weight: !self.no_uncertainty_weight }
    }

    pub fn ensemble_policy(&self, seed: u64) -> AugPolicy {
        AugPolicy { k: self.k, seed, scales: self.aug_scales }
    }
}

/// `lr0 * factor^floor(epoch / every)`.
pub fn lr_schedule(epoch: usize, lr0: f64, every: usize, factor: f64) -> f64 {
    lr0 * factor.powi((epoch / every.max(1)) as i32)
}

/// Ablation axes of the comparison study.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Axis {
    NoPlf,
    NoEntropyWeight,
    NoUncertaintyWeight,
    NoPhase2,
    LaiWeakWeak,
    LnrWithRefine,
    NoStage1,
    NoStage2,
    TrustFromPlf,
}

impl Axis {
    pub const ALL: [Axis; 9] = [
        Axis::NoPlf,
        Axis::NoEntropyWeight,
        Axis::NoUncertaintyWeight,
        Axis::NoPhase2,
        Axis::LaiWeakWeak,
        Axis::LnrWithRefine,
        Axis::NoStage1,
        Axis::NoStage2,
        Axis::TrustFromPlf,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Axis::NoPlf => "no-plf",
            Axis::NoEntropyWeight => "no-entropy-weight",
            Axis::NoUncertaintyWeight => "no-uncertainty-weight",
            Axis::NoPhase2 => "no-phase2",
            Axis::LaiWeakWeak => "lai-weak-weak",
            Axis::LnrWithRefine => "lnr-with-refine",
            Axis::NoStage1 => "no-stage1",
            Axis::NoStage2 => "no-stage2",
            Axis::TrustFromPlf => "trust-from-plf",
        }
    }

    pub fn apply(self, cfg: &mut TrainConfig) {
        match self {
            Axis::NoPlf => cfg.no_plf = true,
            Axis::NoEntropyWeight => cfg.no_entropy_weight = true,
            Axis::NoUncertaintyWeight => cfg.no_uncertainty_weight = true,
            Axis::NoPhase2 => cfg.no_phase2 = true,
            Axis::LaiWeakWeak => cfg.lai_weak_weak = true,
            Axis::LnrWithRefine => cfg.lnr_with_refine = true,
            Axis::NoStage1 => cfg.no_stage1 = true,
            Axis::NoStage2 => cfg.no_stage2 = true,
            Axis::TrustFromPlf => cfg.trust_from_plf = true,
        }
    }
}

impl std::str::FromStr for Axis {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        Axis::ALL.into_iter().find(|a| a.name() == s).ok_or_else(|| {
            let names: Vec<&str> = Axis::ALL.iter().map(|a| a.name()).collect();
            format!("unknown ablation axis '{s}' (expected one of {})", names.join(", "))
        })
    }
}
