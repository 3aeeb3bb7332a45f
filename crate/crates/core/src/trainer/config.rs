use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::losses::DistillConfig;

/// Training procedure for a student network.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Variant {
    /// Cross-entropy on labels only (pixel loss for generators).
    Scratch,
    /// KD loss against the teacher's logits.
    Kd,
    /// Block-wise IR training with teacher inputs, then KD fine-tuning.
    Lit,
    /// One IR penalty on the student's own chain, plus KD.
    HintSingleNoInput,
    /// One IR penalty on a student section fed the teacher's preceding IR, plus KD.
    HintSingleWithInput,
    /// IR penalties at every split on the student's own chain, plus KD.
    MultiIrNoInput,
}

impl Variant {
    pub const ALL: [Variant; 6] = [
        Variant::Scratch,
        Variant::Kd,
        Variant::Lit,
        Variant::HintSingleNoInput,
        Variant::HintSingleWithInput,
        Variant::MultiIrNoInput,
    ];

    pub fn needs_teacher(self) -> bool {
        self != Variant::Scratch
    }

    /// Variants whose first phase penalizes intermediate representations.
    pub fn uses_irs(self) -> bool {
        !matches!(self, Variant::Scratch | Variant::Kd)
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Variant::Scratch => "scratch",
            Variant::Kd => "kd",
            Variant::Lit => "lit",
            Variant::HintSingleNoInput => "hint_single_no_input",
            Variant::HintSingleWithInput => "hint_single_with_input",
            Variant::MultiIrNoInput => "multi_ir_no_input",
        })
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.to_string() == s)
            .ok_or_else(|| Error::Config(format!("unknown variant '{s}'")))
    }
}

/// `lr0 / decay^m`, where `m` counts the milestones at or before `epoch`.
pub fn lr_at_epoch(lr0: f64, milestones: &[usize], decay: f64, epoch: usize) -> f64 {
    let m = milestones.iter().filter(|&&e| e <= epoch).count();
    lr0 / decay.powi(m as i32)
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub variant: Variant,
    pub epochs: usize,
    /// KD fine-tuning epochs after an IR phase; ignored by scratch and kd.
    pub fine_tune_epochs: usize,
    pub batch_size: usize,
    pub lr0: f64,
    pub milestones: Vec<usize>,
    /// Divisor applied to the learning rate at each milestone.
    pub lr_decay: f64,
    pub fine_tune_lr0: f64,
    pub fine_tune_milestones: Vec<usize>,
    pub momentum: f64,
    pub weight_decay: f64,
    pub distill: DistillConfig,
    /// 1-based split used by the single-hint variants.
    pub hint_split: usize,
    /// Keep layers copied from the teacher fixed during the IR phase.
    pub freeze_copied: bool,
    pub seed: u64,
}

impl TrainConfig {
    /// Full-length schedules for residual classifiers.
    pub fn full(variant: Variant) -> TrainConfig {
        let base = TrainConfig {
            variant,
            epochs: 200,
            fine_tune_epochs: 0,
            batch_size: 32,
            lr0: 0.1,
            milestones: vec![100, 150],
            lr_decay: 10.0,
            fine_tune_lr0: 0.01,
            fine_tune_milestones: vec![35, 55],
            momentum: 0.9,
            weight_decay: 1e-4,
            distill: DistillConfig::default(),
            hint_split: 2,
            freeze_copied: false,
            seed: 0,
        };
        match variant {
            Variant::Scratch => base,
            Variant::Kd => TrainConfig {
                epochs: 250,
                milestones: vec![100, 175],
                ..base
            },
            _ => TrainConfig {
                epochs: 175,
                milestones: vec![60, 100, 125],
                fine_tune_epochs: 75,
                ..base
            },
        }
    }

    /// The full-length schedule with every epoch count scaled by `factor`.
    pub fn scaled(variant: Variant, factor: f64) -> TrainConfig {
        let full = TrainConfig::full(variant);
        let scale = |e: usize| ((e as f64 * factor).round() as usize).max(1);
        let epochs = scale(full.epochs);
        let fine_tune_epochs = if full.fine_tune_epochs > 0 { scale(full.fine_tune_epochs) } else { 0 };
        let shrink = |ms: &[usize], limit: usize| {
            let mut out: Vec<usize> = ms.iter().map(|&m| scale(m)).filter(|&m| m < limit).collect();
            out.dedup();
            out
        };
        TrainConfig {
            milestones: shrink(&full.milestones, epochs),
            fine_tune_milestones: shrink(&full.fine_tune_milestones, fine_tune_epochs),
            epochs,
            fine_tune_epochs,
            ..full
        }
    }

    /// Desk-scale preset: a tenth of the full schedule.
    pub fn desk(variant: Variant) -> TrainConfig {
        TrainConfig::scaled(variant, 0.1)
    }

    /// Generator preset: batches of 16, IR loss only, copied layers held
    /// fixed.
    pub fn generator(variant: Variant) -> TrainConfig {
        TrainConfig {
            variant,
            epochs: 20,
            fine_tune_epochs: 0,
            batch_size: 16,
            lr0: 0.05,
            milestones: vec![10],
            lr_decay: 10.0,
            fine_tune_lr0: 0.01,
            fine_tune_milestones: Vec::new(),
            momentum: 0.9,
            weight_decay: 0.0,
            distill: DistillConfig {
                beta: 0.0,
                ..DistillConfig::default()
            },
            hint_split: 1,
            freeze_copied: true,
            seed: 0,
        }
    }

    pub fn lr_at_epoch(&self, epoch: usize) -> f64 {
        lr_at_epoch(self.lr0, &self.milestones, self.lr_decay, epoch)
    }

    pub fn fine_tune_lr_at_epoch(&self, epoch: usize) -> f64 {
        lr_at_epoch(self.fine_tune_lr0, &self.fine_tune_milestones, self.lr_decay, epoch)
    }

    /// The procedure actually run. With `beta = 1` the intermediate term
    /// vanishes and the IR variants reduce to plain KD, without layer
    /// copying or a second phase.
    pub fn effective_variant(&self) -> Variant {
        if self.variant.uses_irs() && self.distill.beta == 1.0 {
            Variant::Kd
        } else {
            self.variant
        }
    }

    /// Epochs of the KD fine-tuning phase actually run.
    pub fn phase_two_epochs(&self) -> usize {
        if self.effective_variant().uses_irs() {
            self.fine_tune_epochs
        } else {
            0
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        self.distill.validate()?;
        if self.epochs == 0 {
            return bad("epochs must be at least 1".into());
        }
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1".into());
        }
        for (name, ms, limit) in [
            ("milestones", &self.milestones, self.epochs),
            ("fine_tune_milestones", &self.fine_tune_milestones, self.fine_tune_epochs.max(1)),
        ] {
            if ms.windows(2).any(|w| w[0] >= w[1]) {
                return bad(format!("{name} must be strictly increasing, got {ms:?}"));
            }
            if ms.iter().any(|&m| m >= limit) && !(name == "fine_tune_milestones" && self.fine_tune_epochs == 0) {
                return bad(format!("{name} {ms:?} must be below the phase length {limit}"));
            }
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad(format!("momentum must lie in [0, 1), got {}", self.momentum));
        }
        if !(self.weight_decay >= 0.0) {
            return bad(format!("weight_decay must be non-negative, got {}", self.weight_decay));
        }
        for (name, v) in [("lr0", self.lr0), ("fine_tune_lr0", self.fine_tune_lr0), ("lr_decay", self.lr_decay)] {
            if !(v > 0.0 && v.is_finite()) {
                return bad(format!("{name} must be positive, got {v}"));
            }
        }
        if self.hint_split == 0 {
            return bad("hint_split is 1-based".into());
        }
        Ok(())
    }
}
