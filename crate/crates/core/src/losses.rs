//! Distillation objectives: softened distributions, the KD loss, the
//! block-wise intermediate-representation loss and their interpolation.
//!
//! Each loss has two forms. The tape form records onto a [`Tape`] so it can
//! be differentiated; the value form evaluates both networks in eval mode and
//! returns a number.

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::netgraph::{validate_pairing, Bound, SegmentedNetwork};
use crate::tensor::{Mode, Scalar, Tape, Tensor, Var};

/// Element-wise penalty between a student and a teacher representation.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Penalty {
    L2,
    L1,
    SmoothedL1,
}

impl Penalty {
    pub const ALL: [Penalty; 3] = [Penalty::L2, Penalty::L1, Penalty::SmoothedL1];

    /// The penalty of a single difference `d`.
    pub fn of(self, d: f64) -> f64 {
        match self {
            Penalty::L2 => d * d,
            Penalty::L1 => d.abs(),
            Penalty::SmoothedL1 if d.abs() < 1.0 => 0.5 * d * d,
            Penalty::SmoothedL1 => d.abs() - 0.5,
        }
    }
}

impl fmt::Display for Penalty {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Penalty::L2 => "l2",
            Penalty::L1 => "l1",
            Penalty::SmoothedL1 => "smoothed_l1",
        })
    }
}

impl FromStr for Penalty {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "l2" => Ok(Penalty::L2),
            "l1" => Ok(Penalty::L1),
            "smoothed_l1" | "smoothedl1" | "huber" => Ok(Penalty::SmoothedL1),
            _ => Err(Error::Config(format!("unknown penalty '{s}' (expected l2, l1 or smoothed_l1)"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DistillConfig {
    /// Temperature of the soft term.
    pub tau: f64,
    /// Weight of the hard-label cross-entropy inside the KD loss.
    pub alpha: f64,
    /// Weight of the KD loss against the intermediate loss.
    pub beta: f64,
    pub penalty: Penalty,
    /// Multiply the soft term by τ², as in the classical formulation.
    pub tau_sq_scaling: bool,
}

impl Default for DistillConfig {
    fn default() -> Self {
        DistillConfig {
            tau: 6.0,
            alpha: 0.95,
            beta: 0.75,
            penalty: Penalty::L2,
            tau_sq_scaling: false,
        }
    }
}

impl DistillConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return Err(Error::Config(format!("tau must be positive, got {}", self.tau)));
        }
        for (name, v) in [("alpha", self.alpha), ("beta", self.beta)] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::Config(format!("{name} must lie in [0, 1], got {v}")));
            }
        }
        Ok(())
    }
}

/// Row-wise `exp(z/τ) / Σ exp(z/τ)` of a `[N, C]` logit matrix.
pub fn softened_distribution<F: Scalar>(z: &Tensor<F>, tau: f64) -> Result<Tensor<F>> {
    let mut tape = Tape::new();
    let v = tape.constant(z.clone());
    let p = tape.softmax(v, tau)?;
    Ok(tape.value(p).clone())
}

fn check_logits<F: Scalar>(tape: &Tape<F>, logits: Var, labels: &[usize]) -> Result<(usize, usize)> {
    let s = tape.shape(logits);
    if s.len() != 2 {
        return Err(Error::dim("cross_entropy", format!("logits must be [N, C], got {s:?}")));
    }
    let (n, c) = (s[0], s[1]);
    if labels.len() != n {
        return Err(Error::dim("cross_entropy", format!("{} labels for {n} rows", labels.len())));
    }
    if let Some((i, &y)) = labels.iter().enumerate().find(|(_, &y)| y >= c) {
        return Err(Error::Data(format!("label {y} at row {i} is outside 0..{c}")));
    }
    Ok((n, c))
}

/// Mean cross-entropy of `logits` (τ = 1) against integer labels.
pub fn cross_entropy<F: Scalar>(tape: &mut Tape<F>, logits: Var, labels: &[usize]) -> Result<Var> {
    let (n, c) = check_logits(tape, logits, labels)?;
    let mut onehot = vec![F::zero(); n * c];
    for (i, &y) in labels.iter().enumerate() {
        onehot[i * c + y] = F::one();
    }
    let onehot = tape.constant(Tensor::new(vec![n, c], onehot)?);
    let logp = tape.log_softmax(logits, 1.0)?;
    let picked = tape.mul(onehot, logp)?;
    let total = tape.sum(picked)?;
    tape.scale(total, -1.0 / n as f64)
}

/// Mean of `−Σ_i q_i log p_i` where `q` is the teacher's softened
/// distribution (held fixed) and `p` the student's, both at temperature τ.
pub fn soft_cross_entropy<F: Scalar>(tape: &mut Tape<F>, student: Var, teacher: Var, tau: f64) -> Result<Var> {
    if tape.shape(student) != tape.shape(teacher) {
        return Err(Error::dim(
            "soft_cross_entropy",
            format!("student {:?} vs teacher {:?}", tape.shape(student), tape.shape(teacher)),
        ));
    }
    let n = tape.shape(student)[0];
    let t = tape.detach(teacher);
    let q = tape.softmax(t, tau)?;
    let logp = tape.log_softmax(student, tau)?;
    let prod = tape.mul(q, logp)?;
    let total = tape.sum(prod)?;
    tape.scale(total, -1.0 / n as f64)
}

/// `α·CE(y, p) + (1−α)·H(q_τ, p_τ)`. Terms with zero weight are not recorded.
pub fn kd_term<F: Scalar>(
    tape: &mut Tape<F>,
    student: Var,
    teacher: Var,
    labels: &[usize],
    cfg: &DistillConfig,
) -> Result<Var> {
    cfg.validate()?;
    check_logits(tape, student, labels)?;
    let hard = if cfg.alpha > 0.0 {
        let ce = cross_entropy(tape, student, labels)?;
        Some(tape.scale(ce, cfg.alpha)?)
    } else {
        None
    };
    let soft = if cfg.alpha < 1.0 {
        let h = soft_cross_entropy(tape, student, teacher, cfg.tau)?;
        let w = if cfg.tau_sq_scaling { cfg.tau * cfg.tau } else { 1.0 };
        Some(tape.scale(h, (1.0 - cfg.alpha) * w)?)
    } else {
        None
    };
    match (hard, soft) {
        (Some(h), Some(s)) => tape.add(h, s),
        (Some(v), None) | (None, Some(v)) => Ok(v),
        (None, None) => unreachable!("alpha lies in [0, 1]"),
    }
}

/// Element mean of the penalty applied to `a − b`.
pub fn penalty_term<F: Scalar>(tape: &mut Tape<F>, a: Var, b: Var, penalty: Penalty) -> Result<Var> {
    let d = tape.sub(a, b)?;
    let e = match penalty {
        Penalty::L2 => tape.square(d)?,
        Penalty::L1 => tape.abs(d)?,
        Penalty::SmoothedL1 => tape.huber_unit(d)?,
    };
    tape.mean(e)
}

/// The k terms of the intermediate loss. Term 0 runs the student's stem and
/// first section on `x`; term i ≥ 1 runs student section i on the detached
/// teacher representation i − 1. Every target is detached.
pub fn ir_terms<F: Scalar>(
    tape: &mut Tape<F>,
    student: &mut Bound<'_, F>,
    x: Var,
    teacher_irs: &[Var],
    penalty: Penalty,
) -> Result<Vec<Var>> {
    let k = student.net().k();
    if teacher_irs.len() != k {
        return Err(Error::Pairing {
            split: k.min(teacher_irs.len()) + 1,
            detail: format!("teacher exposes {} representations, student {k}", teacher_irs.len()),
        });
    }
    let mut terms = Vec::with_capacity(k);
    for i in 0..k {
        let s = if i == 0 {
            student.forward_to(tape, x, 0)?
        } else {
            let input = tape.detach(teacher_irs[i - 1]);
            student.section(tape, i, input)?
        };
        let t = tape.detach(teacher_irs[i]);
        if tape.shape(s) != tape.shape(t) {
            return Err(Error::Pairing {
                split: i + 1,
                detail: format!("student {:?} vs teacher {:?}", tape.shape(s), tape.shape(t)),
            });
        }
        terms.push(penalty_term(tape, s, t, penalty)?);
    }
    Ok(terms)
}

pub fn sum_terms<F: Scalar>(tape: &mut Tape<F>, terms: &[Var]) -> Result<Var> {
    let (&first, rest) = terms
        .split_first()
        .ok_or_else(|| Error::Usage("no loss terms to sum".into()))?;
    rest.iter().try_fold(first, |acc, &t| tape.add(acc, t))
}

/// Teacher outputs a student is trained against.
#[derive(Clone, Debug)]
pub struct TeacherOutputs {
    pub logits: Option<Var>,
    pub irs: Vec<Var>,
}

/// The recorded pieces of one LIT objective.
#[derive(Clone, Debug)]
pub struct LitParts {
    pub total: Var,
    pub kd: Option<Var>,
    pub ir: Vec<Var>,
}

/// `β·KD + (1−β)·IR` on the tape. β = 0 skips the student's full forward
/// and needs no labels; β = 1 skips the intermediate terms.
pub fn lit_objective<F: Scalar>(
    tape: &mut Tape<F>,
    student: &mut Bound<'_, F>,
    x: Var,
    teacher: &TeacherOutputs,
    labels: Option<&[usize]>,
    cfg: &DistillConfig,
) -> Result<LitParts> {
    cfg.validate()?;
    let kd = if cfg.beta > 0.0 {
        let (Some(labels), Some(t_logits)) = (labels, teacher.logits) else {
            return Err(Error::Config("beta > 0 needs labels and a classifier head".into()));
        };
        let s_logits = student.forward(tape, x)?;
        Some(kd_term(tape, s_logits, t_logits, labels, cfg)?)
    } else {
        None
    };
    let ir = if cfg.beta < 1.0 {
        ir_terms(tape, student, x, &teacher.irs, cfg.penalty)?
    } else {
        Vec::new()
    };
    let total = match kd {
        Some(kd) if cfg.beta == 1.0 => kd,
        Some(kd) => {
            let a = tape.scale(kd, cfg.beta)?;
            let s = sum_terms(tape, &ir)?;
            let b = tape.scale(s, 1.0 - cfg.beta)?;
            tape.add(a, b)?
        }
        None => sum_terms(tape, &ir)?,
    };
    Ok(LitParts { total, kd, ir })
}

/// Binds `teacher` in eval mode with all parameters registered, and returns
/// its outputs. Gradients never reach them, since every loss detaches them.
pub fn bind_teacher<'n, F: Scalar>(
    tape: &mut Tape<F>,
    teacher: &'n SegmentedNetwork<F>,
    x: Var,
) -> Result<(Bound<'n, F>, TeacherOutputs)> {
    let mut bound = teacher.bind(tape, Mode::Eval, |_| true);
    let c = bound.forward_collect(tape, x)?;
    let logits = (!teacher.spec().is_generator()).then_some(c.output);
    Ok((bound, TeacherOutputs { logits, irs: c.irs }))
}

fn scalar_of<F: Scalar>(tape: &Tape<F>, v: Var) -> F {
    tape.value(v).data()[0]
}

/// KD loss of fixed logits.
pub fn kd_loss<F: Scalar>(
    student_logits: &Tensor<F>,
    teacher_logits: &Tensor<F>,
    labels: &[usize],
    alpha: f64,
    tau: f64,
) -> Result<F> {
    let cfg = DistillConfig {
        tau,
        alpha,
        ..DistillConfig::default()
    };
    let mut tape = Tape::new();
    let s = tape.constant(student_logits.clone());
    let t = tape.constant(teacher_logits.clone());
    let v = kd_term(&mut tape, s, t, labels, &cfg)?;
    Ok(scalar_of(&tape, v))
}

pub fn ir_penalty<F: Scalar>(a: &Tensor<F>, b: &Tensor<F>, penalty: Penalty) -> Result<F> {
    let mut tape = Tape::new();
    let (a, b) = (tape.constant(a.clone()), tape.constant(b.clone()));
    let v = penalty_term(&mut tape, a, b, penalty)?;
    Ok(scalar_of(&tape, v))
}

/// Intermediate loss with both networks in eval mode.
pub fn ir_loss<F: Scalar>(
    teacher: &SegmentedNetwork<F>,
    student: &SegmentedNetwork<F>,
    x: &Tensor<F>,
    penalty: Penalty,
) -> Result<F> {
    lit_loss(
        teacher,
        student,
        x,
        None,
        &DistillConfig {
            beta: 0.0,
            penalty,
            ..DistillConfig::default()
        },
    )
}

/// LIT loss with both networks in eval mode.
pub fn lit_loss<F: Scalar>(
    teacher: &SegmentedNetwork<F>,
    student: &SegmentedNetwork<F>,
    x: &Tensor<F>,
    labels: Option<&[usize]>,
    cfg: &DistillConfig,
) -> Result<F> {
    validate_pairing(teacher.spec(), student.spec())?;
    let mut tape = Tape::new();
    let xv = tape.constant(x.clone());
    let (_, t_out) = bind_teacher(&mut tape, teacher, xv)?;
    let mut s = student.bind(&mut tape, Mode::Eval, |_| true);
    let parts = lit_objective(&mut tape, &mut s, xv, &t_out, labels, cfg)?;
    Ok(scalar_of(&tape, parts.total))
}
