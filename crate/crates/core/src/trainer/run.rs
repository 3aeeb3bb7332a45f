use std::collections::HashSet;
use std::fmt::Write as _;
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::config::{TrainConfig, Variant};
use super::sgd::{sgd_step, SgdConfig};
use crate::data::{batch_order, Dataset, Splits};
use crate::error::{Error, Result};
use crate::losses::{kd_term, penalty_term, cross_entropy, sum_terms, DistillConfig};
use crate::netgraph::{copy_layers, validate_pairing, Bound, NetworkSpec, NormUpdate, PairingPlan, SegmentedNetwork};
use crate::tensor::{Conv2dConfig, Mode, Parameter, Tape, Tensor, Var};

pub type Net = SegmentedNetwork<f32>;

const EVAL_BATCH: usize = 250;

/// What a network's test number means.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Metric {
    /// Fraction of correctly classified samples.
    Accuracy,
    /// Mean absolute per-pixel difference to the target image.
    PixelError,
}

impl Metric {
    pub fn of(spec: &NetworkSpec) -> Metric {
        if spec.is_generator() {
            Metric::PixelError
        } else {
            Metric::Accuracy
        }
    }
}

/// Accuracy (classifiers) or mean per-pixel error (generators) of `net` on
/// `ds`, with eval-mode normalization.
pub fn evaluate(net: &Net, ds: &Dataset) -> Result<f64> {
    if ds.is_empty() {
        return Err(Error::Usage("cannot evaluate on an empty dataset".into()));
    }
    let idx: Vec<usize> = (0..ds.len()).collect();
    let mut total = 0.0;
    let mut count = 0usize;
    for chunk in idx.chunks(EVAL_BATCH) {
        let x = ds.inputs_at(chunk)?;
        let (out, _) = net.infer(&x)?;
        match (ds.labels_at(chunk), ds.target_images_at(chunk)?) {
            (Some(labels), _) => {
                let c = *out
                    .shape()
                    .get(1)
                    .ok_or_else(|| Error::Usage("dataset has labels but the network is not a classifier".into()))?;
                if out.shape().len() != 2 {
                    return Err(Error::Usage("dataset has labels but the network is not a classifier".into()));
                }
                for (row, &y) in out.data().chunks(c).zip(&labels) {
                    let best = row
                        .iter()
                        .enumerate()
                        .fold((0, f32::NEG_INFINITY), |b, (i, &v)| if v > b.1 { (i, v) } else { b });
                    total += (best.0 == y) as usize as f64;
                }
                count += labels.len();
            }
            (None, Some(target)) => {
                if target.shape() != out.shape() {
                    return Err(Error::dim(
                        "evaluate",
                        format!("output {:?} vs target {:?}", out.shape(), target.shape()),
                    ));
                }
                total += out
                    .data()
                    .iter()
                    .zip(target.data())
                    .map(|(a, b)| (a - b).abs() as f64)
                    .sum::<f64>();
                count += out.len();
            }
            (None, None) => unreachable!("datasets carry labels or images"),
        }
    }
    Ok(total / count as f64)
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochRow {
    /// Running epoch count across phases, starting at 0.
    pub epoch: usize,
    pub phase: String,
    pub lr: f64,
    pub train_loss: f64,
    /// Validation metric after the epoch; NaN without a validation set.
    pub val_metric: f64,
}

#[derive(Clone, Debug)]
pub struct RunReport {
    pub rows: Vec<EpochRow>,
    pub metric: Metric,
    pub final_val: f64,
    pub final_test: f64,
    pub wall_seconds: f64,
    pub config: TrainConfig,
}

impl RunReport {
    pub const CSV_HEADER: &'static str = "epoch,phase,lr,train_loss,val_acc";

    /// Per-epoch rows as CSV. For generators `val_acc` holds the validation
    /// per-pixel error.
    pub fn metrics_csv(&self) -> String {
        let mut out = String::from(Self::CSV_HEADER);
        out.push('\n');
        for r in &self.rows {
            let _ = writeln!(out, "{},{},{},{},{}", r.epoch, r.phase, r.lr, r.train_loss, r.val_metric);
        }
        out
    }
}

/// Learned 1×1 projections from student to teacher widths, one per split
/// where they differ.
struct Adapters {
    params: Vec<Option<Parameter<f32>>>,
}

impl Adapters {
    fn new(student: &NetworkSpec, teacher: &NetworkSpec, seed: u64) -> Adapters {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xada9_7e25);
        let s_shapes = student.section_output_shapes();
        let params = teacher
            .section_output_shapes()
            .iter()
            .zip(&s_shapes)
            .enumerate()
            .map(|(j, (t, s))| {
                (t[0] != s[0]).then(|| {
                    let normal = Normal::new(0.0, (1.0 / s[0] as f64).sqrt()).expect("valid normal");
                    let v: Vec<f64> = (0..t[0] * s[0]).map(|_| normal.sample(&mut rng)).collect();
                    Parameter::new(
                        format!("adapter{j}.weight"),
                        Tensor::from_f64(&[t[0], s[0], 1, 1], &v).expect("adapter shape"),
                    )
                })
            })
            .collect();
        Adapters { params }
    }

    fn bind(&self, tape: &mut Tape<f32>) -> Vec<Option<Var>> {
        self.params
            .iter()
            .map(|p| p.as_ref().map(|p| tape.param(p.name.clone(), p.value.clone())))
            .collect()
    }
}

fn check_ir_compatible(teacher: &NetworkSpec, student: &NetworkSpec) -> Result<()> {
    let (t, s) = (teacher.section_output_shapes(), student.section_output_shapes());
    if teacher.input_shape != student.input_shape {
        return Err(Error::Pairing {
            split: 1,
            detail: "teacher and student inputs differ".into(),
        });
    }
    if t.len() != s.len() {
        return Err(Error::Pairing {
            split: t.len().min(s.len()) + 1,
            detail: format!("teacher has {} sections, student {}", t.len(), s.len()),
        });
    }
    for (j, (a, b)) in t.iter().zip(&s).enumerate() {
        if a[1..] != b[1..] {
            return Err(Error::Pairing {
                split: j + 1,
                detail: format!("spatial extents differ: teacher {a:?}, student {b:?}"),
            });
        }
    }
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Objective {
    /// Labels (or target images) only.
    Supervised,
    Kd,
    Ir(Variant),
}

struct Step<'a> {
    teacher: Option<&'a Net>,
    distill: DistillConfig,
    hint: usize,
    frozen: HashSet<String>,
    freeze: bool,
    adapters: Option<Adapters>,
}

/// The loss of one mini-batch on `tape`, and the batch-norm updates to keep.
struct Recorded {
    loss: Var,
    updates: Vec<NormUpdate<f32>>,
}

impl Step<'_> {
    fn teacher_outputs(&self, x: &Tensor<f32>) -> Result<(Tensor<f32>, Vec<Tensor<f32>>)> {
        let t = self
            .teacher
            .ok_or_else(|| Error::Config("this variant needs a teacher".into()))?;
        t.infer(x)
    }

    fn record(
        &self,
        tape: &mut Tape<f32>,
        s: &mut Bound<'_, f32>,
        objective: Objective,
        x: &Tensor<f32>,
        labels: Option<&[usize]>,
        target: Option<&Tensor<f32>>,
    ) -> Result<Recorded> {
        let xv = tape.constant(x.clone());
        if objective == Objective::Supervised {
            let out = s.forward(tape, xv)?;
            let loss = match (labels, target) {
                (Some(l), _) => cross_entropy(tape, out, l)?,
                (None, Some(t)) => {
                    let tv = tape.constant(t.clone());
                    penalty_term(tape, out, tv, self.distill.penalty)?
                }
                (None, None) => return Err(Error::Internal("batch without targets".into())),
            };
            return Ok(Recorded {
                loss,
                updates: s.take_updates(),
            });
        }
        let (t_out, t_irs) = self.teacher_outputs(x)?;
        let kd_cfg = |tape: &mut Tape<f32>, out: Var| -> Result<Var> {
            let labels =
                labels.ok_or_else(|| Error::Config("the KD term needs labels and a classifier head".into()))?;
            let t = tape.constant(t_out.clone());
            kd_term(tape, out, t, labels, &self.distill)
        };
        if objective == Objective::Kd {
            let out = s.forward(tape, xv)?;
            let loss = kd_cfg(tape, out)?;
            return Ok(Recorded {
                loss,
                updates: s.take_updates(),
            });
        }
        let Objective::Ir(variant) = objective else { unreachable!() };
        let beta = self.distill.beta;
        let t_vars: Vec<Var> = t_irs.into_iter().map(|t| tape.constant(t)).collect();
        let adapters = self.adapters.as_ref().map(|a| a.bind(tape)).unwrap_or_default();
        let adapt = |tape: &mut Tape<f32>, j: usize, v: Var| -> Result<Var> {
            match adapters.get(j).copied().flatten() {
                Some(w) => tape.conv2d(v, w, None, Conv2dConfig::default()),
                None => Ok(v),
            }
        };
        let own_chain = beta > 0.0 || matches!(variant, Variant::HintSingleNoInput | Variant::MultiIrNoInput);
        let collected = if own_chain { Some(s.forward_collect(tape, xv)?) } else { None };
        let kd = match &collected {
            Some(c) if beta > 0.0 => Some(kd_cfg(tape, c.output)?),
            _ => None,
        };
        let mut updates = s.take_updates();
        let mut terms = Vec::new();
        if beta < 1.0 {
            let j = self.hint;
            match variant {
                Variant::Lit => {
                    for i in 0..t_vars.len() {
                        let sv = match (i, &collected) {
                            (0, Some(c)) => c.irs[0],
                            (0, None) => s.forward_to(tape, xv, 0)?,
                            _ => s.section(tape, i, t_vars[i - 1])?,
                        };
                        terms.push(penalty_term(tape, sv, t_vars[i], self.distill.penalty)?);
                    }
                }
                Variant::HintSingleNoInput => {
                    let c = collected.as_ref().expect("own chain");
                    let a = adapt(tape, j, c.irs[j])?;
                    terms.push(penalty_term(tape, a, t_vars[j], self.distill.penalty)?);
                }
                Variant::HintSingleWithInput => {
                    let sv = match (j, &collected) {
                        (0, Some(c)) => c.irs[0],
                        (0, None) => s.forward_to(tape, xv, 0)?,
                        _ => s.section(tape, j, t_vars[j - 1])?,
                    };
                    let a = adapt(tape, j, sv)?;
                    terms.push(penalty_term(tape, a, t_vars[j], self.distill.penalty)?);
                }
                Variant::MultiIrNoInput => {
                    let c = collected.as_ref().expect("own chain");
                    for (i, &ir) in c.irs.iter().enumerate() {
                        let a = adapt(tape, i, ir)?;
                        terms.push(penalty_term(tape, a, t_vars[i], self.distill.penalty)?);
                    }
                }
                Variant::Scratch | Variant::Kd => unreachable!("not an IR variant"),
            }
        }
        // sections fed teacher inputs must not move the running statistics
        // of the student's own chain
        let extra = s.take_updates();
        if collected.is_none() {
            updates = extra;
        }
        let loss = match kd {
            Some(kd) if terms.is_empty() => kd,
            Some(kd) => {
                let a = tape.scale(kd, beta)?;
                let ir = sum_terms(tape, &terms)?;
                let b = tape.scale(ir, 1.0 - beta)?;
                tape.add(a, b)?
            }
            None => sum_terms(tape, &terms)?,
        };
        Ok(Recorded { loss, updates })
    }

    fn run(
        &mut self,
        student: &mut Net,
        objective: Objective,
        x: &Tensor<f32>,
        labels: Option<&[usize]>,
        target: Option<&Tensor<f32>>,
        sgd: SgdConfig,
    ) -> Result<f64> {
        let mut tape = Tape::new();
        let none = HashSet::new();
        let frozen = if self.freeze { &self.frozen } else { &none };
        let (loss, updates) = {
            let mut s = student.bind(&mut tape, Mode::Train, |n| !frozen.contains(n));
            let r = self.record(&mut tape, &mut s, objective, x, labels, target)?;
            (r.loss, r.updates)
        };
        let value = tape.value(loss).data()[0] as f64;
        if !value.is_finite() {
            return Err(Error::Data(format!("training loss diverged ({value})")));
        }
        let grads = tape.backward(loss)?.by_name();
        student.apply_norm_updates(&updates);
        sgd_step(student.params_mut(), &grads, sgd, |n| !frozen.contains(n))?;
        if let Some(a) = &mut self.adapters {
            for p in a.params.iter_mut().flatten().filter(|p| grads.contains_key(&p.name)) {
                sgd_step(std::slice::from_mut(p), &grads, sgd, |_| true)?;
            }
        }
        Ok(value)
    }
}

struct Phase<'a> {
    name: String,
    /// Whether `Step::frozen` applies during this phase.
    freeze: bool,
    objective: Objective,
    epochs: usize,
    lr: Box<dyn Fn(usize) -> f64 + 'a>,
}

fn run_phases(
    student: &mut Net,
    step: &mut Step<'_>,
    phases: Vec<Phase<'_>>,
    cfg: &TrainConfig,
    data: &Splits,
) -> Result<Vec<EpochRow>> {
    let train = &data.train;
    if train.is_empty() {
        return Err(Error::Usage("training set is empty".into()));
    }
    let mut rows = Vec::new();
    let mut epoch = 0;
    for phase in phases {
        step.freeze = phase.freeze;
        for e in 0..phase.epochs {
            let lr = (phase.lr)(e);
            let sgd = SgdConfig {
                lr,
                momentum: cfg.momentum,
                weight_decay: cfg.weight_decay,
            };
            let mut loss_sum = 0.0;
            for batch in batch_order(train.len(), cfg.batch_size, cfg.seed, epoch) {
                let x = train.inputs_at(&batch)?;
                let labels = train.labels_at(&batch);
                let target = train.target_images_at(&batch)?;
                let l = step.run(student, phase.objective, &x, labels.as_deref(), target.as_ref(), sgd)?;
                loss_sum += l * batch.len() as f64;
            }
            let val_metric = if data.val.is_empty() {
                f64::NAN
            } else {
                evaluate(student, &data.val)?
            };
            rows.push(EpochRow {
                epoch,
                phase: phase.name.clone(),
                lr,
                train_loss: loss_sum / train.len() as f64,
                val_metric,
            });
            epoch += 1;
        }
    }
    Ok(rows)
}

fn finish(student: &Net, rows: Vec<EpochRow>, cfg: &TrainConfig, data: &Splits, started: Instant) -> Result<RunReport> {
    let final_val = if data.val.is_empty() { f64::NAN } else { evaluate(student, &data.val)? };
    Ok(RunReport {
        rows,
        metric: Metric::of(student.spec()),
        final_val,
        final_test: evaluate(student, &data.test)?,
        wall_seconds: started.elapsed().as_secs_f64(),
        config: cfg.clone(),
    })
}

/// Trains a fresh student of `student_spec` with the configured variant.
///
/// The teacher is only read. Scratch ignores it; every other variant
/// requires it. `lit` copies the teacher's non-residual layers into the
/// student first; IR variants end with a KD fine-tuning phase when
/// `fine_tune_epochs > 0` (skipped for generators, which have no logits).
pub fn train(cfg: &TrainConfig, teacher: Option<&Net>, student_spec: &NetworkSpec, data: &Splits) -> Result<(Net, RunReport)> {
    let started = Instant::now();
    cfg.validate()?;
    let mut student = Net::build(student_spec, cfg.seed)?;
    if student_spec.input_shape != data.train.input_shape() {
        return Err(Error::Config(format!(
            "student input {:?} does not match the data {:?}",
            student_spec.input_shape,
            data.train.input_shape()
        )));
    }
    let generator = student_spec.is_generator();
    let variant = cfg.effective_variant();
    let teacher = if variant.needs_teacher() {
        Some(teacher.ok_or_else(|| Error::Config(format!("variant {variant} needs a teacher")))?)
    } else {
        None
    };
    if generator && (variant == Variant::Kd || (variant.uses_irs() && cfg.distill.beta > 0.0)) {
        return Err(Error::Config("generators have no logits: use beta = 0 and no kd variant".into()));
    }
    let mut frozen = HashSet::new();
    let mut adapters = None;
    if let Some(t) = teacher {
        match variant {
            Variant::Lit => {
                let plan = PairingPlan::new(t.spec(), student_spec)?;
                copy_layers(t, &mut student, &plan)?;
                if cfg.freeze_copied {
                    let copied: HashSet<&str> = plan.copy_list.iter().map(String::as_str).collect();
                    frozen = student
                        .params()
                        .iter()
                        .filter(|p| copied.contains(crate::netgraph::network::layer_of(&p.name)))
                        .map(|p| p.name.clone())
                        .collect();
                }
            }
            Variant::Kd => {
                if t.spec().class_count() != student_spec.class_count() {
                    return Err(Error::Config("teacher and student class counts differ".into()));
                }
            }
            Variant::Scratch => {}
            _ => {
                check_ir_compatible(t.spec(), student_spec)?;
                if cfg.hint_split > student_spec.sections.len() {
                    return Err(Error::Config(format!(
                        "hint_split {} exceeds the {} splits",
                        cfg.hint_split,
                        student_spec.sections.len()
                    )));
                }
                adapters = Some(Adapters::new(student_spec, t.spec(), cfg.seed));
            }
        }
        if variant == Variant::Lit {
            validate_pairing(t.spec(), student_spec)?;
        }
    }
    let mut step = Step {
        teacher,
        distill: cfg.distill,
        hint: cfg.hint_split - 1,
        frozen,
        freeze: true,
        adapters,
    };
    let main_objective = match variant {
        Variant::Scratch => Objective::Supervised,
        Variant::Kd => Objective::Kd,
        v => Objective::Ir(v),
    };
    let mut phases = vec![Phase {
        name: variant.to_string(),
        freeze: true,
        objective: main_objective,
        epochs: cfg.epochs,
        lr: Box::new(|e| cfg.lr_at_epoch(e)),
    }];
    if variant.uses_irs() && !generator && cfg.fine_tune_epochs > 0 {
        phases.push(Phase {
            name: "finetune".into(),
            freeze: false,
            objective: Objective::Kd,
            epochs: cfg.fine_tune_epochs,
            lr: Box::new(|e| cfg.fine_tune_lr_at_epoch(e)),
        });
    }
    let rows = run_phases(&mut student, &mut step, phases, cfg, data)?;
    let report = finish(&student, rows, cfg, data, started)?;
    Ok((student, report))
}

/// Continues supervised training of `net` for `epochs` at the fine-tuning
/// learning rate. Pruning masks stay in force.
pub fn fine_tune(net: &mut Net, cfg: &TrainConfig, epochs: usize, data: &Splits) -> Result<RunReport> {
    let started = Instant::now();
    let mut step = Step {
        teacher: None,
        distill: cfg.distill,
        hint: 0,
        frozen: HashSet::new(),
        freeze: false,
        adapters: None,
    };
    let phases = vec![Phase {
        name: "prune_finetune".into(),
        freeze: false,
        objective: Objective::Supervised,
        epochs,
        lr: Box::new(|e| cfg.fine_tune_lr_at_epoch(e)),
    }];
    let rows = run_phases(net, &mut step, phases, cfg, data)?;
    finish(net, rows, cfg, data, started)
}
