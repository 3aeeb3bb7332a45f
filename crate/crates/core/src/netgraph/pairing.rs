use super::network::{layer_of, SegmentedNetwork};
use super::spec::NetworkSpec;
use crate::error::{Error, Result};
use crate::tensor::Scalar;

/// The teacher/student split points and the per-sample IR shape at each.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SplitSpec {
    pub k: usize,
    pub ir_shapes: Vec<[usize; 3]>,
}

/// Splits plus the teacher layers copied verbatim into the student.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PairingPlan {
    pub split: SplitSpec,
    pub copy_list: Vec<String>,
}

/// Checks that teacher and student agree at every section boundary.
///
/// Block counts and cardinality may differ; input shape, section count,
/// channel widths and strides may not.
pub fn validate_pairing(teacher: &NetworkSpec, student: &NetworkSpec) -> Result<SplitSpec> {
    teacher.validate()?;
    student.validate()?;
    if teacher.input_shape != student.input_shape {
        return Err(Error::Pairing {
            split: 1,
            detail: format!(
                "input shapes differ: teacher {:?}, student {:?}",
                teacher.input_shape, student.input_shape
            ),
        });
    }
    let t = teacher.section_output_shapes();
    let s = student.section_output_shapes();
    for (i, (a, b)) in t.iter().zip(&s).enumerate() {
        if a != b {
            return Err(Error::Pairing {
                split: i + 1,
                detail: format!("teacher IR {a:?} vs student IR {b:?}"),
            });
        }
    }
    if t.len() != s.len() {
        return Err(Error::Pairing {
            split: t.len().min(s.len()) + 1,
            detail: format!("teacher has {} sections, student {}", t.len(), s.len()),
        });
    }
    Ok(SplitSpec {
        k: t.len(),
        ir_shapes: t,
    })
}

impl PairingPlan {
    /// Validated splits with the stem and head on the copy list.
    pub fn new(teacher: &NetworkSpec, student: &NetworkSpec) -> Result<Self> {
        let split = validate_pairing(teacher, student)?;
        let probe = SegmentedNetwork::<f32>::build(student, 0)?;
        Ok(PairingPlan {
            split,
            copy_list: probe.non_residual_layers(),
        })
    }

    pub fn with_copy_list(mut self, copy_list: Vec<String>) -> Self {
        self.copy_list = copy_list;
        self
    }
}

/// Copies the listed teacher layers (parameters and running statistics) into
/// the student. Copied parameters stay trainable; their momentum is reset.
pub fn copy_layers<F: Scalar>(
    teacher: &SegmentedNetwork<F>,
    student: &mut SegmentedNetwork<F>,
    plan: &PairingPlan,
) -> Result<()> {
    // validate everything before mutating anything
    let mut param_pairs = Vec::new();
    let mut buffer_pairs = Vec::new();
    for layer in &plan.copy_list {
        let mut found = false;
        for p in teacher.params().iter().filter(|p| layer_of(&p.name) == layer) {
            found = true;
            let q = student
                .param(&p.name)
                .ok_or_else(|| Error::Copy(format!("student has no parameter '{}'", p.name)))?;
            if q.value.shape() != p.value.shape() {
                return Err(Error::Copy(format!(
                    "'{}' has shape {:?} in the teacher but {:?} in the student",
                    p.name,
                    p.value.shape(),
                    q.value.shape()
                )));
            }
            param_pairs.push(p.name.clone());
        }
        for (ti, b) in teacher.buffers().iter().enumerate().filter(|(_, b)| layer_of(&b.name) == layer) {
            let si = student
                .buffer_index(&b.name)
                .ok_or_else(|| Error::Copy(format!("student has no buffer '{}'", b.name)))?;
            if student.buffers()[si].value.shape() != b.value.shape() {
                return Err(Error::Copy(format!("buffer '{}' differs in shape", b.name)));
            }
            buffer_pairs.push((ti, si));
        }
        if !found {
            return Err(Error::Copy(format!("teacher has no layer '{layer}'")));
        }
    }
    for name in param_pairs {
        let src = teacher.param(&name).expect("validated").value.clone();
        let dst = student.param_mut(&name).expect("validated");
        dst.value = src;
        dst.momentum.iter_mut().for_each(|m| *m = F::zero());
        dst.apply_mask();
    }
    for (ti, si) in buffer_pairs {
        student.buffers_mut()[si].value = teacher.buffers()[ti].value.clone();
    }
    Ok(())
}
