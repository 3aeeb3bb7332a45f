use std::path::Path;

use super::network::SegmentedNetwork;
use super::spec::NetworkSpec;
use crate::container::{Container, Entry, EntryData};
use crate::error::{Error, Result};
use crate::tensor::{Precision, Scalar, Tensor};

const MASK_SUFFIX: &str = "#mask";

fn encode_values<F: Scalar>(t: &Tensor<F>) -> EntryData {
    match F::PRECISION {
        Precision::Single => EntryData::F32(t.data().iter().map(|v| v.as_f64() as f32).collect()),
        Precision::Double => EntryData::F64(t.data().iter().map(|v| v.as_f64()).collect()),
    }
}

impl<F: Scalar> SegmentedNetwork<F> {
    /// Checkpoint container: the canonical spec as header, then every
    /// parameter, running statistic and pruning mask by name.
    pub fn to_container(&self) -> Container {
        let mut entries = Vec::new();
        for p in self.params() {
            entries.push(Entry {
                name: p.name.clone(),
                shape: p.value.shape().to_vec(),
                data: encode_values(&p.value),
            });
        }
        for b in self.buffers() {
            entries.push(Entry {
                name: b.name.clone(),
                shape: b.value.shape().to_vec(),
                data: encode_values(&b.value),
            });
        }
        for p in self.params() {
            if let Some(mask) = &p.mask {
                entries.push(Entry {
                    name: format!("{}{MASK_SUFFIX}", p.name),
                    shape: p.value.shape().to_vec(),
                    data: EntryData::U8(mask.iter().map(|&k| k as u8).collect()),
                });
            }
        }
        Container {
            header: self.spec().encode(),
            entries,
        }
    }

    pub fn from_container(c: &Container) -> Result<Self> {
        let spec = NetworkSpec::decode(&c.header)?;
        let mut net = SegmentedNetwork::<F>::build(&spec, 0)?;
        let take = |name: &str, shape: &[usize]| -> Result<Vec<F>> {
            let e = c
                .get(name)
                .ok_or_else(|| Error::Data(format!("checkpoint is missing '{name}'")))?;
            if e.shape != shape {
                return Err(Error::Data(format!(
                    "checkpoint '{name}' has shape {:?}, spec implies {shape:?}",
                    e.shape
                )));
            }
            let v = e
                .data
                .to_f64()
                .ok_or_else(|| Error::Data(format!("checkpoint '{name}' is not floating point")))?;
            Ok(v.into_iter().map(F::from_f64).collect())
        };
        for p in net.params_mut() {
            let shape = p.value.shape().to_vec();
            p.value = Tensor::new(shape.clone(), take(&p.name, &shape)?)?;
            if let Some(e) = c.get(&format!("{}{MASK_SUFFIX}", p.name)) {
                let EntryData::U8(m) = &e.data else {
                    return Err(Error::Data(format!("mask for '{}' is not u8", p.name)));
                };
                if m.len() != p.value.len() {
                    return Err(Error::Data(format!("mask for '{}' has wrong length", p.name)));
                }
                p.set_mask(m.iter().map(|&b| b != 0).collect());
            }
        }
        for b in net.buffers_mut() {
            let shape = b.value.shape().to_vec();
            b.value = Tensor::new(shape.clone(), take(&b.name, &shape)?)?;
        }
        let known = net.params().len() + net.buffers().len();
        let masks = c.entries.iter().filter(|e| e.name.ends_with(MASK_SUFFIX)).count();
        if c.entries.len() != known + masks {
            return Err(Error::Data("checkpoint has entries the spec does not define".into()));
        }
        Ok(net)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_container().write_to(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_container(&Container::read_from(path)?)
    }
}
