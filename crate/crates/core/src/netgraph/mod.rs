//! Declarative block-structured networks, segmented at downsampling
//! boundaries so intermediate representations can be paired across a
//! teacher and a student.

mod checkpoint;
pub(crate) mod network;
mod pairing;
mod spec;

pub use network::{Bound, Collected, NormUpdate, SegmentedNetwork, BN_MOMENTUM};
pub use pairing::{copy_layers, validate_pairing, PairingPlan, SplitSpec};
pub use spec::{ConvSpec, HeadSpec, NetworkSpec, SectionSpec};
