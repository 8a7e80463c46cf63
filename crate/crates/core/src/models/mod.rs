//! Network architectures, input configurations, training and checkpoints.

pub mod checkpoint;
pub mod network;
pub mod spec;
pub mod train;

pub use checkpoint::{Checkpoint, CheckpointMeta};
pub use network::{build_dilated_fcn, build_unet, Network, NUM_CLASSES};
pub use spec::{
    receptive_field, Architecture, DilatedFcnSpec, InputConfig, LayerGeom, NetworkSpec, UNetSpec,
    LATE_ARTERIAL_PHASE, NUM_PHASES,
};
pub use train::{train, TrainOutcome, TrainSchedule, Trainer};
