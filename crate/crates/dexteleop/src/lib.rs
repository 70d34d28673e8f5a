//! Desk-scale teleoperation data-collection stack: kinematic hand models,
//! hand-pose retargeting, timestamp synchronization validation, a simulated
//! recorder/environment layer, and a checksummed episode store, all driven by
//! the `dexteleop` CLI.

pub mod cli;
pub mod collection;
pub mod kinematics;
pub mod retarget;
pub mod store;
pub mod timesync;
pub mod trajectory;
