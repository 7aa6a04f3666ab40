//! Story-to-keyframe pipeline: domain model, reference memory, keyframe
//! engine, shot tuner, metrics, benchmarks and clip expansion, all against a
//! pluggable model-backend protocol.

pub mod asset;
pub mod backend;
pub mod benchmark;
pub mod director;
pub mod engine;
pub mod eval;
pub mod memory;
pub mod mock;
pub mod project_io;
pub mod protocol;
pub mod story;
pub mod tensor;
pub mod tuner;
pub mod video;
