//! File exchange formats: NPY tensors, Middlebury `.flo` flow, PNG
//! masks/frames, and the JSON run configuration. See `docs/formats.md`
//! for the byte-level contracts.

pub mod config;
pub mod flo;
pub mod npy;
pub mod png;

pub use config::{CodecSpec, PredictorSpec, ResolvedWindows, RunConfig, ScheduleConfig, ScheduleKind};
pub use flo::{read_flo, write_flo};
pub use npy::{read_tensor, write_tensor, write_tensor_as, NpyDtype};
