//! Trial storage, preprocessing, subject-independent splits and the
//! synthetic benchmark generator.

pub mod format;
pub mod preprocess;
pub mod split;
pub mod synth;

pub use format::{Matrix, Trial, TrialFile};
pub use preprocess::{segment, stride, zscore};
pub use split::{make_splits, partition, subject_info, Partition, Protocol, SplitManifest, SplitRun, SubjectInfo};
pub use synth::{synth_generate, SynthConfig};
