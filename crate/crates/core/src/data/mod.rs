//! Volumes, on-disk format, breath-hold averaging, normalization and slicing.

pub mod dataset;
pub mod io;
pub mod preprocess;
pub mod volume;

pub use dataset::{extract_slices, load_cases, split_dataset, Case, DatasetSplit, SliceSample, SplitCounts};
pub use io::{read_mask, read_probability, read_series, read_volume, write_mask, write_probability, write_series, Volume};
pub use preprocess::{average_breath_holds, normalize, percentile, BreathHoldGrouping, NormalizationParams};
pub use volume::{BinaryMask3D, ProbabilityMap, VolumeSeries};
