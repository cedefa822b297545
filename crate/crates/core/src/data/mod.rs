//! Dataset ingestion, splitting, synthetic generation and descriptive statistics.
//!
//! Input CSV layout: a header row naming the feature columns, a `label`
//! column and an optional `subject` column. Other layouts are mapped with
//! [`CsvSchema`].

mod dataset;
mod split;
mod stats;
mod synthetic;

pub use dataset::{load_csv, write_csv, write_records, CsvSchema, FeatureDataset};
pub use split::{split, Split, SplitMode, SplitSpec, Standardizer};
pub use stats::{class_correlation, class_stats, write_class_counts, write_correlation};
pub use synthetic::{synthetic_gaussians, ImbalanceProfile, SyntheticSpec};
