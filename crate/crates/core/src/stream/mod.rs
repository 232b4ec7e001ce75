//! Datasets and disjoint / blurry / i-blurry stream schedules.

pub mod dataset;
pub mod schedule;

pub use dataset::{
    load_csv_dataset, load_csv_dataset_with, make_synthetic, make_synthetic_split, read_binary_dataset,
    write_binary_dataset, Dataset, Sample, Split, Standardizer,
};
pub use schedule::{build_schedule, Setup, StreamConfig, StreamSchedule};
