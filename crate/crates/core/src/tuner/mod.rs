//! Shot-type prefix tuning: the prefix table, the dataset pipeline and the
//! optimizer loop.

pub mod dataset;
pub mod optim;
pub mod prefix;

pub use dataset::{build_shot_dataset, load_pairs, DatasetBuild, DatasetError, DatasetParams, Rejection, ShotPair};
pub use optim::{tune, BackendObjective, Optimizer, QuadraticObjective, TuneError, TuneObjective, TuneOutcome, TuneParams};
pub use prefix::{init_prefix_table, load_table, save_table, PrefixError, ShotPrefixTable, TrainingMeta};
