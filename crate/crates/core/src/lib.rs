pub mod autodiff;
pub mod dataset;
pub mod encoders;
pub mod error;
pub mod eval;
pub mod graph;
pub mod model;
pub mod objectives;
pub mod optim;
pub mod params;
pub mod prior;
pub mod taxonomy;
pub mod trainer;

pub use dataset::{SampleRecord, Split, SplitAssignment};
pub use error::{Error, ErrorKind, Result};
pub use eval::MetricReport;
pub use model::{Model, ModelConfig};
pub use prior::PriorMatrix;
pub use taxonomy::{TaskId, TaxonomyCatalog};
pub use trainer::{Ablation, ModelState, TrainConfig};
