//! Fixtures shared by the benchmarks.

use sono_align::autodiff::Tensor;
use sono_align::dataset::{generate_synthetic, SampleRecord, SynthConfig};
use sono_align::taxonomy::{default_catalog, TaxonomyCatalog};
use sono_align::trainer::{build_vocabulary, init_state};
use sono_align::{ModelState, TrainConfig};

/// Deterministic dense matrix with entries in `[-1, 1]`.
pub fn dense(rows: usize, cols: usize, salt: f64) -> Tensor {
    let data = (0..rows * cols).map(|i| (i as f64 * 0.618 + salt).sin()).collect();
    Tensor::new(rows, cols, data).expect("shape matches data")
}

pub struct TrainFixture {
    pub catalog: TaxonomyCatalog,
    pub records: Vec<SampleRecord>,
    pub config: TrainConfig,
    pub state: ModelState,
}

/// The default synthetic corpus with a freshly initialised model.
pub fn train_fixture(n_cases: usize) -> TrainFixture {
    let catalog = default_catalog();
    let synth = SynthConfig {
        n_cases,
        ..SynthConfig::default()
    };
    let records = generate_synthetic(&catalog, &synth).expect("valid synthetic config");
    let config = TrainConfig::default();
    let vocab = build_vocabulary(&records, &catalog);
    let state = init_state(&config, &catalog, vocab, synth.d_in).expect("valid train config");
    TrainFixture {
        catalog,
        records,
        config,
        state,
    }
}
