//! Training configuration, ablation switches, the AdamW training loop, and
//! checkpoints.

use std::fmt;
use std::io::Write;
use std::path::Path;
use std::str::FromStr;

use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine as _;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Tensor};
use crate::dataset::{batch_indices, SampleRecord, Split, SplitAssignment};
use crate::encoders::Vocabulary;
use crate::error::{Error, Result};
use crate::eval::{retrieval_eval, PromptSet, RetrievalScores, DEFAULT_KS};
use crate::graph::FusionMode;
use crate::model::{Model, ModelConfig};
use crate::objectives::{total_loss, BatchEmbeddings, LossBreakdown, LossWeights};
use crate::optim::{AdamW, AdamWConfig};
use crate::params::ParamStore;
use crate::prior::prior_matrix;
use crate::taxonomy::TaxonomyCatalog;

/// Which of the two contributions are active.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Ablation {
    /// Graph fusion and semantic loss.
    #[default]
    #[serde(rename = "full")]
    Full,
    /// Graph fusion only.
    Ds,
    /// Semantic loss only.
    Dg,
    /// Neither.
    Dsg,
}

impl Ablation {
    pub const ALL: [Ablation; 4] = [Ablation::Full, Ablation::Ds, Ablation::Dg, Ablation::Dsg];

    pub fn uses_graph(self) -> bool {
        matches!(self, Ablation::Full | Ablation::Ds)
    }

    pub fn uses_semantic_loss(self) -> bool {
        matches!(self, Ablation::Full | Ablation::Dg)
    }
}

impl fmt::Display for Ablation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Ablation::Full => "full",
            Ablation::Ds => "Ds",
            Ablation::Dg => "Dg",
            Ablation::Dsg => "Dsg",
        })
    }
}

impl FromStr for Ablation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().replace(['_', '+', '{', '}'], "").as_str() {
            "full" => Ok(Ablation::Full),
            "ds" => Ok(Ablation::Ds),
            "dg" => Ok(Ablation::Dg),
            "dsg" => Ok(Ablation::Dsg),
            _ => Err(Error::Validation(format!("unknown ablation {s:?} (full, Ds, Dg, Dsg)"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub lambda: f64,
    pub alpha_s: f64,
    pub tau2: f64,
    pub alpha_max: f64,
    pub fusion: FusionMode,
    pub ablation: Ablation,
    pub seed: u64,
    pub hidden: usize,
    pub dim: usize,
    pub d_embed: usize,
    pub attn_dim: usize,
    pub heads: usize,
    pub graph_layers: usize,
    /// Validation retrieval cutoff used to pick the best epoch.
    pub select_k: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        let m = ModelConfig::default();
        let o = AdamWConfig::default();
        let w = LossWeights::default();
        TrainConfig {
            epochs: 30,
            batch_size: 32,
            lr: o.lr,
            beta1: o.beta1,
            beta2: o.beta2,
            eps: o.eps,
            weight_decay: o.weight_decay,
            lambda: w.lambda,
            alpha_s: w.alpha_s,
            tau2: w.tau2,
            alpha_max: m.alpha_max,
            fusion: m.fusion,
            ablation: Ablation::Full,
            seed: 0,
            hidden: m.hidden,
            dim: m.dim,
            d_embed: m.d_embed,
            attn_dim: m.attn_dim,
            heads: m.heads,
            graph_layers: m.graph_layers,
            select_k: 10,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Validation("batch_size must be positive".into()));
        }
        if self.select_k == 0 {
            return Err(Error::Validation("select_k must be positive".into()));
        }
        self.optimizer().validate()?;
        self.loss_weights().validate()?;
        self.model_config(1).graph_config().validate()?;
        if self.hidden == 0 || self.d_embed == 0 {
            return Err(Error::Validation("hidden and d_embed must be positive".into()));
        }
        Ok(())
    }

    pub fn optimizer(&self) -> AdamWConfig {
        AdamWConfig {
            lr: self.lr,
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.eps,
            weight_decay: self.weight_decay,
        }
    }

    /// Loss weights after the ablation switch (`lambda = 0` without the semantic loss).
    pub fn loss_weights(&self) -> LossWeights {
        LossWeights {
            lambda: if self.ablation.uses_semantic_loss() { self.lambda } else { 0.0 },
            alpha_s: self.alpha_s,
            tau2: self.tau2,
        }
    }

    pub fn model_config(&self, d_in: usize) -> ModelConfig {
        ModelConfig {
            d_in,
            hidden: self.hidden,
            dim: self.dim,
            d_embed: self.d_embed,
            attn_dim: self.attn_dim,
            heads: self.heads,
            graph_layers: self.graph_layers,
            alpha_max: self.alpha_max,
            fusion: self.fusion,
            use_graph: self.ablation.uses_graph(),
        }
    }
}

/// Model parameters plus optimizer state.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelState {
    pub model: Model,
    pub optimizer: AdamW,
}

/// Vocabulary from training captions plus every prompt in the catalog.
pub fn build_vocabulary<R: AsRef<SampleRecord>>(train: &[R], catalog: &TaxonomyCatalog) -> Vocabulary {
    let prompts = PromptSet::from_catalog(catalog);
    let captions = train.iter().map(|r| r.as_ref().caption.clone());
    Vocabulary::build(captions.chain(prompts.all_texts().map(str::to_string)))
}

pub fn init_state(config: &TrainConfig, catalog: &TaxonomyCatalog, vocab: Vocabulary, d_in: usize) -> Result<ModelState> {
    config.validate()?;
    let model = Model::new(config.model_config(d_in), catalog, vocab, config.seed)?;
    let optimizer = AdamW::new(config.optimizer(), &model.params);
    Ok(ModelState { model, optimizer })
}

/// Forward, backward, and one AdamW update on `batch`.
pub fn train_step<R: AsRef<SampleRecord>>(
    state: &mut ModelState,
    batch: &[R],
    config: &TrainConfig,
    catalog: &TaxonomyCatalog,
) -> Result<LossBreakdown> {
    let weights = config.loss_weights();
    let model = &state.model;
    let mut tape = Tape::new();
    let p = model.params.bind(&mut tape, true)?;
    let f = model.forward(&mut tape, &p, batch, catalog)?;
    let emb = BatchEmbeddings::new(&mut tape, f.image, f.fused)?;
    let prior = if weights.lambda > 0.0 {
        Some(prior_matrix(batch, catalog)?)
    } else {
        None
    };
    let loss = total_loss(&mut tape, &emb, prior.as_ref(), p[model.log_tau_param()], &weights)?;
    let breakdown = loss.breakdown(&tape);
    tape.backward(loss.total)?;
    let grads = p.grads(&tape);
    for (id, g) in model.params.ids().zip(&grads) {
        if !g.is_finite() {
            return Err(Error::NonFinite {
                op: "backward",
                context: format!("gradient of parameter {:?}", model.params.name(id)),
            });
        }
    }
    state.optimizer.step(&mut state.model.params, &grads)?;
    Ok(breakdown)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochSummary {
    pub epoch: usize,
    pub steps: usize,
    pub mean_loss: LossBreakdown,
    pub val: Option<RetrievalScores>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub n_train: usize,
    pub n_val: usize,
    pub initial_val: Option<RetrievalScores>,
    pub epochs: Vec<EpochSummary>,
    /// 0 means the initial parameters were never beaten.
    pub best_epoch: usize,
    pub best_val_recall: Option<f64>,
}

impl TrainReport {
    pub fn epoch_losses(&self) -> Vec<f64> {
        self.epochs.iter().map(|e| e.mean_loss.l_total).collect()
    }
}

pub struct FitOutcome {
    pub report: TrainReport,
    /// State with the best validation recall (the final state without a validation split).
    pub best: ModelState,
    pub last: ModelState,
}

#[derive(Serialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
enum LogLine<'a> {
    Step {
        epoch: usize,
        step: usize,
        batch_size: usize,
        #[serde(flatten)]
        loss: &'a LossBreakdown,
        alpha: f64,
    },
    Epoch(&'a EpochSummary),
}

fn write_log(log: &mut Option<&mut dyn Write>, line: &LogLine<'_>) -> Result<()> {
    if let Some(w) = log.as_mut() {
        serde_json::to_writer(&mut **w, line)?;
        w.write_all(b"\n").map_err(|e| Error::io("<training log>", e))?;
    }
    Ok(())
}

fn mean_breakdown(items: &[LossBreakdown]) -> LossBreakdown {
    let n = items.len().max(1) as f64;
    let sum = |f: fn(&LossBreakdown) -> f64| items.iter().map(f).sum::<f64>() / n;
    LossBreakdown {
        l_clip: sum(|b| b.l_clip),
        l_mse: sum(|b| b.l_mse),
        l_kl: sum(|b| b.l_kl),
        l_semantic: sum(|b| b.l_semantic),
        l_total: sum(|b| b.l_total),
        tau: items.last().map_or(0.0, |b| b.tau),
    }
}

/// Trains on the train split, scoring image-to-text `R@select_k` on the
/// validation split after every epoch.
pub fn fit(
    records: &[SampleRecord],
    split: &SplitAssignment,
    config: &TrainConfig,
    catalog: &TaxonomyCatalog,
    mut log: Option<&mut dyn Write>,
) -> Result<FitOutcome> {
    config.validate()?;
    split.check_covers(records)?;
    let train = split.select(records, Split::Train);
    let val = split.select(records, Split::Val);
    if train.is_empty() {
        return Err(Error::Validation("the train split has no records".into()));
    }
    let d_in = train[0].features.len();
    let mut state = init_state(config, catalog, build_vocabulary(&train, catalog), d_in)?;
    let ks = [DEFAULT_KS[0], DEFAULT_KS[1], DEFAULT_KS[2], config.select_k];
    let mut ks = ks.to_vec();
    ks.sort_unstable();
    ks.dedup();
    let score = |m: &Model| -> Result<Option<RetrievalScores>> {
        if val.is_empty() {
            Ok(None)
        } else {
            retrieval_eval(m, &val, catalog, &ks).map(Some)
        }
    };
    let initial_val = score(&state.model)?;
    let mut best_recall = initial_val.as_ref().and_then(|s| s.i2t(config.select_k));
    let mut best_epoch = 0;
    let mut best = state.clone();
    let mut epochs = Vec::with_capacity(config.epochs);
    for epoch in 0..config.epochs {
        let mut losses = Vec::new();
        for (step, idx) in batch_indices(train.len(), config.batch_size, config.seed, epoch as u64)?
            .into_iter()
            .enumerate()
        {
            let batch: Vec<&SampleRecord> = idx.iter().map(|&i| train[i]).collect();
            let b = train_step(&mut state, &batch, config, catalog)?;
            write_log(
                &mut log,
                &LogLine::Step {
                    epoch: epoch + 1,
                    step,
                    batch_size: batch.len(),
                    loss: &b,
                    alpha: state.model.alpha(),
                },
            )?;
            losses.push(b);
        }
        let val_scores = score(&state.model)?;
        let recall = val_scores.as_ref().and_then(|s| s.i2t(config.select_k));
        let improved = match (recall, best_recall) {
            (Some(r), Some(b)) => r > b,
            (None, _) => true,
            (Some(_), None) => true,
        };
        if improved {
            best_recall = recall;
            best_epoch = epoch + 1;
            best = state.clone();
        }
        let summary = EpochSummary {
            epoch: epoch + 1,
            steps: losses.len(),
            mean_loss: mean_breakdown(&losses),
            val: val_scores,
        };
        write_log(&mut log, &LogLine::Epoch(&summary))?;
        epochs.push(summary);
    }
    Ok(FitOutcome {
        report: TrainReport {
            n_train: train.len(),
            n_val: val.len(),
            initial_val,
            epochs,
            best_epoch,
            best_val_recall: best_recall,
        },
        best,
        last: state,
    })
}

// ---- checkpoints -----------------------------------------------------------

pub const CHECKPOINT_FORMAT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TensorBlob {
    name: String,
    rows: usize,
    cols: usize,
    /// Base64 of little-endian f64 values.
    data: String,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CheckpointDoc {
    format_version: u32,
    catalog_fingerprint: String,
    config: TrainConfig,
    model: ModelConfig,
    vocabulary: Vocabulary,
    optimizer_step: u64,
    params: Vec<TensorBlob>,
    first_moments: Vec<TensorBlob>,
    second_moments: Vec<TensorBlob>,
}

fn encode_blob(name: &str, t: &Tensor) -> TensorBlob {
    let bytes: Vec<u8> = t.data().iter().flat_map(|v| v.to_le_bytes()).collect();
    TensorBlob {
        name: name.to_string(),
        rows: t.rows(),
        cols: t.cols(),
        data: B64.encode(bytes),
    }
}

fn decode_blob(blob: &TensorBlob) -> Result<Tensor> {
    let corrupt = |m: String| Error::CorruptCheckpoint(format!("tensor {:?}: {m}", blob.name));
    let bytes = B64.decode(&blob.data).map_err(|e| corrupt(e.to_string()))?;
    if bytes.len() != blob.rows * blob.cols * 8 {
        return Err(corrupt(format!(
            "{} bytes for a {}x{} tensor",
            bytes.len(),
            blob.rows,
            blob.cols
        )));
    }
    let data: Vec<f64> = bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
        .collect();
    if data.iter().any(|v| !v.is_finite()) {
        return Err(corrupt("non-finite value".into()));
    }
    Tensor::new(blob.rows, blob.cols, data)
}

fn blobs(store: &ParamStore, tensors: &[Tensor]) -> Vec<TensorBlob> {
    store.iter().zip(tensors).map(|((n, _), t)| encode_blob(n, t)).collect()
}

/// Serialises the state as a JSON document. Output is a pure function of the inputs.
pub fn checkpoint_to_string(state: &ModelState, config: &TrainConfig, catalog: &TaxonomyCatalog) -> Result<String> {
    let store = &state.model.params;
    let doc = CheckpointDoc {
        format_version: CHECKPOINT_FORMAT_VERSION,
        catalog_fingerprint: catalog.fingerprint(),
        config: *config,
        model: state.model.config,
        vocabulary: state.model.vocab.clone(),
        optimizer_step: state.optimizer.steps_taken(),
        params: blobs(store, store.values()),
        first_moments: blobs(store, state.optimizer.first_moments()),
        second_moments: blobs(store, state.optimizer.second_moments()),
    };
    let mut s = serde_json::to_string_pretty(&doc)?;
    s.push('\n');
    Ok(s)
}

pub fn save_checkpoint(state: &ModelState, config: &TrainConfig, catalog: &TaxonomyCatalog, path: &Path) -> Result<()> {
    let text = checkpoint_to_string(state, config, catalog)?;
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn checkpoint_from_str(text: &str, catalog: &TaxonomyCatalog) -> Result<(ModelState, TrainConfig)> {
    let raw: serde_json::Value =
        serde_json::from_str(text).map_err(|e| Error::CorruptCheckpoint(e.to_string()))?;
    let version = raw
        .get("format_version")
        .and_then(serde_json::Value::as_u64)
        .ok_or_else(|| Error::CorruptCheckpoint("missing format_version".into()))?;
    if version != u64::from(CHECKPOINT_FORMAT_VERSION) {
        return Err(Error::CheckpointVersion {
            found: u32::try_from(version).unwrap_or(u32::MAX),
            expected: CHECKPOINT_FORMAT_VERSION,
        });
    }
    let doc: CheckpointDoc = serde_json::from_value(raw).map_err(|e| Error::CorruptCheckpoint(e.to_string()))?;
    if doc.catalog_fingerprint != catalog.fingerprint() {
        return Err(Error::Validation(format!(
            "checkpoint was trained against taxonomy {} but the loaded catalog is {}",
            doc.catalog_fingerprint,
            catalog.fingerprint()
        )));
    }
    let mut model = Model::new(doc.model, catalog, doc.vocabulary, doc.config.seed)?;
    let decode_all = |blobs: &[TensorBlob]| -> Result<ParamStore> {
        let mut s = ParamStore::new();
        for b in blobs {
            s.add(b.name.clone(), decode_blob(b)?)?;
        }
        Ok(s)
    };
    let params = decode_all(&doc.params)?;
    model.params.load_from(&params)?;
    let mut first = model.params.clone();
    first.load_from(&decode_all(&doc.first_moments)?)?;
    let mut second = model.params.clone();
    second.load_from(&decode_all(&doc.second_moments)?)?;
    let optimizer = AdamW::from_parts(
        doc.config.optimizer(),
        first.values().to_vec(),
        second.values().to_vec(),
        doc.optimizer_step,
    );
    Ok((ModelState { model, optimizer }, doc.config))
}

pub fn load_checkpoint(path: &Path, catalog: &TaxonomyCatalog) -> Result<(ModelState, TrainConfig)> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    checkpoint_from_str(&text, catalog)
}
