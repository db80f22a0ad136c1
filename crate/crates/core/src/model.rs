//! The dual encoder with graph-enhanced text: parameters, forward pass, and
//! frozen inference helpers.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Tensor, Var};
use crate::dataset::SampleRecord;
use crate::encoders::{ImageEncoder, TextEncoder, Vocabulary};
use crate::error::{Error, Result};
use crate::graph::{build_graph, FusionMode, GraphConfig, GraphEncoder, HeteroGraph};
use crate::objectives::INITIAL_TEMPERATURE;
use crate::params::{Bound, ParamId, ParamStore};
use crate::taxonomy::TaxonomyCatalog;

/// Records per tape when embedding without gradients.
const INFERENCE_CHUNK: usize = 256;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub d_in: usize,
    pub hidden: usize,
    pub dim: usize,
    pub d_embed: usize,
    pub attn_dim: usize,
    pub heads: usize,
    pub graph_layers: usize,
    pub alpha_max: f64,
    pub fusion: FusionMode,
    /// Whether text embeddings are enhanced with the sample graph.
    pub use_graph: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            d_in: 32,
            hidden: 64,
            dim: 32,
            d_embed: 32,
            attn_dim: 32,
            heads: 4,
            graph_layers: 1,
            alpha_max: crate::graph::DEFAULT_ALPHA_MAX,
            fusion: FusionMode::Pooled,
            use_graph: true,
        }
    }
}

impl ModelConfig {
    pub fn graph_config(&self) -> GraphConfig {
        GraphConfig {
            dim: self.dim,
            attn_dim: self.attn_dim,
            heads: self.heads,
            layers: self.graph_layers,
            alpha_max: self.alpha_max,
            mode: self.fusion,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub vocab: Vocabulary,
    pub params: ParamStore,
    pub image: ImageEncoder,
    pub text: TextEncoder,
    pub graph: GraphEncoder,
    log_tau: ParamId,
}

/// Tape handles for one forward pass.
#[derive(Clone, Copy, Debug)]
pub struct ForwardVars {
    pub image: Var,
    pub text: Var,
    pub fused: Var,
}

/// Un-normalised embeddings for a record list, one row per record.
#[derive(Clone, Debug, PartialEq)]
pub struct Embeddings {
    pub image: Tensor,
    pub text: Tensor,
    pub fused: Tensor,
}

impl Model {
    /// Glorot-uniform weights, zero biases, `tau = 0.07`, gate 0, unit layer-norm gain.
    pub fn new(config: ModelConfig, catalog: &TaxonomyCatalog, vocab: Vocabulary, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(u64::MAX);
        let mut params = ParamStore::new();
        let image = ImageEncoder::register(&mut params, &mut rng, config.d_in, config.hidden, config.dim)?;
        let text = TextEncoder::register(&mut params, &mut rng, vocab.len(), config.d_embed, config.dim)?;
        let graph = GraphEncoder::register(&mut params, &mut rng, config.graph_config(), catalog)?;
        let log_tau = params.add("log_tau", Tensor::scalar(INITIAL_TEMPERATURE.ln()))?;
        Ok(Model {
            config,
            vocab,
            params,
            image,
            text,
            graph,
            log_tau,
        })
    }

    pub fn log_tau_param(&self) -> ParamId {
        self.log_tau
    }

    pub fn tau(&self) -> f64 {
        self.params.get(self.log_tau).item().exp().max(crate::objectives::MIN_TEMPERATURE)
    }

    pub fn alpha(&self) -> f64 {
        self.graph.alpha(self.params.get(self.graph.gate_param()).item())
    }

    pub fn token_bags<S: AsRef<str>>(&self, texts: &[S]) -> Vec<Vec<usize>> {
        texts.iter().map(|t| self.vocab.tokenize(t.as_ref())).collect()
    }

    /// Image rows, raw text rows, and fused text rows for a batch.
    pub fn forward<R: AsRef<SampleRecord>>(
        &self,
        tape: &mut Tape,
        p: &Bound,
        batch: &[R],
        catalog: &TaxonomyCatalog,
    ) -> Result<ForwardVars> {
        if batch.is_empty() {
            return Err(Error::InvalidArgument("forward needs a non-empty batch".into()));
        }
        let features: Vec<&[f64]> = batch.iter().map(|r| r.as_ref().features.as_slice()).collect();
        let image = self.image.encode(tape, p, &features)?;
        let captions: Vec<&str> = batch.iter().map(|r| r.as_ref().caption.as_str()).collect();
        let text = self.text.forward(tape, p, &self.token_bags(&captions))?;
        let fused = if self.config.use_graph {
            let graphs: Vec<HeteroGraph> = batch.iter().map(|r| build_graph(r.as_ref())).collect();
            let refs: Vec<&HeteroGraph> = graphs.iter().collect();
            self.graph.enhance(tape, p, text, &refs, catalog)?
        } else {
            self.graph.normalize(tape, p, text)?
        };
        Ok(ForwardVars { image, text, fused })
    }

    /// Embeds records without recording gradients.
    pub fn embed<R: AsRef<SampleRecord>>(&self, records: &[R], catalog: &TaxonomyCatalog) -> Result<Embeddings> {
        let d = self.config.dim;
        let mut image = Vec::with_capacity(records.len() * d);
        let mut text = Vec::with_capacity(records.len() * d);
        let mut fused = Vec::with_capacity(records.len() * d);
        for chunk in records.chunks(INFERENCE_CHUNK) {
            let mut tape = Tape::new();
            let p = self.params.bind(&mut tape, false)?;
            let f = self.forward(&mut tape, &p, chunk, catalog)?;
            image.extend_from_slice(tape.value(f.image).data());
            text.extend_from_slice(tape.value(f.text).data());
            fused.extend_from_slice(tape.value(f.fused).data());
        }
        let n = records.len();
        Ok(Embeddings {
            image: Tensor::new(n, d, image)?,
            text: Tensor::new(n, d, text)?,
            fused: Tensor::new(n, d, fused)?,
        })
    }

    /// Embeds free text through the fusion bypass (no graph).
    pub fn embed_texts<S: AsRef<str>>(&self, texts: &[S]) -> Result<Tensor> {
        let mut tape = Tape::new();
        let p = self.params.bind(&mut tape, false)?;
        let t = self.text.forward(&mut tape, &p, &self.token_bags(texts))?;
        let fused = self.graph.normalize(&mut tape, &p, t)?;
        Ok(tape.value(fused).clone())
    }

    /// Embeds texts, each enhanced with its own graph.
    pub fn embed_texts_with_graphs<S: AsRef<str>>(
        &self,
        texts: &[S],
        graphs: &[HeteroGraph],
        catalog: &TaxonomyCatalog,
    ) -> Result<Tensor> {
        let mut tape = Tape::new();
        let p = self.params.bind(&mut tape, false)?;
        let t = self.text.forward(&mut tape, &p, &self.token_bags(texts))?;
        let refs: Vec<&HeteroGraph> = graphs.iter().collect();
        let fused = self.graph.enhance(&mut tape, &p, t, &refs, catalog)?;
        Ok(tape.value(fused).clone())
    }
}
