//! Per-sample lesion–attribute graphs, typed message passing, attention
//! pooling, and gated residual fusion into text embeddings.

use std::fmt::Write as _;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Tensor, Var};
use crate::dataset::SampleRecord;
use crate::error::{Error, Result};
use crate::params::{glorot_uniform, Bound, ParamId, ParamStore};
use crate::taxonomy::{TaskId, TaxonomyCatalog};

pub const DEFAULT_ALPHA_MAX: f64 = 0.2;
pub const LAYER_NORM_EPS: f64 = 1e-5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct GraphNode {
    pub task: TaskId,
    pub label: usize,
}

impl GraphNode {
    pub fn vocab_index(&self, catalog: &TaxonomyCatalog) -> usize {
        catalog.vocab_offset(self.task) + self.label
    }
}

/// Bipartite graph between diagnosis nodes and attribute nodes with every
/// cross-partition edge present.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct HeteroGraph {
    pub diag_nodes: Vec<GraphNode>,
    pub attr_nodes: Vec<GraphNode>,
    pub edges: Vec<(usize, usize)>,
}

impl HeteroGraph {
    /// Builds the graph from `(task, label)` pairs. Nodes are de-duplicated and
    /// sorted, so the result does not depend on input order.
    pub fn from_labels(labels: impl IntoIterator<Item = (TaskId, usize)>) -> Self {
        let mut diag = Vec::new();
        let mut attr = Vec::new();
        for (task, label) in labels {
            let node = GraphNode { task, label };
            if task == TaskId::DIAGNOSIS {
                diag.push(node);
            } else {
                attr.push(node);
            }
        }
        for side in [&mut diag, &mut attr] {
            side.sort_unstable();
            side.dedup();
        }
        let edges = (0..diag.len())
            .flat_map(|d| (0..attr.len()).map(move |a| (d, a)))
            .collect();
        HeteroGraph {
            diag_nodes: diag,
            attr_nodes: attr,
            edges,
        }
    }

    pub fn node_count(&self) -> usize {
        self.diag_nodes.len() + self.attr_nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.node_count() == 0
    }

    /// Diagnosis nodes first, then attributes.
    pub fn nodes(&self) -> impl Iterator<Item = &GraphNode> {
        self.diag_nodes.iter().chain(&self.attr_nodes)
    }

    pub fn render_text(&self, catalog: &TaxonomyCatalog) -> String {
        let name = |n: &GraphNode| format!("{}:{}", n.task, catalog.task(n.task).label(n.label));
        let mut out = String::new();
        let _ = writeln!(
            out,
            "{} diagnosis nodes, {} attribute nodes, {} edges",
            self.diag_nodes.len(),
            self.attr_nodes.len(),
            self.edges.len()
        );
        for (i, n) in self.nodes().enumerate() {
            let kind = if i < self.diag_nodes.len() { "diag" } else { "attr" };
            let _ = writeln!(out, "node {i} {kind} {}", name(n));
        }
        for (d, a) in &self.edges {
            let _ = writeln!(out, "edge {} -- {}", name(&self.diag_nodes[*d]), name(&self.attr_nodes[*a]));
        }
        out
    }

    pub fn to_dot(&self, catalog: &TaxonomyCatalog) -> String {
        let label = |n: &GraphNode| {
            format!("{}: {}", n.task, catalog.task(n.task).label(n.label)).replace('"', "\\\"")
        };
        let mut out = String::from("graph sample {\n");
        for (i, n) in self.diag_nodes.iter().enumerate() {
            let _ = writeln!(out, "  d{i} [label=\"{}\", shape=box];", label(n));
        }
        for (i, n) in self.attr_nodes.iter().enumerate() {
            let _ = writeln!(out, "  a{i} [label=\"{}\", shape=ellipse];", label(n));
        }
        for (d, a) in &self.edges {
            let _ = writeln!(out, "  d{d} -- a{a};");
        }
        out.push_str("}\n");
        out
    }
}

pub fn build_graph(record: &SampleRecord) -> HeteroGraph {
    HeteroGraph::from_labels(
        record
            .labels
            .iter()
            .flat_map(|(t, set)| set.iter().map(move |&l| (*t, l))),
    )
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FusionMode {
    /// Attend over the pooled graph summary (a single key).
    #[default]
    Pooled,
    /// Attend over the individual node embeddings.
    Nodes,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GraphConfig {
    pub dim: usize,
    pub attn_dim: usize,
    pub heads: usize,
    pub layers: usize,
    pub alpha_max: f64,
    pub mode: FusionMode,
}

impl Default for GraphConfig {
    fn default() -> Self {
        GraphConfig {
            dim: 32,
            attn_dim: 32,
            heads: 4,
            layers: 1,
            alpha_max: DEFAULT_ALPHA_MAX,
            mode: FusionMode::Pooled,
        }
    }
}

impl GraphConfig {
    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 || self.attn_dim == 0 || self.heads == 0 {
            return Err(Error::Validation("graph dimensions and head count must be positive".into()));
        }
        if !self.dim.is_multiple_of(self.heads) {
            return Err(Error::Validation(format!(
                "head count {} does not divide embedding dim {}",
                self.heads, self.dim
            )));
        }
        if !(self.alpha_max > 0.0 && self.alpha_max.is_finite()) {
            return Err(Error::Validation(format!("alpha_max must be positive, got {}", self.alpha_max)));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
struct MessageLayer {
    self_diag: ParamId,
    self_attr: ParamId,
    diag_to_attr: ParamId,
    attr_to_diag: ParamId,
}

/// Node table, message-passing, pooling, fusion and gate parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct GraphEncoder {
    pub config: GraphConfig,
    embed: ParamId,
    layers: Vec<MessageLayer>,
    pool_proj: ParamId,
    pool_score: ParamId,
    query: ParamId,
    key_value: ParamId,
    output: ParamId,
    gate: ParamId,
    ln_gain: ParamId,
    ln_bias: ParamId,
}

/// What the fusion step attends over for one sample.
#[derive(Clone, Copy, Debug)]
pub enum FusionContext {
    Empty,
    Graph { nodes: Var, pooled: Var },
}

impl GraphEncoder {
    pub fn register(
        store: &mut ParamStore,
        rng: &mut impl Rng,
        config: GraphConfig,
        catalog: &TaxonomyCatalog,
    ) -> Result<Self> {
        config.validate()?;
        let d = config.dim;
        let embed = store.add("graph.embed", glorot_uniform(rng, catalog.vocab_size(), d))?;
        let mut layers = Vec::with_capacity(config.layers);
        for l in 0..config.layers {
            layers.push(MessageLayer {
                self_diag: store.add(format!("graph.l{l}.self_diag"), glorot_uniform(rng, d, d))?,
                self_attr: store.add(format!("graph.l{l}.self_attr"), glorot_uniform(rng, d, d))?,
                diag_to_attr: store.add(format!("graph.l{l}.diag_to_attr"), glorot_uniform(rng, d, d))?,
                attr_to_diag: store.add(format!("graph.l{l}.attr_to_diag"), glorot_uniform(rng, d, d))?,
            });
        }
        Ok(GraphEncoder {
            config,
            embed,
            layers,
            pool_proj: store.add("graph.pool_proj", glorot_uniform(rng, d, config.attn_dim))?,
            pool_score: store.add("graph.pool_score", glorot_uniform(rng, config.attn_dim, 1))?,
            query: store.add("fusion.query", glorot_uniform(rng, d, d))?,
            key_value: store.add("fusion.key_value", glorot_uniform(rng, d, d))?,
            output: store.add("fusion.output", glorot_uniform(rng, d, d))?,
            gate: store.add("fusion.gate", Tensor::scalar(0.0))?,
            ln_gain: store.add("fusion.ln_gain", Tensor::filled(1, d, 1.0))?,
            ln_bias: store.add("fusion.ln_bias", Tensor::zeros(1, d))?,
        })
    }

    pub fn gate_param(&self) -> ParamId {
        self.gate
    }

    pub fn embed_param(&self) -> ParamId {
        self.embed
    }

    pub fn pool_score_param(&self) -> ParamId {
        self.pool_score
    }

    pub fn fusion_params(&self) -> [ParamId; 6] {
        [self.query, self.key_value, self.output, self.gate, self.ln_gain, self.ln_bias]
    }

    /// Gate strength `alpha_max * sigmoid(gate)` for a raw gate value.
    pub fn alpha(&self, gate: f64) -> f64 {
        self.config.alpha_max * crate::autodiff::sigmoid(gate)
    }

    /// Node embeddings after message passing, diagnosis rows first.
    /// Returns `None` for an empty graph.
    pub fn encode_nodes(
        &self,
        tape: &mut Tape,
        p: &Bound,
        graph: &HeteroGraph,
        catalog: &TaxonomyCatalog,
    ) -> Result<Option<Var>> {
        if graph.is_empty() {
            return Ok(None);
        }
        let idx: Vec<usize> = graph.nodes().map(|n| n.vocab_index(catalog)).collect();
        let n_diag = graph.diag_nodes.len();
        let n_attr = graph.attr_nodes.len();
        let mut z = tape.gather_rows(p[self.embed], &idx)?;
        for layer in &self.layers {
            z = if n_diag == 0 || n_attr == 0 {
                let w = if n_diag > 0 { layer.self_diag } else { layer.self_attr };
                let pre = tape.matmul(z, p[w])?;
                tape.tanh(pre)?
            } else {
                let diag: Vec<usize> = (0..n_diag).collect();
                let attr: Vec<usize> = (n_diag..n_diag + n_attr).collect();
                let e_d = tape.gather_rows(z, &diag)?;
                let e_p = tape.gather_rows(z, &attr)?;
                let z_d = self.typed_update(tape, e_d, e_p, p[layer.self_diag], p[layer.attr_to_diag])?;
                let z_p = self.typed_update(tape, e_p, e_d, p[layer.self_attr], p[layer.diag_to_attr])?;
                tape.concat_rows(&[z_d, z_p])?
            };
        }
        Ok(Some(z))
    }

    /// `tanh(own · W_self + mean(other · W_rel))` with the mean broadcast over rows.
    fn typed_update(&self, tape: &mut Tape, own: Var, other: Var, w_self: Var, w_rel: Var) -> Result<Var> {
        let s = tape.matmul(own, w_self)?;
        let m = tape.matmul(other, w_rel)?;
        let m = tape.mean_rows(m)?;
        let pre = tape.add_row(s, m)?;
        tape.tanh(pre)
    }

    /// Softmax attention weights over nodes (`1 x n`) and the pooled summary (`1 x D`).
    pub fn attention_pool(&self, tape: &mut Tape, p: &Bound, nodes: Var) -> Result<(Var, Var)> {
        let h = tape.matmul(nodes, p[self.pool_proj])?;
        let h = tape.tanh(h)?;
        let scores = tape.matmul(h, p[self.pool_score])?;
        let scores = tape.transpose(scores)?;
        let weights = tape.row_softmax(scores)?;
        let pooled = tape.matmul(weights, nodes)?;
        Ok((weights, pooled))
    }

    pub fn context(
        &self,
        tape: &mut Tape,
        p: &Bound,
        graph: &HeteroGraph,
        catalog: &TaxonomyCatalog,
    ) -> Result<FusionContext> {
        match self.encode_nodes(tape, p, graph, catalog)? {
            None => Ok(FusionContext::Empty),
            Some(nodes) => {
                let (_, pooled) = self.attention_pool(tape, p, nodes)?;
                Ok(FusionContext::Graph { nodes, pooled })
            }
        }
    }

    /// Attended graph value `h` (`1 x D`) for one text row, or `None` for an empty graph.
    pub fn attend(&self, tape: &mut Tape, p: &Bound, text: Var, ctx: FusionContext) -> Result<Option<Var>> {
        let (nodes, pooled) = match ctx {
            FusionContext::Empty => return Ok(None),
            FusionContext::Graph { nodes, pooled } => (nodes, pooled),
        };
        let d = self.config.dim;
        if tape.value(text).shape() != (1, d) {
            return Err(Error::dim("fuse", format!("text row must be 1x{d}, got {:?}", tape.value(text).shape())));
        }
        let heads_out = match self.config.mode {
            // A single key gets softmax weight 1 in every head, so the head
            // outputs are the projected summary itself.
            FusionMode::Pooled => tape.matmul(pooled, p[self.key_value])?,
            FusionMode::Nodes => {
                let q = tape.matmul(text, p[self.query])?;
                let kv = tape.matmul(nodes, p[self.key_value])?;
                let dh = d / self.config.heads;
                let scale = 1.0 / (dh as f64).sqrt();
                let mut outs = Vec::with_capacity(self.config.heads);
                for h in 0..self.config.heads {
                    let q_h = tape.slice_cols(q, h * dh, dh)?;
                    let kv_h = tape.slice_cols(kv, h * dh, dh)?;
                    let kt = tape.transpose(kv_h)?;
                    let s = tape.matmul(q_h, kt)?;
                    let s = tape.scale(s, scale)?;
                    let a = tape.row_softmax(s)?;
                    outs.push(tape.matmul(a, kv_h)?);
                }
                tape.concat_cols(&outs)?
            }
        };
        Ok(Some(tape.matmul(heads_out, p[self.output])?))
    }

    /// `LN(t + alpha * tanh(h))` row-wise; rows with `None` context reduce to `LN(t)`.
    pub fn fuse_rows(&self, tape: &mut Tape, p: &Bound, text: Var, attended: &[Option<Var>]) -> Result<Var> {
        let (rows, d) = tape.value(text).shape();
        if attended.len() != rows {
            return Err(Error::dim("fuse", format!("{} text rows, {} graph contexts", rows, attended.len())));
        }
        if attended.iter().all(Option::is_none) {
            return self.normalize(tape, p, text);
        }
        let zero = tape.constant(Tensor::zeros(1, d))?;
        let parts: Vec<Var> = attended.iter().map(|h| h.unwrap_or(zero)).collect();
        let h = tape.concat_rows(&parts)?;
        let h = tape.tanh(h)?;
        let alpha = tape.sigmoid(p[self.gate])?;
        let alpha = tape.scale(alpha, self.config.alpha_max)?;
        let gated = tape.mul_scalar(h, alpha)?;
        let sum = tape.add(text, gated)?;
        self.normalize(tape, p, sum)
    }

    /// The fusion bypass: layer norm alone.
    pub fn normalize(&self, tape: &mut Tape, p: &Bound, text: Var) -> Result<Var> {
        tape.layer_norm(text, p[self.ln_gain], p[self.ln_bias], LAYER_NORM_EPS)
    }

    /// Single-sample fusion.
    pub fn fuse(&self, tape: &mut Tape, p: &Bound, text: Var, ctx: FusionContext) -> Result<Var> {
        let h = self.attend(tape, p, text, ctx)?;
        self.fuse_rows(tape, p, text, &[h])
    }

    /// Enhances a `B x D` block of text rows with their graphs.
    pub fn enhance(
        &self,
        tape: &mut Tape,
        p: &Bound,
        text: Var,
        graphs: &[&HeteroGraph],
        catalog: &TaxonomyCatalog,
    ) -> Result<Var> {
        let mut attended = Vec::with_capacity(graphs.len());
        for (i, g) in graphs.iter().enumerate() {
            let ctx = self.context(tape, p, g, catalog)?;
            let h = match ctx {
                FusionContext::Empty => None,
                _ => {
                    let row = tape.gather_rows(text, &[i])?;
                    self.attend(tape, p, row, ctx)?
                }
            };
            attended.push(h);
        }
        self.fuse_rows(tape, p, text, &attended)
    }
}
