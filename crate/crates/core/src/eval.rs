//! Zero-shot classification, retrieval, linear probing, and metric reports.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Tensor};
use crate::dataset::{batch_indices, SampleRecord};
use crate::error::{Error, Result};
use crate::model::Model;
use crate::optim::{AdamW, AdamWConfig};
use crate::params::{glorot_uniform, ParamStore};
use crate::taxonomy::{TaskId, TaxonomyCatalog};

pub const DEFAULT_KS: [usize; 3] = [5, 10, 50];

/// One prompt per label for every task.
#[derive(Clone, Debug, PartialEq)]
pub struct PromptSet {
    prompts: BTreeMap<TaskId, Vec<String>>,
}

impl PromptSet {
    pub fn from_catalog(catalog: &TaxonomyCatalog) -> Self {
        PromptSet {
            prompts: catalog.tasks().iter().map(|t| (t.id(), t.prompts().to_vec())).collect(),
        }
    }

    pub fn task(&self, task: TaskId) -> &[String] {
        self.prompts.get(&task).map_or(&[], Vec::as_slice)
    }

    pub fn all_texts(&self) -> impl Iterator<Item = &str> {
        self.prompts.values().flatten().map(String::as_str)
    }
}

/// Copy of `t` with every row scaled to unit length (zero rows stay zero).
pub fn normalize_rows(t: &Tensor) -> Tensor {
    let mut out = t.clone();
    for r in 0..out.rows() {
        let row = out.row_mut(r);
        let n = row.iter().map(|v| v * v).sum::<f64>().sqrt();
        if n > 0.0 {
            row.iter_mut().for_each(|v| *v /= n);
        }
    }
    out
}

/// Index of the largest value; ties go to the lowest index.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in values.iter().enumerate().skip(1) {
        if *v > values[best] {
            best = i;
        }
    }
    best
}

/// Nearest prompt by cosine for each image row.
pub fn zero_shot_predict(images: &Tensor, prompts: &Tensor) -> Result<Vec<usize>> {
    let sims = normalize_rows(images).matmul_t(&normalize_rows(prompts))?;
    Ok((0..sims.rows()).map(|i| argmax(sims.row(i))).collect())
}

/// Mean over classes present in the truth of the fraction of their instances
/// predicted as that class.
pub fn macro_recall(predictions: &[usize], truths: &[&BTreeSet<usize>], n_classes: usize) -> f64 {
    let mut support = vec![0usize; n_classes];
    let mut hits = vec![0usize; n_classes];
    for (pred, truth) in predictions.iter().zip(truths) {
        for &c in truth.iter().filter(|&&c| c < n_classes) {
            support[c] += 1;
            if *pred == c {
                hits[c] += 1;
            }
        }
    }
    let present: Vec<f64> = support
        .iter()
        .zip(&hits)
        .filter(|(s, _)| **s > 0)
        .map(|(s, h)| *h as f64 / *s as f64)
        .collect();
    if present.is_empty() {
        0.0
    } else {
        present.iter().sum::<f64>() / present.len() as f64
    }
}

/// Fraction of predictions contained in their truth set.
pub fn accuracy(predictions: &[usize], truths: &[&BTreeSet<usize>]) -> f64 {
    if predictions.is_empty() {
        return 0.0;
    }
    let correct = predictions.iter().zip(truths).filter(|(p, t)| t.contains(p)).count();
    correct as f64 / predictions.len() as f64
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskMetrics {
    pub task: TaskId,
    pub name: String,
    pub n_evaluated: usize,
    pub skipped: bool,
    pub accuracy: f64,
    pub macro_recall: f64,
}

impl TaskMetrics {
    fn skipped(task: TaskId, name: &str) -> Self {
        TaskMetrics {
            task,
            name: name.to_string(),
            n_evaluated: 0,
            skipped: true,
            accuracy: 0.0,
            macro_recall: 0.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ZeroShotResult {
    /// Prediction per input record; `None` where the record has no label for the task.
    pub predictions: Vec<Option<usize>>,
    pub metrics: TaskMetrics,
}

fn task_metrics(
    task: TaskId,
    catalog: &TaxonomyCatalog,
    preds: &[usize],
    truths: &[&BTreeSet<usize>],
) -> TaskMetrics {
    let t = catalog.task(task);
    if preds.is_empty() {
        return TaskMetrics::skipped(task, t.name());
    }
    TaskMetrics {
        task,
        name: t.name().to_string(),
        n_evaluated: preds.len(),
        skipped: false,
        accuracy: accuracy(preds, truths),
        macro_recall: macro_recall(preds, truths, t.len()),
    }
}

/// Zero-shot prediction from precomputed image embeddings and prompt embeddings.
pub fn zero_shot_from_embeddings<R: AsRef<SampleRecord>>(
    images: &Tensor,
    prompt_embeddings: &Tensor,
    records: &[R],
    task: TaskId,
    catalog: &TaxonomyCatalog,
) -> Result<ZeroShotResult> {
    let all = zero_shot_predict(images, prompt_embeddings)?;
    let mut predictions = Vec::with_capacity(records.len());
    let mut preds = Vec::new();
    let mut truths = Vec::new();
    for (r, p) in records.iter().zip(all) {
        match r.as_ref().labels_for(task) {
            Some(truth) => {
                predictions.push(Some(p));
                preds.push(p);
                truths.push(truth);
            }
            None => predictions.push(None),
        }
    }
    Ok(ZeroShotResult {
        predictions,
        metrics: task_metrics(task, catalog, &preds, &truths),
    })
}

pub fn zero_shot_classify<R: AsRef<SampleRecord>>(
    model: &Model,
    records: &[R],
    prompts: &PromptSet,
    task: TaskId,
    catalog: &TaxonomyCatalog,
) -> Result<ZeroShotResult> {
    if records.is_empty() {
        return Ok(ZeroShotResult {
            predictions: vec![],
            metrics: TaskMetrics::skipped(task, catalog.task(task).name()),
        });
    }
    let emb = model.embed(records, catalog)?;
    let p = model.embed_texts(prompts.task(task))?;
    zero_shot_from_embeddings(&emb.image, &p, records, task, catalog)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RecallAtK {
    pub k: usize,
    pub i2t: f64,
    pub t2i: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RetrievalScores {
    pub n: usize,
    pub recall: Vec<RecallAtK>,
}

impl RetrievalScores {
    pub fn i2t(&self, k: usize) -> Option<f64> {
        self.recall.iter().find(|r| r.k == k).map(|r| r.i2t)
    }

    pub fn t2i(&self, k: usize) -> Option<f64> {
        self.recall.iter().find(|r| r.k == k).map(|r| r.t2i)
    }
}

/// Fraction of query rows whose paired gallery row (same index) ranks within
/// the top `k` by cosine; ties rank the lower index first.
pub fn recall_at_k(queries: &Tensor, gallery: &Tensor, k: usize) -> Result<f64> {
    Ok(recall_at_ks(queries, gallery, &[k])?[0])
}

fn recall_at_ks(queries: &Tensor, gallery: &Tensor, ks: &[usize]) -> Result<Vec<f64>> {
    let n = queries.rows();
    if n == 0 {
        return Err(Error::InvalidArgument("retrieval needs at least one pair".into()));
    }
    if gallery.rows() != n {
        return Err(Error::dim("retrieval", format!("{n} queries vs {} gallery rows", gallery.rows())));
    }
    let sims = normalize_rows(queries).matmul_t(&normalize_rows(gallery))?;
    let mut hits = vec![0usize; ks.len()];
    for i in 0..n {
        let row = sims.row(i);
        let target = row[i];
        let rank = row
            .iter()
            .enumerate()
            .filter(|(j, s)| **s > target || (**s == target && *j < i))
            .count();
        for (h, k) in hits.iter_mut().zip(ks) {
            if rank < *k {
                *h += 1;
            }
        }
    }
    Ok(hits.iter().map(|h| *h as f64 / n as f64).collect())
}

pub fn retrieval_from_embeddings(images: &Tensor, texts: &Tensor, ks: &[usize]) -> Result<RetrievalScores> {
    let i2t = recall_at_ks(images, texts, ks)?;
    let t2i = recall_at_ks(texts, images, ks)?;
    Ok(RetrievalScores {
        n: images.rows(),
        recall: ks
            .iter()
            .zip(i2t.into_iter().zip(t2i))
            .map(|(&k, (i2t, t2i))| RecallAtK { k, i2t, t2i })
            .collect(),
    })
}

/// Image-to-text and text-to-image R@K over the records' own pairs, using the
/// model's full text pipeline.
pub fn retrieval_eval<R: AsRef<SampleRecord>>(
    model: &Model,
    records: &[R],
    catalog: &TaxonomyCatalog,
    ks: &[usize],
) -> Result<RetrievalScores> {
    if records.is_empty() {
        return Err(Error::InvalidArgument("retrieval needs at least one record".into()));
    }
    let emb = model.embed(records, catalog)?;
    retrieval_from_embeddings(&emb.image, &emb.fused, ks)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ProbeConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub seed: u64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        ProbeConfig {
            epochs: 100,
            batch_size: 64,
            lr: 1e-2,
            seed: 0,
        }
    }
}

/// Trains a softmax classifier on fixed features (first truth label per
/// training row) and scores it on the evaluation rows.
pub fn probe_embeddings(
    train_x: &Tensor,
    train_y: &[usize],
    eval_x: &Tensor,
    eval_truth: &[&BTreeSet<usize>],
    n_classes: usize,
    cfg: &ProbeConfig,
) -> Result<(Vec<usize>, f64, f64)> {
    if train_x.rows() != train_y.len() || eval_x.rows() != eval_truth.len() || train_x.cols() != eval_x.cols() {
        return Err(Error::dim("linear_probe", "feature rows and labels disagree".to_string()));
    }
    if train_y.is_empty() {
        return Err(Error::InvalidArgument("linear probe needs training rows".into()));
    }
    let d = train_x.cols();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut store = ParamStore::new();
    let w = store.add("probe.w", glorot_uniform(&mut rng, d, n_classes))?;
    let b = store.add("probe.b", Tensor::zeros(1, n_classes))?;
    let mut opt = AdamW::new(
        AdamWConfig {
            lr: cfg.lr,
            ..AdamWConfig::default()
        },
        &store,
    );
    for epoch in 0..cfg.epochs {
        for batch in batch_indices(train_y.len(), cfg.batch_size, cfg.seed, epoch as u64)? {
            let mut xs = Vec::with_capacity(batch.len() * d);
            let mut onehot = Tensor::zeros(batch.len(), n_classes);
            for (r, &i) in batch.iter().enumerate() {
                xs.extend_from_slice(train_x.row(i));
                onehot.set(r, train_y[i], 1.0);
            }
            let mut tape = Tape::new();
            let p = store.bind(&mut tape, true)?;
            let x = tape.constant(Tensor::new(batch.len(), d, xs)?)?;
            let logits = tape.matmul(x, p[w])?;
            let logits = tape.add_row(logits, p[b])?;
            let logp = tape.log_softmax_rows(logits)?;
            let y = tape.constant(onehot)?;
            let picked = tape.mul(logp, y)?;
            let total = tape.sum(picked)?;
            let loss = tape.scale(total, -1.0 / batch.len() as f64)?;
            tape.backward(loss)?;
            opt.step(&mut store, &p.grads(&tape))?;
        }
    }
    let scores = eval_x.matmul(store.get(w))?;
    let bias = store.get(b).data();
    let preds: Vec<usize> = (0..scores.rows())
        .map(|i| {
            let row: Vec<f64> = scores.row(i).iter().zip(bias).map(|(s, b)| s + b).collect();
            argmax(&row)
        })
        .collect();
    let acc = accuracy(&preds, eval_truth);
    let rec = macro_recall(&preds, eval_truth, n_classes);
    Ok((preds, acc, rec))
}

/// Linear probe on frozen image embeddings for one task.
pub fn linear_probe<R: AsRef<SampleRecord>>(
    model: &Model,
    train: &[R],
    eval: &[R],
    task: TaskId,
    catalog: &TaxonomyCatalog,
    cfg: &ProbeConfig,
) -> Result<TaskMetrics> {
    let labelled = |rs: &[R]| -> Vec<usize> {
        (0..rs.len()).filter(|&i| rs[i].as_ref().labels_for(task).is_some()).collect()
    };
    let train_idx = labelled(train);
    if train_idx.is_empty() {
        return Err(Error::Validation(format!("task {task} has no labels in the probe training records")));
    }
    let eval_idx = labelled(eval);
    let name = catalog.task(task).name();
    if eval_idx.is_empty() {
        return Ok(TaskMetrics::skipped(task, name));
    }
    let pick = |rs: &[R], idx: &[usize]| -> Vec<SampleRecord> { idx.iter().map(|&i| rs[i].as_ref().clone()).collect() };
    let train_recs = pick(train, &train_idx);
    let eval_recs = pick(eval, &eval_idx);
    let train_x = model.embed(&train_recs, catalog)?.image;
    let eval_x = model.embed(&eval_recs, catalog)?.image;
    let train_y: Vec<usize> = train_recs
        .iter()
        .map(|r| *r.labels_for(task).and_then(|s| s.iter().next()).expect("filtered"))
        .collect();
    let truths: Vec<&BTreeSet<usize>> = eval_recs.iter().map(|r| r.labels_for(task).expect("filtered")).collect();
    let (_, acc, rec) = probe_embeddings(
        &normalize_rows(&train_x),
        &train_y,
        &normalize_rows(&eval_x),
        &truths,
        catalog.task(task).len(),
        cfg,
    )?;
    Ok(TaskMetrics {
        task,
        name: name.to_string(),
        n_evaluated: eval_idx.len(),
        skipped: false,
        accuracy: acc,
        macro_recall: rec,
    })
}

pub const REPORT_FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MetricReport {
    pub format_version: u32,
    pub n_records: usize,
    pub zero_shot: Vec<TaskMetrics>,
    pub retrieval: RetrievalScores,
}

impl MetricReport {
    pub fn average_accuracy(&self) -> Option<f64> {
        let done: Vec<f64> = self.zero_shot.iter().filter(|t| !t.skipped).map(|t| t.accuracy).collect();
        (!done.is_empty()).then(|| done.iter().sum::<f64>() / done.len() as f64)
    }

    pub fn skipped_tasks(&self) -> Vec<TaskId> {
        self.zero_shot.iter().filter(|t| t.skipped).map(|t| t.task).collect()
    }

    pub fn to_json(&self) -> Result<String> {
        let mut s = serde_json::to_string_pretty(self)?;
        s.push('\n');
        Ok(s)
    }

    /// Aligned text tables: per-task zero-shot scores, then retrieval.
    pub fn render_table(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "Zero-shot classification ({} records)", self.n_records);
        let _ = writeln!(out, "{:<5} {:<40} {:>6} {:>8} {:>8}", "task", "name", "n", "acc", "recall");
        for t in &self.zero_shot {
            if t.skipped {
                let _ = writeln!(out, "{:<5} {:<40} {:>6} {:>8} {:>8}", t.task, t.name, 0, "skipped", "-");
            } else {
                let _ = writeln!(
                    out,
                    "{:<5} {:<40} {:>6} {:>8.4} {:>8.4}",
                    t.task, t.name, t.n_evaluated, t.accuracy, t.macro_recall
                );
            }
        }
        if let Some(avg) = self.average_accuracy() {
            let _ = writeln!(out, "{:<5} {:<40} {:>6} {:>8.4}", "avg", "", "", avg);
        }
        let _ = writeln!(out);
        let _ = writeln!(out, "Retrieval (n = {})", self.retrieval.n);
        let _ = writeln!(out, "{:<6} {:>8} {:>8}", "", "I2T", "T2I");
        for r in &self.retrieval.recall {
            let _ = writeln!(out, "{:<6} {:>8.4} {:>8.4}", format!("R@{}", r.k), r.i2t, r.t2i);
        }
        out
    }
}

/// Zero-shot metrics for every task plus retrieval at `ks`.
pub fn evaluate<R: AsRef<SampleRecord>>(
    model: &Model,
    records: &[R],
    catalog: &TaxonomyCatalog,
    ks: &[usize],
) -> Result<MetricReport> {
    if records.is_empty() {
        return Err(Error::InvalidArgument("evaluation needs at least one record".into()));
    }
    let emb = model.embed(records, catalog)?;
    let prompts = PromptSet::from_catalog(catalog);
    let mut zero_shot = Vec::with_capacity(TaskId::COUNT);
    for task in TaskId::all() {
        let p = model.embed_texts(prompts.task(task))?;
        zero_shot.push(zero_shot_from_embeddings(&emb.image, &p, records, task, catalog)?.metrics);
    }
    Ok(MetricReport {
        format_version: REPORT_FORMAT_VERSION,
        n_records: records.len(),
        zero_shot,
        retrieval: retrieval_from_embeddings(&emb.image, &emb.fused, ks)?,
    })
}

/// CSV with ids, diagnosis labels, and the image, raw text, and fused text embeddings.
pub fn export_embeddings<R: AsRef<SampleRecord>>(
    model: &Model,
    records: &[R],
    catalog: &TaxonomyCatalog,
    path: &Path,
) -> Result<()> {
    let emb = model.embed(records, catalog)?;
    let d = model.config.dim;
    let mut w = csv::Writer::from_path(path).map_err(|e| match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::io(path, io),
        other => Error::Validation(format!("{other:?}")),
    })?;
    let mut header = vec!["image_id".to_string(), "case_id".to_string(), "diagnosis".to_string()];
    for prefix in ["image", "text", "fused"] {
        header.extend((0..d).map(|i| format!("{prefix}_{i}")));
    }
    w.write_record(&header)?;
    let diag = catalog.task(TaskId::DIAGNOSIS);
    for (i, r) in records.iter().enumerate() {
        let r = r.as_ref();
        let labels = r
            .labels_for(TaskId::DIAGNOSIS)
            .map(|s| s.iter().map(|&l| diag.label(l)).collect::<Vec<_>>().join(";"))
            .unwrap_or_default();
        let mut row = vec![r.image_id.clone(), r.case_id.clone(), labels];
        for t in [&emb.image, &emb.text, &emb.fused] {
            row.extend(t.row(i).iter().map(|v| format!("{v:.16e}")));
        }
        w.write_record(&row)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}
