//! Image–text records, JSONL I/O, case-level splitting, a label-conditioned
//! synthetic corpus, and seeded mini-batching.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::taxonomy::{TaskId, TaxonomyCatalog};

/// Per-task label index sets. Tasks without labels are absent.
pub type LabelSets = BTreeMap<TaskId, BTreeSet<usize>>;

#[derive(Clone, Debug, PartialEq)]
pub struct SampleRecord {
    pub case_id: String,
    pub image_id: String,
    pub features: Vec<f64>,
    pub caption: String,
    pub labels: LabelSets,
}

impl SampleRecord {
    pub fn labels_for(&self, task: TaskId) -> Option<&BTreeSet<usize>> {
        self.labels.get(&task).filter(|s| !s.is_empty())
    }

    pub fn has_any_label(&self) -> bool {
        self.labels.values().any(|s| !s.is_empty())
    }
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RecordLine {
    case_id: String,
    image_id: String,
    features: Vec<f64>,
    caption: String,
    #[serde(default)]
    labels: BTreeMap<TaskId, Vec<String>>,
}

fn parse_line(line: &str, catalog: &TaxonomyCatalog) -> std::result::Result<SampleRecord, String> {
    let raw: RecordLine = serde_json::from_str(line).map_err(|e| e.to_string())?;
    if raw.case_id.trim().is_empty() {
        return Err("case_id must be non-empty".into());
    }
    let mut labels = LabelSets::new();
    for (task, names) in raw.labels {
        let idx = catalog.resolve_labels(task, &names).map_err(|e| e.to_string())?;
        if !idx.is_empty() {
            labels.insert(task, idx.into_iter().collect());
        }
    }
    Ok(SampleRecord {
        case_id: raw.case_id,
        image_id: raw.image_id,
        features: raw.features,
        caption: raw.caption,
        labels,
    })
}

/// Reads records from JSONL text. Blank lines are skipped; errors carry the
/// 1-based line number.
pub fn read_jsonl(reader: impl BufRead, catalog: &TaxonomyCatalog) -> Result<Vec<SampleRecord>> {
    let mut records: Vec<SampleRecord> = Vec::new();
    let mut first_dim: Option<(usize, usize)> = None;
    for (i, line) in reader.lines().enumerate() {
        let line_no = i + 1;
        let line = line.map_err(|e| Error::Record {
            line: line_no,
            message: e.to_string(),
        })?;
        if line.trim().is_empty() {
            continue;
        }
        let record = parse_line(&line, catalog).map_err(|message| Error::Record {
            line: line_no,
            message,
        })?;
        match first_dim {
            None => first_dim = Some((record.features.len(), line_no)),
            Some((d, at)) if d != record.features.len() => {
                return Err(Error::Record {
                    line: line_no,
                    message: format!(
                        "features has {} values, but line {at} has {d}",
                        record.features.len()
                    ),
                })
            }
            _ => {}
        }
        records.push(record);
    }
    Ok(records)
}

pub fn load_jsonl(path: &Path, catalog: &TaxonomyCatalog) -> Result<Vec<SampleRecord>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    read_jsonl(BufReader::new(file), catalog)
}

pub fn write_jsonl(mut writer: impl Write, records: &[SampleRecord], catalog: &TaxonomyCatalog) -> Result<()> {
    for r in records {
        let labels = r
            .labels
            .iter()
            .filter(|(_, s)| !s.is_empty())
            .map(|(t, s)| {
                let task = catalog.task(*t);
                (*t, s.iter().map(|&i| task.label(i).to_string()).collect())
            })
            .collect();
        let line = RecordLine {
            case_id: r.case_id.clone(),
            image_id: r.image_id.clone(),
            features: r.features.clone(),
            caption: r.caption.clone(),
            labels,
        };
        serde_json::to_writer(&mut writer, &line)?;
        writer.write_all(b"\n").map_err(|e| Error::io("<jsonl>", e))?;
    }
    Ok(())
}

pub fn save_jsonl(path: &Path, records: &[SampleRecord], catalog: &TaxonomyCatalog) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    write_jsonl(&mut w, records, catalog)?;
    w.flush().map_err(|e| Error::io(path, e))
}

// ---- case-level splits -----------------------------------------------------

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        })
    }
}

impl std::str::FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_lowercase().as_str() {
            "train" => Ok(Split::Train),
            "val" | "validation" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(Error::Validation(format!("unknown split {other:?} (train, val, test)"))),
        }
    }
}

pub const DEFAULT_RATIOS: [f64; 3] = [0.6, 0.2, 0.2];

/// Mapping from case id to its partition.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct SplitAssignment {
    cases: BTreeMap<String, Split>,
}

impl SplitAssignment {
    pub fn get(&self, case_id: &str) -> Option<Split> {
        self.cases.get(case_id).copied()
    }

    pub fn len(&self) -> usize {
        self.cases.len()
    }

    pub fn is_empty(&self) -> bool {
        self.cases.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, Split)> {
        self.cases.iter().map(|(k, v)| (k.as_str(), *v))
    }

    /// Number of cases in train, val, test.
    pub fn counts(&self) -> [usize; 3] {
        let mut c = [0; 3];
        for s in self.cases.values() {
            c[*s as usize] += 1;
        }
        c
    }

    /// Records whose case belongs to `split`, in input order.
    pub fn select<'a>(&self, records: &'a [SampleRecord], split: Split) -> Vec<&'a SampleRecord> {
        records
            .iter()
            .filter(|r| self.get(&r.case_id) == Some(split))
            .collect()
    }

    /// Errors if any record's case is missing from the assignment.
    pub fn check_covers(&self, records: &[SampleRecord]) -> Result<()> {
        match records.iter().find(|r| !self.cases.contains_key(&r.case_id)) {
            Some(r) => Err(Error::Validation(format!(
                "case {:?} (image {:?}) has no split assignment",
                r.case_id, r.image_id
            ))),
            None => Ok(()),
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut text = serde_json::to_string_pretty(self)?;
        text.push('\n');
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }
}

fn validate_ratios(ratios: [f64; 3]) -> Result<()> {
    if ratios.iter().any(|r| !(r.is_finite() && *r > 0.0)) {
        return Err(Error::Validation(format!("ratios must all be positive, got {ratios:?}")));
    }
    let total: f64 = ratios.iter().sum();
    if (total - 1.0).abs() > 1e-9 {
        return Err(Error::Validation(format!("ratios must sum to 1, got {ratios:?} (sum {total})")));
    }
    Ok(())
}

fn ceil_tolerant(x: f64) -> usize {
    (x - 1e-9 * x.max(1.0)).ceil().max(0.0) as usize
}

/// Partition sizes for `n` cases: validation is carved out first with
/// `ceil(n * r_val)`, then test takes `ceil` of its share of the remainder and
/// train keeps the rest. 11,676 cases at 6:2:2 give 7,005 / 2,336 / 2,335.
pub fn split_sizes(n: usize, ratios: [f64; 3]) -> Result<[usize; 3]> {
    validate_ratios(ratios)?;
    let [r_train, r_val, r_test] = ratios;
    let n_val = ceil_tolerant(n as f64 * r_val).min(n);
    let rest = n - n_val;
    let n_test = ceil_tolerant(rest as f64 * r_test / (r_train + r_test)).min(rest);
    let sizes = [rest - n_test, n_val, n_test];
    if let Some(i) = sizes.iter().position(|&s| s == 0) {
        return Err(Error::Validation(format!(
            "{n} cases with ratios {ratios:?} leave the {} split empty",
            Split::ALL[i]
        )));
    }
    Ok(sizes)
}

/// Deterministic case-level split. Case ids are de-duplicated and sorted before
/// a seeded shuffle, so the result does not depend on input order.
pub fn split_cases<S: AsRef<str>>(case_ids: &[S], ratios: [f64; 3], seed: u64) -> Result<SplitAssignment> {
    validate_ratios(ratios)?;
    let unique: BTreeSet<&str> = case_ids.iter().map(AsRef::as_ref).collect();
    if unique.len() < 3 {
        return Err(Error::Validation(format!(
            "need at least 3 cases to split, got {}",
            unique.len()
        )));
    }
    let mut ids: Vec<&str> = unique.into_iter().collect();
    let sizes = split_sizes(ids.len(), ratios)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    ids.shuffle(&mut rng);
    let mut cases = BTreeMap::new();
    let mut it = ids.into_iter();
    for (split, size) in Split::ALL.into_iter().zip(sizes) {
        for id in it.by_ref().take(size) {
            cases.insert(id.to_string(), split);
        }
    }
    Ok(SplitAssignment { cases })
}

/// Splits the cases present in `records`.
pub fn split_records(records: &[SampleRecord], ratios: [f64; 3], seed: u64) -> Result<SplitAssignment> {
    let ids: Vec<&str> = records.iter().map(|r| r.case_id.as_str()).collect();
    split_cases(&ids, ratios, seed)
}

// ---- synthetic corpus ------------------------------------------------------

/// Attribute-label weights conditioned on the diagnosis: diagnosis label ->
/// task (`T4`..`T9`) -> one non-negative weight per label. Missing entries are uniform.
pub type CooccurrenceWeights = BTreeMap<String, BTreeMap<TaskId, Vec<f64>>>;

fn default_cooccurrence() -> CooccurrenceWeights {
    let table: [(&str, [&[f64]; 6]); 4] = [
        (
            "nodule",
            [
                &[2.0, 3.0, 1.0, 0.2, 3.0, 0.2, 1.5],
                &[2.0, 1.5],
                &[0.2, 3.0, 1.5, 1.5, 1.0],
                &[0.5, 2.0, 0.2, 3.0, 0.8],
                &[0.5, 1.5],
                &[1.0, 2.0, 1.0, 2.0, 0.8],
            ],
        ),
        (
            "cyst",
            [
                &[3.0, 3.0, 1.0, 0.2, 0.5, 0.3, 0.3],
                &[4.0, 0.5],
                &[4.0, 0.5, 0.2, 0.2, 0.5],
                &[3.0, 0.3, 2.0, 0.2, 0.8],
                &[4.0, 0.3],
                &[0.5, 0.5, 4.0, 0.2, 0.5],
            ],
        ),
        (
            "mass",
            [
                &[0.5, 1.0, 2.0, 0.2, 0.8, 0.2, 3.0],
                &[0.8, 3.0],
                &[0.3, 2.5, 1.0, 1.0, 2.5],
                &[0.5, 1.5, 0.3, 3.0, 2.0],
                &[0.7, 2.5],
                &[0.5, 1.0, 0.5, 3.0, 2.0],
            ],
        ),
        (
            "fluid collection",
            [
                &[0.5, 1.0, 1.0, 2.0, 0.2, 2.0, 2.0],
                &[1.5, 2.0],
                &[3.0, 1.5, 0.3, 0.3, 1.5],
                &[2.0, 0.2, 1.5, 0.3, 0.8],
                &[3.0, 0.3],
                &[0.5, 0.5, 3.0, 0.3, 1.0],
            ],
        ),
    ];
    table
        .iter()
        .map(|(diag, rows)| {
            let per_task = ATTRIBUTE_TASKS
                .iter()
                .zip(rows.iter())
                .map(|(t, w)| (*t, w.to_vec()))
                .collect();
            (diag.to_string(), per_task)
        })
        .collect()
}

const ATTRIBUTE_TASKS: [TaskId; 6] = [
    TaskId::SHAPE,
    TaskId::MARGINS,
    TaskId::ECHOGENICITY,
    TaskId::INTERNAL,
    TaskId::POSTERIOR,
    TaskId::VASCULARITY,
];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthConfig {
    pub n_cases: usize,
    /// Inclusive range of images drawn per case.
    pub images_per_case: [usize; 2],
    pub d_in: usize,
    pub noise_sigma: f64,
    pub seed: u64,
    /// Probability that a case carries a second, distinct diagnosis.
    pub second_diagnosis_prob: f64,
    /// Probability that each attribute task (`T4`..`T9`) is annotated for a case.
    pub attribute_presence: f64,
    pub cooccurrence: CooccurrenceWeights,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            n_cases: 200,
            images_per_case: [8, 12],
            d_in: 32,
            noise_sigma: 0.3,
            seed: 7,
            second_diagnosis_prob: 0.1,
            attribute_presence: 0.85,
            cooccurrence: default_cooccurrence(),
        }
    }
}

impl SynthConfig {
    pub fn validate(&self, catalog: &TaxonomyCatalog) -> Result<()> {
        let fail = |m: String| Err(Error::Validation(m));
        if self.n_cases < 3 {
            return fail(format!("n_cases must be at least 3, got {}", self.n_cases));
        }
        let [lo, hi] = self.images_per_case;
        if lo == 0 || lo > hi {
            return fail(format!("images_per_case must be 1 <= lo <= hi, got [{lo}, {hi}]"));
        }
        if self.d_in == 0 {
            return fail("d_in must be positive".into());
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return fail(format!("noise_sigma must be >= 0, got {}", self.noise_sigma));
        }
        for (name, p) in [
            ("second_diagnosis_prob", self.second_diagnosis_prob),
            ("attribute_presence", self.attribute_presence),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return fail(format!("{name} must lie in [0, 1], got {p}"));
            }
        }
        let diag = catalog.task(TaskId::DIAGNOSIS);
        for (label, per_task) in &self.cooccurrence {
            if diag.index_of(label).is_none() {
                return fail(format!("cooccurrence: {label:?} is not a diagnosis label"));
            }
            for (task, w) in per_task {
                if !ATTRIBUTE_TASKS.contains(task) {
                    return fail(format!("cooccurrence[{label:?}]: {task} is not an attribute task"));
                }
                if w.len() != catalog.task(*task).len() {
                    return fail(format!(
                        "cooccurrence[{label:?}][{task}]: {} weights for {} labels",
                        w.len(),
                        catalog.task(*task).len()
                    ));
                }
                if w.iter().any(|x| !(x.is_finite() && *x >= 0.0)) || w.iter().sum::<f64>() <= 0.0 {
                    return fail(format!(
                        "cooccurrence[{label:?}][{task}]: weights must be non-negative with a positive sum"
                    ));
                }
            }
        }
        Ok(())
    }
}

fn draw_weighted(rng: &mut ChaCha8Rng, weights: &[f64]) -> usize {
    let total: f64 = weights.iter().sum();
    let mut u = rng.random::<f64>() * total;
    for (i, w) in weights.iter().enumerate() {
        if u < *w {
            return i;
        }
        u -= w;
    }
    weights.iter().rposition(|w| *w > 0.0).unwrap_or(0)
}

/// Unit-norm Gaussian prototype for every entry of the joint vocabulary.
pub fn label_prototypes(catalog: &TaxonomyCatalog, d_in: usize, seed: u64) -> Vec<Vec<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(1);
    (0..catalog.vocab_size())
        .map(|_| {
            let mut v: Vec<f64> = (0..d_in).map(|_| StandardNormal.sample(&mut rng)).collect();
            let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            v.iter_mut().for_each(|x| *x /= n);
            v
        })
        .collect()
}

/// Deterministic caption for a label assignment.
pub fn render_caption(catalog: &TaxonomyCatalog, labels: &LabelSets) -> String {
    let words = |task: TaskId| -> Option<String> {
        labels.get(&task).filter(|s| !s.is_empty()).map(|s| {
            let t = catalog.task(task);
            s.iter()
                .map(|&i| t.label(i).to_lowercase())
                .collect::<Vec<_>>()
                .join(" and ")
        })
    };
    let mut caption = String::from("a");
    for task in [TaskId::SHAPE, TaskId::ECHOGENICITY, TaskId::DIAGNOSIS] {
        if let Some(w) = words(task) {
            caption.push(' ');
            caption.push_str(&w);
        }
    }
    if let Some(m) = words(TaskId::MARGINS) {
        caption.push_str(&format!(" with {m} margins"));
    }
    if let Some(o) = words(TaskId::ORGAN) {
        caption.push_str(&format!(" in the {o}"));
    }
    if let Some(i) = words(TaskId::INTERNAL) {
        caption.push_str(&format!(" showing {i}"));
    }
    if let Some(p) = words(TaskId::POSTERIOR) {
        caption.push_str(&format!(", posterior acoustic {p}"));
    }
    if let Some(v) = words(TaskId::VASCULARITY) {
        caption.push_str(&format!(", {v}"));
    }
    caption
}

/// Generates a labelled corpus whose image features are sums of per-label
/// prototypes plus Gaussian noise. Pure function of `(catalog, cfg)`.
pub fn generate_synthetic(catalog: &TaxonomyCatalog, cfg: &SynthConfig) -> Result<Vec<SampleRecord>> {
    cfg.validate(catalog)?;
    let prototypes = label_prototypes(catalog, cfg.d_in, cfg.seed);
    let noise = Normal::new(0.0, cfg.noise_sigma).map_err(|e| Error::InvalidArgument(e.to_string()))?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let diag = catalog.task(TaskId::DIAGNOSIS);
    let n_systems = catalog.task(TaskId::SYSTEM).len();
    let mut records = Vec::new();
    for case in 0..cfg.n_cases {
        let mut labels = LabelSets::new();
        let system = rng.random_range(0..n_systems);
        let organs: Vec<usize> = catalog.organs_of(system).collect();
        let organ = organs[rng.random_range(0..organs.len())];
        labels.insert(TaskId::SYSTEM, BTreeSet::from([system]));
        labels.insert(TaskId::ORGAN, BTreeSet::from([organ]));

        let primary = rng.random_range(0..diag.len());
        let mut diagnoses = BTreeSet::from([primary]);
        if rng.random::<f64>() < cfg.second_diagnosis_prob {
            let other = (primary + rng.random_range(1..diag.len())) % diag.len();
            diagnoses.insert(other);
        }
        labels.insert(TaskId::DIAGNOSIS, diagnoses);

        let weights = cfg.cooccurrence.get(diag.label(primary));
        for task in ATTRIBUTE_TASKS {
            if rng.random::<f64>() >= cfg.attribute_presence {
                continue;
            }
            let n = catalog.task(task).len();
            let uniform = vec![1.0; n];
            let w = weights.and_then(|m| m.get(&task)).unwrap_or(&uniform);
            labels.insert(task, BTreeSet::from([draw_weighted(&mut rng, w)]));
        }

        let mut clean = vec![0.0; cfg.d_in];
        for (task, set) in &labels {
            let offset = catalog.vocab_offset(*task);
            for &i in set {
                for (c, p) in clean.iter_mut().zip(&prototypes[offset + i]) {
                    *c += p;
                }
            }
        }
        let caption = render_caption(catalog, &labels);
        let case_id = format!("case{case:05}");
        let n_images = rng.random_range(cfg.images_per_case[0]..=cfg.images_per_case[1]);
        for img in 0..n_images {
            let features = clean
                .iter()
                .map(|c| {
                    if cfg.noise_sigma > 0.0 {
                        c + noise.sample(&mut rng)
                    } else {
                        *c
                    }
                })
                .collect();
            records.push(SampleRecord {
                case_id: case_id.clone(),
                image_id: format!("{case_id}_img{img:02}"),
                features,
                caption: caption.clone(),
                labels: labels.clone(),
            });
        }
    }
    Ok(records)
}

// ---- batching --------------------------------------------------------------

/// Per-epoch shuffled index batches keyed by `(seed, epoch)`; the final short batch is kept.
pub fn batch_indices(n: usize, batch_size: usize, seed: u64, epoch: u64) -> Result<Vec<Vec<usize>>> {
    if batch_size == 0 {
        return Err(Error::InvalidArgument("batch size must be at least 1".into()));
    }
    if n == 0 {
        return Err(Error::InvalidArgument("cannot batch an empty record list".into()));
    }
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch);
    order.shuffle(&mut rng);
    Ok(order.chunks(batch_size).map(<[usize]>::to_vec).collect())
}

pub fn batch_iter<'a, R: AsRef<SampleRecord>>(
    records: &'a [R],
    batch_size: usize,
    seed: u64,
    epoch: u64,
) -> Result<impl Iterator<Item = Vec<&'a SampleRecord>> + 'a> {
    let batches = batch_indices(records.len(), batch_size, seed, epoch)?;
    Ok(batches
        .into_iter()
        .map(move |b| b.into_iter().map(|i| records[i].as_ref()).collect()))
}

impl AsRef<SampleRecord> for SampleRecord {
    fn as_ref(&self) -> &SampleRecord {
        self
    }
}
