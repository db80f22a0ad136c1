//! Anatomy tree and the nine closed diagnostic vocabularies, each with a
//! label-similarity table.

use std::collections::HashMap;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

const DEFAULT_CATALOG: &str = include_str!("../resources/catalog.json");
pub const CATALOG_FORMAT_VERSION: u32 = 1;

/// Default partial credit between distinct organs of the same body system.
pub const DEFAULT_SYSTEM_SIMILARITY: f64 = 0.5;

/// Identifier of one of the nine diagnostic dimensions, `T1` through `T9`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct TaskId(u8);

impl TaskId {
    pub const SYSTEM: TaskId = TaskId(1);
    pub const ORGAN: TaskId = TaskId(2);
    pub const DIAGNOSIS: TaskId = TaskId(3);
    pub const SHAPE: TaskId = TaskId(4);
    pub const MARGINS: TaskId = TaskId(5);
    pub const ECHOGENICITY: TaskId = TaskId(6);
    pub const INTERNAL: TaskId = TaskId(7);
    pub const POSTERIOR: TaskId = TaskId(8);
    pub const VASCULARITY: TaskId = TaskId(9);

    pub const COUNT: usize = 9;

    pub fn new(number: u8) -> Result<Self> {
        if (1..=Self::COUNT as u8).contains(&number) {
            Ok(TaskId(number))
        } else {
            Err(Error::Validation(format!("task number {number} is outside T1..T9")))
        }
    }

    pub fn all() -> impl Iterator<Item = TaskId> {
        (1..=Self::COUNT as u8).map(TaskId)
    }

    pub fn number(self) -> u8 {
        self.0
    }

    /// Zero-based position in the task list.
    pub fn index(self) -> usize {
        self.0 as usize - 1
    }
}

impl fmt::Display for TaskId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "T{}", self.0)
    }
}

impl FromStr for TaskId {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        let digits = s.strip_prefix(['T', 't']).unwrap_or(s);
        let n: u8 = digits
            .parse()
            .map_err(|_| Error::Validation(format!("invalid task id {s:?}")))?;
        TaskId::new(n)
    }
}

impl TryFrom<String> for TaskId {
    type Error = Error;

    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<TaskId> for String {
    fn from(t: TaskId) -> String {
        t.to_string()
    }
}

/// Lower-cased, trimmed form used for label identity.
pub fn normalize_label(raw: &str) -> String {
    raw.trim().to_lowercase()
}

/// Symmetric `L x L` label-similarity matrix with unit diagonal and entries in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct SimTable {
    size: usize,
    values: Vec<f64>,
}

impl SimTable {
    pub fn identity(size: usize) -> Self {
        let mut values = vec![0.0; size * size];
        for i in 0..size {
            values[i * size + i] = 1.0;
        }
        SimTable { size, values }
    }

    /// Validates and symmetrises a square matrix. `task` only labels errors.
    pub fn from_rows(task: &str, rows: &[Vec<f64>]) -> Result<Self> {
        let size = rows.len();
        let cell = |row, col, reason: &str| Error::SimTable {
            task: task.to_string(),
            row,
            col,
            reason: reason.to_string(),
        };
        for (i, r) in rows.iter().enumerate() {
            if r.len() != size {
                return Err(cell(i, r.len(), &format!("row has {} entries, expected {size}", r.len())));
            }
        }
        for i in 0..size {
            for j in 0..size {
                let v = rows[i][j];
                if i == j {
                    if v != 1.0 {
                        return Err(cell(i, j, &format!("is {v}, diagonal must be exactly 1")));
                    }
                } else if !(0.0..=1.0).contains(&v) {
                    return Err(cell(i, j, &format!("is {v}, outside [0, 1]")));
                } else if (v - rows[j][i]).abs() > 1e-9 {
                    return Err(cell(i, j, &format!("is {v} but ({j}, {i}) is {}: not symmetric", rows[j][i])));
                }
            }
        }
        let mut values = vec![0.0; size * size];
        for i in 0..size {
            for j in 0..size {
                values[i * size + j] = if i == j {
                    1.0
                } else {
                    0.5 * (rows[i][j] + rows[j][i])
                };
            }
        }
        Ok(SimTable { size, values })
    }

    pub fn size(&self) -> usize {
        self.size
    }

    #[inline]
    pub fn get(&self, a: usize, b: usize) -> f64 {
        self.values[a * self.size + b]
    }

    pub fn to_rows(&self) -> Vec<Vec<f64>> {
        self.values.chunks(self.size.max(1)).map(<[f64]>::to_vec).collect()
    }

    pub fn is_identity(&self) -> bool {
        *self == SimTable::identity(self.size)
    }
}

/// One closed diagnostic vocabulary.
#[derive(Clone, Debug)]
pub struct TaskVocabulary {
    id: TaskId,
    name: String,
    labels: Vec<String>,
    prompts: Vec<String>,
    similarity: SimTable,
    lookup: HashMap<String, usize>,
}

impl TaskVocabulary {
    fn new(id: TaskId, name: String, entries: Vec<(String, String)>) -> Result<Self> {
        if entries.is_empty() {
            return Err(Error::Validation(format!("{id}: empty vocabulary")));
        }
        let mut lookup = HashMap::new();
        let mut labels = Vec::with_capacity(entries.len());
        let mut prompts = Vec::with_capacity(entries.len());
        for (i, (label, prompt)) in entries.into_iter().enumerate() {
            let label = normalize_label(&label);
            if label.is_empty() {
                return Err(Error::Validation(format!("{id}: empty label at position {i}")));
            }
            if lookup.insert(label.clone(), i).is_some() {
                return Err(Error::Validation(format!("{id}: duplicate label {label:?}")));
            }
            labels.push(label);
            prompts.push(prompt);
        }
        let similarity = SimTable::identity(labels.len());
        Ok(TaskVocabulary {
            id,
            name,
            labels,
            prompts,
            similarity,
            lookup,
        })
    }

    pub fn id(&self) -> TaskId {
        self.id
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn labels(&self) -> &[String] {
        &self.labels
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn label(&self, index: usize) -> &str {
        &self.labels[index]
    }

    /// Zero-shot prompt text for each label, in vocabulary order.
    pub fn prompts(&self) -> &[String] {
        &self.prompts
    }

    pub fn similarity(&self) -> &SimTable {
        &self.similarity
    }

    pub fn index_of(&self, raw: &str) -> Option<usize> {
        self.lookup.get(&normalize_label(raw)).copied()
    }

    fn resolve(&self, raw: &str) -> Result<usize> {
        self.index_of(raw).ok_or_else(|| Error::UnknownLabel {
            task: self.id.to_string(),
            label: raw.to_string(),
            candidates: self.labels.clone(),
        })
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Organ {
    pub name: String,
    pub system: usize,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct CatalogDoc {
    format_version: u32,
    name: String,
    systems: Vec<SystemDoc>,
    tasks: Vec<TaskDoc>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct SystemDoc {
    name: String,
    organs: Vec<String>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct TaskDoc {
    task: TaskId,
    name: String,
    labels: Vec<LabelDoc>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct LabelDoc {
    label: String,
    prompt: String,
}

/// On-disk similarity override: `{"task": "T3", "labels": [...], "matrix": [[...]]}`.
#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimTableFile {
    pub task: TaskId,
    pub labels: Vec<String>,
    pub matrix: Vec<Vec<f64>>,
}

/// The anatomy tree (systems and organs) plus the nine task vocabularies.
#[derive(Clone, Debug)]
pub struct TaxonomyCatalog {
    name: String,
    systems: Vec<String>,
    organs: Vec<Organ>,
    tasks: Vec<TaskVocabulary>,
}

impl TaxonomyCatalog {
    pub fn from_json(text: &str) -> Result<Self> {
        let doc: CatalogDoc = serde_json::from_str(text)?;
        if doc.format_version != CATALOG_FORMAT_VERSION {
            return Err(Error::Validation(format!(
                "catalog format_version {} is not supported (expected {CATALOG_FORMAT_VERSION})",
                doc.format_version
            )));
        }
        let systems: Vec<String> = doc.systems.iter().map(|s| s.name.clone()).collect();
        let organs: Vec<Organ> = doc
            .systems
            .iter()
            .enumerate()
            .flat_map(|(i, s)| {
                s.organs.iter().map(move |o| Organ {
                    name: o.clone(),
                    system: i,
                })
            })
            .collect();
        if doc.tasks.len() != TaskId::COUNT {
            return Err(Error::Validation(format!(
                "catalog must define exactly {} tasks, found {}",
                TaskId::COUNT,
                doc.tasks.len()
            )));
        }
        let mut tasks = Vec::with_capacity(TaskId::COUNT);
        for (i, t) in doc.tasks.into_iter().enumerate() {
            if t.task.index() != i {
                return Err(Error::Validation(format!("task {} listed at position {}", t.task, i + 1)));
            }
            let entries = t.labels.into_iter().map(|l| (l.label, l.prompt)).collect();
            tasks.push(TaskVocabulary::new(t.task, t.name, entries)?);
        }
        let expect = |task: &TaskVocabulary, names: Vec<&String>| -> Result<()> {
            let normalized: Vec<String> = names.iter().map(|n| normalize_label(n)).collect();
            if task.labels != normalized {
                return Err(Error::Validation(format!(
                    "{} vocabulary does not match the anatomy tree",
                    task.id
                )));
            }
            Ok(())
        };
        expect(&tasks[0], systems.iter().collect())?;
        expect(&tasks[1], organs.iter().map(|o| &o.name).collect())?;
        Ok(TaxonomyCatalog {
            name: doc.name,
            systems,
            organs,
            tasks,
        })
    }

    pub fn from_path(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    /// Body-system display names (the `T1` vocabulary before normalisation).
    pub fn systems(&self) -> &[String] {
        &self.systems
    }

    pub fn organs(&self) -> &[Organ] {
        &self.organs
    }

    /// Parent system index of an organ index.
    pub fn organ_parent(&self, organ: usize) -> usize {
        self.organs[organ].system
    }

    pub fn organs_of(&self, system: usize) -> impl Iterator<Item = usize> + '_ {
        self.organs
            .iter()
            .enumerate()
            .filter(move |(_, o)| o.system == system)
            .map(|(i, _)| i)
    }

    pub fn tasks(&self) -> &[TaskVocabulary] {
        &self.tasks
    }

    pub fn task(&self, id: TaskId) -> &TaskVocabulary {
        &self.tasks[id.index()]
    }

    /// Resolves raw label strings against a closed vocabulary. Duplicates are
    /// collapsed; the first occurrence keeps its position.
    pub fn resolve_labels<S: AsRef<str>>(&self, task: TaskId, raw: &[S]) -> Result<Vec<usize>> {
        let t = self.task(task);
        let mut out = Vec::with_capacity(raw.len());
        for r in raw {
            let idx = t.resolve(r.as_ref())?;
            if !out.contains(&idx) {
                out.push(idx);
            }
        }
        Ok(out)
    }

    /// Total size of the joint vocabulary across all nine tasks.
    pub fn vocab_size(&self) -> usize {
        self.tasks.iter().map(TaskVocabulary::len).sum()
    }

    /// Position of a task's first label in the joint vocabulary.
    pub fn vocab_offset(&self, task: TaskId) -> usize {
        self.tasks[..task.index()].iter().map(TaskVocabulary::len).sum()
    }

    pub fn set_similarity(&mut self, task: TaskId, table: SimTable) -> Result<()> {
        let t = &mut self.tasks[task.index()];
        if table.size() != t.len() {
            return Err(Error::Validation(format!(
                "{task}: similarity table is {0}x{0}, vocabulary has {1} labels",
                table.size(),
                t.len()
            )));
        }
        t.similarity = table;
        Ok(())
    }

    /// Parses a similarity override and checks it against this catalog.
    pub fn parse_sim_table(&self, task: TaskId, text: &str) -> Result<SimTable> {
        let file: SimTableFile = serde_json::from_str(text)?;
        if file.task != task {
            return Err(Error::Validation(format!(
                "similarity file is for {}, expected {task}",
                file.task
            )));
        }
        let vocab = self.task(task);
        let labels: Vec<String> = file.labels.iter().map(|l| normalize_label(l)).collect();
        if labels != vocab.labels {
            return Err(Error::Validation(format!(
                "{task}: similarity file labels do not match the vocabulary order {:?}",
                vocab.labels
            )));
        }
        if file.matrix.len() != vocab.len() {
            return Err(Error::Validation(format!(
                "{task}: matrix has {} rows, vocabulary has {} labels",
                file.matrix.len(),
                vocab.len()
            )));
        }
        SimTable::from_rows(&task.to_string(), &file.matrix)
    }

    pub fn load_sim_table(&self, task: TaskId, path: &Path) -> Result<SimTable> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        self.parse_sim_table(task, &text)
    }

    /// Loads a similarity override file and installs it for the task it names.
    pub fn apply_sim_file(&mut self, path: &Path) -> Result<TaskId> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let head: SimTableFile = serde_json::from_str(&text)?;
        let table = self.parse_sim_table(head.task, &text)?;
        self.set_similarity(head.task, table)?;
        Ok(head.task)
    }

    /// Stable 64-bit digest of vocabularies and similarity tables, rendered as hex.
    pub fn fingerprint(&self) -> String {
        // FNV-1a
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        let mut eat = |bytes: &[u8]| {
            for b in bytes {
                h ^= u64::from(*b);
                h = h.wrapping_mul(0x0100_0000_01b3);
            }
        };
        for t in &self.tasks {
            eat(t.id.to_string().as_bytes());
            for l in &t.labels {
                eat(l.as_bytes());
                eat(&[0]);
            }
            for v in &t.similarity.values {
                eat(&v.to_le_bytes());
            }
        }
        for o in &self.organs {
            eat(&(o.system as u64).to_le_bytes());
        }
        format!("{h:016x}")
    }
}

impl Default for TaxonomyCatalog {
    fn default() -> Self {
        default_catalog()
    }
}

/// The embedded catalog: 9 systems, 52 organs, and the nine task vocabularies
/// with identity similarity tables.
pub fn default_catalog() -> TaxonomyCatalog {
    TaxonomyCatalog::from_json(DEFAULT_CATALOG).expect("embedded catalog is valid")
}

/// Organ-level table: 1 on the diagonal, `system_similarity` between distinct
/// organs that share a parent system, 0 otherwise.
pub fn hierarchical_sim(catalog: &TaxonomyCatalog, system_similarity: f64) -> Result<SimTable> {
    if !(0.0..=1.0).contains(&system_similarity) {
        return Err(Error::InvalidArgument(format!(
            "system similarity {system_similarity} outside [0, 1]"
        )));
    }
    let n = catalog.organs.len();
    let rows: Vec<Vec<f64>> = (0..n)
        .map(|a| {
            (0..n)
                .map(|b| {
                    if a == b {
                        1.0
                    } else if catalog.organ_parent(a) == catalog.organ_parent(b) {
                        system_similarity
                    } else {
                        0.0
                    }
                })
                .collect()
        })
        .collect();
    SimTable::from_rows(&TaskId::ORGAN.to_string(), &rows)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sim_file(task: &str, labels: &[&str], matrix: Vec<Vec<f64>>) -> String {
        serde_json::json!({"task": task, "labels": labels, "matrix": matrix}).to_string()
    }

    fn t3_labels() -> Vec<&'static str> {
        vec!["nodule", "cyst", "mass", "fluid collection", "normal appearance"]
    }

    #[test]
    fn default_catalog_shape() {
        let c = default_catalog();
        assert_eq!(c.tasks().len(), 9);
        assert_eq!(c.task(TaskId::SYSTEM).len(), 9);
        assert_eq!(c.task(TaskId::ORGAN).len(), 52);
        let sizes: Vec<usize> = c.tasks().iter().map(TaskVocabulary::len).collect();
        assert_eq!(sizes, vec![9, 52, 5, 7, 2, 5, 5, 2, 5]);
        assert_eq!(c.vocab_size(), 92);
        assert_eq!(c.vocab_offset(TaskId::DIAGNOSIS), 61);
        assert_eq!(c.task(TaskId::DIAGNOSIS).labels(), t3_labels().as_slice());
        assert_eq!(
            c.task(TaskId::MARGINS).labels(),
            &["well-defined", "ill-defined/indistinct"]
        );
        assert_eq!(c.task(TaskId::ORGAN).prompts()[0], "a ultrasound image of Liver");
    }

    #[test]
    fn default_catalog_is_self_consistent() {
        let c = default_catalog();
        for (i, o) in c.organs().iter().enumerate() {
            assert!(o.system < c.systems().len());
            assert_eq!(c.organ_parent(i), o.system);
        }
        for t in c.tasks() {
            assert!(t.similarity().is_identity());
            for (i, l) in t.labels().iter().enumerate() {
                assert_eq!(l, &normalize_label(l));
                assert_eq!(t.index_of(l), Some(i));
            }
        }
        assert_eq!(default_catalog().fingerprint(), c.fingerprint());
    }

    #[test]
    fn task_id_parsing() {
        assert_eq!("T3".parse::<TaskId>().unwrap(), TaskId::DIAGNOSIS);
        assert_eq!("t9".parse::<TaskId>().unwrap(), TaskId::VASCULARITY);
        assert_eq!("2".parse::<TaskId>().unwrap(), TaskId::ORGAN);
        assert!("T0".parse::<TaskId>().is_err());
        assert!("T10".parse::<TaskId>().is_err());
        assert!("X".parse::<TaskId>().is_err());
        assert_eq!(serde_json::to_string(&TaskId::SHAPE).unwrap(), "\"T4\"");
    }

    #[test]
    fn resolve_labels_examples() {
        let c = default_catalog();
        assert_eq!(c.resolve_labels(TaskId::DIAGNOSIS, &["Cyst"]).unwrap(), vec![1]);
        assert_eq!(c.resolve_labels(TaskId::DIAGNOSIS, &["  cyst ", "MASS"]).unwrap(), vec![1, 2]);
        assert_eq!(c.resolve_labels(TaskId::DIAGNOSIS, &["cyst", "Cyst"]).unwrap(), vec![1]);
        match c.resolve_labels(TaskId::DIAGNOSIS, &["tumor"]) {
            Err(Error::UnknownLabel { candidates, label, .. }) => {
                assert_eq!(label, "tumor");
                assert_eq!(candidates.len(), 5);
            }
            other => panic!("expected unknown label, got {other:?}"),
        }
        assert_eq!(c.resolve_labels(TaskId::ORGAN, &["Liver"]).unwrap(), vec![0]);
    }

    #[test]
    fn sim_table_accepts_valid_files() {
        let c = default_catalog();
        let id = SimTable::identity(5).to_rows();
        let t = c.parse_sim_table(TaskId::DIAGNOSIS, &sim_file("T3", &t3_labels(), id)).unwrap();
        assert!(t.is_identity());

        let mut m = SimTable::identity(5).to_rows();
        m[0][1] = 0.4;
        m[1][0] = 0.4;
        let t = c.parse_sim_table(TaskId::DIAGNOSIS, &sim_file("T3", &t3_labels(), m)).unwrap();
        assert_eq!(t.get(0, 1), 0.4);
        assert_eq!(t.get(1, 0), 0.4);
    }

    #[test]
    fn sim_table_rejections_name_the_cell() {
        let c = default_catalog();
        let mut m = SimTable::identity(5).to_rows();
        m[2][2] = 0.9;
        let err = c
            .parse_sim_table(TaskId::DIAGNOSIS, &sim_file("T3", &t3_labels(), m))
            .unwrap_err();
        assert!(matches!(err, Error::SimTable { row: 2, col: 2, .. }), "{err}");

        let mut m = SimTable::identity(5).to_rows();
        m[0][3] = 0.5;
        m[3][0] = 0.2;
        let err = c
            .parse_sim_table(TaskId::DIAGNOSIS, &sim_file("T3", &t3_labels(), m))
            .unwrap_err();
        assert!(matches!(err, Error::SimTable { row: 0, col: 3, .. }), "{err}");

        let mut m = SimTable::identity(5).to_rows();
        m[1][4] = 1.2;
        m[4][1] = 1.2;
        let err = c
            .parse_sim_table(TaskId::DIAGNOSIS, &sim_file("T3", &t3_labels(), m))
            .unwrap_err();
        assert!(matches!(err, Error::SimTable { row: 1, col: 4, .. }), "{err}");

        // wrong dimension and wrong task
        let m = SimTable::identity(4).to_rows();
        assert!(c.parse_sim_table(TaskId::DIAGNOSIS, &sim_file("T3", &t3_labels(), m)).is_err());
        let m = SimTable::identity(5).to_rows();
        assert!(c.parse_sim_table(TaskId::SHAPE, &sim_file("T3", &t3_labels(), m)).is_err());
    }

    #[test]
    fn tiny_asymmetry_is_tolerated_and_removed() {
        let mut m = SimTable::identity(2).to_rows();
        m[0][1] = 0.3;
        m[1][0] = 0.3 + 5e-10;
        let t = SimTable::from_rows("T5", &m).unwrap();
        assert_eq!(t.get(0, 1), t.get(1, 0));
    }

    #[test]
    fn hierarchical_organ_similarity() {
        let c = default_catalog();
        let organs = c.task(TaskId::ORGAN);
        let liver = organs.index_of("Liver").unwrap();
        let spleen = organs.index_of("Spleen").unwrap();
        let thyroid = organs.index_of("Thyroid gland").unwrap();
        let t = hierarchical_sim(&c, DEFAULT_SYSTEM_SIMILARITY).unwrap();
        assert_eq!(t.get(liver, liver), 1.0);
        assert_eq!(t.get(liver, spleen), 0.5);
        assert_eq!(t.get(liver, thyroid), 0.0);
        assert!(hierarchical_sim(&c, 1.5).is_err());

        let mut c2 = c.clone();
        c2.set_similarity(TaskId::ORGAN, t).unwrap();
        assert_ne!(c2.fingerprint(), c.fingerprint());
        assert!(c2.set_similarity(TaskId::DIAGNOSIS, SimTable::identity(3)).is_err());
    }

    #[test]
    fn catalog_rejects_bad_documents() {
        assert!(TaxonomyCatalog::from_json("{}").is_err());
        let mut doc: serde_json::Value = serde_json::from_str(DEFAULT_CATALOG).unwrap();
        doc["format_version"] = 2.into();
        assert!(TaxonomyCatalog::from_json(&doc.to_string()).is_err());
        let mut doc: serde_json::Value = serde_json::from_str(DEFAULT_CATALOG).unwrap();
        doc["tasks"][2]["labels"][1]["label"] = "nodule".into();
        assert!(TaxonomyCatalog::from_json(&doc.to_string()).is_err());
    }
}
