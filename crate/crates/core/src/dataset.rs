//! Labeled multimodal datasets and their stratified validation / demonstration / test split.
//!
//! A dataset is described by a JSON manifest whose instances reference
//! pre-extracted keyframes (paths relative to the manifest) and carry the
//! spoken transcript plus a ground-truth label.

use std::collections::{BTreeMap, BTreeSet, HashSet, VecDeque};
use std::fmt;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::Value;

#[derive(Debug, thiserror::Error)]
pub enum DatasetError {
    #[error("cannot read manifest {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("manifest is not valid JSON: {0}")]
    Json(#[from] serde_json::Error),
    #[error("malformed manifest: {0}")]
    Manifest(String),
    #[error("instance `{id}`: field `{field}` {reason}")]
    MalformedRecord {
        id: String,
        field: &'static str,
        reason: String,
    },
    #[error("instance `{id}` has label `{label}` which is not in the declared class set")]
    UnknownLabel { id: String, label: String },
    #[error("duplicate instance id `{0}`")]
    DuplicateId(String),
    #[error("a dataset needs at least two classes, found {0}")]
    TooFewClasses(usize),
    #[error("duplicate class name `{0}`")]
    DuplicateClass(String),
}

#[derive(Debug, thiserror::Error, PartialEq, Eq)]
pub enum SplitError {
    #[error("class `{class}` has {count} instances; stratification needs at least {needed}")]
    UnsupportableStratification {
        class: String,
        count: usize,
        needed: usize,
    },
    #[error("split ratios must be positive, got {0}")]
    InvalidRatios(SplitRatios),
}

/// A class name drawn from a dataset's closed, case-sensitive class set.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ClassLabel(String);

impl ClassLabel {
    pub fn new(name: impl Into<String>) -> Self {
        ClassLabel(name.into())
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl fmt::Display for ClassLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl From<&str> for ClassLabel {
    fn from(s: &str) -> Self {
        ClassLabel(s.to_string())
    }
}

/// One video clip: keyframes (visual modality), transcript (language modality), label.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Instance {
    pub id: String,
    pub frames: Vec<PathBuf>,
    pub transcript: String,
    pub label: ClassLabel,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub source_video: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub duration_s: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub name: String,
    classes: Vec<ClassLabel>,
    instances: Vec<Instance>,
    index: BTreeMap<String, usize>,
}

impl Dataset {
    /// Builds a dataset after checking every instance invariant.
    pub fn new(
        name: impl Into<String>,
        classes: Vec<ClassLabel>,
        instances: Vec<Instance>,
    ) -> Result<Self, DatasetError> {
        if classes.len() < 2 {
            return Err(DatasetError::TooFewClasses(classes.len()));
        }
        let mut seen = HashSet::new();
        for c in &classes {
            if !seen.insert(c.as_str()) {
                return Err(DatasetError::DuplicateClass(c.to_string()));
            }
        }
        let mut index = BTreeMap::new();
        for (i, inst) in instances.iter().enumerate() {
            if inst.id.is_empty() {
                return Err(DatasetError::MalformedRecord {
                    id: format!("#{i}"),
                    field: "id",
                    reason: "must be a non-empty string".into(),
                });
            }
            if inst.frames.is_empty() {
                return Err(DatasetError::MalformedRecord {
                    id: inst.id.clone(),
                    field: "frames",
                    reason: "must list at least one frame".into(),
                });
            }
            if let Some(d) = inst.duration_s {
                if !(d.is_finite() && d >= 0.0) {
                    return Err(DatasetError::MalformedRecord {
                        id: inst.id.clone(),
                        field: "duration_s",
                        reason: format!("must be a non-negative number, got {d}"),
                    });
                }
            }
            if !classes.contains(&inst.label) {
                return Err(DatasetError::UnknownLabel {
                    id: inst.id.clone(),
                    label: inst.label.to_string(),
                });
            }
            if index.insert(inst.id.clone(), i).is_some() {
                return Err(DatasetError::DuplicateId(inst.id.clone()));
            }
        }
        Ok(Dataset {
            name: name.into(),
            classes,
            instances,
            index,
        })
    }

    pub fn classes(&self) -> &[ClassLabel] {
        &self.classes
    }

    pub fn instances(&self) -> &[Instance] {
        &self.instances
    }

    pub fn get(&self, id: &str) -> Option<&Instance> {
        self.index.get(id).map(|&i| &self.instances[i])
    }

    pub fn contains(&self, id: &str) -> bool {
        self.index.contains_key(id)
    }

    pub fn len(&self) -> usize {
        self.instances.len()
    }

    pub fn is_empty(&self) -> bool {
        self.instances.is_empty()
    }

    pub fn label_of(&self, id: &str) -> Option<&ClassLabel> {
        self.get(id).map(|i| &i.label)
    }

    pub fn class_counts(&self) -> BTreeMap<ClassLabel, usize> {
        let mut counts: BTreeMap<ClassLabel, usize> =
            self.classes.iter().map(|c| (c.clone(), 0)).collect();
        for inst in &self.instances {
            *counts.entry(inst.label.clone()).or_default() += 1;
        }
        counts
    }

    /// Case-insensitive exact lookup of a class name.
    pub fn find_class(&self, name: &str) -> Option<&ClassLabel> {
        let folded = name.trim().to_lowercase();
        self.classes
            .iter()
            .find(|c| c.as_str().to_lowercase() == folded)
    }
}

/// Loads and validates a manifest; frame paths are resolved against the manifest's directory.
pub fn load_manifest(path: impl AsRef<Path>) -> Result<Dataset, DatasetError> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|source| DatasetError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let base = path.parent().unwrap_or_else(|| Path::new("."));
    parse_manifest(&text, base)
}

pub fn parse_manifest(text: &str, base_dir: &Path) -> Result<Dataset, DatasetError> {
    let doc: Value = serde_json::from_str(text)?;
    let obj = doc
        .as_object()
        .ok_or_else(|| DatasetError::Manifest("top level must be an object".into()))?;
    let name = match obj.get("name") {
        Some(Value::String(s)) => s.clone(),
        None => String::new(),
        Some(_) => return Err(DatasetError::Manifest("`name` must be a string".into())),
    };
    let declared: Option<Vec<ClassLabel>> = match obj.get("classes") {
        None | Some(Value::Null) => None,
        Some(Value::Array(items)) => Some(
            items
                .iter()
                .map(|v| {
                    v.as_str()
                        .map(ClassLabel::from)
                        .ok_or_else(|| DatasetError::Manifest("`classes` must list strings".into()))
                })
                .collect::<Result<_, _>>()?,
        ),
        Some(_) => return Err(DatasetError::Manifest("`classes` must be an array".into())),
    };
    let records = obj
        .get("instances")
        .and_then(Value::as_array)
        .ok_or_else(|| DatasetError::Manifest("`instances` must be an array".into()))?;

    let mut instances = Vec::with_capacity(records.len());
    for (i, rec) in records.iter().enumerate() {
        instances.push(parse_record(i, rec, base_dir)?);
    }

    let classes = match declared {
        Some(classes) => classes,
        None => {
            let mut classes: Vec<ClassLabel> = Vec::new();
            for inst in &instances {
                if !classes.contains(&inst.label) {
                    classes.push(inst.label.clone());
                }
            }
            classes
        }
    };
    Dataset::new(name, classes, instances)
}

fn parse_record(pos: usize, rec: &Value, base_dir: &Path) -> Result<Instance, DatasetError> {
    let obj = rec.as_object().ok_or_else(|| DatasetError::MalformedRecord {
        id: format!("#{pos}"),
        field: "record",
        reason: "must be an object".into(),
    })?;
    let id = match obj.get("id") {
        Some(Value::String(s)) if !s.is_empty() => s.clone(),
        _ => {
            return Err(DatasetError::MalformedRecord {
                id: format!("#{pos}"),
                field: "id",
                reason: "must be a non-empty string".into(),
            })
        }
    };
    let bad = |field: &'static str, reason: &str| DatasetError::MalformedRecord {
        id: id.clone(),
        field,
        reason: reason.to_string(),
    };
    let frames = match obj.get("frames") {
        Some(Value::Array(items)) => items
            .iter()
            .map(|f| {
                f.as_str()
                    .map(|p| base_dir.join(p))
                    .ok_or_else(|| bad("frames", "must contain only path strings"))
            })
            .collect::<Result<Vec<_>, _>>()?,
        _ => return Err(bad("frames", "must be an array of paths")),
    };
    let transcript = match obj.get("transcript") {
        Some(Value::String(s)) => s.clone(),
        _ => return Err(bad("transcript", "must be a string (possibly empty)")),
    };
    let label = match obj.get("label") {
        Some(Value::String(s)) if !s.is_empty() => ClassLabel::new(s.clone()),
        _ => return Err(bad("label", "must be a non-empty string")),
    };
    let source_video = match obj.get("source_video") {
        None | Some(Value::Null) => None,
        Some(Value::String(s)) => Some(s.clone()),
        Some(_) => return Err(bad("source_video", "must be a string")),
    };
    let duration_s = match obj.get("duration_s") {
        None | Some(Value::Null) => None,
        Some(v) => Some(
            v.as_f64()
                .ok_or_else(|| bad("duration_s", "must be a number"))?,
        ),
    };
    Ok(Instance {
        id,
        frames,
        transcript,
        label,
        source_video,
        duration_s,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SplitName {
    Validation,
    Demonstration,
    Test,
}

impl SplitName {
    pub const ALL: [SplitName; 3] = [SplitName::Validation, SplitName::Demonstration, SplitName::Test];

    pub fn as_str(self) -> &'static str {
        match self {
            SplitName::Validation => "validation",
            SplitName::Demonstration => "demonstration",
            SplitName::Test => "test",
        }
    }
}

impl fmt::Display for SplitName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for SplitName {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "validation" => Ok(SplitName::Validation),
            "demonstration" => Ok(SplitName::Demonstration),
            "test" => Ok(SplitName::Test),
            other => Err(format!("unknown split `{other}`")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitRatios {
    pub validation: u32,
    pub demonstration: u32,
    pub test: u32,
}

impl Default for SplitRatios {
    fn default() -> Self {
        SplitRatios {
            validation: 1,
            demonstration: 2,
            test: 1,
        }
    }
}

impl fmt::Display for SplitRatios {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}:{}:{}", self.validation, self.demonstration, self.test)
    }
}

impl std::str::FromStr for SplitRatios {
    type Err = String;

    /// `"validation:demonstration:test"`, e.g. `"1:2:1"`.
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let parts: Vec<u32> = s
            .split(':')
            .map(|p| p.trim().parse::<u32>().map_err(|_| format!("bad ratio `{s}`: expected three integers like 1:2:1")))
            .collect::<Result<_, _>>()?;
        match parts[..] {
            [validation, demonstration, test] if validation > 0 && demonstration > 0 && test > 0 => {
                Ok(SplitRatios { validation, demonstration, test })
            }
            _ => Err(format!("bad ratio `{s}`: expected three positive integers like 1:2:1")),
        }
    }
}

impl SplitRatios {
    fn parts(&self) -> [u64; 3] {
        [
            self.validation as u64,
            self.demonstration as u64,
            self.test as u64,
        ]
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitAssignment {
    pub validation: BTreeSet<String>,
    pub demonstration: BTreeSet<String>,
    pub test: BTreeSet<String>,
    pub seed: u64,
}

impl SplitAssignment {
    pub fn ids(&self, split: SplitName) -> &BTreeSet<String> {
        match split {
            SplitName::Validation => &self.validation,
            SplitName::Demonstration => &self.demonstration,
            SplitName::Test => &self.test,
        }
    }

    pub fn split_of(&self, id: &str) -> Option<SplitName> {
        SplitName::ALL
            .into_iter()
            .find(|s| self.ids(*s).contains(id))
    }

    pub fn len(&self) -> usize {
        self.validation.len() + self.demonstration.len() + self.test.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Minimum per-class count for a stratified split.
pub const MIN_PER_CLASS: usize = 4;

/// Deterministic stratified split.
///
/// Split sizes are fixed first: validation and test get `floor(N·r/Σr)`, demonstration
/// absorbs the remainder. Per-class counts are then the class's proportional share of
/// each split, rounded up or down so that every row (class) and column (split) total
/// is met exactly; fractional shares are rounded up largest-remainder first, with
/// demonstration preferred on ties. Within each class, ids are shuffled by a seeded
/// ChaCha generator before being dealt out.
pub fn stratified_split(
    dataset: &Dataset,
    ratios: SplitRatios,
    seed: u64,
) -> Result<SplitAssignment, SplitError> {
    let parts = ratios.parts();
    if parts.iter().any(|p| *p == 0) {
        return Err(SplitError::InvalidRatios(ratios));
    }
    let total_parts: u64 = parts.iter().sum();

    // Class order is by name so the result depends only on ids, labels and seed.
    let mut by_class: BTreeMap<&str, Vec<&str>> = dataset
        .classes()
        .iter()
        .map(|c| (c.as_str(), Vec::new()))
        .collect();
    for inst in dataset.instances() {
        by_class
            .entry(inst.label.as_str())
            .or_default()
            .push(inst.id.as_str());
    }
    for (class, ids) in &mut by_class {
        if ids.len() < MIN_PER_CLASS {
            return Err(SplitError::UnsupportableStratification {
                class: class.to_string(),
                count: ids.len(),
                needed: MIN_PER_CLASS,
            });
        }
        ids.sort_unstable();
    }

    let n = dataset.len() as u64;
    let val = n * parts[0] / total_parts;
    let test = n * parts[2] / total_parts;
    let sizes = [val, n - val - test, test];

    let class_sizes: Vec<u64> = by_class.values().map(|ids| ids.len() as u64).collect();
    let table = apportion(&class_sizes, &sizes);

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = SplitAssignment {
        validation: BTreeSet::new(),
        demonstration: BTreeSet::new(),
        test: BTreeSet::new(),
        seed,
    };
    for (row, ids) in by_class.values().enumerate() {
        let mut ids = ids.clone();
        ids.shuffle(&mut rng);
        let mut it = ids.into_iter().map(str::to_string);
        out.validation.extend(it.by_ref().take(table[row][0] as usize));
        out.demonstration.extend(it.by_ref().take(table[row][1] as usize));
        out.test.extend(it);
    }
    Ok(out)
}

/// Integer table with row sums `rows[c]` and column sums `cols[s]` whose cells are the
/// floor or ceiling of `rows[c]·cols[s]/N`.
///
/// Requires `Σ rows = Σ cols = N`. The ceilings are a bipartite b-matching between
/// rows and columns over the cells with a fractional share; it always exists and is
/// found with augmenting paths after a largest-remainder greedy pass.
fn apportion(rows: &[u64], cols: &[u64; 3]) -> Vec<[u64; 3]> {
    let n: u64 = rows.iter().sum();
    debug_assert_eq!(n, cols.iter().sum::<u64>());
    let mut table = vec![[0u64; 3]; rows.len()];
    if n == 0 {
        return table;
    }
    let mut row_need = vec![0u64; rows.len()];
    let mut col_need = *cols;
    let mut fractional: Vec<[bool; 3]> = vec![[false; 3]; rows.len()];
    let mut remainders: Vec<(u64, usize, usize)> = Vec::new();
    for (c, &rc) in rows.iter().enumerate() {
        let mut assigned = 0;
        for s in 0..3 {
            let num = rc * cols[s];
            table[c][s] = num / n;
            assigned += table[c][s];
            col_need[s] -= table[c][s];
            if num % n != 0 {
                fractional[c][s] = true;
                remainders.push((num % n, c, s));
            }
        }
        row_need[c] = rc - assigned;
    }
    // Largest remainder first; demonstration (column 1), then validation, then test.
    let pref = |s: usize| match s {
        1 => 0,
        0 => 1,
        _ => 2,
    };
    remainders.sort_by(|a, b| b.0.cmp(&a.0).then(pref(a.2).cmp(&pref(b.2))).then(a.1.cmp(&b.1)));
    let mut up = vec![[false; 3]; rows.len()];
    for &(_, c, s) in &remainders {
        if row_need[c] > 0 && col_need[s] > 0 {
            up[c][s] = true;
            row_need[c] -= 1;
            col_need[s] -= 1;
        }
    }
    // Augment: row with spare need -> (unused fractional cell) -> column ... until a column with need.
    while let Some(start) = row_need.iter().position(|&r| r > 0) {
        let path = augmenting_path(start, &fractional, &up, &col_need)
            .expect("a consistent rounding always exists");
        // The path starts at the column that gains a unit; interior nodes net to zero.
        let end_col = path[0].1;
        for (c, s, on) in path {
            up[c][s] = on;
        }
        row_need[start] -= 1;
        col_need[end_col] -= 1;
    }
    for (c, row) in table.iter_mut().enumerate() {
        for s in 0..3 {
            if up[c][s] {
                row[s] += 1;
            }
        }
    }
    table
}

/// BFS over the residual graph of the rounding b-matching. Returns cell flips.
fn augmenting_path(
    start: usize,
    fractional: &[[bool; 3]],
    up: &[[bool; 3]],
    col_need: &[u64; 3],
) -> Option<Vec<(usize, usize, bool)>> {
    #[derive(Clone, Copy, PartialEq)]
    enum Node {
        Row(usize),
        Col(usize),
    }
    let rows = fractional.len();
    let mut prev_row: Vec<Option<usize>> = vec![None; 3]; // column <- row that reached it
    let mut prev_col: Vec<Option<usize>> = vec![None; rows]; // row <- column that reached it
    let mut seen_row = vec![false; rows];
    let mut seen_col = [false; 3];
    seen_row[start] = true;
    let mut queue = VecDeque::from([Node::Row(start)]);
    while let Some(node) = queue.pop_front() {
        match node {
            Node::Row(c) => {
                for s in [1usize, 0, 2] {
                    if fractional[c][s] && !up[c][s] && !seen_col[s] {
                        seen_col[s] = true;
                        prev_row[s] = Some(c);
                        if col_need[s] > 0 {
                            let mut path = Vec::new();
                            let mut col = s;
                            loop {
                                let row = prev_row[col].unwrap();
                                path.push((row, col, true));
                                if row == start {
                                    return Some(path);
                                }
                                let back = prev_col[row].unwrap();
                                path.push((row, back, false));
                                col = back;
                            }
                        }
                        queue.push_back(Node::Col(s));
                    }
                }
            }
            Node::Col(s) => {
                for c in 0..rows {
                    if up[c][s] && !seen_row[c] {
                        seen_row[c] = true;
                        prev_col[c] = Some(s);
                        queue.push_back(Node::Row(c));
                    }
                }
            }
        }
    }
    None
}
