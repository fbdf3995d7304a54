//! Feature schemas, cohort CSV ingestion, per-fold z-scoring and stratified folds.
//!
//! A [`FeatureSchema`] groups columns into modalities and, within each
//! modality, into regions. Every (modality, region) pair becomes one expert
//! block. Columns are laid out modality-major in the dense feature vector of a
//! [`SubjectRecord`], so each modality occupies one contiguous slice.
//!
//! A modality is unavailable for a subject when every one of its cells is
//! empty. Unavailable blocks hold zeros, both before and after normalization.

use std::collections::{BTreeSet, HashMap, HashSet};
use std::fs::File;
use std::io::Write;
use std::ops::Range;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Floor applied to per-column standard deviations.
pub const STD_FLOOR: f64 = 1e-8;

fn default_classes() -> Vec<String> {
    ["CN", "MCI", "AD"].iter().map(|s| s.to_string()).collect()
}

fn default_label_column() -> String {
    "label".into()
}

fn default_id_column() -> String {
    "id".into()
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FeatureSchema {
    pub modalities: Vec<ModalitySpec>,
    #[serde(default = "default_label_column")]
    pub label_column: String,
    #[serde(default = "default_id_column")]
    pub id_column: String,
    /// Class names in label-index order.
    #[serde(default = "default_classes")]
    pub classes: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModalitySpec {
    pub name: String,
    pub regions: Vec<RegionSpec>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RegionSpec {
    pub name: String,
    pub columns: Vec<ColumnSpec>,
}

/// A numeric column is written as a bare string. Categorical columns are
/// one-hot expanded; when `categories` is omitted they are discovered from the
/// cohort at load time and sorted lexicographically.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ColumnSpec {
    Numeric(String),
    Categorical {
        name: String,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        categories: Option<Vec<String>>,
    },
}

impl ColumnSpec {
    pub fn name(&self) -> &str {
        match self {
            ColumnSpec::Numeric(n) => n,
            ColumnSpec::Categorical { name, .. } => name,
        }
    }
}

impl FeatureSchema {
    pub fn from_json(text: &str) -> Result<Self> {
        let schema: FeatureSchema = serde_json::from_str(text).map_err(|e| {
            Error::Schema(format!("line {} column {}: {e}", e.line(), e.column()))
        })?;
        schema.validate()?;
        Ok(schema)
    }

    pub fn validate(&self) -> Result<()> {
        if self.modalities.is_empty() {
            return Err(Error::Schema("schema declares no modalities".into()));
        }
        if self.classes.len() < 2 {
            return Err(Error::Schema("at least two classes are required".into()));
        }
        let mut seen = HashSet::new();
        seen.insert(self.id_column.as_str());
        if !seen.insert(self.label_column.as_str()) {
            return Err(Error::Schema("id and label columns coincide".into()));
        }
        let mut modality_names = HashSet::new();
        for m in &self.modalities {
            if !modality_names.insert(m.name.as_str()) {
                return Err(Error::Schema(format!("duplicate modality '{}'", m.name)));
            }
            if m.regions.is_empty() {
                return Err(Error::Schema(format!("modality '{}' has no regions", m.name)));
            }
            let mut region_names = HashSet::new();
            for r in &m.regions {
                if !region_names.insert(r.name.as_str()) {
                    return Err(Error::Schema(format!(
                        "duplicate region '{}' in modality '{}'",
                        r.name, m.name
                    )));
                }
                if r.columns.is_empty() {
                    return Err(Error::Schema(format!(
                        "region '{}/{}' has no columns",
                        m.name, r.name
                    )));
                }
                for c in &r.columns {
                    if !seen.insert(c.name()) {
                        return Err(Error::Schema(format!("duplicate column '{}'", c.name())));
                    }
                    if let ColumnSpec::Categorical { categories: Some(cats), .. } = c {
                        if cats.is_empty() {
                            return Err(Error::Schema(format!(
                                "categorical column '{}' lists no categories",
                                c.name()
                            )));
                        }
                    }
                }
            }
        }
        Ok(())
    }

    /// Number of expert blocks (one per modality-region pair).
    pub fn num_blocks(&self) -> usize {
        self.modalities.iter().map(|m| m.regions.len()).sum()
    }

    pub fn num_classes(&self) -> usize {
        self.classes.len()
    }

    pub fn modality_index(&self, name: &str) -> Option<usize> {
        self.modalities.iter().position(|m| m.name == name)
    }

    fn is_resolved(&self) -> bool {
        self.columns().all(|c| {
            !matches!(c, ColumnSpec::Categorical { categories: None, .. })
        })
    }

    fn columns(&self) -> impl Iterator<Item = &ColumnSpec> {
        self.modalities
            .iter()
            .flat_map(|m| m.regions.iter().flat_map(|r| r.columns.iter()))
    }

    /// Dense layout of a schema whose categorical columns all list their categories.
    pub fn layout(&self) -> Result<Layout> {
        if !self.is_resolved() {
            return Err(Error::Schema(
                "categorical columns must be resolved against a cohort before use".into(),
            ));
        }
        let mut modalities = Vec::new();
        let mut blocks = Vec::new();
        let mut feature_names = Vec::new();
        for (mi, m) in self.modalities.iter().enumerate() {
            let start = feature_names.len();
            let first_block = blocks.len();
            for r in &m.regions {
                let block_start = feature_names.len();
                for c in &r.columns {
                    match c {
                        ColumnSpec::Numeric(name) => feature_names.push(name.clone()),
                        ColumnSpec::Categorical { name, categories } => {
                            for cat in categories.as_deref().unwrap_or_default() {
                                feature_names.push(format!("{name}={cat}"));
                            }
                        }
                    }
                }
                blocks.push(Block {
                    modality: mi,
                    region: r.name.clone(),
                    features: block_start..feature_names.len(),
                });
            }
            modalities.push(ModalityLayout {
                name: m.name.clone(),
                features: start..feature_names.len(),
                blocks: first_block..blocks.len(),
            });
        }
        Ok(Layout {
            modalities,
            blocks,
            feature_names,
        })
    }

    /// Copy of the schema keeping only the listed modalities, in schema order.
    pub fn restrict(&self, keep: &[usize]) -> FeatureSchema {
        FeatureSchema {
            modalities: self
                .modalities
                .iter()
                .enumerate()
                .filter(|(i, _)| keep.contains(i))
                .map(|(_, m)| m.clone())
                .collect(),
            ..self.clone()
        }
    }
}

pub fn load_schema(path: impl AsRef<Path>) -> Result<FeatureSchema> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    FeatureSchema::from_json(&text)
}

/// Dense positions of every modality and expert block.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Layout {
    pub modalities: Vec<ModalityLayout>,
    pub blocks: Vec<Block>,
    pub feature_names: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ModalityLayout {
    pub name: String,
    pub features: Range<usize>,
    /// Expert indices belonging to this modality.
    pub blocks: Range<usize>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Block {
    pub modality: usize,
    pub region: String,
    pub features: Range<usize>,
}

impl Layout {
    pub fn num_features(&self) -> usize {
        self.feature_names.len()
    }

    pub fn num_blocks(&self) -> usize {
        self.blocks.len()
    }

    pub fn num_modalities(&self) -> usize {
        self.modalities.len()
    }

    fn modality_of_feature(&self) -> Vec<usize> {
        let mut out = vec![0; self.num_features()];
        for (mi, m) in self.modalities.iter().enumerate() {
            out[m.features.clone()].fill(mi);
        }
        out
    }
}

/// One subject: dense features (zeros where unavailable), per-modality availability, label.
#[derive(Debug, Clone, PartialEq)]
pub struct SubjectRecord {
    pub id: String,
    pub features: Vec<f64>,
    pub available: Vec<bool>,
    pub label: usize,
}

impl SubjectRecord {
    /// Per-expert availability derived from the modality flags.
    pub fn block_availability(&self, layout: &Layout) -> Vec<bool> {
        layout.blocks.iter().map(|b| self.available[b.modality]).collect()
    }

    /// Features with one 0/1 availability flag per modality appended.
    pub fn features_with_flags(&self) -> Vec<f64> {
        let mut v = Vec::with_capacity(self.features.len() + self.available.len());
        v.extend_from_slice(&self.features);
        v.extend(self.available.iter().map(|a| if *a { 1.0 } else { 0.0 }));
        v
    }
}

/// A cohort bound to a resolved schema.
#[derive(Debug, Clone)]
pub struct Cohort {
    pub schema: FeatureSchema,
    pub layout: Layout,
    pub records: Vec<SubjectRecord>,
}

impl Cohort {
    pub fn new(schema: FeatureSchema, records: Vec<SubjectRecord>) -> Result<Self> {
        schema.validate()?;
        let layout = schema.layout()?;
        for r in &records {
            if r.features.len() != layout.num_features() {
                return Err(Error::dims(
                    format!("features of subject {}", r.id),
                    layout.num_features(),
                    r.features.len(),
                ));
            }
            if r.available.len() != layout.num_modalities() {
                return Err(Error::dims(
                    format!("availability of subject {}", r.id),
                    layout.num_modalities(),
                    r.available.len(),
                ));
            }
            if r.label >= schema.num_classes() {
                return Err(Error::Data(format!("subject {} has label {}", r.id, r.label)));
            }
        }
        Ok(Cohort {
            schema,
            layout,
            records,
        })
    }

    pub fn labels(&self) -> Vec<usize> {
        self.records.iter().map(|r| r.label).collect()
    }

    pub fn class_counts(&self) -> Vec<usize> {
        class_counts(self.records.iter().map(|r| r.label), self.schema.num_classes())
    }

    /// Keeps the listed modalities (schema indices), dropping the rest from
    /// schema, features and availability. Subjects left with no available
    /// modality are dropped as well.
    pub fn restrict_modalities(&self, keep: &[usize]) -> Result<Cohort> {
        if keep.is_empty() {
            return Err(Error::InvalidConfig("cannot remove every modality".into()));
        }
        let schema = self.schema.restrict(keep);
        let records = self
            .records
            .iter()
            .filter(|r| keep.iter().any(|&m| r.available[m]))
            .map(|r| {
                let mut features = Vec::new();
                let mut available = Vec::new();
                for &m in keep {
                    features.extend_from_slice(&r.features[self.layout.modalities[m].features.clone()]);
                    available.push(r.available[m]);
                }
                SubjectRecord {
                    id: r.id.clone(),
                    features,
                    available,
                    label: r.label,
                }
            })
            .collect();
        Cohort::new(schema, records)
    }
}

pub fn class_counts(labels: impl IntoIterator<Item = usize>, num_classes: usize) -> Vec<usize> {
    let mut counts = vec![0; num_classes];
    for y in labels {
        counts[y] += 1;
    }
    counts
}

fn parse_label(token: &str, classes: &[String]) -> Option<usize> {
    let token = token.trim();
    classes
        .iter()
        .position(|c| c == token)
        .or_else(|| token.parse::<usize>().ok().filter(|i| *i < classes.len()))
}

/// Reads a cohort CSV. Categorical columns without listed categories are
/// resolved here; the returned cohort carries the resolved schema.
pub fn load_cohort(path: impl AsRef<Path>, schema: &FeatureSchema) -> Result<Cohort> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    read_cohort(file, schema)
}

pub fn read_cohort<R: std::io::Read>(reader: R, schema: &FeatureSchema) -> Result<Cohort> {
    schema.validate()?;
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_reader(reader);
    let headers = rdr.headers()?.clone();
    let column_index: HashMap<&str, usize> =
        headers.iter().enumerate().map(|(i, h)| (h, i)).collect();
    let find = |name: &str| {
        column_index
            .get(name)
            .copied()
            .ok_or_else(|| Error::Data(format!("missing required column '{name}'")))
    };
    let id_col = find(&schema.id_column)?;
    let label_col = find(&schema.label_column)?;
    // (modality, csv index) per schema column, modality-major.
    let mut cols = Vec::new();
    for (mi, m) in schema.modalities.iter().enumerate() {
        for r in &m.regions {
            for c in &r.columns {
                cols.push((mi, find(c.name())?));
            }
        }
    }
    let specs: Vec<&ColumnSpec> = schema.columns().collect();

    struct RawRow {
        id: String,
        cells: Vec<String>,
        available: Vec<bool>,
        label: usize,
    }
    let mut rows = Vec::new();
    for (line, result) in rdr.records().enumerate() {
        let rec = result?;
        let line = line + 2;
        let id = rec.get(id_col).unwrap_or_default().to_string();
        let label_token = rec.get(label_col).unwrap_or_default();
        let label = parse_label(label_token, &schema.classes).ok_or_else(|| {
            Error::Data(format!("line {line}: unknown label '{label_token}'"))
        })?;
        let cells: Vec<String> = cols
            .iter()
            .map(|&(_, ci)| rec.get(ci).unwrap_or_default().trim().to_string())
            .collect();
        let mut available = Vec::with_capacity(schema.modalities.len());
        for (mi, m) in schema.modalities.iter().enumerate() {
            let mine: Vec<&String> = cols
                .iter()
                .zip(&cells)
                .filter(|((m2, _), _)| *m2 == mi)
                .map(|(_, c)| c)
                .collect();
            let empty = mine.iter().filter(|c| c.is_empty()).count();
            if empty == mine.len() {
                available.push(false);
            } else if empty == 0 {
                available.push(true);
            } else {
                return Err(Error::Data(format!(
                    "line {line}: subject '{id}' has modality '{}' partially missing ({empty} of {} cells empty)",
                    m.name,
                    mine.len()
                )));
            }
        }
        rows.push(RawRow {
            id,
            cells,
            available,
            label,
        });
    }

    // Resolve categorical columns.
    let mut resolved = schema.clone();
    let mut col_idx = 0;
    for m in &mut resolved.modalities {
        for r in &mut m.regions {
            for c in &mut r.columns {
                if let ColumnSpec::Categorical { categories, .. } = c {
                    if categories.is_none() {
                        let found: BTreeSet<&str> = rows
                            .iter()
                            .map(|row| row.cells[col_idx].as_str())
                            .filter(|s| !s.is_empty())
                            .collect();
                        if found.is_empty() {
                            return Err(Error::Data(format!(
                                "categorical column '{}' has no observed values",
                                c.name()
                            )));
                        }
                        *categories = Some(found.into_iter().map(String::from).collect());
                    }
                }
                col_idx += 1;
            }
        }
    }
    let resolved_specs: Vec<&ColumnSpec> = resolved.columns().collect();
    debug_assert_eq!(specs.len(), resolved_specs.len());
    let layout = resolved.layout()?;

    let mut records = Vec::with_capacity(rows.len());
    for (line, row) in rows.into_iter().enumerate() {
        let line = line + 2;
        let mut features = Vec::with_capacity(layout.num_features());
        for (ci, spec) in resolved_specs.iter().enumerate() {
            let cell = &row.cells[ci];
            let present = row.available[cols[ci].0];
            match spec {
                ColumnSpec::Numeric(name) => {
                    if present {
                        let v: f64 = cell.parse().map_err(|_| {
                            Error::Data(format!("line {line}: column '{name}': cannot parse '{cell}'"))
                        })?;
                        if !v.is_finite() {
                            return Err(Error::Data(format!(
                                "line {line}: column '{name}': non-finite value"
                            )));
                        }
                        features.push(v);
                    } else {
                        features.push(0.0);
                    }
                }
                ColumnSpec::Categorical { name, categories } => {
                    let cats = categories.as_deref().unwrap_or_default();
                    let hit = if present {
                        Some(cats.iter().position(|c| c == cell).ok_or_else(|| {
                            Error::Data(format!(
                                "line {line}: column '{name}': unknown category '{cell}'"
                            ))
                        })?)
                    } else {
                        None
                    };
                    features.extend((0..cats.len()).map(|k| if hit == Some(k) { 1.0 } else { 0.0 }));
                }
            }
        }
        records.push(SubjectRecord {
            id: row.id,
            features,
            available: row.available,
            label: row.label,
        });
    }
    Cohort::new(resolved, records)
}

/// Writes a raw (un-normalized) cohort. Numbers use the shortest decimal
/// representation that reads back to the identical `f64`.
pub fn write_cohort(path: impl AsRef<Path>, cohort: &Cohort) -> Result<()> {
    let path = path.as_ref();
    let mut file = File::create(path).map_err(|e| Error::io(path, e))?;
    let text = cohort_to_csv(cohort)?;
    file.write_all(text.as_bytes()).map_err(|e| Error::io(path, e))
}

pub fn cohort_to_csv(cohort: &Cohort) -> Result<String> {
    let schema = &cohort.schema;
    let mut wtr = csv::WriterBuilder::new()
        .terminator(csv::Terminator::Any(b'\n'))
        .from_writer(Vec::new());
    let mut header = vec![schema.id_column.clone()];
    header.extend(schema.columns().map(|c| c.name().to_string()));
    header.push(schema.label_column.clone());
    wtr.write_record(&header)?;
    let col_modality: Vec<usize> = schema
        .modalities
        .iter()
        .enumerate()
        .flat_map(|(mi, m)| m.regions.iter().flat_map(move |r| r.columns.iter().map(move |_| mi)))
        .collect();
    for rec in &cohort.records {
        let mut row = vec![rec.id.clone()];
        let mut pos = 0;
        for (spec, &mi) in schema.columns().zip(&col_modality) {
            let present = rec.available[mi];
            match spec {
                ColumnSpec::Numeric(_) => {
                    row.push(if present { format!("{:?}", rec.features[pos]) } else { String::new() });
                    pos += 1;
                }
                ColumnSpec::Categorical { categories, .. } => {
                    let cats = categories.as_deref().unwrap_or_default();
                    let hot = rec.features[pos..pos + cats.len()].iter().position(|v| *v == 1.0);
                    row.push(match (present, hot) {
                        (true, Some(k)) => cats[k].clone(),
                        _ => String::new(),
                    });
                    pos += cats.len();
                }
            }
        }
        row.push(schema.classes[rec.label].clone());
        wtr.write_record(&row)?;
    }
    let bytes = wtr.into_inner().map_err(|e| Error::Data(e.to_string()))?;
    String::from_utf8(bytes).map_err(|e| Error::Data(e.to_string()))
}

/// Training-fold column statistics (population standard deviation).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl NormStats {
    /// Fits per-column mean and population std over rows whose modality is available.
    pub fn fit(records: &[SubjectRecord], layout: &Layout) -> Result<Self> {
        let d = layout.num_features();
        let owner = layout.modality_of_feature();
        let mut count = vec![0usize; d];
        let mut sum = vec![0.0; d];
        for r in records {
            if r.features.len() != d {
                return Err(Error::dims(format!("features of subject {}", r.id), d, r.features.len()));
            }
            for j in 0..d {
                if r.available[owner[j]] {
                    count[j] += 1;
                    sum[j] += r.features[j];
                }
            }
        }
        if let Some(j) = count.iter().position(|c| *c == 0) {
            return Err(Error::Data(format!(
                "column '{}' has no available training rows",
                layout.feature_names[j]
            )));
        }
        let mean: Vec<f64> = sum.iter().zip(&count).map(|(s, c)| s / *c as f64).collect();
        let mut ss = vec![0.0; d];
        for r in records {
            for j in 0..d {
                if r.available[owner[j]] {
                    let dev = r.features[j] - mean[j];
                    ss[j] += dev * dev;
                }
            }
        }
        let std = ss
            .iter()
            .zip(&count)
            .map(|(s, c)| (s / *c as f64).sqrt().max(STD_FLOOR))
            .collect();
        Ok(NormStats { mean, std })
    }

    /// `(x - mean) / std` on available blocks; unavailable blocks stay zero.
    pub fn apply(&self, records: &[SubjectRecord], layout: &Layout) -> Result<Vec<SubjectRecord>> {
        let d = self.mean.len();
        if d != layout.num_features() {
            return Err(Error::dims("normalization statistics", layout.num_features(), d));
        }
        let owner = layout.modality_of_feature();
        records
            .iter()
            .map(|r| {
                if r.features.len() != d {
                    return Err(Error::dims(format!("features of subject {}", r.id), d, r.features.len()));
                }
                let features = (0..d)
                    .map(|j| {
                        if r.available[owner[j]] {
                            (r.features[j] - self.mean[j]) / self.std[j]
                        } else {
                            0.0
                        }
                    })
                    .collect();
                Ok(SubjectRecord {
                    features,
                    ..r.clone()
                })
            })
            .collect()
    }

    pub fn apply_one(&self, record: &SubjectRecord, layout: &Layout) -> Result<SubjectRecord> {
        Ok(self.apply(std::slice::from_ref(record), layout)?.remove(0))
    }
}

/// Fold assignment aligned with the record order it was built from.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FoldPlan {
    pub k: usize,
    pub seed: u64,
    pub ids: Vec<String>,
    pub assignments: Vec<usize>,
}

impl FoldPlan {
    pub fn fold_of(&self, id: &str) -> Option<usize> {
        self.ids.iter().position(|i| i == id).map(|p| self.assignments[p])
    }

    pub fn test_indices(&self, fold: usize) -> Vec<usize> {
        (0..self.assignments.len()).filter(|&i| self.assignments[i] == fold).collect()
    }

    pub fn train_indices(&self, fold: usize) -> Vec<usize> {
        (0..self.assignments.len()).filter(|&i| self.assignments[i] != fold).collect()
    }
}

/// Seeded per-class shuffle followed by a round-robin deal that continues
/// across classes, so both per-class and total fold sizes differ by at most one.
pub fn stratified_kfold(records: &[SubjectRecord], num_classes: usize, k: usize, seed: u64) -> Result<FoldPlan> {
    if k < 2 {
        return Err(Error::InvalidConfig(format!("k must be at least 2, got {k}")));
    }
    let counts = class_counts(records.iter().map(|r| r.label), num_classes);
    if let Some((c, n)) = counts.iter().enumerate().find(|(_, n)| **n < k) {
        return Err(Error::Data(format!(
            "class {c} has {n} members, fewer than k = {k}"
        )));
    }
    let mut assignments = vec![0; records.len()];
    let mut dealt = 0;
    for c in 0..num_classes {
        let mut members: Vec<usize> = (0..records.len()).filter(|&i| records[i].label == c).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(c as u64);
        members.shuffle(&mut rng);
        for i in members {
            assignments[i] = dealt % k;
            dealt += 1;
        }
    }
    Ok(FoldPlan {
        k,
        seed,
        ids: records.iter().map(|r| r.id.clone()).collect(),
        assignments,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn schema_json() -> &'static str {
        r#"{
          "modalities": [
            {"name": "MRI", "regions": [
              {"name": "Temporal", "columns": ["mri_t1", "mri_t2"]},
              {"name": "Frontal", "columns": ["mri_f1"]}]},
            {"name": "PET", "regions": [{"name": "Temporal", "columns": ["pet_t1"]}]},
            {"name": "Demographic", "regions": [{"name": "Demographic", "columns": [
              "age", {"name": "sex", "categorical": true}]}]}
          ]
        }"#
    }

    fn record(id: &str, label: usize, features: Vec<f64>, available: Vec<bool>) -> SubjectRecord {
        SubjectRecord {
            id: id.into(),
            features,
            available,
            label,
        }
    }

    #[test]
    fn schema_defaults_and_blocks() {
        let s = FeatureSchema::from_json(schema_json()).unwrap();
        assert_eq!(s.num_blocks(), 4);
        assert_eq!(s.label_column, "label");
        assert_eq!(s.classes, vec!["CN", "MCI", "AD"]);
        assert!(s.layout().is_err(), "sex categories unresolved");
    }

    #[test]
    fn minimal_schema_has_one_block() {
        let s = FeatureSchema::from_json(
            r#"{"modalities":[{"name":"A","regions":[{"name":"r","columns":["x"]}]}]}"#,
        )
        .unwrap();
        assert_eq!(s.num_blocks(), 1);
    }

    #[test]
    fn duplicate_columns_are_rejected() {
        let err = FeatureSchema::from_json(
            r#"{"modalities":[{"name":"A","regions":[{"name":"r","columns":["x"]},{"name":"q","columns":["x"]}]}]}"#,
        )
        .unwrap_err();
        assert!(err.to_string().contains("duplicate column 'x'"));
    }

    #[test]
    fn parse_errors_carry_position() {
        let err = FeatureSchema::from_json("{\n  \"modalities\": [,]\n}").unwrap_err();
        assert!(err.to_string().contains("line 2"), "{err}");
    }

    #[test]
    fn cohort_loading_rules() {
        let s = FeatureSchema::from_json(schema_json()).unwrap();
        let csv = "id,mri_t1,mri_t2,mri_f1,pet_t1,age,sex,label\n\
                   a,1,2,3,4,70,M,CN\n\
                   b,1,2,3,,71,F,2\n\
                   c,,,,5,72,F,MCI\n";
        let c = read_cohort(csv.as_bytes(), &s).unwrap();
        assert_eq!(c.layout.num_features(), 7);
        assert_eq!(c.layout.feature_names[5..], ["sex=F".to_string(), "sex=M".to_string()]);
        assert_eq!(c.records[0].features, vec![1.0, 2.0, 3.0, 4.0, 70.0, 0.0, 1.0]);
        assert_eq!(c.records[1].available, vec![true, false, true]);
        assert_eq!(c.records[1].label, 2);
        assert_eq!(c.records[2].available, vec![false, true, true]);
        assert_eq!(c.records[2].features[..3], [0.0, 0.0, 0.0]);
    }

    #[test]
    fn partially_missing_modality_is_an_error() {
        let s = FeatureSchema::from_json(schema_json()).unwrap();
        let csv = "id,mri_t1,mri_t2,mri_f1,pet_t1,age,sex,label\na,1,,3,4,70,M,CN\n";
        let err = read_cohort(csv.as_bytes(), &s).unwrap_err();
        assert!(err.to_string().contains("partially missing"), "{err}");
    }

    #[test]
    fn unknown_label_and_missing_column() {
        let s = FeatureSchema::from_json(schema_json()).unwrap();
        let csv = "id,mri_t1,mri_t2,mri_f1,pet_t1,age,sex,label\na,1,2,3,4,70,M,FTD\n";
        assert!(read_cohort(csv.as_bytes(), &s).unwrap_err().to_string().contains("unknown label"));
        let csv = "id,mri_t1,mri_t2,pet_t1,age,sex,label\na,1,2,4,70,M,CN\n";
        assert!(read_cohort(csv.as_bytes(), &s).unwrap_err().to_string().contains("mri_f1"));
    }

    #[test]
    fn csv_roundtrip_is_exact_and_keeps_missingness() {
        let s = FeatureSchema::from_json(schema_json()).unwrap();
        let csv = "id,mri_t1,mri_t2,mri_f1,pet_t1,age,sex,label\n\
                   a,0.1,2.5e-7,3,4,70.25,M,CN\n\
                   b,1,2,3,,71,F,AD\n";
        let mut c = read_cohort(csv.as_bytes(), &s).unwrap();
        c.records[0].features[0] = std::f64::consts::PI / 7.0;
        c.records[0].features[1] = -1.0e-300;
        let text = cohort_to_csv(&c).unwrap();
        let back = read_cohort(text.as_bytes(), &c.schema).unwrap();
        assert_eq!(back.records, c.records);
        assert_eq!(back.schema, c.schema);
    }

    #[test]
    fn zscore_examples() {
        let s = FeatureSchema::from_json(
            r#"{"modalities":[{"name":"A","regions":[{"name":"r","columns":["x","k"]}]}]}"#,
        )
        .unwrap();
        let layout = s.layout().unwrap();
        let recs: Vec<_> = [1.0, 2.0, 3.0]
            .iter()
            .enumerate()
            .map(|(i, v)| record(&i.to_string(), 0, vec![*v, 5.0], vec![true]))
            .collect();
        let stats = NormStats::fit(&recs, &layout).unwrap();
        assert_eq!(stats.mean, vec![2.0, 5.0]);
        assert!((stats.std[0] - (2.0f64 / 3.0).sqrt()).abs() < 1e-15);
        assert_eq!(stats.std[1], STD_FLOOR);
        let z = stats.apply(&recs, &layout).unwrap();
        let want = 1.224_744_871_391_589;
        assert!((z[0].features[0] + want).abs() < 1e-12);
        assert_eq!(z[1].features[0], 0.0);
        assert!((z[2].features[0] - want).abs() < 1e-12);
        assert!(z.iter().all(|r| r.features[1] == 0.0));
    }

    #[test]
    fn zscore_ignores_and_preserves_missing_blocks() {
        let s = FeatureSchema::from_json(
            r#"{"modalities":[{"name":"A","regions":[{"name":"r","columns":["x"]}]},
                               {"name":"B","regions":[{"name":"r","columns":["y"]}]}]}"#,
        )
        .unwrap();
        let layout = s.layout().unwrap();
        let recs = vec![
            record("a", 0, vec![1.0, 10.0], vec![true, true]),
            record("b", 0, vec![3.0, 0.0], vec![true, false]),
        ];
        let stats = NormStats::fit(&recs, &layout).unwrap();
        assert_eq!(stats.mean, vec![2.0, 10.0]);
        let z = stats.apply(&recs, &layout).unwrap();
        assert_eq!(z[1].features[1], 0.0);
        assert_eq!(z[1].available, vec![true, false]);
        let only_missing = vec![record("b", 0, vec![3.0, 0.0], vec![true, false])];
        assert!(NormStats::fit(&only_missing, &layout).is_err());
    }

    fn labelled(counts: &[usize]) -> Vec<SubjectRecord> {
        let mut out = Vec::new();
        for (c, n) in counts.iter().enumerate() {
            for i in 0..*n {
                out.push(record(&format!("{c}-{i}"), c, vec![0.0], vec![true]));
            }
        }
        out
    }

    #[test]
    fn kfold_exact_divisibility() {
        let recs = labelled(&[10, 10, 10]);
        let plan = stratified_kfold(&recs, 3, 10, 5).unwrap();
        for f in 0..10 {
            let idx = plan.test_indices(f);
            let counts = class_counts(idx.iter().map(|&i| recs[i].label), 3);
            assert_eq!(counts, vec![1, 1, 1]);
        }
        assert_eq!(plan, stratified_kfold(&recs, 3, 10, 5).unwrap());
        assert_ne!(plan, stratified_kfold(&recs, 3, 10, 6).unwrap());
    }

    #[test]
    fn kfold_cohort_scale_balance() {
        let counts = [637, 557, 336];
        let recs = labelled(&counts);
        let plan = stratified_kfold(&recs, 3, 10, 1).unwrap();
        let mut seen = vec![0usize; recs.len()];
        for f in 0..10 {
            let idx = plan.test_indices(f);
            idx.iter().for_each(|&i| seen[i] += 1);
            let got = class_counts(idx.iter().map(|&i| recs[i].label), 3);
            for c in 0..3 {
                let ideal = counts[c] as f64 / 10.0;
                assert!((got[c] as f64 - ideal).abs() <= 1.0, "fold {f} class {c}: {got:?}");
            }
            assert!(idx.len() == 153);
        }
        assert!(seen.iter().all(|s| *s == 1));
        assert_eq!(plan.fold_of("2-0"), Some(plan.assignments[637 + 557]));
    }

    #[test]
    fn kfold_rejects_small_classes() {
        let recs = labelled(&[10, 9, 10]);
        assert!(stratified_kfold(&recs, 3, 10, 0).is_err());
        assert!(stratified_kfold(&recs, 3, 1, 0).is_err());
    }

    #[test]
    fn restrict_modalities_drops_columns() {
        let s = FeatureSchema::from_json(
            r#"{"modalities":[{"name":"A","regions":[{"name":"r","columns":["x"]}]},
                               {"name":"B","regions":[{"name":"r","columns":["y","z"]}]}]}"#,
        )
        .unwrap();
        let c = Cohort::new(
            s,
            vec![
                record("a", 0, vec![1.0, 2.0, 3.0], vec![true, true]),
                record("b", 1, vec![1.0, 0.0, 0.0], vec![true, false]),
            ],
        )
        .unwrap();
        let only_b = c.restrict_modalities(&[1]).unwrap();
        assert_eq!(only_b.records.len(), 1);
        assert_eq!(only_b.records[0].features, vec![2.0, 3.0]);
        assert_eq!(only_b.layout.num_blocks(), 1);
        assert!(c.restrict_modalities(&[]).is_err());
    }
}
