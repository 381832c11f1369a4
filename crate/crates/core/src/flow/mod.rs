//! Flow-record datasets: schema handling, CSV ingestion, label binarization,
//! and a seeded synthetic generator.

mod csv;
mod synth;

pub use csv::{load_flow_csv, write_flow_csv, CsvLoad, RowRejection};
pub use synth::{generate_synthetic_flows, SyntheticSpec, TOP10_FEATURES};

use std::collections::HashMap;
use std::fmt;

use crate::error::{Error, Result};

/// Socket-identity columns dropped at ingestion: their values are tied to a
/// concrete deployment and hurt generalization.
pub const DEFAULT_SOCKET_FEATURES: [&str; 7] = [
    "Flow ID",
    "Src IP",
    "Src Port",
    "Dst IP",
    "Dst Port",
    "Protocol",
    "Timestamp",
];

/// Default label column name.
pub const DEFAULT_LABEL_COLUMN: &str = "Label";

/// Traffic categories: normal plus the seven attack families.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum AttackCategory {
    Normal,
    Ddos,
    Dos,
    Probe,
    Bfa,
    Web,
    Botnet,
    U2r,
}

/// All categories in canonical dataset order (normal first).
pub const ALL_CATEGORIES: [AttackCategory; 8] = [
    AttackCategory::Normal,
    AttackCategory::Ddos,
    AttackCategory::Dos,
    AttackCategory::Probe,
    AttackCategory::Bfa,
    AttackCategory::Web,
    AttackCategory::Botnet,
    AttackCategory::U2r,
];

/// The seven attack families, excluding normal traffic.
pub const ATTACK_FAMILIES: [AttackCategory; 7] = [
    AttackCategory::Ddos,
    AttackCategory::Dos,
    AttackCategory::Probe,
    AttackCategory::Bfa,
    AttackCategory::Web,
    AttackCategory::Botnet,
    AttackCategory::U2r,
];

impl AttackCategory {
    /// Parses a category label, trimming whitespace and ignoring case.
    /// `Web-Attack` is accepted as a dataset spelling of `Web`.
    pub fn parse(text: &str) -> Result<Self> {
        match text.trim().to_ascii_lowercase().as_str() {
            "normal" => Ok(Self::Normal),
            "ddos" => Ok(Self::Ddos),
            "dos" => Ok(Self::Dos),
            "probe" => Ok(Self::Probe),
            "bfa" => Ok(Self::Bfa),
            "web" | "web-attack" => Ok(Self::Web),
            "botnet" => Ok(Self::Botnet),
            "u2r" => Ok(Self::U2r),
            _ => Err(Error::UnknownCategory(text.to_string())),
        }
    }

    /// Canonical dataset spelling.
    pub fn name(&self) -> &'static str {
        match self {
            Self::Normal => "Normal",
            Self::Ddos => "DDoS",
            Self::Dos => "DoS",
            Self::Probe => "Probe",
            Self::Bfa => "BFA",
            Self::Web => "Web",
            Self::Botnet => "BOTNET",
            Self::U2r => "U2R",
        }
    }

    /// 0 for normal traffic, 1 for any attack family.
    pub fn binary_label(&self) -> u8 {
        if *self == Self::Normal {
            0
        } else {
            1
        }
    }
}

impl fmt::Display for AttackCategory {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// One feature cell: the verbatim text from the source file plus its parsed
/// numeric value. Downstream sentences use `raw`, never a re-formatted float.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureValue {
    pub raw: String,
    pub value: f64,
}

impl FeatureValue {
    /// Parses a cell, requiring a finite numeric value.
    pub fn parse(raw: &str) -> Result<Self> {
        let trimmed = raw.trim();
        let value: f64 = trimmed
            .parse()
            .map_err(|_| Error::Schema(format!("non-numeric value {trimmed:?}")))?;
        if !value.is_finite() {
            return Err(Error::Schema(format!("non-finite value {trimmed:?}")));
        }
        Ok(Self {
            raw: trimmed.to_string(),
            value,
        })
    }
}

/// Ordered feature layout of a dataset: which columns are retained, which are
/// socket-identity columns to drop, and the label column.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureSchema {
    feature_names: Vec<String>,
    socket_features: Vec<String>,
    label_column: String,
    index: HashMap<String, usize>,
}

impl FeatureSchema {
    /// Builds a schema from an explicit list of retained features.
    pub fn new(
        feature_names: Vec<String>,
        socket_features: Vec<String>,
        label_column: String,
    ) -> Result<Self> {
        let feature_names: Vec<String> =
            feature_names.iter().map(|n| n.trim().to_string()).collect();
        let socket_features: Vec<String> =
            socket_features.iter().map(|n| n.trim().to_string()).collect();
        let label_column = label_column.trim().to_string();

        let mut index = HashMap::new();
        for (i, name) in feature_names.iter().enumerate() {
            if index.insert(name.clone(), i).is_some() {
                return Err(Error::Schema(format!("duplicate feature name {name:?}")));
            }
        }
        if let Some(name) = socket_features.iter().find(|s| index.contains_key(*s)) {
            return Err(Error::Schema(format!(
                "socket feature {name:?} overlaps retained features"
            )));
        }
        if index.contains_key(&label_column) {
            return Err(Error::Schema(format!(
                "label column {label_column:?} overlaps retained features"
            )));
        }
        Ok(Self {
            feature_names,
            socket_features,
            label_column,
            index,
        })
    }

    /// Derives a schema from a full file header: retained features are the
    /// header columns minus socket features minus the label, in header order.
    /// Column names are stripped of surrounding whitespace.
    pub fn from_columns(
        columns: &[String],
        socket_features: &[&str],
        label_column: &str,
    ) -> Result<Self> {
        let trimmed: Vec<String> = columns.iter().map(|c| c.trim().to_string()).collect();
        if !trimmed.iter().any(|c| c == label_column) {
            return Err(Error::Schema(format!(
                "missing label column {label_column:?}"
            )));
        }
        let retained: Vec<String> = trimmed
            .iter()
            .filter(|c| c.as_str() != label_column && !socket_features.contains(&c.as_str()))
            .cloned()
            .collect();
        Self::new(
            retained,
            socket_features.iter().map(|s| s.to_string()).collect(),
            label_column.to_string(),
        )
    }

    pub fn feature_names(&self) -> &[String] {
        &self.feature_names
    }

    pub fn socket_features(&self) -> &[String] {
        &self.socket_features
    }

    pub fn label_column(&self) -> &str {
        &self.label_column
    }

    pub fn n_features(&self) -> usize {
        self.feature_names.len()
    }

    /// Position of a feature in the retained layout.
    pub fn feature_index(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }
}

/// One network flow: retained feature values (aligned with the schema),
/// attack category, and the derived binary label.
#[derive(Debug, Clone, PartialEq)]
pub struct FlowRecord {
    pub values: Vec<FeatureValue>,
    pub category: AttackCategory,
    pub label: u8,
}

impl FlowRecord {
    pub fn new(values: Vec<FeatureValue>, category: AttackCategory) -> Self {
        Self {
            values,
            category,
            label: category.binary_label(),
        }
    }

    /// Looks up a feature value through the schema.
    pub fn get<'a>(&'a self, schema: &FeatureSchema, name: &str) -> Option<&'a FeatureValue> {
        schema.feature_index(name).and_then(|i| self.values.get(i))
    }
}

/// An ordered, immutable collection of flow records. Record order is
/// preserved exactly as loaded; flow combination depends on it.
#[derive(Debug, Clone, PartialEq)]
pub struct FlowDataset {
    pub schema: FeatureSchema,
    pub records: Vec<FlowRecord>,
    pub provenance: String,
}

impl FlowDataset {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// Parsed numeric values as row-major matrix plus binary labels, for the
    /// feature-selection forest.
    pub fn feature_matrix(&self) -> (Vec<Vec<f64>>, Vec<u8>) {
        let rows = self
            .records
            .iter()
            .map(|r| r.values.iter().map(|v| v.value).collect())
            .collect();
        let labels = self.records.iter().map(|r| r.label).collect();
        (rows, labels)
    }

    /// Restricts the dataset to the given features, preserving record order.
    pub fn project(&self, features: &[String]) -> Result<FlowDataset> {
        let indices: Vec<usize> = features
            .iter()
            .map(|f| {
                self.schema
                    .feature_index(f)
                    .ok_or_else(|| Error::MissingFeature(f.clone()))
            })
            .collect::<Result<_>>()?;
        let schema = FeatureSchema::new(
            features.to_vec(),
            self.schema.socket_features.clone(),
            self.schema.label_column.clone(),
        )?;
        let records = self
            .records
            .iter()
            .map(|r| FlowRecord {
                values: indices.iter().map(|&i| r.values[i].clone()).collect(),
                category: r.category,
                label: r.label,
            })
            .collect();
        Ok(FlowDataset {
            schema,
            records,
            provenance: self.provenance.clone(),
        })
    }
}

/// Recomputes binary labels from categories: 0 for normal, 1 otherwise.
/// Categories are retained; the scenario splits need them.
pub fn binarize_labels(mut dataset: FlowDataset) -> FlowDataset {
    for record in &mut dataset.records {
        record.label = record.category.binary_label();
    }
    dataset
}
