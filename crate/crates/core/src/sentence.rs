//! Flow-to-sentence serialization and consecutive-flow combination.
//!
//! A flow becomes `Name=raw, Name=raw, ...` over the selected features in
//! their dataset column order, with raw value text carried verbatim from
//! ingestion. Every `group_size` consecutive sentences are then joined with
//! single spaces into one combined input labeled by its last member.

use std::fs::File;
use std::path::Path;

use crate::error::{Error, Result};
use crate::flow::{AttackCategory, FeatureSchema, FlowDataset, FlowRecord};

/// One serialized flow.
#[derive(Debug, Clone, PartialEq)]
pub struct FlowSentence {
    pub text: String,
    pub label: u8,
    /// Row index in the source dataset.
    pub source_index: usize,
    pub category: AttackCategory,
}

/// `group_size` consecutive sentences merged into a single classifier input.
#[derive(Debug, Clone, PartialEq)]
pub struct CombinedSentence {
    pub text: String,
    /// Label of the last member flow.
    pub label: u8,
    /// Source row indices of the members, consecutive and increasing.
    pub member_indices: Vec<usize>,
    /// Member categories, for boundary-mixing diagnostics and scenario splits.
    pub group_categories: Vec<AttackCategory>,
}

impl CombinedSentence {
    /// Category of the last member, consistent with how the label is chosen.
    pub fn category(&self) -> AttackCategory {
        *self
            .group_categories
            .last()
            .expect("combined sentences have at least one member")
    }

    /// True when every member shares one category.
    pub fn is_homogeneous(&self) -> bool {
        self.group_categories
            .iter()
            .all(|c| *c == self.group_categories[0])
    }
}

/// Serializes one record over the given features (in the given order).
pub fn flow_to_sentence(
    record: &FlowRecord,
    schema: &FeatureSchema,
    features: &[String],
    source_index: usize,
) -> Result<FlowSentence> {
    let mut parts = Vec::with_capacity(features.len());
    for name in features {
        let value = record
            .get(schema, name)
            .ok_or_else(|| Error::MissingFeature(name.clone()))?;
        parts.push(format!("{name}={}", value.raw));
    }
    Ok(FlowSentence {
        text: parts.join(", "),
        label: record.label,
        source_index,
        category: record.category,
    })
}

/// Serializes a whole dataset in record order.
pub fn dataset_to_sentences(dataset: &FlowDataset, features: &[String]) -> Result<Vec<FlowSentence>> {
    dataset
        .records
        .iter()
        .enumerate()
        .map(|(i, r)| flow_to_sentence(r, &dataset.schema, features, i))
        .collect()
}

/// Combines every `group_size` consecutive sentences into one. Member texts
/// are joined by a single space; the label comes from the last member; a
/// trailing remainder shorter than `group_size` is dropped.
pub fn combine_flows(sentences: &[FlowSentence], group_size: usize) -> Result<Vec<CombinedSentence>> {
    if group_size == 0 {
        return Err(Error::InvalidArgument("group_size must be >= 1".into()));
    }
    Ok(sentences
        .chunks_exact(group_size)
        .map(|group| CombinedSentence {
            text: group
                .iter()
                .map(|s| s.text.as_str())
                .collect::<Vec<_>>()
                .join(" "),
            label: group.last().expect("chunks_exact is nonempty").label,
            member_indices: group.iter().map(|s| s.source_index).collect(),
            group_categories: group.iter().map(|s| s.category).collect(),
        })
        .collect())
}

/// Combination restricted to same-category runs: groups never span a category
/// boundary, so every combined sentence is homogeneous.
pub fn combine_flows_per_category(
    sentences: &[FlowSentence],
    group_size: usize,
) -> Result<Vec<CombinedSentence>> {
    if group_size == 0 {
        return Err(Error::InvalidArgument("group_size must be >= 1".into()));
    }
    let mut out = Vec::new();
    let mut start = 0;
    for i in 0..=sentences.len() {
        let boundary =
            i == sentences.len() || (i > start && sentences[i].category != sentences[start].category);
        if boundary {
            out.extend(combine_flows(&sentences[start..i], group_size)?);
            start = i;
        }
    }
    Ok(out)
}

/// Labeled sentence rows read back from a sentence CSV. Categories are not
/// part of the on-disk format; they travel in a sidecar when needed.
#[derive(Debug, Clone, PartialEq)]
pub struct SentenceRow {
    pub text: String,
    pub label: u8,
}

/// Writes `Sentence,label` rows; the sentence field is quoted since it
/// contains commas.
pub fn write_sentence_csv<'a, I>(rows: I, path: &Path) -> Result<()>
where
    I: IntoIterator<Item = (&'a str, u8)>,
{
    let file = File::create(path).map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let mut writer = csv::WriterBuilder::new()
        .quote_style(csv::QuoteStyle::Necessary)
        .from_writer(file);
    writer.write_record(["Sentence", "label"])?;
    for (text, label) in rows {
        writer.write_record([text, if label == 0 { "0" } else { "1" }])?;
    }
    writer.flush().map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })?;
    Ok(())
}

/// Reads a `Sentence,label` CSV written by [`write_sentence_csv`].
pub fn read_sentence_csv(path: &Path) -> Result<Vec<SentenceRow>> {
    let file = File::open(path).map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let mut reader = csv::Reader::from_reader(file);
    let header = reader.headers()?.clone();
    if header.len() < 2 || &header[0] != "Sentence" || &header[1] != "label" {
        return Err(Error::Schema(format!(
            "expected 'Sentence,label' header, got {header:?}"
        )));
    }
    let mut rows = Vec::new();
    for record in reader.records() {
        let record = record?;
        let label: u8 = record
            .get(1)
            .and_then(|l| l.trim().parse().ok())
            .filter(|l| *l <= 1)
            .ok_or_else(|| Error::Schema(format!("bad label in row {record:?}")))?;
        rows.push(SentenceRow {
            text: record.get(0).unwrap_or_default().to_string(),
            label,
        });
    }
    Ok(rows)
}
