//! CSV ingestion and export for flow datasets.
//!
//! Input files are comma-separated, UTF-8, with a header row. Column names
//! are matched after stripping surrounding whitespace. Rows containing
//! non-finite or unparsable numeric values are rejected, counted, and
//! reported rather than imputed.

use std::fmt;
use std::fs::File;
use std::path::Path;

use crate::error::{Error, Result};
use crate::flow::{AttackCategory, FeatureSchema, FeatureValue, FlowDataset, FlowRecord};

/// A rejected input row and the reason it was dropped.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RowRejection {
    /// 1-based data row number (not counting the header).
    pub row: usize,
    pub reason: String,
}

impl fmt::Display for RowRejection {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "row {}: {}", self.row, self.reason)
    }
}

/// Result of loading a CSV: the surviving dataset plus the rejection report.
#[derive(Debug)]
pub struct CsvLoad {
    pub dataset: FlowDataset,
    pub rejections: Vec<RowRejection>,
}

impl CsvLoad {
    /// Rejection report as text lines, one `row <n>: <reason>` per rejection.
    pub fn rejection_report(&self) -> String {
        let mut out = String::new();
        for r in &self.rejections {
            out.push_str(&r.to_string());
            out.push('\n');
        }
        out
    }
}

fn open(path: &Path) -> Result<File> {
    File::open(path).map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })
}

/// Loads a flow CSV against a known schema.
///
/// The header, after stripping whitespace and removing socket features and
/// the label column, must equal the schema's retained feature list. Socket
/// columns are dropped; the label column is parsed into an attack category
/// and binarized (normal = 0, attack = 1). Original row order is preserved.
pub fn load_flow_csv(path: &Path, schema: &FeatureSchema) -> Result<CsvLoad> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(true)
        .from_reader(open(path)?);

    let header: Vec<String> = reader
        .headers()?
        .iter()
        .map(|h| h.trim().to_string())
        .collect();

    let derived = FeatureSchema::from_columns(
        &header,
        &schema
            .socket_features()
            .iter()
            .map(|s| s.as_str())
            .collect::<Vec<_>>(),
        schema.label_column(),
    )?;
    if derived.feature_names() != schema.feature_names() {
        return Err(Error::Schema(format!(
            "header mismatch: file retains {} features, schema expects {}",
            derived.n_features(),
            schema.n_features()
        )));
    }

    // Map retained features and the label to their column positions.
    let positions: Vec<usize> = schema
        .feature_names()
        .iter()
        .map(|name| header.iter().position(|h| h == name).expect("validated"))
        .collect();
    let label_pos = header
        .iter()
        .position(|h| h == schema.label_column())
        .expect("validated");

    let mut records = Vec::new();
    let mut rejections = Vec::new();
    for (i, row) in reader.records().enumerate() {
        let row_no = i + 1;
        let row = row?;
        match parse_row(&row, &positions, label_pos) {
            Ok((values, category)) => records.push(FlowRecord::new(values, category)),
            Err(reason) => rejections.push(RowRejection {
                row: row_no,
                reason,
            }),
        }
    }

    if records.is_empty() {
        return Err(Error::EmptyInput(format!(
            "zero surviving rows in {}",
            path.display()
        )));
    }

    Ok(CsvLoad {
        dataset: FlowDataset {
            schema: schema.clone(),
            records,
            provenance: path.display().to_string(),
        },
        rejections,
    })
}

/// Loads a flow CSV, deriving the retained-feature schema from the file
/// header itself.
pub fn load_flow_csv_with_header(
    path: &Path,
    socket_features: &[&str],
    label_column: &str,
) -> Result<CsvLoad> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_reader(open(path)?);
    let header: Vec<String> = reader
        .headers()?
        .iter()
        .map(|h| h.trim().to_string())
        .collect();
    drop(reader);
    let schema = FeatureSchema::from_columns(&header, socket_features, label_column)?;
    load_flow_csv(path, &schema)
}

fn parse_row(
    row: &csv::StringRecord,
    positions: &[usize],
    label_pos: usize,
) -> std::result::Result<(Vec<FeatureValue>, AttackCategory), String> {
    let mut values = Vec::with_capacity(positions.len());
    for &pos in positions {
        let cell = row.get(pos).ok_or_else(|| "short row".to_string())?;
        let value = FeatureValue::parse(cell).map_err(|e| e.to_string())?;
        values.push(value);
    }
    let label_cell = row.get(label_pos).ok_or_else(|| "short row".to_string())?;
    let category = AttackCategory::parse(label_cell).map_err(|e| e.to_string())?;
    Ok((values, category))
}

/// Writes a dataset back to CSV: retained feature columns then the label
/// column, raw value text verbatim, category in canonical spelling.
pub fn write_flow_csv(dataset: &FlowDataset, path: &Path) -> Result<()> {
    let file = File::create(path).map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let mut writer = csv::Writer::from_writer(file);

    let mut header: Vec<&str> = dataset
        .schema
        .feature_names()
        .iter()
        .map(|s| s.as_str())
        .collect();
    header.push(dataset.schema.label_column());
    writer.write_record(&header)?;

    for record in &dataset.records {
        let mut row: Vec<&str> = record.values.iter().map(|v| v.raw.as_str()).collect();
        row.push(record.category.name());
        writer.write_record(&row)?;
    }
    writer.flush().map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::flow::DEFAULT_SOCKET_FEATURES;
    use std::io::Write;

    /// An 84-column header shaped like the InSDN export: 7 socket columns,
    /// 76 statistical features, and a label.
    fn insdn_style_header() -> Vec<String> {
        let mut cols: Vec<String> = DEFAULT_SOCKET_FEATURES
            .iter()
            .map(|s| s.to_string())
            .collect();
        for i in 0..76 {
            cols.push(format!("Stat Feature {i:02}"));
        }
        cols.push("Label".to_string());
        cols
    }

    fn write_temp_csv(lines: &[String]) -> tempfile::NamedTempFile {
        let mut file = tempfile::NamedTempFile::new().unwrap();
        for line in lines {
            writeln!(file, "{line}").unwrap();
        }
        file.flush().unwrap();
        file
    }

    #[test]
    fn insdn_style_file_drops_sockets_and_keeps_all_rows() {
        let header = insdn_style_header();
        assert_eq!(header.len(), 84);
        let mut lines = vec![header.join(",")];
        for i in 0..100 {
            let mut cells = vec![
                format!("flow-{i}"),
                "10.0.0.1".into(),
                "1234".into(),
                "10.0.0.2".into(),
                "80".into(),
                "6".into(),
                "2020-01-01 00:00:00".into(),
            ];
            for j in 0..76 {
                cells.push(format!("{}", i * 100 + j));
            }
            cells.push(if i % 2 == 0 { "Normal" } else { "DDoS" }.into());
            lines.push(cells.join(","));
        }
        let file = write_temp_csv(&lines);
        let load = load_flow_csv_with_header(
            file.path(),
            &DEFAULT_SOCKET_FEATURES,
            "Label",
        )
        .unwrap();
        assert_eq!(load.dataset.schema.n_features(), 76);
        assert_eq!(load.dataset.len(), 100);
        assert!(load.rejections.is_empty());
        assert_eq!(load.dataset.records[0].label, 0);
        assert_eq!(load.dataset.records[1].label, 1);
    }

    #[test]
    fn header_only_file_is_zero_surviving_rows() {
        let file = write_temp_csv(&["Flow Duration,Label".to_string()]);
        let err =
            load_flow_csv_with_header(file.path(), &[], "Label").unwrap_err();
        assert!(err.to_string().contains("zero surviving rows"), "{err}");
    }

    #[test]
    fn corrupted_row_is_rejected_and_counted() {
        let file = write_temp_csv(&[
            "Flow Duration,Flow Pkts/s,Label".to_string(),
            "100,2.5,Normal".to_string(),
            "100,oops,DoS".to_string(),
            "7,1.25,Probe".to_string(),
        ]);
        let load = load_flow_csv_with_header(file.path(), &[], "Label").unwrap();
        assert_eq!(load.dataset.len(), 2);
        assert_eq!(load.rejections.len(), 1);
        assert_eq!(load.rejections[0].row, 2);
        assert!(load.rejection_report().starts_with("row 2: "));
    }

    #[test]
    fn infinite_rate_rows_are_rejected() {
        let file = write_temp_csv(&[
            "Flow Pkts/s,Label".to_string(),
            "Infinity,DDoS".to_string(),
            "125000,DDoS".to_string(),
        ]);
        let load = load_flow_csv_with_header(file.path(), &[], "Label").unwrap();
        assert_eq!(load.dataset.len(), 1);
        assert_eq!(load.rejections.len(), 1);
        assert!(load.rejections[0].reason.contains("non-finite"));
    }

    #[test]
    fn missing_file_and_missing_label_column_error() {
        assert!(matches!(
            load_flow_csv_with_header(Path::new("/nonexistent.csv"), &[], "Label"),
            Err(Error::Io { .. })
        ));
        let file = write_temp_csv(&["A,B".to_string(), "1,2".to_string()]);
        let err = load_flow_csv_with_header(file.path(), &[], "Label").unwrap_err();
        assert!(err.to_string().contains("missing label column"));
    }

    #[test]
    fn header_mismatch_against_explicit_schema_errors() {
        let schema = FeatureSchema::new(
            vec!["Flow Duration".into(), "Pkt Len Max".into()],
            vec![],
            "Label".into(),
        )
        .unwrap();
        let file = write_temp_csv(&[
            "Flow Duration,Label".to_string(),
            "5,Normal".to_string(),
        ]);
        let err = load_flow_csv(file.path(), &schema).unwrap_err();
        assert!(err.to_string().contains("header mismatch"));
    }

    #[test]
    fn load_write_load_round_trips_raw_text() {
        let file = write_temp_csv(&[
            "Flow Duration,Flow Pkts/s,Label".to_string(),
            "1605449,159.4569494,Normal".to_string(),
            "30,66666.66667,ddos".to_string(),
        ]);
        let first = load_flow_csv_with_header(file.path(), &[], "Label")
            .unwrap()
            .dataset;
        let out = tempfile::NamedTempFile::new().unwrap();
        write_flow_csv(&first, out.path()).unwrap();
        let second = load_flow_csv_with_header(out.path(), &[], "Label")
            .unwrap()
            .dataset;
        assert_eq!(first.schema, second.schema);
        assert_eq!(first.records, second.records);
        assert_eq!(second.records[0].values[1].raw, "159.4569494");
    }

    #[test]
    fn record_count_is_preserved_when_sockets_are_dropped() {
        let file = write_temp_csv(&[
            "Src IP,Flow Duration,Label".to_string(),
            "10.0.0.1,100,Normal".to_string(),
            "10.0.0.2,200,DoS".to_string(),
        ]);
        let with_socket =
            load_flow_csv_with_header(file.path(), &["Src IP"], "Label").unwrap();
        assert_eq!(with_socket.dataset.schema.n_features(), 1);
        assert_eq!(with_socket.dataset.len(), 2);
    }
}
