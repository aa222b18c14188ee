use std::fs::File;
use std::io::{BufRead, Write};
use std::path::Path;

use super::{DataError, MvtsDataset};
use crate::autodiff::Tensor;

/// How to read a delimited file into an [`MvtsDataset`].
#[derive(Clone, Debug, PartialEq)]
pub struct CsvOptions {
    pub has_header: bool,
    pub delimiter: u8,
    /// Binary 0/1 column moved out of the samples into `labels`.
    pub label_column: Option<String>,
    /// Kept for reports, never modeled.
    pub timestamp_column: Option<String>,
    /// Further columns to drop.
    pub ignore_columns: Vec<String>,
}

impl Default for CsvOptions {
    fn default() -> Self {
        Self {
            has_header: true,
            delimiter: b',',
            label_column: None,
            timestamp_column: None,
            ignore_columns: Vec::new(),
        }
    }
}

impl CsvOptions {
    /// Header plus a `label` column, as written by [`write_csv`] for a
    /// labeled dataset without timestamps.
    pub fn labeled() -> Self {
        Self {
            label_column: Some("label".into()),
            ..Self::default()
        }
    }

    /// Reads only the header of `path` and enables the `label` and
    /// `timestamp` columns that are present, as written by [`write_csv`].
    /// A `;`-separated header with `datetime` and `anomaly` columns is taken
    /// as the [`CsvOptions::skab`] layout.
    pub fn detect(path: impl AsRef<Path>) -> Result<Self, DataError> {
        let path = path.as_ref();
        let file = File::open(path).map_err(|source| DataError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        let mut first = String::new();
        std::io::BufReader::new(file)
            .read_line(&mut first)
            .map_err(|source| DataError::Io {
                path: path.to_path_buf(),
                source,
            })?;
        let delimiter = if first.contains(';') && !first.contains(',') { ';' } else { ',' };
        let header: Vec<&str> = first.trim_end().split(delimiter).map(str::trim).collect();
        let has = |name: &str| header.contains(&name);
        if delimiter == ';' && has("datetime") && has("anomaly") {
            let mut skab = Self::skab();
            skab.ignore_columns.retain(|c| has(c));
            return Ok(skab);
        }
        Ok(Self {
            delimiter: delimiter as u8,
            label_column: has("label").then(|| "label".into()),
            timestamp_column: has("timestamp").then(|| "timestamp".into()),
            ..Self::default()
        })
    }

    /// SKAB benchmark layout: `;`-separated, `datetime` first, then eight
    /// sensor channels, `anomaly` and `changepoint`.
    pub fn skab() -> Self {
        Self {
            has_header: true,
            delimiter: b';',
            label_column: Some("anomaly".into()),
            timestamp_column: Some("datetime".into()),
            ignore_columns: vec!["changepoint".into()],
        }
    }
}

#[derive(Clone, Copy, PartialEq)]
enum Role {
    Channel,
    Label,
    Timestamp,
    Ignored,
}

fn parse_label(raw: &str, row: usize) -> Result<u8, DataError> {
    match raw.trim().parse::<f64>() {
        Ok(0.0) => Ok(0),
        Ok(1.0) => Ok(1),
        _ => Err(DataError::Label {
            row,
            value: raw.to_string(),
        }),
    }
}

/// Loads a delimited file. Channels keep file column order; rows are
/// numbered from 1 counting the header in error messages.
pub fn load_csv(path: impl AsRef<Path>, options: &CsvOptions) -> Result<MvtsDataset, DataError> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|source| DataError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let csv_err = |source| DataError::Csv {
        path: path.to_path_buf(),
        source,
    };
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(options.has_header)
        .delimiter(options.delimiter)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_reader(file);

    let header: Option<Vec<String>> = if options.has_header {
        Some(reader.headers().map_err(csv_err)?.iter().map(str::to_string).collect())
    } else {
        None
    };

    let mut roles: Option<Vec<Role>> = None;
    let mut names: Vec<String> = Vec::new();
    let mut data = Vec::new();
    let mut labels = Vec::new();
    let mut timestamps = Vec::new();
    let row_offset = usize::from(options.has_header) + 1;

    for (i, record) in reader.records().enumerate() {
        let record = record.map_err(csv_err)?;
        let row = i + row_offset;
        let roles = match &roles {
            Some(r) => r,
            None => {
                let width = header.as_ref().map_or(record.len(), Vec::len);
                let (r, n) = assign_roles(header.as_deref(), width, options)?;
                names = n;
                roles.insert(r)
            }
        };
        if record.len() != roles.len() {
            return Err(DataError::Ragged {
                row,
                expected: roles.len(),
                got: record.len(),
            });
        }
        for (c, (field, role)) in record.iter().zip(roles).enumerate() {
            match role {
                Role::Channel => {
                    let v = field.parse::<f64>().ok().filter(|v| v.is_finite()).ok_or_else(|| {
                        DataError::Parse {
                            row,
                            column: header
                                .as_ref()
                                .map_or_else(|| c.to_string(), |h| h[c].clone()),
                            value: field.to_string(),
                        }
                    })?;
                    data.push(v);
                }
                Role::Label => labels.push(parse_label(field, row)?),
                Role::Timestamp => timestamps.push(field.to_string()),
                Role::Ignored => {}
            }
        }
    }

    let Some(roles) = roles else {
        return Err(DataError::Empty);
    };
    let m = roles.iter().filter(|r| **r == Role::Channel).count();
    if m == 0 {
        return Err(DataError::Invalid("no channel columns".into()));
    }
    let t = data.len() / m;
    let samples = Tensor::matrix(t, m, data).map_err(|e| DataError::Invalid(e.to_string()))?;
    let has_labels = roles.contains(&Role::Label);
    let ds = MvtsDataset::new(samples, has_labels.then_some(labels), names)?;
    if roles.contains(&Role::Timestamp) {
        ds.with_timestamps(timestamps)
    } else {
        Ok(ds)
    }
}

fn assign_roles(
    header: Option<&[String]>,
    width: usize,
    options: &CsvOptions,
) -> Result<(Vec<Role>, Vec<String>), DataError> {
    let Some(header) = header else {
        if let Some(name) = options.label_column.as_ref().or(options.timestamp_column.as_ref()) {
            return Err(DataError::MissingColumn(name.clone()));
        }
        return Ok((vec![Role::Channel; width], (0..width).map(|c| format!("ch{c}")).collect()));
    };
    let find = |name: &str| {
        header
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| DataError::MissingColumn(name.to_string()))
    };
    let mut roles = vec![Role::Channel; header.len()];
    if let Some(name) = &options.label_column {
        roles[find(name)?] = Role::Label;
    }
    if let Some(name) = &options.timestamp_column {
        roles[find(name)?] = Role::Timestamp;
    }
    for name in &options.ignore_columns {
        roles[find(name)?] = Role::Ignored;
    }
    let names = header
        .iter()
        .zip(&roles)
        .filter(|(_, r)| **r == Role::Channel)
        .map(|(h, _)| h.clone())
        .collect();
    Ok((roles, names))
}

/// Writes `timestamp` (when present), the channels, then `label` (when
/// present). Values use shortest round-trip formatting, so reloading with
/// [`CsvOptions::labeled`] reproduces them exactly.
pub fn write_csv(ds: &MvtsDataset, path: impl AsRef<Path>) -> Result<(), DataError> {
    let path = path.as_ref();
    let io_err = |source| DataError::Io {
        path: path.to_path_buf(),
        source,
    };
    let mut out = String::new();
    let mut header: Vec<&str> = Vec::new();
    if ds.timestamps().is_some() {
        header.push("timestamp");
    }
    header.extend(ds.channel_names().iter().map(String::as_str));
    if ds.labels().is_some() {
        header.push("label");
    }
    out.push_str(&header.join(","));
    out.push('\n');
    for t in 0..ds.len() {
        let mut fields: Vec<String> = Vec::with_capacity(header.len());
        if let Some(ts) = ds.timestamps() {
            fields.push(ts[t].clone());
        }
        fields.extend(ds.row(t).iter().map(|v| v.to_string()));
        if let Some(l) = ds.labels() {
            fields.push(l[t].to_string());
        }
        out.push_str(&fields.join(","));
        out.push('\n');
    }
    let mut file = File::create(path).map_err(io_err)?;
    file.write_all(out.as_bytes()).map_err(io_err)?;
    file.sync_all().map_err(io_err)
}
