//! Link measurement tables.

use std::io::{Read, Write};

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Required CSV columns, in the order they are written.
pub const LINK_COLUMNS: [&str; 10] = [
    "tx_x",
    "tx_y",
    "tx_h",
    "rx_x",
    "rx_y",
    "rx_h",
    "freq_mhz",
    "path_loss_db",
    "region",
    "band",
];

/// One measured or synthesized link. Positions share the raster CRS (meters),
/// antenna heights are above ground.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinkRecord {
    pub tx_x: f64,
    pub tx_y: f64,
    pub rx_x: f64,
    pub rx_y: f64,
    pub tx_height_agl: f64,
    pub rx_height_agl: f64,
    /// MHz.
    pub frequency: f64,
    /// dB.
    pub path_loss: f64,
    pub region_id: String,
    pub band_id: String,
}

#[derive(Debug, Error, PartialEq)]
pub enum LinkError {
    #[error("missing column `{0}`")]
    MissingColumn(String),
    #[error("csv error: {0}")]
    Csv(String),
    #[error("invalid link: {0}")]
    Invalid(String),
}

impl LinkRecord {
    /// Horizontal Tx-Rx distance in meters.
    pub fn ground_distance(&self) -> f64 {
        (self.rx_x - self.tx_x).hypot(self.rx_y - self.tx_y)
    }

    /// Tx and Rx exchanged; frequency, label and region are kept.
    pub fn swapped(&self) -> LinkRecord {
        LinkRecord {
            tx_x: self.rx_x,
            tx_y: self.rx_y,
            rx_x: self.tx_x,
            rx_y: self.tx_y,
            tx_height_agl: self.rx_height_agl,
            rx_height_agl: self.tx_height_agl,
            ..self.clone()
        }
    }

    /// Checks the record invariants. The 3-D distance is measured between
    /// antenna heights above ground, so it is positive whenever the ground
    /// points differ or the heights differ.
    pub fn validate(&self) -> Result<(), LinkError> {
        let coords = [self.tx_x, self.tx_y, self.rx_x, self.rx_y];
        if coords.iter().any(|c| !c.is_finite()) {
            return Err(LinkError::Invalid("coordinates must be finite".into()));
        }
        if !(self.tx_height_agl > 0.0 && self.tx_height_agl.is_finite()) {
            return Err(LinkError::Invalid(format!(
                "tx height must be positive, got {}",
                self.tx_height_agl
            )));
        }
        if !(self.rx_height_agl > 0.0 && self.rx_height_agl.is_finite()) {
            return Err(LinkError::Invalid(format!(
                "rx height must be positive, got {}",
                self.rx_height_agl
            )));
        }
        if !(self.frequency > 0.0 && self.frequency.is_finite()) {
            return Err(LinkError::Invalid(format!(
                "frequency must be positive, got {}",
                self.frequency
            )));
        }
        if !self.path_loss.is_finite() {
            return Err(LinkError::Invalid("path loss must be finite".into()));
        }
        let dz = self.rx_height_agl - self.tx_height_agl;
        if self.ground_distance().hypot(dz) <= 0.0 {
            return Err(LinkError::Invalid("link distance must be positive".into()));
        }
        Ok(())
    }
}

/// A problem with one data row. `line` is the 1-based line in the file.
#[derive(Debug, Clone, PartialEq)]
pub struct RowError {
    pub line: u64,
    pub message: String,
}

impl std::fmt::Display for RowError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "line {}: {}", self.line, self.message)
    }
}

/// Result of reading a link table: every row ends up in exactly one of the
/// two lists.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct LinkTable {
    pub records: Vec<LinkRecord>,
    pub errors: Vec<RowError>,
}

pub fn parse_link_csv<R: Read>(reader: R) -> Result<LinkTable, LinkError> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_reader(reader);
    let headers = rdr.headers().map_err(|e| LinkError::Csv(e.to_string()))?.clone();
    let mut index = [0usize; 10];
    for (slot, name) in index.iter_mut().zip(LINK_COLUMNS) {
        *slot = headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| LinkError::MissingColumn(name.to_string()))?;
    }

    let mut table = LinkTable::default();
    let mut record = csv::StringRecord::new();
    loop {
        let line = rdr.position().line() + 1;
        match rdr.read_record(&mut record) {
            Ok(false) => break,
            Ok(true) => {
                let line = record.position().map_or(line, |p| p.line());
                match parse_row(&record, &index) {
                    Ok(link) => table.records.push(link),
                    Err(message) => table.errors.push(RowError { line, message }),
                }
            }
            Err(e) => {
                let line = e.position().map_or(line, |p| p.line());
                // malformed quoting or invalid UTF-8 poisons only this row
                table.errors.push(RowError {
                    line,
                    message: e.to_string(),
                });
                if matches!(e.kind(), csv::ErrorKind::Io(_)) {
                    break;
                }
            }
        }
    }
    Ok(table)
}

fn parse_row(record: &csv::StringRecord, index: &[usize; 10]) -> Result<LinkRecord, String> {
    let text = |k: usize| -> Result<&str, String> {
        record
            .get(index[k])
            .ok_or_else(|| format!("missing field `{}`", LINK_COLUMNS[k]))
    };
    let num = |k: usize| -> Result<f64, String> {
        let raw = text(k)?;
        raw.parse::<f64>()
            .map_err(|_| format!("non-numeric `{}` value `{raw}`", LINK_COLUMNS[k]))
    };
    let link = LinkRecord {
        tx_x: num(0)?,
        tx_y: num(1)?,
        tx_height_agl: num(2)?,
        rx_x: num(3)?,
        rx_y: num(4)?,
        rx_height_agl: num(5)?,
        frequency: num(6)?,
        path_loss: num(7)?,
        region_id: text(8)?.to_string(),
        band_id: text(9)?.to_string(),
    };
    link.validate().map_err(|e| e.to_string())?;
    Ok(link)
}

pub fn write_link_csv<W: Write>(writer: W, links: &[LinkRecord]) -> Result<(), LinkError> {
    let mut wtr = csv::Writer::from_writer(writer);
    let err = |e: csv::Error| LinkError::Csv(e.to_string());
    wtr.write_record(LINK_COLUMNS).map_err(err)?;
    for l in links {
        wtr.write_record([
            l.tx_x.to_string(),
            l.tx_y.to_string(),
            l.tx_height_agl.to_string(),
            l.rx_x.to_string(),
            l.rx_y.to_string(),
            l.rx_height_agl.to_string(),
            l.frequency.to_string(),
            l.path_loss.to_string(),
            l.region_id.clone(),
            l.band_id.clone(),
        ])
        .map_err(err)?;
    }
    wtr.flush().map_err(|e| LinkError::Csv(e.to_string()))
}
