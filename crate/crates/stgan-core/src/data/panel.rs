//! Validated demand panel and its CSV form.

use std::io::Write;
use std::path::Path;

use chrono::{Months, NaiveDate};
use ndarray::Array2;
use serde::{Deserialize, Serialize};

use super::DataError;

/// Sampling frequency of a panel, inferred from timestamp spacing.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Frequency {
    Daily,
    Monthly,
}

/// A T×N nonnegative demand matrix with calendar labels and region names.
#[derive(Debug, Clone, PartialEq)]
pub struct TimeSeriesPanel {
    values: Array2<f64>,
    timestamps: Vec<NaiveDate>,
    regions: Vec<String>,
    frequency: Frequency,
}

impl TimeSeriesPanel {
    /// Build a panel, validating every invariant: T ≥ 2, N ≥ 2, finite
    /// nonnegative values, unique region names, strictly increasing and
    /// evenly spaced timestamps.
    pub fn new(
        values: Array2<f64>,
        timestamps: Vec<NaiveDate>,
        regions: Vec<String>,
    ) -> Result<Self, DataError> {
        let (t, n) = values.dim();
        if t < 2 {
            return Err(DataError::InvalidPanel(format!("T = {t}, need T >= 2")));
        }
        if n < 2 {
            return Err(DataError::InvalidPanel(format!("N = {n}, need N >= 2")));
        }
        if timestamps.len() != t {
            return Err(DataError::InvalidPanel(format!(
                "{} timestamps for {t} rows",
                timestamps.len()
            )));
        }
        if regions.len() != n {
            return Err(DataError::InvalidPanel(format!(
                "{} region names for {n} columns",
                regions.len()
            )));
        }
        for (i, r) in regions.iter().enumerate() {
            if regions[..i].contains(r) {
                return Err(DataError::InvalidPanel(format!("duplicate region '{r}'")));
            }
        }
        for ((row, col), &v) in values.indexed_iter() {
            if !v.is_finite() {
                return Err(DataError::CellParse {
                    row: row + 1,
                    column: regions[col].clone(),
                });
            }
            if v < 0.0 {
                return Err(DataError::NegativeValue {
                    row: row + 1,
                    column: regions[col].clone(),
                });
            }
        }
        let frequency = infer_frequency(&timestamps)?;
        Ok(TimeSeriesPanel {
            values,
            timestamps,
            regions,
            frequency,
        })
    }

    pub fn n_steps(&self) -> usize {
        self.values.nrows()
    }

    pub fn n_regions(&self) -> usize {
        self.values.ncols()
    }

    pub fn values(&self) -> &Array2<f64> {
        &self.values
    }

    pub fn timestamps(&self) -> &[NaiveDate] {
        &self.timestamps
    }

    pub fn regions(&self) -> &[String] {
        &self.regions
    }

    pub fn frequency(&self) -> Frequency {
        self.frequency
    }

    /// One region's full series as a vector.
    pub fn region_series(&self, region: usize) -> Vec<f64> {
        self.values.column(region).to_vec()
    }

    /// Panel restricted to rows [start, end).
    pub fn slice_rows(&self, start: usize, end: usize) -> Result<Self, DataError> {
        if start >= end || end > self.n_steps() {
            return Err(DataError::InvalidPanel(format!(
                "row slice {start}..{end} out of range for T = {}",
                self.n_steps()
            )));
        }
        TimeSeriesPanel::new(
            self.values.slice(ndarray::s![start..end, ..]).to_owned(),
            self.timestamps[start..end].to_vec(),
            self.regions.clone(),
        )
    }

    /// Replace the value matrix, keeping labels (used by scaling).
    pub(crate) fn with_values(&self, values: Array2<f64>) -> Self {
        TimeSeriesPanel {
            values,
            timestamps: self.timestamps.clone(),
            regions: self.regions.clone(),
            frequency: self.frequency,
        }
    }

    /// Write the panel as `date,<region>,...` CSV, readable by [`load_csv`].
    pub fn save_csv(&self, path: &Path) -> Result<(), DataError> {
        let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
        write!(out, "date")?;
        for r in &self.regions {
            write!(out, ",{r}")?;
        }
        writeln!(out)?;
        for (i, date) in self.timestamps.iter().enumerate() {
            write!(out, "{}", date.format("%Y-%m-%d"))?;
            for j in 0..self.n_regions() {
                write!(out, ",{}", self.values[(i, j)])?;
            }
            writeln!(out)?;
        }
        out.flush()?;
        Ok(())
    }
}

fn infer_frequency(timestamps: &[NaiveDate]) -> Result<Frequency, DataError> {
    for (i, pair) in timestamps.windows(2).enumerate() {
        if pair[1] <= pair[0] {
            return Err(DataError::NonMonotonicDates { row: i + 2 });
        }
    }
    let start = timestamps[0];
    let second = timestamps[1];
    let freq = if second == start + chrono::Duration::days(1) {
        Frequency::Daily
    } else if second == add_months(start, 1) {
        Frequency::Monthly
    } else {
        return Err(DataError::UnevenSpacing { row: 2 });
    };
    for (i, &ts) in timestamps.iter().enumerate().skip(2) {
        let expect = match freq {
            Frequency::Daily => start + chrono::Duration::days(i as i64),
            Frequency::Monthly => add_months(start, i as u32),
        };
        if ts != expect {
            return Err(DataError::UnevenSpacing { row: i + 1 });
        }
    }
    Ok(freq)
}

/// Month arithmetic anchored at the origin date to avoid end-of-month drift.
pub(crate) fn add_months(date: NaiveDate, months: u32) -> NaiveDate {
    date.checked_add_months(Months::new(months))
        .unwrap_or_else(|| panic!("date overflow adding {months} months to {date}"))
}

/// Load a `date,<region1>,...,<regionN>` CSV into a validated panel.
pub fn load_csv(path: &Path) -> Result<TimeSeriesPanel, DataError> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(true)
        .from_path(path)?;

    let headers = reader.headers()?.clone();
    if headers.is_empty() || headers[0].trim() != "date" {
        return Err(DataError::MalformedHeader(format!(
            "first column must be 'date', got '{}'",
            headers.get(0).unwrap_or("")
        )));
    }
    if headers.len() < 3 {
        return Err(DataError::MalformedHeader(
            "need at least two region columns".into(),
        ));
    }
    let regions: Vec<String> = headers.iter().skip(1).map(|h| h.trim().to_string()).collect();
    for (i, r) in regions.iter().enumerate() {
        if r.is_empty() {
            return Err(DataError::MalformedHeader(format!(
                "empty region name in column {}",
                i + 2
            )));
        }
        if regions[..i].contains(r) {
            return Err(DataError::MalformedHeader(format!(
                "duplicate region name '{r}'"
            )));
        }
    }

    let n = regions.len();
    let mut timestamps = Vec::new();
    let mut rows: Vec<f64> = Vec::new();
    for (idx, record) in reader.records().enumerate() {
        let row = idx + 1;
        let record = record?;
        if record.len() != n + 1 {
            return Err(DataError::RaggedRow {
                row,
                got: record.len(),
                expected: n + 1,
            });
        }
        let date = NaiveDate::parse_from_str(record[0].trim(), "%Y-%m-%d").map_err(|_| {
            DataError::CellParse {
                row,
                column: "date".into(),
            }
        })?;
        if let Some(&prev) = timestamps.last() {
            if date <= prev {
                return Err(DataError::NonMonotonicDates { row });
            }
        }
        timestamps.push(date);
        for (j, cell) in record.iter().skip(1).enumerate() {
            let v: f64 = cell.trim().parse().map_err(|_| DataError::CellParse {
                row,
                column: regions[j].clone(),
            })?;
            if !v.is_finite() {
                return Err(DataError::CellParse {
                    row,
                    column: regions[j].clone(),
                });
            }
            if v < 0.0 {
                return Err(DataError::NegativeValue {
                    row,
                    column: regions[j].clone(),
                });
            }
            rows.push(v);
        }
    }

    let t = timestamps.len();
    if t < 2 {
        return Err(DataError::InvalidPanel(format!("T = {t}, need T >= 2")));
    }
    let values = Array2::from_shape_vec((t, n), rows)
        .expect("row-major reshape of validated cells");
    TimeSeriesPanel::new(values, timestamps, regions)
}

/// Evenly spaced calendar of `len` dates from `start`.
pub(crate) fn date_sequence(start: NaiveDate, freq: Frequency, len: usize) -> Vec<NaiveDate> {
    (0..len)
        .map(|i| match freq {
            Frequency::Daily => start + chrono::Duration::days(i as i64),
            Frequency::Monthly => add_months(start, i as u32),
        })
        .collect()
}
