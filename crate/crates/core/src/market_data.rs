//! Long-format daily market data: ingestion, calendar alignment and
//! train/test splitting.
//!
//! A [`MarketFrame`] stores one dense `dates × tickers` matrix per column.
//! Frames straight out of [`load_frame`] may contain holes (a ticker without
//! a row on some date, or an empty cell); [`align_calendar`] drops every date
//! that is not complete for all tickers.

use std::collections::{BTreeSet, HashMap};
use std::fmt;
use std::io::{Read, Write};
use std::path::Path;
use std::str::FromStr;

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const BASE_COLUMNS: [&str; 5] = ["open", "high", "low", "close", "volume"];

pub const SMA_INDICATORS: [&str; 8] = [
    "macd",
    "boll_ub",
    "boll_lb",
    "rsi_30",
    "cci_30",
    "dx_30",
    "close_30_sma",
    "close_60_sma",
];

pub const MARKET_INDICATORS: [&str; 2] = ["vix", "turbulence"];

pub const TECHNICAL_INDICATORS: [&str; 15] = [
    "OPM",
    "NPM",
    "ROA",
    "ROE",
    "cur_ratio",
    "quick_ratio",
    "cash_ratio",
    "inv_turnover",
    "acc_rec_turnover",
    "acc_pay_turnover",
    "debt_ratio",
    "debt_to_equity",
    "PE",
    "PB",
    "Div_yield",
];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DatasetKind {
    Sma,
    Technical,
}

impl DatasetKind {
    pub const ALL: [DatasetKind; 2] = [DatasetKind::Sma, DatasetKind::Technical];

    /// Per-company indicator columns that enter the feature vector.
    pub fn indicator_names(self) -> &'static [&'static str] {
        match self {
            DatasetKind::Sma => &SMA_INDICATORS,
            DatasetKind::Technical => &TECHNICAL_INDICATORS,
        }
    }

    pub fn indicator_count(self) -> usize {
        self.indicator_names().len()
    }

    pub fn as_str(self) -> &'static str {
        match self {
            DatasetKind::Sma => "sma",
            DatasetKind::Technical => "technical",
        }
    }
}

impl fmt::Display for DatasetKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for DatasetKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "sma" => Ok(DatasetKind::Sma),
            "technical" | "tech" => Ok(DatasetKind::Technical),
            other => Err(Error::Parameter(format!("unknown dataset kind `{other}`"))),
        }
    }
}

/// Daily bars for a fixed ticker universe, stored column by column.
///
/// Each column is a row-major `dates.len() × tickers.len()` matrix.
/// `present[d * n_tickers + t]` records whether ticker `t` has a complete row
/// on date `d`; after alignment every entry is `true`.
#[derive(Debug, Clone, PartialEq)]
pub struct MarketFrame {
    dates: Vec<String>,
    tickers: Vec<String>,
    columns: IndexMap<String, Vec<f64>>,
    present: Vec<bool>,
}

impl MarketFrame {
    /// Builds a dense frame. Every column must hold `dates × tickers` finite values.
    pub fn from_dense(
        dates: Vec<String>,
        tickers: Vec<String>,
        columns: IndexMap<String, Vec<f64>>,
    ) -> Result<Self> {
        if tickers.is_empty() {
            return Err(Error::Parameter("frame needs at least one ticker".into()));
        }
        if dates.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Parameter("dates must be strictly increasing".into()));
        }
        let unique: BTreeSet<&String> = tickers.iter().collect();
        if unique.len() != tickers.len() {
            return Err(Error::Parameter("tickers must be unique".into()));
        }
        for base in BASE_COLUMNS {
            if !columns.contains_key(base) {
                return Err(Error::Schema(base.to_string()));
            }
        }
        let cells = dates.len() * tickers.len();
        for (name, values) in &columns {
            if values.len() != cells {
                return Err(Error::Dimension(format!(
                    "column `{name}` has {} values, expected {cells}",
                    values.len()
                )));
            }
            if values.iter().any(|v| !v.is_finite()) {
                return Err(Error::Parameter(format!("column `{name}` has non-finite values")));
            }
        }
        Ok(Self {
            dates,
            tickers,
            columns,
            present: vec![true; cells],
        })
    }

    pub fn dates(&self) -> &[String] {
        &self.dates
    }

    pub fn tickers(&self) -> &[String] {
        &self.tickers
    }

    pub fn n_dates(&self) -> usize {
        self.dates.len()
    }

    pub fn n_tickers(&self) -> usize {
        self.tickers.len()
    }

    pub fn column_names(&self) -> impl Iterator<Item = &str> {
        self.columns.keys().map(String::as_str)
    }

    pub fn has_column(&self, name: &str) -> bool {
        self.columns.contains_key(name)
    }

    /// Row-major `dates × tickers` matrix of a column.
    pub fn column(&self, name: &str) -> Option<&[f64]> {
        self.columns.get(name).map(Vec::as_slice)
    }

    pub fn value(&self, name: &str, date: usize, ticker: usize) -> Option<f64> {
        self.column(name).map(|c| c[date * self.tickers.len() + ticker])
    }

    /// One ticker's values of a column, in date order.
    pub fn series(&self, name: &str, ticker: usize) -> Option<Vec<f64>> {
        let n = self.tickers.len();
        self.column(name)
            .map(|c| (0..self.dates.len()).map(|d| c[d * n + ticker]).collect())
    }

    pub fn is_dense(&self) -> bool {
        self.present.iter().all(|&p| p)
    }

    /// Adds or replaces a column.
    pub fn insert_column(&mut self, name: impl Into<String>, values: Vec<f64>) -> Result<()> {
        let name = name.into();
        if values.len() != self.present.len() {
            return Err(Error::Dimension(format!(
                "column `{name}` has {} values, expected {}",
                values.len(),
                self.present.len()
            )));
        }
        self.columns.insert(name, values);
        Ok(())
    }

    /// Sets a per-ticker series for one column, creating the column if needed.
    pub fn set_series(&mut self, name: &str, ticker: usize, values: &[f64]) -> Result<()> {
        let n = self.tickers.len();
        if values.len() != self.dates.len() {
            return Err(Error::Dimension(format!(
                "series `{name}` has {} values, expected {}",
                values.len(),
                self.dates.len()
            )));
        }
        let cells = self.present.len();
        let column = self
            .columns
            .entry(name.to_string())
            .or_insert_with(|| vec![0.0; cells]);
        for (d, &v) in values.iter().enumerate() {
            column[d * n + ticker] = v;
        }
        Ok(())
    }

    /// Restricts the frame to the given (sorted) date indices.
    pub fn select_dates(&self, indices: &[usize]) -> MarketFrame {
        let n = self.tickers.len();
        let pick = |m: &[f64]| -> Vec<f64> {
            indices
                .iter()
                .flat_map(|&d| m[d * n..(d + 1) * n].iter().copied())
                .collect()
        };
        MarketFrame {
            dates: indices.iter().map(|&d| self.dates[d].clone()).collect(),
            tickers: self.tickers.clone(),
            columns: self
                .columns
                .iter()
                .map(|(k, v)| (k.clone(), pick(v)))
                .collect(),
            present: indices
                .iter()
                .flat_map(|&d| self.present[d * n..(d + 1) * n].iter().copied())
                .collect(),
        }
    }

    /// Writes the frame back out in long format. Missing rows are skipped.
    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(writer);
        let mut header = vec!["date".to_string(), "tic".to_string()];
        header.extend(self.columns.keys().cloned());
        out.write_record(&header)?;
        let n = self.tickers.len();
        for (d, date) in self.dates.iter().enumerate() {
            for (t, tic) in self.tickers.iter().enumerate() {
                if !self.present[d * n + t] {
                    continue;
                }
                let mut record = vec![date.clone(), tic.clone()];
                record.extend(self.columns.values().map(|c| c[d * n + t].to_string()));
                out.write_record(&record)?;
            }
        }
        out.flush()?;
        Ok(())
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let file = std::fs::File::create(path)?;
        self.write_csv(std::io::BufWriter::new(file))
    }
}

/// Reads a long-format CSV (`date,tic,open,high,low,close,volume[,...]`).
///
/// `kind` is only used to check that the dataset carries the columns its
/// feature set cannot compute: the financial ratios of the technical dataset
/// are verified later by [`crate::indicators::enrich`].
pub fn load_frame(path: impl AsRef<Path>, kind: DatasetKind) -> Result<MarketFrame> {
    let path = path.as_ref();
    let file = std::fs::File::open(path)
        .map_err(|e| Error::Io(e).context(format!("opening {}", path.display())))?;
    read_frame(file, kind)
}

pub fn read_frame<R: Read>(reader: R, _kind: DatasetKind) -> Result<MarketFrame> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
    let headers: Vec<String> = rdr.headers()?.iter().map(str::to_string).collect();
    let position = |name: &str| headers.iter().position(|h| h == name);

    let date_idx = position("date").ok_or_else(|| Error::Schema("date".into()))?;
    let tic_idx = position("tic").ok_or_else(|| Error::Schema("tic".into()))?;
    for base in BASE_COLUMNS {
        if position(base).is_none() {
            return Err(Error::Schema(base.to_string()));
        }
    }
    let value_columns: Vec<(usize, String)> = headers
        .iter()
        .enumerate()
        .filter(|(i, _)| *i != date_idx && *i != tic_idx)
        .map(|(i, h)| (i, h.clone()))
        .collect();

    struct Row {
        date: String,
        tic: String,
        values: Vec<f64>,
    }
    let mut rows = Vec::new();
    for (i, record) in rdr.records().enumerate() {
        let row_no = i + 1;
        let record = record.map_err(|e| Error::Parse {
            row: row_no,
            message: e.to_string(),
        })?;
        let field = |idx: usize| record.get(idx).unwrap_or("");
        let mut values = Vec::with_capacity(value_columns.len());
        for (idx, name) in &value_columns {
            let raw = field(*idx);
            // An empty cell marks the row as incomplete; alignment drops its date.
            let v = if raw.is_empty() {
                f64::NAN
            } else {
                raw.parse::<f64>().map_err(|_| Error::Parse {
                    row: row_no,
                    message: format!("column `{name}`: cannot parse `{raw}` as a number"),
                })?
            };
            values.push(v);
        }
        rows.push(Row {
            date: field(date_idx).to_string(),
            tic: field(tic_idx).to_string(),
            values,
        });
    }

    let dates: Vec<String> = rows
        .iter()
        .map(|r| r.date.clone())
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect();
    let tickers: Vec<String> = rows
        .iter()
        .map(|r| r.tic.clone())
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect();
    if tickers.is_empty() {
        return Err(Error::Parameter("frame has no rows".into()));
    }
    let date_pos: HashMap<&str, usize> =
        dates.iter().enumerate().map(|(i, d)| (d.as_str(), i)).collect();
    let tic_pos: HashMap<&str, usize> =
        tickers.iter().enumerate().map(|(i, t)| (t.as_str(), i)).collect();

    let n = tickers.len();
    let cells = dates.len() * n;
    let mut columns: IndexMap<String, Vec<f64>> = value_columns
        .iter()
        .map(|(_, name)| (name.clone(), vec![f64::NAN; cells]))
        .collect();
    let mut seen = vec![false; cells];
    let mut present = vec![false; cells];
    for row in &rows {
        let cell = date_pos[row.date.as_str()] * n + tic_pos[row.tic.as_str()];
        if seen[cell] {
            return Err(Error::Duplicate {
                date: row.date.clone(),
                ticker: row.tic.clone(),
            });
        }
        seen[cell] = true;
        for (col, &v) in columns.values_mut().zip(&row.values) {
            col[cell] = v;
        }
        present[cell] = row.values.iter().all(|v| v.is_finite());
    }

    Ok(MarketFrame {
        dates,
        tickers,
        columns,
        present,
    })
}

/// Keeps only the dates on which every ticker has a complete row.
pub fn align_calendar(frame: &MarketFrame) -> Result<MarketFrame> {
    let n = frame.n_tickers();
    let keep: Vec<usize> = (0..frame.n_dates())
        .filter(|&d| frame.present[d * n..(d + 1) * n].iter().all(|&p| p))
        .collect();
    if keep.is_empty() {
        return Err(Error::EmptyIntersection);
    }
    Ok(frame.select_dates(&keep))
}

/// Splits into `dates <= train_end` and `train_end < dates <= test_end`.
pub fn split_frame(
    frame: &MarketFrame,
    train_end: &str,
    test_end: &str,
) -> Result<(MarketFrame, MarketFrame)> {
    let (first, last) = match (frame.dates.first(), frame.dates.last()) {
        (Some(f), Some(l)) => (f.as_str(), l.as_str()),
        _ => return Err(Error::Range("frame has no dates".into())),
    };
    if train_end >= test_end {
        return Err(Error::Range(format!(
            "train_end {train_end} must precede test_end {test_end}"
        )));
    }
    if train_end < first {
        return Err(Error::Range(format!(
            "train_end {train_end} is before the first date {first}"
        )));
    }
    if test_end > last {
        return Err(Error::Range(format!(
            "test_end {test_end} is after the last date {last}"
        )));
    }
    let train: Vec<usize> = (0..frame.n_dates())
        .filter(|&d| frame.dates[d].as_str() <= train_end)
        .collect();
    let test: Vec<usize> = (0..frame.n_dates())
        .filter(|&d| {
            let date = frame.dates[d].as_str();
            date > train_end && date <= test_end
        })
        .collect();
    if test.is_empty() {
        return Err(Error::Range(format!(
            "no dates in ({train_end}, {test_end}]"
        )));
    }
    Ok((frame.select_dates(&train), frame.select_dates(&test)))
}

/// Splits by position: the first `train_len` dates, then the rest.
pub fn split_at(frame: &MarketFrame, train_len: usize) -> Result<(MarketFrame, MarketFrame)> {
    if train_len == 0 || train_len >= frame.n_dates() {
        return Err(Error::Range(format!(
            "cannot split {} dates at {train_len}",
            frame.n_dates()
        )));
    }
    let train: Vec<usize> = (0..train_len).collect();
    let test: Vec<usize> = (train_len..frame.n_dates()).collect();
    Ok((frame.select_dates(&train), frame.select_dates(&test)))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn parse(text: &str) -> Result<MarketFrame> {
        read_frame(text.as_bytes(), DatasetKind::Sma)
    }

    const COMPLETE: &str = "date,tic,open,high,low,close,volume
2020-01-02,AAA,1,2,0.5,1.5,100
2020-01-02,BBB,10,11,9,10.5,200
2020-01-03,AAA,1.5,2.5,1,2,110
2020-01-03,BBB,10.5,12,10,11,210
2020-01-06,AAA,2,3,1.5,2.5,120
2020-01-06,BBB,11,12,10.5,11.5,220
";

    #[test]
    fn loads_complete_frame() {
        let frame = parse(COMPLETE).unwrap();
        assert_eq!(frame.n_tickers(), 2);
        assert_eq!(frame.n_dates(), 3);
        assert!(frame.is_dense());
        assert_eq!(frame.value("close", 1, 1), Some(11.0));
    }

    #[test]
    fn missing_close_is_schema_error() {
        let err = parse("date,tic,open,high,low,volume\n2020-01-02,AAA,1,2,0.5,100\n").unwrap_err();
        assert!(matches!(err, Error::Schema(ref c) if c == "close"), "{err}");
    }

    #[test]
    fn bad_number_reports_row() {
        let mut text = String::from("date,tic,open,high,low,close,volume\n");
        for i in 1..=8 {
            let vol = if i == 7 { "abc".to_string() } else { "100".to_string() };
            text.push_str(&format!("2020-01-{i:02},AAA,1,2,0.5,1.5,{vol}\n"));
        }
        let err = parse(&text).unwrap_err();
        assert!(matches!(err, Error::Parse { row: 7, .. }), "{err}");
    }

    #[test]
    fn duplicate_rows_rejected() {
        let text = "date,tic,open,high,low,close,volume
2020-01-02,AAA,1,2,0.5,1.5,100
2020-01-02,AAA,1,2,0.5,1.5,100
";
        assert!(matches!(parse(text), Err(Error::Duplicate { .. })));
    }

    #[test]
    fn extra_columns_preserved() {
        let text = "date,tic,open,high,low,close,volume,vix
2020-01-02,AAA,1,2,0.5,1.5,100,17.5
";
        let frame = parse(text).unwrap();
        assert_eq!(frame.value("vix", 0, 0), Some(17.5));
    }

    #[test]
    fn align_intersects_dates() {
        let text = "date,tic,open,high,low,close,volume
d1,A,1,1,1,1,1
d2,A,1,1,1,1,1
d3,A,1,1,1,1,1
d2,B,1,1,1,1,1
d3,B,1,1,1,1,1
d4,B,1,1,1,1,1
";
        let aligned = align_calendar(&parse(text).unwrap()).unwrap();
        assert_eq!(aligned.dates(), ["d2", "d3"]);
        assert!(aligned.is_dense());
        assert_eq!(align_calendar(&aligned).unwrap(), aligned);
    }

    #[test]
    fn align_keeps_complete_frame() {
        let frame = parse(COMPLETE).unwrap();
        assert_eq!(align_calendar(&frame).unwrap(), frame);
    }

    #[test]
    fn align_drops_dates_with_empty_cells() {
        let text = "date,tic,open,high,low,close,volume
d1,A,1,1,1,1,1
d1,B,1,1,1,,1
d2,A,1,1,1,1,1
d2,B,1,1,1,1,1
";
        let aligned = align_calendar(&parse(text).unwrap()).unwrap();
        assert_eq!(aligned.dates(), ["d2"]);
    }

    #[test]
    fn align_disjoint_is_error() {
        let text = "date,tic,open,high,low,close,volume
d1,A,1,1,1,1,1
d2,B,1,1,1,1,1
";
        assert!(matches!(
            align_calendar(&parse(text).unwrap()),
            Err(Error::EmptyIntersection)
        ));
    }

    fn ten_dates() -> MarketFrame {
        let mut text = String::from("date,tic,open,high,low,close,volume\n");
        for d in 0..10 {
            text.push_str(&format!("2021-01-{:02},X,1,1,1,{},1\n", d + 1, d + 1));
        }
        parse(&text).unwrap()
    }

    #[test]
    fn split_partitions_dates() {
        let frame = ten_dates();
        let (train, test) = split_frame(&frame, "2021-01-07", "2021-01-10").unwrap();
        assert_eq!(train.n_dates(), 7);
        assert_eq!(test.n_dates(), 3);
        let mut rejoined = train.dates().to_vec();
        rejoined.extend_from_slice(test.dates());
        assert_eq!(rejoined, frame.dates());
    }

    #[test]
    fn split_range_errors() {
        let frame = ten_dates();
        assert!(matches!(
            split_frame(&frame, "2021-01-10", "2021-01-11"),
            Err(Error::Range(_))
        ));
        assert!(matches!(
            split_frame(&frame, "2020-12-31", "2021-01-05"),
            Err(Error::Range(_))
        ));
        assert!(matches!(
            split_frame(&frame, "2021-01-05", "2021-01-05"),
            Err(Error::Range(_))
        ));
    }

    #[test]
    fn csv_round_trip_is_exact() {
        let text = "date,tic,open,high,low,close,volume,turbulence
d1,A,0.1,0.30000000000000004,1e-7,123456.789,1,0.333333333333
d1,B,2,3,1,2.5,5,0.333333333333
";
        let frame = parse(text).unwrap();
        let mut buf = Vec::new();
        frame.write_csv(&mut buf).unwrap();
        let again = parse(std::str::from_utf8(&buf).unwrap()).unwrap();
        assert_eq!(frame, again);
    }
}
