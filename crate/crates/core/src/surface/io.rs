//! Line-oriented series file:
//!
//! ```text
//! VOLGRID 1
//! moneyness,<20 knots>
//! maturity,<20 knots>
//! <date>,<spot>,<rate>,<400 vols, row-major by moneyness>
//! ...
//! ```
//!
//! Floats are written in shortest round-trip form, so save/load is exact.

use std::fs;
use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use chrono::NaiveDate;

use super::{KnotAxes, OptionQuote, Series, VolSurfaceGrid, GRID_CELLS};
use crate::error::DataError;

pub const FORMAT_TAG: &str = "VOLGRID";
pub const FORMAT_VERSION: u32 = 1;

pub fn write_series<W: Write>(series: &Series, mut w: W) -> std::io::Result<()> {
    let join = |v: &[f64]| v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",");
    writeln!(w, "{FORMAT_TAG} {FORMAT_VERSION}")?;
    writeln!(w, "moneyness,{}", join(&series.axes.moneyness))?;
    writeln!(w, "maturity,{}", join(&series.axes.maturity))?;
    for g in &series.grids {
        writeln!(w, "{},{},{},{}", g.date, g.spot, g.rate, join(&g.values))?;
    }
    w.flush()
}

pub fn save_series(path: &Path, series: &Series) -> Result<(), DataError> {
    let file = fs::File::create(path).map_err(|e| DataError::io(path, e))?;
    write_series(series, std::io::BufWriter::new(file)).map_err(|e| DataError::io(path, e))
}

pub fn load_series(path: &Path) -> Result<Series, DataError> {
    let file = fs::File::open(path).map_err(|e| DataError::io(path, e))?;
    read_series(BufReader::new(file))
}

pub fn read_series<R: BufRead>(r: R) -> Result<Series, DataError> {
    let mut lines = r.lines().enumerate().map(|(i, l)| (i + 1, l));
    let mut next = |what: &str| -> Result<(usize, String), DataError> {
        match lines.next() {
            Some((n, Ok(l))) => Ok((n, l)),
            Some((n, Err(e))) => Err(parse_err(n, None, e.to_string())),
            None => Err(parse_err(0, None, format!("missing {what}"))),
        }
    };

    let (n, header) = next("header")?;
    let mut parts = header.split_whitespace();
    if parts.next() != Some(FORMAT_TAG) {
        return Err(parse_err(n, None, format!("expected '{FORMAT_TAG} <version>' header")));
    }
    let version = parts.next().unwrap_or("").to_string();
    if version.parse::<u32>().ok() != Some(FORMAT_VERSION) {
        return Err(DataError::UnsupportedVersion {
            found: version,
            expected: FORMAT_VERSION,
        });
    }
    let moneyness = axis_line(next("moneyness axis")?, "moneyness")?;
    let maturity = axis_line(next("maturity axis")?, "maturity")?;
    let axes = KnotAxes::new(moneyness, maturity)?;

    let mut grids = Vec::new();
    for (n, line) in lines {
        let line = line.map_err(|e| parse_err(n, None, e.to_string()))?;
        if line.trim().is_empty() {
            continue;
        }
        grids.push(grid_line(n, &line)?);
    }
    Series::new(axes, grids)
}

fn parse_err(line: usize, date: Option<&str>, message: impl Into<String>) -> DataError {
    DataError::Parse {
        line,
        date: date.map(str::to_string),
        message: message.into(),
    }
}

fn floats(line: usize, date: Option<&str>, fields: &[&str]) -> Result<Vec<f64>, DataError> {
    fields
        .iter()
        .map(|f| {
            f.trim()
                .parse::<f64>()
                .map_err(|_| parse_err(line, date, format!("not a number: '{f}'")))
        })
        .collect()
}

fn axis_line((n, line): (usize, String), name: &str) -> Result<Vec<f64>, DataError> {
    let fields: Vec<&str> = line.split(',').collect();
    if fields[0] != name {
        return Err(parse_err(n, None, format!("expected '{name}' axis line")));
    }
    floats(n, None, &fields[1..])
}

fn grid_line(n: usize, line: &str) -> Result<VolSurfaceGrid, DataError> {
    let fields: Vec<&str> = line.split(',').collect();
    let date_str = fields[0].trim();
    let date = NaiveDate::parse_from_str(date_str, "%Y-%m-%d")
        .map_err(|_| parse_err(n, Some(date_str), "bad date (want YYYY-MM-DD)"))?;
    if fields.len() != 3 + GRID_CELLS {
        return Err(parse_err(
            n,
            Some(date_str),
            format!(
                "expected {GRID_CELLS} values, found {}",
                fields.len().saturating_sub(3)
            ),
        ));
    }
    let nums = floats(n, Some(date_str), &fields[1..])?;
    VolSurfaceGrid::new(date, nums[2..].to_vec(), nums[0], nums[1]).map_err(|e| parse_err(n, Some(date_str), e.to_string()))
}

/// Quotes as delimited text with header
/// `date,strike,maturity_years,spot,rate,implied_vol`.
pub fn read_quotes<R: Read>(r: R) -> Result<Vec<OptionQuote>, DataError> {
    let mut reader = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(r);
    let mut out = Vec::new();
    for (i, rec) in reader.records().enumerate() {
        // Header is line 1.
        let line = i + 2;
        let rec = rec.map_err(|e| parse_err(line, None, e.to_string()))?;
        if rec.len() != 6 {
            return Err(parse_err(line, None, format!("expected 6 fields, found {}", rec.len())));
        }
        let date = NaiveDate::parse_from_str(&rec[0], "%Y-%m-%d")
            .map_err(|_| parse_err(line, Some(&rec[0]), "bad date (want YYYY-MM-DD)"))?;
        let v = floats(line, Some(&rec[0]), &rec.iter().skip(1).collect::<Vec<_>>())?;
        out.push(OptionQuote {
            date,
            strike: v[0],
            maturity: v[1],
            spot: v[2],
            rate: v[3],
            implied_vol: v[4],
        });
    }
    Ok(out)
}
