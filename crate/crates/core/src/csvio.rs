//! Path CSV files: header `t,y1..ym[,x1..xd][,jump]`, one row per
//! observation time. The `jump` flag on row `j` refers to increment `j`
//! (the one ending at that row); row 0 carries 0.

use std::io::{Read, Write};

use thiserror::Error;

use crate::model::{ModelError, SamplePath};

#[derive(Debug, Error)]
pub enum CsvError {
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("bad header: {0}")]
    Header(String),
    #[error("row {row}: {msg}")]
    Row { row: usize, msg: String },
    #[error("time grid is not equidistant at row {0}")]
    Grid(usize),
    #[error(transparent)]
    Model(#[from] ModelError),
}

pub fn write_path<W: Write>(path: &SamplePath<f64>, out: W) -> Result<(), CsvError> {
    let mut w = csv::Writer::from_writer(out);
    let m = path.dim_y();
    let d = if path.has_covariates() { path.dim_x() } else { 0 };
    let truth = path.jump_truth();
    let mut header = vec!["t".to_string()];
    header.extend((1..=m).map(|i| format!("y{i}")));
    header.extend((1..=d).map(|i| format!("x{i}")));
    if truth.is_some() {
        header.push("jump".into());
    }
    w.write_record(&header)?;
    for j in 0..=path.n() {
        let mut rec: Vec<String> = vec![path.time(j).to_string()];
        rec.extend(path.y_row(j).iter().map(f64::to_string));
        if d > 0 {
            rec.extend(path.x_row(j).iter().map(f64::to_string));
        }
        if let Some(t) = truth {
            rec.push(if j > 0 && t[j - 1] { "1" } else { "0" }.into());
        }
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

fn parse_flag(s: &str, row: usize) -> Result<bool, CsvError> {
    match s.trim() {
        "1" | "true" | "TRUE" | "True" => Ok(true),
        "0" | "false" | "FALSE" | "False" | "" => Ok(false),
        other => Err(CsvError::Row { row, msg: format!("jump flag {other:?}") }),
    }
}

pub fn read_path<R: Read>(input: R) -> Result<SamplePath<f64>, CsvError> {
    let mut r = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(input);
    let header: Vec<String> = r.headers()?.iter().map(str::to_string).collect();
    if header.first().map(String::as_str) != Some("t") {
        return Err(CsvError::Header("first column must be t".into()));
    }
    let numbered = |prefix: char| -> Vec<usize> {
        header.iter().enumerate().filter(|(_, h)| h.starts_with(prefix) && h[1..].parse::<usize>().is_ok()).map(|(i, _)| i).collect()
    };
    let ycols = numbered('y');
    let xcols = numbered('x');
    let jump = header.iter().position(|h| h == "jump");
    if ycols.is_empty() {
        return Err(CsvError::Header("no y columns".into()));
    }
    for (k, &c) in ycols.iter().enumerate() {
        if header[c] != format!("y{}", k + 1) {
            return Err(CsvError::Header(format!("expected y{} at column {}", k + 1, c + 1)));
        }
    }
    for (k, &c) in xcols.iter().enumerate() {
        if header[c] != format!("x{}", k + 1) {
            return Err(CsvError::Header(format!("expected x{} at column {}", k + 1, c + 1)));
        }
    }
    let known = 1 + ycols.len() + xcols.len() + usize::from(jump.is_some());
    if known != header.len() {
        return Err(CsvError::Header(format!("unexpected columns in {header:?}")));
    }

    let (mut ts, mut ys, mut xs, mut flags) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
    for (row, rec) in r.records().enumerate() {
        let rec = rec?;
        let num = |c: usize| -> Result<f64, CsvError> {
            rec.get(c).unwrap_or("").parse::<f64>().map_err(|e| CsvError::Row { row: row + 1, msg: format!("column {}: {e}", header[c]) })
        };
        ts.push(num(0)?);
        for &c in &ycols {
            ys.push(num(c)?);
        }
        for &c in &xcols {
            xs.push(num(c)?);
        }
        if let Some(c) = jump {
            flags.push(parse_flag(rec.get(c).unwrap_or(""), row + 1)?);
        }
    }
    if ts.len() < 3 {
        return Err(CsvError::Row { row: ts.len(), msg: "need at least three observations".into() });
    }
    let n = ts.len() - 1;
    let h = (ts[n] - ts[0]) / n as f64;
    for (j, t) in ts.iter().enumerate() {
        let expected = ts[0] + j as f64 * h;
        if (t - expected).abs() > 1e-9 * (h.abs() + expected.abs()) {
            return Err(CsvError::Grid(j + 1));
        }
    }
    let mut path = SamplePath::new(ts[0], h, ycols.len(), ys)?;
    if !xcols.is_empty() {
        path = path.with_covariates(xcols.len(), xs)?;
    }
    if jump.is_some() {
        path = path.with_jump_truth(flags[1..].to_vec())?;
    }
    Ok(path)
}
