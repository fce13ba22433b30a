//! Result files: CSV, JSON lines and a plain-text table.
//!
//! CSV and JSON carry full-precision fractions; the table shows percentages
//! with two decimals.

use std::io::{BufRead, Read, Write};

use serde::{Deserialize, Serialize};

use super::{Method, SessionReport};
use crate::math::mean_std;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ResultFormat {
    Csv,
    JsonLines,
    Table,
}

impl std::str::FromStr for ResultFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "csv" => Ok(ResultFormat::Csv),
            "json" | "json-lines" | "jsonl" => Ok(ResultFormat::JsonLines),
            "table" | "text" => Ok(ResultFormat::Table),
            _ => Err(Error::ConfigInvalid(format!("unknown result format {s:?}"))),
        }
    }
}

/// Mean and standard deviation across seeds, per session.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodSummary {
    pub method: Method,
    pub runs: usize,
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
    pub pd_mean: f64,
    pub pd_std: f64,
}

/// One summary per method, in first-appearance order.
pub fn summarize(reports: &[SessionReport]) -> Vec<MethodSummary> {
    let mut methods: Vec<Method> = Vec::new();
    for r in reports {
        if !methods.contains(&r.method) {
            methods.push(r.method);
        }
    }
    methods
        .into_iter()
        .map(|method| {
            let runs: Vec<&SessionReport> = reports.iter().filter(|r| r.method == method).collect();
            let sessions = runs.iter().map(|r| r.accuracies.len()).min().unwrap_or(0);
            let (mean, std) = (0..sessions)
                .map(|t| mean_std(&runs.iter().map(|r| r.accuracies[t]).collect::<Vec<_>>()))
                .unzip();
            let (pd_mean, pd_std) = mean_std(&runs.iter().map(|r| r.pd).collect::<Vec<_>>());
            MethodSummary {
                method,
                runs: runs.len(),
                mean,
                std,
                pd_mean,
                pd_std,
            }
        })
        .collect()
}

pub fn emit_results(reports: &[SessionReport], format: ResultFormat, mut w: impl Write) -> Result<()> {
    if reports.is_empty() {
        return Err(Error::ConfigInvalid("no reports to emit".into()));
    }
    match format {
        ResultFormat::Csv => {
            let sessions = reports.iter().map(|r| r.accuracies.len()).max().unwrap_or(0);
            let mut header = vec!["method".to_string(), "seed".to_string()];
            header.extend((0..sessions).map(|t| format!("A{t}")));
            header.push("PD".into());
            header.push("config".into());
            let mut out = csv::Writer::from_writer(&mut w);
            out.write_record(&header).map_err(csv_err)?;
            for r in reports {
                let mut row = vec![r.method.to_string(), r.seed.to_string()];
                row.extend((0..sessions).map(|t| r.accuracies.get(t).map_or(String::new(), |a| a.to_string())));
                row.push(r.pd.to_string());
                row.push(r.config_fingerprint.clone());
                out.write_record(&row).map_err(csv_err)?;
            }
            out.flush()?;
        }
        ResultFormat::JsonLines => {
            for r in reports {
                serde_json::to_writer(&mut w, r).map_err(|e| Error::format("json", e.to_string()))?;
                writeln!(w)?;
            }
        }
        ResultFormat::Table => {
            let sessions = reports.iter().map(|r| r.accuracies.len()).max().unwrap_or(0);
            let width = reports.iter().map(|r| r.method.name().len()).max().unwrap_or(6).max(6);
            write!(w, "{:<width$}  {:>6}", "method", "seed")?;
            for t in 0..sessions {
                write!(w, "  {:>6}", format!("A{t}"))?;
            }
            writeln!(w, "  {:>6}", "PD")?;
            for r in reports {
                write!(w, "{:<width$}  {:>6}", r.method.name(), r.seed)?;
                for a in &r.accuracies {
                    write!(w, "  {:>6.2}", 100.0 * a)?;
                }
                writeln!(w, "  {:>6.2}", 100.0 * r.pd)?;
            }
            for s in summarize(reports) {
                write!(w, "{:<width$}  {:>6}", s.method.name(), "mean")?;
                for a in &s.mean {
                    write!(w, "  {:>6.2}", 100.0 * a)?;
                }
                writeln!(w, "  {:>6.2}", 100.0 * s.pd_mean)?;
            }
        }
    }
    w.flush()?;
    Ok(())
}

fn csv_err(e: csv::Error) -> Error {
    Error::format("csv results", e.to_string())
}

pub fn read_csv_results(r: impl Read) -> Result<Vec<SessionReport>> {
    let mut reader = csv::Reader::from_reader(r);
    let headers = reader.headers().map_err(csv_err)?.clone();
    let sessions = headers.iter().filter(|h| h.starts_with('A')).count();
    let mut out = Vec::new();
    for rec in reader.records() {
        let rec = rec.map_err(csv_err)?;
        let field = |i: usize| rec.get(i).ok_or_else(|| Error::format("csv results", "short row"));
        let num = |s: &str| {
            s.parse::<f64>()
                .map_err(|e| Error::format("csv results", e.to_string()))
        };
        let method = field(0)?.parse()?;
        let seed = field(1)?
            .parse()
            .map_err(|_| Error::format("csv results", "bad seed"))?;
        let accuracies = (0..sessions)
            .map(|t| field(2 + t))
            .filter(|s| !matches!(s, Ok("")))
            .map(|s| num(s?))
            .collect::<Result<Vec<_>>>()?;
        out.push(SessionReport {
            method,
            seed,
            accuracies,
            pd: num(field(2 + sessions)?)?,
            config_fingerprint: field(3 + sessions)?.to_string(),
            wall_clock_secs: 0.0,
        });
    }
    Ok(out)
}

pub fn read_json_results(r: impl BufRead) -> Result<Vec<SessionReport>> {
    r.lines()
        .filter(|l| !matches!(l, Ok(s) if s.trim().is_empty()))
        .map(|l| serde_json::from_str(&l?).map_err(|e| Error::format("json results", e.to_string())))
        .collect()
}
