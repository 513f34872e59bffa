//! Summary tables over a results CSV: per-adapter success macro-averaged over
//! perturbation families, and parameters against success.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use serde::Serialize;

use lab_core::error::Error;

use crate::error::Result;
use crate::sweep::{parse_perturb, ResultRow, CSV_HEADER};

/// Family of the unperturbed rows.
pub const SOURCE_FAMILY: &str = "source";

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct AdapterSummary {
    pub adapter: String,
    /// Mean success per family.
    pub families: BTreeMap<String, f64>,
    /// Mean over perturbation families; the source family only counts when
    /// nothing else is present.
    pub average: f64,
    pub trainable_params: usize,
    pub failed_cells: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Report {
    pub adapters: Vec<AdapterSummary>,
}

/// Parameters in millions, three decimals.
pub fn fmt_params_m(n: usize) -> String {
    format!("{:.3}", n as f64 / 1e6)
}

fn parse_err(line: usize, message: impl Into<String>) -> Error {
    Error::Parse {
        line,
        message: message.into(),
    }
}

pub fn read_rows(text: &str) -> Result<Vec<ResultRow>> {
    let mut rdr = csv::ReaderBuilder::new().from_reader(text.as_bytes());
    let header = rdr.headers().map_err(|e| parse_err(1, e.to_string()))?;
    if header.iter().ne(CSV_HEADER) {
        return Err(parse_err(1, format!("expected header {}", CSV_HEADER.join(","))).into());
    }
    let mut rows = Vec::new();
    for rec in rdr.deserialize::<ResultRow>() {
        let row = rec.map_err(|e| {
            let line = e.position().map_or(0, |p| p.line() as usize);
            parse_err(line, e.to_string())
        })?;
        rows.push(row);
    }
    Ok(rows)
}

fn family(perturb: &str) -> Result<&'static str> {
    Ok(parse_perturb(perturb)?.map_or(SOURCE_FAMILY, |p| p.family()))
}

pub fn summarize(rows: &[ResultRow]) -> Result<Report> {
    // adapter -> family -> (sum, count)
    let mut acc: BTreeMap<&str, BTreeMap<&str, (f64, usize)>> = BTreeMap::new();
    let mut params: BTreeMap<&str, usize> = BTreeMap::new();
    let mut failed: BTreeMap<&str, usize> = BTreeMap::new();
    let mut order: Vec<&str> = Vec::new();
    for r in rows {
        if !order.contains(&r.adapter.as_str()) {
            order.push(&r.adapter);
        }
        match r.success_rate {
            Some(s) => {
                let e = acc.entry(&r.adapter).or_default().entry(family(&r.perturb)?).or_default();
                e.0 += s;
                e.1 += 1;
                let p = params.entry(&r.adapter).or_default();
                *p = (*p).max(r.trainable_params);
            }
            None => *failed.entry(&r.adapter).or_default() += 1,
        }
    }
    let adapters = order
        .into_iter()
        .map(|a| {
            let families: BTreeMap<String, f64> = acc
                .get(a)
                .map(|m| m.iter().map(|(f, (s, n))| (f.to_string(), s / *n as f64)).collect())
                .unwrap_or_default();
            let perturbed: Vec<f64> = families
                .iter()
                .filter(|(f, _)| f.as_str() != SOURCE_FAMILY)
                .map(|(_, v)| *v)
                .collect();
            let average = if perturbed.is_empty() {
                families.get(SOURCE_FAMILY).copied().unwrap_or(f64::NAN)
            } else {
                perturbed.iter().sum::<f64>() / perturbed.len() as f64
            };
            AdapterSummary {
                adapter: a.to_string(),
                families,
                average,
                trainable_params: params.get(a).copied().unwrap_or(0),
                failed_cells: failed.get(a).copied().unwrap_or(0),
            }
        })
        .collect();
    Ok(Report { adapters })
}

pub fn render_text(report: &Report) -> String {
    let fams: Vec<String> = {
        let mut f: Vec<String> = report.adapters.iter().flat_map(|a| a.families.keys().cloned()).collect();
        f.sort();
        f.dedup();
        f
    };
    let mut out = String::new();
    let _ = write!(out, "{:<14}", "adapter");
    for f in &fams {
        let _ = write!(out, " {f:>9}");
    }
    let _ = writeln!(out, " {:>9}", "average");
    for a in &report.adapters {
        let _ = write!(out, "{:<14}", a.adapter);
        for f in &fams {
            match a.families.get(f) {
                Some(v) => {
                    let _ = write!(out, " {:>9.3}", v);
                }
                None => {
                    let _ = write!(out, " {:>9}", "-");
                }
            }
        }
        let _ = writeln!(out, " {:>9.3}", a.average);
    }
    let _ = writeln!(out);
    let _ = writeln!(out, "{:<14} {:>10} {:>9}", "adapter", "params(M)", "success");
    for a in &report.adapters {
        let _ = writeln!(out, "{:<14} {:>10} {:>9.3}", a.adapter, fmt_params_m(a.trainable_params), a.average);
    }
    out
}

pub fn load(path: &Path) -> Result<Report> {
    summarize(&read_rows(&std::fs::read_to_string(path)?)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use lab_core::adapters::ftm_param_count;

    const HEAD: &str = "cell_id,adapter,perturb,severity,success_rate,trainable_params,adapt_steps,wall_time_s\n";

    #[test]
    fn single_row_average_is_the_row() {
        let r = summarize(&read_rows(&format!("{HEAD}c000,ftm,orbit:30,30,0.62,128,2000,1.5\n")).unwrap()).unwrap();
        assert_eq!(r.adapters.len(), 1);
        assert_eq!(r.adapters[0].average, 0.62);
        assert_eq!(r.adapters[0].trainable_params, 128);
    }

    #[test]
    fn full_scale_ftm_renders_as_thousandths_of_a_million() {
        assert_eq!(ftm_param_count(2048), 4096);
        assert_eq!(fmt_params_m(ftm_param_count(2048)), "0.004");
    }

    #[test]
    fn malformed_csv_reports_line() {
        let text = format!("{HEAD}c000,ftm,orbit:30,30,0.5,128,2000,1.0\nc001,ftm,orbit:30,30,abc,128,2000,1.0\n");
        match read_rows(&text) {
            Err(crate::error::CliError::Core(Error::Parse { line, .. })) => assert_eq!(line, 3),
            other => panic!("unexpected {other:?}"),
        }
        assert!(read_rows("a,b\n1,2\n").is_err());
        assert!(summarize(&read_rows(&format!("{HEAD}c000,ftm,warp:3,3,0.5,1,1,1\n")).unwrap()).is_err());
    }

    #[test]
    fn failed_cells_are_counted_not_averaged() {
        let text = format!("{HEAD}c000,none,none,,0.9,0,0,0\nc001,none,orbit:30,30,,0,0,0\n");
        let r = summarize(&read_rows(&text).unwrap()).unwrap();
        assert_eq!(r.adapters[0].failed_cells, 1);
        assert_eq!(r.adapters[0].average, 0.9);
    }
}
