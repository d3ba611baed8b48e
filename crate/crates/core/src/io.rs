//! Long-format CSV ingestion and emission.
//!
//! Units file: `unit_id,treatment,x1,…,xd`. Observations file:
//! `unit_id,value`, one raw observation per row, any order.

use std::collections::HashMap;
use std::fs::File;
use std::io::{Read, Write};
use std::path::Path;

use crate::dataset::{Dataset, Unit};
use crate::distspace::{empirical_quantile_function, EmpiricalSample, QuantileGrid};
use crate::error::{Error, Result};

fn line_of(r: &csv::StringRecord) -> u64 {
    r.position().map_or(0, |p| p.line())
}

fn parse_num(field: &str, what: &str, file: &str, line: u64) -> Result<f64> {
    let v: f64 = field.trim().parse().map_err(|_| {
        Error::Data(format!(
            "{file} line {line}: {what} {field:?} is not a number"
        ))
    })?;
    if !v.is_finite() {
        return Err(Error::Data(format!(
            "{file} line {line}: {what} must be finite"
        )));
    }
    Ok(v)
}

fn reader<R: Read>(src: R) -> csv::Reader<R> {
    csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_reader(src)
}

fn data_err(file: &str) -> impl Fn(csv::Error) -> Error + '_ {
    move |e| Error::Data(format!("{file}: {e}"))
}

/// Parse a dataset from its two CSV sources.
pub fn read_dataset<U: Read, O: Read>(
    units: U,
    observations: O,
    grid: &QuantileGrid,
) -> Result<Dataset> {
    let (uf, of) = ("units", "observations");
    let mut ur = reader(units);
    let header = ur.headers().map_err(data_err(uf))?.clone();
    if header.len() < 2 || &header[0] != "unit_id" || &header[1] != "treatment" {
        return Err(Error::Data(format!(
            "{uf} line 1: header must start with unit_id,treatment"
        )));
    }
    for (k, name) in header.iter().skip(2).enumerate() {
        if name != format!("x{}", k + 1) {
            return Err(Error::Data(format!(
                "{uf} line 1: expected column x{}, found {name:?}",
                k + 1
            )));
        }
    }
    let d = header.len() - 2;

    let mut rows: Vec<(String, f64, Vec<f64>)> = Vec::new();
    let mut index: HashMap<String, usize> = HashMap::new();
    for rec in ur.records() {
        let rec = rec.map_err(data_err(uf))?;
        let line = line_of(&rec);
        if rec.len() != d + 2 {
            return Err(Error::Data(format!(
                "{uf} line {line}: expected {} fields, found {}",
                d + 2,
                rec.len()
            )));
        }
        let id = rec[0].to_string();
        if id.is_empty() {
            return Err(Error::Data(format!("{uf} line {line}: empty unit_id")));
        }
        let a = parse_num(&rec[1], "treatment", uf, line)?;
        let x = (0..d)
            .map(|k| {
                if rec[k + 2].is_empty() {
                    Err(Error::Data(format!(
                        "{uf} line {line}: missing covariate x{}",
                        k + 1
                    )))
                } else {
                    parse_num(&rec[k + 2], &format!("covariate x{}", k + 1), uf, line)
                }
            })
            .collect::<Result<Vec<_>>>()?;
        if index.insert(id.clone(), rows.len()).is_some() {
            return Err(Error::Data(format!(
                "{uf} line {line}: duplicate unit_id {id:?}"
            )));
        }
        rows.push((id, a, x));
    }
    if rows.is_empty() {
        return Err(Error::Data(format!("{uf}: no units")));
    }

    let mut or = reader(observations);
    let oh = or.headers().map_err(data_err(of))?.clone();
    if oh.len() != 2 || &oh[0] != "unit_id" || &oh[1] != "value" {
        return Err(Error::Data(format!(
            "{of} line 1: header must be unit_id,value"
        )));
    }
    let mut obs: Vec<Vec<f64>> = vec![Vec::new(); rows.len()];
    let mut any = false;
    for rec in or.records() {
        let rec = rec.map_err(data_err(of))?;
        let line = line_of(&rec);
        let i = *index.get(&rec[0]).ok_or_else(|| {
            Error::Data(format!("{of} line {line}: unknown unit_id {:?}", &rec[0]))
        })?;
        obs[i].push(parse_num(&rec[1], "value", of, line)?);
        any = true;
    }
    if !any {
        return Err(Error::Data(format!("{of}: no observations")));
    }

    let units = rows
        .into_iter()
        .zip(obs)
        .map(|((id, a, x), o)| {
            if o.is_empty() {
                return Err(Error::Data(format!("unit {id:?} has no observations")));
            }
            let yq = empirical_quantile_function(&EmpiricalSample::new(o)?, grid);
            Unit::new(id, a, x, yq)
        })
        .collect::<Result<Vec<_>>>()?;
    Dataset::new(units)
}

pub fn load_dataset(units: &Path, observations: &Path, grid: &QuantileGrid) -> Result<Dataset> {
    let open = |p: &Path| {
        File::open(p).map_err(|e| Error::Data(format!("cannot open {}: {e}", p.display())))
    };
    read_dataset(open(units)?, open(observations)?, grid)
}

/// Units file for `(id, treatment, covariates)` rows.
pub fn write_units<W: Write>(out: W, units: &[(&str, f64, &[f64])]) -> Result<()> {
    let d = units.first().map_or(0, |u| u.2.len());
    let mut w = csv::Writer::from_writer(out);
    let mut header = vec!["unit_id".to_string(), "treatment".to_string()];
    header.extend((1..=d).map(|k| format!("x{k}")));
    w.write_record(&header).map_err(data_err("units"))?;
    for (id, a, x) in units {
        let mut row = vec![id.to_string(), a.to_string()];
        row.extend(x.iter().map(|v| v.to_string()));
        w.write_record(&row).map_err(data_err("units"))?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_observations<W: Write>(out: W, observations: &[(&str, &[f64])]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["unit_id", "value"])
        .map_err(data_err("observations"))?;
    for (id, vals) in observations {
        for v in vals.iter() {
            w.write_record([id.to_string(), v.to_string()])
                .map_err(data_err("observations"))?;
        }
    }
    w.flush()?;
    Ok(())
}
