//! Dataset CSV reading and writing.
//!
//! Header: `id,timestamp,x,y,ax,ay,az,outcome,<covariates...>,inclinometer_off_seconds`.
//! Only `id` and `timestamp` are mandatory; every other column may be absent
//! or hold empty fields. Timestamps are ISO-8601 with an explicit UTC offset
//! and are taken to mark the middle of each epoch. Internal time is seconds
//! since the earliest retained row, at millisecond resolution.

use std::collections::HashMap;
use std::io::{Read, Write};
use std::path::Path;

use chrono::{DateTime, FixedOffset, SecondsFormat, TimeDelta};
use trajgp::design::{
    clock_hour, log_mag, mag, CovariateValue, Individual, ModelSpec, Observation, TrajectoryDataset, AWAKE_WINDOW,
};

use crate::config::IngestConfig;
use crate::error::{CliError, Result};
use crate::gps::{epoch_seconds, join_gps, GpsFix};

const FIXED: [&str; 9] = ["id", "timestamp", "x", "y", "ax", "ay", "az", "outcome", "inclinometer_off_seconds"];

struct Row {
    line: u64,
    ts: DateTime<FixedOffset>,
    position: Option<[f64; 2]>,
    outcome: f64,
    covariates: Vec<CovariateValue>,
}

pub fn read_dataset(
    path: &Path,
    spec: &ModelSpec,
    opts: &IngestConfig,
    gps: Option<&HashMap<String, Vec<GpsFix>>>,
) -> Result<TrajectoryDataset> {
    let file = std::fs::File::open(path).map_err(|e| CliError::io(path, e))?;
    parse_dataset(file, spec, opts, gps)
}

fn parse_number(field: &str, line: u64, name: &str) -> Result<Option<f64>> {
    if field.is_empty() {
        return Ok(None);
    }
    field
        .parse::<f64>()
        .map(Some)
        .map_err(|_| CliError::Data(format!("line {line}: column `{name}` holds `{field}`, not a number")))
}

pub fn parse_dataset<R: Read>(
    reader: R,
    spec: &ModelSpec,
    opts: &IngestConfig,
    gps: Option<&HashMap<String, Vec<GpsFix>>>,
) -> Result<TrajectoryDataset> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
    let headers = rdr.headers()?.clone();
    let find = |name: &str| headers.iter().position(|h| h == name);
    let id_col = find("id").ok_or_else(|| CliError::Data("dataset lacks an `id` column".into()))?;
    let ts_col = find("timestamp").ok_or_else(|| CliError::Data("dataset lacks a `timestamp` column".into()))?;
    let [x_col, y_col, ax_col, ay_col, az_col, out_col, off_col] =
        ["x", "y", "ax", "ay", "az", "outcome", "inclinometer_off_seconds"].map(find);
    let cov_cols: Vec<(usize, String)> = headers
        .iter()
        .enumerate()
        .filter(|(_, h)| !FIXED.contains(h))
        .map(|(i, h)| (i, h.to_string()))
        .collect();
    for name in spec.numeric.iter().chain(spec.categorical.iter().map(|c| &c.name)) {
        if !cov_cols.iter().any(|(_, h)| h == name) {
            return Err(CliError::Data(format!("model covariate `{name}` is not a dataset column")));
        }
    }

    let mut order: Vec<String> = Vec::new();
    let mut groups: HashMap<String, Vec<Row>> = HashMap::new();
    for rec in rdr.records() {
        let rec = rec?;
        let line = rec.position().map_or(0, |p| p.line());
        let get = |c: Option<usize>| c.and_then(|c| rec.get(c)).unwrap_or("");
        let num = |c: Option<usize>, name: &str| parse_number(get(c), line, name);

        if let Some(off) = num(off_col, "inclinometer_off_seconds")? {
            if off > opts.max_inclinometer_off {
                continue;
            }
        }
        let ts = DateTime::<FixedOffset>::parse_from_rfc3339(&rec[ts_col])
            .map_err(|e| CliError::Data(format!("line {line}: timestamp `{}`: {e}", &rec[ts_col])))?;
        if opts.awake_window {
            let h = clock_hour(&ts);
            if !(h >= AWAKE_WINDOW.0 && h < AWAKE_WINDOW.1) {
                continue;
            }
        }
        let outcome = match num(out_col, "outcome")? {
            Some(y) => y,
            None => match (num(ax_col, "ax")?, num(ay_col, "ay")?, num(az_col, "az")?) {
                (Some(a), Some(b), Some(c)) => log_mag(mag(a, b, c)?)
                    .map_err(|e| CliError::Data(format!("line {line}: {e}")))?,
                _ => return Err(CliError::Data(format!("line {line}: neither an outcome nor all three axis counts"))),
            },
        };
        let position = match (num(x_col, "x")?, num(y_col, "y")?) {
            (Some(x), Some(y)) => Some([x, y]),
            _ => None,
        };
        let covariates = cov_cols
            .iter()
            .map(|(c, name)| {
                let raw = rec.get(*c).unwrap_or("");
                if spec.categorical.iter().any(|t| &t.name == name) {
                    Ok(CovariateValue::Cat(raw.to_string()))
                } else if spec.numeric.contains(name) {
                    parse_number(raw, line, name)?
                        .map(CovariateValue::Num)
                        .ok_or_else(|| CliError::Data(format!("line {line}: covariate `{name}` is empty")))
                } else {
                    Ok(raw.parse::<f64>().map_or_else(|_| CovariateValue::Cat(raw.to_string()), CovariateValue::Num))
                }
            })
            .collect::<Result<Vec<_>>>()?;

        let id = rec[id_col].to_string();
        if !groups.contains_key(&id) {
            order.push(id.clone());
        }
        groups.entry(id).or_default().push(Row { line, ts, position, outcome, covariates });
    }

    let origin = groups
        .values()
        .flatten()
        .map(|r| r.ts)
        .min()
        .ok_or_else(|| CliError::Data("no rows survive ingestion".into()))?;
    let mut individuals = Vec::with_capacity(order.len());
    for id in order {
        let mut rows = groups.remove(&id).unwrap_or_default();
        rows.sort_by_key(|r| r.ts);
        for w in rows.windows(2) {
            if w[0].ts == w[1].ts {
                return Err(CliError::Data(format!(
                    "individual {id}: duplicate timestamp {} on lines {} and {}",
                    w[0].ts, w[0].line, w[1].line
                )));
            }
        }
        if let Some(fixes) = gps.and_then(|g| g.get(&id)) {
            let times: Vec<f64> = rows.iter().map(|r| epoch_seconds(&r.ts)).collect();
            for (r, p) in rows.iter_mut().zip(join_gps(&times, fixes)) {
                r.position = p;
            }
        }
        let observations = rows
            .into_iter()
            .map(|r| Observation {
                t: (r.ts - origin).num_milliseconds() as f64 * 1e-3,
                hour: Some(clock_hour(&r.ts)),
                position: r.position,
                covariates: r.covariates,
                outcome: r.outcome,
            })
            .collect();
        individuals.push(Individual { id, observations });
    }
    let names = cov_cols.into_iter().map(|(_, n)| n).collect();
    Ok(TrajectoryDataset::new(names, individuals, Some(origin))?)
}

pub fn write_dataset(ds: &TrajectoryDataset, path: &Path) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| CliError::io(path, e))?;
    write_dataset_to(ds, std::io::BufWriter::new(file))
}

pub fn write_dataset_to<W: Write>(ds: &TrajectoryDataset, writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    let mut header: Vec<&str> = FIXED[..8].to_vec();
    header.extend(ds.covariate_names.iter().map(String::as_str));
    header.push(FIXED[8]);
    w.write_record(&header)?;
    let origin = ds.origin.unwrap_or_else(|| DateTime::UNIX_EPOCH.fixed_offset());
    for ind in &ds.individuals {
        for o in &ind.observations {
            let ts = origin + TimeDelta::milliseconds((o.t * 1000.0).round() as i64);
            let (x, y) = o.position.map_or((String::new(), String::new()), |p| (p[0].to_string(), p[1].to_string()));
            let mut rec = vec![
                ind.id.clone(),
                ts.to_rfc3339_opts(SecondsFormat::Millis, false),
                x,
                y,
                String::new(),
                String::new(),
                String::new(),
                o.outcome.to_string(),
            ];
            rec.extend(o.covariates.iter().map(|c| match c {
                CovariateValue::Num(v) => v.to_string(),
                CovariateValue::Cat(s) => s.clone(),
            }));
            rec.push(String::new());
            w.write_record(&rec)?;
        }
    }
    w.flush().map_err(|e| CliError::Data(e.to_string()))?;
    Ok(())
}
