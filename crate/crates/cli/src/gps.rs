//! Linear interpolation of GPS fixes onto actigraph timestamps.

use std::collections::HashMap;
use std::io::Read;
use std::path::Path;

use chrono::{DateTime, FixedOffset};

use crate::error::{CliError, Result};

/// Fixes further apart than this (strictly) are not bridged.
pub const MAX_GAP_SECONDS: f64 = 30.0;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GpsFix {
    /// Seconds on the same clock as the rows being positioned.
    pub t: f64,
    pub lon: f64,
    pub lat: f64,
}

/// Position at each time in `times`; both inputs sorted by time.
pub fn join_gps(times: &[f64], fixes: &[GpsFix]) -> Vec<Option<[f64; 2]>> {
    let mut j = 0;
    times
        .iter()
        .map(|&t| {
            while j + 1 < fixes.len() && fixes[j + 1].t <= t {
                j += 1;
            }
            let a = fixes.get(j)?;
            if a.t == t {
                return Some([a.lon, a.lat]);
            }
            if a.t > t {
                return None;
            }
            let b = fixes.get(j + 1)?;
            let gap = b.t - a.t;
            if !(gap < MAX_GAP_SECONDS) {
                return None;
            }
            let u = (t - a.t) / gap;
            Some([a.lon + u * (b.lon - a.lon), a.lat + u * (b.lat - a.lat)])
        })
        .collect()
}

/// Reads `id,timestamp,lon,lat`; fixes come back sorted, keyed by id, with
/// times in seconds since the Unix epoch.
pub fn read_gps(path: &Path) -> Result<HashMap<String, Vec<GpsFix>>> {
    let file = std::fs::File::open(path).map_err(|e| CliError::io(path, e))?;
    parse_gps(file)
}

pub fn parse_gps<R: Read>(reader: R) -> Result<HashMap<String, Vec<GpsFix>>> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
    let headers = rdr.headers()?.clone();
    let col = |name: &str| {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| CliError::Data(format!("GPS file lacks a `{name}` column")))
    };
    let (ci, ct, cx, cy) = (col("id")?, col("timestamp")?, col("lon")?, col("lat")?);
    let mut out: HashMap<String, Vec<GpsFix>> = HashMap::new();
    for rec in rdr.records() {
        let rec = rec?;
        let line = rec.position().map_or(0, |p| p.line());
        let bad = |what: &str| CliError::Data(format!("GPS line {line}: {what}"));
        let ts = DateTime::<FixedOffset>::parse_from_rfc3339(&rec[ct]).map_err(|e| bad(&e.to_string()))?;
        let lon: f64 = rec[cx].parse().map_err(|_| bad("unparseable lon"))?;
        let lat: f64 = rec[cy].parse().map_err(|_| bad("unparseable lat"))?;
        out.entry(rec[ci].to_string()).or_default().push(GpsFix { t: epoch_seconds(&ts), lon, lat });
    }
    for fixes in out.values_mut() {
        fixes.sort_by(|a, b| a.t.total_cmp(&b.t));
    }
    Ok(out)
}

pub fn epoch_seconds(ts: &DateTime<FixedOffset>) -> f64 {
    ts.timestamp_millis() as f64 * 1e-3
}

#[cfg(test)]
mod tests {
    use super::*;

    fn fix(t: f64, lon: f64) -> GpsFix {
        GpsFix { t, lon, lat: -lon }
    }

    #[test]
    fn midpoint() {
        let p = join_gps(&[10.0], &[fix(0.0, 0.0), fix(20.0, 10.0)]);
        assert_eq!(p, vec![Some([5.0, -5.0])]);
    }

    #[test]
    fn gap_rule_is_strict() {
        assert_eq!(join_gps(&[10.0], &[fix(0.0, 0.0), fix(31.0, 10.0)]), vec![None]);
        assert_eq!(join_gps(&[10.0], &[fix(0.0, 0.0), fix(30.0, 10.0)]), vec![None]);
        assert!(join_gps(&[10.0], &[fix(0.0, 0.0), fix(29.9, 10.0)])[0].is_some());
    }

    #[test]
    fn exact_fix_and_outside_range() {
        let fixes = [fix(0.0, 1.0), fix(100.0, 2.0), fix(110.0, 4.0)];
        let p = join_gps(&[-1.0, 0.0, 50.0, 100.0, 105.0, 111.0], &fixes);
        assert_eq!(p, vec![None, Some([1.0, -1.0]), None, Some([2.0, -2.0]), Some([3.0, -3.0]), None]);
    }

    #[test]
    fn parses_and_sorts() {
        let text = "id,timestamp,lon,lat\na,2020-01-01T08:00:10.000+00:00,3,4\na,2020-01-01T08:00:00.000+00:00,1,2\n";
        let g = parse_gps(text.as_bytes()).unwrap();
        assert_eq!(g["a"][0].lon, 1.0);
        assert_eq!(g["a"][1].t - g["a"][0].t, 10.0);
        assert!(parse_gps("id,timestamp,lon\n".as_bytes()).is_err());
    }
}
