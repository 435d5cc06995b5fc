//! Append-only chain CSV: `iteration,accepted,sigma2,phi,tau2,lambda,<ψ names...>`.
//!
//! Every row is flushed as it is written, so a killed run leaves a file that
//! reads back up to its last complete line.

use std::fs::File;
use std::io::BufWriter;
use std::path::Path;

use trajgp::sampler::{Draw, PosteriorChain};

use crate::error::{CliError, Result};

const LEADING: [&str; 6] = ["iteration", "accepted", "sigma2", "phi", "tau2", "lambda"];

pub struct ChainWriter {
    inner: csv::Writer<BufWriter<File>>,
    width: usize,
}

impl ChainWriter {
    pub fn create(path: &Path, names: &[String]) -> Result<Self> {
        let file = File::create(path).map_err(|e| CliError::io(path, e))?;
        let mut inner = csv::Writer::from_writer(BufWriter::new(file));
        inner.write_record(LEADING.iter().copied().chain(names.iter().map(String::as_str)))?;
        inner.flush().map_err(|e| CliError::io(path, e))?;
        Ok(ChainWriter { inner, width: names.len() })
    }

    pub fn write(&mut self, d: &Draw) -> Result<()> {
        if d.psi.len() != self.width {
            return Err(CliError::Data(format!("draw has {} coefficients, file has {}", d.psi.len(), self.width)));
        }
        let mut rec = vec![
            d.iteration.to_string(),
            u8::from(d.accepted).to_string(),
            d.sigma2.to_string(),
            d.phi.to_string(),
            d.tau2.to_string(),
            d.lambda.map(|l| l.to_string()).unwrap_or_default(),
        ];
        rec.extend(d.psi.iter().map(f64::to_string));
        self.inner.write_record(&rec)?;
        self.inner.flush().map_err(|e| CliError::Data(e.to_string()))
    }
}

/// Loads a chain file; a trailing line without its newline is ignored.
pub fn read_chain(path: &Path, n_burnin: usize) -> Result<PosteriorChain> {
    let bytes = std::fs::read(path).map_err(|e| CliError::io(path, e))?;
    parse_chain(&bytes, n_burnin)
}

pub fn parse_chain(bytes: &[u8], n_burnin: usize) -> Result<PosteriorChain> {
    let complete = match bytes.iter().rposition(|&b| b == b'\n') {
        Some(i) => &bytes[..=i],
        None => return Err(CliError::Data("chain file has no complete header".into())),
    };
    let mut rdr = csv::ReaderBuilder::new().from_reader(complete);
    let headers = rdr.headers()?.clone();
    if headers.len() < LEADING.len() || !headers.iter().zip(LEADING).all(|(a, b)| a == b) {
        return Err(CliError::Data(format!("chain header must start with {}", LEADING.join(","))));
    }
    let names: Vec<String> = headers.iter().skip(LEADING.len()).map(str::to_string).collect();
    let mut draws = Vec::new();
    for rec in rdr.records() {
        let rec = rec?;
        let line = rec.position().map_or(0, |p| p.line());
        let num = |i: usize| -> Result<f64> {
            rec[i].parse::<f64>().map_err(|_| CliError::Data(format!("chain line {line}: field {} is `{}`", i + 1, &rec[i])))
        };
        let iteration = rec[0].parse::<usize>().map_err(|_| CliError::Data(format!("chain line {line}: bad iteration")))?;
        let accepted = match &rec[1] {
            "1" => true,
            "0" => false,
            other => return Err(CliError::Data(format!("chain line {line}: acceptance flag `{other}`"))),
        };
        let lambda = if rec[5].is_empty() { None } else { Some(num(5)?) };
        let psi = (LEADING.len()..rec.len()).map(num).collect::<Result<Vec<_>>>()?;
        draws.push(Draw {
            iteration,
            accepted,
            sigma2: num(2)?,
            phi: num(3)?,
            tau2: num(4)?,
            lambda,
            psi,
            loglik: f64::NAN,
        });
    }
    Ok(PosteriorChain { names, n_burnin, draws })
}
