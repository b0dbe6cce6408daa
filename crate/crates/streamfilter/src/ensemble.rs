//! Ensembles: ordered collections of S parameter vectors approximating a
//! posterior at time t, the unit every sampler consumes and produces.

use std::io::{BufRead, Write};

use crate::error::{Error, Result};
use crate::textio::{fmt17, header_field, parse_f64, parse_usize};

#[derive(Clone, Debug, PartialEq)]
pub struct Ensemble {
    t: usize,
    samples: Vec<Vec<f64>>,
}

impl Ensemble {
    pub fn new(t: usize, samples: Vec<Vec<f64>>) -> Result<Self> {
        if samples.len() < 2 {
            return Err(Error::contract("ensemble needs at least 2 members"));
        }
        let dim = samples[0].len();
        if dim == 0 || samples.iter().any(|s| s.len() != dim) {
            return Err(Error::contract("ensemble members must share a positive dimension"));
        }
        Ok(Ensemble { t, samples })
    }

    pub fn t(&self) -> usize {
        self.t
    }

    pub fn size(&self) -> usize {
        self.samples.len()
    }

    pub fn dim(&self) -> usize {
        self.samples[0].len()
    }

    pub fn samples(&self) -> &[Vec<f64>] {
        &self.samples
    }

    pub fn into_samples(self) -> Vec<Vec<f64>> {
        self.samples
    }

    /// All members' values at one coordinate.
    pub fn coordinate(&self, j: usize) -> Vec<f64> {
        self.samples.iter().map(|s| s[j]).collect()
    }

    /// Per-coordinate sample means.
    pub fn mean(&self) -> Vec<f64> {
        let d = self.dim();
        let mut m = vec![0.0; d];
        for s in &self.samples {
            for (mi, si) in m.iter_mut().zip(s) {
                *mi += si;
            }
        }
        let inv = 1.0 / self.size() as f64;
        for mi in &mut m {
            *mi *= inv;
        }
        m
    }

    /// Empirical covariance (denominator S - 1).
    pub fn covariance(&self) -> Vec<Vec<f64>> {
        let d = self.dim();
        let m = self.mean();
        let mut c = vec![vec![0.0; d]; d];
        for s in &self.samples {
            for i in 0..d {
                let di = s[i] - m[i];
                for j in 0..=i {
                    c[i][j] += di * (s[j] - m[j]);
                }
            }
        }
        let inv = 1.0 / (self.size() - 1) as f64;
        for i in 0..d {
            for j in 0..=i {
                c[i][j] *= inv;
                c[j][i] = c[i][j];
            }
        }
        c
    }
}

/// A particle population with unnormalized log weights (bootstrap SMC only;
/// everything else works with equally weighted ensembles).
#[derive(Clone, Debug)]
pub struct WeightedEnsemble {
    pub t: usize,
    pub samples: Vec<Vec<f64>>,
    pub log_weights: Vec<f64>,
}

impl WeightedEnsemble {
    pub fn equal_weights(t: usize, samples: Vec<Vec<f64>>) -> Self {
        let n = samples.len();
        WeightedEnsemble {
            t,
            samples,
            log_weights: vec![0.0; n],
        }
    }

    pub fn size(&self) -> usize {
        self.samples.len()
    }

    /// Normalized weights; errors if every weight underflows.
    pub fn normalized_weights(&self) -> Result<Vec<f64>> {
        let max = self
            .log_weights
            .iter()
            .cloned()
            .fold(f64::NEG_INFINITY, f64::max);
        if !max.is_finite() {
            return Err(Error::DegenerateWeights);
        }
        let unnorm: Vec<f64> = self.log_weights.iter().map(|lw| (lw - max).exp()).collect();
        let total: f64 = unnorm.iter().sum();
        if !(total > 0.0) {
            return Err(Error::DegenerateWeights);
        }
        Ok(unnorm.into_iter().map(|w| w / total).collect())
    }

    pub fn into_ensemble(self) -> Result<Ensemble> {
        Ensemble::new(self.t, self.samples)
    }
}

/// Write an ensemble as delimited text: header with t, S, model id, and seed
/// lineage, then one row per (member, coordinate, value).
pub fn write_ensemble(
    ens: &Ensemble,
    model_id: &str,
    seed_lineage: u64,
    out: &mut impl Write,
) -> Result<()> {
    writeln!(out, "# ensemble v1")?;
    writeln!(
        out,
        "# t={} S={} model={} seed={}",
        ens.t(),
        ens.size(),
        model_id,
        seed_lineage
    )?;
    writeln!(out, "s,coord,value")?;
    for (s, member) in ens.samples().iter().enumerate() {
        for (j, v) in member.iter().enumerate() {
            writeln!(out, "{},{},{}", s + 1, j + 1, fmt17(*v))?;
        }
    }
    Ok(())
}

pub fn read_ensemble(input: &mut impl BufRead) -> Result<(Ensemble, String, u64)> {
    let mut t = None;
    let mut size = None;
    let mut model_id = String::new();
    let mut seed = 0u64;
    let mut rows: Vec<(usize, usize, f64)> = Vec::new();
    let mut saw_columns = false;
    for (lineno, line) in input.lines().enumerate() {
        let lineno = lineno + 1;
        let line = line?;
        let trimmed = line.trim();
        if trimmed.is_empty() {
            continue;
        }
        if let Some(rest) = trimmed.strip_prefix('#') {
            let rest = rest.trim();
            if rest.contains("t=") && rest.contains("S=") {
                t = Some(parse_usize(header_field(rest, "t", lineno)?, lineno)?);
                size = Some(parse_usize(header_field(rest, "S", lineno)?, lineno)?);
                model_id = header_field(rest, "model", lineno)?.to_string();
                seed = parse_usize(header_field(rest, "seed", lineno)?, lineno)? as u64;
            }
            continue;
        }
        if !saw_columns {
            if trimmed != "s,coord,value" {
                return Err(Error::Parse {
                    line: lineno,
                    msg: format!("expected column header 's,coord,value', got {trimmed:?}"),
                });
            }
            saw_columns = true;
            continue;
        }
        let mut fields = trimmed.split(',');
        let s = parse_usize(fields.next().unwrap_or(""), lineno)?;
        let j = parse_usize(fields.next().unwrap_or(""), lineno)?;
        let v = parse_f64(fields.next().unwrap_or(""), lineno)?;
        rows.push((s, j, v));
    }
    let t = t.ok_or(Error::Parse {
        line: 0,
        msg: "missing ensemble header".into(),
    })?;
    let size = size.unwrap();
    let dim = rows.iter().map(|r| r.1).max().unwrap_or(0);
    let mut samples = vec![vec![0.0; dim]; size];
    for (s, j, v) in rows {
        if s < 1 || s > size || j < 1 || j > dim {
            return Err(Error::Parse {
                line: 0,
                msg: format!("index ({s},{j}) out of range"),
            });
        }
        samples[s - 1][j - 1] = v;
    }
    Ok((Ensemble::new(t, samples)?, model_id, seed))
}
