//! Character error rate and training-time statistics.

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Levenshtein distance over codepoints with unit costs.
pub fn edit_distance(a: &str, b: &str) -> usize {
    let a: Vec<char> = a.chars().collect();
    let b: Vec<char> = b.chars().collect();
    let mut prev: Vec<usize> = (0..=b.len()).collect();
    let mut cur = vec![0; b.len() + 1];
    for (i, ca) in a.iter().enumerate() {
        cur[0] = i + 1;
        for (j, cb) in b.iter().enumerate() {
            let sub = prev[j] + usize::from(ca != cb);
            cur[j + 1] = sub.min(prev[j + 1] + 1).min(cur[j] + 1);
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// Micro-averaged CER in percent over `(reference, hypothesis)` pairs. Not
/// clamped: long hypotheses can push it past 100.
pub fn corpus_cer<R: AsRef<str>, H: AsRef<str>>(pairs: &[(R, H)]) -> Result<f64> {
    let (mut edits, mut chars) = (0usize, 0usize);
    for (r, h) in pairs {
        edits += edit_distance(r.as_ref(), h.as_ref());
        chars += r.as_ref().chars().count();
    }
    if chars == 0 {
        return Err(Error::InvalidArgument(
            "CER needs at least one non-empty reference".into(),
        ));
    }
    Ok(100.0 * edits as f64 / chars as f64)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub cum_seconds: f64,
    pub train_loss: f64,
    pub val_cer: f64,
}

/// Per-epoch training log.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct RunRecord {
    epochs: Vec<EpochRecord>,
}

impl RunRecord {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn epochs(&self) -> &[EpochRecord] {
        &self.epochs
    }

    pub fn len(&self) -> usize {
        self.epochs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.epochs.is_empty()
    }

    /// Appends an epoch; time must strictly increase and CER be non-negative.
    pub fn push(&mut self, rec: EpochRecord) -> Result<()> {
        if rec.val_cer.is_nan() || rec.val_cer < 0.0 {
            return Err(Error::InvalidArgument(format!(
                "validation CER {} is negative",
                rec.val_cer
            )));
        }
        if !rec.cum_seconds.is_finite() || rec.cum_seconds < 0.0 {
            return Err(Error::InvalidArgument(format!(
                "bad timestamp {}",
                rec.cum_seconds
            )));
        }
        if let Some(last) = self.epochs.last() {
            if rec.cum_seconds <= last.cum_seconds {
                return Err(Error::InvalidArgument(format!(
                    "cumulative time {} does not exceed previous {}",
                    rec.cum_seconds, last.cum_seconds
                )));
            }
        }
        self.epochs.push(rec);
        Ok(())
    }

    pub fn from_series(seconds: &[f64], cer: &[f64]) -> Result<Self> {
        if seconds.len() != cer.len() {
            return Err(Error::InvalidArgument("series lengths differ".into()));
        }
        let mut run = Self::new();
        for (i, (&s, &c)) in seconds.iter().zip(cer).enumerate() {
            run.push(EpochRecord {
                epoch: i + 1,
                cum_seconds: s,
                train_loss: 0.0,
                val_cer: c,
            })?;
        }
        Ok(run)
    }

    pub fn min_cer(&self) -> Option<f64> {
        self.epochs.iter().map(|e| e.val_cer).min_by(f64::total_cmp)
    }

    pub fn write_csv(&self, out: impl Write) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        for e in &self.epochs {
            w.serialize(e)
                .map_err(|e| Error::format("run record", e.to_string()))?;
        }
        w.flush()
            .map_err(|e| Error::format("run record", e.to_string()))
    }

    pub fn read_csv(input: impl Read) -> Result<Self> {
        let mut run = Self::new();
        for row in csv::Reader::from_reader(input).deserialize::<EpochRecord>() {
            let rec = row.map_err(|e| Error::format("run record", e.to_string()))?;
            run.push(rec)
                .map_err(|e| Error::format("run record", e.to_string()))?;
        }
        Ok(run)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let f = std::fs::File::create(path.as_ref()).map_err(|e| Error::io(&path, e))?;
        self.write_csv(f)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let f = std::fs::File::open(path.as_ref()).map_err(|e| Error::io(&path, e))?;
        Self::read_csv(f)
    }
}

/// Time of the first epoch whose CER drops below `factor` times the run
/// minimum. `None` only for an empty run.
pub fn time_to_threshold(run: &RunRecord, factor: f64) -> Option<f64> {
    let m = run.min_cer()?;
    let threshold = factor * m;
    run.epochs
        .iter()
        .find(|e| e.val_cer < threshold || e.val_cer == m)
        .map(|e| e.cum_seconds)
}
