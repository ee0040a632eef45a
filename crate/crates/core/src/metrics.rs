//! Character error rate with a corpus-size uncertainty band.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Multiplier on the binomial standard error, sized so that 9.10% CER over
/// 83 044 reference characters gets a band of ± 0.33.
/// Calibrated, not derived.
pub const DEFAULT_Z: f64 = 3.3;

/// Levenshtein distance with unit costs.
pub fn edit_distance<T: PartialEq>(reference: &[T], hypothesis: &[T]) -> usize {
    let mut prev: Vec<usize> = (0..=hypothesis.len()).collect();
    let mut cur = vec![0; hypothesis.len() + 1];
    for (i, r) in reference.iter().enumerate() {
        cur[0] = i + 1;
        for (j, h) in hypothesis.iter().enumerate() {
            let sub = prev[j] + usize::from(r != h);
            cur[j + 1] = sub.min(prev[j + 1] + 1).min(cur[j] + 1);
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[hypothesis.len()]
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CerReport {
    pub cer_percent: f64,
    pub uncertainty_percent: f64,
    pub n_ref_chars: usize,
    pub n_edits: usize,
    pub z: f64,
}

impl CerReport {
    pub fn from_counts(n_edits: usize, n_ref_chars: usize, z: f64) -> Result<Self> {
        if n_ref_chars == 0 {
            return Err(Error::Contract("CER over an empty reference corpus".into()));
        }
        let n = n_ref_chars as f64;
        let p = n_edits as f64 / n;
        // p can exceed 1 with many insertions; the band is then taken at p = 1.
        let pc = p.min(1.0);
        let se = (pc * (1.0 - pc) / n).sqrt();
        Ok(Self {
            cer_percent: 100.0 * p,
            uncertainty_percent: 100.0 * z * se,
            n_ref_chars,
            n_edits,
            z,
        })
    }
}

impl fmt::Display for CerReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "CER {:.2} +/- {:.2} % (edits {} / N {}, z {})",
            self.cer_percent, self.uncertainty_percent, self.n_edits, self.n_ref_chars, self.z
        )
    }
}

/// Pooled CER: total edits over total reference length.
pub fn cer<T: PartialEq + Sync>(refs: &[Vec<T>], hyps: &[Vec<T>], z: f64) -> Result<CerReport> {
    use rayon::prelude::*;
    if refs.len() != hyps.len() {
        return Err(Error::Contract(format!(
            "{} references vs {} hypotheses",
            refs.len(),
            hyps.len()
        )));
    }
    let n_ref: usize = refs.iter().map(Vec::len).sum();
    let edits: usize = refs
        .par_iter()
        .zip(hyps.par_iter())
        .map(|(r, h)| edit_distance(r, h))
        .sum();
    CerReport::from_counts(edits, n_ref, z)
}

/// Convenience over strings, counting Unicode scalar values.
pub fn cer_str(refs: &[String], hyps: &[String], z: f64) -> Result<CerReport> {
    let r: Vec<Vec<char>> = refs.iter().map(|s| s.chars().collect()).collect();
    let h: Vec<Vec<char>> = hyps.iter().map(|s| s.chars().collect()).collect();
    cer(&r, &h, z)
}
