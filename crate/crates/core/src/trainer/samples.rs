use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::ctc::min_frames;
use crate::data::{Manifest, ManifestEntry, SampleKind, Split, SymbolTable};
use crate::error::{Error, Result};
use crate::imageprep::{deslant, resize_line, resize_page, BinaryImage};
use crate::model::ModelConfig;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PrepOptions {
    /// Oversample factor for page entries; lines always use height 64.
    pub l: usize,
    pub deslant: bool,
}

impl Default for PrepOptions {
    fn default() -> Self {
        Self { l: 1, deslant: false }
    }
}

/// A model-ready input with its encoded target.
#[derive(Clone, Debug, PartialEq)]
pub struct PreparedSample {
    pub name: String,
    pub input: Tensor,
    pub transcript: String,
    pub target: Vec<usize>,
}

pub fn prepare_image(img: &BinaryImage, kind: SampleKind, opts: &PrepOptions) -> Result<Tensor> {
    let img = if opts.deslant { deslant(img) } else { img.clone() };
    match kind {
        SampleKind::Line => resize_line(&img),
        SampleKind::Page => resize_page(&img, opts.l),
    }
}

pub fn prepare_entry(
    manifest: &Manifest,
    entry: &ManifestEntry,
    symbols: &SymbolTable,
    opts: &PrepOptions,
) -> Result<PreparedSample> {
    let img = manifest.load_image(entry)?;
    Ok(PreparedSample {
        name: entry.image.display().to_string(),
        input: prepare_image(&img, entry.kind, opts)?,
        transcript: entry.transcript.clone(),
        target: symbols.encode(&entry.transcript)?,
    })
}

/// Loads and preprocesses every entry of `split`, in manifest order.
pub fn prepare_split(
    manifest: &Manifest,
    split: Split,
    symbols: &SymbolTable,
    opts: &PrepOptions,
) -> Result<Vec<PreparedSample>> {
    manifest
        .split(split)
        .into_par_iter()
        .map(|e| prepare_entry(manifest, e, symbols, opts))
        .collect()
}

/// Why a sample cannot be trained on with CTC.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Rejection {
    pub name: String,
    pub reason: String,
}

/// Splits samples into those whose output length admits their target
/// and those that do not.
pub fn feasibility_check<'a>(
    config: &ModelConfig,
    samples: &'a [PreparedSample],
) -> (Vec<&'a PreparedSample>, Vec<Rejection>) {
    let mut ok = Vec::new();
    let mut rejected = Vec::new();
    for s in samples {
        let (h, w) = (s.input.shape()[1], s.input.shape()[2]);
        match config.output_lengths(h, w) {
            Ok((hh, ww)) => {
                let need = min_frames(&s.target);
                if hh * ww >= need {
                    ok.push(s);
                } else {
                    rejected.push(Rejection {
                        name: s.name.clone(),
                        reason: format!("{} frames for a target needing {need}", hh * ww),
                    });
                }
            }
            Err(e) => rejected.push(Rejection {
                name: s.name.clone(),
                reason: e.to_string(),
            }),
        }
    }
    (ok, rejected)
}

pub(crate) fn all_rejected(rejected: &[Rejection]) -> Error {
    let listing: Vec<String> = rejected
        .iter()
        .take(5)
        .map(|r| format!("{}: {}", r.name, r.reason))
        .collect();
    Error::Training(format!(
        "all {} training samples are infeasible ({}{})",
        rejected.len(),
        listing.join("; "),
        if rejected.len() > 5 { "; ..." } else { "" }
    ))
}
