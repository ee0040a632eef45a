//! Corpora derived from a boxed page manifest: segmented lines, clean
//! reconstructions and 1D flattened pages.

use std::path::{Path, PathBuf};

use rayon::prelude::*;

use crate::data::manifest::{segment_lines, Manifest, ManifestEntry, SampleKind};
use crate::data::synth::write_split_manifests;
use crate::error::{Error, Result};
use crate::imageprep::{flatten_page_1d, reconstruct_clean_page, BinaryImage};

fn pages(manifest: &Manifest) -> Result<Vec<&ManifestEntry>> {
    let pages: Vec<&ManifestEntry> = manifest.entries.iter().filter(|e| e.kind == SampleKind::Page).collect();
    if pages.is_empty() {
        return Err(Error::Contract("manifest has no page entries".into()));
    }
    Ok(pages)
}

fn stem(entry: &ManifestEntry) -> String {
    entry
        .image
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "page".into())
}

fn group(entry: &ManifestEntry) -> Option<String> {
    entry.group.clone().or_else(|| Some(stem(entry)))
}

fn write_image(dir: &Path, name: String, img: &BinaryImage) -> Result<PathBuf> {
    let rel = Path::new("images").join(name);
    img.save(&dir.join(&rel))?;
    Ok(rel)
}

/// One line entry per box, sharing the page's split and group.
pub fn write_line_corpus(manifest: &Manifest, dir: &Path) -> Result<Manifest> {
    std::fs::create_dir_all(dir.join("images"))?;
    let per_page: Vec<Vec<ManifestEntry>> = pages(manifest)?
        .into_par_iter()
        .map(|e| {
            let page = manifest.load_image(e)?;
            segment_lines(&page, e)?
                .into_iter()
                .enumerate()
                .map(|(i, (img, text))| {
                    Ok(ManifestEntry {
                        split: e.split,
                        kind: SampleKind::Line,
                        image: write_image(dir, format!("{}_l{i}.png", stem(e)), &img)?,
                        transcript: text,
                        group: group(e),
                        boxes: vec![],
                        line_transcripts: vec![],
                    })
                })
                .collect()
        })
        .collect::<Result<_>>()?;
    let out = Manifest::new(dir, per_page.into_iter().flatten().collect());
    write_split_manifests(dir, &out)?;
    Ok(out)
}

/// Pages rebuilt from their boxes on an empty background.
pub fn write_clean_corpus(manifest: &Manifest, dir: &Path) -> Result<Manifest> {
    std::fs::create_dir_all(dir.join("images"))?;
    let entries: Vec<ManifestEntry> = pages(manifest)?
        .into_par_iter()
        .map(|e| {
            let page = manifest.load_image(e)?;
            let lines: Vec<BinaryImage> = e.boxes.iter().map(|b| page.crop(b)).collect::<Result<_>>()?;
            let clean = reconstruct_clean_page(page.height(), page.width(), &e.boxes, &lines)?;
            Ok(ManifestEntry {
                image: write_image(dir, format!("{}.png", stem(e)), &clean)?,
                ..e.clone()
            })
        })
        .collect::<Result<_>>()?;
    let out = Manifest::new(dir, entries);
    write_split_manifests(dir, &out)?;
    Ok(out)
}

/// Each page's lines laid end to end as a single long line.
pub fn write_flat_corpus(manifest: &Manifest, dir: &Path) -> Result<Manifest> {
    std::fs::create_dir_all(dir.join("images"))?;
    let entries: Vec<ManifestEntry> = pages(manifest)?
        .into_par_iter()
        .map(|e| {
            let page = manifest.load_image(e)?;
            let (imgs, texts): (Vec<BinaryImage>, Vec<String>) = segment_lines(&page, e)?.into_iter().unzip();
            let (flat, text) = flatten_page_1d(&imgs, &texts)?;
            Ok(ManifestEntry {
                split: e.split,
                kind: SampleKind::Line,
                image: write_image(dir, format!("{}_1d.png", stem(e)), &flat)?,
                transcript: text,
                group: group(e),
                boxes: vec![],
                line_transcripts: vec![],
            })
        })
        .collect::<Result<_>>()?;
    let out = Manifest::new(dir, entries);
    write_split_manifests(dir, &out)?;
    Ok(out)
}
