//! Symbol tables, corpus manifests and the synthetic glyph-page generator.

mod derived;
mod manifest;
mod symbols;
mod synth;

pub use derived::{write_clean_corpus, write_flat_corpus, write_line_corpus};
pub use manifest::{segment_lines, Manifest, ManifestEntry, SampleKind, Split, MANIFEST_FORMAT, MANIFEST_VERSION};
pub use symbols::SymbolTable;
pub use synth::{
    corpus_page, gen_synthetic_page, write_split_manifests, write_synthetic_corpus, CorpusSpec, Glyph, GlyphSet,
    Layout, NoiseParams, PageSpec, SyntheticPage, LINE_PITCH,
};
