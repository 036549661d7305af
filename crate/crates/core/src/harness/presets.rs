//! Named experiment configs shipped with the crate.

use crate::error::{LoftError, Result};
use crate::harness::config::ConfigFile;

/// `(name, summary, config JSON)`.
pub const PRESETS: &[(&str, &str, &str)] = &[
    ("fig2", "methods compared on a 128x64 rank-8 factorization target, shared stepsize", include_str!("../../presets/fig2.json")),
    ("fig2_full", "the fig2 comparison at 1024x512", include_str!("../../presets/fig2_full.json")),
    ("lemma1", "momentum LoFT vs full momentum GD from the target's subspace", include_str!("../../presets/lemma1.json")),
    ("lemma2", "LoFT-GD with unit stepsize on the half loss (alternating least squares)", include_str!("../../presets/lemma2.json")),
    ("fullrank_recovery", "LoFT-AdamW and AdamW at full rank on an 8x8 target", include_str!("../../presets/fullrank_recovery.json")),
    ("ablation_grid", "LoFT-AdamW with alternation and calibration toggled", include_str!("../../presets/ablation_grid.json")),
];

pub fn preset_names() -> impl Iterator<Item = &'static str> {
    PRESETS.iter().map(|p| p.0)
}

/// The raw JSON text of a preset.
pub fn preset_json(name: &str) -> Result<&'static str> {
    PRESETS
        .iter()
        .find(|p| p.0 == name)
        .map(|p| p.2)
        .ok_or_else(|| LoftError::UnknownPreset(name.to_string()))
}

pub fn preset(name: &str) -> Result<ConfigFile> {
    ConfigFile::parse(preset_json(name)?)
}
