//! Experiment harness around `cotlab-core`: command line, file formats,
//! multi-regime runs and SVG plots.

pub mod checks;
pub mod cli;
pub mod experiment;
pub mod formats;
pub mod svg;
