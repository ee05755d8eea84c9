//! Tri-branch decoder for dry-electrode motor-imagery EEG.
//!
//! The pipeline, bottom to top:
//!
//! ```text
//! dataio    EEGDS v1 datasets, seeded synthetic dry EEG, windowing, protocol splits
//! dsp       rfft / analytic phase / brick-wall bandpass / RMS envelope / dominant periods
//! graphs    PLV prior, top-k sparsify + symmetrize + degree-normalize, learnable increments
//! autodiff  dense f64 tensors on a reverse-mode tape
//! model     CCG->TSG branch, TSG->CCG branch, multi-scale frequency mixer, linear fusion
//! train     cross-entropy + L1 on graph increments + L2, AdamW, cosine schedule
//! eval      accuracy / Cohen's kappa / macro-F1, per-fold protocol tables
//! cli       the `stgmfm` binary
//! ```
//!
//! Batch-level loops (per-example forward/backward, synthetic generation,
//! PLV estimation, protocol folds) go through [`par`], which uses rayon when
//! the `parallel` feature is on and runs sequentially otherwise. Reductions are
//! always performed in a fixed order, so results are bit-identical either way.

pub mod autodiff;
pub mod cli;
pub mod config;
pub mod dataio;
pub mod dsp;
pub mod eval;
pub mod graphs;
pub mod model;
pub mod par;
pub mod rng;
pub mod train;
