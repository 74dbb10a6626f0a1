//! Identification from boundary measurements: the DtN quadratic form at
//! equilibrium, a low-dimensional γ fit, Dirichlet-series spectral fitting,
//! eigenspace matching, κ recovery and the end-to-end pipeline.

pub mod dtn_form;
pub mod eigenspace;
pub mod gamma_fit;
pub mod kappa;
pub mod kappa_fit;
pub mod pipeline;
pub mod resample;
pub mod series;
