//! Run management for `loco`: config resolution, run directories,
//! training, resumption, evaluation, latent export and ablations.

pub mod app;
pub mod commands;
pub mod rundir;
