//! Stochastic variational trainer: Adam groups, source staging, discrete
//! restructuring proposals, checkpointing.
