//! Power-system state estimation and binary switch-state control.
//!
//! - [`network`]: buses, branches and the bus admittance matrix
//! - [`power_flow`]: Newton–Raphson AC power flow (the truth oracle)
//! - [`measurement`]: measurement functions, Jacobian and synthetic data
//! - [`wls`]: weighted least-squares Gauss–Newton estimator
//! - [`campaign`]: seeded Monte-Carlo estimation campaigns
//! - [`controller`]: switched-system Bellman controller and grid oracle
//! - [`case`], [`scenario`], [`formats`], [`cli`]: files, snapshot runs
//!   and the command line
//!
//! Data-parallel loops go through [`par`], which falls back to sequential
//! execution when the `parallel` feature is disabled.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod campaign;
pub mod case;
pub mod cli;
pub mod controller;
pub mod formats;
pub mod measurement;
pub mod network;
pub mod par;
pub mod power_flow;
pub mod scenario;
pub mod wls;
