//! Parameter and multiply-accumulate counts.
//!
//! One multiply-accumulate counts as one FLOP. Only convolutions (including the
//! context-aware network convolutions), aggregation and the classifier count;
//! batch norm, activations and pooling are free.

use std::fmt::Write as _;

use crate::backbone::{Backbone, BackboneConfig};
use crate::error::Result;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ProfileRow {
    pub name: String,
    pub params: u64,
    pub flops: u64,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ProfileReport {
    pub rows: Vec<ProfileRow>,
    pub input_hw: (usize, usize),
}

pub const PROFILE_CSV_HEADER: &str = "layer,params,flops";

impl ProfileReport {
    pub fn push(&mut self, name: &str, params: usize, flops: usize) {
        self.rows.push(ProfileRow {
            name: name.to_string(),
            params: params as u64,
            flops: flops as u64,
        });
    }

    pub fn total_params(&self) -> u64 {
        self.rows.iter().map(|r| r.params).sum()
    }

    pub fn total_flops(&self) -> u64 {
        self.rows.iter().map(|r| r.flops).sum()
    }

    /// `layer,params,flops` rows followed by a `total` row.
    pub fn to_csv(&self) -> String {
        let mut s = String::from(PROFILE_CSV_HEADER);
        s.push('\n');
        for r in &self.rows {
            let _ = writeln!(s, "{},{},{}", r.name, r.params, r.flops);
        }
        let _ = writeln!(s, "total,{},{}", self.total_params(), self.total_flops());
        s
    }

    pub fn to_table(&self) -> String {
        let width = self.rows.iter().map(|r| r.name.len()).max().unwrap_or(5).max(5);
        let mut s = String::new();
        let _ = writeln!(s, "{:<width$}  {:>12}  {:>16}", "layer", "params", "flops");
        for r in &self.rows {
            let _ = writeln!(s, "{:<width$}  {:>12}  {:>16}", r.name, r.params, r.flops);
        }
        let _ = writeln!(s, "{:<width$}  {:>12}  {:>16}", "total", self.total_params(), self.total_flops());
        s
    }

    /// One-line summary, e.g. `params=25576264 flops=4.329e9`.
    pub fn summary(&self) -> String {
        format!("params={} flops={:.3e}", self.total_params(), self.total_flops() as f64)
    }
}

/// Profiles the architecture described by `config` at `input_hw` with batch size 1.
/// Parameter values are never sampled, so the result depends on the architecture only.
pub fn profile(config: &BackboneConfig, input_hw: (usize, usize)) -> Result<ProfileReport> {
    let model = Backbone::<f32>::build_uninit(config)?;
    model.profile_report(input_hw)
}
