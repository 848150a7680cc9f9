//! Per-iteration trace output in a fixed CSV layout.
//!
//! One row per search iteration (plus a row zero summarizing warm-up and the
//! initial base evaluation). Infeasible outcomes render as `inf`, cells that
//! were never produced (skipped iteration, unused contrast) stay empty.
//! Costs use Rust's shortest round-trip float formatting, so traces from
//! identical seeds are byte-identical; the `wall_seconds` column is the one
//! exception callers should ignore when comparing runs under a wall clock.

use std::io::{self, Write};

use crate::bandit::Arm;
use crate::evaluator::Fidelity;
use crate::oracle::CostOutcome;

pub const TRACE_COLUMNS: [&str; 13] = [
    "iteration",
    "wall_seconds",
    "arm_selected",
    "fidelity",
    "c_bb",
    "c_bc",
    "c_cb",
    "c_cc",
    "delta_sparse",
    "delta_dense",
    "best_cost",
    "real_evals_cumulative",
    "sim_evals_cumulative",
];

/// One trace row. `None` cost cells mean the cell was not evaluated.
#[derive(Debug, Clone)]
pub struct TraceRow {
    pub iteration: u64,
    pub wall_seconds: f64,
    pub arm_selected: Option<Arm>,
    pub fidelity: Fidelity,
    pub c_bb: Option<CostOutcome>,
    pub c_bc: Option<CostOutcome>,
    pub c_cb: Option<CostOutcome>,
    pub c_cc: Option<CostOutcome>,
    pub delta_sparse: Option<f64>,
    pub delta_dense: Option<f64>,
    pub best_cost: Option<f64>,
    pub real_evals: u64,
    pub sim_evals: u64,
}

fn cost_cell(c: Option<CostOutcome>) -> String {
    match c {
        None => String::new(),
        Some(CostOutcome::Infeasible) => "inf".to_string(),
        Some(CostOutcome::Cost(v)) => format!("{v}"),
    }
}

fn float_cell(v: Option<f64>) -> String {
    v.map(|v| format!("{v}")).unwrap_or_default()
}

pub fn header() -> String {
    TRACE_COLUMNS.join(",")
}

pub fn row_line(row: &TraceRow) -> String {
    [
        row.iteration.to_string(),
        format!("{:.6}", row.wall_seconds),
        row.arm_selected.map(|a| a.label().to_string()).unwrap_or_default(),
        row.fidelity.label().to_string(),
        cost_cell(row.c_bb),
        cost_cell(row.c_bc),
        cost_cell(row.c_cb),
        cost_cell(row.c_cc),
        float_cell(row.delta_sparse),
        float_cell(row.delta_dense),
        float_cell(row.best_cost),
        row.real_evals.to_string(),
        row.sim_evals.to_string(),
    ]
    .join(",")
}

/// Write a complete single-run trace file.
pub fn write_trace<W: Write>(mut w: W, rows: &[TraceRow]) -> io::Result<()> {
    writeln!(w, "{}", header())?;
    for row in rows {
        writeln!(w, "{}", row_line(row))?;
    }
    Ok(())
}

/// Benchmark traces interleave many runs, so each row is prefixed with the
/// scenario name and seed.
pub fn write_bench_header<W: Write>(mut w: W) -> io::Result<()> {
    writeln!(w, "scenario,seed,{}", header())
}

pub fn write_bench_rows<W: Write>(
    mut w: W,
    scenario: &str,
    seed: u64,
    rows: &[TraceRow],
) -> io::Result<()> {
    for row in rows {
        writeln!(w, "{scenario},{seed},{}", row_line(row))?;
    }
    Ok(())
}
