//! CSV writers. Every file starts with a comment line carrying the config
//! hash; numbers use the shortest round-trip decimal representation.

use anyhow::{Context, Result};
use std::fmt::Write as _;
use std::path::Path;

use mscp_core::study::StudyTables;

pub fn fmt_f64(v: f64) -> String {
    if v.is_nan() {
        "NaN".into()
    } else {
        format!("{v}")
    }
}

pub fn write_table1(tables: &StudyTables, hash: &str, path: &Path) -> Result<()> {
    let mut out = String::new();
    writeln!(out, "# config_hash={hash}")?;
    writeln!(out, "regime,b,N,criterion,MCE,AE")?;
    for row in &tables.table1 {
        writeln!(
            out,
            "{},{},{},{},{},{}",
            row.regime,
            fmt_f64(row.b),
            row.n,
            row.criterion,
            fmt_f64(row.mce),
            fmt_f64(row.ae)
        )?;
    }
    std::fs::write(path, out).with_context(|| format!("writing {}", path.display()))
}

pub fn write_selection(
    tables: &StudyTables,
    orders: &[usize],
    hash: &str,
    path: &Path,
) -> Result<()> {
    let mut out = String::new();
    writeln!(out, "# config_hash={hash}")?;
    let freq_cols: Vec<String> = orders.iter().map(|o| format!("freq_p{o}")).collect();
    writeln!(out, "regime,b,N,criterion,{}", freq_cols.join(","))?;
    for row in &tables.selection {
        let freqs: Vec<String> = row.freq.iter().map(|&f| fmt_f64(f)).collect();
        writeln!(
            out,
            "{},{},{},{},{}",
            row.regime,
            fmt_f64(row.b),
            row.n,
            row.criterion,
            freqs.join(",")
        )?;
    }
    std::fs::write(path, out).with_context(|| format!("writing {}", path.display()))
}

pub fn write_errors(tables: &StudyTables, hash: &str, path: &Path) -> Result<()> {
    let mut out = String::new();
    writeln!(out, "# config_hash={hash}")?;
    writeln!(out, "regime,b,N,criterion,avg_WSE,avg_USE")?;
    for row in &tables.errors {
        writeln!(
            out,
            "{},{},{},{},{},{}",
            row.regime,
            fmt_f64(row.b),
            row.n,
            row.criterion,
            fmt_f64(row.avg_wse),
            fmt_f64(row.avg_use)
        )?;
    }
    std::fs::write(path, out).with_context(|| format!("writing {}", path.display()))
}

/// One criteria.csv row for the selection commands.
pub struct CriteriaRow {
    pub candidate: String,
    pub regime: String,
    pub criterion: String,
    pub gof: Option<f64>,
    pub penalty: Option<f64>,
    pub total: Option<f64>,
    pub selected: bool,
    pub failed: bool,
}

pub fn write_criteria(rows: &[CriteriaRow], hash: &str, path: &Path) -> Result<()> {
    let mut out = String::new();
    writeln!(out, "# config_hash={hash}")?;
    writeln!(out, "candidate,regime,criterion,gof,penalty,total,selected,failed")?;
    for row in rows {
        let opt = |v: Option<f64>| v.map(fmt_f64).unwrap_or_default();
        writeln!(
            out,
            "{},{},{},{},{},{},{},{}",
            row.candidate,
            row.regime,
            row.criterion,
            opt(row.gof),
            opt(row.penalty),
            opt(row.total),
            u8::from(row.selected),
            u8::from(row.failed)
        )?;
    }
    std::fs::write(path, out).with_context(|| format!("writing {}", path.display()))
}
