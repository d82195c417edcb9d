//! The `simulate` command: runs the Monte Carlo study, writes the three
//! result tables plus a run manifest, and optionally dumps one replication
//! as a selection-mode dataset for round-trip checks.

use anyhow::{anyhow, Context, Result};
use std::fmt::Write as _;
use std::path::Path;

use mscp_core::criteria::{Criterion, Regime};
use mscp_core::study::{evaluate_replication, generate_replication, run_study, StudyConfig};

use crate::config::{config_hash, ResolvedConfig};
use crate::tables::{self, fmt_f64, CriteriaRow};

pub fn run(resolved: &ResolvedConfig, dump_rep: Option<u64>) -> Result<()> {
    let started_unix_ms = std::time::SystemTime::now()
        .duration_since(std::time::UNIX_EPOCH)
        .map(|d| d.as_millis())
        .unwrap_or(0);
    let out_dir = Path::new(&resolved.out_dir);
    std::fs::create_dir_all(out_dir)
        .with_context(|| format!("cannot create output dir {}", out_dir.display()))?;
    let hash = config_hash(resolved);

    let tables = run_study(&resolved.study).map_err(|e| anyhow!("{e}"))?;

    tables::write_table1(&tables, &hash, &out_dir.join("table1.csv"))?;
    tables::write_selection(
        &tables,
        &resolved.study.candidate_orders,
        &hash,
        &out_dir.join("selection.csv"),
    )?;
    tables::write_errors(&tables, &hash, &out_dir.join("errors.csv"))?;

    let manifest = serde_json::json!({
        "config_hash": hash,
        "study": resolved.study,
        "out_dir": resolved.out_dir,
        "threads": resolved.threads,
        "artifacts": ["table1.csv", "selection.csv", "errors.csv"],
        "started_unix_ms": started_unix_ms,
        "wall_ms": tables.metadata.wall_ms,
        "replications": tables.metadata.replications,
        "failed_replications": tables.metadata.failed_replications,
    });
    std::fs::write(
        out_dir.join("manifest.json"),
        serde_json::to_string_pretty(&manifest)?,
    )
    .context("writing manifest.json")?;

    if let Some(rep) = dump_rep {
        dump_replication(&resolved.study, rep, &hash, out_dir)?;
    }
    eprintln!(
        "study complete: {} replications, {} failed, {} ms",
        tables.metadata.replications, tables.metadata.failed_replications, tables.metadata.wall_ms
    );
    Ok(())
}

fn regime_name(r: Regime) -> &'static str {
    r.name()
}

/// Writes replication `rep` of the first (b, N) cell as a selection-mode
/// data file, a matching spec, and the criterion values the study computes
/// for it.
fn dump_replication(config: &StudyConfig, rep: u64, hash: &str, out_dir: &Path) -> Result<()> {
    let b = config.curvatures[0];
    let n = config.sample_sizes[0];
    let (dataset, _) = generate_replication(config, b, n, rep).map_err(|e| anyhow!("{e}"))?;

    // data file: one row per (sample, arm); zero-padded ids keep file order
    let mut data = String::new();
    writeln!(data, "sample_id,arm,t,y_1,z_1")?;
    for i in 0..dataset.n_samples() {
        let obs = dataset.observed_arm()[i];
        for arm in 0..dataset.n_treatments() {
            let t = u8::from(arm == obs);
            let y = if arm == obs {
                fmt_f64(dataset.outcomes()[[i, 0]])
            } else {
                String::new()
            };
            writeln!(
                data,
                "{:06},{},{},{},{}",
                i,
                arm + 1,
                t,
                y,
                fmt_f64(dataset.confounders()[[i, 0]])
            )?;
        }
    }
    let data_path = out_dir.join(format!("rep{rep}_data.csv"));
    std::fs::write(&data_path, data).context("writing dump data file")?;

    // matching selection spec
    let mut spec = String::new();
    writeln!(spec, "regimes = [{}]", join_quoted(config.regimes.iter().map(|r| regime_name(*r))))?;
    writeln!(
        spec,
        "criteria = [{}]",
        join_quoted(config.criteria.iter().map(|c| c.name()))
    )?;
    writeln!(spec, "sigma2 = {}", fmt_f64(config.sigma2))?;
    writeln!(spec)?;
    writeln!(spec, "[candidates]")?;
    writeln!(spec, "mode = \"orders\"")?;
    writeln!(
        spec,
        "orders = [{}]",
        config
            .candidate_orders
            .iter()
            .map(|o| o.to_string())
            .collect::<Vec<_>>()
            .join(", ")
    )?;
    writeln!(spec)?;
    writeln!(spec, "[propensity]")?;
    writeln!(spec, "mode = \"estimate\"")?;
    writeln!(spec, "family = \"arm_slopes\"")?;
    writeln!(spec, "confounder_cols = [1]")?;
    writeln!(
        spec,
        "alpha = [{}]",
        config
            .alpha_true
            .iter()
            .map(|a| fmt_f64(*a))
            .collect::<Vec<_>>()
            .join(", ")
    )?;
    writeln!(spec)?;
    writeln!(spec, "[outcome]")?;
    writeln!(spec, "confounder_cols = [1]")?;
    let spec_path = out_dir.join(format!("rep{rep}_select.toml"));
    std::fs::write(&spec_path, spec).context("writing dump spec file")?;

    // the in-study criterion values for that replication
    let reports = evaluate_replication(config, b, n, rep).map_err(|e| anyhow!("{e}"))?;
    let mut rows = Vec::new();
    for &regime in &config.regimes {
        for &criterion in &config.criteria {
            if criterion == Criterion::WcpConditional && regime != Regime::IpwEstimated {
                continue;
            }
            let group: Vec<_> = reports
                .iter()
                .filter(|r| r.regime == regime && r.criterion == criterion)
                .collect();
            let selected = group
                .iter()
                .min_by(|a, b| {
                    a.total
                        .partial_cmp(&b.total)
                        .unwrap_or(std::cmp::Ordering::Equal)
                        .then(a.n_params.cmp(&b.n_params))
                        .then(a.candidate_id.cmp(&b.candidate_id))
                })
                .map(|r| r.candidate_id.clone());
            for r in group {
                rows.push(CriteriaRow {
                    candidate: r.candidate_id.clone(),
                    regime: regime_name(regime).to_string(),
                    criterion: criterion.name().to_string(),
                    gof: Some(r.gof),
                    penalty: Some(r.penalty),
                    total: Some(r.total),
                    selected: selected.as_deref() == Some(r.candidate_id.as_str()),
                    failed: false,
                });
            }
        }
    }
    tables::write_criteria(&rows, hash, &out_dir.join(format!("rep{rep}_criteria.csv")))?;
    Ok(())
}

fn join_quoted<'a>(items: impl Iterator<Item = &'a str>) -> String {
    items
        .map(|s| format!("\"{s}\""))
        .collect::<Vec<_>>()
        .join(", ")
}
