//! Metrics and per-timestep summaries written to `state_dir/report/`.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::state::{self, VersionKind};
use super::{Engine, SUMMARY_FILE};
use crate::clustering::{ClusterDump, GridPoint};
use crate::datamodel::{PerformanceTable, ScoreFunction};
use crate::error::{Error, Result};
use crate::metrics::metrics_report;
use crate::selection::SelectionSummary;

pub const REPORT_DIR: &str = "report";

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ReportFiles {
    pub dir: PathBuf,
    pub files: Vec<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimestepSummary {
    pub version: u64,
    pub timestep: u64,
    pub kind: VersionKind,
    pub pool_size: usize,
    pub k: Option<usize>,
    pub budget: Option<usize>,
    pub selected: Option<usize>,
    pub selectors: BTreeMap<ScoreFunction, usize>,
    pub grid: Vec<GridPoint>,
}

/// Lock `state_dir` and write the report for the CSV at `perf_csv`.
pub fn report(state_dir: &Path, perf_csv: &Path) -> Result<ReportFiles> {
    let table = PerformanceTable::from_csv_path(perf_csv)?;
    Engine::open(state_dir)?.report(&table)
}

fn pretty<T: Serialize>(value: &T) -> String {
    let mut s = serde_json::to_string_pretty(value).expect("report serializes");
    s.push('\n');
    s
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::json(path, e))
}

impl Engine {
    pub fn report(&self, table: &PerformanceTable) -> Result<ReportFiles> {
        // Refuse to summarize a state that fails verification.
        self.load()?;
        let metrics = metrics_report(table)?;

        let mut steps = Vec::new();
        let mut cluster_rows = String::from("version,timestep,cluster_id,size,eligible,selector,budget,selected\n");
        let mut selector_rows = String::from("version,timestep,selector,clusters,selected\n");
        for v in state::committed_versions(self.state_dir())? {
            let dir = state::version_dir(self.state_dir(), v);
            let index = state::read_index(&dir)?;
            let mut step = TimestepSummary {
                version: v,
                timestep: index.timestep,
                kind: index.kind,
                pool_size: index.n_samples,
                k: index.k,
                budget: None,
                selected: None,
                selectors: BTreeMap::new(),
                grid: Vec::new(),
            };
            if index.kind == VersionKind::Advance {
                let summary: SelectionSummary = read_json(&dir.join(SUMMARY_FILE))?;
                let dump: ClusterDump = read_json(&dir.join("clusters.json"))?;
                step.budget = Some(summary.budget);
                step.selected = Some(summary.clusters.iter().map(|c| c.selected).sum());
                step.grid = dump.grid;
                let mut per_selector: BTreeMap<ScoreFunction, (usize, usize)> = BTreeMap::new();
                for c in &summary.clusters {
                    let _ = writeln!(
                        cluster_rows,
                        "{v},{},{},{},{},{},{},{}",
                        index.timestep, c.cluster_id, c.size, c.eligible, c.selector, c.budget, c.selected
                    );
                    let e = per_selector.entry(c.selector).or_default();
                    e.0 += 1;
                    e.1 += c.selected;
                }
                for (f, (clusters, selected)) in &per_selector {
                    let _ = writeln!(selector_rows, "{v},{},{f},{clusters},{selected}", index.timestep);
                }
                step.selectors = per_selector.into_iter().map(|(f, (c, _))| (f, c)).collect();
            }
            steps.push(step);
        }

        let mut metric_rows = String::from("t,average_accuracy,relative_gain\n");
        for t in 0..metrics.timesteps {
            let _ = writeln!(metric_rows, "{t},{},{}", metrics.average_accuracy[t], metrics.relative_gain[t]);
        }
        let mut perf_rows = String::from("skill,t,value,upper_bound,relative\n");
        for ((skill, row), ub) in table.skills().iter().zip(table.values()).zip(&metrics.upper_bounds) {
            for (t, v) in row.iter().enumerate() {
                let _ = writeln!(perf_rows, "{skill},{t},{v},{ub},{}", v / ub * 100.0);
            }
        }

        let dir = self.state_dir().join(REPORT_DIR);
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        let outputs: [(&str, String); 6] = [
            ("metrics.json", pretty(&metrics)),
            ("timesteps.json", pretty(&steps)),
            ("metrics.csv", metric_rows),
            ("performance.csv", perf_rows),
            ("clusters.csv", cluster_rows),
            ("selectors.csv", selector_rows),
        ];
        let mut files = Vec::with_capacity(outputs.len());
        for (name, body) in outputs {
            let path = dir.join(name);
            fs::write(&path, body).map_err(|e| Error::io(&path, e))?;
            files.push(path);
        }
        Ok(ReportFiles { dir, files })
    }
}
