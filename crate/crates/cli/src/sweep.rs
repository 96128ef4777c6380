//! Cartesian-product sweeps over config keys.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use toml::{Table, Value};

use crate::config::{parse_value, set_path, ConfigError, ExperimentConfig};
use crate::runner::{execute, RunStatus, RunSummary};

pub const SUMMARY: &str = "summary.tsv";

/// One sweep dimension. Several keys on one axis vary together, e.g.
/// `algorithm.eps_low,algorithm.eps_high=[[0.2,0.2],[0.6,2.0]]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Axis {
    pub keys: Vec<String>,
    pub values: Vec<Vec<Value>>,
}

impl Axis {
    /// Parses `keys=values`. `values` is either a TOML array or a
    /// comma-separated list.
    pub fn parse(spec: &str) -> Result<Self, ConfigError> {
        let (lhs, rhs) = spec
            .split_once('=')
            .ok_or_else(|| ConfigError(vec![format!("grid `{spec}` is not of the form key=v1,v2,...")]))?;
        let keys: Vec<String> = lhs.split(',').map(|k| k.trim().to_string()).collect();
        let rhs = rhs.trim();
        let items: Vec<Value> = if rhs.starts_with('[') {
            match parse_value(rhs) {
                Value::Array(a) => a,
                _ => return Err(ConfigError(vec![format!("grid `{spec}`: cannot parse value list")])),
            }
        } else if rhs.is_empty() {
            Vec::new()
        } else {
            rhs.split(',').map(|v| parse_value(v.trim())).collect()
        };
        Self::from_items(keys, items)
    }

    fn from_items(keys: Vec<String>, items: Vec<Value>) -> Result<Self, ConfigError> {
        let name = keys.join(",");
        if items.is_empty() {
            return Err(ConfigError(vec![format!("grid axis `{name}` has no values")]));
        }
        let values = if keys.len() == 1 {
            items.into_iter().map(|v| vec![v]).collect()
        } else {
            let mut out = Vec::new();
            for item in items {
                match item {
                    Value::Array(a) if a.len() == keys.len() => out.push(a),
                    other => {
                        return Err(ConfigError(vec![format!(
                            "grid axis `{name}` needs {}-element lists, got {other}",
                            keys.len()
                        )]))
                    }
                }
            }
            out
        };
        Ok(Self { keys, values })
    }
}

/// Reads a grid file: a `[grid]` table whose keys are parameter paths
/// (comma-joined for tied parameters) and whose values are lists.
pub fn read_grid_file(path: &Path) -> anyhow::Result<Vec<Axis>> {
    let text = fs::read_to_string(path)?;
    let table: Table = text
        .parse()
        .map_err(|e| ConfigError(vec![format!("{}: TOML syntax: {e}", path.display())]))?;
    let mut errors = Vec::new();
    let mut axes = Vec::new();
    for k in table.keys() {
        if k != "grid" {
            errors.push(format!("{}: unknown top-level key `{k}`", path.display()));
        }
    }
    if let Some(grid) = table.get("grid") {
        let Some(grid) = grid.as_table() else {
            return Err(ConfigError(vec![format!("{}: `grid` must be a table", path.display())]).into());
        };
        for (keys, values) in grid {
            let keys: Vec<String> = keys.split(',').map(|k| k.trim().to_string()).collect();
            match values {
                Value::Array(a) => match Axis::from_items(keys, a.clone()) {
                    Ok(axis) => axes.push(axis),
                    Err(ConfigError(e)) => errors.extend(e),
                },
                _ => errors.push(format!("grid entry `{}` must be a list", keys.join(","))),
            }
        }
    }
    if errors.is_empty() {
        Ok(axes)
    } else {
        Err(ConfigError(errors).into())
    }
}

#[derive(Debug, Clone)]
pub struct Cell {
    pub index: usize,
    pub assignment: Vec<(String, Value)>,
    pub config: ExperimentConfig,
}

/// Expands the grid over `base`. Every cell is validated before any runs.
pub fn expand(base: &Table, axes: &[Axis]) -> Result<Vec<Cell>, ConfigError> {
    let mut combos: Vec<Vec<(String, Value)>> = vec![Vec::new()];
    for axis in axes {
        let mut next = Vec::with_capacity(combos.len() * axis.values.len());
        for c in &combos {
            for vals in &axis.values {
                let mut c = c.clone();
                c.extend(axis.keys.iter().cloned().zip(vals.iter().cloned()));
                next.push(c);
            }
        }
        combos = next;
    }
    let mut errors = Vec::new();
    let mut cells = Vec::new();
    for (index, assignment) in combos.into_iter().enumerate() {
        let mut table = base.clone();
        let mut ok = true;
        for (k, v) in &assignment {
            if let Err(ConfigError(e)) = set_path(&mut table, k, v.clone()) {
                errors.extend(e);
                ok = false;
            }
        }
        if !ok {
            continue;
        }
        match ExperimentConfig::from_table(&table) {
            Ok(config) => cells.push(Cell {
                index,
                assignment,
                config,
            }),
            Err(ConfigError(e)) => {
                let label = describe(&assignment);
                errors.extend(e.into_iter().map(|m| format!("cell {index} ({label}): {m}")));
            }
        }
    }
    errors.dedup();
    if errors.is_empty() {
        Ok(cells)
    } else {
        Err(ConfigError(errors))
    }
}

fn describe(assignment: &[(String, Value)]) -> String {
    if assignment.is_empty() {
        return "base".into();
    }
    assignment
        .iter()
        .map(|(k, v)| format!("{k}={v}"))
        .collect::<Vec<_>>()
        .join(" ")
}

pub fn cell_dir(out: &Path, index: usize) -> PathBuf {
    out.join(format!("cell_{index:04}"))
}

/// Runs every cell on the current rayon pool and writes the summary table.
pub fn run_cells(cells: &[Cell], out: &Path) -> anyhow::Result<Vec<RunSummary>> {
    fs::create_dir_all(out)?;
    let summaries: Vec<RunSummary> = cells
        .par_iter()
        .map(|c| execute(&c.config, &cell_dir(out, c.index)))
        .collect::<anyhow::Result<_>>()?;
    fs::write(out.join(SUMMARY), summary_table(cells, &summaries))?;
    Ok(summaries)
}

/// Tab-separated: cell, one column per swept key, final mean reward, final
/// KL to the initial policy, status.
pub fn summary_table(cells: &[Cell], summaries: &[RunSummary]) -> String {
    let keys: Vec<&str> = cells
        .first()
        .map(|c| c.assignment.iter().map(|(k, _)| k.as_str()).collect())
        .unwrap_or_default();
    let mut s = String::from("cell");
    for k in &keys {
        write!(s, "\t{k}").unwrap();
    }
    s.push_str("\tfinal_mean_reward\tfinal_kl_to_init\tstatus\n");
    for (c, r) in cells.iter().zip(summaries) {
        write!(s, "{}", c.index).unwrap();
        for (_, v) in &c.assignment {
            write!(s, "\t{v}").unwrap();
        }
        match &r.last {
            Some(m) => write!(s, "\t{}\t{}", m.mean_reward, m.kl_to_init).unwrap(),
            None => s.push_str("\tNA\tNA"),
        }
        let status = match &r.status {
            RunStatus::Completed => "completed",
            RunStatus::Aborted { .. } => "aborted",
        };
        writeln!(s, "\t{status}").unwrap();
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    const BASE: &str = r#"
[task]
kind = "bandit"
arm_rewards = [0.0, 0.8, 1.0]

[algorithm]
kind = "REC_OneSide_NoIS"
eps_low = 0.2
eps_high = 0.2

[optimizer]
eta = 0.5
steps = 3
k = 4
"#;

    #[test]
    fn axis_forms() {
        let a = Axis::parse("optimizer.eta=0.1, 0.5,1").unwrap();
        assert_eq!(a.values.len(), 3);
        assert_eq!(a.values[2][0], Value::Integer(1));
        let b = Axis::parse("algorithm.eps_low,algorithm.eps_high=[[0.2,0.2],[0.6,2.0]]").unwrap();
        assert_eq!(b.keys.len(), 2);
        assert_eq!(b.values[1], vec![Value::Float(0.6), Value::Float(2.0)]);
        assert!(Axis::parse("a.b,c.d=[1,2]").is_err());
        assert!(Axis::parse("optimizer.eta=").is_err());
        assert!(Axis::parse("optimizer.eta").is_err());
    }

    #[test]
    fn product_sizes() {
        let base: Table = BASE.parse().unwrap();
        assert_eq!(expand(&base, &[]).unwrap().len(), 1);
        let eps = Axis::parse("algorithm.eps_low,algorithm.eps_high=[[0.2,0.2],[0.6,2.0]]").unwrap();
        assert_eq!(expand(&base, std::slice::from_ref(&eps)).unwrap().len(), 2);
        let eta = Axis::parse("optimizer.eta=0.1,0.5,1.0").unwrap();
        let cells = expand(&base, &[eta, eps]).unwrap();
        assert_eq!(cells.len(), 6);
        assert_eq!(cells[5].config.optimizer.eta, 1.0);
        assert_eq!(cells[5].config.algorithm.clip.unwrap().eps_high, 2.0);
    }

    #[test]
    fn invalid_paths_are_rejected_before_running() {
        let base: Table = BASE.parse().unwrap();
        for spec in ["optimizer.learning_rate=0.1,0.2", "nosuch.eta=1", "eta=1"] {
            let axis = Axis::parse(spec).unwrap();
            assert!(expand(&base, &[axis]).is_err(), "{spec}");
        }
    }
}
