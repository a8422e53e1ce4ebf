//! Grid runner: every cell is pretrained once per seed and scored zero-shot.
//! Results land in one long-format CSV, one row per (cell, seed, metric).

use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use mmx_core::config::{parse_override, RunConfig};
use mmx_core::error::Error;
use mmx_core::experiment;
use mmx_core::training::write_metrics_csv;
use serde::Deserialize;
use toml::{Table, Value};

use crate::commands::load_config;
use crate::ConfigArgs;

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Grid {
    pub seeds: Vec<u64>,
    /// Base run config, relative to the grid file.
    #[serde(default)]
    pub base: Option<PathBuf>,
    #[serde(default)]
    pub presets: Vec<String>,
    /// Overrides shared by every cell.
    #[serde(default)]
    pub set: Table,
    pub cells: Vec<Cell>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Cell {
    pub name: String,
    #[serde(default)]
    pub presets: Vec<String>,
    #[serde(default)]
    pub set: Table,
}

/// Nested tables and quoted dotted keys both become dotted override paths.
fn flatten(prefix: &str, t: &Table, out: &mut Vec<(String, Value)>) {
    for (k, v) in t {
        let key = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
        match v {
            Value::Table(inner) => flatten(&key, inner, out),
            other => out.push((key, other.clone())),
        }
    }
}

pub fn load_grid(path: &Path) -> Result<Grid> {
    let text = fs::read_to_string(path).with_context(|| format!("reading grid {}", path.display()))?;
    let grid: Grid = toml::from_str(&text).map_err(|e| Error::config(format!("grid {}: {}", path.display(), e.message())))?;
    if grid.seeds.is_empty() || grid.cells.is_empty() {
        return Err(Error::config("grid needs at least one seed and one cell").into());
    }
    let mut names: Vec<&str> = grid.cells.iter().map(|c| c.name.as_str()).collect();
    names.sort_unstable();
    if names.windows(2).any(|w| w[0] == w[1]) {
        return Err(Error::config("grid cell names must be unique").into());
    }
    if grid.cells.iter().any(|c| c.name.is_empty() || c.name.contains(['/', ',', '\\'])) {
        return Err(Error::config("grid cell names must be non-empty and free of `/`, `\\` and `,`").into());
    }
    Ok(grid)
}

struct Row {
    metric: String,
    k: Option<usize>,
    value: f64,
    n: usize,
}

/// Resolved config of one (cell, seed), written into `dir`.
fn resolve_cell(args: &ConfigArgs, grid: &Grid, base: Option<&Path>, cell: &Cell, seed: u64, dir: &Path) -> Result<RunConfig> {
    let mut extra = Vec::new();
    flatten("", &grid.set, &mut extra);
    flatten("", &cell.set, &mut extra);
    for s in &args.overrides {
        extra.push(parse_override(s)?);
    }
    extra.push(("seed".into(), Value::Integer(seed as i64)));
    extra.push(("output_dir".into(), Value::String(dir.to_string_lossy().into_owned())));
    let presets = args.presets.iter().chain(&grid.presets).chain(&cell.presets).cloned().collect();
    let cell_args = ConfigArgs { config: base.map(Path::to_path_buf), presets, overrides: Vec::new(), out: None };
    let cfg = load_config(&cell_args, &extra)?;
    fs::create_dir_all(dir)?;
    cfg.write_resolved(dir)?;
    Ok(cfg)
}

fn run_cell(cfg: &RunConfig) -> Result<Vec<Row>> {
    let dir = &cfg.output_dir;
    let data = cfg.prepare_data()?;
    mmx_core::evaluation::check_held_out(&data.pretrain_names(), &data.eval, cfg.eval.allow_overlap)?;
    let done = experiment::pretrain(cfg, &data, None, |_, _| Ok(()))?;
    let mut w = BufWriter::new(fs::File::create(dir.join("metrics.csv"))?);
    write_metrics_csv(&mut w, &done.log)?;
    w.flush()?;
    let (_, report) = experiment::zero_shot(cfg, &data, &done.model, &done.state.store)?;

    let mut rows: Vec<Row> =
        report.rows().into_iter().map(|r| Row { metric: r.metric, k: r.k, value: r.value, n: r.n }).collect();
    if let Some(last) = done.log.last() {
        rows.push(Row { metric: "final_loss".into(), k: None, value: last.loss_total, n: last.step as usize });
    }
    let params = done.state.store.count();
    rows.push(Row { metric: "params".into(), k: None, value: params as f64, n: params });
    Ok(rows)
}

fn clean(msg: &str) -> String {
    msg.replace([',', '\n', '\r'], " ")
}

pub fn run(args: &ConfigArgs, grid_path: &Path, dry_run: bool) -> Result<()> {
    let grid = load_grid(grid_path)?;
    let base = match (&args.config, &grid.base) {
        (Some(c), _) => Some(c.clone()),
        (None, Some(b)) => Some(grid_path.parent().unwrap_or(Path::new(".")).join(b)),
        (None, None) => None,
    };
    let root = args.out.clone().unwrap_or_else(|| PathBuf::from("runs/ablate"));
    fs::create_dir_all(&root).with_context(|| format!("creating {}", root.display()))?;
    if dry_run {
        for cell in &grid.cells {
            for &seed in &grid.seeds {
                let dir = root.join("cells").join(&cell.name).join(format!("seed{seed}"));
                let cfg = resolve_cell(args, &grid, base.as_deref(), cell, seed, &dir)?;
                println!("{} seed {seed}: layers {:?}, losses {:?}", cell.name, cfg.model.layers, cfg.losses);
            }
        }
        return Ok(());
    }
    let csv_path = root.join("ablation.csv");
    let mut csv = BufWriter::new(fs::File::create(&csv_path)?);
    writeln!(csv, "cell,seed,metric,k,value,n,status")?;

    let total = grid.cells.len() * grid.seeds.len();
    let mut failed = 0;
    for cell in &grid.cells {
        for &seed in &grid.seeds {
            let dir = root.join("cells").join(&cell.name).join(format!("seed{seed}"));
            eprintln!("cell {} seed {seed}", cell.name);
            match resolve_cell(args, &grid, base.as_deref(), cell, seed, &dir).and_then(|cfg| run_cell(&cfg)) {
                Ok(rows) => {
                    for r in rows {
                        let k = r.k.map_or(String::new(), |k| k.to_string());
                        writeln!(csv, "{},{seed},{},{k},{},{},ok", cell.name, r.metric, r.value, r.n)?;
                    }
                }
                Err(e) => {
                    failed += 1;
                    eprintln!("cell {} seed {seed} failed: {e:#}", cell.name);
                    writeln!(csv, "{},{seed},error,,NaN,0,failed: {}", cell.name, clean(&format!("{e:#}")))?;
                }
            }
            csv.flush()?;
        }
    }
    println!("{}", csv_path.display());
    if failed > 0 {
        anyhow::bail!("{failed} of {total} grid runs failed; see {}", csv_path.display());
    }
    Ok(())
}
