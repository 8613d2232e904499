//! Grid sweep: cartesian products over `sweep.vary.*` keys, repeated over
//! `sweep.seeds`, with mean/stderr aggregation and relative improvement
//! against the scratch arm.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::Mutex;

use talkdist::config::{self, ConfigMap, ExperimentConfig};
use talkdist::engine::Method;
use talkdist::error::{Error, Result};

use crate::common;
use crate::run;

struct Cell {
    label: String,
    overrides: Vec<(String, String)>,
}

/// Expand sweep.vary.* into the cartesian product of cells.
fn expand_cells(map: &ConfigMap) -> Vec<Cell> {
    let vary: Vec<(String, Vec<String>)> = map
        .iter()
        .filter(|(k, _)| k.starts_with("sweep.vary."))
        .map(|(k, v)| {
            (
                k.trim_start_matches("sweep.vary.").to_string(),
                v.split(',').map(|s| s.trim().to_string()).collect(),
            )
        })
        .collect();
    let mut cells = vec![Cell { label: "base".into(), overrides: vec![] }];
    for (key, values) in vary {
        let mut next = Vec::with_capacity(cells.len() * values.len());
        for cell in &cells {
            for value in &values {
                let mut overrides = cell.overrides.clone();
                overrides.push((key.clone(), value.clone()));
                let label = overrides
                    .iter()
                    .map(|(k, v)| format!("{k}={v}"))
                    .collect::<Vec<_>>()
                    .join(",");
                next.push(Cell { label, overrides });
            }
        }
        cells = next;
    }
    cells
}

/// Sample mean and standard error (sample std / sqrt(n)).
fn mean_stderr(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    if v.len() < 2 {
        return (mean, 0.0);
    }
    let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, (var / n).sqrt())
}

fn cell_dir_name(label: &str, seed: u64) -> String {
    let safe: String = label
        .chars()
        .map(|c| if c.is_alphanumeric() || c == '=' || c == '.' || c == '-' { c } else { '_' })
        .collect();
    format!("{safe}-s{seed}")
}

pub struct SweepArgs<'a> {
    pub file: Option<&'a ConfigMap>,
    pub overrides: &'a ConfigMap,
    pub teacher: Option<&'a Path>,
    pub jobs: Option<usize>,
    pub force: bool,
}

struct RunResult {
    label: String,
    seed: u64,
    rmse: f64,
}

pub fn cmd_sweep(args: &SweepArgs) -> Result<PathBuf> {
    let base = config::resolve(args.file, args.overrides)?;
    let out = base.out.clone();
    common::prepare_out_dir(&out, args.force)?;
    base.write_resolved(&out.join("resolved.config"))?;

    let seeds: Vec<u64> = base
        .resolved
        .get("sweep.seeds")
        .unwrap_or("1")
        .split(',')
        .map(|s| {
            s.trim()
                .parse()
                .map_err(|_| Error::Config(format!("bad sweep seed '{s}'")))
        })
        .collect::<Result<Vec<u64>>>()?;
    let max_runs: usize = base.resolved.get_usize("sweep.max_runs")?;
    let jobs = match args.jobs {
        Some(j) => j.max(1),
        None => base.resolved.get_usize("sweep.jobs")?.max(1),
    };

    let cells = expand_cells(&base.resolved);
    let total = cells.len() * seeds.len();
    if total > max_runs {
        return Err(Error::Config(format!(
            "sweep grid has {total} runs ({} cells x {} seeds), exceeding sweep.max_runs={max_runs}",
            cells.len(),
            seeds.len()
        )));
    }

    // Resolve every cell config up front so config errors surface before
    // any training happens.
    let mut planned: Vec<(usize, ExperimentConfig)> = Vec::new();
    for (ci, cell) in cells.iter().enumerate() {
        for &seed in &seeds {
            let mut overrides = args.overrides.clone();
            for (k, v) in &cell.overrides {
                overrides.set(k, v);
            }
            overrides.set("seed", &seed.to_string());
            let dir = out.join("cells").join(cell_dir_name(&cell.label, seed));
            overrides.set("out", dir.to_str().unwrap());
            planned.push((ci, config::resolve(args.file, &overrides)?));
        }
    }

    // A teacher per seed, pretrained unless supplied, shared across cells.
    let needs_teacher = planned.iter().any(|(_, cfg)| cfg.method != Method::Scratch);
    let mut teacher_paths: BTreeMap<u64, PathBuf> = BTreeMap::new();
    if needs_teacher {
        for &seed in &seeds {
            let path = match args.teacher {
                Some(p) => p.to_path_buf(),
                None => {
                    let dir = out.join(format!("teacher-s{seed}"));
                    let mut overrides = args.overrides.clone();
                    overrides.set("seed", &seed.to_string());
                    overrides.set("out", dir.to_str().unwrap());
                    overrides.set("data.task", "pretrain");
                    let tcfg = config::resolve(args.file, &overrides)?;
                    let ckpt = dir.join("teacher.tdck");
                    if !ckpt.exists() {
                        run::cmd_pretrain(&tcfg, args.force)?;
                    }
                    ckpt
                }
            };
            teacher_paths.insert(seed, path);
        }
    }

    // Work queue over (cell index, config); each run writes its own dir.
    let queue: Mutex<Vec<(usize, ExperimentConfig)>> = Mutex::new(planned);
    let results: Mutex<Vec<RunResult>> = Mutex::new(Vec::new());
    let first_error: Mutex<Option<Error>> = Mutex::new(None);
    std::thread::scope(|scope| {
        for _ in 0..jobs {
            scope.spawn(|| loop {
                let item = queue.lock().unwrap().pop();
                let Some((ci, cfg)) = item else { break };
                if first_error.lock().unwrap().is_some() {
                    break;
                }
                let teacher = if cfg.method == Method::Scratch {
                    None
                } else {
                    teacher_paths.get(&cfg.seed).map(|p| p.as_path())
                };
                match run::cmd_distill(&cfg, teacher, args.force) {
                    Ok(rmse) => results.lock().unwrap().push(RunResult {
                        label: cells[ci].label.clone(),
                        seed: cfg.seed,
                        rmse,
                    }),
                    Err(e) => {
                        let mut slot = first_error.lock().unwrap();
                        if slot.is_none() {
                            *slot = Some(e);
                        }
                    }
                }
            });
        }
    });
    if let Some(e) = first_error.into_inner().unwrap() {
        return Err(e);
    }

    let mut results = results.into_inner().unwrap();
    results.sort_by(|a, b| a.label.cmp(&b.label).then(a.seed.cmp(&b.seed)));

    // Per-seed rows.
    let mut per_seed = String::from("cell,seed,rmse\n");
    for r in &results {
        per_seed.push_str(&format!("{},{},{}\n", r.label, r.seed, r.rmse));
    }
    std::fs::write(out.join("per_seed.csv"), per_seed)?;

    // Aggregate: mean and standard error over seeds, plus relative
    // improvement against the scratch arm when one is present.
    let mut groups: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    for r in &results {
        groups.entry(r.label.clone()).or_default().push(r.rmse);
    }
    let scratch_mean = groups
        .iter()
        .find(|(label, _)| label.contains("method=scratch"))
        .map(|(_, v)| mean_stderr(v).0);
    let mut agg = String::from("cell,n_seeds,mean_rmse,stderr,rel_improvement_pct\n");
    for (label, values) in &groups {
        let (mean, stderr) = mean_stderr(values);
        let rel = match scratch_mean {
            Some(s) if s > 0.0 => format!("{:.4}", (s - mean) / s * 100.0),
            _ => String::new(),
        };
        agg.push_str(&format!("{label},{},{mean},{stderr},{rel}\n", values.len()));
    }
    let agg_path = out.join("aggregate.csv");
    std::fs::write(&agg_path, &agg)?;
    println!("{agg}");
    println!("sweep done: {} runs -> {}", results.len(), agg_path.display());
    Ok(agg_path)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cells_expand_cartesian() {
        let mut map = ConfigMap::default();
        map.set("sweep.vary.method", "scratch,td");
        map.set("sweep.vary.td.k", "0,2");
        let cells = expand_cells(&map);
        assert_eq!(cells.len(), 4);
        let labels: Vec<&str> = cells.iter().map(|c| c.label.as_str()).collect();
        assert!(labels.contains(&"method=td,td.k=2"));
        assert!(labels.contains(&"method=scratch,td.k=0"));
    }

    #[test]
    fn mean_stderr_matches_hand_computation() {
        // Toy grid: 1.0, 1.3, 0.7 -> mean 1.0, sample std 0.3, stderr 0.3/sqrt(3).
        let (mean, stderr) = mean_stderr(&[1.0, 1.3, 0.7]);
        assert!((mean - 1.0).abs() < 1e-12);
        let hand = 0.3 / 3.0f64.sqrt();
        assert!((stderr - hand).abs() < 1e-12, "{stderr} vs {hand}");
        // Five seeds: stderr = sample std / sqrt(5).
        let v = [2.0, 2.5, 1.5, 2.2, 1.8];
        let m: f64 = v.iter().sum::<f64>() / 5.0;
        let sd = (v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / 4.0).sqrt();
        let (_, se) = mean_stderr(&v);
        assert!((se - sd / 5.0f64.sqrt()).abs() < 1e-12);
    }

    #[test]
    fn no_vary_keys_is_single_cell() {
        let cells = expand_cells(&ConfigMap::default());
        assert_eq!(cells.len(), 1);
        assert!(cells[0].overrides.is_empty());
    }
}
