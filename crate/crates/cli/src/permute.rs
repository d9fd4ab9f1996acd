use std::collections::VecDeque;
use std::fs::{self, File};
use std::io::BufWriter;
use std::path::{Path, PathBuf};
use std::process::{Child, Command};
use std::thread;
use std::time::Duration;

use serde::{Deserialize, Serialize};

use l2kd::eval::{all_orders, summarize, OrderResult, PermutationReport, MAX_PERMUTED_TASKS};
use l2kd::lifelong::{Method, RunReport, TeacherPool};

use crate::config::RunConfig;
use crate::run::{execute_run, run_name};
use crate::{read_json, write_json, CliError, Overrides};

/// Completed (method, order) runs, rewritten after each one so an
/// interrupted permutation resumes where it stopped.
pub const MANIFEST: &str = "permute-manifest.json";
pub const PERMUTATION_JSON: &str = "permutation.json";

#[derive(Debug, Clone, Default)]
pub struct PermuteOptions {
    pub overrides: Overrides,
    /// Concurrent worker processes; 1 runs everything in-process.
    pub jobs: usize,
    /// Binary invoked as `<worker> run <config>` when `jobs > 1`.
    pub worker: Option<PathBuf>,
}

#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    /// Resolved config the results belong to; a different config starts over.
    config: RunConfig,
    completed: Vec<OrderResult>,
}

#[derive(Debug, Clone)]
struct Unit {
    method: Method,
    order: Vec<String>,
}

impl Unit {
    fn matches(&self, r: &OrderResult) -> bool {
        r.method == self.method && r.order == self.order
    }
}

fn load_manifest(path: &Path, config: &RunConfig) -> Vec<OrderResult> {
    match read_json::<Manifest>(path) {
        Ok(m) if m.config == *config => {
            log::info!("resuming: {} runs already complete", m.completed.len());
            m.completed
        }
        Ok(_) => {
            log::warn!("{} belongs to a different config; starting over", path.display());
            Vec::new()
        }
        Err(_) => Vec::new(),
    }
}

/// Config for one (method, order) unit, written for a worker process.
fn unit_config(config: &RunConfig, unit: &Unit, dir: &Path) -> RunConfig {
    RunConfig {
        method: unit.method,
        methods: Vec::new(),
        order: unit.order.clone(),
        out_dir: dir.to_path_buf(),
        retain_teachers: false,
        split_analysis: false,
        ..config.clone()
    }
}

struct Worker {
    unit: Unit,
    dir: PathBuf,
    child: Child,
}

fn spawn(exe: &Path, config: &RunConfig, unit: Unit, root: &Path) -> Result<Worker, CliError> {
    let dir = root.join("work").join(run_name(unit.method, &unit.order, config.seed));
    fs::create_dir_all(&dir).map_err(|e| CliError::io(&dir, e))?;
    let cfg_path = dir.join("config.json");
    write_json(&cfg_path, &unit_config(config, &unit, &dir))?;
    let child = Command::new(exe).arg("run").arg(&cfg_path).spawn().map_err(|e| CliError::io(exe, e))?;
    Ok(Worker { unit, dir, child })
}

fn finish_worker(w: &Worker, seed: u64, status: std::process::ExitStatus) -> Result<OrderResult, CliError> {
    let name = run_name(w.unit.method, &w.unit.order, seed);
    if !status.success() {
        return Err(CliError::Runtime {
            message: format!("worker for {name} exited with {status}"),
            dump: Some(w.dir.clone()),
        });
    }
    let report: RunReport = read_json(&w.dir.join(format!("{name}.json")))?;
    Ok(OrderResult::from(&report))
}

fn record(
    completed: &mut Vec<OrderResult>,
    result: OrderResult,
    config: &RunConfig,
    manifest: &Path,
) -> Result<(), CliError> {
    log::info!("{} on {:?}: average {:.2}", result.method, result.order, result.average);
    completed.push(result);
    let m = Manifest { config: config.clone(), completed: completed.clone() };
    let tmp = manifest.with_extension("json.tmp");
    write_json(&tmp, &m)?;
    fs::rename(&tmp, manifest).map_err(|e| CliError::io(manifest, e))
}

/// `permute <config>`: every configured method on every ordering of the tasks.
pub fn cmd_permute(config_path: &Path, options: &PermuteOptions) -> Result<PermutationReport, CliError> {
    let mut config = RunConfig::load(config_path)?;
    options.overrides.apply(&mut config);
    let prepared = config.prepare()?;
    if config.tasks.len() > MAX_PERMUTED_TASKS {
        return Err(CliError::Config(format!(
            "tasks: {} tasks give too many orders to enumerate (max {MAX_PERMUTED_TASKS})",
            config.tasks.len()
        )));
    }
    if options.jobs == 0 {
        return Err(CliError::Config("jobs: must be >= 1".into()));
    }
    if options.jobs > 1 && options.worker.is_none() {
        return Err(CliError::Config("jobs: parallel permutation needs a worker binary".into()));
    }
    config.ensure_out_dir()?;
    config.write_resolved(&config.out_dir)?;
    let root = config.out_dir.clone();
    let resolved = RunConfig { out_dir: PathBuf::new(), ..config.clone() };
    let manifest = root.join(MANIFEST);
    let mut completed = load_manifest(&manifest, &resolved);

    let ids = prepared.order();
    let mut pending: VecDeque<Unit> = all_orders(&ids)
        .into_iter()
        .flat_map(|order| config.compared_methods().into_iter().map(move |method| Unit { method, order: order.clone() }))
        .filter(|u| !completed.iter().any(|r| u.matches(r)))
        .collect();
    log::info!("{} runs pending", pending.len());

    if options.jobs == 1 {
        let mut pool = TeacherPool::new();
        let runs = root.join("runs");
        fs::create_dir_all(&runs).map_err(|e| CliError::io(&runs, e))?;
        while let Some(unit) = pending.pop_front() {
            let unit_cfg = unit_config(&config, &unit, &runs);
            let unit_prepared = unit_cfg.prepare()?;
            let report = execute_run(&unit_cfg, &unit_prepared, &runs, &mut pool)?;
            record(&mut completed, OrderResult::from(&report), &resolved, &manifest)?;
        }
    } else {
        let exe = options.worker.as_deref().expect("checked above");
        let mut running: Vec<Worker> = Vec::new();
        while !pending.is_empty() || !running.is_empty() {
            while running.len() < options.jobs {
                let Some(unit) = pending.pop_front() else { break };
                running.push(spawn(exe, &config, unit, &root)?);
            }
            let mut i = 0;
            while i < running.len() {
                let status = running[i].child.try_wait().map_err(|e| CliError::io(exe, e))?;
                match status {
                    Some(status) => {
                        let w = running.swap_remove(i);
                        let result = finish_worker(&w, config.seed, status);
                        if result.is_err() {
                            for mut other in running.drain(..) {
                                let _ = other.child.kill();
                            }
                        }
                        record(&mut completed, result?, &resolved, &manifest)?;
                    }
                    None => i += 1,
                }
            }
            thread::sleep(Duration::from_millis(20));
        }
    }

    // Canonical order, independent of completion order and resumption.
    let mut results = Vec::new();
    for order in all_orders(&ids) {
        for method in config.compared_methods() {
            let unit = Unit { method, order: order.clone() };
            results.extend(completed.iter().find(|r| unit.matches(r)).cloned());
        }
    }
    let report = summarize(&ids, results);
    write_json(&root.join(PERMUTATION_JSON), &report)?;
    let csv_path = root.join("permutation.csv");
    let file = File::create(&csv_path).map_err(|e| CliError::io(&csv_path, e))?;
    report.write_csv(BufWriter::new(file)).map_err(|e| CliError::runtime(format!("{}: {e}", csv_path.display())))?;
    fs::write(root.join("permutation.txt"), report.to_table()).map_err(|e| CliError::io(root.join("permutation.txt"), e))?;
    eprint!("{}", report.to_table());
    Ok(report)
}
