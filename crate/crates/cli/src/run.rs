use std::fs::{self, File};
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use serde::Serialize;

use l2kd::eval::MetricRecord;
use l2kd::lifelong::{run_method, LifelongError, Method, RunObserver, RunReport, TeacherPool, TeacherProvider};
use l2kd::model::LanguageModel;

use crate::config::{Prepared, RunConfig};
use crate::{write_json, CliError, Overrides};

/// Written to the run directory when training fails.
pub const FAILURE_STATE: &str = "failure-state.json";

/// `{method}_{order}_{seed}`, with the order joined by `-`.
pub fn run_name(method: Method, order: &[String], seed: u64) -> String {
    format!("{method}_{}_{seed}", order.join("-"))
}

/// Student checkpoint written after the `index`-th (0-based) training phase.
pub fn checkpoint_path(dir: &Path, index: usize, task_id: &str) -> PathBuf {
    dir.join("checkpoints").join(format!("{:02}-{task_id}.json", index + 1))
}

pub fn teacher_path(dir: &Path, task_id: &str) -> PathBuf {
    dir.join("teachers").join(format!("{task_id}.json"))
}

fn save_model(model: &LanguageModel, path: &Path) -> Result<(), CliError> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| CliError::io(parent, e))?;
    }
    let file = File::create(path).map_err(|e| CliError::io(path, e))?;
    model.save(BufWriter::new(file)).map_err(|e| CliError::io(path, e))
}

/// Saves the student at every task boundary.
struct Checkpointer<'a> {
    dir: &'a Path,
    last: Option<PathBuf>,
}

impl RunObserver for Checkpointer<'_> {
    fn epoch_finished(&mut self, epoch: usize, _student: &LanguageModel, records: &[MetricRecord]) -> Result<(), LifelongError> {
        let scores: Vec<String> = records.iter().map(|r| format!("{}={:.1}", r.eval_task, r.value)).collect();
        log::info!("epoch {epoch}: {}", scores.join(" "));
        Ok(())
    }

    fn task_finished(&mut self, index: usize, task_id: &str, student: &LanguageModel) -> Result<(), LifelongError> {
        let path = checkpoint_path(self.dir, index, task_id);
        save_model(student, &path).map_err(|e| LifelongError::Observer(e.to_string()))?;
        self.last = Some(path);
        Ok(())
    }
}

#[derive(Serialize)]
struct FailureState<'a> {
    error: String,
    method: Method,
    order: &'a [String],
    seed: u64,
    last_checkpoint: Option<&'a Path>,
    partial_report: Option<&'a RunReport>,
}

/// Runs the configured method once, writing `{name}.json`, `{name}.csv`,
/// student checkpoints and (when asked) teacher checkpoints into `dir`.
pub fn execute_run(
    config: &RunConfig,
    prepared: &Prepared,
    dir: &Path,
    teachers: &mut TeacherPool,
) -> Result<RunReport, CliError> {
    let order = prepared.order();
    let name = run_name(config.method, &order, config.seed);
    log::info!("run {name}");
    let mut observer = Checkpointer { dir, last: None };
    let result = run_method(config.method, &prepared.tasks, &prepared.vocab, &prepared.stream, teachers, &mut observer);
    let report = match result {
        Ok(r) => r,
        Err(e) => {
            let partial = match &e {
                LifelongError::Diverged { partial, .. } => partial.as_deref(),
                _ => None,
            };
            let state = FailureState {
                error: e.to_string(),
                method: config.method,
                order: &order,
                seed: config.seed,
                last_checkpoint: observer.last.as_deref(),
                partial_report: partial,
            };
            let path = dir.join(FAILURE_STATE);
            write_json(&path, &state)?;
            return Err(CliError::Runtime { message: e.to_string(), dump: Some(path) });
        }
    };

    if config.split_analysis {
        // Methods without distillation never asked for teachers; train them now.
        for task in &prepared.tasks {
            if teachers.get(task.task_id()).is_none() {
                teachers.teacher(task, &prepared.vocab, &prepared.stream).map_err(CliError::runtime)?;
            }
        }
    }
    if config.retain_teachers || config.split_analysis {
        for task in &prepared.tasks {
            if let Some(model) = teachers.get(task.task_id()).as_deref().and_then(|t| t.language_model()) {
                save_model(model, &teacher_path(dir, task.task_id()))?;
            }
        }
    }

    write_json(&dir.join(format!("{name}.json")), &report)?;
    let csv_path = dir.join(format!("{name}.csv"));
    let file = File::create(&csv_path).map_err(|e| CliError::io(&csv_path, e))?;
    report.write_csv(BufWriter::new(file)).map_err(|e| CliError::runtime(format!("{}: {e}", csv_path.display())))?;
    log::info!("run {name} final average {:.2}", report.final_average);
    Ok(report)
}

/// `run <config>`: validates, echoes the resolved config, runs once.
pub fn cmd_run(config_path: &Path, overrides: &Overrides) -> Result<RunReport, CliError> {
    let mut config = RunConfig::load(config_path)?;
    overrides.apply(&mut config);
    let prepared = config.prepare()?;
    config.ensure_out_dir()?;
    config.write_resolved(&config.out_dir)?;
    execute_run(&config, &prepared, &config.out_dir, &mut TeacherPool::new())
}
