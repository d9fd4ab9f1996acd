use std::fs::{self, File};
use std::io::{BufReader, BufWriter};
use std::path::{Path, PathBuf};

use l2kd::eval::{learning_curves, teacher_split_analysis, write_curve_csv, SplitAnalysis};
use l2kd::lifelong::RunReport;
use l2kd::model::LanguageModel;

use crate::config::{RunConfig, RESOLVED_CONFIG};
use crate::run::{checkpoint_path, run_name, teacher_path};
use crate::{read_json, write_json, CliError};

pub const CURVES_DIR: &str = "curves";
pub const SPLITS_DIR: &str = "splits";

pub fn split_table_path(dir: &Path, task_id: &str) -> PathBuf {
    dir.join(SPLITS_DIR).join(format!("{task_id}.csv"))
}

fn load_model(path: &Path) -> Result<LanguageModel, CliError> {
    let file = File::open(path).map_err(|e| CliError::io(path, e))?;
    LanguageModel::load(BufReader::new(file)).map_err(|e| CliError::runtime(format!("{}: {e}", path.display())))
}

fn require(missing: &mut Vec<String>, path: &Path, what: &str) {
    if !path.is_file() {
        missing.push(format!("{} ({what})", path.display()));
    }
}

/// `analyze <dir>`: per-task learning curves and, when the run asked for it,
/// per-task teacher-split tables of the final student.
pub fn cmd_analyze(dir: &Path) -> Result<Vec<SplitAnalysis>, CliError> {
    let config_path = dir.join(RESOLVED_CONFIG);
    if !config_path.is_file() {
        return Err(CliError::Missing(vec![format!("{} (resolved config)", config_path.display())]));
    }
    let config: RunConfig = read_json(&config_path)?;
    let prepared = config.prepare()?;
    let order = prepared.order();
    let name = run_name(config.method, &order, config.seed);
    let report_path = dir.join(format!("{name}.json"));

    let mut missing = Vec::new();
    require(&mut missing, &report_path, "run report");
    let final_student = if config.method.is_multitask() {
        checkpoint_path(dir, 0, "multitask")
    } else {
        checkpoint_path(dir, order.len() - 1, &order[order.len() - 1])
    };
    if config.split_analysis {
        require(&mut missing, &final_student, "final student checkpoint");
        for id in &order {
            require(&mut missing, &teacher_path(dir, id), "teacher checkpoint");
        }
    }
    if !missing.is_empty() {
        return Err(CliError::Missing(missing));
    }

    let report: RunReport = read_json(&report_path)?;
    let rows = learning_curves(&report).map_err(|e| CliError::Missing(vec![format!("{} ({e})", report_path.display())]))?;
    let curves = dir.join(CURVES_DIR);
    fs::create_dir_all(&curves).map_err(|e| CliError::io(&curves, e))?;
    for id in &order {
        let task_rows: Vec<_> = rows.iter().filter(|r| &r.eval_task == id).cloned().collect();
        let path = curves.join(format!("{id}.csv"));
        let file = File::create(&path).map_err(|e| CliError::io(&path, e))?;
        write_curve_csv(&task_rows, BufWriter::new(file)).map_err(|e| CliError::runtime(format!("{}: {e}", path.display())))?;
    }

    let mut splits = Vec::new();
    if config.split_analysis {
        let student = load_model(&final_student)?;
        fs::create_dir_all(dir.join(SPLITS_DIR)).map_err(|e| CliError::io(dir.join(SPLITS_DIR), e))?;
        for task in &prepared.tasks {
            let teacher = load_model(&teacher_path(dir, task.task_id()))?;
            let split = teacher_split_analysis(&student, &teacher, &prepared.vocab, task).map_err(CliError::runtime)?;
            let path = split_table_path(dir, task.task_id());
            let file = File::create(&path).map_err(|e| CliError::io(&path, e))?;
            let mut w = csv::Writer::from_writer(BufWriter::new(file));
            w.serialize(&split)
                .and_then(|()| w.flush().map_err(csv::Error::from))
                .map_err(|e| CliError::runtime(format!("{}: {e}", path.display())))?;
            splits.push(split);
        }
        write_json(&dir.join(SPLITS_DIR).join("splits.json"), &splits)?;
    }
    Ok(splits)
}
