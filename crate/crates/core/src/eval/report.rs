use std::fmt::Write as _;

use itertools::Itertools;
use serde::{Deserialize, Serialize};

use super::EvalError;
use crate::lifelong::{run_method, FinalScore, Method, NoObserver, RunReport, StreamConfig, TeacherPool};
use crate::taskdata::{TaskDataset, Vocabulary};

/// Largest task count the harness enumerates all orders for by default.
pub const MAX_PERMUTED_TASKS: usize = 4;

/// Every ordering of `ids`, in lexicographic order of positions.
pub fn all_orders(ids: &[String]) -> Vec<Vec<String>> {
    ids.iter().cloned().permutations(ids.len()).collect()
}

/// Population standard deviation (divides by `n`); 0 for fewer than two values.
pub fn population_std(values: &[f64]) -> f64 {
    if values.len() < 2 {
        return 0.0;
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt()
}

fn mean(values: &[f64]) -> f64 {
    values.iter().sum::<f64>() / values.len().max(1) as f64
}

/// Final scores of one method on one order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OrderResult {
    pub method: Method,
    pub order: Vec<String>,
    pub seed: u64,
    pub final_scores: Vec<FinalScore>,
    pub average: f64,
}

impl From<&RunReport> for OrderResult {
    fn from(r: &RunReport) -> Self {
        Self { method: r.method, order: r.order.clone(), seed: r.seed, final_scores: r.final_scores.clone(), average: r.final_average }
    }
}

impl OrderResult {
    pub fn score(&self, task_id: &str) -> Option<f64> {
        self.final_scores.iter().find(|s| s.task_id == task_id).map(|s| s.value)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskStat {
    pub task_id: String,
    pub mean: f64,
    pub std: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodSummary {
    pub method: Method,
    pub runs: usize,
    pub tasks: Vec<TaskStat>,
    /// Mean over orders of the unweighted per-run task average.
    pub average_mean: f64,
    pub average_std: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PermutationReport {
    pub tasks: Vec<String>,
    pub results: Vec<OrderResult>,
    pub summaries: Vec<MethodSummary>,
}

impl PermutationReport {
    pub fn summary(&self, method: Method) -> Option<&MethodSummary> {
        self.summaries.iter().find(|s| s.method == method)
    }

    /// Fixed-width table: one row per method with per-task means, the average, and its std.
    pub fn to_table(&self) -> String {
        let mut out = format!("{:<16}", "method");
        for t in &self.tasks {
            let _ = write!(out, " {t:>10}");
        }
        let _ = writeln!(out, " {:>10} {:>10}", "avg", "std");
        for s in &self.summaries {
            let _ = write!(out, "{:<16}", s.method.name());
            for t in &s.tasks {
                let _ = write!(out, " {:>10.1}", t.mean);
            }
            let _ = writeln!(out, " {:>10.1} {:>10.2}", s.average_mean, s.average_std);
        }
        out
    }

    /// CSV rows `method,task,mean,std`; the task column is `avg` for the average.
    pub fn write_csv<W: std::io::Write>(&self, w: W) -> csv::Result<()> {
        #[derive(Serialize)]
        struct Row<'a> {
            method: Method,
            task: &'a str,
            mean: f64,
            std: f64,
        }
        let mut out = csv::Writer::from_writer(w);
        for s in &self.summaries {
            for t in &s.tasks {
                out.serialize(Row { method: s.method, task: &t.task_id, mean: t.mean, std: t.std })?;
            }
            out.serialize(Row { method: s.method, task: "avg", mean: s.average_mean, std: s.average_std })?;
        }
        out.flush()?;
        Ok(())
    }
}

/// Aggregates per-order results into per-method mean/std rows.
pub fn summarize(tasks: &[String], results: Vec<OrderResult>) -> PermutationReport {
    let methods: Vec<Method> = results.iter().map(|r| r.method).unique().collect();
    let summaries = methods
        .into_iter()
        .map(|method| {
            let runs: Vec<&OrderResult> = results.iter().filter(|r| r.method == method).collect();
            let task_stats = tasks
                .iter()
                .map(|t| {
                    let vals: Vec<f64> = runs.iter().filter_map(|r| r.score(t)).collect();
                    TaskStat { task_id: t.clone(), mean: mean(&vals), std: population_std(&vals) }
                })
                .collect();
            let avgs: Vec<f64> = runs.iter().map(|r| r.average).collect();
            MethodSummary { method, runs: runs.len(), tasks: task_stats, average_mean: mean(&avgs), average_std: population_std(&avgs) }
        })
        .collect();
    PermutationReport { tasks: tasks.to_vec(), results, summaries }
}

/// Runs every method on every ordering of `tasks` with the same seed, then summarizes.
pub fn permutation_harness(
    tasks: &[TaskDataset],
    vocab: &Vocabulary,
    config: &StreamConfig,
    methods: &[Method],
    teachers: &mut TeacherPool,
) -> Result<PermutationReport, EvalError> {
    if tasks.len() > MAX_PERMUTED_TASKS {
        return Err(EvalError::TooManyTasks { tasks: tasks.len(), max: MAX_PERMUTED_TASKS });
    }
    let ids: Vec<String> = tasks.iter().map(|t| t.task_id().to_string()).collect();
    let mut results = Vec::new();
    for order in all_orders(&ids) {
        let stream = order_tasks(tasks, &order)?;
        for &method in methods {
            let report = run_method(method, &stream, vocab, config, teachers, &mut NoObserver)
                .map_err(|e| EvalError::Run(Box::new(e)))?;
            results.push(OrderResult::from(&report));
        }
    }
    Ok(summarize(&ids, results))
}

/// Reorders `tasks` to follow `order`.
pub fn order_tasks(tasks: &[TaskDataset], order: &[String]) -> Result<Vec<TaskDataset>, EvalError> {
    order
        .iter()
        .map(|id| tasks.iter().find(|t| t.task_id() == id).cloned().ok_or_else(|| EvalError::UnknownTask(id.clone())))
        .collect()
}

/// One point of a learning curve.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurveRow {
    pub epoch: usize,
    pub training_task: String,
    pub eval_task: String,
    pub value: f64,
    /// The training task changes after this epoch.
    pub boundary: bool,
}

/// Per-task score against global epoch, with task-boundary markers.
pub fn learning_curves(report: &RunReport) -> Result<Vec<CurveRow>, EvalError> {
    let expected = report.total_epochs * report.order.len();
    if !report.completed || report.records.len() != expected {
        return Err(EvalError::IncompleteReport { expected, got: report.records.len() });
    }
    let mut rows: Vec<CurveRow> = report
        .records
        .iter()
        .map(|r| CurveRow {
            epoch: r.epoch,
            training_task: r.training_task.clone(),
            eval_task: r.eval_task.clone(),
            value: r.value,
            boundary: report.boundaries.contains(&r.epoch),
        })
        .collect();
    rows.sort_by(|a, b| a.eval_task.cmp(&b.eval_task).then(a.epoch.cmp(&b.epoch)));
    Ok(rows)
}

/// CSV with columns `epoch,training_task,eval_task,value,boundary`.
pub fn write_curve_csv<W: std::io::Write>(rows: &[CurveRow], w: W) -> csv::Result<()> {
    let mut out = csv::Writer::from_writer(w);
    for r in rows {
        out.serialize(r)?;
    }
    out.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn result(method: Method, avg: f64, a: f64) -> OrderResult {
        OrderResult {
            method,
            order: vec!["a".into()],
            seed: 0,
            final_scores: vec![FinalScore { task_id: "a".into(), value: a }],
            average: avg,
        }
    }

    #[test]
    fn orders_are_all_permutations() {
        let ids: Vec<String> = ["x", "y", "z"].map(String::from).to_vec();
        let orders = all_orders(&ids);
        assert_eq!(orders.len(), 6);
        assert_eq!(orders.iter().unique().count(), 6);
        assert_eq!(orders[0], ids);
    }

    #[test]
    fn std_is_population() {
        assert_eq!(population_std(&[5.0, 5.0, 5.0]), 0.0);
        assert!((population_std(&[1.0, 3.0]) - 1.0).abs() < 1e-12);
        assert_eq!(population_std(&[7.0]), 0.0);
    }

    #[test]
    fn summary_recomputes_from_results() {
        let tasks = vec!["a".to_string()];
        let results = vec![
            result(Method::Lamol, 10.0, 10.0),
            result(Method::Lamol, 30.0, 30.0),
            result(Method::Finetune, 50.0, 50.0),
            result(Method::Finetune, 50.0, 50.0),
        ];
        let rep = summarize(&tasks, results);
        let lamol = rep.summary(Method::Lamol).unwrap();
        assert_eq!((lamol.average_mean, lamol.average_std, lamol.runs), (20.0, 10.0, 2));
        assert_eq!(rep.summary(Method::Finetune).unwrap().average_std, 0.0);
        assert!(rep.to_table().contains("lamol"));
        let mut csv = Vec::new();
        rep.write_csv(&mut csv).unwrap();
        assert_eq!(String::from_utf8(csv).unwrap().lines().count(), 1 + 2 * 2);
    }
}
