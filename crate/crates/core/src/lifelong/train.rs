use crate::autodiff::{AdamState, Tape};
use crate::distill::{prepared_loss, DistillKind, LossKind, PreparedSample};
use crate::model::LanguageModel;

use super::{BatchSource, LifelongError, StepRecord};

/// One optimizer update on the batch mean of the per-sample losses.
/// Returns `(loss, lr)`; `None` signals a non-finite loss or update.
pub(crate) fn train_step(
    model: &mut LanguageModel,
    adam: &mut AdamState,
    batch: &[&PreparedSample],
    loss: LossKind,
    lm_weight: f64,
) -> Result<Option<(f64, f64)>, LifelongError> {
    let mut tape = Tape::new();
    let binding = model.params().bind(&mut tape)?;
    let mut total = None;
    for item in batch {
        let l = prepared_loss(model, &mut tape, &binding, item, loss, lm_weight)?;
        total = Some(match total {
            None => l,
            Some(acc) => tape.add(acc, l)?,
        });
    }
    let Some(total) = total else {
        return Ok(Some((0.0, 0.0)));
    };
    let mean = tape.scale(total, 1.0 / batch.len() as f64)?;
    let value = tape.scalar(mean);
    if !value.is_finite() {
        return Ok(None);
    }
    let grads = tape.backward(mean)?;
    let params = model.params_mut();
    params.accumulate_grads(&binding, &grads)?;
    let lr = adam.step(params)?;
    params.zero_grads();
    if !params.all_finite() {
        return Ok(None);
    }
    Ok(Some((value, lr)))
}

/// Shared bookkeeping for the stream drivers.
pub(crate) struct StepLog {
    pub records: Vec<StepRecord>,
}

impl StepLog {
    #[allow(clippy::too_many_arguments)]
    pub fn push(
        &mut self,
        epoch: usize,
        training_task: &str,
        source: BatchSource,
        loss_kind: DistillKind,
        batch: &[&PreparedSample],
        loss: f64,
        lr: f64,
    ) {
        let mut tasks: Vec<String> = Vec::new();
        for b in batch {
            if !tasks.contains(&b.sample.task_id) {
                tasks.push(b.sample.task_id.clone());
            }
        }
        tasks.sort();
        let step = self.records.len();
        self.records.push(StepRecord {
            step,
            epoch,
            training_task: training_task.to_string(),
            source,
            loss_kind,
            batch_tasks: tasks,
            batch_size: batch.len(),
            loss,
            lr,
        });
    }
}
