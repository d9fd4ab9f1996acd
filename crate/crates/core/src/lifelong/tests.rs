use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::model::{LanguageModel, ModelConfig};
use crate::taskdata::{generate_task, parse_pseudo, GeneratorKind, TaskDataset, TaskSpec, Vocabulary};

fn setup(n_train: usize) -> (Vocabulary, Vec<TaskDataset>) {
    let mk = |id: &str, kind| TaskSpec { n_train, n_test: 6, min_len: 2, max_len: 3, ..TaskSpec::new(id, kind, "a b c") };
    let specs = vec![mk("reverse", GeneratorKind::Reverse), mk("copy", GeneratorKind::Copy), mk("sort", GeneratorKind::Sort)];
    let vocab = Vocabulary::build(&specs).unwrap();
    let data = specs.iter().map(|s| generate_task(s, &vocab, 12).unwrap()).collect();
    (vocab, data)
}

fn tiny() -> StreamConfig {
    StreamConfig {
        epochs_per_task: 2,
        batch_size: 4,
        seed: 3,
        gamma: 0.5,
        model: ModelConfig { n_layers: 1, n_heads: 1, d_model: 8, context_len: 12, vocab_size: 0 },
        optimizer: crate::autodiff::AdamConfig { lr_max: 1e-2, ..Default::default() },
        teacher_gate: 0.0,
        ..StreamConfig::default()
    }
}

#[test]
fn pseudo_arithmetic() {
    assert_eq!(pseudo_count(0.2, 100), 20);
    assert_eq!(pseudo_count(0.29, 100), 29);
    assert_eq!(pseudo_count(0.0, 100), 0);
    assert_eq!(apportion(20, 2), vec![10, 10]);
    assert_eq!(apportion(7, 3), vec![3, 2, 2]);
    assert!(apportion(5, 0).is_empty());
    assert_eq!(pseudo_batches_per_epoch(0.2, 13), 2);
}

#[test]
fn pseudo_sampling_contract() {
    let (vocab, _) = setup(8);
    let cfg = ModelConfig { n_layers: 1, n_heads: 1, d_model: 8, context_len: 12, vocab_size: vocab.len() };
    let student = LanguageModel::new(cfg, 1).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let none = sample_pseudo_data(&student, &vocab, "sort", &[], 20, 20, 5, &mut rng).unwrap();
    assert_eq!(none.accepted(), 0);
    assert!(none.per_task.is_empty());

    // The gold teacher always emits well-formed sequences, so quotas fill exactly.
    let (_, data) = setup(8);
    let gold = crate::distill::OneHotTeacher::new(&[data[0].train.clone(), data[1].train.clone()].concat(), &vocab, 12);
    let set = sample_pseudo_data(&gold, &vocab, "sort", &["reverse", "copy"], 20, 1, 5, &mut rng).unwrap();
    assert_eq!(set.requested, 20);
    assert_eq!(set.per_task.iter().map(|t| t.requested).collect::<Vec<_>>(), vec![10, 10]);
    assert_eq!(set.accepted(), 20);
    for s in &set.samples {
        assert_eq!(parse_pseudo(&vocab, &s.encoded).as_ref(), Ok(s));
    }

    // An untrained student rarely produces valid samples; attempts stay capped.
    let set = sample_pseudo_data(&student, &vocab, "sort", &["reverse", "copy"], 6, 20, 2, &mut rng).unwrap();
    for t in &set.per_task {
        assert!(t.attempts <= 2 * t.requested);
        assert!(t.accepted <= t.requested);
    }
    for s in &set.samples {
        assert!(parse_pseudo(&vocab, &s.encoded).is_ok());
    }
}

#[test]
fn method_names_round_trip() {
    for m in Method::ALL {
        assert_eq!(m.name().parse::<Method>().unwrap(), m);
        assert_eq!(serde_json::to_string(&m).unwrap(), format!("\"{}\"", m.name()));
    }
    assert!("nope".parse::<Method>().is_err());
    assert_eq!(Method::L2kdSeqSoft.distill_kind(), crate::distill::DistillKind::SeqKdSoft);
}

#[test]
fn config_validation() {
    assert!(StreamConfig::default().validate().is_ok());
    let e = StreamConfig { gamma: -1.0, ..StreamConfig::default() }.validate().unwrap_err();
    assert!(e.to_string().contains("gamma"));
    assert!(StreamConfig { epochs_per_task: 0, ..StreamConfig::default() }.validate().is_err());
    assert!(StreamConfig { batch_size: 0, ..StreamConfig::default() }.validate().is_err());
}

#[test]
fn lamol_stream_structure_and_audit() {
    let (vocab, data) = setup(10);
    let cfg = tiny();
    let r = run_lamol_stream(&data, &vocab, &cfg).unwrap();
    assert!(r.completed);
    assert_eq!(r.total_epochs, 6);
    assert_eq!(r.records.len(), 3 * 6);
    assert_eq!(r.boundaries, vec![2, 4]);
    assert_eq!(r.final_scores.len(), 3);
    // Replay only from the second task on, with floor(gamma * |D_m|) requested.
    assert_eq!(r.pseudo.len(), 2);
    assert!(r.pseudo.iter().all(|p| p.requested == 5));
    let new_batches = 10usize.div_ceil(4);
    for (m, task) in r.order.iter().enumerate() {
        for epoch in 2 * m + 1..=2 * m + 2 {
            let steps: Vec<&StepRecord> = r.steps.iter().filter(|s| s.epoch == epoch).collect();
            let new: Vec<_> = steps.iter().filter(|s| s.source == BatchSource::New).collect();
            let pseudo: Vec<_> = steps.iter().filter(|s| s.source == BatchSource::Pseudo).collect();
            assert_eq!(new.len(), new_batches);
            assert!(new.iter().all(|s| s.batch_tasks == vec![task.clone()]));
            if m == 0 || r.pseudo[m - 1].accepted() == 0 {
                assert!(pseudo.is_empty());
            } else {
                assert_eq!(pseudo.len(), pseudo_batches_per_epoch(0.5, new_batches));
            }
            for p in pseudo {
                assert_eq!(p.loss_kind, crate::distill::DistillKind::Nll);
                assert!(p.batch_tasks.iter().all(|t| r.order[..m].contains(t)));
            }
        }
    }
}

#[test]
fn runs_are_deterministic() {
    let (vocab, data) = setup(8);
    let cfg = tiny();
    let a = run_lamol_stream(&data, &vocab, &cfg).unwrap();
    let b = run_lamol_stream(&data, &vocab, &cfg).unwrap();
    assert_eq!(a, b);
    let mut ca = Vec::new();
    let mut cb = Vec::new();
    a.write_csv(&mut ca).unwrap();
    b.write_csv(&mut cb).unwrap();
    assert_eq!(ca, cb);
    let c = run_lamol_stream(&data, &vocab, &StreamConfig { seed: 4, ..cfg }).unwrap();
    assert_ne!(a.steps, c.steps);
}

#[test]
fn finetune_never_replays() {
    let (vocab, data) = setup(8);
    let r = run_finetune_stream(&data, &vocab, &tiny()).unwrap();
    assert_eq!(r.gamma, 0.0);
    assert!(r.pseudo.is_empty());
    assert!(r.steps.iter().all(|s| s.source == BatchSource::New));
}

#[test]
fn distillation_stream_keeps_teachers_frozen() {
    let (vocab, data) = setup(16);
    let mut pool = TeacherPool::new();
    let cfg = StreamConfig { epochs_per_task: 6, optimizer: crate::autodiff::AdamConfig { lr_max: 3e-2, ..Default::default() }, ..tiny() };
    for kind in [crate::distill::DistillKind::WordKd, crate::distill::DistillKind::SeqKd, crate::distill::DistillKind::SeqKdSoft] {
        let r = run_l2kd_stream(&data, &vocab, &cfg, kind, &mut pool).unwrap();
        assert_eq!(r.teachers.len(), 3);
        for t in &r.teachers {
            assert!(t.checksum_before.is_some());
            assert_eq!(t.checksum_before, t.checksum_after);
        }
        assert!(r.steps.iter().filter(|s| s.source == BatchSource::New).all(|s| s.loss_kind == kind));
    }
    // Teachers are trained once per task and reused across kinds.
    assert_eq!(pool.trained(), 3);
    for id in ["reverse", "copy", "sort"] {
        assert_eq!(pool.get(id).unwrap().seen_tasks, vec![id.to_string()]);
    }
    assert!(run_l2kd_stream(&data, &vocab, &cfg, crate::distill::DistillKind::Nll, &mut pool).is_err());
}

#[test]
fn single_task_stream_has_no_replay() {
    let (vocab, data) = setup(8);
    let r = run_l2kd_stream(&data[..1], &vocab, &tiny(), crate::distill::DistillKind::WordKd, &mut TeacherPool::new()).unwrap();
    assert!(r.pseudo.is_empty());
    assert!(r.boundaries.is_empty());
    assert_eq!(r.records.len(), 2);
    assert_eq!(r.teachers.len(), 1);
}

#[test]
fn gold_word_kd_matches_lamol_on_first_task() {
    let (vocab, data) = setup(8);
    let cfg = StreamConfig { temperature: 1.0, ..tiny() };
    let lamol = run_lamol_stream(&data, &vocab, &cfg).unwrap();
    let kd = run_l2kd_stream(&data, &vocab, &cfg, crate::distill::DistillKind::WordKd, &mut GoldTeachers).unwrap();
    let first: Vec<_> = lamol.steps.iter().filter(|s| s.training_task == "reverse").collect();
    let first_kd: Vec<_> = kd.steps.iter().filter(|s| s.training_task == "reverse").collect();
    assert_eq!(first.len(), first_kd.len());
    for (a, b) in first.iter().zip(&first_kd) {
        assert!((a.loss - b.loss).abs() < 1e-9, "step {}: {} vs {}", a.step, a.loss, b.loss);
        assert_eq!(a.lr, b.lr);
    }
}

struct Counting {
    inner: GoldTeachers,
    calls: Vec<String>,
}

impl TeacherProvider for Counting {
    fn teacher(&mut self, task: &TaskDataset, vocab: &Vocabulary, config: &StreamConfig) -> Result<Arc<Teacher>, LifelongError> {
        self.calls.push(task.task_id().to_string());
        self.inner.teacher(task, vocab, config)
    }
}

#[test]
fn multitask_epochs_and_teachers() {
    let (vocab, data) = setup(8);
    let mut counting = Counting { inner: GoldTeachers, calls: Vec::new() };
    let r = run_multitask(&data, &vocab, &tiny(), false, &mut counting).unwrap();
    assert!(counting.calls.is_empty());
    assert_eq!(r.total_epochs, 6);
    assert_eq!(r.records.len(), 18);
    assert!(r.boundaries.is_empty());
    let r = run_multitask(&data, &vocab, &tiny(), true, &mut counting).unwrap();
    assert_eq!(counting.calls, vec!["reverse", "copy", "sort"]);
    assert_eq!(r.teachers.len(), 3);
    let first_step = r.steps.first().unwrap().step;
    assert_eq!(first_step, 0);
}

#[test]
fn teacher_gate_blocks_with_diagnostic() {
    let (vocab, data) = setup(8);
    let cfg = StreamConfig { teacher_gate: 100.0, epochs_per_task: 1, ..tiny() };
    let mut pool = TeacherPool::new();
    match run_l2kd_stream(&data, &vocab, &cfg, crate::distill::DistillKind::WordKd, &mut pool) {
        Err(LifelongError::TeacherGate { task_id, threshold, .. }) => {
            assert_eq!(task_id, "reverse");
            assert_eq!(threshold, 100.0);
        }
        other => panic!("expected gate failure, got {other:?}"),
    }
}

#[test]
fn teacher_training_is_deterministic_and_isolated() {
    let (vocab, data) = setup(8);
    let a = train_teacher(&data[1], &vocab, &tiny()).unwrap();
    let b = train_teacher(&data[1], &vocab, &tiny()).unwrap();
    assert_eq!(a.checksum(), b.checksum());
    assert_eq!(a.seen_tasks, vec!["copy".to_string()]);
}

#[test]
fn invalid_streams_are_rejected() {
    let (vocab, data) = setup(8);
    assert!(run_lamol_stream(&[], &vocab, &tiny()).is_err());
    let dup = vec![data[0].clone(), data[0].clone()];
    assert!(matches!(run_lamol_stream(&dup, &vocab, &tiny()), Err(LifelongError::InvalidConfig(_))));
}
