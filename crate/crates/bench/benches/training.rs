use criterion::*;
use l2kd::autodiff::{AdamConfig, AdamState, Tape};
use l2kd::distill::{nll_loss, teacher_distribution, word_kd_loss};
use l2kd::eval::evaluate_task;
use l2kd::lifelong::sample_pseudo_data;
use l2kd::model::{greedy_decode, LogitsModel};
use std::hint::black_box;
use l2kd_bench::fixture;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

criterion_group!(benches, forward_backward, losses, decoding, optimizer);
criterion_main!(benches);

fn forward_backward(c: &mut Criterion) {
    let mut group = c.benchmark_group("forward_backward");
    for d in [16, 32, 64] {
        let (_, task, model) = fixture(d);
        let tokens = &task.train[0].encoded;
        group.bench_with_input(BenchmarkId::new("logits", d), &d, |b, _| b.iter(|| model.logits(black_box(tokens)).unwrap()));
        group.bench_with_input(BenchmarkId::new("nll_backward", d), &d, |b, _| {
            b.iter(|| {
                let mut tape = Tape::new();
                let binding = model.params().bind(&mut tape).unwrap();
                let loss = nll_loss(&model, &mut tape, &binding, &task.train[0], 0).unwrap();
                tape.backward(loss).unwrap()
            })
        });
    }
    group.finish();
}

fn losses(c: &mut Criterion) {
    let (_, task, student) = fixture(32);
    let (_, _, teacher) = fixture(32);
    let s = &task.train[0];
    c.bench_function("teacher_distribution/tau2", |b| b.iter(|| teacher_distribution(&teacher, black_box(s), 2.0).unwrap()));
    c.bench_function("word_kd_backward/tau2", |b| {
        b.iter(|| {
            let mut tape = Tape::new();
            let binding = student.params().bind(&mut tape).unwrap();
            let loss = word_kd_loss(&student, &mut tape, &binding, &teacher, s, 0, 2.0).unwrap();
            tape.backward(loss).unwrap()
        })
    });
}

fn decoding(c: &mut Criterion) {
    let (vocab, task, model) = fixture(32);
    let prefix = task.train[0].answer_prefix();
    c.bench_function("greedy_decode", |b| b.iter(|| greedy_decode(&model, black_box(prefix), vocab.eos(), 8).unwrap()));
    c.bench_function("evaluate_task/8", |b| {
        let mut small = task.clone();
        small.test.truncate(8);
        b.iter(|| evaluate_task(&model, &vocab, &small).unwrap())
    });
    c.bench_function("sample_pseudo_data/16", |b| {
        let prev = [task.task_id()];
        b.iter(|| {
            let mut rng = ChaCha8Rng::seed_from_u64(0);
            sample_pseudo_data(&model, &vocab, "next", &prev, 16, 20, 5, &mut rng).unwrap()
        })
    });
}

fn optimizer(c: &mut Criterion) {
    let (_, task, mut model) = fixture(32);
    let mut tape = Tape::new();
    let binding = model.params().bind(&mut tape).unwrap();
    let loss = nll_loss(&model, &mut tape, &binding, &task.train[0], 0).unwrap();
    let grads = tape.backward(loss).unwrap();
    model.params_mut().accumulate_grads(&binding, &grads).unwrap();
    c.bench_function("adam_step/d32", |b| {
        b.iter_batched(
            || (AdamState::new(AdamConfig::default(), model.params(), 1), model.params().clone()),
            |(mut adam, mut params)| adam.step(&mut params).unwrap(),
            BatchSize::SmallInput,
        )
    });
}
