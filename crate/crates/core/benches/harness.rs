//! Parallel against sequential execution of the two hot loops: independent
//! training runs and per-example gradients for meta re-weighting.

use criterion::{criterion_group, criterion_main, Criterion};

use lst_core::cli::ExperimentConfig;
use lst_core::data;
use lst_core::par;
use lst_core::reweight::{PseudoBatch, ReweightConfig};
use lst_core::selftrain::{run, NoObserver, TaskData};

fn bench(c: &mut Criterion) {
    let mut cfg = ExperimentConfig::default();
    cfg.train.sessions = 1;
    cfg.train.student_steps = 10;
    cfg.train.warmup_steps = 5;
    cfg.train.fn_epochs = 10;
    cfg.train.labeled_ft_epochs = 2;
    let enc = cfg.build_encoder().unwrap();
    let corpus = cfg.build_corpus().unwrap();
    let model = cfg.build_model(&enc, &corpus.vocab).unwrap();
    let tpl = cfg.template(&corpus.vocab).unwrap();
    let split = data::split(&corpus, &cfg.few_shot, 1).unwrap();
    let task = TaskData::from_split(&corpus, &split, 10, &tpl, cfg.encoder.max_len).unwrap();
    let seeds: Vec<u64> = (1..=4).collect();
    let one_run = |&s: &u64| run(&cfg.train_config(s), &cfg.adapter, &model, &task, &mut NoObserver).unwrap();

    let mut g = c.benchmark_group("runs_x4");
    g.sample_size(10);
    g.bench_function("parallel", |b| b.iter(|| par::map(&seeds, one_run)));
    g.bench_function("sequential", |b| b.iter(|| par::map_seq(&seeds, one_run)));
    g.finish();

    let teacher = model.init_tunable(&cfg.adapter, 1).unwrap();
    let batch: Vec<_> = task.unlabeled[..16].to_vec();
    let pb = PseudoBatch::new(batch.clone(), model.probs(&teacher, &batch).unwrap()).unwrap();
    let val: Vec<_> = task.labeled.items().iter().take(4).collect();
    let rcfg = ReweightConfig::default();
    // per-example gradients use par::map inside the crate, so this one is
    // compared across builds: `cargo bench` against `--no-default-features`
    let mut g = c.benchmark_group("meta_weights_b16");
    g.sample_size(20);
    let mode = if par::is_parallel() { "parallel" } else { "sequential" };
    g.bench_function(mode, |b| {
        b.iter(|| lst_core::reweight::meta_weights(&pb, &val, &model, &teacher, &rcfg).unwrap())
    });
    g.finish();
}

criterion_group!(benches, bench);
criterion_main!(benches);
