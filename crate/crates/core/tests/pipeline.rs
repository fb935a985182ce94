use giftlab::bench::{evaluate_row, prepare, run_method, Method};
use giftlab::harness::checks::median;
use giftlab::harness::ExperimentConfig;
use giftlab::model::{ModelSnapshot, TwoTowerModel};
use giftlab::trainer::{continual_fit, train_task, ContinualInputs, TaskData};
use giftlab::worldgen::{regenerate_for_task, task_split, ClassPool, IncrementalMode, Split};

#[test]
fn class_incremental_is_no_easier_than_task_incremental() {
    let mut til = Vec::new();
    let mut cil = Vec::new();
    for seed in 0..3 {
        for (mode, sink) in [(IncrementalMode::Til, &mut til), (IncrementalMode::Cil, &mut cil)] {
            let mut c = ExperimentConfig::smoke();
            c.suite.mode = mode;
            let bench = prepare(seed, &c.world, &c.suite, c.model, &c.pretrain).unwrap();
            sink.push(run_method(Method::GiftFull, &bench, &c.train).unwrap().report.avg);
        }
    }
    assert!(median(cil.clone()) <= median(til.clone()), "cil {cil:?} til {til:?}");
}

#[test]
fn untrained_model_is_near_chance() {
    let c = ExperimentConfig::smoke();
    let bench = prepare(0, &c.world, &c.suite, c.model, &c.pretrain).unwrap();
    let mut accs = Vec::new();
    for s in 0..8 {
        let model = TwoTowerModel::new(c.model, 1000 + s).unwrap();
        accs.extend(evaluate_row(&model, &bench, 0).unwrap());
    }
    let mean = accs.iter().sum::<f64>() / accs.len() as f64;
    let chance = 1.0 / c.suite.classes_per_task as f64;
    assert!((mean - chance).abs() < 0.06, "mean {mean}, chance {chance}");
}

#[test]
fn pretraining_transfers_to_unseen_classes() {
    let c = ExperimentConfig::default();
    let bench = prepare(0, &c.world, &c.suite, c.model, &c.pretrain).unwrap();
    let row0 = evaluate_row(bench.theta0.model(), &bench, 0).unwrap();
    let chance = 1.0 / c.suite.classes_per_task as f64;
    for (j, a) in row0.iter().enumerate() {
        assert!(*a >= 3.0 * chance, "task {} zero-shot accuracy {a}", j + 1);
    }
}

#[test]
fn single_task_sequence_matches_one_train_task_call() {
    let mut c = ExperimentConfig::smoke();
    c.suite.n_tasks = 1;
    let seed = 7;
    let bench = prepare(seed, &c.world, &c.suite, c.model, &c.pretrain).unwrap();
    let inputs = ContinualInputs {
        world: &bench.world,
        suite: &bench.suite,
        synthetic_per_task: c.suite.synthetic_per_task,
        generator: c.suite.generator,
    };
    let fit = continual_fit(&bench.theta0, inputs, &c.train, seed).unwrap();

    let task = &bench.suite.tasks[0];
    let mut pool = ClassPool::new(bench.suite.base_classes.clone(), false);
    pool.add_task(&task.classes).unwrap();
    let synthetic =
        regenerate_for_task(&bench.world, &pool, task.index, c.suite.synthetic_per_task, &c.suite.generator, seed)
            .unwrap();
    let train = task_split(&bench.world, task, Split::Train).unwrap();
    let texts = bench.world.class_texts(&task.classes);
    let data = TaskData { task, train: &train, class_texts: &texts, synthetic: &synthetic };
    let teacher: &ModelSnapshot = &bench.theta0;
    let direct = train_task(bench.theta0.model(), teacher, data, &c.train, seed).unwrap();
    assert_eq!(fit.final_model(), &direct.model);
    assert_eq!(fit.traces[0], direct.trace);
}
