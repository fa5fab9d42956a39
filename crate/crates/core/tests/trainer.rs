use maaig_core::dataset::{DatasetManifest, Split, SEPARATOR};
use maaig_core::model::{greedy_decode, Arch, ModelConfig};
use maaig_core::skeleton::CoordSystem;
use maaig_core::synth::{gen_corpus, CorpusKind};
use maaig_core::tokenizer::Vocabulary;
use maaig_core::trainer::{run_matrix, train, MatrixConfig, Stage, TrainConfig};
use maaig_core::Error;

fn one_example() -> (DatasetManifest, Vocabulary) {
    let mut m = gen_corpus(CorpusKind::Finetune, 1, 3).unwrap().in_coord(CoordSystem::Local).unwrap();
    m.examples[0].split = Split::Train;
    m.examples[0].instruction = format!("increase your rotation speed{SEPARATOR}bend your knees more on landing");
    let vocab = Vocabulary::train(&[m.examples[0].instruction.as_str()], 1);
    (m, vocab)
}

#[test]
fn overfits_a_single_example() {
    let (data, vocab) = one_example();
    let mut cfg = TrainConfig::new(Stage::Scratch, Arch::T5Style, CoordSystem::Local);
    cfg.steps = 500;
    cfg.batch_size = 1;
    cfg.lr = 1e-3;
    let t = std::time::Instant::now();
    let report = train(&cfg, &data, &vocab).unwrap();
    println!("500 steps in {:.2}s, final loss {:.5}", t.elapsed().as_secs_f64(), report.final_loss());
    assert!(report.final_loss() < 0.05);
    // 50-step window means never rise
    let windows: Vec<f64> = report.loss_curve.chunks(50).map(|w| w.iter().map(|s| s.1).sum::<f64>() / w.len() as f64).collect();
    println!("window means {windows:?}");
    assert!(windows.windows(2).all(|w| w[1] <= w[0]), "{windows:?}");
    let p = &report.checkpoint.params;
    let out = greedy_decode(p, &data.examples[0].clip, p.config.max_tokens);
    assert_eq!(out, vocab.encode(&data.examples[0].instruction, true));
}

fn small_corpus() -> (DatasetManifest, Vocabulary) {
    let m = gen_corpus(CorpusKind::Finetune, 12, 8).unwrap().in_coord(CoordSystem::Local).unwrap();
    let texts: Vec<&str> = m.examples.iter().map(|e| e.instruction.as_str()).collect();
    let vocab = Vocabulary::train(&texts, 1);
    (m.only(Split::Train), vocab)
}

fn quick(stage: Stage) -> TrainConfig {
    let mut cfg = TrainConfig::new(stage, Arch::Transformer, CoordSystem::Local);
    cfg.model = ModelConfig::tiny(Arch::Transformer, 0);
    cfg.model.dropout = 0.1;
    cfg.steps = 12;
    cfg.batch_size = 3;
    cfg.seed = 5;
    cfg
}

#[test]
fn equal_inputs_give_identical_runs() {
    let (data, vocab) = small_corpus();
    let a = train(&quick(Stage::Scratch), &data, &vocab).unwrap();
    let b = train(&quick(Stage::Scratch), &data, &vocab).unwrap();
    assert_eq!(a.loss_curve, b.loss_curve);
    assert_eq!(a.checkpoint, b.checkpoint);
    let steps: Vec<usize> = a.loss_curve.iter().map(|s| s.0).collect();
    assert_eq!(steps, (1..=12).collect::<Vec<_>>());
    assert!(a.loss_curve.iter().all(|s| s.1.is_finite()));
}

#[test]
fn finetune_continues_from_its_parent() {
    let (data, vocab) = small_corpus();
    assert!(matches!(train(&quick(Stage::Finetune), &data, &vocab), Err(Error::Precondition(_))));
    let parent = train(&quick(Stage::Pretrain), &data, &vocab).unwrap();
    let mut cfg = quick(Stage::Finetune);
    cfg.init_from = Some(parent.checkpoint.clone());
    let child = train(&cfg, &data, &vocab).unwrap();
    assert_eq!(child.checkpoint.lineage.len(), 3);
    assert!(child.checkpoint.lineage[2].starts_with("finetune"));
    // a different vocabulary is refused
    let other = Vocabulary::train(&["something else entirely"], 1);
    assert!(train(&cfg, &data, &other).is_err());
}

#[test]
fn test_split_and_coordinate_mismatch_are_refused() {
    let (mut data, vocab) = small_corpus();
    let mut world = quick(Stage::Scratch);
    world.coord = CoordSystem::World;
    assert!(matches!(train(&world, &data, &vocab), Err(Error::Precondition(_))));
    data.examples[0].split = Split::Test;
    assert!(matches!(train(&quick(Stage::Scratch), &data, &vocab), Err(Error::Precondition(_))));
    let empty = DatasetManifest {
        examples: vec![],
        seed: 0,
        separator: SEPARATOR.into(),
    };
    assert!(train(&quick(Stage::Scratch), &empty, &vocab).is_err());
}

#[test]
fn divergence_reports_the_step() {
    let (data, vocab) = small_corpus();
    let mut cfg = quick(Stage::Scratch);
    cfg.lr = 1e300;
    cfg.steps = 50;
    match train(&cfg, &data, &vocab) {
        Err(Error::Diverged { step, .. }) => assert!(step >= 1),
        other => panic!("expected divergence, got {:?}", other.map(|r| r.final_loss())),
    }
}

#[test]
fn matrix_has_six_labeled_rows_and_persists_artifacts() {
    let pre = gen_corpus(CorpusKind::Pretrain, 10, 1).unwrap();
    let ft = gen_corpus(CorpusKind::Finetune, 10, 2).unwrap();
    let mut cfg = MatrixConfig::desk(0);
    cfg.model = ModelConfig::tiny(Arch::T5Style, 0);
    cfg.pretrain_steps = 3;
    cfg.finetune_steps = 3;
    cfg.batch_size = 2;
    let result = run_matrix(&cfg, &pre, &ft).unwrap();
    let labels: Vec<(String, String)> = result.rows().into_iter().map(|r| (r.model, r.pretrain)).collect();
    let want = [
        ("Transformer", "N/A"),
        ("Transformer", "HumanML3D (world)"),
        ("Transformer", "HumanML3D (local)"),
        ("T5", "N/A"),
        ("T5", "HumanML3D (world)"),
        ("T5", "HumanML3D (local)"),
    ];
    assert_eq!(labels, want.map(|(a, b)| (a.to_string(), b.to_string())));
    let table = result.table();
    assert_eq!(table.lines().count(), 7);
    assert!(table.lines().next().unwrap().contains("ROUGE_L"));

    let dir = tempfile::tempdir().unwrap();
    result.save(dir.path()).unwrap();
    let count = |suffix: &str| {
        std::fs::read_dir(dir.path())
            .unwrap()
            .filter(|e| e.as_ref().unwrap().file_name().to_string_lossy().ends_with(suffix))
            .count()
    };
    assert_eq!((count(".ckpt.json"), count(".report.json")), (6, 6));
    let again = run_matrix(&cfg, &pre, &ft).unwrap();
    assert_eq!(again.table(), table);
}
