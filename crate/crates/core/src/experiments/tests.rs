use std::sync::OnceLock;

use super::*;
use crate::adapters::{count_learnable_params, AdaptationStrategy, LAdapterVariant};
use crate::model::AdaptedModel;

fn tiny(kind: TaskKind) -> RunConfig {
    RunConfig {
        task: SyntheticTaskSpec {
            min_len: 8,
            max_len: 12,
            train_size: 24,
            test_size: 16,
            cohort_size: 8,
            ..SyntheticTaskSpec::new(kind)
        },
        steps: 6,
        batch_size: 2,
        probe_size: 8,
        pretrain: PretrainConfig {
            steps: 5,
            corpus_size: 8,
            held_out_size: 2,
            batch_size: 2,
            ..PretrainConfig::default()
        },
        ..RunConfig::default()
    }
}

fn backbone() -> &'static Pretrained {
    static PRE: OnceLock<Pretrained> = OnceLock::new();
    PRE.get_or_init(|| pretrain(&tiny(TaskKind::FrameContent)).unwrap())
}

#[test]
fn sweep_grid_enumerates_every_family() {
    let grid = sweep_grid(4);
    assert_eq!(grid.len(), 4 + 4 + 16 + 2);
    let mut dedup = grid.clone();
    dedup.dedup();
    assert_eq!(dedup.len(), grid.len());
    // fine-tuning more layers never trains fewer parameters
    let counts: Vec<usize> = grid
        .iter()
        .filter(|s| matches!(s, AdaptationStrategy::FineTuneTop { .. }))
        .map(|&s| {
            let cfg = RunConfig { strategy: s, ..tiny(TaskKind::UtteranceClass) };
            count_learnable_params(&cfg.model_config()).unwrap().trainable
        })
        .collect();
    assert!(counts.windows(2).all(|w| w[0] <= w[1]), "{counts:?}");
}

#[test]
fn zero_steps_leave_the_metric_unchanged() {
    for kind in TaskKind::ALL {
        let cfg = RunConfig { steps: 0, ..tiny(kind) };
        let r = train(&cfg, backbone(), 1).unwrap();
        assert_eq!(r.final_metric.as_ref(), Some(&r.initial_metric), "{kind}");
        assert_eq!(r.final_loss, Some(r.initial_loss));
        assert!(r.losses.is_empty());
    }
}

#[test]
fn reports_cross_check_parameter_accounting_and_freezing() {
    let pre = backbone();
    for s in [
        AdaptationStrategy::proposed_full(4),
        AdaptationStrategy::Conventional { l: 2 },
        AdaptationStrategy::FineTuneTop { l: 1 },
    ] {
        let cfg = RunConfig { strategy: s, ..tiny(TaskKind::UtteranceSpeaker) };
        let r = train(&cfg, pre, 2).unwrap();
        assert_eq!(r.params, count_learnable_params(&cfg.model_config()).unwrap());
        let (_, store, _) = AdaptedModel::build(&pre.backbone, &pre.store, cfg.model_config(), 2).unwrap();
        assert_eq!(r.frozen_digest, store.frozen_digest());
        assert_eq!(r.losses.len(), cfg.steps);
        assert!(!r.diverged);
    }
}

#[test]
fn runs_are_reproducible() {
    let cfg = tiny(TaskKind::FrameContent);
    let mut a = train(&cfg, backbone(), 3).unwrap();
    let mut b = train(&cfg, backbone(), 3).unwrap();
    a.wall_clock_secs = 0.0;
    b.wall_clock_secs = 0.0;
    assert_eq!(serde_json::to_string(&a).unwrap(), serde_json::to_string(&b).unwrap());
    let c = train(&cfg, backbone(), 4).unwrap();
    assert_ne!(a.losses, c.losses);
}

#[test]
fn head_only_training_reduces_the_loss_on_a_clean_class_task() {
    let mut cfg = tiny(TaskKind::UtteranceClass);
    cfg.strategy = AdaptationStrategy::FineTuneTop { l: 0 };
    cfg.task.noise = 0.05;
    cfg.task.nuisance = 0.0;
    cfg.steps = 60;
    cfg.lr = 1e-2;
    let r = train(&cfg, backbone(), 0).unwrap();
    assert!(r.converged(), "{} -> {:?}", r.initial_loss, r.final_loss);
    assert_eq!(r.params.trainable, r.params.head);
}

#[test]
fn huge_learning_rates_do_not_crash() {
    let cfg = RunConfig {
        lr: 1e4,
        strategy: AdaptationStrategy::FineTuneTop { l: 4 },
        ..tiny(TaskKind::FrameContent)
    };
    let r = train(&cfg, backbone(), 0).unwrap();
    if r.diverged {
        assert!(r.final_metric.is_none());
    }
}

fn fake_report(diverged: bool) -> RunReport {
    let cfg = tiny(TaskKind::UtteranceClass);
    let mut r = train(&RunConfig { steps: 0, ..cfg }, backbone(), 0).unwrap();
    if diverged {
        r.diverged = true;
        r.final_loss = None;
        r.final_metric = None;
    }
    r
}

#[test]
fn divergent_rows_stay_well_formed() {
    let rows = vec![SweepRow::from_report(&fake_report(false)), SweepRow::from_report(&fake_report(true))];
    let mut buf = Vec::new();
    write_csv(&mut buf, &rows).unwrap();
    let text = String::from_utf8(buf).unwrap();
    let mut rd = csv::Reader::from_reader(text.as_bytes());
    let back: Vec<SweepRow> = rd.deserialize().collect::<std::result::Result<_, _>>().unwrap();
    assert_eq!(back.len(), 2);
    assert!(back[1].diverged && back[1].final_metric.is_none() && back[1].final_loss.is_none());
    assert!(!text.contains("NaN") && !text.contains("inf"));
}

#[test]
fn sweep_writes_one_row_per_run() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = RunConfig { steps: 1, seeds: vec![0], ..tiny(TaskKind::UtteranceClass) };
    let reports = sweep_layers(&cfg, backbone(), Some(dir.path())).unwrap();
    assert_eq!(reports.len(), sweep_grid(4).len());
    let mut rd = csv::Reader::from_path(dir.path().join("sweep.csv")).unwrap();
    assert_eq!(rd.deserialize::<SweepRow>().count(), reports.len());
}

#[test]
fn ablation_covers_all_variants_with_zero_spread_for_one_seed() {
    let cfg = RunConfig { steps: 2, seeds: vec![5], ..tiny(TaskKind::FrameContent) };
    let (rows, reports) = ablate_l_config(&cfg, backbone(), None).unwrap();
    assert_eq!(rows.len(), 8);
    assert_eq!(reports.len(), 8);
    let wavlm: Vec<usize> = rows.iter().map(|r| r.wavlm_base_params).collect();
    assert_eq!(wavlm, [12, 18_432, 18_432, 4_724_736, 4_724_736, 4_737_024, 4_737_024, 4_749_312]);
    for r in &rows {
        assert_eq!(r.std, Some(0.0), "{}", r.variant);
    }
    assert!(format_ablation(&rows).contains("± 0.0000"));
    assert_eq!(mean_std(&[1.0, 3.0]), (2.0, 2f64.sqrt()));
}

#[test]
fn lr_grid_reports_every_cell() {
    let cfg = RunConfig { steps: 2, seeds: vec![0, 1], ..tiny(TaskKind::UtteranceClass) };
    let strategies = [AdaptationStrategy::EAdaptersOnly, AdaptationStrategy::Conventional { l: 1 }];
    let grid = [1e-3, 1e-4];
    let rep = lr_grid_search(&cfg, backbone(), &strategies, &grid, None).unwrap();
    assert_eq!(rep.cells.len(), grid.len() * strategies.len() * 2);
    assert_eq!(rep.best.len(), strategies.len());

    let single = lr_grid_search(&cfg, backbone(), &strategies[..1], &[5e-4], None).unwrap();
    assert_eq!(single.best, vec![(strategies[0].to_string(), Some(5e-4))]);
    assert!(lr_grid_search(&cfg, backbone(), &strategies, &[], None).is_err());
}

#[test]
fn layer_weight_reports() {
    let dir = tempfile::tempdir().unwrap();
    let r = train(&RunConfig { steps: 0, ..tiny(TaskKind::UtteranceSpeaker) }, backbone(), 0).unwrap();
    let rep = layer_weight_report(&r).unwrap();
    assert_eq!(rep.rows.len(), 4);
    for row in &rep.rows {
        assert!((row.weight - 0.25).abs() < 1e-12);
    }
    // uniform weights over layers 1..=4: (1+2+3+4)/4 / 4
    assert!((rep.centroid - 0.625).abs() < 1e-12);
    write_weight_report(&rep, dir.path()).unwrap();
    let mut rd = csv::Reader::from_path(dir.path().join("weights.csv")).unwrap();
    let sum: f64 = rd.deserialize::<WeightRow>().map(|w| w.unwrap().weight).sum();
    assert!((sum - 1.0).abs() < 1e-9);
    let svg = std::fs::read_to_string(dir.path().join("weights.svg")).unwrap();
    assert_eq!(svg.matches("<rect").count(), 4);

    let e = train(
        &RunConfig { steps: 0, strategy: AdaptationStrategy::EAdaptersOnly, ..tiny(TaskKind::UtteranceSpeaker) },
        backbone(),
        0,
    )
    .unwrap();
    assert!(matches!(layer_weight_report(&e), Err(crate::Error::NoLayerWeights(_))));
}

#[test]
fn run_config_parsing_and_validation() {
    let cfg = tiny(TaskKind::UtteranceSpeaker);
    let json = serde_json::to_string(&cfg).unwrap();
    assert_eq!(serde_json::from_str::<RunConfig>(&json).unwrap(), cfg);

    let t: RunConfig = toml::from_str(
        "preset = \"toy\"\nsteps = 50\nlr = 5e-4\ngrid_mode = true\nvariant = \"Skip\"\n[strategy]\nkind = \"conventional\"\nl = 2\n[task]\nkind = \"utterance_class\"\n",
    )
    .unwrap();
    assert_eq!(t.strategy, AdaptationStrategy::Conventional { l: 2 });
    assert_eq!(t.task.kind, TaskKind::UtteranceClass);
    assert_eq!(t.variant, LAdapterVariant::Skip);
    t.validate().unwrap();

    assert!(RunConfig { grid_mode: true, lr: 2e-3, ..cfg.clone() }.validate().is_err());
    assert!(RunConfig { seeds: vec![], ..cfg.clone() }.validate().is_err());
    assert!(RunConfig { strategy: AdaptationStrategy::Proposed { k: 5, l: 0 }, ..cfg.clone() }.validate().is_err());
    assert_eq!("wavlm-base".parse::<Preset>().unwrap(), Preset::WavlmBase);
    let wavlm = RunConfig { preset: Preset::WavlmBase, ..cfg };
    assert!(pretrain(&wavlm).is_err());
}

#[test]
fn pretraining_targets_are_clean_content() {
    let spec = SyntheticTaskSpec { min_len: 8, max_len: 10, ..SyntheticTaskSpec::default() };
    let corpus = pretraining_corpus(&spec, 3, 0).unwrap();
    let world = World::new(&spec);
    for seq in &corpus {
        assert_eq!(seq.input.shape(), seq.target.shape());
        for row in seq.target.rows() {
            let r: Vec<f64> = row.iter().map(|&v| v as f64).collect();
            let tok = world.nearest_token(&r);
            assert!(world.tokens[tok].iter().zip(&r).all(|(a, b)| (a - b).abs() < 1e-6));
        }
    }
}
