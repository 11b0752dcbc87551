mod common;

use std::path::PathBuf;

use anprompt::ablation::{run_ablation, to_csv, to_markdown, AblationRow, Study};
use anprompt::metrics::{
    class_features, evaluate_base_novel, noise_bench, probes_from_config, text_shift, NoiseProbe,
};
use anprompt::noise::{Perturbation, PerturbationKind};
use anprompt::plot::{bar_probe_row, parse_records, plot_files, Canvas, PRIMARY};
use anprompt::run::{record_noise_bench, run_seed, MetricsRecord, JsonlWriter, METRICS, TRAIN_LOG};
use anprompt::train::train;
use anprompt::Error;

use common::{tiny_config, tiny_context};

#[test]
fn identity_probe_is_exactly_neutral() {
    let ctx = tiny_context();
    let model = train(&ctx, 0, |_| Ok(())).unwrap().model;
    let probes = probes_from_config(&ctx, &[PerturbationKind::Identity]).unwrap();
    let r = &noise_bench(&ctx, &model, &probes, 0).unwrap()[0];
    assert_eq!((r.ts, r.lpr, r.as_), (0.0, 1.0, 0.0));
    assert_eq!(r.n_samples, 16);
}

#[test]
fn weak_fusion_shifts_less_than_dropping() {
    let ctx = tiny_context();
    let classes: Vec<usize> = (0..4).collect();
    let enc = ctx.encoder.clone();
    let weak = NoiseProbe {
        perturbation: Perturbation::new(PerturbationKind::WeakFusion, 0.0),
        alpha: 0.01,
    };
    let drop = NoiseProbe {
        perturbation: Perturbation::new(PerturbationKind::Drop, 0.25),
        alpha: 0.0,
    };
    let ts_weak = text_shift(&enc, &ctx.captions, &classes, &weak, 0).unwrap();
    let ts_drop = text_shift(&enc, &ctx.captions, &classes, &drop, 0).unwrap();
    assert!(ts_weak > 0.0);
    assert!(ts_weak < ts_drop, "{ts_weak} vs {ts_drop}");
    assert!(ts_drop < 4.0);
    // fusing with a larger coefficient moves further
    let strong = NoiseProbe { alpha: 0.5, ..weak };
    assert!(text_shift(&enc, &ctx.captions, &classes, &strong, 0).unwrap() > ts_weak);
}

#[test]
fn noise_bench_is_deterministic() {
    let ctx = tiny_context();
    let model = ctx.fresh_model(2).unwrap();
    let probes = probes_from_config(&ctx, &ctx.config.noise_bench.perturbations).unwrap();
    let a = noise_bench(&ctx, &model, &probes, 9).unwrap();
    let b = noise_bench(&ctx, &model, &probes, 9).unwrap();
    assert_eq!(a, b);
    assert_eq!(a.len(), 5);
    for r in &a {
        assert!((0.0..=1.0).contains(&r.lpr));
        assert!(r.ts >= 0.0 && r.as_ >= 0.0);
    }
    assert!(noise_bench(&ctx, &model, &[], 9).is_err());
}

#[test]
fn evaluation_report_shape() {
    let ctx = tiny_context();
    let model = ctx.fresh_model(0).unwrap();
    let r = evaluate_base_novel(&ctx, &model, 0).unwrap();
    assert_eq!((r.n_base, r.n_novel), (8, 8));
    for v in [r.base_acc, r.novel_acc, r.hm] {
        assert!((0.0..=100.0).contains(&v));
    }
    // class features are reproducible for a fixed evaluation seed
    let classes = [0, 1];
    assert_eq!(
        class_features(&ctx, &model, &classes, 3).unwrap(),
        class_features(&ctx, &model, &classes, 3).unwrap()
    );
}

#[test]
fn ablation_rows_and_tables() {
    let mut cfg = tiny_config();
    cfg.optim.epochs = 1;
    cfg.seeds = vec![0];
    let ctx = anprompt::train::RunContext::new(cfg).unwrap();
    let mut streamed = 0;
    let rows = run_ablation(&ctx, Study::Components, |_| {
        streamed += 1;
        Ok(())
    })
    .unwrap();
    assert_eq!(rows.len(), 8);
    assert_eq!(streamed, 8);
    assert_eq!(to_csv(&rows).lines().count(), 9);
    assert_eq!(to_markdown(&rows).lines().count(), 10);
    assert_eq!(rows[0].label, "baseline");
    assert!(rows.iter().all(|r| r.n_seeds == 1));
}

fn write_ablation_file(dir: &std::path::Path, rows: &[AblationRow]) -> PathBuf {
    let path = dir.join("components.jsonl");
    let mut w = JsonlWriter::create(&path).unwrap();
    for r in rows {
        w.write(&MetricsRecord::Ablation(r.clone())).unwrap();
    }
    w.flush().unwrap();
    path
}

#[test]
fn plots_from_run_outputs() {
    let ctx = tiny_context();
    let dir = tempfile::tempdir().unwrap();
    let run = run_seed(&ctx, 0, dir.path()).unwrap();
    record_noise_bench(&ctx, &run.train.model, 0, &run.dir).unwrap();
    let log = run.dir.join(TRAIN_LOG);
    let metrics = run.dir.join(METRICS);
    let log_before = std::fs::read(&log).unwrap();
    let out = dir.path().join("plots");
    let written = plot_files(&[log.clone(), metrics.clone()], &out).unwrap();
    let names: Vec<String> = written
        .iter()
        .map(|p| p.file_name().unwrap().to_string_lossy().into_owned())
        .collect();
    assert_eq!(names, ["train_log_loss.png", "metrics_accuracy.png", "metrics_noise.png"]);
    assert!(written.iter().all(|p| p.is_file()));
    assert_eq!(std::fs::read(&log).unwrap(), log_before);
    let parsed = parse_records(&metrics).unwrap();
    assert_eq!(parsed.evals.len(), 1);
    assert_eq!(parsed.noise.len(), 5);
}

#[test]
fn ablation_file_plots_eight_bars() {
    let dir = tempfile::tempdir().unwrap();
    let rows: Vec<AblationRow> = (0..8)
        .map(|i| AblationRow {
            study: Study::Components,
            label: format!("row{i}"),
            base: 80.0,
            novel: 70.0,
            hm: 74.0 + i as f64,
            n_seeds: 3,
        })
        .collect();
    let path = write_ablation_file(dir.path(), &rows);
    let written = plot_files(&[path], dir.path()).unwrap();
    assert_eq!(written.len(), 1);
    let canvas = Canvas::load(&written[0]).unwrap();
    assert_eq!(canvas.runs_on_row(bar_probe_row(), PRIMARY), 8);
}

#[test]
fn plot_errors() {
    let dir = tempfile::tempdir().unwrap();
    assert!(matches!(plot_files(&[], dir.path()), Err(Error::Input(_))));
    let bad = dir.path().join("bad.jsonl");
    std::fs::write(&bad, "{\"step\":0,\"epoch\":0,\"ce\":1,\"sim\":0,\"wa\":0,\"gamma\":1,\"total\":1,\"lr\":0.001}\nnot json\n").unwrap();
    match plot_files(std::slice::from_ref(&bad), dir.path()) {
        Err(Error::Parse { location, .. }) => assert_eq!(location, format!("{}:2", bad.display())),
        other => panic!("unexpected {other:?}"),
    }
    let missing_field = dir.path().join("partial.jsonl");
    std::fs::write(&missing_field, "{\"step\":0}\n").unwrap();
    match plot_files(std::slice::from_ref(&missing_field), dir.path()) {
        Err(Error::Parse { location, .. }) => assert!(location.ends_with(":1")),
        other => panic!("unexpected {other:?}"),
    }
    // nothing is written when any input fails to parse
    assert!(!dir.path().join("bad_loss.png").exists());
}
