//! Acceptance checks. Runs without the libtest harness so that every
//! criterion prints exactly one PASS or FAIL line; the process exits with
//! status 1 when any criterion fails.

mod common;

use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use anprompt::ablation::{AblationRow, Study};
use anprompt::autograd::Tape;
use anprompt::checkpoint::Checkpoint;
use anprompt::config::RunConfig;
use anprompt::encoder::{EncoderConfig, Injection, InjectionSpec};
use anprompt::losses::{gamma, waloss, GammaMode, LossWeights, WaDistance};
use anprompt::metrics::{class_features, harmonic_mean, noise_bench, probes_from_config};
use anprompt::model::{
    jitter_trainable, text_pos_name, vision_pos_name, AnPromptModel, ClassFeatures, PROMPT_TOKENS, TO_IMAGE_B,
    TO_IMAGE_W, TO_TEXT_B, TO_TEXT_W,
};
use anprompt::noise::{fuse_weak_noise, PerturbationKind, WeakNoiseConfig};
use anprompt::params::{gaussian, Binder, ParamRole};
use anprompt::prompting::{build_anti_noise_prompts, kmeans_cluster, KMeansParams, LearnablePrompts};
use anprompt::run::MetricsRecord;
use anprompt::train::{frozen_changes, train, RunContext, StepRecord, TrainResult};
use anprompt::Matrix;

use common::tiny_config;

type Outcome = Result<String, String>;

fn check(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn fail<E: std::fmt::Display>(e: E) -> String {
    e.to_string()
}

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn unit(v: Vec<f64>) -> Vec<f64> {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.into_iter().map(|x| x / n).collect()
}

// ----- 1 -------------------------------------------------------------------

fn harmonic_mean_arithmetic() -> Outcome {
    let cases = [(86.15, 77.70, 81.70), (82.69, 63.22, 71.66)];
    let mut ok = true;
    let mut parts = Vec::new();
    for (b, n, expected) in cases {
        let got = harmonic_mean(b, n).map_err(fail)?;
        // textbook form as the oracle
        let oracle = 2.0 / (1.0 / b + 1.0 / n);
        let pass = (got - expected).abs() <= 0.005 && (got - oracle).abs() < 1e-9;
        ok &= pass;
        parts.push(format!(
            "hm({b}, {n}) = {got:.6} vs {expected:.2} (diff {:.6}) {}",
            (got - expected).abs(),
            if pass { "ok" } else { "out of tolerance" }
        ));
    }
    check(ok, parts.join("; "))
}

// ----- 2 -------------------------------------------------------------------

/// Learned prompts only: projected tokens plus per-layer offsets, no noise
/// buffer anywhere on the path.
fn plain_prompt_logits(ctx: &RunContext, model: &AnPromptModel, images: &[&Matrix], cf: &ClassFeatures, theta: f64) -> Matrix {
    let state = model.state();
    let encoder = model.encoder();
    let spec = *model.spec();
    let mut tape = Tape::new();
    let mut c = |name: &str| tape.constant(state.get(name).unwrap().clone());
    let (pc, iw, ib, tw, tb) = (c(PROMPT_TOKENS), c(TO_IMAGE_W), c(TO_IMAGE_B), c(TO_TEXT_W), c(TO_TEXT_B));
    let layers: Vec<usize> = spec.layers().collect();
    let vpos: Vec<_> = layers.iter().map(|&l| c(&vision_pos_name(l))).collect();
    let tpos: Vec<_> = layers.iter().map(|&l| c(&text_pos_name(l))).collect();
    let iv = tape.linear(pc, iw, ib);
    let tv = tape.linear(pc, tw, tb);
    let image_layers: Vec<_> = vpos.iter().map(|&p| tape.add(iv, p)).collect();
    let text_layers: Vec<_> = tpos.iter().map(|&p| tape.add(tv, p)).collect();
    let mut bb = Binder::inference(encoder.backbone());
    let mut fv = Vec::new();
    for img in images {
        let inj = Injection {
            spec: &spec,
            layer_prompts: &image_layers,
        };
        fv.push(encoder.forward_image(&mut tape, &mut bb, img, Some(inj)).unwrap().feature);
    }
    let mut ft = Vec::new();
    for cp in ctx.prompts_for(&(0..ctx.dataset.num_classes()).collect::<Vec<_>>()) {
        let inj = Injection {
            spec: &spec,
            layer_prompts: &text_layers,
        };
        ft.push(encoder.forward_text(&mut tape, &mut bb, &cp.content(), Some(inj)).unwrap());
    }
    let fv = tape.concat_rows(&fv);
    let ft = tape.concat_rows(&ft);
    let l_a = tape.value(fv).matmul_t(tape.value(ft));
    let l_r = tape.value(fv).matmul_t(&cf.f_w);
    l_a.zip_map(&l_r, |a, r| theta * a + (1.0 - theta) * r)
}

fn identity_suite() -> Outcome {
    let mut r = rng(2);
    // weak fusion with a zero coefficient
    let cfg = WeakNoiseConfig {
        alpha: 0.0,
        ..WeakNoiseConfig::default()
    };
    for _ in 0..200 {
        let main = unit((0..16).map(|_| r.random::<f64>() - 0.5).collect());
        let noise = unit((0..16).map(|_| r.random::<f64>() - 0.5).collect());
        let fused = fuse_weak_noise(&main, &noise, &cfg).map_err(fail)?;
        let same = fused.iter().zip(&main).all(|(a, b)| a.to_bits() == b.to_bits());
        if !same {
            return Err("alpha = 0 changed a main feature".into());
        }
    }
    // noise prompts with a zero strength
    for s in 0..200 {
        let lp = LearnablePrompts::init(5, 16, 0.5, &mut rng(100 + s));
        let w = gaussian(5, 16, 3.0, &mut r);
        let pa = build_anti_noise_prompts(&lp, &w, 0.0).map_err(fail)?;
        let same = pa.combined.data().iter().zip(lp.tokens.data()).all(|(a, b)| a.to_bits() == b.to_bits());
        if !same {
            return Err("epsilon = 0 changed a learnable prompt".into());
        }
    }
    // end to end: train with zero noise strength, compare against the plain pipeline
    let mut cfg = tiny_config();
    cfg.components.anti_prompt = true;
    cfg.prompts.epsilon = 0.0;
    let ctx = RunContext::new(cfg).map_err(fail)?;
    let model = train(&ctx, 0, |_| Ok(())).map_err(fail)?.model;
    if model.noise_prompts().data().iter().all(|&x| x == 0.0) {
        return Err("noise buffer stayed empty, the comparison would be vacuous".into());
    }
    let classes: Vec<usize> = (0..ctx.dataset.num_classes()).collect();
    let cf = class_features(&ctx, &model, &classes, 0).map_err(fail)?;
    let images: Vec<&Matrix> = ctx.dataset.test.iter().map(|s| &s.image).collect();
    let f_v = model.image_features(&images).map_err(fail)?;
    let theta = ctx.config.losses.theta;
    let ours = model.final_logits(&f_v, &cf, theta).map_err(fail)?;
    let plain = plain_prompt_logits(&ctx, &model, &images, &cf, theta);
    let worst = ours
        .data()
        .iter()
        .zip(plain.data())
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max);
    check(
        worst <= 1e-6,
        format!("alpha = 0 and epsilon = 0 bitwise on 200 cases each; end-to-end max logit diff {worst:.3e} over {} entries", ours.len()),
    )
}

// ----- 3 -------------------------------------------------------------------

fn kl_suite() -> Outcome {
    let mut r = rng(3);
    let mut min_kl = f64::INFINITY;
    let mut max_self = 0.0f64;
    for _ in 0..10_000 {
        let rows = r.random_range(1..5);
        let cols = r.random_range(2..8);
        let scale = r.random_range(0.1..10.0);
        let a = gaussian(rows, cols, scale, &mut r);
        let w = gaussian(rows, cols, scale, &mut r);
        min_kl = min_kl.min(waloss(&a, &w, WaDistance::Kl).map_err(fail)?);
        max_self = max_self.max(waloss(&a, &a, WaDistance::Kl).map_err(fail)?.abs());
    }
    let a = Matrix::from_rows(&[vec![0.0, 0.0]]).unwrap();
    let w = Matrix::from_rows(&[vec![2f64.ln(), 0.0]]).unwrap();
    let hand = waloss(&a, &w, WaDistance::Kl).map_err(fail)?;
    let oracle = 0.5 * 0.75f64.ln() + 0.5 * 1.5f64.ln();
    let ok = min_kl >= -1e-12 && max_self <= 1e-9 && (hand - oracle).abs() < 1e-6 && (hand - 0.05889).abs() < 1e-5;
    check(
        ok,
        format!("min over 1e4 pairs {min_kl:.3e}; max at equality {max_self:.3e}; hand case {hand:.8} vs {oracle:.8}"),
    )
}

// ----- 4 -------------------------------------------------------------------

fn gamma_suite() -> Outcome {
    let w = LossWeights::default();
    let eps0 = w.eps0;
    let constant = Matrix::from_rows(&[vec![0.3; 4], vec![0.3; 4]]).unwrap();
    let g_const = gamma(&constant, GammaMode::VarianceAdaptive, eps0, &w).map_err(fail)?;
    let l = Matrix::from_rows(&[vec![1.0, 2.0, 3.0]]).unwrap();
    let g = gamma(&l, GammaMode::VarianceAdaptive, eps0, &w).map_err(fail)?;
    // population standard deviation by hand
    let values = [1.0f64, 2.0, 3.0];
    let mean = values.iter().sum::<f64>() / 3.0;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 3.0;
    let oracle = 1.0 / (var.sqrt() * 3.0 + eps0);
    let mut r = rng(4);
    let modes = [GammaMode::VarianceAdaptive, GammaMode::Log, GammaMode::Mean, GammaMode::SoftmaxEntropy];
    let mut bad = Vec::new();
    for _ in 0..1000 {
        let rows = r.random_range(1..6);
        let cols = r.random_range(1..9);
        let m = gaussian(rows, cols, r.random_range(0.01..5.0), &mut r);
        for mode in modes {
            let v = gamma(&m, mode, eps0, &w).map_err(fail)?;
            if !(v.is_finite() && v > 0.0) {
                bad.push(format!("{}={v}", mode.name()));
            }
        }
    }
    let ok = g_const == 1.0 / eps0 && (g - oracle).abs() < 1e-6 && (g - 0.40825).abs() < 1e-5 && bad.is_empty();
    check(
        ok,
        format!(
            "constant gives {g_const:e} (1/eps0 = {:e}); (1,2,3) gives {g:.8} vs oracle {oracle:.8}; {} non-finite or nonpositive of 4000",
            1.0 / eps0,
            bad.len()
        ),
    )
}

// ----- 5 -------------------------------------------------------------------

fn gradient_check() -> Outcome {
    let mut cfg = RunConfig::default();
    cfg.encoder = EncoderConfig {
        embed_dim: 8,
        num_layers: 2,
        num_heads: 2,
        patch_grid: [2, 2],
        image_size: [8, 8],
        vocab_size: 256,
        max_text_len: 32,
        temperature: 0.1,
        mlp_ratio: 2,
        init_seed: 5,
    };
    cfg.injection = InjectionSpec::new(1, 2, 2);
    cfg.prompts.tokens = 2;
    cfg.prompts.epsilon = 0.3;
    cfg.dataset.synthetic.num_classes = 2;
    cfg.dataset.synthetic.train_per_class = 2;
    cfg.dataset.synthetic.test_per_class = 2;
    cfg.dataset.split.shots_per_class = 2;
    let ctx = RunContext::new(cfg).map_err(fail)?;
    let mut model = ctx.fresh_model(0).map_err(fail)?;
    let mut r = rng(5);
    jitter_trainable(&mut model, 0.1, &mut r);
    model.set_noise_prompts(&gaussian(2, 8, 0.5, &mut r)).map_err(fail)?;
    let classes = [0usize, 1];
    let prompts = ctx.prompts_for(&classes);
    let f_w = class_features(&ctx, &model, &classes, 0).map_err(fail)?.f_w;
    let mut picked = Vec::new();
    for c in classes {
        picked.push(&ctx.dataset.train.iter().find(|s| s.label == c).unwrap().image);
    }
    let labels = [0usize, 1];
    let weights = ctx.config.effective_losses();
    let out = model.step(&picked, &labels, &prompts, &f_w, &weights).map_err(fail)?;
    // the adaptive weight is a constant of each step, so hold it fixed
    let frozen_gamma = LossWeights {
        gamma_mode: GammaMode::Fixed,
        gamma_fixed: out.report.gamma,
        ..weights.clone()
    };
    let h = 1e-6;
    let mut worst = (0.0f64, String::new());
    let mut count = 0;
    for (name, grad) in &out.grads {
        for i in 0..grad.len() {
            let at = |delta: f64| -> Result<f64, String> {
                let mut m = model.clone();
                m.state_mut().get_mut(name).map_err(fail)?.data_mut()[i] += delta;
                Ok(m.step(&picked, &labels, &prompts, &f_w, &frozen_gamma).map_err(fail)?.report.total)
            };
            let fd = (at(h)? - at(-h)?) / (2.0 * h);
            let an = grad.data()[i];
            let rel = (fd - an).abs() / fd.abs().max(an.abs()).max(1e-6);
            if rel > worst.0 {
                worst = (rel, format!("{name}[{i}] analytic {an:.6e} fd {fd:.6e}"));
            }
            count += 1;
        }
    }
    check(
        worst.0 < 1e-4,
        format!("{count} entries over {} tensors; worst relative error {:.3e} at {}", out.grads.len(), worst.0, worst.1),
    )
}

// ----- 6 -------------------------------------------------------------------

fn partition_inertia(points: &Matrix, labels: &[usize], k: usize) -> f64 {
    let c = points.cols();
    let mut total = 0.0;
    for j in 0..k {
        let members: Vec<&[f64]> = points.iter_rows().zip(labels).filter(|(_, &l)| l == j).map(|(p, _)| p).collect();
        let mut mean = vec![0.0; c];
        for p in &members {
            for (m, x) in mean.iter_mut().zip(*p) {
                *m += x / members.len() as f64;
            }
        }
        for p in &members {
            total += p.iter().zip(&mean).map(|(x, m)| (x - m) * (x - m)).sum::<f64>();
        }
    }
    total
}

fn kmeans_oracle() -> Outcome {
    let mut r = rng(6);
    let params = KMeansParams::default();
    let (mut global, mut local) = (0, 0);
    for case in 0..50u64 {
        let dim = r.random_range(1..4);
        let pts = gaussian(6, dim, 1.0, &mut r);
        let bank = kmeans_cluster(&pts, 2, case, &params).map_err(fail)?;
        // every split of six points into two nonempty groups
        let mut best = f64::INFINITY;
        for mask in 1u32..(1 << 5) {
            let labels: Vec<usize> = (0..6).map(|i| if i < 5 { ((mask >> i) & 1) as usize } else { 0 }).collect();
            best = best.min(partition_inertia(&pts, &labels, 2));
        }
        let own = partition_inertia(&pts, &bank.assignment, 2);
        if (own - bank.inertia).abs() > 1e-9 {
            return Err(format!("case {case}: reported inertia {} but partition has {own}", bank.inertia));
        }
        let monotone = bank.inertia_trace.windows(2).all(|w| w[1] <= w[0] + 1e-12);
        if !monotone {
            return Err(format!("case {case}: inertia trace increased {:?}", bank.inertia_trace));
        }
        if (bank.inertia - best).abs() <= 1e-9 {
            global += 1;
            continue;
        }
        // otherwise the result must be a Lloyd fixed point
        for (i, p) in pts.iter_rows().enumerate() {
            let d = |j: usize| p.iter().zip(bank.centers.row(j)).map(|(x, c)| (x - c) * (x - c)).sum::<f64>();
            if d(bank.assignment[i]) > d(1 - bank.assignment[i]) + 1e-12 {
                return Err(format!("case {case}: point {i} is closer to the other center"));
            }
        }
        local += 1;
    }
    let exact = gaussian(3, 4, 1.0, &mut r);
    let bank = kmeans_cluster(&exact, 3, 0, &params).map_err(fail)?;
    check(
        bank.inertia == 0.0,
        format!("{global} of 50 at the brute-force optimum, {local} at a verified local optimum; N = K inertia {}", bank.inertia),
    )
}

// ----- 7 and 9 -------------------------------------------------------------

fn default_training() -> Result<(RunContext, TrainResult), String> {
    let mut cfg = RunConfig::default();
    cfg.seeds = vec![0];
    let ctx = RunContext::new(cfg).map_err(fail)?;
    let result = train(&ctx, 0, |_| Ok(())).map_err(fail)?;
    Ok((ctx, result))
}

fn noise_ordering(ctx: &RunContext, trained: &TrainResult) -> Outcome {
    let kinds = [
        PerturbationKind::WeakFusion,
        PerturbationKind::Drop,
        PerturbationKind::Mask,
        PerturbationKind::Identity,
    ];
    let probes = probes_from_config(ctx, &kinds).map_err(fail)?;
    let nb = &ctx.config.noise_bench;
    if nb.alpha != 0.01 || nb.rate != 0.25 {
        return Err(format!("unexpected probe settings alpha {} rate {}", nb.alpha, nb.rate));
    }
    let r = noise_bench(ctx, &trained.model, &probes, 0).map_err(fail)?;
    let (weak, drop, mask, id) = (&r[0], &r[1], &r[2], &r[3]);
    // squared distance between unit vectors never exceeds 4
    let bound = 4.0;
    let checks = [
        ("TS weak < TS drop", weak.ts < drop.ts),
        ("TS drop < bound", drop.ts < bound),
        ("LPR weak > LPR drop", weak.lpr > drop.lpr),
        ("AS weak <= AS mask", weak.as_ <= mask.as_),
        ("identity (0, 1, 0)", (id.ts, id.lpr, id.as_) == (0.0, 1.0, 0.0)),
    ];
    let failed: Vec<&str> = checks.iter().filter(|c| !c.1).map(|c| c.0).collect();
    check(
        failed.is_empty(),
        format!(
            "TS {:.3e}/{:.3e}/{:.3e}, LPR {:.4}/{:.4}/{:.4}, AS {:.2}/{:.2}/{:.2} (weak/drop/mask); identity ({}, {}, {}){}",
            weak.ts,
            drop.ts,
            mask.ts,
            weak.lpr,
            drop.lpr,
            mask.lpr,
            weak.as_,
            drop.as_,
            mask.as_,
            id.ts,
            id.lpr,
            id.as_,
            if failed.is_empty() { String::new() } else { format!("; violated: {}", failed.join(", ")) }
        ),
    )
}

fn reproducibility(trained: &TrainResult) -> Outcome {
    let (_, again) = default_training()?;
    let bits = |r: &[StepRecord]| -> Vec<[u64; 6]> {
        r.iter()
            .map(|s| [s.ce, s.sim, s.wa, s.gamma, s.total, s.lr].map(f64::to_bits))
            .collect()
    };
    let same_log = bits(&trained.records) == bits(&again.records);
    let same_state = trained.model.state() == again.model.state();
    let frozen = frozen_changes(&trained.initial, &trained.model);
    let ck = Checkpoint::from_model(&trained.initial).diff(&Checkpoint::from_model(&trained.model), ParamRole::Frozen);
    check(
        same_log && same_state && frozen.is_empty() && ck.is_empty(),
        format!(
            "{} log records bitwise {}; final prompt state {}; frozen diff {:?}",
            trained.records.len(),
            if same_log { "identical" } else { "different" },
            if same_state { "identical" } else { "different" },
            frozen
        ),
    )
}

// ----- 8 and 10: through the command-line binary ---------------------------

fn workspace_root() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../..").canonicalize().unwrap()
}

fn cli_binary() -> Result<PathBuf, String> {
    let root = workspace_root();
    let cargo = std::env::var("CARGO").unwrap_or_else(|_| "cargo".into());
    let status = Command::new(cargo)
        .args(["build", "--quiet", "--release", "-p", "anprompt-cli"])
        .current_dir(&root)
        .status()
        .map_err(|e| format!("cannot run cargo: {e}"))?;
    if !status.success() {
        return Err("building the command-line binary failed".into());
    }
    let target = std::env::var_os("CARGO_TARGET_DIR").map(PathBuf::from).unwrap_or_else(|| root.join("target"));
    let bin = target.join("release").join(format!("anprompt{}", std::env::consts::EXE_SUFFIX));
    if bin.is_file() {
        Ok(bin)
    } else {
        Err(format!("no binary at {}", bin.display()))
    }
}

fn run_cli(bin: &Path, dir: &Path, args: &[&str]) -> Result<std::process::Output, String> {
    Command::new(bin)
        .current_dir(dir)
        .env("RUST_LOG", "warn")
        .args(args)
        .output()
        .map_err(|e| format!("cannot run {}: {e}", bin.display()))
}

fn run_ok(bin: &Path, dir: &Path, args: &[&str]) -> Result<String, String> {
    let out = run_cli(bin, dir, args)?;
    if !out.status.success() {
        return Err(format!("`{}` failed: {}", args.join(" "), String::from_utf8_lossy(&out.stderr).trim()));
    }
    Ok(String::from_utf8_lossy(&out.stdout).into_owned())
}

fn component_ablation(bin: &Path) -> Outcome {
    let tmp = tempfile::tempdir().map_err(fail)?;
    let mut cfg = RunConfig::default();
    cfg.seeds = (0..5).collect();
    std::fs::write(tmp.path().join("ablate.toml"), cfg.to_toml()).map_err(fail)?;
    run_ok(bin, tmp.path(), &["--config", "ablate.toml", "--out", "out", "ablate", "--study", "components"])?;
    let out = tmp.path().join("out");
    let text = std::fs::read_to_string(out.join("ablation_components.jsonl")).map_err(fail)?;
    let rows: Vec<AblationRow> = text
        .lines()
        .map(|l| match serde_json::from_str::<MetricsRecord>(l) {
            Ok(MetricsRecord::Ablation(row)) => Ok(row),
            Ok(_) => Err("unexpected record kind".to_string()),
            Err(e) => Err(e.to_string()),
        })
        .collect::<Result<_, _>>()?;
    let md = std::fs::read_to_string(out.join("ablation_components.md")).map_err(fail)?;
    let table_rows = md.lines().filter(|l| l.starts_with('|')).count().saturating_sub(2);
    let find = |label: &str| rows.iter().find(|r| r.label == label);
    let (Some(off), Some(on)) = (find("baseline"), find("text_noise+wa_loss+anti_prompt")) else {
        return Err(format!("missing rows in {:?}", rows.iter().map(|r| &r.label).collect::<Vec<_>>()));
    };
    let summary: Vec<String> = rows.iter().map(|r| format!("{} {:.2}", r.label, r.hm)).collect();
    check(
        rows.len() == 8 && table_rows == 8 && on.n_seeds == 5 && on.hm >= off.hm && rows.iter().all(|r| r.study == Study::Components),
        format!(
            "{} rows, {} seeds; HM all on {:.2} vs all off {:.2} [{}]",
            rows.len(),
            on.n_seeds,
            on.hm,
            off.hm,
            summary.join(", ")
        ),
    )
}

fn cli_contract(bin: &Path) -> Outcome {
    let tmp = tempfile::tempdir().map_err(fail)?;
    let d = tmp.path();
    std::fs::write(d.join("tiny.toml"), tiny_config().to_toml()).map_err(fail)?;
    let base = ["--config", "tiny.toml", "--out", "r"];
    let with = |extra: &[&'static str]| -> Vec<&str> { base.iter().copied().chain(extra.iter().copied()).collect() };
    run_ok(bin, d, &with(&["synth-data"]))?;
    run_ok(bin, d, &with(&["train"]))?;
    run_ok(bin, d, &with(&["eval"]))?;
    run_ok(bin, d, &with(&["noise-bench"]))?;
    run_ok(bin, d, &with(&["--seed", "0", "ablate", "--study", "gamma_mode"]))?;
    run_ok(bin, d, &["--out", "plots", "plot", "r/seed_0/train_log.jsonl", "r/ablation_gamma_mode.jsonl"])?;
    let expected = [
        "r/captions.json",
        "r/synonyms.json",
        "r/train",
        "r/test",
        "r/seed_0/config.toml",
        "r/seed_0/init_checkpoint.json",
        "r/seed_0/checkpoint.json",
        "r/seed_0/train_log.jsonl",
        "r/seed_0/metrics.jsonl",
        "r/seed_1/checkpoint.json",
        "r/seed_0/metrics_noise.png",
        "r/noise_bench.csv",
        "r/ablation_gamma_mode.jsonl",
        "r/ablation_gamma_mode.csv",
        "r/ablation_gamma_mode.md",
        "plots/train_log_loss.png",
        "plots/ablation_gamma_mode_ablation.png",
    ];
    let missing: Vec<&str> = expected.iter().copied().filter(|p| !d.join(p).exists()).collect();
    if !missing.is_empty() {
        return Err(format!("missing outputs {missing:?}"));
    }
    std::fs::write(d.join("bad.toml"), "[optim]\nbatch_size = \"four\"\n").map_err(fail)?;
    let out = run_cli(bin, d, &["--config", "bad.toml", "train"])?;
    let err = String::from_utf8_lossy(&out.stderr);
    let named = out.status.code() == Some(1) && err.contains("optim.batch_size") && !err.contains("panicked");
    check(
        named,
        format!("6 commands ran, {} documented files present; malformed config: {}", expected.len(), err.trim()),
    )
}

fn main() {
    let mut failures = 0;
    let mut report = |n: usize, name: &str, started: Instant, outcome: Outcome| {
        let secs = started.elapsed().as_secs_f64();
        match outcome {
            Ok(detail) => println!("criterion {n} ({name}): PASS [{secs:.1}s] {detail}"),
            Err(detail) => {
                failures += 1;
                println!("criterion {n} ({name}): FAIL [{secs:.1}s] {detail}");
            }
        }
    };
    let t = Instant::now();
    report(1, "harmonic mean arithmetic", t, harmonic_mean_arithmetic());
    let t = Instant::now();
    report(2, "identity suite", t, identity_suite());
    let t = Instant::now();
    report(3, "alignment divergence", t, kl_suite());
    let t = Instant::now();
    report(4, "adaptive weight", t, gamma_suite());
    let t = Instant::now();
    report(5, "gradient check", t, gradient_check());
    let t = Instant::now();
    report(6, "k-means oracle", t, kmeans_oracle());

    let t = Instant::now();
    match default_training() {
        Ok((ctx, trained)) => {
            report(7, "noise ordering", t, noise_ordering(&ctx, &trained));
            let t = Instant::now();
            report(9, "reproducibility", t, reproducibility(&trained));
        }
        Err(e) => {
            report(7, "noise ordering", t, Err(e.clone()));
            report(9, "reproducibility", t, Err(e));
        }
    }

    let t = Instant::now();
    match cli_binary() {
        Ok(bin) => {
            report(8, "component ablation", t, component_ablation(&bin));
            let t = Instant::now();
            report(10, "command-line contract", t, cli_contract(&bin));
        }
        Err(e) => {
            report(8, "component ablation", t, Err(e.clone()));
            report(10, "command-line contract", t, Err(e));
        }
    }

    if failures > 0 {
        println!("{failures} criteria failed");
        std::process::exit(1);
    }
    println!("all criteria passed");
}
