//! Acceptance run: one PASS/FAIL line per criterion, nonzero exit if any fails.
//!
//! The end-to-end criteria train on the desk benchmark described by
//! `configs/desk.conf` (160 train / 64 test scenes) for three seeds.

mod common;

use std::panic::{self, AssertUnwindSafe};
use std::path::Path;
use std::process::{Command, ExitCode};
use std::time::{Duration, Instant};

use common::{checks, gradcheck};
use scaler::config::RunConfig;
use scaler::metrics::MetricMeans;
use scaler::synthdata::{self, Dataset, DatasetConfig};
use scaler::trainer::{self, Position, RunOptions, StageMetrics, TrainConfig, METRICS_FILE};

const DESK: &str = include_str!("../../../configs/desk.conf");
const SEEDS: [u64; 3] = [1, 2, 3];
const N_TRAIN: usize = 160;
const N_TEST: usize = 64;

type Outcome = Result<String, String>;

fn desk() -> RunConfig {
    RunConfig::parse(DESK).expect("desk config parses")
}

fn benchmark(cfg: &RunConfig, seed: u64) -> Dataset {
    synthdata::generate(&DatasetConfig {
        n_train: N_TRAIN,
        n_test: N_TEST,
        scene: cfg.scene.clone(),
        annotation: cfg.train.annotation,
        seed,
        ..DatasetConfig::default()
    })
    .expect("benchmark generates")
}

fn train(ds: &Dataset, cfg: &TrainConfig) -> trainer::TrainOutcome {
    trainer::train(ds, cfg, &RunOptions::default()).expect("training succeeds")
}

fn mean(v: impl IntoIterator<Item = f64>) -> f64 {
    let v: Vec<f64> = v.into_iter().collect();
    v.iter().sum::<f64>() / v.len() as f64
}

fn stage<'a>(stages: &'a [StageMetrics], name: &str) -> &'a StageMetrics {
    stages.iter().find(|s| s.stage == name).unwrap_or_else(|| panic!("no {name} metrics"))
}

/// Runs `f`, turning a panic into a failure that carries its message.
fn guarded(f: impl FnOnce() -> Outcome) -> Outcome {
    panic::catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|payload| {
        Err(payload
            .downcast_ref::<String>()
            .cloned()
            .or_else(|| payload.downcast_ref::<&str>().map(|s| s.to_string()))
            .unwrap_or_else(|| "panicked".into()))
    })
}

fn gradient_oracle() -> Outcome {
    let start = Instant::now();
    let trials = 100u64;
    for seed in 0..trials {
        gradcheck::every_op_kind(seed);
        gradcheck::basic_losses(seed);
        gradcheck::refinement_losses(seed);
        gradcheck::generalist_losses(seed);
        gradcheck::phase_losses(seed);
    }
    gradcheck::stop_grad_blocks_the_path();
    let elapsed = start.elapsed();
    if elapsed > Duration::from_secs(60) {
        return Err(format!("{trials} trials took {elapsed:.1?}"));
    }
    Ok(format!("{trials} trials of every op and loss within {:e} in {elapsed:.1?}", gradcheck::TOLERANCE))
}

fn ema_algebra() -> Outcome {
    let (per_step, total) = checks::ema_contraction(0.996, 1000);
    if per_step > 1e-12 || total > 1e-10 {
        return Err(format!("contraction off by {per_step:e} per step, {total:e} overall"));
    }
    Ok(format!("per-step deviation {per_step:.1e}, 1000-step deviation {total:.1e}"))
}

fn fusion() -> Outcome {
    let (exact, scaled) = checks::fusion_oracle(50);
    Ok(format!("50 images: max error {exact} without scales, {scaled:.4} with scales"))
}

fn branches() -> Outcome {
    let [hard, easy, normal] = checks::branch_coverage();
    for seed in 0..20 {
        gradcheck::refinement_losses(seed);
    }
    Ok(format!("121-cell grid matches the table (hard {hard}, easy {easy}, normal {normal})"))
}

fn metrics() -> Outcome {
    checks::metric_fixtures();
    let worst = checks::metric_references(200);
    Ok(format!("fixtures exact, 203 cases within {worst:.1e} of the references"))
}

struct SeedRun {
    seed: u64,
    stages: Vec<StageMetrics>,
}

fn benchmark_runs() -> (Vec<SeedRun>, Duration) {
    let cfg = desk();
    let start = Instant::now();
    let runs = SEEDS
        .iter()
        .map(|&seed| {
            let ds = benchmark(&cfg, seed);
            let out = train(&ds, &cfg.train);
            let run = SeedRun { seed, stages: out.state.stage_metrics };
            for name in ["stage1", "stage2", "stage3"] {
                let s = stage(&run.stages, name);
                println!(
                    "      seed {seed} {name}: student mae {:.4} f_beta {:.4} | generalist mae {:.4}",
                    s.student.mae, s.student.f_beta, s.generalist.mae
                );
            }
            run
        })
        .collect();
    (runs, start.elapsed())
}

fn end_to_end(runs: &[SeedRun], elapsed: Duration) -> Outcome {
    let student = |r: &SeedRun, name: &str| -> MetricMeans { stage(&r.stages, name).student };
    let mut lines = Vec::new();
    let mut ok = elapsed <= Duration::from_secs(15 * 60);
    for (baseline, label) in [("stage1", "stage-1 only"), ("stage2", "no-phase2")] {
        let full_mae = mean(runs.iter().map(|r| student(r, "stage3").mae));
        let base_mae = mean(runs.iter().map(|r| student(r, baseline).mae));
        let full_f = mean(runs.iter().map(|r| student(r, "stage3").f_beta));
        let base_f = mean(runs.iter().map(|r| student(r, baseline).f_beta));
        let regressing: Vec<u64> =
            runs.iter().filter(|r| student(r, "stage3").mae > student(r, baseline).mae).map(|r| r.seed).collect();
        ok &= full_mae < base_mae && full_f > base_f && regressing.is_empty();
        lines.push(format!(
            "vs {label}: mae {full_mae:.4} < {base_mae:.4}, f_beta {full_f:.4} > {base_f:.4}, regressing seeds {regressing:?}"
        ));
    }
    let summary = format!("{}; {elapsed:.0?} for 3 seeds", lines.join("; "));
    if ok {
        Ok(summary)
    } else {
        Err(summary)
    }
}

fn generalist_benefits(runs: &[SeedRun]) -> Outcome {
    let after = mean(runs.iter().map(|r| stage(&r.stages, "stage3").generalist.mae));
    let before = mean(runs.iter().map(|r| stage(&r.stages, "stage1").generalist.mae));
    let summary = format!("generalist mae after stage 3 {after:.4} vs after stage-1 fine-tuning {before:.4}");
    if after <= before {
        Ok(summary)
    } else {
        Err(summary)
    }
}

fn weighting_ablation() -> Outcome {
    let base = desk();
    let noisy = TrainConfig {
        plf_oracle_noise: Some(0.2),
        stage0_epochs: 0,
        generalist_finetune_epochs: 0,
        ..base.train.clone()
    };
    let variants: [(&str, TrainConfig); 3] = [
        ("full", noisy.clone()),
        ("no-entropy-weight", TrainConfig { no_entropy_weight: true, ..noisy.clone() }),
        ("no-uncertainty-weight", TrainConfig { no_uncertainty_weight: true, ..noisy.clone() }),
    ];
    let mut maes = [0.0f64; 3];
    for &seed in &SEEDS {
        let ds = benchmark(&base, seed);
        for (i, (name, cfg)) in variants.iter().enumerate() {
            let out = train(&ds, cfg);
            let mae = out.metrics.expect("complete run").student.test.mean.mae;
            println!("      seed {seed} {name}: student mae {mae:.4}");
            maes[i] += mae / SEEDS.len() as f64;
        }
    }
    let summary =
        format!("mean mae full {:.4}, no-entropy-weight {:.4}, no-uncertainty-weight {:.4}", maes[0], maes[1], maes[2]);
    if maes[1] >= maes[0] && maes[2] >= maes[0] {
        Ok(summary)
    } else {
        Err(summary)
    }
}

fn run_cli<S: AsRef<std::ffi::OsStr> + std::fmt::Debug>(args: &[S]) {
    let out = Command::new(env!("CARGO_BIN_EXE_scaler")).args(args).output().expect("binary runs");
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
}

fn determinism() -> Outcome {
    let root = tempfile::tempdir().expect("temp dir");
    let p = |name: &str| root.path().join(name);
    let s = |path: &Path| path.to_str().expect("utf-8 path").to_string();
    let conf = "stage0_epochs = 1\naux_samples = 12\nstage1_epochs = 2\ngeneralist_finetune_epochs = 1\n\
                stage2_epochs = 1\nstage3_alternations = 3\nk = 2\nlr = 0.003\ngeneralist_lr = 0.003\n";
    std::fs::write(p("run.conf"), conf).expect("write config");
    run_cli(&["gen-data", "--out", &s(&p("data")), "--n", "24", "--n-test", "8", "--side", "16", "--seed", "9"]);
    let train_args = |out: &str| {
        vec![
            "train".into(),
            "--config".into(),
            s(&p("run.conf")),
            "--data".into(),
            s(&p("data")),
            "--out".into(),
            s(&p(out)),
        ]
    };
    for out in ["a", "b"] {
        run_cli(&train_args(out));
    }
    let metrics = |out: &str| std::fs::read(p(out).join(METRICS_FILE)).expect("metrics written");
    if metrics("a") != metrics("b") {
        return Err("repeated runs wrote different metrics.json".into());
    }

    // Interrupt a third run after the first Stage-3 alternation, then resume it.
    let cfg = RunConfig::parse(conf).expect("config parses");
    let ds = synthdata::read_dataset(&p("data")).expect("data reads");
    trainer::train(
        &ds,
        &cfg.train,
        &RunOptions { out_dir: Some(p("c")), resume: false, stop_after: Some(Position::Alternation(0)) },
    )
    .expect("partial run");
    if p("c").join(METRICS_FILE).exists() {
        return Err("interrupted run already wrote metrics".into());
    }
    let mut args: Vec<String> = train_args("c");
    args.push("--resume".into());
    run_cli(&args);
    if metrics("a") != metrics("c") {
        return Err("resumed run differs from the uninterrupted one".into());
    }
    Ok("repeated runs byte-identical; resume after alternation 1 of 3 matches".into())
}

fn main() -> ExitCode {
    panic::set_hook(Box::new(|_| {}));
    // Cheap criteria run first; the summary is printed in criterion order.
    let mut results = std::collections::BTreeMap::new();
    let mut report = |n: u32, name: &'static str, outcome: Outcome| {
        let line = match &outcome {
            Ok(d) => format!("PASS {n:>2} {name}: {d}"),
            Err(d) => format!("FAIL {n:>2} {name}: {d}"),
        };
        println!("   {line}");
        results.insert(n, (outcome.is_ok(), line));
    };
    report(1, "gradient oracle", guarded(gradient_oracle));
    report(2, "weighting formulas", guarded(|| Ok(checks::weighting_fixtures())));
    report(3, "EMA algebra", guarded(ema_algebra));
    report(4, "fusion alignment", guarded(fusion));
    report(5, "branch coverage", guarded(branches));
    report(9, "determinism and resume", guarded(determinism));
    report(10, "metric sanity", guarded(metrics));

    match panic::catch_unwind(benchmark_runs) {
        Ok((runs, elapsed)) => {
            report(6, "end-to-end direction", guarded(|| end_to_end(&runs, elapsed)));
            report(8, "phase II helps the generalist", guarded(|| generalist_benefits(&runs)));
        }
        Err(_) => {
            report(6, "end-to-end direction", Err("benchmark training failed".into()));
            report(8, "phase II helps the generalist", Err("benchmark training failed".into()));
        }
    }
    report(7, "weighting ablation under label noise", guarded(weighting_ablation));

    println!();
    for (_, line) in results.values() {
        println!("{line}");
    }
    let failed = results.values().filter(|(ok, _)| !ok).count();
    if failed == 0 {
        println!("all {} criteria passed", results.len());
        ExitCode::SUCCESS
    } else {
        println!("{failed} criteria failed");
        ExitCode::FAILURE
    }
}
