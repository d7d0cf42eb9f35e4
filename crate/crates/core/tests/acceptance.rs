//! Acceptance suite: one pass/fail line per criterion, non-zero exit if any
//! criterion fails. Runs as a plain binary (`harness = false`).

mod common;

use std::fs;
use std::path::Path;
use std::time::{Duration, Instant};

use noisytune::expbench::{
    read_manifest, read_study, write_study, Bench, ScenarioSpec, StudyName, StudyReport,
};
use noisytune::perturb::{
    perturb_checkpoint_with, tensor_std, NoiseDistribution, NoiseScope, NoiseSpec, PerturbStatus,
};
use noisytune::rng::derive_substream;
use noisytune::tensorstore::{encode_checkpoint, Checkpoint, NamedTensor};
use noisytune::toymodel::{init_params, params_to_checkpoint, Head, ModelConfig};
use noisytune::trainkit::{finetune, FinetuneMethod, SearchGrid, TrainConfig};
use noisytune::Execution;
use rand_distr::{Distribution, StandardNormal};

type Outcome = Result<String, String>;

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn err(e: impl std::fmt::Display) -> String {
    e.to_string()
}

fn gaussian_tensor(name: &str, n: usize, sd: f64, seed: u64) -> NamedTensor {
    let mut rng = derive_substream(seed, name);
    let data = (0..n)
        .map(|_| {
            let z: f64 = StandardNormal.sample(&mut rng);
            (z * sd) as f32
        })
        .collect();
    NamedTensor::new(name, vec![n], data).unwrap()
}

fn pretrained_like() -> Checkpoint {
    params_to_checkpoint(&init_params(&ModelConfig::default(), 17).unwrap())
}

fn c1_exactness() -> Outcome {
    let ckpt = pretrained_like();
    let seq = Execution::Sequential;
    for scope in [NoiseScope::Matrix, NoiseScope::Global] {
        let (out, _) = perturb_checkpoint_with(
            &ckpt,
            &NoiseSpec::uniform(0.0, 3).with(NoiseDistribution::Uniform, scope),
            seq,
        )
        .map_err(err)?;
        ensure(out.tensors == ckpt.tensors, || {
            format!("lambda 0 changed values ({scope})")
        })?;
    }
    let mut checked = 0usize;
    for lambda in [0.05, 0.15, 1.0, 5.0] {
        for seed in 0..5 {
            let spec = NoiseSpec::uniform(lambda, seed).excluding("embed_pos");
            let (out, report) = perturb_checkpoint_with(&ckpt, &spec, seq).map_err(err)?;
            for ((a, b), rec) in ckpt.tensors.iter().zip(&out.tensors).zip(&report.tensors) {
                match rec.status {
                    PerturbStatus::Perturbed => {
                        let bound = 0.5 * lambda * tensor_std(a);
                        for (x, y) in a.data.iter().zip(&b.data) {
                            ensure((*y as f64 - *x as f64).abs() <= bound, || {
                                format!("{}: |delta| {} > bound {bound}", a.name, (*y - *x).abs())
                            })?;
                            checked += 1;
                        }
                    }
                    PerturbStatus::SkippedZeroStd | PerturbStatus::SkippedExcluded => {
                        let bits = |t: &NamedTensor| t.data.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
                        ensure(bits(a) == bits(b), || format!("{} skipped but changed", a.name))?;
                    }
                }
            }
            ensure(
                report.get("type_embedding").unwrap().status == PerturbStatus::SkippedZeroStd,
                || "type_embedding not skipped".into(),
            )?;
            ensure(
                report.get("embed_pos").unwrap().status == PerturbStatus::SkippedExcluded,
                || "embed_pos not excluded".into(),
            )?;
        }
    }
    let mut scales = 0;
    for k in [-3i32, -1, 1, 2, 5] {
        let c = 2f32.powi(k);
        let mut scaled = ckpt.clone();
        scaled
            .tensors
            .iter_mut()
            .for_each(|t| t.data.iter_mut().for_each(|x| *x *= c));
        for dist in [NoiseDistribution::Uniform, NoiseDistribution::Gaussian] {
            let spec = NoiseSpec::uniform(0.15, 9).with(dist, NoiseScope::Matrix);
            let (a, _) = perturb_checkpoint_with(&ckpt, &spec, seq).map_err(err)?;
            let (b, _) = perturb_checkpoint_with(&scaled, &spec, seq).map_err(err)?;
            for (ta, tb) in a.tensors.iter().zip(&b.tensors) {
                ensure(
                    ta.data
                        .iter()
                        .zip(&tb.data)
                        .all(|(x, y)| (x * c).to_bits() == y.to_bits()),
                    || format!("scale {c}: {} not equivariant ({dist})", ta.name),
                )?;
            }
            scales += 1;
        }
    }
    Ok(format!(
        "identity, {checked} bounded elements, zero-std and exclusion skips, {scales} scale/distribution pairs"
    ))
}

fn c2_noise_statistics() -> Outcome {
    let n = 1_000_000;
    let base = gaussian_tensor("w", n, 1.0, 1);
    let ckpt = Checkpoint::from_tensors(vec![base.clone()]).unwrap();
    let lambda = 0.15;
    let std = tensor_std(&base);
    let target = lambda * std / 12f64.sqrt();
    let mut parts = Vec::new();
    for dist in [NoiseDistribution::Uniform, NoiseDistribution::Gaussian] {
        let spec = NoiseSpec::uniform(lambda, 7).with(dist, NoiseScope::Matrix);
        let (out, _) = perturb_checkpoint_with(&ckpt, &spec, Execution::Sequential).map_err(err)?;
        let deltas: Vec<f64> = out.tensors[0]
            .data
            .iter()
            .zip(&base.data)
            .map(|(y, x)| *y as f64 - *x as f64)
            .collect();
        let mean = deltas.iter().sum::<f64>() / n as f64;
        let sd = (deltas.iter().map(|d| (d - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt();
        let se = sd / (n as f64).sqrt();
        ensure(mean.abs() <= 3.0 * se, || {
            format!("{dist}: mean {mean:e} beyond 3 SE {:e}", 3.0 * se)
        })?;
        let rel = (sd / target - 1.0).abs();
        ensure(rel <= 0.02, || {
            format!("{dist}: std {sd:.6} vs {target:.6} ({:.2}%)", 100.0 * rel)
        })?;
        parts.push(format!(
            "{dist} mean/SE {:+.2}, std off {:.3}%",
            mean / se,
            100.0 * rel
        ));
    }
    Ok(parts.join("; "))
}

fn c3_std_oracle() -> Outcome {
    let mut worst = 0.0f64;
    let mut rng = derive_substream(3, "std-oracle");
    for i in 0..100 {
        let t = match i {
            0 => NamedTensor::new("c", vec![50], vec![0.7; 50]).unwrap(),
            1 => NamedTensor::new("s", vec![1], vec![-3.25]).unwrap(),
            2 => NamedTensor::new("z", vec![4, 4], vec![0.0; 16]).unwrap(),
            _ => {
                let n = 1 + rng.below(5000);
                let offset = (rng.unit_f64() - 0.5) * 200.0;
                let sd = 10f64.powf(rng.unit_f64() * 6.0 - 3.0);
                let mut t = gaussian_tensor(&format!("t{i}"), n, sd, i);
                t.data.iter_mut().for_each(|x| *x += offset as f32);
                t
            }
        };
        let want = common::two_pass_std(&t.data);
        let got = tensor_std(&t);
        if i < 3 {
            ensure(got == 0.0 && want == 0.0, || {
                format!("{}: degenerate std {got}", t.name)
            })?;
            continue;
        }
        let rel = (got - want).abs() / want;
        worst = worst.max(rel);
        ensure(rel <= 1e-6, || format!("{}: {got} vs {want}", t.name))?;
    }
    Ok(format!("100 tensors, worst relative error {worst:.1e}"))
}

fn c4_gradients() -> Outcome {
    let mut worst = 0.0f64;
    let mut tensors = 0;
    for (head, base) in [(Head::Cls, 1000u64), (Head::Mlm, 2000)] {
        for trial in 0..6 {
            let cfg = common::random_tiny_config(base + trial);
            let p = init_params(&cfg, trial).map_err(err)?;
            let batch = common::random_batch(&cfg, head, base + 100 + trial);
            for (name, e) in common::fd_gradient_check(&p, &batch, head) {
                ensure(e < 1e-4, || format!("{head:?} trial {trial} {name}: {e:e}"))?;
                worst = worst.max(e);
                tensors += 1;
            }
        }
    }
    Ok(format!(
        "{tensors} tensor checks over both heads, worst relative error {worst:.1e}"
    ))
}

fn reduced_spec() -> ScenarioSpec {
    let mut s = ScenarioSpec {
        seeds: vec![0, 1, 2],
        ..ScenarioSpec::default()
    };
    s.corpus.n_sequences = 200;
    s.pretrain.epochs = 2;
    s.downstream.n_train = 16;
    s.downstream.n_eval = 64;
    s.finetune.epochs = 3;
    s
}

fn dir_bytes(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut files: Vec<(String, Vec<u8>)> = fs::read_dir(dir)
        .unwrap()
        .map(|e| {
            let e = e.unwrap();
            (
                e.file_name().to_string_lossy().into_owned(),
                fs::read(e.path()).unwrap(),
            )
        })
        .collect();
    files.sort();
    files
}

fn c5_determinism() -> Outcome {
    let ckpt = pretrained_like();
    for scope in [NoiseScope::Matrix, NoiseScope::Global] {
        let spec = NoiseSpec::uniform(0.15, 42).with(NoiseDistribution::Uniform, scope);
        let a = perturb_checkpoint_with(&ckpt, &spec, Execution::Sequential)
            .map_err(err)?
            .0;
        let b = perturb_checkpoint_with(&ckpt, &spec, Execution::from_jobs(2))
            .map_err(err)?
            .0;
        let c = perturb_checkpoint_with(&ckpt, &spec, Execution::Sequential)
            .map_err(err)?
            .0;
        let bytes = |c: &Checkpoint| encode_checkpoint(c).unwrap();
        ensure(bytes(&a) == bytes(&b) && bytes(&a) == bytes(&c), || {
            format!("perturb differs ({scope})")
        })?;
    }

    let spec = reduced_spec();
    let (p1, _) = noisytune::expbench::pretrain(&spec).map_err(err)?;
    let (p2, _) = noisytune::expbench::pretrain(&spec).map_err(err)?;
    ensure(
        encode_checkpoint(&p1).unwrap() == encode_checkpoint(&p2).unwrap(),
        || "pretraining differs".into(),
    )?;

    let data = noisytune::expbench::gen_downstream(&spec, 1).map_err(err)?;
    let config = TrainConfig {
        seed: 5,
        ..spec.finetune.clone()
    };
    for m in [
        FinetuneMethod::Vanilla,
        FinetuneMethod::mixout_default(),
        FinetuneMethod::recadam_default(),
    ] {
        let a = finetune(&p1, &spec.model, &m, &data.train, &data.eval, &config).map_err(err)?;
        let b = finetune(&p1, &spec.model, &m, &data.train, &data.eval, &config).map_err(err)?;
        let json = |t: &noisytune::trainkit::MetricTrajectory| serde_json::to_string(t).unwrap();
        ensure(a.0 == b.0 && json(&a.1) == json(&b.1), || {
            format!("finetune differs ({})", m.label())
        })?;
    }

    let tmp = tempfile::tempdir().map_err(err)?;
    let seq_bench = Bench::with_checkpoint(spec.clone(), p1.clone(), Execution::from_jobs(1)).map_err(err)?;
    let par_bench = Bench::with_checkpoint(spec.clone(), p1, Execution::from_jobs(2)).map_err(err)?;
    let roots = ["seq", "par", "seq-again"].map(|n| tmp.path().join(n));
    for study in StudyName::ALL {
        for (root, bench) in roots.iter().zip([&seq_bench, &par_bench, &seq_bench]) {
            fs::create_dir_all(root).map_err(err)?;
            let rep = bench.run_study(study).map_err(err)?;
            write_study(root, bench.spec(), &rep).map_err(err)?;
        }
    }
    let run = spec.run_dir_name();
    let outs: Vec<_> = roots.iter().map(|r| dir_bytes(&r.join(&run))).collect();
    ensure(outs[0] == outs[1], || "jobs 2 output differs from jobs 1".into())?;
    ensure(outs[0] == outs[2], || "rerun output differs".into())?;
    Ok(format!(
        "perturb, pretrain, finetune (3 methods) and {} study files identical across reruns and jobs 1 vs 2",
        outs[0].len()
    ))
}

struct Studies {
    main: StudyReport,
    sweep: StudyReport,
    noise_types: StudyReport,
    spec: ScenarioSpec,
    pretrain_time: Duration,
}

fn acc(rep: &StudyReport, cond: &str) -> Result<f64, String> {
    rep.row(cond)
        .map(|r| r.mean_accuracy)
        .ok_or_else(|| format!("{}: missing row {cond}", rep.study))
}

fn c6_lambda_extremes(s: &Studies) -> Outcome {
    ensure(s.spec.seeds.len() == 20, || {
        "default scenario must have 20 seeds".into()
    })?;
    let chance = 1.0 / s.spec.model.n_classes as f64;
    let big = acc(&s.main, "noisytune-lambda=5")?;
    ensure((big - chance).abs() <= 0.05, || {
        format!("lambda 5 mean {big:.4} not within 5 points of {chance}")
    })?;
    let grid = SearchGrid::default().lambda;
    ensure(grid == s.spec.studies.lambda_grid, || {
        "sweep does not use the grid".into()
    })?;
    let mut lowest = f64::INFINITY;
    for l in &grid {
        let a = acc(&s.sweep, &format!("lambda={l}"))?;
        ensure(big < a, || {
            format!("lambda 5 mean {big:.4} not below lambda {l} mean {a:.4}")
        })?;
        lowest = lowest.min(a);
    }
    for (rep, name) in [
        (&s.main, "lambda-zero-equals-no-noise"),
        (&s.sweep, "lambda-zero-equals-no-noise"),
    ] {
        let c = rep
            .check(name)
            .ok_or_else(|| format!("{}: missing check {name}", rep.study))?;
        ensure(c.passed, || format!("{}: {}", rep.study, c.detail))?;
    }
    Ok(format!(
        "lambda 5 mean {big:.4} (chance {chance}), lowest grid mean {lowest:.4}, lambda 0 identical to no noise"
    ))
}

fn c7_matrix_vs_global(s: &Studies) -> Outcome {
    let mut parts = Vec::new();
    for dist in ["gaussian", "uniform"] {
        let g = acc(&s.noise_types, &format!("global-{dist}"))?;
        let m = acc(&s.noise_types, &format!("matrix-{dist}"))?;
        ensure(g <= m - 0.01, || {
            format!(
                "{dist}: global {g:.4} vs matrix {m:.4}, gap {:.2} points",
                100.0 * (m - g)
            )
        })?;
        parts.push(format!(
            "{dist} global {g:.4} vs matrix {m:.4} ({:+.2} points)",
            100.0 * (g - m)
        ));
    }
    Ok(parts.join("; "))
}

fn c8_sanity(s: &Studies) -> Outcome {
    let mut parts = Vec::new();
    for name in ["pretraining-useful", "untrained-random-near-chance"] {
        let c = s
            .main
            .check(name)
            .ok_or_else(|| format!("missing check {name}"))?;
        ensure(c.passed, || format!("{name}: {}", c.detail))?;
        parts.push(c.detail.clone());
    }
    Ok(parts.join("; "))
}

fn csv_shape(path: &Path, header: &[&str], rows: usize) -> Result<(), String> {
    let mut r = csv::Reader::from_path(path).map_err(err)?;
    let h: Vec<String> = r.headers().map_err(err)?.iter().map(str::to_owned).collect();
    ensure(h == header, || format!("{}: header {h:?}", path.display()))?;
    let mut n = 0;
    for rec in r.records() {
        let rec = rec.map_err(err)?;
        ensure(rec.len() == header.len(), || {
            format!("{}: ragged row", path.display())
        })?;
        n += 1;
    }
    ensure(n == rows, || {
        format!("{}: {n} rows, expected {rows}", path.display())
    })
}

const SUMMARY_HEADER: [&str; 9] = [
    "condition",
    "lambda",
    "fraction",
    "mean_accuracy",
    "std_accuracy",
    "n_seeds",
    "baseline",
    "mean_paired_diff",
    "std_paired_diff",
];

fn c9_reports(bench: &Bench, main: &StudyReport) -> Outcome {
    let tmp = tempfile::tempdir().map_err(err)?;
    let n_seeds = bench.spec().seeds.len();
    let mut reports = vec![main.clone()];
    for study in [
        StudyName::Combination,
        StudyName::DataFraction,
        StudyName::NormTracking,
    ] {
        reports.push(bench.run_study(study).map_err(err)?);
    }
    let mut dir = None;
    for rep in &reports {
        dir = Some(write_study(tmp.path(), bench.spec(), rep).map_err(err)?);
    }
    let dir = dir.unwrap();
    let manifest = read_manifest(&dir).map_err(err)?;
    ensure(manifest.artifacts.len() == reports.len(), || {
        "manifest is incomplete".into()
    })?;
    let mut summary = Vec::new();
    for entry in &manifest.artifacts {
        let back = read_study(&dir, entry).map_err(err)?;
        let rep = reports.iter().find(|r| r.study == entry.study).unwrap();
        ensure(
            back.to_json().map_err(err)? == rep.to_json().map_err(err)?,
            || format!("{}: JSON does not round-trip", entry.study),
        )?;
        ensure(!rep.rows.is_empty(), || format!("{}: no rows", rep.study))?;
        for row in &rep.rows {
            ensure(row.n_seeds == n_seeds, || {
                format!("{}: {} has {} seeds", rep.study, row.condition, row.n_seeds)
            })?;
            ensure(
                row.mean_accuracy.is_finite() && row.std_accuracy.is_finite(),
                || format!("{}: {} has non-finite stats", rep.study, row.condition),
            )?;
        }
        for run in &rep.runs {
            ensure(run.per_seed.len() == n_seeds, || {
                format!("{}: short per-seed list", rep.study)
            })?;
        }
        let paired_rows = rep.rows.iter().filter(|r| r.baseline.is_some()).count();
        ensure(paired_rows > 0 && rep.paired.len() >= paired_rows, || {
            format!("{}: missing paired diffs", rep.study)
        })?;
        for p in &rep.paired {
            ensure(p.per_seed.len() == n_seeds, || {
                format!("{}: paired diff lacks seeds", rep.study)
            })?;
        }
        if rep.study == StudyName::NormTracking {
            let header = ["condition", "epoch", "group", "mean_change", "std_change"];
            csv_shape(&dir.join(&entry.csv), &header, rep.norm.len())?;
            ensure(!rep.norm.is_empty(), || "norm tracking has no norm rows".into())?;
        } else {
            csv_shape(&dir.join(&entry.csv), &SUMMARY_HEADER, rep.rows.len())?;
        }
        let identity: Vec<_> = rep
            .checks
            .iter()
            .filter(|c| c.name.starts_with("lambda-zero"))
            .collect();
        ensure(!identity.is_empty(), || {
            format!("{}: no lambda 0 cross-check", rep.study)
        })?;
        for c in identity {
            ensure(c.passed, || {
                format!("{}: {} failed: {}", rep.study, c.name, c.detail)
            })?;
        }
        summary.push(format!(
            "{} ({} rows)",
            rep.study,
            rep.rows.len().max(rep.norm.len())
        ));
    }
    Ok(summary.join(", "))
}

struct Line {
    id: usize,
    title: &'static str,
    budget: Duration,
}

fn report(line: Line, elapsed: Duration, outcome: Outcome, failures: &mut usize) {
    let outcome = outcome.and_then(|d| {
        if elapsed <= line.budget {
            Ok(d)
        } else {
            Err(format!("{d}; over the {:?} budget", line.budget))
        }
    });
    let (tag, detail) = match &outcome {
        Ok(d) => ("PASS", d),
        Err(d) => ("FAIL", d),
    };
    if outcome.is_err() {
        *failures += 1;
    }
    println!(
        "criterion {} [{tag}] {} ({:.1} s): {detail}",
        line.id,
        line.title,
        elapsed.as_secs_f64()
    );
}

fn timed<T>(f: impl FnOnce() -> T) -> (T, Duration) {
    let t = Instant::now();
    let out = f();
    (out, t.elapsed())
}

fn main() {
    let mut failures = 0;
    let secs = Duration::from_secs;
    let quick: [(Line, fn() -> Outcome); 5] = [
        (
            Line {
                id: 1,
                title: "noise exactness",
                budget: secs(10),
            },
            c1_exactness,
        ),
        (
            Line {
                id: 2,
                title: "noise statistics",
                budget: secs(10),
            },
            c2_noise_statistics,
        ),
        (
            Line {
                id: 3,
                title: "std oracle",
                budget: secs(5),
            },
            c3_std_oracle,
        ),
        (
            Line {
                id: 4,
                title: "gradient check",
                budget: secs(60),
            },
            c4_gradients,
        ),
        (
            Line {
                id: 5,
                title: "determinism",
                budget: secs(300),
            },
            c5_determinism,
        ),
    ];
    for (line, f) in quick {
        let (outcome, t) = timed(f);
        report(line, t, outcome, &mut failures);
    }

    let spec = ScenarioSpec::default();
    let (bench, pretrain_time) = timed(|| Bench::new(spec.clone(), Execution::default()));
    let bench = match bench {
        Ok(b) => b,
        Err(e) => {
            for id in 6..=9 {
                println!("criterion {id} [FAIL] default scenario could not be built: {e}");
            }
            std::process::exit(1);
        }
    };
    let (main, t_main) = timed(|| bench.run_study(StudyName::Main));
    let (sweep, t_sweep) = timed(|| bench.run_study(StudyName::LambdaSweep));
    let (noise_types, t_types) = timed(|| bench.run_study(StudyName::NoiseTypes));
    let studies = match (main, sweep, noise_types) {
        (Ok(main), Ok(sweep), Ok(noise_types)) => Studies {
            main,
            sweep,
            noise_types,
            spec,
            pretrain_time,
        },
        (a, b, c) => {
            let e = [a.err(), b.err(), c.err()].into_iter().flatten().next().unwrap();
            for id in 6..=9 {
                println!("criterion {id} [FAIL] study failed: {e}");
            }
            std::process::exit(1);
        }
    };
    let base = studies.pretrain_time;
    let (o, t) = timed(|| c6_lambda_extremes(&studies));
    report(
        Line {
            id: 6,
            title: "lambda extremes",
            budget: secs(900),
        },
        base + t_main + t_sweep + t,
        o,
        &mut failures,
    );
    let (o, t) = timed(|| c7_matrix_vs_global(&studies));
    report(
        Line {
            id: 7,
            title: "matrix-wise vs global",
            budget: secs(1200),
        },
        base + t_types + t,
        o,
        &mut failures,
    );
    let (o, t) = timed(|| c8_sanity(&studies));
    report(
        Line {
            id: 8,
            title: "scenario sanity",
            budget: secs(900),
        },
        base + t_main + t,
        o,
        &mut failures,
    );
    let (o, t) = timed(|| c9_reports(&bench, &studies.main));
    report(
        Line {
            id: 9,
            title: "reported analyses",
            budget: secs(1800),
        },
        base + t_main + t,
        o,
        &mut failures,
    );

    if failures > 0 {
        println!("{failures} criteria failed");
        std::process::exit(1);
    }
    println!("all 9 criteria passed");
}
