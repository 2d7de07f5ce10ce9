//! Acceptance suite: one PASS/FAIL line per criterion. Run with
//! `cargo test -p cad --test acceptance`.
//!
//! Any evaluated criterion that fails makes the process exit nonzero. A
//! criterion whose external input is missing prints FAIL marked as blocked
//! and only fails the exit status when `CAD_ACCEPTANCE_STRICT` is set.

mod common;

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::Instant;

use cad::config::EntityPaths;
use cad::io::{load_labels, load_series};
use cad::pipeline::{score_entity, train_entity};
use cad::Checkpoint;
use cad_core::data::{Scaler, SeriesMatrix, WindowSet};
use cad_core::eval::{aggregate_entities, best_f1, kth_point_adjust, point_adjust, prf, Adjuster, Prf};
use cad_core::model::{build_model, CadModel, Mode, ModelConfig, Variant};
use cad_core::tape::Tape;
use cad_core::train::TrainConfig;
use cad_core::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Outcome = Result<String, String>;

const BLOCKED: &str = "blocked: ";
type Criterion = (&'static str, fn() -> Outcome);

fn check(cond: bool, pass: String, fail: String) -> Outcome {
    if cond {
        Ok(pass)
    } else {
        Err(fail)
    }
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

// ---------------------------------------------------------------- C1

fn mse(model: &CadModel<f64>, x: &Tensor<f64>, y: &Tensor<f64>) -> f64 {
    let p = model.predict(x).unwrap();
    p.data().iter().zip(y.data()).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / p.len() as f64
}

fn c1_gradients() -> Outcome {
    let config = ModelConfig {
        metrics: 4,
        window: 8,
        horizon: 1,
        experts: 2,
        kernels: 3,
        epsilon: 0.7,
        variant: Variant::Full,
    };
    let model: CadModel<f64> = build_model(config, 1).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    let b = 6;
    let x = Tensor::new(&[b, 4, 8], (0..b * 32).map(|_| rng.gen_range(0.0..1.0)).collect()).unwrap();
    let y = Tensor::new(&[b, 4], (0..b * 4).map(|_| rng.gen_range(0.0..1.0)).collect()).unwrap();

    let mut tape = Tape::new();
    let vars = model.register(&mut tape);
    let (xv, yv) = (tape.constant(x.clone()), tape.constant(y.clone()));
    let pred = model.forward_tape(&mut tape, &vars, xv, Mode::Eval, &mut rng).unwrap();
    let loss = tape.mse_mean(pred, yv).unwrap();
    let grads = tape.grad(loss, &vars).unwrap();

    let h = 1e-5;
    let groups = ["conv.kernels", "expert.", "gate.shared", "gate.personal", "tower."];
    let mut worst = [0.0f64; 5];
    let mut checked = 0;
    for (pi, p) in model.params().iter().enumerate() {
        let g = groups.iter().position(|g| p.name.contains(g) && !(*g == "expert." && p.name.contains("conv"))).unwrap();
        let n = p.value.len();
        let entries: Vec<usize> = if n <= 48 { (0..n).collect() } else { (0..48).map(|_| rng.gen_range(0..n)).collect() };
        for e in entries {
            let mut plus = model.clone();
            plus.param_mut(&p.name).unwrap().data_mut()[e] += h;
            let mut minus = model.clone();
            minus.param_mut(&p.name).unwrap().data_mut()[e] -= h;
            let num = (mse(&plus, &x, &y) - mse(&minus, &x, &y)) / (2.0 * h);
            let ana = grads[pi].data()[e];
            let rel = (ana - num).abs() / ana.abs().max(num.abs()).max(1e-6);
            worst[g] = worst[g].max(rel);
            checked += 1;
        }
    }
    let max = worst.iter().cloned().fold(0.0, f64::max);
    let detail = format!(
        "{checked} entries; max rel err kernels {:.1e}, ff {:.1e}, W_s {:.1e}, W_pk {:.1e}, towers {:.1e}",
        worst[0], worst[1], worst[2], worst[3], worst[4]
    );
    check(max < 1e-4, detail.clone(), detail)
}

// ---------------------------------------------------------------- C2

fn brute_force(scores: &[f64], labels: &[u8], adj: Adjuster) -> (f64, f64) {
    let mut cands = scores.to_vec();
    cands.push(f64::INFINITY);
    cands.sort_by(f64::total_cmp);
    cands.dedup();
    let mut best = (f64::INFINITY, -1.0);
    for &t in &cands {
        let preds: Vec<u8> = scores.iter().map(|&s| u8::from(s >= t)).collect();
        let adjusted = match adj {
            Adjuster::Raw => preds,
            Adjuster::Pa => point_adjust(labels, &preds).unwrap(),
            Adjuster::Kpa(k) => kth_point_adjust(labels, &preds, k).unwrap(),
        };
        let f = prf(labels, &adjusted).unwrap().f1;
        if f > best.1 {
            best = (t, f);
        }
    }
    best
}

fn random_labels(rng: &mut ChaCha8Rng, n: usize, flip: f64) -> Vec<u8> {
    let mut on = false;
    (0..n)
        .map(|_| {
            if rng.gen_bool(flip) {
                on = !on;
            }
            u8::from(on)
        })
        .collect()
}

fn c2_best_f1() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(202);
    let mut mismatches = 0;
    for _ in 0..200 {
        let n = rng.gen_range(1..=500);
        let levels = rng.gen_range(2..80);
        let scores: Vec<f64> = (0..n).map(|_| rng.gen_range(0..levels) as f64 / 7.0).collect();
        let mut labels = random_labels(&mut rng, n, 0.06);
        if !labels.contains(&1) {
            let i = rng.gen_range(0..n);
            labels[i] = 1;
        }
        let k = rng.gen_range(0..50);
        for adj in [Adjuster::Raw, Adjuster::Pa, Adjuster::Kpa(k)] {
            let fast = best_f1(&scores, &labels, adj).unwrap();
            let (t, f) = brute_force(&scores, &labels, adj);
            if fast.f1.to_bits() != f.to_bits() || fast.threshold != t {
                mismatches += 1;
            }
        }
    }
    check(
        mismatches == 0,
        "200 instances x {raw, pa, kpa}: bit-equal F1 and threshold".into(),
        format!("{mismatches} mismatches"),
    )
}

// ---------------------------------------------------------------- C3

fn c3_pa_properties() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(303);
    let mut violations = 0;
    for _ in 0..1000 {
        let n = rng.gen_range(1..300);
        let labels = random_labels(&mut rng, n, 0.1);
        let p = rng.gen_range(0.01..0.5);
        let preds: Vec<u8> = (0..n).map(|_| u8::from(rng.gen_bool(p))).collect();
        let raw = prf(&labels, &preds).unwrap().f1;
        let pa_preds = point_adjust(&labels, &preds).unwrap();
        violations += usize::from(prf(&labels, &pa_preds).unwrap().f1 < raw);
        let mut prev = -1.0;
        for k in 0..=n {
            let f = prf(&labels, &kth_point_adjust(&labels, &preds, k).unwrap()).unwrap().f1;
            violations += usize::from(f < prev);
            prev = f;
        }
        violations += usize::from(kth_point_adjust(&labels, &preds, n).unwrap() != pa_preds);
    }
    check(violations == 0, "1000 pairs, zero violations".into(), format!("{violations} violations"))
}

// ---------------------------------------------------------------- C4

fn c4_windows_scaling() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(404);
    let mut violations = 0;
    for _ in 0..500 {
        let t = rng.gen_range(1..120);
        let k = rng.gen_range(1..4);
        let l = rng.gen_range(1..40);
        let h = rng.gen_range(1..10);
        let values: Vec<f64> = (0..t * k).map(|_| rng.gen_range(-50.0..50.0)).collect();
        let s = SeriesMatrix::new(t, k, values).unwrap();
        match WindowSet::<f64>::new(&s, l, h) {
            Ok(w) => {
                violations += usize::from(t < l + h || w.len() != t - l - h + 1);
                for i in [0, w.len() - 1] {
                    let smp = w.sample(i);
                    let ts = i + l + h - 1;
                    violations += usize::from(smp.target_timestamp != ts);
                    for m in 0..k {
                        violations += usize::from(smp.target[m] != s.get(ts, m));
                        violations += usize::from(smp.window.data()[m * l + l - 1] != s.get(i + l - 1, m));
                    }
                }
            }
            Err(_) => violations += usize::from(t >= l + h),
        }
        // scaling: one random column forced constant
        let c = rng.gen_range(0..k);
        let mut v = s.values().to_vec();
        let constant = rng.gen_range(-5.0..5.0);
        for r in 0..t {
            v[r * k + c] = constant;
        }
        let s = SeriesMatrix::new(t, k, v).unwrap();
        let scaled = Scaler::fit(&s).transform(&s, false).unwrap();
        violations += scaled.values().iter().filter(|x| !(0.0..=1.0).contains(*x)).count();
        violations += scaled.column(c).filter(|&x| x != 0.0).count();
    }
    check(violations == 0, "500 (T, l, h) draws, zero violations".into(), format!("{violations} violations"))
}

// ---------------------------------------------------------------- C5

fn smd_dir() -> PathBuf {
    std::env::var_os("CAD_SMD_DIR")
        .map(PathBuf::from)
        .unwrap_or_else(|| {
            let root = Path::new(env!("CARGO_MANIFEST_DIR")).ancestors().nth(2).unwrap();
            root.join("data").join("SMD")
        })
}

fn c5_smd() -> Outcome {
    let root = smd_dir();
    let paths = EntityPaths::resolve(&root, "machine-1-1");
    if !(paths.train.is_file() && paths.test.is_file() && paths.labels.is_file()) {
        return Err(format!(
            "{BLOCKED}SMD machine-1-1 not found under {} (set CAD_SMD_DIR); not evaluated",
            root.display()
        ));
    }
    let train = load_series(&paths.train).map_err(|e| e.to_string())?;
    let test = load_series(&paths.test).map_err(|e| e.to_string())?;
    let labels = load_labels(&paths.labels).map_err(|e| e.to_string())?;
    let mut f1s = Vec::new();
    for seed in 0..3 {
        let cfg = TrainConfig { seed, ..TrainConfig::smd() };
        let (ckpt, _) = train_entity(&cfg, &train, &|| 0.0, &mut |_| {}).map_err(|e| e.to_string())?;
        let scores = score_entity(&ckpt, &test).map_err(|e| e.to_string())?;
        f1s.push(best_f1(&scores.scores, &labels, Adjuster::Pa).map_err(|e| e.to_string())?.f1);
    }
    let m = median(f1s.clone());
    let detail = format!("PA best-F1 per seed {f1s:.4?}, median {m:.4} (need >= 0.95)");
    check(m >= 0.95, detail.clone(), detail)
}

// ---------------------------------------------------------------- C6

fn c6_conflict_ablation() -> Outcome {
    let mut full = Vec::new();
    let mut shared = Vec::new();
    for seed in 0..5u64 {
        let data = common::conflict_dataset(2000, seed);
        for (variant, out) in [(Variant::Full, &mut full), (Variant::NoGate, &mut shared)] {
            let cfg = TrainConfig { seed, variant, ..TrainConfig::smd() };
            let (ckpt, _) = train_entity(&cfg, &data.train, &|| 0.0, &mut |_| {}).map_err(|e| e.to_string())?;
            let scores = score_entity(&ckpt, &data.test).map_err(|e| e.to_string())?;
            out.push(best_f1(&scores.scores, &data.labels, Adjuster::Pa).map_err(|e| e.to_string())?.f1);
        }
    }
    let (mf, ms) = (median(full.clone()), median(shared.clone()));
    let detail = format!("median PA best-F1 full {mf:.4} vs no_gate {ms:.4} (full {full:.4?}, no_gate {shared:.4?})");
    check(mf >= ms, detail.clone(), detail)
}

// ---------------------------------------------------------------- C7

fn c7_f1_star() -> Outcome {
    let e = |p, r| Prf { precision: p, recall: r, f1: 2.0 * p * r / (p + r) };
    let agg = aggregate_entities(&[e(0.9524, 0.9914), e(0.9724, 0.9914)]).unwrap();
    let shown = format!("{:.4}", agg.f1_star);
    check(
        shown == "0.9767" && format!("{:.4}", agg.precision_mean) == "0.9624",
        format!("P=0.9624, R=0.9914 -> F1*={shown}"),
        format!("F1*={shown}, expected 0.9767"),
    )
}

// ---------------------------------------------------------------- C8

fn c8_persistence() -> Outcome {
    let data = common::conflict_dataset(600, 8);
    let cfg = TrainConfig { max_epochs: 2, normalize: true, clip_preprocessing: true, ..TrainConfig::smd() };
    let (ckpt, _) = train_entity(&cfg, &data.train, &|| 0.0, &mut |_| {}).map_err(|e| e.to_string())?;
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let path = dir.path().join("model.ckpt");
    ckpt.save(&path).map_err(|e| e.to_string())?;
    let loaded = Checkpoint::load(&path).map_err(|e| e.to_string())?;
    let a = score_entity(&ckpt, &data.test).map_err(|e| e.to_string())?;
    let b = score_entity(&loaded, &data.test).map_err(|e| e.to_string())?;
    let same = a.valid_from == b.valid_from
        && a.scores.iter().map(|x| x.to_bits()).eq(b.scores.iter().map(|x| x.to_bits()));

    let mut bytes = std::fs::read(&path).map_err(|e| e.to_string())?;
    bytes[..8].copy_from_slice(b"CADCKPT0");
    let corrupt = dir.path().join("corrupt.ckpt");
    std::fs::write(&corrupt, &bytes).map_err(|e| e.to_string())?;
    let rejected = Checkpoint::load(&corrupt).is_err();
    check(
        same && rejected,
        format!("{} scores bit-identical after reload; bad magic rejected", a.scores.len()),
        format!("bitwise identical: {same}, bad magic rejected: {rejected}"),
    )
}

// ---------------------------------------------------------------- C9

fn c9_determinism() -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let data = dir.path().join("data");
    for (name, seed) in [("a", 1), ("b", 2)] {
        let d = common::conflict_dataset(500, seed);
        std::fs::create_dir_all(data.join(name)).unwrap();
        std::fs::write(data.join(name).join("train.csv"), common::to_csv(&d.train)).unwrap();
    }
    let run = |out: &str| {
        Command::new(env!("CARGO_BIN_EXE_cad"))
            .args(["train", "--jobs", "2", "--set", "seed=7", "--set", "max_epochs=3", "--data-dir"])
            .arg(&data)
            .arg("--output-dir")
            .arg(dir.path().join(out))
            .output()
            .map_err(|e| e.to_string())
    };
    for out in ["run1", "run2"] {
        let o = run(out)?;
        if !o.status.success() {
            return Err(format!("train failed: {}", String::from_utf8_lossy(&o.stderr)));
        }
    }
    let mut compared = 0;
    for name in ["a", "b"] {
        for file in ["history.tsv", "model.ckpt"] {
            let x = std::fs::read(dir.path().join("run1").join(name).join(file)).map_err(|e| e.to_string())?;
            let y = std::fs::read(dir.path().join("run2").join(name).join(file)).map_err(|e| e.to_string())?;
            if x != y {
                return Err(format!("{name}/{file} differs between runs"));
            }
            compared += 1;
        }
    }
    Ok(format!("{compared} files byte-identical across two CLI runs"))
}

fn main() {
    let criteria: [Criterion; 9] = [
        ("C1 gradient correctness", c1_gradients),
        ("C2 best-F1 oracle equivalence", c2_best_f1),
        ("C3 point-adjust properties", c3_pa_properties),
        ("C4 windowing and scaling", c4_windows_scaling),
        ("C5 SMD machine-1-1 reproduction", c5_smd),
        ("C6 conflict ablation direction", c6_conflict_ablation),
        ("C7 F1* identity", c7_f1_star),
        ("C8 checkpoint persistence", c8_persistence),
        ("C9 CLI determinism", c9_determinism),
    ];
    let mut failed = 0;
    let mut blocked = 0;
    for (name, f) in criteria {
        let start = Instant::now();
        let outcome = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|p| {
            let msg = p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            Err(format!("panicked: {msg}"))
        });
        let secs = start.elapsed().as_secs_f64();
        match outcome {
            Ok(d) => println!("PASS  {name}: {d} [{secs:.1}s]"),
            Err(d) => {
                if d.starts_with(BLOCKED) {
                    blocked += 1;
                } else {
                    failed += 1;
                }
                println!("FAIL  {name}: {d} [{secs:.1}s]");
            }
        }
    }
    let strict = std::env::var_os("CAD_ACCEPTANCE_STRICT").is_some();
    println!(
        "acceptance: {} passed, {} failed ({blocked} blocked on missing data)",
        criteria.len() - failed - blocked,
        failed + blocked
    );
    if failed > 0 || (strict && blocked > 0) {
        std::process::exit(1);
    }
}
