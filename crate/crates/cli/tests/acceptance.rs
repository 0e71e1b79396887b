//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any criterion fails.

use std::path::Path;
use std::process::Command;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use spdhead::bench::{run_bench, BenchConfig, BenchResult};
use spdhead::descriptor::{gram_descriptor, DEFAULT_JITTER};
use spdhead::encoder::{inflate_kernel, patchify2d, patchify3d, project_patches, EncoderConfig};
use spdhead::gradcheck::{run_gradcheck, GradcheckConfig};
use spdhead::linalg::{sym_eig, Matrix, SymMatrix};
use spdhead::metrics::{auc_pr, auc_roc, fpr95, wilcoxon_signed_rank, wilcoxon_signed_rank_with, ScoredSet};
use spdhead::optim::{init_stiefel, stiefel_step};
use spdhead::report::{build_report, categorize, sphere_zone_fractions, ClinicalVars, Vocabulary, ZoneFractions};
use spdhead::spdnet::{GeometricHead, HeadConfig, HeadKind};
use spdhead::trainer::{gen_synth, infonce_loss, CaseFeatures, CaseInputs, SynthConfig};
use spdhead::volume::Volume;

type Outcome = Result<String, String>;

fn check(cond: bool, ok: impl Into<String>, fail: impl Into<String>) -> Outcome {
    if cond {
        Ok(ok.into())
    } else {
        Err(fail.into())
    }
}

fn random_symmetric(n: usize, rng: &mut ChaCha8Rng) -> SymMatrix {
    let a = Matrix::randn(n, n, 1.0, rng);
    SymMatrix::from_matrix(&a.add(&a.transpose()).scale(0.5)).unwrap()
}

fn c1_eigen() -> Outcome {
    let t = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut worst = 0.0f64;
    for _ in 0..500 {
        let n = rng.random_range(2..=128);
        let s = random_symmetric(n, &mut rng);
        let a = sym_eig(&s).map_err(|e| e.to_string())?;
        let b = sym_eig(&s).map_err(|e| e.to_string())?;
        let same = a.sigma.iter().zip(&b.sigma).all(|(x, y)| x.to_bits() == y.to_bits())
            && a.u.data().iter().zip(b.u.data()).all(|(x, y)| x.to_bits() == y.to_bits());
        if !same {
            return Err(format!("repeat decomposition of a {n}x{n} matrix differs"));
        }
        let err = s.as_matrix().sub(a.reconstruct().as_matrix()).frobenius_norm() / s.as_matrix().frobenius_norm();
        worst = worst.max(err);
    }
    let secs = t.elapsed().as_secs_f64();
    check(
        worst <= 1e-10 && secs < 30.0,
        format!("max reconstruction error {worst:.2e}, bit-identical repeats, {secs:.1}s"),
        format!("max reconstruction error {worst:.2e}, {secs:.1}s"),
    )
}

fn c2_gradcheck() -> Outcome {
    let t = Instant::now();
    let cfg = GradcheckConfig::default();
    let reports = run_gradcheck(&cfg).map_err(|e| e.to_string())?;
    let secs = t.elapsed().as_secs_f64();
    let worst = reports
        .iter()
        .max_by(|a, b| a.max_rel_err().total_cmp(&b.max_rel_err()))
        .unwrap();
    check(
        worst.max_rel_err() <= cfg.tolerance && secs < 120.0,
        format!("{} layers, worst {} {:.2e}, {secs:.1}s", reports.len(), worst.layer, worst.max_rel_err()),
        format!("worst {} {:.2e} (tolerance {:e}), {secs:.1}s", worst.layer, worst.max_rel_err(), cfg.tolerance),
    )
}

fn c3_stiefel() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut w = init_stiefel(48, 79, &mut rng).map_err(|e| e.to_string())?;
    let same = stiefel_step(&w, &Matrix::zeros(48, 79), 1e-2).map_err(|e| e.to_string())?;
    let id_err = same
        .matrix()
        .sub(w.matrix())
        .data()
        .iter()
        .fold(0.0f64, |m, v| m.max(v.abs()));
    let mut worst = 0.0f64;
    for _ in 0..10_000 {
        let g = Matrix::randn(48, 79, 1.0, &mut rng);
        w = stiefel_step(&w, &g, 1e-2).map_err(|e| e.to_string())?;
        worst = worst.max(w.matrix().row_orthonormality_error());
    }
    check(
        worst <= 1e-7 && id_err <= 1e-12,
        format!("max ||WW^T - I||_F {worst:.2e} over 10^4 steps, zero-gradient step moves {id_err:.1e}"),
        format!("max ||WW^T - I||_F {worst:.2e}, zero-gradient step moves {id_err:.1e}"),
    )
}

fn c4_spd_closure() -> Outcome {
    let cfg = HeadConfig::default();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut min_seen = f64::INFINITY;
    for i in 0..1000 {
        let m = Matrix::randn(79, 64, 1.0, &mut rng);
        let s0 = gram_descriptor(&m, DEFAULT_JITTER).map_err(|e| e.to_string())?;
        let head = GeometricHead::new(79, &cfg, &mut rng).map_err(|e| e.to_string())?;
        let (_, cache) = head
            .forward(&s0)
            .map_err(|e| format!("chain {i}: forward failed: {e}"))?;
        for out in cache.rectified_outputs() {
            let fresh = SymMatrix::from_matrix(out.as_matrix()).map_err(|e| e.to_string())?;
            let lo = sym_eig(&fresh).map_err(|e| e.to_string())?.min_eigenvalue();
            min_seen = min_seen.min(lo);
        }
    }
    check(
        min_seen >= cfg.eps - 1e-12,
        format!("1000 chains, min eigenvalue after ReEig {min_seen:.6e} (eps {:e}), LogEig never failed", cfg.eps),
        format!("min eigenvalue after ReEig {min_seen:.6e} < eps - 1e-12"),
    )
}

fn oracle_ap(s: &[f64], y: &[u8]) -> f64 {
    let p = y.iter().filter(|&&l| l == 1).count() as f64;
    let mut sum = 0.0;
    for (i, &si) in s.iter().enumerate() {
        if y[i] == 1 {
            let k = s.iter().filter(|&&v| v >= si).count() as f64;
            let tp = s.iter().zip(y).filter(|(&v, &l)| v >= si && l == 1).count() as f64;
            sum += tp / k;
        }
    }
    sum / p
}

fn oracle_roc(s: &[f64], y: &[u8]) -> f64 {
    let mut twice = 0u64;
    let (mut p, mut n) = (0u64, 0u64);
    for (i, &a) in s.iter().enumerate() {
        if y[i] != 1 {
            n += 1;
            continue;
        }
        p += 1;
        for (j, &b) in s.iter().enumerate() {
            if y[j] == 0 {
                twice += if a > b { 2 } else if a == b { 1 } else { 0 };
            }
        }
    }
    twice as f64 / (2 * p * n) as f64
}

fn oracle_fpr95(s: &[f64], y: &[u8]) -> f64 {
    let p = y.iter().filter(|&&l| l == 1).count();
    let n = y.len() - p;
    let mut best = 1.0f64;
    for &t in s {
        let tp = s.iter().zip(y).filter(|(&v, &l)| v >= t && l == 1).count();
        let fp = s.iter().zip(y).filter(|(&v, &l)| v >= t && l == 0).count();
        if 20 * tp >= 19 * p {
            best = best.min(fp as f64 / n as f64);
        }
    }
    best
}

/// `P(min(W+, W-) <= observed)` by enumerating all sign assignments.
fn oracle_wilcoxon(d: &[f64]) -> (f64, f64) {
    let d: Vec<f64> = d.iter().copied().filter(|v| *v != 0.0).collect();
    let n = d.len();
    // doubled average ranks
    let mut r2 = vec![0u64; n];
    for i in 0..n {
        let less = d.iter().filter(|v| v.abs() < d[i].abs()).count() as u64;
        let eq = d.iter().filter(|v| v.abs() == d[i].abs()).count() as u64;
        r2[i] = 2 * less + eq + 1;
    }
    let total: u64 = r2.iter().sum();
    let wp: u64 = (0..n).filter(|&i| d[i] > 0.0).map(|i| r2[i]).sum();
    let obs = wp.min(total - wp);
    let mut hits = 0u64;
    for mask in 0u64..(1 << n) {
        let w: u64 = (0..n).filter(|&i| mask >> i & 1 == 1).map(|i| r2[i]).sum();
        if w.min(total - w) <= obs {
            hits += 1;
        }
    }
    (obs as f64 / 2.0, hits as f64 / (1u64 << n) as f64)
}

fn c5_metric_oracles() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut worst = 0.0f64;
    for inst in 0..200 {
        let n = rng.random_range(2..=50);
        let tied = inst % 2 == 0;
        let s: Vec<f64> = (0..n)
            .map(|_| {
                let v: f64 = rng.random();
                if tied {
                    (v * 5.0).floor() / 5.0
                } else {
                    v
                }
            })
            .collect();
        let mut y: Vec<u8> = (0..n).map(|_| u8::from(rng.random_bool(0.4))).collect();
        y[0] = 1;
        y[1] = 0;
        let set = ScoredSet::new(s.clone(), y.clone()).map_err(|e| e.to_string())?;
        let ap = auc_pr(&set).map_err(|e| e.to_string())?;
        let roc = auc_roc(&set).map_err(|e| e.to_string())?;
        let fpr = fpr95(&set).map_err(|e| e.to_string())?;
        let (oap, oroc, ofpr) = (oracle_ap(&s, &y), oracle_roc(&s, &y), oracle_fpr95(&s, &y));
        worst = worst.max((ap - oap).abs());
        if roc != oroc || fpr != ofpr || (ap - oap).abs() > 1e-12 {
            return Err(format!(
                "instance {inst}: ap {ap} vs {oap}, roc {roc} vs {oroc}, fpr95 {fpr} vs {ofpr}"
            ));
        }
    }
    let mut worst_p = 0.0f64;
    for inst in 0..200 {
        let n = rng.random_range(5..=16);
        let d: Vec<f64> = (0..n)
            .map(|_| {
                let v: f64 = rng.random_range(-1.0..1.0);
                let v = if inst % 2 == 0 { (v * 10.0).round() / 10.0 } else { v };
                if v == 0.0 {
                    0.3
                } else {
                    v
                }
            })
            .collect();
        let zeros = vec![0.0; n];
        let w = wilcoxon_signed_rank(&d, &zeros).map_err(|e| format!("instance {inst}: {e}"))?;
        let (stat, p) = oracle_wilcoxon(&d);
        worst_p = worst_p.max((w.p_value - p).abs());
        if w.statistic != stat || (w.p_value - p).abs() > 1e-12 {
            return Err(format!("wilcoxon instance {inst}: ({}, {}) vs ({stat}, {p})", w.statistic, w.p_value));
        }
    }
    let mut worst_approx = 0.0f64;
    for _ in 0..50 {
        let d: Vec<f64> = (0..20).map(|_| rng.random_range(-1.0..1.0) + 0.1).collect();
        let zeros = vec![0.0; 20];
        let exact = wilcoxon_signed_rank(&d, &zeros).map_err(|e| e.to_string())?;
        let normal = wilcoxon_signed_rank_with(&d, &zeros, 0).map_err(|e| e.to_string())?;
        worst_approx = worst_approx.max((exact.p_value - normal.p_value).abs());
    }
    check(
        worst_approx <= 0.01,
        format!(
            "200 instances each: roc/fpr95 exact, ap within {worst:.1e}, wilcoxon p within {worst_p:.1e}; exact vs normal at n=20 within {worst_approx:.4}"
        ),
        format!("exact vs normal Wilcoxon at n=20 differ by {worst_approx:.4}"),
    )
}

fn c6_infonce() -> Outcome {
    let row = [0.5, 0.5, 0.5, 0.5];
    let same = Matrix::from_rows(&[&row, &row, &row, &row]);
    let uniform = infonce_loss(&same, &same, 0.07).map_err(|e| e.to_string())?.loss;
    let eye = Matrix::identity(4);
    let paired = infonce_loss(&eye, &eye, 0.01).map_err(|e| e.to_string())?.loss;
    check(
        (uniform - 4f64.ln()).abs() <= 1e-12 && paired <= 1e-3,
        format!("uniform batch {uniform:.15} (ln 4 = {:.15}), paired orthonormal at tau 0.01 {paired:.3e}", 4f64.ln()),
        format!("uniform batch {uniform}, paired {paired}"),
    )
}

fn c7_inflation() -> Outcome {
    let cfg = EncoderConfig {
        height: 32,
        width: 32,
        ..EncoderConfig::default()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut worst = 0.0f64;
    for _ in 0..100 {
        let slice: Vec<f64> = (0..cfg.height * cfg.width).map(|_| rng.random_range(-1.0..1.0)).collect();
        let vol = Volume::from_fn(cfg.height, cfg.width, cfg.depth, [0.5, 0.5, 3.0], |y, x, _| {
            slice[y * cfg.width + x]
        })
        .map_err(|e| e.to_string())?;
        let k2 = Matrix::randn(cfg.d, cfg.patch * cfg.patch, 1.0, &mut rng);
        let bias: Vec<f64> = (0..cfg.d).map(|_| rng.random_range(-1.0..1.0)).collect();
        let k3 = inflate_kernel(&k2, cfg.depth).map_err(|e| e.to_string())?;
        let z = rng.random_range(0..cfg.depth);
        let r3 = project_patches(&patchify3d(&vol, &cfg).map_err(|e| e.to_string())?, &k3, &bias);
        let r2 = project_patches(&patchify2d(&vol, &cfg, z).map_err(|e| e.to_string())?, &k2, &bias);
        worst = worst.max(r3.sub(&r2).data().iter().fold(0.0f64, |m, v| m.max(v.abs())));
    }
    check(
        worst <= 1e-12,
        format!("100 kernels/volumes, max |3D - 2D| {worst:.2e}"),
        format!("max |3D - 2D| {worst:.2e}"),
    )
}

fn c8_zones() -> Outcome {
    let sp = [0.5, 0.5, 3.0];
    let (h, w, d) = (100, 100, 16);
    // centroid between voxel centers in x so no center lies on the cut plane
    let c = [25.25, 25.0, 24.0];
    let grid = |f: &dyn Fn(f64, f64, f64) -> bool| {
        Volume::from_fn(h, w, d, sp, |y, x, z| {
            f64::from(u8::from(f(x as f64 * sp[0], y as f64 * sp[1], z as f64 * sp[2])))
        })
        .unwrap()
    };
    let none = grid(&|_, _, _| false);
    let all = grid(&|_, _, _| true);
    let half = grid(&|x, _, _| x < c[0]);
    let e = |r: spdhead::Result<ZoneFractions>| r.map_err(|e| e.to_string());
    let hs = e(sphere_zone_fractions(c, 15.0, &half, &none))?;
    let inside = e(sphere_zone_fractions(c, 15.0, &all, &none))?;
    let outside = e(sphere_zone_fractions(c, 15.0, &none, &none))?;
    // random three-way partition
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let labels: Vec<u8> = (0..h * w * d).map(|_| rng.random_range(0..3)).collect();
    let part = |k: u8| Volume::from_fn(h, w, d, sp, |y, x, z| f64::from(u8::from(labels[(y * w + x) * d + z] == k)));
    let (pz, cz) = (part(0).unwrap(), part(1).unwrap());
    let p = e(sphere_zone_fractions(c, 15.0, &pz, &cz))?;
    let sum_err = (p.p_pz + p.p_cz + p.p_out - 1.0).abs();
    let ok = (hs.p_pz - 0.5).abs() <= 0.02
        && (hs.p_out - 0.5).abs() <= 0.02
        && inside == ZoneFractions { p_pz: 1.0, p_cz: 0.0, p_out: 0.0 }
        && outside == ZoneFractions { p_pz: 0.0, p_cz: 0.0, p_out: 1.0 }
        && sum_err <= 1e-9;
    check(
        ok,
        format!(
            "half-space p_pz {:.4} p_out {:.4}, inside/outside exact, partition sum error {sum_err:.1e}",
            hs.p_pz, hs.p_out
        ),
        format!("half-space {hs:?}, inside {inside:?}, outside {outside:?}, partition sum error {sum_err:.1e}"),
    )
}

fn bench_at(rho: f64) -> Result<(BenchResult, f64), String> {
    let cases = gen_synth(&SynthConfig {
        rho,
        ..SynthConfig::default()
    })
    .map_err(|e| e.to_string())?;
    let t = Instant::now();
    let cfg = BenchConfig::default();
    let feats: Vec<CaseFeatures> = cases
        .iter()
        .map(|c| {
            let CaseInputs::Embeddings(e) = &c.inputs else {
                unreachable!("synthetic cases carry embeddings")
            };
            CaseFeatures::from_embeddings(&c.id, c.label, c.subtag, e, cfg.train.multimodal, cfg.train.head.jitter)
        })
        .collect::<Result<_, _>>()
        .map_err(|e| e.to_string())?;
    let folds: Vec<usize> = cases.iter().map(|c| c.fold.unwrap()).collect();
    let r = run_bench(&feats, &folds, &cfg, |_| {}).map_err(|e| e.to_string())?;
    Ok((r, t.elapsed().as_secs_f64()))
}

fn ap(r: &BenchResult, f: f64, h: HeadKind) -> f64 {
    r.pooled_for(f, h).and_then(|p| p.metrics.auc_pr).unwrap_or(f64::NAN)
}

fn c9_bench() -> Outcome {
    let (r, secs) = bench_at(0.8)?;
    let fractions = BenchConfig::default().fractions;
    let mut table = Vec::new();
    for &f in &fractions {
        table.push(format!(
            "f={f}: geom {:.4} cls {:.4} gap {:.4}",
            ap(&r, f, HeadKind::Geom),
            ap(&r, f, HeadKind::Cls),
            ap(&r, f, HeadKind::Gap)
        ));
    }
    println!("  rho=0.8 pooled AUC-PR ({secs:.0}s): {}", table.join("; "));
    let margin = ap(&r, 0.1, HeadKind::Geom) - ap(&r, 0.1, HeadKind::Cls);
    let p = r
        .pooled_for(0.1, HeadKind::Cls)
        .and_then(|p| p.comparison.as_ref())
        .map_or(f64::NAN, |c| c.result.p_value);
    let a = margin >= 0.05 && p < 0.05;
    let b = fractions
        .iter()
        .all(|&f| ap(&r, f, HeadKind::Geom) >= ap(&r, f, HeadKind::Gap));
    let fast = secs < 600.0;

    let (r0, secs0) = bench_at(0.0)?;
    let mut worst0 = 0.0f64;
    for &f in &fractions {
        for h in [HeadKind::Geom, HeadKind::Cls, HeadKind::Gap] {
            worst0 = worst0.max((ap(&r0, f, h) - r0.prevalence).abs());
        }
    }
    println!(
        "  rho=0 ({secs0:.0}s): max |AUC-PR - prevalence| {worst0:.4} (prevalence {:.4})",
        r0.prevalence
    );
    let c = worst0 <= 0.05;
    let summary = format!(
        "(a) geom - cls at 0.1 = {margin:.4}, Wilcoxon p {p:.2e}: {}; (b) geom >= gap at every fraction: {}; (c) rho=0 max deviation {worst0:.4}: {}; runtime {secs:.0}s: {}",
        pf(a),
        pf(b),
        pf(c),
        pf(fast)
    );
    check(a && b && c && fast, summary.clone(), summary)
}

fn pf(b: bool) -> &'static str {
    if b {
        "pass"
    } else {
        "FAIL"
    }
}

fn run_cli(args: &[&str]) -> Result<(), String> {
    let out = Command::new(env!("CARGO_BIN_EXE_spdhead"))
        .args(args)
        .env_remove("SPDG_SEED")
        .output()
        .map_err(|e| e.to_string())?;
    if out.status.success() {
        Ok(())
    } else {
        Err(format!("spdhead {}: {}", args[0], String::from_utf8_lossy(&out.stderr).trim()))
    }
}

fn c10_determinism() -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let p = |name: &str| dir.path().join(name).to_string_lossy().into_owned();
    std::fs::write(p("synth.json"), r#"{"n_cases": 80}"#).map_err(|e| e.to_string())?;
    std::fs::write(p("train.json"), r#"{"epochs": 3}"#).map_err(|e| e.to_string())?;
    run_cli(&["gen-synth", "--config", &p("synth.json"), "--out", &p("ds")])?;
    let manifest = p("ds/manifest.jsonl");
    let mut bytes = Vec::new();
    for run in ["a", "b"] {
        let ckpt = p(&format!("{run}.ckpt"));
        let metrics = p(&format!("{run}.json"));
        run_cli(&[
            "train", "--manifest", &manifest, "--head", "geom", "--config", &p("train.json"), "--fold", "1",
            "--seed", "11", "--out", &ckpt,
        ])?;
        run_cli(&["eval", "--manifest", &manifest, "--ckpt", &ckpt, "--out", &metrics])?;
        let read = |s: &str| std::fs::read(Path::new(s)).map_err(|e| e.to_string());
        bytes.push((read(&ckpt)?, read(&metrics)?));
    }
    check(
        bytes[0] == bytes[1],
        format!(
            "two train runs give identical {}-byte checkpoints and identical metrics JSON",
            bytes[0].0.len()
        ),
        "repeat runs differ",
    )
}

fn c11_report() -> Outcome {
    let vars = ClinicalVars {
        age: Some(55.0),
        psa: Some(25.0),
        psad: Some(0.12),
        pv: Some(40.0),
    };
    let tokens: Vec<&str> = [("age", 55.0), ("psa", 25.0), ("psad", 0.12), ("pv", 40.0)]
        .iter()
        .map(|&(v, x)| categorize(v, Some(x)).unwrap())
        .collect();
    let expected = ["intermediate", "high", "intermediate", "intermediate"];
    let zf = ZoneFractions {
        p_pz: 0.6,
        p_cz: 0.3,
        p_out: 0.1,
    };
    let text = build_report(&vars, &zf);
    let vocab = Vocabulary::default();
    let ids = vocab.tokenize(&text);
    let back = vocab.detokenize(&ids).map_err(|e| e.to_string())?;
    let phrases = [
        "intermediate age",
        "high psa",
        "intermediate psa density",
        "intermediate prostate volume",
    ];
    let has_phrases = phrases.iter().all(|ph| text.contains(ph));
    check(
        tokens == expected && has_phrases && back == text && ids.len() <= 32 && !ids.contains(&vocab.unknown_id()),
        format!("categories {tokens:?}, {} token IDs, round-trip exact", ids.len()),
        format!("categories {tokens:?}, text `{text}`, round-trip `{back}`"),
    )
}

fn main() {
    let criteria: [(&str, fn() -> Outcome); 11] = [
        ("1 eigendecomposition", c1_eigen),
        ("2 gradient suite", c2_gradcheck),
        ("3 manifold preservation", c3_stiefel),
        ("4 SPD closure", c4_spd_closure),
        ("5 metric oracles", c5_metric_oracles),
        ("6 InfoNCE anchors", c6_infonce),
        ("7 weight inflation", c7_inflation),
        ("8 zone geometry", c8_zones),
        ("9 synthetic benchmark", c9_bench),
        ("10 determinism", c10_determinism),
        ("11 report pipeline", c11_report),
    ];
    let filter = std::env::args().skip(1).find(|a| !a.starts_with('-'));
    let mut failed = 0;
    for (name, f) in criteria {
        if filter.as_deref().is_some_and(|s| !name.contains(s)) {
            continue;
        }
        let t = Instant::now();
        let outcome = f();
        let secs = t.elapsed().as_secs_f64();
        match outcome {
            Ok(msg) => println!("PASS criterion {name}: {msg} [{secs:.1}s]"),
            Err(msg) => {
                failed += 1;
                println!("FAIL criterion {name}: {msg} [{secs:.1}s]");
            }
        }
    }
    if failed > 0 {
        println!("{failed} acceptance criteria failed");
        std::process::exit(1);
    }
}
