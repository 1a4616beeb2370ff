//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! nonzero if any hard criterion fails. Criterion 11 is reported but not
//! fatal.

use std::path::{Path, PathBuf};
use std::process::Output;
use std::time::{Duration, Instant};

use hdmba::cube::{default_wavelengths, HsiCube};
use hdmba::haze::{derive_seed, Manifest};
use hdmba::metrics::{psnr, sam, ssim, uqi, MetricConfig};
use hdmba::network::{loss, Ablation, DehazeModel, ModelConfig, PAPER_PARAM_TARGET};
use hdmba::ssm::scan;
use hdmba::wssm::{window_partition, window_reverse};
use hdmba::Tensor;
use serde_json::Value;
use sha2::{Digest, Sha256};

const GRAD_H: f64 = 1e-4;
const GRAD_TOL: f64 = 1e-3;
const GRAD_BUDGET: Duration = Duration::from_secs(120);
const SCAN_TOL: f64 = 1e-10;
const SCAN_CASES: u64 = 100;
const METRIC_TOL: f64 = 1e-9;
const OVERFIT_STEPS: &str = "500";
const OVERFIT_RATIO: f64 = 0.10;
const OVERFIT_GAIN_DB: f64 = 3.0;
const OVERFIT_BUDGET: Duration = Duration::from_secs(15 * 60);
const SMOOTH: usize = 50;
const CALIBRATION_BAND: f64 = 0.15;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> anyhow::Result<Outcome> {
    Ok(Outcome { pass, detail: detail.into() })
}

struct Suite {
    hard_failures: usize,
}

impl Suite {
    fn run(&mut self, id: &str, name: &str, soft: bool, f: impl FnOnce() -> anyhow::Result<Outcome>) {
        let t0 = Instant::now();
        let res = std::panic::catch_unwind(std::panic::AssertUnwindSafe(f));
        let (pass, detail) = match res {
            Ok(Ok(o)) => (o.pass, o.detail),
            Ok(Err(e)) => (false, format!("error: {e:#}")),
            Err(_) => (false, "panicked".into()),
        };
        if !pass && !soft {
            self.hard_failures += 1;
        }
        let tag = match (pass, soft) {
            (true, _) => "PASS",
            (false, false) => "FAIL",
            (false, true) => "FAIL (soft)",
        };
        println!("{tag} [{id}] {name}: {detail} ({:.1}s)", t0.elapsed().as_secs_f64());
    }
}

/// Deterministic uniform draws in `[lo, hi)`.
fn uniform(seed: u64, n: usize, lo: f64, hi: f64) -> Vec<f64> {
    (0..n).map(|i| lo + (hi - lo) * (derive_seed(seed, i as u64) >> 11) as f64 / (1u64 << 53) as f64).collect()
}

fn hdmba(args: &[&str]) -> Output {
    std::process::Command::new(env!("CARGO_BIN_EXE_hdmba"))
        .args(args)
        .env("HDMBA_DETERMINISTIC", "1")
        .output()
        .expect("binary runs")
}

fn cli(args: &[&str]) -> anyhow::Result<Value> {
    let out = hdmba(args);
    if !out.status.success() {
        anyhow::bail!("{args:?} exited {:?}: {}", out.status.code(), String::from_utf8_lossy(&out.stderr).trim());
    }
    Ok(serde_json::from_slice(&out.stdout)?)
}

fn s(p: &Path) -> &str {
    p.to_str().expect("utf-8 path")
}

fn sha256_file(p: &Path) -> anyhow::Result<String> {
    Ok(Sha256::digest(std::fs::read(p)?).iter().map(|b| format!("{b:02x}")).collect())
}

fn tree_hash(root: &Path) -> anyhow::Result<String> {
    let mut files = Vec::new();
    for sub in ["", "clean", "hazy"] {
        for e in std::fs::read_dir(root.join(sub))? {
            let p = e?.path();
            if p.is_file() {
                files.push(p);
            }
        }
    }
    files.sort();
    let mut h = Sha256::new();
    for f in files {
        h.update(f.strip_prefix(root)?.to_string_lossy().as_bytes());
        h.update(std::fs::read(&f)?);
    }
    Ok(h.finalize().iter().map(|b| format!("{b:02x}")).collect())
}

/// Four 32x32x16 pairs: four scenes under one haze condition.
fn smoke_dataset(dir: &Path, seed: &str) -> anyhow::Result<PathBuf> {
    let d = dir.join(format!("smoke_{seed}"));
    cli(&[
        "synthesize", "--out", s(&d), "--scenes", "4", "--size", "32", "--bands", "16", "--thickness-levels", "1", "--abundances", "1",
        "--abundance-values", "0.24", "--test-fraction", "0", "--seed", seed,
    ])?;
    Ok(d)
}

fn train_tiny(data: &Path, out: &Path, extra: &[&str]) -> anyhow::Result<Value> {
    let mut args = vec!["train", "--data", s(data), "--out", s(out), "--preset", "tiny", "--crop", "32", "--checkpoint-every", "0"];
    args.extend_from_slice(extra);
    cli(&args)
}

fn read_losses(run: &Path) -> anyhow::Result<Vec<f64>> {
    let text = std::fs::read_to_string(run.join("loss.csv"))?;
    text.lines().skip(1).map(|l| Ok(l.rsplit(',').next().unwrap_or_default().parse::<f64>()?)).collect()
}

fn gradient_check() -> anyhow::Result<Outcome> {
    let t0 = Instant::now();
    let mut model = DehazeModel::<f64>::new(ModelConfig::tiny(4), 1)?;
    // Nonzero output conv so every upstream parameter carries gradient.
    for (k, name) in ["tail.1.weight", "tail.1.bias"].into_iter().enumerate() {
        let id = model.params.id_of(name).expect("tail parameter");
        let n = model.params.get(id).numel();
        model.params.set_data(id, uniform(100 + k as u64, n, -0.3, 0.3))?;
    }
    let x = Tensor::from_vec(&[1, 8, 8, 4], uniform(1, 256, 0.0, 1.0))?;
    let t = Tensor::from_vec(&[1, 8, 8, 4], uniform(2, 256, 0.0, 1.0))?;
    let eval = |m: &DehazeModel<f64>| -> anyhow::Result<f64> { Ok(m.loss(&m.forward(&x)?, &t)?.item()?) };
    model.params.zero_grads();
    model.loss(&model.forward(&x)?, &t)?.backward()?;
    let (mut worst, mut at, mut count) = (0.0f64, String::new(), 0usize);
    for id in model.params.ids().collect::<Vec<_>>() {
        let g = model.params.get(id).grad().expect("gradient");
        let base = model.params.get(id).to_vec();
        for j in 0..base.len() {
            let mut p = base.clone();
            p[j] += GRAD_H;
            model.params.set_data(id, p.clone())?;
            let fp = eval(&model)?;
            p[j] -= 2.0 * GRAD_H;
            model.params.set_data(id, p)?;
            let fm = eval(&model)?;
            let num = (fp - fm) / (2.0 * GRAD_H);
            let rel = (g[j] - num).abs() / g[j].abs().max(num.abs()).max(1e-6);
            if rel > worst {
                worst = rel;
                at = format!("{}[{j}]", model.params.param(id).name);
            }
            count += 1;
        }
        model.params.set_data(id, base)?;
    }
    let elapsed = t0.elapsed();
    outcome(
        worst < GRAD_TOL && elapsed < GRAD_BUDGET,
        format!("max rel err {worst:.2e} at {at} over {count} params (tol {GRAD_TOL:e}, h {GRAD_H:e}), {:.1}s of {}s", elapsed.as_secs_f64(), GRAD_BUDGET.as_secs()),
    )
}

fn scan_oracle() -> anyhow::Result<Outcome> {
    let mut worst = 0.0f64;
    for case in 0..SCAN_CASES {
        let dims = uniform(case, 4, 0.0, 1.0);
        let (l, d, n) = (1 + (dims[0] * 32.0) as usize, 1 + (dims[1] * 6.0) as usize, 1 + (dims[2] * 8.0) as usize);
        let r = |k: u64, len: usize, lo: f64, hi: f64| uniform(derive_seed(case, k), len, lo, hi);
        let (u, dt, a_log, b, c, skip) = (r(1, l * d, -1.0, 1.0), r(2, l * d, 0.01, 1.0), r(3, d * n, -1.0, 1.5), r(4, l * n, -1.0, 1.0), r(5, l * n, -1.0, 1.0), r(6, d, -1.0, 1.0));
        let t = |shape: &[usize], v: &[f64]| Tensor::from_vec(shape, v.to_vec());
        let y = scan(&t(&[l, d], &u)?, &t(&[l, d], &dt)?, &t(&[d, n], &a_log)?, &t(&[l, n], &b)?, &t(&[l, n], &c)?, &t(&[d], &skip)?)?;
        for ch in 0..d {
            let mut h = vec![0.0; n];
            for step in 0..l {
                let (x, delta) = (u[step * d + ch], dt[step * d + ch]);
                let mut want = skip[ch] * x;
                for k in 0..n {
                    let a = -a_log[ch * n + k].exp();
                    h[k] = (delta * a).exp() * h[k] + delta * b[step * n + k] * x;
                    want += c[step * n + k] * h[k];
                }
                worst = worst.max((y.data()[step * d + ch] - want).abs());
            }
        }
    }
    outcome(worst <= SCAN_TOL, format!("{SCAN_CASES} instances, L <= 32, max abs diff {worst:.2e} (tol {SCAN_TOL:e})"))
}

fn partition_grid() -> anyhow::Result<Outcome> {
    let mut cases = 0;
    for m in [1usize, 2, 4, 8, 16] {
        for h in [m, 2 * m, 3 * m, 5] {
            for w in [m, 2 * m, 3 * m, 5] {
                let z = Tensor::<f64>::from_vec(&[2, h, w, 3], uniform((m * 1000 + h * 31 + w) as u64, 2 * h * w * 3, -1.0, 1.0))?;
                let back = window_reverse(&window_partition(&z, m)?)?;
                if back.shape() != z.shape() || back.data().iter().zip(z.data()).any(|(a, b)| a.to_bits() != b.to_bits()) {
                    return outcome(false, format!("mismatch at M={m}, H={h}, W={w}"));
                }
                cases += 1;
            }
        }
    }
    outcome(true, format!("{cases} (M, H, W) cases bitwise identical"))
}

fn identity_at_init(dir: &Path) -> anyhow::Result<Outcome> {
    let data = dir.join("id_data");
    cli(&["synthesize", "--out", s(&data), "--scenes", "1", "--size", "16", "--bands", "8", "--thickness-levels", "1", "--abundances", "1"])?;
    let run = dir.join("id_run");
    cli(&["train", "--data", s(&data), "--out", s(&run), "--preset", "tiny", "--iterations", "0", "--crop", "16"])?;
    let cube = HsiCube::new(64, 64, default_wavelengths(8), uniform(77, 64 * 64 * 8, 0.0, 1.0).into_iter().map(|v| v as f32).collect())?;
    let (input, output) = (dir.join("random.hsc"), dir.join("random_out.hsc"));
    cube.write(&input)?;
    cli(&["dehaze", "--checkpoint", s(&run.join("last.bin")), "--input", s(&input), "--output", s(&output)])?;
    let same = std::fs::read(&input)? == std::fs::read(&output)?;
    outcome(same, format!("64x64x8 random cube, output {} input bitwise", if same { "equals" } else { "differs from" }))
}

fn overfit(dir: &Path) -> anyhow::Result<Vec<(String, Outcome)>> {
    let data = smoke_dataset(dir, "0")?;
    let run = dir.join("overfit");
    let t0 = Instant::now();
    train_tiny(&data, &run, &["--iterations", OVERFIT_STEPS, "--lr", "1e-4", "--batch", "4"])?;
    let elapsed = t0.elapsed();
    let losses = read_losses(&run)?;
    let initial = losses[0];
    let windows: Vec<f64> = losses.chunks(SMOOTH).map(|w| w.iter().sum::<f64>() / w.len() as f64).collect();
    let final_smoothed = *windows.last().expect("losses");
    let ratio = final_smoothed / initial;

    let model = hdmba::checkpoint::load::<f32>(run.join("last.bin"))?.model;
    let manifest = Manifest::read(&data)?;
    let mut gains = Vec::new();
    for p in &manifest.pairs {
        let clean = HsiCube::read(manifest.resolve(&p.clean_path))?;
        let hazy = HsiCube::read(manifest.resolve(&p.hazy_path))?;
        let dehazed = model.dehaze_cube(&hazy, 0)?;
        gains.push(psnr(&clean, &dehazed, 1.0)? - psnr(&clean, &hazy, 1.0)?);
    }
    let min_gain = gains.iter().copied().fold(f64::INFINITY, f64::min);
    let increases = windows.windows(2).filter(|w| w[1] > w[0]).count();
    Ok(vec![
        (
            "5a".into(),
            Outcome {
                pass: ratio < OVERFIT_RATIO,
                detail: format!(
                    "final {SMOOTH}-step mean loss {final_smoothed:.3e} / first-step loss {initial:.3e} = {ratio:.3} (need < {OVERFIT_RATIO})"
                ),
            },
        ),
        (
            "5b".into(),
            Outcome {
                pass: min_gain >= OVERFIT_GAIN_DB,
                detail: format!(
                    "PSNR gain per training pair {} dB (need >= {OVERFIT_GAIN_DB})",
                    gains.iter().map(|g| format!("{g:.2}")).collect::<Vec<_>>().join(", ")
                ),
            },
        ),
        (
            "5c".into(),
            Outcome {
                pass: increases == 0,
                detail: format!("{SMOOTH}-step window means non-increasing: {increases} increases over {} windows", windows.len()),
            },
        ),
        (
            "5d".into(),
            Outcome {
                pass: elapsed < OVERFIT_BUDGET,
                detail: format!("{OVERFIT_STEPS} steps in {:.1}s (budget {}s)", elapsed.as_secs_f64(), OVERFIT_BUDGET.as_secs()),
            },
        ),
    ])
}

fn loss_spot() -> anyhow::Result<Outcome> {
    let y = Tensor::<f64>::from_vec(&[2, 3, 3, 2], uniform(5, 36, -1.0, 1.0))?;
    let t = Tensor::from_vec(&[2, 3, 3, 2], y.data().iter().map(|v| v - 1.0).collect())?;
    // Residuals of exactly 1 need exact arithmetic; use integer-valued inputs.
    let yi = Tensor::<f64>::from_vec(&[4, 4], (0..16).map(|i| i as f64).collect())?;
    let ti = Tensor::from_vec(&[4, 4], (0..16).map(|i| i as f64 - 1.0).collect())?;
    let exact = loss(&yi, &ti, 1.0, 0.1)?.item()?;
    let approx = loss(&y, &t, 1.0, 0.1)?.item()?;
    outcome(exact == 1.1 && (approx - 1.1).abs() < 1e-12, format!("loss {exact} (integer inputs), {approx:.15} (random inputs); want 1.1"))
}

fn rand_cube(seed: u64, w: usize, h: usize, b: usize) -> anyhow::Result<HsiCube> {
    Ok(HsiCube::new(w, h, default_wavelengths(b), uniform(seed, w * h * b, 0.05, 1.0).into_iter().map(|v| v as f32).collect())?)
}

fn naive_metrics(a: &HsiCube, b: &HsiCube) -> (f64, f64, f64, f64) {
    let px = |c: &HsiCube, k, y, x| c.get(k, y, x) as f64;
    let (h, w, bands) = (a.height, a.width, a.bands);
    let mse = a.data.iter().zip(&b.data).map(|(p, q)| (*p as f64 - *q as f64).powi(2)).sum::<f64>() / a.data.len() as f64;
    let psnr = 10.0 * (1.0 / mse).log10();
    let cfg = MetricConfig::default();
    let n = cfg.ssim_window;
    let c = (n as f64 - 1.0) / 2.0;
    let mut g: Vec<f64> = (0..n * n)
        .map(|i| (-(((i / n) as f64 - c).powi(2) + ((i % n) as f64 - c).powi(2)) / (2.0 * cfg.ssim_sigma.powi(2))).exp())
        .collect();
    let gs: f64 = g.iter().sum();
    g.iter_mut().for_each(|v| *v /= gs);
    let (c1, c2) = ((cfg.k1 * cfg.peak).powi(2), (cfg.k2 * cfg.peak).powi(2));
    // Weighted (SSIM) or flat (UQI) window statistics.
    let stats = |k, y0, x0, side: usize, wts: &dyn Fn(usize) -> f64| {
        let (mut mx, mut my) = (0.0, 0.0);
        for i in 0..side * side {
            mx += wts(i) * px(a, k, y0 + i / side, x0 + i % side);
            my += wts(i) * px(b, k, y0 + i / side, x0 + i % side);
        }
        let (mut vx, mut vy, mut cxy) = (0.0, 0.0, 0.0);
        for i in 0..side * side {
            let (dx, dy) = (px(a, k, y0 + i / side, x0 + i % side) - mx, px(b, k, y0 + i / side, x0 + i % side) - my);
            vx += wts(i) * dx * dx;
            vy += wts(i) * dy * dy;
            cxy += wts(i) * dx * dy;
        }
        (mx, my, vx, vy, cxy)
    };
    let (mut ssim_sum, mut uqi_sum) = (0.0, 0.0);
    for k in 0..bands {
        let (mut acc, mut cnt) = (0.0, 0.0);
        for y0 in 0..=h - n {
            for x0 in 0..=w - n {
                let (mx, my, vx, vy, cxy) = stats(k, y0, x0, n, &|i| g[i]);
                acc += (2.0 * mx * my + c1) * (2.0 * cxy + c2) / ((mx * mx + my * my + c1) * (vx + vy + c2));
                cnt += 1.0;
            }
        }
        ssim_sum += acc / cnt;
        let blk = cfg.uqi_block;
        let (mut acc, mut cnt) = (0.0, 0.0);
        for y0 in 0..=h - blk {
            for x0 in 0..=w - blk {
                let (mx, my, vx, vy, cxy) = stats(k, y0, x0, blk, &|_| 1.0 / (blk * blk) as f64);
                acc += 4.0 * cxy * mx * my / ((vx + vy) * (mx * mx + my * my));
                cnt += 1.0;
            }
        }
        uqi_sum += acc / cnt;
    }
    let mut sam_sum = 0.0;
    for y in 0..h {
        for x in 0..w {
            let (mut d, mut na, mut nb) = (0.0, 0.0, 0.0);
            for k in 0..bands {
                let (p, q) = (px(a, k, y, x), px(b, k, y, x));
                d += p * q;
                na += p * p;
                nb += q * q;
            }
            sam_sum += (d / (na * nb).sqrt()).clamp(-1.0, 1.0).acos();
        }
    }
    (ssim_sum / bands as f64, psnr, uqi_sum / bands as f64, sam_sum / (h * w) as f64)
}

fn metric_identities() -> anyhow::Result<Outcome> {
    let cfg = MetricConfig::default();
    let a = rand_cube(1, 16, 16, 4)?;
    let mut notes = Vec::new();
    let mut pass = true;
    let mut check = |ok: bool, note: String| {
        pass &= ok;
        notes.push(note);
    };
    let (s_id, u_id, a_id) = (ssim(&a, &a, &cfg)?, uqi(&a, &a, cfg.uqi_block)?, sam(&a, &a)?);
    check((s_id - 1.0).abs() < 1e-12 && (u_id - 1.0).abs() < 1e-12 && a_id.abs() < 1e-12, format!("identical: SSIM {s_id}, UQI {u_id}, SAM {a_id:.1e}"));
    let mut scaled = a.clone();
    scaled.data.iter_mut().for_each(|v| *v *= 3.0);
    let sc = sam(&a, &scaled)?;
    check(sc.abs() < 1e-6, format!("SAM(s, 3s) {sc:.1e}"));
    // Every voxel off by 0.1: MSE = 0.01 up to f32 rounding.
    let flat = HsiCube::new(4, 4, default_wavelengths(2), vec![0.25; 32])?;
    let off = HsiCube::new(4, 4, default_wavelengths(2), vec![0.75; 32])?;
    let p = psnr(&flat, &off, 5.0)?;
    check((p - 20.0).abs() < 1e-9, format!("PSNR at MSE 0.01 (peak 1 scale) {p:.12} dB"));
    let mut worst = 0.0f64;
    for seed in 0..3 {
        let b = {
            let mut b = a.clone();
            b.data.iter_mut().zip(uniform(50 + seed, a.data.len(), -0.2, 0.2)).for_each(|(v, n)| *v += n as f32);
            b
        };
        let (ns, np, nu, na) = naive_metrics(&a, &b);
        for (got, want) in [(ssim(&a, &b, &cfg)?, ns), (psnr(&a, &b, 1.0)?, np), (uqi(&a, &b, cfg.uqi_block)?, nu), (sam(&a, &b)?, na)] {
            worst = worst.max((got - want).abs());
        }
    }
    check(worst <= METRIC_TOL, format!("naive oracles max diff {worst:.1e} (tol {METRIC_TOL:e})"));
    outcome(pass, notes.join("; "))
}

fn ablations(dir: &Path) -> anyhow::Result<Outcome> {
    let data = smoke_dataset(dir, "1")?;
    let flags = ["--ablate=no-ssm,no-dconv,no-gate --mlp", "--ablate=no-dconv,no-gate,no-mlp", "--ablate=no-gate,no-mlp", "--ablate=no-mlp", ""];
    let mut counts = Vec::new();
    for ((name, ab), f) in Ablation::table_rows().into_iter().zip(flags) {
        let run = dir.join(format!("ablate_{}", name.replace('+', "_")));
        let mut extra = vec!["--iterations", "1"];
        extra.extend(f.split_whitespace());
        let v = train_tiny(&data, &run, &extra)?;
        anyhow::ensure!(v["steps"] == 1, "{name} did not step");
        let paper = ModelConfig { ablation: ab, ..ModelConfig::paper() };
        counts.push((name, paper.parameter_count()));
    }
    let increasing = counts[1..].windows(2).all(|w| w[0].1 < w[1].1);
    let listing: Vec<String> = counts.iter().map(|(n, c)| format!("{n} {:.3}M", *c as f64 / 1e6)).collect();
    outcome(increasing, format!("all five built and stepped; full-size counts {}", listing.join(", ")))
}

fn window_sweep(dir: &Path) -> anyhow::Result<Outcome> {
    let data = smoke_dataset(dir, "2")?;
    let mut done = Vec::new();
    for m in ["2", "4", "8", "16"] {
        let v = train_tiny(&data, &dir.join(format!("window_{m}")), &["--iterations", "50", "--window", m])?;
        anyhow::ensure!(v["steps"] == 50, "M={m} stopped early");
        done.push(format!("M={m} loss {:.3e}", v["last_loss"].as_f64().unwrap_or(f64::NAN)));
    }
    outcome(true, done.join(", "))
}

fn determinism(dir: &Path) -> anyhow::Result<Outcome> {
    let (a, b) = (dir.join("det_a"), dir.join("det_b"));
    for d in [&a, &b] {
        cli(&["synthesize", "--out", s(d), "--scenes", "3", "--size", "32", "--bands", "8", "--thickness-levels", "2", "--abundances", "2", "--seed", "11"])?;
    }
    let same_data = tree_hash(&a)? == tree_hash(&b)?;
    let common = ["--iterations", "200", "--batch", "2", "--lr", "1e-3", "--seed", "5"];
    let (r1, r2) = (dir.join("det_run1"), dir.join("det_run2"));
    train_tiny(&a, &r1, &common)?;
    train_tiny(&b, &r2, &common)?;
    let same_first = read_losses(&r1)?[0].to_bits() == read_losses(&r2)?[0].to_bits();
    let h1 = sha256_file(&r1.join("last.bin"))?;
    let same_ckpt = h1 == sha256_file(&r2.join("last.bin"))?;
    let half = dir.join("det_half");
    let mut first = common.to_vec();
    first.extend(["--stop-at", "100"]);
    train_tiny(&a, &half, &first)?;
    let rest = dir.join("det_rest");
    cli(&["train", "--resume", s(&half.join("last.bin")), "--data", s(&a), "--out", s(&rest)])?;
    let resumed = h1 == sha256_file(&rest.join("last.bin"))?;
    outcome(
        same_data && same_first && same_ckpt && resumed,
        format!("dataset hashes equal: {same_data}; first loss equal: {same_first}; checkpoint sha256 equal: {same_ckpt} ({}..); 100+100 == 200: {resumed}", &h1[..12]),
    )
}

fn calibration() -> anyhow::Result<Outcome> {
    let v = cli(&["params", "--preset", "paper"])?;
    let total = v["total"].as_u64().unwrap_or(0) as f64;
    let target = PAPER_PARAM_TARGET as f64;
    let dev = (total - target) / target;
    outcome(
        dev.abs() <= CALIBRATION_BAND,
        format!("C = {}, total {total} ({:+.2}% vs 4.60M, band +-{:.0}%)", v["model"]["channels"], 100.0 * dev, 100.0 * CALIBRATION_BAND),
    )
}

fn main() {
    std::env::set_var("HDMBA_DETERMINISTIC", "1");
    hdmba::tensor::deterministic_from_env();
    let dir = tempfile::tempdir().expect("temp dir");
    let dir = dir.path();
    let mut suite = Suite { hard_failures: 0 };
    println!("acceptance: 11 criteria");
    suite.run("1", "gradient correctness", false, gradient_check);
    suite.run("2", "scan oracle", false, scan_oracle);
    suite.run("3", "partition roundtrip", false, partition_grid);
    suite.run("4", "identity at init", false, || identity_at_init(dir));
    match overfit(dir) {
        Ok(parts) => {
            for (id, o) in parts {
                suite.run(&id, "overfit smoke", false, || Ok(o));
            }
        }
        Err(e) => suite.run("5", "overfit smoke", false, || Err(e)),
    }
    suite.run("6", "loss spot value", false, loss_spot);
    suite.run("7", "metric identities", false, metric_identities);
    suite.run("8", "ablation structure", false, || ablations(dir));
    suite.run("9", "window sweep", false, || window_sweep(dir));
    suite.run("10", "determinism", false, || determinism(dir));
    suite.run("11", "parameter calibration", true, calibration);
    if suite.hard_failures > 0 {
        println!("acceptance: {} hard criteria failed", suite.hard_failures);
        std::process::exit(1);
    }
    println!("acceptance: all hard criteria passed");
}
