//! Subcommand implementations. Each returns the JSON summary printed by
//! `main`.

use std::path::{Path, PathBuf};

use anyhow::Context;
use hdmba::checkpoint;
use hdmba::cube::HsiCube;
use hdmba::haze::{build_dataset, default_abundances, DatasetRecipe, Manifest, Split};
use hdmba::metrics::{bandwise_curves, extract_spectrum, spectra_csv, MetricConfig, MetricReport};
use hdmba::network::{calibrate_channels, DehazeModel, ModelConfig};
use hdmba::train::{PairedDataset, Trainer};
use serde::Serialize;
use serde_json::{json, Value};

use crate::config::{FlatConfig, Preset};
use crate::{BandcurveArgs, DehazeArgs, EvaluateArgs, ModelArgs, ParamsArgs, SpectraArgs, SplitArg, SynthesizeArgs, TrainArgs, Usage};

pub const FINAL_CHECKPOINT: &str = "last.bin";
pub const RECIPE_FILE: &str = "recipe.json";

/// Missing inputs are usage errors, not I/O failures.
fn require(path: &Path) -> anyhow::Result<()> {
    if path.exists() {
        Ok(())
    } else {
        Err(Usage::new(format!("{}: no such file or directory", path.display())).into())
    }
}

fn create_dir(dir: &Path) -> anyhow::Result<()> {
    std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
}

fn write_text(path: &Path, text: &str) -> anyhow::Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        create_dir(parent)?;
    }
    std::fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn write_json(path: &Path, value: &impl Serialize) -> anyhow::Result<()> {
    write_text(path, &serde_json::to_string_pretty(value)?)
}

pub fn synthesize(a: &SynthesizeArgs) -> anyhow::Result<Value> {
    let abundances = match &a.abundance_values {
        Some(v) if v.len() != a.abundances => {
            return Err(Usage::new(format!("--abundances {} but {} values given", a.abundances, v.len())).into());
        }
        Some(v) => v.clone(),
        None => default_abundances(a.abundances),
    };
    let recipe = DatasetRecipe {
        n_scenes: a.scenes,
        thickness_levels: a.thickness_levels,
        abundances,
        width: a.width.unwrap_or(a.size),
        height: a.height.unwrap_or(a.size),
        bands: a.bands,
        gamma: a.gamma,
        seed: a.seed,
        test_fraction: a.test_fraction,
        pairs_per_scene: a.pairs_per_scene,
    };
    recipe.validate()?;
    create_dir(&a.out)?;
    let manifest = build_dataset(&recipe, &a.out)?;
    write_json(&a.out.join(RECIPE_FILE), &recipe)?;
    Ok(json!({
        "manifest": a.out.join(hdmba::haze::MANIFEST_FILE),
        "pairs": manifest.pairs.len(),
        "train": manifest.split(Split::Train).count(),
        "test": manifest.split(Split::Test).count(),
        "recipe": recipe,
    }))
}

impl ModelArgs {
    fn overrides(&self) -> anyhow::Result<toml::Table> {
        let mut t = toml::Table::new();
        let mut int = |k: &str, v: Option<usize>| {
            if let Some(v) = v {
                t.insert(k.into(), toml::Value::Integer(v as i64));
            }
        };
        int("bands", self.bands);
        int("channels", self.channels);
        int("rdm_count", self.rdms);
        int("dml_per_rdm", self.dmls);
        int("window", self.window);
        int("state_size", self.state_size);
        int("expansion", self.expansion);
        int("mlp_ratio", self.mlp_ratio);
        for (k, v) in [("theta1", self.theta1), ("theta2", self.theta2)] {
            if let Some(v) = v {
                t.insert(k.into(), toml::Value::Float(v));
            }
        }
        if let Some(f) = &self.tail_fusion {
            if !matches!(f.as_str(), "add" | "concat") {
                return Err(Usage::new(format!("--tail-fusion must be `add` or `concat`, got `{f}`")).into());
            }
            t.insert("tail_fusion".into(), toml::Value::String(f.clone()));
        }
        for item in self.ablate.iter().map(|s| s.trim()).filter(|s| !s.is_empty()) {
            let key = match item {
                "no-ssm" => "use_ssm",
                "no-dconv" => "use_dconv",
                "no-gate" => "use_gate",
                "no-mlp" if self.mlp => return Err(Usage::new("--mlp contradicts --ablate no-mlp").into()),
                "no-mlp" => "use_mlp",
                other => return Err(Usage::new(format!("unknown ablation `{other}`")).into()),
            };
            t.insert(key.into(), toml::Value::Boolean(false));
        }
        if self.mlp {
            t.insert("use_mlp".into(), toml::Value::Boolean(true));
        }
        Ok(t)
    }

    fn resolve(&self, extra: toml::Table) -> anyhow::Result<FlatConfig> {
        let base = FlatConfig::preset(self.preset.unwrap_or(Preset::Default));
        let mut over = self.overrides()?;
        over.extend(extra);
        if let Some(p) = &self.config {
            require(p)?;
        }
        FlatConfig::resolve(&base, self.config.as_deref(), over)
    }
}

impl TrainArgs {
    fn overrides(&self) -> toml::Table {
        let mut t = toml::Table::new();
        for (k, v) in [("data", &self.data), ("out", &self.out)] {
            if let Some(p) = v {
                t.insert(k.into(), toml::Value::String(p.display().to_string()));
            }
        }
        for (k, v) in [("lr0", self.lr), ("lr_min", self.lr_min), ("clip_grad_norm", self.clip_grad_norm)] {
            if let Some(v) = v {
                t.insert(k.into(), toml::Value::Float(v));
            }
        }
        for (k, v) in [
            ("batch", self.batch.map(|v| v as u64)),
            ("iterations", self.iterations),
            ("crop_train", self.crop.map(|v| v as u64)),
            ("seed", self.seed),
            ("checkpoint_every", self.checkpoint_every),
        ] {
            if let Some(v) = v {
                t.insert(k.into(), toml::Value::Integer(v as i64));
            }
        }
        t
    }
}

fn load_train_split(data: &Path) -> anyhow::Result<PairedDataset> {
    require(data)?;
    let manifest = Manifest::read(data)?;
    let set = PairedDataset::load(&manifest, Split::Train)?;
    if set.is_empty() {
        return Err(Usage::new(format!("{}: training split is empty", data.display())).into());
    }
    Ok(set)
}

pub fn train(a: &TrainArgs) -> anyhow::Result<Value> {
    let (mut trainer, flat, data) = match &a.resume {
        Some(ck) => {
            require(ck)?;
            let mut trainer = Trainer::from_checkpoint(checkpoint::load::<f32>(ck)?)?;
            if let Some(n) = a.iterations {
                trainer.config.iterations = n;
            }
            let mut flat = FlatConfig::from_parts(&trainer.model.config, &trainer.config);
            flat.data = a.data.clone();
            flat.out = a.out.clone();
            let data_path = flat.data.clone().ok_or_else(|| Usage::new("--data is required"))?;
            let data = load_train_split(&data_path)?;
            flat.model(Some(data.pairs[0].hazy.bands))?;
            (trainer, flat, data)
        }
        None => {
            let mut flat = a.model.resolve(a.overrides())?;
            let data_path = flat.data.clone().ok_or_else(|| Usage::new("--data (or `data` in the config) is required"))?;
            let data = load_train_split(&data_path)?;
            let model_cfg = flat.model(Some(data.pairs[0].hazy.bands))?;
            flat.bands = Some(model_cfg.bands);
            let train_cfg = flat.train()?;
            let model = DehazeModel::<f32>::new(model_cfg, train_cfg.seed)?;
            (Trainer::new(model, train_cfg)?, flat, data)
        }
    };
    let out = flat.out.clone().ok_or_else(|| Usage::new("--out (or `out` in the config) is required"))?;
    create_dir(&out)?;
    let config_path = flat.write(&out)?;
    let start = trainer.step;
    let stop = a.stop_at.unwrap_or(trainer.config.iterations);
    let records = trainer.run(&data, stop, Some(&out))?;
    let ckpt = out.join(FINAL_CHECKPOINT);
    trainer.save(&ckpt)?;
    let tail = &records[records.len().saturating_sub(50)..];
    Ok(json!({
        "run_dir": out,
        "config": config_path,
        "checkpoint": ckpt,
        "start_step": start,
        "steps": trainer.step,
        "parameters": trainer.model.parameter_count(),
        "first_loss": records.first().map(|r| r.loss),
        "last_loss": records.last().map(|r| r.loss),
        "mean_loss_last_50": (!tail.is_empty()).then(|| tail.iter().map(|r| r.loss).sum::<f64>() / tail.len() as f64),
    }))
}

fn load_model(path: &Path) -> anyhow::Result<DehazeModel<f32>> {
    require(path)?;
    Ok(checkpoint::load::<f32>(path)?.model)
}

fn read_cube(path: &Path) -> anyhow::Result<HsiCube> {
    require(path)?;
    Ok(HsiCube::read(path)?)
}

pub fn dehaze(a: &DehazeArgs) -> anyhow::Result<Value> {
    let model = load_model(&a.checkpoint)?;
    let cube = read_cube(&a.input)?;
    let out = model.dehaze_cube(&cube, a.tile)?;
    if let Some(parent) = a.output.parent().filter(|p| !p.as_os_str().is_empty()) {
        create_dir(parent)?;
    }
    out.write(&a.output)?;
    Ok(json!({
        "input": a.input,
        "output": a.output,
        "width": out.width,
        "height": out.height,
        "bands": out.bands,
        "tile": a.tile,
    }))
}

#[derive(Debug, Serialize)]
struct PairScores {
    hazy: PathBuf,
    clean: PathBuf,
    thickness_level: usize,
    abundance: f64,
    hazy_vs_clean: Scores,
    #[serde(skip_serializing_if = "Option::is_none")]
    dehazed_vs_clean: Option<Scores>,
}

#[derive(Debug, Clone, Copy, Default, Serialize)]
struct Scores {
    ssim: f64,
    psnr_db: Option<f64>,
    uqi: f64,
    sam_rad: f64,
    ag: f64,
}

impl From<&MetricReport> for Scores {
    fn from(r: &MetricReport) -> Self {
        Self {
            ssim: r.ssim,
            psnr_db: r.psnr_db,
            uqi: r.uqi,
            sam_rad: r.sam_rad,
            ag: r.ag,
        }
    }
}

/// Means over pairs; PSNR averages finite values only.
fn mean_scores<'a>(it: impl Iterator<Item = &'a Scores>) -> Value {
    let all: Vec<&Scores> = it.collect();
    let n = all.len().max(1) as f64;
    let psnr: Vec<f64> = all.iter().filter_map(|s| s.psnr_db).collect();
    json!({
        "ssim": all.iter().map(|s| s.ssim).sum::<f64>() / n,
        "psnr_db": (!psnr.is_empty()).then(|| psnr.iter().sum::<f64>() / psnr.len() as f64),
        "uqi": all.iter().map(|s| s.uqi).sum::<f64>() / n,
        "sam_rad": all.iter().map(|s| s.sam_rad).sum::<f64>() / n,
        "ag": all.iter().map(|s| s.ag).sum::<f64>() / n,
        "pairs": all.len(),
    })
}

pub fn evaluate(a: &EvaluateArgs) -> anyhow::Result<Value> {
    let cfg = MetricConfig::default();
    if let (Some(reference), Some(test)) = (&a.reference, &a.test) {
        let (r, t) = (read_cube(reference)?, read_cube(test)?);
        let t = match &a.checkpoint {
            Some(ck) => load_model(ck)?.dehaze_cube(&t, a.tile)?,
            None => t,
        };
        let report = MetricReport::compute(&r, &t, &cfg)?;
        if let Some(out) = &a.out {
            write_text(&out.join("report.json"), &report.to_json()?)?;
            write_text(&out.join("bands.csv"), &report.bands_csv())?;
        }
        return Ok(json!({
            "ssim": report.ssim,
            "psnr_db": report.psnr_db,
            "identical": report.identical,
            "uqi": report.uqi,
            "sam_rad": report.sam_rad,
            "ag": report.ag,
            "ag_reference": report.ag_reference,
        }));
    }
    let data = a.data.as_ref().ok_or_else(|| Usage::new("give --reference/--test or --data"))?;
    require(data)?;
    let manifest = Manifest::read(data)?;
    let model = a.checkpoint.as_deref().map(load_model).transpose()?;
    let mut rows = Vec::new();
    for e in manifest.pairs.iter().filter(|e| match a.split {
        SplitArg::All => true,
        SplitArg::Train => e.split == Split::Train,
        SplitArg::Test => e.split == Split::Test,
    }) {
        let clean = HsiCube::read(manifest.resolve(&e.clean_path))?;
        let hazy = HsiCube::read(manifest.resolve(&e.hazy_path))?;
        let dehazed = match &model {
            Some(m) => Some(Scores::from(&MetricReport::compute(&clean, &m.dehaze_cube(&hazy, a.tile)?, &cfg)?)),
            None => None,
        };
        rows.push(PairScores {
            hazy: e.hazy_path.clone(),
            clean: e.clean_path.clone(),
            thickness_level: e.spec.thickness_level,
            abundance: e.spec.abundance,
            hazy_vs_clean: Scores::from(&MetricReport::compute(&clean, &hazy, &cfg)?),
            dehazed_vs_clean: dehazed,
        });
    }
    if rows.is_empty() {
        return Err(Usage::new("the selected split has no pairs").into());
    }
    let summary = json!({
        "hazy_vs_clean": mean_scores(rows.iter().map(|r| &r.hazy_vs_clean)),
        "dehazed_vs_clean": model.is_some().then(|| mean_scores(rows.iter().filter_map(|r| r.dehazed_vs_clean.as_ref()))),
        "metric_config": cfg,
    });
    if let Some(out) = &a.out {
        write_json(&out.join("pairs.json"), &rows)?;
        write_json(&out.join("summary.json"), &summary)?;
    }
    Ok(summary)
}

pub fn params(a: &ParamsArgs) -> anyhow::Result<Value> {
    let cfg: ModelConfig = match &a.checkpoint {
        Some(ck) => {
            require(ck)?;
            checkpoint::read_manifest(ck)?.model
        }
        None => a.model.resolve(toml::Table::new())?.model(None)?,
    };
    let closed_form = cfg.parameter_count();
    let report = DehazeModel::<f32>::new(cfg.clone(), 0)?.parameter_report();
    let calibration = a.calibrate.map(|target| {
        calibrate_channels(&cfg, target, 1..=1024).map(|(c, n)| json!({"target": target, "channels": c, "parameters": n}))
    });
    let out = json!({
        "total": report.total,
        "millions": report.total as f64 / 1e6,
        "closed_form": closed_form,
        "groups": report.groups,
        "model": cfg,
        "calibration": calibration,
    });
    if let Some(p) = &a.json {
        write_json(p, &out)?;
    }
    Ok(out)
}

pub fn spectra(a: &SpectraArgs) -> anyhow::Result<Value> {
    let (mut names, mut spectra) = (Vec::new(), Vec::new());
    for path in &a.cubes {
        let cube = read_cube(path)?;
        let stem = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
        for &(x, y) in &a.pixels {
            names.push(format!("{stem}@{x}:{y}"));
            spectra.push(extract_spectrum(&cube, x, y)?);
        }
    }
    let csv = spectra_csv(&names, &spectra)?;
    if let Some(out) = &a.out {
        write_text(out, &csv)?;
    }
    let series: Vec<Value> = names
        .iter()
        .zip(&spectra)
        .map(|(n, s)| json!({"name": n, "values": s.iter().map(|p| p.1).collect::<Vec<_>>()}))
        .collect();
    Ok(json!({
        "wavelengths_nm": spectra.first().map(|s| s.iter().map(|p| p.0).collect::<Vec<_>>()),
        "spectra": series,
        "csv": a.out,
    }))
}

fn fmt_psnr(p: Option<f64>) -> String {
    p.map_or_else(|| "inf".into(), |v| v.to_string())
}

pub fn bandcurve(a: &BandcurveArgs) -> anyhow::Result<Value> {
    let cfg = MetricConfig::default();
    let clean = read_cube(&a.clean)?;
    let hazy = read_cube(&a.hazy)?;
    let before = bandwise_curves(&clean, &hazy, &cfg)?;
    let after = match &a.checkpoint {
        Some(ck) => Some(bandwise_curves(&clean, &load_model(ck)?.dehaze_cube(&hazy, a.tile)?, &cfg)?),
        None => None,
    };
    let mut csv = String::from("wavelength_nm,ssim_hazy,psnr_hazy_db");
    if after.is_some() {
        csv += ",ssim_dehazed,psnr_dehazed_db";
    }
    csv.push('\n');
    for (i, r) in before.iter().enumerate() {
        csv += &format!("{},{},{}", r.wavelength_nm, r.ssim, fmt_psnr(r.psnr_db));
        if let Some(d) = &after {
            csv += &format!(",{},{}", d[i].ssim, fmt_psnr(d[i].psnr_db));
        }
        csv.push('\n');
    }
    if let Some(out) = &a.out {
        write_text(out, &csv)?;
    }
    Ok(json!({
        "bands": before.len(),
        "hazy": before,
        "dehazed": after,
        "csv": a.out,
    }))
}
