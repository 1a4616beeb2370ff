//! Adam, cosine annealing and the training loop.

use std::fs::OpenOptions;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint;
use crate::cube::HsiCube;
use crate::error::{Error, Result};
use crate::haze::{Manifest, Split};
use crate::network::DehazeModel;
use crate::params::ParamStore;
use crate::tensor::{Element, Tensor};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub lr0: f64,
    pub lr_min: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub batch: usize,
    pub iterations: u64,
    pub crop_train: usize,
    pub crop_test: usize,
    pub seed: u64,
    /// `0` disables periodic checkpoints.
    pub checkpoint_every: u64,
    /// Global gradient-norm clip.
    pub clip_grad_norm: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr0: 1e-4,
            lr_min: 0.0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            batch: 4,
            iterations: 10_000,
            crop_train: 64,
            crop_test: 128,
            seed: 0,
            checkpoint_every: 1000,
            clip_grad_norm: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::invalid("train_config", m.to_string()));
        if !(self.lr0 >= 0.0 && self.lr_min >= 0.0 && self.lr0.is_finite() && self.lr_min.is_finite()) {
            return bad("learning rates must be finite and >= 0");
        }
        if !((0.0..1.0).contains(&self.beta1) && (0.0..1.0).contains(&self.beta2)) {
            return bad("betas must lie in [0, 1)");
        }
        if !(self.eps > 0.0) {
            return bad("eps must be positive");
        }
        if self.batch == 0 || self.crop_train == 0 || self.crop_test == 0 {
            return bad("batch and crop sizes must be at least 1");
        }
        if self.clip_grad_norm.is_some_and(|c| !(c > 0.0)) {
            return bad("clip norm must be positive");
        }
        Ok(())
    }
}

/// `lr_min + (lr0 - lr_min) (1 + cos(pi t / T)) / 2`, clamped to `lr_min` for `t >= T`.
pub fn cosine_lr(t: u64, total: u64, lr0: f64, lr_min: f64) -> f64 {
    if t >= total {
        return lr_min;
    }
    lr_min + 0.5 * (lr0 - lr_min) * (1.0 + (std::f64::consts::PI * t as f64 / total as f64).cos())
}

/// Adam moments, one buffer per parameter in store order.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimState<T: Element> {
    pub t: u64,
    pub m: Vec<Vec<T>>,
    pub v: Vec<Vec<T>>,
}

impl<T: Element> OptimState<T> {
    pub fn new(store: &ParamStore<T>) -> Self {
        let zeros = || store.iter().map(|p| vec![T::zero(); p.value.numel()]).collect();
        Self {
            t: 0,
            m: zeros(),
            v: zeros(),
        }
    }
}

/// Bias-corrected Adam update of every trainable parameter from its
/// accumulated gradient (optionally rescaled by `grad_scale`).
pub fn adam_step<T: Element>(store: &mut ParamStore<T>, state: &mut OptimState<T>, lr: f64, cfg: &TrainConfig, grad_scale: f64) -> Result<()> {
    if state.m.len() != store.len() {
        return Err(Error::invalid("adam", "optimizer state does not match the parameter set"));
    }
    state.t += 1;
    let t = state.t as i32;
    let (b1, b2) = (cfg.beta1, cfg.beta2);
    let (c1, c2) = (1.0 - b1.powi(t), 1.0 - b2.powi(t));
    let ids: Vec<_> = store.ids().collect();
    for (i, id) in ids.into_iter().enumerate() {
        let p = store.param(id);
        if !p.trainable {
            continue;
        }
        let g = p.value.grad().ok_or_else(|| Error::MissingGradient(p.name.clone()))?;
        let (m, v) = (&mut state.m[i], &mut state.v[i]);
        let next: Vec<T> = p
            .value
            .data()
            .iter()
            .zip(g)
            .enumerate()
            .map(|(j, (&w, g))| {
                let g = g.as_f64() * grad_scale;
                let mj = b1 * m[j].as_f64() + (1.0 - b1) * g;
                let vj = b2 * v[j].as_f64() + (1.0 - b2) * g * g;
                m[j] = T::from_f64(mj);
                v[j] = T::from_f64(vj);
                let step = lr * (mj / c1) / ((vj / c2).sqrt() + cfg.eps);
                T::from_f64(w.as_f64() - step)
            })
            .collect();
        store.set_data(id, next)?;
    }
    Ok(())
}

/// Global L2 norm of all accumulated gradients.
pub fn grad_norm<T: Element>(store: &ParamStore<T>) -> f64 {
    store
        .iter()
        .filter(|p| p.trainable)
        .filter_map(|p| p.value.grad())
        .flat_map(|g| g.into_iter().map(|v| v.as_f64().powi(2)))
        .sum::<f64>()
        .sqrt()
}

#[derive(Debug, Clone)]
pub struct Pair {
    pub hazy: HsiCube,
    pub clean: HsiCube,
}

#[derive(Debug, Clone, Default)]
pub struct PairedDataset {
    pub pairs: Vec<Pair>,
}

impl PairedDataset {
    pub fn new(pairs: Vec<Pair>) -> Result<Self> {
        if let Some(p) = pairs.iter().find(|p| !p.hazy.same_shape(&p.clean)) {
            return Err(Error::invalid(
                "dataset",
                format!("hazy {}x{}x{} vs clean {}x{}x{}", p.hazy.width, p.hazy.height, p.hazy.bands, p.clean.width, p.clean.height, p.clean.bands),
            ));
        }
        Ok(Self { pairs })
    }

    pub fn load(manifest: &Manifest, split: Split) -> Result<Self> {
        let pairs = manifest
            .split(split)
            .map(|e| {
                Ok(Pair {
                    hazy: HsiCube::read(manifest.resolve(&e.hazy_path))?,
                    clean: HsiCube::read(manifest.resolve(&e.clean_path))?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Self::new(pairs)
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CropOrigin {
    pub pair: usize,
    pub y: usize,
    pub x: usize,
}

#[derive(Debug, Clone)]
pub struct Batch<T: Element> {
    /// `[N, crop, crop, B]`
    pub hazy: Tensor<T>,
    pub clean: Tensor<T>,
    pub origins: Vec<CropOrigin>,
}

/// Uniform pair and crop-origin sampling.
pub fn sample_batch<T: Element>(data: &PairedDataset, crop: usize, batch: usize, rng: &mut ChaCha8Rng) -> Result<Batch<T>> {
    if data.is_empty() {
        return Err(Error::invalid("sample_batch", "training split is empty"));
    }
    let mut origins = Vec::with_capacity(batch);
    let (mut hazy, mut clean) = (Vec::new(), Vec::new());
    let bands = data.pairs[0].hazy.bands;
    for _ in 0..batch {
        let pair = rng.random_range(0..data.len());
        let p = &data.pairs[pair];
        if crop > p.hazy.height || crop > p.hazy.width {
            return Err(Error::invalid(
                "sample_batch",
                format!("crop {crop} larger than {}x{} image", p.hazy.height, p.hazy.width),
            ));
        }
        if p.hazy.bands != bands {
            return Err(Error::invalid("sample_batch", "pairs disagree on band count"));
        }
        let y = rng.random_range(0..=p.hazy.height - crop);
        let x = rng.random_range(0..=p.hazy.width - crop);
        hazy.extend_from_slice(p.hazy.crop(y, x, crop, crop)?.to_tensor::<T>().data());
        clean.extend_from_slice(p.clean.crop(y, x, crop, crop)?.to_tensor::<T>().data());
        origins.push(CropOrigin { pair, y, x });
    }
    let shape = [batch, crop, crop, bands];
    Ok(Batch {
        hazy: Tensor::from_vec(&shape, hazy)?,
        clean: Tensor::from_vec(&shape, clean)?,
        origins,
    })
}

/// Progress saved alongside the weights.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainState {
    /// Completed optimizer steps.
    pub step: u64,
    pub config: TrainConfig,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepRecord {
    pub iteration: u64,
    pub lr: f64,
    pub loss: f64,
}

pub const LOSS_CSV: &str = "loss.csv";

#[derive(Debug, Clone)]
pub struct Trainer<T: Element> {
    pub model: DehazeModel<T>,
    pub optim: OptimState<T>,
    pub config: TrainConfig,
    pub step: u64,
}

impl<T: Element> Trainer<T> {
    pub fn new(model: DehazeModel<T>, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let optim = OptimState::new(&model.params);
        Ok(Self {
            model,
            optim,
            config,
            step: 0,
        })
    }

    pub fn from_checkpoint(ckpt: checkpoint::Checkpoint<T>) -> Result<Self> {
        let state = ckpt
            .train
            .ok_or_else(|| Error::invalid("resume", "checkpoint carries no training state"))?;
        let optim = ckpt.optim.unwrap_or_else(|| OptimState::new(&ckpt.model.params));
        state.config.validate()?;
        Ok(Self {
            model: ckpt.model,
            optim,
            config: state.config,
            step: state.step,
        })
    }

    pub fn state(&self) -> TrainState {
        TrainState {
            step: self.step,
            config: self.config.clone(),
        }
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        checkpoint::save(path, &self.model, Some(&self.optim), Some(&self.state()))
    }

    /// Per-step generator: a fixed stream per iteration so resumed runs draw
    /// the same batches.
    pub fn step_rng(&self, step: u64) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.config.seed);
        rng.set_stream(step);
        rng
    }

    /// Loss of the current model on `batch` with fresh gradients.
    pub fn loss_and_grad(&self, batch: &Batch<T>) -> Result<f64> {
        self.model.params.zero_grads();
        let y = self.model.forward(&batch.hazy)?;
        let loss = self.model.loss(&y, &batch.clean)?;
        let value = loss.item()?.as_f64();
        if !value.is_finite() {
            return Err(Error::NonFiniteLoss {
                iteration: self.step,
                value,
            });
        }
        loss.backward()?;
        Ok(value)
    }

    pub fn train_step(&mut self, data: &PairedDataset) -> Result<StepRecord> {
        let iteration = self.step;
        let mut rng = self.step_rng(iteration);
        let batch = sample_batch::<T>(data, self.config.crop_train, self.config.batch, &mut rng)?;
        let loss = self.loss_and_grad(&batch)?;
        let mut scale = 1.0;
        if let Some(max) = self.config.clip_grad_norm {
            let norm = grad_norm(&self.model.params);
            if !norm.is_finite() {
                return Err(Error::NonFiniteLoss { iteration, value: norm });
            }
            if norm > max {
                scale = max / norm;
            }
        }
        let lr = cosine_lr(iteration, self.config.iterations, self.config.lr0, self.config.lr_min);
        adam_step(&mut self.model.params, &mut self.optim, lr, &self.config, scale)?;
        self.step += 1;
        Ok(StepRecord { iteration, lr, loss })
    }

    /// Trains until `stop` steps are complete (capped at the configured
    /// iteration count). With `out_dir`, appends to `loss.csv` and writes
    /// `ckpt_<step>.bin` every `checkpoint_every` steps.
    pub fn run(&mut self, data: &PairedDataset, stop: u64, out_dir: Option<&Path>) -> Result<Vec<StepRecord>> {
        let stop = stop.min(self.config.iterations);
        let mut log = match out_dir {
            Some(dir) => {
                std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
                let path = dir.join(LOSS_CSV);
                let fresh = !path.exists();
                let mut f = OpenOptions::new().create(true).append(true).open(&path).map_err(|e| Error::io(&path, e))?;
                if fresh {
                    writeln!(f, "iteration,lr,loss").map_err(|e| Error::io(&path, e))?;
                }
                Some((f, path))
            }
            None => None,
        };
        let mut records = Vec::new();
        while self.step < stop {
            let rec = self.train_step(data)?;
            if let Some((f, path)) = log.as_mut() {
                writeln!(f, "{},{},{}", rec.iteration, rec.lr, rec.loss).map_err(|e| Error::io(&*path, e))?;
            }
            if let Some(dir) = out_dir {
                let every = self.config.checkpoint_every;
                if every > 0 && self.step % every == 0 {
                    self.save(checkpoint_path(dir, self.step))?;
                }
            }
            records.push(rec);
        }
        Ok(records)
    }
}

pub fn checkpoint_path(dir: &Path, step: u64) -> PathBuf {
    dir.join(format!("ckpt_{step:06}.bin"))
}
