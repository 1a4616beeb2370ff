//! Full dehazing network.
//!
//! `head` lifts the `B` input bands to `C` feature channels, `I` residual
//! blocks each run `K` layers of (window scan + MLP) followed by a 3x3 conv,
//! and two tail convs map back to `B` bands on top of a global skip.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::cube::HsiCube;
use crate::error::{Error, Result};
use crate::params::{fan_in_uniform, ParamId, ParamStore};
use crate::ssm::SsmConfig;
use crate::tensor::{no_grad, Element, Tensor};
use crate::wssm::{wssm_forward, BlockFeatures, MambaBlockParams, DCONV_KERNEL};

pub const LN_EPS: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct Ablation {
    pub use_ssm: bool,
    pub use_dconv: bool,
    pub use_gate: bool,
    pub use_mlp: bool,
}

impl Default for Ablation {
    fn default() -> Self {
        Self {
            use_ssm: true,
            use_dconv: true,
            use_gate: true,
            use_mlp: true,
        }
    }
}

impl Ablation {
    /// The five ablation variants in order: MLP only, SSM, SSM + DConv,
    /// SSM + DConv + gate, full.
    pub fn table_rows() -> [(&'static str, Ablation); 5] {
        let row = |use_ssm, use_dconv, use_gate, use_mlp| Ablation {
            use_ssm,
            use_dconv,
            use_gate,
            use_mlp,
        };
        [
            ("mlp", row(false, false, false, true)),
            ("ssm", row(true, false, false, false)),
            ("ssm+dconv", row(true, true, false, false)),
            ("ssm+dconv+gate", row(true, true, true, false)),
            ("full", row(true, true, true, true)),
        ]
    }

    fn block_features(self) -> BlockFeatures {
        BlockFeatures {
            ssm: self.use_ssm,
            dconv: self.use_dconv,
            gate: self.use_gate,
        }
    }
}

/// How the deep features are fused with the shallow ones before the tail.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TailFusion {
    #[default]
    Add,
    /// Channel concat; the first tail conv then takes `2C` channels.
    Concat,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub bands: usize,
    pub channels: usize,
    pub rdm_count: usize,
    pub dml_per_rdm: usize,
    pub window: usize,
    pub ssm: SsmConfig,
    pub mlp_ratio: usize,
    pub ablation: Ablation,
    pub tail_fusion: TailFusion,
    pub theta1: f64,
    pub theta2: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            bands: 32,
            channels: 64,
            rdm_count: 4,
            dml_per_rdm: 4,
            window: 8,
            ssm: SsmConfig::default(),
            mlp_ratio: 2,
            ablation: Ablation::default(),
            tail_fusion: TailFusion::Add,
            theta1: 1.0,
            theta2: 0.1,
        }
    }
}

/// Channel width whose full-size model comes closest to 4.60M parameters.
pub const PAPER_CHANNELS: usize = 131;
pub const PAPER_BANDS: usize = 305;
pub const PAPER_PARAM_TARGET: usize = 4_600_000;

impl ModelConfig {
    /// `B = 305`, `I = K = 4`, `M = 8` at the calibrated width.
    pub fn paper() -> Self {
        Self {
            bands: PAPER_BANDS,
            channels: PAPER_CHANNELS,
            ..Self::default()
        }
    }

    /// 8x8x4 input scale: `C = 8`, `I = K = 1`, `M = 4`, `N = 4`.
    pub fn tiny(bands: usize) -> Self {
        Self {
            bands,
            channels: 8,
            rdm_count: 1,
            dml_per_rdm: 1,
            window: 4,
            ssm: SsmConfig {
                state_size: 4,
                ..SsmConfig::default()
            },
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("bands", self.bands),
            ("channels", self.channels),
            ("rdm_count", self.rdm_count),
            ("dml_per_rdm", self.dml_per_rdm),
            ("window", self.window),
            ("ssm.state_size", self.ssm.state_size),
            ("ssm.expansion", self.ssm.expansion),
            ("mlp_ratio", self.mlp_ratio),
        ];
        if let Some((name, _)) = counts.iter().find(|(_, v)| *v == 0) {
            return Err(Error::invalid("model_config", format!("{name} must be at least 1")));
        }
        if self.ssm.dt_rank == Some(0) {
            return Err(Error::invalid("model_config", "ssm.dt_rank must be at least 1"));
        }
        if !(self.theta1 >= 0.0 && self.theta2 >= 0.0 && self.theta1.is_finite() && self.theta2.is_finite()) {
            return Err(Error::invalid("model_config", "loss weights must be finite and non-negative"));
        }
        Ok(())
    }

    /// Closed-form trainable parameter count, without building the model.
    pub fn parameter_count(&self) -> usize {
        let (b, c) = (self.bands, self.channels);
        let conv = |ci: usize, co: usize| 9 * ci * co + co;
        let di = self.ssm.expansion * c;
        let ab = self.ablation;
        let mut dml = 2 * c + c + di * c;
        dml += c * di * if ab.use_gate { 2 } else { 1 };
        if ab.use_dconv {
            dml += di * DCONV_KERNEL + di;
        }
        if ab.use_ssm {
            let (n, r) = (self.ssm.state_size, self.ssm.dt_rank_for(di));
            dml += di * (r + 2 * n) + r * di + di + di * n + di;
        }
        if ab.use_mlp {
            let h = self.mlp_ratio * c;
            dml += 2 * c + (c * h + h) + (h * c + c);
        }
        let rdm = self.dml_per_rdm * dml + conv(c, c);
        let tail_in = match self.tail_fusion {
            TailFusion::Add => c,
            TailFusion::Concat => 2 * c,
        };
        conv(b, c) + self.rdm_count * rdm + conv(tail_in, c) + conv(c, b)
    }
}

/// Sweeps `channels` over `range` and returns the width (and count) nearest
/// `target`; ties go to the smaller width.
pub fn calibrate_channels(template: &ModelConfig, target: usize, range: std::ops::RangeInclusive<usize>) -> Option<(usize, usize)> {
    range
        .map(|c| {
            let cfg = ModelConfig {
                channels: c,
                ..template.clone()
            };
            (c, cfg.parameter_count())
        })
        .min_by_key(|&(_, n)| n.abs_diff(target))
}

#[derive(Debug, Clone, Copy)]
struct Conv {
    weight: ParamId,
    bias: ParamId,
}

impl Conv {
    fn init<T: Element>(store: &mut ParamStore<T>, name: &str, ci: usize, co: usize, zero: bool, rng: &mut ChaCha8Rng) -> Result<Self> {
        let n = 9 * ci * co;
        let w = if zero { vec![T::zero(); n] } else { fan_in_uniform(rng, n, 9 * ci) };
        Ok(Self {
            weight: store.add(format!("{name}.weight"), &[3, 3, ci, co], w)?,
            bias: store.add(format!("{name}.bias"), &[co], vec![T::zero(); co])?,
        })
    }

    fn forward<T: Element>(&self, store: &ParamStore<T>, x: &Tensor<T>) -> Result<Tensor<T>> {
        x.conv2d(store.get(self.weight), Some(store.get(self.bias)))
    }
}

#[derive(Debug, Clone, Copy)]
struct Norm {
    gain: ParamId,
    bias: ParamId,
}

impl Norm {
    fn init<T: Element>(store: &mut ParamStore<T>, name: &str, c: usize) -> Result<Self> {
        Ok(Self {
            gain: store.add(format!("{name}.weight"), &[c], vec![T::one(); c])?,
            bias: store.add(format!("{name}.bias"), &[c], vec![T::zero(); c])?,
        })
    }

    fn forward<T: Element>(&self, store: &ParamStore<T>, x: &Tensor<T>) -> Result<Tensor<T>> {
        x.layer_norm(store.get(self.gain), store.get(self.bias), LN_EPS)
    }
}

#[derive(Debug, Clone)]
struct Mlp {
    norm: Norm,
    fc1: (ParamId, ParamId),
    fc2: (ParamId, ParamId),
}

/// One window-scan layer: `F' = WSSM(LN(F)) + F`, `out = MLP(LN(F')) + F'`.
#[derive(Debug, Clone)]
pub struct Dml {
    norm1: Norm,
    wssm: MambaBlockParams,
    mlp: Option<Mlp>,
    window: usize,
}

impl Dml {
    fn init<T: Element>(store: &mut ParamStore<T>, prefix: &str, cfg: &ModelConfig, rng: &mut ChaCha8Rng) -> Result<Self> {
        let c = cfg.channels;
        let norm1 = Norm::init(store, &format!("{prefix}.norm1"), c)?;
        let wssm = MambaBlockParams::init(store, &format!("{prefix}.wssm"), c, &cfg.ssm, cfg.ablation.block_features(), rng)?;
        let mlp = if cfg.ablation.use_mlp {
            let h = cfg.mlp_ratio * c;
            let norm = Norm::init(store, &format!("{prefix}.norm2"), c)?;
            let w1 = store.add(format!("{prefix}.mlp.fc1.weight"), &[c, h], fan_in_uniform(rng, c * h, c))?;
            let b1 = store.add(format!("{prefix}.mlp.fc1.bias"), &[h], vec![T::zero(); h])?;
            let w2 = store.add(format!("{prefix}.mlp.fc2.weight"), &[h, c], fan_in_uniform(rng, h * c, h))?;
            let b2 = store.add(format!("{prefix}.mlp.fc2.bias"), &[c], vec![T::zero(); c])?;
            Some(Mlp {
                norm,
                fc1: (w1, b1),
                fc2: (w2, b2),
            })
        } else {
            None
        };
        Ok(Self {
            norm1,
            wssm,
            mlp,
            window: cfg.window,
        })
    }

    pub fn forward<T: Element>(&self, store: &ParamStore<T>, f: &Tensor<T>) -> Result<Tensor<T>> {
        let mixed = wssm_forward(store, &self.wssm, &self.norm1.forward(store, f)?, self.window)?;
        let f1 = mixed.add(f)?;
        let Some(mlp) = &self.mlp else { return Ok(f1) };
        let h = mlp
            .norm
            .forward(store, &f1)?
            .linear(store.get(mlp.fc1.0), Some(store.get(mlp.fc1.1)))?
            .gelu()
            .linear(store.get(mlp.fc2.0), Some(store.get(mlp.fc2.1)))?;
        h.add(&f1)
    }
}

/// `conv3x3(DML_K(...DML_1(F))) + F`.
#[derive(Debug, Clone)]
pub struct Rdm {
    pub dmls: Vec<Dml>,
    conv: Conv,
}

impl Rdm {
    pub fn forward<T: Element>(&self, store: &ParamStore<T>, f: &Tensor<T>) -> Result<Tensor<T>> {
        let mut h = f.clone();
        for dml in &self.dmls {
            h = dml.forward(store, &h)?;
        }
        self.conv.forward(store, &h)?.add(f)
    }
}

/// Trainable parameter count for one top-level block.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamGroup {
    pub name: String,
    pub count: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamReport {
    pub total: usize,
    pub groups: Vec<ParamGroup>,
}

#[derive(Debug, Clone)]
pub struct DehazeModel<T: Element> {
    pub config: ModelConfig,
    pub params: ParamStore<T>,
    head: Conv,
    pub rdms: Vec<Rdm>,
    tail1: Conv,
    tail2: Conv,
}

impl<T: Element> DehazeModel<T> {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let (b, c) = (config.bands, config.channels);
        let head = Conv::init(&mut store, "head", b, c, false, &mut rng)?;
        let mut rdms = Vec::with_capacity(config.rdm_count);
        for i in 0..config.rdm_count {
            let dmls = (0..config.dml_per_rdm)
                .map(|k| Dml::init(&mut store, &format!("rdm.{i}.dml.{k}"), &config, &mut rng))
                .collect::<Result<Vec<_>>>()?;
            let conv = Conv::init(&mut store, &format!("rdm.{i}.conv"), c, c, false, &mut rng)?;
            rdms.push(Rdm { dmls, conv });
        }
        let tail_in = match config.tail_fusion {
            TailFusion::Add => c,
            TailFusion::Concat => 2 * c,
        };
        let tail1 = Conv::init(&mut store, "tail.0", tail_in, c, false, &mut rng)?;
        let tail2 = Conv::init(&mut store, "tail.1", c, b, true, &mut rng)?;
        Ok(Self {
            config,
            params: store,
            head,
            rdms,
            tail1,
            tail2,
        })
    }

    /// `x` is `[N, H, W, B]` (or `[H, W, B]`); output has the same shape.
    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let batched = match x.shape() {
            &[_, _, _, b] if b == self.config.bands => x.clone(),
            &[h, w, b] if b == self.config.bands => x.reshape(&[1, h, w, b])?,
            other => return Err(Error::shape("hdmba_forward", other, &[0, 0, 0, self.config.bands])),
        };
        let store = &self.params;
        let f0 = self.head.forward(store, &batched)?;
        let mut f = f0.clone();
        for rdm in &self.rdms {
            f = rdm.forward(store, &f)?;
        }
        let fused = match self.config.tail_fusion {
            TailFusion::Add => f.add(&f0)?,
            TailFusion::Concat => Tensor::concat(&[f, f0], 3)?,
        };
        let y = self.tail2.forward(store, &self.tail1.forward(store, &fused)?)?.add(&batched)?;
        if x.ndim() == 3 {
            y.reshape(x.shape())
        } else {
            Ok(y)
        }
    }

    /// Inference on a whole cube. Sides longer than `tile` are processed in
    /// `tile x tile` blocks (rounded up to a multiple of the window) with a
    /// one-window halo; `tile == 0` runs the full image at once.
    pub fn dehaze_cube(&self, cube: &HsiCube, tile: usize) -> Result<HsiCube> {
        if cube.bands != self.config.bands {
            return Err(Error::shape("dehaze", &[cube.height, cube.width, cube.bands], &[cube.height, cube.width, self.config.bands]));
        }
        let _guard = no_grad();
        let m = self.config.window;
        let run = |c: &HsiCube| -> Result<HsiCube> { HsiCube::from_tensor(&self.forward(&c.to_tensor::<T>())?, c.wavelengths_nm.clone()) };
        if tile == 0 || (cube.height <= tile && cube.width <= tile) {
            return run(cube);
        }
        let tile = tile.next_multiple_of(m);
        let mut out = cube.clone();
        for ty in (0..cube.height).step_by(tile) {
            for tx in (0..cube.width).step_by(tile) {
                let (y0, x0) = (ty.saturating_sub(m), tx.saturating_sub(m));
                let (y1, x1) = ((ty + tile + m).min(cube.height), (tx + tile + m).min(cube.width));
                let part = run(&cube.crop(y0, x0, y1 - y0, x1 - x0)?)?;
                let (ch, cw) = ((ty + tile).min(cube.height) - ty, (tx + tile).min(cube.width) - tx);
                for b in 0..cube.bands {
                    let (src, dst) = (part.band(b), out.band_mut(b));
                    for y in 0..ch {
                        let s = (ty - y0 + y) * part.width + (tx - x0);
                        let d = (ty + y) * cube.width + tx;
                        dst[d..d + cw].copy_from_slice(&src[s..s + cw]);
                    }
                }
            }
        }
        Ok(out)
    }

    pub fn loss(&self, y: &Tensor<T>, target: &Tensor<T>) -> Result<Tensor<T>> {
        loss(y, target, self.config.theta1, self.config.theta2)
    }

    pub fn parameter_count(&self) -> usize {
        self.params.scalar_count()
    }

    /// Counts grouped by `head`, `rdm.<i>` and `tail`.
    pub fn parameter_report(&self) -> ParamReport {
        let mut groups: Vec<ParamGroup> = Vec::new();
        for p in self.params.iter().filter(|p| p.trainable) {
            let name = match p.name.split('.').collect::<Vec<_>>().as_slice() {
                ["rdm", i, ..] => format!("rdm.{i}"),
                [first, ..] => first.to_string(),
                [] => String::new(),
            };
            match groups.last_mut() {
                Some(g) if g.name == name => g.count += p.value.numel(),
                _ => groups.push(ParamGroup { name, count: p.value.numel() }),
            }
        }
        ParamReport {
            total: groups.iter().map(|g| g.count).sum(),
            groups,
        }
    }
}

/// `theta1 * mean((y - t)^2) + theta2 * mean(|y - t|)`.
pub fn loss<T: Element>(y: &Tensor<T>, target: &Tensor<T>, theta1: f64, theta2: f64) -> Result<Tensor<T>> {
    if y.shape() != target.shape() {
        return Err(Error::shape("loss", y.shape(), target.shape()));
    }
    let diff = y.sub(target)?;
    diff.square().mean().scale(theta1).add(&diff.abs().mean().scale(theta2))
}
