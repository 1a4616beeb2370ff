//! Window selective scan module.
//!
//! Feature maps (`[N, H, W, C]`) are cut into non-overlapping `M x M`
//! windows, each window is flattened row-major into a length-`M^2` token
//! sequence, a gated Mamba block runs on every sequence independently, and
//! the windows are stitched back. Maps whose sides are not multiples of `M`
//! are reflect-padded first and cropped afterwards.

use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::params::{fan_in_uniform, ParamId, ParamStore};
use crate::ssm::{SsmConfig, SsmParameters};
use crate::tensor::{Element, PadMode, Tensor};

/// Stack of window token sequences plus what is needed to undo the split.
#[derive(Debug, Clone)]
pub struct WindowBatch<T: Element> {
    /// `[N * grid_h * grid_w, M * M, C]`, windows row-major over the grid.
    pub windows: Tensor<T>,
    pub batch: usize,
    pub grid_h: usize,
    pub grid_w: usize,
    pub m: usize,
    /// Extents before padding.
    pub height: usize,
    pub width: usize,
}

/// Splits `[N, H, W, C]` into `M x M` windows.
pub fn window_partition<T: Element>(z: &Tensor<T>, m: usize) -> Result<WindowBatch<T>> {
    let &[n, h, w, c] = z.shape() else {
        return Err(Error::invalid("window_partition", format!("expected [N, H, W, C], got {:?}", z.shape())));
    };
    if m == 0 || h == 0 || w == 0 {
        return Err(Error::invalid("window_partition", format!("window {m} on a {h}x{w} map")));
    }
    let (ph, pw) = (h.next_multiple_of(m), w.next_multiple_of(m));
    let padded = if (ph, pw) == (h, w) {
        z.clone()
    } else {
        z.pad2d(0, ph - h, 0, pw - w, PadMode::Reflect)?
    };
    let (gh, gw) = (ph / m, pw / m);
    let windows = padded
        .reshape(&[n, gh, m, gw, m, c])?
        .permute(&[0, 1, 3, 2, 4, 5])?
        .reshape(&[n * gh * gw, m * m, c])?;
    Ok(WindowBatch {
        windows,
        batch: n,
        grid_h: gh,
        grid_w: gw,
        m,
        height: h,
        width: w,
    })
}

/// Inverse of [`window_partition`].
pub fn window_reverse<T: Element>(batch: &WindowBatch<T>) -> Result<Tensor<T>> {
    let WindowBatch { windows, batch: n, grid_h: gh, grid_w: gw, m, height, width } = batch;
    let (n, gh, gw, m) = (*n, *gh, *gw, *m);
    let c = match windows.shape() {
        &[s, l, c] if s == n * gh * gw && l == m * m => c,
        other => {
            return Err(Error::invalid(
                "window_reverse",
                format!("windows {other:?} do not match a {n}x{gh}x{gw} grid of {m}x{m} windows"),
            ))
        }
    };
    let fits = |orig: usize, cells: usize| orig > 0 && orig <= cells * m && orig > (cells - 1) * m;
    if gh == 0 || gw == 0 || !fits(*height, gh) || !fits(*width, gw) {
        return Err(Error::invalid(
            "window_reverse",
            format!("original size {height}x{width} inconsistent with {gh}x{gw} grid of {m}"),
        ));
    }
    windows
        .reshape(&[n, gh, gw, m, m, c])?
        .permute(&[0, 1, 3, 2, 4, 5])?
        .reshape(&[n, gh * m, gw * m, c])?
        .crop2d(0, 0, *height, *width)
}

/// Component switches for the gated block.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BlockFeatures {
    pub ssm: bool,
    pub dconv: bool,
    pub gate: bool,
}

impl Default for BlockFeatures {
    fn default() -> Self {
        Self {
            ssm: true,
            dconv: true,
            gate: true,
        }
    }
}

#[derive(Debug, Clone)]
pub struct MambaBlockParams {
    pub norm: ParamId,
    /// `[C, 2 * inner]` with the gate, `[C, inner]` without.
    pub in_proj: ParamId,
    pub dconv: Option<(ParamId, ParamId)>,
    pub ssm: Option<SsmParameters>,
    pub out_proj: ParamId,
    pub channels: usize,
    pub inner: usize,
    pub gate: bool,
    pub rms_eps: f64,
}

pub const DCONV_KERNEL: usize = 4;
pub const RMS_EPS: f64 = 1e-6;

impl MambaBlockParams {
    pub fn init<T: Element>(
        store: &mut ParamStore<T>,
        prefix: &str,
        channels: usize,
        cfg: &SsmConfig,
        features: BlockFeatures,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        if channels == 0 || cfg.expansion == 0 {
            return Err(Error::invalid("mamba_block", "channels and expansion must be at least 1"));
        }
        let inner = cfg.expansion * channels;
        let norm = store.add(format!("{prefix}.norm.weight"), &[channels], vec![T::one(); channels])?;
        let proj_out = if features.gate { 2 * inner } else { inner };
        let in_proj = store.add(format!("{prefix}.in_proj.weight"), &[channels, proj_out], fan_in_uniform(rng, channels * proj_out, channels))?;
        let dconv = if features.dconv {
            let w = store.add(format!("{prefix}.conv1d.weight"), &[inner, DCONV_KERNEL], fan_in_uniform(rng, inner * DCONV_KERNEL, DCONV_KERNEL))?;
            let b = store.add(format!("{prefix}.conv1d.bias"), &[inner], vec![T::zero(); inner])?;
            Some((w, b))
        } else {
            None
        };
        let ssm = if features.ssm {
            Some(SsmParameters::init(store, &format!("{prefix}.ssm"), inner, cfg, rng)?)
        } else {
            None
        };
        let out_proj = store.add(format!("{prefix}.out_proj.weight"), &[inner, channels], fan_in_uniform(rng, inner * channels, inner))?;
        Ok(Self {
            norm,
            in_proj,
            dconv,
            ssm,
            out_proj,
            channels,
            inner,
            gate: features.gate,
            rms_eps: RMS_EPS,
        })
    }

    /// Gated block on token sequences `[S, L, C]`:
    /// `out(SSM(silu(dconv(main))) * silu(gate))` with both branches taken
    /// from one projection of `rmsnorm(z)`.
    pub fn forward<T: Element>(&self, store: &ParamStore<T>, z: &Tensor<T>) -> Result<Tensor<T>> {
        match z.shape() {
            &[_, l, c] if c == self.channels && l > 0 => {}
            other => return Err(Error::shape("mamba_block", other, &[0, 0, self.channels])),
        }
        let x = z.rms_norm(store.get(self.norm), self.rms_eps)?;
        let proj = x.linear(store.get(self.in_proj), None)?;
        let (main, gate) = if self.gate {
            (proj.slice(2, 0, self.inner)?, Some(proj.slice(2, self.inner, 2 * self.inner)?))
        } else {
            (proj, None)
        };
        let mut main = match self.dconv {
            Some((w, b)) => main.depthwise_conv1d(store.get(w), Some(store.get(b)))?,
            None => main,
        };
        main = main.silu();
        if let Some(ssm) = &self.ssm {
            main = ssm.selective_scan(store, &main)?;
        }
        if let Some(gate) = gate {
            main = main.mul(&gate.silu())?;
        }
        main.linear(store.get(self.out_proj), None)
    }
}

/// Partition, per-window gated block, reverse.
pub fn wssm_forward<T: Element>(store: &ParamStore<T>, block: &MambaBlockParams, z: &Tensor<T>, m: usize) -> Result<Tensor<T>> {
    let mut batch = window_partition(z, m)?;
    batch.windows = block.forward(store, &batch.windows)?;
    window_reverse(&batch)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn iota(shape: &[usize]) -> Tensor<f64> {
        let n: usize = shape.iter().product();
        Tensor::from_vec(shape, (0..n).map(|v| v as f64).collect()).unwrap()
    }

    #[test]
    fn partition_orders_windows_and_tokens_row_major() {
        let b = window_partition(&iota(&[1, 4, 4, 1]), 2).unwrap();
        assert_eq!(b.windows.shape(), &[4, 4, 1]);
        let expect = [0., 1., 4., 5., 2., 3., 6., 7., 8., 9., 12., 13., 10., 11., 14., 15.];
        assert_eq!(b.windows.data(), &expect);
    }

    #[test]
    fn partition_counts() {
        let b = window_partition(&Tensor::<f32>::zeros(&[1, 64, 64, 2]), 8).unwrap();
        assert_eq!(b.windows.shape(), &[64, 64, 2]);
        let single = window_partition(&iota(&[1, 3, 3, 1]), 3).unwrap();
        assert_eq!(single.windows.shape(), &[1, 9, 1]);
        assert_eq!(single.windows.data(), iota(&[1, 3, 3, 1]).data());
    }

    #[test]
    fn pad_path_roundtrip() {
        let z = iota(&[1, 5, 5, 1]);
        let b = window_partition(&z, 4).unwrap();
        assert_eq!((b.grid_h, b.grid_w), (2, 2));
        assert_eq!(window_reverse(&b).unwrap().data(), z.data());
    }

    #[test]
    fn reverse_rejects_bad_metadata() {
        let mut b = window_partition(&iota(&[1, 4, 4, 1]), 2).unwrap();
        b.grid_w = 3;
        assert!(window_reverse(&b).is_err());
    }

    #[test]
    fn zero_input_gives_zero_output() {
        let mut store = ParamStore::<f64>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let cfg = SsmConfig { state_size: 4, ..Default::default() };
        let block = MambaBlockParams::init(&mut store, "b", 3, &cfg, BlockFeatures::default(), &mut rng).unwrap();
        let z = Tensor::<f64>::zeros(&[1, 4, 4, 3]);
        let y = wssm_forward(&store, &block, &z, 2).unwrap();
        assert!(y.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn channel_mismatch_is_an_error() {
        let mut store = ParamStore::<f64>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let block = MambaBlockParams::init(&mut store, "b", 3, &SsmConfig::default(), BlockFeatures::default(), &mut rng).unwrap();
        assert!(block.forward(&store, &Tensor::zeros(&[1, 4, 2])).is_err());
    }
}
