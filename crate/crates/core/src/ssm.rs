//! Selective state space scan.
//!
//! For every channel `d` and state index `n` the scan runs
//!
//! ```text
//! Abar[t,d,n] = exp(delta[t,d] * A[d,n])
//! Bbar[t,d,n] = delta[t,d] * B[t,n]
//! h[t,d,n]    = Abar[t,d,n] * h[t-1,d,n] + Bbar[t,d,n] * u[t,d]
//! y[t,d]      = sum_n C[t,n] * h[t,d,n] + D[d] * u[t,d]
//! ```
//!
//! with `h[-1] = 0`. `delta`, `B` and `C` are computed per token from the
//! input, which makes the recurrence content dependent. `A` is stored as
//! `log(-A)` so it stays strictly negative under any update.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::{fan_in_uniform, uniform, ParamId, ParamStore};
use crate::tensor::{for_each_chunk, map_ranges, Element, Tensor};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SsmConfig {
    /// State size `N` per channel.
    pub state_size: usize,
    /// Inner width is `expansion * C`.
    pub expansion: usize,
    /// Rank of the delta projection; `None` means `ceil(inner / 16)`.
    pub dt_rank: Option<usize>,
    /// Add a second scan over the reversed token order.
    pub bidirectional: bool,
    pub dt_min: f64,
    pub dt_max: f64,
}

impl Default for SsmConfig {
    fn default() -> Self {
        Self {
            state_size: 16,
            expansion: 2,
            dt_rank: None,
            bidirectional: false,
            dt_min: 1e-3,
            dt_max: 1e-1,
        }
    }
}

impl SsmConfig {
    pub fn dt_rank_for(&self, inner: usize) -> usize {
        self.dt_rank.unwrap_or_else(|| inner.div_ceil(16)).max(1)
    }
}

/// Zero-order-hold discretization of `A` (`[C, N]`) and Euler-simplified
/// discretization of `B` (`[L, N]`) for per-token steps `delta` (`[L, C]`).
///
/// Returns `(Abar, Bbar)`, each `[L, C, N]` row-major.
pub fn discretize<T: Element>(
    a: &[T],
    b: &[T],
    delta: &[T],
    len: usize,
    channels: usize,
    state: usize,
) -> Result<(Vec<T>, Vec<T>)> {
    if a.len() != channels * state || b.len() != len * state || delta.len() != len * channels {
        return Err(Error::invalid(
            "discretize",
            format!(
                "expected A {}x{}, B {}x{}, delta {}x{}; got {}, {}, {} values",
                channels,
                state,
                len,
                state,
                len,
                channels,
                a.len(),
                b.len(),
                delta.len()
            ),
        ));
    }
    check_positive_delta("discretize", delta, true)?;
    let mut abar = Vec::with_capacity(len * channels * state);
    let mut bbar = Vec::with_capacity(len * channels * state);
    for t in 0..len {
        for d in 0..channels {
            let dt = delta[t * channels + d];
            for n in 0..state {
                abar.push((dt * a[d * state + n]).exp());
                bbar.push(dt * b[t * state + n]);
            }
        }
    }
    Ok((abar, bbar))
}

/// Rejects `delta <= 0`; NaN is rejected only when `reject_nan` is set so a
/// poisoned forward pass inside training surfaces as a non-finite loss.
fn check_positive_delta<T: Element>(op: &'static str, delta: &[T], reject_nan: bool) -> Result<()> {
    if let Some(pos) = delta.iter().position(|&v| v <= T::zero() || (reject_nan && v.is_nan())) {
        return Err(Error::invalid(
            op,
            format!("delta must be strictly positive, found {} at index {pos}", delta[pos]),
        ));
    }
    Ok(())
}

/// The selective scan as one differentiable operation.
///
/// Shapes: `u`, `delta`: `[S, L, D]`; `a_log`: `[D, N]`; `b`, `c`: `[S, L, N]`;
/// `d`: `[D]`. Each of the `S` sequences starts from a zero state. Rank-2
/// inputs (`[L, D]`, `[L, N]`) are treated as a single sequence.
pub fn scan<T: Element>(
    u: &Tensor<T>,
    delta: &Tensor<T>,
    a_log: &Tensor<T>,
    b: &Tensor<T>,
    c: &Tensor<T>,
    d: &Tensor<T>,
) -> Result<Tensor<T>> {
    let &[dim, state] = a_log.shape() else {
        return Err(Error::invalid("selective_scan", format!("A must be [D, N], got {:?}", a_log.shape())));
    };
    let (seqs, len) = match u.shape() {
        &[l, dd] if dd == dim => (1, l),
        &[s, l, dd] if dd == dim => (s, l),
        other => return Err(Error::shape("selective_scan", other, a_log.shape())),
    };
    if len == 0 {
        return Err(Error::invalid("selective_scan", "sequence length must be at least 1"));
    }
    if delta.shape() != u.shape() {
        return Err(Error::shape("selective_scan", u.shape(), delta.shape()));
    }
    let mut bc_shape = u.shape().to_vec();
    *bc_shape.last_mut().unwrap() = state;
    for m in [b, c] {
        if m.shape() != bc_shape.as_slice() {
            return Err(Error::shape("selective_scan", &bc_shape, m.shape()));
        }
    }
    if d.shape() != [dim] {
        return Err(Error::shape("selective_scan", &[dim], d.shape()));
    }
    check_positive_delta("selective_scan", delta.data(), false)?;

    let a: Vec<T> = a_log.data().iter().map(|&v| -v.exp()).collect();
    let (ud, dd, bd, cd, skip) = (u.data(), delta.data(), b.data(), c.data(), d.data());
    let (tok, stok) = (len * dim, len * state);

    let mut out = vec![T::zero(); seqs * tok];
    for_each_chunk(&mut out, tok, |s, y| {
        let mut h = vec![T::zero(); dim * state];
        let (us, ds, bs, cs) = (&ud[s * tok..][..tok], &dd[s * tok..][..tok], &bd[s * stok..][..stok], &cd[s * stok..][..stok]);
        for t in 0..len {
            let (bt, ct) = (&bs[t * state..][..state], &cs[t * state..][..state]);
            for ch in 0..dim {
                let (dt, ut) = (ds[t * dim + ch], us[t * dim + ch]);
                let hrow = &mut h[ch * state..][..state];
                let arow = &a[ch * state..][..state];
                let mut acc = T::zero();
                for n in 0..state {
                    hrow[n] = (dt * arow[n]).exp() * hrow[n] + dt * bt[n] * ut;
                    acc = acc + ct[n] * hrow[n];
                }
                y[t * dim + ch] = acc + skip[ch] * ut;
            }
        }
    });

    let parents = vec![u.clone(), delta.clone(), a_log.clone(), b.clone(), c.clone(), d.clone()];
    let saved = parents.clone();
    Ok(Tensor::from_op(
        "selective_scan",
        u.shape().to_vec(),
        out,
        parents,
        Box::new(move |g, _| {
            let [u, delta, _, b, c, d] = &saved[..] else { unreachable!() };
            let grads = scan_backward(g, u.data(), delta.data(), &a, b.data(), c.data(), d.data(), (seqs, len, dim, state));
            let ScanGrads { gu, gdelta, ga, gb, gc, gd } = grads;
            // A = -exp(a_log)  =>  dA/da_log = A
            let ga_log: Vec<T> = ga.iter().zip(&a).map(|(&g, &av)| g * av).collect();
            vec![Some(gu), Some(gdelta), Some(ga_log), Some(gb), Some(gc), Some(gd)]
        }),
    ))
}

struct ScanGrads<T> {
    gu: Vec<T>,
    gdelta: Vec<T>,
    ga: Vec<T>,
    gb: Vec<T>,
    gc: Vec<T>,
    gd: Vec<T>,
}

/// Reverse sweep of the recurrence. States are recomputed per sequence so
/// memory stays at one sequence's `L x D x N` history per worker.
#[allow(clippy::too_many_arguments)]
fn scan_backward<T: Element>(
    g: &[T],
    u: &[T],
    delta: &[T],
    a: &[T],
    b: &[T],
    c: &[T],
    skip: &[T],
    (seqs, len, dim, state): (usize, usize, usize, usize),
) -> ScanGrads<T> {
    let (tok, stok, dn) = (len * dim, len * state, dim * state);
    const SEQS_PER_CHUNK: usize = 4;
    let parts = map_ranges(seqs, SEQS_PER_CHUNK, |range| {
        let count = range.len();
        let mut gu = vec![T::zero(); count * tok];
        let mut gdelta = vec![T::zero(); count * tok];
        let mut gb = vec![T::zero(); count * stok];
        let mut gc = vec![T::zero(); count * stok];
        let mut ga = vec![T::zero(); dn];
        let mut gd = vec![T::zero(); dim];
        // hs[t + 1] = h_t, hs[0] = 0; da[t] = Abar_t
        let mut hs = vec![T::zero(); (len + 1) * dn];
        let mut da = vec![T::zero(); len * dn];
        let mut carry = vec![T::zero(); dn];

        for (local, s) in range.enumerate() {
            let (us, ds, bs, cs, gs) = (
                &u[s * tok..][..tok],
                &delta[s * tok..][..tok],
                &b[s * stok..][..stok],
                &c[s * stok..][..stok],
                &g[s * tok..][..tok],
            );
            for t in 0..len {
                let bt = &bs[t * state..][..state];
                for ch in 0..dim {
                    let (dt, ut) = (ds[t * dim + ch], us[t * dim + ch]);
                    for n in 0..state {
                        let k = ch * state + n;
                        let abar = (dt * a[k]).exp();
                        da[t * dn + k] = abar;
                        hs[(t + 1) * dn + k] = abar * hs[t * dn + k] + dt * bt[n] * ut;
                    }
                }
            }

            carry.fill(T::zero());
            let (gu_s, gdelta_s) = (&mut gu[local * tok..][..tok], &mut gdelta[local * tok..][..tok]);
            let (gb_s, gc_s) = (&mut gb[local * stok..][..stok], &mut gc[local * stok..][..stok]);
            for t in (0..len).rev() {
                let (bt, ct) = (&bs[t * state..][..state], &cs[t * state..][..state]);
                for ch in 0..dim {
                    let i = t * dim + ch;
                    let (gy, dt, ut) = (gs[i], ds[i], us[i]);
                    gd[ch] = gd[ch] + gy * ut;
                    let mut gu_acc = gy * skip[ch];
                    let mut gdt_acc = T::zero();
                    for n in 0..state {
                        let k = ch * state + n;
                        let h_t = hs[(t + 1) * dn + k];
                        let h_prev = hs[t * dn + k];
                        let abar = da[t * dn + k];
                        gc_s[t * state + n] = gc_s[t * state + n] + gy * h_t;
                        let gh = gy * ct[n] + carry[k];
                        let g_abar = gh * h_prev * abar;
                        gdt_acc = gdt_acc + g_abar * a[k] + gh * bt[n] * ut;
                        ga[k] = ga[k] + g_abar * dt;
                        gb_s[t * state + n] = gb_s[t * state + n] + gh * dt * ut;
                        gu_acc = gu_acc + gh * dt * bt[n];
                        carry[k] = gh * abar;
                    }
                    gu_s[i] = gu_acc;
                    gdelta_s[i] = gdt_acc;
                }
            }
        }
        ScanGrads { gu, gdelta, ga, gb, gc, gd }
    });

    let mut total = ScanGrads {
        gu: Vec::with_capacity(seqs * tok),
        gdelta: Vec::with_capacity(seqs * tok),
        ga: vec![T::zero(); dn],
        gb: Vec::with_capacity(seqs * stok),
        gc: Vec::with_capacity(seqs * stok),
        gd: vec![T::zero(); dim],
    };
    for p in parts {
        total.gu.extend(p.gu);
        total.gdelta.extend(p.gdelta);
        total.gb.extend(p.gb);
        total.gc.extend(p.gc);
        total.ga.iter_mut().zip(&p.ga).for_each(|(x, &y)| *x = *x + y);
        total.gd.iter_mut().zip(&p.gd).for_each(|(x, &y)| *x = *x + y);
    }
    total
}

/// Input-dependent SSM parameters for one block: projections producing
/// `(delta seed, B, C)` per token plus the static `A` and skip gains `D`.
#[derive(Debug, Clone)]
pub struct SsmParameters {
    /// `[inner, dt_rank + 2N]`, bias-free.
    pub x_proj: ParamId,
    /// `[dt_rank, inner]`.
    pub dt_proj_weight: ParamId,
    /// `[inner]`; initialised so `softplus(bias)` is log-uniform in `[dt_min, dt_max]`.
    pub dt_proj_bias: ParamId,
    /// `log(-A)`, `[inner, N]`.
    pub a_log: ParamId,
    /// `[inner]`
    pub d: ParamId,
    pub inner: usize,
    pub state_size: usize,
    pub dt_rank: usize,
    pub bidirectional: bool,
}

impl SsmParameters {
    pub fn init<T: Element>(
        store: &mut ParamStore<T>,
        prefix: &str,
        inner: usize,
        cfg: &SsmConfig,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        let n = cfg.state_size;
        let rank = cfg.dt_rank_for(inner);
        if n == 0 {
            return Err(Error::invalid("ssm", "state size must be at least 1"));
        }
        if !(cfg.dt_min > 0.0 && cfg.dt_max >= cfg.dt_min) {
            return Err(Error::invalid("ssm", format!("bad delta range [{}, {}]", cfg.dt_min, cfg.dt_max)));
        }
        let x_proj = store.add(format!("{prefix}.x_proj.weight"), &[inner, rank + 2 * n], fan_in_uniform(rng, inner * (rank + 2 * n), inner))?;
        let dt_proj_weight = store.add(format!("{prefix}.dt_proj.weight"), &[rank, inner], uniform(rng, rank * inner, (rank as f64).powf(-0.5)))?;
        let (lo, hi) = (cfg.dt_min.ln(), cfg.dt_max.ln());
        let dt_bias: Vec<T> = (0..inner)
            .map(|_| {
                let dt = if hi > lo { rng.random_range(lo..hi).exp() } else { cfg.dt_min };
                T::from_f64(inverse_softplus(dt.max(1e-4)))
            })
            .collect();
        let dt_proj_bias = store.add(format!("{prefix}.dt_proj.bias"), &[inner], dt_bias)?;
        // S4D-real: A[:, n] = -(n + 1)
        let a_log: Vec<T> = (0..inner).flat_map(|_| (0..n).map(|j| T::from_f64(((j + 1) as f64).ln()))).collect();
        let a_log = store.add(format!("{prefix}.a_log"), &[inner, n], a_log)?;
        let d = store.add(format!("{prefix}.d"), &[inner], vec![T::one(); inner])?;
        Ok(Self {
            x_proj,
            dt_proj_weight,
            dt_proj_bias,
            a_log,
            d,
            inner,
            state_size: n,
            dt_rank: rank,
            bidirectional: cfg.bidirectional,
        })
    }

    /// Per-token `(delta, B, C)` for tokens `u` (`[S, L, inner]`).
    pub fn project<T: Element>(&self, store: &ParamStore<T>, u: &Tensor<T>) -> Result<(Tensor<T>, Tensor<T>, Tensor<T>)> {
        let axis = u.ndim().checked_sub(1).ok_or_else(|| Error::invalid("selective_scan", "scalar input"))?;
        let (r, n) = (self.dt_rank, self.state_size);
        let x_dbl = u.linear(store.get(self.x_proj), None)?;
        let dt_seed = x_dbl.slice(axis, 0, r)?;
        let b = x_dbl.slice(axis, r, r + n)?;
        let c = x_dbl.slice(axis, r + n, r + 2 * n)?;
        let delta = dt_seed
            .linear(store.get(self.dt_proj_weight), Some(store.get(self.dt_proj_bias)))?
            .softplus();
        Ok((delta, b, c))
    }

    /// Selective scan of `u` (`[S, L, inner]` or `[L, inner]`).
    pub fn selective_scan<T: Element>(&self, store: &ParamStore<T>, u: &Tensor<T>) -> Result<Tensor<T>> {
        let (delta, b, c) = self.project(store, u)?;
        let (a_log, d) = (store.get(self.a_log), store.get(self.d));
        let y = scan(u, &delta, a_log, &b, &c, d)?;
        if !self.bidirectional {
            return Ok(y);
        }
        let axis = u.ndim() - 2;
        let rev = scan(&u.flip(axis)?, &delta.flip(axis)?, a_log, &b.flip(axis)?, &c.flip(axis)?, d)?;
        y.add(&rev.flip(axis)?)
    }

    pub fn param_ids(&self) -> [ParamId; 5] {
        [self.x_proj, self.dt_proj_weight, self.dt_proj_bias, self.a_log, self.d]
    }
}

fn inverse_softplus(y: f64) -> f64 {
    y + (-(-y).exp_m1()).ln()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], v: &[f64]) -> Tensor<f64> {
        Tensor::from_f64(shape, v).unwrap()
    }

    #[test]
    fn discretize_half_decay() {
        let (abar, bbar) = discretize(&[-std::f64::consts::LN_2], &[3.0], &[1.0], 1, 1, 1).unwrap();
        assert!((abar[0] - 0.5).abs() < 1e-15);
        assert_eq!(bbar[0], 3.0);
    }

    #[test]
    fn discretize_small_step_limit() {
        let (abar, bbar) = discretize::<f64>(&[-2.0], &[5.0], &[1e-12], 1, 1, 1).unwrap();
        assert!((abar[0] - 1.0).abs() < 1e-11);
        assert!(bbar[0].abs() < 1e-10);
    }

    #[test]
    fn discretize_rejects_non_positive_delta() {
        assert!(discretize(&[-1.0], &[1.0], &[0.0], 1, 1, 1).is_err());
        assert!(discretize(&[-1.0], &[1.0], &[f64::NAN], 1, 1, 1).is_err());
    }

    #[test]
    fn two_step_unroll() {
        // Abar = 0.5 (A = -ln 2, delta = 1), Bbar = 1, C = 1, D = 0
        let a_log = t(&[1, 1], &[std::f64::consts::LN_2.ln()]);
        let y = scan(
            &t(&[2, 1], &[1.0, 1.0]),
            &t(&[2, 1], &[1.0, 1.0]),
            &a_log,
            &t(&[2, 1], &[1.0, 1.0]),
            &t(&[2, 1], &[1.0, 1.0]),
            &t(&[1], &[0.0]),
        )
        .unwrap();
        assert!((y.data()[0] - 1.0).abs() < 1e-15);
        assert!((y.data()[1] - 1.5).abs() < 1e-15);
    }

    #[test]
    fn memoryless_when_abar_vanishes() {
        // A very negative with delta = 1 gives Abar = exp(-1e4) = 0; keep Bbar = 1.
        let a_log = t(&[1, 1], &[1e4f64.ln()]);
        let u = [0.3, -1.2, 2.5, 0.7];
        let y = scan(
            &t(&[4, 1], &u),
            &t(&[4, 1], &[1.0; 4]),
            &a_log,
            &t(&[4, 1], &[1.0; 4]),
            &t(&[4, 1], &[1.0; 4]),
            &t(&[1], &[0.0]),
        )
        .unwrap();
        assert_eq!(y.data(), &u);
    }

    #[test]
    fn empty_sequence_rejected() {
        let z = |s: &[usize]| Tensor::<f64>::zeros(s);
        assert!(scan(&z(&[0, 2]), &z(&[0, 2]), &z(&[2, 3]), &z(&[0, 3]), &z(&[0, 3]), &z(&[2])).is_err());
    }

    #[test]
    fn default_ranks() {
        let cfg = SsmConfig::default();
        assert_eq!(cfg.dt_rank_for(128), 8);
        assert_eq!(cfg.dt_rank_for(130), 9);
        assert_eq!(cfg.dt_rank_for(16), 1);
    }

    #[test]
    fn dt_bias_lands_in_range() {
        let mut store = ParamStore::<f64>::new();
        let mut rng = <ChaCha8Rng as rand::SeedableRng>::seed_from_u64(3);
        let p = SsmParameters::init(&mut store, "ssm", 32, &SsmConfig::default(), &mut rng).unwrap();
        for &b in store.get(p.dt_proj_bias).data() {
            let dt = b.exp().ln_1p();
            assert!((1e-3 - 1e-12..=1e-1 + 1e-12).contains(&dt), "{dt}");
        }
        assert!(store.get(p.a_log).data().iter().all(|v| v.is_finite()));
    }
}
