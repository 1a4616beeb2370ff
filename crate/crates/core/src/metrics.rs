//! Paired and reference-free image quality metrics on [`HsiCube`]s.
//!
//! All arithmetic is `f64`. SSIM and UQI are computed per band and averaged
//! over bands.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::cube::HsiCube;
use crate::error::{Error, Result};

pub const AG_FORMULA: &str = "mean sqrt((gx^2 + gy^2) / 2), forward differences";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricConfig {
    pub peak: f64,
    pub ssim_window: usize,
    pub ssim_sigma: f64,
    pub k1: f64,
    pub k2: f64,
    pub uqi_block: usize,
    pub ag_formula: String,
}

impl Default for MetricConfig {
    fn default() -> Self {
        Self {
            peak: 1.0,
            ssim_window: 11,
            ssim_sigma: 1.5,
            k1: 0.01,
            k2: 0.03,
            uqi_block: 8,
            ag_formula: AG_FORMULA.into(),
        }
    }
}

fn check_pair(op: &'static str, a: &HsiCube, b: &HsiCube) -> Result<()> {
    if !a.same_shape(b) {
        return Err(Error::shape(op, &[a.height, a.width, a.bands], &[b.height, b.width, b.bands]));
    }
    Ok(())
}

fn mse(a: &[f32], b: &[f32]) -> f64 {
    a.iter().zip(b).map(|(&x, &y)| (x as f64 - y as f64).powi(2)).sum::<f64>() / a.len() as f64
}

fn psnr_from_mse(mse: f64, peak: f64) -> f64 {
    if mse == 0.0 {
        f64::INFINITY
    } else {
        10.0 * (peak * peak / mse).log10()
    }
}

/// `10 log10(peak^2 / MSE)` over all voxels; `+inf` when the cubes are equal.
pub fn psnr(a: &HsiCube, b: &HsiCube, peak: f64) -> Result<f64> {
    check_pair("psnr", a, b)?;
    Ok(psnr_from_mse(mse(&a.data, &b.data), peak))
}

pub fn psnr_per_band(a: &HsiCube, b: &HsiCube, peak: f64) -> Result<Vec<f64>> {
    check_pair("psnr", a, b)?;
    Ok((0..a.bands).map(|k| psnr_from_mse(mse(a.band(k), b.band(k)), peak)).collect())
}

/// Normalized 1-d Gaussian; the 2-d window is its outer product.
pub fn gaussian_kernel(size: usize, sigma: f64) -> Vec<f64> {
    let c = (size as f64 - 1.0) / 2.0;
    let k: Vec<f64> = (0..size).map(|i| (-((i as f64 - c).powi(2)) / (2.0 * sigma * sigma)).exp()).collect();
    let s: f64 = k.iter().sum();
    k.into_iter().map(|v| v / s).collect()
}

/// Valid-mode separable filter of a `h x w` plane.
fn filter_valid(x: &[f64], h: usize, w: usize, k: &[f64]) -> Vec<f64> {
    let n = k.len();
    let (oh, ow) = (h - n + 1, w - n + 1);
    let mut rows = vec![0.0; h * ow];
    for y in 0..h {
        for ox in 0..ow {
            rows[y * ow + ox] = k.iter().enumerate().map(|(j, kv)| kv * x[y * w + ox + j]).sum();
        }
    }
    let mut out = vec![0.0; oh * ow];
    for oy in 0..oh {
        for ox in 0..ow {
            out[oy * ow + ox] = k.iter().enumerate().map(|(j, kv)| kv * rows[(oy + j) * ow + ox]).sum();
        }
    }
    out
}

fn ssim_band(a: &[f32], b: &[f32], h: usize, w: usize, cfg: &MetricConfig, k: &[f64]) -> f64 {
    let c1 = (cfg.k1 * cfg.peak).powi(2);
    let c2 = (cfg.k2 * cfg.peak).powi(2);
    let x: Vec<f64> = a.iter().map(|&v| v as f64).collect();
    let y: Vec<f64> = b.iter().map(|&v| v as f64).collect();
    let prod = |p: &[f64], q: &[f64]| p.iter().zip(q).map(|(u, v)| u * v).collect::<Vec<f64>>();
    let mx = filter_valid(&x, h, w, k);
    let my = filter_valid(&y, h, w, k);
    let sxx = filter_valid(&prod(&x, &x), h, w, k);
    let syy = filter_valid(&prod(&y, &y), h, w, k);
    let sxy = filter_valid(&prod(&x, &y), h, w, k);
    let total: f64 = (0..mx.len())
        .map(|i| {
            let (ux, uy) = (mx[i], my[i]);
            let (vx, vy, cxy) = (sxx[i] - ux * ux, syy[i] - uy * uy, sxy[i] - ux * uy);
            ((2.0 * ux * uy + c1) * (2.0 * cxy + c2)) / ((ux * ux + uy * uy + c1) * (vx + vy + c2))
        })
        .sum();
    total / mx.len() as f64
}

/// Per-band SSIM with a Gaussian window, no padding.
pub fn ssim_per_band(a: &HsiCube, b: &HsiCube, cfg: &MetricConfig) -> Result<Vec<f64>> {
    check_pair("ssim", a, b)?;
    let n = cfg.ssim_window;
    if n == 0 || a.height < n || a.width < n {
        return Err(Error::invalid(
            "ssim",
            format!("{}x{} image is smaller than the {n}x{n} window", a.height, a.width),
        ));
    }
    let k = gaussian_kernel(n, cfg.ssim_sigma);
    Ok((0..a.bands)
        .into_par_iter()
        .map(|band| ssim_band(a.band(band), b.band(band), a.height, a.width, cfg, &k))
        .collect())
}

pub fn ssim(a: &HsiCube, b: &HsiCube, cfg: &MetricConfig) -> Result<f64> {
    let per = ssim_per_band(a, b, cfg)?;
    Ok(per.iter().sum::<f64>() / per.len() as f64)
}

const DEGENERATE: f64 = 1e-24;

/// Universal quality index over sliding `block x block` windows (stride 1).
/// Blocks with a vanishing denominator are skipped.
pub fn uqi(a: &HsiCube, b: &HsiCube, block: usize) -> Result<f64> {
    check_pair("uqi", a, b)?;
    if block == 0 || a.height < block || a.width < block {
        return Err(Error::invalid("uqi", format!("{}x{} image is smaller than the {block}x{block} block", a.height, a.width)));
    }
    let (h, w) = (a.height, a.width);
    let per_band: Vec<Option<f64>> = (0..a.bands)
        .into_par_iter()
        .map(|band| {
            let (pa, pb) = (a.band(band), b.band(band));
            let n = (block * block) as f64;
            let (mut sum, mut count) = (0.0, 0usize);
            for y0 in 0..=h - block {
                for x0 in 0..=w - block {
                    let idx = || (y0..y0 + block).flat_map(move |y| (x0..x0 + block).map(move |x| y * w + x));
                    let ma = idx().map(|i| pa[i] as f64).sum::<f64>() / n;
                    let mb = idx().map(|i| pb[i] as f64).sum::<f64>() / n;
                    let (mut va, mut vb, mut cab) = (0.0, 0.0, 0.0);
                    for i in idx() {
                        let (da, db) = (pa[i] as f64 - ma, pb[i] as f64 - mb);
                        va += da * da;
                        vb += db * db;
                        cab += da * db;
                    }
                    let (va, vb, cab) = (va / n, vb / n, cab / n);
                    let (s2, m2) = (va + vb, ma * ma + mb * mb);
                    if s2 <= DEGENERATE || m2 <= DEGENERATE {
                        continue;
                    }
                    sum += 4.0 * cab * ma * mb / (s2 * m2);
                    count += 1;
                }
            }
            (count > 0).then(|| sum / count as f64)
        })
        .collect();
    let valid: Vec<f64> = per_band.into_iter().flatten().collect();
    if valid.is_empty() {
        return Err(Error::invalid("uqi", "every block is degenerate"));
    }
    Ok(valid.iter().sum::<f64>() / valid.len() as f64)
}

/// Angle between two spectra via `2 atan2(|u - v|, |u + v|)` on unit vectors,
/// which stays accurate near 0. `None` if either spectrum is all zero.
pub fn spectral_angle(s: &[f64], t: &[f64]) -> Option<f64> {
    let ns = s.iter().map(|v| v * v).sum::<f64>().sqrt();
    let nt = t.iter().map(|v| v * v).sum::<f64>().sqrt();
    if ns == 0.0 || nt == 0.0 {
        return None;
    }
    let (mut d, mut p) = (0.0, 0.0);
    for (a, b) in s.iter().zip(t) {
        let (u, v) = (a / ns, b / nt);
        d += (u - v) * (u - v);
        p += (u + v) * (u + v);
    }
    Some(2.0 * d.sqrt().atan2(p.sqrt()))
}

/// Mean spectral angle (radians) over pixels where both spectra are nonzero.
pub fn sam(a: &HsiCube, b: &HsiCube) -> Result<f64> {
    check_pair("sam", a, b)?;
    if a.bands < 2 {
        return Err(Error::invalid("sam", "needs at least two bands"));
    }
    let (mut sum, mut count) = (0.0, 0usize);
    let (mut s, mut t) = (vec![0.0; a.bands], vec![0.0; a.bands]);
    for p in 0..a.plane_len() {
        for k in 0..a.bands {
            s[k] = a.band(k)[p] as f64;
            t[k] = b.band(k)[p] as f64;
        }
        if let Some(angle) = spectral_angle(&s, &t) {
            sum += angle;
            count += 1;
        }
    }
    if count == 0 {
        return Err(Error::invalid("sam", "every pixel has a zero spectrum"));
    }
    Ok(sum / count as f64)
}

/// Average gradient, see [`AG_FORMULA`].
pub fn avg_gradient(a: &HsiCube) -> Result<f64> {
    let (h, w) = (a.height, a.width);
    if h < 2 || w < 2 {
        return Err(Error::invalid("avg_gradient", format!("needs at least 2x2 pixels, got {h}x{w}")));
    }
    let mut sum = 0.0;
    for k in 0..a.bands {
        let p = a.band(k);
        for y in 0..h - 1 {
            for x in 0..w - 1 {
                let v = p[y * w + x] as f64;
                let gx = p[y * w + x + 1] as f64 - v;
                let gy = p[(y + 1) * w + x] as f64 - v;
                sum += ((gx * gx + gy * gy) / 2.0).sqrt();
            }
        }
    }
    Ok(sum / (a.bands * (h - 1) * (w - 1)) as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BandRow {
    pub wavelength_nm: f64,
    pub ssim: f64,
    /// `None` when the band is reproduced exactly.
    pub psnr_db: Option<f64>,
}

pub fn bandwise_curves(a: &HsiCube, b: &HsiCube, cfg: &MetricConfig) -> Result<Vec<BandRow>> {
    let s = ssim_per_band(a, b, cfg)?;
    let p = psnr_per_band(a, b, cfg.peak)?;
    Ok(a.wavelengths_nm
        .iter()
        .zip(s.into_iter().zip(p))
        .map(|(&wavelength_nm, (ssim, psnr))| BandRow {
            wavelength_nm,
            ssim,
            psnr_db: psnr.is_finite().then_some(psnr),
        })
        .collect())
}

/// `(wavelength, value)` at column `x`, row `y`.
pub fn extract_spectrum(cube: &HsiCube, x: usize, y: usize) -> Result<Vec<(f64, f64)>> {
    if x >= cube.width || y >= cube.height {
        return Err(Error::invalid(
            "extract_spectrum",
            format!("pixel ({x}, {y}) outside {}x{}", cube.width, cube.height),
        ));
    }
    Ok((0..cube.bands).map(|k| (cube.wavelengths_nm[k], cube.get(k, y, x) as f64)).collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub ssim: f64,
    pub psnr_db: Option<f64>,
    pub identical: bool,
    pub uqi: f64,
    pub sam_rad: f64,
    pub ag: f64,
    pub ag_reference: f64,
    pub bands: Vec<BandRow>,
    pub config: MetricConfig,
}

impl MetricReport {
    /// Scores `test` against `reference`.
    pub fn compute(reference: &HsiCube, test: &HsiCube, cfg: &MetricConfig) -> Result<Self> {
        let bands = bandwise_curves(reference, test, cfg)?;
        let p = psnr(reference, test, cfg.peak)?;
        Ok(Self {
            ssim: bands.iter().map(|r| r.ssim).sum::<f64>() / bands.len() as f64,
            psnr_db: p.is_finite().then_some(p),
            identical: p.is_infinite(),
            uqi: uqi(reference, test, cfg.uqi_block)?,
            sam_rad: sam(reference, test)?,
            ag: avg_gradient(test)?,
            ag_reference: avg_gradient(reference)?,
            bands,
            config: cfg.clone(),
        })
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn bands_csv(&self) -> String {
        bands_csv(&self.bands)
    }
}

fn fmt_psnr(p: Option<f64>) -> String {
    p.map_or_else(|| "inf".to_string(), |v| format!("{v}"))
}

pub fn bands_csv(rows: &[BandRow]) -> String {
    let mut s = String::from("wavelength_nm,ssim,psnr_db\n");
    for r in rows {
        s += &format!("{},{},{}\n", r.wavelength_nm, r.ssim, fmt_psnr(r.psnr_db));
    }
    s
}

/// One row per wavelength, one value column per named spectrum.
pub fn spectra_csv(names: &[String], spectra: &[Vec<(f64, f64)>]) -> Result<String> {
    let Some(first) = spectra.first() else {
        return Ok(String::from("wavelength_nm\n"));
    };
    if names.len() != spectra.len() || spectra.iter().any(|s| s.len() != first.len()) {
        return Err(Error::invalid("spectra_csv", "names and spectra must line up"));
    }
    let mut s = format!("wavelength_nm,{}\n", names.join(","));
    for (i, (wl, _)) in first.iter().enumerate() {
        s += &wl.to_string();
        for sp in spectra {
            s += &format!(",{}", sp[i].1);
        }
        s.push('\n');
    }
    Ok(s)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cube(w: usize, h: usize, bands: usize, f: impl Fn(usize, usize, usize) -> f32) -> HsiCube {
        let mut data = Vec::with_capacity(w * h * bands);
        for b in 0..bands {
            for y in 0..h {
                for x in 0..w {
                    data.push(f(b, y, x));
                }
            }
        }
        HsiCube::new(w, h, crate::cube::default_wavelengths(bands), data).unwrap()
    }

    #[test]
    fn psnr_spot_values() {
        let a = cube(4, 4, 2, |_, _, _| 0.5);
        let b = cube(4, 4, 2, |_, _, _| 0.6);
        let p = psnr(&a, &b, 1.0).unwrap();
        assert!((p - 20.0).abs() < 1e-5, "{p}");
        assert!(psnr(&a, &a, 1.0).unwrap().is_infinite());
    }

    #[test]
    fn ssim_identity_and_window_guard() {
        let a = cube(12, 12, 2, |b, y, x| ((x * 7 + y * 3 + b) % 5) as f32 / 5.0);
        assert!((ssim(&a, &a, &MetricConfig::default()).unwrap() - 1.0).abs() < 1e-12);
        let small = cube(10, 12, 1, |_, _, _| 0.0);
        assert!(ssim(&small, &small, &MetricConfig::default()).is_err());
    }

    #[test]
    fn ssim_constants_reduce_to_luminance() {
        let (u, v) = (0.3f32, 0.5f32);
        let a = cube(11, 11, 1, |_, _, _| u);
        let b = cube(11, 11, 1, |_, _, _| v);
        let c1 = 1e-4;
        let (u, v) = (u as f64, v as f64);
        let expect = (2.0 * u * v + c1) / (u * u + v * v + c1);
        assert!((ssim(&a, &b, &MetricConfig::default()).unwrap() - expect).abs() < 1e-12);
    }

    #[test]
    fn ssim_of_inverted_binary_is_negative() {
        let a = cube(16, 16, 1, |_, y, x| ((x / 2 + y / 3) % 2) as f32);
        let b = cube(16, 16, 1, |_, y, x| 1.0 - ((x / 2 + y / 3) % 2) as f32);
        assert!(ssim(&a, &b, &MetricConfig::default()).unwrap() < 0.0);
    }

    #[test]
    fn uqi_identities() {
        let a = cube(8, 8, 1, |_, y, x| 0.5 + 0.01 * (x * x) as f32 - 0.02 * y as f32);
        assert!((uqi(&a, &a, 8).unwrap() - 1.0).abs() < 1e-12);
        // mirror about the block mean: same mean and variance, covariance -var
        let mean = a.data.iter().map(|&v| v as f64).sum::<f64>() / 64.0;
        let b = HsiCube::new(8, 8, a.wavelengths_nm.clone(), a.data.iter().map(|&v| (2.0 * mean - v as f64) as f32).collect()).unwrap();
        assert!((uqi(&a, &b, 8).unwrap() + 1.0).abs() < 1e-6);
        let flat = cube(8, 8, 1, |_, _, _| 0.0);
        assert!(uqi(&flat, &flat, 8).is_err());
    }

    #[test]
    fn sam_identities() {
        let a = cube(1, 1, 2, |b, _, _| if b == 0 { 1.0 } else { 0.0 });
        let b = cube(1, 1, 2, |b, _, _| if b == 1 { 1.0 } else { 0.0 });
        assert!((sam(&a, &b).unwrap() - std::f64::consts::FRAC_PI_2).abs() < 1e-12);
        let c = cube(3, 2, 4, |b, y, x| (1 + b + y * x) as f32 / 10.0);
        assert_eq!(sam(&c, &c).unwrap(), 0.0);
        let scaled = HsiCube::new(3, 2, c.wavelengths_nm.clone(), c.data.iter().map(|v| v * 2.5).collect()).unwrap();
        assert!(sam(&c, &scaled).unwrap() < 1e-7);
        let zero = cube(3, 2, 4, |_, _, _| 0.0);
        assert!(sam(&zero, &c).is_err());
    }

    #[test]
    fn avg_gradient_ramp_and_constant() {
        let ramp = cube(6, 5, 2, |_, _, x| x as f32);
        assert!((avg_gradient(&ramp).unwrap() - 0.5f64.sqrt()).abs() < 1e-12);
        assert_eq!(avg_gradient(&cube(6, 5, 2, |_, _, _| 0.4)).unwrap(), 0.0);
    }

    #[test]
    fn spectrum_and_curves() {
        let c = cube(12, 11, 3, |b, y, x| (b * 100 + y * 12 + x) as f32 / 400.0);
        let s = extract_spectrum(&c, 0, 0).unwrap();
        assert_eq!(s.iter().map(|r| r.1).collect::<Vec<_>>(), vec![0.0, 0.25, 0.5]);
        assert!(extract_spectrum(&c, 12, 0).is_err());
        let rows = bandwise_curves(&c, &c, &MetricConfig::default()).unwrap();
        assert!(rows.iter().all(|r| (r.ssim - 1.0).abs() < 1e-12 && r.psnr_db.is_none()));
        assert!(bands_csv(&rows).ends_with(",inf\n"));
    }

    #[test]
    fn report_on_identical_cubes() {
        let c = cube(12, 12, 3, |b, y, x| 0.1 + ((b + y * 5 + x * 3) % 7) as f32 / 10.0);
        let r = MetricReport::compute(&c, &c, &MetricConfig::default()).unwrap();
        assert!(r.identical && r.psnr_db.is_none());
        assert_eq!(r.sam_rad, 0.0);
        assert!((r.uqi - 1.0).abs() < 1e-12);
        let json: serde_json::Value = serde_json::from_str(&r.to_json().unwrap()).unwrap();
        assert_eq!(json["config"]["ssim_window"], 11);
    }
}
