//! Synthetic hazy/clean pair generation.
//!
//! Clean scenes are Voronoi mosaics of a few materials with smooth spectral
//! signatures plus mild texture. Haze is additive path radiance
//! `alpha * (lambda0 / lambda)^gamma * T(x, y)` on top of the clean
//! reflectance, clipped to `[0, 1]`, where `T` is a smoothed noise field
//! whose mean grows with the thickness level.

use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::cube::{default_wavelengths, HsiCube};
use crate::error::{Error, Result};

pub const DEFAULT_GAMMA: f64 = 1.5;
const MEAN_LO: f64 = 0.05;
const MEAN_HI: f64 = 0.95;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HazeSpec {
    /// `0..thickness_levels`
    pub thickness_level: usize,
    pub thickness_levels: usize,
    pub abundance: f64,
    pub seed: u64,
    pub gamma: f64,
}

impl HazeSpec {
    pub fn validate(&self) -> Result<()> {
        if self.thickness_levels == 0 || self.thickness_level >= self.thickness_levels {
            return Err(Error::invalid(
                "haze_spec",
                format!("thickness level {} outside 0..{}", self.thickness_level, self.thickness_levels),
            ));
        }
        if !(self.abundance >= 0.0 && self.abundance.is_finite()) {
            return Err(Error::invalid("haze_spec", format!("abundance {} must be finite and >= 0", self.abundance)));
        }
        if !self.gamma.is_finite() {
            return Err(Error::invalid("haze_spec", "gamma must be finite"));
        }
        Ok(())
    }

    /// Target mean of the thickness map.
    pub fn target_mean(&self) -> f64 {
        thickness_target_mean(self.thickness_level, self.thickness_levels)
    }
}

pub fn thickness_target_mean(level: usize, levels: usize) -> f64 {
    if levels <= 1 {
        return 0.5 * (MEAN_LO + MEAN_HI);
    }
    MEAN_LO + (MEAN_HI - MEAN_LO) * level as f64 / (levels - 1) as f64
}

/// SplitMix64 finalizer over `(a, b)`; used to derive independent seeds.
pub fn derive_seed(a: u64, b: u64) -> u64 {
    let mut z = a ^ b.wrapping_add(0x9E37_79B9_7F4A_7C15).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Multi-octave bilinear value noise, roughly in `[-1, 1]`, row-major.
fn value_noise(width: usize, height: usize, base_cells: usize, octaves: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let mut out = vec![0.0; width * height];
    let mut amp = 1.0;
    let mut norm = 0.0;
    for o in 0..octaves {
        let cells = base_cells << o;
        let g = cells + 1;
        let grid: Vec<f64> = (0..g * g).map(|_| rng.random_range(-1.0..1.0)).collect();
        for y in 0..height {
            let fy = (y as f64 + 0.5) / height as f64 * cells as f64;
            let (y0, ty) = (fy.floor() as usize, fy.fract());
            for x in 0..width {
                let fx = (x as f64 + 0.5) / width as f64 * cells as f64;
                let (x0, tx) = (fx.floor() as usize, fx.fract());
                let at = |yy: usize, xx: usize| grid[yy.min(cells) * g + xx.min(cells)];
                let top = at(y0, x0) * (1.0 - tx) + at(y0, x0 + 1) * tx;
                let bot = at(y0 + 1, x0) * (1.0 - tx) + at(y0 + 1, x0 + 1) * tx;
                out[y * width + x] += amp * (top * (1.0 - ty) + bot * ty);
            }
        }
        norm += amp;
        amp *= 0.5;
    }
    out.iter_mut().for_each(|v| *v /= norm);
    out
}

/// Separable Gaussian blur with mirrored borders.
pub fn gaussian_blur(data: &[f64], width: usize, height: usize, sigma: f64) -> Vec<f64> {
    if sigma <= 0.0 {
        return data.to_vec();
    }
    let r = (3.0 * sigma).ceil() as isize;
    let mut k: Vec<f64> = (-r..=r).map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp()).collect();
    let s: f64 = k.iter().sum();
    k.iter_mut().for_each(|v| *v /= s);
    let mirror = |i: isize, n: usize| crate::tensor::reflect_index(i, n);
    let mut tmp = vec![0.0; data.len()];
    for y in 0..height {
        for x in 0..width {
            tmp[y * width + x] = k
                .iter()
                .enumerate()
                .map(|(j, w)| w * data[y * width + mirror(x as isize + j as isize - r, width)])
                .sum();
        }
    }
    let mut out = vec![0.0; data.len()];
    for y in 0..height {
        for x in 0..width {
            out[y * width + x] = k
                .iter()
                .enumerate()
                .map(|(j, w)| w * tmp[mirror(y as isize + j as isize - r, height) * width + x])
                .sum();
        }
    }
    out
}

/// Smoothed noise field in `[0, 1]` with mean set by `level` (monotone in
/// `level` for a fixed seed). Row-major `height x width`.
pub fn generate_thickness_map(width: usize, height: usize, level: usize, levels: usize, seed: u64) -> Result<Vec<f32>> {
    if width == 0 || height == 0 {
        return Err(Error::invalid("thickness_map", "empty map"));
    }
    if level >= levels {
        return Err(Error::invalid("thickness_map", format!("level {level} outside 0..{levels}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let raw = value_noise(width, height, 2, 4, &mut rng);
    let field = gaussian_blur(&raw, width, height, width.max(height) as f64 / 64.0);
    let (lo, hi) = field.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)));
    let base: Vec<f64> = if hi > lo {
        field.iter().map(|v| (v - lo) / (hi - lo)).collect()
    } else {
        vec![0.5; field.len()]
    };
    // mean(base^p) decreases in p; bisect on ln p to hit the target mean
    let target = thickness_target_mean(level, levels);
    let mean_at = |p: f64| base.iter().map(|v| v.powf(p)).sum::<f64>() / base.len() as f64;
    let (mut a, mut b) = (-12.0f64, 12.0f64);
    for _ in 0..100 {
        let mid = 0.5 * (a + b);
        if mean_at(mid.exp()) > target {
            a = mid;
        } else {
            b = mid;
        }
    }
    let p = (0.5 * (a + b)).exp();
    Ok(base.iter().map(|v| v.powf(p) as f32).collect())
}

/// Per-band haze weight `(lambda0 / lambda)^gamma`, `lambda0` the shortest wavelength.
pub fn spectral_weights(wavelengths_nm: &[f64], gamma: f64) -> Vec<f64> {
    let l0 = wavelengths_nm.iter().copied().fold(f64::INFINITY, f64::min);
    wavelengths_nm.iter().map(|l| (l0 / l).powf(gamma)).collect()
}

/// Adds haze from an explicit thickness map (`height x width`, row-major).
pub fn apply_haze_with_map(clean: &HsiCube, thickness: &[f32], abundance: f64, gamma: f64) -> Result<HsiCube> {
    if thickness.len() != clean.plane_len() {
        return Err(Error::invalid(
            "apply_haze",
            format!("thickness map has {} values for a {}x{} cube", thickness.len(), clean.width, clean.height),
        ));
    }
    if abundance == 0.0 {
        return Ok(clean.clone());
    }
    let mut hazy = clean.clone();
    for (b, w) in spectral_weights(&clean.wavelengths_nm, gamma).into_iter().enumerate() {
        let k = abundance * w;
        for (v, &t) in hazy.band_mut(b).iter_mut().zip(thickness) {
            *v = (*v as f64 + k * t as f64).clamp(0.0, 1.0) as f32;
        }
    }
    Ok(hazy)
}

pub fn apply_haze(clean: &HsiCube, spec: &HazeSpec) -> Result<HsiCube> {
    spec.validate()?;
    if spec.abundance == 0.0 {
        return Ok(clean.clone());
    }
    let t = generate_thickness_map(clean.width, clean.height, spec.thickness_level, spec.thickness_levels, spec.seed)?;
    apply_haze_with_map(clean, &t, spec.abundance, spec.gamma)
}

/// Smooth random reflectance signature: base level plus Gaussian bumps.
fn material_signature(wavelengths: &[f64], rng: &mut ChaCha8Rng) -> Vec<f64> {
    let base = rng.random_range(0.05..0.4);
    let bumps: Vec<(f64, f64, f64)> = (0..3)
        .map(|_| (rng.random_range(-0.15..0.35), rng.random_range(400.0..2500.0), rng.random_range(100.0..500.0)))
        .collect();
    wavelengths
        .iter()
        .map(|&l| {
            let s: f64 = bumps.iter().map(|(a, c, w)| a * (-0.5 * ((l - c) / w).powi(2)).exp()).sum();
            (base + s).clamp(0.02, 0.95)
        })
        .collect()
}

/// Voronoi mosaic of 3..=8 materials with low-amplitude texture.
pub fn generate_clean_scene(width: usize, height: usize, wavelengths_nm: &[f64], seed: u64) -> Result<HsiCube> {
    let mut cube = HsiCube::zeros(width, height, wavelengths_nm.to_vec())?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n_mat = rng.random_range(3..=8usize);
    let sites: Vec<(f64, f64)> = (0..n_mat)
        .map(|_| (rng.random_range(0.0..height as f64), rng.random_range(0.0..width as f64)))
        .collect();
    let sigs: Vec<Vec<f64>> = (0..n_mat).map(|_| material_signature(wavelengths_nm, &mut rng)).collect();
    // boundary warp keeps regions blob-like rather than straight-edged
    let warp = value_noise(width, height, 3, 2, &mut rng);
    let texture = value_noise(width, height, 8, 3, &mut rng);
    let scale = width.max(height) as f64 * 0.08;
    let labels: Vec<usize> = (0..height * width)
        .map(|p| {
            let (y, x) = ((p / width) as f64 + 0.5, (p % width) as f64 + 0.5);
            let (wy, wx) = (y + scale * warp[p], x - scale * warp[p]);
            (0..n_mat)
                .min_by(|&i, &j| {
                    let d = |(sy, sx): (f64, f64)| (sy - wy).powi(2) + (sx - wx).powi(2);
                    d(sites[i]).total_cmp(&d(sites[j]))
                })
                .unwrap_or(0)
        })
        .collect();
    for b in 0..cube.bands {
        let plane = cube.band_mut(b);
        for (p, v) in plane.iter_mut().enumerate() {
            let r = sigs[labels[p]][b] * (1.0 + 0.08 * texture[p]) + 0.01 * texture[p];
            *v = r.clamp(0.0, 1.0) as f32;
        }
    }
    Ok(cube)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairEntry {
    /// Relative to the manifest directory.
    pub clean_path: PathBuf,
    pub hazy_path: PathBuf,
    pub spec: HazeSpec,
    pub split: Split,
    pub scene: usize,
    pub scene_seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetRecipe {
    pub n_scenes: usize,
    pub thickness_levels: usize,
    pub abundances: Vec<f64>,
    pub width: usize,
    pub height: usize,
    pub bands: usize,
    pub gamma: f64,
    pub seed: u64,
    pub test_fraction: f64,
    /// Sample this many distinct (thickness, abundance) cells per scene
    /// instead of the full grid.
    #[serde(default)]
    pub pairs_per_scene: Option<usize>,
}

/// `n` abundances `0.08, 0.16, ...`.
pub fn default_abundances(n: usize) -> Vec<f64> {
    (1..=n).map(|j| 0.08 * j as f64).collect()
}

impl Default for DatasetRecipe {
    fn default() -> Self {
        Self {
            n_scenes: 10,
            thickness_levels: 4,
            abundances: default_abundances(5),
            width: 64,
            height: 64,
            bands: 16,
            gamma: DEFAULT_GAMMA,
            seed: 0,
            test_fraction: 0.1,
            pairs_per_scene: None,
        }
    }
}

impl DatasetRecipe {
    pub fn validate(&self) -> Result<()> {
        if self.n_scenes == 0 || self.thickness_levels == 0 || self.abundances.is_empty() {
            return Err(Error::invalid("dataset", "scenes, thickness levels and abundances must be nonempty"));
        }
        if self.width == 0 || self.height == 0 || self.bands == 0 {
            return Err(Error::invalid("dataset", "cube dimensions must be at least 1"));
        }
        if self.abundances.iter().any(|a| !(a.is_finite() && *a >= 0.0)) {
            return Err(Error::invalid("dataset", "abundances must be finite and >= 0"));
        }
        if self.pairs_per_scene.is_some_and(|k| k == 0 || k > self.thickness_levels * self.abundances.len()) {
            return Err(Error::invalid("dataset", "pairs per scene must lie in 1..=thickness levels x abundances"));
        }
        if !(0.0..=1.0).contains(&self.test_fraction) {
            return Err(Error::invalid("dataset", "test fraction must lie in [0, 1]"));
        }
        Ok(())
    }

    pub fn pair_count(&self) -> usize {
        self.n_scenes * self.pairs_per_scene.unwrap_or(self.thickness_levels * self.abundances.len())
    }

    /// `(thickness, abundance index)` cells used for one scene, ascending.
    pub fn scene_cells(&self, scene_seed: u64) -> Vec<(usize, usize)> {
        let mut cells: Vec<(usize, usize)> = (0..self.thickness_levels)
            .flat_map(|t| (0..self.abundances.len()).map(move |a| (t, a)))
            .collect();
        if let Some(k) = self.pairs_per_scene.filter(|&k| k < cells.len()) {
            cells.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(scene_seed, u64::MAX - 1)));
            cells.truncate(k);
            cells.sort_unstable();
        }
        cells
    }

    /// Scene indices held out for testing.
    pub fn test_scenes(&self) -> Vec<usize> {
        let n_test = (self.test_fraction * self.n_scenes as f64).round() as usize;
        let mut order: Vec<usize> = (0..self.n_scenes).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(self.seed, u64::MAX)));
        let mut test = order[..n_test.min(self.n_scenes)].to_vec();
        test.sort_unstable();
        test
    }
}

pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Clone, PartialEq)]
pub struct Manifest {
    pub root: PathBuf,
    pub pairs: Vec<PairEntry>,
}

impl Manifest {
    /// Accepts the manifest file or the directory holding it.
    pub fn read(path: impl AsRef<Path>) -> Result<Manifest> {
        let mut path = path.as_ref().to_path_buf();
        if path.is_dir() {
            path.push(MANIFEST_FILE);
        }
        let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let pairs = serde_json::from_str(&text).map_err(|e| Error::format(&path, e.to_string()))?;
        let root = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Ok(Manifest { root, pairs })
    }

    pub fn write(&self) -> Result<PathBuf> {
        let path = self.root.join(MANIFEST_FILE);
        let text = serde_json::to_string_pretty(&self.pairs)?;
        std::fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
        Ok(path)
    }

    pub fn resolve(&self, rel: &Path) -> PathBuf {
        self.root.join(rel)
    }

    pub fn split(&self, split: Split) -> impl Iterator<Item = &PairEntry> {
        self.pairs.iter().filter(move |p| p.split == split)
    }
}

/// Generates every scene x thickness x abundance pair under `out_dir` and
/// writes `manifest.json`. Output depends only on the recipe.
pub fn build_dataset(recipe: &DatasetRecipe, out_dir: impl AsRef<Path>) -> Result<Manifest> {
    recipe.validate()?;
    let root = out_dir.as_ref().to_path_buf();
    for sub in ["clean", "hazy"] {
        let d = root.join(sub);
        std::fs::create_dir_all(&d).map_err(|e| Error::io(&d, e))?;
    }
    let wavelengths = default_wavelengths(recipe.bands);
    let test = recipe.test_scenes();
    let per_scene: Vec<Vec<PairEntry>> = (0..recipe.n_scenes)
        .into_par_iter()
        .map(|s| -> Result<Vec<PairEntry>> {
            let scene_seed = derive_seed(recipe.seed, s as u64);
            let clean = generate_clean_scene(recipe.width, recipe.height, &wavelengths, scene_seed)?;
            let clean_rel = PathBuf::from(format!("clean/scene_{s:04}.hsc"));
            clean.write(root.join(&clean_rel))?;
            let split = if test.binary_search(&s).is_ok() { Split::Test } else { Split::Train };
            let mut out = Vec::new();
            let cells = recipe.scene_cells(scene_seed);
            for t in 0..recipe.thickness_levels {
                let used: Vec<usize> = cells.iter().filter(|c| c.0 == t).map(|c| c.1).collect();
                if used.is_empty() {
                    continue;
                }
                let map_seed = derive_seed(scene_seed, 1 + t as u64);
                let map = generate_thickness_map(recipe.width, recipe.height, t, recipe.thickness_levels, map_seed)?;
                for a in used {
                    let alpha = recipe.abundances[a];
                    let spec = HazeSpec {
                        thickness_level: t,
                        thickness_levels: recipe.thickness_levels,
                        abundance: alpha,
                        seed: map_seed,
                        gamma: recipe.gamma,
                    };
                    let hazy = apply_haze_with_map(&clean, &map, alpha, recipe.gamma)?;
                    let hazy_rel = PathBuf::from(format!("hazy/scene_{s:04}_t{t:02}_a{a:02}.hsc"));
                    hazy.write(root.join(&hazy_rel))?;
                    out.push(PairEntry {
                        clean_path: clean_rel.clone(),
                        hazy_path: hazy_rel,
                        spec,
                        split,
                        scene: s,
                        scene_seed,
                    });
                }
            }
            Ok(out)
        })
        .collect::<Result<_>>()?;
    let manifest = Manifest {
        root,
        pairs: per_scene.into_iter().flatten().collect(),
    };
    manifest.write()?;
    Ok(manifest)
}
