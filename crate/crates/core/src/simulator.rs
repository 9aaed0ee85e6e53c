//! Synthetic mother-machine sequences with exact ground truth.
//!
//! Cells are rods stacked in a single file from the closed end (`y = 0`).
//! Every frame each cell's length is multiplied by the growth rate; a cell
//! whose grown length reaches the division length splits into two daughters
//! with length fractions `(r, 1 - r)`, `r ~ Normal(0.5, sigma)` clamped to
//! `[0.3, 0.7]`. A cell keeps its top position unless the cell above pushes
//! it down to preserve the gap. Pixels beyond the open end are cut off and
//! cells whose top leaves the image are dropped.
//!
//! Randomness: `ChaCha8Rng` seeded with `seed`; stream 0 drives cell
//! dynamics (initial lengths, division ratios, swims, in that order per
//! frame and cell) and stream 1 drives intensity rendering.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{Grid, Image, ImageShape, LabelMap, Lineage};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RenderParams {
    pub background: f32,
    pub cell: f32,
    pub halo: f32,
    pub blur_sigma: f32,
    pub noise_sigma: f32,
}

impl Default for RenderParams {
    fn default() -> Self {
        Self { background: 0.55, cell: 0.2, halo: 0.85, blur_sigma: 0.8, noise_sigma: 0.03 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimConfig {
    pub shape: ImageShape,
    pub cell_width: usize,
    pub initial_cells: usize,
    /// Explicit initial lengths; overrides `initial_cells` when set.
    pub initial_lengths: Option<Vec<f64>>,
    pub growth_rate: f64,
    pub division_length: f64,
    pub division_asymmetry_sigma: f64,
    pub gap: usize,
    pub frames: usize,
    pub seed: u64,
    pub swim_probability: f64,
    pub swim_max_distance: usize,
    /// Intensity rendering; `None` skips the intensity stack.
    pub render_noise: Option<RenderParams>,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            shape: ImageShape::new(256, 32),
            cell_width: 10,
            initial_cells: 2,
            initial_lengths: None,
            growth_rate: 1.05,
            division_length: 60.0,
            division_asymmetry_sigma: 0.05,
            gap: 2,
            frames: 100,
            seed: 1,
            swim_probability: 0.0,
            swim_max_distance: 10,
            render_noise: Some(RenderParams::default()),
        }
    }
}

impl SimConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidConfig(m.to_string()));
        if self.shape.height == 0 || self.shape.width == 0 {
            return bad("shape must be at least 1x1");
        }
        if self.cell_width == 0 || self.cell_width > self.shape.width {
            return bad("cell_width must lie in [1, width]");
        }
        if !(self.division_length > 1.0 && self.division_length < self.shape.height as f64) {
            return bad("division_length must lie in (1, height)");
        }
        if !(self.growth_rate >= 1.0 && self.growth_rate.is_finite()) {
            return bad("growth_rate must be >= 1");
        }
        if !(0.0..0.5).contains(&self.division_asymmetry_sigma) {
            return bad("division_asymmetry_sigma must lie in [0, 0.5)");
        }
        if !(0.0..=1.0).contains(&self.swim_probability) {
            return bad("swim_probability must lie in [0, 1]");
        }
        if let Some(lengths) = &self.initial_lengths {
            if lengths.iter().any(|&l| !(l.is_finite() && l >= 1.0)) {
                return bad("initial_lengths must be >= 1");
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SimSequence {
    pub shape: ImageShape,
    pub labels: Vec<LabelMap>,
    pub lineage: Lineage,
    /// Continuous (pre-rasterization) length of every cell, indexed like `lineage.frames`.
    pub lengths: Vec<Vec<f64>>,
    pub intensity: Option<Vec<Image>>,
}

#[derive(Clone, Debug)]
struct SimCell {
    length: f64,
    top: i64,
    /// Label at the previous frame.
    parent: Option<u32>,
}

fn pixel_length(length: f64) -> i64 {
    (length.round() as i64).max(1)
}

/// Horizontal inset of row `r` of a rod `len` rows long, rounding its ends.
fn row_inset(r: i64, len: i64, width: usize) -> usize {
    if width < 6 {
        return 0;
    }
    match r.min(len - 1 - r) {
        0 => 2,
        1 => 1,
        _ => 0,
    }
}

fn rasterize(cells: &[SimCell], cfg: &SimConfig) -> LabelMap {
    let shape = cfg.shape;
    let h = shape.height as i64;
    let x0 = (shape.width - cfg.cell_width) / 2;
    let mut map = Grid::filled(shape, 0u32);
    for (k, c) in cells.iter().enumerate() {
        let len = pixel_length(c.length);
        for y in c.top.max(0)..(c.top + len).min(h) {
            let inset = row_inset(y - c.top, len, cfg.cell_width);
            for x in x0 + inset..x0 + cfg.cell_width - inset {
                map.set(y as usize, x, k as u32 + 1);
            }
        }
    }
    map
}

fn push_down(cells: &mut [SimCell], gap: usize) {
    for k in 1..cells.len() {
        let min_top = cells[k - 1].top + pixel_length(cells[k - 1].length) + gap as i64;
        if cells[k].top < min_top {
            cells[k].top = min_top;
        }
    }
}

pub fn simulate(cfg: &SimConfig) -> Result<SimSequence> {
    cfg.validate()?;
    let shape = cfg.shape;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let ratio = Normal::new(0.5, cfg.division_asymmetry_sigma)
        .map_err(|e| Error::InvalidConfig(e.to_string()))?;

    let initial: Vec<f64> = match &cfg.initial_lengths {
        Some(l) => l.clone(),
        None => (0..cfg.initial_cells)
            .map(|_| rng.random_range(0.5..0.95) * cfg.division_length)
            .collect(),
    };
    let needed: i64 = initial.iter().map(|&l| pixel_length(l)).sum::<i64>()
        + (cfg.gap * initial.len().saturating_sub(1)) as i64;
    if needed > shape.height as i64 {
        return Err(Error::ChannelOverfull { needed: needed as usize, available: shape.height });
    }
    let mut cells: Vec<SimCell> =
        initial.iter().map(|&length| SimCell { length, top: 0, parent: None }).collect();
    push_down(&mut cells, cfg.gap);

    let mut labels = Vec::with_capacity(cfg.frames);
    let mut lengths = Vec::with_capacity(cfg.frames);
    let mut parents: Vec<Vec<Option<u32>>> = Vec::with_capacity(cfg.frames);
    for frame in 0..cfg.frames {
        if frame > 0 {
            cells = step(&cells, cfg, &ratio, &mut rng);
        }
        labels.push(rasterize(&cells, cfg));
        lengths.push(cells.iter().map(|c| c.length).collect());
        parents.push(cells.iter().map(|c| c.parent).collect());
    }

    let lineage = Lineage::from_label_stack(&labels, |f, id| parents[f][id as usize - 1])?;
    let lineage = Lineage { shape, ..lineage };
    let intensity = cfg.render_noise.as_ref().map(|params| {
        let mut render_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        render_rng.set_stream(1);
        labels.iter().map(|l| render_intensity(l, params, &mut render_rng)).collect()
    });
    Ok(SimSequence { shape, labels, lineage, lengths, intensity })
}

fn step(cells: &[SimCell], cfg: &SimConfig, ratio: &Normal<f64>, rng: &mut ChaCha8Rng) -> Vec<SimCell> {
    let mut next = Vec::with_capacity(cells.len() + 2);
    for (k, c) in cells.iter().enumerate() {
        let id = Some(k as u32 + 1);
        let grown = c.length * cfg.growth_rate;
        if grown >= cfg.division_length {
            let r = ratio.sample(rng).clamp(0.3, 0.7);
            let upper = r * grown;
            next.push(SimCell { length: upper, top: c.top, parent: id });
            next.push(SimCell {
                length: grown - upper,
                top: c.top + pixel_length(upper) + cfg.gap as i64,
                parent: id,
            });
        } else {
            next.push(SimCell { length: grown, top: c.top, parent: id });
        }
    }
    if cfg.swim_probability > 0.0 && cfg.swim_max_distance > 0 {
        for c in next.iter_mut() {
            if rng.random_bool(cfg.swim_probability) {
                c.top += rng.random_range(1..=cfg.swim_max_distance) as i64;
            }
        }
    }
    push_down(&mut next, cfg.gap);
    next.retain(|c| c.top < cfg.shape.height as i64);
    next
}

fn gaussian_kernel(sigma: f32) -> Vec<f32> {
    let radius = (3.0 * sigma).ceil() as i64;
    let mut k: Vec<f32> =
        (-radius..=radius).map(|i| (-(i * i) as f32 / (2.0 * sigma * sigma)).exp()).collect();
    let s: f32 = k.iter().sum();
    k.iter_mut().for_each(|v| *v /= s);
    k
}

/// Separable Gaussian blur with clamped edges.
pub fn gaussian_blur(img: &Image, sigma: f32) -> Image {
    if !(sigma > 0.0) {
        return img.clone();
    }
    let kernel = gaussian_kernel(sigma);
    let r = (kernel.len() / 2) as i64;
    let shape = img.shape();
    let (h, w) = (shape.height as i64, shape.width as i64);
    let pass = |src: &Image, vertical: bool| {
        let mut out = src.clone();
        for y in 0..h {
            for x in 0..w {
                let mut acc = 0.0;
                for (j, kv) in kernel.iter().enumerate() {
                    let o = j as i64 - r;
                    let (sy, sx) =
                        if vertical { ((y + o).clamp(0, h - 1), x) } else { (y, (x + o).clamp(0, w - 1)) };
                    acc += kv * src.get(sy as usize, sx as usize);
                }
                out.set(y as usize, x as usize, acc);
            }
        }
        out
    };
    pass(&pass(img, false), true)
}

/// Phase-contrast-like rendering: dark cells on a mid-gray background with
/// a one-pixel bright halo, blurred, with additive Gaussian noise.
pub fn render_intensity(labels: &LabelMap, params: &RenderParams, rng: &mut impl Rng) -> Image {
    let shape = labels.shape();
    let (h, w) = (shape.height as i64, shape.width as i64);
    let mut img = Grid::filled(shape, params.background);
    for y in 0..h {
        for x in 0..w {
            let l = *labels.get(y as usize, x as usize);
            let v = if l != 0 {
                params.cell
            } else {
                let near_cell = (-1..=1).any(|dy| {
                    (-1..=1).any(|dx| {
                        let (ny, nx) = (y + dy, x + dx);
                        (0..h).contains(&ny)
                            && (0..w).contains(&nx)
                            && *labels.get(ny as usize, nx as usize) != 0
                    })
                });
                if near_cell {
                    params.halo
                } else {
                    params.background
                }
            };
            img.set(y as usize, x as usize, v);
        }
    }
    let mut img = gaussian_blur(&img, params.blur_sigma);
    for v in img.data_mut() {
        if params.noise_sigma > 0.0 {
            let n: f32 = StandardNormal.sample(rng);
            *v += params.noise_sigma * n;
        }
        *v = v.clamp(0.0, 1.0);
    }
    img
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::cell_masks;

    fn small(frames: usize) -> SimConfig {
        SimConfig { frames, render_noise: None, ..SimConfig::default() }
    }

    #[test]
    fn no_growth_is_a_fixed_point() {
        let cfg = SimConfig { growth_rate: 1.0, ..small(5) };
        let seq = simulate(&cfg).unwrap();
        for f in 1..5 {
            assert_eq!(seq.labels[f], seq.labels[0]);
            for c in &seq.lineage.frames[f] {
                assert_eq!(c.parent_id, Some(c.id));
            }
        }
    }

    #[test]
    fn symmetric_division() {
        let cfg = SimConfig {
            initial_lengths: Some(vec![60.0]),
            division_asymmetry_sigma: 0.0,
            growth_rate: 1.1,
            ..small(2)
        };
        let seq = simulate(&cfg).unwrap();
        assert_eq!(seq.lineage.frames[1].len(), 2);
        for (c, &len) in seq.lineage.frames[1].iter().zip(&seq.lengths[1]) {
            assert_eq!(c.parent_id, Some(1));
            assert!((len - 60.0 * 1.1 / 2.0).abs() < 1e-12);
        }
    }

    #[test]
    fn deterministic_given_seed() {
        let cfg = SimConfig { swim_probability: 0.05, frames: 40, ..SimConfig::default() };
        assert_eq!(simulate(&cfg).unwrap(), simulate(&cfg).unwrap());
        let other = SimConfig { seed: 2, ..cfg.clone() };
        assert_ne!(simulate(&cfg).unwrap().labels, simulate(&other).unwrap().labels);
    }

    #[test]
    fn overfull_channel_rejected() {
        let cfg = SimConfig { initial_lengths: Some(vec![100.0, 100.0, 100.0]), ..small(1) };
        assert!(matches!(simulate(&cfg), Err(Error::ChannelOverfull { .. })));
    }

    #[test]
    fn frames_zero_is_empty() {
        let seq = simulate(&small(0)).unwrap();
        assert!(seq.labels.is_empty());
        assert_eq!(seq.lineage.num_frames(), 0);
    }

    #[test]
    fn frame_invariants() {
        for seed in 0..10 {
            let cfg = SimConfig { seed, frames: 80, growth_rate: 1.08, ..small(0) };
            let seq = simulate(&cfg).unwrap();
            let h = cfg.shape.height;
            for (f, map) in seq.labels.iter().enumerate() {
                let masks = cell_masks(map);
                let mut prev_max = None;
                for (_, m) in &masks {
                    assert!(m.is_4_connected());
                    let (lo, hi) = m.y_extent().unwrap();
                    if let Some(p) = prev_max {
                        assert!(lo > p, "cells must be ordered and disjoint along y");
                    }
                    prev_max = Some(hi);
                    // Y-contiguous per column
                    for x in 0..cfg.shape.width {
                        let ys: Vec<usize> = m.pixels().filter(|p| p.1 == x).map(|p| p.0).collect();
                        if let (Some(a), Some(b)) = (ys.first(), ys.last()) {
                            assert_eq!(b - a + 1, ys.len());
                        }
                    }
                }
                if f > 0 {
                    let truncated = seq.lineage.frames[f].iter().any(|c| c.touches_open_end)
                        || seq.lineage.frames[f - 1].iter().any(|c| c.touches_open_end);
                    if !truncated {
                        let prev: f64 = seq.lengths[f - 1].iter().sum();
                        let cur: f64 = seq.lengths[f].iter().sum();
                        assert!(cur >= prev - 1e-9);
                    }
                }
                for c in &seq.lineage.frames[f] {
                    assert!(c.y_max < h);
                }
            }
            for (frame, parent, children) in seq.lineage.divisions() {
                let pl = seq.lengths[frame - 1][parent as usize - 1];
                let sum: f64 = children.iter().map(|&c| seq.lengths[frame][c as usize - 1]).sum();
                assert!((sum - pl * cfg.growth_rate).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn rendering_contrast_and_determinism() {
        let seq = simulate(&small(1)).unwrap();
        let labels = &seq.labels[0];
        let quiet = RenderParams { noise_sigma: 0.0, ..RenderParams::default() };
        let a = render_intensity(labels, &quiet, &mut ChaCha8Rng::seed_from_u64(1));
        let b = render_intensity(labels, &quiet, &mut ChaCha8Rng::seed_from_u64(2));
        assert_eq!(a, b);

        let empty = Grid::filled(labels.shape(), 0u32);
        let flat = render_intensity(&empty, &quiet, &mut ChaCha8Rng::seed_from_u64(0));
        assert!(flat.data().iter().all(|&v| (v - quiet.background).abs() < 1e-6));

        for seed in 0..100 {
            let img = render_intensity(labels, &RenderParams::default(), &mut ChaCha8Rng::seed_from_u64(seed));
            let (mut cs, mut cn, mut bs, mut bn) = (0.0, 0, 0.0, 0);
            for (v, &l) in img.data().iter().zip(labels.data()) {
                if l != 0 {
                    cs += v;
                    cn += 1;
                } else {
                    bs += v;
                    bn += 1;
                }
            }
            assert!(cs / (cn as f32) < bs / (bn as f32));
            assert!(img.data().iter().all(|v| (0.0..=1.0).contains(v)));
        }
    }
}
