//! Seeded augmentations of consecutive frame pairs: illumination changes,
//! constrained affine transforms and simulated swimming.
//!
//! Images are expected in `[0, 1]`. Label maps are only changed by the
//! geometric transforms and the swim shift; cells truncated at the open end
//! (bottom row) below `erase_exit_below` pixels are erased from both image
//! and labels.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Poisson};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{cell_masks, Image, LabelMap, Lineage};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct IlluminationConfig {
    pub gauss_add_sigma_range: [f64; 2],
    pub gauss_mul_sigma_range: [f64; 2],
    /// Poisson scale λ; a draw ≤ 0 disables shot noise.
    pub poisson_scale_range: [f64; 2],
    /// Control points of the histogram remap; fewer than 2 disables it.
    pub histogram_elastic_points: usize,
    pub histogram_max_slope: f64,
    pub y_gradient_amplitude_range: [f64; 2],
    /// When false the output range stays `[0, 1]`.
    pub random_intensity_range: bool,
    pub min_intensity_span: f64,
}

impl Default for IlluminationConfig {
    fn default() -> Self {
        Self {
            gauss_add_sigma_range: [0.0, 0.05],
            gauss_mul_sigma_range: [0.0, 0.1],
            poisson_scale_range: [100.0, 1000.0],
            histogram_elastic_points: 5,
            histogram_max_slope: 4.0,
            y_gradient_amplitude_range: [0.0, 0.3],
            random_intensity_range: true,
            min_intensity_span: 0.1,
        }
    }
}

impl IlluminationConfig {
    /// No-op settings.
    pub fn identity() -> Self {
        Self {
            gauss_add_sigma_range: [0.0, 0.0],
            gauss_mul_sigma_range: [0.0, 0.0],
            poisson_scale_range: [0.0, 0.0],
            histogram_elastic_points: 0,
            y_gradient_amplitude_range: [0.0, 0.0],
            random_intensity_range: false,
            ..Self::default()
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GeometricConfig {
    pub scale_range_x: [f64; 2],
    pub scale_range_y: [f64; 2],
    /// Bound on `|scale_x / scale_y − 1|`.
    pub max_aspect_ratio_change: f64,
    pub shear_range: [f64; 2],
    /// Degrees.
    pub rotation_range: [f64; 2],
    /// Pixels, Y then X.
    pub shift_range: [[f64; 2]; 2],
    pub hflip_probability: f64,
    pub swim_probability: f64,
    pub swim_max_distance: usize,
    pub erase_exit_below: usize,
}

impl Default for GeometricConfig {
    fn default() -> Self {
        Self {
            scale_range_x: [0.9, 1.1],
            scale_range_y: [0.9, 1.1],
            max_aspect_ratio_change: 0.1,
            shear_range: [-0.02, 0.02],
            rotation_range: [-4.0, 4.0],
            shift_range: [[-4.0, 8.0], [-2.0, 2.0]],
            hflip_probability: 0.5,
            swim_probability: 0.2,
            swim_max_distance: 10,
            erase_exit_below: 20,
        }
    }
}

impl GeometricConfig {
    pub fn identity() -> Self {
        Self {
            scale_range_x: [1.0, 1.0],
            scale_range_y: [1.0, 1.0],
            shear_range: [0.0, 0.0],
            rotation_range: [0.0, 0.0],
            shift_range: [[0.0, 0.0], [0.0, 0.0]],
            hflip_probability: 0.0,
            swim_probability: 0.0,
            ..Self::default()
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AugConfig {
    pub illumination: IlluminationConfig,
    pub geometric: GeometricConfig,
    pub seed: u64,
}

fn draw(rng: &mut impl Rng, [lo, hi]: [f64; 2]) -> f64 {
    if hi > lo {
        rng.random_range(lo..hi)
    } else {
        lo
    }
}

fn check_range(image: &Image) -> Result<()> {
    if image.data().iter().all(|v| (0.0..=1.0).contains(v)) {
        Ok(())
    } else {
        Err(Error::InputRange)
    }
}

/// Parameters shared by both images of a pair.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IlluminationDraw {
    pub additive_sigma: f64,
    pub multiplicative_sigma: f64,
    pub poisson_scale: f64,
    /// Monotone remap knots `(input, output)` from `(0, 0)` to `(1, 1)`.
    pub histogram: Vec<(f64, f64)>,
    pub y_amplitude: f64,
    /// Profile values at the top, middle and bottom rows.
    pub y_knots: [f64; 3],
    pub range: (f64, f64),
}

impl IlluminationDraw {
    pub fn sample(cfg: &IlluminationConfig, rng: &mut impl Rng) -> Self {
        let additive_sigma = draw(rng, cfg.gauss_add_sigma_range);
        let multiplicative_sigma = draw(rng, cfg.gauss_mul_sigma_range);
        let poisson_scale = draw(rng, cfg.poisson_scale_range);
        let mut histogram = vec![(0.0, 0.0), (1.0, 1.0)];
        let segments = cfg.histogram_elastic_points.saturating_sub(1);
        if segments >= 2 && cfg.histogram_max_slope > 1.0 {
            // raw slopes within a factor √s of 1 keep normalized slopes in [1/s, s]
            let bound = cfg.histogram_max_slope.ln() / 2.0;
            let raw: Vec<f64> = (0..segments).map(|_| rng.random_range(-bound..=bound).exp()).collect();
            let total: f64 = raw.iter().sum();
            let width = 1.0 / segments as f64;
            histogram = vec![(0.0, 0.0)];
            let mut y = 0.0;
            for (i, r) in raw.iter().enumerate() {
                y += r / total;
                let x = (i + 1) as f64 * width;
                histogram.push(if i + 1 == segments { (1.0, 1.0) } else { (x, y) });
            }
        }
        let y_amplitude = draw(rng, cfg.y_gradient_amplitude_range) * if rng.random_bool(0.5) { 1.0 } else { -1.0 };
        let y_knots = std::array::from_fn(|_| rng.random_range(-1.0..=1.0));
        let range = if cfg.random_intensity_range {
            let span = rng.random_range(cfg.min_intensity_span.clamp(0.0, 1.0)..=1.0);
            let lo = rng.random_range(0.0..=1.0 - span);
            (lo, lo + span)
        } else {
            (0.0, 1.0)
        };
        Self { additive_sigma, multiplicative_sigma, poisson_scale, histogram, y_amplitude, y_knots, range }
    }

    fn remap(&self, v: f64) -> f64 {
        let h = &self.histogram;
        let i = h.partition_point(|&(x, _)| x < v).clamp(1, h.len() - 1);
        let ((x0, y0), (x1, y1)) = (h[i - 1], h[i]);
        y0 + (v - x0) * (y1 - y0) / (x1 - x0)
    }
}

/// Natural cubic spline through `(0, k0)`, `(1/2, k1)`, `(1, k2)` at `t ∈ [0, 1]`.
fn y_profile(k: [f64; 3], t: f64) -> f64 {
    let h = 0.5;
    let m1 = 3.0 * (k[0] - 2.0 * k[1] + k[2]) / (2.0 * h * h);
    let (a, b, ma, mb, s) = if t <= h { (k[0], k[1], 0.0, m1, t) } else { (k[1], k[2], m1, 0.0, t - h) };
    let u = h - s;
    ma * u.powi(3) / (6.0 * h) + mb * s.powi(3) / (6.0 * h) + (a / h - ma * h / 6.0) * u + (b / h - mb * h / 6.0) * s
}

fn illuminate(image: &Image, d: &IlluminationDraw, rng: &mut impl Rng) -> Image {
    let shape = image.shape();
    let add = Normal::new(0.0, d.additive_sigma.max(0.0)).expect("finite sigma");
    let mul = Normal::new(0.0, d.multiplicative_sigma.max(0.0)).expect("finite sigma");
    let (lo, hi) = d.range;
    let denom = shape.height.saturating_sub(1).max(1) as f64;
    let mut out = image.clone();
    for (i, px) in out.data_mut().iter_mut().enumerate() {
        let mut v = f64::from(*px);
        if d.additive_sigma > 0.0 {
            v += add.sample(rng);
        }
        if d.multiplicative_sigma > 0.0 {
            v *= 1.0 + mul.sample(rng);
        }
        if d.poisson_scale > 0.0 {
            let mean = v.max(0.0) * d.poisson_scale;
            v = if mean > 0.0 { Poisson::new(mean).expect("positive mean").sample(rng) / d.poisson_scale } else { 0.0 };
        }
        v = d.remap(v.clamp(0.0, 1.0));
        if d.y_amplitude != 0.0 {
            let y = (i / shape.width) as f64 / denom;
            v *= 1.0 + d.y_amplitude * y_profile(d.y_knots, y);
        }
        v = v.clamp(0.0, 1.0);
        *px = (lo + v * (hi - lo)).clamp(0.0, 1.0) as f32;
    }
    out
}

/// Illumination augmentation with one parameter draw for both images.
pub fn illuminate_pair(
    prev: &Image,
    curr: &Image,
    cfg: &IlluminationConfig,
    rng: &mut impl Rng,
) -> Result<(Image, Image, IlluminationDraw)> {
    check_range(prev)?;
    check_range(curr)?;
    let d = IlluminationDraw::sample(cfg, rng);
    let a = illuminate(prev, &d, rng);
    let b = illuminate(curr, &d, rng);
    Ok((a, b, d))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImageTransform {
    pub rotation_deg: f64,
    pub shift_y: f64,
    pub shift_x: f64,
    pub hflip: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GeometricDraw {
    pub scale_x: f64,
    pub scale_y: f64,
    pub shear: f64,
    pub images: Vec<ImageTransform>,
    pub attempts: usize,
}

/// Forward affine map on `(y, x)` pixel centers.
#[derive(Clone, Copy, Debug)]
struct Affine {
    m: [[f64; 2]; 2],
    b: [f64; 2],
    flip_width: Option<f64>,
}

impl Affine {
    /// Scale and shear about the top center, then rotation about the image
    /// center, shift, and an optional mirror in X.
    fn new(h: usize, w: usize, sx: f64, sy: f64, shear: f64, t: &ImageTransform) -> Self {
        let anchor = [0.0, (w as f64 - 1.0) / 2.0];
        let center = [(h as f64 - 1.0) / 2.0, (w as f64 - 1.0) / 2.0];
        // L = shear · scale: y' = sy·y, x' = sx·x + shear·sy·y
        let l = [[sy, 0.0], [shear * sy, sx]];
        let (sin, cos) = t.rotation_deg.to_radians().sin_cos();
        let r = [[cos, -sin], [sin, cos]];
        let m = mul2(r, l);
        let la = apply2(l, anchor);
        let inner = [anchor[0] - la[0] - center[0], anchor[1] - la[1] - center[1]];
        let ri = apply2(r, inner);
        let b = [center[0] + ri[0] + t.shift_y, center[1] + ri[1] + t.shift_x];
        Self { m, b, flip_width: t.hflip.then_some(w as f64 - 1.0) }
    }

    fn forward(&self, p: [f64; 2]) -> [f64; 2] {
        let q = apply2(self.m, p);
        let (y, x) = (q[0] + self.b[0], q[1] + self.b[1]);
        [y, self.flip_width.map_or(x, |wm| wm - x)]
    }

    fn inverse(&self, q: [f64; 2]) -> [f64; 2] {
        let x = self.flip_width.map_or(q[1], |wm| wm - q[1]);
        let (dy, dx) = (q[0] - self.b[0], x - self.b[1]);
        let [[a, b], [c, d]] = self.m;
        let det = a * d - b * c;
        [(d * dy - b * dx) / det, (a * dx - c * dy) / det]
    }
}

fn mul2(a: [[f64; 2]; 2], b: [[f64; 2]; 2]) -> [[f64; 2]; 2] {
    std::array::from_fn(|i| std::array::from_fn(|j| a[i][0] * b[0][j] + a[i][1] * b[1][j]))
}

fn apply2(m: [[f64; 2]; 2], p: [f64; 2]) -> [f64; 2] {
    [m[0][0] * p[0] + m[0][1] * p[1], m[1][0] * p[0] + m[1][1] * p[1]]
}

fn bilinear(image: &Image, y: f64, x: f64) -> f32 {
    let s = image.shape();
    let y = y.clamp(0.0, s.height as f64 - 1.0);
    let x = x.clamp(0.0, s.width as f64 - 1.0);
    let (y0, x0) = (y.floor() as usize, x.floor() as usize);
    let (y1, x1) = ((y0 + 1).min(s.height - 1), (x0 + 1).min(s.width - 1));
    let (fy, fx) = (y - y0 as f64, x - x0 as f64);
    let at = |yy: usize, xx: usize| f64::from(*image.get(yy, xx));
    let top = at(y0, x0) * (1.0 - fx) + at(y0, x1) * fx;
    let bottom = at(y1, x0) * (1.0 - fx) + at(y1, x1) * fx;
    (top * (1.0 - fy) + bottom * fy) as f32
}

fn warp(image: &Image, labels: &LabelMap, a: &Affine) -> (Image, LabelMap) {
    let s = image.shape();
    let mut out_i = image.clone();
    let mut out_l = labels.clone();
    for y in 0..s.height {
        for x in 0..s.width {
            let [sy, sx] = a.inverse([y as f64, x as f64]);
            out_i.set(y, x, bilinear(image, sy, sx));
            let (ry, rx) = (sy.round(), sx.round());
            let inside = ry >= 0.0 && rx >= 0.0 && ry < s.height as f64 && rx < s.width as f64;
            out_l.set(y, x, if inside { *labels.get(ry as usize, rx as usize) } else { 0 });
        }
    }
    (out_i, out_l)
}

/// Cells away from the open end must map entirely inside the frame.
fn closed_cells_inside(labels: &LabelMap, a: &Affine) -> bool {
    let s = labels.shape();
    let (hm, wm) = (s.height as f64 - 1.0, s.width as f64 - 1.0);
    cell_masks(labels).values().all(|mask| {
        let touches = mask.y_extent().is_some_and(|(_, y1)| y1 == s.height - 1);
        touches
            || mask.pixels().all(|(y, x)| {
                let [qy, qx] = a.forward([y as f64, x as f64]);
                (-0.5..=hm + 0.5).contains(&qy) && (-0.5..=wm + 0.5).contains(&qx)
            })
    })
}

fn background_mean(image: &Image, labels: &LabelMap) -> f32 {
    let (mut sum, mut n) = (0.0f64, 0usize);
    for (&v, &l) in image.data().iter().zip(labels.data()) {
        if l == 0 {
            sum += f64::from(v);
            n += 1;
        }
    }
    if n == 0 {
        let all = image.data();
        return (all.iter().map(|&v| f64::from(v)).sum::<f64>() / all.len().max(1) as f64) as f32;
    }
    (sum / n as f64) as f32
}

/// Remove `ids` from the labels and paint their pixels with `fill`.
fn erase(image: &mut Image, labels: &mut LabelMap, ids: &[u32], fill: f32) {
    for (v, l) in image.data_mut().iter_mut().zip(labels.data_mut()) {
        if *l != 0 && ids.contains(l) {
            *l = 0;
            *v = fill;
        }
    }
}

/// Cells at the open end shorter than `min_length`, restricted to `candidates` if given.
fn short_exit_cells(labels: &LabelMap, min_length: usize, candidates: Option<&[u32]>) -> Vec<u32> {
    let h = labels.shape().height;
    cell_masks(labels)
        .into_iter()
        .filter(|(id, m)| {
            candidates.is_none_or(|c| c.contains(id))
                && m.y_extent().is_some_and(|(y0, y1)| y1 == h - 1 && y1 - y0 + 1 < min_length)
        })
        .map(|(id, _)| id)
        .collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct GeometricOutput {
    pub images: Vec<Image>,
    pub labels: Vec<LabelMap>,
    /// Ids erased by the exit rule, per image.
    pub erased: Vec<Vec<u32>>,
    pub draw: GeometricDraw,
}

/// Affine augmentation of one or more images (normally a pair) sharing scale and shear.
pub fn geometric_frames(images: &[Image], labels: &[LabelMap], cfg: &GeometricConfig, rng: &mut impl Rng) -> Result<GeometricOutput> {
    if images.len() != labels.len() {
        return Err(Error::DimensionMismatch("one label map per image expected".into()));
    }
    for (i, l) in images.iter().zip(labels) {
        i.shape().ensure_same(&l.shape())?;
    }
    const MAX_ATTEMPTS: usize = 100;
    for attempt in 1..=MAX_ATTEMPTS {
        let scale_x = draw(rng, cfg.scale_range_x);
        let scale_y = draw(rng, cfg.scale_range_y);
        let shear = draw(rng, cfg.shear_range);
        let transforms: Vec<ImageTransform> = images
            .iter()
            .map(|_| ImageTransform {
                rotation_deg: draw(rng, cfg.rotation_range),
                shift_y: draw(rng, cfg.shift_range[0]),
                shift_x: draw(rng, cfg.shift_range[1]),
                hflip: cfg.hflip_probability > 0.0 && rng.random_bool(cfg.hflip_probability.min(1.0)),
            })
            .collect();
        if (scale_x / scale_y - 1.0).abs() > cfg.max_aspect_ratio_change + 1e-12 {
            continue;
        }
        let affines: Vec<Affine> = images
            .iter()
            .zip(&transforms)
            .map(|(img, t)| Affine::new(img.shape().height, img.shape().width, scale_x, scale_y, shear, t))
            .collect();
        if !labels.iter().zip(&affines).all(|(l, a)| closed_cells_inside(l, a)) {
            continue;
        }
        let mut out = GeometricOutput {
            images: Vec::new(),
            labels: Vec::new(),
            erased: Vec::new(),
            draw: GeometricDraw { scale_x, scale_y, shear, images: transforms, attempts: attempt },
        };
        for ((img, lab), a) in images.iter().zip(labels).zip(&affines) {
            let fill = background_mean(img, lab);
            let (mut wi, mut wl) = warp(img, lab, a);
            let gone = short_exit_cells(&wl, cfg.erase_exit_below, None);
            erase(&mut wi, &mut wl, &gone, fill);
            out.images.push(wi);
            out.labels.push(wl);
            out.erased.push(gone);
        }
        return Ok(out);
    }
    Err(Error::ConstraintUnsatisfiable(MAX_ATTEMPTS))
}

pub fn geometric_pair(
    prev: &Image,
    curr: &Image,
    labels: (&LabelMap, &LabelMap),
    cfg: &GeometricConfig,
    rng: &mut impl Rng,
) -> Result<GeometricOutput> {
    geometric_frames(&[prev.clone(), curr.clone()], &[labels.0.clone(), labels.1.clone()], cfg, rng)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SwimDraw {
    /// First row moved.
    pub split_row: usize,
    pub distance: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SwimOutput {
    pub image: Image,
    pub labels: LabelMap,
    pub erased: Vec<u32>,
    pub draw: Option<SwimDraw>,
}

/// Deterministic core of the swim shift: rows from `split_row` down move by `distance`.
pub fn swim_shift(image: &Image, labels: &LabelMap, split_row: usize, distance: usize, erase_exit_below: usize) -> Result<SwimOutput> {
    image.shape().ensure_same(&labels.shape())?;
    let s = image.shape();
    let fill = background_mean(image, labels);
    let before = cell_masks(labels);
    let mut img = image.clone();
    let mut lab = labels.clone();
    for y in (split_row..s.height).rev() {
        for x in 0..s.width {
            let (v, l) = if y >= split_row + distance {
                (*image.get(y - distance, x), *labels.get(y - distance, x))
            } else {
                (fill, 0)
            };
            img.set(y, x, v);
            lab.set(y, x, l);
        }
    }
    let after = cell_masks(&lab);
    let truncated: Vec<u32> = before
        .iter()
        .filter(|(id, m)| after.get(id).is_none_or(|a| a.len() < m.len()))
        .map(|(&id, _)| id)
        .collect();
    let erased = short_exit_cells(&lab, erase_exit_below, Some(&truncated));
    erase(&mut img, &mut lab, &erased, fill);
    Ok(SwimOutput { image: img, labels: lab, erased, draw: Some(SwimDraw { split_row, distance }) })
}

/// Shift everything below a random inter-cell gap toward the open end.
/// With fewer than two cells the input is returned unchanged.
pub fn simulate_swim(image: &Image, labels: &LabelMap, cfg: &GeometricConfig, rng: &mut impl Rng) -> Result<SwimOutput> {
    image.shape().ensure_same(&labels.shape())?;
    let mut extents: Vec<(usize, usize)> = cell_masks(labels).values().filter_map(|m| m.y_extent()).collect();
    if extents.len() < 2 {
        return Ok(SwimOutput { image: image.clone(), labels: labels.clone(), erased: Vec::new(), draw: None });
    }
    extents.sort_unstable();
    let k = rng.random_range(0..extents.len() - 1);
    let split_row = extents[k].1 + 1;
    let distance = rng.random_range(0..=cfg.swim_max_distance);
    swim_shift(image, labels, split_row, distance, cfg.erase_exit_below)
}

/// Recompute cell records after label edits, keeping parent links whose
/// parent still exists one frame earlier.
pub fn relineage(labels: &[LabelMap], old: &Lineage) -> Result<Lineage> {
    let present: Vec<std::collections::HashSet<u32>> =
        labels.iter().map(|l| l.data().iter().copied().filter(|&v| v != 0).collect()).collect();
    let mut lineage = Lineage::from_label_stack(labels, |f, id| {
        let p = old.parent(f, id)?;
        (f > 0 && present[f - 1].contains(&p)).then_some(p)
    })?;
    lineage.shape = old.shape;
    Ok(lineage)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PairDraw {
    pub frames: Vec<usize>,
    pub illumination: IlluminationDraw,
    pub geometric: GeometricDraw,
    pub swim: Option<SwimDraw>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AugmentedStack {
    pub images: Vec<Image>,
    pub labels: Vec<LabelMap>,
    pub lineage: Lineage,
    pub draws: Vec<PairDraw>,
}

/// Augment a sequence as consecutive pairs `(0, 1), (2, 3), …`; an odd last
/// frame is augmented alone.
pub fn augment_stack(images: &[Image], labels: &[LabelMap], lineage: &Lineage, cfg: &AugConfig) -> Result<AugmentedStack> {
    if images.len() != labels.len() || lineage.num_frames() != labels.len() {
        return Err(Error::DimensionMismatch("images, labels and lineage must cover the same frames".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut out_images = Vec::with_capacity(images.len());
    let mut out_labels = Vec::with_capacity(images.len());
    let mut draws = Vec::new();
    let mut start = 0;
    while start < images.len() {
        let end = (start + 2).min(images.len());
        let frames: Vec<usize> = (start..end).collect();
        let ill = IlluminationDraw::sample(&cfg.illumination, &mut rng);
        let mut lit = Vec::new();
        for &f in &frames {
            check_range(&images[f])?;
            lit.push(illuminate(&images[f], &ill, &mut rng));
        }
        let mut geo = geometric_frames(&lit, &labels[start..end], &cfg.geometric, &mut rng)?;
        let mut swim = None;
        if cfg.geometric.swim_probability > 0.0 && rng.random_bool(cfg.geometric.swim_probability.min(1.0)) {
            let last = geo.images.len() - 1;
            let s = simulate_swim(&geo.images[last], &geo.labels[last], &cfg.geometric, &mut rng)?;
            geo.images[last] = s.image;
            geo.labels[last] = s.labels;
            swim = s.draw;
        }
        out_images.extend(geo.images);
        out_labels.extend(geo.labels);
        draws.push(PairDraw { frames, illumination: ill, geometric: geo.draw, swim });
        start = end;
    }
    let lineage = relineage(&out_labels, lineage)?;
    Ok(AugmentedStack { images: out_images, labels: out_labels, lineage, draws })
}
