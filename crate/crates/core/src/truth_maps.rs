//! Network targets derived from labels and links: distance map, Y
//! displacement map and the four-class category map.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{CellRecord, Grid, LabelMap, Lineage};

pub type DistanceMap = Grid<f64>;
pub type DisplacementMap = Grid<f64>;
pub type CategoryMap = Grid<u8>;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[repr(u8)]
pub enum Category {
    Background = 0,
    Normal = 1,
    Divided = 2,
    NoPrevious = 3,
}

impl Category {
    pub const COUNT: usize = 4;

    pub fn from_u8(v: u8) -> Option<Self> {
        match v {
            0 => Some(Category::Background),
            1 => Some(Category::Normal),
            2 => Some(Category::Divided),
            3 => Some(Category::NoPrevious),
            _ => None,
        }
    }
}

/// What counts as "outside" a foreground pixel when measuring distances.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EdmMode {
    /// Distance to the nearest pixel not carrying the same label, so
    /// touching cells are separated by a valley of height 1.
    #[default]
    PerCell,
    /// Distance to the nearest background pixel.
    Foreground,
}

/// Exact squared Euclidean distance transform. Pixels outside the image
/// count as outside every cell.
pub fn squared_edm(labels: &LabelMap, mode: EdmMode) -> Grid<u64> {
    let shape = labels.shape();
    let (h, w) = (shape.height, shape.width);
    let lab = labels.data();
    let same = |a: u32, b: u32| match mode {
        EdmMode::PerCell => a == b,
        EdmMode::Foreground => b != 0,
    };

    // vertical distance to the nearest outside pixel within each column
    let mut g = vec![0u64; shape.len()];
    for x in 0..w {
        let mut y = 0;
        while y < h {
            let l = lab[y * w + x];
            if l == 0 {
                y += 1;
                continue;
            }
            let start = y;
            while y < h && same(l, lab[y * w + x]) {
                y += 1;
            }
            for yy in start..y {
                g[yy * w + x] = ((yy - start + 1).min(y - yy)) as u64;
            }
        }
    }

    let mut out = Grid::filled(shape, 0u64);
    let mut sites = Vec::with_capacity(w + 2);
    let mut envelope = Envelope::default();
    for y in 0..h {
        let row = &lab[y * w..(y + 1) * w];
        let mut x = 0;
        while x < w {
            let l = row[x];
            if l == 0 {
                x += 1;
                continue;
            }
            let start = x;
            while x < w && same(l, row[x]) {
                x += 1;
            }
            // sites: the two outside pixels bounding the run, then the run itself
            sites.clear();
            sites.push(0);
            sites.extend((start..x).map(|xx| g[y * w + xx] * g[y * w + xx]));
            sites.push(0);
            envelope.distances(&sites, |i, d| {
                if (1..sites.len() - 1).contains(&i) {
                    out.set(y, start + i - 1, d);
                }
            });
        }
    }
    out
}

/// Lower envelope of parabolas `(x - q)^2 + f(q)` over integer sites, with
/// breakpoints kept as exact rationals.
#[derive(Default)]
struct Envelope {
    v: Vec<usize>,
    // breakpoint z[k] = num / den, den > 0; None = -inf
    z: Vec<Option<(i128, i128)>>,
}

impl Envelope {
    fn distances(&mut self, f: &[u64], mut emit: impl FnMut(usize, u64)) {
        let n = f.len();
        self.v.clear();
        self.z.clear();
        self.v.push(0);
        self.z.push(None);
        let key = |q: usize| f[q] as i128 + (q * q) as i128;
        let intersect = |a: usize, b: usize| (key(b) - key(a), 2 * (b as i128 - a as i128));
        for q in 1..n {
            loop {
                let k = self.v.len() - 1;
                let s = intersect(self.v[k], q);
                let drop = match self.z[k] {
                    None => false,
                    Some((zn, zd)) => s.0 * zd <= zn * s.1,
                };
                if drop {
                    self.v.pop();
                    self.z.pop();
                } else {
                    self.v.push(q);
                    self.z.push(Some(s));
                    break;
                }
            }
        }
        let mut k = 0;
        for x in 0..n {
            while k + 1 < self.v.len() {
                let (zn, zd) = self.z[k + 1].expect("only the first breakpoint is -inf");
                if zn < x as i128 * zd {
                    k += 1;
                } else {
                    break;
                }
            }
            let q = self.v[k];
            let dx = x.abs_diff(q) as u64;
            emit(x, dx * dx + f[q]);
        }
    }
}

/// Euclidean distance map in pixels (0 on background, >= 1 inside cells).
pub fn compute_edm(labels: &LabelMap) -> DistanceMap {
    compute_edm_with(labels, EdmMode::PerCell)
}

pub fn compute_edm_with(labels: &LabelMap, mode: EdmMode) -> DistanceMap {
    squared_edm(labels, mode).map(|&d| (d as f64).sqrt())
}

fn parent_center(prev: &[CellRecord], child: &CellRecord) -> Result<Option<f64>> {
    match child.parent_id {
        None => Ok(None),
        Some(p) => prev
            .binary_search_by_key(&p, |c| c.id)
            .map(|i| Some(prev[i].center_y))
            .map_err(|_| Error::BrokenLink { frame: child.frame, id: child.id, parent: p }),
    }
}

fn sorted(cells: &[CellRecord]) -> std::borrow::Cow<'_, [CellRecord]> {
    if cells.windows(2).all(|w| w[0].id < w[1].id) {
        std::borrow::Cow::Borrowed(cells)
    } else {
        let mut v = cells.to_vec();
        v.sort_by_key(|c| c.id);
        std::borrow::Cow::Owned(v)
    }
}

/// Per-label value table painted onto the label map.
fn paint<T: Copy>(labels: &LabelMap, cells: &[CellRecord], background: T, value: impl Fn(&CellRecord) -> T) -> Grid<T> {
    let max_id = cells.iter().map(|c| c.id).max().unwrap_or(0) as usize;
    let mut table = vec![background; max_id + 1];
    for c in cells {
        table[c.id as usize] = value(c);
    }
    labels.map(|&l| table.get(l as usize).copied().unwrap_or(background))
}

/// Inside each linked cell: its center minus its parent's center; 0 elsewhere.
pub fn compute_displacement(prev: &[CellRecord], curr: &[CellRecord], curr_labels: &LabelMap) -> Result<DisplacementMap> {
    let prev = sorted(prev);
    let values = curr
        .iter()
        .map(|c| Ok(parent_center(&prev, c)?.map_or(0.0, |pc| c.center_y - pc)))
        .collect::<Result<Vec<f64>>>()?;
    let by_id: std::collections::HashMap<u32, f64> = curr.iter().map(|c| c.id).zip(values).collect();
    Ok(paint(curr_labels, curr, 0.0, |c| by_id[&c.id]))
}

pub fn compute_categories(prev: &[CellRecord], curr: &[CellRecord], curr_labels: &LabelMap) -> Result<CategoryMap> {
    let prev = sorted(prev);
    for c in curr {
        parent_center(&prev, c)?;
    }
    let siblings = |p: u32| curr.iter().filter(|c| c.parent_id == Some(p)).count();
    Ok(paint(curr_labels, curr, Category::Background as u8, |c| {
        let class = match c.parent_id {
            None => Category::NoPrevious,
            Some(p) if siblings(p) >= 2 => Category::Divided,
            Some(_) => Category::Normal,
        };
        class as u8
    }))
}

#[derive(Clone, Debug, PartialEq)]
pub struct TruthMaps {
    pub edm: DistanceMap,
    pub displacement: DisplacementMap,
    pub categories: CategoryMap,
}

/// Targets for every frame; frame 0 has no previous frame (all cells class 3).
pub fn truth_maps(labels: &[LabelMap], lineage: &Lineage) -> Result<Vec<TruthMaps>> {
    if labels.len() != lineage.num_frames() {
        return Err(Error::DimensionMismatch(format!(
            "{} label frames but lineage has {}",
            labels.len(),
            lineage.num_frames()
        )));
    }
    (0..labels.len())
        .into_par_iter()
        .map(|f| {
            let empty = Vec::new();
            let prev = if f == 0 { &empty } else { &lineage.frames[f - 1] };
            let curr = &lineage.frames[f];
            Ok(TruthMaps {
                edm: compute_edm(&labels[f]),
                displacement: compute_displacement(prev, curr, &labels[f])?,
                categories: compute_categories(prev, curr, &labels[f])?,
            })
        })
        .collect()
}

/// Stand-in for imperfect predictions: additive Gaussian noise on both
/// maps, with the distance map clamped at 0 afterwards.
pub fn corrupt_maps(
    edm: &DistanceMap,
    displacement: &DisplacementMap,
    sigma: f64,
    rng: &mut impl Rng,
) -> Result<(DistanceMap, DisplacementMap)> {
    edm.shape().ensure_same(&displacement.shape())?;
    let noise = Normal::new(0.0, sigma).map_err(|e| Error::InvalidConfig(format!("noise sigma: {e}")))?;
    let e = edm.map(|&v| (v + noise.sample(rng)).max(0.0));
    let d = displacement.map(|&v| v + noise.sample(rng));
    Ok((e, d))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{cell_masks, ImageShape};
    use proptest::prelude::*;

    /// All-pairs oracle over the image plus a one-pixel virtual ring.
    fn brute_force(labels: &LabelMap, mode: EdmMode) -> Grid<u64> {
        let s = labels.shape();
        let (h, w) = (s.height as i64, s.width as i64);
        let at = |y: i64, x: i64| {
            if (0..h).contains(&y) && (0..w).contains(&x) {
                *labels.get(y as usize, x as usize)
            } else {
                0
            }
        };
        let mut out = Grid::filled(s, 0u64);
        for y in 0..h {
            for x in 0..w {
                let l = at(y, x);
                if l == 0 {
                    continue;
                }
                let mut best = u64::MAX;
                for qy in -1..=h {
                    for qx in -1..=w {
                        let m = at(qy, qx);
                        let outside = match mode {
                            EdmMode::PerCell => m != l,
                            EdmMode::Foreground => m == 0,
                        };
                        if outside {
                            best = best.min(((y - qy).pow(2) + (x - qx).pow(2)) as u64);
                        }
                    }
                }
                out.set(y as usize, x as usize, best);
            }
        }
        out
    }

    #[test]
    fn edm_examples() {
        let s = ImageShape::new(3, 3);
        assert!(compute_edm(&Grid::filled(s, 0)).data().iter().all(|&v| v == 0.0));
        let mut one = Grid::filled(s, 0u32);
        one.set(1, 1, 1);
        assert_eq!(*compute_edm(&one).get(1, 1), 1.0);
        let full = compute_edm(&Grid::filled(ImageShape::new(5, 5), 1));
        assert_eq!(*full.get(2, 2), 3.0);
        for (y, x) in [(0, 0), (0, 4), (4, 0), (4, 4)] {
            assert_eq!(*full.get(y, x), 1.0);
        }
    }

    #[test]
    fn touching_cells_have_a_valley() {
        let s = ImageShape::new(8, 5);
        let mut labels = Grid::filled(s, 1u32);
        for y in 4..8 {
            for x in 0..5 {
                labels.set(y, x, 2);
            }
        }
        let per_cell = compute_edm(&labels);
        assert_eq!(*per_cell.get(3, 2), 1.0);
        assert_eq!(*per_cell.get(4, 2), 1.0);
        let fg = compute_edm_with(&labels, EdmMode::Foreground);
        assert_eq!(*fg.get(3, 2), 3.0);
    }

    fn arb_labels() -> impl Strategy<Value = LabelMap> {
        (1usize..=12, 1usize..=12, 1u32..4).prop_flat_map(|(h, w, k)| {
            proptest::collection::vec(0..=k, h * w)
                .prop_map(move |v| Grid::from_vec(ImageShape::new(h, w), v).unwrap())
        })
    }

    proptest! {
        #[test]
        fn edm_matches_bruteforce(labels in arb_labels()) {
            for mode in [EdmMode::PerCell, EdmMode::Foreground] {
                prop_assert_eq!(squared_edm(&labels, mode), brute_force(&labels, mode));
            }
            let edm = compute_edm(&labels);
            for (d, &l) in edm.data().iter().zip(labels.data()) {
                prop_assert_eq!(*d > 0.0, l > 0);
                if l > 0 { prop_assert!(*d >= 1.0); }
            }
        }
    }

    fn records(labels: &LabelMap, frame: usize, parent: impl Fn(u32) -> Option<u32>) -> Vec<CellRecord> {
        cell_masks(labels)
            .iter()
            .map(|(&id, m)| CellRecord::from_mask(id, frame, m, parent(id)).unwrap())
            .collect()
    }

    fn column_cells(h: usize, spans: &[(usize, usize, u32)]) -> LabelMap {
        let mut g = Grid::filled(ImageShape::new(h, 1), 0u32);
        for &(a, b, l) in spans {
            for y in a..=b {
                g.set(y, 0, l);
            }
        }
        g
    }

    #[test]
    fn displacement_examples() {
        let prev_l = column_cells(40, &[(8, 12, 1)]);
        let prev = records(&prev_l, 0, |_| None);
        assert_eq!(prev[0].center_y, 10.0);

        let same = records(&prev_l, 1, |_| Some(1));
        let d = compute_displacement(&prev, &same, &prev_l).unwrap();
        assert!(d.data().iter().all(|&v| v == 0.0));

        let moved_l = column_cells(40, &[(12, 16, 1)]);
        let moved = records(&moved_l, 1, |_| Some(1));
        let d = compute_displacement(&prev, &moved, &moved_l).unwrap();
        assert_eq!(*d.get(14, 0), 4.0);
        assert_eq!(*d.get(0, 0), 0.0);

        let mother_l = column_cells(40, &[(16, 24, 1)]);
        let mother = records(&mother_l, 0, |_| None);
        let daughters_l = column_cells(40, &[(13, 17, 1), (24, 28, 2)]);
        let daughters = records(&daughters_l, 1, |_| Some(1));
        let d = compute_displacement(&mother, &daughters, &daughters_l).unwrap();
        assert_eq!(*d.get(15, 0), -5.0);
        assert_eq!(*d.get(26, 0), 6.0);
        let c = compute_categories(&mother, &daughters, &daughters_l).unwrap();
        assert_eq!(*c.get(15, 0), Category::Divided as u8);
        assert_eq!(*c.get(26, 0), Category::Divided as u8);
        assert_eq!(*c.get(0, 0), Category::Background as u8);

        let broken = records(&moved_l, 1, |_| Some(7));
        assert!(matches!(compute_displacement(&prev, &broken, &moved_l), Err(Error::BrokenLink { .. })));
    }

    #[test]
    fn category_examples() {
        let prev_l = column_cells(40, &[(8, 12, 1)]);
        let prev = records(&prev_l, 0, |_| None);
        let curr_l = column_cells(40, &[(9, 13, 1), (30, 35, 2)]);
        let curr = records(&curr_l, 1, |id| (id == 1).then_some(1));
        let c = compute_categories(&prev, &curr, &curr_l).unwrap();
        assert_eq!(*c.get(10, 0), Category::Normal as u8);
        assert_eq!(*c.get(32, 0), Category::NoPrevious as u8);
        let counts: usize = (0..4u8).map(|k| c.data().iter().filter(|&&v| v == k).count()).sum();
        assert_eq!(counts, 40);
    }

    #[test]
    fn displacement_ignores_relabeling_and_tracks_translations() {
        let prev_l = column_cells(60, &[(2, 10, 1), (13, 20, 2)]);
        let prev = records(&prev_l, 0, |_| None);
        let k = 5;
        let curr_l = column_cells(60, &[(2 + k, 10 + k, 2), (13 + k, 20 + k, 1)]);
        let curr = records(&curr_l, 1, |id| Some(3 - id));
        let d = compute_displacement(&prev, &curr, &curr_l).unwrap();
        for (v, &l) in d.data().iter().zip(curr_l.data()) {
            if l != 0 {
                assert_eq!(*v, k as f64);
            }
        }
    }
}
