//! Cell masks from a distance map: watershed restricted to the foreground
//! (`EDM >= foreground_threshold`) followed by merging of regions whose
//! interface is higher than the merge threshold.

use std::cmp::Ordering;
use std::collections::{BTreeMap, BinaryHeap, VecDeque};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{Grid, LabelMap};
use crate::truth_maps::DistanceMap;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WatershedConfig {
    pub foreground_threshold: f64,
    /// Touching regions merge when their interface value is strictly above this.
    pub merge_threshold: f64,
    pub seed_min_height: f64,
    /// Box-filter radius applied to the heights used for seeding and flooding.
    pub smoothing_radius: usize,
}

impl Default for WatershedConfig {
    fn default() -> Self {
        Self { foreground_threshold: 1.0, merge_threshold: 1.5, seed_min_height: 1.0, smoothing_radius: 0 }
    }
}

impl WatershedConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.foreground_threshold >= 0.0) {
            return Err(Error::InvalidConfig("foreground_threshold must be >= 0".into()));
        }
        if !(self.merge_threshold >= self.foreground_threshold) {
            return Err(Error::InvalidConfig("merge_threshold must be >= foreground_threshold".into()));
        }
        Ok(())
    }
}

/// Max-heap entry: higher height first, then lower pixel index.
#[derive(PartialEq)]
struct Pending {
    height: f64,
    index: usize,
}

impl Eq for Pending {}

impl Ord for Pending {
    fn cmp(&self, other: &Self) -> Ordering {
        self.height.total_cmp(&other.height).then_with(|| other.index.cmp(&self.index))
    }
}

impl PartialOrd for Pending {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

fn box_smooth(map: &DistanceMap, radius: usize) -> DistanceMap {
    if radius == 0 {
        return map.clone();
    }
    let s = map.shape();
    let r = radius as i64;
    let (h, w) = (s.height as i64, s.width as i64);
    let mut out = map.clone();
    for y in 0..h {
        for x in 0..w {
            let (mut acc, mut n) = (0.0, 0);
            for yy in (y - r).max(0)..=(y + r).min(h - 1) {
                for xx in (x - r).max(0)..=(x + r).min(w - 1) {
                    acc += map.get(yy as usize, xx as usize);
                    n += 1;
                }
            }
            out.set(y as usize, x as usize, acc / n as f64);
        }
    }
    out
}

/// Seeded watershed on the foreground before any merging; labels are
/// assigned to seeds in raster order of their first pixel.
pub fn flood_regions(edm: &DistanceMap, cfg: &WatershedConfig) -> LabelMap {
    let shape = edm.shape();
    let n = shape.len();
    let fg: Vec<bool> = edm.data().iter().map(|&v| v >= cfg.foreground_threshold).collect();
    let heights = box_smooth(edm, cfg.smoothing_radius);
    let height = heights.data();

    // foreground components
    let mut component = vec![usize::MAX; n];
    let mut n_components = 0;
    let mut queue = VecDeque::new();
    for start in 0..n {
        if !fg[start] || component[start] != usize::MAX {
            continue;
        }
        component[start] = n_components;
        queue.push_back(start);
        while let Some(i) = queue.pop_front() {
            for j in shape.neighbors4(i) {
                if fg[j] && component[j] == usize::MAX {
                    component[j] = n_components;
                    queue.push_back(j);
                }
            }
        }
        n_components += 1;
    }

    // regional-maximum plateaus
    let mut plateau_of = vec![usize::MAX; n];
    let mut maxima: Vec<(Vec<usize>, f64)> = Vec::new();
    let mut members = Vec::new();
    for start in 0..n {
        if !fg[start] || plateau_of[start] != usize::MAX {
            continue;
        }
        let h0 = height[start];
        let id = start;
        members.clear();
        plateau_of[start] = id;
        queue.push_back(start);
        let mut is_max = true;
        while let Some(i) = queue.pop_front() {
            members.push(i);
            for j in shape.neighbors4(i) {
                if !fg[j] {
                    continue;
                }
                if height[j] > h0 {
                    is_max = false;
                } else if height[j] == h0 && plateau_of[j] == usize::MAX {
                    plateau_of[j] = id;
                    queue.push_back(j);
                }
            }
        }
        if is_max {
            let mut pix = members.clone();
            pix.sort_unstable();
            maxima.push((pix, h0));
        }
    }

    let mut seeded = vec![false; n_components];
    let mut best: Vec<Option<usize>> = vec![None; n_components];
    let mut seeds: Vec<usize> = Vec::new();
    for (k, (pix, h0)) in maxima.iter().enumerate() {
        let c = component[pix[0]];
        if *h0 >= cfg.seed_min_height {
            seeded[c] = true;
            seeds.push(k);
        }
        if best[c].is_none_or(|b| maxima[b].1 < *h0) {
            best[c] = Some(k);
        }
    }
    // a component without a tall enough maximum keeps its highest one
    for c in 0..n_components {
        if !seeded[c] {
            seeds.extend(best[c]);
        }
    }
    seeds.sort_by_key(|&k| maxima[k].0[0]);

    let mut labels = vec![0u32; n];
    let mut heap = BinaryHeap::new();
    for (rank, &k) in seeds.iter().enumerate() {
        for &i in &maxima[k].0 {
            labels[i] = rank as u32 + 1;
        }
    }
    for i in 0..n {
        if labels[i] != 0 {
            for j in shape.neighbors4(i) {
                if fg[j] && labels[j] == 0 {
                    heap.push(Pending { height: height[j], index: j });
                }
            }
        }
    }
    while let Some(Pending { index: i, .. }) = heap.pop() {
        if labels[i] != 0 {
            continue;
        }
        let mut choice: Option<(f64, u32)> = None;
        for j in shape.neighbors4(i) {
            let l = labels[j];
            if l == 0 {
                continue;
            }
            let better = match choice {
                None => true,
                Some((bh, bl)) => height[j] > bh || (height[j] == bh && l < bl),
            };
            if better {
                choice = Some((height[j], l));
            }
        }
        let (_, l) = choice.expect("queued pixels touch an assigned neighbour");
        labels[i] = l;
        for j in shape.neighbors4(i) {
            if fg[j] && labels[j] == 0 {
                heap.push(Pending { height: height[j], index: j });
            }
        }
    }
    Grid::from_vec(shape, labels).expect("same shape")
}

/// For each pair of touching regions `(a, b)`, `a < b`: the maximum over
/// 4-adjacent pixel pairs across their boundary of `min(edm(p), edm(q))`.
pub fn interface_values(labels: &LabelMap, edm: &DistanceMap) -> BTreeMap<(u32, u32), f64> {
    let shape = labels.shape();
    let lab = labels.data();
    let e = edm.data();
    let mut out: BTreeMap<(u32, u32), f64> = BTreeMap::new();
    let mut visit = |i: usize, j: usize| {
        let (a, b) = (lab[i], lab[j]);
        if a != 0 && b != 0 && a != b {
            let key = (a.min(b), a.max(b));
            let v = e[i].min(e[j]);
            out.entry(key).and_modify(|m| *m = m.max(v)).or_insert(v);
        }
    };
    for y in 0..shape.height {
        for x in 0..shape.width {
            let i = shape.index(y, x);
            if x + 1 < shape.width {
                visit(i, i + 1);
            }
            if y + 1 < shape.height {
                visit(i, i + shape.width);
            }
        }
    }
    out
}

fn find(parent: &mut [u32], mut x: u32) -> u32 {
    while parent[x as usize] != x {
        parent[x as usize] = parent[parent[x as usize] as usize];
        x = parent[x as usize];
    }
    x
}

/// Merge regions across high interfaces, then relabel `1..=K` from top to bottom.
pub fn merge_regions(regions: &LabelMap, edm: &DistanceMap, merge_threshold: f64) -> LabelMap {
    let max_label = regions.data().iter().copied().max().unwrap_or(0);
    let mut parent: Vec<u32> = (0..=max_label).collect();
    // merged interfaces are the max of their parts, so the fixed point is
    // the set of components over edges above threshold
    for (&(a, b), &v) in &interface_values(regions, edm) {
        if v > merge_threshold {
            let (ra, rb) = (find(&mut parent, a), find(&mut parent, b));
            if ra != rb {
                let (lo, hi) = (ra.min(rb), ra.max(rb));
                parent[hi as usize] = lo;
            }
        }
    }
    let merged: Vec<u32> = regions
        .data()
        .iter()
        .map(|&l| if l == 0 { 0 } else { find(&mut parent, l) })
        .collect();
    relabel_by_centroid(&Grid::from_vec(regions.shape(), merged).expect("same shape"))
}

/// Relabel `1..=K` in increasing centroid Y (ties: first pixel in raster order).
pub fn relabel_by_centroid(labels: &LabelMap) -> LabelMap {
    let w = labels.shape().width;
    let mut stats: BTreeMap<u32, (usize, usize, usize)> = BTreeMap::new();
    for (i, &l) in labels.data().iter().enumerate() {
        if l != 0 {
            let e = stats.entry(l).or_insert((0, 0, i));
            e.0 += i / w;
            e.1 += 1;
        }
    }
    let mut order: Vec<(u32, f64, usize)> =
        stats.iter().map(|(&l, &(sy, n, first))| (l, sy as f64 / n as f64, first)).collect();
    order.sort_by(|a, b| a.1.total_cmp(&b.1).then(a.2.cmp(&b.2)));
    let mut table: BTreeMap<u32, u32> = BTreeMap::new();
    for (rank, (l, _, _)) in order.iter().enumerate() {
        table.insert(*l, rank as u32 + 1);
    }
    labels.map(|&l| if l == 0 { 0 } else { table[&l] })
}

pub fn watershed_segment(edm: &DistanceMap, cfg: &WatershedConfig) -> LabelMap {
    let regions = flood_regions(edm, cfg);
    merge_regions(&regions, edm, cfg.merge_threshold)
}

pub fn segment_stack(edms: &[DistanceMap], cfg: &WatershedConfig) -> Result<Vec<LabelMap>> {
    if let Some(first) = edms.first() {
        for e in edms {
            first.shape().ensure_same(&e.shape())?;
        }
    }
    Ok(edms.par_iter().map(|e| watershed_segment(e, cfg)).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{cell_masks, ImageShape, Mask};
    use crate::simulator::{simulate, SimConfig};
    use crate::truth_maps::compute_edm;
    use proptest::prelude::*;

    fn n_regions(l: &LabelMap) -> usize {
        cell_masks(l).len()
    }

    #[test]
    fn isolated_cell_is_one_region() {
        let seq = simulate(&SimConfig { initial_cells: 1, frames: 1, render_noise: None, ..Default::default() })
            .unwrap();
        let edm = compute_edm(&seq.labels[0]);
        let out = watershed_segment(&edm, &WatershedConfig::default());
        assert_eq!(out, seq.labels[0].map(|&l| l.min(1)));
    }

    #[test]
    fn two_cells_ordered_by_y() {
        let s = ImageShape::new(20, 5);
        let mut labels = Grid::filled(s, 0u32);
        for y in 1..8 {
            for x in 0..5 {
                labels.set(y, x, 7);
            }
        }
        for y in 9..18 {
            for x in 0..5 {
                labels.set(y, x, 3);
            }
        }
        let out = watershed_segment(&compute_edm(&labels), &WatershedConfig::default());
        assert_eq!(*out.get(4, 2), 1);
        assert_eq!(*out.get(12, 2), 2);
        assert_eq!(n_regions(&out), 2);
    }

    /// Union of two cones `7 - |p - c|` with centers 8 px apart: the ridge
    /// between them peaks at 3.0 on the middle column.
    fn two_lobes() -> DistanceMap {
        let s = ImageShape::new(17, 23);
        let centers = [(8.0, 7.0), (8.0, 15.0)];
        let mut g = Grid::filled(s, 0.0);
        for y in 0..s.height {
            for x in 0..s.width {
                let v = centers
                    .iter()
                    .map(|&(cy, cx): &(f64, f64)| 7.0 - ((y as f64 - cy).powi(2) + (x as f64 - cx).powi(2)).sqrt())
                    .fold(f64::NEG_INFINITY, f64::max);
                g.set(y, x, if v < 1.0 { 0.0 } else { v });
            }
        }
        g
    }

    #[test]
    fn saddle_merge_threshold() {
        let edm = two_lobes();
        let cfg = WatershedConfig::default();
        let regions = flood_regions(&edm, &cfg);
        assert_eq!(n_regions(&regions), 2);
        // brute-force interface scan
        let lab = regions.data();
        let s = regions.shape();
        let mut brute: f64 = 0.0;
        for i in 0..s.len() {
            for j in s.neighbors4(i) {
                if lab[i] != 0 && lab[j] != 0 && lab[i] != lab[j] {
                    brute = brute.max(edm.data()[i].min(edm.data()[j]));
                }
            }
        }
        assert_eq!(brute, 3.0);
        assert_eq!(interface_values(&regions, &edm)[&(1, 2)], 3.0);
        assert_eq!(n_regions(&watershed_segment(&edm, &cfg)), 1);
        let strict = WatershedConfig { merge_threshold: 4.0, ..cfg };
        assert_eq!(n_regions(&watershed_segment(&edm, &strict)), 2);
    }

    #[test]
    fn touching_cells_stay_separate() {
        let seq = simulate(&SimConfig { gap: 0, frames: 30, render_noise: None, ..Default::default() }).unwrap();
        for labels in &seq.labels {
            let out = watershed_segment(&compute_edm(labels), &WatershedConfig::default());
            assert_eq!(n_regions(&out), n_regions(labels));
        }
    }

    #[test]
    fn recovers_simulated_masks() {
        let seq = simulate(&SimConfig { frames: 60, growth_rate: 1.08, render_noise: None, ..Default::default() })
            .unwrap();
        let edms: Vec<_> = seq.labels.iter().map(compute_edm).collect();
        let out = segment_stack(&edms, &WatershedConfig::default()).unwrap();
        for (gt, pred) in seq.labels.iter().zip(&out) {
            let a: Vec<Mask> = cell_masks(gt).into_values().collect();
            let b: Vec<Mask> = cell_masks(pred).into_values().collect();
            assert_eq!(a, b);
        }
        let mismatched = vec![edms[0].clone(), Grid::filled(ImageShape::new(3, 3), 0.0)];
        assert!(matches!(segment_stack(&mismatched, &WatershedConfig::default()), Err(Error::ShapeMismatch { .. })));
    }

    #[test]
    fn identical_frames_identical_output() {
        let edm = two_lobes();
        let out = segment_stack(&[edm.clone(), edm.clone(), edm], &WatershedConfig::default()).unwrap();
        assert_eq!(out[0], out[1]);
        assert_eq!(out[1], out[2]);
    }

    #[test]
    fn seedless_component_keeps_its_foreground() {
        let mut edm = Grid::filled(ImageShape::new(3, 3), 0.0);
        edm.set(1, 1, 1.2);
        edm.set(1, 2, 1.1);
        let cfg = WatershedConfig { seed_min_height: 5.0, merge_threshold: 5.0, ..Default::default() };
        let out = watershed_segment(&edm, &cfg);
        assert_eq!(n_regions(&out), 1);
        assert_eq!(*out.get(1, 2), 1);
    }

    fn arb_edm() -> impl Strategy<Value = DistanceMap> {
        (2usize..14, 2usize..10).prop_flat_map(|(h, w)| {
            proptest::collection::vec(prop_oneof![Just(0.0), 0.0f64..6.0], h * w)
                .prop_map(move |v| Grid::from_vec(ImageShape::new(h, w), v).unwrap())
        })
    }

    proptest! {
        #[test]
        fn watershed_invariants(edm in arb_edm(), t1 in 1.0f64..4.0, dt in 0.0f64..3.0) {
            let cfg = WatershedConfig { merge_threshold: t1, ..Default::default() };
            let out = watershed_segment(&edm, &cfg);
            for (&l, &v) in out.data().iter().zip(edm.data()) {
                prop_assert_eq!(l != 0, v >= 1.0);
            }
            for m in cell_masks(&out).values() {
                prop_assert!(m.is_4_connected());
            }
            let higher = WatershedConfig { merge_threshold: t1 + dt, ..Default::default() };
            prop_assert!(n_regions(&watershed_segment(&edm, &higher)) >= n_regions(&out));
            prop_assert_eq!(watershed_segment(&edm, &cfg), out);
        }
    }
}
