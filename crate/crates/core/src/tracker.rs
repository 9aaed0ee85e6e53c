//! Frame-to-frame linking by displacement regression.
//!
//! Each cell of frame `F` is moved by the opposite of its predicted Y
//! displacement and linked to the frame `F - 1` cell it overlaps most.
//! Links always point backwards, so a cell has at most one parent while a
//! parent may have several children (division).

use std::collections::BTreeMap;
use std::fmt::Write as _;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{cell_masks, centroid_y, shift_mask_y, CellRecord, LabelMap, Lineage, Mask};
use crate::segmenter::{segment_stack, WatershedConfig};
use crate::truth_maps::{Category, CategoryMap, DisplacementMap, DistanceMap};

#[derive(Clone, Copy, Debug)]
pub struct FramePairInput<'a> {
    pub prev_labels: &'a LabelMap,
    pub curr_labels: &'a LabelMap,
    pub displacement: &'a DisplacementMap,
    pub categories: Option<&'a CategoryMap>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Link {
    pub curr_id: u32,
    pub prev_id: Option<u32>,
    /// Per-cell displacement that was undone before matching.
    pub dy: f64,
    pub overlap: usize,
    pub category: Option<Category>,
}

/// One entry per current cell, ordered by `curr_id`.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LinkSet {
    pub links: Vec<Link>,
}

impl LinkSet {
    pub fn parent_of(&self, curr_id: u32) -> Option<u32> {
        self.links
            .binary_search_by_key(&curr_id, |l| l.curr_id)
            .ok()
            .and_then(|i| self.links[i].prev_id)
    }
}

/// Median of the displacement values under the mask.
pub fn cell_displacement(mask: &Mask, displacement: &DisplacementMap) -> Result<f64> {
    if mask.is_empty() {
        return Err(Error::EmptyMask);
    }
    let mut v: Vec<f64> = mask.indices().iter().map(|&i| displacement.data()[i]).collect();
    v.sort_unstable_by(f64::total_cmp);
    let n = v.len();
    Ok(if n % 2 == 1 { v[n / 2] } else { 0.5 * (v[n / 2 - 1] + v[n / 2]) })
}

/// Most frequent class under the mask; ties go to the lower class.
fn majority_category(mask: &Mask, categories: &CategoryMap) -> Option<Category> {
    let mut counts = [0usize; Category::COUNT];
    for &i in mask.indices() {
        if let Some(slot) = counts.get_mut(categories.data()[i] as usize) {
            *slot += 1;
        }
    }
    let (best, &n) = counts.iter().enumerate().rev().max_by_key(|(_, &n)| n)?;
    (n > 0).then(|| Category::from_u8(best as u8)).flatten()
}

pub fn track_pair(input: &FramePairInput<'_>) -> Result<LinkSet> {
    let shape = input.curr_labels.shape();
    shape.ensure_same(&input.prev_labels.shape())?;
    shape.ensure_same(&input.displacement.shape())?;
    if let Some(c) = input.categories {
        shape.ensure_same(&c.shape())?;
    }
    let prev_lab = input.prev_labels.data();
    let prev_centers: BTreeMap<u32, f64> = cell_masks(input.prev_labels)
        .iter()
        .map(|(&id, m)| (id, centroid_y(m).expect("label masks are nonempty")))
        .collect();

    let mut links = Vec::new();
    for (id, mask) in cell_masks(input.curr_labels) {
        let dy = cell_displacement(&mask, input.displacement)?;
        let category = input.categories.and_then(|c| majority_category(&mask, c));
        if category == Some(Category::NoPrevious) {
            links.push(Link { curr_id: id, prev_id: None, dy, overlap: 0, category });
            continue;
        }
        let moved = shift_mask_y(&mask, -dy);
        let mut overlaps: BTreeMap<u32, usize> = BTreeMap::new();
        for &i in moved.indices() {
            let l = prev_lab[i];
            if l != 0 {
                *overlaps.entry(l).or_default() += 1;
            }
        }
        let moved_center = centroid_y(&moved).unwrap_or(centroid_y(&mask)? - dy);
        // ascending id iteration + strict comparisons keep the smaller id on full ties
        let mut best: Option<(u32, usize, f64)> = None;
        for (&pid, &n) in &overlaps {
            let dist = (prev_centers[&pid] - moved_center).abs();
            let better = match best {
                None => true,
                Some((_, bn, bd)) => n > bn || (n == bn && dist < bd),
            };
            if better {
                best = Some((pid, n, dist));
            }
        }
        let (prev_id, overlap) = best.map_or((None, 0), |(p, n, _)| (Some(p), n));
        links.push(Link { curr_id: id, prev_id, dy, overlap, category });
    }
    Ok(LinkSet { links })
}

/// Cell records and links for a whole sequence. `links[k]` links frame
/// `k + 1` to frame `k`.
pub fn assemble_lineage(labels: &[LabelMap], links: &[LinkSet]) -> Result<Lineage> {
    if labels.len().saturating_sub(1) != links.len() {
        return Err(Error::DimensionMismatch(format!(
            "{} frames need {} link sets, got {}",
            labels.len(),
            labels.len().saturating_sub(1),
            links.len()
        )));
    }
    let mut lineage = Lineage::from_label_stack(labels, |_, _| None)?;
    for (k, set) in links.iter().enumerate() {
        let frame = k + 1;
        for link in &set.links {
            let Some(pid) = link.prev_id else { continue };
            if lineage.cell(frame - 1, pid).is_none() {
                return Err(Error::BrokenLink { frame, id: link.curr_id, parent: pid });
            }
            let cells = &mut lineage.frames[frame];
            let pos = cells
                .binary_search_by_key(&link.curr_id, |c| c.id)
                .map_err(|_| Error::BrokenLink { frame, id: link.curr_id, parent: pid })?;
            cells[pos].parent_id = Some(pid);
        }
    }
    Ok(lineage)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub watershed: WatershedConfig,
    /// Segmented regions smaller than this are dropped before tracking.
    pub min_region_pixels: usize,
    pub use_categories: bool,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self { watershed: WatershedConfig::default(), min_region_pixels: 5, use_categories: true }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PipelineOutput {
    pub labels: Vec<LabelMap>,
    pub links: Vec<LinkSet>,
    pub lineage: Lineage,
}

pub fn drop_small_regions(labels: &LabelMap, min_pixels: usize) -> LabelMap {
    if min_pixels <= 1 {
        return labels.clone();
    }
    let masks = cell_masks(labels);
    let small: Vec<u32> = masks.iter().filter(|(_, m)| m.len() < min_pixels).map(|(&l, _)| l).collect();
    if small.is_empty() {
        return labels.clone();
    }
    let mut next = 0;
    let table: BTreeMap<u32, u32> = masks
        .keys()
        .filter(|l| !small.contains(l))
        .map(|&l| {
            next += 1;
            (l, next)
        })
        .collect();
    labels.map(|&l| table.get(&l).copied().unwrap_or(0))
}

/// Track an already segmented stack.
pub fn track_stack(
    labels: &[LabelMap],
    displacements: &[DisplacementMap],
    categories: Option<&[CategoryMap]>,
) -> Result<(Vec<LinkSet>, Lineage)> {
    if displacements.len() != labels.len() || categories.is_some_and(|c| c.len() != labels.len()) {
        return Err(Error::DimensionMismatch("stacks must have the same number of frames".into()));
    }
    let links = (1..labels.len())
        .into_par_iter()
        .map(|f| {
            track_pair(&FramePairInput {
                prev_labels: &labels[f - 1],
                curr_labels: &labels[f],
                displacement: &displacements[f],
                categories: categories.map(|c| &c[f]),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let lineage = assemble_lineage(labels, &links)?;
    Ok((links, lineage))
}

/// Segment every frame, link consecutive frames and assemble the lineage.
pub fn run_pipeline(
    edms: &[DistanceMap],
    displacements: &[DisplacementMap],
    categories: Option<&[CategoryMap]>,
    cfg: &PipelineConfig,
) -> Result<PipelineOutput> {
    cfg.watershed.validate()?;
    let labels: Vec<LabelMap> = segment_stack(edms, &cfg.watershed)?
        .par_iter()
        .map(|l| drop_small_regions(l, cfg.min_region_pixels))
        .collect();
    let categories = if cfg.use_categories { categories } else { None };
    let (links, lineage) = track_stack(&labels, displacements, categories)?;
    Ok(PipelineOutput { labels, links, lineage })
}

/// `frame,curr_id,prev_id,dy,overlap,category` rows; frame is the current frame.
pub fn links_csv(links: &[LinkSet]) -> String {
    let mut out = String::from("frame,curr_id,prev_id,dy,overlap,category\n");
    for (k, set) in links.iter().enumerate() {
        for l in &set.links {
            let prev = l.prev_id.map(|p| p.to_string()).unwrap_or_default();
            let cat = l.category.map(|c| (c as u8).to_string()).unwrap_or_default();
            let _ = writeln!(out, "{},{},{},{},{},{}", k + 1, l.curr_id, prev, l.dy, l.overlap, cat);
        }
    }
    out
}

/// Links of a lineage frame in [`LinkSet`] form (no diagnostics).
pub fn link_sets_from_lineage(lineage: &Lineage) -> Vec<LinkSet> {
    lineage
        .frames
        .iter()
        .skip(1)
        .map(|cells: &Vec<CellRecord>| LinkSet {
            links: cells
                .iter()
                .map(|c| Link { curr_id: c.id, prev_id: c.parent_id, dy: 0.0, overlap: 0, category: None })
                .collect(),
        })
        .collect()
}
