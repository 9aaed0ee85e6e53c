//! Coordinate conventions, the cell/lineage data model and mask overlap.
//!
//! Images are row-major with `y` along the microchannel: `y = 0` is the
//! closed end and `y = height - 1` the open end through which cells leave.

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ImageShape {
    #[serde(rename = "h")]
    pub height: usize,
    #[serde(rename = "w")]
    pub width: usize,
}

impl ImageShape {
    pub fn new(height: usize, width: usize) -> Self {
        Self { height, width }
    }

    pub fn len(&self) -> usize {
        self.height * self.width
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    #[inline]
    pub fn index(&self, y: usize, x: usize) -> usize {
        y * self.width + x
    }

    #[inline]
    pub fn coords(&self, index: usize) -> (usize, usize) {
        (index / self.width, index % self.width)
    }

    pub fn ensure_same(&self, other: &ImageShape) -> Result<()> {
        if self == other {
            Ok(())
        } else {
            Err(Error::ShapeMismatch { expected: *self, found: *other })
        }
    }

    /// 4-neighbours of a linear index, in (up, left, right, down) order.
    pub fn neighbors4(&self, index: usize) -> impl Iterator<Item = usize> {
        let (y, x) = self.coords(index);
        let w = self.width;
        let h = self.height;
        [
            (y > 0).then(|| index - w),
            (x > 0).then(|| index - 1),
            (x + 1 < w).then(|| index + 1),
            (y + 1 < h).then(|| index + w),
        ]
        .into_iter()
        .flatten()
    }
}

impl fmt::Display for ImageShape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}x{}", self.height, self.width)
    }
}

/// Row-major 2D array tied to an [`ImageShape`].
#[derive(Clone, Debug, PartialEq)]
pub struct Grid<T> {
    shape: ImageShape,
    data: Vec<T>,
}

impl<T: Clone> Grid<T> {
    pub fn filled(shape: ImageShape, value: T) -> Self {
        Self { shape, data: vec![value; shape.len()] }
    }
}

impl<T> Grid<T> {
    pub fn from_vec(shape: ImageShape, data: Vec<T>) -> Result<Self> {
        if data.len() != shape.len() {
            return Err(Error::DimensionMismatch(format!(
                "{} values for a {} grid",
                data.len(),
                shape
            )));
        }
        Ok(Self { shape, data })
    }

    pub fn shape(&self) -> ImageShape {
        self.shape
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<T> {
        self.data
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize) -> &T {
        &self.data[self.shape.index(y, x)]
    }

    #[inline]
    pub fn set(&mut self, y: usize, x: usize, value: T) {
        let i = self.shape.index(y, x);
        self.data[i] = value;
    }

    pub fn map<U>(&self, f: impl FnMut(&T) -> U) -> Grid<U> {
        Grid { shape: self.shape, data: self.data.iter().map(f).collect() }
    }
}

/// Per-frame cell labels, 0 = background.
pub type LabelMap = Grid<u32>;

/// Grayscale intensity image, nominally in `[0, 1]`.
pub type Image = Grid<f32>;

/// A set of pixels on a given image, stored as sorted unique linear indices.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Mask {
    shape: ImageShape,
    indices: Vec<usize>,
}

impl Mask {
    pub fn new(shape: ImageShape, mut indices: Vec<usize>) -> Self {
        indices.sort_unstable();
        indices.dedup();
        debug_assert!(indices.last().is_none_or(|&i| i < shape.len()));
        Self { shape, indices }
    }

    pub fn from_pixels(shape: ImageShape, pixels: impl IntoIterator<Item = (usize, usize)>) -> Self {
        Self::new(shape, pixels.into_iter().map(|(y, x)| shape.index(y, x)).collect())
    }

    pub fn shape(&self) -> ImageShape {
        self.shape
    }

    pub fn indices(&self) -> &[usize] {
        &self.indices
    }

    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    pub fn contains(&self, index: usize) -> bool {
        self.indices.binary_search(&index).is_ok()
    }

    pub fn pixels(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.indices.iter().map(|&i| self.shape.coords(i))
    }

    /// Inclusive Y extent, `None` for an empty mask.
    pub fn y_extent(&self) -> Option<(usize, usize)> {
        let first = self.indices.first()?;
        let last = self.indices.last()?;
        Some((first / self.shape.width, last / self.shape.width))
    }

    /// Whether the pixels form a single 4-connected component.
    pub fn is_4_connected(&self) -> bool {
        let Some(&start) = self.indices.first() else {
            return false;
        };
        let mut seen = vec![false; self.indices.len()];
        let mut stack = vec![start];
        seen[0] = true;
        let mut count = 1;
        while let Some(i) = stack.pop() {
            for n in self.shape.neighbors4(i) {
                if let Ok(pos) = self.indices.binary_search(&n) {
                    if !seen[pos] {
                        seen[pos] = true;
                        count += 1;
                        stack.push(n);
                    }
                }
            }
        }
        count == self.indices.len()
    }
}

/// Mean Y coordinate of the mask pixels.
pub fn centroid_y(mask: &Mask) -> Result<f64> {
    if mask.is_empty() {
        return Err(Error::EmptyMask);
    }
    let w = mask.shape.width;
    let sum: usize = mask.indices.iter().map(|&i| i / w).sum();
    Ok(sum as f64 / mask.len() as f64)
}

/// Number of pixels shared by two masks.
pub fn overlap_area(a: &Mask, b: &Mask) -> Result<usize> {
    a.shape.ensure_same(&b.shape)?;
    let (mut i, mut j, mut n) = (0, 0, 0);
    while i < a.indices.len() && j < b.indices.len() {
        match a.indices[i].cmp(&b.indices[j]) {
            std::cmp::Ordering::Less => i += 1,
            std::cmp::Ordering::Greater => j += 1,
            std::cmp::Ordering::Equal => {
                n += 1;
                i += 1;
                j += 1;
            }
        }
    }
    Ok(n)
}

/// Integer row offset used when shifting by a real displacement
/// (round half away from zero).
pub fn rounded_shift(dy: f64) -> i64 {
    dy.round() as i64
}

/// Translate a mask along Y, dropping pixels that leave the image.
pub fn shift_mask_y(mask: &Mask, dy: f64) -> Mask {
    let k = rounded_shift(dy);
    let shape = mask.shape;
    let h = shape.height as i64;
    let indices = mask
        .pixels()
        .filter_map(|(y, x)| {
            let ny = y as i64 + k;
            (0..h).contains(&ny).then(|| shape.index(ny as usize, x))
        })
        .collect();
    // translation preserves order
    Mask { shape, indices }
}

/// Masks of every nonzero label, ordered by label.
pub fn cell_masks(labels: &LabelMap) -> BTreeMap<u32, Mask> {
    let mut acc: BTreeMap<u32, Vec<usize>> = BTreeMap::new();
    for (i, &l) in labels.data().iter().enumerate() {
        if l != 0 {
            acc.entry(l).or_default().push(i);
        }
    }
    let shape = labels.shape();
    // indices are pushed in ascending order already
    acc.into_iter().map(|(l, indices)| (l, Mask { shape, indices })).collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CellRecord {
    pub id: u32,
    pub frame: usize,
    pub center_y: f64,
    pub y_min: usize,
    pub y_max: usize,
    pub pixel_count: usize,
    pub parent_id: Option<u32>,
    pub touches_open_end: bool,
}

impl CellRecord {
    pub fn from_mask(id: u32, frame: usize, mask: &Mask, parent_id: Option<u32>) -> Result<Self> {
        let center_y = centroid_y(mask)?;
        let (y_min, y_max) = mask.y_extent().ok_or(Error::EmptyMask)?;
        Ok(Self {
            id,
            frame,
            center_y,
            y_min,
            y_max,
            pixel_count: mask.len(),
            parent_id,
            touches_open_end: y_max + 1 == mask.shape().height,
        })
    }

    /// Extent along the channel axis in pixels.
    pub fn length(&self) -> usize {
        self.y_max - self.y_min + 1
    }
}

/// Cell observations of a whole sequence together with their parent links.
///
/// Cells of a frame are kept sorted by id. A link is stored on the child as
/// `parent_id` and always points to the immediately preceding frame.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Lineage {
    pub shape: ImageShape,
    pub frames: Vec<Vec<CellRecord>>,
}

impl Lineage {
    pub fn new(shape: ImageShape) -> Self {
        Self { shape, frames: Vec::new() }
    }

    /// Build records from label maps; `parent_of(frame, id)` supplies links.
    pub fn from_label_stack(
        labels: &[LabelMap],
        mut parent_of: impl FnMut(usize, u32) -> Option<u32>,
    ) -> Result<Self> {
        let shape = labels.first().map(|l| l.shape()).unwrap_or(ImageShape::new(0, 0));
        let mut lineage = Lineage::new(shape);
        for (frame, map) in labels.iter().enumerate() {
            shape.ensure_same(&map.shape())?;
            let cells = cell_masks(map)
                .iter()
                .map(|(&id, mask)| CellRecord::from_mask(id, frame, mask, parent_of(frame, id)))
                .collect::<Result<Vec<_>>>()?;
            lineage.frames.push(cells);
        }
        lineage.validate()?;
        Ok(lineage)
    }

    pub fn num_frames(&self) -> usize {
        self.frames.len()
    }

    pub fn num_cells(&self) -> usize {
        self.frames.iter().map(Vec::len).sum()
    }

    pub fn cell(&self, frame: usize, id: u32) -> Option<&CellRecord> {
        let cells = self.frames.get(frame)?;
        cells.binary_search_by_key(&id, |c| c.id).ok().map(|i| &cells[i])
    }

    pub fn parent(&self, frame: usize, id: u32) -> Option<u32> {
        self.cell(frame, id)?.parent_id
    }

    /// Ids at `frame + 1` whose parent is `id`.
    pub fn children(&self, frame: usize, id: u32) -> Vec<u32> {
        self.frames
            .get(frame + 1)
            .map(|cells| cells.iter().filter(|c| c.parent_id == Some(id)).map(|c| c.id).collect())
            .unwrap_or_default()
    }

    /// All links as `(child frame, child id, parent id)`.
    pub fn links(&self) -> impl Iterator<Item = (usize, u32, u32)> + '_ {
        self.frames
            .iter()
            .flatten()
            .filter_map(|c| c.parent_id.map(|p| (c.frame, c.id, p)))
    }

    /// Division events as `(frame of the children, parent id, children)`.
    pub fn divisions(&self) -> Vec<(usize, u32, Vec<u32>)> {
        let mut out = Vec::new();
        for (frame, cells) in self.frames.iter().enumerate().skip(1) {
            let mut by_parent: BTreeMap<u32, Vec<u32>> = BTreeMap::new();
            for c in cells {
                if let Some(p) = c.parent_id {
                    by_parent.entry(p).or_default().push(c.id);
                }
            }
            out.extend(
                by_parent.into_iter().filter(|(_, ch)| ch.len() >= 2).map(|(p, ch)| (frame, p, ch)),
            );
        }
        out
    }

    /// Check ordering, frame indices, and that every parent exists one frame earlier.
    pub fn validate(&self) -> Result<()> {
        for (frame, cells) in self.frames.iter().enumerate() {
            for (k, c) in cells.iter().enumerate() {
                if c.frame != frame || c.id == 0 || c.pixel_count == 0 || c.y_min > c.y_max {
                    return Err(Error::InvalidConfig(format!(
                        "malformed cell record {} at frame {frame}",
                        c.id
                    )));
                }
                if k > 0 && cells[k - 1].id >= c.id {
                    return Err(Error::InvalidConfig(format!(
                        "cell ids at frame {frame} are not strictly increasing"
                    )));
                }
                if let Some(p) = c.parent_id {
                    let exists = frame > 0 && self.cell(frame - 1, p).is_some();
                    if !exists {
                        return Err(Error::BrokenLink { frame, id: c.id, parent: p });
                    }
                }
            }
        }
        Ok(())
    }

    /// Drop a cell and the links of its children to it.
    pub fn remove_cell(&mut self, frame: usize, id: u32) {
        if let Some(cells) = self.frames.get_mut(frame) {
            cells.retain(|c| c.id != id);
        }
        if let Some(next) = self.frames.get_mut(frame + 1) {
            for c in next.iter_mut().filter(|c| c.parent_id == Some(id)) {
                c.parent_id = None;
            }
        }
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let mut lineage: Lineage = serde_json::from_str(s)?;
        for cells in &mut lineage.frames {
            cells.sort_by_key(|c| c.id);
        }
        lineage.validate()?;
        Ok(lineage)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn shape() -> ImageShape {
        ImageShape::new(12, 4)
    }

    #[test]
    fn centroid_examples() {
        let m = Mask::from_pixels(shape(), [(3, 0), (4, 0), (5, 0)]);
        assert_eq!(centroid_y(&m).unwrap(), 4.0);
        let m = Mask::from_pixels(shape(), [(7, 2)]);
        assert_eq!(centroid_y(&m).unwrap(), 7.0);
        // two pixels at y=0, three at y=1: 3/5
        let m = Mask::from_pixels(shape(), [(0, 0), (0, 1), (1, 0), (1, 1), (1, 2)]);
        assert!((centroid_y(&m).unwrap() - 0.6).abs() < 1e-15);
        assert!(matches!(centroid_y(&Mask::new(shape(), vec![])), Err(Error::EmptyMask)));
    }

    #[test]
    fn overlap_examples() {
        let a = Mask::new(shape(), (0..10).collect());
        assert_eq!(overlap_area(&a, &a).unwrap(), 10);
        let b = Mask::new(shape(), (20..30).collect());
        assert_eq!(overlap_area(&a, &b).unwrap(), 0);
        let c = Mask::new(ImageShape::new(3, 3), vec![0]);
        assert!(matches!(overlap_area(&a, &c), Err(Error::ShapeMismatch { .. })));
    }

    #[test]
    fn shift_examples() {
        let s = shape();
        let m = Mask::from_pixels(s, (1..6).map(|y| (y, 1)));
        assert_eq!(shift_mask_y(&m, 0.0), m);
        let up = shift_mask_y(&m, -3.0);
        assert_eq!(up, Mask::from_pixels(s, (0..3).map(|y| (y, 1))));
        let down = shift_mask_y(&m, 2.5);
        assert_eq!(down, Mask::from_pixels(s, (4..9).map(|y| (y, 1))));
        assert_eq!(rounded_shift(-2.5), -3);
        assert_eq!(rounded_shift(2.49), 2);
    }

    #[test]
    fn lineage_links_and_json() {
        let s = ImageShape::new(10, 2);
        let mut a = Grid::filled(s, 0u32);
        for y in 0..4 {
            a.set(y, 0, 1);
        }
        let mut b = Grid::filled(s, 0u32);
        b.set(0, 0, 1);
        b.set(1, 0, 1);
        b.set(3, 0, 2);
        b.set(4, 0, 2);
        let lin = Lineage::from_label_stack(&[a, b], |f, _| (f == 1).then_some(1)).unwrap();
        assert_eq!(lin.children(0, 1), vec![1, 2]);
        assert_eq!(lin.divisions(), vec![(1, 1, vec![1, 2])]);
        let back = Lineage::from_json(&lin.to_json().unwrap()).unwrap();
        assert_eq!(back, lin);
        let v: serde_json::Value = serde_json::from_str(&lin.to_json().unwrap()).unwrap();
        assert_eq!(v["shape"]["h"], 10);
        assert!(v["frames"][0][0]["parent_id"].is_null());

        let mut broken = lin.clone();
        broken.frames[1][0].parent_id = Some(9);
        assert!(matches!(broken.validate(), Err(Error::BrokenLink { .. })));
        let mut removed = lin.clone();
        removed.remove_cell(0, 1);
        assert!(removed.validate().is_ok());
        assert_eq!(removed.links().count(), 0);
    }

    fn arb_mask(s: ImageShape) -> impl Strategy<Value = Mask> {
        proptest::collection::vec(0..s.len(), 0..30).prop_map(move |v| Mask::new(s, v))
    }

    proptest! {
        #[test]
        fn overlap_symmetric_and_matches_bruteforce(a in arb_mask(shape()), b in arb_mask(shape())) {
            let ab = overlap_area(&a, &b).unwrap();
            prop_assert_eq!(ab, overlap_area(&b, &a).unwrap());
            prop_assert_eq!(overlap_area(&a, &a).unwrap(), a.len());
            let brute = a.indices().iter().filter(|i| b.indices().contains(i)).count();
            prop_assert_eq!(ab, brute);
        }

        #[test]
        fn shift_round_trip_and_centroid(a in arb_mask(shape()), k in -3i64..=3) {
            prop_assume!(!a.is_empty());
            let (lo, hi) = a.y_extent().unwrap();
            prop_assume!(lo as i64 + k >= 0 && hi as i64 + k < shape().height as i64);
            let moved = shift_mask_y(&a, k as f64);
            prop_assert_eq!(shift_mask_y(&moved, -k as f64), a.clone());
            let d = centroid_y(&moved).unwrap() - centroid_y(&a).unwrap();
            prop_assert!((d - k as f64).abs() < 1e-12);
        }
    }
}
