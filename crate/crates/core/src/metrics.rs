//! Lineage evaluation: false positives/negatives, division errors with a
//! frame tolerance, and tracking-link errors.
//!
//! Cells are matched per frame by mutual maximal overlap. Division events
//! of the two lineages are paired when they lie on the same ground-truth
//! branch within `division_tolerance + 1` frames; a pair off by more than the
//! tolerance is one division error, an unpaired event is one error. Left-over
//! events in the same ground-truth tree but on different branches pair up
//! as a single division error. While a
//! paired prediction divides late (early), the ground-truth (predicted)
//! daughters left without a mutual match are attributed to the division
//! offset instead of being counted as false negatives (positives).

use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet};
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{CellRecord, LabelMap, Lineage};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MatchCriterion {
    #[default]
    MaxOverlap,
    Iou,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub min_exit_length: usize,
    pub division_tolerance: usize,
    pub matching: MatchCriterion,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self { min_exit_length: 40, division_tolerance: 1, matching: MatchCriterion::MaxOverlap }
    }
}

/// Label maps together with the lineage describing them.
#[derive(Clone, Copy, Debug)]
pub struct Annotated<'a> {
    pub labels: &'a [LabelMap],
    pub lineage: &'a Lineage,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct FrameMatching {
    /// `(gt, pred) -> shared pixels`
    pub overlaps: BTreeMap<(u32, u32), usize>,
    /// Best predicted cell of each overlapped GT cell.
    pub gt_best: BTreeMap<u32, u32>,
    /// Best GT cell of each overlapped predicted cell.
    pub pred_best: BTreeMap<u32, u32>,
    pub gt_to_pred: BTreeMap<u32, u32>,
    pub pred_to_gt: BTreeMap<u32, u32>,
    pub gt_ids: BTreeSet<u32>,
    pub pred_ids: BTreeSet<u32>,
}

impl FrameMatching {
    pub fn unmatched_gt(&self) -> impl Iterator<Item = u32> + '_ {
        self.gt_ids.iter().copied().filter(|g| !self.gt_to_pred.contains_key(g))
    }

    pub fn unmatched_pred(&self) -> impl Iterator<Item = u32> + '_ {
        self.pred_ids.iter().copied().filter(|p| !self.pred_to_gt.contains_key(p))
    }
}

pub fn match_frames(gt: &LabelMap, pred: &LabelMap, criterion: MatchCriterion) -> Result<FrameMatching> {
    gt.shape().ensure_same(&pred.shape())?;
    let mut m = FrameMatching::default();
    let mut gt_size: HashMap<u32, usize> = HashMap::new();
    let mut pred_size: HashMap<u32, usize> = HashMap::new();
    for (&g, &p) in gt.data().iter().zip(pred.data()) {
        if g != 0 {
            *gt_size.entry(g).or_default() += 1;
            m.gt_ids.insert(g);
        }
        if p != 0 {
            *pred_size.entry(p).or_default() += 1;
            m.pred_ids.insert(p);
        }
        if g != 0 && p != 0 {
            *m.overlaps.entry((g, p)).or_default() += 1;
        }
    }
    let score = |g: u32, p: u32, n: usize| match criterion {
        MatchCriterion::MaxOverlap => n as f64,
        MatchCriterion::Iou => n as f64 / (gt_size[&g] + pred_size[&p] - n) as f64,
    };
    let mut gt_score: BTreeMap<u32, f64> = BTreeMap::new();
    let mut pred_score: BTreeMap<u32, f64> = BTreeMap::new();
    // (g, p) ascending: strict improvement keeps the smaller id on ties
    for (&(g, p), &n) in &m.overlaps {
        let s = score(g, p, n);
        if gt_score.get(&g).is_none_or(|&b| s > b) {
            gt_score.insert(g, s);
            m.gt_best.insert(g, p);
        }
        if pred_score.get(&p).is_none_or(|&b| s > b) {
            pred_score.insert(p, s);
            m.pred_best.insert(p, g);
        }
    }
    for (&g, &p) in &m.gt_best {
        if m.pred_best.get(&p) == Some(&g) {
            m.gt_to_pred.insert(g, p);
            m.pred_to_gt.insert(p, g);
        }
    }
    Ok(m)
}

pub fn is_excluded(cell: &CellRecord, cfg: &EvalConfig) -> bool {
    cell.touches_open_end && cell.length() < cfg.min_exit_length
}

/// Cells kept for evaluation: those not cut by the open end below `min_exit_length`.
pub fn exclusion_filter(cells: &[CellRecord], cfg: &EvalConfig) -> Vec<CellRecord> {
    cells.iter().filter(|c| !is_excluded(c, cfg)).cloned().collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ErrorKind {
    Link,
    Division,
    FalseNegative,
    FalsePositive,
}

impl ErrorKind {
    fn as_str(self) -> &'static str {
        match self {
            ErrorKind::Link => "link",
            ErrorKind::Division => "division",
            ErrorKind::FalseNegative => "false_negative",
            ErrorKind::FalsePositive => "false_positive",
        }
    }
}

/// One counted error, for curation.
#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ErrorRecord {
    pub frame: usize,
    pub kind: ErrorKind,
    pub gt_id: Option<u32>,
    pub pred_id: Option<u32>,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ErrorRates {
    pub link: f64,
    pub division: f64,
    pub false_negative: f64,
    pub false_positive: f64,
    pub total: f64,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ErrorCounts {
    pub link: usize,
    pub division: usize,
    pub false_negative: usize,
    pub false_positive: usize,
    pub total: usize,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub counts: ErrorCounts,
    /// Percent of included ground-truth observations.
    pub percent: ErrorRates,
    /// Included ground-truth observations (the denominator).
    pub gt_observations: usize,
    pub pred_observations: usize,
    pub matched: usize,
    pub excluded_gt: usize,
    pub excluded_pred: usize,
    /// Unmatched cells attributed to a paired division offset.
    pub division_offset_gt: usize,
    pub division_offset_pred: usize,
    pub errors: Vec<ErrorRecord>,
}

impl EvalReport {
    pub fn is_perfect(&self) -> bool {
        self.counts.total == 0
    }

    /// Aligned text table with the columns Tracking Links / Division / False − / False + / Total.
    pub fn table(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(
            s,
            "{:<10} {:>14} {:>10} {:>10} {:>10} {:>10}",
            "", "Tracking Links", "Division", "False -", "False +", "Total"
        );
        let p = &self.percent;
        let _ = writeln!(
            s,
            "{:<10} {:>14.4} {:>10.4} {:>10.4} {:>10.4} {:>10.4}",
            "percent", p.link, p.division, p.false_negative, p.false_positive, p.total
        );
        let c = &self.counts;
        let _ = writeln!(
            s,
            "{:<10} {:>14} {:>10} {:>10} {:>10} {:>10}",
            "count", c.link, c.division, c.false_negative, c.false_positive, c.total
        );
        let _ = writeln!(s, "ground-truth observations: {}", self.gt_observations);
        s
    }

    pub fn errors_csv(&self) -> String {
        let mut s = String::from("frame,type,gt_id,pred_id\n");
        let opt = |v: Option<u32>| v.map(|x| x.to_string()).unwrap_or_default();
        for e in &self.errors {
            let _ = writeln!(s, "{},{},{},{}", e.frame, e.kind.as_str(), opt(e.gt_id), opt(e.pred_id));
        }
        s
    }
}

/// Whether `a` at frame `fa` is an ancestor of, or equal to, `b` at `fb`.
fn ancestor_or_equal(lineage: &Lineage, fa: usize, a: u32, mut fb: usize, mut b: u32) -> bool {
    if fb < fa {
        return false;
    }
    while fb > fa {
        match lineage.parent(fb, b) {
            Some(p) => {
                b = p;
                fb -= 1;
            }
            None => return false,
        }
    }
    a == b
}

/// Descendants (including itself) at frame `to` of `id` at frame `from`.
fn descendants_at(lineage: &Lineage, from: usize, id: u32, to: usize) -> Vec<u32> {
    let mut current = vec![id];
    for f in from..to {
        current = current.iter().flat_map(|&c| lineage.children(f, c)).collect();
    }
    current
}

#[derive(Clone, Debug)]
struct DivisionEvent {
    /// Frame where the children first appear.
    frame: usize,
    parent: u32,
    children: Vec<u32>,
}

#[derive(Clone, Debug)]
struct EventPair {
    gt: usize,
    pred: usize,
    offset: usize,
}

struct Context<'a> {
    gt: Annotated<'a>,
    pred: Annotated<'a>,
    cfg: &'a EvalConfig,
    matchings: Vec<FrameMatching>,
    excluded_gt: Vec<HashSet<u32>>,
    excluded_pred: Vec<HashSet<u32>>,
}

impl Context<'_> {
    fn new<'a>(gt: Annotated<'a>, pred: Annotated<'a>, cfg: &'a EvalConfig) -> Result<Context<'a>> {
        let n = gt.labels.len();
        if pred.labels.len() != n || gt.lineage.num_frames() != n || pred.lineage.num_frames() != n {
            return Err(Error::DimensionMismatch(
                "ground truth and prediction must cover the same frames".into(),
            ));
        }
        let matchings = gt
            .labels
            .iter()
            .zip(pred.labels)
            .map(|(g, p)| match_frames(g, p, cfg.matching))
            .collect::<Result<Vec<_>>>()?;
        let excluded_gt: Vec<HashSet<u32>> = gt
            .lineage
            .frames
            .iter()
            .map(|cells| cells.iter().filter(|c| is_excluded(c, cfg)).map(|c| c.id).collect())
            .collect();
        let excluded_pred = matchings
            .iter()
            .zip(&excluded_gt)
            .map(|(m, ex)| m.pred_best.iter().filter(|(_, g)| ex.contains(g)).map(|(&p, _)| p).collect())
            .collect();
        Ok(Context { gt, pred, cfg, matchings, excluded_gt, excluded_pred })
    }

    fn events(&self, lineage: &Lineage, excluded: &[HashSet<u32>]) -> Vec<DivisionEvent> {
        lineage
            .divisions()
            .into_iter()
            .filter(|(f, p, _)| !excluded[f - 1].contains(p))
            .map(|(frame, parent, children)| DivisionEvent { frame, parent, children })
            .collect()
    }

    /// Event pairs on one GT branch, then leftover pairs that only share a
    /// GT tree (`cross`).
    fn pair_events(&self, gt_events: &[DivisionEvent], pred_events: &[DivisionEvent]) -> (Vec<EventPair>, Vec<EventPair>) {
        let window = self.cfg.division_tolerance + 1;
        let mut branch = Vec::new();
        let mut tree = Vec::new();
        for (i, e) in gt_events.iter().enumerate() {
            for (j, d) in pred_events.iter().enumerate() {
                let offset = e.frame.abs_diff(d.frame);
                if offset > window {
                    continue;
                }
                let Some(&anchor) = self.matchings[d.frame - 1].pred_best.get(&d.parent) else {
                    continue;
                };
                let (fe, fd) = (e.frame - 1, d.frame - 1);
                let same_branch = ancestor_or_equal(self.gt.lineage, fe, e.parent, fd, anchor)
                    || ancestor_or_equal(self.gt.lineage, fd, anchor, fe, e.parent);
                if same_branch {
                    branch.push(EventPair { gt: i, pred: j, offset });
                } else if root(self.gt.lineage, fe, e.parent) == root(self.gt.lineage, fd, anchor) {
                    tree.push(EventPair { gt: i, pred: j, offset });
                }
            }
        }
        let mut used_gt = HashSet::new();
        let mut used_pred = HashSet::new();
        let mut greedy = |mut candidates: Vec<EventPair>| -> Vec<EventPair> {
            candidates.sort_by_key(|c| (c.offset, c.gt, c.pred));
            candidates
                .into_iter()
                .filter(|c| {
                    if used_gt.contains(&c.gt) || used_pred.contains(&c.pred) {
                        return false;
                    }
                    used_gt.insert(c.gt);
                    used_pred.insert(c.pred);
                    true
                })
                .collect()
        };
        let pairs = greedy(branch);
        let cross = greedy(tree);
        (pairs, cross)
    }
}

/// Earliest ancestor `(frame, id)` of `id` at `frame`.
fn root(lineage: &Lineage, mut frame: usize, mut id: u32) -> (usize, u32) {
    while frame > 0 {
        match lineage.parent(frame, id) {
            Some(p) => {
                id = p;
                frame -= 1;
            }
            None => break,
        }
    }
    (frame, id)
}

/// Division errors and the per-frame sets of cells explained by division offsets.
struct DivisionAnalysis {
    errors: Vec<ErrorRecord>,
    explained_gt: Vec<HashSet<u32>>,
    explained_pred: Vec<HashSet<u32>>,
    /// GT division parent `(frame of parent, id)` -> frame window of its pair.
    paired_windows: HashMap<(usize, u32), (usize, usize)>,
    /// Predicted parents `(frame of parent, id)` of cross-branch pairs; their
    /// links are covered by the division error.
    cross_parents: HashSet<(usize, u32)>,
}

fn analyze_divisions(ctx: &Context<'_>) -> DivisionAnalysis {
    let n = ctx.gt.labels.len();
    let gt_events = ctx.events(ctx.gt.lineage, &ctx.excluded_gt);
    let pred_events = ctx.events(ctx.pred.lineage, &ctx.excluded_pred);
    let (pairs, cross) = ctx.pair_events(&gt_events, &pred_events);
    let mut out = DivisionAnalysis {
        errors: Vec::new(),
        explained_gt: vec![HashSet::new(); n],
        explained_pred: vec![HashSet::new(); n],
        paired_windows: HashMap::new(),
        cross_parents: HashSet::new(),
    };
    let paired_gt: HashSet<usize> = pairs.iter().chain(&cross).map(|p| p.gt).collect();
    let paired_pred: HashSet<usize> = pairs.iter().chain(&cross).map(|p| p.pred).collect();
    // a division placed on the wrong branch of the right tree is one error
    for p in &cross {
        let (e, d) = (&gt_events[p.gt], &pred_events[p.pred]);
        out.errors.push(ErrorRecord { frame: e.frame, kind: ErrorKind::Division, gt_id: Some(e.parent), pred_id: Some(d.parent) });
        out.cross_parents.insert((d.frame - 1, d.parent));
    }
    for p in &pairs {
        let (e, d) = (&gt_events[p.gt], &pred_events[p.pred]);
        if p.offset > ctx.cfg.division_tolerance {
            out.errors.push(ErrorRecord {
                frame: e.frame,
                kind: ErrorKind::Division,
                gt_id: Some(e.parent),
                pred_id: Some(d.parent),
            });
        }
        let window = (e.frame.min(d.frame), e.frame.max(d.frame));
        out.paired_windows.insert((e.frame - 1, e.parent), window);
        // late prediction: GT daughters merged in the prediction
        for f in e.frame..d.frame {
            let m = &ctx.matchings[f];
            for &c in &e.children {
                for g in descendants_at(ctx.gt.lineage, e.frame, c, f) {
                    if !m.gt_to_pred.contains_key(&g) {
                        out.explained_gt[f].insert(g);
                    }
                }
            }
        }
        // early prediction: predicted daughters splitting a GT cell
        for f in d.frame..e.frame {
            let m = &ctx.matchings[f];
            for &c in &d.children {
                for pc in descendants_at(ctx.pred.lineage, d.frame, c, f) {
                    if !m.pred_to_gt.contains_key(&pc) {
                        out.explained_pred[f].insert(pc);
                    }
                }
            }
        }
    }
    for (_, e) in gt_events.iter().enumerate().filter(|(i, _)| !paired_gt.contains(i)) {
        out.errors.push(ErrorRecord { frame: e.frame, kind: ErrorKind::Division, gt_id: Some(e.parent), pred_id: None });
    }
    for (_, d) in pred_events.iter().enumerate().filter(|(j, _)| !paired_pred.contains(j)) {
        out.errors.push(ErrorRecord { frame: d.frame, kind: ErrorKind::Division, gt_id: None, pred_id: Some(d.parent) });
    }
    out
}

/// Number of division errors (see module docs for the pairing rule).
pub fn division_errors(gt: Annotated<'_>, pred: Annotated<'_>, cfg: &EvalConfig) -> Result<usize> {
    let ctx = Context::new(gt, pred, cfg)?;
    Ok(analyze_divisions(&ctx).errors.len())
}

/// Number of tracking-link errors.
pub fn link_errors(gt: Annotated<'_>, pred: Annotated<'_>, cfg: &EvalConfig) -> Result<usize> {
    let ctx = Context::new(gt, pred, cfg)?;
    let div = analyze_divisions(&ctx);
    Ok(collect_link_errors(&ctx, &div).len())
}

impl DivisionAnalysis {
    fn gt_counterpart(&self, ctx: &Context<'_>, f: usize, p: u32) -> Option<u32> {
        let m = &ctx.matchings[f];
        m.pred_to_gt
            .get(&p)
            .or_else(|| self.explained_pred[f].contains(&p).then(|| m.pred_best.get(&p)).flatten())
            .copied()
    }

    fn pred_counterpart(&self, ctx: &Context<'_>, f: usize, g: u32) -> Option<u32> {
        let m = &ctx.matchings[f];
        m.gt_to_pred
            .get(&g)
            .or_else(|| self.explained_gt[f].contains(&g).then(|| m.gt_best.get(&g)).flatten())
            .copied()
    }

    /// The GT link `gc -> gp` is wrong, but both sit in one lineage that
    /// diverged at a paired division whose offset window covers `frame`.
    fn exempt(&self, gt: &Lineage, frame: usize, gc: u32, gp: u32) -> bool {
        let Some(mut a) = gt.parent(frame, gc) else { return false };
        let mut b = gp;
        let mut f = frame - 1;
        loop {
            if f == 0 {
                return false;
            }
            let (pa, pb) = (gt.parent(f, a), gt.parent(f, b));
            match (pa, pb) {
                (Some(x), Some(y)) if x == y => {
                    return self
                        .paired_windows
                        .get(&(f - 1, x))
                        .is_some_and(|&(lo, hi)| (lo..=hi).contains(&frame));
                }
                (Some(x), Some(y)) => {
                    a = x;
                    b = y;
                    f -= 1;
                }
                _ => return false,
            }
        }
    }
}

fn collect_link_errors(ctx: &Context<'_>, div: &DivisionAnalysis) -> Vec<ErrorRecord> {
    let mut errors = Vec::new();
    let (gt, pred) = (ctx.gt.lineage, ctx.pred.lineage);
    for f in 1..ctx.gt.labels.len() {
        for c in &pred.frames[f] {
            let Some(p) = c.parent_id else { continue };
            if ctx.excluded_pred[f].contains(&c.id)
                || ctx.excluded_pred[f - 1].contains(&p)
                || div.cross_parents.contains(&(f - 1, p))
            {
                continue;
            }
            let (Some(gc), Some(gp)) = (div.gt_counterpart(ctx, f, c.id), div.gt_counterpart(ctx, f - 1, p)) else {
                continue;
            };
            if gt.parent(f, gc) == Some(gp) || div.exempt(gt, f, gc, gp) {
                continue;
            }
            errors.push(ErrorRecord { frame: f, kind: ErrorKind::Link, gt_id: Some(gc), pred_id: Some(c.id) });
        }
        // GT links with no predicted link at all
        let mut reported = HashSet::new();
        for g in &gt.frames[f] {
            let Some(gp) = g.parent_id else { continue };
            if ctx.excluded_gt[f].contains(&g.id) || ctx.excluded_gt[f - 1].contains(&gp) {
                continue;
            }
            if div.pred_counterpart(ctx, f - 1, gp).is_none() {
                continue;
            }
            let Some(c) = div.pred_counterpart(ctx, f, g.id) else { continue };
            if ctx.excluded_pred[f].contains(&c) || pred.parent(f, c).is_some() {
                continue;
            }
            if reported.insert(c) {
                errors.push(ErrorRecord { frame: f, kind: ErrorKind::Link, gt_id: Some(g.id), pred_id: Some(c) });
            }
        }
    }
    errors
}

pub fn evaluate(gt: Annotated<'_>, pred: Annotated<'_>, cfg: &EvalConfig) -> Result<EvalReport> {
    let ctx = Context::new(gt, pred, cfg)?;
    let div = analyze_divisions(&ctx);
    let mut report = EvalReport::default();
    let mut errors = div.errors.clone();
    for (f, m) in ctx.matchings.iter().enumerate() {
        let (ex_g, ex_p) = (&ctx.excluded_gt[f], &ctx.excluded_pred[f]);
        report.excluded_gt += ex_g.len();
        report.excluded_pred += ex_p.len();
        report.gt_observations += m.gt_ids.iter().filter(|g| !ex_g.contains(g)).count();
        report.pred_observations += m.pred_ids.iter().filter(|p| !ex_p.contains(p)).count();
        report.matched += m.gt_to_pred.keys().filter(|g| !ex_g.contains(g)).count();
        for g in m.unmatched_gt().filter(|g| !ex_g.contains(g)) {
            if div.explained_gt[f].contains(&g) {
                report.division_offset_gt += 1;
            } else {
                errors.push(ErrorRecord { frame: f, kind: ErrorKind::FalseNegative, gt_id: Some(g), pred_id: None });
            }
        }
        for p in m.unmatched_pred().filter(|p| !ex_p.contains(p)) {
            if div.explained_pred[f].contains(&p) {
                report.division_offset_pred += 1;
            } else {
                errors.push(ErrorRecord { frame: f, kind: ErrorKind::FalsePositive, gt_id: None, pred_id: Some(p) });
            }
        }
    }
    errors.extend(collect_link_errors(&ctx, &div));
    errors.sort();

    let count = |k: ErrorKind| errors.iter().filter(|e| e.kind == k).count();
    let c = ErrorCounts {
        link: count(ErrorKind::Link),
        division: count(ErrorKind::Division),
        false_negative: count(ErrorKind::FalseNegative),
        false_positive: count(ErrorKind::FalsePositive),
        total: errors.len(),
    };
    let pct = |n: usize| if report.gt_observations == 0 { 0.0 } else { 100.0 * n as f64 / report.gt_observations as f64 };
    let percent = ErrorRates {
        link: pct(c.link),
        division: pct(c.division),
        false_negative: pct(c.false_negative),
        false_positive: pct(c.false_positive),
        total: 0.0,
    };
    report.percent = ErrorRates {
        total: percent.link + percent.division + percent.false_negative + percent.false_positive,
        ..percent
    };
    report.counts = c;
    report.errors = errors;
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{Grid, ImageShape};

    const H: usize = 120;

    /// One frame of a one-pixel-wide column: `(y0, y1, id)` spans plus parent ids.
    type Frame = Vec<(usize, usize, u32, Option<u32>)>;

    fn build(frames: &[Frame]) -> (Vec<LabelMap>, Lineage) {
        let shape = ImageShape::new(H, 3);
        let labels: Vec<LabelMap> = frames
            .iter()
            .map(|spans| {
                let mut g = Grid::filled(shape, 0u32);
                for &(a, b, id, _) in spans {
                    for y in a..=b {
                        for x in 0..3 {
                            g.set(y, x, id);
                        }
                    }
                }
                g
            })
            .collect();
        let parents: Vec<HashMap<u32, Option<u32>>> =
            frames.iter().map(|s| s.iter().map(|&(_, _, id, p)| (id, p)).collect()).collect();
        let lineage = Lineage::from_label_stack(&labels, |f, id| parents[f][&id]).unwrap();
        (labels, lineage)
    }

    fn report(gt: &(Vec<LabelMap>, Lineage), pred: &(Vec<LabelMap>, Lineage)) -> EvalReport {
        evaluate(
            Annotated { labels: &gt.0, lineage: &gt.1 },
            Annotated { labels: &pred.0, lineage: &pred.1 },
            &EvalConfig::default(),
        )
        .unwrap()
    }

    /// A cell at 10..=49 that divides at `at` into 10..=29 and 31..=50; the
    /// daughters keep growing for the remaining frames.
    fn dividing(frames: usize, at: usize) -> (Vec<LabelMap>, Lineage) {
        let layout: Vec<Frame> = (0..frames)
            .map(|f| {
                let p = (f > 0).then_some(1);
                if f < at {
                    vec![(10, 49, 1, p)]
                } else if f == at {
                    vec![(10, 29, 1, Some(1)), (31, 50, 2, Some(1))]
                } else {
                    vec![(10, 29, 1, Some(1)), (31, 50, 2, Some(2))]
                }
            })
            .collect();
        build(&layout)
    }

    #[test]
    fn matching_examples() {
        let (a, _) = dividing(1, 5);
        let m = match_frames(&a[0], &a[0], MatchCriterion::MaxOverlap).unwrap();
        assert_eq!(m.gt_to_pred.len(), 1);
        assert_eq!(m.unmatched_gt().count() + m.unmatched_pred().count(), 0);

        let (two, _) = build(&[vec![(10, 29, 1, None), (31, 50, 2, None)]]);
        let empty = Grid::filled(two[0].shape(), 0u32);
        let mut one_missing = two[0].clone();
        one_missing.data_mut().iter_mut().filter(|v| **v == 2).for_each(|v| *v = 0);
        let m = match_frames(&two[0], &one_missing, MatchCriterion::MaxOverlap).unwrap();
        assert_eq!(m.unmatched_gt().collect::<Vec<_>>(), vec![2]);
        assert_eq!(match_frames(&two[0], &empty, MatchCriterion::Iou).unwrap().unmatched_gt().count(), 2);
    }

    #[test]
    fn split_prediction_against_overlap_table() {
        // GT cell 10..=49; prediction splits it into 10..=33 and 34..=49
        let gt = build(&[vec![(10, 49, 1, None)]]);
        let pred = build(&[vec![(10, 33, 1, None), (34, 49, 2, None)]]);
        let m = match_frames(&gt.0[0], &pred.0[0], MatchCriterion::MaxOverlap).unwrap();
        assert_eq!(m.overlaps[&(1, 1)], 24 * 3);
        assert_eq!(m.overlaps[&(1, 2)], 16 * 3);
        assert_eq!(m.gt_to_pred[&1], 1);
        assert_eq!(m.unmatched_pred().collect::<Vec<_>>(), vec![2]);
        let r = report(&gt, &pred);
        assert_eq!(r.counts.false_positive, 1);
        assert_eq!(r.counts.false_negative, 0);
    }

    fn exit_cell(frame: usize, y_min: usize) -> CellRecord {
        CellRecord {
            id: 1,
            frame,
            center_y: (y_min + H - 1) as f64 / 2.0,
            y_min,
            y_max: H - 1,
            pixel_count: 3 * (H - y_min),
            parent_id: None,
            touches_open_end: true,
        }
    }

    #[test]
    fn exclusion_boundary() {
        let cfg = EvalConfig::default();
        let interior = CellRecord { touches_open_end: false, y_max: 19, y_min: 10, ..exit_cell(0, 10) };
        assert_eq!(exclusion_filter(&[interior], &cfg).len(), 1);
        assert!(is_excluded(&exit_cell(0, H - 39), &cfg));
        assert!(!is_excluded(&exit_cell(0, H - 40), &cfg));
    }

    #[test]
    fn excluded_exit_cells_count_nowhere() {
        let gt = build(&[vec![(10, 49, 1, None), (H - 39, H - 1, 2, None)]]);
        let pred = build(&[vec![(10, 49, 1, None)]]);
        let r = report(&gt, &pred);
        assert!(r.is_perfect());
        assert_eq!(r.gt_observations, 1);
        assert_eq!(r.excluded_gt, 1);
        let gt = build(&[vec![(10, 49, 1, None), (H - 40, H - 1, 2, None)]]);
        let r = report(&gt, &pred);
        assert_eq!(r.counts.false_negative, 1);
        assert_eq!(r.gt_observations, 2);
    }

    #[test]
    fn division_tolerance() {
        let gt = dividing(8, 4);
        for (at, expected) in [(4, 0), (3, 0), (5, 0), (2, 1), (6, 1)] {
            let pred = dividing(8, at);
            let r = report(&gt, &pred);
            assert_eq!(r.counts.division, expected, "prediction divides at {at}");
            assert_eq!(
                division_errors(
                    Annotated { labels: &gt.0, lineage: &gt.1 },
                    Annotated { labels: &pred.0, lineage: &pred.1 },
                    &EvalConfig::default()
                )
                .unwrap(),
                expected
            );
            if expected == 0 {
                assert!(r.is_perfect(), "offset {at}: {:?}", r.errors);
            }
            assert_eq!(r.counts.link, 0, "offset {at}: {:?}", r.errors);
        }
        // no predicted division at all, and a division three frames off
        assert_eq!(report(&gt, &dividing(8, 99)).counts.division, 1);
        assert_eq!(report(&gt, &dividing(8, 7)).counts.division, 2);
    }

    #[test]
    fn late_division_link_exempt() {
        // the predicted division link at frame 3 is wrong against GT daughters
        // but exempt inside the offset window
        let gt = dividing(7, 2);
        let pred = dividing(7, 3);
        let r = report(&gt, &pred);
        assert!(r.is_perfect(), "{:?}", r.errors);
        assert_eq!(r.division_offset_gt, 1);
        // the same cross link outside the window is an error
        let mut pred = gt.clone();
        pred.1.frames[5][1].parent_id = Some(1);
        let r = report(&gt, &pred);
        assert_eq!(r.counts.link, 1, "{:?}", r.errors);
        assert_eq!(r.counts.division, 1);
    }

    #[test]
    fn cross_lineage_swap() {
        let gt = build(&[
            vec![(5, 30, 1, None), (40, 70, 2, None)],
            vec![(5, 31, 1, Some(1)), (41, 72, 2, Some(2))],
        ]);
        let mut pred = gt.clone();
        pred.1.frames[1][0].parent_id = Some(2);
        pred.1.frames[1][1].parent_id = Some(1);
        let r = report(&gt, &pred);
        assert_eq!(r.counts.link, 2);
        assert_eq!(r.counts.total, 2);
        // a missing link is also an error
        let mut pred = gt.clone();
        pred.1.frames[1][1].parent_id = None;
        assert_eq!(report(&gt, &pred).counts.link, 1);
    }

    #[test]
    fn division_on_sister_branch() {
        let layout = |wrong: bool| -> Vec<Frame> {
            (0..8)
                .map(|f| match f {
                    0 => vec![(10, 49, 1, None)],
                    1..=4 => vec![(10, 29, 1, Some(1)), (31, 50, 2, Some(if f == 1 { 1 } else { 2 }))],
                    _ => {
                        let p3 = if f > 5 { 3 } else if wrong { 2 } else { 1 };
                        vec![(10, 18, 1, Some(1)), (20, 29, 3, Some(p3)), (31, 50, 2, Some(2))]
                    }
                })
                .collect()
        };
        let gt = build(&layout(false));
        let r = report(&gt, &build(&layout(true)));
        assert_eq!(r.counts.division, 1);
        assert_eq!(r.counts.total, 1, "{:?}", r.errors);
    }

    #[test]
    fn identity_is_perfect_and_percentages() {
        let gt = dividing(10, 3);
        let r = report(&gt, &gt);
        assert!(r.is_perfect());
        assert_eq!(r.gt_observations, 3 + 2 * 7);
        let mut pred = gt.clone();
        pred.1.frames[5][0].parent_id = None;
        let r = report(&gt, &pred);
        assert_eq!(r.counts.link, 1);
        assert!((r.percent.link - 100.0 / 17.0).abs() < 1e-12);
        assert_eq!(r.percent.total, r.percent.link);
        assert!(r.table().contains("Tracking Links"));
        assert_eq!(r.errors_csv().lines().count(), 2);
    }
}
