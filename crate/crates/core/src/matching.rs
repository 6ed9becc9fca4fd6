//! Anchor matching: assigning every ground-truth box of an image to a
//! distinct anchor.
//!
//! Four matchers share the [`MatchAssignment`] output:
//!
//! * [`match_serial`] walks the boxes of each image in input order and gives
//!   each the closest unused anchor by `1 - IOU`, falling back to the
//!   Euclidean distance between `(x, y, w, h)` vectors when no unused anchor
//!   overlaps the box.
//! * [`build_rankings`] + [`match_parallel`] split the same computation into
//!   a per-box ranking stage that runs fully in parallel and a per-image
//!   selection stage. In [`DedupMode::Strict`] the result equals
//!   [`match_serial`] on every input.
//! * [`match_greedy_bipartite`] sorts all edges of the cost matrix and picks
//!   the cheapest ones that touch no matched box or anchor.
//! * [`match_exact`] solves the minimum-weight assignment (Hungarian method)
//!   and is used as the reference optimum.
//!
//! All argsorts are stable with ties broken by ascending anchor index.

use std::cmp::Ordering;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{euclidean_unchecked, iou_unchecked, BBox, GeometryError};
use crate::sparse_labels::SparseLabelBatch;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum MatchError {
    #[error("image {image} has {boxes} boxes but only {anchors} anchors")]
    Capacity { image: usize, boxes: usize, anchors: usize },
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error("inconsistent assignment: {0}")]
    Inconsistent(String),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
}

/// `images[b][g]` is the anchor assigned to ground-truth box `g` of image `b`.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct MatchAssignment {
    pub images: Vec<Vec<usize>>,
}

impl MatchAssignment {
    /// True when no image uses an anchor twice.
    pub fn is_injective(&self) -> bool {
        self.images.iter().all(|img| {
            let mut seen = img.clone();
            seen.sort_unstable();
            seen.windows(2).all(|w| w[0] != w[1])
        })
    }
}

/// Which previous selections a row of [`match_parallel`] must avoid.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DedupMode {
    /// Every anchor already chosen for the image is excluded.
    #[default]
    Strict,
    /// Only the anchor chosen for the immediately preceding row is excluded.
    /// Later rows may duplicate earlier selections.
    PaperLiteral,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct MatchConfig {
    pub dedup: DedupMode,
}

/// Dense row-major `boxes x anchors` edge weights for one image.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CostMatrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl CostMatrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self, MatchError> {
        if data.len() != rows * cols {
            return Err(MatchError::InvalidInput(format!("{} values for a {rows}x{cols} matrix", data.len())));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(MatchError::InvalidInput("cost matrix contains non-finite values".into()));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self, MatchError> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(MatchError::InvalidInput("ragged cost matrix".into()));
        }
        Self::new(rows.len(), cols, rows.concat())
    }

    /// `1 - IOU` between every box and every anchor.
    pub fn matching_distances(boxes: &[BBox], anchors: &[BBox]) -> Result<Self, MatchError> {
        validate_all(boxes)?;
        validate_all(anchors)?;
        let data = boxes.iter().flat_map(|b| anchors.iter().map(move |a| 1.0 - iou_unchecked(b, a))).collect();
        Ok(Self { rows: boxes.len(), cols: anchors.len(), data })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    fn check_capacity(&self, image: usize) -> Result<(), MatchError> {
        if self.rows > self.cols {
            return Err(MatchError::Capacity { image, boxes: self.rows, anchors: self.cols });
        }
        Ok(())
    }
}

/// `1 - IOU` matrices for every image of a batch.
pub fn cost_matrices(anchors: &[BBox], batch: &[Vec<BBox>]) -> Result<Vec<CostMatrix>, MatchError> {
    batch.iter().map(|boxes| CostMatrix::matching_distances(boxes, anchors)).collect()
}

fn validate_all(boxes: &[BBox]) -> Result<(), MatchError> {
    boxes.iter().try_for_each(BBox::validate).map_err(MatchError::from)
}

/// Stable ascending argsort; equal keys keep ascending index order.
fn argsort(values: &[f64]) -> Vec<usize> {
    let mut ids: Vec<usize> = (0..values.len()).collect();
    ids.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    ids
}

/// Serial anchor matching over a batch of images.
pub fn match_serial(anchors: &[BBox], batch: &[Vec<BBox>]) -> Result<MatchAssignment, MatchError> {
    if anchors.is_empty() {
        return Err(MatchError::InvalidInput("anchor list is empty".into()));
    }
    validate_all(anchors)?;
    let mut images = Vec::with_capacity(batch.len());
    for (idx, boxes) in batch.iter().enumerate() {
        if boxes.len() > anchors.len() {
            return Err(MatchError::Capacity { image: idx, boxes: boxes.len(), anchors: anchors.len() });
        }
        validate_all(boxes)?;
        let mut used = vec![false; anchors.len()];
        let mut picked = Vec::with_capacity(boxes.len());
        for bbox in boxes {
            let distances: Vec<f64> = anchors.iter().map(|a| 1.0 - iou_unchecked(bbox, a)).collect();
            let dist_ids = argsort(&distances);
            let mut best = dist_ids.iter().copied().find(|&d| distances[d] < 1.0 && !used[d]);
            if best.is_none() {
                let edist: Vec<f64> = anchors.iter().map(|a| euclidean_unchecked(bbox, a)).collect();
                best = argsort(&edist).into_iter().find(|&d| !used[d]);
            }
            let best = best.expect("capacity checked: an unused anchor exists");
            used[best] = true;
            picked.push(best);
        }
        images.push(picked);
    }
    Ok(MatchAssignment { images })
}

/// Serial selection on a precomputed cost matrix: rows are visited in
/// `order`, and each takes its cheapest unused column.
///
/// Returns the column chosen for each row, indexed by row.
pub fn match_serial_costs(cost: &CostMatrix, order: &[usize]) -> Result<Vec<usize>, MatchError> {
    cost.check_capacity(0)?;
    let mut seen = vec![false; cost.rows()];
    for &r in order {
        if r >= cost.rows() || std::mem::replace(&mut seen[r], true) {
            return Err(MatchError::InvalidInput(format!("traversal order {order:?} is not a permutation of the rows")));
        }
    }
    if order.len() != cost.rows() {
        return Err(MatchError::InvalidInput(format!("traversal order {order:?} is not a permutation of the rows")));
    }
    let mut used = vec![false; cost.cols()];
    let mut out = vec![0; cost.rows()];
    for &r in order {
        let c = argsort(cost.row(r)).into_iter().find(|&c| !used[c]).expect("capacity checked");
        used[c] = true;
        out[r] = c;
    }
    Ok(out)
}

/// Per-box anchor preference lists.
///
/// Row `n` (in sparse-batch order) starts with every anchor that overlaps box
/// `n`, sorted by ascending `1 - IOU`; `crossover[n]` is the length of that
/// prefix. The rest of the row holds the remaining anchors in ascending
/// Euclidean order, so each row is a permutation of all anchor indices.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DistanceRanking {
    pub rows: Vec<Vec<usize>>,
    pub crossover: Vec<usize>,
    pub anchor_count: usize,
}

fn rank_one(bbox: &BBox, anchors: &[BBox]) -> (Vec<usize>, usize) {
    let distances: Vec<f64> = anchors.iter().map(|a| 1.0 - iou_unchecked(bbox, a)).collect();
    let sorted = argsort(&distances);
    let crossover = sorted.iter().position(|&d| distances[d] >= 1.0).unwrap_or(sorted.len());

    let mut in_prefix = vec![false; anchors.len()];
    for &a in &sorted[..crossover] {
        in_prefix[a] = true;
    }
    let edist: Vec<f64> = anchors.iter().map(|a| euclidean_unchecked(bbox, a)).collect();
    let mut row = sorted;
    row.truncate(crossover);
    row.extend(argsort(&edist).into_iter().filter(|&a| !in_prefix[a]));
    (row, crossover)
}

/// Builds the ranking of every box in the batch. Rows are independent and
/// computed in parallel.
pub fn build_rankings(anchors: &[BBox], rois: &SparseLabelBatch) -> Result<DistanceRanking, MatchError> {
    if anchors.is_empty() {
        return Err(MatchError::InvalidInput("anchor list is empty".into()));
    }
    rois.validate().map_err(|e| MatchError::InvalidInput(e.to_string()))?;
    validate_all(anchors)?;
    validate_all(&rois.rois_values)?;
    let (rows, crossover) = rois.rois_values.par_iter().map(|b| rank_one(b, anchors)).unzip();
    Ok(DistanceRanking { rows, crossover, anchor_count: anchors.len() })
}

/// Picks one anchor per row of an image's slice of the ranking.
fn find_best_aidx_per_image(rows: &[Vec<usize>], anchor_count: usize, mode: DedupMode) -> Vec<usize> {
    let mut els_used: Vec<usize> = Vec::with_capacity(rows.len());
    match mode {
        DedupMode::Strict => {
            let mut used = vec![false; anchor_count];
            for row in rows {
                let a = row.iter().copied().find(|&a| !used[a]).expect("capacity checked");
                used[a] = true;
                els_used.push(a);
            }
        }
        DedupMode::PaperLiteral => {
            for (i, row) in rows.iter().enumerate() {
                let a = if i == 0 {
                    row[0]
                } else {
                    let prev = els_used[i - 1];
                    row.iter().copied().find(|&a| a != prev).expect("capacity checked")
                };
                els_used.push(a);
            }
        }
    }
    els_used
}

/// Per-image selection over a precomputed ranking; images run in parallel.
pub fn match_parallel(ranking: &DistanceRanking, rois: &SparseLabelBatch, cfg: MatchConfig) -> Result<MatchAssignment, MatchError> {
    rois.validate().map_err(|e| MatchError::InvalidInput(e.to_string()))?;
    if ranking.rows.len() != rois.len() {
        return Err(MatchError::InvalidInput(format!("ranking has {} rows but the batch has {} boxes", ranking.rows.len(), rois.len())));
    }
    if ranking.rows.iter().any(|r| r.len() != ranking.anchor_count) {
        return Err(MatchError::InvalidInput("ranking rows must list every anchor".into()));
    }
    let ranges = rois.image_ranges();
    if let Some((image, r)) = ranges.iter().enumerate().find(|(_, r)| r.len() > ranking.anchor_count) {
        return Err(MatchError::Capacity { image, boxes: r.len(), anchors: ranking.anchor_count });
    }
    let images = ranges.into_par_iter().map(|r| find_best_aidx_per_image(&ranking.rows[r], ranking.anchor_count, cfg.dedup)).collect();
    Ok(MatchAssignment { images })
}

/// Greedy bipartite matching: all edges sorted by weight (ties by box, then
/// anchor), taken cheapest-first while both endpoints are free.
pub fn match_greedy_bipartite(costs: &[CostMatrix]) -> Result<MatchAssignment, MatchError> {
    let images = costs
        .iter()
        .enumerate()
        .map(|(image, cost)| {
            cost.check_capacity(image)?;
            Ok(greedy_one(cost))
        })
        .collect::<Result<_, MatchError>>()?;
    Ok(MatchAssignment { images })
}

fn greedy_one(cost: &CostMatrix) -> Vec<usize> {
    let edges = edge_order(cost);
    let mut row_of = vec![usize::MAX; cost.rows()];
    let mut col_used = vec![false; cost.cols()];
    let mut matched = 0;
    for (r, c) in edges {
        if matched == cost.rows() {
            break;
        }
        if row_of[r] == usize::MAX && !col_used[c] {
            row_of[r] = c;
            col_used[c] = true;
            matched += 1;
        }
    }
    row_of
}

/// Minimum total weight assignment. Among optimal assignments the
/// lexicographically smallest (by row order) is returned.
pub fn match_exact(costs: &[CostMatrix]) -> Result<MatchAssignment, MatchError> {
    let images = costs
        .iter()
        .enumerate()
        .map(|(image, cost)| {
            cost.check_capacity(image)?;
            Ok(exact_one(cost))
        })
        .collect::<Result<_, MatchError>>()?;
    Ok(MatchAssignment { images })
}

fn tolerance(total: f64) -> f64 {
    1e-9 * (1.0 + total.abs())
}

fn exact_one(cost: &CostMatrix) -> Vec<usize> {
    let n = cost.rows();
    if n == 0 {
        return Vec::new();
    }
    // Some lexicographically smallest optimum gives every row one of its n
    // cheapest columns, so the search can be restricted to their union.
    let mut cand = vec![false; cost.cols()];
    for r in 0..n {
        for c in argsort(cost.row(r)).into_iter().take(n) {
            cand[c] = true;
        }
    }
    let cols: Vec<usize> = (0..cost.cols()).filter(|&c| cand[c]).collect();
    let rows: Vec<usize> = (0..n).collect();

    let (mut target, _) = hungarian(cost, &rows, &cols);
    let tol = tolerance(target);
    let mut available = cols;
    let mut out = Vec::with_capacity(n);
    for r in 0..n {
        let rest: Vec<usize> = (r + 1..n).collect();
        let bound_rest: f64 = rest.iter().map(|&rr| available.iter().map(|&c| cost.get(rr, c)).fold(f64::INFINITY, f64::min)).sum();
        let mut chosen = None;
        for (pos, &c) in available.iter().enumerate() {
            let w = cost.get(r, c);
            if w + bound_rest > target + tol {
                continue;
            }
            let mut remaining = available.clone();
            remaining.remove(pos);
            let (sub, _) = hungarian(cost, &rest, &remaining);
            if w + sub <= target + tol {
                chosen = Some((pos, c, w));
                break;
            }
        }
        let (pos, c, w) = chosen.expect("an optimal completion always exists");
        available.remove(pos);
        target -= w;
        out.push(c);
    }
    out
}

/// Hungarian method (shortest augmenting paths with potentials) on the
/// submatrix `rows x cols`, `rows.len() <= cols.len()`. Returns the optimal
/// total and the chosen column for each row.
fn hungarian(cost: &CostMatrix, rows: &[usize], cols: &[usize]) -> (f64, Vec<usize>) {
    let n = rows.len();
    let m = cols.len();
    if n == 0 {
        return (0.0, Vec::new());
    }
    debug_assert!(n <= m);
    let a = |i: usize, j: usize| cost.get(rows[i - 1], cols[j - 1]);
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; m + 1];
    let mut p = vec![0usize; m + 1];
    let mut way = vec![0usize; m + 1];
    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0;
        let mut minv = vec![f64::INFINITY; m + 1];
        let mut used = vec![false; m + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0;
            for j in 1..=m {
                if used[j] {
                    continue;
                }
                let cur = a(i0, j) - u[i0] - v[j];
                if cur < minv[j] {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if minv[j] < delta {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for j in 0..=m {
                if used[j] {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if p[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut assign = vec![0; n];
    for j in 1..=m {
        if p[j] != 0 {
            assign[p[j] - 1] = cols[j - 1];
        }
    }
    // sum in row order so equal assignments give bit-identical totals
    let total = (0..n).map(|i| cost.get(rows[i], assign[i])).sum();
    (total, assign)
}

/// Sum of the assigned edge weights over all images.
pub fn total_weight(assignment: &MatchAssignment, costs: &[CostMatrix]) -> Result<f64, MatchError> {
    if assignment.images.len() > costs.len() {
        return Err(MatchError::Inconsistent(format!(
            "{} images assigned but only {} cost matrices",
            assignment.images.len(),
            costs.len()
        )));
    }
    let mut total = 0.0;
    for (image, (picked, cost)) in assignment.images.iter().zip(costs).enumerate() {
        if picked.len() > cost.rows() {
            return Err(MatchError::Inconsistent(format!(
                "image {image}: {} boxes assigned, matrix has {} rows",
                picked.len(),
                cost.rows()
            )));
        }
        for (r, &c) in picked.iter().enumerate() {
            if c >= cost.cols() {
                return Err(MatchError::Inconsistent(format!("image {image}: anchor {c} out of range ({} columns)", cost.cols())));
            }
            total += cost.get(r, c);
        }
    }
    Ok(total)
}

/// Regression target of a ground-truth box relative to its anchor.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DeltaTarget {
    pub dx: f64,
    pub dy: f64,
    pub dw: f64,
    pub dh: f64,
}

/// `dx = (x - ax) / aw`, `dy = (y - ay) / ah`, `dw = ln(w / aw)`, `dh = ln(h / ah)`.
pub fn encode_delta(gt: &BBox, anchor: &BBox) -> Result<DeltaTarget, MatchError> {
    gt.validate()?;
    anchor.validate()?;
    Ok(DeltaTarget {
        dx: (gt.x - anchor.x) / anchor.w,
        dy: (gt.y - anchor.y) / anchor.h,
        dw: (gt.w / anchor.w).ln(),
        dh: (gt.h / anchor.h).ln(),
    })
}

/// Inverse of [`encode_delta`].
pub fn decode_delta(delta: &DeltaTarget, anchor: &BBox) -> BBox {
    BBox {
        x: anchor.x + delta.dx * anchor.w,
        y: anchor.y + delta.dy * anchor.h,
        w: anchor.w * delta.dw.exp(),
        h: anchor.h * delta.dh.exp(),
    }
}

/// Delta targets for every assigned pair, `out[image][box]`. Pairs are independent and
/// evaluated in parallel.
pub fn compute_deltas(assignment: &MatchAssignment, anchors: &[BBox], batch: &[Vec<BBox>]) -> Result<Vec<Vec<DeltaTarget>>, MatchError> {
    if assignment.images.len() != batch.len() {
        return Err(MatchError::Inconsistent(format!("assignment covers {} images, batch has {}", assignment.images.len(), batch.len())));
    }
    assignment
        .images
        .par_iter()
        .zip(batch.par_iter())
        .enumerate()
        .map(|(image, (picked, boxes))| {
            if picked.len() != boxes.len() {
                return Err(MatchError::Inconsistent(format!("image {image}: {} anchors for {} boxes", picked.len(), boxes.len())));
            }
            picked
                .par_iter()
                .zip(boxes.par_iter())
                .map(|(&a, gt)| {
                    let anchor =
                        anchors.get(a).ok_or_else(|| MatchError::Inconsistent(format!("image {image}: anchor {a} out of range")))?;
                    encode_delta(gt, anchor)
                })
                .collect()
        })
        .collect()
}

/// Matching algorithm selector shared by the pipeline and the command line.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Algo {
    #[default]
    Serial,
    Parallel,
    Greedy,
    Exact,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct MatcherSpec {
    #[serde(default)]
    pub algo: Algo,
    #[serde(default)]
    pub dedup: DedupMode,
}

/// Runs the selected matcher on a sparse batch. Greedy and exact matching
/// use the `1 - IOU` cost matrix of each image.
pub fn run_matcher(spec: MatcherSpec, anchors: &[BBox], rois: &SparseLabelBatch) -> Result<MatchAssignment, MatchError> {
    match spec.algo {
        Algo::Parallel => {
            let ranking = build_rankings(anchors, rois)?;
            match_parallel(&ranking, rois, MatchConfig { dedup: spec.dedup })
        }
        Algo::Serial => match_serial(anchors, &per_image_boxes(rois)?),
        Algo::Greedy => match_greedy_bipartite(&cost_matrices(anchors, &per_image_boxes(rois)?)?),
        Algo::Exact => match_exact(&cost_matrices(anchors, &per_image_boxes(rois)?)?),
    }
}

/// Dense per-image box lists of a sparse batch.
pub fn per_image_boxes(rois: &SparseLabelBatch) -> Result<Vec<Vec<BBox>>, MatchError> {
    rois.validate().map_err(|e| MatchError::InvalidInput(e.to_string()))?;
    Ok(rois.image_ranges().into_iter().map(|r| rois.rois_values[r].to_vec()).collect())
}

/// All `(box, anchor)` edges in greedy selection order: ascending weight, then box, then anchor.
pub fn edge_order(cost: &CostMatrix) -> Vec<(usize, usize)> {
    let mut edges: Vec<(usize, usize)> = (0..cost.rows()).flat_map(|r| (0..cost.cols()).map(move |c| (r, c))).collect();
    edges.sort_by(|&(r1, c1), &(r2, c2)| match cost.get(r1, c1).total_cmp(&cost.get(r2, c2)) {
        Ordering::Equal => (r1, c1).cmp(&(r2, c2)),
        o => o,
    });
    edges
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{build_anchor_grid, GridSpec};
    use crate::sparse_labels::SparseLabelBatch;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    fn b(x: f64, y: f64, w: f64, h: f64) -> BBox {
        BBox::new(x, y, w, h).unwrap()
    }

    fn sparse(batch: &[Vec<BBox>]) -> SparseLabelBatch {
        let mut out = SparseLabelBatch { rois_idx: vec![], rois_values: vec![], classes: vec![], batch_size: batch.len() };
        for (i, boxes) in batch.iter().enumerate() {
            for (o, bb) in boxes.iter().enumerate() {
                out.rois_idx.push((i, o));
                out.rois_values.push(*bb);
                out.classes.push(0);
            }
        }
        out
    }

    fn two_box_costs() -> CostMatrix {
        CostMatrix::from_rows(&[vec![10.0, 1000.0], vec![15.0, 500.0]]).unwrap()
    }

    fn grid(gw: usize, gh: usize, templates: Vec<(f64, f64)>) -> Vec<BBox> {
        build_anchor_grid(&GridSpec { image_w: 100.0, image_h: 100.0, grid_w: gw, grid_h: gh, templates }).unwrap()
    }

    /// Lexicographically first minimum over all injective maps.
    fn brute_force(cost: &CostMatrix) -> (f64, Vec<usize>) {
        fn rec(cost: &CostMatrix, r: usize, used: &mut Vec<bool>, cur: &mut Vec<usize>, acc: f64, best: &mut (f64, Vec<usize>)) {
            if r == cost.rows() {
                if acc < best.0 - 1e-9 * (1.0 + best.0.abs()) || best.1.is_empty() {
                    *best = (acc, cur.clone());
                }
                return;
            }
            for c in 0..cost.cols() {
                if !used[c] {
                    used[c] = true;
                    cur.push(c);
                    rec(cost, r + 1, used, cur, acc + cost.get(r, c), best);
                    cur.pop();
                    used[c] = false;
                }
            }
        }
        let mut best = (f64::INFINITY, vec![]);
        rec(cost, 0, &mut vec![false; cost.cols()], &mut vec![], 0.0, &mut best);
        best
    }

    #[test]
    fn serial_exact_anchor_hit() {
        let anchors = grid(3, 3, vec![(10.0, 10.0)]);
        let a = match_serial(&anchors, &[vec![anchors[7]]]).unwrap();
        assert_eq!(a.images, vec![vec![7]]);
    }

    #[test]
    fn serial_no_overlap_uses_euclidean() {
        let anchors = vec![b(10., 10., 2., 2.), b(50., 50., 2., 2.), b(90., 90., 2., 2.)];
        let gt = b(60., 62., 3., 3.);
        let a = match_serial(&anchors, &[vec![gt]]).unwrap();
        let nearest =
            (0..3).min_by(|&i, &j| euclidean_unchecked(&gt, &anchors[i]).total_cmp(&euclidean_unchecked(&gt, &anchors[j]))).unwrap();
        assert_eq!(a.images[0], vec![nearest]);
    }

    #[test]
    fn serial_capacity_error() {
        let anchors = vec![b(10., 10., 2., 2.)];
        let err = match_serial(&anchors, &[vec![], vec![b(1., 1., 1., 1.), b(2., 2., 1., 1.)]]).unwrap_err();
        assert_eq!(err, MatchError::Capacity { image: 1, boxes: 2, anchors: 1 });
    }

    #[test]
    fn two_box_serial_and_greedy() {
        let cost = two_box_costs();
        let serial = match_serial_costs(&cost, &[1, 0]).unwrap();
        assert_eq!(serial, vec![1, 0]);
        let serial = MatchAssignment { images: vec![serial] };
        assert_eq!(total_weight(&serial, std::slice::from_ref(&cost)).unwrap(), 1015.0);

        let greedy = match_greedy_bipartite(std::slice::from_ref(&cost)).unwrap();
        assert_eq!(greedy.images, vec![vec![0, 1]]);
        assert_eq!(total_weight(&greedy, std::slice::from_ref(&cost)).unwrap(), 510.0);

        let exact = match_exact(std::slice::from_ref(&cost)).unwrap();
        assert_eq!(total_weight(&exact, &[cost]).unwrap(), 510.0);
    }

    #[test]
    fn exact_examples() {
        let cost = CostMatrix::from_rows(&[vec![1.0, 2.0], vec![3.0, 1.0]]).unwrap();
        assert_eq!(brute_force(&cost), (2.0, vec![0, 1]));
        let exact = match_exact(std::slice::from_ref(&cost)).unwrap();
        assert_eq!(exact.images, vec![vec![0, 1]]);
        assert_eq!(total_weight(&exact, &[cost]).unwrap(), 2.0);

        let row = CostMatrix::from_rows(&[vec![4.0, 3.0, 0.5, 0.5, 9.0]]).unwrap();
        assert_eq!(match_exact(std::slice::from_ref(&row)).unwrap().images, vec![vec![2]]);
        assert_eq!(match_greedy_bipartite(&[row]).unwrap().images, vec![vec![2]]);
    }

    #[test]
    fn exact_breaks_ties_lexicographically() {
        let cost = CostMatrix::from_rows(&[vec![1.0, 1.0, 1.0], vec![1.0, 1.0, 1.0]]).unwrap();
        assert_eq!(match_exact(&[cost]).unwrap().images, vec![vec![0, 1]]);
        let cost = CostMatrix::from_rows(&[vec![2.0, 1.0, 1.0], vec![1.0, 2.0, 1.0]]).unwrap();
        assert_eq!(match_exact(&[cost]).unwrap().images, vec![vec![1, 0]]);
    }

    #[test]
    fn total_weight_checks() {
        assert_eq!(total_weight(&MatchAssignment::default(), &[]).unwrap(), 0.0);
        let bad = MatchAssignment { images: vec![vec![0, 5]] };
        assert!(matches!(total_weight(&bad, &[two_box_costs()]), Err(MatchError::Inconsistent(_))));
    }

    #[test]
    fn ranking_examples() {
        let anchors = vec![b(10., 10., 4., 4.), b(50., 50., 4., 4.), b(90., 90., 4., 4.)];
        let r = build_rankings(&anchors, &sparse(&[vec![b(11., 10., 4., 4.)]])).unwrap();
        assert_eq!(r.rows[0][0], 0);
        assert_eq!(r.crossover, vec![1]);

        let r = build_rankings(&anchors, &sparse(&[vec![b(70., 72., 2., 2.)]])).unwrap();
        assert_eq!(r.crossover, vec![0]);
        let ed: Vec<f64> = anchors.iter().map(|a| euclidean_unchecked(&b(70., 72., 2., 2.), a)).collect();
        assert_eq!(r.rows[0], argsort(&ed));

        assert!(matches!(build_rankings(&[], &sparse(&[vec![]])), Err(MatchError::InvalidInput(_))));
    }

    #[test]
    fn ranking_prefix_order() {
        // IOUs: anchor 0 = 0.6, anchor 1 = 0.2, anchor 2 = 0
        let gt = b(0., 0., 10., 10.);
        let anchors = vec![b(0., 0., 10., 6.), b(0., 0., 2., 10.), b(40., 0., 10., 10.)];
        let ious: Vec<f64> = anchors.iter().map(|a| iou(&gt, a)).collect();
        assert_abs_diff_eq!(ious[0], 0.6, epsilon = 1e-12);
        assert_abs_diff_eq!(ious[1], 0.2, epsilon = 1e-12);
        assert_eq!(ious[2], 0.0);
        let r = build_rankings(&anchors, &sparse(&[vec![gt]])).unwrap();
        assert_eq!(r.crossover, vec![2]);
        assert_eq!(r.rows[0], vec![0, 1, 2]);
        // exhaustive pairwise check of the prefix order
        for i in 0..2 {
            for j in i + 1..2 {
                assert!(ious[r.rows[0][i]] >= ious[r.rows[0][j]]);
            }
        }
    }

    fn iou(a: &BBox, b: &BBox) -> f64 {
        iou_unchecked(a, b)
    }

    #[test]
    fn parallel_shared_first_choice() {
        let anchors = vec![b(10., 10., 4., 4.), b(12., 10., 4., 4.), b(90., 90., 4., 4.)];
        let batch = vec![vec![b(10.5, 10., 4., 4.), b(10.2, 10., 4., 4.)]];
        let rois = sparse(&batch);
        let ranking = build_rankings(&anchors, &rois).unwrap();
        assert_eq!(ranking.rows[0][0], ranking.rows[1][0]);
        let a = match_parallel(&ranking, &rois, MatchConfig::default()).unwrap();
        assert_eq!(a.images, vec![vec![0, 1]]);
        assert_eq!(a, match_serial(&anchors, &batch).unwrap());
    }

    /// Box 3's best anchor equals box 1's pick but not box 2's.
    pub(crate) fn literal_counter_example() -> (Vec<BBox>, Vec<Vec<BBox>>) {
        let anchors = vec![b(10., 10., 4., 4.), b(50., 50., 4., 4.), b(90., 90., 4., 4.)];
        let batch = vec![vec![b(10., 10., 4., 4.), b(50., 50., 4., 4.), b(10.5, 10., 4., 4.)]];
        (anchors, batch)
    }

    #[test]
    fn paper_literal_duplicates() {
        let (anchors, batch) = literal_counter_example();
        let rois = sparse(&batch);
        let ranking = build_rankings(&anchors, &rois).unwrap();
        let strict = match_parallel(&ranking, &rois, MatchConfig { dedup: DedupMode::Strict }).unwrap();
        let literal = match_parallel(&ranking, &rois, MatchConfig { dedup: DedupMode::PaperLiteral }).unwrap();
        assert_eq!(strict.images, vec![vec![0, 1, 2]]);
        assert_eq!(literal.images, vec![vec![0, 1, 0]]);
        assert!(!literal.is_injective());
    }

    #[test]
    fn deltas_examples() {
        let anchor = b(10., 20., 4., 8.);
        let zero = encode_delta(&anchor, &anchor).unwrap();
        assert_eq!(zero, DeltaTarget { dx: 0.0, dy: 0.0, dw: 0.0, dh: 0.0 });
        let d = encode_delta(&b(10., 20., 8., 8.), &anchor).unwrap();
        assert_abs_diff_eq!(d.dw, std::f64::consts::LN_2, epsilon = 1e-12);
        let d = encode_delta(&b(14., 20., 4., 8.), &anchor).unwrap();
        assert_eq!(d.dx, 1.0);
        assert!(encode_delta(&BBox { w: 0.0, ..anchor }, &anchor).is_err());

        let assignment = MatchAssignment { images: vec![vec![0], vec![]] };
        let out = compute_deltas(&assignment, &[anchor], &[vec![anchor], vec![]]).unwrap();
        assert_eq!(out, vec![vec![zero], vec![]]);
    }

    #[test]
    fn edge_order_matches_greedy() {
        let cost = two_box_costs();
        assert_eq!(edge_order(&cost), vec![(0, 0), (1, 0), (1, 1), (0, 1)]);
    }

    fn arb_instance() -> impl Strategy<Value = (Vec<BBox>, Vec<Vec<BBox>>)> {
        (1usize..6, 1usize..6, 1usize..4).prop_flat_map(|(gw, gh, k)| {
            let anchors = grid(gw, gh, (0..k).map(|t| (8.0 + 6.0 * t as f64, 12.0)).collect());
            let cap = anchors.len().min(8);
            let boxes = prop::collection::vec(
                prop::collection::vec(
                    (0.0..100.0f64, 0.0..100.0f64, 1.0..40.0f64, 1.0..40.0f64).prop_map(|(x, y, w, h)| BBox { x, y, w, h }),
                    0..=cap,
                ),
                1..4,
            );
            (Just(anchors), boxes)
        })
    }

    proptest! {
        #[test]
        fn strict_parallel_equals_serial((anchors, batch) in arb_instance()) {
            let rois = sparse(&batch);
            let ranking = build_rankings(&anchors, &rois).unwrap();
            let par = match_parallel(&ranking, &rois, MatchConfig::default()).unwrap();
            let ser = match_serial(&anchors, &batch).unwrap();
            prop_assert_eq!(&par, &ser);
            prop_assert!(ser.is_injective());
        }

        #[test]
        fn exact_dominates_and_matches_brute_force(rows in 1usize..5, extra in 0usize..4, seed in prop::collection::vec(0.0..1.0f64, 64)) {
            let cols = rows + extra;
            let data: Vec<f64> = seed.iter().copied().take(rows * cols).collect();
            let cost = CostMatrix::new(rows, cols, data).unwrap();
            let costs = [cost.clone()];
            let exact = match_exact(&costs).unwrap();
            let greedy = match_greedy_bipartite(&costs).unwrap();
            let (bf_total, bf_assign) = brute_force(&cost);
            let ex_total = total_weight(&exact, &costs).unwrap();
            prop_assert!((ex_total - bf_total).abs() <= 1e-9);
            prop_assert_eq!(&exact.images[0], &bf_assign);
            prop_assert!(ex_total <= total_weight(&greedy, &costs).unwrap() + 1e-12);
            prop_assert!(exact.is_injective() && greedy.is_injective());
        }

        #[test]
        fn delta_round_trip(ax in -100.0..100.0f64, ay in -100.0..100.0f64, aw in 0.5..50.0f64, ah in 0.5..50.0f64,
                            gx in -100.0..100.0f64, gy in -100.0..100.0f64, gw in 0.5..50.0f64, gh in 0.5..50.0f64) {
            let anchor = BBox { x: ax, y: ay, w: aw, h: ah };
            let gt = BBox { x: gx, y: gy, w: gw, h: gh };
            let back = decode_delta(&encode_delta(&gt, &anchor).unwrap(), &anchor);
            for (u, v) in back.as_array().iter().zip(gt.as_array()) {
                prop_assert!((u - v).abs() <= 1e-6 * v.abs().max(1.0));
            }
        }
    }
}
