//! Two-stage assignment between ground truths and detections, and the
//! top-k recall protocol.
//!
//! Stage 1 matches overlapping ground truths to detections by maximizing
//! total IoU; ground truths with no overlap anywhere are matched to the
//! leftover detections by minimizing center distance. Both stages use the
//! same optimal assignment solver.

use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::geom::{bev_iou, center_distance, iou_3d};
use crate::sceneio::{Detection, GtObject};

/// Assignment objective.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Objective {
    Minimize,
    Maximize,
}

/// An optimal one-to-one assignment: `min(rows, cols)` pairs and the total
/// cost of the selected entries.
#[derive(Debug, Clone, PartialEq)]
pub struct Assignment {
    pub pairs: Vec<(usize, usize)>,
    pub total_cost: f64,
}

/// Jonker-Volgenant shortest augmenting path for `rows <= cols`. Returns
/// the assigned column of each row.
fn solve_min(cost: &[Vec<f64>], rows: usize, cols: usize) -> Vec<usize> {
    debug_assert!(rows <= cols && rows > 0);
    let inf = f64::INFINITY;
    let mut row_pot = vec![0.0; rows];
    let mut col_pot = vec![0.0; cols + 1];
    // job[c] = row currently assigned to column c; column `cols` is virtual.
    let mut job: Vec<Option<usize>> = vec![None; cols + 1];

    for r in 0..rows {
        let mut cur = cols;
        job[cur] = Some(r);
        let mut min_to = vec![inf; cols + 1];
        let mut prev: Vec<usize> = vec![cols; cols + 1];
        let mut in_tree = vec![false; cols + 1];

        while job[cur].is_some() {
            in_tree[cur] = true;
            let row = job[cur].unwrap();
            let mut delta = inf;
            let mut next = cols;
            for c in 0..cols {
                if in_tree[c] {
                    continue;
                }
                let reduced = cost[row][c] - row_pot[row] - col_pot[c];
                if reduced < min_to[c] {
                    min_to[c] = reduced;
                    prev[c] = cur;
                }
                if min_to[c] < delta {
                    delta = min_to[c];
                    next = c;
                }
            }
            for c in 0..=cols {
                if in_tree[c] {
                    if let Some(rr) = job[c] {
                        row_pot[rr] += delta;
                    }
                    col_pot[c] -= delta;
                } else {
                    min_to[c] -= delta;
                }
            }
            cur = next;
        }
        // Augment along the alternating path back to the virtual column.
        while cur != cols {
            let p = prev[cur];
            job[cur] = job[p];
            cur = p;
        }
    }

    let mut assigned = vec![usize::MAX; rows];
    for c in 0..cols {
        if let Some(r) = job[c] {
            assigned[r] = c;
        }
    }
    assigned
}

/// Optimal assignment over a rectangular cost matrix. Rectangular inputs
/// are handled by solving along the shorter side; every row (or column) of
/// that side is assigned.
pub fn hungarian(cost: &[Vec<f64>], objective: Objective) -> Result<Assignment> {
    let rows = cost.len();
    let cols = cost.first().map_or(0, |r| r.len());
    if rows == 0 || cols == 0 {
        return Ok(Assignment {
            pairs: Vec::new(),
            total_cost: 0.0,
        });
    }
    if cost.iter().any(|r| r.len() != cols) {
        return Err(Error::invalid("cost matrix is ragged"));
    }
    if cost.iter().flatten().any(|v| !v.is_finite()) {
        return Err(Error::invalid("cost matrix must be finite"));
    }

    let negate = objective == Objective::Maximize;
    let transpose = rows > cols;
    let (n, m) = if transpose { (cols, rows) } else { (rows, cols) };
    let mut work = vec![vec![0.0; m]; n];
    for r in 0..rows {
        for c in 0..cols {
            let v = if negate { -cost[r][c] } else { cost[r][c] };
            if transpose {
                work[c][r] = v;
            } else {
                work[r][c] = v;
            }
        }
    }

    let assigned = solve_min(&work, n, m);
    let mut pairs: Vec<(usize, usize)> = assigned
        .iter()
        .enumerate()
        .map(|(r, &c)| if transpose { (c, r) } else { (r, c) })
        .collect();
    pairs.sort_unstable();
    let total_cost = pairs.iter().map(|&(r, c)| cost[r][c]).sum();
    Ok(Assignment { pairs, total_cost })
}

/// Which IoU enters matching and recall.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum IouKind {
    Bev,
    ThreeD,
}

impl IouKind {
    pub fn compute(&self, a: &crate::geom::Box3D, b: &crate::geom::Box3D) -> f64 {
        match self {
            IouKind::Bev => bev_iou(a, b),
            IouKind::ThreeD => iou_3d(a, b),
        }
    }

    pub fn parse(s: &str) -> Result<IouKind> {
        match s.to_ascii_lowercase().as_str() {
            "bev" => Ok(IouKind::Bev),
            "3d" | "three_d" | "threed" => Ok(IouKind::ThreeD),
            other => Err(Error::invalid(format!("unknown IoU kind '{other}'"))),
        }
    }
}

/// How a ground truth counts as recalled.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RecallMatching {
    /// Any top-k detection above the threshold recalls a ground truth
    /// (many-to-one allowed). The default.
    Coverage,
    /// Detections are assigned one-to-one by maximum total IoU first.
    OneToOne,
}

/// Evaluation protocol parameters.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalConfig {
    pub proposal_k: usize,
    pub iou_thresholds: Vec<f64>,
    pub iou_kind: IouKind,
    pub recall_matching: RecallMatching,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            proposal_k: 500,
            iou_thresholds: vec![0.10, 0.25, 0.40],
            iou_kind: IouKind::ThreeD,
            recall_matching: RecallMatching::Coverage,
        }
    }
}

impl EvalConfig {
    pub fn validate(&self) -> Result<()> {
        if self.proposal_k == 0 {
            return Err(Error::invalid("proposal_k must be >= 1"));
        }
        if self.iou_thresholds.is_empty() {
            return Err(Error::invalid("at least one IoU threshold is required"));
        }
        if self
            .iou_thresholds
            .iter()
            .any(|t| !(*t > 0.0 && *t <= 1.0))
        {
            return Err(Error::invalid("IoU thresholds must lie in (0, 1]"));
        }
        Ok(())
    }
}

/// Which stage produced a match.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MatchStage {
    Iou,
    Distance,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MatchPair {
    pub gt: usize,
    pub det: usize,
    pub stage: MatchStage,
    pub iou: f64,
    pub distance: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct MatchResult {
    pub pairs: Vec<MatchPair>,
    pub unmatched_gt: Vec<usize>,
}

/// Two-stage matching of one scene. Detections must already be truncated
/// to the top-k by confidence.
///
/// Stage 0 partitions ground truths by whether they overlap any detection.
/// Stage 1 assigns the overlapping ones by maximizing total IoU; stage 2
/// assigns the rest to the leftover detections by minimizing center
/// distance. Ground truths beyond the detection budget are reported
/// unmatched.
pub fn match_scene(gts: &[GtObject], dets: &[Detection], cfg: &EvalConfig) -> MatchResult {
    let mut result = MatchResult::default();
    if gts.is_empty() {
        return result;
    }
    if dets.is_empty() {
        result.unmatched_gt = (0..gts.len()).collect();
        return result;
    }

    let iou: Vec<Vec<f64>> = gts
        .iter()
        .map(|g| {
            dets.iter()
                .map(|d| cfg.iou_kind.compute(&g.box3d, &d.box3d))
                .collect()
        })
        .collect();

    // Stage 0: split ground truths into no-overlap (A) and overlap (B).
    let mut set_a = Vec::new();
    let mut set_b = Vec::new();
    for (g, row) in iou.iter().enumerate() {
        if row.iter().all(|&v| v == 0.0) {
            set_a.push(g);
        } else {
            set_b.push(g);
        }
    }

    // Stage 1: maximize IoU over B x all detections.
    let mut det_taken = vec![false; dets.len()];
    if !set_b.is_empty() {
        let sub: Vec<Vec<f64>> = set_b.iter().map(|&g| iou[g].clone()).collect();
        let assignment = hungarian(&sub, Objective::Maximize).expect("finite IoU matrix");
        for (bi, dj) in assignment.pairs {
            let g = set_b[bi];
            det_taken[dj] = true;
            result.pairs.push(MatchPair {
                gt: g,
                det: dj,
                stage: MatchStage::Iou,
                iou: iou[g][dj],
                distance: center_distance(&gts[g].box3d, &dets[dj].box3d),
            });
        }
    }

    // Stage 2: minimize center distance over A x remaining detections.
    let remaining: Vec<usize> = (0..dets.len()).filter(|&d| !det_taken[d]).collect();
    if !set_a.is_empty() && !remaining.is_empty() {
        let dist: Vec<Vec<f64>> = set_a
            .iter()
            .map(|&g| {
                remaining
                    .iter()
                    .map(|&d| center_distance(&gts[g].box3d, &dets[d].box3d))
                    .collect()
            })
            .collect();
        let assignment = hungarian(&dist, Objective::Minimize).expect("finite distance matrix");
        for (ai, rj) in assignment.pairs {
            let g = set_a[ai];
            let d = remaining[rj];
            result.pairs.push(MatchPair {
                gt: g,
                det: d,
                stage: MatchStage::Distance,
                iou: 0.0,
                distance: dist[ai][rj],
            });
        }
    }

    result.pairs.sort_by_key(|p| p.gt);
    let matched: std::collections::HashSet<usize> =
        result.pairs.iter().map(|p| p.gt).collect();
    result.unmatched_gt = (0..gts.len()).filter(|g| !matched.contains(g)).collect();
    result
}

/// One recall table cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecallRow {
    pub class: String,
    pub k: usize,
    pub iou_threshold: f64,
    pub tp: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
    pub recall: Option<f64>,
}

/// Recall over (k, threshold) cells, with per-class breakdown plus an
/// "all" aggregate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecallReport {
    pub rows: Vec<RecallRow>,
}

impl RecallReport {
    pub fn row(&self, class: &str, k: usize, threshold: f64) -> Option<&RecallRow> {
        self.rows
            .iter()
            .find(|r| r.class == class && r.k == k && r.iou_threshold == threshold)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("class,k,iou_threshold,tp,fn,recall\n");
        for r in &self.rows {
            out.push_str(&format!(
                "{},{},{},{},{},{}\n",
                r.class,
                r.k,
                r.iou_threshold,
                r.tp,
                r.fn_,
                r.recall.map_or(String::new(), |v| v.to_string())
            ));
        }
        out
    }
}

/// Detection indices sorted by confidence descending, ties broken by
/// input order.
pub fn rank_by_conf(dets: &[Detection]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..dets.len()).collect();
    order.sort_by(|&a, &b| {
        dets[b]
            .conf
            .partial_cmp(&dets[a].conf)
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.cmp(&b))
    });
    order
}

/// Top-k recall over many scenes. A ground truth counts as a true positive
/// at (k, t) if any of the top-k detections reaches IoU >= t with it
/// (coverage), or if its one-to-one partner does (the alternative mode).
pub fn recall_curve(
    scenes: &[(&[GtObject], &[Detection])],
    cfg: &EvalConfig,
    k_values: &[usize],
) -> Result<RecallReport> {
    cfg.validate()?;
    if k_values.is_empty() {
        return Err(Error::invalid("at least one k value is required"));
    }

    // (class, k, threshold-index) -> (tp, total)
    let mut cells: BTreeMap<(String, usize, usize), (u64, u64)> = BTreeMap::new();
    let mut bump = |class: &str, k: usize, ti: usize, covered: bool| {
        let cell = cells.entry((class.to_string(), k, ti)).or_insert((0, 0));
        cell.1 += 1;
        if covered {
            cell.0 += 1;
        }
    };

    for (gts, dets) in scenes {
        let order = rank_by_conf(dets);
        match cfg.recall_matching {
            RecallMatching::Coverage => {
                // Prefix maxima of IoU in rank order, per ground truth.
                for (g, gt) in gts.iter().enumerate() {
                    let mut prefix_max = Vec::with_capacity(order.len());
                    let mut best: f64 = 0.0;
                    for &d in &order {
                        best = best.max(cfg.iou_kind.compute(&gt.box3d, &dets[d].box3d));
                        prefix_max.push(best);
                    }
                    let _ = g;
                    for &k in k_values {
                        let upto = k.min(order.len());
                        let best_at_k = if upto == 0 { 0.0 } else { prefix_max[upto - 1] };
                        for (ti, &t) in cfg.iou_thresholds.iter().enumerate() {
                            let covered = best_at_k >= t;
                            bump(&gt.class_label, k, ti, covered);
                            bump("all", k, ti, covered);
                        }
                    }
                }
            }
            RecallMatching::OneToOne => {
                for &k in k_values {
                    let top: Vec<&Detection> =
                        order.iter().take(k).map(|&d| &dets[d]).collect();
                    let iou: Vec<Vec<f64>> = gts
                        .iter()
                        .map(|g| {
                            top.iter()
                                .map(|d| cfg.iou_kind.compute(&g.box3d, &d.box3d))
                                .collect()
                        })
                        .collect();
                    let mut best = vec![0.0; gts.len()];
                    if !top.is_empty() && !gts.is_empty() {
                        let assignment =
                            hungarian(&iou, Objective::Maximize).expect("finite IoU matrix");
                        for (g, d) in assignment.pairs {
                            best[g] = iou[g][d];
                        }
                    }
                    for (g, gt) in gts.iter().enumerate() {
                        for (ti, &t) in cfg.iou_thresholds.iter().enumerate() {
                            let covered = best[g] >= t;
                            bump(&gt.class_label, k, ti, covered);
                            bump("all", k, ti, covered);
                        }
                    }
                }
            }
        }
    }

    let mut rows = Vec::with_capacity(cells.len());
    for ((class, k, ti), (tp, total)) in cells {
        let fn_ = total - tp;
        rows.push(RecallRow {
            class,
            k,
            iou_threshold: cfg.iou_thresholds[ti],
            tp,
            fn_,
            recall: if total > 0 {
                Some(tp as f64 / total as f64)
            } else {
                None
            },
        });
    }
    Ok(RecallReport { rows })
}
