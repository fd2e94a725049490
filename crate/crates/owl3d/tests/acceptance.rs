//! Acceptance suite: one test per criterion, each printing a PASS line
//! once its assertions hold. Oracles here are written independently of
//! the library code paths they check.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rayon::prelude::*;
use std::fs;
use std::path::Path;

use owl3d::bank::{build_bank, multi_size_mix, paste_samples, LocationPool, Placement, SizePool};
use owl3d::geom::{bev_iou, iou_3d, points_in_box, Box3D, Point, PointCloud};
use owl3d::losses::{
    energy, energy_reg_loss, finite_diff_check, focal_loss, supcon_ood_loss, ContrastiveBatch,
    ContrastiveLabel, LogitBatch, LossConfig,
};
use owl3d::matching::{
    hungarian, match_scene, recall_curve, EvalConfig, MatchStage, Objective,
};
use owl3d::ood::{aupr, auroc, fpr_at_tpr, id_score, ScoreKind, ScoreMetric};
use owl3d::sceneio::{Detection, GtObject, SceneRecord};

fn pass(n: u32, what: &str) {
    println!("acceptance criterion {n}: PASS - {what}");
}

// ---------------------------------------------------------------------------
// 1. Geometry oracle
// ---------------------------------------------------------------------------

/// Monte-Carlo BEV IoU with its own rotation math (independent of the
/// library's polygon clipping).
fn mc_bev_iou(a: &Box3D, b: &Box3D, samples: u32, rng: &mut ChaCha20Rng) -> f64 {
    fn corners(b: &Box3D) -> [[f64; 2]; 4] {
        let (s, c) = (b.yaw.sin(), b.yaw.cos());
        let (hl, hw) = (b.l / 2.0, b.w / 2.0);
        [
            [b.cx + c * hl - s * hw, b.cy + s * hl + c * hw],
            [b.cx - c * hl - s * hw, b.cy - s * hl + c * hw],
            [b.cx - c * hl + s * hw, b.cy - s * hl - c * hw],
            [b.cx + c * hl + s * hw, b.cy + s * hl - c * hw],
        ]
    }
    fn inside(b: &Box3D, x: f64, y: f64) -> bool {
        let (dx, dy) = (x - b.cx, y - b.cy);
        let (s, c) = (b.yaw.sin(), b.yaw.cos());
        let lx = c * dx + s * dy;
        let ly = -s * dx + c * dy;
        lx.abs() <= b.l / 2.0 && ly.abs() <= b.w / 2.0
    }

    let mut lo = [f64::INFINITY; 2];
    let mut hi = [f64::NEG_INFINITY; 2];
    for p in corners(a).iter().chain(corners(b).iter()) {
        lo[0] = lo[0].min(p[0]);
        lo[1] = lo[1].min(p[1]);
        hi[0] = hi[0].max(p[0]);
        hi[1] = hi[1].max(p[1]);
    }
    let mut n_both = 0u32;
    let mut n_either = 0u32;
    for _ in 0..samples {
        let x = rng.gen_range(lo[0]..hi[0]);
        let y = rng.gen_range(lo[1]..hi[1]);
        let ia = inside(a, x, y);
        let ib = inside(b, x, y);
        if ia && ib {
            n_both += 1;
        }
        if ia || ib {
            n_either += 1;
        }
    }
    if n_either == 0 {
        0.0
    } else {
        n_both as f64 / n_either as f64
    }
}

fn random_box(rng: &mut ChaCha20Rng, spread: f64) -> Box3D {
    Box3D::new(
        rng.gen_range(-spread..spread),
        rng.gen_range(-spread..spread),
        rng.gen_range(-1.0..1.0),
        rng.gen_range(0.5..4.0),
        rng.gen_range(0.5..4.0),
        rng.gen_range(0.5..3.0),
        rng.gen_range(-std::f64::consts::PI..std::f64::consts::PI),
    )
}

#[test]
fn criterion_1_geometry_oracle() {
    // Analytic cases.
    let unit = Box3D::new(0.0, 0.0, 0.0, 1.0, 1.0, 1.0, 0.0);
    let rotated = Box3D::new(0.0, 0.0, 0.0, 1.0, 1.0, 1.0, std::f64::consts::PI / 4.0);
    let shifted = Box3D::new(0.5, 0.0, 0.0, 1.0, 1.0, 1.0, 0.0);
    assert_eq!(bev_iou(&unit, &unit), 1.0, "identical boxes must give exactly 1");
    assert!((bev_iou(&unit, &rotated) - 1.0 / 2.0_f64.sqrt()).abs() <= 1e-9);
    assert!((iou_3d(&unit, &shifted) - 1.0 / 3.0).abs() <= 1e-9);

    // 200 seeded random pairs against the Monte-Carlo oracle.
    let pairs: Vec<(Box3D, Box3D)> = {
        let mut rng = ChaCha20Rng::seed_from_u64(0xce0_1);
        (0..200)
            .map(|_| (random_box(&mut rng, 3.0), random_box(&mut rng, 3.0)))
            .collect()
    };
    let worst = pairs
        .par_iter()
        .enumerate()
        .map(|(i, (a, b))| {
            let mut rng = ChaCha20Rng::seed_from_u64(0xce0_2 + i as u64);
            let mc = mc_bev_iou(a, b, 1_000_000, &mut rng);
            (bev_iou(a, b) - mc).abs()
        })
        .reduce(|| 0.0, f64::max);
    assert!(worst <= 0.01, "worst |analytic - MC| = {worst}");
    pass(1, &format!("bev_iou vs 1e6-sample Monte-Carlo, worst gap {worst:.5}"));
}

// ---------------------------------------------------------------------------
// 2. Hungarian oracle
// ---------------------------------------------------------------------------

/// Exhaustive optimum over all injections of rows into columns.
fn brute_force_assignment(cost: &[Vec<f64>], maximize: bool) -> f64 {
    let rows = cost.len();
    let cols = cost[0].len();
    let (r, c, flip) = if rows <= cols {
        (rows, cols, false)
    } else {
        (cols, rows, true)
    };
    let at = |i: usize, j: usize| if flip { cost[j][i] } else { cost[i][j] };
    fn rec(
        at: &dyn Fn(usize, usize) -> f64,
        row: usize,
        r: usize,
        c: usize,
        used: &mut Vec<bool>,
        maximize: bool,
    ) -> f64 {
        if row == r {
            return 0.0;
        }
        let mut best = if maximize {
            f64::NEG_INFINITY
        } else {
            f64::INFINITY
        };
        for j in 0..c {
            if used[j] {
                continue;
            }
            used[j] = true;
            let v = at(row, j) + rec(at, row + 1, r, c, used, maximize);
            used[j] = false;
            best = if maximize { best.max(v) } else { best.min(v) };
        }
        best
    }
    let mut used = vec![false; c];
    rec(&|i, j| at(i, j), 0, r, c, &mut used, maximize)
}

#[test]
fn criterion_2_hungarian_oracle() {
    let mut rng = ChaCha20Rng::seed_from_u64(0xa551);
    for case in 0..500 {
        let (rows, cols) = if case % 2 == 0 {
            let n = rng.gen_range(1..=6);
            (n, n)
        } else {
            let r = rng.gen_range(1..=4);
            let c = rng.gen_range(1..=7);
            if rng.gen_bool(0.5) {
                (r, c)
            } else {
                (c, r)
            }
        };
        // Integer-valued costs keep both routes exact in f64.
        let cost: Vec<Vec<f64>> = (0..rows)
            .map(|_| (0..cols).map(|_| rng.gen_range(0..=100) as f64).collect())
            .collect();
        for objective in [Objective::Minimize, Objective::Maximize] {
            let solved = hungarian(&cost, objective).unwrap();
            assert_eq!(solved.pairs.len(), rows.min(cols));
            let best = brute_force_assignment(&cost, objective == Objective::Maximize);
            assert_eq!(
                solved.total_cost, best,
                "case {case} {objective:?} {rows}x{cols}: {} != {best}",
                solved.total_cost
            );
        }
    }
    pass(2, "500 random matrices match the exhaustive-permutation optimum exactly");
}

// ---------------------------------------------------------------------------
// 3. Two-stage matching properties
// ---------------------------------------------------------------------------

fn random_scene(rng: &mut ChaCha20Rng) -> (Vec<GtObject>, Vec<Detection>) {
    let n_gt = rng.gen_range(0..8);
    let gts: Vec<GtObject> = (0..n_gt)
        .map(|_| GtObject {
            class_label: if rng.gen_bool(0.3) { "Misc" } else { "Car" }.to_string(),
            box3d: random_box(rng, 30.0),
            num_points: 10,
        })
        .collect();
    let mut dets = Vec::new();
    for gt in &gts {
        if rng.gen_bool(0.7) {
            let b = &gt.box3d;
            dets.push(Detection {
                conf: rng.gen_range(0.1..1.0),
                objectness: None,
                scores: vec![0.0; 3],
                box3d: Box3D::new(
                    b.cx + rng.gen_range(-1.0..1.0),
                    b.cy + rng.gen_range(-1.0..1.0),
                    b.cz,
                    b.l,
                    b.w,
                    b.h,
                    b.yaw,
                ),
            });
        }
    }
    for _ in 0..rng.gen_range(0..4) {
        dets.push(Detection {
            conf: rng.gen_range(0.1..1.0),
            objectness: None,
            scores: vec![0.0; 3],
            box3d: random_box(rng, 30.0),
        });
    }
    (gts, dets)
}

#[test]
fn criterion_3_matching_properties() {
    let cfg = EvalConfig::default();
    let mut rng = ChaCha20Rng::seed_from_u64(0x3a7c);
    let mut optimality_checked = 0;
    for scene in 0..100 {
        let (gts, dets) = random_scene(&mut rng);
        let result = match_scene(&gts, &dets, &cfg);

        let iou_matrix: Vec<Vec<f64>> = gts
            .iter()
            .map(|g| dets.iter().map(|d| iou_3d(&g.box3d, &d.box3d)).collect())
            .collect();

        // Stage partition: distance-stage ground truths have all-zero rows.
        for pair in &result.pairs {
            match pair.stage {
                MatchStage::Distance => {
                    assert!(
                        iou_matrix[pair.gt].iter().all(|&v| v == 0.0),
                        "scene {scene}: distance-stage gt {} has an overlap",
                        pair.gt
                    );
                    assert_eq!(pair.iou, 0.0);
                }
                MatchStage::Iou => {
                    assert_eq!(pair.iou, iou_matrix[pair.gt][pair.det]);
                }
            }
        }

        // No detection or ground truth matched twice.
        let mut det_seen = std::collections::HashSet::new();
        let mut gt_seen = std::collections::HashSet::new();
        for pair in &result.pairs {
            assert!(det_seen.insert(pair.det), "detection matched twice");
            assert!(gt_seen.insert(pair.gt), "ground truth matched twice");
        }

        // Stage-1 optimality versus exhaustive enumeration for |B| <= 6.
        let set_b: Vec<usize> = (0..gts.len())
            .filter(|&g| iou_matrix[g].iter().any(|&v| v > 0.0))
            .collect();
        if !set_b.is_empty() && set_b.len() <= 6 && !dets.is_empty() {
            let sub: Vec<Vec<f64>> = set_b.iter().map(|&g| iou_matrix[g].clone()).collect();
            let best = brute_force_assignment(&sub, true);
            let achieved: f64 = result
                .pairs
                .iter()
                .filter(|p| p.stage == MatchStage::Iou)
                .map(|p| p.iou)
                .sum();
            assert!(
                achieved >= best - 1e-9,
                "scene {scene}: stage-1 total IoU {achieved} < exhaustive {best}"
            );
            optimality_checked += 1;
        }

        // Unmatched ground truths exist only when detections run out.
        if dets.len() >= gts.len() {
            assert!(result.unmatched_gt.is_empty(), "scene {scene}");
        } else {
            assert_eq!(result.pairs.len(), dets.len());
            assert_eq!(result.unmatched_gt.len(), gts.len() - dets.len());
        }
    }
    assert!(optimality_checked > 20, "too few optimality checks ran");
    pass(3, &format!(
        "100 random scenes: partition, uniqueness, {} stage-1 optimality checks",
        optimality_checked
    ));
}

// ---------------------------------------------------------------------------
// 4. Ranking-metric oracles
// ---------------------------------------------------------------------------

fn pairwise_auroc(id: &[f64], ood: &[f64]) -> f64 {
    let mut acc = 0.0;
    for &o in ood {
        for &i in id {
            // OOD-ness is the negated ID score.
            if -o > -i {
                acc += 1.0;
            } else if o == i {
                acc += 0.5;
            }
        }
    }
    acc / (id.len() * ood.len()) as f64
}

fn sweep_fpr_at_tpr(id: &[f64], ood: &[f64], target: f64) -> f64 {
    let mut taus: Vec<f64> = id.iter().chain(ood).map(|&s| -s).collect();
    taus.sort_by(|a, b| b.partial_cmp(a).unwrap());
    taus.dedup();
    for tau in taus {
        let tpr = ood.iter().filter(|&&s| -s >= tau).count() as f64 / ood.len() as f64;
        if tpr >= target {
            return id.iter().filter(|&&s| -s >= tau).count() as f64 / id.len() as f64;
        }
    }
    1.0
}

#[test]
fn criterion_4_metric_oracles() {
    let mut rng = ChaCha20Rng::seed_from_u64(0x0c4);
    for case in 0..100 {
        let n = rng.gen_range(1..=500);
        let m = rng.gen_range(1..=500);
        // Quantized draws force ties; continuous draws cover the rest.
        let quantized = case % 3 == 0;
        let mut draw = |rng: &mut ChaCha20Rng| -> f64 {
            if quantized {
                rng.gen_range(-5..5) as f64 * 0.5
            } else {
                rng.gen_range(-10.0..10.0)
            }
        };
        let id: Vec<f64> = (0..n).map(|_| draw(&mut rng)).collect();
        let ood: Vec<f64> = (0..m).map(|_| draw(&mut rng)).collect();

        let fast = auroc(&id, &ood).unwrap();
        let oracle = pairwise_auroc(&id, &ood);
        assert!(
            (fast - oracle).abs() <= 1e-12,
            "case {case}: auroc {fast} vs pairwise {oracle}"
        );

        let fpr = fpr_at_tpr(&id, &ood, 0.95).unwrap();
        let swept = sweep_fpr_at_tpr(&id, &ood, 0.95);
        assert_eq!(fpr, swept, "case {case}: fpr95 mismatch");
    }

    // Hand-walked 4-point AUPR fixture: ranked by OOD-ness the labels are
    // [ood, id, ood, id], so AP = 1/2 * (1/1) + 1/2 * (2/3) = 5/6.
    let id = [0.9, 0.6];
    let ood = [0.8, 0.5];
    assert!((aupr(&id, &ood).unwrap() - 5.0 / 6.0).abs() <= 1e-12);

    // Monotone-transform invariance: MaxProb is a strictly increasing
    // function of MaxLogit, so AUROC agrees exactly on every fixture.
    for _ in 0..20 {
        let rows = |rng: &mut ChaCha20Rng, n: usize| -> Vec<Vec<f64>> {
            (0..n)
                .map(|_| (0..3).map(|_| rng.gen_range(-6.0..6.0)).collect())
                .collect()
        };
        let id_rows = rows(&mut rng, 25);
        let ood_rows = rows(&mut rng, 15);
        let score = |rows: &[Vec<f64>], kind: ScoreKind| -> Vec<f64> {
            rows.iter()
                .map(|z| id_score(z, ScoreMetric::new(kind)).unwrap())
                .collect()
        };
        let a = auroc(&score(&id_rows, ScoreKind::MaxProb), &score(&ood_rows, ScoreKind::MaxProb))
            .unwrap();
        let b = auroc(
            &score(&id_rows, ScoreKind::MaxLogit),
            &score(&ood_rows, ScoreKind::MaxLogit),
        )
        .unwrap();
        assert_eq!(a, b, "AUROC(MaxProb) must equal AUROC(MaxLogit) exactly");
    }
    pass(4, "AUROC/FPR95 oracles, AUPR fixture, monotone invariance");
}

// ---------------------------------------------------------------------------
// 5. Gradient checks
// ---------------------------------------------------------------------------

#[test]
fn criterion_5_gradient_checks() {
    let cfg = LossConfig::default();
    let eps = 1e-4;
    let tol = 1e-5;
    let mut rng = ChaCha20Rng::seed_from_u64(0x9fad);

    // Focal.
    let mut worst_focal = 0.0_f64;
    for _ in 0..20 {
        let n = rng.gen_range(1..10);
        let logits: Vec<f64> = (0..n).map(|_| rng.gen_range(-4.0..4.0)).collect();
        let labels: Vec<bool> = (0..n).map(|_| rng.gen_bool(0.5)).collect();
        let (_, grad) = focal_loss(&logits, &labels, cfg.alpha, cfg.gamma).unwrap();
        worst_focal = worst_focal.max(finite_diff_check(
            |x| focal_loss(x, &labels, cfg.alpha, cfg.gamma).unwrap().0,
            &logits,
            &grad,
            eps,
        ));
    }
    assert!(worst_focal <= tol, "focal worst {worst_focal}");

    // Energy regularizer; also the exact-zero-inside-margins property with
    // the paper defaults m_in = -6, m_out = -3.
    assert_eq!(cfg.m_in, -6.0);
    assert_eq!(cfg.m_out, -3.0);
    let quiet = LogitBatch {
        id_logits: vec![vec![8.0, 0.0, 0.0]], // E ~ -8 < m_in
        ood_logits: vec![vec![1.0, 1.0, 1.0]], // E ~ -2.1 > m_out
    };
    assert!(energy(&quiet.id_logits[0], cfg.temperature) <= cfg.m_in);
    assert!(energy(&quiet.ood_logits[0], cfg.temperature) >= cfg.m_out);
    assert_eq!(energy_reg_loss(&quiet, &cfg).0, 0.0);

    let mut worst_energy = 0.0_f64;
    for _ in 0..20 {
        let k = rng.gen_range(1..5);
        let n_id = rng.gen_range(1..4);
        let n_ood = rng.gen_range(1..4);
        // Central differences are meaningless across the hinge kink, so
        // rows are resampled until their energy sits clear of both margins.
        let row = |rng: &mut ChaCha20Rng, margin: f64| -> Vec<f64> {
            loop {
                let r: Vec<f64> = (0..k).map(|_| rng.gen_range(-8.0..8.0)).collect();
                if (energy(&r, 1.0) - margin).abs() > 1e-3 {
                    return r;
                }
            }
        };
        let batch = LogitBatch {
            id_logits: (0..n_id).map(|_| row(&mut rng, cfg.m_in)).collect(),
            ood_logits: (0..n_ood).map(|_| row(&mut rng, cfg.m_out)).collect(),
        };
        let (_, grads) = energy_reg_loss(&batch, &cfg);
        let flat: Vec<f64> = batch
            .id_logits
            .iter()
            .chain(&batch.ood_logits)
            .flatten()
            .cloned()
            .collect();
        let flat_grad: Vec<f64> = grads.id.iter().chain(&grads.ood).flatten().cloned().collect();
        let rows_id = batch.id_logits.len();
        worst_energy = worst_energy.max(finite_diff_check(
            |x| {
                let rows: Vec<Vec<f64>> = x.chunks(k).map(|c| c.to_vec()).collect();
                energy_reg_loss(
                    &LogitBatch {
                        id_logits: rows[..rows_id].to_vec(),
                        ood_logits: rows[rows_id..].to_vec(),
                    },
                    &cfg,
                )
                .0
            },
            &flat,
            &flat_grad,
            eps,
        ));
    }
    assert!(worst_energy <= tol, "energy reg worst {worst_energy}");

    // Outlier-aware contrastive; singleton anchors contribute exactly 0.
    let singleton = ContrastiveBatch {
        embeddings: vec![vec![0.3, -0.8], vec![0.5, 0.5]],
        labels: vec![ContrastiveLabel::In(0), ContrastiveLabel::Out],
    };
    assert_eq!(supcon_ood_loss(&singleton, cfg.tau_c).unwrap().0, 0.0);

    let mut worst_supcon = 0.0_f64;
    for _ in 0..20 {
        let dim = 8;
        let n = 6;
        let embeddings: Vec<Vec<f64>> = (0..n)
            .map(|_| (0..dim).map(|_| rng.gen_range(-1.0..1.0)).collect())
            .collect();
        let labels: Vec<ContrastiveLabel> = (0..n)
            .map(|_| {
                if rng.gen_bool(0.25) {
                    ContrastiveLabel::Out
                } else {
                    ContrastiveLabel::In(rng.gen_range(0..2))
                }
            })
            .collect();
        let batch = ContrastiveBatch {
            embeddings: embeddings.clone(),
            labels: labels.clone(),
        };
        let (_, grads) = supcon_ood_loss(&batch, cfg.tau_c).unwrap();
        let flat: Vec<f64> = embeddings.iter().flatten().cloned().collect();
        let flat_grad: Vec<f64> = grads.iter().flatten().cloned().collect();
        worst_supcon = worst_supcon.max(finite_diff_check(
            |x| {
                supcon_ood_loss(
                    &ContrastiveBatch {
                        embeddings: x.chunks(dim).map(|c| c.to_vec()).collect(),
                        labels: labels.clone(),
                    },
                    cfg.tau_c,
                )
                .unwrap()
                .0
            },
            &flat,
            &flat_grad,
            eps,
        ));
    }
    assert!(worst_supcon <= tol, "supcon worst {worst_supcon}");

    pass(5, &format!(
        "gradients: focal {worst_focal:.2e}, energy {worst_energy:.2e}, supcon {worst_supcon:.2e} (tol 1e-5)"
    ));
}

// ---------------------------------------------------------------------------
// 6. Augmentation invariants
// ---------------------------------------------------------------------------

fn interior_points(b: &Box3D, n: usize, rng: &mut ChaCha20Rng) -> Vec<Point> {
    (0..n)
        .map(|_| {
            let local = [
                rng.gen_range(-0.45..0.45) * b.l,
                rng.gen_range(-0.45..0.45) * b.w,
                rng.gen_range(-0.45..0.45) * b.h,
            ];
            let w = b.to_world(local);
            Point::new(w[0], w[1], w[2], rng.gen_range(0.0..1.0))
        })
        .collect()
}

fn fixture_scene(id: &str, rng: &mut ChaCha20Rng) -> SceneRecord {
    let mut cloud = Vec::new();
    let mut annotations = Vec::new();
    for i in 0..rng.gen_range(2..5) {
        let b = Box3D::new(
            -20.0 + 12.0 * i as f64,
            rng.gen_range(-8.0..8.0),
            0.6,
            rng.gen_range(1.5..4.0),
            rng.gen_range(1.0..2.0),
            rng.gen_range(1.0..2.0),
            rng.gen_range(-1.0..1.0),
        );
        let pts = interior_points(&b, rng.gen_range(6..15), rng);
        annotations.push(GtObject {
            class_label: if i == 0 { "Car" } else { "Pedestrian" }.to_string(),
            box3d: b,
            num_points: pts.len(),
        });
        cloud.extend(pts);
    }
    SceneRecord {
        scene_id: id.to_string(),
        cloud: PointCloud::new(cloud),
        annotations,
    }
}

#[test]
fn criterion_6_augmentation_invariants() {
    let mut rng = ChaCha20Rng::seed_from_u64(0x6a61);

    // Donor scenes: five keepable Misc objects and one planted 4-point one.
    let mut donor_cloud = Vec::new();
    let mut donor_annotations = Vec::new();
    for i in 0..6 {
        let b = Box3D::new(
            8.0 * i as f64,
            40.0,
            0.5,
            1.2 + 0.3 * i as f64,
            1.0,
            1.4,
            0.2 * i as f64,
        );
        let count = if i == 5 { 4 } else { 6 + i };
        let pts = interior_points(&b, count, &mut rng);
        donor_annotations.push(GtObject {
            class_label: "Misc".to_string(),
            box3d: b,
            num_points: pts.len(),
        });
        donor_cloud.extend(pts);
    }
    let donor = SceneRecord {
        scene_id: "donor".to_string(),
        cloud: PointCloud::new(donor_cloud),
        annotations: donor_annotations,
    };
    let bank = build_bank(&[donor], &["Misc".to_string()], 5);
    assert_eq!(bank.len(), 5, "the 4-point object must be filtered out");
    assert!(bank.entries.iter().all(|e| e.num_points >= 5));

    // Multi-size mix alternates original/resized by index parity.
    let pool = SizePool {
        dims: vec![[2.0, 1.5, 1.8], [3.5, 2.0, 2.2], [1.0, 0.8, 1.1]],
    };
    let mixed = multi_size_mix(&bank, &pool, 0x6a62).unwrap();
    for (i, (orig, entry)) in bank.entries.iter().zip(&mixed.entries).enumerate() {
        if i % 2 == 0 {
            assert_eq!(entry, orig, "even entry {i} must be bit-identical");
            assert!(!entry.resized);
        } else {
            assert!(entry.resized, "odd entry {i} must be resized");
            assert!(
                pool.dims.contains(&entry.box3d.dims()),
                "resized dims must come from the pool"
            );
            assert_eq!(
                points_in_box(&entry.points, &entry.box3d).len(),
                entry.points.len()
            );
        }
    }

    // Paste into 50 fixture scenes and check the collision/containment
    // invariants scene by scene.
    let locations = LocationPool {
        placements: (0..8)
            .map(|i| Placement {
                center: [30.0 + 10.0 * (i % 4) as f64, -30.0 + 20.0 * (i / 4) as f64, 0.6],
                yaw: 0.3 * i as f64,
            })
            .collect(),
    };
    for s in 0..50 {
        let scene = fixture_scene(&format!("{s:06}"), &mut rng);
        let before = scene.cloud.len();
        let outcome = paste_samples(&scene, &mixed, "Anomaly", 20, &locations, 0x6a63);
        assert!(outcome.accepted > 0, "scene {s} accepted nothing");

        let anns = &outcome.scene.annotations;
        let pasted: Vec<usize> = (scene.annotations.len()..anns.len()).collect();
        // Pairwise BEV IoU of every pasted box against every other box is 0.
        for &i in &pasted {
            for j in 0..anns.len() {
                if i != j {
                    assert_eq!(
                        bev_iou(&anns[i].box3d, &anns[j].box3d),
                        0.0,
                        "scene {s}: pasted box overlaps another box"
                    );
                }
            }
        }
        // Each pasted object owns exactly its appended block of points.
        let mut offset = before;
        for &i in &pasted {
            let inside = points_in_box(&outcome.scene.cloud, &anns[i].box3d);
            let expected: Vec<usize> = (offset..offset + anns[i].num_points).collect();
            assert_eq!(
                inside, expected,
                "scene {s}: pasted box {i} must contain all and only its bank points"
            );
            offset += anns[i].num_points;
        }
    }
    pass(6, "bank filtering, mix parity, and 50-scene paste invariants");
}

// ---------------------------------------------------------------------------
// 7. Benchmark determinism
// ---------------------------------------------------------------------------

fn tree_bytes(dir: &Path) -> Vec<(String, Vec<u8>)> {
    fn walk(base: &Path, dir: &Path, out: &mut Vec<(String, Vec<u8>)>) {
        for entry in fs::read_dir(dir).unwrap() {
            let entry = entry.unwrap();
            let path = entry.path();
            if path.is_dir() {
                walk(base, &path, out);
            } else {
                let rel = path.strip_prefix(base).unwrap().to_string_lossy().to_string();
                out.push((rel, fs::read(&path).unwrap()));
            }
        }
    }
    let mut out = Vec::new();
    walk(dir, dir, &mut out);
    out.sort_by(|a, b| a.0.cmp(&b.0));
    out
}

#[test]
fn criterion_7_benchmark_determinism() {
    let mut rng = ChaCha20Rng::seed_from_u64(0x7b3);
    let root = tempfile::tempdir().unwrap();
    let scenes_dir = root.path().join("scenes");
    for s in 0..6 {
        let scene = fixture_scene(&format!("{s:06}"), &mut rng);
        owl3d::sceneio::write_scene(&scenes_dir, &scene).unwrap();
    }
    let donor = fixture_scene("donor", &mut rng);
    let bank = build_bank(&[donor], &["Car".to_string(), "Pedestrian".to_string()], 5);
    assert!(!bank.is_empty());
    let bank_dir = root.path().join("bank");
    bank.save(&bank_dir).unwrap();

    let run = |out: &Path, threads: &str| {
        let code = owl3d::cli::dispatch([
            "owl3d",
            "synth",
            "--scenes",
            scenes_dir.to_str().unwrap(),
            "--bank",
            bank_dir.to_str().unwrap(),
            "--seed",
            "99",
            "--name",
            "determinism-check",
            "--samples-per-scene",
            "1",
            "--range",
            "0,50",
            "--out",
            out.to_str().unwrap(),
            "--threads",
            threads,
        ]);
        assert_eq!(code, 0, "synth failed");
    };

    let out_a = root.path().join("bench_a");
    let out_b = root.path().join("bench_b");
    let out_c = root.path().join("bench_c");
    run(&out_a, "1");
    run(&out_b, "1");
    run(&out_c, "8");

    let a = tree_bytes(&out_a);
    assert!(!a.is_empty());
    assert_eq!(a, tree_bytes(&out_b), "same seed, two runs: trees differ");
    assert_eq!(a, tree_bytes(&out_c), "thread count changed the output");

    // Regenerating from the manifest reproduces the tree.
    let out_d = root.path().join("bench_d");
    let code = owl3d::cli::dispatch([
        "owl3d",
        "synth",
        "--scenes",
        scenes_dir.to_str().unwrap(),
        "--bank",
        bank_dir.to_str().unwrap(),
        "--from-manifest",
        out_a.join("manifest.json").to_str().unwrap(),
        "--out",
        out_d.to_str().unwrap(),
    ]);
    assert_eq!(code, 0, "regeneration failed");
    assert_eq!(a, tree_bytes(&out_d), "manifest regeneration drifted");

    pass(7, "byte-identical trees across runs, thread counts, and regeneration");
}

// ---------------------------------------------------------------------------
// 8. Recall protocol sanity
// ---------------------------------------------------------------------------

fn gaussian(rng: &mut ChaCha20Rng) -> f64 {
    // Box-Muller.
    let u1: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
    let u2: f64 = rng.gen_range(0.0..1.0);
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}

fn noisy_detector(
    gts: &[GtObject],
    sigma: f64,
    rng: &mut ChaCha20Rng,
) -> Vec<Detection> {
    gts.iter()
        .map(|gt| {
            let b = &gt.box3d;
            Detection {
                conf: 1.0 / (1.0 + sigma * rng.gen_range(0.0..1.0)),
                objectness: None,
                scores: vec![0.0; 3],
                box3d: Box3D::new(
                    b.cx + sigma * gaussian(rng),
                    b.cy + sigma * gaussian(rng),
                    b.cz + sigma * gaussian(rng),
                    b.l,
                    b.w,
                    b.h,
                    b.yaw,
                ),
            }
        })
        .collect()
}

#[test]
fn criterion_8_recall_protocol_sanity() {
    let cfg = EvalConfig::default();
    let mut rng = ChaCha20Rng::seed_from_u64(0x8eca);
    let scenes: Vec<Vec<GtObject>> = (0..40)
        .map(|_| {
            (0..6)
                .map(|i| GtObject {
                    class_label: "Misc".to_string(),
                    box3d: Box3D::new(
                        -30.0 + 10.0 * i as f64,
                        rng.gen_range(-20.0..20.0),
                        0.5,
                        rng.gen_range(1.5..4.0),
                        rng.gen_range(1.0..2.5),
                        rng.gen_range(1.0..2.0),
                        rng.gen_range(-1.5..1.5),
                    ),
                    num_points: 10,
                })
                .collect()
        })
        .collect();

    let k_values = [1, 2, 5, 500];
    let mut recall_at_040 = Vec::new();
    for (si, &sigma) in [0.0, 0.2, 0.5].iter().enumerate() {
        let mut det_rng = ChaCha20Rng::seed_from_u64(0x8ecb + si as u64);
        let dets: Vec<Vec<Detection>> = scenes
            .iter()
            .map(|gts| noisy_detector(gts, sigma, &mut det_rng))
            .collect();
        let inputs: Vec<(&[GtObject], &[Detection])> = scenes
            .iter()
            .zip(&dets)
            .map(|(g, d)| (g.as_slice(), d.as_slice()))
            .collect();
        let report = recall_curve(&inputs, &cfg, &k_values).unwrap();

        if sigma == 0.0 {
            for &t in &cfg.iou_thresholds {
                assert_eq!(
                    report.row("all", 500, t).unwrap().recall,
                    Some(1.0),
                    "sigma=0 must recall everything at t={t}"
                );
            }
        }
        // Monotone non-decreasing in k at every threshold.
        for &t in &cfg.iou_thresholds {
            let series: Vec<f64> = k_values
                .iter()
                .map(|&k| report.row("all", k, t).unwrap().recall.unwrap())
                .collect();
            for w in series.windows(2) {
                assert!(w[1] >= w[0], "recall dropped as k grew: {series:?}");
            }
        }
        recall_at_040.push(report.row("all", 500, 0.40).unwrap().recall.unwrap());
    }
    assert!(
        recall_at_040[0] > recall_at_040[1] && recall_at_040[1] > recall_at_040[2],
        "recall at 0.40 must strictly decrease with noise: {recall_at_040:?}"
    );
    pass(8, &format!("noise sweep recall@0.40: {recall_at_040:?}"));
}

// ---------------------------------------------------------------------------
// 9. End-to-end smoke through the CLI
// ---------------------------------------------------------------------------

#[test]
fn criterion_9_end_to_end_smoke() {
    use owl3d::sceneio::{
        format_kitti_labels, parse_calib, read_annotations, write_detections, write_pointcloud,
        SceneDetections, ScoreSpace,
    };

    let mut rng = ChaCha20Rng::seed_from_u64(0x9e2e);
    let root = tempfile::tempdir().unwrap();
    let velo_dir = root.path().join("velodyne");
    let label_dir = root.path().join("labels");
    let calib_dir = root.path().join("calib");
    for d in [&velo_dir, &label_dir, &calib_dir] {
        fs::create_dir_all(d).unwrap();
    }

    let calib_text = "P2: 1 0 0 0 0 1 0 0 0 0 1 0\n\
                      R0_rect: 1 0 0 0 1 0 0 0 1\n\
                      Tr_velo_to_cam: 0 -1 0 -0.004 0 0 -1 -0.076 1 0 0 -0.272\n";
    let calib = parse_calib(calib_text).unwrap();

    // Three KITTI-format fixture scenes, each with two ID objects and one
    // Misc object inside the 0-50 m band.
    for s in 0..3 {
        let id = format!("{s:06}");
        let boxes = vec![
            ("Car", Box3D::new(10.0 + s as f64, -3.0, 0.8, 3.9, 1.6, 1.5, 0.1)),
            ("Pedestrian", Box3D::new(6.0, 4.0 + s as f64, 0.9, 0.8, 0.6, 1.7, -0.4)),
            ("Misc", Box3D::new(20.0, 5.0 + s as f64, 0.7, 1.8, 1.2, 1.3, 0.6)),
        ];
        let mut cloud = Vec::new();
        let mut objects = Vec::new();
        for (class, b) in &boxes {
            cloud.extend(interior_points(b, 20, &mut rng));
            objects.push(GtObject {
                class_label: class.to_string(),
                box3d: *b,
                num_points: 20,
            });
        }
        write_pointcloud(&velo_dir.join(format!("{id}.bin")), &PointCloud::new(cloud)).unwrap();
        fs::write(
            label_dir.join(format!("{id}.txt")),
            format_kitti_labels(&objects, &calib).unwrap(),
        )
        .unwrap();
        fs::write(calib_dir.join(format!("{id}.txt")), calib_text).unwrap();
    }

    // ingest -> bank -> mix -> synth
    let scenes_dir = root.path().join("scenes");
    assert_eq!(
        owl3d::cli::dispatch([
            "owl3d", "ingest-kitti",
            "--velodyne", velo_dir.to_str().unwrap(),
            "--labels", label_dir.to_str().unwrap(),
            "--calib", calib_dir.to_str().unwrap(),
            "--out", scenes_dir.to_str().unwrap(),
        ]),
        0
    );

    let bank_dir = root.path().join("bank");
    assert_eq!(
        owl3d::cli::dispatch([
            "owl3d", "build-bank",
            "--scenes", scenes_dir.to_str().unwrap(),
            "--classes", "Misc",
            "--min-points", "5",
            "--out", bank_dir.to_str().unwrap(),
        ]),
        0
    );

    let sizes_path = root.path().join("sizes.json");
    fs::write(&sizes_path, r#"{"dims": [[2.0, 1.5, 1.6], [1.2, 1.0, 1.1]]}"#).unwrap();
    let mixed_dir = root.path().join("bank_mixed");
    assert_eq!(
        owl3d::cli::dispatch([
            "owl3d", "mix",
            "--bank", bank_dir.to_str().unwrap(),
            "--sizes", sizes_path.to_str().unwrap(),
            "--seed", "5",
            "--out", mixed_dir.to_str().unwrap(),
        ]),
        0
    );

    let bench_dir = root.path().join("bench");
    assert_eq!(
        owl3d::cli::dispatch([
            "owl3d", "synth",
            "--scenes", scenes_dir.to_str().unwrap(),
            "--bank", mixed_dir.to_str().unwrap(),
            "--seed", "7",
            "--samples-per-scene", "1",
            "--range", "0,50",
            "--out", bench_dir.to_str().unwrap(),
        ]),
        0
    );
    let manifest = owl3d::benchgen::read_manifest(&bench_dir).unwrap();
    assert!(!manifest.scene_ids.is_empty());
    for id in &manifest.scene_ids {
        let ann = read_annotations(&bench_dir.join("annotations").join(format!("{id}.json"))).unwrap();
        assert!(ann.objects.iter().all(|o| o.class_label == "Anomaly"));
    }

    // Oracle detector over the ingested scenes: perfect boxes; ID objects
    // get one-hot logits (high MSP), Misc objects get flat logits (low MSP).
    let mut det_scenes = Vec::new();
    for s in 0..3 {
        let id = format!("{s:06}");
        let ann = read_annotations(&scenes_dir.join("annotations").join(format!("{id}.json"))).unwrap();
        let detections = ann
            .objects
            .iter()
            .map(|o| Detection {
                conf: 1.0,
                objectness: None,
                scores: if o.class_label == "Misc" {
                    vec![0.0, 0.0, 0.0]
                } else {
                    vec![8.0, 0.0, 0.0]
                },
                box3d: o.box3d,
            })
            .collect();
        det_scenes.push(SceneDetections {
            scene_id: id,
            score_space: ScoreSpace::Logit,
            detections,
        });
    }
    let dets_path = root.path().join("oracle_dets.jsonl");
    write_detections(&dets_path, &det_scenes).unwrap();

    let report_path = root.path().join("report.json");
    let csv_path = root.path().join("report.csv");
    assert_eq!(
        owl3d::cli::dispatch([
            "owl3d", "eval",
            "--gt", scenes_dir.to_str().unwrap(),
            "--dets", dets_path.to_str().unwrap(),
            "--unseen-class", "Misc",
            "--k", "500",
            "--iou", "0.10,0.25,0.40",
            "--out", report_path.to_str().unwrap(),
            "--csv", csv_path.to_str().unwrap(),
        ]),
        0
    );

    let report: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(&report_path).unwrap()).unwrap();

    // Recall table at k=500 for all three thresholds, recall 1.0.
    let rows = report["recall"]["rows"].as_array().unwrap();
    for t in [0.10, 0.25, 0.40] {
        let row = rows
            .iter()
            .find(|r| {
                r["class"] == "all"
                    && r["k"] == 500
                    && (r["iou_threshold"].as_f64().unwrap() - t).abs() < 1e-12
            })
            .unwrap_or_else(|| panic!("missing recall row for t={t}"));
        assert_eq!(row["recall"].as_f64(), Some(1.0));
    }

    // OOD block for all 8 score metrics; MSP separates perfectly.
    let ood = &report["ood"];
    for name in [
        "msp", "max_logit", "sum_logit", "max_prob", "sum_prob", "max_energy",
        "joint_energy", "energy",
    ] {
        assert!(ood.get(name).is_some(), "missing OOD metric block '{name}'");
    }
    assert_eq!(ood["msp"]["auroc"].as_f64(), Some(1.0));
    assert_eq!(ood["msp"]["fpr95"].as_f64(), Some(0.0));
    assert_eq!(ood["n_ood"].as_u64(), Some(3));
    assert_eq!(ood["n_id"].as_u64(), Some(6));

    // CSV came out alongside.
    let csv = fs::read_to_string(&csv_path).unwrap();
    assert!(csv.starts_with("class,k,iou_threshold,tp,fn,recall"));

    pass(9, "ingest -> bank -> mix -> synth -> eval pipeline with oracle detector");
}
