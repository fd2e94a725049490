//! Frozen synthetic OOD benchmarks.
//!
//! A benchmark is generated once from a seed and persisted: per-scene
//! clouds, annotations, and a manifest that pins every generation input so
//! the directory tree can be reproduced byte for byte.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::fs;
use std::path::Path;

use crate::bank::{paste_entries, LocationPool, ObjectBank, Placement};
use crate::error::{Error, Result};
use crate::geom::{points_in_box, Box3D};
use crate::sceneio::{write_scene, SceneRecord};
use crate::seeding::derive_rng;

/// Scene ids containing at least one `target_class` object whose center
/// distance from the sensor origin lies in the closed range.
pub fn select_scenes(
    scenes: &[SceneRecord],
    target_class: &str,
    range_m: (f64, f64),
) -> Vec<String> {
    scenes
        .iter()
        .filter(|s| {
            s.annotations.iter().any(|o| {
                o.class_label == target_class && {
                    let c = o.box3d.center();
                    let d = (c[0] * c[0] + c[1] * c[1] + c[2] * c[2]).sqrt();
                    d >= range_m.0 && d <= range_m.1
                }
            })
        })
        .map(|s| s.scene_id.clone())
        .collect()
}

/// Record of one inserted object, kept in the manifest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InsertedObject {
    pub class: String,
    #[serde(rename = "box")]
    pub box3d: Box3D,
    pub num_points: usize,
    pub bank_index: usize,
}

/// Per-scene generation outcome.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneGenRecord {
    pub scene_id: String,
    pub inserted: Vec<InsertedObject>,
    pub accepted: usize,
    pub rejected: usize,
}

/// Generation parameters, embedded verbatim in the manifest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchParams {
    pub samples_per_scene: usize,
    pub range_m: (f64, f64),
    pub unseen_label: String,
    pub donor_locations: LocationPool,
}

impl Default for BenchParams {
    fn default() -> Self {
        BenchParams {
            samples_per_scene: 1,
            range_m: (0.0, 50.0),
            unseen_label: "Anomaly".to_string(),
            donor_locations: LocationPool::default(),
        }
    }
}

/// Everything needed to reproduce a frozen benchmark from the same source
/// scenes and bank.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkManifest {
    pub name: String,
    pub seed: u64,
    pub params: BenchParams,
    pub bank_hash: String,
    pub scene_ids: Vec<String>,
    pub scenes: Vec<SceneGenRecord>,
}

/// Build one synthetic scene: strip every foreground annotation and its
/// points, then paste bank objects labeled `unseen_label`. Placements come
/// from the scene's own removed boxes first, then from the donor pool.
pub fn build_synthetic_scene(
    scene: &SceneRecord,
    bank: &ObjectBank,
    samples_per_scene: usize,
    donor_locations: &LocationPool,
    seed: u64,
    unseen_label: &str,
) -> (SceneRecord, SceneGenRecord) {
    // Remove foreground points.
    let mut in_foreground = vec![false; scene.cloud.len()];
    for obj in &scene.annotations {
        for idx in points_in_box(&scene.cloud, &obj.box3d) {
            in_foreground[idx] = true;
        }
    }
    let mut cloud = crate::geom::PointCloud::new(
        scene
            .cloud
            .points
            .iter()
            .zip(&in_foreground)
            .filter(|(_, &fg)| !fg)
            .map(|(p, _)| *p)
            .collect(),
    );

    let own_placements: Vec<Placement> = scene
        .annotations
        .iter()
        .map(|o| Placement {
            center: o.box3d.center(),
            yaw: o.box3d.yaw,
        })
        .collect();

    let mut rng = derive_rng(seed, &format!("synth/{}", scene.scene_id));
    let entry_indices = {
        // Uniform without replacement over the bank.
        let mut idx: Vec<usize> = (0..bank.len()).collect();
        let take = samples_per_scene.min(bank.len());
        for i in 0..take {
            let j = rng.gen_range(i..bank.len());
            idx.swap(i, j);
        }
        idx.truncate(take);
        idx
    };

    let mut annotations = Vec::new();
    let mut pools = [own_placements, donor_locations.placements.clone()];
    let (accepted, rejected, inserted_from) = paste_entries(
        &mut cloud,
        &mut annotations,
        bank,
        &entry_indices,
        &mut pools,
        unseen_label,
        &mut rng,
    );

    let inserted = annotations
        .iter()
        .zip(&inserted_from)
        .map(|(o, &bi)| InsertedObject {
            class: o.class_label.clone(),
            box3d: o.box3d,
            num_points: o.num_points,
            bank_index: bi,
        })
        .collect();

    (
        SceneRecord {
            scene_id: scene.scene_id.clone(),
            cloud,
            annotations,
        },
        SceneGenRecord {
            scene_id: scene.scene_id.clone(),
            inserted,
            accepted,
            rejected,
        },
    )
}

use rand::Rng;

fn unseen_in_range(scene: &SceneRecord, label: &str, range_m: (f64, f64)) -> bool {
    scene.annotations.iter().any(|o| {
        o.class_label == label && {
            let c = o.box3d.center();
            let d = (c[0] * c[0] + c[1] * c[1] + c[2] * c[2]).sqrt();
            d >= range_m.0 && d <= range_m.1
        }
    })
}

/// Generate every synthetic scene, keep the ones with an inserted object
/// in range, and persist the benchmark directory:
/// `manifest.json`, `clouds/<id>.bin`, `annotations/<id>.json`.
pub fn freeze_benchmark(
    scenes: &[SceneRecord],
    bank: &ObjectBank,
    name: &str,
    seed: u64,
    params: &BenchParams,
    out_dir: &Path,
) -> Result<BenchmarkManifest> {
    let mut generated: Vec<(SceneRecord, SceneGenRecord)> = scenes
        .par_iter()
        .map(|scene| {
            build_synthetic_scene(
                scene,
                bank,
                params.samples_per_scene,
                &params.donor_locations,
                seed,
                &params.unseen_label,
            )
        })
        .collect();
    generated.sort_by(|a, b| a.0.scene_id.cmp(&b.0.scene_id));

    // Keep scenes with at least one insertion inside the configured range.
    let retained: Vec<(SceneRecord, SceneGenRecord)> = generated
        .into_iter()
        .filter(|(scene, rec)| {
            rec.accepted > 0 && unseen_in_range(scene, &params.unseen_label, params.range_m)
        })
        .collect();

    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    for (scene, _) in &retained {
        write_scene(out_dir, scene)?;
    }

    let manifest = BenchmarkManifest {
        name: name.to_string(),
        seed,
        params: params.clone(),
        bank_hash: bank.content_hash(),
        scene_ids: retained.iter().map(|(s, _)| s.scene_id.clone()).collect(),
        scenes: retained.into_iter().map(|(_, r)| r).collect(),
    };
    write_manifest(out_dir, &manifest)?;
    Ok(manifest)
}

pub fn write_manifest(dir: &Path, manifest: &BenchmarkManifest) -> Result<()> {
    let path = dir.join("manifest.json");
    let mut text = serde_json::to_string_pretty(manifest).expect("manifest serialization");
    text.push('\n');
    fs::write(&path, text).map_err(|e| Error::io(&path, e))
}

pub fn read_manifest(dir: &Path) -> Result<BenchmarkManifest> {
    let path = dir.join("manifest.json");
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::format(format!("manifest: {e}")))
}

/// Re-run generation with the manifest's seed and parameters. Fails if the
/// bank differs from the one the manifest was generated with; the produced
/// tree is byte-identical to the original.
pub fn regenerate_from_manifest(
    manifest: &BenchmarkManifest,
    scenes: &[SceneRecord],
    bank: &ObjectBank,
    out_dir: &Path,
) -> Result<BenchmarkManifest> {
    let hash = bank.content_hash();
    if hash != manifest.bank_hash {
        return Err(Error::invalid(format!(
            "bank hash {hash} does not match manifest bank hash {}",
            manifest.bank_hash
        )));
    }
    let regenerated = freeze_benchmark(
        scenes,
        bank,
        &manifest.name,
        manifest.seed,
        &manifest.params,
        out_dir,
    )?;
    if regenerated.scene_ids != manifest.scene_ids {
        return Err(Error::invalid(
            "regeneration produced different scene ids; source scenes differ",
        ));
    }
    Ok(regenerated)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bank::build_bank;
    use crate::geom::{Point, PointCloud};
    use crate::sceneio::GtObject;

    fn interior_points(b: &Box3D, n: usize) -> Vec<Point> {
        (0..n)
            .map(|i| {
                let f = (i as f64 + 1.0) / (n as f64 + 2.0) - 0.5;
                let w = b.to_world([f * 0.9 * b.l, f * 0.8 * b.w, f * 0.7 * b.h]);
                Point::new(w[0], w[1], w[2], 0.4)
            })
            .collect()
    }

    fn scene(id: &str, objs: Vec<(&str, Box3D)>) -> SceneRecord {
        let mut cloud = Vec::new();
        let mut annotations = Vec::new();
        for (class, b) in objs {
            let pts = interior_points(&b, 8);
            annotations.push(GtObject {
                class_label: class.to_string(),
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

    fn donor_bank() -> ObjectBank {
        let b = Box3D::new(3.0, -2.0, 0.5, 1.5, 1.0, 1.2, 0.3);
        let s = scene("donor", vec![("Misc", b)]);
        build_bank(&[s], &["Misc".to_string()], 5)
    }

    #[test]
    fn select_scenes_range_boundaries() {
        let near = scene("near", vec![("Misc", Box3D::new(30.0, 39.9, 0.0, 1.0, 1.0, 1.0, 0.0))]);
        let far = scene("far", vec![("Misc", Box3D::new(30.0, 40.3, 0.0, 1.0, 1.0, 1.0, 0.0))]);
        let none = scene("none", vec![("Car", Box3D::new(1.0, 0.0, 0.0, 1.0, 1.0, 1.0, 0.0))]);
        // distances: near ~49.92, far ~50.24
        let ids = select_scenes(&[near, far, none], "Misc", (0.0, 50.0));
        assert_eq!(ids, vec!["near".to_string()]);
    }

    #[test]
    fn synthetic_scene_strips_foreground_and_inserts() {
        let car = Box3D::new(10.0, 0.0, 0.5, 3.0, 1.5, 1.4, 0.2);
        let src = scene("000001", vec![("Car", car)]);
        let bank = donor_bank();
        let (out, rec) = build_synthetic_scene(&src, &bank, 1, &LocationPool::default(), 5, "Anomaly");
        assert_eq!(rec.accepted, 1);
        assert_eq!(out.annotations.len(), 1);
        assert_eq!(out.annotations[0].class_label, "Anomaly");
        // Original car points removed, inserted object's points added.
        let expected = src.cloud.len() - 8 + bank.entries[0].points.len();
        assert_eq!(out.cloud.len(), expected);
        // No Car annotation survives.
        assert!(out.annotations.iter().all(|o| o.class_label != "Car"));
    }

    #[test]
    fn synthetic_scene_empty_bank_is_flagged() {
        let src = scene("000001", vec![]);
        let (out, rec) =
            build_synthetic_scene(&src, &ObjectBank::default(), 1, &LocationPool::default(), 5, "Anomaly");
        assert_eq!(rec.accepted, 0);
        assert!(out.annotations.is_empty());
        assert_eq!(out.cloud, src.cloud);
    }

    #[test]
    fn synthetic_scene_deterministic() {
        let car = Box3D::new(10.0, 0.0, 0.5, 3.0, 1.5, 1.4, 0.2);
        let src = scene("000001", vec![("Car", car)]);
        let bank = donor_bank();
        let a = build_synthetic_scene(&src, &bank, 1, &LocationPool::default(), 5, "Anomaly");
        let b = build_synthetic_scene(&src, &bank, 1, &LocationPool::default(), 5, "Anomaly");
        assert_eq!(a.0, b.0);
        assert_eq!(a.1, b.1);
    }

    #[test]
    fn freeze_and_regenerate() {
        let scenes = vec![
            scene("000001", vec![("Car", Box3D::new(10.0, 0.0, 0.5, 3.0, 1.5, 1.4, 0.2))]),
            scene("000002", vec![("Car", Box3D::new(-12.0, 4.0, 0.5, 3.0, 1.5, 1.4, -0.4))]),
        ];
        let bank = donor_bank();
        let params = BenchParams::default();
        let dir_a = tempfile::tempdir().unwrap();
        let dir_b = tempfile::tempdir().unwrap();
        let manifest = freeze_benchmark(&scenes, &bank, "demo", 42, &params, dir_a.path()).unwrap();
        assert!(!manifest.scene_ids.is_empty());
        assert_eq!(manifest.params.samples_per_scene, 1);

        let loaded = read_manifest(dir_a.path()).unwrap();
        assert_eq!(loaded, manifest);

        let re = regenerate_from_manifest(&loaded, &scenes, &bank, dir_b.path()).unwrap();
        assert_eq!(re, manifest);
        for id in &manifest.scene_ids {
            let a = fs::read(dir_a.path().join("clouds").join(format!("{id}.bin"))).unwrap();
            let b = fs::read(dir_b.path().join("clouds").join(format!("{id}.bin"))).unwrap();
            assert_eq!(a, b);
            let a = fs::read(dir_a.path().join("annotations").join(format!("{id}.json"))).unwrap();
            let b = fs::read(dir_b.path().join("annotations").join(format!("{id}.json"))).unwrap();
            assert_eq!(a, b);
        }
    }

    #[test]
    fn freeze_empty_scene_list() {
        let bank = donor_bank();
        let dir = tempfile::tempdir().unwrap();
        let manifest =
            freeze_benchmark(&[], &bank, "empty", 1, &BenchParams::default(), dir.path()).unwrap();
        assert!(manifest.scene_ids.is_empty());
        assert!(manifest.scenes.is_empty());
    }

    #[test]
    fn regenerate_rejects_wrong_bank() {
        let scenes = vec![scene(
            "000001",
            vec![("Car", Box3D::new(10.0, 0.0, 0.5, 3.0, 1.5, 1.4, 0.2))],
        )];
        let bank = donor_bank();
        let dir = tempfile::tempdir().unwrap();
        let manifest =
            freeze_benchmark(&scenes, &bank, "demo", 42, &BenchParams::default(), dir.path())
                .unwrap();
        let other = ObjectBank::default();
        let dir2 = tempfile::tempdir().unwrap();
        assert!(regenerate_from_manifest(&manifest, &scenes, &other, dir2.path()).is_err());
    }
}
