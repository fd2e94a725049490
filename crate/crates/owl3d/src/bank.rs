//! Object banks and copy-paste augmentation.
//!
//! A bank stores extracted object instances in box-local coordinates
//! (center at the origin, yaw zero) so they can be materialized at any
//! placement. Pasting is collision-checked: any BEV overlap with an
//! existing or already-pasted box rejects the candidate.

use rand::Rng;
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::geom::{bev_iou, points_in_box, resize_object, transform_object, Box3D, PointCloud};
use crate::sceneio::{
    pointcloud_to_bytes, read_pointcloud, write_pointcloud, GtObject, SceneRecord,
};
use crate::seeding::derive_rng;

/// One extracted object: points in the box-local frame plus the canonical
/// local box (origin center, zero yaw, original dims).
#[derive(Debug, Clone, PartialEq)]
pub struct BankEntry {
    pub class_label: String,
    pub box3d: Box3D,
    pub points: PointCloud,
    pub source_scene: String,
    pub num_points: usize,
    pub resized: bool,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ObjectBank {
    pub entries: Vec<BankEntry>,
}

/// Candidate dimensions for multi-size mixing.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SizePool {
    pub dims: Vec<[f64; 3]>,
}

impl SizePool {
    pub fn validate(&self) -> Result<()> {
        if self
            .dims
            .iter()
            .any(|d| d.iter().any(|v| !v.is_finite() || *v <= 0.0))
        {
            return Err(Error::invalid("size pool dims must be positive and finite"));
        }
        Ok(())
    }

    /// Box dimensions of every `class` annotation across the scenes.
    pub fn harvest(scenes: &[SceneRecord], class: &str) -> SizePool {
        let dims = scenes
            .iter()
            .flat_map(|s| &s.annotations)
            .filter(|o| o.class_label == class)
            .map(|o| o.box3d.dims())
            .collect();
        SizePool { dims }
    }
}

/// A candidate pose for a pasted object.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Placement {
    pub center: [f64; 3],
    pub yaw: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct LocationPool {
    pub placements: Vec<Placement>,
}

impl LocationPool {
    pub fn validate(&self) -> Result<()> {
        let ok = self.placements.iter().all(|p| {
            p.center.iter().all(|v| v.is_finite()) && p.yaw.is_finite()
        });
        if ok {
            Ok(())
        } else {
            Err(Error::invalid("location pool must be finite"))
        }
    }

    /// Placements taken from every `class` annotation across the scenes
    /// (the donor's center and yaw).
    pub fn harvest(scenes: &[SceneRecord], classes: &[String]) -> LocationPool {
        let placements = scenes
            .iter()
            .flat_map(|s| &s.annotations)
            .filter(|o| classes.iter().any(|c| c == &o.class_label))
            .map(|o| Placement {
                center: o.box3d.center(),
                yaw: o.box3d.yaw,
            })
            .collect();
        LocationPool { placements }
    }
}

impl BankEntry {
    /// Materialize the entry at a placement: world-frame points plus the
    /// placed box.
    pub fn materialize(&self, placement: &Placement) -> (PointCloud, Box3D) {
        transform_object(&self.points, &self.box3d, placement.center, placement.yaw)
    }
}

impl ObjectBank {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Content hash over every entry, stable across processes; recorded in
    /// benchmark manifests to pin the bank a benchmark was generated from.
    pub fn content_hash(&self) -> String {
        let mut hasher = Sha256::new();
        for e in &self.entries {
            hasher.update(e.class_label.as_bytes());
            hasher.update([0]);
            hasher.update(e.source_scene.as_bytes());
            hasher.update([0]);
            for v in [
                e.box3d.cx, e.box3d.cy, e.box3d.cz, e.box3d.l, e.box3d.w, e.box3d.h, e.box3d.yaw,
            ] {
                hasher.update(v.to_le_bytes());
            }
            hasher.update((e.num_points as u64).to_le_bytes());
            hasher.update([e.resized as u8]);
            hasher.update(pointcloud_to_bytes(&e.points));
        }
        let digest = hasher.finalize();
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let mut index = Vec::with_capacity(self.entries.len());
        for (i, e) in self.entries.iter().enumerate() {
            let blob = format!("entry_{i:05}.bin");
            write_pointcloud(&dir.join(&blob), &e.points)?;
            index.push(BankIndexEntry {
                class: e.class_label.clone(),
                box3d: e.box3d,
                source_scene: e.source_scene.clone(),
                num_points: e.num_points,
                resized: e.resized,
                blob,
            });
        }
        let index_path = dir.join("index.json");
        let mut text = serde_json::to_string_pretty(&BankIndex { entries: index })
            .expect("bank index serialization");
        text.push('\n');
        fs::write(&index_path, text).map_err(|e| Error::io(&index_path, e))
    }

    pub fn load(dir: &Path) -> Result<ObjectBank> {
        let index_path = dir.join("index.json");
        let text = fs::read_to_string(&index_path).map_err(|e| Error::io(&index_path, e))?;
        let index: BankIndex = serde_json::from_str(&text)
            .map_err(|e| Error::format(format!("bank index: {e}")))?;
        let mut entries = Vec::with_capacity(index.entries.len());
        for ie in index.entries {
            let (points, _) = read_pointcloud(&dir.join(&ie.blob))?;
            entries.push(BankEntry {
                class_label: ie.class,
                box3d: ie.box3d,
                points,
                source_scene: ie.source_scene,
                num_points: ie.num_points,
                resized: ie.resized,
            });
        }
        Ok(ObjectBank { entries })
    }
}

#[derive(Serialize, Deserialize)]
struct BankIndex {
    entries: Vec<BankIndexEntry>,
}

#[derive(Serialize, Deserialize)]
struct BankIndexEntry {
    class: String,
    #[serde(rename = "box")]
    box3d: Box3D,
    source_scene: String,
    num_points: usize,
    resized: bool,
    blob: String,
}

/// Extract every requested-class object with at least `min_points` points
/// inside its box. Points are re-expressed in the box-local frame.
pub fn build_bank(scenes: &[SceneRecord], classes: &[String], min_points: usize) -> ObjectBank {
    let mut entries = Vec::new();
    for scene in scenes {
        for obj in &scene.annotations {
            if !classes.iter().any(|c| c == &obj.class_label) {
                continue;
            }
            let idx = points_in_box(&scene.cloud, &obj.box3d);
            if idx.len() < min_points {
                continue;
            }
            let local_points = idx
                .iter()
                .map(|&i| {
                    let p = scene.cloud.points[i];
                    let q = obj.box3d.to_local(p.xyz());
                    crate::geom::Point::new(q[0], q[1], q[2], p.intensity)
                })
                .collect();
            entries.push(BankEntry {
                class_label: obj.class_label.clone(),
                box3d: Box3D::new(0.0, 0.0, 0.0, obj.box3d.l, obj.box3d.w, obj.box3d.h, 0.0),
                points: PointCloud::new(local_points),
                source_scene: scene.scene_id.clone(),
                num_points: idx.len(),
                resized: false,
            });
        }
    }
    ObjectBank { entries }
}

/// Average RGB channels into a unit-interval intensity.
pub fn rgb_to_intensity(r: f64, g: f64, b: f64) -> Result<f64> {
    for (name, v) in [("r", r), ("g", g), ("b", b)] {
        if !v.is_finite() || !(0.0..=255.0).contains(&v) {
            return Err(Error::invalid(format!(
                "channel {name}={v} outside [0, 255]"
            )));
        }
    }
    Ok(((r + g + b) / 3.0) / 255.0)
}

/// Alternate original and resized entries by index parity: even entries
/// pass through untouched, odd entries are resized to dims drawn uniformly
/// from the pool.
pub fn multi_size_mix(bank: &ObjectBank, pool: &SizePool, seed: u64) -> Result<ObjectBank> {
    pool.validate()?;
    if pool.dims.is_empty() {
        return Err(Error::invalid("multi-size mix requires a non-empty size pool"));
    }
    let mut rng = derive_rng(seed, "multi-size-mix");
    let mut entries = Vec::with_capacity(bank.entries.len());
    for (i, entry) in bank.entries.iter().enumerate() {
        if i % 2 == 0 {
            entries.push(entry.clone());
        } else {
            let dims = pool.dims[rng.gen_range(0..pool.dims.len())];
            let (points, box3d) = resize_object(&entry.points, &entry.box3d, dims)?;
            entries.push(BankEntry {
                class_label: entry.class_label.clone(),
                box3d,
                points,
                source_scene: entry.source_scene.clone(),
                num_points: entry.num_points,
                resized: true,
            });
        }
    }
    Ok(ObjectBank { entries })
}

/// Result of a paste pass.
#[derive(Debug, Clone)]
pub struct PasteOutcome {
    pub scene: SceneRecord,
    pub accepted: usize,
    pub rejected: usize,
    /// Bank index of each accepted entry, in paste order.
    pub inserted_from: Vec<usize>,
}

/// Draw `count` distinct indices from `0..n`, uniformly without
/// replacement (partial Fisher-Yates).
fn draw_without_replacement(n: usize, count: usize, rng: &mut ChaCha20Rng) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..n).collect();
    let take = count.min(n);
    for i in 0..take {
        let j = rng.gen_range(i..n);
        idx.swap(i, j);
    }
    idx.truncate(take);
    idx
}

/// Core paste loop shared by training augmentation and benchmark
/// synthesis. For each selected entry, placements are drawn at random from
/// each pool in order until one is accepted or every pool is exhausted; a
/// drawn placement is consumed whether or not it was accepted.
pub(crate) fn paste_entries(
    cloud: &mut PointCloud,
    annotations: &mut Vec<GtObject>,
    bank: &ObjectBank,
    entry_indices: &[usize],
    pools: &mut [Vec<Placement>],
    class_label: &str,
    rng: &mut ChaCha20Rng,
) -> (usize, usize, Vec<usize>) {
    let mut accepted = 0;
    let mut rejected = 0;
    let mut inserted_from = Vec::new();
    for &ei in entry_indices {
        let entry = &bank.entries[ei];
        let mut placed = false;
        'pools: for pool in pools.iter_mut() {
            while !pool.is_empty() {
                let pick = rng.gen_range(0..pool.len());
                let placement = pool.swap_remove(pick);
                let (points, placed_box) = entry.materialize(&placement);
                let collides = annotations
                    .iter()
                    .any(|o| bev_iou(&o.box3d, &placed_box) > 0.0);
                if collides {
                    rejected += 1;
                    continue;
                }
                cloud.points.extend_from_slice(&points.points);
                annotations.push(GtObject {
                    class_label: class_label.to_string(),
                    box3d: placed_box,
                    num_points: entry.num_points,
                });
                inserted_from.push(ei);
                accepted += 1;
                placed = true;
                break 'pools;
            }
        }
        if !placed && pools.iter().all(|p| p.is_empty()) {
            break; // nothing left to try for the remaining entries
        }
    }
    (accepted, rejected, inserted_from)
}

/// Copy-paste up to `sample_number` bank objects into the scene. Entries
/// are drawn uniformly without replacement; the RNG stream is keyed by
/// (seed, scene id) so scenes can be processed in any order.
pub fn paste_samples(
    scene: &SceneRecord,
    bank: &ObjectBank,
    class_label: &str,
    sample_number: usize,
    locations: &LocationPool,
    seed: u64,
) -> PasteOutcome {
    let mut rng = derive_rng(seed, &format!("paste/{}", scene.scene_id));
    let entry_indices = draw_without_replacement(bank.len(), sample_number, &mut rng);
    let mut cloud = scene.cloud.clone();
    let mut annotations = scene.annotations.clone();
    let mut pools = [locations.placements.clone()];
    let (accepted, rejected, inserted_from) = paste_entries(
        &mut cloud,
        &mut annotations,
        bank,
        &entry_indices,
        &mut pools,
        class_label,
        &mut rng,
    );
    PasteOutcome {
        scene: SceneRecord {
            scene_id: scene.scene_id.clone(),
            cloud,
            annotations,
        },
        accepted,
        rejected,
        inserted_from,
    }
}
