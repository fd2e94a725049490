//! Scene, annotation, and detection I/O.
//!
//! Canonical frame: LiDAR, x forward, y left, z up. KITTI camera-frame
//! labels are converted at the boundary; everything downstream works in
//! the canonical frame only.
//!
//! Formats:
//! - point clouds: little-endian f32 quads (x, y, z, intensity), 16 bytes
//!   per point;
//! - annotations: one JSON document per scene;
//! - detections: JSON Lines, one scene per line.

use serde::{Deserialize, Serialize};
use serde_json::Value;
use std::f64::consts::PI;
use std::fs;
use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};
use crate::geom::{normalize_yaw, points_in_box, Box3D, Point, PointCloud};

/// An annotated ground-truth object.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GtObject {
    #[serde(rename = "class")]
    pub class_label: String,
    #[serde(rename = "box")]
    pub box3d: Box3D,
    pub num_points: usize,
}

/// A full scene: cloud plus annotations.
#[derive(Debug, Clone, PartialEq)]
pub struct SceneRecord {
    pub scene_id: String,
    pub cloud: PointCloud,
    pub annotations: Vec<GtObject>,
}

/// One detector output.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub conf: f64,
    pub objectness: Option<f64>,
    pub scores: Vec<f64>,
    #[serde(rename = "box")]
    pub box3d: Box3D,
}

/// Whether `Detection::scores` holds raw logits or probabilities.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScoreSpace {
    Logit,
    Prob,
}

/// All detections of one scene.
#[derive(Debug, Clone, PartialEq)]
pub struct SceneDetections {
    pub scene_id: String,
    pub score_space: ScoreSpace,
    pub detections: Vec<Detection>,
}

/// Counters for values repaired or dropped while reading a cloud.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct ReadStats {
    pub dropped_nonfinite: usize,
    pub clamped_intensity: usize,
}

const POINT_BYTES: usize = 16;

/// Decode a velodyne-format buffer. Non-finite points are dropped and
/// counted; intensities are clamped into [0, 1] and counted.
pub fn read_pointcloud_bytes(bytes: &[u8]) -> Result<(PointCloud, ReadStats)> {
    if bytes.len() % POINT_BYTES != 0 {
        return Err(Error::format(format!(
            "point cloud byte length {} is not a multiple of {}",
            bytes.len(),
            POINT_BYTES
        )));
    }
    let mut stats = ReadStats::default();
    let mut points = Vec::with_capacity(bytes.len() / POINT_BYTES);
    for rec in bytes.chunks_exact(POINT_BYTES) {
        let f = |i: usize| f32::from_le_bytes([rec[i], rec[i + 1], rec[i + 2], rec[i + 3]]);
        let (x, y, z, mut intensity) = (f(0), f(4), f(8), f(12));
        if !(x.is_finite() && y.is_finite() && z.is_finite() && intensity.is_finite()) {
            stats.dropped_nonfinite += 1;
            continue;
        }
        if !(0.0..=1.0).contains(&intensity) {
            intensity = intensity.clamp(0.0, 1.0);
            stats.clamped_intensity += 1;
        }
        points.push(Point::new(x as f64, y as f64, z as f64, intensity as f64));
    }
    Ok((PointCloud::new(points), stats))
}

pub fn read_pointcloud(path: &Path) -> Result<(PointCloud, ReadStats)> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    read_pointcloud_bytes(&bytes).map_err(|e| match e {
        Error::Format(msg) => Error::format(format!("{}: {msg}", path.display())),
        other => other,
    })
}

pub fn pointcloud_to_bytes(pc: &PointCloud) -> Vec<u8> {
    let mut out = Vec::with_capacity(pc.len() * POINT_BYTES);
    for p in &pc.points {
        for v in [p.x, p.y, p.z, p.intensity] {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    out
}

pub fn write_pointcloud(path: &Path, pc: &PointCloud) -> Result<()> {
    fs::write(path, pointcloud_to_bytes(pc)).map_err(|e| Error::io(path, e))
}

/// KITTI calibration: rectification rotation and velodyne-to-camera
/// extrinsics.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Calib {
    pub r0_rect: [[f64; 3]; 3],
    /// Row-major 3x4: rotation in columns 0..3, translation in column 3.
    pub tr_velo_to_cam: [[f64; 4]; 3],
}

impl Calib {
    pub fn identity() -> Self {
        Calib {
            r0_rect: [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]],
            tr_velo_to_cam: [
                [1.0, 0.0, 0.0, 0.0],
                [0.0, 1.0, 0.0, 0.0],
                [0.0, 0.0, 1.0, 0.0],
            ],
        }
    }

    fn rotation_part(&self) -> [[f64; 3]; 3] {
        let t = &self.tr_velo_to_cam;
        [
            [t[0][0], t[0][1], t[0][2]],
            [t[1][0], t[1][1], t[1][2]],
            [t[2][0], t[2][1], t[2][2]],
        ]
    }

    fn translation_part(&self) -> [f64; 3] {
        let t = &self.tr_velo_to_cam;
        [t[0][3], t[1][3], t[2][3]]
    }

    pub fn validate(&self) -> Result<()> {
        let finite = self
            .r0_rect
            .iter()
            .flatten()
            .chain(self.tr_velo_to_cam.iter().flatten())
            .all(|v| v.is_finite());
        if !finite {
            return Err(Error::invalid("calibration matrices must be finite"));
        }
        for (name, m) in [("R0_rect", self.r0_rect), ("Tr_velo_to_cam", self.rotation_part())] {
            if !is_orthonormal(&m, 1e-3) {
                return Err(Error::invalid(format!(
                    "{name} rotation part is not orthonormal within 1e-3"
                )));
            }
        }
        Ok(())
    }
}

fn is_orthonormal(m: &[[f64; 3]; 3], tol: f64) -> bool {
    for i in 0..3 {
        for j in 0..3 {
            let dot: f64 = (0..3).map(|k| m[k][i] * m[k][j]).sum();
            let expected = if i == j { 1.0 } else { 0.0 };
            if (dot - expected).abs() > tol {
                return false;
            }
        }
    }
    true
}

fn mat_vec(m: &[[f64; 3]; 3], v: [f64; 3]) -> [f64; 3] {
    [
        m[0][0] * v[0] + m[0][1] * v[1] + m[0][2] * v[2],
        m[1][0] * v[0] + m[1][1] * v[1] + m[1][2] * v[2],
        m[2][0] * v[0] + m[2][1] * v[1] + m[2][2] * v[2],
    ]
}

fn invert3(m: &[[f64; 3]; 3]) -> Result<[[f64; 3]; 3]> {
    let det = m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1])
        - m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0])
        + m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0]);
    if det.abs() < 1e-12 {
        return Err(Error::invalid("singular calibration matrix"));
    }
    let inv_det = 1.0 / det;
    let mut out = [[0.0; 3]; 3];
    out[0][0] = (m[1][1] * m[2][2] - m[1][2] * m[2][1]) * inv_det;
    out[0][1] = (m[0][2] * m[2][1] - m[0][1] * m[2][2]) * inv_det;
    out[0][2] = (m[0][1] * m[1][2] - m[0][2] * m[1][1]) * inv_det;
    out[1][0] = (m[1][2] * m[2][0] - m[1][0] * m[2][2]) * inv_det;
    out[1][1] = (m[0][0] * m[2][2] - m[0][2] * m[2][0]) * inv_det;
    out[1][2] = (m[0][2] * m[1][0] - m[0][0] * m[1][2]) * inv_det;
    out[2][0] = (m[1][0] * m[2][1] - m[1][1] * m[2][0]) * inv_det;
    out[2][1] = (m[0][1] * m[2][0] - m[0][0] * m[2][1]) * inv_det;
    out[2][2] = (m[0][0] * m[1][1] - m[0][1] * m[1][0]) * inv_det;
    Ok(out)
}

/// Parse a KITTI calib file; `R0_rect` and `Tr_velo_to_cam` lines are
/// required, anything else is ignored.
pub fn parse_calib(text: &str) -> Result<Calib> {
    let mut r0: Option<Vec<f64>> = None;
    let mut tr: Option<Vec<f64>> = None;
    for line in text.lines() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let Some((key, rest)) = line.split_once(':') else {
            continue;
        };
        let values: std::result::Result<Vec<f64>, _> =
            rest.split_whitespace().map(|t| t.parse::<f64>()).collect();
        let values = values.map_err(|_| {
            Error::format(format!("calib entry '{key}' has a non-numeric value"))
        })?;
        match key.trim() {
            "R0_rect" | "R_rect" => r0 = Some(values),
            "Tr_velo_to_cam" | "Tr_velo_cam" => tr = Some(values),
            _ => {}
        }
    }
    let r0 = r0.ok_or_else(|| Error::format("calib file is missing R0_rect"))?;
    let tr = tr.ok_or_else(|| Error::format("calib file is missing Tr_velo_to_cam"))?;
    if r0.len() != 9 {
        return Err(Error::format(format!(
            "R0_rect needs 9 values, got {}",
            r0.len()
        )));
    }
    if tr.len() != 12 {
        return Err(Error::format(format!(
            "Tr_velo_to_cam needs 12 values, got {}",
            tr.len()
        )));
    }
    let calib = Calib {
        r0_rect: [
            [r0[0], r0[1], r0[2]],
            [r0[3], r0[4], r0[5]],
            [r0[6], r0[7], r0[8]],
        ],
        tr_velo_to_cam: [
            [tr[0], tr[1], tr[2], tr[3]],
            [tr[4], tr[5], tr[6], tr[7]],
            [tr[8], tr[9], tr[10], tr[11]],
        ],
    };
    calib.validate()?;
    Ok(calib)
}

pub fn read_calib(path: &Path) -> Result<Calib> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_calib(&text)
}

/// A KITTI-style camera-frame box: `(x, y, z)` is the bottom center in the
/// rectified camera frame, `ry` the rotation about the camera y axis.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CameraBox {
    pub h: f64,
    pub w: f64,
    pub l: f64,
    pub x: f64,
    pub y: f64,
    pub z: f64,
    pub ry: f64,
}

/// Map a rectified-camera-frame box to the canonical LiDAR frame: invert
/// rectification, invert the velo-to-cam extrinsics, lift the bottom
/// center by h/2, and convert the rotation (yaw = -ry - pi/2).
pub fn camera_box_to_lidar(cam: &CameraBox, calib: &Calib) -> Result<Box3D> {
    let r0_inv = invert3(&calib.r0_rect)?;
    let rot_inv = invert3(&calib.rotation_part())?;
    let t = calib.translation_part();

    let p_ref = mat_vec(&r0_inv, [cam.x, cam.y, cam.z]);
    let p_velo = mat_vec(
        &rot_inv,
        [p_ref[0] - t[0], p_ref[1] - t[1], p_ref[2] - t[2]],
    );
    Ok(Box3D::new(
        p_velo[0],
        p_velo[1],
        p_velo[2] + cam.h / 2.0,
        cam.l,
        cam.w,
        cam.h,
        -cam.ry - PI / 2.0,
    ))
}

/// Inverse of [`camera_box_to_lidar`]; used when emitting KITTI-format
/// labels.
pub fn lidar_box_to_camera(b: &Box3D, calib: &Calib) -> Result<CameraBox> {
    b.validate()?;
    let bottom = [b.cx, b.cy, b.cz - b.h / 2.0];
    let rot = calib.rotation_part();
    let t = calib.translation_part();
    let p_ref = [
        rot[0][0] * bottom[0] + rot[0][1] * bottom[1] + rot[0][2] * bottom[2] + t[0],
        rot[1][0] * bottom[0] + rot[1][1] * bottom[1] + rot[1][2] * bottom[2] + t[1],
        rot[2][0] * bottom[0] + rot[2][1] * bottom[1] + rot[2][2] * bottom[2] + t[2],
    ];
    let p_cam = mat_vec(&calib.r0_rect, p_ref);
    Ok(CameraBox {
        h: b.h,
        w: b.w,
        l: b.l,
        x: p_cam[0],
        y: p_cam[1],
        z: p_cam[2],
        ry: normalize_yaw(-b.yaw - PI / 2.0),
    })
}

const KITTI_LABEL_FIELDS: usize = 15;

/// Parse KITTI label text into ground-truth objects in the LiDAR frame.
/// `DontCare` lines are skipped; `num_points` is left at zero for the
/// ingester to fill.
pub fn parse_kitti_labels(text: &str, calib: &Calib) -> Result<Vec<GtObject>> {
    let mut out = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.len() != KITTI_LABEL_FIELDS {
            return Err(Error::format(format!(
                "label line {}: expected {} fields, got {}",
                lineno + 1,
                KITTI_LABEL_FIELDS,
                fields.len()
            )));
        }
        let class = fields[0];
        if class == "DontCare" {
            continue;
        }
        let num = |idx: usize| -> Result<f64> {
            fields[idx].parse::<f64>().map_err(|_| {
                Error::format(format!(
                    "label line {}: field {} is not a number",
                    lineno + 1,
                    idx + 1
                ))
            })
        };
        let cam = CameraBox {
            h: num(8)?,
            w: num(9)?,
            l: num(10)?,
            x: num(11)?,
            y: num(12)?,
            z: num(13)?,
            ry: num(14)?,
        };
        let box3d = camera_box_to_lidar(&cam, calib)?;
        out.push(GtObject {
            class_label: class.to_string(),
            box3d,
            num_points: 0,
        });
    }
    Ok(out)
}

/// Render objects back into KITTI label lines (truncation, occlusion,
/// alpha, and the 2D bbox are zeroed).
pub fn format_kitti_labels(objects: &[GtObject], calib: &Calib) -> Result<String> {
    let mut out = String::new();
    for obj in objects {
        let cam = lidar_box_to_camera(&obj.box3d, calib)?;
        out.push_str(&format!(
            "{} 0.00 0 0.00 0.00 0.00 0.00 0.00 {:.6} {:.6} {:.6} {:.6} {:.6} {:.6} {:.6}\n",
            obj.class_label, cam.h, cam.w, cam.l, cam.x, cam.y, cam.z, cam.ry
        ));
    }
    Ok(out)
}

// --- canonical JSON codecs -------------------------------------------------

fn expect_object<'v>(v: &'v Value, path: &str) -> Result<&'v serde_json::Map<String, Value>> {
    v.as_object()
        .ok_or_else(|| Error::schema(path, "expected a JSON object"))
}

fn expect_key<'v>(
    obj: &'v serde_json::Map<String, Value>,
    path: &str,
    key: &str,
) -> Result<&'v Value> {
    obj.get(key).ok_or_else(|| {
        Error::schema(
            if path.is_empty() {
                key.to_string()
            } else {
                format!("{path}.{key}")
            },
            "missing required key",
        )
    })
}

fn expect_str(v: &Value, path: &str) -> Result<String> {
    v.as_str()
        .map(str::to_string)
        .ok_or_else(|| Error::schema(path, "expected a string"))
}

fn expect_f64(v: &Value, path: &str) -> Result<f64> {
    let x = v
        .as_f64()
        .ok_or_else(|| Error::schema(path, "expected a number"))?;
    if !x.is_finite() {
        return Err(Error::schema(path, "expected a finite number"));
    }
    Ok(x)
}

fn expect_usize(v: &Value, path: &str) -> Result<usize> {
    v.as_u64()
        .map(|x| x as usize)
        .ok_or_else(|| Error::schema(path, "expected a non-negative integer"))
}

fn expect_array<'v>(v: &'v Value, path: &str) -> Result<&'v Vec<Value>> {
    v.as_array()
        .ok_or_else(|| Error::schema(path, "expected an array"))
}

fn parse_box(v: &Value, path: &str) -> Result<Box3D> {
    let obj = expect_object(v, path)?;
    let field = |key: &str| -> Result<f64> {
        expect_f64(expect_key(obj, path, key)?, &format!("{path}.{key}"))
    };
    let b = Box3D::new(
        field("cx")?,
        field("cy")?,
        field("cz")?,
        field("l")?,
        field("w")?,
        field("h")?,
        field("yaw")?,
    );
    b.validate()
        .map_err(|e| Error::schema(path, e.to_string()))?;
    Ok(b)
}

/// Scene annotations as stored on disk (the cloud lives in a sibling
/// `.bin`).
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SceneAnnotations {
    pub scene_id: String,
    pub objects: Vec<GtObject>,
}

pub fn parse_annotations(text: &str) -> Result<SceneAnnotations> {
    let value: Value = serde_json::from_str(text)
        .map_err(|e| Error::format(format!("annotation JSON: {e}")))?;
    let root = expect_object(&value, "")?;
    let scene_id = expect_str(expect_key(root, "", "scene_id")?, "scene_id")?;
    if scene_id.is_empty() {
        return Err(Error::schema("scene_id", "must be non-empty"));
    }
    let objects_v = expect_array(expect_key(root, "", "objects")?, "objects")?;
    let mut objects = Vec::with_capacity(objects_v.len());
    for (i, ov) in objects_v.iter().enumerate() {
        let path = format!("objects[{i}]");
        let obj = expect_object(ov, &path)?;
        let class =
            expect_str(expect_key(obj, &path, "class")?, &format!("{path}.class"))?;
        if class.is_empty() {
            return Err(Error::schema(format!("{path}.class"), "must be non-empty"));
        }
        let box3d = parse_box(expect_key(obj, &path, "box")?, &format!("{path}.box"))?;
        let num_points = expect_usize(
            expect_key(obj, &path, "num_points")?,
            &format!("{path}.num_points"),
        )?;
        objects.push(GtObject {
            class_label: class,
            box3d,
            num_points,
        });
    }
    Ok(SceneAnnotations { scene_id, objects })
}

pub fn read_annotations(path: &Path) -> Result<SceneAnnotations> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_annotations(&text)
}

pub fn annotations_to_string(ann: &SceneAnnotations) -> String {
    let mut s = serde_json::to_string_pretty(ann).expect("annotation serialization");
    s.push('\n');
    s
}

pub fn write_annotations(path: &Path, ann: &SceneAnnotations) -> Result<()> {
    fs::write(path, annotations_to_string(ann)).map_err(|e| Error::io(path, e))
}

fn parse_detection_line(line: &str, lineno: usize, expected_k: usize) -> Result<SceneDetections> {
    let prefix = format!("line {lineno}");
    let value: Value = serde_json::from_str(line)
        .map_err(|e| Error::format(format!("detections {prefix}: {e}")))?;
    let root = expect_object(&value, &prefix)?;
    let scene_id = expect_str(
        expect_key(root, &prefix, "scene_id")?,
        &format!("{prefix}.scene_id"),
    )?;
    let score_space = match root.get("score_space") {
        None => ScoreSpace::Logit,
        Some(v) => match expect_str(v, &format!("{prefix}.score_space"))?.as_str() {
            "logit" => ScoreSpace::Logit,
            "prob" => ScoreSpace::Prob,
            other => {
                return Err(Error::schema(
                    format!("{prefix}.score_space"),
                    format!("expected 'logit' or 'prob', got '{other}'"),
                ))
            }
        },
    };
    let dets_v = expect_array(
        expect_key(root, &prefix, "detections")?,
        &format!("{prefix}.detections"),
    )?;
    let mut detections = Vec::with_capacity(dets_v.len());
    for (i, dv) in dets_v.iter().enumerate() {
        let path = format!("{prefix}.detections[{i}]");
        let obj = expect_object(dv, &path)?;
        let conf = expect_f64(expect_key(obj, &path, "conf")?, &format!("{path}.conf"))?;
        let objectness = match obj.get("objectness") {
            None | Some(Value::Null) => None,
            Some(v) => Some(expect_f64(v, &format!("{path}.objectness"))?),
        };
        let scores_v = expect_array(
            expect_key(obj, &path, "scores")?,
            &format!("{path}.scores"),
        )?;
        if scores_v.len() != expected_k {
            return Err(Error::schema(
                format!("{path}.scores"),
                format!(
                    "expected {} scores (class catalog size), got {}",
                    expected_k,
                    scores_v.len()
                ),
            ));
        }
        let mut scores = Vec::with_capacity(scores_v.len());
        for (j, sv) in scores_v.iter().enumerate() {
            scores.push(expect_f64(sv, &format!("{path}.scores[{j}]"))?);
        }
        let box3d = parse_box(expect_key(obj, &path, "box")?, &format!("{path}.box"))?;
        detections.push(Detection {
            conf,
            objectness,
            scores,
            box3d,
        });
    }
    Ok(SceneDetections {
        scene_id,
        score_space,
        detections,
    })
}

/// Read a JSON Lines detections file; `expected_k` is the class-catalog
/// size every score vector must match.
pub fn parse_detections(text: &str, expected_k: usize) -> Result<Vec<SceneDetections>> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        out.push(parse_detection_line(line, i + 1, expected_k)?);
    }
    Ok(out)
}

pub fn read_detections(path: &Path, expected_k: usize) -> Result<Vec<SceneDetections>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_detections(&text, expected_k)
}

pub fn detections_to_string(scenes: &[SceneDetections]) -> String {
    let mut out = String::new();
    for scene in scenes {
        let line = serde_json::json!({
            "scene_id": scene.scene_id,
            "score_space": match scene.score_space {
                ScoreSpace::Logit => "logit",
                ScoreSpace::Prob => "prob",
            },
            "detections": scene.detections,
        });
        out.push_str(&serde_json::to_string(&line).expect("detection serialization"));
        out.push('\n');
    }
    out
}

pub fn write_detections(path: &Path, scenes: &[SceneDetections]) -> Result<()> {
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(detections_to_string(scenes).as_bytes())
        .map_err(|e| Error::io(path, e))
}

// --- canonical scene directories -------------------------------------------

/// Layout of a canonical scene directory: `clouds/<id>.bin` plus
/// `annotations/<id>.json`.
pub fn scene_paths(dir: &Path, scene_id: &str) -> (std::path::PathBuf, std::path::PathBuf) {
    (
        dir.join("clouds").join(format!("{scene_id}.bin")),
        dir.join("annotations").join(format!("{scene_id}.json")),
    )
}

pub fn write_scene(dir: &Path, scene: &SceneRecord) -> Result<()> {
    let (cloud_path, ann_path) = scene_paths(dir, &scene.scene_id);
    fs::create_dir_all(cloud_path.parent().unwrap()).map_err(|e| Error::io(dir, e))?;
    fs::create_dir_all(ann_path.parent().unwrap()).map_err(|e| Error::io(dir, e))?;
    write_pointcloud(&cloud_path, &scene.cloud)?;
    write_annotations(
        &ann_path,
        &SceneAnnotations {
            scene_id: scene.scene_id.clone(),
            objects: scene.annotations.clone(),
        },
    )
}

pub fn read_scene(dir: &Path, scene_id: &str) -> Result<SceneRecord> {
    let (cloud_path, ann_path) = scene_paths(dir, scene_id);
    let (cloud, _) = read_pointcloud(&cloud_path)?;
    let ann = read_annotations(&ann_path)?;
    if ann.scene_id != scene_id {
        return Err(Error::format(format!(
            "annotation file for '{scene_id}' declares scene_id '{}'",
            ann.scene_id
        )));
    }
    Ok(SceneRecord {
        scene_id: ann.scene_id,
        cloud,
        annotations: ann.objects,
    })
}

/// Scene ids present in a canonical directory, sorted.
pub fn list_scene_ids(dir: &Path) -> Result<Vec<String>> {
    let ann_dir = dir.join("annotations");
    let mut ids = Vec::new();
    let entries = fs::read_dir(&ann_dir).map_err(|e| Error::io(&ann_dir, e))?;
    for entry in entries {
        let entry = entry.map_err(|e| Error::io(&ann_dir, e))?;
        let name = entry.file_name();
        let name = name.to_string_lossy();
        if let Some(id) = name.strip_suffix(".json") {
            ids.push(id.to_string());
        }
    }
    ids.sort();
    Ok(ids)
}

pub fn read_scene_dir(dir: &Path) -> Result<Vec<SceneRecord>> {
    list_scene_ids(dir)?
        .iter()
        .map(|id| read_scene(dir, id))
        .collect()
}

/// Ingest one KITTI-format scene: velodyne binary, label text, and calib
/// text. Per-object point counts are filled from the cloud.
pub fn ingest_kitti_scene(
    scene_id: &str,
    velodyne: &Path,
    labels: &Path,
    calib: &Path,
) -> Result<SceneRecord> {
    let (cloud, _) = read_pointcloud(velodyne)?;
    let calib = read_calib(calib)?;
    let text = fs::read_to_string(labels).map_err(|e| Error::io(labels, e))?;
    let mut annotations = parse_kitti_labels(&text, &calib)?;
    for obj in &mut annotations {
        obj.num_points = points_in_box(&cloud, &obj.box3d).len();
    }
    Ok(SceneRecord {
        scene_id: scene_id.to_string(),
        cloud,
        annotations,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn pointcloud_roundtrip_single_record() {
        let mut bytes = Vec::new();
        for v in [1.0f32, 2.0, 3.0, 0.5] {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        let (pc, stats) = read_pointcloud_bytes(&bytes).unwrap();
        assert_eq!(pc.len(), 1);
        assert_eq!(pc.points[0], Point::new(1.0, 2.0, 3.0, 0.5));
        assert_eq!(stats, ReadStats::default());
        assert_eq!(pointcloud_to_bytes(&pc), bytes);
    }

    #[test]
    fn pointcloud_empty_and_bad_sizes() {
        let (pc, _) = read_pointcloud_bytes(&[]).unwrap();
        assert!(pc.is_empty());
        assert!(read_pointcloud_bytes(&[0u8; 17]).is_err());
    }

    #[test]
    fn pointcloud_drops_nonfinite_and_clamps_intensity() {
        let mut bytes = Vec::new();
        for v in [f32::NAN, 0.0, 0.0, 0.5] {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        for v in [1.0f32, 1.0, 1.0, 2.0] {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        let (pc, stats) = read_pointcloud_bytes(&bytes).unwrap();
        assert_eq!(pc.len(), 1);
        assert_eq!(stats.dropped_nonfinite, 1);
        assert_eq!(stats.clamped_intensity, 1);
        assert_eq!(pc.points[0].intensity, 1.0);
    }

    #[test]
    fn identity_calib_roundtrip() {
        let calib = Calib::identity();
        let b = Box3D::new(5.0, -2.0, 1.0, 4.0, 1.8, 1.6, 0.4);
        let cam = lidar_box_to_camera(&b, &calib).unwrap();
        let back = camera_box_to_lidar(&cam, &calib).unwrap();
        assert_abs_diff_eq!(back.cx, b.cx, epsilon = 1e-9);
        assert_abs_diff_eq!(back.cy, b.cy, epsilon = 1e-9);
        assert_abs_diff_eq!(back.cz, b.cz, epsilon = 1e-9);
        assert_abs_diff_eq!(back.yaw, b.yaw, epsilon = 1e-9);
    }

    #[test]
    fn yaw_convention() {
        let calib = Calib::identity();
        let cam = CameraBox {
            h: 1.0,
            w: 1.0,
            l: 1.0,
            x: 0.0,
            y: 0.0,
            z: 0.0,
            ry: -PI / 2.0,
        };
        let b = camera_box_to_lidar(&cam, &calib).unwrap();
        assert_abs_diff_eq!(b.yaw, 0.0, epsilon = 1e-12);
    }

    #[test]
    fn label_parsing() {
        let calib = Calib::identity();
        assert!(parse_kitti_labels("", &calib).unwrap().is_empty());

        let line = "Misc 0.0 0 1.5 0 0 50 50 1.6 1.7 3.2 1.0 2.0 10.0 -1.57";
        let objs = parse_kitti_labels(line, &calib).unwrap();
        assert_eq!(objs.len(), 1);
        assert_eq!(objs[0].class_label, "Misc");
        assert_eq!(objs[0].box3d.h, 1.6);
        assert_eq!(objs[0].box3d.w, 1.7);
        assert_eq!(objs[0].box3d.l, 3.2);

        let short = "Misc 0.0 0 1.5 0 0 50 50 1.6 1.7 3.2 1.0 2.0 10.0";
        let err = parse_kitti_labels(short, &calib).unwrap_err();
        assert!(err.to_string().contains("line 1"), "{err}");

        let dontcare = "DontCare -1 -1 -10 0 0 0 0 -1 -1 -1 -1000 -1000 -1000 -10";
        assert!(parse_kitti_labels(dontcare, &calib).unwrap().is_empty());
    }

    #[test]
    fn annotation_roundtrip_preserves_precision() {
        let ann = SceneAnnotations {
            scene_id: "000001".to_string(),
            objects: vec![GtObject {
                class_label: "Misc".to_string(),
                box3d: Box3D::new(1.0, 2.0, 3.0, 4.0, 2.0, 1.5, 3.141592653589793 - 1e-9),
                num_points: 42,
            }],
        };
        let text = annotations_to_string(&ann);
        let back = parse_annotations(&text).unwrap();
        assert_eq!(back, ann);
    }

    #[test]
    fn annotation_schema_errors_name_the_path() {
        let text = r#"{"scene_id": "s", "objects": [{"class": "Misc", "num_points": 3}]}"#;
        let err = parse_annotations(text).unwrap_err();
        assert!(err.to_string().contains("objects[0].box"), "{err}");
    }

    #[test]
    fn detection_roundtrip_and_schema() {
        let scenes = vec![SceneDetections {
            scene_id: "s0".to_string(),
            score_space: ScoreSpace::Logit,
            detections: vec![Detection {
                conf: 0.9,
                objectness: None,
                scores: vec![1.2, -0.5, 0.3],
                box3d: Box3D::new(1.0, 0.0, 0.0, 2.0, 1.0, 1.0, 0.1),
            }],
        }];
        let text = detections_to_string(&scenes);
        let back = parse_detections(&text, 3).unwrap();
        assert_eq!(back, scenes);

        // Empty detections list round trips too.
        let empty = vec![SceneDetections {
            scene_id: "s1".to_string(),
            score_space: ScoreSpace::Logit,
            detections: vec![],
        }];
        let back = parse_detections(&detections_to_string(&empty), 3).unwrap();
        assert_eq!(back, empty);

        // Wrong score arity under a K=3 catalog.
        let err = parse_detections(&text, 2).unwrap_err();
        assert!(err.to_string().contains("scores"), "{err}");
    }
}
