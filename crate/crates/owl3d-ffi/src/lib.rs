//! C ABI for the owl3d toolkit.
//!
//! Conventions:
//! - every fallible function returns an [`Owl3dStatus`] code and writes its
//!   result through out-pointers;
//! - `owl3d_last_error_message` returns a thread-local description of the
//!   most recent failure;
//! - point clouds are opaque handles created and released through this
//!   API; boxes and score arrays are plain C structs/buffers.
//!
//! The header is generated by cbindgen at build time (see `build.rs`,
//! output `include/owl3d.h`).

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::path::Path;

use owl3d::geom::{
    bev_iou, center_distance, iou_3d, points_in_box, transform_object, Box3D, PointCloud,
};
use owl3d::losses::{energy, focal_loss, supcon_ood_loss, ContrastiveBatch, ContrastiveLabel};
use owl3d::matching::{hungarian, Objective};
use owl3d::ood::{aupr, auroc, fpr_at_tpr, id_score, ScoreKind, ScoreMetric};
use owl3d::sceneio::{read_pointcloud, write_pointcloud};

/// Status code returned by every fallible function.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Owl3dStatus {
    Ok = 0,
    InvalidArgument = 1,
    IoError = 2,
    FormatError = 3,
    NullPointer = 4,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(msg: &str) {
    let cleaned: String = msg.chars().filter(|&c| c != '\0').collect();
    LAST_ERROR.with(|e| {
        *e.borrow_mut() = CString::new(cleaned).unwrap_or_default();
    });
}

fn fail(err: &owl3d::Error) -> Owl3dStatus {
    set_error(&err.to_string());
    match err {
        owl3d::Error::Io { .. } => Owl3dStatus::IoError,
        owl3d::Error::Format(_) | owl3d::Error::Schema { .. } => Owl3dStatus::FormatError,
        owl3d::Error::InvalidInput(_) => Owl3dStatus::InvalidArgument,
    }
}

fn fail_invalid(msg: &str) -> Owl3dStatus {
    set_error(msg);
    Owl3dStatus::InvalidArgument
}

fn fail_null(what: &str) -> Owl3dStatus {
    set_error(&format!("null pointer: {what}"));
    Owl3dStatus::NullPointer
}

/// Message describing the most recent error on this thread. The pointer
/// stays valid until the next failing call on the same thread.
#[no_mangle]
pub extern "C" fn owl3d_last_error_message() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// Oriented 3D box (mirror of the library type).
#[repr(C)]
#[derive(Debug, Clone, Copy)]
pub struct Owl3dBox {
    pub cx: f64,
    pub cy: f64,
    pub cz: f64,
    pub l: f64,
    pub w: f64,
    pub h: f64,
    pub yaw: f64,
}

impl Owl3dBox {
    fn to_box3d(self) -> owl3d::Result<Box3D> {
        let b = Box3D::new(self.cx, self.cy, self.cz, self.l, self.w, self.h, self.yaw);
        b.validate()?;
        Ok(b)
    }

    fn from_box3d(b: &Box3D) -> Self {
        Owl3dBox {
            cx: b.cx,
            cy: b.cy,
            cz: b.cz,
            l: b.l,
            w: b.w,
            h: b.h,
            yaw: b.yaw,
        }
    }
}

/// Opaque point-cloud handle.
pub struct Owl3dCloud {
    inner: PointCloud,
}

unsafe fn slice_from<'a, T>(ptr: *const T, len: usize) -> Option<&'a [T]> {
    if len == 0 {
        Some(&[])
    } else if ptr.is_null() {
        None
    } else {
        Some(std::slice::from_raw_parts(ptr, len))
    }
}

macro_rules! out_write {
    ($ptr:expr, $value:expr, $name:literal) => {
        if $ptr.is_null() {
            return fail_null($name);
        } else {
            unsafe { *$ptr = $value };
        }
    };
}

// --- geometry ----------------------------------------------------------------

#[no_mangle]
pub extern "C" fn owl3d_bev_iou(
    a: *const Owl3dBox,
    b: *const Owl3dBox,
    out: *mut f64,
) -> Owl3dStatus {
    if a.is_null() || b.is_null() {
        return fail_null("box");
    }
    let (a, b) = unsafe { (*a, *b) };
    match (a.to_box3d(), b.to_box3d()) {
        (Ok(a), Ok(b)) => {
            out_write!(out, bev_iou(&a, &b), "out");
            Owl3dStatus::Ok
        }
        (Err(e), _) | (_, Err(e)) => fail(&e),
    }
}

#[no_mangle]
pub extern "C" fn owl3d_iou_3d(
    a: *const Owl3dBox,
    b: *const Owl3dBox,
    out: *mut f64,
) -> Owl3dStatus {
    if a.is_null() || b.is_null() {
        return fail_null("box");
    }
    let (a, b) = unsafe { (*a, *b) };
    match (a.to_box3d(), b.to_box3d()) {
        (Ok(a), Ok(b)) => {
            out_write!(out, iou_3d(&a, &b), "out");
            Owl3dStatus::Ok
        }
        (Err(e), _) | (_, Err(e)) => fail(&e),
    }
}

#[no_mangle]
pub extern "C" fn owl3d_center_distance(
    a: *const Owl3dBox,
    b: *const Owl3dBox,
    out: *mut f64,
) -> Owl3dStatus {
    if a.is_null() || b.is_null() {
        return fail_null("box");
    }
    let (a, b) = unsafe { (*a, *b) };
    match (a.to_box3d(), b.to_box3d()) {
        (Ok(a), Ok(b)) => {
            out_write!(out, center_distance(&a, &b), "out");
            Owl3dStatus::Ok
        }
        (Err(e), _) | (_, Err(e)) => fail(&e),
    }
}

// --- point clouds ---------------------------------------------------------------

/// Build a cloud from `count` points laid out as (x, y, z, intensity)
/// f64 quads. The handle must be released with `owl3d_cloud_free`.
#[no_mangle]
pub extern "C" fn owl3d_cloud_create(
    xyzi: *const f64,
    count: usize,
    out: *mut *mut Owl3dCloud,
) -> Owl3dStatus {
    let Some(data) = (unsafe { slice_from(xyzi, count * 4) }) else {
        return fail_null("xyzi");
    };
    let points = data
        .chunks_exact(4)
        .map(|c| owl3d::geom::Point::new(c[0], c[1], c[2], c[3]))
        .collect();
    let handle = Box::new(Owl3dCloud {
        inner: PointCloud::new(points),
    });
    out_write!(out, Box::into_raw(handle), "out");
    Owl3dStatus::Ok
}

/// Read a velodyne-format `.bin` file.
///
/// # Safety
/// `path` must be a valid NUL-terminated UTF-8 string.
#[no_mangle]
pub unsafe extern "C" fn owl3d_cloud_read(
    path: *const c_char,
    out: *mut *mut Owl3dCloud,
) -> Owl3dStatus {
    if path.is_null() {
        return fail_null("path");
    }
    let Ok(path) = CStr::from_ptr(path).to_str() else {
        return fail_invalid("path is not valid UTF-8");
    };
    match read_pointcloud(Path::new(path)) {
        Ok((cloud, _)) => {
            let handle = Box::new(Owl3dCloud { inner: cloud });
            out_write!(out, Box::into_raw(handle), "out");
            Owl3dStatus::Ok
        }
        Err(e) => fail(&e),
    }
}

/// Write a cloud as a velodyne-format `.bin` file.
///
/// # Safety
/// `path` must be a valid NUL-terminated UTF-8 string and `cloud` a live
/// handle from this API.
#[no_mangle]
pub unsafe extern "C" fn owl3d_cloud_write(
    cloud: *const Owl3dCloud,
    path: *const c_char,
) -> Owl3dStatus {
    if cloud.is_null() {
        return fail_null("cloud");
    }
    if path.is_null() {
        return fail_null("path");
    }
    let Ok(path) = CStr::from_ptr(path).to_str() else {
        return fail_invalid("path is not valid UTF-8");
    };
    match write_pointcloud(Path::new(path), &(*cloud).inner) {
        Ok(()) => Owl3dStatus::Ok,
        Err(e) => fail(&e),
    }
}

#[no_mangle]
pub extern "C" fn owl3d_cloud_len(cloud: *const Owl3dCloud, out: *mut usize) -> Owl3dStatus {
    if cloud.is_null() {
        return fail_null("cloud");
    }
    let len = unsafe { (*cloud).inner.len() };
    out_write!(out, len, "out");
    Owl3dStatus::Ok
}

/// Indices of cloud points inside the box. `indices` must have room for
/// `capacity` entries; the number found is written to `out_count` even
/// when it exceeds the capacity (only `capacity` indices are stored).
#[no_mangle]
pub extern "C" fn owl3d_points_in_box(
    cloud: *const Owl3dCloud,
    b: *const Owl3dBox,
    indices: *mut usize,
    capacity: usize,
    out_count: *mut usize,
) -> Owl3dStatus {
    if cloud.is_null() {
        return fail_null("cloud");
    }
    if b.is_null() {
        return fail_null("box");
    }
    let bx = match unsafe { *b }.to_box3d() {
        Ok(bx) => bx,
        Err(e) => return fail(&e),
    };
    let found = points_in_box(unsafe { &(*cloud).inner }, &bx);
    if !indices.is_null() {
        let n = found.len().min(capacity);
        let dst = unsafe { std::slice::from_raw_parts_mut(indices, n) };
        dst.copy_from_slice(&found[..n]);
    }
    out_write!(out_count, found.len(), "out_count");
    Owl3dStatus::Ok
}

/// Rigidly move a cloud/box pair to a new pose; returns a new handle.
#[no_mangle]
pub extern "C" fn owl3d_transform_object(
    cloud: *const Owl3dCloud,
    b: *const Owl3dBox,
    new_cx: f64,
    new_cy: f64,
    new_cz: f64,
    new_yaw: f64,
    out_cloud: *mut *mut Owl3dCloud,
    out_box: *mut Owl3dBox,
) -> Owl3dStatus {
    if cloud.is_null() {
        return fail_null("cloud");
    }
    if b.is_null() {
        return fail_null("box");
    }
    let bx = match unsafe { *b }.to_box3d() {
        Ok(bx) => bx,
        Err(e) => return fail(&e),
    };
    let (moved, moved_box) = transform_object(
        unsafe { &(*cloud).inner },
        &bx,
        [new_cx, new_cy, new_cz],
        new_yaw,
    );
    out_write!(out_box, Owl3dBox::from_box3d(&moved_box), "out_box");
    let handle = Box::new(Owl3dCloud { inner: moved });
    out_write!(out_cloud, Box::into_raw(handle), "out_cloud");
    Owl3dStatus::Ok
}

/// Release a cloud handle. Null is a no-op.
#[no_mangle]
pub extern "C" fn owl3d_cloud_free(cloud: *mut Owl3dCloud) {
    if !cloud.is_null() {
        drop(unsafe { Box::from_raw(cloud) });
    }
}

// --- assignment -------------------------------------------------------------------

/// Optimal one-to-one assignment over a row-major cost matrix. Writes
/// `min(rows, cols)` (row, col) pairs into `out_rows`/`out_cols` (each of
/// that capacity) and the total selected cost into `out_cost`.
#[no_mangle]
pub extern "C" fn owl3d_hungarian(
    cost: *const f64,
    rows: usize,
    cols: usize,
    maximize: bool,
    out_rows: *mut usize,
    out_cols: *mut usize,
    out_cost: *mut f64,
) -> Owl3dStatus {
    let Some(data) = (unsafe { slice_from(cost, rows * cols) }) else {
        return fail_null("cost");
    };
    let matrix: Vec<Vec<f64>> = if rows == 0 || cols == 0 {
        Vec::new()
    } else {
        data.chunks(cols).map(|r| r.to_vec()).collect()
    };
    let objective = if maximize {
        Objective::Maximize
    } else {
        Objective::Minimize
    };
    match hungarian(&matrix, objective) {
        Ok(assignment) => {
            let n = assignment.pairs.len();
            if n > 0 {
                if out_rows.is_null() || out_cols.is_null() {
                    return fail_null("out_rows/out_cols");
                }
                let rs = unsafe { std::slice::from_raw_parts_mut(out_rows, n) };
                let cs = unsafe { std::slice::from_raw_parts_mut(out_cols, n) };
                for (i, &(r, c)) in assignment.pairs.iter().enumerate() {
                    rs[i] = r;
                    cs[i] = c;
                }
            }
            out_write!(out_cost, assignment.total_cost, "out_cost");
            Owl3dStatus::Ok
        }
        Err(e) => fail(&e),
    }
}

// --- OOD scoring --------------------------------------------------------------------

/// Score kinds exposed over the ABI; values match `owl3d_id_score`'s
/// `kind` argument.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Owl3dScoreKind {
    Msp = 0,
    MaxLogit = 1,
    SumLogit = 2,
    MaxProb = 3,
    SumProb = 4,
    MaxEnergy = 5,
    JointEnergy = 6,
    Energy = 7,
}

impl Owl3dScoreKind {
    fn to_kind(self) -> ScoreKind {
        match self {
            Owl3dScoreKind::Msp => ScoreKind::Msp,
            Owl3dScoreKind::MaxLogit => ScoreKind::MaxLogit,
            Owl3dScoreKind::SumLogit => ScoreKind::SumLogit,
            Owl3dScoreKind::MaxProb => ScoreKind::MaxProb,
            Owl3dScoreKind::SumProb => ScoreKind::SumProb,
            Owl3dScoreKind::MaxEnergy => ScoreKind::MaxEnergy,
            Owl3dScoreKind::JointEnergy => ScoreKind::JointEnergy,
            Owl3dScoreKind::Energy => ScoreKind::Energy,
        }
    }
}

/// ID-ness score of a logit vector (higher = more in-distribution).
#[no_mangle]
pub extern "C" fn owl3d_id_score(
    logits: *const f64,
    len: usize,
    kind: Owl3dScoreKind,
    temperature: f64,
    out: *mut f64,
) -> Owl3dStatus {
    let Some(logits) = (unsafe { slice_from(logits, len) }) else {
        return fail_null("logits");
    };
    let metric = match ScoreMetric::with_temperature(kind.to_kind(), temperature) {
        Ok(m) => m,
        Err(e) => return fail(&e),
    };
    match id_score(logits, metric) {
        Ok(v) => {
            out_write!(out, v, "out");
            Owl3dStatus::Ok
        }
        Err(e) => fail(&e),
    }
}

#[no_mangle]
pub extern "C" fn owl3d_auroc(
    id_scores: *const f64,
    n_id: usize,
    ood_scores: *const f64,
    n_ood: usize,
    out: *mut f64,
) -> Owl3dStatus {
    let (Some(id), Some(ood)) = (unsafe { slice_from(id_scores, n_id) }, unsafe {
        slice_from(ood_scores, n_ood)
    }) else {
        return fail_null("scores");
    };
    match auroc(id, ood) {
        Ok(v) => {
            out_write!(out, v, "out");
            Owl3dStatus::Ok
        }
        Err(e) => fail(&e),
    }
}

#[no_mangle]
pub extern "C" fn owl3d_aupr(
    id_scores: *const f64,
    n_id: usize,
    ood_scores: *const f64,
    n_ood: usize,
    out: *mut f64,
) -> Owl3dStatus {
    let (Some(id), Some(ood)) = (unsafe { slice_from(id_scores, n_id) }, unsafe {
        slice_from(ood_scores, n_ood)
    }) else {
        return fail_null("scores");
    };
    match aupr(id, ood) {
        Ok(v) => {
            out_write!(out, v, "out");
            Owl3dStatus::Ok
        }
        Err(e) => fail(&e),
    }
}

#[no_mangle]
pub extern "C" fn owl3d_fpr_at_tpr(
    id_scores: *const f64,
    n_id: usize,
    ood_scores: *const f64,
    n_ood: usize,
    tpr_target: f64,
    out: *mut f64,
) -> Owl3dStatus {
    let (Some(id), Some(ood)) = (unsafe { slice_from(id_scores, n_id) }, unsafe {
        slice_from(ood_scores, n_ood)
    }) else {
        return fail_null("scores");
    };
    match fpr_at_tpr(id, ood, tpr_target) {
        Ok(v) => {
            out_write!(out, v, "out");
            Owl3dStatus::Ok
        }
        Err(e) => fail(&e),
    }
}

// --- losses -----------------------------------------------------------------------

/// Free energy -T log sum e^{f/T} of a logit vector.
#[no_mangle]
pub extern "C" fn owl3d_energy(
    logits: *const f64,
    len: usize,
    temperature: f64,
    out: *mut f64,
) -> Owl3dStatus {
    let Some(logits) = (unsafe { slice_from(logits, len) }) else {
        return fail_null("logits");
    };
    if len == 0 {
        return fail_invalid("energy requires at least one logit");
    }
    if temperature <= 0.0 || !temperature.is_finite() {
        return fail_invalid("temperature must be positive and finite");
    }
    out_write!(out, energy(logits, temperature), "out");
    Owl3dStatus::Ok
}

/// Mean binary focal loss and its gradient (`out_grad` capacity `len`).
#[no_mangle]
pub extern "C" fn owl3d_focal_loss(
    logits: *const f64,
    labels: *const u8,
    len: usize,
    alpha: f64,
    gamma: f64,
    out_loss: *mut f64,
    out_grad: *mut f64,
) -> Owl3dStatus {
    let (Some(logits), Some(labels)) = (unsafe { slice_from(logits, len) }, unsafe {
        slice_from(labels, len)
    }) else {
        return fail_null("logits/labels");
    };
    let labels: Vec<bool> = labels.iter().map(|&b| b != 0).collect();
    match focal_loss(logits, &labels, alpha, gamma) {
        Ok((loss, grad)) => {
            if len > 0 {
                if out_grad.is_null() {
                    return fail_null("out_grad");
                }
                let dst = unsafe { std::slice::from_raw_parts_mut(out_grad, len) };
                dst.copy_from_slice(&grad);
            }
            out_write!(out_loss, loss, "out_loss");
            Owl3dStatus::Ok
        }
        Err(e) => fail(&e),
    }
}

/// Outlier-aware supervised contrastive loss over row-major embeddings
/// (`n` rows by `dim`). `labels[i] < 0` marks an outlier row; other values
/// are class ids. `out_grads` has capacity `n * dim`.
#[no_mangle]
pub extern "C" fn owl3d_supcon_ood_loss(
    embeddings: *const f64,
    n: usize,
    dim: usize,
    labels: *const i64,
    tau_c: f64,
    out_loss: *mut f64,
    out_grads: *mut f64,
) -> Owl3dStatus {
    let (Some(emb), Some(labels)) = (unsafe { slice_from(embeddings, n * dim) }, unsafe {
        slice_from(labels, n)
    }) else {
        return fail_null("embeddings/labels");
    };
    if dim == 0 {
        return fail_invalid("embedding dimension must be positive");
    }
    let batch = ContrastiveBatch {
        embeddings: emb.chunks(dim).map(|c| c.to_vec()).collect(),
        labels: labels
            .iter()
            .map(|&l| {
                if l < 0 {
                    ContrastiveLabel::Out
                } else {
                    ContrastiveLabel::In(l as u32)
                }
            })
            .collect(),
    };
    match supcon_ood_loss(&batch, tau_c) {
        Ok((loss, grads)) => {
            if n * dim > 0 {
                if out_grads.is_null() {
                    return fail_null("out_grads");
                }
                let dst = unsafe { std::slice::from_raw_parts_mut(out_grads, n * dim) };
                for (i, row) in grads.iter().enumerate() {
                    dst[i * dim..(i + 1) * dim].copy_from_slice(row);
                }
            }
            out_write!(out_loss, loss, "out_loss");
            Owl3dStatus::Ok
        }
        Err(e) => fail(&e),
    }
}
