//! Batched frustum-filtered k-closest-points-to-ray selection.
//!
//! Drop-in accelerated version of the reference selection: for every ray,
//! the k in-frustum points with the smallest orthogonal line distance,
//! ties broken by point index. Arrays cross the C boundary as contiguous
//! row-major f32; distance comparisons run in f64 so the ordering matches
//! the 64-bit reference. Parallel over rays; per-ray work is independent,
//! so results do not depend on the thread count.
//!
//! Status codes: 0 ok, 1 bad shape, 2 non-finite input.

use rayon::prelude::*;
use std::slice;

const STATUS_OK: i32 = 0;
const STATUS_BAD_SHAPE: i32 = 1;
const STATUS_NON_FINITE: i32 = 2;

#[inline]
fn dot(a: [f64; 3], b: [f64; 3]) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

#[inline]
fn sub(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

fn row3(data: &[f32], i: usize) -> [f64; 3] {
    [
        data[3 * i] as f64,
        data[3 * i + 1] as f64,
        data[3 * i + 2] as f64,
    ]
}

/// Insertion-ordered top-k buffer keyed by (distance_sq, index).
struct TopK<'a> {
    keys: &'a mut [(f64, i64)],
    len: usize,
}

impl<'a> TopK<'a> {
    fn push(&mut self, key: (f64, i64)) {
        let cap = self.keys.len();
        if self.len == cap && key >= self.keys[self.len - 1] {
            return;
        }
        let mut i = if self.len < cap {
            self.len += 1;
            self.len - 1
        } else {
            cap - 1
        };
        while i > 0 && key < self.keys[i - 1] {
            self.keys[i] = self.keys[i - 1];
            i -= 1;
        }
        self.keys[i] = key;
    }
}

#[cfg(test)]
mod tests {
    use super::TopK;

    #[test]
    fn topk_keeps_smallest_sorted_with_index_tiebreak() {
        let mut keys = vec![(f64::INFINITY, i64::MAX); 3];
        let mut top = TopK {
            keys: &mut keys,
            len: 0,
        };
        for key in [(2.0, 7), (1.0, 3), (1.0, 1), (0.5, 9), (3.0, 0)] {
            top.push(key);
        }
        assert_eq!(top.len, 3);
        assert_eq!(*top.keys, [(0.5, 9), (1.0, 1), (1.0, 3)]);
    }

    #[test]
    fn topk_handles_fewer_entries_than_capacity() {
        let mut keys = vec![(f64::INFINITY, i64::MAX); 4];
        let mut top = TopK {
            keys: &mut keys,
            len: 0,
        };
        top.push((5.0, 2));
        top.push((4.0, 8));
        assert_eq!(top.len, 2);
        assert_eq!(top.keys[0], (4.0, 8));
        assert_eq!(top.keys[1], (5.0, 2));
    }
}

/// # Safety
/// All pointers must reference buffers of the documented sizes:
/// origins/directions R x 3, points N x 3, local_to_cam 3 x 4 row-major,
/// intrinsics (fx, fy, cx, cy), outputs R x K each.
#[no_mangle]
pub unsafe extern "C" fn nplf_knn_rays(
    origins: *const f32,
    directions: *const f32,
    points: *const f32,
    local_to_cam: *const f32,
    intrinsics: *const f32,
    n_rays: i64,
    n_points: i64,
    width: i64,
    height: i64,
    margin: f32,
    k: i64,
    out_indices: *mut i64,
    out_distances: *mut f32,
    out_mask: *mut u8,
) -> i32 {
    if n_rays <= 0 || n_points <= 0 || k <= 0 || width <= 0 || height <= 0 {
        return STATUS_BAD_SHAPE;
    }
    if origins.is_null()
        || directions.is_null()
        || points.is_null()
        || local_to_cam.is_null()
        || intrinsics.is_null()
        || out_indices.is_null()
        || out_distances.is_null()
        || out_mask.is_null()
    {
        return STATUS_BAD_SHAPE;
    }
    let r = n_rays as usize;
    let n = n_points as usize;
    let kk = k as usize;

    let origins = slice::from_raw_parts(origins, 3 * r);
    let directions = slice::from_raw_parts(directions, 3 * r);
    let points = slice::from_raw_parts(points, 3 * n);
    let cam = slice::from_raw_parts(local_to_cam, 12);
    let intr = slice::from_raw_parts(intrinsics, 4);
    let out_idx = slice::from_raw_parts_mut(out_indices, r * kk);
    let out_dist = slice::from_raw_parts_mut(out_distances, r * kk);
    let out_msk = slice::from_raw_parts_mut(out_mask, r * kk);

    for v in origins.iter().chain(directions).chain(points).chain(cam).chain(intr) {
        if !v.is_finite() {
            return STATUS_NON_FINITE;
        }
    }

    // frustum filter once: camera-frame depth and padded pixel bounds
    let (fx, fy, cx, cy) = (
        intr[0] as f64,
        intr[1] as f64,
        intr[2] as f64,
        intr[3] as f64,
    );
    let m = margin as f64;
    let (w, h) = (width as f64, height as f64);
    let cam_f64: Vec<f64> = cam.iter().map(|&x| x as f64).collect();
    let mut cands: Vec<(i64, [f64; 3])> = Vec::with_capacity(n);
    for i in 0..n {
        let p = row3(points, i);
        let pc = [
            cam_f64[0] * p[0] + cam_f64[1] * p[1] + cam_f64[2] * p[2] + cam_f64[3],
            cam_f64[4] * p[0] + cam_f64[5] * p[1] + cam_f64[6] * p[2] + cam_f64[7],
            cam_f64[8] * p[0] + cam_f64[9] * p[1] + cam_f64[10] * p[2] + cam_f64[11],
        ];
        if pc[2] <= 0.0 {
            continue;
        }
        let u = fx * pc[0] / pc[2] + cx;
        let v = fy * pc[1] / pc[2] + cy;
        if u >= -m * w && u <= (1.0 + m) * w && v >= -m * h && v <= (1.0 + m) * h {
            cands.push((i as i64, p));
        }
    }

    let rows: Vec<(usize, &mut [i64])> = out_idx.chunks_mut(kk).enumerate().collect();
    let dist_rows: Vec<&mut [f32]> = out_dist.chunks_mut(kk).collect();
    let mask_rows: Vec<&mut [u8]> = out_msk.chunks_mut(kk).collect();

    rows.into_par_iter()
        .zip(dist_rows)
        .zip(mask_rows)
        .for_each(|(((ray, idx_row), dist_row), mask_row)| {
            let o = row3(origins, ray);
            let d = row3(directions, ray);
            let mut keys = vec![(f64::INFINITY, i64::MAX); kk];
            let mut top = TopK {
                keys: &mut keys,
                len: 0,
            };
            for &(index, p) in &cands {
                let diff = sub(p, o);
                let proj = dot(diff, d);
                let dist_sq = (dot(diff, diff) - proj * proj).max(0.0);
                top.push((dist_sq, index));
            }
            let valid = top.len;
            for slot in 0..kk {
                if slot < valid {
                    idx_row[slot] = top.keys[slot].1;
                    dist_row[slot] = top.keys[slot].0.sqrt() as f32;
                    mask_row[slot] = 1;
                } else if valid > 0 {
                    idx_row[slot] = top.keys[0].1;
                    dist_row[slot] = top.keys[0].0.sqrt() as f32;
                    mask_row[slot] = 0;
                } else {
                    idx_row[slot] = -1;
                    dist_row[slot] = 0.0;
                    mask_row[slot] = 0;
                }
            }
        });

    STATUS_OK
}
