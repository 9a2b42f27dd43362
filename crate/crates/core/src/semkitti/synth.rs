//! Seeded synthetic scenes: a ground plane, boxes, and poles on a small
//! voxel grid, rendered to mutually consistent depth, 2D class mask, and an
//! RGB-like image.

use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use thiserror::Error;

use super::{ClassTable, LabelGrid, IGNORE};
use crate::geometry::{CameraModel, DepthMap, OccupancyGrid, VolumeSpec};

/// Palette class ids used by the generator (empty is the palette table's
/// implicit last id, 4).
pub const ROAD: u16 = 0;
pub const CAR: u16 = 1;
pub const BUILDING: u16 = 2;
pub const POLE: u16 = 3;

/// 2D mask value for pixels whose ray hits nothing.
pub const MASK_MISS: u8 = 255;

const MAX_VOXELS: usize = 128 * 128 * 128;

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("volume of {0} voxels exceeds the desk-scale limit of 128^3")]
    SpecTooLarge(usize),
}

/// A deterministic scene: ground-truth labels plus renders that are
/// consistent with them by construction.
#[derive(Clone, Debug)]
pub struct SynthScene {
    pub seed: u64,
    pub spec: VolumeSpec,
    pub cam: CameraModel,
    pub gt: LabelGrid,
    pub depth: DepthMap,
    /// Per-pixel palette class of the first voxel hit, row-major; 255 = miss.
    pub mask2d: Vec<u8>,
    /// RGB-like image, `(3, H, W)` row-major.
    pub image: Vec<f32>,
}

impl SynthScene {
    pub fn empty_id(&self) -> u16 {
        ClassTable::palette().empty_id()
    }

    pub fn occupancy(&self) -> OccupancyGrid {
        let empty = self.empty_id();
        let mut grid = OccupancyGrid::empty(self.spec);
        for (i, &l) in self.gt.labels.iter().enumerate() {
            grid.data[i] = l != empty && l != IGNORE;
        }
        grid
    }

    /// Stand-in 2D semantic features: one-hot palette masks blurred with a
    /// 3x3 box filter, `(4, H, W)`.
    pub fn feat2d(&self) -> Vec<f32> {
        let (w, h) = (self.cam.width, self.cam.height);
        let nc = ClassTable::palette().n_semantic();
        let mut onehot = vec![0.0f32; nc * h * w];
        for (i, &m) in self.mask2d.iter().enumerate() {
            if (m as usize) < nc {
                onehot[m as usize * h * w + i] = 1.0;
            }
        }
        let mut out = vec![0.0f32; nc * h * w];
        for c in 0..nc {
            let src = &onehot[c * h * w..(c + 1) * h * w];
            let dst = &mut out[c * h * w..(c + 1) * h * w];
            for y in 0..h as isize {
                for x in 0..w as isize {
                    let mut acc = 0.0f32;
                    for dy in -1..=1 {
                        for dx in -1..=1 {
                            let (yy, xx) = (y + dy, x + dx);
                            if yy >= 0 && yy < h as isize && xx >= 0 && xx < w as isize {
                                acc += src[yy as usize * w + xx as usize];
                            }
                        }
                    }
                    dst[y as usize * w + x as usize] = acc / 9.0;
                }
            }
        }
        out
    }
}

/// Generate the default scene: ground plane, 2-6 boxes, 1-3 poles.
pub fn synth_scene(
    seed: u64,
    spec: &VolumeSpec,
    cam: &CameraModel,
) -> Result<SynthScene, SynthError> {
    synth_scene_with_counts(seed, spec, cam, (2, 6), (1, 3))
}

/// Scene generator with explicit box/pole count ranges (inclusive).
pub fn synth_scene_with_counts(
    seed: u64,
    spec: &VolumeSpec,
    cam: &CameraModel,
    boxes: (usize, usize),
    poles: (usize, usize),
) -> Result<SynthScene, SynthError> {
    if spec.voxel_count() > MAX_VOXELS {
        return Err(SynthError::SpecTooLarge(spec.voxel_count()));
    }
    let palette = ClassTable::palette();
    let empty = palette.empty_id();
    let mut gt = LabelGrid::filled(*spec, empty);
    let [dx, dy, dz] = spec.dims;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    let ground = if dz >= 4 { 1 } else { 0 };
    for x in 0..dx {
        for y in 0..dy {
            gt.set([x, y, ground], ROAD);
        }
    }

    // Keep objects inside a forward wedge so the default camera sees them.
    let sample_xy = |rng: &mut ChaCha8Rng, sx: usize, sy: usize| -> (usize, usize) {
        let x_lo = (dx / 6).max(1);
        let x_hi = dx.saturating_sub(sx + 1).max(x_lo + 1);
        let x0 = rng.random_range(x_lo..x_hi);
        let half_band = ((0.4 * x0 as f64) as usize).clamp(2, dy / 2);
        let yc_lo = (dy / 2).saturating_sub(half_band);
        let yc_hi = (dy / 2 + half_band).min(dy.saturating_sub(sy + 1)).max(yc_lo + 1);
        let y0 = rng.random_range(yc_lo..yc_hi);
        (x0, y0)
    };

    let n_boxes = if boxes.1 > 0 { rng.random_range(boxes.0..=boxes.1) } else { 0 };
    for _ in 0..n_boxes {
        let is_building = rng.random_bool(0.4);
        let (class, sx, sy, sz) = if is_building {
            (
                BUILDING,
                rng.random_range(5..=9usize),
                rng.random_range(4..=7usize),
                rng.random_range(4..=6usize),
            )
        } else {
            (
                CAR,
                rng.random_range(3..=6usize),
                rng.random_range(2..=4usize),
                rng.random_range(2..=3usize),
            )
        };
        let (x0, y0) = sample_xy(&mut rng, sx, sy);
        let z0 = ground + 1;
        for x in x0..(x0 + sx).min(dx) {
            for y in y0..(y0 + sy).min(dy) {
                for z in z0..(z0 + sz).min(dz) {
                    gt.set([x, y, z], class);
                }
            }
        }
    }

    let n_poles = if poles.1 > 0 { rng.random_range(poles.0..=poles.1) } else { 0 };
    for _ in 0..n_poles {
        let h = rng.random_range(4..=7usize);
        let (x0, y0) = sample_xy(&mut rng, 1, 1);
        for z in (ground + 1)..(ground + 1 + h).min(dz) {
            gt.set([x0, y0, z], POLE);
        }
    }

    let (depth, mask2d) = render_depth(&gt, cam, empty);

    // RGB-like image: per-class base color, depth shading, mild seeded noise.
    let (w, h) = (cam.width, cam.height);
    let mut image = vec![0.0f32; 3 * h * w];
    let colors: [[f32; 3]; 5] = [
        [0.45, 0.45, 0.45], // road
        [0.80, 0.20, 0.15], // car
        [0.30, 0.40, 0.80], // building
        [0.90, 0.80, 0.20], // pole
        [0.70, 0.85, 0.95], // sky / miss
    ];
    for i in 0..h * w {
        let cls = mask2d[i] as usize;
        let base = if cls < 4 { colors[cls] } else { colors[4] };
        let shade = if mask2d[i] == MASK_MISS {
            1.0
        } else {
            1.0 / (1.0 + 0.03 * depth.data()[i] as f32)
        };
        for c in 0..3 {
            let noise: f32 = rng.random_range(-0.02..0.02);
            image[c * h * w + i] = (base[c] * shade + noise).clamp(0.0, 1.0);
        }
    }

    Ok(SynthScene { seed, spec: *spec, cam: cam.clone(), gt, depth, mask2d, image })
}

/// Render depth and class mask by walking each pixel ray through the grid
/// with an exact voxel traversal. The stored depth is the camera-z of the
/// midpoint of the ray segment inside the first occupied voxel, so
/// back-projecting it lands strictly inside that voxel; a miss stores depth
/// 0 and mask 255.
pub fn render_depth(gt: &LabelGrid, cam: &CameraModel, empty_id: u16) -> (DepthMap, Vec<u8>) {
    let (w, h) = (cam.width, cam.height);
    let mut depth = vec![0.0f64; w * h];
    let mut mask = vec![MASK_MISS; w * h];

    depth
        .par_chunks_mut(w)
        .zip(mask.par_chunks_mut(w))
        .enumerate()
        .for_each(|(v, (drow, mrow))| {
            for u in 0..w {
                if let Some((d, cls)) = trace_ray(gt, cam, empty_id, u, v) {
                    drow[u] = d;
                    mrow[u] = cls;
                }
            }
        });

    (
        DepthMap::new(w, h, depth).expect("renderer produces valid depth"),
        mask,
    )
}

/// First occupied voxel along the pixel ray, via Amanatides-Woo traversal.
/// The ray parameter equals camera depth (the direction is z-normalized).
fn trace_ray(
    gt: &LabelGrid,
    cam: &CameraModel,
    empty_id: u16,
    u: usize,
    v: usize,
) -> Option<(f64, u8)> {
    let spec = &gt.spec;
    let (o, d) = cam.pixel_ray([u as f64, v as f64]);
    let vs = spec.voxel_size;

    // Clip to the volume box.
    let mut t0 = 1e-9f64;
    let mut t1 = f64::INFINITY;
    for a in 0..3 {
        let lo = spec.origin[a];
        let hi = lo + spec.dims[a] as f64 * vs;
        if d[a] == 0.0 {
            if o[a] < lo || o[a] >= hi {
                return None;
            }
            continue;
        }
        let ta = (lo - o[a]) / d[a];
        let tb = (hi - o[a]) / d[a];
        let (tmin, tmax) = if ta < tb { (ta, tb) } else { (tb, ta) };
        t0 = t0.max(tmin);
        t1 = t1.min(tmax);
    }
    if t0 >= t1 {
        return None;
    }

    // Starting voxel at the entry point (clamped against boundary rounding).
    let mut idx = [0isize; 3];
    for a in 0..3 {
        let f = ((o[a] + t0 * d[a] - spec.origin[a]) / vs).floor() as isize;
        idx[a] = f.clamp(0, spec.dims[a] as isize - 1);
    }
    let mut step = [0isize; 3];
    let mut tmax = [f64::INFINITY; 3];
    let mut tdelta = [f64::INFINITY; 3];
    for a in 0..3 {
        if d[a] > 0.0 {
            step[a] = 1;
            tmax[a] = (spec.origin[a] + (idx[a] + 1) as f64 * vs - o[a]) / d[a];
            tdelta[a] = vs / d[a];
        } else if d[a] < 0.0 {
            step[a] = -1;
            tmax[a] = (spec.origin[a] + idx[a] as f64 * vs - o[a]) / d[a];
            tdelta[a] = vs / -d[a];
        }
    }

    let mut t_curr = t0;
    loop {
        let uidx = [idx[0] as usize, idx[1] as usize, idx[2] as usize];
        let label = gt.at(uidx);
        if label != empty_id && label != IGNORE {
            let t_exit = tmax[0].min(tmax[1]).min(tmax[2]).min(t1);
            let t_mid = 0.5 * (t_curr + t_exit);
            return Some((t_mid, label as u8));
        }
        let axis = if tmax[0] <= tmax[1] && tmax[0] <= tmax[2] {
            0
        } else if tmax[1] <= tmax[2] {
            1
        } else {
            2
        };
        t_curr = tmax[axis];
        if t_curr >= t1 {
            return None;
        }
        idx[axis] += step[axis];
        if idx[axis] < 0 || idx[axis] >= spec.dims[axis] as isize {
            return None;
        }
        tmax[axis] += tdelta[axis];
    }
}
