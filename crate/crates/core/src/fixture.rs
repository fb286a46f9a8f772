//! Synthetic KITTI-layout mini dataset: a ray-cast street scene seen from a
//! camera moving along smooth analytic trajectories, with per-pixel
//! category labels.
//!
//! Camera convention as in KITTI: x right, y down, z forward.

use std::path::Path;

use image::{Rgb, RgbImage};
use nalgebra::{Matrix3, Rotation3, Vector3};

use crate::dataset::write_pose_file;
use crate::error::{Error, Result};
use crate::labels::{write_label_map, write_vocabulary, LabelMap};
use crate::se3::Pose;

pub const VOCABULARY: [(u8, &str); 5] = [(0, "road"), (1, "sidewalk"), (2, "building"), (3, "pole"), (4, "sky")];

const ROAD: u8 = 0;
const SIDEWALK: u8 = 1;
const BUILDING: u8 = 2;
const POLE: u8 = 3;
const SKY: u8 = 4;

const GROUND_Y: f64 = 1.65;
const ROAD_HALF_WIDTH: f64 = 3.5;
const WALL_X: f64 = 8.0;
const WALL_TOP_Y: f64 = GROUND_Y - 7.0;
const POLE_X: f64 = 4.6;
const POLE_SPACING: f64 = 9.0;
const POLE_RADIUS: f64 = 0.15;
const POLE_TOP_Y: f64 = GROUND_Y - 4.0;

#[derive(Clone, Debug)]
pub struct FixtureSpec {
    /// `(sequence id, frame count)`.
    pub sequences: Vec<(String, usize)>,
    pub width: u32,
    pub height: u32,
}

impl Default for FixtureSpec {
    fn default() -> Self {
        FixtureSpec {
            sequences: vec![("00".into(), 20), ("01".into(), 20), ("03".into(), 60)],
            width: 208,
            height: 64,
        }
    }
}

/// Camera-to-world poses of sequence `index`, expressed relative to the
/// first frame (so the first pose is the identity).
pub fn trajectory(index: usize, frames: usize) -> Vec<Pose> {
    let raw = raw_trajectory(index, frames);
    let first_inv = raw[0].inverse();
    let mut out: Vec<Pose> = raw.iter().map(|p| first_inv.compose(p)).collect();
    out[0] = Pose::identity();
    out
}

fn raw_trajectory(index: usize, frames: usize) -> Vec<Pose> {
    let phase = 1.3 * index as f64 + 0.4;
    let mut position = Vector3::new(0.3 * (index as f64).sin(), 0.0, 0.0);
    let mut out = Vec::with_capacity(frames);
    for k in 0..frames {
        let t = k as f64;
        let yaw = 0.05 * (0.21 * t + phase).sin();
        let pitch = 0.01 * (0.5 * t + 2.0 * phase).sin();
        let roll = 0.008 * (0.43 * t + phase).cos();
        let rotation = Rotation3::from_axis_angle(&Vector3::y_axis(), yaw)
            * Rotation3::from_axis_angle(&Vector3::x_axis(), pitch)
            * Rotation3::from_axis_angle(&Vector3::z_axis(), roll);
        position.y = 0.03 * (0.6 * t + phase).sin();
        out.push(Pose::from_parts(*rotation.matrix(), position).expect("rotation is orthonormal"));
        let speed = 2.2 + 0.3 * (0.35 * t + phase).sin();
        position.x += speed * yaw.sin();
        position.z += speed * yaw.cos();
    }
    out
}

fn hash(ix: i64, iz: i64, salt: u64) -> f64 {
    let mut h = (ix as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15) ^ (iz as u64).wrapping_mul(0xc2b2_ae3d_27d4_eb4f) ^ salt;
    h ^= h >> 31;
    h = h.wrapping_mul(0xbf58_476d_1ce4_e5b9);
    h ^= h >> 29;
    (h >> 11) as f64 / (1u64 << 53) as f64
}

/// Smooth value noise in [0, 1].
fn noise(a: f64, b: f64, salt: u64) -> f64 {
    let (fa, fb) = (a.floor(), b.floor());
    let (ta, tb) = (a - fa, b - fb);
    let (sa, sb) = (ta * ta * (3.0 - 2.0 * ta), tb * tb * (3.0 - 2.0 * tb));
    let (ia, ib) = (fa as i64, fb as i64);
    let top = hash(ia, ib, salt) * (1.0 - sa) + hash(ia + 1, ib, salt) * sa;
    let bottom = hash(ia, ib + 1, salt) * (1.0 - sa) + hash(ia + 1, ib + 1, salt) * sa;
    top * (1.0 - sb) + bottom * sb
}

fn ground_shade(x: f64, z: f64) -> ([f64; 3], u8) {
    let grain = 0.6 * noise(x * 1.7, z * 1.7, 1) + 0.4 * noise(x * 0.4, z * 0.4, 2);
    if x.abs() < ROAD_HALF_WIDTH {
        let dash = x.abs() < 0.12 && z.rem_euclid(6.0) < 3.0;
        let v = if dash { 0.9 } else { 0.22 + 0.25 * grain };
        ([v, v, v * 1.05], ROAD)
    } else {
        let tile = if (x.floor() as i64 + z.floor() as i64) % 2 == 0 { 0.05 } else { -0.05 };
        let v = 0.5 + 0.25 * grain + tile;
        ([v * 1.05, v * 0.95, v * 0.8], SIDEWALK)
    }
}

fn wall_shade(side: f64, y: f64, z: f64) -> [f64; 3] {
    let block = (z / 12.0).floor() as i64;
    let salt = if side > 0.0 { 11 } else { 13 };
    let hue = hash(block, 0, salt);
    let base = [0.45 + 0.35 * hue, 0.35 + 0.2 * hash(block, 1, salt), 0.3 + 0.3 * (1.0 - hue)];
    let (wz, wy) = ((z.rem_euclid(3.0)), (y - WALL_TOP_Y).rem_euclid(2.5));
    let window = (0.8..2.2).contains(&wz) && (0.7..1.9).contains(&wy) && y < GROUND_Y - 1.0;
    let grain = 0.85 + 0.3 * noise(z * 2.0, y * 2.0, salt + 1);
    if window {
        let glass = 0.12 + 0.1 * hash(z.div_euclid(3.0) as i64, y.div_euclid(2.5) as i64, salt);
        [glass, glass * 1.1, glass * 1.4]
    } else {
        base.map(|c| c * grain)
    }
}

fn sky_shade(dir: &Vector3<f64>) -> [f64; 3] {
    let up = (-dir.y).clamp(0.0, 1.0);
    [0.55 + 0.2 * up, 0.7 + 0.15 * up, 0.95]
}

/// Colour (linear 0..1) and category seen along one world ray.
fn trace(origin: &Vector3<f64>, dir: &Vector3<f64>) -> ([f64; 3], u8) {
    let mut best = f64::INFINITY;
    let mut hit: Option<([f64; 3], u8)> = None;

    if dir.y > 1e-9 {
        let t = (GROUND_Y - origin.y) / dir.y;
        if t > 0.0 && t < best {
            let p = origin + dir * t;
            if p.x.abs() < WALL_X {
                best = t;
                let (c, l) = ground_shade(p.x, p.z);
                let fog = (t / 250.0).min(1.0);
                let sky = sky_shade(dir);
                hit = Some((std::array::from_fn(|i| c[i] * (1.0 - fog) + sky[i] * fog), l));
            }
        }
    }
    if dir.x.abs() > 1e-12 {
        for side in [-1.0, 1.0] {
            let t = (side * WALL_X - origin.x) / dir.x;
            if t > 0.0 && t < best {
                let p = origin + dir * t;
                if (WALL_TOP_Y..=GROUND_Y).contains(&p.y) {
                    best = t;
                    hit = Some((wall_shade(side, p.y, p.z), BUILDING));
                }
            }
        }
    }
    let a = dir.x * dir.x + dir.z * dir.z;
    if a > 1e-12 {
        let first = ((origin.z - 5.0) / POLE_SPACING).floor() as i64;
        for k in first.max(0)..first.max(0) + 40 {
            for side in [-1.0, 1.0] {
                let (cx, cz) = (side * POLE_X, k as f64 * POLE_SPACING + 4.0);
                let (ox, oz) = (origin.x - cx, origin.z - cz);
                let b = ox * dir.x + oz * dir.z;
                let c = ox * ox + oz * oz - POLE_RADIUS * POLE_RADIUS;
                let disc = b * b - a * c;
                if disc < 0.0 {
                    continue;
                }
                let t = (-b - disc.sqrt()) / a;
                if t > 0.0 && t < best {
                    let p = origin + dir * t;
                    if (POLE_TOP_Y..=GROUND_Y).contains(&p.y) {
                        best = t;
                        let shade = 0.25 + 0.15 * ((p.x - cx) * side / POLE_RADIUS).clamp(-1.0, 1.0);
                        hit = Some(([shade, shade, shade * 1.1], POLE));
                    }
                }
            }
        }
    }
    hit.unwrap_or_else(|| (sky_shade(dir), SKY))
}

/// Renders a frame seen from `pose` (camera-to-world) with 2x2 supersampling.
pub fn render(pose: &Pose, width: u32, height: u32) -> (RgbImage, LabelMap) {
    let focal = 0.45 * width as f64;
    let (cx, cy) = (width as f64 / 2.0, height as f64 / 2.0);
    let r: Matrix3<f64> = pose.rotation();
    let origin = pose.translation();
    let ray = |u: f64, v: f64| (r * Vector3::new((u - cx) / focal, (v - cy) / focal, 1.0)).normalize();
    let mut labels = LabelMap::zeros((height as usize, width as usize));
    let img = RgbImage::from_fn(width, height, |x, y| {
        let mut acc = [0.0; 3];
        for (du, dv) in [(0.25, 0.25), (0.75, 0.25), (0.25, 0.75), (0.75, 0.75)] {
            let (c, _) = trace(&origin, &ray(x as f64 + du, y as f64 + dv));
            for i in 0..3 {
                acc[i] += c[i] / 4.0;
            }
        }
        labels[[y as usize, x as usize]] = trace(&origin, &ray(x as f64 + 0.5, y as f64 + 0.5)).1;
        Rgb(acc.map(|c| (c.clamp(0.0, 1.0) * 255.0).round() as u8))
    });
    (img, labels)
}

/// Writes the full dataset (images, poses, labels, vocabulary) under `root`.
pub fn write_fixture(root: &Path, spec: &FixtureSpec) -> Result<()> {
    write_vocabulary(
        &root.join("labels").join("vocab.txt"),
        &VOCABULARY.iter().map(|&(id, n)| (id, n.to_string())).collect::<Vec<_>>(),
    )?;
    for (index, (id, frames)) in spec.sequences.iter().enumerate() {
        let raw = raw_trajectory(index, *frames);
        write_pose_file(&root.join("poses").join(format!("{id}.txt")), &trajectory(index, *frames))?;
        let image_dir = root.join("sequences").join(id).join("image_2");
        let label_dir = root.join("labels").join(id);
        crate::util::create_dir(&image_dir)?;
        crate::util::create_dir(&label_dir)?;
        for (k, pose) in raw.iter().enumerate() {
            let (img, labels) = render(pose, spec.width, spec.height);
            let name = format!("{k:06}.png");
            let path = image_dir.join(&name);
            img.save(&path).map_err(|e| Error::Image {
                path: path.clone(),
                message: e.to_string(),
            })?;
            write_label_map(&label_dir.join(&name), &labels)?;
        }
    }
    Ok(())
}
