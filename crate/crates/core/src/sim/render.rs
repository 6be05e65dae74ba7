//! Nadir pinhole depth camera riding above the fingertips.

use serde::{Deserialize, Serialize};

use super::{Scene, FINGER_DEPTH, FINGER_LENGTH, FINGER_THICKNESS};

pub const IMAGE_SIZE: usize = 64;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum PixelLabel {
    Plane,
    Finger,
    Object(usize),
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Camera {
    /// Height of the optical centre above the fingertips.
    pub offset: f64,
    /// `tan` of the half field of view (square image).
    pub tan_half_fov: f64,
}

impl Default for Camera {
    /// Sized so a 20 cm workspace fills the image from 16 cm fingertip height.
    fn default() -> Self {
        Self {
            offset: 0.05,
            tan_half_fov: 0.1 / 0.21,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DepthImage {
    /// Row-major distances along the optical axis, metres.
    pub depth: Vec<f64>,
    pub labels: Vec<PixelLabel>,
    /// Pixels whose geometry lies behind the camera; rendered as plane.
    pub invalid: Vec<bool>,
}

impl DepthImage {
    pub fn invalid_count(&self) -> usize {
        self.invalid.iter().filter(|&&b| b).count()
    }
}

impl Camera {
    /// Ray slope of pixel `(row, col)` in the gripper frame `(u, v)`.
    pub fn ray(&self, row: usize, col: usize) -> [f64; 2] {
        let n = IMAGE_SIZE as f64;
        let tx = ((col as f64 + 0.5) / n * 2.0 - 1.0) * self.tan_half_fov;
        let ty = (1.0 - (row as f64 + 0.5) / n * 2.0) * self.tan_half_fov;
        [tx, ty]
    }

    pub fn height(&self, scene: &Scene) -> f64 {
        scene.gripper.z + self.offset
    }

    pub fn render(&self, scene: &Scene) -> DepthImage {
        let n = IMAGE_SIZE * IMAGE_SIZE;
        let mut img = DepthImage {
            depth: vec![0.0; n],
            labels: vec![PixelLabel::Plane; n],
            invalid: vec![false; n],
        };
        let g = &scene.gripper;
        let cam_z = self.height(scene);
        let (sy, cy) = g.yaw.sin_cos();
        let u = [cy, sy];
        let v = [-sy, cy];

        struct Prepared {
            top: f64,
            cx: f64,
            cy: f64,
            cos: f64,
            sin: f64,
            r2: f64,
        }
        let objs: Vec<Prepared> = scene
            .objects
            .iter()
            .map(|o| {
                let (s, c) = o.yaw.sin_cos();
                Prepared {
                    top: o.top(),
                    cx: o.x,
                    cy: o.y,
                    cos: c,
                    sin: s,
                    r2: o.footprint.bounding_radius().powi(2),
                }
            })
            .collect();

        // Finger columns in the gripper frame.
        let off = g.width / 2.0;
        let fingers = [
            (off, off + FINGER_THICKNESS),
            (-off - FINGER_THICKNESS, -off),
        ];
        let (b0, b1) = (-FINGER_DEPTH / 2.0, FINGER_DEPTH / 2.0);
        let (d_near, d_far) = (self.offset - FINGER_LENGTH, self.offset);

        for row in 0..IMAGE_SIZE {
            for col in 0..IMAGE_SIZE {
                let k = row * IMAGE_SIZE + col;
                let [tx, ty] = self.ray(row, col);
                let dir = [tx * u[0] + ty * v[0], tx * u[1] + ty * v[1]];
                let mut best = cam_z;
                let mut label = PixelLabel::Plane;
                for (i, (o, p)) in scene.objects.iter().zip(&objs).enumerate() {
                    let d = cam_z - p.top;
                    let at = if d > 0.0 { d } else { cam_z };
                    let wx = g.x + at * dir[0] - p.cx;
                    let wy = g.y + at * dir[1] - p.cy;
                    if wx * wx + wy * wy > p.r2 {
                        continue;
                    }
                    let local = [p.cos * wx + p.sin * wy, -p.sin * wx + p.cos * wy];
                    if !o.footprint.contains_local(local) {
                        continue;
                    }
                    if d <= 0.0 {
                        img.invalid[k] = true;
                    } else if d < best {
                        best = d;
                        label = PixelLabel::Object(i);
                    }
                }
                for &(a0, a1) in &fingers {
                    if let Some(d) = slab_hit(tx, a0, a1, ty, b0, b1, d_near, d_far) {
                        if d < best {
                            best = d;
                            label = PixelLabel::Finger;
                        }
                    }
                }
                if img.invalid[k] && label != PixelLabel::Finger {
                    best = cam_z;
                    label = PixelLabel::Plane;
                }
                img.depth[k] = best;
                img.labels[k] = label;
            }
        }
        img
    }
}

/// First depth in `[d0, d1]` at which `(tx·d, ty·d)` lies in `[a0, a1] × [b0, b1]`.
#[allow(clippy::too_many_arguments)]
fn slab_hit(tx: f64, a0: f64, a1: f64, ty: f64, b0: f64, b1: f64, d0: f64, d1: f64) -> Option<f64> {
    let mut lo = d0;
    let mut hi = d1;
    for (t, c0, c1) in [(tx, a0, a1), (ty, b0, b1)] {
        if t == 0.0 {
            if c0 > 0.0 || c1 < 0.0 {
                return None;
            }
        } else {
            let (e0, e1) = (c0 / t, c1 / t);
            lo = lo.max(e0.min(e1));
            hi = hi.min(e0.max(e1));
        }
    }
    (lo <= hi).then_some(lo)
}

#[cfg(test)]
mod tests {
    use super::super::{Footprint, RigidObject, Scene};
    use super::*;

    #[test]
    fn empty_scene_is_flat() {
        let s = Scene::empty(0.2, 0.11);
        let img = Camera::default().render(&s);
        for (d, l) in img.depth.iter().zip(&img.labels) {
            if *l == PixelLabel::Plane {
                assert!((d - 0.16).abs() < 1e-15);
            }
        }
        assert_eq!(img.invalid_count(), 0);
    }

    #[test]
    fn box_top_depth() {
        let mut s = Scene::empty(0.2, 0.05);
        s.objects.push(RigidObject {
            id: 0,
            footprint: Footprint::Box { half_x: 0.01, half_y: 0.01 },
            height: 0.02,
            x: 0.0,
            y: 0.0,
            z: 0.0,
            yaw: 0.3,
            attached: false,
        });
        let img = Camera::default().render(&s);
        let mut hits = 0;
        for (d, l) in img.depth.iter().zip(&img.labels) {
            if *l == PixelLabel::Object(0) {
                assert_eq!(*d, 0.10 - 0.02);
                hits += 1;
            }
        }
        assert!(hits > 100);
    }

    #[test]
    fn closed_fingers_are_visible() {
        let mut s = Scene::empty(0.2, 0.05);
        s.gripper.width = 0.0;
        let img = Camera::default().render(&s);
        assert!(img.labels.iter().any(|l| *l == PixelLabel::Finger));
    }
}
