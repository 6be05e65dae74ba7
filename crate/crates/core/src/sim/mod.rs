//! Quasi-static 2.5-D picking world.
//!
//! Objects are flat-topped extrusions resting on the plane `z = 0`. The
//! gripper floats; its `z` is the fingertip height. Fingers are rectangular
//! columns on either side of the jaw axis `u = (cos yaw, sin yaw)`.

pub mod geometry;
mod render;

use std::f64::consts::{PI, TAU};

use rand::Rng;
use serde::{Deserialize, Serialize};

use geometry::{add, rotate, scale, slab_extent, sub, Convex, Vec2};
pub use render::{Camera, DepthImage, PixelLabel, IMAGE_SIZE};

/// Maximum jaw opening.
pub const W_MAX: f64 = 0.05;
/// Minimum jaw-axis extent of a graspable slice.
pub const W_MIN: f64 = 0.001;
/// Finger thickness along the jaw axis.
pub const FINGER_THICKNESS: f64 = 0.005;
/// Finger depth across the jaw axis; the closing band is this wide.
pub const FINGER_DEPTH: f64 = 0.016;
/// Vertical length of the fingers above the tips.
pub const FINGER_LENGTH: f64 = 0.045;
/// Gripper height ceiling.
pub const Z_MAX: f64 = 0.5;
/// Smallest allowed footprint dimension.
pub const MIN_DIM: f64 = 0.005;
/// Largest allowed footprint dimension.
pub const MAX_DIM: f64 = 0.04;

const SPAWN_ATTEMPTS: usize = 1000;
const SHRINK: f64 = 0.85;
/// Extra separation applied when resolving pushes, so resolved pairs stay disjoint.
const PUSH_SLACK: f64 = 1e-9;
const PUSH_PASSES: usize = 8;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Footprint {
    Disc { radius: f64 },
    Box { half_x: f64, half_y: f64 },
    Polygon { sides: u32, circumradius: f64 },
}

impl Footprint {
    pub fn bounding_radius(&self) -> f64 {
        match *self {
            Footprint::Disc { radius } => radius,
            Footprint::Box { half_x, half_y } => half_x.hypot(half_y),
            Footprint::Polygon { circumradius, .. } => circumradius,
        }
    }

    /// Smallest and largest characteristic dimensions (diameter, side lengths).
    pub fn dims(&self) -> (f64, f64) {
        match *self {
            Footprint::Disc { radius } => (2.0 * radius, 2.0 * radius),
            Footprint::Box { half_x, half_y } => {
                (2.0 * half_x.min(half_y), 2.0 * half_x.max(half_y))
            }
            Footprint::Polygon { sides, circumradius } => {
                let side = 2.0 * circumradius * (PI / sides as f64).sin();
                (side, 2.0 * circumradius)
            }
        }
    }

    fn scaled(&self, s: f64) -> Self {
        match *self {
            Footprint::Disc { radius } => Footprint::Disc { radius: radius * s },
            Footprint::Box { half_x, half_y } => Footprint::Box {
                half_x: half_x * s,
                half_y: half_y * s,
            },
            Footprint::Polygon { sides, circumradius } => Footprint::Polygon {
                sides,
                circumradius: circumradius * s,
            },
        }
    }

    /// World-frame region at pose `(x, y, yaw)`.
    pub fn shape(&self, center: Vec2, yaw: f64) -> Convex {
        match *self {
            Footprint::Disc { radius } => Convex::Circle { center, radius },
            Footprint::Box { half_x, half_y } => Convex::rect(center, [half_x, half_y], yaw),
            Footprint::Polygon { sides, circumradius } => Convex::Polygon(
                (0..sides)
                    .map(|k| {
                        let a = yaw + TAU * k as f64 / sides as f64;
                        add(center, [circumradius * a.cos(), circumradius * a.sin()])
                    })
                    .collect(),
            ),
        }
    }

    /// Point-in-footprint test in the object's local frame.
    pub fn contains_local(&self, p: Vec2) -> bool {
        match *self {
            Footprint::Disc { radius } => p[0] * p[0] + p[1] * p[1] <= radius * radius,
            Footprint::Box { half_x, half_y } => p[0].abs() <= half_x && p[1].abs() <= half_y,
            Footprint::Polygon { sides, circumradius } => {
                let n = sides as f64;
                let apothem = circumradius * (PI / n).cos();
                (0..sides).all(|k| {
                    let a = TAU * (k as f64 + 0.5) / n;
                    p[0] * a.cos() + p[1] * a.sin() <= apothem
                })
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RigidObject {
    pub id: usize,
    pub footprint: Footprint,
    pub height: f64,
    pub x: f64,
    pub y: f64,
    /// Bottom-face height.
    pub z: f64,
    pub yaw: f64,
    pub attached: bool,
}

impl RigidObject {
    pub fn top(&self) -> f64 {
        self.z + self.height
    }

    pub fn center(&self) -> Vec2 {
        [self.x, self.y]
    }

    pub fn shape(&self) -> Convex {
        self.footprint.shape(self.center(), self.yaw)
    }

    pub fn contains_xy(&self, p: Vec2) -> bool {
        self.footprint.contains_local(rotate(sub(p, self.center()), -self.yaw))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GripperState {
    pub x: f64,
    pub y: f64,
    /// Fingertip height.
    pub z: f64,
    pub yaw: f64,
    pub width: f64,
    /// Set while a closed jaw is blocked by a held object.
    pub fingers_stalled: bool,
}

impl GripperState {
    pub fn center(&self) -> Vec2 {
        [self.x, self.y]
    }

    /// Jaw-axis unit vector.
    pub fn jaw_axis(&self) -> Vec2 {
        [self.yaw.cos(), self.yaw.sin()]
    }

    /// Footprints of the two finger columns.
    pub fn finger_shapes(&self) -> [Convex; 2] {
        let off = self.width / 2.0 + FINGER_THICKNESS / 2.0;
        let half = [FINGER_THICKNESS / 2.0, FINGER_DEPTH / 2.0];
        let c = self.center();
        [
            Convex::rect(add(c, rotate([off, 0.0], self.yaw)), half, self.yaw),
            Convex::rect(add(c, rotate([-off, 0.0], self.yaw)), half, self.yaw),
        ]
    }
}

/// Pose of the held object relative to the gripper frame.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Attachment {
    pub object: usize,
    pub offset: Vec2,
    pub dyaw: f64,
    pub dz: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GripperCommand {
    Open,
    Close,
}

/// A decoded motion command in metres/radians, expressed in the gripper frame.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct WorldAction {
    pub dx: f64,
    pub dy: f64,
    pub dz: f64,
    pub dyaw: f64,
    pub command: GripperCommand,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct StepOutcome {
    /// A finger displaced at least one object.
    pub contact: bool,
    /// The commanded descent was cut short by a surface under the fingers.
    pub stalled_down: bool,
    /// The jaw is closed on an object after this step's close command.
    pub grasp_detected: bool,
    /// A held object was dropped by an open command.
    pub released: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Scene {
    pub extent: f64,
    pub objects: Vec<RigidObject>,
    pub gripper: GripperState,
    pub attachment: Option<Attachment>,
    /// Objects shrunk or dropped because rejection sampling ran out of attempts.
    pub spawn_warnings: u32,
}

/// Ranges for procedurally sampled objects.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ObjectRanges {
    /// Largest footprint dimension.
    pub size: (f64, f64),
    pub height: (f64, f64),
    /// Box short/long side ratio.
    pub aspect: (f64, f64),
}

impl Default for ObjectRanges {
    fn default() -> Self {
        Self {
            size: (0.01, 0.035),
            height: (0.02, 0.04),
            aspect: (0.5, 1.0),
        }
    }
}

fn sample_footprint<R: Rng + ?Sized>(rng: &mut R, ranges: &ObjectRanges) -> Footprint {
    let size = rng.random_range(ranges.size.0..=ranges.size.1);
    match rng.random_range(0..3) {
        0 => Footprint::Disc { radius: size / 2.0 },
        1 => {
            let aspect = rng.random_range(ranges.aspect.0..=ranges.aspect.1);
            Footprint::Box {
                half_x: size / 2.0,
                half_y: size * aspect / 2.0,
            }
        }
        _ => Footprint::Polygon {
            sides: rng.random_range(3..=6),
            circumradius: size / 2.0,
        },
    }
}

impl Scene {
    /// Empty workspace with the gripper open at `(0, 0, h_robot)`.
    pub fn empty(extent: f64, h_robot: f64) -> Self {
        Self {
            extent,
            objects: Vec::new(),
            gripper: GripperState {
                x: 0.0,
                y: 0.0,
                z: h_robot.max(0.0),
                yaw: 0.0,
                width: W_MAX,
                fingers_stalled: false,
            },
            attachment: None,
            spawn_warnings: 0,
        }
    }

    /// Samples `n ~ U{1..n_max}` non-overlapping objects whose footprints lie
    /// inside the `extent × extent` square where possible.
    pub fn spawn<R: Rng + ?Sized>(
        rng: &mut R,
        n_max: u32,
        extent: f64,
        h_robot: f64,
        ranges: &ObjectRanges,
    ) -> Self {
        let n = rng.random_range(1..=n_max.max(1));
        Self::spawn_n(rng, n, extent, h_robot, ranges)
    }

    /// Like [`Scene::spawn`] with exactly `n` attempted objects.
    pub fn spawn_n<R: Rng + ?Sized>(
        rng: &mut R,
        n: u32,
        extent: f64,
        h_robot: f64,
        ranges: &ObjectRanges,
    ) -> Self {
        let mut scene = Self::empty(extent, h_robot);
        for _ in 0..n {
            let mut footprint = sample_footprint(rng, ranges);
            let height = rng.random_range(ranges.height.0..=ranges.height.1);
            let yaw = rng.random_range(0.0..TAU);
            let placed = 'outer: loop {
                let half = (extent / 2.0 - footprint.bounding_radius()).max(0.0);
                for _ in 0..SPAWN_ATTEMPTS {
                    let x = if half > 0.0 { rng.random_range(-half..=half) } else { 0.0 };
                    let y = if half > 0.0 { rng.random_range(-half..=half) } else { 0.0 };
                    let shape = footprint.shape([x, y], yaw);
                    if scene.objects.iter().all(|o| !geometry::overlaps(&o.shape(), &shape)) {
                        break 'outer Some((x, y));
                    }
                }
                scene.spawn_warnings += 1;
                let shrunk = footprint.scaled(SHRINK);
                if shrunk.dims().0 < MIN_DIM {
                    break None;
                }
                footprint = shrunk;
            };
            if let Some((x, y)) = placed {
                scene.objects.push(RigidObject {
                    id: scene.objects.len(),
                    footprint,
                    height,
                    x,
                    y,
                    z: 0.0,
                    yaw,
                    attached: false,
                });
            }
        }
        scene
    }

    /// Largest bottom-face height over all objects.
    pub fn max_object_height(&self) -> f64 {
        self.objects.iter().map(|o| o.z).fold(0.0, f64::max)
    }

    pub fn attached_object(&self) -> Option<&RigidObject> {
        self.attachment.map(|a| &self.objects[a.object])
    }

    fn sync_attached(&mut self) {
        if let Some(a) = self.attachment {
            let g = &self.gripper;
            let c = add(g.center(), rotate(a.offset, g.yaw));
            let (yaw, z) = (g.yaw + a.dyaw, g.z + a.dz);
            let o = &mut self.objects[a.object];
            o.x = c[0];
            o.y = c[1];
            o.yaw = yaw;
            o.z = z;
        }
    }

    /// Pushes free objects out of the fingers, then out of each other.
    /// Returns whether any finger moved an object.
    fn resolve_pushes(&mut self) -> bool {
        let tip = self.gripper.z;
        let fingers = self.gripper.finger_shapes();
        let held = self.attachment.map(|a| a.object);
        let mut contact = false;
        for i in 0..self.objects.len() {
            if Some(i) == held || self.objects[i].top() <= tip {
                continue;
            }
            for f in &fingers {
                if let Some(m) = geometry::mtv(f, &self.objects[i].shape()) {
                    let m = add(m, scale(unit(m), PUSH_SLACK));
                    let o = &mut self.objects[i];
                    o.x += m[0];
                    o.y += m[1];
                    contact = true;
                }
            }
        }
        if contact {
            for _ in 0..PUSH_PASSES {
                let mut moved = false;
                for i in 0..self.objects.len() {
                    for j in 0..self.objects.len() {
                        if i == j || Some(j) == held || Some(i) == held {
                            continue;
                        }
                        let (a, b) = (&self.objects[i], &self.objects[j]);
                        if a.z != b.z {
                            continue;
                        }
                        if let Some(m) = geometry::mtv(&a.shape(), &b.shape()) {
                            let m = add(m, scale(unit(m), PUSH_SLACK));
                            let o = &mut self.objects[j];
                            o.x += m[0];
                            o.y += m[1];
                            moved = true;
                        }
                    }
                }
                if !moved {
                    break;
                }
            }
        }
        contact
    }

    /// Lowest fingertip height reachable from the current pose.
    fn descent_floor(&self) -> f64 {
        let tip = self.gripper.z;
        let fingers = self.gripper.finger_shapes();
        let held = self.attachment;
        let mut floor: f64 = 0.0;
        for (i, o) in self.objects.iter().enumerate() {
            if held.is_some_and(|a| a.object == i) {
                continue;
            }
            let top = o.top();
            let shape = o.shape();
            if top <= tip && fingers.iter().any(|f| geometry::overlaps(f, &shape)) {
                floor = floor.max(top);
            }
            if let Some(a) = held {
                let carried = &self.objects[a.object];
                if top <= carried.z && geometry::overlaps(&carried.shape(), &shape) {
                    floor = floor.max(top - a.dz);
                }
            }
        }
        if let Some(a) = held {
            floor = floor.max(-a.dz);
        }
        floor
    }

    /// Grasp candidate for a jaw closing now: `(object, slice min, slice max)`
    /// in jaw-axis coordinates relative to the gripper centre.
    pub fn grasp_candidate(&self) -> Option<(usize, f64, f64)> {
        let g = &self.gripper;
        let mut best: Option<(usize, f64, f64)> = None;
        for (i, o) in self.objects.iter().enumerate() {
            if o.attached || g.z >= o.top() {
                continue;
            }
            let local = o.shape().to_frame(g.center(), g.yaw);
            if let Some((lo, hi)) = slab_extent(&local, g.width / 2.0, FINGER_DEPTH / 2.0) {
                if hi - lo >= W_MIN && best.is_none_or(|(_, blo, bhi)| hi - lo > bhi - blo) {
                    best = Some((i, lo, hi));
                }
            }
        }
        best
    }

    /// Whether closing the jaw now would stall on an object.
    pub fn detect_grasp(&self) -> bool {
        self.grasp_candidate().is_some()
    }

    fn close(&mut self) -> bool {
        if self.attachment.is_some() {
            self.gripper.fingers_stalled = true;
            return true;
        }
        match self.grasp_candidate() {
            Some((i, lo, hi)) => {
                let g = self.gripper.clone();
                let mid = (lo + hi) / 2.0;
                let u = g.jaw_axis();
                let o = &mut self.objects[i];
                o.x -= u[0] * mid;
                o.y -= u[1] * mid;
                o.attached = true;
                let offset = rotate(sub(o.center(), g.center()), -g.yaw);
                self.attachment = Some(Attachment {
                    object: i,
                    offset,
                    dyaw: o.yaw - g.yaw,
                    dz: o.z - g.z,
                });
                self.gripper.width = hi - lo;
                self.gripper.fingers_stalled = true;
                true
            }
            None => {
                self.gripper.width = 0.0;
                self.gripper.fingers_stalled = false;
                false
            }
        }
    }

    fn open(&mut self) -> bool {
        let released = if let Some(a) = self.attachment.take() {
            let o = &mut self.objects[a.object];
            o.attached = false;
            o.z = 0.0;
            true
        } else {
            false
        };
        self.gripper.width = W_MAX;
        self.gripper.fingers_stalled = false;
        released
    }

    /// Integrates one control step.
    pub fn step(&mut self, action: &WorldAction) -> StepOutcome {
        let mut out = StepOutcome::default();
        let d = rotate([action.dx, action.dy], self.gripper.yaw);
        self.gripper.x += d[0];
        self.gripper.y += d[1];
        self.gripper.yaw = wrap_angle(self.gripper.yaw + action.dyaw);
        self.sync_attached();
        out.contact |= self.resolve_pushes();

        let target = self.gripper.z + action.dz;
        if action.dz < 0.0 {
            let floor = self.descent_floor();
            if target < floor {
                self.gripper.z = floor.min(self.gripper.z);
                out.stalled_down = true;
            } else {
                self.gripper.z = target;
            }
        } else {
            self.gripper.z = target.min(Z_MAX);
        }
        self.sync_attached();

        match action.command {
            GripperCommand::Close => {
                out.grasp_detected = self.close();
            }
            GripperCommand::Open => {
                out.released = self.open();
            }
        }
        out.contact |= self.resolve_pushes();
        out
    }

    /// Drops any held object onto the table and returns the gripper to its
    /// open start pose above the origin.
    pub fn reset_gripper(&mut self, h_robot: f64) {
        if let Some(a) = self.attachment.take() {
            let o = &mut self.objects[a.object];
            o.attached = false;
            o.z = 0.0;
        }
        self.gripper = Self::empty(self.extent, h_robot).gripper;
        self.resolve_pushes();
    }

    /// Removes an object, remapping ids and any attachment.
    pub fn remove_object(&mut self, index: usize) {
        self.objects.remove(index);
        match self.attachment {
            Some(a) if a.object == index => {
                self.attachment = None;
                self.gripper.fingers_stalled = false;
            }
            Some(ref mut a) if a.object > index => a.object -= 1,
            _ => {}
        }
        for (i, o) in self.objects.iter_mut().enumerate() {
            o.id = i;
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("scene serializes")
    }

    pub fn from_json(s: &str) -> serde_json::Result<Self> {
        serde_json::from_str(s)
    }
}

fn unit(v: Vec2) -> Vec2 {
    let n = geometry::norm(v);
    if n > 0.0 {
        scale(v, 1.0 / n)
    } else {
        [0.0, 0.0]
    }
}

/// Wraps an angle into `(-π, π]`.
pub fn wrap_angle(a: f64) -> f64 {
    let mut a = a % TAU;
    if a <= -PI {
        a += TAU;
    } else if a > PI {
        a -= TAU;
    }
    a
}
