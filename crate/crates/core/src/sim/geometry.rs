//! Planar convex geometry: separating-axis overlap, slab clipping.

pub type Vec2 = [f64; 2];

#[inline]
pub fn dot(a: Vec2, b: Vec2) -> f64 {
    a[0] * b[0] + a[1] * b[1]
}

#[inline]
pub fn sub(a: Vec2, b: Vec2) -> Vec2 {
    [a[0] - b[0], a[1] - b[1]]
}

#[inline]
pub fn add(a: Vec2, b: Vec2) -> Vec2 {
    [a[0] + b[0], a[1] + b[1]]
}

#[inline]
pub fn scale(a: Vec2, s: f64) -> Vec2 {
    [a[0] * s, a[1] * s]
}

#[inline]
pub fn norm(a: Vec2) -> f64 {
    a[0].hypot(a[1])
}

/// Rotates `p` counter-clockwise by `angle`.
#[inline]
pub fn rotate(p: Vec2, angle: f64) -> Vec2 {
    let (s, c) = angle.sin_cos();
    [c * p[0] - s * p[1], s * p[0] + c * p[1]]
}

/// A convex region in the plane.
#[derive(Clone, Debug, PartialEq)]
pub enum Convex {
    /// Vertices in counter-clockwise order.
    Polygon(Vec<Vec2>),
    Circle { center: Vec2, radius: f64 },
}

impl Convex {
    /// Axis-aligned rectangle rotated by `angle` about `center`.
    pub fn rect(center: Vec2, half: Vec2, angle: f64) -> Self {
        let corners = [
            [-half[0], -half[1]],
            [half[0], -half[1]],
            [half[0], half[1]],
            [-half[0], half[1]],
        ];
        Convex::Polygon(corners.iter().map(|&c| add(center, rotate(c, angle))).collect())
    }

    /// Projection interval onto unit axis `n`.
    fn project(&self, n: Vec2) -> (f64, f64) {
        match self {
            Convex::Polygon(vs) => vs.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| {
                let p = dot(v, n);
                (lo.min(p), hi.max(p))
            }),
            Convex::Circle { center, radius } => {
                let p = dot(*center, n);
                (p - radius, p + radius)
            }
        }
    }

    /// Expresses the shape in a frame with origin `origin` and x-axis at angle `angle`.
    pub fn to_frame(&self, origin: Vec2, angle: f64) -> Convex {
        match self {
            Convex::Polygon(vs) => {
                Convex::Polygon(vs.iter().map(|&v| rotate(sub(v, origin), -angle)).collect())
            }
            Convex::Circle { center, radius } => Convex::Circle {
                center: rotate(sub(*center, origin), -angle),
                radius: *radius,
            },
        }
    }
}

fn edge_normals(vs: &[Vec2]) -> impl Iterator<Item = Vec2> + '_ {
    (0..vs.len()).filter_map(move |i| {
        let e = sub(vs[(i + 1) % vs.len()], vs[i]);
        let l = norm(e);
        (l > 0.0).then(|| [e[1] / l, -e[0] / l])
    })
}

/// Minimal translation that moves `b` out of `a`, or `None` when their
/// interiors are disjoint.
pub fn mtv(a: &Convex, b: &Convex) -> Option<Vec2> {
    let mut axes: Vec<Vec2> = Vec::new();
    match (a, b) {
        (Convex::Circle { center: ca, radius: ra }, Convex::Circle { center: cb, radius: rb }) => {
            let d = sub(*cb, *ca);
            let dist = norm(d);
            let depth = ra + rb - dist;
            if depth <= 0.0 {
                return None;
            }
            let n = if dist > 0.0 { scale(d, 1.0 / dist) } else { [1.0, 0.0] };
            return Some(scale(n, depth));
        }
        (Convex::Polygon(vs), Convex::Circle { center, .. })
        | (Convex::Circle { center, .. }, Convex::Polygon(vs)) => {
            axes.extend(edge_normals(vs));
            let nearest = vs
                .iter()
                .copied()
                .min_by(|p, q| norm(sub(*p, *center)).total_cmp(&norm(sub(*q, *center))))
                .expect("polygon has vertices");
            let d = sub(*center, nearest);
            let l = norm(d);
            if l > 0.0 {
                axes.push(scale(d, 1.0 / l));
            }
        }
        (Convex::Polygon(va), Convex::Polygon(vb)) => {
            axes.extend(edge_normals(va));
            axes.extend(edge_normals(vb));
        }
    }
    let mut best: Option<(f64, Vec2)> = None;
    for n in axes {
        let (a0, a1) = a.project(n);
        let (b0, b1) = b.project(n);
        let overlap = a1.min(b1) - a0.max(b0);
        if overlap <= 0.0 {
            return None;
        }
        // Push b towards whichever side needs the smaller move.
        let forward = a1 - b0;
        let backward = b1 - a0;
        let (depth, dir) = if forward <= backward { (forward, n) } else { (backward, scale(n, -1.0)) };
        if best.is_none_or(|(d, _)| depth < d) {
            best = Some((depth, dir));
        }
    }
    let (depth, dir) = best?;
    Some(scale(dir, depth))
}

pub fn overlaps(a: &Convex, b: &Convex) -> bool {
    mtv(a, b).is_some()
}

/// Clips a polygon to the half-plane `n·p ≤ c`.
fn clip(poly: &[Vec2], n: Vec2, c: f64) -> Vec<Vec2> {
    let mut out = Vec::with_capacity(poly.len() + 2);
    for i in 0..poly.len() {
        let p = poly[i];
        let q = poly[(i + 1) % poly.len()];
        let dp = dot(n, p) - c;
        let dq = dot(n, q) - c;
        if dp <= 0.0 {
            out.push(p);
        }
        if (dp < 0.0 && dq > 0.0) || (dp > 0.0 && dq < 0.0) {
            let t = dp / (dp - dq);
            out.push(add(p, scale(sub(q, p), t)));
        }
    }
    out
}

/// Extent along x of `shape ∩ {|x| ≤ half_w, |y| ≤ half_d}`, as `(min, max)`.
///
/// `shape` must already be expressed in the slab frame.
pub fn slab_extent(shape: &Convex, half_w: f64, half_d: f64) -> Option<(f64, f64)> {
    match shape {
        Convex::Polygon(vs) => {
            let mut poly = vs.clone();
            for (n, c) in [
                ([1.0, 0.0], half_w),
                ([-1.0, 0.0], half_w),
                ([0.0, 1.0], half_d),
                ([0.0, -1.0], half_d),
            ] {
                poly = clip(&poly, n, c);
                if poly.is_empty() {
                    return None;
                }
            }
            let lo = poly.iter().map(|p| p[0]).fold(f64::INFINITY, f64::min);
            let hi = poly.iter().map(|p| p[0]).fold(f64::NEG_INFINITY, f64::max);
            Some((lo, hi))
        }
        Convex::Circle { center, radius } => {
            // Widest chord within the y band is at the band point closest to the centre.
            let y = center[1].clamp(-half_d, half_d);
            let dy = y - center[1];
            if dy.abs() > *radius {
                return None;
            }
            let half = (radius * radius - dy * dy).sqrt();
            let lo = (center[0] - half).max(-half_w);
            let hi = (center[0] + half).min(half_w);
            (lo <= hi).then_some((lo, hi))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rotation_quarter_turn() {
        let p = rotate([0.01, 0.0], std::f64::consts::FRAC_PI_2);
        assert!(p[0].abs() < 1e-18 && (p[1] - 0.01).abs() < 1e-18);
    }

    #[test]
    fn mtv_separates_boxes() {
        let a = Convex::rect([0.0, 0.0], [1.0, 1.0], 0.0);
        let b = Convex::rect([1.5, 0.2], [1.0, 1.0], 0.0);
        let m = mtv(&a, &b).unwrap();
        assert!((m[0] - 0.5).abs() < 1e-12 && m[1].abs() < 1e-12);
        let moved = Convex::rect([1.5 + m[0], 0.2 + m[1]], [1.0, 1.0], 0.0);
        assert!(mtv(&a, &moved).is_none());
    }

    #[test]
    fn mtv_circle_polygon() {
        let a = Convex::rect([0.0, 0.0], [1.0, 1.0], 0.0);
        let b = Convex::Circle { center: [0.0, 1.5], radius: 1.0 };
        let m = mtv(&a, &b).unwrap();
        assert!(m[0].abs() < 1e-12 && (m[1] - 0.5).abs() < 1e-12);
        // Corner region: diagonal push.
        let c = Convex::Circle { center: [1.5, 1.5], radius: 1.0 };
        let m = mtv(&a, &c).unwrap();
        assert!(m[0] > 0.0 && (m[0] - m[1]).abs() < 1e-12);
        assert!(mtv(&a, &Convex::Circle { center: [1.8, 1.8], radius: 1.0 }).is_none());
    }

    #[test]
    fn slab_extent_of_disc_and_box() {
        let disc = Convex::Circle { center: [0.0, 0.0], radius: 0.01 };
        let (lo, hi) = slab_extent(&disc, 0.025, 0.008).unwrap();
        assert!((hi - lo - 0.02).abs() < 1e-15);
        let offset_box = Convex::rect([0.0, 0.026], [0.015, 0.015], 0.0);
        assert!(slab_extent(&offset_box, 0.025, 0.008).is_none());
        let wide = Convex::rect([0.0, 0.0], [0.04, 0.01], 0.0);
        let (lo, hi) = slab_extent(&wide, 0.025, 0.008).unwrap();
        assert_eq!((lo, hi), (-0.025, 0.025));
    }
}
