//! Small 2D/3D geometry kit: vectors, rotation matrices, convex polygon
//! clipping, hulls and point-in-polygon tests used by the stability oracle,
//! the kinematics and the renderer.

use serde::{Deserialize, Serialize};

pub const EPS: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Vec2 {
    pub x: f64,
    pub y: f64,
}

impl Vec2 {
    pub fn new(x: f64, y: f64) -> Self {
        Self { x, y }
    }
    pub fn sub(self, o: Self) -> Self {
        Self::new(self.x - o.x, self.y - o.y)
    }
    pub fn add(self, o: Self) -> Self {
        Self::new(self.x + o.x, self.y + o.y)
    }
    pub fn scale(self, k: f64) -> Self {
        Self::new(self.x * k, self.y * k)
    }
    pub fn dot(self, o: Self) -> f64 {
        self.x * o.x + self.y * o.y
    }
    /// Z component of the 2D cross product.
    pub fn cross(self, o: Self) -> f64 {
        self.x * o.y - self.y * o.x
    }
    pub fn norm(self) -> f64 {
        self.dot(self).sqrt()
    }
    /// Rotation by `angle` radians, counterclockwise.
    pub fn rotate(self, angle: f64) -> Self {
        let (s, c) = angle.sin_cos();
        Self::new(c * self.x - s * self.y, s * self.x + c * self.y)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Vec3 {
    pub x: f64,
    pub y: f64,
    pub z: f64,
}

impl Vec3 {
    pub fn new(x: f64, y: f64, z: f64) -> Self {
        Self { x, y, z }
    }
    pub fn add(self, o: Self) -> Self {
        Self::new(self.x + o.x, self.y + o.y, self.z + o.z)
    }
    pub fn sub(self, o: Self) -> Self {
        Self::new(self.x - o.x, self.y - o.y, self.z - o.z)
    }
    pub fn scale(self, k: f64) -> Self {
        Self::new(self.x * k, self.y * k, self.z * k)
    }
    pub fn dot(self, o: Self) -> f64 {
        self.x * o.x + self.y * o.y + self.z * o.z
    }
    pub fn cross(self, o: Self) -> Self {
        Self::new(
            self.y * o.z - self.z * o.y,
            self.z * o.x - self.x * o.z,
            self.x * o.y - self.y * o.x,
        )
    }
    pub fn norm(self) -> f64 {
        self.dot(self).sqrt()
    }
    pub fn normalized(self) -> Self {
        let n = self.norm();
        if n < EPS {
            self
        } else {
            self.scale(1.0 / n)
        }
    }
}

/// Row-major 3x3 matrix.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Mat3 {
    pub m: [[f64; 3]; 3],
}

impl Mat3 {
    pub fn identity() -> Self {
        Self { m: [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]] }
    }

    /// Rotation about the vertical (z) axis.
    pub fn rot_z(angle: f64) -> Self {
        let (s, c) = angle.sin_cos();
        Self { m: [[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]] }
    }

    /// Rodrigues rotation about an arbitrary unit axis.
    pub fn rot_axis(axis: Vec3, angle: f64) -> Self {
        let a = axis.normalized();
        let (s, c) = angle.sin_cos();
        let t = 1.0 - c;
        let (x, y, z) = (a.x, a.y, a.z);
        Self {
            m: [
                [t * x * x + c, t * x * y - s * z, t * x * z + s * y],
                [t * x * y + s * z, t * y * y + c, t * y * z - s * x],
                [t * x * z - s * y, t * y * z + s * x, t * z * z + c],
            ],
        }
    }

    pub fn mul_vec(&self, v: Vec3) -> Vec3 {
        Vec3::new(
            self.m[0][0] * v.x + self.m[0][1] * v.y + self.m[0][2] * v.z,
            self.m[1][0] * v.x + self.m[1][1] * v.y + self.m[1][2] * v.z,
            self.m[2][0] * v.x + self.m[2][1] * v.y + self.m[2][2] * v.z,
        )
    }

    pub fn mul_mat(&self, o: &Mat3) -> Mat3 {
        let mut r = [[0.0; 3]; 3];
        for i in 0..3 {
            for j in 0..3 {
                r[i][j] = (0..3).map(|k| self.m[i][k] * o.m[k][j]).sum();
            }
        }
        Mat3 { m: r }
    }
}

/// Convex polygon as a CCW vertex loop. Empty means no area.
pub type Polygon = Vec<Vec2>;

/// Shoelace area; positive for CCW loops.
pub fn polygon_area(poly: &[Vec2]) -> f64 {
    if poly.len() < 3 {
        return 0.0;
    }
    let mut acc = 0.0;
    for i in 0..poly.len() {
        let a = poly[i];
        let b = poly[(i + 1) % poly.len()];
        acc += a.cross(b);
    }
    0.5 * acc
}

/// Axis-aligned rectangle centered at the origin, CCW.
pub fn rect(half_x: f64, half_y: f64) -> Polygon {
    vec![
        Vec2::new(-half_x, -half_y),
        Vec2::new(half_x, -half_y),
        Vec2::new(half_x, half_y),
        Vec2::new(-half_x, half_y),
    ]
}

/// Rotates then translates every vertex.
pub fn transform_poly(poly: &[Vec2], angle: f64, offset: Vec2) -> Polygon {
    poly.iter().map(|p| p.rotate(angle).add(offset)).collect()
}

/// Sutherland–Hodgman clip of a convex `subject` against a convex CCW `clip`.
pub fn clip_convex(subject: &[Vec2], clip: &[Vec2]) -> Polygon {
    let mut out: Polygon = subject.to_vec();
    for i in 0..clip.len() {
        if out.is_empty() {
            return out;
        }
        let a = clip[i];
        let b = clip[(i + 1) % clip.len()];
        let edge = b.sub(a);
        let input = std::mem::take(&mut out);
        for j in 0..input.len() {
            let p = input[j];
            let q = input[(j + 1) % input.len()];
            let side_p = edge.cross(p.sub(a));
            let side_q = edge.cross(q.sub(a));
            if side_p >= 0.0 {
                out.push(p);
            }
            if (side_p > 0.0 && side_q < 0.0) || (side_p < 0.0 && side_q > 0.0) {
                let t = side_p / (side_p - side_q);
                out.push(p.add(q.sub(p).scale(t)));
            }
        }
    }
    out
}

/// Andrew monotone-chain convex hull. Output is CCW without repeated endpoint.
pub fn convex_hull(points: &[Vec2]) -> Polygon {
    let mut pts = points.to_vec();
    pts.sort_by(|a, b| a.x.partial_cmp(&b.x).unwrap().then(a.y.partial_cmp(&b.y).unwrap()));
    pts.dedup_by(|a, b| (a.x - b.x).abs() < EPS && (a.y - b.y).abs() < EPS);
    let n = pts.len();
    if n < 3 {
        return pts;
    }
    let mut hull: Vec<Vec2> = Vec::with_capacity(2 * n);
    for &p in pts.iter() {
        while hull.len() >= 2 {
            let a = hull[hull.len() - 2];
            let b = hull[hull.len() - 1];
            if b.sub(a).cross(p.sub(a)) <= EPS {
                hull.pop();
            } else {
                break;
            }
        }
        hull.push(p);
    }
    let lower_len = hull.len() + 1;
    for &p in pts.iter().rev() {
        while hull.len() >= lower_len {
            let a = hull[hull.len() - 2];
            let b = hull[hull.len() - 1];
            if b.sub(a).cross(p.sub(a)) <= EPS {
                hull.pop();
            } else {
                break;
            }
        }
        hull.push(p);
    }
    hull.pop();
    hull
}

/// Signed distance from `p` to the boundary of a convex CCW polygon:
/// positive inside, negative outside. Also returns the index of the nearest
/// edge (segment from vertex i to vertex i+1).
pub fn signed_distance_convex(p: Vec2, poly: &[Vec2]) -> (f64, usize) {
    assert!(poly.len() >= 3, "polygon must have area");
    let mut inside = true;
    let mut best = f64::INFINITY;
    let mut best_edge = 0;
    for i in 0..poly.len() {
        let a = poly[i];
        let b = poly[(i + 1) % poly.len()];
        let edge = b.sub(a);
        if edge.cross(p.sub(a)) < 0.0 {
            inside = false;
        }
        let d = dist_point_segment(p, a, b);
        if d < best {
            best = d;
            best_edge = i;
        }
    }
    (if inside { best } else { -best }, best_edge)
}

fn dist_point_segment(p: Vec2, a: Vec2, b: Vec2) -> f64 {
    let ab = b.sub(a);
    let len2 = ab.dot(ab);
    let t = if len2 < EPS { 0.0 } else { (p.sub(a).dot(ab) / len2).clamp(0.0, 1.0) };
    p.sub(a.add(ab.scale(t))).norm()
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn clip_identical_rects() {
        let r = rect(1.0, 1.0);
        let c = clip_convex(&r, &r);
        assert_abs_diff_eq!(polygon_area(&c), 4.0, epsilon = 1e-12);
    }

    #[test]
    fn clip_disjoint_rects_is_empty() {
        let a = rect(0.5, 0.5);
        let b = transform_poly(&rect(0.5, 0.5), 0.0, Vec2::new(2.0, 0.0));
        assert_eq!(polygon_area(&clip_convex(&a, &b)), 0.0);
    }

    #[test]
    fn clip_offset_overlap_area() {
        // unit squares offset by 0.5 in x overlap in a 0.5 x 1 strip
        let a = rect(0.5, 0.5);
        let b = transform_poly(&rect(0.5, 0.5), 0.0, Vec2::new(0.5, 0.0));
        assert_abs_diff_eq!(polygon_area(&clip_convex(&a, &b)), 0.5, epsilon = 1e-12);
    }

    #[test]
    fn hull_of_square_plus_interior_point() {
        let mut pts = rect(1.0, 1.0);
        pts.push(Vec2::new(0.1, 0.2));
        let hull = convex_hull(&pts);
        assert_eq!(hull.len(), 4);
        assert_abs_diff_eq!(polygon_area(&hull), 4.0, epsilon = 1e-12);
    }

    #[test]
    fn signed_distance_signs() {
        let square = rect(1.0, 1.0);
        let (d_in, _) = signed_distance_convex(Vec2::new(0.0, 0.0), &square);
        assert_abs_diff_eq!(d_in, 1.0, epsilon = 1e-12);
        let (d_out, _) = signed_distance_convex(Vec2::new(2.0, 0.0), &square);
        assert_abs_diff_eq!(d_out, -1.0, epsilon = 1e-12);
    }

    #[test]
    fn rotation_preserves_norm() {
        let v = Vec3::new(0.3, -0.4, 0.5);
        let r = Mat3::rot_axis(Vec3::new(0.2, 0.5, 0.8), 1.1);
        assert_abs_diff_eq!(r.mul_vec(v).norm(), v.norm(), epsilon = 1e-12);
    }
}
