//! Analytic surface patches and curve segments.

use std::f64::consts::PI;
use std::ops::{Add, Mul, Neg, Sub};

use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct V3(pub [f64; 3]);

impl V3 {
    pub const ZERO: V3 = V3([0.0; 3]);
    pub const X: V3 = V3([1.0, 0.0, 0.0]);
    pub const Y: V3 = V3([0.0, 1.0, 0.0]);
    pub const Z: V3 = V3([0.0, 0.0, 1.0]);

    pub fn new(x: f64, y: f64, z: f64) -> Self {
        V3([x, y, z])
    }
    pub fn dot(self, o: V3) -> f64 {
        self.0[0] * o.0[0] + self.0[1] * o.0[1] + self.0[2] * o.0[2]
    }
    pub fn cross(self, o: V3) -> V3 {
        let (a, b) = (self.0, o.0);
        V3([a[1] * b[2] - a[2] * b[1], a[2] * b[0] - a[0] * b[2], a[0] * b[1] - a[1] * b[0]])
    }
    pub fn norm(self) -> f64 {
        self.dot(self).sqrt()
    }
    pub fn unit(self) -> V3 {
        self * (1.0 / self.norm())
    }
    pub fn is_finite(self) -> bool {
        self.0.iter().all(|x| x.is_finite())
    }
}

impl Add for V3 {
    type Output = V3;
    fn add(self, o: V3) -> V3 {
        V3([self.0[0] + o.0[0], self.0[1] + o.0[1], self.0[2] + o.0[2]])
    }
}
impl Sub for V3 {
    type Output = V3;
    fn sub(self, o: V3) -> V3 {
        V3([self.0[0] - o.0[0], self.0[1] - o.0[1], self.0[2] - o.0[2]])
    }
}
impl Mul<f64> for V3 {
    type Output = V3;
    fn mul(self, s: f64) -> V3 {
        V3([self.0[0] * s, self.0[1] * s, self.0[2] * s])
    }
}
impl Neg for V3 {
    type Output = V3;
    fn neg(self) -> V3 {
        self * -1.0
    }
}

/// Similarity map `p -> scale * (p - center)` used by model normalization.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Similarity {
    pub center: V3,
    pub scale: f64,
}

impl Similarity {
    pub fn point(&self, p: V3) -> V3 {
        (p - self.center) * self.scale
    }
}

/// Surface kinds in one-hot order.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SurfaceType {
    Plane,
    Cylinder,
    Cone,
    Sphere,
    Torus,
    NurbsProxy,
}

impl SurfaceType {
    pub const COUNT: usize = 6;
    pub fn index(self) -> usize {
        self as usize
    }
}

/// Curve kinds in one-hot order.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CurveType {
    Line,
    Circle,
    Ellipse,
    BsplineProxy,
    Other,
}

impl CurveType {
    pub const COUNT: usize = 5;
    pub fn index(self) -> usize {
        self as usize
    }
}

/// Surface parameterizations. Angular parameters are radians, linear ones are model units.
///
/// * plane: `origin + u*x_axis + v*y_axis`
/// * cylinder: `center + radius*(cos u X + sin u Y) + v*axis`
/// * cone: `center + (radius + v*taper)*(cos u X + sin u Y) + v*axis`
/// * sphere: `center + radius*(cos v (cos u X + sin u Y) + sin v axis)`
/// * torus: `center + (major + minor cos v)(cos u X + sin u Y) + minor sin v axis`
/// * biquadratic: tensor-product quadratic Bezier on `[0,1]^2`, `ctrl[i][j]` with `i` along `u`
///
/// with `Y = axis x X`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum Surface {
    Plane { origin: V3, x_axis: V3, y_axis: V3 },
    Cylinder { center: V3, axis: V3, x_ref: V3, radius: f64 },
    Cone { center: V3, axis: V3, x_ref: V3, radius: f64, taper: f64 },
    Sphere { center: V3, axis: V3, x_ref: V3, radius: f64 },
    Torus { center: V3, axis: V3, x_ref: V3, major: f64, minor: f64 },
    Biquadratic { ctrl: [[V3; 3]; 3] },
}

fn bernstein2(t: f64) -> [f64; 3] {
    [(1.0 - t) * (1.0 - t), 2.0 * t * (1.0 - t), t * t]
}

fn bernstein2_d(t: f64) -> [f64; 3] {
    [-2.0 * (1.0 - t), 2.0 - 4.0 * t, 2.0 * t]
}

impl Surface {
    pub fn surface_type(&self) -> SurfaceType {
        match self {
            Surface::Plane { .. } => SurfaceType::Plane,
            Surface::Cylinder { .. } => SurfaceType::Cylinder,
            Surface::Cone { .. } => SurfaceType::Cone,
            Surface::Sphere { .. } => SurfaceType::Sphere,
            Surface::Torus { .. } => SurfaceType::Torus,
            Surface::Biquadratic { .. } => SurfaceType::NurbsProxy,
        }
    }

    fn frame(axis: V3, x_ref: V3, u: f64) -> (V3, V3) {
        let y = axis.cross(x_ref);
        let radial = x_ref * u.cos() + y * u.sin();
        let tangent = x_ref * -u.sin() + y * u.cos();
        (radial, tangent)
    }

    /// Position and first partial derivatives.
    pub fn eval_d(&self, u: f64, v: f64) -> (V3, V3, V3) {
        match *self {
            Surface::Plane { origin, x_axis, y_axis } => (origin + x_axis * u + y_axis * v, x_axis, y_axis),
            Surface::Cylinder { center, axis, x_ref, radius } => {
                let (rad, tan) = Self::frame(axis, x_ref, u);
                (center + rad * radius + axis * v, tan * radius, axis)
            }
            Surface::Cone { center, axis, x_ref, radius, taper } => {
                let (rad, tan) = Self::frame(axis, x_ref, u);
                let r = radius + v * taper;
                (center + rad * r + axis * v, tan * r, rad * taper + axis)
            }
            Surface::Sphere { center, axis, x_ref, radius } => {
                let (rad, tan) = Self::frame(axis, x_ref, u);
                let p = center + (rad * v.cos() + axis * v.sin()) * radius;
                (p, tan * (radius * v.cos()), (rad * -v.sin() + axis * v.cos()) * radius)
            }
            Surface::Torus { center, axis, x_ref, major, minor } => {
                let (rad, tan) = Self::frame(axis, x_ref, u);
                let r = major + minor * v.cos();
                let p = center + rad * r + axis * (minor * v.sin());
                (p, tan * r, (rad * -v.sin() + axis * v.cos()) * minor)
            }
            Surface::Biquadratic { ref ctrl } => {
                let (bu, bv) = (bernstein2(u), bernstein2(v));
                let (du, dv) = (bernstein2_d(u), bernstein2_d(v));
                let mut p = V3::ZERO;
                let mut pu = V3::ZERO;
                let mut pv = V3::ZERO;
                for i in 0..3 {
                    for j in 0..3 {
                        p = p + ctrl[i][j] * (bu[i] * bv[j]);
                        pu = pu + ctrl[i][j] * (du[i] * bv[j]);
                        pv = pv + ctrl[i][j] * (bu[i] * dv[j]);
                    }
                }
                (p, pu, pv)
            }
        }
    }

    pub fn eval(&self, u: f64, v: f64) -> V3 {
        self.eval_d(u, v).0
    }

    /// Unit normal in the `P_u x P_v` sense. Rotational surfaces use the closed
    /// form so the sphere pole stays well defined.
    pub fn normal(&self, u: f64, v: f64) -> V3 {
        match *self {
            Surface::Cylinder { axis, x_ref, .. } => Self::frame(axis, x_ref, u).0,
            Surface::Cone { axis, x_ref, taper, .. } => (Self::frame(axis, x_ref, u).0 - axis * taper).unit(),
            Surface::Sphere { axis, x_ref, .. } | Surface::Torus { axis, x_ref, .. } => {
                Self::frame(axis, x_ref, u).0 * v.cos() + axis * v.sin()
            }
            _ => {
                let (_, pu, pv) = self.eval_d(u, v);
                pu.cross(pv).unit()
            }
        }
    }

    /// Parameters of the surface point closest to `p` (exact for points on the
    /// surface; periodic parameters are returned in `(-pi, pi]`).
    pub fn project(&self, p: V3) -> (f64, f64) {
        let polar = |center: V3, axis: V3, x_ref: V3| {
            let d = p - center;
            let y = axis.cross(x_ref);
            (d, d.dot(y).atan2(d.dot(x_ref)), d.dot(axis), (d.dot(x_ref).powi(2) + d.dot(y).powi(2)).sqrt())
        };
        match *self {
            Surface::Plane { origin, x_axis, y_axis } => ((p - origin).dot(x_axis), (p - origin).dot(y_axis)),
            Surface::Cylinder { center, axis, x_ref, .. } | Surface::Cone { center, axis, x_ref, .. } => {
                let (_, u, h, _) = polar(center, axis, x_ref);
                (u, h)
            }
            Surface::Sphere { center, axis, x_ref, .. } => {
                let (_, u, h, rho) = polar(center, axis, x_ref);
                (u, h.atan2(rho))
            }
            Surface::Torus { center, axis, x_ref, major, .. } => {
                let (_, u, h, rho) = polar(center, axis, x_ref);
                (u, h.atan2(rho - major))
            }
            Surface::Biquadratic { .. } => self.project_newton(p),
        }
    }

    fn project_newton(&self, p: V3) -> (f64, f64) {
        let mut best = (0.5, 0.5);
        let mut best_d = f64::INFINITY;
        for i in 0..=16 {
            for j in 0..=16 {
                let (u, v) = (i as f64 / 16.0, j as f64 / 16.0);
                let d = (self.eval(u, v) - p).norm();
                if d < best_d {
                    best_d = d;
                    best = (u, v);
                }
            }
        }
        let (mut u, mut v) = best;
        for _ in 0..50 {
            let (s, su, sv) = self.eval_d(u, v);
            let r = s - p;
            // Gauss-Newton on the tangent plane.
            let (a, b, c) = (su.dot(su), su.dot(sv), sv.dot(sv));
            let (gu, gv) = (r.dot(su), r.dot(sv));
            let det = a * c - b * b;
            if det.abs() < 1e-300 {
                break;
            }
            let du = (c * gu - b * gv) / det;
            let dv = (a * gv - b * gu) / det;
            u = (u - du).clamp(-0.5, 1.5);
            v = (v - dv).clamp(-0.5, 1.5);
            if du.abs() < 1e-15 && dv.abs() < 1e-15 {
                break;
            }
        }
        (u, v)
    }

    pub fn periodic(&self) -> (bool, bool) {
        match self {
            Surface::Plane { .. } | Surface::Biquadratic { .. } => (false, false),
            Surface::Cylinder { .. } | Surface::Cone { .. } | Surface::Sphere { .. } => (true, false),
            Surface::Torus { .. } => (true, true),
        }
    }

    fn transformed(&self, t: &Similarity) -> Surface {
        let s = t.scale;
        match *self {
            Surface::Plane { origin, x_axis, y_axis } => Surface::Plane { origin: t.point(origin), x_axis, y_axis },
            Surface::Cylinder { center, axis, x_ref, radius } => {
                Surface::Cylinder { center: t.point(center), axis, x_ref, radius: radius * s }
            }
            Surface::Cone { center, axis, x_ref, radius, taper } => {
                Surface::Cone { center: t.point(center), axis, x_ref, radius: radius * s, taper }
            }
            Surface::Sphere { center, axis, x_ref, radius } => {
                Surface::Sphere { center: t.point(center), axis, x_ref, radius: radius * s }
            }
            Surface::Torus { center, axis, x_ref, major, minor } => {
                Surface::Torus { center: t.point(center), axis, x_ref, major: major * s, minor: minor * s }
            }
            Surface::Biquadratic { ctrl } => Surface::Biquadratic { ctrl: ctrl.map(|row| row.map(|c| t.point(c))) },
        }
    }

    /// Whether `u` and `v` are lengths (rescaled under similarity maps).
    fn linear_params(&self) -> (bool, bool) {
        match self {
            Surface::Plane { .. } => (true, true),
            Surface::Cylinder { .. } | Surface::Cone { .. } => (false, true),
            _ => (false, false),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct UvRect {
    pub u: [f64; 2],
    pub v: [f64; 2],
}

impl UvRect {
    pub fn new(u0: f64, u1: f64, v0: f64, v1: f64) -> Self {
        Self { u: [u0, u1], v: [v0, v1] }
    }

    pub fn contains(&self, u: f64, v: f64, tol: f64) -> bool {
        u >= self.u[0] - tol && u <= self.u[1] + tol && v >= self.v[0] - tol && v <= self.v[1] + tol
    }

    pub fn measure(&self) -> f64 {
        (self.u[1] - self.u[0]) * (self.v[1] - self.v[0])
    }
}

/// A closed polyline in parameter space (last vertex connects to the first).
/// Counter-clockwise loops retain their interior, clockwise loops cut a hole.
pub type TrimLoop = Vec<[f64; 2]>;

fn signed_area(poly: &[[f64; 2]]) -> f64 {
    let n = poly.len();
    (0..n).map(|i| {
        let (a, b) = (poly[i], poly[(i + 1) % n]);
        a[0] * b[1] - b[0] * a[1]
    })
    .sum::<f64>()
        * 0.5
}

fn on_polyline(poly: &[[f64; 2]], p: [f64; 2], tol: f64) -> bool {
    let n = poly.len();
    (0..n).any(|i| {
        let (a, b) = (poly[i], poly[(i + 1) % n]);
        let (dx, dy) = (b[0] - a[0], b[1] - a[1]);
        let len2 = dx * dx + dy * dy;
        let t = if len2 > 0.0 { (((p[0] - a[0]) * dx + (p[1] - a[1]) * dy) / len2).clamp(0.0, 1.0) } else { 0.0 };
        let (qx, qy) = (a[0] + t * dx - p[0], a[1] + t * dy - p[1]);
        (qx * qx + qy * qy).sqrt() <= tol
    })
}

fn inside_polygon(poly: &[[f64; 2]], p: [f64; 2]) -> bool {
    let n = poly.len();
    let mut inside = false;
    let mut j = n - 1;
    for i in 0..n {
        let (a, b) = (poly[i], poly[j]);
        if (a[1] > p[1]) != (b[1] > p[1]) {
            let x = (b[0] - a[0]) * (p[1] - a[1]) / (b[1] - a[1]) + a[0];
            if p[0] < x {
                inside = !inside;
            }
        }
        j = i;
    }
    inside
}

const TRIM_TOL: f64 = 1e-9;

/// A trimmed region of a surface, oriented so that the normal points out of the material.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SurfacePatch {
    pub surface: Surface,
    /// The material-outward normal is `-(P_u x P_v)` when set.
    pub reversed: bool,
    pub uv_domain: UvRect,
    pub trim_loops: Vec<TrimLoop>,
}

impl SurfacePatch {
    pub fn new(surface: Surface, reversed: bool, uv_domain: UvRect) -> Self {
        Self { surface, reversed, uv_domain, trim_loops: Vec::new() }
    }

    pub fn with_loop(mut self, lp: TrimLoop) -> Self {
        self.trim_loops.push(lp);
        self
    }

    pub fn surface_type(&self) -> SurfaceType {
        self.surface.surface_type()
    }

    pub fn point(&self, u: f64, v: f64) -> V3 {
        self.surface.eval(u, v)
    }

    pub fn normal(&self, u: f64, v: f64) -> V3 {
        let n = self.surface.normal(u, v);
        if self.reversed {
            -n
        } else {
            n
        }
    }

    /// Trim indicator: inside every counter-clockwise loop and outside every
    /// clockwise loop. Points on a loop count as retained.
    pub fn retained(&self, u: f64, v: f64) -> bool {
        let p = [u, v];
        self.trim_loops.iter().all(|lp| {
            if on_polyline(lp, p, TRIM_TOL) {
                return true;
            }
            let inside = inside_polygon(lp, p);
            if signed_area(lp) >= 0.0 {
                inside
            } else {
                !inside
            }
        })
    }

    /// Number of boundary loops of the trimmed face (outer + holes).
    pub fn loop_count(&self) -> usize {
        let holes = self.trim_loops.iter().filter(|lp| signed_area(lp) < 0.0).count();
        1 + holes
    }

    /// Brings periodic parameters to the representative closest to the domain.
    pub fn wrap_uv(&self, u: f64, v: f64) -> (f64, f64) {
        let (pu, pv) = self.surface.periodic();
        let wrap = |x: f64, periodic: bool, range: [f64; 2]| {
            if !periodic {
                return x;
            }
            let mid = 0.5 * (range[0] + range[1]);
            let candidates = [x - 2.0 * PI, x, x + 2.0 * PI, x + 4.0 * PI];
            let dist = |c: f64| {
                if c < range[0] {
                    range[0] - c
                } else if c > range[1] {
                    c - range[1]
                } else {
                    -1.0 / (1.0 + (c - mid).abs())
                }
            };
            candidates.into_iter().min_by(|a, b| dist(*a).total_cmp(&dist(*b))).unwrap()
        };
        (wrap(u, pu, self.uv_domain.u), wrap(v, pv, self.uv_domain.v))
    }

    /// Parameters of `p` on this patch and the distance from `p` to the surface point there.
    pub fn locate(&self, p: V3) -> ((f64, f64), f64) {
        let (u, v) = self.surface.project(p);
        let (u, v) = self.wrap_uv(u, v);
        ((u, v), (self.point(u, v) - p).norm())
    }

    /// Whether the parameter point lies on the retained part of the patch.
    pub fn contains_uv(&self, u: f64, v: f64) -> bool {
        self.uv_domain.contains(u, v, 1e-9) && self.retained(u, v)
    }

    pub fn transformed(&self, t: &Similarity) -> SurfacePatch {
        let (lu, lv) = self.surface.linear_params();
        let su = if lu { t.scale } else { 1.0 };
        let sv = if lv { t.scale } else { 1.0 };
        // Planes keep their origin mapped, so linear parameters just scale.
        SurfacePatch {
            surface: self.surface.transformed(t),
            reversed: self.reversed,
            uv_domain: UvRect::new(self.uv_domain.u[0] * su, self.uv_domain.u[1] * su, self.uv_domain.v[0] * sv, self.uv_domain.v[1] * sv),
            trim_loops: self.trim_loops.iter().map(|lp| lp.iter().map(|q| [q[0] * su, q[1] * sv]).collect()).collect(),
        }
    }
}

/// Curve parameterizations:
/// * line: `a + t (b - a)`, `t in [0,1]`
/// * circle: `center + radius (cos t x_ref + sin t y_ref)`
/// * ellipse: `center + a cos t x_ref + b sin t y_ref`
/// * quadratic Bezier on `[0,1]`
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum Curve {
    Line { a: V3, b: V3 },
    Circle { center: V3, x_ref: V3, y_ref: V3, radius: f64 },
    Ellipse { center: V3, x_ref: V3, y_ref: V3, a: f64, b: f64 },
    Bezier2 { ctrl: [V3; 3] },
}

impl Curve {
    pub fn curve_type(&self) -> CurveType {
        match self {
            Curve::Line { .. } => CurveType::Line,
            Curve::Circle { .. } => CurveType::Circle,
            Curve::Ellipse { .. } => CurveType::Ellipse,
            Curve::Bezier2 { .. } => CurveType::BsplineProxy,
        }
    }

    pub fn eval_d(&self, t: f64) -> (V3, V3) {
        match *self {
            Curve::Line { a, b } => (a + (b - a) * t, b - a),
            Curve::Circle { center, x_ref, y_ref, radius } => (
                center + (x_ref * t.cos() + y_ref * t.sin()) * radius,
                (x_ref * -t.sin() + y_ref * t.cos()) * radius,
            ),
            Curve::Ellipse { center, x_ref, y_ref, a, b } => {
                (center + x_ref * (a * t.cos()) + y_ref * (b * t.sin()), x_ref * (-a * t.sin()) + y_ref * (b * t.cos()))
            }
            Curve::Bezier2 { ctrl } => {
                let (w, d) = (bernstein2(t), bernstein2_d(t));
                (ctrl[0] * w[0] + ctrl[1] * w[1] + ctrl[2] * w[2], ctrl[0] * d[0] + ctrl[1] * d[1] + ctrl[2] * d[2])
            }
        }
    }

    pub fn point(&self, t: f64) -> V3 {
        self.eval_d(t).0
    }

    fn transformed(&self, t: &Similarity) -> Curve {
        match *self {
            Curve::Line { a, b } => Curve::Line { a: t.point(a), b: t.point(b) },
            Curve::Circle { center, x_ref, y_ref, radius } => {
                Curve::Circle { center: t.point(center), x_ref, y_ref, radius: radius * t.scale }
            }
            Curve::Ellipse { center, x_ref, y_ref, a, b } => {
                Curve::Ellipse { center: t.point(center), x_ref, y_ref, a: a * t.scale, b: b * t.scale }
            }
            Curve::Bezier2 { ctrl } => Curve::Bezier2 { ctrl: ctrl.map(|c| t.point(c)) },
        }
    }
}

/// A topological edge: a curve piece shared by exactly two faces.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CurveSegment {
    pub curve: Curve,
    pub t_domain: [f64; 2],
    pub incident_faces: [usize; 2],
}

impl CurveSegment {
    pub fn new(curve: Curve, t0: f64, t1: f64, faces: [usize; 2]) -> Self {
        Self { curve, t_domain: [t0, t1], incident_faces: faces }
    }

    pub fn curve_type(&self) -> CurveType {
        self.curve.curve_type()
    }

    /// Parameter of the `k`-th of `n` uniform samples, endpoints included.
    pub fn param(&self, k: usize, n: usize) -> f64 {
        let [t0, t1] = self.t_domain;
        if k + 1 == n {
            t1
        } else {
            t0 + (t1 - t0) * k as f64 / (n - 1) as f64
        }
    }

    pub fn point(&self, t: f64) -> V3 {
        self.curve.point(t)
    }

    pub fn transformed(&self, t: &Similarity) -> CurveSegment {
        CurveSegment { curve: self.curve.transformed(t), ..self.clone() }
    }

    /// Arc length by composite Simpson integration of `|C'(t)|`.
    pub fn length(&self) -> f64 {
        let [t0, t1] = self.t_domain;
        let n = 256;
        let h = (t1 - t0) / n as f64;
        let speed = |t: f64| self.curve.eval_d(t).1.norm();
        let mut s = speed(t0) + speed(t1);
        for i in 1..n {
            s += speed(t0 + h * i as f64) * if i % 2 == 1 { 4.0 } else { 2.0 };
        }
        s * h / 3.0
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn all_surfaces() -> Vec<Surface> {
        let ctrl = [
            [V3::new(0., 0., 0.), V3::new(0., 0.5, 0.2), V3::new(0., 1., 0.)],
            [V3::new(0.5, 0., 0.1), V3::new(0.5, 0.5, 0.4), V3::new(0.5, 1., 0.1)],
            [V3::new(1., 0., 0.), V3::new(1., 0.5, 0.2), V3::new(1., 1., 0.)],
        ];
        vec![
            Surface::Plane { origin: V3::new(1., 2., 3.), x_axis: V3::X, y_axis: V3::Z },
            Surface::Cylinder { center: V3::ZERO, axis: V3::Z, x_ref: V3::X, radius: 0.7 },
            Surface::Cone { center: V3::ZERO, axis: V3::Y, x_ref: V3::Z, radius: 0.7, taper: -0.2 },
            Surface::Sphere { center: V3::new(0., 1., 0.), axis: V3::Z, x_ref: V3::X, radius: 0.5 },
            Surface::Torus { center: V3::ZERO, axis: V3::Z, x_ref: V3::X, major: 1.0, minor: 0.3 },
            Surface::Biquadratic { ctrl },
        ]
    }

    #[test]
    fn normals_match_finite_difference_cross_products() {
        for s in all_surfaces() {
            for &(u, v) in &[(0.3, 0.2), (0.7, 0.6), (0.1, 0.9)] {
                let h = 1e-6;
                let pu = (s.eval(u + h, v) - s.eval(u - h, v)) * (0.5 / h);
                let pv = (s.eval(u, v + h) - s.eval(u, v - h)) * (0.5 / h);
                let fd = pu.cross(pv).unit();
                let n = s.normal(u, v);
                assert!((fd - n).norm() < 1e-6, "{:?} at ({u},{v}): {fd:?} vs {n:?}", s.surface_type());
            }
        }
    }

    #[test]
    fn projection_inverts_evaluation() {
        for s in all_surfaces() {
            for &(u, v) in &[(0.3, 0.2), (0.7, 0.6), (0.1, 0.9)] {
                let p = s.eval(u, v);
                let (pu, pv) = s.project(p);
                assert!((s.eval(pu, pv) - p).norm() < 1e-10, "{:?}", s.surface_type());
            }
        }
    }

    #[test]
    fn trim_orientation_and_boundary() {
        let square = vec![[0.0, 0.0], [1.0, 0.0], [1.0, 1.0], [0.0, 1.0]];
        let hole: TrimLoop = vec![[0.25, 0.25], [0.25, 0.75], [0.75, 0.75], [0.75, 0.25]];
        let p = SurfacePatch::new(Surface::Plane { origin: V3::ZERO, x_axis: V3::X, y_axis: V3::Y }, false, UvRect::new(0., 1., 0., 1.))
            .with_loop(square)
            .with_loop(hole);
        assert!(p.retained(0.0, 0.0));
        assert!(p.retained(0.1, 0.5));
        assert!(!p.retained(0.5, 0.5));
        assert!(p.retained(0.25, 0.5));
        assert_eq!(p.loop_count(), 2);
    }

    #[test]
    fn circle_tangent_is_analytic_derivative() {
        let c = Curve::Circle { center: V3::ZERO, x_ref: V3::X, y_ref: V3::Y, radius: 1.0 };
        for k in 0..13 {
            let t = k as f64 * 0.5;
            let d = c.eval_d(t).1.unit();
            assert!((d - V3::new(-t.sin(), t.cos(), 0.0)).norm() < 1e-12);
        }
    }
}
