//! Parametric template solids with face and shape labels.
//!
//! Every template is an extruded profile (possibly with a through hole or a
//! boss on its top face). The profile lives in the `(x, z)` plane and is swept
//! along `+y`.

use std::f64::consts::PI;
use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{Curve, CurveSegment, Similarity, Surface, SurfacePatch, TrimLoop, UvRect, V3};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Template {
    Box,
    BoxHole,
    BoxSlot,
    BoxStep,
    LBracket,
    CylBoss,
}

impl Template {
    pub const ALL: [Template; 6] =
        [Template::Box, Template::BoxHole, Template::BoxSlot, Template::BoxStep, Template::LBracket, Template::CylBoss];

    pub fn name(self) -> &'static str {
        match self {
            Template::Box => "box",
            Template::BoxHole => "box_hole",
            Template::BoxSlot => "box_slot",
            Template::BoxStep => "box_step",
            Template::LBracket => "l_bracket",
            Template::CylBoss => "cyl_boss",
        }
    }

    pub fn shape_class(self) -> ShapeClass {
        match self {
            Template::Box | Template::LBracket => ShapeClass::Plain,
            Template::BoxHole => ShapeClass::Drilled,
            Template::BoxSlot | Template::BoxStep => ShapeClass::Milled,
            Template::CylBoss => ShapeClass::Bossed,
        }
    }
}

impl fmt::Display for Template {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Template {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Template::ALL
            .into_iter()
            .find(|t| t.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown template '{s}'")))
    }
}

/// Per-face segmentation classes.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FaceLabel {
    Stock,
    Hole,
    Slot,
    Step,
    Boss,
}

impl FaceLabel {
    pub const COUNT: usize = 5;
    pub fn id(self) -> usize {
        self as usize
    }
}

/// Whole-model classification classes.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ShapeClass {
    Plain,
    Drilled,
    Milled,
    Bossed,
}

impl ShapeClass {
    pub const COUNT: usize = 4;
    pub fn id(self) -> usize {
        self as usize
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BRepModel {
    pub template: Template,
    pub seed: u64,
    pub faces: Vec<SurfacePatch>,
    pub edges: Vec<CurveSegment>,
    pub face_labels: Vec<usize>,
    pub shape_label: usize,
}

impl BRepModel {
    /// `(face_i, face_j, edge_id)` for every edge, in edge order.
    pub fn adjacency(&self) -> Vec<[usize; 3]> {
        self.edges.iter().enumerate().map(|(k, e)| [e.incident_faces[0], e.incident_faces[1], k]).collect()
    }

    pub fn is_connected(&self) -> bool {
        let n = self.faces.len();
        if n == 0 {
            return false;
        }
        let mut seen = vec![false; n];
        let mut stack = vec![0];
        seen[0] = true;
        while let Some(f) = stack.pop() {
            for e in &self.edges {
                let [a, b] = e.incident_faces;
                for (x, y) in [(a, b), (b, a)] {
                    if x == f && !seen[y] {
                        seen[y] = true;
                        stack.push(y);
                    }
                }
            }
        }
        seen.into_iter().all(|s| s)
    }

    fn transformed(&self, t: &Similarity) -> BRepModel {
        BRepModel {
            faces: self.faces.iter().map(|f| f.transformed(t)).collect(),
            edges: self.edges.iter().map(|e| e.transformed(t)).collect(),
            ..self.clone()
        }
    }
}

/// Axis-aligned bounds from dense samples of the retained face regions and all edges.
pub fn dense_bounds(model: &BRepModel) -> (V3, V3) {
    let mut lo = V3([f64::INFINITY; 3]);
    let mut hi = V3([f64::NEG_INFINITY; 3]);
    let mut push = |p: V3| {
        for k in 0..3 {
            lo.0[k] = lo.0[k].min(p.0[k]);
            hi.0[k] = hi.0[k].max(p.0[k]);
        }
    };
    const N: usize = 33;
    for f in &model.faces {
        let d = f.uv_domain;
        for i in 0..N {
            for j in 0..N {
                let u = d.u[0] + (d.u[1] - d.u[0]) * i as f64 / (N - 1) as f64;
                let v = d.v[0] + (d.v[1] - d.v[0]) * j as f64 / (N - 1) as f64;
                if f.retained(u, v) {
                    push(f.point(u, v));
                }
            }
        }
    }
    for e in &model.edges {
        for k in 0..65 {
            push(e.point(e.param(k, 65)));
        }
    }
    (lo, hi)
}

/// Centers the bounding box at the origin and scales its longest side to 2.
pub fn normalize_model(model: &BRepModel) -> Result<BRepModel> {
    let (lo, hi) = dense_bounds(model);
    if !(lo.is_finite() && hi.is_finite()) {
        return Err(Error::InvalidGeometry("empty or non-finite bounding box".into()));
    }
    let extent = hi - lo;
    let longest = extent.0.into_iter().fold(0.0, f64::max);
    if longest <= 1e-12 {
        return Err(Error::InvalidGeometry("degenerate bounding box".into()));
    }
    let center = (lo + hi) * 0.5;
    if center.norm() <= 1e-12 && (longest - 2.0).abs() <= 1e-12 {
        return Ok(model.clone());
    }
    Ok(model.transformed(&Similarity { center, scale: 2.0 / longest }))
}

fn template_rng(template: Template, seed: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(template as u64 + 1);
    rng
}

/// Builds the normalized model for a template and seed.
pub fn generate_model(template: Template, seed: u64) -> Result<BRepModel> {
    let mut rng = template_rng(template, seed);
    let mut b = Builder::default();
    match template {
        Template::Box => {
            let (w, h, l) = box_dims(&mut rng);
            b.prism(&rect(w, h), l, &[]);
        }
        Template::BoxHole => {
            let (w, h, l) = box_dims(&mut rng);
            let m = w.min(h);
            let r = rng.random_range(0.12..0.3) * m;
            let margin = r + 0.15 * m;
            let cx = rng.random_range(margin..w - margin);
            let cz = rng.random_range(margin..h - margin);
            b.prism(&rect(w, h), l, &[Hole { center: [cx, cz], radius: r }]);
        }
        Template::BoxSlot => {
            let (w, h, l) = box_dims(&mut rng);
            let sw = rng.random_range(0.2..0.45) * w;
            let s0 = rng.random_range(0.15 * w..0.85 * w - sw);
            let d = rng.random_range(0.25..0.6) * h;
            let s1 = s0 + sw;
            let profile = vec![
                seg(0.0, 0.0, FaceLabel::Stock),
                seg(w, 0.0, FaceLabel::Stock),
                seg(w, h, FaceLabel::Stock),
                seg(s1, h, FaceLabel::Slot),
                seg(s1, h - d, FaceLabel::Slot),
                seg(s0, h - d, FaceLabel::Slot),
                seg(s0, h, FaceLabel::Stock),
                seg(0.0, h, FaceLabel::Stock),
            ];
            b.prism(&profile, l, &[]);
        }
        Template::BoxStep => {
            let (w, h, l) = box_dims(&mut rng);
            let s = rng.random_range(0.25..0.6) * w;
            let d = rng.random_range(0.25..0.6) * h;
            let profile = vec![
                seg(0.0, 0.0, FaceLabel::Stock),
                seg(w, 0.0, FaceLabel::Stock),
                seg(w, h - d, FaceLabel::Step),
                seg(w - s, h - d, FaceLabel::Step),
                seg(w - s, h, FaceLabel::Stock),
                seg(0.0, h, FaceLabel::Stock),
            ];
            b.prism(&profile, l, &[]);
        }
        Template::LBracket => {
            let w: f64 = rng.random_range(1.2..3.0);
            let h = rng.random_range(1.2..3.0);
            let l = rng.random_range(0.8..2.5);
            let t = rng.random_range(0.2..0.4) * w.min(h);
            let blend = rng.random_bool(0.5);
            let mut profile = vec![seg(0.0, 0.0, FaceLabel::Stock), seg(w, 0.0, FaceLabel::Stock), seg(w, t, FaceLabel::Stock)];
            if blend {
                let r = rng.random_range(0.2..0.5) * (w - t).min(h - t);
                profile.push(seg(t + r, t, FaceLabel::Stock));
                profile.push(ProfileSeg { start: [t, t + r], ctrl: None, label: FaceLabel::Stock });
                // The blend is the curved segment from (t+r, t) to (t, t+r).
                let k = profile.len() - 2;
                profile[k].ctrl = Some([t, t]);
            } else {
                profile.push(seg(t, t, FaceLabel::Stock));
            }
            profile.push(seg(t, h, FaceLabel::Stock));
            profile.push(seg(0.0, h, FaceLabel::Stock));
            b.prism(&profile, l, &[]);
        }
        Template::CylBoss => {
            let w: f64 = rng.random_range(1.2..3.0);
            let h = rng.random_range(0.5..1.5);
            let l = rng.random_range(1.2..3.0);
            let rb = rng.random_range(0.15..0.3) * w.min(l);
            let variant = match rng.random_range(0..4) {
                0 => BossKind::Flat,
                1 => BossKind::Tapered(rng.random_range(0.5..0.8)),
                2 => BossKind::Dome,
                _ => BossKind::Fillet(0.3 * rb),
            };
            let outer = rb + if let BossKind::Fillet(rf) = variant { rf } else { 0.0 };
            let m = outer + 0.1 * w.min(l);
            let uc = rng.random_range(m..l - m);
            let vc = rng.random_range(m..w - m);
            let height = rng.random_range(0.3..0.9) * h;
            let faces = b.prism(&rect(w, h), l, &[]);
            // Side 2 runs from (w, h) to (0, h): the top face.
            b.boss(faces.sides[2], Boss { center: [uc, vc], radius: rb, height, kind: variant });
        }
    }
    let shape = template.shape_class();
    let model = BRepModel {
        template,
        seed,
        faces: b.faces,
        edges: b.edges,
        face_labels: b.labels.into_iter().map(FaceLabel::id).collect(),
        shape_label: shape.id(),
    };
    normalize_model(&model)
}

fn box_dims(rng: &mut ChaCha8Rng) -> (f64, f64, f64) {
    (rng.random_range(1.0..3.0), rng.random_range(0.6..2.0), rng.random_range(1.0..3.0))
}

#[derive(Clone, Copy, Debug)]
struct ProfileSeg {
    start: [f64; 2],
    /// Control point of a quadratic segment towards the next vertex.
    ctrl: Option<[f64; 2]>,
    label: FaceLabel,
}

fn seg(x: f64, z: f64, label: FaceLabel) -> ProfileSeg {
    ProfileSeg { start: [x, z], ctrl: None, label }
}

fn rect(w: f64, h: f64) -> Vec<ProfileSeg> {
    [[0.0, 0.0], [w, 0.0], [w, h], [0.0, h]].into_iter().map(|p| seg(p[0], p[1], FaceLabel::Stock)).collect()
}

#[derive(Clone, Copy, Debug)]
struct Hole {
    center: [f64; 2],
    radius: f64,
}

#[derive(Clone, Copy, Debug)]
enum BossKind {
    Flat,
    /// Top radius as a fraction of the base radius.
    Tapered(f64),
    Dome,
    /// Fillet radius at the base.
    Fillet(f64),
}

#[derive(Clone, Copy, Debug)]
struct Boss {
    center: [f64; 2],
    radius: f64,
    height: f64,
    kind: BossKind,
}

struct PrismFaces {
    sides: Vec<usize>,
}

const CIRCLE_SEGMENTS: usize = 64;
const CURVE_SEGMENTS: usize = 32;

fn xz(p: [f64; 2], y: f64) -> V3 {
    V3::new(p[0], y, p[1])
}

fn quad(a: [f64; 2], c: [f64; 2], b: [f64; 2], t: f64) -> [f64; 2] {
    let (w0, w1, w2) = ((1.0 - t) * (1.0 - t), 2.0 * t * (1.0 - t), t * t);
    [w0 * a[0] + w1 * c[0] + w2 * b[0], w0 * a[1] + w1 * c[1] + w2 * b[1]]
}

fn circle_loop(center: [f64; 2], r: f64) -> TrimLoop {
    (0..CIRCLE_SEGMENTS)
        .map(|k| {
            let t = 2.0 * PI * k as f64 / CIRCLE_SEGMENTS as f64;
            [center[0] + r * t.cos(), center[1] + r * t.sin()]
        })
        .collect()
}

fn oriented(mut lp: TrimLoop, ccw: bool) -> TrimLoop {
    let n = lp.len();
    let area: f64 = (0..n).map(|i| lp[i][0] * lp[(i + 1) % n][1] - lp[(i + 1) % n][0] * lp[i][1]).sum();
    if (area > 0.0) != ccw {
        lp.reverse();
    }
    lp
}

fn swap_uv(lp: &[[f64; 2]]) -> TrimLoop {
    lp.iter().map(|p| [p[1], p[0]]).collect()
}

fn bounds2(lp: &[[f64; 2]]) -> UvRect {
    let fold = |k: usize, f: fn(f64, f64) -> f64, init: f64| lp.iter().map(|p| p[k]).fold(init, f);
    UvRect::new(fold(0, f64::min, f64::INFINITY), fold(0, f64::max, f64::NEG_INFINITY), fold(1, f64::min, f64::INFINITY), fold(1, f64::max, f64::NEG_INFINITY))
}

#[derive(Default)]
struct Builder {
    faces: Vec<SurfacePatch>,
    labels: Vec<FaceLabel>,
    edges: Vec<CurveSegment>,
}

impl Builder {
    fn face(&mut self, patch: SurfacePatch, label: FaceLabel) -> usize {
        self.faces.push(patch);
        self.labels.push(label);
        self.faces.len() - 1
    }

    fn edge(&mut self, curve: Curve, t0: f64, t1: f64, faces: [usize; 2]) {
        self.edges.push(CurveSegment::new(curve, t0, t1, faces));
    }

    /// Two half cylinders (or cones) joined by two straight seams.
    fn halves(&mut self, surface: Surface, reversed: bool, v: [f64; 2], label: FaceLabel) -> [usize; 2] {
        let a = self.face(SurfacePatch::new(surface.clone(), reversed, UvRect::new(0.0, PI, v[0], v[1])), label);
        let b = self.face(SurfacePatch::new(surface.clone(), reversed, UvRect::new(PI, 2.0 * PI, v[0], v[1])), label);
        for (u, pair) in [(0.0, [b, a]), (PI, [a, b])] {
            let (p0, p1) = (surface.eval(u, v[0]), surface.eval(u, v[1]));
            self.edge(Curve::Line { a: p0, b: p1 }, 0.0, 1.0, pair);
        }
        [a, b]
    }

    /// Two half-circle edges between `face` and the halves `[a, b]`.
    fn rim(&mut self, center: V3, x_ref: V3, y_ref: V3, radius: f64, face: usize, halves: [usize; 2]) {
        let c = Curve::Circle { center, x_ref, y_ref, radius };
        self.edge(c.clone(), 0.0, PI, [face, halves[0]]);
        self.edge(c, PI, 2.0 * PI, [face, halves[1]]);
    }

    fn prism(&mut self, profile: &[ProfileSeg], length: f64, holes: &[Hole]) -> PrismFaces {
        let n = profile.len();
        let mut outline = Vec::new();
        for (k, s) in profile.iter().enumerate() {
            let next = profile[(k + 1) % n].start;
            match s.ctrl {
                None => outline.push(s.start),
                Some(c) => outline.extend((0..CURVE_SEGMENTS).map(|i| quad(s.start, c, next, i as f64 / CURVE_SEGMENTS as f64))),
            }
        }
        let outline = oriented(outline, true);
        let hole_loops: Vec<TrimLoop> = holes.iter().map(|h| circle_loop(h.center, h.radius)).collect();

        let cap0_patch = {
            let mut p = SurfacePatch::new(Surface::Plane { origin: V3::ZERO, x_axis: V3::X, y_axis: V3::Z }, false, bounds2(&outline))
                .with_loop(outline.clone());
            for lp in &hole_loops {
                p = p.with_loop(oriented(lp.clone(), false));
            }
            p
        };
        let cap1_patch = {
            let swapped = swap_uv(&outline);
            let mut p = SurfacePatch::new(
                Surface::Plane { origin: V3::new(0.0, length, 0.0), x_axis: V3::Z, y_axis: V3::X },
                false,
                bounds2(&swapped),
            )
            .with_loop(oriented(swapped, true));
            for lp in &hole_loops {
                p = p.with_loop(oriented(swap_uv(lp), false));
            }
            p
        };
        let cap0 = self.face(cap0_patch, FaceLabel::Stock);
        let cap1 = self.face(cap1_patch, FaceLabel::Stock);

        let mut sides = Vec::with_capacity(n);
        for (k, s) in profile.iter().enumerate() {
            let next = profile[(k + 1) % n].start;
            let patch = match s.ctrl {
                None => {
                    let d = [next[0] - s.start[0], next[1] - s.start[1]];
                    let len = d[0].hypot(d[1]);
                    let dir = V3::new(d[0] / len, 0.0, d[1] / len);
                    SurfacePatch::new(
                        Surface::Plane { origin: xz(s.start, 0.0), x_axis: V3::Y, y_axis: dir },
                        false,
                        UvRect::new(0.0, length, 0.0, len),
                    )
                }
                Some(c) => {
                    let row = |y: f64| [xz(s.start, y), xz(c, y), xz(next, y)];
                    SurfacePatch::new(
                        Surface::Biquadratic { ctrl: [row(0.0), row(0.5 * length), row(length)] },
                        false,
                        UvRect::new(0.0, 1.0, 0.0, 1.0),
                    )
                }
            };
            sides.push(self.face(patch, s.label));
        }
        for (k, s) in profile.iter().enumerate() {
            let next = profile[(k + 1) % n].start;
            let prev_side = sides[(k + n - 1) % n];
            self.edge(Curve::Line { a: xz(s.start, 0.0), b: xz(s.start, length) }, 0.0, 1.0, [prev_side, sides[k]]);
            for (y, cap) in [(0.0, cap0), (length, cap1)] {
                let curve = match s.ctrl {
                    None => Curve::Line { a: xz(s.start, y), b: xz(next, y) },
                    Some(c) => Curve::Bezier2 { ctrl: [xz(s.start, y), xz(c, y), xz(next, y)] },
                };
                self.edge(curve, 0.0, 1.0, [cap, sides[k]]);
            }
        }
        for h in holes {
            let center = V3::new(h.center[0], 0.0, h.center[1]);
            let cyl = Surface::Cylinder { center, axis: V3::Y, x_ref: V3::X, radius: h.radius };
            let halves = self.halves(cyl, true, [0.0, length], FaceLabel::Hole);
            let y_ref = V3::Y.cross(V3::X);
            self.rim(center, V3::X, y_ref, h.radius, cap0, halves);
            self.rim(center + V3::Y * length, V3::X, y_ref, h.radius, cap1, halves);
        }
        PrismFaces { sides }
    }

    /// A boss standing on a planar face, centered at parameter `center` of that face.
    fn boss(&mut self, base: usize, boss: Boss) {
        let Surface::Plane { origin, x_axis, y_axis } = self.faces[base].surface else {
            panic!("boss base must be planar");
        };
        let axis = x_axis.cross(y_axis);
        let x_ref = x_axis;
        let y_ref = axis.cross(x_ref);
        let b0 = origin + x_axis * boss.center[0] + y_axis * boss.center[1];
        let (rb, h) = (boss.radius, boss.height);
        let outer = rb + if let BossKind::Fillet(rf) = boss.kind { rf } else { 0.0 };
        let hole = oriented(circle_loop(boss.center, outer), false);
        self.faces[base].trim_loops.push(hole);

        let flat_cap = |b: &mut Builder, r: f64, halves: [usize; 2]| {
            let top = b0 + axis * h;
            let cap = SurfacePatch::new(
                Surface::Plane { origin: origin + axis * h, x_axis, y_axis },
                false,
                UvRect::new(boss.center[0] - r, boss.center[0] + r, boss.center[1] - r, boss.center[1] + r),
            )
            .with_loop(oriented(circle_loop(boss.center, r), true));
            let cap = b.face(cap, FaceLabel::Boss);
            b.rim(top, x_ref, y_ref, r, cap, halves);
        };

        match boss.kind {
            BossKind::Flat => {
                let side = self.halves(Surface::Cylinder { center: b0, axis, x_ref, radius: rb }, false, [0.0, h], FaceLabel::Boss);
                self.rim(b0, x_ref, y_ref, rb, base, side);
                flat_cap(self, rb, side);
            }
            BossKind::Tapered(frac) => {
                let rt = rb * frac;
                let cone = Surface::Cone { center: b0, axis, x_ref, radius: rb, taper: (rt - rb) / h };
                let side = self.halves(cone, false, [0.0, h], FaceLabel::Boss);
                self.rim(b0, x_ref, y_ref, rb, base, side);
                flat_cap(self, rt, side);
            }
            BossKind::Dome => {
                let side = self.halves(Surface::Cylinder { center: b0, axis, x_ref, radius: rb }, false, [0.0, h], FaceLabel::Boss);
                self.rim(b0, x_ref, y_ref, rb, base, side);
                let top = b0 + axis * h;
                let sphere = Surface::Sphere { center: top, axis, x_ref, radius: rb };
                let a = self.face(SurfacePatch::new(sphere.clone(), false, UvRect::new(0.0, PI, 0.0, 0.5 * PI)), FaceLabel::Boss);
                let b = self.face(SurfacePatch::new(sphere, false, UvRect::new(PI, 2.0 * PI, 0.0, 0.5 * PI)), FaceLabel::Boss);
                let ring = Curve::Circle { center: top, x_ref, y_ref, radius: rb };
                self.edge(ring.clone(), 0.0, PI, [side[0], a]);
                self.edge(ring, PI, 2.0 * PI, [side[1], b]);
                self.edge(Curve::Circle { center: top, x_ref, y_ref: axis, radius: rb }, 0.0, 0.5 * PI, [b, a]);
                self.edge(Curve::Circle { center: top, x_ref: -x_ref, y_ref: axis, radius: rb }, 0.0, 0.5 * PI, [a, b]);
            }
            BossKind::Fillet(rf) => {
                let major = rb + rf;
                let tc = b0 + axis * rf;
                let torus = Surface::Torus { center: tc, axis, x_ref, major, minor: rf };
                let v = [PI, 1.5 * PI];
                let ta = self.face(SurfacePatch::new(torus.clone(), true, UvRect::new(0.0, PI, v[0], v[1])), FaceLabel::Boss);
                let tb = self.face(SurfacePatch::new(torus, true, UvRect::new(PI, 2.0 * PI, v[0], v[1])), FaceLabel::Boss);
                self.rim(b0, x_ref, y_ref, major, base, [ta, tb]);
                self.edge(Curve::Circle { center: tc + x_ref * major, x_ref, y_ref: axis, radius: rf }, v[0], v[1], [tb, ta]);
                self.edge(Curve::Circle { center: tc - x_ref * major, x_ref: -x_ref, y_ref: axis, radius: rf }, v[0], v[1], [ta, tb]);
                let side = self.halves(Surface::Cylinder { center: b0, axis, x_ref, radius: rb }, false, [rf, h], FaceLabel::Boss);
                let ring = Curve::Circle { center: tc, x_ref, y_ref, radius: rb };
                self.edge(ring.clone(), 0.0, PI, [ta, side[0]]);
                self.edge(ring, PI, 2.0 * PI, [tb, side[1]]);
                flat_cap(self, rb, side);
            }
        }
    }
}
