//! The geometric attributed adjacency graph: sampled face grids, edge samples,
//! attribute vectors and the versioned JSON interchange format.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{CurveSegment, CurveType, SurfacePatch, SurfaceType, V3};
use crate::synth::BRepModel;

pub const FORMAT_VERSION: &str = "1";
pub const LOW_RES: usize = 3;
pub const HIGH_RES: usize = 13;
pub const EDGE_SAMPLES: usize = 13;
pub const FACE_POINT_DIM: usize = 7;
pub const FACE_ATTR_DIM: usize = 16;
pub const EDGE_POINT_DIM: usize = 12;
pub const EDGE_ATTR_DIM: usize = 9;
/// Dihedral deviation (degrees) below which an edge counts as smooth.
pub const SMOOTH_ANGLE_DEG: f64 = 5.0;
/// Distance tolerance between an edge sample and its incident surfaces.
pub const ON_SURFACE_TOL: f64 = 1e-6;

const AREA_CELLS: usize = 128;
const PROBE_STEP: f64 = 5e-3;

/// `N x N` samples of one face, row-major, each `(x, y, z, nx, ny, nz, tau)`.
#[derive(Clone, Debug, PartialEq)]
pub struct FaceGrid {
    pub resolution: usize,
    pub points: Vec<[f64; FACE_POINT_DIM]>,
}

impl FaceGrid {
    pub fn at(&self, r: usize, c: usize) -> &[f64; FACE_POINT_DIM] {
        &self.points[r * self.resolution + c]
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FaceAttributes {
    pub type_onehot: [f64; SurfaceType::COUNT],
    pub area: f64,
    pub centroid: [f64; 3],
    /// `(min_x, min_y, min_z, max_x, max_y, max_z)`.
    pub bbox: [f64; 6],
}

impl FaceAttributes {
    pub fn to_array(&self) -> [f64; FACE_ATTR_DIM] {
        let mut a = [0.0; FACE_ATTR_DIM];
        a[..6].copy_from_slice(&self.type_onehot);
        a[6] = self.area;
        a[7..10].copy_from_slice(&self.centroid);
        a[10..].copy_from_slice(&self.bbox);
        a
    }

    pub fn from_array(a: &[f64; FACE_ATTR_DIM]) -> Self {
        Self {
            type_onehot: a[..6].try_into().unwrap(),
            area: a[6],
            centroid: a[7..10].try_into().unwrap(),
            bbox: a[10..].try_into().unwrap(),
        }
    }
}

/// Samples of one edge, each `(x, y, z, tx, ty, tz, n_i, n_j)`.
#[derive(Clone, Debug, PartialEq)]
pub struct EdgeSamples {
    pub points: Vec<[f64; EDGE_POINT_DIM]>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Convexity {
    Concave,
    Convex,
    Smooth,
}

impl Convexity {
    pub fn onehot(self) -> [f64; 3] {
        let mut a = [0.0; 3];
        a[self as usize] = 1.0;
        a
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EdgeAttributes {
    pub type_onehot: [f64; CurveType::COUNT],
    pub length: f64,
    /// `(concave, convex, smooth)`.
    pub convexity: [f64; 3],
}

impl EdgeAttributes {
    pub fn to_array(&self) -> [f64; EDGE_ATTR_DIM] {
        let mut a = [0.0; EDGE_ATTR_DIM];
        a[..5].copy_from_slice(&self.type_onehot);
        a[5] = self.length;
        a[6..].copy_from_slice(&self.convexity);
        a
    }

    pub fn from_array(a: &[f64; EDGE_ATTR_DIM]) -> Self {
        Self { type_onehot: a[..5].try_into().unwrap(), length: a[5], convexity: a[6..].try_into().unwrap() }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Gaag {
    pub n_faces: usize,
    pub n_edges: usize,
    pub face_grids_low: Vec<FaceGrid>,
    pub face_grids_high: Vec<FaceGrid>,
    pub face_attrs: Vec<FaceAttributes>,
    pub edge_samples: Vec<EdgeSamples>,
    pub edge_attrs: Vec<EdgeAttributes>,
    /// `(face_i, face_j, edge_id)`, each topological edge stored once.
    pub adjacency: Vec<[usize; 3]>,
    pub face_labels: Option<Vec<usize>>,
    pub shape_label: Option<usize>,
}

fn onehot<const N: usize>(i: usize) -> [f64; N] {
    let mut a = [0.0; N];
    a[i] = 1.0;
    a
}

fn lattice(lo: f64, hi: f64, k: usize, n: usize) -> f64 {
    if k + 1 == n {
        hi
    } else {
        lo + (hi - lo) * k as f64 / (n - 1) as f64
    }
}

pub fn sample_face_grid(face: &SurfacePatch, n: usize) -> Result<FaceGrid> {
    if n != LOW_RES && n != HIGH_RES {
        return Err(Error::Contract(format!("grid resolution {n} not in {{{LOW_RES}, {HIGH_RES}}}")));
    }
    let d = face.uv_domain;
    let mut points = Vec::with_capacity(n * n);
    for r in 0..n {
        let u = lattice(d.u[0], d.u[1], r, n);
        for c in 0..n {
            let v = lattice(d.v[0], d.v[1], c, n);
            let p = face.point(u, v);
            let nrm = face.normal(u, v);
            if !p.is_finite() || !nrm.is_finite() || (nrm.norm() - 1.0).abs() > 1e-9 {
                return Err(Error::InvalidGeometry(format!("face evaluation failed at uv=({u}, {v})")));
            }
            let tau = if face.retained(u, v) { 1.0 } else { 0.0 };
            points.push([p.0[0], p.0[1], p.0[2], nrm.0[0], nrm.0[1], nrm.0[2], tau]);
        }
    }
    Ok(FaceGrid { resolution: n, points })
}

/// Area, area-weighted centroid and bounding box of the trimmed region by
/// midpoint quadrature of `|P_u x P_v|`.
pub fn compute_face_attributes(face: &SurfacePatch) -> Result<FaceAttributes> {
    let d = face.uv_domain;
    let m = AREA_CELLS;
    let (du, dv) = ((d.u[1] - d.u[0]) / m as f64, (d.v[1] - d.v[0]) / m as f64);
    let mut area = 0.0;
    let mut moment = V3::ZERO;
    let mut lo = V3([f64::INFINITY; 3]);
    let mut hi = V3([f64::NEG_INFINITY; 3]);
    let mut grow = |p: V3| {
        for k in 0..3 {
            lo.0[k] = lo.0[k].min(p.0[k]);
            hi.0[k] = hi.0[k].max(p.0[k]);
        }
    };
    for i in 0..m {
        let u = d.u[0] + (i as f64 + 0.5) * du;
        for j in 0..m {
            let v = d.v[0] + (j as f64 + 0.5) * dv;
            if !face.retained(u, v) {
                continue;
            }
            let (p, pu, pv) = face.surface.eval_d(u, v);
            let w = pu.cross(pv).norm() * du * dv;
            area += w;
            moment = moment + p * w;
            grow(p);
        }
    }
    for i in 0..=m {
        let u = lattice(d.u[0], d.u[1], i, m + 1);
        for j in 0..=m {
            let v = lattice(d.v[0], d.v[1], j, m + 1);
            if face.retained(u, v) {
                grow(face.point(u, v));
            }
        }
    }
    for lp in &face.trim_loops {
        for q in lp {
            if d.contains(q[0], q[1], 1e-12) {
                grow(face.point(q[0], q[1]));
            }
        }
    }
    if !(area > 0.0) || !area.is_finite() {
        return Err(Error::InvalidGeometry("face has zero trimmed area".into()));
    }
    // Rounding can push a flat face's centroid a hair outside its bounds.
    let mut c = moment * (1.0 / area);
    for k in 0..3 {
        c.0[k] = c.0[k].clamp(lo.0[k], hi.0[k]);
    }
    Ok(FaceAttributes {
        type_onehot: onehot(face.surface_type().index()),
        area,
        centroid: c.0,
        bbox: [lo.0[0], lo.0[1], lo.0[2], hi.0[0], hi.0[1], hi.0[2]],
    })
}

fn incident<'m>(edge: &CurveSegment, model: &'m BRepModel) -> Result<[&'m SurfacePatch; 2]> {
    let [i, j] = edge.incident_faces;
    match (model.faces.get(i), model.faces.get(j)) {
        (Some(a), Some(b)) if i != j => Ok([a, b]),
        _ => Err(Error::InvalidGeometry(format!("edge incident faces ({i}, {j}) invalid"))),
    }
}

/// Position, unit tangent and both incident unit normals at parameter `t`.
fn edge_frame(edge: &CurveSegment, faces: [&SurfacePatch; 2], t: f64) -> Result<(V3, V3, [V3; 2])> {
    let (p, dp) = edge.curve.eval_d(t);
    let speed = dp.norm();
    if !p.is_finite() || !(speed > 1e-14) {
        return Err(Error::InvalidGeometry(format!("degenerate edge sample at t={t}")));
    }
    let mut normals = [V3::ZERO; 2];
    for (k, f) in faces.iter().enumerate() {
        let ((u, v), dist) = f.locate(p);
        if !(dist <= ON_SURFACE_TOL) {
            return Err(Error::InvalidGeometry(format!("edge sample off incident face by {dist:e}")));
        }
        normals[k] = f.normal(u, v);
        if !normals[k].is_finite() {
            return Err(Error::InvalidGeometry("undefined face normal on edge".into()));
        }
    }
    Ok((p, dp * (1.0 / speed), normals))
}

pub fn sample_edge(edge: &CurveSegment, model: &BRepModel) -> Result<EdgeSamples> {
    let faces = incident(edge, model)?;
    let mut points = Vec::with_capacity(EDGE_SAMPLES);
    for k in 0..EDGE_SAMPLES {
        let (p, t, [n1, n2]) = edge_frame(edge, faces, edge.param(k, EDGE_SAMPLES))?;
        let mut row = [0.0; EDGE_POINT_DIM];
        row[..3].copy_from_slice(&p.0);
        row[3..6].copy_from_slice(&t.0);
        row[6..9].copy_from_slice(&n1.0);
        row[9..].copy_from_slice(&n2.0);
        points.push(row);
    }
    Ok(EdgeSamples { points })
}

/// Concave/convex/smooth from the normals at the middle sample. The second
/// face's interior direction `d` (tangent to it, normal to the edge) is found
/// by probing which side of the edge lies on the trimmed face; the edge is
/// convex when the first face's outward normal points away from `d`.
pub fn edge_convexity(edge: &CurveSegment, model: &BRepModel) -> Result<Convexity> {
    let faces = incident(edge, model)?;
    let (p, t, [n1, n2]) = edge_frame(edge, faces, edge.param(EDGE_SAMPLES / 2, EDGE_SAMPLES))?;
    let cos = n1.dot(n2).clamp(-1.0, 1.0);
    if cos.acos() <= SMOOTH_ANGLE_DEG.to_radians() {
        return Ok(Convexity::Smooth);
    }
    let d = n2.cross(t).unit();
    let on_face = |q: V3| {
        let ((u, v), dist) = faces[1].locate(q);
        dist < 10.0 * PROBE_STEP && faces[1].contains_uv(u, v)
    };
    let interior = match (on_face(p + d * PROBE_STEP), on_face(p - d * PROBE_STEP)) {
        (true, false) => d,
        (false, true) => -d,
        _ => return Err(Error::InvalidGeometry("cannot orient edge against its second face".into())),
    };
    Ok(if n1.dot(interior) < 0.0 { Convexity::Convex } else { Convexity::Concave })
}

pub fn compute_edge_attributes(edge: &CurveSegment, model: &BRepModel) -> Result<EdgeAttributes> {
    let length = edge.length();
    if !(length > 0.0) || !length.is_finite() {
        return Err(Error::InvalidGeometry("edge has zero length".into()));
    }
    Ok(EdgeAttributes {
        type_onehot: onehot(edge.curve_type().index()),
        length,
        convexity: edge_convexity(edge, model)?.onehot(),
    })
}

pub fn build_gaag(model: &BRepModel) -> Result<Gaag> {
    let mut g = Gaag {
        n_faces: model.faces.len(),
        n_edges: model.edges.len(),
        face_grids_low: Vec::new(),
        face_grids_high: Vec::new(),
        face_attrs: Vec::new(),
        edge_samples: Vec::new(),
        edge_attrs: Vec::new(),
        adjacency: model.adjacency(),
        face_labels: Some(model.face_labels.clone()),
        shape_label: Some(model.shape_label),
    };
    for f in &model.faces {
        g.face_grids_low.push(sample_face_grid(f, LOW_RES)?);
        g.face_grids_high.push(sample_face_grid(f, HIGH_RES)?);
        g.face_attrs.push(compute_face_attributes(f)?);
    }
    for e in &model.edges {
        g.edge_samples.push(sample_edge(e, model)?);
        g.edge_attrs.push(compute_edge_attributes(e, model)?);
    }
    Ok(g)
}

impl Gaag {
    /// Structural checks shared by the reader and by callers that build graphs by hand.
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Format(m));
        if self.face_grids_low.len() != self.n_faces
            || self.face_grids_high.len() != self.n_faces
            || self.face_attrs.len() != self.n_faces
        {
            return bad(format!("face arrays do not match n_faces={}", self.n_faces));
        }
        if self.edge_samples.len() != self.n_edges || self.edge_attrs.len() != self.n_edges {
            return bad(format!("edge arrays do not match n_edges={}", self.n_edges));
        }
        for (grids, n) in [(&self.face_grids_low, LOW_RES), (&self.face_grids_high, HIGH_RES)] {
            if grids.iter().any(|g| g.resolution != n || g.points.len() != n * n) {
                return bad(format!("face grid is not {n}x{n}"));
            }
        }
        if self.edge_samples.iter().any(|e| e.points.len() != EDGE_SAMPLES) {
            return bad(format!("edge samples are not {EDGE_SAMPLES}x{EDGE_POINT_DIM}"));
        }
        if self.adjacency.len() != self.n_edges {
            return bad("adjacency must list every edge exactly once".into());
        }
        let mut seen = vec![false; self.n_edges];
        for &[i, j, e] in &self.adjacency {
            if i >= self.n_faces || j >= self.n_faces || e >= self.n_edges || seen[e] {
                return bad(format!("invalid adjacency triple ({i}, {j}, {e})"));
            }
            seen[e] = true;
        }
        if let Some(l) = &self.face_labels {
            if l.len() != self.n_faces {
                return bad("face_labels length mismatch".into());
            }
        }
        let finite = self.face_grids_low.iter().chain(&self.face_grids_high).all(|g| g.points.iter().flatten().all(|x| x.is_finite()))
            && self.face_attrs.iter().all(|a| a.to_array().iter().all(|x| x.is_finite()))
            && self.edge_samples.iter().all(|e| e.points.iter().flatten().all(|x| x.is_finite()))
            && self.edge_attrs.iter().all(|a| a.to_array().iter().all(|x| x.is_finite()));
        if !finite {
            return bad("non-finite value in payload".into());
        }
        Ok(())
    }

    /// Face indices of the edge `e`, in stored order.
    pub fn edge_faces(&self) -> Vec<[usize; 2]> {
        let mut out = vec![[0, 0]; self.n_edges];
        for &[i, j, e] in &self.adjacency {
            out[e] = [i, j];
        }
        out
    }
}

/// Relabels faces so that old face `f` becomes face `perm[f]`.
pub fn permute_faces(g: &Gaag, perm: &[usize]) -> Gaag {
    assert_eq!(perm.len(), g.n_faces);
    let mut inv = vec![0; g.n_faces];
    for (old, &new) in perm.iter().enumerate() {
        inv[new] = old;
    }
    let pick = |v: &Vec<FaceGrid>| inv.iter().map(|&o| v[o].clone()).collect();
    Gaag {
        face_grids_low: pick(&g.face_grids_low),
        face_grids_high: pick(&g.face_grids_high),
        face_attrs: inv.iter().map(|&o| g.face_attrs[o].clone()).collect(),
        adjacency: g.adjacency.iter().map(|&[i, j, e]| [perm[i], perm[j], e]).collect(),
        face_labels: g.face_labels.as_ref().map(|l| inv.iter().map(|&o| l[o]).collect()),
        ..g.clone()
    }
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct GaagDoc {
    version: String,
    n_faces: usize,
    n_edges: usize,
    face_grids_low: Vec<Vec<Vec<[f64; FACE_POINT_DIM]>>>,
    face_grids_high: Vec<Vec<Vec<[f64; FACE_POINT_DIM]>>>,
    face_attrs: Vec<[f64; FACE_ATTR_DIM]>,
    edge_samples: Vec<Vec<[f64; EDGE_POINT_DIM]>>,
    edge_attrs: Vec<[f64; EDGE_ATTR_DIM]>,
    adjacency: Vec<[usize; 3]>,
    face_labels: Option<Vec<usize>>,
    shape_label: Option<usize>,
}

fn grid_rows(g: &FaceGrid) -> Vec<Vec<[f64; FACE_POINT_DIM]>> {
    g.points.chunks(g.resolution).map(<[_]>::to_vec).collect()
}

fn grid_from_rows(rows: Vec<Vec<[f64; FACE_POINT_DIM]>>) -> Result<FaceGrid> {
    let n = rows.len();
    if rows.iter().any(|r| r.len() != n) {
        return Err(Error::Format("face grid is not square".into()));
    }
    Ok(FaceGrid { resolution: n, points: rows.into_iter().flatten().collect() })
}

pub fn to_json(g: &Gaag) -> Result<String> {
    g.validate()?;
    let doc = GaagDoc {
        version: FORMAT_VERSION.into(),
        n_faces: g.n_faces,
        n_edges: g.n_edges,
        face_grids_low: g.face_grids_low.iter().map(grid_rows).collect(),
        face_grids_high: g.face_grids_high.iter().map(grid_rows).collect(),
        face_attrs: g.face_attrs.iter().map(FaceAttributes::to_array).collect(),
        edge_samples: g.edge_samples.iter().map(|e| e.points.clone()).collect(),
        edge_attrs: g.edge_attrs.iter().map(EdgeAttributes::to_array).collect(),
        adjacency: g.adjacency.clone(),
        face_labels: g.face_labels.clone(),
        shape_label: g.shape_label,
    };
    serde_json::to_string(&doc).map_err(|e| Error::Format(e.to_string()))
}

pub fn from_json(text: &str) -> Result<Gaag> {
    #[derive(Deserialize)]
    struct Versioned {
        version: serde_json::Value,
    }
    let v: Versioned = serde_json::from_str(text).map_err(|e| Error::Format(format!("malformed gAAG: {e}")))?;
    if v.version != serde_json::Value::String(FORMAT_VERSION.into()) {
        return Err(Error::Format(format!("unsupported gAAG version {} (expected \"{FORMAT_VERSION}\")", v.version)));
    }
    let doc: GaagDoc = serde_json::from_str(text).map_err(|e| Error::Format(format!("malformed gAAG: {e}")))?;
    let g = Gaag {
        n_faces: doc.n_faces,
        n_edges: doc.n_edges,
        face_grids_low: doc.face_grids_low.into_iter().map(grid_from_rows).collect::<Result<_>>()?,
        face_grids_high: doc.face_grids_high.into_iter().map(grid_from_rows).collect::<Result<_>>()?,
        face_attrs: doc.face_attrs.iter().map(FaceAttributes::from_array).collect(),
        edge_samples: doc.edge_samples.into_iter().map(|points| EdgeSamples { points }).collect(),
        edge_attrs: doc.edge_attrs.iter().map(EdgeAttributes::from_array).collect(),
        adjacency: doc.adjacency,
        face_labels: doc.face_labels,
        shape_label: doc.shape_label,
    };
    g.validate()?;
    Ok(g)
}

pub fn write_gaag(g: &Gaag, path: &Path) -> Result<()> {
    let text = to_json(g)?;
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    w.write_all(text.as_bytes()).and_then(|_| w.flush()).map_err(|e| Error::io(path, e))
}

pub fn read_gaag(path: &Path) -> Result<Gaag> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    from_json(&text)
}

#[cfg(test)]
mod tests {
    use std::f64::consts::PI;

    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::geometry::{Surface, UvRect};
    use crate::synth::{generate_model, Template};

    fn plane(w: f64, h: f64) -> SurfacePatch {
        SurfacePatch::new(Surface::Plane { origin: V3::ZERO, x_axis: V3::X, y_axis: V3::Y }, false, UvRect::new(0.0, w, 0.0, h))
    }

    /// Monte-Carlo area of the trimmed region: uniform uv samples weighted by `|P_u x P_v|`.
    fn mc_area(face: &SurfacePatch, n: usize, seed: u64) -> f64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = face.uv_domain;
        let mut s = 0.0;
        for _ in 0..n {
            let u = rng.random_range(d.u[0]..d.u[1]);
            let v = rng.random_range(d.v[0]..d.v[1]);
            if face.retained(u, v) {
                let (_, pu, pv) = face.surface.eval_d(u, v);
                s += pu.cross(pv).norm();
            }
        }
        s / n as f64 * d.measure()
    }

    #[test]
    fn unit_plane_grid() {
        let g = sample_face_grid(&plane(1.0, 1.0), 3).unwrap();
        assert_eq!(g.points.len(), 9);
        assert!(g.points.iter().all(|p| p[3..] == [0.0, 0.0, 1.0, 1.0]));
        assert_eq!(g.at(2, 2)[..3], [1.0, 1.0, 0.0]);
    }

    #[test]
    fn trim_hole_grid() {
        let hole = vec![[0.25, 0.25], [0.25, 0.75], [0.75, 0.75], [0.75, 0.25]];
        let g = sample_face_grid(&plane(1.0, 1.0).with_loop(hole), 13).unwrap();
        for (r, c) in [(0, 0), (0, 12), (12, 0), (12, 12)] {
            assert_eq!(g.at(r, c)[6], 1.0);
        }
        assert_eq!(g.at(6, 6)[6], 0.0);
    }

    #[test]
    fn cylinder_grid_normals_match_finite_differences() {
        let s = Surface::Cylinder { center: V3::ZERO, axis: V3::Z, x_ref: V3::X, radius: 1.3 };
        let f = SurfacePatch::new(s.clone(), false, UvRect::new(0.2, 2.5, -0.5, 1.0));
        let g = sample_face_grid(&f, 13).unwrap();
        for r in 0..13 {
            for c in 0..13 {
                let u = 0.2 + 2.3 * r as f64 / 12.0;
                let v = -0.5 + 1.5 * c as f64 / 12.0;
                let h = 1e-5;
                let pu = (s.eval(u + h, v) - s.eval(u - h, v)) * (0.5 / h);
                let pv = (s.eval(u, v + h) - s.eval(u, v - h)) * (0.5 / h);
                let n = pu.cross(pv).unit();
                let got = V3([g.at(r, c)[3], g.at(r, c)[4], g.at(r, c)[5]]);
                assert!((got - n).norm() < 1e-4);
            }
        }
    }

    #[test]
    fn planar_and_cylinder_areas() {
        let a = compute_face_attributes(&plane(2.0, 3.0)).unwrap();
        assert!((a.area - 6.0).abs() < 1e-9);
        assert!((V3(a.centroid) - V3::new(1.0, 1.5, 0.0)).norm() < 1e-9);
        assert_eq!(a.type_onehot, [1.0, 0.0, 0.0, 0.0, 0.0, 0.0]);

        let cyl = SurfacePatch::new(
            Surface::Cylinder { center: V3::ZERO, axis: V3::Z, x_ref: V3::X, radius: 1.0 },
            false,
            UvRect::new(0.0, 2.0 * PI, 0.0, 2.0),
        );
        let a = compute_face_attributes(&cyl).unwrap();
        let mc = mc_area(&cyl, 100_000, 1);
        assert!((a.area - 4.0 * PI).abs() / (4.0 * PI) < 0.01);
        assert!((a.area - mc).abs() / mc < 0.01);
    }

    #[test]
    fn template_face_areas_agree_with_monte_carlo() {
        for t in Template::ALL {
            let m = generate_model(t, 11).unwrap();
            for (k, f) in m.faces.iter().enumerate() {
                let a = compute_face_attributes(f).unwrap();
                let mc = mc_area(f, 100_000, k as u64);
                assert!((a.area - mc).abs() / mc < 0.01, "{t} face {k}: {} vs {mc}", a.area);
                for i in 0..3 {
                    assert!(a.bbox[i] <= a.centroid[i] && a.centroid[i] <= a.bbox[i + 3]);
                }
            }
        }
    }

    #[test]
    fn edge_tangents_and_convexity() {
        let m = generate_model(Template::Box, 0).unwrap();
        for e in &m.edges {
            let s = sample_edge(e, &m).unwrap();
            let t0 = &s.points[0][3..6];
            assert!(s.points.iter().all(|p| (p[3..6].iter().zip(t0).map(|(a, b)| (a - b).abs()).sum::<f64>()) < 1e-12));
            assert_eq!(compute_edge_attributes(e, &m).unwrap().convexity, [0.0, 1.0, 0.0]);
        }
    }

    #[test]
    fn slot_floor_edges_are_concave_with_analytic_normals() {
        let m = generate_model(Template::BoxSlot, 4).unwrap();
        let slot = crate::synth::FaceLabel::Slot.id();
        let mut concave = 0;
        for e in &m.edges {
            let [i, j] = e.incident_faces;
            if m.face_labels[i] != slot || m.face_labels[j] != slot {
                continue;
            }
            let s = sample_edge(e, &m).unwrap();
            for p in &s.points {
                let q = V3([p[0], p[1], p[2]]);
                for (k, f) in [i, j].into_iter().enumerate() {
                    let ((u, v), _) = m.faces[f].locate(q);
                    let n = m.faces[f].normal(u, v);
                    assert!((V3([p[6 + 3 * k], p[7 + 3 * k], p[8 + 3 * k]]) - n).norm() < 1e-6);
                }
                assert!((V3([p[6], p[7], p[8]]) - V3([p[9], p[10], p[11]])).norm() > 0.5);
            }
            if compute_edge_attributes(e, &m).unwrap().convexity == [1.0, 0.0, 0.0] {
                concave += 1;
            }
        }
        assert_eq!(concave, 2);
    }

    #[test]
    fn hole_rims_are_convex_and_boss_bases_concave() {
        let m = generate_model(Template::BoxHole, 2).unwrap();
        let g = build_gaag(&m).unwrap();
        for (e, a) in m.edges.iter().zip(&g.edge_attrs) {
            if e.curve_type() == CurveType::Circle {
                assert_eq!(a.convexity, Convexity::Convex.onehot());
            }
        }
        for seed in 0..8 {
            let m = generate_model(Template::CylBoss, seed).unwrap();
            let boss = crate::synth::FaceLabel::Boss.id();
            let g = build_gaag(&m).unwrap();
            let base: Vec<_> = m
                .edges
                .iter()
                .zip(&g.edge_attrs)
                .filter(|(e, _)| (m.face_labels[e.incident_faces[0]] == boss) != (m.face_labels[e.incident_faces[1]] == boss))
                .collect();
            assert_eq!(base.len(), 2);
            let expect = if m.faces.iter().any(|f| f.surface_type() == SurfaceType::Torus) { Convexity::Smooth } else { Convexity::Concave };
            assert!(base.iter().all(|(_, a)| a.convexity == expect.onehot()));
        }
    }

    #[test]
    fn box_graph_shape() {
        let g = build_gaag(&generate_model(Template::Box, 9).unwrap()).unwrap();
        assert_eq!((g.n_faces, g.n_edges), (6, 12));
        let mut deg = [0; 6];
        for &[i, j, _] in &g.adjacency {
            deg[i] += 1;
            deg[j] += 1;
        }
        assert_eq!(deg, [4; 6]);
    }

    #[test]
    fn json_round_trip_and_version_check() {
        let g = build_gaag(&generate_model(Template::LBracket, 5).unwrap()).unwrap();
        let text = to_json(&g).unwrap();
        assert_eq!(from_json(&text).unwrap(), g);
        let v2 = text.replacen("\"version\":\"1\"", "\"version\":\"2\"", 1);
        assert!(matches!(from_json(&v2), Err(Error::Format(m)) if m.contains("version")));
        assert!(matches!(from_json(&text[..text.len() / 2]), Err(Error::Format(_))));
        let mut bad = g.clone();
        bad.face_attrs[0].area = f64::NAN;
        assert!(matches!(to_json(&bad), Err(Error::Format(_))));
    }

    #[test]
    fn low_grid_is_direct_evaluation_not_subsample() {
        let m = generate_model(Template::CylBoss, 3).unwrap();
        for f in &m.faces {
            let lo = sample_face_grid(f, LOW_RES).unwrap();
            let d = f.uv_domain;
            assert_eq!(lo.at(0, 0)[..3], f.point(d.u[0], d.v[0]).0);
            assert_eq!(lo.at(2, 2)[..3], f.point(d.u[1], d.v[1]).0);
            assert_eq!(lo.at(1, 1)[..3], f.point(d.u[0] + (d.u[1] - d.u[0]) * 1.0 / 2.0, d.v[0] + (d.v[1] - d.v[0]) * 1.0 / 2.0).0);
        }
    }
}
