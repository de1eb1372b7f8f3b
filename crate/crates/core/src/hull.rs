//! 3D convex hull by quickhull.

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::geometry::{bounds, TriangleMesh, Vec3};

/// Relative tolerance for "above a face", scaled by the input diameter.
const EPS_REL: f64 = 1e-10;

struct Face {
    v: [usize; 3],
    normal: Vec3,
    offset: f64,
    outside: Vec<usize>,
    alive: bool,
}

impl Face {
    fn new(pts: &[Vec3], v: [usize; 3]) -> Face {
        let [a, b, c] = v.map(|i| pts[i]);
        let normal = (b - a).cross(&(c - a)).normalize();
        Face { v, normal, offset: -normal.dot(&a), outside: Vec::new(), alive: true }
    }

    fn distance(&self, p: &Vec3) -> f64 {
        self.normal.dot(p) + self.offset
    }
}

/// How many dimensions the point set actually spans.
#[derive(Debug, Clone, PartialEq)]
pub(crate) enum Span {
    Point(usize),
    Line(usize, usize),
    Plane([usize; 3]),
    Volume([usize; 4]),
}

fn diameter(pts: &[Vec3]) -> f64 {
    bounds(pts).map(|(lo, hi)| (hi - lo).norm()).unwrap_or(0.0)
}

pub(crate) fn span(pts: &[Vec3], eps: f64) -> Span {
    // extremes along each axis give a well-spread first edge
    let mut extremes = Vec::new();
    for a in 0..3 {
        let lo = (0..pts.len()).min_by(|&i, &j| pts[i][a].total_cmp(&pts[j][a])).unwrap();
        let hi = (0..pts.len()).max_by(|&i, &j| pts[i][a].total_cmp(&pts[j][a])).unwrap();
        extremes.push(lo);
        extremes.push(hi);
    }
    let mut best = (0.0, extremes[0], extremes[0]);
    for &i in &extremes {
        for &j in &extremes {
            let d = (pts[i] - pts[j]).norm();
            if d > best.0 {
                best = (d, i, j);
            }
        }
    }
    let (d, a, b) = best;
    if d <= eps {
        return Span::Point(a);
    }
    let dir = (pts[b] - pts[a]) / d;
    let line_dist = |p: &Vec3| {
        let r = p - pts[a];
        (r - dir * r.dot(&dir)).norm()
    };
    let c = (0..pts.len()).max_by(|&i, &j| line_dist(&pts[i]).total_cmp(&line_dist(&pts[j]))).unwrap();
    if line_dist(&pts[c]) <= eps {
        return Span::Line(a, b);
    }
    let n = (pts[b] - pts[a]).cross(&(pts[c] - pts[a])).normalize();
    let plane_dist = |p: &Vec3| n.dot(&(p - pts[a])).abs();
    let e = (0..pts.len()).max_by(|&i, &j| plane_dist(&pts[i]).total_cmp(&plane_dist(&pts[j]))).unwrap();
    if plane_dist(&pts[e]) <= eps {
        return Span::Plane([a, b, c]);
    }
    Span::Volume([a, b, c, e])
}

/// Hull faces as index triples into `pts`, wound counter-clockwise seen from outside.
pub fn quickhull(pts: &[Vec3]) -> Result<Vec<[usize; 3]>> {
    if pts.len() < 4 {
        return Err(Error::DegenerateInput(format!("need at least 4 points, got {}", pts.len())));
    }
    if pts.iter().any(|p| !p.iter().all(|x| x.is_finite())) {
        return Err(Error::InvalidInput("non-finite point".into()));
    }
    let eps = EPS_REL * diameter(pts).max(1e-300);
    let simplex = match span(pts, eps) {
        Span::Volume(s) => s,
        other => return Err(Error::DegenerateInput(format!("input is not full-dimensional ({other:?})"))),
    };
    let interior = simplex.iter().map(|&i| pts[i]).sum::<Vec3>() / 4.0;

    let mut faces: Vec<Face> = Vec::new();
    let mut edge_face: HashMap<(usize, usize), usize> = HashMap::new();
    let add_face = |faces: &mut Vec<Face>, edge_face: &mut HashMap<(usize, usize), usize>, v: [usize; 3]| {
        let id = faces.len();
        faces.push(Face::new(pts, v));
        for k in 0..3 {
            edge_face.insert((v[k], v[(k + 1) % 3]), id);
        }
        id
    };
    let [a, b, c, d] = simplex;
    for tri in [[a, b, c], [a, b, d], [a, c, d], [b, c, d]] {
        let f = Face::new(pts, tri);
        let v = if f.distance(&interior) > 0.0 { [tri[0], tri[2], tri[1]] } else { tri };
        add_face(&mut faces, &mut edge_face, v);
    }

    let assign = |faces: &mut Vec<Face>, candidates: &[usize], targets: &[usize]| {
        for &p in candidates {
            let mut best = (eps, usize::MAX);
            for &f in targets {
                let dist = faces[f].distance(&pts[p]);
                if dist > best.0 {
                    best = (dist, f);
                }
            }
            if best.1 != usize::MAX {
                faces[best.1].outside.push(p);
            }
        }
    };
    let all: Vec<usize> = (0..pts.len()).filter(|i| !simplex.contains(i)).collect();
    assign(&mut faces, &all, &[0, 1, 2, 3]);

    let mut pending: Vec<usize> = (0..4).filter(|&f| !faces[f].outside.is_empty()).collect();
    while let Some(fid) = pending.pop() {
        if !faces[fid].alive || faces[fid].outside.is_empty() {
            continue;
        }
        let eye = *faces[fid]
            .outside
            .iter()
            .max_by(|&&i, &&j| faces[fid].distance(&pts[i]).total_cmp(&faces[fid].distance(&pts[j])).then(j.cmp(&i)))
            .unwrap();
        let e = pts[eye];

        // visible region by flood fill from the seed face
        let mut visible = vec![fid];
        let mut seen = std::collections::HashSet::from([fid]);
        let mut horizon = Vec::new();
        let mut k = 0;
        while k < visible.len() {
            let f = visible[k];
            k += 1;
            let v = faces[f].v;
            for s in 0..3 {
                let (p, q) = (v[s], v[(s + 1) % 3]);
                let nb = edge_face[&(q, p)];
                if seen.contains(&nb) {
                    if !faces[nb].alive || faces[nb].distance(&e) > eps {
                        continue;
                    }
                    horizon.push((p, q));
                    continue;
                }
                if faces[nb].distance(&e) > eps {
                    seen.insert(nb);
                    visible.push(nb);
                } else {
                    seen.insert(nb);
                    horizon.push((p, q));
                }
            }
        }
        // An edge may be recorded as horizon before its neighbor turned out visible.
        let visible_set: std::collections::HashSet<usize> = visible.iter().copied().collect();
        horizon.retain(|&(p, q)| !visible_set.contains(&edge_face[&(q, p)]));

        let mut orphans = Vec::new();
        for &f in &visible {
            faces[f].alive = false;
            orphans.append(&mut faces[f].outside);
            let v = faces[f].v;
            for s in 0..3 {
                let key = (v[s], v[(s + 1) % 3]);
                if edge_face.get(&key) == Some(&f) {
                    edge_face.remove(&key);
                }
            }
        }
        let mut created = Vec::with_capacity(horizon.len());
        for &(p, q) in &horizon {
            created.push(add_face(&mut faces, &mut edge_face, [p, q, eye]));
        }
        orphans.retain(|&p| p != eye);
        assign(&mut faces, &orphans, &created);
        pending.extend(created.into_iter().filter(|&f| !faces[f].outside.is_empty()));
    }

    Ok(faces.into_iter().filter(|f| f.alive).map(|f| f.v).collect())
}

/// Convex hull as a mesh over the hull vertices only.
pub fn convex_hull_3d(pts: &[Vec3]) -> Result<TriangleMesh> {
    let faces = quickhull(pts)?;
    let mut remap = HashMap::new();
    let mut vertices = Vec::new();
    let triangles = faces
        .iter()
        .map(|f| {
            f.map(|i| {
                *remap.entry(i).or_insert_with(|| {
                    vertices.push(pts[i]);
                    vertices.len() - 1
                })
            })
        })
        .collect();
    TriangleMesh::new(vertices, triangles)
}

/// Sorted indices of hull vertices. Works for degenerate (flat, collinear,
/// coincident) inputs by falling back to the lower-dimensional hull.
pub fn hull_vertex_indices(pts: &[Vec3]) -> Vec<usize> {
    if pts.is_empty() {
        return Vec::new();
    }
    let eps = EPS_REL * diameter(pts).max(1e-300);
    let mut out: Vec<usize> = match span(pts, eps) {
        Span::Point(i) => vec![i],
        Span::Line(a, b) => {
            let dir = (pts[b] - pts[a]).normalize();
            let t = |i: usize| dir.dot(&(pts[i] - pts[a]));
            let lo = (0..pts.len()).min_by(|&i, &j| t(i).total_cmp(&t(j)).then(i.cmp(&j))).unwrap();
            let hi = (0..pts.len()).max_by(|&i, &j| t(i).total_cmp(&t(j)).then(j.cmp(&i))).unwrap();
            vec![lo, hi]
        }
        Span::Plane([a, b, c]) => {
            let u = (pts[b] - pts[a]).normalize();
            let w = (pts[c] - pts[a]).cross(&u).cross(&u).normalize();
            let flat: Vec<(f64, f64)> = pts.iter().map(|p| (u.dot(&(p - pts[a])), w.dot(&(p - pts[a])))).collect();
            monotone_chain(&flat, eps)
        }
        Span::Volume(_) => {
            let faces = quickhull(pts).expect("full-dimensional input");
            faces.into_iter().flatten().collect()
        }
    };
    out.sort_unstable();
    out.dedup();
    out
}

/// 2D hull vertices (strict corners only).
fn monotone_chain(p: &[(f64, f64)], eps: f64) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..p.len()).collect();
    idx.sort_by(|&i, &j| p[i].0.total_cmp(&p[j].0).then(p[i].1.total_cmp(&p[j].1)).then(i.cmp(&j)));
    let cross = |o: usize, a: usize, b: usize| (p[a].0 - p[o].0) * (p[b].1 - p[o].1) - (p[a].1 - p[o].1) * (p[b].0 - p[o].0);
    let scale = eps.max(1e-300);
    let mut hull: Vec<usize> = Vec::new();
    for pass in 0..2 {
        let start = hull.len();
        let iter: Box<dyn Iterator<Item = &usize>> = if pass == 0 { Box::new(idx.iter()) } else { Box::new(idx.iter().rev()) };
        for &i in iter {
            while hull.len() >= start + 2 && cross(hull[hull.len() - 2], hull[hull.len() - 1], i) <= scale * scale {
                hull.pop();
            }
            hull.push(i);
        }
        hull.pop();
    }
    hull
}
