//! Poisson surface reconstruction on a regular grid.
//!
//! The oriented samples are splatted into a vector field `V`, the indicator
//! `χ` is recovered from `∇²χ = ∇·V`, and the surface is the level set of `χ`
//! at its mean value over the samples.

mod tables;

use std::collections::HashMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{PointCloud, TriangleMesh, Vec3};
use tables::{EDGE_CORNERS, EDGE_TABLE, TRIANGLE_TABLE};

pub const DEFAULT_MARGIN_FRACTION: f64 = 0.1;
pub const DEFAULT_TOLERANCE: f64 = 1e-6;
pub const DEFAULT_MAX_ITERATIONS: usize = 4000;

const CORNER_OFFSETS: [[usize; 3]; 8] = [[0, 0, 0], [1, 0, 0], [1, 1, 0], [0, 1, 0], [0, 0, 1], [1, 0, 1], [1, 1, 1], [0, 1, 1]];
const REDUCTION_CHUNK: usize = 4096;

/// Regular grid; node `(i, j, k)` sits at `origin + spacing·(i, j, k)` and is
/// stored at `(i·ny + j)·nz + k`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Grid<T> {
    pub dims: [usize; 3],
    pub origin: Vec3,
    pub spacing: f64,
    pub values: Vec<T>,
}

pub type ScalarGrid = Grid<f64>;
pub type VectorGrid = Grid<Vec3>;

impl<T: Clone + Send + Sync> Grid<T> {
    pub fn filled(dims: [usize; 3], origin: Vec3, spacing: f64, value: T) -> Result<Self> {
        let g = Grid { dims, origin, spacing, values: vec![value; dims[0] * dims[1] * dims[2]] };
        g.validate()?;
        Ok(g)
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.dims[0] * self.dims[1] * self.dims[2];
        if self.values.len() != n {
            return Err(Error::DimensionMismatch { expected: format!("{n} grid values"), actual: self.values.len().to_string() });
        }
        if !(self.spacing > 0.0 && self.spacing.is_finite()) {
            return Err(Error::InvalidInput(format!("grid spacing must be positive, got {}", self.spacing)));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    #[inline]
    pub fn index(&self, i: usize, j: usize, k: usize) -> usize {
        (i * self.dims[1] + j) * self.dims[2] + k
    }

    pub fn get(&self, i: usize, j: usize, k: usize) -> &T {
        &self.values[self.index(i, j, k)]
    }

    pub fn node_position(&self, i: usize, j: usize, k: usize) -> Vec3 {
        self.origin + Vec3::new(i as f64, j as f64, k as f64) * self.spacing
    }

    fn same_geometry<U>(&self, values: Vec<U>) -> Grid<U> {
        Grid { dims: self.dims, origin: self.origin, spacing: self.spacing, values }
    }

    /// Cell containing `p` and the fractional position inside it, or `None` outside.
    fn locate(&self, p: &Vec3) -> Option<([usize; 3], Vec3)> {
        let g = (p - self.origin) / self.spacing;
        let mut cell = [0; 3];
        let mut frac = Vec3::zeros();
        for a in 0..3 {
            if !(g[a] >= 0.0 && g[a] <= (self.dims[a] - 1) as f64) {
                return None;
            }
            let c = (g[a].floor() as usize).min(self.dims[a].saturating_sub(2));
            cell[a] = c;
            frac[a] = g[a] - c as f64;
        }
        Some((cell, frac))
    }
}

impl ScalarGrid {
    /// Trilinear interpolation; `None` outside the grid.
    pub fn sample(&self, p: &Vec3) -> Option<f64> {
        let (c, f) = self.locate(p)?;
        let mut acc = 0.0;
        for o in CORNER_OFFSETS {
            let w = trilinear_weight(&f, o);
            if w != 0.0 {
                acc += w * self.get(c[0] + o[0], c[1] + o[1], c[2] + o[2]);
            }
        }
        Some(acc)
    }
}

fn trilinear_weight(f: &Vec3, o: [usize; 3]) -> f64 {
    (0..3).map(|a| if o[a] == 1 { f[a] } else { 1.0 - f[a] }).product()
}

/// Grid covering the cloud's bounding box grown by `margin_mm` on every side.
/// Spacing is shared by all axes; the box is centered in the grid.
pub fn grid_for_cloud(pts: &PointCloud, dims: [usize; 3], margin_mm: f64) -> Result<(Vec3, f64)> {
    if dims.iter().any(|&d| d < 8) {
        return Err(Error::InvalidInput(format!("grid dimensions must be at least 8 per axis, got {dims:?}")));
    }
    if !(margin_mm >= 0.0) {
        return Err(Error::InvalidInput(format!("margin must be non-negative, got {margin_mm}")));
    }
    let (lo, hi) = pts.aabb().ok_or(Error::EmptyCloud)?;
    let ext = hi - lo;
    let spacing = (0..3).map(|a| (ext[a] + 2.0 * margin_mm) / (dims[a] - 1) as f64).fold(0.0, f64::max);
    if !(spacing > 0.0) {
        return Err(Error::DegenerateInput("cloud has zero extent and no margin".into()));
    }
    let center = (lo + hi) * 0.5;
    let half = Vec3::new((dims[0] - 1) as f64, (dims[1] - 1) as f64, (dims[2] - 1) as f64) * (0.5 * spacing);
    Ok((center - half, spacing))
}

fn require_normals(pts: &PointCloud) -> Result<&[Vec3]> {
    match &pts.normals {
        Some(n) if n.len() == pts.len() && n.iter().any(|v| v.norm_squared() > 0.0) => Ok(n),
        _ => Err(Error::MissingNormals),
    }
}

/// Distributes each normal to its 8 surrounding nodes with trilinear weights,
/// normalized by the number of points.
pub fn splat_normal_field(pts: &PointCloud, dims: [usize; 3], margin_mm: f64) -> Result<VectorGrid> {
    let normals = require_normals(pts)?;
    let (origin, spacing) = grid_for_cloud(pts, dims, margin_mm)?;
    let mut grid = VectorGrid::filled(dims, origin, spacing, Vec3::zeros())?;
    let inv_n = 1.0 / pts.len() as f64;
    for (p, n) in pts.positions.iter().zip(normals) {
        let (c, f) = grid.locate(p).expect("grid covers the cloud");
        for o in CORNER_OFFSETS {
            let w = trilinear_weight(&f, o);
            if w != 0.0 {
                let idx = grid.index(c[0] + o[0], c[1] + o[1], c[2] + o[2]);
                grid.values[idx] += n * (w * inv_n);
            }
        }
    }
    Ok(grid)
}

/// Central-difference divergence, with the field taken as zero outside the grid.
pub fn divergence(v: &VectorGrid) -> ScalarGrid {
    let [nx, ny, nz] = v.dims;
    let h2 = 2.0 * v.spacing;
    let values = (0..v.len())
        .into_par_iter()
        .map(|idx| {
            let k = idx % nz;
            let j = (idx / nz) % ny;
            let i = idx / (ny * nz);
            let at = |i: isize, j: isize, k: isize, a: usize| -> f64 {
                if i < 0 || j < 0 || k < 0 || i >= nx as isize || j >= ny as isize || k >= nz as isize {
                    0.0
                } else {
                    v.get(i as usize, j as usize, k as usize)[a]
                }
            };
            let (i, j, k) = (i as isize, j as isize, k as isize);
            (at(i + 1, j, k, 0) - at(i - 1, j, k, 0) + at(i, j + 1, k, 1) - at(i, j - 1, k, 1) + at(i, j, k + 1, 2) - at(i, j, k - 1, 2)) / h2
        })
        .collect();
    v.same_geometry(values)
}

#[derive(Debug, Clone, PartialEq)]
pub struct PoissonSolution {
    pub chi: ScalarGrid,
    pub iterations: usize,
    /// `‖∇²χ − ∇·V‖ / ‖∇·V‖` over interior nodes.
    pub relative_residual: f64,
    pub converged: bool,
}

impl PoissonSolution {
    /// The field, or `DidNotConverge` when the tolerance was not reached.
    pub fn into_converged(self, tol: f64) -> Result<ScalarGrid> {
        if self.converged {
            Ok(self.chi)
        } else {
            Err(Error::DidNotConverge { tol, residual: self.relative_residual, iterations: self.iterations })
        }
    }
}

fn is_interior(dims: &[usize; 3], idx: usize) -> bool {
    let k = idx % dims[2];
    let j = (idx / dims[2]) % dims[1];
    let i = idx / (dims[1] * dims[2]);
    i > 0 && j > 0 && k > 0 && i + 1 < dims[0] && j + 1 < dims[1] && k + 1 < dims[2]
}

/// Applies `−∇²` (7-point) on interior nodes; boundary entries stay zero.
fn neg_laplacian(dims: &[usize; 3], h: f64, x: &[f64], out: &mut [f64]) {
    let sy = dims[2];
    let sx = dims[1] * dims[2];
    let inv_h2 = 1.0 / (h * h);
    out.par_iter_mut().enumerate().for_each(|(idx, o)| {
        *o = if is_interior(dims, idx) {
            (6.0 * x[idx] - x[idx - 1] - x[idx + 1] - x[idx - sy] - x[idx + sy] - x[idx - sx] - x[idx + sx]) * inv_h2
        } else {
            0.0
        };
    });
}

/// Chunked dot product summed in chunk order, so the result does not depend on scheduling.
fn dot(a: &[f64], b: &[f64]) -> f64 {
    let partial: Vec<f64> = a
        .par_chunks(REDUCTION_CHUNK)
        .zip(b.par_chunks(REDUCTION_CHUNK))
        .map(|(x, y)| x.iter().zip(y).map(|(p, q)| p * q).sum::<f64>())
        .collect();
    partial.iter().sum()
}

fn axpy(y: &mut [f64], alpha: f64, x: &[f64]) {
    y.par_iter_mut().zip(x.par_iter()).for_each(|(y, x)| *y += alpha * x);
}

/// Solves `∇²χ = ∇·V` with `χ = 0` on the grid boundary by conjugate gradients.
pub fn solve_poisson(v: &VectorGrid, tol: f64, max_iter: usize) -> Result<PoissonSolution> {
    v.validate()?;
    if !(tol > 0.0) {
        return Err(Error::InvalidInput(format!("tolerance must be positive, got {tol}")));
    }
    if v.dims.iter().any(|&d| d < 3) {
        return Err(Error::InvalidInput(format!("grid too small for an interior: {:?}", v.dims)));
    }
    let div = divergence(v);
    let dims = v.dims;
    // −∇²χ = −∇·V keeps the operator positive definite.
    let b: Vec<f64> = div.values.iter().enumerate().map(|(i, d)| if is_interior(&dims, i) { -d } else { 0.0 }).collect();
    let b_norm = dot(&b, &b).sqrt();
    let mut x = vec![0.0; b.len()];
    if b_norm == 0.0 {
        return Ok(PoissonSolution { chi: v.same_geometry(x), iterations: 0, relative_residual: 0.0, converged: true });
    }
    let mut r = b.clone();
    let mut p = r.clone();
    let mut ap = vec![0.0; b.len()];
    let mut rr = dot(&r, &r);
    let mut iterations = 0;
    let mut rel = rr.sqrt() / b_norm;
    while rel > tol && iterations < max_iter {
        neg_laplacian(&dims, v.spacing, &p, &mut ap);
        let alpha = rr / dot(&p, &ap);
        axpy(&mut x, alpha, &p);
        axpy(&mut r, -alpha, &ap);
        let rr_new = dot(&r, &r);
        let beta = rr_new / rr;
        rr = rr_new;
        p.par_iter_mut().zip(r.par_iter()).for_each(|(p, r)| *p = r + beta * *p);
        iterations += 1;
        rel = rr.sqrt() / b_norm;
    }
    // The recurrence drifts from the true residual; report the true one.
    neg_laplacian(&dims, v.spacing, &x, &mut ap);
    let true_r: Vec<f64> = b.iter().zip(&ap).map(|(b, a)| b - a).collect();
    let relative_residual = dot(&true_r, &true_r).sqrt() / b_norm;
    let converged = relative_residual <= tol;
    Ok(PoissonSolution { chi: v.same_geometry(x), iterations, relative_residual, converged })
}

/// Relative residual `‖∇²χ − ∇·V‖ / ‖∇·V‖` over interior nodes.
pub fn poisson_residual(chi: &ScalarGrid, v: &VectorGrid) -> f64 {
    let div = divergence(v);
    let mut lap = vec![0.0; chi.len()];
    neg_laplacian(&chi.dims, chi.spacing, &chi.values, &mut lap);
    let (mut num, mut den) = (0.0, 0.0);
    for (i, d) in div.values.iter().enumerate() {
        if is_interior(&chi.dims, i) {
            num += (lap[i] + d).powi(2);
            den += d * d;
        }
    }
    if den == 0.0 {
        num.sqrt()
    } else {
        (num / den).sqrt()
    }
}

/// Extracts the `iso` level set. Triangles wind counter-clockwise seen from
/// the side where the field exceeds `iso`.
pub fn marching_cubes(grid: &ScalarGrid, iso: f64) -> Result<TriangleMesh> {
    grid.validate()?;
    let [nx, ny, nz] = grid.dims;
    if nx < 2 || ny < 2 || nz < 2 {
        return Ok(TriangleMesh::default());
    }
    // Triangles per x-slab, with vertices named by (lower node, axis) edge keys.
    let slabs: Vec<Vec<[(usize, usize); 3]>> = (0..nx - 1)
        .into_par_iter()
        .map(|i| {
            let mut tris = Vec::new();
            for j in 0..ny - 1 {
                for k in 0..nz - 1 {
                    let mut case = 0usize;
                    let mut nodes = [0usize; 8];
                    for (c, o) in CORNER_OFFSETS.iter().enumerate() {
                        nodes[c] = grid.index(i + o[0], j + o[1], k + o[2]);
                        if grid.values[nodes[c]] < iso {
                            case |= 1 << c;
                        }
                    }
                    if EDGE_TABLE[case] == 0 {
                        continue;
                    }
                    let key = |e: usize| -> (usize, usize) {
                        let [a, b] = EDGE_CORNERS[e];
                        let axis = (0..3).find(|&x| CORNER_OFFSETS[a][x] != CORNER_OFFSETS[b][x]).unwrap();
                        (nodes[a].min(nodes[b]), axis)
                    };
                    for t in TRIANGLE_TABLE[case].chunks(3).take_while(|t| t[0] >= 0) {
                        tris.push([key(t[0] as usize), key(t[1] as usize), key(t[2] as usize)]);
                    }
                }
            }
            tris
        })
        .collect();

    let strides = [ny * nz, nz, 1];
    let mut vertex_of: HashMap<(usize, usize), usize> = HashMap::new();
    let mut vertices = Vec::new();
    let mut triangles = Vec::new();
    for tri in slabs.into_iter().flatten() {
        let mut ids = [0usize; 3];
        for (slot, &(node, axis)) in ids.iter_mut().zip(&tri) {
            *slot = *vertex_of.entry((node, axis)).or_insert_with(|| {
                let other = node + strides[axis];
                let (a, b) = (grid.values[node], grid.values[other]);
                let t = if b != a { ((iso - a) / (b - a)).clamp(0.0, 1.0) } else { 0.5 };
                let k = node % nz;
                let j = (node / nz) % ny;
                let i = node / (ny * nz);
                let mut p = grid.node_position(i, j, k);
                p[axis] += t * grid.spacing;
                vertices.push(p);
                vertices.len() - 1
            });
        }
        // The tables wind toward the low side; flip to face increasing values.
        triangles.push([ids[0], ids[2], ids[1]]);
    }
    TriangleMesh::new(vertices, triangles)
}

/// Oriented samples to a closed mesh. The grid has `dims` nodes and a margin
/// of [`DEFAULT_MARGIN_FRACTION`] of the largest extent on each side.
pub fn reconstruct_mesh(pts: &PointCloud, dims: [usize; 3], tol: f64) -> Result<TriangleMesh> {
    reconstruct_mesh_with(pts, dims, tol, DEFAULT_MAX_ITERATIONS)
}

pub fn reconstruct_mesh_with(pts: &PointCloud, dims: [usize; 3], tol: f64, max_iter: usize) -> Result<TriangleMesh> {
    require_normals(pts)?;
    let (lo, hi) = pts.aabb().ok_or(Error::EmptyCloud)?;
    let margin = DEFAULT_MARGIN_FRACTION * (hi - lo).max();
    let field = splat_normal_field(pts, dims, margin)?;
    let solution = solve_poisson(&field, tol, max_iter)?;
    if !solution.converged {
        log::warn!(
            "poisson solve stopped at relative residual {:.3e} after {} iterations (tol {:.1e})",
            solution.relative_residual,
            solution.iterations,
            tol
        );
    }
    let chi = solution.chi;
    let samples: Vec<f64> = pts.positions.par_iter().map(|p| chi.sample(p).expect("grid covers the cloud")).collect();
    let iso = samples.iter().sum::<f64>() / samples.len() as f64;
    let mesh = marching_cubes(&chi, iso)?;
    Ok(mesh.largest_component())
}
