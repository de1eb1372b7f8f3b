//! Bounding-box segmentation, denoising, normal estimation, voxel
//! decimation and multi-view fusion of raw clouds.

use std::collections::HashMap;

use nalgebra::SymmetricEigen;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{transform_points, Mat3, PointCloud, RigidTransform, Vec3};
use crate::kdtree::KdIndex;

pub const DEFAULT_DENOISE_K: usize = 20;
pub const DEFAULT_DENOISE_STD_RATIO: f64 = 2.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Aabb {
    pub min: Vec3,
    pub max: Vec3,
}

impl Aabb {
    pub fn new(min: Vec3, max: Vec3) -> Result<Self> {
        if (0..3).any(|i| !(min[i] <= max[i])) {
            return Err(Error::InvalidInput(format!("box min {min:?} exceeds max {max:?}")));
        }
        Ok(Self { min, max })
    }

    #[inline]
    pub fn contains(&self, p: &Vec3) -> bool {
        (0..3).all(|i| p[i] >= self.min[i] && p[i] <= self.max[i])
    }

    pub fn extent(&self) -> Vec3 {
        self.max - self.min
    }

    pub fn center(&self) -> Vec3 {
        (self.min + self.max) * 0.5
    }
}

pub fn crop(pts: &PointCloud, bbox: &Aabb) -> PointCloud {
    pts.filter(|_, p| bbox.contains(p))
}

/// Removes points whose mean distance to their `k` nearest neighbors exceeds
/// `μ + std_ratio·σ` of that statistic over the whole cloud.
pub fn remove_statistical_outliers(pts: &PointCloud, k: usize, std_ratio: f64) -> Result<(PointCloud, Vec<usize>)> {
    let n = pts.len();
    if k == 0 || n <= k {
        return Err(Error::TooFewPoints { needed: k, got: n });
    }
    if !(std_ratio > 0.0) {
        return Err(Error::InvalidInput(format!("std_ratio must be positive, got {std_ratio}")));
    }
    let index = KdIndex::new(&pts.positions);
    let mean_dist: Vec<f64> = (0..n)
        .into_par_iter()
        .map(|i| {
            let nn = index.knn(&pts.positions[i], k + 1);
            let others = nn.iter().filter(|(j, _)| *j != i).take(k);
            others.map(|(_, d2)| d2.sqrt()).sum::<f64>() / k as f64
        })
        .collect();
    let mu = mean_dist.iter().sum::<f64>() / n as f64;
    let var = mean_dist.iter().map(|d| (d - mu) * (d - mu)).sum::<f64>() / n as f64;
    // relative slack so rounding noise on identical neighborhoods never trips the cut
    let limit = mu + std_ratio * var.sqrt() + 1e-12 * mu;
    let (keep, removed): (Vec<usize>, Vec<usize>) = (0..n).partition(|&i| mean_dist[i] <= limit);
    Ok((pts.select(&keep), removed))
}

fn smallest_eigenvector(cov: &Mat3) -> Vec3 {
    let eig = SymmetricEigen::new(*cov);
    eig.eigenvectors.column(eig.eigenvalues.imin()).into_owned()
}

fn pca_normals(pts: &PointCloud, k: usize) -> Result<Vec<Vec3>> {
    let n = pts.len();
    if k < 3 || n <= k {
        return Err(Error::TooFewPoints { needed: k.max(3), got: n });
    }
    let index = KdIndex::new(&pts.positions);
    Ok((0..n)
        .into_par_iter()
        .map(|i| {
            let nn = index.knn(&pts.positions[i], k);
            let c = nn.iter().map(|(j, _)| pts.positions[*j]).sum::<Vec3>() / nn.len() as f64;
            let mut cov = Mat3::zeros();
            for (j, _) in &nn {
                let d = pts.positions[*j] - c;
                cov += d * d.transpose();
            }
            smallest_eigenvector(&cov).normalize()
        })
        .collect())
}

/// PCA normals over the `k` nearest neighbors (the point included), flipped
/// so that each faces `viewpoint`.
pub fn estimate_normals(pts: &PointCloud, k: usize, viewpoint: &Vec3) -> Result<PointCloud> {
    let mut normals = pca_normals(pts, k)?;
    for (n, p) in normals.iter_mut().zip(&pts.positions) {
        if n.dot(&(viewpoint - p)) < 0.0 {
            *n = -*n;
        }
    }
    Ok(PointCloud { normals: Some(normals), ..pts.clone() })
}

/// PCA normals oriented to agree with the cloud's existing normals, which act
/// as per-point orientation hints (e.g. averaged per-view normals after fusion).
pub fn refine_normals_with_hints(pts: &PointCloud, k: usize) -> Result<PointCloud> {
    let hints = pts.normals.as_ref().ok_or(Error::MissingNormals)?;
    let mut normals = pca_normals(pts, k)?;
    for (n, h) in normals.iter_mut().zip(hints) {
        if n.dot(h) < 0.0 {
            *n = -*n;
        }
    }
    Ok(PointCloud { normals: Some(normals), ..pts.clone() })
}

/// Transforms each cloud into the reference frame and concatenates them.
pub fn fuse(scenes: &[(PointCloud, RigidTransform)]) -> Result<PointCloud> {
    let (first, rest) = scenes.split_first().ok_or(Error::EmptyInput)?;
    let mut out = transform_points(&first.1, &first.0);
    for (cloud, pose) in rest {
        out.extend(&transform_points(pose, cloud));
    }
    Ok(out)
}

/// One centroid per occupied voxel, ordered by voxel key.
pub fn voxel_downsample(pts: &PointCloud, voxel_mm: f64) -> Result<PointCloud> {
    if !(voxel_mm > 0.0) {
        return Err(Error::NonPositiveVoxel(voxel_mm));
    }
    let mut cells: HashMap<[i64; 3], Vec<usize>> = HashMap::new();
    for (i, p) in pts.positions.iter().enumerate() {
        let key = [0, 1, 2].map(|a| (p[a] / voxel_mm).floor() as i64);
        cells.entry(key).or_default().push(i);
    }
    let mut keys: Vec<[i64; 3]> = cells.keys().copied().collect();
    keys.sort_unstable();
    let avg = |attr: &Vec<Vec3>, members: &[usize]| members.iter().map(|&i| attr[i]).sum::<Vec3>() / members.len() as f64;
    let mut out = PointCloud {
        positions: Vec::with_capacity(keys.len()),
        colors: pts.colors.as_ref().map(|_| Vec::with_capacity(keys.len())),
        normals: pts.normals.as_ref().map(|_| Vec::with_capacity(keys.len())),
    };
    for key in &keys {
        let members = &cells[key];
        out.positions.push(avg(&pts.positions, members));
        if let (Some(dst), Some(src)) = (out.colors.as_mut(), pts.colors.as_ref()) {
            dst.push(avg(src, members));
        }
        if let (Some(dst), Some(src)) = (out.normals.as_mut(), pts.normals.as_ref()) {
            let n = avg(src, members);
            dst.push(n.try_normalize(1e-12).unwrap_or(src[members[0]]));
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::{prop, prop_assert, prop_assert_eq, proptest};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn crop_examples() {
        let cloud = PointCloud::from_positions(vec![Vec3::new(0.5, 0.5, 0.5), Vec3::new(2.0, 2.0, 2.0)]);
        let unit = Aabb::new(Vec3::zeros(), Vec3::repeat(1.0)).unwrap();
        assert_eq!(crop(&cloud, &unit).positions, vec![Vec3::new(0.5, 0.5, 0.5)]);
        let all = Aabb::new(Vec3::repeat(-10.0), Vec3::repeat(10.0)).unwrap();
        assert_eq!(crop(&cloud, &all), cloud);
        let none = Aabb::new(Vec3::repeat(5.0), Vec3::repeat(6.0)).unwrap();
        assert!(crop(&cloud, &none).is_empty());
        assert!(Aabb::new(Vec3::repeat(1.0), Vec3::zeros()).is_err());
    }

    #[test]
    fn crop_keeps_attributes_aligned() {
        let mut cloud = PointCloud::from_positions(vec![Vec3::new(2.0, 0.0, 0.0), Vec3::new(0.5, 0.5, 0.5)]);
        cloud.colors = Some(vec![Vec3::new(1.0, 0.0, 0.0), Vec3::new(0.0, 1.0, 0.0)]);
        let c = crop(&cloud, &Aabb::new(Vec3::zeros(), Vec3::repeat(1.0)).unwrap());
        assert_eq!(c.colors.unwrap(), vec![Vec3::new(0.0, 1.0, 0.0)]);
    }

    #[test]
    fn denoise_keeps_periodic_lattice() {
        // regular polygon: every point has an identical neighborhood
        let pts: Vec<Vec3> = (0..360)
            .map(|i| {
                let a = i as f64 * std::f64::consts::TAU / 360.0;
                Vec3::new(100.0 * a.cos(), 100.0 * a.sin(), 0.0)
            })
            .collect();
        let cloud = PointCloud::from_positions(pts);
        let (kept, removed) = remove_statistical_outliers(&cloud, 4, 2.0).unwrap();
        assert!(removed.is_empty());
        assert_eq!(kept.len(), 360);
        let (_, removed) = remove_statistical_outliers(&cloud, 4, 1.0).unwrap();
        assert!(removed.is_empty());
    }

    #[test]
    fn denoise_removes_single_far_point() {
        let mut pts: Vec<Vec3> = (0..100).map(|i| Vec3::new((i % 10) as f64, (i / 10) as f64, 0.0)).collect();
        pts.push(Vec3::new(4.5, 4.5, 100.0));
        let cloud = PointCloud::from_positions(pts.clone());
        // brute-force oracle for the mean neighbor distance statistic
        let k = 4;
        let stat: Vec<f64> = (0..pts.len())
            .map(|i| {
                let mut d: Vec<f64> = (0..pts.len()).filter(|&j| j != i).map(|j| (pts[i] - pts[j]).norm()).collect();
                d.sort_by(|a, b| a.total_cmp(b));
                d[..k].iter().sum::<f64>() / k as f64
            })
            .collect();
        let mu = stat.iter().sum::<f64>() / stat.len() as f64;
        let sd = (stat.iter().map(|s| (s - mu).powi(2)).sum::<f64>() / stat.len() as f64).sqrt();
        let expect: Vec<usize> = (0..pts.len()).filter(|&i| stat[i] > mu + 2.0 * sd).collect();
        assert_eq!(expect, vec![100]);
        let (_, removed) = remove_statistical_outliers(&cloud, k, 2.0).unwrap();
        assert_eq!(removed, expect);
        assert!(matches!(remove_statistical_outliers(&cloud, 101, 2.0), Err(Error::TooFewPoints { .. })));
    }

    #[test]
    fn normals_on_plane() {
        let pts: Vec<Vec3> = (0..400).map(|i| Vec3::new((i % 20) as f64, (i / 20) as f64, 0.0)).collect();
        let c = estimate_normals(&PointCloud::from_positions(pts), 8, &Vec3::new(0.0, 0.0, 100.0)).unwrap();
        for n in c.normals.unwrap() {
            assert!((n - Vec3::z()).norm() < 1e-6);
        }
        let small = PointCloud::from_positions(vec![Vec3::zeros(); 5]);
        assert!(matches!(estimate_normals(&small, 5, &Vec3::zeros()), Err(Error::TooFewPoints { .. })));
    }

    #[test]
    fn normals_on_sphere_are_radial() {
        // Fibonacci sphere, 10k samples, radius 50
        let n = 10_000;
        let golden = std::f64::consts::PI * (3.0 - 5f64.sqrt());
        let pts: Vec<Vec3> = (0..n)
            .map(|i| {
                let y = 1.0 - 2.0 * (i as f64 + 0.5) / n as f64;
                let r = (1.0 - y * y).sqrt();
                let th = golden * i as f64;
                Vec3::new(r * th.cos(), y, r * th.sin()) * 50.0
            })
            .collect();
        let center = Vec3::new(0.0, 0.0, 0.0);
        let c = estimate_normals(&PointCloud::from_positions(pts.clone()), 20, &center).unwrap();
        for (p, nrm) in pts.iter().zip(c.normals.unwrap()) {
            // faces the center; negated it is the outward radial direction
            let outward = -nrm;
            assert!(outward.dot(&p.normalize()).acos().to_degrees() < 5.0);
        }
    }

    #[test]
    fn fuse_examples() {
        let a = PointCloud::from_positions(vec![Vec3::new(1.0, 2.0, 3.0)]);
        assert_eq!(fuse(&[(a.clone(), RigidTransform::identity())]).unwrap(), a);
        let b = PointCloud::from_positions(vec![Vec3::new(0.0, 0.0, 1.0)]);
        let tb = RigidTransform::rot_x(std::f64::consts::FRAC_PI_2).with_translation(Vec3::new(5.0, 0.0, 0.0));
        let f = fuse(&[(a.clone(), RigidTransform::identity()), (b.clone(), tb)]).unwrap();
        assert_eq!(f.len(), 2);
        assert!((f.positions[1] - tb.apply_point(&b.positions[0])).norm() < 1e-12);
        assert!(matches!(fuse(&[]), Err(Error::EmptyInput)));
    }

    #[test]
    fn voxel_examples() {
        let pts = PointCloud::from_positions(vec![Vec3::new(0.1, 0.1, 0.1), Vec3::new(0.3, 0.5, 0.7), Vec3::new(5.0, 5.0, 5.0)]);
        let d = voxel_downsample(&pts, 1.0).unwrap();
        assert_eq!(d.len(), 2);
        assert!((d.positions[0] - Vec3::new(0.2, 0.3, 0.4)).norm() < 1e-12);
        assert_eq!(voxel_downsample(&pts, 0.01).unwrap().len(), 3);
        assert!(matches!(voxel_downsample(&pts, 0.0), Err(Error::NonPositiveVoxel(_))));
    }

    #[test]
    fn voxel_outputs_lie_in_their_voxel() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let pts: Vec<Vec3> = (0..10_000).map(|_| Vec3::new(rng.random_range(-50.0..50.0), rng.random_range(-50.0..50.0), rng.random_range(-50.0..50.0))).collect();
        let v = 3.7;
        let d = voxel_downsample(&PointCloud::from_positions(pts.clone()), v).unwrap();
        let occupied: std::collections::HashSet<[i64; 3]> = pts.iter().map(|p| [0, 1, 2].map(|a| (p[a] / v).floor() as i64)).collect();
        assert_eq!(d.len(), occupied.len());
        for p in &d.positions {
            assert!(occupied.contains(&[0, 1, 2].map(|a| (p[a] / v).floor() as i64)));
        }
    }

    proptest! {
        #[test]
        fn crop_idempotent(pts in prop::collection::vec(prop::array::uniform3(-10.0f64..10.0), 0..50)) {
            let cloud = PointCloud::from_positions(pts.into_iter().map(Vec3::from).collect());
            let b = Aabb::new(Vec3::new(-3.0, -5.0, -1.0), Vec3::new(4.0, 2.0, 6.0)).unwrap();
            let once = crop(&cloud, &b);
            prop_assert_eq!(crop(&once, &b), once);
        }

        #[test]
        fn fuse_is_equivariant(w in prop::array::uniform3(-1.0f64..1.0), t in prop::array::uniform3(-50.0f64..50.0)) {
            let g = RigidTransform::from_rotation_vector(Vec3::from(w)).with_translation(Vec3::from(t));
            let scenes = vec![
                (PointCloud::from_positions(vec![Vec3::new(1.0, 2.0, 3.0), Vec3::new(-4.0, 0.5, 2.0)]), RigidTransform::rot_z(0.4)),
                (PointCloud::from_positions(vec![Vec3::new(7.0, -2.0, 1.0)]), RigidTransform::rot_x(1.1).with_translation(Vec3::new(0.0, 3.0, 9.0))),
            ];
            let a = transform_points(&g, &fuse(&scenes).unwrap());
            let moved: Vec<_> = scenes.iter().map(|(c, p)| (c.clone(), g.compose(p))).collect();
            let b = fuse(&moved).unwrap();
            for (x, y) in a.positions.iter().zip(&b.positions) {
                prop_assert!((x - y).norm() < 1e-9);
            }
        }

        #[test]
        fn normals_face_viewpoint(seed in 0u64..200) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let pts: Vec<Vec3> = (0..60).map(|_| Vec3::new(rng.random_range(-5.0..5.0), rng.random_range(-5.0..5.0), rng.random_range(-1.0..1.0))).collect();
            let vp = Vec3::new(rng.random_range(-20.0..20.0), rng.random_range(-20.0..20.0), 30.0);
            let c = estimate_normals(&PointCloud::from_positions(pts), 6, &vp).unwrap();
            for (n, p) in c.normals.as_ref().unwrap().iter().zip(&c.positions) {
                prop_assert!((n.norm() - 1.0).abs() < 1e-9);
                prop_assert!(n.dot(&(vp - p)) >= 0.0);
            }
        }
    }
}
