//! Feature extraction: feedback-point clouds to low-dimensional configuration vectors.

use std::f64::consts::PI;
use std::fmt;

use nalgebra::{DVector, Matrix3, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type Point3 = Vector3<f64>;

/// Coincidence threshold for the FPFH reference point.
pub const FPFH_MIN_DIST: f64 = 1e-9;
/// Default surface-variation radius, in units of the mean nearest-neighbour spacing.
pub const DEFAULT_RADIUS_SPACINGS: f64 = 3.0;

#[derive(Debug, Clone, PartialEq)]
pub struct PointCloud {
    points: Vec<Point3>,
    normals: Option<Vec<Point3>>,
}

impl PointCloud {
    pub fn new(points: Vec<Point3>) -> Result<Self> {
        if points.is_empty() {
            return Err(Error::InvalidInput("point cloud needs at least one point".into()));
        }
        Ok(PointCloud { points, normals: None })
    }

    pub fn with_normals(points: Vec<Point3>, normals: Vec<Point3>) -> Result<Self> {
        let mut cloud = Self::new(points)?;
        if normals.len() != cloud.points.len() {
            return Err(Error::DimensionMismatch { expected: cloud.points.len(), got: normals.len() });
        }
        if let Some(bad) = normals.iter().position(|n| (n.norm() - 1.0).abs() > 1e-6) {
            return Err(Error::InvalidInput(format!("normal {bad} is not unit length")));
        }
        cloud.normals = Some(normals);
        Ok(cloud)
    }

    pub fn points(&self) -> &[Point3] {
        &self.points
    }

    pub fn normals(&self) -> Option<&[Point3]> {
        self.normals.as_deref()
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// Same cloud with every point and normal mapped through `rotation * p + translation`.
    pub fn transformed(&self, rotation: &Matrix3<f64>, translation: &Point3) -> Self {
        PointCloud {
            points: self.points.iter().map(|p| rotation * p + translation).collect(),
            normals: self.normals.as_ref().map(|ns| ns.iter().map(|n| (rotation * n).normalize()).collect()),
        }
    }

    /// Mean distance from each point to its nearest neighbour.
    pub fn mean_spacing(&self) -> f64 {
        if self.points.len() < 2 {
            return 0.0;
        }
        let total: f64 = self
            .points
            .iter()
            .enumerate()
            .map(|(i, p)| {
                self.points
                    .iter()
                    .enumerate()
                    .filter(|&(j, _)| j != i)
                    .map(|(_, q)| (p - q).norm())
                    .fold(f64::INFINITY, f64::min)
            })
            .sum();
        total / self.points.len() as f64
    }
}

pub fn centroid(cloud: &PointCloud) -> Point3 {
    let sum = cloud.points.iter().fold(Point3::zeros(), |acc, p| acc + p);
    sum / cloud.points.len() as f64
}

/// All points concatenated in cloud order, `3K` entries.
pub fn stacked_positions(cloud: &PointCloud) -> DVector<f64> {
    DVector::from_iterator(3 * cloud.len(), cloud.points.iter().flat_map(|p| p.iter().copied()))
}

pub fn pairwise_distance(p1: &Point3, p2: &Point3) -> f64 {
    (p1 - p2).norm()
}

/// `lambda_0 / (lambda_0 + lambda_1 + lambda_2)` for the neighbourhood covariance,
/// eigenvalues ascending. Zero for planar patches, 1/3 for isotropic ones.
pub fn surface_variation(neighborhood: &PointCloud) -> Result<f64> {
    let n = neighborhood.len();
    if n < 3 {
        return Err(Error::Degenerate(format!("surface variation needs at least 3 points, got {n}")));
    }
    let mean = centroid(neighborhood);
    let mut cov = Matrix3::zeros();
    for p in &neighborhood.points {
        let d = p - mean;
        cov += d * d.transpose();
    }
    cov /= n as f64;
    let eig = cov.symmetric_eigenvalues();
    let total = eig.sum();
    if !(total >= 1e-15) {
        return Err(Error::Degenerate(format!("neighbourhood covariance has trace {total:e}")));
    }
    let smallest = eig.min().max(0.0);
    Ok((smallest / total).clamp(0.0, 1.0 / 3.0))
}

/// Points of `cloud` within `radius` of point `center`, including it.
pub fn neighborhood(cloud: &PointCloud, center: usize, radius: f64) -> Result<PointCloud> {
    let c =
        cloud.points.get(center).ok_or_else(|| Error::InvalidInput(format!("center index {center} out of range")))?;
    let pts: Vec<_> = cloud.points.iter().filter(|p| (*p - c).norm() <= radius).copied().collect();
    PointCloud::new(pts)
}

/// Index of the cloud point nearest the centroid (lowest index on ties).
pub fn reference_index(cloud: &PointCloud) -> usize {
    let c = centroid(cloud);
    let mut best = (0, f64::INFINITY);
    for (i, p) in cloud.points.iter().enumerate() {
        let d = (p - c).norm_squared();
        if d < best.1 {
            best = (i, d);
        }
    }
    best.0
}

/// The `(cos alpha, cos phi, theta)` triple of one point against the reference.
///
/// Darboux frame `u = n_c`, `v = (p_i - p_c)/|p_i - p_c| x u`, `w = u x v`.
pub fn fpfh_angles(pc: &Point3, nc: &Point3, pi: &Point3, ni: &Point3) -> Option<(f64, f64, f64)> {
    let diff = pi - pc;
    let dist = diff.norm();
    if dist < FPFH_MIN_DIST {
        return None;
    }
    let dir = diff / dist;
    let u = *nc;
    let v = dir.cross(&u);
    let w = u.cross(&v);
    let cos_alpha = v.dot(ni);
    let cos_phi = u.dot(&dir);
    let theta = w.dot(ni).atan2(u.dot(ni));
    Some((cos_alpha, cos_phi, theta))
}

/// Spreads a unit count over the three bins around `value` with quadratic
/// B-spline weights (centred on bin centres), folding weight that falls past
/// either end into the end bin. The histogram is then differentiable in the
/// angles, including at bin centres.
fn spread(hist: &mut [f64], value: f64, lo: f64, hi: f64) {
    let bins = hist.len();
    let s = ((value - lo) / (hi - lo) * bins as f64 - 0.5).clamp(-0.5, bins as f64 - 0.5);
    let c = s.round();
    let t = s - c;
    let weights = [0.5 * (0.5 - t).powi(2), 0.75 - t * t, 0.5 * (0.5 + t).powi(2)];
    for (k, w) in weights.into_iter().enumerate() {
        let i = (c as i64 - 1 + k as i64).clamp(0, bins as i64 - 1) as usize;
        hist[i] += w;
    }
}

/// Three concatenated `bins`-bin histograms of `cos alpha`, `cos phi` and
/// `theta` over `[-1,1]`, `[-1,1]`, `[-pi,pi]`, each normalised to sum 1.
/// Each point's count is shared smoothly between the nearest bins.
pub fn extended_fpfh(cloud: &PointCloud, bins: usize) -> Result<DVector<f64>> {
    if bins == 0 {
        return Err(Error::InvalidInput("histogram needs at least one bin".into()));
    }
    let normals = cloud.normals().ok_or_else(|| Error::InvalidInput("extended FPFH needs normals".into()))?;
    if cloud.len() < 2 {
        return Err(Error::Degenerate("extended FPFH needs at least two points".into()));
    }
    let c = reference_index(cloud);
    let (pc, nc) = (cloud.points[c], normals[c]);
    let mut hist = DVector::zeros(3 * bins);
    let mut counted = 0usize;
    for (i, (p, n)) in cloud.points.iter().zip(normals).enumerate() {
        if i == c {
            continue;
        }
        let Some((ca, cp, th)) = fpfh_angles(&pc, &nc, p, n) else {
            log::debug!("fpfh: point {i} coincides with the reference point, skipped");
            continue;
        };
        spread(hist.rows_mut(0, bins).as_mut_slice(), ca, -1.0, 1.0);
        spread(hist.rows_mut(bins, bins).as_mut_slice(), cp, -1.0, 1.0);
        spread(hist.rows_mut(2 * bins, bins).as_mut_slice(), th, -PI, PI);
        counted += 1;
    }
    if counted == 0 {
        return Err(Error::Degenerate("every point coincides with the FPFH reference".into()));
    }
    hist /= counted as f64;
    Ok(hist)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum FeatureComponent {
    Centroid,
    Positions,
    Distance {
        i: usize,
        j: usize,
    },
    SurfaceVariation {
        center: usize,
        /// Neighbourhood radius in meters; defaults to three mean spacings.
        #[serde(default)]
        radius: Option<f64>,
    },
    FpfhHistogram {
        bins: usize,
    },
}

impl FeatureComponent {
    /// Output length for a cloud of `k` points.
    pub fn dim(&self, k: usize) -> usize {
        match self {
            FeatureComponent::Centroid => 3,
            FeatureComponent::Positions => 3 * k,
            FeatureComponent::Distance { .. } => 1,
            FeatureComponent::SurfaceVariation { .. } => 1,
            FeatureComponent::FpfhHistogram { bins } => 3 * bins,
        }
    }

    fn evaluate(&self, cloud: &PointCloud) -> Result<DVector<f64>> {
        let pts = cloud.points();
        let get = |i: usize| {
            pts.get(i).ok_or_else(|| Error::InvalidInput(format!("point index {i} out of range ({})", pts.len())))
        };
        match *self {
            FeatureComponent::Centroid => Ok(DVector::from_column_slice(centroid(cloud).as_slice())),
            FeatureComponent::Positions => Ok(stacked_positions(cloud)),
            FeatureComponent::Distance { i, j } => Ok(DVector::from_element(1, pairwise_distance(get(i)?, get(j)?))),
            FeatureComponent::SurfaceVariation { center, radius } => {
                let r = radius.unwrap_or_else(|| DEFAULT_RADIUS_SPACINGS * cloud.mean_spacing());
                let nb = neighborhood(cloud, center, r)?;
                Ok(DVector::from_element(1, surface_variation(&nb)?))
            }
            FeatureComponent::FpfhHistogram { bins } => extended_fpfh(cloud, bins),
        }
    }
}

impl fmt::Display for FeatureComponent {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            FeatureComponent::Centroid => write!(f, "centroid"),
            FeatureComponent::Positions => write!(f, "positions"),
            FeatureComponent::Distance { i, j } => write!(f, "distance({i},{j})"),
            FeatureComponent::SurfaceVariation { center, .. } => write!(f, "surface_variation({center})"),
            FeatureComponent::FpfhHistogram { bins } => write!(f, "fpfh_histogram({bins})"),
        }
    }
}

/// Ordered list of components making up a task's feature vector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FeatureSpec {
    pub components: Vec<FeatureComponent>,
    /// Every value is divided by this, e.g. 0.001 to express meters in millimeters.
    #[serde(default = "unit_scale")]
    pub scale: f64,
}

fn unit_scale() -> f64 {
    1.0
}

impl FeatureSpec {
    pub fn new(components: Vec<FeatureComponent>) -> Self {
        FeatureSpec { components, scale: 1.0 }
    }

    pub fn with_scale(mut self, scale: f64) -> Self {
        self.scale = scale;
        self
    }

    pub fn dim(&self, k: usize) -> usize {
        self.components.iter().map(|c| c.dim(k)).sum()
    }

    pub fn needs_normals(&self) -> bool {
        self.components.iter().any(|c| matches!(c, FeatureComponent::FpfhHistogram { .. }))
    }

    pub fn validate(&self) -> Result<()> {
        if self.components.is_empty() {
            return Err(Error::config("features.components", "feature spec is empty"));
        }
        if !(self.scale > 0.0 && self.scale.is_finite()) {
            return Err(Error::config("features.scale", format!("must be positive, got {}", self.scale)));
        }
        for c in &self.components {
            if let FeatureComponent::FpfhHistogram { bins: 0 } = c {
                return Err(Error::config("features.components", "fpfh_histogram needs bins >= 1"));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FeatureVector {
    pub values: DVector<f64>,
}

impl FeatureVector {
    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
}

/// `x = C(p^f)`: components evaluated in spec order and concatenated.
pub fn extract(spec: &FeatureSpec, cloud: &PointCloud) -> Result<FeatureVector> {
    if spec.components.is_empty() {
        return Err(Error::InvalidInput("feature spec is empty".into()));
    }
    if !(spec.scale > 0.0 && spec.scale.is_finite()) {
        return Err(Error::InvalidInput(format!("feature scale must be positive, got {}", spec.scale)));
    }
    let mut values: Vec<f64> = Vec::with_capacity(spec.dim(cloud.len()));
    for (index, comp) in spec.components.iter().enumerate() {
        let part = comp.evaluate(cloud).map_err(|e| Error::Feature {
            index,
            component: comp.to_string(),
            source: Box::new(e),
        })?;
        values.extend(part.iter());
    }
    let values = DVector::from_vec(values) / spec.scale;
    if values.iter().any(|v| !v.is_finite()) {
        return Err(Error::NumericalHealth("non-finite feature value".into()));
    }
    Ok(FeatureVector { values })
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::{Rotation3, Unit};
    use rand::{rngs::StdRng, RngExt, SeedableRng};

    fn p(x: f64, y: f64, z: f64) -> Point3 {
        Point3::new(x, y, z)
    }

    fn random_points(rng: &mut StdRng, n: usize) -> Vec<Point3> {
        (0..n)
            .map(|_| p(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)))
            .collect()
    }

    fn random_unit(rng: &mut StdRng) -> Point3 {
        loop {
            let v = p(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0));
            let n = v.norm();
            if n > 0.1 && n <= 1.0 {
                return v / n;
            }
        }
    }

    #[test]
    fn centroid_cases() {
        let one = PointCloud::new(vec![p(1.0, -2.0, 0.5)]).unwrap();
        assert_eq!(centroid(&one), p(1.0, -2.0, 0.5));
        let two = PointCloud::new(vec![p(0.0, 0.0, 0.0), p(2.0, 0.0, 0.0)]).unwrap();
        assert_eq!(centroid(&two), p(1.0, 0.0, 0.0));

        let mut rng = StdRng::seed_from_u64(1);
        let pts = random_points(&mut rng, 100);
        let cloud = PointCloud::new(pts.clone()).unwrap();
        let (mut sx, mut sy, mut sz) = (0.0, 0.0, 0.0);
        for q in &pts {
            sx += q.x;
            sy += q.y;
            sz += q.z;
        }
        let expect = p(sx / 100.0, sy / 100.0, sz / 100.0);
        assert!((centroid(&cloud) - expect).amax() < 1e-12);
    }

    #[test]
    fn stacked_positions_order() {
        let one = PointCloud::new(vec![p(1.0, 2.0, 3.0)]).unwrap();
        assert_eq!(stacked_positions(&one).as_slice(), &[1.0, 2.0, 3.0]);
        let a = p(1.0, 2.0, 3.0);
        let b = p(4.0, 5.0, 6.0);
        let fwd = stacked_positions(&PointCloud::new(vec![a, b]).unwrap());
        assert_eq!(fwd.len(), 6);
        assert_eq!(fwd.as_slice(), &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let rev = stacked_positions(&PointCloud::new(vec![b, a]).unwrap());
        assert_eq!(rev.as_slice(), &[4.0, 5.0, 6.0, 1.0, 2.0, 3.0]);
        assert_ne!(fwd, rev);
    }

    #[test]
    fn distance_cases() {
        let a = p(0.3, 0.1, -0.2);
        assert_eq!(pairwise_distance(&a, &a), 0.0);
        assert_eq!(pairwise_distance(&p(0.0, 0.0, 0.0), &p(3.0, 4.0, 0.0)), 5.0);
        let mut rng = StdRng::seed_from_u64(2);
        let pts = random_points(&mut rng, 2);
        let d = pts[0] - pts[1];
        let expect = (d.x * d.x + d.y * d.y + d.z * d.z).sqrt();
        assert!((pairwise_distance(&pts[0], &pts[1]) - expect).abs() < 1e-12);
        assert_eq!(pairwise_distance(&pts[0], &pts[1]), pairwise_distance(&pts[1], &pts[0]));
    }

    #[test]
    fn surface_variation_of_plane_is_zero() {
        let mut rng = StdRng::seed_from_u64(3);
        let normal = random_unit(&mut rng);
        let t1 = normal.cross(&p(0.3, 0.5, 0.7)).normalize();
        let t2 = normal.cross(&t1);
        let pts: Vec<_> = (0..40)
            .map(|_| t1 * rng.random_range(-1.0..1.0) + t2 * rng.random_range(-1.0..1.0) + p(1.0, 2.0, 3.0))
            .collect();
        let sv = surface_variation(&PointCloud::new(pts).unwrap()).unwrap();
        assert!(sv.abs() < 1e-12, "{sv}");
    }

    #[test]
    fn surface_variation_of_sphere_is_a_third() {
        let mut rng = StdRng::seed_from_u64(4);
        let pts: Vec<_> = (0..20_000).map(|_| random_unit(&mut rng) * 0.4).collect();
        let sv = surface_variation(&PointCloud::new(pts).unwrap()).unwrap();
        assert!((sv - 1.0 / 3.0).abs() < 0.02, "{sv}");
    }

    #[test]
    fn surface_variation_of_saddle_matches_axis_variances() {
        // z = a (x^2 - y^2) on a symmetric grid: every cross-covariance vanishes
        // by odd symmetry, so the eigenvalues are the per-axis variances.
        let a = 0.3;
        let g: Vec<f64> = (-3..=3).map(|i| i as f64 * 0.25).collect();
        let mut pts = Vec::new();
        for &x in &g {
            for &y in &g {
                pts.push(p(x, y, a * (x * x - y * y)));
            }
        }
        let n = pts.len() as f64;
        let mean = |f: &dyn Fn(&Point3) -> f64| pts.iter().map(f).sum::<f64>() / n;
        let (mx, my, mz) = (mean(&|q| q.x), mean(&|q| q.y), mean(&|q| q.z));
        let vx = mean(&|q| (q.x - mx).powi(2));
        let vy = mean(&|q| (q.y - my).powi(2));
        let vz = mean(&|q| (q.z - mz).powi(2));
        let expect = vx.min(vy).min(vz) / (vx + vy + vz);
        let sv = surface_variation(&PointCloud::new(pts).unwrap()).unwrap();
        assert!((sv - expect).abs() < 1e-8, "{sv} vs {expect}");
    }

    #[test]
    fn surface_variation_degenerate_inputs() {
        let two = PointCloud::new(vec![p(0.0, 0.0, 0.0), p(1.0, 0.0, 0.0)]).unwrap();
        assert!(matches!(surface_variation(&two), Err(Error::Degenerate(_))));
        let same = PointCloud::new(vec![p(1.0, 1.0, 1.0); 5]).unwrap();
        assert!(matches!(surface_variation(&same), Err(Error::Degenerate(_))));
    }

    #[test]
    fn fpfh_aligned_pair_lands_in_top_phi_bin() {
        let n = p(0.0, 0.0, 1.0);
        let (ca, cp, th) = fpfh_angles(&p(0.0, 0.0, 0.0), &n, &p(0.0, 0.0, 2.0), &n).unwrap();
        assert_eq!((ca, cp, th), (0.0, 1.0, 0.0));

        let cloud = PointCloud::with_normals(vec![p(0.0, 0.0, 0.0), p(0.0, 0.0, 2.0)], vec![n, n]).unwrap();
        let bins = 10;
        let h = extended_fpfh(&cloud, bins).unwrap();
        assert_eq!(h[bins + bins - 1], 1.0);
        assert_eq!(h.rows(bins, bins).sum(), 1.0);
    }

    #[test]
    fn soft_binning_weights() {
        let close = |h: &[f64], want: &[f64]| h.iter().zip(want).all(|(a, b)| (a - b).abs() < 1e-15);
        // bin centres at -0.75, -0.25, 0.25, 0.75
        let mut h = [0.0; 4];
        spread(&mut h, 0.25, -1.0, 1.0);
        assert!(close(&h, &[0.0, 0.125, 0.75, 0.125]));
        // halfway between two centres: 1/2 (1/2 -+ 1/2)^2 and 3/4 - 1/4
        let mut h = [0.0; 4];
        spread(&mut h, 0.0, -1.0, 1.0);
        assert!(close(&h, &[0.0, 0.5, 0.5, 0.0]));
        // the outer tail of the first bin folds back into it
        let mut h = [0.0; 4];
        spread(&mut h, -0.75, -1.0, 1.0);
        assert!(close(&h, &[0.875, 0.125, 0.0, 0.0]));
        let mut h = [0.0; 4];
        spread(&mut h, 1.0, -1.0, 1.0);
        assert!(close(&h, &[0.0, 0.0, 0.0, 1.0]));
        let mut h = [0.0; 1];
        spread(&mut h, 0.3, -1.0, 1.0);
        assert!(close(&h, &[1.0]));
    }

    #[test]
    fn soft_binning_responds_at_bin_centres() {
        // A small shift of a value sitting on a centre moves mass at first order.
        let eps = 1e-6;
        let (mut lo, mut hi) = ([0.0; 5], [0.0; 5]);
        spread(&mut lo, -eps, -1.0, 1.0);
        spread(&mut hi, eps, -1.0, 1.0);
        let slope = (hi[3] - lo[3]) / (2.0 * eps);
        // d/ds of 1/2 (1/2 + t)^2 at t = 0 is 1/2, and ds/dvalue = bins / 2
        assert!((slope - 1.25).abs() < 1e-6);
    }

    #[test]
    fn fpfh_is_continuous_in_the_points() {
        let mut rng = StdRng::seed_from_u64(12);
        let pts = random_points(&mut rng, 30);
        let normals: Vec<Point3> = (0..30).map(|_| random_unit(&mut rng)).collect();
        let h0 = extended_fpfh(&PointCloud::with_normals(pts.clone(), normals.clone()).unwrap(), 45).unwrap();
        let mut moved = pts;
        moved[7] += p(1e-7, -2e-7, 1e-7);
        let h1 = extended_fpfh(&PointCloud::with_normals(moved, normals).unwrap(), 45).unwrap();
        assert!((h1 - h0).amax() < 1e-4);
    }

    #[test]
    fn fpfh_dimension_and_normalisation() {
        let mut rng = StdRng::seed_from_u64(6);
        let pts = random_points(&mut rng, 60);
        let normals = (0..60).map(|_| random_unit(&mut rng)).collect();
        let cloud = PointCloud::with_normals(pts, normals).unwrap();
        let h = extended_fpfh(&cloud, 45).unwrap();
        assert_eq!(h.len(), 135);
        for ch in 0..3 {
            assert!((h.rows(45 * ch, 45).sum() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn fpfh_errors() {
        let pts = vec![p(0.0, 0.0, 0.0), p(1.0, 0.0, 0.0)];
        assert!(extended_fpfh(&PointCloud::new(pts.clone()).unwrap(), 4).is_err());
        let n = p(0.0, 0.0, 1.0);
        let one = PointCloud::with_normals(vec![pts[0]], vec![n]).unwrap();
        assert!(extended_fpfh(&one, 4).is_err());
        let same = PointCloud::with_normals(vec![pts[0], pts[0]], vec![n, n]).unwrap();
        assert!(matches!(extended_fpfh(&same, 4), Err(Error::Degenerate(_))));
        let ok = PointCloud::with_normals(pts, vec![n, n]).unwrap();
        assert!(extended_fpfh(&ok, 0).is_err());
    }

    #[test]
    fn fpfh_skips_coincident_points() {
        let n = p(0.0, 0.0, 1.0);
        // reference is the middle point; the duplicate of it is skipped
        let pts = vec![p(-1.0, 0.0, 0.0), p(0.0, 0.0, 0.0), p(0.0, 0.0, 0.0), p(1.0, 0.0, 0.0)];
        let cloud = PointCloud::with_normals(pts, vec![n; 4]).unwrap();
        let h = extended_fpfh(&cloud, 4).unwrap();
        assert!((h.rows(0, 4).sum() - 1.0).abs() < 1e-15);
    }

    #[test]
    fn normals_must_be_unit() {
        let r = PointCloud::with_normals(vec![p(0.0, 0.0, 0.0)], vec![p(0.0, 0.0, 2.0)]);
        assert!(r.is_err());
        let r = PointCloud::with_normals(vec![p(0.0, 0.0, 0.0)], vec![]);
        assert!(r.is_err());
        assert!(PointCloud::new(vec![]).is_err());
    }

    #[test]
    fn extract_concatenates_in_order() {
        let cloud = PointCloud::new(vec![p(0.0, 0.0, 0.0), p(2.0, 0.0, 0.0)]).unwrap();
        let spec = FeatureSpec::new(vec![FeatureComponent::Centroid, FeatureComponent::Distance { i: 0, j: 1 }]);
        let x = extract(&spec, &cloud).unwrap();
        assert_eq!(x.values.as_slice(), &[1.0, 0.0, 0.0, 2.0]);
        assert_eq!(spec.dim(2), 4);

        let spec = FeatureSpec::new(vec![FeatureComponent::Positions]);
        assert_eq!(extract(&spec, &cloud).unwrap().len(), 6);

        assert!(extract(&FeatureSpec::new(vec![]), &cloud).is_err());
        assert!(FeatureSpec::new(vec![]).validate().is_err());
    }

    #[test]
    fn scale_divides_every_value() {
        let cloud = PointCloud::new(vec![p(0.0, 0.0, 0.0), p(2.0, 0.0, 0.0)]).unwrap();
        let comps = vec![FeatureComponent::Centroid, FeatureComponent::Distance { i: 0, j: 1 }];
        let raw = extract(&FeatureSpec::new(comps.clone()), &cloud).unwrap().values;
        let mm = extract(&FeatureSpec::new(comps.clone()).with_scale(1e-3), &cloud).unwrap().values;
        assert_eq!(mm, DVector::from_row_slice(&[1000.0, 0.0, 0.0, 2000.0]));
        assert_eq!(raw, DVector::from_row_slice(&[1.0, 0.0, 0.0, 2.0]));
        assert!(extract(&FeatureSpec::new(comps).with_scale(0.0), &cloud).is_err());
    }

    #[test]
    fn extract_names_failing_component() {
        let cloud = PointCloud::new(vec![p(0.0, 0.0, 0.0), p(2.0, 0.0, 0.0)]).unwrap();
        let spec = FeatureSpec::new(vec![FeatureComponent::Centroid, FeatureComponent::Distance { i: 0, j: 5 }]);
        match extract(&spec, &cloud).unwrap_err() {
            Error::Feature { index, component, .. } => {
                assert_eq!(index, 1);
                assert_eq!(component, "distance(0,5)");
            }
            e => panic!("unexpected {e}"),
        }
    }

    #[test]
    fn spec_serde_shape() {
        let spec: FeatureSpec = toml::from_str(
            r#"components = [ { kind = "centroid" }, { kind = "distance", i = 0, j = 1 },
                              { kind = "surface_variation", center = 3 }, { kind = "fpfh_histogram", bins = 45 } ]"#,
        )
        .unwrap();
        assert_eq!(spec.components.len(), 4);
        assert_eq!(spec.dim(10), 3 + 1 + 1 + 135);
        assert!(spec.needs_normals());
    }

    #[test]
    fn rigid_motion_behaviour() {
        let mut rng = StdRng::seed_from_u64(12);
        let pts = random_points(&mut rng, 30);
        let normals: Vec<_> = (0..30).map(|_| random_unit(&mut rng)).collect();
        let cloud = PointCloud::with_normals(pts, normals).unwrap();
        let axis = Unit::new_normalize(random_unit(&mut rng));
        let rot = Rotation3::from_axis_angle(&axis, 1.1).into_inner();
        let t = p(0.5, -3.0, 2.0);
        let moved = cloud.transformed(&rot, &t);
        assert!((centroid(&moved) - (rot * centroid(&cloud) + t)).amax() < 1e-12);
        let nb = PointCloud::new(cloud.points()[..12].to_vec()).unwrap();
        let nb_moved = PointCloud::new(moved.points()[..12].to_vec()).unwrap();
        assert!((surface_variation(&nb).unwrap() - surface_variation(&nb_moved).unwrap()).abs() < 1e-9);
        let (h1, h2) = (extended_fpfh(&cloud, 45).unwrap(), extended_fpfh(&moved, 45).unwrap());
        assert!((h1 - h2).amax() < 1e-9);
    }
}
