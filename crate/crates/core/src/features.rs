//! The 120-entry placement feature vector: supporting contacts (3), caging
//! (21) and signatures of geometry (96).

use crate::geom::{apply_placement, Aabb, GeomError, Placement, Point3, PointCloud, SpatialGrid};
use serde::{Deserialize, Serialize};
use std::ops::Range;
use thiserror::Error;

pub const N_FEATURES: usize = 120;
pub const CONTACT: Range<usize> = 0..3;
pub const CAGING: Range<usize> = 3..24;
pub const SIGNATURE: Range<usize> = 24..120;

/// Sentinel for empty caging regions and undefined ratios.
pub const SENTINEL: f64 = -1.0;
/// Floor on radial distances inside signature ratios.
pub const RATIO_FLOOR: f64 = 1e-6;

const OUTER_SCALE: f64 = 1.6;
const CENTER_SCALE: f64 = 1.05;

#[derive(Debug, Error)]
pub enum FeatureError {
    #[error("object point cloud is empty")]
    EmptyObject,
    #[error("invalid feature config: {0}")]
    Config(String),
    #[error("expected {expected} features, got {got}")]
    Length { expected: usize, got: usize },
    #[error(transparent)]
    Geom(#[from] GeomError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FeatureConfig {
    /// Number of smallest support gaps kept; `None` means `max(10, ⌈0.05·n⌉)`.
    pub k: Option<usize>,
    /// Gap assigned to object points with nothing beneath them, meters.
    pub cap: f64,
    /// Horizontal radius searched for support beneath a point, meters.
    pub support_radius: f64,
    /// Collision clearance for candidate filtering, meters.
    pub clearance: f64,
}

impl Default for FeatureConfig {
    fn default() -> Self {
        Self { k: None, cap: 1.0, support_radius: 0.005, clearance: crate::geom::DEFAULT_CLEARANCE }
    }
}

impl FeatureConfig {
    pub fn k_for(&self, n: usize) -> usize {
        self.k.unwrap_or_else(|| 10.max((0.05 * n as f64).ceil() as usize))
    }

    pub fn validate(&self) -> Result<(), FeatureError> {
        if self.k == Some(0) {
            return Err(FeatureError::Config("k must be at least 1".into()));
        }
        if !(self.cap > 0.0) || !(self.support_radius > 0.0) || !(self.clearance > 0.0) {
            return Err(FeatureError::Config("cap, support_radius and clearance must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FeatureFamily {
    Contact,
    Caging,
    Signature,
}

impl FeatureFamily {
    pub const ALL: [FeatureFamily; 3] = [Self::Contact, Self::Caging, Self::Signature];

    pub fn range(self) -> Range<usize> {
        match self {
            Self::Contact => CONTACT,
            Self::Caging => CAGING,
            Self::Signature => SIGNATURE,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct FeatureVector(Vec<f64>);

impl FeatureVector {
    pub fn new(values: Vec<f64>) -> Result<Self, FeatureError> {
        if values.len() != N_FEATURES {
            return Err(FeatureError::Length { expected: N_FEATURES, got: values.len() });
        }
        Ok(Self(values))
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn contact(&self) -> &[f64] {
        &self.0[CONTACT]
    }

    pub fn caging(&self) -> &[f64] {
        &self.0[CAGING]
    }

    pub fn signature(&self) -> &[f64] {
        &self.0[SIGNATURE]
    }
}

impl TryFrom<Vec<f64>> for FeatureVector {
    type Error = FeatureError;
    fn try_from(v: Vec<f64>) -> Result<Self, FeatureError> {
        Self::new(v)
    }
}

impl From<FeatureVector> for Vec<f64> {
    fn from(v: FeatureVector) -> Self {
        v.0
    }
}

/// Column names in feature order.
pub fn feature_names() -> Vec<String> {
    let mut names: Vec<String> = ["sc_min", "sc_max", "sc_var"].iter().map(|s| s.to_string()).collect();
    names.extend((0..9).map(|i| format!("cage_h_{i}")));
    for i in 1..=3 {
        for m in 1..=4 {
            names.push(format!("cage_d_{i}{m}"));
        }
    }
    for kind in ["obj", "env", "ratio"] {
        for a in 0..4 {
            for b in 0..8 {
                names.push(format!("sig_{kind}_{a}_{b}"));
            }
        }
    }
    names
}

/// The 3×3×3 zone partition around a posed object.
#[derive(Debug, Clone, PartialEq)]
pub struct CagingGrid {
    /// Per axis: `[outer.min, center.min, center.max, outer.max]`.
    pub bounds: [[f64; 4]; 3],
    /// Bottom of the object's box; heights are reported relative to it.
    pub datum: f64,
}

impl CagingGrid {
    pub fn around(object_box: &Aabb) -> Self {
        let outer = object_box.scaled(OUTER_SCALE);
        let center = object_box.scaled(CENTER_SCALE);
        let bounds = [0, 1, 2].map(|i| [outer.min[i], center.min[i], center.max[i], outer.max[i]]);
        Self { bounds, datum: object_box.min.z }
    }

    pub fn outer(&self) -> Aabb {
        Aabb::new(
            Point3::new(self.bounds[0][0], self.bounds[1][0], self.bounds[2][0]),
            Point3::new(self.bounds[0][3], self.bounds[1][3], self.bounds[2][3]),
        )
    }

    /// Zone index along one axis; values on an inner boundary go to the
    /// lower zone. `None` outside the outer box.
    pub fn zone(&self, axis: usize, v: f64) -> Option<usize> {
        let b = &self.bounds[axis];
        if v < b[0] || v > b[3] {
            None
        } else if v <= b[1] {
            Some(0)
        } else if v <= b[2] {
            Some(1)
        } else {
            Some(2)
        }
    }

    /// `(x zone, y zone, vertical zone)`.
    pub fn locate(&self, p: &Point3) -> Option<(usize, usize, usize)> {
        Some((self.zone(0, p.x)?, self.zone(1, p.y)?, self.zone(2, p.z)?))
    }
}

/// Inclination and azimuth bins `(a, b)` of direction `v`; the zero vector
/// maps to `(0, 0)`.
pub fn spherical_bin(v: &Point3) -> (usize, usize) {
    let rho = v.norm();
    if rho == 0.0 {
        return (0, 0);
    }
    let theta = v.xy().norm().atan2(v.z).to_degrees();
    let mut phi = v.y.atan2(v.x).to_degrees();
    if phi < 0.0 {
        phi += 360.0;
    }
    if phi >= 360.0 {
        phi -= 360.0;
    }
    let bin = |angle: f64, n: usize| (((angle / 45.0).ceil() as i64 - 1).max(0) as usize).min(n - 1);
    (bin(theta, 4), bin(phi, 8))
}

/// Support-gap features of a world-frame object: `(min, max, variance)` of
/// the `k` smallest gaps.
pub fn supporting_contact_features(
    object: &PointCloud,
    env: &PointCloud,
    k: usize,
    cfg: &FeatureConfig,
) -> Result<[f64; 3], FeatureError> {
    let grid = SpatialGrid::new(&env.points, cfg.support_radius.max(0.005));
    contact_with_grid(object, &grid, k, cfg)
}

fn contact_with_grid(
    object: &PointCloud,
    grid: &SpatialGrid,
    k: usize,
    cfg: &FeatureConfig,
) -> Result<[f64; 3], FeatureError> {
    if object.is_empty() {
        return Err(FeatureError::EmptyObject);
    }
    if k == 0 {
        return Err(FeatureError::Config("k must be at least 1".into()));
    }
    if grid.is_empty() {
        return Ok([cfg.cap, cfg.cap, 0.0]);
    }
    let r = cfg.support_radius;
    let r2 = r * r;
    let mut gaps: Vec<f64> = object
        .points
        .iter()
        .map(|p| {
            let lo = Point3::new(p.x - r, p.y - r, f64::NEG_INFINITY);
            let hi = Point3::new(p.x + r, p.y + r, p.z);
            let mut top = f64::NEG_INFINITY;
            grid.visit_box(&lo, &hi, |_, q| {
                let dx = q.x - p.x;
                let dy = q.y - p.y;
                if q.z <= p.z && dx * dx + dy * dy <= r2 && q.z > top {
                    top = q.z;
                }
            });
            if top.is_finite() {
                p.z - top
            } else {
                cfg.cap
            }
        })
        .collect();
    gaps.sort_by(f64::total_cmp);
    gaps.truncate(k.min(gaps.len()));
    let n = gaps.len() as f64;
    let mean = gaps.iter().sum::<f64>() / n;
    let var = gaps.iter().map(|g| (g - mean).powi(2)).sum::<f64>() / n;
    Ok([gaps[0], gaps[gaps.len() - 1], var])
}

/// Caging features: 9 region heights then the 12 side distances.
pub fn caging_features(object: &PointCloud, env: &PointCloud, grid: &CagingGrid) -> [f64; 21] {
    caging_from_points(object, env.points.iter(), grid)
}

fn caging_from_points<'a>(
    object: &PointCloud,
    env: impl Iterator<Item = &'a Point3>,
    grid: &CagingGrid,
) -> [f64; 21] {
    let mut out = [SENTINEL; 21];
    // extreme env coordinates per vertical level and side slab:
    // [max x in x-zone 0, min x in x-zone 2, max y in y-zone 0, min y in y-zone 2]
    let mut slab = [[f64::NAN; 4]; 3];
    let mut top = [f64::NEG_INFINITY; 9];
    for q in env {
        let Some((j, k, i)) = grid.locate(q) else { continue };
        let region = j * 3 + k;
        top[region] = top[region].max(q.z);
        let s = &mut slab[i];
        if j == 0 && !(q.x <= s[0]) {
            s[0] = q.x;
        }
        if j == 2 && !(q.x >= s[1]) {
            s[1] = q.x;
        }
        if k == 0 && !(q.y <= s[2]) {
            s[2] = q.y;
        }
        if k == 2 && !(q.y >= s[3]) {
            s[3] = q.y;
        }
    }
    for (r, t) in top.iter().enumerate() {
        if t.is_finite() {
            out[r] = t - grid.datum;
        }
    }
    if object.is_empty() {
        return out;
    }
    let mut lo = Point3::repeat(f64::INFINITY);
    let mut hi = Point3::repeat(f64::NEG_INFINITY);
    for p in &object.points {
        lo = lo.inf(p);
        hi = hi.sup(p);
    }
    for (i, s) in slab.iter().enumerate() {
        let d = [lo.x - s[0], s[1] - hi.x, lo.y - s[2], s[3] - hi.y];
        for (m, v) in d.iter().enumerate() {
            if !v.is_nan() {
                out[9 + 4 * i + m] = *v;
            }
        }
    }
    out
}

/// Signature features around placing point `p`: 32 object counts, 32
/// environment counts, 32 radial ratios.
pub fn signature_features(object: &PointCloud, env: &PointCloud, p: &Point3) -> [f64; 96] {
    signature_from_points(object, p, |r, f| env.points.iter().for_each(|q| {
        if (q - p).norm() <= r {
            f(q)
        }
    }))
}

fn signature_from_points(
    object: &PointCloud,
    p: &Point3,
    env: impl FnOnce(f64, &mut dyn FnMut(&Point3)),
) -> [f64; 96] {
    let mut out = [0.0; 96];
    let mut c = [f64::NAN; 32];
    let mut t = [f64::NAN; 32];
    let mut rho_max: f64 = 0.0;
    for q in &object.points {
        let v = q - p;
        let rho = v.norm();
        let (a, b) = spherical_bin(&v);
        let r = a * 8 + b;
        out[r] += 1.0;
        if !(rho <= c[r]) {
            c[r] = rho;
        }
        rho_max = rho_max.max(rho);
    }
    let cutoff = 1.5 * rho_max;
    env(cutoff, &mut |q| {
        let v = q - p;
        let rho = v.norm();
        if rho > cutoff {
            return;
        }
        let (a, b) = spherical_bin(&v);
        let r = a * 8 + b;
        out[32 + r] += 1.0;
        if !(rho >= t[r]) {
            t[r] = rho;
        }
    });
    for r in 0..32 {
        out[64 + r] = if c[r].is_nan() || t[r].is_nan() {
            SENTINEL
        } else {
            c[r].max(RATIO_FLOOR) / t[r].max(RATIO_FLOOR)
        };
    }
    out
}

/// Feature extraction against one environment, reusing its spatial index
/// across candidates.
#[derive(Debug, Clone)]
pub struct FeatureExtractor {
    grid: SpatialGrid,
    cfg: FeatureConfig,
}

impl FeatureExtractor {
    pub fn new(env: &PointCloud, cfg: &FeatureConfig) -> Result<Self, FeatureError> {
        cfg.validate()?;
        Ok(Self { grid: SpatialGrid::new(&env.points, cfg.support_radius.max(0.005)), cfg: cfg.clone() })
    }

    pub fn config(&self) -> &FeatureConfig {
        &self.cfg
    }

    /// Features of a world-frame (already posed) object placed at `p`.
    pub fn extract_posed(&self, posed: &PointCloud, p: &Point3) -> Result<FeatureVector, FeatureError> {
        if posed.is_empty() {
            return Err(FeatureError::EmptyObject);
        }
        let k = self.cfg.k_for(posed.len());
        let contact = contact_with_grid(posed, &self.grid, k, &self.cfg)?;
        let object_box = posed.aabb().expect("nonempty");
        let cage = CagingGrid::around(&object_box);
        let outer = cage.outer();
        let mut near = Vec::new();
        self.grid.visit_box(&outer.min, &outer.max, |_, q| near.push(*q));
        let caging = caging_from_points(posed, near.iter(), &cage);
        let sig = signature_from_points(posed, p, |r, f| {
            let lo = p - Point3::repeat(r);
            let hi = p + Point3::repeat(r);
            self.grid.visit_box(&lo, &hi, |_, q| f(q));
        });
        let mut values = Vec::with_capacity(N_FEATURES);
        values.extend_from_slice(&contact);
        values.extend_from_slice(&caging);
        values.extend_from_slice(&sig);
        FeatureVector::new(values)
    }

    pub fn extract(&self, object: &PointCloud, p: &Placement) -> Result<FeatureVector, FeatureError> {
        let posed = apply_placement(object, p)?;
        self.extract_posed(&posed, &p.location)
    }
}

/// Poses `object` at `p` and computes its 120 features against `env`.
pub fn extract(
    object: &PointCloud,
    env: &PointCloud,
    p: &Placement,
    cfg: &FeatureConfig,
) -> Result<FeatureVector, FeatureError> {
    FeatureExtractor::new(env, cfg)?.extract(object, p)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geom::{Frame, Rotation};
    use crate::physics::testkit::{cube, plane};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn world(points: Vec<Point3>) -> PointCloud {
        PointCloud::new(points, Frame::World)
    }

    /// Bin lookup by scanning the closed-above bands.
    fn oracle_bin(v: &Point3) -> (usize, usize) {
        if v.norm() == 0.0 {
            return (0, 0);
        }
        let theta = (v.z / v.norm()).acos().to_degrees();
        let mut phi = v.y.atan2(v.x).to_degrees();
        if phi < 0.0 {
            phi += 360.0;
        }
        let a = (0..4).find(|&a| theta <= 45.0 * (a + 1) as f64).unwrap_or(3);
        let b = (0..8).find(|&b| phi <= 45.0 * (b + 1) as f64).unwrap_or(7);
        (a, b)
    }

    #[test]
    fn names_match_layout() {
        let n = feature_names();
        assert_eq!(n.len(), N_FEATURES);
        assert_eq!(n[0], "sc_min");
        assert_eq!(n[3], "cage_h_0");
        assert_eq!(n[12], "cage_d_11");
        assert_eq!(n[23], "cage_d_34");
        assert_eq!(n[24], "sig_obj_0_0");
        assert_eq!(n[56], "sig_env_0_0");
        assert_eq!(n[119], "sig_ratio_3_7");
    }

    #[test]
    fn cube_on_plane_has_zero_gaps() {
        let cfg = FeatureConfig::default();
        let obj = cube(0.05, 6);
        let env = plane(0.1, 0.005, 0.0);
        let posed = apply_placement(&obj, &Placement::new(Point3::new(0.0, 0.0, 0.025), Rotation::identity(), 0)).unwrap();
        let f = supporting_contact_features(&posed, &env, 10, &cfg).unwrap();
        assert!(f.iter().all(|v| v.abs() < 1e-12), "{f:?}");
        let raised = posed.translated(&Point3::new(0.0, 0.0, 0.02));
        let f = supporting_contact_features(&raised, &env, 10, &cfg).unwrap();
        assert!((f[0] - 0.02).abs() < 1e-12 && (f[1] - 0.02).abs() < 1e-12 && f[2].abs() < 1e-15);
    }

    #[test]
    fn contact_keeps_k_smallest() {
        let cfg = FeatureConfig::default();
        let env = world(vec![Point3::zeros()]);
        let obj = world([0.01, 0.02, 0.03, 0.5, 0.7].iter().map(|z| Point3::new(0.0, 0.0, *z)).collect());
        let f = supporting_contact_features(&obj, &env, 3, &cfg).unwrap();
        let kept = [0.01, 0.02, 0.03];
        let var = kept.iter().map(|g: &f64| (g - 0.02).powi(2)).sum::<f64>() / 3.0;
        assert!((f[0] - 0.01).abs() < 1e-15);
        assert!((f[1] - 0.03).abs() < 1e-15);
        assert!((f[2] - var).abs() < 1e-15);
    }

    #[test]
    fn contact_without_env_uses_cap() {
        let cfg = FeatureConfig::default();
        let obj = world(vec![Point3::new(0.0, 0.0, 0.1)]);
        let empty = world(vec![]);
        assert_eq!(supporting_contact_features(&obj, &empty, 5, &cfg).unwrap(), [1.0, 1.0, 0.0]);
        let beside = world(vec![Point3::new(0.5, 0.0, 0.0)]);
        assert_eq!(supporting_contact_features(&obj, &beside, 5, &cfg).unwrap(), [1.0, 1.0, 0.0]);
    }

    #[test]
    fn empty_env_gives_sentinels() {
        let obj = world(vec![Point3::new(0.0, 0.0, 0.0), Point3::new(0.01, 0.02, 0.03)]);
        let empty = world(vec![]);
        let grid = CagingGrid::around(&obj.aabb().unwrap());
        assert!(caging_features(&obj, &empty, &grid).iter().all(|v| *v == -1.0));
        let sig = signature_features(&obj, &empty, &Point3::zeros());
        assert!(sig[32..64].iter().all(|v| *v == 0.0));
        assert!(sig[64..96].iter().all(|v| *v == -1.0));
        assert_eq!(sig[..32].iter().sum::<f64>(), 2.0);
    }

    #[test]
    fn single_point_bins() {
        let (t, p) = (10f64.to_radians(), 100f64.to_radians());
        let v = Point3::new(t.sin() * p.cos(), t.sin() * p.sin(), t.cos());
        let obj = world(vec![v]);
        let sig = signature_features(&obj, &world(vec![]), &Point3::zeros());
        assert_eq!(sig[2], 1.0);
        assert_eq!(sig[..32].iter().sum::<f64>(), 1.0);
        assert_eq!(spherical_bin(&v), oracle_bin(&v));
    }

    #[test]
    fn boundary_ties_go_low() {
        assert_eq!(spherical_bin(&Point3::new(1.0, 0.0, 1.0)), (0, 0));
        assert_eq!(spherical_bin(&Point3::new(0.0, 1.0, 0.0)), (1, 1));
        assert_eq!(spherical_bin(&Point3::new(0.0, 0.0, -1.0)), (3, 0));
        assert_eq!(spherical_bin(&Point3::zeros()), (0, 0));
        let g = CagingGrid { bounds: [[0.0, 1.0, 2.0, 3.0]; 3], datum: 0.0 };
        assert_eq!(g.zone(0, 1.0), Some(0));
        assert_eq!(g.zone(0, 2.0), Some(1));
        assert_eq!(g.zone(0, 3.0), Some(2));
        assert_eq!(g.zone(0, 3.0 + 1e-12), None);
    }

    /// Brute-force side distance `m` of level `i` over all env/object pairs.
    fn brute_side(grid: &CagingGrid, env: &[Point3], obj: &[Point3], i: usize, m: usize) -> f64 {
        let (axis, side) = (m / 2, m % 2);
        let mut best = f64::INFINITY;
        for t in env.iter().filter(|t| grid.locate(t).is_some_and(|(j, k, l)| l == i && [j, k][axis] == 2 * side)) {
            for o in obj {
                best = best.min(if side == 0 { o[axis] - t[axis] } else { t[axis] - o[axis] });
            }
        }
        if best.is_finite() {
            best
        } else {
            -1.0
        }
    }

    #[test]
    fn plane_at_object_bottom() {
        let obj = cube(0.05, 6);
        let posed = apply_placement(&obj, &Placement::new(Point3::new(0.0, 0.0, 0.025), Rotation::identity(), 0)).unwrap();
        let env = plane(0.1, 0.002, 0.0);
        let grid = CagingGrid::around(&posed.aabb().unwrap());
        let f = caging_features(&posed, &env, &grid);
        assert!(f[..9].iter().all(|h| h.abs() < 0.002), "{:?}", &f[..9]);
        // the plane sits in the middle level; the levels above and below see nothing
        for i in 0..3 {
            for m in 0..4 {
                let want = brute_side(&grid, &env.points, &posed.points, i, m);
                assert!((f[9 + 4 * i + m] - want).abs() < 1e-12);
                assert_eq!(want == -1.0, i != 1);
            }
        }
    }

    #[test]
    fn rod_in_cylinder_side_distances() {
        // rod of radius s centered in a tube wall of radius r
        let (r, s, step) = (0.012, 0.010, 0.001);
        let mut env = Vec::new();
        let mut rod = Vec::new();
        for iz in 0..=60 {
            let z = iz as f64 * step;
            for j in 0..360 {
                let a = j as f64 * std::f64::consts::TAU / 360.0;
                env.push(Point3::new(r * a.cos(), r * a.sin(), z));
            }
            if iz > 5 && iz < 55 {
                for j in 0..120 {
                    let a = j as f64 * std::f64::consts::TAU / 120.0;
                    rod.push(Point3::new(s * a.cos(), s * a.sin(), z));
                }
            }
        }
        let obj = world(rod);
        let grid = CagingGrid::around(&obj.aabb().unwrap());
        let f = caging_features(&obj, &world(env.clone()), &grid);
        let mut populated = 0;
        for i in 0..3 {
            for m in 0..4 {
                let d = f[9 + 4 * i + m];
                if d == -1.0 {
                    continue;
                }
                populated += 1;
                let brute = brute_side(&grid, &env, &obj.points, i, m);
                assert!((d - brute).abs() < 1e-12, "{d} vs {brute}");
                assert!((d - (r - s)).abs() <= 2.0 * step, "{d}");
            }
        }
        assert_eq!(populated, 12);
    }

    #[test]
    fn extract_layout_and_determinism() {
        let cfg = FeatureConfig::default();
        let obj = cube(0.04, 5);
        let env = plane(0.1, 0.004, 0.0);
        let p = Placement::new(Point3::new(0.01, 0.0, 0.03), Rotation::yaw(0.3), 0);
        let a = extract(&obj, &env, &p, &cfg).unwrap();
        let b = extract(&obj, &env, &p, &cfg).unwrap();
        assert_eq!(a.as_slice().len(), 120);
        assert_eq!((a.contact().len(), a.caging().len(), a.signature().len()), (3, 21, 96));
        assert_eq!(a, b);
        assert!(a.as_slice().iter().all(|v| v.is_finite()));
    }

    fn random_scene(seed: u64) -> (PointCloud, PointCloud, Placement) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let obj = PointCloud::new(
            (0..40).map(|_| Point3::new(rng.gen_range(-0.03..0.03), rng.gen_range(-0.03..0.03), rng.gen_range(-0.03..0.03))).collect(),
            Frame::ObjectLocal,
        );
        let env = world((0..300).map(|_| Point3::new(rng.gen_range(-0.1..0.1), rng.gen_range(-0.1..0.1), rng.gen_range(-0.05..0.02))).collect());
        let p = Placement::new(
            Point3::new(rng.gen_range(-0.05..0.05), rng.gen_range(-0.05..0.05), rng.gen_range(0.0..0.05)),
            Rotation::yaw(rng.gen_range(0.0..6.0)),
            0,
        );
        (obj, env, p)
    }

    #[test]
    fn translation_leaves_features_unchanged() {
        let cfg = FeatureConfig::default();
        let shift = Point3::new(0.3, -0.2, 0.15);
        for seed in 0..20 {
            let (obj, env, p) = random_scene(seed);
            let a = extract(&obj, &env, &p, &cfg).unwrap();
            let moved = Placement::new(p.location + shift, p.orientation, 0);
            let b = extract(&obj, &env.translated(&shift), &moved, &cfg).unwrap();
            for (i, (x, y)) in a.as_slice().iter().zip(b.as_slice()).enumerate() {
                assert!((x - y).abs() < 1e-9, "feature {i}: {x} vs {y}");
            }
        }
    }

    #[test]
    fn quarter_turn_permutes_features() {
        let cfg = FeatureConfig::default();
        let quarter = Rotation::yaw(std::f64::consts::FRAC_PI_2);
        for seed in 100..120 {
            let (obj, env, p) = random_scene(seed);
            let a = extract(&obj, &env, &p, &cfg).unwrap();
            let turn = |q: &Point3| quarter.rotate(&(q - p.location)) + p.location;
            let env2 = world(env.points.iter().map(turn).collect());
            let p2 = Placement::new(p.location, quarter.compose(&p.orientation), 0);
            let b = extract(&obj, &env2, &p2, &cfg).unwrap();
            let (a, b) = (a.as_slice(), b.as_slice());
            for i in 0..3 {
                assert!((a[i] - b[i]).abs() < 1e-9);
            }
            let mut ha: Vec<f64> = a[3..12].to_vec();
            let mut hb: Vec<f64> = b[3..12].to_vec();
            ha.sort_by(f64::total_cmp);
            hb.sort_by(f64::total_cmp);
            for (x, y) in ha.iter().zip(&hb) {
                assert!((x - y).abs() < 1e-9);
            }
            // (x, y) -> (-y, x): d1 <- d4, d2 <- d3, d3 <- d1, d4 <- d2
            for i in 0..3 {
                let base = 12 + 4 * i;
                for (m, from) in [3, 2, 0, 1].iter().enumerate() {
                    assert!((b[base + m] - a[base + from]).abs() < 1e-9, "level {i} d{}", m + 1);
                }
            }
            for seg in [24, 56, 88] {
                for aa in 0..4 {
                    for bb in 0..8 {
                        let x = a[seg + aa * 8 + bb];
                        let y = b[seg + aa * 8 + (bb + 2) % 8];
                        assert!((x - y).abs() < 1e-9, "seg {seg} bin ({aa},{bb})");
                    }
                }
            }
        }
    }

    proptest! {
        #[test]
        fn binning_matches_oracle(x in -1.0f64..1.0, y in -1.0f64..1.0, z in -1.0f64..1.0) {
            let v = Point3::new(x, y, z);
            prop_assert_eq!(spherical_bin(&v), oracle_bin(&v));
        }

        #[test]
        fn feature_invariants(seed in 0u64..500) {
            let (obj, env, p) = random_scene(seed);
            let f = extract(&obj, &env, &p, &FeatureConfig::default()).unwrap();
            let v = f.as_slice();
            prop_assert!(v[0] <= v[1]);
            prop_assert!(v[2] >= 0.0);
            prop_assert_eq!(v[24..56].iter().sum::<f64>(), obj.len() as f64);
            prop_assert!(v[88..120].iter().all(|r| *r == -1.0 || *r > 0.0));
            let posed = apply_placement(&obj, &p).unwrap();
            let rho_max = posed.points.iter().map(|q| (q - p.location).norm()).fold(0.0, f64::max);
            let inside = env.points.iter().filter(|q| (*q - p.location).norm() <= 1.5 * rho_max).count();
            prop_assert_eq!(v[56..88].iter().sum::<f64>(), inside as f64);
        }
    }
}
