//! Point clouds, rigid poses, candidate sampling and collision filtering.
//!
//! All coordinates are meters in a right-handed frame whose `z` axis is the
//! vertical; gravity points along `-z`.

use nalgebra::{Matrix3, Quaternion, UnitQuaternion, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::fmt::Write as _;
use std::path::Path;
use thiserror::Error;

pub type Point3 = Vector3<f64>;

/// Norm tolerance for a quaternion to count as a rotation.
pub const UNIT_TOLERANCE: f64 = 1e-9;

#[derive(Debug, Error)]
pub enum GeomError {
    #[error("invalid rotation: quaternion norm {0}")]
    InvalidRotation(f64),
    #[error("empty point cloud")]
    EmptyCloud,
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("point cloud line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Frame {
    ObjectLocal,
    World,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PointCloud {
    pub points: Vec<Point3>,
    pub frame: Frame,
}

impl PointCloud {
    pub fn new(points: Vec<Point3>, frame: Frame) -> Self {
        Self { points, frame }
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn aabb(&self) -> Option<Aabb> {
        Aabb::from_points(&self.points)
    }

    pub fn centroid(&self) -> Option<Point3> {
        if self.points.is_empty() {
            return None;
        }
        let sum = self.points.iter().fold(Point3::zeros(), |acc, p| acc + p);
        Some(sum / self.points.len() as f64)
    }

    pub fn translated(&self, offset: &Point3) -> Self {
        Self {
            points: self.points.iter().map(|p| p + offset).collect(),
            frame: self.frame,
        }
    }

    /// Parses the plain-text format: one `x y z` triple per line, `#` starts a
    /// comment, blank lines are ignored. Non-finite values are rejected.
    pub fn parse(text: &str, frame: Frame) -> Result<Self, GeomError> {
        let mut points = Vec::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let fields: Vec<&str> = line.split_whitespace().collect();
            if fields.len() != 3 {
                return Err(GeomError::Parse {
                    line: i + 1,
                    msg: format!("expected 3 values, found {}", fields.len()),
                });
            }
            let mut xyz = [0.0; 3];
            for (slot, field) in xyz.iter_mut().zip(&fields) {
                let v: f64 = field.parse().map_err(|_| GeomError::Parse {
                    line: i + 1,
                    msg: format!("not a number: {field}"),
                })?;
                if !v.is_finite() {
                    return Err(GeomError::Parse {
                        line: i + 1,
                        msg: format!("non-finite value: {field}"),
                    });
                }
                *slot = v;
            }
            points.push(Point3::new(xyz[0], xyz[1], xyz[2]));
        }
        Ok(Self { points, frame })
    }

    pub fn load(path: &Path, frame: Frame) -> Result<Self, GeomError> {
        let text = std::fs::read_to_string(path)?;
        Self::parse(&text, frame)
    }

    pub fn to_text(&self) -> String {
        let mut out = String::with_capacity(self.points.len() * 32);
        for p in &self.points {
            let _ = writeln!(out, "{} {} {}", p.x, p.y, p.z);
        }
        out
    }
}

/// A rotation stored as a quaternion `(w, x, y, z)`.
///
/// Constructors that validate canonicalize to `w >= 0`. Raw, possibly
/// non-unit values can be carried with [`Rotation::from_wxyz_unchecked`];
/// they are rejected when applied.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Rotation {
    w: f64,
    x: f64,
    y: f64,
    z: f64,
}

impl Default for Rotation {
    fn default() -> Self {
        Self::identity()
    }
}

impl Rotation {
    pub fn identity() -> Self {
        Self { w: 1.0, x: 0.0, y: 0.0, z: 0.0 }
    }

    pub fn from_wxyz(w: f64, x: f64, y: f64, z: f64) -> Result<Self, GeomError> {
        let r = Self::from_wxyz_unchecked(w, x, y, z);
        let n = r.norm();
        if !n.is_finite() || (n - 1.0).abs() > UNIT_TOLERANCE {
            return Err(GeomError::InvalidRotation(n));
        }
        Ok(r.canonical())
    }

    pub fn from_wxyz_unchecked(w: f64, x: f64, y: f64, z: f64) -> Self {
        Self { w, x, y, z }
    }

    pub fn from_unit(q: &UnitQuaternion<f64>) -> Self {
        let q = q.quaternion();
        Self { w: q.w, x: q.i, y: q.j, z: q.k }.canonical()
    }

    pub fn from_axis_angle(axis: &Vector3<f64>, angle: f64) -> Self {
        let axis = nalgebra::Unit::new_normalize(*axis);
        Self::from_unit(&UnitQuaternion::from_axis_angle(&axis, angle))
    }

    /// Rotation about the vertical axis.
    pub fn yaw(angle: f64) -> Self {
        Self::from_axis_angle(&Vector3::z(), angle)
    }

    /// Shortest-arc rotation taking direction `from` onto direction `to`.
    pub fn between(from: &Vector3<f64>, to: &Vector3<f64>) -> Self {
        match UnitQuaternion::rotation_between(from, to) {
            Some(q) => Self::from_unit(&q),
            None => {
                // antiparallel: half turn about any axis orthogonal to `from`
                let helper = if from.x.abs() < 0.9 { Vector3::x() } else { Vector3::y() };
                Self::from_axis_angle(&from.cross(&helper), std::f64::consts::PI)
            }
        }
    }

    pub fn wxyz(&self) -> [f64; 4] {
        [self.w, self.x, self.y, self.z]
    }

    pub fn norm(&self) -> f64 {
        (self.w * self.w + self.x * self.x + self.y * self.y + self.z * self.z).sqrt()
    }

    pub fn is_unit(&self) -> bool {
        let n = self.norm();
        n.is_finite() && (n - 1.0).abs() <= UNIT_TOLERANCE
    }

    fn canonical(self) -> Self {
        if self.w < 0.0 {
            Self { w: -self.w, x: -self.x, y: -self.y, z: -self.z }
        } else {
            self
        }
    }

    pub fn to_unit(&self) -> Result<UnitQuaternion<f64>, GeomError> {
        if !self.is_unit() {
            return Err(GeomError::InvalidRotation(self.norm()));
        }
        Ok(UnitQuaternion::new_normalize(Quaternion::new(
            self.w, self.x, self.y, self.z,
        )))
    }

    /// Unit quaternion without validation; callers must ensure `is_unit`.
    pub(crate) fn unit(&self) -> UnitQuaternion<f64> {
        UnitQuaternion::new_normalize(Quaternion::new(self.w, self.x, self.y, self.z))
    }

    pub fn matrix(&self) -> Matrix3<f64> {
        self.unit().to_rotation_matrix().into_inner()
    }

    pub fn rotate(&self, v: &Vector3<f64>) -> Vector3<f64> {
        self.unit() * v
    }

    /// `self ∘ other`: apply `other` first.
    pub fn compose(&self, other: &Rotation) -> Rotation {
        Self::from_unit(&(self.unit() * other.unit()))
    }

    pub fn inverse(&self) -> Rotation {
        Self::from_unit(&self.unit().inverse())
    }

    /// Geodesic angle in radians, blind to the quaternion sign.
    pub fn angle_to(&self, other: &Rotation) -> f64 {
        let d = self.unit().inverse() * other.unit();
        let q = d.quaternion();
        2.0 * q.imag().norm().atan2(q.w.abs())
    }
}

/// Candidate pose of an object: `world = orientation · local + location`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Placement {
    pub location: Point3,
    pub orientation: Rotation,
    pub candidate_id: u32,
}

impl Placement {
    pub fn new(location: Point3, orientation: Rotation, candidate_id: u32) -> Self {
        Self { location, orientation, candidate_id }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Aabb {
    pub min: Point3,
    pub max: Point3,
}

impl Aabb {
    pub fn new(min: Point3, max: Point3) -> Self {
        Self { min, max }
    }

    pub fn from_points(points: &[Point3]) -> Option<Self> {
        let first = points.first()?;
        let mut min = *first;
        let mut max = *first;
        for p in &points[1..] {
            min = min.inf(p);
            max = max.sup(p);
        }
        Some(Self { min, max })
    }

    pub fn center(&self) -> Point3 {
        (self.min + self.max) * 0.5
    }

    pub fn extent(&self) -> Point3 {
        self.max - self.min
    }

    /// Box scaled by `factor` about its center.
    pub fn scaled(&self, factor: f64) -> Self {
        let c = self.center();
        let half = self.extent() * (0.5 * factor);
        Self { min: c - half, max: c + half }
    }

    pub fn expanded(&self, margin: f64) -> Self {
        let m = Point3::repeat(margin);
        Self { min: self.min - m, max: self.max + m }
    }

    pub fn contains(&self, p: &Point3) -> bool {
        (0..3).all(|i| p[i] >= self.min[i] && p[i] <= self.max[i])
    }

    /// Euclidean distance from `p` to the box (zero inside).
    pub fn distance(&self, p: &Point3) -> f64 {
        let mut d2 = 0.0;
        for i in 0..3 {
            let e = (self.min[i] - p[i]).max(p[i] - self.max[i]).max(0.0);
            d2 += e * e;
        }
        d2.sqrt()
    }
}

/// Poses an object-local cloud into the world frame.
pub fn apply_placement(object: &PointCloud, p: &Placement) -> Result<PointCloud, GeomError> {
    if object.is_empty() {
        return Err(GeomError::EmptyCloud);
    }
    let r = p.orientation.to_unit()?.to_rotation_matrix().into_inner();
    let points = object.points.iter().map(|q| r * q + p.location).collect();
    Ok(PointCloud::new(points, Frame::World))
}

/// The 18 candidate orientations: six local "up" directions brought onto
/// world `+z`, each combined with yaws of 0°, 60° and 120°.
///
/// Order is `[+z, -z, +x, -x, +y, -y]` × `[0°, 60°, 120°]`, yaw varying fastest.
pub fn canonical_orientations() -> Vec<Rotation> {
    let ups = [
        Vector3::z(),
        -Vector3::z(),
        Vector3::x(),
        -Vector3::x(),
        Vector3::y(),
        -Vector3::y(),
    ];
    let mut out = Vec::with_capacity(18);
    for up in &ups {
        let tilt = Rotation::between(up, &Vector3::z());
        for deg in [0.0_f64, 60.0, 120.0] {
            out.push(Rotation::yaw(deg.to_radians()).compose(&tilt));
        }
    }
    out
}

/// Box from which placement locations are drawn: the environment's bounding
/// box with its top raised by `headroom`.
pub fn placement_region(env: &PointCloud, headroom: f64) -> Result<Aabb, GeomError> {
    let mut aabb = env.aabb().ok_or(GeomError::EmptyCloud)?;
    aabb.max.z += headroom.max(0.0);
    Ok(aabb)
}

/// Draws `n_loc` locations uniformly from the placement region and pairs each
/// with every orientation. Candidate ids are `loc_index * |orientations| + k`.
pub fn sample_candidates(
    env: &PointCloud,
    n_loc: usize,
    orientations: &[Rotation],
    rng_seed: u64,
    headroom: f64,
) -> Result<Vec<Placement>, GeomError> {
    if n_loc == 0 {
        return Err(GeomError::InvalidArgument("n_loc must be at least 1".into()));
    }
    if orientations.is_empty() {
        return Err(GeomError::InvalidArgument("orientation list is empty".into()));
    }
    let region = placement_region(env, headroom)?;
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    let mut out = Vec::with_capacity(n_loc * orientations.len());
    for loc in 0..n_loc {
        let mut t = Point3::zeros();
        for i in 0..3 {
            let u: f64 = rng.gen();
            t[i] = region.min[i] + u * (region.max[i] - region.min[i]);
        }
        for (k, r) in orientations.iter().enumerate() {
            out.push(Placement::new(t, *r, (loc * orientations.len() + k) as u32));
        }
    }
    Ok(out)
}

const MAX_GRID_CELLS: f64 = 4.0e6;

/// Uniform voxel grid over a static point set, used for radius queries.
///
/// Points are stored grouped by cell. Any cell size gives exact query
/// results; it only changes how many cells a query scans.
#[derive(Debug, Clone)]
pub struct SpatialGrid {
    origin: Point3,
    cell: f64,
    dims: [usize; 3],
    starts: Vec<u32>,
    points: Vec<Point3>,
    source: Vec<u32>,
}

impl SpatialGrid {
    pub fn new(points: &[Point3], cell: f64) -> Self {
        let aabb = Aabb::from_points(points)
            .unwrap_or_else(|| Aabb::new(Point3::zeros(), Point3::zeros()));
        let ext = aabb.extent();
        let mut cell = cell.max(1e-6);
        let cells_at = |c: f64| (0..3).map(|i| (ext[i] / c).floor() + 1.0).product::<f64>();
        while cells_at(cell) > MAX_GRID_CELLS {
            cell *= 1.5;
        }
        let dims = [0, 1, 2].map(|i| (ext[i] / cell).floor() as usize + 1);
        let n_cells = dims[0] * dims[1] * dims[2];
        let mut grid = Self {
            origin: aabb.min,
            cell,
            dims,
            starts: vec![0; n_cells + 1],
            points: Vec::with_capacity(points.len()),
            source: Vec::with_capacity(points.len()),
        };
        let keys: Vec<usize> = points.iter().map(|p| grid.key(p)).collect();
        for &k in &keys {
            grid.starts[k + 1] += 1;
        }
        for i in 0..n_cells {
            grid.starts[i + 1] += grid.starts[i];
        }
        let mut fill = grid.starts.clone();
        let mut slots = vec![0u32; points.len()];
        for (i, &k) in keys.iter().enumerate() {
            slots[fill[k] as usize] = i as u32;
            fill[k] += 1;
        }
        grid.points = slots.iter().map(|&i| points[i as usize]).collect();
        grid.source = slots;
        grid
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn cell_size(&self) -> f64 {
        self.cell
    }

    fn coord(&self, v: f64, axis: usize) -> i64 {
        ((v - self.origin[axis]) / self.cell).floor() as i64
    }

    fn key(&self, p: &Point3) -> usize {
        let c = [0, 1, 2].map(|i| self.coord(p[i], i).clamp(0, self.dims[i] as i64 - 1) as usize);
        (c[2] * self.dims[1] + c[1]) * self.dims[0] + c[0]
    }

    /// Visits every stored point whose cell overlaps the box `[lo, hi]`.
    /// The visitor receives the original index and the point; it must apply
    /// its own exact test.
    pub fn visit_box(&self, lo: &Point3, hi: &Point3, mut f: impl FnMut(usize, &Point3)) {
        if self.points.is_empty() {
            return;
        }
        let mut range = [(0usize, 0usize); 3];
        for i in 0..3 {
            let a = self.coord(lo[i], i);
            let b = self.coord(hi[i], i);
            let top = self.dims[i] as i64 - 1;
            if b < 0 || a > top {
                return;
            }
            range[i] = (a.max(0) as usize, b.min(top) as usize);
        }
        for z in range[2].0..=range[2].1 {
            for y in range[1].0..=range[1].1 {
                let row = (z * self.dims[1] + y) * self.dims[0];
                let s = self.starts[row + range[0].0] as usize;
                let e = self.starts[row + range[0].1 + 1] as usize;
                for j in s..e {
                    f(self.source[j] as usize, &self.points[j]);
                }
            }
        }
    }

    /// True when some stored point lies strictly closer than `r` to `q`.
    pub fn any_within(&self, q: &Point3, r: f64) -> bool {
        if self.points.is_empty() {
            return false;
        }
        let lo = q - Point3::repeat(r);
        let hi = q + Point3::repeat(r);
        let r2 = r * r;
        let mut range = [(0usize, 0usize); 3];
        for i in 0..3 {
            let a = self.coord(lo[i], i);
            let b = self.coord(hi[i], i);
            let top = self.dims[i] as i64 - 1;
            if b < 0 || a > top {
                return false;
            }
            range[i] = (a.max(0) as usize, b.min(top) as usize);
        }
        for z in range[2].0..=range[2].1 {
            for y in range[1].0..=range[1].1 {
                let row = (z * self.dims[1] + y) * self.dims[0];
                let s = self.starts[row + range[0].0] as usize;
                let e = self.starts[row + range[0].1 + 1] as usize;
                if self.points[s..e].iter().any(|p| (p - q).norm_squared() < r2) {
                    return true;
                }
            }
        }
        false
    }

    /// Nearest stored point within distance `r` (inclusive), as `(index, distance)`.
    pub fn nearest_within(&self, q: &Point3, r: f64) -> Option<(usize, f64)> {
        let lo = q - Point3::repeat(r);
        let hi = q + Point3::repeat(r);
        let mut best: Option<(usize, f64)> = None;
        let r2 = r * r;
        self.visit_box(&lo, &hi, |i, p| {
            let d2 = (p - q).norm_squared();
            if d2 <= r2 && best.map_or(true, |(_, b)| d2 < b) {
                best = Some((i, d2));
            }
        });
        best.map(|(i, d2)| (i, d2.sqrt()))
    }
}

/// Default clearance for collision filtering, meters.
pub const DEFAULT_CLEARANCE: f64 = 0.003;

/// Reusable collision test of posed objects against one environment.
#[derive(Debug, Clone)]
pub struct CollisionChecker {
    grid: SpatialGrid,
    bounds: Option<Aabb>,
    clearance: f64,
}

impl CollisionChecker {
    pub fn new(env: &PointCloud, clearance: f64) -> Result<Self, GeomError> {
        if !(clearance > 0.0) {
            return Err(GeomError::InvalidArgument("clearance must be positive".into()));
        }
        Ok(Self {
            grid: SpatialGrid::new(&env.points, clearance.max(0.005)),
            bounds: env.aabb(),
            clearance,
        })
    }

    /// True when no posed object point lies within the clearance of the
    /// environment.
    pub fn is_free(&self, object: &PointCloud, p: &Placement) -> bool {
        let Some(bounds) = self.bounds else {
            return true;
        };
        let r = p.orientation.matrix();
        let reach = bounds.expanded(self.clearance);
        object.points.iter().all(|q| {
            let w = r * q + p.location;
            !reach.contains(&w) || !self.grid.any_within(&w, self.clearance)
        })
    }
}

/// Keeps the candidates whose posed object stays at least `clearance` away
/// from every environment point. Order is preserved.
pub fn collision_filter(
    object: &PointCloud,
    env: &PointCloud,
    candidates: &[Placement],
    clearance: f64,
) -> Result<Vec<Placement>, GeomError> {
    let checker = CollisionChecker::new(env, clearance)?;
    Ok(candidates
        .iter()
        .filter(|p| checker.is_free(object, p))
        .copied()
        .collect())
}
