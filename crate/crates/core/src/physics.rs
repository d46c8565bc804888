//! Rigid-body settling used to label placements as stable or not.
//!
//! The object is a rigid set of equal point masses. The environment is
//! static and looked up through a 5 mm voxel index. Object points closer
//! than [`SimParams::contact_radius`] to the environment surface get a
//! spring-damper normal force and a spring-anchored tangential friction
//! force capped by Coulomb's law.
//! Integration is semi-implicit Euler.

use crate::geom::{Aabb, Placement, Point3, PointCloud, Rotation};
use nalgebra::{Matrix3, Matrix6, UnitQuaternion, Vector3};
use serde::{Deserialize, Serialize};
use std::fmt::Write as _;
use thiserror::Error;

/// Fraction of the explicit-Euler stability bound that contact gains may use.
const STABILITY_FRACTION: f64 = 0.25;

#[derive(Debug, Error)]
pub enum PhysicsError {
    #[error("degenerate inertia: object needs at least 3 non-collinear points")]
    DegenerateInertia,
    #[error("inertia tensor is not symmetric positive-definite")]
    NonPositiveInertia,
    #[error("invalid simulation parameters: {0}")]
    InvalidParams(String),
    #[error(transparent)]
    Geom(#[from] crate::geom::GeomError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SimParams {
    /// Integration step, seconds.
    pub timestep: f64,
    /// Kinetic-energy threshold δ, joules.
    pub energy_delta: f64,
    /// Validity threshold δ_s on `|ΔT|² + angle²` (m² + rad²).
    pub validity_delta: f64,
    pub max_steps: usize,
    /// Normal stiffness per contacting object point, N/m. The sum over
    /// contacts is capped to keep the explicit step stable.
    pub stiffness: f64,
    /// Normal damping per contacting object point, N·s/m, capped the same way.
    pub damping: f64,
    /// Coulomb coefficient.
    pub friction: f64,
    /// Rate (1/s) at which spin is damped while touching the environment.
    pub rolling_damping: f64,
    /// Distance from the environment surface at which contact begins, meters.
    pub contact_radius: f64,
    /// Radius of the neighborhood used to fit the local surface, meters.
    pub surface_radius: f64,
    /// Voxel size of the environment index, meters.
    pub voxel: f64,
    /// Object mass, kg.
    pub mass: f64,
    pub gravity: f64,
    /// Consecutive quiet steps required to declare convergence.
    pub quiet_steps: usize,
    /// Stop early, unconverged, once the pose distance² to the start
    /// exceeds this value.
    pub abort_distance_sq: Option<f64>,
}

impl Default for SimParams {
    fn default() -> Self {
        Self {
            timestep: 1e-3,
            energy_delta: 1e-6,
            validity_delta: 0.01,
            max_steps: 20_000,
            stiffness: 5e3,
            damping: 50.0,
            friction: 0.5,
            rolling_damping: 8.0,
            contact_radius: 0.004,
            surface_radius: 0.006,
            voxel: 0.005,
            mass: 0.2,
            gravity: 9.81,
            quiet_steps: 50,
            abort_distance_sq: None,
        }
    }
}

impl SimParams {
    pub fn validate(&self) -> Result<(), PhysicsError> {
        let bad = |m: &str| Err(PhysicsError::InvalidParams(m.to_string()));
        if !(self.timestep > 0.0) {
            return bad("timestep must be positive");
        }
        if !(self.energy_delta > 0.0) {
            return bad("energy delta must be positive");
        }
        if !(self.validity_delta > 0.0) {
            return bad("validity delta must be positive");
        }
        if self.max_steps == 0 {
            return bad("max_steps must be at least 1");
        }
        if !(self.mass > 0.0) || !(self.contact_radius > 0.0) || !(self.voxel > 0.0) {
            return bad("mass, contact radius and voxel must be positive");
        }
        if self.surface_radius < self.contact_radius {
            return bad("surface radius must be at least the contact radius");
        }
        if self.stiffness < 0.0 || self.damping < 0.0 || self.friction < 0.0 {
            return bad("stiffness, damping and friction must be non-negative");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RigidState {
    /// Placement location (origin of the object's local frame).
    pub position: Point3,
    pub orientation: Rotation,
    /// Velocity of the center of mass, m/s.
    pub linear_velocity: Vector3<f64>,
    /// World-frame angular velocity, rad/s.
    pub angular_velocity: Vector3<f64>,
}

impl RigidState {
    pub fn at_rest(p: &Placement) -> Self {
        Self {
            position: p.location,
            orientation: p.orientation,
            linear_velocity: Vector3::zeros(),
            angular_velocity: Vector3::zeros(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Termination {
    Converged,
    MaxSteps,
    /// Dropped below the environment; it can never come to rest on it.
    FellOff,
    /// Moved past [`SimParams::abort_distance_sq`].
    Displaced,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SettleResult {
    pub final_state: RigidState,
    /// Kinetic energy after each step.
    pub energy_trace: Vec<f64>,
    pub converged: bool,
    pub steps: usize,
    pub termination: Termination,
}

/// One row of a trajectory dump.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrajectoryRow {
    pub step: usize,
    pub energy: f64,
    pub position: Point3,
    pub orientation: Rotation,
}

/// `½ m‖v‖² + ½ ωᵀIω`.
pub fn kinetic_energy(
    state: &RigidState,
    mass: f64,
    inertia: &Matrix3<f64>,
) -> Result<f64, PhysicsError> {
    if !(mass > 0.0) {
        return Err(PhysicsError::InvalidParams("mass must be positive".into()));
    }
    let asym = (inertia - inertia.transpose()).abs().max();
    if !(asym <= 1e-12 * inertia.abs().max().max(1.0)) || inertia.cholesky().is_none() {
        return Err(PhysicsError::NonPositiveInertia);
    }
    let v = &state.linear_velocity;
    let w = &state.angular_velocity;
    Ok(0.5 * mass * v.norm_squared() + 0.5 * w.dot(&(inertia * w)))
}

/// `‖T_s − T_0‖² + angle(R_s, R_0)²`.
pub fn pose_distance_sq(start: &Placement, state: &RigidState) -> f64 {
    (state.position - start.location).norm_squared()
        + start.orientation.angle_to(&state.orientation).powi(2)
}

/// A placement is valid when the run converged and the settled pose is
/// within `validity_delta` of the start.
pub fn label_validity(start: &Placement, result: &SettleResult, validity_delta: f64) -> bool {
    result.converged && pose_distance_sq(start, &result.final_state) < validity_delta
}

/// Rigid point set with mass properties about its center of mass.
#[derive(Debug, Clone)]
pub struct RigidBody {
    /// Points relative to the center of mass, body frame.
    points: Vec<Vector3<f64>>,
    /// Center of mass in the object's local frame.
    com: Vector3<f64>,
    inertia: Matrix3<f64>,
    inertia_inv: Matrix3<f64>,
    mass: f64,
    radius: f64,
}

impl RigidBody {
    pub fn new(object: &PointCloud, mass: f64) -> Result<Self, PhysicsError> {
        let n = object.len();
        if n < 3 {
            return Err(PhysicsError::DegenerateInertia);
        }
        let com = object.centroid().expect("nonempty");
        let points: Vec<Vector3<f64>> = object.points.iter().map(|p| p - com).collect();
        let far = points
            .iter()
            .max_by(|a, b| a.norm_squared().total_cmp(&b.norm_squared()))
            .copied()
            .unwrap_or_default();
        let radius = far.norm();
        let spread = points
            .iter()
            .map(|p| (p - points[0]).cross(&(far - points[0])).norm())
            .fold(0.0, f64::max);
        if radius <= 0.0 || spread <= 1e-12 * radius * radius {
            return Err(PhysicsError::DegenerateInertia);
        }
        let m = mass / n as f64;
        let mut inertia = Matrix3::zeros();
        for r in &points {
            inertia += (Matrix3::identity() * r.norm_squared() - r * r.transpose()) * m;
        }
        let inertia_inv = inertia
            .try_inverse()
            .ok_or(PhysicsError::DegenerateInertia)?;
        Ok(Self { points, com, inertia, inertia_inv, mass, radius })
    }

    pub fn inertia(&self) -> &Matrix3<f64> {
        &self.inertia
    }

    pub fn mass(&self) -> f64 {
        self.mass
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }
}

/// Static environment voxelized for contact queries.
///
/// Every voxel lists the environment points that can lie within the
/// neighborhood radius of some location inside that voxel. A query fits a
/// local surface to the neighbors (weighted centroid and mean direction), so
/// a sampled plane behaves as a flat plane rather than a field of bumps,
/// while an isolated point still behaves as a sphere.
#[derive(Debug, Clone)]
pub struct ContactField {
    origin: Point3,
    cell: f64,
    dims: [usize; 3],
    starts: Vec<u32>,
    entries: Vec<Point3>,
    radius: f64,
    neighborhood: f64,
    bounds: Option<Aabb>,
}

impl ContactField {
    pub fn new(env: &PointCloud, radius: f64, neighborhood: f64, voxel: f64) -> Self {
        let neighborhood = neighborhood.max(radius);
        let Some(bounds) = env.aabb() else {
            return Self {
                origin: Point3::zeros(),
                cell: voxel,
                dims: [0; 3],
                starts: vec![0],
                entries: Vec::new(),
                radius,
                neighborhood,
                bounds: None,
            };
        };
        let region = bounds.expanded(neighborhood + voxel);
        let ext = region.extent();
        let dims = [0, 1, 2].map(|i| (ext[i] / voxel).ceil() as usize + 1);
        let n_cells = dims[0] * dims[1] * dims[2];
        let reach = neighborhood + voxel * 3f64.sqrt() * 0.5;
        let reach2 = reach * reach;
        let span = (reach / voxel).ceil() as i64 + 1;
        let origin = region.min;

        // two passes: count, then fill
        let mut counts = vec![0u32; n_cells + 1];
        let visit = |p: &Point3, f: &mut dyn FnMut(usize)| {
            let c = [0, 1, 2].map(|i| ((p[i] - origin[i]) / voxel).floor() as i64);
            for dz in -span..=span {
                for dy in -span..=span {
                    for dx in -span..=span {
                        let k = [c[0] + dx, c[1] + dy, c[2] + dz];
                        if (0..3).any(|i| k[i] < 0 || k[i] >= dims[i] as i64) {
                            continue;
                        }
                        let center = Point3::new(
                            origin.x + (k[0] as f64 + 0.5) * voxel,
                            origin.y + (k[1] as f64 + 0.5) * voxel,
                            origin.z + (k[2] as f64 + 0.5) * voxel,
                        );
                        if (center - p).norm_squared() <= reach2 {
                            f((k[2] as usize * dims[1] + k[1] as usize) * dims[0] + k[0] as usize);
                        }
                    }
                }
            }
        };
        for p in &env.points {
            visit(p, &mut |cell| counts[cell + 1] += 1);
        }
        for i in 0..n_cells {
            counts[i + 1] += counts[i];
        }
        let mut fill = counts.clone();
        let mut entries = vec![Point3::zeros(); counts[n_cells] as usize];
        for p in &env.points {
            visit(p, &mut |cell| {
                entries[fill[cell] as usize] = *p;
                fill[cell] += 1;
            });
        }
        Self {
            origin,
            cell: voxel,
            dims,
            starts: counts,
            entries,
            radius,
            neighborhood,
            bounds: Some(bounds),
        }
    }

    pub fn bounds(&self) -> Option<&Aabb> {
        self.bounds.as_ref()
    }

    pub fn radius(&self) -> f64 {
        self.radius
    }

    /// Distance from `q` to the local environment surface and the unit
    /// normal pointing away from it, when closer than the contact radius.
    #[inline]
    pub fn query(&self, q: &Point3) -> Option<(f64, Vector3<f64>)> {
        let mut k = [0usize; 3];
        for i in 0..3 {
            let c = ((q[i] - self.origin[i]) / self.cell).floor();
            if c < 0.0 || c >= self.dims[i] as f64 {
                return None;
            }
            k[i] = c as usize;
        }
        let cell = (k[2] * self.dims[1] + k[1]) * self.dims[0] + k[0];
        let (s, e) = (self.starts[cell] as usize, self.starts[cell + 1] as usize);
        let r2 = self.neighborhood * self.neighborhood;
        let mut wsum = 0.0;
        let mut centroid = Vector3::zeros();
        let mut dir = Vector3::zeros();
        let mut nearest = (f64::INFINITY, Vector3::zeros());
        for p in &self.entries[s..e] {
            let diff = q - p;
            let d2 = diff.norm_squared();
            if d2 >= r2 {
                continue;
            }
            let t = 1.0 - d2 / r2;
            let w = t * t;
            wsum += w;
            centroid += p * w;
            if d2 > 1e-24 {
                let d = d2.sqrt();
                dir += diff * (w / d);
                if d < nearest.0 {
                    nearest = (d, diff / d);
                }
            }
        }
        if wsum == 0.0 {
            return None;
        }
        let centroid = centroid / wsum;
        let normal = match dir.try_normalize(1e-9 * wsum) {
            Some(n) => n,
            None if nearest.0.is_finite() => nearest.1,
            None => Vector3::z(),
        };
        let d = (q - centroid).dot(&normal);
        (d < self.radius).then_some((d, normal))
    }
}

/// Settles one object against one environment for many start poses.
#[derive(Debug, Clone)]
pub struct Settler {
    body: RigidBody,
    field: ContactField,
    params: SimParams,
}

impl Settler {
    pub fn new(object: &PointCloud, env: &PointCloud, params: &SimParams) -> Result<Self, PhysicsError> {
        params.validate()?;
        if object.is_empty() {
            return Err(crate::geom::GeomError::EmptyCloud.into());
        }
        let body = RigidBody::new(object, params.mass)?;
        let field = ContactField::new(env, params.contact_radius, params.surface_radius, params.voxel);
        Ok(Self { body, field, params: params.clone() })
    }

    pub fn params(&self) -> &SimParams {
        &self.params
    }

    pub fn body(&self) -> &RigidBody {
        &self.body
    }

    pub fn run(&self, start: &Placement) -> Result<SettleResult, PhysicsError> {
        self.simulate(start, None)
    }

    /// Like [`Settler::run`] but also records the pose after every step.
    pub fn run_traced(
        &self,
        start: &Placement,
    ) -> Result<(SettleResult, Vec<TrajectoryRow>), PhysicsError> {
        let mut rows = Vec::new();
        let result = self.simulate(start, Some(&mut rows))?;
        Ok((result, rows))
    }

    fn simulate(
        &self,
        start: &Placement,
        mut trace: Option<&mut Vec<TrajectoryRow>>,
    ) -> Result<SettleResult, PhysicsError> {
        let p = &self.params;
        let body = &self.body;
        let n = body.points.len();
        let dt = p.timestep;
        let rc = self.field.radius;
        let m = body.mass;

        let mut q: UnitQuaternion<f64> = start.orientation.to_unit()?;
        let mut x = start.location + q * body.com;
        let mut v = Vector3::zeros();
        let mut w = Vector3::zeros();
        let mut anchors: Vec<Option<Point3>> = vec![None; n];
        let mut contacts: Vec<(usize, Vector3<f64>, f64, Vector3<f64>)> = Vec::new();
        // explicit-integration limits on total contact stiffness and damping,
        // as rates per unit mass or inertia
        let stiff_limit = STABILITY_FRACTION * 4.0 / (dt * dt);
        let damp_limit = STABILITY_FRACTION * 2.0 / dt;
        let inv_sqrt_inertia = {
            let e = body.inertia.symmetric_eigen();
            let d = Matrix3::from_diagonal(&e.eigenvalues.map(|x| 1.0 / x.sqrt()));
            e.eigenvectors * d * e.eigenvectors.transpose()
        };
        let mut energy_trace = Vec::new();
        let mut quiet = 0usize;
        let mut prev_energy = 0.0;
        let gravity = Vector3::new(0.0, 0.0, -p.gravity * m);
        let reach = body.radius + rc;
        let floor = self.field.bounds.map(|b| b.min.z);

        let state_of = |x: &Vector3<f64>, q: &UnitQuaternion<f64>, v, w| RigidState {
            position: x - q * body.com,
            orientation: Rotation::from_unit(q),
            linear_velocity: v,
            angular_velocity: w,
        };

        let mut termination = Termination::MaxSteps;
        let mut steps = 0;
        while steps < p.max_steps {
            steps += 1;
            let rot = q.to_rotation_matrix().into_inner();
            let mut force = gravity;
            let mut torque = Vector3::zeros();
            let mut touching = false;
            let near = self.field.bounds.is_some_and(|b| b.distance(&x) <= reach);
            contacts.clear();
            if near {
                for (i, rb) in body.points.iter().enumerate() {
                    let r = rot * rb;
                    match self.field.query(&(x + r)) {
                        Some((d, normal)) => contacts.push((i, r, d, normal)),
                        None => anchors[i] = None,
                    }
                }
            } else {
                anchors.iter_mut().for_each(|a| *a = None);
            }
            if !contacts.is_empty() {
                touching = true;
                // scale per-contact gains down when their sum would make the
                // explicit step unstable; the rate is the largest eigenvalue of
                // the summed contact stiffness over the body's mass matrix
                let mut sum_r = Vector3::zeros();
                let mut sum_rr = Matrix3::zeros();
                for (_, r, _, _) in &contacts {
                    sum_r += r;
                    sum_rr += Matrix3::identity() * r.norm_squared() - r * r.transpose();
                }
                let count = contacts.len() as f64;
                let inv_sqrt_iw = rot * inv_sqrt_inertia * rot.transpose();
                let coupling = -sum_r.cross_matrix() * inv_sqrt_iw / m.sqrt();
                let mut a = Matrix6::zeros();
                a.fixed_view_mut::<3, 3>(0, 0).copy_from(&(Matrix3::identity() * (count / m)));
                a.fixed_view_mut::<3, 3>(0, 3).copy_from(&coupling);
                a.fixed_view_mut::<3, 3>(3, 0).copy_from(&coupling.transpose());
                a.fixed_view_mut::<3, 3>(3, 3).copy_from(&(inv_sqrt_iw * sum_rr * inv_sqrt_iw));
                let rate = a.symmetric_eigenvalues().max().max(1e-300);
                let k_scale = (stiff_limit / (p.stiffness * rate)).min(1.0);
                let c_scale = (damp_limit / (p.damping * rate)).min(1.0);
                let (kp, cp) = (p.stiffness * k_scale, p.damping * c_scale);
                for &(i, r, d, normal) in &contacts {
                    let world = x + r;
                    let vel = v + w.cross(&r);
                    let vn = vel.dot(&normal);
                    let fn_mag = (kp * (rc - d) - cp * vn).max(0.0);
                    let mut f = normal * fn_mag;
                    if p.friction > 0.0 && fn_mag > 0.0 {
                        let anchor = anchors[i].get_or_insert(world);
                        let disp = world - *anchor;
                        let mut disp_t = disp - normal * disp.dot(&normal);
                        let vt = vel - normal * vn;
                        let cap = p.friction * fn_mag;
                        let spring = kp * disp_t.norm();
                        if spring > cap {
                            disp_t *= cap / spring;
                            *anchor = world - disp_t;
                        }
                        let mut ft = -disp_t * kp - vt * cp;
                        let ft_norm = ft.norm();
                        if ft_norm > cap {
                            ft *= cap / ft_norm;
                        }
                        f += ft;
                    } else {
                        anchors[i] = None;
                    }
                    force += f;
                    torque += r.cross(&f);
                }
            }

            let inertia_w = rot * body.inertia * rot.transpose();
            let inertia_inv_w = rot * body.inertia_inv * rot.transpose();
            if touching && p.rolling_damping > 0.0 {
                torque -= inertia_w * w * p.rolling_damping;
            }
            v += force * (dt / m);
            w += inertia_inv_w * (torque - w.cross(&(inertia_w * w))) * dt;
            x += v * dt;
            let spin = w * dt;
            q = UnitQuaternion::from_scaled_axis(spin) * q;
            q.renormalize();

            let rot = q.to_rotation_matrix().into_inner();
            let energy = 0.5 * m * v.norm_squared()
                + 0.5 * w.dot(&(rot * body.inertia * rot.transpose() * w));
            energy_trace.push(energy);
            if let Some(rows) = trace.as_deref_mut() {
                let s = state_of(&x, &q, v, w);
                rows.push(TrajectoryRow {
                    step: steps,
                    energy,
                    position: s.position,
                    orientation: s.orientation,
                });
            }

            if (energy - prev_energy).abs() < p.energy_delta && energy < p.energy_delta {
                quiet += 1;
            } else {
                quiet = 0;
            }
            prev_energy = energy;
            if quiet >= p.quiet_steps {
                termination = Termination::Converged;
                break;
            }
            if let Some(fl) = floor {
                if x.z + body.radius < fl - 0.02 {
                    termination = Termination::FellOff;
                    break;
                }
            }
            if let Some(limit) = p.abort_distance_sq {
                let s = state_of(&x, &q, v, w);
                if pose_distance_sq(start, &s) > limit {
                    termination = Termination::Displaced;
                    break;
                }
            }
        }
        Ok(SettleResult {
            final_state: state_of(&x, &q, v, w),
            energy_trace,
            converged: termination == Termination::Converged,
            steps,
            termination,
        })
    }
}

/// Settles `object` released from rest at `start`.
pub fn settle(
    object: &PointCloud,
    start: &Placement,
    env: &PointCloud,
    params: &SimParams,
) -> Result<SettleResult, PhysicsError> {
    Settler::new(object, env, params)?.run(start)
}

/// CSV text with header `step,E_n,Tx,Ty,Tz,qw,qx,qy,qz`.
pub fn trajectory_csv(rows: &[TrajectoryRow]) -> String {
    let mut out = String::from("step,E_n,Tx,Ty,Tz,qw,qx,qy,qz\n");
    for r in rows {
        let q = r.orientation.wxyz();
        let _ = writeln!(
            out,
            "{},{:e},{},{},{},{},{},{},{}",
            r.step, r.energy, r.position.x, r.position.y, r.position.z, q[0], q[1], q[2], q[3]
        );
    }
    out
}

#[cfg(test)]
pub(crate) mod testkit {
    use crate::geom::{Frame, Point3, PointCloud};

    /// Square grid of points in the plane z = `z`.
    pub fn plane(half: f64, step: f64, z: f64) -> PointCloud {
        let n = (2.0 * half / step).round() as i32;
        let mut pts = Vec::new();
        for i in 0..=n {
            for j in 0..=n {
                pts.push(Point3::new(-half + i as f64 * step, -half + j as f64 * step, z));
            }
        }
        PointCloud::new(pts, Frame::World)
    }

    /// Surface samples of an axis-aligned cube of side `side` centered at the origin.
    /// Each face is a `k × k` grid.
    pub fn cube(side: f64, k: usize) -> PointCloud {
        let h = side / 2.0;
        let mut pts = Vec::new();
        let coord = |i: usize| -h + side * i as f64 / (k - 1) as f64;
        for i in 0..k {
            for j in 0..k {
                let (a, b) = (coord(i), coord(j));
                for s in [-h, h] {
                    pts.push(Point3::new(a, b, s));
                    if i > 0 && i < k - 1 {
                        pts.push(Point3::new(s, a, b));
                    }
                    if i > 0 && i < k - 1 && j > 0 && j < k - 1 {
                        pts.push(Point3::new(a, s, b));
                    }
                }
            }
        }
        pts.sort_by(|a, b| a.iter().zip(b.iter()).map(|(x, y)| x.total_cmp(y)).find(|o| o.is_ne()).unwrap_or(std::cmp::Ordering::Equal));
        pts.dedup();
        PointCloud::new(pts, Frame::ObjectLocal)
    }

    /// Fibonacci-sphere samples of radius `r`.
    pub fn sphere(r: f64, n: usize) -> PointCloud {
        let golden = std::f64::consts::PI * (3.0 - 5f64.sqrt());
        let pts = (0..n)
            .map(|i| {
                let z = 1.0 - 2.0 * (i as f64 + 0.5) / n as f64;
                let rr = (1.0 - z * z).sqrt();
                let t = golden * i as f64;
                Point3::new(r * rr * t.cos(), r * rr * t.sin(), r * z)
            })
            .collect();
        PointCloud::new(pts, Frame::ObjectLocal)
    }
}

#[cfg(test)]
mod tests {
    use super::testkit::*;
    use super::*;
    use crate::geom::Frame;

    const SIDE: f64 = 0.05;

    fn cube_body() -> PointCloud {
        cube(SIDE, 8)
    }

    fn resting_height(obj: &PointCloud, params: &SimParams) -> f64 {
        // bottom-face points share the weight; the stability cap on the
        // summed stiffness is at most the translational one, which keeps the
        // sink in the tens of microns, well inside the test tolerance
        let body = RigidBody::new(obj, params.mass).unwrap();
        let count = body.points.iter().filter(|p| p.z < -SIDE / 2.0 + 1e-9).count() as f64;
        let limit = STABILITY_FRACTION * 4.0 / (params.timestep * params.timestep);
        let total = (count * params.stiffness).min(limit * params.mass);
        SIDE / 2.0 + params.contact_radius - params.mass * params.gravity / total
    }

    #[test]
    fn kinetic_energy_examples() {
        let i = Matrix3::from_diagonal(&Vector3::new(0.1, 0.1, 0.1));
        let mut s = RigidState::at_rest(&Placement::new(Point3::zeros(), Rotation::identity(), 0));
        assert_eq!(kinetic_energy(&s, 1.0, &i).unwrap(), 0.0);
        s.linear_velocity = Vector3::new(1.0, 0.0, 0.0);
        assert!((kinetic_energy(&s, 2.0, &i).unwrap() - 1.0).abs() < 1e-15);
        s.linear_velocity = Vector3::new(1.0, 1.0, 0.0);
        s.angular_velocity = Vector3::new(0.0, 0.0, 2.0);
        assert!((kinetic_energy(&s, 1.0, &i).unwrap() - 1.2).abs() < 1e-12);
        let bad = Matrix3::from_diagonal(&Vector3::new(0.1, -0.1, 0.1));
        assert!(matches!(kinetic_energy(&s, 1.0, &bad), Err(PhysicsError::NonPositiveInertia)));
        let asym = Matrix3::new(0.1, 0.05, 0.0, 0.0, 0.1, 0.0, 0.0, 0.0, 0.1);
        assert!(kinetic_energy(&s, 1.0, &asym).is_err());
    }

    #[test]
    fn label_validity_examples() {
        let start = Placement::new(Point3::zeros(), Rotation::identity(), 0);
        let mut result = SettleResult {
            final_state: RigidState::at_rest(&start),
            energy_trace: vec![0.0],
            converged: true,
            steps: 1,
            termination: Termination::Converged,
        };
        assert!(label_validity(&start, &result, 0.01));

        result.final_state.position = Point3::new(0.01f64.sqrt() * 1.1, 0.0, 0.0);
        assert!(!label_validity(&start, &result, 0.01));

        result.final_state.position = Point3::new(0.02, 0.0, 0.0);
        result.final_state.orientation = Rotation::yaw(10f64.to_radians());
        let expected = 0.02f64.powi(2) + 10f64.to_radians().powi(2);
        assert!((expected - 0.0309).abs() < 1e-4);
        assert!((pose_distance_sq(&start, &result.final_state) - expected).abs() < 1e-12);
        assert!(!label_validity(&start, &result, 0.01));
        assert!(label_validity(&start, &result, 0.04));

        result.final_state = RigidState::at_rest(&start);
        result.converged = false;
        assert!(!label_validity(&start, &result, 0.01));
    }

    #[test]
    fn collinear_object_is_degenerate() {
        let line = PointCloud::new(
            (0..10).map(|i| Point3::new(i as f64 * 0.01, 0.0, 0.0)).collect(),
            Frame::ObjectLocal,
        );
        let env = plane(0.1, 0.01, 0.0);
        let start = Placement::new(Point3::new(0.0, 0.0, 0.1), Rotation::identity(), 0);
        let err = settle(&line, &start, &env, &SimParams::default()).unwrap_err();
        assert!(err.to_string().starts_with("degenerate inertia"));
        let two = PointCloud::new(vec![Point3::zeros(), Point3::x()], Frame::ObjectLocal);
        assert!(matches!(settle(&two, &start, &env, &SimParams::default()), Err(PhysicsError::DegenerateInertia)));
    }

    #[test]
    fn cube_at_rest_stays_put() {
        let params = SimParams::default();
        let obj = cube_body();
        let env = plane(0.15, 0.004, 0.0);
        let start = Placement::new(
            Point3::new(0.0, 0.0, SIDE / 2.0 + params.contact_radius),
            Rotation::identity(),
            0,
        );
        let r = settle(&obj, &start, &env, &params).unwrap();
        assert!(r.converged, "{:?}", r.termination);
        assert!((r.final_state.position - start.location).norm() < 1e-3);
        assert!(r.final_state.orientation.angle_to(&start.orientation) < 1f64.to_radians());
        assert!(label_validity(&start, &r, params.validity_delta));
        assert_eq!(r.energy_trace.len(), r.steps);
    }

    #[test]
    fn cube_dropped_lands_at_resting_height() {
        let params = SimParams::default();
        let obj = cube_body();
        let env = plane(0.15, 0.004, 0.0);
        let z0 = SIDE / 2.0 + params.contact_radius + 0.005;
        let start = Placement::new(Point3::new(0.01, -0.02, z0), Rotation::identity(), 0);
        let r = settle(&obj, &start, &env, &params).unwrap();
        assert!(r.converged);
        let rest = resting_height(&obj, &params);
        assert!((r.final_state.position.z - rest).abs() < 1e-3, "z {} vs {}", r.final_state.position.z, rest);
        let drift = (r.final_state.position.xy() - start.location.xy()).norm();
        assert!(drift < 2e-3, "drift {drift}");
    }

    #[test]
    fn frictionless_sphere_slides_off_incline() {
        let params = SimParams { friction: 0.0, ..SimParams::default() };
        let obj = sphere(0.03, 300);
        let tilt = Rotation::from_axis_angle(&Vector3::y(), 20f64.to_radians());
        let flat = plane(0.2, 0.004, 0.0);
        let env = PointCloud::new(flat.points.iter().map(|p| tilt.rotate(p)).collect(), Frame::World);
        let normal = tilt.rotate(&Vector3::z());
        let start = Placement::new(normal * (0.03 + params.contact_radius), Rotation::identity(), 0);
        let r = settle(&obj, &start, &env, &params).unwrap();
        assert!(!label_validity(&start, &r, params.validity_delta));
        assert!(pose_distance_sq(&start, &r.final_state) > params.validity_delta);
    }

    #[test]
    fn settle_is_deterministic() {
        let params = SimParams::default();
        let obj = cube_body();
        let env = plane(0.15, 0.004, 0.0);
        let start = Placement::new(Point3::new(0.0, 0.0, 0.05), Rotation::yaw(0.3), 0);
        let a = settle(&obj, &start, &env, &params).unwrap();
        let b = settle(&obj, &start, &env, &params).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn falling_past_environment_stops_early() {
        let params = SimParams::default();
        let obj = cube_body();
        let env = plane(0.05, 0.004, 0.0);
        let start = Placement::new(Point3::new(0.5, 0.0, 0.05), Rotation::identity(), 0);
        let r = settle(&obj, &start, &env, &params).unwrap();
        assert_eq!(r.termination, Termination::FellOff);
        assert!(!r.converged);
    }

    #[test]
    fn trajectory_dump_has_header_and_rows() {
        let params = SimParams { max_steps: 5, ..SimParams::default() };
        let settler = Settler::new(&cube_body(), &plane(0.1, 0.004, 0.0), &params).unwrap();
        let start = Placement::new(Point3::new(0.0, 0.0, 0.2), Rotation::identity(), 0);
        let (res, rows) = settler.run_traced(&start).unwrap();
        assert_eq!(rows.len(), res.steps);
        let csv = trajectory_csv(&rows);
        let mut lines = csv.lines();
        assert_eq!(lines.next(), Some("step,E_n,Tx,Ty,Tz,qw,qx,qy,qz"));
        assert_eq!(lines.count(), 5);
    }

    #[test]
    fn converged_pose_is_a_fixed_point() {
        let params = SimParams::default();
        let obj = cube_body();
        let env = plane(0.15, 0.004, 0.0);
        let tilt = Rotation::from_axis_angle(&Vector3::x(), 0.05).compose(&Rotation::yaw(0.4));
        let start = Placement::new(Point3::new(0.0, 0.01, 0.04), tilt, 0);
        let first = settle(&obj, &start, &env, &params).unwrap();
        assert!(first.converged);
        let again = Placement::new(first.final_state.position, first.final_state.orientation, 0);
        let second = settle(&obj, &again, &env, &params).unwrap();
        assert!(second.converged);
        assert!((second.final_state.position - again.location).norm() < 2e-3);
        assert!(second.final_state.orientation.angle_to(&again.orientation) < 2f64.to_radians());
    }

    proptest::proptest! {
        #[test]
        fn validity_is_monotone_in_delta(
            dx in -0.2f64..0.2, angle in 0.0f64..1.0, d in 1e-4f64..0.05, extra in 0.0f64..0.1,
        ) {
            let start = Placement::new(Point3::zeros(), Rotation::identity(), 0);
            let mut state = RigidState::at_rest(&start);
            state.position.x = dx;
            state.orientation = Rotation::from_axis_angle(&Vector3::y(), angle);
            let result = SettleResult {
                final_state: state,
                energy_trace: vec![0.0],
                converged: true,
                steps: 1,
                termination: Termination::Converged,
            };
            if label_validity(&start, &result, d) {
                proptest::prop_assert!(label_validity(&start, &result, d + extra));
            }
        }
    }
}
