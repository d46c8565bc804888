//! Parametric objects and placing environments, the preference rule table
//! and the default desk-scale corpus.

use crate::geom::{Frame, Placement, Point3, PointCloud};
use nalgebra::Vector3;
use serde::{Deserialize, Serialize};
use std::f64::consts::{FRAC_PI_2, PI, TAU};
use std::fmt;
use thiserror::Error;

pub mod dataset;

pub use dataset::*;

#[derive(Debug, Error)]
pub enum SceneError {
    #[error("degenerate dimensions: {0}")]
    Degenerate(String),
    #[error("no preference rule for {object} in {env}")]
    NoRule { object: String, env: String },
    #[error("preference rules: {0}")]
    Rules(String),
    #[error("dataset: {0}")]
    Dataset(String),
    #[error(transparent)]
    Io(#[from] crate::io::IoError),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Geom(#[from] crate::geom::GeomError),
    #[error(transparent)]
    Physics(#[from] crate::physics::PhysicsError),
    #[error(transparent)]
    Features(#[from] crate::features::FeatureError),
}

pub const MIN_OBJECT_POINTS: usize = 200;
pub const MIN_ENV_POINTS: usize = 500;
/// Radius of the hook bars, meters.
pub const BAR_RADIUS: f64 = 0.003;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ObjectClass {
    Plate,
    Bowl,
    Mug,
    Martini,
    Rod,
    Disc,
    HookItem,
    Fork,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EnvClass {
    Flat,
    RackSlots,
    PenHolder,
    HookBar,
    StemwareHolder,
}

fn snake<T: Serialize>(v: &T) -> String {
    serde_json::to_value(v)
        .ok()
        .and_then(|v| v.as_str().map(str::to_owned))
        .unwrap_or_default()
}

impl fmt::Display for ObjectClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&snake(self))
    }
}

impl fmt::Display for EnvClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&snake(self))
    }
}

/// Object shape with its dimensions in meters. The upright pose has the
/// object's natural "up" along local `+z`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "class", rename_all = "snake_case")]
pub enum ObjectShape {
    Plate { radius: f64, thickness: f64 },
    Disc { radius: f64, thickness: f64 },
    /// Hemispherical shell, opening up.
    Bowl { radius: f64 },
    /// Open cylinder with a bottom and a side handle on `+x`.
    Mug { radius: f64, height: f64 },
    /// Base disc, stem, conical cup.
    Martini { rim_radius: f64, height: f64 },
    Rod { radius: f64, length: f64 },
    /// Straight shaft along `+z` ending in a half-circle crook in the `xz` plane.
    HookItem { radius: f64, length: f64, crook_radius: f64 },
    /// Flat handle with four tines, lying in the `xy` plane.
    Fork { length: f64, width: f64 },
}

impl ObjectShape {
    pub fn class(&self) -> ObjectClass {
        match self {
            Self::Plate { .. } => ObjectClass::Plate,
            Self::Disc { .. } => ObjectClass::Disc,
            Self::Bowl { .. } => ObjectClass::Bowl,
            Self::Mug { .. } => ObjectClass::Mug,
            Self::Martini { .. } => ObjectClass::Martini,
            Self::Rod { .. } => ObjectClass::Rod,
            Self::HookItem { .. } => ObjectClass::HookItem,
            Self::Fork { .. } => ObjectClass::Fork,
        }
    }

    fn dims(&self) -> Vec<f64> {
        match *self {
            Self::Plate { radius, thickness } | Self::Disc { radius, thickness } => vec![radius, thickness],
            Self::Bowl { radius } => vec![radius],
            Self::Mug { radius, height } => vec![radius, height],
            Self::Martini { rim_radius, height } => vec![rim_radius, height],
            Self::Rod { radius, length } => vec![radius, length],
            Self::HookItem { radius, length, crook_radius } => vec![radius, length, crook_radius],
            Self::Fork { length, width } => vec![length, width],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObjectSpec {
    pub name: String,
    pub shape: ObjectShape,
    /// Surface sampling density, points per m².
    pub density: f64,
}

/// Environment geometry, meters. Support surfaces sit at `z = 0`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "class", rename_all = "snake_case")]
pub enum EnvShape {
    Flat {
        size: f64,
    },
    /// Base plate with `slots + 1` rows of vertical tines across `x`, each row
    /// capped by a rail along `y`.
    RackSlots {
        slots: usize,
        pitch: f64,
        tine_height: f64,
        tine_pitch: f64,
        length: f64,
        margin: f64,
    },
    /// Open-top cylinder with a floor.
    PenHolder {
        inner_radius: f64,
        wall: f64,
        height: f64,
    },
    /// Horizontal bars along `y` on end posts.
    HookBar {
        bars: usize,
        pitch: f64,
        length: f64,
        height: f64,
    },
    /// Pairs of horizontal rails along `y`; a stem hangs in the gap of a pair.
    StemwareHolder {
        slots: usize,
        gap: f64,
        pitch: f64,
        length: f64,
        height: f64,
    },
}

impl EnvShape {
    pub fn class(&self) -> EnvClass {
        match self {
            Self::Flat { .. } => EnvClass::Flat,
            Self::RackSlots { .. } => EnvClass::RackSlots,
            Self::PenHolder { .. } => EnvClass::PenHolder,
            Self::HookBar { .. } => EnvClass::HookBar,
            Self::StemwareHolder { .. } => EnvClass::StemwareHolder,
        }
    }

    fn dims(&self) -> Vec<f64> {
        match *self {
            Self::Flat { size } => vec![size],
            Self::RackSlots { slots, pitch, tine_height, tine_pitch, length, .. } => {
                vec![slots as f64, pitch, tine_height, tine_pitch, length]
            }
            Self::PenHolder { inner_radius, wall, height } => vec![inner_radius, wall, height],
            Self::HookBar { bars, pitch, length, height } => vec![bars as f64, pitch, length, height],
            Self::StemwareHolder { slots, gap, pitch, length, height } => {
                vec![slots as f64, gap, pitch, length, height]
            }
        }
    }

    /// `x` coordinates of tine rows, bars or rail-pair centers.
    fn rows(&self) -> Vec<f64> {
        let centered = |n: usize, pitch: f64| -> Vec<f64> {
            (0..n).map(|i| (i as f64 - (n - 1) as f64 / 2.0) * pitch).collect()
        };
        match *self {
            Self::RackSlots { slots, pitch, .. } => centered(slots + 1, pitch),
            Self::HookBar { bars, pitch, .. } => centered(bars, pitch),
            Self::StemwareHolder { slots, pitch, .. } => centered(slots, pitch),
            _ => Vec::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnvSpec {
    pub name: String,
    pub shape: EnvShape,
    /// Surface sampling density, points per m².
    pub density: f64,
}

fn spacing(density: f64) -> Result<f64, SceneError> {
    if !(density > 0.0) || !density.is_finite() {
        return Err(SceneError::Degenerate(format!("density {density}")));
    }
    Ok(1.0 / density.sqrt())
}

fn check_dims(dims: &[f64]) -> Result<(), SceneError> {
    if let Some(d) = dims.iter().find(|d| !(**d > 0.0) || !d.is_finite()) {
        return Err(SceneError::Degenerate(format!("dimension {d}")));
    }
    Ok(())
}

/// Ring of `m` points of radius `r` at height `z`, starting at angle `phase`.
fn ring(out: &mut Vec<Point3>, r: f64, z: f64, m: usize, phase: f64) {
    for j in 0..m {
        let a = phase + TAU * j as f64 / m as f64;
        out.push(Point3::new(r * a.cos(), r * a.sin(), z));
    }
}

fn ring_count(r: f64, s: f64) -> usize {
    ((TAU * r / s).round() as usize).max(3)
}

/// Filled disc of radius `r` at height `z` as concentric rings.
fn disc(out: &mut Vec<Point3>, r: f64, z: f64, s: f64) {
    let k = (r / s).ceil().max(1.0) as usize;
    out.push(Point3::new(0.0, 0.0, z));
    for i in 1..=k {
        let ri = r * i as f64 / k as f64;
        ring(out, ri, z, ring_count(ri, s), 0.0);
    }
}

/// Cylinder side between `z0` and `z1`. Ring size is a multiple of 4 with a
/// half-step phase so that `±x` and `±y` face between two points.
fn tube_side(out: &mut Vec<Point3>, r: f64, z0: f64, z1: f64, s: f64) {
    let m = 4 * ((TAU * r / (4.0 * s)).ceil() as usize).max(1);
    let k = ((z1 - z0) / s).ceil().max(1.0) as usize;
    for i in 0..=k {
        ring(out, r, z0 + (z1 - z0) * i as f64 / k as f64, m, PI / m as f64);
    }
}

/// Tube of radius `r` around a circular arc of radius `big` in the `xz`
/// plane centered at `c`, for arc angles `a0..a1` measured from `+x` toward `+z`.
fn torus_arc(out: &mut Vec<Point3>, c: Point3, big: f64, r: f64, a0: f64, a1: f64, s: f64) {
    let m = 4 * ((TAU * r / (4.0 * s)).ceil() as usize).max(1);
    let k = ((a1 - a0).abs() * big / s).ceil().max(1.0) as usize;
    for i in 0..=k {
        let a = a0 + (a1 - a0) * i as f64 / k as f64;
        let radial = Vector3::new(a.cos(), 0.0, a.sin());
        let center = c + radial * big;
        for j in 0..m {
            let b = PI / m as f64 + TAU * j as f64 / m as f64;
            out.push(center + (radial * b.cos() + Vector3::y() * b.sin()) * r);
        }
    }
}

/// Rectangle `[x0, x1] × [y0, y1]` at height `z`.
fn rect(out: &mut Vec<Point3>, x0: f64, x1: f64, y0: f64, y1: f64, z: f64, s: f64) {
    let nx = ((x1 - x0) / s).ceil().max(1.0) as usize;
    let ny = ((y1 - y0) / s).ceil().max(1.0) as usize;
    for i in 0..=nx {
        for j in 0..=ny {
            out.push(Point3::new(
                x0 + (x1 - x0) * i as f64 / nx as f64,
                y0 + (y1 - y0) * j as f64 / ny as f64,
                z,
            ));
        }
    }
}

/// Vertical line of points from `z0` to `z1` at `(x, y)`.
fn post(out: &mut Vec<Point3>, x: f64, y: f64, z0: f64, z1: f64, s: f64) {
    let k = ((z1 - z0) / s).ceil().max(1.0) as usize;
    for i in 0..=k {
        out.push(Point3::new(x, y, z0 + (z1 - z0) * i as f64 / k as f64));
    }
}

/// Horizontal line along `y` at `(x, z)`.
fn rail(out: &mut Vec<Point3>, x: f64, z: f64, length: f64, s: f64) {
    let k = (length / s).ceil().max(1.0) as usize;
    for i in 0..=k {
        out.push(Point3::new(x, -length / 2.0 + length * i as f64 / k as f64, z));
    }
}

/// Raw (uncentered) surface samples and named anchor points of a shape.
fn object_raw(shape: &ObjectShape, s: f64) -> (Vec<Point3>, Vec<(&'static str, Point3)>) {
    let mut p = Vec::new();
    let mut anchors = vec![("origin", Point3::zeros())];
    match *shape {
        ObjectShape::Plate { radius, thickness } => {
            disc(&mut p, radius, thickness / 2.0, s);
            disc(&mut p, radius, -thickness / 2.0, s);
        }
        ObjectShape::Disc { radius, thickness } => {
            disc(&mut p, radius, thickness / 2.0, s);
            disc(&mut p, radius, -thickness / 2.0, s);
            if thickness > s {
                tube_side(&mut p, radius, -thickness / 2.0, thickness / 2.0, s);
            }
        }
        ObjectShape::Bowl { radius } => {
            // polar angle from the rim (z = 0) down to the pole (z = -radius)
            let k = (FRAC_PI_2 * radius / s).ceil() as usize;
            for i in 0..=k {
                let t = FRAC_PI_2 * i as f64 / k as f64;
                let r = radius * t.cos();
                let z = -radius * t.sin();
                if r < 1e-9 {
                    p.push(Point3::new(0.0, 0.0, z));
                } else {
                    ring(&mut p, r, z, ring_count(r, s), 0.0);
                }
            }
            anchors.push(("rim_center", Point3::zeros()));
        }
        ObjectShape::Mug { radius, height } => {
            disc(&mut p, radius, 0.0, s);
            tube_side(&mut p, radius, 0.0, height, s);
            let big = height / 3.0;
            torus_arc(&mut p, Point3::new(radius, 0.0, height / 2.0), big, 0.004, -FRAC_PI_2, FRAC_PI_2, s);
        }
        ObjectShape::Martini { rim_radius, height } => {
            let stem_top = 0.45 * height;
            disc(&mut p, 0.7 * rim_radius, 0.0, s);
            tube_side(&mut p, 0.004, 0.0, stem_top, s);
            let slant = (rim_radius.powi(2) + (height - stem_top).powi(2)).sqrt();
            let k = (slant / s).ceil() as usize;
            for i in 1..=k {
                let f = i as f64 / k as f64;
                let r = rim_radius * f;
                ring(&mut p, r, stem_top + (height - stem_top) * f, ring_count(r, s), 0.0);
            }
            anchors.push(("stem_mid", Point3::new(0.0, 0.0, stem_top / 2.0)));
        }
        ObjectShape::Rod { radius, length } => {
            tube_side(&mut p, radius, -length / 2.0, length / 2.0, s);
            for z in [-length / 2.0, length / 2.0] {
                disc(&mut p, radius * 0.6, z, s);
            }
            anchors.push(("bottom", Point3::new(0.0, 0.0, -length / 2.0)));
        }
        ObjectShape::HookItem { radius, length, crook_radius } => {
            tube_side(&mut p, radius, 0.0, length, s);
            // three-quarter loop above the shaft, apex right over it, open on
            // the -x side below the loop center
            let c = Point3::new(0.0, 0.0, length + crook_radius);
            let step = s / crook_radius;
            torus_arc(&mut p, c, crook_radius, radius, -FRAC_PI_2 + step, PI, s);
            anchors.push(("shaft_bottom", Point3::zeros()));
            anchors.push(("crook_top", Point3::new(0.0, 0.0, length + 2.0 * crook_radius)));
        }
        ObjectShape::Fork { length, width } => {
            let handle = 0.7 * length;
            for z in [-0.0015, 0.0015] {
                rect(&mut p, 0.0, handle, -width / 2.0, width / 2.0, z, s);
                for t in 0..4 {
                    let y = -width / 2.0 + width * (t as f64 + 0.5) / 4.0;
                    let k = ((length - handle) / s).ceil() as usize;
                    for i in 1..=k {
                        p.push(Point3::new(handle + (length - handle) * i as f64 / k as f64, y, z));
                    }
                }
            }
        }
    }
    (p, anchors)
}

/// Generated object with its anchor points in the same centered local frame.
#[derive(Debug, Clone)]
pub struct ObjectModel {
    pub spec: ObjectSpec,
    pub cloud: PointCloud,
    anchors: Vec<(&'static str, Point3)>,
}

impl ObjectModel {
    pub fn anchor(&self, name: &str) -> Option<Point3> {
        self.anchors.iter().find(|(n, _)| *n == name).map(|(_, p)| *p)
    }

    pub fn class(&self) -> ObjectClass {
        self.spec.shape.class()
    }
}

/// Surface samples of the shape, centered at their centroid, upright along `+z`.
///
/// Sampling is structured (rings and grids), so the result does not depend on
/// `seed`; the argument keeps the generator signature uniform with
/// [`generate_env`].
pub fn generate_object(spec: &ObjectSpec, seed: u64) -> Result<PointCloud, SceneError> {
    Ok(build_object(spec, seed)?.cloud)
}

pub fn build_object(spec: &ObjectSpec, _seed: u64) -> Result<ObjectModel, SceneError> {
    check_dims(&spec.shape.dims())?;
    let s = spacing(spec.density)?;
    let (raw, anchors) = object_raw(&spec.shape, s);
    let mut cloud = PointCloud::new(raw, Frame::ObjectLocal);
    let c = cloud.centroid().ok_or_else(|| SceneError::Degenerate("empty object".into()))?;
    for p in &mut cloud.points {
        *p -= c;
    }
    if cloud.len() < MIN_OBJECT_POINTS {
        return Err(SceneError::Degenerate(format!(
            "{} sampled to {} points, need at least {MIN_OBJECT_POINTS}; raise the density",
            spec.name,
            cloud.len()
        )));
    }
    let anchors = anchors.into_iter().map(|(n, p)| (n, p - c)).collect();
    Ok(ObjectModel { spec: spec.clone(), cloud, anchors })
}

/// World-frame environment cloud, support surface at `z = 0`.
///
/// `seed` shifts the in-plane sampling phase of the flat surface; other
/// environments are fully structured.
pub fn generate_env(spec: &EnvSpec, seed: u64) -> Result<PointCloud, SceneError> {
    check_dims(&spec.shape.dims())?;
    let s = spacing(spec.density)?;
    let mut p = Vec::new();
    let rows = spec.shape.rows();
    match spec.shape {
        EnvShape::Flat { size } => {
            let phase = (seed % 1000) as f64 / 1000.0 * s;
            let h = size / 2.0;
            let n = (size / s).floor() as usize;
            for i in 0..n {
                for j in 0..n {
                    p.push(Point3::new(
                        -h + phase + i as f64 * s,
                        -h + phase * 0.5 + j as f64 * s,
                        0.0,
                    ));
                }
            }
        }
        EnvShape::RackSlots { slots, pitch, tine_height, tine_pitch, length, margin } => {
            let w = slots as f64 * pitch / 2.0 + margin;
            rect(&mut p, -w, w, -length / 2.0, length / 2.0, 0.0, s);
            let n_tines = ((length / tine_pitch).floor() as usize).max(1);
            for x in &rows {
                rail(&mut p, *x, tine_height, length, s);
                for j in 0..n_tines {
                    let y = -length / 2.0 + tine_pitch * (j as f64 + 0.5) + (length - n_tines as f64 * tine_pitch) / 2.0;
                    let k = (tine_height / s).ceil() as usize;
                    for i in 1..=k {
                        p.push(Point3::new(*x, y, tine_height * i as f64 / k as f64));
                    }
                }
            }
        }
        EnvShape::PenHolder { inner_radius, wall, height } => {
            let outer = inner_radius + wall;
            disc(&mut p, outer, 0.0, s);
            let k = (height / s).ceil() as usize;
            for i in 1..=k {
                let z = height * i as f64 / k as f64;
                ring(&mut p, inner_radius, z, ring_count(inner_radius, s), 0.0);
                ring(&mut p, outer, z, ring_count(outer, s), 0.0);
            }
            let n = (wall / s).ceil() as usize;
            for i in 1..n {
                let r = inner_radius + wall * i as f64 / n as f64;
                ring(&mut p, r, height, ring_count(r, s), 0.0);
            }
        }
        EnvShape::HookBar { length, height, .. } => {
            for x in &rows {
                for j in 0..6 {
                    let a = TAU * j as f64 / 6.0;
                    rail(&mut p, x + BAR_RADIUS * a.cos(), height + BAR_RADIUS * a.sin(), length, s);
                }
                for y in [-length / 2.0, length / 2.0] {
                    post(&mut p, *x, y, 0.0, height - s, s);
                }
            }
        }
        EnvShape::StemwareHolder { gap, length, height, .. } => {
            for c in &rows {
                for x in [c - gap / 2.0, c + gap / 2.0] {
                    rail(&mut p, x, height, length, s);
                    for y in [-length / 2.0, length / 2.0] {
                        post(&mut p, x, y, 0.0, height - s, s);
                    }
                }
            }
        }
    }
    if p.len() < MIN_ENV_POINTS {
        return Err(SceneError::Degenerate(format!(
            "{} sampled to {} points, need at least {MIN_ENV_POINTS}; raise the density",
            spec.name,
            p.len()
        )));
    }
    Ok(PointCloud::new(p, Frame::World))
}

/// Location constraints a preference rule can impose on an object anchor.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LocationKind {
    /// Between two adjacent tine rows of a rack, over the base.
    InSlot,
    /// Inside the bore of a pen holder, below its rim.
    InBore,
    /// Above a bar and within one crook radius of it horizontally.
    OverBar,
    /// Between the two rails of a stemware slot, below the rails.
    BetweenRails,
}

/// How a local object axis must be oriented in the world.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AxisMode {
    /// Within the cone around `target`.
    Aligned,
    /// Within the cone around `target` or `-target`.
    Parallel,
    /// Within the cone of being perpendicular to `target`.
    Perpendicular,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AxisConstraint {
    pub local: [f64; 3],
    pub target: [f64; 3],
    pub mode: AxisMode,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LocationConstraint {
    pub kind: LocationKind,
    pub anchor: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PreferenceRule {
    pub object: ObjectClass,
    pub env: EnvClass,
    pub axes: Vec<AxisConstraint>,
    #[serde(default)]
    pub location: Option<LocationConstraint>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RuleTable {
    pub cone_deg: f64,
    pub rules: Vec<PreferenceRule>,
}

pub const DEFAULT_RULES_JSON: &str = include_str!("../data/preference_rules.json");

impl RuleTable {
    pub fn from_json(text: &str) -> Result<Self, SceneError> {
        let t: RuleTable = serde_json::from_str(text)?;
        if !(t.cone_deg > 0.0 && t.cone_deg < 90.0) {
            return Err(SceneError::Rules(format!("cone_deg {} outside (0, 90)", t.cone_deg)));
        }
        for r in &t.rules {
            for a in &r.axes {
                if Vector3::from(a.local).norm() < 1e-9 || Vector3::from(a.target).norm() < 1e-9 {
                    return Err(SceneError::Rules(format!("zero axis in rule {} x {}", r.object, r.env)));
                }
            }
        }
        Ok(t)
    }

    pub fn default_table() -> Self {
        Self::from_json(DEFAULT_RULES_JSON).expect("bundled rule table parses")
    }

    pub fn rule(&self, object: ObjectClass, env: EnvClass) -> Option<&PreferenceRule> {
        self.rules.iter().find(|r| r.object == object && r.env == env)
    }
}

fn axis_ok(a: &AxisConstraint, p: &Placement, cone: f64) -> bool {
    let world = p.orientation.rotate(&Vector3::from(a.local).normalize());
    let t = Vector3::from(a.target).normalize();
    let c = world.dot(&t).clamp(-1.0, 1.0);
    match a.mode {
        AxisMode::Aligned => c >= cone.cos(),
        AxisMode::Parallel => c.abs() >= cone.cos(),
        AxisMode::Perpendicular => c.abs() <= cone.sin(),
    }
}

/// Whether a world point satisfies a location constraint of this environment.
pub fn location_ok(env: &EnvShape, kind: LocationKind, q: &Point3, object: &ObjectShape) -> bool {
    let rows = env.rows();
    match (kind, env) {
        (LocationKind::InSlot, EnvShape::RackSlots { tine_height, length, .. }) => {
            let inside = rows.windows(2).any(|w| q.x > w[0] && q.x < w[1]);
            inside && q.y.abs() <= length / 2.0 && q.z > 0.0 && q.z < *tine_height + 0.1
        }
        (LocationKind::InBore, EnvShape::PenHolder { inner_radius, height, .. }) => {
            q.xy().norm() < *inner_radius && q.z > -0.01 && q.z < *height
        }
        (LocationKind::OverBar, EnvShape::HookBar { length, height, .. }) => {
            let reach = match object {
                ObjectShape::HookItem { crook_radius, .. } => *crook_radius,
                _ => 0.0,
            };
            rows.iter().any(|x| (q.x - x).abs() < reach) && q.y.abs() <= length / 2.0 && q.z > *height
        }
        (LocationKind::BetweenRails, EnvShape::StemwareHolder { gap, length, height, .. }) => {
            rows.iter().any(|c| (q.x - c).abs() < gap / 2.0) && q.y.abs() <= length / 2.0 && q.z < *height
        }
        _ => false,
    }
}

/// One object in one environment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlacingTask {
    pub task_id: usize,
    pub object_index: usize,
    pub env_index: usize,
    pub object: ObjectSpec,
    pub env: EnvSpec,
}

impl PlacingTask {
    pub fn label(&self) -> String {
        format!("{}/{}", self.env.name, self.object.name)
    }
}

/// `stable` and the task's preference rule both hold at placement `p`.
pub fn preference_label(
    task: &PlacingTask,
    object: &ObjectModel,
    rules: &RuleTable,
    p: &Placement,
    stable: bool,
) -> Result<bool, SceneError> {
    let (oc, ec) = (task.object.shape.class(), task.env.shape.class());
    let rule = rules.rule(oc, ec).ok_or_else(|| SceneError::NoRule {
        object: oc.to_string(),
        env: ec.to_string(),
    })?;
    if !stable {
        return Ok(false);
    }
    let cone = rules.cone_deg.to_radians();
    if !rule.axes.iter().all(|a| axis_ok(a, p, cone)) {
        return Ok(false);
    }
    match &rule.location {
        None => Ok(true),
        Some(loc) => {
            let local = object.anchor(&loc.anchor).ok_or_else(|| {
                SceneError::Rules(format!("object {} has no anchor {}", oc, loc.anchor))
            })?;
            let q = p.location + p.orientation.rotate(&local);
            Ok(location_ok(&task.env.shape, loc.kind, &q, &task.object.shape))
        }
    }
}

/// Objects, environments and which pairs form tasks.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Corpus {
    pub objects: Vec<ObjectSpec>,
    pub environments: Vec<EnvSpec>,
    /// `(env name, object name)` pairs that form tasks.
    pub compatible: Vec<(String, String)>,
}

pub const OBJECT_DENSITY: f64 = 1.0 / (0.006 * 0.006);
pub const ENV_DENSITY: f64 = 1.0 / (0.004 * 0.004);

impl Corpus {
    /// Five environments and six objects, 14 compatible pairs.
    pub fn desk_default() -> Self {
        let o = |name: &str, shape| ObjectSpec { name: name.into(), shape, density: OBJECT_DENSITY };
        let e = |name: &str, shape| EnvSpec { name: name.into(), shape, density: ENV_DENSITY };
        let objects = vec![
            o("plate", ObjectShape::Plate { radius: 0.06, thickness: 0.005 }),
            o("mug", ObjectShape::Mug { radius: 0.035, height: 0.08 }),
            o("martini", ObjectShape::Martini { rim_radius: 0.045, height: 0.11 }),
            o("bowl", ObjectShape::Bowl { radius: 0.05 }),
            o("rod", ObjectShape::Rod { radius: 0.005, length: 0.15 }),
            o("hook_item", ObjectShape::HookItem { radius: 0.005, length: 0.12, crook_radius: 0.03 }),
        ];
        let environments = vec![
            e("flat", EnvShape::Flat { size: 0.4 }),
            e(
                "rack_slots",
                EnvShape::RackSlots {
                    slots: 4,
                    pitch: 0.024,
                    tine_height: 0.1,
                    tine_pitch: 0.016,
                    length: 0.2,
                    margin: 0.01,
                },
            ),
            e("pen_holder", EnvShape::PenHolder { inner_radius: 0.018, wall: 0.003, height: 0.12 }),
            e("hook_bar", EnvShape::HookBar { bars: 3, pitch: 0.05, length: 0.2, height: 0.12 }),
            e(
                "stemware_holder",
                EnvShape::StemwareHolder { slots: 3, gap: 0.03, pitch: 0.05, length: 0.2, height: 0.12 },
            ),
        ];
        let pairs: &[(&str, &[&str])] = &[
            ("flat", &["plate", "mug", "martini", "bowl", "rod", "hook_item"]),
            ("rack_slots", &["plate", "mug", "martini", "bowl"]),
            ("pen_holder", &["rod"]),
            ("hook_bar", &["hook_item"]),
            ("stemware_holder", &["martini"]),
        ];
        let compatible = pairs
            .iter()
            .flat_map(|(e, os)| os.iter().map(move |o| (e.to_string(), o.to_string())))
            .collect();
        Self { objects, environments, compatible }
    }

    /// Tasks ordered by `task_id = M·env_index + object_index`.
    pub fn tasks(&self) -> Result<Vec<PlacingTask>, SceneError> {
        let m = self.objects.len();
        for (e, o) in &self.compatible {
            if !self.environments.iter().any(|x| &x.name == e) || !self.objects.iter().any(|x| &x.name == o) {
                return Err(SceneError::Dataset(format!("compatible pair {e}/{o} names an unknown spec")));
            }
        }
        let mut out = Vec::new();
        for (ei, env) in self.environments.iter().enumerate() {
            for (oi, obj) in self.objects.iter().enumerate() {
                if self.compatible.iter().any(|(e, o)| e == &env.name && o == &obj.name) {
                    out.push(PlacingTask {
                        task_id: m * ei + oi,
                        object_index: oi,
                        env_index: ei,
                        object: obj.clone(),
                        env: env.clone(),
                    });
                }
            }
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geom::{canonical_orientations, Rotation};

    fn spec(shape: ObjectShape) -> ObjectSpec {
        ObjectSpec { name: "t".into(), shape, density: OBJECT_DENSITY }
    }

    fn env_spec(shape: EnvShape) -> EnvSpec {
        EnvSpec { name: "e".into(), shape, density: ENV_DENSITY }
    }

    #[test]
    fn plate_points_within_radius() {
        let s = 1.0 / OBJECT_DENSITY.sqrt();
        let cloud = generate_object(&spec(ObjectShape::Plate { radius: 0.1, thickness: 0.005 }), 0).unwrap();
        assert!(cloud.len() >= MIN_OBJECT_POINTS);
        assert!(cloud.points.iter().all(|p| p.xy().norm() <= 0.1 + s));
    }

    #[test]
    fn rod_extent() {
        let s = 1.0 / OBJECT_DENSITY.sqrt();
        let cloud = generate_object(&spec(ObjectShape::Rod { radius: 0.005, length: 0.15 }), 0).unwrap();
        let e = cloud.aabb().unwrap().extent();
        for (got, want) in e.iter().zip([0.01, 0.01, 0.15]) {
            assert!((got - want).abs() <= s, "{got} vs {want}");
        }
    }

    #[test]
    fn bowl_centroid_sits_half_radius_below_rim() {
        let r = 0.08;
        let model = build_object(&spec(ObjectShape::Bowl { radius: r }), 0).unwrap();
        let rim = model.anchor("rim_center").unwrap();
        // the cloud is centered, so the centroid is the origin
        let offset = rim.z;
        assert!((offset - r / 2.0).abs() < 0.002, "offset {offset}");
    }

    #[test]
    fn objects_are_centered_and_dense_enough() {
        for o in Corpus::desk_default().objects {
            let c = generate_object(&o, 1).unwrap();
            assert!(c.len() >= MIN_OBJECT_POINTS, "{}: {}", o.name, c.len());
            assert!(c.centroid().unwrap().norm() < 1e-12);
        }
        for e in Corpus::desk_default().environments {
            let c = generate_env(&e, 1).unwrap();
            assert!(c.len() >= MIN_ENV_POINTS, "{}: {}", e.name, c.len());
            assert!(c.aabb().unwrap().min.z.abs() < 1e-12);
        }
    }

    #[test]
    fn degenerate_dimensions_rejected() {
        assert!(matches!(
            generate_object(&spec(ObjectShape::Rod { radius: 0.0, length: 0.1 }), 0),
            Err(SceneError::Degenerate(_))
        ));
        assert!(generate_env(&env_spec(EnvShape::Flat { size: -1.0 }), 0).is_err());
        let sparse = ObjectSpec { density: 100.0, ..spec(ObjectShape::Rod { radius: 0.005, length: 0.1 }) };
        assert!(generate_object(&sparse, 0).is_err());
    }

    #[test]
    fn flat_env_is_planar() {
        let c = generate_env(&env_spec(EnvShape::Flat { size: 0.5 }), 3).unwrap();
        assert!(c.points.iter().all(|p| p.z.abs() < 1e-3));
        let a = c.aabb().unwrap();
        assert!(a.extent().x <= 0.5 + 1e-9 && a.extent().x > 0.49);
    }

    #[test]
    fn rack_histogram_shows_slot_gaps() {
        let c = generate_env(
            &env_spec(EnvShape::RackSlots {
                slots: 4,
                pitch: 0.04,
                tine_height: 0.08,
                tine_pitch: 0.016,
                length: 0.2,
                margin: 0.01,
            }),
            0,
        )
        .unwrap();
        // 1 mm bins over x; count runs of empty bins between occupied ones
        let xs: Vec<f64> = c.points.iter().filter(|p| p.z > 0.01).map(|p| p.x).collect();
        let lo = xs.iter().cloned().fold(f64::INFINITY, f64::min);
        let hi = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let n = ((hi - lo) / 0.001).ceil() as usize + 1;
        let mut bins = vec![0usize; n];
        for x in &xs {
            bins[((x - lo) / 0.001) as usize] += 1;
        }
        let mut gaps = 0;
        for w in bins.windows(2) {
            if w[0] > 0 && w[1] == 0 {
                gaps += 1;
            }
        }
        assert_eq!(gaps, 4);
    }

    #[test]
    fn pen_holder_bore_is_clear_above_floor() {
        let c = generate_env(&env_spec(EnvShape::PenHolder { inner_radius: 0.012, wall: 0.003, height: 0.1 }), 0)
            .unwrap();
        let intruders = c
            .points
            .iter()
            .filter(|p| p.z > 1e-9 && p.z < 0.1 && p.xy().norm() < 0.011)
            .count();
        assert_eq!(intruders, 0);
    }

    #[test]
    fn default_corpus_has_thirteen_tasks() {
        let corpus = Corpus::desk_default();
        let tasks = corpus.tasks().unwrap();
        assert_eq!(tasks.len(), 13);
        let m = corpus.objects.len();
        for t in &tasks {
            assert_eq!(t.task_id, m * t.env_index + t.object_index);
        }
        let mut ids: Vec<_> = tasks.iter().map(|t| t.task_id).collect();
        ids.dedup();
        assert_eq!(ids.len(), 13);
        assert!(!tasks.iter().any(|t| t.env.name == "pen_holder" && t.object.name == "plate"));
    }

    #[test]
    fn every_default_task_has_a_rule() {
        let rules = RuleTable::default_table();
        for t in Corpus::desk_default().tasks().unwrap() {
            assert!(rules.rule(t.object.shape.class(), t.env.shape.class()).is_some(), "{}", t.label());
        }
    }

    fn task(env: &str, obj: &str) -> (PlacingTask, ObjectModel) {
        let corpus = Corpus::desk_default();
        let t = corpus
            .tasks()
            .unwrap()
            .into_iter()
            .find(|t| t.env.name == env && t.object.name == obj)
            .unwrap();
        let m = build_object(&t.object, 0).unwrap();
        (t, m)
    }

    #[test]
    fn unstable_is_never_preferred() {
        let rules = RuleTable::default_table();
        let (t, m) = task("flat", "plate");
        let p = Placement::new(Point3::new(0.0, 0.0, 0.01), Rotation::identity(), 0);
        assert!(preference_label(&t, &m, &rules, &p, true).unwrap());
        assert!(!preference_label(&t, &m, &rules, &p, false).unwrap());
    }

    #[test]
    fn plate_in_rack_slot_is_preferred_but_flat_is_not() {
        let rules = RuleTable::default_table();
        let (t, m) = task("rack_slots", "plate");
        let up_x = canonical_orientations()[6];
        let in_slot = Placement::new(Point3::new(0.012, 0.0, 0.066), up_x, 0);
        assert!(preference_label(&t, &m, &rules, &in_slot, true).unwrap());
        let lying = Placement::new(Point3::new(0.0, 0.0, 0.11), Rotation::identity(), 0);
        assert!(!preference_label(&t, &m, &rules, &lying, true).unwrap());
        // vertical but across the tines rather than along the slot
        let across = Placement::new(Point3::new(0.012, 0.0, 0.066), canonical_orientations()[12], 0);
        assert!(!preference_label(&t, &m, &rules, &across, true).unwrap());
    }

    #[test]
    fn unknown_pair_has_no_rule() {
        let rules = RuleTable::default_table();
        let corpus = Corpus::desk_default();
        let t = PlacingTask {
            task_id: 0,
            object_index: 0,
            env_index: 2,
            object: corpus.objects[0].clone(),
            env: corpus.environments[2].clone(),
        };
        let m = build_object(&t.object, 0).unwrap();
        let p = Placement::new(Point3::zeros(), Rotation::identity(), 0);
        let err = preference_label(&t, &m, &rules, &p, true).unwrap_err();
        assert!(err.to_string().starts_with("no preference rule"));
    }

    #[test]
    fn rule_table_round_trips() {
        let t = RuleTable::default_table();
        let again = RuleTable::from_json(&serde_json::to_string(&t).unwrap()).unwrap();
        assert_eq!(t, again);
        assert!(RuleTable::from_json(r#"{"cone_deg": 95, "rules": []}"#).is_err());
    }
}
