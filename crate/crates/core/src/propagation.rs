//! Deterministic multipath tracer based on the image method.
//!
//! Walls are vertical two-sided reflectors extruded from the floor to their
//! height; the floor is a horizontal reflector bounded by the room
//! footprint. Walls are opaque: any path segment crossing a wall is dropped.

use crate::antenna::{upa_gain, UpaConfig};
use crate::geometry::{polygon_contains, Point2, Vec3};
use crate::scene::{validate_scene, GridSpec, Material, Scene, SceneError};
use num_complex::Complex64;
use rayon::prelude::*;
use std::f64::consts::PI;
use std::sync::Arc;
use thiserror::Error;

pub const SPEED_OF_LIGHT: f64 = 299_792_458.0;
pub const VACUUM_PERMITTIVITY: f64 = 8.854_187_812_8e-12;
/// Fixed dBm range mapped onto `[0, 1]`.
pub const DEFAULT_NORM_RANGE: (f64, f64) = (-150.0, 0.0);

const PLANE_EPS: f64 = 1e-12;
const EXTENT_EPS: f64 = 1e-9;

#[derive(Debug, Error)]
pub enum PropagationError {
    #[error(transparent)]
    Scene(#[from] SceneError),
    #[error(transparent)]
    Antenna(#[from] crate::antenna::AntennaError),
    #[error("frequency must be positive, got {0}")]
    BadFrequency(f64),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum SurfaceId {
    Wall(usize),
    Floor,
}

#[derive(Debug, Clone)]
pub struct Bounce {
    pub surface: SurfaceId,
    pub material: Arc<Material>,
    /// Angle between the incoming ray and the surface normal.
    pub incidence: f64,
}

#[derive(Debug, Clone)]
pub struct Path {
    /// TX, reflection points in order, RX.
    pub vertices: Vec<Vec3>,
    pub bounces: Vec<Bounce>,
    pub total_length: f64,
}

impl Path {
    pub fn surfaces(&self) -> Vec<SurfaceId> {
        self.bounces.iter().map(|b| b.surface).collect()
    }

    /// Largest deviation between incidence and reflection angles over all
    /// bounces, in radians. Also folds in the out-of-plane component so a
    /// reflection that leaves the plane of incidence is not accepted.
    pub fn specular_error(&self, scene: &Scene) -> f64 {
        let mut worst: f64 = 0.0;
        for (k, b) in self.bounces.iter().enumerate() {
            let p = self.vertices[k + 1];
            let u = (p - self.vertices[k]).normalized();
            let v = (self.vertices[k + 2] - p).normalized();
            let n = surface_normal(scene, b.surface);
            let ai = u.cross(n).norm().atan2(u.dot(n).abs());
            let ar = v.cross(n).norm().atan2(v.dot(n).abs());
            let mirrored = u - n * (2.0 * u.dot(n));
            let off_plane = (mirrored - v).norm();
            worst = worst.max((ai - ar).abs()).max(off_plane);
        }
        worst
    }
}

fn surface_normal(scene: &Scene, s: SurfaceId) -> Vec3 {
    match s {
        SurfaceId::Floor => Vec3::new(0.0, 0.0, 1.0),
        SurfaceId::Wall(i) => {
            let w = &scene.walls[i];
            let d = w.b.with_z(0.0) - w.a.with_z(0.0);
            Vec3::new(-d.y, d.x, 0.0).normalized()
        }
    }
}

/// A bounded planar reflector.
#[derive(Debug, Clone)]
struct Surface {
    id: SurfaceId,
    origin: Vec3,
    normal: Vec3,
    material: Arc<Material>,
    kind: SurfaceKind,
}

#[derive(Debug, Clone)]
enum SurfaceKind {
    Wall { dir: Vec3, length: f64, height: f64 },
    Floor { footprint: Vec<Point2> },
}

impl Surface {
    fn signed_distance(&self, p: Vec3) -> f64 {
        (p - self.origin).dot(self.normal)
    }

    fn mirror(&self, p: Vec3) -> Vec3 {
        p - self.normal * (2.0 * self.signed_distance(p))
    }

    fn contains(&self, p: Vec3) -> bool {
        match &self.kind {
            SurfaceKind::Wall { dir, length, height } => {
                let s = (p - self.origin).dot(*dir);
                s >= -EXTENT_EPS && s <= length + EXTENT_EPS && p.z >= -EXTENT_EPS && p.z <= height + EXTENT_EPS
            }
            SurfaceKind::Floor { footprint } => polygon_contains(footprint, p.xy()),
        }
    }
}

/// Does the open segment `p -> q` pass through wall `w`?
fn wall_blocks(scene: &Scene, w: usize, p: Vec3, q: Vec3) -> bool {
    let wall = &scene.walls[w];
    let r = (q.x - p.x, q.y - p.y);
    let s = (wall.b.x - wall.a.x, wall.b.y - wall.a.y);
    let denom = r.0 * s.1 - r.1 * s.0;
    if denom.abs() < 1e-15 {
        return false;
    }
    let ap = (wall.a.x - p.x, wall.a.y - p.y);
    let t = (ap.0 * s.1 - ap.1 * s.0) / denom;
    let u = (ap.0 * r.1 - ap.1 * r.0) / denom;
    if t <= 1e-12 || t >= 1.0 - 1e-12 || u < -1e-12 || u > 1.0 + 1e-12 {
        return false;
    }
    let z = p.z + t * (q.z - p.z);
    z >= 0.0 && z <= wall.height
}

/// Image tree rooted at one transmitter, reusable across receivers.
pub struct Tracer<'a> {
    scene: &'a Scene,
    surfaces: Vec<Surface>,
    tx: Vec3,
    /// Surface-index sequences with the TX image after each reflection.
    branches: Vec<(Vec<usize>, Vec<Vec3>)>,
}

impl<'a> Tracer<'a> {
    pub fn new(scene: &'a Scene, tx: Vec3, max_reflections: usize) -> Self {
        let mut surfaces: Vec<Surface> = scene
            .walls
            .iter()
            .enumerate()
            .map(|(i, w)| {
                let a = w.a.with_z(0.0);
                let d = w.b.with_z(0.0) - a;
                Surface {
                    id: SurfaceId::Wall(i),
                    origin: a,
                    normal: Vec3::new(-d.y, d.x, 0.0).normalized(),
                    material: Arc::new(w.material.clone()),
                    kind: SurfaceKind::Wall {
                        dir: d.normalized(),
                        length: d.norm(),
                        height: w.height,
                    },
                }
            })
            .collect();
        surfaces.push(Surface {
            id: SurfaceId::Floor,
            origin: Vec3::new(0.0, 0.0, 0.0),
            normal: Vec3::new(0.0, 0.0, 1.0),
            material: Arc::new(scene.floor_material.clone()),
            kind: SurfaceKind::Floor {
                footprint: scene.footprint.clone(),
            },
        });
        let mut branches = vec![(Vec::new(), Vec::new())];
        let mut frontier = vec![(Vec::<usize>::new(), Vec::<Vec3>::new())];
        for _ in 0..max_reflections {
            let mut next = Vec::new();
            for (seq, images) in &frontier {
                let src = images.last().copied().unwrap_or(tx);
                for (si, surf) in surfaces.iter().enumerate() {
                    if seq.last() == Some(&si) {
                        continue;
                    }
                    // a source lying on the plane has no usable image
                    if surf.signed_distance(src).abs() < PLANE_EPS {
                        continue;
                    }
                    let mut s = seq.clone();
                    s.push(si);
                    let mut im = images.clone();
                    im.push(surf.mirror(src));
                    next.push((s, im));
                }
            }
            branches.extend(next.iter().cloned());
            frontier = next;
        }
        Self {
            scene,
            surfaces,
            tx,
            branches,
        }
    }

    fn visible(&self, p: Vec3, q: Vec3, skip: &[SurfaceId]) -> bool {
        (0..self.scene.walls.len())
            .filter(|&w| !skip.contains(&SurfaceId::Wall(w)))
            .all(|w| !wall_blocks(self.scene, w, p, q))
    }

    fn trace_branch(&self, seq: &[usize], images: &[Vec3], rx: Vec3) -> Option<Path> {
        let k = seq.len();
        let mut points = vec![Vec3::new(0.0, 0.0, 0.0); k];
        let mut target = rx;
        for level in (0..k).rev() {
            let surf = &self.surfaces[seq[level]];
            let image = images[level];
            let di = surf.signed_distance(image);
            let dt = surf.signed_distance(target);
            if !(di * dt < 0.0) || dt.abs() < PLANE_EPS {
                return None;
            }
            let p = image + (target - image) * (di / (di - dt));
            if !surf.contains(p) {
                return None;
            }
            points[level] = p;
            target = p;
        }
        let mut vertices = Vec::with_capacity(k + 2);
        vertices.push(self.tx);
        vertices.extend_from_slice(&points);
        vertices.push(rx);
        for i in 0..=k {
            let mut skip = Vec::with_capacity(2);
            if i > 0 {
                skip.push(self.surfaces[seq[i - 1]].id);
            }
            if i < k {
                skip.push(self.surfaces[seq[i]].id);
            }
            if !self.visible(vertices[i], vertices[i + 1], &skip) {
                return None;
            }
        }
        let total_length = vertices.windows(2).map(|w| w[0].dist(w[1])).sum();
        let bounces = seq
            .iter()
            .enumerate()
            .map(|(i, &si)| {
                let surf = &self.surfaces[si];
                let u = (vertices[i + 1] - vertices[i]).normalized();
                let n = surf.normal;
                Bounce {
                    surface: surf.id,
                    material: surf.material.clone(),
                    incidence: u.cross(n).norm().atan2(u.dot(n).abs()),
                }
            })
            .collect();
        Some(Path {
            vertices,
            bounces,
            total_length,
        })
    }

    pub fn paths_to(&self, rx: Vec3) -> Vec<Path> {
        let mut out: Vec<Path> = Vec::new();
        for (seq, images) in &self.branches {
            if let Some(p) = self.trace_branch(seq, images, rx) {
                let dup = out.iter().any(|q| {
                    q.vertices.len() == p.vertices.len()
                        && q.vertices.iter().zip(&p.vertices).all(|(a, b)| a.dist(*b) < 1e-9)
                });
                if !dup {
                    out.push(p);
                }
            }
        }
        out
    }
}

/// All unblocked specular paths from `tx` to `rx` with at most
/// `max_reflections` bounces off the walls and floor.
pub fn enumerate_paths(scene: &Scene, tx: Vec3, rx: Vec3, max_reflections: usize) -> Vec<Path> {
    Tracer::new(scene, tx, max_reflections).paths_to(rx)
}

/// TE-polarized Fresnel reflection coefficient for a lossy dielectric.
pub fn fresnel_reflection(material: &Material, freq: f64, incidence: f64) -> Complex64 {
    let sigma = material.conductivity_at(freq);
    let eps = Complex64::new(
        material.rel_permittivity,
        -sigma / (2.0 * PI * freq * VACUUM_PERMITTIVITY),
    );
    let cos_i = incidence.cos();
    let sin2 = incidence.sin().powi(2);
    let root = (eps - sin2).sqrt();
    (cos_i - root) / (cos_i + root)
}

/// Elevation from the downward boresight and azimuth of direction `d`.
pub fn departure_angles(d: Vec3) -> (f64, f64) {
    let horizontal = d.x.hypot(d.y);
    let elevation = horizontal.atan2(-d.z);
    let azimuth = d.y.atan2(d.x);
    (azimuth, elevation)
}

/// Complex field amplitude of one path. `tx_antenna = None` is isotropic.
pub fn path_amplitude(path: &Path, freq: f64, tx_antenna: Option<&UpaConfig>) -> Complex64 {
    let lambda = SPEED_OF_LIGHT / freq;
    let gain = match tx_antenna {
        Some(cfg) => {
            let (az, el) = departure_angles(path.vertices[1] - path.vertices[0]);
            upa_gain(cfg, az, el)
        }
        None => 1.0,
    };
    let reflection: Complex64 = path
        .bounces
        .iter()
        .map(|b| fresnel_reflection(&b.material, freq, b.incidence))
        .product();
    let magnitude = lambda / (4.0 * PI * path.total_length) * gain.sqrt();
    reflection * Complex64::from_polar(magnitude, -2.0 * PI * path.total_length / lambda)
}

/// Coherent received power in dBm; `-inf` when nothing arrives.
pub fn received_power(amplitudes: &[Complex64], tx_power_dbm: f64) -> f64 {
    if amplitudes.is_empty() {
        return f64::NEG_INFINITY;
    }
    let total: Complex64 = amplitudes.iter().sum();
    let mag = total.norm();
    if mag == 0.0 {
        f64::NEG_INFINITY
    } else {
        tx_power_dbm + 20.0 * mag.log10()
    }
}

/// Received-signal-strength raster in dBm, row-major `[height, width]`.
#[derive(Debug, Clone, PartialEq)]
pub struct RfMap {
    pub width: usize,
    pub height: usize,
    pub rss_dbm: Vec<f64>,
    pub norm_range: (f64, f64),
}

impl RfMap {
    pub fn at(&self, col: usize, row: usize) -> f64 {
        self.rss_dbm[row * self.width + col]
    }

    /// Values linearly mapped from `norm_range` onto `[0, 1]`, clamped;
    /// cells with no path map to 0.
    pub fn normalized(&self) -> Vec<f32> {
        crate::dataset::normalize_rss(&self.rss_dbm, self.norm_range)
    }
}

pub struct MapRequest<'a> {
    pub scene: &'a Scene,
    pub antenna: &'a UpaConfig,
    pub freq: f64,
    pub grid: &'a GridSpec,
    pub max_reflections: usize,
    pub tx_power_dbm: f64,
}

/// One RX per cell center at the scene's RX height. Cells outside the footprint are `-inf`.
pub fn generate_rf_map(
    scene: &Scene,
    antenna: &UpaConfig,
    freq: f64,
    grid: &GridSpec,
    max_reflections: usize,
) -> Result<RfMap, PropagationError> {
    generate_rf_map_with(&MapRequest {
        scene,
        antenna,
        freq,
        grid,
        max_reflections,
        tx_power_dbm: 0.0,
    })
}

pub fn generate_rf_map_with(req: &MapRequest<'_>) -> Result<RfMap, PropagationError> {
    let violations = validate_scene(req.scene);
    if !violations.is_empty() {
        return Err(SceneError::Invalid(violations).into());
    }
    req.grid.check_covers(&req.scene.bounds)?;
    req.antenna.validate()?;
    if !(req.freq > 0.0) {
        return Err(PropagationError::BadFrequency(req.freq));
    }
    let tracer = Tracer::new(req.scene, req.scene.bs_position, req.max_reflections);
    let grid = req.grid;
    let rows: Vec<Vec<f64>> = (0..grid.ny)
        .into_par_iter()
        .map(|row| {
            (0..grid.nx)
                .map(|col| {
                    let c = grid.cell_center(&req.scene.bounds, col, row);
                    // no receivers outside the room
                    if !req.scene.is_walkable(c) {
                        return f64::NEG_INFINITY;
                    }
                    let rx = c.with_z(req.scene.rx_height);
                    let amps: Vec<Complex64> = tracer
                        .paths_to(rx)
                        .iter()
                        .map(|p| path_amplitude(p, req.freq, Some(req.antenna)))
                        .collect();
                    received_power(&amps, req.tx_power_dbm)
                })
                .collect()
        })
        .collect();
    Ok(RfMap {
        width: grid.nx,
        height: grid.ny,
        rss_dbm: rows.into_iter().flatten().collect(),
        norm_range: DEFAULT_NORM_RANGE,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scene::{build_room, RoomLayout, RoomShape};
    use approx::assert_relative_eq;

    fn open() -> Scene {
        build_room(&RoomLayout::new(
            "open",
            RoomShape::Open {
                width: 10.0,
                depth: 10.0,
            },
            Point2::new(5.0, 5.0),
        ))
        .unwrap()
    }

    #[test]
    fn open_scene_los_only() {
        let s = open();
        let p = enumerate_paths(&s, Vec3::new(5.0, 5.0, 3.0), Vec3::new(2.0, 3.0, 1.5), 0);
        assert_eq!(p.len(), 1);
        assert!(p[0].bounces.is_empty());
    }

    #[test]
    fn open_scene_floor_bounce() {
        let s = open();
        let tx = Vec3::new(5.0, 5.0, 3.0);
        let rx = Vec3::new(2.0, 3.0, 1.5);
        let p = enumerate_paths(&s, tx, rx, 2);
        // LOS + floor; no second-order path exists with a single reflector
        assert_eq!(p.len(), 2);
        let floor = &p[1];
        let image = Vec3::new(5.0, 5.0, -3.0);
        assert_relative_eq!(floor.total_length, image.dist(rx), epsilon = 1e-12);
        assert!(floor.specular_error(&s) < 1e-9);
    }

    #[test]
    fn single_wall_gives_one_specular_path() {
        let mut s = open();
        s.walls.push(crate::scene::Wall {
            a: Point2::new(0.0, 8.0),
            b: Point2::new(10.0, 8.0),
            height: 4.0,
            material: Material::brick(),
        });
        let tx = Vec3::new(3.0, 5.0, 2.0);
        let rx = Vec3::new(7.0, 6.0, 2.0);
        let p = enumerate_paths(&s, tx, rx, 1);
        let walls: Vec<_> = p.iter().filter(|p| p.surfaces() == vec![SurfaceId::Wall(0)]).collect();
        assert_eq!(walls.len(), 1);
        let image = Vec3::new(3.0, 11.0, 2.0);
        assert_relative_eq!(walls[0].total_length, image.dist(rx), epsilon = 1e-12);
    }

    #[test]
    fn wall_blocks_los() {
        let mut s = open();
        s.walls.push(crate::scene::Wall {
            a: Point2::new(5.0, 0.0),
            b: Point2::new(5.0, 10.0),
            height: 4.0,
            material: Material::brick(),
        });
        let p = enumerate_paths(&s, Vec3::new(2.0, 5.0, 3.0), Vec3::new(8.0, 5.0, 1.5), 0);
        assert!(p.is_empty());
    }

    #[test]
    fn fresnel_limits() {
        let brick = Material::brick();
        let g = fresnel_reflection(&brick, 28e9, PI / 2.0 - 1e-7);
        assert!((g.norm() - 1.0).abs() < 1e-5);
        let pec = Material {
            name: "pec".into(),
            rel_permittivity: 1.0,
            conductivity: (1e16, 0.0),
        };
        let g = fresnel_reflection(&pec, 28e9, 0.3);
        assert!((g - Complex64::new(-1.0, 0.0)).norm() < 1e-6);
        for k in 0..50 {
            let th = k as f64 * (PI / 2.0) / 50.0;
            assert!(fresnel_reflection(&brick, 5e9, th).norm() <= 1.0);
            assert!(fresnel_reflection(&Material::concrete(), 70e9, th).norm() <= 1.0);
        }
    }

    #[test]
    fn received_power_basics() {
        assert_eq!(received_power(&[], 0.0), f64::NEG_INFINITY);
        let a = Complex64::new(1e-3, 0.0);
        let one = received_power(&[a], 0.0);
        let two = received_power(&[a, a], 0.0);
        assert_relative_eq!(two - one, 20.0 * 2f64.log10(), epsilon = 1e-12);
    }

    #[test]
    fn los_amplitude_at_one_meter() {
        let s = open();
        let p = &enumerate_paths(&s, Vec3::new(5.0, 5.0, 2.5), Vec3::new(5.0, 5.0, 1.5), 0)[0];
        let f = 28e9;
        let lambda = SPEED_OF_LIGHT / f;
        let a = path_amplitude(p, f, None);
        assert_relative_eq!(a.norm(), lambda / (4.0 * PI), epsilon = 1e-15);
        let expected = (-2.0 * PI / lambda).rem_euclid(2.0 * PI);
        let got = a.arg().rem_euclid(2.0 * PI);
        assert!((expected - got).abs() < 1e-6);
    }

    #[test]
    fn free_space_map_decreases_with_distance() {
        let s = open();
        let cfg = UpaConfig::new(1, 1, 28e9).unwrap();
        let g = GridSpec::for_bounds(32, 32, &s.bounds).unwrap();
        let m = generate_rf_map(&s, &cfg, 28e9, &g, 0).unwrap();
        let mut cells: Vec<(f64, f64)> = (0..32)
            .flat_map(|r| (0..32).map(move |c| (c, r)))
            .map(|(c, r)| {
                let p = g.cell_center(&s.bounds, c, r);
                (p.dist(Point2::new(5.0, 5.0)), m.at(c, r))
            })
            .collect();
        cells.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap());
        for w in cells.windows(2) {
            if w[1].0 - w[0].0 > 1e-9 {
                assert!(w[1].1 < w[0].1, "{:?}", w);
            }
        }
    }

    #[test]
    fn cells_outside_footprint_are_empty() {
        let s = build_room(&crate::scene::catalog_room("lshape").unwrap()).unwrap();
        let cfg = UpaConfig::new(4, 4, 28e9).unwrap();
        let g = GridSpec::for_bounds(32, 32, &s.bounds).unwrap();
        let m = generate_rf_map(&s, &cfg, 28e9, &g, 2).unwrap();
        for r in 0..32 {
            for c in 0..32 {
                let inside = s.is_walkable(g.cell_center(&s.bounds, c, r));
                assert_eq!(inside, m.at(c, r).is_finite(), "cell ({c}, {r})");
            }
        }
    }
}
