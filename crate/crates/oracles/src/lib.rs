//! Reference computations used to cross-check `radiance-core`.
//!
//! Everything here works on plain numbers and is written from the
//! definitions, deliberately avoiding the algorithms used by the main crate:
//! ray paths come from minimizing total path length (Fermat) instead of
//! image sources, SSIM is evaluated window by window with a 2-D kernel, the
//! Fresnel coefficient uses wave impedances, and so on.

use num_complex::Complex64;
use std::f64::consts::PI;

pub const C0: f64 = 299_792_458.0;
pub const EPS0: f64 = 8.854_187_812_8e-12;
pub const MU0: f64 = 1.256_637_062_12e-6;

/// Free-space received power in dBm between isotropic antennas.
pub fn friis_dbm(distance: f64, freq: f64, tx_dbm: f64) -> f64 {
    let lambda = C0 / freq;
    tx_dbm - 20.0 * (4.0 * PI * distance / lambda).log10()
}

/// TE (perpendicular) reflection coefficient from the wave impedances of
/// air and a lossy half-space, with the complex Snell transmission angle.
pub fn fresnel_te(rel_permittivity: f64, conductivity: f64, freq: f64, incidence: f64) -> Complex64 {
    let omega = 2.0 * PI * freq;
    let eps2 = Complex64::new(rel_permittivity * EPS0, -conductivity / omega);
    let eta1 = Complex64::new((MU0 / EPS0).sqrt(), 0.0);
    let eta2 = (Complex64::new(MU0, 0.0) / eps2).sqrt();
    let n_ratio = eta2 / eta1; // n1 / n2
    let sin_t = n_ratio * incidence.sin();
    let cos_t = (Complex64::new(1.0, 0.0) - sin_t * sin_t).sqrt();
    let cos_i = incidence.cos();
    (eta2 * cos_i - eta1 * cos_t) / (eta2 * cos_i + eta1 * cos_t)
}

/// UPA power gain by summing every element's phase explicitly.
/// Elements sit at `(m d, n d, 0)` (rows along x, columns along y), the
/// look direction is `(sin el cos az, sin el sin az, cos el)`.
pub fn upa_gain_bruteforce(rows: usize, cols: usize, spacing_wl: f64, azimuth: f64, elevation: f64) -> f64 {
    let dir = [
        elevation.sin() * azimuth.cos(),
        elevation.sin() * azimuth.sin(),
        elevation.cos(),
    ];
    let k = 2.0 * PI;
    let mut af = Complex64::new(0.0, 0.0);
    for m in 0..rows {
        for n in 0..cols {
            let pos = [m as f64 * spacing_wl, n as f64 * spacing_wl, 0.0];
            let phase = k * (pos[0] * dir[0] + pos[1] * dir[1] + pos[2] * dir[2]);
            af += Complex64::new(phase.cos(), phase.sin());
        }
    }
    let element = if elevation.abs() < PI / 2.0 {
        elevation.cos().abs()
    } else {
        0.0
    };
    element * af.norm_sqr() / (rows * cols) as f64
}

/// First elevation in `(0, pi/2)` where the UPA gain along azimuth 0 reaches
/// a local minimum, found by a dense scan.
pub fn first_null_elevation(rows: usize, cols: usize, spacing_wl: f64, samples: usize) -> Option<f64> {
    let f = |el: f64| upa_gain_bruteforce(rows, cols, spacing_wl, 0.0, el);
    let step = (PI / 2.0) / samples as f64;
    let mut prev = f(step);
    let mut cur = f(2.0 * step);
    for i in 3..samples {
        let next = f(i as f64 * step);
        if cur <= prev && cur <= next {
            return Some((i - 1) as f64 * step);
        }
        prev = cur;
        cur = next;
    }
    None
}

/// Shoelace-free area: sum of signed triangle areas from the first vertex.
pub fn polygon_area(poly: &[[f64; 2]]) -> f64 {
    let o = poly[0];
    let mut acc = 0.0;
    for i in 1..poly.len().saturating_sub(1) {
        let a = [poly[i][0] - o[0], poly[i][1] - o[1]];
        let b = [poly[i + 1][0] - o[0], poly[i + 1][1] - o[1]];
        acc += 0.5 * (a[0] * b[1] - a[1] * b[0]);
    }
    acc.abs()
}

fn orient(a: [f64; 2], b: [f64; 2], c: [f64; 2]) -> f64 {
    (b[0] - a[0]) * (c[1] - a[1]) - (b[1] - a[1]) * (c[0] - a[0])
}

fn on_segment(a: [f64; 2], b: [f64; 2], p: [f64; 2]) -> bool {
    p[0] >= a[0].min(b[0]) && p[0] <= a[0].max(b[0]) && p[1] >= a[1].min(b[1]) && p[1] <= a[1].max(b[1])
}

/// Closed segment intersection (touching and collinear overlap count).
pub fn segments_intersect(p1: [f64; 2], p2: [f64; 2], q1: [f64; 2], q2: [f64; 2]) -> bool {
    let d1 = orient(q1, q2, p1);
    let d2 = orient(q1, q2, p2);
    let d3 = orient(p1, p2, q1);
    let d4 = orient(p1, p2, q2);
    if ((d1 > 0.0 && d2 < 0.0) || (d1 < 0.0 && d2 > 0.0)) && ((d3 > 0.0 && d4 < 0.0) || (d3 < 0.0 && d4 > 0.0)) {
        return true;
    }
    (d1 == 0.0 && on_segment(q1, q2, p1))
        || (d2 == 0.0 && on_segment(q1, q2, p2))
        || (d3 == 0.0 && on_segment(p1, p2, q1))
        || (d4 == 0.0 && on_segment(p1, p2, q2))
}

/// Euclidean distance from a point to a closed segment.
pub fn point_segment_distance(p: [f64; 2], a: [f64; 2], b: [f64; 2]) -> f64 {
    let ab = [b[0] - a[0], b[1] - a[1]];
    let len2 = ab[0] * ab[0] + ab[1] * ab[1];
    let t = if len2 == 0.0 {
        0.0
    } else {
        (((p[0] - a[0]) * ab[0] + (p[1] - a[1]) * ab[1]) / len2).clamp(0.0, 1.0)
    };
    ((p[0] - a[0] - t * ab[0]).powi(2) + (p[1] - a[1] - t * ab[1]).powi(2)).sqrt()
}

/// Distance between a closed segment and the closed rectangle `[lo, hi]`;
/// zero when they meet. For disjoint convex sets the minimum is reached at
/// a vertex of one of them.
pub fn segment_cell_distance(a: [f64; 2], b: [f64; 2], lo: [f64; 2], hi: [f64; 2]) -> f64 {
    let corners = [lo, [hi[0], lo[1]], hi, [lo[0], hi[1]]];
    if (0..4).any(|i| segments_intersect(a, b, corners[i], corners[(i + 1) % 4])) {
        return 0.0;
    }
    let to_rect = |p: [f64; 2]| {
        let dx = (lo[0] - p[0]).max(0.0).max(p[0] - hi[0]);
        let dy = (lo[1] - p[1]).max(0.0).max(p[1] - hi[1]);
        (dx * dx + dy * dy).sqrt()
    };
    let mut d = to_rect(a).min(to_rect(b));
    for c in corners {
        d = d.min(point_segment_distance(c, a, b));
    }
    d
}

/// Number of grid cells within `tol` of any segment. Cells are
/// `[x0 + c*size, x0 + (c+1)*size] x [y0 + r*size, ...]`.
pub fn count_wall_cells(
    segments: &[([f64; 2], [f64; 2])],
    origin: [f64; 2],
    size: f64,
    nx: usize,
    ny: usize,
    tol: f64,
) -> usize {
    let mut n = 0;
    for r in 0..ny {
        for c in 0..nx {
            let lo = [origin[0] + c as f64 * size, origin[1] + r as f64 * size];
            let hi = [origin[0] + (c + 1) as f64 * size, origin[1] + (r + 1) as f64 * size];
            if segments
                .iter()
                .any(|&(a, b)| segment_cell_distance(a, b, lo, hi) <= tol)
            {
                n += 1;
            }
        }
    }
    n
}

fn point_in_polygon(poly: &[[f64; 2]], p: [f64; 2], tol: f64) -> bool {
    // winding number with a boundary tolerance
    for i in 0..poly.len() {
        let (a, b) = (poly[i], poly[(i + 1) % poly.len()]);
        let ab = [b[0] - a[0], b[1] - a[1]];
        let ap = [p[0] - a[0], p[1] - a[1]];
        let len2 = ab[0] * ab[0] + ab[1] * ab[1];
        let t = ((ap[0] * ab[0] + ap[1] * ab[1]) / len2).clamp(0.0, 1.0);
        let d = [ap[0] - t * ab[0], ap[1] - t * ab[1]];
        if (d[0] * d[0] + d[1] * d[1]).sqrt() <= tol {
            return true;
        }
    }
    let mut winding = 0i32;
    for i in 0..poly.len() {
        let (a, b) = (poly[i], poly[(i + 1) % poly.len()]);
        if a[1] <= p[1] {
            if b[1] > p[1] && orient(a, b, p) > 0.0 {
                winding += 1;
            }
        } else if b[1] <= p[1] && orient(a, b, p) < 0.0 {
            winding -= 1;
        }
    }
    winding != 0
}

/// A vertical wall from `a` to `b`, floor to `height`.
#[derive(Debug, Clone, Copy)]
pub struct RawWall {
    pub a: [f64; 2],
    pub b: [f64; 2],
    pub height: f64,
}

/// Reflecting surfaces: walls plus a floor at z = 0 bounded by `floor`.
#[derive(Debug, Clone)]
pub struct RawScene {
    pub walls: Vec<RawWall>,
    pub floor: Vec<[f64; 2]>,
}

/// `None` marks the floor.
pub type SurfaceRef = Option<usize>;

#[derive(Debug, Clone)]
pub struct RawPath {
    pub surfaces: Vec<SurfaceRef>,
    pub points: Vec<[f64; 3]>,
    pub length: f64,
}

type V3 = [f64; 3];

fn sub(a: V3, b: V3) -> V3 {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}
fn dot(a: V3, b: V3) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}
fn norm(a: V3) -> f64 {
    dot(a, a).sqrt()
}

/// Plane frame `(origin, u, v, normal)` of a surface.
fn frame(scene: &RawScene, s: SurfaceRef) -> (V3, V3, V3, V3) {
    match s {
        None => ([0.0; 3], [1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]),
        Some(i) => {
            let w = scene.walls[i];
            let d = [w.b[0] - w.a[0], w.b[1] - w.a[1]];
            let l = (d[0] * d[0] + d[1] * d[1]).sqrt();
            let u = [d[0] / l, d[1] / l, 0.0];
            ([w.a[0], w.a[1], 0.0], u, [0.0, 0.0, 1.0], [-u[1], u[0], 0.0])
        }
    }
}

fn solve(mut a: Vec<Vec<f64>>, mut b: Vec<f64>) -> Option<Vec<f64>> {
    let n = b.len();
    for col in 0..n {
        let piv = (col..n).max_by(|&i, &j| a[i][col].abs().total_cmp(&a[j][col].abs()))?;
        if a[piv][col].abs() < 1e-300 {
            return None;
        }
        a.swap(col, piv);
        b.swap(col, piv);
        for r in col + 1..n {
            let f = a[r][col] / a[col][col];
            for c in col..n {
                a[r][c] -= f * a[col][c];
            }
            b[r] -= f * b[col];
        }
    }
    let mut x = vec![0.0; n];
    for r in (0..n).rev() {
        let s: f64 = (r + 1..n).map(|c| a[r][c] * x[c]).sum();
        x[r] = (b[r] - s) / a[r][r];
    }
    Some(x)
}

/// Minimizes the total length of `tx -> p1 -> ... -> pk -> rx` with each
/// `p_i` free on the (unbounded) plane of surface `i`. The objective is a
/// sum of Euclidean norms of affine maps, hence convex, so any smooth
/// stationary point is the global minimum. Damped Newton can stall on the
/// kinks where two consecutive points merge (e.g. on a corner line), so
/// several starts are tried and only a verified smooth stationary point is
/// returned.
fn fermat_points(scene: &RawScene, seq: &[SurfaceRef], tx: V3, rx: V3) -> Option<Vec<V3>> {
    let frames: Vec<_> = seq.iter().map(|&s| frame(scene, s)).collect();
    let k = seq.len();
    let point = |x: &[f64], i: usize| -> V3 {
        let (o, u, v, _) = frames[i];
        [
            o[0] + x[2 * i] * u[0] + x[2 * i + 1] * v[0],
            o[1] + x[2 * i] * u[1] + x[2 * i + 1] * v[1],
            o[2] + x[2 * i] * u[2] + x[2 * i + 1] * v[2],
        ]
    };
    let chain = |x: &[f64]| -> Vec<V3> {
        let mut pts = vec![tx];
        pts.extend((0..k).map(|i| point(x, i)));
        pts.push(rx);
        pts
    };
    let length = |x: &[f64]| -> f64 {
        let p = chain(x);
        p.windows(2).map(|w| norm(sub(w[1], w[0]))).sum()
    };
    let jac = |i: usize| -> [V3; 2] { [frames[i].1, frames[i].2] };
    // gradient and Hessian; None at a kink
    let derivatives = |x: &[f64]| -> Option<(Vec<f64>, Vec<Vec<f64>>)> {
        let p = chain(x);
        let mut g = vec![0.0; 2 * k];
        let mut h = vec![vec![0.0; 2 * k]; 2 * k];
        for s in 0..=k {
            let d = sub(p[s + 1], p[s]);
            let r = norm(d);
            if r < 1e-9 {
                return None;
            }
            let e = [d[0] / r, d[1] / r, d[2] / r];
            // segment s joins point s-1 (if a variable) to point s (if a variable)
            let ends: Vec<(usize, f64)> = [(s.wrapping_sub(1), -1.0), (s, 1.0)]
                .into_iter()
                .filter(|&(i, _)| i < k)
                .collect();
            let proj = |a: V3, b: V3| -> f64 { (dot(a, b) - dot(a, e) * dot(b, e)) / r };
            for &(i, si) in &ends {
                let ji = jac(i);
                for a in 0..2 {
                    g[2 * i + a] += si * dot(ji[a], e);
                }
                for &(j, sj) in &ends {
                    let jj = jac(j);
                    for a in 0..2 {
                        for b in 0..2 {
                            h[2 * i + a][2 * j + b] += si * sj * proj(ji[a], jj[b]);
                        }
                    }
                }
            }
        }
        Some((g, h))
    };
    let newton = |mut x: Vec<f64>| -> Option<Vec<f64>> {
        for _ in 0..100 {
            let (g, h) = derivatives(&x)?;
            let neg: Vec<f64> = g.iter().map(|v| -v).collect();
            let dir = solve(h, neg.clone())
                .filter(|d| d.iter().zip(&g).map(|(a, b)| a * b).sum::<f64>() < 0.0)
                .unwrap_or(neg);
            let step = dir.iter().map(|v| v * v).sum::<f64>().sqrt();
            if step < 1e-13 {
                break;
            }
            // near the optimum the length is flat to rounding, so allow tiny increases
            let f0 = length(&x);
            let mut t = 1.0;
            loop {
                let cand: Vec<f64> = x.iter().zip(&dir).map(|(a, b)| a + t * b).collect();
                if length(&cand) <= f0 * (1.0 + 1e-14) || t < 1e-12 {
                    x = cand;
                    break;
                }
                t *= 0.5;
            }
        }
        let (g, _) = derivatives(&x)?;
        (g.iter().map(|v| v * v).sum::<f64>().sqrt() < 1e-8).then_some(x)
    };
    let to_local = |p: V3, i: usize| -> [f64; 2] {
        let (o, u, v, _) = frames[i];
        [dot(sub(p, o), u), dot(sub(p, o), v)]
    };
    let lerp = |t: f64| -> V3 {
        [
            tx[0] + t * (rx[0] - tx[0]),
            tx[1] + t * (rx[1] - tx[1]),
            tx[2] + t * (rx[2] - tx[2]),
        ]
    };
    let mut starts: Vec<Vec<f64>> = Vec::new();
    // projections of points spread along the direct line
    for &(a, b) in &[(0.5, 0.0), (0.0, 1.0), (0.25, 0.5), (1.0, -1.0)] {
        starts.push(
            (0..k)
                .flat_map(|i| to_local(lerp(a + b * (i as f64 + 1.0) / (k as f64 + 1.0)), i))
                .collect(),
        );
    }
    // a lattice of offsets around the first start
    for dx in [-3.0, 3.0] {
        for dy in [-2.0, 2.0] {
            let mut x = starts[0].clone();
            for i in 0..k {
                x[2 * i] += dx * if i % 2 == 0 { 1.0 } else { -1.0 };
                x[2 * i + 1] += dy;
            }
            starts.push(x);
        }
    }
    starts
        .into_iter()
        .find_map(newton)
        .map(|x| (0..k).map(|i| point(&x, i)).collect())
}

fn blocked(scene: &RawScene, p: V3, q: V3, skip: &[SurfaceRef]) -> bool {
    scene.walls.iter().enumerate().any(|(i, w)| {
        if skip.contains(&Some(i)) {
            return false;
        }
        let r = [q[0] - p[0], q[1] - p[1]];
        let s = [w.b[0] - w.a[0], w.b[1] - w.a[1]];
        let den = r[0] * s[1] - r[1] * s[0];
        if den.abs() < 1e-15 {
            return false;
        }
        let ap = [w.a[0] - p[0], w.a[1] - p[1]];
        let t = (ap[0] * s[1] - ap[1] * s[0]) / den;
        let u = (ap[0] * r[1] - ap[1] * r[0]) / den;
        if t <= 1e-12 || t >= 1.0 - 1e-12 || u < -1e-12 || u > 1.0 + 1e-12 {
            return false;
        }
        let z = p[2] + t * (q[2] - p[2]);
        (0.0..=w.height).contains(&z)
    })
}

fn sequences(n_walls: usize, max_len: usize) -> Vec<Vec<SurfaceRef>> {
    let all: Vec<SurfaceRef> = (0..n_walls).map(Some).chain(std::iter::once(None)).collect();
    let mut out = vec![vec![]];
    let mut frontier = vec![vec![]];
    for _ in 0..max_len {
        let mut next = Vec::new();
        for seq in &frontier {
            for &s in &all {
                if seq.last() != Some(&s) {
                    let mut v: Vec<SurfaceRef> = seq.clone();
                    v.push(s);
                    next.push(v);
                }
            }
        }
        out.extend(next.iter().cloned());
        frontier = next;
    }
    out
}

/// Every specular path with at most `max_reflections` bounces, found by
/// exhaustive surface sequences and length minimization.
pub fn specular_paths(scene: &RawScene, tx: V3, rx: V3, max_reflections: usize) -> Vec<RawPath> {
    const TOL: f64 = 1e-9;
    let mut out = Vec::new();
    for seq in sequences(scene.walls.len(), max_reflections) {
        let pts = if seq.is_empty() {
            Some(vec![])
        } else {
            fermat_points(scene, &seq, tx, rx)
        };
        let Some(pts) = pts else { continue };
        let mut chain = vec![tx];
        chain.extend(pts.iter().copied());
        chain.push(rx);
        let mut ok = true;
        for (i, &s) in seq.iter().enumerate() {
            let (o, u, v, n) = frame(scene, s);
            let p = chain[i + 1];
            let inside = match s {
                None => point_in_polygon(&scene.floor, [p[0], p[1]], 1e-12),
                Some(w) => {
                    let wall = scene.walls[w];
                    let l = ((wall.b[0] - wall.a[0]).powi(2) + (wall.b[1] - wall.a[1]).powi(2)).sqrt();
                    let (a, b) = (dot(sub(p, o), u), dot(sub(p, o), v));
                    a >= -TOL && a <= l + TOL && b >= -TOL && b <= wall.height + TOL
                }
            };
            let before = dot(sub(chain[i], o), n);
            let after = dot(sub(chain[i + 2], o), n);
            if !inside || !(before * after > 0.0) || before.abs() < 1e-12 || after.abs() < 1e-12 {
                ok = false;
                break;
            }
        }
        if !ok {
            continue;
        }
        for i in 0..chain.len() - 1 {
            let mut skip = Vec::new();
            if i > 0 {
                skip.push(seq[i - 1]);
            }
            if i < seq.len() {
                skip.push(seq[i]);
            }
            if blocked(scene, chain[i], chain[i + 1], &skip) {
                ok = false;
                break;
            }
        }
        if !ok {
            continue;
        }
        let length = chain.windows(2).map(|w| norm(sub(w[1], w[0]))).sum();
        out.push(RawPath {
            surfaces: seq,
            points: pts,
            length,
        });
    }
    out
}

/// Angle between the incoming ray and the surface normal at bounce `i`.
pub fn incidence_angle(scene: &RawScene, path: &RawPath, tx: V3, i: usize) -> f64 {
    let prev = if i == 0 { tx } else { path.points[i - 1] };
    let d = sub(path.points[i], prev);
    let (_, _, _, n) = frame(scene, path.surfaces[i]);
    (dot(d, n).abs() / norm(d)).acos()
}

/// Material parameters for a reflecting surface.
#[derive(Debug, Clone, Copy)]
pub struct RawMaterial {
    pub rel_permittivity: f64,
    /// Conductivity `a * (f / 1 GHz)^b` in S/m.
    pub cond_a: f64,
    pub cond_b: f64,
}

impl RawMaterial {
    pub fn conductivity(&self, freq: f64) -> f64 {
        self.cond_a * (freq / 1e9).powf(self.cond_b)
    }
}

/// Field amplitude of one path: spreading loss, TX gain (amplitude), one
/// Fresnel factor per bounce, and propagation phase.
pub fn path_field(
    scene: &RawScene,
    path: &RawPath,
    tx: V3,
    freq: f64,
    tx_gain: f64,
    wall_mat: RawMaterial,
    floor_mat: RawMaterial,
) -> Complex64 {
    let lambda = C0 / freq;
    let mut field = Complex64::new(lambda / (4.0 * PI * path.length) * tx_gain.sqrt(), 0.0);
    for i in 0..path.surfaces.len() {
        let m = if path.surfaces[i].is_none() {
            floor_mat
        } else {
            wall_mat
        };
        field *= fresnel_te(
            m.rel_permittivity,
            m.conductivity(freq),
            freq,
            incidence_angle(scene, path, tx, i),
        );
    }
    let phase = -2.0 * PI * path.length / lambda;
    field * Complex64::new(phase.cos(), phase.sin())
}

/// UPA gain toward the first segment of a path, for an array facing down
/// (boresight -z): elevation measured from -z, azimuth from +x.
pub fn departure_gain(rows: usize, cols: usize, from: V3, to: V3) -> f64 {
    let d = sub(to, from);
    let el = (d[0] * d[0] + d[1] * d[1]).sqrt().atan2(-d[2]);
    let az = d[1].atan2(d[0]);
    upa_gain_bruteforce(rows, cols, 0.5, az, el)
}

/// Coherent sum in dBm (`-inf` for no energy).
pub fn coherent_dbm(fields: &[Complex64], tx_dbm: f64) -> f64 {
    let s: Complex64 = fields.iter().sum();
    if s.norm() == 0.0 {
        f64::NEG_INFINITY
    } else {
        tx_dbm + 10.0 * s.norm_sqr().log10()
    }
}

/// Central finite differences of `f` at `x` for the listed coordinates.
pub fn central_difference(mut f: impl FnMut(&[f64]) -> f64, x: &[f64], indices: &[usize], h: f64) -> Vec<f64> {
    let mut xs = x.to_vec();
    indices
        .iter()
        .map(|&i| {
            let orig = xs[i];
            xs[i] = orig + h;
            let fp = f(&xs);
            xs[i] = orig - h;
            let fm = f(&xs);
            xs[i] = orig;
            (fp - fm) / (2.0 * h)
        })
        .collect()
}

/// `|a - b| / max(|a|, |b|, floor)`.
pub fn relative_error(a: f64, b: f64, floor: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(floor)
}

/// SSIM over every 11x11 window, each computed directly from a 2-D
/// Gaussian weight table. Returns `(mean ssim, mean contrast-structure)`.
pub fn ssim_direct(x: &[f64], y: &[f64], h: usize, w: usize) -> (f64, f64) {
    const K: usize = 11;
    let sigma = 1.5f64;
    let mut wt = [[0.0f64; K]; K];
    let mut total = 0.0;
    for (i, row) in wt.iter_mut().enumerate() {
        for (j, v) in row.iter_mut().enumerate() {
            let dy = i as f64 - 5.0;
            let dx = j as f64 - 5.0;
            *v = (-(dx * dx + dy * dy) / (2.0 * sigma * sigma)).exp();
            total += *v;
        }
    }
    let c1 = 0.01f64.powi(2);
    let c2 = 0.03f64.powi(2);
    let (mut ssim, mut cs, mut count) = (0.0, 0.0, 0.0);
    for top in 0..=h - K {
        for left in 0..=w - K {
            let (mut mx, mut my) = (0.0, 0.0);
            for i in 0..K {
                for j in 0..K {
                    let q = wt[i][j] / total;
                    mx += q * x[(top + i) * w + left + j];
                    my += q * y[(top + i) * w + left + j];
                }
            }
            let (mut vx, mut vy, mut cxy) = (0.0, 0.0, 0.0);
            for i in 0..K {
                for j in 0..K {
                    let q = wt[i][j] / total;
                    let a = x[(top + i) * w + left + j] - mx;
                    let b = y[(top + i) * w + left + j] - my;
                    vx += q * a * a;
                    vy += q * b * b;
                    cxy += q * a * b;
                }
            }
            let l = (2.0 * mx * my + c1) / (mx * mx + my * my + c1);
            let c = (2.0 * cxy + c2) / (vx + vy + c2);
            ssim += l * c;
            cs += c;
            count += 1.0;
        }
    }
    (ssim / count, cs / count)
}

/// Multi-scale SSIM from [`ssim_direct`], 2x2 mean pooling between scales,
/// standard exponents renormalized over scales with side >= 11, negative
/// factors clamped to zero.
pub fn ms_ssim_direct(x: &[f64], y: &[f64], h: usize, w: usize) -> f64 {
    let weights = [0.0448, 0.2856, 0.3001, 0.2363, 0.1333];
    let mut scales = 0;
    let (mut sh, mut sw) = (h, w);
    while scales < 5 && sh.min(sw) >= 11 {
        scales += 1;
        sh /= 2;
        sw /= 2;
    }
    let wsum: f64 = weights[..scales].iter().sum();
    let (mut a, mut b, mut ch, mut cw) = (x.to_vec(), y.to_vec(), h, w);
    let mut result = 1.0;
    for s in 0..scales {
        let (ssim, cs) = ssim_direct(&a, &b, ch, cw);
        let v = if s + 1 == scales { ssim } else { cs };
        result *= v.max(0.0).powf(weights[s] / wsum);
        let pool = |img: &[f64]| -> Vec<f64> {
            let mut out = Vec::new();
            for r in 0..ch / 2 {
                for c in 0..cw / 2 {
                    let m = img[2 * r * cw + 2 * c]
                        + img[2 * r * cw + 2 * c + 1]
                        + img[(2 * r + 1) * cw + 2 * c]
                        + img[(2 * r + 1) * cw + 2 * c + 1];
                    out.push(m / 4.0);
                }
            }
            out
        };
        a = pool(&a);
        b = pool(&b);
        ch /= 2;
        cw /= 2;
    }
    result
}

/// 3x3 Sobel responses with clamped (replicated) borders.
pub fn sobel_direct(img: &[f64], h: usize, w: usize) -> (Vec<f64>, Vec<f64>) {
    let at = |r: isize, c: isize| img[(r.clamp(0, h as isize - 1) as usize) * w + c.clamp(0, w as isize - 1) as usize];
    let mut gx = vec![0.0; h * w];
    let mut gy = vec![0.0; h * w];
    for r in 0..h as isize {
        for c in 0..w as isize {
            gx[r as usize * w + c as usize] = (at(r - 1, c + 1) + 2.0 * at(r, c + 1) + at(r + 1, c + 1))
                - (at(r - 1, c - 1) + 2.0 * at(r, c - 1) + at(r + 1, c - 1));
            gy[r as usize * w + c as usize] = (at(r + 1, c - 1) + 2.0 * at(r + 1, c) + at(r + 1, c + 1))
                - (at(r - 1, c - 1) + 2.0 * at(r - 1, c) + at(r - 1, c + 1));
        }
    }
    (gx, gy)
}

/// Gradient loss for one single-channel map pair, in two passes:
/// normalized magnitude distributions and KL first, then per-pixel cosine.
/// Returns `(kl, direction)`.
pub fn gradient_loss_direct(real: &[f64], fake: &[f64], h: usize, w: usize, eps: f64) -> (f64, f64) {
    let (rx, ry) = sobel_direct(real, h, w);
    let (fx, fy) = sobel_direct(fake, h, w);
    let mags = |gx: &[f64], gy: &[f64]| -> Vec<f64> {
        gx.iter()
            .zip(gy)
            .map(|(a, b)| (a * a + b * b + eps * eps).sqrt() + eps)
            .collect()
    };
    let mr = mags(&rx, &ry);
    let mf = mags(&fx, &fy);
    let (sr, sf): (f64, f64) = (mr.iter().sum(), mf.iter().sum());
    let mut kl = 0.0;
    for i in 0..h * w {
        let p = mr[i] / sr;
        let q = mf[i] / sf;
        kl += p * (p / q).ln();
    }
    let mut dir = 0.0;
    let mut n = 0usize;
    for i in 0..h * w {
        let a = rx[i] * rx[i] + ry[i] * ry[i];
        let b = fx[i] * fx[i] + fy[i] * fy[i];
        if a.sqrt() < eps && b.sqrt() < eps {
            continue;
        }
        let cos = (rx[i] * fx[i] + ry[i] * fy[i]) / (a * b + eps.powi(4)).sqrt();
        dir += 1.0 - cos;
        n += 1;
    }
    (kl, if n == 0 { 0.0 } else { dir / n as f64 })
}

/// Generator parameter count from an explicit list of layer shapes.
pub fn generator_parameter_count(
    z_dim: usize,
    base: usize,
    resolution: usize,
    cond_channels: usize,
    hidden: usize,
    out_channels: usize,
) -> usize {
    let mut layers: Vec<(usize, usize, usize, bool)> = Vec::new(); // (out, in, kernel, bias)
    let c0 = 8 * base;
    layers.push((16 * c0, z_dim, 1, true));
    let mut res = 4;
    let mut ch = c0;
    while res < resolution {
        let (ci, co) = (ch, ch / 2);
        let spade = |c: usize, layers: &mut Vec<(usize, usize, usize, bool)>| {
            layers.push((hidden, cond_channels, 3, true));
            layers.push((c, hidden, 3, true));
            layers.push((c, hidden, 3, true));
        };
        spade(ci, &mut layers);
        layers.push((co, ci, 3, true));
        spade(co, &mut layers);
        layers.push((co, co, 3, true));
        if ci != co {
            spade(ci, &mut layers);
            layers.push((co, ci, 1, false));
        }
        ch = co;
        res *= 2;
    }
    layers.push((out_channels, ch, 3, true));
    layers
        .iter()
        .map(|&(o, i, k, b)| o * i * k * k + if b { o } else { 0 })
        .sum()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn friis_at_one_meter() {
        assert!((friis_dbm(1.0, 28e9, 0.0) + 61.39).abs() < 0.01);
    }

    #[test]
    fn fresnel_normal_incidence_lossless() {
        // (1 - sqrt(er)) / (1 + sqrt(er)) for a lossless dielectric
        let g = fresnel_te(4.0, 0.0, 1e9, 0.0);
        assert!((g.re + 1.0 / 3.0).abs() < 1e-9 && g.im.abs() < 1e-9);
    }

    #[test]
    fn fermat_single_mirror() {
        let scene = RawScene {
            walls: vec![RawWall {
                a: [0.0, 0.0],
                b: [10.0, 0.0],
                height: 4.0,
            }],
            floor: vec![[0.0, -5.0], [10.0, -5.0], [10.0, 5.0], [0.0, 5.0]],
        };
        let tx = [2.0, 1.0, 1.5];
        let rx = [6.0, 3.0, 1.5];
        let paths = specular_paths(&scene, tx, rx, 1);
        let wall = paths.iter().find(|p| p.surfaces == vec![Some(0)]).unwrap();
        let image = [2.0, -1.0, 1.5];
        assert!((wall.length - norm(sub(rx, image))).abs() < 1e-12);
    }

    #[test]
    fn direct_ssim_identity() {
        let x: Vec<f64> = (0..32 * 32).map(|i| ((i * 7919) % 101) as f64 / 100.0).collect();
        assert!((ms_ssim_direct(&x, &x, 32, 32) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn triangle_fan_area() {
        let l = [
            [0.0, 0.0],
            [10.0, 0.0],
            [10.0, 5.0],
            [5.0, 5.0],
            [5.0, 10.0],
            [0.0, 10.0],
        ];
        assert!((polygon_area(&l) - 75.0).abs() < 1e-12);
    }
}
