//! Indoor floor plans: walls, materials, base-station pose, and their
//! rasterization into semantic maps.

use crate::geometry::{polygon_area, polygon_contains, segment_touches_rect, Point2, Vec3};
use serde::{Deserialize, Serialize};
use std::fmt;
use std::path::Path;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum SceneError {
    #[error("non-positive room dimension: {0}")]
    NonPositiveDimension(String),
    #[error("base station at ({x}, {y}) is outside the walkable area")]
    BsOutsideWalkable { x: f64, y: f64 },
    #[error("invalid grid: {0}")]
    InvalidGrid(String),
    #[error("scene is invalid: {}", .0.iter().map(|v| v.to_string()).collect::<Vec<_>>().join("; "))]
    Invalid(Vec<SceneViolation>),
    #[error("unknown material preset `{0}` (known: brick, concrete)")]
    UnknownMaterial(String),
    #[error("scene descriptor: {0}")]
    Descriptor(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Dielectric description with a frequency-dependent conductivity
/// `sigma(f) = a * f_GHz^b` in S/m.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Material {
    pub name: String,
    pub rel_permittivity: f64,
    /// `(a, b)` coefficients of the conductivity power law.
    pub conductivity: (f64, f64),
}

impl Material {
    pub fn brick() -> Self {
        Self {
            name: "brick".into(),
            rel_permittivity: 3.91,
            conductivity: (0.0238, 0.16),
        }
    }

    pub fn concrete() -> Self {
        Self {
            name: "concrete".into(),
            rel_permittivity: 5.24,
            conductivity: (0.0462, 0.7822),
        }
    }

    pub fn preset(name: &str) -> Result<Self, SceneError> {
        match name {
            "brick" => Ok(Self::brick()),
            "concrete" => Ok(Self::concrete()),
            other => Err(SceneError::UnknownMaterial(other.to_string())),
        }
    }

    /// Conductivity in S/m at `freq_hz`.
    pub fn conductivity_at(&self, freq_hz: f64) -> f64 {
        let (a, b) = self.conductivity;
        a * (freq_hz / 1e9).powf(b)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Wall {
    pub a: Point2,
    pub b: Point2,
    pub height: f64,
    pub material: Material,
}

impl Wall {
    pub fn length(&self) -> f64 {
        self.a.dist(self.b)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Bounds {
    pub min: Point2,
    pub max: Point2,
}

impl Bounds {
    pub fn width(&self) -> f64 {
        self.max.x - self.min.x
    }

    pub fn depth(&self) -> f64 {
        self.max.y - self.min.y
    }

    pub fn contains(&self, p: Point2) -> bool {
        p.x >= self.min.x && p.x <= self.max.x && p.y >= self.min.y && p.y <= self.max.y
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scene {
    pub id: String,
    pub bounds: Bounds,
    pub walls: Vec<Wall>,
    pub floor_material: Material,
    /// Walkable footprint; the floor exists only inside it.
    pub footprint: Vec<Point2>,
    pub bs_position: Vec3,
    pub bs_height: f64,
    pub rx_height: f64,
}

impl Scene {
    pub fn walkable_area(&self) -> f64 {
        polygon_area(&self.footprint)
    }

    pub fn is_walkable(&self, p: Point2) -> bool {
        polygon_contains(&self.footprint, p)
    }

    /// Same room with the base station moved to `(x, y)` at the current height.
    pub fn with_bs(&self, p: Point2) -> Result<Scene, SceneError> {
        if !self.is_walkable(p) {
            return Err(SceneError::BsOutsideWalkable { x: p.x, y: p.y });
        }
        let mut s = self.clone();
        s.bs_position = p.with_z(self.bs_height);
        Ok(s)
    }
}

/// One violated scene invariant.
#[derive(Debug, Clone, PartialEq)]
pub enum SceneViolation {
    BsOutsideBounds,
    BsOutsideWalkable,
    BsHeightMismatch,
    BsAboveWallHeight,
    RxHeightNotPositive,
    RxNotBelowBs,
    RxAboveWallHeight,
    DegenerateWall(usize),
    WallHeightNotPositive(usize),
    WallOutsideBounds(usize),
    BadPermittivity(String),
    NegativeConductivity(String),
    EmptyBounds,
}

impl fmt::Display for SceneViolation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::BsOutsideBounds => write!(f, "bs outside bounds"),
            Self::BsOutsideWalkable => write!(f, "bs outside walkable area"),
            Self::BsHeightMismatch => write!(f, "bs position z differs from bs height"),
            Self::BsAboveWallHeight => write!(f, "bs above wall height"),
            Self::RxHeightNotPositive => write!(f, "rx height not positive"),
            Self::RxNotBelowBs => write!(f, "rx not below bs"),
            Self::RxAboveWallHeight => write!(f, "rx above wall height"),
            Self::DegenerateWall(i) => write!(f, "wall {i} has coincident endpoints"),
            Self::WallHeightNotPositive(i) => write!(f, "wall {i} height not positive"),
            Self::WallOutsideBounds(i) => write!(f, "wall {i} outside bounds"),
            Self::BadPermittivity(m) => write!(f, "material {m} has permittivity below 1"),
            Self::NegativeConductivity(m) => write!(f, "material {m} has negative conductivity"),
            Self::EmptyBounds => write!(f, "bounds are empty"),
        }
    }
}

fn check_material(m: &Material, out: &mut Vec<SceneViolation>) {
    if !(m.rel_permittivity >= 1.0) {
        out.push(SceneViolation::BadPermittivity(m.name.clone()));
    }
    if !(m.conductivity.0 >= 0.0) {
        out.push(SceneViolation::NegativeConductivity(m.name.clone()));
    }
}

/// Every violated scene invariant; empty iff the scene is valid.
///
/// An RX above the walls is reported once as `rx above wall height`, not
/// additionally as `rx not below bs` (the latter is implied since the BS may
/// not exceed the walls either).
pub fn validate_scene(scene: &Scene) -> Vec<SceneViolation> {
    let mut out = Vec::new();
    let b = scene.bounds;
    if !(b.width() > 0.0 && b.depth() > 0.0) {
        out.push(SceneViolation::EmptyBounds);
    }
    let bs = scene.bs_position;
    if !b.contains(bs.xy()) {
        out.push(SceneViolation::BsOutsideBounds);
    } else if !scene.footprint.is_empty() && !scene.is_walkable(bs.xy()) {
        out.push(SceneViolation::BsOutsideWalkable);
    }
    if (bs.z - scene.bs_height).abs() > 1e-9 {
        out.push(SceneViolation::BsHeightMismatch);
    }
    let min_wall = scene.walls.iter().map(|w| w.height).fold(f64::INFINITY, f64::min);
    if !(scene.rx_height > 0.0) {
        out.push(SceneViolation::RxHeightNotPositive);
    }
    if scene.rx_height >= min_wall {
        out.push(SceneViolation::RxAboveWallHeight);
    } else if scene.rx_height >= scene.bs_height {
        out.push(SceneViolation::RxNotBelowBs);
    }
    if scene.bs_height > min_wall {
        out.push(SceneViolation::BsAboveWallHeight);
    }
    for (i, w) in scene.walls.iter().enumerate() {
        if w.a == w.b {
            out.push(SceneViolation::DegenerateWall(i));
        }
        if !(w.height > 0.0) {
            out.push(SceneViolation::WallHeightNotPositive(i));
        }
        if !b.contains(w.a) || !b.contains(w.b) {
            out.push(SceneViolation::WallOutsideBounds(i));
        }
        check_material(&w.material, &mut out);
    }
    check_material(&scene.floor_material, &mut out);
    out.dedup();
    out
}

/// Supported room shapes. All rooms have their lower-left corner at the origin.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "shape", rename_all = "snake_case")]
pub enum RoomShape {
    /// Floor only, no walls.
    Open { width: f64, depth: f64 },
    /// Closed rectangle with optional interior partition segments.
    Rectangle {
        width: f64,
        depth: f64,
        #[serde(default)]
        partitions: Vec<[Point2; 2]>,
    },
    /// Rectangle with the `notch_width x notch_depth` quadrant at the
    /// max-x/max-y corner removed.
    LShape {
        width: f64,
        depth: f64,
        notch_width: f64,
        notch_depth: f64,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoomLayout {
    pub id: String,
    pub shape: RoomShape,
    pub wall_height: f64,
    pub wall_material: Material,
    pub floor_material: Material,
    pub bs: Point2,
    pub bs_height: f64,
    pub rx_height: f64,
}

impl RoomLayout {
    /// Layout with the default heights and materials (4 m brick walls,
    /// concrete floor, BS at 3 m, RX at 1.5 m).
    pub fn new(id: impl Into<String>, shape: RoomShape, bs: Point2) -> Self {
        Self {
            id: id.into(),
            shape,
            wall_height: 4.0,
            wall_material: Material::brick(),
            floor_material: Material::concrete(),
            bs,
            bs_height: 3.0,
            rx_height: 1.5,
        }
    }
}

fn closed_loop(points: &[Point2]) -> Vec<[Point2; 2]> {
    (0..points.len())
        .map(|i| [points[i], points[(i + 1) % points.len()]])
        .collect()
}

pub fn build_room(layout: &RoomLayout) -> Result<Scene, SceneError> {
    let positive = |name: &str, v: f64| {
        if v > 0.0 && v.is_finite() {
            Ok(())
        } else {
            Err(SceneError::NonPositiveDimension(format!("{name} = {v}")))
        }
    };
    let (width, depth, footprint, segments) = match &layout.shape {
        RoomShape::Open { width, depth } => {
            positive("width", *width)?;
            positive("depth", *depth)?;
            let fp = rect_points(*width, *depth);
            (*width, *depth, fp, Vec::new())
        }
        RoomShape::Rectangle {
            width,
            depth,
            partitions,
        } => {
            positive("width", *width)?;
            positive("depth", *depth)?;
            let fp = rect_points(*width, *depth);
            let mut segs = closed_loop(&fp);
            segs.extend(partitions.iter().copied());
            (*width, *depth, fp, segs)
        }
        RoomShape::LShape {
            width,
            depth,
            notch_width,
            notch_depth,
        } => {
            positive("width", *width)?;
            positive("depth", *depth)?;
            positive("notch_width", *notch_width)?;
            positive("notch_depth", *notch_depth)?;
            if notch_width >= width || notch_depth >= depth {
                return Err(SceneError::NonPositiveDimension("notch consumes the whole room".into()));
            }
            let (w, d, nw, nd) = (*width, *depth, *notch_width, *notch_depth);
            let fp = vec![
                Point2::new(0.0, 0.0),
                Point2::new(w, 0.0),
                Point2::new(w, d - nd),
                Point2::new(w - nw, d - nd),
                Point2::new(w - nw, d),
                Point2::new(0.0, d),
            ];
            let segs = closed_loop(&fp);
            (w, d, fp, segs)
        }
    };
    positive("wall_height", layout.wall_height)?;
    if !polygon_contains(&footprint, layout.bs) {
        return Err(SceneError::BsOutsideWalkable {
            x: layout.bs.x,
            y: layout.bs.y,
        });
    }
    let walls = segments
        .into_iter()
        .map(|[a, b]| Wall {
            a,
            b,
            height: layout.wall_height,
            material: layout.wall_material.clone(),
        })
        .collect();
    let scene = Scene {
        id: layout.id.clone(),
        bounds: Bounds {
            min: Point2::new(0.0, 0.0),
            max: Point2::new(width, depth),
        },
        walls,
        floor_material: layout.floor_material.clone(),
        footprint,
        bs_position: layout.bs.with_z(layout.bs_height),
        bs_height: layout.bs_height,
        rx_height: layout.rx_height,
    };
    let violations = validate_scene(&scene);
    if violations.is_empty() {
        Ok(scene)
    } else {
        Err(SceneError::Invalid(violations))
    }
}

fn rect_points(w: f64, d: f64) -> Vec<Point2> {
    vec![
        Point2::new(0.0, 0.0),
        Point2::new(w, 0.0),
        Point2::new(w, d),
        Point2::new(0.0, d),
    ]
}

/// The five built-in 10 x 10 m floor plans: four rectangular variants used
/// for training and the L-shaped room held out for testing.
pub fn room_catalog() -> Vec<RoomLayout> {
    let p = Point2::new;
    let center = p(5.0 - 10.0 / 64.0, 5.0 - 10.0 / 64.0);
    vec![
        RoomLayout::new(
            "room1",
            RoomShape::Rectangle {
                width: 10.0,
                depth: 10.0,
                partitions: vec![],
            },
            center,
        ),
        RoomLayout::new(
            "room2",
            RoomShape::Rectangle {
                width: 10.0,
                depth: 10.0,
                partitions: vec![[p(5.0, 0.0), p(5.0, 6.25)]],
            },
            p(2.5, 5.0),
        ),
        RoomLayout::new(
            "room3",
            RoomShape::Rectangle {
                width: 10.0,
                depth: 10.0,
                partitions: vec![[p(0.0, 6.25), p(6.25, 6.25)], [p(6.25, 10.0), p(6.25, 8.75)]],
            },
            p(5.0, 2.5),
        ),
        RoomLayout::new(
            "room4",
            RoomShape::Rectangle {
                width: 10.0,
                depth: 10.0,
                partitions: vec![[p(3.75, 2.5), p(3.75, 10.0)], [p(7.5, 0.0), p(7.5, 7.5)]],
            },
            p(2.0, 5.0),
        ),
        RoomLayout::new(
            "lshape",
            RoomShape::LShape {
                width: 10.0,
                depth: 10.0,
                notch_width: 5.0,
                notch_depth: 5.0,
            },
            p(2.5, 2.5),
        ),
    ]
}

pub fn catalog_room(id: &str) -> Option<RoomLayout> {
    room_catalog().into_iter().find(|r| r.id == id)
}

/// Cell growth, in cell sizes, applied when testing walls against cells.
pub const RASTER_TOLERANCE: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    pub nx: usize,
    pub ny: usize,
    pub cell_size: f64,
}

impl GridSpec {
    /// Square-cell grid covering `bounds` exactly.
    pub fn for_bounds(nx: usize, ny: usize, bounds: &Bounds) -> Result<Self, SceneError> {
        if nx < 8 || ny < 8 {
            return Err(SceneError::InvalidGrid(format!("grid {nx}x{ny} below the 8x8 minimum")));
        }
        let cs = bounds.width() / nx as f64;
        let cs_y = bounds.depth() / ny as f64;
        if !(cs > 0.0) || (cs - cs_y).abs() > 1e-12 * cs.max(cs_y) {
            return Err(SceneError::InvalidGrid(format!(
                "cells are not square: {cs} x {cs_y} m"
            )));
        }
        Ok(Self { nx, ny, cell_size: cs })
    }

    pub fn check_covers(&self, bounds: &Bounds) -> Result<(), SceneError> {
        let w = self.nx as f64 * self.cell_size;
        let d = self.ny as f64 * self.cell_size;
        if self.nx < 8 || self.ny < 8 || !(self.cell_size > 0.0) {
            return Err(SceneError::InvalidGrid(format!("{self:?}")));
        }
        if (w - bounds.width()).abs() > 1e-9 || (d - bounds.depth()).abs() > 1e-9 {
            return Err(SceneError::InvalidGrid(format!(
                "grid spans {w} x {d} m but scene is {} x {} m",
                bounds.width(),
                bounds.depth()
            )));
        }
        Ok(())
    }

    /// Cell `(col, row)` containing `p`, clamped to the grid.
    pub fn cell_of(&self, bounds: &Bounds, p: Point2) -> (usize, usize) {
        let col = ((p.x - bounds.min.x) / self.cell_size).floor();
        let row = ((p.y - bounds.min.y) / self.cell_size).floor();
        (
            (col.max(0.0) as usize).min(self.nx - 1),
            (row.max(0.0) as usize).min(self.ny - 1),
        )
    }

    pub fn cell_center(&self, bounds: &Bounds, col: usize, row: usize) -> Point2 {
        Point2::new(
            bounds.min.x + (col as f64 + 0.5) * self.cell_size,
            bounds.min.y + (row as f64 + 0.5) * self.cell_size,
        )
    }

    /// Closed cell rectangle grown by [`RASTER_TOLERANCE`] cell sizes so a
    /// wall on a shared edge touches both neighbours regardless of rounding.
    fn cell_rect(&self, bounds: &Bounds, col: usize, row: usize) -> (Point2, Point2) {
        let tol = RASTER_TOLERANCE * self.cell_size;
        let lo = Point2::new(
            bounds.min.x + col as f64 * self.cell_size - tol,
            bounds.min.y + row as f64 * self.cell_size - tol,
        );
        let hi = Point2::new(
            bounds.min.x + (col + 1) as f64 * self.cell_size + tol,
            bounds.min.y + (row + 1) as f64 * self.cell_size + tol,
        );
        (lo, hi)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum CellClass {
    Floor,
    Wall,
    Bs,
}

impl CellClass {
    /// Channel index in the one-hot view.
    pub fn channel(self) -> usize {
        match self {
            CellClass::Floor => 0,
            CellClass::Wall => 1,
            CellClass::Bs => 2,
        }
    }
}

/// Row-major class raster; row index follows +y, column index follows +x.
#[derive(Debug, Clone, PartialEq)]
pub struct SemanticMap {
    pub width: usize,
    pub height: usize,
    pub classes: Vec<CellClass>,
}

impl SemanticMap {
    pub const CHANNELS: usize = 3;

    pub fn class_at(&self, col: usize, row: usize) -> CellClass {
        self.classes[row * self.width + col]
    }

    pub fn count(&self, class: CellClass) -> usize {
        self.classes.iter().filter(|&&c| c == class).count()
    }

    /// `(col, row)` of the base-station cell.
    pub fn bs_cell(&self) -> Option<(usize, usize)> {
        self.classes
            .iter()
            .position(|&c| c == CellClass::Bs)
            .map(|i| (i % self.width, i / self.width))
    }

    /// Channel-major one-hot view `[3, height, width]` as (floor, wall, bs).
    pub fn one_hot(&self) -> Vec<f32> {
        let plane = self.width * self.height;
        let mut out = vec![0.0; Self::CHANNELS * plane];
        for (i, c) in self.classes.iter().enumerate() {
            out[c.channel() * plane + i] = 1.0;
        }
        out
    }
}

/// Wall cells are those whose closed rectangle touches a wall segment; the
/// cell containing the BS is labeled `Bs` regardless.
pub fn rasterize_semantic(scene: &Scene, grid: &GridSpec) -> SemanticMap {
    let b = &scene.bounds;
    let mut classes = vec![CellClass::Floor; grid.nx * grid.ny];
    for wall in &scene.walls {
        let (c0, r0) = grid.cell_of(b, Point2::new(wall.a.x.min(wall.b.x), wall.a.y.min(wall.b.y)));
        let (c1, r1) = grid.cell_of(b, Point2::new(wall.a.x.max(wall.b.x), wall.a.y.max(wall.b.y)));
        // neighbours on the low side can touch through a shared edge
        for row in r0.saturating_sub(1)..=(r1 + 1).min(grid.ny - 1) {
            for col in c0.saturating_sub(1)..=(c1 + 1).min(grid.nx - 1) {
                let (lo, hi) = grid.cell_rect(b, col, row);
                if segment_touches_rect(wall.a, wall.b, lo, hi) {
                    classes[row * grid.nx + col] = CellClass::Wall;
                }
            }
        }
    }
    let (bc, br) = grid.cell_of(b, scene.bs_position.xy());
    classes[br * grid.nx + bc] = CellClass::Bs;
    SemanticMap {
        width: grid.nx,
        height: grid.ny,
        classes,
    }
}

/// Material reference in a descriptor file: a preset name or an inline table.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(untagged)]
pub enum MaterialSpec {
    Preset(String),
    Custom(Material),
}

impl MaterialSpec {
    fn resolve(&self) -> Result<Material, SceneError> {
        match self {
            MaterialSpec::Preset(n) => Material::preset(n),
            MaterialSpec::Custom(m) => Ok(m.clone()),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MaterialsSection {
    pub wall: MaterialSpec,
    pub floor: MaterialSpec,
}

impl Default for MaterialsSection {
    fn default() -> Self {
        Self {
            wall: MaterialSpec::Preset("brick".into()),
            floor: MaterialSpec::Preset("concrete".into()),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct WallEntry {
    pub from: [f64; 2],
    pub to: [f64; 2],
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct BsEntry {
    pub x: f64,
    pub y: f64,
    pub z: f64,
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct GridEntry {
    pub nx: usize,
    pub ny: usize,
}

/// On-disk scene descriptor (TOML).
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SceneDescriptor {
    #[serde(default = "default_id")]
    pub id: String,
    /// `open`, `rectangle` or `l_shape`.
    pub shape: String,
    pub dimensions_m: [f64; 2],
    /// Removed quadrant for `l_shape`.
    #[serde(default)]
    pub notch_m: Option<[f64; 2]>,
    /// Interior partitions (the perimeter is implied by `shape`).
    #[serde(default)]
    pub walls: Vec<WallEntry>,
    #[serde(default = "default_wall_height")]
    pub wall_height: f64,
    #[serde(default)]
    pub materials: MaterialsSection,
    pub bs: BsEntry,
    #[serde(default = "default_rx_height")]
    pub rx_height: f64,
    pub grid: GridEntry,
}

fn default_id() -> String {
    "scene".into()
}
fn default_wall_height() -> f64 {
    4.0
}
fn default_rx_height() -> f64 {
    1.5
}

impl SceneDescriptor {
    pub fn parse(text: &str) -> Result<Self, SceneError> {
        toml::from_str(text).map_err(|e| SceneError::Descriptor(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self, SceneError> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("descriptor serializes")
    }

    pub fn layout(&self) -> Result<RoomLayout, SceneError> {
        let [w, d] = self.dimensions_m;
        let shape = match self.shape.as_str() {
            "open" => RoomShape::Open { width: w, depth: d },
            "rectangle" => RoomShape::Rectangle {
                width: w,
                depth: d,
                partitions: self
                    .walls
                    .iter()
                    .map(|e| [Point2::new(e.from[0], e.from[1]), Point2::new(e.to[0], e.to[1])])
                    .collect(),
            },
            "l_shape" => {
                let [nw, nd] = self
                    .notch_m
                    .ok_or_else(|| SceneError::Descriptor("l_shape requires notch_m".into()))?;
                RoomShape::LShape {
                    width: w,
                    depth: d,
                    notch_width: nw,
                    notch_depth: nd,
                }
            }
            other => {
                return Err(SceneError::Descriptor(format!(
                    "unknown shape `{other}` (expected open, rectangle, l_shape)"
                )))
            }
        };
        if self.shape == "l_shape" && !self.walls.is_empty() {
            return Err(SceneError::Descriptor(
                "interior walls are only supported for rectangle".into(),
            ));
        }
        Ok(RoomLayout {
            id: self.id.clone(),
            shape,
            wall_height: self.wall_height,
            wall_material: self.materials.wall.resolve()?,
            floor_material: self.materials.floor.resolve()?,
            bs: Point2::new(self.bs.x, self.bs.y),
            bs_height: self.bs.z,
            rx_height: self.rx_height,
        })
    }

    pub fn build(&self) -> Result<(Scene, GridSpec), SceneError> {
        let scene = build_room(&self.layout()?)?;
        let grid = GridSpec::for_bounds(self.grid.nx, self.grid.ny, &scene.bounds)?;
        Ok((scene, grid))
    }

    pub fn from_layout(layout: &RoomLayout, grid: &GridSpec) -> Self {
        let (shape, dims, notch, walls) = match &layout.shape {
            RoomShape::Open { width, depth } => ("open", [*width, *depth], None, vec![]),
            RoomShape::Rectangle {
                width,
                depth,
                partitions,
            } => (
                "rectangle",
                [*width, *depth],
                None,
                partitions
                    .iter()
                    .map(|[a, b]| WallEntry {
                        from: [a.x, a.y],
                        to: [b.x, b.y],
                    })
                    .collect(),
            ),
            RoomShape::LShape {
                width,
                depth,
                notch_width,
                notch_depth,
            } => ("l_shape", [*width, *depth], Some([*notch_width, *notch_depth]), vec![]),
        };
        Self {
            id: layout.id.clone(),
            shape: shape.into(),
            dimensions_m: dims,
            notch_m: notch,
            walls,
            wall_height: layout.wall_height,
            materials: MaterialsSection {
                wall: MaterialSpec::Custom(layout.wall_material.clone()),
                floor: MaterialSpec::Custom(layout.floor_material.clone()),
            },
            bs: BsEntry {
                x: layout.bs.x,
                y: layout.bs.y,
                z: layout.bs_height,
            },
            rx_height: layout.rx_height,
            grid: GridEntry {
                nx: grid.nx,
                ny: grid.ny,
            },
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn square() -> Scene {
        build_room(&RoomLayout::new(
            "sq",
            RoomShape::Rectangle {
                width: 10.0,
                depth: 10.0,
                partitions: vec![],
            },
            Point2::new(5.0, 5.0),
        ))
        .unwrap()
    }

    #[test]
    fn square_room_has_four_walls_and_centered_bs() {
        let s = square();
        assert_eq!(s.walls.len(), 4);
        assert_eq!(s.bs_position, Vec3::new(5.0, 5.0, 3.0));
        assert!(validate_scene(&s).is_empty());
    }

    #[test]
    fn degenerate_room_rejected() {
        let r = build_room(&RoomLayout::new(
            "flat",
            RoomShape::Rectangle {
                width: 0.0,
                depth: 10.0,
                partitions: vec![],
            },
            Point2::new(0.0, 5.0),
        ));
        assert!(matches!(r, Err(SceneError::NonPositiveDimension(_))));
    }

    #[test]
    fn bs_in_notch_rejected() {
        let mut l = catalog_room("lshape").unwrap();
        l.bs = Point2::new(7.5, 7.5);
        assert!(matches!(build_room(&l), Err(SceneError::BsOutsideWalkable { .. })));
    }

    #[test]
    fn violations_reported() {
        let mut s = square();
        s.bs_position = Vec3::new(20.0, 20.0, 3.0);
        let v: Vec<String> = validate_scene(&s).iter().map(|v| v.to_string()).collect();
        assert_eq!(v, vec!["bs outside bounds"]);

        let mut s = square();
        s.rx_height = 5.0;
        let v: Vec<String> = validate_scene(&s).iter().map(|v| v.to_string()).collect();
        assert_eq!(v, vec!["rx above wall height"]);
    }

    #[test]
    fn empty_scene_rasterizes_to_floor_and_one_bs() {
        let s = build_room(&RoomLayout::new(
            "open",
            RoomShape::Open { width: 8.0, depth: 8.0 },
            Point2::new(4.0, 4.0),
        ))
        .unwrap();
        let g = GridSpec::for_bounds(8, 8, &s.bounds).unwrap();
        let m = rasterize_semantic(&s, &g);
        assert_eq!(m.count(CellClass::Floor), 63);
        assert_eq!(m.count(CellClass::Bs), 1);
        assert_eq!(m.bs_cell(), Some((4, 4)));
    }

    #[test]
    fn one_hot_rows_sum_to_one() {
        let s = square();
        let g = GridSpec::for_bounds(16, 16, &s.bounds).unwrap();
        let m = rasterize_semantic(&s, &g);
        let oh = m.one_hot();
        let plane = 256;
        for i in 0..plane {
            let sum: f32 = (0..3).map(|c| oh[c * plane + i]).sum();
            assert_eq!(sum, 1.0);
        }
    }

    #[test]
    fn grid_must_be_square_and_large_enough() {
        let s = square();
        assert!(GridSpec::for_bounds(4, 4, &s.bounds).is_err());
        assert!(GridSpec::for_bounds(32, 16, &s.bounds).is_err());
    }

    #[test]
    fn descriptor_roundtrip() {
        let text = r#"
            id = "hall"
            shape = "rectangle"
            dimensions_m = [10.0, 10.0]
            walls = [{ from = [5.0, 0.0], to = [5.0, 6.0] }]
            rx_height = 1.5
            [materials]
            wall = "brick"
            floor = { name = "tile", rel_permittivity = 4.0, conductivity = [0.01, 0.5] }
            [bs]
            x = 2.0
            y = 2.0
            z = 3.0
            [grid]
            nx = 32
            ny = 32
        "#;
        let d = SceneDescriptor::parse(text).unwrap();
        let (scene, grid) = d.build().unwrap();
        assert_eq!(scene.walls.len(), 5);
        assert_eq!(scene.floor_material.name, "tile");
        assert_eq!(grid.nx, 32);
        let again = SceneDescriptor::parse(&d.to_toml()).unwrap().build().unwrap();
        assert_eq!(again.0, scene);
    }

    #[test]
    fn descriptor_rejects_unknown_keys() {
        let text =
            "shape = \"open\"\ndimensions_m=[8.0,8.0]\ncolour=1\n[bs]\nx=1.0\ny=1.0\nz=3.0\n[grid]\nnx=8\nny=8\n";
        assert!(SceneDescriptor::parse(text).is_err());
    }
}
