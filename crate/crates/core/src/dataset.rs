//! Conditioning sets, sweep execution, shard/manifest I/O and task splits.
//!
//! Shard layout (all little-endian):
//!
//! ```text
//! magic "RADS" | version u32 | samples u32 | height u32 | width u32 | k u32
//! | semantic_channels u32 | pattern_channels u32 | map_channels u32
//! | norm_min f32 | norm_max f32
//! then per sample, f32 values in this order:
//!   semantic one-hot [3, h, w] | pattern [1, h, w] | frequency one-hot [k]
//!   | normalized target [map_channels, h, w]
//! ```

use crate::antenna::{rasterize_pattern, PatternRaster, UpaConfig};
use crate::propagation::{generate_rf_map_with, MapRequest, PropagationError, DEFAULT_NORM_RANGE};
use crate::scene::{
    build_room, catalog_room, rasterize_semantic, CellClass, GridSpec, RoomLayout, SceneError, SemanticMap,
};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::io::{Read, Write};
use std::path::{Path, PathBuf};
use thiserror::Error;

pub const SHARD_MAGIC: &[u8; 4] = b"RADS";
pub const SHARD_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.json";
pub const DEFAULT_CATALOG_HZ: [f64; 3] = [5e9, 28e9, 70e9];

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("frequency {freq} Hz is not in catalog {catalog:?}")]
    UnknownFrequency { freq: f64, catalog: Vec<f64> },
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("infeasible base-station position in {room}: cell ({col}, {row})")]
    InfeasibleBs { room: String, col: usize, row: usize },
    #[error("unknown room `{0}`")]
    UnknownRoom(String),
    #[error("invalid sweep config: {0}")]
    Config(String),
    #[error("manifest is missing a required stratum: {0}")]
    MissingStratum(String),
    #[error("corrupt shard {path}: {reason}")]
    Corrupt { path: PathBuf, reason: String },
    #[error(transparent)]
    Scene(#[from] SceneError),
    #[error(transparent)]
    Propagation(#[from] PropagationError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

#[derive(Debug, Clone, PartialEq)]
pub struct FrequencyCode {
    pub catalog: Vec<f64>,
    pub index: usize,
}

impl FrequencyCode {
    pub fn one_hot(&self) -> Vec<f32> {
        let mut v = vec![0.0; self.catalog.len()];
        v[self.index] = 1.0;
        v
    }

    pub fn freq(&self) -> f64 {
        self.catalog[self.index]
    }
}

pub fn encode_frequency(freq: f64, catalog: &[f64]) -> Result<FrequencyCode, DatasetError> {
    catalog
        .iter()
        .position(|&f| (f - freq).abs() <= 1e-9 * f.abs().max(1.0))
        .map(|index| FrequencyCode {
            catalog: catalog.to_vec(),
            index,
        })
        .ok_or_else(|| DatasetError::UnknownFrequency {
            freq,
            catalog: catalog.to_vec(),
        })
}

pub fn normalize_value(dbm: f64, (lo, hi): (f64, f64)) -> f64 {
    if dbm == f64::NEG_INFINITY {
        return 0.0;
    }
    ((dbm - lo) / (hi - lo)).clamp(0.0, 1.0)
}

pub fn denormalize_value(v: f64, (lo, hi): (f64, f64)) -> f64 {
    lo + v * (hi - lo)
}

pub fn normalize_rss(dbm: &[f64], range: (f64, f64)) -> Vec<f32> {
    dbm.iter().map(|&d| normalize_value(d, range) as f32).collect()
}

pub fn denormalize_rss(values: &[f32], range: (f64, f64)) -> Vec<f64> {
    values.iter().map(|&v| denormalize_value(v as f64, range)).collect()
}

/// Conditioning triple: semantic map, antenna pattern and frequency code.
#[derive(Debug, Clone, PartialEq)]
pub struct ConditioningSet {
    pub semantic: SemanticMap,
    pub pattern: PatternRaster,
    pub freq: FrequencyCode,
}

impl ConditioningSet {
    pub fn height(&self) -> usize {
        self.semantic.height
    }

    pub fn width(&self) -> usize {
        self.semantic.width
    }

    pub fn channels(&self) -> usize {
        SemanticMap::CHANNELS + 1 + self.freq.catalog.len()
    }

    /// Channel-major stack `[3 + 1 + k, h, w]` with the one-hot frequency
    /// broadcast over every cell.
    pub fn stack(&self) -> Vec<f32> {
        let plane = self.width() * self.height();
        let mut out = self.semantic.one_hot();
        out.extend_from_slice(&self.pattern.gain);
        for v in self.freq.one_hot() {
            out.extend(std::iter::repeat(v).take(plane));
        }
        out
    }
}

pub fn assemble_condition(
    semantic: SemanticMap,
    pattern: PatternRaster,
    freq: FrequencyCode,
) -> Result<ConditioningSet, DatasetError> {
    if semantic.width != pattern.width || semantic.height != pattern.height {
        return Err(DatasetError::DimensionMismatch(format!(
            "semantic {}x{} vs pattern {}x{}",
            semantic.width, semantic.height, pattern.width, pattern.height
        )));
    }
    Ok(ConditioningSet {
        semantic,
        pattern,
        freq,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleMeta {
    pub room: String,
    /// `(col, row)` of the BS cell.
    pub bs_cell: (usize, usize),
    pub bs_position: [f64; 2],
    pub upa: (usize, usize),
    pub freq_hz: f64,
    pub hash: String,
    pub shard: String,
    pub index: usize,
    pub offset: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub condition: ConditioningSet,
    /// Normalized target, `[map_channels, h, w]`.
    pub target: Vec<f32>,
    pub meta: SampleMeta,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum BsPositions {
    /// Every `stride`-th cell starting at `stride / 2`, keeping feasible ones.
    Stride { stride: usize },
    /// Explicit `(col, row)` cells; an infeasible cell is an error.
    List { cells: Vec<(usize, usize)> },
    /// `count` feasible cells drawn without replacement using the sweep seed.
    Random { count: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GridSize {
    pub nx: usize,
    pub ny: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepConfig {
    pub rooms: Vec<String>,
    pub frequencies_hz: Vec<f64>,
    #[serde(default = "default_catalog")]
    pub catalog_hz: Vec<f64>,
    pub upas: Vec<(usize, usize)>,
    pub bs_positions: BsPositions,
    pub grid: GridSize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_reflections")]
    pub max_reflections: usize,
    #[serde(default = "default_shard_size")]
    pub shard_size: usize,
}

fn default_catalog() -> Vec<f64> {
    DEFAULT_CATALOG_HZ.to_vec()
}
fn default_reflections() -> usize {
    2
}
fn default_shard_size() -> usize {
    256
}

impl SweepConfig {
    pub fn parse(text: &str) -> Result<Self, DatasetError> {
        toml::from_str(text).map_err(|e| DatasetError::Config(e.to_string()))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("sweep config serializes")
    }

    pub fn validate(&self) -> Result<(), DatasetError> {
        let fail = |m: &str| Err(DatasetError::Config(m.to_string()));
        if self.rooms.is_empty() {
            return fail("rooms is empty");
        }
        if self.frequencies_hz.is_empty() {
            return fail("frequencies_hz is empty");
        }
        if self.upas.is_empty() {
            return fail("upas is empty");
        }
        if self.shard_size == 0 {
            return fail("shard_size must be positive");
        }
        for f in &self.frequencies_hz {
            encode_frequency(*f, &self.catalog_hz)?;
        }
        for &(r, c) in &self.upas {
            UpaConfig::new(r, c, self.frequencies_hz[0]).map_err(|e| DatasetError::Config(e.to_string()))?;
        }
        if let BsPositions::Stride { stride: 0 } = self.bs_positions {
            return fail("stride must be positive");
        }
        for r in &self.rooms {
            if catalog_room(r).is_none() {
                return Err(DatasetError::UnknownRoom(r.clone()));
            }
        }
        Ok(())
    }
}

fn feasible(layout_scene: &crate::scene::Scene, sem: &SemanticMap, grid: &GridSpec, col: usize, row: usize) -> bool {
    col < grid.nx
        && row < grid.ny
        && sem.class_at(col, row) != CellClass::Wall
        && layout_scene.is_walkable(grid.cell_center(&layout_scene.bounds, col, row))
}

/// BS cells for one room, in row-major order.
pub fn bs_cells(
    layout: &RoomLayout,
    grid_size: GridSize,
    positions: &BsPositions,
    seed: u64,
) -> Result<Vec<(usize, usize)>, DatasetError> {
    let scene = build_room(layout)?;
    let grid = GridSpec::for_bounds(grid_size.nx, grid_size.ny, &scene.bounds)?;
    let base = rasterize_semantic(&scene, &grid);
    let all: Vec<(usize, usize)> = (0..grid.ny)
        .flat_map(|r| (0..grid.nx).map(move |c| (c, r)))
        .filter(|&(c, r)| feasible(&scene, &base, &grid, c, r))
        .collect();
    match positions {
        BsPositions::Stride { stride } => {
            let off = stride / 2;
            Ok(all
                .into_iter()
                .filter(|&(c, r)| c % stride == off % stride && r % stride == off % stride)
                .collect())
        }
        BsPositions::List { cells } => {
            for &(c, r) in cells {
                if !feasible(&scene, &base, &grid, c, r) {
                    return Err(DatasetError::InfeasibleBs {
                        room: layout.id.clone(),
                        col: c,
                        row: r,
                    });
                }
            }
            Ok(cells.clone())
        }
        BsPositions::Random { count } => {
            let mut pool = all;
            let room_salt: u64 = layout.id.bytes().fold(0xcbf2_9ce4_8422_2325, |h, b| {
                (h ^ b as u64).wrapping_mul(0x100_0000_01b3)
            });
            let mut rng = ChaCha8Rng::seed_from_u64(seed ^ room_salt);
            pool.shuffle(&mut rng);
            pool.truncate(*count);
            pool.sort_by_key(|&(c, r)| (r, c));
            Ok(pool)
        }
    }
}

struct Job {
    layout: RoomLayout,
    freq: f64,
    upa: (usize, usize),
    cell: (usize, usize),
}

/// Computes one sample (no I/O).
pub fn make_sample(
    layout: &RoomLayout,
    grid_size: GridSize,
    cell: (usize, usize),
    upa: (usize, usize),
    freq: f64,
    catalog: &[f64],
    max_reflections: usize,
) -> Result<Sample, DatasetError> {
    let room = build_room(layout)?;
    let grid = GridSpec::for_bounds(grid_size.nx, grid_size.ny, &room.bounds)?;
    let bs = grid.cell_center(&room.bounds, cell.0, cell.1);
    let scene = room.with_bs(bs)?;
    let antenna = UpaConfig::new(upa.0, upa.1, freq).map_err(|e| DatasetError::Config(e.to_string()))?;
    let semantic = rasterize_semantic(&scene, &grid);
    let pattern = rasterize_pattern(&antenna, &grid);
    let code = encode_frequency(freq, catalog)?;
    let map = generate_rf_map_with(&MapRequest {
        scene: &scene,
        antenna: &antenna,
        freq,
        grid: &grid,
        max_reflections,
        tx_power_dbm: 0.0,
    })?;
    let condition = assemble_condition(semantic, pattern, code)?;
    Ok(Sample {
        condition,
        target: map.normalized(),
        meta: SampleMeta {
            room: layout.id.clone(),
            bs_cell: cell,
            bs_position: [bs.x, bs.y],
            upa,
            freq_hz: freq,
            hash: String::new(),
            shard: String::new(),
            index: 0,
            offset: 0,
        },
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShardEntry {
    pub file: String,
    pub samples: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub version: u32,
    pub height: usize,
    pub width: usize,
    pub catalog_hz: Vec<f64>,
    pub norm_range: (f64, f64),
    pub map_channels: usize,
    pub config: SweepConfig,
    pub shards: Vec<ShardEntry>,
    pub samples: Vec<SampleMeta>,
}

impl Manifest {
    pub fn load(dir: &Path) -> Result<Self, DatasetError> {
        let text = std::fs::read_to_string(dir.join(MANIFEST_FILE))?;
        Ok(serde_json::from_str(&text)?)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("manifest serializes")
    }

    /// SHA-256 of the serialized manifest.
    pub fn hash(&self) -> String {
        sha256_hex(self.to_json().as_bytes())
    }

    pub fn k(&self) -> usize {
        self.catalog_hz.len()
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    let mut h = Sha256::new();
    h.update(bytes);
    hex::encode(h.finalize())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ShardHeader {
    pub samples: u32,
    pub height: u32,
    pub width: u32,
    pub k: u32,
    pub semantic_channels: u32,
    pub pattern_channels: u32,
    pub map_channels: u32,
    pub norm_min: f32,
    pub norm_max: f32,
}

impl ShardHeader {
    pub const BYTES: usize = 4 + 4 * 8 + 4 * 2;

    pub fn record_floats(&self) -> usize {
        let plane = (self.height * self.width) as usize;
        (self.semantic_channels + self.pattern_channels + self.map_channels) as usize * plane + self.k as usize
    }

    pub fn write_to(&self, w: &mut impl Write) -> std::io::Result<()> {
        w.write_all(SHARD_MAGIC)?;
        for v in [
            SHARD_VERSION,
            self.samples,
            self.height,
            self.width,
            self.k,
            self.semantic_channels,
            self.pattern_channels,
            self.map_channels,
        ] {
            w.write_all(&v.to_le_bytes())?;
        }
        w.write_all(&self.norm_min.to_le_bytes())?;
        w.write_all(&self.norm_max.to_le_bytes())
    }

    pub fn parse(bytes: &[u8]) -> Result<Self, String> {
        if bytes.len() < Self::BYTES {
            return Err("truncated header".into());
        }
        if &bytes[..4] != SHARD_MAGIC {
            return Err("bad magic".into());
        }
        let u = |i: usize| u32::from_le_bytes(bytes[4 + 4 * i..8 + 4 * i].try_into().unwrap());
        if u(0) != SHARD_VERSION {
            return Err(format!("unsupported version {}", u(0)));
        }
        let f = |off: usize| f32::from_le_bytes(bytes[off..off + 4].try_into().unwrap());
        Ok(Self {
            samples: u(1),
            height: u(2),
            width: u(3),
            k: u(4),
            semantic_channels: u(5),
            pattern_channels: u(6),
            map_channels: u(7),
            norm_min: f(36),
            norm_max: f(40),
        })
    }
}

fn sample_record(s: &Sample) -> Vec<f32> {
    let mut rec = s.condition.semantic.one_hot();
    rec.extend_from_slice(&s.condition.pattern.gain);
    rec.extend(s.condition.freq.one_hot());
    rec.extend_from_slice(&s.target);
    rec
}

fn floats_to_bytes(v: &[f32]) -> Vec<u8> {
    v.iter().flat_map(|x| x.to_le_bytes()).collect()
}

pub fn write_shard(path: &Path, header: &ShardHeader, samples: &[Sample]) -> Result<Vec<(String, u64)>, DatasetError> {
    let mut bytes = Vec::new();
    header.write_to(&mut bytes)?;
    let mut out = Vec::with_capacity(samples.len());
    for s in samples {
        let rec = floats_to_bytes(&sample_record(s));
        out.push((sha256_hex(&rec), bytes.len() as u64));
        bytes.extend_from_slice(&rec);
    }
    std::fs::File::create(path)?.write_all(&bytes)?;
    Ok(out)
}

/// Raw shard contents: header plus one f32 record per sample.
pub fn read_shard(path: &Path) -> Result<(ShardHeader, Vec<Vec<f32>>), DatasetError> {
    let corrupt = |reason: String| DatasetError::Corrupt {
        path: path.to_path_buf(),
        reason,
    };
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    let header = ShardHeader::parse(&bytes).map_err(corrupt)?;
    let n = header.record_floats();
    let need = ShardHeader::BYTES + header.samples as usize * n * 4;
    if bytes.len() != need {
        return Err(corrupt(format!("expected {need} bytes, found {}", bytes.len())));
    }
    let records = bytes[ShardHeader::BYTES..]
        .chunks_exact(n * 4)
        .map(|rec| {
            rec.chunks_exact(4)
                .map(|b| f32::from_le_bytes(b.try_into().unwrap()))
                .collect()
        })
        .collect();
    Ok((header, records))
}

fn decode_record(rec: &[f32], header: &ShardHeader, catalog: &[f64], meta: SampleMeta) -> Result<Sample, DatasetError> {
    let (h, w) = (header.height as usize, header.width as usize);
    let plane = h * w;
    let sem = &rec[..3 * plane];
    let classes = (0..plane)
        .map(|i| {
            if sem[2 * plane + i] == 1.0 {
                CellClass::Bs
            } else if sem[plane + i] == 1.0 {
                CellClass::Wall
            } else {
                CellClass::Floor
            }
        })
        .collect();
    let mut off = 3 * plane;
    let pattern = rec[off..off + plane].to_vec();
    off += plane;
    let k = header.k as usize;
    let one_hot = &rec[off..off + k];
    off += k;
    let index = one_hot
        .iter()
        .position(|&v| v == 1.0)
        .ok_or_else(|| DatasetError::DimensionMismatch("frequency code has no hot entry".into()))?;
    let target = rec[off..].to_vec();
    Ok(Sample {
        condition: ConditioningSet {
            semantic: SemanticMap {
                width: w,
                height: h,
                classes,
            },
            pattern: PatternRaster {
                width: w,
                height: h,
                gain: pattern,
            },
            freq: FrequencyCode {
                catalog: catalog.to_vec(),
                index,
            },
        },
        target,
        meta,
    })
}

/// Generates every sample of the sweep, writes shards plus the manifest to
/// `out`, and returns the manifest. Output is independent of scheduling.
pub fn run_sweep(cfg: &SweepConfig, out: &Path) -> Result<Manifest, DatasetError> {
    cfg.validate()?;
    std::fs::create_dir_all(out)?;
    let mut jobs = Vec::new();
    for room in &cfg.rooms {
        let layout = catalog_room(room).ok_or_else(|| DatasetError::UnknownRoom(room.clone()))?;
        let cells = bs_cells(&layout, cfg.grid, &cfg.bs_positions, cfg.seed)?;
        for &freq in &cfg.frequencies_hz {
            for &upa in &cfg.upas {
                for &cell in &cells {
                    jobs.push(Job {
                        layout: layout.clone(),
                        freq,
                        upa,
                        cell,
                    });
                }
            }
        }
    }
    let samples: Vec<Sample> = jobs
        .par_iter()
        .map(|j| {
            make_sample(
                &j.layout,
                cfg.grid,
                j.cell,
                j.upa,
                j.freq,
                &cfg.catalog_hz,
                cfg.max_reflections,
            )
        })
        .collect::<Result<_, _>>()?;
    let header_for = |n: usize| ShardHeader {
        samples: n as u32,
        height: cfg.grid.ny as u32,
        width: cfg.grid.nx as u32,
        k: cfg.catalog_hz.len() as u32,
        semantic_channels: 3,
        pattern_channels: 1,
        map_channels: 1,
        norm_min: DEFAULT_NORM_RANGE.0 as f32,
        norm_max: DEFAULT_NORM_RANGE.1 as f32,
    };
    let mut shards = Vec::new();
    let mut metas = Vec::with_capacity(samples.len());
    for (si, chunk) in samples.chunks(cfg.shard_size).enumerate() {
        let file = format!("shard_{si:04}.rads");
        let written = write_shard(&out.join(&file), &header_for(chunk.len()), chunk)?;
        for (i, (s, (hash, offset))) in chunk.iter().zip(written).enumerate() {
            let mut m = s.meta.clone();
            m.hash = hash;
            m.shard = file.clone();
            m.index = i;
            m.offset = offset;
            metas.push(m);
        }
        shards.push(ShardEntry {
            file,
            samples: chunk.len(),
        });
    }
    let manifest = Manifest {
        version: SHARD_VERSION,
        height: cfg.grid.ny,
        width: cfg.grid.nx,
        catalog_hz: cfg.catalog_hz.clone(),
        norm_range: DEFAULT_NORM_RANGE,
        map_channels: 1,
        config: cfg.clone(),
        shards,
        samples: metas,
    };
    std::fs::write(out.join(MANIFEST_FILE), manifest.to_json())?;
    Ok(manifest)
}

/// Reads the samples listed in `metas` back from the shards in `dir`.
pub fn load_samples(dir: &Path, manifest: &Manifest, metas: &[SampleMeta]) -> Result<Vec<Sample>, DatasetError> {
    let mut cache: std::collections::HashMap<String, (ShardHeader, Vec<Vec<f32>>)> = std::collections::HashMap::new();
    let mut out = Vec::with_capacity(metas.len());
    for m in metas {
        if !cache.contains_key(&m.shard) {
            cache.insert(m.shard.clone(), read_shard(&dir.join(&m.shard))?);
        }
        let (header, records) = &cache[&m.shard];
        let rec = records.get(m.index).ok_or_else(|| DatasetError::Corrupt {
            path: dir.join(&m.shard),
            reason: format!("sample index {} out of range", m.index),
        })?;
        if sha256_hex(&floats_to_bytes(rec)) != m.hash {
            return Err(DatasetError::Corrupt {
                path: dir.join(&m.shard),
                reason: format!("hash mismatch for sample {}", m.index),
            });
        }
        out.push(decode_record(rec, header, &manifest.catalog_hz, m.clone())?);
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Task {
    /// Unseen floor plan: train on the rectangular rooms, test on the L-shape.
    Rooms,
    /// Unseen antenna: train on four UPA sizes in room1 at 28 GHz, test on 10x10.
    Antennas,
}

impl Task {
    pub fn from_number(n: u8) -> Option<Task> {
        match n {
            1 => Some(Task::Rooms),
            2 => Some(Task::Antennas),
            _ => None,
        }
    }
}

const TRAIN_ROOMS: [&str; 4] = ["room1", "room2", "room3", "room4"];
const TEST_ROOM: &str = "lshape";

/// Splits manifest entries into disjoint train and test lists.
pub fn split_tasks(manifest: &Manifest, task: Task) -> Result<(Vec<SampleMeta>, Vec<SampleMeta>), DatasetError> {
    let (train, test): (Vec<_>, Vec<_>) = match task {
        Task::Rooms => {
            let at_4x4 = |m: &&SampleMeta| m.upa == (4, 4);
            (
                manifest
                    .samples
                    .iter()
                    .filter(at_4x4)
                    .filter(|m| TRAIN_ROOMS.contains(&m.room.as_str()))
                    .cloned()
                    .collect(),
                manifest
                    .samples
                    .iter()
                    .filter(at_4x4)
                    .filter(|m| m.room == TEST_ROOM)
                    .cloned()
                    .collect(),
            )
        }
        Task::Antennas => {
            let base = |m: &&SampleMeta| m.room == "room1" && (m.freq_hz - 28e9).abs() < 1.0;
            (
                manifest
                    .samples
                    .iter()
                    .filter(base)
                    .filter(|m| [(4, 4), (6, 6), (8, 8), (12, 12)].contains(&m.upa))
                    .cloned()
                    .collect(),
                manifest
                    .samples
                    .iter()
                    .filter(base)
                    .filter(|m| m.upa == (10, 10))
                    .cloned()
                    .collect(),
            )
        }
    };
    if train.is_empty() {
        return Err(DatasetError::MissingStratum(format!("{task:?}: no training samples")));
    }
    if test.is_empty() {
        return Err(DatasetError::MissingStratum(match task {
            Task::Rooms => "task 1 needs L-shaped room samples at 4x4 UPA".into(),
            Task::Antennas => "task 2 needs room1 samples at 28 GHz with a 10x10 UPA".into(),
        }));
    }
    Ok((train, test))
}
