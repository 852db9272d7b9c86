//! Tiled-GPU execution time model.
//!
//! Every duration the simulator charges comes from here. Matrix products are
//! split into output tiles, each tile-pair costs `1 / (s * mu(tile))`, and a
//! batch is priced as linear layers + non-linear ops + attention.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::scalar::{ceil_div, Scalar};
use crate::workload::RequestId;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum CostModelError {
    #[error("tile {0} is not in the GPU's tile sets or has no rate")]
    InvalidTile(TileConfig),
    #[error("no GeMV rate for tile {0}x{1}")]
    InvalidGemvTile(u32, u32),
    #[error("tile dimension {0} is not a power of two")]
    NotPowerOfTwo(u32),
    #[error("{0} must be strictly positive")]
    NonPositive(&'static str),
    #[error("optimal tile {optimal} has lower effective throughput than {other}")]
    NotOptimal { optimal: TileConfig, other: TileConfig },
    #[error("GeMV evaluation of shape {0}x{1}x{2} is faster than the best GeMM")]
    GemvFasterThanGemm(u64, u64, u64),
    #[error("model dimension {name}={value} is not divisible by tile dimension {tile}")]
    NotDivisible {
        name: &'static str,
        value: u32,
        tile: u32,
    },
    #[error("invalid tile key {0:?}, expected e.g. \"128x256x32\"")]
    BadTileKey(String),
    #[error("invalid batch plan: {0}")]
    InvalidPlan(String),
}

/// Output tile `(t_row, t_col)` plus reduction tile `t_red`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct TileConfig {
    pub t_row: u32,
    pub t_col: u32,
    pub t_red: u32,
}

impl TileConfig {
    pub const fn new(t_row: u32, t_col: u32, t_red: u32) -> Self {
        TileConfig { t_row, t_col, t_red }
    }

    /// Least common multiple of the three dimensions. For powers of two this
    /// is simply the largest.
    pub fn lcm(&self) -> u64 {
        let l = lcm(self.t_row as u64, self.t_col as u64);
        lcm(l, self.t_red as u64)
    }

    pub fn volume(&self) -> u64 {
        self.t_row as u64 * self.t_col as u64 * self.t_red as u64
    }
}

fn gcd(a: u64, b: u64) -> u64 {
    if b == 0 {
        a
    } else {
        gcd(b, a % b)
    }
}

fn lcm(a: u64, b: u64) -> u64 {
    a / gcd(a, b) * b
}

impl fmt::Display for TileConfig {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}x{}x{}", self.t_row, self.t_col, self.t_red)
    }
}

impl FromStr for TileConfig {
    type Err = CostModelError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let parts: Vec<&str> = s.trim().split('x').collect();
        let bad = || CostModelError::BadTileKey(s.to_string());
        if parts.len() != 3 {
            return Err(bad());
        }
        let dims: Vec<u32> = parts
            .iter()
            .map(|p| p.trim().parse::<u32>().map_err(|_| bad()))
            .collect::<Result<_, _>>()?;
        Ok(TileConfig::new(dims[0], dims[1], dims[2]))
    }
}

impl TryFrom<String> for TileConfig {
    type Error = CostModelError;
    fn try_from(s: String) -> Result<Self, Self::Error> {
        s.parse()
    }
}

impl From<TileConfig> for String {
    fn from(t: TileConfig) -> String {
        t.to_string()
    }
}

/// Parse a `"t_row x t_col"` GeMV tile key.
pub fn parse_pair_key(s: &str) -> Result<(u32, u32), CostModelError> {
    let bad = || CostModelError::BadTileKey(s.to_string());
    let (a, b) = s.trim().split_once('x').ok_or_else(bad)?;
    Ok((
        a.trim().parse().map_err(|_| bad())?,
        b.trim().parse().map_err(|_| bad())?,
    ))
}

/// Hardware description: tile sets and per-tile rates.
#[derive(Debug, Clone, PartialEq)]
pub struct GpuSpec<T> {
    pub sm_count: u32,
    pub out_tiles: Vec<(u32, u32)>,
    pub red_tiles: Vec<u32>,
    /// tile-pairs per second per SM
    pub gemm_rate: BTreeMap<TileConfig, T>,
    pub gemv_tile: (u32, u32),
    pub gemv_rate: BTreeMap<(u32, u32), T>,
    /// tokens per second
    pub nonlinear_rate: T,
    pub optimal_tile: TileConfig,
    pub kv_token_capacity: u64,
}

impl<T: Scalar> GpuSpec<T> {
    /// All tile configurations in `T_out x T_red`.
    pub fn tiles(&self) -> Vec<TileConfig> {
        let mut out = Vec::with_capacity(self.out_tiles.len() * self.red_tiles.len());
        for &(r, c) in &self.out_tiles {
            for &red in &self.red_tiles {
                out.push(TileConfig::new(r, c, red));
            }
        }
        out
    }

    pub fn contains(&self, tile: TileConfig) -> bool {
        self.out_tiles.contains(&(tile.t_row, tile.t_col)) && self.red_tiles.contains(&tile.t_red)
    }

    pub fn rate(&self, tile: TileConfig) -> Result<T, CostModelError> {
        if !self.contains(tile) {
            return Err(CostModelError::InvalidTile(tile));
        }
        self.gemm_rate
            .get(&tile)
            .copied()
            .ok_or(CostModelError::InvalidTile(tile))
    }

    pub fn gemv_rate_for(&self, t_row: u32, t_col: u32) -> Result<T, CostModelError> {
        self.gemv_rate
            .get(&(t_row, t_col))
            .copied()
            .ok_or(CostModelError::InvalidGemvTile(t_row, t_col))
    }

    pub fn sm(&self) -> T {
        T::from_count(self.sm_count as u64)
    }

    /// Check tile shapes, rates, tile optimality and the GeMV-vs-GeMM
    /// consistency on a sampled shape grid.
    pub fn validate(&self) -> Result<(), CostModelError> {
        if self.sm_count == 0 {
            return Err(CostModelError::NonPositive("sm_count"));
        }
        if self.out_tiles.is_empty() || self.red_tiles.is_empty() {
            return Err(CostModelError::NonPositive("tile set size"));
        }
        let dims = self
            .out_tiles
            .iter()
            .flat_map(|&(r, c)| [r, c])
            .chain(self.red_tiles.iter().copied())
            .chain([self.gemv_tile.0, self.gemv_tile.1]);
        for d in dims {
            if d == 0 || !d.is_power_of_two() {
                return Err(CostModelError::NotPowerOfTwo(d));
            }
        }
        let zero = T::zero();
        for tile in self.tiles() {
            if self.rate(tile)? <= zero {
                return Err(CostModelError::NonPositive("gemm_rate"));
            }
        }
        if self.gemv_rate_for(self.gemv_tile.0, self.gemv_tile.1)? <= zero {
            return Err(CostModelError::NonPositive("gemv_rate"));
        }
        if self.nonlinear_rate <= zero {
            return Err(CostModelError::NonPositive("nonlinear_rate"));
        }
        if self.kv_token_capacity == 0 {
            return Err(CostModelError::NonPositive("kv_token_capacity"));
        }
        let opt = self.optimal_tile;
        let best = self.rate(opt)? * T::from_count(opt.volume());
        for tile in self.tiles() {
            if self.rate(tile)? * T::from_count(tile.volume()) > best {
                return Err(CostModelError::NotOptimal {
                    optimal: opt,
                    other: tile,
                });
            }
        }
        self.check_gemv_consistency()
    }

    fn check_gemv_consistency(&self) -> Result<(), CostModelError> {
        let grid: [u64; 6] = [1, 3, 16, 100, 1024, 4096];
        let (vr, vc) = self.gemv_tile;
        for &d_row in &grid {
            for &d_col in &grid {
                for &d_red in &grid {
                    let gemv =
                        gemv_time(d_row, d_red, vr, vc, self)? * T::from_count(d_col);
                    let mut best: Option<T> = None;
                    for tile in self.tiles() {
                        let t = gemm_time(d_row, d_col, d_red, tile, self)?;
                        best = Some(best.map_or(t, |b| b.min_of(t)));
                    }
                    if let Some(b) = best {
                        if gemv < b {
                            return Err(CostModelError::GemvFasterThanGemm(d_row, d_col, d_red));
                        }
                    }
                }
            }
        }
        Ok(())
    }
}

/// `mu_Lin`: either given directly or derived from the model dimensions.
#[derive(Debug, Clone, PartialEq)]
pub enum LinearRate<T> {
    Uniform(T),
    PerTile(BTreeMap<TileConfig, T>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelSpec<T> {
    pub n_layers: u32,
    pub d_attn: u32,
    pub d_model: u32,
    pub d_ff: u32,
    pub d_out: u32,
    pub lin_rate: Option<LinearRate<T>>,
}

impl<T: Scalar> ModelSpec<T> {
    fn dims(&self) -> [(&'static str, u32); 4] {
        [
            ("d_attn", self.d_attn),
            ("d_model", self.d_model),
            ("d_ff", self.d_ff),
            ("d_out", self.d_out),
        ]
    }

    pub fn validate(&self, gpu: &GpuSpec<T>) -> Result<(), CostModelError> {
        if self.n_layers == 0 {
            return Err(CostModelError::NonPositive("n_layers"));
        }
        let tile_dims: Vec<u32> = gpu
            .out_tiles
            .iter()
            .flat_map(|&(r, c)| [r, c])
            .chain(gpu.red_tiles.iter().copied())
            .chain([gpu.gemv_tile.0, gpu.gemv_tile.1])
            .collect();
        for (name, value) in self.dims() {
            if value == 0 {
                return Err(CostModelError::NonPositive(name));
            }
            for &tile in &tile_dims {
                if value % tile != 0 {
                    return Err(CostModelError::NotDivisible { name, value, tile });
                }
            }
        }
        for tile in gpu.tiles() {
            let direct = match &self.lin_rate {
                None => continue,
                Some(LinearRate::Uniform(v)) => *v,
                Some(LinearRate::PerTile(m)) => {
                    *m.get(&tile).ok_or(CostModelError::InvalidTile(tile))?
                }
            };
            if direct <= T::zero() {
                return Err(CostModelError::NonPositive("lin_rate"));
            }
            let derived = self.derived_lin_rate(tile, gpu)?;
            if direct != derived {
                log::debug!(
                    "lin_rate for tile {tile} given as {direct}, derived value is {derived}; using the given value"
                );
            }
        }
        Ok(())
    }

    /// Column-tile rate of all linear layers, computed from the dimensions.
    pub fn derived_lin_rate(&self, tile: TileConfig, gpu: &GpuSpec<T>) -> Result<T, CostModelError> {
        let n = self.n_layers as u64;
        let (d, dx, dff, dout) = (
            self.d_attn as u64,
            self.d_model as u64,
            self.d_ff as u64,
            self.d_out as u64,
        );
        let (tr, tred) = (tile.t_row as u64, tile.t_red as u64);
        let pairs = 3 * n * (dx / tred) * (d / tr)
            + n * (d / tred) * (dff / tr)
            + n * (dff / tred) * (dx / tr)
            + (dx / tred) * (dout / tr);
        Ok(gpu.sm() * gpu.rate(tile)? / T::from_count(pairs))
    }
}

/// Tile-count GeMM time.
pub fn gemm_time<T: Scalar>(
    d_row: u64,
    d_col: u64,
    d_red: u64,
    tile: TileConfig,
    gpu: &GpuSpec<T>,
) -> Result<T, CostModelError> {
    let mu = gpu.rate(tile)?;
    let pairs = ceil_div(d_row, tile.t_row as u64)
        * ceil_div(d_col, tile.t_col as u64)
        * ceil_div(d_red, tile.t_red as u64);
    Ok(T::from_count(pairs) / (gpu.sm() * mu))
}

pub fn gemv_time<T: Scalar>(
    d_row: u64,
    d_col: u64,
    t_row: u32,
    t_col: u32,
    gpu: &GpuSpec<T>,
) -> Result<T, CostModelError> {
    let mu = gpu.gemv_rate_for(t_row, t_col)?;
    let pairs = ceil_div(d_row, t_row as u64) * ceil_div(d_col, t_col as u64);
    Ok(T::from_count(pairs) / (gpu.sm() * mu))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PrefillItem {
    pub request: RequestId,
    /// first prompt token of the chunk, 1-based
    pub start: u64,
    pub chunk: u64,
}

impl PrefillItem {
    pub fn end(&self) -> u64 {
        self.start + self.chunk - 1
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct DecodeItem {
    pub request: RequestId,
    /// token index `i`; the iteration produces token `i + 1`
    pub index: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BatchPlan {
    pub prefill: Vec<PrefillItem>,
    pub decode: Vec<DecodeItem>,
    pub tile: TileConfig,
}

impl BatchPlan {
    pub fn new(tile: TileConfig) -> Self {
        BatchPlan {
            prefill: Vec::new(),
            decode: Vec::new(),
            tile,
        }
    }

    pub fn token_count(&self) -> u64 {
        self.decode.len() as u64 + self.prefill.iter().map(|p| p.chunk).sum::<u64>()
    }

    pub fn is_empty(&self) -> bool {
        self.prefill.is_empty() && self.decode.is_empty()
    }

    pub fn validate(&self) -> Result<(), CostModelError> {
        let mut seen = std::collections::HashSet::new();
        for d in &self.decode {
            if d.index == 0 {
                return Err(CostModelError::InvalidPlan(format!(
                    "decode item for {} has index 0",
                    d.request
                )));
            }
            if !seen.insert(d.request) {
                return Err(CostModelError::InvalidPlan(format!(
                    "two decode items for {}",
                    d.request
                )));
            }
        }
        for p in &self.prefill {
            if p.chunk == 0 || p.start == 0 {
                return Err(CostModelError::InvalidPlan(format!(
                    "prefill item for {} has start {} chunk {}",
                    p.request, p.start, p.chunk
                )));
            }
        }
        Ok(())
    }
}

/// GPU and model bundled; the simulator's pricing oracle.
#[derive(Debug, Clone, PartialEq)]
pub struct CostModel<T> {
    pub gpu: GpuSpec<T>,
    pub model: ModelSpec<T>,
}

impl<T: Scalar> CostModel<T> {
    pub fn new(gpu: GpuSpec<T>, model: ModelSpec<T>) -> Result<Self, CostModelError> {
        gpu.validate()?;
        model.validate(&gpu)?;
        Ok(CostModel { gpu, model })
    }

    pub fn optimal_tile(&self) -> TileConfig {
        self.gpu.optimal_tile
    }

    pub fn t_lcm(&self) -> u64 {
        self.gpu.optimal_tile.lcm()
    }

    pub fn t_col(&self) -> u64 {
        self.gpu.optimal_tile.t_col as u64
    }

    pub fn gemm_time(&self, d_row: u64, d_col: u64, d_red: u64, tile: TileConfig) -> Result<T, CostModelError> {
        gemm_time(d_row, d_col, d_red, tile, &self.gpu)
    }

    pub fn gemv_time(&self, d_row: u64, d_col: u64) -> Result<T, CostModelError> {
        gemv_time(d_row, d_col, self.gpu.gemv_tile.0, self.gpu.gemv_tile.1, &self.gpu)
    }

    pub fn lin_rate(&self, tile: TileConfig) -> Result<T, CostModelError> {
        match &self.model.lin_rate {
            Some(LinearRate::Uniform(v)) => {
                self.gpu.rate(tile)?;
                Ok(*v)
            }
            Some(LinearRate::PerTile(m)) => m.get(&tile).copied().ok_or(CostModelError::InvalidTile(tile)),
            None => self.model.derived_lin_rate(tile, &self.gpu),
        }
    }

    pub fn linear_time(&self, tokens: u64, tile: TileConfig) -> Result<T, CostModelError> {
        let rate = self.lin_rate(tile)?;
        Ok(T::from_count(ceil_div(tokens, tile.t_col as u64)) / rate)
    }

    /// Per-layer decode self-attention time at token index `i`.
    pub fn decode_sa_time(&self, i: u64) -> T {
        let (tr, tc) = self.gpu.gemv_tile;
        let (tr, tc) = (tr as u64, tc as u64);
        let d = self.model.d_attn as u64;
        let pairs = (d / tc) * ceil_div(i, tr) + ceil_div(i, tc) * (d / tr);
        let mu = self
            .gpu
            .gemv_rate_for(self.gpu.gemv_tile.0, self.gpu.gemv_tile.1)
            .expect("validated gemv tile");
        T::from_count(pairs) / mu
    }

    /// Prefill self-attention over all layers for chunk `[i, i + c - 1]`.
    pub fn prefill_sa_time(&self, i: u64, c: u64, tile: TileConfig) -> Result<T, CostModelError> {
        let mu = self.gpu.rate(tile)?;
        let (tr, tc, tred) = (tile.t_row as u64, tile.t_col as u64, tile.t_red as u64);
        let d = self.model.d_attn as u64;
        let e = i + c - 1;
        let pairs = ceil_div(e, tr) * ceil_div(c, tc) * (d / tred) + (d / tr) * ceil_div(c, tc) * ceil_div(e, tred);
        let n = T::from_count(self.model.n_layers as u64);
        Ok(n * T::from_count(pairs) / (self.gpu.sm() * mu))
    }

    pub fn batch_time(&self, plan: &BatchPlan) -> Result<T, CostModelError> {
        if plan.is_empty() {
            return Ok(T::zero());
        }
        let tau = plan.token_count();
        let mut t = self.linear_time(tau, plan.tile)? + T::from_count(tau) / self.gpu.nonlinear_rate;
        let n = T::from_count(self.model.n_layers as u64);
        let mut sa = T::zero();
        for d in &plan.decode {
            sa += self.decode_sa_time(d.index);
        }
        t += n * sa;
        for p in &plan.prefill {
            t += self.prefill_sa_time(p.start, p.chunk, plan.tile)?;
        }
        Ok(t)
    }
}
