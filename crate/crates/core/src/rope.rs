//! Rotary position embeddings: 1D, 2D and the additive 3D variant, plus the
//! min-gap analysis of the rotation angles on a small grid.
//!
//! In the 3D variant a vector of width `d` is split in halves. Pair `i` of
//! the first half rotates by `ω_x,i·t_x + ω_z,i·t_z`, pair `i` of the second
//! half by `ω_y,i·t_y + ω_z,i·t_z`, for `i` in `0..d/4`.

use std::f64::consts::TAU;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const DEFAULT_BASE_XY: f64 = 10000.0;
pub const DEFAULT_BASE_Z: f64 = 2333.0;
/// Published average 2D/3D min-gap ratio that the d-sweep is compared to.
pub const REFERENCE_AVERAGE_RATIO: f64 = 26.30;
pub const DEFAULT_ANALYSIS_D: usize = 64;

/// How the frequency exponents are normalised.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FrequencyConvention {
    /// `ω_x,i = b_x^(-2i/d)`, `ω_z,i = b_z^(-(2i+1)/d)`.
    #[default]
    FullDim,
    /// Exponents normalised by the half width `d/2`:
    /// `ω_x,i = b_x^(-4i/d)`, `ω_z,i = b_z^(-(4i+2)/d)`.
    HalfDim,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RopeParams {
    pub d: usize,
    pub b_x: f64,
    pub b_y: f64,
    pub b_z: f64,
    pub convention: FrequencyConvention,
    pub omega_x: Vec<f64>,
    pub omega_y: Vec<f64>,
    pub omega_z: Vec<f64>,
}

impl RopeParams {
    pub fn new(d: usize, b_x: f64, b_y: f64, b_z: f64) -> Result<Self> {
        Self::with_convention(d, b_x, b_y, b_z, FrequencyConvention::FullDim)
    }

    pub fn with_defaults(d: usize) -> Result<Self> {
        Self::new(d, DEFAULT_BASE_XY, DEFAULT_BASE_XY, DEFAULT_BASE_Z)
    }

    pub fn with_convention(
        d: usize,
        b_x: f64,
        b_y: f64,
        b_z: f64,
        convention: FrequencyConvention,
    ) -> Result<Self> {
        if d == 0 || !d.is_multiple_of(4) {
            return Err(Error::Config(format!(
                "rope width d must be a positive multiple of 4, got {d}"
            )));
        }
        for (name, b) in [("b_x", b_x), ("b_y", b_y), ("b_z", b_z)] {
            if !(b.is_finite() && b > 0.0) {
                return Err(Error::Config(format!(
                    "{name} must be positive and finite, got {b}"
                )));
            }
        }
        let norm = match convention {
            FrequencyConvention::FullDim => d as f64,
            FrequencyConvention::HalfDim => d as f64 / 2.0,
        };
        let pairs = d / 4;
        let even = |b: f64| {
            (0..pairs)
                .map(|i| b.powf(-((2 * i) as f64) / norm))
                .collect::<Vec<_>>()
        };
        Ok(Self {
            d,
            b_x,
            b_y,
            b_z,
            convention,
            omega_x: even(b_x),
            omega_y: even(b_y),
            omega_z: (0..pairs)
                .map(|i| b_z.powf(-((2 * i + 1) as f64) / norm))
                .collect(),
        })
    }

    pub fn pairs_per_half(&self) -> usize {
        self.d / 4
    }

    /// Rotation angle of each of the `d/2` pairs at `position = (t_x, t_y, t_z)`.
    pub fn angles(&self, position: [i64; 3]) -> Vec<f64> {
        let [tx, ty, tz] = position.map(|t| t as f64);
        let first = (0..self.pairs_per_half()).map(|i| self.omega_x[i] * tx + self.omega_z[i] * tz);
        let second =
            (0..self.pairs_per_half()).map(|i| self.omega_y[i] * ty + self.omega_z[i] * tz);
        first.chain(second).collect()
    }

    /// Cosine and sine tables for a list of positions, laid out
    /// `[position][pair]`.
    pub fn tables(&self, positions: &[[i64; 3]]) -> (Vec<f64>, Vec<f64>) {
        let mut cos = Vec::with_capacity(positions.len() * self.d / 2);
        let mut sin = Vec::with_capacity(cos.capacity());
        for &p in positions {
            for a in self.angles(p) {
                cos.push(a.cos());
                sin.push(a.sin());
            }
        }
        (cos, sin)
    }
}

fn rotate_by(vector: &[f64], angles: &[f64]) -> Vec<f64> {
    let mut out = vector.to_vec();
    for (j, &theta) in angles.iter().enumerate() {
        let (s, c) = theta.sin_cos();
        let (a0, a1) = (vector[2 * j], vector[2 * j + 1]);
        out[2 * j] = a0 * c - a1 * s;
        out[2 * j + 1] = a0 * s + a1 * c;
    }
    out
}

fn check_len(vector: &[f64], d: usize) -> Result<()> {
    if vector.len() != d {
        return Err(Error::Dimension(format!(
            "vector of length {} for rope width {d}",
            vector.len()
        )));
    }
    Ok(())
}

/// Additive 3D rotation of `vector` at `position = (t_x, t_y, t_z)`.
pub fn rope_rotate(vector: &[f64], position: [i64; 3], params: &RopeParams) -> Result<Vec<f64>> {
    check_len(vector, params.d)?;
    Ok(rotate_by(vector, &params.angles(position)))
}

/// `⟨R(pos_a) a, R(pos_b) b⟩`.
pub fn rope_inner(
    a: &[f64],
    pos_a: [i64; 3],
    b: &[f64],
    pos_b: [i64; 3],
    params: &RopeParams,
) -> Result<f64> {
    let ra = rope_rotate(a, pos_a, params)?;
    let rb = rope_rotate(b, pos_b, params)?;
    Ok(ra.iter().zip(&rb).map(|(x, y)| x * y).sum())
}

/// 1D rotary embedding: pair `i` of a width-`d` vector rotates by
/// `base^(-2i/d)·t`.
pub fn rope1d_rotate(vector: &[f64], t: i64, base: f64) -> Result<Vec<f64>> {
    let d = vector.len();
    if d == 0 || !d.is_multiple_of(2) {
        return Err(Error::Config(format!(
            "1D rope width must be even, got {d}"
        )));
    }
    let angles: Vec<f64> = (0..d / 2)
        .map(|i| base.powf(-((2 * i) as f64) / d as f64) * t as f64)
        .collect();
    Ok(rotate_by(vector, &angles))
}

/// 2D rotary embedding: the first half encodes `t_x`, the second `t_y`,
/// each with `d/4` pairs and frequencies `b^(-2i/d)`.
pub fn rope2d_rotate(vector: &[f64], t_x: i64, t_y: i64, b_x: f64, b_y: f64) -> Result<Vec<f64>> {
    let d = vector.len();
    if d == 0 || !d.is_multiple_of(4) {
        return Err(Error::Config(format!(
            "2D rope width must be a multiple of 4, got {d}"
        )));
    }
    let freq = |b: f64, i: usize| b.powf(-((2 * i) as f64) / d as f64);
    let angles: Vec<f64> = (0..d / 4)
        .map(|i| freq(b_x, i) * t_x as f64)
        .chain((0..d / 4).map(|i| freq(b_y, i) * t_y as f64))
        .collect();
    Ok(rotate_by(vector, &angles))
}

/// Angle statistics for one frequency index.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairGaps {
    pub i: usize,
    /// Sorted angles reduced to `[0, 2π)`.
    pub theta: Vec<f64>,
    /// Adjacent gaps, the last one wrapping around `2π`.
    pub delta: Vec<f64>,
    /// Chord lengths `2 sin(Δ/2)` between adjacent points on the unit circle.
    pub chord: Vec<f64>,
    pub min_delta: f64,
    pub min_chord: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RopeAnalysis {
    /// Extents `(z, x, y)`.
    pub grid: [usize; 3],
    pub pairs: Vec<PairGaps>,
}

impl PairGaps {
    /// Largest `|D - Δ| / Δ` over adjacent pairs, skipping the wraparound
    /// gap (which spans the empty arc when the angles cluster).
    pub fn max_chord_arc_deviation(&self) -> f64 {
        let n = self.delta.len().saturating_sub(1);
        self.delta[..n]
            .iter()
            .zip(&self.chord)
            .filter(|(g, _)| **g > 0.0)
            .map(|(g, c)| (c - g).abs() / g)
            .fold(0.0, f64::max)
    }
}

impl RopeAnalysis {
    pub fn min_deltas(&self) -> Vec<f64> {
        self.pairs.iter().map(|p| p.min_delta).collect()
    }

    pub fn min_chords(&self) -> Vec<f64> {
        self.pairs.iter().map(|p| p.min_chord).collect()
    }
}

fn gaps_of(i: usize, mut theta: Vec<f64>) -> PairGaps {
    theta.sort_by(f64::total_cmp);
    let n = theta.len();
    let delta: Vec<f64> = (0..n)
        .map(|k| {
            if k + 1 < n {
                theta[k + 1] - theta[k]
            } else {
                theta[0] + TAU - theta[k]
            }
        })
        .collect();
    let chord: Vec<f64> = delta.iter().map(|&g| 2.0 * (g / 2.0).sin()).collect();
    let min = |v: &[f64]| v.iter().copied().fold(f64::INFINITY, f64::min);
    PairGaps {
        i,
        min_delta: min(&delta),
        min_chord: min(&chord),
        theta,
        delta,
        chord,
    }
}

/// Collect `(ω_x,i·t_x + ω_z,i·t_z) mod 2π` over a `z × x × 1` grid of
/// integer positions and measure how close the angles come to each other.
pub fn rope_min_gap_analysis(grid: [usize; 3], params: &RopeParams) -> Result<RopeAnalysis> {
    let [nz, nx, ny] = grid;
    if ny != 1 {
        return Err(Error::Config(format!(
            "the analysis fixes the y extent to 1, got {ny}"
        )));
    }
    if nz == 0 || nx == 0 {
        return Err(Error::Config(format!("empty analysis grid {grid:?}")));
    }
    let pairs = (0..params.pairs_per_half())
        .map(|i| {
            let mut theta = Vec::with_capacity(nz * nx);
            for tz in 0..nz {
                for tx in 0..nx {
                    let a = params.omega_x[i] * tx as f64 + params.omega_z[i] * tz as f64;
                    theta.push(a.rem_euclid(TAU));
                }
            }
            gaps_of(i, theta)
        })
        .collect();
    Ok(RopeAnalysis { grid, pairs })
}

/// 2D (`1 × x × 1`) against 3D (`z × x × 1`) min gaps for one parameter set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RopeComparison {
    pub params: RopeParams,
    pub grid_2d: [usize; 3],
    pub grid_3d: [usize; 3],
    pub min_delta_2d: Vec<f64>,
    pub min_delta_3d: Vec<f64>,
    pub min_chord_2d: Vec<f64>,
    pub min_chord_3d: Vec<f64>,
    /// Per-i `min Δ_2D / min Δ_3D`.
    pub ratios: Vec<f64>,
    pub average_ratio: f64,
    pub chord_ratios: Vec<f64>,
    pub average_chord_ratio: f64,
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

pub fn rope_compare(grid_3d: [usize; 3], params: &RopeParams) -> Result<RopeComparison> {
    let grid_2d = [1, grid_3d[1], grid_3d[2]];
    let a2 = rope_min_gap_analysis(grid_2d, params)?;
    let a3 = rope_min_gap_analysis(grid_3d, params)?;
    let (d2, d3) = (a2.min_deltas(), a3.min_deltas());
    let (c2, c3) = (a2.min_chords(), a3.min_chords());
    let ratios: Vec<f64> = d2.iter().zip(&d3).map(|(a, b)| a / b).collect();
    let chord_ratios: Vec<f64> = c2.iter().zip(&c3).map(|(a, b)| a / b).collect();
    Ok(RopeComparison {
        params: params.clone(),
        grid_2d,
        grid_3d,
        average_ratio: mean(&ratios),
        average_chord_ratio: mean(&chord_ratios),
        min_delta_2d: d2,
        min_delta_3d: d3,
        min_chord_2d: c2,
        min_chord_3d: c3,
        ratios,
        chord_ratios,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RopeSweep {
    pub reference_ratio: f64,
    pub entries: Vec<RopeComparison>,
    /// Width whose average ratio lies nearest the reference.
    pub nearest_d: usize,
    pub nearest_deviation: f64,
}

/// Run [`rope_compare`] for each width and flag the one nearest
/// [`REFERENCE_AVERAGE_RATIO`].
pub fn rope_d_sweep(
    ds: &[usize],
    bases: [f64; 3],
    convention: FrequencyConvention,
    grid_3d: [usize; 3],
) -> Result<RopeSweep> {
    if ds.is_empty() {
        return Err(Error::Config("empty d sweep".into()));
    }
    let entries = ds
        .iter()
        .map(|&d| {
            let p = RopeParams::with_convention(d, bases[0], bases[1], bases[2], convention)?;
            rope_compare(grid_3d, &p)
        })
        .collect::<Result<Vec<_>>>()?;
    let nearest = entries
        .iter()
        .min_by(|a, b| {
            let da = (a.average_ratio - REFERENCE_AVERAGE_RATIO).abs();
            let db = (b.average_ratio - REFERENCE_AVERAGE_RATIO).abs();
            da.total_cmp(&db)
        })
        .expect("non-empty sweep");
    Ok(RopeSweep {
        reference_ratio: REFERENCE_AVERAGE_RATIO,
        nearest_d: nearest.params.d,
        nearest_deviation: (nearest.average_ratio - REFERENCE_AVERAGE_RATIO).abs(),
        entries,
    })
}
