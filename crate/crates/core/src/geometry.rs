//! Physical voxel spacing, degree of anisotropy and spacing propagation.
//!
//! Axis order is always (depth, height, width). The depth spacing of a 2D
//! image is represented by [`SliceSpacing::TwoD`] instead of a large number.

use std::fmt;

use serde::de::{self, Deserializer, Visitor};
use serde::ser::{SerializeSeq, Serializer};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Stage-count cap used as the anisotropy degree of 2D images.
pub const DEFAULT_TWO_D_CAP: u32 = 6;

/// Ratios closer than this (relative) to a power of two are snapped to it.
const POW2_SNAP_TOLERANCE: f64 = 1e-9;

/// Per-dimension integer extents or factors, ordered (depth, height, width).
pub type Dims3 = [usize; 3];

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum SliceSpacing {
    Mm(f64),
    TwoD,
}

/// Voxel spacing in millimetres with isotropic in-plane spacing.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Spacing {
    slice: SliceSpacing,
    plane: f64,
}

fn check_positive(name: &str, v: f64) -> Result<()> {
    if v.is_finite() && v > 0.0 {
        Ok(())
    } else {
        Err(Error::InvalidGeometry(format!(
            "{name} must be positive and finite, got {v}"
        )))
    }
}

impl Spacing {
    pub fn new(s_slice: f64, s_h: f64, s_w: f64) -> Result<Self> {
        check_positive("s_slice", s_slice)?;
        check_positive("s_h", s_h)?;
        check_positive("s_w", s_w)?;
        if (s_h - s_w).abs() > 1e-12 * s_h.max(s_w) {
            return Err(Error::InvalidGeometry(format!(
                "in-plane spacing must be isotropic, got s_h={s_h}, s_w={s_w}"
            )));
        }
        Ok(Self {
            slice: SliceSpacing::Mm(s_slice),
            plane: s_h,
        })
    }

    pub fn isotropic(s: f64) -> Result<Self> {
        Self::new(s, s, s)
    }

    /// Spacing of a 2D image with the given in-plane spacing.
    pub fn two_d(s_plane: f64) -> Result<Self> {
        check_positive("s_plane", s_plane)?;
        Ok(Self {
            slice: SliceSpacing::TwoD,
            plane: s_plane,
        })
    }

    pub fn slice(&self) -> SliceSpacing {
        self.slice
    }

    /// Depth spacing, `None` for 2D images.
    pub fn s_slice(&self) -> Option<f64> {
        match self.slice {
            SliceSpacing::Mm(v) => Some(v),
            SliceSpacing::TwoD => None,
        }
    }

    pub fn s_h(&self) -> f64 {
        self.plane
    }

    pub fn s_w(&self) -> f64 {
        self.plane
    }

    pub fn s_plane(&self) -> f64 {
        self.plane
    }

    pub fn is_two_d(&self) -> bool {
        matches!(self.slice, SliceSpacing::TwoD)
    }

    /// Per-axis physical scale used for distance computations. The depth
    /// scale of a 2D image is irrelevant (one slice) and reported as the
    /// in-plane spacing.
    pub fn axis_scales(&self) -> [f64; 3] {
        [self.s_slice().unwrap_or(self.plane), self.plane, self.plane]
    }
}

impl fmt::Display for Spacing {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.slice {
            SliceSpacing::Mm(s) => write!(f, "({s}, {p}, {p})", p = self.plane),
            SliceSpacing::TwoD => write!(f, "(2d, {p}, {p})", p = self.plane),
        }
    }
}

impl Serialize for Spacing {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        match self.slice {
            SliceSpacing::TwoD => serializer.serialize_str("2d"),
            SliceSpacing::Mm(s) => {
                let mut seq = serializer.serialize_seq(Some(3))?;
                seq.serialize_element(&s)?;
                seq.serialize_element(&self.plane)?;
                seq.serialize_element(&self.plane)?;
                seq.end()
            }
        }
    }
}

impl<'de> Deserialize<'de> for Spacing {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        struct SpacingVisitor;

        impl<'de> Visitor<'de> for SpacingVisitor {
            type Value = Spacing;

            fn expecting(&self, f: &mut fmt::Formatter) -> fmt::Result {
                f.write_str("an array [s_slice, s_h, s_w] or the string \"2d\"")
            }

            fn visit_str<E: de::Error>(self, v: &str) -> Result<Spacing, E> {
                if v == "2d" {
                    Spacing::two_d(1.0).map_err(E::custom)
                } else {
                    Err(E::invalid_value(de::Unexpected::Str(v), &self))
                }
            }

            fn visit_seq<A: de::SeqAccess<'de>>(self, mut seq: A) -> Result<Spacing, A::Error> {
                let mut vals = [0.0f64; 3];
                for (i, v) in vals.iter_mut().enumerate() {
                    *v = seq
                        .next_element()?
                        .ok_or_else(|| de::Error::invalid_length(i, &self))?;
                }
                if seq.next_element::<f64>()?.is_some() {
                    return Err(de::Error::invalid_length(4, &self));
                }
                Spacing::new(vals[0], vals[1], vals[2]).map_err(de::Error::custom)
            }
        }

        deserializer.deserialize_any(SpacingVisitor)
    }
}

/// Number of depth resamplings to skip before the anisotropy is tolerable.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct AnisotropyDegree(pub u32);

impl AnisotropyDegree {
    pub fn get(self) -> u32 {
        self.0
    }

    pub fn is_anisotropic(self) -> bool {
        self.0 >= 1
    }
}

impl fmt::Display for AnisotropyDegree {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "DA={}", self.0)
    }
}

/// `floor(log2(ratio))`, snapping ratios within tolerance of a power of two.
fn floor_log2_snapped(ratio: f64) -> i64 {
    let l = ratio.log2();
    let nearest = l.round();
    let pow = nearest.exp2();
    if (ratio - pow).abs() <= POW2_SNAP_TOLERANCE * pow {
        nearest as i64
    } else {
        l.floor() as i64
    }
}

/// `max{0, floor(log2(s_slice / s_plane))}`, with 2D images mapped to `cap`.
pub fn degree_of_anisotropy_with_cap(spacing: &Spacing, cap: u32) -> AnisotropyDegree {
    match spacing.slice {
        SliceSpacing::TwoD => AnisotropyDegree(cap),
        SliceSpacing::Mm(s) => {
            let k = floor_log2_snapped(s / spacing.plane);
            AnisotropyDegree(k.max(0) as u32)
        }
    }
}

pub fn degree_of_anisotropy(spacing: &Spacing) -> AnisotropyDegree {
    degree_of_anisotropy_with_cap(spacing, DEFAULT_TWO_D_CAP)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Direction {
    Downsample,
    Upsample,
}

/// Spacing after resampling by `stride`: downsampling multiplies each
/// component, upsampling divides. A 2D depth spacing stays 2D.
pub fn propagate_spacing(
    spacing: &Spacing,
    stride: Dims3,
    direction: Direction,
) -> Result<Spacing> {
    if stride.contains(&0) {
        return Err(Error::InvalidGeometry(format!(
            "strides must be >= 1, got {stride:?}"
        )));
    }
    if stride[1] != stride[2] {
        return Err(Error::InvalidGeometry(format!(
            "in-plane strides must match to keep isotropic spacing, got {stride:?}"
        )));
    }
    let apply = |v: f64, s: usize| match direction {
        Direction::Downsample => v * s as f64,
        Direction::Upsample => v / s as f64,
    };
    let plane = apply(spacing.plane, stride[1]);
    match spacing.slice {
        SliceSpacing::TwoD => Spacing::two_d(plane),
        SliceSpacing::Mm(s) => Spacing::new(apply(s, stride[0]), plane, plane),
    }
}
