//! Volume I/O, preprocessing, DA-dependent cropping, DA-bucketed batching
//! and a synthetic volume generator.
//!
//! A volume on disk is a pair `<name>.vol` (raw little-endian voxels,
//! C-order `[C, D, H, W]`) and `<name>.json` (the sidecar).

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{degree_of_anisotropy, AnisotropyDegree, Dims3, Spacing};
use crate::spad_conv::FeatureMap;
use crate::tensor::{Real, Tensor};

/// Shorter in-plane side above which volumes are resized.
pub const MAX_PLANE_SIZE: usize = 512;
/// Intensity percentile used as the foreground threshold for scanner data.
pub const FOREGROUND_PERCENTILE: f64 = 0.5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum VoxelType {
    F32,
    U8,
}

impl VoxelType {
    fn bytes(self) -> usize {
        match self {
            VoxelType::F32 => 4,
            VoxelType::U8 => 1,
        }
    }
}

/// A `[C, D, H, W]` intensity array with depth first.
#[derive(Debug, Clone, PartialEq)]
pub struct VolumeGrid {
    pub channels: usize,
    pub dims: Dims3,
    pub dtype: VoxelType,
    pub data: Vec<f32>,
    pub spacing: Spacing,
    pub modality: String,
    pub depth_axis_moved: bool,
}

impl VolumeGrid {
    pub fn new(
        channels: usize,
        dims: Dims3,
        data: Vec<f32>,
        spacing: Spacing,
        modality: impl Into<String>,
    ) -> Result<Self> {
        let v = Self {
            channels,
            dims,
            dtype: VoxelType::F32,
            data,
            spacing,
            modality: modality.into(),
            depth_axis_moved: false,
        };
        v.validate()?;
        Ok(v)
    }

    pub fn zeros(channels: usize, dims: Dims3, spacing: Spacing, modality: &str) -> Self {
        let n = channels * dims.iter().product::<usize>();
        Self::new(channels, dims, vec![0.0; n], spacing, modality).expect("consistent zeros")
    }

    fn validate(&self) -> Result<()> {
        let expect = self.channels * self.dims.iter().product::<usize>();
        if self.data.len() != expect || expect == 0 {
            return Err(Error::Shape(format!(
                "volume data of length {} for {} x {:?}",
                self.data.len(),
                self.channels,
                self.dims
            )));
        }
        Ok(())
    }

    pub fn shape(&self) -> [usize; 4] {
        [self.channels, self.dims[0], self.dims[1], self.dims[2]]
    }

    pub fn da(&self) -> AnisotropyDegree {
        degree_of_anisotropy(&self.spacing)
    }

    fn index(&self, c: usize, d: usize, h: usize, w: usize) -> usize {
        ((c * self.dims[0] + d) * self.dims[1] + h) * self.dims[2] + w
    }

    pub fn get(&self, c: usize, d: usize, h: usize, w: usize) -> f32 {
        self.data[self.index(c, d, h, w)]
    }

    pub fn to_tensor<T: Real>(&self) -> Tensor<T> {
        Tensor::new(
            self.shape().to_vec(),
            self.data.iter().map(|&v| T::from_f64(v as f64)).collect(),
        )
        .expect("validated volume")
    }

    pub fn to_feature_map<T: Real>(&self) -> FeatureMap<T> {
        FeatureMap {
            data: self.to_tensor(),
            spacing: self.spacing,
        }
    }

    /// Copy of the sub-box starting at `origin` (which may lie outside the
    /// volume; out-of-range voxels read as zero).
    fn window(&self, origin: [isize; 3], size: Dims3) -> VolumeGrid {
        let mut out = VolumeGrid {
            dims: size,
            ..self.clone()
        };
        out.data = vec![0.0; self.channels * size.iter().product::<usize>()];
        for c in 0..self.channels {
            for d in 0..size[0] {
                for h in 0..size[1] {
                    for w in 0..size[2] {
                        let src = [
                            d as isize + origin[0],
                            h as isize + origin[1],
                            w as isize + origin[2],
                        ];
                        if src
                            .iter()
                            .zip(&self.dims)
                            .all(|(&s, &n)| s >= 0 && (s as usize) < n)
                        {
                            let v = self.get(c, src[0] as usize, src[1] as usize, src[2] as usize);
                            let i = out.index(c, d, h, w);
                            out.data[i] = v;
                        }
                    }
                }
            }
        }
        out
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Sidecar {
    shape: [usize; 4],
    dtype: VoxelType,
    spacing: Spacing,
    modality: String,
    depth_axis_moved: bool,
    /// In-plane spacing of 2D images, whose `spacing` field is just `"2d"`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    s_plane: Option<f64>,
}

fn base_path(path: &Path) -> PathBuf {
    match path.extension().and_then(|e| e.to_str()) {
        Some("vol") | Some("json") => path.with_extension(""),
        _ => path.to_path_buf(),
    }
}

fn with_suffix(base: &Path, ext: &str) -> PathBuf {
    let mut s = base.as_os_str().to_owned();
    s.push(".");
    s.push(ext);
    PathBuf::from(s)
}

/// Paths of the payload and sidecar for `path` (with or without extension).
pub fn volume_paths(path: &Path) -> (PathBuf, PathBuf) {
    let base = base_path(path);
    (with_suffix(&base, "vol"), with_suffix(&base, "json"))
}

pub fn save_volume(volume: &VolumeGrid, path: &Path) -> Result<()> {
    volume.validate()?;
    let (vol, json) = volume_paths(path);
    let bytes: Vec<u8> = match volume.dtype {
        VoxelType::F32 => volume.data.iter().flat_map(|v| v.to_le_bytes()).collect(),
        VoxelType::U8 => volume
            .data
            .iter()
            .map(|&v| {
                if v.fract() == 0.0 && (0.0..=255.0).contains(&v) {
                    Ok(v as u8)
                } else {
                    Err(Error::Format(format!(
                        "value {v} is not representable as u8"
                    )))
                }
            })
            .collect::<Result<_>>()?,
    };
    let sidecar = Sidecar {
        shape: volume.shape(),
        dtype: volume.dtype,
        spacing: volume.spacing,
        modality: volume.modality.clone(),
        depth_axis_moved: volume.depth_axis_moved,
        s_plane: volume.spacing.is_two_d().then(|| volume.spacing.s_plane()),
    };
    if let Some(dir) = vol.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    fs::write(&vol, bytes)?;
    fs::write(&json, serde_json::to_string_pretty(&sidecar)?)?;
    Ok(())
}

pub fn load_volume(path: &Path) -> Result<VolumeGrid> {
    let (vol, json) = volume_paths(path);
    let text = fs::read_to_string(&json).map_err(|e| {
        Error::Format(format!(
            "missing or unreadable sidecar {}: {e}",
            json.display()
        ))
    })?;
    let sidecar: Sidecar = serde_json::from_str(&text)
        .map_err(|e| Error::Format(format!("bad sidecar {}: {e}", json.display())))?;
    let bytes = fs::read(&vol)?;
    let n: usize = sidecar.shape.iter().product();
    if n == 0 || bytes.len() != n * sidecar.dtype.bytes() {
        return Err(Error::Format(format!(
            "payload of {} bytes does not match shape {:?} ({:?})",
            bytes.len(),
            sidecar.shape,
            sidecar.dtype
        )));
    }
    let data = match sidecar.dtype {
        VoxelType::F32 => bytes
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
            .collect(),
        VoxelType::U8 => bytes.iter().map(|&b| b as f32).collect(),
    };
    let spacing = match (sidecar.spacing.is_two_d(), sidecar.s_plane) {
        (true, Some(p)) => Spacing::two_d(p)?,
        _ => sidecar.spacing,
    };
    let [c, d, h, w] = sidecar.shape;
    Ok(VolumeGrid {
        channels: c,
        dims: [d, h, w],
        dtype: sidecar.dtype,
        data,
        spacing,
        modality: sidecar.modality,
        depth_axis_moved: sidecar.depth_axis_moved,
    })
}

/// Spacing of an unprocessed volume, whose depth axis may be anywhere.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum RawSpacing {
    Axes([f64; 3]),
    /// A 2D image; the singleton axis is depth.
    TwoD {
        s_plane: f64,
    },
}

/// A `[C, a0, a1, a2]` volume before depth normalisation.
#[derive(Debug, Clone, PartialEq)]
pub struct RawVolume {
    pub channels: usize,
    pub dims: Dims3,
    pub data: Vec<f32>,
    pub spacing: RawSpacing,
    pub modality: String,
    /// Depth axis recorded in the source metadata, if any.
    pub depth_axis: Option<usize>,
}

impl From<VolumeGrid> for RawVolume {
    fn from(v: VolumeGrid) -> Self {
        let spacing = match v.spacing.s_slice() {
            Some(s) => RawSpacing::Axes([s, v.spacing.s_h(), v.spacing.s_w()]),
            None => RawSpacing::TwoD {
                s_plane: v.spacing.s_plane(),
            },
        };
        RawVolume {
            channels: v.channels,
            dims: v.dims,
            data: v.data,
            spacing,
            modality: v.modality,
            depth_axis: Some(0),
        }
    }
}

/// The axis whose spacing deviates most (in log scale) from the other two;
/// ties keep the lowest axis.
pub fn most_anisotropic_axis(spacing: [f64; 3]) -> usize {
    let l = spacing.map(f64::ln);
    let score = |i: usize| {
        let others: f64 = (0..3).filter(|&j| j != i).map(|j| l[j]).sum::<f64>() / 2.0;
        (l[i] - others).abs()
    };
    let mut best = 0;
    for i in 1..3 {
        if score(i) > score(best) + 1e-12 {
            best = i;
        }
    }
    best
}

fn is_photo_modality(modality: &str) -> bool {
    let m = modality.to_ascii_lowercase();
    m.contains("rgb") || m.contains("gray") || m.contains("grey")
}

/// Linear-interpolated percentile (`p` in `[0, 100]`).
pub fn percentile(values: &[f32], p: f64) -> f64 {
    let mut v: Vec<f64> = values.iter().map(|&x| x as f64).collect();
    v.sort_by(f64::total_cmp);
    let pos = p / 100.0 * (v.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    v[lo] + (v[hi] - v[lo]) * (pos - lo as f64)
}

/// Box-filter resampling weights from `n` to `m` samples:
/// `out[j] = Σ w·in[i]` over the source footprint of output `j`.
fn area_weights(n: usize, m: usize) -> Vec<Vec<(usize, f64)>> {
    let scale = n as f64 / m as f64;
    (0..m)
        .map(|j| {
            let (a, b) = (j as f64 * scale, (j + 1) as f64 * scale);
            let mut ws = Vec::new();
            let mut i = a.floor() as usize;
            while (i as f64) < b && i < n {
                let overlap = (b.min(i as f64 + 1.0) - a.max(i as f64)).max(0.0);
                if overlap > 0.0 {
                    ws.push((i, overlap / scale));
                }
                i += 1;
            }
            ws
        })
        .collect()
}

/// Area-resample every `[H, W]` plane to `[nh, nw]`.
fn resize_plane(v: &VolumeGrid, nh: usize, nw: usize) -> Vec<f32> {
    let [d, h, w] = v.dims;
    let wh = area_weights(h, nh);
    let ww = area_weights(w, nw);
    let mut out = vec![0.0f32; v.channels * d * nh * nw];
    let mut tmp = vec![0.0f64; nh * w];
    for plane in 0..v.channels * d {
        let src = &v.data[plane * h * w..(plane + 1) * h * w];
        for (j, ws) in wh.iter().enumerate() {
            for x in 0..w {
                tmp[j * w + x] = ws.iter().map(|&(i, wt)| wt * src[i * w + x] as f64).sum();
            }
        }
        let dst = &mut out[plane * nh * nw..(plane + 1) * nh * nw];
        for y in 0..nh {
            for (k, ws) in ww.iter().enumerate() {
                dst[y * nw + k] = ws.iter().map(|&(i, wt)| wt * tmp[y * w + i]).sum::<f64>() as f32;
            }
        }
    }
    out
}

/// Target in-plane extents for the shorter-side rule.
pub fn resized_plane(h: usize, w: usize) -> Option<(usize, usize)> {
    let short = h.min(w);
    if short <= MAX_PLANE_SIZE {
        return None;
    }
    let scale = MAX_PLANE_SIZE as f64 / short as f64;
    let long = |n: usize| {
        if n == short {
            MAX_PLANE_SIZE
        } else {
            (n as f64 * scale).round() as usize
        }
    };
    Some((long(h), long(w)))
}

/// Move depth first, crop to the foreground bounding box, and shrink the
/// plane so its shorter side is at most [`MAX_PLANE_SIZE`].
pub fn preprocess(raw: RawVolume, depth_axis_hint: Option<usize>) -> Result<VolumeGrid> {
    let n: usize = raw.dims.iter().product();
    if raw.data.len() != raw.channels * n || n == 0 {
        return Err(Error::Shape(format!(
            "raw data length {} for {:?}",
            raw.data.len(),
            raw.dims
        )));
    }
    let depth = match (depth_axis_hint, raw.depth_axis, raw.spacing) {
        (Some(a), _, _) | (None, Some(a), _) => a,
        (None, None, RawSpacing::Axes(s)) => most_anisotropic_axis(s),
        (None, None, RawSpacing::TwoD { .. }) => raw.dims.iter().position(|&e| e == 1).unwrap_or(0),
    };
    if depth > 2 {
        return Err(Error::Config(format!("depth axis {depth} out of range")));
    }
    let order: [usize; 3] = match depth {
        0 => [0, 1, 2],
        1 => [1, 0, 2],
        _ => [2, 0, 1],
    };
    let dims = order.map(|a| raw.dims[a]);
    let spacing = match raw.spacing {
        RawSpacing::Axes(s) => {
            let [sd, sh, sw] = order.map(|a| s[a]);
            if (sh - sw).abs() > 1e-6 * sh.max(sw) {
                return Err(Error::InvalidGeometry(format!(
                    "in-plane spacing ({sh}, {sw}) is not isotropic after moving axis {depth} first"
                )));
            }
            Spacing::new(sd, sh, sh)?
        }
        RawSpacing::TwoD { s_plane } => Spacing::two_d(s_plane)?,
    };
    let tensor = Tensor::new(
        vec![raw.channels, raw.dims[0], raw.dims[1], raw.dims[2]],
        raw.data,
    )?;
    let moved = tensor.permute(&[0, order[0] + 1, order[1] + 1, order[2] + 1])?;
    let mut v = VolumeGrid {
        channels: raw.channels,
        dims,
        dtype: VoxelType::F32,
        data: moved.into_data(),
        spacing,
        modality: raw.modality,
        depth_axis_moved: depth != 0,
    };

    let threshold = if is_photo_modality(&v.modality) {
        0.0
    } else {
        percentile(&v.data, FOREGROUND_PERCENTILE)
    };
    let (lo, hi) = foreground_box(&v, threshold).ok_or_else(|| {
        Error::EmptyCrop(format!(
            "no voxel above the foreground threshold {threshold}"
        ))
    })?;
    let size = [hi[0] - lo[0] + 1, hi[1] - lo[1] + 1, hi[2] - lo[2] + 1];
    if size != v.dims {
        let moved_flag = v.depth_axis_moved;
        v = v.window(lo.map(|x| x as isize), size);
        v.depth_axis_moved = moved_flag;
    }

    if let Some((nh, nw)) = resized_plane(v.dims[1], v.dims[2]) {
        let short = v.dims[1].min(v.dims[2]);
        let factor = short as f64 / MAX_PLANE_SIZE as f64;
        v.data = resize_plane(&v, nh, nw);
        v.dims = [v.dims[0], nh, nw];
        let plane = v.spacing.s_plane() * factor;
        v.spacing = match v.spacing.s_slice() {
            Some(s) => Spacing::new(s, plane, plane)?,
            None => Spacing::two_d(plane)?,
        };
    }
    Ok(v)
}

/// Inclusive bounding box of voxels where any channel exceeds `threshold`.
fn foreground_box(v: &VolumeGrid, threshold: f64) -> Option<(Dims3, Dims3)> {
    let [nd, nh, nw] = v.dims;
    let mut lo = [usize::MAX; 3];
    let mut hi = [0usize; 3];
    let mut any = false;
    for d in 0..nd {
        for h in 0..nh {
            for w in 0..nw {
                if (0..v.channels).any(|c| v.get(c, d, h, w) as f64 > threshold) {
                    any = true;
                    for (k, x) in [d, h, w].into_iter().enumerate() {
                        lo[k] = lo[k].min(x);
                        hi[k] = hi[k].max(x);
                    }
                }
            }
        }
    }
    any.then_some((lo, hi))
}

/// Crop depth `max(ceil(depth_base / 2^da), 1)`.
pub fn crop_depth(depth_base: usize, da: AnisotropyDegree) -> usize {
    let div = 1usize
        .checked_shl(da.get())
        .filter(|&d| d != 0)
        .unwrap_or(usize::MAX);
    depth_base.div_ceil(div).max(1)
}

/// Crop extents `[depth, plane, plane]` for a DA.
pub fn crop_extent(da: AnisotropyDegree, depth_base: usize, plane: usize) -> Dims3 {
    [crop_depth(depth_base, da), plane, plane]
}

/// Uniformly placed random crop of [`crop_extent`]; undersized axes are
/// zero-padded symmetrically first.
pub fn crop_sample<R: Rng + ?Sized>(
    volume: &VolumeGrid,
    da: AnisotropyDegree,
    base: (usize, usize),
    rng: &mut R,
) -> VolumeGrid {
    let size = crop_extent(da, base.0, base.1);
    let mut origin = [0isize; 3];
    for k in 0..3 {
        let n = volume.dims[k];
        origin[k] = if n >= size[k] {
            rng.random_range(0..=n - size[k]) as isize
        } else {
            -(((size[k] - n) / 2) as isize)
        };
    }
    volume.window(origin, size)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Batch {
    pub items: Vec<usize>,
    pub da: AnisotropyDegree,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BatchPlan {
    pub batches: Vec<Batch>,
}

impl BatchPlan {
    pub fn item_count(&self) -> usize {
        self.batches.iter().map(|b| b.items.len()).sum()
    }
}

/// Group item ids (positions in `das`) by DA, shuffle each group, chunk it,
/// then shuffle the batch order. The last chunk of a group may be short.
pub fn da_bucket_batches(
    das: &[AnisotropyDegree],
    batch_size: usize,
    seed: u64,
) -> Result<BatchPlan> {
    if batch_size == 0 {
        return Err(Error::Config("batch size must be positive".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut groups: BTreeMap<AnisotropyDegree, Vec<usize>> = BTreeMap::new();
    for (id, &da) in das.iter().enumerate() {
        groups.entry(da).or_default().push(id);
    }
    let mut batches = Vec::new();
    for (da, mut ids) in groups {
        ids.shuffle(&mut rng);
        batches.extend(ids.chunks(batch_size).map(|c| Batch {
            items: c.to_vec(),
            da,
        }));
    }
    batches.shuffle(&mut rng);
    Ok(BatchPlan { batches })
}

/// Entry of a dataset index file.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct IndexEntry {
    pub path: String,
    pub modality: String,
}

pub fn load_index(path: &Path) -> Result<Vec<IndexEntry>> {
    Ok(serde_json::from_str(&fs::read_to_string(path)?)?)
}

/// Load every volume of an index; relative paths resolve against the
/// index file's directory.
pub fn load_dataset(index_path: &Path) -> Result<Vec<VolumeGrid>> {
    let dir = index_path.parent().unwrap_or(Path::new("."));
    load_index(index_path)?
        .iter()
        .map(|e| {
            let p = Path::new(&e.path);
            load_volume(&if p.is_absolute() {
                p.to_path_buf()
            } else {
                dir.join(p)
            })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthSpec {
    pub n: usize,
    /// Depth of an isotropic volume; anisotropic ones get
    /// `max(ceil(depth_base / 2^DA), 1)` slices.
    pub depth_base: usize,
    /// Fixed slice count for every 3D volume, overriding `depth_base`.
    #[serde(default)]
    pub fixed_depth: Option<usize>,
    pub plane: usize,
    pub spacings: Vec<Spacing>,
    pub noise_std: f64,
    pub modality: String,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            n: 16,
            depth_base: 16,
            fixed_depth: None,
            plane: 32,
            spacings: default_synth_spacings(),
            noise_std: 0.02,
            modality: "synthetic".into(),
        }
    }
}

impl SynthSpec {
    /// The toy training corpus: `n` volumes of 8 × 64 × 64 spanning DA 1..=4
    /// plus 2D. Eight slices cannot form a 4-stage token grid at DA 0, so the
    /// isotropic spacing is left out.
    pub fn toy(n: usize) -> Self {
        Self {
            n,
            plane: 64,
            fixed_depth: Some(8),
            spacings: default_synth_spacings()[1..].to_vec(),
            ..Self::default()
        }
    }
}

/// One spacing per DA in `0..=4` plus a 2D spacing.
pub fn default_synth_spacings() -> Vec<Spacing> {
    let mut v: Vec<Spacing> = (0..=4)
        .map(|k| Spacing::new((1u32 << k) as f64, 1.0, 1.0).expect("valid"))
        .collect();
    v.push(Spacing::two_d(1.0).expect("valid"));
    v
}

struct Shape {
    centre: [f64; 3],
    radii: [f64; 3],
    is_box: bool,
    level: f64,
    gradient: [f64; 3],
}

/// Volumes of random ellipsoids and boxes with smooth intensity ramps plus
/// Gaussian noise. Shapes live in normalised physical coordinates, so
/// anisotropic volumes sample the same kind of scene more coarsely in depth.
pub fn synth_generate(spec: &SynthSpec, seed: u64) -> Result<Vec<VolumeGrid>> {
    if spec.spacings.is_empty() || spec.plane == 0 || spec.depth_base == 0 {
        return Err(Error::Config(
            "synthetic spec needs spacings and positive extents".into(),
        ));
    }
    let noise = Normal::new(0.0, spec.noise_std.max(0.0))
        .map_err(|e| Error::Config(format!("noise std: {e}")))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(spec.n);
    for _ in 0..spec.n {
        let spacing = spec.spacings[rng.random_range(0..spec.spacings.len())];
        let da = degree_of_anisotropy(&spacing);
        let depth = match (spacing.is_two_d(), spec.fixed_depth) {
            (true, _) => 1,
            (false, Some(d)) => d,
            (false, None) => crop_depth(spec.depth_base, da),
        };
        let dims = [depth, spec.plane, spec.plane];
        let shapes: Vec<Shape> = (0..rng.random_range(1..=3))
            .map(|_| Shape {
                centre: [
                    rng.random_range(0.2..0.8),
                    rng.random_range(0.2..0.8),
                    rng.random_range(0.2..0.8),
                ],
                radii: [
                    rng.random_range(0.1..0.35),
                    rng.random_range(0.1..0.35),
                    rng.random_range(0.1..0.35),
                ],
                is_box: rng.random_bool(0.5),
                level: rng.random_range(0.4..1.0),
                gradient: [
                    rng.random_range(-0.3..0.3),
                    rng.random_range(-0.3..0.3),
                    rng.random_range(-0.3..0.3),
                ],
            })
            .collect();
        let mut data = Vec::with_capacity(dims.iter().product());
        for d in 0..dims[0] {
            for h in 0..dims[1] {
                for w in 0..dims[2] {
                    let p = [
                        if depth == 1 {
                            0.5
                        } else {
                            (d as f64 + 0.5) / depth as f64
                        },
                        (h as f64 + 0.5) / dims[1] as f64,
                        (w as f64 + 0.5) / dims[2] as f64,
                    ];
                    let mut v = 0.0;
                    for s in &shapes {
                        let q: Vec<f64> =
                            (0..3).map(|k| (p[k] - s.centre[k]) / s.radii[k]).collect();
                        let inside = if s.is_box {
                            q.iter().all(|x| x.abs() <= 1.0)
                        } else {
                            q.iter().map(|x| x * x).sum::<f64>() <= 1.0
                        };
                        if inside {
                            v = s.level + (0..3).map(|k| s.gradient[k] * q[k]).sum::<f64>();
                        }
                    }
                    data.push((v + noise.sample(&mut rng)) as f32);
                }
            }
        }
        out.push(VolumeGrid::new(
            1,
            dims,
            data,
            spacing,
            spec.modality.clone(),
        )?);
    }
    Ok(out)
}

/// Write volumes as `<dir>/vol_XXXX.{vol,json}` plus `<dir>/index.json`.
pub fn write_dataset(volumes: &[VolumeGrid], dir: &Path) -> Result<PathBuf> {
    fs::create_dir_all(dir)?;
    let mut index = Vec::with_capacity(volumes.len());
    for (i, v) in volumes.iter().enumerate() {
        let name = format!("vol_{i:04}");
        save_volume(v, &dir.join(&name))?;
        index.push(IndexEntry {
            path: format!("{name}.vol"),
            modality: v.modality.clone(),
        });
    }
    let path = dir.join("index.json");
    fs::write(&path, serde_json::to_string_pretty(&index)?)?;
    Ok(path)
}
