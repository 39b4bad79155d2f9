//! Masked token modeling: a spacing-adaptive ViT predicts the frozen
//! tokenizer's soft tokens at randomly masked patches.

use std::collections::BTreeMap;

use log::{debug, info};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::datapipe::{da_bucket_batches, VolumeGrid};
use crate::error::{Error, Result};
use crate::geometry::{Dims3, Spacing};
use crate::optim::{Adam, AdamConfig, ParamStore};
use crate::rope::{RopeParams, DEFAULT_BASE_XY, DEFAULT_BASE_Z};
use crate::spad_conv::{adapt_conv_for, apply_adapted, BaseConvSpec, ConvAdaptation};
use crate::tensor::{Graph, Real, Tensor, Var};
use crate::tokenizer::{TokenDistributionGrid, Tokenizer};

pub const DEFAULT_MASK_RATIO: f64 = 0.55;
/// Floor applied to predicted probabilities inside the log.
pub const PROB_FLOOR: f64 = 1e-12;

/// The masked cell set `G_M` of one grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MaskSpec {
    pub ratio: f64,
    pub dims: Dims3,
    /// Sorted flat indices of the masked cells.
    pub masked: Vec<usize>,
    pub seed: u64,
}

impl MaskSpec {
    pub fn cells(&self) -> usize {
        self.dims.iter().product()
    }

    pub fn len(&self) -> usize {
        self.masked.len()
    }

    pub fn is_empty(&self) -> bool {
        self.masked.is_empty()
    }

    pub fn flags(&self) -> Vec<bool> {
        let mut f = vec![false; self.cells()];
        for &i in &self.masked {
            f[i] = true;
        }
        f
    }

    /// Expected `|G_M|` for the ratio.
    pub fn expected_len(&self) -> usize {
        (self.ratio * self.cells() as f64).round() as usize
    }
}

/// Uniformly sample `round(ratio·|G|)` cells without replacement.
pub fn sample_mask(dims: Dims3, ratio: f64, seed: u64) -> Result<MaskSpec> {
    if !(0.0..=1.0).contains(&ratio) {
        return Err(Error::Config(format!(
            "mask ratio must lie in [0, 1], got {ratio}"
        )));
    }
    let cells: usize = dims.iter().product();
    let n = (ratio * cells as f64).round() as usize;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut masked = rand::seq::index::sample(&mut rng, cells, n).into_vec();
    masked.sort_unstable();
    Ok(MaskSpec {
        ratio,
        dims,
        masked,
        seed,
    })
}

/// `-(1/|G_M|) Σ_{s∈G_M} Σ_i q_i ln max(q̃_i, 1e-12)`.
pub fn mim_loss(
    predicted: &TokenDistributionGrid,
    teacher: &TokenDistributionGrid,
    mask: &MaskSpec,
) -> Result<f64> {
    if predicted.dims != teacher.dims
        || predicted.vocab != teacher.vocab
        || mask.dims != teacher.dims
    {
        return Err(Error::Dimension(format!(
            "mim_loss grids {:?}/{:?} (|V| {}/{}) and mask {:?} are not aligned",
            predicted.dims, teacher.dims, predicted.vocab, teacher.vocab, mask.dims
        )));
    }
    if mask.is_empty() {
        return Err(Error::UndefinedLoss("no masked cells".into()));
    }
    let sum: f64 = mask
        .masked
        .iter()
        .map(|&s| {
            let (q, p) = (teacher.row(s), predicted.row(s));
            q.iter()
                .zip(p)
                .map(|(&q, &p)| q * p.max(PROB_FLOOR).ln())
                .sum::<f64>()
        })
        .sum();
    Ok(-sum / mask.len() as f64)
}

/// Graph form of [`mim_loss`] on `probs: [rows, |V|]`, restricted to `rows`.
pub fn mim_loss_graph<T: Real>(
    g: &mut Graph<T>,
    probs: Var,
    teacher: &Tensor<T>,
    rows: &[usize],
) -> Result<Var> {
    if rows.is_empty() {
        return Err(Error::UndefinedLoss("no masked cells".into()));
    }
    let picked = g.select_rows(probs, rows)?;
    let q = g.constant(select(teacher, rows)?);
    let logp = g.log_floored(picked, T::from_f64(PROB_FLOOR));
    let prod = g.mul(q, logp)?;
    let s = g.sum(prod);
    Ok(g.scale(s, T::from_f64(-1.0 / rows.len() as f64)))
}

fn select<T: Real>(t: &Tensor<T>, rows: &[usize]) -> Result<Tensor<T>> {
    let [n, c] = match t.shape() {
        [n, c] => [*n, *c],
        s => return Err(Error::Dimension(format!("expected [rows, C], got {s:?}"))),
    };
    let mut data = Vec::with_capacity(rows.len() * c);
    for &r in rows {
        if r >= n {
            return Err(Error::Dimension(format!("row {r} out of {n}")));
        }
        data.extend_from_slice(&t.data()[r * c..(r + 1) * c]);
    }
    Tensor::new(vec![rows.len(), c], data)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct VitConfig {
    pub in_channels: usize,
    /// Patch size `2^patch_k`; must match the tokenizer's reduction.
    pub patch_k: u32,
    pub width: usize,
    pub blocks: usize,
    pub heads: usize,
    pub mlp_hidden: usize,
    pub head_hidden: usize,
    pub vocab: usize,
    pub rope_base_xy: f64,
    pub rope_base_z: f64,
    pub ln_eps: f64,
}

impl Default for VitConfig {
    fn default() -> Self {
        Self {
            in_channels: 1,
            patch_k: 4,
            width: 64,
            blocks: 2,
            heads: 4,
            mlp_hidden: 128,
            head_hidden: 64,
            vocab: 32,
            rope_base_xy: DEFAULT_BASE_XY,
            rope_base_z: DEFAULT_BASE_Z,
            ln_eps: 1e-6,
        }
    }
}

impl VitConfig {
    pub fn validate(&self) -> Result<()> {
        if self.in_channels == 0 || self.width == 0 || self.heads == 0 || self.vocab < 2 {
            return Err(Error::Config(format!("invalid ViT sizes: {self:?}")));
        }
        if !self.width.is_multiple_of(self.heads) || !(self.width / self.heads).is_multiple_of(4) {
            return Err(Error::Config(format!(
                "head width {}/{} must be a multiple of 4",
                self.width, self.heads
            )));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.width / self.heads
    }
}

#[derive(Debug, Clone, Copy)]
struct Linear {
    weight: usize,
    bias: usize,
}

#[derive(Debug, Clone, Copy)]
struct Norm {
    gamma: usize,
    beta: usize,
}

#[derive(Debug, Clone, Copy)]
struct Block {
    ln1: Norm,
    q: Linear,
    k: Linear,
    v: Linear,
    o: Linear,
    ln2: Norm,
    fc1: Linear,
    fc2: Linear,
}

/// Pre-norm transformer over SPAD patch embeddings with 3D RoPE attention.
#[derive(Debug, Clone)]
pub struct VitModel<T: Real = f32> {
    pub config: VitConfig,
    pub params: ParamStore<T>,
    patch_spec: BaseConvSpec,
    patch: Linear,
    e_mask: usize,
    blocks: Vec<Block>,
    ln_f: Norm,
    head1: Linear,
    head2: Linear,
    rope: RopeParams,
}

#[derive(Debug, Clone)]
pub struct VitForward {
    pub logits: Var,
    /// `[N * cells, |V|]` predicted distributions.
    pub probs: Var,
    pub batch: usize,
    pub grid_dims: Dims3,
    pub grid_spacing: Spacing,
}

fn linear<T: Real>(
    p: &mut ParamStore<T>,
    name: &str,
    fan_in: usize,
    fan_out: usize,
    rng: &mut ChaCha8Rng,
) -> Result<Linear> {
    Ok(Linear {
        weight: p.add(
            format!("{name}.weight"),
            Tensor::randn(&[fan_in, fan_out], 1.0 / (fan_in as f64).sqrt(), rng),
        )?,
        bias: p.add(format!("{name}.bias"), Tensor::zeros(&[fan_out]))?,
    })
}

fn norm<T: Real>(p: &mut ParamStore<T>, name: &str, n: usize) -> Result<Norm> {
    Ok(Norm {
        gamma: p.add(format!("{name}.gamma"), Tensor::ones(&[n]))?,
        beta: p.add(format!("{name}.beta"), Tensor::zeros(&[n]))?,
    })
}

impl<T: Real> VitModel<T> {
    pub fn new(config: VitConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut p = ParamStore::new();
        let w = config.width;
        let patch_spec = BaseConvSpec::generalized_down(config.patch_k, config.in_channels, w)?;
        let fan_in = config.in_channels * patch_spec.kernel.iter().product::<usize>();
        let patch = Linear {
            weight: p.add(
                "patch.weight",
                Tensor::randn(
                    &patch_spec.weight_shape(),
                    1.0 / (fan_in as f64).sqrt(),
                    &mut rng,
                ),
            )?,
            bias: p.add("patch.bias", Tensor::zeros(&[w]))?,
        };
        let e_mask = p.add("e_mask", Tensor::randn(&[w], 0.02, &mut rng))?;
        let mut blocks = Vec::with_capacity(config.blocks);
        for b in 0..config.blocks {
            let n = |s: &str| format!("block.{b}.{s}");
            blocks.push(Block {
                ln1: norm(&mut p, &n("ln1"), w)?,
                q: linear(&mut p, &n("q"), w, w, &mut rng)?,
                k: linear(&mut p, &n("k"), w, w, &mut rng)?,
                v: linear(&mut p, &n("v"), w, w, &mut rng)?,
                o: linear(&mut p, &n("o"), w, w, &mut rng)?,
                ln2: norm(&mut p, &n("ln2"), w)?,
                fc1: linear(&mut p, &n("fc1"), w, config.mlp_hidden, &mut rng)?,
                fc2: linear(&mut p, &n("fc2"), config.mlp_hidden, w, &mut rng)?,
            });
        }
        let ln_f = norm(&mut p, "ln_f", w)?;
        let head1 = linear(&mut p, "head.hidden", w, config.head_hidden, &mut rng)?;
        let head2 = linear(
            &mut p,
            "head.out",
            config.head_hidden,
            config.vocab,
            &mut rng,
        )?;
        let rope = RopeParams::new(
            config.head_dim(),
            config.rope_base_xy,
            config.rope_base_xy,
            config.rope_base_z,
        )?;
        Ok(Self {
            config,
            params: p,
            patch_spec,
            patch,
            e_mask,
            blocks,
            ln_f,
            head1,
            head2,
            rope,
        })
    }

    pub fn patch_spec(&self) -> &BaseConvSpec {
        &self.patch_spec
    }

    pub fn rope(&self) -> &RopeParams {
        &self.rope
    }

    /// Patch grid extents, their spacing and the adapted patch convolution.
    pub fn grid_for(
        &self,
        dims: Dims3,
        spacing: &Spacing,
    ) -> Result<(Dims3, Spacing, ConvAdaptation)> {
        let a = adapt_conv_for(&self.patch_spec, spacing, None)?;
        let mut g = dims;
        for (k, (e, &s)) in g.iter_mut().zip(&a.effective_stride).enumerate() {
            if !e.is_multiple_of(s) {
                return Err(Error::Config(format!(
                    "extent {e} of axis {k} is not divisible by the patch stride {s}"
                )));
            }
            *e /= s;
        }
        Ok((g, a.output_spacing, a))
    }

    /// RoPE tables for every cell, position `(t_x, t_y, t_z) = (w, h, d)`.
    fn rope_tables(&self, dims: Dims3) -> (Vec<T>, Vec<T>) {
        let positions: Vec<[i64; 3]> = (0..dims[0])
            .flat_map(|d| {
                (0..dims[1])
                    .flat_map(move |h| (0..dims[2]).map(move |w| [w as i64, h as i64, d as i64]))
            })
            .collect();
        let (c, s) = self.rope.tables(&positions);
        (
            c.into_iter().map(T::from_f64).collect(),
            s.into_iter().map(T::from_f64).collect(),
        )
    }

    fn dense(&self, g: &mut Graph<T>, vars: &[Var], x: Var, l: Linear) -> Result<Var> {
        let y = g.matmul(x, vars[l.weight])?;
        g.add_row(y, vars[l.bias])
    }

    fn norm(&self, g: &mut Graph<T>, vars: &[Var], x: Var, n: Norm) -> Result<Var> {
        g.layer_norm(
            x,
            vars[n.gamma],
            vars[n.beta],
            T::from_f64(self.config.ln_eps),
        )
    }

    /// `[N*L, w] -> [N*heads, L, hd]`.
    fn split_heads(&self, g: &mut Graph<T>, x: Var, n: usize, l: usize) -> Result<Var> {
        let (h, hd) = (self.config.heads, self.config.head_dim());
        let x = g.reshape(x, &[n, l, h, hd])?;
        let x = g.permute(x, &[0, 2, 1, 3])?;
        g.reshape(x, &[n * h, l, hd])
    }

    #[allow(clippy::too_many_arguments)]
    fn attention(
        &self,
        g: &mut Graph<T>,
        vars: &[Var],
        x: Var,
        b: &Block,
        n: usize,
        l: usize,
        tables: &(Vec<T>, Vec<T>),
    ) -> Result<Var> {
        let (h, hd) = (self.config.heads, self.config.head_dim());
        let q = self.dense(g, vars, x, b.q)?;
        let k = self.dense(g, vars, x, b.k)?;
        let v = self.dense(g, vars, x, b.v)?;
        let q = self.split_heads(g, q, n, l)?;
        let k = self.split_heads(g, k, n, l)?;
        let v = self.split_heads(g, v, n, l)?;
        let q = g.rotate_pairs(q, tables.0.clone(), tables.1.clone())?;
        let k = g.rotate_pairs(k, tables.0.clone(), tables.1.clone())?;
        let kt = g.permute(k, &[0, 2, 1])?;
        let scores = g.batched_matmul(q, kt)?;
        let scores = g.scale(scores, T::from_f64(1.0 / (hd as f64).sqrt()));
        let attn = g.softmax(scores);
        let out = g.batched_matmul(attn, v)?;
        let out = g.reshape(out, &[n, h, l, hd])?;
        let out = g.permute(out, &[0, 2, 1, 3])?;
        let out = g.reshape(out, &[n * l, self.config.width])?;
        self.dense(g, vars, out, b.o)
    }

    /// Patch embeddings `[N*L, w]` of `x: [N, C, D, H, W]`.
    fn embed(
        &self,
        g: &mut Graph<T>,
        vars: &[Var],
        x: Var,
        spacing: &Spacing,
    ) -> Result<(Var, usize, Dims3, Spacing)> {
        let (n, dims) = match g.shape(x) {
            [n, c, d, h, w] if *c == self.config.in_channels => (*n, [*d, *h, *w]),
            s => {
                return Err(Error::Dimension(format!(
                    "ViT input must be [N, {}, D, H, W], got {s:?}",
                    self.config.in_channels
                )))
            }
        };
        let (grid, grid_spacing, a) = self.grid_for(dims, spacing)?;
        let y = apply_adapted(g, x, vars[self.patch.weight], &self.patch_spec, &a)?;
        let y = g.add_channel_bias(y, vars[self.patch.bias])?;
        let y = g.permute(y, &[0, 2, 3, 4, 1])?;
        let cells: usize = grid.iter().product();
        let y = g.reshape(y, &[n * cells, self.config.width])?;
        Ok((y, n, grid, grid_spacing))
    }

    /// Predict token distributions for every cell. `masks` holds one mask
    /// per sample; masked cells are replaced by `e_mask` before the blocks.
    pub fn forward(
        &self,
        g: &mut Graph<T>,
        vars: &[Var],
        x: Var,
        spacing: &Spacing,
        masks: &[MaskSpec],
    ) -> Result<VitForward> {
        let (tokens, n, grid, grid_spacing) = self.embed(g, vars, x, spacing)?;
        if masks.len() != n {
            return Err(Error::Dimension(format!(
                "{} masks for a batch of {n}",
                masks.len()
            )));
        }
        if let Some(m) = masks.iter().find(|m| m.dims != grid) {
            return Err(Error::Dimension(format!(
                "mask grid {:?} does not match patch grid {grid:?}",
                m.dims
            )));
        }
        let l: usize = grid.iter().product();
        let flags: Vec<bool> = masks.iter().flat_map(MaskSpec::flags).collect();
        let mut h = g.replace_rows(tokens, vars[self.e_mask], &flags)?;
        let tables = self.rope_tables(grid);
        for b in &self.blocks {
            let y = self.norm(g, vars, h, b.ln1)?;
            let y = self.attention(g, vars, y, b, n, l, &tables)?;
            h = g.add(h, y)?;
            let y = self.norm(g, vars, h, b.ln2)?;
            let y = self.dense(g, vars, y, b.fc1)?;
            let y = g.gelu(y);
            let y = self.dense(g, vars, y, b.fc2)?;
            h = g.add(h, y)?;
        }
        let y = self.norm(g, vars, h, self.ln_f)?;
        let y = self.dense(g, vars, y, self.head1)?;
        let y = g.gelu(y);
        let logits = self.dense(g, vars, y, self.head2)?;
        let probs = g.softmax(logits);
        Ok(VitForward {
            logits,
            probs,
            batch: n,
            grid_dims: grid,
            grid_spacing,
        })
    }

    fn single(volume: &VolumeGrid) -> Result<Tensor<T>> {
        let [c, d, h, w] = volume.shape();
        volume.to_tensor::<T>().reshape(&[1, c, d, h, w])
    }

    /// Patch tokens `[D', H', W', width]` and their spacing.
    pub fn patch_embed(&self, volume: &VolumeGrid) -> Result<(Tensor<T>, Spacing)> {
        let mut g = Graph::new();
        let vars = self.params.bind_frozen(&mut g);
        let x = g.constant(Self::single(volume)?);
        let (y, _, grid, spacing) = self.embed(&mut g, &vars, x, &volume.spacing)?;
        Ok((
            g.value(y)
                .reshape(&[grid[0], grid[1], grid[2], self.config.width])?,
            spacing,
        ))
    }

    /// Predicted distributions of one volume under `mask`.
    pub fn forward_masked(
        &self,
        volume: &VolumeGrid,
        mask: &MaskSpec,
    ) -> Result<TokenDistributionGrid> {
        let mut g = Graph::new();
        let vars = self.params.bind_frozen(&mut g);
        let x = g.constant(Self::single(volume)?);
        let f = self.forward(
            &mut g,
            &vars,
            x,
            &volume.spacing,
            std::slice::from_ref(mask),
        )?;
        let v = self.config.vocab;
        let mut probs: Vec<f64> = g
            .value(f.probs)
            .data()
            .iter()
            .map(|&p| Real::to_f64(p))
            .collect();
        for row in probs.chunks_mut(v) {
            let s: f64 = row.iter().sum();
            row.iter_mut().for_each(|p| *p /= s);
        }
        TokenDistributionGrid::new(f.grid_dims, v, probs, f.grid_spacing)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MimTrainConfig {
    pub vit: VitConfig,
    pub steps: usize,
    pub batch_size: usize,
    pub adam: AdamConfig,
    pub mask_ratio: f64,
}

impl Default for MimTrainConfig {
    fn default() -> Self {
        Self {
            vit: VitConfig::default(),
            steps: 2000,
            batch_size: 2,
            adam: AdamConfig {
                lr: 1e-3,
                ..AdamConfig::default()
            },
            mask_ratio: DEFAULT_MASK_RATIO,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MimStats {
    pub seed: u64,
    pub steps: usize,
    /// Masked cross-entropy over the whole set with fixed evaluation masks.
    pub initial_masked_ce: f64,
    pub final_masked_ce: f64,
    /// Mean teacher entropy over the evaluation masks, a lower bound of the
    /// masked cross-entropy.
    pub teacher_entropy: f64,
    /// Training masked cross-entropy of every step.
    pub ce_curve: Vec<f64>,
    /// Whether every training mask had exactly `round(ratio·|G|)` cells.
    pub mask_counts_exact: bool,
    pub masks_sampled: usize,
    pub tokenizer_hash_before: String,
    pub tokenizer_hash_after: String,
    pub param_hash: String,
}

fn eval_masks(teachers: &[TokenDistributionGrid], ratio: f64, seed: u64) -> Result<Vec<MaskSpec>> {
    teachers
        .iter()
        .enumerate()
        .map(|(i, t)| sample_mask(t.dims, ratio, seed ^ (0xe7a1_0000 + i as u64)))
        .collect()
}

fn masked_ce(
    model: &VitModel<f32>,
    data: &[VolumeGrid],
    teachers: &[TokenDistributionGrid],
    masks: &[MaskSpec],
) -> Result<f64> {
    let mut total = 0.0;
    let mut count = 0;
    for ((v, t), m) in data.iter().zip(teachers).zip(masks) {
        if m.is_empty() {
            continue;
        }
        total += mim_loss(&model.forward_masked(v, m)?, t, m)?;
        count += 1;
    }
    if count == 0 {
        return Err(Error::UndefinedLoss(
            "no masked cells in the evaluation set".into(),
        ));
    }
    Ok(total / count as f64)
}

/// Train a ViT to predict the frozen tokenizer's soft tokens at masked cells.
pub fn train_mim_toy(
    dataset: &[VolumeGrid],
    tokenizer: &Tokenizer<f32>,
    config: &MimTrainConfig,
    seed: u64,
) -> Result<(VitModel<f32>, MimStats)> {
    if dataset.is_empty() {
        return Err(Error::Config("empty training set".into()));
    }
    if config.vit.vocab != tokenizer.config.codebook_size {
        return Err(Error::Config(format!(
            "ViT vocabulary {} differs from the codebook size {}",
            config.vit.vocab, tokenizer.config.codebook_size
        )));
    }
    let hash_before = tokenizer.params.hash_hex();
    let mut model = VitModel::<f32>::new(config.vit.clone(), seed)?;
    let teachers = dataset
        .iter()
        .map(|v| tokenizer.encode(v))
        .collect::<Result<Vec<_>>>()?;
    for (v, t) in dataset.iter().zip(&teachers) {
        let (grid, _, _) = model.grid_for(v.dims, &v.spacing)?;
        if grid != t.dims {
            return Err(Error::Config(format!(
                "patch grid {grid:?} does not align with token grid {:?}",
                t.dims
            )));
        }
    }
    let fixed = eval_masks(&teachers, config.mask_ratio, seed)?;
    let teacher_entropy = {
        let (mut s, mut n) = (0.0, 0usize);
        for (t, m) in teachers.iter().zip(&fixed) {
            for &c in &m.masked {
                s += crate::tokenizer::entropy(t.row(c));
                n += 1;
            }
        }
        s / n.max(1) as f64
    };
    let initial = masked_ce(&model, dataset, &teachers, &fixed)?;
    info!("mim step 0: masked cross-entropy {initial:.5} (teacher entropy {teacher_entropy:.5})");

    let mut opt = Adam::new(config.adam, &model.params);
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x4d1d_0001);
    let das: Vec<_> = dataset.iter().map(VolumeGrid::da).collect();
    let mut curve = Vec::with_capacity(config.steps);
    let mut exact = true;
    let mut sampled = 0;
    let mut step = 0;
    let mut epoch = 0u64;
    while step < config.steps {
        let plan = da_bucket_batches(&das, config.batch_size, seed.wrapping_add(epoch))?;
        epoch += 1;
        for batch in &plan.batches {
            if step >= config.steps {
                break;
            }
            let mut groups: BTreeMap<Dims3, Vec<usize>> = BTreeMap::new();
            for &i in &batch.items {
                groups.entry(dataset[i].dims).or_default().push(i);
            }
            let mut g = Graph::new();
            let vars = model.params.bind(&mut g);
            let mut sums = Vec::new();
            let mut masked_total = 0usize;
            for items in groups.values() {
                let masks = items
                    .iter()
                    .map(|&i| sample_mask(teachers[i].dims, config.mask_ratio, rng.random()))
                    .collect::<Result<Vec<_>>>()?;
                sampled += masks.len();
                exact &= masks.iter().all(|m| m.len() == m.expected_len());
                let first = &dataset[items[0]];
                let [c, d, h, w] = first.shape();
                let mut xs = Vec::with_capacity(items.len() * first.data.len());
                let mut qs = Vec::new();
                let mut rows = Vec::new();
                for (j, &i) in items.iter().enumerate() {
                    xs.extend_from_slice(&dataset[i].data);
                    qs.extend(teachers[i].probs.iter().map(|&p| p as f32));
                    let cells = teachers[i].cells();
                    rows.extend(masks[j].masked.iter().map(|&s| j * cells + s));
                }
                if rows.is_empty() {
                    continue;
                }
                let x = g.constant(Tensor::new(vec![items.len(), c, d, h, w], xs)?);
                let f = model.forward(&mut g, &vars, x, &first.spacing, &masks)?;
                let q = Tensor::new(vec![qs.len() / config.vit.vocab, config.vit.vocab], qs)?;
                let mean = mim_loss_graph(&mut g, f.probs, &q, &rows)?;
                sums.push(g.scale(mean, rows.len() as f32));
                masked_total += rows.len();
            }
            if sums.is_empty() {
                continue;
            }
            let mut total = sums[0];
            for &s in &sums[1..] {
                total = g.add(total, s)?;
            }
            let loss = g.scale(total, 1.0 / masked_total as f32);
            let l = g.value(loss).item() as f64;
            if !l.is_finite() {
                return Err(Error::Divergence {
                    step,
                    detail: format!("masked cross-entropy {l}"),
                });
            }
            let grads = g.backward(loss)?;
            opt.step(&mut model.params, &vars, &grads)?;
            curve.push(l);
            step += 1;
            debug!("mim step {step}: masked cross-entropy {l:.5}");
        }
    }
    let final_ce = masked_ce(&model, dataset, &teachers, &fixed)?;
    info!("mim step {step}: masked cross-entropy {final_ce:.5}");
    let stats = MimStats {
        seed,
        steps: step,
        initial_masked_ce: initial,
        final_masked_ce: final_ce,
        teacher_entropy,
        ce_curve: curve,
        mask_counts_exact: exact,
        masks_sampled: sampled,
        tokenizer_hash_before: hash_before,
        tokenizer_hash_after: tokenizer.params.hash_hex(),
        param_hash: model.params.hash_hex(),
    };
    Ok((model, stats))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tokenizer::TokenizerConfig;

    fn small() -> VitConfig {
        VitConfig {
            width: 8,
            blocks: 1,
            heads: 2,
            mlp_hidden: 8,
            head_hidden: 8,
            vocab: 4,
            ..Default::default()
        }
    }

    fn aniso(da: u32) -> Spacing {
        Spacing::new((1u32 << da) as f64, 1.0, 1.0).unwrap()
    }

    fn noise(dims: Dims3, spacing: Spacing, seed: u64) -> VolumeGrid {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data = (0..dims.iter().product::<usize>())
            .map(|_| rng.random_range(-1.0..1.0))
            .collect();
        VolumeGrid::new(1, dims, data, spacing, "ct").unwrap()
    }

    fn grid(dims: Dims3, vocab: usize, seed: u64) -> TokenDistributionGrid {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let cells: usize = dims.iter().product();
        let mut probs: Vec<f64> = (0..cells * vocab)
            .map(|_| rng.random_range(0.01..1.0))
            .collect();
        for row in probs.chunks_mut(vocab) {
            let s: f64 = row.iter().sum();
            row.iter_mut().for_each(|p| *p /= s);
        }
        TokenDistributionGrid::new(dims, vocab, probs, Spacing::two_d(1.0).unwrap()).unwrap()
    }

    #[test]
    fn mask_examples() {
        let m = sample_mask([1, 10, 10], 0.55, 3).unwrap();
        assert_eq!(m.len(), 55);
        assert!(m.masked.windows(2).all(|w| w[0] < w[1]) && m.masked.iter().all(|&i| i < 100));
        assert!(sample_mask([1, 10, 10], 0.0, 3).unwrap().is_empty());
        assert_eq!(m, sample_mask([1, 10, 10], 0.55, 3).unwrap());
        assert_ne!(m.masked, sample_mask([1, 10, 10], 0.55, 4).unwrap().masked);
        assert!(sample_mask([1, 2, 2], 1.5, 0).is_err());
    }

    #[test]
    fn patch_grid_examples() {
        let m = VitModel::<f32>::new(small(), 0).unwrap();
        assert_eq!(
            m.grid_for([16, 160, 160], &aniso(0)).unwrap().0,
            [1, 10, 10]
        );
        assert_eq!(
            m.grid_for([16, 160, 160], &aniso(2)).unwrap().0,
            [4, 10, 10]
        );
        assert!(matches!(
            m.grid_for([8, 160, 160], &aniso(0)),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn patch_grid_aligns_with_tokenizer() {
        let vit = VitModel::<f32>::new(small(), 0).unwrap();
        let tok = Tokenizer::<f32>::new(
            TokenizerConfig {
                widths: vec![2; 4],
                codebook_size: 4,
                code_dim: 2,
                ..Default::default()
            },
            0,
        )
        .unwrap();
        for da in 0..=6 {
            let dims = [16, 32, 48];
            assert_eq!(
                vit.grid_for(dims, &aniso(da)).unwrap().0,
                tok.grid_extents(dims, &aniso(da)).unwrap()
            );
        }
    }

    #[test]
    fn loss_examples() {
        let g = grid([1, 2, 3], 4, 1);
        let all = sample_mask(g.dims, 1.0, 0).unwrap();
        let one_hot = TokenDistributionGrid::new(
            [1, 1, 2],
            3,
            vec![1.0, 0.0, 0.0, 0.0, 0.0, 1.0],
            Spacing::two_d(1.0).unwrap(),
        )
        .unwrap();
        let both = sample_mask([1, 1, 2], 1.0, 0).unwrap();
        assert_eq!(mim_loss(&one_hot, &one_hot, &both).unwrap(), 0.0);
        let uniform = TokenDistributionGrid::new(g.dims, 4, vec![0.25; 24], g.spacing).unwrap();
        assert!((mim_loss(&uniform, &g, &all).unwrap() - 4f64.ln()).abs() < 1e-12);
        assert!(matches!(
            mim_loss(&g, &g, &sample_mask(g.dims, 0.0, 0).unwrap()),
            Err(Error::UndefinedLoss(_))
        ));
    }

    #[test]
    fn graph_loss_matches_direct() {
        let (p, q) = (grid([2, 2, 2], 5, 1), grid([2, 2, 2], 5, 2));
        let m = sample_mask(p.dims, 0.55, 9).unwrap();
        let mut g = Graph::<f64>::new();
        let pv = g.constant(p.tensor());
        let l = mim_loss_graph(&mut g, pv, &q.tensor(), &m.masked).unwrap();
        assert!((g.value(l).item() - mim_loss(&p, &q, &m).unwrap()).abs() < 1e-12);
    }

    #[test]
    fn outputs_are_simplex_rows() {
        let m = VitModel::<f64>::new(small(), 1).unwrap();
        let v = noise([4, 32, 32], aniso(4), 0);
        let mask = sample_mask([4, 2, 2], 0.55, 0).unwrap();
        let out = m.forward_masked(&v, &mask).unwrap();
        assert_eq!(out.dims, [4, 2, 2]);
        let (t, _) = m.patch_embed(&v).unwrap();
        assert_eq!(t.shape(), &[4, 2, 2, 8]);
    }

    #[test]
    fn all_masked_output_ignores_input() {
        let m = VitModel::<f64>::new(small(), 2).unwrap();
        let mask = sample_mask([2, 2, 2], 1.0, 0).unwrap();
        let a = m
            .forward_masked(&noise([4, 32, 32], aniso(3), 1), &mask)
            .unwrap();
        let b = m
            .forward_masked(&noise([4, 32, 32], aniso(3), 2), &mask)
            .unwrap();
        assert_eq!(a, b);
        let none = sample_mask([2, 2, 2], 0.0, 0).unwrap();
        let c = m
            .forward_masked(&noise([4, 32, 32], aniso(3), 1), &none)
            .unwrap();
        let d = m
            .forward_masked(&noise([4, 32, 32], aniso(3), 2), &none)
            .unwrap();
        assert_ne!(c, d);
    }

    #[test]
    fn batch_order_does_not_change_outputs() {
        let m = VitModel::<f64>::new(small(), 3).unwrap();
        let (a, b) = (
            noise([2, 16, 32], aniso(4), 1),
            noise([2, 16, 32], aniso(4), 2),
        );
        let ma = sample_mask([2, 1, 2], 0.5, 1).unwrap();
        let mb = sample_mask([2, 1, 2], 0.5, 2).unwrap();
        let run = |xs: [&VolumeGrid; 2], masks: [MaskSpec; 2]| {
            let mut g = Graph::new();
            let vars = m.params.bind_frozen(&mut g);
            let data = xs
                .iter()
                .flat_map(|v| v.data.iter().map(|&x| x as f64))
                .collect();
            let x = g.constant(Tensor::new(vec![2, 1, 2, 16, 32], data).unwrap());
            let f = m.forward(&mut g, &vars, x, &xs[0].spacing, &masks).unwrap();
            g.value(f.probs).data().to_vec()
        };
        let ab = run([&a, &b], [ma.clone(), mb.clone()]);
        let ba = run([&b, &a], [mb, ma]);
        let half = ab.len() / 2;
        assert_eq!(&ab[..half], &ba[half..]);
        assert_eq!(&ab[half..], &ba[..half]);
    }
}
