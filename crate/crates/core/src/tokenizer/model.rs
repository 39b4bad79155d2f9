use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{
    dual_pdr_loss_graph, reconstruction_loss_graph, Codebook, PdrConfig, TokenDistributionGrid,
};
use crate::datapipe::VolumeGrid;
use crate::error::{Error, Result};
use crate::geometry::{Dims3, Spacing};
use crate::optim::ParamStore;
use crate::spad_conv::{apply_adapted, mirrored_stages, plan_network, BaseConvSpec, NetworkPlan};
use crate::tensor::{ConvGeometry, Graph, Real, Tensor, Var};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TokenizerConfig {
    pub in_channels: usize,
    /// Channel width of each encoder stage; the decoder mirrors them.
    pub widths: Vec<usize>,
    pub codebook_size: usize,
    pub code_dim: usize,
    pub pdr: PdrConfig,
    /// Weight of the reconstruction term.
    pub w_rec: f64,
    /// Standard deviation of the token-logit weights, in units of
    /// `1/sqrt(fan_in)`.
    pub logit_init_gain: f64,
}

impl Default for TokenizerConfig {
    fn default() -> Self {
        Self {
            in_channels: 1,
            widths: vec![16, 32, 64, 128],
            codebook_size: 32,
            code_dim: 16,
            pdr: PdrConfig::default(),
            w_rec: 1.0,
            logit_init_gain: 4.0,
        }
    }
}

impl TokenizerConfig {
    pub fn validate(&self) -> Result<()> {
        self.pdr.validate()?;
        if self.in_channels == 0 || self.code_dim == 0 || self.codebook_size < 2 {
            return Err(Error::Config(format!("invalid tokenizer sizes: {self:?}")));
        }
        if !(self.w_rec.is_finite() && self.w_rec >= 0.0) {
            return Err(Error::Config(format!(
                "w_rec must be non-negative, got {}",
                self.w_rec
            )));
        }
        Ok(())
    }

    /// In-plane reduction factor `2^stages`.
    pub fn plane_factor(&self) -> usize {
        1 << self.widths.len()
    }
}

#[derive(Debug, Clone, Copy)]
struct Layer {
    weight: usize,
    bias: usize,
}

/// Spacing-adaptive encoder/decoder with a soft-token bottleneck.
#[derive(Debug, Clone)]
pub struct Tokenizer<T: Real = f32> {
    pub config: TokenizerConfig,
    pub params: ParamStore<T>,
    stages: Vec<BaseConvSpec>,
    stage_layers: Vec<Layer>,
    to_logits: Layer,
    codebook: usize,
    dec_in: Layer,
    dec_out: Layer,
}

/// Graph handles produced by [`Tokenizer::forward`].
#[derive(Debug, Clone)]
pub struct TokenizerForward {
    /// `[N * cells, |V|]` soft-token distributions.
    pub probs: Var,
    /// `[N * cells, d]` expected embeddings.
    pub embedding: Var,
    pub recon: Var,
    pub batch: usize,
    pub grid_dims: Dims3,
    pub grid_spacing: Spacing,
    pub plan: NetworkPlan,
}

fn pointwise(cin: usize, cout: usize) -> [usize; 5] {
    [cout, cin, 1, 1, 1]
}

fn layer_name(i: usize, n: usize) -> String {
    let per_side = 2 * n;
    if i < per_side {
        format!(
            "enc.{}.{}",
            i / 2,
            if i.is_multiple_of(2) { "conv" } else { "down" }
        )
    } else {
        let j = i - per_side;
        format!(
            "dec.{}.{}",
            n - 1 - j / 2,
            if j.is_multiple_of(2) { "up" } else { "conv" }
        )
    }
}

impl<T: Real> Tokenizer<T> {
    pub fn new(config: TokenizerConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let stages = mirrored_stages(config.in_channels, &config.widths)?;
        let mut params = ParamStore::new();
        let add = |params: &mut ParamStore<T>,
                   name: &str,
                   shape: [usize; 5],
                   fan_in: usize,
                   gain: f64,
                   bias_len: usize,
                   rng: &mut ChaCha8Rng|
         -> Result<Layer> {
            let std = gain / (fan_in as f64).sqrt();
            Ok(Layer {
                weight: params.add(format!("{name}.weight"), Tensor::randn(&shape, std, rng))?,
                bias: params.add(format!("{name}.bias"), Tensor::zeros(&[bias_len]))?,
            })
        };
        let silu_gain = 2.0;
        let mut stage_layers = Vec::with_capacity(stages.len());
        for (i, s) in stages.iter().enumerate() {
            let taps: usize = s
                .kernel
                .iter()
                .zip(&s.stride)
                .map(|(k, st)| (k / st).max(1))
                .product();
            let taps = if s.kind.is_transposed() {
                taps
            } else {
                s.kernel.iter().product()
            };
            let layer = add(
                &mut params,
                &layer_name(i, config.widths.len()),
                s.weight_shape(),
                s.channels_in * taps,
                silu_gain,
                s.channels_out,
                &mut rng,
            )?;
            stage_layers.push(layer);
        }
        let last = *config.widths.last().expect("validated widths");
        let v = config.codebook_size;
        let to_logits = add(
            &mut params,
            "to_logits",
            pointwise(last, v),
            last,
            config.logit_init_gain,
            v,
            &mut rng,
        )?;
        let cb = Codebook::<T>::init(v, config.code_dim, &mut rng)?;
        let codebook = params.add("codebook", cb.table().clone())?;
        let dec_in = add(
            &mut params,
            "dec.in",
            pointwise(config.code_dim, last),
            config.code_dim,
            silu_gain,
            last,
            &mut rng,
        )?;
        let first = config.widths[0];
        let dec_out = add(
            &mut params,
            "dec.out",
            pointwise(first, config.in_channels),
            first,
            1.0,
            config.in_channels,
            &mut rng,
        )?;
        Ok(Self {
            config,
            params,
            stages,
            stage_layers,
            to_logits,
            codebook,
            dec_in,
            dec_out,
        })
    }

    pub fn stages(&self) -> &[BaseConvSpec] {
        &self.stages
    }

    pub fn codebook(&self) -> Result<Codebook<T>> {
        Codebook::new(self.params.get(self.codebook).clone())
    }

    /// Token grid extents for an input of extents `dims` and `spacing`.
    pub fn grid_extents(&self, dims: Dims3, spacing: &Spacing) -> Result<Dims3> {
        let plan = plan_network(&self.stages, *spacing)?;
        let mut e = dims;
        for st in &plan.stages[..self.stages.len() / 2] {
            if st.spec.kind.resamples_down() {
                for (k, (x, &s)) in e
                    .iter_mut()
                    .zip(&st.adaptation.effective_stride)
                    .enumerate()
                {
                    if !x.is_multiple_of(s) {
                        return Err(Error::Shape(format!(
                            "extent {x} of axis {k} is not divisible by stride {s} at stage {}",
                            st.index
                        )));
                    }
                    *x /= s;
                }
            }
        }
        Ok(e)
    }

    fn conv_act(
        &self,
        g: &mut Graph<T>,
        vars: &[Var],
        x: Var,
        layer: Layer,
        geom: ConvGeometry,
        act: bool,
    ) -> Result<Var> {
        let y = g.conv3d(x, vars[layer.weight], geom)?;
        let y = g.add_channel_bias(y, vars[layer.bias])?;
        Ok(if act { g.silu(y) } else { y })
    }

    /// Full autoencoder pass on `x: [N, C, D, H, W]` sharing one spacing.
    pub fn forward(
        &self,
        g: &mut Graph<T>,
        vars: &[Var],
        x: Var,
        spacing: &Spacing,
    ) -> Result<TokenizerForward> {
        let (n, dims) = match g.shape(x) {
            [n, c, d, h, w] if *c == self.config.in_channels => (*n, [*d, *h, *w]),
            s => {
                return Err(Error::Dimension(format!(
                    "tokenizer input must be [N, {}, D, H, W], got {s:?}",
                    self.config.in_channels
                )))
            }
        };
        let grid_dims = self.grid_extents(dims, spacing)?;
        let plan = plan_network(&self.stages, *spacing)?;
        let half = self.stages.len() / 2;
        let point = ConvGeometry::new([1; 3], [1; 3], [0; 3]);

        let mut h = x;
        for (i, st) in plan.stages[..half].iter().enumerate() {
            let l = self.stage_layers[i];
            let y = apply_adapted(g, h, vars[l.weight], &st.spec, &st.adaptation)?;
            let y = g.add_channel_bias(y, vars[l.bias])?;
            h = g.silu(y);
        }
        let logits = self.conv_act(g, vars, h, self.to_logits, point, false)?;
        let v = self.config.codebook_size;
        let cells: usize = grid_dims.iter().product();
        let logits = g.permute(logits, &[0, 2, 3, 4, 1])?;
        let logits = g.reshape(logits, &[n * cells, v])?;
        let probs = g.softmax(logits);
        let embedding = g.matmul(probs, vars[self.codebook])?;

        let e = g.reshape(
            embedding,
            &[
                n,
                grid_dims[0],
                grid_dims[1],
                grid_dims[2],
                self.config.code_dim,
            ],
        )?;
        let e = g.permute(e, &[0, 4, 1, 2, 3])?;
        let mut h = self.conv_act(g, vars, e, self.dec_in, point, true)?;
        for (i, st) in plan.stages.iter().enumerate().skip(half) {
            let l = self.stage_layers[i];
            let y = apply_adapted(g, h, vars[l.weight], &st.spec, &st.adaptation)?;
            let y = g.add_channel_bias(y, vars[l.bias])?;
            h = g.silu(y);
        }
        let recon = self.conv_act(g, vars, h, self.dec_out, point, false)?;
        Ok(TokenizerForward {
            probs,
            embedding,
            recon,
            batch: n,
            grid_dims,
            grid_spacing: plan.stages[half - 1].output_spacing,
            plan,
        })
    }

    /// `w_rec · MAE + L_reg`; returns `(total, reconstruction, regulariser)`.
    pub fn objective(
        &self,
        g: &mut Graph<T>,
        vars: &[Var],
        x: Var,
        spacing: &Spacing,
    ) -> Result<(Var, Var, Var, TokenizerForward)> {
        self.objective_with_target(g, vars, x, x, spacing)
    }

    /// [`Self::objective`] with the reconstruction scored against `target`.
    pub fn objective_with_target(
        &self,
        g: &mut Graph<T>,
        vars: &[Var],
        x: Var,
        target: Var,
        spacing: &Spacing,
    ) -> Result<(Var, Var, Var, TokenizerForward)> {
        let fwd = self.forward(g, vars, x, spacing)?;
        let rec = reconstruction_loss_graph(g, target, fwd.recon)?;
        let reg = dual_pdr_loss_graph(g, fwd.probs, &self.config.pdr)?;
        let weighted = g.scale(rec, T::from_f64(self.config.w_rec));
        let total = g.add(weighted, reg)?;
        Ok((total, rec, reg, fwd))
    }

    fn frozen_pass(&self, volume: &VolumeGrid) -> Result<(Graph<T>, TokenizerForward)> {
        let mut g = Graph::new();
        let vars = self.params.bind_frozen(&mut g);
        let x = volume.to_tensor::<T>();
        let x = x.reshape(&[
            1,
            volume.channels,
            volume.dims[0],
            volume.dims[1],
            volume.dims[2],
        ])?;
        let xv = g.constant(x);
        let fwd = self.forward(&mut g, &vars, xv, &volume.spacing)?;
        Ok((g, fwd))
    }

    /// Soft-token grid of one volume.
    pub fn encode(&self, volume: &VolumeGrid) -> Result<TokenDistributionGrid> {
        let (g, fwd) = self.frozen_pass(volume)?;
        let probs = g
            .value(fwd.probs)
            .data()
            .iter()
            .map(|&p| p.to_f64())
            .collect();
        let probs = renormalise(probs, self.config.codebook_size);
        TokenDistributionGrid::new(
            fwd.grid_dims,
            self.config.codebook_size,
            probs,
            fwd.grid_spacing,
        )
    }

    /// Decoder output `[C, D, H, W]` for one volume.
    pub fn reconstruct(&self, volume: &VolumeGrid) -> Result<Tensor<T>> {
        let (g, fwd) = self.frozen_pass(volume)?;
        g.value(fwd.recon).reshape(&volume.shape())
    }
}

/// Re-normalise rows in f64 so single-precision softmax outputs pass the
/// simplex check exactly.
fn renormalise(mut probs: Vec<f64>, vocab: usize) -> Vec<f64> {
    for row in probs.chunks_mut(vocab) {
        let s: f64 = row.iter().sum();
        row.iter_mut().for_each(|p| *p /= s);
    }
    probs
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> TokenizerConfig {
        TokenizerConfig {
            widths: vec![2, 2, 2, 2],
            codebook_size: 4,
            code_dim: 2,
            ..Default::default()
        }
    }

    fn spacing_for(da: u32) -> Spacing {
        Spacing::new((1u32 << da) as f64, 1.0, 1.0).unwrap()
    }

    #[test]
    fn grid_examples() {
        let t = Tokenizer::<f32>::new(small(), 0).unwrap();
        let dims = [16, 128, 128];
        assert_eq!(t.grid_extents(dims, &spacing_for(4)).unwrap(), [16, 8, 8]);
        assert_eq!(
            t.grid_extents(dims, &Spacing::two_d(1.0).unwrap()).unwrap(),
            [16, 8, 8]
        );
        assert_eq!(t.grid_extents(dims, &spacing_for(0)).unwrap(), [1, 8, 8]);
        assert_eq!(t.grid_extents(dims, &spacing_for(2)).unwrap(), [4, 8, 8]);
        assert!(matches!(
            t.grid_extents([8, 128, 128], &spacing_for(0)),
            Err(Error::Shape(_))
        ));
        assert!(matches!(
            t.grid_extents([16, 120, 128], &spacing_for(0)),
            Err(Error::Shape(_))
        ));
    }

    #[test]
    fn decode_restores_input_shape() {
        let t = Tokenizer::<f64>::new(small(), 1).unwrap();
        for da in 0..=6u32 {
            let v = VolumeGrid::zeros(1, [16, 16, 32], spacing_for(da), "ct");
            let grid = t.encode(&v).unwrap();
            assert_eq!(
                t.reconstruct(&v).unwrap().shape(),
                &[1, 16, 16, 32],
                "da {da}"
            );
            assert_eq!(grid.dims, [(1usize << da.min(4)), 1, 2]);
        }
    }

    #[test]
    fn encode_is_deterministic() {
        let t = Tokenizer::<f32>::new(small(), 3).unwrap();
        let v = VolumeGrid::new(
            1,
            [1, 16, 16],
            (0..256).map(|i| (i as f32 * 0.1).sin()).collect(),
            Spacing::two_d(1.0).unwrap(),
            "gray",
        )
        .unwrap();
        assert_eq!(t.encode(&v).unwrap(), t.encode(&v).unwrap());
    }
}
