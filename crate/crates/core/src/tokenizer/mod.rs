//! Soft-token visual tokenizer.
//!
//! The encoder maps a volume to a grid of categorical distributions over a
//! codebook. Each cell is embedded as the expectation of the codebook rows
//! under its distribution, so quantization stays differentiable and
//! deterministic. A dual prior regularizer keeps the averaged distribution
//! spread over the codebook while sharpening every individual cell.

mod model;
mod train;

pub use model::{Tokenizer, TokenizerConfig, TokenizerForward};
pub use train::{train_tokenizer_toy, EpochStats, EvalStats, TokenizerStats, TokenizerTrainConfig};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{Dims3, Spacing};
use crate::tensor::{Graph, Real, Tensor, Var};

/// Tolerance on row sums of a [`TokenDistributionGrid`].
pub const ROW_SUM_TOLERANCE: f64 = 1e-6;

/// `|V| x d` embedding table.
#[derive(Debug, Clone, PartialEq)]
pub struct Codebook<T: Real = f64> {
    table: Tensor<T>,
}

impl<T: Real> Codebook<T> {
    pub fn new(table: Tensor<T>) -> Result<Self> {
        match table.shape() {
            [v, d] if *v >= 2 && *d >= 1 => {}
            s => {
                return Err(Error::Shape(format!(
                    "codebook table must be [|V| >= 2, d], got {s:?}"
                )))
            }
        }
        if !table.all_finite() {
            return Err(Error::Config("codebook rows must be finite".into()));
        }
        Ok(Self { table })
    }

    /// Symmetric uniform rows in `[-1/√d, 1/√d)`.
    pub fn init<R: Rng + ?Sized>(size: usize, dim: usize, rng: &mut R) -> Result<Self> {
        Self::new(Tensor::uniform(
            &[size, dim],
            1.0 / (dim as f64).sqrt(),
            rng,
        ))
    }

    pub fn size(&self) -> usize {
        self.table.shape()[0]
    }

    pub fn dim(&self) -> usize {
        self.table.shape()[1]
    }

    pub fn table(&self) -> &Tensor<T> {
        &self.table
    }
}

/// A `D' x H' x W'` grid of distributions over the codebook, stored as
/// row-major cells of `|V|` probabilities.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TokenDistributionGrid {
    pub dims: Dims3,
    pub vocab: usize,
    pub probs: Vec<f64>,
    pub spacing: Spacing,
}

impl TokenDistributionGrid {
    pub fn new(dims: Dims3, vocab: usize, probs: Vec<f64>, spacing: Spacing) -> Result<Self> {
        let cells: usize = dims.iter().product();
        if vocab < 2 || cells == 0 || probs.len() != cells * vocab {
            return Err(Error::Shape(format!(
                "{} probabilities for {dims:?} cells over {vocab} tokens",
                probs.len()
            )));
        }
        for (i, row) in probs.chunks(vocab).enumerate() {
            let sum: f64 = row.iter().sum();
            if row.iter().any(|&p| p.is_nan() || p < 0.0) || (sum - 1.0).abs() > ROW_SUM_TOLERANCE {
                return Err(Error::Config(format!(
                    "cell {i} is not a distribution (sum {sum})"
                )));
            }
        }
        Ok(Self {
            dims,
            vocab,
            probs,
            spacing,
        })
    }

    pub fn cells(&self) -> usize {
        self.dims.iter().product()
    }

    pub fn row(&self, cell: usize) -> &[f64] {
        &self.probs[cell * self.vocab..(cell + 1) * self.vocab]
    }

    pub fn rows(&self) -> std::slice::ChunksExact<'_, f64> {
        self.probs.chunks_exact(self.vocab)
    }

    /// Arithmetic mean of all rows.
    pub fn mean_row(&self) -> Vec<f64> {
        let mut m = vec![0.0; self.vocab];
        for row in self.rows() {
            for (a, &p) in m.iter_mut().zip(row) {
                *a += p;
            }
        }
        let n = self.cells() as f64;
        m.iter_mut().for_each(|a| *a /= n);
        m
    }

    /// Distribution of the token at a uniformly random position `S`,
    /// `P(I_S = i) = Σ_s P(I_S = i | S = s) P(S = s)`.
    pub fn random_position_distribution(&self) -> Vec<f64> {
        let p_s = 1.0 / self.cells() as f64;
        let mut out = vec![0.0; self.vocab];
        for row in self.rows() {
            for (o, &p) in out.iter_mut().zip(row) {
                *o += p * p_s;
            }
        }
        out
    }

    pub fn tensor<T: Real>(&self) -> Tensor<T> {
        Tensor::new(
            vec![self.cells(), self.vocab],
            self.probs.iter().map(|&p| T::from_f64(p)).collect(),
        )
        .expect("validated grid")
    }
}

/// Natural-log entropy with `0 ln 0 = 0`.
pub fn entropy(p: &[f64]) -> f64 {
    -p.iter()
        .filter(|&&x| x > 0.0)
        .map(|&x| x * x.ln())
        .sum::<f64>()
}

/// Per cell `Σ_i p_i e_i`; returns `[cells, d]`.
pub fn soft_quantize(
    grid: &TokenDistributionGrid,
    codebook: &Codebook<f64>,
) -> Result<Tensor<f64>> {
    if grid.vocab != codebook.size() {
        return Err(Error::Dimension(format!(
            "grid over {} tokens vs codebook of {}",
            grid.vocab,
            codebook.size()
        )));
    }
    grid.tensor::<f64>().matmul(codebook.table())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PdrConfig {
    /// Weight of the entropy of the averaged distribution (maximised).
    pub lambda1: f64,
    /// Weight of the mean per-cell entropy (minimised).
    pub lambda2: f64,
}

impl Default for PdrConfig {
    fn default() -> Self {
        Self {
            lambda1: 1.0,
            lambda2: 0.1,
        }
    }
}

impl PdrConfig {
    pub const DISABLED: PdrConfig = PdrConfig {
        lambda1: 0.0,
        lambda2: 0.0,
    };

    pub fn validate(&self) -> Result<()> {
        let ok = |v: f64| v.is_finite() && v >= 0.0;
        if !ok(self.lambda1) || !ok(self.lambda2) {
            return Err(Error::Config(format!(
                "PDR weights must be finite and non-negative: {self:?}"
            )));
        }
        Ok(())
    }

    pub fn is_enabled(&self) -> bool {
        self.lambda1 > 0.0 || self.lambda2 > 0.0
    }
}

/// `-λ1 H(mean_s q^(s)) + λ2 mean_s H(q^(s))`.
pub fn dual_pdr_loss(grid: &TokenDistributionGrid, cfg: &PdrConfig) -> f64 {
    let mean_entropy = grid.rows().map(entropy).sum::<f64>() / grid.cells() as f64;
    -cfg.lambda1 * entropy(&grid.mean_row()) + cfg.lambda2 * mean_entropy
}

/// Graph form of [`dual_pdr_loss`] over the rows of `probs: [M, |V|]`.
pub fn dual_pdr_loss_graph<T: Real>(g: &mut Graph<T>, probs: Var, cfg: &PdrConfig) -> Result<Var> {
    let rows = match g.shape(probs) {
        [m, _] => *m,
        s => {
            return Err(Error::Dimension(format!(
                "PDR expects [cells, |V|], got {s:?}"
            )))
        }
    };
    let inv = T::from_f64(1.0 / rows as f64);
    let total = g.sum_axis(probs, 0)?;
    let mean = g.scale(total, inv);
    // -λ1 H(mean) = λ1 Σ mean ln mean.
    let ml = g.xlogx(mean);
    let neg_h_mean = g.sum(ml);
    let pl = g.xlogx(probs);
    let sum_pl = g.sum(pl);
    let a = g.scale(neg_h_mean, T::from_f64(cfg.lambda1));
    // λ2 mean H(q) = -λ2/M Σ q ln q.
    let b = g.scale(sum_pl, T::from_f64(-cfg.lambda2) * inv);
    g.add(a, b)
}

/// Mean absolute error.
pub fn reconstruction_loss<T: Real>(x: &Tensor<T>, x_hat: &Tensor<T>) -> Result<f64> {
    x.expect_same_shape(x_hat)?;
    if x.is_empty() {
        return Err(Error::Shape(
            "reconstruction loss of an empty tensor".into(),
        ));
    }
    let s: f64 = x
        .data()
        .iter()
        .zip(x_hat.data())
        .map(|(&a, &b)| (a.to_f64() - b.to_f64()).abs())
        .sum();
    Ok(s / x.len() as f64)
}

pub fn reconstruction_loss_graph<T: Real>(g: &mut Graph<T>, x: Var, x_hat: Var) -> Result<Var> {
    let d = g.sub(x_hat, x)?;
    let a = g.abs(d);
    Ok(g.mean(a))
}

/// Token usage over a collection of grids.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Utilization {
    /// Mean probability of each token over all cells.
    pub histogram: Vec<f64>,
    /// `E[KL(q || uniform)] = ln|V| - E[H(q)]`.
    pub mean_kl_to_uniform: f64,
    /// Tokens whose mass exceeds `1 / (10|V|)`.
    pub tokens_above_threshold: usize,
}

pub fn codebook_utilization(grids: &[TokenDistributionGrid]) -> Result<Utilization> {
    let vocab = grids
        .first()
        .ok_or_else(|| Error::Config("no grids to summarise".into()))?
        .vocab;
    if grids.iter().any(|g| g.vocab != vocab) {
        return Err(Error::Dimension(
            "grids over different codebook sizes".into(),
        ));
    }
    let mut hist = vec![0.0; vocab];
    let mut h_sum = 0.0;
    let mut cells = 0usize;
    for g in grids {
        for row in g.rows() {
            for (a, &p) in hist.iter_mut().zip(row) {
                *a += p;
            }
            h_sum += entropy(row);
        }
        cells += g.cells();
    }
    hist.iter_mut().for_each(|a| *a /= cells as f64);
    let threshold = 1.0 / (10.0 * vocab as f64);
    Ok(Utilization {
        tokens_above_threshold: hist.iter().filter(|&&m| m > threshold).count(),
        mean_kl_to_uniform: (vocab as f64).ln() - h_sum / cells as f64,
        histogram: hist,
    })
}
