//! Factorised relational encoder/decoder with a learned per-coordinate
//! uncertainty head.
//!
//! The encoder reads a window of normalised states and emits, for every
//! ordered particle pair, logits over `edge_types_per_factor` types in each of
//! `n_edge_factors` independent factors. The decoder rolls the phase vector
//! forward one sampled step at a time; messages along each pair are weighted
//! by the (relaxed) edge sample, summed at the receiver, and a node MLP adds
//! a delta to the current state. Extra state channels carry the raw
//! uncertainty, mapped through a softplus on output.

mod batch;
mod net;

use std::rc::Rc;

use rand::Rng;
use rand_distr::{Distribution, Uniform};
use serde::{Deserialize, Serialize};

use crate::autodiff::{concat_cols, softplus, CheckpointError, Tensor, TensorError, Var};

pub use batch::{Batch, BatchLayout};
pub use net::{Fnri, Mode, Rollout, RunningNorm};

#[derive(Debug, thiserror::Error)]
pub enum ModelError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("invalid model configuration: {0}")]
    Config(String),
    #[error("expected a window of {expected} steps, got {got}")]
    Window { expected: usize, got: usize },
    #[error("teacher sequence has {got} states, rollout needs {needed}")]
    Teacher { needed: usize, got: usize },
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
}

/// How many independent uncertainty values each particle-step carries.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SigmaMode {
    /// No uncertainty channels; the loss uses a constant variance.
    Fixed,
    /// One value shared by all four coordinates.
    Isotropic,
    /// One value for position, one for velocity.
    SemiIsotropic,
    /// One value per coordinate.
    Anisotropic,
}

impl SigmaMode {
    pub fn channels(self) -> usize {
        match self {
            SigmaMode::Fixed => 0,
            SigmaMode::Isotropic => 1,
            SigmaMode::SemiIsotropic => 2,
            SigmaMode::Anisotropic => 4,
        }
    }

    /// Which channel feeds each of the four coordinates.
    pub fn channel_of(self, coord: usize) -> usize {
        match self {
            SigmaMode::Fixed | SigmaMode::Isotropic => 0,
            SigmaMode::SemiIsotropic => coord / 2,
            SigmaMode::Anisotropic => coord,
        }
    }

    /// Widens `(rows, channels)` to `(rows, 4)`.
    pub fn expand<'g>(self, sigma: Var<'g>) -> Result<Var<'g>, TensorError> {
        match self {
            SigmaMode::Anisotropic => Ok(sigma),
            SigmaMode::Fixed | SigmaMode::Isotropic => concat_cols(&[sigma, sigma, sigma, sigma]),
            SigmaMode::SemiIsotropic => {
                let p = sigma.slice_cols(0, 1)?;
                let v = sigma.slice_cols(1, 2)?;
                concat_cols(&[p, p, v, v])
            }
        }
    }
}

/// Softplus with sharpness `beta`, and its closed-form inverse used to seed
/// the raw uncertainty channel so the first output equals `sigma0`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SigmaTransform {
    pub sigma0: f64,
    pub beta: f64,
}

impl SigmaTransform {
    pub fn new(sigma0: f64, beta: f64) -> Result<Self, ModelError> {
        if !(sigma0 > 0.0 && beta > 0.0) {
            return Err(ModelError::Config(
                "sigma0 and beta must be positive".into(),
            ));
        }
        Ok(SigmaTransform { sigma0, beta })
    }

    pub fn forward(&self, x: f64) -> f64 {
        softplus(x, self.beta)
    }

    /// `x = ln|exp(beta sigma) - 1| / beta`.
    pub fn inverse(&self, sigma: f64) -> f64 {
        (self.beta * sigma).exp_m1().abs().ln() / self.beta
    }

    pub fn raw0(&self) -> f64 {
        self.inverse(self.sigma0)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub hidden_dim: usize,
    pub n_edge_factors: usize,
    pub edge_types_per_factor: usize,
    pub tau: f64,
    pub encoder_window: usize,
    pub decoder_window: usize,
    pub teacher_force_every: usize,
    pub sigma_mode: SigmaMode,
    /// Initial standard deviation (or Lorentzian FWHM), normalised units.
    pub sigma0: f64,
    pub beta: f64,
    /// The first type of every factor sends no message ("no interaction").
    pub skip_first: bool,
    pub bn_momentum: f64,
    pub init_seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            hidden_dim: 32,
            n_edge_factors: 2,
            edge_types_per_factor: 2,
            tau: 0.5,
            encoder_window: 50,
            decoder_window: 50,
            teacher_force_every: 10,
            sigma_mode: SigmaMode::Isotropic,
            sigma0: 5e-5f64.sqrt(),
            beta: 5.0,
            skip_first: true,
            bn_momentum: 0.1,
            init_seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        let bad = |m: &str| Err(ModelError::Config(m.to_string()));
        if self.hidden_dim == 0 || self.n_edge_factors == 0 || self.edge_types_per_factor < 2 {
            return bad(
                "hidden_dim, n_edge_factors must be positive and each factor needs two types",
            );
        }
        if !(self.tau > 0.0) {
            return bad("tau must be positive");
        }
        if self.encoder_window == 0 || self.decoder_window == 0 || self.teacher_force_every == 0 {
            return bad("windows and teacher_force_every must be at least 1");
        }
        if !(self.sigma0 > 0.0 && self.beta > 0.0) {
            return bad("sigma0 and beta must be positive");
        }
        if !(0.0..=1.0).contains(&self.bn_momentum) {
            return bad("bn_momentum must lie in [0, 1]");
        }
        Ok(())
    }

    pub fn transform(&self) -> SigmaTransform {
        SigmaTransform {
            sigma0: self.sigma0,
            beta: self.beta,
        }
    }

    /// Phase coordinates plus uncertainty channels.
    pub fn state_dim(&self) -> usize {
        4 + self.sigma_mode.channels()
    }

    pub fn logit_dim(&self) -> usize {
        self.n_edge_factors * self.edge_types_per_factor
    }
}

/// Edge-type logits for every ordered pair of every sample in a batch.
#[derive(Debug, Clone, PartialEq)]
pub struct EdgePosterior {
    /// `(batch * n_edges, factors * types)`.
    pub logits: Tensor,
    pub factors: usize,
    pub types: usize,
}

impl EdgePosterior {
    /// Per-factor softmax probabilities, same layout as `logits`.
    pub fn probs(&self) -> Tensor {
        let k = self.types;
        let mut out = self.logits.clone();
        for row in out.data_mut().chunks_mut(k) {
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut s = 0.0;
            for v in row.iter_mut() {
                *v = (*v - m).exp();
                s += *v;
            }
            row.iter_mut().for_each(|v| *v /= s);
        }
        out
    }

    /// Argmax type index per `(row, factor)`, ties to the lowest index.
    pub fn argmax(&self) -> Vec<Vec<usize>> {
        let k = self.types;
        self.logits
            .data()
            .chunks(self.factors * k)
            .map(|row| {
                row.chunks(k)
                    .map(|block| {
                        let mut best = 0;
                        for (i, v) in block.iter().enumerate() {
                            if *v > block[best] {
                                best = i;
                            }
                        }
                        best
                    })
                    .collect()
            })
            .collect()
    }

    /// One-hot tensor of the argmax types.
    pub fn hard_sample(&self) -> Tensor {
        let k = self.types;
        let cols = self.factors * k;
        let mut out = Tensor::zeros(self.logits.rows(), cols);
        for (r, choice) in self.argmax().into_iter().enumerate() {
            for (f, c) in choice.into_iter().enumerate() {
                out.set(r, f * k + c, 1.0);
            }
        }
        out
    }
}

/// Standard Gumbel noise `-ln(-ln U)`.
pub fn sample_gumbel<R: Rng + ?Sized>(rows: usize, cols: usize, rng: &mut R) -> Tensor {
    let u = Uniform::new(f64::MIN_POSITIVE, 1.0).expect("valid range");
    let data = (0..rows * cols)
        .map(|_| -(-u.sample(rng).ln()).ln())
        .collect();
    Tensor::from_rows(rows, cols, data)
}

/// Concrete relaxation: per factor block, `softmax((logits + noise) / tau)`.
pub fn gumbel_softmax<'g>(
    logits: Var<'g>,
    factors: usize,
    types: usize,
    tau: f64,
    noise: Option<&Tensor>,
) -> Result<Var<'g>, TensorError> {
    let shifted = match noise {
        Some(n) => logits.add(logits.graph().constant(n.clone()))?,
        None => logits,
    };
    let scaled = shifted.scale(1.0 / tau);
    let blocks = (0..factors)
        .map(|f| Ok(scaled.slice_cols(f * types, (f + 1) * types)?.softmax()))
        .collect::<Result<Vec<_>, TensorError>>()?;
    concat_cols(&blocks)
}

/// Pair bookkeeping for `n` particles: ordered pairs `(receiver, sender)`,
/// receiver-major, skipping self loops.
pub fn ordered_pairs(n: usize) -> Vec<(usize, usize)> {
    (0..n)
        .flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j)))
        .collect()
}

pub(crate) fn index(v: Vec<usize>) -> Rc<[usize]> {
    v.into()
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::autodiff::Graph;

    #[test]
    fn sigma_transform_round_trip() {
        for (s2, beta) in [(5e-5, 5.0), (1e-10, 10.0), (0.3, 1.0), (4.0, 2.0)] {
            let t = SigmaTransform::new(f64::sqrt(s2), beta).unwrap();
            let x = t.raw0();
            assert!((t.forward(x) - t.sigma0).abs() < 1e-12 * t.sigma0.max(1.0));
        }
        let t = SigmaTransform::new(5e-5f64.sqrt(), 5.0).unwrap();
        // ln(expm1(5 * 0.00707106781)) / 5 evaluated independently
        let s = 5e-5f64.sqrt();
        let oracle = ((5.0 * s).exp() - 1.0).ln() / 5.0;
        assert!((t.raw0() - oracle).abs() < 1e-12);
    }

    #[test]
    fn softplus_is_positive_for_huge_negative_raw() {
        let t = SigmaTransform::new(0.1, 5.0).unwrap();
        assert!(t.forward(-1e6) >= 0.0);
        let g = Graph::new();
        let x = g.constant(Tensor::row(&[-1e6, -50.0, 0.0, 3.0]));
        let y = x.softplus(5.0);
        for v in y.value().data() {
            assert!(*v >= 0.0 && v.is_finite());
        }
        assert!(y.value().data()[1] > 0.0);
    }

    #[test]
    fn gumbel_rows_normalise() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let g = Graph::new();
        let logits = g.constant(Tensor::from_rows(
            6,
            4,
            (0..24).map(|i| (i as f64).sin() * 3.0).collect(),
        ));
        let noise = sample_gumbel(6, 4, &mut rng);
        let z = gumbel_softmax(logits, 2, 2, 0.5, Some(&noise)).unwrap();
        let z = z.value();
        for r in 0..6 {
            assert!((z.at(r, 0) + z.at(r, 1) - 1.0).abs() < 1e-12);
            assert!((z.at(r, 2) + z.at(r, 3) - 1.0).abs() < 1e-12);
            assert!(z.data().iter().all(|v| *v >= 0.0));
        }
    }

    #[test]
    fn gumbel_low_temperature_is_nearly_one_hot() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let g = Graph::new();
        let logits = g.constant(Tensor::from_rows(
            50,
            2,
            (0..100).map(|i| (i as f64 * 0.37).cos()).collect(),
        ));
        let noise = sample_gumbel(50, 2, &mut rng);
        let z = gumbel_softmax(logits, 1, 2, 0.01, Some(&noise)).unwrap();
        let lv = logits.value();
        let mut checked = 0;
        for (r, row) in z.value().data().chunks(2).enumerate() {
            let gap = ((lv.at(r, 0) + noise.at(r, 0)) - (lv.at(r, 1) + noise.at(r, 1))).abs();
            let off = 1.0 - row[0].max(row[1]);
            // two-type closed form: distance from one-hot is sigmoid(-gap / tau)
            let expected = 1.0 / (1.0 + (gap / 0.01).exp());
            assert!((off - expected).abs() < 1e-12);
            if gap >= 0.1 {
                assert!(off < 1e-3);
                checked += 1;
            }
        }
        assert!(checked > 30);
    }

    #[test]
    fn gumbel_equal_logits_no_noise_is_uniform() {
        for tau in [0.1, 0.5, 3.0] {
            let g = Graph::new();
            let logits = g.constant(Tensor::full(3, 4, 0.7));
            let z = gumbel_softmax(logits, 2, 2, tau, None).unwrap();
            assert!(z.value().data().iter().all(|v| *v == 0.5));
        }
    }

    #[test]
    fn posterior_hard_sample() {
        let post = EdgePosterior {
            logits: Tensor::from_rows(2, 4, vec![0.0, 1.0, 2.0, -1.0, 3.0, 3.0, 0.0, 0.5]),
            factors: 2,
            types: 2,
        };
        assert_eq!(post.argmax(), vec![vec![1, 0], vec![0, 1]]);
        let h = post.hard_sample();
        assert_eq!(h.data(), &[0.0, 1.0, 1.0, 0.0, 1.0, 0.0, 0.0, 1.0]);
        let p = post.probs();
        assert!((p.at(1, 0) - 0.5).abs() < 1e-15);
    }

    #[test]
    fn expansion_layouts() {
        let g = Graph::new();
        let s = g.constant(Tensor::from_rows(1, 2, vec![1.0, 2.0]));
        let e = SigmaMode::SemiIsotropic.expand(s).unwrap();
        assert_eq!(e.value().data(), &[1.0, 1.0, 2.0, 2.0]);
        let s = g.constant(Tensor::from_rows(1, 1, vec![3.0]));
        let e = SigmaMode::Isotropic.expand(s).unwrap();
        assert_eq!(e.value().data(), &[3.0; 4]);
        assert_eq!(SigmaMode::SemiIsotropic.channel_of(3), 1);
    }

    #[test]
    fn pair_order() {
        assert_eq!(
            ordered_pairs(3),
            vec![(0, 1), (0, 2), (1, 0), (1, 2), (2, 0), (2, 1)]
        );
    }
}
