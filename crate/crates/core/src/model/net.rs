use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{BatchLayout, EdgePosterior, ModelConfig, ModelError, SigmaMode};
use crate::autodiff::{concat_cols, BatchStats, Checkpoint, Graph, Tensor, TensorError, Var};

const BN_EPS: f64 = 1e-5;
const BIAS_INIT: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    /// Batch-norm uses batch statistics and reports them.
    Train,
    /// Batch-norm uses the running estimates.
    Eval,
}

/// Running mean and (unbiased) variance of one batch-norm layer.
#[derive(Debug, Clone, PartialEq)]
pub struct RunningNorm {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

#[derive(Debug, Clone, Copy)]
struct Lin {
    w: usize,
    b: usize,
}

#[derive(Debug, Clone, Copy)]
struct Mlp {
    fc1: Lin,
    fc2: Lin,
    gamma: usize,
    beta: usize,
    norm: usize,
}

#[derive(Debug, Clone)]
struct Layout {
    mlp1: Mlp,
    mlp2: Mlp,
    mlp3: Mlp,
    mlp4: Mlp,
    fc_out: Lin,
    /// `(latent column, fc1, fc2)` for every edge type that sends messages.
    msg: Vec<(usize, Lin, Lin)>,
    out1: Lin,
    out2: Lin,
    out3: Lin,
}

struct Builder {
    params: Vec<Tensor>,
    names: Vec<String>,
    norms: usize,
    rng: ChaCha8Rng,
}

impl Builder {
    fn push(&mut self, name: String, t: Tensor) -> usize {
        self.params.push(t);
        self.names.push(name);
        self.params.len() - 1
    }

    fn lin(&mut self, name: &str, fan_in: usize, fan_out: usize, bias: f64) -> Lin {
        let w = Tensor::xavier_normal(fan_in, fan_out, &mut self.rng);
        Lin {
            w: self.push(format!("{name}.w"), w),
            b: self.push(format!("{name}.b"), Tensor::full(1, fan_out, bias)),
        }
    }

    fn mlp(&mut self, name: &str, n_in: usize, hidden: usize, n_out: usize) -> Mlp {
        let fc1 = self.lin(&format!("{name}.fc1"), n_in, hidden, BIAS_INIT);
        let fc2 = self.lin(&format!("{name}.fc2"), hidden, n_out, BIAS_INIT);
        let gamma = self.push(format!("{name}.bn.gamma"), Tensor::full(1, n_out, 1.0));
        let beta = self.push(format!("{name}.bn.beta"), Tensor::zeros(1, n_out));
        self.norms += 1;
        Mlp {
            fc1,
            fc2,
            gamma,
            beta,
            norm: self.norms - 1,
        }
    }
}

/// Encoder and decoder parameters.
#[derive(Debug, Clone)]
pub struct Fnri {
    pub config: ModelConfig,
    pub params: Vec<Tensor>,
    names: Vec<String>,
    pub running: Vec<RunningNorm>,
    layout: Layout,
}

/// Output of a decoder rollout; one entry per predicted step.
pub struct Rollout<'g> {
    pub means: Vec<Var<'g>>,
    /// Widened to four columns whatever the sigma mode.
    pub sigmas: Vec<Var<'g>>,
}

fn linear<'g>(p: &[Var<'g>], l: Lin, x: Var<'g>) -> Result<Var<'g>, TensorError> {
    x.matmul(p[l.w])?.add_row(p[l.b])
}

impl Fnri {
    /// Xavier-normal weights, biases 0.1, except the decoder's last layer
    /// which starts at zero: an untrained step returns its input unchanged.
    pub fn new(config: ModelConfig) -> Result<Self, ModelError> {
        config.validate()?;
        let h = config.hidden_dim;
        let d = config.state_dim();
        let mut b = Builder {
            params: Vec::new(),
            names: Vec::new(),
            norms: 0,
            rng: ChaCha8Rng::seed_from_u64(config.init_seed),
        };
        let mlp1 = b.mlp("enc.mlp1", config.encoder_window * 4, h, h);
        let mlp2 = b.mlp("enc.mlp2", 2 * h, h, h);
        let mlp3 = b.mlp("enc.mlp3", h, h, h);
        let mlp4 = b.mlp("enc.mlp4", 3 * h, h, h);
        let fc_out = b.lin("enc.fc_out", h, config.logit_dim(), BIAS_INIT);
        let first = usize::from(config.skip_first);
        let mut msg = Vec::new();
        for f in 0..config.n_edge_factors {
            for k in first..config.edge_types_per_factor {
                let col = f * config.edge_types_per_factor + k;
                let fc1 = b.lin(&format!("dec.msg{col}.fc1"), 2 * d, h, BIAS_INIT);
                let fc2 = b.lin(&format!("dec.msg{col}.fc2"), h, h, BIAS_INIT);
                msg.push((col, fc1, fc2));
            }
        }
        let out1 = b.lin("dec.out1", d + h, h, BIAS_INIT);
        let out2 = b.lin("dec.out2", h, h, BIAS_INIT);
        let out3 = b.lin("dec.out3", h, d, 0.0);
        b.params[out3.w] = Tensor::zeros(h, d);
        let running = (0..b.norms)
            .map(|_| RunningNorm {
                mean: vec![0.0; h],
                var: vec![1.0; h],
            })
            .collect();
        Ok(Fnri {
            config,
            params: b.params,
            names: b.names,
            running,
            layout: Layout {
                mlp1,
                mlp2,
                mlp3,
                mlp4,
                fc_out,
                msg,
                out1,
                out2,
                out3,
            },
        })
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn param_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        let i = self.names.iter().position(|n| n == name)?;
        Some(&mut self.params[i])
    }

    pub fn n_parameters(&self) -> usize {
        self.params.iter().map(Tensor::len).sum()
    }

    /// Records the parameters on `g`, as leaves when `trainable`.
    pub fn bind<'g>(&self, g: &'g Graph, trainable: bool) -> Vec<Var<'g>> {
        self.params
            .iter()
            .map(|t| {
                if trainable {
                    g.leaf(t.clone())
                } else {
                    g.constant(t.clone())
                }
            })
            .collect()
    }

    fn mlp<'g>(
        &self,
        p: &[Var<'g>],
        m: Mlp,
        x: Var<'g>,
        mode: Mode,
        stats: &mut Vec<(usize, BatchStats)>,
    ) -> Result<Var<'g>, TensorError> {
        let h = linear(p, m.fc1, x)?.elu();
        let h = linear(p, m.fc2, h)?.elu();
        match mode {
            Mode::Train => {
                let (y, s) = h.batch_norm(p[m.gamma], p[m.beta], BN_EPS)?;
                stats.push((m.norm, s));
                Ok(y)
            }
            Mode::Eval => {
                let g = h.graph();
                let run = &self.running[m.norm];
                let neg_mean: Vec<f64> = run.mean.iter().map(|v| -v).collect();
                let inv: Vec<f64> = run.var.iter().map(|v| 1.0 / (v + BN_EPS).sqrt()).collect();
                h.add_row(g.constant(Tensor::row(&neg_mean)))?
                    .mul_row(g.constant(Tensor::row(&inv)))?
                    .mul_row(p[m.gamma])?
                    .add_row(p[m.beta])
            }
        }
    }

    /// Edge-type logits `(edge_rows, factors * types)` from
    /// `(node_rows, encoder_window * 4)` inputs. In training mode the
    /// batch-norm statistics are returned for [`Fnri::update_running`].
    pub fn encode<'g>(
        &self,
        p: &[Var<'g>],
        x: Var<'g>,
        layout: &BatchLayout,
        mode: Mode,
    ) -> Result<(Var<'g>, Vec<(usize, BatchStats)>), ModelError> {
        let shape = x.shape();
        let want = self.config.encoder_window * 4;
        if shape.len() != 2 || shape[1] != want {
            return Err(ModelError::Window {
                expected: self.config.encoder_window,
                got: shape.get(1).copied().unwrap_or(0) / 4,
            });
        }
        if shape[0] != layout.node_rows() {
            return Err(TensorError::shape("encode", &[&shape, &[layout.node_rows()]]).into());
        }
        let l = &self.layout;
        let mut stats = Vec::new();
        let node2edge = |h: Var<'g>| -> Result<Var<'g>, TensorError> {
            concat_cols(&[h.gather_rows(&layout.send)?, h.gather_rows(&layout.recv)?])
        };
        let h = self.mlp(p, l.mlp1, x, mode, &mut stats)?;
        let e = self.mlp(p, l.mlp2, node2edge(h)?, mode, &mut stats)?;
        let skip = e;
        let n = e
            .scatter_add_rows(&layout.recv, layout.node_rows())?
            .scale(1.0 / layout.n as f64);
        let n = self.mlp(p, l.mlp3, n, mode, &mut stats)?;
        let e = concat_cols(&[node2edge(n)?, skip])?;
        let e = self.mlp(p, l.mlp4, e, mode, &mut stats)?;
        Ok((linear(p, l.fc_out, e)?, stats))
    }

    pub fn posterior(&self, logits: &Tensor) -> EdgePosterior {
        EdgePosterior {
            logits: logits.clone(),
            factors: self.config.n_edge_factors,
            types: self.config.edge_types_per_factor,
        }
    }

    /// Exponential moving average of batch statistics into the running estimates.
    pub fn update_running(&mut self, stats: &[(usize, BatchStats)]) {
        let m = self.config.bn_momentum;
        for (k, s) in stats {
            let run = &mut self.running[*k];
            for (r, v) in run.mean.iter_mut().zip(&s.mean) {
                *r = (1.0 - m) * *r + m * v;
            }
            for (r, v) in run.var.iter_mut().zip(&s.var_unbiased) {
                *r = (1.0 - m) * *r + m * v;
            }
        }
    }

    /// Initial decoder state: phase coordinates plus raw sigma channels at
    /// the inverse-softplus of `sigma0`.
    pub fn initial_state<'g>(&self, g: &'g Graph, phase: &Tensor) -> Result<Var<'g>, TensorError> {
        let s = self.config.sigma_mode.channels();
        let x = g.constant(phase.clone());
        if s == 0 {
            return Ok(x);
        }
        let raw = g.constant(Tensor::full(
            phase.rows(),
            s,
            self.config.transform().raw0(),
        ));
        concat_cols(&[x, raw])
    }

    /// One decoder step. Returns the next full state, its phase part and the
    /// widened sigma.
    pub fn decode_step<'g>(
        &self,
        p: &[Var<'g>],
        state: Var<'g>,
        z: Var<'g>,
        layout: &BatchLayout,
    ) -> Result<(Var<'g>, Var<'g>, Var<'g>), TensorError> {
        let l = &self.layout;
        let pre = concat_cols(&[
            state.gather_rows(&layout.send)?,
            state.gather_rows(&layout.recv)?,
        ])?;
        let mut all: Option<Var<'g>> = None;
        for &(col, fc1, fc2) in &l.msg {
            let m = linear(p, fc1, pre)?.elu();
            let m = linear(p, fc2, m)?.elu();
            let m = m.mul_col(z.slice_cols(col, col + 1)?)?;
            all = Some(match all {
                Some(a) => a.add(m)?,
                None => m,
            });
        }
        let rows = layout.node_rows();
        let agg = match all {
            Some(a) => a.scatter_add_rows(&layout.recv, rows)?,
            None => state
                .graph()
                .constant(Tensor::zeros(rows, self.config.hidden_dim)),
        };
        let h = linear(p, l.out1, concat_cols(&[state, agg])?)?.elu();
        let h = linear(p, l.out2, h)?.elu();
        let next = state.add(linear(p, l.out3, h)?)?;
        let mean = next.slice_cols(0, 4)?;
        let sigma = self.sigma_of(next)?;
        Ok((next, mean, sigma))
    }

    fn sigma_of<'g>(&self, state: Var<'g>) -> Result<Var<'g>, TensorError> {
        let mode = self.config.sigma_mode;
        if mode == SigmaMode::Fixed {
            let rows = state.shape()[0];
            return Ok(state
                .graph()
                .constant(Tensor::full(rows, 4, self.config.sigma0)));
        }
        let raw = state.slice_cols(4, 4 + mode.channels())?;
        mode.expand(raw.softplus(self.config.beta))
    }

    /// Iterates [`Fnri::decode_step`] `n_steps` times from `initial`
    /// (phase coordinates only). With a teacher, the phase part of the input
    /// is replaced by ground truth whenever `k % teacher_force_every == 0`;
    /// the sigma channels always carry over.
    pub fn rollout<'g>(
        &self,
        p: &[Var<'g>],
        initial: &Tensor,
        z: Var<'g>,
        layout: &BatchLayout,
        n_steps: usize,
        teacher: Option<&[Tensor]>,
    ) -> Result<Rollout<'g>, ModelError> {
        if let Some(t) = teacher {
            if t.len() < n_steps {
                return Err(ModelError::Teacher {
                    needed: n_steps,
                    got: t.len(),
                });
            }
        }
        let g = z.graph();
        let mut state = self.initial_state(g, initial)?;
        let d = self.config.state_dim();
        let every = self.config.teacher_force_every;
        let mut out = Rollout {
            means: Vec::with_capacity(n_steps),
            sigmas: Vec::with_capacity(n_steps),
        };
        for k in 0..n_steps {
            if let Some(t) = teacher {
                if k > 0 && k % every == 0 {
                    let truth = g.constant(t[k].clone());
                    state = if d > 4 {
                        concat_cols(&[truth, state.slice_cols(4, d)?])?
                    } else {
                        truth
                    };
                }
            }
            let (next, mean, sigma) = self.decode_step(p, state, z, layout)?;
            out.means.push(mean);
            out.sigmas.push(sigma);
            state = next;
        }
        Ok(out)
    }

    /// Parameters and running statistics as named arrays.
    pub fn to_checkpoint(&self, metadata: String) -> Checkpoint {
        let mut arrays: Vec<(String, Tensor)> = self
            .names
            .iter()
            .cloned()
            .zip(self.params.iter().cloned())
            .collect();
        for (k, r) in self.running.iter().enumerate() {
            arrays.push((format!("bn{k}.running_mean"), Tensor::row(&r.mean)));
            arrays.push((format!("bn{k}.running_var"), Tensor::row(&r.var)));
        }
        Checkpoint { metadata, arrays }
    }

    pub fn from_checkpoint(config: ModelConfig, ckpt: &Checkpoint) -> Result<Self, ModelError> {
        let mut model = Fnri::new(config)?;
        for i in 0..model.params.len() {
            let t = ckpt.get(&model.names[i])?;
            if t.shape() != model.params[i].shape() {
                return Err(TensorError::shape(
                    "from_checkpoint",
                    &[t.shape(), model.params[i].shape()],
                )
                .into());
            }
            model.params[i] = t.clone();
        }
        for k in 0..model.running.len() {
            let mean = ckpt.get(&format!("bn{k}.running_mean"))?;
            let var = ckpt.get(&format!("bn{k}.running_var"))?;
            let h = model.running[k].mean.len();
            if mean.len() != h || var.len() != h {
                return Err(
                    TensorError::shape("from_checkpoint", &[mean.shape(), var.shape()]).into(),
                );
            }
            model.running[k] = RunningNorm {
                mean: mean.data().to_vec(),
                var: var.data().to_vec(),
            };
        }
        Ok(model)
    }
}

#[cfg(test)]
mod tests {
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::model::{gumbel_softmax, sample_gumbel, ModelConfig};

    fn small(mode: SigmaMode) -> ModelConfig {
        ModelConfig {
            hidden_dim: 6,
            encoder_window: 3,
            decoder_window: 4,
            teacher_force_every: 2,
            sigma_mode: mode,
            sigma0: 0.05,
            beta: 5.0,
            ..ModelConfig::default()
        }
    }

    fn random(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Tensor {
        Tensor::from_rows(
            rows,
            cols,
            (0..rows * cols)
                .map(|_| rng.random_range(-1.0..1.0))
                .collect(),
        )
    }

    #[test]
    fn encoder_rejects_wrong_window() {
        let model = Fnri::new(small(SigmaMode::Isotropic)).unwrap();
        let layout = BatchLayout::new(2, 3);
        let g = Graph::new();
        let p = model.bind(&g, false);
        let x = g.constant(Tensor::zeros(6, 4 * 4));
        assert!(matches!(
            model.encode(&p, x, &layout, Mode::Eval),
            Err(ModelError::Window {
                expected: 3,
                got: 4
            })
        ));
    }

    #[test]
    fn zero_output_layer_gives_uniform_posterior() {
        let mut model = Fnri::new(small(SigmaMode::Isotropic)).unwrap();
        for name in ["enc.fc_out.w", "enc.fc_out.b"] {
            model.param_mut(name).unwrap().data_mut().fill(0.0);
        }
        let layout = BatchLayout::new(2, 4);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let g = Graph::new();
        let p = model.bind(&g, false);
        let x = g.constant(random(8, 12, &mut rng));
        let (logits, _) = model.encode(&p, x, &layout, Mode::Train).unwrap();
        let post = model.posterior(&logits.value());
        assert!(post.probs().data().iter().all(|v| *v == 0.5));
    }

    #[test]
    fn encoder_is_permutation_equivariant() {
        let model = Fnri::new(small(SigmaMode::Isotropic)).unwrap();
        let n = 4;
        let layout = BatchLayout::new(1, n);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = random(n, 12, &mut rng);
        let perm = [2, 0, 3, 1];
        // row perm[i] of the permuted input is row i of the original
        let mut xp = Tensor::zeros(n, 12);
        for i in 0..n {
            for c in 0..12 {
                xp.set(perm[i], c, x.at(i, c));
            }
        }
        let run = |x: &Tensor| {
            let g = Graph::new();
            let p = model.bind(&g, false);
            let (l, _) = model
                .encode(&p, g.constant(x.clone()), &layout, Mode::Train)
                .unwrap();
            let v = l.value().clone();
            v
        };
        let a = run(&x);
        let b = run(&xp);
        let pairs = crate::model::ordered_pairs(n);
        for (e, &(r, s)) in pairs.iter().enumerate() {
            let e2 = pairs.iter().position(|&q| q == (perm[r], perm[s])).unwrap();
            for c in 0..4 {
                assert!((a.at(e, c) - b.at(e2, c)).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn zero_decoder_output_is_identity_with_sigma0() {
        for mode in [
            SigmaMode::Fixed,
            SigmaMode::Isotropic,
            SigmaMode::SemiIsotropic,
            SigmaMode::Anisotropic,
        ] {
            let mut model = Fnri::new(small(mode)).unwrap();
            for name in ["dec.out3.w", "dec.out3.b"] {
                model.param_mut(name).unwrap().data_mut().fill(0.0);
            }
            let layout = BatchLayout::new(2, 3);
            let mut rng = ChaCha8Rng::seed_from_u64(8);
            let phase = random(6, 4, &mut rng);
            let g = Graph::new();
            let p = model.bind(&g, false);
            let z = g.constant(random(12, 4, &mut rng));
            let state = model.initial_state(&g, &phase).unwrap();
            let (_, mean, sigma) = model.decode_step(&p, state, z, &layout).unwrap();
            assert_eq!(mean.value().data(), phase.data());
            for v in sigma.value().data() {
                assert!((v - 0.05).abs() < 1e-12, "{mode:?} {v}");
            }
        }
    }

    #[test]
    fn fixed_mode_sigma_has_no_gradient() {
        let model = Fnri::new(small(SigmaMode::Fixed)).unwrap();
        let layout = BatchLayout::new(1, 3);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let g = Graph::new();
        let p = model.bind(&g, true);
        let z = g.constant(random(6, 4, &mut rng));
        let out = model
            .rollout(&p, &random(3, 4, &mut rng), z, &layout, 3, None)
            .unwrap();
        assert!(out.sigmas.iter().all(|s| !s.requires_grad()));
        assert!(out
            .sigmas
            .iter()
            .all(|s| s.value().data().iter().all(|v| *v == 0.05)));
    }

    #[test]
    fn teacher_every_step_feeds_ground_truth() {
        let mut cfg = small(SigmaMode::Isotropic);
        cfg.teacher_force_every = 1;
        let mut model = Fnri::new(cfg).unwrap();
        for name in ["dec.out3.w", "dec.out3.b"] {
            model.param_mut(name).unwrap().data_mut().fill(0.0);
        }
        let layout = BatchLayout::new(1, 3);
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let teacher: Vec<Tensor> = (0..4).map(|_| random(3, 4, &mut rng)).collect();
        let g = Graph::new();
        let p = model.bind(&g, false);
        let z = g.constant(random(6, 4, &mut rng));
        let out = model
            .rollout(&p, &teacher[0], z, &layout, 4, Some(&teacher))
            .unwrap();
        // with a pure-skip decoder the output equals the input it was fed
        for k in 0..4 {
            assert_eq!(out.means[k].value().data(), teacher[k].data());
        }
        let none = model.rollout(&p, &teacher[0], z, &layout, 0, None).unwrap();
        assert!(none.means.is_empty());
        assert!(model
            .rollout(&p, &teacher[0], z, &layout, 5, Some(&teacher))
            .is_err());
    }

    #[test]
    fn free_rollout_is_deterministic() {
        let model = Fnri::new(small(SigmaMode::Anisotropic)).unwrap();
        let layout = BatchLayout::new(2, 3);
        let run = || {
            let mut rng = ChaCha8Rng::seed_from_u64(21);
            let g = Graph::new();
            let p = model.bind(&g, false);
            let z = g.constant(random(12, 4, &mut rng));
            let out = model
                .rollout(&p, &random(6, 4, &mut rng), z, &layout, 5, None)
                .unwrap();
            let v: Vec<u64> = out
                .means
                .iter()
                .chain(&out.sigmas)
                .flat_map(|v| {
                    v.value()
                        .data()
                        .iter()
                        .map(|x| x.to_bits())
                        .collect::<Vec<_>>()
                })
                .collect();
            v
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn checkpoint_round_trip() {
        let mut model = Fnri::new(small(SigmaMode::SemiIsotropic)).unwrap();
        model.running[1].mean[0] = 3.5;
        let ck = model.to_checkpoint("meta".into());
        let back = Fnri::from_checkpoint(model.config.clone(), &ck).unwrap();
        assert_eq!(back.params, model.params);
        assert_eq!(back.running, model.running);
        let other = ModelConfig {
            hidden_dim: 7,
            ..model.config.clone()
        };
        assert!(Fnri::from_checkpoint(other, &ck).is_err());
    }

    /// The last decoder layer starts at zero; give it weights so inputs reach the output.
    fn live(mode: SigmaMode) -> Fnri {
        let mut model = Fnri::new(small(mode)).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let w = model.param_mut("dec.out3.w").unwrap();
        *w = Tensor::xavier_normal(w.rows(), w.cols(), &mut rng);
        model
    }

    #[test]
    fn sigma_channel_feeds_back() {
        // nudging the raw sigma seed must change later means
        let model = live(SigmaMode::Isotropic);
        let layout = BatchLayout::new(1, 3);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let phase = random(3, 4, &mut rng);
        let zt = random(6, 4, &mut rng);
        let g = Graph::new();
        let p = model.bind(&g, false);
        let z = g.constant(zt);
        let s0 = model.initial_state(&g, &phase).unwrap();
        let s1 = concat_cols(&[
            g.constant(phase.clone()),
            g.constant(Tensor::full(3, 1, 0.5)),
        ])
        .unwrap();
        let (_, a, _) = model.decode_step(&p, s0, z, &layout).unwrap();
        let (_, b, _) = model.decode_step(&p, s1, z, &layout).unwrap();
        assert_ne!(a.value().data(), b.value().data());
    }

    #[test]
    fn relaxed_sample_feeds_decoder() {
        let model = live(SigmaMode::Isotropic);
        let layout = BatchLayout::new(1, 3);
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let x = random(3, 12, &mut rng);
        let noise = sample_gumbel(6, 4, &mut rng);
        let g = Graph::new();
        let p = model.bind(&g, true);
        let (logits, stats) = model
            .encode(&p, g.constant(x), &layout, Mode::Train)
            .unwrap();
        assert_eq!(stats.len(), 4);
        let z = gumbel_softmax(logits, 2, 2, 0.5, Some(&noise)).unwrap();
        let out = model
            .rollout(&p, &random(3, 4, &mut rng), z, &layout, 2, None)
            .unwrap();
        let loss = out.means[1].square().sum();
        let grads = g.backward(loss).unwrap();
        // the encoder output layer receives gradient through the sample
        let idx = model
            .names()
            .iter()
            .position(|n| n == "enc.fc_out.w")
            .unwrap();
        assert!(grads.wrt(p[idx]).data().iter().any(|v| *v != 0.0));
    }
}
