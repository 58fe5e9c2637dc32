use std::rc::Rc;

use super::{index, ordered_pairs, ModelConfig, ModelError};
use crate::autodiff::Tensor;
use crate::sim::{Dataset, InteractionGraph};

/// Row indexing for `batch` samples of `n` particles: node rows are
/// `b * n + i`, edge rows `b * n_edges + e`.
#[derive(Debug, Clone)]
pub struct BatchLayout {
    pub batch: usize,
    pub n: usize,
    pub send: Rc<[usize]>,
    pub recv: Rc<[usize]>,
}

impl BatchLayout {
    pub fn new(batch: usize, n: usize) -> Self {
        let pairs = ordered_pairs(n);
        let mut send = Vec::with_capacity(batch * pairs.len());
        let mut recv = Vec::with_capacity(batch * pairs.len());
        for b in 0..batch {
            for &(r, s) in &pairs {
                recv.push(b * n + r);
                send.push(b * n + s);
            }
        }
        BatchLayout {
            batch,
            n,
            send: index(send),
            recv: index(recv),
        }
    }

    pub fn n_edges(&self) -> usize {
        self.n * (self.n - 1)
    }

    pub fn node_rows(&self) -> usize {
        self.batch * self.n
    }

    pub fn edge_rows(&self) -> usize {
        self.batch * self.n_edges()
    }
}

/// Model inputs and targets for a set of trajectories, all normalised.
#[derive(Debug, Clone)]
pub struct Batch {
    pub layout: BatchLayout,
    /// `(batch * n, encoder_window * 4)`, each row one particle's window.
    pub encoder_input: Tensor,
    /// Ground-truth decoder inputs: `teacher[k]` is the state fed at step k.
    pub teacher: Vec<Tensor>,
    /// `targets[k]` is the state the decoder should produce at step k.
    pub targets: Vec<Tensor>,
    pub graphs: Vec<InteractionGraph>,
}

impl Batch {
    pub fn from_dataset(
        dataset: &Dataset,
        indices: &[usize],
        cfg: &ModelConfig,
    ) -> Result<Self, ModelError> {
        let need = cfg.encoder_window + cfg.decoder_window;
        if dataset.n_steps() < need {
            return Err(ModelError::Window {
                expected: need,
                got: dataset.n_steps(),
            });
        }
        let n = dataset.n_particles();
        let layout = BatchLayout::new(indices.len(), n);
        let w = cfg.encoder_window;
        let mut enc = vec![0.0; indices.len() * n * w * 4];
        let mut teacher = vec![vec![0.0; indices.len() * n * 4]; cfg.decoder_window];
        let mut targets = vec![vec![0.0; indices.len() * n * 4]; cfg.decoder_window];
        for (b, &ix) in indices.iter().enumerate() {
            let flat = dataset.normalized(ix);
            let state = |t: usize, i: usize| &flat[(t * n + i) * 4..(t * n + i + 1) * 4];
            for i in 0..n {
                let row = b * n + i;
                for t in 0..w {
                    enc[(row * w + t) * 4..(row * w + t + 1) * 4].copy_from_slice(state(t, i));
                }
                for k in 0..cfg.decoder_window {
                    teacher[k][row * 4..row * 4 + 4].copy_from_slice(state(w - 1 + k, i));
                    targets[k][row * 4..row * 4 + 4].copy_from_slice(state(w + k, i));
                }
            }
        }
        let rows = indices.len() * n;
        Ok(Batch {
            layout,
            encoder_input: Tensor::from_rows(rows, w * 4, enc),
            teacher: teacher
                .into_iter()
                .map(|d| Tensor::from_rows(rows, 4, d))
                .collect(),
            targets: targets
                .into_iter()
                .map(|d| Tensor::from_rows(rows, 4, d))
                .collect(),
            graphs: indices
                .iter()
                .map(|&i| dataset.trajectories[i].graph.clone())
                .collect(),
        })
    }

    pub fn initial_state(&self) -> &Tensor {
        &self.teacher[0]
    }
}
