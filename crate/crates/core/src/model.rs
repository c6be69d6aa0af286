//! Window-ranking language model.
//!
//! A window of `n` token ids is embedded by concatenating its rows of the
//! embedding table `C`, passed through one `tanh` hidden layer and reduced
//! to a scalar score:
//!
//! ```text
//! s = w2 · tanh(W1ᵀ · concat(C[ids]) + b1) + b2
//! ```
//!
//! Training minimises the pairwise hinge `max(0, 1 - s(pos) + s(neg))`
//! averaged over a batch, where each negative window is the positive with
//! its center word replaced. The backward pass is written out by hand; its
//! embedding gradient is a `(indices, rows)` payload for scatter-add.

use rand::Rng;

use crate::error::{Error, Result};
use crate::profile::{NoProfile, OpTimer};
use crate::scatter::{KernelStats, ScatterStrategy};
use crate::tensor::{gather_rows, matmul_threads, matmul_tn_threads, scale_add, IndexVector, Matrix, Real};

pub const OP_GATHER: &str = "gather_rows";
pub const OP_MATMUL: &str = "matmul";
pub const OP_ELEMWISE: &str = "elementwise";
pub const OP_INDEX_ADD: &str = "index_add";
pub const OP_TRANSPOSE: &str = "transpose";
pub const OP_DENSE_UPDATE: &str = "dense_update";

/// Shape of a model.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ModelShape {
    pub vocab: usize,
    pub dim: usize,
    pub window: usize,
    pub hidden: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams<T = f32> {
    /// `V × d`
    pub embeddings: Matrix<T>,
    /// `(n·d) × h`
    pub hidden_weights: Matrix<T>,
    pub hidden_bias: Vec<T>,
    pub output_weights: Vec<T>,
    pub output_bias: T,
    window: usize,
}

/// Exactly `n` token ids; the center is position `n / 2`.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct ContextWindow(pub Vec<usize>);

impl ContextWindow {
    pub fn center(&self) -> usize {
        self.0.len() / 2
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    /// Copy with the center id replaced.
    pub fn corrupted(&self, new_center: usize) -> Self {
        let mut ids = self.0.clone();
        let c = self.center();
        ids[c] = new_center;
        ContextWindow(ids)
    }
}

/// Positive windows paired with their center-corrupted negatives.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    positives: Vec<ContextWindow>,
    negatives: Vec<ContextWindow>,
}

impl Batch {
    pub fn new(positives: Vec<ContextWindow>, negatives: Vec<ContextWindow>) -> Result<Self> {
        if positives.len() != negatives.len() {
            return Err(Error::Domain(format!(
                "{} positives but {} negatives",
                positives.len(),
                negatives.len()
            )));
        }
        for (k, (p, n)) in positives.iter().zip(&negatives).enumerate() {
            if p.len() != n.len() || p.is_empty() {
                return Err(Error::Domain(format!("pair {k}: window lengths differ")));
            }
            let c = p.center();
            let differs_elsewhere = p.0.iter().zip(&n.0).enumerate().any(|(j, (a, b))| j != c && a != b);
            if p.0[c] == n.0[c] || differs_elsewhere {
                return Err(Error::Domain(format!(
                    "pair {k}: negative must differ from positive exactly at the center"
                )));
            }
        }
        Ok(Batch {
            positives,
            negatives,
        })
    }

    pub fn len(&self) -> usize {
        self.positives.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positives.is_empty()
    }

    pub fn positives(&self) -> &[ContextWindow] {
        &self.positives
    }

    pub fn negatives(&self) -> &[ContextWindow] {
        &self.negatives
    }

    /// Roles exchanged: each negative becomes the positive of its pair.
    pub fn swapped(&self) -> Batch {
        Batch {
            positives: self.negatives.clone(),
            negatives: self.positives.clone(),
        }
    }

    /// Every token id, positives first, window by window.
    fn flat_ids(&self) -> IndexVector {
        self.positives
            .iter()
            .chain(&self.negatives)
            .flat_map(|w| w.0.iter().copied())
            .collect()
    }
}

/// Embedding-table gradient as a scatter-add payload. One row per
/// `(window, position)` occurrence; duplicates are not merged.
#[derive(Clone, Debug, PartialEq)]
pub struct SparseGrad<T = f32> {
    pub indices: IndexVector,
    pub values: Matrix<T>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Gradients<T = f32> {
    pub hidden_weights: Matrix<T>,
    pub hidden_bias: Vec<T>,
    pub output_weights: Vec<T>,
    pub output_bias: T,
    pub embeddings: SparseGrad<T>,
    /// Batch loss at the parameters the gradient was taken at.
    pub loss: T,
}

/// Activations of one batch forward pass.
struct Forward<T> {
    /// `2B × (n·d)`, positives then negatives.
    inputs: Matrix<T>,
    /// `2B × h`, after `tanh`.
    hidden: Matrix<T>,
    scores: Vec<T>,
    ids: IndexVector,
}

impl<T: Real> ModelParams<T> {
    /// All parameters zero.
    pub fn zeros(shape: ModelShape) -> Self {
        ModelParams {
            embeddings: Matrix::zeros(shape.vocab, shape.dim),
            hidden_weights: Matrix::zeros(shape.window * shape.dim, shape.hidden),
            hidden_bias: vec![T::zero(); shape.hidden],
            output_weights: vec![T::zero(); shape.hidden],
            output_bias: T::zero(),
            window: shape.window,
        }
    }

    /// Weights uniform in `±0.5 / fan_in`, biases zero. The fan-in of an
    /// embedding row is taken as `d`.
    pub fn init(shape: ModelShape, rng: &mut impl Rng) -> Self {
        let mut uniform = |fan_in: usize| {
            let a = 0.5 / fan_in.max(1) as f64;
            T::of_f64(rng.gen_range(-a..=a))
        };
        let mut p = Self::zeros(shape);
        p.embeddings.data_mut().iter_mut().for_each(|v| *v = uniform(shape.dim));
        let fan_hidden = shape.window * shape.dim;
        p.hidden_weights.data_mut().iter_mut().for_each(|v| *v = uniform(fan_hidden));
        p.output_weights.iter_mut().for_each(|v| *v = uniform(shape.hidden));
        p
    }

    /// Assemble from parts, checking the shapes agree.
    pub fn from_parts(
        embeddings: Matrix<T>,
        hidden_weights: Matrix<T>,
        hidden_bias: Vec<T>,
        output_weights: Vec<T>,
        output_bias: T,
        window: usize,
    ) -> Result<Self> {
        let d = embeddings.cols();
        let h = hidden_weights.cols();
        if hidden_weights.rows() != window * d {
            return Err(Error::Dimension {
                op: "ModelParams::from_parts",
                left: format!("hidden weights {}x{}", hidden_weights.rows(), h),
                right: format!("window {window} x dim {d}"),
            });
        }
        if hidden_bias.len() != h || output_weights.len() != h {
            return Err(Error::Dimension {
                op: "ModelParams::from_parts",
                left: format!("{h} hidden units"),
                right: format!("biases {} / output weights {}", hidden_bias.len(), output_weights.len()),
            });
        }
        Ok(ModelParams {
            embeddings,
            hidden_weights,
            hidden_bias,
            output_weights,
            output_bias,
            window,
        })
    }

    pub fn shape(&self) -> ModelShape {
        ModelShape {
            vocab: self.embeddings.rows(),
            dim: self.embeddings.cols(),
            window: self.window,
            hidden: self.hidden_weights.cols(),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.embeddings.is_finite()
            && self.hidden_weights.is_finite()
            && self.hidden_bias.iter().chain(&self.output_weights).all(|v| v.is_finite())
            && self.output_bias.is_finite()
    }

    pub fn cast<U: Real>(&self) -> ModelParams<U> {
        let conv = |v: &[T]| v.iter().map(|x| U::of_f64(x.as_f64())).collect();
        ModelParams {
            embeddings: self.embeddings.cast(),
            hidden_weights: self.hidden_weights.cast(),
            hidden_bias: conv(&self.hidden_bias),
            output_weights: conv(&self.output_weights),
            output_bias: U::of_f64(self.output_bias.as_f64()),
            window: self.window,
        }
    }

    fn check_window_len(&self, w: &ContextWindow) -> Result<()> {
        if w.len() != self.window {
            return Err(Error::Domain(format!(
                "window has {} ids, model expects {}",
                w.len(),
                self.window
            )));
        }
        Ok(())
    }

    pub fn score(&self, window: &ContextWindow) -> Result<T> {
        self.check_window_len(window)?;
        let ids = IndexVector::new(window.0.clone());
        let x = gather_rows(&self.embeddings, &ids)?.reshape(1, self.window * self.embeddings.cols())?;
        let hidden = self.hidden_layer(&x, &mut NoProfile, 1)?;
        Ok(self.output_layer(&hidden)[0])
    }

    fn hidden_layer(&self, x: &Matrix<T>, timer: &mut impl OpTimer, threads: usize) -> Result<Matrix<T>> {
        let mut z = timer.time(OP_MATMUL, || matmul_threads(x, &self.hidden_weights, threads))?;
        timer.time(OP_ELEMWISE, || {
            let h = self.hidden_bias.len();
            for row in z.data_mut().chunks_exact_mut(h) {
                for (v, &b) in row.iter_mut().zip(&self.hidden_bias) {
                    *v = (*v + b).tanh();
                }
            }
        });
        Ok(z)
    }

    fn output_layer(&self, hidden: &Matrix<T>) -> Vec<T> {
        (0..hidden.rows())
            .map(|r| {
                hidden
                    .row(r)
                    .iter()
                    .zip(&self.output_weights)
                    .fold(T::zero(), |acc, (&a, &b)| acc + a * b)
                    + self.output_bias
            })
            .collect()
    }

    fn forward(&self, batch: &Batch, timer: &mut impl OpTimer, threads: usize) -> Result<Forward<T>> {
        if batch.is_empty() {
            return Err(Error::Domain("empty batch".into()));
        }
        for w in batch.positives.iter().chain(&batch.negatives) {
            self.check_window_len(w)?;
        }
        let ids = batch.flat_ids();
        let width = self.window * self.embeddings.cols();
        let inputs = timer
            .time(OP_GATHER, || gather_rows(&self.embeddings, &ids))?
            .reshape(2 * batch.len(), width)?;
        let hidden = self.hidden_layer(&inputs, timer, threads)?;
        let scores = timer.time(OP_ELEMWISE, || self.output_layer(&hidden));
        Ok(Forward {
            inputs,
            hidden,
            scores,
            ids,
        })
    }

    /// Per-pair margin `1 - s(pos) + s(neg)`; the hinge is active when it is
    /// strictly positive.
    pub fn margins(&self, batch: &Batch) -> Result<Vec<T>> {
        let f = self.forward(batch, &mut NoProfile, 1)?;
        Ok(margins_of(&f.scores, batch.len()))
    }

    pub fn batch_loss(&self, batch: &Batch) -> Result<T> {
        let f = self.forward(batch, &mut NoProfile, 1)?;
        Ok(hinge_loss(&margins_of(&f.scores, batch.len())))
    }

    pub fn backward(&self, batch: &Batch) -> Result<Gradients<T>> {
        self.backward_timed(batch, &mut NoProfile)
    }

    /// [`ModelParams::backward`] with each primitive op reported to `timer`.
    pub fn backward_timed(&self, batch: &Batch, timer: &mut impl OpTimer) -> Result<Gradients<T>> {
        self.backward_threads(batch, timer, 1)
    }

    /// [`ModelParams::backward_timed`] with the dense products split over
    /// `threads` workers. Results do not depend on the thread count.
    pub fn backward_threads(&self, batch: &Batch, timer: &mut impl OpTimer, threads: usize) -> Result<Gradients<T>> {
        let Forward {
            inputs,
            hidden,
            scores,
            ids,
        } = self.forward(batch, timer, threads)?;
        let b = batch.len();
        let h = self.hidden_bias.len();
        let margins = margins_of(&scores, b);
        let loss = hinge_loss(&margins);

        // dL/ds and everything elementwise up to dL/dz
        let (delta, output_weights, output_bias) = timer.time(OP_ELEMWISE, || {
            let inv_b = T::one() / T::of_f64(b as f64);
            let mut gs = vec![T::zero(); 2 * b];
            for (k, &m) in margins.iter().enumerate() {
                if m > T::zero() {
                    gs[k] = -inv_b;
                    gs[b + k] = inv_b;
                }
            }
            let mut dw2 = vec![T::zero(); h];
            let mut delta = Matrix::zeros(2 * b, h);
            for (r, &g) in gs.iter().enumerate() {
                if g == T::zero() {
                    continue;
                }
                let hr = hidden.row(r);
                for (j, d) in delta.row_mut(r).iter_mut().enumerate() {
                    dw2[j] += g * hr[j];
                    *d = g * self.output_weights[j] * (T::one() - hr[j] * hr[j]);
                }
            }
            let db2 = gs.iter().copied().sum::<T>();
            (delta, dw2, db2)
        });

        let hidden_weights = timer.time(OP_MATMUL, || matmul_tn_threads(&inputs, &delta, threads))?;
        let hidden_bias = timer.time(OP_ELEMWISE, || {
            let mut db1 = vec![T::zero(); h];
            for r in 0..delta.rows() {
                for (a, &d) in db1.iter_mut().zip(delta.row(r)) {
                    *a += d;
                }
            }
            db1
        });
        let w1_t = timer.time(OP_TRANSPOSE, || self.hidden_weights.transpose());
        let grad_inputs = timer.time(OP_MATMUL, || matmul_threads(&delta, &w1_t, threads))?;
        let values = grad_inputs.reshape(ids.len(), self.embeddings.cols())?;

        Ok(Gradients {
            hidden_weights,
            hidden_bias,
            output_weights,
            output_bias,
            embeddings: SparseGrad {
                indices: ids,
                values,
            },
            loss,
        })
    }

    /// Plain SGD step: dense parameters `θ -= lr·∇θ`, embedding rows via
    /// scatter-add of `-lr·values` with the chosen kernel.
    pub fn sgd_update(&mut self, grads: &Gradients<T>, lr: T, scatter: &ScatterStrategy) -> Result<KernelStats> {
        self.sgd_update_timed(grads, lr, scatter, &mut NoProfile)
    }

    pub fn sgd_update_timed(
        &mut self,
        grads: &Gradients<T>,
        lr: T,
        scatter: &ScatterStrategy,
        timer: &mut impl OpTimer,
    ) -> Result<KernelStats> {
        if !(lr > T::zero()) {
            return Err(Error::Domain(format!("learning rate must be positive, got {lr}")));
        }
        let h = self.hidden_bias.len();
        if grads.hidden_weights.shape() != self.hidden_weights.shape()
            || grads.hidden_bias.len() != h
            || grads.output_weights.len() != h
        {
            return Err(Error::Dimension {
                op: "sgd_update",
                left: format!("params {:?}", self.shape()),
                right: format!(
                    "grads {}x{} / {} / {}",
                    grads.hidden_weights.rows(),
                    grads.hidden_weights.cols(),
                    grads.hidden_bias.len(),
                    grads.output_weights.len()
                ),
            });
        }
        let sparse = &grads.embeddings;
        // Validate the scatter payload before touching the dense params so a
        // bad payload leaves the model unchanged.
        crate::tensor::check_index_add("sgd_update", &self.embeddings, &sparse.values, &sparse.indices)?;

        timer.time(OP_DENSE_UPDATE, || {
            scale_add(&mut self.hidden_weights, &grads.hidden_weights, -lr)?;
            for (p, &g) in self.hidden_bias.iter_mut().zip(&grads.hidden_bias) {
                *p -= lr * g;
            }
            for (p, &g) in self.output_weights.iter_mut().zip(&grads.output_weights) {
                *p -= lr * g;
            }
            self.output_bias -= lr * grads.output_bias;
            Ok::<_, Error>(())
        })?;
        let scaled = timer.time(OP_ELEMWISE, || sparse.values.map(|v| -lr * v));
        timer.time(OP_INDEX_ADD, || {
            scatter.apply_with_stats(&mut self.embeddings, &scaled, &sparse.indices)
        })
    }
}

fn margins_of<T: Real>(scores: &[T], b: usize) -> Vec<T> {
    (0..b).map(|k| T::one() - scores[k] + scores[b + k]).collect()
}

fn hinge_loss<T: Real>(margins: &[T]) -> T {
    // NaN must survive so divergence is detectable; `max` would drop it
    let sum: T = margins
        .iter()
        .map(|&m| if m.is_nan() { m } else { m.max(T::zero()) })
        .sum();
    sum / T::of_f64(margins.len() as f64)
}
