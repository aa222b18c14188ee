//! The contrastive predictive coding network.
//!
//! A per-timestep encoder maps each `m`-channel sample to an `n`-dimensional
//! latent. A stack of gated recurrent cells summarizes the observation
//! latents into contexts, and only the last context feeds `k` independent
//! prediction heads, one per future offset. A candidate's score at offset
//! `i` is the dot product between its encoded latent and head `i`'s
//! prediction; InfoNCE is the cross-entropy of the true successor among the
//! `M` candidates, averaged over offsets.
//!
//! The encoder and recurrent parameters are bound once per tape and reused
//! for the observation and every candidate.

use log::warn;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::gradcheck::{five_point, relative_error, GradCheckReport};
use crate::autodiff::{kernels, AutodiffError, ParamId, ParameterSet, Tape, Tensor, Var};
use crate::data::ContrastiveBatch;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ModelError {
    #[error("{what}: expected {expected}, got {got}")]
    Dimension {
        what: &'static str,
        expected: usize,
        got: usize,
    },
    #[error("invalid model config: {0}")]
    Config(String),
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CpcConfig {
    /// Input channels `m`.
    pub channels: usize,
    /// Latent dimension `n`.
    pub latent_dim: usize,
    /// Context dimension `a`.
    pub context_dim: usize,
    /// Prediction horizon `k` (number of heads).
    pub horizon: usize,
    pub obs_len: usize,
    /// Affine layers in the encoder; all but the last are followed by tanh.
    pub encoder_layers: usize,
    pub encoder_hidden: usize,
    /// Stacked recurrent cells.
    pub ar_layers: usize,
    pub head_hidden: usize,
    pub seed: u64,
}

impl CpcConfig {
    /// Defaults for `m` channels: `n = max(1, ⌊m/2⌋)`, `a = 2n`, ten-step
    /// observation and prediction windows, two recurrent layers and an
    /// encoder depth that grows with the channel count.
    pub fn for_channels(channels: usize) -> Self {
        let latent_dim = (channels / 2).max(1);
        Self {
            channels,
            latent_dim,
            context_dim: 2 * latent_dim,
            horizon: 10,
            obs_len: 10,
            encoder_layers: default_encoder_layers(channels),
            encoder_hidden: 32,
            ar_layers: 2,
            head_hidden: 32,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let fields = [
            ("channels", self.channels),
            ("latent_dim", self.latent_dim),
            ("context_dim", self.context_dim),
            ("horizon", self.horizon),
            ("obs_len", self.obs_len),
            ("encoder_layers", self.encoder_layers),
            ("encoder_hidden", self.encoder_hidden),
            ("ar_layers", self.ar_layers),
            ("head_hidden", self.head_hidden),
        ];
        if let Some((name, _)) = fields.iter().find(|(_, v)| *v == 0) {
            return Err(ModelError::Config(format!("{name} must be ≥ 1")));
        }
        if self.channels > 1 && self.latent_dim >= self.channels {
            warn!(
                "latent_dim {} is not smaller than the channel count {}",
                self.latent_dim, self.channels
            );
        }
        Ok(())
    }

    /// Closed-form number of scalar parameters.
    pub fn parameter_count(&self) -> usize {
        let (m, n, a) = (self.channels, self.latent_dim, self.context_dim);
        let (h, l) = (self.encoder_hidden, self.encoder_layers);
        let encoder = if l == 1 {
            m * n + n
        } else {
            (m * h + h) + (l - 2) * (h * h + h) + (h * n + n)
        };
        let ar = 3 * (n * a + a * a + a) + (self.ar_layers - 1) * 3 * (a * a + a * a + a);
        let hh = self.head_hidden;
        let heads = self.horizon * ((a * hh + hh) + (hh * n + n));
        encoder + ar + heads
    }
}

/// `clamp(⌈m/16⌉ + 1, 2, 4)`
pub fn default_encoder_layers(channels: usize) -> usize {
    (channels.div_ceil(16) + 1).clamp(2, 4)
}

#[derive(Clone, Copy, Debug, PartialEq)]
struct Dense {
    weight: ParamId,
    bias: ParamId,
}

/// Update (`z`), reset (`r`) and candidate (`n`) transforms of one cell.
#[derive(Clone, Copy, Debug, PartialEq)]
struct GruLayer {
    input: [Dense; 3],
    recurrent: [ParamId; 3],
}

#[derive(Clone, Copy, Debug, PartialEq)]
struct Head {
    hidden: Dense,
    output: Dense,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CpcModel {
    config: CpcConfig,
    params: ParameterSet,
    encoder: Vec<Dense>,
    ar: Vec<GruLayer>,
    heads: Vec<Head>,
}

/// Scores of one batch: `logits[i][j]` is candidate `j`'s score at offset `i+1`.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchScores {
    pub loss: f64,
    pub logits: Vec<Vec<f64>>,
    pub positive_index: usize,
}

impl BatchScores {
    /// Whether the positive has the strictly highest total score over all
    /// offsets.
    pub fn positive_ranks_first(&self) -> bool {
        let totals: Vec<f64> = (0..self.logits[0].len())
            .map(|j| self.logits.iter().map(|row| row[j]).sum())
            .collect();
        let pos = totals[self.positive_index];
        totals
            .iter()
            .enumerate()
            .all(|(j, &s)| j == self.positive_index || s < pos)
    }
}

struct Builder<'a> {
    params: ParameterSet,
    rng: &'a mut ChaCha8Rng,
}

impl Builder<'_> {
    fn uniform(&mut self, name: String, rows: usize, cols: usize) -> ParamId {
        let bound = 1.0 / (rows as f64).sqrt();
        let data = (0..rows * cols)
            .map(|_| self.rng.random_range(-bound..bound))
            .collect();
        self.insert(name, Tensor::from_parts(vec![rows, cols], data))
    }

    fn zeros(&mut self, name: String, shape: &[usize]) -> ParamId {
        self.insert(name, Tensor::zeros(shape))
    }

    fn insert(&mut self, name: String, t: Tensor) -> ParamId {
        self.params.insert(name, t).expect("parameter names are generated uniquely")
    }

    fn dense(&mut self, prefix: &str, d_in: usize, d_out: usize) -> Dense {
        Dense {
            weight: self.uniform(format!("{prefix}.weight"), d_in, d_out),
            bias: self.zeros(format!("{prefix}.bias"), &[d_out]),
        }
    }
}

impl CpcModel {
    /// Deterministic initialization: weights uniform in `±1/√fan_in`, biases
    /// zero, and every head's output layer zero so that all scores start
    /// equal.
    pub fn init(config: CpcConfig) -> Result<Self, ModelError> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut b = Builder {
            params: ParameterSet::new(),
            rng: &mut rng,
        };
        let c = &config;

        let mut encoder = Vec::with_capacity(c.encoder_layers);
        for l in 0..c.encoder_layers {
            let d_in = if l == 0 { c.channels } else { c.encoder_hidden };
            let d_out = if l + 1 == c.encoder_layers {
                c.latent_dim
            } else {
                c.encoder_hidden
            };
            encoder.push(b.dense(&format!("encoder.{l}"), d_in, d_out));
        }

        let mut ar = Vec::with_capacity(c.ar_layers);
        for l in 0..c.ar_layers {
            let d_in = if l == 0 { c.latent_dim } else { c.context_dim };
            let a = c.context_dim;
            let gate = |b: &mut Builder, g: &str| {
                (
                    b.dense(&format!("ar.{l}.{g}.input"), d_in, a),
                    b.uniform(format!("ar.{l}.{g}.recurrent"), a, a),
                )
            };
            let (zi, zr) = gate(&mut b, "update");
            let (ri, rr) = gate(&mut b, "reset");
            let (ni, nr) = gate(&mut b, "candidate");
            ar.push(GruLayer {
                input: [zi, ri, ni],
                recurrent: [zr, rr, nr],
            });
        }

        let mut heads = Vec::with_capacity(c.horizon);
        for i in 0..c.horizon {
            let hidden = b.dense(&format!("head.{i}.hidden"), c.context_dim, c.head_hidden);
            let output = Dense {
                weight: b.zeros(format!("head.{i}.output.weight"), &[c.head_hidden, c.latent_dim]),
                bias: b.zeros(format!("head.{i}.output.bias"), &[c.latent_dim]),
            };
            heads.push(Head { hidden, output });
        }

        let params = b.params;
        Ok(Self {
            config,
            params,
            encoder,
            ar,
            heads,
        })
    }

    pub fn config(&self) -> &CpcConfig {
        &self.config
    }

    pub fn params(&self) -> &ParameterSet {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParameterSet {
        &mut self.params
    }

    /// Binds all parameters with gradients on `tape`.
    pub fn bind(&self, tape: &mut Tape) -> Bound {
        Bound(tape.bind(&self.params))
    }

    fn bind_frozen(&self, tape: &mut Tape) -> Bound {
        Bound(tape.bind_frozen(&self.params))
    }

    fn check_cols(&self, what: &'static str, t: &Tensor, expected: usize) -> Result<(), ModelError> {
        match t.shape() {
            [r, c] if *c == expected && *r > 0 => Ok(()),
            [_, c] => Err(ModelError::Dimension {
                what,
                expected,
                got: *c,
            }),
            _ => Err(ModelError::Dimension {
                what,
                expected,
                got: t.cols(),
            }),
        }
    }

    /// Per-timestep encoder over an `r×m` segment, giving `r×n` latents.
    pub fn encode_on(&self, tape: &mut Tape, bound: &Bound, segment: Var) -> Result<Var, ModelError> {
        let mut h = segment;
        for (l, layer) in self.encoder.iter().enumerate() {
            h = tape.affine(h, bound.var(layer.weight), bound.var(layer.bias))?;
            if l + 1 < self.encoder.len() {
                h = tape.tanh(h);
            }
        }
        Ok(h)
    }

    fn gru_step(&self, tape: &mut Tape, bound: &Bound, layer: &GruLayer, x: Var, h: Var) -> Result<Var, ModelError> {
        let pre = |tape: &mut Tape, g: usize, state: Var| -> Result<Var, ModelError> {
            let d = layer.input[g];
            let xi = tape.affine(x, bound.var(d.weight), bound.var(d.bias))?;
            let hr = tape.matmul(state, bound.var(layer.recurrent[g]))?;
            Ok(tape.add(xi, hr)?)
        };
        let z = pre(tape, 0, h)?;
        let z = tape.sigmoid(z);
        let r = pre(tape, 1, h)?;
        let r = tape.sigmoid(r);
        let rh = tape.mul(r, h)?;
        let n = pre(tape, 2, rh)?;
        let n = tape.tanh(n);
        // h' = (1 − z)·h + z·n
        let delta = tape.sub(n, h)?;
        let step = tape.mul(z, delta)?;
        Ok(tape.add(h, step)?)
    }

    /// Runs the recurrent stack over `r×n` latents from a zero state and
    /// returns the top-layer context after each step, as `r×a`.
    pub fn contextualize_on(&self, tape: &mut Tape, bound: &Bound, latents: Var) -> Result<Var, ModelError> {
        let steps = tape.value(latents).rows();
        let zero = tape.constant(Tensor::zeros(&[1, self.config.context_dim]));
        let mut state = vec![zero; self.ar.len()];
        let mut contexts = Vec::with_capacity(steps);
        for t in 0..steps {
            let mut x = tape.rows(latents, t, 1)?;
            for (l, layer) in self.ar.iter().enumerate() {
                state[l] = self.gru_step(tape, bound, layer, x, state[l])?;
                x = state[l];
            }
            contexts.push(x);
        }
        Ok(tape.concat_rows(&contexts)?)
    }

    /// Applies every head to a `1×a` context, giving `k×n` predicted latents.
    pub fn predict_on(&self, tape: &mut Tape, bound: &Bound, context: Var) -> Result<Var, ModelError> {
        let mut rows = Vec::with_capacity(self.heads.len());
        for head in &self.heads {
            let h = tape.affine(context, bound.var(head.hidden.weight), bound.var(head.hidden.bias))?;
            let h = tape.tanh(h);
            rows.push(tape.affine(h, bound.var(head.output.weight), bound.var(head.output.bias))?);
        }
        Ok(tape.concat_rows(&rows)?)
    }

    /// Records the InfoNCE loss of `batch` on `tape`. Also returns the
    /// `1×M` logit node of each offset.
    pub fn info_nce_on(
        &self,
        tape: &mut Tape,
        bound: &Bound,
        batch: &ContrastiveBatch,
    ) -> Result<(Var, Vec<Var>), ModelError> {
        let c = &self.config;
        let m = batch.size();
        self.check_cols("observation channels", &batch.observation, c.channels)?;
        if m < 2 || batch.positive_index >= m {
            return Err(ModelError::Dimension {
                what: "positive index within batch",
                expected: m,
                got: batch.positive_index,
            });
        }
        let mut stacked = Vec::with_capacity(m * c.horizon * c.channels);
        for cand in &batch.candidates {
            self.check_cols("candidate channels", cand, c.channels)?;
            if cand.rows() != c.horizon {
                return Err(ModelError::Dimension {
                    what: "candidate length (horizon)",
                    expected: c.horizon,
                    got: cand.rows(),
                });
            }
            stacked.extend_from_slice(cand.data());
        }

        let obs = tape.constant(batch.observation.clone());
        let z_obs = self.encode_on(tape, bound, obs)?;
        let contexts = self.contextualize_on(tape, bound, z_obs)?;
        let last = tape.rows(contexts, tape.value(contexts).rows() - 1, 1)?;
        let predicted = self.predict_on(tape, bound, last)?;

        let cands = tape.constant(Tensor::from_parts(vec![m * c.horizon, c.channels], stacked));
        let z_cands = self.encode_on(tape, bound, cands)?;

        let mut total: Option<Var> = None;
        let mut logits = Vec::with_capacity(c.horizon);
        for i in 0..c.horizon {
            let idx: Vec<usize> = (0..m).map(|j| j * c.horizon + i).collect();
            let actual = tape.select_rows(z_cands, &idx)?;
            let pred = tape.rows(predicted, i, 1)?;
            let scores = tape.matmul_transpose_b(pred, actual)?;
            let lse = tape.log_sum_exp(scores)?;
            let pos = tape.element(scores, batch.positive_index)?;
            let term = tape.sub(lse, pos)?;
            total = Some(match total {
                Some(acc) => tape.add(acc, term)?,
                None => term,
            });
            logits.push(scores);
        }
        let loss = tape.scale(total.expect("horizon ≥ 1"), 1.0 / c.horizon as f64);
        Ok((loss, logits))
    }

    /// Loss and per-offset scores without touching gradients.
    pub fn score_batch(&self, batch: &ContrastiveBatch) -> Result<BatchScores, ModelError> {
        let mut tape = Tape::new();
        let bound = self.bind_frozen(&mut tape);
        let (loss, logits) = self.info_nce_on(&mut tape, &bound, batch)?;
        Ok(BatchScores {
            loss: tape.value(loss).data()[0],
            logits: logits.iter().map(|&v| tape.value(v).data().to_vec()).collect(),
            positive_index: batch.positive_index,
        })
    }

    /// Computes the InfoNCE loss of `batch` and adds its gradient into the
    /// parameter gradients.
    pub fn loss_and_grad(&mut self, batch: &ContrastiveBatch) -> Result<f64, ModelError> {
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape);
        let (loss, _) = self.info_nce_on(&mut tape, &bound, batch)?;
        tape.backward_into(loss, &mut self.params)?;
        Ok(tape.value(loss).data()[0])
    }

    /// `r×m` → `r×n`: the encoder applied to each row independently.
    pub fn encode(&self, segment: &Tensor) -> Result<Tensor, ModelError> {
        self.check_cols("segment channels", segment, self.config.channels)?;
        let mut tape = Tape::new();
        let bound = self.bind_frozen(&mut tape);
        let x = tape.constant(segment.clone());
        let z = self.encode_on(&mut tape, &bound, x)?;
        Ok(tape.value(z).clone())
    }

    /// `r×n` latents → `r×a` contexts; row `i` depends only on rows `..=i`.
    pub fn contextualize(&self, latents: &Tensor) -> Result<Tensor, ModelError> {
        self.check_cols("latent dimension", latents, self.config.latent_dim)?;
        let mut tape = Tape::new();
        let bound = self.bind_frozen(&mut tape);
        let z = tape.constant(latents.clone());
        let c = self.contextualize_on(&mut tape, &bound, z)?;
        Ok(tape.value(c).clone())
    }

    /// Checks [`CpcModel::loss_and_grad`] against five-point differences of
    /// the batch loss, over every scalar parameter. The model is left as it
    /// was, with zeroed gradients.
    pub fn check_loss_gradients(
        &mut self,
        batch: &ContrastiveBatch,
        h: f64,
        floor: f64,
    ) -> Result<GradCheckReport, ModelError> {
        self.params.zero_grads();
        self.loss_and_grad(batch)?;
        let analytic: Vec<Vec<f64>> = self.params.iter().map(|(_, p)| p.grad.data().to_vec()).collect();
        self.params.zero_grads();

        let mut report = GradCheckReport {
            max_relative_error: 0.0,
            worst: None,
            checked: 0,
        };
        let ids: Vec<ParamId> = self.params.iter().map(|(id, _)| id).collect();
        for (i, id) in ids.into_iter().enumerate() {
            for e in 0..self.params.get(id).value.len() {
                let x = self.params.get(id).value.data()[e];
                let mut at = |offset: f64| {
                    self.params.get_mut(id).value.data_mut()[e] = x + offset;
                    self.score_batch(batch).map(|s| s.loss)
                };
                let numeric = five_point(at(2.0 * h)?, at(h)?, at(-h)?, at(-2.0 * h)?, h);
                self.params.get_mut(id).value.data_mut()[e] = x;
                let err = relative_error(analytic[i][e], numeric, floor);
                report.checked += 1;
                if err > report.max_relative_error || !err.is_finite() {
                    report.max_relative_error = err;
                    report.worst = Some((i, e));
                }
            }
        }
        Ok(report)
    }

    /// Predicted latents `k×n` from the last context.
    pub fn predict_latents(&self, last_context: &[f64]) -> Result<Tensor, ModelError> {
        if last_context.len() != self.config.context_dim {
            return Err(ModelError::Dimension {
                what: "context dimension",
                expected: self.config.context_dim,
                got: last_context.len(),
            });
        }
        let mut tape = Tape::new();
        let bound = self.bind_frozen(&mut tape);
        let c = tape.constant(Tensor::from_parts(vec![1, last_context.len()], last_context.to_vec()));
        let p = self.predict_on(&mut tape, &bound, c)?;
        Ok(tape.value(p).clone())
    }
}

/// Parameter handles of a model bound on one tape.
pub struct Bound(Vec<Var>);

impl Bound {
    fn var(&self, id: ParamId) -> Var {
        self.0[id.index()]
    }
}

/// Log of the log-bilinear score `exp(zᵀẑ)`, i.e. the plain dot product.
pub fn score_pair(z: &[f64], z_hat: &[f64]) -> Result<f64, ModelError> {
    if z.len() != z_hat.len() {
        return Err(ModelError::Dimension {
            what: "score_pair operands",
            expected: z.len(),
            got: z_hat.len(),
        });
    }
    Ok(kernels::dot(z, z_hat))
}
