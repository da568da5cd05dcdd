use std::collections::BTreeMap;

use crate::diff::{Array, Tape, Var};

use super::{Arch, Policy, PolicyError, TokenBatch, TokenKind};

/// Per-step Gaussian head: `mean` is `[batch, context, action_dim]`,
/// `log_std` the global per-dimension parameter.
pub struct GaussianOut {
    pub mean: Var,
    pub log_std: Var,
}

pub struct LossOut {
    pub loss: Var,
    pub nll: Var,
    pub entropy: Var,
}

impl Policy {
    /// Builds the forward graph on `tape`. When `trainable`, parameters are
    /// gradient-tracked leaves; the returned map lets callers read their
    /// gradients back after `backward`.
    pub fn forward_on_tape(
        &self,
        tape: &mut Tape,
        batch: &TokenBatch,
        trainable: bool,
    ) -> Result<(BTreeMap<String, Var>, GaussianOut), PolicyError> {
        self.config.validate()?;
        batch.validate(&self.config)?;
        let params = self.leaf_params(tape, trainable);
        let out = match self.config.arch {
            Arch::Sdt => self.sdt_forward(tape, &params, batch),
            Arch::Mlp => self.mlp_forward(tape, &params, batch),
        };
        Ok((params, out))
    }

    /// Negated per-step objective: masked mean of the Gaussian negative
    /// log-likelihood minus `lambda` times the policy entropy.
    pub fn loss_on_tape(
        &self,
        tape: &mut Tape,
        batch: &TokenBatch,
        trainable: bool,
    ) -> Result<(BTreeMap<String, Var>, LossOut), PolicyError> {
        let (params, gauss) = self.forward_on_tape(tape, batch, trainable)?;
        let (b, k, a) = (batch.batch, batch.context, self.config.action_dim);
        let n_real: f64 = batch.mask.iter().sum();
        if n_real == 0.0 {
            return Err(PolicyError::Shape("every step in the batch is masked".into()));
        }
        let targets = tape.constant(Array::new(vec![b, k, a], batch.targets.clone()));
        let diff = tape.sub(targets, gauss.mean);
        let neg_ls = tape.neg(gauss.log_std);
        let inv_sigma = tape.exp(neg_ls);
        let z = tape.mul(diff, inv_sigma);
        let sq = tape.mul(z, z);
        let half_sq = tape.scale(sq, 0.5);
        let with_ls = tape.add(half_sq, gauss.log_std);
        let half_ln_2pi = tape.constant(Array::scalar(0.5 * (2.0 * std::f64::consts::PI).ln()));
        let terms = tape.add(with_ls, half_ln_2pi);
        let nll_bt = tape.sum_last(terms);
        let mask = tape.constant(Array::new(vec![b, k], batch.mask.clone()));
        let masked = tape.mul(nll_bt, mask);
        let total = tape.sum_all(masked);
        let nll = tape.scale(total, 1.0 / n_real);
        // Diagonal Gaussian entropy: sum over dims of 0.5*ln(2*pi*e) + log_std.
        let half_ln_2pie =
            tape.constant(Array::scalar(0.5 * (2.0 * std::f64::consts::PI * std::f64::consts::E).ln()));
        let ent_terms = tape.add(gauss.log_std, half_ln_2pie);
        let entropy = tape.sum_all(ent_terms);
        let weighted = tape.scale(entropy, self.config.lambda);
        let loss = tape.sub(nll, weighted);
        if !tape.value(loss).item().is_finite() {
            return Err(PolicyError::NonFinite);
        }
        Ok((params, LossOut { loss, nll, entropy }))
    }

    /// Mean and standard deviation of the action distribution at every step
    /// (no gradients).
    pub fn distribution(&self, batch: &TokenBatch) -> Result<(Vec<f64>, Vec<f64>), PolicyError> {
        let mut tape = Tape::new();
        let (_, out) = self.forward_on_tape(&mut tape, batch, false)?;
        let means = tape.value(out.mean).data().to_vec();
        let std = tape
            .value(out.log_std)
            .data()
            .iter()
            .map(|v| v.exp())
            .collect();
        Ok((means, std))
    }

    fn leaf_params(&self, tape: &mut Tape, trainable: bool) -> BTreeMap<String, Var> {
        self.params
            .entries
            .iter()
            .map(|(name, value)| (name.clone(), tape.leaf(value.clone(), trainable)))
            .collect()
    }

    fn token_input(&self, batch: &TokenBatch, kind: TokenKind) -> Array {
        let (b, k) = (batch.batch, batch.context);
        match kind {
            TokenKind::Suffix => scaled_column(&batch.suffix, self.scales.robustness_scale, b, k),
            TokenKind::Prefix => scaled_column(&batch.prefix, self.scales.robustness_scale, b, k),
            TokenKind::RewardPrefix => scaled_column(
                batch.reward_prefix.as_ref().expect("validated"),
                self.scales.reward_scale,
                b,
                k,
            ),
            TokenKind::ReturnToGo => scaled_column(&batch.rtg, self.scales.reward_scale, b, k),
            TokenKind::State => {
                let s = self.config.state_dim;
                let mut data = Vec::with_capacity(b * k * s);
                for (i, v) in batch.states.iter().enumerate() {
                    let ch = i % s;
                    let std = self.scales.state_std[ch].max(1e-6);
                    data.push((v - self.scales.state_mean[ch]) / std);
                }
                Array::new(vec![b, k, s], data)
            }
            TokenKind::Action => Array::new(
                vec![b, k, self.config.action_dim],
                batch.actions.clone(),
            ),
        }
    }

    fn sdt_forward(
        &self,
        tape: &mut Tape,
        params: &BTreeMap<String, Var>,
        batch: &TokenBatch,
    ) -> GaussianOut {
        let (b, k, d) = (batch.batch, batch.context, self.config.embed_dim);
        let g = self.config.layout.group_size();
        let heads = self.config.heads;
        let l = k * g;

        let time = tape.gather(params["embed.time"], &batch.timesteps, &[b, k]);
        let mut pieces = Vec::with_capacity(g);
        for kind in &self.config.layout.kinds {
            let (name, _) = super::embed_spec(*kind, &self.config);
            let input = tape.constant(self.token_input(batch, *kind));
            let w = params[&format!("embed.{name}.w")];
            let bias = params[&format!("embed.{name}.b")];
            let e = tape.matmul(input, w);
            let e = tape.add(e, bias);
            let e = tape.add(e, time);
            pieces.push(tape.reshape(e, vec![b, k, 1, d]));
        }
        let grouped = tape.concat(&pieces, 2);
        let mut x = tape.reshape(grouped, vec![b, l, d]);

        let mask = attention_mask(batch, g, heads);
        let dh = d / heads;
        for layer in 0..self.config.layers {
            let normed = self.layer_norm(tape, params, x, &format!("block{layer}.ln1"));
            let q = self.linear(tape, params, normed, &format!("block{layer}.attn.wq"), &format!("block{layer}.attn.bq"));
            let kk = self.linear(tape, params, normed, &format!("block{layer}.attn.wk"), &format!("block{layer}.attn.bk"));
            let v = self.linear(tape, params, normed, &format!("block{layer}.attn.wv"), &format!("block{layer}.attn.bv"));
            let (qh, kh, vh) = if heads == 1 {
                (q, kk, v)
            } else {
                (
                    split_heads(tape, q, b, l, heads, dh),
                    split_heads(tape, kk, b, l, heads, dh),
                    split_heads(tape, v, b, l, heads, dh),
                )
            };
            let scores = tape.matmul_nt(qh, kh);
            let scaled = tape.scale(scores, 1.0 / (dh as f64).sqrt());
            let blocked = tape.masked_fill(scaled, &mask, f64::NEG_INFINITY);
            let weights = tape.softmax(blocked);
            let ctx = tape.matmul(weights, vh);
            let merged = if heads == 1 {
                ctx
            } else {
                let h4 = tape.reshape(ctx, vec![b, heads, l, dh]);
                let swapped = tape.transpose(h4, 1, 2);
                tape.reshape(swapped, vec![b, l, d])
            };
            let proj = self.linear(tape, params, merged, &format!("block{layer}.attn.wo"), &format!("block{layer}.attn.bo"));
            x = tape.add(x, proj);

            let normed = self.layer_norm(tape, params, x, &format!("block{layer}.ln2"));
            let h1 = self.linear(tape, params, normed, &format!("block{layer}.mlp.w1"), &format!("block{layer}.mlp.b1"));
            let act = tape.tanh(h1);
            let h2 = self.linear(tape, params, act, &format!("block{layer}.mlp.w2"), &format!("block{layer}.mlp.b2"));
            x = tape.add(x, h2);
        }
        let x = self.layer_norm(tape, params, x, "ln_f");

        let state_pos = self
            .config
            .layout
            .position_of(TokenKind::State)
            .expect("layout has a state token");
        let regrouped = tape.reshape(x, vec![b, k, g, d]);
        let state_out = tape.slice(regrouped, 2, state_pos, 1);
        let state_out = tape.reshape(state_out, vec![b, k, d]);
        let mean = self.linear(tape, params, state_out, "head.mean.w", "head.mean.b");
        GaussianOut {
            mean,
            log_std: params["head.log_std"],
        }
    }

    fn mlp_forward(
        &self,
        tape: &mut Tape,
        params: &BTreeMap<String, Var>,
        batch: &TokenBatch,
    ) -> GaussianOut {
        let b = batch.batch;
        // Concatenate the scaled condition columns into one row per item.
        let kinds = self.config.layout.condition_kinds();
        let mut width = 0usize;
        let mut columns = Vec::new();
        for kind in kinds {
            let arr = self.token_input(batch, kind);
            let cols = arr.numel() / b;
            columns.push((arr, cols));
            width += cols;
        }
        let mut data = Vec::with_capacity(b * width);
        for item in 0..b {
            for (arr, cols) in &columns {
                data.extend_from_slice(&arr.data()[item * cols..(item + 1) * cols]);
            }
        }
        let input = tape.constant(Array::new(vec![b, width], data));
        let h1 = self.linear(tape, params, input, "mlp.w1", "mlp.b1");
        let a1 = tape.tanh(h1);
        let h2 = self.linear(tape, params, a1, "mlp.w2", "mlp.b2");
        let a2 = tape.tanh(h2);
        let mean = self.linear(tape, params, a2, "head.mean.w", "head.mean.b");
        let mean = tape.reshape(mean, vec![b, 1, self.config.action_dim]);
        GaussianOut {
            mean,
            log_std: params["head.log_std"],
        }
    }

    fn linear(
        &self,
        tape: &mut Tape,
        params: &BTreeMap<String, Var>,
        x: Var,
        w: &str,
        b: &str,
    ) -> Var {
        let prod = tape.matmul(x, params[w]);
        tape.add(prod, params[b])
    }

    fn layer_norm(
        &self,
        tape: &mut Tape,
        params: &BTreeMap<String, Var>,
        x: Var,
        prefix: &str,
    ) -> Var {
        let normed = tape.layer_norm(x, 1e-5);
        let scaled = tape.mul(normed, params[&format!("{prefix}.g")]);
        tape.add(scaled, params[&format!("{prefix}.b")])
    }
}

/// `[b, l, h*dh] -> [b*h, l, dh]` for per-head attention.
fn split_heads(tape: &mut Tape, x: Var, b: usize, l: usize, heads: usize, dh: usize) -> Var {
    let h4 = tape.reshape(x, vec![b, l, heads, dh]);
    let swapped = tape.transpose(h4, 1, 2);
    tape.reshape(swapped, vec![b * heads, l, dh])
}

fn scaled_column(values: &[f64], scale: f64, b: usize, k: usize) -> Array {
    let s = if scale == 0.0 { 1.0 } else { scale };
    Array::new(vec![b, k, 1], values.iter().map(|v| v / s).collect())
}

/// Causal mask over the interleaved token sequence: token `j` may attend to
/// token `i` iff `i <= j` and step `i/g` is unpadded (the diagonal is always
/// allowed so no row is fully masked). `true` marks blocked pairs.
fn attention_mask(batch: &TokenBatch, g: usize, heads: usize) -> Vec<bool> {
    let (b, k) = (batch.batch, batch.context);
    let l = k * g;
    let mut mask = vec![true; b * heads * l * l];
    for item in 0..b {
        for h in 0..heads {
            let base = (item * heads + h) * l * l;
            for qi in 0..l {
                for ki in 0..=qi {
                    let real = batch.mask[item * k + ki / g] == 1.0;
                    if real || ki == qi {
                        mask[base + qi * l + ki] = false;
                    }
                }
            }
        }
    }
    mask
}
