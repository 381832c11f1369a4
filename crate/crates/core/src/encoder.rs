//! A mini transformer-encoder binary classifier with exact gradients.
//!
//! Architecture per layer: multi-head self-attention with padded keys masked
//! out, then a position-wise feed-forward block, each wrapped in residual +
//! post-layer-norm. Token, segment, and position embeddings are summed at the
//! input; the classifier head reads the final hidden state at position 0
//! (the `[CLS]` slot). The backward pass is written by hand against a tape of
//! forward intermediates and is verified against central finite differences.

use std::collections::BTreeMap;

use ndarray::{s, Array1, Array2, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::nn;
use crate::tokenizer::TokenSequence;

/// FFN activation. The printed architecture formula uses ReLU, so that is
/// the default; gelu matches the original pre-trained encoder family.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Gelu,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

pub const N_CLASSES: usize = 2;

#[derive(Debug, Clone)]
pub struct EncoderConfig {
    pub n_layers: usize,
    pub hidden_dim: usize,
    pub n_heads: usize,
    pub ffn_dim: usize,
    pub max_positions: usize,
    pub vocab_size: usize,
    pub dropout_rate: f64,
    pub activation: Activation,
    pub init_std: f64,
}

impl EncoderConfig {
    /// Desk-scale preset: 2 layers, 128 hidden, 4 heads.
    pub fn desk(vocab_size: usize, max_positions: usize) -> Self {
        Self {
            n_layers: 2,
            hidden_dim: 128,
            n_heads: 4,
            ffn_dim: 256,
            max_positions,
            vocab_size,
            dropout_rate: 0.1,
            activation: Activation::Relu,
            init_std: 0.02,
        }
    }

    /// Full-size preset: 12 layers, 768 hidden, 12 heads, 512 positions.
    /// Constructible and trainable through the same code path, but far beyond
    /// desk-scale budgets.
    pub fn paper_faithful(vocab_size: usize) -> Self {
        Self {
            n_layers: 12,
            hidden_dim: 768,
            n_heads: 12,
            ffn_dim: 3072,
            max_positions: 512,
            vocab_size,
            dropout_rate: 0.1,
            activation: Activation::Gelu,
            init_std: 0.02,
        }
    }

    pub fn head_dim(&self) -> usize {
        self.hidden_dim / self.n_heads
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_layers == 0
            || self.hidden_dim == 0
            || self.n_heads == 0
            || self.ffn_dim == 0
            || self.max_positions == 0
            || self.vocab_size == 0
        {
            return Err(Error::InvalidConfig("encoder dimensions must be nonzero".into()));
        }
        if self.hidden_dim % self.n_heads != 0 {
            return Err(Error::InvalidConfig(format!(
                "hidden_dim {} not divisible by n_heads {}",
                self.hidden_dim, self.n_heads
            )));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(Error::InvalidConfig(format!(
                "dropout_rate must be in [0, 1), got {}",
                self.dropout_rate
            )));
        }
        if self.init_std <= 0.0 {
            return Err(Error::InvalidConfig("init_std must be positive".into()));
        }
        Ok(())
    }
}

/// Trainable tensors of one encoder layer.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerParams {
    pub wq: Array2<f64>,
    pub bq: Array1<f64>,
    pub wk: Array2<f64>,
    pub bk: Array1<f64>,
    pub wv: Array2<f64>,
    pub bv: Array1<f64>,
    pub wo: Array2<f64>,
    pub bo: Array1<f64>,
    pub w1: Array2<f64>,
    pub b1: Array1<f64>,
    pub w2: Array2<f64>,
    pub b2: Array1<f64>,
    pub ln1_gain: Array1<f64>,
    pub ln1_bias: Array1<f64>,
    pub ln2_gain: Array1<f64>,
    pub ln2_bias: Array1<f64>,
}

impl LayerParams {
    fn zeros(d: usize, ffn: usize) -> Self {
        Self {
            wq: Array2::zeros((d, d)),
            bq: Array1::zeros(d),
            wk: Array2::zeros((d, d)),
            bk: Array1::zeros(d),
            wv: Array2::zeros((d, d)),
            bv: Array1::zeros(d),
            wo: Array2::zeros((d, d)),
            bo: Array1::zeros(d),
            w1: Array2::zeros((d, ffn)),
            b1: Array1::zeros(ffn),
            w2: Array2::zeros((ffn, d)),
            b2: Array1::zeros(d),
            ln1_gain: Array1::zeros(d),
            ln1_bias: Array1::zeros(d),
            ln2_gain: Array1::zeros(d),
            ln2_bias: Array1::zeros(d),
        }
    }

    /// Multi-head self-attention over one item's hidden states.
    ///
    /// Per head: `softmax(Q K^T / sqrt(d_k) + mask_bias) V`, with a large
    /// negative bias at padded key columns; heads are concatenated and passed
    /// through the output projection.
    pub fn self_attention(
        &self,
        hidden: &Array2<f64>,
        mask: &[u8],
        n_heads: usize,
    ) -> Result<Array2<f64>> {
        let (out, _) = self.attention_inner(hidden, mask, n_heads)?;
        Ok(out)
    }

    fn attention_inner(
        &self,
        hidden: &Array2<f64>,
        mask: &[u8],
        n_heads: usize,
    ) -> Result<(Array2<f64>, AttnTape)> {
        let seq = hidden.nrows();
        let d = hidden.ncols();
        if mask.len() != seq {
            return Err(Error::ShapeMismatch(format!(
                "mask length {} vs {} positions",
                mask.len(),
                seq
            )));
        }
        if d != self.wq.nrows() {
            return Err(Error::ShapeMismatch(format!(
                "hidden dim {} vs layer dim {}",
                d,
                self.wq.nrows()
            )));
        }
        if mask.iter().all(|&m| m == 0) {
            return Err(Error::InvalidArgument(
                "attention over an all-masked key row".into(),
            ));
        }
        let dk = d / n_heads;
        let scale = 1.0 / (dk as f64).sqrt();

        let q = nn::linear(hidden, &self.wq, &self.bq);
        let k = nn::linear(hidden, &self.wk, &self.bk);
        let v = nn::linear(hidden, &self.wv, &self.bv);

        let mut ctx = Array2::zeros((seq, d));
        let mut attn = Vec::with_capacity(n_heads);
        for h in 0..n_heads {
            let cols = s![.., h * dk..(h + 1) * dk];
            let qh = q.slice(cols);
            let kh = k.slice(cols);
            let vh = v.slice(cols);
            let mut scores = qh.dot(&kh.t());
            scores *= scale;
            for (j, &m) in mask.iter().enumerate() {
                if m == 0 {
                    scores.column_mut(j).fill(nn::MASK_BIAS);
                }
            }
            nn::softmax_rows(&mut scores);
            ctx.slice_mut(cols).assign(&scores.dot(&vh));
            attn.push(scores);
        }
        let out = nn::linear(&ctx, &self.wo, &self.bo);
        Ok((out, AttnTape { q, k, v, attn, ctx }))
    }

    /// Position-wise feed-forward block: `act(x W1 + b1) W2 + b2`.
    pub fn feed_forward(&self, hidden: &Array2<f64>, activation: Activation) -> Array2<f64> {
        let z1 = nn::linear(hidden, &self.w1, &self.b1);
        let a1 = match activation {
            Activation::Relu => nn::relu(&z1),
            Activation::Gelu => nn::gelu(&z1),
        };
        nn::linear(&a1, &self.w2, &self.b2)
    }
}

/// All trainable tensors of the encoder.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderParams {
    pub token_emb: Array2<f64>,
    pub segment_emb: Array2<f64>,
    pub position_emb: Array2<f64>,
    pub layers: Vec<LayerParams>,
    pub classifier_w: Array2<f64>,
    pub classifier_b: Array1<f64>,
}

impl EncoderParams {
    pub fn zeros(config: &EncoderConfig) -> Self {
        let d = config.hidden_dim;
        Self {
            token_emb: Array2::zeros((config.vocab_size, d)),
            segment_emb: Array2::zeros((2, d)),
            position_emb: Array2::zeros((config.max_positions, d)),
            layers: (0..config.n_layers)
                .map(|_| LayerParams::zeros(d, config.ffn_dim))
                .collect(),
            classifier_w: Array2::zeros((d, N_CLASSES)),
            classifier_b: Array1::zeros(N_CLASSES),
        }
    }
}

/// Seeded initialization: weights from a truncated normal
/// (capped at two standard deviations), biases zero, layer-norm gains one.
pub fn init_params(config: &EncoderConfig, seed: u64) -> Result<EncoderParams> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut params = EncoderParams::zeros(config);
    let std = config.init_std;

    let mut fill = |arr: &mut Array2<f64>, rng: &mut ChaCha8Rng| {
        nn::trunc_normal_fill(arr.as_slice_mut().expect("standard layout"), std, rng);
    };
    fill(&mut params.token_emb, &mut rng);
    fill(&mut params.segment_emb, &mut rng);
    fill(&mut params.position_emb, &mut rng);
    for layer in &mut params.layers {
        fill(&mut layer.wq, &mut rng);
        fill(&mut layer.wk, &mut rng);
        fill(&mut layer.wv, &mut rng);
        fill(&mut layer.wo, &mut rng);
        fill(&mut layer.w1, &mut rng);
        fill(&mut layer.w2, &mut rng);
        layer.ln1_gain.fill(1.0);
        layer.ln2_gain.fill(1.0);
    }
    fill(&mut params.classifier_w, &mut rng);
    Ok(params)
}

/// Embeds one sequence: `h[p] = E[id_p] + segment[seg_p] + position[p]`.
pub fn embed_sequence(seq: &TokenSequence, params: &EncoderParams) -> Result<Array2<f64>> {
    let len = seq.ids.len();
    if len > params.position_emb.nrows() {
        return Err(Error::ShapeMismatch(format!(
            "sequence length {} exceeds {} positions",
            len,
            params.position_emb.nrows()
        )));
    }
    let d = params.token_emb.ncols();
    let mut h = Array2::zeros((len, d));
    for (p, (&id, &seg)) in seq.ids.iter().zip(&seq.segment_ids).enumerate() {
        if id as usize >= params.token_emb.nrows() {
            return Err(Error::InvalidArgument(format!(
                "token id {id} out of range for vocab of {}",
                params.token_emb.nrows()
            )));
        }
        let mut row = h.row_mut(p);
        row.assign(&params.token_emb.row(id as usize));
        row += &params.segment_emb.row(seg as usize);
        row += &params.position_emb.row(p);
    }
    Ok(h)
}

struct AttnTape {
    q: Array2<f64>,
    k: Array2<f64>,
    v: Array2<f64>,
    attn: Vec<Array2<f64>>,
    ctx: Array2<f64>,
}

struct LnTape {
    norm: Array2<f64>,
    rstd: Vec<f64>,
}

struct LayerItemTape {
    h_in: Array2<f64>,
    attn: AttnTape,
    attn_dropout: Option<Array2<f64>>,
    ln1: LnTape,
    h_mid: Array2<f64>,
    z1: Array2<f64>,
    a1: Array2<f64>,
    ffn_dropout: Option<Array2<f64>>,
    ln2: LnTape,
}

struct ItemTape {
    ids: Vec<u32>,
    segments: Vec<u8>,
    mask: Vec<u8>,
    emb_dropout: Option<Array2<f64>>,
    layers: Vec<LayerItemTape>,
    final_hidden: Array2<f64>,
}

/// Forward intermediates for one batch; replaying it drives the exact
/// backward pass.
pub struct ForwardTape {
    items: Vec<ItemTape>,
    logits: Array2<f64>,
}

impl ForwardTape {
    pub fn logits(&self) -> &Array2<f64> {
        &self.logits
    }

    pub fn final_hidden(&self, item: usize) -> &Array2<f64> {
        &self.items[item].final_hidden
    }

    /// Attention-row sums over unmasked keys, for every real query row of
    /// every item, layer, and head.
    pub fn attention_row_sums(&self) -> Vec<f64> {
        let mut sums = Vec::new();
        for item in &self.items {
            for layer in &item.layers {
                for head in &layer.attn {
                    for (qi, row) in head.rows().into_iter().enumerate() {
                        if item.mask[qi] == 0 {
                            continue;
                        }
                        sums.push(
                            row.iter()
                                .zip(&item.mask)
                                .filter(|(_, &m)| m == 1)
                                .map(|(w, _)| w)
                                .sum(),
                        );
                    }
                }
            }
        }
        sums
    }
}

fn item_forward(
    config: &EncoderConfig,
    params: &EncoderParams,
    seq: &TokenSequence,
    rng: Option<&mut ChaCha8Rng>,
) -> Result<ItemTape> {
    let dropout = config.dropout_rate;
    let mut rng = rng;

    let mut hidden = embed_sequence(seq, params)?;
    let emb_dropout = rng.as_deref_mut().map(|r| {
        let mask = nn::dropout_mask(hidden.nrows(), hidden.ncols(), dropout, r);
        hidden *= &mask;
        mask
    });

    let mut layers = Vec::with_capacity(config.n_layers);
    for layer in &params.layers {
        let h_in = hidden;
        let (mut attn_out, attn_tape) =
            layer.attention_inner(&h_in, &seq.attention_mask, config.n_heads)?;
        let attn_dropout = rng.as_deref_mut().map(|r| {
            let mask = nn::dropout_mask(attn_out.nrows(), attn_out.ncols(), dropout, r);
            attn_out *= &mask;
            mask
        });

        let res1 = &h_in + &attn_out;
        let mut ln1 = LnTape {
            norm: Array2::zeros(res1.raw_dim()),
            rstd: Vec::new(),
        };
        let h_mid = nn::layer_norm(
            &res1,
            &layer.ln1_gain,
            &layer.ln1_bias,
            &mut ln1.norm,
            &mut ln1.rstd,
        );

        let z1 = nn::linear(&h_mid, &layer.w1, &layer.b1);
        let a1 = match config.activation {
            Activation::Relu => nn::relu(&z1),
            Activation::Gelu => nn::gelu(&z1),
        };
        let mut ffn_out = nn::linear(&a1, &layer.w2, &layer.b2);
        let ffn_dropout = rng.as_deref_mut().map(|r| {
            let mask = nn::dropout_mask(ffn_out.nrows(), ffn_out.ncols(), dropout, r);
            ffn_out *= &mask;
            mask
        });

        let res2 = &h_mid + &ffn_out;
        let mut ln2 = LnTape {
            norm: Array2::zeros(res2.raw_dim()),
            rstd: Vec::new(),
        };
        let h_out = nn::layer_norm(
            &res2,
            &layer.ln2_gain,
            &layer.ln2_bias,
            &mut ln2.norm,
            &mut ln2.rstd,
        );

        layers.push(LayerItemTape {
            h_in,
            attn: attn_tape,
            attn_dropout,
            ln1,
            h_mid,
            z1,
            a1,
            ffn_dropout,
            ln2,
        });
        hidden = h_out;
    }

    Ok(ItemTape {
        ids: seq.ids.clone(),
        segments: seq.segment_ids.clone(),
        mask: seq.attention_mask.clone(),
        emb_dropout,
        layers,
        final_hidden: hidden,
    })
}

/// Runs the encoder over a batch. Dropout is active only in train mode and
/// is derived from the seed; eval mode is deterministic.
pub fn forward(
    config: &EncoderConfig,
    params: &EncoderParams,
    batch: &[TokenSequence],
    mode: Mode,
    seed: u64,
) -> Result<ForwardTape> {
    config.validate()?;
    if batch.is_empty() {
        return Err(Error::EmptyInput("empty batch".into()));
    }
    let len = batch[0].ids.len();
    if batch.iter().any(|s| s.ids.len() != len) {
        return Err(Error::ShapeMismatch(
            "all batch items must share max_len".into(),
        ));
    }

    let mut rng = match mode {
        Mode::Train if config.dropout_rate > 0.0 => Some(ChaCha8Rng::seed_from_u64(seed)),
        _ => None,
    };

    let mut items = Vec::with_capacity(batch.len());
    for seq in batch {
        items.push(item_forward(config, params, seq, rng.as_mut())?);
    }

    let mut logits = Array2::zeros((batch.len(), N_CLASSES));
    for (i, item) in items.iter().enumerate() {
        let cls = item.final_hidden.row(0);
        let row = cls.dot(&params.classifier_w) + &params.classifier_b;
        logits.row_mut(i).assign(&row);
    }

    Ok(ForwardTape { items, logits })
}

/// Training objective for [`loss_and_gradients`].
pub enum Objective<'a> {
    /// Mean softmax cross-entropy on the `[CLS]` logits.
    Classification { labels: &'a [u8] },
    /// Mean cross-entropy over masked positions, predicting original ids
    /// through the (tied) token-embedding matrix.
    MaskedLm {
        targets: &'a [BTreeMap<usize, u32>],
    },
}

fn backward_item(
    config: &EncoderConfig,
    params: &EncoderParams,
    item: &ItemTape,
    mut d_hidden: Array2<f64>,
    grads: &mut EncoderParams,
) {
    let n_heads = config.n_heads;
    let dk = config.hidden_dim / n_heads;
    let scale = 1.0 / (dk as f64).sqrt();
    let gelu_active = config.activation == Activation::Gelu;

    for (layer, tape) in params.layers.iter().zip(&item.layers).rev() {
        let gl = grads
            .layers
            .iter_mut()
            .zip(&item.layers)
            .rev()
            .find(|(_, t)| std::ptr::eq(*t, tape))
            .map(|(g, _)| g)
            .expect("grads mirror params");

        // LN2
        let dres2 = nn::layer_norm_backward(
            &d_hidden,
            &tape.ln2.norm,
            &tape.ln2.rstd,
            &layer.ln2_gain,
            &mut gl.ln2_gain,
            &mut gl.ln2_bias,
        );
        let mut d_h_mid = dres2.clone();
        let dffn = match &tape.ffn_dropout {
            Some(mask) => &dres2 * mask,
            None => dres2,
        };

        // FFN
        let da1 = nn::linear_backward(&tape.a1, &layer.w2, &dffn, &mut gl.w2, &mut gl.b2);
        let dz1 = nn::activation_backward(&tape.z1, &da1, gelu_active);
        d_h_mid += &nn::linear_backward(&tape.h_mid, &layer.w1, &dz1, &mut gl.w1, &mut gl.b1);

        // LN1
        let dres1 = nn::layer_norm_backward(
            &d_h_mid,
            &tape.ln1.norm,
            &tape.ln1.rstd,
            &layer.ln1_gain,
            &mut gl.ln1_gain,
            &mut gl.ln1_bias,
        );
        let mut d_h_in = dres1.clone();
        let dproj = match &tape.attn_dropout {
            Some(mask) => &dres1 * mask,
            None => dres1,
        };

        // Attention output projection
        let dctx = nn::linear_backward(&tape.attn.ctx, &layer.wo, &dproj, &mut gl.wo, &mut gl.bo);

        // Heads
        let seq = d_h_in.nrows();
        let mut dq = Array2::zeros((seq, config.hidden_dim));
        let mut dkm = Array2::zeros((seq, config.hidden_dim));
        let mut dv = Array2::zeros((seq, config.hidden_dim));
        for h in 0..n_heads {
            let cols = s![.., h * dk..(h + 1) * dk];
            let a = &tape.attn.attn[h];
            let vh = tape.attn.v.slice(cols);
            let qh = tape.attn.q.slice(cols);
            let kh = tape.attn.k.slice(cols);
            let dctx_h = dctx.slice(cols);

            let da = dctx_h.dot(&vh.t());
            dv.slice_mut(cols).assign(&a.t().dot(&dctx_h));
            let mut ds = nn::softmax_backward_rows(a, &da);
            ds *= scale;
            dq.slice_mut(cols).assign(&ds.dot(&kh));
            dkm.slice_mut(cols).assign(&ds.t().dot(&qh));
        }

        d_h_in += &nn::linear_backward(&tape.h_in, &layer.wq, &dq, &mut gl.wq, &mut gl.bq);
        d_h_in += &nn::linear_backward(&tape.h_in, &layer.wk, &dkm, &mut gl.wk, &mut gl.bk);
        d_h_in += &nn::linear_backward(&tape.h_in, &layer.wv, &dv, &mut gl.wv, &mut gl.bv);

        d_hidden = d_h_in;
    }

    // Embedding stage
    if let Some(mask) = &item.emb_dropout {
        d_hidden *= mask;
    }
    for (p, (&id, &seg)) in item.ids.iter().zip(&item.segments).enumerate() {
        let row = d_hidden.row(p);
        let mut e = grads.token_emb.row_mut(id as usize);
        e += &row;
        let mut sg = grads.segment_emb.row_mut(seg as usize);
        sg += &row;
        let mut ps = grads.position_emb.row_mut(p);
        ps += &row;
    }
}

/// Computes the objective loss and exact gradients for every parameter
/// tensor. The traced forward uses the given mode and seed, so train-mode
/// losses include dropout while eval-mode losses are deterministic.
pub fn loss_and_gradients(
    config: &EncoderConfig,
    params: &EncoderParams,
    batch: &[TokenSequence],
    objective: &Objective<'_>,
    mode: Mode,
    seed: u64,
) -> Result<(f64, EncoderParams)> {
    let tape = forward(config, params, batch, mode, seed)?;
    let mut grads = EncoderParams::zeros(config);
    let mut loss = 0.0;

    match objective {
        Objective::Classification { labels } => {
            if labels.len() != batch.len() {
                return Err(Error::ShapeMismatch(format!(
                    "{} labels vs {} batch items",
                    labels.len(),
                    batch.len()
                )));
            }
            if labels.iter().any(|&l| l as usize >= N_CLASSES) {
                return Err(Error::InvalidArgument("labels must be 0 or 1".into()));
            }
            let b = batch.len() as f64;
            for (i, item) in tape.items.iter().enumerate() {
                let logit_row = tape.logits.row(i);
                let max = logit_row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let exp: Vec<f64> = logit_row.iter().map(|&v| (v - max).exp()).collect();
                let sum: f64 = exp.iter().sum();
                let label = labels[i] as usize;
                loss += -(exp[label] / sum).ln() / b;

                let mut dlogits = Array1::zeros(N_CLASSES);
                for c in 0..N_CLASSES {
                    dlogits[c] = (exp[c] / sum - if c == label { 1.0 } else { 0.0 }) / b;
                }

                let cls = item.final_hidden.row(0);
                for c in 0..N_CLASSES {
                    let mut col = grads.classifier_w.column_mut(c);
                    col.scaled_add(dlogits[c], &cls);
                }
                grads.classifier_b += &dlogits;

                let mut d_hidden = Array2::zeros(item.final_hidden.raw_dim());
                d_hidden
                    .row_mut(0)
                    .assign(&params.classifier_w.dot(&dlogits));
                backward_item(config, params, item, d_hidden, &mut grads);
            }
        }
        Objective::MaskedLm { targets } => {
            if targets.len() != batch.len() {
                return Err(Error::ShapeMismatch(format!(
                    "{} target maps vs {} batch items",
                    targets.len(),
                    batch.len()
                )));
            }
            let total: usize = targets.iter().map(|t| t.len()).sum();
            if total == 0 {
                return Err(Error::EmptyInput(
                    "masked-lm objective with zero masked positions".into(),
                ));
            }
            let total = total as f64;
            for (item, item_targets) in tape.items.iter().zip(targets.iter()) {
                let mut d_hidden = Array2::zeros(item.final_hidden.raw_dim());
                for (&pos, &orig) in item_targets {
                    if pos >= item.ids.len() || orig as usize >= config.vocab_size {
                        return Err(Error::InvalidArgument(format!(
                            "masked target ({pos}, {orig}) out of range"
                        )));
                    }
                    let h = item.final_hidden.row(pos);
                    let mut logits = params.token_emb.dot(&h);
                    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                    logits.mapv_inplace(|v| (v - max).exp());
                    let sum = logits.sum();
                    loss += -(logits[orig as usize] / sum).ln() / total;

                    // dlogits = (softmax - onehot) / total
                    logits /= sum;
                    logits[orig as usize] -= 1.0;
                    logits /= total;

                    let mut drow = d_hidden.row_mut(pos);
                    drow += &logits.dot(&params.token_emb);
                    // Tied output head: the embedding table also collects
                    // the outer product dlogits x h.
                    for (vi, &dl) in logits.iter().enumerate() {
                        let mut erow = grads.token_emb.row_mut(vi);
                        erow.scaled_add(dl, &h);
                    }
                }
                backward_item(config, params, item, d_hidden, &mut grads);
            }
        }
    }

    Ok((loss, grads))
}

/// Eval-mode probability of the attack class (index 1), in input order.
/// Processes the input in fixed-size chunks to bound tape memory.
pub fn predict_probs(
    config: &EncoderConfig,
    params: &EncoderParams,
    batch: &[TokenSequence],
) -> Result<Vec<f64>> {
    let mut probs = Vec::with_capacity(batch.len());
    for chunk in batch.chunks(64.max(1)) {
        let tape = forward(config, params, chunk, Mode::Eval, 0)?;
        for row in tape.logits.rows() {
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let e0 = (row[0] - max).exp();
            let e1 = (row[1] - max).exp();
            probs.push(e1 / (e0 + e1));
        }
    }
    Ok(probs)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tokenizer::{build_vocab, encode};

    fn tiny_config() -> EncoderConfig {
        EncoderConfig {
            n_layers: 2,
            hidden_dim: 16,
            n_heads: 2,
            ffn_dim: 32,
            max_positions: 12,
            vocab_size: 24,
            dropout_rate: 0.0,
            activation: Activation::Relu,
            init_std: 0.02,
        }
    }

    fn toy_sequence(len: usize, real: usize) -> TokenSequence {
        let mut ids = vec![0u32; len];
        let mut mask = vec![0u8; len];
        ids[0] = 2;
        for (p, id) in ids.iter_mut().enumerate().take(real - 1).skip(1) {
            *id = 5 + (p as u32 % 7);
        }
        ids[real - 1] = 3;
        mask[..real].fill(1);
        TokenSequence {
            ids,
            attention_mask: mask,
            segment_ids: vec![0; len],
            label: 0,
        }
    }

    #[test]
    fn init_is_deterministic_with_zero_biases_and_bounded_weights() {
        let config = EncoderConfig::desk(100, 32);
        let a = init_params(&config, 1).unwrap();
        let b = init_params(&config, 1).unwrap();
        assert_eq!(a, b);
        assert!(a.layers[0].bq.iter().all(|&v| v == 0.0));
        assert!(a.layers[1].b2.iter().all(|&v| v == 0.0));
        assert!(a.classifier_b.iter().all(|&v| v == 0.0));
        assert!(a.layers[0].ln1_gain.iter().all(|&v| v == 1.0));
        let bound = 2.0 * config.init_std;
        assert!(a.token_emb.iter().all(|&v| v.abs() <= bound));
        assert!(a.layers[0].wq.iter().all(|&v| v.abs() <= bound));
        assert!(a.classifier_w.iter().all(|&v| v.abs() <= bound));
    }

    #[test]
    fn embedding_adds_three_tables() {
        let config = tiny_config();
        let mut params = EncoderParams::zeros(&config);
        let seq = toy_sequence(6, 4);

        // All tables zero -> all-zero hidden states.
        let h = embed_sequence(&seq, &params).unwrap();
        assert!(h.iter().all(|&v| v == 0.0));

        // Hand-set rows: h[p] must be the elementwise sum of the three rows.
        params.token_emb.row_mut(5).fill(0.25);
        params.segment_emb.row_mut(0).fill(0.5);
        params.position_emb.row_mut(1).fill(1.0);
        let h = embed_sequence(&seq, &params).unwrap();
        assert!(h.row(1).iter().all(|&v| (v - 1.75).abs() < 1e-15));

        // Same token at two positions differs exactly by the position rows.
        params.token_emb.row_mut(6).fill(0.25);
        params.position_emb.row_mut(2).fill(-2.0);
        let h = embed_sequence(&seq, &params).unwrap();
        let diff = &h.row(1) - &h.row(2);
        let expected = &params.position_emb.row(1) - &params.position_emb.row(2);
        assert!(diff
            .iter()
            .zip(expected.iter())
            .all(|(a, b)| (a - b).abs() < 1e-15));
    }

    #[test]
    fn embedding_rejects_out_of_range_ids() {
        let config = tiny_config();
        let params = EncoderParams::zeros(&config);
        let mut seq = toy_sequence(6, 4);
        seq.ids[1] = 999;
        assert!(embed_sequence(&seq, &params).is_err());
    }

    #[test]
    fn singleton_attention_weight_is_one() {
        let config = tiny_config();
        let params = init_params(&config, 3).unwrap();
        let layer = &params.layers[0];
        let hidden = Array2::from_shape_fn((4, 16), |(i, j)| ((i * 17 + j) as f64).sin() * 0.1);
        let mask = [1u8, 0, 0, 0];
        let out = layer.self_attention(&hidden, &mask, config.n_heads).unwrap();

        // The only real query attends to itself with weight one, so its
        // context equals its value row and the output row is that value row
        // through the output projection.
        let v = nn::linear(&hidden, &layer.wv, &layer.bv);
        let expected = v.row(0).dot(&layer.wo) + &layer.bo;
        for (a, b) in out.row(0).iter().zip(expected.iter()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn identical_values_make_attention_a_no_op() {
        let config = tiny_config();
        let mut params = EncoderParams::zeros(&config);
        let layer = &mut params.layers[0];
        // Identity value/output paths, arbitrary q/k.
        for i in 0..16 {
            layer.wv[[i, i]] = 1.0;
            layer.wo[[i, i]] = 1.0;
        }
        nn::trunc_normal_fill(
            layer.wq.as_slice_mut().unwrap(),
            0.1,
            &mut ChaCha8Rng::seed_from_u64(4),
        );
        nn::trunc_normal_fill(
            layer.wk.as_slice_mut().unwrap(),
            0.1,
            &mut ChaCha8Rng::seed_from_u64(5),
        );
        let mut hidden = Array2::zeros((5, 16));
        for mut row in hidden.rows_mut() {
            for (j, v) in row.iter_mut().enumerate() {
                *v = (j as f64 * 0.37).cos();
            }
        }
        let mask = [1u8; 5];
        let out = params.layers[0]
            .self_attention(&hidden, &mask, config.n_heads)
            .unwrap();
        for row in out.rows() {
            for (a, b) in row.iter().zip(hidden.row(0).iter()) {
                assert!((a - b).abs() < 1e-9, "convex combination of identical rows");
            }
        }
    }

    #[test]
    fn two_token_attention_matches_hand_formula() {
        // d = 2, one head, identity projections: the module must reproduce
        // softmax([q.k1, q.k2]/sqrt(2)) V computed with plain loops.
        let config = EncoderConfig {
            n_layers: 1,
            hidden_dim: 2,
            n_heads: 1,
            ffn_dim: 4,
            max_positions: 4,
            vocab_size: 8,
            dropout_rate: 0.0,
            activation: Activation::Relu,
            init_std: 0.02,
        };
        let mut params = EncoderParams::zeros(&config);
        let layer = &mut params.layers[0];
        for i in 0..2 {
            layer.wq[[i, i]] = 1.0;
            layer.wk[[i, i]] = 1.0;
            layer.wv[[i, i]] = 1.0;
            layer.wo[[i, i]] = 1.0;
        }
        let hidden = ndarray::array![[0.8, -0.3], [0.2, 0.9]];
        let out = params.layers[0].self_attention(&hidden, &[1, 1], 1).unwrap();

        // Independent evaluation.
        let q = [[0.8, -0.3], [0.2, 0.9]];
        let scale = 1.0 / 2f64.sqrt();
        for i in 0..2 {
            let s0 = (q[i][0] * q[0][0] + q[i][1] * q[0][1]) * scale;
            let s1 = (q[i][0] * q[1][0] + q[i][1] * q[1][1]) * scale;
            let m = s0.max(s1);
            let (e0, e1) = ((s0 - m).exp(), (s1 - m).exp());
            let (w0, w1) = (e0 / (e0 + e1), e1 / (e0 + e1));
            for j in 0..2 {
                let expected = w0 * q[0][j] + w1 * q[1][j];
                assert!(
                    (out[[i, j]] - expected).abs() < 1e-6,
                    "row {i} col {j}: {} vs {expected}",
                    out[[i, j]]
                );
            }
        }
    }

    #[test]
    fn all_masked_attention_errors() {
        let config = tiny_config();
        let params = init_params(&config, 1).unwrap();
        let hidden = Array2::zeros((3, 16));
        assert!(params.layers[0]
            .self_attention(&hidden, &[0, 0, 0], config.n_heads)
            .is_err());
    }

    #[test]
    fn feed_forward_matches_formula() {
        let config = tiny_config();
        let mut params = EncoderParams::zeros(&config);

        // Identity-ish path: W1 embeds into the first 16 ffn columns, W2
        // projects them back, so relu passes positives through.
        let layer = &mut params.layers[0];
        for i in 0..16 {
            layer.w1[[i, i]] = 1.0;
            layer.w2[[i, i]] = 1.0;
        }
        let mut x = Array2::zeros((1, 16));
        x[[0, 0]] = -1.0;
        x[[0, 1]] = 2.0;
        let y = params.layers[0].feed_forward(&x, Activation::Relu);
        assert_eq!(y[[0, 0]], 0.0);
        assert_eq!(y[[0, 1]], 2.0);

        // Zero input, zero b1: output equals b2.
        let layer = &mut params.layers[0];
        layer.b2.fill(0.75);
        let y = params.layers[0].feed_forward(&Array2::zeros((2, 16)), Activation::Relu);
        assert!(y.iter().all(|&v| v == 0.75));
    }

    #[test]
    fn feed_forward_matches_independent_matrix_arithmetic() {
        // Random 3-dim case evaluated with plain loops.
        let config = EncoderConfig {
            n_layers: 1,
            hidden_dim: 3,
            n_heads: 1,
            ffn_dim: 5,
            max_positions: 4,
            vocab_size: 8,
            dropout_rate: 0.0,
            activation: Activation::Relu,
            init_std: 0.1,
        };
        let params = init_params(&config, 11).unwrap();
        let layer = &params.layers[0];
        let x = ndarray::array![[0.3, -0.7, 1.1], [-0.2, 0.4, 0.9]];
        let y = layer.feed_forward(&x, Activation::Relu);
        for i in 0..2 {
            for j in 0..3 {
                let mut acc = layer.b2[j];
                for f in 0..5 {
                    let mut z = layer.b1[f];
                    for d in 0..3 {
                        z += x[[i, d]] * layer.w1[[d, f]];
                    }
                    acc += z.max(0.0) * layer.w2[[f, j]];
                }
                assert!((y[[i, j]] - acc).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn logits_shape_and_zeroed_head() {
        let config = tiny_config();
        let mut params = init_params(&config, 7).unwrap();
        let batch: Vec<TokenSequence> = (3..6).map(|r| toy_sequence(10, r)).collect();
        let tape = forward(&config, &params, &batch, Mode::Eval, 0).unwrap();
        assert_eq!(tape.logits().dim(), (3, 2));

        params.classifier_w.fill(0.0);
        params.classifier_b.fill(0.0);
        let tape = forward(&config, &params, &batch, Mode::Eval, 0).unwrap();
        assert!(tape.logits().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn extra_padding_leaves_eval_logits_unchanged() {
        let config = tiny_config();
        let params = init_params(&config, 13).unwrap();
        let short = toy_sequence(8, 6);
        let mut long = toy_sequence(12, 6);
        long.ids[..8].copy_from_slice(&short.ids);
        let a = forward(&config, &params, &[short], Mode::Eval, 0).unwrap();
        let b = forward(&config, &params, &[long], Mode::Eval, 0).unwrap();
        for (x, y) in a.logits().iter().zip(b.logits().iter()) {
            assert!((x - y).abs() < 1e-6, "{x} vs {y}");
        }
    }

    #[test]
    fn eval_forward_is_bitwise_repeatable() {
        let config = tiny_config();
        let params = init_params(&config, 21).unwrap();
        let batch = vec![toy_sequence(10, 7), toy_sequence(10, 4)];
        let a = forward(&config, &params, &batch, Mode::Eval, 0).unwrap();
        let b = forward(&config, &params, &batch, Mode::Eval, 99).unwrap();
        assert_eq!(a.logits(), b.logits());
        assert_eq!(a.final_hidden(0), b.final_hidden(0));
    }

    #[test]
    fn train_dropout_is_seeded() {
        let mut config = tiny_config();
        config.dropout_rate = 0.2;
        let params = init_params(&config, 21).unwrap();
        let batch = vec![toy_sequence(10, 7)];
        let a = forward(&config, &params, &batch, Mode::Train, 5).unwrap();
        let b = forward(&config, &params, &batch, Mode::Train, 5).unwrap();
        let c = forward(&config, &params, &batch, Mode::Train, 6).unwrap();
        assert_eq!(a.logits(), b.logits());
        assert_ne!(a.logits(), c.logits());
    }

    #[test]
    fn attention_rows_sum_to_one_at_every_layer_and_head() {
        let config = tiny_config();
        let params = init_params(&config, 2).unwrap();
        let batch = vec![toy_sequence(10, 7), toy_sequence(10, 3)];
        let tape = forward(&config, &params, &batch, Mode::Eval, 0).unwrap();
        let sums = tape.attention_row_sums();
        assert_eq!(sums.len(), (7 + 3) * 2 * 2);
        for s in sums {
            assert!((s - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn zeroed_classifier_gives_ln2_loss() {
        let config = tiny_config();
        let mut params = init_params(&config, 17).unwrap();
        params.classifier_w.fill(0.0);
        params.classifier_b.fill(0.0);
        let batch = vec![toy_sequence(10, 5), toy_sequence(10, 8), toy_sequence(10, 3)];
        let labels = [0u8, 1, 1];
        let (loss, _) = loss_and_gradients(
            &config,
            &params,
            &batch,
            &Objective::Classification { labels: &labels },
            Mode::Eval,
            0,
        )
        .unwrap();
        assert!((loss - 2f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn duplicating_batch_items_preserves_mean_loss() {
        let config = tiny_config();
        let params = init_params(&config, 19).unwrap();
        let batch = vec![toy_sequence(10, 5), toy_sequence(10, 8)];
        let labels = [0u8, 1];
        let (loss_once, _) = loss_and_gradients(
            &config,
            &params,
            &batch,
            &Objective::Classification { labels: &labels },
            Mode::Eval,
            0,
        )
        .unwrap();
        let doubled: Vec<TokenSequence> = batch.iter().chain(batch.iter()).cloned().collect();
        let labels2 = [0u8, 1, 0, 1];
        let (loss_twice, _) = loss_and_gradients(
            &config,
            &params,
            &doubled,
            &Objective::Classification { labels: &labels2 },
            Mode::Eval,
            0,
        )
        .unwrap();
        assert!((loss_once - loss_twice).abs() < 1e-9);
    }

    #[test]
    fn mlm_with_zero_masked_positions_errors() {
        let config = tiny_config();
        let params = init_params(&config, 1).unwrap();
        let batch = vec![toy_sequence(10, 5)];
        let targets = vec![BTreeMap::new()];
        assert!(loss_and_gradients(
            &config,
            &params,
            &batch,
            &Objective::MaskedLm { targets: &targets },
            Mode::Eval,
            0,
        )
        .is_err());
    }

    #[test]
    fn memorizes_sixteen_examples_with_gradient_descent() {
        // 16 distinct inputs, arbitrary labels; 50 full-batch steps of plain
        // gradient descent must drive the loss under 0.05.
        let corpus: Vec<String> = (0..16)
            .map(|i| format!("flow duration={} pkts={}", i * 131 + 7, 997 - i * 3))
            .collect();
        let vocab = build_vocab(&corpus, 64).unwrap();
        let batch: Vec<TokenSequence> = corpus
            .iter()
            .map(|t| encode(&vocab, t, 24).unwrap())
            .collect();
        let labels: Vec<u8> = (0..16).map(|i| (i % 3 == 0) as u8).collect();

        let config = EncoderConfig {
            n_layers: 2,
            hidden_dim: 32,
            n_heads: 4,
            ffn_dim: 64,
            max_positions: 24,
            vocab_size: vocab.len(),
            dropout_rate: 0.0,
            activation: Activation::Relu,
            init_std: 0.02,
        };
        let mut params = init_params(&config, 5).unwrap();
        let mut last = f64::INFINITY;
        for step in 0..50 {
            let (loss, grads) = loss_and_gradients(
                &config,
                &params,
                &batch,
                &Objective::Classification { labels: &labels },
                Mode::Eval,
                step,
            )
            .unwrap();
            last = loss;
            let lr = 0.5;
            for (p, g) in param_tensors_mut(&mut params)
                .into_iter()
                .zip(param_tensors(&grads))
            {
                for (pv, gv) in p.iter_mut().zip(g) {
                    *pv -= lr * gv;
                }
            }
        }
        assert!(last < 0.05, "final loss {last}");
    }

    fn param_tensors(p: &EncoderParams) -> Vec<&[f64]> {
        use crate::trainer::ParamTensors;
        p.views()
    }

    fn param_tensors_mut(p: &mut EncoderParams) -> Vec<&mut [f64]> {
        use crate::trainer::ParamTensors;
        p.views_mut()
    }
}
