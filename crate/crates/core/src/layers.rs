//! Neural building blocks: affine maps, layer norm, sinusoidal positions,
//! masked multi-head attention, Transformer encoder/decoder layers and the LSTM cell.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{contract, Error, Result};
use crate::params::{ParamId, ParamStore, Session};
use crate::tensor::{Tape, Tensor, Var};

/// Model widths. `d_head` is independent of `d_model`: attention projects
/// `d_model → n_heads·d_head` and back through an explicit output map.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelDims {
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_head: usize,
    pub d_ff: usize,
    pub max_len: usize,
    pub vocab_size: usize,
}

impl Default for ModelDims {
    fn default() -> Self {
        ModelDims {
            d_model: 32,
            n_layers: 2,
            n_heads: 4,
            d_head: 64,
            d_ff: 128,
            max_len: 20,
            vocab_size: 5000,
        }
    }
}

impl ModelDims {
    pub fn validate(&self) -> Result<()> {
        let fields = [
            ("d_model", self.d_model),
            ("n_layers", self.n_layers),
            ("n_heads", self.n_heads),
            ("d_head", self.d_head),
            ("d_ff", self.d_ff),
            ("vocab_size", self.vocab_size),
        ];
        if let Some((name, _)) = fields.iter().find(|(_, v)| *v == 0) {
            return contract(format!("model dimension {name} must be >= 1"));
        }
        if self.max_len < 2 {
            return contract("max_len must be >= 2");
        }
        Ok(())
    }
}

/// Boolean attendability matrix `[batch × L_q × L_k]`; true = attendable.
/// A mask with `batch == 1` is shared by every batch element.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AttentionMask {
    pub batch: usize,
    pub lq: usize,
    pub lk: usize,
    pub allowed: Vec<bool>,
}

impl AttentionMask {
    pub fn full(lq: usize, lk: usize) -> Self {
        AttentionMask {
            batch: 1,
            lq,
            lk,
            allowed: vec![true; lq * lk],
        }
    }

    /// `mask[i][j] = (j <= i)`.
    pub fn causal(l: usize) -> Self {
        let allowed = (0..l * l).map(|x| x % l <= x / l).collect();
        AttentionMask {
            batch: 1,
            lq: l,
            lk: l,
            allowed,
        }
    }

    /// Per-element key masking: element `b` may attend keys `< key_lens[b]`.
    pub fn key_padding(lq: usize, lk: usize, key_lens: &[usize]) -> Self {
        let mut allowed = Vec::with_capacity(key_lens.len() * lq * lk);
        for &kl in key_lens {
            for _ in 0..lq {
                allowed.extend((0..lk).map(|j| j < kl));
            }
        }
        AttentionMask {
            batch: key_lens.len(),
            lq,
            lk,
            allowed,
        }
    }

    pub fn get(&self, b: usize, i: usize, j: usize) -> bool {
        let b = if self.batch == 1 { 0 } else { b };
        self.allowed[(b * self.lq + i) * self.lk + j]
    }

    /// Elementwise AND, broadcasting a batch-1 operand.
    pub fn and(&self, other: &AttentionMask) -> Result<AttentionMask> {
        if self.lq != other.lq || self.lk != other.lk || (self.batch != other.batch && self.batch != 1 && other.batch != 1) {
            return Err(Error::Shape {
                op: "mask_and",
                lhs: vec![self.batch, self.lq, self.lk],
                rhs: vec![other.batch, other.lq, other.lk],
            });
        }
        let batch = self.batch.max(other.batch);
        let mut allowed = Vec::with_capacity(batch * self.lq * self.lk);
        for b in 0..batch {
            for i in 0..self.lq {
                for j in 0..self.lk {
                    allowed.push(self.get(b, i, j) && other.get(b, i, j));
                }
            }
        }
        Ok(AttentionMask {
            batch,
            lq: self.lq,
            lk: self.lk,
            allowed,
        })
    }

    pub fn validate(&self) -> Result<()> {
        for row in self.allowed.chunks(self.lk.max(1)) {
            if !row.iter().any(|&a| a) {
                return contract("attention mask has a query row with no attendable key");
            }
        }
        Ok(())
    }
}

/// Sinusoidal table: `PE[pos, 2i] = sin(pos / 10000^(2i/d))`, `PE[pos, 2i+1] = cos(...)`.
pub fn positional_encoding(max_len: usize, d_model: usize) -> Result<Tensor> {
    if d_model % 2 != 0 {
        return contract(format!("positional encoding needs an even d_model, got {d_model}"));
    }
    let mut data = vec![0.0f32; max_len * d_model];
    for pos in 0..max_len {
        for i in 0..d_model / 2 {
            let angle = pos as f64 / 10000f64.powf(2.0 * i as f64 / d_model as f64);
            data[pos * d_model + 2 * i] = angle.sin() as f32;
            data[pos * d_model + 2 * i + 1] = angle.cos() as f32;
        }
    }
    Tensor::new(vec![max_len, d_model], data)
}

fn check_mask(mask: &AttentionMask, batch: usize, lq: usize, lk: usize) -> Result<()> {
    if mask.lq != lq || mask.lk != lk || (mask.batch != 1 && mask.batch != batch) {
        return Err(Error::Shape {
            op: "attention_mask",
            lhs: vec![mask.batch, mask.lq, mask.lk],
            rhs: vec![batch, lq, lk],
        });
    }
    Ok(())
}

/// Attention probabilities `softmax(q·kᵀ/√d)` over attendable keys for
/// `q[B·H × Lq × d]`, `k[B·H × Lk × d]`.
fn attention_weights(tape: &mut Tape, q: Var, k: Var, mask: &AttentionMask, heads: usize) -> Result<Var> {
    let (bh, lq, d) = {
        let s = tape.shape(q);
        (s[0], s[1], s[2])
    };
    let lk = tape.shape(k)[1];
    check_mask(mask, bh / heads, lq, lk)?;
    let scores = tape.batch_matmul(q, k, true)?;
    let scores = tape.scale(scores, 1.0 / (d as f32).sqrt())?;
    let repeat = if mask.batch == 1 { bh } else { heads };
    tape.masked_softmax(scores, mask.allowed.clone(), lq, lk, repeat)
}

/// Single-head attention `softmax(q·kᵀ/√d + mask)·v`.
///
/// Accepts `q[Lq×d]`, `k[Lk×d]`, `v[Lk×dv]`, or the same with a leading batch axis.
pub fn scaled_dot_attention(tape: &mut Tape, q: Var, k: Var, v: Var, mask: &AttentionMask) -> Result<Var> {
    let two_d = tape.shape(q).len() == 2;
    let lift = |tape: &mut Tape, x: Var| -> Result<Var> {
        if two_d {
            let s = tape.shape(x).to_vec();
            tape.reshape(x, &[1, s[0], s[1]])
        } else {
            Ok(x)
        }
    };
    let (q3, k3, v3) = (lift(tape, q)?, lift(tape, k)?, lift(tape, v)?);
    let w = attention_weights(tape, q3, k3, mask, 1)?;
    let out = tape.batch_matmul(w, v3, false)?;
    if two_d {
        let s = tape.shape(out).to_vec();
        tape.reshape(out, &[s[1], s[2]])
    } else {
        Ok(out)
    }
}

#[derive(Clone, Debug)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
    pub d_in: usize,
    pub d_out: usize,
}

impl Linear {
    /// Xavier-uniform weights, zero bias.
    pub fn new(store: &mut ParamStore, name: &str, d_in: usize, d_out: usize, rng: &mut impl Rng) -> Self {
        let bound = (6.0 / (d_in + d_out) as f32).sqrt();
        Linear {
            w: store.add_uniform(format!("{name}.w"), &[d_in, d_out], bound, rng),
            b: store.add_const(format!("{name}.b"), &[d_out], 0.0),
            d_in,
            d_out,
        }
    }

    pub fn with_normal(store: &mut ParamStore, name: &str, d_in: usize, d_out: usize, std: f32, rng: &mut impl Rng) -> Self {
        Linear {
            w: store.add_normal(format!("{name}.w"), &[d_in, d_out], std, rng),
            b: store.add_const(format!("{name}.b"), &[d_out], 0.0),
            d_in,
            d_out,
        }
    }

    /// Applies the map to the last axis of `x[... × d_in]`.
    pub fn forward(&self, s: &mut Session, x: Var) -> Result<Var> {
        let shape = s.shape(x).to_vec();
        if shape.last() != Some(&self.d_in) {
            return Err(Error::Shape {
                op: "linear",
                lhs: shape,
                rhs: vec![self.d_in, self.d_out],
            });
        }
        let rows = shape.iter().product::<usize>() / self.d_in;
        let x2 = if shape.len() == 2 { x } else { s.reshape(x, &[rows, self.d_in])? };
        let (w, b) = (s.param(self.w), s.param(self.b));
        let y = s.matmul(x2, w)?;
        let y = s.add_row(y, b)?;
        if shape.len() == 2 {
            Ok(y)
        } else {
            let mut out = shape;
            *out.last_mut().unwrap() = self.d_out;
            s.reshape(y, &out)
        }
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub bias: ParamId,
}

impl LayerNorm {
    pub const EPS: f32 = 1e-5;

    pub fn new(store: &mut ParamStore, name: &str, d: usize) -> Self {
        LayerNorm {
            gain: store.add_const(format!("{name}.gain"), &[d], 1.0),
            bias: store.add_const(format!("{name}.bias"), &[d], 0.0),
        }
    }

    pub fn forward(&self, s: &mut Session, x: Var) -> Result<Var> {
        let (g, b) = (s.param(self.gain), s.param(self.bias));
        s.layer_norm(x, g, b, Self::EPS)
    }
}

#[derive(Clone, Debug)]
pub struct MultiHeadAttention {
    pub wq: Linear,
    pub wk: Linear,
    pub wv: Linear,
    pub wo: Linear,
    pub n_heads: usize,
    pub d_head: usize,
}

impl MultiHeadAttention {
    pub fn new(store: &mut ParamStore, name: &str, d_model: usize, n_heads: usize, d_head: usize, rng: &mut impl Rng) -> Self {
        let inner = n_heads * d_head;
        MultiHeadAttention {
            wq: Linear::new(store, &format!("{name}.q"), d_model, inner, rng),
            wk: Linear::new(store, &format!("{name}.k"), d_model, inner, rng),
            wv: Linear::new(store, &format!("{name}.v"), d_model, inner, rng),
            wo: Linear::new(store, &format!("{name}.o"), inner, d_model, rng),
            n_heads,
            d_head,
        }
    }

    fn split_heads(&self, s: &mut Session, x: Var, b: usize, l: usize) -> Result<Var> {
        let x = s.reshape(x, &[b, l, self.n_heads, self.d_head])?;
        let x = s.permute(x, &[0, 2, 1, 3])?;
        s.reshape(x, &[b * self.n_heads, l, self.d_head])
    }

    /// `q_in[B×Lq×d_model]` attends over `kv_in[B×Lk×d_model]`; returns `[B×Lq×d_model]`.
    pub fn forward(&self, s: &mut Session, q_in: Var, kv_in: Var, mask: &AttentionMask) -> Result<Var> {
        let (b, lq) = (s.shape(q_in)[0], s.shape(q_in)[1]);
        let lk = s.shape(kv_in)[1];
        let q = self.wq.forward(s, q_in)?;
        let k = self.wk.forward(s, kv_in)?;
        let v = self.wv.forward(s, kv_in)?;
        let q = self.split_heads(s, q, b, lq)?;
        let k = self.split_heads(s, k, b, lk)?;
        let v = self.split_heads(s, v, b, lk)?;
        let w = attention_weights(s, q, k, mask, self.n_heads)?;
        let w = s.drop(w)?;
        let out = s.batch_matmul(w, v, false)?;
        let out = s.reshape(out, &[b, self.n_heads, lq, self.d_head])?;
        let out = s.permute(out, &[0, 2, 1, 3])?;
        let out = s.reshape(out, &[b, lq, self.n_heads * self.d_head])?;
        self.wo.forward(s, out)
    }
}

#[derive(Clone, Debug)]
pub struct FeedForward {
    pub l1: Linear,
    pub l2: Linear,
}

impl FeedForward {
    pub fn new(store: &mut ParamStore, name: &str, d_model: usize, d_ff: usize, rng: &mut impl Rng) -> Self {
        FeedForward {
            l1: Linear::new(store, &format!("{name}.ff1"), d_model, d_ff, rng),
            l2: Linear::new(store, &format!("{name}.ff2"), d_ff, d_model, rng),
        }
    }

    pub fn forward(&self, s: &mut Session, x: Var) -> Result<Var> {
        let h = self.l1.forward(s, x)?;
        let h = s.relu(h)?;
        self.l2.forward(s, h)
    }
}

/// Post-norm residual block: `norm(x + dropout(sub))`.
fn add_norm(s: &mut Session, x: Var, sub: Var, norm: &LayerNorm) -> Result<Var> {
    let sub = s.drop(sub)?;
    let y = s.add(x, sub)?;
    norm.forward(s, y)
}

#[derive(Clone, Debug)]
pub struct EncoderLayer {
    pub attn: MultiHeadAttention,
    pub norm1: LayerNorm,
    pub ff: FeedForward,
    pub norm2: LayerNorm,
}

impl EncoderLayer {
    pub fn new(store: &mut ParamStore, name: &str, dims: &ModelDims, rng: &mut impl Rng) -> Self {
        EncoderLayer {
            attn: MultiHeadAttention::new(store, &format!("{name}.attn"), dims.d_model, dims.n_heads, dims.d_head, rng),
            norm1: LayerNorm::new(store, &format!("{name}.norm1"), dims.d_model),
            ff: FeedForward::new(store, name, dims.d_model, dims.d_ff, rng),
            norm2: LayerNorm::new(store, &format!("{name}.norm2"), dims.d_model),
        }
    }

    /// Self-attention restricted only by `pad_mask`, then feed-forward.
    pub fn forward(&self, s: &mut Session, x: Var, pad_mask: &AttentionMask) -> Result<Var> {
        let a = self.attn.forward(s, x, x, pad_mask)?;
        let x = add_norm(s, x, a, &self.norm1)?;
        let f = self.ff.forward(s, x)?;
        add_norm(s, x, f, &self.norm2)
    }
}

#[derive(Clone, Debug)]
pub struct DecoderLayer {
    pub self_attn: MultiHeadAttention,
    pub norm1: LayerNorm,
    pub cross_attn: MultiHeadAttention,
    pub norm2: LayerNorm,
    pub ff: FeedForward,
    pub norm3: LayerNorm,
}

impl DecoderLayer {
    pub fn new(store: &mut ParamStore, name: &str, dims: &ModelDims, rng: &mut impl Rng) -> Self {
        DecoderLayer {
            self_attn: MultiHeadAttention::new(store, &format!("{name}.self"), dims.d_model, dims.n_heads, dims.d_head, rng),
            norm1: LayerNorm::new(store, &format!("{name}.norm1"), dims.d_model),
            cross_attn: MultiHeadAttention::new(store, &format!("{name}.cross"), dims.d_model, dims.n_heads, dims.d_head, rng),
            norm2: LayerNorm::new(store, &format!("{name}.norm2"), dims.d_model),
            ff: FeedForward::new(store, name, dims.d_model, dims.d_ff, rng),
            norm3: LayerNorm::new(store, &format!("{name}.norm3"), dims.d_model),
        }
    }

    /// `self_mask` is normally causal; `memory_mask` restricts cross-attention keys.
    pub fn forward(
        &self,
        s: &mut Session,
        target: Var,
        memory: Var,
        self_mask: &AttentionMask,
        memory_mask: &AttentionMask,
    ) -> Result<Var> {
        let a = self.self_attn.forward(s, target, target, self_mask)?;
        let x = add_norm(s, target, a, &self.norm1)?;
        let c = self.cross_attn.forward(s, x, memory, memory_mask)?;
        let x = add_norm(s, x, c, &self.norm2)?;
        let f = self.ff.forward(s, x)?;
        add_norm(s, x, f, &self.norm3)
    }
}

/// LSTM cell with gate order (input, forget, candidate, output).
#[derive(Clone, Debug)]
pub struct LstmCell {
    pub w_ih: ParamId,
    pub w_hh: ParamId,
    pub bias: ParamId,
    pub d_in: usize,
    pub hidden: usize,
}

impl LstmCell {
    pub fn new(store: &mut ParamStore, name: &str, d_in: usize, hidden: usize, rng: &mut impl Rng) -> Self {
        let bound = 1.0 / (hidden as f32).sqrt();
        LstmCell {
            w_ih: store.add_uniform(format!("{name}.w_ih"), &[d_in, 4 * hidden], bound, rng),
            w_hh: store.add_uniform(format!("{name}.w_hh"), &[hidden, 4 * hidden], bound, rng),
            bias: store.add_uniform(format!("{name}.bias"), &[4 * hidden], bound, rng),
            d_in,
            hidden,
        }
    }

    /// Cell whose every parameter is drawn i.i.d. from N(0, std²).
    pub fn new_normal(store: &mut ParamStore, name: &str, d_in: usize, hidden: usize, std: f32, rng: &mut impl Rng) -> Self {
        LstmCell {
            w_ih: store.add_normal(format!("{name}.w_ih"), &[d_in, 4 * hidden], std, rng),
            w_hh: store.add_normal(format!("{name}.w_hh"), &[hidden, 4 * hidden], std, rng),
            bias: store.add_normal(format!("{name}.bias"), &[4 * hidden], std, rng),
            d_in,
            hidden,
        }
    }

    pub fn zero_state(&self, s: &mut Session, batch: usize) -> Result<(Var, Var)> {
        let h = s.constant(&[batch, self.hidden], vec![0.0; batch * self.hidden])?;
        let c = s.constant(&[batch, self.hidden], vec![0.0; batch * self.hidden])?;
        Ok((h, c))
    }

    /// One step on `x[B×d_in]` with state `(h, c)` of shape `[B×hidden]`.
    pub fn step(&self, s: &mut Session, x: Var, state: (Var, Var)) -> Result<(Var, Var)> {
        lstm_step(s, x, state, self)
    }
}

/// `i, f, o = σ(·)`, `g = tanh(·)`, `c' = f⊙c + i⊙g`, `h' = o⊙tanh(c')`.
pub fn lstm_step(s: &mut Session, x: Var, (h, c): (Var, Var), p: &LstmCell) -> Result<(Var, Var)> {
    let (w_ih, w_hh, bias) = (s.param(p.w_ih), s.param(p.w_hh), s.param(p.bias));
    let gx = s.matmul(x, w_ih)?;
    let gh = s.matmul(h, w_hh)?;
    let gates = s.add(gx, gh)?;
    let gates = s.add_row(gates, bias)?;
    let hd = p.hidden;
    let i = s.slice(gates, 1, 0, hd)?;
    let f = s.slice(gates, 1, hd, hd)?;
    let g = s.slice(gates, 1, 2 * hd, hd)?;
    let o = s.slice(gates, 1, 3 * hd, hd)?;
    let i = s.sigmoid(i)?;
    let f = s.sigmoid(f)?;
    let g = s.tanh(g)?;
    let o = s.sigmoid(o)?;
    let fc = s.mul(f, c)?;
    let ig = s.mul(i, g)?;
    let c2 = s.add(fc, ig)?;
    let tc = s.tanh(c2)?;
    let h2 = s.mul(o, tc)?;
    Ok((h2, c2))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    fn random(shape: &[usize], r: &mut ChaCha8Rng) -> Tensor {
        Tensor::from_fn(shape, |_| r.random_range(-1.0..1.0))
    }

    fn small_dims() -> ModelDims {
        ModelDims {
            d_model: 8,
            n_layers: 1,
            n_heads: 2,
            d_head: 4,
            d_ff: 8,
            max_len: 5,
            vocab_size: 7,
        }
    }

    #[test]
    fn dims_validation() {
        assert!(ModelDims::default().validate().is_ok());
        let mut d = ModelDims::default();
        d.n_heads = 0;
        assert!(d.validate().is_err());
        d = ModelDims::default();
        d.max_len = 1;
        assert!(d.validate().is_err());
    }

    #[test]
    fn positional_encoding_examples() {
        let pe = positional_encoding(10, 32).unwrap();
        let row0 = &pe.data()[..32];
        for (j, &v) in row0.iter().enumerate() {
            assert_eq!(v, if j % 2 == 0 { 0.0 } else { 1.0 });
        }
        assert!(pe.data().iter().all(|v| (-1.0..=1.0).contains(v)));
        assert!((pe.data()[32] - 0.841471).abs() < 1e-6);
        assert!(positional_encoding(4, 7).is_err());
    }

    #[test]
    fn causal_mask_layout() {
        let m = AttentionMask::causal(3);
        assert!(m.get(0, 0, 0) && !m.get(0, 0, 1) && m.get(0, 2, 1));
        assert!(m.validate().is_ok());
        let bad = AttentionMask::key_padding(2, 3, &[0]);
        assert!(bad.validate().is_err());
    }

    #[test]
    fn attention_single_key_returns_value() {
        let mut r = rng(1);
        let mut tape = Tape::new();
        let q = tape.leaf(&random(&[3, 4], &mut r));
        let k = tape.leaf(&random(&[1, 4], &mut r));
        let v = tape.leaf(&Tensor::new(vec![1, 2], vec![0.3, -0.7]).unwrap());
        let out = scaled_dot_attention(&mut tape, q, k, v, &AttentionMask::full(3, 1)).unwrap();
        for row in tape.value(out).chunks(2) {
            assert!((row[0] - 0.3).abs() < 1e-6 && (row[1] + 0.7).abs() < 1e-6);
        }
    }

    #[test]
    fn attention_identical_keys_average_values() {
        let mut r = rng(2);
        let mut tape = Tape::new();
        let q = tape.leaf(&random(&[2, 4], &mut r));
        let key = random(&[1, 4], &mut r).into_data();
        let k = tape.leaf(&Tensor::new(vec![3, 4], key.repeat(3)).unwrap());
        let vt = random(&[3, 2], &mut r);
        let mean0 = (vt.data()[0] + vt.data()[2] + vt.data()[4]) / 3.0;
        let v = tape.leaf(&vt);
        let out = scaled_dot_attention(&mut tape, q, k, v, &AttentionMask::full(2, 3)).unwrap();
        assert!((tape.value(out)[0] - mean0).abs() < 1e-6);
    }

    #[test]
    fn causal_attention_row0_ignores_later_values() {
        let mut r = rng(3);
        let qt = random(&[3, 4], &mut r);
        let kt = random(&[3, 4], &mut r);
        let vt = random(&[3, 4], &mut r);
        let run = |v: &Tensor| {
            let mut tape = Tape::new();
            let (q, k, v) = (tape.leaf(&qt), tape.leaf(&kt), tape.leaf(v));
            let o = scaled_dot_attention(&mut tape, q, k, v, &AttentionMask::causal(3)).unwrap();
            tape.value(o).to_vec()
        };
        let base = run(&vt);
        let mut pert = vt.clone();
        pert.data_mut()[8..12].iter_mut().for_each(|x| *x += 5.0);
        let moved = run(&pert);
        assert_eq!(&base[..4], &moved[..4]);
        assert_ne!(&base[8..], &moved[8..]);
    }

    #[test]
    fn attention_rows_sum_to_one() {
        let mut r = rng(4);
        let mut tape = Tape::new();
        let q = tape.leaf(&random(&[2, 4, 3], &mut r));
        let k = tape.leaf(&random(&[2, 5, 3], &mut r));
        let mask = AttentionMask::key_padding(4, 5, &[2, 5]);
        let w = attention_weights(&mut tape, q, k, &mask, 1).unwrap();
        for (i, row) in tape.value(w).chunks(5).enumerate() {
            assert!((row.iter().sum::<f32>() - 1.0).abs() < 1e-6);
            if i < 4 {
                assert_eq!(&row[2..], &[0.0, 0.0, 0.0]);
            }
        }
    }

    #[test]
    fn single_head_mha_reduces_to_attention_on_projections() {
        let mut r = rng(5);
        let mut store = ParamStore::new();
        let mha = MultiHeadAttention::new(&mut store, "a", 4, 1, 4, &mut r);
        // identity output projection
        let wo = store.get_mut(mha.wo.w).data_mut();
        wo.fill(0.0);
        for i in 0..4 {
            wo[i * 4 + i] = 1.0;
        }
        let x = random(&[1, 3, 4], &mut r);
        let mut s = Session::new(&store);
        let xv = s.leaf(&x);
        let full = mha.forward(&mut s, xv, xv, &AttentionMask::causal(3)).unwrap();
        let q = mha.wq.forward(&mut s, xv).unwrap();
        let k = mha.wk.forward(&mut s, xv).unwrap();
        let v = mha.wv.forward(&mut s, xv).unwrap();
        let direct = scaled_dot_attention(&mut s, q, k, v, &AttentionMask::causal(3)).unwrap();
        for (a, b) in s.value(full).iter().zip(s.value(direct)) {
            assert!((a - b).abs() < 1e-5);
        }
        assert_eq!(s.shape(full), &[1, 3, 4]);
    }

    #[test]
    fn mha_decoupled_head_width_shape() {
        let mut r = rng(6);
        let mut store = ParamStore::new();
        let mha = MultiHeadAttention::new(&mut store, "a", 32, 4, 64, &mut r);
        assert_eq!(store.get(mha.wq.w).shape(), &[32, 256]);
        let x = random(&[2, 5, 32], &mut r);
        let mut s = Session::new(&store);
        let xv = s.leaf(&x);
        let y = mha.forward(&mut s, xv, xv, &AttentionMask::full(5, 5)).unwrap();
        assert_eq!(s.shape(y), &[2, 5, 32]);
    }

    /// Finite-difference check over every parameter of `store` for a scalar
    /// loss built by `f`.
    /// Worst relative error between session gradients and central
    /// differences over every parameter of `store`.
    fn check_params(store: &ParamStore, f: impl Fn(&mut Session) -> Result<Var>) -> f64 {
        let mut s = Session::new(store);
        let out = f(&mut s).unwrap();
        let analytic = s.backward(out).unwrap();
        let mut worst = 0.0f64;
        let mut probe = store.clone();
        for id in store.ids() {
            for j in 0..store.get(id).numel() {
                let orig = store.get(id).data()[j];
                let mut eval = |delta: f32| {
                    probe.get_mut(id).data_mut()[j] = orig + delta;
                    let mut s = Session::new(&probe);
                    let out = f(&mut s).unwrap();
                    s.value(out)[0] as f64
                };
                let num = (eval(1e-3) - eval(-1e-3)) / 2e-3;
                probe.get_mut(id).data_mut()[j] = orig;
                let a = analytic.get(id).unwrap()[j] as f64;
                worst = worst.max((a - num).abs() / 1f64.max(a.abs()).max(num.abs()));
            }
        }
        worst
    }

    fn weighted_sum(s: &mut Session, y: Var, seed: u64) -> Result<Var> {
        let mut r = rng(seed);
        let n = s.value(y).len();
        let w = (0..n).map(|_| r.random_range(-1.0..1.0)).collect();
        let p = s.mul_const(y, w)?;
        s.sum(p)
    }

    #[test]
    fn mha_gradient_check() {
        let mut r = rng(7);
        let mut store = ParamStore::new();
        let mha = MultiHeadAttention::new(&mut store, "a", 8, 2, 4, &mut r);
        let x = random(&[1, 5, 8], &mut r);
        let err = check_params(&store, |s| {
            let xv = s.leaf(&x);
            let y = mha.forward(s, xv, xv, &AttentionMask::causal(5))?;
            weighted_sum(s, y, 1)
        });
        assert!(err <= 1e-3, "{err}");
    }

    #[test]
    fn encoder_and_decoder_gradient_check() {
        let dims = small_dims();
        let mut r = rng(8);
        let mut store = ParamStore::new();
        let enc = EncoderLayer::new(&mut store, "enc", &dims, &mut r);
        let dec = DecoderLayer::new(&mut store, "dec", &dims, &mut r);
        let src = random(&[1, 4, 8], &mut r);
        let tgt = random(&[1, 3, 8], &mut r);
        let err = check_params(&store, |s| {
            let (sv, tv) = (s.leaf(&src), s.leaf(&tgt));
            let mem = enc.forward(s, sv, &AttentionMask::full(4, 4))?;
            let y = dec.forward(s, tv, mem, &AttentionMask::causal(3), &AttentionMask::full(3, 4))?;
            weighted_sum(s, y, 2)
        });
        assert!(err <= 1e-3, "{err}");
    }

    #[test]
    fn lstm_three_step_gradient_check() {
        let mut r = rng(9);
        let mut store = ParamStore::new();
        let cell = LstmCell::new(&mut store, "lstm", 3, 4, &mut r);
        let xs: Vec<Tensor> = (0..3).map(|_| random(&[2, 3], &mut r)).collect();
        let err = check_params(&store, |s| {
            let mut st = cell.zero_state(s, 2)?;
            for x in &xs {
                let xv = s.leaf(x);
                st = cell.step(s, xv, st)?;
            }
            let hc = s.add(st.0, st.1)?;
            weighted_sum(s, hc, 3)
        });
        assert!(err <= 1e-3, "{err}");
    }

    #[test]
    fn lstm_zero_weights_zero_state() {
        let mut r = rng(10);
        let mut store = ParamStore::new();
        let cell = LstmCell::new(&mut store, "l", 3, 4, &mut r);
        for id in [cell.w_ih, cell.w_hh, cell.bias] {
            store.get_mut(id).data_mut().fill(0.0);
        }
        let mut s = Session::new(&store);
        let x = s.leaf(&random(&[1, 3], &mut r));
        let st = cell.zero_state(&mut s, 1).unwrap();
        let (h, c) = cell.step(&mut s, x, st).unwrap();
        assert!(s.value(h).iter().all(|&v| v == 0.0));
        assert!(s.value(c).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn lstm_saturated_gates_hold_memory() {
        let mut r = rng(11);
        let mut store = ParamStore::new();
        let cell = LstmCell::new(&mut store, "l", 3, 2, &mut r);
        {
            let b = store.get_mut(cell.bias).data_mut();
            b[..2].fill(-30.0); // input gate closed
            b[2..4].fill(30.0); // forget gate open
        }
        let mut s = Session::new(&store);
        let x = s.leaf(&random(&[1, 3], &mut r));
        let h = s.constant(&[1, 2], vec![0.1, -0.2]).unwrap();
        let c = s.constant(&[1, 2], vec![0.7, -0.4]).unwrap();
        let (_, c2) = cell.step(&mut s, x, (h, c)).unwrap();
        assert!((s.value(c2)[0] - 0.7).abs() < 1e-5);
        assert!((s.value(c2)[1] + 0.4).abs() < 1e-5);
    }

    #[test]
    fn zeroed_sublayers_leave_normalised_identity() {
        let dims = small_dims();
        let mut r = rng(12);
        let mut store = ParamStore::new();
        let enc = EncoderLayer::new(&mut store, "enc", &dims, &mut r);
        for id in [enc.attn.wo.w, enc.attn.wo.b, enc.ff.l2.w, enc.ff.l2.b] {
            store.get_mut(id).data_mut().fill(0.0);
        }
        let x = random(&[1, 4, 8], &mut r);
        let mut s = Session::new(&store);
        let xv = s.leaf(&x);
        let y = enc.forward(&mut s, xv, &AttentionMask::full(4, 4)).unwrap();
        for (row_in, row_out) in x.data().chunks(8).zip(s.value(y).chunks(8)) {
            let mean = row_in.iter().sum::<f32>() / 8.0;
            let var = row_in.iter().map(|v| (v - mean).powi(2)).sum::<f32>() / 8.0;
            for (a, b) in row_in.iter().zip(row_out) {
                let expected = (a - mean) / (var + LayerNorm::EPS).sqrt();
                assert!((expected - b).abs() < 1e-3, "{expected} vs {b}");
            }
        }
    }

    #[test]
    fn encoder_is_permutation_equivariant_without_positions() {
        let dims = small_dims();
        let mut r = rng(13);
        let mut store = ParamStore::new();
        let enc = EncoderLayer::new(&mut store, "enc", &dims, &mut r);
        let x = random(&[1, 4, 8], &mut r);
        let mut swapped = x.clone();
        {
            let d = swapped.data_mut();
            let (a, b) = d.split_at_mut(16);
            a[8..16].swap_with_slice(&mut b[8..16]); // swap positions 1 and 3
        }
        let run = |t: &Tensor| {
            let mut s = Session::new(&store);
            let v = s.leaf(t);
            let y = enc.forward(&mut s, v, &AttentionMask::full(4, 4)).unwrap();
            s.value(y).to_vec()
        };
        let (y, ys) = (run(&x), run(&swapped));
        for (p, q) in [(0, 0), (1, 3), (2, 2), (3, 1)] {
            for j in 0..8 {
                assert!((y[p * 8 + j] - ys[q * 8 + j]).abs() < 1e-5);
            }
        }
    }

    #[test]
    fn encoder_sees_future_decoder_does_not() {
        let dims = small_dims();
        let mut r = rng(14);
        let mut store = ParamStore::new();
        let enc = EncoderLayer::new(&mut store, "enc", &dims, &mut r);
        let dec = DecoderLayer::new(&mut store, "dec", &dims, &mut r);
        let x = random(&[1, 4, 8], &mut r);
        let mem = random(&[1, 3, 8], &mut r);
        let mut pert = x.clone();
        pert.data_mut()[24..].iter_mut().for_each(|v| *v += 1.0); // position 3
        let enc_run = |t: &Tensor| {
            let mut s = Session::new(&store);
            let v = s.leaf(t);
            let y = enc.forward(&mut s, v, &AttentionMask::full(4, 4)).unwrap();
            s.value(y).to_vec()
        };
        let dec_run = |t: &Tensor, m: &Tensor| {
            let mut s = Session::new(&store);
            let (v, mv) = (s.leaf(t), s.leaf(m));
            let y = dec
                .forward(&mut s, v, mv, &AttentionMask::causal(4), &AttentionMask::full(4, 3))
                .unwrap();
            s.value(y).to_vec()
        };
        assert!((0..24).any(|i| (enc_run(&x)[i] - enc_run(&pert)[i]).abs() > 1e-6));
        let (a, b) = (dec_run(&x, &mem), dec_run(&pert, &mem));
        for i in 0..24 {
            assert!((a[i] - b[i]).abs() <= 1e-6);
        }
        let mut mem2 = mem.clone();
        mem2.data_mut()[16..].iter_mut().for_each(|v| *v -= 1.0);
        let c = dec_run(&x, &mem2);
        assert!((0..8).any(|i| (a[i] - c[i]).abs() > 1e-6));
    }
}
