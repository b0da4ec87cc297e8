//! Episode-set encoder: byte CNN text features, day-of-week and sub-forum
//! embeddings, a position-free self-attention block and mean pooling.

mod tokenize;

pub use tokenize::{fit_tokens, special_id, tokenize_bytes, PAD_ID, SPECIAL_BASE, VOCAB_SIZE};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{Episode, EpisodeSet};
use crate::tensor::{Mode, Tape, Tensor, TensorError, Var};

pub const DAYS_PER_WEEK: usize = 7;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EncoderError {
    #[error("invalid encoder dimensions: {0}")]
    InvalidDims(String),
    #[error("day of week {0} outside [0, 6]")]
    DayOutOfRange(u8),
    #[error("context id {id} outside table of {bound} rows")]
    ContextOutOfRange { id: usize, bound: usize },
    #[error("token id {0} outside the vocabulary")]
    TokenOutOfRange(u32),
    #[error("episode sets must be non-empty and share one length")]
    RaggedBatch,
    #[error("parameter list does not match the encoder layout")]
    Layout,
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

pub type Result<T> = std::result::Result<T, EncoderError>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncoderDims {
    pub d_t: usize,
    pub f_n: usize,
    pub widths: Vec<usize>,
    pub d_txt: usize,
    pub d_time: usize,
    pub d_ctx: usize,
    /// Output embedding size `E`.
    pub embed: usize,
    pub max_len: usize,
    pub heads: usize,
    pub layers: usize,
    pub d_ff: usize,
    pub dropout: f64,
}

impl Default for EncoderDims {
    fn default() -> Self {
        Self {
            d_t: 32,
            f_n: 16,
            widths: vec![2, 3, 4, 5],
            d_txt: 64,
            d_time: 8,
            d_ctx: 32,
            embed: 64,
            max_len: 256,
            heads: 2,
            layers: 1,
            d_ff: 104,
            dropout: 0.5,
        }
    }
}

impl EncoderDims {
    /// Width of one episode vector.
    pub fn d_e(&self) -> usize {
        self.d_txt + self.d_time + self.d_ctx
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(EncoderError::InvalidDims(m));
        if [self.d_t, self.f_n, self.d_txt, self.d_time, self.d_ctx, self.embed, self.heads, self.d_ff]
            .contains(&0)
        {
            return bad("all sizes must be positive".into());
        }
        if self.widths.is_empty() || self.widths.contains(&0) {
            return bad("filter widths must be non-empty and positive".into());
        }
        let widest = *self.widths.iter().max().expect("non-empty");
        if self.max_len < widest {
            return bad(format!("max_len {} below widest filter {widest}", self.max_len));
        }
        if self.d_e() % self.heads != 0 {
            return bad(format!("d_e {} not divisible by {} heads", self.d_e(), self.heads));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad(format!("dropout {} outside [0, 1)", self.dropout));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransformerBlock {
    pub wq: Tensor,
    pub wk: Tensor,
    pub wv: Tensor,
    pub wo: Tensor,
    pub w1: Tensor,
    pub b1: Tensor,
    pub w2: Tensor,
    pub b2: Tensor,
}

/// Parameters shared by every market: everything except the context table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncoderParams {
    pub dims: EncoderDims,
    pub e_txt: Tensor,
    pub filters: Vec<Tensor>,
    pub filter_bias: Vec<Tensor>,
    pub w_txt: Tensor,
    pub b_txt: Tensor,
    pub e_time: Tensor,
    pub blocks: Vec<TransformerBlock>,
    pub w_out: Tensor,
    pub b_out: Tensor,
}

/// Sub-forum embedding table `E_ctx`, owned by one market.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContextTable {
    pub table: Tensor,
}

impl ContextTable {
    pub fn random<R: Rng>(contexts: usize, d_ctx: usize, rng: &mut R) -> Self {
        Self {
            table: Tensor::xavier(contexts.max(1), d_ctx, rng),
        }
    }

    /// Table initialized from precomputed rows, e.g. graph embeddings.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        Ok(Self {
            table: Tensor::from_rows(rows)?,
        })
    }

    pub fn contexts(&self) -> usize {
        self.table.rows()
    }
}

impl EncoderParams {
    pub fn random<R: Rng>(dims: EncoderDims, rng: &mut R) -> Result<Self> {
        dims.validate()?;
        let d_e = dims.d_e();
        let filters = dims.widths.iter().map(|&w| Tensor::xavier(w * dims.d_t, dims.f_n, rng)).collect();
        let filter_bias = dims.widths.iter().map(|_| Tensor::zeros(&[1, dims.f_n])).collect();
        let blocks = (0..dims.layers)
            .map(|_| TransformerBlock {
                wq: Tensor::xavier(d_e, d_e, rng),
                wk: Tensor::xavier(d_e, d_e, rng),
                wv: Tensor::xavier(d_e, d_e, rng),
                wo: Tensor::xavier(d_e, d_e, rng),
                w1: Tensor::xavier(d_e, dims.d_ff, rng),
                b1: Tensor::zeros(&[1, dims.d_ff]),
                w2: Tensor::xavier(dims.d_ff, d_e, rng),
                b2: Tensor::zeros(&[1, d_e]),
            })
            .collect();
        Ok(Self {
            e_txt: Tensor::xavier(VOCAB_SIZE, dims.d_t, rng),
            filters,
            filter_bias,
            w_txt: Tensor::xavier(dims.widths.len() * dims.f_n, dims.d_txt, rng),
            b_txt: Tensor::zeros(&[1, dims.d_txt]),
            e_time: Tensor::xavier(DAYS_PER_WEEK, dims.d_time, rng),
            blocks,
            w_out: Tensor::xavier(d_e, dims.embed, rng),
            b_out: Tensor::zeros(&[1, dims.embed]),
            dims,
        })
    }

    /// Every parameter tensor in a fixed order.
    pub fn tensors(&self) -> Vec<&Tensor> {
        let mut v = vec![&self.e_txt];
        for (f, b) in self.filters.iter().zip(&self.filter_bias) {
            v.extend([f, b]);
        }
        v.extend([&self.w_txt, &self.b_txt, &self.e_time]);
        for b in &self.blocks {
            v.extend([&b.wq, &b.wk, &b.wv, &b.wo, &b.w1, &b.b1, &b.w2, &b.b2]);
        }
        v.extend([&self.w_out, &self.b_out]);
        v
    }

    /// Same order as [`EncoderParams::tensors`].
    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut v = vec![&mut self.e_txt];
        for (f, b) in self.filters.iter_mut().zip(self.filter_bias.iter_mut()) {
            v.push(f);
            v.push(b);
        }
        v.extend([&mut self.w_txt, &mut self.b_txt, &mut self.e_time]);
        for b in &mut self.blocks {
            v.extend([
                &mut b.wq, &mut b.wk, &mut b.wv, &mut b.wo, &mut b.w1, &mut b.b1, &mut b.w2, &mut b.b2,
            ]);
        }
        v.extend([&mut self.w_out, &mut self.b_out]);
        v
    }

    /// Registers every tensor as a trainable leaf.
    pub fn register(&self, t: &mut Tape) -> EncoderVars {
        let flat: Vec<Var> = self.tensors().into_iter().map(|x| t.param(x.clone())).collect();
        EncoderVars::from_flat(&self.dims, &flat).expect("layout matches own dims")
    }

    /// Registers every tensor as a constant (no gradients).
    pub fn register_frozen(&self, t: &mut Tape) -> EncoderVars {
        let flat: Vec<Var> = self.tensors().into_iter().map(|x| t.constant(x.clone())).collect();
        EncoderVars::from_flat(&self.dims, &flat).expect("layout matches own dims")
    }

    /// Text features of one token sequence (eval mode, no dropout).
    pub fn encode_text(&self, tokens: &[u32]) -> Result<Vec<f64>> {
        let mut t = Tape::new();
        let vars = self.register_frozen(&mut t);
        let tokens = fit_tokens(tokens, self.dims.max_len);
        let out = text_features(&mut t, &vars, &self.dims, &[tokens.as_slice()], Mode::Eval, &mut ChaCha8Rng::seed_from_u64(0))?;
        Ok(t.value(out).data().to_vec())
    }

    pub fn embed_time(&self, day_of_week: u8) -> Result<Vec<f64>> {
        if day_of_week as usize >= DAYS_PER_WEEK {
            return Err(EncoderError::DayOutOfRange(day_of_week));
        }
        Ok(self.e_time.row(day_of_week as usize).to_vec())
    }

    /// Embedding `z` of one episode set (eval mode).
    pub fn encode_episode_set(&self, ctx: &ContextTable, set: &EpisodeSet) -> Result<Vec<f64>> {
        Ok(self.embed_sets(ctx, &[set])?.into_data())
    }

    /// Embeddings of many sets, one row each, computed in parallel chunks.
    pub fn embed_sets(&self, ctx: &ContextTable, sets: &[&EpisodeSet]) -> Result<Tensor> {
        const CHUNK: usize = 32;
        let parts: Vec<Vec<f64>> = sets
            .par_chunks(CHUNK)
            .map(|chunk| {
                let mut t = Tape::new();
                let vars = self.register_frozen(&mut t);
                let c = t.constant(ctx.table.clone());
                let z = encode_batch(&mut t, &vars, &self.dims, c, chunk, Mode::Eval, &mut ChaCha8Rng::seed_from_u64(0))?;
                Ok(t.value(z).data().to_vec())
            })
            .collect::<Result<_>>()?;
        Ok(Tensor::matrix(sets.len(), self.dims.embed, parts.concat())?)
    }
}

pub fn embed_context(ctx: &ContextTable, context_id: usize) -> Result<Vec<f64>> {
    if context_id >= ctx.contexts() {
        return Err(EncoderError::ContextOutOfRange {
            id: context_id,
            bound: ctx.contexts(),
        });
    }
    Ok(ctx.table.row(context_id).to_vec())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BlockVars {
    pub wq: Var,
    pub wk: Var,
    pub wv: Var,
    pub wo: Var,
    pub w1: Var,
    pub b1: Var,
    pub w2: Var,
    pub b2: Var,
}

/// Tape handles for [`EncoderParams`], in the same order as its tensors.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EncoderVars {
    pub e_txt: Var,
    pub filters: Vec<(Var, Var)>,
    pub w_txt: Var,
    pub b_txt: Var,
    pub e_time: Var,
    pub blocks: Vec<BlockVars>,
    pub w_out: Var,
    pub b_out: Var,
}

impl EncoderVars {
    pub fn from_flat(dims: &EncoderDims, flat: &[Var]) -> Result<Self> {
        let expected = 1 + 2 * dims.widths.len() + 3 + 8 * dims.layers + 2;
        if flat.len() != expected {
            return Err(EncoderError::Layout);
        }
        let mut it = flat.iter().copied();
        let mut next = || it.next().expect("length checked");
        let e_txt = next();
        let filters = dims.widths.iter().map(|_| (next(), next())).collect();
        let (w_txt, b_txt, e_time) = (next(), next(), next());
        let blocks = (0..dims.layers)
            .map(|_| BlockVars {
                wq: next(),
                wk: next(),
                wv: next(),
                wo: next(),
                w1: next(),
                b1: next(),
                w2: next(),
                b2: next(),
            })
            .collect();
        Ok(Self {
            e_txt,
            filters,
            w_txt,
            b_txt,
            e_time,
            blocks,
            w_out: next(),
            b_out: next(),
        })
    }

    pub fn flat(&self) -> Vec<Var> {
        let mut v = vec![self.e_txt];
        for &(f, b) in &self.filters {
            v.extend([f, b]);
        }
        v.extend([self.w_txt, self.b_txt, self.e_time]);
        for b in &self.blocks {
            v.extend([b.wq, b.wk, b.wv, b.wo, b.w1, b.b1, b.w2, b.b2]);
        }
        v.extend([self.w_out, self.b_out]);
        v
    }
}

/// `P × d_txt` text features for `P` equal-length token sequences.
pub fn text_features<R: Rng>(
    t: &mut Tape,
    vars: &EncoderVars,
    dims: &EncoderDims,
    posts: &[&[u32]],
    mode: Mode,
    rng: &mut R,
) -> Result<Var> {
    let len = dims.max_len;
    let mut ids = Vec::with_capacity(posts.len() * len);
    for p in posts {
        if p.len() != len {
            return Err(EncoderError::InvalidDims(format!("token sequence of length {} (want {len})", p.len())));
        }
        for &id in *p {
            if id as usize >= VOCAB_SIZE {
                return Err(EncoderError::TokenOutOfRange(id));
            }
            ids.push(id as usize);
        }
    }
    let x = t.embedding(vars.e_txt, &ids)?;
    let mut pooled = Vec::with_capacity(dims.widths.len());
    for (&w, &(filter, bias)) in dims.widths.iter().zip(&vars.filters) {
        let maps = t.sliding_window(x, filter, len, w)?;
        let maps = t.add_row(maps, bias)?;
        let maps = t.relu(maps)?;
        pooled.push(t.segment_max(maps, len - w + 1)?);
    }
    let features = t.concat_cols(&pooled)?;
    let features = t.dropout(features, dims.dropout, mode, rng)?;
    let projected = t.matmul(features, vars.w_txt)?;
    Ok(t.add_row(projected, vars.b_txt)?)
}

fn episode_rows(t: &mut Tape, vars: &EncoderVars, ctx: Var, episodes: &[&Episode]) -> Result<(Var, Var)> {
    let contexts = t.value(ctx).rows();
    let mut days = Vec::with_capacity(episodes.len());
    let mut ctx_ids = Vec::with_capacity(episodes.len());
    for e in episodes {
        if e.day_of_week as usize >= DAYS_PER_WEEK {
            return Err(EncoderError::DayOutOfRange(e.day_of_week));
        }
        if e.context_id >= contexts {
            return Err(EncoderError::ContextOutOfRange {
                id: e.context_id,
                bound: contexts,
            });
        }
        days.push(e.day_of_week as usize);
        ctx_ids.push(e.context_id);
    }
    Ok((t.embedding(vars.e_time, &days)?, t.embedding(ctx, &ctx_ids)?))
}

/// Self-attention plus feed-forward, each with a residual, applied to every
/// block of `l` rows independently. No positional information enters.
fn transformer_block(t: &mut Tape, b: &BlockVars, x: Var, l: usize, heads: usize) -> Result<Var> {
    let (rows, d_e) = t.value(x).dims2();
    let d_h = d_e / heads;
    let inv_sqrt = 1.0 / (d_h as f64).sqrt();
    let q = t.matmul(x, b.wq)?;
    let k = t.matmul(x, b.wk)?;
    let v = t.matmul(x, b.wv)?;
    let mut sets = Vec::with_capacity(rows / l);
    for s in 0..rows / l {
        let mut per_head = Vec::with_capacity(heads);
        for h in 0..heads {
            let qs = t.slice(q, s * l, l, h * d_h, d_h)?;
            let ks = t.slice(k, s * l, l, h * d_h, d_h)?;
            let vs = t.slice(v, s * l, l, h * d_h, d_h)?;
            let scores = t.matmul_bt(qs, ks)?;
            let scores = t.scale(scores, inv_sqrt)?;
            let attn = t.softmax_rows(scores)?;
            per_head.push(t.matmul(attn, vs)?);
        }
        sets.push(t.concat_cols(&per_head)?);
    }
    let attended = t.concat_rows(&sets)?;
    let attended = t.matmul(attended, b.wo)?;
    let y = t.add(x, attended)?;
    let hidden = t.matmul(y, b.w1)?;
    let hidden = t.add_row(hidden, b.b1)?;
    let hidden = t.relu(hidden)?;
    let ff = t.matmul(hidden, b.w2)?;
    let ff = t.add_row(ff, b.b2)?;
    Ok(t.add(y, ff)?)
}

/// `B × E` embeddings for `B` episode sets of a common length `L`.
pub fn encode_batch<R: Rng>(
    t: &mut Tape,
    vars: &EncoderVars,
    dims: &EncoderDims,
    ctx: Var,
    sets: &[&EpisodeSet],
    mode: Mode,
    rng: &mut R,
) -> Result<Var> {
    let l = sets.first().map_or(0, |s| s.episodes.len());
    if l == 0 || sets.iter().any(|s| s.episodes.len() != l) {
        return Err(EncoderError::RaggedBatch);
    }
    let episodes: Vec<&Episode> = sets.iter().flat_map(|s| s.episodes.iter()).collect();
    let fitted: Vec<Vec<u32>> = episodes
        .iter()
        .map(|e| {
            if e.tokens.len() == dims.max_len {
                e.tokens.clone()
            } else {
                fit_tokens(&e.tokens, dims.max_len)
            }
        })
        .collect();
    let posts: Vec<&[u32]> = fitted.iter().map(Vec::as_slice).collect();
    let text = text_features(t, vars, dims, &posts, mode, rng)?;
    let (time, context) = episode_rows(t, vars, ctx, &episodes)?;
    let mut x = t.concat_cols(&[text, time, context])?;
    for b in &vars.blocks {
        x = transformer_block(t, b, x, l, dims.heads)?;
    }
    let pooled = t.segment_mean(x, l)?;
    let z = t.matmul(pooled, vars.w_out)?;
    Ok(t.add_row(z, vars.b_out)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn toy_dims() -> EncoderDims {
        EncoderDims {
            d_t: 3,
            f_n: 2,
            widths: vec![2, 3],
            d_txt: 4,
            d_time: 2,
            d_ctx: 2,
            embed: 3,
            max_len: 6,
            heads: 2,
            layers: 1,
            d_ff: 4,
            dropout: 0.5,
        }
    }

    #[test]
    fn default_dims_add_up() {
        let d = EncoderDims::default();
        assert_eq!(d.d_e(), 104);
        d.validate().unwrap();
    }

    #[test]
    fn odd_head_split_is_rejected() {
        let d = EncoderDims {
            heads: 3,
            ..toy_dims()
        };
        assert!(matches!(d.validate(), Err(EncoderError::InvalidDims(_))));
    }

    #[test]
    fn flat_layout_round_trips() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let p = EncoderParams::random(toy_dims(), &mut rng).unwrap();
        let mut t = Tape::new();
        let vars = p.register(&mut t);
        assert_eq!(vars.flat().len(), p.tensors().len());
        assert_eq!(EncoderVars::from_flat(&p.dims, &vars.flat()).unwrap(), vars);
        assert!(EncoderVars::from_flat(&p.dims, &vars.flat()[1..]).is_err());
    }

    #[test]
    fn time_lookup_and_range() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let p = EncoderParams::random(toy_dims(), &mut rng).unwrap();
        assert_eq!(p.embed_time(0).unwrap(), p.e_time.row(0));
        assert_eq!(p.embed_time(3).unwrap(), p.embed_time(3).unwrap());
        assert_eq!(p.embed_time(7), Err(EncoderError::DayOutOfRange(7)));
    }

    #[test]
    fn context_lookup_and_range() {
        let ctx = ContextTable::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap();
        assert_eq!(embed_context(&ctx, 0).unwrap(), vec![1.0, 2.0]);
        assert!(matches!(embed_context(&ctx, 2), Err(EncoderError::ContextOutOfRange { .. })));
    }
}
