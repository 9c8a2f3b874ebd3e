use std::collections::BTreeMap;

use rand_chacha::ChaCha8Rng;

use super::batch::{PaddedSeqs, SourceBatch, SourceLayout};
use super::config::ModelConfig;
use super::params::Parameters;
use super::segment_embedding;
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::special::PAD;
use crate::tape::{AttentionSpec, Gradients, Tape, Var};
use crate::tensor::{log_softmax, Tensor};

/// Encoder result: the final per-source representations `A_k` in split
/// layout plus the geometry needed to attend to them.
#[derive(Clone, Debug)]
pub struct Encoded {
    pub layout: SourceLayout,
    pub sources: Vec<Var>,
}

/// Intermediate values of one fine-encoder layer, exposed for inspection.
#[derive(Clone, Debug)]
pub struct FineLayerOutput {
    /// After within-source self-attention.
    pub b: Vec<Var>,
    /// `O_{\k}`: the other sources' `B`, concatenated per item. `None` when
    /// the cross-source sublayer is skipped.
    pub others: Vec<Option<Var>>,
    /// After cross-source attention (equal to `b` when skipped).
    pub c: Vec<Var>,
    pub out: Vec<Var>,
}

#[derive(Clone, Debug)]
pub struct ForwardOutput {
    /// Mean token negative log-likelihood.
    pub loss: Var,
    /// `[batch * (target width - 1), V]`
    pub logits: Var,
    /// Label per logits row (pad where ignored).
    pub labels: Vec<u32>,
    pub batch: usize,
}

/// Partitions the concatenated `[batch * total, d]` representation into
/// per-source `[batch * widths[k], d]` blocks.
pub fn split_sources<T: Scalar>(tape: &mut Tape<T>, r: Var, batch: usize, widths: &[usize]) -> Result<Vec<Var>> {
    let total: usize = widths.iter().sum();
    let rows = tape.shape(r)[0];
    if total * batch != rows {
        return Err(Error::Boundary { sum: total * batch, rows });
    }
    if widths.len() == 1 {
        return Ok(vec![r]);
    }
    let mut out = Vec::with_capacity(widths.len());
    let mut off = 0;
    for &w in widths {
        let idx: Vec<usize> = (0..batch).flat_map(|b| (0..w).map(move |i| b * total + off + i)).collect();
        out.push(tape.gather_rows(r, &idx)?);
        off += w;
    }
    Ok(out)
}

/// One forward computation recorded on its own tape, with the parameters
/// bound as leaves.
pub struct Net<'c, T> {
    cfg: &'c ModelConfig,
    pub tape: Tape<T>,
    vars: BTreeMap<String, Var>,
    rng: Option<ChaCha8Rng>,
}

impl<'c, T: Scalar> Net<'c, T> {
    /// Binds every parameter as trainable.
    pub fn new(cfg: &'c ModelConfig, params: &Parameters<T>) -> Result<Self> {
        Self::with_trainable(cfg, params, Tape::new(), |_| true)
    }

    /// Binds parameters onto `tape`; those rejected by `trainable` become
    /// constants and receive no gradient.
    pub fn with_trainable(
        cfg: &'c ModelConfig,
        params: &Parameters<T>,
        mut tape: Tape<T>,
        trainable: impl Fn(&str) -> bool,
    ) -> Result<Self> {
        cfg.check_shapes()?;
        let mut vars = BTreeMap::new();
        for (name, t) in params.iter() {
            let v = if trainable(name) { tape.param(t.clone()) } else { tape.constant(t.clone()) };
            vars.insert(name.clone(), v);
        }
        Ok(Net { cfg, tape, vars, rng: None })
    }

    /// Enables dropout at `cfg.dropout`, drawing masks from `rng`.
    pub fn with_dropout(mut self, rng: ChaCha8Rng) -> Self {
        self.rng = Some(rng);
        self
    }

    pub fn config(&self) -> &ModelConfig {
        self.cfg
    }

    pub fn var(&self, name: &str) -> Result<Var> {
        self.vars.get(name).copied().ok_or_else(|| Error::NameSetMismatch { missing: name.to_string() })
    }

    pub fn vars(&self) -> &BTreeMap<String, Var> {
        &self.vars
    }

    /// Parameter gradients keyed by name; parameters that got no gradient
    /// are omitted.
    pub fn named_gradients(&self, grads: &Gradients<T>) -> BTreeMap<String, Tensor<T>> {
        self.vars.iter().filter_map(|(n, &v)| grads.get(v).map(|g| (n.clone(), g.clone()))).collect()
    }

    fn dropout(&mut self, x: Var) -> Result<Var> {
        match self.rng.as_mut() {
            Some(rng) if self.cfg.dropout > 0.0 => self.tape.dropout(x, self.cfg.dropout, rng),
            _ => Ok(x),
        }
    }

    fn eps(&self) -> T {
        T::lit(self.cfg.layer_norm_eps)
    }

    fn linear(&mut self, prefix: &str, x: Var) -> Result<Var> {
        let w = self.var(&format!("{prefix}.w"))?;
        let b = self.var(&format!("{prefix}.b"))?;
        let y = self.tape.matmul(x, w)?;
        self.tape.add_bias(y, b)
    }

    /// `LayerNorm(x + Dropout(sub))`
    fn residual_norm(&mut self, prefix: &str, x: Var, sub: Var) -> Result<Var> {
        let sub = self.dropout(sub)?;
        let s = self.tape.add(x, sub)?;
        let gain = self.var(&format!("{prefix}.gain"))?;
        let bias = self.var(&format!("{prefix}.bias"))?;
        let eps = self.eps();
        self.tape.layer_norm(s, gain, bias, eps)
    }

    fn ffn(&mut self, prefix: &str, x: Var) -> Result<Var> {
        let h = self.linear(&format!("{prefix}.in"), x)?;
        let h = self.tape.gelu(h)?;
        self.linear(&format!("{prefix}.out"), h)
    }

    /// Projected multi-head attention with parameters under `prefix`.
    /// `mask[(b * q_len + i) * k_len + j]` admits key `j` for query `i`.
    pub fn multi_head_attention(
        &mut self,
        prefix: &str,
        q_in: Var,
        kv_in: Var,
        batch: usize,
        mask: Vec<bool>,
    ) -> Result<Var> {
        let q = self.linear(&format!("{prefix}.q"), q_in)?;
        self.attend_projected(prefix, q, kv_in, batch, mask)
    }

    /// Attention given already projected queries (lets several key sets
    /// share one query projection).
    fn attend_projected(&mut self, prefix: &str, q: Var, kv_in: Var, batch: usize, mask: Vec<bool>) -> Result<Var> {
        let q_len = self.tape.shape(q)[0] / batch;
        let k_len = self.tape.shape(kv_in)[0] / batch;
        let k = self.linear(&format!("{prefix}.k"), kv_in)?;
        let v = self.linear(&format!("{prefix}.v"), kv_in)?;
        let spec = AttentionSpec { heads: self.cfg.heads, batch, q_len, k_len, allowed: mask };
        let ctx = self.tape.attention(q, k, v, spec)?;
        self.linear(&format!("{prefix}.o"), ctx)
    }

    /// `X_{k,i} = sqrt(d) E^tok[x_{k,i}] + E^pos[i] + E^seg[k]`, sources concatenated
    /// per item in order 1..K.
    pub fn input_representation(&mut self, batch: &SourceBatch) -> Result<Var> {
        let layout = batch.layout();
        for s in &batch.sources {
            if s.width() > self.cfg.max_len {
                return Err(Error::Length { len: s.width(), limit: self.cfg.max_len });
            }
        }
        let n = layout.batch * layout.total;
        let mut ids = Vec::with_capacity(n);
        let mut pos = Vec::with_capacity(n);
        for b in 0..layout.batch {
            for s in &batch.sources {
                ids.extend_from_slice(&s.ids()[b * s.width()..][..s.width()]);
                pos.extend(0..s.width() as u32);
            }
        }
        let tok = self.var("embed.tok")?;
        let pe = self.var("embed.pos")?;
        let x = self.embed_tokens(tok, &ids)?;
        let p = self.tape.embedding(pe, &pos)?;
        let mut x = self.tape.add(x, p)?;
        if self.cfg.use_segment_embedding {
            let d = self.cfg.d_model;
            let segs: Vec<Vec<T>> = (1..=layout.num_sources()).map(|k| segment_embedding(k, d)).collect();
            let mut data = Vec::with_capacity(n * d);
            for _ in 0..layout.batch {
                for (k, &w) in layout.widths.iter().enumerate() {
                    for _ in 0..w {
                        data.extend_from_slice(&segs[k]);
                    }
                }
            }
            let seg = self.tape.constant(Tensor::new(vec![n, d], data)?);
            x = self.tape.add(x, seg)?;
        }
        self.dropout(x)
    }

    /// `sqrt(d) * E^tok[ids]`; the unscaled table doubles as the output
    /// projection.
    fn embed_tokens(&mut self, tok: Var, ids: &[u32]) -> Result<Var> {
        let x = self.tape.embedding(tok, ids)?;
        self.tape.scale(x, T::from_usize(self.cfg.d_model).unwrap().sqrt())
    }

    fn encoder_layer(&mut self, prefix: &str, x: Var, batch: usize, mask: Vec<bool>) -> Result<Var> {
        let a = self.multi_head_attention(&format!("{prefix}.self_attn"), x, x, batch, mask)?;
        let h = self.residual_norm(&format!("{prefix}.self_norm"), x, a)?;
        let f = self.ffn(&format!("{prefix}.ffn"), h)?;
        self.residual_norm(&format!("{prefix}.ffn_norm"), h, f)
    }

    /// `N_c` encoder layers over the concatenated sources. Keys at pad
    /// positions are masked; without concatenated encoding each token only
    /// sees its own source.
    pub fn coarse_encode(&mut self, x: Var, layout: &SourceLayout) -> Result<Var> {
        let l = layout.total;
        let valid = layout.concat_valid();
        let src: Vec<usize> = (0..l).map(|j| layout.source_of(j)).collect();
        let mut mask = Vec::with_capacity(layout.batch * l * l);
        for b in 0..layout.batch {
            for i in 0..l {
                for j in 0..l {
                    mask.push(valid[b * l + j] && (self.cfg.concatenated_encoding || src[i] == src[j]));
                }
            }
        }
        let mut r = x;
        for i in 0..self.cfg.coarse_layers {
            r = self.encoder_layer(&format!("coarse.{i}"), r, layout.batch, mask.clone())?;
        }
        Ok(r)
    }

    fn key_mask(valid: &[bool], batch: usize, q_len: usize) -> Vec<bool> {
        let k_len = valid.len() / batch;
        let mut mask = Vec::with_capacity(batch * q_len * k_len);
        for b in 0..batch {
            for _ in 0..q_len {
                mask.extend_from_slice(&valid[b * k_len..][..k_len]);
            }
        }
        mask
    }

    /// Fine-encoder layer `index` over the split representations.
    pub fn fine_encoder_layer(&mut self, index: usize, a: &[Var], layout: &SourceLayout) -> Result<FineLayerOutput> {
        let prefix = format!("fine.{index}");
        let kk = a.len();
        let batch = layout.batch;
        let mut b = Vec::with_capacity(kk);
        for (k, &ak) in a.iter().enumerate() {
            let w = layout.widths[k];
            let mask = Self::key_mask(&layout.valid[k], batch, w);
            let s = self.multi_head_attention(&format!("{prefix}.self_attn"), ak, ak, batch, mask)?;
            b.push(self.residual_norm(&format!("{prefix}.self_norm"), ak, s)?);
        }
        let cross = self.cfg.fine_encoder_cross_attention && kk > 1;
        let mut others = vec![None; kk];
        let mut c = b.clone();
        if cross {
            let all = self.tape.concat_rows(&b)?;
            let mut base = Vec::with_capacity(kk);
            let mut acc = 0;
            for &w in &layout.widths {
                base.push(acc);
                acc += batch * w;
            }
            for k in 0..kk {
                let mut idx = Vec::new();
                let mut valid = Vec::new();
                for bi in 0..batch {
                    for j in (0..kk).filter(|&j| j != k) {
                        let w = layout.widths[j];
                        idx.extend((0..w).map(|i| base[j] + bi * w + i));
                        valid.extend_from_slice(&layout.valid[j][bi * w..][..w]);
                    }
                }
                let o = self.tape.gather_rows(all, &idx)?;
                let mask = Self::key_mask(&valid, batch, layout.widths[k]);
                let att = self.multi_head_attention(&format!("{prefix}.cross_attn"), b[k], o, batch, mask)?;
                c[k] = self.residual_norm(&format!("{prefix}.cross_norm"), b[k], att)?;
                others[k] = Some(o);
            }
        }
        let mut out = Vec::with_capacity(kk);
        for &ck in &c {
            let f = self.ffn(&format!("{prefix}.ffn"), ck)?;
            out.push(self.residual_norm(&format!("{prefix}.ffn_norm"), ck, f)?);
        }
        Ok(FineLayerOutput { b, others, c, out })
    }

    /// `N_f` fine-encoder layers; identity when the fine encoder is off.
    pub fn fine_encode(&mut self, r: &[Var], layout: &SourceLayout) -> Result<Vec<Var>> {
        let mut a = r.to_vec();
        for i in 0..self.cfg.effective_fine_layers() {
            a = self.fine_encoder_layer(i, &a, layout)?.out;
        }
        Ok(a)
    }

    /// Coarse encoding, split and fine encoding.
    pub fn encode(&mut self, batch: &SourceBatch) -> Result<Encoded> {
        if batch.num_sources() != self.cfg.sources {
            return Err(Error::Batch(format!(
                "model expects {} sources, batch has {}",
                self.cfg.sources,
                batch.num_sources()
            )));
        }
        let layout = batch.layout();
        let x = self.input_representation(batch)?;
        let r = self.coarse_encode(x, &layout)?;
        let split = split_sources(&mut self.tape, r, layout.batch, &layout.widths)?;
        let sources = self.fine_encode(&split, &layout)?;
        Ok(Encoded { layout, sources })
    }

    /// Re-batches encoder outputs: new item `n` is old item `map[n]`.
    pub fn expand(&mut self, enc: &Encoded, map: &[usize]) -> Result<Encoded> {
        let layout = enc.layout.select(map);
        let mut sources = Vec::with_capacity(enc.sources.len());
        for (&w, &s) in enc.layout.widths.iter().zip(&enc.sources) {
            let idx: Vec<usize> = map.iter().flat_map(|&b| (0..w).map(move |i| b * w + i)).collect();
            sources.push(self.tape.gather_rows(s, &idx)?);
        }
        Ok(Encoded { layout, sources })
    }

    /// Decoder layer `index`: causal self-attention, cross-attention to the
    /// sources, FFN. `tgt_valid` flags real tokens of the `[batch * t]` input.
    pub fn decoder_layer(&mut self, index: usize, g_in: Var, tgt_valid: &[bool], enc: &Encoded) -> Result<Var> {
        let prefix = format!("decoder.{index}");
        let batch = enc.layout.batch;
        let t = tgt_valid.len() / batch;
        let mut causal = Vec::with_capacity(batch * t * t);
        for b in 0..batch {
            for i in 0..t {
                causal.extend((0..t).map(|j| j <= i && tgt_valid[b * t + j]));
            }
        }
        let s = self.multi_head_attention(&format!("{prefix}.self_attn"), g_in, g_in, batch, causal)?;
        let g = self.residual_norm(&format!("{prefix}.self_norm"), g_in, s)?;
        let attn = format!("{prefix}.cross_attn");
        let h = if self.cfg.separated_decoder_cross_attention {
            let q = self.linear(&format!("{attn}.q"), g)?;
            let mut sum: Option<Var> = None;
            for (k, &ak) in enc.sources.iter().enumerate() {
                let mask = Self::key_mask(&enc.layout.valid[k], batch, t);
                let p = self.attend_projected(&attn, q, ak, batch, mask)?;
                sum = Some(match sum {
                    None => p,
                    Some(acc) => self.tape.add(acc, p)?,
                });
            }
            let sum = sum.ok_or_else(|| Error::Batch("no sources".into()))?;
            if enc.sources.len() == 1 {
                sum
            } else {
                self.tape.scale(sum, T::one() / T::from_usize(enc.sources.len()).unwrap())?
            }
        } else {
            let (all, valid) = self.concat_sources(enc)?;
            let mask = Self::key_mask(&valid, batch, t);
            self.multi_head_attention(&attn, g, all, batch, mask)?
        };
        let h = self.residual_norm(&format!("{prefix}.cross_norm"), g, h)?;
        let f = self.ffn(&format!("{prefix}.ffn"), h)?;
        self.residual_norm(&format!("{prefix}.ffn_norm"), h, f)
    }

    /// Per-item concatenation of the split source representations.
    fn concat_sources(&mut self, enc: &Encoded) -> Result<(Var, Vec<bool>)> {
        let layout = &enc.layout;
        if enc.sources.len() == 1 {
            return Ok((enc.sources[0], layout.valid[0].clone()));
        }
        let all = self.tape.concat_rows(&enc.sources)?;
        let mut base = Vec::new();
        let mut acc = 0;
        for &w in &layout.widths {
            base.push(acc);
            acc += layout.batch * w;
        }
        let mut idx = Vec::with_capacity(layout.batch * layout.total);
        for b in 0..layout.batch {
            for (k, &w) in layout.widths.iter().enumerate() {
                idx.extend((0..w).map(|i| base[k] + b * w + i));
            }
        }
        Ok((self.tape.gather_rows(all, &idx)?, layout.concat_valid()))
    }

    /// Decoder stack over `inputs` (already shifted), returning logits
    /// `[batch * width, V]` from the output projection tied to `embed.tok`.
    pub fn decode(&mut self, enc: &Encoded, inputs: &PaddedSeqs) -> Result<Var> {
        if inputs.batch() != enc.layout.batch {
            return Err(Error::Batch("target batch differs from source batch".into()));
        }
        if inputs.width() > self.cfg.max_len {
            return Err(Error::Length { len: inputs.width(), limit: self.cfg.max_len });
        }
        let pos: Vec<u32> = (0..inputs.batch()).flat_map(|_| 0..inputs.width() as u32).collect();
        let tok = self.var("embed.tok")?;
        let pe = self.var("embed.pos")?;
        let x = self.embed_tokens(tok, inputs.ids())?;
        let p = self.tape.embedding(pe, &pos)?;
        let x = self.tape.add(x, p)?;
        let mut g = self.dropout(x)?;
        let valid = inputs.valid();
        for i in 0..self.cfg.decoder_layers {
            g = self.decoder_layer(i, g, &valid, enc)?;
        }
        self.tape.matmul_bt(g, tok)
    }

    /// Teacher-forced pass over full targets (`bos … eos`) returning the
    /// mean token NLL.
    pub fn forward(&mut self, sources: &SourceBatch, targets: &PaddedSeqs) -> Result<ForwardOutput> {
        let (inputs, labels) = targets.decoder_io()?;
        let enc = self.encode(sources)?;
        let logits = self.decode(&enc, &inputs)?;
        let loss = self.tape.cross_entropy(logits, &labels, PAD)?;
        Ok(ForwardOutput { loss, logits, labels, batch: targets.batch() })
    }

    /// Log-probability of each label, per batch item.
    pub fn token_logprobs(&self, out: &ForwardOutput) -> Vec<Vec<f64>> {
        let logits = self.tape.value(out.logits);
        let v = logits.cols();
        let width = logits.rows() / out.batch;
        let mut res = vec![Vec::new(); out.batch];
        for (r, &label) in out.labels.iter().enumerate() {
            if label == PAD {
                continue;
            }
            let row = &logits.data()[r * v..][..v];
            res[r / width].push(log_softmax(row)[label as usize].as_f64());
        }
        res
    }
}
