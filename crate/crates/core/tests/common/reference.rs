//! A plain single-source post-norm Transformer written directly against the
//! tape primitives, reading the same named tensors as the model.

use msgen::model::Parameters;
use msgen::{AttentionSpec, Tape, Tensor, Var};

pub struct Reference<'p> {
    pub params: &'p Parameters<f64>,
    pub heads: usize,
    pub eps: f64,
}

impl Reference<'_> {
    fn p(&self, tape: &mut Tape<f64>, name: &str) -> Var {
        tape.param(self.params.get(name).unwrap_or_else(|| panic!("missing {name}")).clone())
    }

    fn linear(&self, tape: &mut Tape<f64>, prefix: &str, x: Var) -> Var {
        let w = self.p(tape, &format!("{prefix}.w"));
        let b = self.p(tape, &format!("{prefix}.b"));
        let y = tape.matmul(x, w).unwrap();
        tape.add_bias(y, b).unwrap()
    }

    fn norm(&self, tape: &mut Tape<f64>, prefix: &str, x: Var) -> Var {
        let g = self.p(tape, &format!("{prefix}.gain"));
        let b = self.p(tape, &format!("{prefix}.bias"));
        tape.layer_norm(x, g, b, self.eps).unwrap()
    }

    fn attention(&self, tape: &mut Tape<f64>, prefix: &str, q_in: Var, kv: Var, allowed: Vec<bool>) -> Var {
        let q = self.linear(tape, &format!("{prefix}.q"), q_in);
        let k = self.linear(tape, &format!("{prefix}.k"), kv);
        let v = self.linear(tape, &format!("{prefix}.v"), kv);
        let q_len = tape.shape(q)[0];
        let k_len = tape.shape(k)[0];
        let spec = AttentionSpec { heads: self.heads, batch: 1, q_len, k_len, allowed };
        let c = tape.attention(q, k, v, spec).unwrap();
        self.linear(tape, &format!("{prefix}.o"), c)
    }

    fn ffn(&self, tape: &mut Tape<f64>, prefix: &str, x: Var) -> Var {
        let h = self.linear(tape, &format!("{prefix}.in"), x);
        let h = tape.gelu(h).unwrap();
        self.linear(tape, &format!("{prefix}.out"), h)
    }

    fn embed(&self, tape: &mut Tape<f64>, ids: &[u32]) -> Var {
        let tok = self.p(tape, "embed.tok");
        let pos = self.p(tape, "embed.pos");
        let x = tape.embedding(tok, ids).unwrap();
        let d = tape.shape(tok)[1] as f64;
        let x = tape.scale(x, d.sqrt()).unwrap();
        let positions: Vec<u32> = (0..ids.len() as u32).collect();
        let p = tape.embedding(pos, &positions).unwrap();
        tape.add(x, p).unwrap()
    }

    /// Standard encoder layer: self-attention and FFN, each with residual
    /// and post layer norm.
    pub fn encoder_layer(&self, tape: &mut Tape<f64>, prefix: &str, x: Var) -> Var {
        let n = tape.shape(x)[0];
        let a = self.attention(tape, &format!("{prefix}.self_attn"), x, x, vec![true; n * n]);
        let s = tape.add(x, a).unwrap();
        let h = self.norm(tape, &format!("{prefix}.self_norm"), s);
        let f = self.ffn(tape, &format!("{prefix}.ffn"), h);
        let s = tape.add(h, f).unwrap();
        self.norm(tape, &format!("{prefix}.ffn_norm"), s)
    }

    /// Standard decoder layer over one memory.
    pub fn decoder_layer(&self, tape: &mut Tape<f64>, prefix: &str, x: Var, memory: Var) -> Var {
        let t = tape.shape(x)[0];
        let m = tape.shape(memory)[0];
        let causal = (0..t).flat_map(|i| (0..t).map(move |j| j <= i)).collect();
        let a = self.attention(tape, &format!("{prefix}.self_attn"), x, x, causal);
        let s = tape.add(x, a).unwrap();
        let g = self.norm(tape, &format!("{prefix}.self_norm"), s);
        let c = self.attention(tape, &format!("{prefix}.cross_attn"), g, memory, vec![true; t * m]);
        let s = tape.add(g, c).unwrap();
        let h = self.norm(tape, &format!("{prefix}.cross_norm"), s);
        let f = self.ffn(tape, &format!("{prefix}.ffn"), h);
        let s = tape.add(h, f).unwrap();
        self.norm(tape, &format!("{prefix}.ffn_norm"), s)
    }

    /// Logits `[target.len() - 1, V]` of a single-source encoder-decoder.
    pub fn logits(&self, source: &[u32], target: &[u32], enc_layers: usize, dec_layers: usize) -> Tensor<f64> {
        let mut tape = Tape::new();
        let mut x = self.embed(&mut tape, source);
        for i in 0..enc_layers {
            x = self.encoder_layer(&mut tape, &format!("coarse.{i}"), x);
        }
        let mut y = self.embed(&mut tape, &target[..target.len() - 1]);
        for i in 0..dec_layers {
            y = self.decoder_layer(&mut tape, &format!("decoder.{i}"), y, x);
        }
        let tok = self.p(&mut tape, "embed.tok");
        let out = tape.matmul_bt(y, tok).unwrap();
        tape.value(out).clone()
    }
}
