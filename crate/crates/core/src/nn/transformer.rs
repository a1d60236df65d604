//! Pre-LN transformer encoder and decoder layers built on the tape.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::params::{ParamId, ParamStore};
use super::tape::{Tape, Var};
use super::NnError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TransformerConfig {
    pub d_model: usize,
    pub n_heads: usize,
    pub n_enc_layers: usize,
    pub n_dec_layers: usize,
    pub ffn_dim: usize,
}

impl Default for TransformerConfig {
    fn default() -> Self {
        Self {
            d_model: 64,
            n_heads: 4,
            n_enc_layers: 3,
            n_dec_layers: 3,
            ffn_dim: 128,
        }
    }
}

impl TransformerConfig {
    pub fn validate(&self) -> Result<(), NnError> {
        if self.d_model == 0 || self.n_heads == 0 || self.ffn_dim == 0 {
            return Err(NnError::Shape("transformer sizes must be positive".into()));
        }
        if self.d_model % self.n_heads != 0 {
            return Err(NnError::Shape(format!(
                "d_model {} not divisible by {} heads",
                self.d_model, self.n_heads
            )));
        }
        Ok(())
    }
}

/// Registers `[fan_in, fan_out]` weights and `[fan_out]` bias, both U(±1/√fan_in).
pub fn add_linear<R: Rng>(
    store: &mut ParamStore,
    name: &str,
    fan_in: usize,
    fan_out: usize,
    rng: &mut R,
) -> Result<(ParamId, ParamId), NnError> {
    let bound = 1.0 / (fan_in as f64).sqrt();
    let w = store.add_uniform(&format!("{name}.w"), &[fan_in, fan_out], bound, rng)?;
    let b = store.add_uniform(&format!("{name}.b"), &[fan_out], bound, rng)?;
    Ok((w, b))
}

fn bind_linear(store: &ParamStore, name: &str) -> Result<(ParamId, ParamId), NnError> {
    let get = |s: &str| {
        let n = format!("{name}.{s}");
        store.id(&n).ok_or(NnError::MissingParam(n))
    };
    Ok((get("w")?, get("b")?))
}

fn add_norm(store: &mut ParamStore, name: &str, d: usize) -> Result<(ParamId, ParamId), NnError> {
    let g = store.add(&format!("{name}.gamma"), &[d], vec![1.0; d])?;
    let b = store.add(&format!("{name}.beta"), &[d], vec![0.0; d])?;
    Ok((g, b))
}

fn bind_norm(store: &ParamStore, name: &str) -> Result<(ParamId, ParamId), NnError> {
    let get = |s: &str| {
        let n = format!("{name}.{s}");
        store.id(&n).ok_or(NnError::MissingParam(n))
    };
    Ok((get("gamma")?, get("beta")?))
}

fn lin(tape: &mut Tape, x: Var, p: (ParamId, ParamId)) -> Result<Var, NnError> {
    let (w, b) = (tape.param(p.0), tape.param(p.1));
    tape.linear(x, w, b)
}

fn norm(tape: &mut Tape, x: Var, p: (ParamId, ParamId)) -> Result<Var, NnError> {
    let (g, b) = (tape.param(p.0), tape.param(p.1));
    tape.layer_norm(x, g, b)
}

#[derive(Debug, Clone, Copy)]
pub struct Attention {
    q: (ParamId, ParamId),
    k: (ParamId, ParamId),
    v: (ParamId, ParamId),
    o: (ParamId, ParamId),
    heads: usize,
}

impl Attention {
    pub fn new<R: Rng>(store: &mut ParamStore, name: &str, d: usize, heads: usize, rng: &mut R) -> Result<Self, NnError> {
        Ok(Self {
            q: add_linear(store, &format!("{name}.q"), d, d, rng)?,
            k: add_linear(store, &format!("{name}.k"), d, d, rng)?,
            v: add_linear(store, &format!("{name}.v"), d, d, rng)?,
            o: add_linear(store, &format!("{name}.o"), d, d, rng)?,
            heads,
        })
    }

    pub fn bind(store: &ParamStore, name: &str, heads: usize) -> Result<Self, NnError> {
        Ok(Self {
            q: bind_linear(store, &format!("{name}.q"))?,
            k: bind_linear(store, &format!("{name}.k"))?,
            v: bind_linear(store, &format!("{name}.v"))?,
            o: bind_linear(store, &format!("{name}.o"))?,
            heads,
        })
    }

    /// Scaled dot-product attention of `query` rows over `memory` rows.
    /// With `causal`, query row `i` sees memory rows `0..=i` only.
    pub fn forward(&self, tape: &mut Tape, query: Var, memory: Var, causal: bool) -> Result<Var, NnError> {
        let d = tape.shape(query).1;
        if tape.shape(memory).1 != d || d % self.heads != 0 {
            return Err(NnError::Shape("attention width mismatch".into()));
        }
        let dh = d / self.heads;
        let q = lin(tape, query, self.q)?;
        let k = lin(tape, memory, self.k)?;
        let v = lin(tape, memory, self.v)?;
        let mut outs = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let qh = tape.slice_cols(q, h * dh, dh)?;
            let kh = tape.slice_cols(k, h * dh, dh)?;
            let vh = tape.slice_cols(v, h * dh, dh)?;
            let s = tape.matmul_bt(qh, kh)?;
            let s = tape.scale(s, 1.0 / (dh as f64).sqrt());
            let p = tape.softmax_rows(s, causal);
            outs.push(tape.matmul(p, vh)?);
        }
        let cat = tape.concat_cols(&outs)?;
        lin(tape, cat, self.o)
    }
}

#[derive(Debug, Clone, Copy)]
struct FeedForward {
    a: (ParamId, ParamId),
    b: (ParamId, ParamId),
}

impl FeedForward {
    fn new<R: Rng>(store: &mut ParamStore, name: &str, d: usize, ffn: usize, rng: &mut R) -> Result<Self, NnError> {
        Ok(Self {
            a: add_linear(store, &format!("{name}.ff1"), d, ffn, rng)?,
            b: add_linear(store, &format!("{name}.ff2"), ffn, d, rng)?,
        })
    }

    fn bind(store: &ParamStore, name: &str) -> Result<Self, NnError> {
        Ok(Self {
            a: bind_linear(store, &format!("{name}.ff1"))?,
            b: bind_linear(store, &format!("{name}.ff2"))?,
        })
    }

    fn forward(&self, tape: &mut Tape, x: Var) -> Result<Var, NnError> {
        let h = lin(tape, x, self.a)?;
        let h = tape.relu(h);
        lin(tape, h, self.b)
    }
}

#[derive(Debug, Clone, Copy)]
pub struct EncoderLayer {
    ln1: (ParamId, ParamId),
    attn: Attention,
    ln2: (ParamId, ParamId),
    ff: FeedForward,
}

impl EncoderLayer {
    pub fn new<R: Rng>(store: &mut ParamStore, name: &str, cfg: &TransformerConfig, rng: &mut R) -> Result<Self, NnError> {
        let d = cfg.d_model;
        Ok(Self {
            ln1: add_norm(store, &format!("{name}.ln1"), d)?,
            attn: Attention::new(store, &format!("{name}.attn"), d, cfg.n_heads, rng)?,
            ln2: add_norm(store, &format!("{name}.ln2"), d)?,
            ff: FeedForward::new(store, name, d, cfg.ffn_dim, rng)?,
        })
    }

    pub fn bind(store: &ParamStore, name: &str, cfg: &TransformerConfig) -> Result<Self, NnError> {
        Ok(Self {
            ln1: bind_norm(store, &format!("{name}.ln1"))?,
            attn: Attention::bind(store, &format!("{name}.attn"), cfg.n_heads)?,
            ln2: bind_norm(store, &format!("{name}.ln2"))?,
            ff: FeedForward::bind(store, name)?,
        })
    }

    pub fn forward(&self, tape: &mut Tape, x: Var, causal: bool) -> Result<Var, NnError> {
        let h = norm(tape, x, self.ln1)?;
        let a = self.attn.forward(tape, h, h, causal)?;
        let x = tape.add(x, a)?;
        let h = norm(tape, x, self.ln2)?;
        let f = self.ff.forward(tape, h)?;
        tape.add(x, f)
    }
}

#[derive(Debug, Clone, Copy)]
pub struct DecoderLayer {
    ln1: (ParamId, ParamId),
    self_attn: Attention,
    ln2: (ParamId, ParamId),
    cross_attn: Attention,
    ln3: (ParamId, ParamId),
    ff: FeedForward,
}

impl DecoderLayer {
    pub fn new<R: Rng>(store: &mut ParamStore, name: &str, cfg: &TransformerConfig, rng: &mut R) -> Result<Self, NnError> {
        let d = cfg.d_model;
        Ok(Self {
            ln1: add_norm(store, &format!("{name}.ln1"), d)?,
            self_attn: Attention::new(store, &format!("{name}.self"), d, cfg.n_heads, rng)?,
            ln2: add_norm(store, &format!("{name}.ln2"), d)?,
            cross_attn: Attention::new(store, &format!("{name}.cross"), d, cfg.n_heads, rng)?,
            ln3: add_norm(store, &format!("{name}.ln3"), d)?,
            ff: FeedForward::new(store, name, d, cfg.ffn_dim, rng)?,
        })
    }

    pub fn bind(store: &ParamStore, name: &str, cfg: &TransformerConfig) -> Result<Self, NnError> {
        Ok(Self {
            ln1: bind_norm(store, &format!("{name}.ln1"))?,
            self_attn: Attention::bind(store, &format!("{name}.self"), cfg.n_heads)?,
            ln2: bind_norm(store, &format!("{name}.ln2"))?,
            cross_attn: Attention::bind(store, &format!("{name}.cross"), cfg.n_heads)?,
            ln3: bind_norm(store, &format!("{name}.ln3"))?,
            ff: FeedForward::bind(store, name)?,
        })
    }

    /// Decoder rows attend causally to themselves and to memory rows `0..=t`.
    pub fn forward(&self, tape: &mut Tape, x: Var, memory: Var) -> Result<Var, NnError> {
        let h = norm(tape, x, self.ln1)?;
        let a = self.self_attn.forward(tape, h, h, true)?;
        let x = tape.add(x, a)?;
        let h = norm(tape, x, self.ln2)?;
        let c = self.cross_attn.forward(tape, h, memory, true)?;
        let x = tape.add(x, c)?;
        let h = norm(tape, x, self.ln3)?;
        let f = self.ff.forward(tape, h)?;
        tape.add(x, f)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rows(r: usize, c: usize, seed: u64) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..r * c).map(|_| rng.random_range(-1.0..1.0)).collect()
    }

    #[test]
    fn divisibility_checked() {
        let cfg = TransformerConfig {
            d_model: 10,
            n_heads: 4,
            ..Default::default()
        };
        assert!(cfg.validate().is_err());
        TransformerConfig::default().validate().unwrap();
    }

    #[test]
    fn single_position_attention_is_value_projection() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let attn = Attention::new(&mut store, "a", 8, 2, &mut rng).unwrap();
        let x = rows(1, 8, 4);
        let mut tape = Tape::new(&store);
        let xv = tape.input(1, 8, x.clone()).unwrap();
        let out = attn.forward(&mut tape, xv, xv, false).unwrap();
        let got = tape.value(out).to_vec();

        let mut t2 = Tape::new(&store);
        let xv = t2.input(1, 8, x).unwrap();
        let v = lin(&mut t2, xv, attn.v).unwrap();
        let want = lin(&mut t2, v, attn.o).unwrap();
        for (a, b) in got.iter().zip(t2.value(want)) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn decoder_ignores_future_rows() {
        let cfg = TransformerConfig {
            d_model: 8,
            n_heads: 2,
            n_enc_layers: 1,
            n_dec_layers: 1,
            ffn_dim: 16,
        };
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let enc = EncoderLayer::new(&mut store, "e", &cfg, &mut rng).unwrap();
        let dec = DecoderLayer::new(&mut store, "d", &cfg, &mut rng).unwrap();
        let run = |mem: Vec<f64>, x: Vec<f64>| {
            let mut tape = Tape::new(&store);
            let m = tape.input(4, 8, mem).unwrap();
            let m = enc.forward(&mut tape, m, true).unwrap();
            let x = tape.input(4, 8, x).unwrap();
            let y = dec.forward(&mut tape, x, m).unwrap();
            tape.value(y).to_vec()
        };
        let (mem, x) = (rows(4, 8, 6), rows(4, 8, 7));
        let base = run(mem.clone(), x.clone());
        let (mut mem2, mut x2) = (mem, x);
        for v in &mut mem2[24..] {
            *v += 3.0;
        }
        for v in &mut x2[24..] {
            *v -= 2.0;
        }
        let pert = run(mem2, x2);
        assert_eq!(&base[..24], &pert[..24]);
        assert_ne!(&base[24..], &pert[24..]);
    }
}
