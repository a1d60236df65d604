//! Finite-difference checks over small instances of every trainable block.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::gem::GemModel;
use crate::geometry::Extent2D;
use crate::knoll::{make_example, KnollModel, KnollModelConfig, LayoutSpec};
use crate::nn::gradcheck::{check, GradcheckReport};
use crate::nn::tape::Tape;
use crate::nn::transformer::{DecoderLayer, EncoderLayer};
use crate::nn::{LstmStack, LstmStackConfig, ParamStore, TransformerConfig};
use crate::perception::ObjectState;

fn random_vec(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()
}

/// Two-layer bidirectional stack, one masked step, random linear readout.
pub fn bilstm(seed: u64) -> GradcheckReport {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    let cfg = LstmStackConfig {
        input_size: 6,
        hidden_size: 4,
        num_layers: 2,
        bidirectional: true,
    };
    let lstm = LstmStack::new(&mut store, "lstm", cfg, &mut rng).expect("valid config");
    let mask = [true, true, false, true];
    let x = random_vec(&mut rng, mask.len() * 6);
    let w = random_vec(&mut rng, mask.len() * cfg.output_size());
    check("bilstm", &store, None, |s| {
        let (out, cache) = lstm.forward(s, &x, &mask).expect("shapes fixed");
        let loss = out.iter().zip(&w).map(|(a, b)| a * b).sum();
        let mut g = s.new_grads();
        lstm.backward(s, &cache, &w, &mut g).expect("cache from this forward");
        (loss, g)
    })
}

/// Graspability model end to end: stack, linear head, softmax cross-entropy.
pub fn linear_softmax_ce(seed: u64) -> GradcheckReport {
    let cfg = LstmStackConfig {
        input_size: 6,
        hidden_size: 3,
        num_layers: 2,
        bidirectional: true,
    };
    let model = GemModel::new(cfg, seed).expect("valid config");
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xCE);
    let states: Vec<ObjectState> = (0..4)
        .map(|_| ObjectState {
            x: rng.random_range(0.0..0.6),
            y: rng.random_range(-0.3..0.3),
            yaw: rng.random_range(0.0..3.0),
            width: rng.random_range(0.01..0.03),
            length: rng.random_range(0.03..0.06),
            confidence: rng.random_range(0.2..1.0),
        })
        .collect();
    let labels = [1, 0, 0, 1];
    check("linear_softmax_ce", &model.store, None, |s| {
        let g = model.sample_grad_with(s, &states, &labels).expect("valid sample");
        (g.loss_sum, g.grads)
    })
}

/// One encoder layer feeding one decoder layer, both causal.
pub fn attention(seed: u64) -> GradcheckReport {
    let cfg = TransformerConfig {
        d_model: 8,
        n_heads: 2,
        n_enc_layers: 1,
        n_dec_layers: 1,
        ffn_dim: 12,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    let enc = EncoderLayer::new(&mut store, "enc", &cfg, &mut rng).expect("valid config");
    let dec = DecoderLayer::new(&mut store, "dec", &cfg, &mut rng).expect("valid config");
    let t = 3;
    let mem = random_vec(&mut rng, t * 8);
    let x = random_vec(&mut rng, t * 8);
    let w = random_vec(&mut rng, t * 8);
    check("attention", &store, None, |s| {
        let mut tape = Tape::new(s);
        let m = tape.input(t, 8, mem.clone()).expect("shape");
        let m = enc.forward(&mut tape, m, true).expect("shape");
        let xi = tape.input(t, 8, x.clone()).expect("shape");
        let y = dec.forward(&mut tape, xi, m).expect("shape");
        let loss = tape.weighted_sum(y, w.clone()).expect("shape");
        let mut g = s.new_grads();
        tape.backward(loss, &mut g).expect("scalar loss");
        (tape.value(loss)[0], g)
    })
}

/// Planner head: teacher-forced mixture NLL through a small transformer.
pub fn gmm_nll(seed: u64) -> GradcheckReport {
    let cfg = KnollModelConfig {
        transformer: TransformerConfig {
            d_model: 8,
            n_heads: 2,
            n_enc_layers: 1,
            n_dec_layers: 1,
            ffn_dim: 12,
        },
        k: 2,
    };
    let model = KnollModel::new(cfg, LayoutSpec::default(), seed).expect("valid config");
    let extents: Vec<Extent2D> = [(0.05, 0.03), (0.04, 0.02), (0.03, 0.03)]
        .iter()
        .map(|&(a, b)| Extent2D::new(a, b).expect("positive"))
        .collect();
    let ex = make_example(&extents, &LayoutSpec::default(), seed).expect("fits");
    check("gmm_nll", &model.store, None, |s| {
        model.example_grad_with(s, &ex).expect("valid example")
    })
}

/// All four checks.
pub fn suite(seed: u64) -> Vec<GradcheckReport> {
    vec![bilstm(seed), linear_softmax_ce(seed), attention(seed), gmm_nll(seed)]
}
