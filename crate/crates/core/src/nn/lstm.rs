//! Stacked (bi)directional LSTM with backpropagation through time.
//!
//! Weights are stored input-major: `w_ih` has shape `[input, 4H]`, so row `j`
//! holds the gate weights fed by input feature `j`. Gate order is
//! input, forget, cell, output. Masked steps pass the recurrent state through
//! untouched and emit zeros.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::params::{Grads, ParamId, ParamStore};
use super::NnError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LstmStackConfig {
    pub input_size: usize,
    pub hidden_size: usize,
    pub num_layers: usize,
    pub bidirectional: bool,
}

impl Default for LstmStackConfig {
    fn default() -> Self {
        Self {
            input_size: 6,
            hidden_size: 32,
            num_layers: 8,
            bidirectional: true,
        }
    }
}

impl LstmStackConfig {
    pub fn directions(&self) -> usize {
        if self.bidirectional {
            2
        } else {
            1
        }
    }

    pub fn output_size(&self) -> usize {
        self.hidden_size * self.directions()
    }

    fn layer_input(&self, layer: usize) -> usize {
        if layer == 0 {
            self.input_size
        } else {
            self.output_size()
        }
    }
}

#[derive(Debug, Clone, Copy)]
struct Cell {
    w_ih: ParamId,
    w_hh: ParamId,
    bias: ParamId,
    input: usize,
}

#[derive(Debug, Clone)]
pub struct LstmStack {
    pub cfg: LstmStackConfig,
    cells: Vec<Vec<Cell>>,
}

#[derive(Debug, Clone, Default)]
struct StepCache {
    t: usize,
    x: Vec<f64>,
    h_prev: Vec<f64>,
    c_prev: Vec<f64>,
    /// Activated gates i, f, g, o.
    gates: Vec<f64>,
    tanh_c: Vec<f64>,
}

/// Activations kept from the forward pass.
#[derive(Debug, Clone)]
pub struct LstmCache {
    steps: usize,
    /// `[layer][direction]`, in processing order.
    layers: Vec<Vec<Vec<StepCache>>>,
}

#[inline]
fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

#[inline]
fn axpy(a: f64, x: &[f64], y: &mut [f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += a * xi;
    }
}

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    // four partial sums so the loop vectorises
    let mut acc = [0.0; 4];
    let chunks = a.len() / 4;
    for c in 0..chunks {
        for k in 0..4 {
            acc[k] += a[4 * c + k] * b[4 * c + k];
        }
    }
    let mut s = (acc[0] + acc[1]) + (acc[2] + acc[3]);
    for k in 4 * chunks..a.len() {
        s += a[k] * b[k];
    }
    s
}

impl LstmStack {
    /// Registers parameters under `prefix`. Uniform(±1/√H) init, forget bias +1.
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        prefix: &str,
        cfg: LstmStackConfig,
        rng: &mut R,
    ) -> Result<Self, NnError> {
        if cfg.input_size == 0 || cfg.hidden_size == 0 || cfg.num_layers == 0 {
            return Err(NnError::Shape(format!("bad lstm config {cfg:?}")));
        }
        let h = cfg.hidden_size;
        let bound = 1.0 / (h as f64).sqrt();
        let mut cells = Vec::with_capacity(cfg.num_layers);
        for layer in 0..cfg.num_layers {
            let input = cfg.layer_input(layer);
            let mut dirs = Vec::new();
            for d in 0..cfg.directions() {
                let name = |p: &str| format!("{prefix}.l{layer}.{}.{p}", ["fwd", "bwd"][d]);
                let w_ih = store.add_uniform(&name("w_ih"), &[input, 4 * h], bound, rng)?;
                let w_hh = store.add_uniform(&name("w_hh"), &[h, 4 * h], bound, rng)?;
                let bias = store.add_uniform(&name("b"), &[4 * h], bound, rng)?;
                store.value_mut(bias)[h..2 * h].iter_mut().for_each(|b| *b += 1.0);
                dirs.push(Cell {
                    w_ih,
                    w_hh,
                    bias,
                    input,
                });
            }
            cells.push(dirs);
        }
        Ok(Self { cfg, cells })
    }

    /// Re-binds to parameters already present in `store`.
    pub fn bind(store: &ParamStore, prefix: &str, cfg: LstmStackConfig) -> Result<Self, NnError> {
        let mut cells = Vec::new();
        for layer in 0..cfg.num_layers {
            let mut dirs = Vec::new();
            for d in 0..cfg.directions() {
                let get = |p: &str| {
                    let n = format!("{prefix}.l{layer}.{}.{p}", ["fwd", "bwd"][d]);
                    store.id(&n).ok_or(NnError::MissingParam(n))
                };
                dirs.push(Cell {
                    w_ih: get("w_ih")?,
                    w_hh: get("w_hh")?,
                    bias: get("b")?,
                    input: cfg.layer_input(layer),
                });
            }
            cells.push(dirs);
        }
        Ok(Self { cfg, cells })
    }

    /// Parameter ids of one direction of one layer: `(w_ih, w_hh, b)`.
    pub fn cell_params(&self, layer: usize, dir: usize) -> (ParamId, ParamId, ParamId) {
        let c = &self.cells[layer][dir];
        (c.w_ih, c.w_hh, c.bias)
    }

    /// `seq` is `T × input_size`, row-major. Returns `T × output_size`.
    pub fn forward(
        &self,
        store: &ParamStore,
        seq: &[f64],
        mask: &[bool],
    ) -> Result<(Vec<f64>, LstmCache), NnError> {
        let t_len = mask.len();
        if seq.len() != t_len * self.cfg.input_size {
            return Err(NnError::Shape(format!(
                "sequence of {} values does not match {t_len} steps × {}",
                seq.len(),
                self.cfg.input_size
            )));
        }
        let h = self.cfg.hidden_size;
        let out_w = self.cfg.output_size();
        let mut input = seq.to_vec();
        let mut layers = Vec::with_capacity(self.cfg.num_layers);
        for cells in &self.cells {
            let in_w = cells[0].input;
            let mut out = vec![0.0; t_len * out_w];
            let mut dir_caches = Vec::with_capacity(cells.len());
            for (d, cell) in cells.iter().enumerate() {
                let (w_ih, w_hh, b) = (
                    store.value(cell.w_ih),
                    store.value(cell.w_hh),
                    store.value(cell.bias),
                );
                let mut hs = vec![0.0; h];
                let mut cs = vec![0.0; h];
                let mut caches = Vec::with_capacity(t_len);
                let order: Box<dyn Iterator<Item = usize>> = if d == 0 {
                    Box::new(0..t_len)
                } else {
                    Box::new((0..t_len).rev())
                };
                for t in order {
                    if !mask[t] {
                        continue;
                    }
                    let x = &input[t * in_w..(t + 1) * in_w];
                    let mut z = b.to_vec();
                    for (j, &xj) in x.iter().enumerate() {
                        axpy(xj, &w_ih[j * 4 * h..(j + 1) * 4 * h], &mut z);
                    }
                    for (k, &hk) in hs.iter().enumerate() {
                        axpy(hk, &w_hh[k * 4 * h..(k + 1) * 4 * h], &mut z);
                    }
                    for v in &mut z[..2 * h] {
                        *v = sigmoid(*v);
                    }
                    for v in &mut z[2 * h..3 * h] {
                        *v = v.tanh();
                    }
                    for v in &mut z[3 * h..] {
                        *v = sigmoid(*v);
                    }
                    let c_prev = cs.clone();
                    let h_prev = hs.clone();
                    let mut tanh_c = vec![0.0; h];
                    for k in 0..h {
                        cs[k] = z[h + k] * c_prev[k] + z[k] * z[2 * h + k];
                        tanh_c[k] = cs[k].tanh();
                        hs[k] = z[3 * h + k] * tanh_c[k];
                    }
                    out[t * out_w + d * h..t * out_w + (d + 1) * h].copy_from_slice(&hs);
                    caches.push(StepCache {
                        t,
                        x: x.to_vec(),
                        h_prev,
                        c_prev,
                        gates: z,
                        tanh_c,
                    });
                }
                dir_caches.push(caches);
            }
            layers.push(dir_caches);
            input = out;
        }
        Ok((
            input,
            LstmCache {
                steps: t_len,
                layers,
            },
        ))
    }

    /// Accumulates parameter gradients into `grads` and returns the gradient
    /// with respect to the input sequence.
    pub fn backward(
        &self,
        store: &ParamStore,
        cache: &LstmCache,
        d_out: &[f64],
        grads: &mut Grads,
    ) -> Result<Vec<f64>, NnError> {
        let t_len = cache.steps;
        let h = self.cfg.hidden_size;
        let out_w = self.cfg.output_size();
        if d_out.len() != t_len * out_w {
            return Err(NnError::Shape("output gradient does not match forward".into()));
        }
        if cache.layers.len() != self.cells.len() {
            return Err(NnError::MissingCache);
        }
        let mut d_above = d_out.to_vec();
        for (layer, cells) in self.cells.iter().enumerate().rev() {
            let in_w = cells[0].input;
            let mut d_in = vec![0.0; t_len * in_w];
            for (d, cell) in cells.iter().enumerate() {
                let (w_ih, w_hh) = (store.value(cell.w_ih), store.value(cell.w_hh));
                let mut dh_next = vec![0.0; h];
                let mut dc_next = vec![0.0; h];
                let mut dz = vec![0.0; 4 * h];
                for sc in cache.layers[layer][d].iter().rev() {
                    let g = &sc.gates;
                    let dh_out = &d_above[sc.t * out_w + d * h..sc.t * out_w + (d + 1) * h];
                    for k in 0..h {
                        let dh = dh_out[k] + dh_next[k];
                        let (i, f, gg, o) = (g[k], g[h + k], g[2 * h + k], g[3 * h + k]);
                        let tc = sc.tanh_c[k];
                        let dc = dh * o * (1.0 - tc * tc) + dc_next[k];
                        dz[k] = dc * gg * i * (1.0 - i);
                        dz[h + k] = dc * sc.c_prev[k] * f * (1.0 - f);
                        dz[2 * h + k] = dc * i * (1.0 - gg * gg);
                        dz[3 * h + k] = dh * tc * o * (1.0 - o);
                        dc_next[k] = dc * f;
                    }
                    let gb = grads.get_mut(cell.bias);
                    for (a, b) in gb.iter_mut().zip(&dz) {
                        *a += b;
                    }
                    let gih = grads.get_mut(cell.w_ih);
                    for (j, &xj) in sc.x.iter().enumerate() {
                        axpy(xj, &dz, &mut gih[j * 4 * h..(j + 1) * 4 * h]);
                    }
                    let ghh = grads.get_mut(cell.w_hh);
                    for (k, &hk) in sc.h_prev.iter().enumerate() {
                        axpy(hk, &dz, &mut ghh[k * 4 * h..(k + 1) * 4 * h]);
                    }
                    let dx = &mut d_in[sc.t * in_w..(sc.t + 1) * in_w];
                    for (j, v) in dx.iter_mut().enumerate() {
                        *v += dot(&w_ih[j * 4 * h..(j + 1) * 4 * h], &dz);
                    }
                    for (k, v) in dh_next.iter_mut().enumerate() {
                        *v = dot(&w_hh[k * 4 * h..(k + 1) * 4 * h], &dz);
                    }
                }
            }
            d_above = d_in;
        }
        Ok(d_above)
    }
}
