//! A tiny trainable seq2seq backend: an Elman recurrence over token and
//! step embeddings, conditioned on the mean input embedding, with an
//! optional pointer (copy) head that attends over input positions.
//!
//! With the copy head the next-token distribution is
//! `p(w) = pi * softmax(Wo h + bo)_w + (1 - pi) * sum_{j: x_j = w} alpha_j`.
//! All gradients are hand-derived; tests check them against central
//! finite differences.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::vocab::{TokenId, Vocabulary};
use super::{log_softmax_masked, Seq2Seq, Trainable};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PointerRnnConfig {
    pub dim: usize,
    /// Input positions beyond this share the last position embedding.
    pub max_input_len: usize,
    /// Decoder steps beyond this share the last step embedding.
    pub max_output_len: usize,
    pub copy: bool,
    pub init_scale: f64,
}

impl Default for PointerRnnConfig {
    fn default() -> Self {
        PointerRnnConfig {
            dim: 16,
            max_input_len: 32,
            max_output_len: 12,
            copy: true,
            init_scale: 0.1,
        }
    }
}

#[derive(Debug, Clone, Copy)]
struct Layout {
    emb: usize,
    pin: usize,
    pout: usize,
    wc: usize,
    wh: usize,
    bh: usize,
    wo: usize,
    bo: usize,
    wq: usize,
    wg: usize,
    bg: usize,
    total: usize,
}

impl Layout {
    fn new(c: &PointerRnnConfig, v: usize) -> Self {
        let d = c.dim;
        let emb = 0;
        let pin = emb + v * d;
        let pout = pin + c.max_input_len * d;
        let wc = pout + c.max_output_len * d;
        let wh = wc + d * d;
        let bh = wh + d * d;
        let wo = bh + d;
        let bo = wo + v * d;
        let wq = bo + v;
        let (wg, bg, total) = if c.copy {
            let wg = wq + d * d;
            (wg, wg + d, wg + d + 1)
        } else {
            (wq, wq, wq)
        };
        Layout {
            emb,
            pin,
            pout,
            wc,
            wh,
            bh,
            wo,
            bo,
            wq,
            wg,
            bg,
            total,
        }
    }
}

#[derive(Serialize, Deserialize)]
struct PointerRnnState {
    config: PointerRnnConfig,
    vocab: Vocabulary,
    params: Vec<f64>,
}

/// Pointer-generator recurrence with a flat `f64` parameter vector.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(try_from = "PointerRnnState", into = "PointerRnnState")]
pub struct PointerRnn {
    config: PointerRnnConfig,
    vocab: Vocabulary,
    params: Vec<f64>,
    layout: Layout,
}

impl TryFrom<PointerRnnState> for PointerRnn {
    type Error = Error;
    fn try_from(s: PointerRnnState) -> Result<Self> {
        let mut m = PointerRnn::zeros(s.config, s.vocab)?;
        if s.params.len() != m.params.len() {
            return Err(Error::InvalidInput(format!(
                "checkpoint has {} parameters, architecture needs {}",
                s.params.len(),
                m.params.len()
            )));
        }
        m.params = s.params;
        Ok(m)
    }
}

impl From<PointerRnn> for PointerRnnState {
    fn from(m: PointerRnn) -> Self {
        PointerRnnState {
            config: m.config,
            vocab: m.vocab,
            params: m.params,
        }
    }
}

/// Per-step activations kept for the backward pass.
struct Step {
    prev_token: TokenId,
    out_slot: usize,
    h_prev: Vec<f64>,
    h: Vec<f64>,
    gen: Vec<f64>,
    q: Vec<f64>,
    alpha: Vec<f64>,
    pi: f64,
}

struct Encoded {
    ctx: Vec<f64>,
    /// (position slot, token) for every input position the pointer may use.
    positions: Vec<(usize, TokenId)>,
    keys: Vec<Vec<f64>>,
}

impl PointerRnn {
    /// All-zero parameters. Without the copy head this is the uniform model
    /// over emittable tokens.
    pub fn zeros(config: PointerRnnConfig, vocab: Vocabulary) -> Result<Self> {
        if config.dim == 0 || config.max_input_len == 0 || config.max_output_len == 0 {
            return Err(Error::InvalidConfig("pointer model sizes must be positive".into()));
        }
        let layout = Layout::new(&config, vocab.len());
        Ok(PointerRnn {
            params: vec![0.0; layout.total],
            config,
            vocab,
            layout,
        })
    }

    /// Uniform random init in `[-init_scale, init_scale]`.
    pub fn new(config: PointerRnnConfig, vocab: Vocabulary, seed: u64) -> Result<Self> {
        let mut m = PointerRnn::zeros(config, vocab)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let s = m.config.init_scale;
        for p in m.params.iter_mut() {
            *p = rng.gen_range(-s..=s);
        }
        Ok(m)
    }

    pub fn config(&self) -> &PointerRnnConfig {
        &self.config
    }

    pub fn num_params(&self) -> usize {
        self.params.len()
    }

    fn row(&self, base: usize, i: usize) -> &[f64] {
        let d = self.config.dim;
        &self.params[base + i * d..base + (i + 1) * d]
    }

    fn check_ids(&self, ids: &[TokenId]) -> Result<()> {
        match ids.iter().find(|&&t| t as usize >= self.vocab.len()) {
            Some(t) => Err(Error::InvalidInput(format!("token id {t} out of vocabulary"))),
            None => Ok(()),
        }
    }

    fn encode(&self, input: &[TokenId]) -> Encoded {
        let d = self.config.dim;
        let l = &self.layout;
        let mut ctx = vec![0.0; d];
        for &t in input {
            for (c, e) in ctx.iter_mut().zip(self.row(l.emb, t as usize)) {
                *c += e;
            }
        }
        if !input.is_empty() {
            ctx.iter_mut().for_each(|c| *c /= input.len() as f64);
        }
        let mut positions = Vec::new();
        let mut keys = Vec::new();
        if self.config.copy {
            for (j, &t) in input.iter().enumerate() {
                if !self.vocab.is_emittable(t) {
                    continue;
                }
                let slot = j.min(self.config.max_input_len - 1);
                let key: Vec<f64> = self
                    .row(l.emb, t as usize)
                    .iter()
                    .zip(self.row(l.pin, slot))
                    .map(|(a, b)| a + b)
                    .collect();
                positions.push((slot, t));
                keys.push(key);
            }
        }
        Encoded { ctx, positions, keys }
    }

    fn step(&self, enc: &Encoded, h_prev: &[f64], prev_token: TokenId, t: usize) -> Step {
        let d = self.config.dim;
        let l = &self.layout;
        let p = &self.params;
        let out_slot = t.min(self.config.max_output_len - 1);
        let mut h = vec![0.0; d];
        for (r, hr) in h.iter_mut().enumerate() {
            let mut a = p[l.bh + r] + p[l.emb + prev_token as usize * d + r] + p[l.pout + out_slot * d + r];
            for c in 0..d {
                a += p[l.wc + r * d + c] * enc.ctx[c] + p[l.wh + r * d + c] * h_prev[c];
            }
            *hr = a.tanh();
        }
        let v = self.vocab.len();
        let logits: Vec<f64> = (0..v)
            .map(|i| p[l.bo + i] + dot(&p[l.wo + i * d..l.wo + (i + 1) * d], &h))
            .collect();
        let gen: Vec<f64> = log_softmax_masked(&logits, |i| self.vocab.is_emittable(i as TokenId))
            .into_iter()
            .map(f64::exp)
            .collect();

        let (q, alpha, pi) = if enc.positions.is_empty() {
            (Vec::new(), Vec::new(), 1.0)
        } else {
            let q: Vec<f64> = (0..d).map(|r| dot(&p[l.wq + r * d..l.wq + (r + 1) * d], &h)).collect();
            let scores: Vec<f64> = enc.keys.iter().map(|k| dot(&q, k)).collect();
            let alpha: Vec<f64> = log_softmax_masked(&scores, |_| true).into_iter().map(f64::exp).collect();
            let u = p[l.bg] + dot(&p[l.wg..l.wg + d], &h);
            (q, alpha, sigmoid(u))
        };
        Step {
            prev_token,
            out_slot,
            h_prev: h_prev.to_vec(),
            h,
            gen,
            q,
            alpha,
            pi,
        }
    }

    fn copy_mass(enc: &Encoded, step: &Step, w: TokenId) -> f64 {
        enc.positions
            .iter()
            .zip(&step.alpha)
            .filter(|((_, t), _)| *t == w)
            .map(|(_, a)| a)
            .sum()
    }

    fn prob(enc: &Encoded, step: &Step, w: TokenId) -> f64 {
        if enc.positions.is_empty() {
            step.gen[w as usize]
        } else {
            step.pi * step.gen[w as usize] + (1.0 - step.pi) * Self::copy_mass(enc, step, w)
        }
    }

    fn run(&self, input: &[TokenId], output: &[TokenId]) -> (Encoded, Vec<Step>) {
        let enc = self.encode(input);
        let mut steps: Vec<Step> = Vec::with_capacity(output.len());
        let mut h = vec![0.0; self.config.dim];
        for t in 0..output.len() {
            let prev = if t == 0 { self.vocab.bos() } else { output[t - 1] };
            let s = self.step(&enc, &h, prev, t);
            h = s.h.clone();
            steps.push(s);
        }
        (enc, steps)
    }
}

impl Seq2Seq for PointerRnn {
    fn vocab(&self) -> &Vocabulary {
        &self.vocab
    }

    fn next_token_logprobs(&self, input: &[TokenId], prefix: &[TokenId]) -> Result<Vec<f64>> {
        self.check_ids(input)?;
        self.check_ids(prefix)?;
        let enc = self.encode(input);
        let mut h = vec![0.0; self.config.dim];
        let mut prev = self.vocab.bos();
        for (t, &tok) in prefix.iter().enumerate() {
            h = self.step(&enc, &h, prev, t).h;
            prev = tok;
        }
        let s = self.step(&enc, &h, prev, prefix.len());
        let mut probs: Vec<f64> = s.gen.iter().map(|g| s.pi * g).collect();
        if !enc.positions.is_empty() {
            for ((_, t), a) in enc.positions.iter().zip(&s.alpha) {
                probs[*t as usize] += (1.0 - s.pi) * a;
            }
        }
        Ok(probs
            .into_iter()
            .enumerate()
            .map(|(i, p)| if self.vocab.is_emittable(i as TokenId) { p.ln() } else { f64::NEG_INFINITY })
            .collect())
    }

    fn sequence_logprobs(&self, input: &[TokenId], output: &[TokenId]) -> Result<Vec<f64>> {
        self.check_ids(input)?;
        self.check_ids(output)?;
        let (enc, steps) = self.run(input, output);
        Ok(steps
            .iter()
            .zip(output)
            .map(|(s, &w)| {
                if self.vocab.is_emittable(w) {
                    Self::prob(&enc, s, w).ln()
                } else {
                    f64::NEG_INFINITY
                }
            })
            .collect())
    }
}

impl Trainable for PointerRnn {
    fn params(&self) -> &[f64] {
        &self.params
    }

    fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    fn backward(
        &self,
        input: &[TokenId],
        output: &[TokenId],
        coeffs: &mut dyn FnMut(&[f64]) -> Vec<f64>,
        grad: &mut [f64],
    ) -> Result<Vec<f64>> {
        self.check_ids(input)?;
        self.check_ids(output)?;
        if let Some(&bad) = output.iter().find(|&&w| !self.vocab.is_emittable(w)) {
            return Err(Error::InvalidInput(format!("target token {bad} can never be emitted")));
        }
        if grad.len() != self.params.len() {
            return Err(Error::InvalidInput("gradient buffer has the wrong length".into()));
        }
        let (enc, steps) = self.run(input, output);
        let lps: Vec<f64> = steps
            .iter()
            .zip(output)
            .map(|(s, &w)| Self::prob(&enc, s, w).ln())
            .collect();
        let c = coeffs(&lps);
        assert_eq!(c.len(), lps.len(), "one coefficient per output token");

        let d = self.config.dim;
        let v = self.vocab.len();
        let l = self.layout;
        let p = &self.params;
        let copy = !enc.positions.is_empty();
        let mut dctx = vec![0.0; d];
        let mut dh_next = vec![0.0; d];

        for t in (0..steps.len()).rev() {
            let s = &steps[t];
            let w = output[t];
            let coef = c[t];
            let mut dh = std::mem::take(&mut dh_next);

            if coef != 0.0 {
                let gw = s.gen[w as usize];
                let (scale_gen, cw, pw) = if copy {
                    let cw = Self::copy_mass(&enc, s, w);
                    let pw = s.pi * gw + (1.0 - s.pi) * cw;
                    (coef * s.pi / pw, cw, pw)
                } else {
                    (coef / gw, 0.0, gw)
                };
                // generator logits
                for i in 0..v {
                    if !self.vocab.is_emittable(i as TokenId) {
                        continue;
                    }
                    let delta = if i == w as usize { 1.0 } else { 0.0 };
                    let dz = scale_gen * gw * (delta - s.gen[i]);
                    if dz == 0.0 {
                        continue;
                    }
                    grad[l.bo + i] += dz;
                    let wo = &p[l.wo + i * d..l.wo + (i + 1) * d];
                    for r in 0..d {
                        grad[l.wo + i * d + r] += dz * s.h[r];
                        dh[r] += dz * wo[r];
                    }
                }
                if copy {
                    // gate
                    let du = coef * (gw - cw) / pw * s.pi * (1.0 - s.pi);
                    grad[l.bg] += du;
                    for r in 0..d {
                        grad[l.wg + r] += du * s.h[r];
                        dh[r] += du * p[l.wg + r];
                    }
                    // attention
                    let scale = coef * (1.0 - s.pi) / pw;
                    let mut dq = vec![0.0; d];
                    for (j, ((slot, tok), a)) in enc.positions.iter().zip(&s.alpha).enumerate() {
                        let hit = if *tok == w { 1.0 } else { 0.0 };
                        let ds = scale * (a * hit - cw * a);
                        if ds == 0.0 {
                            continue;
                        }
                        let key = &enc.keys[j];
                        for r in 0..d {
                            dq[r] += ds * key[r];
                            grad[l.emb + *tok as usize * d + r] += ds * s.q[r];
                            grad[l.pin + slot * d + r] += ds * s.q[r];
                        }
                    }
                    for r in 0..d {
                        if dq[r] == 0.0 {
                            continue;
                        }
                        for cc in 0..d {
                            grad[l.wq + r * d + cc] += dq[r] * s.h[cc];
                            dh[cc] += dq[r] * p[l.wq + r * d + cc];
                        }
                    }
                }
            }

            // recurrence
            let da: Vec<f64> = (0..d).map(|r| dh[r] * (1.0 - s.h[r] * s.h[r])).collect();
            let mut dprev = vec![0.0; d];
            for r in 0..d {
                if da[r] == 0.0 {
                    continue;
                }
                grad[l.bh + r] += da[r];
                grad[l.emb + s.prev_token as usize * d + r] += da[r];
                grad[l.pout + s.out_slot * d + r] += da[r];
                for cc in 0..d {
                    grad[l.wh + r * d + cc] += da[r] * s.h_prev[cc];
                    grad[l.wc + r * d + cc] += da[r] * enc.ctx[cc];
                    dprev[cc] += da[r] * p[l.wh + r * d + cc];
                    dctx[cc] += da[r] * p[l.wc + r * d + cc];
                }
            }
            dh_next = dprev;
        }

        if !input.is_empty() {
            let m = input.len() as f64;
            for &tok in input {
                for r in 0..d {
                    grad[l.emb + tok as usize * d + r] += dctx[r] / m;
                }
            }
        }
        Ok(lps)
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}
