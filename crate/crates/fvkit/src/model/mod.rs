//! The bundled miniature causal transformer.
//!
//! A small pre-LN decoder (learned absolute positions, GELU MLP) in pure
//! 64-bit arithmetic. Attention output is always assembled head by head —
//! each head's context slice is projected through its rows of the output
//! matrix and the per-head contributions are summed in head order — so
//! head captures, head patches, and the layer-sum decomposition are exact,
//! not approximations of a fused matmul.

pub mod train;

use ndarray::{s, Array1, Array2};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{FvError, Result};
use crate::gateway::InterventionPlan;
use crate::tokenizer::Tokenizer;

const CHECKPOINT_VERSION: u32 = 1;
const LN_EPS: f64 = 1e-5;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MiniConfig {
    pub model_id: String,
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_model: usize,
    pub d_head: usize,
    pub d_mlp: usize,
    pub max_seq_len: usize,
}

impl MiniConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_heads * self.d_head != self.d_model {
            return Err(FvError::Config(format!(
                "n_heads ({}) * d_head ({}) != d_model ({})",
                self.n_heads, self.d_head, self.d_model
            )));
        }
        if self.n_layers == 0 || self.d_model == 0 || self.max_seq_len == 0 {
            return Err(FvError::Config("zero-sized model dimension".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LayerWeights {
    pub ln1_g: Array1<f64>,
    pub ln1_b: Array1<f64>,
    pub w_q: Array2<f64>,
    pub b_q: Array1<f64>,
    pub w_k: Array2<f64>,
    pub b_k: Array1<f64>,
    pub w_v: Array2<f64>,
    pub b_v: Array1<f64>,
    /// Output projection; rows `[h*d_head, (h+1)*d_head)` belong to head `h`.
    pub w_o: Array2<f64>,
    pub b_o: Array1<f64>,
    pub ln2_g: Array1<f64>,
    pub ln2_b: Array1<f64>,
    pub w_in: Array2<f64>,
    pub b_in: Array1<f64>,
    pub w_out: Array2<f64>,
    pub b_out: Array1<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MiniTransformer {
    pub config: MiniConfig,
    pub tokenizer: Tokenizer,
    pub w_embed: Array2<f64>,
    pub w_pos: Array2<f64>,
    pub layers: Vec<LayerWeights>,
    pub lnf_g: Array1<f64>,
    pub lnf_b: Array1<f64>,
    pub w_unembed: Array2<f64>,
}

// ---------------------------------------------------------------------------
// Forward-pass structures
// ---------------------------------------------------------------------------

/// LayerNorm intermediates kept for the backward pass.
#[derive(Debug, Clone)]
pub struct LnCache {
    pub x_hat: Array2<f64>,
    pub inv_std: Array1<f64>,
}

#[derive(Debug, Clone)]
pub struct LayerCache {
    pub x_in: Array2<f64>,
    pub ln1: LnCache,
    pub hnorm1: Array2<f64>,
    pub q: Array2<f64>,
    pub k: Array2<f64>,
    pub v: Array2<f64>,
    /// Per-head attention probabilities (S x S each).
    pub att: Vec<Array2<f64>>,
    /// Concatenated head contexts (S x d_model).
    pub ctx: Array2<f64>,
    pub x_mid: Array2<f64>,
    pub ln2: LnCache,
    pub hnorm2: Array2<f64>,
    pub mlp_pre: Array2<f64>,
    pub mlp_act: Array2<f64>,
}

#[derive(Debug, Clone)]
pub struct ForwardCache {
    pub tokens: Vec<u32>,
    pub x0: Array2<f64>,
    pub layers: Vec<LayerCache>,
    pub x_final: Array2<f64>,
    pub lnf: LnCache,
}

/// One forward pass's outputs.
pub struct ForwardPass {
    /// Logits for every position (S x V).
    pub logits: Array2<f64>,
    /// Final-token head outputs `[layer][head]`, when capture was requested.
    pub head_outputs: Option<Vec<Vec<Array1<f64>>>>,
    /// Residual state after the probed layer at the final token.
    pub probe: Option<Array1<f64>>,
    /// Intermediates for the backward pass, when requested.
    pub cache: Option<ForwardCache>,
}

pub(crate) fn gelu(x: f64) -> f64 {
    const C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
    0.5 * x * (1.0 + (C * (x + 0.044715 * x * x * x)).tanh())
}

pub(crate) fn gelu_prime(x: f64) -> f64 {
    const C: f64 = 0.797_884_560_802_865_4;
    let inner = C * (x + 0.044715 * x * x * x);
    let t = inner.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * C * (1.0 + 3.0 * 0.044715 * x * x)
}

fn layer_norm(x: &Array2<f64>, g: &Array1<f64>, b: &Array1<f64>) -> (Array2<f64>, LnCache) {
    let (rows, d) = x.dim();
    let mut x_hat = Array2::zeros((rows, d));
    let mut inv_std = Array1::zeros(rows);
    let mut out = Array2::zeros((rows, d));
    for i in 0..rows {
        let row = x.row(i);
        let mean = row.sum() / d as f64;
        let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
        let istd = 1.0 / (var + LN_EPS).sqrt();
        inv_std[i] = istd;
        for j in 0..d {
            let xh = (x[[i, j]] - mean) * istd;
            x_hat[[i, j]] = xh;
            out[[i, j]] = g[j] * xh + b[j];
        }
    }
    (out, LnCache { x_hat, inv_std })
}

impl MiniTransformer {
    /// Seeded random initialization (GPT-2 style scaling on the residual
    /// projections).
    pub fn seeded(config: MiniConfig, tokenizer: Tokenizer, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let base = Normal::new(0.0, 0.02).expect("valid normal");
        let res_scale = 1.0 / ((2 * config.n_layers) as f64).sqrt();
        let v = tokenizer.vocab_size();
        let d = config.d_model;
        let m = config.d_mlp;

        let mut mat = |r: usize, c: usize, scale: f64| {
            Array2::from_shape_fn((r, c), |_| base.sample(&mut rng) * scale)
        };
        let w_embed = mat(v, d, 1.0);
        let w_pos = mat(config.max_seq_len, d, 1.0);
        let mut layers = Vec::with_capacity(config.n_layers);
        for _ in 0..config.n_layers {
            layers.push(LayerWeights {
                ln1_g: Array1::ones(d),
                ln1_b: Array1::zeros(d),
                w_q: mat(d, d, 1.0),
                b_q: Array1::zeros(d),
                w_k: mat(d, d, 1.0),
                b_k: Array1::zeros(d),
                w_v: mat(d, d, 1.0),
                b_v: Array1::zeros(d),
                w_o: mat(d, d, res_scale),
                b_o: Array1::zeros(d),
                ln2_g: Array1::ones(d),
                ln2_b: Array1::zeros(d),
                w_in: mat(d, m, 1.0),
                b_in: Array1::zeros(m),
                w_out: mat(m, d, res_scale),
                b_out: Array1::zeros(d),
            });
        }
        let lnf_g = Array1::ones(d);
        let lnf_b = Array1::zeros(d);
        let w_unembed = mat(d, v, 1.0);
        Ok(Self {
            config,
            tokenizer,
            w_embed,
            w_pos,
            layers,
            lnf_g,
            lnf_b,
            w_unembed,
        })
    }

    /// A same-shape model with all weights zero (gradient accumulator).
    pub fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        for p in z.params_mut() {
            for v in p {
                *v = 0.0;
            }
        }
        z
    }

    /// Flat views over every parameter, in a fixed canonical order.
    pub fn params_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out: Vec<&mut [f64]> = Vec::new();
        out.push(self.w_embed.as_slice_mut().expect("standard layout"));
        out.push(self.w_pos.as_slice_mut().expect("standard layout"));
        for l in &mut self.layers {
            out.push(l.ln1_g.as_slice_mut().expect("standard layout"));
            out.push(l.ln1_b.as_slice_mut().expect("standard layout"));
            out.push(l.w_q.as_slice_mut().expect("standard layout"));
            out.push(l.b_q.as_slice_mut().expect("standard layout"));
            out.push(l.w_k.as_slice_mut().expect("standard layout"));
            out.push(l.b_k.as_slice_mut().expect("standard layout"));
            out.push(l.w_v.as_slice_mut().expect("standard layout"));
            out.push(l.b_v.as_slice_mut().expect("standard layout"));
            out.push(l.w_o.as_slice_mut().expect("standard layout"));
            out.push(l.b_o.as_slice_mut().expect("standard layout"));
            out.push(l.ln2_g.as_slice_mut().expect("standard layout"));
            out.push(l.ln2_b.as_slice_mut().expect("standard layout"));
            out.push(l.w_in.as_slice_mut().expect("standard layout"));
            out.push(l.b_in.as_slice_mut().expect("standard layout"));
            out.push(l.w_out.as_slice_mut().expect("standard layout"));
            out.push(l.b_out.as_slice_mut().expect("standard layout"));
        }
        out.push(self.lnf_g.as_slice_mut().expect("standard layout"));
        out.push(self.lnf_b.as_slice_mut().expect("standard layout"));
        out.push(self.w_unembed.as_slice_mut().expect("standard layout"));
        out
    }

    pub fn param_count(&self) -> usize {
        let mut clone = self.clone();
        clone.params_mut().iter().map(|p| p.len()).sum()
    }

    /// Runs the model over `tokens`.
    ///
    /// `plan` applies head patches and residual additions at the final token;
    /// `capture` returns every head's final-token output (taken before any
    /// patching); `probe_layer` returns the residual state after that layer
    /// at the final token; `want_cache` keeps intermediates for backprop.
    pub fn forward(
        &self,
        tokens: &[u32],
        plan: Option<&InterventionPlan>,
        capture: bool,
        probe_layer: Option<usize>,
        want_cache: bool,
    ) -> ForwardPass {
        let seq = tokens.len();
        assert!(seq >= 1, "forward requires at least one token");
        assert!(
            seq <= self.config.max_seq_len,
            "sequence length {seq} exceeds max {}",
            self.config.max_seq_len
        );
        let d = self.config.d_model;
        let dh = self.config.d_head;
        let last = seq - 1;

        // Pre-summed residual additions per layer, in plan order.
        let mut additions: Vec<Option<Array1<f64>>> = vec![None; self.config.n_layers];
        let mut patches: Vec<Vec<Option<&[f64]>>> =
            vec![vec![None; self.config.n_heads]; self.config.n_layers];
        if let Some(plan) = plan {
            for (layer, vector) in &plan.additions {
                let slot = &mut additions[*layer];
                match slot {
                    Some(acc) => {
                        for (a, b) in acc.iter_mut().zip(vector) {
                            *a += *b;
                        }
                    }
                    None => *slot = Some(Array1::from_vec(vector.clone())),
                }
            }
            for (head, vector) in &plan.head_patches {
                patches[head.layer][head.head] = Some(vector.as_slice());
            }
        }

        let mut x = Array2::zeros((seq, d));
        for (i, &t) in tokens.iter().enumerate() {
            for j in 0..d {
                x[[i, j]] = self.w_embed[[t as usize, j]] + self.w_pos[[i, j]];
            }
        }
        let x0 = if want_cache { Some(x.clone()) } else { None };

        let mut captured: Vec<Vec<Array1<f64>>> = Vec::new();
        let mut probe: Option<Array1<f64>> = None;
        let mut layer_caches: Vec<LayerCache> = Vec::new();

        for (li, lw) in self.layers.iter().enumerate() {
            let x_in = if want_cache { Some(x.clone()) } else { None };
            let (hnorm1, ln1) = layer_norm(&x, &lw.ln1_g, &lw.ln1_b);
            let q = hnorm1.dot(&lw.w_q) + &lw.b_q;
            let k = hnorm1.dot(&lw.w_k) + &lw.b_k;
            let v = hnorm1.dot(&lw.w_v) + &lw.b_v;

            let scale = 1.0 / (dh as f64).sqrt();
            let mut att_all: Vec<Array2<f64>> = Vec::with_capacity(self.config.n_heads);
            let mut ctx = Array2::zeros((seq, d));
            let mut head_outs: Vec<Array2<f64>> = Vec::with_capacity(self.config.n_heads);
            for h in 0..self.config.n_heads {
                let cols = s![.., h * dh..(h + 1) * dh];
                let qh = q.slice(cols);
                let kh = k.slice(cols);
                let vh = v.slice(cols);
                let mut att = Array2::zeros((seq, seq));
                for i in 0..seq {
                    let mut row_max = f64::NEG_INFINITY;
                    let mut scores = vec![0.0f64; i + 1];
                    for (j, score) in scores.iter_mut().enumerate() {
                        let mut dot = 0.0;
                        for c in 0..dh {
                            dot += qh[[i, c]] * kh[[j, c]];
                        }
                        *score = dot * scale;
                        row_max = row_max.max(*score);
                    }
                    let mut sum = 0.0;
                    for s_val in scores.iter_mut() {
                        *s_val = (*s_val - row_max).exp();
                        sum += *s_val;
                    }
                    for (j, s_val) in scores.iter().enumerate() {
                        att[[i, j]] = s_val / sum;
                    }
                }
                let ctx_h = att.dot(&vh);
                ctx.slice_mut(cols).assign(&ctx_h);
                let o_h = ctx_h.dot(&lw.w_o.slice(s![h * dh..(h + 1) * dh, ..]));
                head_outs.push(o_h);
                att_all.push(att);
            }

            if capture {
                captured.push(
                    head_outs
                        .iter()
                        .map(|o| o.row(last).to_owned())
                        .collect(),
                );
            }

            // Attention residual contribution: per-head sum in head order,
            // with final-token patches substituted before the sum.
            let mut attn_out = Array2::zeros((seq, d));
            for (h, o_h) in head_outs.iter().enumerate() {
                match patches[li][h] {
                    Some(patch) => {
                        for i in 0..seq {
                            if i == last {
                                for j in 0..d {
                                    attn_out[[i, j]] += patch[j];
                                }
                            } else {
                                for j in 0..d {
                                    attn_out[[i, j]] += o_h[[i, j]];
                                }
                            }
                        }
                    }
                    None => attn_out += o_h,
                }
            }
            for i in 0..seq {
                for j in 0..d {
                    attn_out[[i, j]] += lw.b_o[j];
                }
            }

            let x_mid = &x + &attn_out;
            let (hnorm2, ln2) = layer_norm(&x_mid, &lw.ln2_g, &lw.ln2_b);
            let mlp_pre = hnorm2.dot(&lw.w_in) + &lw.b_in;
            let mlp_act = mlp_pre.mapv(gelu);
            let mlp_out = mlp_act.dot(&lw.w_out) + &lw.b_out;
            x = &x_mid + &mlp_out;

            if let Some(add) = &additions[li] {
                for j in 0..d {
                    x[[last, j]] += add[j];
                }
            }
            if probe_layer == Some(li) {
                probe = Some(x.row(last).to_owned());
            }

            if want_cache {
                layer_caches.push(LayerCache {
                    x_in: x_in.expect("cached"),
                    ln1,
                    hnorm1,
                    q,
                    k,
                    v,
                    att: att_all,
                    ctx,
                    x_mid,
                    ln2,
                    hnorm2,
                    mlp_pre,
                    mlp_act,
                });
            }
        }

        let x_final = if want_cache { Some(x.clone()) } else { None };
        let (xf, lnf) = layer_norm(&x, &self.lnf_g, &self.lnf_b);
        let logits = xf.dot(&self.w_unembed);

        ForwardPass {
            logits,
            head_outputs: if capture { Some(captured) } else { None },
            probe,
            cache: if want_cache {
                Some(ForwardCache {
                    tokens: tokens.to_vec(),
                    x0: x0.expect("cached"),
                    layers: layer_caches,
                    x_final: x_final.expect("cached"),
                    lnf,
                })
            } else {
                None
            },
        }
    }

    // -- checkpoint io ------------------------------------------------------

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        #[derive(Serialize)]
        struct Checkpoint<'a> {
            format_version: u32,
            model: &'a MiniTransformer,
        }
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent)?;
        }
        let file = std::fs::File::create(path)?;
        serde_json::to_writer(std::io::BufWriter::new(file), &Checkpoint {
            format_version: CHECKPOINT_VERSION,
            model: self,
        })?;
        Ok(())
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        #[derive(Deserialize)]
        struct Checkpoint {
            format_version: u32,
            model: MiniTransformer,
        }
        let raw = std::fs::read_to_string(path)?;
        let ckpt: Checkpoint = serde_json::from_str(&raw).map_err(|e| {
            FvError::Store(format!("bad checkpoint {}: {e}", path.display()))
        })?;
        if ckpt.format_version != CHECKPOINT_VERSION {
            return Err(FvError::Store(format!(
                "checkpoint version {} unsupported (expected {CHECKPOINT_VERSION})",
                ckpt.format_version
            )));
        }
        ckpt.model.config.validate()?;
        Ok(ckpt.model)
    }
}

/// The 2-layer, 4-head, 32-dimensional oracle substrate used by the numeric
/// test suites: seeded random weights over a small word vocabulary.
pub fn oracle_model(seed: u64) -> MiniTransformer {
    let words: Vec<String> = [
        "Japan", "Tokyo", "Egypt", "Cairo", "France", "Paris", "Chile", "Santiago", "alpha",
        "beta", "gamma", "delta", "epsilon", "zeta", "eta", "theta", "iota", "kappa", "lambda",
        "mu", "stone", "river", "cloud", "ember", "frost", "grove",
    ]
    .iter()
    .map(|s| s.to_string())
    .collect();
    let tokenizer = Tokenizer::from_words(&words);
    let config = MiniConfig {
        model_id: format!("mini-oracle-s{seed}"),
        n_layers: 2,
        n_heads: 4,
        d_model: 32,
        d_head: 8,
        d_mlp: 64,
        max_seq_len: 192,
    };
    MiniTransformer::seeded(config, tokenizer, seed).expect("oracle config is valid")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gateway::HeadId;

    #[test]
    fn forward_shapes_are_consistent() {
        let m = oracle_model(11);
        let tokens = m.tokenizer.encode("Q: Japan\nA: Tokyo");
        let pass = m.forward(&tokens, None, true, Some(1), true);
        assert_eq!(pass.logits.dim(), (tokens.len(), m.tokenizer.vocab_size()));
        let heads = pass.head_outputs.unwrap();
        assert_eq!(heads.len(), 2);
        assert_eq!(heads[0].len(), 4);
        assert_eq!(heads[0][0].len(), 32);
        assert_eq!(pass.probe.unwrap().len(), 32);
        assert!(pass.cache.is_some());
    }

    #[test]
    fn forward_is_deterministic() {
        let m = oracle_model(3);
        let tokens = m.tokenizer.encode("Q: Egypt\nA: Cairo\n\nQ: Japan\nA: ");
        let a = m.forward(&tokens, None, false, None, false);
        let b = m.forward(&tokens, None, false, None, false);
        assert_eq!(a.logits, b.logits);
    }

    #[test]
    fn identity_patch_is_bit_exact() {
        let m = oracle_model(5);
        let tokens = m.tokenizer.encode("Q: France\nA: ");
        let base = m.forward(&tokens, None, true, None, false);
        let heads = base.head_outputs.unwrap();
        let mut plan = InterventionPlan::empty();
        for (l, per_head) in heads.iter().enumerate() {
            for (h, out) in per_head.iter().enumerate() {
                plan = plan.with_head_patch(HeadId::new(l, h), out.to_vec());
            }
        }
        let patched = m.forward(&tokens, Some(&plan), false, None, false);
        assert_eq!(base.logits, patched.logits);
    }

    #[test]
    fn zero_addition_is_bit_exact() {
        let m = oracle_model(5);
        let tokens = m.tokenizer.encode("Q: France\nA: ");
        let plan = InterventionPlan::empty().with_addition(0, vec![0.0; 32]);
        let base = m.forward(&tokens, None, false, None, false);
        let patched = m.forward(&tokens, Some(&plan), false, None, false);
        assert_eq!(base.logits, patched.logits);
    }

    #[test]
    fn same_layer_additions_equal_single_summed_addition() {
        let m = oracle_model(7);
        let tokens = m.tokenizer.encode("Q: Chile\nA: ");
        let a: Vec<f64> = (0..32).map(|i| (i as f64) * 0.01).collect();
        let b: Vec<f64> = (0..32).map(|i| 0.5 - (i as f64) * 0.02).collect();
        let sum: Vec<f64> = a.iter().zip(&b).map(|(x, y)| x + y).collect();
        let joint = InterventionPlan::empty()
            .with_addition(1, a)
            .with_addition(1, b);
        let single = InterventionPlan::empty().with_addition(1, sum);
        let lhs = m.forward(&tokens, Some(&joint), false, None, false);
        let rhs = m.forward(&tokens, Some(&single), false, None, false);
        assert_eq!(lhs.logits, rhs.logits);
    }

    #[test]
    fn checkpoint_round_trip_preserves_logits() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("mini.json");
        let m = oracle_model(9);
        m.save(&path).unwrap();
        let loaded = MiniTransformer::load(&path).unwrap();
        let tokens = m.tokenizer.encode("Q: Japan\nA: ");
        let a = m.forward(&tokens, None, false, None, false);
        let b = loaded.forward(&tokens, None, false, None, false);
        assert_eq!(a.logits, b.logits);
    }
}
