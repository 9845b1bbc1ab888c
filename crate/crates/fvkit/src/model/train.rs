//! Hand-derived backpropagation and Adam for the miniature transformer.
//!
//! Gradients are accumulated into a zero-initialized clone of the model so
//! the parameter traversal order is shared with the optimizer. Correctness
//! is pinned by a central-difference gradient check in the test suite.

use ndarray::{s, Array1, Array2};
use rayon::prelude::*;

use super::{gelu_prime, ForwardCache, LnCache, MiniTransformer};

/// One supervised sequence: token ids plus, per position, the id the model
/// should predict next (`None` for unsupervised positions).
#[derive(Debug, Clone)]
pub struct TrainExample {
    pub tokens: Vec<u32>,
    pub targets: Vec<Option<u32>>,
}

impl TrainExample {
    pub fn supervised_positions(&self) -> usize {
        self.targets.iter().flatten().count()
    }
}

/// Mean cross-entropy over supervised positions, plus parameter gradients.
pub fn loss_and_grad(model: &MiniTransformer, example: &TrainExample) -> (f64, MiniTransformer) {
    let pass = model.forward(&example.tokens, None, false, None, true);
    let cache = pass.cache.expect("training forward keeps the cache");
    let seq = example.tokens.len();
    let vocab = model.tokenizer.vocab_size();
    let n_sup = example.supervised_positions().max(1) as f64;

    // Softmax + cross-entropy at supervised positions.
    let mut loss = 0.0;
    let mut dlogits = Array2::zeros((seq, vocab));
    for (i, target) in example.targets.iter().enumerate() {
        let Some(target) = target else { continue };
        let row = pass.logits.row(i);
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for &x in row {
            sum += (x - max).exp();
        }
        let log_z = max + sum.ln();
        loss += (log_z - row[*target as usize]) / n_sup;
        for j in 0..vocab {
            let p = (row[j] - log_z).exp();
            dlogits[[i, j]] = p / n_sup;
        }
        dlogits[[i, *target as usize]] -= 1.0 / n_sup;
    }

    let grads = backward(model, &cache, &dlogits, &example.tokens);
    (loss, grads)
}

/// Mean loss and summed-then-averaged gradients over a batch, computed with
/// one worker per example.
pub fn batch_loss_and_grad(
    model: &MiniTransformer,
    batch: &[TrainExample],
) -> (f64, MiniTransformer) {
    let results: Vec<(f64, MiniTransformer)> = batch
        .par_iter()
        .map(|ex| loss_and_grad(model, ex))
        .collect();
    let scale = 1.0 / batch.len() as f64;
    let mut total_loss = 0.0;
    let mut acc = model.zeros_like();
    {
        let mut acc_params = acc.params_mut();
        for (loss, mut grads) in results {
            total_loss += loss * scale;
            for (dst, src) in acc_params.iter_mut().zip(grads.params_mut()) {
                for (d, s) in dst.iter_mut().zip(src.iter()) {
                    *d += *s * scale;
                }
            }
        }
    }
    (total_loss, acc)
}

fn layer_norm_backward(
    dout: &Array2<f64>,
    ln: &LnCache,
    g: &Array1<f64>,
    dg: &mut Array1<f64>,
    db: &mut Array1<f64>,
) -> Array2<f64> {
    let (rows, d) = dout.dim();
    let mut dx = Array2::zeros((rows, d));
    for i in 0..rows {
        let mut mean_dxhat = 0.0;
        let mut mean_dxhat_xhat = 0.0;
        for j in 0..d {
            let dxh = dout[[i, j]] * g[j];
            dg[j] += dout[[i, j]] * ln.x_hat[[i, j]];
            db[j] += dout[[i, j]];
            mean_dxhat += dxh;
            mean_dxhat_xhat += dxh * ln.x_hat[[i, j]];
        }
        mean_dxhat /= d as f64;
        mean_dxhat_xhat /= d as f64;
        for j in 0..d {
            let dxh = dout[[i, j]] * g[j];
            dx[[i, j]] =
                ln.inv_std[i] * (dxh - mean_dxhat - ln.x_hat[[i, j]] * mean_dxhat_xhat);
        }
    }
    dx
}

fn backward(
    model: &MiniTransformer,
    cache: &ForwardCache,
    dlogits: &Array2<f64>,
    tokens: &[u32],
) -> MiniTransformer {
    let mut grads = model.zeros_like();
    let dh = model.config.d_head;
    let n_heads = model.config.n_heads;
    let seq = tokens.len();

    // Unembed and final LayerNorm.
    let xf_hat = {
        // re-derive normalized output from the cache for the unembed grad
        let mut out = cache.lnf.x_hat.clone();
        for i in 0..seq {
            for j in 0..model.config.d_model {
                out[[i, j]] = model.lnf_g[j] * out[[i, j]] + model.lnf_b[j];
            }
        }
        out
    };
    grads.w_unembed += &xf_hat.t().dot(dlogits);
    let dxf = dlogits.dot(&model.w_unembed.t());
    let mut dx = layer_norm_backward(
        &dxf,
        &cache.lnf,
        &model.lnf_g,
        &mut grads.lnf_g,
        &mut grads.lnf_b,
    );

    for li in (0..model.config.n_layers).rev() {
        let lw = &model.layers[li];
        let lc = &cache.layers[li];
        let gl = &mut grads.layers[li];

        // MLP branch: x = x_mid + mlp_out.
        let dmlp_out = dx.clone();
        gl.w_out += &lc.mlp_act.t().dot(&dmlp_out);
        for i in 0..seq {
            for j in 0..model.config.d_model {
                gl.b_out[j] += dmlp_out[[i, j]];
            }
        }
        let dmlp_act = dmlp_out.dot(&lw.w_out.t());
        let dmlp_pre = &dmlp_act * &lc.mlp_pre.mapv(gelu_prime);
        gl.w_in += &lc.hnorm2.t().dot(&dmlp_pre);
        for i in 0..seq {
            for j in 0..model.config.d_mlp {
                gl.b_in[j] += dmlp_pre[[i, j]];
            }
        }
        let dhnorm2 = dmlp_pre.dot(&lw.w_in.t());
        let dx_mid_ln = layer_norm_backward(&dhnorm2, &lc.ln2, &lw.ln2_g, &mut gl.ln2_g, &mut gl.ln2_b);
        let dx_mid = &dx + &dx_mid_ln;

        // Attention branch: x_mid = x_in + ctx @ W_O + b_O.
        let dattn = dx_mid.clone();
        for i in 0..seq {
            for j in 0..model.config.d_model {
                gl.b_o[j] += dattn[[i, j]];
            }
        }
        let mut dq = Array2::zeros((seq, model.config.d_model));
        let mut dk = Array2::zeros((seq, model.config.d_model));
        let mut dv = Array2::zeros((seq, model.config.d_model));
        let scale = 1.0 / (dh as f64).sqrt();
        for h in 0..n_heads {
            let cols = s![.., h * dh..(h + 1) * dh];
            let rows = s![h * dh..(h + 1) * dh, ..];
            let ctx_h = lc.ctx.slice(cols);
            let att = &lc.att[h];
            let dctx_h = dattn.dot(&lw.w_o.slice(rows).t());
            gl.w_o.slice_mut(rows).scaled_add(1.0, &ctx_h.t().dot(&dattn));

            let vh = lc.v.slice(cols);
            let datt = dctx_h.dot(&vh.t());
            dv.slice_mut(cols)
                .scaled_add(1.0, &att.t().dot(&dctx_h));

            // softmax backward per row, restricted to the causal support
            let mut dscores = Array2::zeros((seq, seq));
            for i in 0..seq {
                let mut dot = 0.0;
                for j in 0..=i {
                    dot += datt[[i, j]] * att[[i, j]];
                }
                for j in 0..=i {
                    dscores[[i, j]] = att[[i, j]] * (datt[[i, j]] - dot);
                }
            }
            let qh = lc.q.slice(cols);
            let kh = lc.k.slice(cols);
            dq.slice_mut(cols)
                .scaled_add(scale, &dscores.dot(&kh));
            dk.slice_mut(cols)
                .scaled_add(scale, &dscores.t().dot(&qh));
        }

        gl.w_q += &lc.hnorm1.t().dot(&dq);
        gl.w_k += &lc.hnorm1.t().dot(&dk);
        gl.w_v += &lc.hnorm1.t().dot(&dv);
        for i in 0..seq {
            for j in 0..model.config.d_model {
                gl.b_q[j] += dq[[i, j]];
                gl.b_k[j] += dk[[i, j]];
                gl.b_v[j] += dv[[i, j]];
            }
        }
        let dhnorm1 = dq.dot(&lw.w_q.t()) + dk.dot(&lw.w_k.t()) + dv.dot(&lw.w_v.t());
        let dx_in_ln =
            layer_norm_backward(&dhnorm1, &lc.ln1, &lw.ln1_g, &mut gl.ln1_g, &mut gl.ln1_b);
        dx = &dx_mid + &dx_in_ln;
    }

    // Embeddings.
    for (i, &t) in tokens.iter().enumerate() {
        for j in 0..model.config.d_model {
            grads.w_embed[[t as usize, j]] += dx[[i, j]];
            grads.w_pos[[i, j]] += dx[[i, j]];
        }
    }

    grads
}

// ---------------------------------------------------------------------------
// Adam
// ---------------------------------------------------------------------------

pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub warmup_steps: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    t: u64,
}

impl Adam {
    pub fn new(model: &MiniTransformer, lr: f64, warmup_steps: u64) -> Self {
        let mut probe = model.clone();
        let shapes: Vec<usize> = probe.params_mut().iter().map(|p| p.len()).collect();
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            warmup_steps,
            m: shapes.iter().map(|&n| vec![0.0; n]).collect(),
            v: shapes.iter().map(|&n| vec![0.0; n]).collect(),
            t: 0,
        }
    }

    pub fn step(&mut self, model: &mut MiniTransformer, grads: &mut MiniTransformer) {
        self.t += 1;
        let warm = if self.warmup_steps > 0 {
            (self.t as f64 / self.warmup_steps as f64).min(1.0)
        } else {
            1.0
        };
        let lr = self.lr * warm;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        let params = model.params_mut();
        let gparams = grads.params_mut();
        for (((p, g), m), v) in params
            .into_iter()
            .zip(gparams)
            .zip(self.m.iter_mut())
            .zip(self.v.iter_mut())
        {
            for i in 0..p.len() {
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g[i];
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g[i] * g[i];
                let m_hat = m[i] / bc1;
                let v_hat = v[i] / bc2;
                p[i] -= lr * m_hat / (v_hat.sqrt() + self.eps);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{MiniConfig, MiniTransformer};
    use crate::tokenizer::Tokenizer;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn tiny_model() -> MiniTransformer {
        let words: Vec<String> = ["aa", "bb", "cc", "dd"].iter().map(|s| s.to_string()).collect();
        let tokenizer = Tokenizer::from_words(&words);
        let config = MiniConfig {
            model_id: "gradcheck".into(),
            n_layers: 2,
            n_heads: 2,
            d_model: 8,
            d_head: 4,
            d_mlp: 12,
            max_seq_len: 16,
        };
        MiniTransformer::seeded(config, tokenizer, 42).unwrap()
    }

    fn tiny_example(model: &MiniTransformer) -> TrainExample {
        let tokens = model.tokenizer.encode("Q: aa\nA: bb");
        let n = tokens.len();
        let mut targets = vec![None; n];
        // supervise a couple of mid-sequence continuations
        targets[n - 2] = Some(tokens[n - 1]);
        targets[2] = Some(tokens[3]);
        TrainExample { tokens, targets }
    }

    #[test]
    fn gradients_match_central_differences() {
        let mut model = tiny_model();
        let example = tiny_example(&model);
        let (_, mut analytic) = loss_and_grad(&model, &example);

        let h = 1e-5;
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let n_params = model.params_mut().len();
        let mut checked = 0usize;
        for pi in 0..n_params {
            let len = model.params_mut()[pi].len();
            // probe a handful of indices per tensor
            for _ in 0..4.min(len) {
                let idx = rng.gen_range(0..len);
                let orig = model.params_mut()[pi][idx];

                model.params_mut()[pi][idx] = orig + h;
                let (loss_plus, _) = loss_and_grad(&model, &example);
                model.params_mut()[pi][idx] = orig - h;
                let (loss_minus, _) = loss_and_grad(&model, &example);
                model.params_mut()[pi][idx] = orig;

                let numeric = (loss_plus - loss_minus) / (2.0 * h);
                let exact = analytic.params_mut()[pi][idx];
                let abs_err = (numeric - exact).abs();
                let denom = numeric.abs().max(exact.abs()).max(1e-8);
                // 1e-9 floor covers central-difference cancellation noise
                assert!(
                    abs_err < 1e-9 || abs_err / denom < 1e-5,
                    "param tensor {pi} index {idx}: numeric {numeric:.3e} vs analytic {exact:.3e}"
                );
                checked += 1;
            }
        }
        assert!(checked > 50, "gradient check covered too few parameters");
    }

    #[test]
    fn adam_reduces_loss_on_a_fixed_example() {
        let mut model = tiny_model();
        let example = tiny_example(&model);
        let (initial, _) = loss_and_grad(&model, &example);
        let mut opt = Adam::new(&model, 3e-3, 0);
        for _ in 0..200 {
            let (_, mut grads) = loss_and_grad(&model, &example);
            opt.step(&mut model, &mut grads);
        }
        let (after, _) = loss_and_grad(&model, &example);
        assert!(
            after < initial * 0.2,
            "loss {initial:.4} -> {after:.4} did not drop"
        );
    }

    #[test]
    fn batch_grad_equals_mean_of_singles() {
        let model = tiny_model();
        let e1 = tiny_example(&model);
        let mut e2 = tiny_example(&model);
        e2.targets.rotate_left(1);
        let batch = vec![e1.clone(), e2.clone()];
        let (bl, mut bg) = batch_loss_and_grad(&model, &batch);
        let (l1, mut g1) = loss_and_grad(&model, &e1);
        let (l2, mut g2) = loss_and_grad(&model, &e2);
        assert!((bl - (l1 + l2) / 2.0).abs() < 1e-12);
        let bgp = bg.params_mut();
        let g1p = g1.params_mut();
        let g2p = g2.params_mut();
        for ((b, x), y) in bgp.iter().zip(g1p.iter()).zip(g2p.iter()) {
            for i in 0..b.len() {
                assert!((b[i] - (x[i] + y[i]) / 2.0).abs() < 1e-12);
            }
        }
    }
}
