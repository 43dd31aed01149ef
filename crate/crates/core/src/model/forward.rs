//! Tape-based forward passes: encoder with residual projection, mask decoder,
//! text memory, and the causal caption decoder.

use std::collections::HashMap;

use ndarray::{Array1, Array2, Array3};

use crate::autodiff::{Tape, Var};
use crate::error::{CoreError, Result};
use crate::synth_data::ClassId;

use super::{ModelConfig, ModelState};

/// Encoder feature plus the projected query/text embeddings of one pass.
#[derive(Debug, Clone)]
pub struct EmbeddingBundle {
    /// (C, H', W') residual-projected feature map.
    pub feature: Array3<f64>,
    /// (N, C_e) mask embeddings.
    pub mask_embeddings: Array2<f64>,
    /// (N_t, C_e) text embeddings (cross-attention memory).
    pub text_embeddings: Array2<f64>,
    pub query_count: usize,
    pub query_dim: usize,
}

/// Graph handles for the mask branch of one forward pass.
pub struct MaskForwardOut {
    /// Decoder output queries, (N, d).
    pub q_out: Var,
    /// Mask embeddings, (N, C_e).
    pub q_m: Var,
    /// Per-class logits, (N, K) in `class_ids` column order.
    pub class_logits: Var,
    pub class_ids: Vec<ClassId>,
    /// No-object logits, (N, 1).
    pub no_obj: Var,
    /// Mask logits, (N, P): inner product of mask embedding and pixel feature.
    pub mask_logits: Var,
}

/// One forward-graph builder over a model's parameters.
///
/// Parameters enter the tape lazily as named leaves, so gradients can be read
/// back by name after `backward`.
pub struct Forward<'a> {
    pub tape: Tape,
    pub state: &'a ModelState,
    leaves: HashMap<String, Var>,
}

impl<'a> Forward<'a> {
    pub fn new(state: &'a ModelState) -> Self {
        Self { tape: Tape::new(), state, leaves: HashMap::new() }
    }

    /// Named parameter leaf (cached).
    pub fn p(&mut self, name: &str) -> Var {
        if let Some(&v) = self.leaves.get(name) {
            return v;
        }
        let arr = self
            .state
            .params
            .get(name)
            .unwrap_or_else(|| panic!("unknown parameter `{name}`"))
            .clone();
        let v = self.tape.leaf(arr);
        self.leaves.insert(name.to_string(), v);
        v
    }

    pub fn param_vars(&self) -> &HashMap<String, Var> {
        &self.leaves
    }

    fn linear(&mut self, x: Var, prefix: &str) -> Var {
        let w = self.p(&format!("{prefix}.w"));
        let b = self.p(&format!("{prefix}.b"));
        let y = self.tape.matmul(x, w);
        self.tape.add_row_vec(y, b)
    }

    fn layer_norm(&mut self, x: Var, prefix: &str) -> Var {
        let g = self.p(&format!("{prefix}.g"));
        let b = self.p(&format!("{prefix}.b"));
        self.tape.layer_norm_rows(x, g, b)
    }

    fn attention(&mut self, prefix: &str, xq: Var, xkv: Var, causal: bool) -> Var {
        let d = self.state.cfg.embed_dim as f64;
        let q = self.linear(xq, &format!("{prefix}.wq"));
        let k = self.linear(xkv, &format!("{prefix}.wk"));
        let v = self.linear(xkv, &format!("{prefix}.wv"));
        let kt = self.tape.transpose(k);
        let scores = self.tape.matmul(q, kt);
        let mut scores = self.tape.mul_scalar(scores, 1.0 / d.sqrt());
        if causal {
            let n = self.tape.value(scores).shape()[0];
            let mut mask = Array2::zeros((n, n));
            for i in 0..n {
                for j in i + 1..n {
                    mask[[i, j]] = -1e9;
                }
            }
            let mask = self.tape.leaf2(mask);
            scores = self.tape.add(scores, mask);
        }
        let attn = self.tape.softmax_rows(scores);
        let out = self.tape.matmul(attn, v);
        self.linear(out, &format!("{prefix}.wo"))
    }

    /// Pre-norm transformer decoder layer: self-attention, cross-attention,
    /// feed-forward, each residual.
    fn decoder_layer(&mut self, prefix: &str, x: Var, mem: Var, causal_self: bool) -> Var {
        let h = self.layer_norm(x, &format!("{prefix}.ln1"));
        let sa = self.attention(&format!("{prefix}.self"), h, h, causal_self);
        let x = self.tape.add(x, sa);

        let h = self.layer_norm(x, &format!("{prefix}.ln2"));
        let ca = self.attention(&format!("{prefix}.cross"), h, mem, false);
        let x = self.tape.add(x, ca);

        let h = self.layer_norm(x, &format!("{prefix}.ln3"));
        let w1 = self.p(&format!("{prefix}.ffn.w1"));
        let b1 = self.p(&format!("{prefix}.ffn.b1"));
        let w2 = self.p(&format!("{prefix}.ffn.w2"));
        let b2 = self.p(&format!("{prefix}.ffn.b2"));
        let h1 = self.tape.matmul(h, w1);
        let h1 = self.tape.add_row_vec(h1, b1);
        let h1 = self.tape.relu(h1);
        let h2 = self.tape.matmul(h1, w2);
        let h2 = self.tape.add_row_vec(h2, b2);
        self.tape.add(x, h2)
    }

    /// Raw backbone features E(x) as a (P, d) pixel matrix. Two coordinate
    /// channels in [-1, 1] are appended to the image before the first stage.
    pub fn backbone(&mut self, image: &Array3<f64>) -> Result<(Var, usize, usize)> {
        let (c, h, w) = (image.shape()[0], image.shape()[1], image.shape()[2]);
        if c != 3 {
            return Err(CoreError::Shape(format!("expected 3 image channels, got {c}")));
        }
        let s = ModelConfig::STRIDE;
        if h % s != 0 || w % s != 0 {
            return Err(CoreError::Shape(format!(
                "image {h}x{w} not divisible by stride {s}"
            )));
        }

        let mut with_coords = Array3::zeros((5, h, w));
        with_coords.slice_mut(ndarray::s![0..3, .., ..]).assign(image);
        for y in 0..h {
            for x in 0..w {
                with_coords[[3, y, x]] = 2.0 * y as f64 / (h - 1).max(1) as f64 - 1.0;
                with_coords[[4, y, x]] = 2.0 * x as f64 / (w - 1).max(1) as f64 - 1.0;
            }
        }
        let mut x = self.tape.leaf(with_coords.into_dyn());
        for (i, stride) in [2usize, 2, 2, 1].iter().enumerate() {
            let wv = self.p(&format!("enc.conv{i}.w"));
            let bv = self.p(&format!("enc.conv{i}.b"));
            x = self.tape.conv2d(x, wv, bv, *stride, 1);
            x = self.tape.relu(x);
        }
        let d = self.state.cfg.embed_dim;
        let (h_out, w_out) = (h / s, w / s);
        let flat = self.tape.reshape(x, &[d, h_out * w_out]);
        let pix = self.tape.transpose(flat); // (P, d)
        Ok((pix, h_out, w_out))
    }

    /// Residual projection on top of the backbone:
    /// `F = theta2(relu(theta1(E(x)))) + E(x)`, returned as (P, d) pixels.
    pub fn encode(&mut self, image: &Array3<f64>) -> Result<(Var, usize, usize)> {
        let (e_pix, h_out, w_out) = self.backbone(image)?;
        let f = self.project_residual(e_pix);
        Ok((f, h_out, w_out))
    }

    /// The residual projection alone, for tests that feed a raw feature.
    pub fn project_residual(&mut self, e_pix: Var) -> Var {
        let u = self.linear(e_pix, "cce.theta1");
        let u = self.tape.relu(u);
        let v = self.linear(u, "cce.theta2");
        self.tape.add(v, e_pix)
    }

    /// Mask branch: N queries cross-attend to the pixel features; per-query
    /// mask logits are inner products of the mask embedding with each pixel.
    pub fn decode_masks(&mut self, f_pix: Var) -> MaskForwardOut {
        let queries = self.p("queries");
        let mut x = queries;
        for l in 0..self.state.cfg.decoder_layers {
            x = self.decoder_layer(&format!("maskdec.l{l}"), x, f_pix, false);
        }
        let x = self.layer_norm(x, "maskdec.out_ln");
        let q_m = self.linear(x, "mask_embed");

        let class_ids = self.state.classes.clone();
        let mut cols = Vec::with_capacity(class_ids.len());
        for c in &class_ids {
            let (wn, bn) = ModelState::head_names(*c);
            let wv = self.p(&wn);
            let bv = self.p(&bn);
            let y = self.tape.matmul(x, wv);
            cols.push(self.tape.add_row_vec(y, bv));
        }
        let class_logits = if cols.is_empty() {
            let n = self.state.cfg.queries;
            self.tape.leaf2(Array2::zeros((n, 0)))
        } else {
            self.tape.concat_cols(&cols)
        };

        let wv = self.p("noobj.w");
        let bv = self.p("noobj.b");
        let y = self.tape.matmul(x, wv);
        let no_obj = self.tape.add_row_vec(y, bv);

        let f_t = self.tape.transpose(f_pix);
        let mask_logits = self.tape.matmul(q_m, f_t);

        MaskForwardOut { q_out: x, q_m, class_logits, class_ids, no_obj, mask_logits }
    }

    /// Text embeddings: a learned projection of each decoder query plus one
    /// projected global (mean-pooled) pixel feature; (N+1, d).
    pub fn text_memory(&mut self, q_out: Var, f_pix: Var) -> Var {
        let q_mem = self.linear(q_out, "textmem.q");
        let pooled = self.tape.mean_axis0(f_pix);
        let f_mem = self.linear(pooled, "textmem.f");
        self.tape.concat_rows(&[q_mem, f_mem])
    }

    /// Teacher-forced caption logits, (L, V): row i predicts token i+1.
    /// The input must start with START and fit the positional table.
    pub fn caption_logits(&mut self, memory: Var, token_ids: &[u32]) -> Result<Var> {
        let vocab_len = self.state.vocab.len() as u32;
        if token_ids.is_empty() || token_ids[0] != self.state.vocab.start_id() {
            return Err(CoreError::Contract("caption prefix must begin with START".into()));
        }
        if token_ids.len() > self.state.cfg.max_caption_len {
            return Err(CoreError::Length(format!(
                "prefix of {} tokens exceeds max {}",
                token_ids.len(),
                self.state.cfg.max_caption_len
            )));
        }
        if let Some(bad) = token_ids.iter().find(|&&t| t >= vocab_len) {
            return Err(CoreError::Vocabulary(format!("id {bad}")));
        }

        let idx: Vec<usize> = token_ids.iter().map(|&t| t as usize).collect();
        let tok = self.p("capdec.tok_embed");
        let pos = self.p("capdec.pos_embed");
        let emb = self.tape.gather_rows(tok, &idx);
        let pos_idx: Vec<usize> = (0..idx.len()).collect();
        let pos_emb = self.tape.gather_rows(pos, &pos_idx);
        let mut x = self.tape.add(emb, pos_emb);

        for l in 0..self.state.cfg.caption_layers {
            x = self.decoder_layer(&format!("capdec.l{l}"), x, memory, true);
        }
        let x = self.layer_norm(x, "capdec.out_ln");
        let w = self.p("capdec.out.w");
        let b = self.p("capdec.out.b");
        let wt = self.tape.transpose(w);
        let logits = self.tape.matmul(x, wt);
        Ok(self.tape.add_row_vec(logits, b))
    }
}

/// Value-level outputs of one eval-mode pass.
#[derive(Debug, Clone)]
pub struct EvalOutput {
    pub bundle: EmbeddingBundle,
    /// (N, K) sigmoid class probabilities, columns follow `class_ids`.
    pub class_probs: Array2<f64>,
    pub class_ids: Vec<ClassId>,
    /// (N,) sigmoid no-object probability.
    pub no_obj: Array1<f64>,
    /// (N, P) sigmoid mask probabilities at feature resolution.
    pub mask_probs: Array2<f64>,
    pub h_out: usize,
    pub w_out: usize,
}

fn sigmoid_arr<D: ndarray::Dimension>(a: &ndarray::Array<f64, D>) -> ndarray::Array<f64, D> {
    a.mapv(|x| 1.0 / (1.0 + (-x).exp()))
}

/// Runs the full forward in eval mode and extracts plain arrays.
pub fn eval_forward(state: &ModelState, image: &Array3<f64>) -> Result<EvalOutput> {
    let mut fwd = Forward::new(state);
    let (f_pix, h_out, w_out) = fwd.encode(image)?;
    let masks = fwd.decode_masks(f_pix);
    let text_mem = fwd.text_memory(masks.q_out, f_pix);

    let d = state.cfg.embed_dim;
    let f_val: Array2<f64> = fwd.tape.value(f_pix).clone().into_dimensionality().unwrap();
    let feature =
        Array3::from_shape_fn((d, h_out, w_out), |(c, y, x)| f_val[[y * w_out + x, c]]);

    let qm: Array2<f64> = fwd.tape.value(masks.q_m).clone().into_dimensionality().unwrap();
    let qt: Array2<f64> = fwd.tape.value(text_mem).clone().into_dimensionality().unwrap();
    let class_logits: Array2<f64> =
        fwd.tape.value(masks.class_logits).clone().into_dimensionality().unwrap();
    let no_obj: Array2<f64> = fwd.tape.value(masks.no_obj).clone().into_dimensionality().unwrap();
    let mask_logits: Array2<f64> =
        fwd.tape.value(masks.mask_logits).clone().into_dimensionality().unwrap();

    Ok(EvalOutput {
        bundle: EmbeddingBundle {
            feature,
            mask_embeddings: qm.clone(),
            text_embeddings: qt,
            query_count: state.cfg.queries,
            query_dim: d,
        },
        class_probs: sigmoid_arr(&class_logits),
        class_ids: masks.class_ids,
        no_obj: sigmoid_arr(&no_obj.column(0).to_owned()),
        mask_probs: sigmoid_arr(&mask_logits),
        h_out,
        w_out,
    })
}
