//! The shared-encoder, dual-decoder network.
//!
//! One convolutional encoder (stride 8) feeds a residual channel projection;
//! the resulting feature map drives both a transformer mask decoder over N
//! learnable queries and an autoregressive caption decoder. Class scores come
//! from independent per-class sigmoid heads that grow across steps, so old
//! heads are untouched by expansion.

mod caption;
mod checkpoint;
mod forward;
pub mod infer;

pub use caption::{caption_image, decode_caption_step, generate_caption, greedy_caption};
pub use checkpoint::{load_checkpoint, save_checkpoint, CheckpointHeader};
pub use forward::{eval_forward, EmbeddingBundle, EvalOutput, Forward, MaskForwardOut};
pub use infer::{assemble_panoptic, downsample_mask, upsample_cells, PanopticPrediction};

use std::collections::BTreeMap;

use ndarray::{Array1, Array2, ArrayD};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};
use crate::rng::{rng_for, tag};
use crate::synth_data::{ClassId, COUNT_WORDS, CONNECTOR_WORD, END, START};

/// Architecture knobs. The defaults solve the synthetic task with a ~300k
/// parameter model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    /// Encoder stage widths; strides are (2, 2, 2, 1) for a total of 8.
    pub enc_channels: [usize; 4],
    /// Shared embedding width (query dim, feature channels, mask-embed dim).
    pub embed_dim: usize,
    pub queries: usize,
    pub decoder_layers: usize,
    pub caption_layers: usize,
    /// FFN hidden width as a multiple of `embed_dim`.
    pub ffn_mult: usize,
    pub max_caption_len: usize,
    /// Initial bias of class / no-object sigmoid heads.
    pub head_bias_init: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            enc_channels: [16, 32, 64, 64],
            embed_dim: 64,
            queries: 20,
            decoder_layers: 2,
            caption_layers: 2,
            ffn_mult: 2,
            max_caption_len: 24,
            head_bias_init: -2.0,
        }
    }
}

impl ModelConfig {
    pub const STRIDE: usize = 8;

    /// Tiny configuration for gradient checks and fast unit tests.
    pub fn tiny() -> Self {
        Self {
            enc_channels: [4, 6, 8, 8],
            embed_dim: 8,
            queries: 4,
            decoder_layers: 1,
            caption_layers: 1,
            ffn_mult: 2,
            max_caption_len: 12,
            head_bias_init: -1.0,
        }
    }
}

/// Token table: sentinels and function words first, then one token per
/// learned class word in learning order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Vocab {
    words: Vec<String>,
}

impl Vocab {
    pub fn base() -> Self {
        let mut words = vec![START.to_string(), END.to_string()];
        words.extend(COUNT_WORDS.iter().map(|w| w.to_string()));
        words.push(CONNECTOR_WORD.to_string());
        Self { words }
    }

    pub fn from_words(words: Vec<String>) -> Self {
        Self { words }
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    pub fn words(&self) -> &[String] {
        &self.words
    }

    pub fn id(&self, word: &str) -> Option<u32> {
        self.words.iter().position(|w| w == word).map(|i| i as u32)
    }

    pub fn word(&self, id: u32) -> Option<&str> {
        self.words.get(id as usize).map(String::as_str)
    }

    pub fn start_id(&self) -> u32 {
        0
    }

    pub fn end_id(&self) -> u32 {
        1
    }

    fn push(&mut self, word: &str) -> u32 {
        debug_assert!(self.id(word).is_none(), "duplicate vocab word {word}");
        self.words.push(word.to_string());
        (self.words.len() - 1) as u32
    }

    pub fn encode(&self, tokens: &[String]) -> Result<Vec<u32>> {
        tokens
            .iter()
            .map(|w| self.id(w).ok_or_else(|| CoreError::Vocabulary(w.clone())))
            .collect()
    }

    pub fn decode(&self, ids: &[u32]) -> Vec<String> {
        ids.iter()
            .map(|&i| self.word(i).unwrap_or("?").to_string())
            .collect()
    }
}

pub type ParamStore = BTreeMap<String, ArrayD<f64>>;

/// All trainable state plus the class/vocab bookkeeping.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelState {
    pub cfg: ModelConfig,
    pub params: ParamStore,
    /// Learned class ids in learning order; classifier-head column order.
    pub classes: Vec<ClassId>,
    pub vocab: Vocab,
}

fn normal(rng: &mut ChaCha8Rng, shape: &[usize], std: f64) -> ArrayD<f64> {
    let n: usize = shape.iter().product();
    let data: Vec<f64> = (0..n)
        .map(|_| {
            // Box-Muller
            let u1: f64 = rng.gen_range(1e-12..1.0);
            let u2: f64 = rng.gen_range(0.0..1.0);
            (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos() * std
        })
        .collect();
    ArrayD::from_shape_vec(shape.to_vec(), data).unwrap()
}

fn xavier(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> ArrayD<f64> {
    let std = (2.0 / (rows + cols) as f64).sqrt();
    normal(rng, &[rows, cols], std)
}

fn insert_attention(params: &mut ParamStore, rng: &mut ChaCha8Rng, prefix: &str, d: usize) {
    for name in ["wq", "wk", "wv", "wo"] {
        params.insert(format!("{prefix}.{name}.w"), xavier(rng, d, d));
        params.insert(format!("{prefix}.{name}.b"), ArrayD::zeros(vec![d]));
    }
}

fn insert_decoder_layer(params: &mut ParamStore, rng: &mut ChaCha8Rng, prefix: &str, d: usize, ffn: usize) {
    insert_attention(params, rng, &format!("{prefix}.self"), d);
    insert_attention(params, rng, &format!("{prefix}.cross"), d);
    for ln in ["ln1", "ln2", "ln3"] {
        params.insert(format!("{prefix}.{ln}.g"), ArrayD::from_elem(vec![d], 1.0));
        params.insert(format!("{prefix}.{ln}.b"), ArrayD::zeros(vec![d]));
    }
    params.insert(format!("{prefix}.ffn.w1"), xavier(rng, d, ffn));
    params.insert(format!("{prefix}.ffn.b1"), ArrayD::zeros(vec![ffn]));
    params.insert(format!("{prefix}.ffn.w2"), xavier(rng, ffn, d));
    params.insert(format!("{prefix}.ffn.b2"), ArrayD::zeros(vec![d]));
}

impl ModelState {
    /// Fresh model knowing `base_classes` (id, caption word) pairs.
    pub fn init(cfg: ModelConfig, base_classes: &[(ClassId, String)], seed: u64) -> Result<Self> {
        let mut rng = rng_for(&[seed, tag::INIT]);
        let d = cfg.embed_dim;
        let mut params = ParamStore::new();

        // encoder: 5 input channels (RGB + 2 coordinate channels)
        let chans = [5, cfg.enc_channels[0], cfg.enc_channels[1], cfg.enc_channels[2]];
        for (i, (&cin, &cout)) in chans.iter().zip(cfg.enc_channels.iter()).enumerate() {
            let std = (2.0 / (cin * 9) as f64).sqrt();
            params.insert(format!("enc.conv{i}.w"), normal(&mut rng, &[cout, cin, 3, 3], std));
            params.insert(format!("enc.conv{i}.b"), ArrayD::zeros(vec![cout]));
        }
        debug_assert_eq!(cfg.enc_channels[3], d, "last encoder stage must match embed_dim");

        // residual channel projection (the two linear maps)
        params.insert("cce.theta1.w".into(), xavier(&mut rng, d, d));
        params.insert("cce.theta1.b".into(), ArrayD::zeros(vec![d]));
        params.insert("cce.theta2.w".into(), xavier(&mut rng, d, d));
        params.insert("cce.theta2.b".into(), ArrayD::zeros(vec![d]));

        params.insert("queries".into(), normal(&mut rng, &[cfg.queries, d], 0.3));

        let ffn = d * cfg.ffn_mult;
        for l in 0..cfg.decoder_layers {
            insert_decoder_layer(&mut params, &mut rng, &format!("maskdec.l{l}"), d, ffn);
        }
        params.insert("maskdec.out_ln.g".into(), ArrayD::from_elem(vec![d], 1.0));
        params.insert("maskdec.out_ln.b".into(), ArrayD::zeros(vec![d]));
        params.insert("mask_embed.w".into(), xavier(&mut rng, d, d));
        params.insert("mask_embed.b".into(), ArrayD::zeros(vec![d]));

        params.insert("textmem.q.w".into(), xavier(&mut rng, d, d));
        params.insert("textmem.q.b".into(), ArrayD::zeros(vec![d]));
        params.insert("textmem.f.w".into(), xavier(&mut rng, d, d));
        params.insert("textmem.f.b".into(), ArrayD::zeros(vec![d]));

        for l in 0..cfg.caption_layers {
            insert_decoder_layer(&mut params, &mut rng, &format!("capdec.l{l}"), d, ffn);
        }
        params.insert("capdec.out_ln.g".into(), ArrayD::from_elem(vec![d], 1.0));
        params.insert("capdec.out_ln.b".into(), ArrayD::zeros(vec![d]));
        params.insert("capdec.pos_embed".into(), normal(&mut rng, &[cfg.max_caption_len, d], 0.1));

        let vocab = Vocab::base();
        params.insert("capdec.tok_embed".into(), normal(&mut rng, &[vocab.len(), d], 0.1));
        params.insert("capdec.out.w".into(), normal(&mut rng, &[vocab.len(), d], 0.1));
        params.insert("capdec.out.b".into(), ArrayD::zeros(vec![vocab.len()]));

        params.insert("noobj.w".into(), normal(&mut rng, &[d, 1], 0.05));
        params.insert("noobj.b".into(), ArrayD::from_elem(vec![1], cfg.head_bias_init));

        let mut state = Self { cfg, params, classes: Vec::new(), vocab };
        let expanded = expand_classifier(&state, base_classes, seed)?;
        state = expanded;
        Ok(state)
    }

    pub fn head_names(c: ClassId) -> (String, String) {
        (format!("cls.{c}.w"), format!("cls.{c}.b"))
    }

    pub fn num_params(&self) -> usize {
        self.params.values().map(|a| a.len()).sum()
    }

    pub fn get2(&self, name: &str) -> Array2<f64> {
        self.params[name].clone().into_dimensionality().unwrap()
    }

    pub fn get1(&self, name: &str) -> Array1<f64> {
        self.params[name].clone().into_dimensionality().unwrap()
    }

    /// Byte-stable content hash over all parameters.
    pub fn param_hash(&self) -> String {
        use sha2::{Digest, Sha256};
        let mut h = Sha256::new();
        for (name, arr) in &self.params {
            h.update(name.as_bytes());
            for v in arr.iter() {
                h.update(v.to_le_bytes());
            }
        }
        format!("{:x}", h.finalize())
    }
}

/// Deep, frozen copy of the live model: training the original never alters it.
pub fn snapshot(state: &ModelState) -> ModelState {
    state.clone()
}

/// Appends sigmoid heads (and caption tokens) for `new_classes`. Existing
/// parameters are bit-identical in the result; old-class probabilities for any
/// input are unchanged because heads are independent.
pub fn expand_classifier(
    state: &ModelState,
    new_classes: &[(ClassId, String)],
    seed: u64,
) -> Result<ModelState> {
    let mut out = state.clone();
    for (c, word) in new_classes {
        if out.classes.contains(c) {
            return Err(CoreError::Expansion(*c));
        }
        let mut rng = rng_for(&[seed, tag::EXPAND, *c as u64]);
        let d = out.cfg.embed_dim;
        let (wn, bn) = ModelState::head_names(*c);
        out.params.insert(wn, normal(&mut rng, &[d, 1], 0.05));
        out.params
            .insert(bn, ArrayD::from_elem(vec![1], out.cfg.head_bias_init));
        out.classes.push(*c);

        if out.vocab.id(word).is_none() {
            out.vocab.push(word);
            for name in ["capdec.tok_embed", "capdec.out.w"] {
                let old: Array2<f64> = out.params[name].clone().into_dimensionality().unwrap();
                let row = normal(&mut rng, &[1, d], 0.1).into_dimensionality().unwrap();
                let grown = ndarray::concatenate(ndarray::Axis(0), &[old.view(), row.view()]).unwrap();
                out.params.insert(name.to_string(), grown.into_dyn());
            }
            let old_b: Array1<f64> = out.params["capdec.out.b"].clone().into_dimensionality().unwrap();
            let mut grown = old_b.to_vec();
            grown.push(0.0);
            out.params
                .insert("capdec.out.b".into(), Array1::from_vec(grown).into_dyn());
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array3;

    pub(crate) fn test_classes(n: usize) -> Vec<(ClassId, String)> {
        (1..=n as u32).map(|c| (c, format!("word{c}"))).collect()
    }

    pub(crate) fn test_image(h: usize, w: usize, seed: u64) -> Array3<f64> {
        let mut rng = rng_for(&[seed, 0xabc]);
        let mut img = Array3::zeros((3, h, w));
        img.mapv_inplace(|_| rng.gen_range(0.0..1.0));
        img
    }

    #[test]
    fn init_is_deterministic_and_small() {
        let a = ModelState::init(ModelConfig::default(), &test_classes(6), 3).unwrap();
        let b = ModelState::init(ModelConfig::default(), &test_classes(6), 3).unwrap();
        assert_eq!(a, b);
        // encoder stack stays under the 200k budget
        let enc: usize = a
            .params
            .iter()
            .filter(|(k, _)| k.starts_with("enc.") || k.starts_with("cce."))
            .map(|(_, v)| v.len())
            .sum();
        assert!(enc < 200_000, "encoder has {enc} params");
    }

    #[test]
    fn expansion_counts_and_identity() {
        let base = ModelState::init(ModelConfig::tiny(), &test_classes(15), 3).unwrap();
        assert_eq!(base.classes.len(), 15);
        let new: Vec<(ClassId, String)> = (16..=20).map(|c| (c, format!("word{c}"))).collect();
        let grown = expand_classifier(&base, &new, 3).unwrap();
        assert_eq!(grown.classes.len(), 20);

        // empty expansion is the identity
        let same = expand_classifier(&base, &[], 3).unwrap();
        assert_eq!(same, base);

        // duplicates are rejected
        assert!(matches!(
            expand_classifier(&grown, &[(16, "word16".into())], 3),
            Err(CoreError::Expansion(16))
        ));
    }

    #[test]
    fn expansion_preserves_existing_params() {
        let base = ModelState::init(ModelConfig::tiny(), &test_classes(3), 5).unwrap();
        let grown = expand_classifier(&base, &[(9, "word9".into())], 5).unwrap();
        for (name, arr) in &base.params {
            match name.as_str() {
                "capdec.tok_embed" | "capdec.out.w" | "capdec.out.b" => {
                    // old rows are preserved exactly
                    let new = &grown.params[name];
                    for (idx, v) in arr.iter().enumerate() {
                        assert_eq!(new.as_slice().unwrap()[idx], *v);
                    }
                }
                _ => assert_eq!(&grown.params[name], arr, "{name} changed"),
            }
        }
    }

    #[test]
    fn snapshot_is_independent() {
        let mut live = ModelState::init(ModelConfig::tiny(), &test_classes(2), 8).unwrap();
        let frozen = snapshot(&live);
        let frozen2 = snapshot(&frozen);
        assert_eq!(frozen, frozen2);
        // mutate the live model
        for arr in live.params.values_mut() {
            arr.mapv_inplace(|v| v + 1.0);
        }
        assert_ne!(live, frozen);
        assert_eq!(frozen, frozen2);
    }

    #[test]
    fn vocab_roundtrip_and_errors() {
        let state = ModelState::init(ModelConfig::tiny(), &test_classes(2), 8).unwrap();
        let ids = state
            .vocab
            .encode(&["START".into(), "one".into(), "word1".into(), "END".into()])
            .unwrap();
        assert_eq!(ids[0], state.vocab.start_id());
        assert_eq!(*ids.last().unwrap(), state.vocab.end_id());
        assert!(matches!(
            state.vocab.encode(&["nope".into()]),
            Err(CoreError::Vocabulary(w)) if w == "nope"
        ));
    }
}
