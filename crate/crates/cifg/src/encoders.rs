//! Encoder stacks: the trainable speech branch (frozen feature extractor,
//! learnable layer-weighted sum, CLS-token transformer) and the frozen
//! text/image pair produced by contrastive pretraining.

use ndarray::{Array2, ArrayD, Axis, IxDyn};
use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::rng::SeedSource;
use crate::tensor::{Leaves, ParamId, ParamStore, Tensor};

/// Padded batch of frame-level features with valid lengths.
///
/// Positions at or past an utterance's length are exactly zero and masked
/// out of attention.
pub struct FrameBatch {
    pub features: Tensor,
    pub lengths: Vec<usize>,
}

impl FrameBatch {
    pub fn new(features: Tensor, lengths: Vec<usize>) -> Result<FrameBatch> {
        let s = features.shape();
        if s.len() != 3 || s[0] != lengths.len() {
            return Err(Error::shape(format!(
                "frame batch [b, t, d] with b = lengths, got {:?}",
                s
            )));
        }
        if lengths.iter().any(|&l| l > s[1]) {
            return Err(Error::Data("valid length exceeds t_max".into()));
        }
        Ok(FrameBatch { features, lengths })
    }

    pub fn batch(&self) -> usize {
        self.lengths.len()
    }

    pub fn t_max(&self) -> usize {
        self.features.shape()[1]
    }

    pub fn d_model(&self) -> usize {
        self.features.shape()[2]
    }
}

fn normal_array(shape: &[usize], std: f64, rng: &mut impl Rng) -> ArrayD<f64> {
    let dist = Normal::new(0.0, std).expect("valid std");
    ArrayD::from_shape_simple_fn(IxDyn(shape), || dist.sample(rng))
}

fn linear_init(
    store: &mut ParamStore,
    name: &str,
    d_in: usize,
    d_out: usize,
    seeds: &SeedSource,
    trainable: bool,
) -> Result<(ParamId, ParamId)> {
    let mut rng = seeds.rng(name);
    let w = store.add(
        name,
        normal_array(&[d_in, d_out], 1.0 / (d_in as f64).sqrt(), &mut rng),
        trainable,
    )?;
    let b = store.add(
        &format!("{name}.bias"),
        ArrayD::zeros(IxDyn(&[d_out])),
        trainable,
    )?;
    Ok((w, b))
}

fn weight_init(
    store: &mut ParamStore,
    name: &str,
    d_in: usize,
    d_out: usize,
    seeds: &SeedSource,
    trainable: bool,
) -> Result<ParamId> {
    let mut rng = seeds.rng(name);
    store.add(
        name,
        normal_array(&[d_in, d_out], 1.0 / (d_in as f64).sqrt(), &mut rng),
        trainable,
    )
}

fn linear_forward(lv: &Leaves, w: ParamId, b: ParamId, x: &Tensor) -> Result<Tensor> {
    x.matmul(lv.get(w))?.add_row(lv.get(b))
}

/// Classic fixed sinusoidal position table, `[max_len, d]`.
pub fn sinusoidal_positions(max_len: usize, d: usize) -> Array2<f64> {
    let mut pe = Array2::<f64>::zeros((max_len, d));
    for pos in 0..max_len {
        for i in 0..d {
            let exponent = (2 * (i / 2)) as f64 / d as f64;
            let angle = pos as f64 / 10000f64.powf(exponent);
            pe[[pos, i]] = if i % 2 == 0 { angle.sin() } else { angle.cos() };
        }
    }
    pe
}

#[derive(Debug, Clone, Copy)]
pub struct TransformerConfig {
    pub n_layers: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub ffn_dim: usize,
    pub max_len: usize,
}

struct LayerParams {
    ln1_g: ParamId,
    ln1_b: ParamId,
    wq: (ParamId, ParamId),
    // no key bias: softmax rows are invariant to it, so it would be a
    // permanently zero-gradient parameter
    wk: ParamId,
    wv: (ParamId, ParamId),
    wo: (ParamId, ParamId),
    ln2_g: ParamId,
    ln2_b: ParamId,
    ff1: (ParamId, ParamId),
    ff2: (ParamId, ParamId),
}

/// Pre-norm transformer encoder with sinusoidal positions and key-side
/// padding masks. A zero-layer stack is the identity.
pub struct TransformerEncoder {
    pub cfg: TransformerConfig,
    layers: Vec<LayerParams>,
    ln_out_g: ParamId,
    ln_out_b: ParamId,
    positions: Array2<f64>,
}

impl TransformerEncoder {
    pub fn init(
        store: &mut ParamStore,
        prefix: &str,
        cfg: TransformerConfig,
        seeds: &SeedSource,
        trainable: bool,
    ) -> Result<TransformerEncoder> {
        if cfg.d_model % cfg.n_heads != 0 {
            return Err(Error::Config(format!(
                "d_model {} not divisible by heads {}",
                cfg.d_model, cfg.n_heads
            )));
        }
        let d = cfg.d_model;
        let mut layers = Vec::with_capacity(cfg.n_layers);
        for l in 0..cfg.n_layers {
            let p = |s: &str| format!("{prefix}/layer{l}/{s}");
            layers.push(LayerParams {
                ln1_g: store.add(&p("ln1.g"), ArrayD::ones(IxDyn(&[d])), trainable)?,
                ln1_b: store.add(&p("ln1.b"), ArrayD::zeros(IxDyn(&[d])), trainable)?,
                wq: linear_init(store, &p("attn.q"), d, d, seeds, trainable)?,
                wk: weight_init(store, &p("attn.k"), d, d, seeds, trainable)?,
                wv: linear_init(store, &p("attn.v"), d, d, seeds, trainable)?,
                wo: linear_init(store, &p("attn.o"), d, d, seeds, trainable)?,
                ln2_g: store.add(&p("ln2.g"), ArrayD::ones(IxDyn(&[d])), trainable)?,
                ln2_b: store.add(&p("ln2.b"), ArrayD::zeros(IxDyn(&[d])), trainable)?,
                ff1: linear_init(store, &p("ffn.w1"), d, cfg.ffn_dim, seeds, trainable)?,
                ff2: linear_init(store, &p("ffn.w2"), cfg.ffn_dim, d, seeds, trainable)?,
            });
        }
        let ln_out_g = store.add(
            &format!("{prefix}/ln_out.g"),
            ArrayD::ones(IxDyn(&[d])),
            trainable,
        )?;
        let ln_out_b = store.add(
            &format!("{prefix}/ln_out.b"),
            ArrayD::zeros(IxDyn(&[d])),
            trainable,
        )?;
        Ok(TransformerEncoder {
            cfg,
            layers,
            ln_out_g,
            ln_out_b,
            positions: sinusoidal_positions(cfg.max_len, d),
        })
    }

    /// Position rows `[start, start+len)` tiled for a batch, as a constant.
    pub fn position_slab(&self, batch: usize, len: usize) -> Result<Tensor> {
        if len > self.cfg.max_len {
            return Err(Error::Config(format!(
                "sequence length {len} exceeds positional table {}",
                self.cfg.max_len
            )));
        }
        let pe = self.positions.slice(ndarray::s![0..len, ..]).to_owned();
        let tiled = pe
            .insert_axis(Axis(0))
            .broadcast(IxDyn(&[batch, len, self.cfg.d_model]))
            .unwrap()
            .to_owned();
        Ok(Tensor::constant(tiled))
    }

    /// Encode `[b, s, d]` with a per-position attendability mask.
    /// Masked (false) positions can be attended by nobody; their own outputs
    /// are unspecified and must be masked downstream.
    pub fn forward(&self, lv: &Leaves, x: &Tensor, attendable: &[Vec<bool>]) -> Result<Tensor> {
        let s = x.shape();
        if s.len() != 3 || s[2] != self.cfg.d_model {
            return Err(Error::shape(format!("transformer input {:?}", s)));
        }
        let (b, seq, d) = (s[0], s[1], s[2]);
        if seq > self.cfg.max_len {
            return Err(Error::Config(format!(
                "sequence length {seq} exceeds positional table {}",
                self.cfg.max_len
            )));
        }
        if attendable.len() != b || attendable.iter().any(|m| m.len() != seq) {
            return Err(Error::shape("attendability mask shape mismatch"));
        }
        if self.layers.is_empty() {
            return Ok(x.clone());
        }
        let heads = self.cfg.n_heads;
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();

        // additive key mask, shared across layers: [b*h, s, s]
        let mut mask = ndarray::Array3::<f64>::zeros((b * heads, seq, seq));
        for bi in 0..b {
            for (t, &ok) in attendable[bi].iter().enumerate() {
                if !ok {
                    for h in 0..heads {
                        mask.slice_mut(ndarray::s![bi * heads + h, .., t]).fill(-1e30);
                    }
                }
            }
        }
        let mask = Tensor::constant(mask.into_dyn());

        let split_heads = |t: &Tensor| -> Result<Tensor> {
            t.reshape(&[b, seq, heads, dh])?
                .permute(&[0, 2, 1, 3])?
                .reshape(&[b * heads, seq, dh])
        };

        let mut xcur = x.clone();
        for layer in &self.layers {
            let h = xcur
                .layer_norm(lv.get(layer.ln1_g), lv.get(layer.ln1_b), 1e-5)?
                .reshape(&[b * seq, d])?;
            let q = split_heads(&linear_forward(lv, layer.wq.0, layer.wq.1, &h)?.reshape(&[b, seq, d])?)?;
            let k = split_heads(&h.matmul(lv.get(layer.wk))?.reshape(&[b, seq, d])?)?;
            let v = split_heads(&linear_forward(lv, layer.wv.0, layer.wv.1, &h)?.reshape(&[b, seq, d])?)?;
            let scores = q.bmm(&k.permute(&[0, 2, 1])?)?.mul_scalar(scale).add(&mask)?;
            let probs = scores.softmax_last()?;
            let ctx = probs
                .bmm(&v)?
                .reshape(&[b, heads, seq, dh])?
                .permute(&[0, 2, 1, 3])?
                .reshape(&[b * seq, d])?;
            let attn_out = linear_forward(lv, layer.wo.0, layer.wo.1, &ctx)?.reshape(&[b, seq, d])?;
            xcur = xcur.add(&attn_out)?;

            let h2 = xcur
                .layer_norm(lv.get(layer.ln2_g), lv.get(layer.ln2_b), 1e-5)?
                .reshape(&[b * seq, d])?;
            let f = linear_forward(lv, layer.ff1.0, layer.ff1.1, &h2)?.relu();
            let f = linear_forward(lv, layer.ff2.0, layer.ff2.1, &f)?.reshape(&[b, seq, d])?;
            xcur = xcur.add(&f)?;
        }
        xcur.layer_norm(lv.get(self.ln_out_g), lv.get(self.ln_out_b), 1e-5)
    }
}

/// Frozen conv stack standing in for a pretrained speech encoder, plus the
/// learnable softmax weights that mix its hidden layers.
pub struct SpeechFeatureExtractor {
    pub n_hidden: usize,
    pub d_in: usize,
    pub d_model: usize,
    conv_kernels: Vec<ParamId>,
    conv_biases: Vec<ParamId>,
    pub layer_logits: ParamId,
}

impl SpeechFeatureExtractor {
    pub fn init(
        store: &mut ParamStore,
        prefix: &str,
        d_in: usize,
        d_model: usize,
        n_hidden: usize,
        seeds: &SeedSource,
    ) -> Result<SpeechFeatureExtractor> {
        if n_hidden == 0 {
            return Err(Error::Config("extractor needs at least one hidden layer".into()));
        }
        let mut conv_kernels = Vec::new();
        let mut conv_biases = Vec::new();
        for l in 0..n_hidden {
            let name = format!("{prefix}/conv{l}");
            let cin = if l == 0 { d_in } else { d_model };
            let mut rng = seeds.rng(&name);
            // frozen: the stand-in "pretrained" stack is drawn once and kept
            conv_kernels.push(store.add(
                &name,
                normal_array(&[3, cin, d_model], 1.0 / (3.0 * cin as f64).sqrt(), &mut rng),
                false,
            )?);
            conv_biases.push(store.add(
                &format!("{name}.bias"),
                normal_array(&[d_model], 0.1, &mut rng),
                false,
            )?);
        }
        let layer_logits = store.add(
            &format!("{prefix}/layer_weights"),
            ArrayD::zeros(IxDyn(&[n_hidden])),
            true,
        )?;
        Ok(SpeechFeatureExtractor {
            n_hidden,
            d_in,
            d_model,
            conv_kernels,
            conv_biases,
            layer_logits,
        })
    }

    /// All hidden-layer outputs for one utterance, outside the graph.
    /// The stack is frozen, so these are constants of the run.
    pub fn hidden_layers(&self, store: &ParamStore, frames: &Array2<f64>) -> Vec<Array2<f64>> {
        let mut outs = Vec::with_capacity(self.n_hidden);
        let mut cur = frames.clone();
        for l in 0..self.n_hidden {
            let k = store
                .value(self.conv_kernels[l])
                .view()
                .into_dimensionality::<ndarray::Ix3>()
                .unwrap();
            let b = store
                .value(self.conv_biases[l])
                .view()
                .into_dimensionality::<ndarray::Ix1>()
                .unwrap();
            let t = cur.shape()[0];
            let cols = crate::tensor::im2col(&cur.view(), 3, 1, t);
            let kmat = k
                .to_shape((3 * cur.shape()[1], self.d_model))
                .unwrap()
                .to_owned();
            let mut out = cols.dot(&kmat);
            out += &b;
            out.mapv_inplace(|v| v.max(0.0));
            outs.push(out.clone());
            cur = out;
        }
        outs
    }

    /// Weighted sum of per-utterance hidden layers under softmax(logits),
    /// assembled into a padded batch. Only the logits are trainable.
    pub fn forward(
        &self,
        lv: &Leaves,
        hidden: &[Vec<Array2<f64>>],
        t_max: usize,
    ) -> Result<FrameBatch> {
        if hidden.is_empty() {
            return Err(Error::Data("empty batch".into()));
        }
        let b = hidden.len();
        let lengths: Vec<usize> = hidden
            .iter()
            .map(|h| h.first().map(|a| a.shape()[0]).unwrap_or(0))
            .collect();
        if lengths.iter().any(|&l| l == 0) {
            return Err(Error::Data("empty frame sequence".into()));
        }
        if lengths.iter().any(|&l| l > t_max) {
            return Err(Error::Data("utterance longer than t_max".into()));
        }
        let weights = lv.get(self.layer_logits).softmax_last()?;
        let mut acc: Option<Tensor> = None;
        for l in 0..self.n_hidden {
            let mut slab = ndarray::Array3::<f64>::zeros((b, t_max, self.d_model));
            for (bi, h) in hidden.iter().enumerate() {
                let t = lengths[bi];
                slab.slice_mut(ndarray::s![bi, 0..t, ..]).assign(&h[l]);
            }
            let w_l = weights.narrow(0, l, 1)?.reshape(&[])?;
            let term = Tensor::constant(slab.into_dyn()).mul_scalar_t(&w_l)?;
            acc = Some(match acc {
                None => term,
                Some(a) => a.add(&term)?,
            });
        }
        FrameBatch::new(acc.expect("n_hidden >= 1"), lengths)
    }
}

/// Bank of learnable CLS prefix vectors, `[count, d]`.
pub struct ClsBank {
    pub rows: ParamId,
    pub count: usize,
}

impl ClsBank {
    pub fn init(
        store: &mut ParamStore,
        prefix: &str,
        count: usize,
        d_model: usize,
        seeds: &SeedSource,
    ) -> Result<ClsBank> {
        let name = format!("{prefix}/cls");
        let mut rng = seeds.rng(&name);
        let rows = store.add(&name, normal_array(&[count, d_model], 0.5, &mut rng), true)?;
        Ok(ClsBank { rows, count })
    }
}

/// Prepend CLS vectors, add sinusoidal positions to the frame part, run the
/// transformer with a padding mask, and split the output back apart.
///
/// CLS rows carry no positional term: they are order-free query slots, and a
/// zero-layer stack then returns them bit-exactly.
pub fn encode_with_cls(
    lv: &Leaves,
    encoder: &TransformerEncoder,
    cls: Option<&ClsBank>,
    fb: &FrameBatch,
) -> Result<(Option<Tensor>, Tensor)> {
    let b = fb.batch();
    let t = fb.t_max();
    let c = cls.map(|c| c.count).unwrap_or(0);
    if c + t > encoder.cfg.max_len {
        return Err(Error::Config(format!(
            "cls + frames = {} exceeds positional table {}",
            c + t,
            encoder.cfg.max_len
        )));
    }
    let frames_pe = fb.features.add(&encoder.position_slab(b, t)?)?;
    let seq = match cls {
        Some(bank) => {
            let tiled = lv.get(bank.rows).tile_axis0(b)?;
            Tensor::concat(1, &[&tiled, &frames_pe])?
        }
        None => frames_pe,
    };
    let mut attendable = Vec::with_capacity(b);
    for &len in &fb.lengths {
        let mut m = vec![true; c];
        m.extend((0..t).map(|ti| ti < len));
        attendable.push(m);
    }
    let y = encoder.forward(lv, &seq, &attendable)?;
    let frames_out = y.narrow(1, c, t)?;
    let cls_out = if c > 0 { Some(y.narrow(1, 0, c)?) } else { None };
    Ok((cls_out, frames_out))
}

/// Frozen-after-pretraining text encoder over token embeddings.
pub struct TextEncoder {
    pub emb: ParamId,
    pub transformer: TransformerEncoder,
    out_w: ParamId,
    out_b: ParamId,
    pub vocab: usize,
    pub d_e: usize,
}

impl TextEncoder {
    pub fn init(
        store: &mut ParamStore,
        prefix: &str,
        vocab: usize,
        cfg: TransformerConfig,
        seeds: &SeedSource,
        trainable: bool,
    ) -> Result<TextEncoder> {
        let d_e = cfg.d_model;
        let name = format!("{prefix}/token_embedding");
        let mut rng = seeds.rng(&name);
        let emb = store.add(&name, normal_array(&[vocab, d_e], 1.0, &mut rng), trainable)?;
        let transformer =
            TransformerEncoder::init(store, &format!("{prefix}/encoder"), cfg, seeds, trainable)?;
        let (out_w, out_b) =
            linear_init(store, &format!("{prefix}/out"), d_e, d_e, seeds, trainable)?;
        Ok(TextEncoder {
            emb,
            transformer,
            out_w,
            out_b,
            vocab,
            d_e,
        })
    }

    /// Encode padded id sequences, pooling at each sequence's last valid
    /// position (the end token by construction).
    pub fn encode_ids(&self, lv: &Leaves, ids: &[Vec<usize>]) -> Result<Tensor> {
        if ids.is_empty() {
            return Err(Error::Data("empty batch".into()));
        }
        for seq in ids {
            if seq.is_empty() {
                return Err(Error::Data("empty token sequence".into()));
            }
            if let Some(&bad) = seq.iter().find(|&&i| i >= self.vocab) {
                return Err(Error::Vocab(format!(
                    "token id {bad} out of range (vocabulary {})",
                    self.vocab
                )));
            }
        }
        let b = ids.len();
        let l_max = ids.iter().map(|s| s.len()).max().unwrap();
        let mut flat = Vec::with_capacity(b * l_max);
        for seq in ids {
            flat.extend(seq.iter().copied());
            flat.extend(std::iter::repeat(0).take(l_max - seq.len()));
        }
        let embs = lv
            .get(self.emb)
            .gather_rows(&flat)?
            .reshape(&[b, l_max, self.d_e])?;
        let lengths: Vec<usize> = ids.iter().map(|s| s.len()).collect();
        self.encode_embeddings(lv, &embs, &lengths)
    }

    /// Same encoding path from continuous embeddings, so quantized vectors
    /// can flow gradients back into the speech branch while the encoder's
    /// own weights stay frozen.
    pub fn encode_embeddings(
        &self,
        lv: &Leaves,
        embs: &Tensor,
        lengths: &[usize],
    ) -> Result<Tensor> {
        let s = embs.shape();
        if s.len() != 3 || s[2] != self.d_e || s[0] != lengths.len() {
            return Err(Error::shape(format!("encode_embeddings input {:?}", s)));
        }
        let (b, l_max) = (s[0], s[1]);
        if lengths.iter().any(|&l| l == 0 || l > l_max) {
            return Err(Error::Data("invalid sequence length".into()));
        }
        let x = embs.add(&self.transformer.position_slab(b, l_max)?)?;
        let attendable: Vec<Vec<bool>> = lengths
            .iter()
            .map(|&len| (0..l_max).map(|i| i < len).collect())
            .collect();
        let y = self.transformer.forward(lv, &x, &attendable)?;
        // pool at the last valid position per item
        let mut pooled = Vec::with_capacity(b);
        for (bi, &len) in lengths.iter().enumerate() {
            pooled.push(
                y.narrow(0, bi, 1)?
                    .narrow(1, len - 1, 1)?
                    .reshape(&[1, self.d_e])?,
            );
        }
        let refs: Vec<&Tensor> = pooled.iter().collect();
        let stack = Tensor::concat(0, &refs)?;
        linear_forward(lv, self.out_w, self.out_b, &stack)
    }
}

/// Frozen-after-pretraining image feature projector.
pub struct ImageEncoder {
    w1: ParamId,
    b1: ParamId,
    w2: ParamId,
    b2: ParamId,
    pub d_img: usize,
    pub d_e: usize,
}

impl ImageEncoder {
    pub fn init(
        store: &mut ParamStore,
        prefix: &str,
        d_img: usize,
        d_hidden: usize,
        d_e: usize,
        seeds: &SeedSource,
        trainable: bool,
    ) -> Result<ImageEncoder> {
        let (w1, b1) = linear_init(store, &format!("{prefix}/fc1"), d_img, d_hidden, seeds, trainable)?;
        let (w2, b2) = linear_init(store, &format!("{prefix}/fc2"), d_hidden, d_e, seeds, trainable)?;
        Ok(ImageEncoder {
            w1,
            b1,
            w2,
            b2,
            d_img,
            d_e,
        })
    }

    pub fn forward(&self, lv: &Leaves, images: &Tensor) -> Result<Tensor> {
        let s = images.shape();
        if s.len() != 2 || s[1] != self.d_img {
            return Err(Error::shape(format!(
                "image encoder expects [b, {}], got {:?}",
                self.d_img, s
            )));
        }
        let h = linear_forward(lv, self.w1, self.b1, images)?.relu();
        linear_forward(lv, self.w2, self.b2, &h)
    }
}

/// Extract a [`FrameBatch`] from raw per-utterance feature frames.
pub fn extract_speech_features(
    extractor: &SpeechFeatureExtractor,
    store: &ParamStore,
    lv: &Leaves,
    utterances: &[Array2<f64>],
    t_max: usize,
) -> Result<FrameBatch> {
    if utterances.iter().any(|u| u.shape()[0] == 0) {
        return Err(Error::Data("empty frame sequence".into()));
    }
    let hidden: Vec<Vec<Array2<f64>>> = utterances
        .iter()
        .map(|u| extractor.hidden_layers(store, u))
        .collect();
    extractor.forward(lv, &hidden, t_max)
}
