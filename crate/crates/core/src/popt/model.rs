use std::collections::BTreeMap;

use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{PoptError, Result};
use crate::numerics::{ParamStore, Tape, Tensor, Var};
use crate::seed;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PoptConfig {
    pub h_dim: usize,
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub ff_dim: usize,
    /// Hidden width of the coordinate MLP.
    pub coord_hidden: usize,
    pub ln_eps: f64,
}

impl Default for PoptConfig {
    fn default() -> Self {
        Self {
            h_dim: 64,
            d_model: 96,
            n_layers: 4,
            n_heads: 4,
            ff_dim: 384,
            coord_hidden: 96,
            ln_eps: 1e-5,
        }
    }
}

impl PoptConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(PoptError::Config(m.to_string()));
        if self.h_dim == 0 || self.d_model == 0 || self.ff_dim == 0 || self.coord_hidden == 0 {
            return bad("widths must be positive");
        }
        if self.n_layers == 0 {
            return bad("need at least one layer");
        }
        if self.n_heads == 0 || self.d_model % self.n_heads != 0 {
            return bad("d_model must be divisible by n_heads");
        }
        if !(self.ln_eps > 0.0) {
            return bad("ln_eps must be positive");
        }
        Ok(())
    }
}

/// A set of channels presented together: per-channel temporal embeddings
/// (`[n_chan, h_dim]`, row-major) and electrode coordinates.
#[derive(Debug, Clone, PartialEq)]
pub struct Ensemble {
    pub channel_ids: Vec<u32>,
    pub coords: Vec<[f64; 3]>,
    pub embeddings: Vec<f64>,
    pub h_dim: usize,
}

impl Ensemble {
    pub fn new(channel_ids: Vec<u32>, coords: Vec<[f64; 3]>, embeddings: Vec<f64>, h_dim: usize) -> Result<Self> {
        let e = Self {
            channel_ids,
            coords,
            embeddings,
            h_dim,
        };
        e.validate()?;
        Ok(e)
    }

    pub fn n_chan(&self) -> usize {
        self.coords.len()
    }

    pub fn embedding(&self, i: usize) -> &[f64] {
        &self.embeddings[i * self.h_dim..(i + 1) * self.h_dim]
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.coords.len();
        if n == 0 {
            return Err(PoptError::EmptyEnsemble);
        }
        if self.channel_ids.len() != n || self.embeddings.len() != n * self.h_dim {
            return Err(PoptError::Dimension(format!(
                "{} ids, {} coords, {} embedding values at width {}",
                self.channel_ids.len(),
                n,
                self.embeddings.len(),
                self.h_dim
            )));
        }
        Ok(())
    }

    /// Reorders channels: output position `i` holds input channel `perm[i]`.
    pub fn permuted(&self, perm: &[usize]) -> Self {
        Self {
            channel_ids: perm.iter().map(|&i| self.channel_ids[i]).collect(),
            coords: perm.iter().map(|&i| self.coords[i]).collect(),
            embeddings: perm.iter().flat_map(|&i| self.embedding(i).to_vec()).collect(),
            h_dim: self.h_dim,
        }
    }
}

/// Leaves of one encoder layer.
#[derive(Debug, Clone, Copy)]
pub struct LayerVars {
    pub ln1_g: Var,
    pub ln1_b: Var,
    pub wq: Var,
    pub wk: Var,
    pub wv: Var,
    pub wo: Var,
    pub bo: Var,
    pub ln2_g: Var,
    pub ln2_b: Var,
    pub ff_w1: Var,
    pub ff_b1: Var,
    pub ff_w2: Var,
    pub ff_b2: Var,
}

/// All PopT parameters bound to a tape.
#[derive(Debug, Clone)]
pub struct PoptVars {
    pub in_w: Var,
    pub in_b: Var,
    pub coord_w1: Var,
    pub coord_b1: Var,
    pub coord_w2: Var,
    pub coord_b2: Var,
    pub cls: Var,
    pub layers: Vec<LayerVars>,
    pub final_g: Var,
    pub final_b: Var,
    pub cls_head_w: Var,
    pub cls_head_b: Var,
    pub chan_head_w: Var,
    pub chan_head_b: Var,
}

const LAYER_PARAMS: [&str; 13] = [
    "ln1.g", "ln1.b", "attn.wq", "attn.wk", "attn.wv", "attn.wo", "attn.bo", "ln2.g", "ln2.b", "ff.w1", "ff.b1",
    "ff.w2", "ff.b2",
];

impl PoptVars {
    /// Rebuilds the structured view from vars in [`PoptWeights`] store order.
    pub fn from_slice(config: &PoptConfig, vars: &[Var]) -> Result<Self> {
        let expected = 7 + config.n_layers * LAYER_PARAMS.len() + 6;
        if vars.len() != expected {
            return Err(PoptError::Dimension(format!(
                "expected {expected} parameter tensors, got {}",
                vars.len()
            )));
        }
        let mut it = vars.iter().copied();
        let mut next = || it.next().expect("length checked");
        let (in_w, in_b, coord_w1, coord_b1, coord_w2, coord_b2, cls) =
            (next(), next(), next(), next(), next(), next(), next());
        let layers = (0..config.n_layers)
            .map(|_| LayerVars {
                ln1_g: next(),
                ln1_b: next(),
                wq: next(),
                wk: next(),
                wv: next(),
                wo: next(),
                bo: next(),
                ln2_g: next(),
                ln2_b: next(),
                ff_w1: next(),
                ff_b1: next(),
                ff_w2: next(),
                ff_b2: next(),
            })
            .collect();
        Ok(Self {
            in_w,
            in_b,
            coord_w1,
            coord_b1,
            coord_w2,
            coord_b2,
            cls,
            layers,
            final_g: next(),
            final_b: next(),
            cls_head_w: next(),
            cls_head_b: next(),
            chan_head_w: next(),
            chan_head_b: next(),
        })
    }
}

/// PopT parameters: input projection, coordinate MLP, CLS embedding, pre-norm
/// encoder layers, final LayerNorm and the two pretraining heads.
#[derive(Debug, Clone, PartialEq)]
pub struct PoptWeights {
    pub config: PoptConfig,
    pub params: ParamStore,
}

fn normal(rng: &mut ChaCha8Rng, n: usize, sd: f64) -> Vec<f64> {
    let dist = Normal::new(0.0, sd).expect("positive sd");
    (0..n).map(|_| dist.sample(rng)).collect()
}

impl PoptWeights {
    pub fn init(config: &PoptConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = seed::derived_rng(seed, &[seed::tag("popt-init")]);
        let (h, d, f, c) = (config.h_dim, config.d_model, config.ff_dim, config.coord_hidden);
        let resid = 1.0 / (2.0 * config.n_layers as f64).sqrt();
        let mut p = ParamStore::new();
        let fan = |n: usize| 1.0 / (n as f64).sqrt();
        p.push("input_proj.w", vec![h, d], normal(&mut rng, h * d, fan(h)))?;
        p.push("input_proj.b", vec![d], vec![0.0; d])?;
        p.push("coord.w1", vec![3, c], normal(&mut rng, 3 * c, 1.0))?;
        p.push("coord.b1", vec![c], normal(&mut rng, c, 0.5))?;
        p.push("coord.w2", vec![c, d], normal(&mut rng, c * d, fan(c)))?;
        p.push("coord.b2", vec![d], vec![0.0; d])?;
        p.push("cls", vec![1, d], normal(&mut rng, d, 1.0))?;
        for l in 0..config.n_layers {
            let name = |s: &str| format!("layers.{l}.{s}");
            p.push(name("ln1.g"), vec![d], vec![1.0; d])?;
            p.push(name("ln1.b"), vec![d], vec![0.0; d])?;
            p.push(name("attn.wq"), vec![d, d], normal(&mut rng, d * d, fan(d)))?;
            p.push(name("attn.wk"), vec![d, d], normal(&mut rng, d * d, fan(d)))?;
            p.push(name("attn.wv"), vec![d, d], normal(&mut rng, d * d, fan(d)))?;
            p.push(name("attn.wo"), vec![d, d], normal(&mut rng, d * d, fan(d) * resid))?;
            p.push(name("attn.bo"), vec![d], vec![0.0; d])?;
            p.push(name("ln2.g"), vec![d], vec![1.0; d])?;
            p.push(name("ln2.b"), vec![d], vec![0.0; d])?;
            p.push(name("ff.w1"), vec![d, f], normal(&mut rng, d * f, fan(d)))?;
            p.push(name("ff.b1"), vec![f], vec![0.0; f])?;
            p.push(name("ff.w2"), vec![f, d], normal(&mut rng, f * d, fan(f) * resid))?;
            p.push(name("ff.b2"), vec![d], vec![0.0; d])?;
        }
        p.push("final_ln.g", vec![d], vec![1.0; d])?;
        p.push("final_ln.b", vec![d], vec![0.0; d])?;
        p.push("cls_head.w", vec![d, 1], normal(&mut rng, d, fan(d)))?;
        p.push("cls_head.b", vec![1], vec![0.0])?;
        p.push("chan_head.w", vec![d, 1], normal(&mut rng, d, fan(d)))?;
        p.push("chan_head.b", vec![1], vec![0.0])?;
        debug_assert_eq!(p.len(), 7 + config.n_layers * LAYER_PARAMS.len() + 6);
        Ok(Self {
            config: config.clone(),
            params: p,
        })
    }

    /// Wraps loaded parameters, checking names and shapes against `config`.
    pub fn from_params(config: &PoptConfig, params: ParamStore) -> Result<Self> {
        let reference = Self::init(config, 0)?;
        let want: Vec<_> = reference.params.entries().iter().map(|e| (&e.name, &e.shape)).collect();
        let got: Vec<_> = params.entries().iter().map(|e| (&e.name, &e.shape)).collect();
        if want != got {
            return Err(PoptError::ConfigMismatch(
                "parameter manifest does not match the architecture".into(),
            ));
        }
        if !params.is_finite() {
            return Err(PoptError::Config("non-finite parameter".into()));
        }
        Ok(Self {
            config: config.clone(),
            params,
        })
    }

    pub fn bind(&self, tape: &mut Tape) -> Result<PoptVars> {
        let vars = self.params.bind(tape)?;
        PoptVars::from_slice(&self.config, &vars)
    }

    /// Binds parameters as constants (no gradient).
    pub fn bind_frozen(&self, tape: &mut Tape) -> Result<PoptVars> {
        let vars = (0..self.params.len())
            .map(|i| tape.leaf(self.params.tensor(i)))
            .collect::<std::result::Result<Vec<_>, _>>()?;
        PoptVars::from_slice(&self.config, &vars)
    }

    pub fn metadata(&self, pretrain_lengths_s: &[f64]) -> BTreeMap<String, String> {
        let mut m = BTreeMap::new();
        m.insert("model".into(), "popt".into());
        m.insert(
            "popt.config".into(),
            serde_json::to_string(&self.config).expect("config serializes"),
        );
        m.insert(
            "pretrain_lengths_s".into(),
            serde_json::to_string(pretrain_lengths_s).expect("lengths serialize"),
        );
        m
    }

    /// Restores weights from checkpoint metadata + params, refusing a config
    /// that differs from `expected` when one is given.
    pub fn from_checkpoint(
        params: ParamStore,
        metadata: &BTreeMap<String, String>,
        expected: Option<&PoptConfig>,
    ) -> Result<(Self, Vec<f64>)> {
        let cfg: PoptConfig = metadata
            .get("popt.config")
            .ok_or_else(|| PoptError::ConfigMismatch("checkpoint has no popt.config".into()))
            .and_then(|s| serde_json::from_str(s).map_err(|e| PoptError::ConfigMismatch(e.to_string())))?;
        if let Some(exp) = expected {
            if exp != &cfg {
                return Err(PoptError::ConfigMismatch(format!(
                    "checkpoint architecture {cfg:?} differs from requested {exp:?}"
                )));
            }
        }
        let lengths: Vec<f64> = metadata
            .get("pretrain_lengths_s")
            .map(|s| serde_json::from_str(s).map_err(|e| PoptError::ConfigMismatch(e.to_string())))
            .transpose()?
            .unwrap_or_default();
        Ok((Self::from_params(&cfg, params)?, lengths))
    }
}

/// Output of a batched forward pass.
#[derive(Debug, Clone)]
pub struct BatchOutput {
    /// `[batch, d_model]`.
    pub cls: Var,
    /// `[sum of n_chan, d_model]`, examples concatenated in batch order.
    pub channels: Var,
    /// Row offset of each example's channels inside `channels`.
    pub channel_offsets: Vec<usize>,
}

fn wrap_layer(layer: usize) -> impl Fn(crate::numerics::NumericsError) -> PoptError {
    move |source| match source {
        crate::numerics::NumericsError::NonFinite { op } => PoptError::NonFinite { layer, op },
        other => PoptError::Numerics(other),
    }
}

/// Channel tokens: `proj(embedding) + coordMLP(coords)` for every channel of
/// every ensemble, stacked `[sum n_chan, d_model]`.
pub fn channel_tokens(tape: &mut Tape, v: &PoptVars, cfg: &PoptConfig, batch: &[&Ensemble]) -> Result<Var> {
    let mut emb = Vec::new();
    let mut coords = Vec::new();
    for e in batch {
        e.validate()?;
        if e.h_dim != cfg.h_dim {
            return Err(PoptError::Dimension(format!(
                "embedding width {} != model h_dim {}",
                e.h_dim, cfg.h_dim
            )));
        }
        emb.extend_from_slice(&e.embeddings);
        coords.extend(e.coords.iter().flatten());
    }
    let rows = coords.len() / 3;
    let emb = tape.constant(vec![rows, cfg.h_dim], emb)?;
    let xyz = tape.constant(vec![rows, 3], coords)?;
    let proj = tape.matmul(emb, v.in_w)?;
    let proj = tape.add_row(proj, v.in_b)?;
    let hid = tape.matmul(xyz, v.coord_w1)?;
    let hid = tape.add_row(hid, v.coord_b1)?;
    let hid = tape.gelu(hid)?;
    let pos = tape.matmul(hid, v.coord_w2)?;
    let pos = tape.add_row(pos, v.coord_b2)?;
    Ok(tape.add(proj, pos)?)
}

/// Interleaves a CLS row in front of each example's channel tokens.
/// Returns the `[sum (n_chan + 1), d_model]` sequence matrix and segment lengths.
pub fn with_cls(tape: &mut Tape, v: &PoptVars, tokens: Var, sizes: &[usize]) -> Result<(Var, Vec<usize>)> {
    let stack = tape.concat_rows(&[v.cls, tokens])?;
    let mut index = Vec::with_capacity(sizes.iter().sum::<usize>() + sizes.len());
    let mut off = 1;
    for &n in sizes {
        index.push(0);
        index.extend(off..off + n);
        off += n;
    }
    let seq = tape.gather_rows(stack, &index)?;
    Ok((seq, sizes.iter().map(|n| n + 1).collect()))
}

/// Pre-norm transformer encoder over `[rows, d_model]` with segment-local
/// attention, followed by the final LayerNorm.
pub fn encoder_stack(tape: &mut Tape, v: &PoptVars, cfg: &PoptConfig, x: Var, segments: &[usize]) -> Result<Var> {
    let mut x = x;
    for (l, lv) in v.layers.iter().enumerate() {
        let step = |tape: &mut Tape| -> crate::numerics::Result<Var> {
            let h = tape.layer_norm(x, lv.ln1_g, lv.ln1_b, cfg.ln_eps)?;
            let q = tape.matmul(h, lv.wq)?;
            let k = tape.matmul(h, lv.wk)?;
            let vv = tape.matmul(h, lv.wv)?;
            let a = tape.attention(q, k, vv, cfg.n_heads, segments)?;
            let o = tape.matmul(a, lv.wo)?;
            let o = tape.add_row(o, lv.bo)?;
            let x1 = tape.add(x, o)?;
            let h2 = tape.layer_norm(x1, lv.ln2_g, lv.ln2_b, cfg.ln_eps)?;
            let f = tape.matmul(h2, lv.ff_w1)?;
            let f = tape.add_row(f, lv.ff_b1)?;
            let f = tape.gelu(f)?;
            let f = tape.matmul(f, lv.ff_w2)?;
            let f = tape.add_row(f, lv.ff_b2)?;
            tape.add(x1, f)
        };
        x = step(tape).map_err(wrap_layer(l))?;
    }
    tape.layer_norm(x, v.final_g, v.final_b, cfg.ln_eps)
        .map_err(wrap_layer(cfg.n_layers))
}

/// Full forward for a batch of ensembles.
pub fn forward_batch(tape: &mut Tape, v: &PoptVars, cfg: &PoptConfig, batch: &[&Ensemble]) -> Result<BatchOutput> {
    if batch.is_empty() {
        return Err(PoptError::EmptyBatch);
    }
    let sizes: Vec<usize> = batch.iter().map(|e| e.n_chan()).collect();
    let tokens = channel_tokens(tape, v, cfg, batch)?;
    let (seq, segments) = with_cls(tape, v, tokens, &sizes)?;
    let out = encoder_stack(tape, v, cfg, seq, &segments)?;
    let mut cls_rows = Vec::with_capacity(sizes.len());
    let mut chan_rows = Vec::with_capacity(sizes.iter().sum());
    let mut channel_offsets = Vec::with_capacity(sizes.len());
    let mut row = 0;
    for &n in &sizes {
        cls_rows.push(row);
        channel_offsets.push(chan_rows.len());
        chan_rows.extend(row + 1..row + 1 + n);
        row += n + 1;
    }
    Ok(BatchOutput {
        cls: tape.gather_rows(out, &cls_rows)?,
        channels: tape.gather_rows(out, &chan_rows)?,
        channel_offsets,
    })
}

/// Token matrix of one ensemble with its channel order (row 0 is CLS).
#[derive(Debug, Clone, PartialEq)]
pub struct TokenSequence {
    pub tokens: Tensor,
    pub channel_order: Vec<u32>,
}

impl TokenSequence {
    pub fn len(&self) -> usize {
        self.tokens.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

pub fn assemble_tokens(ensemble: &Ensemble, weights: &PoptWeights) -> Result<TokenSequence> {
    let mut tape = Tape::new();
    let v = weights.bind_frozen(&mut tape)?;
    let tokens = channel_tokens(&mut tape, &v, &weights.config, &[ensemble])?;
    let (seq, _) = with_cls(&mut tape, &v, tokens, &[ensemble.n_chan()])?;
    Ok(TokenSequence {
        tokens: tape.value(seq).clone(),
        channel_order: ensemble.channel_ids.clone(),
    })
}

/// Contextualized representations of an assembled sequence:
/// `(cls_repr [d_model], channel_reprs [n_chan, d_model])`.
pub fn popt_forward(seq: &TokenSequence, weights: &PoptWeights) -> Result<(Vec<f64>, Tensor)> {
    let cfg = &weights.config;
    let (rows, d) = seq.tokens.dims2()?;
    if d != cfg.d_model || rows < 2 {
        return Err(PoptError::Dimension(format!(
            "token matrix {rows}x{d} for d_model {}",
            cfg.d_model
        )));
    }
    let mut tape = Tape::new();
    let v = weights.bind_frozen(&mut tape)?;
    let x = tape.leaf(seq.tokens.clone())?;
    let out = encoder_stack(&mut tape, &v, cfg, x, &[rows])?;
    let t = tape.value(out);
    let cls = t.row(0).to_vec();
    let chans = Tensor::matrix(rows - 1, d, t.values()[d..].to_vec())?;
    Ok((cls, chans))
}

/// Frozen CLS representations for many ensembles, `batch_size` at a time.
pub fn cls_representations(weights: &PoptWeights, ensembles: &[Ensemble], batch_size: usize) -> Result<Vec<Vec<f64>>> {
    let mut out = Vec::with_capacity(ensembles.len());
    for chunk in ensembles.chunks(batch_size.max(1)) {
        let mut tape = Tape::new();
        let v = weights.bind_frozen(&mut tape)?;
        let refs: Vec<&Ensemble> = chunk.iter().collect();
        let o = forward_batch(&mut tape, &v, &weights.config, &refs)?;
        let t = tape.value(o.cls);
        out.extend((0..chunk.len()).map(|i| t.row(i).to_vec()));
    }
    Ok(out)
}
