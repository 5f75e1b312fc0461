//! Hierarchical transformer encoder layer (forward only).
//!
//! Per head: project leaves with the weights of their signal-type tag,
//! LayerNorm queries and keys, run hierarchical attention with the value
//! payload, and take the residual step `-N√d_head · ∇φ`. Heads are
//! concatenated and projected by `W_o`, added to the input, and followed by
//! a GELU feed-forward block with its own residual. Positions are mapped by
//! one `c×c` matrix per domain kind. The tree is never changed.
//!
//! Parameter count for `T` tags, `H` heads, model width `D`, head width
//! `D_h` and position width `c`:
//!
//! ```text
//! 3·T·H·D·D_h + 4·c² + H·D_h·D + 8·D² + 5·D
//! ```

use crate::dp::{hsa_forward, DpOptions, PayloadMode};
use crate::energy::{layer_norm, LeafStates};
use crate::error::{HsaError, Result};
use crate::hierarchy::{DomainKind, SignalHierarchy};
use crate::numeric::to_json_sig17;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

/// Tag assumed for leaves that carry none.
pub const DEFAULT_TAG: &str = "default";

/// Row-major `rows × cols` matrix applied as `x · W`.
pub type Matrix = Vec<Vec<f64>>;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerConfig {
    pub d_model: usize,
    pub n_heads: usize,
    pub d_head: usize,
    pub pos_dim: usize,
    pub tags: Vec<String>,
    pub payload: PayloadMode,
}

impl LayerConfig {
    pub fn new(d_model: usize, n_heads: usize, d_head: usize, pos_dim: usize) -> Self {
        LayerConfig {
            d_model,
            n_heads,
            d_head,
            pos_dim,
            tags: vec![DEFAULT_TAG.to_string()],
            payload: PayloadMode::Values,
        }
    }

    fn validate(&self) -> Result<()> {
        if self.d_model == 0 || self.n_heads == 0 || self.d_head < 2 || self.pos_dim == 0 {
            return Err(HsaError::Config(
                "d_model, n_heads and pos_dim must be positive and d_head at least 2".into(),
            ));
        }
        if self.tags.is_empty() {
            return Err(HsaError::Config("at least one signal-type tag is required".into()));
        }
        Ok(())
    }

    pub fn param_count(&self) -> usize {
        let (t, h, d, dh, c) = (self.tags.len(), self.n_heads, self.d_model, self.d_head, self.pos_dim);
        3 * t * h * d * dh + 4 * c * c + h * dh * d + 8 * d * d + 5 * d
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HeadParams {
    pub w_q: Matrix,
    pub w_k: Matrix,
    pub w_v: Matrix,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerParams {
    pub config: LayerConfig,
    /// Per tag, one projection set per head.
    pub heads: BTreeMap<String, Vec<HeadParams>>,
    /// Per domain kind name, a `c×c` position map.
    pub pos_proj: BTreeMap<String, Matrix>,
    pub w_o: Matrix,
    pub ffn_w1: Matrix,
    pub ffn_b1: Vec<f64>,
    pub ffn_w2: Matrix,
    pub ffn_b2: Vec<f64>,
}

fn uniform(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Matrix {
    let bound = 1.0 / (rows as f64).sqrt();
    (0..rows)
        .map(|_| (0..cols).map(|_| rng.gen_range(-bound..bound)).collect())
        .collect()
}

fn shape_ok(m: &Matrix, rows: usize, cols: usize) -> bool {
    m.len() == rows && m.iter().all(|r| r.len() == cols)
}

/// `x · W`.
pub fn matvec(x: &[f64], w: &Matrix) -> Vec<f64> {
    let cols = w.first().map_or(0, Vec::len);
    let mut out = vec![0.0; cols];
    for (xi, row) in x.iter().zip(w) {
        for (o, wij) in out.iter_mut().zip(row) {
            *o += xi * wij;
        }
    }
    out
}

/// Tanh approximation of GELU.
pub fn gelu(x: f64) -> f64 {
    let c = (2.0 / std::f64::consts::PI).sqrt();
    0.5 * x * (1.0 + (c * (x + 0.044715 * x * x * x)).tanh())
}

impl LayerParams {
    /// Uniform on `±1/√fan_in` for every weight, zero biases.
    pub fn init(config: LayerConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (d, dh, c) = (config.d_model, config.d_head, config.pos_dim);
        let mut heads = BTreeMap::new();
        for tag in &config.tags {
            let per: Vec<HeadParams> = (0..config.n_heads)
                .map(|_| HeadParams {
                    w_q: uniform(&mut rng, d, dh),
                    w_k: uniform(&mut rng, d, dh),
                    w_v: uniform(&mut rng, d, dh),
                })
                .collect();
            heads.insert(tag.clone(), per);
        }
        let pos_proj = DomainKind::ALL
            .iter()
            .map(|k| (k.as_str().to_string(), uniform(&mut rng, c, c)))
            .collect();
        let w_o = uniform(&mut rng, config.n_heads * dh, d);
        let ffn_w1 = uniform(&mut rng, d, 4 * d);
        let ffn_w2 = uniform(&mut rng, 4 * d, d);
        Ok(LayerParams {
            heads,
            pos_proj,
            w_o,
            ffn_w1,
            ffn_b1: vec![0.0; 4 * d],
            ffn_w2,
            ffn_b2: vec![0.0; d],
            config,
        })
    }

    pub fn param_count(&self) -> usize {
        let heads: usize = self
            .heads
            .values()
            .flatten()
            .map(|hp| [&hp.w_q, &hp.w_k, &hp.w_v].iter().map(|m| m.iter().map(Vec::len).sum::<usize>()).sum::<usize>())
            .sum();
        let mats = |m: &Matrix| m.iter().map(Vec::len).sum::<usize>();
        heads
            + self.pos_proj.values().map(mats).sum::<usize>()
            + mats(&self.w_o)
            + mats(&self.ffn_w1)
            + self.ffn_b1.len()
            + mats(&self.ffn_w2)
            + self.ffn_b2.len()
    }

    /// Checks every shape against the config.
    pub fn validate(&self) -> Result<()> {
        let cfg = &self.config;
        cfg.validate()?;
        let (d, dh, c, h) = (cfg.d_model, cfg.d_head, cfg.pos_dim, cfg.n_heads);
        let bad = |what: &str| Err(HsaError::Config(format!("{what} has the wrong shape")));
        for tag in &cfg.tags {
            let Some(per) = self.heads.get(tag) else {
                return Err(HsaError::UnknownTag(tag.clone()));
            };
            if per.len() != h
                || per
                    .iter()
                    .any(|p| !shape_ok(&p.w_q, d, dh) || !shape_ok(&p.w_k, d, dh) || !shape_ok(&p.w_v, d, dh))
            {
                return bad(&format!("projections of tag `{tag}`"));
            }
        }
        for k in DomainKind::ALL {
            match self.pos_proj.get(k.as_str()) {
                Some(m) if shape_ok(m, c, c) => {}
                _ => return bad(&format!("position projection `{k}`")),
            }
        }
        if !shape_ok(&self.w_o, h * dh, d) {
            return bad("w_o");
        }
        if !shape_ok(&self.ffn_w1, d, 4 * d) || self.ffn_b1.len() != 4 * d {
            return bad("ffn first layer");
        }
        if !shape_ok(&self.ffn_w2, 4 * d, d) || self.ffn_b2.len() != d {
            return bad("ffn second layer");
        }
        Ok(())
    }

    pub fn to_json(&self) -> String {
        to_json_sig17(self).expect("parameter serialization cannot fail")
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let p: LayerParams = serde_json::from_str(s)?;
        p.validate()?;
        Ok(p)
    }

    fn head_for(&self, tag: Option<&str>, head: usize) -> Result<&HeadParams> {
        let tag = tag.unwrap_or(DEFAULT_TAG);
        self.heads
            .get(tag)
            .map(|per| &per[head])
            .ok_or_else(|| HsaError::UnknownTag(tag.to_string()))
    }

    /// The hierarchy with every position mapped by its family's projection.
    pub fn project_positions(&self, h: &SignalHierarchy) -> SignalHierarchy {
        h.map_positions(self.config.pos_dim, |domain, p| matvec(p, &self.pos_proj[domain.as_str()]))
    }

    /// LayerNorm'd queries and keys and raw values of one head.
    pub fn head_states(&self, h: &SignalHierarchy, head: usize) -> Result<LeafStates> {
        let n = h.n_leaves();
        let (mut q, mut k, mut v) = (Vec::with_capacity(n), Vec::with_capacity(n), Vec::with_capacity(n));
        for i in 0..n {
            let hp = self.head_for(h.leaf_tag(i), head)?;
            let x = h.leaf_features(i);
            q.push(layer_norm(&matvec(x, &hp.w_q)));
            k.push(layer_norm(&matvec(x, &hp.w_k)));
            v.push(matvec(x, &hp.w_v));
        }
        Ok(LeafStates { q, k, v })
    }

    /// `W_2 · gelu(W_1 x + b_1) + b_2`.
    pub fn ffn(&self, x: &[f64]) -> Vec<f64> {
        let mut hid = matvec(x, &self.ffn_w1);
        for (hi, b) in hid.iter_mut().zip(&self.ffn_b1) {
            *hi = gelu(*hi + b);
        }
        let mut out = matvec(&hid, &self.ffn_w2);
        for (o, b) in out.iter_mut().zip(&self.ffn_b2) {
            *o += b;
        }
        out
    }
}

/// Residual step `-N√d_head · ∇φ` of one head for every leaf.
pub fn head_update(hp: &SignalHierarchy, states: &LeafStates, payload: PayloadMode, threads: usize) -> Result<Vec<Vec<f64>>> {
    let opts = DpOptions {
        payload,
        threads,
        ..DpOptions::default()
    };
    let out = hsa_forward(hp, states, &opts)?;
    let scale = -(hp.n_leaves() as f64) * (states.dim() as f64).sqrt();
    Ok(out
        .grads
        .into_iter()
        .map(|g| g.into_iter().map(|x| scale * x).collect())
        .collect())
}

/// One encoder layer. Leaf dimension must equal `d_model`.
pub fn layer_forward(h: &SignalHierarchy, params: &LayerParams) -> Result<SignalHierarchy> {
    layer_forward_threads(h, params, 1)
}

pub fn layer_forward_threads(h: &SignalHierarchy, params: &LayerParams, threads: usize) -> Result<SignalHierarchy> {
    let cfg = &params.config;
    if h.dim() != cfg.d_model {
        return Err(HsaError::Dimension {
            what: "leaf features".into(),
            expected: cfg.d_model,
            got: h.dim(),
        });
    }
    if h.pos_dim() != cfg.pos_dim {
        return Err(HsaError::Dimension {
            what: "positions".into(),
            expected: cfg.pos_dim,
            got: h.pos_dim(),
        });
    }
    let n = h.n_leaves();
    let hp = params.project_positions(h);
    let mut concat = vec![Vec::with_capacity(cfg.n_heads * cfg.d_head); n];
    for head in 0..cfg.n_heads {
        let states = params.head_states(h, head)?;
        for (row, delta) in concat.iter_mut().zip(head_update(&hp, &states, cfg.payload, threads)?) {
            row.extend(delta);
        }
    }
    let out: Vec<Vec<f64>> = concat
        .iter()
        .enumerate()
        .map(|(i, c)| {
            let attn = matvec(c, &params.w_o);
            let x1: Vec<f64> = h.leaf_features(i).iter().zip(&attn).map(|(x, a)| x + a).collect();
            let f = params.ffn(&x1);
            x1.iter().zip(&f).map(|(x, y)| x + y).collect()
        })
        .collect();
    h.with_leaf_features(&out)
}

/// Layers applied in order; an empty stack is the identity.
pub fn stack_forward(h: &SignalHierarchy, layers: &[LayerParams]) -> Result<SignalHierarchy> {
    layers.iter().try_fold(h.clone(), |cur, p| layer_forward(&cur, p))
}

/// Mean of all leaf features.
pub fn global_pool(h: &SignalHierarchy) -> Vec<f64> {
    let mut acc = vec![0.0; h.dim()];
    for i in 0..h.n_leaves() {
        for (a, x) in acc.iter_mut().zip(h.leaf_features(i)) {
            *a += x;
        }
    }
    let n = h.n_leaves() as f64;
    acc.into_iter().map(|a| a / n).collect()
}
