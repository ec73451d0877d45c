//! Miniature pyramid vision transformer with an optional distillation token.
//!
//! Each level patch-embeds the previous feature map with a non-overlapping
//! `stride x stride` projection, adds a learned position embedding and runs
//! pre-norm transformer blocks whose attention subsamples keys/values with a
//! `sr x sr` projection. In student mode a distillation token is prepended to
//! the patch tokens before the blocks and split off again before the tokens
//! are reshaped into the level's feature map. Between levels the token is
//! routed as `P_l(token_in + token_out)`, where `P_l` is a learned linear map
//! when widths differ and the identity otherwise.
//!
//! Parameter names follow `backbone.level{l}.{component}.{name}` with
//! 1-based levels, e.g. `backbone.level2.block0.attn.q.weight`.

use std::collections::{BTreeMap, HashMap};
use std::rc::Rc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::config::Hyperparameters;
use crate::data::Image;
use crate::error::{Error, Result};
use crate::tensor::{Graph, Tensor, Var};

pub type ParamMap = BTreeMap<String, Tensor>;

/// Where the distillation token lives.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum TokenDesign {
    /// No token; the distillation feature is the discriminative feature.
    Shared,
    /// A token appended only at the last level.
    LastLevel,
    /// A token routed through every level.
    EveryLevel,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Mode {
    Teacher,
    Student,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BackboneConfig {
    pub image_size: usize,
    pub strides: Vec<usize>,
    pub channels: Vec<usize>,
    pub heads: Vec<usize>,
    pub sr_ratios: Vec<usize>,
    /// Transformer blocks per level.
    pub depth: usize,
    pub mlp_ratio: usize,
    pub token: TokenDesign,
}

impl BackboneConfig {
    pub fn from_hyperparameters(hp: &Hyperparameters, token: TokenDesign) -> Result<Self> {
        hp.validate()?;
        Ok(Self {
            image_size: hp.image_size,
            strides: hp.patch_strides.clone(),
            channels: hp.channels.clone(),
            heads: hp.heads.clone(),
            sr_ratios: hp.sr_ratios.clone(),
            depth: 1,
            mlp_ratio: 4,
            token,
        })
    }

    pub fn levels(&self) -> usize {
        self.strides.len()
    }

    pub fn dim(&self) -> usize {
        *self.channels.last().expect("at least one level")
    }

    /// Feature-map side after each level.
    pub fn map_sides(&self) -> Vec<usize> {
        let mut side = self.image_size;
        self.strides
            .iter()
            .map(|s| {
                side /= s;
                side
            })
            .collect()
    }

    fn token_levels(&self) -> Vec<bool> {
        let m = self.levels();
        (0..m)
            .map(|l| match self.token {
                TokenDesign::Shared => false,
                TokenDesign::LastLevel => l + 1 == m,
                TokenDesign::EveryLevel => true,
            })
            .collect()
    }

    fn validate(&self) -> Result<()> {
        let m = self.levels();
        if m == 0 || self.depth == 0 || self.mlp_ratio == 0 {
            return Err(Error::InvalidArgument(
                "backbone needs >= 1 level, depth and mlp ratio".into(),
            ));
        }
        if [self.channels.len(), self.heads.len(), self.sr_ratios.len()] != [m, m, m] {
            return Err(Error::InvalidArgument(
                "per-level lists must all have the same length".into(),
            ));
        }
        let mut side = self.image_size;
        for l in 0..m {
            let s = self.strides[l];
            if s == 0 || side % s != 0 {
                return Err(Error::InvalidArgument(format!(
                    "level {}: side {side} not divisible by stride {s}",
                    l + 1
                )));
            }
            side /= s;
            let sr = self.sr_ratios[l];
            if sr == 0 || side % sr != 0 {
                return Err(Error::InvalidArgument(format!(
                    "level {}: map side {side} not divisible by sr ratio {sr}",
                    l + 1
                )));
            }
            if self.heads[l] == 0 || self.channels[l] % self.heads[l] != 0 {
                return Err(Error::InvalidArgument(format!(
                    "level {}: width {} not divisible by {} heads",
                    l + 1,
                    self.channels[l],
                    self.heads[l]
                )));
            }
        }
        Ok(())
    }
}

/// Shapes observed at one level during a forward pass.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LevelTrace {
    pub map_side: usize,
    /// Patch tokens reshaped into the feature map.
    pub patch_tokens: usize,
    /// Tokens entering the transformer blocks.
    pub transformer_tokens: usize,
}

/// Graph handles produced by [`Backbone::forward_graph`].
#[derive(Debug)]
pub struct ForwardVars {
    /// `[B, d]` discriminative features.
    pub f: Var,
    /// `[B, d]` distillation features; `None` in teacher mode.
    pub mu: Option<Var>,
    pub params: Vec<(String, Var)>,
    pub levels: Vec<LevelTrace>,
}

/// Plain values of a forward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct BackboneOutput {
    pub f: Tensor,
    pub mu: Option<Tensor>,
}

#[derive(Debug, Clone)]
pub struct Backbone {
    config: BackboneConfig,
    params: ParamMap,
    pub(crate) ema_installed: bool,
}

fn level_key(l: usize, rest: &str) -> String {
    format!("backbone.level{}.{rest}", l + 1)
}

fn trunc_normal<R: Rng + ?Sized>(rng: &mut R, n: usize, std: f64) -> Vec<f64> {
    let normal = Normal::new(0.0, std).expect("positive std");
    (0..n)
        .map(|_| loop {
            let v = normal.sample(rng);
            if v.abs() <= 2.0 * std {
                break v;
            }
        })
        .collect()
}

struct Init<'a, R: Rng + ?Sized> {
    rng: &'a mut R,
    params: ParamMap,
}

impl<R: Rng + ?Sized> Init<'_, R> {
    fn linear(&mut self, prefix: String, fan_in: usize, fan_out: usize) {
        let w = trunc_normal(self.rng, fan_in * fan_out, 0.02);
        self.params.insert(
            format!("{prefix}.weight"),
            Tensor::new(vec![fan_in, fan_out], w).unwrap(),
        );
        self.params
            .insert(format!("{prefix}.bias"), Tensor::zeros(vec![fan_out]));
    }

    fn norm(&mut self, prefix: String, c: usize) {
        self.params.insert(
            format!("{prefix}.gamma"),
            Tensor::new(vec![c], vec![1.0; c]).unwrap(),
        );
        self.params
            .insert(format!("{prefix}.beta"), Tensor::zeros(vec![c]));
    }

    fn vector(&mut self, name: String, shape: Vec<usize>) {
        let n = shape.iter().product();
        let v = trunc_normal(self.rng, n, 0.02);
        self.params.insert(name, Tensor::new(shape, v).unwrap());
    }
}

/// Parameter handles of one attention layer.
#[derive(Debug, Clone, Copy)]
pub struct AttentionVars {
    pub q: (Var, Var),
    pub k: (Var, Var),
    pub v: (Var, Var),
    pub proj: (Var, Var),
    /// Spatial-reduction projection and its norm, when `sr_ratio > 1`.
    pub sr: Option<((Var, Var), (Var, Var))>,
}

/// Index map turning `[B, T, C]` tokens (the last `side*side` of which form
/// a row-major map) into `[B, (side/p)^2, p*p*C]` patches.
fn patchify_index(batch: usize, tokens: usize, skip: usize, side: usize, c: usize, p: usize) -> Vec<usize> {
    let ps = side / p;
    let mut idx = Vec::with_capacity(batch * side * side * c);
    for b in 0..batch {
        for pi in 0..ps {
            for pj in 0..ps {
                for di in 0..p {
                    for dj in 0..p {
                        let t = skip + (pi * p + di) * side + pj * p + dj;
                        let base = (b * tokens + t) * c;
                        idx.extend(base..base + c);
                    }
                }
            }
        }
    }
    idx
}

/// Rows `start..start+count` of every batch of `[B, T, C]`.
fn slice_rows(g: &mut Graph, x: Var, batch: usize, tokens: usize, c: usize, start: usize, count: usize) -> Result<Var> {
    let mut idx = Vec::with_capacity(batch * count * c);
    for b in 0..batch {
        let base = (b * tokens + start) * c;
        idx.extend(base..base + count * c);
    }
    g.gather(x, Rc::new(idx), vec![batch, count, c])
}

fn split_heads(g: &mut Graph, x: Var, batch: usize, t: usize, heads: usize, dh: usize) -> Result<Var> {
    if heads == 1 {
        return Ok(x);
    }
    let c = heads * dh;
    let mut idx = Vec::with_capacity(batch * t * c);
    for b in 0..batch {
        for h in 0..heads {
            for ti in 0..t {
                let base = (b * t + ti) * c + h * dh;
                idx.extend(base..base + dh);
            }
        }
    }
    g.gather(x, Rc::new(idx), vec![batch * heads, t, dh])
}

fn merge_heads(g: &mut Graph, x: Var, batch: usize, t: usize, heads: usize, dh: usize) -> Result<Var> {
    if heads == 1 {
        return Ok(x);
    }
    let mut idx = Vec::with_capacity(batch * t * heads * dh);
    for b in 0..batch {
        for ti in 0..t {
            for h in 0..heads {
                let base = ((b * heads + h) * t + ti) * dh;
                idx.extend(base..base + dh);
            }
        }
    }
    g.gather(x, Rc::new(idx), vec![batch, t, heads * dh])
}

/// Multi-head attention over `[B, T, C]` tokens whose first `extra` rows are
/// not part of the `side x side` patch map. Keys and values come from the
/// extra tokens plus the spatially reduced patch tokens.
#[allow(clippy::too_many_arguments)]
pub fn attention(
    g: &mut Graph,
    x: Var,
    batch: usize,
    extra: usize,
    side: usize,
    heads: usize,
    sr_ratio: usize,
    p: &AttentionVars,
) -> Result<Var> {
    let shape = g.value(x).shape().to_vec();
    let t = extra + side * side;
    if shape.len() != 3 || shape[0] != batch || shape[1] != t {
        return Err(Error::Shape(format!(
            "attention expects [{batch}, {t}, C], got {shape:?}"
        )));
    }
    let c = shape[2];
    if heads == 0 || c % heads != 0 {
        return Err(Error::Shape(format!("width {c} not divisible by {heads} heads")));
    }
    let dh = c / heads;
    let q = g.linear(x, p.q.0, Some(p.q.1))?;
    let kv_src = match (sr_ratio, p.sr) {
        (1, _) => x,
        (sr, Some((w, norm))) => {
            if side % sr != 0 {
                return Err(Error::Shape(format!("map side {side} not divisible by sr {sr}")));
            }
            let idx = patchify_index(batch, t, extra, side, c, sr);
            let n_red = (side / sr) * (side / sr);
            let patches = g.gather(x, Rc::new(idx), vec![batch, n_red, sr * sr * c])?;
            let red = g.linear(patches, w.0, Some(w.1))?;
            let red = g.layer_norm(red, norm.0, norm.1)?;
            if extra > 0 {
                let head = slice_rows(g, x, batch, t, c, 0, extra)?;
                g.concat_rows(head, red)?
            } else {
                red
            }
        }
        (sr, None) => {
            return Err(Error::InvalidArgument(format!(
                "sr ratio {sr} needs reduction parameters"
            )))
        }
    };
    let s = g.value(kv_src).shape()[1];
    let k = g.linear(kv_src, p.k.0, Some(p.k.1))?;
    let v = g.linear(kv_src, p.v.0, Some(p.v.1))?;
    let qh = split_heads(g, q, batch, t, heads, dh)?;
    let kh = split_heads(g, k, batch, s, heads, dh)?;
    let vh = split_heads(g, v, batch, s, heads, dh)?;
    let bh = batch * heads;
    let scores = g.matmul(qh, kh, bh, t, dh, s, true, true, vec![bh, t, s])?;
    let scores = g.scale(scores, 1.0 / (dh as f64).sqrt());
    let attn = g.softmax(scores);
    let ctx = g.matmul(attn, vh, bh, t, s, dh, false, true, vec![bh, t, dh])?;
    let ctx = merge_heads(g, ctx, batch, t, heads, dh)?;
    g.linear(ctx, p.proj.0, Some(p.proj.1))
}

/// Standalone attention layer with its own parameters, mainly for testing
/// the layer contract outside a full backbone.
#[derive(Debug, Clone)]
pub struct AttentionLayer {
    pub width: usize,
    pub heads: usize,
    pub sr_ratio: usize,
    pub params: ParamMap,
}

impl AttentionLayer {
    pub fn new<R: Rng + ?Sized>(width: usize, heads: usize, sr_ratio: usize, rng: &mut R) -> Result<Self> {
        if heads == 0 || width % heads != 0 {
            return Err(Error::Shape(format!(
                "width {width} not divisible by {heads} heads"
            )));
        }
        if sr_ratio == 0 {
            return Err(Error::InvalidArgument("sr ratio must be >= 1".into()));
        }
        let mut init = Init {
            rng,
            params: ParamMap::new(),
        };
        for n in ["q", "k", "v", "proj"] {
            init.linear(format!("attn.{n}"), width, width);
        }
        if sr_ratio > 1 {
            init.linear("attn.sr".into(), sr_ratio * sr_ratio * width, width);
            init.norm("attn.sr_norm".into(), width);
        }
        Ok(Self {
            width,
            heads,
            sr_ratio,
            params: init.params,
        })
    }

    /// `tokens` is `[N_t, C]`: `extra` leading tokens then a `side x side` map.
    pub fn forward(&self, tokens: &Tensor, extra: usize, side: usize) -> Result<Tensor> {
        let n_t = tokens.rows();
        let mut g = Graph::new();
        let x = g.constant(Tensor::new(vec![1, n_t, tokens.cols()], tokens.data().to_vec())?);
        let mut vars = HashMap::new();
        for (k, v) in &self.params {
            vars.insert(k.clone(), g.param(v.clone()));
        }
        let p = attention_vars(&vars, "attn", self.sr_ratio > 1)?;
        let y = attention(&mut g, x, 1, extra, side, self.heads, self.sr_ratio, &p)?;
        Tensor::new(vec![n_t, tokens.cols()], g.value(y).data().to_vec())
    }
}

fn lookup(vars: &HashMap<String, Var>, name: &str) -> Result<Var> {
    vars.get(name)
        .copied()
        .ok_or_else(|| Error::InvalidArgument(format!("missing parameter `{name}`")))
}

fn pair(vars: &HashMap<String, Var>, prefix: &str, a: &str, b: &str) -> Result<(Var, Var)> {
    Ok((
        lookup(vars, &format!("{prefix}.{a}"))?,
        lookup(vars, &format!("{prefix}.{b}"))?,
    ))
}

fn attention_vars(vars: &HashMap<String, Var>, prefix: &str, with_sr: bool) -> Result<AttentionVars> {
    let lin = |n: &str| pair(vars, &format!("{prefix}.{n}"), "weight", "bias");
    Ok(AttentionVars {
        q: lin("q")?,
        k: lin("k")?,
        v: lin("v")?,
        proj: lin("proj")?,
        sr: if with_sr {
            Some((lin("sr")?, pair(vars, &format!("{prefix}.sr_norm"), "gamma", "beta")?))
        } else {
            None
        },
    })
}

impl Backbone {
    pub fn new<R: Rng + ?Sized>(config: BackboneConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let mut init = Init {
            rng,
            params: ParamMap::new(),
        };
        let sides = config.map_sides();
        let token_levels = config.token_levels();
        let mut in_c = 3;
        let mut first_token = true;
        for l in 0..config.levels() {
            let (s, c) = (config.strides[l], config.channels[l]);
            init.linear(level_key(l, "patch_embed"), s * s * in_c, c);
            init.norm(level_key(l, "patch_embed.norm"), c);
            init.vector(level_key(l, "pos_embed.value"), vec![sides[l] * sides[l], c]);
            for b in 0..config.depth {
                let blk = |r: &str| level_key(l, &format!("block{b}.{r}"));
                init.norm(blk("norm1"), c);
                for n in ["q", "k", "v", "proj"] {
                    init.linear(blk(&format!("attn.{n}")), c, c);
                }
                let sr = config.sr_ratios[l];
                if sr > 1 {
                    init.linear(blk("attn.sr"), sr * sr * c, c);
                    init.norm(blk("attn.sr_norm"), c);
                }
                init.norm(blk("norm2"), c);
                init.linear(blk("mlp.fc1"), c, c * config.mlp_ratio);
                init.linear(blk("mlp.fc2"), c * config.mlp_ratio, c);
            }
            if token_levels[l] {
                if first_token {
                    init.vector(level_key(l, "token.value"), vec![c]);
                    first_token = false;
                }
                init.vector(level_key(l, "token.pos"), vec![c]);
                let next = l + 1;
                if next < config.levels() && token_levels[next] && config.channels[next] != c {
                    init.linear(level_key(l, "token_proj"), c, config.channels[next]);
                }
            }
            in_c = c;
        }
        Ok(Self {
            config,
            params: init.params,
            ema_installed: false,
        })
    }

    /// Rebuild from stored parameters, checking names and shapes.
    pub fn from_params(config: BackboneConfig, params: ParamMap) -> Result<Self> {
        let mut model = Backbone::new(config, &mut ChaCha8Rng::seed_from_u64(0))?;
        model.load_params(params)?;
        Ok(model)
    }

    pub fn config(&self) -> &BackboneConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamMap {
        &self.params
    }

    /// Replace all parameters; names and shapes must match exactly.
    pub fn load_params(&mut self, params: ParamMap) -> Result<()> {
        check_same_layout(&self.params, &params)?;
        self.params = params;
        Ok(())
    }

    pub(crate) fn params_mut(&mut self) -> &mut ParamMap {
        &mut self.params
    }

    pub fn param_count(&self) -> usize {
        self.params.values().map(Tensor::len).sum()
    }

    /// Record the forward pass on `g`. Images must all have side `image_size`.
    pub fn forward_graph(&self, g: &mut Graph, images: &[&Image], mode: Mode) -> Result<ForwardVars> {
        let cfg = &self.config;
        let batch = images.len();
        if batch == 0 {
            return Err(Error::InvalidArgument("empty image batch".into()));
        }
        let side0 = cfg.image_size;
        let mut pixels = Vec::with_capacity(batch * side0 * side0 * 3);
        for (i, img) in images.iter().enumerate() {
            if img.side() != side0 {
                return Err(Error::Shape(format!(
                    "image {i} has side {}, backbone expects {side0}",
                    img.side()
                )));
            }
            // [0, 1] -> [-1, 1]; a black patch would otherwise embed to the bias alone
            pixels.extend(img.data().iter().map(|v| 2.0 * v - 1.0));
        }
        let input = g.constant(Tensor::new(vec![batch, side0, side0, 3], pixels)?);

        let use_token = mode == Mode::Student && cfg.token != TokenDesign::Shared;
        let token_levels: Vec<bool> = cfg.token_levels().into_iter().map(|t| t && use_token).collect();
        let mut vars = HashMap::new();
        let mut params = Vec::with_capacity(self.params.len());
        for (name, value) in &self.params {
            if !use_token && name.contains(".token") {
                continue;
            }
            let v = g.param(value.clone());
            vars.insert(name.clone(), v);
            params.push((name.clone(), v));
        }

        let mut map = input;
        let mut side = side0;
        let mut in_c = 3;
        let mut token: Option<Var> = None;
        let mut traces = Vec::with_capacity(cfg.levels());
        for l in 0..cfg.levels() {
            let (s, c) = (cfg.strides[l], cfg.channels[l]);
            let next_side = side / s;
            let n = next_side * next_side;
            // patch embedding
            let idx = patchify_index(batch, side * side, 0, side, in_c, s);
            let patches = g.gather(map, Rc::new(idx), vec![batch, n, s * s * in_c])?;
            let (w, b) = pair(&vars, &level_key(l, "patch_embed"), "weight", "bias")?;
            let x = g.linear(patches, w, Some(b))?;
            let (ng, nb) = pair(&vars, &level_key(l, "patch_embed.norm"), "gamma", "beta")?;
            let x = g.layer_norm(x, ng, nb)?;
            let pos = lookup(&vars, &level_key(l, "pos_embed.value"))?;
            let mut x = g.add_broadcast(x, pos)?;

            // token entering this level
            let token_in = if token_levels[l] {
                let pos = lookup(&vars, &level_key(l, "token.pos"))?;
                let base = match token {
                    Some(t) => t,
                    None => {
                        let value = lookup(&vars, &level_key(l, "token.value"))?;
                        let idx: Vec<usize> = (0..batch * c).map(|i| i % c).collect();
                        g.gather(value, Rc::new(idx), vec![batch, 1, c])?
                    }
                };
                let t = g.add_broadcast(base, pos)?;
                x = g.concat_rows(t, x)?;
                Some(t)
            } else {
                None
            };
            let extra = usize::from(token_in.is_some());
            let t_all = n + extra;

            for blk in 0..cfg.depth {
                let key = |r: &str| level_key(l, &format!("block{blk}.{r}"));
                let (g1, b1) = pair(&vars, &key("norm1"), "gamma", "beta")?;
                let h = g.layer_norm(x, g1, b1)?;
                let av = attention_vars(&vars, &key("attn"), cfg.sr_ratios[l] > 1)?;
                let a = attention(g, h, batch, extra, next_side, cfg.heads[l], cfg.sr_ratios[l], &av)?;
                x = g.add(x, a)?;
                let (g2, b2) = pair(&vars, &key("norm2"), "gamma", "beta")?;
                let h = g.layer_norm(x, g2, b2)?;
                let (w1, bb1) = pair(&vars, &key("mlp.fc1"), "weight", "bias")?;
                let h = g.linear(h, w1, Some(bb1))?;
                let h = g.gelu(h);
                let (w2, bb2) = pair(&vars, &key("mlp.fc2"), "weight", "bias")?;
                let h = g.linear(h, w2, Some(bb2))?;
                x = g.add(x, h)?;
            }

            if !g.value(x).is_finite() {
                return Err(Error::NonFinite {
                    what: "activation".into(),
                    location: format!("level {}", l + 1),
                });
            }

            // split the token off before the reshape
            if let Some(t_in) = token_in {
                let t_out = slice_rows(g, x, batch, t_all, c, 0, 1)?;
                x = slice_rows(g, x, batch, t_all, c, 1, n)?;
                let routed = g.add(t_in, t_out)?;
                token = Some(if l + 1 < cfg.levels() && token_levels[l + 1] {
                    match vars.get(&level_key(l, "token_proj.weight")) {
                        Some(&w) => {
                            let b = lookup(&vars, &level_key(l, "token_proj.bias"))?;
                            g.linear(routed, w, Some(b))?
                        }
                        None => routed,
                    }
                } else {
                    t_out
                });
            }
            traces.push(LevelTrace {
                map_side: next_side,
                patch_tokens: n,
                transformer_tokens: t_all,
            });
            map = x;
            side = next_side;
            in_c = c;
        }

        let d = cfg.dim();
        let f = g.mean_rows(map)?;
        let mu = match (mode, cfg.token) {
            (Mode::Teacher, _) => None,
            (Mode::Student, TokenDesign::Shared) => Some(f),
            (Mode::Student, _) => {
                let t = token.expect("token routed to the last level");
                let idx: Vec<usize> = (0..batch * d).collect();
                Some(g.gather(t, Rc::new(idx), vec![batch, d])?)
            }
        };
        Ok(ForwardVars {
            f,
            mu,
            params,
            levels: traces,
        })
    }

    /// Inference in chunks; results do not depend on the chunk size.
    pub fn forward(&self, images: &[&Image], mode: Mode) -> Result<BackboneOutput> {
        const CHUNK: usize = 64;
        let d = self.config.dim();
        let mut f = Vec::with_capacity(images.len() * d);
        let mut mu: Option<Vec<f64>> = None;
        for chunk in images.chunks(CHUNK) {
            let mut g = Graph::new();
            let out = self.forward_graph(&mut g, chunk, mode)?;
            f.extend_from_slice(g.value(out.f).data());
            if let Some(m) = out.mu {
                mu.get_or_insert_with(Vec::new)
                    .extend_from_slice(g.value(m).data());
            }
        }
        let n = images.len();
        Ok(BackboneOutput {
            f: Tensor::new(vec![n, d], f)?,
            mu: mu.map(|m| Tensor::new(vec![n, d], m)).transpose()?,
        })
    }

    /// Shapes a forward pass would produce, without running one.
    pub fn level_plan(&self, mode: Mode) -> Vec<LevelTrace> {
        let use_token = mode == Mode::Student && self.config.token != TokenDesign::Shared;
        let tl = self.config.token_levels();
        self.config
            .map_sides()
            .into_iter()
            .enumerate()
            .map(|(l, side)| LevelTrace {
                map_side: side,
                patch_tokens: side * side,
                transformer_tokens: side * side + usize::from(use_token && tl[l]),
            })
            .collect()
    }
}

pub(crate) fn check_same_layout(reference: &ParamMap, other: &ParamMap) -> Result<()> {
    for (name, t) in reference {
        match other.get(name) {
            Some(o) if o.shape() == t.shape() => {}
            Some(o) => {
                return Err(Error::Shape(format!(
                    "parameter `{name}`: expected shape {:?}, got {:?}",
                    t.shape(),
                    o.shape()
                )))
            }
            None => return Err(Error::Shape(format!("missing parameter `{name}`"))),
        }
    }
    if let Some(extra) = other.keys().find(|k| !reference.contains_key(*k)) {
        return Err(Error::Shape(format!("unexpected parameter `{extra}`")));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::{desk_profile, paper_default_profile, tiny_profile};

    fn random_image(side: usize, rng: &mut ChaCha8Rng) -> Image {
        Image::new(side, (0..side * side * 3).map(|_| rng.gen::<f64>()).collect()).unwrap()
    }

    fn tiny(token: TokenDesign, seed: u64) -> Backbone {
        let cfg = BackboneConfig::from_hyperparameters(&tiny_profile(), token).unwrap();
        Backbone::new(cfg, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap()
    }

    #[test]
    fn desk_level_plan() {
        let cfg = BackboneConfig::from_hyperparameters(&desk_profile(), TokenDesign::EveryLevel).unwrap();
        let model = Backbone::new(cfg, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        let student = model.level_plan(Mode::Student);
        assert_eq!(
            student.iter().map(|t| t.patch_tokens).collect::<Vec<_>>(),
            vec![64, 16, 4]
        );
        assert_eq!(
            student.iter().map(|t| t.transformer_tokens).collect::<Vec<_>>(),
            vec![65, 17, 5]
        );
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let imgs: Vec<Image> = (0..2).map(|_| random_image(32, &mut rng)).collect();
        let refs: Vec<&Image> = imgs.iter().collect();
        let mut g = Graph::new();
        let out = model.forward_graph(&mut g, &refs, Mode::Student).unwrap();
        assert_eq!(out.levels, student);
        assert_eq!(g.value(out.f).shape(), &[2, 16]);
        assert_eq!(g.value(out.mu.unwrap()).shape(), &[2, 16]);
        let mut g = Graph::new();
        let out = model.forward_graph(&mut g, &refs, Mode::Teacher).unwrap();
        assert!(out.mu.is_none());
        assert_eq!(out.levels, model.level_plan(Mode::Teacher));
        assert!(out.levels.iter().all(|t| t.transformer_tokens == t.patch_tokens));
    }

    #[test]
    fn paper_profile_map_sides() {
        let cfg = BackboneConfig::from_hyperparameters(&paper_default_profile(), TokenDesign::EveryLevel)
            .unwrap();
        assert_eq!(cfg.map_sides(), vec![56, 28, 14, 7]);
    }

    #[test]
    fn rejects_bad_stride() {
        let mut cfg = BackboneConfig::from_hyperparameters(&desk_profile(), TokenDesign::EveryLevel).unwrap();
        cfg.strides = vec![3, 2, 2];
        assert!(Backbone::new(cfg, &mut ChaCha8Rng::seed_from_u64(0)).is_err());
    }

    #[test]
    fn rejects_wrong_image_side() {
        let model = tiny(TokenDesign::EveryLevel, 0);
        let img = Image::filled(16, [0.5; 3]);
        assert!(model.forward(&[&img], Mode::Student).is_err());
    }

    #[test]
    fn deterministic_and_chunk_independent() {
        let a = tiny(TokenDesign::EveryLevel, 3);
        let b = tiny(TokenDesign::EveryLevel, 3);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let imgs: Vec<Image> = (0..3).map(|_| random_image(8, &mut rng)).collect();
        let refs: Vec<&Image> = imgs.iter().collect();
        let oa = a.forward(&refs, Mode::Student).unwrap();
        let ob = b.forward(&refs, Mode::Student).unwrap();
        assert_eq!(oa, ob);
        let single = a.forward(&refs[1..2], Mode::Student).unwrap();
        for (x, y) in single.f.row(0).iter().zip(oa.f.row(1)) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn token_designs() {
        let shared = tiny(TokenDesign::Shared, 0);
        assert!(!shared.params().keys().any(|k| k.contains("token")));
        let img = Image::filled(8, [0.3; 3]);
        let out = shared.forward(&[&img], Mode::Student).unwrap();
        assert_eq!(out.mu.as_ref(), Some(&out.f));

        let last = tiny(TokenDesign::LastLevel, 0);
        assert!(last.params().contains_key("backbone.level2.token.value"));
        assert!(!last.params().contains_key("backbone.level1.token.pos"));
        assert_eq!(
            last.level_plan(Mode::Student)
                .iter()
                .map(|t| t.transformer_tokens)
                .collect::<Vec<_>>(),
            vec![16, 5]
        );

        let every = tiny(TokenDesign::EveryLevel, 0);
        assert!(every.params().contains_key("backbone.level1.token.value"));
        assert!(every.params().contains_key("backbone.level1.token_proj.weight"));
        assert!(every.params().contains_key("backbone.level2.token.pos"));
    }

    #[test]
    fn teacher_output_ignores_token_parameters() {
        let mut model = tiny(TokenDesign::EveryLevel, 4);
        let img = Image::filled(8, [0.7; 3]);
        let before = model.forward(&[&img], Mode::Teacher).unwrap();
        for (k, v) in model.params_mut().iter_mut() {
            if k.contains("token") {
                v.data_mut().iter_mut().for_each(|x| *x += 1.0);
            }
        }
        assert_eq!(model.forward(&[&img], Mode::Teacher).unwrap(), before);
    }

    #[test]
    fn attention_shapes_and_zero_input() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let layer = AttentionLayer::new(16, 2, 2, &mut rng).unwrap();
        let tokens = Tensor::new(vec![65, 16], (0..65 * 16).map(|i| (i as f64).sin()).collect()).unwrap();
        assert_eq!(layer.forward(&tokens, 1, 8).unwrap().shape(), &[65, 16]);
        let layer1 = AttentionLayer::new(16, 2, 1, &mut rng).unwrap();
        let zeros = Tensor::zeros(vec![65, 16]);
        assert!(layer1.forward(&zeros, 1, 8).unwrap().data().iter().all(|&v| v == 0.0));
        assert!(layer.forward(&zeros, 1, 8).unwrap().data().iter().all(|&v| v == 0.0));
        assert!(AttentionLayer::new(16, 3, 1, &mut rng).is_err());
    }

    #[test]
    fn attention_is_permutation_equivariant_without_reduction() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let layer = AttentionLayer::new(8, 2, 1, &mut rng).unwrap();
        let n = 9;
        let tokens = Tensor::new(vec![n, 8], (0..n * 8).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap();
        let mut perm: Vec<usize> = (0..n).collect();
        rand::seq::SliceRandom::shuffle(perm.as_mut_slice(), &mut rng);
        let permute = |t: &Tensor| {
            let rows: Vec<Vec<f64>> = perm.iter().map(|&p| t.row(p).to_vec()).collect();
            Tensor::from_rows(&rows).unwrap()
        };
        let a = layer.forward(&permute(&tokens), 0, 3).unwrap();
        let b = permute(&layer.forward(&tokens, 0, 3).unwrap());
        for (x, y) in a.data().iter().zip(b.data()) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn every_parameter_gets_gradient_from_mu() {
        for design in [TokenDesign::EveryLevel, TokenDesign::LastLevel] {
            let model = tiny(design, 11);
            let mut rng = ChaCha8Rng::seed_from_u64(12);
            let imgs: Vec<Image> = (0..3).map(|_| random_image(8, &mut rng)).collect();
            let refs: Vec<&Image> = imgs.iter().collect();
            let mut g = Graph::new();
            let out = model.forward_graph(&mut g, &refs, Mode::Student).unwrap();
            let mu = out.mu.unwrap();
            let seed: Vec<f64> = (0..g.value(mu).len()).map(|i| (i as f64 * 0.37).cos()).collect();
            let grads = g.backward(&[(mu, &seed)]).unwrap();
            for (name, v) in &out.params {
                let gr = grads.get(*v);
                let nonzero = gr.is_some_and(|gr| gr.iter().any(|x| x.abs() > 0.0));
                if design == TokenDesign::LastLevel && !name.starts_with("backbone.level2") {
                    // earlier levels still feed the last level's patch tokens
                    assert!(nonzero, "{design:?}: {name}");
                } else {
                    assert!(nonzero, "{design:?}: {name}");
                }
            }
        }
    }

    #[test]
    fn from_params_round_trip() {
        let model = tiny(TokenDesign::EveryLevel, 5);
        let back = Backbone::from_params(model.config().clone(), model.params().clone()).unwrap();
        assert_eq!(back.params(), model.params());
        let mut bad = model.params().clone();
        bad.remove("backbone.level1.token.value");
        assert!(Backbone::from_params(model.config().clone(), bad).is_err());
    }
}
