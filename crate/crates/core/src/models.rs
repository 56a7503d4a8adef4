//! Learned per-link utility estimators.
//!
//! Two architectures map a [`NetworkState`] to one raw score per link:
//!
//! * **GCN**: mean aggregation over the closed neighborhood, dense + ReLU per
//!   layer, linear head.
//! * **TransGNN**: input projection, then per layer multi-head attention over
//!   each link's candidate set (residual + layer norm) and a feed-forward
//!   block (residual + layer norm), then a linear head. Candidate sets are the
//!   closed interference neighborhood, optionally extended by attention
//!   sampling with long-range vertices ranked by a learned bilinear score.
//!   Random-walk positional encodings can be appended to the input features.
//!
//! Node features are `[q / q_scale, r / 100, degree / (n - 1)]` where
//! `q_scale` is the running per-episode maximum backlog, floored at 1.

use std::collections::BTreeMap;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::graph::ConflictGraph;
use crate::lgs::{solve, BaselineWeight, Schedule, TieBreak, UtilityVector};
use crate::nn::{
    attention_backward, attention_forward, dense_backward, dense_forward, layer_norm, layer_norm_backward, relu,
    relu_backward, AttentionCache, Checkpoint, LayerNormCache, Mask, ModelParams, Tensor2,
};
use crate::rng;
use crate::traffic::{NetworkState, Policy, RATE_CAP};

/// Number of state features per link before positional encoding.
pub const BASE_FEATURES: usize = 3;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    Gcn,
    TransGnn,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub variant: Variant,
    pub attention_sampling: bool,
    pub positional_encoding: bool,
    pub hidden_dim: usize,
    pub num_layers: usize,
    pub num_heads: usize,
    /// Attention-sampling budget per link, including itself.
    pub sample_k: usize,
    /// Width of the positional encoding (degree + `pe_dim - 1` return
    /// probabilities).
    pub pe_dim: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self::transgnn()
    }
}

impl ModelConfig {
    pub fn transgnn() -> Self {
        Self {
            variant: Variant::TransGnn,
            attention_sampling: true,
            positional_encoding: true,
            hidden_dim: 16,
            num_layers: 2,
            num_heads: 2,
            sample_k: 8,
            pe_dim: 4,
        }
    }

    pub fn gcn() -> Self {
        Self { variant: Variant::Gcn, attention_sampling: false, positional_encoding: false, ..Self::transgnn() }
    }

    pub fn without_attention_sampling(self) -> Self {
        Self { attention_sampling: false, ..self }
    }

    pub fn without_positional_encoding(self) -> Self {
        Self { positional_encoding: false, ..self }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if self.hidden_dim == 0 || self.num_layers == 0 {
            return bad("hidden_dim and num_layers must be at least 1".into());
        }
        if self.variant == Variant::TransGnn {
            if self.num_heads == 0 || self.hidden_dim % self.num_heads != 0 {
                return bad(format!("num_heads = {} must divide hidden_dim = {}", self.num_heads, self.hidden_dim));
            }
            if self.attention_sampling && self.sample_k == 0 {
                return bad("sample_k must be at least 1".into());
            }
            if self.positional_encoding && self.pe_dim == 0 {
                return bad("pe_dim must be at least 1".into());
            }
        }
        Ok(())
    }

    pub fn uses_pe(&self) -> bool {
        self.variant == Variant::TransGnn && self.positional_encoding
    }

    pub fn uses_sampling(&self) -> bool {
        self.variant == Variant::TransGnn && self.attention_sampling
    }

    pub fn input_dim(&self) -> usize {
        BASE_FEATURES + if self.uses_pe() { self.pe_dim } else { 0 }
    }

    pub fn arch_id(&self) -> &'static str {
        match self.variant {
            Variant::Gcn => "gcn",
            Variant::TransGnn => "transgnn",
        }
    }

    /// Policy label used in reports and checkpoint file names.
    pub fn label(&self) -> String {
        match (self.variant, self.attention_sampling, self.positional_encoding) {
            (Variant::Gcn, ..) => "gcn".into(),
            (Variant::TransGnn, true, true) => "transgnn".into(),
            (Variant::TransGnn, false, true) => "transgnn_no_as".into(),
            (Variant::TransGnn, true, false) => "transgnn_no_pe".into(),
            (Variant::TransGnn, false, false) => "transgnn_no_as_no_pe".into(),
        }
    }

    /// `key = value` pairs stored in checkpoints.
    pub fn to_pairs(&self) -> Vec<(String, String)> {
        let v = match self.variant {
            Variant::Gcn => "gcn",
            Variant::TransGnn => "transgnn",
        };
        [
            ("variant", v.to_string()),
            ("attention_sampling", self.attention_sampling.to_string()),
            ("positional_encoding", self.positional_encoding.to_string()),
            ("hidden_dim", self.hidden_dim.to_string()),
            ("num_layers", self.num_layers.to_string()),
            ("num_heads", self.num_heads.to_string()),
            ("sample_k", self.sample_k.to_string()),
            ("pe_dim", self.pe_dim.to_string()),
        ]
        .into_iter()
        .map(|(k, v)| (k.to_string(), v))
        .collect()
    }

    pub fn from_pairs(pairs: &[(String, String)]) -> Result<Self> {
        let map: BTreeMap<&str, &str> = pairs.iter().map(|(k, v)| (k.as_str(), v.as_str())).collect();
        let get = |k: &str| map.get(k).copied().ok_or_else(|| Error::Checkpoint(format!("missing model key `{k}`")));
        let num = |k: &str| -> Result<usize> {
            get(k)?.parse().map_err(|_| Error::Checkpoint(format!("bad value for `{k}`")))
        };
        let flag = |k: &str| -> Result<bool> {
            get(k)?.parse().map_err(|_| Error::Checkpoint(format!("bad value for `{k}`")))
        };
        let variant = match get("variant")? {
            "gcn" => Variant::Gcn,
            "transgnn" => Variant::TransGnn,
            other => return Err(Error::Checkpoint(format!("unknown variant `{other}`"))),
        };
        let cfg = Self {
            variant,
            attention_sampling: flag("attention_sampling")?,
            positional_encoding: flag("positional_encoding")?,
            hidden_dim: num("hidden_dim")?,
            num_layers: num("num_layers")?,
            num_heads: num("num_heads")?,
            sample_k: num("sample_k")?,
            pe_dim: num("pe_dim")?,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Random-walk positional encoding: normalized degree followed by the
/// `k`-step return probabilities of the simple random walk, `k = 1..dim-1`.
/// Isolated vertices get all zeros.
pub fn positional_encoding(graph: &ConflictGraph, dim: usize) -> Tensor2 {
    let n = graph.n();
    let mut out = Tensor2::zeros(n, dim);
    if dim == 0 {
        return out;
    }
    let norm = if n > 1 { (n - 1) as f64 } else { 1.0 };
    let mut walk = Tensor2::zeros(n, n);
    for v in 0..n {
        out.set(v, 0, graph.degree(v) as f64 / norm);
        let d = graph.degree(v) as f64;
        for &u in graph.neighbors(v) {
            walk.set(v, u, 1.0 / d);
        }
    }
    let mut power = walk.clone();
    for k in 1..dim {
        for v in 0..n {
            out.set(v, k, power.get(v, v));
        }
        if k + 1 < dim {
            power = power.matmul(&walk).expect("square matrices");
        }
    }
    out
}

/// Structure-only inputs for one graph, reused across slots.
#[derive(Clone, Debug)]
pub struct GraphContext {
    /// Address and size of the graph this context was built for.
    key: (usize, usize, usize),
    degree: Vec<f64>,
    pe: Option<Tensor2>,
}

impl GraphContext {
    pub fn new(graph: &ConflictGraph, config: &ModelConfig) -> Self {
        let n = graph.n();
        let norm = if n > 1 { (n - 1) as f64 } else { 1.0 };
        Self {
            key: Self::key_of(graph),
            degree: (0..n).map(|v| graph.degree(v) as f64 / norm).collect(),
            pe: config.uses_pe().then(|| positional_encoding(graph, config.pe_dim)),
        }
    }

    fn key_of(graph: &ConflictGraph) -> (usize, usize, usize) {
        (graph as *const ConflictGraph as usize, graph.n(), graph.edge_count())
    }

    /// `true` if this context was built for `graph`.
    pub fn matches(&self, graph: &ConflictGraph) -> bool {
        self.key == Self::key_of(graph)
    }

    /// Feature matrix for a state with the given backlog normalizer.
    pub fn features(&self, q: &[f64], r: &[f64], queue_scale: f64) -> Result<Tensor2> {
        let n = self.degree.len();
        if q.len() != n || r.len() != n {
            return Err(shape_err("features", format!("{} queues, {} rates for {n} links", q.len(), r.len())));
        }
        let scale = queue_scale.max(1.0);
        let mut base = Tensor2::zeros(n, BASE_FEATURES);
        for v in 0..n {
            base.row_mut(v).copy_from_slice(&[q[v] / scale, r[v] / RATE_CAP, self.degree[v]]);
        }
        match &self.pe {
            Some(pe) => base.hcat(pe),
            None => Ok(base),
        }
    }
}

/// Candidate attention targets per link: itself, every interference neighbor,
/// then the best-scoring other links until `k` are reached. Scores are
/// `ReLU(x_v^T B x_j)`; ties fall back to the raw score and then the lower
/// index. Returned sets are sorted.
pub fn attention_sampling(graph: &ConflictGraph, features: &Tensor2, bilinear: &Tensor2, k: usize) -> Result<Vec<Vec<usize>>> {
    let n = graph.n();
    if features.rows() != n || bilinear.shape() != (features.cols(), features.cols()) {
        return Err(shape_err(
            "attention_sampling",
            format!("features {:?}, bilinear {:?}, n = {n}", features.shape(), bilinear.shape()),
        ));
    }
    let scores = features.matmul(bilinear)?.matmul_nt(features)?;
    let mut sets = Vec::with_capacity(n);
    let mut member = vec![false; n];
    for v in 0..n {
        let mut set: Vec<usize> = std::iter::once(v).chain(graph.neighbors(v).iter().copied()).collect();
        for &u in &set {
            member[u] = true;
        }
        if set.len() < k {
            let mut others: Vec<usize> = (0..n).filter(|&j| !member[j]).collect();
            others.sort_by(|&a, &b| {
                let (sa, sb) = (scores.get(v, a), scores.get(v, b));
                sb.max(0.0).total_cmp(&sa.max(0.0)).then(sb.total_cmp(&sa)).then(a.cmp(&b))
            });
            let fill = k - set.len();
            set.extend(others.into_iter().take(fill));
        }
        for &u in &set {
            member[u] = false;
        }
        set.sort_unstable();
        sets.push(set);
    }
    Ok(sets)
}

fn closed_neighborhoods(graph: &ConflictGraph) -> Vec<Vec<usize>> {
    (0..graph.n())
        .map(|v| {
            let mut s: Vec<usize> = std::iter::once(v).chain(graph.neighbors(v).iter().copied()).collect();
            s.sort_unstable();
            s
        })
        .collect()
}

fn mask_from_sets(sets: &[Vec<usize>]) -> Mask {
    let n = sets.len();
    let mut mask = Mask::new(n, n, false);
    for (v, set) in sets.iter().enumerate() {
        for &u in set {
            mask.set(v, u, true);
        }
    }
    mask
}

/// Mean over the closed neighborhood.
fn aggregate(graph: &ConflictGraph, h: &Tensor2) -> Tensor2 {
    let mut out = Tensor2::zeros(h.rows(), h.cols());
    for v in 0..graph.n() {
        let inv = 1.0 / (graph.degree(v) + 1) as f64;
        let row = out.row_mut(v);
        for u in std::iter::once(v).chain(graph.neighbors(v).iter().copied()) {
            for (o, x) in row.iter_mut().zip(h.row(u)) {
                *o += x * inv;
            }
        }
    }
    out
}

/// Adjoint of [`aggregate`].
fn aggregate_adjoint(graph: &ConflictGraph, d: &Tensor2) -> Tensor2 {
    let mut out = Tensor2::zeros(d.rows(), d.cols());
    for v in 0..graph.n() {
        let inv = 1.0 / (graph.degree(v) + 1) as f64;
        for u in std::iter::once(v).chain(graph.neighbors(v).iter().copied()) {
            for (o, x) in out.row_mut(u).iter_mut().zip(d.row(v)) {
                *o += x * inv;
            }
        }
    }
    out
}

fn glorot(rows: usize, cols: usize, rng: &mut rng::Rng) -> Tensor2 {
    let a = (6.0 / (rows + cols) as f64).sqrt();
    Tensor2::from_vec(rows, cols, (0..rows * cols).map(|_| rng.random_range(-a..a)).collect())
        .expect("sized buffer")
}

/// Architecture plus weights.
#[derive(Clone, Debug, PartialEq)]
pub struct UtilityModel {
    pub config: ModelConfig,
    pub params: ModelParams,
}

impl UtilityModel {
    /// Glorot-initialized weights, unit layer-norm gains, zero biases and a
    /// zero output head (so a fresh model scores every link equally).
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = rng::rng_from(seed);
        let d = config.hidden_dim;
        let f = config.input_dim();
        let mut p = ModelParams::new();
        match config.variant {
            Variant::Gcn => {
                for l in 0..config.num_layers {
                    let fan_in = if l == 0 { f } else { d };
                    p.push(format!("gcn{l}.w"), glorot(fan_in, d, &mut rng));
                    p.push(format!("gcn{l}.b"), Tensor2::zeros(1, d));
                }
            }
            Variant::TransGnn => {
                if config.attention_sampling {
                    p.push("sample.bilinear", glorot(f, f, &mut rng));
                }
                p.push("input.w", glorot(f, d, &mut rng));
                p.push("input.b", Tensor2::zeros(1, d));
                for l in 0..config.num_layers {
                    for m in ["wq", "wk", "wv", "wo"] {
                        p.push(format!("l{l}.{m}"), glorot(d, d, &mut rng));
                    }
                    p.push(format!("l{l}.bo"), Tensor2::zeros(1, d));
                    p.push(format!("l{l}.ln1.g"), Tensor2::filled(1, d, 1.0));
                    p.push(format!("l{l}.ln1.b"), Tensor2::zeros(1, d));
                    p.push(format!("l{l}.ff1.w"), glorot(d, 2 * d, &mut rng));
                    p.push(format!("l{l}.ff1.b"), Tensor2::zeros(1, 2 * d));
                    p.push(format!("l{l}.ff2.w"), glorot(2 * d, d, &mut rng));
                    p.push(format!("l{l}.ff2.b"), Tensor2::zeros(1, d));
                    p.push(format!("l{l}.ln2.g"), Tensor2::filled(1, d, 1.0));
                    p.push(format!("l{l}.ln2.b"), Tensor2::zeros(1, d));
                }
            }
        }
        p.push("head.w", Tensor2::zeros(d, 1));
        p.push("head.b", Tensor2::zeros(1, 1));
        Ok(Self { config, params: p })
    }

    /// Rebuild a model from a checkpoint, checking the layout against the
    /// stored configuration.
    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let config = ModelConfig::from_pairs(&ck.meta)?;
        if ck.arch != config.arch_id() {
            return Err(Error::Checkpoint(format!("architecture `{}` does not match config `{}`", ck.arch, config.arch_id())));
        }
        let reference = Self::init(config, 0)?;
        if reference.params.layout() != ck.params.layout() {
            return Err(Error::Checkpoint(format!("tensor layout does not match a `{}` model", config.label())));
        }
        Ok(Self { config, params: ck.params.clone() })
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        Checkpoint { arch: self.config.arch_id().into(), meta: self.config.to_pairs(), params: self.params.clone() }
    }

    /// Raw per-link scores.
    pub fn scores(&self, graph: &ConflictGraph, features: &Tensor2) -> Result<Vec<f64>> {
        Ok(self.forward(graph, features)?.output)
    }

    /// Scores for a standalone state, normalizing queues by the state's own
    /// maximum backlog.
    pub fn utilities(&self, state: &NetworkState<'_>) -> Result<UtilityVector> {
        let ctx = GraphContext::new(state.graph, &self.config);
        let scale = state.q.iter().copied().fold(1.0, f64::max);
        let x = ctx.features(&state.q, &state.r, scale)?;
        UtilityVector::new(self.scores(state.graph, &x)?)
    }

    /// Candidate sets the attention layers will use for these features.
    pub fn candidate_sets(&self, graph: &ConflictGraph, features: &Tensor2) -> Result<Vec<Vec<usize>>> {
        if self.config.uses_sampling() {
            attention_sampling(graph, features, self.params.get("sample.bilinear"), self.config.sample_k)
        } else {
            Ok(closed_neighborhoods(graph))
        }
    }

    fn forward(&self, graph: &ConflictGraph, x: &Tensor2) -> Result<Forward> {
        if x.cols() != self.config.input_dim() || x.rows() != graph.n() {
            return Err(shape_err("forward", format!("features {:?}, expected {} columns", x.shape(), self.config.input_dim())));
        }
        match self.config.variant {
            Variant::Gcn => self.forward_gcn(graph, x),
            Variant::TransGnn => self.forward_transgnn(graph, x),
        }
    }

    fn head(&self, h: &Tensor2) -> Result<Vec<f64>> {
        Ok(dense_forward(h, self.params.get("head.w"), self.params.get("head.b"))?.into_vec())
    }

    fn forward_gcn(&self, graph: &ConflictGraph, x: &Tensor2) -> Result<Forward> {
        let p = &self.params;
        let mut h = x.clone();
        let mut layers = Vec::with_capacity(self.config.num_layers);
        for l in 0..self.config.num_layers {
            let agg = aggregate(graph, &h);
            let pre = dense_forward(&agg, p.get(&format!("gcn{l}.w")), p.get(&format!("gcn{l}.b")))?;
            h = relu(&pre);
            layers.push(LayerCache::Gcn { agg, pre });
        }
        let output = self.head(&h)?;
        Ok(Forward { input: x.clone(), layers, last_hidden: h, output })
    }

    fn forward_transgnn(&self, graph: &ConflictGraph, x: &Tensor2) -> Result<Forward> {
        let p = &self.params;
        let d = self.config.hidden_dim;
        let heads = self.config.num_heads;
        let dh = d / heads;
        let mask = mask_from_sets(&self.candidate_sets(graph, x)?);
        let mut h = dense_forward(x, p.get("input.w"), p.get("input.b"))?;
        let mut layers = Vec::with_capacity(self.config.num_layers);
        for l in 0..self.config.num_layers {
            let name = |s: &str| format!("l{l}.{s}");
            let q = h.matmul(p.get(&name("wq")))?;
            let k = h.matmul(p.get(&name("wk")))?;
            let v = h.matmul(p.get(&name("wv")))?;
            let mut concat = Tensor2::zeros(h.rows(), d);
            let mut attn = Vec::with_capacity(heads);
            for hd in 0..heads {
                let (qh, kh, vh) = (q.col_block(hd * dh, dh), k.col_block(hd * dh, dh), v.col_block(hd * dh, dh));
                let (out, cache) = attention_forward(&qh, &kh, &vh, &mask)?;
                concat.set_col_block(hd * dh, &out);
                attn.push(cache);
            }
            let a = dense_forward(&concat, p.get(&name("wo")), p.get(&name("bo")))?;
            let (h1, ln1) = layer_norm(&h.add(&a)?, p.get(&name("ln1.g")), p.get(&name("ln1.b")))?;
            let ff_pre = dense_forward(&h1, p.get(&name("ff1.w")), p.get(&name("ff1.b")))?;
            let ff_act = relu(&ff_pre);
            let ff_out = dense_forward(&ff_act, p.get(&name("ff2.w")), p.get(&name("ff2.b")))?;
            let (h2, ln2) = layer_norm(&h1.add(&ff_out)?, p.get(&name("ln2.g")), p.get(&name("ln2.b")))?;
            layers.push(LayerCache::Attention { input: h, q, k, v, attn, concat, h1, ln1, ff_pre, ff_act, ln2 });
            h = h2;
        }
        let output = self.head(&h)?;
        Ok(Forward { input: x.clone(), layers, last_hidden: h, output })
    }

    /// Scores and the gradient of `sum_v dscore[v] * score[v]` with respect
    /// to every parameter. The sampling bilinear form only selects candidate
    /// sets, so its gradient is zero almost everywhere.
    pub fn scores_and_grad(
        &self,
        graph: &ConflictGraph,
        features: &Tensor2,
        dscore: &[f64],
    ) -> Result<(Vec<f64>, ModelParams)> {
        let fwd = self.forward(graph, features)?;
        let n = graph.n();
        if dscore.len() != n {
            return Err(shape_err("scores_and_grad", format!("{} upstream gradients for {n} links", dscore.len())));
        }
        let p = &self.params;
        let mut g = p.zeros_like();
        let dz = Tensor2::from_vec(n, 1, dscore.to_vec())?;
        let (mut dh, dw, db) = dense_backward(&fwd.last_hidden, p.get("head.w"), &dz)?;
        g.accumulate("head.w", &dw)?;
        g.accumulate("head.b", &db)?;

        for (l, cache) in fwd.layers.iter().enumerate().rev() {
            dh = match cache {
                LayerCache::Gcn { agg, pre } => {
                    let dpre = relu_backward(pre, &dh);
                    let (dagg, dw, db) = dense_backward(agg, p.get(&format!("gcn{l}.w")), &dpre)?;
                    g.accumulate(&format!("gcn{l}.w"), &dw)?;
                    g.accumulate(&format!("gcn{l}.b"), &db)?;
                    aggregate_adjoint(graph, &dagg)
                }
                LayerCache::Attention { input, q, k, v, attn, concat, h1, ln1, ff_pre, ff_act, ln2 } => {
                    self.attention_layer_backward(l, &mut g, &dh, input, q, k, v, attn, concat, h1, ln1, ff_pre, ff_act, ln2)?
                }
            };
        }

        if self.config.variant == Variant::TransGnn {
            let (_, dw, db) = dense_backward(&fwd.input, p.get("input.w"), &dh)?;
            g.accumulate("input.w", &dw)?;
            g.accumulate("input.b", &db)?;
        }
        Ok((fwd.output, g))
    }

    #[allow(clippy::too_many_arguments)]
    fn attention_layer_backward(
        &self,
        l: usize,
        g: &mut ModelParams,
        dout: &Tensor2,
        input: &Tensor2,
        q: &Tensor2,
        k: &Tensor2,
        v: &Tensor2,
        attn: &[AttentionCache],
        concat: &Tensor2,
        h1: &Tensor2,
        ln1: &LayerNormCache,
        ff_pre: &Tensor2,
        ff_act: &Tensor2,
        ln2: &LayerNormCache,
    ) -> Result<Tensor2> {
        let p = &self.params;
        let name = |s: &str| format!("l{l}.{s}");
        let dh_heads = self.config.hidden_dim / self.config.num_heads;

        let (dr2, dg2, db2) = layer_norm_backward(ln2, p.get(&name("ln2.g")), dout);
        g.accumulate(&name("ln2.g"), &dg2)?;
        g.accumulate(&name("ln2.b"), &db2)?;
        let (dact, dw2, dbf2) = dense_backward(ff_act, p.get(&name("ff2.w")), &dr2)?;
        g.accumulate(&name("ff2.w"), &dw2)?;
        g.accumulate(&name("ff2.b"), &dbf2)?;
        let dpre = relu_backward(ff_pre, &dact);
        let (dh1_ff, dw1, dbf1) = dense_backward(h1, p.get(&name("ff1.w")), &dpre)?;
        g.accumulate(&name("ff1.w"), &dw1)?;
        g.accumulate(&name("ff1.b"), &dbf1)?;
        let dh1 = dr2.add(&dh1_ff)?;

        let (dr1, dg1, db1) = layer_norm_backward(ln1, p.get(&name("ln1.g")), &dh1);
        g.accumulate(&name("ln1.g"), &dg1)?;
        g.accumulate(&name("ln1.b"), &db1)?;
        let (dconcat, dwo, dbo) = dense_backward(concat, p.get(&name("wo")), &dr1)?;
        g.accumulate(&name("wo"), &dwo)?;
        g.accumulate(&name("bo"), &dbo)?;

        let mut dq = Tensor2::zeros(q.rows(), q.cols());
        let mut dk = Tensor2::zeros(k.rows(), k.cols());
        let mut dv = Tensor2::zeros(v.rows(), v.cols());
        for (hd, cache) in attn.iter().enumerate() {
            let off = hd * dh_heads;
            let (dqh, dkh, dvh) = attention_backward(
                &q.col_block(off, dh_heads),
                &k.col_block(off, dh_heads),
                &v.col_block(off, dh_heads),
                cache,
                &dconcat.col_block(off, dh_heads),
            )?;
            dq.set_col_block(off, &dqh);
            dk.set_col_block(off, &dkh);
            dv.set_col_block(off, &dvh);
        }
        let mut dinput = dr1;
        for (m, d) in [("wq", &dq), ("wk", &dk), ("wv", &dv)] {
            g.accumulate(&name(m), &input.matmul_tn(d)?)?;
            dinput.add_assign(&d.matmul_nt(p.get(&name(m)))?)?;
        }
        Ok(dinput)
    }
}

struct Forward {
    input: Tensor2,
    layers: Vec<LayerCache>,
    last_hidden: Tensor2,
    output: Vec<f64>,
}

enum LayerCache {
    Gcn {
        agg: Tensor2,
        pre: Tensor2,
    },
    Attention {
        input: Tensor2,
        q: Tensor2,
        k: Tensor2,
        v: Tensor2,
        attn: Vec<AttentionCache>,
        concat: Tensor2,
        h1: Tensor2,
        ln1: LayerNormCache,
        ff_pre: Tensor2,
        ff_act: Tensor2,
        ln2: LayerNormCache,
    },
}

/// GCN scores for a state.
pub fn gcn_utilities(state: &NetworkState<'_>, params: &ModelParams, config: &ModelConfig) -> Result<UtilityVector> {
    if config.variant != Variant::Gcn {
        return Err(Error::Config("gcn_utilities needs a gcn config".into()));
    }
    UtilityModel { config: *config, params: params.clone() }.utilities(state)
}

/// TransGNN scores for a state.
pub fn transgnn_utilities(state: &NetworkState<'_>, params: &ModelParams, config: &ModelConfig) -> Result<UtilityVector> {
    if config.variant != Variant::TransGnn {
        return Err(Error::Config("transgnn_utilities needs a transgnn config".into()));
    }
    UtilityModel { config: *config, params: params.clone() }.utilities(state)
}

/// How model scores become the utilities handed to the greedy solver.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Composition {
    /// `u(v) = score(v)`.
    Direct,
    /// `u(v) = w(v) * exp(score(v))` with `w` the baseline weight. A model
    /// with a constant score reproduces the baseline exactly.
    #[default]
    Modulated,
}

/// Scores are clamped to this magnitude before exponentiation.
const SCORE_CLAMP: f64 = 30.0;

/// Greedy scheduling driven by a learned estimator.
pub struct LearnedPolicy<'m> {
    model: &'m UtilityModel,
    pub composition: Composition,
    pub weight: BaselineWeight,
    pub tie_break: TieBreak,
    ctx: Option<GraphContext>,
    queue_scale: f64,
}

impl<'m> LearnedPolicy<'m> {
    pub fn new(model: &'m UtilityModel) -> Self {
        Self {
            model,
            composition: Composition::default(),
            weight: BaselineWeight::default(),
            tie_break: TieBreak::default(),
            ctx: None,
            queue_scale: 1.0,
        }
    }

    pub fn with_composition(mut self, composition: Composition) -> Self {
        self.composition = composition;
        self
    }

    pub fn model(&self) -> &UtilityModel {
        self.model
    }

    /// Utilities the solver receives for this state. Updates the running
    /// backlog normalizer.
    pub fn utilities(&mut self, state: &NetworkState<'_>) -> Result<UtilityVector> {
        if !self.ctx.as_ref().is_some_and(|c| c.matches(state.graph)) {
            self.ctx = Some(GraphContext::new(state.graph, &self.model.config));
        }
        let ctx = self.ctx.as_ref().expect("context installed above");
        self.queue_scale = state.q.iter().copied().fold(self.queue_scale, f64::max);
        let x = ctx.features(&state.q, &state.r, self.queue_scale)?;
        let scores = self.model.scores(state.graph, &x)?;
        let u = match self.composition {
            Composition::Direct => scores,
            Composition::Modulated => self
                .weight
                .weights(&state.q, &state.r)
                .into_iter()
                .zip(scores)
                .map(|(w, s)| w * s.clamp(-SCORE_CLAMP, SCORE_CLAMP).exp())
                .collect(),
        };
        UtilityVector::new(u)
    }
}

impl Policy for LearnedPolicy<'_> {
    fn reset(&mut self) {
        self.queue_scale = 1.0;
        self.ctx = None;
    }

    fn schedule(&mut self, state: &NetworkState<'_>) -> Result<Schedule> {
        let u = self.utilities(state)?;
        solve(state.graph, &u, self.tie_break)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::Topology;
    use crate::lgs::queue_weighted_lgs;
    use crate::nn::grad_check;

    fn random_state_values(n: usize, seed: u64) -> (Vec<f64>, Vec<f64>) {
        let mut r = rng::rng_from(seed);
        let q = (0..n).map(|_| r.random_range(0.0..20.0)).collect();
        let rates = (0..n).map(|_| r.random_range(0.0..100.0)).collect();
        (q, rates)
    }

    /// Model with every parameter (including the head) randomized.
    fn randomized(config: ModelConfig, seed: u64) -> UtilityModel {
        let mut m = UtilityModel::init(config, seed).unwrap();
        let mut r = rng::rng_from(seed ^ 0xABCD);
        let flat: Vec<f64> = m.params.flatten().iter().map(|x| x + r.random_range(-0.5..0.5)).collect();
        m.params.unflatten(&flat).unwrap();
        m
    }

    fn configs() -> Vec<ModelConfig> {
        let t = ModelConfig::transgnn();
        vec![
            ModelConfig::gcn(),
            t,
            t.without_attention_sampling(),
            t.without_positional_encoding(),
            t.without_attention_sampling().without_positional_encoding(),
        ]
    }

    #[test]
    fn zero_weights_give_head_bias() {
        let g = Topology::ErdosRenyi { n: 8, p: 0.4 }.generate(1).unwrap();
        let (q, r) = random_state_values(8, 2);
        let state = NetworkState::new(&g, q, r, 0).unwrap();
        for config in configs() {
            let mut m = UtilityModel::init(config, 3).unwrap();
            let zeros = vec![0.0; m.params.flat_len()];
            m.params.unflatten(&zeros).unwrap();
            m.params.get_mut("head.b").set(0, 0, 0.75);
            let u = m.utilities(&state).unwrap();
            assert!(u.as_slice().iter().all(|&x| x == 0.75), "{}: {:?}", config.label(), u);
        }
        let fresh = UtilityModel::init(ModelConfig::gcn(), 4).unwrap();
        let u = gcn_utilities(&state, &fresh.params, &fresh.config).unwrap();
        assert!(u.as_slice().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn gcn_without_edges_is_a_per_vertex_mlp() {
        let g = ConflictGraph::empty(5).unwrap();
        let single = ConflictGraph::empty(1).unwrap();
        let m = randomized(ModelConfig::gcn(), 5);
        let (q, r) = random_state_values(5, 6);
        let ctx = GraphContext::new(&g, &m.config);
        let x = ctx.features(&q, &r, 20.0).unwrap();
        let all = m.scores(&g, &x).unwrap();
        for v in 0..5 {
            let xv = Tensor2::from_vec(1, 3, x.row(v).to_vec()).unwrap();
            let alone = m.scores(&single, &xv).unwrap();
            assert!((alone[0] - all[v]).abs() < 1e-12);
        }
    }

    #[test]
    fn utilities_are_permutation_equivariant() {
        let mut r = rng::rng_from(77);
        for config in configs() {
            for trial in 0..5 {
                let n = 12;
                let g = Topology::ErdosRenyi { n, p: 0.25 }.generate(trial).unwrap();
                let m = randomized(config, trial + 10);
                let (q, rates) = random_state_values(n, trial + 20);
                let mut perm: Vec<usize> = (0..n).collect();
                rand::seq::SliceRandom::shuffle(perm.as_mut_slice(), &mut r);
                let pg = g.permuted(&perm).unwrap();
                let mut pq = vec![0.0; n];
                let mut pr = vec![0.0; n];
                for v in 0..n {
                    pq[perm[v]] = q[v];
                    pr[perm[v]] = rates[v];
                }
                let u = m.utilities(&NetworkState::new(&g, q.clone(), rates.clone(), 0).unwrap()).unwrap();
                let pu = m.utilities(&NetworkState::new(&pg, pq, pr, 0).unwrap()).unwrap();
                for v in 0..n {
                    assert!((u.as_slice()[v] - pu.as_slice()[perm[v]]).abs() < 1e-9, "{}", config.label());
                }
            }
        }
    }

    #[test]
    fn positional_encoding_values() {
        let k3 = ConflictGraph::from_edges(3, &[(0, 1), (1, 2), (0, 2)]).unwrap();
        let pe = positional_encoding(&k3, 3);
        for v in 0..3 {
            assert_eq!(pe.get(v, 0), 1.0);
            assert_eq!(pe.get(v, 1), 0.0);
            assert!((pe.get(v, 2) - 0.5).abs() < 1e-15);
        }
        let g = ConflictGraph::from_edges(3, &[(0, 1)]).unwrap();
        assert!(positional_encoding(&g, 4).row(2).iter().all(|&x| x == 0.0));
        let star = Topology::Star { leaves: 4 }.generate(0).unwrap();
        let pe = positional_encoding(&star, 4);
        assert_eq!(pe.get(0, 0), 1.0);
        assert_eq!(pe.get(1, 0), 0.25);
        assert_ne!(pe.row(0), pe.row(1));
        // Bipartite, so odd-step returns vanish. Two steps: the hub always
        // comes back, a leaf comes back via the hub with probability 1/4.
        assert_eq!(pe.get(0, 2), 1.0);
        assert_eq!(pe.get(1, 2), 0.25);
        assert_eq!(pe.get(1, 3), 0.0);
    }

    #[test]
    fn sampling_saturates_and_breaks_ties_by_index() {
        let g = ConflictGraph::from_edges(6, &[(0, 5), (2, 3)]).unwrap();
        let x = Tensor2::filled(6, 3, 0.5);
        let b = Tensor2::identity(3);
        let all = attention_sampling(&g, &x, &b, 6).unwrap();
        assert!(all.iter().all(|s| s == &vec![0, 1, 2, 3, 4, 5]));
        let small = attention_sampling(&g, &x, &b, 4).unwrap();
        assert_eq!(small[0], vec![0, 1, 2, 5]);
        assert_eq!(small[3], vec![0, 1, 2, 3]);
        // Neighbors are never dropped, even past the budget.
        let tight = attention_sampling(&g, &x, &b, 1).unwrap();
        assert_eq!(tight[0], vec![0, 5]);
        assert_eq!(tight[1], vec![1]);
    }

    #[test]
    fn sampling_picks_similar_non_neighbor() {
        // Scores x_0 . x_j with B = I: vertex 3 scores 0.9, the others 0.
        let g = ConflictGraph::from_edges(5, &[(0, 1)]).unwrap();
        let x = Tensor2::from_rows(&[
            vec![1.0, 0.0, 0.0],
            vec![0.0, 1.0, 0.0],
            vec![0.0, 0.0, 1.0],
            vec![0.9, 0.0, 0.0],
            vec![0.0, 0.0, 0.5],
        ])
        .unwrap();
        let sets = attention_sampling(&g, &x, &Tensor2::identity(3), 3).unwrap();
        assert_eq!(sets[0], vec![0, 1, 3]);
        // Vertex 2 takes 4 (score 0.5), then the lowest-index zero scorer.
        assert_eq!(sets[2], vec![0, 2, 4]);
    }

    #[test]
    fn ablated_model_attends_to_neighborhoods() {
        let cfg = ModelConfig::transgnn().without_attention_sampling().without_positional_encoding();
        assert_eq!(cfg.input_dim(), 3);
        let g = Topology::Star { leaves: 4 }.generate(0).unwrap();
        let m = UtilityModel::init(cfg, 1).unwrap();
        let ctx = GraphContext::new(&g, &cfg);
        let x = ctx.features(&[1.0; 5], &[50.0; 5], 1.0).unwrap();
        assert_eq!(m.candidate_sets(&g, &x).unwrap()[1], vec![0, 1]);
        assert!(!m.params.contains("sample.bilinear"));
    }

    #[test]
    fn single_vertex_is_finite() {
        let g = ConflictGraph::empty(1).unwrap();
        for config in configs() {
            let m = randomized(config, 8);
            let u = m.utilities(&NetworkState::new(&g, vec![3.0], vec![40.0], 0).unwrap()).unwrap();
            assert_eq!(u.len(), 1);
        }
    }

    #[test]
    fn huge_backlogs_stay_finite() {
        let g = Topology::BarabasiAlbert { n: 20, m: 2 }.generate(2).unwrap();
        let q: Vec<f64> = (0..20).map(|v| 1e6 * (v as f64 + 1.0) / 20.0).collect();
        for config in configs() {
            let m = randomized(config, 9);
            let mut policy = LearnedPolicy::new(&m);
            let state = NetworkState::new(&g, q.clone(), vec![100.0; 20], 0).unwrap();
            assert!(policy.schedule(&state).is_ok());
        }
    }

    fn check_model_gradient(config: ModelConfig, seed: u64, weights: Option<Vec<f64>>, tol: f64) {
        let g = Topology::ErdosRenyi { n: 6, p: 0.4 }.generate(seed).unwrap();
        let m = randomized(config, seed);
        let (q, r) = random_state_values(6, seed + 1);
        let ctx = GraphContext::new(&g, &config);
        let x = ctx.features(&q, &r, 20.0).unwrap();
        let c = weights.unwrap_or_else(|| vec![1.0 / 6.0; 6]);
        let (_, grad) = m.scores_and_grad(&g, &x, &c).unwrap();
        let loss = |flat: &[f64]| {
            let mut mm = m.clone();
            mm.params.unflatten(flat).unwrap();
            mm.scores(&g, &x).unwrap().iter().zip(&c).map(|(s, w)| s * w).sum::<f64>()
        };
        let report = grad_check(loss, &m.params.flatten(), &grad.flatten(), tol, None).unwrap();
        assert!(report.passed(), "{}: {report:?}", config.label());
    }

    #[test]
    fn mean_utility_gradients_match_finite_differences() {
        for (i, config) in configs().into_iter().enumerate() {
            check_model_gradient(config, 40 + i as u64, None, 1e-3);
        }
    }

    #[test]
    fn weighted_utility_gradients_match_finite_differences() {
        let c = vec![0.3, -1.2, 0.7, 2.0, -0.4, 0.9];
        for (i, config) in configs().into_iter().enumerate() {
            check_model_gradient(config, 50 + i as u64, Some(c.clone()), 1e-3);
        }
    }

    #[test]
    fn checkpoint_round_trip_and_mismatch() {
        let m = randomized(ModelConfig::transgnn(), 12);
        let back = UtilityModel::from_checkpoint(&Checkpoint::from_text(&m.to_checkpoint().to_text()).unwrap()).unwrap();
        assert_eq!(back, m);
        let mut ck = m.to_checkpoint();
        ck.meta.retain(|(k, _)| k != "hidden_dim");
        ck.meta.push(("hidden_dim".into(), "8".into()));
        assert!(matches!(UtilityModel::from_checkpoint(&ck), Err(Error::Checkpoint(_))));
        let mut ck = m.to_checkpoint();
        ck.arch = "gcn".into();
        assert!(UtilityModel::from_checkpoint(&ck).is_err());
    }

    #[test]
    fn config_validation() {
        let bad = ModelConfig { num_heads: 3, ..ModelConfig::transgnn() };
        assert!(matches!(bad.validate(), Err(Error::Config(_))));
        assert!(ModelConfig { hidden_dim: 0, ..ModelConfig::gcn() }.validate().is_err());
        assert!(UtilityModel::init(bad, 0).is_err());
        let labels: Vec<String> = configs().iter().map(ModelConfig::label).collect();
        assert_eq!(labels, ["gcn", "transgnn", "transgnn_no_as", "transgnn_no_pe", "transgnn_no_as_no_pe"]);
    }

    #[test]
    fn fresh_modulated_model_reproduces_baseline() {
        let g = Topology::BarabasiAlbert { n: 25, m: 2 }.generate(3).unwrap();
        let (q, r) = random_state_values(25, 4);
        let state = NetworkState::new(&g, q.clone(), r.clone(), 0).unwrap();
        for config in configs() {
            let m = UtilityModel::init(config, 5).unwrap();
            let mut policy = LearnedPolicy::new(&m);
            assert_eq!(policy.schedule(&state).unwrap(), queue_weighted_lgs(&g, &q, &r).unwrap());
        }
    }

    #[test]
    fn direct_composition_uses_raw_scores() {
        let g = Topology::ErdosRenyi { n: 10, p: 0.3 }.generate(6).unwrap();
        let m = randomized(ModelConfig::transgnn(), 13);
        let (q, r) = random_state_values(10, 7);
        let state = NetworkState::new(&g, q, r, 0).unwrap();
        let mut policy = LearnedPolicy::new(&m).with_composition(Composition::Direct);
        assert_eq!(policy.utilities(&state).unwrap(), m.utilities(&state).unwrap());
    }
}
