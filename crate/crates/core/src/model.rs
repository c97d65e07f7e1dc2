//! Tiny transformer encoder classifier and its parameter store.
//!
//! The encoder is deliberately small: token one-hot times an embedding
//! matrix plus a learned positional table, `layers` post-norm blocks of
//! multi-head self-attention and a GELU feed-forward, mean pooling, and
//! a linear classification head. Attention projection matrices are kept
//! per head so they can be scored and checked individually.
//!
//! `attention_grad_oracle` recomputes the projection gradients for one
//! (layer, head) pair directly from the closed-form expressions
//! `dW_q = γ Xᵀ G X W_k` and `dW_k = γ Xᵀ Gᵀ X W_q`, where `G` is the
//! upstream gradient at the scaled pre-softmax scores and `X` the layer
//! input. This is an algebraic route independent of the tape's matmul
//! backward and is used to cross-check it.

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::graph::{Graph, NodeId};
use crate::rng::SeedStream;
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TransformerConfig {
    pub layers: usize,
    pub d_model: usize,
    pub heads: usize,
    pub ffn_hidden: usize,
    pub seq_len: usize,
    pub vocab: usize,
    pub classes: usize,
}

impl TransformerConfig {
    pub fn validate(&self) -> Result<()> {
        let all_dims = [
            ("layers", self.layers),
            ("d_model", self.d_model),
            ("heads", self.heads),
            ("ffn_hidden", self.ffn_hidden),
            ("seq_len", self.seq_len),
            ("vocab", self.vocab),
            ("classes", self.classes),
        ];
        for (name, v) in all_dims {
            if v == 0 {
                return Err(Error::InvalidConfig(format!("{name} must be positive")));
            }
        }
        if self.d_model % self.heads != 0 {
            return Err(Error::InvalidConfig(format!(
                "heads ({}) must divide d_model ({})",
                self.heads, self.d_model
            )));
        }
        if self.classes < 2 {
            return Err(Error::InvalidConfig("classes must be at least 2".into()));
        }
        Ok(())
    }

    /// Per-head key/value width d_k = d_v = d_model / heads.
    pub fn head_dim(&self) -> usize {
        self.d_model / self.heads
    }
}

#[derive(Debug, Clone)]
pub struct Param {
    pub name: String,
    pub tensor: Tensor,
    pub prunable: bool,
}

/// Named, ordered collection of trainable tensors. Iteration order is
/// insertion order and never changes; the flattened prunable entries
/// (in that order, row-major) define the score/mask coordinate space.
#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    params: Vec<Param>,
    index: HashMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        ParamStore::default()
    }

    pub fn insert(&mut self, name: &str, tensor: Tensor, prunable: bool) -> Result<()> {
        if self.index.contains_key(name) {
            return Err(Error::InvalidArgument(format!(
                "duplicate parameter name {name}"
            )));
        }
        self.index.insert(name.to_string(), self.params.len());
        self.params.push(Param {
            name: name.to_string(),
            tensor,
            prunable,
        });
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&Param> {
        self.index.get(name).map(|&i| &self.params[i])
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Param> {
        self.index.get(name).map(|&i| &mut self.params[i])
    }

    pub fn set_prunable(&mut self, name: &str, prunable: bool) -> Result<()> {
        match self.get_mut(name) {
            Some(p) => {
                p.prunable = prunable;
                Ok(())
            }
            None => Err(Error::InvalidArgument(format!("no parameter named {name}"))),
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = &Param> {
        self.params.iter()
    }

    pub fn prunable_params(&self) -> impl Iterator<Item = &Param> {
        self.params.iter().filter(|p| p.prunable)
    }

    pub fn param_count(&self) -> usize {
        self.params.len()
    }

    /// Total scalar count across all parameters.
    pub fn flat_len(&self) -> usize {
        self.params.iter().map(|p| p.tensor.numel()).sum()
    }

    /// Scalar count across prunable parameters (the `w` of the score space).
    pub fn prunable_len(&self) -> usize {
        self.prunable_params().map(|p| p.tensor.numel()).sum()
    }

    /// All parameters concatenated in store order, row-major.
    pub fn flat_all(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.flat_len());
        for p in &self.params {
            out.extend_from_slice(p.tensor.data());
        }
        out
    }

    pub fn set_flat_all(&mut self, vals: &[f64]) -> Result<()> {
        if vals.len() != self.flat_len() {
            return Err(Error::shape(
                "set_flat_all",
                format!("{} values for {} slots", vals.len(), self.flat_len()),
            ));
        }
        let mut off = 0;
        for p in &mut self.params {
            let n = p.tensor.numel();
            p.tensor.data_mut().copy_from_slice(&vals[off..off + n]);
            off += n;
        }
        Ok(())
    }

    /// Per-coordinate prunability over the `flat_all` layout.
    pub fn prunable_coords(&self) -> Vec<bool> {
        let mut out = Vec::with_capacity(self.flat_len());
        for p in &self.params {
            out.extend(std::iter::repeat(p.prunable).take(p.tensor.numel()));
        }
        out
    }

    /// Prunable parameters flattened into score-space order.
    pub fn flat_prunable(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.prunable_len());
        for p in self.prunable_params() {
            out.extend_from_slice(p.tensor.data());
        }
        out
    }

    /// (name, shape, numel) of each prunable parameter, in order.
    pub fn prunable_layout(&self) -> Vec<(String, Vec<usize>, usize)> {
        self.prunable_params()
            .map(|p| (p.name.clone(), p.tensor.shape().to_vec(), p.tensor.numel()))
            .collect()
    }

    /// Bit-level equality of all parameter values.
    pub fn bits_eq(&self, other: &ParamStore) -> bool {
        let a = self.flat_all();
        let b = other.flat_all();
        a.len() == b.len()
            && a.iter()
                .zip(&b)
                .all(|(x, y)| x.to_bits() == y.to_bits())
    }
}

/// Deterministic scaled-uniform initialization: every weight matrix is
/// drawn from U(-1/sqrt(fan_in), 1/sqrt(fan_in)), gains start at one,
/// biases and offsets at zero. The classification head, embeddings,
/// norm parameters, and biases are non-prunable by default.
pub fn init_model(cfg: &TransformerConfig, seed: u64) -> Result<ParamStore> {
    cfg.validate()?;
    let mut rng = SeedStream::for_purpose(seed, "init");
    let mut store = ParamStore::new();
    let d = cfg.d_model;
    let dk = cfg.head_dim();

    let matrix = |rng: &mut SeedStream, rows: usize, cols: usize| -> Tensor {
        let scale = 1.0 / (rows as f64).sqrt();
        let data = (0..rows * cols).map(|_| rng.uniform_sym(scale)).collect();
        Tensor::new(vec![rows, cols], data).expect("shape matches data")
    };

    store.insert("embed", matrix(&mut rng, cfg.vocab, d), false)?;
    store.insert("pos", matrix(&mut rng, cfg.seq_len, d), false)?;

    for l in 0..cfg.layers {
        for h in 0..cfg.heads {
            store.insert(&format!("layer{l}.head{h}.wq"), matrix(&mut rng, d, dk), true)?;
            store.insert(&format!("layer{l}.head{h}.wk"), matrix(&mut rng, d, dk), true)?;
            store.insert(&format!("layer{l}.head{h}.wv"), matrix(&mut rng, d, dk), true)?;
        }
        store.insert(&format!("layer{l}.attn.wo"), matrix(&mut rng, d, d), true)?;
        store.insert(&format!("layer{l}.ln1.gamma"), Tensor::full(vec![d], 1.0), false)?;
        store.insert(&format!("layer{l}.ln1.beta"), Tensor::zeros(vec![d]), false)?;
        store.insert(
            &format!("layer{l}.ffn.w1"),
            matrix(&mut rng, d, cfg.ffn_hidden),
            true,
        )?;
        store.insert(&format!("layer{l}.ffn.b1"), Tensor::zeros(vec![cfg.ffn_hidden]), false)?;
        store.insert(
            &format!("layer{l}.ffn.w2"),
            matrix(&mut rng, cfg.ffn_hidden, d),
            true,
        )?;
        store.insert(&format!("layer{l}.ffn.b2"), Tensor::zeros(vec![d]), false)?;
        store.insert(&format!("layer{l}.ln2.gamma"), Tensor::full(vec![d], 1.0), false)?;
        store.insert(&format!("layer{l}.ln2.beta"), Tensor::zeros(vec![d]), false)?;
    }

    store.insert("head.w", matrix(&mut rng, d, cfg.classes), false)?;
    store.insert("head.b", Tensor::zeros(vec![cfg.classes]), false)?;
    Ok(store)
}

/// One mini-batch of token sequences and class labels.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Batch {
    pub inputs: Vec<Vec<usize>>,
    pub labels: Vec<usize>,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.inputs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.inputs.is_empty()
    }
}

/// A built forward graph plus the handles needed to read gradients and
/// attention internals back out.
pub struct ForwardPass {
    pub graph: Graph,
    pub loss: NodeId,
    logits: Vec<NodeId>,
    param_nodes: Vec<NodeId>,
    /// Scaled pre-softmax attention scores, indexed [layer][head][example].
    attn_scores: Vec<Vec<Vec<NodeId>>>,
    /// Attention input X per [layer][example].
    layer_inputs: Vec<Vec<NodeId>>,
}

impl ForwardPass {
    pub fn loss_value(&self) -> f64 {
        self.graph.value(self.loss).data()[0]
    }

    pub fn backward(&mut self) -> Result<()> {
        self.graph.backward(self.loss)
    }

    /// Gradient of one parameter by store index.
    pub fn grad_tensor(&self, param_index: usize) -> Tensor {
        self.graph.grad_tensor(self.param_nodes[param_index])
    }

    /// Gradients of all parameters concatenated in `flat_all` order.
    pub fn flat_grad(&self, store: &ParamStore) -> Vec<f64> {
        let mut out = Vec::with_capacity(store.flat_len());
        for (i, p) in store.iter().enumerate() {
            match self.graph.grad(self.param_nodes[i]) {
                Some(g) => out.extend_from_slice(g),
                None => out.extend(std::iter::repeat(0.0).take(p.tensor.numel())),
            }
        }
        out
    }

    /// Per-example predicted class (argmax of logits).
    pub fn predictions(&self) -> Vec<usize> {
        self.logits
            .iter()
            .map(|&id| {
                let row = self.graph.value(id).data();
                row.iter()
                    .enumerate()
                    .max_by(|a, b| a.1.partial_cmp(b.1).expect("finite logits"))
                    .map(|(i, _)| i)
                    .unwrap_or(0)
            })
            .collect()
    }
}

fn check_batch(cfg: &TransformerConfig, batch: &Batch) -> Result<()> {
    if batch.is_empty() {
        return Err(Error::InvalidArgument("empty batch".into()));
    }
    if batch.inputs.len() != batch.labels.len() {
        return Err(Error::shape(
            "batch",
            format!("{} inputs vs {} labels", batch.inputs.len(), batch.labels.len()),
        ));
    }
    for (i, seq) in batch.inputs.iter().enumerate() {
        if seq.len() != cfg.seq_len {
            return Err(Error::shape(
                "batch",
                format!("example {i} has length {} != seq_len {}", seq.len(), cfg.seq_len),
            ));
        }
        if let Some(&t) = seq.iter().find(|&&t| t >= cfg.vocab) {
            return Err(Error::InvalidArgument(format!(
                "example {i}: token {t} out of vocab {}",
                cfg.vocab
            )));
        }
    }
    if let Some(&l) = batch.labels.iter().find(|&&l| l >= cfg.classes) {
        return Err(Error::InvalidArgument(format!(
            "label {l} out of range for {} classes",
            cfg.classes
        )));
    }
    Ok(())
}

fn one_hot(seq: &[usize], vocab: usize) -> Tensor {
    let mut data = vec![0.0; seq.len() * vocab];
    for (i, &t) in seq.iter().enumerate() {
        data[i * vocab + t] = 1.0;
    }
    Tensor::new(vec![seq.len(), vocab], data).expect("one-hot shape")
}

fn finite_or(graph: &Graph, node: NodeId, context: &str) -> Result<()> {
    if graph.value(node).all_finite() {
        Ok(())
    } else {
        Err(Error::NonFinite {
            context: context.to_string(),
        })
    }
}

/// Build the full forward graph for a batch and return the mean
/// cross-entropy loss, ready for `backward`.
pub fn forward_loss(store: &ParamStore, cfg: &TransformerConfig, batch: &Batch) -> Result<ForwardPass> {
    cfg.validate()?;
    check_batch(cfg, batch)?;

    let mut g = Graph::new();
    let mut param_nodes = Vec::with_capacity(store.param_count());
    for p in store.iter() {
        param_nodes.push(g.param(p.tensor.clone()));
    }
    let node = |name: &str| -> NodeId {
        let idx = store
            .iter()
            .position(|p| p.name == name)
            .unwrap_or_else(|| panic!("model parameter {name} missing from store"));
        param_nodes[idx]
    };

    let gamma = 1.0 / (cfg.head_dim() as f64).sqrt();
    let mut attn_scores = vec![vec![Vec::new(); cfg.heads]; cfg.layers];
    let mut layer_inputs = vec![Vec::new(); cfg.layers];
    let mut logits_nodes = Vec::with_capacity(batch.len());
    let mut example_losses = Vec::with_capacity(batch.len());

    for (e, seq) in batch.inputs.iter().enumerate() {
        let oh = g.constant(one_hot(seq, cfg.vocab));
        let emb = g.matmul(oh, node("embed"))?;
        let mut x = g.add(emb, node("pos"))?;

        for l in 0..cfg.layers {
            layer_inputs[l].push(x);
            let mut heads = Vec::with_capacity(cfg.heads);
            for h in 0..cfg.heads {
                let q = g.matmul(x, node(&format!("layer{l}.head{h}.wq")))?;
                let k = g.matmul(x, node(&format!("layer{l}.head{h}.wk")))?;
                let v = g.matmul(x, node(&format!("layer{l}.head{h}.wv")))?;
                let kt = g.transpose(k)?;
                let raw = g.matmul(q, kt)?;
                let scores = g.scale(raw, gamma)?;
                attn_scores[l][h].push(scores);
                let probs = g.softmax_rows(scores)?;
                heads.push(g.matmul(probs, v)?);
            }
            let cat = g.concat(&heads)?;
            let attn_out = g.matmul(cat, node(&format!("layer{l}.attn.wo")))?;
            let res1 = g.add(x, attn_out)?;
            let x1 = g.layer_norm(
                res1,
                node(&format!("layer{l}.ln1.gamma")),
                node(&format!("layer{l}.ln1.beta")),
                1e-5,
            )?;
            finite_or(&g, x1, &format!("layer{l}.attn (example {e})"))?;

            let h1 = g.matmul(x1, node(&format!("layer{l}.ffn.w1")))?;
            let h1b = g.add(h1, node(&format!("layer{l}.ffn.b1")))?;
            let act = g.gelu(h1b)?;
            let h2 = g.matmul(act, node(&format!("layer{l}.ffn.w2")))?;
            let h2b = g.add(h2, node(&format!("layer{l}.ffn.b2")))?;
            let res2 = g.add(x1, h2b)?;
            let x2 = g.layer_norm(
                res2,
                node(&format!("layer{l}.ln2.gamma")),
                node(&format!("layer{l}.ln2.beta")),
                1e-5,
            )?;
            finite_or(&g, x2, &format!("layer{l}.ffn (example {e})"))?;
            x = x2;
        }

        let pooled = g.mean_rows(x)?;
        let raw_logits = g.matmul(pooled, node("head.w"))?;
        let logits = g.add(raw_logits, node("head.b"))?;
        finite_or(&g, logits, &format!("head (example {e})"))?;
        logits_nodes.push(logits);
        example_losses.push(g.cross_entropy(logits, &batch.labels[e..e + 1])?);
    }

    let mut total = example_losses[0];
    for &l in &example_losses[1..] {
        total = g.add(total, l)?;
    }
    let loss = g.scale(total, 1.0 / batch.len() as f64)?;
    finite_or(&g, loss, "loss")?;

    Ok(ForwardPass {
        graph: g,
        loss,
        logits: logits_nodes,
        param_nodes,
        attn_scores,
        layer_inputs,
    })
}

/// Fraction of examples whose argmax logit matches the label.
pub fn eval_accuracy(
    store: &ParamStore,
    cfg: &TransformerConfig,
    inputs: &[Vec<usize>],
    labels: &[usize],
) -> Result<f64> {
    let batch = Batch {
        inputs: inputs.to_vec(),
        labels: labels.to_vec(),
    };
    let fp = forward_loss(store, cfg, &batch)?;
    let preds = fp.predictions();
    let hits = preds.iter().zip(labels).filter(|(p, l)| p == l).count();
    Ok(hits as f64 / labels.len() as f64)
}

/// Closed-form projection gradients from an upstream score gradient.
/// `x` is the layer input, `g_scores` the loss gradient at the scaled
/// pre-softmax scores of one head.
pub fn projection_grads_from_upstream(
    x: &Tensor,
    g_scores: &Tensor,
    wq: &Tensor,
    wk: &Tensor,
    gamma: f64,
) -> Result<(Tensor, Tensor)> {
    let xt = x.transposed()?;
    let xtg = xt.matmul(g_scores)?; // [d, n]
    let xtgx = xtg.matmul(x)?; // [d, d]
    let mut gq = xtgx.matmul(wk)?; // [d, dk]
    for v in gq.data_mut() {
        *v *= gamma;
    }

    let gt = g_scores.transposed()?;
    let xtgt = xt.matmul(&gt)?;
    let xtgtx = xtgt.matmul(x)?;
    let mut gk = xtgtx.matmul(wq)?;
    for v in gk.data_mut() {
        *v *= gamma;
    }
    Ok((gq, gk))
}

/// Analytic gradients of the loss with respect to one head's query/key
/// projections, summed over the batch. Runs its own forward/backward to
/// obtain the upstream score gradients, then applies the closed form.
pub fn attention_grad_oracle(
    store: &ParamStore,
    cfg: &TransformerConfig,
    batch: &Batch,
    layer: usize,
    head: usize,
) -> Result<(Tensor, Tensor)> {
    if layer >= cfg.layers {
        return Err(Error::InvalidArgument(format!(
            "layer {layer} out of range (layers = {})",
            cfg.layers
        )));
    }
    if head >= cfg.heads {
        return Err(Error::InvalidArgument(format!(
            "head {head} out of range (heads = {})",
            cfg.heads
        )));
    }
    let mut fp = forward_loss(store, cfg, batch)?;
    fp.backward()?;

    let dk = cfg.head_dim();
    let gamma = 1.0 / (dk as f64).sqrt();
    let wq = &store
        .get(&format!("layer{layer}.head{head}.wq"))
        .expect("wq exists")
        .tensor;
    let wk = &store
        .get(&format!("layer{layer}.head{head}.wk"))
        .expect("wk exists")
        .tensor;

    let mut total_gq = Tensor::zeros(vec![cfg.d_model, dk]);
    let mut total_gk = Tensor::zeros(vec![cfg.d_model, dk]);
    for e in 0..batch.len() {
        let x = fp.graph.value(fp.layer_inputs[layer][e]).clone();
        let g_scores = fp.graph.grad_tensor(fp.attn_scores[layer][head][e]);
        let (gq, gk) = projection_grads_from_upstream(&x, &g_scores, wq, wk, gamma)?;
        for (t, s) in total_gq.data_mut().iter_mut().zip(gq.data()) {
            *t += s;
        }
        for (t, s) in total_gk.data_mut().iter_mut().zip(gk.data()) {
            *t += s;
        }
    }
    Ok((total_gq, total_gk))
}
