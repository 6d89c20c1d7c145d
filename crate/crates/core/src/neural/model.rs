//! The convolutional bidirectional recurrent network: one convolutional branch
//! per input feature, a per-frame merge, stacked BiLSTMs and a sigmoid output.

use std::fmt::Write as _;

use ndarray::{s, Array1, Array3, Array4, ArrayView2, ArrayView3, ArrayView4, Axis};
use rand::Rng;

use super::layers::{
    batchnorm_backward, batchnorm_infer, batchnorm_train, conv2d_backward, conv2d_forward, dropout_mask,
    maxpool_backward, maxpool_feature_axis, relu, relu_backward, update_running, BatchNormCache, BatchStats,
};
use super::lstm::{bilstm_backward, bilstm_forward, BiLstmCache, BiLstmParams};
use super::optim::ParamBlocks;
use super::output::{bce_backward, bce_loss, output_backward, output_forward, DenseParams};
use crate::error::{Error, Result};

/// Feature width every multi-layer branch is pooled down to.
pub const BRANCH_TARGET_WIDTH: usize = 5;
/// Default filters per convolutional layer.
pub const DEFAULT_FILTERS: usize = 100;
/// Default BiLSTM hidden units per direction.
pub const DEFAULT_HIDDEN: usize = 128;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvLayerSpec {
    pub filters: usize,
    pub kernel: (usize, usize),
    /// Max-pool factor along the feature axis.
    pub pool: usize,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BranchSpec {
    /// Input key, e.g. `mel` or `tdoa`.
    pub name: String,
    pub input_len: usize,
    pub input_layers: usize,
    pub layers: Vec<ConvLayerSpec>,
}

/// Pool factors that bring `len` down to [`BRANCH_TARGET_WIDTH`] in three
/// layers, or `None` when the input is already narrow enough to skip pooling.
pub fn standard_pools(len: usize) -> Option<Vec<usize>> {
    match len {
        40 => return Some(vec![2, 2, 2]),
        60 => return Some(vec![2, 2, 3]),
        80 => return Some(vec![2, 2, 4]),
        400 => return Some(vec![5, 4, 4]),
        _ => {}
    }
    if len <= 3 * BRANCH_TARGET_WIDTH || len % BRANCH_TARGET_WIDTH != 0 {
        return None;
    }
    let mut rest = len / BRANCH_TARGET_WIDTH;
    let mut primes = Vec::new();
    let mut p = 2;
    while rest > 1 {
        while rest % p == 0 {
            primes.push(p);
            rest /= p;
        }
        p += 1;
    }
    primes.reverse();
    let mut slots = [1usize; 3];
    for prime in primes {
        let smallest = (0..3).min_by_key(|&i| slots[i]).expect("three slots");
        slots[smallest] *= prime;
    }
    slots.sort_unstable();
    Some(slots.to_vec())
}

impl BranchSpec {
    /// Three pooled 3x3 layers for wide inputs, one unpooled layer otherwise.
    pub fn standard(name: impl Into<String>, input_len: usize, input_layers: usize, filters: usize) -> Self {
        let pools = standard_pools(input_len).unwrap_or_else(|| vec![1]);
        Self {
            name: name.into(),
            input_len,
            input_layers,
            layers: pools
                .into_iter()
                .map(|pool| ConvLayerSpec { filters, kernel: (3, 3), pool })
                .collect(),
        }
    }

    /// Feature-axis length after all pooling.
    pub fn output_len(&self) -> usize {
        self.layers.iter().fold(self.input_len, |l, c| l / c.pool.max(1))
    }

    pub fn output_maps(&self) -> usize {
        self.layers.last().map_or(self.input_layers, |c| c.filters)
    }

    /// Per-frame width contributed to the merged sequence.
    pub fn output_width(&self) -> usize {
        self.output_len() * self.output_maps()
    }

    pub fn validate(&self) -> Result<()> {
        if self.layers.is_empty() || self.input_len == 0 || self.input_layers == 0 {
            return Err(Error::validation(format!("branch `{}` is empty", self.name)));
        }
        let mut len = self.input_len;
        for (i, layer) in self.layers.iter().enumerate() {
            if layer.filters == 0 || layer.kernel.0 % 2 == 0 || layer.kernel.1 % 2 == 0 {
                return Err(Error::validation(format!(
                    "branch `{}` layer {i}: filters must be positive and kernel sides odd",
                    self.name
                )));
            }
            if layer.pool == 0 || len % layer.pool != 0 {
                return Err(Error::validation(format!(
                    "branch `{}` layer {i}: pool {} does not divide width {len}",
                    self.name, layer.pool
                )));
            }
            len /= layer.pool;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Architecture {
    pub branches: Vec<BranchSpec>,
    pub hidden: usize,
    pub recurrent_layers: usize,
    pub classes: Vec<String>,
}

impl Architecture {
    pub fn new(branches: Vec<BranchSpec>, hidden: usize, classes: Vec<String>) -> Result<Self> {
        let arch = Self {
            branches,
            hidden,
            recurrent_layers: 2,
            classes,
        };
        arch.validate()?;
        Ok(arch)
    }

    pub fn validate(&self) -> Result<()> {
        if self.branches.is_empty() {
            return Err(Error::validation("model needs at least one branch"));
        }
        for (i, b) in self.branches.iter().enumerate() {
            b.validate()?;
            if self.branches[..i].iter().any(|o| o.name == b.name) {
                return Err(Error::validation(format!("duplicate branch `{}`", b.name)));
            }
        }
        if self.hidden == 0 || self.recurrent_layers == 0 {
            return Err(Error::validation("recurrent layers need a positive size"));
        }
        if self.classes.is_empty() {
            return Err(Error::validation("model needs at least one class"));
        }
        Ok(())
    }

    pub fn merged_width(&self) -> usize {
        self.branches.iter().map(BranchSpec::output_width).sum()
    }

    pub fn branch_names(&self) -> Vec<&str> {
        self.branches.iter().map(|b| b.name.as_str()).collect()
    }

    /// Line-oriented text form used in checkpoints.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "hidden={}", self.hidden);
        let _ = writeln!(out, "recurrent_layers={}", self.recurrent_layers);
        for c in &self.classes {
            let _ = writeln!(out, "class={c}");
        }
        for b in &self.branches {
            let layers: Vec<String> = b
                .layers
                .iter()
                .map(|l| format!("{}x{}x{}/{}", l.filters, l.kernel.0, l.kernel.1, l.pool))
                .collect();
            let _ = writeln!(out, "branch={}:{}:{}:{}", b.name, b.input_len, b.input_layers, layers.join(","));
        }
        out
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let bad = |line: &str| Error::Format(format!("bad architecture line `{line}`"));
        let num = |v: &str, line: &str| v.trim().parse::<usize>().map_err(|_| bad(line));
        let mut hidden = None;
        let mut recurrent_layers = 2;
        let mut classes = Vec::new();
        let mut branches = Vec::new();
        for line in text.lines().filter(|l| !l.trim().is_empty()) {
            let (key, value) = line.split_once('=').ok_or_else(|| bad(line))?;
            match key {
                "hidden" => hidden = Some(num(value, line)?),
                "recurrent_layers" => recurrent_layers = num(value, line)?,
                "class" => classes.push(value.to_string()),
                "branch" => {
                    let parts: Vec<&str> = value.split(':').collect();
                    if parts.len() != 4 {
                        return Err(bad(line));
                    }
                    let layers = parts[3]
                        .split(',')
                        .map(|spec| {
                            let (dims, pool) = spec.split_once('/').ok_or_else(|| bad(line))?;
                            let d: Vec<&str> = dims.split('x').collect();
                            if d.len() != 3 {
                                return Err(bad(line));
                            }
                            Ok(ConvLayerSpec {
                                filters: num(d[0], line)?,
                                kernel: (num(d[1], line)?, num(d[2], line)?),
                                pool: num(pool, line)?,
                            })
                        })
                        .collect::<Result<Vec<_>>>()?;
                    branches.push(BranchSpec {
                        name: parts[0].to_string(),
                        input_len: num(parts[1], line)?,
                        input_layers: num(parts[2], line)?,
                        layers,
                    });
                }
                _ => return Err(bad(line)),
            }
        }
        let arch = Self {
            branches,
            hidden: hidden.ok_or_else(|| Error::Format("architecture lacks `hidden`".into()))?,
            recurrent_layers,
            classes,
        };
        arch.validate().map_err(|e| Error::Format(e.to_string()))?;
        Ok(arch)
    }
}

/// Learnable tensors of one convolutional block.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvBlockParams {
    /// `(kh, kw, C_in, F)`.
    pub kernel: Array4<f64>,
    pub bias: Array1<f64>,
    pub gamma: Array1<f64>,
    pub beta: Array1<f64>,
}

/// Every learnable tensor of the network. Gradients use the same type.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub branches: Vec<Vec<ConvBlockParams>>,
    pub recurrent: Vec<BiLstmParams>,
    pub output: DenseParams,
}

impl ModelParams {
    pub fn zeros(arch: &Architecture) -> Self {
        let branches = arch
            .branches
            .iter()
            .map(|b| {
                let mut c_in = b.input_layers;
                b.layers
                    .iter()
                    .map(|l| {
                        let p = ConvBlockParams {
                            kernel: Array4::zeros((l.kernel.0, l.kernel.1, c_in, l.filters)),
                            bias: Array1::zeros(l.filters),
                            gamma: Array1::zeros(l.filters),
                            beta: Array1::zeros(l.filters),
                        };
                        c_in = l.filters;
                        p
                    })
                    .collect()
            })
            .collect();
        let mut input = arch.merged_width();
        let recurrent = (0..arch.recurrent_layers)
            .map(|_| {
                let p = BiLstmParams::zeros(input, arch.hidden);
                input = 2 * arch.hidden;
                p
            })
            .collect();
        Self {
            branches,
            recurrent,
            output: DenseParams::zeros(2 * arch.hidden, arch.classes.len()),
        }
    }

    /// Glorot-uniform kernels, unit batch-norm scale, LSTM and output init as in
    /// their modules.
    pub fn init<R: Rng>(arch: &Architecture, rng: &mut R) -> Self {
        let mut p = Self::zeros(arch);
        for block in p.branches.iter_mut().flatten() {
            let (kh, kw, c, f) = block.kernel.dim();
            let a = (6.0 / ((kh * kw) * (c + f)) as f64).sqrt();
            block.kernel.mapv_inplace(|_| rng.random_range(-a..a));
            block.gamma.fill(1.0);
        }
        let mut input = arch.merged_width();
        for layer in &mut p.recurrent {
            *layer = BiLstmParams::init(input, arch.hidden, rng);
            input = 2 * arch.hidden;
        }
        p.output = DenseParams::init(input, arch.classes.len(), rng);
        p
    }

    /// Squared L2 norm over all blocks.
    pub fn norm_sq(&self) -> f64 {
        self.blocks().iter().flat_map(|(_, b)| b.iter()).map(|v| v * v).sum()
    }
}

fn slice_of<D: ndarray::Dimension>(a: &ndarray::Array<f64, D>) -> &[f64] {
    a.as_slice().expect("parameter arrays are contiguous")
}

fn slice_of_mut<D: ndarray::Dimension>(a: &mut ndarray::Array<f64, D>) -> &mut [f64] {
    a.as_slice_mut().expect("parameter arrays are contiguous")
}

/// Names of the learnable blocks for `arch`, in visiting order.
fn block_names(branch_names: &[String], depth: &[usize], recurrent: usize) -> Vec<String> {
    let mut names = Vec::new();
    for (name, &n) in branch_names.iter().zip(depth) {
        for i in 0..n {
            for part in ["kernel", "bias", "gamma", "beta"] {
                names.push(format!("branch.{name}.conv{i}.{part}"));
            }
        }
    }
    for j in 0..recurrent {
        for dir in ["fwd", "bwd"] {
            for part in ["w", "u", "b"] {
                names.push(format!("rnn{j}.{dir}.{part}"));
            }
        }
    }
    names.push("output.w".into());
    names.push("output.b".into());
    names
}

impl ModelParams {
    fn names(&self, branch_names: Option<&[String]>) -> Vec<String> {
        let default: Vec<String> = (0..self.branches.len()).map(|i| i.to_string()).collect();
        let depth: Vec<usize> = self.branches.iter().map(Vec::len).collect();
        block_names(branch_names.unwrap_or(&default), &depth, self.recurrent.len())
    }
}

impl ParamBlocks for ModelParams {
    fn blocks(&self) -> Vec<(String, &[f64])> {
        let mut out: Vec<&[f64]> = Vec::new();
        for b in self.branches.iter().flatten() {
            out.extend([slice_of(&b.kernel), slice_of(&b.bias), slice_of(&b.gamma), slice_of(&b.beta)]);
        }
        for r in &self.recurrent {
            for d in [&r.fwd, &r.bwd] {
                out.extend([slice_of(&d.w), slice_of(&d.u), slice_of(&d.b)]);
            }
        }
        out.extend([slice_of(&self.output.w), slice_of(&self.output.b)]);
        self.names(None).into_iter().zip(out).collect()
    }

    fn blocks_mut(&mut self) -> Vec<(String, &mut [f64])> {
        let names = self.names(None);
        let mut out: Vec<&mut [f64]> = Vec::new();
        for b in self.branches.iter_mut().flatten() {
            out.push(slice_of_mut(&mut b.kernel));
            out.push(slice_of_mut(&mut b.bias));
            out.push(slice_of_mut(&mut b.gamma));
            out.push(slice_of_mut(&mut b.beta));
        }
        for r in &mut self.recurrent {
            for d in [&mut r.fwd, &mut r.bwd] {
                out.push(slice_of_mut(&mut d.w));
                out.push(slice_of_mut(&mut d.u));
                out.push(slice_of_mut(&mut d.b));
            }
        }
        out.push(slice_of_mut(&mut self.output.w));
        out.push(slice_of_mut(&mut self.output.b));
        names.into_iter().zip(out).collect()
    }
}

/// Architecture, learnable parameters and batch-norm running statistics.
#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub arch: Architecture,
    pub params: ModelParams,
    /// Per branch, per conv layer.
    pub running: Vec<Vec<BatchStats>>,
}

/// Whether batch norm uses batch statistics (and dropout may apply).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Infer,
}

struct ConvBlockCache {
    input: Array4<f64>,
    bn: Option<BatchNormCache>,
    /// Batch-norm output, before the activation.
    normed: Array4<f64>,
    pool_arg: Array4<u32>,
    dropout: Option<Array4<f64>>,
}

/// Intermediate values of one forward pass.
pub struct ForwardCache {
    mode: Mode,
    conv: Vec<Vec<ConvBlockCache>>,
    merged: Array3<f64>,
    rnn_inputs: Vec<Array3<f64>>,
    rnn: Vec<BiLstmCache>,
    rnn_dropout: Vec<Option<Array3<f64>>>,
    head_input: Array3<f64>,
    probs: Array3<f64>,
    /// Batch statistics per branch and layer (training mode only).
    pub batch_stats: Vec<Vec<BatchStats>>,
}

impl ForwardCache {
    /// Concatenated per-frame branch outputs `(B, T, merged_width)`.
    pub fn merged(&self) -> &Array3<f64> {
        &self.merged
    }

    pub fn probabilities(&self) -> &Array3<f64> {
        &self.probs
    }
}

/// Source of dropout masks for a training pass.
pub struct Dropout<'a, R: Rng> {
    pub rate: f64,
    pub rng: &'a mut R,
}

impl Model {
    pub fn new(arch: Architecture, params: ModelParams) -> Result<Self> {
        arch.validate()?;
        let expected = ModelParams::zeros(&arch);
        let shapes_match = expected
            .blocks()
            .iter()
            .zip(params.blocks().iter())
            .all(|((_, a), (_, b))| a.len() == b.len())
            && expected.blocks().len() == params.blocks().len();
        if !shapes_match {
            return Err(Error::validation("parameters do not match the architecture"));
        }
        let running = arch
            .branches
            .iter()
            .map(|b| {
                b.layers
                    .iter()
                    .map(|l| BatchStats {
                        mean: Array1::zeros(l.filters),
                        var: Array1::ones(l.filters),
                    })
                    .collect()
            })
            .collect();
        Ok(Self { arch, params, running })
    }

    pub fn init<R: Rng>(arch: Architecture, rng: &mut R) -> Result<Self> {
        arch.validate()?;
        let params = ModelParams::init(&arch, rng);
        Self::new(arch, params)
    }

    /// Named blocks including running statistics, for serialization.
    pub fn all_blocks(&self) -> Vec<(String, &[f64])> {
        let names: Vec<String> = self.arch.branches.iter().map(|b| b.name.clone()).collect();
        let mut out: Vec<(String, &[f64])> = self
            .params
            .names(Some(&names))
            .into_iter()
            .zip(self.params.blocks().into_iter().map(|(_, b)| b))
            .collect();
        for (name, layers) in names.iter().zip(&self.running) {
            for (i, st) in layers.iter().enumerate() {
                out.push((format!("branch.{name}.conv{i}.running_mean"), slice_of(&st.mean)));
                out.push((format!("branch.{name}.conv{i}.running_var"), slice_of(&st.var)));
            }
        }
        out
    }

    pub fn all_blocks_mut(&mut self) -> Vec<(String, &mut [f64])> {
        let names: Vec<String> = self.arch.branches.iter().map(|b| b.name.clone()).collect();
        let param_names = self.params.names(Some(&names));
        let mut out: Vec<(String, &mut [f64])> = param_names
            .into_iter()
            .zip(self.params.blocks_mut().into_iter().map(|(_, b)| b))
            .collect();
        for (name, layers) in names.iter().zip(self.running.iter_mut()) {
            for (i, st) in layers.iter_mut().enumerate() {
                out.push((format!("branch.{name}.conv{i}.running_mean"), slice_of_mut(&mut st.mean)));
                out.push((format!("branch.{name}.conv{i}.running_var"), slice_of_mut(&mut st.var)));
            }
        }
        out
    }

    /// Fold a training pass's batch statistics into the running statistics.
    pub fn apply_batch_stats(&mut self, cache: &ForwardCache) {
        for (running, batch) in self.running.iter_mut().flatten().zip(cache.batch_stats.iter().flatten()) {
            update_running(running, batch);
        }
    }

    fn check_inputs(&self, inputs: &[ArrayView4<f64>]) -> Result<(usize, usize)> {
        if inputs.len() != self.arch.branches.len() {
            return Err(Error::validation(format!(
                "model expects inputs for branches [{}], got {} volumes",
                self.arch.branch_names().join(", "),
                inputs.len()
            )));
        }
        let (b, t) = (inputs[0].dim().0, inputs[0].dim().1);
        for (x, spec) in inputs.iter().zip(&self.arch.branches) {
            let (xb, xt, xl, xc) = x.dim();
            if (xb, xt) != (b, t) {
                return Err(Error::validation("branch inputs disagree on batch size or frame count"));
            }
            if (xl, xc) != (spec.input_len, spec.input_layers) {
                return Err(Error::validation(format!(
                    "branch `{}` expects {}x{} frames, got {xl}x{xc}",
                    spec.name, spec.input_len, spec.input_layers
                )));
            }
        }
        if b == 0 || t == 0 {
            return Err(Error::validation("empty input batch"));
        }
        Ok((b, t))
    }

    /// Forward pass over `(B, T, L, C)` inputs, one per branch in architecture
    /// order. Returns probabilities `(B, T, K)` and the cache for
    /// [`Model::backward`]. Running statistics are not touched; see
    /// [`Model::apply_batch_stats`].
    pub fn forward<R: Rng>(
        &self,
        inputs: &[ArrayView4<f64>],
        mode: Mode,
        mut dropout: Option<Dropout<'_, R>>,
    ) -> Result<(Array3<f64>, ForwardCache)> {
        let (batch, frames) = self.check_inputs(inputs)?;
        if mode == Mode::Infer {
            dropout = None;
        }
        let mut conv_caches = Vec::with_capacity(inputs.len());
        let mut batch_stats = Vec::with_capacity(inputs.len());
        let mut flattened = Vec::with_capacity(inputs.len());
        for (bi, x) in inputs.iter().enumerate() {
            let mut h = x.to_owned();
            let mut caches = Vec::new();
            let mut stats = Vec::new();
            for (li, p) in self.params.branches[bi].iter().enumerate() {
                let spec = self.arch.branches[bi].layers[li];
                let conv = conv2d_forward(h.view(), &p.kernel, &p.bias)?;
                let (normed, bn) = match mode {
                    Mode::Train => {
                        let (y, cache, st) = batchnorm_train(conv.view(), &p.gamma, &p.beta)?;
                        stats.push(st);
                        (y, Some(cache))
                    }
                    Mode::Infer => (
                        batchnorm_infer(conv.view(), &p.gamma, &p.beta, &self.running[bi][li])?,
                        None,
                    ),
                };
                let (mut pooled, pool_arg) = maxpool_feature_axis(relu(&normed).view(), spec.pool)?;
                let mask = dropout
                    .as_mut()
                    .filter(|d| d.rate > 0.0)
                    .map(|d| dropout_mask(pooled.raw_dim(), d.rate, d.rng));
                if let Some(m) = &mask {
                    pooled *= m;
                }
                caches.push(ConvBlockCache {
                    input: h,
                    bn,
                    normed,
                    pool_arg,
                    dropout: mask,
                });
                h = pooled;
            }
            let (b, t, l, f) = h.dim();
            flattened.push(h.into_shape_with_order((b, t, l * f)).expect("contiguous"));
            conv_caches.push(caches);
            batch_stats.push(stats);
        }
        let views: Vec<_> = flattened.iter().map(|a| a.view()).collect();
        let merged = ndarray::concatenate(Axis(2), &views).expect("shared batch and time");
        debug_assert_eq!(merged.dim(), (batch, frames, self.arch.merged_width()));

        let mut seq = merged.clone();
        let mut rnn_inputs = Vec::new();
        let mut rnn = Vec::new();
        let mut rnn_dropout = Vec::new();
        for p in &self.params.recurrent {
            let (mut y, cache) = bilstm_forward(seq.view(), p)?;
            let mask = dropout
                .as_mut()
                .filter(|d| d.rate > 0.0)
                .map(|d| dropout_mask(y.raw_dim(), d.rate, d.rng));
            if let Some(m) = &mask {
                y *= m;
            }
            rnn_inputs.push(seq);
            rnn.push(cache);
            rnn_dropout.push(mask);
            seq = y;
        }
        let probs = output_forward(seq.view(), &self.params.output)?;
        let cache = ForwardCache {
            mode,
            conv: conv_caches,
            merged,
            rnn_inputs,
            rnn,
            rnn_dropout,
            head_input: seq,
            probs: probs.clone(),
            batch_stats,
        };
        Ok((probs, cache))
    }

    /// Inference without dropout: `(B, T, K)` probabilities.
    pub fn predict_proba(&self, inputs: &[ArrayView4<f64>]) -> Result<Array3<f64>> {
        Ok(self.forward::<rand_chacha::ChaCha8Rng>(inputs, Mode::Infer, None)?.0)
    }

    /// Masked BCE loss and its exact gradient with respect to every learnable
    /// block, from a training-mode cache.
    pub fn backward(
        &self,
        cache: &ForwardCache,
        targets: ArrayView3<f64>,
        mask: ArrayView2<f64>,
    ) -> Result<(f64, ModelParams)> {
        if cache.mode != Mode::Train {
            return Err(Error::validation("backward needs a training-mode forward pass"));
        }
        let loss = bce_loss(cache.probs.view(), targets, mask)?;
        let dprobs = bce_backward(cache.probs.view(), targets, mask)?;
        let mut grads = ModelParams::zeros(&self.arch);

        let (mut dseq, g_out) = output_backward(cache.head_input.view(), &self.params.output, &cache.probs, &dprobs);
        grads.output = g_out;
        for j in (0..self.params.recurrent.len()).rev() {
            if let Some(m) = &cache.rnn_dropout[j] {
                dseq *= m;
            }
            let (dx, g) = bilstm_backward(cache.rnn_inputs[j].view(), &self.params.recurrent[j], &cache.rnn[j], dseq.view());
            grads.recurrent[j] = g;
            dseq = dx;
        }

        let mut offset = 0;
        for (bi, spec) in self.arch.branches.iter().enumerate() {
            let width = spec.output_width();
            let (b, t, _) = dseq.dim();
            let mut dh = dseq
                .slice(s![.., .., offset..offset + width])
                .to_owned()
                .into_shape_with_order((b, t, spec.output_len(), spec.output_maps()))
                .expect("contiguous");
            offset += width;
            for li in (0..spec.layers.len()).rev() {
                let c = &cache.conv[bi][li];
                let p = &self.params.branches[bi][li];
                if let Some(m) = &c.dropout {
                    dh *= m;
                }
                let dpool_in = maxpool_backward(&dh, &c.pool_arg, c.normed.dim().2);
                let dnormed = relu_backward(&c.normed, &dpool_in);
                let bn = c.bn.as_ref().expect("training cache");
                let (dconv, dgamma, dbeta) = batchnorm_backward(dnormed.view(), &p.gamma, bn);
                let (dx, dk, db) = conv2d_backward(c.input.view(), &p.kernel, dconv.view())?;
                let g = &mut grads.branches[bi][li];
                g.kernel = dk;
                g.bias = db;
                g.gamma = dgamma;
                g.beta = dbeta;
                dh = dx;
            }
        }

        let names: Vec<String> = self.arch.branches.iter().map(|b| b.name.clone()).collect();
        for (name, (_, block)) in grads.names(Some(&names)).into_iter().zip(grads.blocks()) {
            if block.iter().any(|v| !v.is_finite()) {
                return Err(Error::Numeric(format!("non-finite gradient in block {name}")));
            }
        }
        Ok((loss, grads))
    }
}
