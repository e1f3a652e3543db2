//! Attention and residual blocks inserted in front of the detection
//! convolutions, plus the per-scale domain classifier.
//!
//! Each block owns handles into a [`ParamStore`] and exposes two entry
//! points: a graph-level `*_forward_graph` used by the detector and the
//! trainer, and a [`FeatureMap`]-level function for single maps.

use ndarray::{Array1, Array3, ArrayD, IxDyn};

use crate::error::{MarsError, Result};
use crate::graph::{Graph, Mode, Var};
use crate::params::{fan_in_bound, ParamId, ParamStore};

/// Batch-norm epsilon used by every normalisation layer.
pub const BN_EPS: f64 = 1e-5;

/// A single `[C, H, W]` map with finite values.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap {
    values: Array3<f64>,
}

impl FeatureMap {
    pub fn new(values: Array3<f64>) -> Result<Self> {
        let (c, h, w) = values.dim();
        if c == 0 || h == 0 || w == 0 {
            return Err(MarsError::Structural(format!(
                "feature map dimensions must be positive, got {c}x{h}x{w}"
            )));
        }
        if let Some(v) = values.iter().find(|v| !v.is_finite()) {
            return Err(MarsError::Numeric(format!(
                "feature map contains non-finite value {v}"
            )));
        }
        Ok(FeatureMap {
            values: values.as_standard_layout().into_owned(),
        })
    }

    pub fn from_vec(channels: usize, height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        let a = Array3::from_shape_vec((channels, height, width), data)
            .map_err(|e| MarsError::Structural(e.to_string()))?;
        Self::new(a)
    }

    pub fn channels(&self) -> usize {
        self.values.dim().0
    }

    pub fn height(&self) -> usize {
        self.values.dim().1
    }

    pub fn width(&self) -> usize {
        self.values.dim().2
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        self.values.dim()
    }

    pub fn values(&self) -> &Array3<f64> {
        &self.values
    }

    /// `[1, C, H, W]` batch of one.
    pub fn to_batch(&self) -> ArrayD<f64> {
        let (c, h, w) = self.shape();
        self.values
            .clone()
            .into_shape_with_order(IxDyn(&[1, c, h, w]))
            .expect("contiguous")
    }

    fn from_batch(t: &ArrayD<f64>) -> Result<Self> {
        match t.shape() {
            &[1, c, h, w] => Self::new(
                t.clone()
                    .into_shape_with_order((c, h, w))
                    .map_err(|e| MarsError::Structural(e.to_string()))?,
            ),
            s => Err(MarsError::Structural(format!(
                "expected a batch of one map, got {s:?}"
            ))),
        }
    }
}

/// Convolution with optional bias.
#[derive(Debug, Clone)]
pub struct Conv2d {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

impl Conv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
        bias: bool,
    ) -> Self {
        let fan_in = in_channels * kernel * kernel;
        let weight = store.uniform(
            &format!("{name}.weight"),
            &[out_channels, in_channels, kernel, kernel],
            fan_in_bound(fan_in),
        );
        let bias = bias.then(|| {
            store.uniform(
                &format!("{name}.bias"),
                &[out_channels],
                1.0 / (fan_in as f64).sqrt(),
            )
        });
        Conv2d {
            weight,
            bias,
            in_channels,
            out_channels,
            kernel,
            stride,
            pad,
        }
    }

    /// 1x1, stride 1, with bias.
    pub fn pointwise(store: &mut ParamStore, name: &str, cin: usize, cout: usize) -> Self {
        Self::new(store, name, cin, cout, 1, 1, 0, true)
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let w = g.param(store, self.weight);
        let b = self.bias.map(|b| g.param(store, b));
        g.conv2d(x, w, b, self.stride, self.pad)
    }

    /// Zero the kernel and bias.
    pub fn zero(&self, store: &mut ParamStore) {
        store.get_mut(self.weight).fill(0.0);
        if let Some(b) = self.bias {
            store.get_mut(b).fill(0.0);
        }
    }

    pub fn params(&self) -> Vec<ParamId> {
        std::iter::once(self.weight).chain(self.bias).collect()
    }
}

/// Per-channel affine normalisation with running statistics.
#[derive(Debug, Clone)]
pub struct BatchNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: ParamId,
    pub running_var: ParamId,
    pub channels: usize,
}

impl BatchNorm {
    pub fn new(store: &mut ParamStore, name: &str, channels: usize) -> Self {
        BatchNorm {
            gamma: store.constant(&format!("{name}.gamma"), &[channels], 1.0),
            beta: store.constant(&format!("{name}.beta"), &[channels], 0.0),
            running_mean: store.buffer(&format!("{name}.running_mean"), &[channels], 0.0),
            running_var: store.buffer(&format!("{name}.running_var"), &[channels], 1.0),
            channels,
        }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var, mode: Mode) -> Result<Var> {
        g.batch_norm(
            store,
            x,
            self.gamma,
            self.beta,
            self.running_mean,
            self.running_var,
            BN_EPS,
            mode,
        )
    }

    /// Scale 1, shift 0, running mean 0, running variance 1.
    pub fn set_identity(&self, store: &mut ParamStore) {
        store.get_mut(self.gamma).fill(1.0);
        store.get_mut(self.beta).fill(0.0);
        store.get_mut(self.running_mean).fill(0.0);
        store.get_mut(self.running_var).fill(1.0);
    }

    pub fn params(&self) -> Vec<ParamId> {
        vec![self.gamma, self.beta]
    }
}

fn check_channels(got: usize, want: usize, what: &str) -> Result<()> {
    if got != want {
        return Err(MarsError::Structural(format!(
            "{what}: input has {got} channels, block expects {want}"
        )));
    }
    Ok(())
}

// ---- residual ---------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct ResidualBlockParams {
    pub conv1: Conv2d,
    pub bn1: BatchNorm,
    pub conv2: Conv2d,
    pub bn2: BatchNorm,
    pub channels: usize,
}

impl ResidualBlockParams {
    pub fn new(store: &mut ParamStore, name: &str, channels: usize) -> Self {
        ResidualBlockParams {
            conv1: Conv2d::pointwise(store, &format!("{name}.conv1"), channels, channels),
            bn1: BatchNorm::new(store, &format!("{name}.bn1"), channels),
            conv2: Conv2d::pointwise(store, &format!("{name}.conv2"), channels, channels),
            bn2: BatchNorm::new(store, &format!("{name}.bn2"), channels),
            channels,
        }
    }

    /// `bn2(conv2(relu(bn1(conv1(x)))))`.
    fn branch(&self, g: &mut Graph, store: &ParamStore, x: Var, mode: Mode) -> Result<Var> {
        check_channels(g.shape(x)[1], self.channels, "residual block")?;
        let h = self.conv1.forward(g, store, x)?;
        let h = self.bn1.forward(g, store, h, mode)?;
        let h = g.relu(h);
        let h = self.conv2.forward(g, store, h)?;
        self.bn2.forward(g, store, h, mode)
    }
}

pub fn residual_block_forward_graph(
    g: &mut Graph,
    store: &ParamStore,
    x: Var,
    p: &ResidualBlockParams,
    mode: Mode,
) -> Result<Var> {
    let b = p.branch(g, store, x, mode)?;
    g.add(x, b)
}

// ---- channel attention --------------------------------------------------------

#[derive(Debug, Clone)]
pub struct ChannelAttentionParams {
    pub reduce: Conv2d,
    pub expand: Conv2d,
    pub reduction_ratio: usize,
    pub channels: usize,
}

impl ChannelAttentionParams {
    pub fn new(store: &mut ParamStore, name: &str, channels: usize, reduction_ratio: usize) -> Result<Self> {
        if reduction_ratio == 0 {
            return Err(MarsError::config(
                "channel attention reduction ratio must be positive",
            ));
        }
        let hidden = channels.div_ceil(reduction_ratio).max(1);
        Ok(ChannelAttentionParams {
            reduce: Conv2d::pointwise(store, &format!("{name}.reduce"), channels, hidden),
            expand: Conv2d::pointwise(store, &format!("{name}.expand"), hidden, channels),
            reduction_ratio,
            channels,
        })
    }

    pub fn hidden(&self) -> usize {
        self.reduce.out_channels
    }

    /// Per-channel gate `[N, C]`, each entry in (0, 1).
    pub fn gate(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        check_channels(g.shape(x)[1], self.channels, "channel attention")?;
        let n = g.shape(x)[0];
        let pooled = g.global_avg_pool(x)?;
        let pooled = reshape(g, pooled, &[n, self.channels, 1, 1]);
        let h = self.reduce.forward(g, store, pooled)?;
        let h = g.relu(h);
        let z = self.expand.forward(g, store, h)?;
        let s = g.sigmoid(z);
        Ok(reshape(g, s, &[n, self.channels]))
    }
}

/// Shape-only reinterpretation; data order is unchanged.
pub fn reshape(g: &mut Graph, x: Var, shape: &[usize]) -> Var {
    let src = g.shape(x).to_vec();
    let v = g
        .value(x)
        .clone()
        .into_shape_with_order(IxDyn(shape))
        .expect("reshape preserves element count");
    g.custom(&[x], v, move |_, grad| {
        vec![grad
            .as_standard_layout()
            .into_owned()
            .into_shape_with_order(IxDyn(&src))
            .expect("reshape preserves element count")]
    })
}

pub fn channel_attention_forward_graph(
    g: &mut Graph,
    store: &ParamStore,
    x: Var,
    p: &ChannelAttentionParams,
) -> Result<Var> {
    let gate = p.gate(g, store, x)?;
    g.scale_channels(x, gate)
}

// ---- fused residual attention ----------------------------------------------

/// `x + channel_attention(branch(x))`.
pub fn residual_attention_forward_graph(
    g: &mut Graph,
    store: &ParamStore,
    x: Var,
    rp: &ResidualBlockParams,
    cp: &ChannelAttentionParams,
    mode: Mode,
) -> Result<Var> {
    if rp.channels != cp.channels {
        return Err(MarsError::Structural(format!(
            "residual attention: residual has {} channels, attention {}",
            rp.channels, cp.channels
        )));
    }
    let b = rp.branch(g, store, x, mode)?;
    let gated = channel_attention_forward_graph(g, store, b, cp)?;
    g.add(x, gated)
}

// ---- multi-scale attention ---------------------------------------------------

/// One 1x1 sigmoid gate per detection scale.
#[derive(Debug, Clone)]
pub struct MultiScaleAttentionParams {
    pub gates: [Conv2d; 3],
}

impl MultiScaleAttentionParams {
    pub fn new(store: &mut ParamStore, name: &str, channels: [usize; 3]) -> Self {
        MultiScaleAttentionParams {
            gates: [0, 1, 2]
                .map(|s| Conv2d::pointwise(store, &format!("{name}.gate{s}"), channels[s], channels[s])),
        }
    }
}

/// Gate a single scale: `x * sigmoid(conv1x1(x))`.
pub fn scale_gate_forward_graph(g: &mut Graph, store: &ParamStore, x: Var, gate: &Conv2d) -> Result<Var> {
    check_channels(g.shape(x)[1], gate.in_channels, "multi-scale attention")?;
    let z = gate.forward(g, store, x)?;
    let a = g.sigmoid(z);
    g.mul(x, a)
}

pub fn multi_scale_attention_forward_graph(
    g: &mut Graph,
    store: &ParamStore,
    maps: &[Var],
    p: &MultiScaleAttentionParams,
) -> Result<[Var; 3]> {
    if maps.len() != 3 {
        return Err(MarsError::Structural(format!(
            "multi-scale attention needs exactly 3 maps, got {}",
            maps.len()
        )));
    }
    Ok([
        scale_gate_forward_graph(g, store, maps[0], &p.gates[0])?,
        scale_gate_forward_graph(g, store, maps[1], &p.gates[1])?,
        scale_gate_forward_graph(g, store, maps[2], &p.gates[2])?,
    ])
}

// ---- domain classifier --------------------------------------------------------

#[derive(Debug, Clone)]
pub struct DomainClassifierParams {
    pub feat_conv7: Conv2d,
    pub feat_conv5: Conv2d,
    pub attn_conv7: Conv2d,
    pub attn_conv5: Conv2d,
    pub head_weight: ParamId,
    pub head_bias: ParamId,
    pub num_domains: usize,
    pub in_channels: usize,
    pub feat_channels: usize,
}

impl DomainClassifierParams {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        in_channels: usize,
        feat_channels: usize,
        num_domains: usize,
    ) -> Self {
        let cf = feat_channels;
        DomainClassifierParams {
            feat_conv7: Conv2d::new(
                store,
                &format!("{name}.feat_conv7"),
                in_channels,
                cf,
                7,
                2,
                3,
                true,
            ),
            feat_conv5: Conv2d::new(store, &format!("{name}.feat_conv5"), cf, cf, 5, 2, 2, true),
            attn_conv7: Conv2d::new(store, &format!("{name}.attn_conv7"), cf, cf, 7, 2, 3, true),
            attn_conv5: Conv2d::new(store, &format!("{name}.attn_conv5"), cf, cf, 5, 2, 2, true),
            head_weight: store.uniform(
                &format!("{name}.head.weight"),
                &[num_domains, cf],
                fan_in_bound(cf),
            ),
            head_bias: store.uniform(
                &format!("{name}.head.bias"),
                &[num_domains],
                1.0 / (cf as f64).sqrt(),
            ),
            num_domains,
            in_channels,
            feat_channels: cf,
        }
    }

    pub fn zero_head(&self, store: &mut ParamStore) {
        store.get_mut(self.head_weight).fill(0.0);
        store.get_mut(self.head_bias).fill(0.0);
    }

    pub fn params(&self) -> Vec<ParamId> {
        let mut v = Vec::new();
        for c in [
            &self.feat_conv7,
            &self.feat_conv5,
            &self.attn_conv7,
            &self.attn_conv5,
        ] {
            v.extend(c.params());
        }
        v.push(self.head_weight);
        v.push(self.head_bias);
        v
    }
}

/// Domain logits `[N, K]`.
///
/// `F = relu(conv5(relu(conv7(x))))`, `P = gap(F)`,
/// `A = gap(relu(conv5'(relu(conv7'(F)))))`, logits `= head(P * A)`.
pub fn domain_logits_graph(
    g: &mut Graph,
    store: &ParamStore,
    x: Var,
    p: &DomainClassifierParams,
) -> Result<Var> {
    check_channels(g.shape(x)[1], p.in_channels, "domain classifier")?;
    let f = p.feat_conv7.forward(g, store, x)?;
    let f = g.relu(f);
    let f = p.feat_conv5.forward(g, store, f)?;
    let f = g.relu(f);
    let pooled = g.global_avg_pool(f)?;
    let a = p.attn_conv7.forward(g, store, f)?;
    let a = g.relu(a);
    let a = p.attn_conv5.forward(g, store, a)?;
    let a = g.relu(a);
    let attn = g.global_avg_pool(a)?;
    let z = g.mul(pooled, attn)?;
    let w = g.param(store, p.head_weight);
    let b = g.param(store, p.head_bias);
    g.linear(z, w, b)
}

/// A probability vector over domains.
#[derive(Debug, Clone, PartialEq)]
pub struct DomainDistribution {
    pub probs: Vec<f64>,
}

impl DomainDistribution {
    pub fn new(probs: Vec<f64>) -> Result<Self> {
        if probs.is_empty() || probs.iter().any(|p| !(0.0..=1.0).contains(p)) {
            return Err(MarsError::Numeric(format!(
                "domain probabilities out of [0,1]: {probs:?}"
            )));
        }
        let s: f64 = probs.iter().sum();
        if (s - 1.0).abs() > 1e-6 {
            return Err(MarsError::Numeric(format!("domain probabilities sum to {s}")));
        }
        Ok(DomainDistribution { probs })
    }

    pub fn argmax(&self) -> usize {
        self.probs
            .iter()
            .enumerate()
            .fold(
                (0, f64::NEG_INFINITY),
                |best, (i, &p)| {
                    if p > best.1 {
                        (i, p)
                    } else {
                        best
                    }
                },
            )
            .0
    }

    pub fn len(&self) -> usize {
        self.probs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.probs.is_empty()
    }
}

// ---- single-map entry points --------------------------------------------------

fn run_single<F>(x: &FeatureMap, f: F) -> Result<FeatureMap>
where
    F: FnOnce(&mut Graph, Var) -> Result<Var>,
{
    let mut g = Graph::inference();
    let xv = g.input(x.to_batch());
    let y = f(&mut g, xv)?;
    FeatureMap::from_batch(g.value(y))
}

pub fn residual_block_forward(
    x: &FeatureMap,
    p: &ResidualBlockParams,
    store: &ParamStore,
    mode: Mode,
) -> Result<FeatureMap> {
    run_single(x, |g, v| residual_block_forward_graph(g, store, v, p, mode))
}

pub fn channel_attention_forward(
    x: &FeatureMap,
    p: &ChannelAttentionParams,
    store: &ParamStore,
) -> Result<FeatureMap> {
    run_single(x, |g, v| channel_attention_forward_graph(g, store, v, p))
}

/// The per-channel gate values for one map.
pub fn channel_attention_gate(
    x: &FeatureMap,
    p: &ChannelAttentionParams,
    store: &ParamStore,
) -> Result<Array1<f64>> {
    let mut g = Graph::inference();
    let xv = g.input(x.to_batch());
    let gate = p.gate(&mut g, store, xv)?;
    Ok(g.value(gate).iter().copied().collect())
}

pub fn residual_attention_forward(
    x: &FeatureMap,
    rp: &ResidualBlockParams,
    cp: &ChannelAttentionParams,
    store: &ParamStore,
    mode: Mode,
) -> Result<FeatureMap> {
    run_single(x, |g, v| {
        residual_attention_forward_graph(g, store, v, rp, cp, mode)
    })
}

pub fn multi_scale_attention_forward(
    maps: &[FeatureMap],
    p: &MultiScaleAttentionParams,
    store: &ParamStore,
) -> Result<[FeatureMap; 3]> {
    if maps.len() != 3 {
        return Err(MarsError::Structural(format!(
            "multi-scale attention needs exactly 3 maps, got {}",
            maps.len()
        )));
    }
    let mut g = Graph::inference();
    let vars: Vec<Var> = maps.iter().map(|m| g.input(m.to_batch())).collect();
    let out = multi_scale_attention_forward_graph(&mut g, store, &vars, p)?;
    Ok([
        FeatureMap::from_batch(g.value(out[0]))?,
        FeatureMap::from_batch(g.value(out[1]))?,
        FeatureMap::from_batch(g.value(out[2]))?,
    ])
}

pub fn domain_classifier_forward(
    x: &FeatureMap,
    p: &DomainClassifierParams,
    store: &ParamStore,
) -> Result<DomainDistribution> {
    let mut g = Graph::inference();
    let xv = g.input(x.to_batch());
    let logits = domain_logits_graph(&mut g, store, xv, p)?;
    let probs = g.softmax(logits)?;
    DomainDistribution::new(g.value(probs).iter().copied().collect())
}
