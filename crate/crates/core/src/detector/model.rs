use ndarray::{ArrayD, Axis};

use super::config::{Backbone, ModelConfig, STRIDES};
use crate::blocks::{
    channel_attention_forward_graph, domain_logits_graph, multi_scale_attention_forward_graph,
    residual_attention_forward_graph, residual_block_forward_graph, BatchNorm, ChannelAttentionParams,
    Conv2d, DomainClassifierParams, DomainDistribution, MultiScaleAttentionParams, ResidualBlockParams,
};
use crate::error::{MarsError, Result};
use crate::graph::{softmax_in_place, Graph, Mode, Var};
use crate::params::{ParamStore, Tensor};

const LEAKY_SLOPE: f64 = 0.1;
/// Initial objectness logit, a prior of roughly 1% per anchor.
const OBJECTNESS_PRIOR_LOGIT: f64 = -4.6;

/// Conv (no bias) + batch norm + leaky ReLU.
#[derive(Debug, Clone)]
struct DarknetConv {
    conv: Conv2d,
    bn: BatchNorm,
}

impl DarknetConv {
    fn new(store: &mut ParamStore, name: &str, cin: usize, cout: usize, k: usize, stride: usize) -> Self {
        DarknetConv {
            conv: Conv2d::new(store, &format!("{name}.conv"), cin, cout, k, stride, k / 2, false),
            bn: BatchNorm::new(store, &format!("{name}.bn"), cout),
        }
    }

    fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var, mode: Mode) -> Result<Var> {
        let h = self.conv.forward(g, store, x)?;
        let h = self.bn.forward(g, store, h, mode)?;
        Ok(g.leaky_relu(h, LEAKY_SLOPE))
    }
}

#[derive(Debug, Clone)]
struct Stage {
    down: DarknetConv,
    units: Vec<(DarknetConv, DarknetConv)>,
}

#[derive(Debug, Clone)]
struct Head {
    set: Vec<DarknetConv>,
    out: DarknetConv,
    det: Conv2d,
    route: Option<DarknetConv>,
}

#[derive(Debug, Clone, Default)]
struct Site {
    residual: Option<ResidualBlockParams>,
    channel: Option<ChannelAttentionParams>,
    fused: Option<(ResidualBlockParams, ChannelAttentionParams)>,
}

struct Topology {
    stem: (usize, usize),
    /// `(channels, stride, residual units)`.
    stages: Vec<(usize, usize, usize)>,
    /// Stage indices tapped for strides 8, 16, 32.
    taps: [usize; 3],
    /// Conv-set width per scale, coarse to fine.
    widths: [usize; 3],
    set_depth: usize,
}

impl Topology {
    fn for_backbone(b: Backbone) -> Self {
        match b {
            Backbone::Full => Topology {
                stem: (32, 1),
                stages: vec![(64, 2, 1), (128, 2, 2), (256, 2, 8), (512, 2, 8), (1024, 2, 4)],
                taps: [2, 3, 4],
                widths: [512, 256, 128],
                set_depth: 5,
            },
            Backbone::Toy => Topology {
                stem: (8, 2),
                stages: vec![(16, 2, 0), (32, 2, 1), (64, 2, 1), (128, 2, 1), (128, 1, 0)],
                taps: [1, 2, 4],
                widths: [64, 32, 16],
                set_depth: 1,
            },
        }
    }
}

/// Raw head outputs, one `[N, 3(5+C), G, G]` tensor per scale (strides 32, 16, 8).
#[derive(Debug, Clone, PartialEq)]
pub struct RawPrediction {
    pub scales: [Tensor; 3],
}

impl RawPrediction {
    pub fn batch_size(&self) -> usize {
        self.scales[0].shape()[0]
    }

    pub fn check(&self, cfg: &ModelConfig) -> Result<()> {
        let n = self.batch_size();
        for (s, (t, g)) in self.scales.iter().zip(cfg.grid_sizes()).enumerate() {
            if t.shape() != [n, cfg.head_channels(), g, g] {
                return Err(MarsError::Structural(format!(
                    "scale {s}: raw prediction shape {:?}, expected [{n}, {}, {g}, {g}]",
                    t.shape(),
                    cfg.head_channels()
                )));
            }
        }
        Ok(())
    }

    /// The outputs of one batch item as a batch of one.
    pub fn item(&self, i: usize) -> RawPrediction {
        RawPrediction {
            scales: [0, 1, 2].map(|s| {
                self.scales[s]
                    .index_axis(Axis(0), i)
                    .insert_axis(Axis(0))
                    .to_owned()
            }),
        }
    }
}

/// Graph nodes produced by one forward pass.
pub struct ForwardVars {
    pub raw: [Var; 3],
    /// Domain logits `[N, K]` per scale, when the domain branch is enabled.
    pub domain_logits: Option<[Var; 3]>,
}

/// Materialised forward results.
#[derive(Debug, Clone)]
pub struct ForwardOutput {
    pub raw: RawPrediction,
    /// `[scale][batch item]`.
    pub domains: Option<[Vec<DomainDistribution>; 3]>,
}

#[derive(Debug, Clone)]
pub struct Model {
    cfg: ModelConfig,
    store: ParamStore,
    stem: DarknetConv,
    stages: Vec<Stage>,
    taps: [usize; 3],
    heads: [Head; 3],
    sites: [Site; 3],
    msa: Option<MultiScaleAttentionParams>,
    domain: Option<[DomainClassifierParams; 3]>,
}

impl Model {
    /// Build the network for `cfg`, initialising every tensor from `(seed, name)`.
    pub fn build(cfg: &ModelConfig, seed: u64) -> Result<Model> {
        cfg.validate()?;
        let mut store = ParamStore::new(seed);
        let topo = Topology::for_backbone(cfg.backbone);

        let stem = DarknetConv::new(&mut store, "backbone.stem", 3, topo.stem.0, 3, topo.stem.1);
        let mut cin = topo.stem.0;
        let mut stages = Vec::new();
        let mut tap_channels = [0usize; 3];
        for (i, &(c, stride, n_res)) in topo.stages.iter().enumerate() {
            let name = format!("backbone.stage{i}");
            let down = DarknetConv::new(&mut store, &format!("{name}.down"), cin, c, 3, stride);
            let units = (0..n_res)
                .map(|j| {
                    (
                        DarknetConv::new(&mut store, &format!("{name}.res{j}.conv1"), c, c / 2, 1, 1),
                        DarknetConv::new(&mut store, &format!("{name}.res{j}.conv2"), c / 2, c, 3, 1),
                    )
                })
                .collect();
            stages.push(Stage { down, units });
            for (t, &idx) in topo.taps.iter().enumerate() {
                if idx == i {
                    tap_channels[t] = c;
                }
            }
            cin = c;
        }
        // tap_channels is ordered by stride 8, 16, 32; heads run coarse to fine.
        let backbone_out = [tap_channels[2], tap_channels[1], tap_channels[0]];

        let mut heads = Vec::new();
        let mut prev_route = 0;
        for s in 0..3 {
            let w = topo.widths[s];
            let mut c = backbone_out[s] + prev_route;
            let mut set = Vec::new();
            for k in 0..topo.set_depth {
                let (cout, ksize) = if k % 2 == 0 { (w, 1) } else { (2 * w, 3) };
                set.push(DarknetConv::new(
                    &mut store,
                    &format!("head{s}.set{k}"),
                    c,
                    cout,
                    ksize,
                    1,
                ));
                c = cout;
            }
            let out = DarknetConv::new(&mut store, &format!("head{s}.out"), c, 2 * w, 3, 1);
            let det = Conv2d::new(
                &mut store,
                &format!("head{s}.det"),
                2 * w,
                cfg.head_channels(),
                1,
                1,
                0,
                true,
            );
            let bias = det.bias.expect("detection conv has a bias");
            for a in 0..3 {
                store.get_mut(bias)[[a * cfg.outputs_per_anchor() + 4]] = OBJECTNESS_PRIOR_LOGIT;
            }
            let route = (s < 2).then(|| {
                let r = topo.widths[s + 1];
                prev_route = r;
                DarknetConv::new(&mut store, &format!("head{s}.route"), c, r, 1, 1)
            });
            heads.push(Head { set, out, det, route });
        }
        let feat = topo.widths.map(|w| 2 * w);

        let mut sites: [Site; 3] = Default::default();
        for (s, site) in sites.iter_mut().enumerate() {
            let c = feat[s];
            if cfg.use_residual {
                site.residual = Some(ResidualBlockParams::new(
                    &mut store,
                    &format!("site{s}.residual"),
                    c,
                ));
            }
            if cfg.use_channel_attention {
                site.channel = Some(ChannelAttentionParams::new(
                    &mut store,
                    &format!("site{s}.channel_attention"),
                    c,
                    cfg.reduction_ratio,
                )?);
            }
            if cfg.use_residual_attention {
                site.fused = Some((
                    ResidualBlockParams::new(&mut store, &format!("site{s}.residual_attention.residual"), c),
                    ChannelAttentionParams::new(
                        &mut store,
                        &format!("site{s}.residual_attention.attention"),
                        c,
                        cfg.reduction_ratio,
                    )?,
                ));
            }
        }
        let msa = cfg
            .use_multi_scale_attention
            .then(|| MultiScaleAttentionParams::new(&mut store, "multi_scale_attention", feat));
        let domain = cfg.use_domain.then(|| {
            [0, 1, 2].map(|s| {
                DomainClassifierParams::new(
                    &mut store,
                    &format!("domain{s}"),
                    feat[s],
                    cfg.domain_channels,
                    cfg.num_domains,
                )
            })
        });

        Ok(Model {
            cfg: cfg.clone(),
            store,
            stem,
            stages,
            taps: topo.taps,
            heads: heads
                .try_into()
                .map_err(|_| MarsError::Structural("three heads".into()))?,
            sites,
            msa,
            domain,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    /// Trainable scalar count; a pure function of the config.
    pub fn num_parameters(&self) -> usize {
        self.store.num_trainable()
    }

    /// Names of the domain-branch parameters (empty without the branch).
    pub fn domain_param_names(&self) -> Vec<String> {
        self.domain
            .iter()
            .flatten()
            .flat_map(|d| d.params())
            .map(|id| self.store.name(id).to_string())
            .collect()
    }

    fn check_images(&self, shape: &[usize]) -> Result<()> {
        let s = self.cfg.input_size;
        match shape {
            &[n, 3, h, w] if n > 0 && h == s && w == s => Ok(()),
            _ => Err(MarsError::Structural(format!(
                "images must be [N, 3, {s}, {s}], got {shape:?}"
            ))),
        }
    }

    /// Forward pass on a graph. `domain_grad_reverse` inserts a gradient
    /// reversal of the given strength in front of each domain classifier.
    pub fn forward_graph(
        &self,
        g: &mut Graph,
        images: Var,
        mode: Mode,
        domain_grad_reverse: Option<f64>,
    ) -> Result<ForwardVars> {
        self.check_images(g.shape(images))?;
        let st = &self.store;
        let mut x = self.stem.forward(g, st, images, mode)?;
        let mut taps = [x; 3];
        for (i, stage) in self.stages.iter().enumerate() {
            x = stage.down.forward(g, st, x, mode)?;
            for (c1, c2) in &stage.units {
                let h = c1.forward(g, st, x, mode)?;
                let h = c2.forward(g, st, h, mode)?;
                x = g.add(x, h)?;
            }
            for (t, &idx) in self.taps.iter().enumerate() {
                if idx == i {
                    taps[t] = x;
                }
            }
        }
        let backbone_out = [taps[2], taps[1], taps[0]];

        let mut feats = Vec::with_capacity(3);
        let mut carry: Option<Var> = None;
        for (s, head) in self.heads.iter().enumerate() {
            let mut h = match carry {
                Some(r) => {
                    let up = g.upsample2(r)?;
                    g.concat_channels(&[up, backbone_out[s]])?
                }
                None => backbone_out[s],
            };
            for conv in &head.set {
                h = conv.forward(g, st, h, mode)?;
            }
            carry = match &head.route {
                Some(r) => Some(r.forward(g, st, h, mode)?),
                None => None,
            };
            let mut f = head.out.forward(g, st, h, mode)?;
            let site = &self.sites[s];
            if let Some(rp) = &site.residual {
                f = residual_block_forward_graph(g, st, f, rp, mode)?;
            }
            if let Some(cp) = &site.channel {
                f = channel_attention_forward_graph(g, st, f, cp)?;
            }
            if let Some((rp, cp)) = &site.fused {
                f = residual_attention_forward_graph(g, st, f, rp, cp, mode)?;
            }
            feats.push(f);
        }
        if let Some(msa) = &self.msa {
            let gated = multi_scale_attention_forward_graph(g, st, &feats, msa)?;
            feats = gated.to_vec();
        }
        let domain_logits = match &self.domain {
            Some(dcs) => {
                let mut out = Vec::with_capacity(3);
                for (f, dc) in feats.iter().zip(dcs) {
                    let inp = match domain_grad_reverse {
                        Some(k) => g.grad_reverse(*f, k),
                        None => *f,
                    };
                    out.push(domain_logits_graph(g, st, inp, dc)?);
                }
                Some([out[0], out[1], out[2]])
            }
            None => None,
        };
        let mut raw = Vec::with_capacity(3);
        for (f, head) in feats.iter().zip(&self.heads) {
            raw.push(head.det.forward(g, st, *f)?);
        }
        Ok(ForwardVars {
            raw: [raw[0], raw[1], raw[2]],
            domain_logits,
        })
    }

    /// Inference-only forward pass over `[N, 3, S, S]` images in `[0, 1]`.
    pub fn forward(&self, images: &ArrayD<f64>, mode: Mode) -> Result<ForwardOutput> {
        self.check_images(images.shape())?;
        let mut g = Graph::inference();
        let x = g.input(images.clone());
        let vars = self.forward_graph(&mut g, x, mode, None)?;
        let raw = RawPrediction {
            scales: vars.raw.map(|v| g.value(v).clone()),
        };
        let domains = match vars.domain_logits {
            Some(logits) => {
                let mut per_scale: [Vec<DomainDistribution>; 3] = Default::default();
                for (s, l) in logits.iter().enumerate() {
                    let t = g.value(*l);
                    let k = t.shape()[1];
                    let data = t.as_slice().expect("standard layout");
                    for row in data.chunks(k) {
                        let mut p = row.to_vec();
                        softmax_in_place(&mut p);
                        per_scale[s].push(DomainDistribution::new(p)?);
                    }
                }
                Some(per_scale)
            }
            None => None,
        };
        Ok(ForwardOutput { raw, domains })
    }

    /// Grid size per scale for this model's input size.
    pub fn grid_sizes(&self) -> [usize; 3] {
        STRIDES.map(|s| self.cfg.input_size / s)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::IxDyn;

    fn images(n: usize, s: usize, fill: f64) -> ArrayD<f64> {
        ArrayD::from_elem(IxDyn(&[n, 3, s, s]), fill)
    }

    #[test]
    fn toy_grids_and_channels() {
        let cfg = ModelConfig::toy(96);
        let m = Model::build(&cfg, 1).unwrap();
        let out = m.forward(&images(1, 96, 0.5), Mode::Eval).unwrap();
        for (t, g) in out.raw.scales.iter().zip([3, 6, 12]) {
            assert_eq!(t.shape(), [1, 30, g, g]);
        }
        assert!(out.domains.is_none());
    }

    #[test]
    fn wrong_input_size_is_structural() {
        let m = Model::build(&ModelConfig::toy(96), 1).unwrap();
        assert!(matches!(
            m.forward(&images(1, 64, 0.5), Mode::Eval),
            Err(MarsError::Structural(_))
        ));
    }

    #[test]
    fn invalid_flags_rejected() {
        let cfg = ModelConfig {
            use_residual: true,
            use_channel_attention: true,
            use_residual_attention: true,
            ..ModelConfig::toy(64)
        };
        assert!(matches!(Model::build(&cfg, 0), Err(MarsError::Config(_))));
    }

    #[test]
    fn domain_outputs_present_when_enabled() {
        let cfg = ModelConfig {
            use_domain: true,
            ..ModelConfig::toy(64)
        };
        let m = Model::build(&cfg, 3).unwrap();
        let out = m.forward(&images(2, 64, 0.3), Mode::Eval).unwrap();
        let d = out.domains.unwrap();
        for s in &d {
            assert_eq!(s.len(), 2);
            assert!(s.iter().all(|p| p.len() == 7));
        }
    }

    #[test]
    fn parameter_count_depends_only_on_config() {
        let cfg = ModelConfig {
            use_residual_attention: true,
            use_multi_scale_attention: true,
            ..ModelConfig::toy(64)
        };
        let a = Model::build(&cfg, 1).unwrap();
        let b = Model::build(&cfg, 2).unwrap();
        assert_eq!(a.num_parameters(), b.num_parameters());
        let base = Model::build(&ModelConfig::toy(64), 1).unwrap();
        assert!(a.num_parameters() > base.num_parameters());
    }
}
