use std::collections::{BTreeMap, HashSet};
use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::evaluate::{evaluate_samples, EvalConfig, EvalOutput};
use super::report::{ResultsTable, TableRow};
use crate::checkpoint::Checkpoint;
use crate::data::Sample;
use crate::detector::{Model, ModelConfig};
use crate::error::{MarsError, Result};
use crate::training::{fit, Adam, NoObserver, TrainConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DatasetMode {
    Original,
    Augmented,
}

impl DatasetMode {
    pub fn as_str(&self) -> &'static str {
        match self {
            DatasetMode::Original => "original",
            DatasetMode::Augmented => "augmented",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DomainMode {
    Off,
    On,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct BlockFlags {
    pub residual: bool,
    pub channel_attention: bool,
    pub residual_attention: bool,
    pub multi_scale_attention: bool,
    pub domain: bool,
}

impl BlockFlags {
    pub fn apply(&self, cfg: &ModelConfig) -> ModelConfig {
        ModelConfig {
            use_residual: self.residual,
            use_channel_attention: self.channel_attention,
            use_residual_attention: self.residual_attention,
            use_multi_scale_attention: self.multi_scale_attention,
            use_domain: self.domain,
            ..cfg.clone()
        }
    }

    pub fn label(&self) -> String {
        self.apply(&ModelConfig::default()).variant_label()
    }

    /// File-name friendly identifier.
    pub fn slug(&self) -> String {
        let mut parts = Vec::new();
        for (on, name) in [
            (self.domain, "domain"),
            (self.residual, "res"),
            (self.channel_attention, "ca"),
            (self.residual_attention, "ra"),
            (self.multi_scale_attention, "msa"),
        ] {
            if on {
                parts.push(name);
            }
        }
        if parts.is_empty() {
            "baseline".into()
        } else {
            parts.join("-")
        }
    }
}

/// Block combinations of the results tables, in row order.
const ROW_BLOCKS: [(bool, bool, bool, bool); 8] = [
    (false, false, false, false),
    (true, false, false, false),
    (false, true, false, false),
    (false, false, true, false),
    (false, false, false, true),
    (true, false, false, true),
    (false, true, false, true),
    (true, true, false, true),
];

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Variant {
    pub label: String,
    pub flags: BlockFlags,
}

impl Variant {
    pub fn new(flags: BlockFlags) -> Self {
        Variant {
            label: flags.label(),
            flags,
        }
    }
}

/// The standard row set: eight block combinations without the domain
/// branch, or the plain baseline followed by the eight with it.
pub fn table_variants(domain: DomainMode) -> Vec<Variant> {
    let with = domain == DomainMode::On;
    let mut rows = Vec::new();
    if with {
        rows.push(Variant::new(BlockFlags::default()));
    }
    for (r, c, ra, m) in ROW_BLOCKS {
        rows.push(Variant::new(BlockFlags {
            residual: r,
            channel_attention: c,
            residual_attention: ra,
            multi_scale_attention: m,
            domain: with,
        }));
    }
    rows
}

/// Flags for a row label such as `+Domain +Residual+Multi-Scale Attention`.
pub fn variant_from_label(label: &str) -> Result<Variant> {
    let want = label.trim();
    for bits in 0u8..32 {
        let flags = BlockFlags {
            residual: bits & 1 != 0,
            channel_attention: bits & 2 != 0,
            residual_attention: bits & 4 != 0,
            multi_scale_attention: bits & 8 != 0,
            domain: bits & 16 != 0,
        };
        if flags.label() == want {
            return Ok(Variant::new(flags));
        }
    }
    Err(MarsError::config(format!("unknown variant label {want:?}")))
}

pub fn table_title(dataset: DatasetMode, domain: DomainMode) -> String {
    let d = match dataset {
        DatasetMode::Original => "original data",
        DatasetMode::Augmented => "augmented data",
    };
    let m = match domain {
        DomainMode::Off => "without domain",
        DomainMode::On => "with domain",
    };
    format!("Results on {d} {m}")
}

#[derive(Debug, Clone, PartialEq)]
pub struct AblationSpec {
    pub variants: Vec<Variant>,
    pub dataset_mode: DatasetMode,
    pub domain_mode: DomainMode,
    /// Base model; the block flags come from each variant.
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
    /// Parameter initialisation seed shared by every variant.
    pub init_seed: u64,
}

impl AblationSpec {
    pub fn violations(&self) -> Vec<String> {
        let mut v = Vec::new();
        if self.variants.is_empty() {
            v.push("ablation lists no variants".into());
        }
        let mut seen = HashSet::new();
        for var in &self.variants {
            if !seen.insert(var.label.as_str()) {
                v.push(format!("duplicate variant label {:?}", var.label));
            }
            if var.flags.domain && self.domain_mode == DomainMode::Off {
                v.push(format!(
                    "variant {:?} uses the domain branch in a domain-off table",
                    var.label
                ));
            }
            v.extend(var.flags.apply(&self.model).violations());
        }
        v.extend(self.train.violations());
        v.extend(self.eval.violations());
        v.sort();
        v.dedup();
        v
    }
}

/// Train and validation samples for one dataset mode.
pub struct AblationData<'a> {
    pub train: &'a [Sample],
    pub val: &'a [Sample],
    pub classes: &'a [String],
}

/// Finished runs keyed by dataset mode and flags, so a variant shared by two
/// tables trains once. Only valid for one fixed spec configuration.
#[derive(Default)]
pub struct RunCache {
    runs: BTreeMap<(DatasetMode, BlockFlags), TableRowValues>,
}

type TableRowValues = std::result::Result<[f64; 6], String>;

fn train_and_evaluate(
    spec: &AblationSpec,
    flags: BlockFlags,
    data: &AblationData<'_>,
) -> Result<(Model, EvalOutput)> {
    let cfg = flags.apply(&spec.model);
    let mut model = Model::build(&cfg, spec.init_seed)?;
    let mut opt = Adam::new(spec.train.learning_rate);
    fit(&mut model, data.train, &spec.train, &mut opt, &mut NoObserver)?;
    let out = evaluate_samples(&model, data.val, data.classes, &spec.eval)?;
    Ok((model, out))
}

fn persist(dir: &Path, slug: &str, model: &Model, out: &EvalOutput) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| MarsError::io(dir, e))?;
    Checkpoint::from_model(model, None).save(&dir.join(format!("{slug}.ckpt")))?;
    let eval_path = dir.join(format!("{slug}.eval.json"));
    let text = serde_json::to_string_pretty(&out.result)? + "\n";
    fs::write(&eval_path, text).map_err(|e| MarsError::io(&eval_path, e))?;
    let det_path = dir.join(format!("{slug}.detections.jsonl"));
    let mut f = fs::File::create(&det_path).map_err(|e| MarsError::io(&det_path, e))?;
    for r in &out.records {
        writeln!(f, "{}", serde_json::to_string(r)?).map_err(|e| MarsError::io(&det_path, e))?;
    }
    Ok(())
}

/// Train and evaluate every variant under the same seed and data. A failing
/// variant becomes a `failed` row; the others still run. With `out_dir`, each
/// run leaves a checkpoint, its EvalResult and the scored detections under
/// `out_dir/runs/<dataset mode>/`.
pub fn run_ablation(
    spec: &AblationSpec,
    data: &AblationData<'_>,
    out_dir: Option<&Path>,
    cache: &mut RunCache,
) -> Result<ResultsTable> {
    let v = spec.violations();
    if !v.is_empty() {
        return Err(MarsError::Config(v));
    }
    let mut rows = Vec::with_capacity(spec.variants.len());
    for var in &spec.variants {
        let key = (spec.dataset_mode, var.flags);
        let values = match cache.runs.get(&key) {
            Some(v) => v.clone(),
            None => {
                log::info!(
                    "ablation: training {} on {} data",
                    var.label,
                    spec.dataset_mode.as_str()
                );
                let outcome = train_and_evaluate(spec, var.flags, data).and_then(|(model, out)| {
                    if let Some(dir) = out_dir {
                        persist(
                            &dir.join("runs").join(spec.dataset_mode.as_str()),
                            &var.flags.slug(),
                            &model,
                            &out,
                        )?;
                    }
                    let r = &out.result;
                    let mut vals = [0.0; 6];
                    for (i, ap) in r.per_class_ap.iter().take(5).enumerate() {
                        vals[i] = *ap;
                    }
                    vals[5] = r.map;
                    Ok(vals)
                });
                let v = outcome.map_err(|e| {
                    log::warn!("ablation: {} failed: {e}", var.label);
                    e.to_string()
                });
                cache.runs.insert(key, v.clone());
                v
            }
        };
        rows.push(match values {
            Ok(v) => TableRow {
                label: var.label.clone(),
                values: Some(v),
                error: None,
            },
            Err(e) => TableRow {
                label: var.label.clone(),
                values: None,
                error: Some(e),
            },
        });
    }
    Ok(ResultsTable {
        title: table_title(spec.dataset_mode, spec.domain_mode),
        ap_mode: spec.eval.ap_mode,
        iou_threshold: spec.eval.match_iou_threshold,
        domain_training: (spec.domain_mode == DomainMode::On).then(|| {
            if spec.train.adversarial_domain {
                "adversarially (gradient reversal)".to_string()
            } else {
                "cooperatively".to_string()
            }
        }),
        validation: None,
        rows,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn row_sets() {
        let off = table_variants(DomainMode::Off);
        let on = table_variants(DomainMode::On);
        assert_eq!(off.len(), 8);
        assert_eq!(on.len(), 9);
        assert_eq!(off[0].label, "Baseline (YOLOv3)");
        assert_eq!(off[7].label, "+Residual+Channel Attention+Multi-Scale Attention");
        assert_eq!(on[0].label, "Baseline (YOLOv3)");
        assert_eq!(on[1].label, "+Domain");
        assert_eq!(on[4].label, "+Domain +Residual Attention");
        assert_eq!(
            on[8].label,
            "+Domain +Residual+Channel Attention+Multi-Scale Attention"
        );
    }

    #[test]
    fn labels_parse_back() {
        for v in table_variants(DomainMode::On)
            .into_iter()
            .chain(table_variants(DomainMode::Off))
        {
            assert_eq!(variant_from_label(&v.label).unwrap(), v);
        }
        assert!(variant_from_label("+Magic").is_err());
    }
}
