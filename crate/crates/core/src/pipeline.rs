//! End-to-end commands: dataset generation, training, evaluation, gradient checks, ablation
//! sweeps and visualization dumps.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::backbone::{backbone_bundle, train_joint, BackboneParams, CONV1_CHANNELS, CONV2_CHANNELS};
use crate::checks::{self, KernelCheck};
use crate::config::{Mode, PipelineConfig};
use crate::dataset::{read_dataset, write_dataset, DatasetManifest};
use crate::direction::{encode_direction_labels, DirectionConfig};
use crate::error::{arg_err, Error, Result};
use crate::eval::{evaluate, EvalResult, ScoredMask};
use crate::heads::{decode_instances, sub_box_offsets, train_heads, Detection, FeatureSet, HeadParams, LogitsBundle};
use crate::params_io::{load_params, save_params};
use crate::roi::direction_pool;
use crate::synth::{generate_scenes, oracle_bundle, Scene};
use crate::viz::{
    direction_labels_rgb, image_rgb, mask_rgb, pooled_rgb, predicted_direction_labels, probability_rgb,
    semantic_argmax_rgb, sub_box_overlay,
};

pub const LOSS_LOG: &str = "loss.log";
pub const CONFIG_FILE: &str = "config.json";

#[derive(Clone, Debug, PartialEq)]
pub struct TrainedModel {
    pub heads: HeadParams,
    pub backbone: Option<BackboneParams>,
    pub loss_curve: Vec<f64>,
}

/// Oracle noise seed of one scene.
pub fn noise_seed(seed: u64, index: usize) -> u64 {
    seed.wrapping_mul(1_000_003).wrapping_add(index as u64)
}

pub fn scene_bundle(cfg: &PipelineConfig, scene: &Scene, backbone: Option<&BackboneParams>) -> Result<LogitsBundle> {
    match cfg.mode {
        Mode::Oracle => oracle_bundle(scene, &cfg.direction, cfg.noise_sigma, noise_seed(cfg.seed, scene.index)),
        Mode::Backbone => match backbone {
            Some(b) => backbone_bundle(&scene.image, b),
            None => arg_err("backbone mode needs backbone parameters"),
        },
    }
}

fn hypercolumn_channels(cfg: &PipelineConfig, sources: &[usize]) -> usize {
    sources
        .iter()
        .map(|&s| match (cfg.mode, s) {
            (Mode::Oracle, _) => 1,
            (Mode::Backbone, 0) => CONV1_CHANNELS,
            (Mode::Backbone, _) => CONV2_CHANNELS,
        })
        .sum()
}

/// Untrained heads, as used before any step is taken.
pub fn initial_heads(cfg: &PipelineConfig) -> HeadParams {
    HeadParams::init(&cfg.head, hypercolumn_channels(cfg, &cfg.head.refine_sources), cfg.train.seed)
}

/// Oracle mode trains the heads on fixed oracle bundles; backbone mode trains backbone and
/// heads jointly.
pub fn train_model(cfg: &PipelineConfig, scenes: &[Scene]) -> Result<TrainedModel> {
    cfg.validate()?;
    match cfg.mode {
        Mode::Oracle => {
            let bundles = scenes
                .iter()
                .map(|s| scene_bundle(cfg, s, None))
                .collect::<Result<Vec<_>>>()?;
            let t = train_heads(scenes, &bundles, &cfg.direction, &cfg.head, &cfg.train)?;
            Ok(TrainedModel {
                heads: t.params,
                backbone: None,
                loss_curve: t.loss_curve,
            })
        }
        Mode::Backbone => {
            let t = train_joint(scenes, &cfg.direction, &cfg.head, &cfg.backbone)?;
            Ok(TrainedModel {
                heads: t.heads,
                backbone: Some(t.backbone),
                loss_curve: t.loss_curve,
            })
        }
    }
}

/// Decodes every scene with its ground-truth boxes.
pub fn predict(cfg: &PipelineConfig, model: &TrainedModel, scenes: &[Scene]) -> Result<Vec<Vec<Detection>>> {
    scenes
        .iter()
        .map(|s| {
            let bundle = scene_bundle(cfg, s, model.backbone.as_ref())?;
            decode_instances(&bundle, &s.gt_boxes(), &cfg.direction, &model.heads, &cfg.head)
        })
        .collect()
}

/// Metrics of the final masks and of the coarse masks before refinement.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelEval {
    pub refined: EvalResult,
    pub coarse: EvalResult,
}

impl ModelEval {
    pub fn to_table(&self) -> String {
        format!(
            "{}\n{}\n{}\n",
            self.refined.table_header(),
            self.refined.table_row("final"),
            self.coarse.table_row("coarse")
        )
    }
}

pub fn evaluate_detections(cfg: &PipelineConfig, dets: &[Vec<Detection>], scenes: &[Scene]) -> Result<ModelEval> {
    let gts: Vec<_> = scenes.iter().map(|s| s.instances.clone()).collect();
    let scored = |coarse: bool| -> Vec<Vec<ScoredMask>> {
        dets.iter()
            .map(|d| {
                d.iter()
                    .map(|d| ScoredMask {
                        label: d.roi.label,
                        score: d.score,
                        mask: if coarse { d.coarse_mask.clone() } else { d.mask.clone() },
                    })
                    .collect()
            })
            .collect()
    };
    Ok(ModelEval {
        refined: evaluate(&scored(false), &gts, &cfg.eval.thresholds, cfg.eval.boundary_tol)?,
        coarse: evaluate(&scored(true), &gts, &cfg.eval.thresholds, cfg.eval.boundary_tol)?,
    })
}

pub fn evaluate_model(cfg: &PipelineConfig, model: &TrainedModel, scenes: &[Scene]) -> Result<ModelEval> {
    evaluate_detections(cfg, &predict(cfg, model, scenes)?, scenes)
}

pub fn cmd_gen(cfg: &PipelineConfig, count: usize, out_dir: &Path) -> Result<DatasetManifest> {
    cfg.validate()?;
    write_dataset(out_dir, &cfg.synth, count)
}

/// Trains on a dataset and writes the parameters, the per-step loss log and the config.
pub fn cmd_train(cfg: &PipelineConfig, data_dir: &Path, out_dir: &Path) -> Result<TrainedModel> {
    cfg.validate()?;
    let (_, scenes) = read_dataset(data_dir)?;
    let model = train_model(cfg, &scenes)?;
    save_params(out_dir, &cfg.model_hash()?, &model.heads, model.backbone.as_ref())?;
    let log: String = model
        .loss_curve
        .iter()
        .enumerate()
        .map(|(i, l)| format!("{} {:.17e}\n", i, l))
        .collect();
    fs::write(out_dir.join(LOSS_LOG), log)?;
    fs::write(out_dir.join(CONFIG_FILE), cfg.to_pretty_json()? + "\n")?;
    Ok(model)
}

/// Loads parameters saved under a matching config. Without a params directory oracle mode
/// falls back to the untrained heads.
pub fn load_model(cfg: &PipelineConfig, params_dir: Option<&Path>) -> Result<TrainedModel> {
    let model = match params_dir {
        Some(dir) => {
            let saved = load_params(dir, &cfg.model_hash()?)?;
            TrainedModel {
                heads: saved.heads,
                backbone: saved.backbone,
                loss_curve: Vec::new(),
            }
        }
        None => TrainedModel {
            heads: initial_heads(cfg),
            backbone: None,
            loss_curve: Vec::new(),
        },
    };
    if cfg.mode == Mode::Backbone && model.backbone.is_none() {
        return arg_err("backbone mode needs a params directory holding backbone weights");
    }
    Ok(model)
}

pub fn cmd_eval(cfg: &PipelineConfig, data_dir: &Path, params_dir: Option<&Path>) -> Result<ModelEval> {
    cfg.validate()?;
    let model = load_model(cfg, params_dir)?;
    let (_, scenes) = read_dataset(data_dir)?;
    evaluate_model(cfg, &model, &scenes)
}

pub fn cmd_gradcheck(cfg: &PipelineConfig) -> Result<Vec<KernelCheck>> {
    checks::run_all(cfg.seed)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AblationAxis {
    Features,
    DistanceBins,
    NumDirections,
    Refinement,
    Deformable,
    CropSize,
}

impl AblationAxis {
    pub const ALL: [AblationAxis; 6] = [
        AblationAxis::Features,
        AblationAxis::DistanceBins,
        AblationAxis::NumDirections,
        AblationAxis::Refinement,
        AblationAxis::Deformable,
        AblationAxis::CropSize,
    ];

    pub fn name(self) -> &'static str {
        match self {
            AblationAxis::Features => "features",
            AblationAxis::DistanceBins => "distance_bins",
            AblationAxis::NumDirections => "num_directions",
            AblationAxis::Refinement => "refinement",
            AblationAxis::Deformable => "deformable",
            AblationAxis::CropSize => "crop_size",
        }
    }

    pub fn default_values(self) -> Vec<String> {
        let v: &[&str] = match self {
            AblationAxis::Features => &["semantic", "direction", "both"],
            AblationAxis::DistanceBins => &["1", "4"],
            AblationAxis::NumDirections => &["4", "6", "8"],
            AblationAxis::Refinement => &["none", "0", "1", "0+1"],
            AblationAxis::Deformable => &["false", "true"],
            AblationAxis::CropSize => &["11", "21", "41"],
        };
        v.iter().map(|s| s.to_string()).collect()
    }

    /// The config of one ablation row.
    pub fn apply(self, base: &PipelineConfig, value: &str) -> Result<PipelineConfig> {
        let mut cfg = base.clone();
        let number = |v: &str| {
            v.parse::<usize>()
                .map_err(|_| Error::InvalidArgument(format!("{} value {:?} is not a count", self.name(), v)))
        };
        match self {
            AblationAxis::Features => {
                cfg.head.features = match value {
                    "semantic" => FeatureSet::SemanticOnly,
                    "direction" => FeatureSet::DirectionOnly,
                    "both" => FeatureSet::Both,
                    _ => return arg_err(format!("features value {:?} is not semantic, direction or both", value)),
                }
            }
            AblationAxis::DistanceBins => {
                let d = &cfg.direction;
                cfg.direction = DirectionConfig::new(d.num_directions, number(value)?).with_frame(d.frame);
            }
            AblationAxis::NumDirections => cfg.direction.num_directions = number(value)?,
            AblationAxis::Refinement => {
                cfg.head.refine_sources = match value {
                    "none" => Vec::new(),
                    v => v.split('+').map(number).collect::<Result<_>>()?,
                }
            }
            AblationAxis::Deformable => {
                cfg.head.deformable = value
                    .parse()
                    .map_err(|_| Error::InvalidArgument(format!("deformable value {:?} is not a bool", value)))?
            }
            AblationAxis::CropSize => cfg.head.out = number(value)?,
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

impl FromStr for AblationAxis {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        AblationAxis::ALL
            .into_iter()
            .find(|a| a.name() == s)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown ablation axis {:?}", s)))
    }
}

impl fmt::Display for AblationAxis {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub value: String,
    pub final_loss: f64,
    pub eval: ModelEval,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationTable {
    pub axis: AblationAxis,
    pub rows: Vec<AblationRow>,
}

impl AblationTable {
    pub fn row(&self, value: &str) -> Option<&AblationRow> {
        self.rows.iter().find(|r| r.value == value)
    }

    pub fn to_table(&self) -> String {
        let mut s = format!(
            "{:<14} {:>9} {:>9} {:>9} {:>9} {:>9} {:>10}\n",
            self.axis.name(),
            "mAP@0.5",
            "mAP@0.75",
            "mIoU",
            "bndF",
            "bndF.crs",
            "loss"
        );
        for r in &self.rows {
            let e = &r.eval.refined;
            s.push_str(&format!(
                "{:<14} {:>9.4} {:>9.4} {:>9.4} {:>9.4} {:>9.4} {:>10.4}\n",
                r.value,
                e.map(0.5).unwrap_or(f64::NAN),
                e.map(0.75).unwrap_or(f64::NAN),
                e.mean_iou,
                e.boundary_f,
                r.eval.coarse.boundary_f,
                r.final_loss
            ));
        }
        s
    }
}

/// Mean loss over the last tenth of training (at least one step).
fn tail_loss(curve: &[f64]) -> f64 {
    if curve.is_empty() {
        return 0.0;
    }
    let k = (curve.len() / 10).max(1);
    curve[curve.len() - k..].iter().sum::<f64>() / k as f64
}

/// Trains and evaluates one model per value on freshly generated train and test scenes.
pub fn cmd_ablate(cfg: &PipelineConfig, axis: AblationAxis, values: &[String]) -> Result<AblationTable> {
    cfg.validate()?;
    let configs = values
        .iter()
        .map(|v| axis.apply(cfg, v))
        .collect::<Result<Vec<_>>>()?;
    let a = &cfg.ablate;
    let train = generate_scenes(&cfg.synth, 0, a.train_scenes)?;
    let test = generate_scenes(&cfg.synth, a.test_offset, a.test_scenes)?;
    let mut rows = Vec::with_capacity(values.len());
    for (value, c) in values.iter().zip(&configs) {
        let model = train_model(c, &train)?;
        rows.push(AblationRow {
            value: value.clone(),
            final_loss: tail_loss(&model.loss_curve),
            eval: evaluate_model(c, &model, &test)?,
        });
    }
    Ok(AblationTable { axis, rows })
}

/// Writes visualization panels for one dataset scene and returns the paths written.
pub fn cmd_viz(
    cfg: &PipelineConfig,
    data_dir: &Path,
    params_dir: Option<&Path>,
    index: usize,
    out_dir: &Path,
) -> Result<Vec<PathBuf>> {
    const SCALE: usize = 4;
    cfg.validate()?;
    let model = load_model(cfg, params_dir)?;
    let (_, scenes) = read_dataset(data_dir)?;
    let Some(scene) = scenes.iter().find(|s| s.index == index) else {
        return arg_err(format!("scene {} is not in the dataset ({} scenes)", index, scenes.len()));
    };
    let bundle = scene_bundle(cfg, scene, model.backbone.as_ref())?;
    let dets = decode_instances(&bundle, &scene.gt_boxes(), &cfg.direction, &model.heads, &cfg.head)?;
    fs::create_dir_all(out_dir)?;
    let mut written = Vec::new();
    let mut put = |name: String, img: &crate::viz::RgbImage| -> Result<()> {
        let p = out_dir.join(name);
        img.write_ppm(&p)?;
        written.push(p);
        Ok(())
    };
    let input = image_rgb(&scene.image)?;
    put("input.ppm".into(), &input.upscale(SCALE))?;
    put("semantic_argmax.ppm".into(), &semantic_argmax_rgb(&bundle.semantic).upscale(SCALE * bundle.stride))?;
    let predicted = predicted_direction_labels(&bundle.semantic, &bundle.direction);
    put("direction_labels.ppm".into(), &direction_labels_rgb(&predicted, &cfg.direction).upscale(SCALE * bundle.stride))?;
    let gt_labels = encode_direction_labels(scene, &cfg.direction)?;
    put("direction_labels_gt.ppm".into(), &direction_labels_rgb(&gt_labels, &cfg.direction).upscale(SCALE))?;
    for (k, d) in dets.iter().enumerate() {
        let froi = d.roi.to_feature_coords(bundle.stride);
        let pooled = direction_pool(&bundle.direction, &froi, &cfg.direction, cfg.head.out)?;
        put(format!("box{:02}_direction_pool.ppm", k), &pooled_rgb(&pooled, &cfg.direction).upscale(SCALE))?;
        put(format!("box{:02}_coarse_probs.ppm", k), &probability_rgb(&d.coarse_probs).upscale(SCALE))?;
        put(format!("box{:02}_final_probs.ppm", k), &probability_rgb(&d.probs).upscale(SCALE))?;
        put(format!("box{:02}_coarse_mask.ppm", k), &mask_rgb(&d.coarse_mask).upscale(SCALE))?;
        put(format!("box{:02}_final_mask.ppm", k), &mask_rgb(&d.mask).upscale(SCALE))?;
        if cfg.head.deformable {
            let offsets = sub_box_offsets(&bundle, &d.roi, &model.heads, &cfg.head)?;
            put(format!("box{:02}_sub_boxes.ppm", k), &sub_box_overlay(&input, &d.roi, &offsets, SCALE))?;
        }
    }
    Ok(written)
}
