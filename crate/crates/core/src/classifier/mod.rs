//! Backbone registry and the two-way classifier built on it.
//!
//! The backbone runs in `f32`; the replacement head (2 outputs) and its
//! loss run in `f64`.

pub mod arch;
mod checkpoint;

use std::path::{Path, PathBuf};

use rand::Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use solis_nn::{Adam, AdamConfig, Module, Tensor};

use crate::error::{Error, Result};
use crate::metrics::SolubilityLabel;
use crate::preprocess::{Tensor3, IMAGENET_MEAN, IMAGENET_STD};
use crate::rng;

pub use checkpoint::{
    checkpoint_bytes, load_checkpoint, model_from_parts, save_checkpoint, sidecar_for,
    ModelSidecar, ParameterHashes, HEAD_BIAS, HEAD_WEIGHT, SIDECAR_FILE, WEIGHTS_FILE,
};

pub const N_CLASSES: usize = 2;

/// A registered backbone.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BackboneSpec {
    pub name: String,
    /// Architecture variant; also the weights file stem in the cache.
    pub arch: String,
    pub input_size: u32,
    pub feature_dim: usize,
    pub approx_backbone_params: u64,
    pub mean: [f32; 3],
    pub std: [f32; 3],
}

fn spec(name: &str, arch: &str, input_size: u32, feature_dim: usize, params: u64) -> BackboneSpec {
    BackboneSpec {
        name: name.into(),
        arch: arch.into(),
        input_size,
        feature_dim,
        approx_backbone_params: params,
        mean: IMAGENET_MEAN,
        std: IMAGENET_STD,
    }
}

/// Every registered backbone. `inceptionv3` normalizes with mean = std =
/// 0.5, which is what its pretrained weights expect.
pub fn registry() -> Vec<BackboneSpec> {
    vec![
        spec("vgg", "vgg11_bn", 224, 4096, 128_771_840),
        spec("resnet18", "resnet18", 224, 512, 11_176_512),
        BackboneSpec {
            mean: [0.5; 3],
            std: [0.5; 3],
            ..spec("inceptionv3", "inception_v3", 224, 2048, 21_785_568)
        },
        spec("densenet", "densenet121", 299, 1024, 6_953_856),
        spec("tinycnn", "tinycnn", 64, 64, 10_760),
    ]
}

pub fn lookup_backbone(name: &str) -> Result<BackboneSpec> {
    let all = registry();
    all.iter()
        .find(|s| s.name == name)
        .cloned()
        .ok_or_else(|| Error::UnknownBackbone {
            name: name.into(),
            registered: all.into_iter().map(|s| s.name).collect(),
        })
}

fn build_arch(arch: &str) -> Module {
    match arch {
        "vgg11_bn" => arch::vgg11_bn(),
        "resnet18" => arch::resnet18(),
        "inception_v3" => arch::inception_v3(),
        "densenet121" => arch::densenet121(),
        _ => arch::tinycnn(),
    }
}

/// `feature_dim * n_classes + n_classes`.
pub fn head_param_count(feature_dim: usize, n_classes: usize) -> usize {
    feature_dim * n_classes + n_classes
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum TrainStrategy {
    /// Every parameter is trained.
    FineTune,
    /// Only the head is trained; the backbone stays frozen in eval mode.
    FeatureExtract,
}

impl std::str::FromStr for TrainStrategy {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "FineTune" | "finetune" | "ft" | "FT" => Ok(Self::FineTune),
            "FeatureExtract" | "featureextract" | "fe" | "FE" => Ok(Self::FeatureExtract),
            other => Err(format!("unknown strategy `{other}`")),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamInfo {
    pub name: String,
    pub shape: Vec<usize>,
    pub trainable: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ParamSubset {
    Backbone,
    Head,
    All,
}

#[derive(Clone, Debug, Default)]
pub struct BuildOptions {
    pub pretrained: bool,
    pub seed: u64,
    /// Overrides the registry input size.
    pub input_size: Option<u32>,
    /// Directory holding `<arch>.safetensors` exports.
    pub weights_dir: Option<PathBuf>,
}

/// Directory named by `SOLIS_CACHE`, if set.
pub fn cache_dir_from_env() -> Option<PathBuf> {
    std::env::var_os("SOLIS_CACHE").map(PathBuf::from)
}

/// Backbone plus a 2-unit linear head.
#[derive(Clone, Debug)]
pub struct ClassifierModel {
    spec: BackboneSpec,
    strategy: TrainStrategy,
    input_size: u32,
    seed: u64,
    backbone: Module,
    /// Row-major `[2, feature_dim]`.
    head_weight: Vec<f64>,
    head_bias: [f64; 2],
}

/// A copy of every parameter and buffer value.
#[derive(Clone, Debug, PartialEq)]
pub struct Snapshot {
    backbone: Vec<Vec<f32>>,
    head_weight: Vec<f64>,
    head_bias: [f64; 2],
}

/// Adam states for one training run; the backbone optimizer exists only
/// under fine-tuning.
#[derive(Clone, Debug)]
pub struct Optimizers {
    backbone: Option<Adam<f32>>,
    head: Adam<f64>,
}

/// Head-side result of one loss evaluation.
#[derive(Clone, Debug, PartialEq)]
pub struct HeadGradients {
    pub loss: f64,
    pub weight: Vec<f64>,
    pub bias: [f64; 2],
    /// d loss / d features, row-major `[n, feature_dim]`.
    pub features: Vec<f64>,
}

fn log_softmax(l: [f64; 2]) -> [f64; 2] {
    let m = l[0].max(l[1]);
    let lse = m + ((l[0] - m).exp() + (l[1] - m).exp()).ln();
    [l[0] - lse, l[1] - lse]
}

/// Builds a classifier. The head is drawn from `U(-1/sqrt(F), 1/sqrt(F))`
/// with a seed derived from `options.seed`; the backbone is either loaded
/// from `<weights_dir>/<arch>.safetensors` or initialized from the seed.
pub fn build_classifier(
    spec: &BackboneSpec,
    strategy: TrainStrategy,
    options: &BuildOptions,
) -> Result<ClassifierModel> {
    let mut model =
        ClassifierModel::uninitialized(spec, strategy, options.input_size, options.seed)?;
    if options.pretrained {
        if spec.name == "tinycnn" {
            return Err(Error::PretrainedUnavailable(
                "tinycnn is a scratch backbone and has no pretrained weights".into(),
            ));
        }
        let dir = options.weights_dir.as_deref().ok_or_else(|| {
            Error::PretrainedUnavailable(format!(
                "no weights cache configured for {} (set SOLIS_CACHE)",
                spec.arch
            ))
        })?;
        model.load_backbone_weights(&dir.join(format!("{}.safetensors", spec.arch)))?;
    } else {
        model
            .backbone
            .init(&mut rng::stream(options.seed, "backbone_init", 0));
    }
    model.init_head(&mut rng::stream(options.seed, "head_init", 0));
    Ok(model)
}

impl ClassifierModel {
    /// All-zero model of the given layout.
    pub fn uninitialized(
        spec: &BackboneSpec,
        strategy: TrainStrategy,
        input_size: Option<u32>,
        seed: u64,
    ) -> Result<Self> {
        let input_size = input_size.unwrap_or(spec.input_size);
        let backbone = build_arch(&spec.arch);
        let dims = backbone.out_dims([3, input_size as usize, input_size as usize])?;
        if dims != [spec.feature_dim, 1, 1] {
            return Err(Error::Config(format!(
                "{} yields features {dims:?} at input {input_size}",
                spec.name
            )));
        }
        Ok(Self {
            spec: spec.clone(),
            strategy,
            input_size,
            seed,
            backbone,
            head_weight: vec![0.0; N_CLASSES * spec.feature_dim],
            head_bias: [0.0; 2],
        })
    }

    fn init_head<R: Rng>(&mut self, rng: &mut R) {
        let bound = 1.0 / (self.spec.feature_dim as f64).sqrt();
        for w in &mut self.head_weight {
            *w = rng.gen_range(-bound..bound);
        }
        for b in &mut self.head_bias {
            *b = rng.gen_range(-bound..bound);
        }
    }

    fn load_backbone_weights(&mut self, path: &Path) -> Result<()> {
        if !path.is_file() {
            return Err(Error::PretrainedUnavailable(format!(
                "{} not found; export it with scripts/export_torchvision_weights.py",
                path.display()
            )));
        }
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        let tensors = checkpoint::read_f32_tensors(&bytes)?;
        self.backbone
            .load_state(|name| tensors.get(name).map(Vec::as_slice))?;
        Ok(())
    }

    pub fn spec(&self) -> &BackboneSpec {
        &self.spec
    }

    pub fn strategy(&self) -> TrainStrategy {
        self.strategy
    }

    pub fn input_size(&self) -> u32 {
        self.input_size
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn feature_dim(&self) -> usize {
        self.spec.feature_dim
    }

    pub fn backbone(&self) -> &Module {
        &self.backbone
    }

    pub fn backbone_mut(&mut self) -> &mut Module {
        &mut self.backbone
    }

    pub fn head(&self) -> (&[f64], [f64; 2]) {
        (&self.head_weight, self.head_bias)
    }

    pub fn set_head(&mut self, weight: &[f64], bias: [f64; 2]) -> Result<()> {
        if weight.len() != self.head_weight.len() {
            return Err(Error::Checkpoint(format!(
                "head weight has {} values, expected {}",
                weight.len(),
                self.head_weight.len()
            )));
        }
        self.head_weight.copy_from_slice(weight);
        self.head_bias = bias;
        Ok(())
    }

    pub fn param_manifest(&self) -> Vec<ParamInfo> {
        let backbone_trainable = self.strategy == TrainStrategy::FineTune;
        let mut out: Vec<_> = self
            .backbone
            .named_params()
            .into_iter()
            .map(|(name, p)| ParamInfo {
                name,
                shape: p.shape.clone(),
                trainable: backbone_trainable,
            })
            .collect();
        out.push(ParamInfo {
            name: HEAD_WEIGHT.into(),
            shape: vec![N_CLASSES, self.spec.feature_dim],
            trainable: true,
        });
        out.push(ParamInfo {
            name: HEAD_BIAS.into(),
            shape: vec![N_CLASSES],
            trainable: true,
        });
        out
    }

    pub fn trainable_scalars(&self) -> usize {
        self.param_manifest()
            .iter()
            .filter(|p| p.trainable)
            .map(|p| p.shape.iter().product::<usize>())
            .sum()
    }

    /// SHA-256 over `(name, shape, little-endian values)` of the subset in
    /// a fixed order. The backbone part covers parameters and batch-norm
    /// running statistics.
    pub fn parameter_hash(&self, subset: ParamSubset) -> String {
        let mut h = Sha256::new();
        let mut entry = |name: &str, shape: &[usize], bytes: &mut dyn Iterator<Item = [u8; 8]>| {
            h.update(name.as_bytes());
            h.update([0u8]);
            for &d in shape {
                h.update((d as u64).to_le_bytes());
            }
            for b in bytes {
                h.update(b);
            }
        };
        if subset != ParamSubset::Head {
            for (name, p) in self.backbone.named_params() {
                entry(&name, &p.shape, &mut p.value.chunks(2).map(pack_f32));
            }
            for (name, b) in self.backbone.named_buffers() {
                entry(&name, &b.shape, &mut b.value.chunks(2).map(pack_f32));
            }
        }
        if subset != ParamSubset::Backbone {
            entry(
                HEAD_WEIGHT,
                &[N_CLASSES, self.spec.feature_dim],
                &mut self.head_weight.iter().map(|v| v.to_le_bytes()),
            );
            entry(
                HEAD_BIAS,
                &[N_CLASSES],
                &mut self.head_bias.iter().map(|v| v.to_le_bytes()),
            );
        }
        hex::encode(h.finalize())
    }

    fn check_inputs(&self, batch: &[Tensor3]) -> Result<()> {
        let s = self.input_size as usize;
        for t in batch {
            if t.dims() != [3, s, s] {
                return Err(Error::InputSize {
                    expected: self.input_size,
                    got: format!("{:?}", t.dims()),
                });
            }
        }
        Ok(())
    }

    fn stack(&self, batch: &[Tensor3]) -> Result<Tensor> {
        self.check_inputs(batch)?;
        let s = self.input_size as usize;
        let data: Vec<&[f32]> = batch.iter().map(Tensor3::data).collect();
        Ok(Tensor::stack([3, s, s], &data)?)
    }

    /// Backbone features in evaluation mode, widened to `f64`.
    pub fn features(&self, batch: &[Tensor3]) -> Result<Vec<Vec<f64>>> {
        if batch.is_empty() {
            return Ok(Vec::new());
        }
        let out = self.backbone.eval(&self.stack(batch)?)?;
        Ok((0..out.batch())
            .map(|i| out.sample(i).iter().map(|&v| v as f64).collect())
            .collect())
    }

    pub fn head_logits(&self, features: &[f64]) -> [f64; 2] {
        let f = self.spec.feature_dim;
        [0, 1].map(|k| {
            let row = &self.head_weight[k * f..(k + 1) * f];
            row.iter().zip(features).map(|(w, x)| w * x).sum::<f64>() + self.head_bias[k]
        })
    }

    /// Evaluation-mode logits, one row per input.
    pub fn forward(&self, batch: &[Tensor3]) -> Result<Vec<[f64; 2]>> {
        Ok(self
            .features(batch)?
            .iter()
            .map(|f| self.head_logits(f))
            .collect())
    }

    /// Mean cross-entropy of the head over precomputed features.
    pub fn head_loss(&self, features: &[Vec<f64>], targets: &[SolubilityLabel]) -> f64 {
        let n = features.len() as f64;
        features
            .iter()
            .zip(targets)
            .map(|(f, t)| -log_softmax(self.head_logits(f))[t.index()])
            .sum::<f64>()
            / n
    }

    /// Analytic gradients of [`ClassifierModel::head_loss`].
    pub fn head_gradients(
        &self,
        features: &[Vec<f64>],
        targets: &[SolubilityLabel],
    ) -> HeadGradients {
        let f = self.spec.feature_dim;
        let n = features.len() as f64;
        let mut g = HeadGradients {
            loss: 0.0,
            weight: vec![0.0; N_CLASSES * f],
            bias: [0.0; 2],
            features: Vec::with_capacity(features.len() * f),
        };
        for (x, t) in features.iter().zip(targets) {
            let lp = log_softmax(self.head_logits(x));
            g.loss -= lp[t.index()] / n;
            let d = [0, 1].map(|k| (lp[k].exp() - (k == t.index()) as u8 as f64) / n);
            for (k, &dk) in d.iter().enumerate() {
                g.bias[k] += dk;
                for (w, xi) in g.weight[k * f..(k + 1) * f].iter_mut().zip(x) {
                    *w += dk * xi;
                }
            }
            for j in 0..f {
                g.features
                    .push(d[0] * self.head_weight[j] + d[1] * self.head_weight[f + j]);
            }
        }
        g
    }

    pub fn optimizers(&self, config: AdamConfig) -> Optimizers {
        let backbone = (self.strategy == TrainStrategy::FineTune).then(|| {
            let sizes: Vec<usize> = self
                .backbone
                .named_params()
                .iter()
                .map(|(_, p)| p.len())
                .collect();
            Adam::new(config, &sizes)
        });
        Optimizers {
            backbone,
            head: Adam::new(config, &[self.head_weight.len(), N_CLASSES]),
        }
    }

    /// One optimization step on a batch; returns the mean training loss.
    ///
    /// Fine-tuning runs the backbone in training mode (batch statistics,
    /// dropout) and back-propagates into it. Feature extraction keeps the
    /// backbone in evaluation mode and leaves it untouched.
    pub fn train_step<R: Rng + ?Sized>(
        &mut self,
        batch: &[Tensor3],
        targets: &[SolubilityLabel],
        opt: &mut Optimizers,
        rng: &mut R,
    ) -> Result<f64> {
        if batch.is_empty() || batch.len() != targets.len() {
            return Err(Error::TooFewSamples(format!(
                "training batch of {} inputs and {} targets",
                batch.len(),
                targets.len()
            )));
        }
        let x = self.stack(batch)?;
        let fine_tune = self.strategy == TrainStrategy::FineTune;
        let out = if fine_tune {
            self.backbone.forward_train(&x, rng)?
        } else {
            self.backbone.eval(&x)?
        };
        let feats: Vec<Vec<f64>> = (0..out.batch())
            .map(|i| out.sample(i).iter().map(|&v| v as f64).collect())
            .collect();
        let g = self.head_gradients(&feats, targets);

        if fine_tune {
            let opt_b = opt
                .backbone
                .as_mut()
                .ok_or_else(|| Error::Config("optimizer built for feature extraction".into()))?;
            self.backbone.zero_grad();
            let dy = Tensor::from_vec(out.dims(), g.features.iter().map(|&v| v as f32).collect())?;
            self.backbone.backward(&dy, false)?;
            self.backbone.clear_cache();
            opt_b.begin_step();
            for (slot, (_, p)) in self.backbone.named_params_mut().into_iter().enumerate() {
                opt_b.update(slot, &mut p.value, &p.grad);
            }
        }
        opt.head.begin_step();
        opt.head.update(0, &mut self.head_weight, &g.weight);
        opt.head.update(1, &mut self.head_bias, &g.bias);
        Ok(g.loss)
    }

    pub fn snapshot(&self) -> Snapshot {
        let mut backbone: Vec<Vec<f32>> = self
            .backbone
            .named_params()
            .iter()
            .map(|(_, p)| p.value.clone())
            .collect();
        backbone.extend(
            self.backbone
                .named_buffers()
                .iter()
                .map(|(_, b)| b.value.clone()),
        );
        Snapshot {
            backbone,
            head_weight: self.head_weight.clone(),
            head_bias: self.head_bias,
        }
    }

    pub fn restore(&mut self, snap: &Snapshot) {
        let mut values = snap.backbone.iter();
        for (_, p) in self.backbone.named_params_mut() {
            p.value
                .copy_from_slice(values.next().expect("snapshot layout"));
        }
        for (_, b) in self.backbone.named_buffers_mut() {
            b.value
                .copy_from_slice(values.next().expect("snapshot layout"));
        }
        self.head_weight.copy_from_slice(&snap.head_weight);
        self.head_bias = snap.head_bias;
    }
}

fn pack_f32(pair: &[f32]) -> [u8; 8] {
    let mut out = [0u8; 8];
    for (i, v) in pair.iter().enumerate() {
        out[4 * i..4 * i + 4].copy_from_slice(&v.to_le_bytes());
    }
    out
}
