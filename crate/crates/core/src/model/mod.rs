//! The network: a 2D UNet over bird's-eye-view slices whose decoder levels
//! are lifted back to 3D and classified by small per-scale heads.
//!
//! The input `[B, nz, nx, ny]` folds height into channels. Decoder level `l`
//! emits exactly `nz / 2^l` channels so its output reshapes to a one-channel
//! volume of the level's resolution; the head turns that volume into
//! `N + 1` logits per voxel, returned as `[B, N + 1, x, y, z]`.

mod checkpoint;
mod layers;

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{keyed, tags};
use crate::tensor::{self, Parameter, Tensor};
use crate::voxel::GridDims;
use crate::Scalar;

pub use checkpoint::{
    load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint, Checkpoint,
};
pub use layers::LayerSpec;

/// Number of UNet levels and output scales.
pub const LEVELS: usize = 4;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DecoderMode {
    /// Every level concatenates upsampled outputs of all coarser levels.
    Multiscale,
    /// Every level sees only the next coarser level.
    Vanilla,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum UpsampleMode {
    Deconv,
    Nearest,
}

macro_rules! str_enum {
    ($t:ty { $($s:literal => $v:expr),+ }) => {
        impl FromStr for $t {
            type Err = Error;
            fn from_str(s: &str) -> Result<Self> {
                match s {
                    $($s => Ok($v),)+
                    _ => Err(Error::Config(format!(concat!("unknown ", stringify!($t), " {:?}"), s))),
                }
            }
        }
    };
}
str_enum!(DecoderMode { "multiscale" => DecoderMode::Multiscale, "vanilla" => DecoderMode::Vanilla });
str_enum!(UpsampleMode { "deconv" => UpsampleMode::Deconv, "nearest" => UpsampleMode::Nearest });

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    /// Semantic classes N; the network predicts N + 1 (free included).
    pub num_classes: usize,
    pub nx: usize,
    pub ny: usize,
    pub nz: usize,
    /// Encoder widths per level; the first equals `nz`.
    pub channels: [usize; LEVELS],
    pub head_width: usize,
    pub aspp_dilations: Vec<usize>,
    pub decoder: DecoderMode,
    pub upsample: UpsampleMode,
    pub aspp: bool,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            num_classes: 19,
            nx: 256,
            ny: 256,
            nz: 32,
            channels: [32, 48, 64, 80],
            head_width: 12,
            aspp_dilations: vec![1, 2, 3],
            decoder: DecoderMode::Multiscale,
            upsample: UpsampleMode::Deconv,
            aspp: true,
            seed: 0,
        }
    }
}

impl ModelConfig {
    /// Default architecture scaled to another grid: widths keep the
    /// 1 : 1.5 : 2 : 2.5 ratio to `nz`.
    pub fn for_grid(nx: usize, ny: usize, nz: usize, num_classes: usize) -> Self {
        ModelConfig {
            num_classes,
            nx,
            ny,
            nz,
            channels: [nz, nz * 3 / 2, nz * 2, nz * 5 / 2],
            ..Default::default()
        }
    }

    pub fn grid(&self, voxel_size: f64) -> GridDims {
        GridDims {
            nx: self.nx,
            ny: self.ny,
            nz: self.nz,
            voxel_size,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.num_classes == 0 || self.num_classes >= u16::MAX as usize {
            return bad(format!(
                "num_classes must be in 1..65535, got {}",
                self.num_classes
            ));
        }
        let scale = 1 << (LEVELS - 1);
        for (axis, n) in [("nx", self.nx), ("ny", self.ny), ("nz", self.nz)] {
            if n == 0 || n % scale != 0 {
                return bad(format!(
                    "{axis} = {n} must be a positive multiple of {scale}"
                ));
            }
        }
        if self.channels[0] != self.nz {
            return bad(format!(
                "channels[0] = {} must equal nz = {}",
                self.channels[0], self.nz
            ));
        }
        if self.channels.windows(2).any(|w| w[1] <= w[0]) {
            return bad(format!(
                "channels {:?} must be strictly increasing",
                self.channels
            ));
        }
        if self.head_width == 0 {
            return bad("head_width must be positive".into());
        }
        if self.aspp && (self.aspp_dilations.is_empty() || self.aspp_dilations.contains(&0)) {
            return bad(format!(
                "aspp_dilations {:?} must be non-empty and positive",
                self.aspp_dilations
            ));
        }
        Ok(())
    }

    /// Width of decoder level `l`: the height of that level's volume.
    pub fn level_depth(&self, l: usize) -> usize {
        self.nz >> l
    }

    /// Coarser decoder levels feeding level `l`.
    pub fn decoder_sources(&self, l: usize) -> Vec<usize> {
        match self.decoder {
            DecoderMode::Multiscale => (l + 1..LEVELS).collect(),
            DecoderMode::Vanilla => (l + 1..LEVELS.min(l + 2)).collect(),
        }
    }
}

/// Output levels to compute; level `l` has resolution `1 / 2^l`.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct ScaleSelection(BTreeSet<usize>);

impl ScaleSelection {
    pub fn new(levels: impl IntoIterator<Item = usize>) -> Result<Self> {
        let set: BTreeSet<usize> = levels.into_iter().collect();
        if set.is_empty() {
            return Err(Error::Config("scale selection must not be empty".into()));
        }
        if let Some(&l) = set.iter().find(|&&l| l >= LEVELS) {
            return Err(Error::Config(format!(
                "scale level {l} outside 0..{LEVELS}"
            )));
        }
        Ok(ScaleSelection(set))
    }

    pub fn all() -> Self {
        ScaleSelection((0..LEVELS).collect())
    }

    pub fn single(level: usize) -> Result<Self> {
        Self::new([level])
    }

    pub fn levels(&self) -> impl Iterator<Item = usize> + '_ {
        self.0.iter().copied()
    }

    pub fn contains(&self, l: usize) -> bool {
        self.0.contains(&l)
    }

    /// Finest requested level.
    pub fn finest(&self) -> usize {
        *self.0.iter().next().expect("non-empty")
    }
}

impl FromStr for ScaleSelection {
    type Err = Error;

    /// Comma-separated levels, e.g. `0,1,2,3`.
    fn from_str(s: &str) -> Result<Self> {
        let levels = s
            .split(',')
            .map(|p| {
                p.trim()
                    .parse::<usize>()
                    .map_err(|_| Error::Config(format!("bad scale level {p:?} in {s:?}")))
            })
            .collect::<Result<Vec<_>>>()?;
        Self::new(levels)
    }
}

impl fmt::Display for ScaleSelection {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let parts: Vec<String> = self.0.iter().map(usize::to_string).collect();
        f.write_str(&parts.join(","))
    }
}

#[derive(Clone, Debug)]
struct HeadPlan {
    dense: [usize; 2],
    /// (layer, dilation)
    aspp: Vec<(usize, usize)>,
    classifier: usize,
}

/// Layer ids for each block; layer `i` owns parameters `2i` (weight) and
/// `2i + 1` (bias).
#[derive(Clone, Debug)]
struct Plan {
    encoder: [[usize; 2]; LEVELS],
    decoder: [usize; LEVELS],
    /// (source level, target level) to deconv layer.
    upsample: BTreeMap<(usize, usize), usize>,
    heads: Vec<HeadPlan>,
}

fn plan(cfg: &ModelConfig) -> (Plan, Vec<(String, LayerSpec)>) {
    let mut layers = Vec::new();
    let mut push = |name: String, spec: LayerSpec| {
        layers.push((name, spec));
        layers.len() - 1
    };
    let c = cfg.channels;
    let mut encoder = [[0; 2]; LEVELS];
    for l in 0..LEVELS {
        let cin = if l == 0 { cfg.nz } else { c[l - 1] };
        encoder[l][0] = push(
            format!("enc.l{l}.conv0"),
            LayerSpec::Conv2d {
                cin,
                cout: c[l],
                k: 3,
            },
        );
        encoder[l][1] = push(
            format!("enc.l{l}.conv1"),
            LayerSpec::Conv2d {
                cin: c[l],
                cout: c[l],
                k: 3,
            },
        );
    }
    let mut decoder = [0; LEVELS];
    let mut upsample = BTreeMap::new();
    for l in (0..LEVELS).rev() {
        let mut cin = c[l];
        for src in cfg.decoder_sources(l) {
            let w = cfg.level_depth(src);
            cin += w;
            if cfg.upsample == UpsampleMode::Deconv {
                let k = 1 << (src - l);
                let id = push(
                    format!("dec.l{l}.up{src}"),
                    LayerSpec::ConvTranspose2d { cin: w, cout: w, k },
                );
                upsample.insert((src, l), id);
            }
        }
        decoder[l] = push(
            format!("dec.l{l}.conv"),
            LayerSpec::Conv2d {
                cin,
                cout: cfg.level_depth(l),
                k: 3,
            },
        );
    }
    let h = cfg.head_width;
    let heads = (0..LEVELS)
        .map(|l| {
            let dense = [
                push(
                    format!("head.l{l}.conv0"),
                    LayerSpec::Conv3d {
                        cin: 1,
                        cout: h,
                        k: 3,
                    },
                ),
                push(
                    format!("head.l{l}.conv1"),
                    LayerSpec::Conv3d {
                        cin: h,
                        cout: h,
                        k: 3,
                    },
                ),
            ];
            let aspp = if cfg.aspp {
                cfg.aspp_dilations
                    .iter()
                    .map(|&d| {
                        (
                            push(
                                format!("head.l{l}.aspp_d{d}"),
                                LayerSpec::Conv3d {
                                    cin: h,
                                    cout: h,
                                    k: 3,
                                },
                            ),
                            d,
                        )
                    })
                    .collect()
            } else {
                Vec::new()
            };
            let classifier = push(
                format!("head.l{l}.classifier"),
                LayerSpec::Conv3d {
                    cin: h,
                    cout: cfg.num_classes + 1,
                    k: 1,
                },
            );
            HeadPlan {
                dense,
                aspp,
                classifier,
            }
        })
        .collect();
    (
        Plan {
            encoder,
            decoder,
            upsample,
            heads,
        },
        layers,
    )
}

/// `[B, C, H, W]` to `[B, 1, C, H, W]`: channels become the depth axis.
pub fn lift_to_volume<T: Scalar>(features: &Tensor<T>, depth: usize) -> Result<Tensor<T>> {
    const OP: &str = "lift_to_volume";
    if features.ndim() != 4 {
        return Err(Error::dim(OP, "rank", 4, features.ndim()));
    }
    let s = features.shape();
    if s[1] != depth {
        return Err(Error::dim(OP, "channels", depth, s[1]));
    }
    tensor::reshape(features, &[s[0], 1, s[1], s[2], s[3]])
}

/// Assembled network with its parameters. Clones own independent
/// parameter leaves.
#[derive(Debug)]
pub struct LmscNet<T> {
    config: ModelConfig,
    plan: Plan,
    layers: Vec<(String, LayerSpec)>,
    params: Vec<Parameter<T>>,
}

impl<T: Scalar> Clone for LmscNet<T> {
    fn clone(&self) -> Self {
        LmscNet {
            config: self.config.clone(),
            plan: self.plan.clone(),
            layers: self.layers.clone(),
            params: self.params.clone(),
        }
    }
}

impl<T: Scalar> LmscNet<T> {
    /// Build with Kaiming-uniform weights (bound `sqrt(6 / fan_in)`) drawn
    /// from a per-layer stream of the config seed; biases start at zero.
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let (plan, layers) = plan(&config);
        let mut params = Vec::with_capacity(2 * layers.len());
        for (i, (name, spec)) in layers.iter().enumerate() {
            let shape = spec.weight_shape();
            let bound = (6.0 / spec.fan_in() as f64).sqrt();
            let mut rng = keyed(tags::INIT, &[config.seed, i as u64]);
            let w = (0..shape.iter().product::<usize>())
                .map(|_| T::from_f64_lossy(rng.gen_range(-bound..bound)))
                .collect();
            params.push(Parameter::new(format!("{name}.weight"), w, &shape)?);
            params.push(Parameter::new(
                format!("{name}.bias"),
                vec![T::zero(); spec.out_channels()],
                &[spec.out_channels()],
            )?);
        }
        Ok(LmscNet {
            config,
            plan,
            layers,
            params,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn parameters(&self) -> &[Parameter<T>] {
        &self.params
    }

    pub fn parameters_mut(&mut self) -> &mut [Parameter<T>] {
        &mut self.params
    }

    /// Layers in parameter order (each owns a weight and a bias).
    pub fn layers(&self) -> &[(String, LayerSpec)] {
        &self.layers
    }

    pub fn count_params(&self) -> usize {
        self.params.iter().map(Parameter::numel).sum()
    }

    /// Parameters belonging to the head of `level`.
    pub fn head_parameter_names(&self, level: usize) -> Vec<&str> {
        let prefix = format!("head.l{level}.");
        self.params
            .iter()
            .map(|p| p.name.as_str())
            .filter(|n| n.starts_with(&prefix))
            .collect()
    }

    /// Analytic FLOPs of one pruned forward pass for a single sample.
    pub fn count_flops(&self, scales: &ScaleSelection) -> u64 {
        let cfg = &self.config;
        let spec = |id: usize| self.layers[id].1;
        let area = |l: usize| ((cfg.nx >> l) * (cfg.ny >> l)) as u64;
        let mut total = 0u64;
        for l in 0..LEVELS {
            if l > 0 {
                total += area(l - 1) * cfg.channels[l - 1] as u64;
            }
            for id in self.plan.encoder[l] {
                total += spec(id).flops(area(l)) + area(l) * cfg.channels[l] as u64;
            }
        }
        for l in (scales.finest()..LEVELS).rev() {
            for src in cfg.decoder_sources(l) {
                if let Some(&id) = self.plan.upsample.get(&(src, l)) {
                    total += spec(id).flops(area(l));
                }
            }
            total +=
                spec(self.plan.decoder[l]).flops(area(l)) + area(l) * cfg.level_depth(l) as u64;
        }
        let h = cfg.head_width as u64;
        for l in scales.levels() {
            let vol = area(l) * cfg.level_depth(l) as u64;
            let head = &self.plan.heads[l];
            for id in head.dense {
                total += spec(id).flops(vol) + vol * h;
            }
            if !head.aspp.is_empty() {
                for &(id, _) in &head.aspp {
                    total += spec(id).flops(vol);
                }
                total += (head.aspp.len() as u64 - 1) * vol * h + vol * h;
            }
            total += spec(head.classifier).flops(vol);
        }
        total
    }

    /// Forward pass that records the graph for training.
    pub fn forward(
        &self,
        input: &Tensor<T>,
        scales: &ScaleSelection,
    ) -> Result<BTreeMap<usize, Tensor<T>>> {
        let p: Vec<Tensor<T>> = self.params.iter().map(|p| p.value.clone()).collect();
        self.run(&p, input, scales)
    }

    /// Forward pass without gradient tracking; intermediates are freed as
    /// soon as they are consumed.
    pub fn predict(
        &self,
        input: &Tensor<T>,
        scales: &ScaleSelection,
    ) -> Result<BTreeMap<usize, Tensor<T>>> {
        let p: Vec<Tensor<T>> = self.params.iter().map(|p| p.value.detach()).collect();
        self.run(&p, &input.detach(), scales)
    }

    fn run(
        &self,
        p: &[Tensor<T>],
        input: &Tensor<T>,
        scales: &ScaleSelection,
    ) -> Result<BTreeMap<usize, Tensor<T>>> {
        const OP: &str = "forward";
        let cfg = &self.config;
        if input.ndim() != 4 {
            return Err(Error::dim(OP, "input rank", 4, input.ndim()));
        }
        for (axis, (&got, want)) in ["height slices (nz)", "x", "y"]
            .iter()
            .zip(input.shape()[1..].iter().zip([cfg.nz, cfg.nx, cfg.ny]))
        {
            if got != want {
                return Err(Error::dim(OP, *axis, want, got));
            }
        }
        let conv2 = |id: usize, x: &Tensor<T>| -> Result<Tensor<T>> {
            Ok(tensor::relu(&tensor::conv2d(
                x,
                &p[2 * id],
                &p[2 * id + 1],
                1,
                1,
                1,
            )?))
        };

        let mut skips = Vec::with_capacity(LEVELS);
        let mut x = input.clone();
        for l in 0..LEVELS {
            if l > 0 {
                x = tensor::maxpool2d(&x, 2, 2)?;
            }
            x = conv2(self.plan.encoder[l][0], &x)?;
            x = conv2(self.plan.encoder[l][1], &x)?;
            skips.push(x.clone());
        }
        drop(x);

        let finest = scales.finest();
        let mut dec: Vec<Option<Tensor<T>>> = vec![None; LEVELS];
        for l in (finest..LEVELS).rev() {
            let mut parts = vec![skips[l].clone()];
            for src in cfg.decoder_sources(l) {
                let coarse = dec[src].as_ref().expect("coarser level computed first");
                let up = match self.plan.upsample.get(&(src, l)) {
                    Some(&id) => tensor::conv_transpose2d(
                        coarse,
                        &p[2 * id],
                        &p[2 * id + 1],
                        1 << (src - l),
                    )?,
                    None => tensor::nearest_upsample2d(coarse, 1 << (src - l))?,
                };
                parts.push(up);
            }
            let cat = if parts.len() == 1 {
                parts.pop().unwrap()
            } else {
                tensor::concat(&parts, 1)?
            };
            dec[l] = Some(conv2(self.plan.decoder[l], &cat)?);
        }
        drop(skips);

        let mut out = BTreeMap::new();
        for l in scales.levels() {
            let feat = dec[l].as_ref().expect("decoder level computed");
            out.insert(l, self.head(p, l, feat)?);
        }
        Ok(out)
    }

    fn head(&self, p: &[Tensor<T>], l: usize, features: &Tensor<T>) -> Result<Tensor<T>> {
        let plan = &self.plan.heads[l];
        let conv3 = |id: usize, x: &Tensor<T>, pad: usize, dil: usize| {
            tensor::conv3d(x, &p[2 * id], &p[2 * id + 1], 1, pad, dil)
        };
        let v = lift_to_volume(features, self.config.level_depth(l))?;
        let mut h = tensor::relu(&conv3(plan.dense[0], &v, 1, 1)?);
        h = tensor::relu(&conv3(plan.dense[1], &h, 1, 1)?);
        if !plan.aspp.is_empty() {
            let mut acc: Option<Tensor<T>> = None;
            for &(id, d) in &plan.aspp {
                let b = conv3(id, &h, d, d)?;
                acc = Some(match acc {
                    Some(a) => tensor::add(&a, &b)?,
                    None => b,
                });
            }
            h = tensor::relu(&acc.expect("at least one branch"));
        }
        let logits = conv3(plan.classifier, &h, 0, 1)?;
        // [B, C, z, x, y] -> [B, C, x, y, z] to match the voxel order.
        tensor::permute(&logits, &[0, 1, 3, 4, 2])
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny(decoder: DecoderMode, upsample: UpsampleMode, aspp: bool) -> ModelConfig {
        ModelConfig {
            decoder,
            upsample,
            aspp,
            ..ModelConfig::for_grid(16, 16, 8, 3)
        }
    }

    #[test]
    fn config_validation() {
        assert!(ModelConfig::default().validate().is_ok());
        let mut c = ModelConfig::default();
        c.channels[0] = 16;
        assert!(c.validate().is_err());
        let mut c = ModelConfig::default();
        c.channels = [32, 48, 48, 80];
        assert!(c.validate().is_err());
        assert!(ModelConfig::for_grid(20, 16, 8, 3).validate().is_err());
    }

    #[test]
    fn parameter_names_unique_and_counted() {
        let m = LmscNet::<f32>::new(ModelConfig::default()).unwrap();
        let names: BTreeSet<&str> = m.parameters().iter().map(|p| p.name.as_str()).collect();
        assert_eq!(names.len(), m.parameters().len());
        let from_specs: usize = m.layers().iter().map(|(_, s)| s.params()).sum();
        assert_eq!(m.count_params(), from_specs);
    }

    #[test]
    fn ablations_keep_shapes() {
        let x = Tensor::<f64>::zeros(&[1, 8, 16, 16]);
        for (d, u, a) in [
            (DecoderMode::Multiscale, UpsampleMode::Deconv, true),
            (DecoderMode::Vanilla, UpsampleMode::Deconv, true),
            (DecoderMode::Multiscale, UpsampleMode::Nearest, true),
            (DecoderMode::Multiscale, UpsampleMode::Deconv, false),
        ] {
            let m = LmscNet::<f64>::new(tiny(d, u, a)).unwrap();
            let out = m.predict(&x, &ScaleSelection::all()).unwrap();
            for (l, t) in &out {
                assert_eq!(t.shape(), &[1, 4, 16 >> l, 16 >> l, 8 >> l]);
                assert!(t.data().iter().all(|v| v.is_finite()));
            }
        }
    }

    #[test]
    fn wrong_input_names_axis() {
        let m =
            LmscNet::<f32>::new(tiny(DecoderMode::Multiscale, UpsampleMode::Deconv, true)).unwrap();
        let err = m
            .predict(&Tensor::zeros(&[1, 8, 16, 24]), &ScaleSelection::all())
            .unwrap_err();
        assert!(err.to_string().contains("on y"), "{err}");
    }

    #[test]
    fn scale_selection_parsing() {
        let s: ScaleSelection = "3, 0".parse().unwrap();
        assert_eq!(s.levels().collect::<Vec<_>>(), vec![0, 3]);
        assert_eq!(s.to_string(), "0,3");
        assert!("4".parse::<ScaleSelection>().is_err());
        assert!("".parse::<ScaleSelection>().is_err());
    }

    #[test]
    fn flops_shrink_with_pruning() {
        let m = LmscNet::<f32>::new(ModelConfig::default()).unwrap();
        let f: Vec<u64> = (0..4)
            .map(|l| m.count_flops(&ScaleSelection::single(l).unwrap()))
            .collect();
        let full = m.count_flops(&ScaleSelection::all());
        assert!(full > f[0] && f[0] > f[1] && f[1] > f[2] && f[2] > f[3]);
    }
}
