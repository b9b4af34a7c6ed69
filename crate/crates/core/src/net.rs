//! Builders and forward graphs for the two segmentation networks.
//!
//! Both share a 4-level encoder/decoder skeleton: two ReLU'd 3x3
//! convolutions per level, 2x2 max-pool between encoder levels, 2x2
//! transposed-convolution upsampling with skip concatenation on the way
//! up, and a final 1x1 convolution into a 2-channel softmax.
//!
//! The multi-resolution variant additionally average-pools the raw input
//! down to each encoder scale, runs the result through its own pair of
//! convolutions, and concatenates those features onto the pooled main
//! stream *before* the level's convolution pair — so the first convolution
//! of encoder levels 2..4 sees wider input there.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tape::{Tape, Var};
use crate::tensor::{Scalar, Tensor};

/// Which of the two architectures to build.
#[derive(Copy, Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Variant {
    Unet,
    Mrunet,
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Variant::Unet => write!(f, "unet"),
            Variant::Mrunet => write!(f, "mrunet"),
        }
    }
}

impl FromStr for Variant {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "unet" => Ok(Variant::Unet),
            "mrunet" => Ok(Variant::Mrunet),
            other => Err(Error::Validation(format!(
                "unknown architecture {other:?}, expected \"unet\" or \"mrunet\""
            ))),
        }
    }
}

/// Hyper-parameters that fix a concrete network. Depth (4 levels) and the
/// 2-channel softmax head are part of the family definition, not knobs.
#[derive(Copy, Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ArchitectureSpec {
    pub variant: Variant,
    pub base_channels: usize,
    pub in_channels: usize,
}

pub const LEVELS: usize = 4;
pub const OUT_CHANNELS: usize = 2;

impl ArchitectureSpec {
    pub fn new(variant: Variant, base_channels: usize, in_channels: usize) -> Result<Self> {
        let spec = ArchitectureSpec {
            variant,
            base_channels,
            in_channels,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if self.base_channels == 0 || self.base_channels > 1024 {
            return Err(Error::Validation(format!(
                "base_channels must be in 1..=1024, got {}",
                self.base_channels
            )));
        }
        if self.in_channels != 1 && self.in_channels != 3 {
            return Err(Error::Validation(format!(
                "in_channels must be 1 (grayscale) or 3 (rgb), got {}",
                self.in_channels
            )));
        }
        Ok(())
    }

    /// Channel width at encoder level `lvl` (1-based): doubles per level.
    fn width(&self, lvl: usize) -> usize {
        self.base_channels << (lvl - 1)
    }
}

/// What kind of parameterized layer a [`LayerDef`] describes.
#[derive(Copy, Clone, Debug, PartialEq, Eq)]
pub enum LayerKind {
    /// 3x3 zero-padded convolution.
    Conv3,
    /// 1x1 convolution (the classifier head).
    Conv1,
    /// 2x2 stride-2 transposed convolution.
    Tconv,
}

/// One parameterized layer: its name and channel arithmetic.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LayerDef {
    pub name: String,
    pub kind: LayerKind,
    pub in_ch: usize,
    pub out_ch: usize,
}

impl LayerDef {
    /// Shape of this layer's weight tensor.
    pub fn weight_shape(&self) -> Vec<usize> {
        match self.kind {
            LayerKind::Conv3 => vec![self.out_ch, self.in_ch, 3, 3],
            LayerKind::Conv1 => vec![self.out_ch, self.in_ch, 1, 1],
            LayerKind::Tconv => vec![self.in_ch, self.out_ch, 2, 2],
        }
    }

    /// Incoming connections per output element, used for He init.
    fn fan_in(&self) -> usize {
        match self.kind {
            LayerKind::Conv3 => self.in_ch * 9,
            LayerKind::Conv1 => self.in_ch,
            LayerKind::Tconv => self.in_ch * 4,
        }
    }
}

/// Every parameterized layer of `spec`, in graph order.
pub fn layer_defs(spec: &ArchitectureSpec) -> Vec<LayerDef> {
    let mr = spec.variant == Variant::Mrunet;
    let b = |lvl: usize| spec.width(lvl);
    let mut defs = Vec::new();
    let conv = |name: &str, i: usize, o: usize| LayerDef {
        name: name.to_string(),
        kind: LayerKind::Conv3,
        in_ch: i,
        out_ch: o,
    };

    // Encoder. The first convolution of levels 2..4 sees the pooled main
    // stream plus, in the multi-resolution variant, that level's auxiliary
    // features (same width as the level itself).
    defs.push(conv("enc1.conv1", spec.in_channels, b(1)));
    defs.push(conv("enc1.conv2", b(1), b(1)));
    for lvl in 2..=LEVELS {
        if mr {
            defs.push(conv(&format!("aux{lvl}.conv1"), spec.in_channels, b(lvl)));
            defs.push(conv(&format!("aux{lvl}.conv2"), b(lvl), b(lvl)));
        }
        let fused = if mr { b(lvl - 1) + b(lvl) } else { b(lvl - 1) };
        defs.push(conv(&format!("enc{lvl}.conv1"), fused, b(lvl)));
        defs.push(conv(&format!("enc{lvl}.conv2"), b(lvl), b(lvl)));
    }

    // Decoder: upsample, concatenate the skip, convolve twice.
    for lvl in (1..LEVELS).rev() {
        defs.push(LayerDef {
            name: format!("up{lvl}"),
            kind: LayerKind::Tconv,
            in_ch: b(lvl + 1),
            out_ch: b(lvl),
        });
        defs.push(conv(&format!("dec{lvl}.conv1"), 2 * b(lvl), b(lvl)));
        defs.push(conv(&format!("dec{lvl}.conv2"), b(lvl), b(lvl)));
    }

    defs.push(LayerDef {
        name: "final".to_string(),
        kind: LayerKind::Conv1,
        in_ch: b(1),
        out_ch: OUT_CHANNELS,
    });
    defs
}

/// Expected parameter names and shapes for `spec`, sorted by name.
pub fn expected_parameters(spec: &ArchitectureSpec) -> BTreeMap<String, Vec<usize>> {
    let mut map = BTreeMap::new();
    for def in layer_defs(spec) {
        map.insert(format!("{}.weight", def.name), def.weight_shape());
        map.insert(format!("{}.bias", def.name), vec![def.out_ch]);
    }
    map
}

/// A network: its spec plus named parameter tensors.
#[derive(Clone, Debug)]
pub struct Model<T> {
    spec: ArchitectureSpec,
    params: BTreeMap<String, Tensor<T>>,
}

/// Build a model with He-normal weights (std `sqrt(2 / fan_in)`) and zero
/// biases, drawn from a ChaCha stream keyed by `seed` — the same
/// `(spec, seed)` always yields bit-identical parameters.
pub fn build_model<T: Scalar>(spec: ArchitectureSpec, seed: u64) -> Result<Model<T>> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut params = BTreeMap::new();
    for def in layer_defs(&spec) {
        let shape = def.weight_shape();
        let n: usize = shape.iter().product();
        let sd = (2.0 / def.fan_in() as f64).sqrt();
        let normal = Normal::new(0.0, sd)
            .map_err(|e| Error::Validation(format!("bad init distribution: {e}")))?;
        let data: Vec<T> = (0..n)
            .map(|_| T::from_f64(normal.sample(&mut rng)))
            .collect();
        params.insert(format!("{}.weight", def.name), Tensor::new(shape, data)?);
        params.insert(
            format!("{}.bias", def.name),
            Tensor::zeros(vec![def.out_ch]),
        );
    }
    Ok(Model { spec, params })
}

impl<T: Scalar> Model<T> {
    /// Wrap existing parameters, validating names and shapes against the
    /// spec's layout.
    pub fn from_params(spec: ArchitectureSpec, params: BTreeMap<String, Tensor<T>>) -> Result<Self> {
        spec.validate()?;
        let expected = expected_parameters(&spec);
        for (name, shape) in &expected {
            match params.get(name) {
                None => {
                    return Err(Error::Incompatible(format!("missing parameter {name:?}")));
                }
                Some(t) if t.shape() != shape.as_slice() => {
                    return Err(Error::Incompatible(format!(
                        "parameter {name:?} has shape {:?}, expected {shape:?}",
                        t.shape()
                    )));
                }
                Some(_) => {}
            }
        }
        if let Some(extra) = params.keys().find(|k| !expected.contains_key(*k)) {
            return Err(Error::Incompatible(format!("unexpected parameter {extra:?}")));
        }
        Ok(Model { spec, params })
    }

    pub fn spec(&self) -> &ArchitectureSpec {
        &self.spec
    }

    pub fn params(&self) -> &BTreeMap<String, Tensor<T>> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut BTreeMap<String, Tensor<T>> {
        &mut self.params
    }

    /// Total number of scalar parameters.
    pub fn param_count(&self) -> usize {
        self.params.values().map(|t| t.len()).sum()
    }

    /// Run the network on `batch` `[N, Cin, H, W]` and return per-pixel
    /// class probabilities `[N, 2, H, W]`.
    pub fn forward(&self, batch: &Tensor<T>) -> Result<Tensor<T>> {
        let mut tape = Tape::new();
        let (probs, _) = self.forward_taped(&mut tape, batch)?;
        Ok(tape.value(probs)?.clone())
    }

    /// Run the network on a caller-supplied tape, returning the output
    /// probabilities and one `Var` per parameter so gradients can be read
    /// back after `backward`.
    pub fn forward_taped(
        &self,
        tape: &mut Tape<T>,
        batch: &Tensor<T>,
    ) -> Result<(Var, BTreeMap<String, Var>)> {
        let mut vars = BTreeMap::new();
        for (name, tensor) in &self.params {
            vars.insert(name.clone(), tape.leaf(tensor.clone()));
        }
        let input = tape.leaf(batch.clone());
        let probs = forward_graph(tape, &self.spec, &vars, input)?;
        Ok((probs, vars))
    }
}

/// Build the forward graph on `tape` from already-leafed parameters.
/// This is the single source of truth for the wiring of both variants.
pub fn forward_graph<T: Scalar>(
    tape: &mut Tape<T>,
    spec: &ArchitectureSpec,
    params: &BTreeMap<String, Var>,
    input: Var,
) -> Result<Var> {
    spec.validate()?;
    let (n, c, h, w) = tape.value(input)?.dims4()?;
    if n == 0 {
        return Err(Error::Shape("batch must not be empty".into()));
    }
    if c != spec.in_channels {
        return Err(Error::Shape(format!(
            "input has {c} channels, architecture expects {}",
            spec.in_channels
        )));
    }
    if h % 8 != 0 || w % 8 != 0 || h == 0 || w == 0 {
        return Err(Error::Shape(format!(
            "spatial dims must be positive multiples of 8 (three pooling stages), got {h}x{w}"
        )));
    }

    let get = |name: &str| -> Result<Var> {
        params
            .get(name)
            .copied()
            .ok_or_else(|| Error::Graph(format!("parameter {name:?} not on tape")))
    };
    // Two ReLU'd convolutions under `prefix`.
    let block = |tape: &mut Tape<T>, x: Var, prefix: &str| -> Result<Var> {
        let mut y = x;
        for conv in ["conv1", "conv2"] {
            let wt = get(&format!("{prefix}.{conv}.weight"))?;
            let bs = get(&format!("{prefix}.{conv}.bias"))?;
            y = tape.conv2d(y, wt, bs, 1)?;
            y = tape.relu(y)?;
        }
        Ok(y)
    };

    let mr = spec.variant == Variant::Mrunet;

    // Encoder, keeping each level's output for the skip connections.
    let mut skips = Vec::with_capacity(LEVELS);
    let e1 = block(tape, input, "enc1")?;
    skips.push(e1);
    let mut stream = e1;
    let mut shrunk_input = input;
    for lvl in 2..=LEVELS {
        let pooled = tape.max_pool2x2(stream)?;
        let fused = if mr {
            shrunk_input = tape.avg_pool2x2(shrunk_input)?;
            let aux = block(tape, shrunk_input, &format!("aux{lvl}"))?;
            tape.concat_channels(pooled, aux)?
        } else {
            pooled
        };
        let e = block(tape, fused, &format!("enc{lvl}"))?;
        skips.push(e);
        stream = e;
    }

    // Decoder: upsample, concatenate the skip, convolve.
    for lvl in (1..LEVELS).rev() {
        let wt = get(&format!("up{lvl}.weight"))?;
        let bs = get(&format!("up{lvl}.bias"))?;
        let up = tape.transposed_conv2x2(stream, wt, bs)?;
        let cat = tape.concat_channels(up, skips[lvl - 1])?;
        stream = block(tape, cat, &format!("dec{lvl}"))?;
    }

    let wt = get("final.weight")?;
    let bs = get("final.bias")?;
    let logits = tape.conv2d(stream, wt, bs, 0)?;
    tape.softmax_channels(logits)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn spec(variant: Variant, base: usize, inc: usize) -> ArchitectureSpec {
        ArchitectureSpec::new(variant, base, inc).unwrap()
    }

    /// Hand-written name list for the plain variant — the oracle the
    /// enumeration is checked against.
    fn unet_names() -> Vec<String> {
        let mut names = Vec::new();
        for layer in [
            "enc1.conv1",
            "enc1.conv2",
            "enc2.conv1",
            "enc2.conv2",
            "enc3.conv1",
            "enc3.conv2",
            "enc4.conv1",
            "enc4.conv2",
            "up3",
            "dec3.conv1",
            "dec3.conv2",
            "up2",
            "dec2.conv1",
            "dec2.conv2",
            "up1",
            "dec1.conv1",
            "dec1.conv2",
            "final",
        ] {
            names.push(format!("{layer}.weight"));
            names.push(format!("{layer}.bias"));
        }
        names.sort();
        names
    }

    #[test]
    fn unet_has_18_layers_36_params() {
        let defs = layer_defs(&spec(Variant::Unet, 4, 1));
        assert_eq!(defs.len(), 18);
        let expected = expected_parameters(&spec(Variant::Unet, 4, 1));
        assert_eq!(expected.len(), 36);
        let got: Vec<String> = expected.keys().cloned().collect();
        assert_eq!(got, unet_names());
    }

    #[test]
    fn mrunet_adds_exactly_the_aux_layers() {
        let u = expected_parameters(&spec(Variant::Unet, 4, 1));
        let m = expected_parameters(&spec(Variant::Mrunet, 4, 1));
        assert_eq!(m.len(), 48);
        let extra: Vec<&String> = m.keys().filter(|k| !u.contains_key(*k)).collect();
        assert_eq!(extra.len(), 12);
        assert!(extra.iter().all(|k| k.starts_with("aux")));
        // Every plain-variant name also exists in the multi-res variant.
        assert!(u.keys().all(|k| m.contains_key(k)));
        // Shapes agree except where the fused encoder input widens.
        for (k, shape) in &u {
            let ms = &m[k];
            if k == "enc2.conv1.weight" || k == "enc3.conv1.weight" || k == "enc4.conv1.weight" {
                assert_ne!(shape, ms, "{k} should widen");
                assert_eq!(shape[0], ms[0]);
                assert!(ms[1] > shape[1]);
            } else {
                assert_eq!(shape, ms, "{k} should be unchanged");
            }
        }
    }

    #[test]
    fn param_counts_for_unit_base() {
        // Frozen totals for base_channels 1, 1 input channel, computed by
        // summing each layer's weight and bias sizes by hand.
        let u = build_model::<f64>(spec(Variant::Unet, 1, 1), 0).unwrap();
        assert_eq!(u.param_count(), 1942);
        let m = build_model::<f64>(spec(Variant::Mrunet, 1, 1), 0).unwrap();
        assert_eq!(m.param_count(), 3608);
    }

    #[test]
    fn init_is_seed_deterministic() {
        let a = build_model::<f32>(spec(Variant::Mrunet, 2, 1), 42).unwrap();
        let b = build_model::<f32>(spec(Variant::Mrunet, 2, 1), 42).unwrap();
        assert_eq!(a.params(), b.params());
        let c = build_model::<f32>(spec(Variant::Mrunet, 2, 1), 43).unwrap();
        assert_ne!(a.params(), c.params());
    }

    #[test]
    fn init_biases_are_zero_and_weights_scaled() {
        let m = build_model::<f64>(spec(Variant::Unet, 8, 1), 7).unwrap();
        for (name, t) in m.params() {
            if name.ends_with(".bias") {
                assert!(t.data().iter().all(|&v| v == 0.0), "{name} not zero");
            }
        }
        // Sample std of a large weight tensor should sit near sqrt(2/fan_in).
        let w = &m.params()["enc4.conv2.weight"]; // fan_in = 64 * 9 = 576
        let n = w.len() as f64;
        let mean: f64 = w.data().iter().sum::<f64>() / n;
        let var: f64 = w.data().iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        let want = (2.0 / 576.0f64).sqrt();
        let got = var.sqrt();
        assert!(
            (got - want).abs() / want < 0.15,
            "std {got} too far from {want}"
        );
    }

    #[test]
    fn forward_shapes_and_probabilities() {
        for variant in [Variant::Unet, Variant::Mrunet] {
            let m = build_model::<f32>(spec(variant, 2, 1), 5).unwrap();
            let x = Tensor::full(vec![2, 1, 8, 16], 0.3f32);
            let y = m.forward(&x).unwrap();
            assert_eq!(y.shape(), &[2, 2, 8, 16]);
            let plane = 8 * 16;
            for ni in 0..2 {
                for p in 0..plane {
                    let a = y.data()[(ni * 2) * plane + p];
                    let b = y.data()[(ni * 2 + 1) * plane + p];
                    assert!(a >= 0.0 && b >= 0.0);
                    assert!((a + b - 1.0).abs() < 1e-5);
                }
            }
        }
    }

    #[test]
    fn forward_rejects_bad_inputs() {
        let m = build_model::<f32>(spec(Variant::Unet, 1, 1), 0).unwrap();
        // Wrong channel count.
        let x = Tensor::<f32>::zeros(vec![1, 3, 8, 8]);
        assert!(matches!(m.forward(&x), Err(Error::Shape(_))));
        // Not a multiple of 8.
        let x = Tensor::<f32>::zeros(vec![1, 1, 12, 8]);
        assert!(matches!(m.forward(&x), Err(Error::Shape(_))));
        // Empty batch.
        let x = Tensor::<f32>::zeros(vec![0, 1, 8, 8]);
        assert!(matches!(m.forward(&x), Err(Error::Shape(_))));
    }

    #[test]
    fn forward_is_deterministic() {
        let m = build_model::<f32>(spec(Variant::Mrunet, 2, 1), 9).unwrap();
        let x = Tensor::full(vec![1, 1, 16, 8], 0.5f32);
        let a = m.forward(&x).unwrap();
        let b = m.forward(&x).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn from_params_validates_layout() {
        let good = build_model::<f32>(spec(Variant::Unet, 1, 1), 0).unwrap();
        let mut params = good.params().clone();
        // Round trip works.
        Model::from_params(spec(Variant::Unet, 1, 1), params.clone()).unwrap();
        // Wrong shape is incompatible.
        params.insert("final.bias".into(), Tensor::zeros(vec![3]));
        assert!(matches!(
            Model::from_params(spec(Variant::Unet, 1, 1), params.clone()),
            Err(Error::Incompatible(_))
        ));
        // Missing parameter is incompatible.
        let mut missing = good.params().clone();
        missing.remove("enc1.conv1.weight");
        assert!(matches!(
            Model::from_params(spec(Variant::Unet, 1, 1), missing),
            Err(Error::Incompatible(_))
        ));
        // Extra parameter is incompatible.
        let mut extra = good.params().clone();
        extra.insert("bogus.weight".into(), Tensor::zeros(vec![1]));
        assert!(matches!(
            Model::from_params(spec(Variant::Unet, 1, 1), extra),
            Err(Error::Incompatible(_))
        ));
    }

    #[test]
    fn spec_validation() {
        assert!(ArchitectureSpec::new(Variant::Unet, 0, 1).is_err());
        assert!(ArchitectureSpec::new(Variant::Unet, 8, 2).is_err());
        assert!(ArchitectureSpec::new(Variant::Mrunet, 8, 3).is_ok());
        assert_eq!("mrunet".parse::<Variant>().unwrap(), Variant::Mrunet);
        assert!("resnet".parse::<Variant>().is_err());
    }

    /// Every layer is a size-preserving convolution, a pooling step, or an
    /// upsampling step, so the network commutes with translations by
    /// multiples of the total pooling factor (8) wherever the receptive
    /// field avoids the zero-padded borders. The measured border influence
    /// of the 4-level topology reaches between 32 and 48 pixels; at a
    /// 48-pixel margin the shifted and unshifted evaluations agree exactly,
    /// and this asserts the 1e-4 envelope with that margin.
    #[test]
    fn translation_covariance_away_from_borders() {
        let n = 128usize;
        let margin = 48usize;
        for variant in [Variant::Unet, Variant::Mrunet] {
            let model = build_model::<f64>(spec(variant, 2, 1), 11).unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(42);
            let base: Vec<f64> = (0..n * n).map(|_| rng.random::<f64>()).collect();
            let mut shifted = vec![0.0; n * n];
            for y in 0..n {
                for x in 0..n {
                    shifted[((y + 8) % n) * n + (x + 8) % n] = base[y * n + x];
                }
            }
            let run = |data: Vec<f64>| {
                let input = Tensor::new(vec![1, 1, n, n], data).unwrap();
                model.forward(&input).unwrap()
            };
            let out_base = run(base);
            let out_shifted = run(shifted);
            let fg_base = &out_base.data()[n * n..2 * n * n];
            let fg_shifted = &out_shifted.data()[n * n..2 * n * n];
            let mut worst = 0.0f64;
            for y in margin + 8..n - margin {
                for x in margin + 8..n - margin {
                    let d = (fg_shifted[y * n + x] - fg_base[(y - 8) * n + (x - 8)]).abs();
                    worst = worst.max(d);
                }
            }
            assert!(
                worst <= 1e-4,
                "{variant:?}: worst interior deviation {worst}"
            );
        }
    }
}
