//! The U-Net family: plain and residual encoder-decoders with skip
//! concatenation, batch normalization and a sigmoid head.

use serde::{Deserialize, Serialize};

use super::params::{he_normal, BoundParams, ParamStore};
use crate::autograd::{Mode, Tape, Var};
use crate::error::{shape_err, Error, Result};
use crate::kernels::{BatchNormState, ConvGeom, Padding};
use crate::tensor::{Real, Tensor};

/// Model variants. M4 and M5 share the M2 and M3 generators and add an
/// adversarial critic during training.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Variant {
    M1,
    M2,
    M3,
    M4,
    M5,
}

impl Variant {
    pub fn is_adversarial(self) -> bool {
        matches!(self, Variant::M4 | Variant::M5)
    }

    /// Architecture of the segmentation network itself.
    pub fn generator(self) -> Variant {
        match self {
            Variant::M4 => Variant::M2,
            Variant::M5 => Variant::M3,
            v => v,
        }
    }
}

impl std::str::FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_uppercase().as_str() {
            "M1" => Ok(Variant::M1),
            "M2" => Ok(Variant::M2),
            "M3" => Ok(Variant::M3),
            "M4" => Ok(Variant::M4),
            "M5" => Ok(Variant::M5),
            _ => Err(Error::Config(format!("unknown model variant {s:?}"))),
        }
    }
}

/// Declarative architecture description.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    /// Number of resolution levels, including the bottom one.
    pub depth: usize,
    pub base_channels: usize,
    /// Channel multiplier from one level to the next.
    pub channel_growth: usize,
    pub residual_blocks_per_level: usize,
    pub padding: Padding,
    /// Spatial input extents as (W, H, Z).
    pub input_shape: [usize; 3],
    pub variant_tag: Variant,
}

impl ModelConfig {
    /// Replica of the original unpadded 3D U-Net.
    pub fn m1(base_channels: usize) -> Self {
        ModelConfig {
            depth: 4,
            base_channels,
            channel_growth: 2,
            residual_blocks_per_level: 0,
            padding: Padding::Valid,
            input_shape: [132, 132, 116],
            variant_tag: Variant::M1,
        }
    }

    pub fn m2(base_channels: usize) -> Self {
        ModelConfig {
            depth: 3,
            base_channels,
            channel_growth: 2,
            residual_blocks_per_level: 0,
            padding: Padding::Same,
            input_shape: [128, 128, 49],
            variant_tag: Variant::M2,
        }
    }

    pub fn m3(base_channels: usize) -> Self {
        ModelConfig {
            residual_blocks_per_level: 2,
            variant_tag: Variant::M3,
            ..Self::m2(base_channels)
        }
    }

    pub fn for_variant(variant: Variant, base_channels: usize) -> Self {
        let mut cfg = match variant.generator() {
            Variant::M1 => Self::m1(base_channels),
            Variant::M2 => Self::m2(base_channels),
            _ => Self::m3(base_channels),
        };
        cfg.variant_tag = variant;
        cfg
    }

    /// Desk-scale residual model: base 8 channels on 32×32×17 input.
    pub fn desk_m3() -> Self {
        Self::m3(8).with_input([32, 32, 17])
    }

    pub fn with_input(mut self, whz: [usize; 3]) -> Self {
        self.input_shape = whz;
        self
    }

    pub fn channels(&self, level: usize) -> usize {
        self.base_channels * self.channel_growth.pow(level as u32)
    }

    /// Validates the configuration and derives the spatial plan.
    pub fn plan(&self) -> Result<ShapePlan> {
        if self.depth < 2 {
            return Err(Error::Config(format!("depth must be at least 2, got {}", self.depth)));
        }
        if self.base_channels < 1 || self.channel_growth < 1 {
            return Err(Error::Config("channel counts must be positive".into()));
        }
        let [w, h, z] = self.input_shape;
        if w == 0 || h == 0 || z == 0 {
            return Err(Error::Config(format!("input extents must be positive, got {:?}", self.input_shape)));
        }
        let factor = 1usize << (self.depth - 1);
        let (z_before, z_after) = match self.padding {
            Padding::Same => {
                for (axis, ext) in [("x", w), ("y", h)] {
                    if ext % factor != 0 {
                        return Err(Error::Config(format!(
                            "input extent {ext} along axis {axis} is not divisible by {factor}"
                        )));
                    }
                }
                let total = z.div_ceil(factor) * factor - z;
                if total > 0 && total >= z {
                    return Err(Error::Config(format!(
                        "input extent {z} along axis z is too small to reflect-pad to a multiple of {factor}"
                    )));
                }
                (total / 2, total - total / 2)
            }
            Padding::Valid => (0, 0),
        };
        let shrink = match self.padding {
            Padding::Same => 0,
            Padding::Valid => 4,
        };
        let names = ["z", "y", "x"];
        let mut ext = [z + z_before + z_after, h, w];
        let mut skips = Vec::new();
        let check = |ext: [usize; 3], sub: usize| -> Result<[usize; 3]> {
            let mut out = ext;
            for i in 0..3 {
                if ext[i] <= sub {
                    return Err(Error::Config(format!(
                        "input extents {:?} collapse along axis {} inside the network",
                        self.input_shape, names[i]
                    )));
                }
                out[i] = ext[i] - sub;
            }
            Ok(out)
        };
        for level in 0..self.depth {
            ext = check(ext, shrink)?;
            if level + 1 < self.depth {
                for i in 0..3 {
                    if ext[i] % 2 != 0 {
                        return Err(Error::Config(format!(
                            "input extents {:?} give an odd extent {} along axis {} before pooling at level {level}",
                            self.input_shape, ext[i], names[i]
                        )));
                    }
                }
                skips.push(ext);
                ext = ext.map(|e| e / 2);
            }
        }
        for level in (0..self.depth - 1).rev() {
            ext = ext.map(|e| e * 2);
            if (0..3).any(|i| skips[level][i] < ext[i]) {
                return Err(Error::Config(format!(
                    "skip connection at level {level} is smaller than the decoder path"
                )));
            }
            ext = check(ext, shrink)?;
        }
        let out_z = if self.padding == Padding::Same { z } else { ext[0] };
        Ok(ShapePlan {
            z_pad: (z_before, z_after),
            output_shape: [ext[2], ext[1], out_z],
        })
    }
}

/// Spatial bookkeeping derived from a [`ModelConfig`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ShapePlan {
    /// Reflection padding applied to z before the encoder.
    pub z_pad: (usize, usize),
    /// Output extents as (W, H, Z).
    pub output_shape: [usize; 3],
}

#[derive(Clone, Debug)]
struct ConvRef {
    w: usize,
    b: usize,
    geom: ConvGeom,
}

#[derive(Clone, Debug)]
struct BnRef {
    gamma: usize,
    beta: usize,
    state: usize,
}

#[derive(Clone, Debug)]
struct ConvBn {
    conv: ConvRef,
    bn: BnRef,
}

/// Two conv-bn stages with an identity skip added before the last relu.
#[derive(Clone, Debug)]
struct ResidualBlock {
    first: ConvBn,
    second: ConvBn,
}

#[derive(Clone, Debug)]
struct Stage {
    convs: [ConvBn; 2],
    residual: Vec<ResidualBlock>,
}

#[derive(Clone, Debug)]
struct Arch {
    encoder: Vec<Stage>,
    ups: Vec<(usize, usize)>,
    decoder: Vec<Stage>,
    head: ConvRef,
}

/// Instantiated network: parameters, batchnorm statistics and layer graph.
#[derive(Clone, Debug)]
pub struct Model<T: Real = f32> {
    config: ModelConfig,
    plan: ShapePlan,
    params: ParamStore<T>,
    bn: Vec<(String, BatchNormState<T>)>,
    arch: Arch,
}

/// Output of a forward pass and the tape handles of the parameters used.
pub struct Forward {
    pub output: Var,
    pub params: BoundParams,
}

struct Builder<'a, T: Real> {
    seed: u64,
    params: &'a mut ParamStore<T>,
    bn: &'a mut Vec<(String, BatchNormState<T>)>,
}

impl<T: Real> Builder<'_, T> {
    fn conv(&mut self, name: &str, cin: usize, cout: usize, k: usize, padding: Padding) -> Result<ConvRef> {
        let wname = format!("{name}.weight");
        let w = he_normal(&[cout, cin, k, k, k], cin * k * k * k, self.seed, &wname);
        Ok(ConvRef {
            w: self.params.add(wname, w)?,
            b: self.params.add(format!("{name}.bias"), Tensor::zeros(&[cout]))?,
            geom: ConvGeom::new([k; 3], 1, padding)?,
        })
    }

    fn bn(&mut self, name: &str, c: usize) -> Result<BnRef> {
        self.bn.push((name.to_string(), BatchNormState::new(c)));
        Ok(BnRef {
            gamma: self.params.add(format!("{name}.gamma"), Tensor::ones(&[c]))?,
            beta: self.params.add(format!("{name}.beta"), Tensor::zeros(&[c]))?,
            state: self.bn.len() - 1,
        })
    }

    fn conv_bn(&mut self, name: &str, cin: usize, cout: usize, padding: Padding) -> Result<ConvBn> {
        Ok(ConvBn {
            conv: self.conv(&format!("{name}.conv"), cin, cout, 3, padding)?,
            bn: self.bn(&format!("{name}.bn"), cout)?,
        })
    }

    fn stage(&mut self, name: &str, cin: usize, c: usize, residual: usize, padding: Padding) -> Result<Stage> {
        let convs = [
            self.conv_bn(&format!("{name}.block1"), cin, c, padding)?,
            self.conv_bn(&format!("{name}.block2"), c, c, padding)?,
        ];
        let residual = (0..residual)
            .map(|r| {
                Ok(ResidualBlock {
                    first: self.conv_bn(&format!("{name}.res{r}.a"), c, c, Padding::Same)?,
                    second: self.conv_bn(&format!("{name}.res{r}.b"), c, c, Padding::Same)?,
                })
            })
            .collect::<Result<_>>()?;
        Ok(Stage { convs, residual })
    }
}

/// Builds a model with deterministic, name-keyed initial parameters:
/// He-normal conv weights, zero biases, unit batchnorm scale.
pub fn build_model<T: Real>(config: &ModelConfig, seed: u64) -> Result<Model<T>> {
    let plan = config.plan()?;
    let mut params = ParamStore::new();
    let mut bn = Vec::new();
    let mut b = Builder {
        seed,
        params: &mut params,
        bn: &mut bn,
    };
    let (pad, res) = (config.padding, config.residual_blocks_per_level);
    let mut encoder = Vec::new();
    let mut cin = 1;
    for level in 0..config.depth {
        let c = config.channels(level);
        encoder.push(b.stage(&format!("enc{level}"), cin, c, res, pad)?);
        cin = c;
    }
    let mut ups = Vec::new();
    let mut decoder = Vec::new();
    for level in (0..config.depth - 1).rev() {
        let (below, c) = (config.channels(level + 1), config.channels(level));
        let wname = format!("up{level}.weight");
        let w = he_normal(&[below, c, 2, 2, 2], below * 8, seed, &wname);
        ups.push((b.params.add(wname, w)?, b.params.add(format!("up{level}.bias"), Tensor::zeros(&[c]))?));
        decoder.push(b.stage(&format!("dec{level}"), 2 * c, c, res, pad)?);
    }
    let head = b.conv("head", config.channels(0), 1, 1, Padding::Same)?;
    Ok(Model {
        config: config.clone(),
        plan,
        params,
        bn,
        arch: Arch {
            encoder,
            ups,
            decoder,
            head,
        },
    })
}

fn conv_bn<T: Real>(
    tape: &mut Tape<T>,
    p: &BoundParams,
    bn: &mut [(String, BatchNormState<T>)],
    l: &ConvBn,
    x: Var,
    mode: Mode,
) -> Result<Var> {
    let y = tape.conv3d(x, p.var(l.conv.w), Some(p.var(l.conv.b)), l.conv.geom)?;
    tape.batchnorm3d(y, p.var(l.bn.gamma), p.var(l.bn.beta), &mut bn[l.bn.state].1, mode)
}

fn stage<T: Real>(
    tape: &mut Tape<T>,
    p: &BoundParams,
    bn: &mut [(String, BatchNormState<T>)],
    s: &Stage,
    mut x: Var,
    mode: Mode,
) -> Result<Var> {
    for l in &s.convs {
        let y = conv_bn(tape, p, bn, l, x, mode)?;
        x = tape.relu(y);
    }
    for r in &s.residual {
        x = residual_block(tape, p, bn, r, x, mode)?;
    }
    Ok(x)
}

fn residual_block<T: Real>(
    tape: &mut Tape<T>,
    p: &BoundParams,
    bn: &mut [(String, BatchNormState<T>)],
    r: &ResidualBlock,
    x: Var,
    mode: Mode,
) -> Result<Var> {
    let a = conv_bn(tape, p, bn, &r.first, x, mode)?;
    let a = tape.relu(a);
    let b = conv_bn(tape, p, bn, &r.second, a, mode)?;
    let sum = tape.add(b, x)?;
    Ok(tape.relu(sum))
}

impl<T: Real> Model<T> {
    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn plan(&self) -> ShapePlan {
        self.plan
    }

    pub fn params(&self) -> &ParamStore<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.params
    }

    pub fn batchnorm_states(&self) -> &[(String, BatchNormState<T>)] {
        &self.bn
    }

    pub fn batchnorm_states_mut(&mut self) -> &mut [(String, BatchNormState<T>)] {
        &mut self.bn
    }

    /// Total scalar parameters, batchnorm affine terms included.
    pub fn parameter_count(&self) -> usize {
        self.params.scalar_count()
    }

    /// Expected input tensor shape for a batch of `n`: `[n, 1, Z, H, W]`.
    pub fn input_dims(&self, n: usize) -> [usize; 5] {
        let [w, h, z] = self.config.input_shape;
        [n, 1, z, h, w]
    }

    pub fn output_dims(&self, n: usize) -> [usize; 5] {
        let [w, h, z] = self.plan.output_shape;
        [n, 1, z, h, w]
    }

    /// Runs the network on `input` (`[N, 1, Z, H, W]`) and returns the
    /// probability map. Train mode updates batchnorm running statistics.
    pub fn forward(&mut self, tape: &mut Tape<T>, input: Var, mode: Mode) -> Result<Forward> {
        self.forward_with(tape, input, mode, true)
    }

    pub fn forward_with(&mut self, tape: &mut Tape<T>, input: Var, mode: Mode, grad: bool) -> Result<Forward> {
        let shape = tape.value(input).shape().to_vec();
        let n = shape.first().copied().unwrap_or(0);
        if shape.len() != 5 || shape[1..] != self.input_dims(n)[1..] {
            return Err(shape_err!(
                "model expects input [N, 1, {}, {}, {}], got {shape:?}",
                self.config.input_shape[2],
                self.config.input_shape[1],
                self.config.input_shape[0]
            ));
        }
        let p = self.params.bind(tape, grad);
        let bn = &mut self.bn;
        let arch = &self.arch;
        let (zb, za) = self.plan.z_pad;
        let mut x = if zb + za > 0 {
            tape.pad_z_reflect(input, zb, za)?
        } else {
            input
        };
        let mut skips = Vec::new();
        for (level, s) in arch.encoder.iter().enumerate() {
            x = stage(tape, &p, bn, s, x, mode)?;
            if level + 1 < arch.encoder.len() {
                skips.push(x);
                x = tape.maxpool3d(x)?;
            }
        }
        for ((w, b), s) in arch.ups.iter().zip(&arch.decoder) {
            x = tape.conv_transpose3d(x, p.var(*w), Some(p.var(*b)))?;
            let mut skip = skips.pop().expect("one skip per decoder level");
            let [_, _, d, h, wd] = tape.value(x).dims5()?;
            let [_, _, sd, sh, sw] = tape.value(skip).dims5()?;
            if (sd, sh, sw) != (d, h, wd) {
                let off = [(sd - d) / 2, (sh - h) / 2, (sw - wd) / 2];
                skip = tape.crop(skip, off, [d, h, wd])?;
            }
            x = tape.concat(skip, x)?;
            x = stage(tape, &p, bn, s, x, mode)?;
        }
        let head = &arch.head;
        x = tape.conv3d(x, p.var(head.w), Some(p.var(head.b)), head.geom)?;
        if zb + za > 0 {
            let [_, _, _, h, wd] = tape.value(x).dims5()?;
            x = tape.crop(x, [zb, 0, 0], [self.config.input_shape[2], h, wd])?;
        }
        let output = tape.sigmoid(x);
        Ok(Forward { output, params: p })
    }

    /// Eval-mode probability map for `input`, without recording gradients.
    pub fn predict(&mut self, input: &Tensor<T>) -> Result<Tensor<T>> {
        let mut tape = Tape::new();
        let x = tape.constant(input.clone());
        let out = self.forward_with(&mut tape, x, Mode::Eval, false)?.output;
        Ok(tape.value(out).clone())
    }

    /// Zeroes every residual-block conv and the second batchnorm scale of
    /// each block, turning every block into `relu(x)`.
    pub fn zero_residual_blocks(&mut self) {
        let blocks: Vec<ResidualBlock> = self
            .arch
            .encoder
            .iter()
            .chain(&self.arch.decoder)
            .flat_map(|s| s.residual.iter().cloned())
            .collect();
        for r in blocks {
            for idx in [r.first.conv.w, r.first.conv.b, r.second.conv.w, r.second.conv.b, r.second.bn.gamma] {
                self.params.at_mut(idx).value.data_mut().iter_mut().for_each(|v| *v = T::zero());
            }
        }
    }

    /// Same model at another precision.
    pub fn cast<U: Real>(&self) -> Model<U> {
        Model {
            config: self.config.clone(),
            plan: self.plan,
            params: self.params.cast(),
            bn: self.bn.iter().map(|(n, s)| (n.clone(), s.cast())).collect(),
            arch: self.arch.clone(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zeroed_residual_block_is_relu() {
        let mut params = ParamStore::<f64>::new();
        let mut bn = Vec::new();
        let mut b = Builder {
            seed: 5,
            params: &mut params,
            bn: &mut bn,
        };
        let block = ResidualBlock {
            first: b.conv_bn("r.a", 3, 3, Padding::Same).unwrap(),
            second: b.conv_bn("r.b", 3, 3, Padding::Same).unwrap(),
        };
        for idx in [block.first.conv.w, block.first.conv.b, block.second.conv.w, block.second.conv.b, block.second.bn.gamma] {
            params.at_mut(idx).value.data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
        let input = Tensor::from_fn(&[2, 3, 4, 5, 3], |i| ((i * 37 % 23) as f64 - 11.0) / 7.0);
        for mode in [Mode::Train, Mode::Eval] {
            let mut tape = Tape::new();
            let p = params.bind(&mut tape, false);
            let x = tape.constant(input.clone());
            let y = residual_block(&mut tape, &p, &mut bn, &block, x, mode).unwrap();
            assert_eq!(tape.value(y), &input.map(|v| v.max(0.0)), "{mode:?}");
        }
    }

    #[test]
    fn full_size_plans() {
        assert_eq!(ModelConfig::m3(16).plan().unwrap().output_shape, [128, 128, 49]);
        assert_eq!(ModelConfig::m3(16).plan().unwrap().z_pad, (1, 2));
        assert_eq!(ModelConfig::m1(16).plan().unwrap().output_shape, [44, 44, 28]);
    }

    #[test]
    fn indivisible_axis_named() {
        let msg = ModelConfig::m2(4).with_input([30, 32, 17]).plan().unwrap_err().to_string();
        assert!(msg.contains("axis x"), "{msg}");
        let msg = ModelConfig::m2(4).with_input([32, 34, 17]).plan().unwrap_err().to_string();
        assert!(msg.contains("axis y"), "{msg}");
    }
}
